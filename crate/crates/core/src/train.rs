//! Training loop, inference and dataset-level evaluation.
//!
//! Parallelism is across independent per-sample graphs; gradients are
//! averaged in sample order, so a fixed (config, seed) reproduces the loss
//! curve bit-for-bit regardless of thread count. Random streams derive from
//! the master seed at fixed offsets: +0x1000 parameter init, +0x2000 batch
//! order.

use crate::config::{ConfigError, RunConfig};
use crate::data::{DataError, Dataset};
use crate::geometry::GeometryError;
use crate::io::{self, IoError};
use crate::lane::Lane3D;
use crate::loss::{downsample_seg, match_lanes, total_loss, LossError, LossValues};
use crate::metrics::{MetricConfig, MetricsAccumulator, MetricsReport};
use crate::model::{LaneModel, ModelInput};
use crate::nn::{cosine_lr, AdamW, Module, ParamTape};
use ndarray::ArrayD;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite loss at step {step}; last-good checkpoint written")]
    Numerical { step: usize },
    #[error("dataset provides no (past, current) frame pairs at gap {gap}")]
    EmptyDataset { gap: usize },
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossValues,
}

/// Final manifest summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub version: String,
    pub seed: u64,
    pub deterministic: bool,
    /// Absent in deterministic mode so manifests stay bitwise reproducible.
    pub wall_clock_ms: Option<f64>,
    pub steps_run: usize,
    pub early_stopped: bool,
    pub loss_normalization: String,
    pub final_loss: f64,
    pub evals: Vec<EvalRecord>,
    pub final_metrics: Option<MetricsReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub f1: f64,
}

pub struct TrainOutcome {
    pub model: LaneModel,
    pub summary: TrainSummary,
    pub steps: Vec<StepRecord>,
}

fn sample_pass(
    model: &LaneModel,
    dataset: &Dataset,
    cfg: &RunConfig,
    scene_idx: usize,
    t: usize,
) -> Result<(LossValues, Vec<Option<ArrayD<f64>>>), TrainError> {
    let current = dataset.frame(scene_idx, t);
    let past = dataset.frame(scene_idx, t - cfg.temporal_gap);
    let input = ModelInput::from_frames(current, past);
    let tape = ParamTape::new();
    let out = model.forward(&input, &tape)?;
    let matches = match_lanes(&out.prediction, &current.lanes, &cfg.loss);
    let seg_target = downsample_seg(&current.seg, out.feature_stride);
    let breakdown = total_loss(&out.prediction, &current.lanes, &matches, &out.seg_logits, &seg_target, &cfg.loss)?;
    let values = breakdown.values();
    let grads = breakdown.total.backward();
    let per_param: Vec<Option<ArrayD<f64>>> = model
        .named_params()
        .iter()
        .map(|(_, p)| tape.grad_of(p, &grads))
        .collect();
    Ok((values, per_param))
}

/// Trains a fresh model on `dataset`. When `out_dir` is given, writes
/// `steps.jsonl`, `summary.json` and checkpoints there.
pub fn train(cfg: &RunConfig, dataset: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let ids = dataset.sample_ids(cfg.temporal_gap);
    if ids.is_empty() {
        return Err(TrainError::EmptyDataset { gap: cfg.temporal_gap });
    }

    let mut model = LaneModel::from_seed(cfg);
    let param_names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x2000));

    let mut order: Vec<(usize, usize)> = ids.clone();
    order.shuffle(&mut data_rng);
    let mut cursor = 0usize;

    let mut steps_log: Vec<StepRecord> = Vec::with_capacity(cfg.steps);
    let mut manifest = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| IoError::fs(dir, e))?;
            let path = dir.join("steps.jsonl");
            Some(std::io::BufWriter::new(
                std::fs::File::create(&path).map_err(|e| IoError::fs(&path, e))?,
            ))
        }
        None => None,
    };

    let mut evals: Vec<EvalRecord> = Vec::new();
    let mut early_stopped = false;
    let mut steps_run = 0usize;
    let mut final_loss = f64::NAN;

    for step in 0..cfg.steps {
        // draw one batch, reshuffling at epoch boundaries
        let mut batch: Vec<(usize, usize)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut data_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let results: Vec<Result<(LossValues, Vec<Option<ArrayD<f64>>>), TrainError>> = batch
            .par_iter()
            .map(|&(si, t)| sample_pass(&model, dataset, cfg, si, t))
            .collect();

        // deterministic reduction in batch order
        let mut sum_losses = LossValues { l_vis: 0.0, l_x: 0.0, l_z: 0.0, l_cate: 0.0, l_seg: 0.0, total: 0.0 };
        let mut grad_acc: HashMap<usize, ArrayD<f64>> = HashMap::new();
        for r in results {
            let (values, grads) = r?;
            sum_losses.l_vis += values.l_vis;
            sum_losses.l_x += values.l_x;
            sum_losses.l_z += values.l_z;
            sum_losses.l_cate += values.l_cate;
            sum_losses.l_seg += values.l_seg;
            sum_losses.total += values.total;
            for (i, g) in grads.into_iter().enumerate() {
                if let Some(g) = g {
                    match grad_acc.entry(i) {
                        std::collections::hash_map::Entry::Occupied(mut e) => *e.get_mut() += &g,
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(g);
                        }
                    }
                }
            }
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        let losses = LossValues {
            l_vis: sum_losses.l_vis * inv_b,
            l_x: sum_losses.l_x * inv_b,
            l_z: sum_losses.l_z * inv_b,
            l_cate: sum_losses.l_cate * inv_b,
            l_seg: sum_losses.l_seg * inv_b,
            total: sum_losses.total * inv_b,
        };

        if !losses.total.is_finite() {
            if let Some(dir) = out_dir {
                io::save_checkpoint(&dir.join("checkpoint_lastgood.ckpt"), &model.export_params())?;
            }
            return Err(TrainError::Numerical { step });
        }

        let lr = match cfg.lr_schedule.as_str() {
            "cosine" => cosine_lr(cfg.learning_rate, step, cfg.steps),
            _ => cfg.learning_rate,
        };
        {
            let mut params = Vec::new();
            model.visit_params_mut("", &mut params);
            let mut items: Vec<(String, &mut crate::nn::Param, ArrayD<f64>)> = Vec::with_capacity(params.len());
            for (i, (name, p)) in params.into_iter().enumerate() {
                let g = grad_acc
                    .remove(&i)
                    .map(|g| g.mapv(|v| v * inv_b))
                    .unwrap_or_else(|| ArrayD::zeros(p.value().raw_dim()));
                items.push((name, p, g));
            }
            opt.step(&mut items, lr);
        }

        let record = StepRecord { step, lr, losses };
        if let Some(w) = manifest.as_mut() {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(w, "{line}").map_err(|e| IoError::fs(Path::new("steps.jsonl"), e))?;
        }
        final_loss = losses.total;
        steps_log.push(record);
        steps_run = step + 1;

        let _ = &param_names;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_interval > 0 && (step + 1) % cfg.checkpoint_interval == 0 {
                io::save_checkpoint(
                    &dir.join(format!("checkpoint_step{:05}.ckpt", step + 1)),
                    &model.export_params(),
                )?;
            }
        }

        if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 {
            let relaxed = MetricConfig { dist_threshold: cfg.train_match_threshold, ..cfg.metric };
            let report = evaluate_dataset(&model, dataset, cfg, &relaxed);
            evals.push(EvalRecord { step: step + 1, f1: report.f1 });
            if let Some(th) = cfg.early_stop_f1 {
                if report.f1 >= th {
                    early_stopped = true;
                    break;
                }
            }
        }
    }

    // final relaxed-threshold evaluation on the training set
    let relaxed = MetricConfig { dist_threshold: cfg.train_match_threshold, ..cfg.metric };
    let final_metrics = evaluate_dataset(&model, dataset, cfg, &relaxed);

    if let Some(w) = manifest.as_mut() {
        w.flush().map_err(|e| IoError::fs(Path::new("steps.jsonl"), e))?;
    }

    let summary = TrainSummary {
        config_hash: cfg.content_hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        deterministic: cfg.deterministic,
        wall_clock_ms: if cfg.deterministic {
            None
        } else {
            Some(start.elapsed().as_secs_f64() * 1000.0)
        },
        steps_run,
        early_stopped,
        loss_normalization: "per-visible-point-then-per-pair".to_string(),
        final_loss,
        evals,
        final_metrics: Some(final_metrics),
    };

    if let Some(dir) = out_dir {
        io::save_checkpoint(&dir.join("checkpoint_final.ckpt"), &model.export_params())?;
        io::save_json(&dir.join("summary.json"), 1, &summary)?;
    }

    Ok(TrainOutcome { model, summary, steps: steps_log })
}

/// Runs the model on one (past, current) pair and returns thresholded lanes.
pub fn predict_frame(
    model: &LaneModel,
    dataset: &Dataset,
    scene_idx: usize,
    t: usize,
    cfg: &RunConfig,
) -> Result<Vec<Lane3D>, TrainError> {
    let input = ModelInput::from_frames(dataset.frame(scene_idx, t), dataset.frame(scene_idx, t - cfg.temporal_gap));
    let out = model.forward(&input, &ParamTape::new())?;
    Ok(out.prediction.to_lanes(cfg.vis_threshold))
}

/// Evaluates every frame with a valid past companion; per-frame work is
/// parallel, the reduction is ordered.
pub fn evaluate_dataset(model: &LaneModel, dataset: &Dataset, cfg: &RunConfig, metric: &MetricConfig) -> MetricsReport {
    let ids = dataset.sample_ids(cfg.temporal_gap);
    let partials: Vec<MetricsAccumulator> = ids
        .par_iter()
        .map(|&(si, t)| {
            let mut acc = MetricsAccumulator::default();
            match predict_frame(model, dataset, si, t, cfg) {
                Ok(preds) => {
                    let gts = &dataset.frame(si, t).lanes;
                    let visible: Vec<Lane3D> =
                        gts.iter().filter(|l| l.visible_count() > 0).cloned().collect();
                    acc.add_frame(&preds, &visible, metric);
                }
                Err(e) => log::warn!("inference failed on scene {si} frame {t}: {e}"),
            }
            acc
        })
        .collect();
    let mut total = MetricsAccumulator::default();
    for p in &partials {
        total.merge(p);
    }
    total.finalize(None)
}
