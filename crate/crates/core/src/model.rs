//! The assembled detection pipeline: shared encoder on (current, past,
//! synthetic future) frames, geometry enhancement of the current features,
//! temporal query generation, query-refinement decoding, auxiliary
//! segmentation — with the three ablation switches wired through.

use crate::autodiff::Tensor;
use crate::backbone::{Encoder, FeatureMap, SegHead};
use crate::config::RunConfig;
use crate::decoder::{DecoderConfig, LaneDecoder, LanePrediction};
use crate::geometry::{CameraRig, GeometryError};
use crate::lane::y_grid;
use crate::nn::{join, Module, Param, ParamTape};
use crate::sim::FrameSample;
use crate::tgem::{DepthHypotheses, Tgem};
use crate::tiqg::{Tiqg, TiqgConfig};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One training/inference sample: the current frame plus its past companion.
pub struct ModelInput {
    pub image_t: Array3<f64>,
    pub image_past: Array3<f64>,
    pub rig_t: CameraRig,
    pub rig_past: CameraRig,
}

impl ModelInput {
    pub fn from_frames(current: &FrameSample, past: &FrameSample) -> Self {
        Self {
            image_t: current.image_chw(),
            image_past: past.image_chw(),
            rig_t: current.rig,
            rig_past: past.rig,
        }
    }
}

pub struct ModelOutput {
    pub prediction: LanePrediction,
    /// (1, Hf, Wf) segmentation logits on the current frame's features.
    pub seg_logits: Tensor,
    pub feature_stride: usize,
}

pub struct LaneModel {
    pub encoder: Encoder,
    pub seg_head: SegHead,
    pub tgem: Option<Tgem>,
    pub tiqg: Tiqg,
    pub decoder: LaneDecoder,
}

impl LaneModel {
    /// Builds the model from the run config; `init_rng` drives every weight
    /// draw, so (config, seed) fixes the parameters bit-for-bit.
    pub fn new(cfg: &RunConfig, init_rng: &mut ChaCha8Rng) -> Self {
        let feature_channels = cfg.encoder.out_channels();
        let encoder = Encoder::new(&cfg.encoder, init_rng);
        let seg_head = SegHead::new(feature_channels, init_rng);
        let tgem = if cfg.use_tgem {
            Some(Tgem::new(
                feature_channels,
                DepthHypotheses::inverse_depth(cfg.depth_min, cfg.depth_max, cfg.depth_bins),
                cfg.cost_fill,
                cfg.use_cost_volume,
                init_rng,
            ))
        } else {
            None
        };
        let tiqg = Tiqg::new(
            &TiqgConfig {
                feature_channels,
                instances: cfg.num_queries,
                points: cfg.num_points,
                dim: cfg.embed_dim,
                heads: cfg.attention_heads,
                ffn_dim: cfg.ffn_dim,
                fuse_hidden: cfg.fuse_hidden,
                crop: cfg.crop,
                use_temporal: cfg.use_tiqg_temporal,
            },
            init_rng,
        );
        let decoder = LaneDecoder::new(
            &DecoderConfig {
                dim: cfg.embed_dim,
                feature_channels,
                layers: cfg.decoder_layers,
                offsets: cfg.decoder_offsets,
                ffn_dim: cfg.ffn_dim,
                num_categories: cfg.num_categories,
                y_grid: y_grid(cfg.sim.y_grid_start, cfg.sim.y_grid_end, cfg.sim.y_grid_points),
            },
            init_rng,
        );
        Self { encoder, seg_head, tgem, tiqg, decoder }
    }

    pub fn from_seed(cfg: &RunConfig) -> Self {
        // init stream is the master seed at a fixed offset
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x1000));
        Self::new(cfg, &mut rng)
    }

    pub fn forward(&self, input: &ModelInput, tape: &ParamTape) -> Result<ModelOutput, GeometryError> {
        let f_t = self.encoder.forward(&Tensor::constant(input.image_t.clone().into_dyn()), tape);
        let f_past = self.encoder.forward(&Tensor::constant(input.image_past.clone().into_dyn()), tape);

        let f_ge: FeatureMap = match &self.tgem {
            Some(tgem) => tgem.forward(&f_t, &f_past, &input.rig_t, &input.rig_past, tape),
            None => f_t.clone(),
        };

        let queries = self.tiqg.forward(&f_t, &f_past, &input.image_t, &input.rig_t, &self.encoder, tape)?;
        let prediction = self.decoder.forward(&queries, &f_ge, &input.rig_t, tape);
        let seg_logits = self.seg_head.forward(&f_t, tape);
        Ok(ModelOutput { prediction, seg_logits, feature_stride: f_t.stride })
    }

    /// Copies parameter values from a checkpoint; names and shapes must
    /// match exactly.
    pub fn load_params(&mut self, entries: &[(String, ndarray::ArrayD<f64>)]) -> Result<(), String> {
        let mut params = Vec::new();
        self.visit_params_mut("", &mut params);
        if params.len() != entries.len() {
            return Err(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                params.len()
            ));
        }
        for ((name, param), (ckpt_name, value)) in params.into_iter().zip(entries) {
            if &name != ckpt_name {
                return Err(format!("parameter order mismatch: model '{name}' vs checkpoint '{ckpt_name}'"));
            }
            if param.shape() != value.shape() {
                return Err(format!(
                    "shape mismatch for '{name}': model {:?} vs checkpoint {:?}",
                    param.shape(),
                    value.shape()
                ));
            }
            param.set_value(value.clone());
        }
        Ok(())
    }

    pub fn export_params(&self) -> Vec<(String, ndarray::ArrayD<f64>)> {
        self.named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value().clone()))
            .collect()
    }
}

impl Module for LaneModel {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.encoder.visit_params(&join(prefix, "encoder"), out);
        self.seg_head.visit_params(&join(prefix, "seg_head"), out);
        if let Some(tgem) = &self.tgem {
            tgem.visit_params(&join(prefix, "tgem"), out);
        }
        self.tiqg.visit_params(&join(prefix, "tiqg"), out);
        self.decoder.visit_params(&join(prefix, "decoder"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.encoder.visit_params_mut(&join(prefix, "encoder"), out);
        self.seg_head.visit_params_mut(&join(prefix, "seg_head"), out);
        if let Some(tgem) = &mut self.tgem {
            tgem.visit_params_mut(&join(prefix, "tgem"), out);
        }
        self.tiqg.visit_params_mut(&join(prefix, "tiqg"), out);
        self.decoder.visit_params_mut(&join(prefix, "decoder"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::sim::SimConfig;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            embed_dim: 8,
            num_queries: 3,
            num_points: 6,
            num_categories: 3,
            encoder: crate::backbone::EncoderConfig {
                in_channels: 3,
                channels: vec![6, 8],
                strides: vec![2, 2],
            },
            depth_bins: 3,
            decoder_layers: 1,
            decoder_offsets: 2,
            ffn_dim: 16,
            fuse_hidden: 16,
            sim: SimConfig {
                image_width: 32,
                image_height: 24,
                frame_count: 2,
                y_grid_points: 6,
                ..SimConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn run_forward(cfg: &RunConfig) -> ModelOutput {
        let ds = Dataset::generate(&[5], &cfg.sim).unwrap();
        let input = ModelInput::from_frames(ds.frame(0, 1), ds.frame(0, 0));
        let model = LaneModel::from_seed(cfg);
        model.forward(&input, &ParamTape::new()).unwrap()
    }

    #[test]
    fn forward_shapes_match_config() {
        let cfg = tiny_cfg();
        cfg.validate().unwrap();
        let out = run_forward(&cfg);
        assert_eq!(out.prediction.x.shape(), &[3, 6]);
        assert_eq!(out.prediction.z.shape(), &[3, 6]);
        assert_eq!(out.prediction.vis_logits.shape(), &[3, 6]);
        assert_eq!(out.prediction.cat_logits.shape(), &[3, 4]);
        assert_eq!(out.seg_logits.shape(), &[1, 6, 8]);
        assert_eq!(out.feature_stride, 4);
    }

    #[test]
    fn ablation_flags_change_structure_but_keep_interfaces() {
        for (tgem, tiqg, cv) in [
            (false, true, true),
            (true, false, true),
            (true, true, false),
            (false, false, false),
        ] {
            let cfg = RunConfig {
                use_tgem: tgem,
                use_tiqg_temporal: tiqg,
                use_cost_volume: cv,
                ..tiny_cfg()
            };
            let out = run_forward(&cfg);
            assert_eq!(out.prediction.x.shape(), &[3, 6], "flags ({tgem},{tiqg},{cv})");
        }
    }

    #[test]
    fn same_seed_same_outputs() {
        let cfg = tiny_cfg();
        let a = run_forward(&cfg);
        let b = run_forward(&cfg);
        assert_eq!(a.prediction.x.values(), b.prediction.x.values());
        assert_eq!(a.seg_logits.values(), b.seg_logits.values());
    }

    #[test]
    fn checkpoint_roundtrip_restores_outputs_through_f32() {
        let cfg = tiny_cfg();
        let ds = Dataset::generate(&[5], &cfg.sim).unwrap();
        let input = ModelInput::from_frames(ds.frame(0, 1), ds.frame(0, 0));
        let model = LaneModel::from_seed(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        crate::io::save_checkpoint(&path, &model.export_params()).unwrap();

        let mut restored = LaneModel::from_seed(&RunConfig { seed: 99, ..cfg.clone() });
        let loaded = crate::io::load_checkpoint(&path).unwrap();
        restored.load_params(&loaded).unwrap();

        let a = model.forward(&input, &ParamTape::new()).unwrap();
        let b = restored.forward(&input, &ParamTape::new()).unwrap();
        // parameters pass through f32, so outputs agree to f32 precision
        for (x, y) in a.prediction.x.values().iter().zip(b.prediction.x.values().iter()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }
}
