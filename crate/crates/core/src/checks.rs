//! The `gradcheck` command: float64 central-difference verification of the
//! four differentiable subsystems on tiny shapes, reported per parameter and
//! per input.

use crate::autodiff::Tensor;
use crate::backbone::FeatureMap;
use crate::decoder::{DecoderConfig, LaneDecoder, LanePrediction};
use crate::geometry::{CameraRig, Intrinsics, Pose};
use crate::gradcheck::{check_module, check_named_fn, CheckEntry, ModuleReport, DEFAULT_TOLERANCE};
use crate::lane::Lane3D;
use crate::loss::{total_loss, LossWeights, MatchResult};
use crate::nn::{Linear, Module, ParamTape};
use crate::sim::cam_to_ego;
use crate::tgem::{DepthHypotheses, Tgem};
use crate::tiqg::{CropConfig, QuerySet, QueryTag, Tiqg, TiqgConfig};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

fn rig(x: f64, y: f64) -> CameraRig {
    CameraRig {
        intrinsics: Intrinsics::new(12.0, 12.0, 5.5, 3.5, 12, 8),
        cam_to_ego: cam_to_ego(1.5),
        ego_to_world: Pose::from_translation([x, y, 0.0]),
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-scale..scale))
}

fn tgem_report() -> ModuleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let hyp = DepthHypotheses::new(vec![4.0, 9.0]);
    let tgem = Tgem::new(4, hyp, 10.0, true, &mut rng);
    let rig_t = rig(0.4, 0.6);
    let rig_p = rig(0.0, 0.0);
    let f_t0 = randn(&[4, 3, 4], &mut rng, 1.0);
    let f_p0 = randn(&[4, 3, 4], &mut rng, 1.0);

    let mut entries = check_module(&tgem.named_params(), DEFAULT_TOLERANCE, |tape| {
        let f_t = FeatureMap { values: Tensor::constant(f_t0.clone()), stride: 4 };
        let f_p = FeatureMap { values: Tensor::constant(f_p0.clone()), stride: 4 };
        tgem.forward(&f_t, &f_p, &rig_t, &rig_p, tape).values.pow_scalar(2.0).sum_all()
    });
    let inputs = vec![
        ("input.features_t".to_string(), f_t0.clone()),
        ("input.features_past".to_string(), f_p0.clone()),
    ];
    entries.extend(check_named_fn(&inputs, DEFAULT_TOLERANCE, |leaves| {
        let tape = ParamTape::new();
        let f_t = FeatureMap { values: leaves[0].clone(), stride: 4 };
        let f_p = FeatureMap { values: leaves[1].clone(), stride: 4 };
        tgem.forward(&f_t, &f_p, &rig_t, &rig_p, &tape).values.pow_scalar(2.0).sum_all()
    }));
    ModuleReport::from_entries("tgem", entries)
}

fn tiqg_report() -> ModuleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let tiqg = Tiqg::new(
        &TiqgConfig {
            feature_channels: 4,
            instances: 2,
            points: 3,
            dim: 8,
            heads: 2,
            ffn_dim: 12,
            fuse_hidden: 16,
            crop: CropConfig::default_future(),
            use_temporal: true,
        },
        &mut rng,
    );
    let enc = crate::backbone::Encoder::new(
        &crate::backbone::EncoderConfig { in_channels: 3, channels: vec![4], strides: vec![2] },
        &mut rng,
    );
    let img = Array3::from_shape_fn((3, 8, 12), |_| rng.gen_range(0.0..1.0));
    let rig_t = rig(0.0, 0.0);
    let f_t0 = randn(&[4, 4, 6], &mut rng, 1.0);
    let f_p0 = randn(&[4, 4, 6], &mut rng, 1.0);

    let mut params = tiqg.named_params();
    params.extend(enc.named_params().into_iter().map(|(n, p)| (format!("encoder.{n}"), p)));
    let mut entries = check_module(&params, DEFAULT_TOLERANCE, |tape| {
        let f_t = FeatureMap { values: Tensor::constant(f_t0.clone()), stride: 2 };
        let f_p = FeatureMap { values: Tensor::constant(f_p0.clone()), stride: 2 };
        tiqg.forward(&f_t, &f_p, &img, &rig_t, &enc, tape)
            .unwrap()
            .values
            .pow_scalar(2.0)
            .sum_all()
    });
    let inputs = vec![
        ("input.features_t".to_string(), f_t0.clone()),
        ("input.features_past".to_string(), f_p0.clone()),
    ];
    entries.extend(check_named_fn(&inputs, DEFAULT_TOLERANCE, |leaves| {
        let tape = ParamTape::new();
        let f_t = FeatureMap { values: leaves[0].clone(), stride: 2 };
        let f_p = FeatureMap { values: leaves[1].clone(), stride: 2 };
        tiqg.forward(&f_t, &f_p, &img, &rig_t, &enc, &tape)
            .unwrap()
            .values
            .pow_scalar(2.0)
            .sum_all()
    }));
    ModuleReport::from_entries("tiqg", entries)
}

fn decoder_report() -> ModuleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut dec = LaneDecoder::new(
        &DecoderConfig {
            dim: 8,
            feature_channels: 5,
            layers: 2,
            offsets: 3,
            ffn_dim: 12,
            num_categories: 3,
            y_grid: crate::lane::y_grid(3.0, 43.0, 4),
        },
        &mut rng,
    );
    // enable the residual paths so every branch carries gradient
    for layer in &mut dec.layers {
        layer.out_proj = Linear::new(8, 8, &mut rng);
        layer.ff.w2 = Linear::new(12, 8, &mut rng);
        layer.refine = Linear::new(8, 2, &mut rng);
        layer.refine.weight.set_value(layer.refine.weight.value().mapv(|v| v * 0.05));
    }
    let fmap_rig = CameraRig {
        intrinsics: Intrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24),
        cam_to_ego: cam_to_ego(1.5),
        ego_to_world: Pose::identity(),
    };
    let q0 = randn(&[2, 4, 8], &mut rng, 0.5);
    let f0 = randn(&[5, 6, 8], &mut rng, 1.0);

    let loss_of = |p: &LanePrediction| {
        p.x.pow_scalar(2.0)
            .sum_all()
            .add(&p.z.pow_scalar(2.0).sum_all())
            .add(&p.vis_logits.sigmoid().sum_all())
            .add(&p.cat_logits.log_softmax(1).sum_all().mul_scalar(-0.1))
    };
    let mut entries = check_module(&dec.named_params(), DEFAULT_TOLERANCE, |tape| {
        let q = QuerySet { values: Tensor::constant(q0.clone()), tag: QueryTag::Fused };
        let f = FeatureMap { values: Tensor::constant(f0.clone()), stride: 4 };
        loss_of(&dec.forward(&q, &f, &fmap_rig, tape))
    });
    let inputs = vec![("input.queries".to_string(), q0.clone()), ("input.features".to_string(), f0.clone())];
    entries.extend(check_named_fn(&inputs, DEFAULT_TOLERANCE, |leaves| {
        let tape = ParamTape::new();
        let q = QuerySet { values: leaves[0].clone(), tag: QueryTag::Fused };
        let f = FeatureMap { values: leaves[1].clone(), stride: 4 };
        loss_of(&dec.forward(&q, &f, &fmap_rig, &tape))
    }));
    ModuleReport::from_entries("lane_decoder", entries)
}

fn losses_report() -> ModuleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let grid = crate::lane::y_grid(3.0, 43.0, 4);
    let gts = vec![
        Lane3D {
            xs: vec![1.0, 1.1, 1.2, 1.3],
            ys: grid.clone(),
            zs: vec![0.1; 4],
            visibility: vec![true, true, true, false],
            category: 0,
        },
        Lane3D {
            xs: vec![-2.0; 4],
            ys: grid.clone(),
            zs: vec![0.0; 4],
            visibility: vec![true; 4],
            category: 2,
        },
    ];
    // frozen matching: the assignment itself is not differentiable
    let matches = MatchResult { pairs: vec![(0, 0), (1, 1)], unmatched_preds: vec![2] };
    let w = LossWeights::default();
    let seg_target = ArrayD::from_shape_fn(IxDyn(&[1, 2, 2]), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
    let grid = Arc::new(grid);

    let inputs = vec![
        ("input.x".to_string(), randn(&[3, 4], &mut rng, 3.0)),
        ("input.z".to_string(), randn(&[3, 4], &mut rng, 0.5)),
        ("input.vis_logits".to_string(), randn(&[3, 4], &mut rng, 1.0)),
        ("input.cat_logits".to_string(), randn(&[3, 4], &mut rng, 1.0)),
        ("input.seg_logits".to_string(), randn(&[1, 2, 2], &mut rng, 1.0)),
    ];
    let entries: Vec<CheckEntry> = check_named_fn(&inputs, DEFAULT_TOLERANCE, |leaves| {
        let pred = LanePrediction {
            x: leaves[0].clone(),
            z: leaves[1].clone(),
            vis_logits: leaves[2].clone(),
            cat_logits: leaves[3].clone(),
            y_grid: grid.clone(),
        };
        total_loss(&pred, &gts, &matches, &leaves[4], &seg_target, &w).unwrap().total
    });
    ModuleReport::from_entries("losses_matching", entries)
}

/// Runs all four module checks.
pub fn run_standard_gradcheck() -> Vec<ModuleReport> {
    vec![tgem_report(), tiqg_report(), decoder_report(), losses_report()]
}
