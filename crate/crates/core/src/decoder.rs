//! Query-refinement decoder: every point-slot query owns a 3D reference
//! point (x, y_grid[n], z) in the ego frame, projects it into the
//! geometry-enhanced feature map, gathers K offset samples with softmax
//! attention weights, updates itself through residual blocks, and refines
//! (x, z). The y coordinate is never regressed.

use crate::autodiff::Tensor;
use crate::backbone::FeatureMap;
use crate::geometry::{scale_intrinsics, CameraRig};
use crate::lane::Lane3D;
use crate::nn::{join, FeedForward, LayerNorm, Linear, Module, Param, ParamTape};
use crate::tiqg::{QuerySet, QueryTag};
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// M x N reference coordinates; y is pinned to the global y-grid.
#[derive(Clone)]
pub struct ReferencePoints {
    /// (M, N) lateral offsets, meters.
    pub x: Tensor,
    /// (M, N) heights, meters.
    pub z: Tensor,
    pub y_grid: Arc<Vec<f64>>,
}

impl ReferencePoints {
    pub fn instances(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.x.shape()[1]
    }
}

/// Full per-query outputs of the detection head.
pub struct LanePrediction {
    /// (M, N) meters.
    pub x: Tensor,
    /// (M, N) meters.
    pub z: Tensor,
    /// (M, N) visibility logits.
    pub vis_logits: Tensor,
    /// (M, num_categories + 1); the last column is the no-object class.
    pub cat_logits: Tensor,
    pub y_grid: Arc<Vec<f64>>,
}

impl LanePrediction {
    pub fn instances(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.cat_logits.shape()[1]
    }

    /// Thresholded lane set: instances whose class argmax is not no-object,
    /// with per-point visibility `sigmoid(logit) > vis_threshold`.
    pub fn to_lanes(&self, vis_threshold: f64) -> Vec<Lane3D> {
        let m = self.instances();
        let n = self.x.shape()[1];
        let classes = self.num_classes();
        let mut out = Vec::new();
        for i in 0..m {
            let (mut best, mut best_v) = (0usize, f64::NEG_INFINITY);
            for c in 0..classes {
                let v = self.cat_logits.values()[[i, c]];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            if best == classes - 1 {
                continue; // no-object
            }
            let mut lane = Lane3D {
                xs: Vec::with_capacity(n),
                ys: Vec::with_capacity(n),
                zs: Vec::with_capacity(n),
                visibility: Vec::with_capacity(n),
                category: best,
            };
            for p in 0..n {
                lane.xs.push(self.x.values()[[i, p]]);
                lane.ys.push(self.y_grid[p]);
                lane.zs.push(self.z.values()[[i, p]]);
                let logit = self.vis_logits.values()[[i, p]];
                lane.visibility.push(sigmoid(logit) > vis_threshold);
            }
            out.push(lane);
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Projects per-token ego-frame reference points into feature-map pixels.
/// Points at or behind the camera plane are masked; their coordinates are
/// placed outside the map so they sample zeros.
fn project_references(
    ref_x: &Tensor,
    ref_z: &Tensor,
    y_grid: &[f64],
    rig: &CameraRig,
    feature: &FeatureMap,
) -> (Tensor, Arc<Vec<bool>>) {
    let (m, n) = (ref_x.shape()[0], ref_x.shape()[1]);
    let p = m * n;
    let x = ref_x.reshape(&[p]);
    let z = ref_z.reshape(&[p]);
    let y_vals: Vec<f64> = (0..p).map(|i| y_grid[i % n]).collect();
    let y = Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[p]), y_vals).unwrap());

    // ego -> camera: X_cam = R^T (X_ego - t)
    let inv = rig.cam_to_ego.invert();
    let r = inv.rotation;
    let t = inv.translation;
    let lin = |cx: f64, cy: f64, cz: f64, add: f64| -> Tensor {
        x.mul_scalar(cx)
            .add(&y.mul_scalar(cy))
            .add(&z.mul_scalar(cz))
            .add_scalar(add)
    };
    let x_cam = lin(r[0][0], r[0][1], r[0][2], t[0]);
    let y_cam = lin(r[1][0], r[1][1], r[1][2], t[1]);
    let z_cam = lin(r[2][0], r[2][1], r[2][2], t[2]);

    // mask points too close to / behind the camera plane (constant w.r.t.
    // the graph; the projection is smooth on the valid set)
    let mask: Vec<bool> = z_cam.values().iter().map(|v| *v > 0.1).collect();
    let mask_vals: Vec<f64> = mask.iter().map(|m| if *m { 1.0 } else { 0.0 }).collect();
    let mask_t = Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[p]), mask_vals.clone()).unwrap());
    let inv_mask = mask_t.neg().add_scalar(1.0);
    // guarded depth: 1.0 where invalid so the division stays finite
    let z_guard = z_cam.mul(&mask_t).add(&inv_mask);

    let s = 1.0 / feature.stride as f64;
    let k = scale_intrinsics(&rig.intrinsics, s, s, (feature.width(), feature.height()));
    let far = -1e6; // parks invalid points far outside the map
    let u = x_cam
        .div(&z_guard)
        .mul_scalar(k.fx)
        .add_scalar(k.cx)
        .mul(&mask_t)
        .add(&inv_mask.mul_scalar(far));
    let v = y_cam
        .div(&z_guard)
        .mul_scalar(k.fy)
        .add_scalar(k.cy)
        .mul(&mask_t)
        .add(&inv_mask.mul_scalar(far));
    let coords = Tensor::concat(&[u.reshape(&[p, 1]), v.reshape(&[p, 1])], 1);
    (coords, Arc::new(mask))
}

/// One refinement layer.
pub struct DecoderLayer {
    pub offset_head: Linear,
    pub weight_head: Linear,
    pub value_proj: Linear,
    pub out_proj: Linear,
    pub ln: LayerNorm,
    pub ff: FeedForward,
    pub refine: Linear,
    offsets: usize,
}

impl DecoderLayer {
    pub fn new(dim: usize, feature_channels: usize, offsets: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            offset_head: Linear::new(dim, offsets * 2, rng),
            weight_head: Linear::new(dim, offsets, rng),
            value_proj: Linear::new(feature_channels, dim, rng),
            out_proj: Linear::zeroed(dim, dim),
            ln: LayerNorm::new(dim),
            ff: FeedForward::new(dim, ffn_dim, rng),
            refine: Linear::zeroed(dim, 2),
            offsets,
        }
    }

    /// Zeroes the sampling-offset and value-projection heads (used to verify
    /// the residual-identity property).
    pub fn zero_sampling_paths(&mut self) {
        let k = self.offsets;
        let d = self.out_proj.weight.shape()[0];
        let c = self.value_proj.weight.shape()[1];
        self.offset_head = Linear::zeroed(d, k * 2);
        self.value_proj = Linear::zeroed(c, d);
    }

    pub fn forward(
        &self,
        q: &QuerySet,
        f_ge: &FeatureMap,
        refs: &ReferencePoints,
        rig: &CameraRig,
        tape: &ParamTape,
    ) -> (QuerySet, ReferencePoints) {
        let (m, n, d) = (q.instances(), q.points(), q.dim());
        let p = m * n;
        let k = self.offsets;
        let tokens = q.tokens();

        let (base, mask) = project_references(&refs.x, &refs.z, &refs.y_grid, rig, f_ge);
        let offsets = self.offset_head.forward(&tokens, tape).reshape(&[p, k, 2]);
        let weights = self.weight_head.forward(&tokens, tape).softmax(1); // (P, K)

        let coords = base
            .reshape(&[p, 1, 2])
            .expand(&[p, k, 2])
            .add(&offsets)
            .reshape(&[p * k, 2]);
        let mask_k: Vec<bool> = (0..p * k).map(|i| mask[i / k]).collect();
        let samples = f_ge.values.grid_sample(&coords, Arc::new(mask_k)); // (P*K, C)
        let values = self.value_proj.forward(&samples, tape).reshape(&[p, k, d]);
        let mixed = values
            .mul(&weights.reshape(&[p, k, 1]).expand(&[p, k, d]))
            .sum_axis(1); // (P, d)

        let h = tokens.add(&self.out_proj.forward(&mixed, tape));
        let h = h.add(&self.ff.forward(&self.ln.forward(&h, tape), tape));

        let delta = self.refine.forward(&h, tape); // (P, 2)
        let new_x = refs.x.add(&delta.slice_axis(1, 0, 1).reshape(&[m, n]));
        let new_z = refs.z.add(&delta.slice_axis(1, 1, 1).reshape(&[m, n]));

        (
            QuerySet { values: h.reshape(&[m, n, d]), tag: q.tag },
            ReferencePoints { x: new_x, z: new_z, y_grid: refs.y_grid.clone() },
        )
    }
}

impl Module for DecoderLayer {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.offset_head.visit_params(&join(prefix, "offset_head"), out);
        self.weight_head.visit_params(&join(prefix, "weight_head"), out);
        self.value_proj.visit_params(&join(prefix, "value_proj"), out);
        self.out_proj.visit_params(&join(prefix, "out_proj"), out);
        self.ln.visit_params(&join(prefix, "ln"), out);
        self.ff.visit_params(&join(prefix, "ff"), out);
        self.refine.visit_params(&join(prefix, "refine"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.offset_head.visit_params_mut(&join(prefix, "offset_head"), out);
        self.weight_head.visit_params_mut(&join(prefix, "weight_head"), out);
        self.value_proj.visit_params_mut(&join(prefix, "value_proj"), out);
        self.out_proj.visit_params_mut(&join(prefix, "out_proj"), out);
        self.ln.visit_params_mut(&join(prefix, "ln"), out);
        self.ff.visit_params_mut(&join(prefix, "ff"), out);
        self.refine.visit_params_mut(&join(prefix, "refine"), out);
    }
}

/// Final read-out: x/z from the last reference points plus a zero-initialized
/// linear correction, per-point visibility logits, and per-instance category
/// logits pooled with soft visibility weights.
pub struct PredictionHead {
    xz_correction: Linear,
    vis: Linear,
    cat: Linear,
}

impl PredictionHead {
    pub fn new(dim: usize, num_categories: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            xz_correction: Linear::zeroed(dim, 2),
            vis: Linear::new(dim, 1, rng),
            cat: Linear::new(dim, num_categories + 1, rng),
        }
    }

    pub fn zeroed(dim: usize, num_categories: usize) -> Self {
        Self {
            xz_correction: Linear::zeroed(dim, 2),
            vis: Linear::zeroed(dim, 1),
            cat: Linear::zeroed(dim, num_categories + 1),
        }
    }

    pub fn forward(&self, q: &QuerySet, refs: &ReferencePoints, tape: &ParamTape) -> LanePrediction {
        let (m, n, _) = (q.instances(), q.points(), q.dim());
        let tokens = q.tokens();
        let corr = self.xz_correction.forward(&tokens, tape);
        let x = refs.x.add(&corr.slice_axis(1, 0, 1).reshape(&[m, n]));
        let z = refs.z.add(&corr.slice_axis(1, 1, 1).reshape(&[m, n]));
        let vis_logits = self.vis.forward(&tokens, tape).reshape(&[m, n]);

        // soft visibility-weighted mean over point slots
        let w = vis_logits.sigmoid();
        let wsum = w.sum_axis(1).add_scalar(1e-9); // (M,)
        let weighted = q
            .values
            .mul(&w.reshape(&[m, n, 1]).expand(q.values.shape()))
            .sum_axis(1); // (M, d)
        let pooled = weighted.div(&wsum.reshape(&[m, 1]).expand(weighted.shape()));
        let cat_logits = self.cat.forward(&pooled, tape);

        LanePrediction { x, z, vis_logits, cat_logits, y_grid: refs.y_grid.clone() }
    }
}

impl Module for PredictionHead {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.xz_correction.visit_params(&join(prefix, "xz_correction"), out);
        self.vis.visit_params(&join(prefix, "vis"), out);
        self.cat.visit_params(&join(prefix, "cat"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.xz_correction.visit_params_mut(&join(prefix, "xz_correction"), out);
        self.vis.visit_params_mut(&join(prefix, "vis"), out);
        self.cat.visit_params_mut(&join(prefix, "cat"), out);
    }
}

/// The stacked decoder: reference initialization, L refinement layers, head.
pub struct LaneDecoder {
    pub init_head: Linear,
    pub layers: Vec<DecoderLayer>,
    pub head: PredictionHead,
    pub y_grid: Arc<Vec<f64>>,
}

pub struct DecoderConfig {
    pub dim: usize,
    pub feature_channels: usize,
    pub layers: usize,
    pub offsets: usize,
    pub ffn_dim: usize,
    pub num_categories: usize,
    pub y_grid: Vec<f64>,
}

impl LaneDecoder {
    pub fn new(cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            init_head: Linear::zeroed(cfg.dim, 2),
            layers: (0..cfg.layers)
                .map(|_| DecoderLayer::new(cfg.dim, cfg.feature_channels, cfg.offsets, cfg.ffn_dim, rng))
                .collect(),
            head: PredictionHead::new(cfg.dim, cfg.num_categories, rng),
            y_grid: Arc::new(cfg.y_grid.clone()),
        }
    }

    /// x, z predicted per point slot by a small head; zero-initialized, so
    /// fresh models start from a straight centered lane prior.
    pub fn init_reference_points(&self, q: &QuerySet, tape: &ParamTape) -> ReferencePoints {
        let (m, n) = (q.instances(), q.points());
        let xz = self.init_head.forward(&q.tokens(), tape);
        ReferencePoints {
            x: xz.slice_axis(1, 0, 1).reshape(&[m, n]),
            z: xz.slice_axis(1, 1, 1).reshape(&[m, n]),
            y_grid: self.y_grid.clone(),
        }
    }

    pub fn forward(
        &self,
        q: &QuerySet,
        f_ge: &FeatureMap,
        rig: &CameraRig,
        tape: &ParamTape,
    ) -> LanePrediction {
        let mut refs = self.init_reference_points(q, tape);
        let mut q = q.clone();
        for layer in &self.layers {
            let (q_next, refs_next) = layer.forward(&q, f_ge, &refs, rig, tape);
            q = q_next;
            refs = refs_next;
        }
        self.head.forward(&q, &refs, tape)
    }
}

impl Module for LaneDecoder {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.init_head.visit_params(&join(prefix, "init_head"), out);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&join(prefix, &format!("layer{i}")), out);
        }
        self.head.visit_params(&join(prefix, "head"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.init_head.visit_params_mut(&join(prefix, "init_head"), out);
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params_mut(&join(prefix, &format!("layer{i}")), out);
        }
        self.head.visit_params_mut(&join(prefix, "head"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};
    use crate::gradcheck::{check_module, check_named_fn, DEFAULT_TOLERANCE};
    use crate::lane::y_grid;
    use rand::{Rng, SeedableRng};

    fn test_rig() -> CameraRig {
        CameraRig {
            intrinsics: Intrinsics::new(40.0, 40.0, 15.5, 11.5, 32, 24),
            cam_to_ego: crate::sim::cam_to_ego(1.5),
            ego_to_world: Pose::identity(),
        }
    }

    fn test_fmap(seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMap {
            values: Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[5, 6, 8]), |_| rng.gen_range(-1.0..1.0))),
            stride: 4,
        }
    }

    fn test_queries(m: usize, n: usize, d: usize, seed: u64) -> QuerySet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        QuerySet {
            values: Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[m, n, d]), |_| rng.gen_range(-0.7..0.7))),
            tag: QueryTag::Fused,
        }
    }

    fn grid4() -> Vec<f64> {
        y_grid(3.0, 43.0, 4)
    }

    fn test_decoder(seed: u64) -> LaneDecoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LaneDecoder::new(
            &DecoderConfig {
                dim: 8,
                feature_channels: 5,
                layers: 2,
                offsets: 3,
                ffn_dim: 12,
                num_categories: 3,
                y_grid: grid4(),
            },
            &mut rng,
        )
    }

    #[test]
    fn init_references_are_zero_with_fixed_y() {
        let dec = test_decoder(0);
        let q = test_queries(2, 4, 8, 1);
        let refs = dec.init_reference_points(&q, &ParamTape::new());
        assert!(refs.x.values().iter().all(|v| *v == 0.0));
        assert!(refs.z.values().iter().all(|v| *v == 0.0));
        assert_eq!(*refs.y_grid, grid4());
    }

    #[test]
    fn init_reference_gradients_match_fd() {
        let dec = test_decoder(2);
        let q0 = ArrayD::from_shape_fn(IxDyn(&[2, 4, 8]), |_| 0.3);
        let mut dec2 = test_decoder(2);
        dec2.init_head = Linear::new(8, 2, &mut ChaCha8Rng::seed_from_u64(3));
        let _ = dec;
        let entries = check_named_fn(&[("q".into(), q0)], DEFAULT_TOLERANCE, |leaves| {
            let q = QuerySet { values: leaves[0].clone(), tag: QueryTag::Fused };
            let tape = ParamTape::new();
            let refs = dec2.init_reference_points(&q, &tape);
            refs.x.pow_scalar(2.0).sum_all().add(&refs.z.pow_scalar(2.0).sum_all())
        });
        assert!(entries[0].pass, "rel err {}", entries[0].max_rel_err);
    }

    #[test]
    fn zeroed_sampling_paths_make_layer_identity() {
        let mut dec = test_decoder(4);
        for layer in &mut dec.layers {
            layer.zero_sampling_paths();
        }
        let q = test_queries(2, 4, 8, 5);
        let f = test_fmap(6);
        let tape = ParamTape::new();
        let refs = dec.init_reference_points(&q, &tape);
        let (q1, refs1) = dec.layers[0].forward(&q, &f, &refs, &test_rig(), &tape);
        let drift = q1
            .values
            .values()
            .iter()
            .zip(q.values.values().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(drift < 1e-12, "query drift {drift}");
        assert_eq!(refs1.x.values(), refs.x.values());
        assert_eq!(refs1.z.values(), refs.z.values());

        // stacking L identity layers stays the identity
        let pred = dec.forward(&q, &f, &test_rig(), &tape);
        assert!(pred.x.values().iter().all(|v| *v == 0.0));
        assert!(pred.z.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn behind_camera_references_stay_finite() {
        let dec = test_decoder(7);
        let q = test_queries(2, 4, 8, 8);
        let f = test_fmap(9);
        let tape = ParamTape::new();
        // all reference y behind the camera: shift the rig far forward
        let mut rig = test_rig();
        rig.cam_to_ego = Pose {
            rotation: rig.cam_to_ego.rotation,
            translation: [0.0, 500.0, 1.5],
        };
        let pred = dec.forward(&q, &f, &rig, &tape);
        assert!(pred.x.values().iter().all(|v| v.is_finite()));
        assert!(pred.z.values().iter().all(|v| v.is_finite()));
        assert!(pred.vis_logits.values().iter().all(|v| v.is_finite()));
        assert!(pred.cat_logits.values().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zeroed_head_reads_reference_points() {
        let mut dec = test_decoder(10);
        dec.head = PredictionHead::zeroed(8, 3);
        let q = test_queries(2, 4, 8, 11);
        let f = test_fmap(12);
        let tape = ParamTape::new();
        let pred = dec.forward(&q, &f, &test_rig(), &tape);
        assert_eq!(pred.x.shape(), &[2, 4]);
        assert_eq!(pred.z.shape(), &[2, 4]);
        assert_eq!(pred.vis_logits.shape(), &[2, 4]);
        assert_eq!(pred.cat_logits.shape(), &[2, 4]); // 3 categories + no-object
        assert!(pred.vis_logits.values().iter().all(|v| *v == 0.0));
        // zero logits -> uniform class distribution
        let probs = pred.cat_logits.softmax(1);
        assert!(probs.values().iter().all(|v| (*v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn prediction_to_lanes_filters_no_object() {
        let dec = test_decoder(13);
        let grid = Arc::new(grid4());
        let mut cat = ArrayD::zeros(IxDyn(&[2, 4]));
        cat[[0, 1]] = 5.0; // instance 0: class 1
        cat[[1, 3]] = 5.0; // instance 1: no-object
        let pred = LanePrediction {
            x: Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 4]), 1.5)),
            z: Tensor::constant(ArrayD::zeros(IxDyn(&[2, 4]))),
            vis_logits: Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 4]), 3.0)),
            cat_logits: Tensor::constant(cat),
            y_grid: grid.clone(),
        };
        let _ = dec;
        let lanes = pred.to_lanes(0.5);
        assert_eq!(lanes.len(), 1);
        assert_eq!(lanes[0].category, 1);
        assert_eq!(lanes[0].ys, *grid);
        assert!(lanes[0].visibility.iter().all(|v| *v));
    }

    #[test]
    fn decoder_gradients_match_fd() {
        let mut dec = test_decoder(14);
        // nonzero residual/refine paths so every branch carries gradient
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for layer in &mut dec.layers {
            layer.out_proj = Linear::new(8, 8, &mut rng);
            layer.ff.w2 = Linear::new(12, 8, &mut rng);
            layer.refine = Linear::new(8, 2, &mut rng);
            // keep refinement small so references stay in front of the camera
            layer.refine.weight.set_value(layer.refine.weight.value().mapv(|v| v * 0.05));
        }
        dec.init_head = Linear::new(8, 2, &mut rng);
        dec.init_head.weight.set_value(dec.init_head.weight.value().mapv(|v| v * 0.05));

        let q0 = ArrayD::from_shape_fn(IxDyn(&[2, 4, 8]), |_| rng.gen_range(-0.5..0.5));
        let f0 = ArrayD::from_shape_fn(IxDyn(&[5, 6, 8]), |_| rng.gen_range(-1.0..1.0));
        let rig = test_rig();

        let entries = check_module(&dec.named_params(), DEFAULT_TOLERANCE, |tape| {
            let q = QuerySet { values: Tensor::constant(q0.clone()), tag: QueryTag::Fused };
            let f = FeatureMap { values: Tensor::constant(f0.clone()), stride: 4 };
            let p = dec.forward(&q, &f, &rig, tape);
            p.x.pow_scalar(2.0)
                .sum_all()
                .add(&p.z.pow_scalar(2.0).sum_all())
                .add(&p.vis_logits.sigmoid().sum_all())
                .add(&p.cat_logits.log_softmax(1).sum_all().mul_scalar(-0.1))
        });
        for e in &entries {
            assert!(e.pass, "{} rel err {}", e.name, e.max_rel_err);
        }

        // and w.r.t. queries and features
        let inputs = vec![("q".to_string(), q0.clone()), ("f_ge".to_string(), f0.clone())];
        let entries = check_named_fn(&inputs, DEFAULT_TOLERANCE, |leaves| {
            let tape = ParamTape::new();
            let q = QuerySet { values: leaves[0].clone(), tag: QueryTag::Fused };
            let f = FeatureMap { values: leaves[1].clone(), stride: 4 };
            let p = dec.forward(&q, &f, &rig, &tape);
            p.x.pow_scalar(2.0)
                .sum_all()
                .add(&p.z.pow_scalar(2.0).sum_all())
                .add(&p.vis_logits.sigmoid().sum_all())
        });
        for e in &entries {
            assert!(e.pass, "{} rel err {}", e.name, e.max_rel_err);
        }
    }

    #[test]
    fn reference_point_gradients_flow_through_projection() {
        // gradients w.r.t. the reference coordinates themselves (through
        // projection and bilinear sampling)
        let dec = test_decoder(16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let q0 = ArrayD::from_shape_fn(IxDyn(&[2, 4, 8]), |_| rng.gen_range(-0.5..0.5));
        let f0 = ArrayD::from_shape_fn(IxDyn(&[5, 6, 8]), |_| rng.gen_range(-1.0..1.0));
        // keep x,z in a range that projects inside the feature map and away
        // from integer lattice lines
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 4]), |_| rng.gen_range(-1.0..1.0) + 0.137);
        let z0 = ArrayD::from_shape_fn(IxDyn(&[2, 4]), |_| rng.gen_range(-0.2..0.2) + 0.071);
        let rig = test_rig();

        let inputs = vec![("ref_x".to_string(), x0), ("ref_z".to_string(), z0)];
        let entries = check_named_fn(&inputs, DEFAULT_TOLERANCE, |leaves| {
            let tape = ParamTape::new();
            let q = QuerySet { values: Tensor::constant(q0.clone()), tag: QueryTag::Fused };
            let f = FeatureMap { values: Tensor::constant(f0.clone()), stride: 4 };
            let refs = ReferencePoints {
                x: leaves[0].clone(),
                z: leaves[1].clone(),
                y_grid: Arc::new(grid4()),
            };
            let (q1, refs1) = dec.layers[0].forward(&q, &f, &refs, &rig, &tape);
            q1.values
                .pow_scalar(2.0)
                .sum_all()
                .add(&refs1.x.pow_scalar(2.0).sum_all())
                .add(&refs1.z.pow_scalar(2.0).sum_all())
        });
        for e in &entries {
            assert!(e.pass, "{} rel err {}", e.name, e.max_rel_err);
        }
    }
}
