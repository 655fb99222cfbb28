//! Temporal geometry enhancement: a plane-sweep cost volume between the
//! current and past frames modulates the current features.
//!
//! Pipeline: replicate features over depth hypotheses, warp the past frame's
//! stack into the current view per hypothesis, take the channel-mean L1
//! mismatch as a cost volume, turn it into geometric features with a small
//! conv stack, and emit a sigmoid gate `alpha` plus a ReLU residual `beta`
//! applied as `F_ge = alpha * F_t + beta`.

use crate::autodiff::Tensor;
use crate::backbone::FeatureMap;
use crate::geometry::{relative_pose, scale_intrinsics, warp_grid, CameraRig};
use crate::nn::{join, Conv2d, Module, Norm2d, Param, ParamTape};
use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Strictly increasing positive depth hypotheses; at least two.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthHypotheses {
    bins: Vec<f64>,
}

impl DepthHypotheses {
    pub fn new(bins: Vec<f64>) -> Self {
        assert!(bins.len() >= 2, "need at least two depth hypotheses");
        assert!(bins[0] > 0.0, "depth hypotheses must be positive");
        assert!(bins.windows(2).all(|w| w[0] < w[1]), "depth hypotheses must be strictly increasing");
        Self { bins }
    }

    /// `n` bins uniform in inverse depth over [d_min, d_max], returned as
    /// increasing depths.
    pub fn inverse_depth(d_min: f64, d_max: f64, n: usize) -> Self {
        assert!(d_min > 0.0 && d_max > d_min);
        let bins = (0..n)
            .map(|i| {
                let inv = 1.0 / d_max + (1.0 / d_min - 1.0 / d_max) * (n - 1 - i) as f64 / (n - 1) as f64;
                1.0 / inv
            })
            .collect();
        Self::new(bins)
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of the hypothesis nearest to `depth` in inverse-depth space.
    pub fn nearest_bin(&self, depth: f64) -> usize {
        let inv = 1.0 / depth.max(1e-6);
        self.bins
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let da = (1.0 / *a - inv).abs();
                let db = (1.0 / *b - inv).abs();
                da.partial_cmp(&db).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap()
    }
}

/// Features replicated along the depth dimension: (D, C, H, W).
#[derive(Clone)]
pub struct ExpandedFeatures {
    pub values: Tensor,
    pub stride: usize,
}

impl ExpandedFeatures {
    pub fn depth_slices(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Every depth slice is an exact copy of the source feature map.
pub fn expand_repeat(f: &FeatureMap, hyp: &DepthHypotheses) -> ExpandedFeatures {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    let values = f.values.reshape(&[1, c, h, w]).expand(&[hyp.len(), c, h, w]);
    ExpandedFeatures { values, stride: f.stride }
}

/// Plane-sweep warp of the past frame's expanded features into the current
/// view, one sampling grid per hypothesis. Returns the warped stack and the
/// per-slice validity mask (D, H, W).
pub fn warp_expanded(
    e_src: &ExpandedFeatures,
    rig_t: &CameraRig,
    rig_src: &CameraRig,
    hyp: &DepthHypotheses,
) -> (ExpandedFeatures, Array3<bool>) {
    let d = e_src.depth_slices();
    assert_eq!(d, hyp.len(), "hypothesis count must match expanded slices");
    let (c, h, w) = (e_src.values.shape()[1], e_src.values.shape()[2], e_src.values.shape()[3]);
    let s = 1.0 / e_src.stride as f64;
    let k_src = scale_intrinsics(&rig_src.intrinsics, s, s, (w, h));
    let k_dst = scale_intrinsics(&rig_t.intrinsics, s, s, (w, h));
    // relative_pose yields src-cam -> dst-cam; warp_grid inverts internally.
    let t_rel = relative_pose(rig_src, rig_t);

    let mut slices = Vec::with_capacity(d);
    let mut valid = Array3::from_elem((d, h, w), false);
    for (di, &depth) in hyp.bins().iter().enumerate() {
        let grid = warp_grid(&k_src, &k_dst, &t_rel, depth, (h, w)).expect("positive hypothesis depth");
        let mut coords = ArrayD::zeros(IxDyn(&[h * w, 2]));
        let mut mask = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                coords[[y * w + x, 0]] = grid.coords[[0, y, x]];
                coords[[y * w + x, 1]] = grid.coords[[1, y, x]];
                mask.push(grid.valid[[y, x]]);
                valid[[di, y, x]] = grid.valid[[y, x]];
            }
        }
        let slice = e_src.values.slice_axis(0, di, 1).reshape(&[c, h, w]);
        let sampled = slice.grid_sample(&Tensor::constant(coords), Arc::new(mask));
        // (H*W, C) -> (C, H, W)
        slices.push(sampled.reshape(&[h, w, c]).permute(&[2, 0, 1]).reshape(&[1, c, h, w]));
    }
    let values = Tensor::concat(&slices, 0);
    (ExpandedFeatures { values, stride: e_src.stride }, valid)
}

/// Channel-mean L1 mismatch per depth slice, with invalid warp entries
/// replaced by the per-pixel maximum valid cost (or `fill` when a pixel has
/// no valid slice at all).
pub struct CostVolume {
    /// (D, H, W), nonnegative.
    pub values: Tensor,
    pub valid: Array3<bool>,
}

pub fn cost_volume(e_hat: &ExpandedFeatures, valid: &Array3<bool>, e_t: &ExpandedFeatures, fill: f64) -> CostVolume {
    assert_eq!(e_hat.values.shape(), e_t.values.shape(), "cost volume shape mismatch");
    let raw = e_hat.values.sub(&e_t.values).abs().mean_axis(1); // (D, H, W)
    let (d, h, w) = (raw.shape()[0], raw.shape()[1], raw.shape()[2]);
    assert_eq!(valid.dim(), (d, h, w));

    // Per-pixel fill value from the raw costs, as a detached constant.
    let mut mask = ArrayD::zeros(IxDyn(&[d, h, w]));
    let mut fill_vals = ArrayD::zeros(IxDyn(&[d, h, w]));
    for y in 0..h {
        for x in 0..w {
            let mut max_valid = f64::NEG_INFINITY;
            for di in 0..d {
                if valid[[di, y, x]] {
                    max_valid = max_valid.max(raw.values()[[di, y, x]]);
                }
            }
            let fv = if max_valid.is_finite() { max_valid } else { fill };
            for di in 0..d {
                if valid[[di, y, x]] {
                    mask[[di, y, x]] = 1.0;
                } else {
                    fill_vals[[di, y, x]] = fv;
                }
            }
        }
    }
    let values = raw.mul(&Tensor::constant(mask)).add(&Tensor::constant(fill_vals));
    CostVolume { values, valid: valid.clone() }
}

/// Share of valid depth slices per pixel, used as an extra input channel so
/// the convs can discount border regions.
pub fn validity_channel(valid: &Array3<bool>) -> Tensor {
    let (d, h, w) = valid.dim();
    let mut frac = ArrayD::zeros(IxDyn(&[1, h, w]));
    for y in 0..h {
        for x in 0..w {
            let n = (0..d).filter(|&di| valid[[di, y, x]]).count();
            frac[[0, y, x]] = n as f64 / d as f64;
        }
    }
    Tensor::constant(frac)
}

/// Conv -> norm -> ReLU stack mapping the cost volume (plus validity channel)
/// to geometric features.
pub struct GeometricHead {
    conv1: Conv2d,
    norm1: Norm2d,
    conv2: Conv2d,
    norm2: Norm2d,
}

impl GeometricHead {
    pub fn new(in_channels: usize, mid_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv2d::new(in_channels, mid_channels, 3, 1, 1, rng),
            norm1: Norm2d::new(mid_channels),
            conv2: Conv2d::new(mid_channels, out_channels, 3, 1, 1, rng),
            norm2: Norm2d::new(out_channels),
        }
    }

    pub fn forward(&self, x: &Tensor, tape: &ParamTape) -> Tensor {
        let h = self.norm1.forward(&self.conv1.forward(x, tape), tape).relu();
        self.norm2.forward(&self.conv2.forward(&h, tape), tape).relu()
    }
}

impl Module for GeometricHead {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.visit_params(&join(prefix, "conv1"), out);
        self.norm1.visit_params(&join(prefix, "norm1"), out);
        self.conv2.visit_params(&join(prefix, "conv2"), out);
        self.norm2.visit_params(&join(prefix, "norm2"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), out);
        self.norm1.visit_params_mut(&join(prefix, "norm1"), out);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), out);
        self.norm2.visit_params_mut(&join(prefix, "norm2"), out);
    }
}

/// The gate and residual of the feature enhancement.
pub struct GeometricModulation {
    /// (C, H, W) strictly inside (0, 1).
    pub alpha: Tensor,
    /// (C, H, W) nonnegative.
    pub beta: Tensor,
}

/// Two independent 1x1 conv heads on the geometric features.
pub struct ModulationHead {
    alpha_conv: Conv2d,
    alpha_norm: Norm2d,
    beta_conv: Conv2d,
    beta_norm: Norm2d,
}

impl ModulationHead {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            alpha_conv: Conv2d::new(channels, channels, 1, 1, 0, rng),
            alpha_norm: Norm2d::new(channels),
            beta_conv: Conv2d::new(channels, channels, 1, 1, 0, rng),
            beta_norm: Norm2d::new(channels),
        }
    }

    pub fn zeroed(channels: usize) -> Self {
        Self {
            alpha_conv: Conv2d::zeroed(channels, channels, 1, 1, 0),
            alpha_norm: Norm2d::new(channels),
            beta_conv: Conv2d::zeroed(channels, channels, 1, 1, 0),
            beta_norm: Norm2d::new(channels),
        }
    }

    pub fn forward(&self, f_g: &Tensor, tape: &ParamTape) -> GeometricModulation {
        let alpha = self.alpha_norm.forward(&self.alpha_conv.forward(f_g, tape), tape).sigmoid();
        let beta = self.beta_norm.forward(&self.beta_conv.forward(f_g, tape), tape).relu();
        GeometricModulation { alpha, beta }
    }
}

impl Module for ModulationHead {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.alpha_conv.visit_params(&join(prefix, "alpha_conv"), out);
        self.alpha_norm.visit_params(&join(prefix, "alpha_norm"), out);
        self.beta_conv.visit_params(&join(prefix, "beta_conv"), out);
        self.beta_norm.visit_params(&join(prefix, "beta_norm"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.alpha_conv.visit_params_mut(&join(prefix, "alpha_conv"), out);
        self.alpha_norm.visit_params_mut(&join(prefix, "alpha_norm"), out);
        self.beta_conv.visit_params_mut(&join(prefix, "beta_conv"), out);
        self.beta_norm.visit_params_mut(&join(prefix, "beta_norm"), out);
    }
}

/// Elementwise `F_ge = alpha * F_t + beta`.
pub fn enhance(f_t: &FeatureMap, modulation: &GeometricModulation) -> FeatureMap {
    assert_eq!(f_t.values.shape(), modulation.alpha.shape(), "enhance shape mismatch");
    FeatureMap {
        values: f_t.values.mul(&modulation.alpha).add(&modulation.beta),
        stride: f_t.stride,
    }
}

/// Full temporal geometry enhancement module.
pub struct Tgem {
    pub hyp: DepthHypotheses,
    pub fill: f64,
    /// When false ("w/o cost volume" ablation) the geometric features consume
    /// channel-concatenated (F_t, depth-mean warped F_past) instead of the
    /// volume.
    pub use_cost_volume: bool,
    geometric: GeometricHead,
    modulation: ModulationHead,
}

impl Tgem {
    pub fn new(
        feature_channels: usize,
        hyp: DepthHypotheses,
        fill: f64,
        use_cost_volume: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let in_channels = if use_cost_volume { hyp.len() + 1 } else { 2 * feature_channels };
        let mid = (feature_channels / 2).max(4);
        Self {
            hyp,
            fill,
            use_cost_volume,
            geometric: GeometricHead::new(in_channels, mid, feature_channels, rng),
            modulation: ModulationHead::new(feature_channels, rng),
        }
    }

    pub fn forward(
        &self,
        f_t: &FeatureMap,
        f_past: &FeatureMap,
        rig_t: &CameraRig,
        rig_past: &CameraRig,
        tape: &ParamTape,
    ) -> FeatureMap {
        let e_past = expand_repeat(f_past, &self.hyp);
        let (e_hat, valid) = warp_expanded(&e_past, rig_t, rig_past, &self.hyp);
        let geo_input = if self.use_cost_volume {
            let e_t = expand_repeat(f_t, &self.hyp);
            let volume = cost_volume(&e_hat, &valid, &e_t, self.fill);
            Tensor::concat(&[volume.values, validity_channel(&valid)], 0)
        } else {
            let warped_mean = e_hat.values.mean_axis(0);
            Tensor::concat(&[f_t.values.clone(), warped_mean], 0)
        };
        let f_g = self.geometric.forward(&geo_input, tape);
        let modulation = self.modulation.forward(&f_g, tape);
        enhance(f_t, &modulation)
    }
}

impl Module for Tgem {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.geometric.visit_params(&join(prefix, "geometric"), out);
        self.modulation.visit_params(&join(prefix, "modulation"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.geometric.visit_params_mut(&join(prefix, "geometric"), out);
        self.modulation.visit_params_mut(&join(prefix, "modulation"), out);
    }
}
