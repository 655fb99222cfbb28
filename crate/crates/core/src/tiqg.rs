//! Temporal instance-aware query generation: lane queries from the current
//! frame, the past frame and a synthesized future view (a crop-and-magnify of
//! the current image with correspondingly zoomed intrinsics), fused by
//! cross-attention and a per-token MLP.
//!
//! Each query set is M instances x N point-slots x d channels, built as a
//! broadcast sum of instance-level embeddings (attention-pooled from
//! features) and a learnable per-source point-level table.

use crate::autodiff::Tensor;
use crate::backbone::{Encoder, FeatureMap};
use crate::geometry::{bilinear_at, zoom_intrinsics, CameraRig, CropRect, GeometryError};
use crate::nn::{join, Conv2d, FeedForward, LayerNorm, Linear, Module, Norm2d, Param, ParamTape};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which frame a query set was generated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QueryTag {
    Current,
    Past,
    Future,
    Fused,
}

/// M x N x d lane queries.
#[derive(Clone)]
pub struct QuerySet {
    pub values: Tensor,
    pub tag: QueryTag,
}

impl QuerySet {
    pub fn instances(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn points(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[2]
    }

    /// Flattened (M*N, d) token view.
    pub fn tokens(&self) -> Tensor {
        let (m, n, d) = (self.instances(), self.points(), self.dim());
        self.values.reshape(&[m * n, d])
    }
}

/// Fractional crop window for the synthetic future view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub frac_x: f64,
    pub frac_y: f64,
    pub frac_w: f64,
    pub frac_h: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self::default_future()
    }
}

impl CropConfig {
    /// Top-central band where distant lanes vanish: central 50% width, upper
    /// 60% height.
    pub fn default_future() -> Self {
        Self { frac_x: 0.25, frac_y: 0.0, frac_w: 0.5, frac_h: 0.6 }
    }

    pub fn full_frame() -> Self {
        Self { frac_x: 0.0, frac_y: 0.0, frac_w: 1.0, frac_h: 1.0 }
    }

    pub fn to_rect(&self, width: usize, height: usize) -> CropRect {
        CropRect {
            x0: self.frac_x * width as f64,
            y0: self.frac_y * height as f64,
            w: self.frac_w * width as f64,
            h: self.frac_h * height as f64,
        }
    }
}

/// Crops and magnifies the current image back to its own size (bilinear) and
/// returns the matching rig: zoomed intrinsics, unchanged extrinsics/pose.
pub fn make_synthetic_future(
    image: &Array3<f64>,
    rig: &CameraRig,
    crop: &CropConfig,
) -> Result<(Array3<f64>, CameraRig), GeometryError> {
    let (c, h, w) = image.dim();
    let rect = crop.to_rect(w, h);
    let k_zoom = zoom_intrinsics(&rig.intrinsics, rect, (w, h))?;
    let sx = w as f64 / rect.w;
    let sy = h as f64 / rect.h;
    let mut out = Array3::zeros((c, h, w));
    let mut buf = vec![0.0; c];
    let view = image.view();
    for v in 0..h {
        for u in 0..w {
            // inverse of the crop-scale pixel map u' = (u - x0) * sx
            let us = u as f64 / sx + rect.x0;
            let vs = v as f64 / sy + rect.y0;
            bilinear_at(&view, us.min(w as f64 - 1.0), vs.min(h as f64 - 1.0), &mut buf);
            for ci in 0..c {
                out[[ci, v, u]] = buf[ci];
            }
        }
    }
    let mut zoom_rig = *rig;
    zoom_rig.intrinsics = k_zoom;
    Ok((out, zoom_rig))
}

/// Attention-map pooling: a conv stack predicts M spatial maps, softmax over
/// positions turns each into a pooling distribution over the feature map, and
/// a linear layer projects the pooled vectors to the query dimension.
pub struct InstanceEmbed {
    conv: Conv2d,
    norm: Norm2d,
    attn: Conv2d,
    proj: Linear,
    instances: usize,
}

impl InstanceEmbed {
    pub fn new(feature_channels: usize, instances: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = (feature_channels / 2).max(4);
        Self {
            conv: Conv2d::new(feature_channels, mid, 3, 1, 1, rng),
            norm: Norm2d::new(mid),
            attn: Conv2d::new(mid, instances, 1, 1, 0, rng),
            proj: Linear::new(feature_channels, dim, rng),
            instances,
        }
    }

    /// F (C,H,W) -> (M, d) instance embeddings.
    pub fn forward(&self, f: &FeatureMap, tape: &ParamTape) -> Tensor {
        let (c, h, w) = (f.channels(), f.height(), f.width());
        let hidden = self.norm.forward(&self.conv.forward(&f.values, tape), tape).relu();
        let maps = self.attn.forward(&hidden, tape).reshape(&[self.instances, h * w]);
        let weights = maps.softmax(1);
        let pooled = weights.matmul(&f.values.reshape(&[c, h * w]).permute(&[1, 0]));
        self.proj.forward(&pooled, tape)
    }
}

impl Module for InstanceEmbed {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv.visit_params(&join(prefix, "conv"), out);
        self.norm.visit_params(&join(prefix, "norm"), out);
        self.attn.visit_params(&join(prefix, "attn"), out);
        self.proj.visit_params(&join(prefix, "proj"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.visit_params_mut(&join(prefix, "conv"), out);
        self.norm.visit_params_mut(&join(prefix, "norm"), out);
        self.attn.visit_params_mut(&join(prefix, "attn"), out);
        self.proj.visit_params_mut(&join(prefix, "proj"), out);
    }
}

/// One learnable N x d point-level table per temporal source.
pub struct PointEmbedding {
    pub table: Param,
}

impl PointEmbedding {
    pub fn new(points: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = ArrayD::from_shape_fn(IxDyn(&[points, dim]), |_| rng.gen_range(-0.02..0.02));
        Self { table: Param::new(table) }
    }
}

impl Module for PointEmbedding {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "table"), &self.table));
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "table"), &mut self.table));
    }
}

/// `values[m, n, :] = instance[m, :] + point[n, :]`.
pub fn compose_queries(
    instance: &Tensor,
    point: &PointEmbedding,
    tag: QueryTag,
    tape: &ParamTape,
) -> QuerySet {
    let (m, d) = (instance.shape()[0], instance.shape()[1]);
    let n = point.table.shape()[0];
    assert_eq!(point.table.shape()[1], d, "query dimension mismatch");
    let inst = instance.reshape(&[m, 1, d]).expand(&[m, n, d]);
    let pts = point.table.tensor(tape).reshape(&[1, n, d]).expand(&[m, n, d]);
    QuerySet { values: inst.add(&pts), tag }
}

/// Pre-norm multi-head cross-attention with a feed-forward block. The output
/// projection and the feed-forward output layer start at zero, so a freshly
/// initialized block is the identity on its queries.
pub struct CrossAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    pub wo: Linear,
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    ln_ff: LayerNorm,
    pub ff: FeedForward,
    heads: usize,
}

impl CrossAttention {
    pub fn new(dim: usize, heads: usize, ffn_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "dim must divide into heads");
        Self {
            wq: Linear::new(dim, dim, rng),
            wk: Linear::new(dim, dim, rng),
            wv: Linear::new(dim, dim, rng),
            wo: Linear::zeroed(dim, dim),
            ln_q: LayerNorm::new(dim),
            ln_kv: LayerNorm::new(dim),
            ln_ff: LayerNorm::new(dim),
            ff: FeedForward::new(dim, ffn_dim, rng),
            heads,
        }
    }

    /// Attention values before the residual: constant across query tokens
    /// whenever all kv tokens are identical.
    pub fn attention_values(&self, q: &Tensor, kv: &Tensor, tape: &ParamTape) -> Tensor {
        let (tq, d) = (q.shape()[0], q.shape()[1]);
        let tk = kv.shape()[0];
        let dh = d / self.heads;
        let qn = self.ln_q.forward(q, tape);
        let kvn = self.ln_kv.forward(kv, tape);
        let qh = self.wq.forward(&qn, tape).reshape(&[tq, self.heads, dh]).permute(&[1, 0, 2]);
        let kh = self.wk.forward(&kvn, tape).reshape(&[tk, self.heads, dh]).permute(&[1, 2, 0]);
        let vh = self.wv.forward(&kvn, tape).reshape(&[tk, self.heads, dh]).permute(&[1, 0, 2]);
        let scores = qh.bmm(&kh).mul_scalar(1.0 / (dh as f64).sqrt());
        let attn = scores.softmax(2);
        let mixed = attn.bmm(&vh).permute(&[1, 0, 2]).reshape(&[tq, d]);
        self.wo.forward(&mixed, tape)
    }

    /// (Tq, d), (Tk, d) -> (Tq, d)
    pub fn forward(&self, q: &Tensor, kv: &Tensor, tape: &ParamTape) -> Tensor {
        let h = q.add(&self.attention_values(q, kv, tape));
        let ff_in = self.ln_ff.forward(&h, tape);
        h.add(&self.ff.forward(&ff_in, tape))
    }
}

impl Module for CrossAttention {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.wq.visit_params(&join(prefix, "wq"), out);
        self.wk.visit_params(&join(prefix, "wk"), out);
        self.wv.visit_params(&join(prefix, "wv"), out);
        self.wo.visit_params(&join(prefix, "wo"), out);
        self.ln_q.visit_params(&join(prefix, "ln_q"), out);
        self.ln_kv.visit_params(&join(prefix, "ln_kv"), out);
        self.ln_ff.visit_params(&join(prefix, "ln_ff"), out);
        self.ff.visit_params(&join(prefix, "ff"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.wq.visit_params_mut(&join(prefix, "wq"), out);
        self.wk.visit_params_mut(&join(prefix, "wk"), out);
        self.wv.visit_params_mut(&join(prefix, "wv"), out);
        self.wo.visit_params_mut(&join(prefix, "wo"), out);
        self.ln_q.visit_params_mut(&join(prefix, "ln_q"), out);
        self.ln_kv.visit_params_mut(&join(prefix, "ln_kv"), out);
        self.ln_ff.visit_params_mut(&join(prefix, "ln_ff"), out);
        self.ff.visit_params_mut(&join(prefix, "ff"), out);
    }
}

/// The full temporal query generator.
pub struct Tiqg {
    pub instance: InstanceEmbed,
    pub point_current: PointEmbedding,
    pub point_past: PointEmbedding,
    pub point_future: PointEmbedding,
    pub cross: CrossAttention,
    pub fuse1: Linear,
    pub fuse2: Linear,
    pub crop: CropConfig,
    /// When false ("w/o TIQG temporal parts") only current-frame queries are
    /// produced.
    pub use_temporal: bool,
}

pub struct TiqgConfig {
    pub feature_channels: usize,
    pub instances: usize,
    pub points: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub fuse_hidden: usize,
    pub crop: CropConfig,
    pub use_temporal: bool,
}

impl Tiqg {
    pub fn new(cfg: &TiqgConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            instance: InstanceEmbed::new(cfg.feature_channels, cfg.instances, cfg.dim, rng),
            point_current: PointEmbedding::new(cfg.points, cfg.dim, rng),
            point_past: PointEmbedding::new(cfg.points, cfg.dim, rng),
            point_future: PointEmbedding::new(cfg.points, cfg.dim, rng),
            cross: CrossAttention::new(cfg.dim, cfg.heads, cfg.ffn_dim, rng),
            fuse1: Linear::new(3 * cfg.dim, cfg.fuse_hidden, rng),
            fuse2: Linear::new(cfg.fuse_hidden, cfg.dim, rng),
            crop: cfg.crop,
            use_temporal: cfg.use_temporal,
        }
    }

    /// Queries for one source frame.
    pub fn frame_queries(&self, f: &FeatureMap, tag: QueryTag, tape: &ParamTape) -> QuerySet {
        let inst = self.instance.forward(f, tape);
        let point = match tag {
            QueryTag::Current => &self.point_current,
            QueryTag::Past => &self.point_past,
            QueryTag::Future => &self.point_future,
            QueryTag::Fused => panic!("fused is not a source"),
        };
        compose_queries(&inst, point, tag, tape)
    }

    /// Synthetic-future branch: crop/zoom the current image, run the shared
    /// encoder, embed.
    pub fn future_queries(
        &self,
        image: &Array3<f64>,
        rig: &CameraRig,
        encoder: &Encoder,
        tape: &ParamTape,
    ) -> Result<(QuerySet, CameraRig), GeometryError> {
        let (future_img, future_rig) = make_synthetic_future(image, rig, &self.crop)?;
        let f_p = encoder.forward(&Tensor::constant(future_img.into_dyn()), tape);
        Ok((self.frame_queries(&f_p, QueryTag::Future, tape), future_rig))
    }

    /// Concat along channels then a two-layer per-token MLP back to d.
    pub fn aggregate(&self, q_t: &QuerySet, q_past: &QuerySet, q_future: &QuerySet, tape: &ParamTape) -> QuerySet {
        assert_eq!(q_t.values.shape(), q_past.values.shape());
        assert_eq!(q_t.values.shape(), q_future.values.shape());
        let (m, n, d) = (q_t.instances(), q_t.points(), q_t.dim());
        let cat = Tensor::concat(&[q_t.values.clone(), q_past.values.clone(), q_future.values.clone()], 2)
            .reshape(&[m * n, 3 * d]);
        let fused = self.fuse2.forward(&self.fuse1.forward(&cat, tape).relu(), tape);
        QuerySet { values: fused.reshape(&[m, n, d]), tag: QueryTag::Fused }
    }

    /// Full pipeline; `image` and `rig` describe the current frame.
    pub fn forward(
        &self,
        f_t: &FeatureMap,
        f_past: &FeatureMap,
        image: &Array3<f64>,
        rig: &CameraRig,
        encoder: &Encoder,
        tape: &ParamTape,
    ) -> Result<QuerySet, GeometryError> {
        let q_t = self.frame_queries(f_t, QueryTag::Current, tape);
        if !self.use_temporal {
            return Ok(q_t);
        }
        let q_past = self.frame_queries(f_past, QueryTag::Past, tape);
        let (q_future, _) = self.future_queries(image, rig, encoder, tape)?;
        let q_past_u = QuerySet {
            values: self.cross.forward(&q_past.tokens(), &q_t.tokens(), tape).reshape(&[
                q_past.instances(),
                q_past.points(),
                q_past.dim(),
            ]),
            tag: QueryTag::Past,
        };
        let q_future_u = QuerySet {
            values: self.cross.forward(&q_future.tokens(), &q_t.tokens(), tape).reshape(&[
                q_future.instances(),
                q_future.points(),
                q_future.dim(),
            ]),
            tag: QueryTag::Future,
        };
        Ok(self.aggregate(&q_t, &q_past_u, &q_future_u, tape))
    }
}

impl Module for Tiqg {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.instance.visit_params(&join(prefix, "instance"), out);
        self.point_current.visit_params(&join(prefix, "point_current"), out);
        if self.use_temporal {
            self.point_past.visit_params(&join(prefix, "point_past"), out);
            self.point_future.visit_params(&join(prefix, "point_future"), out);
            self.cross.visit_params(&join(prefix, "cross"), out);
            self.fuse1.visit_params(&join(prefix, "fuse1"), out);
            self.fuse2.visit_params(&join(prefix, "fuse2"), out);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.instance.visit_params_mut(&join(prefix, "instance"), out);
        self.point_current.visit_params_mut(&join(prefix, "point_current"), out);
        if self.use_temporal {
            self.point_past.visit_params_mut(&join(prefix, "point_past"), out);
            self.point_future.visit_params_mut(&join(prefix, "point_future"), out);
            self.cross.visit_params_mut(&join(prefix, "cross"), out);
            self.fuse1.visit_params_mut(&join(prefix, "fuse1"), out);
            self.fuse2.visit_params_mut(&join(prefix, "fuse2"), out);
        }
    }
}
