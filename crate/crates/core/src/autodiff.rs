//! Reverse-mode automatic differentiation over `ndarray` f64 arrays.
//!
//! Tensors form an immutable DAG; `backward` walks reachable nodes in reverse
//! creation order and accumulates adjoints into a [`Gradients`] map keyed by
//! node id. Everything is f64 and single-threaded per graph, which keeps the
//! finite-difference checks exact and the training loop deterministic
//! (parallelism happens across independent per-sample graphs).
//!
//! The op set is intentionally small: elementwise arithmetic, reductions,
//! shape moves, 2D/batched matmul, single-image conv2d and a bilinear
//! `grid_sample` that is differentiable in both the map and the coordinates.

use ndarray::{concatenate, Array2, ArrayD, Axis, IxDyn, Slice};
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicUsize = AtomicUsize::new(1);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Neg(Tensor),
    AddScalar(Tensor),
    MulScalar(Tensor, f64),
    PowScalar(Tensor, f64),
    Exp(Tensor),
    Ln(Tensor),
    Sqrt(Tensor),
    Abs(Tensor),
    Relu(Tensor),
    Sigmoid(Tensor),
    SumAll(Tensor),
    SumAxis(Tensor, usize),
    Expand(Tensor),
    Reshape(Tensor),
    Permute(Tensor, Vec<usize>),
    Concat(Vec<Tensor>, usize),
    Slice(Tensor, usize, usize, usize),
    MatMul(Tensor, Tensor),
    Bmm(Tensor, Tensor),
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        pad: usize,
        cols: Arc<Array2<f64>>,
    },
    GridSample {
        map: Tensor,
        coords: Tensor,
        mask: Arc<Vec<bool>>,
    },
    GradScale(Tensor, f64),
}

struct Node {
    id: usize,
    values: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Handle to one node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Arc<Node>);

/// Adjoints produced by [`Tensor::backward`], keyed by node id.
pub struct Gradients(HashMap<usize, ArrayD<f64>>);

impl Gradients {
    pub fn wrt(&self, t: &Tensor) -> Option<&ArrayD<f64>> {
        self.0.get(&t.id())
    }
}

impl Tensor {
    fn new(values: ArrayD<f64>, op: Op, requires_grad: bool) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite tensor values");
        Tensor(Arc::new(Node { id: next_id(), values, op, requires_grad }))
    }

    /// Constant leaf: carries no gradient.
    pub fn constant(values: ArrayD<f64>) -> Self {
        Self::new(values, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or checked input).
    pub fn leaf(values: ArrayD<f64>) -> Self {
        Self::new(values, Op::Leaf, true)
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn values(&self) -> &ArrayD<f64> {
        &self.0.values
    }

    pub fn shape(&self) -> &[usize] {
        self.0.values.shape()
    }

    pub fn len(&self) -> usize {
        self.0.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar payload of a 0-d (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1);
        *self.0.values.iter().next().expect("empty tensor")
    }

    /// Cuts the graph: same values, no history.
    pub fn detach(&self) -> Tensor {
        Self::constant(self.0.values.clone())
    }

    fn unary(&self, values: ArrayD<f64>, op: Op) -> Tensor {
        let rg = self.requires_grad();
        Tensor::new(values, op, rg)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let values = &self.0.values + &other.0.values;
        Tensor::new(values, Op::Add(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let values = &self.0.values - &other.0.values;
        Tensor::new(values, Op::Sub(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "mul: shape mismatch");
        let values = &self.0.values * &other.0.values;
        Tensor::new(values, Op::Mul(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.shape(), other.shape(), "div: shape mismatch");
        let values = &self.0.values / &other.0.values;
        Tensor::new(values, Op::Div(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    pub fn neg(&self) -> Tensor {
        self.unary(self.0.values.mapv(|v| -v), Op::Neg(self.clone()))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(self.0.values.mapv(|v| v + s), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        self.unary(self.0.values.mapv(|v| v * s), Op::MulScalar(self.clone(), s))
    }

    /// Elementwise power with a constant exponent. Inputs must stay in the
    /// domain where `x^p` is smooth (we use it on positive values only).
    pub fn pow_scalar(&self, p: f64) -> Tensor {
        self.unary(self.0.values.mapv(|v| v.powf(p)), Op::PowScalar(self.clone(), p))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(self.0.values.mapv(f64::exp), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Tensor {
        self.unary(self.0.values.mapv(f64::ln), Op::Ln(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(self.0.values.mapv(f64::sqrt), Op::Sqrt(self.clone()))
    }

    pub fn abs(&self) -> Tensor {
        self.unary(self.0.values.mapv(f64::abs), Op::Abs(self.clone()))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(self.0.values.mapv(|v| v.max(0.0)), Op::Relu(self.clone()))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(self.0.values.mapv(sigmoid), Op::Sigmoid(self.clone()))
    }

    pub fn sum_all(&self) -> Tensor {
        let v = ArrayD::from_elem(IxDyn(&[]), self.0.values.sum());
        self.unary(v, Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len().max(1) as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let v = self.0.values.sum_axis(Axis(axis));
        self.unary(v, Op::SumAxis(self.clone(), axis))
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let n = self.shape()[axis].max(1) as f64;
        self.sum_axis(axis).mul_scalar(1.0 / n)
    }

    /// Numpy-style broadcast to `out_shape` (right-aligned, 1s expand).
    pub fn expand(&self, out_shape: &[usize]) -> Tensor {
        let v = self
            .0
            .values
            .broadcast(IxDyn(out_shape))
            .unwrap_or_else(|| panic!("cannot expand {:?} to {:?}", self.shape(), out_shape))
            .to_owned();
        self.unary(v, Op::Expand(self.clone()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        // into_shape reinterprets raw memory, so force row-major layout first
        let v = self
            .0
            .values
            .as_standard_layout()
            .to_owned()
            .into_shape(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape {:?} -> {:?}: {e}", self.shape(), shape));
        self.unary(v, Op::Reshape(self.clone()))
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        let v = self.0.values.clone().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        self.unary(v, Op::Permute(self.clone(), axes.to_vec()))
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let v = self
            .0
            .values
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.unary(v, Op::Slice(self.clone(), axis, start, len))
    }

    pub fn concat(inputs: &[Tensor], axis: usize) -> Tensor {
        assert!(!inputs.is_empty());
        let views: Vec<_> = inputs.iter().map(|t| t.0.values.view()).collect();
        let values = concatenate(Axis(axis), &views)
            .expect("concat: incompatible shapes")
            .as_standard_layout()
            .to_owned();
        let rg = inputs.iter().any(|t| t.requires_grad());
        Tensor::new(values, Op::Concat(inputs.to_vec(), axis), rg)
    }

    /// 2D matrix product (m,k) x (k,n).
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = as_2d(&self.0.values);
        let b = as_2d(&other.0.values);
        let values = a.dot(&b).into_dyn();
        Tensor::new(values, Op::MatMul(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    /// Batched matrix product (B,m,k) x (B,k,n).
    pub fn bmm(&self, other: &Tensor) -> Tensor {
        let sa = self.shape();
        let sb = other.shape();
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        assert_eq!(sa[0], sb[0], "bmm: batch mismatch");
        assert_eq!(sa[2], sb[1], "bmm: inner dim mismatch");
        let mut values = ArrayD::zeros(IxDyn(&[sa[0], sa[1], sb[2]]));
        for b in 0..sa[0] {
            let a2 = self.0.values.index_axis(Axis(0), b);
            let b2 = other.0.values.index_axis(Axis(0), b);
            let a2 = a2.into_dimensionality::<ndarray::Ix2>().unwrap();
            let b2 = b2.into_dimensionality::<ndarray::Ix2>().unwrap();
            values.index_axis_mut(Axis(0), b).assign(&a2.dot(&b2));
        }
        Tensor::new(values, Op::Bmm(self.clone(), other.clone()), self.requires_grad() || other.requires_grad())
    }

    /// Single-image 2D convolution: input (C_in,H,W), weight
    /// (C_out,C_in,kh,kw), zero padding `pad`, square stride.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        let ishape = self.shape();
        let wshape = weight.shape();
        assert_eq!(ishape.len(), 3, "conv2d expects (C,H,W) input");
        assert_eq!(wshape.len(), 4, "conv2d expects (Co,Ci,kh,kw) weight");
        assert_eq!(ishape[0], wshape[1], "conv2d channel mismatch");
        let (ci, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (co, kh, kw) = (wshape[0], wshape[2], wshape[3]);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let cols = im2col(&self.0.values, ci, h, w, kh, kw, stride, pad, oh, ow);
        let w2d = weight
            .0
            .values
            .view()
            .into_shape((co, ci * kh * kw))
            .unwrap()
            .to_owned();
        let mut out2d = w2d.dot(&cols);
        if let Some(b) = bias {
            assert_eq!(b.shape(), [co]);
            for (mut row, bv) in out2d.outer_iter_mut().zip(b.0.values.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let values = out2d.into_shape((co, oh, ow)).unwrap().into_dyn();
        let rg = self.requires_grad() || weight.requires_grad() || bias.map_or(false, |b| b.requires_grad());
        Tensor::new(
            values,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.cloned(),
                stride,
                pad,
                cols: Arc::new(cols),
            },
            rg,
        )
    }

    /// Bilinear sampling of `self` = (C,H,W) at `coords` = (P,2) continuous
    /// (u,v) pixel positions. Masked or out-of-bounds points produce zeros and
    /// receive no gradient. Output is (P,C). Differentiable in both the map
    /// and the coordinates.
    pub fn grid_sample(&self, coords: &Tensor, mask: Arc<Vec<bool>>) -> Tensor {
        let mshape = self.shape();
        let cshape = coords.shape();
        assert_eq!(mshape.len(), 3, "grid_sample expects (C,H,W) map");
        assert_eq!(cshape.len(), 2, "grid_sample expects (P,2) coords");
        assert_eq!(cshape[1], 2);
        assert_eq!(mask.len(), cshape[0], "grid_sample mask length mismatch");
        let (c, h, w) = (mshape[0], mshape[1], mshape[2]);
        let p = cshape[0];
        let mut values = ArrayD::zeros(IxDyn(&[p, c]));
        for i in 0..p {
            if !mask[i] {
                continue;
            }
            let u = coords.0.values[[i, 0]];
            let v = coords.0.values[[i, 1]];
            if let Some(taps) = bilinear_taps(u, v, h, w) {
                for (y, x, wt) in taps {
                    if wt == 0.0 {
                        continue;
                    }
                    for ch in 0..c {
                        values[[i, ch]] += wt * self.0.values[[ch, y, x]];
                    }
                }
            }
        }
        let rg = self.requires_grad() || coords.requires_grad();
        Tensor::new(values, Op::GridSample { map: self.clone(), coords: coords.clone(), mask }, rg)
    }

    /// Identity forward, gradient scaled by `s` on the way back. Scale 1.0 is
    /// a no-op; other values deliberately decouple forward and backward (used
    /// by the gradcheck negative control).
    pub fn grad_scale(&self, s: f64) -> Tensor {
        self.unary(self.0.values.clone(), Op::GradScale(self.clone(), s))
    }

    /// Softmax along `axis` (max-shifted for stability; the shift is treated
    /// as a constant, which leaves the gradient unchanged).
    pub fn softmax(&self, axis: usize) -> Tensor {
        let maxes = self.0.values.map_axis(Axis(axis), |lane| {
            lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        let mut mshape = self.shape().to_vec();
        mshape[axis] = 1;
        let maxes = Tensor::constant(maxes.into_shape(IxDyn(&mshape)).unwrap()).expand(self.shape());
        let e = self.sub(&maxes).exp();
        let mut sshape = e.shape().to_vec();
        sshape[axis] = 1;
        let denom = e.sum_axis(axis).reshape(&sshape).expand(e.shape());
        e.div(&denom)
    }

    /// log(softmax) along `axis`, numerically stable.
    pub fn log_softmax(&self, axis: usize) -> Tensor {
        let maxes = self.0.values.map_axis(Axis(axis), |lane| {
            lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        let mut mshape = self.shape().to_vec();
        mshape[axis] = 1;
        let maxes = Tensor::constant(maxes.into_shape(IxDyn(&mshape)).unwrap()).expand(self.shape());
        let shifted = self.sub(&maxes);
        let mut sshape = shifted.shape().to_vec();
        sshape[axis] = 1;
        let lse = shifted.exp().sum_axis(axis).ln().reshape(&sshape).expand(self.shape());
        shifted.sub(&lse)
    }

    /// Stable elementwise binary cross-entropy with logits against constant
    /// targets: `max(x,0) - x t + ln(1 + e^(-|x|))`.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Tensor {
        assert_eq!(self.shape(), targets.shape());
        let term = self.relu().sub(&self.mul(targets));
        let log1p = self.abs().neg().exp().add_scalar(1.0).ln();
        term.add(&log1p)
    }

    /// Runs reverse-mode accumulation from this (typically scalar) tensor.
    pub fn backward(&self) -> Gradients {
        assert!(self.requires_grad(), "backward on a graph with no differentiable leaves");
        // Reachable differentiable subgraph, newest first. Ids increase
        // monotonically with creation, so sorting by id descending is a
        // reverse topological order.
        let mut stack = vec![self.clone()];
        let mut seen: HashSet<usize> = HashSet::new();
        let mut nodes: Vec<Tensor> = Vec::new();
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || !seen.insert(t.id()) {
                continue;
            }
            for inp in t.op_inputs() {
                stack.push(inp.clone());
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut grads: HashMap<usize, ArrayD<f64>> = HashMap::new();
        grads.insert(self.id(), ArrayD::ones(IxDyn(self.shape())));

        for node in &nodes {
            let Some(g) = grads.get(&node.id()).cloned() else { continue };
            node.accumulate(&g, &mut grads);
        }
        Gradients(grads)
    }

    fn op_inputs(&self) -> Vec<&Tensor> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) | Op::Bmm(a, b) => {
                vec![a, b]
            }
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::PowScalar(a, _)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::Expand(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Slice(a, _, _, _)
            | Op::GradScale(a, _) => vec![a],
            Op::Concat(inputs, _) => inputs.iter().collect(),
            Op::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![input, weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            Op::GridSample { map, coords, .. } => vec![map, coords],
        }
    }

    fn accumulate(&self, g: &ArrayD<f64>, grads: &mut HashMap<usize, ArrayD<f64>>) {
        fn bump(grads: &mut HashMap<usize, ArrayD<f64>>, t: &Tensor, delta: ArrayD<f64>) {
            if !t.requires_grad() {
                return;
            }
            match grads.entry(t.id()) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    *e.get_mut() += &delta;
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(delta);
                }
            }
        }

        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                bump(grads, a, g.clone());
                bump(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                bump(grads, a, g.clone());
                bump(grads, b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                bump(grads, a, g * &b.0.values);
                bump(grads, b, g * &a.0.values);
            }
            Op::Div(a, b) => {
                bump(grads, a, g / &b.0.values);
                let db = g * &self.0.values / &b.0.values;
                bump(grads, b, db.mapv(|v| -v));
            }
            Op::Neg(a) => bump(grads, a, g.mapv(|v| -v)),
            Op::AddScalar(a) => bump(grads, a, g.clone()),
            Op::MulScalar(a, s) => bump(grads, a, g.mapv(|v| v * s)),
            Op::PowScalar(a, p) => {
                if *p == 0.0 {
                    return; // x^0 is constant
                }
                let da = ndarray::Zip::from(g).and(&a.0.values).map_collect(|gv, av| gv * p * av.powf(p - 1.0));
                bump(grads, a, da);
            }
            Op::Exp(a) => bump(grads, a, g * &self.0.values),
            Op::Ln(a) => bump(grads, a, g / &a.0.values),
            Op::Sqrt(a) => {
                let da = ndarray::Zip::from(g).and(&self.0.values).map_collect(|gv, ov| gv * 0.5 / ov);
                bump(grads, a, da);
            }
            Op::Abs(a) => {
                let da = ndarray::Zip::from(g).and(&a.0.values).map_collect(|gv, av| gv * av.signum());
                bump(grads, a, da);
            }
            Op::Relu(a) => {
                let da = ndarray::Zip::from(g).and(&a.0.values).map_collect(|gv, av| if *av > 0.0 { *gv } else { 0.0 });
                bump(grads, a, da);
            }
            Op::Sigmoid(a) => {
                let da = ndarray::Zip::from(g).and(&self.0.values).map_collect(|gv, ov| gv * ov * (1.0 - ov));
                bump(grads, a, da);
            }
            Op::SumAll(a) => {
                let gv = *g.iter().next().unwrap();
                bump(grads, a, ArrayD::from_elem(IxDyn(a.shape()), gv));
            }
            Op::SumAxis(a, axis) => {
                let mut shape = a.shape().to_vec();
                shape[*axis] = 1;
                let gb = g.clone().into_shape(IxDyn(&shape)).unwrap();
                let gb = gb.broadcast(IxDyn(a.shape())).unwrap().to_owned();
                bump(grads, a, gb);
            }
            Op::Expand(a) => {
                let in_shape = a.shape();
                let out_shape = self.shape();
                let extra = out_shape.len() - in_shape.len();
                let mut reduced = g.clone();
                for _ in 0..extra {
                    reduced = reduced.sum_axis(Axis(0));
                }
                for (ax, (&i_d, &o_d)) in in_shape.iter().zip(reduced.shape().to_vec().iter()).enumerate() {
                    if i_d == 1 && o_d != 1 {
                        reduced = reduced.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                    }
                }
                bump(grads, a, reduced.into_shape(IxDyn(in_shape)).unwrap());
            }
            Op::Reshape(a) => {
                let gs = g.as_standard_layout().to_owned();
                bump(grads, a, gs.into_shape(IxDyn(a.shape())).unwrap());
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let da = g.clone().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned();
                bump(grads, a, da);
            }
            Op::Concat(inputs, axis) => {
                let mut start = 0;
                for t in inputs {
                    let len = t.shape()[*axis];
                    let part = g.slice_axis(Axis(*axis), Slice::from(start..start + len)).to_owned();
                    bump(grads, t, part);
                    start += len;
                }
            }
            Op::Slice(a, axis, start, len) => {
                let mut da = ArrayD::zeros(IxDyn(a.shape()));
                da.slice_axis_mut(Axis(*axis), Slice::from(*start..start + len)).assign(g);
                bump(grads, a, da);
            }
            Op::MatMul(a, b) => {
                let g2 = as_2d(g);
                let av = as_2d(&a.0.values);
                let bv = as_2d(&b.0.values);
                bump(grads, a, g2.dot(&bv.t()).into_dyn());
                bump(grads, b, av.t().dot(&g2).into_dyn());
            }
            Op::Bmm(a, b) => {
                let batch = a.shape()[0];
                let mut da = ArrayD::zeros(IxDyn(a.shape()));
                let mut db = ArrayD::zeros(IxDyn(b.shape()));
                for i in 0..batch {
                    let gi = g.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let ai = a.0.values.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    let bi = b.0.values.index_axis(Axis(0), i).into_dimensionality::<ndarray::Ix2>().unwrap();
                    da.index_axis_mut(Axis(0), i).assign(&gi.dot(&bi.t()));
                    db.index_axis_mut(Axis(0), i).assign(&ai.t().dot(&gi));
                }
                bump(grads, a, da);
                bump(grads, b, db);
            }
            Op::Conv2d { input, weight, bias, stride, pad, cols } => {
                let wshape = weight.shape();
                let (co, ci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
                let oshape = self.shape();
                let (oh, ow) = (oshape[1], oshape[2]);
                let g2d = g.view().into_shape((co, oh * ow)).unwrap().to_owned();
                if weight.requires_grad() {
                    let dw = g2d.dot(&cols.t());
                    bump(grads, weight, dw.into_shape((co, ci, kh, kw)).unwrap().into_dyn());
                }
                if let Some(b) = bias {
                    if b.requires_grad() {
                        bump(grads, b, g2d.sum_axis(Axis(1)).into_dyn());
                    }
                }
                if input.requires_grad() {
                    let w2d = weight.0.values.view().into_shape((co, ci * kh * kw)).unwrap().to_owned();
                    let dcols = w2d.t().dot(&g2d);
                    let ishape = input.shape();
                    let da = col2im(&dcols, ci, ishape[1], ishape[2], kh, kw, *stride, *pad, oh, ow);
                    bump(grads, input, da);
                }
            }
            Op::GridSample { map, coords, mask } => {
                let mshape = map.shape();
                let (c, h, w) = (mshape[0], mshape[1], mshape[2]);
                let p = coords.shape()[0];
                let mut dmap = ArrayD::zeros(IxDyn(mshape));
                let mut dcoords = ArrayD::zeros(IxDyn(coords.shape()));
                for i in 0..p {
                    if !mask[i] {
                        continue;
                    }
                    let u = coords.0.values[[i, 0]];
                    let v = coords.0.values[[i, 1]];
                    let Some(taps) = bilinear_taps(u, v, h, w) else { continue };
                    let [(y0, x0, w00), (y0b, x1, w01), (y1, x0b, w10), (y1b, x1b, w11)] = taps;
                    let fx = u - u.floor();
                    let fy = v - v.floor();
                    let _ = (w00, w01, w10, w11);
                    for ch in 0..c {
                        let gv = g[[i, ch]];
                        if map.requires_grad() {
                            dmap[[ch, y0, x0]] += gv * (1.0 - fx) * (1.0 - fy);
                            dmap[[ch, y0b, x1]] += gv * fx * (1.0 - fy);
                            dmap[[ch, y1, x0b]] += gv * (1.0 - fx) * fy;
                            dmap[[ch, y1b, x1b]] += gv * fx * fy;
                        }
                        if coords.requires_grad() {
                            let m00 = map.0.values[[ch, y0, x0]];
                            let m01 = map.0.values[[ch, y0b, x1]];
                            let m10 = map.0.values[[ch, y1, x0b]];
                            let m11 = map.0.values[[ch, y1b, x1b]];
                            let dval_du = (1.0 - fy) * (m01 - m00) + fy * (m11 - m10);
                            let dval_dv = (1.0 - fx) * (m10 - m00) + fx * (m11 - m01);
                            dcoords[[i, 0]] += gv * dval_du;
                            dcoords[[i, 1]] += gv * dval_dv;
                        }
                    }
                }
                bump(grads, map, dmap);
                bump(grads, coords, dcoords);
            }
            Op::GradScale(a, s) => bump(grads, a, g.mapv(|v| v * s)),
        }
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

fn as_2d(a: &ArrayD<f64>) -> Array2<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected a 2D tensor")
        .to_owned()
}

/// Four bilinear taps (y, x, weight) for continuous (u, v); None when the
/// point lies outside [0, W-1] x [0, H-1].
fn bilinear_taps(u: f64, v: f64, h: usize, w: usize) -> Option<[(usize, usize, f64); 4]> {
    if !(u.is_finite() && v.is_finite()) || u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
        return None;
    }
    let x0f = u.floor();
    let y0f = v.floor();
    let fx = u - x0f;
    let fy = v - y0f;
    let x0 = x0f as usize;
    let y0 = y0f as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    Some([
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ])
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &ArrayD<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let mut cols = Array2::zeros((ci * kh * kw, oh * ow));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = input[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ArrayD<f64> {
    let mut da = ArrayD::zeros(IxDyn(&[ci, h, w]));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        da[[c, iy as usize, ix as usize]] += dcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    da
}
