//! Parameters, layers and the optimizer built on [`crate::autodiff`].
//!
//! A [`Param`] owns plain f64 values; each forward pass lifts it into the
//! graph through a [`ParamTape`], which caches one leaf per parameter so that
//! modules sharing weights (the backbone runs on three frames) accumulate
//! gradients into a single node.

use crate::autodiff::{Gradients, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

static NEXT_PARAM_ID: AtomicUsize = AtomicUsize::new(1);

/// A learnable array of f64 values.
#[derive(Debug, Clone)]
pub struct Param {
    id: usize,
    value: ArrayD<f64>,
}

impl Param {
    pub fn new(value: ArrayD<f64>) -> Self {
        Self { id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed), value }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn value(&self) -> &ArrayD<f64> {
        &self.value
    }

    pub fn set_value(&mut self, value: ArrayD<f64>) {
        assert_eq!(value.shape(), self.value.shape(), "param shape change");
        self.value = value;
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Graph leaf for this parameter, shared within one tape.
    pub fn tensor(&self, tape: &ParamTape) -> Tensor {
        let mut cache = tape.cache.borrow_mut();
        cache.entry(self.id).or_insert_with(|| Tensor::leaf(self.value.clone())).clone()
    }
}

/// Per-forward-pass registry tying [`Param`]s to graph leaves.
#[derive(Default)]
pub struct ParamTape {
    cache: RefCell<HashMap<usize, Tensor>>,
}

impl ParamTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `leaf` as the graph tensor for `param` ahead of the forward
    /// pass; the gradcheck paths hand in externally created leaves this way.
    pub fn prime(&self, param: &Param, leaf: Tensor) {
        self.cache.borrow_mut().insert(param.id, leaf);
    }

    /// Pulls the gradient for `param` out of a backward result, if the
    /// parameter participated in this tape's graph.
    pub fn grad_of(&self, param: &Param, grads: &Gradients) -> Option<ArrayD<f64>> {
        let cache = self.cache.borrow();
        cache.get(&param.id).and_then(|leaf| grads.wrt(leaf).cloned())
    }
}

/// Anything with named learnable state.
pub trait Module {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.visit_params("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..limit))
}

/// Fully connected layer on the last axis of a 2D input (tokens, features).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Param::new(kaiming_uniform(&[out_dim, in_dim], in_dim, rng)),
            bias: Some(Param::zeros(&[out_dim])),
        }
    }

    /// All-zero weights and bias; used for residual branches that must start
    /// as the identity.
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self { weight: Param::zeros(&[out_dim, in_dim]), bias: Some(Param::zeros(&[out_dim])) }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    /// x: (T, in) -> (T, out)
    pub fn forward(&self, x: &Tensor, tape: &ParamTape) -> Tensor {
        let w = self.weight.tensor(tape);
        let t = x.shape()[0];
        let out = x.matmul(&w.permute(&[1, 0]));
        match &self.bias {
            Some(b) => out.add(&b.tensor(tape).reshape(&[1, self.out_dim()]).expand(&[t, self.out_dim()])),
            None => out,
        }
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// 2D convolution over a single (C,H,W) image.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * k * k;
        Self {
            weight: Param::new(kaiming_uniform(&[out_ch, in_ch, k, k], fan_in, rng)),
            bias: Some(Param::zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn zeroed(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Param::zeros(&[out_ch, in_ch, k, k]),
            bias: Some(Param::zeros(&[out_ch])),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor, tape: &ParamTape) -> Tensor {
        let w = self.weight.tensor(tape);
        let b = self.bias.as_ref().map(|b| b.tensor(tape));
        x.conv2d(&w, b.as_ref(), self.stride, self.pad)
    }
}

impl Module for Conv2d {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }
}

/// Per-channel spatial normalization with learnable affine. Statistics come
/// from the sample itself, so behavior is identical in training and
/// inference, which keeps every oracle deterministic and batch-independent.
#[derive(Debug, Clone)]
pub struct Norm2d {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl Norm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::from_elem(IxDyn(&[channels]), 1.0)),
            beta: Param::zeros(&[channels]),
            eps: 1e-5,
        }
    }

    /// x: (C,H,W)
    pub fn forward(&self, x: &Tensor, tape: &ParamTape) -> Tensor {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let flat = x.reshape(&[c, h * w]);
        let mean = flat.mean_axis(1).reshape(&[c, 1]).expand(&[c, h * w]);
        let centered = flat.sub(&mean);
        let var = centered.pow_scalar(2.0).mean_axis(1).reshape(&[c, 1]).expand(&[c, h * w]);
        let norm = centered.div(&var.add_scalar(self.eps).sqrt());
        let g = self.gamma.tensor(tape).reshape(&[c, 1]).expand(&[c, h * w]);
        let b = self.beta.tensor(tape).reshape(&[c, 1]).expand(&[c, h * w]);
        norm.mul(&g).add(&b).reshape(&[c, h, w])
    }
}

impl Module for Norm2d {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// Layer normalization over the last axis of a (T, d) tensor.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::from_elem(IxDyn(&[dim]), 1.0)),
            beta: Param::zeros(&[dim]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor, tape: &ParamTape) -> Tensor {
        let (t, d) = (x.shape()[0], x.shape()[1]);
        let mean = x.mean_axis(1).reshape(&[t, 1]).expand(&[t, d]);
        let centered = x.sub(&mean);
        let var = centered.pow_scalar(2.0).mean_axis(1).reshape(&[t, 1]).expand(&[t, d]);
        let norm = centered.div(&var.add_scalar(self.eps).sqrt());
        let g = self.gamma.tensor(tape).reshape(&[1, d]).expand(&[t, d]);
        let b = self.beta.tensor(tape).reshape(&[1, d]).expand(&[t, d]);
        norm.mul(&g).add(&b)
    }
}

impl Module for LayerNorm {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

/// Two-layer feed-forward block. The output projection starts at zero so the
/// enclosing residual block is the identity at initialization.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { w1: Linear::new(dim, hidden, rng), w2: Linear::zeroed(hidden, dim) }
    }

    pub fn forward(&self, x: &Tensor, tape: &ParamTape) -> Tensor {
        self.w2.forward(&self.w1.forward(x, tape).relu(), tape)
    }
}

impl Module for FeedForward {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.w1.visit_params(&join(prefix, "w1"), out);
        self.w2.visit_params(&join(prefix, "w2"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.w1.visit_params_mut(&join(prefix, "w1"), out);
        self.w2.visit_params_mut(&join(prefix, "w2"), out);
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    state: HashMap<String, (ArrayD<f64>, ArrayD<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, state: HashMap::new() }
    }

    /// One update over `(name, param, grad)` triples with learning rate `lr`.
    pub fn step(&mut self, items: &mut [(String, &mut Param, ArrayD<f64>)], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, param, grad) in items.iter_mut() {
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
            ndarray::Zip::from(&mut *m).and(&*grad).for_each(|m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            ndarray::Zip::from(&mut *v).and(&*grad).for_each(|v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let mut value = param.value().clone();
            ndarray::Zip::from(&mut value).and(&*m).and(&*v).for_each(|p, m, v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
            });
            param.set_value(value);
        }
    }
}

/// Cosine annealing from `base_lr` down to zero over `total_steps`.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = (step.min(total_steps)) as f64 / total_steps as f64;
    0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_scalar_fn;
    use rand::SeedableRng;

    #[test]
    fn linear_shapes_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(4, 3, &mut rng);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[5, 4]), |_| rng.gen_range(-1.0..1.0));
        let err = check_scalar_fn(&x0, move |x| {
            let tape = ParamTape::new();
            lin.forward(x, &tape).pow_scalar(2.0).sum_all()
        });
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn norm2d_constant_input_gives_beta() {
        let mut norm = Norm2d::new(2);
        norm.beta.set_value(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.3, -0.4]).unwrap());
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 3, 4]), 5.0));
        let tape = ParamTape::new();
        let y = norm.forward(&x, &tape);
        for h in 0..3 {
            for w in 0..4 {
                assert!((y.values()[[0, h, w]] - 0.3).abs() < 1e-9);
                assert!((y.values()[[1, h, w]] + 0.4).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn norm2d_grads_match_fd() {
        let norm = Norm2d::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[3, 4, 5]), |_| rng.gen_range(-2.0..2.0));
        let err = check_scalar_fn(&x0, move |x| {
            let tape = ParamTape::new();
            norm.forward(x, &tape).sigmoid().sum_all()
        });
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn shared_param_accumulates_grads_once_per_leaf() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(2, 2, &mut rng);
        let tape = ParamTape::new();
        let x = Tensor::constant(ArrayD::from_elem(IxDyn(&[1, 2]), 1.0));
        // Two calls share one leaf through the tape.
        let y = lin.forward(&x, &tape).add(&lin.forward(&x, &tape)).sum_all();
        let grads = y.backward();
        let g = tape.grad_of(&lin.weight, &grads).unwrap();
        // d/dW of 2 * sum(W x) = 2 * x broadcast over rows.
        for v in g.iter() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_reduces_quadratic() {
        let mut p = Param::new(ArrayD::from_elem(IxDyn(&[4]), 5.0));
        let mut opt = AdamW::new(0.1, 0.0);
        for _ in 0..400 {
            let g = p.value().mapv(|v| 2.0 * v);
            let mut items = vec![("p".to_string(), &mut p, g)];
            opt.step(&mut items, 0.1);
        }
        assert!(p.value().iter().all(|v| v.abs() < 0.1), "did not converge: {:?}", p.value());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(1.0, 0, 100) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(1.0, 100, 100) < 1e-12);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
    }
}
