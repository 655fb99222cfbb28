//! Central finite-difference verification of analytic gradients.
//!
//! Everything runs in f64 on tiny shapes. The step size scales with the
//! magnitude of the perturbed entry; relative error uses
//! `|a - n| / max(|a|, |n|, 1e-3)` so that near-zero gradients are compared
//! absolutely instead of blowing up.

use crate::autodiff::Tensor;
use crate::nn::{Param, ParamTape};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Relative-error agreement between one analytic and one numeric value.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Numeric gradient of `f` at `x0` by central differences.
pub fn central_diff<F>(x0: &ArrayD<f64>, mut f: F) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x0.raw_dim());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let flat = x.as_slice_mut().expect("contiguous");
        let orig = flat[idx];
        let h = 1e-5 * orig.abs().max(1.0);
        flat[idx] = orig + h;
        let fp = f(&x);
        let flat = x.as_slice_mut().unwrap();
        flat[idx] = orig - h;
        let fm = f(&x);
        let flat = x.as_slice_mut().unwrap();
        flat[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max relative error between the backward gradient of `build(leaf(x0))` and
/// central differences, over every entry of `x0`. `build` must return a
/// scalar tensor.
pub fn check_scalar_fn<F>(x0: &ArrayD<f64>, build: F) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    let leaf = Tensor::leaf(x0.clone());
    let out = build(&leaf);
    assert_eq!(out.len(), 1, "gradcheck target must be scalar");
    let grads = out.backward();
    let analytic = grads
        .wrt(&leaf)
        .cloned()
        .unwrap_or_else(|| ArrayD::zeros(IxDyn(x0.shape())));
    let numeric = central_diff(x0, |x| build(&Tensor::leaf(x.clone())).item());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Result of checking one named quantity (a parameter group or an input).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked_values: usize,
    pub pass: bool,
}

/// Gradient report for one module.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModuleReport {
    pub module: String,
    pub entries: Vec<CheckEntry>,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl ModuleReport {
    pub fn from_entries(module: &str, entries: Vec<CheckEntry>) -> Self {
        let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
        let pass = entries.iter().all(|e| e.pass);
        Self { module: module.to_string(), entries, max_rel_err, pass }
    }
}

/// Checks the gradient of a scalar function of several named arrays against
/// central differences, entry by entry. `build` receives one leaf per input,
/// in order.
pub fn check_named_fn<F>(inputs: &[(String, ArrayD<f64>)], tolerance: f64, build: F) -> Vec<CheckEntry>
where
    F: Fn(&[Tensor]) -> Tensor,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|(_, v)| Tensor::leaf(v.clone())).collect();
    let out = build(&leaves);
    assert_eq!(out.len(), 1, "gradcheck target must be scalar");
    let grads = out.backward();

    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let leaves: Vec<Tensor> = arrays.iter().map(|v| Tensor::leaf(v.clone())).collect();
        build(&leaves).item()
    };

    let mut entries = Vec::with_capacity(inputs.len());
    for (i, (name, x0)) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(&leaves[i])
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(x0.raw_dim()));
        let mut arrays: Vec<ArrayD<f64>> = inputs.iter().map(|(_, v)| v.clone()).collect();
        let numeric = central_diff(x0, |x| {
            arrays[i] = x.clone();
            eval(&arrays)
        });
        let max_rel_err = analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| rel_err(*a, *n))
            .fold(0.0, f64::max);
        entries.push(CheckEntry {
            name: name.clone(),
            max_rel_err,
            checked_values: x0.len(),
            pass: max_rel_err < tolerance,
        });
    }
    entries
}

/// Checks a module's parameter gradients: `forward` runs the module through
/// a tape primed with perturbed leaves for every parameter in `params`.
pub fn check_module<F>(params: &[(String, &Param)], tolerance: f64, forward: F) -> Vec<CheckEntry>
where
    F: Fn(&ParamTape) -> Tensor,
{
    let named: Vec<(String, ArrayD<f64>)> =
        params.iter().map(|(n, p)| (n.clone(), p.value().clone())).collect();
    check_named_fn(&named, tolerance, |leaves| {
        let tape = ParamTape::new();
        for ((_, p), leaf) in params.iter().zip(leaves) {
            tape.prime(p, leaf.clone());
        }
        forward(&tape)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[6]), |_| rng.gen_range(-2.0..2.0));
        let err = check_scalar_fn(&x0, |x| x.pow_scalar(2.0).sum_all());
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn corrupted_backward_fails() {
        // grad_scale(x, 1.5) reports analytic gradients 1.5x the truth; the
        // checker must flag it.
        let x0 = ArrayD::from_elem(IxDyn(&[4]), 0.7);
        let err = check_scalar_fn(&x0, |x| x.grad_scale(1.5).pow_scalar(2.0).sum_all());
        assert!(err > 0.2, "corrupted gradient slipped through: {err}");
    }

    #[test]
    fn named_inputs_report_separately() {
        let inputs = vec![
            ("a".to_string(), ArrayD::from_elem(IxDyn(&[3]), 1.2)),
            ("b".to_string(), ArrayD::from_elem(IxDyn(&[3]), -0.5)),
        ];
        let entries = check_named_fn(&inputs, DEFAULT_TOLERANCE, |leaves| {
            leaves[0].mul(&leaves[1]).sum_all()
        });
        assert_eq!(entries.len(), 2);
        assert!(entries.iter().all(|e| e.pass));
        assert_eq!(entries[0].checked_values, 3);
    }
}
