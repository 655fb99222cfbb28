//! Bipartite matching between predictions and ground-truth lanes, the four
//! loss terms (x/z L1, visibility BCE, category focal, auxiliary 2D
//! segmentation BCE) and their weighted total.
//!
//! Matching runs on detached values; gradients flow through the loss terms
//! only. x/z regression averages per visible point within each matched pair,
//! then across pairs.

use crate::autodiff::Tensor;
use crate::decoder::LanePrediction;
use crate::lane::Lane3D;
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss weights must be nonnegative, got {0}")]
    NegativeWeight(f64),
}

/// Result of assigning predictions to ground-truth lanes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// (pred_idx, gt_idx), sorted by pred_idx.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
}

/// Loss weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_x: f64,
    pub w_z: f64,
    pub w_cate: f64,
    pub w_seg: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_x: 2.0, w_z: 10.0, w_cate: 10.0, w_seg: 5.0, focal_alpha: 0.25, focal_gamma: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        for w in [self.w_x, self.w_z, self.w_cate, self.w_seg] {
            if w < 0.0 {
                return Err(LossError::NegativeWeight(w));
            }
        }
        Ok(())
    }
}

/// Exact minimum-cost assignment (Jonker-Volgenant style shortest augmenting
/// paths) on a rectangular cost matrix; returns for each row the assigned
/// column, or usize::MAX when rows exceed columns and the row stays free.
pub fn hungarian(cost: &Array2<f64>) -> Vec<usize> {
    let (rows, cols) = cost.dim();
    if rows == 0 || cols == 0 {
        return vec![usize::MAX; rows];
    }
    // pad to square with a large constant
    let n = rows.max(cols);
    let big = cost.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs())) * 4.0 + 1e6;
    let at = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            cost[[i, j]]
        } else {
            big
        }
    };

    // classic O(n^3) potentials formulation, 1-indexed internals
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row matched to column j
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; rows];
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i <= rows && j <= cols {
            row_to_col[i - 1] = j - 1;
        }
    }
    row_to_col
}

/// Matching cost between one prediction row and one ground-truth lane:
/// `w_cate * (1 - p_class) + w_x * L1_x + w_z * L1_z` over visible GT points.
fn pair_cost(pred: &LanePrediction, pred_idx: usize, gt: &Lane3D, w: &LossWeights) -> f64 {
    let classes = pred.num_classes();
    // softmax probability of the GT class
    let mut maxv = f64::NEG_INFINITY;
    for c in 0..classes {
        maxv = maxv.max(pred.cat_logits.values()[[pred_idx, c]]);
    }
    let mut denom = 0.0;
    for c in 0..classes {
        denom += (pred.cat_logits.values()[[pred_idx, c]] - maxv).exp();
    }
    let p_class = (pred.cat_logits.values()[[pred_idx, gt.category.min(classes - 1)]] - maxv).exp() / denom;

    let mut l1x = 0.0;
    let mut l1z = 0.0;
    let mut count = 0usize;
    for i in 0..gt.len() {
        if gt.visibility[i] {
            l1x += (pred.x.values()[[pred_idx, i]] - gt.xs[i]).abs();
            l1z += (pred.z.values()[[pred_idx, i]] - gt.zs[i]).abs();
            count += 1;
        }
    }
    if count > 0 {
        l1x /= count as f64;
        l1z /= count as f64;
    }
    w.w_cate * (1.0 - p_class) + w.w_x * l1x + w.w_z * l1z
}

/// Optimal one-to-one assignment of predictions to ground-truth lanes.
pub fn match_lanes(pred: &LanePrediction, gts: &[Lane3D], w: &LossWeights) -> MatchResult {
    let m = pred.instances();
    if gts.is_empty() {
        return MatchResult { pairs: vec![], unmatched_preds: (0..m).collect() };
    }
    if m < gts.len() {
        log::warn!("fewer predictions ({m}) than ground-truth lanes ({}) - some lanes stay unmatched", gts.len());
    }
    let mut cost = Array2::zeros((m, gts.len()));
    for i in 0..m {
        for (j, gt) in gts.iter().enumerate() {
            cost[[i, j]] = pair_cost(pred, i, gt, w);
        }
    }
    let assignment = hungarian(&cost);
    let mut pairs = Vec::new();
    let mut unmatched_preds = Vec::new();
    for (i, &j) in assignment.iter().enumerate() {
        if j != usize::MAX {
            pairs.push((i, j));
        } else {
            unmatched_preds.push(i);
        }
    }
    pairs.sort();
    MatchResult { pairs, unmatched_preds }
}

/// Total assignment cost of a match under the stated cost (used by the
/// exhaustive oracle comparison).
pub fn assignment_cost(pred: &LanePrediction, gts: &[Lane3D], pairs: &[(usize, usize)], w: &LossWeights) -> f64 {
    pairs.iter().map(|&(i, j)| pair_cost(pred, i, &gts[j], w)).sum()
}

/// Mean absolute x and z errors over matched pairs' visible GT points,
/// averaged per point within a pair and then across pairs.
pub fn loss_xz(pred: &LanePrediction, gts: &[Lane3D], matches: &MatchResult) -> (Tensor, Tensor) {
    if matches.pairs.is_empty() {
        return (Tensor::scalar(0.0), Tensor::scalar(0.0));
    }
    let n = pred.x.shape()[1];
    let mut lx_terms = Vec::new();
    let mut lz_terms = Vec::new();
    for &(pi, gi) in &matches.pairs {
        let gt = &gts[gi];
        let count = gt.visible_count();
        if count == 0 {
            continue;
        }
        let mut vis = ArrayD::zeros(IxDyn(&[n]));
        let mut gx = ArrayD::zeros(IxDyn(&[n]));
        let mut gz = ArrayD::zeros(IxDyn(&[n]));
        for i in 0..n {
            if gt.visibility[i] {
                vis[[i]] = 1.0;
                gx[[i]] = gt.xs[i];
                gz[[i]] = gt.zs[i];
            }
        }
        let vis = Tensor::constant(vis);
        let px = pred.x.slice_axis(0, pi, 1).reshape(&[n]);
        let pz = pred.z.slice_axis(0, pi, 1).reshape(&[n]);
        let inv = 1.0 / count as f64;
        lx_terms.push(px.sub(&Tensor::constant(gx)).abs().mul(&vis).sum_all().mul_scalar(inv));
        lz_terms.push(pz.sub(&Tensor::constant(gz)).abs().mul(&vis).sum_all().mul_scalar(inv));
    }
    if lx_terms.is_empty() {
        return (Tensor::scalar(0.0), Tensor::scalar(0.0));
    }
    let k = 1.0 / lx_terms.len() as f64;
    let sum = |terms: Vec<Tensor>| {
        let mut it = terms.into_iter();
        let first = it.next().unwrap();
        it.fold(first, |acc, t| acc.add(&t))
    };
    (sum(lx_terms).mul_scalar(k), sum(lz_terms).mul_scalar(k))
}

/// Mean binary cross-entropy between visibility logits and GT visibility over
/// all points of the matched pairs.
pub fn loss_vis(pred: &LanePrediction, gts: &[Lane3D], matches: &MatchResult) -> Tensor {
    if matches.pairs.is_empty() {
        return Tensor::scalar(0.0);
    }
    let n = pred.x.shape()[1];
    let mut terms = Vec::new();
    for &(pi, gi) in &matches.pairs {
        let gt = &gts[gi];
        let targets = ArrayD::from_shape_fn(IxDyn(&[n]), |ix| if gt.visibility[ix[0]] { 1.0 } else { 0.0 });
        let logits = pred.vis_logits.slice_axis(0, pi, 1).reshape(&[n]);
        terms.push(logits.bce_with_logits(&Tensor::constant(targets)).mean_all());
    }
    let k = 1.0 / terms.len() as f64;
    let mut it = terms.into_iter();
    let first = it.next().unwrap();
    it.fold(first, |acc, t| acc.add(&t)).mul_scalar(k)
}

/// Focal classification loss over all predictions; matched predictions target
/// their GT category, unmatched ones the no-object class.
pub fn loss_cate(pred: &LanePrediction, gts: &[Lane3D], matches: &MatchResult, w: &LossWeights) -> Tensor {
    let m = pred.instances();
    let classes = pred.num_classes();
    let mut target = vec![classes - 1; m];
    for &(pi, gi) in &matches.pairs {
        target[pi] = gts[gi].category.min(classes - 1);
    }
    let mut onehot = ArrayD::zeros(IxDyn(&[m, classes]));
    for (i, &t) in target.iter().enumerate() {
        onehot[[i, t]] = 1.0;
    }
    let log_p = pred.cat_logits.log_softmax(1);
    let lt = log_p.mul(&Tensor::constant(onehot)).sum_axis(1); // (M,) log p_t
    let pt = lt.exp();
    let focus = pt.neg().add_scalar(1.0).pow_scalar(w.focal_gamma);
    focus.mul(&lt).neg().mul_scalar(w.focal_alpha).mean_all()
}

/// Max-pool a binary mask down to the feature stride.
pub fn downsample_seg(seg: &ndarray::Array2<u8>, stride: usize) -> ArrayD<f64> {
    let (h, w) = seg.dim();
    let (hf, wf) = (h / stride, w / stride);
    let mut out = ArrayD::zeros(IxDyn(&[1, hf, wf]));
    for y in 0..hf {
        for x in 0..wf {
            let mut any = 0.0;
            for dy in 0..stride {
                for dx in 0..stride {
                    if seg[[y * stride + dy, x * stride + dx]] > 0 {
                        any = 1.0;
                    }
                }
            }
            out[[0, y, x]] = any;
        }
    }
    out
}

/// Mean BCE between segmentation logits (1, Hf, Wf) and the downsampled mask.
pub fn loss_seg(seg_logits: &Tensor, seg_target: &ArrayD<f64>) -> Tensor {
    assert_eq!(seg_logits.shape(), seg_target.shape(), "segmentation shape mismatch");
    seg_logits.bce_with_logits(&Tensor::constant(seg_target.clone())).mean_all()
}

/// All loss terms; `total` is built as the exact weighted sum.
pub struct LossBreakdown {
    pub l_vis: Tensor,
    pub l_x: Tensor,
    pub l_z: Tensor,
    pub l_cate: Tensor,
    pub l_seg: Tensor,
    pub total: Tensor,
}

impl LossBreakdown {
    pub fn values(&self) -> LossValues {
        LossValues {
            l_vis: self.l_vis.item(),
            l_x: self.l_x.item(),
            l_z: self.l_z.item(),
            l_cate: self.l_cate.item(),
            l_seg: self.l_seg.item(),
            total: self.total.item(),
        }
    }
}

/// Plain numbers for manifests.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossValues {
    pub l_vis: f64,
    pub l_x: f64,
    pub l_z: f64,
    pub l_cate: f64,
    pub l_seg: f64,
    pub total: f64,
}

/// Weighted sum `l_vis + w_x l_x + w_z l_z + w_cate l_cate + w_seg l_seg`.
pub fn total_loss(
    pred: &LanePrediction,
    gts: &[Lane3D],
    matches: &MatchResult,
    seg_logits: &Tensor,
    seg_target: &ArrayD<f64>,
    w: &LossWeights,
) -> Result<LossBreakdown, LossError> {
    w.validate()?;
    let (l_x, l_z) = loss_xz(pred, gts, matches);
    let l_vis = loss_vis(pred, gts, matches);
    let l_cate = loss_cate(pred, gts, matches, w);
    let l_seg = loss_seg(seg_logits, seg_target);
    let total = l_vis
        .add(&l_x.mul_scalar(w.w_x))
        .add(&l_z.mul_scalar(w.w_z))
        .add(&l_cate.mul_scalar(w.w_cate))
        .add(&l_seg.mul_scalar(w.w_seg));
    Ok(LossBreakdown { l_vis, l_x, l_z, l_cate, l_seg, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_named_fn, DEFAULT_TOLERANCE};
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn grid() -> Vec<f64> {
        vec![5.0, 10.0, 15.0, 20.0]
    }

    fn gt_lane(x: f64, category: usize, vis: &[bool]) -> Lane3D {
        Lane3D {
            xs: vec![x; 4],
            ys: grid(),
            zs: vec![0.1; 4],
            visibility: vis.to_vec(),
            category,
        }
    }

    /// prediction with given x rows, saturated logits toward `classes`
    fn pred_from(xs: &[Vec<f64>], classes: &[usize], num_categories: usize) -> LanePrediction {
        let m = xs.len();
        let n = xs[0].len();
        let mut x = ArrayD::zeros(IxDyn(&[m, n]));
        let mut z = ArrayD::zeros(IxDyn(&[m, n]));
        let mut cat = ArrayD::zeros(IxDyn(&[m, num_categories + 1]));
        for i in 0..m {
            for j in 0..n {
                x[[i, j]] = xs[i][j];
                z[[i, j]] = 0.1;
            }
            cat[[i, classes[i]]] = 50.0;
        }
        LanePrediction {
            x: Tensor::leaf(x),
            z: Tensor::leaf(z),
            vis_logits: Tensor::leaf(ArrayD::from_elem(IxDyn(&[m, n]), 50.0)),
            cat_logits: Tensor::leaf(cat),
            y_grid: Arc::new(grid()),
        }
    }

    #[test]
    fn hungarian_matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let n = rng.gen_range(1..=4usize);
            let m = rng.gen_range(1..=4usize);
            let cost = Array2::from_shape_fn((n, m), |_| rng.gen_range(0.0..10.0));
            let assignment = hungarian(&cost);
            let got: f64 = assignment
                .iter()
                .enumerate()
                .filter(|(_, &j)| j != usize::MAX)
                .map(|(i, &j)| cost[[i, j]])
                .sum();
            let best = brute_force_min_cost(&cost);
            assert!((got - best).abs() < 1e-9, "hungarian {got} vs brute force {best} on {cost:?}");
        }
    }

    /// Exhaustive minimum over all injective assignments of the smaller side.
    fn brute_force_min_cost(cost: &Array2<f64>) -> f64 {
        let (n, m) = cost.dim();
        let mut best = f64::INFINITY;
        if n <= m {
            let mut cols: Vec<usize> = (0..m).collect();
            permute(&mut cols, 0, &mut |perm| {
                let total: f64 = (0..n).map(|i| cost[[i, perm[i]]]).sum();
                best = best.min(total);
            });
        } else {
            let mut rows: Vec<usize> = (0..n).collect();
            permute(&mut rows, 0, &mut |perm| {
                let total: f64 = (0..m).map(|j| cost[[perm[j], j]]).sum();
                best = best.min(total);
            });
        }
        best
    }

    fn permute(items: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            f(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, f);
            items.swap(k, i);
        }
    }

    #[test]
    fn empty_gt_leaves_all_preds_unmatched() {
        let pred = pred_from(&[vec![0.0; 4], vec![2.0; 4]], &[0, 1], 3);
        let m = match_lanes(&pred, &[], &LossWeights::default());
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_preds, vec![0, 1]);
    }

    #[test]
    fn dominated_cost_matches_exact_pred() {
        let gt = gt_lane(1.0, 0, &[true; 4]);
        let pred = pred_from(&[vec![1.0; 4], vec![6.0; 4]], &[0, 0], 3);
        let m = match_lanes(&pred, &[gt], &LossWeights::default());
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert_eq!(m.unmatched_preds, vec![1]);
    }

    #[test]
    fn matching_is_gt_permutation_invariant_in_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = LossWeights::default();
        for _ in 0..20 {
            let gts: Vec<Lane3D> = (0..3)
                .map(|c| gt_lane(rng.gen_range(-5.0..5.0), c, &[true, true, true, false]))
                .collect();
            let xs: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen_range(-5.0..5.0); 4]).collect();
            let pred = pred_from(&xs, &[0, 1, 2, 3], 3);
            let m1 = match_lanes(&pred, &gts, &w);
            let mut rev = gts.clone();
            rev.reverse();
            let m2 = match_lanes(&pred, &rev, &w);
            let c1 = assignment_cost(&pred, &gts, &m1.pairs, &w);
            let c2 = assignment_cost(&pred, &rev, &m2.pairs, &w);
            assert!((c1 - c2).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_loss_fixed_point() {
        let gts = vec![gt_lane(1.0, 0, &[true, true, true, false]), gt_lane(-2.0, 2, &[true; 4])];
        let mut pred = pred_from(&[vec![1.0; 4], vec![-2.0; 4]], &[0, 2], 3);
        // vis logits matching GT visibility exactly, +-50
        let mut vl = ArrayD::from_elem(IxDyn(&[2, 4]), 50.0);
        vl[[0, 3]] = -50.0;
        pred.vis_logits = Tensor::leaf(vl);
        let w = LossWeights::default();
        let m = match_lanes(&pred, &gts, &w);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        let seg_logits = Tensor::leaf(ArrayD::from_elem(IxDyn(&[1, 2, 2]), 50.0));
        let seg_target = ArrayD::from_elem(IxDyn(&[1, 2, 2]), 1.0);
        let breakdown = total_loss(&pred, &gts, &m, &seg_logits, &seg_target, &w).unwrap();
        let v = breakdown.values();
        assert_eq!(v.l_x, 0.0);
        assert_eq!(v.l_z, 0.0);
        assert!(v.l_vis < 1e-8);
        assert!(v.l_cate < 1e-8);
        assert!(v.l_seg < 1e-8);
        assert!(v.total < 1e-6);
    }

    #[test]
    fn constant_offset_gives_expected_l1() {
        let gts = vec![gt_lane(1.0, 0, &[true; 4])];
        let pred = pred_from(&[vec![1.5; 4]], &[0], 3);
        let m = match_lanes(&pred, &gts, &LossWeights::default());
        let (lx, lz) = loss_xz(&pred, &gts, &m);
        assert!((lx.item() - 0.5).abs() < 1e-12);
        assert!(lz.item() < 1e-12);
    }

    #[test]
    fn xz_loss_matches_independent_recompute() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let gts: Vec<Lane3D> = (0..2)
                .map(|c| {
                    let vis: Vec<bool> = (0..4).map(|_| rng.gen_bool(0.8)).collect();
                    let vis = if vis.iter().any(|v| *v) { vis } else { vec![true; 4] };
                    Lane3D {
                        xs: (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect(),
                        ys: grid(),
                        zs: (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                        visibility: vis,
                        category: c,
                    }
                })
                .collect();
            let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
            let pred = pred_from(&xs, &[0, 1, 2], 3);
            let w = LossWeights::default();
            let m = match_lanes(&pred, &gts, &w);
            let (lx, _) = loss_xz(&pred, &gts, &m);
            // independent recompute
            let mut acc = 0.0;
            for &(pi, gi) in &m.pairs {
                let gt = &gts[gi];
                let mut s = 0.0;
                let mut c = 0;
                for i in 0..4 {
                    if gt.visibility[i] {
                        s += (pred.x.values()[[pi, i]] - gt.xs[i]).abs();
                        c += 1;
                    }
                }
                acc += s / c as f64;
            }
            acc /= m.pairs.len() as f64;
            assert!((lx.item() - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn vis_loss_known_values() {
        let gts = vec![gt_lane(0.0, 0, &[true, true, false, false])];
        let mut pred = pred_from(&[vec![0.0; 4]], &[0], 3);
        pred.vis_logits = Tensor::leaf(ArrayD::zeros(IxDyn(&[1, 4])));
        let m = match_lanes(&pred, &gts, &LossWeights::default());
        let l = loss_vis(&pred, &gts, &m);
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);

        let mut vl = ArrayD::from_elem(IxDyn(&[1, 4]), 50.0);
        vl[[0, 2]] = -50.0;
        vl[[0, 3]] = -50.0;
        pred.vis_logits = Tensor::leaf(vl);
        let l = loss_vis(&pred, &gts, &m);
        assert!(l.item() < 1e-8);
    }

    #[test]
    fn focal_reduces_to_cross_entropy_at_gamma_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = 3usize;
            let classes = 4usize; // 3 + no-object
            let logits = ArrayD::from_shape_fn(IxDyn(&[m, classes]), |_| rng.gen_range(-2.0..2.0));
            let pred = LanePrediction {
                x: Tensor::leaf(ArrayD::zeros(IxDyn(&[m, 4]))),
                z: Tensor::leaf(ArrayD::zeros(IxDyn(&[m, 4]))),
                vis_logits: Tensor::leaf(ArrayD::zeros(IxDyn(&[m, 4]))),
                cat_logits: Tensor::leaf(logits.clone()),
                y_grid: Arc::new(grid()),
            };
            let gts = vec![gt_lane(0.0, 1, &[true; 4])];
            let matches = MatchResult { pairs: vec![(0, 0)], unmatched_preds: vec![1, 2] };
            let w = LossWeights { focal_gamma: 0.0, focal_alpha: 1.0, ..LossWeights::default() };
            let l = loss_cate(&pred, &gts, &matches, &w);
            // reference cross-entropy with targets [1, no-object, no-object]
            let targets = [1usize, 3, 3];
            let mut ce = 0.0;
            for i in 0..m {
                let row: Vec<f64> = (0..classes).map(|c| logits[[i, c]]).collect();
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
                ce += lse - row[targets[i]];
            }
            ce /= m as f64;
            assert!((l.item() - ce).abs() < 1e-12, "{} vs {}", l.item(), ce);
        }
    }

    #[test]
    fn focal_downweights_relative_to_ce_on_uniform_logits() {
        let m = 2usize;
        let classes = 4usize;
        let pred = LanePrediction {
            x: Tensor::leaf(ArrayD::zeros(IxDyn(&[m, 4]))),
            z: Tensor::leaf(ArrayD::zeros(IxDyn(&[m, 4]))),
            vis_logits: Tensor::leaf(ArrayD::zeros(IxDyn(&[m, 4]))),
            cat_logits: Tensor::leaf(ArrayD::zeros(IxDyn(&[m, classes]))),
            y_grid: Arc::new(grid()),
        };
        let gts = vec![gt_lane(0.0, 0, &[true; 4])];
        let matches = MatchResult { pairs: vec![(0, 0)], unmatched_preds: vec![1] };
        let focal = loss_cate(
            &pred,
            &gts,
            &matches,
            &LossWeights { focal_gamma: 2.0, focal_alpha: 1.0, ..LossWeights::default() },
        );
        let ce = loss_cate(
            &pred,
            &gts,
            &matches,
            &LossWeights { focal_gamma: 0.0, focal_alpha: 1.0, ..LossWeights::default() },
        );
        assert!(focal.item() < ce.item());
    }

    #[test]
    fn saturated_correct_logits_give_near_zero_focal() {
        let pred = pred_from(&[vec![0.0; 4]], &[2], 3);
        let gts = vec![gt_lane(0.0, 2, &[true; 4])];
        let matches = MatchResult { pairs: vec![(0, 0)], unmatched_preds: vec![] };
        let l = loss_cate(&pred, &gts, &matches, &LossWeights::default());
        assert!(l.item() < 1e-8);
    }

    #[test]
    fn seg_loss_known_values() {
        let logits = Tensor::leaf(ArrayD::zeros(IxDyn(&[1, 2, 3])));
        let target = ArrayD::from_elem(IxDyn(&[1, 2, 3]), 1.0);
        assert!((loss_seg(&logits, &target).item() - std::f64::consts::LN_2).abs() < 1e-12);
        let sat = Tensor::leaf(ArrayD::from_elem(IxDyn(&[1, 2, 3]), 50.0));
        assert!(loss_seg(&sat, &target).item() < 1e-8);
    }

    #[test]
    fn seg_downsample_is_maxpool() {
        let mut seg = ndarray::Array2::<u8>::zeros((4, 4));
        seg[[0, 1]] = 1;
        seg[[3, 3]] = 1;
        let d = downsample_seg(&seg, 2);
        assert_eq!(d.shape(), &[1, 2, 2]);
        assert_eq!(d[[0, 0, 0]], 1.0);
        assert_eq!(d[[0, 0, 1]], 0.0);
        assert_eq!(d[[0, 1, 1]], 1.0);
    }

    #[test]
    fn total_is_exact_weighted_sum_and_rejects_negative_weights() {
        let gts = vec![gt_lane(1.0, 0, &[true; 4])];
        let pred = pred_from(&[vec![1.5; 4]], &[0], 3);
        let w = LossWeights::default();
        let m = match_lanes(&pred, &gts, &w);
        let seg_logits = Tensor::leaf(ArrayD::zeros(IxDyn(&[1, 2, 2])));
        let seg_target = ArrayD::zeros(IxDyn(&[1, 2, 2]));
        let b = total_loss(&pred, &gts, &m, &seg_logits, &seg_target, &w).unwrap();
        let v = b.values();
        let expect = v.l_vis + w.w_x * v.l_x + w.w_z * v.l_z + w.w_cate * v.l_cate + w.w_seg * v.l_seg;
        assert_eq!(v.total, expect);
        assert!(v.l_vis >= 0.0 && v.l_x >= 0.0 && v.l_z >= 0.0 && v.l_cate >= 0.0 && v.l_seg >= 0.0);

        let bad = LossWeights { w_x: -1.0, ..w };
        assert!(total_loss(&pred, &gts, &m, &seg_logits, &seg_target, &bad).is_err());

        // paper weights on unit component losses: 1 + 2 + 10 + 10 + 5
        let unit = Tensor::scalar(1.0);
        let total = unit
            .add(&unit.mul_scalar(w.w_x))
            .add(&unit.mul_scalar(w.w_z))
            .add(&unit.mul_scalar(w.w_cate))
            .add(&unit.mul_scalar(w.w_seg));
        assert_eq!(total.item(), 28.0);
    }

    #[test]
    fn gt_permutation_leaves_total_loss_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gts: Vec<Lane3D> = (0..3)
            .map(|c| gt_lane(rng.gen_range(-4.0..4.0), c, &[true, true, true, true]))
            .collect();
        let xs: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.gen_range(-4.0..4.0); 4]).collect();
        let pred = pred_from(&xs, &[0, 1, 2, 3], 3);
        let w = LossWeights::default();
        let seg_logits = Tensor::leaf(ArrayD::zeros(IxDyn(&[1, 2, 2])));
        let seg_target = ArrayD::zeros(IxDyn(&[1, 2, 2]));
        let m1 = match_lanes(&pred, &gts, &w);
        let t1 = total_loss(&pred, &gts, &m1, &seg_logits, &seg_target, &w).unwrap().values().total;
        let mut rev = gts.clone();
        rev.reverse();
        let m2 = match_lanes(&pred, &rev, &w);
        let t2 = total_loss(&pred, &rev, &m2, &seg_logits, &seg_target, &w).unwrap().values().total;
        assert!((t1 - t2).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_fd_with_frozen_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gts = vec![
            gt_lane(1.0, 0, &[true, true, true, false]),
            gt_lane(-2.0, 2, &[true; 4]),
        ];
        let matches = MatchResult { pairs: vec![(0, 0), (1, 1)], unmatched_preds: vec![2] };
        let w = LossWeights::default();
        let seg_target = ArrayD::from_shape_fn(IxDyn(&[1, 2, 2]), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });

        let inputs = vec![
            ("x".to_string(), ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| rng.gen_range(-3.0..3.0))),
            ("z".to_string(), ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| rng.gen_range(-0.5..0.5))),
            ("vis".to_string(), ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| rng.gen_range(-1.0..1.0))),
            ("cat".to_string(), ArrayD::from_shape_fn(IxDyn(&[3, 4]), |_| rng.gen_range(-1.0..1.0))),
            ("seg".to_string(), ArrayD::from_shape_fn(IxDyn(&[1, 2, 2]), |_| rng.gen_range(-1.0..1.0))),
        ];
        let gts2 = gts.clone();
        let matches2 = matches.clone();
        let entries = check_named_fn(&inputs, DEFAULT_TOLERANCE, move |leaves| {
            let pred = LanePrediction {
                x: leaves[0].clone(),
                z: leaves[1].clone(),
                vis_logits: leaves[2].clone(),
                cat_logits: leaves[3].clone(),
                y_grid: Arc::new(grid()),
            };
            total_loss(&pred, &gts2, &matches2, &leaves[4], &seg_target, &w)
                .unwrap()
                .total
        });
        for e in &entries {
            assert!(e.pass, "{} rel err {}", e.name, e.max_rel_err);
        }
    }
}
