//! Lane-level evaluation: one-to-one matching under the "75% of mutually
//! visible points within 1.5 m" rule, F1 / precision / recall, category
//! accuracy over matched pairs, and x/z errors split at the 40 m near/far
//! boundary. An exhaustive reference evaluator backs the fast path in tests.

use crate::lane::Lane3D;
use crate::loss::hungarian;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Point distance threshold in the x-z plane, meters.
    pub dist_threshold: f64,
    /// Fraction of mutually visible points that must fall under the
    /// threshold for a lane pair to match.
    pub match_fraction: f64,
    /// Near/far longitudinal split, meters.
    pub near_limit: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { dist_threshold: 1.5, match_fraction: 0.75, near_limit: 40.0 }
    }
}

/// Aggregated evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub category_accuracy: f64,
    pub x_err_near: f64,
    pub x_err_far: f64,
    pub z_err_near: f64,
    pub z_err_far: f64,
    pub matched: usize,
    pub pred_count: usize,
    pub gt_count: usize,
    /// Free-form scenario tag passed through from the caller.
    pub tag: Option<String>,
}

/// Per-point distances at mutually visible grid positions plus the match
/// verdict for one (pred, gt) pair.
pub fn lane_pair_distance(pred: &Lane3D, gt: &Lane3D, cfg: &MetricConfig) -> (Vec<f64>, bool) {
    let n = pred.len().min(gt.len());
    let mut dists = Vec::new();
    let mut close = 0usize;
    for i in 0..n {
        if pred.visibility[i] && gt.visibility[i] {
            let dx = pred.xs[i] - gt.xs[i];
            let dz = pred.zs[i] - gt.zs[i];
            let d = (dx * dx + dz * dz).sqrt();
            if d < cfg.dist_threshold {
                close += 1;
            }
            dists.push(d);
        }
    }
    if dists.is_empty() {
        return (dists, false);
    }
    let flag = close as f64 >= cfg.match_fraction * dists.len() as f64;
    (dists, flag)
}

/// Running sums that make per-frame evaluation parallelizable with a final
/// reduction.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    matched: usize,
    pred_count: usize,
    gt_count: usize,
    category_correct: usize,
    x_near_sum: f64,
    x_far_sum: f64,
    z_near_sum: f64,
    z_far_sum: f64,
    near_points: usize,
    far_points: usize,
}

impl MetricsAccumulator {
    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.matched += other.matched;
        self.pred_count += other.pred_count;
        self.gt_count += other.gt_count;
        self.category_correct += other.category_correct;
        self.x_near_sum += other.x_near_sum;
        self.x_far_sum += other.x_far_sum;
        self.z_near_sum += other.z_near_sum;
        self.z_far_sum += other.z_far_sum;
        self.near_points += other.near_points;
        self.far_points += other.far_points;
    }

    /// Adds one frame's predictions and ground truth.
    pub fn add_frame(&mut self, preds: &[Lane3D], gts: &[Lane3D], cfg: &MetricConfig) {
        self.pred_count += preds.len();
        self.gt_count += gts.len();
        if preds.is_empty() || gts.is_empty() {
            return;
        }
        // pair structure
        let mut flags = Array2::from_elem((preds.len(), gts.len()), false);
        let mut mean_dist = Array2::from_elem((preds.len(), gts.len()), f64::INFINITY);
        for (i, p) in preds.iter().enumerate() {
            for (j, g) in gts.iter().enumerate() {
                let (dists, flag) = lane_pair_distance(p, g, cfg);
                flags[[i, j]] = flag;
                if !dists.is_empty() {
                    mean_dist[[i, j]] = dists.iter().sum::<f64>() / dists.len() as f64;
                }
            }
        }
        // maximize matched count, tie-break by total distance: exact
        // assignment with a large penalty on non-matching pairs
        const BIG: f64 = 1e9;
        let cost = Array2::from_shape_fn((preds.len(), gts.len()), |(i, j)| {
            if flags[[i, j]] {
                mean_dist[[i, j]]
            } else {
                BIG
            }
        });
        let assignment = hungarian(&cost);
        for (i, &j) in assignment.iter().enumerate() {
            if j == usize::MAX || !flags[[i, j]] {
                continue;
            }
            self.matched += 1;
            if preds[i].category == gts[j].category {
                self.category_correct += 1;
            }
            let n = preds[i].len().min(gts[j].len());
            for k in 0..n {
                if preds[i].visibility[k] && gts[j].visibility[k] {
                    let dx = (preds[i].xs[k] - gts[j].xs[k]).abs();
                    let dz = (preds[i].zs[k] - gts[j].zs[k]).abs();
                    if gts[j].ys[k] <= cfg.near_limit {
                        self.x_near_sum += dx;
                        self.z_near_sum += dz;
                        self.near_points += 1;
                    } else {
                        self.x_far_sum += dx;
                        self.z_far_sum += dz;
                        self.far_points += 1;
                    }
                }
            }
        }
    }

    pub fn finalize(&self, tag: Option<String>) -> MetricsReport {
        let precision = if self.pred_count > 0 { self.matched as f64 / self.pred_count as f64 } else { 0.0 };
        let recall = if self.gt_count > 0 { self.matched as f64 / self.gt_count as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let category_accuracy = if self.matched > 0 { self.category_correct as f64 / self.matched as f64 } else { 0.0 };
        let avg = |sum: f64, n: usize| if n > 0 { sum / n as f64 } else { 0.0 };
        MetricsReport {
            schema_version: METRICS_SCHEMA_VERSION,
            f1,
            precision,
            recall,
            category_accuracy,
            x_err_near: avg(self.x_near_sum, self.near_points),
            x_err_far: avg(self.x_far_sum, self.far_points),
            z_err_near: avg(self.z_near_sum, self.near_points),
            z_err_far: avg(self.z_far_sum, self.far_points),
            matched: self.matched,
            pred_count: self.pred_count,
            gt_count: self.gt_count,
            tag,
        }
    }
}

/// Single-frame evaluation.
pub fn evaluate(preds: &[Lane3D], gts: &[Lane3D], cfg: &MetricConfig) -> MetricsReport {
    let mut acc = MetricsAccumulator::default();
    acc.add_frame(preds, gts, cfg);
    acc.finalize(None)
}

/// Exhaustive reference evaluator: enumerates every injective assignment,
/// maximizes the matched count and tie-breaks by total mean distance.
/// Exponential; test use only.
pub fn evaluate_bruteforce(preds: &[Lane3D], gts: &[Lane3D], cfg: &MetricConfig) -> MetricsReport {
    let np = preds.len();
    let ng = gts.len();
    let mut flags = vec![vec![false; ng]; np];
    let mut mean_dist = vec![vec![f64::INFINITY; ng]; np];
    for i in 0..np {
        for j in 0..ng {
            let (dists, flag) = lane_pair_distance(&preds[i], &gts[j], cfg);
            flags[i][j] = flag;
            if !dists.is_empty() {
                mean_dist[i][j] = dists.iter().sum::<f64>() / dists.len() as f64;
            }
        }
    }

    // enumerate assignments of preds to (gts + unmatched)
    let mut best_pairs: Vec<(usize, usize)> = Vec::new();
    let mut best_key = (0usize, f64::INFINITY); // (count, total dist)
    let mut current: Vec<(usize, usize)> = Vec::new();
    let mut used = vec![false; ng];

    fn rec(
        i: usize,
        np: usize,
        ng: usize,
        flags: &[Vec<bool>],
        mean_dist: &[Vec<f64>],
        used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        best_key: &mut (usize, f64),
        best_pairs: &mut Vec<(usize, usize)>,
    ) {
        if i == np {
            let count = current.len();
            let total: f64 = current.iter().map(|&(p, g)| mean_dist[p][g]).sum();
            if count > best_key.0 || (count == best_key.0 && total < best_key.1) {
                *best_key = (count, total);
                *best_pairs = current.clone();
            }
            return;
        }
        // leave pred i unmatched
        rec(i + 1, np, ng, flags, mean_dist, used, current, best_key, best_pairs);
        for j in 0..ng {
            if !used[j] && flags[i][j] {
                used[j] = true;
                current.push((i, j));
                rec(i + 1, np, ng, flags, mean_dist, used, current, best_key, best_pairs);
                current.pop();
                used[j] = false;
            }
        }
    }
    rec(0, np, ng, &flags, &mean_dist, &mut used, &mut current, &mut best_key, &mut best_pairs);

    let mut acc = MetricsAccumulator { pred_count: np, gt_count: ng, ..Default::default() };
    for &(i, j) in &best_pairs {
        acc.matched += 1;
        if preds[i].category == gts[j].category {
            acc.category_correct += 1;
        }
        let n = preds[i].len().min(gts[j].len());
        for k in 0..n {
            if preds[i].visibility[k] && gts[j].visibility[k] {
                let dx = (preds[i].xs[k] - gts[j].xs[k]).abs();
                let dz = (preds[i].zs[k] - gts[j].zs[k]).abs();
                if gts[j].ys[k] <= cfg.near_limit {
                    acc.x_near_sum += dx;
                    acc.z_near_sum += dz;
                    acc.near_points += 1;
                } else {
                    acc.x_far_sum += dx;
                    acc.z_far_sum += dz;
                    acc.far_points += 1;
                }
            }
        }
    }
    acc.finalize(None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> Vec<f64> {
        crate::lane::y_grid(3.0, 103.0, 20)
    }

    fn lane(x: f64, category: usize) -> Lane3D {
        let g = grid();
        Lane3D {
            xs: vec![x; g.len()],
            zs: vec![0.0; g.len()],
            visibility: vec![true; g.len()],
            category,
            ys: g,
        }
    }

    fn rand_lane(rng: &mut ChaCha8Rng) -> Lane3D {
        let g = grid();
        let x0 = rng.gen_range(-8.0..8.0);
        let slope = rng.gen_range(-0.03..0.03);
        let vis: Vec<bool> = (0..g.len()).map(|_| rng.gen_bool(0.85)).collect();
        let vis = if vis.iter().any(|v| *v) { vis } else { vec![true; g.len()] };
        Lane3D {
            xs: g.iter().map(|y| x0 + slope * y).collect(),
            zs: g.iter().map(|y| 0.002 * y + rng.gen_range(-0.05..0.05)).collect(),
            visibility: vis,
            category: rng.gen_range(0..4),
            ys: g,
        }
    }

    #[test]
    fn identical_lanes_match_with_zero_distance() {
        let l = lane(1.0, 2);
        let (d, flag) = lane_pair_distance(&l, &l, &MetricConfig::default());
        assert!(flag);
        assert!(d.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_meter_offset_fails_threshold() {
        let a = lane(0.0, 0);
        let b = lane(2.0, 0);
        let (d, flag) = lane_pair_distance(&a, &b, &MetricConfig::default());
        assert!(!flag);
        assert!(d.iter().all(|v| (*v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn partial_offset_matches_when_fraction_suffices() {
        // 80% of points 1 m off, 20% of points 2 m off -> still a match
        let gt = lane(0.0, 0);
        let mut pred = lane(1.0, 0);
        let n = pred.xs.len();
        let far_count = n / 5;
        for i in 0..far_count {
            pred.xs[i] = 2.0;
        }
        // independent recompute of the fraction
        let close = n - far_count;
        assert!(close as f64 >= 0.75 * n as f64);
        let (_, flag) = lane_pair_distance(&pred, &gt, &MetricConfig::default());
        assert!(flag);
    }

    #[test]
    fn disjoint_visibility_never_matches() {
        let g = grid();
        let mut a = lane(0.0, 0);
        let mut b = lane(0.0, 0);
        for i in 0..g.len() {
            a.visibility[i] = i % 2 == 0;
            b.visibility[i] = i % 2 == 1;
        }
        let (d, flag) = lane_pair_distance(&a, &b, &MetricConfig::default());
        assert!(d.is_empty());
        assert!(!flag);
    }

    #[test]
    fn perfect_predictions_score_one() {
        let gts = vec![lane(-3.5, 0), lane(0.0, 1), lane(3.5, 2)];
        let r = evaluate(&gts, &gts, &MetricConfig::default());
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.category_accuracy, 1.0);
        assert_eq!(r.x_err_near, 0.0);
        assert_eq!(r.x_err_far, 0.0);
        assert_eq!(r.z_err_near, 0.0);
        assert_eq!(r.z_err_far, 0.0);
        assert_eq!(r.matched, 3);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let gts = vec![lane(0.0, 0)];
        let r = evaluate(&[], &gts, &MetricConfig::default());
        assert_eq!(r.f1, 0.0);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.pred_count, 0);
        let r = evaluate(&[], &[], &MetricConfig::default());
        assert_eq!(r.f1, 0.0);
        assert_eq!(r.gt_count, 0);
    }

    #[test]
    fn swapping_sides_swaps_precision_and_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            let preds: Vec<Lane3D> = (0..3).map(|_| rand_lane(&mut rng)).collect();
            let gts: Vec<Lane3D> = (0..2).map(|_| rand_lane(&mut rng)).collect();
            let a = evaluate(&preds, &gts, &MetricConfig::default());
            let b = evaluate(&gts, &preds, &MetricConfig::default());
            assert!((a.precision - b.recall).abs() < 1e-12);
            assert!((a.recall - b.precision).abs() < 1e-12);
            assert!((a.f1 - b.f1).abs() < 1e-12);
        }
    }

    #[test]
    fn spurious_prediction_never_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let gts: Vec<Lane3D> = (0..2).map(|_| rand_lane(&mut rng)).collect();
            let mut preds = gts.clone();
            let base = evaluate(&preds, &gts, &MetricConfig::default());
            // a lane far away from everything
            preds.push(lane(13.5, 0));
            let spoiled = evaluate(&preds, &gts, &MetricConfig::default());
            assert!(spoiled.precision <= base.precision + 1e-12);
            assert!(spoiled.f1 <= base.f1 + 1e-12);
        }
    }

    #[test]
    fn fast_evaluator_equals_bruteforce_on_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MetricConfig::default();
        for _ in 0..100 {
            let np = rng.gen_range(0..=5usize);
            let ng = rng.gen_range(0..=5usize);
            let preds: Vec<Lane3D> = (0..np).map(|_| rand_lane(&mut rng)).collect();
            let gts: Vec<Lane3D> = (0..ng).map(|_| rand_lane(&mut rng)).collect();
            let fast = evaluate(&preds, &gts, &cfg);
            let brute = evaluate_bruteforce(&preds, &gts, &cfg);
            assert_eq!(fast, brute, "preds={np} gts={ng}");
        }
    }

    #[test]
    fn near_far_split_uses_y_limit() {
        let g = grid();
        let gt = lane(0.0, 0);
        let mut pred = lane(0.0, 0);
        for (i, y) in g.iter().enumerate() {
            pred.xs[i] = if *y <= 40.0 { 0.1 } else { 0.3 };
        }
        let r = evaluate(&[pred], &[gt], &MetricConfig::default());
        assert!((r.x_err_near - 0.1).abs() < 1e-12);
        assert!((r.x_err_far - 0.3).abs() < 1e-12);
    }
}
