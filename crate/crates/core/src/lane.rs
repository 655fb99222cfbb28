//! The 3D lane representation shared by the simulator, losses and metrics:
//! an ordered set of points at a fixed longitudinal grid plus a category and
//! per-point visibility.

use serde::{Deserialize, Serialize};

/// One 3D lane sampled on the shared y-grid (ego frame, meters).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lane3D {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub zs: Vec<f64>,
    pub visibility: Vec<bool>,
    pub category: usize,
}

impl Lane3D {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|v| **v).count()
    }
}

/// `n` longitudinal sample positions evenly spaced over `[start, end]`,
/// endpoints included.
pub fn y_grid(start: f64, end: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "y-grid needs at least two points");
    assert!(start < end, "y-grid range must be increasing");
    let step = (end - start) / (n - 1) as f64;
    (0..n).map(|i| start + step * i as f64).collect()
}
