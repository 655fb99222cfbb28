//! Projective and rigid-motion math shared by the simulator, the cost-volume
//! warping and the decoder.
//!
//! Conventions (mirroring the OpenLane setup so ingestion is a relabeling):
//! - camera frame: x right, y down, z forward (depth);
//! - ego frame: x right, y forward (longitudinal), z up;
//! - a [`Pose`] maps points `X_out = R * X_in + t`.
//!
//! Continuous pixel coordinates put integer values at pixel centers. Crops and
//! rescales use the plain affine map `u' = (u - x0) * s`, and the intrinsics
//! returned by [`zoom_intrinsics`] / [`scale_intrinsics`] commute with that
//! map exactly.

use ndarray::{Array2, Array3, ArrayView3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("depth must be positive, got {depth}")]
    NonPositiveDepth { depth: f64 },
    #[error("degenerate crop rectangle {x0},{y0} {w}x{h}")]
    DegenerateCrop { x0: f64, y0: f64, w: f64, h: f64 },
    #[error("rotation is not orthonormal (max deviation {deviation:.3e})")]
    InvalidRotation { deviation: f64 },
}

/// Pinhole intrinsics. `width`/`height` bound the valid pixel domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self { fx, fy, cx, cy, width, height }
    }
}

/// Rigid transform: `X_out = rotation * X_in + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Row-major 3x3 rotation.
    pub rotation: [[f64; 3]; 3],
    /// Translation in meters.
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self { translation: t, ..Self::identity() }
    }

    /// Rotation about the ego z-axis (yaw), radians.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0, 0.0, 0.0],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let a = &self.rotation;
        let b = &other.rotation;
        let mut rotation = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Pose { rotation, translation: self.apply(other.translation) }
    }

    pub fn invert(&self) -> Pose {
        let r = &self.rotation;
        let t = &self.translation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Pose { rotation: rt, translation: ti }
    }

    /// Max-norm deviation of `RᵀR` from identity plus the determinant error.
    pub fn rotation_deviation(&self) -> f64 {
        let r = &self.rotation;
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut v = 0.0;
                for k in 0..3 {
                    v += r[k][i] * r[k][j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((v - target).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        dev.max((det - 1.0).abs())
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let deviation = self.rotation_deviation();
        if deviation < 1e-9 {
            Ok(())
        } else {
            Err(GeometryError::InvalidRotation { deviation })
        }
    }
}

/// Full camera description for one frame: intrinsics plus the transform chain
/// camera -> ego -> world.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub intrinsics: Intrinsics,
    pub cam_to_ego: Pose,
    pub ego_to_world: Pose,
}

impl CameraRig {
    pub fn cam_to_world(&self) -> Pose {
        self.ego_to_world.compose(&self.cam_to_ego)
    }

    /// Ego-frame point -> camera-frame point.
    pub fn ego_to_cam(&self, p_ego: [f64; 3]) -> [f64; 3] {
        self.cam_to_ego.invert().apply(p_ego)
    }
}

/// Projects a camera-frame point to (u, v, depth). Fails behind the camera.
pub fn project(k: &Intrinsics, x_cam: [f64; 3]) -> Result<(f64, f64, f64), GeometryError> {
    let z = x_cam[2];
    if z <= 0.0 {
        return Err(GeometryError::BehindCamera { z });
    }
    Ok((k.fx * x_cam[0] / z + k.cx, k.fy * x_cam[1] / z + k.cy, z))
}

/// Inverse of [`project`]: pixel plus depth back to a camera-frame point.
pub fn unproject(k: &Intrinsics, u: f64, v: f64, depth: f64) -> Result<[f64; 3], GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth { depth });
    }
    Ok([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])
}

/// Camera-to-camera transform: `X_dst_cam = T * X_src_cam` for any world point.
pub fn relative_pose(rig_src: &CameraRig, rig_dst: &CameraRig) -> Pose {
    rig_dst.cam_to_world().invert().compose(&rig_src.cam_to_world())
}

/// Sampling grid and validity mask for warping a source view into a
/// destination view at one depth hypothesis.
#[derive(Debug, Clone)]
pub struct WarpGrid {
    /// Shape (2, H, W): channel 0 holds source u, channel 1 source v.
    pub coords: Array3<f64>,
    /// True where the source coordinate lies inside the source image and in
    /// front of the source camera.
    pub valid: Array2<bool>,
}

/// For each destination pixel: unproject at `depth`, move into the source
/// camera with `t_rel.invert()` (destination -> source) and project with
/// `k_src`. `t_rel` must map source-camera points to destination-camera
/// points, i.e. the output of [`relative_pose`].
pub fn warp_grid(
    k_src: &Intrinsics,
    k_dst: &Intrinsics,
    t_rel: &Pose,
    depth: f64,
    out_size: (usize, usize),
) -> Result<WarpGrid, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::NonPositiveDepth { depth });
    }
    let (h, w) = out_size;
    let dst_to_src = t_rel.invert();
    let mut coords = Array3::zeros((2, h, w));
    let mut valid = Array2::from_elem((h, w), false);
    let max_u = k_src.width as f64 - 1.0;
    let max_v = k_src.height as f64 - 1.0;
    for v in 0..h {
        for u in 0..w {
            let x_dst = unproject(k_dst, u as f64, v as f64, depth)?;
            let x_src = dst_to_src.apply(x_dst);
            if x_src[2] > 1e-6 {
                let us = snap_to_bounds(k_src.fx * x_src[0] / x_src[2] + k_src.cx, max_u);
                let vs = snap_to_bounds(k_src.fy * x_src[1] / x_src[2] + k_src.cy, max_v);
                coords[[0, v, u]] = us;
                coords[[1, v, u]] = vs;
                valid[[v, u]] = us >= 0.0 && us <= max_u && vs >= 0.0 && vs <= max_v;
            } else {
                coords[[0, v, u]] = -1.0;
                coords[[1, v, u]] = -1.0;
            }
        }
    }
    Ok(WarpGrid { coords, valid })
}

/// Pulls coordinates within one part in 1e6 of the valid border onto it, so
/// exact identity warps do not lose edge pixels to rounding.
fn snap_to_bounds(v: f64, max: f64) -> f64 {
    if v < 0.0 && v > -1e-6 {
        0.0
    } else if v > max && v < max + 1e-6 {
        max
    } else {
        v
    }
}

/// Axis-aligned crop rectangle in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropRect {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

/// Intrinsics of a camera whose image is `crop` cut out of the original and
/// rescaled to `out_size` = (width, height). A point projecting to pixel `p`
/// under `k` projects to `(p - crop_origin) * scale` under the result.
pub fn zoom_intrinsics(
    k: &Intrinsics,
    crop: CropRect,
    out_size: (usize, usize),
) -> Result<Intrinsics, GeometryError> {
    let (ow, oh) = out_size;
    if crop.w <= 0.0
        || crop.h <= 0.0
        || ow == 0
        || oh == 0
        || crop.x0 < 0.0
        || crop.y0 < 0.0
        || crop.x0 + crop.w > k.width as f64 + 1e-9
        || crop.y0 + crop.h > k.height as f64 + 1e-9
    {
        return Err(GeometryError::DegenerateCrop { x0: crop.x0, y0: crop.y0, w: crop.w, h: crop.h });
    }
    let sx = ow as f64 / crop.w;
    let sy = oh as f64 / crop.h;
    Ok(Intrinsics {
        fx: k.fx * sx,
        fy: k.fy * sy,
        cx: (k.cx - crop.x0) * sx,
        cy: (k.cy - crop.y0) * sy,
        width: ow,
        height: oh,
    })
}

/// Intrinsics rescaled by (sx, sy), e.g. image resolution -> feature
/// resolution with `sx = sy = 1/stride`.
pub fn scale_intrinsics(k: &Intrinsics, sx: f64, sy: f64, out_size: (usize, usize)) -> Intrinsics {
    Intrinsics {
        fx: k.fx * sx,
        fy: k.fy * sy,
        cx: k.cx * sx,
        cy: k.cy * sy,
        width: out_size.0,
        height: out_size.1,
    }
}

/// Bilinear read of `map` (C, H, W) at continuous (u, v); neighbors outside
/// the image contribute zero. Returns None when (u, v) is entirely outside.
pub fn bilinear_at(map: &ArrayView3<'_, f64>, u: f64, v: f64, out: &mut [f64]) -> bool {
    let (c, h, w) = map.dim();
    debug_assert_eq!(out.len(), c);
    if !(u.is_finite() && v.is_finite()) || u < 0.0 || v < 0.0 || u > (w - 1) as f64 || v > (h - 1) as f64 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let x0 = u.floor();
    let y0 = v.floor();
    let fx = u - x0;
    let fy = v - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w01 = fx * (1.0 - fy);
    let w10 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    for (ci, o) in out.iter_mut().enumerate() {
        *o = w00 * map[[ci, y0, x0]]
            + w01 * map[[ci, y0, x1]]
            + w10 * map[[ci, y1, x0]]
            + w11 * map[[ci, y1, x1]];
    }
    true
}

/// Warps `src` (C, H, W) through a [`WarpGrid`]; invalid grid cells come out
/// as zeros. Returns the warped map and the per-pixel validity mask.
pub fn warp_image(src: &ArrayView3<'_, f64>, grid: &WarpGrid) -> (Array3<f64>, Array2<bool>) {
    let (c, _, _) = src.dim();
    let (_, h, w) = grid.coords.dim();
    let mut out = Array3::zeros((c, h, w));
    let mut mask = Array2::from_elem((h, w), false);
    let mut buf = vec![0.0; c];
    for v in 0..h {
        for u in 0..w {
            if grid.valid[[v, u]] {
                let gu = grid.coords[[0, v, u]];
                let gv = grid.coords[[1, v, u]];
                if bilinear_at(src, gu, gv, &mut buf) {
                    for ci in 0..c {
                        out[[ci, v, u]] = buf[ci];
                    }
                    mask[[v, u]] = true;
                }
            }
        }
    }
    (out, mask)
}
