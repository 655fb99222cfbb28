//! Procedural driving-scene simulator with exact geometric ground truth.
//!
//! Scenes are a handful of polynomial lanes painted onto an analytic curved
//! ground surface `z = g(y)`, viewed by a forward camera on a translating ego.
//! Rendering ray-casts the ground per pixel and evaluates world-anchored
//! paint there:
//!
//! - the lane channel is a compact smooth stripe around each lane centerline,
//! - two texture channels are sums of sinusoids in world (x, y).
//!
//! Both are box-filtered analytically over the pixel's ground footprint, so
//! images of the same ground patch agree across viewpoints (Lambertian world)
//! and the depth map inverts exactly. That property is the photometric oracle
//! the cost-volume tests lean on: warping one frame into another at
//! ground-truth depth must reproduce it.

use crate::geometry::{project, relative_pose, unproject, CameraRig, Intrinsics, Pose};
use crate::lane::{y_grid, Lane3D};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("frame_count must be at least 2, got {0}")]
    FrameCountTooSmall(usize),
    #[error("empty lane-count range [{0}, {1}]")]
    EmptyLaneRange(usize, usize),
    #[error("frame index {idx} out of range (frame_count {count})")]
    FrameOutOfRange { idx: usize, count: usize },
    #[error("y-grid must be non-empty and strictly increasing")]
    BadYGrid,
    #[error("lane sampling requires a translation-only ego pose")]
    RotatingEgo,
    #[error("ego motion {motion:.2} m exceeds configured max {max:.2} m per frame")]
    ExcessiveMotion { motion: f64, max: f64 },
}

/// Camera placement shared by every frame of a scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSettings {
    pub focal_px: f64,
    pub width: usize,
    pub height: usize,
    /// Camera center above the local ground, meters.
    pub cam_height: f64,
}

impl CameraSettings {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal_px,
            fy: self.focal_px,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

/// World-paint parameters of the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaintSettings {
    /// Half-width of the painted lane stripe, meters.
    pub stripe_halfwidth: f64,
    /// Half-width of the flat core of the stripe, meters. The profile is 1
    /// inside the core and falls smoothly to 0 at the stripe edge; the flat
    /// core keeps resampled views photometrically identical at lane centers.
    pub stripe_plateau: f64,
    /// Half-width of the segmentation annotation band, meters. Kept well
    /// below the stripe so every annotated pixel unprojects onto the curve.
    pub seg_halfwidth: f64,
    /// Ground hits beyond this depth render as sky.
    pub max_render_depth: f64,
    /// Reconstruction-filter width in pixel footprints. Values above 1 blur
    /// slightly more than one pixel, which keeps strongly foreshortened
    /// regions (one image row can span meters of ground) reconstructable by
    /// bilinear resampling instead of aliasing.
    pub footprint_scale: f64,
}

/// One sinusoidal texture component in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextureWave {
    pub kx: f64,
    pub ky: f64,
    pub phase: f64,
    pub amp: f64,
}

/// Continuous generator of one lane: polynomial x(y) and z(y) in world
/// coordinates over a longitudinal validity range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaneSpec {
    /// x(y) = c0 + c1 y + c2 y^2 + c3 y^3
    pub ground_curve: [f64; 4],
    /// z(y) = h0 + h1 y + h2 y^2
    pub height_curve: [f64; 3],
    pub y_range: [f64; 2],
    pub category: usize,
}

impl LaneSpec {
    pub fn x_at(&self, y: f64) -> f64 {
        let c = &self.ground_curve;
        c[0] + y * (c[1] + y * (c[2] + y * c[3]))
    }

    pub fn dx_at(&self, y: f64) -> f64 {
        let c = &self.ground_curve;
        c[1] + y * (2.0 * c[2] + y * 3.0 * c[3])
    }

    pub fn z_at(&self, y: f64) -> f64 {
        let h = &self.height_curve;
        h[0] + y * (h[1] + y * h[2])
    }

    pub fn in_range(&self, y: f64) -> bool {
        y >= self.y_range[0] && y <= self.y_range[1]
    }
}

/// A fully specified multi-frame scene. Everything needed to re-render it is
/// embedded, so `scene.json` round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub lanes: Vec<LaneSpec>,
    /// Ego-to-world pose per frame; translation-only by construction.
    pub ego_trajectory: Vec<Pose>,
    pub texture_seed: u64,
    pub frame_count: usize,
    pub camera: CameraSettings,
    pub paint: PaintSettings,
    /// Scene-wide ground profile z = g0 + g1 y + g2 y^2 shared by all lanes.
    pub ground_height: [f64; 3],
    pub y_grid: Vec<f64>,
    pub texture: [Vec<TextureWave>; 2],
    pub num_categories: usize,
}

impl SceneSpec {
    pub fn ground_z(&self, y: f64) -> f64 {
        let g = &self.ground_height;
        g[0] + y * (g[1] + y * g[2])
    }

    /// Pinhole rig of one frame.
    pub fn frame_rig(&self, frame_idx: usize) -> Result<CameraRig, SimError> {
        if frame_idx >= self.frame_count {
            return Err(SimError::FrameOutOfRange { idx: frame_idx, count: self.frame_count });
        }
        Ok(CameraRig {
            intrinsics: self.camera.intrinsics(),
            cam_to_ego: cam_to_ego(self.camera.cam_height),
            ego_to_world: self.ego_trajectory[frame_idx],
        })
    }
}

/// Camera axes (x right, y down, z forward) expressed in ego axes
/// (x right, y forward, z up), camera `h` meters above the ego origin.
pub fn cam_to_ego(h: f64) -> Pose {
    Pose {
        rotation: [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, 0.0]],
        translation: [0.0, 0.0, h],
    }
}

/// Generation knobs. Defaults give the desk-scale world used across tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub focal_px: f64,
    pub cam_height: f64,
    pub frame_count: usize,
    pub lane_count_min: usize,
    pub lane_count_max: usize,
    pub lane_spacing: f64,
    pub road_half_width: f64,
    /// Max |c1| of the road centerline.
    pub slope_bound: f64,
    /// Max |c2|; the cubic term is bounded by `curvature_bound / 60`.
    pub curvature_bound: f64,
    pub max_elevation: f64,
    pub height_linear_bound: f64,
    pub height_quad_bound: f64,
    /// Longitudinal extent of generated lanes, world meters.
    pub lane_y_min: f64,
    pub lane_y_max: f64,
    /// Probability that a non-central lane ends early (tests lane visibility).
    pub short_lane_prob: f64,
    /// Probability of adding one short distant lane stub (y in
    /// [stub_y_min, stub_y_max]) that is only resolvable up close.
    pub distant_stub_prob: f64,
    pub stub_y_min: f64,
    pub stub_y_max: f64,
    /// Ego forward speed per frame, meters.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Ego lateral drift per frame, meters (signed range).
    pub drift_min: f64,
    pub drift_max: f64,
    pub max_motion_per_frame: f64,
    pub num_categories: usize,
    pub stripe_halfwidth: f64,
    pub stripe_plateau: f64,
    pub seg_halfwidth: f64,
    pub max_render_depth: f64,
    pub footprint_scale: f64,
    pub texture_waves: usize,
    pub texture_wavelength_min: f64,
    pub texture_wavelength_max: f64,
    pub y_grid_start: f64,
    pub y_grid_end: f64,
    pub y_grid_points: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            image_width: 96,
            image_height: 72,
            focal_px: 86.0,
            cam_height: 1.6,
            frame_count: 4,
            lane_count_min: 2,
            lane_count_max: 5,
            lane_spacing: 3.5,
            road_half_width: 14.0,
            slope_bound: 0.03,
            curvature_bound: 0.0012,
            max_elevation: 1.5,
            height_linear_bound: 0.008,
            height_quad_bound: 6e-5,
            lane_y_min: -10.0,
            lane_y_max: 140.0,
            short_lane_prob: 0.25,
            distant_stub_prob: 0.0,
            stub_y_min: 65.0,
            stub_y_max: 130.0,
            speed_min: 1.5,
            speed_max: 3.5,
            drift_min: -0.15,
            drift_max: 0.15,
            max_motion_per_frame: 12.0,
            num_categories: 4,
            stripe_halfwidth: 0.5,
            stripe_plateau: 0.22,
            seg_halfwidth: 0.04,
            max_render_depth: 300.0,
            footprint_scale: 2.0,
            texture_waves: 24,
            texture_wavelength_min: 1.0,
            texture_wavelength_max: 16.0,
            y_grid_start: 3.0,
            y_grid_end: 103.0,
            y_grid_points: 20,
        }
    }
}

impl SimConfig {
    /// Scene preset for the photometric and cost-volume oracles: motion is
    /// lateral-dominant, which keeps per-pixel ground footprints (and hence
    /// filtered paint) nearly identical across the frame pair while providing
    /// a stereo baseline of at least half a meter.
    pub fn photometric_oracle() -> Self {
        Self { speed_min: 0.6, speed_max: 1.4, drift_min: 0.5, drift_max: 0.65, ..Self::default() }
    }

    /// Scene preset for depth-from-cost-volume checks: a full one-meter-class
    /// lateral baseline and finer texture sharpen the per-bin cost ordering.
    pub fn stereo_oracle() -> Self {
        Self {
            speed_min: 0.3,
            speed_max: 0.9,
            drift_min: 1.1,
            drift_max: 1.5,
            texture_wavelength_min: 0.55,
            ..Self::default()
        }
    }
}

/// One rendered frame with all ground truth attached.
#[derive(Debug, Clone)]
pub struct FrameSample {
    /// (H, W, C) intensities in [0, 1]: lane paint, texture A, texture B.
    pub image: Array3<f32>,
    /// (H, W) camera-frame depth in meters; 0 marks sky / no ground hit.
    pub depth: Array2<f32>,
    /// (H, W) 1 where the pixel-center ray lands inside a lane annotation
    /// band.
    pub seg: Array2<u8>,
    pub rig: CameraRig,
    /// Scene lanes in this frame's ego coordinates, sampled on the y-grid.
    pub lanes: Vec<Lane3D>,
    pub timestamp: usize,
}

impl FrameSample {
    pub fn channels(&self) -> usize {
        self.image.dim().2
    }

    /// Image as (C, H, W) f64 for the model and warp oracles.
    pub fn image_chw(&self) -> Array3<f64> {
        let (h, w, c) = self.image.dim();
        Array3::from_shape_fn((c, h, w), |(ci, y, x)| self.image[[y, x, ci]] as f64)
    }
}

fn rand_signed(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound <= 0.0 {
        0.0
    } else {
        rng.gen_range(-bound..=bound)
    }
}

/// Deterministically generates a scene from `(seed, config)`.
pub fn generate_scene(seed: u64, cfg: &SimConfig) -> Result<SceneSpec, SimError> {
    if cfg.frame_count < 2 {
        return Err(SimError::FrameCountTooSmall(cfg.frame_count));
    }
    if cfg.lane_count_min > cfg.lane_count_max || cfg.lane_count_max == 0 {
        return Err(SimError::EmptyLaneRange(cfg.lane_count_min, cfg.lane_count_max));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Road centerline.
    let c0: f64 = rng.gen_range(-1.0..=1.0);
    let mut c1 = rand_signed(&mut rng, cfg.slope_bound);
    let mut c2 = rand_signed(&mut rng, cfg.curvature_bound);
    let mut c3 = rand_signed(&mut rng, cfg.curvature_bound / 60.0);

    let lane_count = rng.gen_range(cfg.lane_count_min..=cfg.lane_count_max);
    let max_offset = cfg.lane_spacing * (lane_count as f64 - 1.0) / 2.0 + c0.abs();
    let allowed = (cfg.road_half_width - max_offset).max(0.5);

    // Clamp the curve so every lane stays inside the road half-width.
    let mut extent: f64 = 0.0;
    let mut y = cfg.lane_y_min;
    while y <= cfg.lane_y_max {
        extent = extent.max((c1 * y + c2 * y * y + c3 * y * y * y).abs());
        y += 5.0;
    }
    if extent > allowed {
        let s = allowed / extent;
        c1 *= s;
        c2 *= s;
        c3 *= s;
    }

    // Scene-wide ground profile, clamped to the elevation budget.
    let mut h1 = rand_signed(&mut rng, cfg.height_linear_bound);
    let mut h2 = rand_signed(&mut rng, cfg.height_quad_bound);
    let mut zmax: f64 = 0.0;
    let mut y = cfg.lane_y_min;
    while y <= cfg.lane_y_max {
        zmax = zmax.max((h1 * y + h2 * y * y).abs());
        y += 5.0;
    }
    if zmax > cfg.max_elevation {
        let s = cfg.max_elevation / zmax;
        h1 *= s;
        h2 *= s;
    }
    let ground_height = [0.0, h1, h2];

    let mut lanes = Vec::with_capacity(lane_count + 1);
    for i in 0..lane_count {
        let offset = (i as f64 - (lane_count as f64 - 1.0) / 2.0) * cfg.lane_spacing;
        let mut y_range = [cfg.lane_y_min, cfg.lane_y_max];
        // Keep the central lane full-length so the trajectory stays covered.
        let central = (offset).abs() < cfg.lane_spacing * 0.6;
        if !central && rng.gen_range(0.0..1.0) < cfg.short_lane_prob {
            y_range[1] = rng.gen_range(55.0..95.0);
        }
        let category = rng.gen_range(0..cfg.num_categories.max(1));
        lanes.push(LaneSpec {
            ground_curve: [c0 + offset, c1, c2, c3],
            height_curve: ground_height,
            y_range,
            category,
        });
    }

    if rng.gen_range(0.0..1.0) < cfg.distant_stub_prob {
        // A short, laterally slanted stub that exists only in the distance.
        let side = if rng.gen_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
        let slope = side * rng.gen_range(0.05..0.11);
        let x_mid = c0 + rand_signed(&mut rng, 2.0);
        let y_mid = 0.5 * (cfg.stub_y_min + cfg.stub_y_max);
        let category = rng.gen_range(0..cfg.num_categories.max(1));
        lanes.push(LaneSpec {
            ground_curve: [x_mid - slope * y_mid, c1 + slope, c2, c3],
            height_curve: ground_height,
            y_range: [cfg.stub_y_min, cfg.stub_y_max],
            category,
        });
    }

    // Translation-only ego trajectory following the central lane.
    let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
    let drift = if cfg.drift_max > cfg.drift_min {
        rng.gen_range(cfg.drift_min..=cfg.drift_max)
    } else {
        cfg.drift_min
    };
    let motion = (speed * speed + drift * drift).sqrt();
    if motion > cfg.max_motion_per_frame {
        return Err(SimError::ExcessiveMotion { motion, max: cfg.max_motion_per_frame });
    }
    let mut ego_trajectory = Vec::with_capacity(cfg.frame_count);
    for i in 0..cfg.frame_count {
        let yi = speed * i as f64;
        let xi = c0 + c1 * yi + c2 * yi * yi + c3 * yi * yi * yi + drift * i as f64;
        let zi = h1 * yi + h2 * yi * yi;
        ego_trajectory.push(Pose::from_translation([xi, yi, zi]));
    }

    let texture_seed: u64 = rng.gen();
    let texture = [
        texture_bank(texture_seed, 0, cfg),
        texture_bank(texture_seed, 1, cfg),
    ];

    Ok(SceneSpec {
        lanes,
        ego_trajectory,
        texture_seed,
        frame_count: cfg.frame_count,
        camera: CameraSettings {
            focal_px: cfg.focal_px,
            width: cfg.image_width,
            height: cfg.image_height,
            cam_height: cfg.cam_height,
        },
        paint: PaintSettings {
            stripe_halfwidth: cfg.stripe_halfwidth,
            stripe_plateau: cfg.stripe_plateau,
            seg_halfwidth: cfg.seg_halfwidth,
            max_render_depth: cfg.max_render_depth,
            footprint_scale: cfg.footprint_scale,
        },
        ground_height,
        y_grid: y_grid(cfg.y_grid_start, cfg.y_grid_end, cfg.y_grid_points),
        texture: texture,
        num_categories: cfg.num_categories,
    })
}

fn texture_bank(texture_seed: u64, channel: u64, cfg: &SimConfig) -> Vec<TextureWave> {
    let mut rng = ChaCha8Rng::seed_from_u64(texture_seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(channel + 1)));
    let mut waves = Vec::with_capacity(cfg.texture_waves);
    let ln_min = cfg.texture_wavelength_min.ln();
    let ln_max = cfg.texture_wavelength_max.ln();
    for _ in 0..cfg.texture_waves {
        let lambda = rng.gen_range(ln_min..ln_max).exp();
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let k = std::f64::consts::TAU / lambda;
        waves.push(TextureWave {
            kx: k * theta.cos(),
            ky: k * theta.sin(),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: lambda.powf(1.0),
        });
    }
    waves
}

/// Lane intensity by category: distinct levels in [0.28, 1.0] so the class is
/// recoverable from appearance.
pub fn category_intensity(category: usize, num_categories: usize) -> f64 {
    if num_categories <= 1 {
        return 1.0;
    }
    1.0 - 0.72 * category as f64 / (num_categories as f64 - 1.0)
}

/// Samples one lane on the y-grid in the coordinates of a translation-only
/// ego pose. Grid values are ego-frame longitudinal positions; visibility is
/// false where the corresponding world y falls outside the lane's range.
pub fn sample_lane_points(lane: &LaneSpec, ego_pose: &Pose, grid: &[f64]) -> Result<Lane3D, SimError> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::BadYGrid);
    }
    if ego_pose.rotation_deviation() > 1e-12
        || ego_pose
            .rotation
            .iter()
            .enumerate()
            .any(|(i, row)| row.iter().enumerate().any(|(j, v)| (v - if i == j { 1.0 } else { 0.0 }).abs() > 1e-12))
    {
        return Err(SimError::RotatingEgo);
    }
    let t = ego_pose.translation;
    let mut xs = Vec::with_capacity(grid.len());
    let mut ys = Vec::with_capacity(grid.len());
    let mut zs = Vec::with_capacity(grid.len());
    let mut visibility = Vec::with_capacity(grid.len());
    for &y_ego in grid {
        let y_world = y_ego + t[1];
        xs.push(lane.x_at(y_world) - t[0]);
        ys.push(y_ego);
        zs.push(lane.z_at(y_world) - t[2]);
        visibility.push(lane.in_range(y_world));
    }
    Ok(Lane3D { xs, ys, zs, visibility, category: lane.category })
}

/// Ray/ground intersection. `origin` and `dir` are world-frame; `dir` is
/// scaled so its camera-frame z component is 1, making the returned t equal
/// to camera depth.
fn intersect_ground(scene: &SceneSpec, origin: [f64; 3], dir: [f64; 3], t_min: f64, t_max: f64) -> Option<(f64, [f64; 3])> {
    let [_, h1, h2] = scene.ground_height;
    let (oy, oz) = (origin[1], origin[2]);
    let (dy, dz) = (dir[1], dir[2]);
    let a = h2 * dy * dy;
    let b = 2.0 * h2 * oy * dy + h1 * dy - dz;
    let c = h2 * oy * oy + h1 * oy - oz + scene.ground_height[0];
    let mut best: Option<f64> = None;
    if a.abs() < 1e-14 {
        if b.abs() > 1e-14 {
            let t = -c / b;
            if t >= t_min && t <= t_max {
                best = Some(t);
            }
        }
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                if t >= t_min && t <= t_max && best.map_or(true, |bt| t < bt) {
                    best = Some(t);
                }
            }
        }
    }
    best.map(|t| {
        (
            t,
            [origin[0] + t * dir[0], origin[1] + t * dir[1], origin[2] + t * dir[2]],
        )
    })
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        1.0
    } else {
        x.sin() / x
    }
}

/// Second antiderivative of the plateau stripe profile: the profile is 1 on
/// [-p, p], falls as (1 - t^2)^2 with t = (|s| - p) / (w - p) out to |s| = w,
/// and is 0 beyond. The result is even with value 0 at 0.
fn stripe_integral2(s: f64, w: f64, p: f64) -> f64 {
    let s = s.abs();
    if s <= p {
        return 0.5 * s * s;
    }
    let edge = w - p;
    if s <= w {
        let t = (s - p) / edge;
        let qq = 0.5 * t * t - t.powi(4) / 6.0 + t.powi(6) / 30.0;
        0.5 * p * p + p * (s - p) + edge * edge * qq
    } else {
        let at_w = 0.5 * p * p + p * edge + edge * edge * (0.5 - 1.0 / 6.0 + 1.0 / 30.0);
        let slope = p + edge * 8.0 / 15.0;
        at_w + slope * (s - w)
    }
}

/// Stripe profile filtered by the separable footprint boxes `fa` x `fb`
/// (an exact trapezoid filter), centered at lateral distance `d`.
fn filtered_stripe(d: f64, w: f64, p: f64, fa: f64, fb: f64) -> f64 {
    let fa = fa.max(1e-6);
    let fb = fb.max(1e-6);
    let h1 = 0.5 * (fa + fb);
    let h2 = 0.5 * (fa - fb);
    (stripe_integral2(d + h1, w, p) - stripe_integral2(d + h2, w, p) - stripe_integral2(d - h2, w, p)
        + stripe_integral2(d - h1, w, p))
        / (fa * fb)
}

/// Fraction of the interval [y - fw/2, y + fw/2] inside [lo, hi].
fn coverage(y: f64, fw: f64, lo: f64, hi: f64) -> f64 {
    let fw = fw.max(1e-6);
    let a = (y - 0.5 * fw).max(lo);
    let b = (y + 0.5 * fw).min(hi);
    ((b - a) / fw).clamp(0.0, 1.0)
}

struct GroundHit {
    depth: f64,
    point: [f64; 3],
}

fn cast(scene: &SceneSpec, cam_to_world: &Pose, k: &Intrinsics, u: f64, v: f64) -> Option<GroundHit> {
    let dir_cam = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
    let r = &cam_to_world.rotation;
    let dir = [
        r[0][0] * dir_cam[0] + r[0][1] * dir_cam[1] + r[0][2] * dir_cam[2],
        r[1][0] * dir_cam[0] + r[1][1] * dir_cam[1] + r[1][2] * dir_cam[2],
        r[2][0] * dir_cam[0] + r[2][1] * dir_cam[1] + r[2][2] * dir_cam[2],
    ];
    let origin = cam_to_world.translation;
    intersect_ground(scene, origin, dir, 0.5, scene.paint.max_render_depth)
        .map(|(depth, point)| GroundHit { depth, point })
}

/// Paint evaluated at a ground point with analytic box filtering over the
/// footprint spanned by `eu`, `ev` (world-space pixel edge vectors).
fn shade(scene: &SceneSpec, p: [f64; 3], eu: [f64; 2], ev: [f64; 2], out: &mut [f32]) {
    let fs = scene.paint.footprint_scale;
    let eu = [eu[0] * fs, eu[1] * fs];
    let ev = [ev[0] * fs, ev[1] * fs];
    // Lane channel: strongest filtered stripe across lanes.
    let w = scene.paint.stripe_halfwidth;
    let mut lane_val = 0.0f64;
    let fy = eu[1].abs() + ev[1].abs();
    for lane in &scene.lanes {
        let frac = coverage(p[1], fy, lane.y_range[0], lane.y_range[1]);
        if frac <= 0.0 {
            continue;
        }
        let d = p[0] - lane.x_at(p[1]);
        let slope = lane.dx_at(p[1]);
        let fa = (eu[0] - slope * eu[1]).abs();
        let fb = (ev[0] - slope * ev[1]).abs();
        if d.abs() > w + 0.5 * (fa + fb) {
            continue;
        }
        let v = filtered_stripe(d, w, scene.paint.stripe_plateau, fa, fb)
            * frac
            * category_intensity(lane.category, scene.num_categories);
        lane_val = lane_val.max(v);
    }
    out[0] = lane_val as f32;

    // Texture channels: sinusoids attenuated by the footprint sinc factors.
    for (ci, bank) in scene.texture.iter().enumerate() {
        let mut acc = 0.0;
        let mut norm = 0.0;
        for wv in bank {
            let ku = wv.kx * eu[0] + wv.ky * eu[1];
            let kv = wv.kx * ev[0] + wv.ky * ev[1];
            let atten = sinc(0.5 * ku) * sinc(0.5 * kv);
            acc += wv.amp * atten * (wv.kx * p[0] + wv.ky * p[1] + wv.phase).sin();
            norm += wv.amp;
        }
        out[ci + 1] = (0.5 + 0.5 * acc / norm.max(1e-12)) as f32;
    }
}

/// Renders one frame through the scene's own camera.
pub fn render_frame(scene: &SceneSpec, frame_idx: usize) -> Result<FrameSample, SimError> {
    let rig = scene.frame_rig(frame_idx)?;
    render_with_rig(scene, frame_idx, &rig)
}

/// Renders one frame through an arbitrary intrinsics (same pose), e.g. the
/// zoomed camera of a synthetic future view.
pub fn render_frame_with_intrinsics(
    scene: &SceneSpec,
    frame_idx: usize,
    intrinsics: &Intrinsics,
) -> Result<FrameSample, SimError> {
    let mut rig = scene.frame_rig(frame_idx)?;
    rig.intrinsics = *intrinsics;
    render_with_rig(scene, frame_idx, &rig)
}

fn render_with_rig(scene: &SceneSpec, frame_idx: usize, rig: &CameraRig) -> Result<FrameSample, SimError> {
    let k = rig.intrinsics;
    let (w, h) = (k.width, k.height);
    let cam_to_world = rig.cam_to_world();
    let mut image = Array3::<f32>::zeros((h, w, 3));
    let mut depth = Array2::<f32>::zeros((h, w));
    let mut seg = Array2::<u8>::zeros((h, w));
    let mut px = [0.0f32; 3];

    for v in 0..h {
        for u in 0..w {
            let (uf, vf) = (u as f64, v as f64);
            let Some(hit) = cast(scene, &cam_to_world, &k, uf, vf) else {
                image[[v, u, 1]] = 0.5;
                image[[v, u, 2]] = 0.5;
                continue;
            };
            depth[[v, u]] = hit.depth as f32;

            // Ground footprint of the pixel from half-offset rays; when a
            // half ray misses (horizon), fall back to a huge footprint which
            // fades the paint out smoothly.
            let pu0 = cast(scene, &cam_to_world, &k, uf - 0.5, vf);
            let pu1 = cast(scene, &cam_to_world, &k, uf + 0.5, vf);
            let pv0 = cast(scene, &cam_to_world, &k, uf, vf - 0.5);
            let pv1 = cast(scene, &cam_to_world, &k, uf, vf + 0.5);
            let eu = match (pu0, pu1) {
                (Some(a), Some(b)) => [b.point[0] - a.point[0], b.point[1] - a.point[1]],
                _ => [1e3, 1e3],
            };
            let ev = match (pv0, pv1) {
                (Some(a), Some(b)) => [b.point[0] - a.point[0], b.point[1] - a.point[1]],
                _ => [1e3, 1e3],
            };
            shade(scene, hit.point, eu, ev, &mut px);
            image[[v, u, 0]] = px[0];
            image[[v, u, 1]] = px[1];
            image[[v, u, 2]] = px[2];

            let in_band = scene.lanes.iter().any(|lane| {
                lane.in_range(hit.point[1])
                    && (hit.point[0] - lane.x_at(hit.point[1])).abs() <= scene.paint.seg_halfwidth
            });
            if in_band {
                seg[[v, u]] = 1;
            }
        }
    }

    let ego = scene.ego_trajectory[frame_idx];
    let lanes = scene
        .lanes
        .iter()
        .map(|lane| sample_lane_points(lane, &ego, &scene.y_grid))
        .collect::<Result<Vec<_>, _>>()?;

    Ok(FrameSample { image, depth, seg, rig: *rig, lanes, timestamp: frame_idx })
}

/// Ground-truth-depth warp oracle: resamples `source`'s image at the
/// positions where `target`'s pixels land in the source view. Co-visible
/// static pixels must come back with near-identical intensities.
pub fn photometric_warp(target: &FrameSample, source: &FrameSample) -> (Array3<f64>, Array2<bool>) {
    let (h, w, c) = target.image.dim();
    let t_rel = relative_pose(&target.rig, &source.rig);
    let src = source.image_chw();
    let mut warped = Array3::<f64>::zeros((c, h, w));
    let mut mask = Array2::from_elem((h, w), false);
    let mut buf = vec![0.0f64; c];
    for v in 0..h {
        for u in 0..w {
            let d = target.depth[[v, u]] as f64;
            if d <= 0.0 {
                continue;
            }
            let Ok(x_t) = unproject(&target.rig.intrinsics, u as f64, v as f64, d) else { continue };
            let x_s = t_rel.apply(x_t);
            let Ok((us, vs, _)) = project(&source.rig.intrinsics, x_s) else { continue };
            if crate::geometry::bilinear_at(&src.view(), us, vs, &mut buf) {
                for ci in 0..c {
                    warped[[ci, v, u]] = buf[ci];
                }
                mask[[v, u]] = true;
            }
        }
    }
    (warped, mask)
}

/// Mean absolute intensity error between two frames' images over masked
/// pixels, averaged across channels.
pub fn masked_mae(a: &Array3<f64>, b: &Array3<f64>, mask: &Array2<bool>) -> f64 {
    let (c, h, w) = a.dim();
    let mut acc = 0.0;
    let mut n = 0usize;
    for v in 0..h {
        for u in 0..w {
            if mask[[v, u]] {
                for ci in 0..c {
                    acc += (a[[ci, v, u]] - b[[ci, v, u]]).abs();
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_generation_is_deterministic_byte_for_byte() {
        let cfg = SimConfig::default();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(7, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let cfg = SimConfig::default();
        let a = generate_scene(7, &cfg).unwrap();
        let b = generate_scene(8, &cfg).unwrap();
        assert_ne!(a.lanes[0].ground_curve, b.lanes[0].ground_curve);
    }

    #[test]
    fn zero_curvature_bound_gives_straight_lanes() {
        let cfg = SimConfig { curvature_bound: 0.0, ..SimConfig::default() };
        for seed in [3, 5, 9] {
            let scene = generate_scene(seed, &cfg).unwrap();
            for lane in &scene.lanes {
                assert_eq!(lane.ground_curve[2], 0.0);
                assert_eq!(lane.ground_curve[3], 0.0);
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = SimConfig { frame_count: 1, ..SimConfig::default() };
        assert!(matches!(generate_scene(0, &cfg), Err(SimError::FrameCountTooSmall(1))));
        let cfg = SimConfig { lane_count_min: 5, lane_count_max: 2, ..SimConfig::default() };
        assert!(matches!(generate_scene(0, &cfg), Err(SimError::EmptyLaneRange(5, 2))));
    }

    #[test]
    fn lanes_respect_road_half_width() {
        let cfg = SimConfig::default();
        for seed in 0..20 {
            let scene = generate_scene(seed, &cfg).unwrap();
            for lane in &scene.lanes {
                let mut y = lane.y_range[0];
                while y <= lane.y_range[1] {
                    assert!(
                        lane.x_at(y).abs() <= cfg.road_half_width + 1e-6,
                        "seed {seed} lane exits road: x({y}) = {}",
                        lane.x_at(y)
                    );
                    y += 2.0;
                }
            }
        }
    }

    fn straight_lane(x: f64) -> LaneSpec {
        LaneSpec {
            ground_curve: [x, 0.0, 0.0, 0.0],
            height_curve: [0.0; 3],
            y_range: [0.0, 200.0],
            category: 0,
        }
    }

    #[test]
    fn sample_points_constant_curve() {
        let lane = straight_lane(2.0);
        let pts = sample_lane_points(&lane, &Pose::identity(), &[5.0, 10.0]).unwrap();
        assert_eq!(pts.xs, vec![2.0, 2.0]);
        assert_eq!(pts.ys, vec![5.0, 10.0]);
        assert_eq!(pts.zs, vec![0.0, 0.0]);
        assert!(pts.visibility.iter().all(|v| *v));

        let shifted = sample_lane_points(&lane, &Pose::from_translation([1.0, 0.0, 0.0]), &[5.0, 10.0]).unwrap();
        assert_eq!(shifted.xs, vec![1.0, 1.0]);
    }

    #[test]
    fn sample_points_quadratic_curve() {
        let lane = LaneSpec {
            ground_curve: [0.0, 0.0, 0.01, 0.0],
            height_curve: [0.0, 0.1, 0.0],
            y_range: [0.0, 200.0],
            category: 1,
        };
        let pts = sample_lane_points(&lane, &Pose::identity(), &[10.0]).unwrap();
        assert!((pts.xs[0] - 1.0).abs() < 1e-12);
        assert!((pts.zs[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_points_rejects_bad_grid_and_rotation() {
        let lane = straight_lane(0.0);
        assert!(sample_lane_points(&lane, &Pose::identity(), &[]).is_err());
        assert!(sample_lane_points(&lane, &Pose::identity(), &[5.0, 5.0]).is_err());
        assert!(sample_lane_points(&lane, &Pose::from_yaw(0.3), &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sample_points_visibility_follows_range() {
        let lane = LaneSpec { y_range: [20.0, 60.0], ..straight_lane(1.0) };
        let pts = sample_lane_points(&lane, &Pose::from_translation([0.0, 10.0, 0.0]), &[5.0, 20.0, 55.0]).unwrap();
        // world y = 15, 30, 65
        assert_eq!(pts.visibility, vec![false, true, false]);
    }

    /// Single straight centered lane with the ego on it.
    fn centered_scene() -> SceneSpec {
        let cfg = SimConfig::default();
        let mut scene = generate_scene(1, &cfg).unwrap();
        scene.lanes = vec![straight_lane(0.0)];
        scene.ground_height = [0.0; 3];
        for lane in &mut scene.lanes {
            lane.height_curve = [0.0; 3];
        }
        scene.ego_trajectory = (0..scene.frame_count)
            .map(|i| Pose::from_translation([0.0, 6.0 * i as f64, 0.0]))
            .collect();
        scene
    }

    #[test]
    fn centered_straight_lane_renders_symmetrically() {
        let scene = centered_scene();
        let frame = render_frame(&scene, 0).unwrap();
        let (h, w) = frame.seg.dim();
        let mut mass = 0.0;
        let mut moment = 0.0;
        for v in 0..h {
            for u in 0..w {
                if frame.seg[[v, u]] > 0 {
                    mass += 1.0;
                    moment += u as f64;
                }
            }
        }
        assert!(mass > 0.0, "segmentation mask is empty");
        let centroid = moment / mass;
        let center = (w as f64 - 1.0) / 2.0;
        assert!((centroid - center).abs() < 1.0, "centroid {centroid} vs center {center}");
    }

    #[test]
    fn seg_pixels_unproject_onto_their_curve() {
        let cfg = SimConfig::default();
        for seed in [2, 4, 11] {
            let scene = generate_scene(seed, &cfg).unwrap();
            let frame = render_frame(&scene, 1).unwrap();
            let cam_to_world = frame.rig.cam_to_world();
            let (h, w) = frame.seg.dim();
            let mut checked = 0;
            for v in 0..h {
                for u in 0..w {
                    if frame.seg[[v, u]] == 0 {
                        continue;
                    }
                    let d = frame.depth[[v, u]] as f64;
                    assert!(d > 0.0, "segmented pixel without depth");
                    let p_cam = unproject(&frame.rig.intrinsics, u as f64, v as f64, d).unwrap();
                    let p_world = cam_to_world.apply(p_cam);
                    let err = scene
                        .lanes
                        .iter()
                        .filter(|l| l.in_range(p_world[1]))
                        .map(|l| {
                            let dx = p_world[0] - l.x_at(p_world[1]);
                            let dz = p_world[2] - l.z_at(p_world[1]);
                            (dx * dx + dz * dz).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert!(err < 0.05, "seed {seed}: seg pixel {err:.4} m off its curve");
                    checked += 1;
                }
            }
            assert!(checked > 20, "seed {seed}: too few segmented pixels ({checked})");
        }
    }

    #[test]
    fn empty_scene_renders_empty_ground_truth() {
        let mut scene = centered_scene();
        scene.lanes.clear();
        let frame = render_frame(&scene, 0).unwrap();
        assert!(frame.seg.iter().all(|s| *s == 0));
        assert!(frame.lanes.is_empty());
        assert!(frame.image.slice(ndarray::s![.., .., 0]).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn render_rejects_out_of_range_frame() {
        let scene = centered_scene();
        assert!(matches!(
            render_frame(&scene, 99),
            Err(SimError::FrameOutOfRange { idx: 99, .. })
        ));
    }

    #[test]
    fn renders_are_deterministic() {
        let scene = generate_scene(5, &SimConfig::default()).unwrap();
        let a = render_frame(&scene, 2).unwrap();
        let b = render_frame(&scene, 2).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.seg, b.seg);
    }

    #[test]
    fn photometric_warp_consistency_on_lane_pixels() {
        let cfg = SimConfig::photometric_oracle();
        let mut worst = 0.0f64;
        for seed in 0..5 {
            let scene = generate_scene(seed, &cfg).unwrap();
            let target = render_frame(&scene, 2).unwrap();
            let source = render_frame(&scene, 1).unwrap();
            let (warped, warp_mask) = photometric_warp(&target, &source);
            let mut mask = warp_mask.clone();
            for ((v, u), m) in mask.indexed_iter_mut() {
                *m = *m && target.seg[[v, u]] > 0;
            }
            let n = mask.iter().filter(|m| **m).count();
            assert!(n > 30, "seed {seed}: only {n} co-visible lane pixels");
            let mae = masked_mae(&warped, &target.image_chw(), &mask);
            worst = worst.max(mae);
            assert!(mae < 0.02, "seed {seed}: photometric MAE {mae:.4}");
        }
        // keep a little headroom on the acceptance threshold
        assert!(worst < 0.018, "worst-case MAE {worst:.4} leaves no margin");
    }
}
