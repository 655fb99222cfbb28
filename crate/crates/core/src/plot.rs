//! Batch-emitted figures: perspective overlays (ground truth in red,
//! predictions in per-instance colors), a two-panel 3D view (top-down and
//! side profile), and loss curves from run manifests. Everything renders into
//! deterministic PNG buffers.

use crate::geometry::{project, CameraRig};
use crate::lane::Lane3D;
use crate::sim::FrameSample;
use crate::train::StepRecord;
use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::Array2;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("{path}: {source}")]
    Encode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("nothing to plot: {0}")]
    Empty(String),
}

const GT_COLOR: Rgb<u8> = Rgb([230, 40, 40]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([60, 170, 240]),
    Rgb([90, 210, 90]),
    Rgb([250, 200, 60]),
    Rgb([190, 110, 240]),
    Rgb([80, 220, 210]),
    Rgb([245, 130, 50]),
];

fn save(img: &RgbImage, path: &Path) -> Result<(), PlotError> {
    if let Some(parent) = path.parent() {
        let _ = std::fs::create_dir_all(parent);
    }
    img.save(path).map_err(|e| PlotError::Encode { path: path.display().to_string(), source: e })
}

/// Rasterizes lanes into a binary mask at native resolution using the same
/// annotation-band rule as the simulator: a pixel is marked when its center
/// column sits within `band` meters of the projected centerline at that row.
pub fn lane_mask(lanes: &[Lane3D], rig: &CameraRig, band: f64) -> Array2<u8> {
    let k = rig.intrinsics;
    let mut mask = Array2::<u8>::zeros((k.height, k.width));
    let cam_from_ego = rig.cam_to_ego.invert();
    for lane in lanes {
        let n = lane.len();
        for seg in 0..n.saturating_sub(1) {
            if !lane.visibility[seg] && !lane.visibility[seg + 1] {
                continue;
            }
            // march the segment densely enough to touch every crossed row
            let steps = 64;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let y = lane.ys[seg] * (1.0 - t) + lane.ys[seg + 1] * t;
                let x = lane.xs[seg] * (1.0 - t) + lane.xs[seg + 1] * t;
                let z = lane.zs[seg] * (1.0 - t) + lane.zs[seg + 1] * t;
                let p_cam = cam_from_ego.apply([x, y, z]);
                let Ok((u, v, depth)) = project(&k, p_cam) else { continue };
                let row = v.round();
                if row < 0.0 || row >= k.height as f64 {
                    continue;
                }
                let half_px = band * k.fx / depth;
                let lo = (u - half_px).ceil().max(0.0) as usize;
                let hi = (u + half_px).floor().min(k.width as f64 - 1.0) as usize;
                let row = row as usize;
                for c in lo..=hi.min(k.width - 1) {
                    if (c as f64 - u).abs() <= half_px {
                        mask[[row, c]] = 1;
                    }
                }
                // at sub-pixel widths the nearest column still gets marked
                if half_px < 0.5 {
                    let c = u.round();
                    if c >= 0.0 && c < k.width as f64 && (c - u).abs() * depth / k.fx <= band {
                        mask[[row, c as usize]] = 1;
                    }
                }
            }
        }
    }
    mask
}

fn draw_lane_overlay(img: &mut RgbImage, lane: &Lane3D, rig: &CameraRig, color: Rgb<u8>, scale: u32) {
    let k = rig.intrinsics;
    let cam_from_ego = rig.cam_to_ego.invert();
    let n = lane.len();
    for seg in 0..n.saturating_sub(1) {
        if !lane.visibility[seg] || !lane.visibility[seg + 1] {
            continue;
        }
        let steps = 48;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let y = lane.ys[seg] * (1.0 - t) + lane.ys[seg + 1] * t;
            let x = lane.xs[seg] * (1.0 - t) + lane.xs[seg + 1] * t;
            let z = lane.zs[seg] * (1.0 - t) + lane.zs[seg + 1] * t;
            let p_cam = cam_from_ego.apply([x, y, z]);
            let Ok((u, v, _)) = project(&k, p_cam) else { continue };
            let (pu, pv) = (u * scale as f64, v * scale as f64);
            for dv in -1..=1i64 {
                for du in -1..=1i64 {
                    let px = pu.round() as i64 + du;
                    let py = pv.round() as i64 + dv;
                    if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                        img.put_pixel(px as u32, py as u32, color);
                    }
                }
            }
        }
    }
}

/// Perspective overlay: the rendered frame upscaled, ground truth in red,
/// predictions in per-instance palette colors.
pub fn perspective_overlay(
    frame: &FrameSample,
    predictions: &[Lane3D],
    path: &Path,
) -> Result<(), PlotError> {
    let (h, w, _) = frame.image.dim();
    let scale = 4u32;
    let mut img: RgbImage = ImageBuffer::new(w as u32 * scale, h as u32 * scale);
    for (py, px_row) in (0..h).zip(0..) {
        let _ = px_row;
        for px in 0..w {
            let lane = frame.image[[py, px, 0]];
            let t1 = frame.image[[py, px, 1]];
            let t2 = frame.image[[py, px, 2]];
            // gray base from the texture channels, lane paint in white
            let base = (80.0 + 100.0 * (0.5 * t1 + 0.5 * t2)) as u8;
            let val = |b: u8| (b as f64 + (255.0 - b as f64) * lane as f64) as u8;
            let color = Rgb([val(base), val(base), val(base)]);
            for dy in 0..scale {
                for dx in 0..scale {
                    img.put_pixel(px as u32 * scale + dx, py as u32 * scale + dy, color);
                }
            }
        }
    }
    for lane in &frame.lanes {
        draw_lane_overlay(&mut img, lane, &frame.rig, GT_COLOR, scale);
    }
    for (i, lane) in predictions.iter().enumerate() {
        draw_lane_overlay(&mut img, lane, &frame.rig, PALETTE[i % PALETTE.len()], scale);
    }
    save(&img, path)
}

/// Two-panel spatial view: top-down (x vs y) and side profile (z vs y).
pub fn spatial_view(gts: &[Lane3D], predictions: &[Lane3D], path: &Path) -> Result<(), PlotError> {
    let (w, h) = (480u32, 360u32);
    let mut img: RgbImage = ImageBuffer::from_pixel(w, 2 * h + 8, Rgb([250, 250, 250]));
    for x in 0..w {
        for y in h..h + 8 {
            img.put_pixel(x, y, Rgb([180, 180, 180]));
        }
    }
    let y_max = 110.0;
    let x_half = 16.0;
    let z_half = 3.0;
    let mut draw = |lane: &Lane3D, color: Rgb<u8>| {
        for i in 0..lane.len() {
            if !lane.visibility[i] {
                continue;
            }
            // top-down panel
            let px = ((lane.xs[i] + x_half) / (2.0 * x_half) * w as f64).clamp(0.0, w as f64 - 1.0);
            let py = ((1.0 - lane.ys[i] / y_max) * (h as f64 - 1.0)).clamp(0.0, h as f64 - 1.0);
            // side panel
            let pz = ((1.0 - (lane.zs[i] + z_half) / (2.0 * z_half)) * (h as f64 - 1.0)).clamp(0.0, h as f64 - 1.0);
            let pyx = ((lane.ys[i] / y_max) * (w as f64 - 1.0)).clamp(0.0, w as f64 - 1.0);
            for d in -1..=1i64 {
                for e in -1..=1i64 {
                    let (a, b) = (px as i64 + d, py as i64 + e);
                    if a >= 0 && b >= 0 && (a as u32) < w && (b as u32) < h {
                        img.put_pixel(a as u32, b as u32, color);
                    }
                    let (a, b) = (pyx as i64 + d, pz as i64 + e);
                    if a >= 0 && b >= 0 && (a as u32) < w && (b as u32) < h {
                        img.put_pixel(a as u32, h + 8 + b as u32, color);
                    }
                }
            }
        }
    };
    for lane in gts {
        draw(lane, GT_COLOR);
    }
    for (i, lane) in predictions.iter().enumerate() {
        draw(lane, PALETTE[i % PALETTE.len()]);
    }
    save(&img, path)
}

/// Loss curves from manifest step records; one colored polyline per term.
pub fn loss_curves(steps: &[StepRecord], path: &Path) -> Result<(), PlotError> {
    if steps.is_empty() {
        return Err(PlotError::Empty("no step records".into()));
    }
    let (w, h) = (640u32, 360u32);
    let mut img: RgbImage = ImageBuffer::from_pixel(w, h, Rgb([255, 255, 255]));
    let series: [(&str, Box<dyn Fn(&StepRecord) -> f64>); 6] = [
        ("total", Box::new(|s| s.losses.total)),
        ("vis", Box::new(|s| s.losses.l_vis)),
        ("x", Box::new(|s| s.losses.l_x)),
        ("z", Box::new(|s| s.losses.l_z)),
        ("cate", Box::new(|s| s.losses.l_cate)),
        ("seg", Box::new(|s| s.losses.l_seg)),
    ];
    let max_v = steps
        .iter()
        .map(|s| s.losses.total)
        .fold(0.0f64, f64::max)
        .max(1e-9);
    for (i, (_, f)) in series.iter().enumerate() {
        let color = if i == 0 { Rgb([0, 0, 0]) } else { PALETTE[(i - 1) % PALETTE.len()] };
        let mut prev: Option<(u32, u32)> = None;
        for (si, s) in steps.iter().enumerate() {
            let x = (si as f64 / (steps.len().max(2) - 1) as f64 * (w as f64 - 1.0)) as u32;
            let v = f(s).clamp(0.0, max_v);
            let y = ((1.0 - v / max_v) * (h as f64 - 1.0)) as u32;
            if let Some((px, py)) = prev {
                draw_line(&mut img, px, py, x, y, color);
            }
            prev = Some((x, y));
        }
    }
    save(&img, path)
}

fn draw_line(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    let (mut x0, mut y0, x1, y1) = (x0 as i64, y0 as i64, x1 as i64, y1 as i64);
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, color);
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossValues;
    use crate::sim::{generate_scene, render_frame, SimConfig};

    #[test]
    fn gt_mask_overlaps_rendered_segmentation() {
        let cfg = SimConfig::default();
        for seed in [1, 6] {
            let scene = generate_scene(seed, &cfg).unwrap();
            let frame = render_frame(&scene, 1).unwrap();
            let drawn = lane_mask(&frame.lanes, &frame.rig, scene.paint.seg_halfwidth);
            let mut inter = 0usize;
            let mut union = 0usize;
            for (a, b) in drawn.iter().zip(frame.seg.iter()) {
                let da = *a > 0;
                let db = *b > 0;
                if da && db {
                    inter += 1;
                }
                if da || db {
                    union += 1;
                }
            }
            assert!(union > 0);
            let iou = inter as f64 / union as f64;
            assert!(iou > 0.8, "seed {seed}: drawn-vs-rendered IoU {iou:.3}");
        }
    }

    #[test]
    fn plots_are_deterministic_and_survive_empty_predictions() {
        let cfg = SimConfig::default();
        let scene = generate_scene(2, &cfg).unwrap();
        let frame = render_frame(&scene, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        perspective_overlay(&frame, &[], &p1).unwrap();
        perspective_overlay(&frame, &[], &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        spatial_view(&frame.lanes, &[], &dir.path().join("v.png")).unwrap();
    }

    #[test]
    fn loss_curves_render_from_records() {
        let steps: Vec<StepRecord> = (0..50)
            .map(|i| StepRecord {
                step: i,
                lr: 1e-3,
                losses: LossValues {
                    l_vis: 0.5 / (i + 1) as f64,
                    l_x: 1.0 / (i + 1) as f64,
                    l_z: 0.1,
                    l_cate: 0.2,
                    l_seg: 0.3,
                    total: 3.0 / (i + 1) as f64,
                },
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        loss_curves(&steps, &dir.path().join("loss.png")).unwrap();
        assert!(loss_curves(&[], &dir.path().join("none.png")).is_err());
    }
}
