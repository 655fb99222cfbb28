//! Adapter for OpenLane-style per-frame JSON annotations: `lane_lines` with
//! 3xN `xyz`, per-point `visibility`, a `category`, plus `intrinsic` (3x3),
//! `extrinsic` (4x4 camera-to-ego) and `pose` (4x4 ego-to-world) matrices.
//!
//! Ingestion resamples every lane onto the internal y-grid by linear
//! interpolation in y; non-monotonic source lanes are sorted with a warning.
//! Frames without images become metadata-only entries (rig + lanes) for
//! metric-only workflows.

use crate::geometry::{CameraRig, Intrinsics, Pose};
use crate::io::{self, IoError};
use crate::lane::Lane3D;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpenLaneError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenLaneLine {
    /// [xs, ys, zs], each of the same length.
    pub xyz: [Vec<f64>; 3],
    pub category: usize,
    /// 0/1 per point.
    pub visibility: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpenLaneFrame {
    pub lane_lines: Vec<OpenLaneLine>,
    /// Row-major 3x3 camera matrix.
    pub intrinsic: [[f64; 3]; 3],
    /// Row-major 4x4 camera-to-ego transform.
    pub extrinsic: [[f64; 4]; 4],
    /// Row-major 4x4 ego-to-world transform.
    pub pose: [[f64; 4]; 4],
    /// [width, height] in pixels; optional in foreign files.
    #[serde(default)]
    pub image_size: Option<[usize; 2]>,
}

fn mat4(p: &Pose) -> [[f64; 4]; 4] {
    let r = p.rotation;
    let t = p.translation;
    [
        [r[0][0], r[0][1], r[0][2], t[0]],
        [r[1][0], r[1][1], r[1][2], t[1]],
        [r[2][0], r[2][1], r[2][2], t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

fn pose_from_mat4(m: &[[f64; 4]; 4]) -> Pose {
    Pose {
        rotation: [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ],
        translation: [m[0][3], m[1][3], m[2][3]],
    }
}

/// Serializes one frame's ground truth into the exchange schema.
pub fn export_frame(lanes: &[Lane3D], rig: &CameraRig) -> OpenLaneFrame {
    let k = rig.intrinsics;
    OpenLaneFrame {
        lane_lines: lanes
            .iter()
            .map(|l| OpenLaneLine {
                xyz: [l.xs.clone(), l.ys.clone(), l.zs.clone()],
                category: l.category,
                visibility: l.visibility.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect(),
            })
            .collect(),
        intrinsic: [[k.fx, 0.0, k.cx], [0.0, k.fy, k.cy], [0.0, 0.0, 1.0]],
        extrinsic: mat4(&rig.cam_to_ego),
        pose: mat4(&rig.ego_to_world),
        image_size: Some([k.width, k.height]),
    }
}

/// Converts one frame back to internal types, resampling onto `y_grid`.
pub fn ingest_frame(
    frame: &OpenLaneFrame,
    y_grid: &[f64],
    origin: &str,
) -> Result<(CameraRig, Vec<Lane3D>), OpenLaneError> {
    let [w, h] = frame.image_size.unwrap_or_else(|| {
        let w = (frame.intrinsic[0][2] * 2.0).round().max(1.0) as usize;
        let h = (frame.intrinsic[1][2] * 2.0).round().max(1.0) as usize;
        log::warn!("{origin}: no image_size; estimating {w}x{h} from the principal point");
        [w, h]
    });
    let rig = CameraRig {
        intrinsics: Intrinsics {
            fx: frame.intrinsic[0][0],
            fy: frame.intrinsic[1][1],
            cx: frame.intrinsic[0][2],
            cy: frame.intrinsic[1][2],
            width: w,
            height: h,
        },
        cam_to_ego: pose_from_mat4(&frame.extrinsic),
        ego_to_world: pose_from_mat4(&frame.pose),
    };

    let mut lanes = Vec::with_capacity(frame.lane_lines.len());
    for (li, line) in frame.lane_lines.iter().enumerate() {
        let n = line.xyz[0].len();
        if line.xyz[1].len() != n || line.xyz[2].len() != n {
            return Err(OpenLaneError::Schema {
                path: origin.to_string(),
                message: format!("lane_lines[{li}].xyz rows have unequal lengths"),
            });
        }
        if line.visibility.len() != n {
            return Err(OpenLaneError::Schema {
                path: origin.to_string(),
                message: format!("lane_lines[{li}].visibility length {} != {n}", line.visibility.len()),
            });
        }
        if n == 0 {
            continue;
        }
        // order points by y, warning on non-monotonic sources
        let mut order: Vec<usize> = (0..n).collect();
        let monotonic = line.xyz[1].windows(2).all(|w| w[0] <= w[1]);
        if !monotonic {
            log::warn!("{origin}: lane_lines[{li}] has non-monotonic y; sorting");
            order.sort_by(|&a, &b| line.xyz[1][a].partial_cmp(&line.xyz[1][b]).unwrap());
        }
        let ys: Vec<f64> = order.iter().map(|&i| line.xyz[1][i]).collect();
        let xs: Vec<f64> = order.iter().map(|&i| line.xyz[0][i]).collect();
        let zs: Vec<f64> = order.iter().map(|&i| line.xyz[2][i]).collect();
        let vis: Vec<f64> = order.iter().map(|&i| line.visibility[i]).collect();

        let interp = |values: &[f64], y: f64| -> f64 {
            if y <= ys[0] {
                return values[0];
            }
            if y >= ys[n - 1] {
                return values[n - 1];
            }
            let mut hi = 1;
            while ys[hi] < y {
                hi += 1;
            }
            let lo = hi - 1;
            let span = ys[hi] - ys[lo];
            if span <= 0.0 {
                return values[lo];
            }
            let t = (y - ys[lo]) / span;
            values[lo] + t * (values[hi] - values[lo])
        };

        let mut lane = Lane3D {
            xs: Vec::with_capacity(y_grid.len()),
            ys: y_grid.to_vec(),
            zs: Vec::with_capacity(y_grid.len()),
            visibility: Vec::with_capacity(y_grid.len()),
            category: line.category,
        };
        for &y in y_grid {
            lane.xs.push(interp(&xs, y));
            lane.zs.push(interp(&zs, y));
            let in_range = y >= ys[0] - 1e-9 && y <= ys[n - 1] + 1e-9;
            lane.visibility.push(in_range && interp(&vis, y) >= 0.5);
        }
        lanes.push(lane);
    }
    Ok((rig, lanes))
}

/// Index written next to ingested frames.
#[derive(Debug, Serialize, Deserialize)]
pub struct IngestIndex {
    pub frames: Vec<String>,
    pub metadata_only: bool,
}

/// Ingests every `*.json` annotation in `ann_dir` (sorted by name) into the
/// internal frame layout under `out_dir`. Returns the number of frames.
pub fn ingest_dir(ann_dir: &Path, out_dir: &Path, y_grid: &[f64]) -> Result<usize, OpenLaneError> {
    let mut files: Vec<_> = std::fs::read_dir(ann_dir)
        .map_err(|e| IoError::fs(ann_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map_or(false, |x| x == "json"))
        .collect();
    files.sort();
    let mut names = Vec::with_capacity(files.len());
    for (i, file) in files.iter().enumerate() {
        let frame: OpenLaneFrame = io::load_json(file).map_err(|e| match e {
            IoError::Json { path, source } => OpenLaneError::Schema { path, message: source.to_string() },
            other => OpenLaneError::Io(other),
        })?;
        let (rig, lanes) = ingest_frame(&frame, y_grid, &file.display().to_string())?;
        let fdir = out_dir.join(format!("frame_{i:04}"));
        io::save_rig(&fdir.join("rig.json"), &rig)?;
        io::save_lanes(&fdir.join("lanes.json"), &lanes)?;
        names.push(format!("frame_{i:04}"));
    }
    let count = names.len();
    io::save_json(&out_dir.join("ingest_index.json"), 1, &IngestIndex { frames: names, metadata_only: true })?;
    Ok(count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate_scene, render_frame, SimConfig};

    #[test]
    fn synthetic_roundtrip_is_exact_on_the_grid() {
        let cfg = SimConfig::default();
        for seed in [0, 3] {
            let scene = generate_scene(seed, &cfg).unwrap();
            let frame = render_frame(&scene, 1).unwrap();
            let exported = export_frame(&frame.lanes, &frame.rig);
            let (rig, lanes) = ingest_frame(&exported, &scene.y_grid, "mem").unwrap();
            assert_eq!(rig, frame.rig);
            assert_eq!(lanes.len(), frame.lanes.len());
            for (a, b) in lanes.iter().zip(&frame.lanes) {
                assert_eq!(a.category, b.category);
                assert_eq!(a.visibility, b.visibility);
                for i in 0..a.len() {
                    assert!((a.xs[i] - b.xs[i]).abs() < 1e-9);
                    assert!((a.ys[i] - b.ys[i]).abs() < 1e-9);
                    assert!((a.zs[i] - b.zs[i]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn missing_lane_lines_is_a_schema_error_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let ann = dir.path().join("ann");
        std::fs::create_dir_all(&ann).unwrap();
        std::fs::write(
            ann.join("000.json"),
            r#"{"intrinsic":[[1,0,0],[0,1,0],[0,0,1]],"extrinsic":[[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]],"pose":[[1,0,0,0],[0,1,0,0],[0,0,1,0],[0,0,0,1]]}"#,
        )
        .unwrap();
        let err = ingest_dir(&ann, &dir.path().join("out"), &[5.0, 10.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lane_lines"), "error does not name the field: {msg}");
    }

    #[test]
    fn two_point_lane_interpolates_linearly() {
        let frame = OpenLaneFrame {
            lane_lines: vec![OpenLaneLine {
                xyz: [vec![1.0, 3.0], vec![0.0, 100.0], vec![0.0, 2.0]],
                category: 1,
                visibility: vec![1.0, 1.0],
            }],
            intrinsic: [[100.0, 0.0, 50.0], [0.0, 100.0, 40.0], [0.0, 0.0, 1.0]],
            extrinsic: mat4(&Pose::identity()),
            pose: mat4(&Pose::identity()),
            image_size: Some([100, 80]),
        };
        let grid = vec![25.0, 50.0, 75.0];
        let (_, lanes) = ingest_frame(&frame, &grid, "mem").unwrap();
        assert_eq!(lanes.len(), 1);
        let l = &lanes[0];
        assert!((l.xs[0] - 1.5).abs() < 1e-12);
        assert!((l.xs[1] - 2.0).abs() < 1e-12);
        assert!((l.xs[2] - 2.5).abs() < 1e-12);
        assert!((l.zs[1] - 1.0).abs() < 1e-12);
        assert!(l.visibility.iter().all(|v| *v));
    }

    #[test]
    fn non_monotonic_y_is_sorted() {
        let frame = OpenLaneFrame {
            lane_lines: vec![OpenLaneLine {
                xyz: [vec![3.0, 1.0], vec![100.0, 0.0], vec![0.0, 0.0]],
                category: 0,
                visibility: vec![1.0, 1.0],
            }],
            intrinsic: [[100.0, 0.0, 50.0], [0.0, 100.0, 40.0], [0.0, 0.0, 1.0]],
            extrinsic: mat4(&Pose::identity()),
            pose: mat4(&Pose::identity()),
            image_size: Some([100, 80]),
        };
        let (_, lanes) = ingest_frame(&frame, &[50.0], "mem").unwrap();
        assert!((lanes[0].xs[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn grid_outside_source_range_is_invisible() {
        let frame = OpenLaneFrame {
            lane_lines: vec![OpenLaneLine {
                xyz: [vec![1.0, 1.0], vec![20.0, 60.0], vec![0.0, 0.0]],
                category: 0,
                visibility: vec![1.0, 1.0],
            }],
            intrinsic: [[100.0, 0.0, 50.0], [0.0, 100.0, 40.0], [0.0, 0.0, 1.0]],
            extrinsic: mat4(&Pose::identity()),
            pose: mat4(&Pose::identity()),
            image_size: Some([100, 80]),
        };
        let (_, lanes) = ingest_frame(&frame, &[10.0, 40.0, 80.0], "mem").unwrap();
        assert_eq!(lanes[0].visibility, vec![false, true, false]);
    }
}
