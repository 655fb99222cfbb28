//! Dataset directory layout, generation and loading.
//!
//! ```text
//! out_dir/
//!   index.json
//!   scene_0000/
//!     scene.json
//!     frame_0000/{image.npyish, depth.npyish, rig.json, lanes.json, seg.npyish}
//!     ...
//! ```
//!
//! Frames can also live purely in memory ([`Dataset::generate`]) which is what
//! the tests and the training loop use; `gen-data` writes the same content to
//! disk bit-exactly.

use crate::io::{self, IoError};
use crate::sim::{generate_scene, render_frame, FrameSample, SceneSpec, SimConfig, SimError};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{0}")]
    Layout(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub name: String,
    pub seed: u64,
    pub frame_count: usize,
    pub lane_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub scenes: Vec<IndexEntry>,
    pub total_lanes: usize,
    pub total_frames: usize,
}

/// An in-memory dataset: scenes plus all rendered frames.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub scenes: Vec<SceneSpec>,
    pub frames: Vec<Vec<FrameSample>>,
}

impl Dataset {
    /// Renders `seeds.len()` scenes deterministically from their seeds.
    pub fn generate(seeds: &[u64], cfg: &SimConfig) -> Result<Self, DataError> {
        let mut scenes = Vec::with_capacity(seeds.len());
        let mut frames = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let scene = generate_scene(seed, cfg)?;
            let mut scene_frames = Vec::with_capacity(scene.frame_count);
            for i in 0..scene.frame_count {
                scene_frames.push(render_frame(&scene, i)?);
            }
            scenes.push(scene);
            frames.push(scene_frames);
        }
        Ok(Self { scenes, frames })
    }

    /// All (scene, t) pairs with a valid past frame at gap `n`.
    pub fn sample_ids(&self, n: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (si, fs) in self.frames.iter().enumerate() {
            for t in n..fs.len() {
                out.push((si, t));
            }
        }
        out
    }

    pub fn frame(&self, scene_idx: usize, t: usize) -> &FrameSample {
        &self.frames[scene_idx][t]
    }
}

fn scene_dir(root: &Path, idx: usize) -> PathBuf {
    root.join(format!("scene_{idx:04}"))
}

fn frame_dir(scene: &Path, idx: usize) -> PathBuf {
    scene.join(format!("frame_{idx:04}"))
}

/// Writes one rendered frame into `dir` using the documented layout.
pub fn write_frame(dir: &Path, frame: &FrameSample) -> Result<(), IoError> {
    io::save_f32(&dir.join("image.npyish"), &frame.image.clone().into_dyn())?;
    io::save_f32(&dir.join("depth.npyish"), &frame.depth.clone().into_dyn())?;
    io::save_u8(&dir.join("seg.npyish"), &frame.seg.clone().into_dyn())?;
    io::save_rig(&dir.join("rig.json"), &frame.rig)?;
    io::save_lanes(&dir.join("lanes.json"), &frame.lanes)
}

/// Reads one frame back; `timestamp` comes from the directory index.
pub fn read_frame(dir: &Path, timestamp: usize) -> Result<FrameSample, DataError> {
    let image = io::load_f32(&dir.join("image.npyish"))?;
    let depth = io::load_f32(&dir.join("depth.npyish"))?;
    let seg = io::load_u8(&dir.join("seg.npyish"))?;
    let rig = io::load_rig(&dir.join("rig.json"))?;
    let lanes = io::load_lanes(&dir.join("lanes.json"))?;
    let image: Array3<f32> = image
        .into_dimensionality()
        .map_err(|e| DataError::Layout(format!("{}: {e}", dir.display())))?;
    let depth: Array2<f32> = depth
        .into_dimensionality()
        .map_err(|e| DataError::Layout(format!("{}: {e}", dir.display())))?;
    let seg: Array2<u8> = seg
        .into_dimensionality()
        .map_err(|e| DataError::Layout(format!("{}: {e}", dir.display())))?;
    Ok(FrameSample { image, depth, seg, rig, lanes, timestamp })
}

/// Generates scenes for `seeds` and writes the full dataset tree plus
/// `index.json`. Returns the index.
pub fn write_dataset(root: &Path, seeds: &[u64], cfg: &SimConfig) -> Result<DatasetIndex, DataError> {
    let mut entries = Vec::with_capacity(seeds.len());
    let mut total_lanes = 0;
    let mut total_frames = 0;
    for (i, &seed) in seeds.iter().enumerate() {
        let scene = generate_scene(seed, cfg)?;
        let sdir = scene_dir(root, i);
        io::save_scene(&sdir.join("scene.json"), &scene)?;
        for f in 0..scene.frame_count {
            let frame = render_frame(&scene, f)?;
            write_frame(&frame_dir(&sdir, f), &frame)?;
        }
        total_lanes += scene.lanes.len();
        total_frames += scene.frame_count;
        entries.push(IndexEntry {
            name: format!("scene_{i:04}"),
            seed,
            frame_count: scene.frame_count,
            lane_count: scene.lanes.len(),
        });
    }
    let index = DatasetIndex { scenes: entries, total_lanes, total_frames };
    io::save_json(&root.join("index.json"), 1, &index)?;
    Ok(index)
}

/// Loads a dataset tree written by [`write_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset, DataError> {
    let index: DatasetIndex = io::load_json(&root.join("index.json"))?;
    let mut scenes = Vec::with_capacity(index.scenes.len());
    let mut frames = Vec::with_capacity(index.scenes.len());
    for (i, entry) in index.scenes.iter().enumerate() {
        let sdir = root.join(&entry.name);
        let scene = io::load_scene(&sdir.join("scene.json"))?;
        let mut scene_frames = Vec::with_capacity(entry.frame_count);
        for f in 0..entry.frame_count {
            scene_frames.push(read_frame(&frame_dir(&sdir, f), f)?);
        }
        if i != scenes.len() {
            return Err(DataError::Layout("index order mismatch".into()));
        }
        scenes.push(scene);
        frames.push(scene_frames);
    }
    Ok(Dataset { scenes, frames })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> SimConfig {
        SimConfig { frame_count: 2, image_width: 48, image_height: 36, ..SimConfig::default() }
    }

    #[test]
    fn dataset_tree_roundtrip_and_determinism() {
        let cfg = tiny_cfg();
        let dir1 = tempfile::tempdir().unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        let idx1 = write_dataset(dir1.path(), &[0, 1], &cfg).unwrap();
        let idx2 = write_dataset(dir2.path(), &[0, 1], &cfg).unwrap();
        assert_eq!(idx1.total_frames, 4);
        assert_eq!(
            idx1.scenes.iter().map(|s| s.lane_count).sum::<usize>(),
            idx1.total_lanes
        );

        // byte-identical trees
        for entry in walk(dir1.path()) {
            let rel = entry.strip_prefix(dir1.path()).unwrap();
            let other = dir2.path().join(rel);
            let a = std::fs::read(&entry).unwrap();
            let b = std::fs::read(&other).unwrap_or_else(|_| panic!("missing {}", other.display()));
            assert_eq!(a, b, "trees differ at {}", rel.display());
        }

        let ds = load_dataset(dir1.path()).unwrap();
        let fresh = Dataset::generate(&[0, 1], &cfg).unwrap();
        assert_eq!(ds.frames[0][0].image, fresh.frames[0][0].image);
        assert_eq!(ds.frames[1][1].depth, fresh.frames[1][1].depth);
        assert_eq!(ds.frames[1][1].lanes, fresh.frames[1][1].lanes);
    }

    #[test]
    fn sample_ids_respect_temporal_gap() {
        let ds = Dataset::generate(&[3], &tiny_cfg()).unwrap();
        assert_eq!(ds.sample_ids(1), vec![(0, 1)]);
        let cfg4 = SimConfig { frame_count: 4, ..tiny_cfg() };
        let ds = Dataset::generate(&[3], &cfg4).unwrap();
        assert_eq!(ds.sample_ids(2), vec![(0, 2), (0, 3)]);
    }

    fn walk(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir).unwrap() {
                let p = entry.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push(p);
                }
            }
        }
        out.sort();
        out
    }
}
