//! On-disk containers: the `.npyish` array format, JSON schemas for rigs,
//! lanes and scenes, and the parameter checkpoint.
//!
//! `.npyish` layout (all little-endian, C element order):
//!
//! ```text
//! magic   8 bytes  b"NPYISH01"
//! dtype   u8       1 = f32, 2 = u8
//! ndim    u8
//! shape   ndim x u32
//! payload raw elements
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! magic   8 bytes  b"LANECKPT"
//! version u16      1
//! count   u32
//! entry*  name_len u16, name utf8, ndim u8, shape ndim x u32, f32 payload
//! ```

use crate::geometry::CameraRig;
use crate::lane::Lane3D;
use crate::sim::SceneSpec;
use ndarray::{ArrayD, IxDyn};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const ARRAY_MAGIC: &[u8; 8] = b"NPYISH01";
const CKPT_MAGIC: &[u8; 8] = b"LANECKPT";
const CKPT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Fs {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl IoError {
    pub fn fs(path: &Path, source: std::io::Error) -> Self {
        IoError::Fs { path: path.display().to_string(), source }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        IoError::Format { path: path.display().to_string(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::U8 => 2,
        }
    }
}

fn write_header(buf: &mut Vec<u8>, dtype: Dtype, shape: &[usize]) {
    buf.extend_from_slice(ARRAY_MAGIC);
    buf.push(dtype.code());
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn read_header(path: &Path, data: &[u8]) -> Result<(Dtype, Vec<usize>, usize), IoError> {
    if data.len() < 10 || &data[..8] != ARRAY_MAGIC {
        return Err(IoError::format(path, "bad magic"));
    }
    let dtype = match data[8] {
        1 => Dtype::F32,
        2 => Dtype::U8,
        other => return Err(IoError::format(path, format!("unknown dtype code {other}"))),
    };
    let ndim = data[9] as usize;
    let mut off = 10;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        if off + 4 > data.len() {
            return Err(IoError::format(path, "truncated shape"));
        }
        shape.push(u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize);
        off += 4;
    }
    Ok((dtype, shape, off))
}

pub fn save_f32(path: &Path, arr: &ArrayD<f32>) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(16 + arr.len() * 4);
    write_header(&mut buf, Dtype::F32, arr.shape());
    let std_arr = arr.as_standard_layout();
    for v in std_arr.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &buf)
}

pub fn load_f32(path: &Path) -> Result<ArrayD<f32>, IoError> {
    let data = fs::read(path).map_err(|e| IoError::fs(path, e))?;
    let (dtype, shape, off) = read_header(path, &data)?;
    if dtype != Dtype::F32 {
        return Err(IoError::format(path, "expected f32 payload"));
    }
    let n: usize = shape.iter().product();
    if data.len() != off + 4 * n {
        return Err(IoError::format(path, "payload size mismatch"));
    }
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let b = off + 4 * i;
        values.push(f32::from_le_bytes(data[b..b + 4].try_into().unwrap()));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), values).map_err(|e| IoError::format(path, e.to_string()))
}

pub fn save_u8(path: &Path, arr: &ArrayD<u8>) -> Result<(), IoError> {
    let mut buf = Vec::with_capacity(16 + arr.len());
    write_header(&mut buf, Dtype::U8, arr.shape());
    let std_arr = arr.as_standard_layout();
    buf.extend(std_arr.iter().copied());
    atomic_write(path, &buf)
}

pub fn load_u8(path: &Path) -> Result<ArrayD<u8>, IoError> {
    let data = fs::read(path).map_err(|e| IoError::fs(path, e))?;
    let (dtype, shape, off) = read_header(path, &data)?;
    if dtype != Dtype::U8 {
        return Err(IoError::format(path, "expected u8 payload"));
    }
    let n: usize = shape.iter().product();
    if data.len() != off + n {
        return Err(IoError::format(path, "payload size mismatch"));
    }
    ArrayD::from_shape_vec(IxDyn(&shape), data[off..].to_vec())
        .map_err(|e| IoError::format(path, e.to_string()))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| IoError::fs(path, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| IoError::fs(path, e))?;
    f.write_all(bytes).map_err(|e| IoError::fs(path, e))
}

/// Versioned JSON wrapper used by every sidecar file.
#[derive(Debug, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub version: u32,
    #[serde(flatten)]
    pub payload: T,
}

pub fn save_json<T: Serialize>(path: &Path, version: u32, payload: &T) -> Result<(), IoError> {
    let doc = serde_json::json!({ "version": version });
    let mut value = serde_json::to_value(payload).map_err(|e| IoError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    if let (serde_json::Value::Object(doc), serde_json::Value::Object(obj)) = (&doc, &mut value) {
        for (k, v) in doc {
            obj.insert(k.clone(), v.clone());
        }
    }
    let text = serde_json::to_string_pretty(&value).map_err(|e| IoError::Json {
        path: path.display().to_string(),
        source: e,
    })?;
    atomic_write(path, text.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let mut text = String::new();
    fs::File::open(path)
        .map_err(|e| IoError::fs(path, e))?
        .read_to_string(&mut text)
        .map_err(|e| IoError::fs(path, e))?;
    serde_json::from_str(&text).map_err(|e| IoError::Json { path: path.display().to_string(), source: e })
}

#[derive(Debug, Serialize, Deserialize)]
struct RigDoc {
    rig: CameraRig,
}

pub fn save_rig(path: &Path, rig: &CameraRig) -> Result<(), IoError> {
    save_json(path, 1, &RigDoc { rig: *rig })
}

pub fn load_rig(path: &Path) -> Result<CameraRig, IoError> {
    let doc: RigDoc = load_json(path)?;
    Ok(doc.rig)
}

#[derive(Debug, Serialize, Deserialize)]
struct LanesDoc {
    lanes: Vec<Lane3D>,
}

pub fn save_lanes(path: &Path, lanes: &[Lane3D]) -> Result<(), IoError> {
    save_json(path, 1, &LanesDoc { lanes: lanes.to_vec() })
}

pub fn load_lanes(path: &Path) -> Result<Vec<Lane3D>, IoError> {
    let doc: LanesDoc = load_json(path)?;
    Ok(doc.lanes)
}

#[derive(Debug, Serialize, Deserialize)]
struct SceneDoc {
    scene: SceneSpec,
}

pub fn save_scene(path: &Path, scene: &SceneSpec) -> Result<(), IoError> {
    save_json(path, 1, &SceneDoc { scene: scene.clone() })
}

pub fn load_scene(path: &Path) -> Result<SceneSpec, IoError> {
    let doc: SceneDoc = load_json(path)?;
    Ok(doc.scene)
}

/// Writes named parameters as f32 payloads.
pub fn save_checkpoint(path: &Path, params: &[(String, ArrayD<f64>)]) -> Result<(), IoError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(value.ndim() as u8);
        for &d in value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in value.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    atomic_write(path, &buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, ArrayD<f64>)>, IoError> {
    let data = fs::read(path).map_err(|e| IoError::fs(path, e))?;
    if data.len() < 14 || &data[..8] != CKPT_MAGIC {
        return Err(IoError::format(path, "bad checkpoint magic"));
    }
    let version = u16::from_le_bytes(data[8..10].try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(IoError::format(path, format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(data[10..14].try_into().unwrap()) as usize;
    let mut off = 14;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        if off + 2 > data.len() {
            return Err(IoError::format(path, "truncated entry header"));
        }
        let name_len = u16::from_le_bytes(data[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        let name = String::from_utf8(data[off..off + name_len].to_vec())
            .map_err(|e| IoError::format(path, e.to_string()))?;
        off += name_len;
        let ndim = data[off] as usize;
        off += 1;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(data[off..off + 4].try_into().unwrap()) as usize);
            off += 4;
        }
        let n: usize = shape.iter().product();
        if off + 4 * n > data.len() {
            return Err(IoError::format(path, format!("truncated payload for {name}")));
        }
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let b = off + 4 * i;
            values.push(f32::from_le_bytes(data[b..b + 4].try_into().unwrap()) as f64);
        }
        off += 4 * n;
        out.push((
            name,
            ArrayD::from_shape_vec(IxDyn(&shape), values)
                .map_err(|e| IoError::format(path, e.to_string()))?,
        ));
    }
    Ok(out)
}
