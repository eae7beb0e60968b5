//! Generic dataset directory layout:
//!
//! ```text
//! meta.json        intrinsics, joint count, cube size, joint names
//! <id>.depth       u32 LE width, u32 LE height, then width*height u16 LE mm
//! <id>.json        {"id", "center_xyz", "joints": [[x, y, z], ...] | null}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Record};
use crate::error::{Error, Result};
use crate::geometry::{JointFrame, JointSet, RawDepth};

pub const FORMAT_VERSION: u32 = 1;
const META_FILE: &str = "meta.json";

#[derive(Serialize, Deserialize)]
struct MetaFile {
    format_version: u32,
    #[serde(flatten)]
    meta: DatasetMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordFile {
    id: String,
    center_xyz: [f64; 3],
    joints: Option<Vec<[f64; 3]>>,
}

fn parse_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), msg: msg.into() }
}

pub fn encode_depth(depth: &RawDepth) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(8 + depth.data.len() * 2);
    bytes.extend_from_slice(&(depth.width as u32).to_le_bytes());
    bytes.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for v in &depth.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn decode_depth(bytes: &[u8], id: &str, path: &Path) -> Result<RawDepth> {
    if bytes.len() < 8 {
        return Err(parse_err(path, format!("record {id}: depth header truncated ({} bytes)", bytes.len())));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let expected = 8 + width * height * 2;
    if bytes.len() != expected {
        return Err(parse_err(
            path,
            format!("record {id}: depth raster truncated (expected {expected} bytes, found {})", bytes.len()),
        ));
    }
    let data = bytes[8..].chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    RawDepth::new(width, height, data)
}

pub fn save_generic(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = MetaFile { format_version: FORMAT_VERSION, meta: dataset.meta.clone() };
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    for r in &dataset.records {
        let depth_path = dir.join(format!("{}.depth", r.id));
        fs::write(&depth_path, encode_depth(&r.depth)).map_err(|e| Error::io(&depth_path, e))?;
        let joints = match &r.joints {
            Some(j) => {
                j.expect_frame(JointFrame::CameraMm)?;
                Some(j.coords.clone())
            }
            None => None,
        };
        let rec = RecordFile { id: r.id.clone(), center_xyz: r.center_xyz, joints };
        let json_path = dir.join(format!("{}.json", r.id));
        fs::write(&json_path, serde_json::to_vec(&rec)?).map_err(|e| Error::io(&json_path, e))?;
    }
    Ok(())
}

pub fn load_generic(dir: &Path) -> Result<Dataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut record_paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_json = path.extension().is_some_and(|e| e == "json");
        if is_json && path.file_name().is_some_and(|n| n != META_FILE) {
            record_paths.push(path);
        }
    }
    record_paths.sort();

    let meta_path = dir.join(META_FILE);
    let meta = if meta_path.exists() {
        let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let file: MetaFile = serde_json::from_slice(&bytes).map_err(|e| parse_err(&meta_path, e.to_string()))?;
        if file.format_version != FORMAT_VERSION {
            return Err(parse_err(&meta_path, format!("unsupported format_version {}", file.format_version)));
        }
        file.meta.intrinsics.validate().map_err(|e| parse_err(&meta_path, e.to_string()))?;
        file.meta
    } else if record_paths.is_empty() {
        return Ok(Dataset::default());
    } else {
        return Err(parse_err(&meta_path, "missing meta.json"));
    };

    let mut records = Vec::with_capacity(record_paths.len());
    for json_path in record_paths {
        let stem = json_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let bytes = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let rec: RecordFile = serde_json::from_slice(&bytes)
            .map_err(|e| parse_err(&json_path, format!("record {stem}: {e}")))?;
        if rec.id != stem {
            return Err(parse_err(&json_path, format!("record {stem}: id field says {}", rec.id)));
        }
        if let Some(j) = &rec.joints {
            if j.len() != meta.n_joints {
                return Err(parse_err(
                    &json_path,
                    format!("record {stem}: {} joints, meta declares {}", j.len(), meta.n_joints),
                ));
            }
        }
        let depth_path = dir.join(format!("{stem}.depth"));
        let raw = fs::read(&depth_path).map_err(|e| Error::io(&depth_path, e))?;
        let depth = decode_depth(&raw, &stem, &depth_path)?;
        records.push(Record {
            id: rec.id,
            depth,
            center_xyz: rec.center_xyz,
            joints: rec.joints.map(|c| JointSet::new(c, JointFrame::CameraMm)),
        });
    }
    Ok(Dataset { meta, records })
}
