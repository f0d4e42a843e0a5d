//! Raw voxel volumes with JSON sidecars, and the on-disk dataset layout.
//!
//! A volume `name.vox` holds `D*H*W` bytes in `(d, h, w)` row-major order;
//! `name.json` records dims, spacing, byte encoding and a SHA-256 checksum of
//! the raw bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::grid::VoxelGrid;
use super::synth::{DefectBoxes, SkullTriplet};
use crate::error::{invalid, Error, Result};

pub const VOXEL_FORMAT: &str = "raw-u8";
pub const VOXEL_FORMAT_VERSION: u32 = 1;
pub const VOXEL_ORDER: &str = "dhw-row-major";
pub const DATASET_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ByteEncoding {
    /// One byte per voxel, 0 or 1.
    Binary,
    /// One byte per voxel, `round(255 * v)`.
    Unorm8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelSidecar {
    pub format: String,
    pub format_version: u32,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub order: String,
    pub encoding: ByteEncoding,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `grid` to `path` (`.vox`) plus its sidecar. Binary grids are
/// stored losslessly; soft grids are quantized to 8 bits.
pub fn save_voxel_file(grid: &VoxelGrid, path: &Path) -> Result<()> {
    check_extension(path)?;
    let encoding = if grid.is_binary() {
        ByteEncoding::Binary
    } else {
        ByteEncoding::Unorm8
    };
    let bytes: Vec<u8> = match encoding {
        ByteEncoding::Binary => grid.values().iter().map(|&v| v as u8).collect(),
        ByteEncoding::Unorm8 => grid
            .values()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    };
    let sidecar = VoxelSidecar {
        format: VOXEL_FORMAT.to_string(),
        format_version: VOXEL_FORMAT_VERSION,
        dims: grid.dims(),
        spacing: grid.spacing(),
        order: VOXEL_ORDER.to_string(),
        encoding,
        sha256: sha256_hex(&bytes),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

fn check_extension(path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("vox") => Ok(()),
        other => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("expected a .vox volume, got extension {other:?}"),
        }),
    }
}

pub fn read_sidecar(path: &Path) -> Result<VoxelSidecar> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptFile {
        path: side.clone(),
        reason: format!("unreadable sidecar: {e}"),
    })
}

pub fn load_voxel_file(path: &Path) -> Result<VoxelGrid> {
    check_extension(path)?;
    let sidecar = read_sidecar(path)?;
    if sidecar.format != VOXEL_FORMAT || sidecar.order != VOXEL_ORDER {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("format '{}' order '{}'", sidecar.format, sidecar.order),
        });
    }
    if sidecar.format_version != VOXEL_FORMAT_VERSION {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!("format version {}", sidecar.format_version),
        });
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = sidecar.dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: format!("expected {expected} bytes for dims {:?}, found {}", sidecar.dims, bytes.len()),
        });
    }
    if sha256_hex(&bytes) != sidecar.sha256 {
        return Err(Error::CorruptFile {
            path: path.to_path_buf(),
            reason: "checksum mismatch".into(),
        });
    }
    let values = match sidecar.encoding {
        ByteEncoding::Binary => {
            if let Some(i) = bytes.iter().position(|&b| b > 1) {
                return Err(Error::CorruptFile {
                    path: path.to_path_buf(),
                    reason: format!("binary volume has byte {} at offset {i}", bytes[i]),
                });
            }
            bytes.iter().map(|&b| b as f32).collect()
        }
        ByteEncoding::Unorm8 => bytes.iter().map(|&b| b as f32 / 255.0).collect(),
    };
    Ok(VoxelGrid::new(sidecar.dims, values)?.with_spacing(sidecar.spacing))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorInfo {
    pub n: usize,
    pub dims: [usize; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defect_boxes: Option<DefectBoxes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorInfo>,
    pub subjects: Vec<SubjectEntry>,
}

const CLASS_FILES: [&str; 3] = ["complete.vox", "cranial.vox", "facial.vox"];

/// Writes `<root>/<subject>/{complete,cranial,facial}.vox` and the manifest.
pub fn save_dataset(root: &Path, triplets: &[SkullTriplet], generator: Option<GeneratorInfo>) -> Result<DatasetManifest> {
    let mut subjects = Vec::with_capacity(triplets.len());
    for t in triplets {
        let dir = root.join(&t.subject_id);
        let grids = [&t.complete, &t.cranial_defect, &t.facial_defect];
        for (grid, name) in grids.into_iter().zip(CLASS_FILES) {
            save_voxel_file(grid, &dir.join(name))?;
        }
        subjects.push(SubjectEntry {
            id: t.subject_id.clone(),
            defect_boxes: t.defect_boxes,
        });
    }
    let manifest = DatasetManifest {
        format_version: VOXEL_FORMAT_VERSION,
        generator,
        subjects,
    };
    let path = root.join(DATASET_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::CorruptFile {
        path,
        reason: format!("unreadable dataset manifest: {e}"),
    })
}

pub fn load_dataset(root: &Path) -> Result<(DatasetManifest, Vec<SkullTriplet>)> {
    let manifest = load_manifest(root)?;
    if manifest.subjects.is_empty() {
        return Err(invalid(format!("dataset at {} lists no subjects", root.display())));
    }
    let mut triplets = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        let dir = root.join(&entry.id);
        let [complete, cranial, facial] = CLASS_FILES.map(|name| load_voxel_file(&dir.join(name)));
        let t = SkullTriplet {
            subject_id: entry.id.clone(),
            complete: complete?,
            cranial_defect: cranial?,
            facial_defect: facial?,
            defect_boxes: entry.defect_boxes,
        };
        t.validate()?;
        triplets.push(t);
    }
    Ok((manifest, triplets))
}
