//! On-disk formats shared by every stage: 2-D rasters (`PTR1`), N-d tensor
//! blobs (`PTN1`) and the dataset tree with its `manifest.txt` sidecar.
//!
//! All multi-byte values are little-endian; payloads are row-major `f32`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dose::Dose;
use crate::error::{ensure, Error, Result};

pub const RASTER_MAGIC: &[u8; 4] = b"PTR1";
pub const RASTER_VERSION: u8 = 1;
pub const RASTER_HEADER_LEN: usize = 4 + 1 + 4 + 4;
pub const TENSOR_MAGIC: &[u8; 4] = b"PTN1";

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const REFERENCE_FILE: &str = "full.ptr";

/// A single-channel image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterF32 {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RasterF32 {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "raster dimensions must be positive, got {height}x{width}");
        ensure!(
            data.len() == height * width,
            "raster data has {} values, expected {height}x{width}={}",
            data.len(),
            height * width
        );
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "raster value at ({}, {}) is not finite",
                i / width,
                i % width
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && value.is_finite());
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub(crate) fn ensure_same_shape(&self, other: &RasterF32, what: &str) -> Result<()> {
        ensure!(
            self.shape() == other.shape(),
            "{what}: shape mismatch {}x{} vs {}x{}",
            self.height,
            self.width,
            other.height,
            other.width
        );
        Ok(())
    }

    /// Elementwise combination of two equally sized rasters.
    pub fn zip_map(&self, other: &RasterF32, f: impl Fn(f32, f32) -> f32) -> Result<RasterF32> {
        self.ensure_same_shape(other, "zip_map")?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        RasterF32::new(self.height, self.width, data)
    }

    /// Copies out the `h`x`w` window whose top-left corner is (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, h: usize, w: usize) -> Result<RasterF32> {
        ensure!(
            row + h <= self.height && col + w <= self.width && h > 0 && w > 0,
            "crop {h}x{w} at ({row}, {col}) exceeds {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(h * w);
        for r in row..row + h {
            data.extend_from_slice(&self.data[r * self.width + col..r * self.width + col + w]);
        }
        Ok(RasterF32 { height: h, width: w, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RASTER_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(RASTER_MAGIC);
        out.push(RASTER_VERSION);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a `PTR1` buffer; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != RASTER_MAGIC {
            return Err(Error::format(path, "magic", "expected \"PTR1\""));
        }
        if bytes.len() < RASTER_HEADER_LEN {
            return Err(Error::format(path, "header", format!("only {} bytes", bytes.len())));
        }
        if bytes[4] != RASTER_VERSION {
            return Err(Error::format(path, "version", format!("unsupported version {}", bytes[4])));
        }
        let height = read_u32(&bytes[5..9]) as usize;
        let width = read_u32(&bytes[9..13]) as usize;
        if height == 0 {
            return Err(Error::format(path, "height", "zero"));
        }
        if width == 0 {
            return Err(Error::format(path, "width", "zero"));
        }
        let count = height
            .checked_mul(width)
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::format(path, "dimensions", format!("{height}x{width} overflows")))?;
        let data = decode_payload(&bytes[RASTER_HEADER_LEN..], count, path)?;
        Ok(RasterF32 { height, width, data })
    }
}

fn read_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn decode_payload(payload: &[u8], count: usize, path: &Path) -> Result<Vec<f32>> {
    let expected = count * 4;
    if payload.len() < expected {
        return Err(Error::format(
            path,
            "payload",
            format!("truncated: {} of {expected} bytes", payload.len()),
        ));
    }
    if payload.len() > expected {
        return Err(Error::format(
            path,
            "payload",
            format!("{} trailing bytes", payload.len() - expected),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, "payload", format!("non-finite value at index {i}")));
    }
    Ok(data)
}

pub fn write_raster(path: &Path, img: &RasterF32) -> Result<()> {
    if let Some(i) = img.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("refusing to write non-finite value at index {i}")));
    }
    fs::write(path, img.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<RasterF32> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RasterF32::from_bytes(&bytes, path)
}

/// Dense `f32` array of arbitrary rank, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlob {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != TENSOR_MAGIC {
            return Err(Error::format(path, "magic", "expected \"PTN1\""));
        }
        let rank = *bytes
            .get(4)
            .ok_or_else(|| Error::format(path, "rank", "missing"))? as usize;
        let header = 5 + 4 * rank;
        if bytes.len() < header {
            return Err(Error::format(path, "dims", "truncated"));
        }
        let dims: Vec<usize> = bytes[5..header]
            .chunks_exact(4)
            .map(|c| read_u32(c) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::format(path, "dims", "element count overflows"))?;
        let data = decode_payload(&bytes[header..], count, path)?;
        Ok(TensorBlob { dims, data })
    }
}

pub fn write_tensor(path: &Path, t: &TensorBlob) -> Result<()> {
    let count: usize = t.dims.iter().product();
    ensure!(count == t.data.len(), "tensor dims {:?} do not match {} values", t.dims, t.data.len());
    ensure!(t.data.iter().all(|v| v.is_finite()), "refusing to write non-finite tensor");
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<TensorBlob> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorBlob::from_bytes(&bytes, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Index of a generated dataset. Serialized as `manifest.txt` at the dataset root.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub subject_ids: Vec<String>,
    pub dose_levels: Vec<Dose>,
    pub split: BTreeMap<String, Split>,
    pub seed: u64,
    pub suv_clip_max: f64,
}

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    seed: u64,
    suv_clip_max: f64,
    dose_levels: Vec<f64>,
    split: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.subject_ids.is_empty(), "manifest has no subjects");
        ensure!(!self.dose_levels.is_empty(), "manifest has no dose levels");
        ensure!(
            self.suv_clip_max > 0.0 && self.suv_clip_max.is_finite(),
            "suv_clip_max must be positive"
        );
        let unique: BTreeSet<&String> = self.subject_ids.iter().collect();
        ensure!(unique.len() == self.subject_ids.len(), "duplicate subject ids");
        for id in &self.subject_ids {
            ensure!(self.split.contains_key(id), "subject {id} has no split assignment");
        }
        Ok(())
    }

    pub fn subjects_in(&self, split: Split) -> Vec<&str> {
        self.subject_ids
            .iter()
            .filter(|id| self.split.get(*id) == Some(&split))
            .map(String::as_str)
            .collect()
    }

    /// Every (subject, dose) pair, subject-major.
    pub fn low_dose_entries(&self) -> Vec<(&str, Dose)> {
        self.subject_ids
            .iter()
            .flat_map(|s| self.dose_levels.iter().map(move |&d| (s.as_str(), d)))
            .collect()
    }

    pub fn reference_path(root: &Path, subject: &str) -> PathBuf {
        root.join(subject).join(REFERENCE_FILE)
    }

    pub fn low_dose_path(root: &Path, subject: &str, dose: Dose) -> PathBuf {
        root.join(subject).join(format!("{}.ptr", dose.file_stem()))
    }

    pub fn to_text(&self) -> String {
        let file = ManifestFile {
            seed: self.seed,
            suv_clip_max: self.suv_clip_max,
            dose_levels: self.dose_levels.iter().map(|d| d.fraction()).collect(),
            split: self.split.clone(),
        };
        let body = toml::to_string(&file).expect("manifest serializes");
        format!("# crossdose dataset manifest\n{body}")
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

fn read_manifest_file(path: &Path) -> Result<ManifestFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, "manifest", e.to_string()))
}

/// Walks a dataset tree and checks every subject has a reference and all
/// expected dose files.
///
/// Expected doses come from `manifest.txt` when present, otherwise from the
/// union of dose files found. Subjects without a split entry default to train.
pub fn scan_dataset(root: &Path) -> Result<DatasetManifest> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut found: BTreeMap<String, BTreeSet<Dose>> = BTreeMap::new();
    let mut missing_reference = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let id = entry.file_name().to_string_lossy().into_owned();
        let mut doses = BTreeSet::new();
        let mut has_reference = false;
        for f in fs::read_dir(&path).map_err(|e| Error::io(&path, e))? {
            let f = f.map_err(|e| Error::io(&path, e))?;
            let name = f.file_name().to_string_lossy().into_owned();
            if name == REFERENCE_FILE {
                has_reference = true;
            } else if let Some(d) = name.strip_suffix(".ptr").and_then(Dose::from_file_stem) {
                doses.insert(d);
            }
        }
        if !has_reference {
            missing_reference.push(id.clone());
        }
        found.insert(id, doses);
    }
    if found.is_empty() {
        return Err(Error::Layout(format!("no subjects found under {}", root.display())));
    }

    let manifest_path = root.join(MANIFEST_FILE);
    let sidecar = if manifest_path.exists() {
        Some(read_manifest_file(&manifest_path)?)
    } else {
        None
    };
    let dose_levels: Vec<Dose> = match &sidecar {
        Some(m) => m
            .dose_levels
            .iter()
            .map(|&f| Dose::from_fraction(f))
            .collect::<Result<_>>()
            .map_err(|e| Error::format(&manifest_path, "dose_levels", e.to_string()))?,
        None => found.values().flatten().copied().collect::<BTreeSet<_>>().into_iter().collect(),
    };

    let mut problems: Vec<String> = missing_reference
        .iter()
        .map(|s| format!("{s}/{REFERENCE_FILE}"))
        .collect();
    for (id, doses) in &found {
        for d in &dose_levels {
            if !doses.contains(d) {
                problems.push(format!("{id}/{}.ptr (subject {id}, dose {d})", d.file_stem()));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Layout(format!("missing files: {}", problems.join(", "))));
    }

    let subject_ids: Vec<String> = found.keys().cloned().collect();
    let (seed, suv_clip_max, recorded) = match sidecar {
        Some(m) => (m.seed, m.suv_clip_max, m.split),
        None => (0, crate::phantom::DEFAULT_SUV_CLIP_MAX, BTreeMap::new()),
    };
    let split = subject_ids
        .iter()
        .map(|id| (id.clone(), recorded.get(id).copied().unwrap_or(Split::Train)))
        .collect();
    let manifest = DatasetManifest {
        subject_ids,
        dose_levels,
        split,
        seed,
        suv_clip_max,
    };
    manifest.validate()?;
    Ok(manifest)
}
