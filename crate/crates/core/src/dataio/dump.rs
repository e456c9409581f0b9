//! Activation dumps: one little-endian binary tensor per file.
//!
//! ```text
//! "AQD1" | rank: u32 | rank x dim: u64 | dtype: u8 (0 = f32) | payload
//! ```
//!
//! A dump directory holds `<layer>/<batch index>.aqd`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::quant::TensorView;

pub const MAGIC: &[u8; 4] = b"AQD1";
pub const DTYPE_F32: u8 = 0;
pub const EXTENSION: &str = "aqd";

/// A dumped tensor. Values are kept as `f32` so files round-trip bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpTensor {
    shape: Vec<u64>,
    data: Vec<f32>,
}

impl DumpTensor {
    /// `shape` may be empty (a scalar holding one value).
    pub fn new(shape: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let n = element_count(&shape)
            .ok_or_else(|| Error::Shape(format!("shape {shape:?} overflows")))?;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} elements but {} were given",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[u64] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_view(&self) -> TensorView {
        let shape = self.shape.iter().map(|&d| d as usize).collect();
        TensorView::from_parts_unchecked(shape, self.data.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 8 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(DTYPE_F32);
        for x in &self.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    /// Parses `bytes`; `path` only labels errors.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = || Error::Truncated { path: path.to_path_buf() };
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4).ok_or_else(|| Error::BadMagic { path: path.to_path_buf() })?;
        if magic != MAGIC {
            return Err(Error::BadMagic { path: path.to_path_buf() });
        }
        let rank = u32::from_le_bytes(r.array().ok_or_else(truncated)?) as usize;
        let mut shape = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(r.array().ok_or_else(truncated)?));
        }
        let [dtype] = r.array().ok_or_else(truncated)?;
        if dtype != DTYPE_F32 {
            return Err(Error::UnsupportedDtype { path: path.to_path_buf(), code: dtype });
        }
        let n = element_count(&shape).ok_or_else(truncated)?;
        let payload = n
            .checked_mul(4)
            .and_then(|len| r.take(len))
            .ok_or_else(truncated)?;
        if r.pos != bytes.len() {
            return Err(Error::TrailingBytes { path: path.to_path_buf() });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinitePayload { path: path.to_path_buf() });
        }
        Ok(Self { shape, data })
    }
}

impl TryFrom<&TensorView> for DumpTensor {
    type Error = Error;

    /// Narrows to `f32`; fails if a value overflows to infinity.
    fn try_from(t: &TensorView) -> Result<Self> {
        Self::new(
            t.shape().iter().map(|&d| d as u64).collect(),
            t.data().iter().map(|&x| x as f32).collect(),
        )
    }
}

fn element_count(shape: &[u64]) -> Option<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("slice of length N"))
    }
}

pub fn write_dump(path: &Path, tensor: &DumpTensor) -> Result<()> {
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<DumpTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    DumpTensor::decode(&bytes, path)
}

fn check_layer_name(layer: &str) -> Result<()> {
    if layer.is_empty()
        || layer == "."
        || layer == ".."
        || layer.chars().any(|c| c == '/' || c == '\\' || c.is_control())
    {
        return Err(Error::Config(format!("`{layer}` is not a valid layer name")));
    }
    Ok(())
}

/// Path of batch `batch` of `layer` inside dump directory `dir`.
pub fn batch_path(dir: &Path, layer: &str, batch: usize) -> PathBuf {
    dir.join(layer).join(format!("{batch}.{EXTENSION}"))
}

/// Writes one batch, creating the layer directory if needed.
pub fn write_batch(dir: &Path, layer: &str, batch: usize, tensor: &DumpTensor) -> Result<PathBuf> {
    check_layer_name(layer)?;
    let layer_dir = dir.join(layer);
    fs::create_dir_all(&layer_dir).map_err(|e| Error::io(&layer_dir, e))?;
    let path = batch_path(dir, layer, batch);
    write_dump(&path, tensor)?;
    Ok(path)
}

/// Batch files of every layer in `dir`, layers sorted by name and batches by
/// index. Files without the dump extension are ignored.
pub fn list_dumps(dir: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let mut layers = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let layer = entry.file_name().to_string_lossy().into_owned();
        let mut batches = Vec::new();
        for file in fs::read_dir(&path).map_err(|e| Error::io(&path, e))? {
            let file = file.map_err(|e| Error::io(&path, e))?.path();
            if file.extension().and_then(|e| e.to_str()) != Some(EXTENSION) {
                continue;
            }
            let index = file
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| Error::Config(format!("{}: batch file name is not an index", file.display())))?;
            batches.push((index, file));
        }
        if batches.is_empty() {
            continue;
        }
        batches.sort();
        layers.insert(layer, batches.into_iter().map(|(_, p)| p).collect());
    }
    if layers.is_empty() {
        return Err(Error::NoCalibrationData);
    }
    Ok(layers)
}
