//! On-disk formats: the JSON counting manifest, the flat named-tensor
//! checkpoint container, and image loading.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "CSA1" | u32 entry count
//!   per entry: u16 name len | name | u8 dtype (0 = f32) | u8 ndim | ndim x u32 dims | payload
//! u32 metadata count
//!   per item: u16 key len | key | u16 value len | value
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSA1";
const DTYPE_F32: u8 = 0;

/// Head location in pixel coordinates, origin top-left, `x` = column.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct PointAnnotation {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for PointAnnotation {
    fn from([x, y]: [f64; 2]) -> Self {
        PointAnnotation { x, y }
    }
}

impl From<PointAnnotation> for [f64; 2] {
    fn from(p: PointAnnotation) -> Self {
        [p.x, p.y]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    #[serde(rename = "image")]
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub points: Vec<PointAnnotation>,
}

impl ImageRecord {
    pub fn count(&self) -> usize {
        self.points.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::MalformedManifest(format!(
                "{} has zero size {}x{}",
                self.image_path, self.width, self.height
            )));
        }
        for p in &self.points {
            let inside = p.x >= 0.0 && p.y >= 0.0 && p.x < self.width as f64 && p.y < self.height as f64;
            if !inside {
                return Err(Error::OutOfBoundsPoint {
                    image: self.image_path.clone(),
                    x: p.x,
                    y: p.y,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        Ok(())
    }

    /// File stem used to name cached artifacts for this record.
    pub fn stem(&self) -> String {
        Path::new(&self.image_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.image_path.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub records: Vec<ImageRecord>,
    /// Directory that relative image paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::MalformedManifest("manifest has no records".into()));
        }
        self.records.iter().try_for_each(ImageRecord::validate)
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn total_points(&self) -> usize {
        self.records.iter().map(ImageRecord::count).sum()
    }
}

/// Parses and validates manifest JSON without touching the filesystem.
pub fn parse_manifest(json: &str) -> Result<DatasetManifest> {
    let m: DatasetManifest =
        serde_json::from_str(json).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    m.validate()?;
    Ok(m)
}

pub fn manifest_to_json(m: &DatasetManifest) -> String {
    serde_json::to_string_pretty(m).expect("manifest serialises")
}

/// Loads a manifest and checks every image path resolves to a file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = parse_manifest(&text)?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for r in &m.records {
        let p = m.resolve(r);
        if !p.is_file() {
            return Err(Error::MissingFile(p));
        }
    }
    Ok(m)
}

pub fn write_manifest(m: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest_to_json(m)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<u32>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let shape: Vec<usize> = self.shape.iter().map(|&d| d as usize).collect();
        Tensor::from_vec(&shape, self.data.iter().map(|&v| T::of(v as f64)).collect())
            .expect("entry length checked on insert")
    }
}

/// Flat, ordered collection of named float32 tensors plus string metadata.
#[derive(Clone, Debug, Default)]
pub struct CheckpointArchive {
    entries: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, String>,
}

/// Bitwise equality, so NaN payloads compare equal to themselves.
impl PartialEq for CheckpointArchive {
    fn eq(&self, other: &Self) -> bool {
        self.metadata == other.metadata
            && self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.data.len() == b.data.len()
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

impl CheckpointArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn push(&mut self, name: &str, shape: Vec<u32>, data: Vec<f32>) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::DuplicateName(name.to_string()));
        }
        let n: usize = shape.iter().map(|&d| d as usize).product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "entry {name}: shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize || name.len() > u16::MAX as usize {
            return Err(Error::Shape(format!("entry {name}: rank or name too long")));
        }
        self.entries.push(TensorEntry {
            name: name.to_string(),
            shape,
            data,
        });
        Ok(())
    }

    pub fn push_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        self.push(
            name,
            t.shape().iter().map(|&d| d as u32).collect(),
            t.data().iter().map(|v| v.as_f32()).collect(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::DuplicateName(e.name.clone()));
            }
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.shape.len() as u8);
            for d in &e.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            if k.len() > u16::MAX as usize || v.len() > u16::MAX as usize {
                return Err(Error::Shape(format!("metadata item {k} too long")));
            }
            out.extend_from_slice(&(k.len() as u16).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u16).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            let mut m = [0u8; 4];
            m.copy_from_slice(magic);
            return Err(Error::BadMagic(m));
        }
        let count = r.u32("entry count")?;
        let mut archive = CheckpointArchive::new();
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = r.string(name_len, "name")?;
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::UnsupportedDtype(dtype));
            }
            let ndim = r.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32("dims")?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::TruncatedPayload(format!("entry {name} is too large")))?;
            let payload = r.take(n, &name)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            archive.push(&name, shape, data)?;
        }
        let meta = r.u32("metadata count")?;
        for _ in 0..meta {
            let kl = r.u16("key length")? as usize;
            let k = r.string(kl, "metadata key")?;
            let vl = r.u16("value length")? as usize;
            let v = r.string(vl, "metadata value")?;
            archive.metadata.insert(k, v);
        }
        Ok(archive)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::TruncatedPayload(format!(
                "need {n} bytes for {what} at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, n: usize, what: &str) -> Result<String> {
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::TruncatedPayload(format!("{what} is not UTF-8")))
    }
}

pub fn write_checkpoint(archive: &CheckpointArchive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = archive.to_bytes()?;
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointArchive> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    CheckpointArchive::from_bytes(&bytes)
}

/// Decodes an image into an `[H, W, channels]` tensor scaled to `[0, 1]`.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>, channels: usize) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<T> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| T::of(v as f64 / 255.0)).collect(),
        3 => img.to_rgb8().into_raw().into_iter().map(|v| T::of(v as f64 / 255.0)).collect(),
        c => return Err(Error::InvalidConfig(format!("unsupported channel count {c}"))),
    };
    Tensor::from_vec(&[h, w, channels], data)
}

/// Writes an `[H, W, 1|3]` tensor in `[0, 1]` as an 8-bit PNG.
pub fn save_image<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.len() != 3 || !(s[2] == 1 || s[2] == 3) {
        return Err(Error::Shape(format!("cannot save {s:?} as an image")));
    }
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = if s[2] == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer(path, &bytes, s[1] as u32, s[0] as u32, color).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
