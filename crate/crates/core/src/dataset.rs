//! On-disk formats for descriptor matrices, region geometry and dataset
//! manifests.
//!
//! Matrix container (`.dmx`), all integers and floats little-endian:
//!
//! ```text
//! offset 0   magic  "DMX1"
//! offset 4   u32    rows
//! offset 8   u32    cols
//! offset 12  f32 x rows*cols, row-major
//! ```
//!
//! A region descriptor file stores one descriptor per column (`d x |R|`), a
//! global descriptor file is `d_g x 1`. A geometry file uses the same
//! container with 4 columns: row 0 is `(width, height, 0, 0)` and row `1 + r`
//! is the box `(x_min, y_min, x_max, y_max)` of region `r`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DMX1";
const HEADER_LEN: usize = 12;

/// Dense real matrix with `f32` storage in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DescriptorMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidMatrix(format!(
                "shape {rows}x{cols} has an empty dimension"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "{} values for shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix(format!(
                "non-finite value at index {i}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Converts an `f64` matrix, rounding every entry to `f32`.
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Result<Self> {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)] as f32);
            }
        }
        Self::new(m.nrows(), m.ncols(), data)
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c) as f64)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a DMX1 buffer; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::TruncatedPayload {
                path: path.to_path_buf(),
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                found,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::TruncatedPayload {
                path: path.to_path_buf(),
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = HEADER_LEN + 4 * rows * cols;
        if bytes.len() < expected {
            return Err(Error::TruncatedPayload {
                path: path.to_path_buf(),
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::ParseError {
                path: path.to_path_buf(),
                message: format!(
                    "{} trailing bytes after a {rows}x{cols} payload",
                    bytes.len() - expected
                ),
            });
        }
        if rows == 0 || cols == 0 {
            return Err(Error::ParseError {
                path: path.to_path_buf(),
                message: format!("shape {rows}x{cols} has an empty dimension"),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    path: path.to_path_buf(),
                    offset: HEADER_LEN + 4 * i,
                });
            }
            data.push(v);
        }
        Ok(Self { rows, cols, data })
    }
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<DescriptorMatrix> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|source| Error::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    DescriptorMatrix::from_bytes(&bytes, path)
}

pub fn save_matrix(m: &DescriptorMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, m.to_bytes()).map_err(|source| Error::IoFailure {
        path: path.to_path_buf(),
        source,
    })
}

/// Pixel boxes of an image's regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionGeometry {
    pub width: f32,
    pub height: f32,
    /// `(x_min, y_min, x_max, y_max)` per region.
    pub boxes: Vec<[f32; 4]>,
}

impl RegionGeometry {
    pub fn validate(&self, id: &str) -> Result<()> {
        let bad = |message: String| Error::InvalidGeometry {
            id: id.to_string(),
            message,
        };
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(bad(format!(
                "image size {}x{} is not positive",
                self.width, self.height
            )));
        }
        for (r, b) in self.boxes.iter().enumerate() {
            let [x0, y0, x1, y1] = *b;
            if !(0.0 <= x0 && x0 < x1 && x1 <= self.width) {
                return Err(bad(format!("box {r} has x-range [{x0}, {x1}]")));
            }
            if !(0.0 <= y0 && y0 < y1 && y1 <= self.height) {
                return Err(bad(format!("box {r} has y-range [{y0}, {y1}]")));
            }
        }
        Ok(())
    }

    pub fn to_matrix(&self) -> Result<DescriptorMatrix> {
        let mut data = vec![self.width, self.height, 0.0, 0.0];
        for b in &self.boxes {
            data.extend_from_slice(b);
        }
        DescriptorMatrix::new(self.boxes.len() + 1, 4, data)
    }

    pub fn from_matrix(m: &DescriptorMatrix, path: &Path) -> Result<Self> {
        if m.cols() != 4 || m.rows() < 2 {
            return Err(Error::ParseError {
                path: path.to_path_buf(),
                message: format!(
                    "geometry container must be (1+|R|)x4 with |R| >= 1, found {}x{}",
                    m.rows(),
                    m.cols()
                ),
            });
        }
        let boxes = (1..m.rows())
            .map(|r| [m.get(r, 0), m.get(r, 1), m.get(r, 2), m.get(r, 3)])
            .collect();
        Ok(Self {
            width: m.get(0, 0),
            height: m.get(0, 1),
            boxes,
        })
    }
}

pub fn load_geometry(path: impl AsRef<Path>) -> Result<RegionGeometry> {
    let path = path.as_ref();
    RegionGeometry::from_matrix(&load_matrix(path)?, path)
}

pub fn save_geometry(g: &RegionGeometry, path: impl AsRef<Path>) -> Result<()> {
    save_matrix(&g.to_matrix()?, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Database,
    Query,
}

/// One manifest entry. Paths are relative to the manifest's directory unless
/// absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub regions: PathBuf,
    pub geometry: PathBuf,
    pub global: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestDoc {
    images: Vec<ImageRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    junk: BTreeMap<String, Vec<String>>,
}

/// A validated manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub base_dir: PathBuf,
    pub images: Vec<ImageRecord>,
    pub junk: BTreeMap<String, Vec<String>>,
    /// Region descriptor dimension `d`.
    pub descriptor_dim: usize,
    /// Global descriptor dimension.
    pub global_dim: usize,
    /// Fixed region count `|R|`.
    pub regions_per_image: usize,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.images.iter().position(|r| r.id == id)
    }

    pub fn indices_in(&self, split: Split) -> Vec<usize> {
        self.images
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Descriptors of one image held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageData {
    /// `d x |R|`, one region per column.
    pub regions: DMatrix<f64>,
    pub geometry: RegionGeometry,
    pub global: DVector<f64>,
}

/// A manifest together with all the data it references.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageData>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Scales every region descriptor to unit ℓ² norm (zero columns stay zero).
    pub fn l2_normalize_regions(&mut self) {
        for img in &mut self.images {
            for mut col in img.regions.column_iter_mut() {
                let n = col.norm();
                if n > 0.0 {
                    col /= n;
                }
            }
        }
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    load_dataset(path).map(|d| d.manifest)
}

/// Parses a manifest, loads every referenced file and checks the dataset
/// invariants (unique ids, shared `d`, fixed `|R|`, valid geometry).
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|source| Error::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: ManifestDoc = serde_json::from_str(&text).map_err(|e| Error::ParseError {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if doc.images.is_empty() {
        return Err(Error::ParseError {
            path: path.to_path_buf(),
            message: "manifest lists no images".into(),
        });
    }
    let mut seen = HashSet::new();
    for rec in &doc.images {
        if !seen.insert(rec.id.as_str()) {
            return Err(Error::ParseError {
                path: path.to_path_buf(),
                message: format!("duplicate image id {}", rec.id),
            });
        }
    }
    for (q, ids) in &doc.junk {
        for id in std::iter::once(q).chain(ids) {
            if !seen.contains(id.as_str()) {
                return Err(Error::DanglingReference(format!(
                    "junk list refers to unknown image {id}"
                )));
            }
        }
    }

    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let resolve = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base_dir.join(p)
        }
    };

    let mut images = Vec::with_capacity(doc.images.len());
    let mut dims: Option<(usize, usize, usize)> = None;
    for rec in &doc.images {
        for (what, p) in [
            ("regions", &rec.regions),
            ("geometry", &rec.geometry),
            ("global", &rec.global),
        ] {
            let full = resolve(p);
            if !full.is_file() {
                return Err(Error::DanglingReference(format!(
                    "image {} {what} file {} does not exist",
                    rec.id,
                    full.display()
                )));
            }
        }
        let regions = load_matrix(resolve(&rec.regions))?;
        let global = load_matrix(resolve(&rec.global))?;
        if global.cols() != 1 {
            return Err(Error::InvalidMatrix(format!(
                "global descriptor of image {} has {} columns, expected 1",
                rec.id,
                global.cols()
            )));
        }
        let (d, g, r) = *dims.get_or_insert((regions.rows(), global.rows(), regions.cols()));
        if regions.rows() != d {
            return Err(Error::InconsistentDimension {
                id: rec.id.clone(),
                expected: d,
                found: regions.rows(),
            });
        }
        if global.rows() != g {
            return Err(Error::InconsistentDimension {
                id: rec.id.clone(),
                expected: g,
                found: global.rows(),
            });
        }
        if regions.cols() != r {
            return Err(Error::InconsistentRegionCount {
                id: rec.id.clone(),
                expected: r,
                found: regions.cols(),
            });
        }
        let geometry = load_geometry(resolve(&rec.geometry))?;
        if geometry.boxes.len() != r {
            return Err(Error::InconsistentRegionCount {
                id: rec.id.clone(),
                expected: r,
                found: geometry.boxes.len(),
            });
        }
        geometry.validate(&rec.id)?;
        let global = global.to_dmatrix().column(0).into_owned();
        images.push(ImageData {
            regions: regions.to_dmatrix(),
            geometry,
            global,
        });
    }
    let (descriptor_dim, global_dim, regions_per_image) = dims.unwrap();
    Ok(Dataset {
        manifest: DatasetManifest {
            base_dir,
            images: doc.images,
            junk: doc.junk,
            descriptor_dim,
            global_dim,
            regions_per_image,
        },
        images,
    })
}

/// Writes a manifest document; paths in `images` are written as given.
pub fn save_manifest(
    images: &[ImageRecord],
    junk: &BTreeMap<String, Vec<String>>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let doc = ManifestDoc {
        images: images.to_vec(),
        junk: junk.clone(),
    };
    let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    fs::write(path, text).map_err(|source| Error::IoFailure {
        path: path.to_path_buf(),
        source,
    })
}

/// Ground-truth junk sets keyed by query id.
pub fn junk_sets(manifest: &DatasetManifest) -> HashMap<&str, HashSet<&str>> {
    manifest
        .junk
        .iter()
        .map(|(q, ids)| (q.as_str(), ids.iter().map(String::as_str).collect()))
        .collect()
}
