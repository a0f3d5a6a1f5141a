//! Image encodings built from part responses.
//!
//! All encodings concatenate per-part blocks in a fixed order (groups
//! ascending, parts ascending within a group) and are ℓ²-normalized.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::RegionGeometry;
use crate::error::{Error, Result};
use crate::parts::PartModelBank;

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncodingKind {
    Bop,
    Sbop,
    Pcop,
    Wpcop,
}

impl EncodingKind {
    pub fn needs_pca(self) -> bool {
        matches!(self, EncodingKind::Pcop | EncodingKind::Wpcop)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EncodingKind::Bop => "bop",
            EncodingKind::Sbop => "sbop",
            EncodingKind::Pcop => "pcop",
            EncodingKind::Wpcop => "wpcop",
        }
    }

    /// Output dimension for `parts` total parts (P·K) and reduced dimension `d_out`.
    pub fn dim(self, parts: usize, d_out: usize) -> usize {
        match self {
            EncodingKind::Bop => 2 * parts,
            EncodingKind::Sbop => 6 * parts,
            EncodingKind::Pcop | EncodingKind::Wpcop => d_out * parts,
        }
    }
}

impl std::str::FromStr for EncodingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bop" => Ok(EncodingKind::Bop),
            "sbop" => Ok(EncodingKind::Sbop),
            "pcop" => Ok(EncodingKind::Pcop),
            "wpcop" => Ok(EncodingKind::Wpcop),
            other => Err(Error::ConfigInvalid(format!("unknown encoding {other}"))),
        }
    }
}

/// `(P·K) x |R|` scores of every part on every region of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PartScoreMatrix {
    pub scores: DMatrix<f64>,
}

impl PartScoreMatrix {
    pub fn parts(&self) -> usize {
        self.scores.nrows()
    }

    pub fn regions(&self) -> usize {
        self.scores.ncols()
    }

    /// Region with the highest score for `part`; lowest index on ties.
    pub fn argmax_region(&self, part: usize) -> usize {
        let row = self.scores.row(part);
        let mut best = 0;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        best
    }
}

/// Scores all parts of all banks on the regions `x` (`d x |R|`).
pub fn part_scores(banks: &[PartModelBank], x: &DMatrix<f64>) -> Result<PartScoreMatrix> {
    let first = banks
        .first()
        .ok_or_else(|| Error::DimensionMismatch("no part banks".into()))?;
    let (d, p) = (first.dim(), first.parts());
    if let Some(b) = banks.iter().find(|b| b.dim() != d || b.parts() != p) {
        return Err(Error::DimensionMismatch(format!(
            "bank {} is {}x{}, expected {d}x{p}",
            b.group,
            b.dim(),
            b.parts()
        )));
    }
    if x.nrows() != d {
        return Err(Error::DimensionMismatch(format!(
            "regions have d={}, parts have d={d}",
            x.nrows()
        )));
    }
    let mut scores = DMatrix::zeros(p * banks.len(), x.ncols());
    for (k, bank) in banks.iter().enumerate() {
        scores.rows_mut(k * p, p).copy_from(&bank.weights.tr_mul(x));
    }
    Ok(PartScoreMatrix { scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedVector {
    pub kind: EncodingKind,
    pub values: Vec<f64>,
}

impl EncodedVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &EncodedVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }
}

/// ℓ²-normalizes `values`.
pub fn l2_normalized(kind: EncodingKind, mut values: Vec<f64>) -> Result<EncodedVector> {
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegenerateEncoding);
    }
    values.iter_mut().for_each(|v| *v /= norm);
    Ok(EncodedVector { kind, values })
}

fn bop_raw(s: &PartScoreMatrix) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * s.parts());
    for row in s.scores.row_iter() {
        out.push(row.mean());
        out.push(row.max());
    }
    out
}

/// `(mean, max)` score per part.
pub fn encode_bop(s: &PartScoreMatrix) -> Result<EncodedVector> {
    l2_normalized(EncodingKind::Bop, bop_raw(s))
}

/// Quarter index (row-major 2x2 grid) of the box center; centers on a
/// dividing line go to the lower-index quarter.
pub fn quarter_of(b: &[f32; 4], width: f32, height: f32) -> usize {
    let cx = (b[0] as f64 + b[2] as f64) / 2.0;
    let cy = (b[1] as f64 + b[3] as f64) / 2.0;
    let col = usize::from(cx > width as f64 / 2.0);
    let row = usize::from(cy > height as f64 / 2.0);
    2 * row + col
}

/// BOP followed by the per-part maximum over regions centered in each image
/// quarter (0 for an empty quarter).
pub fn encode_sbop(s: &PartScoreMatrix, geom: &RegionGeometry) -> Result<EncodedVector> {
    if geom.boxes.len() != s.regions() {
        return Err(Error::GeometryMismatch {
            boxes: geom.boxes.len(),
            regions: s.regions(),
        });
    }
    let quarters: Vec<usize> = geom
        .boxes
        .iter()
        .map(|b| quarter_of(b, geom.width, geom.height))
        .collect();
    let mut out = bop_raw(s);
    out.reserve(4 * s.parts());
    for row in s.scores.row_iter() {
        let mut qmax = [f64::NEG_INFINITY; 4];
        for (j, &q) in quarters.iter().enumerate() {
            qmax[q] = qmax[q].max(row[j]);
        }
        out.extend(qmax.iter().map(|&v| if v == f64::NEG_INFINITY { 0.0 } else { v }));
    }
    l2_normalized(EncodingKind::Sbop, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `d x d_out`, orthonormal non-zero columns; directions beyond the data
    /// rank are zero.
    pub basis: DMatrix<f64>,
    /// Variance captured by each basis direction.
    pub variances: Vec<f64>,
    pub effective_rank: usize,
}

impl PcaModel {
    pub fn d_out(&self) -> usize {
        self.basis.ncols()
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        self.basis.tr_mul(&(x - &self.mean))
    }
}

/// Principal directions of the columns of `x`, largest variance first. Each
/// direction is signed so its largest-magnitude coordinate is positive.
pub fn fit_pca(x: &DMatrix<f64>, d_out: usize) -> Result<PcaModel> {
    let (d, n) = x.shape();
    if d_out == 0 || d_out > d || d_out > n {
        return Err(Error::InvalidPca(format!(
            "d_out={d_out} must lie in 1..=min(d={d}, n={n})"
        )));
    }
    let mean = x.column_mean();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let cov = &centered * centered.transpose() / n as f64;
    fit_pca_moments(mean, &cov, n, d_out)
}

/// PCA from precomputed first and second moments of `n` samples, for data
/// too large to hold as one matrix.
pub fn fit_pca_moments(mean: DVector<f64>, cov: &DMatrix<f64>, n: usize, d_out: usize) -> Result<PcaModel> {
    let d = mean.len();
    if cov.shape() != (d, d) {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {:?}, mean has d={d}",
            cov.shape()
        )));
    }
    if d_out == 0 || d_out > d || d_out > n {
        return Err(Error::InvalidPca(format!(
            "d_out={d_out} must lie in 1..=min(d={d}, n={n})"
        )));
    }
    let cov = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut basis = DMatrix::zeros(d, d_out);
    let mut variances = Vec::with_capacity(d_out);
    let mut effective_rank = 0;
    for (c, &i) in order.iter().take(d_out).enumerate() {
        let lambda = eig.eigenvalues[i];
        if top > 0.0 && lambda > RANK_TOL * top {
            let mut v = eig.eigenvectors.column(i).into_owned();
            let mut lead = 0;
            for j in 1..d {
                if v[j].abs() > v[lead].abs() {
                    lead = j;
                }
            }
            if v[lead] < 0.0 {
                v.neg_mut();
            }
            basis.set_column(c, &v);
            variances.push(lambda);
            effective_rank += 1;
        } else {
            variances.push(0.0);
        }
    }
    Ok(PcaModel {
        mean,
        basis,
        variances,
        effective_rank,
    })
}

fn check_cop_inputs(s: &PartScoreMatrix, x: &DMatrix<f64>, pca: &PcaModel) -> Result<()> {
    if s.regions() != x.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "{} scored regions, {} descriptors",
            s.regions(),
            x.ncols()
        )));
    }
    if pca.mean.len() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "PCA expects d={}, descriptors have d={}",
            pca.mean.len(),
            x.nrows()
        )));
    }
    Ok(())
}

fn cop_raw(s: &PartScoreMatrix, x: &DMatrix<f64>, pca: &PcaModel, weighted: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(s.parts() * pca.d_out());
    for part in 0..s.parts() {
        let j = s.argmax_region(part);
        let proj = pca.project(&x.column(j).into_owned());
        let w = if weighted { s.scores[(part, j)] } else { 1.0 };
        out.extend(proj.iter().map(|v| v * w));
    }
    out
}

/// Concatenated PCA projections of each part's best-scoring region.
pub fn encode_pcop(s: &PartScoreMatrix, x: &DMatrix<f64>, pca: &PcaModel) -> Result<EncodedVector> {
    check_cop_inputs(s, x, pca)?;
    l2_normalized(EncodingKind::Pcop, cop_raw(s, x, pca, false))
}

/// As [`encode_pcop`], each block scaled by the part's (signed) max score.
pub fn encode_wpcop(s: &PartScoreMatrix, x: &DMatrix<f64>, pca: &PcaModel) -> Result<EncodedVector> {
    check_cop_inputs(s, x, pca)?;
    l2_normalized(EncodingKind::Wpcop, cop_raw(s, x, pca, true))
}

/// Dispatches on `kind`. `pca` is required for pCOP/wpCOP.
pub fn encode(
    kind: EncodingKind,
    s: &PartScoreMatrix,
    x: &DMatrix<f64>,
    geom: &RegionGeometry,
    pca: Option<&PcaModel>,
) -> Result<EncodedVector> {
    let need_pca = || pca.ok_or_else(|| Error::InvalidPca("encoding needs a PCA model".into()));
    match kind {
        EncodingKind::Bop => encode_bop(s),
        EncodingKind::Sbop => encode_sbop(s, geom),
        EncodingKind::Pcop => encode_pcop(s, x, need_pca()?),
        EncodingKind::Wpcop => encode_wpcop(s, x, need_pca()?),
    }
}
