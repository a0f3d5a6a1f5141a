//! Region-to-part assignment: soft-assignment, thresholding, Sinkhorn
//! normalization with zero columns left alone, iterative soft-assignment
//! (ISA) under deterministic annealing, and per-image Hungarian assignment.
//!
//! An assignment matrix is `P x R_k`, where the `R_k` columns are the regions
//! of the group's images laid out image by image in blocks of `|R|` columns.
//! A feasible binary matrix has column sums `<= 1` and, inside every image
//! block, row sums `= 1`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parts::{matching_matrix, part_models, LdaStats};

/// Default soft-assignment threshold.
pub const DEFAULT_TAU: f64 = 0.01;
/// Largest per-image arrangement count the exhaustive solver accepts.
pub const MAX_ARRANGEMENTS: u128 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignMode {
    Soft,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    /// `P x R_k`, entries in `[0, 1]`.
    pub values: DMatrix<f64>,
    pub regions_per_image: usize,
    pub mode: AssignMode,
}

impl AssignmentMatrix {
    pub fn new(values: DMatrix<f64>, regions_per_image: usize, mode: AssignMode) -> Result<Self> {
        if regions_per_image == 0 || values.ncols() % regions_per_image != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} regions is not a multiple of {} regions per image",
                values.ncols(),
                regions_per_image
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidMatrix(format!("assignment entry {v} outside [0, 1]")));
        }
        Ok(Self {
            values,
            regions_per_image,
            mode,
        })
    }

    pub fn parts(&self) -> usize {
        self.values.nrows()
    }

    pub fn regions(&self) -> usize {
        self.values.ncols()
    }

    pub fn images(&self) -> usize {
        self.values.ncols() / self.regions_per_image
    }

    /// Checks the binary partial-assignment constraints exactly.
    pub fn is_feasible_binary(&self) -> bool {
        let r = self.regions_per_image;
        if self.values.iter().any(|&v| v != 0.0 && v != 1.0) {
            return false;
        }
        if self.values.column_iter().any(|c| c.sum() > 1.0) {
            return false;
        }
        (0..self.images()).all(|i| {
            self.values
                .columns(i * r, r)
                .row_iter()
                .all(|row| row.sum() == 1.0)
        })
    }

    /// For a feasible binary matrix, `out[image][part]` is the chosen
    /// region index within the image.
    pub fn chosen_regions(&self) -> Vec<Vec<Option<usize>>> {
        let r = self.regions_per_image;
        (0..self.images())
            .map(|i| {
                (0..self.parts())
                    .map(|p| (0..r).find(|&j| self.values[(p, i * r + j)] > 0.5))
                    .collect()
            })
            .collect()
    }
}

/// `exp(β (M − rowmax))`, the row maximum taken per part over each image's
/// regions. The largest entry of every row inside every image block is 1.
pub fn soft_assign(m: &DMatrix<f64>, beta: f64, regions_per_image: usize) -> Result<AssignmentMatrix> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMatrix("matching matrix is not finite".into()));
    }
    if !(beta > 0.0) {
        return Err(Error::ConfigInvalid(format!("beta must be > 0, got {beta}")));
    }
    let r = regions_per_image;
    if r == 0 || m.ncols() % r != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} regions is not a multiple of {r} regions per image",
            m.ncols()
        )));
    }
    let mut out = m.clone();
    for img in 0..m.ncols() / r {
        let mut block = out.columns_mut(img * r, r);
        for mut row in block.row_iter_mut() {
            let max = row.max();
            row.apply(|v| *v = (beta * (*v - max)).exp());
        }
    }
    AssignmentMatrix::new(out, r, AssignMode::Soft)
}

/// Zeroes every entry below `tau`.
pub fn threshold(a: &AssignmentMatrix, tau: f64) -> AssignmentMatrix {
    let mut out = a.clone();
    out.values.apply(|v| {
        if *v < tau {
            *v = 0.0
        }
    });
    out
}

/// `(row residual, column residual)`: the largest `|block row sum − 1|` and
/// the largest excess of a column sum over 1.
pub fn sinkhorn_residuals(a: &AssignmentMatrix) -> (f64, f64) {
    let (p, r) = (a.parts(), a.regions_per_image);
    if p == 0 {
        return (0.0, 0.0);
    }
    let v = a.values.as_slice();
    let mut row_sums = vec![0.0; p];
    let mut row_res: f64 = 0.0;
    for block in v.chunks(p * r) {
        row_sums.iter_mut().for_each(|s| *s = 0.0);
        for col in block.chunks(p) {
            for (s, x) in row_sums.iter_mut().zip(col) {
                *s += x;
            }
        }
        for s in &row_sums {
            row_res = row_res.max((s - 1.0).abs());
        }
    }
    let col_res = v
        .chunks(p)
        .map(|c| (c.iter().sum::<f64>() - 1.0).max(0.0))
        .fold(0.0, f64::max);
    (row_res, col_res)
}

/// Alternating ℓ¹ normalization: every part row sums to 1 inside every
/// image block, every column whose sum exceeds 1 is scaled back to 1, and
/// zero columns are never touched. Stops once both residuals are below
/// `tol` or after `max_iter` sweeps.
pub fn sinkhorn(a: &AssignmentMatrix, tol: f64, max_iter: usize) -> Result<AssignmentMatrix> {
    let r = a.regions_per_image;
    for img in 0..a.images() {
        for (p, row) in a.values.columns(img * r, r).row_iter().enumerate() {
            if !(row.sum() > 0.0) {
                return Err(Error::ZeroRow { part: p, image: img });
            }
        }
    }
    let mut out = a.clone();
    let p = out.parts();
    let mut row_sums = vec![0.0; p];
    let mut previous = out.values.as_slice().to_vec();
    for _ in 0..max_iter {
        let (row_res, col_res) = sinkhorn_residuals(&out);
        if row_res < tol && col_res < tol {
            break;
        }
        // column-major storage: column j occupies v[j*p..(j+1)*p]
        let v = out.values.as_mut_slice();
        for block in v.chunks_mut(p * r) {
            row_sums.iter_mut().for_each(|s| *s = 0.0);
            for col in block.chunks(p) {
                for (s, x) in row_sums.iter_mut().zip(col) {
                    *s += x;
                }
            }
            for col in block.chunks_mut(p) {
                for (x, s) in col.iter_mut().zip(&row_sums) {
                    *x /= s;
                }
            }
        }
        for col in v.chunks_mut(p) {
            let s: f64 = col.iter().sum();
            if s > 1.0 {
                col.iter_mut().for_each(|x| *x /= s);
            }
        }
        // a sweep that changes nothing would repeat forever (e.g. two one-hot
        // rows sharing a column), so every further sweep is a no-op
        if v == previous.as_slice() {
            break;
        }
        previous.copy_from_slice(v);
    }
    Ok(out)
}

/// Inverse temperatures `β0, β0·g, β0·g², …` up to `β_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub beta0: f64,
    pub beta_growth: f64,
    pub beta_max: f64,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        Self {
            beta0: 1.0,
            beta_growth: 2.0,
            beta_max: 128.0,
            inner_tol: 1e-4,
            inner_max_iter: 50,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta0 > 0.0 && self.beta_growth > 1.0 && self.beta_max >= self.beta0) {
            return Err(Error::ConfigInvalid(format!(
                "anneal schedule needs beta0 > 0, growth > 1, beta_max >= beta0; got {self:?}"
            )));
        }
        if !(self.inner_tol > 0.0) || self.inner_max_iter == 0 {
            return Err(Error::ConfigInvalid("anneal inner loop needs tol > 0 and >= 1 iteration".into()));
        }
        Ok(())
    }

    pub fn betas(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut b = self.beta0;
        while b <= self.beta_max * (1.0 + 1e-12) {
            out.push(b);
            b *= self.beta_growth;
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsaParams {
    pub schedule: AnnealSchedule,
    pub tau: f64,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
}

impl Default for IsaParams {
    fn default() -> Self {
        Self {
            schedule: AnnealSchedule::default(),
            tau: DEFAULT_TAU,
            sinkhorn_tol: 1e-6,
            sinkhorn_max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsaOutcome {
    /// Feasible binary assignment.
    pub assignment: AssignmentMatrix,
    /// Annealed soft assignment before binarization.
    pub soft: AssignmentMatrix,
    /// Inner iterations spent at each β.
    pub inner_iterations: Vec<usize>,
}

/// Iterative soft-assignment. Alternates LDA part models with thresholded,
/// Sinkhorn-projected soft-assignment for increasing β, then binarizes the
/// annealed matrix with per-image Hungarian assignment.
pub fn isa(
    a0: &AssignmentMatrix,
    xk: &DMatrix<f64>,
    stats: &LdaStats,
    nk: usize,
    params: &IsaParams,
) -> Result<IsaOutcome> {
    params.schedule.validate()?;
    if !(params.tau > 0.0 && params.tau < 1.0) {
        return Err(Error::ConfigInvalid(format!("tau must lie in (0, 1), got {}", params.tau)));
    }
    let (p, r) = (a0.parts(), a0.regions_per_image);
    if p > r {
        return Err(Error::NoFeasibleBinarization { parts: p, regions: r });
    }
    let mut a = sinkhorn(a0, params.sinkhorn_tol, params.sinkhorn_max_iter)?;
    let mut inner_iterations = Vec::new();
    for beta in params.schedule.betas() {
        let mut iters = 0;
        while iters < params.schedule.inner_max_iter {
            iters += 1;
            let bank = part_models(&a, xk, stats, nk, 0)?;
            let m = matching_matrix(&bank, xk)?;
            let next = threshold(&soft_assign(&m, beta, r)?, params.tau);
            let next = sinkhorn(&next, params.sinkhorn_tol, params.sinkhorn_max_iter)?;
            let delta = (&next.values - &a.values).abs().max();
            a = next;
            if delta < params.schedule.inner_tol {
                break;
            }
        }
        inner_iterations.push(iters);
    }
    let assignment = hungarian_per_image(&a.values, r)?;
    if !assignment.is_feasible_binary() {
        return Err(Error::NoFeasibleBinarization { parts: p, regions: r });
    }
    Ok(IsaOutcome {
        assignment,
        soft: a,
        inner_iterations,
    })
}

/// Maximum-weight assignment of every row of `scores` (`n x m`, `n <= m`)
/// to a distinct column. Returns the column of each row.
///
/// Shortest augmenting path with potentials, O(n² m).
pub fn max_weight_assignment(scores: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = scores.shape();
    assert!(n <= m, "more rows than columns");
    let cost = |i: usize, j: usize| -scores[(i - 1, j - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

fn binary_from_choices(p: usize, rk: usize, rpi: usize, choices: &[Vec<usize>]) -> Result<AssignmentMatrix> {
    let mut values = DMatrix::zeros(p, rk);
    for (img, regions) in choices.iter().enumerate() {
        for (part, &j) in regions.iter().enumerate() {
            values[(part, img * rpi + j)] = 1.0;
        }
    }
    AssignmentMatrix::new(values, rpi, AssignMode::Binary)
}

fn check_blocks(m: &DMatrix<f64>, rpi: usize) -> Result<()> {
    if rpi == 0 || m.ncols() % rpi != 0 {
        return Err(Error::DimensionMismatch(format!(
            "{} regions is not a multiple of {rpi} regions per image",
            m.ncols()
        )));
    }
    if m.nrows() > rpi {
        return Err(Error::InfeasibleBlock {
            parts: m.nrows(),
            regions: rpi,
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMatrix("score matrix is not finite".into()));
    }
    Ok(())
}

/// Exact per-image linear assignment maximizing `<A_I, M_I>` for every
/// image block independently.
pub fn hungarian_per_image(m: &DMatrix<f64>, regions_per_image: usize) -> Result<AssignmentMatrix> {
    check_blocks(m, regions_per_image)?;
    let r = regions_per_image;
    let choices: Vec<Vec<usize>> = (0..m.ncols() / r)
        .into_par_iter()
        .map(|img| max_weight_assignment(&m.columns(img * r, r).into_owned()))
        .collect();
    binary_from_choices(m.nrows(), m.ncols(), r, &choices)
}

/// Number of injective maps from `p` parts to `r` regions.
pub fn arrangements(p: usize, r: usize) -> u128 {
    if p > r {
        return 0;
    }
    ((r - p + 1)..=r).map(|v| v as u128).product()
}

/// Exhaustive per-image search over every partial permutation. Equal
/// scores keep the lexicographically first arrangement.
pub fn brute_force_assign(m: &DMatrix<f64>, regions_per_image: usize) -> Result<AssignmentMatrix> {
    check_blocks(m, regions_per_image)?;
    let (p, r) = (m.nrows(), regions_per_image);
    let count = arrangements(p, r);
    if count > MAX_ARRANGEMENTS {
        return Err(Error::InstanceTooLarge { arrangements: count });
    }
    let choices: Vec<Vec<usize>> = (0..m.ncols() / r)
        .map(|img| {
            let block = m.columns(img * r, r).into_owned();
            let mut best: Option<(f64, Vec<usize>)> = None;
            let mut current = Vec::with_capacity(p);
            let mut used = vec![false; r];
            enumerate(&block, &mut current, &mut used, &mut best);
            best.map(|(_, c)| c).unwrap_or_default()
        })
        .collect();
    binary_from_choices(p, m.ncols(), r, &choices)
}

fn enumerate(block: &DMatrix<f64>, current: &mut Vec<usize>, used: &mut [bool], best: &mut Option<(f64, Vec<usize>)>) {
    if current.len() == block.nrows() {
        let score: f64 = current.iter().enumerate().map(|(p, &j)| block[(p, j)]).sum();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            *best = Some((score, current.clone()));
        }
        return;
    }
    for j in 0..used.len() {
        if !used[j] {
            used[j] = true;
            current.push(j);
            enumerate(block, current, used, best);
            current.pop();
            used[j] = false;
        }
    }
}
