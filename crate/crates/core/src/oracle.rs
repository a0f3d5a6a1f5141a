//! Independent reference computations used to cross-check the main
//! modules. Everything here is written as plain summation loops over
//! matrix entries, with no calls into the linear-algebra helpers used by
//! the implementation.

use nalgebra::DMatrix;
use num::rational::Ratio;
use num::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{brute_force_assign, hungarian_per_image, AssignMode, AssignmentMatrix};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{average_precision, Relevance};
use crate::parts::{compute_lda_stats, part_models_row_normalized, PartModelBank, Ridge};
use crate::synth::PlantedTruth;

/// Longest relevance list the rational AP oracle accepts.
pub const MAX_RATIONAL_AP_LEN: usize = 20;

/// Part models by the per-part weighted-mean formula
/// `w_p = Σ⁻¹ (Σ_r a_pr x_r / Σ_r a_pr − μ)`. Returns `d x P`.
pub fn oracle_lda(
    a: &DMatrix<f64>,
    xk: &DMatrix<f64>,
    mu: &[f64],
    sigma_inv: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (p, r) = (a.nrows(), a.ncols());
    let d = mu.len();
    if xk.nrows() != d || xk.ncols() != r || sigma_inv.nrows() != d || sigma_inv.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "A {p}x{r}, X {}x{}, mu {d}, sigma_inv {}x{}",
            xk.nrows(),
            xk.ncols(),
            sigma_inv.nrows(),
            sigma_inv.ncols()
        )));
    }
    let mut w = DMatrix::zeros(d, p);
    for part in 0..p {
        let mut total = 0.0;
        for j in 0..r {
            total += a[(part, j)];
        }
        if !(total > 0.0) {
            return Err(Error::EmptyPart { part });
        }
        let mut centered = vec![0.0; d];
        for (i, c) in centered.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..r {
                s += a[(part, j)] * xk[(i, j)];
            }
            *c = s / total - mu[i];
        }
        for i in 0..d {
            let mut s = 0.0;
            for (k, c) in centered.iter().enumerate() {
                s += sigma_inv[(i, k)] * c;
            }
            w[(i, part)] = s;
        }
    }
    Ok(w)
}

/// Average precision as an exact fraction: junk entries dropped, then the
/// precision at every positive averaged.
pub fn oracle_ap(list: &[Relevance]) -> Result<Ratio<i128>> {
    if list.len() > MAX_RATIONAL_AP_LEN {
        return Err(Error::ConfigInvalid(format!(
            "rational AP oracle takes at most {MAX_RATIONAL_AP_LEN} entries, got {}",
            list.len()
        )));
    }
    let kept: Vec<Relevance> = list.iter().copied().filter(|r| *r != Relevance::Junk).collect();
    let positives = kept.iter().filter(|r| **r == Relevance::Positive).count() as i128;
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut sum = Ratio::from_integer(0i128);
    for (k, r) in kept.iter().enumerate() {
        if *r == Relevance::Positive {
            let hits_so_far = kept[..=k].iter().filter(|r| **r == Relevance::Positive).count() as i128;
            sum += Ratio::new(hits_so_far, k as i128 + 1);
        }
    }
    Ok(sum / Ratio::from_integer(positives))
}

pub fn ratio_to_f64(r: &Ratio<i128>) -> f64 {
    r.numer().to_f64().unwrap_or(f64::NAN) / r.denom().to_f64().unwrap_or(f64::NAN)
}

fn scalar_argmax_region(w: &DMatrix<f64>, part: usize, x: &DMatrix<f64>) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for j in 0..x.ncols() {
        let mut s = 0.0;
        for i in 0..x.nrows() {
            s += w[(i, part)] * x[(i, j)];
        }
        if s > best_score {
            best_score = s;
            best = j;
        }
    }
    best
}

/// Fraction of (group, image) pairs, over every image of every learned
/// group, for which some part of the group's bank has its best-scoring
/// region on a planted slot of that image. `groups[k]` lists the dataset
/// indices of the images in the group of `banks[k]`.
pub fn recovery_score(
    banks: &[PartModelBank],
    groups: &[Vec<usize>],
    ds: &Dataset,
    truth: &PlantedTruth,
) -> Result<f64> {
    truth.check_against(&ds.manifest)?;
    if banks.len() != groups.len() {
        return Err(Error::TruthMismatch(format!(
            "{} banks for {} groups",
            banks.len(),
            groups.len()
        )));
    }
    let mut pairs = 0usize;
    let mut hits = 0usize;
    for (bank, members) in banks.iter().zip(groups) {
        for &i in members {
            let Some(t) = truth.images.get(i) else {
                return Err(Error::TruthMismatch(format!("group member {i} out of range")));
            };
            let x = &ds.images[i].regions;
            pairs += 1;
            let found = (0..bank.weights.ncols())
                .any(|p| t.planted.contains_key(&scalar_argmax_region(&bank.weights, p, x)));
            if found {
                hits += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::TruthMismatch("no images in any group".into()));
    }
    Ok(hits as f64 / pairs as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFailure {
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub suite: String,
    pub cases: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub failures: Vec<OracleFailure>,
    pub passed: bool,
}

impl OracleReport {
    fn from_cases(suite: &str, tolerance: f64, results: Vec<(u64, std::result::Result<f64, String>)>) -> Self {
        let mut max_deviation: f64 = 0.0;
        let mut failures = Vec::new();
        for (seed, r) in &results {
            match r {
                Ok(dev) => {
                    max_deviation = max_deviation.max(*dev);
                    if !(*dev <= tolerance) {
                        failures.push(OracleFailure {
                            seed: *seed,
                            message: format!("deviation {dev:e} exceeds {tolerance:e}"),
                        });
                    }
                }
                Err(m) => failures.push(OracleFailure {
                    seed: *seed,
                    message: m.clone(),
                }),
            }
        }
        Self {
            suite: suite.to_string(),
            cases: results.len(),
            max_deviation,
            tolerance,
            passed: failures.is_empty(),
            failures,
        }
    }
}

pub const SUITES: [&str; 3] = ["lda", "ap", "assignment"];

/// Random LDA instance: `d ≤ 32` descriptors, `images` blocks of `r`
/// regions and a strictly positive soft assignment with entries in (0, 1].
pub fn random_lda_instance(seed: u64) -> (DMatrix<f64>, DMatrix<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=32);
    let r = rng.random_range(2..=8);
    let images = rng.random_range(1..=4);
    let p = rng.random_range(1..=r);
    let x = DMatrix::from_fn(d, r * images, |_, _| rng.random_range(-3.0..3.0));
    let a = DMatrix::from_fn(p, r * images, |_, _| rng.random_range(0.01..1.0));
    (a, x, r)
}

fn lda_case(seed: u64) -> std::result::Result<f64, String> {
    let (a, x, r) = random_lda_instance(seed);
    let stats = compute_lda_stats(&x, Ridge::default()).map_err(|e| e.to_string())?;
    let am = AssignmentMatrix::new(a.clone(), r, AssignMode::Soft).map_err(|e| e.to_string())?;
    let fast = part_models_row_normalized(&am, &x, &stats, 0).map_err(|e| e.to_string())?;
    let mu: Vec<f64> = stats.mu.iter().copied().collect();
    let slow = oracle_lda(&a, &x, &mu, &stats.sigma_inv).map_err(|e| e.to_string())?;
    Ok((fast.weights - slow).abs().max())
}

/// Random relevance list of length 1..=20 with at least one positive.
pub fn random_relevance_list(seed: u64) -> Vec<Relevance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=MAX_RATIONAL_AP_LEN);
    let mut list: Vec<Relevance> = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0..=3 => Relevance::Positive,
            4..=7 => Relevance::Negative,
            _ => Relevance::Junk,
        })
        .collect();
    if !list.contains(&Relevance::Positive) {
        let k = rng.random_range(0..n);
        list[k] = Relevance::Positive;
    }
    list
}

fn ap_case(seed: u64) -> std::result::Result<f64, String> {
    let list = random_relevance_list(seed);
    let exact = oracle_ap(&list).map_err(|e| e.to_string())?;
    let fast = average_precision(&list).map_err(|e| e.to_string())?;
    Ok((fast - ratio_to_f64(&exact)).abs())
}

/// Random score matrix with `P ≤ 4`, `|R| ≤ 6`, at most 3 images.
pub fn random_assignment_instance(seed: u64) -> (DMatrix<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(1..=6);
    let p = rng.random_range(1..=r.min(4));
    let images = rng.random_range(1..=3);
    let m = DMatrix::from_fn(p, r * images, |_, _| rng.random_range(-5.0..5.0));
    (m, r)
}

fn assignment_case(seed: u64) -> std::result::Result<f64, String> {
    let (m, r) = random_assignment_instance(seed);
    let h = hungarian_per_image(&m, r).map_err(|e| e.to_string())?;
    let b = brute_force_assign(&m, r).map_err(|e| e.to_string())?;
    if !h.is_feasible_binary() {
        return Err("hungarian output infeasible".into());
    }
    let obj = |a: &DMatrix<f64>| {
        let mut s = 0.0;
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                s += a[(i, j)] * m[(i, j)];
            }
        }
        s
    };
    Ok((obj(&h.values) - obj(&b.values)).abs())
}

/// Runs `cases` seeded cases of a suite, seeds `seed, seed+1, …`.
pub fn run_suite(suite: &str, cases: usize, seed: u64) -> Result<OracleReport> {
    let (case, tolerance): (fn(u64) -> std::result::Result<f64, String>, f64) = match suite {
        "lda" => (lda_case, 1e-8),
        "ap" => (ap_case, 1e-12),
        "assignment" => (assignment_case, 1e-9),
        other => {
            return Err(Error::ConfigInvalid(format!(
                "unknown oracle suite {other}; expected one of {SUITES:?}"
            )))
        }
    };
    let results: Vec<(u64, std::result::Result<f64, String>)> = (0..cases as u64)
        .into_par_iter()
        .map(|i| {
            let s = seed.wrapping_add(i);
            (s, case(s))
        })
        .collect();
    Ok(OracleReport::from_cases(suite, tolerance, results))
}
