//! LDA part models: shared whitening statistics, part classifiers from an
//! assignment matrix, region/part matching scores and discriminative
//! initialization.

use std::borrow::Borrow;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::AssignmentMatrix;
use crate::error::{Error, Result};
use crate::grouping::kmeans;

/// Candidate centroids per requested part in [`init_parts`].
pub const CANDIDATES_PER_PART: usize = 10;
/// Added to the between-group response before taking the ratio.
pub const RATIO_EPSILON: f64 = 1e-8;

/// Covariance regularization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Ridge {
    /// λ used as given.
    Absolute(f64),
    /// λ = factor · trace(Σ) / d.
    TraceScaled(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::TraceScaled(0.01)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    /// `(Σ + λI)^-1`
    pub sigma_inv: DMatrix<f64>,
    /// The resolved λ.
    pub ridge: f64,
}

impl LdaStats {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Mean and (biased) covariance of the columns of `x`, plus the regularized
/// inverse covariance.
pub fn compute_lda_stats(x: &DMatrix<f64>, ridge: Ridge) -> Result<LdaStats> {
    compute_lda_stats_blocks(std::slice::from_ref(x), ridge)
}

/// Same as [`compute_lda_stats`] over the column-wise concatenation of `blocks`.
pub fn compute_lda_stats_blocks<M: Borrow<DMatrix<f64>>>(blocks: &[M], ridge: Ridge) -> Result<LdaStats> {
    let blocks: Vec<&DMatrix<f64>> = blocks.iter().map(|b| b.borrow()).collect();
    let d = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    if d == 0 {
        return Err(Error::TooFewSamples("no descriptors for LDA statistics".into()));
    }
    if let Some(b) = blocks.iter().find(|b| b.nrows() != d) {
        return Err(Error::DimensionMismatch(format!("block with d={} among d={d}", b.nrows())));
    }
    let r: usize = blocks.iter().map(|b| b.ncols()).sum();
    if r < 2 {
        return Err(Error::TooFewSamples(format!("LDA statistics need >= 2 descriptors, got {r}")));
    }
    let mut mu = DVector::zeros(d);
    for b in &blocks {
        for col in b.column_iter() {
            mu += col;
        }
    }
    mu /= r as f64;
    let mut sigma = DMatrix::zeros(d, d);
    for b in &blocks {
        let centered = DMatrix::from_fn(d, b.ncols(), |i, j| b[(i, j)] - mu[i]);
        sigma.gemm(1.0, &centered, &centered.transpose(), 1.0);
    }
    sigma /= r as f64;
    // enforce exact symmetry
    let sigma = (&sigma + sigma.transpose()) * 0.5;

    let lambda = match ridge {
        Ridge::Absolute(l) => l,
        Ridge::TraceScaled(f) => f * sigma.trace() / d as f64,
    };
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::ConfigInvalid(format!("ridge must be finite and >= 0, got {lambda}")));
    }
    let regularized = &sigma + DMatrix::identity(d, d) * lambda;
    let chol = regularized
        .cholesky()
        .ok_or(Error::SingularCovariance { ridge: lambda })?;
    let inv = chol.inverse();
    let sigma_inv = (&inv + inv.transpose()) * 0.5;
    if sigma_inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance { ridge: lambda });
    }
    Ok(LdaStats {
        mu,
        sigma,
        sigma_inv,
        ridge: lambda,
    })
}

/// `d x P` part classifiers of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct PartModelBank {
    pub group: usize,
    pub weights: DMatrix<f64>,
}

impl PartModelBank {
    pub fn parts(&self) -> usize {
        self.weights.ncols()
    }

    pub fn dim(&self) -> usize {
        self.weights.nrows()
    }
}

fn check_part_inputs(a: &AssignmentMatrix, xk: &DMatrix<f64>, stats: &LdaStats) -> Result<Vec<f64>> {
    if a.values.ncols() != xk.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "assignment has {} regions, descriptors have {}",
            a.values.ncols(),
            xk.ncols()
        )));
    }
    if xk.nrows() != stats.dim() {
        return Err(Error::DimensionMismatch(format!(
            "descriptors have d={}, statistics have d={}",
            xk.nrows(),
            stats.dim()
        )));
    }
    let sums: Vec<f64> = a.values.row_iter().map(|r| r.sum()).collect();
    if let Some(p) = sums.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::EmptyPart { part: p });
    }
    Ok(sums)
}

/// `W = Σ⁻¹ (X Aᵀ / n_k − μ 1ᵀ)`, with `n_k` the group's image count.
pub fn part_models(
    a: &AssignmentMatrix,
    xk: &DMatrix<f64>,
    stats: &LdaStats,
    nk: usize,
    group: usize,
) -> Result<PartModelBank> {
    check_part_inputs(a, xk, stats)?;
    if nk == 0 {
        return Err(Error::TooFewSamples("group has no images".into()));
    }
    let mut means = xk * a.values.transpose() / nk as f64;
    for mut col in means.column_iter_mut() {
        col -= &stats.mu;
    }
    Ok(PartModelBank {
        group,
        weights: &stats.sigma_inv * means,
    })
}

/// Column `p` is `Σ⁻¹ (Σ_r a_pr x_r / Σ_r a_pr − μ)`.
pub fn part_models_row_normalized(
    a: &AssignmentMatrix,
    xk: &DMatrix<f64>,
    stats: &LdaStats,
    group: usize,
) -> Result<PartModelBank> {
    let sums = check_part_inputs(a, xk, stats)?;
    let mut means = xk * a.values.transpose();
    for (p, mut col) in means.column_iter_mut().enumerate() {
        col /= sums[p];
        col -= &stats.mu;
    }
    Ok(PartModelBank {
        group,
        weights: &stats.sigma_inv * means,
    })
}

/// `M = Wᵀ X`, `P x R`.
pub fn matching_matrix(bank: &PartModelBank, xk: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if bank.dim() != xk.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "parts have d={}, descriptors have d={}",
            bank.dim(),
            xk.nrows()
        )));
    }
    Ok(bank.weights.tr_mul(xk))
}

/// Frobenius inner product `<A, M>`.
pub fn objective(a: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != m.shape() {
        return Err(Error::DimensionMismatch(format!(
            "assignment {:?} vs matching {:?}",
            a.shape(),
            m.shape()
        )));
    }
    Ok(a.iter().zip(m.iter()).map(|(x, y)| x * y).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitParts {
    pub bank: PartModelBank,
    /// Indices of the chosen candidates in the candidate pool, best first.
    pub chosen: Vec<usize>,
    /// `r+ / (r- + ε)` for every candidate in the pool.
    pub ratios: Vec<f64>,
}

/// Per-image max-pooled responses of the columns of `w`: `out[c][i] = max_r wcᵀ x_r` over image `i`.
fn max_pooled_responses(w: &DMatrix<f64>, images: &[&DMatrix<f64>]) -> Vec<Vec<f64>> {
    let per_image: Vec<Vec<f64>> = images
        .par_iter()
        .map(|x| {
            let s = w.tr_mul(x);
            s.row_iter().map(|row| row.max()).collect()
        })
        .collect();
    (0..w.ncols())
        .map(|c| per_image.iter().map(|r| r[c]).collect())
        .collect()
}

/// Clusters the group's region descriptors, turns every centroid `c` into an
/// LDA candidate `Σ⁻¹(c − μ)` and keeps the `p` candidates with the largest
/// ratio of summed max-pooled responses inside vs outside the group.
///
/// `images` are the region matrices of all training images; `in_group[i]`
/// marks membership of image `i`.
pub fn init_parts(
    xk: &DMatrix<f64>,
    in_group: &[bool],
    images: &[&DMatrix<f64>],
    stats: &LdaStats,
    p: usize,
    seed: u64,
    group: usize,
) -> Result<InitParts> {
    init_parts_with_pool(xk, in_group, images, stats, p, CANDIDATES_PER_PART * p, seed, group)
}

#[allow(clippy::too_many_arguments)]
pub fn init_parts_with_pool(
    xk: &DMatrix<f64>,
    in_group: &[bool],
    images: &[&DMatrix<f64>],
    stats: &LdaStats,
    p: usize,
    pool: usize,
    seed: u64,
    group: usize,
) -> Result<InitParts> {
    if in_group.len() != images.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} membership flags for {} images",
            in_group.len(),
            images.len()
        )));
    }
    if xk.nrows() != stats.dim() {
        return Err(Error::DimensionMismatch(format!(
            "descriptors have d={}, statistics have d={}",
            xk.nrows(),
            stats.dim()
        )));
    }
    let pool = pool.min(xk.ncols());
    if p == 0 || pool < p {
        return Err(Error::TooFewClusters { available: pool, requested: p });
    }
    let centroids = kmeans(xk, pool, seed)?;
    let mut candidates = centroids.vectors;
    for mut col in candidates.column_iter_mut() {
        col -= &stats.mu;
    }
    let candidates = &stats.sigma_inv * candidates;
    let responses = max_pooled_responses(&candidates, images);
    let ratios: Vec<f64> = responses
        .iter()
        .map(|r| {
            let (mut pos, mut neg) = (0.0, 0.0);
            for (v, &inside) in r.iter().zip(in_group) {
                if inside {
                    pos += v;
                } else {
                    neg += v;
                }
            }
            pos / (neg + RATIO_EPSILON)
        })
        .collect();
    let mut order: Vec<usize> = (0..pool).collect();
    // stable: equal ratios keep the lowest cluster index first
    order.sort_by(|&a, &b| ratios[b].total_cmp(&ratios[a]));
    order.truncate(p);
    let weights = DMatrix::from_fn(stats.dim(), p, |r, c| candidates[(r, order[c])]);
    Ok(InitParts {
        bank: PartModelBank { group, weights },
        chosen: order,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::AssignMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(d, n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn soft(values: DMatrix<f64>, rpi: usize) -> AssignmentMatrix {
        AssignmentMatrix::new(values, rpi, AssignMode::Soft).unwrap()
    }

    #[test]
    fn two_point_stats() {
        let x = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let s = compute_lda_stats(&x, Ridge::Absolute(0.1)).unwrap();
        assert_eq!(s.mu, DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(s.sigma, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        assert!((s.sigma_inv[(0, 0)] - 1.0 / 1.1).abs() < 1e-12);
        assert!((s.sigma_inv[(1, 1)] - 10.0).abs() < 1e-10);
        assert!(s.sigma_inv[(0, 1)].abs() < 1e-15);
    }

    #[test]
    fn identical_columns_give_scaled_identity() {
        let x = DMatrix::from_element(3, 5, 2.0);
        let s = compute_lda_stats(&x, Ridge::Absolute(0.5)).unwrap();
        assert!(s.sigma.iter().all(|&v| v == 0.0));
        assert!((&s.sigma_inv - DMatrix::identity(3, 3) * 2.0).abs().max() < 1e-12);
        assert!(matches!(
            compute_lda_stats(&x, Ridge::default()),
            Err(Error::SingularCovariance { .. })
        ));
    }

    #[test]
    fn inverse_residual_is_small() {
        let x = random(20, 200, 1);
        let s = compute_lda_stats(&x, Ridge::default()).unwrap();
        let reg = &s.sigma + DMatrix::identity(20, 20) * s.ridge;
        let resid = (&s.sigma_inv * reg - DMatrix::identity(20, 20)).abs().max();
        assert!(resid < 1e-6, "{resid}");
        assert!((&s.sigma - s.sigma.transpose()).abs().max() < 1e-10);
        assert!((s.ridge - 0.01 * s.sigma.trace() / 20.0).abs() < 1e-15);
    }

    #[test]
    fn blocks_match_concatenation() {
        let a = random(4, 10, 2);
        let b = random(4, 7, 3);
        let cat = DMatrix::from_fn(4, 17, |r, c| if c < 10 { a[(r, c)] } else { b[(r, c - 10)] });
        let s1 = compute_lda_stats(&cat, Ridge::default()).unwrap();
        let s2 = compute_lda_stats_blocks(&[a, b], Ridge::default()).unwrap();
        assert!((s1.sigma_inv - s2.sigma_inv).abs().max() < 1e-10);
    }

    #[test]
    fn too_few_samples() {
        let x = random(3, 1, 0);
        assert!(matches!(compute_lda_stats(&x, Ridge::default()), Err(Error::TooFewSamples(_))));
    }

    #[test]
    fn identity_whitening_recovers_mean_of_assigned() {
        // two images of 3 regions, part 0 takes region 1 of each image
        let x = random(4, 6, 9);
        let stats = LdaStats {
            mu: DVector::zeros(4),
            sigma: DMatrix::zeros(4, 4),
            sigma_inv: DMatrix::identity(4, 4),
            ridge: 0.0,
        };
        let mut a = DMatrix::zeros(1, 6);
        a[(0, 1)] = 1.0;
        a[(0, 4)] = 1.0;
        let bank = part_models(&soft(a, 3), &x, &stats, 2, 0).unwrap();
        let expected = (x.column(1) + x.column(4)) / 2.0;
        assert!((bank.weights.column(0) - expected).abs().max() < 1e-15);
    }

    #[test]
    fn empty_part_is_rejected() {
        let x = random(2, 4, 0);
        let stats = compute_lda_stats(&x, Ridge::default()).unwrap();
        let a = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            part_models(&soft(a, 2), &x, &stats, 2, 0),
            Err(Error::EmptyPart { part: 1 })
        ));
    }

    #[test]
    fn matrix_and_row_normalized_paths_agree_on_feasible_binary() {
        let x = random(5, 12, 4);
        let stats = compute_lda_stats(&x, Ridge::default()).unwrap();
        // 3 images x 4 regions, 2 parts, each part one region per image
        let mut a = DMatrix::zeros(2, 12);
        for img in 0..3 {
            a[(0, img * 4)] = 1.0;
            a[(1, img * 4 + 2)] = 1.0;
        }
        let a = soft(a, 4);
        let w5 = part_models(&a, &x, &stats, 3, 0).unwrap();
        let w4 = part_models_row_normalized(&a, &x, &stats, 0).unwrap();
        assert!((w5.weights - w4.weights).abs().max() < 1e-10);
    }

    #[test]
    fn matching_matrix_examples() {
        let bank = PartModelBank {
            group: 0,
            weights: DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]),
        };
        let m = matching_matrix(&bank, &DMatrix::identity(3, 3)).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]));

        let bank = PartModelBank { group: 0, weights: random(6, 2, 1) };
        let x = random(6, 3, 2);
        let m = matching_matrix(&bank, &x).unwrap();
        assert_eq!(m.shape(), (2, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (p, r) = (rng.random_range(0..2), rng.random_range(0..3));
            let dot: f64 = (0..6).map(|i| bank.weights[(i, p)] * x[(i, r)]).sum();
            assert!((m[(p, r)] - dot).abs() < 1e-12);
        }
        assert!(matches!(matching_matrix(&bank, &random(5, 3, 0)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn objective_examples() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        assert_eq!(objective(&DMatrix::zeros(2, 2), &m).unwrap(), 0.0);
        assert_eq!(objective(&DMatrix::identity(2, 2), &m).unwrap(), 5.0);
        let a = random(10, 50, 1);
        let m = random(10, 50, 2);
        let mut oracle = 0.0;
        for i in 0..10 {
            for j in 0..50 {
                oracle += a[(i, j)] * m[(i, j)];
            }
        }
        assert!((objective(&a, &m).unwrap() - oracle).abs() < 1e-9);
        assert!(objective(&a, &random(10, 49, 0)).is_err());
    }

    #[test]
    fn part_models_is_affine_in_a() {
        let x = random(4, 8, 3);
        let stats = compute_lda_stats(&x, Ridge::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a1 = DMatrix::from_fn(3, 8, |_, _| rng.random_range(0.05..0.5));
        let a2 = DMatrix::from_fn(3, 8, |_, _| rng.random_range(0.05..0.5));
        let w1 = part_models(&soft(a1.clone(), 4), &x, &stats, 2, 0).unwrap().weights;
        let w2 = part_models(&soft(a2.clone(), 4), &x, &stats, 2, 0).unwrap().weights;
        let w12 = part_models(&soft(&a1 + &a2, 4), &x, &stats, 2, 0).unwrap().weights;
        let offset = &stats.sigma_inv * &stats.mu;
        let mut expected = w1 + w2;
        for mut col in expected.column_iter_mut() {
            col += &offset;
        }
        assert!((w12 - expected).abs().max() < 1e-9);
    }

    #[test]
    fn permuting_parts_is_equivariant() {
        let bank = PartModelBank { group: 0, weights: random(5, 3, 1) };
        let x = random(5, 6, 2);
        let a = random(3, 6, 3);
        let m = matching_matrix(&bank, &x).unwrap();
        let perm = [2, 0, 1];
        let pbank = PartModelBank {
            group: 0,
            weights: DMatrix::from_fn(5, 3, |r, c| bank.weights[(r, perm[c])]),
        };
        let pm = matching_matrix(&pbank, &x).unwrap();
        let pa = DMatrix::from_fn(3, 6, |r, c| a[(perm[r], c)]);
        for (i, &pi) in perm.iter().enumerate() {
            assert_eq!(pm.row(i), m.row(pi));
        }
        let o1 = objective(&a, &m).unwrap();
        let o2 = objective(&pa, &pm).unwrap();
        assert!((o1 - o2).abs() < 1e-12);
    }

    #[test]
    fn init_parts_prefers_in_group_detector() {
        // group images contain a strong pattern along e0; others do not
        let d = 3;
        let mut images = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..6 {
            let mut x = DMatrix::from_fn(d, 4, |_, _| rng.random_range(-0.1..0.1));
            if i < 3 {
                x[(0, 0)] = 5.0;
            }
            images.push(x);
        }
        let refs: Vec<&DMatrix<f64>> = images.iter().collect();
        let in_group = vec![true, true, true, false, false, false];
        let xk = DMatrix::from_fn(d, 12, |r, c| images[c / 4][(r, c % 4)]);
        let stats = compute_lda_stats_blocks(&images, Ridge::default()).unwrap();
        let init = init_parts_with_pool(&xk, &in_group, &refs, &stats, 1, 4, 0, 0).unwrap();
        let w = init.bank.weights.column(0);
        assert!(w[0] > 0.0 && w[0].abs() > w[1].abs() && w[0].abs() > w[2].abs());
        let best = init.chosen[0];
        assert!(init.ratios.iter().all(|&r| r <= init.ratios[best]));
    }

    #[test]
    fn init_parts_ties_go_to_lowest_cluster() {
        let x = DMatrix::from_element(2, 6, 1.0);
        let images = [x.clone()];
        let refs: Vec<&DMatrix<f64>> = images.iter().collect();
        let stats = LdaStats {
            mu: DVector::zeros(2),
            sigma: DMatrix::zeros(2, 2),
            sigma_inv: DMatrix::identity(2, 2),
            ridge: 0.0,
        };
        let a = init_parts_with_pool(&x, &[true], &refs, &stats, 2, 4, 0, 0).unwrap();
        assert_eq!(a.chosen, vec![0, 1]);
        let b = init_parts_with_pool(&x, &[true], &refs, &stats, 2, 4, 0, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_parts_too_few_clusters() {
        let x = random(2, 3, 0);
        let stats = compute_lda_stats(&x, Ridge::default()).unwrap();
        let refs = vec![&x];
        assert!(matches!(
            init_parts(&x, &[true], &refs, &stats, 4, 0, 0),
            Err(Error::TooFewClusters { .. })
        ));
    }
}
