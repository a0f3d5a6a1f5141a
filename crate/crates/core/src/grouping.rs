//! Balanced image grouping: k-means on global descriptors followed by greedy
//! or iterative penalized balancing.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAX_LLOYD_ITERS: usize = 300;

/// Default number of iterative balancing rounds.
pub const DEFAULT_BALANCE_ITERS: usize = 80;
/// Default convergence-rate exponent for penalty updates.
pub const DEFAULT_BALANCE_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    /// `d x K`, one centroid per column.
    pub vectors: DMatrix<f64>,
    pub seed: u64,
    /// Cluster label of every input point at convergence.
    pub labels: Vec<usize>,
    /// Distortion after each assignment step.
    pub distortions: Vec<f64>,
}

impl Centroids {
    pub fn k(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn distortion(&self) -> f64 {
        *self.distortions.last().unwrap_or(&0.0)
    }
}

pub(crate) fn sq_dist_cols(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    a.column(i)
        .iter()
        .zip(b.column(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// `N x K` matrix of squared distances between points (columns of `x`) and
/// centroids (columns of `c`).
fn distance_table(x: &DMatrix<f64>, c: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.ncols())
        .into_par_iter()
        .map(|i| (0..c.ncols()).map(|k| sq_dist_cols(x, i, c, k)).collect())
        .collect()
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::INFINITY;
    for (i, v) in values.enumerate() {
        if v < best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn kmeans_pp_seeds(x: &DMatrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.ncols();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist_cols(x, i, x, chosen[0])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in nearest.iter().enumerate() {
                if w > 0.0 {
                    if u < w {
                        pick = Some(i);
                        break;
                    }
                    u -= w;
                }
            }
            // rounding can exhaust the mass; fall back to the last positive weight
            pick.unwrap_or_else(|| nearest.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // all remaining points coincide with chosen seeds
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist_cols(x, i, x, next));
        }
    }
    chosen
}

/// Lloyd's k-means with k-means++ seeding. `x` holds one point per column.
///
/// Empty clusters are re-seeded to the point farthest from its centroid.
pub fn kmeans(x: &DMatrix<f64>, k: usize, seed: u64) -> Result<Centroids> {
    let n = x.ncols();
    if k == 0 {
        return Err(Error::ConfigInvalid("k-means needs k >= 1".into()));
    }
    if k > n {
        return Err(Error::KTooLarge { k, n });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidMatrix("k-means input is not finite".into()));
    }
    let d = x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = kmeans_pp_seeds(x, k, &mut rng);
    let mut centroids = DMatrix::from_fn(d, k, |r, c| x[(r, seeds[c])]);
    let mut labels: Option<Vec<usize>> = None;
    let mut distortions = Vec::new();

    for _ in 0..MAX_LLOYD_ITERS {
        let table = distance_table(x, &centroids);
        let mut new_labels: Vec<usize> = table.iter().map(|row| argmin(row.iter().copied())).collect();
        let distortion: f64 = table.iter().zip(&new_labels).map(|(row, &l)| row[l]).sum();
        distortions.push(distortion);
        if labels.as_ref() == Some(&new_labels) {
            break;
        }

        let mut sums = DMatrix::<f64>::zeros(d, k);
        let mut counts = vec![0usize; k];
        for (i, &l) in new_labels.iter().enumerate() {
            counts[l] += 1;
            let mut col = sums.column_mut(l);
            col += x.column(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mean = sums.column(c) / counts[c] as f64;
                centroids.set_column(c, &mean);
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<(f64, usize)> = (0..n)
                .map(|i| (sq_dist_cols(x, i, &centroids, new_labels[i]), i))
                .collect();
            // farthest first, lowest index on ties
            far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (c, &(_, i)) in empty.iter().zip(&far) {
                centroids.set_column(*c, &x.column(i));
                new_labels[i] = *c;
            }
        }
        labels = Some(new_labels);
    }

    let labels = match labels {
        Some(l) => l,
        None => unreachable!("at least one Lloyd iteration runs"),
    };
    Ok(Centroids {
        vectors: centroids,
        seed,
        labels,
        distortions,
    })
}

/// Squared Euclidean distance plus a positive group penalty.
pub fn penalized_distance(c: &[f64], x: &[f64], b: f64) -> f64 {
    debug_assert!(b > 0.0);
    c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() + b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceState {
    pub penalties: Vec<f64>,
    pub iteration: usize,
    pub alpha: f64,
}

impl BalanceState {
    pub fn new(k: usize, alpha: f64) -> Self {
        Self {
            penalties: vec![1.0; k],
            iteration: 0,
            alpha,
        }
    }
}

/// Multiplies each penalty by `(size / (N/K))^alpha`.
pub fn update_penalty(state: &BalanceState, sizes: &[usize], n: usize, k: usize) -> Result<BalanceState> {
    if k == 0 || k > n {
        return Err(Error::ZeroTargetSize { k, n });
    }
    if sizes.len() != state.penalties.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} sizes for {} penalties",
            sizes.len(),
            state.penalties.len()
        )));
    }
    let target = n as f64 / k as f64;
    let penalties = state
        .penalties
        .iter()
        .zip(sizes)
        .map(|(&b, &s)| b * (s as f64 / target).powf(state.alpha))
        .collect();
    Ok(BalanceState {
        penalties,
        iteration: state.iteration + 1,
        alpha: state.alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BalanceMethod {
    Greedy,
    Iterative,
    /// Groups given by class labels; no clustering ran.
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionProvenance {
    pub method: BalanceMethod,
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub iterations: Option<usize>,
}

/// `groups[k]` lists the (ascending) indices of the images in group `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<Vec<usize>>,
    pub provenance: PartitionProvenance,
}

impl Partition {
    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }

    pub fn spread(&self) -> usize {
        let s = self.sizes();
        s.iter().max().unwrap_or(&0) - s.iter().min().unwrap_or(&0)
    }

    /// Group label per image, for `n` images.
    pub fn labels(&self, n: usize) -> Vec<usize> {
        let mut out = vec![usize::MAX; n];
        for (k, g) in self.groups.iter().enumerate() {
            for &i in g {
                out[i] = k;
            }
        }
        out
    }

    fn from_labels(labels: &[usize], k: usize, provenance: PartitionProvenance) -> Self {
        let mut groups = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            groups[l].push(i);
        }
        Self { groups, provenance }
    }

    /// `{"groups": {"0": [ids...], ...}, "provenance": {...}}`; `ids[i]` names image `i`.
    pub fn to_json(&self, ids: &[String]) -> serde_json::Value {
        let groups: BTreeMap<String, Vec<&str>> = self
            .groups
            .iter()
            .enumerate()
            .map(|(k, g)| (k.to_string(), g.iter().map(|&i| ids[i].as_str()).collect()))
            .collect();
        serde_json::json!({ "groups": groups, "provenance": self.provenance })
    }
}

fn check_shapes(c: &Centroids, x: &DMatrix<f64>) -> Result<()> {
    if c.vectors.nrows() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "centroids have d={}, points have d={}",
            c.vectors.nrows(),
            x.nrows()
        )));
    }
    if c.k() > x.ncols() {
        return Err(Error::KTooLarge { k: c.k(), n: x.ncols() });
    }
    Ok(())
}

/// Round-robin over groups, each taking its nearest unassigned image.
pub fn greedy_balance(c: &Centroids, x: &DMatrix<f64>) -> Result<Partition> {
    check_shapes(c, x)?;
    let (n, k) = (x.ncols(), c.k());
    let table = distance_table(x, &c.vectors);
    let mut assigned = vec![false; n];
    let mut groups = vec![Vec::new(); k];
    let mut remaining = n;
    'rounds: loop {
        for (g, members) in groups.iter_mut().enumerate() {
            if remaining == 0 {
                break 'rounds;
            }
            let mut best = None;
            let mut best_v = f64::INFINITY;
            for i in 0..n {
                if !assigned[i] && (best.is_none() || table[i][g] < best_v) {
                    best = Some(i);
                    best_v = table[i][g];
                }
            }
            let i = best.expect("an unassigned image remains");
            assigned[i] = true;
            members.push(i);
            remaining -= 1;
        }
    }
    for g in &mut groups {
        g.sort_unstable();
    }
    Ok(Partition {
        groups,
        provenance: PartitionProvenance {
            method: BalanceMethod::Greedy,
            seed: Some(c.seed),
            alpha: None,
            iterations: None,
        },
    })
}

/// One penalized assignment round of iterative balancing.
#[derive(Debug, Clone, PartialEq)]
pub struct BalanceStep {
    /// Group sizes produced by the round's assignment.
    pub sizes: Vec<usize>,
    /// Penalties used for the assignment.
    pub penalties_before: Vec<f64>,
    /// Penalties after the update.
    pub penalties_after: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterativeBalance {
    pub partition: Partition,
    pub history: Vec<BalanceStep>,
    /// Number of single-image moves made by the repair pass.
    pub repair_moves: usize,
}

/// Penalized reassignment for `iterations` rounds followed by a repair pass
/// that enforces group sizes within one of each other.
pub fn iterative_balance(c: &Centroids, x: &DMatrix<f64>, alpha: f64, iterations: usize) -> Result<Partition> {
    iterative_balance_traced(c, x, alpha, iterations).map(|r| r.partition)
}

pub fn iterative_balance_traced(
    c: &Centroids,
    x: &DMatrix<f64>,
    alpha: f64,
    iterations: usize,
) -> Result<IterativeBalance> {
    check_shapes(c, x)?;
    if !(alpha > 0.0) {
        return Err(Error::ConfigInvalid(format!("alpha must be > 0, got {alpha}")));
    }
    if iterations == 0 {
        return Err(Error::ConfigInvalid("balancing needs at least one iteration".into()));
    }
    let (n, k) = (x.ncols(), c.k());
    let table = distance_table(x, &c.vectors);
    let mut state = BalanceState::new(k, alpha);
    let mut labels = vec![0usize; n];
    let mut history = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        for (i, row) in table.iter().enumerate() {
            labels[i] = argmin(row.iter().zip(&state.penalties).map(|(d, b)| d + b));
        }
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        let next = update_penalty(&state, &sizes, n, k)?;
        history.push(BalanceStep {
            sizes,
            penalties_before: state.penalties.clone(),
            penalties_after: next.penalties.clone(),
        });
        state = next;
    }
    let repair_moves = repair(&mut labels, &table, k);
    Ok(IterativeBalance {
        partition: Partition::from_labels(
            &labels,
            k,
            PartitionProvenance {
                method: BalanceMethod::Iterative,
                seed: Some(c.seed),
                alpha: Some(alpha),
                iterations: Some(iterations),
            },
        ),
        history,
        repair_moves,
    })
}

/// Moves images from largest to smallest groups, one at a time, picking the
/// move with the least increase in squared distance, until sizes differ by
/// at most one.
fn repair(labels: &mut [usize], table: &[Vec<f64>], k: usize) -> usize {
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    let mut moves = 0;
    loop {
        let max = *sizes.iter().max().unwrap();
        let min = *sizes.iter().min().unwrap();
        if max - min <= 1 {
            return moves;
        }
        let mut best: Option<(f64, usize, usize)> = None;
        for (i, &src) in labels.iter().enumerate() {
            if sizes[src] != max {
                continue;
            }
            for dst in (0..k).filter(|&g| sizes[g] == min) {
                let delta = table[i][dst] - table[i][src];
                if best.is_none_or(|(b, _, _)| delta < b) {
                    best = Some((delta, i, dst));
                }
            }
        }
        let (_, i, dst) = best.expect("an oversized group has members");
        sizes[labels[i]] -= 1;
        sizes[dst] += 1;
        labels[i] = dst;
        moves += 1;
    }
}
