//! End-to-end runs: grouping, per-group part learning, encoding,
//! classification and retrieval reports, bank persistence and part
//! visualization.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{hungarian_per_image, isa, soft_assign, AnnealSchedule, AssignmentMatrix, IsaParams};
use crate::dataset::{load_matrix, save_matrix, Dataset, DescriptorMatrix, Split};
use crate::encoding::{encode, fit_pca, fit_pca_moments, part_scores, EncodedVector, EncodingKind, PcaModel};
use crate::error::{Error, Result};
use crate::evaluation::{
    accuracy, average_precision, classification_map, classify, mean_ap, rank_database, train_classifier, Ranking,
    Relevance, SvmParams,
};
use crate::grouping::{greedy_balance, iterative_balance, kmeans, BalanceMethod, Partition, PartitionProvenance};
use crate::parts::{
    compute_lda_stats_blocks, init_parts, matching_matrix, objective, part_models, LdaStats, PartModelBank, Ridge,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Isa,
    Huna,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Unsupervised,
    Supervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Greedy,
    Iterative,
}

/// Which descriptors the pCOP/wpCOP projection is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PcaSource {
    /// Every region of every learning image.
    Regions,
    /// Only the best-scoring region of every part on every learning image.
    Selected,
}

/// Flat run configuration. Every key has a default, so `{}` is a valid file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub groups: usize,
    pub parts: usize,
    /// Expected regions per image; `None` accepts whatever the manifest has.
    pub regions_per_image: Option<usize>,
    pub grouping: Grouping,
    pub balance_alpha: f64,
    pub balance_iters: usize,
    pub solver: Solver,
    pub encoding: EncodingKind,
    pub dim: usize,
    pub dim_sweep: Vec<usize>,
    /// Ridge factor: λ = ridge·tr(Σ)/d, or λ = ridge with `ridge_absolute`.
    pub ridge: f64,
    pub ridge_absolute: bool,
    pub tau: f64,
    pub beta0: f64,
    pub beta_growth: f64,
    pub beta_max: f64,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub sinkhorn_tol: f64,
    pub sinkhorn_max_iter: usize,
    pub seed: u64,
    pub mode: Mode,
    pub svm_c: f64,
    pub top_n: usize,
    pub normalize_regions: bool,
    pub junk_in_learning: bool,
    pub pca_source: PcaSource,
    pub random_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let isa = IsaParams::default();
        Self {
            groups: 10,
            parts: 100,
            regions_per_image: None,
            grouping: Grouping::Iterative,
            balance_alpha: crate::grouping::DEFAULT_BALANCE_ALPHA,
            balance_iters: crate::grouping::DEFAULT_BALANCE_ITERS,
            solver: Solver::Isa,
            encoding: EncodingKind::Wpcop,
            dim: 512,
            dim_sweep: vec![512, 256, 128, 64],
            ridge: 0.01,
            ridge_absolute: false,
            tau: isa.tau,
            beta0: isa.schedule.beta0,
            beta_growth: isa.schedule.beta_growth,
            beta_max: isa.schedule.beta_max,
            inner_tol: isa.schedule.inner_tol,
            inner_max_iter: isa.schedule.inner_max_iter,
            sinkhorn_tol: isa.sinkhorn_tol,
            sinkhorn_max_iter: isa.sinkhorn_max_iter,
            seed: 0,
            mode: Mode::Unsupervised,
            svm_c: 1.0,
            top_n: 200,
            normalize_regions: false,
            junk_in_learning: true,
            pca_source: PcaSource::Regions,
            random_trials: 10,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| Error::IoFailure {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))
    }

    pub fn isa_params(&self) -> IsaParams {
        IsaParams {
            schedule: AnnealSchedule {
                beta0: self.beta0,
                beta_growth: self.beta_growth,
                beta_max: self.beta_max,
                inner_tol: self.inner_tol,
                inner_max_iter: self.inner_max_iter,
            },
            tau: self.tau,
            sinkhorn_tol: self.sinkhorn_tol,
            sinkhorn_max_iter: self.sinkhorn_max_iter,
        }
    }

    pub fn ridge(&self) -> Ridge {
        if self.ridge_absolute {
            Ridge::Absolute(self.ridge)
        } else {
            Ridge::TraceScaled(self.ridge)
        }
    }

    /// Checks the configuration against a dataset with `regions` regions per image.
    pub fn validate(&self, regions: usize) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if let Some(r) = self.regions_per_image {
            if r != regions {
                return bad(format!("config expects {r} regions per image, dataset has {regions}"));
            }
        }
        if self.groups == 0 {
            return bad("groups must be >= 1".into());
        }
        if self.parts == 0 || self.parts > regions {
            return bad(format!("parts must lie in 1..={regions}, got {}", self.parts));
        }
        if self.dim == 0 || self.dim_sweep.contains(&0) {
            return bad("reduced dimensions must be >= 1".into());
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return bad(format!("ridge must be finite and >= 0, got {}", self.ridge));
        }
        if !(self.balance_alpha > 0.0) || self.balance_iters == 0 {
            return bad("balancing needs alpha > 0 and >= 1 iteration".into());
        }
        if !(self.sinkhorn_tol > 0.0) || self.sinkhorn_max_iter == 0 {
            return bad("sinkhorn needs tol > 0 and >= 1 iteration".into());
        }
        if !(self.svm_c > 0.0) {
            return bad(format!("svm_c must be > 0, got {}", self.svm_c));
        }
        if self.top_n == 0 {
            return bad("top_n must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        self.isa_params().schedule.validate()
    }
}

fn group_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Copy of the dataset with ℓ²-normalized regions when the config asks for it.
pub fn prepare_dataset<'a>(ds: &'a Dataset, cfg: &RunConfig) -> std::borrow::Cow<'a, Dataset> {
    if cfg.normalize_regions {
        let mut owned = ds.clone();
        owned.l2_normalize_regions();
        std::borrow::Cow::Owned(owned)
    } else {
        std::borrow::Cow::Borrowed(ds)
    }
}

/// Groups the images `learning` (dataset indices, ascending). Supervised
/// mode uses the sorted class labels as groups; otherwise k-means on global
/// descriptors followed by balancing.
pub fn group_images(ds: &Dataset, cfg: &RunConfig, learning: &[usize]) -> Result<Partition> {
    if learning.is_empty() {
        return Err(Error::ConfigInvalid("no images to group".into()));
    }
    if cfg.mode == Mode::Supervised {
        let mut classes: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for &i in learning {
            let rec = &ds.manifest.images[i];
            let label = rec.label.as_deref().ok_or_else(|| Error::MissingLabels(rec.id.clone()))?;
            classes.entry(label).or_default().push(i);
        }
        return Ok(Partition {
            groups: classes.into_values().collect(),
            provenance: PartitionProvenance {
                method: BalanceMethod::Supervised,
                seed: None,
                alpha: None,
                iterations: None,
            },
        });
    }
    let dg = ds.manifest.global_dim;
    let x = DMatrix::from_fn(dg, learning.len(), |r, c| ds.images[learning[c]].global[r]);
    let centroids = kmeans(&x, cfg.groups, cfg.seed)?;
    let mut partition = match cfg.grouping {
        Grouping::Greedy => greedy_balance(&centroids, &x)?,
        Grouping::Iterative => iterative_balance(&centroids, &x, cfg.balance_alpha, cfg.balance_iters)?,
    };
    for g in &mut partition.groups {
        for i in g.iter_mut() {
            *i = learning[*i];
        }
    }
    Ok(partition)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupOutcome {
    pub bank: PartModelBank,
    /// Binary assignment the bank was built from.
    pub assignment: AssignmentMatrix,
    /// `<A, WᵀX>` of the final bank.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LearnedParts {
    pub banks: Vec<PartModelBank>,
    pub assignments: Vec<AssignmentMatrix>,
    pub objectives: Vec<f64>,
    /// Groups as dataset image indices.
    pub partition: Partition,
    /// Dataset indices of every image used for learning.
    pub learning: Vec<usize>,
    pub stats: LdaStats,
}

impl LearnedParts {
    pub fn total_parts(&self) -> usize {
        self.banks.iter().map(|b| b.parts()).sum()
    }
}

/// Learns one bank of `cfg.parts` part models per group of `learning`
/// images (dataset indices).
pub fn learn_parts(ds: &Dataset, cfg: &RunConfig, learning: &[usize]) -> Result<LearnedParts> {
    cfg.validate(ds.manifest.regions_per_image)?;
    let mut learning = learning.to_vec();
    learning.sort_unstable();
    learning.dedup();
    let partition = group_images(ds, cfg, &learning)?;
    let images: Vec<&DMatrix<f64>> = learning.iter().map(|&i| &ds.images[i].regions).collect();
    let stats = compute_lda_stats_blocks(&images, cfg.ridge())?;
    let position: HashMap<usize, usize> = learning.iter().enumerate().map(|(p, &i)| (i, p)).collect();

    let outcomes: Vec<GroupOutcome> = partition
        .groups
        .par_iter()
        .enumerate()
        .map(|(k, members)| {
            let mut in_group = vec![false; learning.len()];
            for i in members {
                in_group[position[i]] = true;
            }
            learn_group(ds, cfg, k, members, &in_group, &images, &stats)
        })
        .collect::<Result<_>>()?;

    let mut banks = Vec::with_capacity(outcomes.len());
    let mut assignments = Vec::with_capacity(outcomes.len());
    let mut objectives = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        banks.push(o.bank);
        assignments.push(o.assignment);
        objectives.push(o.objective);
    }
    Ok(LearnedParts {
        banks,
        assignments,
        objectives,
        partition,
        learning,
        stats,
    })
}

/// Region descriptors of `members`, concatenated column-wise.
pub fn group_regions(ds: &Dataset, members: &[usize]) -> DMatrix<f64> {
    let d = ds.manifest.descriptor_dim;
    let r = ds.manifest.regions_per_image;
    let mut xk = DMatrix::zeros(d, members.len() * r);
    for (j, &i) in members.iter().enumerate() {
        xk.columns_mut(j * r, r).copy_from(&ds.images[i].regions);
    }
    xk
}

fn learn_group(
    ds: &Dataset,
    cfg: &RunConfig,
    k: usize,
    members: &[usize],
    in_group: &[bool],
    images: &[&DMatrix<f64>],
    stats: &LdaStats,
) -> Result<GroupOutcome> {
    let r = ds.manifest.regions_per_image;
    let nk = members.len();
    let xk = group_regions(ds, members);
    let init = init_parts(&xk, in_group, images, stats, cfg.parts, group_seed(cfg.seed, k), k)?;
    let m0 = matching_matrix(&init.bank, &xk)?;
    let a0 = soft_assign(&m0, cfg.beta0, r)?;
    let assignment = match cfg.solver {
        Solver::Isa => isa(&a0, &xk, stats, nk, &cfg.isa_params())?.assignment,
        Solver::Huna => hungarian_per_image(&a0.values, r)?,
    };
    let bank = part_models(&assignment, &xk, stats, nk, k)?;
    let m = matching_matrix(&bank, &xk)?;
    let objective = objective(&assignment.values, &m)?;
    Ok(GroupOutcome {
        bank,
        assignment,
        objective,
    })
}

/// Reduced dimension actually used for a requested `d′`.
pub fn effective_dim(requested: usize, descriptor_dim: usize) -> usize {
    requested.min(descriptor_dim)
}

/// Fits the pCOP/wpCOP projection for `d_out` dimensions.
pub fn fit_projection(ds: &Dataset, learned: &LearnedParts, source: PcaSource, d_out: usize) -> Result<PcaModel> {
    let moments = (learned.stats.mu.clone(), &learned.stats.sigma);
    fit_projection_from(ds, &learned.banks, &learned.learning, Some(moments), source, d_out)
}

/// As [`fit_projection`] from saved banks and the ids they were learned
/// on; region moments are recomputed when not supplied.
pub fn fit_projection_from(
    ds: &Dataset,
    banks: &[PartModelBank],
    learning: &[usize],
    moments: Option<(DVector<f64>, &DMatrix<f64>)>,
    source: PcaSource,
    d_out: usize,
) -> Result<PcaModel> {
    match source {
        PcaSource::Regions => {
            let n = learning.len() * ds.manifest.regions_per_image;
            match moments {
                Some((mean, cov)) => fit_pca_moments(mean, cov, n, d_out),
                None => {
                    let (mean, cov) = region_moments(ds, learning)?;
                    fit_pca_moments(mean, &cov, n, d_out)
                }
            }
        }
        PcaSource::Selected => {
            let columns: Vec<Vec<f64>> = learning
                .par_iter()
                .map(|&i| {
                    let x = &ds.images[i].regions;
                    let s = part_scores(banks, x)?;
                    Ok((0..s.parts())
                        .flat_map(|p| x.column(s.argmax_region(p)).iter().copied().collect::<Vec<_>>())
                        .collect())
                })
                .collect::<Result<_>>()?;
            let d = ds.manifest.descriptor_dim;
            let flat: Vec<f64> = columns.into_iter().flatten().collect();
            let x = DMatrix::from_column_slice(d, flat.len() / d, &flat);
            fit_pca(&x, d_out)
        }
    }
}

/// Mean and covariance (divided by the count) of every region of `images`.
fn region_moments(ds: &Dataset, images: &[usize]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = ds.manifest.descriptor_dim;
    let n = images.len() * ds.manifest.regions_per_image;
    if n == 0 {
        return Err(Error::TooFewSamples("no regions for the projection".into()));
    }
    let mut mean = DVector::zeros(d);
    for &i in images {
        for col in ds.images[i].regions.column_iter() {
            mean += col;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for &i in images {
        let x = &ds.images[i].regions;
        let centered = DMatrix::from_fn(d, x.ncols(), |r, c| x[(r, c)] - mean[r]);
        cov.gemm(1.0, &centered, &centered.transpose(), 1.0);
    }
    cov /= n as f64;
    Ok((mean, cov))
}

/// Encodes the images `indices` once per projection in `pcas` (or once
/// without projection for BOP/sBOP). Part scores are computed once per
/// image. Result is indexed `[variant][image]`.
pub fn encode_variants(
    ds: &Dataset,
    banks: &[PartModelBank],
    kind: EncodingKind,
    pcas: &[PcaModel],
    indices: &[usize],
) -> Result<Vec<Vec<EncodedVector>>> {
    let variants = if kind.needs_pca() { pcas.len() } else { 1 };
    if kind.needs_pca() && pcas.is_empty() {
        return Err(Error::InvalidPca(format!("{} needs a PCA model", kind.as_str())));
    }
    let per_image: Vec<Vec<EncodedVector>> = indices
        .par_iter()
        .map(|&i| {
            let img = &ds.images[i];
            let s = part_scores(banks, &img.regions)?;
            (0..variants)
                .map(|v| encode(kind, &s, &img.regions, &img.geometry, pcas.get(v)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok((0..variants)
        .map(|v| per_image.iter().map(|e| e[v].clone()).collect())
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    pub kind: EncodingKind,
    pub d_prime: Option<usize>,
    pub ids: Vec<String>,
    pub vectors: Vec<EncodedVector>,
}

/// Encodes `indices` with `cfg.encoding` at `d′ = cfg.dim`.
pub fn encode_dataset(ds: &Dataset, learned: &LearnedParts, cfg: &RunConfig, indices: &[usize]) -> Result<EncodedSet> {
    let (pcas, d_prime) = if cfg.encoding.needs_pca() {
        let d = effective_dim(cfg.dim, ds.manifest.descriptor_dim);
        (vec![fit_projection(ds, learned, cfg.pca_source, d)?], Some(d))
    } else {
        (Vec::new(), None)
    };
    let vectors = encode_variants(ds, &learned.banks, cfg.encoding, &pcas, indices)?.remove(0);
    Ok(EncodedSet {
        kind: cfg.encoding,
        d_prime,
        ids: indices.iter().map(|&i| ds.manifest.images[i].id.clone()).collect(),
        vectors,
    })
}

/// Encodes `indices` with banks loaded from disk. `learning` are the
/// images the banks were learned on; the projection is refitted on them.
pub fn encode_with_banks(
    ds: &Dataset,
    banks: &[PartModelBank],
    learning: &[usize],
    cfg: &RunConfig,
    indices: &[usize],
) -> Result<EncodedSet> {
    let (pcas, d_prime) = if cfg.encoding.needs_pca() {
        let d = effective_dim(cfg.dim, ds.manifest.descriptor_dim);
        (vec![fit_projection_from(ds, banks, learning, None, cfg.pca_source, d)?], Some(d))
    } else {
        (Vec::new(), None)
    };
    let vectors = encode_variants(ds, banks, cfg.encoding, &pcas, indices)?.remove(0);
    Ok(EncodedSet {
        kind: cfg.encoding,
        d_prime,
        ids: indices.iter().map(|&i| ds.manifest.images[i].id.clone()).collect(),
        vectors,
    })
}

fn normalized_global(ds: &Dataset, i: usize) -> Vec<f64> {
    let g = &ds.images[i].global;
    let n = g.norm();
    if n > 0.0 {
        g.iter().map(|v| v / n).collect()
    } else {
        g.iter().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub d_prime: usize,
    #[serde(rename = "mAP")]
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub global: BaselineScores,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub random: Option<BaselineScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: String,
    pub encoding: EncodingKind,
    pub mode: Mode,
    pub solver: Solver,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub d_prime: Option<usize>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub accuracy: Option<f64>,
    pub per_class: BTreeMap<String, f64>,
    pub per_query: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sweep: Vec<SweepPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_queries: Vec<String>,
    pub baseline: Baselines,
    pub seed: u64,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationOutcome {
    pub report: Report,
    pub learned: LearnedParts,
    pub test_ids: Vec<String>,
    pub predicted: Vec<String>,
}

fn labels_of(ds: &Dataset, indices: &[usize]) -> Result<Vec<String>> {
    indices
        .iter()
        .map(|&i| {
            let rec = &ds.manifest.images[i];
            rec.label.clone().ok_or_else(|| Error::MissingLabels(rec.id.clone()))
        })
        .collect()
}

struct SvmEval {
    accuracy: f64,
    map: f64,
    per_class: BTreeMap<String, f64>,
    predicted: Vec<String>,
}

fn svm_eval(
    train: &[Vec<f64>],
    train_labels: &[String],
    test: &[Vec<f64>],
    test_labels: &[String],
    cfg: &RunConfig,
) -> Result<SvmEval> {
    let params = SvmParams {
        reg_c: cfg.svm_c,
        seed: cfg.seed,
        ..SvmParams::default()
    };
    let clf = train_classifier(train, train_labels, &params)?;
    let pred = classify(&clf, test)?;
    let predicted: Vec<String> = pred.labels.iter().map(|&c| clf.classes[c].clone()).collect();
    let truth: Vec<usize> = test_labels
        .iter()
        .map(|l| clf.classes.iter().position(|c| c == l).ok_or_else(|| Error::EmptyClass(l.clone())))
        .collect::<Result<_>>()?;
    let (map, per) = classification_map(&pred.scores, &truth, clf.classes.len())?;
    Ok(SvmEval {
        accuracy: accuracy(&predicted, test_labels)?,
        map,
        per_class: clf.classes.iter().cloned().zip(per).collect(),
        predicted,
    })
}

/// Learns parts on the train split, encodes train and test, trains a
/// one-vs-rest linear SVM and reports accuracy and mAP on the test split,
/// with the global-descriptor baseline alongside.
pub fn run_classification(ds: &Dataset, cfg: &RunConfig) -> Result<ClassificationOutcome> {
    let ds = prepare_dataset(ds, cfg);
    let ds = ds.as_ref();
    let train = ds.manifest.indices_in(Split::Train);
    let test = ds.manifest.indices_in(Split::Test);
    if train.is_empty() || test.is_empty() {
        return Err(Error::ConfigInvalid("classification needs non-empty train and test splits".into()));
    }
    let train_labels = labels_of(ds, &train)?;
    let test_labels = labels_of(ds, &test)?;

    let learned = learn_parts(ds, cfg, &train)?;
    let mut all = train.clone();
    all.extend(&test);
    let enc = encode_dataset(ds, &learned, cfg, &all)?;
    let vecs: Vec<Vec<f64>> = enc.vectors.into_iter().map(|v| v.values).collect();
    let (train_v, test_v) = vecs.split_at(train.len());
    let parts = svm_eval(train_v, &train_labels, test_v, &test_labels, cfg)?;

    let g_train: Vec<Vec<f64>> = train.iter().map(|&i| normalized_global(ds, i)).collect();
    let g_test: Vec<Vec<f64>> = test.iter().map(|&i| normalized_global(ds, i)).collect();
    let global = svm_eval(&g_train, &train_labels, &g_test, &test_labels, cfg)?;

    let report = Report {
        task: "classification".into(),
        encoding: cfg.encoding,
        mode: cfg.mode,
        solver: cfg.solver,
        k: learned.banks.len(),
        p: cfg.parts,
        d_prime: enc.d_prime,
        map: parts.map,
        accuracy: Some(parts.accuracy),
        per_class: parts.per_class,
        per_query: BTreeMap::new(),
        sweep: Vec::new(),
        skipped_queries: Vec::new(),
        baseline: Baselines {
            global: BaselineScores {
                map: global.map,
                accuracy: Some(global.accuracy),
            },
            random: None,
        },
        seed: cfg.seed,
    };
    Ok(ClassificationOutcome {
        report,
        learned,
        test_ids: test.iter().map(|&i| ds.manifest.images[i].id.clone()).collect(),
        predicted: parts.predicted,
    })
}

fn relevance(ds: &Dataset, query: usize, db: usize, junk: Option<&HashSet<&str>>) -> Relevance {
    let db_rec = &ds.manifest.images[db];
    if junk.is_some_and(|j| j.contains(db_rec.id.as_str())) {
        return Relevance::Junk;
    }
    match (&ds.manifest.images[query].label, &db_rec.label) {
        (Some(a), Some(b)) if a == b => Relevance::Positive,
        _ => Relevance::Negative,
    }
}

struct QueryScores {
    per_query: BTreeMap<String, f64>,
    skipped: Vec<String>,
    map: f64,
    rankings: Vec<Ranking>,
}

fn score_queries(
    ds: &Dataset,
    queries: &[usize],
    db: &[usize],
    query_vecs: &[Vec<f64>],
    db_vecs: &[Vec<f64>],
) -> Result<QueryScores> {
    let junk = crate::dataset::junk_sets(&ds.manifest);
    let position: HashMap<&str, usize> = db
        .iter()
        .map(|&i| (ds.manifest.images[i].id.as_str(), i))
        .collect();
    let db_list: Vec<(String, Vec<f64>)> = db
        .iter()
        .zip(db_vecs)
        .map(|(&i, v)| (ds.manifest.images[i].id.clone(), v.clone()))
        .collect();
    let results: Vec<(Ranking, Option<f64>)> = queries
        .par_iter()
        .zip(query_vecs)
        .map(|(&q, v)| {
            let qid = &ds.manifest.images[q].id;
            let mut ranking = rank_database(qid, v, &db_list)?;
            let j = junk.get(qid.as_str());
            let rel: Vec<Relevance> = ranking
                .entries
                .iter()
                .map(|(id, _)| relevance(ds, q, position[id.as_str()], j))
                .collect();
            ranking.junk_removed = rel.contains(&Relevance::Junk);
            match average_precision(&rel) {
                Ok(ap) => Ok((ranking, Some(ap))),
                Err(Error::NoPositives) => Ok((ranking, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut per_query = BTreeMap::new();
    let mut skipped = Vec::new();
    let mut aps = Vec::new();
    let mut rankings = Vec::with_capacity(results.len());
    for (ranking, ap) in results {
        match ap {
            Some(ap) => {
                per_query.insert(ranking.query_id.clone(), ap);
                aps.push(ap);
            }
            None => skipped.push(ranking.query_id.clone()),
        }
        rankings.push(ranking);
    }
    Ok(QueryScores {
        per_query,
        skipped,
        map: mean_ap(&aps)?,
        rankings,
    })
}

/// Mean AP of uniformly random database orderings, averaged over `trials`
/// seeded shuffles.
fn random_ranking_map(ds: &Dataset, queries: &[usize], db: &[usize], trials: usize, seed: u64) -> Result<f64> {
    let junk = crate::dataset::junk_sets(&ds.manifest);
    let mut total = Vec::new();
    for t in 0..trials.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        for &q in queries {
            let mut order = db.to_vec();
            order.shuffle(&mut rng);
            let j = junk.get(ds.manifest.images[q].id.as_str());
            let rel: Vec<Relevance> = order.iter().map(|&i| relevance(ds, q, i, j)).collect();
            match average_precision(&rel) {
                Ok(ap) => total.push(ap),
                Err(Error::NoPositives) => {}
                Err(e) => return Err(e),
            }
        }
    }
    mean_ap(&total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutcome {
    pub report: Report,
    pub learned: LearnedParts,
    /// Rankings at the primary `d′`, in query order.
    pub rankings: Vec<Ranking>,
}

/// Learns parts on the database split only, encodes database and queries
/// with the same banks and ranks the database for every query. Reports mAP
/// at `cfg.dim` plus the `cfg.dim_sweep` dimensions, the global-descriptor
/// baseline and a random-ranking baseline.
pub fn run_retrieval(ds: &Dataset, cfg: &RunConfig) -> Result<RetrievalOutcome> {
    let ds = prepare_dataset(ds, cfg);
    let ds = ds.as_ref();
    let db = ds.manifest.indices_in(Split::Database);
    let queries = ds.manifest.indices_in(Split::Query);
    if queries.is_empty() {
        return Err(Error::MissingQueries("manifest has no query images".into()));
    }
    if db.is_empty() {
        return Err(Error::ConfigInvalid("retrieval needs a non-empty database split".into()));
    }
    let learning: Vec<usize> = if cfg.junk_in_learning {
        db.clone()
    } else {
        let junk: BTreeSet<&str> = ds.manifest.junk.values().flatten().map(|s| s.as_str()).collect();
        db.iter()
            .copied()
            .filter(|&i| !junk.contains(ds.manifest.images[i].id.as_str()))
            .collect()
    };
    let learned = learn_parts(ds, cfg, &learning)?;

    let d = ds.manifest.descriptor_dim;
    let mut dims: Vec<usize> = Vec::new();
    if cfg.encoding.needs_pca() {
        for &req in std::iter::once(&cfg.dim).chain(&cfg.dim_sweep) {
            let e = effective_dim(req, d);
            if !dims.contains(&e) {
                dims.push(e);
            }
        }
    }
    let pcas: Vec<PcaModel> = dims
        .iter()
        .map(|&k| fit_projection(ds, &learned, cfg.pca_source, k))
        .collect::<Result<_>>()?;
    let mut all = db.clone();
    all.extend(&queries);
    let variants = encode_variants(ds, &learned.banks, cfg.encoding, &pcas, &all)?;

    let mut primary = None;
    let mut sweep = Vec::new();
    for (v, vectors) in variants.into_iter().enumerate() {
        let vecs: Vec<Vec<f64>> = vectors.into_iter().map(|e| e.values).collect();
        let (db_v, q_v) = vecs.split_at(db.len());
        let scores = score_queries(ds, &queries, &db, q_v, db_v)?;
        if let Some(&dp) = dims.get(v) {
            if cfg.dim_sweep.iter().any(|&s| effective_dim(s, d) == dp) {
                sweep.push(SweepPoint {
                    d_prime: dp,
                    map: scores.map,
                });
            }
        }
        if v == 0 {
            primary = Some(scores);
        }
    }
    let primary = primary.expect("at least one encoding variant");

    let g_db: Vec<Vec<f64>> = db.iter().map(|&i| normalized_global(ds, i)).collect();
    let g_q: Vec<Vec<f64>> = queries.iter().map(|&i| normalized_global(ds, i)).collect();
    let global = score_queries(ds, &queries, &db, &g_q, &g_db)?;
    let random = random_ranking_map(ds, &queries, &db, cfg.random_trials, cfg.seed)?;

    let report = Report {
        task: "retrieval".into(),
        encoding: cfg.encoding,
        mode: cfg.mode,
        solver: cfg.solver,
        k: learned.banks.len(),
        p: cfg.parts,
        d_prime: dims.first().copied(),
        map: primary.map,
        accuracy: None,
        per_class: BTreeMap::new(),
        per_query: primary.per_query,
        sweep,
        skipped_queries: primary.skipped,
        baseline: Baselines {
            global: BaselineScores {
                map: global.map,
                accuracy: None,
            },
            random: Some(BaselineScores {
                map: random,
                accuracy: None,
            }),
        },
        seed: cfg.seed,
    };
    Ok(RetrievalOutcome {
        report,
        learned,
        rankings: primary.rankings,
    })
}

/// Writes one ranked id per line to `dir/<query id>.txt`.
pub fn write_rankings(rankings: &[Ranking], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::IoFailure {
        path: dir.to_path_buf(),
        source,
    })?;
    for r in rankings {
        let path = dir.join(format!("{}.txt", r.query_id));
        let mut text = String::new();
        for (id, _) in &r.entries {
            text.push_str(id);
            text.push('\n');
        }
        fs::write(&path, text).map_err(|source| Error::IoFailure { path, source })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    /// Global part index: `bank · P + part`.
    pub part: usize,
    pub region: usize,
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartAnnotation {
    pub image_id: String,
    pub width: f32,
    pub height: f32,
    pub entries: Vec<AnnotationEntry>,
}

/// The `top_n` highest-scoring (part, region) pairs on one image, best
/// first; equal scores keep part-major order.
pub fn visualize_parts(ds: &Dataset, banks: &[PartModelBank], image_id: &str, top_n: usize) -> Result<PartAnnotation> {
    if top_n == 0 {
        return Err(Error::ConfigInvalid("top_n must be >= 1".into()));
    }
    let i = ds
        .manifest
        .index_of(image_id)
        .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
    let img = &ds.images[i];
    let s = part_scores(banks, &img.regions)?;
    let mut entries: Vec<AnnotationEntry> = Vec::with_capacity(s.parts() * s.regions());
    for part in 0..s.parts() {
        for region in 0..s.regions() {
            entries.push(AnnotationEntry {
                part,
                region,
                bbox: img.geometry.boxes[region],
                score: s.scores[(part, region)],
            });
        }
    }
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));
    entries.truncate(top_n);
    Ok(PartAnnotation {
        image_id: image_id.to_string(),
        width: img.geometry.width,
        height: img.geometry.height,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankMetadata {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "P")]
    pub p: usize,
    pub dim: usize,
    pub ridge: f64,
    pub seed: u64,
    pub solver: Solver,
    pub mode: Mode,
    pub files: Vec<String>,
    pub objectives: Vec<f64>,
    pub partition: serde_json::Value,
    pub learning: Vec<String>,
}

/// Writes `bank_NNN.dmx` (`d x P` per group) and `banks.json` into `dir`.
/// Weights are stored as f32.
pub fn save_banks(learned: &LearnedParts, cfg: &RunConfig, ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| Error::IoFailure {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files = Vec::new();
    for (k, bank) in learned.banks.iter().enumerate() {
        let name = format!("bank_{k:03}.dmx");
        save_matrix(&DescriptorMatrix::from_dmatrix(&bank.weights)?, dir.join(&name))?;
        files.push(name);
    }
    let ids: Vec<String> = ds.manifest.images.iter().map(|r| r.id.clone()).collect();
    let meta = BankMetadata {
        k: learned.banks.len(),
        p: cfg.parts,
        dim: learned.stats.dim(),
        ridge: learned.stats.ridge,
        seed: cfg.seed,
        solver: cfg.solver,
        mode: cfg.mode,
        files,
        objectives: learned.objectives.clone(),
        partition: learned.partition.to_json(&ids),
        learning: learned.learning.iter().map(|&i| ids[i].clone()).collect(),
    };
    let path = dir.join("banks.json");
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("metadata serializes"))
        .map_err(|source| Error::IoFailure { path, source })
}

pub fn load_banks(dir: impl AsRef<Path>) -> Result<(Vec<PartModelBank>, BankMetadata)> {
    let dir = dir.as_ref();
    let path = dir.join("banks.json");
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = fs::read_to_string(&path).map_err(|source| Error::IoFailure {
        path: path.clone(),
        source,
    })?;
    let meta: BankMetadata = serde_json::from_str(&text).map_err(|e| Error::ParseError {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let banks = meta
        .files
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let weights = load_matrix(dir.join(f))?.to_dmatrix();
            if weights.shape() != (meta.dim, meta.p) {
                return Err(Error::DimensionMismatch(format!(
                    "{f} is {:?}, metadata says {}x{}",
                    weights.shape(),
                    meta.dim,
                    meta.p
                )));
            }
            Ok(PartModelBank { group: k, weights })
        })
        .collect::<Result<_>>()?;
    Ok((banks, meta))
}

/// Writes an assignment matrix as DMX1 plus a JSON sidecar
/// (`<path>.json`) holding mode, P, |R| and group.
pub fn save_assignment(a: &AssignmentMatrix, group: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_matrix(&DescriptorMatrix::from_dmatrix(&a.values)?, path)?;
    let sidecar = path.with_extension("json");
    let meta = serde_json::json!({
        "mode": a.mode,
        "P": a.parts(),
        "regions_per_image": a.regions_per_image,
        "group": group,
    });
    fs::write(&sidecar, serde_json::to_string_pretty(&meta).expect("sidecar serializes")).map_err(|source| {
        Error::IoFailure {
            path: sidecar.clone(),
            source,
        }
    })
}

/// Writes encoded vectors as one `dim x n` DMX1 file plus `<path>.json`
/// listing the kind, `d′` and image ids in column order.
pub fn save_encodings(set: &EncodedSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let dim = set.vectors.first().map(|v| v.dim()).unwrap_or(0);
    let flat: Vec<f64> = set.vectors.iter().flat_map(|v| v.values.iter().copied()).collect();
    let m = DMatrix::from_column_slice(dim, set.vectors.len(), &flat);
    save_matrix(&DescriptorMatrix::from_dmatrix(&m)?, path)?;
    let sidecar = path.with_extension("json");
    let meta = serde_json::json!({
        "encoding": set.kind,
        "d_prime": set.d_prime,
        "dim": dim,
        "ids": set.ids,
    });
    fs::write(&sidecar, serde_json::to_string_pretty(&meta).expect("sidecar serializes")).map_err(|source| {
        Error::IoFailure {
            path: sidecar.clone(),
            source,
        }
    })
}
