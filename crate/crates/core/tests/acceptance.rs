//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use partforge::assignment::{
    brute_force_assign, hungarian_per_image, isa, sinkhorn, sinkhorn_residuals, soft_assign, AssignMode,
    AssignmentMatrix, IsaParams,
};
use partforge::dataset::{RegionGeometry, Split};
use partforge::encoding::{encode_bop, encode_pcop, encode_sbop, encode_wpcop, fit_pca, PartScoreMatrix};
use partforge::evaluation::{average_precision, Relevance};
use partforge::grouping::{greedy_balance, iterative_balance_traced, kmeans};
use partforge::oracle::{oracle_ap, oracle_lda, random_lda_instance, random_relevance_list, ratio_to_f64, recovery_score};
use partforge::parts::{
    compute_lda_stats, matching_matrix, objective, part_models, part_models_row_normalized, PartModelBank, Ridge,
};
use partforge::pipeline::{
    encode_dataset, learn_parts, run_classification, run_retrieval, save_banks, Mode, RunConfig, Solver,
};
use partforge::synth::{synth_dataset, SynthParams, SynthTask};

type Outcome = std::result::Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Exact audit of the partial-assignment constraints: entries in {0, 1},
/// column sums at most one, every part row sums to one in every image block.
fn feasible(a: &AssignmentMatrix) -> bool {
    let r = a.regions_per_image;
    let v = &a.values;
    if v.iter().any(|&x| x != 0.0 && x != 1.0) {
        return false;
    }
    for j in 0..v.ncols() {
        let mut s = 0.0;
        for p in 0..v.nrows() {
            s += v[(p, j)];
        }
        if s > 1.0 {
            return false;
        }
    }
    for block in 0..v.ncols() / r {
        for p in 0..v.nrows() {
            let mut s = 0.0;
            for j in block * r..(block + 1) * r {
                s += v[(p, j)];
            }
            if s != 1.0 {
                return false;
            }
        }
    }
    true
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut exact = 0;
    let mut isa_ok = 0;
    let mut worst_ratio = f64::INFINITY;
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.random_range(2..=6);
        let p = rng.random_range(1..=r.min(4));
        let images = rng.random_range(1..=3);
        let d = rng.random_range(3..=8);
        let x = DMatrix::from_fn(d, r * images, |_, _| rng.sample::<f64, _>(StandardNormal));
        let stats = compute_lda_stats(&x, Ridge::default()).map_err(|e| e.to_string())?;
        let a0 = DMatrix::from_fn(p, r * images, |_, _| rng.random_range(0.05..1.0));
        let a0 = AssignmentMatrix::new(a0, r, AssignMode::Soft).map_err(|e| e.to_string())?;
        let w0 = part_models(&a0, &x, &stats, images, 0).map_err(|e| e.to_string())?;
        let m = matching_matrix(&w0, &x).map_err(|e| e.to_string())?;

        let h = hungarian_per_image(&m, r).map_err(|e| e.to_string())?;
        let b = brute_force_assign(&m, r).map_err(|e| e.to_string())?;
        if objective(&h.values, &m).unwrap() == objective(&b.values, &m).unwrap() {
            exact += 1;
        }

        // ISA output against the exhaustive optimum for the part models it ends with
        let start_a = soft_assign(&m, 1.0, r).map_err(|e| e.to_string())?;
        let out = isa(&start_a, &x, &stats, images, &IsaParams::default()).map_err(|e| e.to_string())?;
        let w1 = part_models(&out.assignment, &x, &stats, images, 0).map_err(|e| e.to_string())?;
        let m1 = matching_matrix(&w1, &x).map_err(|e| e.to_string())?;
        let got = objective(&out.assignment.values, &m1).unwrap();
        let best = objective(&brute_force_assign(&m1, r).map_err(|e| e.to_string())?.values, &m1).unwrap();
        if got >= best - 0.05 * best.abs() {
            isa_ok += 1;
        }
        if best > 0.0 {
            worst_ratio = worst_ratio.min(got / best);
        }
    }
    let elapsed = start.elapsed();
    check(
        exact == 200 && isa_ok == 200 && elapsed < Duration::from_secs(30),
        format!(
            "hungarian==brute {exact}/200, isa>=0.95*opt {isa_ok}/200 (worst ratio {worst_ratio:.4}), {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut audited = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.random_range(3..=10);
        let params = SynthParams {
            groups: rng.random_range(2..=4),
            images_per_group: rng.random_range(3..=6),
            held_out_per_group: 1,
            regions_per_image: r,
            dim: rng.random_range(4..=10),
            planted_per_group: rng.random_range(1..=r.min(3)),
            noise: rng.random_range(0.1..2.0),
            ..SynthParams::default()
        };
        let (ds, _) = synth_dataset(&params, seed).map_err(|e| e.to_string())?;
        let cfg = RunConfig {
            groups: rng.random_range(1..=params.groups),
            parts: rng.random_range(1..=r.min(4)),
            solver: if seed % 2 == 0 { Solver::Isa } else { Solver::Huna },
            seed,
            ..RunConfig::default()
        };
        let train = ds.manifest.indices_in(Split::Train);
        let learned = learn_parts(&ds, &cfg, &train).map_err(|e| format!("seed {seed}: {e}"))?;
        for a in &learned.assignments {
            if !feasible(a) {
                return Err(format!("infeasible assignment in pipeline seed {seed} ({:?})", cfg.solver));
            }
            audited += 1;
        }
    }
    Ok(format!("{audited} assignments from 100 pipelines satisfy both constraints exactly"))
}

fn criterion_3() -> Outcome {
    let mut worst_residual: f64 = 0.0;
    let mut worst_idem: f64 = 0.0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.random_range(2..=5);
        let r = rng.random_range(p + 1..=20);
        let images = rng.random_range(1..=3);
        let mut a = DMatrix::from_fn(p, r * images, |_, _| rng.random_range(0.01..1.0));
        let mut zero_cols = Vec::new();
        for block in 0..images {
            // keep at least p nonzero columns per image
            for j in 0..r - p {
                if rng.random_bool(0.3) {
                    let col = block * r + j;
                    a.column_mut(col).fill(0.0);
                    zero_cols.push(col);
                }
            }
        }
        let a = AssignmentMatrix::new(a, r, AssignMode::Soft).map_err(|e| e.to_string())?;
        let s1 = sinkhorn(&a, 1e-11, 100_000).map_err(|e| e.to_string())?;
        let (row_res, col_res) = sinkhorn_residuals(&s1);
        worst_residual = worst_residual.max(row_res).max(col_res);
        for &c in &zero_cols {
            if s1.values.column(c).iter().any(|v| v.to_bits() != 0.0f64.to_bits()) {
                return Err(format!("seed {seed}: zero column {c} changed"));
            }
        }
        let s2 = sinkhorn(&s1, 1e-11, 100_000).map_err(|e| e.to_string())?;
        worst_idem = worst_idem.max((&s2.values - &s1.values).abs().max());
    }
    check(
        worst_residual < 1e-6 && worst_idem <= 1e-9,
        format!("max residual {worst_residual:.2e}, idempotence gap {worst_idem:.2e}, zero columns untouched"),
    )
}

fn criterion_4() -> Outcome {
    let mut worst_soft: f64 = 0.0;
    let mut worst_binary: f64 = 0.0;
    for seed in 0..100u64 {
        let (a, x, r) = random_lda_instance(seed);
        let stats = compute_lda_stats(&x, Ridge::default()).map_err(|e| e.to_string())?;
        let mu: Vec<f64> = stats.mu.iter().copied().collect();

        let soft = AssignmentMatrix::new(a.clone(), r, AssignMode::Soft).map_err(|e| e.to_string())?;
        let fast = part_models_row_normalized(&soft, &x, &stats, 0).map_err(|e| e.to_string())?;
        let slow = oracle_lda(&a, &x, &mu, &stats.sigma_inv).map_err(|e| e.to_string())?;
        worst_soft = worst_soft.max((fast.weights - slow).abs().max());

        // a feasible binary assignment has row sums equal to the image count
        let binary = hungarian_per_image(&a, r).map_err(|e| e.to_string())?;
        let images = x.ncols() / r;
        let fast = part_models(&binary, &x, &stats, images, 0).map_err(|e| e.to_string())?;
        let slow = oracle_lda(&binary.values, &x, &mu, &stats.sigma_inv).map_err(|e| e.to_string())?;
        worst_binary = worst_binary.max((fast.weights - slow).abs().max());
    }
    check(
        worst_soft <= 1e-8 && worst_binary <= 1e-8,
        format!("max |W - oracle|: row-normalized {worst_soft:.2e}, matrix form on binary A {worst_binary:.2e}"),
    )
}

fn criterion_5() -> Outcome {
    let mut worst_update: f64 = 0.0;
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(40..=1000);
        let k = rng.random_range(2..=20);
        let d = rng.random_range(2..=8);
        // uneven mixture so that plain nearest-centroid groups are unbalanced
        let centers = rng.random_range(2..=6);
        let means: Vec<Vec<f64>> = (0..centers)
            .map(|_| (0..d).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut x = DMatrix::zeros(d, n);
        for i in 0..n {
            let c = (rng.random::<f64>().powi(3) * centers as f64) as usize;
            for j in 0..d {
                x[(j, i)] = means[c][j] + normal.sample(&mut rng);
            }
        }
        let c = kmeans(&x, k, seed).map_err(|e| e.to_string())?;
        let greedy = greedy_balance(&c, &x).map_err(|e| e.to_string())?;
        if greedy.spread() > 1 {
            return Err(format!("seed {seed}: greedy spread {}", greedy.spread()));
        }
        let traced = iterative_balance_traced(&c, &x, 0.01, 80).map_err(|e| e.to_string())?;
        if traced.partition.spread() > 1 {
            return Err(format!("seed {seed}: iterative spread {}", traced.partition.spread()));
        }
        for part in [&greedy, &traced.partition] {
            let mut seen: Vec<usize> = part.groups.iter().flatten().copied().collect();
            seen.sort_unstable();
            if seen != (0..n).collect::<Vec<_>>() {
                return Err(format!("seed {seed}: partition does not cover every image once"));
            }
        }
        let target = n as f64 / k as f64;
        for (t, step) in traced.history.iter().enumerate() {
            if t > 0 && step.penalties_before != traced.history[t - 1].penalties_after {
                return Err(format!("seed {seed}: penalty chain broken at round {t}"));
            }
            for g in 0..k {
                let expected = step.penalties_before[g] * (step.sizes[g] as f64 / target).powf(0.01);
                let dev = (step.penalties_after[g] - expected).abs() / expected.abs().max(1.0);
                worst_update = worst_update.max(dev);
            }
        }
    }
    check(
        worst_update <= 1e-12,
        format!("30 seeds spread <= 1 for both methods, penalty update deviation {worst_update:.2e}"),
    )
}

fn criterion_6() -> Outcome {
    let mut worst_norm: f64 = 0.0;
    let mut worst_equal: f64 = 0.0;
    let mut worst_scale: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..=3);
        let p = rng.random_range(1..=4);
        let r = rng.random_range(p.max(2)..=12);
        let d = rng.random_range(2..=10);
        let d_out = rng.random_range(1..=d);
        let banks: Vec<PartModelBank> = (0..k)
            .map(|g| PartModelBank {
                group: g,
                weights: DMatrix::from_fn(d, p, |_, _| rng.sample(StandardNormal)),
            })
            .collect();
        let x = DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let boxes = (0..r)
            .map(|_| {
                let x0 = rng.random_range(0..80) as f32;
                let y0 = rng.random_range(0..60) as f32;
                [x0, y0, x0 + rng.random_range(1..=20) as f32, y0 + rng.random_range(1..=20) as f32]
            })
            .collect();
        let geom = RegionGeometry {
            width: 100.0,
            height: 80.0,
            boxes,
        };
        let pool = DMatrix::from_fn(d, 40, |_, _| rng.sample::<f64, _>(StandardNormal));
        let pca = fit_pca(&pool, d_out).map_err(|e| e.to_string())?;
        let s = partforge::encoding::part_scores(&banks, &x).map_err(|e| e.to_string())?;
        let pk = p * k;
        let encoded = [
            (encode_bop(&s), 2 * pk),
            (encode_sbop(&s, &geom), 6 * pk),
            (encode_pcop(&s, &x, &pca), d_out * pk),
            (encode_wpcop(&s, &x, &pca), d_out * pk),
        ];
        for (v, dim) in encoded {
            let v = v.map_err(|e| e.to_string())?;
            if v.dim() != dim {
                return Err(format!("seed {seed}: {:?} has dim {}, expected {dim}", v.kind, v.dim()));
            }
            let norm = v.values.iter().map(|x| x * x).sum::<f64>().sqrt();
            worst_norm = worst_norm.max((norm - 1.0).abs());
        }

        // every part's maximum equals the same positive value
        let top = rng.random_range(0.5..5.0);
        let mut equal = DMatrix::from_fn(pk, r, |_, _| rng.random_range(-3.0..top - 0.1));
        for row in 0..pk {
            let j = rng.random_range(0..r);
            equal[(row, j)] = top;
        }
        let equal = PartScoreMatrix { scores: equal };
        let pc = encode_pcop(&equal, &x, &pca).map_err(|e| e.to_string())?;
        let wc = encode_wpcop(&equal, &x, &pca).map_err(|e| e.to_string())?;
        worst_equal = worst_equal.max(pc.values.iter().zip(&wc.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        for lambda in [0.25, 3.0, 1000.0] {
            let scaled = PartScoreMatrix {
                scores: &s.scores * lambda,
            };
            let a = encode_wpcop(&s, &x, &pca).map_err(|e| e.to_string())?;
            let b = encode_wpcop(&scaled, &x, &pca).map_err(|e| e.to_string())?;
            worst_scale = worst_scale.max(a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    check(
        worst_norm <= 1e-9 && worst_equal <= 1e-12 && worst_scale <= 1e-12,
        format!(
            "dims exact; max | |v| - 1 | {worst_norm:.2e}; wpCOP vs pCOP at equal maxima {worst_equal:.2e}; \
             score scaling {worst_scale:.2e}"
        ),
    )
}

fn criterion_7() -> Outcome {
    use Relevance::*;
    let fixture = oracle_ap(&[Positive, Negative, Positive]).map_err(|e| e.to_string())?;
    if fixture != num::rational::Ratio::new(5, 6) {
        return Err(format!("fixture gave {fixture}"));
    }
    let fast_fixture = average_precision(&[Positive, Negative, Positive]).unwrap();
    let mut worst: f64 = 0.0;
    for seed in 0..1000u64 {
        let list = random_relevance_list(seed);
        let exact = oracle_ap(&list).map_err(|e| e.to_string())?;
        let fast = average_precision(&list).map_err(|e| e.to_string())?;
        worst = worst.max((fast - ratio_to_f64(&exact)).abs());
    }
    check(
        worst <= 1e-12 && (fast_fixture - 5.0 / 6.0).abs() <= 1e-12,
        format!("[pos,neg,pos] = 5/6 exactly; 1000 lists max deviation from rational {worst:.2e}"),
    )
}

fn recovery_synth() -> SynthParams {
    SynthParams {
        task: SynthTask::Classification,
        groups: 4,
        images_per_group: 20,
        held_out_per_group: 10,
        regions_per_image: 50,
        dim: 16,
        planted_per_group: 3,
        noise: 1.0,
        ..SynthParams::default()
    }
}

fn recovery_cfg(seed: u64, solver: Solver, mode: Mode) -> RunConfig {
    RunConfig {
        groups: 4,
        parts: 5,
        dim: 16,
        dim_sweep: vec![16, 8],
        solver,
        mode,
        seed,
        ..RunConfig::default()
    }
}

fn mean_recovery(solver: Solver, mode: Mode) -> std::result::Result<(f64, Vec<f64>), String> {
    let mut scores = Vec::new();
    for seed in 0..5u64 {
        let (ds, truth) = synth_dataset(&recovery_synth(), seed).map_err(|e| e.to_string())?;
        let train = ds.manifest.indices_in(Split::Train);
        let learned = learn_parts(&ds, &recovery_cfg(seed, solver, mode), &train).map_err(|e| e.to_string())?;
        scores.push(recovery_score(&learned.banks, &learned.partition.groups, &ds, &truth).map_err(|e| e.to_string())?);
    }
    Ok((scores.iter().sum::<f64>() / scores.len() as f64, scores))
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let (isa_mean, isa_scores) = mean_recovery(Solver::Isa, Mode::Unsupervised)?;
    let (hun_mean, hun_scores) = mean_recovery(Solver::Huna, Mode::Unsupervised)?;
    let elapsed = start.elapsed();
    check(
        isa_mean.max(hun_mean) >= 0.9 && elapsed < Duration::from_secs(120),
        format!(
            "recovery ISA {isa_mean:.3} {isa_scores:.3?}, HunA {hun_mean:.3} {hun_scores:.3?}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_9() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..5u64 {
        let (ds, _) = synth_dataset(&recovery_synth(), seed).map_err(|e| e.to_string())?;
        let out = run_classification(&ds, &recovery_cfg(seed, Solver::Isa, Mode::Unsupervised))
            .map_err(|e| e.to_string())?;
        let acc = out.report.accuracy.unwrap();
        let global = out.report.baseline.global.accuracy.unwrap();
        ok &= acc >= global;
        lines.push(format!("acc {acc:.3}/{global:.3}"));
    }
    let retrieval = SynthParams {
        task: SynthTask::Retrieval,
        held_out_per_group: 5,
        distractors: 20,
        junk_per_group: 2,
        ..recovery_synth()
    };
    for seed in 0..5u64 {
        let (ds, _) = synth_dataset(&retrieval, seed).map_err(|e| e.to_string())?;
        let out = run_retrieval(&ds, &recovery_cfg(seed, Solver::Isa, Mode::Unsupervised))
            .map_err(|e| e.to_string())?;
        let r = &out.report;
        let global = r.baseline.global.map;
        let random = r.baseline.random.as_ref().unwrap().map;
        ok &= r.map >= global && r.map >= random + 0.3;
        lines.push(format!("mAP {:.3}/{global:.3}/rand {random:.3}", r.map));
    }
    check(ok, format!("wpCOP/global per seed: {}", lines.join(", ")))
}

fn criterion_10() -> Outcome {
    let (ds, _) = synth_dataset(&recovery_synth(), 11).map_err(|e| e.to_string())?;
    let cfg = recovery_cfg(11, Solver::Isa, Mode::Unsupervised);
    let a = run_classification(&ds, &cfg).map_err(|e| e.to_string())?;
    let b = run_classification(&ds, &cfg).map_err(|e| e.to_string())?;
    let train = ds.manifest.indices_in(Split::Train);
    let ea = encode_dataset(&ds, &a.learned, &cfg, &train).map_err(|e| e.to_string())?;
    let eb = encode_dataset(&ds, &b.learned, &cfg, &train).map_err(|e| e.to_string())?;
    let bits = |v: &[partforge::encoding::EncodedVector]| -> Vec<u64> {
        v.iter().flat_map(|e| e.values.iter().map(|x| x.to_bits())).collect()
    };
    let bank_bits = |banks: &[PartModelBank]| -> Vec<u64> {
        banks.iter().flat_map(|b| b.weights.iter().map(|x| x.to_bits())).collect()
    };
    let dir_a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir_b = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_banks(&a.learned, &cfg, &ds, dir_a.path()).map_err(|e| e.to_string())?;
    save_banks(&b.learned, &cfg, &ds, dir_b.path()).map_err(|e| e.to_string())?;
    let files_equal = ["banks.json", "bank_000.dmx", "bank_003.dmx"].iter().all(|f| {
        std::fs::read(dir_a.path().join(f)).ok() == std::fs::read(dir_b.path().join(f)).ok()
    });
    let ra = run_retrieval(&ds_retrieval(11)?, &cfg).map_err(|e| e.to_string())?;
    let rb = run_retrieval(&ds_retrieval(11)?, &cfg).map_err(|e| e.to_string())?;
    check(
        bank_bits(&a.learned.banks) == bank_bits(&b.learned.banks)
            && bits(&ea.vectors) == bits(&eb.vectors)
            && a.report.to_json() == b.report.to_json()
            && ra.report.to_json() == rb.report.to_json()
            && files_equal,
        "banks, encodings, saved bank files and both reports bit-identical across runs".into(),
    )
}

fn ds_retrieval(seed: u64) -> std::result::Result<partforge::dataset::Dataset, String> {
    let p = SynthParams {
        task: SynthTask::Retrieval,
        held_out_per_group: 3,
        distractors: 5,
        junk_per_group: 1,
        ..recovery_synth()
    };
    synth_dataset(&p, seed).map(|(d, _)| d).map_err(|e| e.to_string())
}

fn criterion_11() -> Outcome {
    let (sup, sup_scores) = mean_recovery(Solver::Isa, Mode::Supervised)?;
    let (unsup, _) = mean_recovery(Solver::Isa, Mode::Unsupervised)?;
    check(
        sup >= unsup - 0.05,
        format!("supervised recovery {sup:.3} {sup_scores:.3?} vs unsupervised {unsup:.3}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("assignment optimality", criterion_1),
        ("feasibility audit", criterion_2),
        ("sinkhorn contract", criterion_3),
        ("LDA equivalence", criterion_4),
        ("balanced grouping", criterion_5),
        ("encoding contracts", criterion_6),
        ("metric oracles", criterion_7),
        ("planted-part recovery", criterion_8),
        ("end-task improvement", criterion_9),
        ("determinism", criterion_10),
        ("supervised parity", criterion_11),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
