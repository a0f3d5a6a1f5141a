//! One-vs-rest linear SVM, L2-regularized hinge loss, trained by dual
//! coordinate descent. The bias is learned as the weight of a constant
//! feature (value 1), so it is regularized like the other weights.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvmParams {
    pub reg_c: f64,
    pub seed: u64,
    /// Stop when the projected-gradient spread falls below this.
    pub tol: f64,
    pub max_epochs: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        Self {
            reg_c: 1.0,
            seed: 0,
            tol: 1e-4,
            max_epochs: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub classes: Vec<String>,
    /// `dim x C`
    pub weights: DMatrix<f64>,
    pub biases: Vec<f64>,
    pub reg_c: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// `scores[i][c]`
    pub scores: Vec<Vec<f64>>,
    /// Index into the classifier's class list.
    pub labels: Vec<usize>,
}

/// Trains one binary problem; returns `(w, b)` and the number of epochs.
fn train_binary(
    samples: &[Vec<f64>],
    y: &[f64],
    cost: &[f64],
    params: &SvmParams,
    seed: u64,
) -> (Vec<f64>, f64, usize) {
    let n = samples.len();
    let dim = samples[0].len();
    // squared norm including the bias feature
    let qii: Vec<f64> = samples.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>() + 1.0).collect();
    let mut alpha = vec![0.0f64; n];
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epochs = 0;
    while epochs < params.max_epochs {
        epochs += 1;
        order.shuffle(&mut rng);
        let mut pg_max = f64::NEG_INFINITY;
        let mut pg_min = f64::INFINITY;
        for &i in &order {
            let x = &samples[i];
            let margin = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let g = y[i] * margin - 1.0;
            let pg = if alpha[i] == 0.0 {
                g.min(0.0)
            } else if alpha[i] == cost[i] {
                g.max(0.0)
            } else {
                g
            };
            pg_max = pg_max.max(pg);
            pg_min = pg_min.min(pg);
            if pg != 0.0 {
                let old = alpha[i];
                alpha[i] = (old - g / qii[i]).clamp(0.0, cost[i]);
                let step = (alpha[i] - old) * y[i];
                if step != 0.0 {
                    for (wj, xj) in w.iter_mut().zip(x) {
                        *wj += step * xj;
                    }
                    b += step;
                }
            }
        }
        if pg_max - pg_min < params.tol {
            break;
        }
    }
    (w, b, epochs)
}

/// Class list is the sorted set of distinct labels.
pub fn train_classifier(samples: &[Vec<f64>], labels: &[String], params: &SvmParams) -> Result<LinearClassifier> {
    let classes: Vec<String> = labels.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    train_classifier_weighted(samples, labels, None, &classes, params)
}

/// One-vs-rest training with an explicit class order and optional
/// per-sample weights (sample `i` gets cost `C · weight[i]`).
pub fn train_classifier_weighted(
    samples: &[Vec<f64>],
    labels: &[String],
    weights: Option<&[f64]>,
    classes: &[String],
    params: &SvmParams,
) -> Result<LinearClassifier> {
    if samples.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: samples.len(),
            right: labels.len(),
        });
    }
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(Error::LengthMismatch {
                left: samples.len(),
                right: w.len(),
            });
        }
    }
    if classes.len() < 2 {
        return Err(Error::SingleClass);
    }
    for c in classes {
        if !labels.contains(c) {
            return Err(Error::EmptyClass(c.clone()));
        }
    }
    if let Some(l) = labels.iter().find(|l| !classes.contains(l)) {
        return Err(Error::ConfigInvalid(format!("label {l} is not in the class list")));
    }
    if !(params.reg_c > 0.0) {
        return Err(Error::ConfigInvalid(format!("SVM cost must be > 0, got {}", params.reg_c)));
    }
    let dim = samples[0].len();
    if let Some(s) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch(format!("sample of dim {} among dim {dim}", s.len())));
    }
    let cost: Vec<f64> = match weights {
        Some(w) => w.iter().map(|v| v * params.reg_c).collect(),
        None => vec![params.reg_c; samples.len()],
    };
    let mut weights_out = DMatrix::zeros(dim, classes.len());
    let mut biases = Vec::with_capacity(classes.len());
    for (c, class) in classes.iter().enumerate() {
        let y: Vec<f64> = labels.iter().map(|l| if l == class { 1.0 } else { -1.0 }).collect();
        let (w, b, _) = train_binary(samples, &y, &cost, params, params.seed.wrapping_add(c as u64));
        weights_out.set_column(c, &nalgebra::DVector::from_vec(w));
        biases.push(b);
    }
    Ok(LinearClassifier {
        classes: classes.to_vec(),
        weights: weights_out,
        biases,
        reg_c: params.reg_c,
        seed: params.seed,
    })
}

/// `scores = Wᵀe + b`; label is the argmax, lowest class index on ties.
pub fn classify(clf: &LinearClassifier, samples: &[Vec<f64>]) -> Result<Predictions> {
    let dim = clf.weights.nrows();
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        if s.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "sample has dim {}, classifier expects {dim}",
                s.len()
            )));
        }
        let row: Vec<f64> = (0..clf.classes.len())
            .map(|c| clf.weights.column(c).iter().zip(s).map(|(w, x)| w * x).sum::<f64>() + clf.biases[c])
            .collect();
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        labels.push(best);
        scores.push(row);
    }
    Ok(Predictions { scores, labels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    fn blobs(centers: &[[f64; 2]], per: usize, sd: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                x.push(vec![center[0] + noise.sample(&mut rng), center[1] + noise.sample(&mut rng)]);
                y.push(format!("c{c}"));
            }
        }
        (x, y)
    }

    #[test]
    fn separable_training_accuracy() {
        let (x, y) = blobs(&[[-2.0, 0.0], [2.0, 0.0]], 30, 0.3, 1);
        let clf = train_classifier(&x, &y, &SvmParams::default()).unwrap();
        let pred = classify(&clf, &x).unwrap();
        let correct = pred.labels.iter().zip(&y).filter(|(p, t)| clf.classes[**p] == **t).count();
        assert_eq!(correct, x.len());
    }

    #[test]
    fn three_blobs_held_out() {
        for seed in 0..10 {
            let centers = [[0.0, 6.0], [6.0, -3.0], [-6.0, -3.0]];
            let (x, y) = blobs(&centers, 20, 1.0, seed);
            let (xt, yt) = blobs(&centers, 20, 1.0, seed + 100);
            let clf = train_classifier(&x, &y, &SvmParams { seed, ..Default::default() }).unwrap();
            let pred = classify(&clf, &xt).unwrap();
            let correct = pred.labels.iter().zip(&yt).filter(|(p, t)| clf.classes[**p] == **t).count();
            assert!(correct as f64 / yt.len() as f64 >= 0.95);
        }
    }

    #[test]
    fn duplicated_points_with_half_weight() {
        let (x, y) = blobs(&[[-1.0, 0.5], [1.0, -0.5]], 15, 0.8, 3);
        let classes = vec!["c0".to_string(), "c1".to_string()];
        let params = SvmParams { tol: 1e-8, ..Default::default() };
        let a = train_classifier_weighted(&x, &y, None, &classes, &params).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<String> = y.iter().chain(&y).cloned().collect();
        let half = vec![0.5; x2.len()];
        let b = train_classifier_weighted(&x2, &y2, Some(&half), &classes, &params).unwrap();
        assert!((&a.weights - &b.weights).abs().max() < 1e-4);
        let probe: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64 - 25.0) / 10.0, 0.3]).collect();
        let pa = classify(&a, &probe).unwrap();
        let pb = classify(&b, &probe).unwrap();
        for (sa, sb) in pa.scores.iter().zip(&pb.scores) {
            for (u, v) in sa.iter().zip(sb) {
                assert!((u - v).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn training_is_reproducible() {
        let (x, y) = blobs(&[[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], 10, 0.7, 5);
        let p = SvmParams { seed: 42, ..Default::default() };
        assert_eq!(train_classifier(&x, &y, &p).unwrap(), train_classifier(&x, &y, &p).unwrap());
    }

    #[test]
    fn classification_errors() {
        let x = vec![vec![1.0], vec![2.0]];
        let y = vec!["a".to_string(), "a".to_string()];
        assert!(matches!(train_classifier(&x, &y, &SvmParams::default()), Err(Error::SingleClass)));
        let classes = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(
            train_classifier_weighted(&x, &y, None, &classes, &SvmParams::default()),
            Err(Error::EmptyClass(c)) if c == "b"
        ));
    }

    #[test]
    fn classify_examples() {
        let clf = LinearClassifier {
            classes: vec!["one".into(), "two".into()],
            weights: DMatrix::zeros(3, 2),
            biases: vec![1.0, 0.0],
            reg_c: 1.0,
            seed: 0,
        };
        let p = classify(&clf, &[vec![0.0; 3]]).unwrap();
        assert_eq!(p.labels, vec![0]);
        assert!(classify(&clf, &[vec![0.0; 2]]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let clf = LinearClassifier {
            classes: vec!["a".into(), "b".into(), "c".into()],
            weights: DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)),
            biases: vec![0.1, -0.2, 0.3],
            reg_c: 1.0,
            seed: 0,
        };
        let samples: Vec<Vec<f64>> = (0..5).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let p = classify(&clf, &samples).unwrap();
        for (s, row) in samples.iter().zip(&p.scores) {
            for c in 0..3 {
                let expect: f64 = (0..4).map(|j| clf.weights[(j, c)] * s[j]).sum::<f64>() + clf.biases[c];
                assert!((row[c] - expect).abs() < 1e-12);
            }
        }
        // permuting the class order permutes the score columns
        let perm = [2, 0, 1];
        let permuted = LinearClassifier {
            classes: perm.iter().map(|&i| clf.classes[i].clone()).collect(),
            weights: DMatrix::from_fn(4, 3, |r, c| clf.weights[(r, perm[c])]),
            biases: perm.iter().map(|&i| clf.biases[i]).collect(),
            ..clf.clone()
        };
        let q = classify(&permuted, &samples).unwrap();
        for (a, b) in p.scores.iter().zip(&q.scores) {
            for (c, &pc) in perm.iter().enumerate() {
                assert_eq!(b[c], a[pc]);
            }
        }
    }
}
