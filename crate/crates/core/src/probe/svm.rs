//! One-vs-rest linear SVM trained by dual coordinate descent.
//!
//! Each binary machine minimizes
//! `0.5 |w|^2 + (C / n) * sum_i max(0, 1 - y_i <w, x_i>)`
//! with the bias folded in as a constant feature. Scaling the hinge term by
//! `1 / n` makes the solution invariant to duplicating the training set.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Per-dimension mean and standard deviation fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Dimensions with zero spread keep unit scale so they map to zero.
    pub fn fit(features: &[Vec<f32>]) -> Result<Self> {
        let dim = feature_dim(features)?;
        let n = features.len() as f64;
        let mut mean = vec![0.0; dim];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for f in features {
            for ((s, &v), m) in var.iter_mut().zip(f).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, features: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
        features
            .iter()
            .map(|f| {
                if f.len() != self.mean.len() {
                    return Err(Error::shape(format!(
                        "feature length {} but standardizer has {}",
                        f.len(),
                        self.mean.len()
                    )));
                }
                Ok(f.iter()
                    .zip(&self.mean)
                    .zip(&self.std)
                    .map(|((&v, m), s)| (v as f64 - m) / s)
                    .collect())
            })
            .collect()
    }
}

fn feature_dim<F>(features: &[Vec<F>]) -> Result<usize> {
    let dim = features
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::param("no feature vectors"))?;
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::shape("feature vectors must share one nonzero length"));
    }
    Ok(dim)
}

/// Train and val features, standardized with train-split statistics.
#[derive(Clone, Debug)]
pub struct ProbeDataset {
    pub train_x: Vec<Vec<f64>>,
    pub train_y: Vec<u32>,
    pub val_x: Vec<Vec<f64>>,
    pub val_y: Vec<u32>,
    pub standardizer: Standardizer,
}

impl ProbeDataset {
    pub fn new(
        train_features: &[Vec<f32>],
        train_labels: Vec<u32>,
        val_features: &[Vec<f32>],
        val_labels: Vec<u32>,
    ) -> Result<Self> {
        if train_features.len() != train_labels.len() || val_features.len() != val_labels.len() {
            return Err(Error::shape("feature and label counts differ"));
        }
        let standardizer = Standardizer::fit(train_features)?;
        Ok(Self {
            train_x: standardizer.apply(train_features)?,
            train_y: train_labels,
            val_x: standardizer.apply(val_features)?,
            val_y: val_labels,
            standardizer,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmOptions {
    pub c: f64,
    pub max_epochs: usize,
    /// Relative duality-gap tolerance.
    pub tol: f64,
}

impl Default for SvmOptions {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_epochs: 1000,
            tol: 1e-4,
        }
    }
}

/// One binary machine; `weights` has the bias as its last entry.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarySvm {
    pub weights: Vec<f64>,
    pub epochs: usize,
    pub gap: f64,
    /// Dual objective (as a minimization) after each sweep.
    pub dual_trace: Vec<f64>,
}

impl BinarySvm {
    pub fn score(&self, x: &[f64]) -> f64 {
        let d = x.len();
        dot(&self.weights[..d], x) + self.weights[d]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn augmented_dot(w: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    dot(&w[..d], x) + w[d]
}

/// Train one binary machine with targets `y_i = +1` where `positive[i]`.
pub fn train_binary_svm(x: &[Vec<f64>], positive: &[bool], opts: &SvmOptions, seed: u64) -> Result<BinarySvm> {
    let dim = feature_dim(x)?;
    if positive.len() != x.len() {
        return Err(Error::shape("label count differs from feature count"));
    }
    if !(opts.c > 0.0 && opts.c.is_finite()) {
        return Err(Error::param(format!("SVM C must be positive, got {}", opts.c)));
    }
    if opts.max_epochs == 0 {
        return Err(Error::param("SVM needs at least one epoch"));
    }
    let n = x.len();
    let upper = opts.c / n as f64;
    let sign = |i: usize| if positive[i] { 1.0 } else { -1.0 };
    let q: Vec<f64> = x.iter().map(|xi| dot(xi, xi) + 1.0).collect();
    let mut alpha = vec![0.0f64; n];
    let mut w = vec![0.0f64; dim + 1];
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_for(seed, &[]);
    let mut dual_trace = Vec::new();
    let mut gap = f64::INFINITY;
    let mut epochs = 0;

    while epochs < opts.max_epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let yi = sign(i);
            let grad = yi * augmented_dot(&w, &x[i]) - 1.0;
            let new = (alpha[i] - grad / q[i]).clamp(0.0, upper);
            let delta = new - alpha[i];
            if delta != 0.0 {
                alpha[i] = new;
                let step = delta * yi;
                for (wj, xj) in w.iter_mut().zip(&x[i]) {
                    *wj += step * xj;
                }
                w[dim] += step;
            }
        }
        epochs += 1;

        let half_norm = 0.5 * dot(&w, &w);
        let hinge: f64 = (0..n)
            .map(|i| (1.0 - sign(i) * augmented_dot(&w, &x[i])).max(0.0))
            .sum();
        let primal = half_norm + upper * hinge;
        let dual = half_norm - alpha.iter().sum::<f64>();
        dual_trace.push(dual);
        gap = primal + dual;
        if gap <= opts.tol * primal.abs().max(1.0) {
            break;
        }
    }
    Ok(BinarySvm {
        weights: w,
        epochs,
        gap,
        dual_trace,
    })
}

/// One-vs-rest linear SVM over class ids `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvmModel {
    pub machines: Vec<BinarySvm>,
    pub c: f64,
}

impl SvmModel {
    pub fn num_classes(&self) -> usize {
        self.machines.len()
    }

    pub fn dim(&self) -> usize {
        self.machines[0].weights.len() - 1
    }

    /// Highest-scoring class; ties go to the lowest class id.
    pub fn predict(&self, x: &[f64]) -> Result<u32> {
        if x.len() != self.dim() {
            return Err(Error::shape(format!(
                "feature length {} but model expects {}",
                x.len(),
                self.dim()
            )));
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (k, m) in self.machines.iter().enumerate() {
            let s = m.score(x);
            if s > best.1 {
                best = (k, s);
            }
        }
        Ok(best.0 as u32)
    }
}

pub fn train_linear_svm(x: &[Vec<f64>], labels: &[u32], opts: &SvmOptions, seed: u64) -> Result<SvmModel> {
    let num_classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let present = (0..num_classes as u32).filter(|c| labels.contains(c)).count();
    if present < 2 {
        return Err(Error::param("SVM needs at least two classes"));
    }
    let machines = (0..num_classes)
        .map(|k| {
            let positive: Vec<bool> = labels.iter().map(|&y| y as usize == k).collect();
            train_binary_svm(x, &positive, opts, crate::rng::derive_seed(seed, &[k as u64]))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SvmModel { machines, c: opts.c })
}

pub fn evaluate_svm(model: &SvmModel, x: &[Vec<f64>], labels: &[u32]) -> Result<f64> {
    if x.len() != labels.len() {
        return Err(Error::shape("feature and label counts differ"));
    }
    if x.is_empty() {
        return Err(Error::param("no samples to evaluate"));
    }
    let mut correct = 0usize;
    for (xi, &y) in x.iter().zip(labels) {
        if model.predict(xi)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / x.len() as f64)
}

/// Train on the train split and report val accuracy.
pub fn probe_accuracy(data: &ProbeDataset, opts: &SvmOptions, seed: u64) -> Result<f64> {
    let model = train_linear_svm(&data.train_x, &data.train_y, opts, seed)?;
    evaluate_svm(&model, &data.val_x, &data.val_y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<u32>) {
        let mut rng = rng_for(seed, &[]);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = (i % 2) as u32;
            let cx = if c == 0 { -2.0 } else { 2.0 };
            x.push(vec![cx + rng.random_range(-0.8..0.8), rng.random_range(-1.0..1.0)]);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn separable_blobs_fit_exactly() {
        let (x, y) = blobs(200, 3);
        let m = train_linear_svm(&x, &y, &SvmOptions::default(), 1).unwrap();
        assert_eq!(evaluate_svm(&m, &x, &y).unwrap(), 1.0);
        let wrong: Vec<u32> = y.iter().map(|v| 1 - v).collect();
        assert_eq!(evaluate_svm(&m, &x, &wrong).unwrap(), 0.0);
    }

    #[test]
    fn dual_objective_never_increases() {
        let (x, y) = blobs(100, 5);
        let pos: Vec<bool> = y.iter().map(|&v| v == 1).collect();
        let opts = SvmOptions {
            tol: 1e-12,
            max_epochs: 50,
            ..Default::default()
        };
        let m = train_binary_svm(&x, &pos, &opts, 2).unwrap();
        for w in m.dual_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn single_class_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(matches!(
            train_linear_svm(&x, &[1, 1], &SvmOptions::default(), 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn dimension_mismatch_on_evaluate() {
        let (x, y) = blobs(20, 1);
        let m = train_linear_svm(&x, &y, &SvmOptions::default(), 1).unwrap();
        assert!(matches!(evaluate_svm(&m, &[vec![1.0]], &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn standardizer_moments() {
        let f: Vec<Vec<f32>> = (0..50).map(|i| vec![i as f32, 3.0, (i * i) as f32]).collect();
        let s = Standardizer::fit(&f).unwrap();
        let z = s.apply(&f).unwrap();
        for d in [0, 2] {
            let mean = z.iter().map(|r| r[d]).sum::<f64>() / 50.0;
            let var = z.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / 50.0;
            assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        }
        assert!(z.iter().all(|r| r[1] == 0.0));
    }
}
