//! Class-balanced logistic regression on mean-pooled MLP outputs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::Corpus;
use crate::tensor::checkpoint::{
    find, find_scalar, read_checkpoint, scalar_entry, write_checkpoint,
};
use crate::tensor::{Tape, Tensor, Var};

/// Linear classifier on raw pooled features; positive when the logit is > 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyProbe {
    pub weights: Vec<f32>,
    pub bias: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub max_iter: usize,
    /// Inverse L2 strength on the raw weights; the penalty is
    /// `||w||^2 / (2 C)` against the summed sample losses.
    pub c: f64,
    /// Stops once the gradient norm falls below this.
    pub tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            max_iter: 1000,
            c: 1.0,
            tol: 1e-8,
        }
    }
}

impl FamilyProbe {
    pub fn logit(&self, x: &[f32]) -> f32 {
        let s: f64 = self
            .weights
            .iter()
            .zip(x)
            .map(|(&w, &v)| w as f64 * v as f64)
            .sum();
        (s + self.bias as f64) as f32
    }

    pub fn probability(&self, x: &[f32]) -> f32 {
        1.0 / (1.0 + (-self.logit(x)).exp())
    }

    pub fn predict(&self, x: &[f32]) -> bool {
        self.logit(x) > 0.0
    }

    /// Logit of a `1 x d` pooled feature row on a tape.
    pub fn logit_on(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        let w = tape.constant(Tensor::matrix(self.weights.len(), 1, self.weights.clone()));
        let s = tape.matmul(pooled, w)?;
        let b = tape.constant(Tensor::scalar(self.bias));
        tape.add(s, b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = Tensor::row(self.weights.clone());
        let (bn, bt) = scalar_entry("bias", self.bias);
        write_checkpoint(path, [("weights", &w), (bn.as_str(), &bt)])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        Ok(Self {
            weights: find(&entries, "weights")?.data().to_vec(),
            bias: find_scalar(&entries, "bias")?,
        })
    }
}

/// Fits the probe by Newton's method on the class-weighted logistic loss,
/// with inverse-frequency weights so both classes count equally. Features
/// are standardized internally for conditioning; the penalty applies to the
/// weights on the raw features and the intercept is not penalized.
pub fn train_family_probe(
    features: &[Vec<f32>],
    labels: &[bool],
    cfg: &LogisticConfig,
) -> Result<FamilyProbe> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if cfg.c <= 0.0 {
        return Err(Error::Config(format!("C must be positive, got {}", cfg.c)));
    }
    let n = features.len();
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::InvalidInput("feature rows differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::InvalidInput(
            "family probe needs both positive and negative examples".into(),
        ));
    }
    let nf = n as f64;
    let mut mean = vec![0.0f64; d];
    for f in features {
        for (m, &v) in mean.iter_mut().zip(f) {
            *m += v as f64 / nf;
        }
    }
    let mut std = vec![0.0f64; d];
    for f in features {
        for ((s, &v), &m) in std.iter_mut().zip(f).zip(&mean) {
            *s += (v as f64 - m).powi(2) / nf;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
    // standardized rows with a trailing 1 for the intercept
    let x: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            let mut row: Vec<f64> = f
                .iter()
                .zip(&mean)
                .zip(&std)
                .map(|((&v, &m), &s)| (v as f64 - m) / s)
                .collect();
            row.push(1.0);
            row
        })
        .collect();
    let class_weight = |y: bool| {
        if y {
            nf / (2.0 * n_pos as f64)
        } else {
            nf / (2.0 * (n - n_pos) as f64)
        }
    };
    // mean-loss scaling of the summed objective
    let lambda = 1.0 / (cfg.c * nf);
    let penalty: Vec<f64> = std.iter().map(|s| lambda / (s * s)).chain([0.0]).collect();
    let objective = |w: &[f64]| -> f64 {
        let mut total = 0.0;
        for (xi, &yi) in x.iter().zip(labels) {
            let z: f64 = xi.iter().zip(w).map(|(a, b)| a * b).sum();
            // log(1 + e^{-z}) for positives, log(1 + e^{z}) for negatives
            let m = if yi { -z } else { z };
            total += class_weight(yi) * (m.max(0.0) + (-m.abs()).exp().ln_1p());
        }
        total / nf + 0.5 * w.iter().zip(&penalty).map(|(v, p)| p * v * v).sum::<f64>()
    };

    let p = d + 1;
    let mut w = vec![0.0f64; p];
    let mut f_cur = objective(&w);
    for _ in 0..cfg.max_iter {
        let mut grad: Vec<f64> = w.iter().zip(&penalty).map(|(v, q)| q * v).collect();
        let mut hess = vec![0.0f64; p * p];
        for (j, q) in penalty.iter().enumerate() {
            hess[j * p + j] = *q;
        }
        for (xi, &yi) in x.iter().zip(labels) {
            let z: f64 = xi.iter().zip(&w).map(|(a, b)| a * b).sum();
            let prob = 1.0 / (1.0 + (-z).exp());
            let c = class_weight(yi) / nf;
            let r = c * (prob - if yi { 1.0 } else { 0.0 });
            let h = c * prob * (1.0 - prob);
            for (j, &a) in xi.iter().enumerate() {
                grad[j] += r * a;
                let row = &mut hess[j * p..(j + 1) * p];
                for (hk, &b) in row.iter_mut().zip(xi) {
                    *hk += h * a * b;
                }
            }
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < cfg.tol {
            break;
        }
        let step = solve_spd(&mut hess, &grad, p);
        // backtracking keeps the iteration monotone on separable data
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = w.iter().zip(&step).map(|(v, s)| v - t * s).collect();
            let f_new = objective(&cand);
            if f_new <= f_cur || t < 1e-10 {
                w = cand;
                f_cur = f_new;
                break;
            }
            t *= 0.5;
        }
    }
    let weights: Vec<f32> = w[..d]
        .iter()
        .zip(&std)
        .map(|(&v, &s)| (v / s) as f32)
        .collect();
    let bias = w[d]
        - w[..d]
            .iter()
            .zip(&mean)
            .zip(&std)
            .map(|((&v, &m), &s)| v * m / s)
            .sum::<f64>();
    Ok(FamilyProbe {
        weights,
        bias: bias as f32,
    })
}

/// Solves `A x = b` for a symmetric positive definite `n x n` matrix by
/// Cholesky factorization, overwriting `a`. A small ridge is added to
/// pivots that underflow.
fn solve_spd(a: &mut [f64], b: &[f64], n: usize) -> Vec<f64> {
    for j in 0..n {
        let mut diag = a[j * n + j];
        for k in 0..j {
            diag -= a[j * n + k] * a[j * n + k];
        }
        let diag = diag.max(1e-12).sqrt();
        a[j * n + j] = diag;
        for i in j + 1..n {
            let mut v = a[i * n + j];
            for k in 0..j {
                v -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = v / diag;
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= a[i * n + k] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= a[k * n + i] * y[k];
        }
        y[i] /= a[i * n + i];
    }
    y
}

/// Corpus indices with labels, split into training, a validation slice whose
/// positives drive attribution, and a test split for metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySplit {
    pub family: String,
    pub train: Vec<(usize, bool)>,
    pub validation: Vec<(usize, bool)>,
    pub test: Vec<(usize, bool)>,
}

impl FamilySplit {
    pub fn validation_positives(&self) -> Vec<usize> {
        self.validation
            .iter()
            .filter(|(_, l)| *l)
            .map(|(i, _)| *i)
            .collect()
    }
}

pub const MIN_FAMILY_POSITIVES: usize = 50;
pub const MAX_VALIDATION_POSITIVES: usize = 128;

/// Takes every sequence of `family` plus four times as many random others,
/// holds out 10% of each class, and divides the held-out part evenly
/// between validation (at most 128 positives) and test.
pub fn family_split(corpus: &Corpus, family: &str, seed: u64) -> Result<FamilySplit> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, s) in corpus.sequences.iter().enumerate() {
        if s.has_family(family) {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    if pos.len() < MIN_FAMILY_POSITIVES {
        return Err(Error::InvalidInput(format!(
            "family `{family}` has {} sequences, at least {MIN_FAMILY_POSITIVES} are needed",
            pos.len()
        )));
    }
    if neg.is_empty() {
        return Err(Error::InvalidInput(format!(
            "every sequence belongs to `{family}`"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    neg.truncate(4 * pos.len());

    let mut split = FamilySplit {
        family: family.to_string(),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (members, label) in [(pos, true), (neg, false)] {
        let held = ((members.len() as f64) * 0.1).ceil() as usize;
        let (heldout, train) = members.split_at(held);
        let mut n_val = held / 2;
        if label {
            n_val = n_val.min(MAX_VALIDATION_POSITIVES);
        }
        split.train.extend(train.iter().map(|&i| (i, label)));
        split
            .validation
            .extend(heldout[..n_val].iter().map(|&i| (i, label)));
        split
            .test
            .extend(heldout[n_val..].iter().map(|&i| (i, label)));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::corpus::{generate_corpus, CorpusSpec, MotifSpec};
    use crate::probes::f1;

    #[test]
    fn separable_one_dimensional_data() {
        let features: Vec<Vec<f32>> = (0..40).map(|i| vec![i as f32 - 19.5]).collect();
        let labels: Vec<bool> = (0..40).map(|i| i >= 20).collect();
        let probe = train_family_probe(&features, &labels, &LogisticConfig::default()).unwrap();
        let preds: Vec<bool> = features.iter().map(|f| probe.predict(f)).collect();
        assert_eq!(f1(&preds, &labels).unwrap(), 1.0);
    }

    #[test]
    fn single_class_errors() {
        let features = vec![vec![1.0f32]; 3];
        assert!(train_family_probe(&features, &[true; 3], &LogisticConfig::default()).is_err());
    }

    #[test]
    fn split_sizes() {
        let spec = CorpusSpec::new(600, 20, vec![MotifSpec::new("HRD", 0.2, "k")]);
        let corpus = generate_corpus(4, &spec).unwrap();
        let split = family_split(&corpus, "k", 0).unwrap();
        let n_pos = corpus
            .sequences
            .iter()
            .filter(|s| s.has_family("k"))
            .count();
        let count = |v: &[(usize, bool)]| v.iter().filter(|(_, l)| *l).count();
        assert_eq!(
            count(&split.train) + count(&split.validation) + count(&split.test),
            n_pos
        );
        let total = split.train.len() + split.validation.len() + split.test.len();
        assert_eq!(total, 5 * n_pos);
        assert!(count(&split.validation) > 0 && count(&split.test) > 0);
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.validation)
            .chain(&split.test)
            .map(|(i, _)| *i)
            .collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), total);
    }

    #[test]
    fn too_few_positives() {
        let spec = CorpusSpec::new(100, 20, vec![MotifSpec::new("HRD", 0.1, "k")]);
        let corpus = generate_corpus(4, &spec).unwrap();
        assert!(family_split(&corpus, "k", 0).is_err());
    }
}
