//! Convolutional fitness regressor on per-token MLP outputs.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::spearman;
use super::split::{assign_folds, fold_split, SplitScheme};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{
    find, find_scalar, read_checkpoint, scalar_entry, write_checkpoint,
};
use crate::tensor::optim::warmup_cosine;
use crate::tensor::{
    Optimizer, OptimizerConfig, OptimizerKind, ParamId, ParamStore, Tape, Tensor, Var,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessProbeConfig {
    pub kernel: usize,
    pub hidden: usize,
    pub dropout: f32,
    pub max_lr: f32,
    pub warmup: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for FitnessProbeConfig {
    fn default() -> Self {
        Self {
            kernel: 7,
            hidden: 32,
            dropout: 0.1,
            max_lr: 3e-4,
            warmup: 100,
            max_epochs: 100,
            batch_size: 16,
            patience: 10,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// Same-padded 1-D convolution, ReLU, dropout, mean over tokens and a linear
/// head. Inputs are standardized per channel and the output is rescaled to
/// the units of the training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct FitnessProbe {
    pub kernel: usize,
    pub hidden: usize,
    pub dropout: f32,
    pub store: ParamStore,
    conv_w: ParamId,
    conv_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    feature_mean: Tensor,
    feature_inv_std: Tensor,
    target_mean: f32,
    target_std: f32,
}

/// Epoch-level record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub train_mse: Vec<f64>,
    pub validation_mse: Vec<f64>,
    pub best_epoch: usize,
}

impl FitnessProbe {
    fn init(d: usize, cfg: &FitnessProbeConfig, rng: &mut impl Rng) -> Self {
        let fan_in = cfg.kernel * d;
        let mut normal = |rows: usize, cols: usize, fan: usize| {
            let dist = Normal::new(0.0f32, (2.0 / fan as f32).sqrt()).expect("finite std");
            Tensor::matrix(
                rows,
                cols,
                (0..rows * cols).map(|_| dist.sample(rng)).collect(),
            )
        };
        let conv = normal(fan_in, cfg.hidden, fan_in);
        let head = normal(cfg.hidden, 1, cfg.hidden).scale(0.5);
        let mut store = ParamStore::new();
        let conv_w = store.push("conv.weight", conv);
        let conv_b = store.push("conv.bias", Tensor::zeros(&[1, cfg.hidden]));
        let head_w = store.push("head.weight", head);
        let head_b = store.push("head.bias", Tensor::zeros(&[1, 1]));
        Self {
            kernel: cfg.kernel,
            hidden: cfg.hidden,
            dropout: cfg.dropout,
            store,
            conv_w,
            conv_b,
            head_w,
            head_b,
            feature_mean: Tensor::zeros(&[1, d]),
            feature_inv_std: Tensor::full(&[1, d], 1.0),
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn d_model(&self) -> usize {
        self.feature_mean.cols()
    }

    /// Scalar prediction for a `T x d` feature tensor `x`. A `dropout_rng`
    /// switches dropout on.
    pub fn output_on(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let t = tape.value(x).rows();
        if tape.value(x).cols() != self.d_model() {
            return Err(Error::shape(
                "fitness probe input",
                tape.value(x).shape(),
                &[t, self.d_model()],
            ));
        }
        let neg_mean = tape.constant(self.feature_mean.scale(-1.0));
        let centered = tape.add_row(x, neg_mean)?;
        let inv: Vec<f32> = self.feature_inv_std.data().repeat(t);
        let z = tape.mask(centered, Tensor::matrix(t, self.d_model(), inv))?;
        let windows = tape.unfold(z, self.kernel);
        let h = tape.matmul(windows, params[self.conv_w.0])?;
        let h = tape.add_row(h, params[self.conv_b.0])?;
        let mut h = tape.relu(h);
        if let Some(rng) = dropout_rng {
            if self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let mask: Vec<f32> = (0..t * self.hidden)
                    .map(|_| {
                        if rng.random::<f32>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                h = tape.mask(h, Tensor::matrix(t, self.hidden, mask))?;
            }
        }
        let pooled = tape.mean_rows(h);
        let out = tape.matmul(pooled, params[self.head_w.0])?;
        let out = tape.add(out, params[self.head_b.0])?;
        let out = tape.scale(out, self.target_std);
        let shift = tape.constant(Tensor::scalar(self.target_mean));
        tape.add(out, shift)
    }

    pub fn predict(&self, x: &Tensor) -> Result<f32> {
        let mut tape = Tape::new();
        let params = self.store.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.output_on(&mut tape, &params, xv, None)?;
        Ok(tape.value(out).data()[0])
    }

    pub fn predict_all(&self, xs: &[Tensor]) -> Result<Vec<f32>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, Tensor)> = self
            .store
            .entries()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        entries.push(("input.mean".into(), self.feature_mean.clone()));
        entries.push(("input.inv_std".into(), self.feature_inv_std.clone()));
        entries.push(scalar_entry("target.mean", self.target_mean));
        entries.push(scalar_entry("target.std", self.target_std));
        entries.push(scalar_entry("config.kernel", self.kernel as f32));
        entries.push(scalar_entry("config.dropout", self.dropout));
        write_checkpoint(path, entries.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let mean = find(&entries, "input.mean")?.clone();
        let conv = find(&entries, "conv.weight")?;
        let cfg = FitnessProbeConfig {
            kernel: find_scalar(&entries, "config.kernel")? as usize,
            hidden: conv.cols(),
            dropout: find_scalar(&entries, "config.dropout")?,
            ..FitnessProbeConfig::default()
        };
        let mut probe = Self::init(mean.cols(), &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        probe.store.load_from(&entries)?;
        probe.feature_mean = mean;
        probe.feature_inv_std = find(&entries, "input.inv_std")?.clone();
        probe.target_mean = find_scalar(&entries, "target.mean")?;
        probe.target_std = find_scalar(&entries, "target.std")?;
        Ok(probe)
    }
}

fn mean_sq_error(probe: &FitnessProbe, xs: &[Tensor], ys: &[f32]) -> Result<f64> {
    let preds = probe.predict_all(xs)?;
    Ok(preds
        .iter()
        .zip(ys)
        .map(|(p, y)| ((p - y) as f64).powi(2))
        .sum::<f64>()
        / ys.len().max(1) as f64)
}

/// Trains on `(train_x, train_y)` with AdamW and a warmup-cosine schedule,
/// keeping the parameters of the epoch with the lowest validation MSE.
pub fn train_fitness_probe(
    train_x: &[Tensor],
    train_y: &[f32],
    val_x: &[Tensor],
    val_y: &[f32],
    cfg: &FitnessProbeConfig,
) -> Result<(FitnessProbe, FitTrace)> {
    if train_x.is_empty() || train_x.len() != train_y.len() || val_x.len() != val_y.len() {
        return Err(Error::InvalidInput(format!(
            "fitness probe needs matching non-empty data, got {} / {} train and {} / {} validation",
            train_x.len(),
            train_y.len(),
            val_x.len(),
            val_y.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.kernel == 0 || cfg.hidden == 0 {
        return Err(Error::Config(
            "batch_size, kernel and hidden must be positive".into(),
        ));
    }
    let d = train_x[0].cols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = FitnessProbe::init(d, cfg, &mut rng);

    let mut sum = vec![0.0f64; d];
    let mut sq = vec![0.0f64; d];
    let mut n = 0usize;
    for x in train_x {
        for row in x.data().chunks(d) {
            for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(row) {
                *s += v as f64;
                *q += (v as f64).powi(2);
            }
            n += 1;
        }
    }
    let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
    let inv: Vec<f32> = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let var = (q / n as f64 - (s / n as f64).powi(2)).max(0.0);
            (1.0 / var.sqrt().max(1e-6)) as f32
        })
        .collect();
    probe.feature_mean = Tensor::row(mean);
    probe.feature_inv_std = Tensor::row(inv);
    let ty_mean = train_y.iter().map(|&y| y as f64).sum::<f64>() / train_y.len() as f64;
    let ty_var = train_y
        .iter()
        .map(|&y| (y as f64 - ty_mean).powi(2))
        .sum::<f64>()
        / train_y.len() as f64;
    probe.target_mean = ty_mean as f32;
    probe.target_std = ty_var.sqrt().max(1e-6) as f32;

    let mut opt = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            lr: cfg.max_lr,
            weight_decay: cfg.weight_decay,
            clip: Some(1.0),
            ..OptimizerConfig::default()
        },
        &probe.store,
    );
    let steps_per_epoch = train_x.len().div_ceil(cfg.batch_size);
    let total = cfg.max_epochs * steps_per_epoch;
    let mut trace = FitTrace {
        train_mse: Vec::new(),
        validation_mse: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            opt.set_lr(warmup_cosine(step, cfg.warmup, total, cfg.max_lr));
            let mut grads: Vec<Tensor> = probe
                .store
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for &i in batch {
                let mut tape = Tape::new();
                let params = probe.store.register(&mut tape, true);
                let x = tape.constant(train_x[i].clone());
                let out = probe.output_on(&mut tape, &params, x, Some(&mut rng))?;
                // squared error in standardized target units
                let target = tape.constant(Tensor::scalar(train_y[i]));
                let diff = tape.sub(out, target)?;
                let diff = tape.scale(diff, 1.0 / probe.target_std);
                let sqerr = tape.sum_sq(diff);
                let loss = tape.scale(sqerr, 1.0 / batch.len() as f32);
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::Diverged { step, loss: value });
                }
                epoch_loss += value as f64 * batch.len() as f64;
                let g = tape.backward(loss)?;
                for ((acc, &v), t) in grads.iter_mut().zip(&params).zip(probe.store.tensors()) {
                    acc.add_assign(&g.get_or_zeros(v, t))?;
                }
            }
            opt.step(&mut probe.store, grads)?;
            step += 1;
        }
        trace.train_mse.push(epoch_loss / train_x.len() as f64);
        let val = if val_x.is_empty() {
            trace.train_mse[epoch]
        } else {
            mean_sq_error(&probe, val_x, val_y)?
        };
        trace.validation_mse.push(val);
        if best.as_ref().is_none_or(|(b, _)| val < *b) {
            best = Some((val, probe.store.clone()));
            trace.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::debug!("fitness probe stopped early at epoch {epoch}");
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        probe.store = store;
    }
    Ok((probe, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub scheme: SplitScheme,
    pub fold: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub best_epoch: usize,
    pub validation_mse: f64,
    pub test_spearman: f64,
}

/// Five-fold cross-validation under `scheme`; folds train in parallel.
/// `positions` gives each example's first mutated position.
pub fn cross_validate(
    features: &[Tensor],
    scores: &[f32],
    positions: &[usize],
    seq_len: usize,
    scheme: SplitScheme,
    n_folds: usize,
    cfg: &FitnessProbeConfig,
) -> Result<Vec<(FitnessProbe, FoldReport)>> {
    if features.len() != scores.len() || features.len() != positions.len() {
        return Err(Error::InvalidInput(format!(
            "{} feature tensors, {} scores and {} positions",
            features.len(),
            scores.len(),
            positions.len()
        )));
    }
    let folds = assign_folds(scheme, positions, seq_len, n_folds, cfg.seed)?;
    (0..n_folds)
        .into_par_iter()
        .map(|f| {
            let split = fold_split(&folds, n_folds, f);
            if split.train.is_empty() || split.test.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "{scheme} fold {f} has an empty train or test set"
                )));
            }
            let pick_x = |ix: &[usize]| ix.iter().map(|&i| features[i].clone()).collect::<Vec<_>>();
            let pick_y = |ix: &[usize]| ix.iter().map(|&i| scores[i]).collect::<Vec<_>>();
            let fold_cfg = FitnessProbeConfig {
                seed: cfg.seed.wrapping_add(f as u64),
                ..cfg.clone()
            };
            let (probe, trace) = train_fitness_probe(
                &pick_x(&split.train),
                &pick_y(&split.train),
                &pick_x(&split.validation),
                &pick_y(&split.validation),
                &fold_cfg,
            )?;
            let preds = probe.predict_all(&pick_x(&split.test))?;
            let truth = pick_y(&split.test);
            let rho = spearman(
                &preds.iter().map(|&p| p as f64).collect::<Vec<_>>(),
                &truth.iter().map(|&y| y as f64).collect::<Vec<_>>(),
            )?;
            let report = FoldReport {
                scheme,
                fold: f,
                n_train: split.train.len(),
                n_validation: split.validation.len(),
                n_test: split.test.len(),
                best_epoch: trace.best_epoch,
                validation_mse: trace.validation_mse[trace.best_epoch],
                test_spearman: rho,
            };
            Ok((probe, report))
        })
        .collect()
}

pub fn fold_reports_csv(reports: &[FoldReport]) -> String {
    let mut out = String::from(
        "scheme,fold,n_train,n_validation,n_test,best_epoch,validation_mse,test_spearman\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.scheme,
            r.fold,
            r.n_train,
            r.n_validation,
            r.n_test,
            r.best_epoch,
            r.validation_mse,
            r.test_spearman
        );
    }
    out
}
