//! Training loop over captured MLP inputs and outputs.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{batch_stats, loss, loss_on};
use super::{Transcoder, TranscoderKind, TranscoderShape};
use crate::error::{Error, Result};
use crate::lm::CapturedSequence;
use crate::tensor::tape::TopkMode;
use crate::tensor::{Optimizer, OptimizerConfig, OptimizerKind, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub d_latent: usize,
    /// Weight of the auxiliary loss.
    pub alpha: f32,
    pub k_aux: usize,
    /// Sequences per step.
    pub batch_size: usize,
    pub lr: f32,
    pub steps: usize,
    pub clip: f32,
    pub weight_decay: f32,
    /// A latent that has not fired within this many training tokens is dead.
    pub dead_window: usize,
    pub topk_mode: TopkMode,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults for a residual stream of width `d_model`: ten-fold expansion,
    /// `k = 16` and `k_aux = d_model / 2`.
    pub fn for_width(d_model: usize) -> Self {
        Self {
            k: 16,
            d_latent: 10 * d_model,
            alpha: 1.0 / 32.0,
            k_aux: d_model / 2,
            batch_size: 16,
            lr: 2e-4,
            steps: 1000,
            clip: 1.0,
            weight_decay: 1e-5,
            dead_window: 1000,
            topk_mode: TopkMode::Magnitude,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k > self.d_latent || self.k_aux > self.d_latent {
            return Err(Error::Config(format!(
                "k = {} and k_aux = {} must not exceed d_latent = {}",
                self.k, self.k_aux, self.d_latent
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Tracks when each latent last fired, in training tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadTracker {
    last_fired: Vec<Vec<u64>>,
    tokens_seen: u64,
    window: u64,
}

impl DeadTracker {
    pub fn new(n_layers: usize, d_latent: usize, window: usize) -> Self {
        Self {
            last_fired: vec![vec![0; d_latent]; n_layers],
            tokens_seen: 0,
            window: window as u64,
        }
    }

    /// Records a batch of `tokens` in which `fired[l][i]` latents were nonzero.
    pub fn observe(&mut self, fired: &[Vec<bool>], tokens: usize) {
        self.tokens_seen += tokens as u64;
        for (last, f) in self.last_fired.iter_mut().zip(fired) {
            for (t, &hit) in last.iter_mut().zip(f) {
                if hit {
                    *t = self.tokens_seen;
                }
            }
        }
    }

    pub fn dead(&self) -> Vec<Vec<bool>> {
        self.last_fired
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&t| self.tokens_seen - t >= self.window)
                    .collect()
            })
            .collect()
    }

    pub fn dead_count(&self) -> usize {
        self.dead().iter().flatten().filter(|&&d| d).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f32,
    pub mse: f32,
    pub aux: f32,
    pub fvu: Vec<f32>,
    pub dead: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<StepMetrics>,
    /// Per-layer FVU on the evaluation captures before and after training.
    pub initial_fvu: Vec<f32>,
    pub final_fvu: Vec<f32>,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let n_layers = self.initial_fvu.len();
        let mut out = String::from("step,loss,mse,aux");
        for l in 0..n_layers {
            let _ = write!(out, ",fvu_{l}");
        }
        out.push_str(",dead\n");
        for m in &self.history {
            let _ = write!(out, "{},{},{},{}", m.step, m.loss, m.mse, m.aux);
            for f in &m.fvu {
                let _ = write!(out, ",{f}");
            }
            let _ = writeln!(out, ",{}", m.dead);
        }
        out
    }

    pub fn write_metrics_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.metrics_csv()).map_err(|e| Error::io(path, e))
    }
}

fn mean_mlp_in(batch: &[&CapturedSequence], l: usize) -> Tensor {
    let d = batch[0].mlp_in[l].cols();
    let mut acc = vec![0.0f64; d];
    let mut n = 0usize;
    for c in batch {
        for row in c.mlp_in[l].data().chunks(d) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
            n += 1;
        }
    }
    Tensor::row(acc.into_iter().map(|v| (v / n as f64) as f32).collect())
}

/// Trains a transcoder of `kind` on `captures`. `eval` (or the first batch
/// worth of captures when empty) measures FVU before and after.
pub fn train(
    kind: TranscoderKind,
    captures: &[CapturedSequence],
    eval: &[CapturedSequence],
    cfg: &TrainConfig,
) -> Result<(Transcoder, TrainReport)> {
    cfg.validate()?;
    let first = captures
        .first()
        .ok_or_else(|| Error::InvalidInput("no captured activations to train on".into()))?;
    let n_layers = first.n_layers();
    let d_model = first.y[0].cols();
    let shape = TranscoderShape {
        kind,
        n_layers,
        d_model,
        d_latent: cfg.d_latent,
        k: cfg.k,
        topk_mode: cfg.topk_mode,
    };
    let mut tc = Transcoder::new(shape, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7c);
    let sample = |rng: &mut ChaCha8Rng| -> Vec<&CapturedSequence> {
        (0..cfg.batch_size)
            .map(|_| &captures[rng.random_range(0..captures.len())])
            .collect()
    };

    let eval_refs: Vec<&CapturedSequence> = if eval.is_empty() {
        captures.iter().take(cfg.batch_size.max(1)).collect()
    } else {
        eval.iter().collect()
    };
    let mut batch = sample(&mut rng);
    for l in 0..n_layers {
        *tc.store.get_mut(tc.pre_bias[l]) = mean_mlp_in(&batch, l);
    }
    let initial_fvu = loss(&tc, &eval_refs, None, 0.0, cfg.k_aux)?.fvu;

    let mut opt = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            clip: Some(cfg.clip),
            ..OptimizerConfig::default()
        },
        &tc.store,
    );
    let mut tracker = DeadTracker::new(n_layers, cfg.d_latent, cfg.dead_window);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if step > 0 {
            batch = sample(&mut rng);
        }
        let stats = batch_stats(&batch)?;
        let dead = tracker.dead();
        let results: Vec<ChunkResult> = batch
            .par_iter()
            .map(|c| run_chunk(&tc, c, &stats, &dead, cfg))
            .collect::<Result<_>>()?;

        let mut grads: Vec<Tensor> = Vec::new();
        let mut fired = vec![vec![false; cfg.d_latent]; n_layers];
        let mut m = StepMetrics {
            step,
            loss: 0.0,
            mse: 0.0,
            aux: 0.0,
            fvu: vec![0.0; n_layers],
            dead: tracker.dead_count(),
        };
        for r in results {
            if grads.is_empty() {
                grads = r.grads;
            } else {
                for (g, x) in grads.iter_mut().zip(&r.grads) {
                    g.add_assign(x)?;
                }
            }
            for (f, rf) in fired.iter_mut().zip(&r.fired) {
                for (a, &b) in f.iter_mut().zip(rf) {
                    *a |= b;
                }
            }
            m.loss += r.loss;
            m.mse += r.mse;
            m.aux += r.aux;
            for (a, b) in m.fvu.iter_mut().zip(&r.fvu) {
                *a += b;
            }
        }
        if !m.loss.is_finite() {
            return Err(Error::Diverged { step, loss: m.loss });
        }
        tracker.observe(&fired, stats.n_tokens);
        opt.step(&mut tc.store, grads)?;
        if step % 100 == 0 {
            log::debug!(
                "{} step {step}: loss {:.4} mse {:.4} aux {:.4} dead {}",
                kind.as_str(),
                m.loss,
                m.mse,
                m.aux,
                m.dead
            );
        }
        history.push(m);
    }
    let final_fvu = loss(&tc, &eval_refs, None, 0.0, cfg.k_aux)?.fvu;
    Ok((
        tc,
        TrainReport {
            history,
            initial_fvu,
            final_fvu,
        },
    ))
}

struct ChunkResult {
    grads: Vec<Tensor>,
    fired: Vec<Vec<bool>>,
    loss: f32,
    mse: f32,
    aux: f32,
    fvu: Vec<f32>,
}

fn run_chunk(
    tc: &Transcoder,
    c: &CapturedSequence,
    stats: &super::BatchStats,
    dead: &[Vec<bool>],
    cfg: &TrainConfig,
) -> Result<ChunkResult> {
    let mut tape = Tape::new();
    let b = tc.bind(&mut tape, true);
    let v = loss_on(
        tc,
        &mut tape,
        &b,
        &[c],
        stats,
        Some(dead),
        cfg.alpha,
        cfg.k_aux,
    )?;
    let grads = tape.backward(v.total)?;
    let fired = v
        .acts
        .iter()
        .map(|&a| {
            let t = tape.value(a);
            let cols = t.cols();
            let mut f = vec![false; cols];
            for (i, &x) in t.data().iter().enumerate() {
                if x != 0.0 {
                    f[i % cols] = true;
                }
            }
            f
        })
        .collect();
    let scalar = |v| tape.value(v).data()[0];
    Ok(ChunkResult {
        grads: b
            .vars()
            .iter()
            .zip(tc.store.tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t))
            .collect(),
        fired,
        loss: scalar(v.total),
        mse: scalar(v.mse),
        aux: scalar(v.aux),
        fvu: v.layer_mse.iter().map(|&x| scalar(x)).collect(),
    })
}
