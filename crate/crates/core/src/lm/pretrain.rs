//! Masked-token pretraining.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::LmConfig;
use super::corpus::Corpus;
use super::model::MaskedLm;
use super::vocab::{MASK, N_AMINO};
use crate::error::{Error, Result};
use crate::tensor::optim::warmup_cosine;
use crate::tensor::{Optimizer, OptimizerConfig, OptimizerKind, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup: usize,
    pub weight_decay: f32,
    pub mask_rate: f32,
    /// Fraction of the corpus held out for evaluation.
    pub heldout_fraction: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 1e-3,
            warmup: 100,
            weight_decay: 0.01,
            mask_rate: 0.15,
            heldout_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Cross-entropy of the uniform distribution, `ln(vocab_size)`.
    pub uniform_loss: f32,
    pub initial_heldout_loss: f32,
    pub final_heldout_loss: f32,
    /// Training loss per step.
    pub losses: Vec<f32>,
}

/// A masked copy of a sequence and the positions to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub inputs: Vec<usize>,
    /// `(position, original token)` pairs.
    pub targets: Vec<(usize, usize)>,
}

/// Selects each position with probability `rate` (at least one), then
/// replaces it by the mask token 80% of the time, a random residue 10% and
/// leaves it unchanged otherwise.
pub fn mask_tokens(tokens: &[usize], rate: f32, rng: &mut impl Rng) -> MaskedExample {
    let mut chosen: Vec<usize> = (0..tokens.len())
        .filter(|_| rng.random::<f32>() < rate)
        .collect();
    if chosen.is_empty() && !tokens.is_empty() {
        chosen.push(rng.random_range(0..tokens.len()));
    }
    let mut inputs = tokens.to_vec();
    for &p in &chosen {
        let u: f32 = rng.random();
        if u < 0.8 {
            inputs[p] = MASK;
        } else if u < 0.9 {
            inputs[p] = rng.random_range(0..N_AMINO);
        }
    }
    MaskedExample {
        inputs,
        targets: chosen.into_iter().map(|p| (p, tokens[p])).collect(),
    }
}

/// Mean masked-token cross-entropy, weighting every target equally.
pub fn masked_loss(model: &MaskedLm, examples: &[MaskedExample]) -> Result<f32> {
    let parts: Vec<(f64, usize)> = examples
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let b = model.bind(&mut tape, false);
            let (logits, _) = model.forward_on(&mut tape, &b, &ex.inputs)?;
            let ce = tape.cross_entropy(logits, &ex.targets)?;
            Ok((
                tape.value(ce).data()[0] as f64 * ex.targets.len() as f64,
                ex.targets.len(),
            ))
        })
        .collect::<Result<_>>()?;
    let (sum, count) = parts
        .into_iter()
        .fold((0.0, 0), |(s, c), (x, n)| (s + x, c + n));
    Ok((sum / count.max(1) as f64) as f32)
}

/// Splits a corpus into training and held-out index sets deterministically.
pub fn heldout_split(n: usize, fraction: f32, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    let n_held = ((n as f32 * fraction).ceil() as usize).min(n.saturating_sub(1));
    let held = idx.split_off(n - n_held);
    (idx, held)
}

pub fn pretrain_lm(
    config: LmConfig,
    corpus: &Corpus,
    train: &PretrainConfig,
) -> Result<(MaskedLm, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("pretraining corpus is empty".into()));
    }
    corpus.validate(config.vocab_size, config.max_len)?;
    let mut model = MaskedLm::new(config, train.seed)?;
    let (train_idx, held_idx) = heldout_split(corpus.len(), train.heldout_fraction, train.seed);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xe7a1);
    let eval_set: Vec<MaskedExample> = held_idx
        .iter()
        .map(|&i| mask_tokens(&corpus.sequences[i].tokens, train.mask_rate, &mut eval_rng))
        .collect();
    let uniform_loss = (model.config.vocab_size as f32).ln();
    let initial_heldout_loss = masked_loss(&model, &eval_set)?;

    let mut opt = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            lr: train.lr,
            weight_decay: train.weight_decay,
            ..OptimizerConfig::default()
        },
        &model.store,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch: Vec<MaskedExample> = (0..train.batch_size)
            .map(|_| {
                let i = train_idx[rng.random_range(0..train_idx.len())];
                mask_tokens(&corpus.sequences[i].tokens, train.mask_rate, &mut rng)
            })
            .collect();
        let total: usize = batch.iter().map(|e| e.targets.len()).sum();
        let per_seq: Vec<(f32, Vec<Tensor>)> = batch
            .par_iter()
            .map(|ex| {
                let mut tape = Tape::new();
                let b = model.bind(&mut tape, true);
                let (logits, _) = model.forward_on(&mut tape, &b, &ex.inputs)?;
                let ce = tape.cross_entropy(logits, &ex.targets)?;
                let weight = ex.targets.len() as f32 / total as f32;
                let scaled = tape.scale(ce, weight);
                let grads = tape.backward(scaled)?;
                let g = b
                    .vars()
                    .iter()
                    .zip(model.store.tensors())
                    .map(|(&v, t)| grads.get_or_zeros(v, t))
                    .collect();
                Ok((tape.value(scaled).data()[0], g))
            })
            .collect::<Result<_>>()?;
        let mut loss = 0.0f32;
        let mut sum: Option<Vec<Tensor>> = None;
        for (l, g) in per_seq {
            loss += l;
            match sum.as_mut() {
                None => sum = Some(g),
                Some(acc) => {
                    for (a, x) in acc.iter_mut().zip(&g) {
                        a.add_assign(x)?;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        opt.set_lr(warmup_cosine(step, train.warmup, train.steps, train.lr));
        opt.step(&mut model.store, sum.unwrap_or_default())?;
        if step % 100 == 0 {
            log::debug!("pretrain step {step}: loss {loss:.4}");
        }
    }
    let final_heldout_loss = masked_loss(&model, &eval_set)?;
    if !final_heldout_loss.is_finite() {
        return Err(Error::Diverged {
            step: train.steps,
            loss: final_heldout_loss,
        });
    }
    model.freeze();
    Ok((
        model,
        PretrainReport {
            uniform_loss,
            initial_heldout_loss,
            final_heldout_loss,
            losses,
        },
    ))
}
