//! Variance-normalized reconstruction loss plus the dead-latent auxiliary term.

use super::{BoundTranscoder, Transcoder};
use crate::error::{Error, Result};
use crate::lm::CapturedSequence;
use crate::tensor::{Tape, Tensor, Var};

/// Batch-level normalizers: per layer, the mean over tokens of the squared
/// distance of the target to its batch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub variances: Vec<f64>,
    pub n_tokens: usize,
}

pub fn batch_stats(batch: &[&CapturedSequence]) -> Result<BatchStats> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidInput("empty transcoder batch".into()))?;
    let n_layers = first.n_layers();
    let n_tokens: usize = batch.iter().map(|c| c.tokens.len()).sum();
    let mut variances = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let d = first.y[l].cols();
        let mut mean = vec![0.0f64; d];
        for c in batch {
            for row in c.y[l].data().chunks(d) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v as f64;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_tokens as f64);
        let mut ss = 0.0f64;
        for c in batch {
            for row in c.y[l].data().chunks(d) {
                ss += row
                    .iter()
                    .zip(&mean)
                    .map(|(&v, &m)| (v as f64 - m).powi(2))
                    .sum::<f64>();
            }
        }
        let var = ss / n_tokens as f64;
        if var <= 0.0 || !var.is_finite() {
            return Err(Error::ZeroVariance(l));
        }
        variances.push(var);
    }
    Ok(BatchStats {
        variances,
        n_tokens,
    })
}

/// Scalar loss nodes built on a tape.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub aux: Var,
    /// Per-layer normalized squared error (the layer's FVU contribution).
    pub layer_mse: Vec<Var>,
    /// Sparse activations per layer.
    pub acts: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub total: f32,
    pub mse: f32,
    pub aux: f32,
    pub fvu: Vec<f32>,
}

fn stack(
    chunk: &[&CapturedSequence],
    pick: impl Fn(&CapturedSequence) -> &Tensor,
) -> Result<Tensor> {
    let parts: Vec<&Tensor> = chunk.iter().map(|c| pick(c)).collect();
    Tensor::concat_rows(&parts)
}

/// Builds the loss of `chunk` (a subset of the batch described by `stats`).
///
/// Each layer's squared error is divided by `n_tokens * variance`, so chunk
/// losses add up to the loss of the whole batch. `dead[l][i]` marks latents
/// eligible for the auxiliary reconstruction of the residual error.
#[allow(clippy::too_many_arguments)]
pub fn loss_on(
    tc: &Transcoder,
    tape: &mut Tape,
    b: &BoundTranscoder,
    chunk: &[&CapturedSequence],
    stats: &BatchStats,
    dead: Option<&[Vec<bool>]>,
    alpha: f32,
    k_aux: usize,
) -> Result<LossVars> {
    let n_layers = tc.n_layers();
    if chunk.iter().any(|c| c.n_layers() != n_layers) {
        return Err(Error::InvalidInput(format!(
            "captures do not have {n_layers} layers"
        )));
    }
    let mut acts = Vec::with_capacity(n_layers);
    let mut pres = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let x = tape.constant(stack(chunk, |c| &c.mlp_in[l])?);
        let (z, a) = tc.encode_on(tape, b, x, l)?;
        pres.push(z);
        acts.push(a);
    }
    let mut layer_mse = Vec::with_capacity(n_layers);
    let mut aux_terms = Vec::new();
    for l in 0..n_layers {
        let norm = 1.0 / (stats.n_tokens as f64 * stats.variances[l]) as f32;
        let y = tape.constant(stack(chunk, |c| &c.y[l])?);
        let y_hat = tc.decode_on(tape, b, &acts, l)?;
        let err = tape.sub(y, y_hat)?;
        let sq = tape.sum_sq(err);
        layer_mse.push(tape.scale(sq, norm));

        let Some(dead) = dead else { continue };
        if !dead[l].iter().any(|&d| d) {
            continue;
        }
        let z = tape.value(pres[l]);
        let cols = z.cols();
        let mask: Vec<f32> = (0..z.len())
            .map(|i| if dead[l][i % cols] { 1.0 } else { 0.0 })
            .collect();
        let mask = Tensor::new(z.shape().to_vec(), mask)?;
        let z_dead = tape.mask(pres[l], mask)?;
        let a_aux = tape.topk(z_dead, k_aux, tc.shape.topk_mode)?;
        let dec = b.var(tc.decoders[l][l].expect("diagonal decoder"));
        let err_hat = tape.matmul(a_aux, dec)?;
        let resid = tape.sub(err, err_hat)?;
        let sq = tape.sum_sq(resid);
        aux_terms.push(tape.scale(sq, norm));
    }
    let mse = sum(tape, &layer_mse);
    let aux = if aux_terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        sum(tape, &aux_terms)
    };
    let total = if alpha == 0.0 {
        mse
    } else {
        let weighted = tape.scale(aux, alpha);
        tape.add(mse, weighted)?
    };
    Ok(LossVars {
        total,
        mse,
        aux,
        layer_mse,
        acts,
    })
}

fn sum(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut it = vars.iter().copied();
    let first = it.next().expect("non-empty sum");
    it.fold(first, |acc, v| tape.add(acc, v).expect("scalars"))
}

/// Loss of a whole batch, evaluated without gradients.
pub fn loss(
    tc: &Transcoder,
    batch: &[&CapturedSequence],
    dead: Option<&[Vec<bool>]>,
    alpha: f32,
    k_aux: usize,
) -> Result<LossParts> {
    let stats = batch_stats(batch)?;
    let mut tape = Tape::new();
    let b = tc.bind(&mut tape, false);
    let v = loss_on(tc, &mut tape, &b, batch, &stats, dead, alpha, k_aux)?;
    let scalar = |v: Var| tape.value(v).data()[0];
    Ok(LossParts {
        total: scalar(v.total),
        mse: scalar(v.mse),
        aux: scalar(v.aux),
        fvu: v.layer_mse.iter().map(|&x| scalar(x)).collect(),
    })
}
