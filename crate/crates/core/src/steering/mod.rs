//! Steering a wildtype sequence by clamping circuit latents, plus the
//! contrastive-activation and random-mutation baselines and the harness that
//! scores proposed variants.

mod caa;
mod experiment;
mod report;

pub use caa::{
    caa_logits, caa_mutations, caa_vector, contrast_sets, residual_means, steer_rows, ContrastRule,
};
pub use experiment::{
    caa_variants, circuit_variants, last_layer_outputs, random_variants, steering_table,
    train_evaluator, FitnessTask, FoldCircuit, MethodSummary, SteeredVariant, SteeringTable,
};
pub use report::{
    evaluate_variants, summarize, Evaluator, Selection, Summary, Truth, VariantRecord,
    VariantReport,
};

use rand::seq::index::sample_weighted;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::circuits::CircuitNode;
use crate::error::{Error, Result};
use crate::lm::vocab::N_AMINO;
use crate::lm::{MaskedLm, Mutation};
use crate::replacement::{run, BaseContext, Clamp, Intervention, ReplacementMode, RunOptions};
use crate::tensor::Tensor;
use crate::transcoder::Transcoder;

/// Reference activation that the clamp multiplier scales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClampScale {
    /// Largest activation of any latent at any token of the layer.
    Layer,
    /// Largest activation of the targeted latent alone.
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    /// Latents sampled from the circuit per trial.
    pub n_latents: Vec<usize>,
    pub alphas: Vec<f32>,
    pub scale: ClampScale,
    /// Positions whose logit cosine with the base pass falls below this
    /// become mutation candidates.
    pub cosine_gate: f32,
    pub max_mutations: usize,
    pub trials: usize,
    pub mode: ReplacementMode,
    /// Variants kept after ranking by the discovery probe.
    pub top_n: usize,
    /// Contrast-set draws for the activation-addition baseline.
    pub caa_trials: usize,
    /// Share of each contrast set drawn per trial.
    pub caa_fraction: f64,
    pub seed: u64,
}

impl Default for SteeringSpec {
    fn default() -> Self {
        Self {
            n_latents: vec![4, 8, 16],
            alphas: alpha_grid(0.1, 5.0, 25),
            scale: ClampScale::Layer,
            cosine_gate: 0.98,
            max_mutations: 5,
            trials: 5,
            mode: ReplacementMode::Direct,
            top_n: 50,
            caa_trials: 10,
            caa_fraction: 0.1,
            seed: 0,
        }
    }
}

/// `steps` evenly spaced values from `start` to `end` inclusive.
pub fn alpha_grid(start: f32, end: f32, steps: usize) -> Vec<f32> {
    match steps {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..steps)
            .map(|i| start + (end - start) * i as f32 / (steps - 1) as f32)
            .collect(),
    }
}

/// Clamp values `alpha * max` for each `(layer, latent)` target, with the
/// maximum taken over `acts[layer]` as selected by `scale`.
pub fn clamp_values(
    acts: &[Tensor],
    targets: &[(usize, usize)],
    alpha: f32,
    scale: ClampScale,
) -> Result<Vec<Clamp>> {
    targets
        .iter()
        .map(|&(layer, latent)| {
            let a = acts.get(layer).ok_or(Error::LayerOutOfRange {
                layer,
                n_layers: acts.len(),
            })?;
            let d_latent = a.cols();
            if latent >= d_latent {
                return Err(Error::LatentOutOfRange {
                    layer,
                    latent,
                    d_latent,
                });
            }
            let max = match scale {
                ClampScale::Layer => a.data().iter().copied().fold(0.0f32, f32::max),
                ClampScale::Latent => a
                    .data()
                    .chunks(d_latent)
                    .map(|r| r[latent])
                    .fold(0.0f32, f32::max),
            };
            Ok(Clamp {
                layer,
                latent,
                value: alpha * max,
            })
        })
        .collect()
}

/// `acts` with every targeted latent set to its clamp value at every token.
pub fn clamp_activations(
    acts: &[Tensor],
    targets: &[(usize, usize)],
    alpha: f32,
    scale: ClampScale,
) -> Result<Vec<Tensor>> {
    let clamps = clamp_values(acts, targets, alpha, scale)?;
    let mut out = acts.to_vec();
    for c in clamps {
        let t = &mut out[c.layer];
        let cols = t.cols();
        for row in t.data_mut().chunks_mut(cols) {
            row[c.latent] = c.value;
        }
    }
    Ok(out)
}

/// Logits of the replacement pass with `clamps` applied and the base
/// reconstruction error added back, so an empty clamp set reproduces the
/// base logits.
pub fn steer_and_decode(
    model: &MaskedLm,
    tc: &Transcoder,
    base: &BaseContext,
    clamps: &[Clamp],
    mode: ReplacementMode,
) -> Result<Tensor> {
    let intervention = Intervention {
        ablated: Vec::new(),
        clamps: clamps.to_vec(),
    };
    let opts = RunOptions {
        intervention: Some(&intervention),
        error_correction: true,
        ..RunOptions::default()
    };
    Ok(run(model, tc, mode, base, &base.trace.tokens, &opts)?.logits)
}

fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

/// Index and value of the largest amino-acid logit; ties go to the lower id.
pub(crate) fn amino_argmax(row: &[f32]) -> (usize, f32) {
    row[..N_AMINO]
        .iter()
        .copied()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
}

fn check_logits(wildtype: &[usize], logits: &Tensor) -> Result<()> {
    if logits.rows() != wildtype.len() || logits.cols() < N_AMINO {
        return Err(Error::shape(
            "steering logits",
            &[wildtype.len(), N_AMINO],
            logits.shape(),
        ));
    }
    Ok(())
}

/// Keeps the `cap` candidates with the largest key, ties by position, and
/// returns them in position order.
pub(crate) fn cap_by_key(mut candidates: Vec<(Mutation, f32)>, cap: usize) -> Vec<Mutation> {
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.position.cmp(&b.0.position)));
    candidates.truncate(cap);
    let mut out: Vec<Mutation> = candidates.into_iter().map(|c| c.0).collect();
    out.sort_by_key(|m| m.position);
    out
}

/// Mutations proposed by a steered pass. Positions whose amino-acid logits
/// have cosine below `gate` with the base pass take their steered argmax
/// residue; a position whose argmax is the wildtype residue yields nothing.
/// Beyond `cap` candidates, those with the largest steered maxima win.
pub fn select_mutations(
    wildtype: &[usize],
    base_logits: &Tensor,
    steered_logits: &Tensor,
    cap: usize,
    gate: f32,
) -> Result<Vec<Mutation>> {
    check_logits(wildtype, base_logits)?;
    check_logits(wildtype, steered_logits)?;
    let mut candidates = Vec::new();
    for (p, &wt) in wildtype.iter().enumerate() {
        let b = &base_logits.row_slice(p)[..N_AMINO];
        let s = steered_logits.row_slice(p);
        if cosine(b, &s[..N_AMINO]) >= gate {
            continue;
        }
        let (to, value) = amino_argmax(s);
        if to != wt {
            candidates.push((
                Mutation {
                    position: p,
                    from: wt,
                    to,
                },
                value,
            ));
        }
    }
    Ok(cap_by_key(candidates, cap))
}

/// Draws `count` distinct circuit nodes with probability proportional to
/// their attribution, one at a time without replacement.
pub fn sample_circuit_latents(
    nodes: &[CircuitNode],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, usize)>> {
    if nodes.iter().any(|n| !n.score.is_finite() || n.score < 0.0) {
        return Err(Error::InvalidInput(
            "attribution scores must be finite and non-negative".into(),
        ));
    }
    if nodes.iter().all(|n| n.score == 0.0) {
        return Err(Error::InvalidInput(
            "attribution is zero for every circuit node".into(),
        ));
    }
    let picked = sample_weighted(rng, nodes.len(), |i| nodes[i].score, count).map_err(|e| {
        Error::InvalidInput(format!(
            "cannot draw {count} of {} circuit nodes: {e}",
            nodes.len()
        ))
    })?;
    Ok(picked
        .into_iter()
        .map(|i| (nodes[i].layer, nodes[i].latent))
        .collect())
}

/// A random variant of `wildtype` with `count` substitutions at distinct
/// uniformly chosen positions, each to a uniformly chosen other residue.
pub fn random_mutations(wildtype: &[usize], count: usize, rng: &mut impl Rng) -> Vec<Mutation> {
    let positions = rand::seq::index::sample(rng, wildtype.len(), count.min(wildtype.len()));
    let mut out: Vec<Mutation> = positions
        .into_iter()
        .map(|p| {
            let from = wildtype[p];
            let mut to = rng.random_range(0..N_AMINO - 1);
            if to >= from {
                to += 1;
            }
            Mutation {
                position: p,
                from,
                to,
            }
        })
        .collect();
    out.sort_by_key(|m| m.position);
    out
}

/// One random variant per steered variant, matching its mutation count.
pub fn random_baseline(
    wildtype: &[usize],
    steered: &[Vec<Mutation>],
    rng: &mut impl Rng,
) -> Vec<Vec<Mutation>> {
    steered
        .iter()
        .map(|m| random_mutations(wildtype, m.len(), rng))
        .collect()
}
