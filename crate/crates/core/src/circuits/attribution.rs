use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Readout;
use crate::error::{Error, Result};
use crate::lm::MaskedLm;
use crate::replacement::{run_on, BaseContext, ReplacementMode, RunOptions};
use crate::tensor::{Tape, Tensor};
use crate::transcoder::Transcoder;

/// Non-negative contribution score of every `(layer, latent)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub mode: ReplacementMode,
    pub scores: Vec<Vec<f64>>,
    pub n_sequences: usize,
}

impl Attribution {
    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    pub fn d_latent(&self) -> usize {
        self.scores.first().map_or(0, Vec::len)
    }

    /// All nodes by descending score, ties broken by `(layer, latent)`.
    pub fn ranking(&self) -> Vec<(usize, usize, f64)> {
        let mut nodes: Vec<(usize, usize, f64)> = self
            .scores
            .iter()
            .enumerate()
            .flat_map(|(l, row)| row.iter().enumerate().map(move |(i, &s)| (l, i, s)))
            .collect();
        nodes.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        nodes
    }
}

/// Sum over tokens of `|activation * gradient|` for one layer.
pub fn token_attribution(acts: &Tensor, grads: &Tensor) -> Result<Vec<f64>> {
    if acts.shape() != grads.shape() {
        return Err(Error::shape("attribution", acts.shape(), grads.shape()));
    }
    let cols = acts.cols();
    let mut out = vec![0.0f64; cols];
    for (ar, gr) in acts.data().chunks(cols).zip(grads.data().chunks(cols)) {
        for ((o, &a), &g) in out.iter_mut().zip(ar).zip(gr) {
            *o += (a as f64 * g as f64).abs();
        }
    }
    Ok(out)
}

/// Readout value and its gradient with respect to every latent of one
/// sequence under `mode`.
pub fn latent_gradients(
    model: &MaskedLm,
    tc: &Transcoder,
    readout: &dyn Readout,
    mode: ReplacementMode,
    base: &BaseContext,
) -> Result<(f32, Vec<Tensor>, Vec<Tensor>)> {
    let t = base.trace.len();
    let zeros: Vec<Tensor> = (0..tc.n_layers())
        .map(|_| Tensor::zeros(&[t, tc.d_latent()]))
        .collect();
    let mut tape = Tape::new();
    let mb = model.bind(&mut tape, false);
    let tb = tc.bind(&mut tape, false);
    let opts = RunOptions {
        deltas: Some(&zeros),
        ..RunOptions::default()
    };
    let v = run_on(
        &mut tape,
        model,
        &mb,
        tc,
        &tb,
        mode,
        base,
        &base.trace.tokens,
        &opts,
    )?;
    let last = *v.recon.last().expect("at least one layer");
    let out = readout.output_on(&mut tape, last)?;
    let grads = tape.backward(out)?;
    let acts = v.acts.iter().map(|&a| tape.value(a).clone()).collect();
    let g = v
        .deltas
        .iter()
        .zip(&zeros)
        .map(|(&d, z)| grads.get_or_zeros(d, z))
        .collect();
    Ok((tape.value(out).data()[0], acts, g))
}

/// Attribution scores summed over `bases`, with gradients of the readout
/// taken through the replacement computation of `mode`.
pub fn attribution_scores(
    model: &MaskedLm,
    tc: &Transcoder,
    readout: &dyn Readout,
    mode: ReplacementMode,
    bases: &[BaseContext],
) -> Result<Attribution> {
    if bases.is_empty() {
        return Err(Error::InvalidInput(
            "attribution needs a non-empty validation set".into(),
        ));
    }
    let per_seq: Vec<Vec<Vec<f64>>> = bases
        .par_iter()
        .map(|b| {
            let (_, acts, grads) = latent_gradients(model, tc, readout, mode, b)?;
            acts.iter()
                .zip(&grads)
                .map(|(a, g)| token_attribution(a, g))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut scores = vec![vec![0.0f64; tc.d_latent()]; tc.n_layers()];
    for seq in &per_seq {
        for (acc, layer) in scores.iter_mut().zip(seq) {
            for (a, s) in acc.iter_mut().zip(layer) {
                *a += s;
            }
        }
    }
    Ok(Attribution {
        mode,
        scores,
        n_sequences: bases.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_linear_readout() {
        let a = Tensor::row(vec![2.0, 0.0, 3.0]);
        let w = Tensor::row(vec![0.5, 10.0, -1.0]);
        assert_eq!(token_attribution(&a, &w).unwrap(), vec![1.0, 0.0, 3.0]);
    }

    #[test]
    fn ranking_breaks_ties_by_node() {
        let attr = Attribution {
            mode: ReplacementMode::Direct,
            scores: vec![vec![1.0, 3.0], vec![3.0, 0.0]],
            n_sequences: 1,
        };
        let order: Vec<(usize, usize)> = attr.ranking().iter().map(|n| (n.0, n.1)).collect();
        assert_eq!(order, vec![(0, 1), (1, 0), (0, 0), (1, 1)]);
    }
}
