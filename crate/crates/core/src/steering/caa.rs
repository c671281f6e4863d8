use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{amino_argmax, cap_by_key};
use crate::error::{Error, Result};
use crate::lm::vocab::N_AMINO;
use crate::lm::{MaskedLm, Mutation, VariantLibrary};
use crate::tensor::{Tape, Tensor};

/// How variants are split into the contrasted positive and negative sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastRule {
    /// Top tenth of fitness against the bottom tenth.
    Extremes,
    /// Functional variants against the rest.
    Functional,
}

/// Indices of the positive and negative variants under `rule`.
pub fn contrast_sets(library: &VariantLibrary, rule: ContrastRule) -> (Vec<usize>, Vec<usize>) {
    let v = &library.variants;
    match rule {
        ContrastRule::Extremes => {
            let mut order: Vec<usize> = (0..v.len()).collect();
            order.sort_by(|&a, &b| v[b].fitness.total_cmp(&v[a].fitness).then(a.cmp(&b)));
            let tenth = v.len().div_ceil(10);
            let negatives = order[v.len() - tenth..].to_vec();
            order.truncate(tenth);
            (order, negatives)
        }
        ContrastRule::Functional => (0..v.len()).partition(|&i| v[i].functional),
    }
}

/// Mean over `sequences` of the token-averaged residual after every layer.
pub fn residual_means(model: &MaskedLm, sequences: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
    if sequences.is_empty() {
        return Err(Error::InvalidInput("contrast set is empty".into()));
    }
    let pooled: Vec<Vec<Vec<f32>>> = sequences
        .par_iter()
        .map(|s| {
            let trace = model.forward_with_trace(s)?;
            trace
                .layers
                .iter()
                .map(|l| Ok(l.x.add(&l.y)?.mean_rows().into_data()))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let d = model.config.d_model;
    let mut acc = vec![vec![0.0f64; d]; model.n_layers()];
    for seq in &pooled {
        for (a, layer) in acc.iter_mut().zip(seq) {
            for (x, &v) in a.iter_mut().zip(layer) {
                *x += v as f64;
            }
        }
    }
    let n = sequences.len() as f64;
    for a in &mut acc {
        a.iter_mut().for_each(|x| *x /= n);
    }
    Ok(acc)
}

/// Per-layer steering vector: positive mean residual minus negative mean.
pub fn caa_vector(
    model: &MaskedLm,
    positives: &[Vec<usize>],
    negatives: &[Vec<usize>],
) -> Result<Vec<Vec<f32>>> {
    let p = residual_means(model, positives)?;
    let n = residual_means(model, negatives)?;
    Ok(p.iter()
        .zip(&n)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) as f32).collect())
        .collect())
}

/// Adds `alpha * v` to every row of `h`, then rescales each row back to its
/// original norm.
pub fn steer_rows(h: &Tensor, v: &[f32], alpha: f32) -> Tensor {
    let cols = h.cols();
    let mut out = Vec::with_capacity(h.data().len());
    for row in h.data().chunks(cols) {
        let shifted: Vec<f32> = row.iter().zip(v).map(|(x, d)| x + alpha * d).collect();
        let before = row.iter().map(|x| x * x).sum::<f32>().sqrt();
        let after = shifted.iter().map(|x| x * x).sum::<f32>().sqrt();
        let ratio = if after > 0.0 { before / after } else { 1.0 };
        out.extend(shifted.iter().map(|x| x * ratio));
    }
    Tensor::matrix(h.rows(), cols, out)
}

/// Logits of `tokens` with the steering vector added to the residual stream
/// after every layer and each token's residual kept at its original norm.
pub fn caa_logits(
    model: &MaskedLm,
    tokens: &[usize],
    vector: &[Vec<f32>],
    alpha: f32,
) -> Result<Tensor> {
    let d = model.config.d_model;
    if vector.len() != model.n_layers() || vector.iter().any(|v| v.len() != d) {
        return Err(Error::InvalidInput(format!(
            "steering vector must have {} layers of width {d}",
            model.n_layers()
        )));
    }
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, false);
    let mut x_pre = model.embed(&mut tape, &b, tokens)?;
    for (l, v) in vector.iter().enumerate() {
        let attn = model.attention(&mut tape, &b, l, x_pre, None)?;
        let x = tape.add(x_pre, attn.out)?;
        let (mlp_in, _) = model.mlp_input(&mut tape, &b, l, x, None)?;
        let y = model.mlp(&mut tape, &b, l, mlp_in)?;
        let h = tape.add(x, y)?;
        let steered = steer_rows(tape.value(h), v, alpha);
        x_pre = tape.constant(steered);
    }
    let (logits, _) = model.unembed(&mut tape, &b, x_pre, None)?;
    Ok(tape.value(logits).clone())
}

/// Every position whose amino-acid argmax differs from the wildtype, capped
/// at `cap` by the probability of that residue.
pub fn caa_mutations(wildtype: &[usize], logits: &Tensor, cap: usize) -> Result<Vec<Mutation>> {
    if logits.rows() != wildtype.len() || logits.cols() < N_AMINO {
        return Err(Error::shape(
            "steering logits",
            &[wildtype.len(), N_AMINO],
            logits.shape(),
        ));
    }
    let mut candidates = Vec::new();
    for (p, &wt) in wildtype.iter().enumerate() {
        let row = &logits.row_slice(p)[..N_AMINO];
        let (to, max) = amino_argmax(row);
        if to == wt {
            continue;
        }
        let z: f32 = row.iter().map(|x| (x - max).exp()).sum();
        candidates.push((
            Mutation {
                position: p,
                from: wt,
                to,
            },
            1.0 / z,
        ));
    }
    Ok(cap_by_key(candidates, cap))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renormalization_keeps_row_norms() {
        let h = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 4.0]);
        let s = steer_rows(&h, &[0.3, 1.0, -2.0], 2.5);
        for r in 0..2 {
            let n0: f32 = h.row_slice(r).iter().map(|x| x * x).sum::<f32>().sqrt();
            let n1: f32 = s.row_slice(r).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n0 - n1).abs() < 1e-5);
        }
        assert_eq!(steer_rows(&h, &[0.3, 1.0, -2.0], 0.0), h);
        assert_eq!(steer_rows(&h, &[0.0; 3], 4.0), h);
    }

    #[test]
    fn mutations_follow_argmax_and_probability_cap() {
        let mut data = vec![0.0f32; 3 * 25];
        data[0] = 5.0; // position 0 keeps wildtype residue 0
        data[25 + 2] = 1.0; // weak preference for residue 2
        data[50 + 3] = 6.0; // strong preference for residue 3
        let logits = Tensor::matrix(3, 25, data);
        let all = caa_mutations(&[0, 0, 0], &logits, 5).unwrap();
        assert_eq!(
            all.iter().map(|m| (m.position, m.to)).collect::<Vec<_>>(),
            vec![(1, 2), (2, 3)]
        );
        let one = caa_mutations(&[0, 0, 0], &logits, 1).unwrap();
        assert_eq!(one[0].position, 2);
    }
}
