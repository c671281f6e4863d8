use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run, BaseContext, ReplacementMode, RunOptions};
use crate::error::{Error, Result};
use crate::lm::MaskedLm;
use crate::tensor::kernels::softmax_rows;
use crate::tensor::Tensor;
use crate::transcoder::Transcoder;

/// Reconstruction quality of one mode over an evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: ReplacementMode,
    /// Per-layer FVU pooled over all tokens of the set.
    pub fvu: Vec<f64>,
    /// Mean per-token KL divergence of the mode's logits from the base logits.
    pub logit_kl: f64,
}

/// `KL(softmax(p) || softmax(q))` averaged over rows.
pub fn mean_kl(p: &Tensor, q: &Tensor) -> f64 {
    let (r, c) = (p.rows(), p.cols());
    let pp = softmax_rows(p.data(), r, c);
    let qq = softmax_rows(q.data(), r, c);
    let mut total = 0.0f64;
    for (a, b) in pp.iter().zip(&qq) {
        if *a > 0.0 {
            total += *a as f64 * ((*a as f64).ln() - (b.max(f32::MIN_POSITIVE) as f64).ln());
        }
    }
    total / r.max(1) as f64
}

/// Evaluates every mode in `modes` on the sequences; per-layer target
/// variance uses the pooled mean of the MLP outputs over the whole set.
pub fn evaluate_modes(
    model: &MaskedLm,
    tc: &Transcoder,
    sequences: &[Vec<usize>],
    modes: &[ReplacementMode],
) -> Result<Vec<ModeReport>> {
    if sequences.is_empty() {
        return Err(Error::InvalidInput("empty evaluation set".into()));
    }
    let bases: Vec<BaseContext> = sequences
        .par_iter()
        .map(|s| BaseContext::new(model, tc, s))
        .collect::<Result<_>>()?;
    let n_layers = tc.n_layers();
    let mut denom = vec![0.0f64; n_layers];
    for (l, d) in denom.iter_mut().enumerate() {
        let cols = bases[0].trace.layers[l].y.cols();
        let mut sum = vec![0.0f64; cols];
        let mut sq = 0.0f64;
        let mut n = 0usize;
        for b in &bases {
            for row in b.trace.layers[l].y.data().chunks(cols) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v as f64;
                    sq += (v as f64).powi(2);
                }
                n += 1;
            }
        }
        *d = sq - sum.iter().map(|s| s * s).sum::<f64>() / n as f64;
        if *d <= 0.0 {
            return Err(Error::ZeroVariance(l));
        }
    }
    modes
        .iter()
        .map(|&mode| {
            let outs: Vec<(Vec<f64>, f64)> = bases
                .par_iter()
                .map(|b| {
                    let o = run(model, tc, mode, b, &b.trace.tokens, &RunOptions::default())?;
                    Ok((o.recon_error, mean_kl(&b.trace.logits, &o.logits)))
                })
                .collect::<Result<_>>()?;
            let mut err = vec![0.0f64; n_layers];
            let mut kl = 0.0;
            for (e, k) in &outs {
                for (a, b) in err.iter_mut().zip(e) {
                    *a += b;
                }
                kl += k;
            }
            Ok(ModeReport {
                mode,
                fvu: err.iter().zip(&denom).map(|(e, d)| e / d).collect(),
                logit_kl: kl / outs.len() as f64,
            })
        })
        .collect()
}

pub fn reports_csv(reports: &[ModeReport]) -> String {
    let n_layers = reports.first().map_or(0, |r| r.fvu.len());
    let mut out = String::from("mode");
    for l in 0..n_layers {
        let _ = write!(out, ",fvu_{l}");
    }
    out.push_str(",logit_kl\n");
    for r in reports {
        out.push_str(r.mode.as_str());
        for f in &r.fvu {
            let _ = write!(out, ",{f}");
        }
        let _ = writeln!(out, ",{}", r.logit_kl);
    }
    out
}
