use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lm::{vocab, MaskedLm, Sequence};
use crate::replacement::BaseContext;
use crate::transcoder::Transcoder;

/// A corpus sequence where a latent fires, at its strongest position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHit {
    pub sequence_id: String,
    pub position: usize,
    pub activation: f32,
    /// Residues around `position`; `window_start` is the index of its first.
    pub window: String,
    pub window_start: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentHits {
    pub layer: usize,
    pub latent: usize,
    pub hits: Vec<CorpusHit>,
}

/// For each `(layer, latent)`, the `n` corpus sequences with the largest
/// maximum activation, ties by corpus order. Sequences where the latent
/// never fires are skipped.
pub fn top_corpus_activations(
    model: &MaskedLm,
    tc: &Transcoder,
    corpus: &[Sequence],
    latents: &[(usize, usize)],
    n: usize,
    window: usize,
) -> Result<Vec<LatentHits>> {
    for &(layer, latent) in latents {
        tc.check_latent(layer, latent)?;
    }
    // per sequence, per requested latent: (max activation, position)
    let maxima: Vec<Vec<(f32, usize)>> = corpus
        .par_iter()
        .map(|s| {
            let base = BaseContext::new(model, tc, &s.tokens)?;
            Ok(latents
                .iter()
                .map(|&(l, i)| {
                    let a = &base.acts[l];
                    (0..a.rows())
                        .map(|p| (a.data()[p * a.cols() + i], p))
                        .fold((0.0f32, 0), |best, c| if c.0 > best.0 { c } else { best })
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(latents
        .iter()
        .enumerate()
        .map(|(k, &(layer, latent))| {
            let mut ranked: Vec<(usize, f32, usize)> = maxima
                .iter()
                .enumerate()
                .filter(|(_, m)| m[k].0 > 0.0)
                .map(|(s, m)| (s, m[k].0, m[k].1))
                .collect();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(n);
            let hits = ranked
                .into_iter()
                .map(|(s, activation, position)| {
                    let tokens = &corpus[s].tokens;
                    let start = position.saturating_sub(window);
                    let end = (position + window + 1).min(tokens.len());
                    CorpusHit {
                        sequence_id: corpus[s].id.clone(),
                        position,
                        activation,
                        window: vocab::decode(&tokens[start..end]),
                        window_start: start,
                    }
                })
                .collect();
            LatentHits {
                layer,
                latent,
                hits,
            }
        })
        .collect())
}
