//! Per-sequence attribution graphs under the local replacement model: the
//! most active latent nodes of each layer, virtual-weight edges between
//! them and the corpus sequences each latent responds to most.

mod export;
mod top;

pub use export::{read_viz, write_viz, ACTIVATION_FILE, SEQUENCE_FILE, TOP_FILE, WEIGHTS_FILE};
pub use top::{top_corpus_activations, CorpusHit, LatentHits};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{vocab, MaskedLm};
use crate::replacement::{run, run_on, BaseContext, Intervention, ReplacementMode, RunOptions};
use crate::tensor::{Tape, Tensor};
use crate::transcoder::Transcoder;

/// One latent at one token position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub layer: usize,
    pub latent: usize,
    pub position: usize,
    pub activation: f32,
}

/// Contribution `a_s * w_{s->t}` of one source node to one target node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionWeight {
    pub source_position: usize,
    pub target_position: usize,
    pub weight: f32,
}

/// All node-level contributions between two latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub source_layer: usize,
    pub source_latent: usize,
    pub target_layer: usize,
    pub target_latent: usize,
    /// Mean over `positions`; the weight the visualizer displays.
    pub mean_weight: f32,
    pub active_positions: usize,
    pub positions: Vec<PositionWeight>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitGraph {
    pub sequence: String,
    pub n_layers: usize,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub top_activations: Vec<LatentHits>,
}

impl CircuitGraph {
    /// Distinct `(layer, latent)` pairs among the nodes, in node order.
    pub fn latents(&self) -> Vec<(usize, usize)> {
        let mut seen = Vec::new();
        for n in &self.nodes {
            if !seen.contains(&(n.layer, n.latent)) {
                seen.push((n.layer, n.latent));
            }
        }
        seen
    }
}

fn top_by<F: Fn(usize, usize) -> f32>(
    rows: usize,
    cols: usize,
    k: usize,
    key: F,
) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize, f32)> = (0..rows)
        .flat_map(|p| (0..cols).map(move |i| (p, i)))
        .map(|(p, i)| (p, i, key(p, i)))
        .filter(|c| c.2 > 0.0)
        .collect();
    cells.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    cells.truncate(k);
    cells.into_iter().map(|(p, i, _)| (p, i)).collect()
}

/// The `per_layer` largest activation magnitudes of each layer, ties by
/// latent index then position. With `variant` activations, the `per_layer`
/// largest shifts from `acts` are added as well. Nodes carry the `acts`
/// value and are ordered by layer, position, latent.
pub fn select_nodes(
    acts: &[Tensor],
    per_layer: usize,
    variant: Option<&[Tensor]>,
) -> Result<Vec<GraphNode>> {
    if let Some(v) = variant {
        if v.len() != acts.len() || v.iter().zip(acts).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::InvalidInput(
                "variant activations do not match the base shapes".into(),
            ));
        }
    }
    let mut nodes = Vec::new();
    for (l, a) in acts.iter().enumerate() {
        let (rows, cols) = (a.rows(), a.cols());
        let at = |p: usize, i: usize| a.data()[p * cols + i];
        let mut picked = top_by(rows, cols, per_layer, |p, i| at(p, i).abs());
        if let Some(v) = variant {
            let vl = &v[l];
            for cell in top_by(rows, cols, per_layer, |p, i| {
                (vl.data()[p * cols + i] - at(p, i)).abs()
            }) {
                if !picked.contains(&cell) {
                    picked.push(cell);
                }
            }
        }
        picked.sort_unstable();
        nodes.extend(picked.into_iter().map(|(p, i)| GraphNode {
            layer: l,
            latent: i,
            position: p,
            activation: at(p, i),
        }));
    }
    Ok(nodes)
}

/// Gradient of the target node's encoder pre-activation with respect to
/// every latent of every layer, through the local replacement model with
/// latents held fixed. Entry `[l][p, i]` is the virtual weight from
/// latent `i` at position `p` of layer `l`.
pub fn target_gradients(
    model: &MaskedLm,
    tc: &Transcoder,
    base: &BaseContext,
    target: (usize, usize, usize),
    intervention: Option<&Intervention>,
) -> Result<Vec<Tensor>> {
    let (layer, latent, position) = target;
    let t = base.trace.len();
    if layer >= tc.n_layers() {
        return Err(Error::LayerOutOfRange {
            layer,
            n_layers: tc.n_layers(),
        });
    }
    if latent >= tc.d_latent() || position >= t {
        return Err(Error::InvalidInput(format!(
            "target latent {latent} at position {position} outside {t} x {}",
            tc.d_latent()
        )));
    }
    let zeros: Vec<Tensor> = (0..tc.n_layers())
        .map(|_| Tensor::zeros(&[t, tc.d_latent()]))
        .collect();
    let mut tape = Tape::new();
    let mb = model.bind(&mut tape, false);
    let tb = tc.bind(&mut tape, false);
    let opts = RunOptions {
        intervention,
        deltas: Some(&zeros),
        hold_latents: true,
        ..RunOptions::default()
    };
    let v = run_on(
        &mut tape,
        model,
        &mb,
        tc,
        &tb,
        ReplacementMode::Local,
        base,
        &base.trace.tokens,
        &opts,
    )?;
    let mut pick = Tensor::zeros(&[t, tc.d_latent()]);
    pick.data_mut()[position * tc.d_latent() + latent] = 1.0;
    let z = tape.mask(v.pre[layer], pick)?;
    let z = tape.sum_all(z);
    let grads = tape.backward(z)?;
    Ok(v.deltas
        .iter()
        .zip(&zeros)
        .map(|(&d, zero)| grads.get_or_zeros(d, zero))
        .collect())
}

/// Virtual weight `w_{s->t}` between two `(layer, latent, position)` nodes.
pub fn virtual_weight(
    model: &MaskedLm,
    tc: &Transcoder,
    base: &BaseContext,
    source: (usize, usize, usize),
    target: (usize, usize, usize),
) -> Result<f32> {
    if target.0 <= source.0 {
        return Err(Error::InvalidInput(format!(
            "edge from layer {} to layer {} does not go forward",
            source.0, target.0
        )));
    }
    let g = target_gradients(model, tc, base, target, None)?;
    let src = &g[source.0];
    if source.1 >= src.cols() || source.2 >= src.rows() {
        return Err(Error::InvalidInput(format!(
            "source latent {} at position {} out of range",
            source.1, source.2
        )));
    }
    Ok(src.data()[source.2 * src.cols() + source.1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub nodes_per_layer: usize,
    /// Hits kept per latent in the corpus search.
    pub top_hits: usize,
    /// Residues on each side of the hit position in corpus windows.
    pub window: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            nodes_per_layer: 5,
            top_hits: 10,
            window: 10,
        }
    }
}

/// Nodes and edges of one sequence. With `circuit`, latents outside it are
/// ablated before nodes are chosen; with `variant`, nodes with the largest
/// activation shift towards it are added.
pub fn build_graph(
    model: &MaskedLm,
    tc: &Transcoder,
    tokens: &[usize],
    cfg: &GraphConfig,
    circuit: Option<&[(usize, usize)]>,
    variant: Option<&[usize]>,
) -> Result<CircuitGraph> {
    let base = BaseContext::new(model, tc, tokens)?;
    let keep = circuit.map(|c| Intervention::keep_only(c, tc.n_layers(), tc.d_latent()));
    let opts = RunOptions {
        intervention: keep.as_ref(),
        ..RunOptions::default()
    };
    let acts = run(model, tc, ReplacementMode::Local, &base, tokens, &opts)?.acts;
    let variant_acts = match variant {
        Some(v) => Some(run(model, tc, ReplacementMode::Local, &base, v, &opts)?.acts),
        None => None,
    };
    let nodes = select_nodes(&acts, cfg.nodes_per_layer, variant_acts.as_deref())?;

    let targets: Vec<&GraphNode> = nodes.iter().filter(|n| n.layer > 0).collect();
    let grads: Vec<Vec<Tensor>> = targets
        .par_iter()
        .map(|t| {
            target_gradients(
                model,
                tc,
                &base,
                (t.layer, t.latent, t.position),
                keep.as_ref(),
            )
        })
        .collect::<Result<_>>()?;
    let mut edges: Vec<GraphEdge> = Vec::new();
    for (t, g) in targets.iter().zip(&grads) {
        for s in nodes.iter().filter(|s| s.layer < t.layer) {
            let w = g[s.layer].data()[s.position * tc.d_latent() + s.latent];
            let weight = s.activation * w;
            if weight == 0.0 {
                continue;
            }
            let entry = PositionWeight {
                source_position: s.position,
                target_position: t.position,
                weight,
            };
            let key = (s.layer, s.latent, t.layer, t.latent);
            match edges.iter_mut().find(|e| {
                (
                    e.source_layer,
                    e.source_latent,
                    e.target_layer,
                    e.target_latent,
                ) == key
            }) {
                Some(e) => e.positions.push(entry),
                None => edges.push(GraphEdge {
                    source_layer: s.layer,
                    source_latent: s.latent,
                    target_layer: t.layer,
                    target_latent: t.latent,
                    mean_weight: 0.0,
                    active_positions: 0,
                    positions: vec![entry],
                }),
            }
        }
    }
    for e in &mut edges {
        e.active_positions = e.positions.len();
        e.mean_weight =
            e.positions.iter().map(|p| p.weight).sum::<f32>() / e.positions.len() as f32;
    }
    edges.sort_by_key(|e| {
        (
            e.source_layer,
            e.source_latent,
            e.target_layer,
            e.target_latent,
        )
    });
    Ok(CircuitGraph {
        sequence: vocab::decode(tokens),
        n_layers: tc.n_layers(),
        nodes,
        edges,
        top_activations: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_layer_keeps_every_active_latent() {
        let acts = vec![Tensor::matrix(
            2,
            4,
            vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0],
        )];
        let nodes = select_nodes(&acts, 5, None).unwrap();
        assert_eq!(nodes.len(), 2);
        assert_eq!((nodes[0].position, nodes[0].latent), (0, 1));
        assert_eq!((nodes[1].position, nodes[1].latent), (1, 2));
    }

    #[test]
    fn top_five_by_magnitude_with_ties_by_latent_then_position() {
        // 3 positions x 4 latents
        let data = vec![
            3.0, 0.5, -4.0, 1.0, //
            3.0, 0.0, 2.0, 1.0, //
            0.0, 3.0, 0.0, 1.0,
        ];
        let acts = vec![Tensor::matrix(3, 4, data)];
        let nodes = select_nodes(&acts, 5, None).unwrap();
        let cells: Vec<(usize, usize)> = nodes.iter().map(|n| (n.position, n.latent)).collect();
        // magnitudes 4 | 3,3,3 | 2 beat the 1s and 0.5
        assert_eq!(cells, vec![(0, 0), (0, 2), (1, 0), (1, 2), (2, 1)]);
        let three = select_nodes(&acts, 3, None).unwrap();
        let cells: Vec<(usize, usize)> = three.iter().map(|n| (n.position, n.latent)).collect();
        assert_eq!(cells, vec![(0, 0), (0, 2), (1, 0)]);
        assert_eq!(three[1].activation, -4.0);
    }

    #[test]
    fn variant_shift_adds_nodes() {
        let base = vec![Tensor::matrix(1, 3, vec![5.0, 0.0, 0.0])];
        assert_eq!(select_nodes(&base, 1, Some(&base)).unwrap().len(), 1);
        let variant = vec![Tensor::matrix(1, 3, vec![5.0, 0.0, 2.0])];
        let nodes = select_nodes(&base, 1, Some(&variant)).unwrap();
        assert_eq!(
            nodes.iter().map(|n| n.latent).collect::<Vec<_>>(),
            vec![0, 2]
        );
        assert_eq!(nodes[1].activation, 0.0);
    }
}
