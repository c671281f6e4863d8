//! Recorded activations of one forward pass, and the on-disk capture used to
//! train transcoders.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::Tensor;

/// Activations of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Residual entering the block.
    pub x_pre: Tensor,
    /// Denominators of the attention input layernorm, one per token.
    pub attn_sigmas: Vec<f32>,
    /// Attention pattern per head, `tokens x tokens`, rows sum to one.
    pub patterns: Vec<Tensor>,
    /// Summed output of all heads including the output bias.
    pub attn_out: Tensor,
    /// Residual after attention, `x_pre + attn_out`.
    pub x: Tensor,
    /// Layernormed residual actually consumed by the MLP.
    pub mlp_in: Tensor,
    pub mlp_sigmas: Vec<f32>,
    /// MLP output.
    pub y: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub tokens: Vec<usize>,
    pub layers: Vec<LayerTrace>,
    /// Residual after the last block, `x + y` of the final layer.
    pub x_final: Tensor,
    pub final_sigmas: Vec<f32>,
    pub logits: Tensor,
}

impl ActivationTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Residual entering layer `l`, or the final residual for `l == n_layers`.
    pub fn residual_pre(&self, l: usize) -> &Tensor {
        if l == self.layers.len() {
            &self.x_final
        } else {
            &self.layers[l].x_pre
        }
    }

    /// Largest violation of the residual bookkeeping identities and of the
    /// attention row sums. Exact bookkeeping gives zero for the first two.
    pub fn invariant_violations(&self) -> (f32, f32, f32) {
        let mut attn = 0.0f32;
        let mut mlp = 0.0f32;
        let mut rows = 0.0f32;
        for (l, layer) in self.layers.iter().enumerate() {
            let x = layer.x_pre.add(&layer.attn_out).expect("trace shapes");
            attn = attn.max(x.max_abs_diff(&layer.x));
            let next = layer.x.add(&layer.y).expect("trace shapes");
            mlp = mlp.max(next.max_abs_diff(self.residual_pre(l + 1)));
            for p in &layer.patterns {
                for r in 0..p.rows() {
                    let s: f64 = p.row_slice(r).iter().map(|&v| v as f64).sum();
                    rows = rows.max((s - 1.0).abs() as f32);
                }
            }
        }
        (attn, mlp, rows)
    }
}

/// The parts of a trace a transcoder trains on: MLP inputs and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedSequence {
    pub tokens: Vec<usize>,
    pub mlp_in: Vec<Tensor>,
    pub y: Vec<Tensor>,
}

impl From<&ActivationTrace> for CapturedSequence {
    fn from(t: &ActivationTrace) -> Self {
        Self {
            tokens: t.tokens.clone(),
            mlp_in: t.layers.iter().map(|l| l.mlp_in.clone()).collect(),
            y: t.layers.iter().map(|l| l.y.clone()).collect(),
        }
    }
}

impl CapturedSequence {
    pub fn n_layers(&self) -> usize {
        self.y.len()
    }
}

/// Writes captured activations in the checkpoint record format.
pub fn write_captures(path: &Path, captures: &[CapturedSequence]) -> Result<()> {
    let mut entries = Vec::new();
    for (i, c) in captures.iter().enumerate() {
        entries.push((
            format!("seq.{i}.tokens"),
            Tensor::new(
                vec![c.tokens.len()],
                c.tokens.iter().map(|&t| t as f32).collect(),
            )?,
        ));
        for l in 0..c.n_layers() {
            entries.push((format!("seq.{i}.layer.{l}.mlp_in"), c.mlp_in[l].clone()));
            entries.push((format!("seq.{i}.layer.{l}.y"), c.y[l].clone()));
        }
    }
    write_checkpoint(path, entries.iter().map(|(n, t)| (n.as_str(), t)))
}

pub fn read_captures(path: &Path) -> Result<Vec<CapturedSequence>> {
    let entries = read_checkpoint(path)?;
    let mut out: Vec<CapturedSequence> = Vec::new();
    let bad = |name: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("unexpected record `{name}`"),
    };
    for (name, t) in entries {
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["seq", i, "tokens"] => {
                let i: usize = i.parse().map_err(|_| bad(&name))?;
                if i != out.len() {
                    return Err(bad(&name));
                }
                out.push(CapturedSequence {
                    tokens: t.data().iter().map(|&v| v as usize).collect(),
                    mlp_in: Vec::new(),
                    y: Vec::new(),
                });
            }
            ["seq", i, "layer", l, kind] => {
                let i: usize = i.parse().map_err(|_| bad(&name))?;
                let l: usize = l.parse().map_err(|_| bad(&name))?;
                if i + 1 != out.len() {
                    return Err(bad(&name));
                }
                let c = out.last_mut().ok_or_else(|| bad(&name))?;
                let list = match *kind {
                    "mlp_in" => &mut c.mlp_in,
                    "y" => &mut c.y,
                    _ => return Err(bad(&name)),
                };
                if list.len() != l {
                    return Err(bad(&name));
                }
                list.push(t);
            }
            _ => return Err(bad(&name)),
        }
    }
    Ok(out)
}
