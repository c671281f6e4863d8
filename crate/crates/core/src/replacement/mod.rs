//! Forward passes in which transcoder reconstructions stand in for the MLPs.
//!
//! * direct: every layer is encoded from the ground-truth MLP input and only
//!   the last layer's reconstruction is decoded to logits;
//! * sequential: the residual stream is rebuilt from reconstructions while the
//!   attention outputs are taken verbatim from the base pass;
//! * full: attention is recomputed from the approximate residual as well;
//! * local: attention patterns and every layernorm denominator are frozen to
//!   the base pass and the base reconstruction error is added back per layer.

mod eval;

pub use eval::{evaluate_modes, mean_kl, reports_csv, ModeReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::model::{Bound, FrozenAttention};
use crate::lm::{ActivationTrace, MaskedLm};
use crate::tensor::{Tape, Tensor, Var};
use crate::transcoder::{BoundTranscoder, Transcoder, TranscoderKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementMode {
    Direct,
    Sequential,
    Full,
    Local,
}

impl ReplacementMode {
    pub const ALL: [ReplacementMode; 4] = [
        ReplacementMode::Direct,
        ReplacementMode::Sequential,
        ReplacementMode::Full,
        ReplacementMode::Local,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReplacementMode::Direct => "direct",
            ReplacementMode::Sequential => "sequential",
            ReplacementMode::Full => "full",
            ReplacementMode::Local => "local",
        }
    }
}

impl std::str::FromStr for ReplacementMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown replacement mode `{s}`")))
    }
}

/// A latent fixed to `value` at every token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clamp {
    pub layer: usize,
    pub latent: usize,
    pub value: f32,
}

/// Edits applied to latent activations right after encoding: ablation first,
/// then clamps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Intervention {
    /// `ablated[l][i]` zeroes latent `i` of layer `l`. Empty means none.
    pub ablated: Vec<Vec<bool>>,
    pub clamps: Vec<Clamp>,
}

impl Intervention {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.clamps.is_empty() && !self.ablated.iter().flatten().any(|&a| a)
    }

    /// Zeroes exactly the listed `(layer, latent)` nodes.
    pub fn ablate(nodes: &[(usize, usize)], n_layers: usize, d_latent: usize) -> Self {
        let mut ablated = vec![vec![false; d_latent]; n_layers];
        for &(l, i) in nodes {
            ablated[l][i] = true;
        }
        Self {
            ablated,
            clamps: Vec::new(),
        }
    }

    /// Zeroes every latent except the listed ones.
    pub fn keep_only(nodes: &[(usize, usize)], n_layers: usize, d_latent: usize) -> Self {
        let mut ablated = vec![vec![true; d_latent]; n_layers];
        for &(l, i) in nodes {
            ablated[l][i] = false;
        }
        Self {
            ablated,
            clamps: Vec::new(),
        }
    }

    pub fn validate(&self, tc: &Transcoder) -> Result<()> {
        if !self.ablated.is_empty()
            && (self.ablated.len() != tc.n_layers()
                || self.ablated.iter().any(|r| r.len() != tc.d_latent()))
        {
            return Err(Error::InvalidInput(format!(
                "ablation mask must be {} x {}",
                tc.n_layers(),
                tc.d_latent()
            )));
        }
        for c in &self.clamps {
            tc.check_latent(c.layer, c.latent)?;
        }
        Ok(())
    }

    fn apply(&self, tape: &mut Tape, a: Var, l: usize) -> Result<Var> {
        let mut out = a;
        if let Some(row) = self.ablated.get(l).filter(|r| r.iter().any(|&x| x)) {
            let t = tape.value(out);
            let cols = t.cols();
            let keep: Vec<f32> = (0..t.len())
                .map(|i| if row[i % cols] { 0.0 } else { 1.0 })
                .collect();
            let keep = Tensor::new(t.shape().to_vec(), keep)?;
            out = tape.mask(out, keep)?;
        }
        let clamps: Vec<&Clamp> = self.clamps.iter().filter(|c| c.layer == l).collect();
        if !clamps.is_empty() {
            let t = tape.value(out);
            let cols = t.cols();
            let mut keep = vec![1.0f32; t.len()];
            let mut set = vec![0.0f32; t.len()];
            for c in clamps {
                for r in 0..t.rows() {
                    keep[r * cols + c.latent] = 0.0;
                    set[r * cols + c.latent] = c.value;
                }
            }
            let shape = t.shape().to_vec();
            let masked = tape.mask(out, Tensor::new(shape.clone(), keep)?)?;
            let fixed = tape.constant(Tensor::new(shape, set)?);
            out = tape.add(masked, fixed)?;
        }
        Ok(out)
    }
}

/// A base pass plus the transcoder's reconstruction of it, from which the
/// local model's frozen quantities and error terms are taken.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseContext {
    pub trace: ActivationTrace,
    /// Reconstruction of every layer from ground-truth MLP inputs.
    pub recon: Vec<Tensor>,
    /// Latents encoded from ground-truth MLP inputs.
    pub acts: Vec<Tensor>,
}

impl BaseContext {
    pub fn new(model: &MaskedLm, tc: &Transcoder, tokens: &[usize]) -> Result<Self> {
        let trace = model.forward_with_trace(tokens)?;
        Self::from_trace(tc, trace)
    }

    pub fn from_trace(tc: &Transcoder, trace: ActivationTrace) -> Result<Self> {
        if trace.n_layers() != tc.n_layers() {
            return Err(Error::InvalidInput(format!(
                "trace has {} layers, transcoder {}",
                trace.n_layers(),
                tc.n_layers()
            )));
        }
        let mut tape = Tape::new();
        let b = tc.bind(&mut tape, false);
        let mut acts = Vec::with_capacity(tc.n_layers());
        for (l, layer) in trace.layers.iter().enumerate() {
            let x = tape.constant(layer.mlp_in.clone());
            acts.push(tc.encode_on(&mut tape, &b, x, l)?.1);
        }
        let mut recon = Vec::with_capacity(tc.n_layers());
        for l in 0..tc.n_layers() {
            let y = tc.decode_on(&mut tape, &b, &acts, l)?;
            recon.push(tape.value(y).clone());
        }
        let acts = acts.iter().map(|&a| tape.value(a).clone()).collect();
        Ok(Self { trace, recon, acts })
    }

    /// Per-layer reconstruction error `y - y_hat` of the base pass.
    pub fn errors(&self) -> Result<Vec<Tensor>> {
        self.trace
            .layers
            .iter()
            .zip(&self.recon)
            .map(|(l, r)| l.y.sub(r))
            .collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    pub intervention: Option<&'a Intervention>,
    /// Adds the base reconstruction error back at every layer (always on in
    /// local mode).
    pub error_correction: bool,
    /// Additive offsets on the latents of every layer, registered as
    /// gradient-carrying leaves.
    pub deltas: Option<&'a [Tensor]>,
    /// Treats encoded latents as constants, so gradients only flow through
    /// the residual stream and not through downstream encoders.
    pub hold_latents: bool,
}

/// Tape nodes of one replacement pass.
#[derive(Debug, Clone)]
pub struct RunVars {
    /// Latents after interventions and offsets, per layer.
    pub acts: Vec<Var>,
    /// Dense pre-activations, per layer.
    pub pre: Vec<Var>,
    /// Reconstructions used in place of the MLP outputs.
    pub recon: Vec<Var>,
    pub deltas: Vec<Var>,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementOutput {
    pub logits: Tensor,
    pub acts: Vec<Tensor>,
    pub recon: Vec<Tensor>,
    /// Per-layer `||y - y_hat||^2` against the base pass.
    pub recon_error: Vec<f64>,
}

/// Builds a replacement pass on `tape`. `tokens` must equal the base tokens
/// except in local mode, where only the length must match.
#[allow(clippy::too_many_arguments)]
pub fn run_on(
    tape: &mut Tape,
    model: &MaskedLm,
    mb: &Bound,
    tc: &Transcoder,
    tb: &BoundTranscoder,
    mode: ReplacementMode,
    base: &BaseContext,
    tokens: &[usize],
    opts: &RunOptions<'_>,
) -> Result<RunVars> {
    let n_layers = tc.n_layers();
    if model.n_layers() != n_layers {
        return Err(Error::InvalidInput(format!(
            "model has {} layers, transcoder {}",
            model.n_layers(),
            n_layers
        )));
    }
    if mode == ReplacementMode::Direct && tc.kind() == TranscoderKind::PerLayer {
        return Err(Error::DirectModeRequiresClt);
    }
    let trace = &base.trace;
    if tokens.len() != trace.len() {
        return Err(Error::LengthMismatch {
            input: tokens.len(),
            base: trace.len(),
        });
    }
    if mode != ReplacementMode::Local && tokens != trace.tokens.as_slice() {
        return Err(Error::InvalidInput(format!(
            "{} mode runs on the base sequence only",
            mode.as_str()
        )));
    }
    let none = Intervention::none();
    let intervention = opts.intervention.unwrap_or(&none);
    intervention.validate(tc)?;
    let correct = opts.error_correction || mode == ReplacementMode::Local;

    let mut acts = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut recon = Vec::with_capacity(n_layers);
    let mut deltas = Vec::new();
    let mut latent = |tape: &mut Tape, x: Var, l: usize, acts: &mut Vec<Var>| -> Result<Var> {
        let (z, a) = tc.encode_on(tape, tb, x, l)?;
        pre.push(z);
        let mut a = intervention.apply(tape, a, l)?;
        if opts.hold_latents {
            a = tape.constant(tape.value(a).clone());
        }
        if let Some(ds) = opts.deltas {
            let d = tape.leaf(ds[l].clone(), true);
            deltas.push(d);
            a = tape.add(a, d)?;
        }
        acts.push(a);
        Ok(a)
    };
    // Adds the reconstruction to `x` as `x + y_base + (y_hat - y_hat_base)`
    // when correcting, which reproduces the base residual exactly whenever the
    // reconstruction is unchanged.
    let write = |tape: &mut Tape, x: Var, y_hat: Var, l: usize| -> Result<Var> {
        if correct {
            let base_hat = tape.constant(base.recon[l].clone());
            let shift = tape.sub(y_hat, base_hat)?;
            let y = tape.constant(trace.layers[l].y.clone());
            let x = tape.add(x, y)?;
            tape.add(x, shift)
        } else {
            tape.add(x, y_hat)
        }
    };

    let logits = if mode == ReplacementMode::Direct {
        for l in 0..n_layers {
            let x = tape.constant(trace.layers[l].mlp_in.clone());
            latent(tape, x, l, &mut acts)?;
        }
        for l in 0..n_layers {
            recon.push(tc.decode_on(tape, tb, &acts, l)?);
        }
        let last = n_layers - 1;
        let x = tape.constant(trace.layers[last].x.clone());
        let x_final = write(tape, x, recon[last], last)?;
        model.unembed(tape, mb, x_final, None)?.0
    } else {
        let mut x_pre = model.embed(tape, mb, tokens)?;
        for l in 0..n_layers {
            let lt = &trace.layers[l];
            let frozen = mode == ReplacementMode::Local;
            let attn = match mode {
                ReplacementMode::Sequential => tape.constant(lt.attn_out.clone()),
                _ => {
                    let f = frozen.then_some(FrozenAttention {
                        patterns: &lt.patterns,
                        sigmas: &lt.attn_sigmas,
                    });
                    model.attention(tape, mb, l, x_pre, f)?.out
                }
            };
            let x = tape.add(x_pre, attn)?;
            let sig = frozen.then_some(lt.mlp_sigmas.as_slice());
            let (mlp_in, _) = model.mlp_input(tape, mb, l, x, sig)?;
            latent(tape, mlp_in, l, &mut acts)?;
            let y_hat = tc.decode_on(tape, tb, &acts, l)?;
            recon.push(y_hat);
            x_pre = write(tape, x, y_hat, l)?;
        }
        let sig = (mode == ReplacementMode::Local).then_some(trace.final_sigmas.as_slice());
        model.unembed(tape, mb, x_pre, sig)?.0
    };
    Ok(RunVars {
        acts,
        pre,
        recon,
        deltas,
        logits,
    })
}

/// Runs one replacement pass without gradients.
pub fn run(
    model: &MaskedLm,
    tc: &Transcoder,
    mode: ReplacementMode,
    base: &BaseContext,
    tokens: &[usize],
    opts: &RunOptions<'_>,
) -> Result<ReplacementOutput> {
    let mut tape = Tape::new();
    let mb = model.bind(&mut tape, false);
    let tb = tc.bind(&mut tape, false);
    let v = run_on(&mut tape, model, &mb, tc, &tb, mode, base, tokens, opts)?;
    let recon: Vec<Tensor> = v.recon.iter().map(|&r| tape.value(r).clone()).collect();
    let recon_error = recon
        .iter()
        .zip(&base.trace.layers)
        .map(|(r, l)| r.sub(&l.y).map(|d| d.sum_sq()))
        .collect::<Result<_>>()?;
    Ok(ReplacementOutput {
        logits: tape.value(v.logits).clone(),
        acts: v.acts.iter().map(|&a| tape.value(a).clone()).collect(),
        recon,
        recon_error,
    })
}

pub fn run_direct(
    tc: &Transcoder,
    model: &MaskedLm,
    base: &BaseContext,
    ablation: &Intervention,
) -> Result<ReplacementOutput> {
    let opts = RunOptions {
        intervention: Some(ablation),
        ..RunOptions::default()
    };
    run(
        model,
        tc,
        ReplacementMode::Direct,
        base,
        &base.trace.tokens,
        &opts,
    )
}

pub fn run_sequential(
    tc: &Transcoder,
    model: &MaskedLm,
    base: &BaseContext,
    ablation: &Intervention,
) -> Result<ReplacementOutput> {
    let opts = RunOptions {
        intervention: Some(ablation),
        ..RunOptions::default()
    };
    run(
        model,
        tc,
        ReplacementMode::Sequential,
        base,
        &base.trace.tokens,
        &opts,
    )
}

pub fn run_full(
    tc: &Transcoder,
    model: &MaskedLm,
    base: &BaseContext,
    ablation: &Intervention,
) -> Result<ReplacementOutput> {
    let opts = RunOptions {
        intervention: Some(ablation),
        ..RunOptions::default()
    };
    run(
        model,
        tc,
        ReplacementMode::Full,
        base,
        &base.trace.tokens,
        &opts,
    )
}

pub fn run_local(
    tc: &Transcoder,
    model: &MaskedLm,
    base: &BaseContext,
    tokens: &[usize],
    intervention: &Intervention,
) -> Result<ReplacementOutput> {
    let opts = RunOptions {
        intervention: Some(intervention),
        ..RunOptions::default()
    };
    run(model, tc, ReplacementMode::Local, base, tokens, &opts)
}
