//! Pre-layernorm bidirectional transformer with a masked-token head.
//!
//! The forward pass is exposed as composable blocks on a [`Tape`] so that the
//! replacement models can splice transcoder reconstructions in between them
//! and freeze attention patterns and layernorm denominators.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::LmConfig;
use super::trace::{ActivationTrace, LayerTrace};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::{find_scalar, read_checkpoint, scalar_entry, write_checkpoint};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub head_out: Vec<ParamId>,
    pub attn_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub mlp_in_w: ParamId,
    pub mlp_in_b: ParamId,
    pub mlp_out_w: ParamId,
    pub mlp_out_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub unembed_w: ParamId,
    pub unembed_b: ParamId,
}

/// The model's parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Attention quantities held fixed in frozen forward passes.
#[derive(Debug, Clone, Copy)]
pub struct FrozenAttention<'a> {
    pub patterns: &'a [Tensor],
    pub sigmas: &'a [f32],
}

#[derive(Debug, Clone)]
pub struct AttentionOut {
    pub out: Var,
    pub patterns: Vec<Tensor>,
    pub sigmas: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedLm {
    pub config: LmConfig,
    pub store: ParamStore,
    pub params: LmParams,
    frozen: bool,
}

impl MaskedLm {
    /// Fresh model with small Gaussian weights (std 0.02), unit layernorm
    /// gains and zero biases.
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let mut gauss = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| normal.sample(&mut rng)).collect())
        };
        let (d, dh, dm, v) = (
            config.d_model,
            config.d_head(),
            config.d_mlp,
            config.vocab_size,
        );
        let mut store = ParamStore::new();
        let token_embed = store.push("embed.tokens", gauss(v, d));
        let pos_embed = store.push("embed.positions", gauss(config.max_len, d));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let ln1_gain = store.push(p("ln1.gain"), Tensor::full(&[1, d], 1.0));
            let ln1_bias = store.push(p("ln1.bias"), Tensor::zeros(&[1, d]));
            let mut query = Vec::new();
            let mut key = Vec::new();
            let mut value = Vec::new();
            let mut head_out = Vec::new();
            for h in 0..config.n_heads {
                query.push(store.push(p(&format!("attn.{h}.query")), gauss(d, dh)));
                key.push(store.push(p(&format!("attn.{h}.key")), gauss(d, dh)));
                value.push(store.push(p(&format!("attn.{h}.value")), gauss(d, dh)));
                head_out.push(store.push(p(&format!("attn.{h}.out")), gauss(dh, d)));
            }
            let attn_bias = store.push(p("attn.bias"), Tensor::zeros(&[1, d]));
            let ln2_gain = store.push(p("ln2.gain"), Tensor::full(&[1, d], 1.0));
            let ln2_bias = store.push(p("ln2.bias"), Tensor::zeros(&[1, d]));
            let mlp_in_w = store.push(p("mlp.in.weight"), gauss(d, dm));
            let mlp_in_b = store.push(p("mlp.in.bias"), Tensor::zeros(&[1, dm]));
            let mlp_out_w = store.push(p("mlp.out.weight"), gauss(dm, d));
            let mlp_out_b = store.push(p("mlp.out.bias"), Tensor::zeros(&[1, d]));
            layers.push(LayerParams {
                ln1_gain,
                ln1_bias,
                query,
                key,
                value,
                head_out,
                attn_bias,
                ln2_gain,
                ln2_bias,
                mlp_in_w,
                mlp_in_b,
                mlp_out_w,
                mlp_out_b,
            });
        }
        let final_gain = store.push("final_ln.gain", Tensor::full(&[1, d], 1.0));
        let final_bias = store.push("final_ln.bias", Tensor::zeros(&[1, d]));
        let unembed_w = store.push("unembed.weight", gauss(d, v));
        let unembed_b = store.push("unembed.bias", Tensor::zeros(&[1, v]));
        Ok(Self {
            config,
            store,
            params: LmParams {
                token_embed,
                pos_embed,
                layers,
                final_gain,
                final_bias,
                unembed_w,
                unembed_b,
            },
            frozen: false,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Registers the parameters on `tape`; they only require gradients while
    /// the model is not frozen and `trainable` is set.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self.store.register(tape, trainable && !self.frozen),
        }
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max_len: self.config.max_len,
            });
        }
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty sequence".into()));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token plus position embeddings: the residual entering layer 0.
    pub fn embed(&self, tape: &mut Tape, b: &Bound, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let tok = tape.gather(b.var(self.params.token_embed), tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather(b.var(self.params.pos_embed), &positions)?;
        tape.add(tok, pos)
    }

    /// Multi-head self-attention on the layernormed residual, including the
    /// output bias. With `frozen`, patterns and the layernorm denominators are
    /// constants taken from it.
    pub fn attention(
        &self,
        tape: &mut Tape,
        b: &Bound,
        l: usize,
        x_pre: Var,
        frozen: Option<FrozenAttention<'_>>,
    ) -> Result<AttentionOut> {
        let p = &self.params.layers[l];
        let (gain, bias) = (b.var(p.ln1_gain), b.var(p.ln1_bias));
        let (xn, sigmas) = match frozen {
            Some(f) => (
                tape.layernorm_frozen(x_pre, gain, bias, f.sigmas)?,
                f.sigmas.to_vec(),
            ),
            None => tape.layernorm(x_pre, gain, bias, self.config.ln_eps)?,
        };
        let scale = 1.0 / (self.config.d_head() as f32).sqrt();
        let mut patterns = Vec::with_capacity(self.config.n_heads);
        let mut total: Option<Var> = None;
        for h in 0..self.config.n_heads {
            let pattern = match frozen {
                Some(f) => {
                    let t = f.patterns[h].clone();
                    if t.rows() != tape.value(x_pre).rows() {
                        return Err(Error::shape(
                            "frozen attention",
                            tape.value(x_pre).shape(),
                            t.shape(),
                        ));
                    }
                    tape.constant(t)
                }
                None => {
                    let q = tape.matmul(xn, b.var(p.query[h]))?;
                    let k = tape.matmul(xn, b.var(p.key[h]))?;
                    let scores = tape.matmul_bt(q, k)?;
                    let scores = tape.scale(scores, scale);
                    tape.softmax_rows(scores)
                }
            };
            patterns.push(tape.value(pattern).clone());
            let v = tape.matmul(xn, b.var(p.value[h]))?;
            let mixed = tape.matmul(pattern, v)?;
            let out = tape.matmul(mixed, b.var(p.head_out[h]))?;
            total = Some(match total {
                Some(t) => tape.add(t, out)?,
                None => out,
            });
        }
        let total = total.expect("at least one head");
        let out = tape.add_row(total, b.var(p.attn_bias))?;
        Ok(AttentionOut {
            out,
            patterns,
            sigmas,
        })
    }

    /// The layernorm in front of the MLP; its output is the transcoder input.
    pub fn mlp_input(
        &self,
        tape: &mut Tape,
        b: &Bound,
        l: usize,
        x: Var,
        frozen_sigmas: Option<&[f32]>,
    ) -> Result<(Var, Vec<f32>)> {
        let p = &self.params.layers[l];
        let (gain, bias) = (b.var(p.ln2_gain), b.var(p.ln2_bias));
        match frozen_sigmas {
            Some(s) => Ok((tape.layernorm_frozen(x, gain, bias, s)?, s.to_vec())),
            None => tape.layernorm(x, gain, bias, self.config.ln_eps),
        }
    }

    /// Two-layer GELU MLP applied to the layernormed residual.
    pub fn mlp(&self, tape: &mut Tape, b: &Bound, l: usize, mlp_in: Var) -> Result<Var> {
        let p = &self.params.layers[l];
        let h = tape.matmul(mlp_in, b.var(p.mlp_in_w))?;
        let h = tape.add_row(h, b.var(p.mlp_in_b))?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, b.var(p.mlp_out_w))?;
        tape.add_row(o, b.var(p.mlp_out_b))
    }

    /// Final layernorm and output head.
    pub fn unembed(
        &self,
        tape: &mut Tape,
        b: &Bound,
        x_final: Var,
        frozen_sigmas: Option<&[f32]>,
    ) -> Result<(Var, Vec<f32>)> {
        let (gain, bias) = (b.var(self.params.final_gain), b.var(self.params.final_bias));
        let (xn, sigmas) = match frozen_sigmas {
            Some(s) => (tape.layernorm_frozen(x_final, gain, bias, s)?, s.to_vec()),
            None => tape.layernorm(x_final, gain, bias, self.config.ln_eps)?,
        };
        let logits = tape.matmul(xn, b.var(self.params.unembed_w))?;
        let logits = tape.add_row(logits, b.var(self.params.unembed_b))?;
        Ok((logits, sigmas))
    }

    /// Runs the full model on `tape`, returning the logits var and the trace.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        b: &Bound,
        tokens: &[usize],
    ) -> Result<(Var, ActivationTrace)> {
        let mut x_pre = self.embed(tape, b, tokens)?;
        let mut layers = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let attn = self.attention(tape, b, l, x_pre, None)?;
            let x = tape.add(x_pre, attn.out)?;
            let (mlp_in, mlp_sigmas) = self.mlp_input(tape, b, l, x, None)?;
            let y = self.mlp(tape, b, l, mlp_in)?;
            let next = tape.add(x, y)?;
            layers.push(LayerTrace {
                x_pre: tape.value(x_pre).clone(),
                attn_sigmas: attn.sigmas,
                patterns: attn.patterns,
                attn_out: tape.value(attn.out).clone(),
                x: tape.value(x).clone(),
                mlp_in: tape.value(mlp_in).clone(),
                mlp_sigmas,
                y: tape.value(y).clone(),
            });
            x_pre = next;
        }
        let (logits, final_sigmas) = self.unembed(tape, b, x_pre, None)?;
        let trace = ActivationTrace {
            tokens: tokens.to_vec(),
            layers,
            x_final: tape.value(x_pre).clone(),
            final_sigmas,
            logits: tape.value(logits).clone(),
        };
        Ok((logits, trace))
    }

    pub fn forward_with_trace(&self, tokens: &[usize]) -> Result<ActivationTrace> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        Ok(self.forward_on(&mut tape, &b, tokens)?.1)
    }

    /// Logits only. Uses the same computation as the traced pass.
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        Ok(self.forward_with_trace(tokens)?.logits)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = &self.config;
        let mut entries: Vec<(String, Tensor)> = vec![
            scalar_entry("config.n_layers", c.n_layers as f32),
            scalar_entry("config.d_model", c.d_model as f32),
            scalar_entry("config.n_heads", c.n_heads as f32),
            scalar_entry("config.d_mlp", c.d_mlp as f32),
            scalar_entry("config.vocab_size", c.vocab_size as f32),
            scalar_entry("config.max_len", c.max_len as f32),
            scalar_entry("config.ln_eps", c.ln_eps),
        ];
        entries.extend(
            self.store
                .entries()
                .map(|(n, t)| (n.to_string(), t.clone())),
        );
        write_checkpoint(path, entries.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Loads a checkpoint; the loaded model is frozen.
    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let get = |n: &str| find_scalar(&entries, n).map(|v| v as usize);
        let config = LmConfig {
            n_layers: get("config.n_layers")?,
            d_model: get("config.d_model")?,
            n_heads: get("config.n_heads")?,
            d_mlp: get("config.d_mlp")?,
            vocab_size: get("config.vocab_size")?,
            max_len: get("config.max_len")?,
            pre_layernorm: true,
            ln_eps: find_scalar(&entries, "config.ln_eps")?,
        };
        let mut model = Self::new(config, 0)?;
        model.store.load_from(&entries)?;
        model.freeze();
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> MaskedLm {
        let config = LmConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            max_len: 12,
            ..LmConfig::default()
        };
        MaskedLm::new(config, 3).unwrap()
    }

    #[test]
    fn trace_bookkeeping_is_exact() {
        let m = tiny();
        let t = m.forward_with_trace(&[0, 5, 7, 19, 2]).unwrap();
        let (attn, mlp, rows) = t.invariant_violations();
        assert_eq!(attn, 0.0);
        assert_eq!(mlp, 0.0);
        assert!(rows < 1e-5);
        assert_eq!(t.logits.shape(), &[5, 25]);
    }

    #[test]
    fn traced_and_plain_logits_agree() {
        let m = tiny();
        let tokens = [3, 3, 1, 0, 8];
        assert_eq!(
            m.forward(&tokens).unwrap(),
            m.forward_with_trace(&tokens).unwrap().logits
        );
    }

    #[test]
    fn overlong_sequence_errors() {
        let m = tiny();
        assert!(matches!(
            m.forward(&[0; 13]),
            Err(Error::SequenceTooLong {
                len: 13,
                max_len: 12
            })
        ));
    }

    #[test]
    fn frozen_pass_with_own_statistics_matches() {
        let m = tiny();
        let tokens = [4, 2, 9, 9, 1, 0];
        let t = m.forward_with_trace(&tokens).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let mut x_pre = m.embed(&mut tape, &b, &tokens).unwrap();
        for (l, lt) in t.layers.iter().enumerate() {
            let f = FrozenAttention {
                patterns: &lt.patterns,
                sigmas: &lt.attn_sigmas,
            };
            let a = m.attention(&mut tape, &b, l, x_pre, Some(f)).unwrap();
            let x = tape.add(x_pre, a.out).unwrap();
            let (mi, _) = m
                .mlp_input(&mut tape, &b, l, x, Some(&lt.mlp_sigmas))
                .unwrap();
            let y = m.mlp(&mut tape, &b, l, mi).unwrap();
            x_pre = tape.add(x, y).unwrap();
        }
        let (logits, _) = m
            .unembed(&mut tape, &b, x_pre, Some(&t.final_sigmas))
            .unwrap();
        assert!(tape.value(logits).max_abs_diff(&t.logits) < 1e-5);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.pmck");
        m.save(&path).unwrap();
        let loaded = MaskedLm::load(&path).unwrap();
        assert!(loaded.is_frozen());
        assert_eq!(loaded.store, m.store);
        assert_eq!(loaded.config, m.config);
    }
}
