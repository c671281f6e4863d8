//! Sparse transcoders mapping each MLP input to the MLP output through a
//! TopK latent bottleneck.
//!
//! A cross-layer transcoder decodes layer `l` from the latents of every layer
//! up to `l`; a per-layer transcoder only from layer `l` itself. Both encode
//! identically.

mod loss;
mod train;

pub use loss::{batch_stats, loss, loss_on, BatchStats, LossParts};
pub use train::{train, DeadTracker, StepMetrics, TrainConfig, TrainReport};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::{find_scalar, read_checkpoint, scalar_entry, write_checkpoint};
use crate::tensor::tape::{topk_mask_matrix, TopkMode};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TranscoderKind {
    CrossLayer,
    PerLayer,
}

impl TranscoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TranscoderKind::CrossLayer => "clt",
            TranscoderKind::PerLayer => "plt",
        }
    }
}

/// Shape and sparsity of a transcoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscoderShape {
    pub kind: TranscoderKind,
    pub n_layers: usize,
    pub d_model: usize,
    pub d_latent: usize,
    pub k: usize,
    pub topk_mode: TopkMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transcoder {
    pub shape: TranscoderShape,
    pub store: ParamStore,
    /// `d_latent x d_model`; row `i` reads latent `i`.
    pub encoder: Vec<ParamId>,
    /// `1 x d_latent`.
    pub encoder_bias: Vec<ParamId>,
    /// `1 x d_model`, subtracted before encoding and added after decoding.
    pub pre_bias: Vec<ParamId>,
    /// `decoders[src][tgt]`, `d_latent x d_model`; row `i` is the vector latent
    /// `i` of layer `src` writes into layer `tgt`.
    pub decoders: Vec<Vec<Option<ParamId>>>,
}

/// Latent activations of one sequence at every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentActivations {
    /// Sparse activations, `tokens x d_latent`.
    pub acts: Vec<Tensor>,
    /// Dense pre-activations.
    pub pre: Vec<Tensor>,
}

/// Transcoder parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundTranscoder {
    vars: Vec<Var>,
}

impl BoundTranscoder {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Transcoder {
    /// Encoder rows are Gaussian with std `1/sqrt(d_model)`; each decoder
    /// starts as its source encoder divided by the number of decoders writing
    /// into its target layer. Biases start at zero.
    pub fn new(shape: TranscoderShape, seed: u64) -> Result<Self> {
        if shape.n_layers == 0 || shape.d_model == 0 || shape.d_latent == 0 {
            return Err(Error::Config(format!("degenerate transcoder {shape:?}")));
        }
        if shape.k > shape.d_latent {
            return Err(Error::Config(format!(
                "k = {} exceeds d_latent = {}",
                shape.k, shape.d_latent
            )));
        }
        let (n, d, dl) = (shape.n_layers, shape.d_model, shape.d_latent);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 1.0 / (d as f32).sqrt()).expect("valid std");
        let mut store = ParamStore::new();
        let mut encoder = Vec::with_capacity(n);
        let mut encoder_bias = Vec::with_capacity(n);
        let mut pre_bias = Vec::with_capacity(n);
        let mut enc_values = Vec::with_capacity(n);
        for l in 0..n {
            let w = Tensor::matrix(
                dl,
                d,
                (0..dl * d).map(|_| normal.sample(&mut rng)).collect(),
            );
            enc_values.push(w.clone());
            encoder.push(store.push(format!("layers.{l}.encoder.weight"), w));
            encoder_bias
                .push(store.push(format!("layers.{l}.encoder.bias"), Tensor::zeros(&[1, dl])));
            pre_bias.push(store.push(format!("layers.{l}.pre_bias"), Tensor::zeros(&[1, d])));
        }
        let mut decoders = vec![vec![None; n]; n];
        for (src, row) in decoders.iter_mut().enumerate() {
            for (tgt, slot) in row.iter_mut().enumerate() {
                let contributors = match shape.kind {
                    TranscoderKind::CrossLayer if src <= tgt => tgt + 1,
                    TranscoderKind::PerLayer if src == tgt => 1,
                    _ => continue,
                };
                let w = enc_values[src].scale(1.0 / contributors as f32);
                *slot = Some(store.push(format!("decoders.{src}.{tgt}.weight"), w));
            }
        }
        Ok(Self {
            shape,
            store,
            encoder,
            encoder_bias,
            pre_bias,
            decoders,
        })
    }

    pub fn kind(&self) -> TranscoderKind {
        self.shape.kind
    }

    pub fn n_layers(&self) -> usize {
        self.shape.n_layers
    }

    pub fn d_latent(&self) -> usize {
        self.shape.d_latent
    }

    pub fn n_decoders(&self) -> usize {
        self.decoders
            .iter()
            .flatten()
            .filter(|d| d.is_some())
            .count()
    }

    pub fn n_params(&self) -> usize {
        self.store.numel()
    }

    pub fn decoder(&self, src: usize, tgt: usize) -> Option<&Tensor> {
        self.decoders
            .get(src)
            .and_then(|r| r.get(tgt))
            .copied()
            .flatten()
            .map(|id| self.store.get(id))
    }

    /// Source layers whose latents are decoded into layer `tgt`.
    pub fn sources(&self, tgt: usize) -> Vec<usize> {
        (0..self.n_layers())
            .filter(|&s| self.decoders[s][tgt].is_some())
            .collect()
    }

    pub fn check_layer(&self, l: usize) -> Result<()> {
        if l >= self.n_layers() {
            return Err(Error::LayerOutOfRange {
                layer: l,
                n_layers: self.n_layers(),
            });
        }
        Ok(())
    }

    pub fn check_latent(&self, l: usize, latent: usize) -> Result<()> {
        self.check_layer(l)?;
        if latent >= self.d_latent() {
            return Err(Error::LatentOutOfRange {
                layer: l,
                latent,
                d_latent: self.d_latent(),
            });
        }
        Ok(())
    }

    /// Dense pre-activations `(x - pre_bias) W_enc^T + b_enc`, one row per token.
    pub fn pre_activations(&self, x: &Tensor, l: usize) -> Result<Tensor> {
        self.check_layer(l)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let z = self.pre_activations_on(&mut tape, &b, xv, l)?;
        Ok(tape.value(z).clone())
    }

    pub fn encode(&self, x: &Tensor, l: usize) -> Result<Tensor> {
        let z = self.pre_activations(x, l)?;
        let mask = topk_mask_matrix(&z, self.shape.k, self.shape.topk_mode);
        z.zip_map(&mask, |a, m| a * m)
    }

    /// Encodes every layer's MLP input.
    pub fn encode_all(&self, mlp_in: &[Tensor]) -> Result<LatentActivations> {
        let mut acts = Vec::with_capacity(mlp_in.len());
        let mut pre = Vec::with_capacity(mlp_in.len());
        for (l, x) in mlp_in.iter().enumerate() {
            let z = self.pre_activations(x, l)?;
            let mask = topk_mask_matrix(&z, self.shape.k, self.shape.topk_mode);
            acts.push(z.zip_map(&mask, |a, m| a * m)?);
            pre.push(z);
        }
        Ok(LatentActivations { acts, pre })
    }

    /// Reconstruction of layer `l` from `acts[0..]`; a cross-layer transcoder
    /// needs every layer up to `l`, a per-layer one only `acts[l]`.
    pub fn decode(&self, acts: &[Tensor], l: usize) -> Result<Tensor> {
        self.check_layer(l)?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let mut vars = Vec::with_capacity(acts.len());
        for a in acts {
            vars.push(tape.constant(a.clone()));
        }
        let y = self.decode_on(&mut tape, &b, &vars, l)?;
        Ok(tape.value(y).clone())
    }

    /// Per-layer decode from `a^l` alone. Errors for cross-layer transcoders
    /// whose target has earlier sources.
    pub fn decode_single(&self, a: &Tensor, l: usize) -> Result<Tensor> {
        self.check_layer(l)?;
        if self.sources(l) != [l] {
            return Err(Error::MissingActivations(self.sources(l)[0]));
        }
        let mut acts = vec![Tensor::zeros(a.shape()); l + 1];
        acts[l] = a.clone();
        self.decode(&acts, l)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundTranscoder {
        BoundTranscoder {
            vars: self.store.register(tape, trainable),
        }
    }

    pub fn pre_activations_on(
        &self,
        tape: &mut Tape,
        b: &BoundTranscoder,
        x: Var,
        l: usize,
    ) -> Result<Var> {
        self.check_layer(l)?;
        let neg_bias = tape.scale(b.var(self.pre_bias[l]), -1.0);
        let centered = tape.add_row(x, neg_bias)?;
        let z = tape.matmul_bt(centered, b.var(self.encoder[l]))?;
        tape.add_row(z, b.var(self.encoder_bias[l]))
    }

    /// Returns `(pre-activations, sparse activations)`.
    pub fn encode_on(
        &self,
        tape: &mut Tape,
        b: &BoundTranscoder,
        x: Var,
        l: usize,
    ) -> Result<(Var, Var)> {
        let z = self.pre_activations_on(tape, b, x, l)?;
        let a = tape.topk(z, self.shape.k, self.shape.topk_mode)?;
        Ok((z, a))
    }

    /// Reconstruction of layer `l` on a tape from per-layer activation vars.
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        b: &BoundTranscoder,
        acts: &[Var],
        l: usize,
    ) -> Result<Var> {
        self.check_layer(l)?;
        let mut total: Option<Var> = None;
        for src in self.sources(l) {
            let a = *acts.get(src).ok_or(Error::MissingActivations(src))?;
            let dec = b.var(self.decoders[src][l].expect("source has decoder"));
            let part = tape.matmul(a, dec)?;
            total = Some(match total {
                Some(t) => tape.add(t, part)?,
                None => part,
            });
        }
        let total = total.expect("every layer decodes its own latents");
        tape.add_row(total, b.var(self.pre_bias[l]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = &self.shape;
        let mut entries = vec![
            scalar_entry(
                "config.kind",
                match s.kind {
                    TranscoderKind::CrossLayer => 0.0,
                    TranscoderKind::PerLayer => 1.0,
                },
            ),
            scalar_entry("config.n_layers", s.n_layers as f32),
            scalar_entry("config.d_model", s.d_model as f32),
            scalar_entry("config.d_latent", s.d_latent as f32),
            scalar_entry("config.k", s.k as f32),
            scalar_entry(
                "config.topk_signed",
                (s.topk_mode == TopkMode::Signed) as u8 as f32,
            ),
        ];
        entries.extend(
            self.store
                .entries()
                .map(|(n, t)| (n.to_string(), t.clone())),
        );
        write_checkpoint(path, entries.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = read_checkpoint(path)?;
        let get = |n: &str| find_scalar(&entries, n).map(|v| v as usize);
        let kind = match get("config.kind")? {
            0 => TranscoderKind::CrossLayer,
            1 => TranscoderKind::PerLayer,
            other => {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("unknown transcoder kind {other}"),
                })
            }
        };
        let shape = TranscoderShape {
            kind,
            n_layers: get("config.n_layers")?,
            d_model: get("config.d_model")?,
            d_latent: get("config.d_latent")?,
            k: get("config.k")?,
            topk_mode: if get("config.topk_signed")? == 1 {
                TopkMode::Signed
            } else {
                TopkMode::Magnitude
            },
        };
        let mut tc = Self::new(shape, 0)?;
        tc.store.load_from(&entries)?;
        Ok(tc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(kind: TranscoderKind) -> TranscoderShape {
        TranscoderShape {
            kind,
            n_layers: 3,
            d_model: 4,
            d_latent: 8,
            k: 2,
            topk_mode: TopkMode::Magnitude,
        }
    }

    fn set(tc: &mut Transcoder, id: ParamId, t: Tensor) {
        *tc.store.get_mut(id) = t;
    }

    #[test]
    fn decoder_family_sizes() {
        let clt = Transcoder::new(shape(TranscoderKind::CrossLayer), 0).unwrap();
        assert_eq!(clt.n_decoders(), 6);
        let plt = Transcoder::new(shape(TranscoderKind::PerLayer), 0).unwrap();
        assert_eq!(plt.n_decoders(), 3);
        let per_layer = 8 * 4 + 8 + 4;
        assert_eq!(clt.n_params(), 3 * per_layer + 6 * 8 * 4);
        assert_eq!(plt.n_params(), 3 * per_layer + 3 * 8 * 4);
    }

    #[test]
    fn identity_encoder_keeps_largest_magnitude() {
        let s = TranscoderShape {
            kind: TranscoderKind::CrossLayer,
            n_layers: 2,
            d_model: 2,
            d_latent: 2,
            k: 1,
            topk_mode: TopkMode::Magnitude,
        };
        let mut tc = Transcoder::new(s, 0).unwrap();
        let id = tc.encoder[0];
        set(&mut tc, id, Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let a = tc.encode(&Tensor::row(vec![0.5, -1.0]), 0).unwrap();
        assert_eq!(a.data(), &[0.0, -1.0]);
    }

    #[test]
    fn input_at_pre_bias_encodes_to_zero() {
        let mut tc = Transcoder::new(shape(TranscoderKind::CrossLayer), 1).unwrap();
        let id = tc.pre_bias[1];
        set(&mut tc, id, Tensor::row(vec![0.3, -0.2, 1.0, 0.5]));
        let a = tc
            .encode(&Tensor::row(vec![0.3, -0.2, 1.0, 0.5]), 1)
            .unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_latents_decode_to_pre_bias() {
        let mut tc = Transcoder::new(shape(TranscoderKind::CrossLayer), 2).unwrap();
        let id = tc.pre_bias[2];
        set(&mut tc, id, Tensor::row(vec![1.0, 2.0, 3.0, 4.0]));
        let zeros = vec![Tensor::zeros(&[1, 8]); 3];
        assert_eq!(tc.decode(&zeros, 2).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn one_hot_decodes_to_decoder_row() {
        let tc = Transcoder::new(shape(TranscoderKind::CrossLayer), 3).unwrap();
        let mut acts = vec![Tensor::zeros(&[1, 8]); 2];
        acts[0].data_mut()[5] = 1.0;
        let y = tc.decode(&acts, 1).unwrap();
        let expected = tc.decoder(0, 1).unwrap().row_slice(5).to_vec();
        let bias = tc.store.get(tc.pre_bias[1]).data().to_vec();
        for ((&v, &e), &b) in y.data().iter().zip(&expected).zip(&bias) {
            assert_eq!(v, e + b);
        }
    }

    #[test]
    fn missing_earlier_layers_error() {
        let tc = Transcoder::new(shape(TranscoderKind::CrossLayer), 4).unwrap();
        let acts = vec![Tensor::zeros(&[1, 8]); 1];
        assert!(matches!(
            tc.decode(&acts, 2),
            Err(Error::MissingActivations(1))
        ));
        assert!(matches!(
            tc.encode(&Tensor::zeros(&[1, 4]), 3),
            Err(Error::LayerOutOfRange { .. })
        ));
    }

    #[test]
    fn per_layer_ignores_earlier_latents() {
        let tc = Transcoder::new(shape(TranscoderKind::PerLayer), 5).unwrap();
        let mut acts = vec![Tensor::zeros(&[1, 8]); 3];
        acts[2].data_mut()[1] = 0.7;
        let base = tc.decode(&acts, 2).unwrap();
        acts[0].data_mut()[3] = 5.0;
        acts[1].data_mut()[0] = -2.0;
        assert_eq!(tc.decode(&acts, 2).unwrap(), base);
        assert_eq!(tc.decode_single(&acts[2], 2).unwrap(), base);
    }

    #[test]
    fn checkpoint_round_trip() {
        let tc = Transcoder::new(shape(TranscoderKind::PerLayer), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plt.pmck");
        tc.save(&path).unwrap();
        assert_eq!(Transcoder::load(&path).unwrap(), tc);
    }
}
