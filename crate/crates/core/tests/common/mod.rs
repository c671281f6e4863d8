#![allow(dead_code, clippy::needless_range_loop)]

use pmech_core::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect(),
    )
}

/// Relative error between two gradient tensors, measured on their norms.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a.sum_sq().sqrt().max(b.sum_sq().sqrt()).max(1e-6);
    diff / scale
}

/// Central finite differences of a scalar function of several tensors,
/// evaluated in f64 from f32 forward passes.
pub fn finite_difference(
    inputs: &[Tensor],
    step: f32,
    f: &dyn Fn(&[Tensor]) -> f32,
) -> Vec<Tensor> {
    inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut g = vec![0.0f32; t.len()];
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += step;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= step;
                g[j] = ((f(&plus) as f64 - f(&minus) as f64) / (2.0 * step as f64)) as f32;
            }
            Tensor::new(t.shape().to_vec(), g).unwrap()
        })
        .collect()
}

/// Analytic gradients of `build` with every input registered as a parameter.
pub fn analytic(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    vars.iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t))
        .collect()
}

/// Evaluates `build` forward only.
pub fn evaluate(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f32 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).data()[0]
}

/// Largest relative error over all inputs between analytic and FD gradients.
pub fn gradcheck(inputs: &[Tensor], step: f32, build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let a = analytic(inputs, build);
    let n = finite_difference(inputs, step, &|xs| evaluate(xs, build));
    a.iter()
        .zip(&n)
        .map(|(x, y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

use pmech_core::lm::{LmConfig, MaskedLm};
use pmech_core::tensor::tape::TopkMode;
use pmech_core::transcoder::{Transcoder, TranscoderKind, TranscoderShape};

/// Untrained model with weights scaled up from their initial 0.02 spread so
/// that every path carries a signal well above rounding.
pub fn micro_lm(n_layers: usize, d_model: usize, n_heads: usize, seed: u64) -> MaskedLm {
    let cfg = LmConfig {
        n_layers,
        d_model,
        n_heads,
        d_mlp: 2 * d_model,
        max_len: 16,
        ..LmConfig::default()
    };
    let mut m = MaskedLm::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for t in m.store.tensors_mut() {
        let data = t
            .data()
            .iter()
            .map(|&x| 20.0 * x + 0.1 * r.random_range(-1.0f32..1.0))
            .collect();
        *t = Tensor::new(t.shape().to_vec(), data).unwrap();
    }
    m
}

pub fn micro_transcoder(
    kind: TranscoderKind,
    n_layers: usize,
    d_model: usize,
    d_latent: usize,
    k: usize,
    seed: u64,
) -> Transcoder {
    let shape = TranscoderShape {
        kind,
        n_layers,
        d_model,
        d_latent,
        k,
        topk_mode: TopkMode::Magnitude,
    };
    let mut tc = Transcoder::new(shape, seed).unwrap();
    let mut r = rng(seed ^ 0xdec0);
    for t in tc.store.tensors_mut() {
        let data = t
            .data()
            .iter()
            .map(|&x| x + 0.1 * r.random_range(-1.0f32..1.0))
            .collect();
        *t = Tensor::new(t.shape().to_vec(), data).unwrap();
    }
    tc
}

pub fn random_tokens(len: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..len).map(|_| r.random_range(0..20)).collect()
}
