//! Latent gradients of a probe readout against finite differences of the
//! replacement pass in every mode.
#![allow(clippy::needless_range_loop)]

mod common;

use common::{micro_lm, micro_transcoder, random_tokens, rng};
use pmech_core::circuits::{attribution_scores, latent_gradients, Readout};
use pmech_core::lm::{LmConfig, MaskedLm};
use pmech_core::probes::FamilyProbe;
use pmech_core::replacement::{run, BaseContext, ReplacementMode, RunOptions};
use pmech_core::tensor::Tensor;
use pmech_core::transcoder::{Transcoder, TranscoderKind};
use rand::Rng;

const MODES: [ReplacementMode; 4] = [
    ReplacementMode::Direct,
    ReplacementMode::Sequential,
    ReplacementMode::Full,
    ReplacementMode::Local,
];

/// Last-layer reconstruction with one latent offset by `h`.
fn last_recon(
    model: &MaskedLm,
    tc: &Transcoder,
    mode: ReplacementMode,
    base: &BaseContext,
    at: (usize, usize, usize),
    h: f32,
) -> Tensor {
    let t = base.trace.len();
    let mut deltas: Vec<Tensor> = (0..tc.n_layers())
        .map(|_| Tensor::zeros(&[t, tc.d_latent()]))
        .collect();
    deltas[at.0].data_mut()[at.2 * tc.d_latent() + at.1] = h;
    let opts = RunOptions {
        deltas: Some(&deltas),
        ..RunOptions::default()
    };
    run(model, tc, mode, base, &base.trace.tokens, &opts)
        .unwrap()
        .recon
        .pop()
        .unwrap()
}

/// Central difference of the probe logit. The probe is linear in the pooled
/// output, so the difference is taken before the weights to keep the large
/// constant part of the logit out of the roundoff.
fn fd_logit(probe: &FamilyProbe, plus: &Tensor, minus: &Tensor, step: f32) -> f64 {
    let cols = plus.cols();
    let rows = plus.rows() as f64;
    let mut out = 0.0f64;
    for (p, m) in plus.data().chunks(cols).zip(minus.data().chunks(cols)) {
        for j in 0..cols {
            out += probe.weights[j] as f64 * (p[j] as f64 - m[j] as f64) / rows;
        }
    }
    out / (2.0 * step as f64)
}

/// Central difference at the widest step whose one-sided estimates agree,
/// or `None` when every step straddles a change of top-k selection.
fn smooth_difference(
    model: &MaskedLm,
    tc: &Transcoder,
    probe: &FamilyProbe,
    mode: ReplacementMode,
    base: &BaseContext,
    at: (usize, usize, usize),
) -> Option<f64> {
    let zero = last_recon(model, tc, mode, base, at, 0.0);
    for step in [1e-2f32, 3e-3, 1e-3, 3e-4, 1e-4] {
        let plus = last_recon(model, tc, mode, base, at, step);
        let minus = last_recon(model, tc, mode, base, at, -step);
        let fwd = 2.0 * fd_logit(probe, &plus, &zero, step);
        let bwd = 2.0 * fd_logit(probe, &zero, &minus, step);
        if (fwd - bwd).abs() <= 0.02 * fwd.abs().max(bwd.abs()).max(1e-3) {
            return Some(fd_logit(probe, &plus, &minus, step));
        }
    }
    None
}

#[test]
pub fn latent_gradients_match_finite_differences() {
    let (n_layers, d_model, d_latent) = (3, 8, 12);
    // default initialization keeps activations near unit scale, where f32
    // differences stay well above roundoff
    let cfg = LmConfig {
        n_layers,
        d_model,
        n_heads: 2,
        d_mlp: 2 * d_model,
        max_len: 16,
        ..LmConfig::default()
    };
    let model = MaskedLm::new(cfg, 11).unwrap();
    let tc = micro_transcoder(
        TranscoderKind::CrossLayer,
        n_layers,
        d_model,
        d_latent,
        3,
        11,
    );
    let mut r = rng(3);
    let probe = FamilyProbe {
        weights: (0..d_model).map(|_| r.random_range(-1.0f32..1.0)).collect(),
        bias: 0.1,
    };
    let tokens = random_tokens(6, 21);
    let base = BaseContext::new(&model, &tc, &tokens).unwrap();
    for mode in MODES {
        let mut kinks = 0;
        let (value, _, grads) = latent_gradients(&model, &tc, &probe, mode, &base).unwrap();
        let unshifted = Readout::predict(
            &probe,
            &last_recon(&model, &tc, mode, &base, (0, 0, 0), 0.0),
        )
        .unwrap() as f64;
        assert!(
            (value as f64 - unshifted).abs() <= 1e-5 * unshifted.abs().max(1.0),
            "{mode:?}"
        );
        let scale = grads
            .iter()
            .flat_map(|g| g.data())
            .fold(0.0f32, |m, &g| m.max(g.abs())) as f64;
        for _ in 0..20 {
            let at = (
                r.random_range(0..n_layers),
                r.random_range(0..d_latent),
                r.random_range(0..tokens.len()),
            );
            let Some(fd) = smooth_difference(&model, &tc, &probe, mode, &base, at) else {
                kinks += 1;
                continue;
            };
            let g = grads[at.0].data()[at.2 * d_latent + at.1] as f64;
            let err = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-2 * scale);
            assert!(
                err <= 1e-2,
                "{mode:?} latent {at:?}: analytic {g}, numeric {fd}"
            );
        }
        assert!(
            kinks <= 2,
            "{mode:?}: {kinks} of 20 latents sit on a selection kink"
        );
    }
}

#[test]
pub fn scores_sum_activation_times_gradient_over_sequences() {
    let model = micro_lm(2, 6, 2, 4);
    let tc = micro_transcoder(TranscoderKind::CrossLayer, 2, 6, 10, 2, 4);
    let probe = FamilyProbe {
        weights: vec![0.5, -0.3, 0.2, 0.9, -1.0, 0.4],
        bias: 0.0,
    };
    let bases: Vec<BaseContext> = (0..3)
        .map(|s| BaseContext::new(&model, &tc, &random_tokens(5, s)).unwrap())
        .collect();
    let attr = attribution_scores(&model, &tc, &probe, ReplacementMode::Direct, &bases).unwrap();
    assert_eq!(attr.n_sequences, 3);
    let mut want = vec![vec![0.0f64; 10]; 2];
    for b in &bases {
        let (_, acts, grads) =
            latent_gradients(&model, &tc, &probe, ReplacementMode::Direct, b).unwrap();
        for l in 0..2 {
            for (j, (&a, &g)) in acts[l].data().iter().zip(grads[l].data()).enumerate() {
                want[l][j % 10] += (a as f64 * g as f64).abs();
            }
        }
    }
    for l in 0..2 {
        for i in 0..10 {
            assert!((attr.scores[l][i] - want[l][i]).abs() <= 1e-9 * want[l][i].max(1.0));
        }
    }
    // inactive latents never score
    for (l, row) in attr.scores.iter().enumerate() {
        for (i, &s) in row.iter().enumerate() {
            let ever_active = bases
                .iter()
                .any(|b| b.acts[l].data().chunks(10).any(|r| r[i] != 0.0));
            assert!(ever_active || s == 0.0, "latent {l}/{i}");
        }
    }
}
