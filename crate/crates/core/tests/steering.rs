//! Steering with nothing to steer reproduces the model.

mod common;

use common::{micro_transcoder, random_tokens};
use pmech_core::lm::{LmConfig, MaskedLm};
use pmech_core::replacement::{BaseContext, Clamp, ReplacementMode};
use pmech_core::steering::{
    caa_logits, caa_mutations, caa_vector, clamp_values, steer_and_decode, steer_rows, ClampScale,
};
use pmech_core::transcoder::TranscoderKind;

fn model(seed: u64) -> MaskedLm {
    let cfg = LmConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        max_len: 16,
        ..LmConfig::default()
    };
    MaskedLm::new(cfg, seed).unwrap()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

#[test]
pub fn empty_clamp_set_reproduces_base_logits_in_every_mode() {
    for kind in [TranscoderKind::CrossLayer, TranscoderKind::PerLayer] {
        for seed in 0..4 {
            let m = model(seed);
            let tc = micro_transcoder(kind, 3, 8, 16, 3, seed);
            let tokens = random_tokens(10, seed + 50);
            let base = BaseContext::new(&m, &tc, &tokens).unwrap();
            let logits = m.forward(&tokens).unwrap();
            for mode in [
                ReplacementMode::Direct,
                ReplacementMode::Sequential,
                ReplacementMode::Full,
                ReplacementMode::Local,
            ] {
                if mode == ReplacementMode::Direct && kind == TranscoderKind::PerLayer {
                    continue;
                }
                let steered = steer_and_decode(&m, &tc, &base, &[], mode).unwrap();
                let diff = max_abs_diff(steered.data(), logits.data());
                assert!(diff <= 1e-4, "{kind:?} {mode:?} seed {seed}: {diff}");
            }
        }
    }
}

#[test]
pub fn clamping_latents_to_their_own_values_is_the_identity() {
    let m = model(9);
    let tc = micro_transcoder(TranscoderKind::CrossLayer, 3, 8, 16, 3, 9);
    let tokens = random_tokens(10, 3);
    let base = BaseContext::new(&m, &tc, &tokens).unwrap();
    let logits = m.forward(&tokens).unwrap();
    // a latent silent at every token clamped to alpha * 0
    let silent: Vec<(usize, usize)> = (0..3)
        .flat_map(|l| (0..16).map(move |i| (l, i)))
        .filter(|&(l, i)| base.acts[l].data().chunks(16).all(|r| r[i] == 0.0))
        .collect();
    assert!(!silent.is_empty());
    let clamps: Vec<Clamp> = silent
        .iter()
        .map(|&(layer, latent)| Clamp {
            layer,
            latent,
            value: 0.0,
        })
        .collect();
    let steered = steer_and_decode(&m, &tc, &base, &clamps, ReplacementMode::Direct).unwrap();
    assert!(max_abs_diff(steered.data(), logits.data()) <= 1e-4);
    // alpha = 0 yields zero clamps for any target
    let zero = clamp_values(&base.acts, &[(0, 0), (2, 5)], 0.0, ClampScale::Layer).unwrap();
    assert!(zero.iter().all(|c| c.value == 0.0));
}

#[test]
pub fn identical_contrast_sets_give_a_zero_vector_and_no_mutations() {
    let m = model(4);
    let sets: Vec<Vec<usize>> = (0..5).map(|s| random_tokens(12, s)).collect();
    let v = caa_vector(&m, &sets, &sets).unwrap();
    assert_eq!(v.len(), 3);
    assert!(v.iter().flatten().all(|&x| x == 0.0));

    let wildtype = &sets[0];
    let plain = m.forward(wildtype).unwrap();
    for alpha in [0.5f32, 5.0] {
        let steered = caa_logits(&m, wildtype, &v, alpha).unwrap();
        assert_eq!(steered, plain);
        let from_plain = caa_mutations(wildtype, &plain, 100).unwrap();
        assert_eq!(caa_mutations(wildtype, &steered, 100).unwrap(), from_plain);
    }
}

#[test]
pub fn renormalized_shift_keeps_every_token_norm() {
    let mut r = common::rng(8);
    for _ in 0..20 {
        let h = common::uniform(&mut r, 7, 8).scale(10.0);
        let v: Vec<f32> = common::uniform(&mut r, 1, 8).into_data();
        let s = steer_rows(&h, &v, 3.0);
        for t in 0..7 {
            let n0: f32 = h.row_slice(t).iter().map(|x| x * x).sum::<f32>().sqrt();
            let n1: f32 = s.row_slice(t).iter().map(|x| x * x).sum::<f32>().sqrt();
            assert!((n0 - n1).abs() <= 1e-5 * n0.max(1.0), "{n0} vs {n1}");
        }
    }
}
