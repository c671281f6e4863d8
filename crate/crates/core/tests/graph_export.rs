//! Virtual weights against finite differences and a hand-composed oracle,
//! and the exported files against the published schema.
#![allow(clippy::needless_range_loop)]

mod common;

use common::{micro_lm, micro_transcoder, random_tokens, rng};
use pmech_core::graph::{
    build_graph, read_viz, target_gradients, top_corpus_activations, virtual_weight, write_viz,
    GraphConfig, ACTIVATION_FILE, SEQUENCE_FILE, TOP_FILE, WEIGHTS_FILE,
};
use pmech_core::lm::{MaskedLm, Sequence};
use pmech_core::replacement::{run_on, BaseContext, Intervention, ReplacementMode, RunOptions};
use pmech_core::tensor::{Tape, Tensor};
use pmech_core::transcoder::{Transcoder, TranscoderKind};
use rand::Rng;

/// Target pre-activation of the frozen local model with every latent set
/// to `latents` rather than re-encoded from the perturbed stream.
fn target_pre(
    model: &MaskedLm,
    tc: &Transcoder,
    base: &BaseContext,
    latents: &[Tensor],
    t: (usize, usize, usize),
) -> f32 {
    let mut tape = Tape::new();
    let mb = model.bind(&mut tape, false);
    let tb = tc.bind(&mut tape, false);
    let silence = Intervention::keep_only(&[], tc.n_layers(), tc.d_latent());
    let opts = RunOptions {
        intervention: Some(&silence),
        deltas: Some(latents),
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
    )
    .unwrap();
    tape.value(v.pre[t.0]).data()[t.2 * tc.d_latent() + t.1]
}

fn fd_weight(
    model: &MaskedLm,
    tc: &Transcoder,
    base: &BaseContext,
    s: (usize, usize, usize),
    t: (usize, usize, usize),
) -> f64 {
    // affine in the latents, so a wide step only shrinks roundoff
    let step = 8.0f32;
    let shifted = |h: f32| {
        let mut d = base.acts.clone();
        d[s.0].data_mut()[s.2 * tc.d_latent() + s.1] += h;
        target_pre(model, tc, base, &d, t) as f64
    };
    (shifted(step) - shifted(-step)) / (2.0 * step as f64)
}

#[test]
pub fn virtual_weights_match_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..3u64 {
        let model = micro_lm(3, 8, 2, seed);
        let tc = micro_transcoder(TranscoderKind::CrossLayer, 3, 8, 12, 3, seed);
        let tokens = random_tokens(6, seed + 100);
        let base = BaseContext::new(&model, &tc, &tokens).unwrap();
        let mut r = rng(seed + 7);
        for _ in 0..8 {
            let tl = r.random_range(1..3);
            let source = (
                r.random_range(0..tl),
                r.random_range(0..12),
                r.random_range(0..6),
            );
            let target = (tl, r.random_range(0..12), r.random_range(0..6));
            let w = virtual_weight(&model, &tc, &base, source, target).unwrap() as f64;
            let fd = fd_weight(&model, &tc, &base, source, target);
            let err = (w - fd).abs() / w.abs().max(fd.abs()).max(1e-2);
            worst = worst.max(err);
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
pub fn attention_free_two_layer_weights_compose_by_hand() {
    let mut model = micro_lm(2, 6, 2, 5);
    for l in 0..2 {
        let p = model.params.layers[l].clone();
        for &h in &p.head_out {
            let t = model.store.get_mut(h);
            *t = Tensor::zeros(t.shape());
        }
        let t = model.store.get_mut(p.attn_bias);
        *t = Tensor::zeros(t.shape());
    }
    let tc = micro_transcoder(TranscoderKind::CrossLayer, 2, 6, 10, 3, 5);
    let tokens = random_tokens(5, 9);
    let base = BaseContext::new(&model, &tc, &tokens).unwrap();
    let gain = model
        .store
        .get(model.params.layers[1].ln2_gain)
        .data()
        .to_vec();
    let sigmas = &base.trace.layers[1].mlp_sigmas;
    let enc = tc.store.get(tc.encoder[1]);
    let dec = tc.decoder(0, 0).unwrap();
    let d = 6;
    for i in [0, 3, 9] {
        for j in [1, 4, 7] {
            for p in 0..5 {
                for q in 0..5 {
                    let w =
                        virtual_weight(&model, &tc, &base, (0, i, p), (1, j, q)).unwrap() as f64;
                    let expected = if p != q {
                        0.0
                    } else {
                        let row = dec.row_slice(i);
                        let mean = row.iter().map(|&x| x as f64).sum::<f64>() / d as f64;
                        (0..d)
                            .map(|k| {
                                enc.row_slice(j)[k] as f64 * gain[k] as f64 / sigmas[q] as f64
                                    * (row[k] as f64 - mean)
                            })
                            .sum()
                    };
                    assert!(
                        (w - expected).abs() <= 1e-4 * expected.abs().max(1.0),
                        "latent {i}@{p} -> {j}@{q}: {w} vs {expected}"
                    );
                }
            }
        }
    }
}

#[test]
pub fn silent_decoder_gives_zero_weight_and_backward_edges_error() {
    let model = micro_lm(3, 8, 2, 1);
    let mut tc = micro_transcoder(TranscoderKind::CrossLayer, 3, 8, 12, 3, 1);
    for tgt in 0..3 {
        let id = tc.decoders[0][tgt].unwrap();
        let t = tc.store.get_mut(id);
        let mut data = t.data().to_vec();
        data[4 * 8..5 * 8].iter_mut().for_each(|x| *x = 0.0);
        *t = Tensor::new(t.shape().to_vec(), data).unwrap();
    }
    let tokens = random_tokens(6, 2);
    let base = BaseContext::new(&model, &tc, &tokens).unwrap();
    for p in 0..6 {
        assert_eq!(
            virtual_weight(&model, &tc, &base, (0, 4, p), (2, 5, 3)).unwrap(),
            0.0
        );
    }
    assert!(virtual_weight(&model, &tc, &base, (1, 0, 0), (1, 1, 0)).is_err());
    assert!(virtual_weight(&model, &tc, &base, (2, 0, 0), (1, 1, 0)).is_err());
}

#[test]
pub fn repeated_gradients_are_bit_identical() {
    let model = micro_lm(3, 8, 2, 4);
    let tc = micro_transcoder(TranscoderKind::CrossLayer, 3, 8, 12, 3, 4);
    let base = BaseContext::new(&model, &tc, &random_tokens(7, 4)).unwrap();
    let a = target_gradients(&model, &tc, &base, (2, 3, 5), None).unwrap();
    let b = target_gradients(&model, &tc, &base, (2, 3, 5), None).unwrap();
    assert_eq!(a, b);
}

#[test]
pub fn graph_edges_are_activation_times_weight() {
    let model = micro_lm(3, 8, 2, 6);
    let tc = micro_transcoder(TranscoderKind::CrossLayer, 3, 8, 12, 3, 6);
    let tokens = random_tokens(8, 6);
    let graph = build_graph(&model, &tc, &tokens, &GraphConfig::default(), None, None).unwrap();
    let base = BaseContext::new(&model, &tc, &tokens).unwrap();
    for l in 0..3 {
        let per_layer = graph.nodes.iter().filter(|n| n.layer == l).count();
        assert!(per_layer <= 5 && per_layer > 0);
    }
    assert!(!graph.edges.is_empty());
    for e in &graph.edges {
        assert!(e.target_layer > e.source_layer);
        assert_eq!(e.active_positions, e.positions.len());
        let mean = e.positions.iter().map(|p| p.weight).sum::<f32>() / e.positions.len() as f32;
        assert_eq!(e.mean_weight, mean);
        for p in &e.positions {
            let node = graph
                .nodes
                .iter()
                .find(|n| {
                    (n.layer, n.latent, n.position)
                        == (e.source_layer, e.source_latent, p.source_position)
                })
                .unwrap();
            let w = virtual_weight(
                &model,
                &tc,
                &base,
                (e.source_layer, e.source_latent, p.source_position),
                (e.target_layer, e.target_latent, p.target_position),
            )
            .unwrap();
            assert_eq!(p.weight, node.activation * w);
        }
    }
}

#[test]
pub fn corpus_search_edge_cases() {
    let model = micro_lm(2, 8, 2, 8);
    let mut tc = micro_transcoder(TranscoderKind::CrossLayer, 2, 8, 12, 3, 8);
    // latent 2 of layer 0 reads nothing and never fires
    let enc = tc.encoder[0];
    let t = tc.store.get_mut(enc);
    let mut data = t.data().to_vec();
    data[2 * 8..3 * 8].iter_mut().for_each(|x| *x = 0.0);
    *t = Tensor::new(t.shape().to_vec(), data).unwrap();
    let bias = tc.encoder_bias[0];
    let t = tc.store.get_mut(bias);
    let mut data = t.data().to_vec();
    data[2] = 0.0;
    *t = Tensor::new(t.shape().to_vec(), data).unwrap();
    let corpus: Vec<Sequence> = (0..3)
        .map(|i| Sequence {
            id: format!("s{i}"),
            tokens: random_tokens(10, 50 + i),
            families: vec![],
            fitness: None,
            planted: vec![],
        })
        .collect();
    let hits =
        top_corpus_activations(&model, &tc, &corpus, &[(0, 2), (1, 0), (0, 5)], 10, 3).unwrap();
    assert!(hits[0].hits.is_empty());
    for h in &hits[1..] {
        assert!(h.hits.len() <= 3);
        assert!(h
            .hits
            .windows(2)
            .all(|w| w[0].activation >= w[1].activation));
        for hit in &h.hits {
            assert!(hit.window.len() <= 7 && hit.activation > 0.0);
        }
    }
}

fn validate(schema: &serde_json::Value, def: &str, path: &std::path::Path) {
    let doc =
        serde_json::json!({ "$ref": format!("#/$defs/{def}"), "$defs": schema["$defs"].clone() });
    let validator = jsonschema::validator_for(&doc).unwrap();
    let instance: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let errors: Vec<String> = validator
        .iter_errors(&instance)
        .map(|e| e.to_string())
        .collect();
    assert!(errors.is_empty(), "{}: {errors:?}", path.display());
}

#[test]
pub fn exported_files_follow_the_schema_and_round_trip() {
    let model = micro_lm(3, 8, 2, 12);
    let tc = micro_transcoder(TranscoderKind::CrossLayer, 3, 8, 12, 3, 12);
    let tokens = random_tokens(9, 12);
    let mut graph = build_graph(&model, &tc, &tokens, &GraphConfig::default(), None, None).unwrap();
    let corpus: Vec<Sequence> = (0..6)
        .map(|i| Sequence {
            id: format!("c{i}"),
            tokens: random_tokens(12, 80 + i),
            families: vec![],
            fitness: None,
            planted: vec![],
        })
        .collect();
    graph.top_activations =
        top_corpus_activations(&model, &tc, &corpus, &graph.latents(), 10, 10).unwrap();

    let dir = tempfile::tempdir().unwrap();
    write_viz(&graph, dir.path()).unwrap();
    let mut names: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        vec![ACTIVATION_FILE, SEQUENCE_FILE, TOP_FILE, WEIGHTS_FILE]
    );
    assert_eq!(read_viz(dir.path()).unwrap(), graph);

    let schema_path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/viz-schema.json");
    let schema: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(schema_path).unwrap()).unwrap();
    validate(
        &schema,
        "activation_indices",
        &dir.path().join(ACTIVATION_FILE),
    );
    validate(&schema, "top_activations", &dir.path().join(TOP_FILE));
    validate(&schema, "virtual_weights", &dir.path().join(WEIGHTS_FILE));
    let seq = std::fs::read_to_string(dir.path().join(SEQUENCE_FILE)).unwrap();
    assert!(seq.trim().chars().all(|c| c.is_ascii_uppercase()));
}
