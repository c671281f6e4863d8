//! One function per subcommand. Each reads its inputs, runs a pipeline
//! stage and writes its artifacts into `out_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use pmech_core::circuits::{discover, Circuit, DiscoverConfig, Targets, TaskData};
use pmech_core::graph::{build_graph, top_corpus_activations, write_viz, GraphConfig};
use pmech_core::lm::trace::{read_captures, write_captures};
use pmech_core::lm::{
    generate_corpus, pretrain_lm, read_fasta, vocab, write_fasta, CapturedSequence, Corpus,
    CorpusSpec, FitnessRule, LmConfig, MaskedLm, MotifSpec, PretrainConfig, VariantLibrary,
};
use pmech_core::probes::{
    cross_validate, f1, family_split, fold_reports_csv, mean_pool, train_family_probe, FamilyProbe,
    FamilySplit, FitnessProbe, FitnessProbeConfig, FoldReport, LogisticConfig, SplitScheme,
    N_FOLDS,
};
use pmech_core::replacement::{evaluate_modes, reports_csv, ReplacementMode};
use pmech_core::steering::{
    alpha_grid, last_layer_outputs, steering_table, train_evaluator, ClampScale, ContrastRule,
    FitnessTask, FoldCircuit, SteeringSpec,
};
use pmech_core::tensor::tape::TopkMode;
use pmech_core::transcoder::{train, TrainConfig, Transcoder, TranscoderKind};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::*;
use crate::error::{CliError, Result};

pub const CORPUS: &str = "corpus.fasta";
pub const LM: &str = "lm.pmck";
pub const TRACES: &str = "traces.pmck";
pub const FAMILY_PROBE: &str = "family_probe.pmck";
pub const FAMILY_SPLIT: &str = "family_split.json";
pub const LIBRARY: &str = "library.json";
pub const FITNESS_FOLDS: &str = "fitness_folds.json";
pub const CIRCUIT: &str = "circuit.json";
pub const FITNESS_CIRCUITS: &str = "fitness_circuits.json";
pub const STEERING_TABLE: &str = "steering_table.csv";
pub const VIZ_DIR: &str = "viz";

fn transcoder_file(kind: TranscoderKind) -> String {
    format!("{}.pmck", kind.as_str())
}

/// Fills an unset input path with `name` inside the output directory.
fn fill(slot: &mut Option<PathBuf>, out: &Path, name: &str) {
    slot.get_or_insert_with(|| out.join(name));
}

fn path(slot: &Option<PathBuf>) -> &Path {
    slot.as_deref()
        .expect("input paths are filled before running")
}

fn require(path: &Path, artifact: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingInput {
            artifact,
            path: path.to_path_buf(),
        })
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| pmech_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(pmech_core::Error::from)?;
    write_file(path, &(text + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| pmech_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(pmech_core::Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    })
}

fn parse<T: std::str::FromStr<Err = pmech_core::Error>>(text: &str) -> Result<T> {
    text.parse()
        .map_err(|e: pmech_core::Error| CliError::Config(e.to_string()))
}

fn parse_list<T, F: Fn(&str) -> Result<T>>(text: &str, f: F) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

fn load_lm(p: &Path) -> Result<MaskedLm> {
    Ok(MaskedLm::load(p)?)
}

fn load_tc(p: &Path) -> Result<Transcoder> {
    Ok(Transcoder::load(p)?)
}

fn load_corpus(p: &Path, max_len: usize) -> Result<Corpus> {
    Ok(read_fasta(p, max_len)?)
}

/// `motif:probability:family[:copies]`, comma-separated.
pub fn parse_motifs(text: &str) -> Result<Vec<MotifSpec>> {
    parse_list(text, |entry| {
        let parts: Vec<&str> = entry.split(':').collect();
        let bad = || {
            CliError::Config(format!(
                "motif entry `{entry}` is not motif:probability:family[:copies]"
            ))
        };
        if !(3..=4).contains(&parts.len()) || parts[0].is_empty() {
            return Err(bad());
        }
        let mut m = MotifSpec::new(parts[0], parts[1].parse().map_err(|_| bad())?, parts[2]);
        if let Some(c) = parts.get(3) {
            m.copies = c.parse().map_err(|_| bad())?;
        }
        Ok(m)
    })
}

pub fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let mut spec = CorpusSpec::new(a.n, a.len, parse_motifs(&a.motifs)?);
    spec.background_seed = a.background_seed;
    let corpus = generate_corpus(a.common.seed, &spec)?;
    write_fasta(&corpus, &a.common.out_dir.join(CORPUS))?;
    log::info!("wrote {} sequences", corpus.len());
    Ok(())
}

pub fn pretrain(a: &mut PretrainArgs) -> Result<()> {
    let out = a.common.out_dir.clone();
    fill(&mut a.corpus, &out, CORPUS);
    require(path(&a.corpus), "corpus")?;
    let corpus = load_corpus(path(&a.corpus), a.max_len)?;
    let config = LmConfig {
        n_layers: a.n_layers,
        d_model: a.d_model,
        n_heads: a.n_heads,
        d_mlp: a.d_mlp,
        max_len: a.max_len,
        ..LmConfig::default()
    };
    let train = PretrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr as f32,
        warmup: a.warmup,
        weight_decay: a.weight_decay as f32,
        mask_rate: a.mask_rate as f32,
        heldout_fraction: a.heldout_fraction as f32,
        seed: a.common.seed,
    };
    let (model, report) = pretrain_lm(config, &corpus, &train)?;
    model.save(&out.join(LM))?;
    write_json(&out.join("pretrain_report.json"), &report)?;
    log::info!(
        "held-out loss {:.3} -> {:.3} (uniform {:.3})",
        report.initial_heldout_loss,
        report.final_heldout_loss,
        report.uniform_loss
    );
    Ok(())
}

pub fn record_traces(a: &mut RecordArgs) -> Result<()> {
    let out = a.common.out_dir.clone();
    fill(&mut a.corpus, &out, CORPUS);
    fill(&mut a.lm, &out, LM);
    require(path(&a.corpus), "corpus")?;
    require(path(&a.lm), "language model checkpoint")?;
    let model = load_lm(path(&a.lm))?;
    let corpus = load_corpus(path(&a.corpus), model.config.max_len)?;
    let captures: Vec<CapturedSequence> = corpus
        .sequences
        .par_iter()
        .map(|s| {
            Ok(CapturedSequence::from(
                &model.forward_with_trace(&s.tokens)?,
            ))
        })
        .collect::<pmech_core::Result<_>>()?;
    write_captures(&out.join(TRACES), &captures)?;
    Ok(())
}

fn topk_mode(text: &str) -> Result<TopkMode> {
    match text {
        "magnitude" => Ok(TopkMode::Magnitude),
        "signed" => Ok(TopkMode::Signed),
        other => Err(CliError::Config(format!("unknown topk mode `{other}`"))),
    }
}

pub fn train_transcoder(a: &mut TrainTranscoderArgs, kind: TranscoderKind) -> Result<()> {
    let out = a.common.out_dir.clone();
    fill(&mut a.traces, &out, TRACES);
    require(path(&a.traces), "activation traces")?;
    let captures = read_captures(path(&a.traces))?;
    let n = captures.len();
    let n_eval = ((n as f64 * a.eval_fraction).round() as usize).max(1);
    if n_eval >= n {
        return Err(CliError::Config(format!(
            "eval_fraction {} leaves no training traces out of {n}",
            a.eval_fraction
        )));
    }
    let d_model = captures[0].y[0].cols();
    let mut cfg = TrainConfig::for_width(d_model);
    cfg.k = a.k;
    if a.d_latent > 0 {
        cfg.d_latent = a.d_latent;
    }
    cfg.alpha = a.alpha as f32;
    if a.k_aux > 0 {
        cfg.k_aux = a.k_aux;
    }
    cfg.batch_size = a.batch_size;
    cfg.lr = a.lr as f32;
    cfg.steps = a.steps;
    cfg.clip = a.clip as f32;
    cfg.weight_decay = a.weight_decay as f32;
    cfg.dead_window = a.dead_window;
    cfg.topk_mode = topk_mode(&a.topk_mode)?;
    cfg.seed = a.common.seed;
    let (tc, report) = train(kind, &captures[..n - n_eval], &captures[n - n_eval..], &cfg)?;
    tc.save(&out.join(transcoder_file(kind)))?;
    report.write_metrics_csv(&out.join(format!("{}_metrics.csv", kind.as_str())))?;
    log::info!(
        "FVU per layer {:?} -> {:?}",
        report.initial_fvu,
        report.final_fvu
    );
    Ok(())
}

/// Cross-validated fitness probes and the evaluator, with file names
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessFolds {
    pub scheme: SplitScheme,
    pub seed: u64,
    pub probes: Vec<String>,
    pub reports: Vec<FoldReport>,
    pub evaluator: String,
    pub evaluator_spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FamilyProbeReport {
    family: String,
    n_train: usize,
    n_test: usize,
    test_f1: f64,
}

fn pick_wildtype(corpus: &Corpus, family: &str, index: usize) -> Result<Vec<usize>> {
    corpus
        .sequences
        .iter()
        .filter(|s| family.is_empty() || s.has_family(family))
        .nth(index)
        .map(|s| s.tokens.clone())
        .ok_or_else(|| CliError::Config(format!("no wildtype number {index} in family `{family}`")))
}

pub fn train_probe(a: &mut ProbeArgs) -> Result<()> {
    let out = a.common.out_dir.clone();
    fill(&mut a.corpus, &out, CORPUS);
    fill(&mut a.lm, &out, LM);
    require(path(&a.corpus), "corpus")?;
    require(path(&a.lm), "language model checkpoint")?;
    let model = load_lm(path(&a.lm))?;
    let corpus = load_corpus(path(&a.corpus), model.config.max_len)?;
    match a.task.as_str() {
        "family" => train_family(a, &model, &corpus, &out),
        "fitness" => train_fitness(a, &model, &corpus, &out),
        other => Err(CliError::Config(format!("unknown probe task `{other}`"))),
    }
}

fn pooled_outputs(
    model: &MaskedLm,
    corpus: &Corpus,
    rows: &[(usize, bool)],
) -> Result<Vec<Vec<f32>>> {
    let seqs: Vec<Vec<usize>> = rows
        .iter()
        .map(|&(i, _)| corpus.sequences[i].tokens.clone())
        .collect();
    Ok(last_layer_outputs(model, &seqs)?
        .iter()
        .map(mean_pool)
        .collect())
}

fn train_family(a: &ProbeArgs, model: &MaskedLm, corpus: &Corpus, out: &Path) -> Result<()> {
    let split = family_split(corpus, &a.family, a.common.seed)?;
    let labels = |rows: &[(usize, bool)]| rows.iter().map(|&(_, l)| l).collect::<Vec<_>>();
    let cfg = LogisticConfig {
        c: a.c,
        max_iter: a.max_iter,
        ..LogisticConfig::default()
    };
    let probe = train_family_probe(
        &pooled_outputs(model, corpus, &split.train)?,
        &labels(&split.train),
        &cfg,
    )?;
    let preds: Vec<bool> = pooled_outputs(model, corpus, &split.test)?
        .iter()
        .map(|x| probe.predict(x))
        .collect();
    let report = FamilyProbeReport {
        family: a.family.clone(),
        n_train: split.train.len(),
        n_test: split.test.len(),
        test_f1: f1(&preds, &labels(&split.test))?,
    };
    probe.save(&out.join(FAMILY_PROBE))?;
    write_json(&out.join(FAMILY_SPLIT), &split)?;
    write_json(&out.join("family_probe_report.json"), &report)?;
    log::info!("family probe test F1 {:.3}", report.test_f1);
    Ok(())
}

fn train_fitness(a: &ProbeArgs, model: &MaskedLm, corpus: &Corpus, out: &Path) -> Result<()> {
    let wildtype = pick_wildtype(corpus, &a.wildtype_family, a.wildtype_index)?;
    let rule = FitnessRule::MotifCount {
        motif: a.rule_motif.clone(),
    };
    let library = VariantLibrary::generate(
        a.common.seed,
        &wildtype,
        &rule,
        a.n_single,
        a.n_multi,
        a.max_mutations,
    )?;
    let seqs: Vec<Vec<usize>> = library.variants.iter().map(|v| v.tokens.clone()).collect();
    let features = last_layer_outputs(model, &seqs)?;
    let scores: Vec<f32> = library.variants.iter().map(|v| v.fitness).collect();
    let scheme: SplitScheme = parse(&a.scheme)?;
    let cfg = FitnessProbeConfig {
        kernel: a.kernel,
        hidden: a.hidden,
        dropout: a.dropout as f32,
        max_lr: a.max_lr as f32,
        warmup: a.warmup,
        max_epochs: a.max_epochs,
        batch_size: a.batch_size,
        patience: a.patience,
        weight_decay: a.weight_decay as f32,
        seed: a.common.seed,
    };
    let positions = library.first_positions();
    let trained = cross_validate(
        &features,
        &scores,
        &positions,
        wildtype.len(),
        scheme,
        N_FOLDS,
        &cfg,
    )?;
    let (evaluator, evaluator_spearman) = train_evaluator(
        &features,
        &scores,
        &FitnessProbeConfig {
            seed: a.evaluator_seed,
            ..cfg
        },
    )?;
    let mut probes = Vec::new();
    let mut reports = Vec::new();
    for (f, (probe, report)) in trained.into_iter().enumerate() {
        let name = format!("fitness_probe.fold{f}.pmck");
        probe.save(&out.join(&name))?;
        probes.push(name);
        reports.push(report);
    }
    evaluator.save(&out.join("evaluator.pmck"))?;
    write_json(&out.join(LIBRARY), &library)?;
    write_file(&out.join("fitness_folds.csv"), &fold_reports_csv(&reports))?;
    write_json(
        &out.join(FITNESS_FOLDS),
        &FitnessFolds {
            scheme,
            seed: a.common.seed,
            probes,
            reports,
            evaluator: "evaluator.pmck".into(),
            evaluator_spearman,
        },
    )?;
    log::info!("evaluator Spearman {evaluator_spearman:.3}");
    Ok(())
}

fn load_folds(manifest: &Path) -> Result<(FitnessFolds, Vec<(FitnessProbe, FoldReport)>)> {
    let folds: FitnessFolds = read_json(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    if folds.probes.len() != folds.reports.len() {
        return Err(CliError::Config(format!(
            "{} lists {} probes and {} reports",
            manifest.display(),
            folds.probes.len(),
            folds.reports.len()
        )));
    }
    let mut trained = Vec::new();
    for (name, report) in folds.probes.iter().zip(&folds.reports) {
        let p = dir.join(name);
        require(&p, "fitness probe checkpoint")?;
        trained.push((FitnessProbe::load(&p)?, report.clone()));
    }
    Ok((folds, trained))
}

pub fn discover_circuit(a: &mut DiscoverArgs) -> Result<()> {
    let out = a.common.out_dir.clone();
    let family = a.task == "family";
    if !family && a.task != "fitness" {
        return Err(CliError::Config(format!(
            "unknown discovery task `{}`",
            a.task
        )));
    }
    fill(
        &mut a.probe,
        &out,
        if family { FAMILY_PROBE } else { FITNESS_FOLDS },
    );
    fill(&mut a.lm, &out, LM);
    fill(
        &mut a.tc,
        &out,
        &transcoder_file(TranscoderKind::CrossLayer),
    );
    fill(&mut a.corpus, &out, CORPUS);
    fill(&mut a.split, &out, FAMILY_SPLIT);
    fill(&mut a.library, &out, LIBRARY);
    if family {
        require(path(&a.probe), "probe checkpoint")?;
        require(path(&a.split), "family split")?;
        require(path(&a.corpus), "corpus")?;
    } else {
        require(path(&a.probe), "fitness probe manifest")?;
        require(path(&a.library), "variant library")?;
    }
    require(path(&a.lm), "language model checkpoint")?;
    require(path(&a.tc), "transcoder checkpoint")?;
    let model = load_lm(path(&a.lm))?;
    let tc = load_tc(path(&a.tc))?;
    let mode: ReplacementMode = a
        .mode
        .parse()
        .map_err(|e: pmech_core::Error| CliError::Config(e.to_string()))?;
    let attribution_mode = match a.attribution_mode.as_str() {
        "" => None,
        m => Some(
            m.parse()
                .map_err(|e: pmech_core::Error| CliError::Config(e.to_string()))?,
        ),
    };
    let template = DiscoverConfig {
        task: a.task.clone(),
        mode,
        attribution_mode,
        step: a.step,
        max_nodes: a.max_nodes,
        clean_fraction: a.clean_fraction,
    };
    if family {
        let probe = FamilyProbe::load(path(&a.probe))?;
        let split: FamilySplit = read_json(path(&a.split))?;
        let corpus = load_corpus(path(&a.corpus), model.config.max_len)?;
        let tokens = |i: usize| {
            corpus
                .sequences
                .get(i)
                .map(|s| s.tokens.clone())
                .ok_or_else(|| CliError::Config(format!("split index {i} is beyond the corpus")))
        };
        let data = TaskData {
            validation: split
                .validation_positives()
                .into_iter()
                .map(tokens)
                .collect::<Result<_>>()?,
            test: split
                .test
                .iter()
                .map(|&(i, _)| tokens(i))
                .collect::<Result<_>>()?,
            targets: Targets::Labels(split.test.iter().map(|&(_, l)| l).collect()),
        };
        let cfg = DiscoverConfig {
            task: format!("family/{}", split.family),
            ..template
        };
        let (circuit, _) = discover(&model, &tc, &probe, &data, &cfg)?;
        log::info!(
            "{} nodes ({:.2}% of latents), target met: {}",
            circuit.nodes.len(),
            100.0 * circuit.latent_fraction(),
            circuit.target_met
        );
        circuit.save(&out.join(CIRCUIT))?;
    } else {
        let (folds, trained) = load_folds(path(&a.probe))?;
        let library: VariantLibrary = read_json(path(&a.library))?;
        let task = FitnessTask::new(&model, &tc, &library)?;
        let found = task.discover_fold_circuits(folds.scheme, folds.seed, trained, &template)?;
        let circuits: Vec<Circuit> = found.into_iter().map(|f| f.circuit).collect();
        write_json(&out.join(FITNESS_CIRCUITS), &circuits)?;
    }
    Ok(())
}

fn clamp_scale(text: &str) -> Result<ClampScale> {
    match text {
        "layer" => Ok(ClampScale::Layer),
        "latent" => Ok(ClampScale::Latent),
        other => Err(CliError::Config(format!("unknown clamp scale `{other}`"))),
    }
}

fn contrast_rule(text: &str) -> Result<ContrastRule> {
    match text {
        "extremes" => Ok(ContrastRule::Extremes),
        "functional" => Ok(ContrastRule::Functional),
        other => Err(CliError::Config(format!("unknown contrast rule `{other}`"))),
    }
}

pub fn steer(a: &mut SteerArgs) -> Result<()> {
    let out = a.common.out_dir.clone();
    fill(&mut a.lm, &out, LM);
    fill(
        &mut a.tc,
        &out,
        &transcoder_file(TranscoderKind::CrossLayer),
    );
    fill(&mut a.library, &out, LIBRARY);
    fill(&mut a.probe, &out, FITNESS_FOLDS);
    fill(&mut a.circuits, &out, FITNESS_CIRCUITS);
    require(path(&a.probe), "fitness probe manifest")?;
    require(path(&a.circuits), "fitness circuits")?;
    require(path(&a.library), "variant library")?;
    require(path(&a.lm), "language model checkpoint")?;
    require(path(&a.tc), "transcoder checkpoint")?;
    let spec = SteeringSpec {
        n_latents: parse_list(&a.n_latents, |s| {
            s.parse()
                .map_err(|_| CliError::Config(format!("latent count `{s}` is not an integer")))
        })?,
        alphas: alpha_grid(a.alpha_start as f32, a.alpha_end as f32, a.alpha_steps),
        scale: clamp_scale(&a.scale)?,
        cosine_gate: a.cosine_gate as f32,
        max_mutations: a.max_mutations,
        trials: a.trials,
        mode: a
            .mode
            .parse()
            .map_err(|e: pmech_core::Error| CliError::Config(e.to_string()))?,
        top_n: a.top_n,
        caa_trials: a.caa_trials,
        caa_fraction: a.caa_fraction,
        seed: a.common.seed,
    };
    let contrasts = parse_list(&a.contrasts, contrast_rule)?;
    let (manifest, trained) = load_folds(path(&a.probe))?;
    let circuits: Vec<Circuit> = read_json(path(&a.circuits))?;
    if circuits.len() != trained.len() {
        return Err(CliError::Config(format!(
            "{} circuits for {} fold probes",
            circuits.len(),
            trained.len()
        )));
    }
    let evaluator_path = path(&a.probe)
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.evaluator);
    require(&evaluator_path, "evaluator checkpoint")?;
    let evaluator = FitnessProbe::load(&evaluator_path)?;
    let model = load_lm(path(&a.lm))?;
    let tc = load_tc(path(&a.tc))?;
    let library: VariantLibrary = read_json(path(&a.library))?;
    let task = FitnessTask::new(&model, &tc, &library)?;
    let folds: Vec<FoldCircuit> = trained
        .into_iter()
        .zip(circuits)
        .enumerate()
        .map(|(fold, ((probe, report), circuit))| FoldCircuit {
            fold,
            probe,
            report,
            circuit,
        })
        .collect();
    let table = steering_table(&task, &folds, &evaluator, &spec, &contrasts)?;
    write_file(&out.join(STEERING_TABLE), &table.to_csv())?;
    write_file(&out.join("steered_variants.csv"), &table.variants_csv())?;
    Ok(())
}

pub fn export_viz(a: &mut ExportArgs) -> Result<()> {
    let out = a.common.out_dir.clone();
    fill(&mut a.lm, &out, LM);
    fill(
        &mut a.tc,
        &out,
        &transcoder_file(TranscoderKind::CrossLayer),
    );
    fill(&mut a.corpus, &out, CORPUS);
    require(path(&a.lm), "language model checkpoint")?;
    require(path(&a.tc), "transcoder checkpoint")?;
    let needs_corpus = a.sequence.is_empty() || a.top_hits > 0;
    if needs_corpus {
        require(path(&a.corpus), "corpus")?;
    }
    if let Some(c) = &a.circuit {
        require(c, "circuit")?;
    }
    let model = load_lm(path(&a.lm))?;
    let tc = load_tc(path(&a.tc))?;
    let corpus = if needs_corpus {
        load_corpus(path(&a.corpus), model.config.max_len)?
    } else {
        Corpus::default()
    };
    let encode = |text: &str| {
        let (tokens, unknown) = vocab::encode(text);
        if unknown > 0 {
            return Err(CliError::Config(format!(
                "{unknown} unknown residues in `{text}`"
            )));
        }
        Ok(tokens)
    };
    let tokens = if a.sequence.is_empty() {
        corpus
            .sequences
            .get(a.sequence_index)
            .map(|s| s.tokens.clone())
            .ok_or_else(|| {
                CliError::Config(format!(
                    "sequence index {} is beyond the corpus",
                    a.sequence_index
                ))
            })?
    } else {
        encode(&a.sequence)?
    };
    let variant = if a.variant.is_empty() {
        None
    } else {
        Some(encode(&a.variant)?)
    };
    let circuit = a
        .circuit
        .as_deref()
        .map(Circuit::load)
        .transpose()?
        .map(|c| c.pairs());
    let cfg = GraphConfig {
        nodes_per_layer: a.nodes_per_layer,
        top_hits: a.top_hits,
        window: a.window,
    };
    let mut graph = build_graph(
        &model,
        &tc,
        &tokens,
        &cfg,
        circuit.as_deref(),
        variant.as_deref(),
    )?;
    if a.top_hits > 0 {
        let limit = if a.search_limit == 0 {
            corpus.len()
        } else {
            a.search_limit.min(corpus.len())
        };
        graph.top_activations = top_corpus_activations(
            &model,
            &tc,
            &corpus.sequences[..limit],
            &graph.latents(),
            a.top_hits,
            a.window,
        )?;
    }
    write_viz(&graph, &out.join(VIZ_DIR))?;
    Ok(())
}

pub fn eval_replacement(a: &mut EvalArgs) -> Result<()> {
    let out = a.common.out_dir.clone();
    fill(&mut a.lm, &out, LM);
    fill(
        &mut a.tc,
        &out,
        &transcoder_file(TranscoderKind::CrossLayer),
    );
    fill(&mut a.corpus, &out, CORPUS);
    require(path(&a.lm), "language model checkpoint")?;
    require(path(&a.tc), "transcoder checkpoint")?;
    require(path(&a.corpus), "corpus")?;
    let modes: Vec<ReplacementMode> = parse_list(&a.modes, parse)?;
    let model = load_lm(path(&a.lm))?;
    let tc = load_tc(path(&a.tc))?;
    let corpus = load_corpus(path(&a.corpus), model.config.max_len)?;
    let n = a.n_eval.min(corpus.len());
    let seqs: Vec<Vec<usize>> = corpus.sequences[corpus.len() - n..]
        .iter()
        .map(|s| s.tokens.clone())
        .collect();
    let reports = evaluate_modes(&model, &tc, &seqs, &modes)?;
    write_file(&out.join("replacement.csv"), &reports_csv(&reports))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn motif_lists() {
        let m = parse_motifs("HRD:0.5:kinase:3, CPWC:0.25:trx").unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!((m[0].motif.as_str(), m[0].copies), ("HRD", 3));
        assert_eq!(
            (m[1].family.as_str(), m[1].copies, m[1].probability),
            ("trx", 1, 0.25)
        );
        assert!(parse_motifs("").unwrap().is_empty());
        for bad in ["HRD", "HRD:x:kinase", ":0.5:f", "A:0.5:f:2:9"] {
            assert!(parse_motifs(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn enum_names() {
        assert_eq!(topk_mode("signed").unwrap(), TopkMode::Signed);
        assert!(topk_mode("abs").is_err());
        assert_eq!(clamp_scale("latent").unwrap(), ClampScale::Latent);
        assert_eq!(
            contrast_rule("functional").unwrap(),
            ContrastRule::Functional
        );
        assert!(parse::<ReplacementMode>("partial").is_err());
    }
}
