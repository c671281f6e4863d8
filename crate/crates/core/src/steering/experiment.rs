use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{evaluate_variants, mutation_list, Selection, Summary, VariantReport};
use super::{
    caa_logits, caa_mutations, caa_vector, clamp_values, contrast_sets, random_mutations,
    sample_circuit_latents, select_mutations, steer_and_decode, ContrastRule, SteeringSpec,
};
use crate::circuits::{discover, Circuit, DiscoverConfig, Targets, TaskData};
use crate::error::{Error, Result};
use crate::lm::{apply_mutations, MaskedLm, Mutation, VariantLibrary};
use crate::probes::{
    assign_folds, cross_validate, fold_split, train_fitness_probe, FitnessProbe,
    FitnessProbeConfig, FoldReport, SplitScheme, N_FOLDS,
};
use crate::replacement::{BaseContext, ReplacementMode};
use crate::tensor::Tensor;
use crate::transcoder::Transcoder;

/// Last-layer MLP outputs of each sequence, the features fitness probes read.
pub fn last_layer_outputs(model: &MaskedLm, sequences: &[Vec<usize>]) -> Result<Vec<Tensor>> {
    sequences
        .par_iter()
        .map(|s| {
            let mut trace = model.forward_with_trace(s)?;
            Ok(trace.layers.pop().expect("at least one layer").y)
        })
        .collect()
}

/// A variant library together with the model and transcoder it is studied in.
pub struct FitnessTask<'a> {
    pub model: &'a MaskedLm,
    pub tc: &'a Transcoder,
    pub library: &'a VariantLibrary,
    /// Last-layer MLP outputs of every library variant.
    pub features: Vec<Tensor>,
}

/// The probe and circuit of one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldCircuit {
    pub fold: usize,
    pub probe: FitnessProbe,
    pub report: FoldReport,
    pub circuit: Circuit,
}

impl<'a> FitnessTask<'a> {
    pub fn new(
        model: &'a MaskedLm,
        tc: &'a Transcoder,
        library: &'a VariantLibrary,
    ) -> Result<Self> {
        if library.variants.is_empty() {
            return Err(Error::InvalidInput("variant library is empty".into()));
        }
        let sequences: Vec<Vec<usize>> =
            library.variants.iter().map(|v| v.tokens.clone()).collect();
        let features = last_layer_outputs(model, &sequences)?;
        Ok(Self {
            model,
            tc,
            library,
            features,
        })
    }

    pub fn scores(&self) -> Vec<f32> {
        self.library.variants.iter().map(|v| v.fitness).collect()
    }

    /// First mutated position of every variant.
    pub fn positions(&self) -> Vec<usize> {
        self.library.first_positions()
    }

    /// Probe predictions for arbitrary sequences.
    pub fn predict(&self, probe: &FitnessProbe, sequences: &[Vec<usize>]) -> Result<Vec<f32>> {
        probe.predict_all(&last_layer_outputs(self.model, sequences)?)
    }

    /// Cross-validated fitness probes and, for each fold, the circuit found
    /// by attributing over the functional variants of its validation fold
    /// and growing against Spearman correlation on its test fold.
    pub fn fold_circuits(
        &self,
        scheme: SplitScheme,
        probe_cfg: &FitnessProbeConfig,
        mode: ReplacementMode,
    ) -> Result<Vec<FoldCircuit>> {
        let trained = self.cross_validate(scheme, probe_cfg)?;
        self.discover_fold_circuits(
            scheme,
            probe_cfg.seed,
            trained,
            &DiscoverConfig::new("fitness", mode),
        )
    }

    pub fn cross_validate(
        &self,
        scheme: SplitScheme,
        probe_cfg: &FitnessProbeConfig,
    ) -> Result<Vec<(FitnessProbe, FoldReport)>> {
        let seq_len = self.library.wildtype.len();
        cross_validate(
            &self.features,
            &self.scores(),
            &self.positions(),
            seq_len,
            scheme,
            N_FOLDS,
            probe_cfg,
        )
    }

    /// Circuits for probes already trained on the folds that `scheme` and
    /// `seed` assign. Growth settings come from `template`; its task name is
    /// suffixed with the scheme and fold.
    pub fn discover_fold_circuits(
        &self,
        scheme: SplitScheme,
        seed: u64,
        trained: Vec<(FitnessProbe, FoldReport)>,
        template: &DiscoverConfig,
    ) -> Result<Vec<FoldCircuit>> {
        if trained.len() != N_FOLDS {
            return Err(Error::InvalidInput(format!(
                "{} fold probes, expected {N_FOLDS}",
                trained.len()
            )));
        }
        let scores = self.scores();
        let folds = assign_folds(
            scheme,
            &self.positions(),
            self.library.wildtype.len(),
            N_FOLDS,
            seed,
        )?;
        let variants = &self.library.variants;
        trained
            .into_iter()
            .enumerate()
            .map(|(f, (probe, report))| {
                let split = fold_split(&folds, N_FOLDS, f);
                let functional: Vec<usize> = split
                    .validation
                    .iter()
                    .copied()
                    .filter(|&i| variants[i].functional)
                    .collect();
                let attribute_on = if functional.is_empty() {
                    &split.validation
                } else {
                    &functional
                };
                let data = TaskData {
                    validation: attribute_on
                        .iter()
                        .map(|&i| variants[i].tokens.clone())
                        .collect(),
                    test: split
                        .test
                        .iter()
                        .map(|&i| variants[i].tokens.clone())
                        .collect(),
                    targets: Targets::Scores(split.test.iter().map(|&i| scores[i]).collect()),
                };
                let cfg = DiscoverConfig {
                    task: format!("{}/{scheme}/fold{f}", template.task),
                    ..template.clone()
                };
                let (circuit, _) = discover(self.model, self.tc, &probe, &data, &cfg)?;
                log::info!(
                    "fold {f}: probe rho {:.3}, circuit {} nodes (target met: {})",
                    report.test_spearman,
                    circuit.nodes.len(),
                    circuit.target_met
                );
                Ok(FoldCircuit {
                    fold: f,
                    probe,
                    report,
                    circuit,
                })
            })
            .collect()
    }

    pub fn train_evaluator(&self, cfg: &FitnessProbeConfig) -> Result<(FitnessProbe, f64)> {
        train_evaluator(&self.features, &self.scores(), cfg)
    }
}

/// Evaluator probe trained on a random 90% of the examples, with the rest
/// used for early stopping. Returns the probe and its Spearman correlation
/// on the held-out tenth.
pub fn train_evaluator(
    features: &[Tensor],
    scores: &[f32],
    cfg: &FitnessProbeConfig,
) -> Result<(FitnessProbe, f64)> {
    let n = features.len();
    if scores.len() != n {
        return Err(Error::InvalidInput(format!(
            "{n} feature tensors for {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9));
    let held = (n / 10).max(1);
    if held >= n {
        return Err(Error::InvalidInput(
            "library too small for an evaluator split".into(),
        ));
    }
    let (held_out, train) = order.split_at(held);
    let xs = |ix: &[usize]| ix.iter().map(|&i| features[i].clone()).collect::<Vec<_>>();
    let ys = |ix: &[usize]| ix.iter().map(|&i| scores[i]).collect::<Vec<_>>();
    let (probe, _) =
        train_fitness_probe(&xs(train), &ys(train), &xs(held_out), &ys(held_out), cfg)?;
    let preds = probe.predict_all(&xs(held_out))?;
    let rho = crate::probes::spearman(
        &preds.iter().map(|&p| p as f64).collect::<Vec<_>>(),
        &ys(held_out).iter().map(|&y| y as f64).collect::<Vec<_>>(),
    )?;
    Ok((probe, rho))
}

/// A proposed variant and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeredVariant {
    pub fold: Option<usize>,
    pub trial: usize,
    pub alpha: f32,
    pub latents: Vec<(usize, usize)>,
    pub mutations: Vec<Mutation>,
    pub discovery_score: f32,
}

fn cell_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Variants from clamping `n_latents` attribution-sampled circuit latents
/// of each fold, over every trial and clamp multiplier, ranked by that
/// fold's probe.
pub fn circuit_variants(
    task: &FitnessTask<'_>,
    folds: &[FoldCircuit],
    spec: &SteeringSpec,
    n_latents: usize,
) -> Result<Vec<SteeredVariant>> {
    let wildtype = &task.library.wildtype;
    let base = BaseContext::new(task.model, task.tc, wildtype)?;
    let base_logits = &base.trace.logits;
    let cells: Vec<(usize, usize)> = (0..folds.len())
        .flat_map(|f| (0..spec.trials).map(move |t| (f, t)))
        .collect();
    let per_cell: Vec<Vec<SteeredVariant>> = cells
        .par_iter()
        .map(|&(f, trial)| {
            let fc = &folds[f];
            let nonzero = fc.circuit.nodes.iter().filter(|n| n.score > 0.0).count();
            let count = n_latents.min(nonzero);
            let mut rng = cell_rng(
                spec.seed,
                (f * 1_000_000 + trial * 1_000 + n_latents) as u64,
            );
            let latents = sample_circuit_latents(&fc.circuit.nodes, count, &mut rng)?;
            let mut proposals = Vec::with_capacity(spec.alphas.len());
            for &alpha in &spec.alphas {
                let clamps = clamp_values(&base.acts, &latents, alpha, spec.scale)?;
                let logits = steer_and_decode(task.model, task.tc, &base, &clamps, spec.mode)?;
                let mutations = select_mutations(
                    wildtype,
                    base_logits,
                    &logits,
                    spec.max_mutations,
                    spec.cosine_gate,
                )?;
                proposals.push((alpha, mutations));
            }
            let sequences: Vec<Vec<usize>> = proposals
                .iter()
                .map(|(_, m)| apply_mutations(wildtype, m))
                .collect();
            let scores = task.predict(&fc.probe, &sequences)?;
            Ok(proposals
                .into_iter()
                .zip(scores)
                .map(|((alpha, mutations), discovery_score)| SteeredVariant {
                    fold: Some(fc.fold),
                    trial,
                    alpha,
                    latents: latents.clone(),
                    mutations,
                    discovery_score,
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

/// One random variant per steered variant with the same mutation count,
/// scored by the same fold probe.
pub fn random_variants(
    task: &FitnessTask<'_>,
    folds: &[FoldCircuit],
    steered: &[SteeredVariant],
    seed: u64,
) -> Result<Vec<SteeredVariant>> {
    let wildtype = &task.library.wildtype;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<SteeredVariant> = steered
        .iter()
        .map(|s| SteeredVariant {
            latents: Vec::new(),
            mutations: random_mutations(wildtype, s.mutations.len(), &mut rng),
            ..s.clone()
        })
        .collect();
    let sequences: Vec<Vec<usize>> = out
        .iter()
        .map(|v| apply_mutations(wildtype, &v.mutations))
        .collect();
    let tags: Vec<Option<usize>> = out.iter().map(|v| v.fold).collect();
    let scores = mean_fold_predictions(task, folds, &sequences, &tags)?;
    for (v, s) in out.iter_mut().zip(scores) {
        v.discovery_score = s;
    }
    Ok(out)
}

/// Fold probe prediction for sequences tagged with a fold, the mean over
/// all fold probes otherwise.
fn mean_fold_predictions(
    task: &FitnessTask<'_>,
    folds: &[FoldCircuit],
    sequences: &[Vec<usize>],
    fold_of: &[Option<usize>],
) -> Result<Vec<f32>> {
    if folds.is_empty() {
        return Err(Error::InvalidInput("no fold probes".into()));
    }
    let features = last_layer_outputs(task.model, sequences)?;
    features
        .par_iter()
        .enumerate()
        .map(
            |(i, x)| match fold_of[i].and_then(|f| folds.iter().find(|fc| fc.fold == f)) {
                Some(fc) => fc.probe.predict(x),
                None => {
                    let mut sum = 0.0;
                    for fc in folds {
                        sum += fc.probe.predict(x)?;
                    }
                    Ok(sum / folds.len() as f32)
                }
            },
        )
        .collect()
}

/// Contrastive activation addition over `spec.caa_trials` random draws of
/// the contrast sets, every clamp multiplier in `spec.alphas` used as the
/// addition strength. Variants are ranked by the mean of the fold probes.
pub fn caa_variants(
    task: &FitnessTask<'_>,
    folds: &[FoldCircuit],
    spec: &SteeringSpec,
    rule: ContrastRule,
) -> Result<Vec<SteeredVariant>> {
    let wildtype = &task.library.wildtype;
    let (positives, negatives) = contrast_sets(task.library, rule);
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{rule:?} contrast leaves an empty set"
        )));
    }
    let draw = |set: &[usize], rng: &mut ChaCha8Rng| -> Vec<Vec<usize>> {
        let k = ((set.len() as f64 * spec.caa_fraction).round() as usize).clamp(1, set.len());
        set.choose_multiple(rng, k)
            .map(|&i| task.library.variants[i].tokens.clone())
            .collect()
    };
    let per_trial: Vec<Vec<(usize, f32, Vec<Mutation>)>> = (0..spec.caa_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = cell_rng(spec.seed, 0xcaa0_0000 + trial as u64);
            let p = draw(&positives, &mut rng);
            let n = draw(&negatives, &mut rng);
            let v = caa_vector(task.model, &p, &n)?;
            spec.alphas
                .iter()
                .map(|&alpha| {
                    let logits = caa_logits(task.model, wildtype, &v, alpha)?;
                    Ok((
                        trial,
                        alpha,
                        caa_mutations(wildtype, &logits, spec.max_mutations)?,
                    ))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let proposals: Vec<(usize, f32, Vec<Mutation>)> = per_trial.into_iter().flatten().collect();
    let sequences: Vec<Vec<usize>> = proposals
        .iter()
        .map(|p| apply_mutations(wildtype, &p.2))
        .collect();
    let scores = mean_fold_predictions(task, folds, &sequences, &vec![None; sequences.len()])?;
    Ok(proposals
        .into_iter()
        .zip(scores)
        .map(
            |((trial, alpha, mutations), discovery_score)| SteeredVariant {
                fold: None,
                trial,
                alpha,
                latents: Vec::new(),
                mutations,
                discovery_score,
            },
        )
        .collect())
}

/// One row of the steering results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n_latents: Option<usize>,
    pub n_proposed: usize,
    pub n_unique: usize,
    pub summary: Summary,
    pub mean_true_fitness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringTable {
    pub rows: Vec<MethodSummary>,
    pub reports: Vec<VariantReport>,
}

impl SteeringTable {
    pub fn row(&self, method: &str, n_latents: Option<usize>) -> Option<&MethodSummary> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.n_latents == n_latents)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,n_latents,n_proposed,n_unique,n_scored,mean,std,max,top10,top20,true_fitness\n",
        );
        for r in &self.rows {
            let s = &r.summary;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
                r.method,
                r.n_latents.map_or(String::new(), |c| c.to_string()),
                r.n_proposed,
                r.n_unique,
                s.n,
                s.mean,
                s.std,
                s.max,
                s.top10,
                s.top20,
                r.mean_true_fitness
                    .map_or(String::new(), |t| format!("{t:.4}"))
            );
        }
        out
    }

    /// Every scored variant of every method.
    pub fn variants_csv(&self) -> String {
        let mut out = String::new();
        for (i, r) in self.reports.iter().enumerate() {
            let csv = r.to_csv();
            out.push_str(if i == 0 {
                &csv
            } else {
                csv.split_once('\n').map_or("", |x| x.1)
            });
        }
        out
    }
}

fn unique_count(variants: &[SteeredVariant]) -> usize {
    variants
        .iter()
        .map(|v| mutation_list(&v.mutations))
        .collect::<HashSet<_>>()
        .len()
}

/// Circuit steering at every latent count of `spec`, each with its matched
/// random baseline, followed by CAA under each contrast rule. The top
/// `spec.top_n` proposals by discovery score (a random `top_n` for the
/// random baseline) are scored by `evaluator`.
pub fn steering_table(
    task: &FitnessTask<'_>,
    folds: &[FoldCircuit],
    evaluator: &FitnessProbe,
    spec: &SteeringSpec,
    contrasts: &[ContrastRule],
) -> Result<SteeringTable> {
    let wildtype = &task.library.wildtype;
    let eval = |seqs: &[Vec<usize>]| task.predict(evaluator, seqs);
    let rule = &task.library.rule;
    let truth = |s: &[usize]| rule.score(s);
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut push = |method: String,
                    n_latents: Option<usize>,
                    variants: &[SteeredVariant],
                    selection: Selection|
     -> Result<()> {
        let report = evaluate_variants(
            &method,
            wildtype,
            variants,
            spec.top_n,
            selection,
            Some(&eval),
            Some(&truth),
        )?;
        rows.push(MethodSummary {
            method,
            n_latents,
            n_proposed: variants.len(),
            n_unique: unique_count(variants),
            summary: report.summary,
            mean_true_fitness: report.mean_true_fitness(),
        });
        reports.push(report);
        Ok(())
    };
    for &c in &spec.n_latents {
        let steered = circuit_variants(task, folds, spec, c)?;
        push("circuit".into(), Some(c), &steered, Selection::TopDiscovery)?;
        let random = random_variants(task, folds, &steered, spec.seed.wrapping_add(c as u64))?;
        push(
            "random".into(),
            Some(c),
            &random,
            Selection::Random(spec.seed.wrapping_add(c as u64)),
        )?;
    }
    for &rule in contrasts {
        let variants = caa_variants(task, folds, spec, rule)?;
        let name = match rule {
            ContrastRule::Extremes => "caa-extremes",
            ContrastRule::Functional => "caa-functional",
        };
        push(name.into(), None, &variants, Selection::TopDiscovery)?;
    }
    Ok(SteeringTable { rows, reports })
}
