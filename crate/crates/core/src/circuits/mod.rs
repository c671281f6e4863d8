//! Gradient attribution of transcoder latents against a probe and greedy
//! growth of the smallest prefix of the ranking that recovers the probe's
//! performance.

mod attribution;

pub use attribution::{attribution_scores, latent_gradients, token_attribution, Attribution};

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::MaskedLm;
use crate::probes::{f1, spearman, FamilyProbe, FitnessProbe};
use crate::replacement::{run, BaseContext, Intervention, ReplacementMode, RunOptions};
use crate::tensor::{Tape, Tensor, Var};
use crate::transcoder::Transcoder;

/// A scalar read from the last layer's MLP output (`T x d`).
pub trait Readout: Sync {
    fn output_on(&self, tape: &mut Tape, y_last: Var) -> Result<Var>;

    fn predict(&self, y_last: &Tensor) -> Result<f32> {
        let mut tape = Tape::new();
        let y = tape.constant(y_last.clone());
        let out = self.output_on(&mut tape, y)?;
        Ok(tape.value(out).data()[0])
    }
}

impl Readout for FamilyProbe {
    fn output_on(&self, tape: &mut Tape, y_last: Var) -> Result<Var> {
        let pooled = tape.mean_rows(y_last);
        self.logit_on(tape, pooled)
    }
}

impl Readout for FitnessProbe {
    fn output_on(&self, tape: &mut Tape, y_last: Var) -> Result<Var> {
        let params = self.store.register(tape, false);
        FitnessProbe::output_on(self, tape, &params, y_last, None)
    }
}

/// Ground truth for the test split: family labels scored by F1 on the sign
/// of the readout, or fitness values scored by Spearman correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Targets {
    Labels(Vec<bool>),
    Scores(Vec<f32>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Labels(v) => v.len(),
            Targets::Scores(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn metric(&self, outputs: &[f32]) -> Result<f64> {
        match self {
            Targets::Labels(labels) => {
                let preds: Vec<bool> = outputs.iter().map(|&o| o > 0.0).collect();
                f1(&preds, labels)
            }
            Targets::Scores(scores) => spearman(
                &outputs.iter().map(|&o| o as f64).collect::<Vec<_>>(),
                &scores.iter().map(|&s| s as f64).collect::<Vec<_>>(),
            ),
        }
    }
}

/// Sequences for one discovery task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    /// Positive or functional sequences that attribution is summed over.
    pub validation: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
    pub targets: Targets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverConfig {
    pub task: String,
    /// Mode used to evaluate circuits.
    pub mode: ReplacementMode,
    /// Mode used for attribution gradients; defaults to `mode`.
    pub attribution_mode: Option<ReplacementMode>,
    pub step: usize,
    pub max_nodes: usize,
    /// Share of the clean probe metric the circuit must reach.
    pub clean_fraction: f64,
}

impl DiscoverConfig {
    pub fn new(task: impl Into<String>, mode: ReplacementMode) -> Self {
        Self {
            task: task.into(),
            mode,
            attribution_mode: None,
            step: 32,
            max_nodes: 1000,
            clean_fraction: 0.7,
        }
    }
}

pub fn target_threshold(m_clean: f64, m_all: f64) -> f64 {
    (0.7 * m_clean).min(m_all)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitNode {
    pub layer: usize,
    pub latent: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthStep {
    pub n_nodes: usize,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    pub task: String,
    pub mode: ReplacementMode,
    pub attribution_mode: ReplacementMode,
    pub n_layers: usize,
    pub d_latent: usize,
    pub theta: f64,
    pub m_clean: f64,
    pub m_all: f64,
    pub target_met: bool,
    /// Nodes by descending attribution.
    pub nodes: Vec<CircuitNode>,
    pub history: Vec<GrowthStep>,
}

impl Circuit {
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.nodes.iter().map(|n| (n.layer, n.latent)).collect()
    }

    pub fn latent_fraction(&self) -> f64 {
        self.nodes.len() as f64 / (self.n_layers * self.d_latent) as f64
    }

    pub fn m_circuit(&self) -> Option<f64> {
        self.history.last().map(|s| s.metric)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn base_contexts(
    model: &MaskedLm,
    tc: &Transcoder,
    sequences: &[Vec<usize>],
) -> Result<Vec<BaseContext>> {
    sequences
        .par_iter()
        .map(|s| BaseContext::new(model, tc, s))
        .collect()
}

/// Readout outputs on the ground-truth last-layer MLP outputs.
pub fn clean_outputs(readout: &dyn Readout, bases: &[BaseContext]) -> Result<Vec<f32>> {
    bases
        .par_iter()
        .map(|b| readout.predict(&b.trace.layers.last().expect("at least one layer").y))
        .collect()
}

/// Readout outputs on the last-layer reconstruction under `mode`.
pub fn replacement_outputs(
    model: &MaskedLm,
    tc: &Transcoder,
    readout: &dyn Readout,
    mode: ReplacementMode,
    bases: &[BaseContext],
    intervention: &Intervention,
) -> Result<Vec<f32>> {
    bases
        .par_iter()
        .map(|b| {
            let opts = RunOptions {
                intervention: Some(intervention),
                ..RunOptions::default()
            };
            let out = run(model, tc, mode, b, &b.trace.tokens, &opts)?;
            readout.predict(out.recon.last().expect("at least one layer"))
        })
        .collect()
}

/// Attribution on the validation set followed by growth in steps of
/// `cfg.step` until the circuit metric reaches the threshold or the node
/// budget is spent. A circuit whose readout is constant over the test set
/// scores 0.
pub fn discover(
    model: &MaskedLm,
    tc: &Transcoder,
    readout: &dyn Readout,
    data: &TaskData,
    cfg: &DiscoverConfig,
) -> Result<(Circuit, Attribution)> {
    if data.test.len() != data.targets.len() {
        return Err(Error::InvalidInput(format!(
            "{} test sequences for {} targets",
            data.test.len(),
            data.targets.len()
        )));
    }
    if cfg.step == 0 || cfg.max_nodes == 0 {
        return Err(Error::Config("step and max_nodes must be positive".into()));
    }
    let attribution_mode = cfg.attribution_mode.unwrap_or(cfg.mode);
    let validation = base_contexts(model, tc, &data.validation)?;
    let attribution = attribution_scores(model, tc, readout, attribution_mode, &validation)?;
    drop(validation);
    let test = base_contexts(model, tc, &data.test)?;
    let m_clean = data.targets.metric(&clean_outputs(readout, &test)?)?;
    let all = replacement_outputs(model, tc, readout, cfg.mode, &test, &Intervention::none())?;
    let m_all = data.targets.metric(&all)?;
    let theta = (cfg.clean_fraction * m_clean).min(m_all);
    log::info!(
        "{}: m_clean {m_clean:.4} m_all {m_all:.4} theta {theta:.4}",
        cfg.task
    );

    let ranking = attribution.ranking();
    let budget = cfg.max_nodes.min(ranking.len());
    let mut history = Vec::new();
    let mut size = 0;
    let mut target_met = false;
    while size < budget {
        size = (size + cfg.step).min(budget);
        let nodes: Vec<(usize, usize)> = ranking[..size].iter().map(|n| (n.0, n.1)).collect();
        let keep = Intervention::keep_only(&nodes, tc.n_layers(), tc.d_latent());
        let outputs = replacement_outputs(model, tc, readout, cfg.mode, &test, &keep)?;
        let metric = match data.targets.metric(&outputs) {
            Err(Error::UndefinedMetric(_)) => 0.0,
            other => other?,
        };
        log::debug!("{}: {size} nodes -> {metric:.4}", cfg.task);
        history.push(GrowthStep {
            n_nodes: size,
            metric,
        });
        if metric >= theta {
            target_met = true;
            break;
        }
    }
    let circuit = Circuit {
        task: cfg.task.clone(),
        mode: cfg.mode,
        attribution_mode,
        n_layers: tc.n_layers(),
        d_latent: tc.d_latent(),
        theta,
        m_clean,
        m_all,
        target_met,
        nodes: ranking[..size]
            .iter()
            .map(|&(layer, latent, score)| CircuitNode {
                layer,
                latent,
                score,
            })
            .collect(),
        history,
    };
    Ok((circuit, attribution))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds() {
        assert!((target_threshold(0.92, 0.82) - 0.644).abs() < 1e-12);
        assert_eq!(target_threshold(0.5, 0.3), 0.3);
        assert_eq!(target_threshold(0.0, 0.4), 0.0);
    }

    #[test]
    fn label_metric_uses_logit_sign() {
        let t = Targets::Labels(vec![true, false, true]);
        assert_eq!(t.metric(&[0.3, -1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(t.metric(&[-0.3, 1.0, -2.0]).unwrap(), 0.0);
    }
}
