use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SteeredVariant;
use crate::error::{Error, Result};
use crate::lm::{apply_mutations, vocab};

/// Table statistics of a set of evaluator scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    /// Mean of the best tenth, at least one sequence.
    pub top10: f64,
    /// Mean of the best fifth, at least one sequence.
    pub top20: f64,
}

pub fn summarize(scores: &[f64]) -> Result<Summary> {
    if scores.is_empty() {
        return Err(Error::InvalidInput("no scores to summarize".into()));
    }
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let top = |share: usize| {
        let k = (n * share).div_ceil(100).max(1);
        sorted[..k].iter().sum::<f64>() / k as f64
    };
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(Summary {
        n,
        mean,
        std: var.sqrt(),
        max: sorted[0],
        top10: top(10),
        top20: top(20),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRecord {
    pub sequence: String,
    pub mutations: String,
    pub discovery_score: f32,
    pub evaluator_score: f32,
    /// Score of the rule that generated the library, when known.
    pub true_fitness: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub method: String,
    pub records: Vec<VariantRecord>,
    pub summary: Summary,
}

/// How the scored subset is drawn from the proposed variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    /// Highest discovery scores, ties by proposal order.
    TopDiscovery,
    /// Uniformly at random.
    Random(u64),
}

/// Scores a batch of sequences.
pub type Evaluator<'a> = dyn Fn(&[Vec<usize>]) -> Result<Vec<f32>> + Sync + 'a;
/// Ground-truth fitness of one sequence.
pub type Truth<'a> = dyn Fn(&[usize]) -> f32 + Sync + 'a;

/// Picks `top_n` variants by `selection`, scores them with `evaluator` and
/// summarizes the evaluator scores.
pub fn evaluate_variants(
    method: &str,
    wildtype: &[usize],
    variants: &[SteeredVariant],
    top_n: usize,
    selection: Selection,
    evaluator: Option<&Evaluator<'_>>,
    truth: Option<&Truth<'_>>,
) -> Result<VariantReport> {
    let evaluator = evaluator
        .ok_or_else(|| Error::Config("variant evaluation needs an evaluator probe".into()))?;
    if variants.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{method}: no variants to evaluate"
        )));
    }
    let mut order: Vec<usize> = (0..variants.len()).collect();
    match selection {
        Selection::TopDiscovery => order.sort_by(|&a, &b| {
            variants[b]
                .discovery_score
                .total_cmp(&variants[a].discovery_score)
                .then(a.cmp(&b))
        }),
        Selection::Random(seed) => order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    order.truncate(top_n.max(1));
    let picked: Vec<&SteeredVariant> = order.iter().map(|&i| &variants[i]).collect();
    let sequences: Vec<Vec<usize>> = picked
        .iter()
        .map(|v| apply_mutations(wildtype, &v.mutations))
        .collect();
    let scores = evaluator(&sequences)?;
    if scores.len() != sequences.len() {
        return Err(Error::InvalidInput(format!(
            "evaluator returned {} scores for {} sequences",
            scores.len(),
            sequences.len()
        )));
    }
    let records: Vec<VariantRecord> = picked
        .iter()
        .zip(&sequences)
        .zip(&scores)
        .map(|((v, s), &e)| VariantRecord {
            sequence: vocab::decode(s),
            mutations: mutation_list(&v.mutations),
            discovery_score: v.discovery_score,
            evaluator_score: e,
            true_fitness: truth.map(|f| f(s)),
        })
        .collect();
    let summary = summarize(&scores.iter().map(|&s| s as f64).collect::<Vec<_>>())?;
    Ok(VariantReport {
        method: method.to_string(),
        records,
        summary,
    })
}

pub(crate) fn mutation_list(mutations: &[crate::lm::Mutation]) -> String {
    mutations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(":")
}

impl VariantReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "method,sequence,mutations,discovery_score,evaluator_score,true_fitness\n",
        );
        for r in &self.records {
            let truth = r.true_fitness.map_or(String::new(), |t| t.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.method, r.sequence, r.mutations, r.discovery_score, r.evaluator_score, truth
            );
        }
        out
    }

    /// Mean rule fitness of the scored variants, when the rule is known.
    pub fn mean_true_fitness(&self) -> Option<f64> {
        let t: Vec<f32> = self.records.iter().filter_map(|r| r.true_fitness).collect();
        (!t.is_empty()).then(|| t.iter().map(|&x| x as f64).sum::<f64>() / t.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_score_fills_every_column() {
        let s = summarize(&[0.7]).unwrap();
        assert_eq!((s.mean, s.max, s.top10, s.top20), (0.7, 0.7, 0.7, 0.7));
        assert_eq!(s.std, 0.0);
    }

    #[test]
    fn summaries_are_ordered() {
        let scores: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 / 10.0).collect();
        let s = summarize(&scores).unwrap();
        assert!(s.max >= s.top10 && s.top10 >= s.top20 && s.top20 >= s.mean);
        // 10% of 37 rounds up to 4 sequences
        let mut sorted = scores.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        assert!((s.top10 - sorted[..4].iter().sum::<f64>() / 4.0).abs() < 1e-12);
        assert!(summarize(&[]).is_err());
    }
}
