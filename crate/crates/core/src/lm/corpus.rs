//! Synthetic protein-like corpora with planted motifs and rule-based fitness.
//!
//! Background residues come from a fixed first-order Markov chain (seeded
//! separately from the corpus so that every corpus speaks the same
//! "language"); motifs are then written over random windows.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::vocab::{self, N_AMINO};
use crate::error::{Error, Result};

/// A motif that is planted with some probability and tags its family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub motif: String,
    pub probability: f32,
    pub family: String,
    /// Copies written when the motif is chosen for a sequence.
    #[serde(default = "one")]
    pub copies: usize,
}

fn one() -> usize {
    1
}

impl MotifSpec {
    pub fn new(motif: &str, probability: f32, family: &str) -> Self {
        Self {
            motif: motif.to_string(),
            probability,
            family: family.to_string(),
            copies: 1,
        }
    }
}

/// Deterministic fitness assigned to a sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FitnessRule {
    /// Number of (possibly overlapping) occurrences of the motif.
    MotifCount { motif: String },
    /// Sum of per-residue weights over the sequence.
    ResidueWeights { weights: Vec<(char, f32)> },
}

impl FitnessRule {
    pub fn score(&self, tokens: &[usize]) -> f32 {
        match self {
            FitnessRule::MotifCount { motif } => {
                let (m, _) = vocab::encode(motif);
                if m.is_empty() || m.len() > tokens.len() {
                    return 0.0;
                }
                tokens
                    .windows(m.len())
                    .filter(|w| *w == m.as_slice())
                    .count() as f32
            }
            FitnessRule::ResidueWeights { weights } => tokens
                .iter()
                .map(|&t| {
                    weights
                        .iter()
                        .find(|(c, _)| vocab::token_id(*c) == Some(t))
                        .map_or(0.0, |(_, w)| *w)
                })
                .sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n: usize,
    pub len: usize,
    pub motifs: Vec<MotifSpec>,
    pub fitness: Option<FitnessRule>,
    /// Seed of the background Markov chain.
    pub background_seed: u64,
}

impl CorpusSpec {
    pub fn new(n: usize, len: usize, motifs: Vec<MotifSpec>) -> Self {
        Self {
            n,
            len,
            motifs,
            fitness: None,
            background_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedMotif {
    pub motif: String,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: String,
    pub tokens: Vec<usize>,
    pub families: Vec<String>,
    pub fitness: Option<f32>,
    pub planted: Vec<PlantedMotif>,
}

impl Sequence {
    pub fn from_tokens(id: impl Into<String>, tokens: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            tokens,
            families: Vec::new(),
            fitness: None,
            planted: Vec::new(),
        }
    }

    pub fn residues(&self) -> String {
        vocab::decode(&self.tokens)
    }

    pub fn has_family(&self, family: &str) -> bool {
        self.families.iter().any(|f| f == family)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sequences: Vec<Sequence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn validate(&self, vocab_size: usize, max_len: usize) -> Result<()> {
        for s in &self.sequences {
            if s.tokens.len() > max_len {
                return Err(Error::SequenceTooLong {
                    len: s.tokens.len(),
                    max_len,
                });
            }
            if let Some(&t) = s.tokens.iter().find(|&&t| t >= vocab_size) {
                return Err(Error::InvalidInput(format!(
                    "token id {t} in {} outside vocabulary of {vocab_size}",
                    s.id
                )));
            }
        }
        Ok(())
    }
}

/// First-order Markov chain over amino acids.
#[derive(Debug, Clone)]
pub struct Background {
    initial: Vec<f64>,
    transitions: Vec<Vec<f64>>,
}

impl Background {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_636b_6772_6f75);
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let w: Vec<f64> = (0..N_AMINO)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (1.5 * z).exp()
                })
                .collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        };
        let initial = row(&mut rng);
        let transitions = (0..N_AMINO).map(|_| row(&mut rng)).collect();
        Self {
            initial,
            transitions,
        }
    }

    fn draw(probs: &[f64], rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(len);
        for i in 0..len {
            let t = if i == 0 {
                Self::draw(&self.initial, rng)
            } else {
                Self::draw(&self.transitions[out[i - 1]], rng)
            };
            out.push(t);
        }
        out
    }

    /// Entropy rate of the stationary chain in nats, from its transition rows
    /// weighted by the initial distribution iterated to convergence.
    pub fn entropy_rate(&self) -> f64 {
        let mut pi = self.initial.clone();
        for _ in 0..200 {
            let mut next = vec![0.0; N_AMINO];
            for (i, &p) in pi.iter().enumerate() {
                for (j, &t) in self.transitions[i].iter().enumerate() {
                    next[j] += p * t;
                }
            }
            pi = next;
        }
        pi.iter()
            .zip(&self.transitions)
            .map(|(&p, row)| {
                p * -row
                    .iter()
                    .filter(|&&t| t > 0.0)
                    .map(|&t| t * t.ln())
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Generates `spec.n` sequences of length `spec.len`.
pub fn generate_corpus(seed: u64, spec: &CorpusSpec) -> Result<Corpus> {
    for m in &spec.motifs {
        let (ids, unknown) = vocab::encode(&m.motif);
        if unknown > 0 || ids.is_empty() {
            return Err(Error::InvalidInput(format!(
                "motif `{}` must be non-empty amino-acid letters",
                m.motif
            )));
        }
        if ids.len() > spec.len {
            return Err(Error::InvalidInput(format!(
                "motif `{}` is longer than sequence length {}",
                m.motif, spec.len
            )));
        }
    }
    let background = Background::new(spec.background_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut tokens = background.sample(spec.len, &mut rng);
        let mut occupied = vec![false; spec.len];
        let mut families = Vec::new();
        let mut planted = Vec::new();
        for m in &spec.motifs {
            if rng.random::<f32>() >= m.probability {
                continue;
            }
            let (ids, _) = vocab::encode(&m.motif);
            let mut placed = false;
            for _ in 0..m.copies {
                if let Some(pos) = free_window(&occupied, ids.len(), &mut rng) {
                    tokens[pos..pos + ids.len()].copy_from_slice(&ids);
                    occupied[pos..pos + ids.len()]
                        .iter_mut()
                        .for_each(|o| *o = true);
                    planted.push(PlantedMotif {
                        motif: m.motif.clone(),
                        position: pos,
                    });
                    placed = true;
                }
            }
            if placed && !families.contains(&m.family) {
                families.push(m.family.clone());
            }
        }
        let fitness = spec.fitness.as_ref().map(|r| r.score(&tokens));
        sequences.push(Sequence {
            id: format!("seq_{i}"),
            tokens,
            families,
            fitness,
            planted,
        });
    }
    Ok(Corpus { sequences })
}

/// A uniformly random free window of `width`, trying overlapping-free starts first.
fn free_window(occupied: &[bool], width: usize, rng: &mut impl Rng) -> Option<usize> {
    let starts: Vec<usize> = (0..=occupied.len() - width)
        .filter(|&s| occupied[s..s + width].iter().all(|o| !o))
        .collect();
    starts.choose(rng).copied()
}

/// One substitution relative to a wildtype.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mutation {
    pub position: usize,
    pub from: usize,
    pub to: usize,
}

impl std::fmt::Display for Mutation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}{}{}",
            vocab::token_char(self.from),
            self.position + 1,
            vocab::token_char(self.to)
        )
    }
}

pub fn apply_mutations(wildtype: &[usize], mutations: &[Mutation]) -> Vec<usize> {
    let mut out = wildtype.to_vec();
    for m in mutations {
        out[m.position] = m.to;
    }
    out
}

/// A scored variant of the wildtype, as in a deep mutational scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub tokens: Vec<usize>,
    pub mutations: Vec<Mutation>,
    pub fitness: f32,
    /// Fitness at least that of the wildtype.
    pub functional: bool,
}

/// Wildtype plus a library of scored single and multiple mutants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantLibrary {
    pub wildtype: Vec<usize>,
    pub wildtype_fitness: f32,
    pub rule: FitnessRule,
    pub variants: Vec<Variant>,
}

impl VariantLibrary {
    /// `n_single` distinct single mutants plus `n_multi` mutants carrying
    /// 2..=`max_mutations` substitutions at distinct positions.
    pub fn generate(
        seed: u64,
        wildtype: &[usize],
        rule: &FitnessRule,
        n_single: usize,
        n_multi: usize,
        max_mutations: usize,
    ) -> Result<Self> {
        if wildtype.is_empty() {
            return Err(Error::InvalidInput("empty wildtype".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wt_fit = rule.score(wildtype);
        let make = |mutations: Vec<Mutation>| {
            let tokens = apply_mutations(wildtype, &mutations);
            let fitness = rule.score(&tokens);
            Variant {
                tokens,
                mutations,
                fitness,
                functional: fitness >= wt_fit,
            }
        };
        let mut singles: Vec<Mutation> = (0..wildtype.len())
            .flat_map(|p| {
                (0..N_AMINO)
                    .filter(move |&a| a != wildtype[p])
                    .map(move |a| Mutation {
                        position: p,
                        from: wildtype[p],
                        to: a,
                    })
            })
            .collect();
        singles.shuffle(&mut rng);
        singles.truncate(n_single);
        let mut variants: Vec<Variant> = singles.into_iter().map(|m| make(vec![m])).collect();

        let max_m = max_mutations.clamp(2, wildtype.len().max(2));
        for _ in 0..n_multi {
            let count = rng.random_range(2..=max_m).min(wildtype.len());
            let mut positions: Vec<usize> = (0..wildtype.len()).collect();
            positions.shuffle(&mut rng);
            positions.truncate(count);
            positions.sort_unstable();
            let mutations = positions
                .into_iter()
                .map(|p| {
                    let mut to = rng.random_range(0..N_AMINO - 1);
                    if to >= wildtype[p] {
                        to += 1;
                    }
                    Mutation {
                        position: p,
                        from: wildtype[p],
                        to,
                    }
                })
                .collect();
            variants.push(make(mutations));
        }
        Ok(Self {
            wildtype: wildtype.to_vec(),
            wildtype_fitness: wt_fit,
            rule: rule.clone(),
            variants,
        })
    }

    /// First mutated position of every variant.
    pub fn first_positions(&self) -> Vec<usize> {
        self.variants
            .iter()
            .map(|v| v.mutations.iter().map(|m| m.position).min().unwrap_or(0))
            .collect()
    }
}
