//! The masked protein language model that circuits are traced in.

pub mod config;
pub mod corpus;
pub mod fasta;
pub mod model;
pub mod pretrain;
pub mod trace;
pub mod vocab;

pub use config::LmConfig;
pub use corpus::{
    apply_mutations, generate_corpus, Corpus, CorpusSpec, FitnessRule, MotifSpec, Mutation,
    Sequence, Variant, VariantLibrary,
};
pub use fasta::{read_fasta, write_fasta};
pub use model::{FrozenAttention, MaskedLm};
pub use pretrain::{pretrain_lm, PretrainConfig, PretrainReport};
pub use trace::{ActivationTrace, CapturedSequence, LayerTrace};
