//! Redundancy-codebook visual token pruning.
//!
//! Tokens are probed against a [`ModelOracle`] (single-token top-1
//! probability, cascaded leave-one-out JSD), filtered into redundant
//! prototypes, and test-time token sequences are pruned by their maximum
//! cosine similarity to those prototypes.
//!
//! ```no_run
//! use redcb_core::{
//!     analysis::AnalysisConfig, build_codebook, prune_budget, synthcorpus, AnalyticOracle,
//!     Profile,
//! };
//!
//! let corpus = synthcorpus::generate(&synthcorpus::SynthParams::default())?;
//! let oracle = AnalyticOracle::for_synthetic(4, 32, AnalyticOracle::DEFAULT_BETA)?;
//! let profile = Profile::Synthetic;
//! let build = build_codebook(
//!     &corpus,
//!     &oracle,
//!     &AnalysisConfig::default(),
//!     &profile.thresholds(),
//!     profile.k_pool(),
//! )?;
//! let pruned = prune_budget(&corpus.images[0].tokens, &build.codebook, 13)?;
//! println!("{:?}", pruned.kept);
//! # Ok::<(), redcb_core::Error>(())
//! ```

pub mod analysis;
pub mod baselines;
pub mod clustering;
pub mod codebook;
pub mod corpus;
mod error;
pub mod export;
pub mod numerics;
pub mod oracle;
pub mod synthcorpus;

pub use analysis::{AnalysisConfig, AnalysisRecord};
pub use codebook::{
    build_codebook, load_codebook, probing_flops, prune_budget, prune_threshold, save_codebook,
    Profile, PruneResult, RedundancyCodebook, Thresholds,
};
pub use corpus::{Corpus, CorpusImage, TokenLabel};
pub use error::{Error, Result};
pub use numerics::{EmbeddingVector, ProbDist, SparseLogits, TokenMatrix};
pub use oracle::{
    AnalyticOracle, CountingOracle, ModelOracle, OracleCapabilities, ReplayOracle, ToyConfig,
    ToyTransformer,
};
