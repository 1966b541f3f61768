//! Phoneme-augmented in-context learning toolkit.
//!
//! The crate is organized along the pipeline an experiment runs through:
//!
//! - [`corpus`]: dataset loading, quality filtering and seeded pool/test splits.
//! - [`g2p`]: rule-file driven grapheme-to-phoneme (and romanization) transducer.
//! - [`tokenize`]: whitespace, per-character and byte-pair-encoding tokenizers.
//! - [`retrieve`]: BM25 indexes, dense cosine retrieval and the example
//!   selection strategies (Script, IPA, Mixed, Harmonic, Split-Half, ...).
//! - [`promptkit`]: task templates and few-shot prompt rendering.
//! - [`inference`]: OpenAI-compatible chat-completion client with a replay cache.
//! - [`metrics`]: BLEU, chrF and token-level F1.
//! - [`harness`]: manifests, end-to-end runs and the overlap / gain analyses.

pub mod corpus;
pub mod g2p;
pub mod harness;
pub mod inference;
pub mod metrics;
pub mod promptkit;
pub mod retrieve;
pub mod rng;
pub mod tokenize;
mod util;

pub use corpus::{CorpusSplit, Example, QualityFilterConfig, Task};
pub use g2p::G2pProfile;
pub use harness::{EvalReport, RunManifest};
pub use inference::{EndpointConfig, ReplayCache};
pub use metrics::MetricConfig;
pub use promptkit::{PromptConfig, PromptTemplate};
pub use retrieve::{Bm25Index, Bm25Params, Channel, RetrievalResult, StrategyId};
pub use tokenize::{TokenStream, Tokenizer};
