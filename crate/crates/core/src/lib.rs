//! Contrastive retrieval-augmented generation toolkit.
//!
//! The crate covers the whole loop: lexical retrieval ([`corpus`]), prompt
//! rendering ([`prompt`]), generation against a chat backend or a scripted
//! mock ([`gateway`]), parsing of the four-stage reasoning trace
//! ([`trace`]), construction and filtering of training demonstrations
//! ([`demos`]) and evaluation under document perturbations ([`eval`]).

pub mod corpus;
pub mod demos;
pub mod eval;
pub mod gateway;
pub mod jsonl;
pub mod pipeline;
pub mod prompt;
pub mod trace;

pub use corpus::{Bm25Index, Corpus, Document, RankedDocuments, RetrievalConfig, Retriever};
pub use demos::{Demonstration, FunnelStats, QaInstance, Task};
pub use eval::{EvalReport, FeverLabel, PerturbationKind, PerturbationSpec};
pub use gateway::{Completion, Gateway, GatewayError, GenerationParams, MockBackend};
pub use pipeline::Pipeline;
pub use prompt::{PromptFamily, PromptKit, RenderedPrompt};
pub use trace::{parse_trace, ContrastivePartition, CragTrace, ParseError};
