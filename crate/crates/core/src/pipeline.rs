//! Per-instance orchestration: retrieve, perturb, render.
//!
//! [`Pipeline`] bundles everything needed to turn a question into a prompt.
//! Generation is done in bulk by the callers through
//! [`Gateway::batch_generate`](crate::gateway::Gateway::batch_generate).

use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Bm25Index, Corpus, CorpusError, Document, RetrievalConfig, Retriever};
use crate::eval::{perturb_noise, perturb_shuffle, PerturbError, PerturbationKind, PerturbationSpec};
use crate::gateway::{Gateway, GenerationParams};
use crate::prompt::{PromptError, PromptFamily, PromptKit, RenderedPrompt};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error("noise perturbation needs a lexical index to draw distractors from")]
    NoDistractorSource,
}

/// Seed for one instance, derived from a run seed and the instance id.
pub fn derive_seed(base: u64, id: &str) -> u64 {
    let digest = Sha256::digest(format!("{base}:{id}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("eight bytes"))
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub docs: Vec<Document>,
    pub prompt: RenderedPrompt,
}

#[derive(Clone)]
pub struct Pipeline {
    pub corpus: Arc<Corpus>,
    pub retriever: Arc<dyn Retriever>,
    /// Source of noise distractors.
    pub distractor_index: Option<Arc<Bm25Index>>,
    pub prompts: PromptKit,
    pub gateway: Gateway,
    pub retrieval: RetrievalConfig,
    pub params: GenerationParams,
    pub parallelism: usize,
}

impl Pipeline {
    /// BM25 over `corpus` for both retrieval and distractors.
    pub fn bm25(corpus: Corpus, gateway: Gateway) -> Result<Self, CorpusError> {
        let index = Arc::new(Bm25Index::build(&corpus)?);
        Ok(Self {
            corpus: Arc::new(corpus),
            retriever: index.clone(),
            distractor_index: Some(index),
            prompts: PromptKit::default(),
            gateway,
            retrieval: RetrievalConfig::default(),
            params: GenerationParams::default(),
            parallelism: 1,
        })
    }

    pub fn retrieve_documents(&self, query_id: &str, question: &str) -> Result<Vec<Document>, PipelineError> {
        let ranked = self.retriever.retrieve(query_id, question, &self.retrieval)?;
        Ok(self.corpus.resolve(&ranked)?)
    }

    /// Builds the prompt for one question. Baseline prompts skip retrieval
    /// and ignore the perturbation.
    pub fn prepare(
        &self,
        query_id: &str,
        question: &str,
        family: PromptFamily,
        perturbation: &PerturbationSpec,
    ) -> Result<Prepared, PipelineError> {
        if !family.uses_documents() {
            return Ok(Prepared {
                docs: Vec::new(),
                prompt: self.prompts.render(family, question, &[])?,
            });
        }
        let mut docs = self.retrieve_documents(query_id, question)?;
        let seed = derive_seed(perturbation.seed, query_id);
        match perturbation.kind {
            PerturbationKind::None => {}
            PerturbationKind::Shuffle => {
                if docs.len() >= 2 {
                    docs = perturb_shuffle(&docs, seed);
                }
            }
            PerturbationKind::Noise => {
                let index = self
                    .distractor_index
                    .as_ref()
                    .ok_or(PipelineError::NoDistractorSource)?;
                let needed = perturbation.distractors_needed(docs.len());
                let distractors =
                    index.sample_distractors(&self.corpus, question, needed, perturbation.exclusion_depth, seed)?;
                let spec = PerturbationSpec { seed, ..*perturbation };
                docs = perturb_noise(&docs, &distractors, &spec)?;
            }
        }
        let prompt = self.prompts.render(family, question, &docs)?;
        Ok(Prepared { docs, prompt })
    }
}
