//! Document corpus, lexical BM25 index and distractor sampling.
//!
//! A [`Corpus`] is loaded from JSON Lines (`{"id", "title", "text"}` per
//! line). [`Bm25Index`] scores every document against a query and returns a
//! ranking with ties broken by ascending document id, so the ranking does
//! not depend on the order of lines in the corpus file.
//! [`PrecomputedRankings`] replays rankings produced elsewhere.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_EXCLUSION_DEPTH: usize = 100;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate document id {id:?} (first seen on line {first_line})")]
    DuplicateId { id: String, line: usize, first_line: usize },
    #[error("line {line}: document id is empty")]
    EmptyId { line: usize },
    #[error("line {line}: document {id:?} has an empty body")]
    EmptyBody { id: String, line: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("question is empty after normalization")]
    EmptyQuestion,
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("corpus of {size} documents cannot supply {n} distractors outside the top {depth}")]
    TooSmall { size: usize, depth: usize, n: usize },
    #[error("no precomputed ranking for query {0:?}")]
    MissingRanking(String),
    #[error("ranking for query {query_id:?} references unknown document {doc_id:?}")]
    UnknownDocument { query_id: String, doc_id: String },
    #[error("ranking for query {query_id:?} lists document {doc_id:?} twice")]
    DuplicateRankingEntry { query_id: String, doc_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    #[serde(rename = "text")]
    pub body: String,
}

impl Document {
    pub fn new(id: impl Into<String>, title: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            body: body.into(),
        }
    }
}

/// An in-memory document collection with unique, non-empty ids.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    lines: Vec<usize>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for (i, doc) in docs.into_iter().enumerate() {
            corpus.push(doc, i + 1)?;
        }
        Ok(corpus)
    }

    pub fn from_jsonl_path(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        Self::from_jsonl_reader(File::open(path)?)
    }

    pub fn from_jsonl_reader(reader: impl Read) -> Result<Self, CorpusError> {
        let mut corpus = Corpus::default();
        for (i, line) in BufReader::new(reader).lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
            corpus.push(doc, line_no)?;
        }
        Ok(corpus)
    }

    fn push(&mut self, doc: Document, line: usize) -> Result<(), CorpusError> {
        if doc.id.is_empty() {
            return Err(CorpusError::EmptyId { line });
        }
        if doc.body.trim().is_empty() {
            return Err(CorpusError::EmptyBody { id: doc.id, line });
        }
        if let Some(&first) = self.by_id.get(&doc.id) {
            return Err(CorpusError::DuplicateId {
                id: doc.id,
                line,
                first_line: self.lines[first],
            });
        }
        self.by_id.insert(doc.id.clone(), self.docs.len());
        self.lines.push(line);
        self.docs.push(doc);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.by_id.get(id).map(|&i| &self.docs[i])
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    /// Resolves a ranking to the documents it names, in ranking order.
    pub fn resolve(&self, ranked: &RankedDocuments) -> Result<Vec<Document>, CorpusError> {
        ranked
            .entries
            .iter()
            .map(|e| {
                self.get(&e.doc_id)
                    .cloned()
                    .ok_or_else(|| CorpusError::UnknownDocument {
                        query_id: ranked.query_id.clone(),
                        doc_id: e.doc_id.clone(),
                    })
            })
            .collect()
    }
}

/// Lowercased alphanumeric runs. Shared by indexing and querying.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    #[default]
    Bm25,
    ExternalAdapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub top_k: usize,
    pub scorer: Scorer,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            scorer: Scorer::Bm25,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.top_k == 0 {
            return Err(CorpusError::InvalidTopK);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDocuments {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedDocuments {
    pub fn ids(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.doc_id.as_str()).collect()
    }
}

/// Anything that can produce a ranked list of documents for a question.
pub trait Retriever: Send + Sync {
    fn retrieve(&self, query_id: &str, question: &str, cfg: &RetrievalConfig) -> Result<RankedDocuments, CorpusError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Immutable inverted index. Documents are stored sorted by id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bm25Index {
    params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    total_len: u64,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl Bm25Index {
    pub fn build(corpus: &Corpus) -> Result<Self, CorpusError> {
        Self::build_with(corpus, Bm25Params::default())
    }

    pub fn build_with(corpus: &Corpus, params: Bm25Params) -> Result<Self, CorpusError> {
        if corpus.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        let mut docs: Vec<&Document> = corpus.documents().iter().collect();
        docs.sort_by(|a, b| a.id.cmp(&b.id));

        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        let mut total_len = 0u64;
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        for (idx, doc) in docs.iter().enumerate() {
            let tokens = tokenize(&indexed_text(doc));
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((idx as u32, count));
            }
            doc_ids.push(doc.id.clone());
            doc_lens.push(tokens.len() as u32);
            total_len += tokens.len() as u64;
        }
        Ok(Self {
            params,
            doc_ids,
            doc_lens,
            total_len,
            postings,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.postings.len()
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    pub fn avg_doc_len(&self) -> f64 {
        self.total_len as f64 / self.doc_ids.len() as f64
    }

    /// Scores for every document, indexed like the sorted id list.
    fn score_all(&self, question: &str) -> Result<Vec<f64>, CorpusError> {
        let terms = query_terms(question);
        if terms.is_empty() {
            return Err(CorpusError::EmptyQuestion);
        }
        let n = self.doc_ids.len() as f64;
        let avgdl = self.avg_doc_len();
        let Bm25Params { k1, b } = self.params;
        let mut scores = vec![0.0f64; self.doc_ids.len()];
        for term in &terms {
            let Some(list) = self.postings.get(term) else {
                continue;
            };
            let df = list.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for &(doc, tf) in list {
                let tf = tf as f64;
                let dl = self.doc_lens[doc as usize] as f64;
                scores[doc as usize] += idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * dl / avgdl));
            }
        }
        Ok(scores)
    }

    /// Full ranking truncated to `depth` entries.
    pub fn rank(&self, question: &str, depth: usize) -> Result<Vec<RankedEntry>, CorpusError> {
        let scores = self.score_all(question)?;
        // doc indexes are already in ascending id order, so index order is the tie rule
        let mut order: Vec<usize> = (0..scores.len()).collect();
        let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
        let depth = depth.min(order.len());
        if depth == 0 {
            return Ok(Vec::new());
        }
        if depth < order.len() {
            order.select_nth_unstable_by(depth - 1, by_rank);
            order.truncate(depth);
        }
        order.sort_by(by_rank);
        Ok(order
            .into_iter()
            .map(|i| RankedEntry {
                doc_id: self.doc_ids[i].clone(),
                score: scores[i],
            })
            .collect())
    }

    /// Samples `n` documents uniformly from those outside the question's top
    /// `exclusion_depth` ranking. The same seed always yields the same sample.
    pub fn sample_distractors(
        &self,
        corpus: &Corpus,
        question: &str,
        n: usize,
        exclusion_depth: usize,
        seed: u64,
    ) -> Result<Vec<Document>, CorpusError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        if self.len() < exclusion_depth + n {
            return Err(CorpusError::TooSmall {
                size: self.len(),
                depth: exclusion_depth,
                n,
            });
        }
        let excluded: HashSet<String> = self
            .rank(question, exclusion_depth)?
            .into_iter()
            .map(|e| e.doc_id)
            .collect();
        let candidates: Vec<&String> = self.doc_ids.iter().filter(|id| !excluded.contains(*id)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample(&mut rng, candidates.len(), n)
            .into_iter()
            .map(|i| {
                let id = candidates[i];
                corpus.get(id).cloned().ok_or_else(|| CorpusError::UnknownDocument {
                    query_id: String::new(),
                    doc_id: id.clone(),
                })
            })
            .collect()
    }
}

impl Retriever for Bm25Index {
    fn retrieve(&self, query_id: &str, question: &str, cfg: &RetrievalConfig) -> Result<RankedDocuments, CorpusError> {
        cfg.validate()?;
        Ok(RankedDocuments {
            query_id: query_id.to_string(),
            entries: self.rank(question, cfg.top_k)?,
        })
    }
}

fn indexed_text(doc: &Document) -> String {
    format!("{} {}", doc.title, doc.body)
}

/// Unique query tokens in first-occurrence order.
pub fn query_terms(question: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    tokenize(question)
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingRecord {
    pub query_id: String,
    pub ranking: Vec<String>,
}

/// Replays rankings computed by an external retriever, keyed by query id.
#[derive(Debug, Clone, Default)]
pub struct PrecomputedRankings {
    rankings: HashMap<String, Vec<String>>,
}

impl PrecomputedRankings {
    pub fn from_records(records: Vec<RankingRecord>) -> Result<Self, CorpusError> {
        let mut rankings = HashMap::new();
        for rec in records {
            let mut seen = HashSet::new();
            for id in &rec.ranking {
                if !seen.insert(id) {
                    return Err(CorpusError::DuplicateRankingEntry {
                        query_id: rec.query_id.clone(),
                        doc_id: id.clone(),
                    });
                }
            }
            rankings.insert(rec.query_id, rec.ranking);
        }
        Ok(Self { rankings })
    }

    pub fn from_jsonl_path(path: impl AsRef<Path>) -> Result<Self, CorpusError> {
        let reader = BufReader::new(File::open(path)?);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::from_records(records)
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }
}

impl Retriever for PrecomputedRankings {
    fn retrieve(&self, query_id: &str, _question: &str, cfg: &RetrievalConfig) -> Result<RankedDocuments, CorpusError> {
        cfg.validate()?;
        let ranking = self
            .rankings
            .get(query_id)
            .ok_or_else(|| CorpusError::MissingRanking(query_id.to_string()))?;
        let n = ranking.len();
        // rank position becomes the score so the entries stay non-increasing
        let entries = ranking
            .iter()
            .take(cfg.top_k)
            .enumerate()
            .map(|(i, id)| RankedEntry {
                doc_id: id.clone(),
                score: (n - i) as f64,
            })
            .collect();
        Ok(RankedDocuments {
            query_id: query_id.to_string(),
            entries,
        })
    }
}
