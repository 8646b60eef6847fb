//! Prompt rendering for the three prompt families.
//!
//! Templates are plain text with two slots, `{question}` and `{documents}`.
//! The built-in templates live in `templates/`; a directory holding
//! `baseline.txt`, `rag.txt` or `crag.txt` can override any of them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Document;

pub const DEFAULT_DOC_CHAR_CAP: usize = 1500;
pub const DOCUMENTS_HEADER: &str = "#Reference Documents";

const BASELINE: &str = include_str!("../templates/baseline.txt");
const RAG: &str = include_str!("../templates/rag.txt");
const CRAG: &str = include_str!("../templates/crag.txt");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("{0} prompt needs at least one document")]
    NoDocuments(PromptFamily),
    #[error("template {family}: {message}")]
    InvalidTemplate { family: PromptFamily, message: String },
    #[error("i/o error reading template: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptFamily {
    Baseline,
    Rag,
    Crag,
}

impl PromptFamily {
    pub const ALL: [PromptFamily; 3] = [PromptFamily::Baseline, PromptFamily::Rag, PromptFamily::Crag];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptFamily::Baseline => "baseline",
            PromptFamily::Rag => "rag",
            PromptFamily::Crag => "crag",
        }
    }

    pub fn uses_documents(self) -> bool {
        !matches!(self, PromptFamily::Baseline)
    }
}

impl fmt::Display for PromptFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(PromptFamily::Baseline),
            "rag" => Ok(PromptFamily::Rag),
            "crag" | "c-rag" => Ok(PromptFamily::Crag),
            other => Err(format!("unknown prompt family {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Text(String),
    Question,
    Documents,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    family: PromptFamily,
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn parse(family: PromptFamily, source: &str) -> Result<Self, PromptError> {
        let invalid = |message: String| PromptError::InvalidTemplate { family, message };
        let mut segments = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find('{') {
            let Some(close) = rest[open..].find('}') else {
                break;
            };
            let name = &rest[open + 1..open + close];
            let slot = match name {
                "question" => Segment::Question,
                "documents" => Segment::Documents,
                _ => {
                    // not a slot; keep the brace literally
                    push_text(&mut segments, &rest[..open + 1]);
                    rest = &rest[open + 1..];
                    continue;
                }
            };
            push_text(&mut segments, &rest[..open]);
            segments.push(slot);
            rest = &rest[open + close + 1..];
        }
        push_text(&mut segments, rest);

        let count = |s: &Segment| segments.iter().filter(|x| *x == s).count();
        if count(&Segment::Question) != 1 {
            return Err(invalid("expected exactly one {question} slot".into()));
        }
        let doc_slots = count(&Segment::Documents);
        match (family.uses_documents(), doc_slots) {
            (false, 0) | (true, 1) => {}
            (false, _) => return Err(invalid("baseline template must not have a {documents} slot".into())),
            (true, _) => return Err(invalid("expected exactly one {documents} slot".into())),
        }
        let literal: String = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Text(t) => Some(t.as_str()),
                _ => None,
            })
            .collect();
        if literal.matches("#Answer:").count() != 1 {
            return Err(invalid("must contain the \"#Answer:\" marker exactly once".into()));
        }
        if family == PromptFamily::Crag {
            if literal.matches("#Explanation:").count() != 1 {
                return Err(invalid("must contain the \"#Explanation:\" marker exactly once".into()));
            }
            let mut last = 0;
            for n in 1..=4 {
                let tag = format!("{n})");
                match literal[last..].find(&tag) {
                    Some(pos) => last += pos + tag.len(),
                    None => return Err(invalid(format!("requirement {n}) missing or out of order"))),
                }
            }
        }
        Ok(Self { family, segments })
    }

    pub fn family(&self) -> PromptFamily {
        self.family
    }
}

fn push_text(segments: &mut Vec<Segment>, text: &str) {
    if text.is_empty() {
        return;
    }
    if let Some(Segment::Text(prev)) = segments.last_mut() {
        prev.push_str(text);
    } else {
        segments.push(Segment::Text(text.to_string()));
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub family: PromptFamily,
    pub text: String,
    pub doc_order: Vec<String>,
}

/// The three templates plus the per-document character cap.
#[derive(Debug, Clone)]
pub struct PromptKit {
    baseline: PromptTemplate,
    rag: PromptTemplate,
    crag: PromptTemplate,
    doc_char_cap: usize,
}

impl Default for PromptKit {
    fn default() -> Self {
        Self {
            baseline: PromptTemplate::parse(PromptFamily::Baseline, BASELINE).expect("built-in template"),
            rag: PromptTemplate::parse(PromptFamily::Rag, RAG).expect("built-in template"),
            crag: PromptTemplate::parse(PromptFamily::Crag, CRAG).expect("built-in template"),
            doc_char_cap: DEFAULT_DOC_CHAR_CAP,
        }
    }
}

impl PromptKit {
    /// Built-in templates, replaced by any `<family>.txt` found in `dir`.
    pub fn from_dir(dir: impl AsRef<Path>) -> Result<Self, PromptError> {
        let mut kit = Self::default();
        for family in PromptFamily::ALL {
            let path = dir.as_ref().join(format!("{}.txt", family.as_str()));
            if path.exists() {
                let template = PromptTemplate::parse(family, &std::fs::read_to_string(path)?)?;
                *kit.template_mut(family) = template;
            }
        }
        Ok(kit)
    }

    pub fn with_doc_char_cap(mut self, cap: usize) -> Self {
        self.doc_char_cap = cap;
        self
    }

    pub fn doc_char_cap(&self) -> usize {
        self.doc_char_cap
    }

    pub fn template(&self, family: PromptFamily) -> &PromptTemplate {
        match family {
            PromptFamily::Baseline => &self.baseline,
            PromptFamily::Rag => &self.rag,
            PromptFamily::Crag => &self.crag,
        }
    }

    fn template_mut(&mut self, family: PromptFamily) -> &mut PromptTemplate {
        match family {
            PromptFamily::Baseline => &mut self.baseline,
            PromptFamily::Rag => &mut self.rag,
            PromptFamily::Crag => &mut self.crag,
        }
    }

    pub fn render(
        &self,
        family: PromptFamily,
        question: &str,
        docs: &[Document],
    ) -> Result<RenderedPrompt, PromptError> {
        if question.trim().is_empty() {
            return Err(PromptError::EmptyQuestion);
        }
        let docs = if family.uses_documents() {
            if docs.is_empty() {
                return Err(PromptError::NoDocuments(family));
            }
            docs
        } else {
            &[]
        };
        let mut text = String::new();
        for segment in &self.template(family).segments {
            match segment {
                Segment::Text(t) => text.push_str(t),
                Segment::Question => text.push_str(question),
                Segment::Documents => text.push_str(&self.documents_block(docs)),
            }
        }
        Ok(RenderedPrompt {
            family,
            text,
            doc_order: docs.iter().map(|d| d.id.clone()).collect(),
        })
    }

    pub fn render_baseline(&self, question: &str) -> Result<RenderedPrompt, PromptError> {
        self.render(PromptFamily::Baseline, question, &[])
    }

    pub fn render_rag(&self, question: &str, docs: &[Document]) -> Result<RenderedPrompt, PromptError> {
        self.render(PromptFamily::Rag, question, docs)
    }

    pub fn render_crag(&self, question: &str, docs: &[Document]) -> Result<RenderedPrompt, PromptError> {
        self.render(PromptFamily::Crag, question, docs)
    }

    /// The numbered `[i] ...` lines placed under the documents header.
    pub fn documents_block(&self, docs: &[Document]) -> String {
        docs.iter()
            .enumerate()
            .map(|(i, d)| format!("[{}] {}", i + 1, self.slot_content(d)))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// One-line rendering of a document as it appears in a slot.
    pub fn slot_content(&self, doc: &Document) -> String {
        let body = truncate_chars(&collapse_whitespace(&doc.body), self.doc_char_cap);
        let title = collapse_whitespace(&doc.title);
        if title.is_empty() {
            body
        } else {
            format!("{title}: {body}")
        }
    }
}

/// Recovers the numbered document slots from a rendered prompt, as
/// `(slot number, slot content)` pairs in text order.
pub fn scan_documents(text: &str) -> Vec<(usize, String)> {
    let mut lines = text.lines();
    if !lines.any(|l| l.trim_end() == DOCUMENTS_HEADER) {
        return Vec::new();
    }
    let mut slots = Vec::new();
    for line in lines {
        let Some(rest) = line.strip_prefix('[') else {
            break;
        };
        let Some((num, content)) = rest.split_once("] ") else {
            break;
        };
        let Ok(num) = num.parse::<usize>() else {
            break;
        };
        slots.push((num, content.to_string()));
    }
    slots
}

pub fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn truncate_chars(s: &str, cap: usize) -> String {
    match s.char_indices().nth(cap) {
        Some((byte, _)) => s[..byte].to_string(),
        None => s.to_string(),
    }
}
