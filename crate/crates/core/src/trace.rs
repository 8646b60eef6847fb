//! Parsing of contrastive reasoning traces.
//!
//! A conforming completion has four sections: reference evidence
//! (`#Reference Evidence:` or `#Reference Documents:`), a per-document
//! analysis (`#Analysis:`), a single `#Explanation:` and a short `#Answer:`.
//! The parser is lenient about prose between sections and about markdown
//! decoration around the markers, and strict about the presence and order of
//! `#Explanation:` and `#Answer:`.
//!
//! Every extracted field is canonical: passages and rationales have their
//! whitespace collapsed and no field contains a section marker, so
//! [`CragTrace::to_text`] followed by [`parse_trace`] reproduces the same
//! structured fields.

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::prompt::collapse_whitespace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Relevant,
    Irrelevant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub doc_index: usize,
    pub passage: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Analysis {
    pub doc_index: usize,
    pub passage: String,
    pub verdict: Verdict,
    pub rationale: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CragTrace {
    pub reference_evidence: Vec<Evidence>,
    pub analyses: Vec<Analysis>,
    pub explanation: String,
    pub answer: String,
    pub raw: String,
}

/// Serialized form carried between pipeline stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub question_id: String,
    #[serde(flatten)]
    pub trace: CragTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Evidence,
    Analysis,
    Explanation,
    Answer,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Evidence => "evidence",
            Stage::Analysis => "analysis",
            Stage::Explanation => "explanation",
            Stage::Answer => "answer",
        })
    }
}

/// Parse failure. `span` is a character range within the raw text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseError {
    pub stage: Stage,
    pub message: String,
    pub span: Range<usize>,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} stage: {} (chars {}..{})",
            self.stage, self.message, self.span.start, self.span.end
        )
    }
}

impl std::error::Error for ParseError {}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePartition {
    pub relevant: BTreeSet<usize>,
    pub irrelevant: BTreeSet<usize>,
    /// Documents given both verdicts; they are kept in `relevant`.
    pub conflicts: BTreeSet<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Evidence,
    Analysis,
    Explanation,
    Answer,
}

#[derive(Debug, Clone, Copy)]
struct Marker {
    section: Section,
    start: usize,
    content_start: usize,
}

fn section_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)(?:\*\*)?#[ \t]*(reference[ \t]+evidence|reference[ \t]+documents|analysis|explanation|answer)\b[ \t]*(:)?(?:\*\*)?",
        )
        .unwrap()
    })
}

/// Any `#Header:` style marker at the start of a line, known or not.
fn generic_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t>*_-]*#[ \t]*[A-Za-z][A-Za-z \t]{0,40}:").unwrap())
}

fn entry_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?im)^[ \t>]*(?:[-*•+][ \t]*)?(?:\*\*|__)?(?:(?:document|doc)[ \t]*#?[ \t]*)?\[(\d{1,6})\](?:\*\*|__)?[ \t]*:?",
        )
        .unwrap()
    })
}

fn relevance_label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)[*_]*\brelevance[*_]*\s*:[*_]*").unwrap())
}

fn passage_label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^[*_]*passage\s+claims?[*_]*\s*:?[*_]*").unwrap())
}

fn markers(text: &str) -> Vec<Marker> {
    section_re()
        .captures_iter(text)
        .filter_map(|c| {
            let whole = c.get(0)?;
            let name = c.get(1)?.as_str().to_ascii_lowercase();
            let has_colon = c.get(2).is_some();
            let section = if name.starts_with("reference") {
                Section::Evidence
            } else if name == "analysis" {
                Section::Analysis
            } else if name == "explanation" {
                Section::Explanation
            } else {
                Section::Answer
            };
            if matches!(section, Section::Explanation | Section::Answer) && !has_colon {
                return None;
            }
            Some(Marker {
                section,
                start: whole.start(),
                content_start: whole.end(),
            })
        })
        .collect()
}

/// Start offsets of every section boundary, sorted.
fn boundaries(text: &str, markers: &[Marker]) -> Vec<usize> {
    let mut all: Vec<usize> = markers.iter().map(|m| m.start).collect();
    all.extend(generic_marker_re().find_iter(text).map(|m| m.start()));
    all.sort_unstable();
    all.dedup();
    all
}

fn block_end(bounds: &[usize], from: usize, len: usize) -> usize {
    bounds.iter().copied().find(|&b| b >= from).unwrap_or(len)
}

fn char_span(text: &str, bytes: Range<usize>) -> Range<usize> {
    let start = text[..bytes.start].chars().count();
    let end = start + text[bytes.start..bytes.end].chars().count();
    start..end
}

fn err(text: &str, stage: Stage, message: impl Into<String>, bytes: Range<usize>) -> ParseError {
    ParseError {
        stage,
        message: message.into(),
        span: char_span(text, bytes),
    }
}

/// Trims whitespace and any number of enclosing `**` pairs.
fn strip_decoration(s: &str) -> String {
    let mut out = s.trim();
    while out.len() >= 4 && out.starts_with("**") && out.ends_with("**") {
        out = out[2..out.len() - 2].trim();
    }
    out.to_string()
}

/// Text after the last `#Answer:` marker, cut at the next section marker.
pub fn extract_answer(completion: &str) -> Result<String, ParseError> {
    let marks = markers(completion);
    let bounds = boundaries(completion, &marks);
    let Some(last) = marks.iter().rev().find(|m| m.section == Section::Answer) else {
        return Err(err(
            completion,
            Stage::Answer,
            "missing \"#Answer:\" marker",
            0..completion.len(),
        ));
    };
    let end = block_end(&bounds, last.content_start, completion.len());
    Ok(strip_decoration(&completion[last.content_start..end]))
}

struct Entry<'a> {
    doc_index: usize,
    text: &'a str,
    start: usize,
    end: usize,
}

fn entries(text: &str, region: Range<usize>) -> Vec<Entry<'_>> {
    let slice = &text[region.clone()];
    let found: Vec<_> = entry_re().captures_iter(slice).collect();
    let mut out = Vec::with_capacity(found.len());
    for (i, caps) in found.iter().enumerate() {
        let whole = caps.get(0).expect("match");
        let end = found
            .get(i + 1)
            .map_or(slice.len(), |n| n.get(0).expect("match").start());
        let doc_index = caps[1].parse().expect("at most six digits");
        out.push(Entry {
            doc_index,
            text: &slice[whole.end()..end],
            start: region.start + whole.start(),
            end: region.start + end,
        });
    }
    out
}

const POSITIVE: [&str; 3] = ["relevant", "helpful", "supports"];
const NEGATIVE: [&str; 2] = ["irrelevant", "unrelated"];
const NEGATIONS: [&str; 24] = [
    "not", "no", "never", "neither", "nor", "non", "without", "hardly", "isn't", "isnt", "aren't", "arent", "wasn't",
    "wasnt", "weren't", "werent", "doesn't", "doesnt", "don't", "dont", "didn't", "didnt", "cannot", "can't",
];

fn verdict_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .replace('’', "'")
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .map(|t| t.trim_matches('\'').to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Relevant if a positive cue appears without a negation in the three
/// preceding tokens; irrelevant on a negative cue or a negated positive one.
pub fn detect_verdict(sentence: &str) -> Option<Verdict> {
    let tokens = verdict_tokens(sentence);
    let negated = |i: usize| {
        tokens[i.saturating_sub(3)..i]
            .iter()
            .any(|t| NEGATIONS.contains(&t.as_str()))
    };
    let mut saw_negated_positive = false;
    for (i, t) in tokens.iter().enumerate() {
        if POSITIVE.contains(&t.as_str()) {
            if negated(i) {
                saw_negated_positive = true;
            } else {
                return Some(Verdict::Relevant);
            }
        }
    }
    if saw_negated_positive || tokens.iter().any(|t| NEGATIVE.contains(&t.as_str())) {
        return Some(Verdict::Irrelevant);
    }
    None
}

fn split_analysis(text: &str) -> (String, String) {
    let (passage, rationale) = match relevance_label_re().find(text) {
        Some(m) => (&text[..m.start()], &text[m.end()..]),
        None => ("", text),
    };
    let passage = collapse_whitespace(passage);
    let passage = match passage_label_re().find(&passage) {
        Some(m) => passage[m.end()..].trim().to_string(),
        None => passage,
    };
    (passage, collapse_whitespace(rationale))
}

/// Parses a completion into the four-stage trace. `k` is the number of
/// documents shown to the model; cited indexes must lie in `1..=k`.
pub fn parse_trace(completion: &str, k: usize) -> Result<CragTrace, ParseError> {
    let len = completion.len();
    let marks = markers(completion);
    let bounds = boundaries(completion, &marks);

    let Some(answer_mark) = marks.iter().rev().find(|m| m.section == Section::Answer).copied() else {
        return Err(err(completion, Stage::Answer, "missing \"#Answer:\" marker", 0..len));
    };
    let answer_end = block_end(&bounds, answer_mark.content_start, len);
    let answer = strip_decoration(&completion[answer_mark.content_start..answer_end]);
    if answer.is_empty() {
        return Err(err(
            completion,
            Stage::Answer,
            "answer is empty",
            answer_mark.start..answer_end,
        ));
    }

    let Some(expl_mark) = marks
        .iter()
        .rev()
        .find(|m| m.section == Section::Explanation && m.start < answer_mark.start)
        .copied()
    else {
        let message = if marks.iter().any(|m| m.section == Section::Explanation) {
            "\"#Explanation:\" must precede \"#Answer:\""
        } else {
            "missing \"#Explanation:\" marker"
        };
        return Err(err(completion, Stage::Explanation, message, 0..answer_mark.start));
    };
    let expl_end = block_end(&bounds, expl_mark.content_start, len);
    let explanation = strip_decoration(&completion[expl_mark.content_start..expl_end]);
    if explanation.is_empty() {
        return Err(err(
            completion,
            Stage::Explanation,
            "explanation is empty",
            expl_mark.start..expl_end,
        ));
    }

    if k == 0 {
        return Err(err(completion, Stage::Evidence, "k must be at least 1", 0..0));
    }
    let before = |s: Section| {
        marks
            .iter()
            .find(|m| m.section == s && m.start < expl_mark.start)
            .copied()
    };
    let evidence_mark = before(Section::Evidence);
    let analysis_mark = before(Section::Analysis);

    let mut reference_evidence = Vec::new();
    let mut evidence_end = 0;
    if let Some(m) = evidence_mark {
        evidence_end = block_end(&bounds, m.content_start, len);
        for e in entries(completion, m.content_start..evidence_end) {
            if e.doc_index == 0 || e.doc_index > k {
                return Err(err(
                    completion,
                    Stage::Evidence,
                    format!("evidence cites document [{}] outside 1..={k}", e.doc_index),
                    e.start..e.end,
                ));
            }
            reference_evidence.push(Evidence {
                doc_index: e.doc_index,
                passage: collapse_whitespace(e.text),
            });
        }
    }

    let analysis_start = match analysis_mark {
        Some(m) => m.content_start,
        None if evidence_mark.is_some() => evidence_end,
        None => 0,
    };
    let analysis_end = block_end(&bounds, analysis_start, len).max(analysis_start);
    let mut analyses = Vec::new();
    for e in entries(completion, analysis_start..analysis_end) {
        let span = e.start..e.end;
        if e.doc_index == 0 || e.doc_index > k {
            return Err(err(
                completion,
                Stage::Analysis,
                format!("analysis cites document [{}] outside 1..={k}", e.doc_index),
                span,
            ));
        }
        let (passage, rationale) = split_analysis(e.text);
        let Some(verdict) = detect_verdict(&rationale) else {
            return Err(err(
                completion,
                Stage::Analysis,
                format!("no relevance verdict for document [{}]", e.doc_index),
                span,
            ));
        };
        analyses.push(Analysis {
            doc_index: e.doc_index,
            passage,
            verdict,
            rationale,
        });
    }

    if reference_evidence.is_empty() && analyses.is_empty() {
        return Err(err(
            completion,
            Stage::Evidence,
            "no document index is cited",
            0..expl_mark.start,
        ));
    }

    Ok(CragTrace {
        reference_evidence,
        analyses,
        explanation,
        answer,
        raw: completion.to_string(),
    })
}

impl CragTrace {
    /// Concatenates the four stages in prompt order, ending with
    /// `#Answer: <answer>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.reference_evidence.is_empty() {
            out.push_str("#Reference Evidence:\n");
            for e in &self.reference_evidence {
                out.push_str(&format!("[{}]: {}\n", e.doc_index, e.passage));
            }
            out.push('\n');
        }
        if !self.analyses.is_empty() {
            out.push_str("#Analysis:\n");
            for a in &self.analyses {
                if a.passage.is_empty() {
                    out.push_str(&format!("[{}]: Relevance: {}\n", a.doc_index, a.rationale));
                } else {
                    out.push_str(&format!(
                        "[{}]: Passage claims: {} Relevance: {}\n",
                        a.doc_index, a.passage, a.rationale
                    ));
                }
            }
            out.push('\n');
        }
        out.push_str("#Explanation:\n");
        out.push_str(&self.explanation);
        out.push_str("\n\n#Answer: ");
        out.push_str(&self.answer);
        out
    }

    /// The structured fields, without the raw text.
    pub fn fields(&self) -> (&[Evidence], &[Analysis], &str, &str) {
        (
            &self.reference_evidence,
            &self.analyses,
            &self.explanation,
            &self.answer,
        )
    }
}

pub fn extract_partition(trace: &CragTrace) -> ContrastivePartition {
    let mut partition = ContrastivePartition::default();
    for a in &trace.analyses {
        match a.verdict {
            Verdict::Relevant => {
                partition.relevant.insert(a.doc_index);
            }
            Verdict::Irrelevant => {
                partition.irrelevant.insert(a.doc_index);
            }
        }
    }
    let conflicts: BTreeSet<usize> = partition
        .relevant
        .intersection(&partition.irrelevant)
        .copied()
        .collect();
    for d in &conflicts {
        partition.irrelevant.remove(d);
    }
    partition.conflicts = conflicts;
    partition
}

/// Document indexes mentioned by the evidence or analysis stages.
pub fn cited_documents(trace: &CragTrace) -> BTreeSet<usize> {
    trace
        .reference_evidence
        .iter()
        .map(|e| e.doc_index)
        .chain(trace.analyses.iter().map(|a| a.doc_index))
        .collect()
}
