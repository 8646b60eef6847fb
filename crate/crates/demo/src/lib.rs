//! WebAssembly bindings for the browser playground. Every export takes
//! plain strings and returns a JSON string; failures come back as
//! `{"error": ...}` rather than exceptions.

use std::str::FromStr;

use crag_core::corpus::Retriever;
use crag_core::demos::strict_match;
use crag_core::eval::{flexible_exact_match, map_fever_label, score};
use crag_core::trace::{cited_documents, extract_partition, ParseError};
use crag_core::{parse_trace, Bm25Index, Corpus, Document, PromptFamily, PromptKit, RetrievalConfig, Task};
use serde_json::{json, Value};
use wasm_bindgen::prelude::wasm_bindgen;

fn to_json(value: Value) -> String {
    value.to_string()
}

fn error(message: impl ToString) -> String {
    to_json(json!({ "error": message.to_string() }))
}

/// One document per non-empty line, `Title | body` or just a body.
pub fn parse_documents(text: &str) -> Vec<Document> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| {
            let id = format!("doc{:03}", i + 1);
            match line.split_once(" | ") {
                Some((title, body)) => Document::new(id, title.trim(), body.trim()),
                None => Document::new(id, "", line),
            }
        })
        .collect()
}

/// Ranks the pasted documents with BM25 and renders the top `k` into the
/// chosen prompt family.
#[wasm_bindgen]
pub fn render_prompt(family: &str, question: &str, documents: &str, k: usize) -> String {
    let family = match family {
        "baseline" => PromptFamily::Baseline,
        "rag" => PromptFamily::Rag,
        "crag" => PromptFamily::Crag,
        other => return error(format!("unknown prompt family {other:?}")),
    };
    let docs = parse_documents(documents);
    let mut ranking = Vec::new();
    let mut chosen = Vec::new();
    if family.uses_documents() {
        let corpus = match Corpus::from_documents(docs) {
            Ok(c) => c,
            Err(e) => return error(e),
        };
        let index = match Bm25Index::build(&corpus) {
            Ok(i) => i,
            Err(e) => return error(e),
        };
        let cfg = RetrievalConfig {
            top_k: k.max(1),
            ..RetrievalConfig::default()
        };
        let ranked = match index.retrieve("demo", question, &cfg) {
            Ok(r) => r,
            Err(e) => return error(e),
        };
        for entry in &ranked.entries {
            let doc = corpus.get(&entry.doc_id).expect("ranked id is in the corpus");
            ranking.push(json!({ "id": doc.id, "title": doc.title, "score": entry.score }));
            chosen.push(doc.clone());
        }
    }
    match PromptKit::default().render(family, question, &chosen) {
        Ok(p) => to_json(json!({ "text": p.text, "doc_order": p.doc_order, "ranking": ranking })),
        Err(e) => error(e),
    }
}

fn parse_error_json(e: &ParseError) -> Value {
    json!({ "stage": e.stage, "message": e.message, "span": [e.span.start, e.span.end] })
}

/// Parses a completion into its four sections, with the relevant and
/// irrelevant partition and citation coverage over `k` documents.
#[wasm_bindgen]
pub fn parse_completion(completion: &str, k: usize) -> String {
    match parse_trace(completion, k) {
        Ok(trace) => {
            let partition = extract_partition(&trace);
            let cited = cited_documents(&trace);
            let missing: Vec<usize> = (1..=k).filter(|i| !cited.contains(i)).collect();
            to_json(json!({
                "trace": {
                    "reference_evidence": trace.reference_evidence,
                    "analyses": trace.analyses,
                    "explanation": trace.explanation,
                    "answer": trace.answer,
                },
                "partition": partition,
                "cited": cited,
                "missing": missing,
                "full_coverage": missing.is_empty(),
            }))
        }
        Err(e) => to_json(json!({ "error": e.to_string(), "parse_error": parse_error_json(&e) })),
    }
}

/// Scores a prediction against gold answers, one per line.
#[wasm_bindgen]
pub fn score_answer(prediction: &str, gold: &str, task: &str) -> String {
    let task = match Task::from_str(task.trim()) {
        Ok(t) => t,
        Err(e) => return error(e),
    };
    let golds: Vec<String> = gold
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if golds.is_empty() {
        return error("no gold answer given");
    }
    to_json(json!({
        "strict": strict_match(prediction, &golds),
        "flexible": flexible_exact_match(prediction, &golds),
        "fever_label": map_fever_label(prediction).map(|l| l.as_str()),
        "correct": score(task, prediction, &golds),
    }))
}
