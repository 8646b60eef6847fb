use crag_demo::{parse_completion, parse_documents, render_prompt, score_answer};
use serde_json::Value;

fn json(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

const DOCS: &str = "\
Catch Me If You Can | A 2002 film directed by Steven Spielberg.
Frank Abagnale | A con artist whose story inspired a film.

The Terminal | A 2004 film starring Tom Hanks.
";

#[test]
fn blank_lines_are_skipped_and_titles_split() {
    let docs = parse_documents(DOCS);
    assert_eq!(docs.len(), 3);
    assert_eq!(docs[0].title, "Catch Me If You Can");
    assert_eq!(docs[2].id, "doc003");
    assert_eq!(parse_documents("just a body")[0].title, "");
}

#[test]
fn crag_prompt_numbers_the_best_documents() {
    let out = json(render_prompt("crag", "When was Catch Me If You Can released?", DOCS, 2));
    assert_eq!(out["doc_order"].as_array().unwrap().len(), 2);
    assert_eq!(out["doc_order"][0], "doc001");
    let text = out["text"].as_str().unwrap();
    assert!(text.contains("[1] Catch Me If You Can: A 2002 film"));
    assert!(!text.contains("[3]"));
}

#[test]
fn baseline_prompt_ignores_documents() {
    let out = json(render_prompt("baseline", "Who directed Jaws?", "", 5));
    assert!(out["text"].as_str().unwrap().contains("Who directed Jaws?"));
    assert_eq!(out["ranking"].as_array().unwrap().len(), 0);
}

#[test]
fn render_reports_bad_input() {
    assert!(json(render_prompt("poem", "q", DOCS, 2))["error"].is_string());
    assert!(json(render_prompt("rag", "q", "", 2))["error"].is_string());
}

#[test]
fn worked_example_partitions_and_covers() {
    let completion = include_str!("../../core/tests/fixtures/catch_me_if_you_can.txt");
    let out = json(parse_completion(completion, 5));
    assert!(out["error"].is_null(), "{out}");
    let irrelevant: Vec<u64> = out["partition"]["irrelevant"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .collect();
    assert!(irrelevant.contains(&3));
    assert!(out["trace"]["answer"].as_str().unwrap().contains("2002"));
}

#[test]
fn missing_answer_reports_the_stage() {
    let out = json(parse_completion("#Explanation: nothing to see", 2));
    assert_eq!(out["parse_error"]["stage"], "answer");
}

#[test]
fn scoring_shows_both_metrics() {
    let out = json(score_answer("It came out in 2002.", "2002", "nq"));
    assert_eq!(out["strict"], false);
    assert_eq!(out["flexible"], true);
    assert_eq!(out["correct"], true);

    let fever = json(score_answer("#Answer: Supported", "SUPPORTS", "fever"));
    assert_eq!(fever["fever_label"], "SUPPORTS");
    assert_eq!(fever["correct"], true);

    assert!(json(score_answer("x", "", "nq"))["error"].is_string());
    assert!(json(score_answer("x", "y", "squad"))["error"].is_string());
}
