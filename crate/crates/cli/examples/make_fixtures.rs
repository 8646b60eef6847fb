//! Regenerates the checked-in fixtures under `crates/cli/fixtures`.
//!
//!     cargo run -p crag-cli --example make_fixtures
//!
//! `eval50/` is a 50-question corpus, dataset and mock script: 40 of the
//! clean replies contain a gold answer, as do 40 shuffled and 35 noisy ones. `annotation/annotations.jsonl` holds
//! 10,000 recorded teacher completions whose filter funnel is known by
//! construction.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crag_core::demos::AnnotationRecord;
use crag_core::gateway::{fingerprint, MockScriptLine};
use crag_core::{Corpus, Document, Gateway, MockBackend, PerturbationSpec, Pipeline, PromptFamily, QaInstance, Task};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mir", "ven", "tal", "dor", "esh", "ri", "bal", "nu", "sor", "fen", "gal", "tho", "var", "quin", "zel",
    "ard", "mos", "pel", "ur", "cas", "len", "dra",
];

fn name(rng: &mut ChaCha8Rng, parts: usize) -> String {
    let mut s: String = (0..parts).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
    s[..1].make_ascii_uppercase();
    s
}

fn unique_names(rng: &mut ChaCha8Rng, n: usize, parts: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let candidate = name(rng, parts);
        if seen.insert(candidate.clone()) {
            out.push(candidate);
        }
    }
    out
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item).unwrap());
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

fn crag_trace(question_subject: &str, k: usize, gold_slot: usize, answer: &str, evidence: &str) -> String {
    let mut s = format!("#Reference Evidence:\n[{gold_slot}]: {evidence}\n\n#Analysis:\n");
    for i in 1..=k {
        if i == gold_slot {
            let _ = writeln!(
                s,
                "[{i}] Passage claims: {evidence} Relevance: Relevant, it answers the question directly."
            );
        } else {
            let _ = writeln!(s, "[{i}] Passage claims: unrelated details. Relevance: Irrelevant, it does not concern {question_subject}.");
        }
    }
    let _ = write!(
        s,
        "\n#Explanation: Only document [{gold_slot}] speaks about {question_subject}; the others discuss different subjects.\n\n#Answer: {answer}\n"
    );
    s
}

fn eval50(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let entities = unique_names(&mut rng, 50, 3);
    let people = unique_names(&mut rng, 60, 2);
    let mut docs = Vec::new();
    let mut dataset = Vec::new();
    let kinds = ["bridge", "observatory", "canal", "lighthouse", "library"];
    for (i, entity) in entities.iter().enumerate() {
        let kind = kinds[i % kinds.len()];
        let builder = format!("{} {}", people[i], people[(i + 7) % 60]);
        let year = 1820 + (i * 3) % 150;
        docs.push(Document::new(
            format!("gold-{i:02}"),
            format!("{entity} {kind}"),
            format!("The {entity} {kind} was designed by {builder} and completed in {year}."),
        ));
        docs.push(Document::new(
            format!("near-{i:02}"),
            format!("{entity} region"),
            format!("The {entity} region is known for its {kind} festivals and mild winters."),
        ));
        dataset.push(QaInstance {
            id: format!("nq-{i:02}"),
            question: format!("Who designed the {entity} {kind}?"),
            gold_answers: vec![builder],
            task: Task::Nq,
        });
    }
    let filler_words = [
        "river", "market", "harbor", "valley", "orchard", "guild", "chapel", "railway", "quarry", "meadow",
    ];
    for i in 0..150 {
        let a = filler_words[i % 10];
        let b = filler_words[(i / 10) % 10];
        let place = name(&mut rng, 2);
        docs.push(Document::new(
            format!("filler-{i:03}"),
            format!("{place} {a}"),
            format!("The {a} of {place} lies beside an old {b}; travellers note its quiet streets."),
        ));
    }
    let corpus = Corpus::from_documents(docs.clone()).unwrap();
    let pipeline = Pipeline::bm25(corpus, Gateway::new(Arc::new(MockBackend::new(Default::default(), "")))).unwrap();

    // Clean prompts get 40 replies containing the gold answer. Shuffled
    // prompts get the same outcomes; under noise the first five flip to a
    // wrong answer.
    let specs = [
        PerturbationSpec::default(),
        PerturbationSpec::shuffle(7),
        PerturbationSpec::noise(7, 2),
    ];
    let mut script = Vec::new();
    let mut correct = [0; 3];
    for (s, spec) in specs.iter().enumerate() {
        for (i, inst) in dataset.iter().enumerate() {
            let prepared = pipeline
                .prepare(&inst.id, &inst.question, PromptFamily::Crag, spec)
                .unwrap();
            let k = prepared.docs.len();
            let gold_slot = prepared
                .docs
                .iter()
                .position(|d| d.id == format!("gold-{i:02}"))
                .expect("gold retrieved")
                + 1;
            let subject = inst
                .question
                .trim_start_matches("Who designed the ")
                .trim_end_matches('?')
                .to_string();
            let gold = &inst.gold_answers[0];
            let evidence = format!("The {subject} was designed by {gold}.");
            let flipped = s == 2 && i < 5;
            let response = match i % 5 {
                _ if i >= 40 || flipped => match i % 3 {
                    0 => crag_trace(&subject, k, gold_slot, &people[(i + 20) % 60], &evidence),
                    1 => "I could not find the designer in the documents.".to_string(),
                    _ => crag_trace(&subject, k, gold_slot, "unknown", &evidence),
                },
                0 => crag_trace(&subject, k, gold_slot, gold, &evidence),
                1 => crag_trace(
                    &subject,
                    k,
                    gold_slot,
                    &format!("It was designed by {gold}."),
                    &evidence,
                ),
                2 => crag_trace(&subject, k, gold_slot, &gold.to_uppercase(), &evidence),
                3 => format!("The {subject} was designed by {gold}."),
                _ => crag_trace(&subject, k, gold_slot, &format!("**{gold}**"), &evidence),
            };
            if i < 40 && !flipped {
                correct[s] += 1;
            }
            script.push(MockScriptLine {
                fingerprint: fingerprint(&prepared.prompt.text),
                response: Some(response),
                error: None,
            });
        }
    }
    assert_eq!(correct, [40, 40, 35]);

    let corpus_lines: Vec<_> = docs
        .iter()
        .map(|d| serde_json::json!({"id": d.id, "title": d.title, "text": d.body}))
        .collect();
    write_jsonl(&dir.join("corpus.jsonl"), &corpus_lines);
    write_jsonl(&dir.join("dataset.jsonl"), &dataset);
    write_jsonl(&dir.join("mock_script.jsonl"), &script);
    std::fs::write(
        dir.join("config.toml"),
        "corpus = \"corpus.jsonl\"\ndataset = \"dataset.jsonl\"\nfamily = \"crag\"\n\n\
         [retrieval]\ntop_k = 5\n\n\
         [backend]\nkind = \"mock\"\nscript = \"mock_script.jsonl\"\ndefault_response = \"#Answer: unknown\"\n\n\
         [seeds]\nperturbation = 7\nbalance = 7\ncorruption = 7\n\n\
         [demos.caps]\nnq = 20\n",
    )
    .unwrap();
}

/// How many of each outcome a task gets. Stage-1 survivors are
/// `partial + full`; stage-2 survivors are `full`.
struct Plan {
    task: Task,
    full: usize,
    partial: usize,
    unparsed: usize,
    total: usize,
}

#[derive(Clone, Copy)]
enum Outcome {
    Full,
    Partial,
    Unparsed,
    Wrong,
}

const STYLE_PLAIN: u8 = 0;
const STYLE_WORKED: u8 = 1;

fn render_completion(
    style: u8,
    evidence: &[usize],
    analysed: &[usize],
    gold_slot: usize,
    answer: &str,
    subject: &str,
) -> String {
    let (ev, an, ex, ans, bullet) = match style {
        STYLE_PLAIN => ("#Reference Evidence:", "#Analysis:", "#Explanation:", "#Answer:", ""),
        STYLE_WORKED => (
            "# Reference Documents:",
            "# Analysis:",
            "# Explanation:",
            "# Answer:",
            "- ",
        ),
        _ => (
            "**#Reference Evidence:**",
            "**#Analysis:**",
            "**#Explanation:**",
            "**#Answer:**",
            "",
        ),
    };
    let mut s = String::new();
    if !evidence.is_empty() {
        let _ = writeln!(s, "{ev}");
        for &i in evidence {
            let _ = writeln!(s, "{bullet}[{i}]: passage {i} on {subject}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "{an}");
    for &i in analysed {
        if i == gold_slot {
            let _ = writeln!(
                s,
                "{bullet}[{i}] Passage claims: fact {i}. Relevance: Relevant, it states the answer."
            );
        } else {
            let _ = writeln!(s, "{bullet}[{i}] Irrelevant.");
        }
    }
    let _ = write!(
        s,
        "\n{ex}\nDocument [{gold_slot}] supports the answer while the rest do not.\n\n{ans} {answer}\n"
    );
    s
}

fn unparsed_completion(variant: usize, answer: &str, subject: &str) -> String {
    match variant % 4 {
        0 => format!("#Analysis:\n[1] Passage claims: fact. Relevance: Relevant.\n\n#Explanation:\nBecause of [1].\n\nAnswer: {answer}\n"),
        1 => format!("#Reference Evidence:\n[1]: passage on {subject}\n\n#Answer: {answer}\n"),
        2 => format!("#Analysis:\n[1] Passage claims: fact. Relevance: it mentions {subject}.\n\n#Explanation:\nSee [1].\n\n#Answer: {answer}\n"),
        _ => format!("#Reference Evidence:\n[7]: passage on {subject}\n\n#Explanation:\nSee [7].\n\n#Answer: {answer}\n"),
    }
}

fn annotations(path: &Path) {
    let plans = [
        Plan {
            task: Task::Nq,
            full: 1100,
            partial: 1011,
            unparsed: 60,
            total: 2500,
        },
        Plan {
            task: Task::Popqa,
            full: 750,
            partial: 472,
            unparsed: 60,
            total: 2500,
        },
        Plan {
            task: Task::Triviaqa,
            full: 510,
            partial: 1157,
            unparsed: 60,
            total: 2500,
        },
        Plan {
            task: Task::Fever,
            full: 485,
            partial: 515,
            unparsed: 60,
            total: 2500,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let answers = unique_names(&mut rng, 4000, 3);
    let labels = ["SUPPORTS", "REFUTES", "NOT ENOUGH INFO"];
    let mut records = Vec::new();
    for plan in &plans {
        let mut outcomes = Vec::with_capacity(plan.total);
        outcomes.extend(std::iter::repeat_n(Outcome::Full, plan.full));
        outcomes.extend(std::iter::repeat_n(Outcome::Partial, plan.partial));
        outcomes.extend(std::iter::repeat_n(Outcome::Unparsed, plan.unparsed));
        let wrong = plan.total - plan.full - plan.partial - plan.unparsed;
        outcomes.extend(std::iter::repeat_n(Outcome::Wrong, wrong));
        outcomes.shuffle(&mut rng);

        for (i, outcome) in outcomes.into_iter().enumerate() {
            let subject = name(&mut rng, 3);
            let (question, gold): (String, Vec<String>) = match plan.task {
                Task::Nq => (
                    format!("who founded the town of {subject}"),
                    vec![answers[rng.gen_range(0..4000)].clone()],
                ),
                Task::Popqa => {
                    let a = answers[rng.gen_range(0..4000)].clone();
                    (
                        format!("Who was the producer of {subject}?"),
                        vec![a.clone(), format!("{a} Studio")],
                    )
                }
                Task::Triviaqa => (
                    format!("Which explorer first mapped the {subject} coast?"),
                    vec![format!(
                        "{} {}",
                        answers[rng.gen_range(0..4000)],
                        answers[rng.gen_range(0..4000)]
                    )],
                ),
                Task::Fever => (
                    format!("{subject} was founded by {}.", answers[rng.gen_range(0..4000)]),
                    vec![labels[rng.gen_range(0..3)].to_string()],
                ),
            };
            let gold_slot = rng.gen_range(1..=5);
            let correct = match rng.gen_range(0..5) {
                0 => gold[gold.len() - 1].clone(),
                1 => format!("{}.", gold[0]),
                2 => gold[0].to_uppercase(),
                3 => format!("**{}**", gold[0]),
                _ => gold[0].clone(),
            };
            let wrong_answer = if plan.task == Task::Fever {
                labels.iter().find(|l| **l != gold[0]).unwrap().to_string()
            } else {
                match rng.gen_range(0..3) {
                    0 => format!("in {}", gold[0]),
                    1 => format!("{}, according to document [{gold_slot}]", gold[0]),
                    _ => answers[rng.gen_range(0..4000)].clone(),
                }
            };
            let style = rng.gen_range(0..3u8);
            let all: Vec<usize> = (1..=5).collect();
            let completion = match outcome {
                Outcome::Full => {
                    let evidence = if rng.gen_bool(0.8) {
                        vec![gold_slot]
                    } else {
                        all.clone()
                    };
                    render_completion(style, &evidence, &all, gold_slot, &correct, &subject)
                }
                Outcome::Partial => {
                    if rng.gen_bool(0.5) {
                        let covered: Vec<usize> = (1..=5).filter(|&j| j == gold_slot || j <= 2).collect();
                        render_completion(style, &[gold_slot], &covered, gold_slot, &correct, &subject)
                    } else {
                        render_completion(style, &[], &all, gold_slot, &correct, &subject)
                    }
                }
                Outcome::Unparsed => unparsed_completion(i, &correct, &subject),
                Outcome::Wrong => render_completion(style, &[gold_slot], &all, gold_slot, &wrong_answer, &subject),
            };
            records.push(AnnotationRecord {
                instance: QaInstance {
                    id: format!("{}-{i:04}", plan.task.as_str()),
                    question,
                    gold_answers: gold,
                    task: plan.task,
                },
                completion,
                doc_order: Vec::new(),
                prompt: String::new(),
            });
        }
    }
    records.shuffle(&mut rng);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    write_jsonl(path, &records);
}

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    eval50(&root.join("eval50"));
    annotations(&root.join("annotation/annotations.jsonl"));
    println!("fixtures written under {}", root.display());
}
