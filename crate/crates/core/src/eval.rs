//! Scoring, perturbations and evaluation reports.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, DEFAULT_EXCLUSION_DEPTH};
use crate::demos::{QaInstance, Task};
use crate::pipeline::Pipeline;
use crate::prompt::PromptFamily;
use crate::trace::extract_answer;

/// Lowercase, drop punctuation, collapse whitespace.
pub fn flexible_normalize(s: &str) -> String {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn drop_leading_article(s: &str) -> &str {
    for article in ["a ", "an ", "the "] {
        if let Some(rest) = s.strip_prefix(article) {
            if !rest.is_empty() {
                return rest;
            }
        }
    }
    s
}

/// True when some normalized gold answer occurs inside the normalized
/// prediction. Leading articles are dropped from gold answers.
pub fn flexible_exact_match(prediction: &str, gold_answers: &[String]) -> bool {
    let pred = flexible_normalize(prediction);
    gold_answers.iter().any(|g| {
        let g = flexible_normalize(g);
        let g = drop_leading_article(&g);
        !g.is_empty() && pred.contains(g)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeverLabel {
    #[serde(rename = "SUPPORTS")]
    Supports,
    #[serde(rename = "REFUTES")]
    Refutes,
    #[serde(rename = "NOT ENOUGH INFO")]
    NotEnoughInfo,
}

impl FeverLabel {
    pub const ALL: [FeverLabel; 3] = [FeverLabel::Supports, FeverLabel::Refutes, FeverLabel::NotEnoughInfo];

    pub fn as_str(self) -> &'static str {
        match self {
            FeverLabel::Supports => "SUPPORTS",
            FeverLabel::Refutes => "REFUTES",
            FeverLabel::NotEnoughInfo => "NOT ENOUGH INFO",
        }
    }
}

impl FromStr for FeverLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FeverLabel::ALL
            .into_iter()
            .find(|l| l.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("not a FEVER label: {s:?}"))
    }
}

const NEI_PHRASES: [&str; 7] = [
    "not enough info",
    "not enough information",
    "notenoughinfo",
    "unverifiable",
    "cannot be verified",
    "can not be verified",
    "insufficient information",
];
const SUPPORT_WORDS: [&str; 7] = ["supports", "support", "supported", "true", "yes", "correct", "entails"];
const REFUTE_WORDS: [&str; 8] = [
    "refutes",
    "refute",
    "refuted",
    "false",
    "no",
    "incorrect",
    "contradicts",
    "contradicted",
];
const FEVER_NEGATIONS: [&str; 4] = ["not", "isn't", "isnt", "never"];

/// Maps free text to a FEVER label through a fixed synonym table.
/// Returns `None` when nothing or more than one label matches.
pub fn map_fever_label(prediction: &str) -> Option<FeverLabel> {
    let text = match extract_answer(prediction) {
        Ok(a) => a,
        Err(_) => prediction.to_string(),
    };
    let lowered = text.to_lowercase().replace('’', "'");
    let phrase = lowered
        .split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>();
    let joined = phrase.join(" ");
    if NEI_PHRASES.iter().any(|p| joined.contains(p)) {
        return Some(FeverLabel::NotEnoughInfo);
    }
    let mut found = BTreeSet::new();
    for (i, tok) in phrase.iter().enumerate() {
        let negated = i > 0 && FEVER_NEGATIONS.contains(&phrase[i - 1]);
        if SUPPORT_WORDS.contains(tok) {
            found.insert(if negated {
                FeverLabel::Refutes
            } else {
                FeverLabel::Supports
            });
        } else if REFUTE_WORDS.contains(tok) {
            found.insert(FeverLabel::Refutes);
        }
    }
    if found.len() == 1 {
        found.into_iter().next()
    } else {
        None
    }
}

pub fn fever_match(prediction: &str, gold: FeverLabel) -> bool {
    map_fever_label(prediction) == Some(gold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationKind {
    #[default]
    None,
    Shuffle,
    Noise,
}

impl FromStr for PerturbationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(PerturbationKind::None),
            "shuffle" => Ok(PerturbationKind::Shuffle),
            "noise" => Ok(PerturbationKind::Noise),
            other => Err(format!("unknown perturbation {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub seed: u64,
    /// Distractors inserted in count mode.
    pub noise_count: usize,
    /// Replace half of the documents (rounded up) instead of inserting.
    pub fraction_mode: bool,
    /// Distractors come from outside this many top-ranked documents.
    pub exclusion_depth: usize,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self {
            kind: PerturbationKind::None,
            seed: 0,
            noise_count: 2,
            fraction_mode: false,
            exclusion_depth: DEFAULT_EXCLUSION_DEPTH,
        }
    }
}

impl PerturbationSpec {
    pub fn shuffle(seed: u64) -> Self {
        Self {
            kind: PerturbationKind::Shuffle,
            seed,
            ..Default::default()
        }
    }

    pub fn noise(seed: u64, noise_count: usize) -> Self {
        Self {
            kind: PerturbationKind::Noise,
            seed,
            noise_count,
            ..Default::default()
        }
    }

    pub fn noise_fraction(seed: u64) -> Self {
        Self {
            kind: PerturbationKind::Noise,
            seed,
            fraction_mode: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PerturbError> {
        if self.kind == PerturbationKind::Noise && self.noise_count == 0 && !self.fraction_mode {
            return Err(PerturbError::InvalidSpec(
                "noise needs noise_count >= 1 or fraction mode".into(),
            ));
        }
        Ok(())
    }

    pub fn distractors_needed(&self, k: usize) -> usize {
        if self.fraction_mode {
            k.div_ceil(2)
        } else {
            self.noise_count
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PerturbError {
    #[error("need {needed} distractors, got {available}")]
    InsufficientDistractors { needed: usize, available: usize },
    #[error("distractor {0:?} is already among the documents")]
    NotDisjoint(String),
    #[error("invalid perturbation: {0}")]
    InvalidSpec(String),
}

/// Seeded uniform permutation.
pub fn perturb_shuffle<T: Clone>(docs: &[T], seed: u64) -> Vec<T> {
    let mut out = docs.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Count mode inserts `noise_count` distractors at seeded positions;
/// fraction mode overwrites half of the documents (rounded up).
pub fn perturb_noise(
    docs: &[Document],
    distractors: &[Document],
    spec: &PerturbationSpec,
) -> Result<Vec<Document>, PerturbError> {
    let present: HashSet<&str> = docs.iter().map(|d| d.id.as_str()).collect();
    if let Some(d) = distractors.iter().find(|d| present.contains(d.id.as_str())) {
        return Err(PerturbError::NotDisjoint(d.id.clone()));
    }
    let needed = spec.distractors_needed(docs.len());
    if distractors.len() < needed {
        return Err(PerturbError::InsufficientDistractors {
            needed,
            available: distractors.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = docs.to_vec();
    if spec.fraction_mode {
        let mut positions: Vec<usize> = sample(&mut rng, docs.len(), needed).into_vec();
        positions.sort_unstable();
        for (pos, d) in positions.into_iter().zip(distractors) {
            out[pos] = d.clone();
        }
    } else {
        for d in &distractors[..needed] {
            let pos = rng.gen_range(0..=out.len());
            out.insert(pos, d.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub prediction: String,
    pub correct: bool,
    pub doc_order: Vec<String>,
    /// The completion had no answer marker; the whole text was scored.
    #[serde(default)]
    pub answer_marker_missing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub pipeline: PromptFamily,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_item: Vec<ItemResult>,
    pub perturbation: Option<PerturbationSpec>,
    pub config_fingerprint: String,
    pub seeds: BTreeMap<String, u64>,
    pub train_task: Option<Task>,
    pub backend_id: String,
}

impl EvalReport {
    pub fn from_items(task: Task, pipeline: PromptFamily, per_item: Vec<ItemResult>) -> Self {
        let correct = per_item.iter().filter(|i| i.correct).count();
        let n = per_item.len();
        Self {
            task,
            pipeline,
            n,
            correct,
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            per_item,
            perturbation: None,
            config_fingerprint: String::new(),
            seeds: BTreeMap::new(),
            train_task: None,
            backend_id: String::new(),
        }
    }

    pub fn table(&self) -> String {
        let perturbation = match self.perturbation {
            None => "none".to_string(),
            Some(p) => format!("{:?}", p.kind).to_lowercase(),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<9} {:<12} {:>6} {:>8} {:>9}",
            "task", "pipeline", "perturbation", "n", "correct", "accuracy"
        );
        let _ = writeln!(
            out,
            "{:<10} {:<9} {:<12} {:>6} {:>8} {:>8.2}%",
            self.task.as_str(),
            self.pipeline.as_str(),
            perturbation,
            self.n,
            self.correct,
            self.accuracy * 100.0
        );
        out
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset mixes tasks {0} and {1}; evaluate one task at a time")]
    MixedTasks(Task, Task),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error("report {0} has no train-task tag")]
    MissingTrainTask(usize),
    #[error("two reports for train task {0} and eval task {1}")]
    DuplicateCell(Task, Task),
}

pub fn score(task: Task, prediction: &str, gold_answers: &[String]) -> bool {
    match task {
        Task::Fever => gold_answers
            .first()
            .and_then(|g| g.parse::<FeverLabel>().ok())
            .is_some_and(|g| fever_match(prediction, g)),
        _ => flexible_exact_match(prediction, gold_answers),
    }
}

/// Retrieve, perturb, render, generate and score every instance of a
/// single-task dataset. Item failures are scored incorrect.
pub fn evaluate(
    dataset: &[QaInstance],
    pipeline: &Pipeline,
    family: PromptFamily,
    perturbation: &PerturbationSpec,
) -> Result<EvalReport, EvalError> {
    let task = dataset.first().ok_or(EvalError::EmptyDataset)?.task;
    if let Some(other) = dataset.iter().find(|i| i.task != task) {
        return Err(EvalError::MixedTasks(task, other.task));
    }
    perturbation.validate()?;

    let prepared: Vec<_> = dataset
        .iter()
        .map(|inst| pipeline.prepare(&inst.id, &inst.question, family, perturbation))
        .collect();
    let prompts: Vec<&str> = prepared
        .iter()
        .filter_map(|p| p.as_ref().ok().map(|p| p.prompt.text.as_str()))
        .collect();
    let mut completions = pipeline
        .gateway
        .batch_generate(&prompts, &pipeline.params, pipeline.parallelism)
        .into_iter();

    let per_item = dataset
        .iter()
        .zip(prepared)
        .map(|(inst, prep)| {
            let mut item = ItemResult {
                id: inst.id.clone(),
                prediction: String::new(),
                correct: false,
                doc_order: Vec::new(),
                answer_marker_missing: false,
                error: None,
            };
            let prep = match prep {
                Ok(p) => p,
                Err(e) => {
                    item.error = Some(e.to_string());
                    return item;
                }
            };
            item.doc_order = prep.prompt.doc_order;
            match completions.next().expect("one completion per prepared prompt") {
                Ok(c) => {
                    item.prediction = match extract_answer(&c.text) {
                        Ok(a) => a,
                        Err(_) => {
                            item.answer_marker_missing = true;
                            c.text.trim().to_string()
                        }
                    };
                    item.correct = score(task, &item.prediction, &inst.gold_answers);
                }
                Err(e) => item.error = Some(e.to_string()),
            }
            item
        })
        .collect();

    let mut report = EvalReport::from_items(task, family, per_item);
    if perturbation.kind != PerturbationKind::None {
        report.perturbation = Some(*perturbation);
    }
    report.backend_id = pipeline.gateway.backend_id().to_string();
    report.seeds.insert("perturbation".into(), perturbation.seed);
    if let Some(seed) = pipeline.params.seed {
        report.seeds.insert("generation".into(), seed);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub train_task: Task,
    pub eval_task: Task,
    pub accuracy: f64,
    pub in_domain: bool,
}

/// Train-task by eval-task accuracy grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CrossTaskMatrix {
    pub train_tasks: Vec<Task>,
    pub eval_tasks: Vec<Task>,
    pub cells: Vec<MatrixCell>,
}

impl CrossTaskMatrix {
    pub fn get(&self, train: Task, eval: Task) -> Option<&MatrixCell> {
        self.cells.iter().find(|c| c.train_task == train && c.eval_task == eval)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<10}", "train\\eval");
        for e in &self.eval_tasks {
            let _ = write!(out, " {:>10}", e.as_str());
        }
        out.push('\n');
        for t in &self.train_tasks {
            let _ = write!(out, "{:<10}", t.as_str());
            for e in &self.eval_tasks {
                match self.get(*t, *e) {
                    Some(c) if c.in_domain => {
                        let _ = write!(out, " {:>9.2}*", c.accuracy * 100.0);
                    }
                    Some(c) => {
                        let _ = write!(out, " {:>10.2}", c.accuracy * 100.0);
                    }
                    None => {
                        let _ = write!(out, " {:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn cross_task_report(reports: &[EvalReport]) -> Result<CrossTaskMatrix, EvalError> {
    let mut cells = BTreeMap::new();
    for (i, r) in reports.iter().enumerate() {
        let train = r.train_task.ok_or(EvalError::MissingTrainTask(i))?;
        if cells.insert((train, r.task), r.accuracy).is_some() {
            return Err(EvalError::DuplicateCell(train, r.task));
        }
    }
    let train_tasks: BTreeSet<Task> = cells.keys().map(|(t, _)| *t).collect();
    let eval_tasks: BTreeSet<Task> = cells.keys().map(|(_, e)| *e).collect();
    Ok(CrossTaskMatrix {
        train_tasks: train_tasks.into_iter().collect(),
        eval_tasks: eval_tasks.into_iter().collect(),
        cells: cells
            .into_iter()
            .map(|((train_task, eval_task), accuracy)| MatrixCell {
                train_task,
                eval_task,
                accuracy,
                in_domain: train_task == eval_task,
            })
            .collect(),
    })
}
