//! Demonstration generation, the two-stage filter, balancing, SFT export
//! and misleading-set construction.
//!
//! Stage 1 keeps demonstrations whose answer strictly equals a gold answer
//! after light normalization. Stage 2 additionally requires the trace to
//! cite every retrieved document and to carry reference evidence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{FeverLabel, PerturbationSpec};
use crate::jsonl::{self, JsonlError};
use crate::pipeline::{derive_seed, Pipeline};
use crate::prompt::PromptFamily;
use crate::trace::{cited_documents, parse_trace, CragTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Nq,
    Popqa,
    Triviaqa,
    Fever,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Nq, Task::Popqa, Task::Triviaqa, Task::Fever];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Nq => "nq",
            Task::Popqa => "popqa",
            Task::Triviaqa => "triviaqa",
            Task::Fever => "fever",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    pub task: Task,
}

impl QaInstance {
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id is empty".into());
        }
        if self.question.trim().is_empty() {
            return Err(format!("{}: question is empty", self.id));
        }
        if self.gold_answers.is_empty() {
            return Err(format!("{}: no gold answers", self.id));
        }
        if self.task == Task::Fever
            && (self.gold_answers.len() != 1 || self.gold_answers[0].parse::<FeverLabel>().is_err())
        {
            return Err(format!(
                "{}: fever instances need exactly one label from SUPPORTS, REFUTES, NOT ENOUGH INFO",
                self.id
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("duplicate instance id {0:?}")]
    DuplicateInstance(String),
    #[error("demonstration {0:?} did not pass both filters; pass force to export it anyway")]
    Unfiltered(String),
    #[error("demonstration {0:?} has no parsed trace")]
    Unparsed(String),
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QaInstance>, DemoError> {
    let items: Vec<QaInstance> = jsonl::read(path)?;
    let mut seen = BTreeSet::new();
    for item in &items {
        item.validate().map_err(DemoError::InvalidInstance)?;
        if !seen.insert(item.id.clone()) {
            return Err(DemoError::DuplicateInstance(item.id.clone()));
        }
    }
    Ok(items)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    #[default]
    Clean,
    Misleading,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub instance: QaInstance,
    pub doc_order: Vec<String>,
    pub prompt: String,
    pub completion: Option<String>,
    pub trace: Option<CragTrace>,
    /// Generation or parse failure, when there is no trace.
    pub error: Option<String>,
    pub stage1_pass: bool,
    pub stage2_pass: bool,
    /// Chosen by per-task balancing.
    pub used: bool,
    pub provenance: Provenance,
}

impl Demonstration {
    pub fn unparsed(&self) -> bool {
        self.trace.is_none()
    }
}

/// Runs the contrastive prompt over every instance and parses the replies.
/// Failures are kept as demonstrations without a trace.
pub fn generate_demonstrations(dataset: &[QaInstance], pipeline: &Pipeline) -> Vec<Demonstration> {
    let none = PerturbationSpec::default();
    let prepared: Vec<_> = dataset
        .iter()
        .map(|inst| pipeline.prepare(&inst.id, &inst.question, PromptFamily::Crag, &none))
        .collect();
    let prompts: Vec<&str> = prepared
        .iter()
        .filter_map(|p| p.as_ref().ok().map(|p| p.prompt.text.as_str()))
        .collect();
    let mut completions = pipeline
        .gateway
        .batch_generate(&prompts, &pipeline.params, pipeline.parallelism)
        .into_iter();

    dataset
        .iter()
        .zip(prepared)
        .map(|(inst, prep)| {
            let mut demo = Demonstration {
                instance: inst.clone(),
                doc_order: Vec::new(),
                prompt: String::new(),
                completion: None,
                trace: None,
                error: None,
                stage1_pass: false,
                stage2_pass: false,
                used: false,
                provenance: Provenance::Clean,
            };
            let prep = match prep {
                Ok(p) => p,
                Err(e) => {
                    demo.error = Some(e.to_string());
                    return demo;
                }
            };
            demo.doc_order = prep.prompt.doc_order.clone();
            demo.prompt = prep.prompt.text;
            match completions.next().expect("one completion per prepared prompt") {
                Ok(c) => {
                    match parse_trace(&c.text, prep.docs.len().max(1)) {
                        Ok(t) => demo.trace = Some(t),
                        Err(e) => demo.error = Some(e.to_string()),
                    }
                    demo.completion = Some(c.text);
                }
                Err(e) => demo.error = Some(e.to_string()),
            }
            demo
        })
        .collect()
}

/// A teacher completion recorded for one instance, as stored in
/// annotation files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    #[serde(flatten)]
    pub instance: QaInstance,
    pub completion: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub doc_order: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub prompt: String,
}

/// Parses recorded completions into demonstrations without calling a
/// backend. `k` is the number of documents the teacher saw.
pub fn replay_annotations(records: Vec<AnnotationRecord>, k: usize) -> Vec<Demonstration> {
    records
        .into_iter()
        .map(|r| {
            let (trace, error) = match parse_trace(&r.completion, k) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            Demonstration {
                instance: r.instance,
                doc_order: r.doc_order,
                prompt: r.prompt,
                completion: Some(r.completion),
                trace,
                error,
                stage1_pass: false,
                stage2_pass: false,
                used: false,
                provenance: Provenance::Clean,
            }
        })
        .collect()
}

/// Lowercase, collapse whitespace, strip terminal punctuation.
pub fn strict_normalize(s: &str) -> String {
    let lowered = s.to_lowercase();
    let collapsed = lowered.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_end_matches(|c: char| c.is_whitespace() || matches!(c, '.' | ',' | '!' | '?' | ';' | ':' | '…' | '。'))
        .to_string()
}

/// Normalized string equality against any gold answer. Answers without
/// any alphanumeric character never match.
pub fn strict_match(answer: &str, gold_answers: &[String]) -> bool {
    let a = strict_normalize(answer);
    if !a.chars().any(char::is_alphanumeric) {
        return false;
    }
    gold_answers.iter().any(|g| strict_normalize(g) == a)
}

/// Stage 1. Unparsed and misleading demonstrations always fail.
pub fn filter_exact_match(mut demos: Vec<Demonstration>) -> Vec<Demonstration> {
    for d in &mut demos {
        d.stage1_pass = d.provenance == Provenance::Clean
            && d.trace
                .as_ref()
                .is_some_and(|t| strict_match(&t.answer, &d.instance.gold_answers));
        d.stage2_pass &= d.stage1_pass;
        d.used &= d.stage2_pass;
    }
    demos
}

/// Stage 2: every document `1..=k` is cited and reference evidence exists.
pub fn filter_citation_coverage(mut demos: Vec<Demonstration>, k: usize) -> Vec<Demonstration> {
    for d in &mut demos {
        d.stage2_pass = d.stage1_pass
            && d.trace.as_ref().is_some_and(|t| {
                let cited = cited_documents(t);
                !t.reference_evidence.is_empty() && (1..=k).all(|i| cited.contains(&i))
            });
        d.used &= d.stage2_pass;
    }
    demos
}

pub fn default_task_caps() -> BTreeMap<Task, usize> {
    BTreeMap::from([
        (Task::Nq, 515),
        (Task::Popqa, 500),
        (Task::Triviaqa, 500),
        (Task::Fever, 485),
    ])
}

/// Marks a seeded uniform subsample of each task's stage-2 survivors as
/// used, up to the task's cap. Tasks missing from `caps` are uncapped.
pub fn balance_and_cap(mut demos: Vec<Demonstration>, caps: &BTreeMap<Task, usize>, seed: u64) -> Vec<Demonstration> {
    for d in &mut demos {
        d.used = false;
    }
    for task in Task::ALL {
        let pool: Vec<usize> = demos
            .iter()
            .enumerate()
            .filter(|(_, d)| d.instance.task == task && d.stage2_pass)
            .map(|(i, _)| i)
            .collect();
        let take = caps.get(&task).copied().unwrap_or(pool.len()).min(pool.len());
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, task.as_str()));
        for i in sample(&mut rng, pool.len(), take) {
            demos[pool[i]].used = true;
        }
    }
    demos
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerDefaults {
    pub epochs: u32,
    pub batch_size: u32,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_scheduler: String,
    pub warmup_ratio: f64,
}

impl Default for TrainerDefaults {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            learning_rate: 3e-5,
            weight_decay: 0.001,
            lr_scheduler: "cosine".into(),
            warmup_ratio: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportMeta {
    pub question_id: String,
    pub task: Task,
    pub provenance: Provenance,
    pub trainer_defaults: TrainerDefaults,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub student_model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub input: String,
    pub target: String,
    pub meta: ExportMeta,
}

#[derive(Debug, Clone, Default)]
pub struct ExportOptions {
    /// Export demonstrations that did not pass both filters.
    pub force: bool,
    pub student_model: Option<String>,
    pub config_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub records: usize,
    pub per_task: BTreeMap<Task, usize>,
    pub misleading: usize,
}

pub fn export_records(demos: &[Demonstration], opts: &ExportOptions) -> Result<Vec<ExportRecord>, DemoError> {
    demos
        .iter()
        .map(|d| {
            let trace = d
                .trace
                .as_ref()
                .ok_or_else(|| DemoError::Unparsed(d.instance.id.clone()))?;
            if !d.stage2_pass && !opts.force {
                return Err(DemoError::Unfiltered(d.instance.id.clone()));
            }
            Ok(ExportRecord {
                input: d.prompt.clone(),
                target: trace.to_text(),
                meta: ExportMeta {
                    question_id: d.instance.id.clone(),
                    task: d.instance.task,
                    provenance: d.provenance,
                    trainer_defaults: TrainerDefaults::default(),
                    student_model: opts.student_model.clone(),
                    config_fingerprint: opts.config_fingerprint.clone(),
                },
            })
        })
        .collect()
}

/// Writes one SFT record per demonstration as JSON Lines.
pub fn export_sft(
    demos: &[Demonstration],
    path: impl AsRef<Path>,
    opts: &ExportOptions,
) -> Result<ExportSummary, DemoError> {
    let records = export_records(demos, opts)?;
    jsonl::write(path, &records)?;
    let mut per_task = BTreeMap::new();
    for r in &records {
        *per_task.entry(r.meta.task).or_default() += 1;
    }
    Ok(ExportSummary {
        records: records.len(),
        per_task,
        misleading: records
            .iter()
            .filter(|r| r.meta.provenance == Provenance::Misleading)
            .count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Misleading,
    Mixed,
}

impl FromStr for CorruptionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "misleading" => Ok(CorruptionMode::Misleading),
            "mixed" => Ok(CorruptionMode::Mixed),
            other => Err(format!("unknown corruption mode {other:?}")),
        }
    }
}

fn wrong_answer(demos: &[Demonstration], target: usize, rng: &mut ChaCha8Rng) -> String {
    let own = &demos[target].instance;
    let candidates: Vec<&String> = demos
        .iter()
        .enumerate()
        .filter(|(j, d)| *j != target && d.instance.task == own.task && d.instance.id != own.id)
        .flat_map(|(_, d)| d.instance.gold_answers.iter())
        .filter(|g| !strict_match(g, &own.gold_answers))
        .collect();
    if let Some(choice) = candidates.choose(rng) {
        return (*choice).clone();
    }
    if own.task == Task::Fever {
        let labels: Vec<&str> = FeverLabel::ALL
            .iter()
            .map(|l| l.as_str())
            .filter(|l| !strict_match(l, &own.gold_answers))
            .collect();
        return labels.choose(rng).expect("two other labels").to_string();
    }
    format!("not {}", own.gold_answers[0])
}

/// Replaces answers with a gold answer of another instance of the same
/// task. `Mixed` corrupts a seeded half of the demonstrations with traces.
pub fn corrupt_to_misleading(mut demos: Vec<Demonstration>, mode: CorruptionMode, seed: u64) -> Vec<Demonstration> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible: Vec<usize> = (0..demos.len()).filter(|&i| demos[i].trace.is_some()).collect();
    let chosen: Vec<usize> = match mode {
        CorruptionMode::Misleading => eligible,
        CorruptionMode::Mixed => {
            let mut picked: Vec<usize> = sample(&mut rng, eligible.len(), eligible.len() / 2)
                .into_iter()
                .map(|i| eligible[i])
                .collect();
            picked.sort_unstable();
            picked
        }
    };
    for i in chosen {
        let answer = wrong_answer(&demos, i, &mut rng);
        let d = &mut demos[i];
        let trace = d.trace.as_mut().expect("eligible demos have traces");
        trace.answer = answer;
        trace.raw = trace.to_text();
        d.provenance = Provenance::Misleading;
        d.stage1_pass = false;
        d.stage2_pass = false;
    }
    demos
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub total: usize,
    #[serde(rename = "stage1")]
    pub stage1_survivors: usize,
    #[serde(rename = "stage2")]
    pub stage2_survivors: usize,
    pub used: usize,
}

impl StageCounts {
    fn add(&mut self, d: &Demonstration) {
        self.total += 1;
        self.stage1_survivors += d.stage1_pass as usize;
        self.stage2_survivors += (d.stage1_pass && d.stage2_pass) as usize;
        self.used += (d.stage1_pass && d.stage2_pass && d.used) as usize;
    }

    pub fn is_monotone(&self) -> bool {
        self.total >= self.stage1_survivors
            && self.stage1_survivors >= self.stage2_survivors
            && self.stage2_survivors >= self.used
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunnelStats {
    #[serde(flatten)]
    pub counts: StageCounts,
    pub unparsed: usize,
    pub per_task: BTreeMap<Task, StageCounts>,
}

pub fn funnel_report(demos: &[Demonstration]) -> FunnelStats {
    let mut stats = FunnelStats::default();
    for d in demos {
        stats.counts.add(d);
        stats.per_task.entry(d.instance.task).or_default().add(d);
        stats.unparsed += d.unparsed() as usize;
    }
    stats
}
