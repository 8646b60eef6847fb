use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crag_core::corpus::{PrecomputedRankings, Scorer};
use crag_core::demos::{
    balance_and_cap, corrupt_to_misleading, export_sft, filter_citation_coverage, filter_exact_match, funnel_report,
    generate_demonstrations, load_dataset, replay_annotations, AnnotationRecord, ExportOptions, StageCounts,
};
use crag_core::eval::{cross_task_report, evaluate};
use crag_core::gateway::Backend;
use crag_core::prompt::PromptKit;
use crag_core::{
    Bm25Index, Corpus, Demonstration, EvalReport, FunnelStats, Gateway, MockBackend, PerturbationKind,
    PerturbationSpec, Pipeline, QaInstance, RetrievalConfig, Task,
};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{BackendKind, ConfigError, ConfigIssue, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Input,
    Backend,
    Data,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 3,
            Category::Input => 4,
            Category::Backend => 5,
            Category::Data => 6,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Category::Config => "config error",
            Category::Input => "input error",
            Category::Backend => "backend error",
            Category::Data => "data error",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.category.label(), self.message)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(Category::Config, e.to_string())
    }
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::new(Category::Input, e.to_string())
}

fn data(e: impl std::fmt::Display) -> CliError {
    CliError::new(Category::Data, e.to_string())
}

type Result<T> = std::result::Result<T, CliError>;

/// Every JSON artifact carries the resolved config, its fingerprint and
/// the seeds next to its own fields.
#[derive(Serialize)]
struct Artifact<'a, T: Serialize> {
    #[serde(flatten)]
    body: T,
    config_fingerprint: String,
    seeds: BTreeMap<String, u64>,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct ManifestEntry {
    path: String,
    sha256: String,
    bytes: usize,
}

pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    command: &'static str,
    written: Vec<ManifestEntry>,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a RunConfig, command: &'static str) -> Self {
        Self {
            cfg,
            command,
            written: Vec::new(),
        }
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.output_dir.join(rel)
    }

    fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| input(format!("{}: {e}", parent.display())))?;
        }
        std::fs::write(&path, bytes).map_err(|e| input(format!("{}: {e}", path.display())))?;
        self.written.push(ManifestEntry {
            path: rel.to_string(),
            sha256: format!("{:x}", Sha256::digest(bytes)),
            bytes: bytes.len(),
        });
        Ok(path)
    }

    fn write_artifact<T: Serialize>(&mut self, rel: &str, body: T) -> Result<PathBuf> {
        let artifact = Artifact {
            body,
            config_fingerprint: self.cfg.fingerprint(),
            seeds: self.cfg.seed_map(),
            config: self.cfg,
        };
        let mut text = serde_json::to_string_pretty(&artifact).map_err(data)?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    fn write_jsonl<T: Serialize>(&mut self, rel: &str, items: &[T]) -> Result<PathBuf> {
        let mut text = String::new();
        for item in items {
            text.push_str(&serde_json::to_string(item).map_err(data)?);
            text.push('\n');
        }
        self.write_bytes(rel, text.as_bytes())
    }

    /// Writes `manifests/<command>.json` listing every artifact with its hash.
    pub fn finish(mut self) -> Result<()> {
        #[derive(Serialize)]
        struct Manifest {
            command: &'static str,
            artifacts: Vec<ManifestEntry>,
        }
        let body = Manifest {
            command: self.command,
            artifacts: std::mem::take(&mut self.written),
        };
        let rel = format!("manifests/{}.json", self.command);
        self.write_artifact(&rel, body)?;
        Ok(())
    }
}

fn required<'c>(value: &'c Option<String>, field: &str, command: &str) -> Result<&'c str> {
    value.as_deref().ok_or_else(|| {
        ConfigError::Invalid(vec![ConfigIssue {
            field: field.into(),
            message: format!("required by the {command} command"),
        }])
        .into()
    })
}

fn load_corpus(cfg: &RunConfig, command: &str) -> Result<Corpus> {
    let path = cfg.resolve(required(&cfg.corpus, "corpus", command)?);
    Corpus::from_jsonl_path(&path).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn load_instances(cfg: &RunConfig, command: &str) -> Result<Vec<QaInstance>> {
    let path = cfg.resolve(required(&cfg.dataset, "dataset", command)?);
    load_dataset(&path).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn build_backend(cfg: &RunConfig) -> Result<Arc<dyn Backend>> {
    let b = &cfg.backend;
    match b.kind {
        BackendKind::Mock => {
            let mock = match &b.script {
                Some(script) => {
                    let path = cfg.resolve(script);
                    MockBackend::from_jsonl_path(&path, b.default_response.clone())
                        .map_err(|e| input(format!("{}: {e}", path.display())))?
                }
                None => MockBackend::new(Default::default(), b.default_response.clone()),
            };
            Ok(Arc::new(mock))
        }
        BackendKind::Http => http_backend(cfg),
    }
}

fn http_backend(cfg: &RunConfig) -> Result<Arc<dyn Backend>> {
    let b = &cfg.backend;
    let endpoint = b.endpoint.as_deref().unwrap_or_default();
    let model = b.model.as_deref().unwrap_or_default();
    let mut backend = crag_core::gateway::HttpBackend::from_env(endpoint, model)
        .map_err(|e| CliError::new(Category::Backend, e.to_string()))?;
    if let Some(system) = &b.system_message {
        backend = backend.with_system_message(system.clone());
    }
    Ok(Arc::new(backend))
}

pub fn build_pipeline(cfg: &RunConfig, command: &str) -> Result<Pipeline> {
    let corpus = load_corpus(cfg, command)?;
    let gateway = Gateway::new(build_backend(cfg)?);
    let mut pipeline = Pipeline::bm25(corpus, gateway).map_err(data)?;
    if cfg.retrieval.scorer == Scorer::ExternalAdapter {
        let path = cfg.resolve(required(&cfg.retrieval.rankings, "retrieval.rankings", command)?);
        let rankings =
            PrecomputedRankings::from_jsonl_path(&path).map_err(|e| input(format!("{}: {e}", path.display())))?;
        pipeline.retriever = Arc::new(rankings);
    }
    if let Some(dir) = &cfg.prompts_dir {
        pipeline.prompts = PromptKit::from_dir(cfg.resolve(dir)).map_err(input)?;
    }
    pipeline.retrieval = RetrievalConfig {
        top_k: cfg.retrieval.top_k,
        scorer: cfg.retrieval.scorer,
    };
    pipeline.params = cfg.generation.clone();
    pipeline.parallelism = cfg.parallelism;
    Ok(pipeline)
}

pub fn index(cfg: &RunConfig) -> Result<String> {
    let corpus = load_corpus(cfg, "index")?;
    let index = Bm25Index::build(&corpus).map_err(data)?;
    #[derive(Serialize)]
    struct Body<'i> {
        documents: usize,
        vocabulary_size: usize,
        avg_doc_len: f64,
        index: &'i Bm25Index,
    }
    let mut run = Run::new(cfg, "index");
    let path = run.write_artifact(
        "index.json",
        Body {
            documents: index.len(),
            vocabulary_size: index.vocabulary_size(),
            avg_doc_len: index.avg_doc_len(),
            index: &index,
        },
    )?;
    run.finish()?;
    Ok(format!(
        "indexed {} documents, {} terms -> {}\n",
        index.len(),
        index.vocabulary_size(),
        path.display()
    ))
}

pub fn retrieve(cfg: &RunConfig) -> Result<String> {
    let pipeline = build_pipeline(cfg, "retrieve")?;
    let instances = load_instances(cfg, "retrieve")?;
    #[derive(Serialize)]
    struct Line {
        query_id: String,
        ranking: Vec<String>,
        scores: Vec<f64>,
    }
    let mut lines = Vec::with_capacity(instances.len());
    for inst in &instances {
        let ranked = pipeline
            .retriever
            .retrieve(&inst.id, &inst.question, &pipeline.retrieval)
            .map_err(data)?;
        lines.push(Line {
            query_id: inst.id.clone(),
            ranking: ranked.entries.iter().map(|e| e.doc_id.clone()).collect(),
            scores: ranked.entries.iter().map(|e| e.score).collect(),
        });
    }
    let mut run = Run::new(cfg, "retrieve");
    let path = run.write_jsonl("rankings.jsonl", &lines)?;
    run.finish()?;
    Ok(format!("ranked {} queries -> {}\n", lines.len(), path.display()))
}

fn by_task(instances: Vec<QaInstance>) -> BTreeMap<Task, Vec<QaInstance>> {
    let mut groups: BTreeMap<Task, Vec<QaInstance>> = BTreeMap::new();
    for inst in instances {
        groups.entry(inst.task).or_default().push(inst);
    }
    groups
}

fn perturbation_label(spec: &PerturbationSpec) -> &'static str {
    match spec.kind {
        PerturbationKind::None => "none",
        PerturbationKind::Shuffle => "shuffle",
        PerturbationKind::Noise if spec.fraction_mode => "noise-fraction",
        PerturbationKind::Noise => "noise",
    }
}

fn run_eval(run: &mut Run, pipeline: &Pipeline, dataset: &[QaInstance], spec: &PerturbationSpec) -> Result<EvalReport> {
    let cfg = run.cfg;
    let mut report = evaluate(dataset, pipeline, cfg.family, spec).map_err(data)?;
    report.config_fingerprint = cfg.fingerprint();
    report.seeds.extend(cfg.seed_map());
    report.train_task = cfg.demos.train_task;
    let stem = format!(
        "eval/{}-{}-{}",
        report.task.as_str(),
        cfg.family.as_str(),
        perturbation_label(spec)
    );

    #[derive(Serialize)]
    struct Audit<'r> {
        id: &'r str,
        question: &'r str,
        gold_answers: &'r [String],
        prediction: &'r str,
        correct: bool,
        answer_marker_missing: bool,
        doc_order: &'r [String],
        #[serde(skip_serializing_if = "Option::is_none")]
        error: Option<&'r str>,
    }
    let audit: Vec<Audit> = dataset
        .iter()
        .zip(&report.per_item)
        .map(|(inst, item)| Audit {
            id: &item.id,
            question: &inst.question,
            gold_answers: &inst.gold_answers,
            prediction: &item.prediction,
            correct: item.correct,
            answer_marker_missing: item.answer_marker_missing,
            doc_order: &item.doc_order,
            error: item.error.as_deref(),
        })
        .collect();
    run.write_jsonl(&format!("{stem}-items.jsonl"), &audit)?;
    let mut body = serde_json::to_value(&report).map_err(data)?;
    body["config"] = serde_json::to_value(cfg).map_err(data)?;
    run.write_bytes(
        &format!("{stem}.json"),
        format!("{}\n", serde_json::to_string_pretty(&body).map_err(data)?).as_bytes(),
    )?;
    Ok(report)
}

pub fn eval(cfg: &RunConfig) -> Result<String> {
    let pipeline = build_pipeline(cfg, "eval")?;
    let groups = by_task(load_instances(cfg, "eval")?);
    let mut run = Run::new(cfg, "eval");
    let mut out = String::new();
    for (i, dataset) in groups.values().enumerate() {
        let report = run_eval(&mut run, &pipeline, dataset, &cfg.perturbation)?;
        let table = report.table();
        out.push_str(if i == 0 {
            &table
        } else {
            table.lines().nth(1).unwrap_or_default()
        });
        if i > 0 {
            out.push('\n');
        }
    }
    run.finish()?;
    Ok(out)
}

pub fn perturb_eval(cfg: &RunConfig) -> Result<String> {
    let pipeline = build_pipeline(cfg, "perturb-eval")?;
    let groups = by_task(load_instances(cfg, "perturb-eval")?);
    let seed = cfg.seeds.perturbation;
    let noise = PerturbationSpec {
        kind: PerturbationKind::Noise,
        seed,
        noise_count: cfg.perturbation.noise_count,
        fraction_mode: cfg.perturbation.fraction_mode,
        exclusion_depth: cfg.perturbation.exclusion_depth,
    };
    let specs = [PerturbationSpec::default(), PerturbationSpec::shuffle(seed), noise];

    #[derive(Serialize)]
    struct Row {
        task: Task,
        clean: f64,
        shuffle: f64,
        noise: f64,
        shuffle_delta: f64,
        noise_delta: f64,
    }
    let mut run = Run::new(cfg, "perturb-eval");
    let mut rows = Vec::new();
    for dataset in groups.values() {
        let acc: Vec<f64> = specs
            .iter()
            .map(|spec| run_eval(&mut run, &pipeline, dataset, spec).map(|r| r.accuracy))
            .collect::<Result<_>>()?;
        rows.push(Row {
            task: dataset[0].task,
            clean: acc[0],
            shuffle: acc[1],
            noise: acc[2],
            shuffle_delta: acc[1] - acc[0],
            noise_delta: acc[2] - acc[0],
        });
    }
    let mut table = format!(
        "{:<10} {:<9} {:>8} {:>8} {:>8} {:>9} {:>9}\n",
        "task", "pipeline", "clean", "shuffle", "noise", "d.shuf", "d.noise"
    );
    for r in &rows {
        let _ = writeln!(
            table,
            "{:<10} {:<9} {:>7.2}% {:>7.2}% {:>7.2}% {:>+8.2}% {:>+8.2}%",
            r.task.as_str(),
            cfg.family.as_str(),
            r.clean * 100.0,
            r.shuffle * 100.0,
            r.noise * 100.0,
            r.shuffle_delta * 100.0,
            r.noise_delta * 100.0
        );
    }
    #[derive(Serialize)]
    struct Body {
        pipeline: &'static str,
        noise_mode: &'static str,
        rows: Vec<Row>,
    }
    run.write_artifact(
        "perturb-eval.json",
        Body {
            pipeline: cfg.family.as_str(),
            noise_mode: perturbation_label(&noise),
            rows,
        },
    )?;
    run.finish()?;
    Ok(table)
}

pub fn gen_demos(cfg: &RunConfig, replay: Option<&Path>) -> Result<String> {
    let demos = match replay {
        Some(path) => {
            let records: Vec<AnnotationRecord> =
                crag_core::jsonl::read(path).map_err(|e| input(format!("{}: {e}", path.display())))?;
            for r in &records {
                r.instance.validate().map_err(input)?;
            }
            replay_annotations(records, cfg.retrieval.top_k)
        }
        None => {
            let pipeline = build_pipeline(cfg, "gen-demos")?;
            let instances = load_instances(cfg, "gen-demos")?;
            generate_demonstrations(&instances, &pipeline)
        }
    };
    let unparsed = demos.iter().filter(|d| d.unparsed()).count();
    let mut run = Run::new(cfg, "gen-demos");
    let path = run.write_jsonl("demonstrations.jsonl", &demos)?;
    run.finish()?;
    Ok(format!(
        "generated {} demonstrations ({} unparsed) -> {}\n",
        demos.len(),
        unparsed,
        path.display()
    ))
}

fn read_demos(path: &Path) -> Result<Vec<Demonstration>> {
    crag_core::jsonl::read(path).map_err(|e| input(format!("{}: {e}", path.display())))
}

fn default_input(cfg: &RunConfig, given: Option<&Path>, name: &str) -> PathBuf {
    given
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(name))
}

#[derive(Serialize)]
struct FunnelBody<'f> {
    #[serde(flatten)]
    stats: &'f FunnelStats,
    caps: &'f BTreeMap<Task, usize>,
}

pub fn funnel_table(stats: &FunnelStats) -> String {
    let mut out = format!(
        "{:<10} {:>7} {:>7} {:>7} {:>7}\n",
        "task", "total", "stage1", "stage2", "used"
    );
    let row = |out: &mut String, name: &str, c: &StageCounts| {
        let _ = writeln!(
            out,
            "{:<10} {:>7} {:>7} {:>7} {:>7}",
            name, c.total, c.stage1_survivors, c.stage2_survivors, c.used
        );
    };
    for (task, c) in &stats.per_task {
        row(&mut out, task.as_str(), c);
    }
    row(&mut out, "all", &stats.counts);
    let _ = writeln!(out, "unparsed: {}", stats.unparsed);
    out
}

pub fn filter(cfg: &RunConfig, input_path: Option<&Path>) -> Result<String> {
    let demos = read_demos(&default_input(cfg, input_path, "demonstrations.jsonl"))?;
    let demos = filter_exact_match(demos);
    let demos = filter_citation_coverage(demos, cfg.retrieval.top_k);
    let demos = balance_and_cap(demos, &cfg.demos.caps, cfg.seeds.balance);
    let stats = funnel_report(&demos);
    let mut run = Run::new(cfg, "filter");
    run.write_jsonl("filtered.jsonl", &demos)?;
    run.write_artifact(
        "funnel.json",
        FunnelBody {
            stats: &stats,
            caps: &cfg.demos.caps,
        },
    )?;
    run.finish()?;
    Ok(funnel_table(&stats))
}

pub fn funnel(cfg: &RunConfig, input_path: Option<&Path>) -> Result<String> {
    let demos = read_demos(&default_input(cfg, input_path, "filtered.jsonl"))?;
    let stats = funnel_report(&demos);
    if !stats.counts.is_monotone() {
        return Err(data("stage counts are not monotone; was the input produced by filter?"));
    }
    let mut run = Run::new(cfg, "funnel");
    run.write_artifact(
        "funnel.json",
        FunnelBody {
            stats: &stats,
            caps: &cfg.demos.caps,
        },
    )?;
    run.finish()?;
    Ok(funnel_table(&stats))
}

pub fn export(cfg: &RunConfig, input_path: Option<&Path>) -> Result<String> {
    let demos = read_demos(&default_input(cfg, input_path, "filtered.jsonl"))?;
    let selected: Vec<Demonstration> = demos.into_iter().filter(|d| d.used && d.stage2_pass).collect();
    if selected.is_empty() {
        return Err(data("no demonstration is marked used; run filter first"));
    }
    let selected = match cfg.demos.corruption {
        Some(mode) => corrupt_to_misleading(selected, mode, cfg.seeds.corruption),
        None => selected,
    };
    let opts = ExportOptions {
        force: true,
        student_model: cfg.demos.student_model.clone(),
        config_fingerprint: Some(cfg.fingerprint()),
    };
    let path = cfg.output_dir.join("sft.jsonl");
    std::fs::create_dir_all(&cfg.output_dir).map_err(input)?;
    let summary = export_sft(&selected, &path, &opts).map_err(data)?;
    let bytes = std::fs::read(&path).map_err(input)?;
    let mut run = Run::new(cfg, "export");
    run.write_bytes("sft.jsonl", &bytes)?;
    run.write_artifact("export-summary.json", &summary)?;
    run.finish()?;
    let mut out = format!(
        "exported {} records ({} misleading) -> {}\n",
        summary.records,
        summary.misleading,
        path.display()
    );
    for (task, n) in &summary.per_task {
        let _ = writeln!(out, "  {:<10} {n}", task.as_str());
    }
    Ok(out)
}

pub fn matrix(cfg: &RunConfig, reports: &[PathBuf]) -> Result<String> {
    let mut loaded = Vec::with_capacity(reports.len());
    for p in reports {
        let text = std::fs::read_to_string(p).map_err(|e| input(format!("{}: {e}", p.display())))?;
        let report: EvalReport = serde_json::from_str(&text).map_err(|e| input(format!("{}: {e}", p.display())))?;
        loaded.push(report);
    }
    let matrix = cross_task_report(&loaded).map_err(data)?;
    let mut run = Run::new(cfg, "matrix");
    run.write_artifact("matrix.json", &matrix)?;
    run.finish()?;
    Ok(matrix.table())
}
