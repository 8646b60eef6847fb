//! Run configuration: a TOML file, flag overrides and defaults, resolved
//! into a [`RunConfig`] whose canonical JSON is fingerprinted.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crag_core::corpus::{Scorer, DEFAULT_EXCLUSION_DEPTH, DEFAULT_TOP_K};
use crag_core::demos::{default_task_caps, CorruptionMode};
use crag_core::gateway::{Decoding, GenerationParams};
use crag_core::{PerturbationKind, PerturbationSpec, PromptFamily, Task};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub corpus: Option<String>,
    pub dataset: Option<String>,
    pub prompts_dir: Option<String>,
    pub family: Option<String>,
    pub parallelism: Option<i64>,
    #[serde(default)]
    pub retrieval: FileRetrieval,
    #[serde(default)]
    pub generation: FileGeneration,
    #[serde(default)]
    pub backend: FileBackend,
    #[serde(default)]
    pub perturbation: FilePerturbation,
    #[serde(default)]
    pub seeds: FileSeeds,
    #[serde(default)]
    pub demos: FileDemos,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRetrieval {
    pub top_k: Option<i64>,
    pub scorer: Option<String>,
    pub rankings: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileGeneration {
    pub temperature: Option<f64>,
    pub max_new_tokens: Option<i64>,
    pub decoding: Option<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileBackend {
    pub kind: Option<String>,
    pub script: Option<String>,
    pub default_response: Option<String>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub system_message: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilePerturbation {
    pub kind: Option<String>,
    pub noise_count: Option<i64>,
    pub fraction_mode: Option<bool>,
    pub exclusion_depth: Option<i64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSeeds {
    pub perturbation: Option<u64>,
    pub balance: Option<u64>,
    pub corruption: Option<u64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDemos {
    pub caps: Option<BTreeMap<String, i64>>,
    pub corruption: Option<String>,
    pub student_model: Option<String>,
    pub train_task: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSection {
    pub top_k: usize,
    pub scorer: Scorer,
    pub rankings: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub script: Option<String>,
    pub default_response: String,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub system_message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub perturbation: u64,
    pub balance: u64,
    pub corruption: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemosSection {
    pub caps: BTreeMap<Task, usize>,
    pub corruption: Option<CorruptionMode>,
    pub student_model: Option<String>,
    pub train_task: Option<Task>,
}

/// Fully resolved configuration. Paths are kept as written and resolved
/// against `base_dir`; neither `base_dir` nor `output_dir` is part of the
/// fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: Option<String>,
    pub dataset: Option<String>,
    pub prompts_dir: Option<String>,
    pub family: PromptFamily,
    pub parallelism: usize,
    pub retrieval: RetrievalSection,
    pub generation: GenerationParams,
    pub backend: BackendSection,
    pub perturbation: PerturbationSpec,
    pub seeds: Seeds,
    pub demos: DemosSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        format!("{:x}", Sha256::digest(canonical.as_bytes()))
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        self.base_dir.join(path)
    }

    pub fn seed_map(&self) -> BTreeMap<String, u64> {
        let mut seeds = BTreeMap::from([
            ("perturbation".to_string(), self.seeds.perturbation),
            ("balance".to_string(), self.seeds.balance),
            ("corruption".to_string(), self.seeds.corruption),
        ]);
        if let Some(s) = self.generation.seed {
            seeds.insert("generation".into(), s);
        }
        seeds
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfigIssue {
    pub field: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone)]
pub enum ConfigError {
    Read(String),
    Syntax(String),
    Invalid(Vec<ConfigIssue>),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read(m) => write!(f, "cannot read config: {m}"),
            ConfigError::Syntax(m) => write!(f, "config does not parse: {m}"),
            ConfigError::Invalid(issues) => {
                write!(f, "invalid config ({} problems)", issues.len())?;
                for i in issues {
                    write!(f, "\n  {i}")?;
                }
                Ok(())
            }
        }
    }
}

impl std::error::Error for ConfigError {}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpus: Option<String>,
    pub dataset: Option<String>,
    pub family: Option<String>,
    pub top_k: Option<i64>,
    pub temperature: Option<f64>,
    pub decoding: Option<String>,
    pub max_new_tokens: Option<i64>,
    pub generation_seed: Option<u64>,
    pub backend: Option<String>,
    pub script: Option<String>,
    pub perturbation: Option<String>,
    pub noise_count: Option<i64>,
    pub fraction_mode: bool,
    pub perturbation_seed: Option<u64>,
    pub parallelism: Option<i64>,
    pub corruption: Option<String>,
    pub train_task: Option<String>,
}

impl Overrides {
    pub fn apply(&self, file: &mut FileConfig) {
        fn set<T: Clone>(slot: &mut Option<T>, value: &Option<T>) {
            if value.is_some() {
                slot.clone_from(value);
            }
        }
        set(&mut file.corpus, &self.corpus);
        set(&mut file.dataset, &self.dataset);
        set(&mut file.family, &self.family);
        set(&mut file.parallelism, &self.parallelism);
        set(&mut file.retrieval.top_k, &self.top_k);
        set(&mut file.generation.temperature, &self.temperature);
        set(&mut file.generation.decoding, &self.decoding);
        set(&mut file.generation.max_new_tokens, &self.max_new_tokens);
        set(&mut file.generation.seed, &self.generation_seed);
        set(&mut file.backend.kind, &self.backend);
        set(&mut file.backend.script, &self.script);
        set(&mut file.perturbation.kind, &self.perturbation);
        set(&mut file.perturbation.noise_count, &self.noise_count);
        set(&mut file.seeds.perturbation, &self.perturbation_seed);
        set(&mut file.demos.corruption, &self.corruption);
        set(&mut file.demos.train_task, &self.train_task);
        if self.fraction_mode {
            file.perturbation.fraction_mode = Some(true);
        }
    }
}

pub fn parse_file(text: &str) -> Result<FileConfig, ConfigError> {
    toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))
}

/// Reads a TOML config, or the `config` object embedded in a JSON artifact.
pub fn load(path: Option<&Path>, overrides: &Overrides, output_dir: Option<&Path>) -> Result<RunConfig, ConfigError> {
    let (mut file, base_dir) = match path {
        None => (FileConfig::default(), PathBuf::from(".")),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read(format!("{}: {e}", p.display())))?;
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            if p.extension().is_some_and(|e| e == "json") {
                let mut cfg = from_artifact(&text)?;
                cfg.base_dir = PathBuf::from(".");
                let mut file = cfg.to_file_config();
                overrides.apply(&mut file);
                return validate(file, PathBuf::from("."), output_dir.map(Path::to_path_buf));
            }
            (
                parse_file(&text)?,
                if base.as_os_str().is_empty() {
                    PathBuf::from(".")
                } else {
                    base
                },
            )
        }
    };
    overrides.apply(&mut file);
    validate(file, base_dir, output_dir.map(Path::to_path_buf))
}

fn from_artifact(text: &str) -> Result<RunConfig, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    let config = value.get("config").cloned().unwrap_or(value);
    serde_json::from_value(config).map_err(|e| ConfigError::Syntax(format!("embedded config: {e}")))
}

impl RunConfig {
    fn to_file_config(&self) -> FileConfig {
        FileConfig {
            corpus: self.corpus.clone(),
            dataset: self.dataset.clone(),
            prompts_dir: self.prompts_dir.clone(),
            family: Some(self.family.as_str().into()),
            parallelism: Some(self.parallelism as i64),
            retrieval: FileRetrieval {
                top_k: Some(self.retrieval.top_k as i64),
                scorer: Some(scorer_name(self.retrieval.scorer).into()),
                rankings: self.retrieval.rankings.clone(),
            },
            generation: FileGeneration {
                temperature: Some(self.generation.temperature),
                max_new_tokens: Some(self.generation.max_new_tokens as i64),
                decoding: Some(decoding_name(self.generation.decoding).into()),
                seed: self.generation.seed,
            },
            backend: FileBackend {
                kind: Some(match self.backend.kind {
                    BackendKind::Mock => "mock".into(),
                    BackendKind::Http => "http".into(),
                }),
                script: self.backend.script.clone(),
                default_response: Some(self.backend.default_response.clone()),
                endpoint: self.backend.endpoint.clone(),
                model: self.backend.model.clone(),
                system_message: self.backend.system_message.clone(),
            },
            perturbation: FilePerturbation {
                kind: Some(perturbation_name(self.perturbation.kind).into()),
                noise_count: (self.perturbation.kind == PerturbationKind::Noise && !self.perturbation.fraction_mode)
                    .then_some(self.perturbation.noise_count as i64),
                fraction_mode: Some(self.perturbation.fraction_mode),
                exclusion_depth: Some(self.perturbation.exclusion_depth as i64),
            },
            seeds: FileSeeds {
                perturbation: Some(self.seeds.perturbation),
                balance: Some(self.seeds.balance),
                corruption: Some(self.seeds.corruption),
            },
            demos: FileDemos {
                caps: Some(
                    self.demos
                        .caps
                        .iter()
                        .map(|(t, c)| (t.as_str().to_string(), *c as i64))
                        .collect(),
                ),
                corruption: self.demos.corruption.map(|c| match c {
                    CorruptionMode::Misleading => "misleading".into(),
                    CorruptionMode::Mixed => "mixed".into(),
                }),
                student_model: self.demos.student_model.clone(),
                train_task: self.demos.train_task.map(|t| t.as_str().into()),
            },
        }
    }
}

fn scorer_name(s: Scorer) -> &'static str {
    match s {
        Scorer::Bm25 => "bm25",
        Scorer::ExternalAdapter => "external-adapter",
    }
}

fn decoding_name(d: Decoding) -> &'static str {
    match d {
        Decoding::Greedy => "greedy",
        Decoding::Sampled => "sampled",
    }
}

fn perturbation_name(k: PerturbationKind) -> &'static str {
    match k {
        PerturbationKind::None => "none",
        PerturbationKind::Shuffle => "shuffle",
        PerturbationKind::Noise => "noise",
    }
}

struct Issues(Vec<ConfigIssue>);

impl Issues {
    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.0.push(ConfigIssue {
            field: field.into(),
            message: message.into(),
        });
    }

    fn at_least(&mut self, field: &str, value: Option<i64>, min: i64, default: usize) -> usize {
        match value {
            None => default,
            Some(v) if v < min => {
                self.push(field, format!("must be >= {min}, got {v}"));
                default
            }
            Some(v) => v as usize,
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, field: &str, value: Option<&str>, allowed: &str, default: T) -> T {
        match value {
            None => default,
            Some(v) => match v.parse() {
                Ok(t) => t,
                Err(_) => {
                    self.push(field, format!("unknown value {v:?}; expected one of {allowed}"));
                    default
                }
            },
        }
    }

    fn path_exists(&mut self, field: &str, base: &Path, value: &Option<String>) {
        if let Some(p) = value {
            if !base.join(p).exists() {
                self.push(field, format!("path {p:?} does not exist"));
            }
        }
    }
}

/// Structural and cross-field checks; reports every problem at once.
pub fn validate(file: FileConfig, base_dir: PathBuf, output_dir: Option<PathBuf>) -> Result<RunConfig, ConfigError> {
    let mut issues = Issues(Vec::new());

    let family = issues.parse(
        "family",
        file.family.as_deref(),
        "baseline, rag, crag",
        PromptFamily::Crag,
    );
    let parallelism = issues.at_least("parallelism", file.parallelism, 1, 1);

    let top_k = issues.at_least("retrieval.top_k", file.retrieval.top_k, 1, DEFAULT_TOP_K);
    let scorer = match file.retrieval.scorer.as_deref() {
        None | Some("bm25") => Scorer::Bm25,
        Some("external-adapter") => Scorer::ExternalAdapter,
        Some(other) => {
            issues.push(
                "retrieval.scorer",
                format!("unknown value {other:?}; expected one of bm25, external-adapter"),
            );
            Scorer::Bm25
        }
    };
    if scorer == Scorer::ExternalAdapter && file.retrieval.rankings.is_none() {
        issues.push(
            "retrieval.rankings",
            "required when retrieval.scorer is external-adapter",
        );
    }

    let mut generation = GenerationParams::default();
    if let Some(t) = file.generation.temperature {
        if !(t.is_finite() && (0.0..=2.0).contains(&t)) {
            issues.push("generation.temperature", format!("must lie in [0, 2], got {t}"));
        } else {
            generation.temperature = t;
        }
    }
    generation.max_new_tokens = issues.at_least(
        "generation.max_new_tokens",
        file.generation.max_new_tokens,
        1,
        generation.max_new_tokens as usize,
    ) as u32;
    generation.decoding = match file.generation.decoding.as_deref() {
        None | Some("greedy") => Decoding::Greedy,
        Some("sampled") => Decoding::Sampled,
        Some(other) => {
            issues.push(
                "generation.decoding",
                format!("unknown value {other:?}; expected one of greedy, sampled"),
            );
            Decoding::Greedy
        }
    };
    generation.seed = file.generation.seed;

    let kind = match file.backend.kind.as_deref() {
        None | Some("mock") => BackendKind::Mock,
        Some("http") => BackendKind::Http,
        Some(other) => {
            issues.push(
                "backend.kind",
                format!("unknown value {other:?}; expected one of mock, http"),
            );
            BackendKind::Mock
        }
    };
    if kind == BackendKind::Http {
        if file.backend.endpoint.is_none() {
            issues.push("backend.endpoint", "required when backend.kind is http");
        }
        if file.backend.model.is_none() {
            issues.push("backend.model", "required when backend.kind is http");
        }
    }

    let pkind = issues.parse(
        "perturbation.kind",
        file.perturbation.kind.as_deref(),
        "none, shuffle, noise",
        PerturbationKind::None,
    );
    let fraction_mode = file.perturbation.fraction_mode.unwrap_or(false);
    if fraction_mode && file.perturbation.noise_count.is_some() {
        issues.push(
            "perturbation.noise_count",
            "count mode and fraction mode are mutually exclusive; unset noise_count or fraction_mode",
        );
    }
    if pkind != PerturbationKind::Noise && (fraction_mode || file.perturbation.noise_count.is_some()) {
        issues.push(
            "perturbation.kind",
            "noise settings are only valid when perturbation.kind is noise",
        );
    }
    let noise_count = issues.at_least("perturbation.noise_count", file.perturbation.noise_count, 1, 2);
    let exclusion_depth = issues.at_least(
        "perturbation.exclusion_depth",
        file.perturbation.exclusion_depth,
        0,
        DEFAULT_EXCLUSION_DEPTH,
    );
    if pkind == PerturbationKind::Noise && file.corpus.is_none() {
        issues.push(
            "corpus",
            "noise perturbation draws distractors from the corpus; set corpus",
        );
    }

    let seeds = Seeds {
        perturbation: file.seeds.perturbation.unwrap_or(0),
        balance: file.seeds.balance.unwrap_or(0),
        corruption: file.seeds.corruption.unwrap_or(0),
    };

    let mut caps = default_task_caps();
    if let Some(given) = &file.demos.caps {
        caps.clear();
        for (task, cap) in given {
            let field = format!("demos.caps.{task}");
            match task.parse::<Task>() {
                Ok(t) if *cap >= 0 => {
                    caps.insert(t, *cap as usize);
                }
                Ok(_) => issues.push(&field, format!("must be >= 0, got {cap}")),
                Err(_) => issues.push(&field, "unknown task; expected one of nq, popqa, triviaqa, fever"),
            }
        }
    }
    let corruption = file.demos.corruption.as_deref().and_then(|c| match c {
        "none" => None,
        other => match other.parse::<CorruptionMode>() {
            Ok(m) => Some(m),
            Err(_) => {
                issues.push(
                    "demos.corruption",
                    format!("unknown value {other:?}; expected one of none, misleading, mixed"),
                );
                None
            }
        },
    });
    let train_task = file.demos.train_task.as_deref().and_then(|t| match t.parse::<Task>() {
        Ok(t) => Some(t),
        Err(_) => {
            issues.push("demos.train_task", format!("unknown task {t:?}"));
            None
        }
    });

    issues.path_exists("corpus", &base_dir, &file.corpus);
    issues.path_exists("dataset", &base_dir, &file.dataset);
    issues.path_exists("prompts_dir", &base_dir, &file.prompts_dir);
    issues.path_exists("retrieval.rankings", &base_dir, &file.retrieval.rankings);
    issues.path_exists("backend.script", &base_dir, &file.backend.script);

    if !issues.0.is_empty() {
        return Err(ConfigError::Invalid(issues.0));
    }
    Ok(RunConfig {
        corpus: file.corpus,
        dataset: file.dataset,
        prompts_dir: file.prompts_dir,
        family,
        parallelism,
        retrieval: RetrievalSection {
            top_k,
            scorer,
            rankings: file.retrieval.rankings,
        },
        generation,
        backend: BackendSection {
            kind,
            script: file.backend.script,
            default_response: file.backend.default_response.unwrap_or_default(),
            endpoint: file.backend.endpoint,
            model: file.backend.model,
            system_message: file.backend.system_message,
        },
        perturbation: PerturbationSpec {
            kind: pkind,
            seed: seeds.perturbation,
            noise_count,
            fraction_mode,
            exclusion_depth,
        },
        seeds,
        demos: DemosSection {
            caps,
            corruption,
            student_model: file.demos.student_model,
            train_task,
        },
        output_dir: output_dir.unwrap_or_else(|| base_dir.join("out")),
        base_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check(text: &str) -> Result<RunConfig, ConfigError> {
        validate(parse_file(text).unwrap(), PathBuf::from("."), None)
    }

    fn fields(err: ConfigError) -> Vec<String> {
        match err {
            ConfigError::Invalid(issues) => issues.into_iter().map(|i| i.field).collect(),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn defaults_are_filled() {
        let cfg = check("").unwrap();
        assert_eq!(cfg.retrieval.top_k, 5);
        assert_eq!(cfg.generation.temperature, 0.4);
        assert_eq!(cfg.generation.decoding, Decoding::Greedy);
        assert_eq!(cfg.generation.max_new_tokens, 2048);
        assert_eq!(cfg.family, PromptFamily::Crag);
        assert_eq!(cfg.demos.caps, default_task_caps());
    }

    #[test]
    fn zero_top_k_names_the_field() {
        let err = check("[retrieval]\ntop_k = 0\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("retrieval.top_k") && msg.contains(">= 1"), "{msg}");
    }

    #[test]
    fn both_noise_modes_is_a_cross_field_error() {
        let err = check("[perturbation]\nkind = \"noise\"\nnoise_count = 2\nfraction_mode = true\n").unwrap_err();
        assert!(fields(err).contains(&"perturbation.noise_count".to_string()));
    }

    #[test]
    fn every_problem_is_reported() {
        let err = check(
            "family = \"cot\"\n[retrieval]\ntop_k = 0\n[generation]\ntemperature = -1.0\n[backend]\nkind = \"http\"\n",
        )
        .unwrap_err();
        let f = fields(err);
        for expected in [
            "family",
            "retrieval.top_k",
            "generation.temperature",
            "backend.endpoint",
            "backend.model",
        ] {
            assert!(f.contains(&expected.to_string()), "{expected} missing from {f:?}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(parse_file("top_kk = 3\n"), Err(ConfigError::Syntax(_))));
    }

    #[test]
    fn overrides_win_over_the_file() {
        let mut file = parse_file("[retrieval]\ntop_k = 3\n").unwrap();
        Overrides {
            top_k: Some(7),
            ..Default::default()
        }
        .apply(&mut file);
        let cfg = validate(file, PathBuf::from("."), None).unwrap();
        assert_eq!(cfg.retrieval.top_k, 7);
    }

    #[test]
    fn fingerprint_ignores_locations() {
        let a = check("[retrieval]\ntop_k = 3\n").unwrap();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        b.base_dir = PathBuf::from("/other");
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = check("[retrieval]\ntop_k = 4\n").unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn embedded_config_round_trips() {
        let a = check("family = \"rag\"\n[perturbation]\nkind = \"noise\"\nfraction_mode = true\n").unwrap_err();
        assert!(fields(a).contains(&"corpus".to_string()));
        let cfg = check("family = \"rag\"\n[perturbation]\nkind = \"shuffle\"\n[seeds]\nperturbation = 9\n").unwrap();
        let json = serde_json::json!({ "config": cfg });
        let back = from_artifact(&json.to_string()).unwrap();
        let again = validate(back.to_file_config(), PathBuf::from("."), None).unwrap();
        assert_eq!(again.fingerprint(), cfg.fingerprint());
    }
}
