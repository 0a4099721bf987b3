//! End-to-end runs: templates, answer-choice candidates, selection, final
//! training, template weighting, prediction and evaluation.
//!
//! Every run writes into a fresh numbered directory; artifacts are never
//! overwritten. The manifest lists each artifact's SHA-256 and contains
//! nothing run-specific beyond the configuration, so identical runs produce
//! identical manifests.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{config_hash, load_model, model_hash, save_peft};
use crate::choices::{
    dataset_choices, gen_template_tailored, gen_topic_specific, random_choices, stopwords, ChoiceCandidate,
    DEFAULT_TOP_M,
};
use crate::dataset::{default_schema_path, load_dataset, load_schema, FewShotDataset};
use crate::embedder::{words, Embedder, HashedBowEmbedder};
use crate::error::{Error, Result};
use crate::inference::{evaluate_table, predictions, Metrics, Prediction, ScoreTable, TemplateWeights};
use crate::lm::ToyLm;
use crate::peft_trainer::{train_on, PeftParams, TrainConfig, TrainReport};
use crate::prompt_kb::{ingest_kb, PromptKb, Sample, TaskSchema, Template, TemplateRecord};
use crate::retrieval::{build_query, retrieve, RetrievalConfig, RetrievedRecord, RetrievedTemplates, DEFAULT_R};
use crate::select::{select_config, ConfigScore, PoolMode, SelectConfig};

/// Words per template in the `random` template mode.
pub const RANDOM_TEMPLATE_WORDS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemplateMode {
    /// Field values joined by newlines.
    Null,
    /// Fields followed by words sampled from the training vocabulary.
    Random,
    /// One fixed task-agnostic instruction.
    General,
    /// User-supplied templates.
    Handcrafted,
    /// Retrieval from the knowledge base.
    #[default]
    Auto,
}

impl TemplateMode {
    pub const ALL: [TemplateMode; 5] = [
        TemplateMode::Null,
        TemplateMode::Random,
        TemplateMode::General,
        TemplateMode::Handcrafted,
        TemplateMode::Auto,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemplateMode::Null => "null",
            TemplateMode::Random => "random",
            TemplateMode::General => "general",
            TemplateMode::Handcrafted => "handcrafted",
            TemplateMode::Auto => "auto",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChoiceMode {
    /// Generate dataset, template-tailored and topic-specific candidates and
    /// select among them.
    #[default]
    Auto,
    /// Seeded random training-vocabulary words, no selection.
    Random,
}

/// Pipeline knobs that do not involve files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub r: usize,
    pub folds: usize,
    pub seed: u64,
    pub pool_mode: PoolMode,
    pub temperature: f64,
    pub top_m: usize,
    pub template_mode: TemplateMode,
    pub choice_mode: ChoiceMode,
    /// `seed` overrides `train.seed`.
    pub train: TrainConfig,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            r: DEFAULT_R,
            folds: 3,
            seed: 0,
            pool_mode: PoolMode::Transductive,
            temperature: 1.0,
            top_m: DEFAULT_TOP_M,
            template_mode: TemplateMode::Auto,
            choice_mode: ChoiceMode::Auto,
            train: TrainConfig::default(),
        }
    }
}

impl PipelineOptions {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Validation("R must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Validation("folds must be at least 2".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Validation("temperature must be positive".into()));
        }
        if self.top_m == 0 {
            return Err(Error::Validation("top_m must be at least 1".into()));
        }
        self.train.validate()
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}

/// In-memory inputs of one run.
pub struct PipelineInputs<'a> {
    pub kb: &'a PromptKb,
    pub train: &'a FewShotDataset,
    pub pool: Option<&'a FewShotDataset>,
    pub test: Option<&'a FewShotDataset>,
    pub handcrafted: Option<&'a PromptKb>,
    pub model: &'a ToyLm<f32>,
}

pub struct PipelineOutcome {
    pub templates: Vec<Template>,
    pub retrieved: Option<RetrievedTemplates>,
    pub candidates: Vec<ChoiceCandidate>,
    pub scores: Vec<ConfigScore>,
    pub winner: ChoiceCandidate,
    pub peft: PeftParams<f32>,
    pub train_report: TrainReport,
    pub weights: TemplateWeights,
    pub predictions: Vec<Prediction>,
    pub metrics: Option<Metrics>,
}

/// The shipped task-agnostic instruction, by arity.
pub fn general_template(schema: &TaskSchema) -> Result<Template> {
    let slots: Vec<String> = schema.field_names().iter().map(|f| format!("{{{{{f}}}}}")).collect();
    let body = match slots.as_slice() {
        [one] => format!("Given {one}, the answer is"),
        [init @ .., last] => format!("Given {} and {last}, the answer is", init.join(", ")),
        [] => return Err(Error::contract("schema without fields")),
    };
    Template::new("general", "general", body, None)
}

/// Field values joined by newlines.
pub fn null_template(schema: &TaskSchema) -> Result<Template> {
    let body: Vec<String> = schema.field_names().iter().map(|f| format!("{{{{{f}}}}}")).collect();
    Template::new("null", "null", body.join("\n"), None)
}

/// `r` templates of the fields followed by sampled training words.
pub fn random_templates(train: &FewShotDataset, r: usize, seed: u64) -> Result<Vec<Template>> {
    let schema = train.schema();
    let mut vocab: Vec<String> = train.samples().iter().flat_map(|s| words(&s.joined_text(schema))).collect();
    vocab.sort_unstable();
    vocab.dedup();
    if vocab.is_empty() {
        return Err(Error::Generation("training texts contain no words".into()));
    }
    let slots: Vec<String> = schema.field_names().iter().map(|f| format!("{{{{{f}}}}}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..r)
        .map(|i| {
            let filler: Vec<&str> = (0..RANDOM_TEMPLATE_WORDS)
                .map(|_| vocab.choose(&mut rng).expect("non-empty").as_str())
                .collect();
            Template::new(format!("random_{i}"), "random", format!("{}\n{}", slots.join("\n"), filler.join(" ")), None)
        })
        .collect()
}

fn build_templates(inputs: &PipelineInputs<'_>, opts: &PipelineOptions, embedder: &dyn Embedder) -> Result<(Vec<Template>, Option<RetrievedTemplates>)> {
    let schema = inputs.train.schema();
    Ok(match opts.template_mode {
        TemplateMode::Null => (vec![null_template(schema)?], None),
        TemplateMode::General => (vec![general_template(schema)?], None),
        TemplateMode::Random => (random_templates(inputs.train, opts.r, opts.seed)?, None),
        TemplateMode::Handcrafted => {
            let kb = inputs
                .handcrafted
                .ok_or_else(|| Error::Validation("handcrafted mode needs a template file".into()))?;
            let arity = schema.field_names().len();
            let templates: Vec<Template> = kb
                .templates()
                .iter()
                .filter(|t| t.arity() == arity)
                .map(|t| t.adapt(schema))
                .collect::<Result<_>>()?;
            if templates.is_empty() {
                return Err(Error::NoMatchingArity {
                    wanted: arity,
                    available: kb.arity_index().keys().copied().collect(),
                });
            }
            (templates, None)
        }
        TemplateMode::Auto => {
            let cfg = RetrievalConfig::with_r(opts.r)?;
            let query = build_query(schema, inputs.train, embedder, &cfg)?;
            let retrieved = retrieve(inputs.kb, schema, &query, embedder, &cfg)?;
            (retrieved.templates.clone(), Some(retrieved))
        }
    })
}

fn generate_candidates(
    inputs: &PipelineInputs<'_>,
    opts: &PipelineOptions,
    templates: &[Template],
    embedder: &dyn Embedder,
) -> Result<Vec<ChoiceCandidate>> {
    if opts.choice_mode == ChoiceMode::Random {
        return Ok(vec![random_choices(inputs.train, opts.seed)?]);
    }
    let mut out = Vec::new();
    let attempts: [(&str, Box<dyn Fn() -> Result<ChoiceCandidate> + '_>); 3] = [
        ("dataset", Box::new(|| dataset_choices(inputs.train.schema()))),
        (
            "template_tailored",
            Box::new(|| gen_template_tailored(inputs.model, inputs.train, templates, opts.top_m)),
        ),
        ("topic_specific", Box::new(|| gen_topic_specific(embedder, inputs.train, stopwords()))),
    ];
    for (name, gen) in attempts {
        match gen() {
            Ok(c) if !out.iter().any(|o: &ChoiceCandidate| o.mapping == c.mapping) => out.push(c),
            Ok(c) => log::info!("{name} candidate {:?} duplicates an earlier one", c.mapping),
            Err(e) => log::warn!("no {name} candidate: {e}"),
        }
    }
    if out.is_empty() {
        return Err(Error::Generation("no answer-choice candidate could be generated".into()));
    }
    Ok(out)
}

fn pool_samples<'a>(inputs: &'a PipelineInputs<'a>, mode: PoolMode) -> &'a [Sample] {
    match (mode, inputs.pool, inputs.test) {
        (PoolMode::Transductive, Some(p), _) | (PoolMode::Transductive, None, Some(p)) => p.samples(),
        (PoolMode::Transductive, None, None) => {
            log::warn!("no unlabeled pool or test inputs; using training inputs as the pool");
            inputs.train.samples()
        }
        (PoolMode::Train, ..) => inputs.train.samples(),
    }
}

/// Append-only artifact directory.
pub struct RunDir {
    root: PathBuf,
    artifacts: Vec<(String, String)>,
}

impl RunDir {
    /// Create the next free `run-NNNN` directory under `parent`.
    pub fn create(parent: &Path) -> Result<Self> {
        fs::create_dir_all(parent)?;
        for i in 1.. {
            let root = parent.join(format!("run-{i:04}"));
            match fs::create_dir(&root) {
                Ok(()) => {
                    return Ok(RunDir {
                        root,
                        artifacts: Vec::new(),
                    })
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e.into()),
            }
        }
        unreachable!("run directories exhausted")
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    /// Artifact paths written so far.
    pub fn written(&self) -> Vec<String> {
        self.artifacts
            .iter()
            .map(|(n, _)| self.root.join(n).display().to_string())
            .collect()
    }

    fn record(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let digest = Sha256::digest(fs::read(&path)?);
        self.artifacts
            .push((name.to_string(), digest.iter().map(|b| format!("{b:02x}")).collect()));
        Ok(path)
    }

    pub fn put_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        OpenOptions::new().write(true).create_new(true).open(&path)?.write_all(bytes)?;
        self.record(name)
    }

    pub fn put_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.put_bytes(name, &bytes)
    }

    pub fn put_jsonl<T: Serialize>(&mut self, name: &str, records: impl IntoIterator<Item = T>) -> Result<PathBuf> {
        let mut bytes = Vec::new();
        for r in records {
            serde_json::to_writer(&mut bytes, &r)?;
            bytes.push(b'\n');
        }
        self.put_bytes(name, &bytes)
    }

    /// Let `write` produce the file, then record it.
    pub fn put_with(&mut self, name: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let path = self.root.join(name);
        if path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} already exists", path.display()),
            )));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write(&path)?;
        self.record(name)
    }

    /// Run a write, attributing its failure to `stage_name`.
    fn staged(&mut self, stage_name: &str, write: impl FnOnce(&mut RunDir) -> Result<PathBuf>) -> Result<()> {
        let r = write(self).map(|_| ());
        stage(stage_name, Some(self), r)
    }

    /// Write `manifest.json` and return its SHA-256.
    pub fn finish(mut self, config_hash: &str, seed: u64, extra: serde_json::Value) -> Result<(PathBuf, String)> {
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash.into(),
            seed,
            extra,
            artifacts: self
                .artifacts
                .iter()
                .map(|(name, sha256)| ArtifactEntry {
                    name: name.clone(),
                    sha256: sha256.clone(),
                })
                .collect(),
        };
        self.put_json("manifest.json", &manifest)?;
        let (_, hash) = self.artifacts.pop().expect("manifest recorded");
        Ok((self.root, hash))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub extra: serde_json::Value,
    pub artifacts: Vec<ArtifactEntry>,
}

fn stage<T>(name: &str, run: Option<&RunDir>, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name.into(),
        artifacts: run.map(RunDir::written).unwrap_or_default(),
        source: Box::new(e),
    })
}

/// Run every stage in memory; with a run directory, write each stage's
/// artifacts under `prefix` as soon as it completes.
pub fn execute(
    inputs: &PipelineInputs<'_>,
    opts: &PipelineOptions,
    mut run: Option<&mut RunDir>,
    prefix: &str,
) -> Result<PipelineOutcome> {
    opts.validate()?;
    let embedder = HashedBowEmbedder::default();
    let name = |f: &str| format!("{prefix}{f}");

    let (templates, retrieved) = stage("retrieve", run.as_deref(), build_templates(inputs, opts, &embedder))?;
    if let Some(run) = run.as_deref_mut() {
        let records: Vec<_> = match &retrieved {
            Some(r) => r.to_records().into_iter().map(serde_json::to_value).collect::<std::result::Result<_, _>>()?,
            None => templates.iter().map(|t| serde_json::to_value(t.to_record())).collect::<std::result::Result<_, _>>()?,
        };
        run.staged("retrieve", |run| run.put_jsonl(&name("templates.jsonl"), records))?;
    }

    let candidates = stage("choices", run.as_deref(), generate_candidates(inputs, opts, &templates, &embedder))?;
    if let Some(run) = run.as_deref_mut() {
        run.staged("choices", |run| run.put_jsonl(&name("candidates.jsonl"), &candidates))?;
    }

    let pool = pool_samples(inputs, opts.pool_mode);
    let train_cfg = opts.train_config();
    let (winner, scores) = if candidates.len() == 1 {
        (candidates[0].clone(), Vec::new())
    } else {
        let cfg = SelectConfig {
            folds: opts.folds,
            seed: opts.seed,
            temperature: opts.temperature,
            train: train_cfg.clone(),
        };
        stage(
            "select",
            run.as_deref(),
            select_config(&candidates, inputs.train, &templates, inputs.model, pool, &cfg),
        )?
    };
    if let Some(run) = run.as_deref_mut() {
        run.staged("select", |run| run.put_jsonl(&name("selection.jsonl"), &scores))?;
        run.staged("select", |run| run.put_json(&name("winner.json"), &winner))?;
    }

    let (peft, train_report) = stage(
        "train",
        run.as_deref(),
        train_on(inputs.model, inputs.train, &templates, &winner.mapping, &train_cfg),
    )?;
    if let Some(run) = run.as_deref_mut() {
        run.staged("train", |run| run.put_with(&name("adapters.ckpt"), |p| save_peft(inputs.model, &peft, opts.seed, p)))?;
        run.staged("train", |run| run.put_json(&name("losses.json"), &train_report.losses))?;
    }

    let merged = stage("weights", run.as_deref(), inputs.model.merged(&peft))?;
    let weights = stage(
        "weights",
        run.as_deref(),
        ScoreTable::compute(&merged, pool, &templates, &winner).and_then(|t| t.weights(opts.temperature)),
    )?;
    if let Some(run) = run.as_deref_mut() {
        run.staged("weights", |run| run.put_json(&name("weights.json"), &weights))?;
    }

    let (predictions, metrics) = match inputs.test {
        None => (Vec::new(), None),
        Some(test) => {
            let table = stage("predict", run.as_deref(), ScoreTable::compute(&merged, test.samples(), &templates, &winner))?;
            if test.samples().iter().all(|s| s.label.is_some()) {
                let (p, m) = stage("evaluate", run.as_deref(), evaluate_table(&table, test, &weights))?;
                (p, Some(m))
            } else {
                (stage("predict", run.as_deref(), predictions(&table, test.samples(), &weights))?, None)
            }
        }
    };
    if let Some(run) = run {
        if inputs.test.is_some() {
            run.staged("predict", |run| run.put_jsonl(&name("predictions.jsonl"), &predictions))?;
        }
        if let Some(m) = &metrics {
            run.staged("evaluate", |run| run.put_json(&name("metrics.json"), m))?;
        }
    }
    Ok(PipelineOutcome {
        templates,
        retrieved,
        candidates,
        scores,
        winner,
        peft,
        train_report,
        weights,
        predictions,
        metrics,
    })
}

/// Templates from a line-delimited file of retrieval output or KB records.
pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<Template>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parse = |e: serde_json::Error| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(line).map_err(parse)?;
        let t = if value.get("rank").is_some() {
            let r: RetrievedRecord = serde_json::from_value(value).map_err(parse)?;
            Template::new(r.id, r.task, r.template, r.answer_choices)?
        } else {
            Template::try_from(serde_json::from_value::<TemplateRecord>(value).map_err(parse)?)?
        };
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::Validation("template file is empty".into()));
    }
    Ok(out)
}

/// Candidates from a JSON object, JSON array or line-delimited file.
pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<ChoiceCandidate>> {
    let text = fs::read_to_string(path)?;
    let trimmed = text.trim_start();
    if trimmed.starts_with('[') {
        return Ok(serde_json::from_str(trimmed)?);
    }
    if let Ok(one) = serde_json::from_str::<ChoiceCandidate>(trimmed) {
        return Ok(vec![one]);
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// File-based run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub kb: PathBuf,
    pub train: PathBuf,
    /// Defaults to the sidecar next to `train`.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    #[serde(default)]
    pub pool: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub handcrafted: Option<PathBuf>,
    /// Base toy-LM checkpoint.
    pub model: PathBuf,
    pub run_dir: PathBuf,
    #[serde(default)]
    pub options: PipelineOptions,
}

struct Loaded {
    kb: PromptKb,
    train: FewShotDataset,
    pool: Option<FewShotDataset>,
    test: Option<FewShotDataset>,
    handcrafted: Option<PromptKb>,
    model: ToyLm<f32>,
}

impl PipelineConfig {
    /// Every referenced file must exist.
    pub fn validate(&self) -> Result<()> {
        let mut paths = vec![("kb", &self.kb), ("train", &self.train), ("model", &self.model)];
        for (n, p) in [("schema", &self.schema), ("pool", &self.pool), ("test", &self.test), ("handcrafted", &self.handcrafted)] {
            if let Some(p) = p {
                paths.push((n, p));
            }
        }
        for (n, p) in paths {
            if !p.is_file() {
                return Err(Error::Validation(format!("{n} file {} does not exist", p.display())));
            }
        }
        self.options.validate()
    }

    fn load(&self) -> Result<Loaded> {
        self.validate()?;
        let schema_path = self.schema.clone().unwrap_or_else(|| default_schema_path(&self.train));
        let schema = load_schema(&schema_path)?;
        let data = |p: &Option<PathBuf>| p.as_ref().map(|p| load_dataset(p, &schema)).transpose();
        Ok(Loaded {
            kb: ingest_kb(&self.kb)?,
            train: load_dataset(&self.train, &schema)?,
            pool: data(&self.pool)?,
            test: data(&self.test)?,
            handcrafted: self.handcrafted.as_ref().map(ingest_kb).transpose()?,
            model: load_model(&self.model)?,
        })
    }

    fn hash(&self, model: &ToyLm<f32>) -> Result<String> {
        let inputs = [&Some(self.kb.clone()), &Some(self.train.clone()), &self.schema, &self.pool, &self.test, &self.handcrafted];
        let mut digests = Vec::new();
        for p in inputs.into_iter().flatten() {
            digests.push(Sha256::digest(fs::read(p)?).to_vec());
        }
        config_hash(&(&self.options, model_hash(model)?, digests))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_dir: PathBuf,
    pub manifest_hash: String,
    pub winner: ChoiceCandidate,
    pub metrics: Option<Metrics>,
}

/// Load inputs, execute every stage and write the run directory.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport> {
    let loaded = config.load()?;
    let hash = config.hash(&loaded.model)?;
    let inputs = PipelineInputs {
        kb: &loaded.kb,
        train: &loaded.train,
        pool: loaded.pool.as_ref(),
        test: loaded.test.as_ref(),
        handcrafted: loaded.handcrafted.as_ref(),
        model: &loaded.model,
    };
    let mut run = RunDir::create(&config.run_dir)?;
    run.put_json("config.json", &config.options)?;
    let outcome = execute(&inputs, &config.options, Some(&mut run), "")?;
    let (run_dir, manifest_hash) = run.finish(&hash, config.options.seed, seeds(config, &loaded.model))?;
    Ok(RunReport {
        run_dir,
        manifest_hash,
        winner: outcome.winner,
        metrics: outcome.metrics,
    })
}

fn seeds(config: &PipelineConfig, model: &ToyLm<f32>) -> serde_json::Value {
    serde_json::json!({
        "pipeline": config.options.seed,
        "model": model.seed(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: TemplateMode,
    pub winner: ChoiceCandidate,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub run_dir: PathBuf,
    pub manifest_hash: String,
    pub rows: Vec<AblationRow>,
}

/// Run the pipeline once per template mode, everything else identical.
pub fn run_ablation(config: &PipelineConfig, modes: &[TemplateMode]) -> Result<AblationReport> {
    if modes.contains(&TemplateMode::Handcrafted) && config.handcrafted.is_none() {
        return Err(Error::Validation("handcrafted mode needs a template file".into()));
    }
    let loaded = config.load()?;
    let hash = config_hash(&(config.hash(&loaded.model)?, modes))?;
    let inputs = PipelineInputs {
        kb: &loaded.kb,
        train: &loaded.train,
        pool: loaded.pool.as_ref(),
        test: loaded.test.as_ref(),
        handcrafted: loaded.handcrafted.as_ref(),
        model: &loaded.model,
    };
    let mut run = RunDir::create(&config.run_dir)?;
    run.put_json("config.json", &config.options)?;
    let mut rows = Vec::new();
    for &mode in modes {
        let opts = PipelineOptions {
            template_mode: mode,
            ..config.options.clone()
        };
        let outcome = execute(&inputs, &opts, Some(&mut run), &format!("{}/", mode.name()))?;
        rows.push(AblationRow {
            mode,
            winner: outcome.winner,
            metrics: outcome.metrics,
        });
    }
    run.put_json("comparison.json", &rows)?;
    let (run_dir, manifest_hash) = run.finish(&hash, config.options.seed, seeds(config, &loaded.model))?;
    Ok(AblationReport {
        run_dir,
        manifest_hash,
        rows,
    })
}
