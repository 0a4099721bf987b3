use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use autfew::checkpoint::{load_model, load_peft, save_model, save_peft};
use autfew::choices::{
    dataset_choices, gen_template_tailored, gen_topic_specific, random_choices, stopwords, CandidateKind,
    ChoiceCandidate, DEFAULT_TOP_M,
};
use autfew::dataset::{default_schema_path, load_dataset, load_schema, FewShotDataset};
use autfew::embedder::HashedBowEmbedder;
use autfew::inference::{evaluate_table, predictions, ScoreTable, TemplateWeights};
use autfew::lm::{BigramBackend, HttpBackend, ScoringBackend, ToyLm};
use autfew::peft_trainer::{pretrain, train_on, TrainConfig};
use autfew::pipeline::{
    load_candidates, load_templates, run_ablation, run_pipeline, PipelineConfig, TemplateMode,
};
use autfew::prompt_kb::{ingest_kb, Template};
use autfew::retrieval::{build_query, retrieve, RetrievalConfig, DEFAULT_R};
use autfew::select::{select_config, PoolMode, SelectConfig};
use autfew::synth;
use autfew::Error;

#[derive(Parser)]
#[command(name = "autfew", version, about = "Automated prompts for few-shot classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = BackendKind::Toy)]
    backend: BackendKind,
    #[arg(long, global = true, env = autfew::lm::http::ENV_URL)]
    backend_url: Option<String>,
    /// Base toy-LM checkpoint.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Text corpus for the bigram backend, one document per line.
    #[arg(long, global = true)]
    bigram_corpus: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pool_mode: Option<PoolModeArg>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Toy,
    Bigram,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolModeArg {
    Transductive,
    Train,
}

impl From<PoolModeArg> for PoolMode {
    fn from(m: PoolModeArg) -> Self {
        match m {
            PoolModeArg::Transductive => PoolMode::Transductive,
            PoolModeArg::Train => PoolMode::Train,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Knowledge-base operations.
    Kb {
        #[command(subcommand)]
        op: KbOp,
    },
    /// Stratified K-per-class sample of a labeled dataset.
    Sample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the unsampled remainder.
        #[arg(long)]
        rest: Option<PathBuf>,
    },
    /// Rank KB templates for a task and keep the top R.
    Retrieve {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_R)]
        r: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Answer-choice operations.
    Choices {
        #[command(subcommand)]
        op: ChoicesOp,
    },
    /// Cross-validate candidates and pick one.
    Select {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        folds: usize,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train adapters on a few-shot set.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        /// Comma-separated choices or a candidate file.
        #[arg(long)]
        choices: String,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict labels with template-weighted inference.
    Predict {
        #[command(flatten)]
        inf: InferenceArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict and score against gold labels.
    Eval {
        #[command(flatten)]
        inf: InferenceArgs,
        /// Also write per-sample predictions here.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare template modes with everything else fixed.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset of null,random,general,handcrafted,auto.
        #[arg(long, default_value = "null,random,general,auto")]
        modes: String,
    },
    /// Full automated run.
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write the synthetic knowledge base and a topic task.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 32)]
        k: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
    },
    /// Instruction-tune a toy LM on the synthetic corpus.
    Pretrain {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(Subcommand)]
enum KbOp {
    /// Parse and validate a KB file; print a summary.
    Ingest {
        #[arg(long)]
        kb: PathBuf,
        /// Write the normalized KB here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum KindArg {
    All,
    Dataset,
    Tailored,
    Topic,
    Random,
}

#[derive(Subcommand)]
enum ChoicesOp {
    /// Generate candidates.
    Gen {
        #[arg(long, value_enum, default_value_t = KindArg::All)]
        kind: KindArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        templates: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_TOP_M)]
        top_m: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct InferenceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    templates: PathBuf,
    /// Comma-separated choices or a candidate file.
    #[arg(long)]
    choices: String,
    /// Trained adapters for the toy backend.
    #[arg(long)]
    adapters: Option<PathBuf>,
    /// Unlabeled inputs for template weights; defaults to `data`.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Fixed weights (JSON); skips pool weighting.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    pool: Option<PathBuf>,
    #[arg(long)]
    handcrafted: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
}

/// Marks errors raised before any work started.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<Invalid>().is_some()
                || e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation));
            ExitCode::from(if validation { 2 } else { 3 })
        }
    }
}

fn emit(out: Option<&Path>, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn emit_lines<T: Serialize>(out: Option<&Path>, records: &[T]) -> anyhow::Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn dataset(path: &Path) -> anyhow::Result<FewShotDataset> {
    let schema = load_schema(default_schema_path(path)).with_context(|| format!("schema for {}", path.display()))?;
    load_dataset(path, &schema).with_context(|| format!("reading {}", path.display()))
}

fn templates(path: &Path) -> anyhow::Result<Vec<Template>> {
    load_templates(path).with_context(|| format!("reading templates {}", path.display()))
}

fn choice_arg(arg: &str, num_classes: usize) -> anyhow::Result<ChoiceCandidate> {
    let c = if Path::new(arg).is_file() {
        load_candidates(arg)?
            .into_iter()
            .next()
            .ok_or_else(|| invalid(format!("{arg} holds no candidate")))?
    } else {
        ChoiceCandidate::new(CandidateKind::Manual, arg.split(',').map(|s| s.trim().to_string()).collect())?
    };
    c.validate(num_classes)?;
    Ok(c)
}

fn toy_model(g: &Global) -> anyhow::Result<ToyLm<f32>> {
    if g.backend != BackendKind::Toy {
        bail!(invalid("training and selection need --backend toy"));
    }
    let path = g.model.as_ref().ok_or_else(|| invalid("--model <checkpoint> is required"))?;
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

/// Scoring backend; the toy model gets adapters folded in when given.
fn backend(g: &Global, adapters: Option<&Path>) -> anyhow::Result<Box<dyn ScoringBackend>> {
    match g.backend {
        BackendKind::Toy => {
            let model = toy_model(g)?;
            Ok(match adapters {
                Some(p) => {
                    let (peft, _) = load_peft(&model, p).with_context(|| format!("loading {}", p.display()))?;
                    Box::new(model.merged(&peft)?)
                }
                None => Box::new(model),
            })
        }
        _ if adapters.is_some() => bail!(invalid("--adapters needs --backend toy")),
        BackendKind::Bigram => {
            let path = g.bigram_corpus.as_ref().ok_or_else(|| invalid("--bigram-corpus is required"))?;
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Ok(Box::new(BigramBackend::from_corpus(text.lines())))
        }
        BackendKind::Http => {
            let url = g.backend_url.as_ref().ok_or_else(|| invalid("--backend-url is required"))?;
            Ok(Box::new(HttpBackend::new(url, Duration::from_secs(30))))
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    let seed = g.seed.unwrap_or(0);
    match cli.command {
        Command::Kb { op: KbOp::Ingest { kb, out } } => {
            let kb = ingest_kb(&kb).with_context(|| format!("ingesting {}", kb.display()))?;
            if let Some(out) = out {
                kb.write_to(fs::File::create(&out)?)?;
            }
            let arities: std::collections::BTreeMap<usize, usize> =
                kb.arity_index().iter().map(|(a, ids)| (*a, ids.len())).collect();
            emit(None, &serde_json::json!({"templates": kb.len(), "arities": arities}))
        }
        Command::Sample { data, k, out, rest } => {
            let (picked, remainder) = dataset(&data)?.sample_k_per_class(k, seed)?;
            picked.write_to(fs::File::create(&out)?)?;
            if let Some(rest) = rest {
                remainder.write_to(fs::File::create(&rest)?)?;
            }
            emit(None, &serde_json::json!({"sampled": picked.len(), "rest": remainder.len()}))
        }
        Command::Retrieve { kb, data, r, out } => {
            let kb = ingest_kb(&kb)?;
            let train = dataset(&data)?;
            let embedder = HashedBowEmbedder::default();
            let cfg = RetrievalConfig::with_r(r)?;
            let query = build_query(train.schema(), &train, &embedder, &cfg)?;
            let found = retrieve(&kb, train.schema(), &query, &embedder, &cfg)?;
            emit_lines(out.as_deref(), &found.to_records())
        }
        Command::Choices {
            op: ChoicesOp::Gen { kind, data, templates: tpl, top_m, out },
        } => {
            let train = dataset(&data)?;
            let mut found = Vec::new();
            let want = |k: KindArg| kind == KindArg::All || kind == k;
            let mut attempt = |name: &str, r: autfew::Result<ChoiceCandidate>| -> autfew::Result<()> {
                match r {
                    Ok(c) => found.push(c),
                    Err(e) if kind == KindArg::All => log::warn!("no {name} candidate: {e}"),
                    Err(e) => return Err(e),
                }
                Ok(())
            };
            if want(KindArg::Dataset) {
                attempt("dataset", dataset_choices(train.schema()))?;
            }
            if want(KindArg::Tailored) {
                let path = tpl.as_ref().ok_or_else(|| invalid("tailored choices need --templates"))?;
                let t = templates(path)?;
                let b = backend(g, None)?;
                attempt("template_tailored", gen_template_tailored(b.as_ref(), &train, &t, top_m))?;
            }
            if want(KindArg::Topic) {
                let embedder = HashedBowEmbedder::default();
                attempt("topic_specific", gen_topic_specific(&embedder, &train, stopwords()))?;
            }
            if kind == KindArg::Random {
                attempt("random", random_choices(&train, seed))?;
            }
            if found.is_empty() {
                bail!(Error::Generation("no candidate could be generated".into()));
            }
            emit_lines(out.as_deref(), &found)
        }
        Command::Select { candidates, data, templates: tpl, pool, folds, steps, out } => {
            let model = toy_model(g)?;
            let train = dataset(&data)?;
            let cands = load_candidates(&candidates)?;
            let t = templates(&tpl)?;
            let pool_data = match (g.pool_mode.map(PoolMode::from).unwrap_or_default(), pool) {
                (PoolMode::Transductive, Some(p)) => dataset(&p)?,
                _ => train.without_labels(),
            };
            let cfg = SelectConfig {
                folds,
                seed,
                temperature: 1.0,
                train: TrainConfig { steps, seed, ..Default::default() },
            };
            let (winner, scores) = select_config(&cands, &train, &t, &model, pool_data.samples(), &cfg)?;
            emit(out.as_deref(), &serde_json::json!({"scores": scores, "winner": winner}))
        }
        Command::Train { data, templates: tpl, choices, steps, out } => {
            let model = toy_model(g)?;
            let train = dataset(&data)?;
            let t = templates(&tpl)?;
            let c = choice_arg(&choices, train.num_classes())?;
            let cfg = TrainConfig { steps, seed, ..Default::default() };
            let (peft, report) = train_on(&model, &train, &t, &c.mapping, &cfg)?;
            save_peft(&model, &peft, seed, &out)?;
            emit(
                None,
                &serde_json::json!({
                    "steps": report.losses.len(),
                    "final_loss": report.losses.last(),
                    "clamp_warnings": report.clamp_warnings,
                }),
            )
        }
        Command::Predict { inf, out } => {
            let (data, table, weights) = score(g, &inf)?;
            let preds = predictions(&table, data.samples(), &weights)?;
            emit_lines(out.as_deref(), &preds)
        }
        Command::Eval { inf, predictions: pred_out, out } => {
            let (data, table, weights) = score(g, &inf)?;
            let (preds, metrics) = evaluate_table(&table, &data, &weights)?;
            if let Some(p) = pred_out {
                emit_lines(Some(&p), &preds)?;
            }
            emit(out.as_deref(), &metrics)
        }
        Command::Pipeline { run } => {
            let config = pipeline_config(g, &run)?;
            let report = run_pipeline(&config)?;
            emit(None, &report)
        }
        Command::Ablate { run, modes } => {
            let config = pipeline_config(g, &run)?;
            let modes = modes
                .split(',')
                .map(|m| {
                    TemplateMode::ALL
                        .into_iter()
                        .find(|t| t.name() == m.trim())
                        .ok_or_else(|| invalid(format!("unknown template mode {m:?}")))
                })
                .collect::<anyhow::Result<Vec<_>>>()?;
            let report = run_ablation(&config, &modes)?;
            emit(None, &report)
        }
        Command::Synth { out_dir, k, n_test } => {
            fs::create_dir_all(&out_dir)?;
            let kb = synth::knowledge_base();
            kb.write_to(fs::File::create(out_dir.join("kb.jsonl"))?)?;
            let cfg = synth::TopicTaskConfig {
                k_per_class: k,
                n_test,
                seed,
                ..Default::default()
            };
            let (train, test) = synth::topic_task(&cfg)?;
            fs::write(out_dir.join("schema.json"), serde_json::to_string_pretty(train.schema())?)?;
            train.write_to(fs::File::create(out_dir.join("train.jsonl"))?)?;
            test.write_to(fs::File::create(out_dir.join("test.jsonl"))?)?;
            emit(None, &serde_json::json!({"train": train.len(), "test": test.len(), "templates": kb.len()}))
        }
        Command::Pretrain { out, steps } => {
            let mut cfg = synth::WorldConfig::default();
            cfg.model_seed = seed;
            if let Some(s) = steps {
                cfg.pretrain.steps = s;
            }
            let corpus = synth::instruction_corpus(&synth::knowledge_base(), cfg.per_template, cfg.corpus_seed);
            let mut model: ToyLm<f32> = ToyLm::new(cfg.model.clone(), synth::vocabulary(&corpus), cfg.model_seed)?;
            let losses = pretrain(&mut model, &corpus, &cfg.pretrain)?;
            save_model(&model, &out)?;
            emit(
                None,
                &serde_json::json!({"steps": losses.len(), "final_loss": losses.last(), "weights": model.num_weights()}),
            )
        }
    }
}

/// Backend scores for `inf.data` plus template weights.
fn score(g: &Global, inf: &InferenceArgs) -> anyhow::Result<(FewShotDataset, ScoreTable, TemplateWeights)> {
    let data = dataset(&inf.data)?;
    let t = templates(&inf.templates)?;
    let c = choice_arg(&inf.choices, data.num_classes())?;
    let b = backend(g, inf.adapters.as_deref())?;
    let table = ScoreTable::compute(b.as_ref(), data.samples(), &t, &c)?;
    let weights = match (&inf.weights, &inf.pool) {
        (Some(w), _) => TemplateWeights::new(serde_json::from_str::<TemplateWeights>(&fs::read_to_string(w)?)?.w)?,
        (None, Some(p)) => ScoreTable::compute(b.as_ref(), dataset(p)?.samples(), &t, &c)?.weights(inf.temperature)?,
        (None, None) => table.weights(inf.temperature)?,
    };
    if weights.len() != t.len() {
        bail!(invalid(format!("{} weights for {} templates", weights.len(), t.len())));
    }
    Ok((data, table, weights))
}

fn pipeline_config(g: &Global, run: &RunArgs) -> anyhow::Result<PipelineConfig> {
    let mut config: PipelineConfig = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", p.display())))?
        }
        None => {
            let need = |v: &Option<PathBuf>, flag: &str| v.clone().ok_or_else(|| invalid(format!("{flag} is required without --config")));
            PipelineConfig {
                kb: need(&run.kb, "--kb")?,
                train: need(&run.train, "--train")?,
                schema: None,
                pool: None,
                test: None,
                handcrafted: None,
                model: need(&g.model, "--model")?,
                run_dir: PathBuf::from("runs"),
                options: Default::default(),
            }
        }
    };
    if g.backend != BackendKind::Toy {
        bail!(invalid("the pipeline trains adapters and needs --backend toy"));
    }
    macro_rules! set {
        ($field:expr, $value:expr) => {
            if let Some(v) = $value {
                $field = v;
            }
        };
    }
    set!(config.kb, run.kb.clone());
    set!(config.train, run.train.clone());
    set!(config.model, g.model.clone());
    set!(config.run_dir, g.run_dir.clone());
    set!(config.options.seed, g.seed);
    set!(config.options.pool_mode, g.pool_mode.map(PoolMode::from));
    set!(config.options.train.steps, run.steps);
    set!(config.options.r, run.r);
    for (slot, value) in [
        (&mut config.test, &run.test),
        (&mut config.pool, &run.pool),
        (&mut config.handcrafted, &run.handcrafted),
    ] {
        if value.is_some() {
            *slot = value.clone();
        }
    }
    config.validate()?;
    Ok(config)
}
