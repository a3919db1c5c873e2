//! The `attrmem` command line: augment corpora into a store, build vector
//! indexes, run retrievals, print corpus statistics and drive the
//! evaluation tasks.
//!
//! Exit codes: 0 success, 1 usage, 2 IO or schema, 3 backend failure,
//! 4 augmentation failure rate above the threshold.

pub mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::SystemTime;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use attrmem::annotation::render_annotation;
use attrmem::augment::{modes_for_kind, AugmentError, AugmentationReport, Augmenter};
use attrmem::backend::{MockRules, ProfileError, RuleTableError};
use attrmem::eval::{
    render_table, run_event_summarization, run_qa_task, run_rec_task, Dataset, EvalError,
    EventConfig, QaBackends, QaConfig, RecBackends, RecConfig, SummaryInput, SummaryLevel,
};
use attrmem::prompts::{TemplateError, TemplateRegistry};
use attrmem::retrieval::{
    build_index, connect_embedder, retrieve, EmbedError, Embedder, QueryContext, RetrievalConfig,
    RetrievalError, RetrievalMode, VectorIndex,
};
use attrmem::store::{
    load_items, load_store, save_store, AugmentedMemory, LoadMode, MemoryStore, StoreError,
};
use attrmem::synth;

use config::{Overrides, RunConfig};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_BACKEND: u8 = 3;
pub const EXIT_THRESHOLD: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "attrmem",
    version,
    about = "Attribute-annotated memory for dialogue agents"
)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    /// Omit generation timestamps from report files.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Annotate a JSONL corpus of memory items into the store.
    Augment(AugmentArgs),
    /// Retrieve memory for a query.
    Retrieve { query: String },
    /// Embed the store and write a vector index.
    Index {
        /// Defaults to --index.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print corpus statistics for the store.
    Stats,
    /// Write a dataset's turns, sessions or catalog entities as item JSONL.
    ExportItems {
        #[arg(long, value_enum)]
        kind: ExportKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset and matching mock rule table.
    Synth {
        #[arg(value_enum)]
        task: Task,
        #[arg(long)]
        out: PathBuf,
        /// Turns (qa) or catalog items (rec).
        #[arg(long)]
        size: Option<usize>,
    },
    /// Run an evaluation task and write reports plus a config snapshot.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    /// JSONL file of memory items.
    #[arg(long)]
    pub input: PathBuf,
    /// Re-augment items already in the store.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(value_enum)]
    pub task: Task,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = LevelArg::Turn)]
    pub level: LevelArg,
    #[arg(long, value_enum, default_value_t = InputArg::Annotations)]
    pub input: InputArg,
    /// Score event summaries with the judge backend.
    #[arg(long)]
    pub judge: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Qa,
    Rec,
    Events,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Qa => "qa",
            Task::Rec => "rec",
            Task::Events => "events",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    Turns,
    Sessions,
    Entities,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Turn,
    Session,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputArg {
    Annotations,
    AnnotationsDialogues,
}

/// Error carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: anyhow::Error) -> Self {
        Self { code, error }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self {
            code: exit_code(&error),
            error,
        }
    }
}

fn retrieval_code(e: &RetrievalError) -> u8 {
    match e {
        RetrievalError::Embed(EmbedError::Transport(_)) => EXIT_BACKEND,
        RetrievalError::Embed(_) | RetrievalError::DuplicateEntry(_) => EXIT_IO,
        RetrievalError::IndexFile { .. } => EXIT_IO,
        RetrievalError::Profile(p) => profile_code(p),
        _ => EXIT_USAGE,
    }
}

fn augment_code(e: &AugmentError) -> u8 {
    match e {
        AugmentError::Failure(_) => EXIT_BACKEND,
        _ => EXIT_IO,
    }
}

fn profile_code(e: &ProfileError) -> u8 {
    match e {
        ProfileError::Client(_) => EXIT_BACKEND,
        _ => EXIT_USAGE,
    }
}

/// Maps the first recognised error in the chain to an exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<EvalError>() {
            return match e {
                EvalError::Io { .. } | EvalError::Schema(_) => EXIT_IO,
                EvalError::LabelNotFound | EvalError::NoEventAttributes(_) => EXIT_IO,
                EvalError::Retrieval(r) => retrieval_code(r),
                EvalError::Augment(a) => augment_code(a),
                EvalError::SampleTooLarge { .. }
                | EvalError::InvalidConfig(_)
                | EvalError::Metric(_) => EXIT_USAGE,
            };
        }
        if let Some(e) = cause.downcast_ref::<RetrievalError>() {
            return retrieval_code(e);
        }
        if let Some(e) = cause.downcast_ref::<EmbedError>() {
            return retrieval_code(&RetrievalError::Embed(e.clone()));
        }
        if let Some(e) = cause.downcast_ref::<AugmentError>() {
            return augment_code(e);
        }
        if let Some(e) = cause.downcast_ref::<ProfileError>() {
            return profile_code(e);
        }
        if cause.is::<StoreError>()
            || cause.is::<TemplateError>()
            || cause.is::<RuleTableError>()
            || cause.is::<std::io::Error>()
            || cause.is::<toml::de::Error>()
            || cause.is::<serde_json::Error>()
        {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

/// Loaded configuration plus the backends and templates it names.
struct Env {
    cfg: RunConfig,
    json: bool,
    timestamp: bool,
    rules: MockRules,
    registry: TemplateRegistry,
}

impl Env {
    fn new(cli: &Cli) -> anyhow::Result<Self> {
        let cfg = RunConfig::resolve(&cli.overrides)?;
        let rules = match &cfg.rules {
            Some(p) => MockRules::load(p)
                .with_context(|| format!("cannot load rule table {}", p.display()))?,
            None => MockRules::builtin(),
        };
        let mut registry = TemplateRegistry::with_defaults();
        if let Some(dir) = &cfg.templates {
            let n = registry.load_dir(dir)?;
            log::info!("loaded {n} template override(s) from {}", dir.display());
        }
        Ok(Self {
            cfg,
            json: cli.json,
            timestamp: !cli.no_timestamp,
            rules,
            registry,
        })
    }

    fn augmenter(&self, profile: &attrmem::backend::BackendProfile) -> anyhow::Result<Augmenter> {
        let backend = profile.connect(&self.rules)?;
        Ok(Augmenter::new(backend)
            .with_registry(self.registry.clone())
            .with_max_retries(profile.max_retries)
            .with_parallelism(self.cfg.parallelism))
    }

    fn embedder(&self) -> anyhow::Result<Arc<dyn Embedder>> {
        Ok(connect_embedder(&self.cfg.backends.embed, self.cfg.dim)?)
    }

    fn store_path(&self) -> anyhow::Result<&Path> {
        self.cfg
            .store
            .as_deref()
            .ok_or_else(|| anyhow!("--store is required"))
    }

    fn load_store(&self) -> anyhow::Result<MemoryStore> {
        let path = self.store_path()?;
        let (store, _) = load_store(path, LoadMode::Strict)?;
        Ok(store)
    }

    fn dataset(&self) -> anyhow::Result<Dataset> {
        let path = self
            .cfg
            .dataset
            .as_deref()
            .ok_or_else(|| anyhow!("--dataset is required"))?;
        Ok(Dataset::load(path)?)
    }

    /// The configured index file, or an in-memory index built from the store.
    fn index(&self, store: &MemoryStore, embedder: &dyn Embedder) -> anyhow::Result<VectorIndex> {
        let strategy = self.cfg.strategy.into();
        let index = match &self.cfg.index {
            Some(path) => VectorIndex::load(path)?,
            None => {
                log::info!("no --index given; embedding the store in memory");
                build_index(store, strategy, embedder)?.0
            }
        };
        if index.strategy() != strategy {
            return Err(RetrievalError::StrategyMismatch {
                index: index.strategy(),
                query: strategy,
            }
            .into());
        }
        Ok(index)
    }

    fn retrieval(&self, defaults: RetrievalConfig) -> RetrievalConfig {
        RetrievalConfig {
            mode: self.cfg.mode.into(),
            k: self.cfg.k.unwrap_or(defaults.k),
            policy: self.cfg.policy.map(Into::into).unwrap_or(defaults.policy),
            components: self.cfg.query_components(defaults.components),
        }
    }

    fn generated_at(&self) -> Option<String> {
        self.timestamp
            .then(|| humantime::format_rfc3339_seconds(SystemTime::now()).to_string())
    }
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<(), Failure> {
    let ctx = Env::new(cli)?;
    match &cli.command {
        Command::Augment(args) => cmd_augment(&ctx, args, out),
        Command::Retrieve { query } => cmd_retrieve(&ctx, query, out).map_err(Failure::from),
        Command::Index { out: path } => {
            cmd_index(&ctx, path.as_deref(), out).map_err(Failure::from)
        }
        Command::Stats => cmd_stats(&ctx, out).map_err(Failure::from),
        Command::ExportItems { kind, out: path } => {
            cmd_export(&ctx, *kind, path, out).map_err(Failure::from)
        }
        Command::Synth {
            task,
            out: dir,
            size,
        } => cmd_synth(*task, dir, *size, out).map_err(Failure::from),
        Command::Eval(args) => cmd_eval(&ctx, args, out).map_err(Failure::from),
    }
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> anyhow::Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

fn render_report(r: &AugmentationReport) -> String {
    let mut s = format!(
        "total={} succeeded={} failed={} failure_rate={:.4}\n",
        r.total, r.succeeded, r.failed, r.failure_rate
    );
    for (id, reason) in &r.failures {
        s.push_str(&format!("failed\t{id}\t{reason}\n"));
    }
    s
}

fn cmd_augment(ctx: &Env, args: &AugmentArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let store_path = ctx.store_path()?;
    let items = load_items(&args.input).map_err(anyhow::Error::from)?;
    let mut store = if store_path.exists() {
        ctx.load_store()?
    } else {
        MemoryStore::new()
    };
    let todo: Vec<_> = items
        .into_iter()
        .filter(|item| {
            let fresh = args.overwrite || !store.contains(&item.id);
            if !fresh {
                log::info!("{} already in store; skipping", item.id);
            }
            fresh
        })
        .collect();
    let augmenter = ctx.augmenter(&ctx.cfg.backends.augment)?;
    let prio = ctx.cfg.prioritization.into();
    let outcome = augmenter
        .augment_corpus_with(&todo, |item| modes_for_kind(item.kind, prio))
        .map_err(anyhow::Error::from)?;
    let mut annotations: std::collections::HashMap<_, _> =
        outcome.annotations.into_iter().collect();
    for item in todo {
        let annotation = annotations.remove(&item.id);
        store
            .write_record(AugmentedMemory { item, annotation }, args.overwrite)
            .map_err(anyhow::Error::from)?;
    }
    let report = outcome.report;
    store.record_augmentation(report.clone());
    save_store(&store, store_path).map_err(anyhow::Error::from)?;
    if ctx.json {
        emit_json(out, &report)?;
    } else {
        write!(out, "{}", render_report(&report)).map_err(anyhow::Error::from)?;
    }
    if let Some(t) = ctx.cfg.threshold {
        if report.failure_rate > t {
            return Err(Failure::new(
                EXIT_THRESHOLD,
                anyhow!(
                    "failure rate {:.4} exceeds threshold {t:.4}",
                    report.failure_rate
                ),
            ));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct RetrievedLine<'a> {
    rank: usize,
    id: &'a str,
    score: f64,
    annotation: Option<String>,
}

fn cmd_retrieve(ctx: &Env, query: &str, out: &mut dyn Write) -> anyhow::Result<()> {
    let store = ctx.load_store()?;
    let config = ctx.retrieval(QaConfig::default().retrieval);
    let embedder = ctx.embedder()?;
    let (index, qctx) = match config.mode {
        RetrievalMode::Comprehensive => (
            None,
            QueryContext {
                text: query.to_string(),
                terms: Vec::new(),
            },
        ),
        mode => {
            let mined = ctx
                .augmenter(&ctx.cfg.backends.augment)?
                .augment_question(query)?;
            let index = match mode {
                RetrievalMode::EmbeddingBased => Some(ctx.index(&store, embedder.as_ref())?),
                _ => None,
            };
            (index, QueryContext::from_question(query, &mined))
        }
    };
    let result = retrieve(&store, index.as_ref(), embedder.as_ref(), &qctx, &config)?;
    let lines: Vec<RetrievedLine<'_>> = result
        .ranked
        .iter()
        .map(|h| RetrievedLine {
            rank: h.rank,
            id: &h.id,
            score: h.score,
            annotation: store
                .get(&h.id)
                .and_then(|r| r.annotation.as_ref())
                .map(render_annotation),
        })
        .collect();
    if ctx.json {
        emit_json(out, &lines)?;
    } else {
        for l in &lines {
            writeln!(
                out,
                "{}\t{}\t{:.6}\t{}",
                l.rank,
                l.id,
                l.score,
                l.annotation.as_deref().unwrap_or("")
            )?;
        }
    }
    Ok(())
}

fn cmd_index(ctx: &Env, path: Option<&Path>, out: &mut dyn Write) -> anyhow::Result<()> {
    let path = path
        .or(ctx.cfg.index.as_deref())
        .ok_or_else(|| anyhow!("index needs --out or --index"))?;
    let store = ctx.load_store()?;
    let embedder = ctx.embedder()?;
    let (index, skipped) = build_index(&store, ctx.cfg.strategy.into(), embedder.as_ref())?;
    index.save(path)?;
    if ctx.json {
        emit_json(
            out,
            &serde_json::json!({
                "path": path,
                "entries": index.len(),
                "dimension": index.dimension(),
                "skipped": skipped.iter().map(|s| (&s.id, &s.reason)).collect::<Vec<_>>(),
            }),
        )?;
    } else {
        writeln!(
            out,
            "indexed {} item(s), dimension {}, skipped {}",
            index.len(),
            index.dimension(),
            skipped.len()
        )?;
        for s in &skipped {
            writeln!(out, "skipped\t{}\t{}", s.id, s.reason)?;
        }
    }
    Ok(())
}

fn cmd_stats(ctx: &Env, out: &mut dyn Write) -> anyhow::Result<()> {
    let stats = ctx.load_store()?.compute_stats();
    if ctx.json {
        return emit_json(out, &stats);
    }
    writeln!(out, "total_items\t{}", stats.total_items)?;
    writeln!(out, "annotated_items\t{}", stats.annotated_items)?;
    writeln!(out, "avg_attributes\t{:.4}", stats.avg_attributes)?;
    writeln!(out, "failure_rate\t{:.4}", stats.failure_rate)?;
    writeln!(out, "top_attributes")?;
    for (name, count) in &stats.top_attributes {
        writeln!(out, "  {name}\t{count}")?;
    }
    Ok(())
}

fn cmd_export(ctx: &Env, kind: ExportKind, path: &Path, out: &mut dyn Write) -> anyhow::Result<()> {
    let ds = ctx.dataset()?;
    let items = match kind {
        ExportKind::Turns => ds.turn_items(),
        ExportKind::Sessions => ds.session_items(),
        ExportKind::Entities => ds.entity_items(),
    };
    let mut text = String::new();
    for item in &items {
        text.push_str(&serde_json::to_string(item)?);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?;
    writeln!(out, "wrote {} item(s) to {}", items.len(), path.display())?;
    Ok(())
}

fn cmd_synth(
    task: Task,
    dir: &Path,
    size: Option<usize>,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let fixture = match task {
        Task::Qa => synth::qa_bijective(size.unwrap_or(50)),
        Task::Rec => {
            let n = size.unwrap_or(synth::REC_MAX_ITEMS);
            if n == 0 || n > synth::REC_MAX_ITEMS {
                anyhow::bail!("rec fixture size must lie in 1..={}", synth::REC_MAX_ITEMS);
            }
            synth::rec_planted(n)
        }
        Task::Events => synth::event_sessions(),
    };
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let ds_path = dir.join("dataset.json");
    fs::write(
        &ds_path,
        serde_json::to_string_pretty(&fixture.dataset)? + "\n",
    )
    .with_context(|| format!("cannot write {}", ds_path.display()))?;
    let rules_path = dir.join("rules.tsv");
    fs::write(&rules_path, fixture.rules.to_tsv())
        .with_context(|| format!("cannot write {}", rules_path.display()))?;
    writeln!(
        out,
        "wrote {} and {}",
        ds_path.display(),
        rules_path.display()
    )?;
    Ok(())
}

#[derive(Serialize)]
struct Snapshot<'a, T: Serialize> {
    task: Task,
    run: &'a RunConfig,
    task_config: &'a T,
}

#[derive(Serialize)]
struct ReportFile<'a, T: Serialize> {
    task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    outcome: &'a T,
}

fn write_outputs<C: Serialize, O: Serialize>(
    ctx: &Env,
    args: &EvalArgs,
    task_config: &C,
    outcome: &O,
    text: &str,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let dir = &args.out;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let write = |name: String, body: String| -> anyhow::Result<()> {
        let path = dir.join(name);
        fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))
    };
    let report = ReportFile {
        task: args.task,
        generated_at: ctx.generated_at(),
        outcome,
    };
    let report_json = serde_json::to_string_pretty(&report)? + "\n";
    write(format!("{}_report.json", args.task), report_json.clone())?;
    write(format!("{}_report.txt", args.task), text.to_string())?;
    let snapshot = Snapshot {
        task: args.task,
        run: &ctx.cfg,
        task_config,
    };
    write(
        format!("{}_config.json", args.task),
        serde_json::to_string_pretty(&snapshot)? + "\n",
    )?;
    if ctx.json {
        out.write_all(report_json.as_bytes())?;
    } else {
        out.write_all(text.as_bytes())?;
    }
    Ok(())
}

fn cmd_eval(ctx: &Env, args: &EvalArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let ds = ctx.dataset()?;
    let store = ctx.load_store()?;
    match args.task {
        Task::Qa => {
            let config = QaConfig {
                retrieval: ctx.retrieval(QaConfig::default().retrieval),
                parallelism: ctx.cfg.parallelism,
            };
            let embedder = ctx.embedder()?;
            let index = match config.retrieval.mode {
                RetrievalMode::EmbeddingBased => Some(ctx.index(&store, embedder.as_ref())?),
                _ => None,
            };
            let question = ctx.augmenter(&ctx.cfg.backends.augment)?;
            let answer = ctx.augmenter(&ctx.cfg.backends.answer)?;
            let backends = QaBackends {
                question: &question,
                answer: &answer,
            };
            let outcome = run_qa_task(
                &ds,
                &store,
                index.as_ref(),
                embedder.as_ref(),
                &backends,
                &config,
            )?;
            if outcome.empty_retrievals > 0 {
                log::warn!(
                    "{} question(s) retrieved no memory",
                    outcome.empty_retrievals
                );
            }
            let text = format!(
                "{}questions\t{}\nempty retrievals\t{}\nfailures\t{}\n",
                render_table(&[outcome.recall.clone(), outcome.f1.clone()]),
                outcome.examples.len(),
                outcome.empty_retrievals,
                outcome.failures
            );
            write_outputs(ctx, args, &config, &outcome, &text, out)
        }
        Task::Rec => {
            let defaults = RecConfig::default();
            let config = RecConfig {
                retrieval: ctx.retrieval(defaults.retrieval),
                n: ctx.cfg.n,
                seed: ctx.cfg.seed,
                parallelism: ctx.cfg.parallelism,
            };
            let embedder = ctx.embedder()?;
            let index = match config.retrieval.mode {
                RetrievalMode::EmbeddingBased => Some(ctx.index(&store, embedder.as_ref())?),
                _ => None,
            };
            let dialogue = ctx.augmenter(&ctx.cfg.backends.augment)?;
            let recommender = ctx.augmenter(&ctx.cfg.backends.answer)?;
            let backends = RecBackends {
                dialogue: &dialogue,
                recommender: &recommender,
            };
            let outcome = run_rec_task(
                &ds,
                &store,
                index.as_ref(),
                embedder.as_ref(),
                &backends,
                &config,
            )?;
            let mut text = render_table(&outcome.reports);
            text.push_str(&format!(
                "sampled\t{}\nskipped\t{}\navg items retrieved\t{:.2}\n",
                outcome.sampled,
                outcome.skipped.len(),
                outcome.avg_items_retrieved
            ));
            for (id, reason) in &outcome.skipped {
                text.push_str(&format!("skipped\t{id}\t{reason}\n"));
            }
            write_outputs(ctx, args, &config, &outcome, &text, out)
        }
        Task::Events => {
            let config = EventConfig {
                level: match args.level {
                    LevelArg::Turn => SummaryLevel::TurnLevel,
                    LevelArg::Session => SummaryLevel::SessionLevel,
                },
                input: match args.input {
                    InputArg::Annotations => SummaryInput::AnnotationsOnly,
                    InputArg::AnnotationsDialogues => SummaryInput::AnnotationsPlusDialogues,
                },
                event_names: ctx.cfg.event_names.clone(),
                parallelism: ctx.cfg.parallelism,
            };
            let summarizer = ctx.augmenter(&ctx.cfg.backends.answer)?;
            let judge = if args.judge {
                Some(ctx.augmenter(&ctx.cfg.backends.judge)?)
            } else {
                None
            };
            let outcome =
                run_event_summarization(&ds, &store, &config, &summarizer, judge.as_ref())?;
            if outcome.summaries.is_empty() {
                log::warn!("no session carried event attributes; nothing was summarized");
            }
            let mut text = format!(
                "level\t{:?}\ninput\t{:?}\nsummarized\t{}\nskipped\t{}\n",
                outcome.level,
                outcome.input,
                outcome.summaries.len(),
                outcome.skipped.len()
            );
            for s in &outcome.summaries {
                text.push_str(&format!(
                    "session\t{}\t{} event pair(s)",
                    s.session_id, s.event_pairs
                ));
                if let Some(sc) = &s.scores {
                    text.push_str(&format!(
                        "\trelevance {:.2}\tcoherence {:.2}\tconsistency {:.2}",
                        sc.relevance, sc.coherence, sc.consistency
                    ));
                }
                text.push('\n');
            }
            for (id, reason) in &outcome.skipped {
                text.push_str(&format!("skipped\t{id}\t{reason}\n"));
            }
            if let Some(m) = &outcome.mean_scores {
                text.push_str(&format!(
                    "mean\trelevance {:.2}\tcoherence {:.2}\tconsistency {:.2}\n",
                    m.relevance, m.coherence, m.consistency
                ));
            }
            write_outputs(ctx, args, &config, &outcome, &text, out)
        }
    }
}
