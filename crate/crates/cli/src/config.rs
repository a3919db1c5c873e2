//! Run configuration: built-in defaults, then an optional TOML file, then
//! command-line flags. Backend sections never hold secrets; a remote
//! backend names the environment variable that carries its API key.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use attrmem::annotation::Prioritization;
use attrmem::backend::{BackendKind, BackendProfile, DEFAULT_API_KEY_ENV};
use attrmem::eval::DEFAULT_EVENT_NAMES;
use attrmem::retrieval::{EmbeddingStrategy, QueryComponents, RetrievalMode, DEFAULT_MOCK_DIM};
use attrmem::store::MatchPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Comprehensive,
    Attribute,
    Embedding,
}

impl From<ModeArg> for RetrievalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Comprehensive => RetrievalMode::Comprehensive,
            ModeArg::Attribute => RetrievalMode::AttributeBased,
            ModeArg::Embedding => RetrievalMode::EmbeddingBased,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyArg {
    Averaged,
    Whole,
    Raw,
}

impl From<StrategyArg> for EmbeddingStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Averaged => EmbeddingStrategy::AveragedPairs,
            StrategyArg::Whole => EmbeddingStrategy::WholeAnnotation,
            StrategyArg::Raw => EmbeddingStrategy::RawContent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    NameOnly,
    NameAndValue,
}

impl From<PolicyArg> for MatchPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::NameOnly => MatchPolicy::NameOnly,
            PolicyArg::NameAndValue => MatchPolicy::NameAndValue,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendArg {
    Mock,
    Remote,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Mock => BackendKind::Mock,
            BackendArg::Remote => BackendKind::RemoteChat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrioritizationArg {
    Basic,
    Priority,
}

impl From<PrioritizationArg> for Prioritization {
    fn from(p: PrioritizationArg) -> Self {
        match p {
            PrioritizationArg::Basic => Prioritization::Basic,
            PrioritizationArg::Priority => Prioritization::Priority,
        }
    }
}

/// Flags shared by every subcommand. Unset flags fall back to the config
/// file, then to defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Memory store (JSONL).
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Evaluation dataset (JSON).
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Vector index file (JSON).
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true, value_enum)]
    pub strategy: Option<StrategyArg>,
    #[arg(long, global = true, value_enum)]
    pub policy: Option<PolicyArg>,
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long, global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Kind of every chat backend (augment, answer, judge).
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendArg>,
    /// Mock rule table (TSV).
    #[arg(long, global = true)]
    pub rules: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long, global = true)]
    pub templates: Option<PathBuf>,
    #[arg(long, global = true)]
    pub parallelism: Option<usize>,
    /// Mock embedding dimension.
    #[arg(long, global = true)]
    pub dim: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub prioritization: Option<PrioritizationArg>,
    /// Highest tolerated augmentation failure rate.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackendSection {
    kind: Option<BackendArg>,
    model_id: Option<String>,
    endpoint: Option<String>,
    max_retries: Option<u32>,
    timeout_ms: Option<u64>,
    temperature: Option<f64>,
    api_key_env: Option<String>,
}

impl BackendSection {
    fn apply(self, p: &mut BackendProfile) {
        if let Some(k) = self.kind {
            p.kind = k.into();
        }
        if let Some(m) = self.model_id {
            p.model_id = m;
        }
        if self.endpoint.is_some() {
            p.endpoint = self.endpoint;
        }
        if let Some(r) = self.max_retries {
            p.max_retries = r;
        }
        if let Some(t) = self.timeout_ms {
            p.timeout_ms = t;
        }
        if self.temperature.is_some() {
            p.temperature = self.temperature;
        }
        if let Some(e) = self.api_key_env {
            p.api_key_env = e;
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackendsSection {
    augment: Option<BackendSection>,
    embed: Option<BackendSection>,
    answer: Option<BackendSection>,
    judge: Option<BackendSection>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    store: Option<PathBuf>,
    dataset: Option<PathBuf>,
    index: Option<PathBuf>,
    mode: Option<ModeArg>,
    strategy: Option<StrategyArg>,
    policy: Option<PolicyArg>,
    k: Option<usize>,
    n: Option<usize>,
    seed: Option<u64>,
    parallelism: Option<usize>,
    dim: Option<usize>,
    prioritization: Option<PrioritizationArg>,
    threshold: Option<f64>,
    rules: Option<PathBuf>,
    templates: Option<PathBuf>,
    event_names: Option<Vec<String>>,
    query_text: Option<bool>,
    query_terms: Option<bool>,
    backends: Option<BackendsSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Backends {
    pub augment: BackendProfile,
    pub embed: BackendProfile,
    pub answer: BackendProfile,
    pub judge: BackendProfile,
}

/// Fully resolved settings. Serialized next to every evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub store: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub mode: ModeArg,
    pub strategy: StrategyArg,
    /// Unset means the task default.
    pub policy: Option<PolicyArg>,
    pub k: Option<usize>,
    pub n: usize,
    pub seed: u64,
    pub parallelism: usize,
    pub dim: usize,
    pub prioritization: PrioritizationArg,
    pub threshold: Option<f64>,
    pub rules: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub event_names: Vec<String>,
    pub query_text: Option<bool>,
    pub query_terms: Option<bool>,
    pub backends: Backends,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            store: None,
            dataset: None,
            index: None,
            mode: ModeArg::Embedding,
            strategy: StrategyArg::Averaged,
            policy: None,
            k: None,
            n: 200,
            seed: 0,
            parallelism: 1,
            dim: DEFAULT_MOCK_DIM,
            prioritization: PrioritizationArg::Basic,
            threshold: None,
            rules: None,
            templates: None,
            event_names: DEFAULT_EVENT_NAMES.iter().map(|s| s.to_string()).collect(),
            query_text: None,
            query_terms: None,
            backends: Backends {
                augment: BackendProfile::mock(),
                embed: BackendProfile::mock(),
                answer: BackendProfile::mock(),
                judge: BackendProfile::mock(),
            },
        }
    }
}

/// Relative paths in a config file are taken relative to the file.
fn rebase(base: &Path, p: Option<PathBuf>) -> Option<PathBuf> {
    p.map(|p| if p.is_relative() { base.join(p) } else { p })
}

impl RunConfig {
    pub fn resolve(flags: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = &flags.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            let file: FileConfig = toml::from_str(&text)
                .with_context(|| format!("invalid config {}", path.display()))?;
            cfg.apply_file(file, path.parent().unwrap_or(Path::new(".")));
        }
        cfg.apply_flags(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_file(&mut self, f: FileConfig, base: &Path) {
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = f.$field { self.$field = v; })*};
        }
        macro_rules! set_opt {
            ($($field:ident),*) => {$(if f.$field.is_some() { self.$field = f.$field; })*};
        }
        set!(
            mode,
            strategy,
            n,
            seed,
            parallelism,
            dim,
            prioritization,
            event_names
        );
        set_opt!(policy, k, threshold, query_text, query_terms);
        for (slot, value) in [
            (&mut self.store, f.store),
            (&mut self.dataset, f.dataset),
            (&mut self.index, f.index),
            (&mut self.rules, f.rules),
            (&mut self.templates, f.templates),
        ] {
            if value.is_some() {
                *slot = rebase(base, value);
            }
        }
        if let Some(b) = f.backends {
            for (section, profile) in [
                (b.augment, &mut self.backends.augment),
                (b.embed, &mut self.backends.embed),
                (b.answer, &mut self.backends.answer),
                (b.judge, &mut self.backends.judge),
            ] {
                if let Some(s) = section {
                    s.apply(profile);
                }
            }
        }
    }

    fn apply_flags(&mut self, o: &Overrides) {
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = o.$field.clone() { self.$field = v; })*};
        }
        macro_rules! set_opt {
            ($($field:ident),*) => {$(if o.$field.is_some() { self.$field = o.$field.clone(); })*};
        }
        set!(mode, strategy, n, seed, parallelism, dim, prioritization);
        set_opt!(store, dataset, index, policy, k, threshold, rules, templates);
        if let Some(b) = o.backend {
            for p in [
                &mut self.backends.augment,
                &mut self.backends.answer,
                &mut self.backends.judge,
            ] {
                p.kind = b.into();
                if p.kind == BackendKind::Mock {
                    p.endpoint = None;
                }
            }
        }
    }

    fn validate(&self) -> anyhow::Result<()> {
        if self.k == Some(0) {
            bail!("k must be at least 1");
        }
        if self.n == 0 {
            bail!("n must be at least 1");
        }
        if self.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        if self.dim == 0 {
            bail!("dim must be at least 1");
        }
        if let Some(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                bail!("threshold must lie in [0, 1]");
            }
        }
        for (name, p) in [
            ("augment", &self.backends.augment),
            ("embed", &self.backends.embed),
            ("answer", &self.backends.answer),
            ("judge", &self.backends.judge),
        ] {
            p.validate()
                .with_context(|| format!("backend profile {name:?}"))?;
        }
        Ok(())
    }

    pub fn query_components(&self, default: QueryComponents) -> QueryComponents {
        QueryComponents {
            text: self.query_text.unwrap_or(default.text),
            terms: self.query_terms.unwrap_or(default.terms),
        }
    }

    /// The API key variable names in use, for diagnostics.
    pub fn api_key_envs(&self) -> Vec<&str> {
        let mut v: Vec<&str> = [
            &self.backends.augment,
            &self.backends.embed,
            &self.backends.answer,
            &self.backends.judge,
        ]
        .iter()
        .filter(|p| p.kind == BackendKind::RemoteChat)
        .map(|p| p.api_key_env.as_str())
        .collect();
        v.dedup();
        if v.is_empty() {
            v.push(DEFAULT_API_KEY_ENV);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "k = 7\nseed = 3\nmode = \"attribute\"\nstore = \"s.jsonl\"\n[backends.answer]\nmax_retries = 5\n",
        );
        let flags = Overrides {
            config: Some(path),
            k: Some(2),
            ..Overrides::default()
        };
        let cfg = RunConfig::resolve(&flags).unwrap();
        assert_eq!(cfg.k, Some(2));
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.mode, ModeArg::Attribute);
        assert_eq!(cfg.n, 200);
        assert_eq!(cfg.store, Some(dir.path().join("s.jsonl")));
        assert_eq!(cfg.backends.answer.max_retries, 5);
    }

    #[test]
    fn secrets_are_rejected_in_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), "[backends.augment]\napi_key = \"sk-123\"\n");
        let flags = Overrides {
            config: Some(path),
            ..Overrides::default()
        };
        let err = RunConfig::resolve(&flags).unwrap_err();
        assert!(format!("{err:#}").contains("api_key"));
    }

    #[test]
    fn remote_without_endpoint_is_invalid() {
        let flags = Overrides {
            backend: Some(BackendArg::Remote),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(&flags).is_err());
        let flags = Overrides {
            k: Some(0),
            ..Overrides::default()
        };
        assert!(RunConfig::resolve(&flags).is_err());
    }

    #[test]
    fn sample_config_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../attrmem.example.toml");
        let cfg = RunConfig::resolve(&Overrides {
            config: Some(path),
            ..Overrides::default()
        })
        .unwrap();
        assert_eq!(cfg.parallelism, 4);
        assert_eq!(cfg.threshold, Some(0.05));
        assert!(cfg.store.unwrap().ends_with("data/store.jsonl"));
    }
}
