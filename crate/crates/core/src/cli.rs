//! The `busdx` command line.
//!
//! Exit codes: 0 success, 1 internal error, 2 invalid configuration or
//! input, 3 backend unreachable, 4 partial run.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backends::{
    Backend, Backends, OracleBackend, RecordingBackend, RemoteBackend, RemoteConfig, ReplayBackend, SamplingParams,
    ScriptedBackend,
};
use crate::datamodel::{BusCase, Split, Taxonomy};
use crate::distill::{build_sft_corpus, write_corpus, RefineError, RefineOutcome, Refiner};
use crate::exec::ExecPolicy;
use crate::imaging::{ResizeBounds, DEFAULT_CROP_FLOOR, DEFAULT_MAX_H, DEFAULT_MAX_W};
use crate::ingest::{load_manifest, ManifestHeader, split_filter, DatasetFilter, LoadOptions, ValidationReport};
use crate::metrics::{build_report, render_table, write_records_csv, PredictionRecord};
use crate::orchestrator::{
    DirImageSource, EpisodeMode, EpisodeScope, EvidenceSource, ImageSource, Pipeline, RunSummary, SampledSteps,
    Trajectory,
};
use crate::protocol::Templates;
use crate::rewards::{emit_rollout_records, score_group, RewardWeights, Stage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_UNREACHABLE: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Unreachable(String),
    Partial(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Unreachable(_) => EXIT_UNREACHABLE,
            CliError::Partial(_) => EXIT_PARTIAL,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Unreachable(m) => write!(f, "backend unreachable: {m}"),
            CliError::Partial(m) => write!(f, "partial run: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Internal(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "busdx", version, about = "Breast ultrasound evidence-chain pipeline")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run greedy episodes over a manifest and write chains and a metric report.
    Evaluate(CommonArgs),
    /// Sample rollout groups and write scored trainer records.
    Rollout(RolloutArgs),
    /// Refine rollout trajectories and build the SFT corpus.
    Refine(RefineArgs),
    /// Rebuild the SFT corpus from refined trajectories.
    BuildSft(BuildSftArgs),
    /// Rebuild the metric report from prediction records.
    Report(ReportArgs),
    /// Re-run an evaluation from a capture log, without any server.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    /// Predicted box and predicted attributes.
    Live,
    /// Ground-truth attributes replace the attribute agent.
    OracleAttrs,
    /// Ground-truth box replaces the localizer.
    Gtbox,
    /// Ground-truth attributes replace the attribute agent.
    Gtattr,
}

impl ModeArg {
    fn parse(raw: &str) -> Option<Self> {
        <Self as ValueEnum>::from_str(raw, true).ok()
    }

    fn episode_mode(self) -> EpisodeMode {
        match self {
            ModeArg::Live => EpisodeMode::live(),
            ModeArg::Gtbox => EpisodeMode::gt_box(),
            ModeArg::OracleAttrs | ModeArg::Gtattr => EpisodeMode::gt_attributes(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Sub,
    Main,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Annotation manifest (JSONL).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Directory image paths are relative to (default: the manifest's directory).
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Episode mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Maximum concurrent episodes (1 = sequential).
    #[arg(long)]
    pub concurrency: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Serve all model calls from this capture log.
    #[arg(long, conflicts_with = "record")]
    pub replay: Option<PathBuf>,
    /// Append every model call to this capture log.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Abort on the first invalid manifest record.
    #[arg(long)]
    pub strict: bool,
    /// Keep only cases of this split (train, val, test).
    #[arg(long)]
    pub split: Option<String>,
    /// Keep only cases of this dataset (repeatable).
    #[arg(long = "dataset")]
    pub datasets: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RolloutArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Which agent the rollouts train.
    #[arg(long, value_enum, default_value = "main")]
    pub stage: StageArg,
    /// Samples per group.
    #[arg(long)]
    pub n: Option<usize>,
    /// Sampling temperature.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Feed ground-truth attributes to the integrator.
    #[arg(long)]
    pub oracle_attrs: bool,
    /// Also sample the localizer step (main stage).
    #[arg(long)]
    pub sample_localizer: bool,
    /// Sampling seed passed to backends that support one.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Permit temperature 0 rollouts.
    #[arg(long)]
    pub allow_greedy: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RefineArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trajectories written by `rollout`.
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Extra rewriter attempts after a rejected rewrite.
    #[arg(long)]
    pub retries: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct BuildSftArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Refined trajectories written by `refine`.
    #[arg(long)]
    pub refined: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prediction records written by `evaluate`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Always report a block for this dataset (repeatable).
    #[arg(long = "dataset")]
    pub datasets: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Fail unless the replayed chains equal this file byte for byte.
    #[arg(long)]
    pub verify: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    Remote(RemoteConfig),
    Oracle,
    Mock { script: PathBuf },
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    pub main: Option<BackendConfig>,
    pub sub: Option<BackendConfig>,
    pub rewriter: Option<BackendConfig>,
}

fn d_temperature() -> f64 {
    0.8
}
fn d_n() -> usize {
    8
}
fn d_max_tokens() -> u32 {
    1024
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default = "d_n")]
    pub n: usize,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub sample_localizer: bool,
    #[serde(default)]
    pub allow_greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: d_temperature(), n: d_n(), max_tokens: d_max_tokens(), seed: None, sample_localizer: false, allow_greedy: false }
    }
}

fn d_max_h() -> u32 {
    DEFAULT_MAX_H
}
fn d_max_w() -> u32 {
    DEFAULT_MAX_W
}
fn d_floor() -> u32 {
    DEFAULT_CROP_FLOOR
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizeConfig {
    #[serde(default = "d_max_h")]
    pub max_height: u32,
    #[serde(default = "d_max_w")]
    pub max_width: u32,
    #[serde(default = "d_floor")]
    pub crop_floor: u32,
}

impl Default for ResizeConfig {
    fn default() -> Self {
        Self { max_height: DEFAULT_MAX_H, max_width: DEFAULT_MAX_W, crop_floor: DEFAULT_CROP_FLOOR }
    }
}

fn d_retries() -> u32 {
    crate::distill::DEFAULT_REWRITE_RETRIES
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "d_retries")]
    pub rewrite_retries: u32,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { rewrite_retries: d_retries() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub split: Option<String>,
    #[serde(default)]
    pub datasets: Vec<String>,
}

/// Run configuration file. Relative paths resolve against the file's directory.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub taxonomy: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub image_root: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub mode: Option<String>,
    pub concurrency: Option<usize>,
    #[serde(default)]
    pub strict: bool,
    pub replay: Option<PathBuf>,
    pub record: Option<PathBuf>,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub rewards: RewardWeights,
    #[serde(default)]
    pub resize: ResizeConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub filter: FilterConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p.as_mut() {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        for p in [
            &mut cfg.taxonomy,
            &mut cfg.templates,
            &mut cfg.manifest,
            &mut cfg.image_root,
            &mut cfg.out,
            &mut cfg.replay,
            &mut cfg.record,
        ] {
            fix(p);
        }
        for b in [&mut cfg.backends.main, &mut cfg.backends.sub, &mut cfg.backends.rewriter].into_iter().flatten() {
            if let BackendConfig::Mock { script } = b {
                if script.is_relative() {
                    *script = base.join(&*script);
                }
            }
        }
        Ok(cfg)
    }

    fn load_opt(path: Option<&PathBuf>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    /// Applies command-line overrides; flags win over the file.
    fn apply(&mut self, a: &CommonArgs) {
        let over = |dst: &mut Option<PathBuf>, src: &Option<PathBuf>| {
            if src.is_some() {
                *dst = src.clone();
            }
        };
        over(&mut self.manifest, &a.manifest);
        over(&mut self.image_root, &a.image_root);
        over(&mut self.out, &a.out);
        over(&mut self.replay, &a.replay);
        over(&mut self.record, &a.record);
        if let Some(m) = a.mode {
            self.mode = Some(m.to_possible_value().expect("named").get_name().to_string());
        }
        if a.concurrency.is_some() {
            self.concurrency = a.concurrency;
        }
        self.strict |= a.strict;
        if a.split.is_some() {
            self.filter.split = a.split.clone();
        }
        if !a.datasets.is_empty() {
            self.filter.datasets = a.datasets.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rewards.validate().map_err(config_err)?;
        if self.sampling.n == 0 {
            return Err(config_err("sampling.n must be at least 1"));
        }
        let t = self.sampling.temperature;
        if !(t.is_finite() && t >= 0.0) {
            return Err(config_err(format!("sampling.temperature must be >= 0, got {t}")));
        }
        if self.resize.max_height == 0 || self.resize.max_width == 0 {
            return Err(config_err("resize bounds must be positive"));
        }
        if self.replay.is_some() && self.record.is_some() {
            return Err(config_err("replay and record cannot be combined"));
        }
        if let Some(m) = &self.mode {
            ModeArg::parse(m).ok_or_else(|| config_err(format!("unknown mode {m:?}")))?;
        }
        if let Some(s) = &self.filter.split {
            Split::parse(s).ok_or_else(|| config_err(format!("unknown split {s:?}")))?;
        }
        Ok(())
    }

    fn mode_arg(&self) -> Option<ModeArg> {
        self.mode.as_deref().and_then(ModeArg::parse)
    }

    fn bounds(&self) -> ResizeBounds {
        ResizeBounds { max_h: self.resize.max_height, max_w: self.resize.max_width }
    }

    fn policy(&self) -> ExecPolicy {
        ExecPolicy::from_concurrency(self.concurrency.unwrap_or(1))
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("busdx-out"))
    }

    /// The configured taxonomy, else the one the manifest header names, else the built-in one.
    fn taxonomy(&self) -> Result<Taxonomy> {
        let path = match (&self.taxonomy, &self.manifest) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(m)) => manifest_header(m)?
                .taxonomy
                .map(|t| m.parent().unwrap_or(Path::new(".")).join(t)),
            (None, None) => None,
        };
        match path {
            Some(p) => Taxonomy::load(&p).map_err(|e| config_err(format!("taxonomy {}: {e}", p.display()))),
            None => Ok(Taxonomy::default()),
        }
    }

    fn templates(&self) -> Result<Templates> {
        match &self.templates {
            Some(p) => Templates::load_dir(p).map_err(|e| config_err(format!("templates {}: {e}", p.display()))),
            None => Ok(Templates::builtin()),
        }
    }

    fn resolved_image_root(&self) -> PathBuf {
        self.image_root
            .clone()
            .or_else(|| self.manifest.as_ref().and_then(|m| m.parent().map(Path::to_path_buf)))
            .unwrap_or_else(|| PathBuf::from("."))
    }

    fn image_source(&self) -> Arc<dyn ImageSource> {
        Arc::new(DirImageSource::new(self.resolved_image_root()))
    }

    fn backend(&self, role: &str, cfg: &Option<BackendConfig>, cases: &[BusCase]) -> Result<Arc<dyn Backend>> {
        Ok(match cfg {
            None => return Err(config_err(format!("no backend configured for {role} (add [backends.{role}])"))),
            Some(BackendConfig::Oracle) => Arc::new(OracleBackend::new(cases, self.bounds())),
            Some(BackendConfig::Mock { script }) => Arc::new(
                ScriptedBackend::load(script).map_err(|e| config_err(format!("mock script {}: {e}", script.display())))?,
            ),
            Some(BackendConfig::Remote(r)) => Arc::new(RemoteBackend::new(r.clone()).map_err(config_err)?),
        })
    }

    /// Backends for the roles in `roles`; unused roles get a stub that
    /// refuses every call.
    fn backends(&self, cases: &[BusCase], roles: &[&str]) -> Result<Backends> {
        if let Some(path) = &self.replay {
            let r = ReplayBackend::load(path).map_err(|e| config_err(format!("replay log {}: {e}", path.display())))?;
            log::info!("replaying {} recorded calls from {}", r.total(), path.display());
            return Ok(Backends::uniform(Arc::new(r)));
        }
        let pick = |role: &str, cfg: &Option<BackendConfig>| -> Result<Arc<dyn Backend>> {
            if roles.contains(&role) {
                self.backend(role, cfg, cases)
            } else {
                Ok(Arc::new(ScriptedBackend::new()))
            }
        };
        let b = Backends {
            main: pick("main", &self.backends.main)?,
            sub: pick("sub", &self.backends.sub)?,
            rewriter: pick("rewriter", &self.backends.rewriter)?,
        };
        match &self.record {
            Some(path) => {
                let rec = RecordingBackend::new(Arc::new(b), path).map_err(io_err(path))?;
                Ok(Backends::uniform(Arc::new(rec)))
            }
            None => Ok(b),
        }
    }

    fn load_cases(&self, taxonomy: &Taxonomy) -> Result<(Vec<BusCase>, ValidationReport)> {
        let path = self.manifest.as_ref().ok_or_else(|| config_err("no manifest given (--manifest)"))?;
        let opts = LoadOptions { strict: self.strict, image_root: Some(self.resolved_image_root()) };
        let m = load_manifest(path, taxonomy, &opts).map_err(config_err)?;
        let split = self.filter.split.as_deref().and_then(Split::parse);
        let datasets = if self.filter.datasets.is_empty() {
            DatasetFilter::All
        } else {
            DatasetFilter::only(self.filter.datasets.iter().cloned())
        };
        let cases = split_filter(&m.cases, split, &datasets);
        log::info!("{} cases loaded, {} excluded, {} after filtering", m.report.accepted, m.report.excluded.len(), cases.len());
        Ok((cases, m.report))
    }

    fn pipeline(&self, backends: Backends, taxonomy: Taxonomy, templates: Templates) -> Pipeline {
        let mut p = Pipeline::new(backends, self.image_source());
        p.taxonomy = taxonomy;
        p.templates = templates;
        p.bounds = self.bounds();
        p.crop_floor = self.resize.crop_floor;
        p.greedy = SamplingParams { temperature: 0.0, max_tokens: self.sampling.max_tokens, seed: self.sampling.seed };
        p.rollout = SamplingParams {
            temperature: self.sampling.temperature,
            max_tokens: self.sampling.max_tokens,
            seed: self.sampling.seed,
        };
        p
    }
}

fn manifest_header(path: &Path) -> Result<ManifestHeader> {
    let f = File::open(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if !line.trim().is_empty() {
            return serde_json::from_str(&line).map_err(|e| config_err(format!("{}: bad header: {e}", path.display())));
        }
    }
    Err(config_err(format!("{}: missing header line", path.display())))
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, &it).map_err(|e| CliError::Internal(e.to_string()))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| config_err(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

#[derive(Debug, Serialize)]
struct EvaluateSummary<'a> {
    command: &'a str,
    mode: EpisodeMode,
    seed: Option<u64>,
    backends: String,
    ingest: &'a ValidationReport,
    run: RunSummary,
}

fn run_evaluate(a: &CommonArgs, command: &str) -> Result<Vec<String>> {
    let mut cfg = RunConfig::load_opt(a.config.as_ref())?;
    cfg.apply(a);
    cfg.validate()?;
    let taxonomy = cfg.taxonomy()?;
    let templates = cfg.templates()?;
    let (cases, ingest) = cfg.load_cases(&taxonomy)?;
    let mode = cfg.mode_arg().unwrap_or(ModeArg::Live).episode_mode();
    let mut roles = vec!["main"];
    if mode.evidence_source == EvidenceSource::Predicted {
        roles.push("sub");
    }
    let backends = cfg.backends(&cases, &roles)?;
    let described = backends.describe();
    let pipeline = cfg.pipeline(backends, taxonomy.clone(), templates);

    let run = pipeline.run_manifest(&cases, mode, cfg.policy());
    let out = cfg.out_dir();
    create_dir(&out)?;
    let chains: Vec<String> = run.chains().map(|c| c.to_json_line()).collect();
    std::fs::write(out.join("chains.jsonl"), chains.iter().map(|l| format!("{l}\n")).collect::<String>())
        .map_err(io_err(&out))?;
    write_jsonl(&out.join("failures.jsonl"), &run.failures)?;
    let records: Vec<PredictionRecord> = run.trajectories.iter().map(PredictionRecord::from_trajectory).collect();
    write_jsonl(&out.join("predictions.jsonl"), &records)?;
    write_report(&out, &records, &cfg.filter.datasets, &taxonomy)?;
    write_json(
        &out.join("summary.json"),
        &EvaluateSummary { command, mode, seed: cfg.sampling.seed, backends: described, ingest: &ingest, run: run.summary },
    )?;
    let s = run.summary;
    eprintln!(
        "{} cases: {} succeeded, {} aborted, {} localizer fallbacks, {} unparsed diagnoses",
        s.total, s.succeeded, s.aborted, s.localizer_fallbacks, s.integrator_unparsed
    );
    for f in &run.failures {
        eprintln!("  {f}");
    }
    if s.backend_unreachable() {
        return Err(CliError::Unreachable(format!("all {} cases failed to reach their backend", s.total)));
    }
    if s.aborted > 0 {
        return Err(CliError::Partial(format!("{} of {} cases aborted", s.aborted, s.total)));
    }
    Ok(chains)
}

fn write_report(out: &Path, records: &[PredictionRecord], datasets: &[String], taxonomy: &Taxonomy) -> Result<()> {
    let report = build_report(records, datasets, taxonomy);
    write_json(&out.join("report.json"), &report)?;
    let table = render_table(&report);
    std::fs::write(out.join("report.txt"), &table).map_err(io_err(out))?;
    let csv_path = out.join("records.csv");
    let f = File::create(&csv_path).map_err(io_err(&csv_path))?;
    write_records_csv(records, f).map_err(|e| CliError::Internal(e.to_string()))?;
    print!("{table}");
    Ok(())
}

#[derive(Debug, Serialize)]
struct RolloutSummary {
    stage: Stage,
    mode: EpisodeMode,
    n: usize,
    temperature: f64,
    seed: Option<u64>,
    groups: usize,
    complete: usize,
    incomplete: Vec<String>,
    records: usize,
    trajectories: usize,
    mean_reward: Option<f64>,
}

fn run_rollout(a: &RolloutArgs) -> Result<()> {
    let mut cfg = RunConfig::load_opt(a.common.config.as_ref())?;
    cfg.apply(&a.common);
    if let Some(n) = a.n {
        cfg.sampling.n = n;
    }
    if let Some(t) = a.temperature {
        cfg.sampling.temperature = t;
    }
    if a.seed.is_some() {
        cfg.sampling.seed = a.seed;
    }
    cfg.sampling.sample_localizer |= a.sample_localizer;
    cfg.sampling.allow_greedy |= a.allow_greedy;
    cfg.validate()?;
    if cfg.sampling.temperature <= 0.0 && !cfg.sampling.allow_greedy {
        return Err(config_err("rollouts need temperature > 0 (or --allow-greedy)"));
    }

    let stage = match a.stage {
        StageArg::Sub => Stage::Sub,
        StageArg::Main => Stage::Main,
    };
    let mode = match stage {
        Stage::Sub => {
            if a.oracle_attrs {
                return Err(config_err("--oracle-attrs does not apply to sub-agent rollouts"));
            }
            let base = match cfg.mode_arg() {
                None | Some(ModeArg::Gtbox) => EpisodeMode::gt_box(),
                Some(ModeArg::Live) => EpisodeMode::live(),
                Some(m) => return Err(config_err(format!("mode {m:?} skips the attribute agent"))),
            };
            base.with_scope(EpisodeScope::AttributesOnly)
                .with_sampled(SampledSteps { sub_attribute: true, ..Default::default() })
        }
        Stage::Main => {
            let mut m = cfg.mode_arg().unwrap_or(ModeArg::Live).episode_mode();
            if a.oracle_attrs {
                m.evidence_source = EvidenceSource::OracleAttributes;
            }
            m.with_sampled(SampledSteps { integrator: true, localizer: cfg.sampling.sample_localizer, ..Default::default() })
        }
    };

    let taxonomy = cfg.taxonomy()?;
    let templates = cfg.templates()?;
    let (cases, _) = cfg.load_cases(&taxonomy)?;
    let mut roles = vec![];
    if mode.box_source == crate::orchestrator::BoxSource::Predicted || mode.scope == EpisodeScope::Full {
        roles.push("main");
    }
    if mode.evidence_source == EvidenceSource::Predicted {
        roles.push("sub");
    }
    let pipeline = cfg.pipeline(cfg.backends(&cases, &roles)?, taxonomy, templates);
    let n = cfg.sampling.n;
    let groups = pipeline.run_rollouts(&cases, mode, n, cfg.policy());

    let mut records = Vec::new();
    let mut trajectories: Vec<&Trajectory> = Vec::new();
    let mut incomplete = Vec::new();
    let mut transport_only = !groups.is_empty();
    for g in &groups {
        trajectories.extend(&g.trajectories);
        if !g.is_complete() {
            incomplete.push(g.group_id.clone());
            for f in &g.failures {
                eprintln!("  {f}");
            }
            transport_only &= g.trajectories.is_empty() && g.failures.iter().all(|f| f.is_transport());
            continue;
        }
        transport_only = false;
        let scored = score_group(g, stage, cfg.rewards).map_err(|e| CliError::Internal(e.to_string()))?;
        records.extend(emit_rollout_records(g, &scored).map_err(|e| CliError::Internal(e.to_string()))?);
    }

    let out = cfg.out_dir();
    create_dir(&out)?;
    write_jsonl(&out.join("rollouts.jsonl"), &records)?;
    write_jsonl(&out.join("trajectories.jsonl"), &trajectories)?;
    let summary = RolloutSummary {
        stage,
        mode,
        n,
        temperature: cfg.sampling.temperature,
        seed: cfg.sampling.seed,
        groups: groups.len(),
        complete: groups.len() - incomplete.len(),
        incomplete: incomplete.clone(),
        records: records.len(),
        trajectories: trajectories.len(),
        mean_reward: (!records.is_empty()).then(|| records.iter().map(|r| r.reward).sum::<f64>() / records.len() as f64),
    };
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{} groups ({} complete, {} incomplete), {} rollout records",
        summary.groups, summary.complete, incomplete.len(), summary.records
    );
    if transport_only {
        return Err(CliError::Unreachable("no rollout group reached its backend".into()));
    }
    if !incomplete.is_empty() {
        return Err(CliError::Partial(format!("{} incomplete group(s): {}", incomplete.len(), incomplete.join(", "))));
    }
    Ok(())
}

fn run_refine(a: &RefineArgs) -> Result<()> {
    let mut cfg = RunConfig::load_opt(a.common.config.as_ref())?;
    cfg.apply(&a.common);
    if let Some(r) = a.retries {
        cfg.distill.rewrite_retries = r;
    }
    cfg.validate()?;
    let taxonomy = cfg.taxonomy()?;
    let templates = cfg.templates()?;
    let trajectories: Vec<Trajectory> = read_jsonl(&a.trajectories)?;
    let mut cases: Vec<BusCase> = trajectories.iter().map(|t| t.case.clone()).collect();
    cases.sort_by(|x, y| x.case_id.cmp(&y.case_id));
    cases.dedup_by(|x, y| x.case_id == y.case_id);
    let backends = cfg.backends(&cases, &["rewriter"])?;

    let mut refiner = Refiner::new(Arc::new(backends), cfg.image_source());
    refiner.taxonomy = taxonomy.clone();
    refiner.templates = templates.clone();
    refiner.bounds = cfg.bounds();
    refiner.max_retries = cfg.distill.rewrite_retries;
    refiner.sampling = SamplingParams { temperature: 0.0, max_tokens: cfg.sampling.max_tokens, seed: cfg.sampling.seed };
    let outcomes = refiner.refine_all(&trajectories, cfg.policy());

    let out = cfg.out_dir();
    create_dir(&out)?;
    write_jsonl(&out.join("refined.jsonl"), &outcomes)?;
    build_and_write_corpus(&outcomes, &taxonomy, &templates, &out)?;

    let backend_failures: Vec<&RefineError> = outcomes
        .iter()
        .filter_map(|o| match o {
            RefineOutcome::Dropped(d) if matches!(d.reason, RefineError::Backend(_)) => Some(&d.reason),
            _ => None,
        })
        .collect();
    if backend_failures.is_empty() {
        return Ok(());
    }
    let all_transport = backend_failures.iter().all(|e| matches!(e, RefineError::Backend(b) if b.is_transport()));
    let rewrites_needed = outcomes
        .iter()
        .filter(|o| match o {
            RefineOutcome::Refined(r) => r.rewritten,
            RefineOutcome::Dropped(d) => matches!(d.reason, RefineError::Backend(_) | RefineError::RewriteRejected { .. }),
        })
        .count();
    if all_transport && backend_failures.len() == rewrites_needed {
        return Err(CliError::Unreachable("the rewriter could not be reached".into()));
    }
    Err(CliError::Partial(format!("{} trajectories dropped after rewriter failures", backend_failures.len())))
}

fn build_and_write_corpus(outcomes: &[RefineOutcome], taxonomy: &Taxonomy, templates: &Templates, out: &Path) -> Result<()> {
    let (examples, manifest) =
        build_sft_corpus(outcomes, taxonomy, templates).map_err(|e| CliError::Internal(e.to_string()))?;
    write_corpus(&examples, &manifest, &out.join("sft.jsonl"), &out.join("sft_manifest.json")).map_err(io_err(out))?;
    println!(
        "total={} rewritten={} dropped={} sha256={}",
        manifest.total, manifest.rewritten, manifest.dropped, manifest.sha256
    );
    Ok(())
}

fn run_build_sft(a: &BuildSftArgs) -> Result<()> {
    let mut cfg = RunConfig::load_opt(a.config.as_ref())?;
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    let outcomes: Vec<RefineOutcome> = read_jsonl(&a.refined)?;
    let out = cfg.out_dir();
    let (taxonomy, templates) = (cfg.taxonomy()?, cfg.templates()?);
    create_dir(&out)?;
    build_and_write_corpus(&outcomes, &taxonomy, &templates, &out)
}

fn run_report(a: &ReportArgs) -> Result<()> {
    let mut cfg = RunConfig::load_opt(a.config.as_ref())?;
    if a.out.is_some() {
        cfg.out = a.out.clone();
    }
    let taxonomy = cfg.taxonomy()?;
    let records: Vec<PredictionRecord> = read_jsonl(&a.predictions)?;
    for r in &records {
        r.validate().map_err(config_err)?;
    }
    let out = cfg.out_dir();
    create_dir(&out)?;
    write_report(&out, &records, &a.datasets, &taxonomy)
}

fn run_replay(a: &ReplayArgs) -> Result<()> {
    let mut cfg_args = a.common.clone();
    if cfg_args.replay.is_none() {
        let cfg = RunConfig::load_opt(cfg_args.config.as_ref())?;
        cfg_args.replay = Some(cfg.replay.ok_or_else(|| config_err("replay needs a capture log (--replay)"))?);
    }
    let chains = run_evaluate(&cfg_args, "replay")?;
    if let Some(expected) = &a.verify {
        let want = std::fs::read_to_string(expected).map_err(|e| config_err(format!("{}: {e}", expected.display())))?;
        let got: String = chains.iter().map(|l| format!("{l}\n")).collect();
        if want != got {
            return Err(CliError::Internal(format!("replayed chains differ from {}", expected.display())));
        }
        println!("replayed chains match {}", expected.display());
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Evaluate(a) => run_evaluate(a, "evaluate").map(|_| ()),
        Command::Rollout(a) => run_rollout(a),
        Command::Refine(a) => run_refine(a),
        Command::BuildSft(a) => run_build_sft(a),
        Command::Report(a) => run_report(a),
        Command::Replay(a) => run_replay(a),
    }
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn unknown_flags_are_errors() {
        assert!(Cli::try_parse_from(["busdx", "evaluate", "--bogus"]).is_err());
        assert!(Cli::try_parse_from(["busdx", "evaluate", "--mode", "psychic"]).is_err());
        assert!(Cli::try_parse_from(["busdx", "evaluate", "--mode", "gtbox", "--concurrency", "4"]).is_ok());
    }

    #[test]
    fn config_defaults_and_sections() {
        let cfg = RunConfig::from_toml_str(
            r#"
            mode = "gtattr"
            [backends.main]
            kind = "remote"
            base_url = "http://localhost:8000/v1"
            model = "m"
            api_key_env = "TOKEN"
            [backends.sub]
            kind = "oracle"
            [rewards]
            malignancy = 0.7
            birads = 0.3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.sampling, SamplingConfig::default());
        assert_eq!(cfg.sampling.temperature, 0.8);
        assert_eq!(cfg.sampling.n, 8);
        assert_eq!(cfg.resize, ResizeConfig::default());
        assert_eq!(cfg.distill.rewrite_retries, 3);
        assert_eq!(cfg.backends.sub, Some(BackendConfig::Oracle));
        assert!(matches!(&cfg.backends.main, Some(BackendConfig::Remote(r)) if r.path == "/chat/completions"));
        assert_eq!(cfg.mode_arg(), Some(ModeArg::Gtattr));
        cfg.validate().unwrap();
    }

    #[test]
    fn config_rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml_str("colour = 1").is_err());
        assert!(RunConfig::from_toml_str("[sampling]\ntemp = 1").is_err());
        let bad = |t: &str| RunConfig::from_toml_str(t).unwrap().validate().is_err();
        assert!(bad("[rewards]\nmalignancy = 0\nbirads = 0"));
        assert!(bad("[sampling]\nn = 0"));
        assert!(bad("mode = \"psychic\""));
        assert!(bad("[filter]\nsplit = \"holdout\""));
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "manifest = \"m.jsonl\"\n[backends.rewriter]\nkind = \"mock\"\nscript = \"s.jsonl\"\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.manifest, Some(dir.path().join("m.jsonl")));
        assert_eq!(cfg.backends.rewriter, Some(BackendConfig::Mock { script: dir.path().join("s.jsonl") }));
    }

    #[test]
    fn example_config_parses() {
        let text = include_str!("../../../config/example.toml");
        RunConfig::from_toml_str(text).unwrap().validate().unwrap();
        let oracle = RunConfig::from_toml_str(include_str!("../../../config/oracle.toml")).unwrap();
        assert_eq!(oracle.backends.sub, Some(BackendConfig::Oracle));
    }
}
