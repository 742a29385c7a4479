//! Subcommands of the `cleftkit` binary.
//!
//! Settings resolve as defaults < config file < environment < flags. The
//! environment and flag layers are merged by clap (`CLEFTKIT_*`
//! variables); the config file fills whatever both leave unset.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use cleftkit::exec::Exec;
use cleftkit::fusion::{diagnose_batch, FusionConfig};
use cleftkit::inference::{ImageFindings, NoiseConfig};
use cleftkit::metrics::{evaluate, EvaluateOptions};
use cleftkit::pipeline::{predict_cohort, run_simulation, PilotConfig, SimulationConfig};
use cleftkit::records::{
    align_truth, group_findings, read_records, write_records, TruthRecord, DIAGNOSES_SCHEMA, FINDINGS_SCHEMA,
    TRUTH_SCHEMA,
};
use cleftkit::study::{cycle_report, EventStore, Study, StudyPlan, SystemClock};
use cleftkit::synth::{generate_cohort_with, CohortConfig};

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_OUT: &str = "out";
pub const DEFAULT_DATA_DIR: &str = "data";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "cleftkit", version, about = "Cleft diagnosis fusion, metrics and reader-study tooling")]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, env = "CLEFTKIT_SEED")]
    pub seed: Option<u64>,
    /// TOML config file.
    #[arg(long, global = true, env = "CLEFTKIT_CONFIG")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "CLEFTKIT_OUT")]
    pub out: Option<PathBuf>,
    /// Study data directory (event log and snapshots).
    #[arg(long, global = true, env = "CLEFTKIT_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Listen address for `serve`.
    #[arg(long, global = true, env = "CLEFTKIT_LISTEN")]
    pub listen: Option<String>,
    /// Run data-parallel loops on one thread; output is identical.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort: truth labels, annotated findings and
    /// simulated model findings.
    Gen,
    /// Fuse per-image findings into case diagnoses and score them against
    /// reference labels.
    Evaluate {
        #[arg(long)]
        findings: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Bootstrap resamples for the 95% intervals (0 skips them).
        #[arg(long)]
        resamples: Option<usize>,
    },
    /// Run the simulated reader study and training pilot end to end.
    Simulate {
        /// Study plan for the pilot, replacing the configured one.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Skip the training pilot.
        #[arg(long)]
        no_pilot: bool,
        #[arg(long)]
        resamples: Option<usize>,
    },
    /// Serve the study API from the data directory.
    Serve {
        /// Plan used to create the study when the data directory has none.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Cycle reports from a study data directory.
    Report {
        /// One cycle; by default every closed cycle.
        #[arg(long)]
        cycle: Option<u32>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
}

/// Config file contents; every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub listen: Option<String>,
    /// Bootstrap resamples for `evaluate` and `simulate`.
    pub resamples: Option<usize>,
    /// Plan file for `serve` and `simulate`, relative to the config file.
    pub plan: Option<PathBuf>,
    /// Cohort for `gen`.
    pub cohort: Option<CohortConfig>,
    /// Model noise for `gen`.
    pub noise: Option<NoiseConfig>,
    pub fusion: Option<FusionConfig>,
    /// Full simulation setup for `simulate`.
    pub simulation: Option<SimulationConfig>,
}

/// Failure classes, mapped to exit codes 1 and 2.
#[derive(Debug)]
pub enum Failure {
    /// Bad input, config or environment.
    User(anyhow::Error),
    /// A bug or an unexpected runtime failure.
    Internal(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::User(_) => 1,
            Failure::Internal(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::User(e) | Failure::Internal(e) => e,
        }
    }
}

trait Classify<T> {
    fn user(self) -> Result<T, Failure>;
    fn internal(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn user(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::User(e.into()))
    }

    fn internal(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Internal(e.into()))
    }
}

/// What a run did, enough to repeat it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub started_at_ms: u128,
    pub finished_at_ms: u128,
    /// Effective settings after layering.
    pub settings: serde_json::Value,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Writes via a temporary sibling and a rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

/// Line and column (1-based) of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, col)
}

fn parse_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).user()?;
    toml::from_str(&text).map_err(|e| {
        let msg = e.message().to_string();
        Failure::User(match e.span() {
            Some(span) => {
                let (line, col) = line_col(&text, span.start);
                anyhow!("{}:{line}:{col}: {msg}", path.display())
            }
            None => anyhow!("{}: {msg}", path.display()),
        })
    })
}

/// Settings after layering.
#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub seed: u64,
    /// The seed was given somewhere rather than defaulted.
    #[serde(skip)]
    pub seed_explicit: bool,
    pub out: PathBuf,
    pub data_dir: PathBuf,
    pub listen: String,
    pub resamples: Option<usize>,
    pub plan: Option<PathBuf>,
    #[serde(skip)]
    pub file: FileConfig,
    pub config_path: Option<PathBuf>,
    #[serde(skip)]
    pub exec: Exec,
}

impl Settings {
    pub fn resolve(cli: &Cli) -> Result<Self, Failure> {
        let file: FileConfig = match &cli.config {
            Some(p) => parse_toml(p)?,
            None => FileConfig::default(),
        };
        let base = cli.config.as_ref().and_then(|p| p.parent()).map(Path::to_path_buf).unwrap_or_default();
        let seed = cli.seed.or(file.seed);
        Ok(Self {
            seed: seed.unwrap_or(DEFAULT_SEED),
            seed_explicit: seed.is_some(),
            out: cli.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| DEFAULT_OUT.into()),
            data_dir: cli.data_dir.clone().or_else(|| file.data_dir.clone()).unwrap_or_else(|| DEFAULT_DATA_DIR.into()),
            listen: cli.listen.clone().or_else(|| file.listen.clone()).unwrap_or_else(|| DEFAULT_LISTEN.into()),
            resamples: file.resamples,
            plan: file.plan.as_ref().map(|p| base.join(p)),
            config_path: cli.config.clone(),
            exec: if cli.sequential { Exec::Sequential } else { Exec::Parallel },
            file,
        })
    }
}

/// Accumulates outputs of one run and writes its manifest.
struct Run {
    command: &'static str,
    started: u128,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Self { command, started: now_ms(), inputs: Vec::new(), outputs: Vec::new() }
    }

    fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = dir.join(name);
        write_atomic(&path, bytes).with_context(|| format!("writing {}", path.display())).user()?;
        self.outputs.push(path);
        Ok(())
    }

    fn finish(self, dir: &Path, s: &Settings, extra: serde_json::Value) -> Result<(), Failure> {
        let mut settings = serde_json::to_value(s).internal()?;
        if let (Some(obj), serde_json::Value::Object(more)) = (settings.as_object_mut(), extra) {
            obj.extend(more);
        }
        let m = RunManifest {
            command: self.command.into(),
            config_path: s.config_path.clone(),
            seed: s.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_at_ms: self.started,
            finished_at_ms: now_ms(),
            settings,
        };
        let bytes = serde_json::to_vec_pretty(&m).internal()?;
        let path = dir.join(MANIFEST_FILE);
        write_atomic(&path, &bytes).with_context(|| format!("writing {}", path.display())).user()
    }
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).user()
}

fn records<T: Serialize>(schema: &str, items: &[T]) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    write_records(&mut buf, schema, items).internal()?;
    Ok(buf)
}

fn read_file<T: serde::de::DeserializeOwned>(path: &Path, schema: &str) -> Result<Vec<T>, Failure> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display())).user()?;
    read_records(BufReader::new(f), schema).with_context(|| path.display().to_string()).user()
}

/// Runs one parsed command; `stdout` receives the human-readable result.
pub fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> Result<(), Failure> {
    let s = Settings::resolve(&cli)?;
    match cli.command {
        Command::Gen => cmd_gen(&s, stdout),
        Command::Evaluate { findings, truth, resamples } => cmd_evaluate(&s, &findings, &truth, resamples, stdout),
        Command::Simulate { plan, no_pilot, resamples } => cmd_simulate(&s, plan, no_pilot, resamples, stdout),
        Command::Serve { plan } => cmd_serve(&s, plan),
        Command::Report { cycle, format } => cmd_report(&s, cycle, format, stdout),
    }
}

pub fn cmd_gen(s: &Settings, stdout: &mut dyn std::io::Write) -> Result<(), Failure> {
    let mut run = Run::new("gen");
    let mut cohort_cfg = s.file.cohort.clone().unwrap_or_else(|| CohortConfig::oc_gt3000(s.seed));
    cohort_cfg.seed = s.seed;
    let noise = s.file.noise.clone().unwrap_or_else(NoiseConfig::realistic);
    let cohort = generate_cohort_with(&cohort_cfg, s.exec).user()?;
    let predicted = predict_cohort(&cohort, &noise, s.seed, s.exec).user()?;

    create_out(&s.out)?;
    let truth: Vec<TruthRecord> = cohort
        .iter()
        .map(|c| TruthRecord {
            case_id: c.case_id().to_string(),
            truth: c.truth,
            gestational_week: Some(c.findings.gestational_week),
        })
        .collect();
    let annotated: Vec<&ImageFindings> = cohort.iter().flat_map(|c| &c.findings.images).collect();
    let model: Vec<&ImageFindings> = predicted.iter().flat_map(|c| &c.images).collect();
    run.write(&s.out, "truth.jsonl", &records(TRUTH_SCHEMA, &truth)?)?;
    run.write(&s.out, "findings.jsonl", &records(FINDINGS_SCHEMA, &annotated)?)?;
    run.write(&s.out, "predictions.jsonl", &records(FINDINGS_SCHEMA, &model)?)?;
    writeln!(stdout, "{} cases, {} images -> {}", cohort.len(), annotated.len(), s.out.display()).internal()?;
    run.finish(&s.out, s, serde_json::json!({ "cohort": cohort_cfg, "noise": noise }))
}

pub fn cmd_evaluate(
    s: &Settings,
    findings: &Path,
    truth: &Path,
    resamples: Option<usize>,
    stdout: &mut dyn std::io::Write,
) -> Result<(), Failure> {
    let mut run = Run::new("evaluate");
    run.inputs = vec![findings.to_path_buf(), truth.to_path_buf()];
    let images: Vec<ImageFindings> = read_file(findings, FINDINGS_SCHEMA)?;
    let labels: Vec<TruthRecord> = read_file(truth, TRUTH_SCHEMA)?;
    let cases = group_findings(images).user()?;
    let aligned = align_truth(cases, &labels).user()?;
    if aligned.is_empty() {
        return Err(Failure::User(anyhow!("no cases to evaluate")));
    }
    let fusion = s.file.fusion.clone().unwrap_or_default();
    let case_findings: Vec<_> = aligned.iter().map(|(c, _)| c.clone()).collect();
    let results = diagnose_batch(&case_findings, &fusion, s.exec).user()?;
    let items: Vec<_> = aligned.iter().zip(&results).map(|((_, t), r)| (*t, r.label, Some(r.scores))).collect();
    let n_resamples = resamples.or(s.resamples).unwrap_or(1000);
    let opts = EvaluateOptions { n_resamples, seed: s.seed, exec: s.exec };
    // Failures here come from options such as a too-small resample count.
    let report = evaluate("Evaluation", &items, &opts).user()?;

    create_out(&s.out)?;
    run.write(&s.out, "diagnoses.jsonl", &records(DIAGNOSES_SCHEMA, &results)?)?;
    run.write(&s.out, "evaluation.txt", report.to_text().as_bytes())?;
    run.write(&s.out, "evaluation.csv", report.to_csv().internal()?.as_bytes())?;
    run.write(&s.out, "evaluation.json", &serde_json::to_vec_pretty(&report).internal()?)?;
    write!(stdout, "{}", report.to_text()).internal()?;
    run.finish(&s.out, s, serde_json::json!({ "fusion": fusion, "resamples": n_resamples }))
}

pub fn cmd_simulate(
    s: &Settings,
    plan: Option<PathBuf>,
    no_pilot: bool,
    resamples: Option<usize>,
    stdout: &mut dyn std::io::Write,
) -> Result<(), Failure> {
    let mut run = Run::new("simulate");
    let mut cfg = match &s.file.simulation {
        Some(c) => {
            let mut c = c.clone();
            if s.seed_explicit {
                c.seed = s.seed;
                c.cohort.seed = s.seed;
            }
            c
        }
        None => SimulationConfig::reader_study(s.seed),
    };
    if let Some(n) = resamples.or(s.resamples) {
        cfg.n_resamples = n;
    }
    if let Some(path) = plan.or_else(|| s.plan.clone()) {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())).user()?;
        let plan = StudyPlan::from_toml(&text).with_context(|| path.display().to_string()).user()?;
        run.inputs.push(path);
        cfg.pilot.get_or_insert_with(|| PilotConfig::default_pilot(cfg.seed)).plan = plan;
    }
    if no_pilot {
        cfg.pilot = None;
    }
    let report = run_simulation(&cfg, s.exec).user()?;

    create_out(&s.out)?;
    let text = report.to_text();
    run.write(&s.out, "simulation.txt", text.as_bytes())?;
    run.write(&s.out, "simulation.json", &serde_json::to_vec_pretty(&report).internal()?)?;
    for c in &report.pilot {
        run.write(&s.out, &format!("cycle_{}.csv", c.cycle), c.to_csv().internal()?.as_bytes())?;
    }
    write!(stdout, "{text}").internal()?;
    run.finish(&s.out, s, serde_json::json!({ "simulation": cfg }))
}

pub fn cmd_report(s: &Settings, cycle: Option<u32>, format: Format, stdout: &mut dyn std::io::Write) -> Result<(), Failure> {
    if !s.data_dir.join(cleftkit::study::LOG_FILE).exists() {
        return Err(Failure::User(anyhow!("no study log in {}", s.data_dir.display())));
    }
    let store = EventStore::open_dir(&s.data_dir).user()?;
    let study = Study::open(store, std::sync::Arc::new(SystemClock), s.exec).user()?;
    let cycles: Vec<u32> = match cycle {
        Some(c) => vec![c],
        None => (1..=study.plan().cycles).filter(|&c| study.cycle(c).is_some_and(|cs| cs.closed_at.is_some())).collect(),
    };
    if cycles.is_empty() {
        return Err(Failure::User(anyhow!("no closed cycles to report")));
    }
    let mut reports = Vec::new();
    for c in cycles {
        reports.push(cycle_report(&study, c, s.exec).user()?);
    }
    let body = match format {
        Format::Text => reports.iter().map(|r| r.to_text()).collect::<Vec<_>>().join("\n"),
        Format::Csv => {
            let mut out = String::new();
            for (i, r) in reports.iter().enumerate() {
                let csv = r.to_csv().internal()?;
                // One header for the whole file.
                out += if i == 0 { &csv } else { csv.split_once('\n').map_or("", |x| x.1) };
            }
            out
        }
        Format::Json => serde_json::to_string_pretty(&reports).internal()? + "\n",
    };
    write!(stdout, "{body}").internal()?;
    Ok(())
}

pub fn cmd_serve(s: &Settings, plan: Option<PathBuf>) -> Result<(), Failure> {
    use cleftkit_service::AppState;

    let mut run = Run::new("serve");
    let state = AppState::open(&s.data_dir, std::sync::Arc::new(SystemClock), s.exec)
        .with_context(|| format!("opening data directory {}", s.data_dir.display()))
        .user()?;
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().internal()?;
    let plan_path = plan.or_else(|| s.plan.clone());
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&s.listen)
            .await
            .with_context(|| format!("binding {}", s.listen))
            .user()?;
        if let Some(path) = &plan_path {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).user()?;
            if state.create_if_empty(&text).user()? {
                tracing::info!(plan = %path.display(), "created study");
            }
            run.inputs.push(path.clone());
        }
        cleftkit_service::serve(listener, state, shutdown_signal()).await.internal()
    })?;
    run.finish(&s.data_dir, s, serde_json::json!({}))
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
