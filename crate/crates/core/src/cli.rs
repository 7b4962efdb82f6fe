//! Command-line front end.
//!
//! Subcommands: `gen`, `train`, `eval`, `score`, `audit` and `analyze`. Each
//! resolves a [`RunConfig`] (TOML file plus flag overrides) before doing any
//! work. Exit codes: 0 success, 1 malformed input or runtime failure, 2
//! configuration or usage error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::{
    generate_dataset, load_dataset, load_trajectories, save_dataset, save_trajectories, Dataset,
    Episode, EpisodeError, GeneratorParams, Split, TrajectoryRecord,
};
use crate::metrics::{
    bin_by_divergence, compute_metrics, fmt4, waypoint_visits, MetricsConfig, MetricsReport,
    DEFAULT_BIN_EDGES,
};
use crate::policy::PolicyParams;
use crate::sensors::SupervisionMode;
use crate::trainer::{
    evaluate, log_to_csv, Driver, EpisodeResult, EvalReport, TrainConfig, Trainer,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Input(_) | CliError::Run(_) => 1,
        }
    }
}

impl From<EpisodeError> for CliError {
    fn from(e: EpisodeError) -> Self {
        match e {
            EpisodeError::Malformed { .. } | EpisodeError::SchemaMismatch { .. } => {
                CliError::Input(e.to_string())
            }
            EpisodeError::InvalidParams(_) => CliError::Config(e.to_string()),
            _ => CliError::Run(e.to_string()),
        }
    }
}

/// Which waypoints of a sub-instruction's span must be visited for it to
/// count as followed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubInstructionRule {
    EndWaypoint,
    AllWaypoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    /// Divergence below which an episode counts as low-divergence.
    pub threshold: f64,
    /// Histogram bin edges over [0, 1].
    pub bin_edges: Vec<f64>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            threshold: 0.8,
            bin_edges: uniform_edges(10),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub bin_edges: Vec<f64>,
    /// Visit radius for the sub-instruction report.
    pub tau: f64,
    pub rule: SubInstructionRule,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            bin_edges: DEFAULT_BIN_EDGES.to_vec(),
            tau: 0.5,
            rule: SubInstructionRule::EndWaypoint,
        }
    }
}

/// Every tunable setting, resolved before a command runs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generator: GeneratorParams,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub audit: AuditConfig,
    pub analyze: AnalyzeConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(1);
            CliError::Config(format!("{}:{}: {}", path.display(), line, e.message()))
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.generator
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        check_edges(&self.audit.bin_edges)?;
        check_edges(&self.analyze.bin_edges)?;
        if !(self.metrics.success_distance > 0.0) || !(self.analyze.tau > 0.0) {
            return Err(CliError::Config("distances must be positive".into()));
        }
        Ok(())
    }
}

fn check_edges(edges: &[f64]) -> Result<(), CliError> {
    let ok = edges.len() >= 2
        && edges.windows(2).all(|w| w[0] < w[1])
        && edges[0] <= 0.0
        && edges[edges.len() - 1] >= 1.0;
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "bin edges must increase and cover [0, 1]: {edges:?}"
        )))
    }
}

pub fn uniform_edges(n: usize) -> Vec<f64> {
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

/// `--bins` accepts a bin count (uniform over [0, 1]) or comma-separated edges.
pub fn parse_bins(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Config(format!("invalid --bins value {s:?}"));
    let edges = if s.contains(',') {
        s.split(',')
            .map(|t| t.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        let n: usize = s.trim().parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        uniform_edges(n)
    };
    check_edges(&edges)?;
    Ok(edges)
}

/// Accepts `law-k:4`, `law-k=4` or `law-k 4` (likewise for `mixed-random`).
pub fn parse_mode(s: &str) -> Result<SupervisionMode, CliError> {
    let norm = s.trim().replacen(['=', ' '], ":", 1);
    norm.parse().map_err(|e| CliError::Config(format!("{e}")))
}

#[derive(Parser, Debug)]
#[command(
    name = "lawsim",
    version,
    about = "Waypoint-supervised navigation benchmark"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the generator and the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DatasetArg {
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate worlds and episodes into a dataset file.
    Gen {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a policy; writes checkpoints and the training log.
    Train {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or, without one, the oracle of `--mode`) on
    /// the validation splits.
    Eval {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an external trajectory log against a dataset.
    Score {
        #[command(flatten)]
        data: DatasetArg,
        /// Trajectory log (JSON lines).
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Divergence histogram and low-divergence fraction of a dataset.
    Audit {
        #[command(flatten)]
        data: DatasetArg,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        bins: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bin per-episode metrics by divergence; with `--dataset`, also write
    /// the per-sub-instruction visit report.
    Analyze {
        /// Per-episode metrics file written by `eval` or `score`.
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        bins: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// One line of the per-episode metrics file: a single flat JSON object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub split: Split,
    pub divergence: f64,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    /// Per pano waypoint: visited within the analysis radius.
    pub visited: Vec<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [
        ReportFormat::Json,
        ReportFormat::Csv,
        ReportFormat::Markdown,
    ];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

pub const SUMMARY_COLUMNS: [&str; 11] = [
    "split", "n", "tl", "ne", "os", "sr", "spl", "ndtw", "sdtw", "wa_05", "wa_10",
];

fn round4(v: f64) -> Option<f64> {
    v.is_finite()
        .then(|| fmt4(v).parse().expect("formatted float parses"))
}

#[derive(Serialize)]
struct SummaryRow {
    split: String,
    n: usize,
    tl: Option<f64>,
    ne: Option<f64>,
    os: Option<f64>,
    sr: Option<f64>,
    spl: Option<f64>,
    ndtw: Option<f64>,
    sdtw: Option<f64>,
    wa_05: Option<f64>,
    wa_10: Option<f64>,
}

/// Aggregate table, one row per split, in a fixed column order with floats
/// at 4 decimals.
pub fn write_report(report: &EvalReport, format: ReportFormat) -> String {
    let rows = report
        .aggregates
        .iter()
        .map(|(split, (m, n))| (split.to_string(), *n, m));
    match format {
        ReportFormat::Json => {
            let rows: Vec<SummaryRow> = rows
                .map(|(split, n, m)| SummaryRow {
                    split,
                    n,
                    tl: round4(m.tl),
                    ne: round4(m.ne),
                    os: round4(m.os),
                    sr: round4(m.sr),
                    spl: round4(m.spl),
                    ndtw: round4(m.ndtw),
                    sdtw: round4(m.sdtw),
                    wa_05: round4(m.wa_05),
                    wa_10: round4(m.wa_10),
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&rows).expect("summary serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(SUMMARY_COLUMNS).expect("in-memory write");
            for (split, n, m) in rows {
                let mut rec = vec![split, n.to_string()];
                rec.extend(
                    [
                        m.tl, m.ne, m.os, m.sr, m.spl, m.ndtw, m.sdtw, m.wa_05, m.wa_10,
                    ]
                    .map(fmt4),
                );
                w.write_record(rec).expect("in-memory write");
            }
            String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv")
        }
        ReportFormat::Markdown => {
            let mut s = String::from(
                "| Split | N | SR | SPL | nDTW | sDTW | WA |\n|---|---|---|---|---|---|---|\n",
            );
            for (split, n, m) in rows {
                let _ = writeln!(
                    s,
                    "| {split} | {n} | {} | {} | {} | {} | {} |",
                    fmt4(m.sr),
                    fmt4(m.spl),
                    fmt4(m.ndtw),
                    fmt4(m.sdtw),
                    fmt4(m.wa_05)
                );
            }
            s
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

fn run_err(e: impl std::fmt::Display) -> CliError {
    CliError::Run(e.to_string())
}

pub fn episode_records(data: &Dataset, report: &EvalReport, cfg: &RunConfig) -> Vec<EpisodeRecord> {
    report
        .episodes
        .iter()
        .map(|r| {
            let ep = data
                .episodes
                .iter()
                .find(|e| e.id == r.episode_id)
                .expect("results come from dataset episodes");
            let visited = match &r.trajectory {
                Some(t) => waypoint_visits(
                    &t.positions(),
                    &ep.pano_path.points,
                    cfg.analyze.tau,
                    data.map_of(ep),
                    cfg.metrics.wa_ordered,
                ),
                None => Vec::new(),
            };
            EpisodeRecord {
                episode_id: r.episode_id.clone(),
                split: r.split,
                divergence: r.divergence,
                metrics: r.metrics.clone(),
                visited,
            }
        })
        .collect()
}

pub fn save_episode_records(path: &Path, records: &[EpisodeRecord]) -> Result<(), CliError> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("episode records serialize");
        writeln!(w, "{line}").map_err(run_err)?;
    }
    w.flush().map_err(run_err)
}

pub fn load_episode_records(path: &Path) -> Result<Vec<EpisodeRecord>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line =
            line.map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| CliError::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes per-episode metrics, trajectories and the aggregate tables.
fn write_eval_outputs(
    out: &Path,
    data: &Dataset,
    report: &EvalReport,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    ensure_dir(out)?;
    save_episode_records(
        &out.join("episodes.jsonl"),
        &episode_records(data, report, cfg),
    )?;
    let trajectories: Vec<TrajectoryRecord> = report
        .episodes
        .iter()
        .filter_map(|r| {
            r.trajectory
                .as_ref()
                .map(|t| TrajectoryRecord::new(&r.episode_id, t))
        })
        .collect();
    save_trajectories(&out.join("trajectories.jsonl"), &trajectories)?;
    for f in ReportFormat::ALL {
        write_file(
            &out.join(format!("summary.{}", f.extension())),
            &write_report(report, f),
        )?;
    }
    print!("{}", write_report(report, ReportFormat::Markdown));
    Ok(())
}

fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let data = generate_dataset(&cfg.generator)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_dataset(out, &data)?;
    let low = data
        .episodes
        .iter()
        .filter(|e| e.divergence < cfg.audit.threshold)
        .count();
    println!(
        "wrote {} maps and {} episodes to {} ({} below divergence {})",
        data.maps.len(),
        data.episodes.len(),
        out.display(),
        low,
        fmt4(cfg.audit.threshold)
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let data = load_dataset(dataset)?;
    ensure_dir(out)?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;
    let mut trainer =
        Trainer::new(cfg.train.clone()).map_err(|e| CliError::Config(e.to_string()))?;
    let mut saved = Ok(());
    trainer
        .run(&data, |k, params| {
            log::info!("round {k} done");
            if saved.is_ok() {
                saved = params
                    .save(&out.join(format!("checkpoint_round{k}.json")))
                    .map_err(run_err);
            }
        })
        .map_err(run_err)?;
    saved?;
    trainer
        .params
        .save(&out.join("checkpoint.json"))
        .map_err(run_err)?;
    write_file(&out.join("train_log.csv"), &log_to_csv(&trainer.log))?;
    let last = trainer.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} with {} buffered steps; final loss {}",
        cfg.train.mode,
        trainer.buffer.len(),
        fmt4(last)
    );
    Ok(())
}

fn validation_episodes(data: &Dataset) -> Vec<&Episode> {
    data.episodes
        .iter()
        .filter(|e| e.split != Split::Train)
        .collect()
}

fn cmd_eval(
    cfg: &RunConfig,
    dataset: &Path,
    checkpoint: Option<&Path>,
    oracle: bool,
    out: &Path,
) -> Result<(), CliError> {
    let data = load_dataset(dataset)?;
    let episodes = validation_episodes(&data);
    let report = match checkpoint {
        Some(path) => {
            let params = PolicyParams::load(path)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            let mut train = cfg.train.clone();
            train.policy = params.config.clone();
            if train.scan.n_rays != params.config.n_rays
                || train.scan.max_range != params.config.max_range
            {
                return Err(CliError::Config(
                    "checkpoint and scan settings disagree".into(),
                ));
            }
            evaluate(
                &data,
                &episodes,
                Driver::Policy(&params),
                &train,
                &cfg.metrics,
            )
            .map_err(run_err)?
        }
        None if oracle => evaluate(
            &data,
            &episodes,
            Driver::Oracle(cfg.train.mode),
            &cfg.train,
            &cfg.metrics,
        )
        .map_err(run_err)?,
        None => return Err(CliError::Config("eval needs --checkpoint or --mode".into())),
    };
    write_eval_outputs(out, &data, &report, cfg)
}

/// Metrics for externally produced trajectories.
pub fn score_records(
    data: &Dataset,
    log: &[TrajectoryRecord],
    log_path: &Path,
    cfg: &MetricsConfig,
) -> Result<EvalReport, CliError> {
    let mut results = Vec::with_capacity(log.len());
    for (i, rec) in log.iter().enumerate() {
        let ep = data
            .episodes
            .iter()
            .find(|e| e.id == rec.episode_id)
            .ok_or_else(|| {
                CliError::Input(format!(
                    "{}:{}: unknown episode {}",
                    log_path.display(),
                    i + 1,
                    rec.episode_id
                ))
            })?;
        let traj = rec.trajectory();
        let metrics = compute_metrics(ep, &traj, data.map_of(ep), cfg)
            .map_err(|e| CliError::Input(format!("{}:{}: {e}", log_path.display(), i + 1)))?;
        results.push(EpisodeResult {
            episode_id: ep.id.clone(),
            split: ep.split,
            divergence: ep.divergence,
            metrics,
            trajectory: Some(traj),
        });
    }
    Ok(EvalReport::from_results(results))
}

fn cmd_score(cfg: &RunConfig, dataset: &Path, log_path: &Path, out: &Path) -> Result<(), CliError> {
    let data = load_dataset(dataset)?;
    let log = load_trajectories(log_path)?;
    let report = score_records(&data, &log, log_path, &cfg.metrics)?;
    write_eval_outputs(out, &data, &report, cfg)
}

/// Low-divergence statistics of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub n: usize,
    pub threshold: f64,
    pub below: usize,
    pub fraction: f64,
    /// `(lo, hi, count)`; bins are `[lo, hi)`, the last one closed.
    pub histogram: Vec<(f64, f64, usize)>,
}

pub fn audit(data: &Dataset, threshold: f64, edges: &[f64]) -> AuditReport {
    let divs: Vec<f64> = data.episodes.iter().map(|e| e.divergence).collect();
    let below = divs.iter().filter(|&&d| d < threshold).count();
    let last = edges.len() - 2;
    let histogram = edges
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let count = divs
                .iter()
                .filter(|&&d| d >= w[0] && (d < w[1] || (i == last && d <= w[1])))
                .count();
            (w[0], w[1], count)
        })
        .collect();
    AuditReport {
        n: divs.len(),
        threshold,
        below,
        fraction: if divs.is_empty() {
            f64::NAN
        } else {
            below as f64 / divs.len() as f64
        },
        histogram,
    }
}

fn cmd_audit(cfg: &RunConfig, dataset: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let data = load_dataset(dataset)?;
    let r = audit(&data, cfg.audit.threshold, &cfg.audit.bin_edges);
    if let Some(out) = out {
        ensure_dir(out)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["bin_lo", "bin_hi", "count"])
            .expect("in-memory write");
        for (lo, hi, c) in &r.histogram {
            w.write_record([fmt4(*lo), fmt4(*hi), c.to_string()])
                .expect("in-memory write");
        }
        let csv = String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv");
        write_file(&out.join("divergence_histogram.csv"), &csv)?;
        let mut json = serde_json::to_string_pretty(&r).expect("audit serializes");
        json.push('\n');
        write_file(&out.join("audit.json"), &json)?;
    }
    println!(
        "{} of {} episodes below divergence {}: fraction {}",
        r.below,
        r.n,
        fmt4(r.threshold),
        fmt4(r.fraction)
    );
    Ok(())
}

/// One row of the sub-instruction visit report.
#[derive(Clone, Debug, PartialEq)]
pub struct SubInstructionRow {
    pub episode_id: String,
    pub index: usize,
    pub tokens: String,
    pub panos: [usize; 2],
    pub correct: bool,
}

pub fn sub_instruction_rows(
    records: &[EpisodeRecord],
    data: &Dataset,
    rule: SubInstructionRule,
) -> Result<Vec<SubInstructionRow>, CliError> {
    let mut rows = Vec::new();
    for r in records {
        let ep = data
            .episodes
            .iter()
            .find(|e| e.id == r.episode_id)
            .ok_or_else(|| {
                CliError::Input(format!("metrics mention unknown episode {}", r.episode_id))
            })?;
        if r.visited.len() != ep.pano_path.len() {
            return Err(CliError::Input(format!(
                "episode {}: visit flags do not match its waypoints",
                r.episode_id
            )));
        }
        for (i, sub) in ep.sub_instructions.iter().enumerate() {
            let [a, b] = sub.panos;
            let correct = match rule {
                SubInstructionRule::EndWaypoint => r.visited[b],
                SubInstructionRule::AllWaypoints => r.visited[a..=b].iter().all(|&v| v),
            };
            let tokens = ep.instruction[sub.tokens[0]..sub.tokens[1]]
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            rows.push(SubInstructionRow {
                episode_id: ep.id.clone(),
                index: i,
                tokens,
                panos: sub.panos,
                correct,
            });
        }
    }
    Ok(rows)
}

pub fn sub_instruction_markdown(rows: &[SubInstructionRow], records: &[EpisodeRecord]) -> String {
    let mut s = String::new();
    let total = rows.len();
    let correct = rows.iter().filter(|r| r.correct).count();
    let _ = writeln!(s, "Sub-instructions followed: {correct} of {total}\n");
    for rec in records {
        let _ = writeln!(
            s,
            "### {} (divergence {}, nDTW {}, WA {})\n",
            rec.episode_id,
            fmt4(rec.divergence),
            fmt4(rec.metrics.ndtw),
            fmt4(rec.metrics.wa_05)
        );
        s.push_str("| # | Sub-instruction | Waypoints | Followed |\n|---|---|---|---|\n");
        for r in rows.iter().filter(|r| r.episode_id == rec.episode_id) {
            let mark = if r.correct { "yes" } else { "no" };
            let _ = writeln!(
                s,
                "| {} | {} | {}-{} | {mark} |",
                r.index + 1,
                r.tokens,
                r.panos[0],
                r.panos[1]
            );
        }
        s.push('\n');
    }
    s
}

fn cmd_analyze(
    cfg: &RunConfig,
    metrics_path: &Path,
    dataset: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let records = load_episode_records(metrics_path)?;
    let pairs: Vec<(f64, MetricsReport)> = records
        .iter()
        .map(|r| (r.divergence, r.metrics.clone()))
        .collect();
    let table = bin_by_divergence(&pairs, &cfg.analyze.bin_edges)
        .map_err(|e| CliError::Config(e.to_string()))?;
    ensure_dir(out)?;
    write_file(&out.join("bins.csv"), &table.to_csv())?;
    print!("{}", table.to_csv());
    if let Some(path) = dataset {
        let data = load_dataset(path)?;
        let rows = sub_instruction_rows(&records, &data, cfg.analyze.rule)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "episode_id",
            "index",
            "tokens",
            "pano_start",
            "pano_end",
            "followed",
        ])
        .expect("in-memory write");
        for r in &rows {
            w.write_record([
                r.episode_id.clone(),
                r.index.to_string(),
                r.tokens.clone(),
                r.panos[0].to_string(),
                r.panos[1].to_string(),
                r.correct.to_string(),
            ])
            .expect("in-memory write");
        }
        let csv = String::from_utf8(w.into_inner().expect("flush")).expect("utf-8 csv");
        write_file(&out.join("sub_instructions.csv"), &csv)?;
        write_file(
            &out.join("sub_instructions.md"),
            &sub_instruction_markdown(&rows, &records),
        )?;
    }
    Ok(())
}

/// Loads the config file (if any) and applies flag overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.generator.seed = seed;
        cfg.train.seed = seed;
    }
    match &cli.command {
        Command::Train { mode: Some(m), .. } | Command::Eval { mode: Some(m), .. } => {
            cfg.train.mode = parse_mode(m)?;
        }
        Command::Audit {
            threshold, bins, ..
        } => {
            if let Some(t) = threshold {
                cfg.audit.threshold = *t;
            }
            if let Some(b) = bins {
                cfg.audit.bin_edges = parse_bins(b)?;
            }
        }
        Command::Analyze { bins: Some(b), .. } => cfg.analyze.bin_edges = parse_bins(b)?,
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Gen { out } => cmd_gen(&cfg, out),
        Command::Train { data, out, .. } => cmd_train(&cfg, &data.dataset, out),
        Command::Eval {
            data,
            checkpoint,
            mode,
            out,
        } => cmd_eval(
            &cfg,
            &data.dataset,
            checkpoint.as_deref(),
            mode.is_some(),
            out,
        ),
        Command::Score { data, log, out } => cmd_score(&cfg, &data.dataset, log, out),
        Command::Audit { data, out, .. } => cmd_audit(&cfg, &data.dataset, out.as_deref()),
        Command::Analyze {
            metrics,
            dataset,
            out,
            ..
        } => cmd_analyze(&cfg, metrics, dataset.as_deref(), out),
    }
}

/// Caps rayon's pool from `LAWSIM_THREADS`.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LAWSIM_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Config(format!(
            "LAWSIM_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    // A pool may already exist when called twice in one process; keep it.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    let result = configure_threads().and_then(|_| execute(&cli));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
