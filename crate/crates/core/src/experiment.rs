//! Experiment harness: flat key-value configs, reproduction runs over a
//! grid of algorithms and step sizes, step-size sweeps with critical-value
//! estimation, trace CSVs, a manifest, and a gnuplot script for the
//! semilog-y convergence figures.
//!
//! Reference convention: the distance target is the iterate reached at
//! `reference_horizon` by the first configured algorithm (falling back
//! through the step-size list on divergence). For convex families the
//! centralized oracle solution is reported alongside in the manifest.

use std::fmt;
use std::fs;
use std::path::PathBuf;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::analysis::{rate_fit, RateFit};
use crate::graph::{build_mixing_matrix, DirectedNetwork, GraphError, MixingMatrix};
use crate::problems::{
    make_geometric_median, make_l1_least_squares, make_lq_least_squares, make_qp, ProblemError,
    ProblemInstance,
};
use crate::solvers::{
    run, trace_csv, Algorithm, RunConfig, SolverError, StepSchedule, Termination, TraceRecord,
};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("field `{key}`: unknown key")]
    UnknownKey { key: String },
    #[error("field `{key}`: missing required key")]
    MissingKey { key: String },
    #[error("field `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    GeometricMedian,
    L1Ls,
    Qp,
    LqLs,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::GeometricMedian => "geometric_median",
            ExperimentKind::L1Ls => "l1_ls",
            ExperimentKind::Qp => "qp",
            ExperimentKind::LqLs => "lq_ls",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Z0Mode {
    Zeros,
    /// Start every agent at its own anchor (geometric median only).
    Anchors,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub n: usize,
    pub p: usize,
    pub m_i: Option<usize>,
    pub lambda: Option<f64>,
    /// One panel per entry; only the nonconvex family accepts several.
    pub q: Vec<f64>,
    pub alphas: Vec<f64>,
    pub algorithms: Vec<Algorithm>,
    pub seed: u64,
    pub max_iter: usize,
    pub reference_horizon: usize,
    pub output_dir: PathBuf,
    pub record_every: usize,
    /// Relative tolerance for iterations-to-tolerance summaries.
    pub tolerance: f64,
    /// Arc probability of the random digraph.
    pub rho: f64,
    pub z0: Z0Mode,
    pub sp_schedule: StepSchedule,
}

const CONFIG_KEYS: &[&str] = &[
    "experiment",
    "n",
    "p",
    "m_i",
    "lambda",
    "q",
    "alphas",
    "algorithms",
    "seed",
    "max_iter",
    "reference_horizon",
    "output_dir",
    "record_every",
    "tolerance",
    "rho",
    "z0",
    "sp_schedule",
];

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

/// Parses the flat `key = value` format (comments with `#`, arrays
/// comma-separated). Unknown keys are rejected with their field path.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut map = std::collections::BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax {
            line: idx + 1,
            text: raw.to_string(),
        })?;
        let key = k.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(ConfigError::UnknownKey { key });
        }
        map.insert(key, v.trim().to_string());
    }
    let get = |key: &str| {
        map.get(key)
            .ok_or(ConfigError::MissingKey { key: key.into() })
    };
    let parse_usize = |key: &str| -> Result<usize, ConfigError> {
        get(key)?
            .parse()
            .map_err(|_| invalid(key, "expected a nonnegative integer"))
    };
    let parse_f64 = |key: &str, v: &str| -> Result<f64, ConfigError> {
        v.parse()
            .map_err(|_| invalid(key, format!("bad number {v:?}")))
    };

    let experiment = match get("experiment")?.as_str() {
        "geometric_median" => ExperimentKind::GeometricMedian,
        "l1_ls" => ExperimentKind::L1Ls,
        "qp" => ExperimentKind::Qp,
        "lq_ls" => ExperimentKind::LqLs,
        other => {
            return Err(invalid(
                "experiment",
                format!(
                    "unknown experiment {other:?}; expected geometric_median | l1_ls | qp | lq_ls"
                ),
            ))
        }
    };
    let n = parse_usize("n")?;
    let p = parse_usize("p")?;
    if n == 0 || p == 0 {
        return Err(invalid("n", "n and p must be at least 1"));
    }
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| invalid("seed", "expected an integer"))?;

    let alphas: Vec<f64> = get("alphas")?
        .split(',')
        .map(|tok| parse_f64("alphas", tok.trim()))
        .collect::<Result<_, _>>()?;
    if alphas.is_empty() || alphas.iter().any(|a| *a <= 0.0) {
        return Err(invalid(
            "alphas",
            "need a nonempty list of positive step sizes",
        ));
    }
    let algorithms: Vec<Algorithm> = get("algorithms")?
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            Algorithm::parse(tok)
                .ok_or_else(|| invalid("algorithms", format!("unknown algorithm {tok:?}")))
        })
        .collect::<Result<_, _>>()?;
    if algorithms.is_empty() {
        return Err(invalid("algorithms", "need at least one algorithm"));
    }

    let needs_data = matches!(experiment, ExperimentKind::L1Ls | ExperimentKind::LqLs);
    let m_i = match map.get("m_i") {
        Some(v) => Some(
            v.parse()
                .map_err(|_| invalid("m_i", "expected a positive integer"))?,
        ),
        None if needs_data => return Err(ConfigError::MissingKey { key: "m_i".into() }),
        None => None,
    };
    let lambda = match map.get("lambda") {
        Some(v) => Some(parse_f64("lambda", v)?),
        None if needs_data => {
            return Err(ConfigError::MissingKey {
                key: "lambda".into(),
            })
        }
        None => None,
    };
    let q: Vec<f64> = match map.get("q") {
        Some(v) => v
            .split(',')
            .map(|tok| parse_f64("q", tok.trim()))
            .collect::<Result<_, _>>()?,
        None if experiment == ExperimentKind::LqLs => {
            return Err(ConfigError::MissingKey { key: "q".into() })
        }
        None => Vec::new(),
    };
    for qv in &q {
        let ok = *qv == 0.0 || (*qv - 0.5).abs() < 1e-9 || (*qv - 2.0 / 3.0).abs() < 1e-4;
        if !ok {
            return Err(invalid(
                "q",
                format!("q = {qv} unsupported; use 0, 0.5, or 0.6667"),
            ));
        }
    }
    if experiment != ExperimentKind::LqLs && !q.is_empty() {
        return Err(invalid("q", "q applies only to lq_ls"));
    }

    let reference_horizon = match map.get("reference_horizon") {
        Some(v) => v
            .parse()
            .map_err(|_| invalid("reference_horizon", "expected an integer"))?,
        None => match experiment {
            ExperimentKind::GeometricMedian => 1000,
            _ => 10_000,
        },
    };
    let max_iter = match map.get("max_iter") {
        Some(v) => v
            .parse()
            .map_err(|_| invalid("max_iter", "expected an integer"))?,
        None => reference_horizon,
    };
    if max_iter == 0 {
        return Err(invalid("max_iter", "must be at least 1"));
    }
    let record_every = match map.get("record_every") {
        Some(v) => v
            .parse()
            .map_err(|_| invalid("record_every", "expected an integer"))?,
        None => 1,
    };
    if record_every == 0 {
        return Err(invalid("record_every", "must be at least 1"));
    }
    let tolerance = match map.get("tolerance") {
        Some(v) => parse_f64("tolerance", v)?,
        None => 1e-6,
    };
    let rho = match map.get("rho") {
        Some(v) => parse_f64("rho", v)?,
        None => 0.5,
    };
    if !(0.0..=1.0).contains(&rho) {
        return Err(invalid("rho", "arc probability must lie in [0, 1]"));
    }
    let z0 = match map.get("z0").map(|s| s.as_str()) {
        Some("zeros") => Z0Mode::Zeros,
        Some("anchors") => Z0Mode::Anchors,
        Some(other) => return Err(invalid("z0", format!("unknown mode {other:?}"))),
        None => match experiment {
            ExperimentKind::GeometricMedian => Z0Mode::Anchors,
            _ => Z0Mode::Zeros,
        },
    };
    if z0 == Z0Mode::Anchors && experiment != ExperimentKind::GeometricMedian {
        return Err(invalid(
            "z0",
            "anchors start exists only for geometric_median",
        ));
    }
    let sp_schedule = match map.get("sp_schedule").map(|s| s.as_str()) {
        Some("constant") => StepSchedule::Constant,
        Some("inv_sqrt") => StepSchedule::InvSqrt,
        Some(other) => {
            return Err(invalid(
                "sp_schedule",
                format!("unknown schedule {other:?}"),
            ))
        }
        None => StepSchedule::Constant,
    };
    let output_dir = PathBuf::from(
        map.get("output_dir")
            .cloned()
            .unwrap_or_else(|| "diropt_out".into()),
    );

    Ok(ExperimentConfig {
        experiment,
        n,
        p,
        m_i,
        lambda,
        q,
        alphas,
        algorithms,
        seed,
        max_iter,
        reference_horizon,
        output_dir,
        record_every,
        tolerance,
        rho,
        z0,
        sp_schedule,
    })
}

/// Canonical single-line rendering used for the manifest hash.
pub fn canonical_config(cfg: &ExperimentConfig) -> String {
    format!(
        "experiment={};n={};p={};m_i={:?};lambda={:?};q={:?};alphas={:?};algorithms={:?};seed={};max_iter={};reference_horizon={};record_every={};tolerance={};rho={};z0={:?};sp_schedule={:?}",
        cfg.experiment,
        cfg.n,
        cfg.p,
        cfg.m_i,
        cfg.lambda,
        cfg.q,
        cfg.alphas,
        cfg.algorithms.iter().map(|a| a.name()).collect::<Vec<_>>(),
        cfg.seed,
        cfg.max_iter,
        cfg.reference_horizon,
        cfg.record_every,
        cfg.tolerance,
        cfg.rho,
        cfg.z0,
        cfg.sp_schedule,
    )
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct CellSummary {
    pub algorithm: Algorithm,
    pub alpha: f64,
    pub termination: Termination,
    pub final_dist: Option<f64>,
    pub iters_to_tol: Option<usize>,
    pub rate: Option<RateFit>,
    pub trace_file: String,
}

#[derive(Debug, Clone)]
pub struct PanelReport {
    /// Empty for single-panel experiments, `q0.5`-style otherwise.
    pub label: String,
    pub q: Option<f64>,
    pub cells: Vec<CellSummary>,
    /// Distance between the horizon reference and the centralized oracle
    /// solution, when the latter exists.
    pub oracle_gap: Option<f64>,
    pub reference_alpha: Option<f64>,
    pub pd_check_passed: bool,
    pub resample_count: u32,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub panels: Vec<PanelReport>,
    pub output_dir: PathBuf,
    pub config_hash: u64,
    pub graph_hash: u64,
    pub divergence_count: usize,
}

fn build_instance(
    cfg: &ExperimentConfig,
    q: Option<f64>,
) -> Result<ProblemInstance, ExperimentError> {
    Ok(match cfg.experiment {
        ExperimentKind::GeometricMedian => make_geometric_median(cfg.n, cfg.p, cfg.seed),
        ExperimentKind::L1Ls => make_l1_least_squares(
            cfg.n,
            cfg.p,
            cfg.m_i.expect("validated"),
            cfg.lambda.expect("validated"),
            cfg.seed,
        ),
        ExperimentKind::Qp => make_qp(cfg.n, cfg.p, cfg.seed)?,
        ExperimentKind::LqLs => make_lq_least_squares(
            cfg.n,
            cfg.p,
            cfg.m_i.expect("validated"),
            cfg.lambda.expect("validated"),
            q.expect("lq panels carry q"),
            cfg.seed,
            cfg.reference_horizon,
        ),
    })
}

fn z0_matrix(cfg: &ExperimentConfig, inst: &ProblemInstance) -> DMatrix<f64> {
    match cfg.z0 {
        Z0Mode::Zeros => DMatrix::zeros(inst.n, inst.p),
        Z0Mode::Anchors => inst
            .anchor_matrix()
            .unwrap_or_else(|| DMatrix::zeros(inst.n, inst.p)),
    }
}

/// Runs the first algorithm through the step-size list (in config order)
/// until one reaches the horizon without diverging; that final iterate is
/// the distance reference.
fn resolve_reference(
    cfg: &ExperimentConfig,
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    z0: &DMatrix<f64>,
) -> Option<(DMatrix<f64>, f64)> {
    for &alpha in &cfg.alphas {
        let run_cfg = RunConfig {
            record_every: cfg.reference_horizon.max(1),
            alpha_schedule: cfg.sp_schedule,
            ..RunConfig::new(cfg.algorithms[0], alpha, cfg.reference_horizon, z0.clone())
        };
        match run(inst, mix, &run_cfg) {
            Ok(out) if matches!(out.termination, Termination::MaxIter) => {
                return Some((out.final_state.x, alpha));
            }
            _ => continue,
        }
    }
    None
}

fn iters_to_tolerance(records: &[TraceRecord], tolerance: f64) -> Option<usize> {
    let d0 = records.first()?.dist_to_ref?;
    records
        .iter()
        .find(|r| r.dist_to_ref.is_some_and(|d| d <= tolerance * d0))
        .map(|r| r.t)
}

fn cell_file_name(label: &str, algorithm: Algorithm, alpha: f64) -> String {
    if label.is_empty() {
        format!("trace_{}_a{}.csv", algorithm.name(), alpha)
    } else {
        format!("trace_{}_{}_a{}.csv", label, algorithm.name(), alpha)
    }
}

/// Full reproduction harness: builds the graph and instance, resolves the
/// reference, runs every (algorithm, step size) cell concurrently, writes
/// per-cell trace CSVs plus a manifest and a plot script.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, ExperimentError> {
    fs::create_dir_all(&cfg.output_dir)?;
    let net = DirectedNetwork::random_strongly_connected(cfg.n, cfg.rho, cfg.seed);
    let mix = build_mixing_matrix(&net)?;
    let adjacency = net.to_adjacency_text();
    fs::write(cfg.output_dir.join("graph.adj"), &adjacency)?;
    fs::write(cfg.output_dir.join("mixing.csv"), mix.matrix_csv())?;
    let pd = crate::graph::check_positive_definiteness(&mix);

    let panels_spec: Vec<(String, Option<f64>)> = if cfg.experiment == ExperimentKind::LqLs {
        cfg.q.iter().map(|&q| (format!("q{q}"), Some(q))).collect()
    } else {
        vec![(String::new(), None)]
    };

    let mut panels = Vec::new();
    let mut divergence_count = 0;
    for (label, q) in panels_spec {
        let inst = build_instance(cfg, q)?;
        let z0 = z0_matrix(cfg, &inst);
        let reference = resolve_reference(cfg, &inst, &mix, &z0);
        let oracle_gap = match (&reference, inst.reference_point()) {
            (Some((href, _)), Some(x_star)) => {
                let mut consensual = DMatrix::zeros(inst.n, inst.p);
                for i in 0..inst.n {
                    consensual.set_row(i, &x_star.transpose());
                }
                Some((href - consensual).norm())
            }
            _ => None,
        };

        let fit_horizon = (cfg.reference_horizon as f64 * 0.9) as usize;
        let cells: Vec<CellSummary> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for &algorithm in &cfg.algorithms {
                for &alpha in &cfg.alphas {
                    let inst = &inst;
                    let mix = &mix;
                    let z0 = z0.clone();
                    let reference = reference.as_ref().map(|(m, _)| m.clone());
                    let label = label.clone();
                    let out_dir = cfg.output_dir.clone();
                    handles.push(
                        scope.spawn(move || -> Result<CellSummary, ExperimentError> {
                            let run_cfg = RunConfig {
                                record_every: cfg.record_every,
                                alpha_schedule: cfg.sp_schedule,
                                reference,
                                ..RunConfig::new(algorithm, alpha, cfg.max_iter, z0)
                            };
                            let out = run(inst, mix, &run_cfg)?;
                            let trace_file = cell_file_name(&label, algorithm, alpha);
                            fs::write(out_dir.join(&trace_file), trace_csv(&out.records))?;
                            // Self-referenced traces collapse artificially at
                            // the horizon and bottom out at reference
                            // precision; fit on the clean decay section.
                            let d0 = out.records.first().and_then(|r| r.dist_to_ref);
                            let fit_records: Vec<TraceRecord> = out
                                .records
                                .iter()
                                .filter(|r| {
                                    r.t <= fit_horizon
                                        && match (r.dist_to_ref, d0) {
                                            (Some(d), Some(d0)) => d >= 1e-9 * d0,
                                            _ => true,
                                        }
                                })
                                .cloned()
                                .collect();
                            Ok(CellSummary {
                                algorithm,
                                alpha,
                                final_dist: out.records.last().and_then(|r| r.dist_to_ref),
                                iters_to_tol: iters_to_tolerance(&out.records, cfg.tolerance),
                                rate: rate_fit(&fit_records).ok(),
                                termination: out.termination,
                                trace_file,
                            })
                        }),
                    );
                }
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("cell thread"))
                .collect::<Result<Vec<_>, _>>()
        })?;
        divergence_count += cells
            .iter()
            .filter(|c| matches!(c.termination, Termination::Diverged { .. }))
            .count();
        panels.push(PanelReport {
            label,
            q,
            cells,
            oracle_gap,
            reference_alpha: reference.map(|(_, a)| a),
            pd_check_passed: pd,
            resample_count: inst.resample_count,
        });
    }

    let report = ExperimentReport {
        panels,
        output_dir: cfg.output_dir.clone(),
        config_hash: fnv1a64(canonical_config(cfg).as_bytes()),
        graph_hash: fnv1a64(adjacency.as_bytes()),
        divergence_count,
    };
    fs::write(
        cfg.output_dir.join("manifest.txt"),
        manifest_text(cfg, &report),
    )?;
    fs::write(cfg.output_dir.join("plot.gp"), emit_plots(&report))?;
    fs::write(cfg.output_dir.join("summary.txt"), summary_text(&report))?;
    Ok(report)
}

fn manifest_text(cfg: &ExperimentConfig, report: &ExperimentReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("seed = {}\n", cfg.seed));
    out.push_str(&format!("config_hash = {:016x}\n", report.config_hash));
    out.push_str(&format!("graph_hash = {:016x}\n", report.graph_hash));
    out.push_str(&format!("config = {}\n", canonical_config(cfg)));
    for panel in &report.panels {
        let prefix = if panel.label.is_empty() {
            "panel".to_string()
        } else {
            format!("panel_{}", panel.label)
        };
        out.push_str(&format!(
            "{prefix}.pd_check_passed = {}\n",
            panel.pd_check_passed
        ));
        out.push_str(&format!(
            "{prefix}.resample_count = {}\n",
            panel.resample_count
        ));
        if let Some(alpha) = panel.reference_alpha {
            out.push_str(&format!("{prefix}.reference_alpha = {alpha}\n"));
        }
        if let Some(gap) = panel.oracle_gap {
            out.push_str(&format!("{prefix}.oracle_gap = {gap:.16e}\n"));
        }
        for cell in &panel.cells {
            let key = format!("{prefix}.{}_a{}", cell.algorithm.name(), cell.alpha);
            let status = match cell.termination {
                Termination::MaxIter => "completed".to_string(),
                Termination::Converged { round } => format!("converged@{round}"),
                Termination::Diverged { round } => format!("diverged@{round}"),
            };
            out.push_str(&format!("{key}.status = {status}\n"));
            if let Some(d) = cell.final_dist {
                out.push_str(&format!("{key}.final_dist = {d:.16e}\n"));
            }
            if let Some(it) = cell.iters_to_tol {
                out.push_str(&format!("{key}.iters_to_tol = {it}\n"));
            }
            if let Some(fit) = &cell.rate {
                out.push_str(&format!("{key}.rho_hat = {:.6}\n", fit.rho_hat));
                out.push_str(&format!("{key}.onset_t = {}\n", fit.onset_t));
                out.push_str(&format!("{key}.r_squared = {:.6}\n", fit.r_squared));
            }
        }
    }
    out
}

fn summary_text(report: &ExperimentReport) -> String {
    let mut out = String::from("panel,algorithm,alpha,status,iters_to_tol,rho_hat\n");
    for panel in &report.panels {
        for cell in &panel.cells {
            let status = match cell.termination {
                Termination::MaxIter => "completed".into(),
                Termination::Converged { round } => format!("converged@{round}"),
                Termination::Diverged { round } => format!("diverged@{round}"),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                panel.label,
                cell.algorithm.name(),
                cell.alpha,
                status,
                cell.iters_to_tol.map(|v| v.to_string()).unwrap_or_default(),
                cell.rate
                    .as_ref()
                    .map(|f| format!("{:.6}", f.rho_hat))
                    .unwrap_or_default(),
            ));
        }
    }
    out
}

/// Gnuplot script over the emitted trace CSVs: one semilog-y panel per
/// sub-experiment, one curve per (algorithm, step size). No rendering
/// dependency is assumed here; the script is plain declarative commands.
pub fn emit_plots(report: &ExperimentReport) -> String {
    let mut out = String::from("# convergence figures over the trace CSVs in this directory\n");
    let with_traces: Vec<&PanelReport> = report
        .panels
        .iter()
        .filter(|p| !p.cells.is_empty())
        .collect();
    if with_traces.is_empty() {
        out.push_str("# nothing to plot: the report contains no traces\n");
        return out;
    }
    out.push_str("set datafile separator ','\n");
    out.push_str("set logscale y\nset xlabel 't'\nset ylabel '||x^t - x*||_F'\nset key outside\n");
    if with_traces.len() > 1 {
        out.push_str(&format!("set multiplot layout 1,{}\n", with_traces.len()));
    }
    for panel in &with_traces {
        if !panel.label.is_empty() {
            out.push_str(&format!("set title '{}'\n", panel.label));
        }
        let curves: Vec<String> = panel
            .cells
            .iter()
            .map(|cell| {
                format!(
                    "'{}' using 1:2 with lines title '{} a={}'",
                    cell.trace_file,
                    cell.algorithm.name(),
                    cell.alpha
                )
            })
            .collect();
        out.push_str(&format!("plot {}\n", curves.join(", \\\n     ")));
    }
    if with_traces.len() > 1 {
        out.push_str("unset multiplot\n");
    }
    out
}

#[derive(Debug, Clone)]
pub enum SweepOutcome {
    Converged { iterations: usize },
    MaxedOut { final_relative: f64 },
    Diverged { round: usize },
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub alpha: f64,
    pub outcome: SweepOutcome,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Midpoint between the largest converging and smallest diverging step
    /// size, when both exist.
    pub critical_estimate: Option<f64>,
}

impl SweepTable {
    pub fn render(&self) -> String {
        let mut out = String::from("alpha,outcome,detail\n");
        for row in &self.rows {
            let (outcome, detail) = match &row.outcome {
                SweepOutcome::Converged { iterations } => ("converged", iterations.to_string()),
                SweepOutcome::MaxedOut { final_relative } => {
                    ("maxed_out", format!("{final_relative:.3e}"))
                }
                SweepOutcome::Diverged { round } => ("DIVERGED", round.to_string()),
            };
            out.push_str(&format!("{},{},{}\n", row.alpha, outcome, detail));
        }
        if let Some(c) = self.critical_estimate {
            out.push_str(&format!("# critical_alpha_estimate = {c}\n"));
        }
        out
    }
}

/// Sweeps the first configured algorithm over a step-size grid, measuring
/// iterations to the relative tolerance. The critical step size is bracketed
/// by the largest converging and smallest diverging grid point.
pub fn sweep_alpha(cfg: &ExperimentConfig, grid: &[f64]) -> Result<SweepTable, ExperimentError> {
    let net = DirectedNetwork::random_strongly_connected(cfg.n, cfg.rho, cfg.seed);
    let mix = build_mixing_matrix(&net)?;
    let q = cfg.q.first().copied();
    let inst = build_instance(cfg, q)?;
    let z0 = z0_matrix(cfg, &inst);
    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // The largest non-diverging grid point converges fastest, so it yields
    // the best horizon reference.
    let reference = {
        let mut found = None;
        for &alpha in sorted.iter().rev() {
            let run_cfg = RunConfig {
                record_every: cfg.reference_horizon.max(1),
                alpha_schedule: cfg.sp_schedule,
                ..RunConfig::new(cfg.algorithms[0], alpha, cfg.reference_horizon, z0.clone())
            };
            if let Ok(out) = run(&inst, &mix, &run_cfg) {
                if matches!(out.termination, Termination::MaxIter) {
                    found = Some(out.final_state.x);
                    break;
                }
            }
        }
        found
    };

    let rows: Vec<SweepRow> = std::thread::scope(|scope| {
        let handles: Vec<_> = sorted
            .iter()
            .map(|&alpha| {
                let inst = &inst;
                let mix = &mix;
                let z0 = z0.clone();
                let reference = reference.clone();
                scope.spawn(move || -> Result<SweepRow, ExperimentError> {
                    let mut run_cfg = RunConfig {
                        record_every: cfg.record_every,
                        alpha_schedule: cfg.sp_schedule,
                        reference: reference.clone(),
                        ..RunConfig::new(cfg.algorithms[0], alpha, cfg.max_iter, z0)
                    };
                    if reference.is_some() {
                        // Initial distance sets the relative tolerance scale.
                        let probe = run(
                            inst,
                            mix,
                            &RunConfig {
                                max_iter: 0,
                                ..run_cfg.clone()
                            },
                        )?;
                        let x1_dist = probe.records[0].dist_to_ref.unwrap_or(1.0).max(1e-300);
                        run_cfg.stop_tol = Some(cfg.tolerance * x1_dist);
                    }
                    let out = run(inst, mix, &run_cfg)?;
                    let outcome = match out.termination {
                        Termination::Converged { round } => {
                            SweepOutcome::Converged { iterations: round }
                        }
                        Termination::Diverged { round } => SweepOutcome::Diverged { round },
                        Termination::MaxIter => {
                            let final_rel = match (out.records.first(), out.records.last()) {
                                (Some(f), Some(l)) => match (f.dist_to_ref, l.dist_to_ref) {
                                    (Some(a), Some(b)) if a > 0.0 => b / a,
                                    _ => f64::NAN,
                                },
                                _ => f64::NAN,
                            };
                            SweepOutcome::MaxedOut {
                                final_relative: final_rel,
                            }
                        }
                    };
                    Ok(SweepRow { alpha, outcome })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep thread"))
            .collect::<Result<Vec<_>, _>>()
    })?;

    let largest_converging = rows
        .iter()
        .filter(|r| matches!(r.outcome, SweepOutcome::Converged { .. }))
        .map(|r| r.alpha)
        .fold(None, |acc: Option<f64>, a| {
            Some(acc.map_or(a, |b| b.max(a)))
        });
    let smallest_diverging = rows
        .iter()
        .filter(|r| matches!(r.outcome, SweepOutcome::Diverged { .. }))
        .map(|r| r.alpha)
        .fold(None, |acc: Option<f64>, a| {
            Some(acc.map_or(a, |b| b.min(a)))
        });
    let critical_estimate = match (largest_converging, smallest_diverging) {
        (Some(c), Some(d)) if d > c => Some(0.5 * (c + d)),
        (Some(_), Some(d)) => Some(d),
        _ => None,
    };
    Ok(SweepTable {
        rows,
        critical_estimate,
    })
}

/// Golden-section tuning of the baseline's constant step size, minimizing
/// iterations to the relative tolerance. Returns the tuned step size, its
/// iteration count, and the probe log.
pub fn optimize_subgradient_step(
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    z0: &DMatrix<f64>,
    reference: &DMatrix<f64>,
    stop_tol: f64,
    max_iter: usize,
    bounds: (f64, f64),
) -> (f64, usize, Vec<(f64, usize)>) {
    let cost = |alpha: f64| -> usize {
        let cfg = RunConfig {
            reference: Some(reference.clone()),
            stop_tol: Some(stop_tol),
            record_every: max_iter.max(1),
            ..RunConfig::new(Algorithm::SubgradientPush, alpha, max_iter, z0.clone())
        };
        match run(inst, mix, &cfg) {
            Ok(out) => match out.termination {
                Termination::Converged { round } => round,
                Termination::MaxIter => max_iter * 2,
                Termination::Diverged { .. } => max_iter * 4,
            },
            Err(_) => max_iter * 4,
        }
    };
    let mut log = Vec::new();
    let (lo, hi) = (bounds.0.ln(), bounds.1.ln());
    // Coarse log-grid, then golden-section refinement around the best point.
    let coarse = 9;
    let mut best = (bounds.0, usize::MAX);
    for k in 0..coarse {
        let alpha = (lo + (hi - lo) * k as f64 / (coarse - 1) as f64).exp();
        let c = cost(alpha);
        log.push((alpha, c));
        if c < best.1 {
            best = (alpha, c);
        }
    }
    let span = (hi - lo) / (coarse - 1) as f64;
    let (mut a, mut b) = (best.0.ln() - span, best.0.ln() + span);
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    for _ in 0..10 {
        let c = b - (b - a) * INV_PHI;
        let d = a + (b - a) * INV_PHI;
        let (fc, fd) = (cost(c.exp()), cost(d.exp()));
        log.push((c.exp(), fc));
        log.push((d.exp(), fd));
        if fc < best.1 {
            best = (c.exp(), fc);
        }
        if fd < best.1 {
            best = (d.exp(), fd);
        }
        if fc < fd {
            b = d;
        } else {
            a = c;
        }
    }
    (best.0, best.1, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn desk_config(dir: &Path) -> String {
        format!(
            "experiment = l1_ls\nn = 5\np = 8\nm_i = 12\nlambda = 0.2\nalphas = 0.012, 0.005\nalgorithms = pg_extrapush\nseed = 7\nmax_iter = 300\nreference_horizon = 300\nrecord_every = 5\noutput_dir = {}\n",
            dir.display()
        )
    }

    #[test]
    fn parses_a_full_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&desk_config(dir.path())).unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::L1Ls);
        assert_eq!(cfg.alphas, vec![0.012, 0.005]);
        assert_eq!(cfg.algorithms, vec![Algorithm::PgExtraPush]);
        assert_eq!(cfg.record_every, 5);
        assert_eq!(cfg.tolerance, 1e-6);
        assert_eq!(cfg.z0, Z0Mode::Zeros);
    }

    #[test]
    fn rejects_unknown_and_missing_keys_with_field_paths() {
        let err = parse_config("experiment = l1_ls\nbogus = 1\n").unwrap_err();
        match err {
            ConfigError::UnknownKey { key } => assert_eq!(key, "bogus"),
            other => panic!("wrong error {other:?}"),
        }
        let err = parse_config(
            "experiment = l1_ls\nn = 5\np = 8\nseed = 1\nalphas = 0.1\nalgorithms = pg_extrapush\n",
        )
        .unwrap_err();
        match err {
            ConfigError::MissingKey { key } => assert_eq!(key, "m_i"),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_values() {
        let bad = "experiment = l1_ls\nn = 5\np = 8\nm_i = 12\nlambda = 0.2\nseed = 1\nalphas = -0.1\nalgorithms = pg_extrapush\n";
        assert!(matches!(
            parse_config(bad),
            Err(ConfigError::Invalid { .. })
        ));
        let bad_algo =
            "experiment = qp\nn = 5\np = 8\nseed = 1\nalphas = 0.1\nalgorithms = nonsense\n";
        assert!(matches!(
            parse_config(bad_algo),
            Err(ConfigError::Invalid { .. })
        ));
    }

    #[test]
    fn defaults_follow_the_family() {
        let gm = parse_config(
            "experiment = geometric_median\nn = 4\np = 3\nseed = 2\nalphas = 5\nalgorithms = p_extrapush\n",
        )
        .unwrap();
        assert_eq!(gm.reference_horizon, 1000);
        assert_eq!(gm.z0, Z0Mode::Anchors);
        let l1 = parse_config(
            "experiment = l1_ls\nn = 4\np = 3\nm_i = 5\nlambda = 0.1\nseed = 2\nalphas = 0.1\nalgorithms = pg_extrapush\n",
        )
        .unwrap();
        assert_eq!(l1.reference_horizon, 10_000);
        assert_eq!(l1.z0, Z0Mode::Zeros);
    }

    #[test]
    fn desk_scale_experiment_produces_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&desk_config(dir.path())).unwrap();
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.panels.len(), 1);
        assert_eq!(report.panels[0].cells.len(), 2);
        for name in [
            "graph.adj",
            "mixing.csv",
            "manifest.txt",
            "plot.gp",
            "summary.txt",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        for cell in &report.panels[0].cells {
            assert!(dir.path().join(&cell.trace_file).exists());
            assert!(matches!(cell.termination, Termination::MaxIter));
        }
        // Convex family reports the oracle alongside the horizon reference.
        assert!(report.panels[0].oracle_gap.is_some());
    }

    #[test]
    fn lq_experiment_spans_one_panel_per_exponent() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(&format!(
            "experiment = lq_ls\nn = 4\np = 4\nm_i = 6\nlambda = 0.1\nq = 0, 0.5\n\
             alphas = 0.02\nalgorithms = pg_extrapush\nseed = 7\nmax_iter = 200\n\
             reference_horizon = 200\nrecord_every = 5\noutput_dir = {}\n",
            dir.path().display()
        ))
        .unwrap();
        let report = run_experiment(&cfg).unwrap();
        assert_eq!(report.panels.len(), 2);
        assert_eq!(report.panels[0].label, "q0");
        assert_eq!(report.panels[1].label, "q0.5");
        for panel in &report.panels {
            // Nonconvex families have no centralized oracle to compare with.
            assert!(panel.oracle_gap.is_none());
            for cell in &panel.cells {
                assert!(dir.path().join(&cell.trace_file).exists());
            }
        }
        let script = fs::read_to_string(dir.path().join("plot.gp")).unwrap();
        assert!(script.contains("set multiplot layout 1,2"));
    }

    #[test]
    fn identical_configs_produce_identical_traces_and_manifest_hash() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let cfg_a = parse_config(&desk_config(dir_a.path())).unwrap();
        let cfg_b = parse_config(&desk_config(dir_b.path())).unwrap();
        let ra = run_experiment(&cfg_a).unwrap();
        let rb = run_experiment(&cfg_b).unwrap();
        assert_eq!(ra.graph_hash, rb.graph_hash);
        let ta = fs::read_to_string(dir_a.path().join(&ra.panels[0].cells[0].trace_file)).unwrap();
        let tb = fs::read_to_string(dir_b.path().join(&rb.panels[0].cells[0].trace_file)).unwrap();
        assert_eq!(ta, tb, "same seed must produce byte-identical traces");
    }

    #[test]
    fn sweep_handles_all_diverging_grids() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(&desk_config(dir.path())).unwrap();
        cfg.max_iter = 200;
        cfg.reference_horizon = 200;
        let table = sweep_alpha(&cfg, &[50.0, 80.0, 120.0]).unwrap();
        assert_eq!(table.rows.len(), 3);
        for row in &table.rows {
            assert!(
                matches!(row.outcome, SweepOutcome::Diverged { .. }),
                "{row:?}"
            );
        }
        assert!(table.critical_estimate.is_none() || table.critical_estimate.unwrap() <= 50.0);
        let text = table.render();
        assert!(text.contains("DIVERGED"));
    }

    #[test]
    fn sweep_brackets_a_critical_step_size() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = parse_config(&desk_config(dir.path())).unwrap();
        cfg.max_iter = 2000;
        cfg.reference_horizon = 2000;
        cfg.tolerance = 1e-4;
        let table = sweep_alpha(&cfg, &[0.01, 0.05, 5.0]).unwrap();
        let conv = table
            .rows
            .iter()
            .any(|r| matches!(r.outcome, SweepOutcome::Converged { .. }));
        let div = table
            .rows
            .iter()
            .any(|r| matches!(r.outcome, SweepOutcome::Diverged { .. }));
        assert!(conv && div, "{:?}", table.rows);
        assert!(table.critical_estimate.is_some());
    }

    #[test]
    fn plot_script_shapes() {
        let empty = ExperimentReport {
            panels: vec![],
            output_dir: PathBuf::from("."),
            config_hash: 0,
            graph_hash: 0,
            divergence_count: 0,
        };
        let script = emit_plots(&empty);
        assert!(script.starts_with('#'));
        assert!(script.contains("nothing to plot"));

        let cell = |label: &str| CellSummary {
            algorithm: Algorithm::PgExtraPush,
            alpha: 0.01,
            termination: Termination::MaxIter,
            final_dist: None,
            iters_to_tol: None,
            rate: None,
            trace_file: format!("trace_{label}.csv"),
        };
        let single = ExperimentReport {
            panels: vec![PanelReport {
                label: String::new(),
                q: None,
                cells: vec![cell("one")],
                oracle_gap: None,
                reference_alpha: None,
                pd_check_passed: true,
                resample_count: 0,
            }],
            output_dir: PathBuf::from("."),
            config_hash: 0,
            graph_hash: 0,
            divergence_count: 0,
        };
        let script = emit_plots(&single);
        assert!(script.contains("plot 'trace_one.csv'"));
        assert!(!script.contains("multiplot"));

        let three = ExperimentReport {
            panels: (0..3)
                .map(|k| PanelReport {
                    label: format!("q{k}"),
                    q: Some(k as f64),
                    cells: vec![cell(&format!("q{k}"))],
                    oracle_gap: None,
                    reference_alpha: None,
                    pd_check_passed: true,
                    resample_count: 0,
                })
                .collect(),
            output_dir: PathBuf::from("."),
            config_hash: 0,
            graph_hash: 0,
            divergence_count: 0,
        };
        let script = emit_plots(&three);
        assert!(script.contains("set multiplot layout 1,3"));
        assert!(script.contains("unset multiplot"));
    }

    #[test]
    fn config_hash_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        let a = parse_config(&desk_config(dir.path())).unwrap();
        let mut b = a.clone();
        b.seed = 8;
        assert_ne!(
            fnv1a64(canonical_config(&a).as_bytes()),
            fnv1a64(canonical_config(&b).as_bytes())
        );
    }
}
