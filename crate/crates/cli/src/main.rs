//! `diropt`: experiment runner for decentralized composite consensus
//! optimization over directed networks.
//!
//! ```text
//! diropt run <config>                 reproduce an experiment config
//! diropt sweep <config> --grid a,b,c  step-size sweep with critical estimate
//! diropt verify                       run the built-in verification suites
//! diropt gen-graph --n N --seed S     emit a random strongly connected digraph
//! ```
//!
//! Exit codes: 0 success, 1 verification failure, 2 config error,
//! 3 divergence-only failures. `DIROPT_OUTPUT_DIR` overrides the config's
//! output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use diropt::experiment::{
    parse_config, run_experiment, sweep_alpha, ExperimentConfig, ExperimentError,
};
use diropt::graph::{build_mixing_matrix, verify_mixing_rate, DirectedNetwork};
use diropt::solvers::Termination;

mod verify;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match args.first().map(String::as_str) {
        Some("run") => cmd_run(&args[1..]),
        Some("sweep") => cmd_sweep(&args[1..]),
        Some("verify") => verify::cmd_verify(),
        Some("gen-graph") => cmd_gen_graph(&args[1..]),
        Some("--help" | "-h" | "help") | None => {
            print_usage();
            ExitCode::SUCCESS
        }
        Some(other) => {
            eprintln!("unknown command {other:?}\n");
            print_usage();
            ExitCode::from(2)
        }
    }
}

fn print_usage() {
    println!(
        "diropt {} — decentralized composite optimization over directed networks

USAGE:
  diropt run <config>                  run every (algorithm, step size) cell of a config
  diropt sweep <config> --grid a,b,c   sweep step sizes, estimate the critical value
  diropt verify                        run the mixing / reduction / prox verification suites
  diropt gen-graph --n N --seed S [--rho R] [--adjacency FILE] [--matrix FILE]

Environment:
  DIROPT_OUTPUT_DIR                    overrides the config's output_dir

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 divergence-only failures",
        env!("CARGO_PKG_VERSION")
    );
}

fn load_config(path: &str) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {path}: {e}"))?;
    let mut cfg = parse_config(&text).map_err(|e| e.to_string())?;
    if let Ok(dir) = std::env::var("DIROPT_OUTPUT_DIR") {
        cfg.output_dir = PathBuf::from(dir);
    }
    Ok(cfg)
}

fn cmd_run(args: &[String]) -> ExitCode {
    let Some(path) = args.first() else {
        eprintln!("usage: diropt run <config>");
        return ExitCode::from(2);
    };
    let cfg = match load_config(path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match run_experiment(&cfg) {
        Ok(report) => {
            for panel in &report.panels {
                let tag = if panel.label.is_empty() {
                    String::new()
                } else {
                    format!(" [{}]", panel.label)
                };
                if !panel.pd_check_passed {
                    println!(
                        "warning{tag}: mixing matrix fails the positive-definiteness check \
                         (sufficient condition only; the run proceeds)"
                    );
                }
                if panel.resample_count > 0 {
                    println!(
                        "note{tag}: constraint feasibility forced {} resample(s)",
                        panel.resample_count
                    );
                }
                if let Some(gap) = panel.oracle_gap {
                    println!("reference{tag}: horizon iterate vs centralized oracle gap {gap:.3e}");
                }
                for cell in &panel.cells {
                    let status = match cell.termination {
                        Termination::MaxIter => "completed".to_string(),
                        Termination::Converged { round } => format!("converged at round {round}"),
                        Termination::Diverged { round } => format!("DIVERGED at round {round}"),
                    };
                    let rate = cell
                        .rate
                        .as_ref()
                        .map(|f| format!(", rho_hat {:.4} (onset {})", f.rho_hat, f.onset_t))
                        .unwrap_or_default();
                    println!(
                        "{}{tag} alpha={}: {status}{rate} -> {}",
                        cell.algorithm.name(),
                        cell.alpha,
                        cell.trace_file
                    );
                }
            }
            println!(
                "wrote traces, manifest.txt, summary.txt, plot.gp to {}",
                report.output_dir.display()
            );
            if report.divergence_count > 0 {
                println!("{} cell(s) diverged", report.divergence_count);
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(ExperimentError::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_sweep(args: &[String]) -> ExitCode {
    let Some(path) = args.first() else {
        eprintln!("usage: diropt sweep <config> --grid a,b,c");
        return ExitCode::from(2);
    };
    let mut grid: Vec<f64> = Vec::new();
    let mut it = args[1..].iter();
    while let Some(arg) = it.next() {
        if arg == "--grid" {
            let Some(values) = it.next() else {
                eprintln!("--grid needs a comma-separated list");
                return ExitCode::from(2);
            };
            for tok in values.split(',') {
                match tok.trim().parse::<f64>() {
                    Ok(v) if v > 0.0 => grid.push(v),
                    _ => {
                        eprintln!("bad grid entry {tok:?}");
                        return ExitCode::from(2);
                    }
                }
            }
        } else {
            eprintln!("unknown flag {arg:?}");
            return ExitCode::from(2);
        }
    }
    if grid.is_empty() {
        eprintln!("usage: diropt sweep <config> --grid a,b,c");
        return ExitCode::from(2);
    }
    let cfg = match load_config(path) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    match sweep_alpha(&cfg, &grid) {
        Ok(table) => {
            print!("{}", table.render());
            match table.critical_estimate {
                Some(c) => println!("critical step-size estimate: {c}"),
                None => println!("no critical bracket inside the grid"),
            }
            let _ = std::fs::create_dir_all(&cfg.output_dir);
            let path = cfg.output_dir.join("sweep.csv");
            if std::fs::write(&path, table.render()).is_ok() {
                println!("wrote {}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(ExperimentError::Config(e)) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_gen_graph(args: &[String]) -> ExitCode {
    let mut n: Option<usize> = None;
    let mut seed: Option<u64> = None;
    let mut rho = 0.5f64;
    let mut adjacency_out: Option<PathBuf> = None;
    let mut matrix_out: Option<PathBuf> = None;
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let mut take = |name: &str| -> Option<String> {
            match it.next() {
                Some(v) => Some(v.clone()),
                None => {
                    eprintln!("{name} needs a value");
                    None
                }
            }
        };
        match arg.as_str() {
            "--n" => match take("--n").and_then(|v| v.parse().ok()) {
                Some(v) => n = Some(v),
                None => return ExitCode::from(2),
            },
            "--seed" => match take("--seed").and_then(|v| v.parse().ok()) {
                Some(v) => seed = Some(v),
                None => return ExitCode::from(2),
            },
            "--rho" => match take("--rho").and_then(|v| v.parse().ok()) {
                Some(v) => rho = v,
                None => return ExitCode::from(2),
            },
            "--adjacency" => match take("--adjacency") {
                Some(v) => adjacency_out = Some(PathBuf::from(v)),
                None => return ExitCode::from(2),
            },
            "--matrix" => match take("--matrix") {
                Some(v) => matrix_out = Some(PathBuf::from(v)),
                None => return ExitCode::from(2),
            },
            other => {
                eprintln!("unknown flag {other:?}");
                return ExitCode::from(2);
            }
        }
    }
    let (Some(n), Some(seed)) = (n, seed) else {
        eprintln!(
            "usage: diropt gen-graph --n N --seed S [--rho R] [--adjacency FILE] [--matrix FILE]"
        );
        return ExitCode::from(2);
    };
    if n == 0 || !(0.0..=1.0).contains(&rho) {
        eprintln!("need n >= 1 and rho in [0, 1]");
        return ExitCode::from(2);
    }
    let net = DirectedNetwork::random_strongly_connected(n, rho, seed);
    let mix = build_mixing_matrix(&net).expect("generated graphs are strongly connected");
    let adjacency = net.to_adjacency_text();
    print!("{adjacency}");
    let bound = verify_mixing_rate(&mix.a, &mix.phi, 100);
    println!("# stationary distribution: {:?}", mix.phi.as_slice());
    println!("# push-sum bound margin over t<=100: {bound:.3e}");
    if let Some(path) = adjacency_out {
        if let Err(e) = std::fs::write(&path, &adjacency) {
            eprintln!("cannot write {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
        println!("# wrote adjacency to {}", path.display());
    }
    if let Some(path) = matrix_out {
        if let Err(e) = std::fs::write(&path, mix.matrix_csv()) {
            eprintln!("cannot write {}: {e}", path.display());
            return ExitCode::FAILURE;
        }
        println!("# wrote mixing matrix csv to {}", path.display());
    }
    ExitCode::SUCCESS
}
