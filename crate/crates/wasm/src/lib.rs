//! Browser bindings for the consensus-optimization simulator. Three
//! interactive operations back the demo page in `www/`:
//!
//! - [`run_convergence`]: one solver run on a seeded desk-scale instance,
//!   returning the per-round distance trace and the fitted rate.
//! - [`sweep_step_sizes`]: a log-spaced step-size sweep with the estimated
//!   critical value.
//! - [`network_info`]: the random digraph, its mixing matrix, and the
//!   stationary distribution, for the graph view.
//!
//! All results are JSON strings; every input is deterministic in the seed.

use diropt::analysis::rate_fit;
use diropt::graph::{
    build_mixing_matrix, check_positive_definiteness, DirectedNetwork, MixingMatrix,
};
use diropt::problems::{
    make_geometric_median, make_l1_least_squares, make_lq_least_squares, make_qp, ProblemInstance,
    Reference,
};
use diropt::solvers::{run, Algorithm, RunConfig, Termination};
use nalgebra::{DMatrix, DVector};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn consensual(n: usize, x: &DVector<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, x.len());
    for i in 0..n {
        m.set_row(i, &x.transpose());
    }
    m
}

fn build_instance(
    family: &str,
    n: usize,
    p: usize,
    seed: u64,
    horizon: usize,
) -> Result<ProblemInstance, String> {
    // Desk-scale data sizes derived from the dimensions.
    let m_i = (5 * p / 4).max(2);
    match family {
        "geometric_median" => Ok(make_geometric_median(n, p, seed)),
        "l1_ls" => Ok(make_l1_least_squares(n, p, m_i, 0.2, seed)),
        "qp" => make_qp(n, p, seed).map_err(|e| e.to_string()),
        "lq0" => Ok(make_lq_least_squares(n, p, m_i, 0.1, 0.0, seed, horizon)),
        "lq_half" => Ok(make_lq_least_squares(n, p, m_i, 0.1, 0.5, seed, horizon)),
        "lq_two_thirds" => Ok(make_lq_least_squares(
            n,
            p,
            m_i,
            0.1,
            2.0 / 3.0,
            seed,
            horizon,
        )),
        other => Err(format!("unknown family {other:?}")),
    }
}

fn default_algorithm(family: &str) -> Algorithm {
    if family == "geometric_median" {
        Algorithm::PExtraPush
    } else {
        Algorithm::PgExtraPush
    }
}

fn resolve_reference(
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    algorithm: Algorithm,
    alpha: f64,
    z0: &DMatrix<f64>,
    horizon: usize,
) -> Option<DMatrix<f64>> {
    match &inst.reference {
        Reference::Point { x, .. } => Some(consensual(inst.n, x)),
        Reference::IterateLimit { .. } => {
            let cfg = RunConfig {
                record_every: horizon.max(1),
                ..RunConfig::new(algorithm, alpha, horizon, z0.clone())
            };
            match run(inst, mix, &cfg) {
                Ok(out) if matches!(out.termination, Termination::MaxIter) => {
                    Some(out.final_state.x)
                }
                _ => None,
            }
        }
    }
}

fn z0_for(inst: &ProblemInstance) -> DMatrix<f64> {
    inst.anchor_matrix()
        .unwrap_or_else(|| DMatrix::zeros(inst.n, inst.p))
}

fn termination_json(t: &Termination) -> serde_json::Value {
    match t {
        Termination::MaxIter => json!({"kind": "completed"}),
        Termination::Converged { round } => json!({"kind": "converged", "round": round}),
        Termination::Diverged { round } => json!({"kind": "diverged", "round": round}),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_convergence_impl(
    family: &str,
    n: usize,
    p: usize,
    seed: u64,
    alpha: f64,
    algorithm: &str,
    max_iter: usize,
) -> Result<String, String> {
    if n == 0 || p == 0 || !alpha.is_finite() || alpha <= 0.0 || max_iter == 0 || max_iter > 200_000
    {
        return Err("need n, p >= 1, alpha > 0, 1 <= max_iter <= 200000".into());
    }
    let algorithm = if algorithm == "default" {
        default_algorithm(family)
    } else {
        Algorithm::parse(algorithm).ok_or_else(|| format!("unknown algorithm {algorithm:?}"))?
    };
    let inst = build_instance(family, n, p, seed, max_iter)?;
    let net = DirectedNetwork::random_strongly_connected(n, 0.5, seed);
    let mix = build_mixing_matrix(&net).map_err(|e| e.to_string())?;
    let z0 = z0_for(&inst);
    let reference = resolve_reference(&inst, &mix, algorithm, alpha, &z0, max_iter);
    let record_every = (max_iter / 2000).max(1);
    let cfg = RunConfig {
        reference,
        record_every,
        ..RunConfig::new(algorithm, alpha, max_iter, z0)
    };
    let out = run(&inst, &mix, &cfg).map_err(|e| e.to_string())?;
    let d0 = out.records.first().and_then(|r| r.dist_to_ref);
    let fit_records: Vec<_> = out
        .records
        .iter()
        .filter(|r| {
            r.t <= max_iter * 9 / 10
                && match (r.dist_to_ref, d0) {
                    (Some(d), Some(d0)) => d >= 1e-9 * d0,
                    _ => true,
                }
        })
        .cloned()
        .collect();
    let fit = rate_fit(&fit_records).ok();
    let body = json!({
        "family": family,
        "algorithm": algorithm.name(),
        "alpha": alpha,
        "termination": termination_json(&out.termination),
        "t": out.records.iter().map(|r| r.t).collect::<Vec<_>>(),
        "dist": out.records.iter().map(|r| r.dist_to_ref).collect::<Vec<_>>(),
        "consensus": out.records.iter().map(|r| r.consensus_error).collect::<Vec<_>>(),
        "objective": out.records.iter().map(|r| r.objective).collect::<Vec<_>>(),
        "rho_hat": fit.map(|f| f.rho_hat),
        "onset_t": fit.map(|f| f.onset_t),
        "r_squared": fit.map(|f| f.r_squared),
    });
    Ok(body.to_string())
}

#[allow(clippy::too_many_arguments)]
fn sweep_step_sizes_impl(
    family: &str,
    n: usize,
    p: usize,
    seed: u64,
    alpha_lo: f64,
    alpha_hi: f64,
    count: usize,
    max_iter: usize,
) -> Result<String, String> {
    if !alpha_lo.is_finite()
        || alpha_lo <= 0.0
        || alpha_hi <= alpha_lo
        || !(2..=16).contains(&count)
        || max_iter == 0
    {
        return Err("need 0 < alpha_lo < alpha_hi, 2 <= count <= 16, max_iter >= 1".into());
    }
    let algorithm = default_algorithm(family);
    let inst = build_instance(family, n, p, seed, max_iter)?;
    let net = DirectedNetwork::random_strongly_connected(n, 0.5, seed);
    let mix = build_mixing_matrix(&net).map_err(|e| e.to_string())?;
    let z0 = z0_for(&inst);
    let grid: Vec<f64> = (0..count)
        .map(|k| {
            (alpha_lo.ln() + (alpha_hi.ln() - alpha_lo.ln()) * k as f64 / (count - 1) as f64).exp()
        })
        .collect();
    // Largest non-diverging grid point gives the best horizon reference.
    let mut reference = None;
    for &alpha in grid.iter().rev() {
        if let Some(r) = resolve_reference(&inst, &mix, algorithm, alpha, &z0, max_iter) {
            reference = Some(r);
            break;
        }
    }
    let d0 = reference
        .as_ref()
        .map(|r| (&z0_probe(&inst, &mix, algorithm, &z0, grid[0]) - r).norm());
    let mut rows = Vec::new();
    let mut largest_conv = f64::NEG_INFINITY;
    let mut smallest_div = f64::INFINITY;
    for &alpha in &grid {
        let cfg = RunConfig {
            reference: reference.clone(),
            stop_tol: d0.map(|d| 1e-6 * d),
            record_every: max_iter.max(1),
            ..RunConfig::new(algorithm, alpha, max_iter, z0.clone())
        };
        let out = run(&inst, &mix, &cfg).map_err(|e| e.to_string())?;
        let (outcome, detail) = match out.termination {
            Termination::Converged { round } => {
                largest_conv = largest_conv.max(alpha);
                ("converged", round as f64)
            }
            Termination::MaxIter => {
                let rel = match (out.records.first(), out.records.last()) {
                    (Some(f), Some(l)) => match (f.dist_to_ref, l.dist_to_ref) {
                        (Some(a), Some(b)) if a > 0.0 => b / a,
                        _ => f64::NAN,
                    },
                    _ => f64::NAN,
                };
                ("maxed_out", rel)
            }
            Termination::Diverged { round } => {
                smallest_div = smallest_div.min(alpha);
                ("diverged", round as f64)
            }
        };
        rows.push(json!({"alpha": alpha, "outcome": outcome, "detail": detail}));
    }
    let critical =
        if largest_conv.is_finite() && smallest_div.is_finite() && smallest_div > largest_conv {
            Some(0.5 * (largest_conv + smallest_div))
        } else {
            None
        };
    Ok(json!({
        "family": family,
        "algorithm": algorithm.name(),
        "rows": rows,
        "critical_estimate": critical,
    })
    .to_string())
}

fn z0_probe(
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    algorithm: Algorithm,
    z0: &DMatrix<f64>,
    alpha: f64,
) -> DMatrix<f64> {
    let cfg = RunConfig::new(algorithm, alpha, 0, z0.clone());
    match run(inst, mix, &cfg) {
        Ok(out) => out.final_state.x,
        Err(_) => z0.clone(),
    }
}

fn network_info_impl(n: usize, seed: u64, rho: f64) -> Result<String, String> {
    if n == 0 || n > 40 || !(0.0..=1.0).contains(&rho) {
        return Err("need 1 <= n <= 40 and rho in [0, 1]".into());
    }
    let net = DirectedNetwork::random_strongly_connected(n, rho, seed);
    let mix = build_mixing_matrix(&net).map_err(|e| e.to_string())?;
    let arcs: Vec<[usize; 2]> = net.arcs().map(|(i, j)| [i, j]).collect();
    let matrix: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| mix.a[(i, j)]).collect())
        .collect();
    Ok(json!({
        "n": n,
        "arcs": arcs,
        "mixing": matrix,
        "phi": mix.phi.as_slice(),
        "gamma": mix.gamma_bound,
        "pd_check_passed": check_positive_definiteness(&mix),
    })
    .to_string())
}

/// Runs one solver configuration and returns the trace as JSON.
#[wasm_bindgen]
pub fn run_convergence(
    family: &str,
    n: usize,
    p: usize,
    seed: u64,
    alpha: f64,
    algorithm: &str,
    max_iter: usize,
) -> Result<String, JsError> {
    run_convergence_impl(family, n, p, seed, alpha, algorithm, max_iter)
        .map_err(|e| JsError::new(&e))
}

/// Sweeps a log-spaced step-size grid and returns the outcome table as JSON.
#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn sweep_step_sizes(
    family: &str,
    n: usize,
    p: usize,
    seed: u64,
    alpha_lo: f64,
    alpha_hi: f64,
    count: usize,
    max_iter: usize,
) -> Result<String, JsError> {
    sweep_step_sizes_impl(family, n, p, seed, alpha_lo, alpha_hi, count, max_iter)
        .map_err(|e| JsError::new(&e))
}

/// Returns the seeded random digraph, its mixing matrix, and the stationary
/// distribution as JSON.
#[wasm_bindgen]
pub fn network_info(n: usize, seed: u64, rho: f64) -> Result<String, JsError> {
    network_info_impl(n, seed, rho).map_err(|e| JsError::new(&e))
}
