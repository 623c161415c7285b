//! Synchronous-round simulation of the push-sum proximal-gradient family.
//!
//! The full method keeps three interlaced sequences: the mixed iterate
//! `z^t`, its pre-prox buffer `z^{t-1/2}`, and the push-sum weights
//! `w^t = A^t 1`, with the de-biased iterate recovered row-wise as
//! `x^t = z^t / w^t`. One round applies
//!
//! ```text
//! z^{t+1/2} = A z^t + z^{t-1/2} - Abar z^{t-1} - alpha (grad s(x^t) - grad s(x^{t-1}))
//! w^{t+1}   = A w^t
//! z^{t+1}   = Prox_{alpha r^{t+1}} (z^{t+1/2})      (per-agent, weight-scaled)
//! x^{t+1}   = diag(w^{t+1})^{-1} z^{t+1}
//! ```
//!
//! Dropping the prox gives the smooth-only variant; dropping the gradient
//! gives the prox-only variant; freezing `w = 1` gives the undirected
//! method. A mix-after-subgradient baseline is included for comparisons.
//! Each agent's gradient is evaluated exactly once per round and cached.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::analysis;
use crate::graph::{check_positive_definiteness, MixingMatrix};
use crate::problems::ProblemInstance;
use crate::prox::{prox_scaled, ProxError};

/// Iterates with any entry beyond this magnitude flag divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite iterate at round {round}")]
    NonFiniteIterate { round: usize },
    #[error(transparent)]
    Prox(#[from] ProxError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    PgExtraPush,
    ExtraPush,
    PExtraPush,
    PgExtra,
    SubgradientPush,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::PgExtraPush => "pg_extrapush",
            Algorithm::ExtraPush => "extrapush",
            Algorithm::PExtraPush => "p_extrapush",
            Algorithm::PgExtra => "pg_extra",
            Algorithm::SubgradientPush => "subgradient_push",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pg_extrapush" => Some(Algorithm::PgExtraPush),
            "extrapush" => Some(Algorithm::ExtraPush),
            "p_extrapush" => Some(Algorithm::PExtraPush),
            "pg_extra" => Some(Algorithm::PgExtra),
            "subgradient_push" => Some(Algorithm::SubgradientPush),
            _ => None,
        }
    }

    fn uses_gradient(self) -> bool {
        !matches!(self, Algorithm::PExtraPush)
    }
}

/// Step-size schedule for the subgradient baseline; the proximal methods
/// always use the fixed `alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSchedule {
    Constant,
    /// `alpha_t = alpha / sqrt(t + 1)`.
    InvSqrt,
}

impl StepSchedule {
    pub fn at(self, alpha: f64, t: usize) -> f64 {
        match self {
            StepSchedule::Constant => alpha,
            StepSchedule::InvSqrt => alpha / ((t + 1) as f64).sqrt(),
        }
    }
}

/// Inner product context for recording `||v^t - v*||_G^2` along a run.
#[derive(Debug, Clone)]
pub struct LyapunovProbe {
    /// `2n x 2n` block metric.
    pub g: DMatrix<f64>,
    /// `2n x p` stacked reference `(z*; u*)`.
    pub v_star: DMatrix<f64>,
}

impl LyapunovProbe {
    pub fn value(&self, z: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
        let n = z.nrows();
        let p = z.ncols();
        let mut v = DMatrix::zeros(2 * n, p);
        v.view_mut((0, 0), (n, p)).copy_from(z);
        v.view_mut((n, 0), (n, p)).copy_from(u);
        let diff = v - &self.v_star;
        (&self.g * &diff).dot(&diff)
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub alpha: f64,
    pub alpha_schedule: StepSchedule,
    pub max_iter: usize,
    pub record_every: usize,
    pub z0: DMatrix<f64>,
    /// Full `n x p` reference against which `dist_to_ref` is measured.
    pub reference: Option<DMatrix<f64>>,
    /// Stop once `dist_to_ref` falls below this absolute threshold.
    pub stop_tol: Option<f64>,
    pub lyapunov: Option<LyapunovProbe>,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, alpha: f64, max_iter: usize, z0: DMatrix<f64>) -> Self {
        Self {
            algorithm,
            alpha,
            alpha_schedule: StepSchedule::Constant,
            max_iter,
            record_every: 1,
            z0,
            reference: None,
            stop_tol: None,
            lyapunov: None,
        }
    }
}

/// One simulated network state: round index, iterate matrices, weights, and
/// the cached gradients plus running accumulators.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub algorithm: Algorithm,
    pub t: usize,
    /// `z^t`.
    pub z: DMatrix<f64>,
    /// `z^{t-1/2}`: the buffer whose prox produced `z^t`.
    pub z_half: DMatrix<f64>,
    /// `z^{t-1}`.
    pub z_prev: DMatrix<f64>,
    /// `z^{t-3/2}`.
    pub z_half_prev: DMatrix<f64>,
    /// Push-sum weights `w^t = A^t 1` (all ones for the undirected variant).
    pub w: DVector<f64>,
    /// `x^t = diag(w^t)^{-1} z^t`.
    pub x: DMatrix<f64>,
    /// `grad s(x^t)`, evaluated once when `x^t` was formed.
    pub grad: DMatrix<f64>,
    /// `grad s(x^{t-1})`.
    pub grad_prev: DMatrix<f64>,
    /// `sum_{k<=t} (Abar - A) z^k`.
    pub y: DMatrix<f64>,
    /// `sum_{k<=t} z^k`.
    pub u: DMatrix<f64>,
    /// Outcome of the mixing-matrix positive-definiteness check at init.
    /// The condition is sufficient only, so failing it is a warning, not an
    /// abort.
    pub pd_check_passed: bool,
}

impl SolverState {
    /// The subgradient of `r` at `x^t` selected by the prox step,
    /// reconstructed from `z^{t-1/2} = z^t + alpha * subgrad`.
    pub fn selected_subgradient(&self, alpha: f64) -> DMatrix<f64> {
        (&self.z_half - &self.z) / alpha
    }

    /// Seeds the state at a first-order-optimal triple, including the
    /// stationary weights, so the iteration holds it as an exact fixed point.
    /// `subgrad` rows must be valid subgradients of `r_i` at `x*` whose rows
    /// sum (together with the gradients) to zero.
    pub fn at_optimal(
        inst: &ProblemInstance,
        mix: &MixingMatrix,
        alpha: f64,
        x_star: &DVector<f64>,
        subgrad: &DMatrix<f64>,
    ) -> Self {
        let n = inst.n;
        let p = inst.p;
        let mut x = DMatrix::zeros(n, p);
        let mut z = DMatrix::zeros(n, p);
        for i in 0..n {
            x.set_row(i, &x_star.transpose());
            z.set_row(i, &(x_star * (n as f64 * mix.phi[i])).transpose());
        }
        let grad = inst.smooth_gradient_matrix(&x);
        let y = (&grad + subgrad) * (-alpha);
        let z_half = &z + subgrad * alpha;
        let w = mix.phi.clone() * n as f64;
        SolverState {
            algorithm: Algorithm::PgExtraPush,
            t: 1,
            z: z.clone(),
            z_half: z_half.clone(),
            z_prev: z,
            z_half_prev: z_half,
            w,
            x,
            grad: grad.clone(),
            grad_prev: grad,
            y,
            u: DMatrix::zeros(n, p),
            pd_check_passed: check_positive_definiteness(mix),
        }
    }
}

fn check_dims(
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    cfg: &RunConfig,
) -> Result<(), SolverError> {
    if inst.n != mix.n() {
        return Err(SolverError::DimensionMismatch(format!(
            "instance has {} agents but mixing matrix is {}x{}",
            inst.n,
            mix.n(),
            mix.n()
        )));
    }
    if cfg.z0.nrows() != inst.n || cfg.z0.ncols() != inst.p {
        return Err(SolverError::DimensionMismatch(format!(
            "z0 is {}x{} but the instance needs {}x{}",
            cfg.z0.nrows(),
            cfg.z0.ncols(),
            inst.n,
            inst.p
        )));
    }
    Ok(())
}

fn finite(m: &DMatrix<f64>) -> bool {
    m.iter()
        .all(|v| v.is_finite() && v.abs() <= DIVERGENCE_LIMIT)
}

fn scaled_prox_rows(
    inst: &ProblemInstance,
    z_half: &DMatrix<f64>,
    alpha: f64,
    w: &DVector<f64>,
) -> Result<DMatrix<f64>, SolverError> {
    let mut z = DMatrix::zeros(z_half.nrows(), z_half.ncols());
    for i in 0..z_half.nrows() {
        let row = z_half.row(i).transpose();
        let proxed = prox_scaled(&inst.agents[i].prox, &row, alpha, w[i])?;
        z.set_row(i, &proxed.transpose());
    }
    Ok(z)
}

fn unscale_rows(z: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut x = z.clone();
    for i in 0..z.nrows() {
        let inv = 1.0 / w[i];
        x.row_mut(i).scale_mut(inv);
    }
    x
}

fn subgradient_rows(inst: &ProblemInstance, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(x.nrows(), x.ncols());
    for (i, agent) in inst.agents.iter().enumerate() {
        let xi = x.row(i).transpose();
        g.set_row(i, &agent.prox.subgradient(&xi).transpose());
    }
    g
}

/// Builds the state after the initialization round (`t = 1`) of the chosen
/// algorithm: `z^{1/2} = A z^0 - alpha grad s(z^0)` (gradient methods),
/// `w^1 = A 1`, `z^1` by the weight-scaled prox, `x^1 = diag(w^1)^{-1} z^1`.
pub fn init(
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    cfg: &RunConfig,
) -> Result<SolverState, SolverError> {
    check_dims(inst, mix, cfg)?;
    let n = inst.n;
    let p = inst.p;
    let z0 = cfg.z0.clone();
    let alpha0 = match cfg.algorithm {
        Algorithm::SubgradientPush => cfg.alpha_schedule.at(cfg.alpha, 0),
        _ => cfg.alpha,
    };
    let pd = check_positive_definiteness(mix);
    let ones = DVector::from_element(n, 1.0);

    // x^0 = z^0 because w^0 = 1.
    let grad0 = if cfg.algorithm.uses_gradient() {
        inst.smooth_gradient_matrix(&z0)
    } else {
        DMatrix::zeros(n, p)
    };

    let (z_half, w1, z1, x1) = match cfg.algorithm {
        Algorithm::PgExtraPush | Algorithm::PExtraPush | Algorithm::ExtraPush => {
            let mut z_half = &mix.a * &z0;
            if cfg.algorithm.uses_gradient() {
                z_half -= &grad0 * alpha0;
            }
            let w1 = &mix.a * &ones;
            let z1 = if matches!(cfg.algorithm, Algorithm::ExtraPush) {
                z_half.clone()
            } else {
                scaled_prox_rows(inst, &z_half, alpha0, &w1)?
            };
            let x1 = unscale_rows(&z1, &w1);
            (z_half, w1, z1, x1)
        }
        Algorithm::PgExtra => {
            let z_half = &mix.a * &z0 - &grad0 * alpha0;
            let z1 = scaled_prox_rows(inst, &z_half, alpha0, &ones)?;
            (z_half, ones.clone(), z1.clone(), z1)
        }
        Algorithm::SubgradientPush => {
            let g0 = &grad0 + subgradient_rows(inst, &z0);
            let z1 = &mix.a * (&z0 - &g0 * alpha0);
            let w1 = &mix.a * &ones;
            let x1 = unscale_rows(&z1, &w1);
            (z1.clone(), w1, z1, x1)
        }
    };
    if !finite(&z1) {
        return Err(SolverError::NonFiniteIterate { round: 1 });
    }

    let grad1 = if cfg.algorithm.uses_gradient() {
        inst.smooth_gradient_matrix(&x1)
    } else {
        DMatrix::zeros(n, p)
    };
    let shift = &mix.abar - &mix.a;
    Ok(SolverState {
        algorithm: cfg.algorithm,
        t: 1,
        y: &shift * (&z0 + &z1),
        u: &z0 + &z1,
        z: z1,
        z_half_prev: z0.clone(),
        z_prev: z0,
        z_half,
        w: w1,
        x: x1,
        grad: grad1,
        grad_prev: grad0,
        pd_check_passed: pd,
    })
}

/// The composite step: half-update, weight push, weight-scaled prox, de-bias.
pub fn pg_extrapush_step(
    state: &mut SolverState,
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    alpha: f64,
) -> Result<(), SolverError> {
    let z_next_half = &mix.a * &state.z + &state.z_half
        - &mix.abar * &state.z_prev
        - (&state.grad - &state.grad_prev) * alpha;
    let w_next = &mix.a * &state.w;
    let z_next = scaled_prox_rows(inst, &z_next_half, alpha, &w_next)?;
    if !finite(&z_next) {
        return Err(SolverError::NonFiniteIterate { round: state.t + 1 });
    }
    let x_next = unscale_rows(&z_next, &w_next);
    let grad_next = inst.smooth_gradient_matrix(&x_next);
    commit(state, mix, z_next_half, w_next, z_next, x_next, grad_next);
    Ok(())
}

/// Smooth-only step: the prox is dropped, so `z^{t+1} = z^{t+1/2}`.
pub fn extrapush_step(
    state: &mut SolverState,
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    alpha: f64,
) -> Result<(), SolverError> {
    let z_next = &mix.a * &state.z + &state.z
        - &mix.abar * &state.z_prev
        - (&state.grad - &state.grad_prev) * alpha;
    if !finite(&z_next) {
        return Err(SolverError::NonFiniteIterate { round: state.t + 1 });
    }
    let w_next = &mix.a * &state.w;
    let x_next = unscale_rows(&z_next, &w_next);
    let grad_next = inst.smooth_gradient_matrix(&x_next);
    commit(
        state,
        mix,
        z_next.clone(),
        w_next,
        z_next,
        x_next,
        grad_next,
    );
    Ok(())
}

/// Prox-only step: no gradient terms anywhere.
pub fn p_extrapush_step(
    state: &mut SolverState,
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    alpha: f64,
) -> Result<(), SolverError> {
    let z_next_half = &mix.a * &state.z + &state.z_half - &mix.abar * &state.z_prev;
    let w_next = &mix.a * &state.w;
    let z_next = scaled_prox_rows(inst, &z_next_half, alpha, &w_next)?;
    if !finite(&z_next) {
        return Err(SolverError::NonFiniteIterate { round: state.t + 1 });
    }
    let x_next = unscale_rows(&z_next, &w_next);
    let grad_next = DMatrix::zeros(inst.n, inst.p);
    commit(state, mix, z_next_half, w_next, z_next, x_next, grad_next);
    Ok(())
}

/// Undirected variant: weights stay at one and the prox is unscaled.
pub fn pg_extra_step(
    state: &mut SolverState,
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    alpha: f64,
) -> Result<(), SolverError> {
    let z_next_half = &mix.a * &state.z + &state.z_half
        - &mix.abar * &state.z_prev
        - (&state.grad - &state.grad_prev) * alpha;
    let w_next = state.w.clone();
    let z_next = scaled_prox_rows(inst, &z_next_half, alpha, &w_next)?;
    if !finite(&z_next) {
        return Err(SolverError::NonFiniteIterate { round: state.t + 1 });
    }
    let x_next = z_next.clone();
    let grad_next = inst.smooth_gradient_matrix(&x_next);
    commit(state, mix, z_next_half, w_next, z_next, x_next, grad_next);
    Ok(())
}

/// Baseline round: subgradient step at `x^t` applied to `z^t`, then mix.
pub fn subgradient_push_step(
    state: &mut SolverState,
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    alpha_t: f64,
) -> Result<(), SolverError> {
    let g = &state.grad + subgradient_rows(inst, &state.x);
    let z_next = &mix.a * (&state.z - &g * alpha_t);
    if !finite(&z_next) {
        return Err(SolverError::NonFiniteIterate { round: state.t + 1 });
    }
    let w_next = &mix.a * &state.w;
    let x_next = unscale_rows(&z_next, &w_next);
    let grad_next = inst.smooth_gradient_matrix(&x_next);
    commit(
        state,
        mix,
        z_next.clone(),
        w_next,
        z_next,
        x_next,
        grad_next,
    );
    Ok(())
}

fn commit(
    state: &mut SolverState,
    mix: &MixingMatrix,
    z_next_half: DMatrix<f64>,
    w_next: DVector<f64>,
    z_next: DMatrix<f64>,
    x_next: DMatrix<f64>,
    grad_next: DMatrix<f64>,
) {
    state.y += (&mix.abar - &mix.a) * &z_next;
    state.u += &z_next;
    state.z_half_prev = std::mem::replace(&mut state.z_half, z_next_half);
    state.z_prev = std::mem::replace(&mut state.z, z_next);
    state.grad_prev = std::mem::replace(&mut state.grad, grad_next);
    state.w = w_next;
    state.x = x_next;
    state.t += 1;
}

/// Advances one round of whichever algorithm the state runs.
pub fn advance(
    state: &mut SolverState,
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    cfg: &RunConfig,
) -> Result<(), SolverError> {
    match state.algorithm {
        Algorithm::PgExtraPush => pg_extrapush_step(state, inst, mix, cfg.alpha),
        Algorithm::ExtraPush => extrapush_step(state, inst, mix, cfg.alpha),
        Algorithm::PExtraPush => p_extrapush_step(state, inst, mix, cfg.alpha),
        Algorithm::PgExtra => pg_extra_step(state, inst, mix, cfg.alpha),
        Algorithm::SubgradientPush => {
            let alpha_t = cfg.alpha_schedule.at(cfg.alpha, state.t);
            subgradient_push_step(state, inst, mix, alpha_t)
        }
    }
}

/// Per-round metrics. `dist_to_ref` and `lyapunov` are present only when the
/// run was configured with a reference / a Lyapunov probe.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub t: usize,
    pub dist_to_ref: Option<f64>,
    pub consensus_error: f64,
    /// Largest component of the first-order optimality certificate.
    pub optimality_residual: f64,
    pub objective: f64,
    pub lyapunov: Option<f64>,
    /// Frobenius norm of `z^t`; not part of the CSV schema.
    pub z_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Termination {
    MaxIter,
    Converged { round: usize },
    Diverged { round: usize },
}

#[derive(Debug)]
pub struct RunOutcome {
    pub records: Vec<TraceRecord>,
    pub termination: Termination,
    pub final_state: SolverState,
}

fn record(
    state: &SolverState,
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    cfg: &RunConfig,
) -> TraceRecord {
    let n = inst.n as f64;
    let xbar = DVector::from_fn(inst.p, |j, _| state.x.column(j).sum() / n);
    let mut consensus = 0.0;
    for i in 0..inst.n {
        for j in 0..inst.p {
            let d = state.x[(i, j)] - xbar[j];
            consensus += d * d;
        }
    }
    let cert = analysis::optimality_residual(state, inst, mix, cfg.alpha);
    TraceRecord {
        t: state.t,
        dist_to_ref: cfg.reference.as_ref().map(|r| (&state.x - r).norm()),
        consensus_error: consensus.sqrt(),
        optimality_residual: cert.max_component(),
        objective: inst.objective(&xbar),
        lyapunov: cfg
            .lyapunov
            .as_ref()
            .map(|probe| probe.value(&state.z, &state.u)),
        z_norm: state.z.norm(),
    }
}

/// Runs to `max_iter` (or divergence, or the configured stopping tolerance),
/// recording every `record_every` rounds plus the first and last.
/// Deterministic given the instance and config.
pub fn run(
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    cfg: &RunConfig,
) -> Result<RunOutcome, SolverError> {
    assert!(cfg.alpha > 0.0, "step size must be positive");
    assert!(cfg.record_every >= 1, "record_every must be at least 1");
    let mut state = init(inst, mix, cfg)?;
    let mut records = vec![record(&state, inst, mix, cfg)];
    let mut termination = Termination::MaxIter;
    while state.t < cfg.max_iter {
        match advance(&mut state, inst, mix, cfg) {
            Ok(()) => {}
            Err(SolverError::NonFiniteIterate { round }) => {
                termination = Termination::Diverged { round };
                break;
            }
            Err(e) => return Err(e),
        }
        let due = state.t % cfg.record_every == 0 || state.t == cfg.max_iter;
        let reached = cfg.stop_tol.is_some_and(|tol| {
            cfg.reference
                .as_ref()
                .is_some_and(|r| (&state.x - r).norm() <= tol)
        });
        if due || reached {
            records.push(record(&state, inst, mix, cfg));
        }
        if reached {
            termination = Termination::Converged { round: state.t };
            break;
        }
    }
    Ok(RunOutcome {
        records,
        termination,
        final_state: state,
    })
}

/// Trace CSV with the pinned schema; optional fields render as empty cells.
/// 17 significant digits throughout.
pub fn trace_csv(records: &[TraceRecord]) -> String {
    let mut out =
        String::from("t,dist_to_ref,consensus_error,optimality_residual,objective,lyapunov\n");
    for r in records {
        let dist = r
            .dist_to_ref
            .map(|v| format!("{v:.16e}"))
            .unwrap_or_default();
        let lya = r.lyapunov.map(|v| format!("{v:.16e}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.16e},{:.16e},{:.16e},{}\n",
            r.t, dist, r.consensus_error, r.optimality_residual, r.objective, lya
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_mixing_matrix, DirectedNetwork};
    use crate::problems::{
        make_geometric_median, make_l1_least_squares, Agent, Family, ProblemInstance, Reference,
        SmoothTerm,
    };
    use crate::prox::ProxOp;

    /// Strongly convex scalar quadratics `s_i = c_i/2 (x - a_i)^2` with
    /// optional l1 term; small enough to hand-evaluate.
    fn quad_instance(n: usize, cs: &[f64], anchors: &[f64], lambda: f64) -> ProblemInstance {
        let agents: Vec<Agent> = (0..n)
            .map(|i| Agent {
                smooth: SmoothTerm::Quadratic {
                    q: DMatrix::from_element(1, 1, cs[i]),
                    h: DVector::from_element(1, -cs[i] * anchors[i]),
                },
                lipschitz: cs[i],
                prox: if lambda > 0.0 {
                    ProxOp::L1 { lambda }
                } else {
                    ProxOp::Zero
                },
            })
            .collect();
        let mu = cs.iter().sum::<f64>() / n as f64;
        ProblemInstance {
            family: Family::L1LeastSquares,
            n,
            p: 1,
            agents,
            reference: Reference::IterateLimit { horizon: 0 },
            seed: 0,
            mu_estimate: mu,
            lipschitz_max: cs.iter().cloned().fold(0.0, f64::max),
            resample_count: 0,
        }
    }

    #[test]
    fn init_without_prox_matches_closed_form() {
        let net = DirectedNetwork::five_node_example();
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = quad_instance(
            5,
            &[1.0, 2.0, 0.5, 1.5, 3.0],
            &[0.1, -0.4, 2.0, 1.0, -1.0],
            0.0,
        );
        let z0 = DMatrix::from_fn(5, 1, |i, _| i as f64 - 2.0);
        let alpha = 0.1;
        let cfg = RunConfig::new(Algorithm::ExtraPush, alpha, 10, z0.clone());
        let state = init(&inst, &mix, &cfg).unwrap();
        let expected = &mix.a * &z0 - inst.smooth_gradient_matrix(&z0) * alpha;
        assert!((&state.z - &expected).amax() < 1e-15);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn single_node_init_is_classic_proximal_gradient() {
        let net = DirectedNetwork::new(1, []).unwrap();
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = quad_instance(1, &[2.0], &[1.0], 0.3);
        let z0 = DMatrix::from_element(1, 1, 4.0);
        let alpha = 0.25;
        let cfg = RunConfig::new(Algorithm::PgExtraPush, alpha, 10, z0.clone());
        let state = init(&inst, &mix, &cfg).unwrap();
        // z^{1/2} = z0 - alpha * grad s(z0); z1 = soft(z^{1/2}, alpha*lambda).
        let half = 4.0 - alpha * 2.0 * (4.0 - 1.0);
        let expected = half - alpha * 0.3;
        assert!((state.z[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn two_node_fixture_matches_hand_evaluation_for_three_rounds() {
        // Complete 2-node graph: A = [[.5,.5],[.5,.5]], Abar = [[.75,.25],[.25,.75]].
        let net = DirectedNetwork::complete(2);
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = quad_instance(2, &[1.0, 3.0], &[1.0, -1.0], 0.2);
        let alpha = 0.15;
        let z0 = DMatrix::from_fn(2, 1, |i, _| if i == 0 { 1.0 } else { -2.0 });
        let cfg = RunConfig::new(Algorithm::PgExtraPush, alpha, 3, z0.clone());

        // Scalar hand evaluation of the update lines.
        let soft = |v: f64, tau: f64| v.signum() * (v.abs() - tau).max(0.0);
        let grad = |x0: f64, x1: f64| (1.0 * (x0 - 1.0), 3.0 * (x1 + 1.0));
        let (mut z0a, mut z0b) = (z0[(0, 0)], z0[(1, 0)]);
        let (g0a, g0b) = grad(z0a, z0b);
        let (mut ha, mut hb) = (
            0.5 * z0a + 0.5 * z0b - alpha * g0a,
            0.5 * z0a + 0.5 * z0b - alpha * g0b,
        );
        // Doubly stochastic: w stays 1, prox is the plain soft threshold.
        let (mut za, mut zb) = (soft(ha, alpha * 0.2), soft(hb, alpha * 0.2));
        let (mut ga, mut gb) = grad(za, zb);
        let (mut gpa, mut gpb) = (g0a, g0b);

        let mut state = init(&inst, &mix, &cfg).unwrap();
        assert!((state.z[(0, 0)] - za).abs() < 1e-14);
        assert!((state.z[(1, 0)] - zb).abs() < 1e-14);

        for _ in 0..3 {
            let mixa = 0.5 * za + 0.5 * zb;
            let next_ha = mixa + ha - (0.75 * z0a + 0.25 * z0b) - alpha * (ga - gpa);
            let next_hb = mixa + hb - (0.25 * z0a + 0.75 * z0b) - alpha * (gb - gpb);
            let (next_za, next_zb) = (soft(next_ha, alpha * 0.2), soft(next_hb, alpha * 0.2));
            pg_extrapush_step(&mut state, &inst, &mix, alpha).unwrap();
            assert!(
                (state.z[(0, 0)] - next_za).abs() < 1e-13,
                "round {}",
                state.t
            );
            assert!(
                (state.z[(1, 0)] - next_zb).abs() < 1e-13,
                "round {}",
                state.t
            );
            (z0a, z0b) = (za, zb);
            (za, zb) = (next_za, next_zb);
            (ha, hb) = (next_ha, next_hb);
            (gpa, gpb) = (ga, gb);
            let g = grad(za, zb);
            (ga, gb) = (g.0, g.1);
        }
    }

    #[test]
    fn smooth_reduction_is_exact_over_100_rounds() {
        let net = DirectedNetwork::five_node_example();
        let mix = build_mixing_matrix(&net).unwrap();
        let mut inst = quad_instance(
            5,
            &[1.0, 2.0, 0.5, 1.5, 3.0],
            &[0.1, -0.4, 2.0, 1.0, -1.0],
            0.0,
        );
        for a in &mut inst.agents {
            a.prox = ProxOp::Zero;
        }
        let z0 = DMatrix::from_fn(5, 1, |i, _| (i as f64).sin());
        let alpha = 0.08;
        let cfg_a = RunConfig::new(Algorithm::PgExtraPush, alpha, 1, z0.clone());
        let cfg_b = RunConfig::new(Algorithm::ExtraPush, alpha, 1, z0);
        let mut sa = init(&inst, &mix, &cfg_a).unwrap();
        let mut sb = init(&inst, &mix, &cfg_b).unwrap();
        for _ in 0..100 {
            pg_extrapush_step(&mut sa, &inst, &mix, alpha).unwrap();
            extrapush_step(&mut sb, &inst, &mix, alpha).unwrap();
            assert!((&sa.z - &sb.z).amax() < 1e-12);
            assert!((&sa.x - &sb.x).amax() < 1e-12);
        }
    }

    #[test]
    fn prox_only_variant_finds_scalar_median() {
        // Three agents holding 1-D anchors -1, 0, 5; the consensus is their median 0.
        let net = DirectedNetwork::complete(3);
        let mix = build_mixing_matrix(&net).unwrap();
        let anchors = [-1.0, 0.0, 5.0];
        let agents: Vec<Agent> = anchors
            .iter()
            .map(|&b| Agent {
                smooth: SmoothTerm::Zero,
                lipschitz: 0.0,
                prox: ProxOp::DistanceTo {
                    anchor: DVector::from_element(1, b),
                },
            })
            .collect();
        let inst = ProblemInstance {
            family: Family::GeometricMedian,
            n: 3,
            p: 1,
            agents,
            reference: Reference::IterateLimit { horizon: 0 },
            seed: 0,
            mu_estimate: 0.0,
            lipschitz_max: 0.0,
            resample_count: 0,
        };
        let z0 = DMatrix::from_fn(3, 1, |i, _| anchors[i]);
        let cfg = RunConfig::new(Algorithm::PExtraPush, 0.6, 400, z0);
        let out = run(&inst, &mix, &cfg).unwrap();
        let x = &out.final_state.x;
        for i in 0..3 {
            assert!((x[(i, 0)] - 0.0).abs() < 1e-6, "agent {i} at {}", x[(i, 0)]);
        }
    }

    #[test]
    fn subgradient_push_on_single_node_is_subgradient_descent() {
        let net = DirectedNetwork::new(1, []).unwrap();
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = quad_instance(1, &[2.0], &[0.5], 0.0);
        let z0 = DMatrix::from_element(1, 1, 3.0);
        let alpha = 0.1;
        let cfg = RunConfig {
            alpha_schedule: StepSchedule::Constant,
            ..RunConfig::new(Algorithm::SubgradientPush, alpha, 5, z0)
        };
        let mut state = init(&inst, &mix, &cfg).unwrap();
        let mut x = 3.0 - alpha * 2.0 * (3.0 - 0.5);
        assert!((state.x[(0, 0)] - x).abs() < 1e-15);
        for _ in 0..4 {
            subgradient_push_step(&mut state, &inst, &mix, alpha).unwrap();
            x -= alpha * 2.0 * (x - 0.5);
            assert!((state.x[(0, 0)] - x).abs() < 1e-14);
        }
    }

    #[test]
    fn subgradient_push_distance_decreases_on_strongly_convex_fixture() {
        let net = DirectedNetwork::five_node_example();
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = quad_instance(
            5,
            &[1.0, 1.5, 2.0, 1.2, 0.8],
            &[0.3, 0.3, 0.3, 0.3, 0.3],
            0.0,
        );
        // All agents agree on the optimum 0.3, so the consensual target is known.
        let mut reference = DMatrix::zeros(5, 1);
        reference.fill(0.3);
        let cfg = RunConfig {
            reference: Some(reference),
            ..RunConfig::new(Algorithm::SubgradientPush, 0.05, 300, DMatrix::zeros(5, 1))
        };
        let out = run(&inst, &mix, &cfg).unwrap();
        let first = out.records.first().unwrap().dist_to_ref.unwrap();
        let last = out.records.last().unwrap().dist_to_ref.unwrap();
        assert!(last < first * 1e-2, "no decrease: {first} -> {last}");
    }

    #[test]
    fn push_sum_weights_conserve_mass() {
        let net = DirectedNetwork::five_node_example();
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = quad_instance(5, &[1.0; 5], &[0.0; 5], 0.1);
        let cfg = RunConfig::new(Algorithm::PgExtraPush, 0.1, 200, DMatrix::zeros(5, 1));
        let mut state = init(&inst, &mix, &cfg).unwrap();
        for _ in 0..200 {
            pg_extrapush_step(&mut state, &inst, &mix, 0.1).unwrap();
            assert!((state.w.sum() - 5.0).abs() < 1e-10);
            assert!(state.w.min() > 0.0);
        }
    }

    #[test]
    fn accumulator_recursion_holds_along_l1_run() {
        let net = DirectedNetwork::random_strongly_connected(3, 0.6, 5);
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = quad_instance(3, &[1.0, 2.0, 1.4], &[0.2, -0.6, 1.0], 0.3);
        let alpha = 0.12;
        let cfg = RunConfig::new(
            Algorithm::PgExtraPush,
            alpha,
            1,
            DMatrix::from_element(3, 1, 0.7),
        );
        let mut state = init(&inst, &mix, &cfg).unwrap();
        let shift = &mix.abar - &mix.a;
        for _ in 0..50 {
            let y_prev = state.y.clone();
            let z_prev_round = state.z.clone();
            let grad_prev_round = state.grad.clone();
            pg_extrapush_step(&mut state, &inst, &mix, alpha).unwrap();
            // y^{t+1} = y^t + (Abar - A) z^{t+1}
            let expected_y = &y_prev + &shift * &state.z;
            assert!((&expected_y - &state.y).amax() < 1e-12);
            // Abar z^{t+1} = Abar z^t - alpha sub_r(x^{t+1}) - alpha grad s(x^t) - y^{t+1}
            let alpha_subgrad = &state.z_half - &state.z;
            let lhs = &mix.abar * &state.z;
            let rhs =
                &mix.abar * &z_prev_round - &alpha_subgrad - &grad_prev_round * alpha - &state.y;
            assert!((lhs - rhs).amax() < 1e-9);
        }
    }

    #[test]
    fn prox_identity_selects_valid_l1_subgradients() {
        // The buffer gap (z_half - z)/alpha must be an actual subgradient of
        // the original regularizer at x: inside [-lambda, lambda] everywhere
        // and pinned to lambda*sign(x) on the support.
        let net = DirectedNetwork::five_node_example();
        let mix = build_mixing_matrix(&net).unwrap();
        let lambda = 0.3;
        let inst = quad_instance(
            5,
            &[1.0, 2.0, 1.4, 0.8, 1.1],
            &[0.2, -0.6, 1.0, 0.4, -0.2],
            lambda,
        );
        let alpha = 0.1;
        let cfg = RunConfig::new(
            Algorithm::PgExtraPush,
            alpha,
            1,
            DMatrix::from_element(5, 1, 0.9),
        );
        let mut state = init(&inst, &mix, &cfg).unwrap();
        for _ in 0..100 {
            pg_extrapush_step(&mut state, &inst, &mix, alpha).unwrap();
            let g = state.selected_subgradient(alpha);
            for i in 0..5 {
                assert!(g[(i, 0)].abs() <= lambda + 1e-10, "row {i}: {}", g[(i, 0)]);
                let x = state.x[(i, 0)];
                if x.abs() > 1e-9 {
                    assert!(
                        (g[(i, 0)] - lambda * x.signum()).abs() < 1e-10,
                        "row {i}: subgradient {} off the forced value at x={x}",
                        g[(i, 0)]
                    );
                }
            }
        }
    }

    #[test]
    fn divergence_is_flagged_with_partial_trace() {
        let net = DirectedNetwork::five_node_example();
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = quad_instance(5, &[4.0; 5], &[0.0; 5], 0.0);
        // Far beyond the stable step size.
        let cfg = RunConfig::new(
            Algorithm::ExtraPush,
            50.0,
            500,
            DMatrix::from_element(5, 1, 1.0),
        );
        let out = run(&inst, &mix, &cfg).unwrap();
        match out.termination {
            Termination::Diverged { round } => assert!(round > 1 && round <= 500),
            other => panic!("expected divergence, got {other:?}"),
        }
        assert!(!out.records.is_empty());
        for r in &out.records {
            assert!(r.z_norm.is_finite());
        }
    }

    #[test]
    fn zero_max_iter_yields_single_record() {
        let net = DirectedNetwork::complete(3);
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = quad_instance(3, &[1.0; 3], &[0.0; 3], 0.1);
        let cfg = RunConfig::new(Algorithm::PgExtraPush, 0.1, 0, DMatrix::zeros(3, 1));
        let out = run(&inst, &mix, &cfg).unwrap();
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.records[0].t, 1);
        assert_eq!(out.termination, Termination::MaxIter);
    }

    #[test]
    fn fixed_point_seeding_stays_put_for_50_rounds() {
        // Smooth strongly convex fixture; optimum solves sum c_i (x - a_i) = 0.
        let net = DirectedNetwork::five_node_example();
        let mix = build_mixing_matrix(&net).unwrap();
        let cs = [1.0, 2.0, 0.5, 1.5, 3.0];
        let anchors = [0.1, -0.4, 2.0, 1.0, -1.0];
        let mut inst = quad_instance(5, &cs, &anchors, 0.0);
        for a in &mut inst.agents {
            a.prox = ProxOp::Zero;
        }
        let xstar = cs
            .iter()
            .zip(anchors.iter())
            .map(|(c, a)| c * a)
            .sum::<f64>()
            / cs.iter().sum::<f64>();
        let x_star = DVector::from_element(1, xstar);
        let subgrad = DMatrix::zeros(5, 1);
        let mut state = SolverState::at_optimal(&inst, &mix, 0.2, &x_star, &subgrad);
        let z_star = state.z.clone();
        for _ in 0..50 {
            pg_extrapush_step(&mut state, &inst, &mix, 0.2).unwrap();
            assert!((&state.z - &z_star).amax() < 1e-10);
            assert!((state.x[(0, 0)] - xstar).abs() < 1e-10);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let net = DirectedNetwork::complete(3);
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = quad_instance(3, &[1.0; 3], &[0.0; 3], 0.0);
        let cfg = RunConfig::new(Algorithm::PgExtraPush, 0.1, 10, DMatrix::zeros(2, 1));
        assert!(matches!(
            init(&inst, &mix, &cfg),
            Err(SolverError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn lyapunov_probe_records_a_decaying_column() {
        let net = DirectedNetwork::five_node_example();
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = make_l1_least_squares(5, 3, 6, 0.2, 13);
        let alpha = 0.02;
        let x_star = inst.reference_point().unwrap().clone();
        let triple = crate::analysis::optimal_triple(&inst, &mix, alpha, &x_star).unwrap();
        let lya = crate::analysis::build_lyapunov(&mix, &triple).unwrap();
        let cfg = RunConfig {
            lyapunov: Some(lya.probe()),
            record_every: 10,
            ..RunConfig::new(Algorithm::PgExtraPush, alpha, 300, DMatrix::zeros(5, 3))
        };
        let out = run(&inst, &mix, &cfg).unwrap();
        let first = out.records.first().unwrap().lyapunov.unwrap();
        let last = out.records.last().unwrap().lyapunov.unwrap();
        assert!(first.is_finite() && last.is_finite());
        assert!(last < first * 1e-2, "no visible decay: {first} -> {last}");
        let csv = trace_csv(&out.records);
        let row = csv.lines().nth(1).unwrap();
        assert!(!row.ends_with(','), "lyapunov column must be populated");
    }

    #[test]
    fn trace_csv_has_pinned_header_and_digits() {
        let net = DirectedNetwork::complete(3);
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = make_l1_least_squares(3, 2, 4, 0.2, 9);
        let reference = {
            let x = inst.reference_point().unwrap();
            let mut m = DMatrix::zeros(3, 2);
            for i in 0..3 {
                m.set_row(i, &x.transpose());
            }
            m
        };
        let cfg = RunConfig {
            reference: Some(reference),
            record_every: 5,
            ..RunConfig::new(Algorithm::PgExtraPush, 0.05, 20, DMatrix::zeros(3, 2))
        };
        let out = run(&inst, &mix, &cfg).unwrap();
        let csv = trace_csv(&out.records);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,dist_to_ref,consensus_error,optimality_residual,objective,lyapunov"
        );
        let first = lines.next().unwrap();
        assert!(first.starts_with("1,"));
        // 17 significant digits = 16 digits after the point in e-notation.
        let dist_field = first.split(',').nth(1).unwrap();
        let mantissa = dist_field.split('e').next().unwrap();
        assert_eq!(mantissa.split('.').nth(1).unwrap().len(), 16);
        // Empty lyapunov column when no probe was configured.
        assert!(first.ends_with(','));
    }

    #[test]
    fn runs_are_deterministic() {
        let net = DirectedNetwork::random_strongly_connected(4, 0.5, 3);
        let mix = build_mixing_matrix(&net).unwrap();
        let inst = make_geometric_median(4, 3, 8);
        let z0 = inst.anchor_matrix().unwrap();
        let cfg = RunConfig::new(Algorithm::PExtraPush, 2.0, 100, z0);
        let a = run(&inst, &mix, &cfg).unwrap();
        let b = run(&inst, &mix, &cfg).unwrap();
        assert_eq!(trace_csv(&a.records), trace_csv(&b.records));
    }
}
