//! Verification mathematics: first-order optimality certificates, the
//! quadratic Lyapunov recursion in the `(z, u)` variables, the sufficient
//! step-size interval with its constants, and empirical rate fitting.
//!
//! A consensual point is first-order optimal exactly when there are
//! `z*` in `null(I - A)` and `y*` in `null(1^T)` with
//! `y* + alpha (grad s(x*) + sub r(x*)) = 0` and `x* = Dinf^{-1} z*`.
//! The residuals of those three conditions, evaluated along a run with the
//! prox-selected subgradient, form the certificate. The Lyapunov machinery
//! rewrites the iteration as `G^T (v^{t+1} - v^t) = -S v^{t+1} - alpha e^t`
//! over stacked `v = (z; u)` with `u` the running sum of the iterates, and
//! the contraction inequality
//! `||v^t - v*||_G^2 >= (1 + delta) ||v^{t+1} - v*||_G^2 - Gamma0 gamma^t`
//! is monitored empirically round by round.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::{mixing_diagnostics, MixingDiagnostics, MixingMatrix, DIAGNOSTIC_HORIZON};
use crate::problems::ProblemInstance;
use crate::prox::ProxOp;
use crate::solvers::{Algorithm, LyapunovProbe, SolverState, TraceRecord};

/// Relative cutoff under which eigenvalues count as zero when extracting the
/// smallest nonzero eigenvalue.
pub const EIGENVALUE_ZERO_CUTOFF: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("least-squares solve for u* left residual {residual:e}")]
    SingularSystem { residual: f64 },
    #[error("rate fit needs at least {needed} usable records, found {got}")]
    TraceTooShort { needed: usize, got: usize },
    #[error("point fails first-order optimality: residual {residual:e}")]
    NotOptimal { residual: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// Residuals of the three first-order optimality conditions.
#[derive(Debug, Clone, Copy)]
pub struct OptimalityCertificate {
    /// `||(I - phi 1^T) z||_F`: distance of `z` from the stationary ray.
    pub consensus_residual: f64,
    /// `||1^T (grad s(x) + sub r(x))||`: aggregated stationarity.
    pub stationarity_residual: f64,
    /// `||1^T y||`: conservation of the dual accumulator.
    pub y_feasibility: f64,
}

impl OptimalityCertificate {
    pub fn max_component(&self) -> f64 {
        self.consensus_residual
            .max(self.stationarity_residual)
            .max(self.y_feasibility)
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(m.ncols(), |j, _| m.column(j).sum())
}

/// Certificate at the current state. The subgradient of `r` is the one the
/// prox actually selected, reconstructed from the half-iterate buffer; the
/// mix-only baseline has no prox, so its explicit selector is used instead.
pub fn optimality_residual(
    state: &SolverState,
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    alpha: f64,
) -> OptimalityCertificate {
    let subgrad = match state.algorithm {
        Algorithm::SubgradientPush => {
            let mut g = DMatrix::zeros(inst.n, inst.p);
            for (i, agent) in inst.agents.iter().enumerate() {
                let xi = state.x.row(i).transpose();
                g.set_row(i, &agent.prox.subgradient(&xi).transpose());
            }
            g
        }
        _ => state.selected_subgradient(alpha),
    };
    let z_mass = column_sums(&state.z);
    let projected = &state.z - &mix.phi * z_mass.transpose();
    OptimalityCertificate {
        consensus_residual: projected.norm(),
        stationarity_residual: column_sums(&(&state.grad + &subgrad)).norm(),
        y_feasibility: column_sums(&state.y).norm(),
    }
}

/// A constructed first-order-optimal triple `(z*, y*, x*)` together with the
/// gradient and the chosen subgradient rows that witness stationarity.
#[derive(Debug, Clone)]
pub struct OptimalTriple {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub grad: DMatrix<f64>,
    pub subgrad: DMatrix<f64>,
    pub alpha: f64,
}

/// Builds the optimal triple at a consensual optimum `x*`: rows of `z*` are
/// `n phi_i x*`, `y* = -alpha (grad s(x*) + sub r(x*))`, and the per-agent
/// subgradients are selected so their aggregate cancels the gradients
/// exactly (forced on smooth coordinates, distributed on kinks, nonnegative
/// multipliers on active halfspaces).
pub fn optimal_triple(
    inst: &ProblemInstance,
    mix: &MixingMatrix,
    alpha: f64,
    x_star: &DVector<f64>,
) -> Result<OptimalTriple, AnalysisError> {
    let n = inst.n;
    let p = inst.p;
    let mut x = DMatrix::zeros(n, p);
    let mut z = DMatrix::zeros(n, p);
    for i in 0..n {
        x.set_row(i, &x_star.transpose());
        z.set_row(i, &(x_star * (n as f64 * mix.phi[i])).transpose());
    }
    let grad = inst.smooth_gradient_matrix(&x);
    let deficit = -column_sums(&grad);
    let subgrad = split_subgradients(inst, x_star, &deficit)?;
    let y = (&grad + &subgrad) * (-alpha);
    Ok(OptimalTriple {
        x,
        z,
        y,
        grad,
        subgrad,
        alpha,
    })
}

fn split_subgradients(
    inst: &ProblemInstance,
    x_star: &DVector<f64>,
    deficit: &DVector<f64>,
) -> Result<DMatrix<f64>, AnalysisError> {
    let n = inst.n;
    let p = inst.p;
    let mut g = DMatrix::zeros(n, p);
    let scale = deficit.amax().max(1.0);

    if inst.agents.iter().all(|a| matches!(a.prox, ProxOp::Zero)) {
        if deficit.amax() > 1e-7 * scale {
            return Err(AnalysisError::NotOptimal {
                residual: deficit.amax(),
            });
        }
        return Ok(g);
    }
    if inst
        .agents
        .iter()
        .all(|a| matches!(a.prox, ProxOp::L1 { .. }))
    {
        let lambdas: Vec<f64> = inst
            .agents
            .iter()
            .map(|a| match a.prox {
                ProxOp::L1 { lambda } => lambda,
                _ => unreachable!(),
            })
            .collect();
        let total: f64 = lambdas.iter().sum();
        for j in 0..p {
            if x_star[j] != 0.0 {
                let forced: f64 = total * x_star[j].signum();
                if (deficit[j] - forced).abs() > 1e-6 * scale.max(total) {
                    return Err(AnalysisError::NotOptimal {
                        residual: (deficit[j] - forced).abs(),
                    });
                }
                // Distribute the forced signs, then absorb the tiny numerical
                // slack in the first agent so the columns cancel exactly.
                for (i, lam) in lambdas.iter().enumerate() {
                    g[(i, j)] = lam * x_star[j].signum();
                }
                g[(0, j)] += deficit[j] - forced;
            } else {
                if deficit[j].abs() > total + 1e-8 {
                    return Err(AnalysisError::NotOptimal {
                        residual: deficit[j].abs() - total,
                    });
                }
                for (i, lam) in lambdas.iter().enumerate() {
                    g[(i, j)] = deficit[j] * lam / total;
                }
            }
        }
        return Ok(g);
    }
    if inst
        .agents
        .iter()
        .all(|a| matches!(a.prox, ProxOp::DistanceTo { .. }))
    {
        let mut at_anchor: Option<usize> = None;
        for (i, agent) in inst.agents.iter().enumerate() {
            if let ProxOp::DistanceTo { anchor } = &agent.prox {
                let d = x_star - anchor;
                let norm = d.norm();
                if norm < 1e-12 {
                    at_anchor = Some(i);
                } else {
                    g.set_row(i, &(d / norm).transpose());
                }
            }
        }
        let leftover = deficit - column_sums(&g);
        match at_anchor {
            Some(k) => {
                if leftover.norm() > 1.0 + 1e-8 {
                    return Err(AnalysisError::NotOptimal {
                        residual: leftover.norm() - 1.0,
                    });
                }
                g.set_row(k, &leftover.transpose());
            }
            None => {
                if leftover.norm() > 1e-6 {
                    return Err(AnalysisError::NotOptimal {
                        residual: leftover.norm(),
                    });
                }
                // Absorb roundoff in the first row; unit balls have slack.
                let adjusted = g.row(0).transpose() + leftover;
                g.set_row(0, &adjusted.transpose());
            }
        }
        return Ok(g);
    }
    if inst
        .agents
        .iter()
        .all(|a| matches!(a.prox, ProxOp::Halfspace { .. }))
    {
        let mut active: Vec<(usize, DVector<f64>)> = Vec::new();
        for (i, agent) in inst.agents.iter().enumerate() {
            if let ProxOp::Halfspace { normal, offset } = &agent.prox {
                let slack = offset - normal.dot(x_star);
                if slack < 1e-6 * normal.norm().max(1.0) {
                    active.push((i, normal.clone()));
                }
            }
        }
        let cols: Vec<DVector<f64>> = active.iter().map(|(_, a)| a.clone()).collect();
        let nu = nonnegative_least_squares(&cols, deficit);
        let mut achieved = DVector::zeros(p);
        for ((i, a), v) in active.iter().zip(nu.iter()) {
            g.set_row(*i, &(a * *v).transpose());
            achieved += a * *v;
        }
        let residual = (deficit - achieved).norm();
        if residual > 1e-6 * scale {
            return Err(AnalysisError::NotOptimal { residual });
        }
        return Ok(g);
    }
    Err(AnalysisError::Unsupported(
        "subgradient splitting covers smooth, l1, distance, and halfspace terms".into(),
    ))
}

/// Lawson–Hanson active-set solve of `min ||sum nu_k a_k - target||` with
/// `nu >= 0`. Sizes here are tiny (one column per agent).
fn nonnegative_least_squares(cols: &[DVector<f64>], target: &DVector<f64>) -> DVector<f64> {
    let m = cols.len();
    if m == 0 {
        return DVector::zeros(0);
    }
    let p = target.len();
    let mut a = DMatrix::zeros(p, m);
    for (k, c) in cols.iter().enumerate() {
        a.set_column(k, c);
    }
    let mut nu = DVector::zeros(m);
    let mut passive = vec![false; m];
    for _ in 0..(8 * m.max(4)) {
        let resid = target - &a * &nu;
        let w = a.transpose() * &resid;
        let candidate = (0..m)
            .filter(|&k| !passive[k])
            .max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap());
        match candidate {
            Some(k) if w[k] > 1e-12 => passive[k] = true,
            _ => break,
        }
        loop {
            let idx: Vec<usize> = (0..m).filter(|&k| passive[k]).collect();
            let sub = a.select_columns(idx.iter());
            let sol = sub
                .clone()
                .svd(true, true)
                .solve(target, 1e-12)
                .unwrap_or_else(|_| DVector::zeros(idx.len()));
            if sol.iter().all(|v| *v > 0.0) {
                nu.fill(0.0);
                for (pos, &k) in idx.iter().enumerate() {
                    nu[k] = sol[pos];
                }
                break;
            }
            // Step back toward feasibility and drop the blocking column.
            let mut alpha = 1.0f64;
            let mut drop = idx[0];
            for (pos, &k) in idx.iter().enumerate() {
                if sol[pos] <= 0.0 {
                    let ratio = nu[k] / (nu[k] - sol[pos]);
                    if ratio < alpha {
                        alpha = ratio;
                        drop = k;
                    }
                }
            }
            for (pos, &k) in idx.iter().enumerate() {
                nu[k] += alpha * (sol[pos] - nu[k]);
            }
            nu[drop] = 0.0;
            passive[drop] = false;
            if !passive.iter().any(|&b| b) {
                break;
            }
        }
    }
    nu
}

/// The stacked-variable machinery: `N = Dinf^{-1} Abar`,
/// `M = Dinf^{-1}(Abar - A)`, the block metric `G`, the skew coupling `S`,
/// and the reference `v* = (z*; u*)` with `u*` the minimum-norm solution of
/// `(Abar - A) u* = y*`.
#[derive(Debug, Clone)]
pub struct LyapunovState {
    pub n_mat: DMatrix<f64>,
    pub m_mat: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub u_star: DMatrix<f64>,
    pub v_star: DMatrix<f64>,
    pub dinf_inv: DMatrix<f64>,
    pub triple: OptimalTriple,
}

impl LyapunovState {
    pub fn probe(&self) -> LyapunovProbe {
        LyapunovProbe {
            g: self.g.clone(),
            v_star: self.v_star.clone(),
        }
    }

    /// `||v - v*||_G^2` for a stacked `(z; u)` pair.
    pub fn distance_sq(&self, z: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
        self.probe().value(z, u)
    }

    /// Frobenius residual of the stacked one-round identity
    /// `G^T (v^{t+1} - v^t) + S v^{t+1} + alpha e^t = 0` with
    /// `e^t = (Dinf^{-1}(sub r(x^{t+1}) + grad s(x^t)); 0)`.
    #[allow(clippy::too_many_arguments)]
    pub fn step_residual(
        &self,
        z_t: &DMatrix<f64>,
        u_t: &DMatrix<f64>,
        z_next: &DMatrix<f64>,
        u_next: &DMatrix<f64>,
        subgrad_next: &DMatrix<f64>,
        grad_t: &DMatrix<f64>,
        alpha: f64,
    ) -> f64 {
        let n = z_t.nrows();
        let p = z_t.ncols();
        let stack = |z: &DMatrix<f64>, u: &DMatrix<f64>| {
            let mut v = DMatrix::zeros(2 * n, p);
            v.view_mut((0, 0), (n, p)).copy_from(z);
            v.view_mut((n, 0), (n, p)).copy_from(u);
            v
        };
        let v_t = stack(z_t, u_t);
        let v_next = stack(z_next, u_next);
        let mut e = DMatrix::zeros(2 * n, p);
        e.view_mut((0, 0), (n, p))
            .copy_from(&(&self.dinf_inv * (subgrad_next + grad_t)));
        let residual = self.g.transpose() * (&v_next - &v_t) + &self.s * v_next + e * alpha;
        residual.norm()
    }
}

/// `<x, G x>` for the (not necessarily symmetric) PSD metric.
pub fn g_norm_sq(g: &DMatrix<f64>, x: &DMatrix<f64>) -> f64 {
    (g * x).dot(x)
}

pub fn build_lyapunov(
    mix: &MixingMatrix,
    triple: &OptimalTriple,
) -> Result<LyapunovState, AnalysisError> {
    let n = mix.n();
    let dinf_inv = mix.dinf_inv();
    let n_mat = &dinf_inv * &mix.abar;
    let m_mat = &dinf_inv * (&mix.abar - &mix.a);

    let mut g = DMatrix::zeros(2 * n, 2 * n);
    g.view_mut((0, 0), (n, n)).copy_from(&n_mat.transpose());
    g.view_mut((n, n), (n, n)).copy_from(&m_mat);
    let mut s = DMatrix::zeros(2 * n, 2 * n);
    s.view_mut((0, n), (n, n)).copy_from(&m_mat);
    s.view_mut((n, 0), (n, n)).copy_from(&(-m_mat.transpose()));

    // PSD structure guaranteed by construction; violations are bugs.
    let m_sym_min = crate::graph::smallest_symmetric_eigenvalue(&(&m_mat + m_mat.transpose()));
    assert!(
        m_sym_min > -1e-10,
        "M + M^T must be PSD, found eigenvalue {m_sym_min}"
    );
    let g_sym_min = crate::graph::smallest_symmetric_eigenvalue(&(&g + g.transpose()));
    assert!(
        g_sym_min > -1e-10,
        "G + G^T must be PSD, found eigenvalue {g_sym_min}"
    );

    // z* sits in the null space of M and M^T.
    let mz = (&m_mat * &triple.z).amax();
    let mtz = (m_mat.transpose() * &triple.z).amax();
    let z_scale = triple.z.amax().max(1.0);
    assert!(
        mz < 1e-9 * z_scale && mtz < 1e-9 * z_scale,
        "M z* = 0 violated: {mz}, {mtz}"
    );

    let shift = &mix.abar - &mix.a;
    let svd = shift.clone().svd(true, true);
    let u_star = svd
        .solve(&triple.y, 1e-12)
        .map_err(|_| AnalysisError::SingularSystem {
            residual: f64::INFINITY,
        })?;
    let residual = (&shift * &u_star - &triple.y).norm();
    if residual > 1e-8 {
        return Err(AnalysisError::SingularSystem { residual });
    }

    let p = triple.z.ncols();
    let mut v_star = DMatrix::zeros(2 * n, p);
    v_star.view_mut((0, 0), (n, p)).copy_from(&triple.z);
    v_star.view_mut((n, 0), (n, p)).copy_from(&u_star);

    Ok(LyapunovState {
        n_mat,
        m_mat,
        g,
        s,
        u_star,
        v_star,
        dinf_inv,
        triple: triple.clone(),
    })
}

/// Per-round values of
/// `(1 + delta) ||v^{t+1} - v*||_G^2 - Gamma0 gamma^t - ||v^t - v*||_G^2`;
/// non-positive entries confirm the contraction inequality. `t0` is the
/// round index of `v_traj[0]`.
pub fn lyapunov_monitor(
    v_traj: &[DMatrix<f64>],
    v_star: &DMatrix<f64>,
    g: &DMatrix<f64>,
    delta: f64,
    gamma0: f64,
    gamma: f64,
    t0: usize,
) -> Vec<f64> {
    let vals: Vec<f64> = v_traj.iter().map(|v| g_norm_sq(g, &(v - v_star))).collect();
    vals.windows(2)
        .enumerate()
        .map(|(k, w)| (1.0 + delta) * w[1] - gamma0 * gamma.powi((t0 + k) as i32) - w[0])
        .collect()
}

/// Smallest nonzero eigenvalue of a symmetric PSD matrix; entries below
/// `EIGENVALUE_ZERO_CUTOFF * lambda_max` count as zero.
pub fn lambda_tilde_min(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eigs = sym.symmetric_eigenvalues();
    let max = eigs.max();
    let cutoff = EIGENVALUE_ZERO_CUTOFF * max.max(f64::MIN_POSITIVE);
    eigs.iter()
        .copied()
        .filter(|&e| e > cutoff)
        .fold(f64::INFINITY, f64::min)
}

/// Spectral quantities entering every rate formula.
#[derive(Debug, Clone, Copy)]
pub struct SpectralConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// `lambda_min(N^T + N)` (unhalved).
    pub lam_min_n_sym: f64,
    /// `lambda_max((N + N^T)/2)`.
    pub lam_max_n_sym_half: f64,
    pub lam_max_ntn: f64,
    pub lam_max_nnt: f64,
    pub l_bar: f64,
    pub mu_bar: f64,
    pub l_s: f64,
    pub mu_s: f64,
    pub diagnostics: MixingDiagnostics,
}

pub fn spectral_constants(mix: &MixingMatrix, l_s: f64, mu_s: f64) -> SpectralConstants {
    let dinf_inv = mix.dinf_inv();
    let n_mat = &dinf_inv * &mix.abar;
    let m_mat = &dinf_inv * (&mix.abar - &mix.a);
    let mmt = &m_mat * m_mat.transpose();
    let mtm = m_mat.transpose() * &m_mat;
    let nnt = &n_mat * n_mat.transpose();
    let ntn = n_mat.transpose() * &n_mat;
    let m_sym_half = (&m_mat + m_mat.transpose()) * 0.5;
    let n_sym = n_mat.transpose() + &n_mat;

    let lam_max_mmt = crate::graph::largest_symmetric_eigenvalue(&mmt);
    let tilde_min_mtm = lambda_tilde_min(&mtm);
    let c1 = lam_max_mmt / tilde_min_mtm;
    let c2 = crate::graph::largest_symmetric_eigenvalue(&m_sym_half) / tilde_min_mtm;
    let lam_max_nnt = crate::graph::largest_symmetric_eigenvalue(&nnt);
    let lam_max_ntn = crate::graph::largest_symmetric_eigenvalue(&ntn);
    let c3 = lam_max_nnt + 3.0 * c1 * lam_max_ntn;

    let diagnostics = mixing_diagnostics(mix, DIAGNOSTIC_HORIZON);
    let l_bar = diagnostics.dinf_minus * diagnostics.d_minus * l_s;
    let mu_bar = mu_s / (2.0 * diagnostics.d_plus).powi(2);

    SpectralConstants {
        c1,
        c2,
        c3,
        lam_min_n_sym: crate::graph::smallest_symmetric_eigenvalue(&n_sym),
        lam_max_n_sym_half: crate::graph::largest_symmetric_eigenvalue(&n_sym) / 2.0,
        lam_max_ntn,
        lam_max_nnt,
        l_bar,
        mu_bar,
        l_s,
        mu_s,
        diagnostics,
    }
}

/// The admissible-step-size package when the sufficient condition holds.
#[derive(Debug, Clone, Copy)]
pub struct RateConstants {
    pub spectral: SpectralConstants,
    pub a: f64,
    pub eta_bar: f64,
    pub sigma: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub alpha_lo: f64,
    pub alpha_hi: f64,
    /// Contraction margin evaluated at the midpoint step size.
    pub delta: f64,
}

impl RateConstants {
    /// Largest admissible contraction margin at a given step size; negative
    /// values mean the step size is outside the guaranteed region.
    pub fn delta_for(&self, alpha: f64) -> f64 {
        delta_bound(&self.spectral, self.eta_bar, self.sigma, alpha)
    }

    pub fn alpha_mid(&self) -> f64 {
        0.5 * (self.alpha_lo + self.alpha_hi)
    }
}

fn delta_bound(sc: &SpectralConstants, eta_bar: f64, sigma: f64, alpha: f64) -> f64 {
    let first = (-1.0 / sigma + (sc.mu_bar - eta_bar / 2.0) * alpha
        - 1.5 * sc.c1 * sc.l_bar * sc.l_bar * sigma * alpha * alpha)
        / (sc.lam_max_n_sym_half + 3.0 * sc.c2 * alpha * alpha * sc.l_bar * sc.l_bar);
    let second = (sc.lam_min_n_sym / 2.0
        - sc.c3 * sigma / 2.0
        - sc.l_bar * sc.l_bar * alpha / (2.0 * eta_bar)
        - 1.5 * sc.c1 * sc.l_bar * sc.l_bar * sigma * alpha * alpha)
        / (3.0 * sc.c2 * (sc.lam_max_ntn + alpha * alpha * sc.l_bar * sc.l_bar));
    first.min(second)
}

/// Outcome of evaluating the sufficient linear-rate condition. The condition
/// is sufficient only; `Inapplicable` never stops an experiment.
#[derive(Debug, Clone)]
pub enum TheoryOutcome {
    Admissible(RateConstants),
    Inapplicable {
        /// The first condition in the chain that failed, with its two sides.
        condition: &'static str,
        lhs: f64,
        rhs: f64,
        spectral: SpectralConstants,
    },
}

impl TheoryOutcome {
    pub fn is_admissible(&self) -> bool {
        matches!(self, TheoryOutcome::Admissible(_))
    }

    pub fn spectral(&self) -> &SpectralConstants {
        match self {
            TheoryOutcome::Admissible(rc) => &rc.spectral,
            TheoryOutcome::Inapplicable { spectral, .. } => spectral,
        }
    }
}

/// Evaluates the full chain of tunable-parameter conditions with midpoint
/// selections: `a` from its interval, then the curvature condition, then
/// `eta`, `sigma`, and finally the step-size interval and the contraction
/// margin `delta` at the midpoint step size.
// Negated comparisons route NaN into the Inapplicable branch.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn theoretical_constants(mix: &MixingMatrix, inst: &ProblemInstance) -> TheoryOutcome {
    let sc = spectral_constants(mix, inst.lipschitz_max, inst.mu_estimate);
    if sc.mu_s <= 0.0 {
        return TheoryOutcome::Inapplicable {
            condition: "mu_s > 0 (quasi-strong convexity)",
            lhs: sc.mu_s,
            rhs: 0.0,
            spectral: sc,
        };
    }
    let c7 = sc.lam_min_n_sym * sc.lam_min_n_sym / (4.0 * sc.c3);
    let a_lo = (2.0 - c7) / (2.0 + c7);
    if a_lo >= 1.0 {
        return TheoryOutcome::Inapplicable {
            condition: "a-interval ((2-c7)/(2+c7), 1) nonempty",
            lhs: a_lo,
            rhs: 1.0,
            spectral: sc,
        };
    }
    let a = 0.5 * (a_lo.max(0.0) + 1.0);
    let c8 = a * (c7 + 2.0) - (2.0 - c7);
    let one_minus_a2 = 1.0 - a * a;
    let curvature_rhs = ((6.0 * sc.c1 / one_minus_a2).sqrt()
        + (one_minus_a2 / (6.0 * sc.c1)).sqrt() / c8)
        * sc.l_bar;
    if !(sc.mu_bar > curvature_rhs) {
        return TheoryOutcome::Inapplicable {
            condition: "mu_bar > (sqrt(6 c1/(1-a^2)) + (1/c8) sqrt((1-a^2)/(6 c1))) L_bar",
            lhs: sc.mu_bar,
            rhs: curvature_rhs,
            spectral: sc,
        };
    }
    let inner = 1.0 - 4.0 * sc.l_bar * sc.l_bar / (c8 * sc.mu_bar * sc.mu_bar);
    if inner < 0.0 {
        return TheoryOutcome::Inapplicable {
            condition: "c8 mu_bar^2 >= 4 L_bar^2 (eta interval real)",
            lhs: c8 * sc.mu_bar * sc.mu_bar,
            rhs: 4.0 * sc.l_bar * sc.l_bar,
            spectral: sc,
        };
    }
    let eta_lo = sc.mu_bar * (1.0 - inner.sqrt());
    let eta_hi = (sc.mu_bar * (1.0 + inner.sqrt()))
        .min(2.0 * (sc.mu_bar - (6.0 * sc.c1 / one_minus_a2).sqrt() * sc.l_bar));
    if eta_lo >= eta_hi {
        return TheoryOutcome::Inapplicable {
            condition: "eta interval nonempty",
            lhs: eta_lo,
            rhs: eta_hi,
            spectral: sc,
        };
    }
    let eta_bar = 0.5 * (eta_lo + eta_hi);
    let delta1 = (sc.mu_bar - eta_bar / 2.0).powi(2) - 6.0 * sc.c1 * sc.l_bar * sc.l_bar;
    if delta1 < 0.0 {
        return TheoryOutcome::Inapplicable {
            condition: "Delta1 >= 0",
            lhs: delta1,
            rhs: 0.0,
            spectral: sc,
        };
    }
    let c4 = (sc.mu_bar - eta_bar / 2.0) + delta1.sqrt();
    let c5 = sc.l_bar * sc.l_bar / eta_bar;
    let c6 = (2.0 * c4 * c5 + 12.0 * sc.c1 * sc.l_bar * sc.l_bar) / (c4 * c4);
    let delta3 = sc.lam_min_n_sym * sc.lam_min_n_sym - 4.0 * sc.c3 * c6;
    if delta3 < 0.0 {
        return TheoryOutcome::Inapplicable {
            condition: "Delta3 >= 0 (sigma interval real)",
            lhs: delta3,
            rhs: 0.0,
            spectral: sc,
        };
    }
    let sigma = sc.lam_min_n_sym / (2.0 * sc.c3); // midpoint of the symmetric interval
    let delta2 = sc.l_bar.powi(4) / (4.0 * eta_bar * eta_bar)
        - 3.0 * sc.c1 * sc.l_bar * sc.l_bar * sigma * (sc.c3 * sigma - sc.lam_min_n_sym);
    let denom = 3.0 * sc.c1 * sc.l_bar * sc.l_bar * sigma;
    let alpha_lo = (sc.mu_bar - eta_bar / 2.0 - delta1.sqrt()) / denom;
    let alpha_hi = ((sc.mu_bar - eta_bar / 2.0 + delta1.sqrt()) / denom)
        .min((-sc.l_bar * sc.l_bar / (2.0 * eta_bar) + delta2.sqrt()) / denom);
    if !(alpha_lo < alpha_hi) {
        return TheoryOutcome::Inapplicable {
            condition: "step-size interval nonempty",
            lhs: alpha_lo,
            rhs: alpha_hi,
            spectral: sc,
        };
    }
    let rc = RateConstants {
        spectral: sc,
        a,
        eta_bar,
        sigma,
        delta1,
        delta2,
        delta3,
        alpha_lo,
        alpha_hi,
        delta: 0.0,
    };
    let delta = rc.delta_for(rc.alpha_mid());
    TheoryOutcome::Admissible(RateConstants { delta, ..rc })
}

/// The step-size upper bound implied by the second branch of the interval,
/// for arbitrary valid tunables; always below
/// `sqrt((lam_min(N^T+N) - c3 sigma)/(3 c1 sigma)) / L_bar`.
pub fn alpha_upper_bound(sc: &SpectralConstants, eta_bar: f64, sigma: f64) -> f64 {
    let delta2 = sc.l_bar.powi(4) / (4.0 * eta_bar * eta_bar)
        - 3.0 * sc.c1 * sc.l_bar * sc.l_bar * sigma * (sc.c3 * sigma - sc.lam_min_n_sym);
    (-sc.l_bar * sc.l_bar / (2.0 * eta_bar) + delta2.sqrt())
        / (3.0 * sc.c1 * sc.l_bar * sc.l_bar * sigma)
}

/// Growth constant of one round: `C1 = 3 + 2 alpha (d_minus L_s + 1)`.
pub fn growth_constant(alpha: f64, d_minus: f64, l_s: f64) -> f64 {
    3.0 + 2.0 * alpha * (d_minus * l_s + 1.0)
}

/// Trajectory-dependent constants of the contraction inequality.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryConstants {
    /// Iterate bound implied by the Lyapunov level set.
    pub b_bound: f64,
    pub c2_const: f64,
    pub c3_const: f64,
    pub gamma0: f64,
    /// Round after which the geometric tail is dominated.
    pub t_star: usize,
    /// Prefactor of the final linear rate.
    pub gamma_big: f64,
}

/// Computes `B`, `C2`, `C3`, `Gamma0 = alpha (C2 + C3)`, `T*`, and the rate
/// prefactor for a trajectory with Lyapunov level `cal_b`, reference norms as
/// given, and a chosen rate `rho` in `(max(1/(1+delta), gamma), 1)`.
#[allow(clippy::too_many_arguments)]
pub fn trajectory_constants(
    sc: &SpectralConstants,
    mix: &MixingMatrix,
    alpha: f64,
    delta: f64,
    cal_b: f64,
    z_star_norm: f64,
    x_star_norm: f64,
    b_r: f64,
    v0_dist_sq: f64,
    rho: f64,
) -> TrajectoryConstants {
    let n = mix.n() as f64;
    let c = mix.c_bound;
    let gamma = mix.gamma_bound;
    let lam = sc.lam_min_n_sym / 2.0;
    let b_bound = ((cal_b / lam).sqrt() + z_star_norm).max(b_r);
    let c1 = growth_constant(alpha, sc.diagnostics.d_minus, sc.l_s);
    let c2_const = sc.mu_s * (n * c * gamma * x_star_norm / sc.diagnostics.d_plus).powi(2);
    let c3_const = sc.diagnostics.dinf_minus
        * sc.diagnostics.d_minus
        * n
        * c
        * b_bound
        * (sc.diagnostics.d_minus * sc.l_s * (1.0 + gamma) * (c1 * b_bound + z_star_norm)
            + 2.0 * c1 * b_bound * gamma);
    let gamma0 = alpha * (c2_const + c3_const);
    let t_star = if gamma > 0.0 && gamma < 1.0 && gamma0 > 0.0 {
        ((delta * cal_b / gamma0).ln() / gamma.ln()).ceil().max(0.0) as usize + 1
    } else {
        1
    };
    let tau = (1.0 / (1.0 + delta)).max(gamma);
    let xi_c = 2.0 / ((rho / tau) * (rho / tau).ln());
    let gamma_big = sc.diagnostics.d_minus
        * (((v0_dist_sq + gamma0 * xi_c) / lam).sqrt() + n * c * x_star_norm);
    TrajectoryConstants {
        b_bound,
        c2_const,
        c3_const,
        gamma0,
        t_star,
        gamma_big,
    }
}

/// Result of fitting `log dist` against `t` over the trailing window.
#[derive(Debug, Clone, Copy)]
pub struct RateFit {
    /// Estimated `rho`: distance decays like `(sqrt(rho))^t`.
    pub rho_hat: f64,
    /// First round from which the windowed local slope stays within 10% of
    /// the final slope.
    pub onset_t: usize,
    pub r_squared: f64,
    /// Per-round slope of `ln dist`.
    pub slope: f64,
    /// Rounds spanned by the trailing fit window.
    pub window: (usize, usize),
}

/// Least-squares slope of `ln dist_to_ref` over the trailing 60% of usable
/// records (those with a positive distance above 1e-14). Needs at least 50
/// usable records.
pub fn rate_fit(records: &[TraceRecord]) -> Result<RateFit, AnalysisError> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| {
            r.dist_to_ref
                .filter(|d| *d > 1e-14)
                .map(|d| (r.t as f64, d.ln()))
        })
        .collect();
    if pts.len() < 50 {
        return Err(AnalysisError::TraceTooShort {
            needed: 50,
            got: pts.len(),
        });
    }
    let tail_len = ((pts.len() as f64) * 0.6).ceil() as usize;
    let tail = &pts[pts.len() - tail_len..];
    let (slope, _, r_squared) = linear_fit(tail);

    let w = (pts.len() / 10).max(5);
    let mut local = Vec::new();
    for k in 0..=pts.len().saturating_sub(w) {
        let (s, _, _) = linear_fit(&pts[k..k + w]);
        local.push((k, s));
    }
    let within = |s: f64| (s - slope).abs() <= 0.1 * slope.abs().max(1e-300);
    let mut onset_idx = 0;
    for &(k, _) in local.iter() {
        if local.iter().skip(k).all(|&(_, s)| within(s)) {
            onset_idx = k;
            break;
        }
        onset_idx = pts.len() - 1;
    }
    let onset_t = pts[onset_idx].0 as usize;
    Ok(RateFit {
        rho_hat: (2.0 * slope).exp(),
        onset_t,
        r_squared,
        slope,
        window: (tail[0].0 as usize, tail[tail.len() - 1].0 as usize),
    })
}

fn linear_fit(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sxx - sx * sx;
    let slope = (n * sxy - sx * sy) / denom;
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    let ss_res: f64 = pts
        .iter()
        .map(|p| (p.1 - (slope * p.0 + intercept)).powi(2))
        .sum();
    let r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else {
        1.0
    };
    (slope, intercept, r2)
}

/// Checks the round-over-round growth bound `||z^t|| <= C1 * B` against a
/// fixed level bound `B` (two bounded rounds keep the next one within a
/// `C1` factor, so a trajectory inside the level set never escapes it).
/// Returns the first violating round index, or `None` when the bound holds
/// everywhere.
pub fn bounded_iterate_check(z_norms: &[f64], b: f64, c1: f64) -> Option<usize> {
    let cap = c1 * b * (1.0 + 1e-12);
    z_norms.iter().position(|&z| z > cap)
}
