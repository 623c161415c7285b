//! Closed-form proximity operators and the brute-force oracle that gates them.
//!
//! `prox_{alpha r}(z) = argmin_u r(u) + ||u - z||^2 / (2 alpha)`. Every
//! operator here has an explicit form; the nonconvex `ℓq` thresholds reduce
//! to the largest positive root of a depressed cubic (`q = 1/2`, in `sqrt(u)`)
//! or quartic (`q = 2/3`, in `cbrt(u)`), followed by an objective comparison
//! against zero. [`oracle_prox_1d`] is the independent grid+golden-section
//! check: the oracle, not the formula transcription, is the source of truth
//! for every threshold implemented here.

use nalgebra::DVector;
use thiserror::Error;

/// Norm floor below which a halfspace constraint vector is degenerate.
pub const DEGENERATE_NORM_FLOOR: f64 = 1e-14;

#[derive(Debug, Error)]
pub enum ProxError {
    #[error("degenerate halfspace constraint: ||a|| = {norm:e} below {floor:e}")]
    DegenerateConstraint { norm: f64, floor: f64 },
    #[error("oracle minimizer hit the search boundary at {at}")]
    RangeTooNarrow { at: f64 },
}

/// Exponent of the nonconvex quasi-norm regularizers with explicit proxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LqExponent {
    Half,
    TwoThirds,
}

impl LqExponent {
    pub fn value(self) -> f64 {
        match self {
            LqExponent::Half => 0.5,
            LqExponent::TwoThirds => 2.0 / 3.0,
        }
    }
}

/// Soft shrinkage: componentwise `sign(z_i) * max(|z_i| - tau, 0)`.
pub fn prox_l1(z: &DVector<f64>, tau: f64) -> DVector<f64> {
    z.map(|v| soft_threshold(v, tau))
}

pub fn soft_threshold(v: f64, tau: f64) -> f64 {
    v.signum() * (v.abs() - tau).max(0.0)
}

/// Hard threshold: `z_i` survives iff `|z_i| > sqrt(2 tau)`; the tie
/// `|z_i| = sqrt(2 tau)` resolves to 0.
pub fn prox_l0(z: &DVector<f64>, tau: f64) -> DVector<f64> {
    let threshold = (2.0 * tau).sqrt();
    z.map(|v| if v.abs() > threshold { v } else { 0.0 })
}

/// Componentwise minimizer of `tau |u|^q + (u - z)^2 / 2` for `q` in
/// {1/2, 2/3}. Reduces to the largest positive root of a cubic in `sqrt(u)`
/// (half thresholding) or a quartic in `cbrt(u)` (two-thirds thresholding),
/// then keeps whichever of that root and 0 has the lower objective, with
/// exact ties resolved to 0.
pub fn prox_lq(z: &DVector<f64>, tau: f64, q: LqExponent) -> DVector<f64> {
    z.map(|v| match q {
        LqExponent::Half => half_threshold(v, tau),
        LqExponent::TwoThirds => two_thirds_threshold(v, tau),
    })
}

fn half_threshold(z: f64, tau: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let sign = z.signum();
    let z = z.abs();
    // Stationary points of tau sqrt(u) + (u - z)^2/2 solve, in s = sqrt(u),
    // s^3 - z s + tau/2 = 0. Three real roots exist only past the threshold;
    // the largest is the local minimum.
    let disc = 4.0 * z.powi(3) - 27.0 * tau * tau / 4.0;
    if disc <= 0.0 {
        return 0.0;
    }
    let theta = (-(3.0 * 3.0f64.sqrt() * tau) / (4.0 * z.powf(1.5)))
        .clamp(-1.0, 1.0)
        .acos();
    let s = 2.0 * (z / 3.0).sqrt() * (theta / 3.0).cos();
    let u = s * s;
    let obj_u = tau * s + 0.5 * (u - z) * (u - z);
    let obj_zero = 0.5 * z * z;
    if obj_u < obj_zero {
        sign * u
    } else {
        0.0
    }
}

fn two_thirds_threshold(z: f64, tau: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let sign = z.signum();
    let z = z.abs();
    // In s = u^(1/3) the stationarity condition is s^4 - z s + c = 0 with
    // c = 2 tau / 3. Ferrari's resolvent cubic m^3 - c m - z^2/8 = 0 always
    // has a positive real root m; the quartic then factors through
    // s^2 - sqrt(2m) s + m - z / (2 sqrt(2m)) = 0.
    let c = 2.0 * tau / 3.0;
    let m = resolvent_root(c, z);
    let root_2m = (2.0 * m).sqrt();
    let inner = 2.0 * z / root_2m - 2.0 * m;
    if inner <= 0.0 {
        return 0.0;
    }
    let s = 0.5 * (root_2m + inner.sqrt());
    let u = s.powi(3);
    let obj_u = tau * s * s + 0.5 * (u - z) * (u - z);
    let obj_zero = 0.5 * z * z;
    if obj_u < obj_zero {
        sign * u
    } else {
        0.0
    }
}

/// Largest real root of `m^3 - c m - z^2/8 = 0` (`c > 0`), which is positive.
fn resolvent_root(c: f64, z: f64) -> f64 {
    let q0 = -z * z / 8.0;
    let p = -c;
    let disc = q0 * q0 / 4.0 + p.powi(3) / 27.0;
    if disc >= 0.0 {
        let root = disc.sqrt();
        (-q0 / 2.0 + root).cbrt() + (-q0 / 2.0 - root).cbrt()
    } else {
        let r = (-p / 3.0).sqrt();
        let psi = (-q0 / (2.0 * r.powi(3))).clamp(-1.0, 1.0).acos();
        2.0 * r * (psi / 3.0).cos()
    }
}

/// Prox of the Euclidean distance `r(x) = ||x - b||` at `u`:
/// `b - (b - u)/||b - u|| * max(||b - u|| - alpha, 0)`, with `u = b` mapped
/// to `b` (the zero-residual branch).
pub fn prox_geometric_median(u: &DVector<f64>, b: &DVector<f64>, alpha: f64) -> DVector<f64> {
    let diff = b - u;
    let dist = diff.norm();
    if dist <= alpha || dist == 0.0 {
        return b.clone();
    }
    b - diff * ((dist - alpha) / dist)
}

/// Euclidean projection onto `{x : a^T x <= b}`; feasible points are left
/// untouched.
pub fn prox_halfspace(
    u: &DVector<f64>,
    a: &DVector<f64>,
    b: f64,
) -> Result<DVector<f64>, ProxError> {
    let norm_sq = a.norm_squared();
    if norm_sq.sqrt() < DEGENERATE_NORM_FLOOR {
        return Err(ProxError::DegenerateConstraint {
            norm: norm_sq.sqrt(),
            floor: DEGENERATE_NORM_FLOOR,
        });
    }
    let slack = a.dot(u) - b;
    if slack <= 0.0 {
        Ok(u.clone())
    } else {
        Ok(u - a * (slack / norm_sq))
    }
}

/// A named nonsmooth term with its value, prox, and a subgradient selector.
#[derive(Debug, Clone, PartialEq)]
pub enum ProxOp {
    /// `r = 0`.
    Zero,
    /// `r(x) = lambda ||x||_1`.
    L1 { lambda: f64 },
    /// `r(x) = lambda * #nonzeros(x)`.
    L0 { lambda: f64 },
    /// `r(x) = lambda sum_i |x_i|^q`, `q` in {1/2, 2/3}.
    Lq { lambda: f64, q: LqExponent },
    /// `r(x) = ||x - anchor||_2` (a geometric-median term).
    DistanceTo { anchor: DVector<f64> },
    /// Indicator of `{x : normal^T x <= offset}`.
    Halfspace { normal: DVector<f64>, offset: f64 },
}

impl ProxOp {
    pub fn name(&self) -> &'static str {
        match self {
            ProxOp::Zero => "zero",
            ProxOp::L1 { .. } => "l1",
            ProxOp::L0 { .. } => "l0",
            ProxOp::Lq {
                q: LqExponent::Half,
                ..
            } => "l_half",
            ProxOp::Lq {
                q: LqExponent::TwoThirds,
                ..
            } => "l_two_thirds",
            ProxOp::DistanceTo { .. } => "distance",
            ProxOp::Halfspace { .. } => "halfspace",
        }
    }

    /// Function value; `+inf` outside an indicator's feasible set.
    pub fn evaluate(&self, x: &DVector<f64>) -> f64 {
        match self {
            ProxOp::Zero => 0.0,
            ProxOp::L1 { lambda } => lambda * x.iter().map(|v| v.abs()).sum::<f64>(),
            ProxOp::L0 { lambda } => lambda * x.iter().filter(|v| **v != 0.0).count() as f64,
            ProxOp::Lq { lambda, q } => {
                lambda * x.iter().map(|v| v.abs().powf(q.value())).sum::<f64>()
            }
            ProxOp::DistanceTo { anchor } => (x - anchor).norm(),
            ProxOp::Halfspace { normal, offset } => {
                // Projections land on the boundary up to rounding; the
                // indicator must not report those points as infeasible.
                let slack_tol = 1e-9 * (1.0 + offset.abs() + normal.amax() * x.amax());
                if normal.dot(x) <= *offset + slack_tol {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// `argmin_u r(u) + ||u - z||^2 / (2 alpha)`.
    pub fn prox(&self, z: &DVector<f64>, alpha: f64) -> Result<DVector<f64>, ProxError> {
        match self {
            ProxOp::Zero => Ok(z.clone()),
            ProxOp::L1 { lambda } => Ok(prox_l1(z, alpha * lambda)),
            ProxOp::L0 { lambda } => Ok(prox_l0(z, alpha * lambda)),
            ProxOp::Lq { lambda, q } => Ok(prox_lq(z, alpha * lambda, *q)),
            ProxOp::DistanceTo { anchor } => Ok(prox_geometric_median(z, anchor, alpha)),
            ProxOp::Halfspace { normal, offset } => prox_halfspace(z, normal, *offset),
        }
    }

    /// A selection from the subdifferential: the minimal-norm element where
    /// the choice matters (0 at the kink of `|.|`, 0 inside the feasible set).
    /// For the nonconvex quasi-norms this is the formal gradient away from 0.
    pub fn subgradient(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            ProxOp::Zero => DVector::zeros(x.len()),
            ProxOp::L1 { lambda } => x.map(|v| if v == 0.0 { 0.0 } else { lambda * v.signum() }),
            ProxOp::L0 { .. } => DVector::zeros(x.len()),
            ProxOp::Lq { lambda, q } => {
                let qv = q.value();
                x.map(|v| {
                    if v == 0.0 {
                        0.0
                    } else {
                        lambda * qv * v.signum() * v.abs().powf(qv - 1.0)
                    }
                })
            }
            ProxOp::DistanceTo { anchor } => {
                let diff = x - anchor;
                let norm = diff.norm();
                if norm == 0.0 {
                    DVector::zeros(x.len())
                } else {
                    diff / norm
                }
            }
            ProxOp::Halfspace { .. } => DVector::zeros(x.len()),
        }
    }

    /// `B_r` when the subdifferential is uniformly bounded; `None` for the
    /// indicator (unbounded normal cone) and the nonconvex quasi-norms
    /// (gradient blows up at 0).
    pub fn subgradient_bound(&self, dim: usize) -> Option<f64> {
        match self {
            ProxOp::Zero => Some(0.0),
            ProxOp::L1 { lambda } => Some(lambda * (dim as f64).sqrt()),
            ProxOp::DistanceTo { .. } => Some(1.0),
            ProxOp::L0 { .. } | ProxOp::Lq { .. } | ProxOp::Halfspace { .. } => None,
        }
    }

    pub fn is_convex(&self) -> bool {
        matches!(
            self,
            ProxOp::Zero | ProxOp::L1 { .. } | ProxOp::DistanceTo { .. } | ProxOp::Halfspace { .. }
        )
    }
}

/// Prox of the weight-scaled function `r_w(x) = w * r(x / w)` via the identity
/// `prox_{alpha r_w}(z) = w * prox_{(alpha/w) r}(z / w)`. Push-sum weights
/// satisfy `w >= 1/n^n > 0`, so the scaling is always well-posed.
pub fn prox_scaled(
    op: &ProxOp,
    z: &DVector<f64>,
    alpha: f64,
    w: f64,
) -> Result<DVector<f64>, ProxError> {
    debug_assert!(w > 0.0, "push-sum weight must stay positive, got {w}");
    let inner = op.prox(&(z / w), alpha / w)?;
    Ok(inner * w)
}

/// Value of the scaled function `w * r(x / w)`.
pub fn scaled_evaluate(op: &ProxOp, x: &DVector<f64>, w: f64) -> f64 {
    w * op.evaluate(&(x / w))
}

/// Brute-force 1-D prox: grid-minimizes `r(u) + (u - z)^2 / (2 alpha)` over
/// `[lo, hi]`, then refines around the best grid point by golden-section
/// search. Errs when the grid minimizer sits on the boundary, which means
/// the bracket failed to contain the true minimizer.
pub fn oracle_prox_1d(
    r: impl Fn(f64) -> f64,
    z: f64,
    alpha: f64,
    lo: f64,
    hi: f64,
    step: f64,
) -> Result<f64, ProxError> {
    assert!(lo < hi && step > 0.0);
    let obj = |u: f64| r(u) + (u - z) * (u - z) / (2.0 * alpha);
    let mut best_u = lo;
    let mut best_v = obj(lo);
    let mut u = lo;
    while u < hi {
        let v = obj(u);
        if v < best_v {
            best_v = v;
            best_u = u;
        }
        u += step;
    }
    if obj(hi) < best_v {
        best_u = hi;
    }
    if best_u <= lo || best_u >= hi {
        return Err(ProxError::RangeTooNarrow { at: best_u });
    }
    Ok(golden_section(
        &obj,
        (best_u - step).max(lo),
        (best_u + step).min(hi),
    ))
}

/// Golden-section search for a minimum on `[a, b]`.
fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() < 1e-13 {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
