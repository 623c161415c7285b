//! Directed networks and their column-stochastic mixing matrices.
//!
//! A [`DirectedNetwork`] is a set of agents with one-way arcs; every node is
//! implicitly a member of its own in- and out-neighborhood, so self-loops are
//! never stored. The induced mixing matrix assigns `A[i][j] = 1/d_j` whenever
//! node `j` sends to node `i` (`d_j` = out-degree including the self-loop),
//! which makes every column sum to one. Strong connectivity guarantees a
//! unique stationary distribution `phi` with `A phi = phi`, approached
//! geometrically: `|(A^t)_ij - phi_i| < C gamma^t` with `C = 4` and
//! `gamma = 1 - 1/n^n`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Column sums of a valid mixing matrix must match 1 to this accumulation tolerance.
pub const COLUMN_SUM_TOL: f64 = 1e-12;

/// Eigenvalue floor for the positive-definiteness check.
pub const PD_EIGENVALUE_FLOOR: f64 = 1e-12;

/// Probing horizon for the mixing-rate diagnostics.
pub const DIAGNOSTIC_HORIZON: usize = 200;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph is not strongly connected")]
    NotStronglyConnected,
    #[error("power iteration did not reach tolerance {tol:e} within {cap} iterations (last change {last_change:e})")]
    NoConvergence {
        tol: f64,
        cap: usize,
        last_change: f64,
    },
    #[error("matrix is not column-stochastic: column {col} sums to {sum}")]
    NotColumnStochastic { col: usize, sum: f64 },
    #[error("matrix has a negative entry at ({row},{col}): {value}")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("selfish boost failed: no beta <= {max_beta} makes the mixing matrix pass the positive-definiteness check")]
    BoostFailed { max_beta: f64 },
    #[error("invalid network: {0}")]
    InvalidNetwork(String),
    #[error("adjacency parse error at line {line}: {msg}")]
    AdjacencyParse { line: usize, msg: String },
}

/// A directed communication graph. Arcs are ordered pairs `(i, j)` meaning
/// node `i` can send to node `j`. Self-loops are implicit and never stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectedNetwork {
    n: usize,
    arcs: BTreeSet<(usize, usize)>,
}

impl DirectedNetwork {
    /// Builds a network on `n` nodes from explicit arcs. Self-loops in the
    /// input are dropped (they are implicit); out-of-range endpoints are an error.
    pub fn new(
        n: usize,
        arcs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        if n == 0 {
            return Err(GraphError::InvalidNetwork("need at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (i, j) in arcs {
            if i >= n || j >= n {
                return Err(GraphError::InvalidNetwork(format!(
                    "arc ({i},{j}) out of range for n={n}"
                )));
            }
            if i != j {
                set.insert((i, j));
            }
        }
        Ok(Self { n, arcs: set })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Arcs excluding the implicit self-loops, in sorted order.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.arcs.iter().copied()
    }

    pub fn has_arc(&self, i: usize, j: usize) -> bool {
        i == j || self.arcs.contains(&(i, j))
    }

    /// Out-degree of node `i`, counting the self-loop.
    pub fn out_degree(&self, i: usize) -> usize {
        1 + self.arcs.iter().filter(|&&(a, _)| a == i).count()
    }

    /// Out-neighborhood of `i` including `i` itself.
    pub fn out_neighbors(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .arcs
            .iter()
            .filter(|&&(a, _)| a == i)
            .map(|&(_, b)| b)
            .collect();
        out.push(i);
        out.sort_unstable();
        out
    }

    /// Complete digraph: every ordered pair is an arc.
    pub fn complete(n: usize) -> Self {
        let arcs = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .collect();
        Self { n, arcs }
    }

    /// Directed ring `0 -> 1 -> ... -> n-1 -> 0`.
    pub fn ring(n: usize) -> Self {
        let arcs = (0..n).map(|i| (i, (i + 1) % n)).collect();
        Self { n, arcs }
    }

    /// The five-node benchmark digraph used throughout the test suites. Its
    /// mixing matrix has entries 1/4, 1/2, 1/3 and out-neighbor sets
    /// {0,1,2,4}, {0,1,3,4}, {2,4}, {0,3}, {1,2,4} (0-indexed, self-loops
    /// included).
    pub fn five_node_example() -> Self {
        Self::new(
            5,
            [
                (0, 1),
                (0, 2),
                (0, 4),
                (1, 0),
                (1, 3),
                (1, 4),
                (2, 4),
                (3, 0),
                (4, 1),
                (4, 2),
            ],
        )
        .expect("static fixture")
    }

    /// Erdős–Rényi directed graph: each ordered pair `(i,j)`, `i != j`,
    /// becomes an arc with probability `rho`. Resamples (advancing the seed
    /// stream) until the graph is strongly connected, so the result always
    /// passes [`check_strong_connectivity`]. Deterministic in `(n, rho, seed)`.
    pub fn random_strongly_connected(n: usize, rho: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let mut arcs = BTreeSet::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.random::<f64>() < rho {
                        arcs.insert((i, j));
                    }
                }
            }
            let net = Self { n, arcs };
            if check_strong_connectivity(&net) {
                return net;
            }
        }
    }

    /// Plain-text adjacency serialization: first line `n`, then one `i j`
    /// line per arc (0-indexed, self-loops omitted).
    pub fn to_adjacency_text(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for (i, j) in &self.arcs {
            out.push_str(&format!("{i} {j}\n"));
        }
        out
    }

    /// Parses the adjacency-list format produced by [`Self::to_adjacency_text`].
    pub fn from_adjacency_text(text: &str) -> Result<Self, GraphError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (ln, first) = lines.next().ok_or_else(|| GraphError::AdjacencyParse {
            line: 0,
            msg: "empty input".into(),
        })?;
        let n: usize = first
            .trim()
            .parse()
            .map_err(|_| GraphError::AdjacencyParse {
                line: ln + 1,
                msg: format!("expected node count, got {first:?}"),
            })?;
        let mut arcs = Vec::new();
        for (ln, line) in lines {
            let mut it = line.split_whitespace();
            let (a, b) = (it.next(), it.next());
            match (a, b) {
                (Some(a), Some(b)) => {
                    let i: usize = a.parse().map_err(|_| GraphError::AdjacencyParse {
                        line: ln + 1,
                        msg: format!("bad endpoint {a:?}"),
                    })?;
                    let j: usize = b.parse().map_err(|_| GraphError::AdjacencyParse {
                        line: ln + 1,
                        msg: format!("bad endpoint {b:?}"),
                    })?;
                    arcs.push((i, j));
                }
                _ => {
                    return Err(GraphError::AdjacencyParse {
                        line: ln + 1,
                        msg: format!("expected `i j`, got {line:?}"),
                    })
                }
            }
        }
        Self::new(n, arcs)
    }
}

/// True iff every node reaches every other node along directed arcs
/// (self-loops included, which never affect reachability).
pub fn check_strong_connectivity(net: &DirectedNetwork) -> bool {
    let n = net.n();
    if n == 1 {
        return true;
    }
    let mut fwd = vec![Vec::new(); n];
    let mut bwd = vec![Vec::new(); n];
    for (i, j) in net.arcs() {
        fwd[i].push(j);
        bwd[j].push(i);
    }
    reaches_all(&fwd, n) && reaches_all(&bwd, n)
}

fn reaches_all(adj: &[Vec<usize>], n: usize) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                count += 1;
                stack.push(w);
            }
        }
    }
    count == n
}

/// A column-stochastic mixing matrix with its derived spectral objects.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    /// The column-stochastic matrix itself.
    pub a: DMatrix<f64>,
    /// `(A + I)/2`.
    pub abar: DMatrix<f64>,
    /// Stationary distribution: `A phi = phi`, entries nonnegative, sums to 1.
    pub phi: DVector<f64>,
    /// `n * diag(phi)`.
    pub dinf: DMatrix<f64>,
    /// Geometric mixing factor `1 - 1/n^n`.
    pub gamma_bound: f64,
    /// Multiplicative constant in the push-sum bound.
    pub c_bound: f64,
}

impl MixingMatrix {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    /// Wraps an arbitrary column-stochastic matrix, computing `phi` by power
    /// iteration. Rejects matrices with negative entries or column sums off
    /// by more than [`COLUMN_SUM_TOL`].
    pub fn from_matrix(a: DMatrix<f64>) -> Result<Self, GraphError> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "mixing matrix must be square");
        for j in 0..n {
            let mut sum = 0.0;
            for i in 0..n {
                let v = a[(i, j)];
                if v < 0.0 {
                    return Err(GraphError::NegativeEntry {
                        row: i,
                        col: j,
                        value: v,
                    });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > COLUMN_SUM_TOL {
                return Err(GraphError::NotColumnStochastic { col: j, sum });
            }
        }
        let phi = stationary_distribution(&a, 1e-13)?;
        let abar = (&a + DMatrix::identity(n, n)) * 0.5;
        let dinf = DMatrix::from_diagonal(&(phi.clone() * n as f64));
        Ok(Self {
            a,
            abar,
            phi,
            dinf,
            gamma_bound: mixing_gamma(n),
            c_bound: 4.0,
        })
    }

    /// `D_inf^{-1}` as a dense diagonal matrix.
    pub fn dinf_inv(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.dinf.diagonal().map(|d| 1.0 / d))
    }

    /// Row-major CSV export with 17 significant digits.
    pub fn matrix_csv(&self) -> String {
        matrix_to_csv(&self.a)
    }
}

/// `1 - 1/n^n`; zero for a single node, and indistinguishable from 1 in f64
/// once `n^n` overflows the mantissa.
pub fn mixing_gamma(n: usize) -> f64 {
    1.0 - (-(n as f64) * (n as f64).ln()).exp()
}

/// Builds the out-degree mixing matrix of a strongly connected network:
/// `A[i][j] = 1/d_j` when `j` sends to `i` (or `i == j`), zero otherwise.
pub fn build_mixing_matrix(net: &DirectedNetwork) -> Result<MixingMatrix, GraphError> {
    if !check_strong_connectivity(net) {
        return Err(GraphError::NotStronglyConnected);
    }
    let n = net.n();
    let mut a = DMatrix::zeros(n, n);
    for j in 0..n {
        let share = 1.0 / net.out_degree(j) as f64;
        for i in net.out_neighbors(j) {
            a[(i, j)] = share;
        }
    }
    MixingMatrix::from_matrix(a)
}

/// Stationary distribution by power iteration from the uniform vector,
/// stopping when the successive-iterate infinity-norm change drops below
/// `tol`. The iteration cap is `10 n^n` clamped to 1e6.
pub fn stationary_distribution(a: &DMatrix<f64>, tol: f64) -> Result<DVector<f64>, GraphError> {
    let n = a.nrows();
    let cap = (10.0 * (n as f64).powi(n as i32)).clamp(10.0, 1e6) as usize;
    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut last_change = f64::INFINITY;
    for _ in 0..cap {
        let next = a * &x;
        last_change = (&next - &x).amax();
        x = next;
        if last_change < tol {
            // Renormalize away accumulated drift.
            let s: f64 = x.sum();
            return Ok(x / s);
        }
    }
    Err(GraphError::NoConvergence {
        tol,
        cap,
        last_change,
    })
}

/// Max over `t <= t_max`, `i`, `j` of `|(A^t)_ij - phi_i| - C gamma^t`.
/// A matrix obeying the push-sum bound yields a negative result (zero in the
/// degenerate single-node case).
pub fn verify_mixing_rate(a: &DMatrix<f64>, phi: &DVector<f64>, t_max: usize) -> f64 {
    let n = a.nrows();
    let gamma = mixing_gamma(n);
    let c = 4.0;
    let mut power = a.clone();
    let mut worst = f64::NEG_INFINITY;
    let mut bound = 1.0;
    for _ in 1..=t_max {
        bound *= gamma;
        for j in 0..n {
            for i in 0..n {
                let gap = (power[(i, j)] - phi[i]).abs() - c * bound;
                if gap > worst {
                    worst = gap;
                }
            }
        }
        power = &power * a;
    }
    worst
}

/// True iff the smallest eigenvalue of `Dinf^{-1} Abar + Abar^T Dinf^{-1}`
/// exceeds [`PD_EIGENVALUE_FLOOR`].
pub fn check_positive_definiteness(mix: &MixingMatrix) -> bool {
    let dinv = mix.dinf_inv();
    let m = &dinv * &mix.abar + mix.abar.transpose() * &dinv;
    smallest_symmetric_eigenvalue(&m) > PD_EIGENVALUE_FLOOR
}

/// Smallest eigenvalue of a (numerically) symmetric matrix.
pub fn smallest_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().min()
}

/// Largest eigenvalue of a (numerically) symmetric matrix.
pub fn largest_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigenvalues().max()
}

/// Replaces `A` by `A' = (A + beta I)/(1 + beta)` for the smallest
/// `beta` in `{0, 1, 2, 4, ...}` that makes the boosted matrix pass
/// [`check_positive_definiteness`]. The stationary distribution is invariant
/// under the boost, so the same `phi` serves every candidate. Returns the
/// boosted matrix together with the chosen `beta`.
pub fn selfish_boost(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), GraphError> {
    const MAX_BETA: f64 = 1024.0;
    let n = a.nrows();
    let mut beta = 0.0f64;
    loop {
        let boosted = (a + DMatrix::identity(n, n) * beta) / (1.0 + beta);
        let mix = MixingMatrix::from_matrix(boosted.clone())?;
        if check_positive_definiteness(&mix) {
            return Ok((boosted, beta));
        }
        beta = if beta == 0.0 { 1.0 } else { beta * 2.0 };
        if beta > MAX_BETA {
            return Err(GraphError::BoostFailed { max_beta: MAX_BETA });
        }
    }
}

/// Push-sum conditioning constants estimated over a finite probing horizon,
/// with the geometric tail folded in analytically through
/// `||D^t - D_inf|| <= n C gamma^t`.
#[derive(Debug, Clone, Copy)]
pub struct MixingDiagnostics {
    /// `max_t ||D^t||` (Frobenius).
    pub d_plus: f64,
    /// `max_t ||(D^t)^{-1}||`.
    pub d_minus: f64,
    /// `||D_inf||`.
    pub dinf_plus: f64,
    /// `||D_inf^{-1}||`.
    pub dinf_minus: f64,
    /// `inf_t min_i (A^t 1)_i`.
    pub xi: f64,
    /// Probing horizon used for the estimates.
    pub horizon: usize,
}

/// Estimates the `d`-constants and `xi` by probing `t = 0..=horizon` and
/// bounding the tail with the geometric mixing rate. The tail bounds are
/// weak for large `n` (where `gamma` is close to 1) but always finite, and
/// `xi` is floored at its guaranteed `1/n^n`.
pub fn mixing_diagnostics(mix: &MixingMatrix, horizon: usize) -> MixingDiagnostics {
    let n = mix.n();
    let nf = n as f64;
    let gamma = mix.gamma_bound;
    let c = mix.c_bound;
    let dinf_plus = mix.dinf.norm();
    let dinf_minus = mix.dinf_inv().norm();

    let ones = DVector::from_element(n, 1.0);
    let mut w = ones.clone();
    let mut d_plus: f64 = 0.0;
    let mut d_minus: f64 = 0.0;
    let mut xi = f64::INFINITY;
    for _ in 0..=horizon {
        // D^t = diag(w) with w = A^t 1; Frobenius norms of diagonals.
        let norm_d: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_dinv: f64 = w.iter().map(|v| 1.0 / (v * v)).sum::<f64>().sqrt();
        d_plus = d_plus.max(norm_d);
        d_minus = d_minus.max(norm_dinv);
        xi = xi.min(w.min());
        w = &mix.a * w;
    }
    let tail = nf * c * gamma.powi(horizon as i32);
    let min_weight_floor = (-(nf) * nf.ln()).exp(); // 1/n^n
    d_plus = d_plus.max(dinf_plus + tail);
    d_minus = d_minus.max(dinf_minus + d_minus * dinf_minus * tail);
    let phi_floor = mix.phi.min() * nf - tail;
    xi = xi.min(phi_floor.max(min_weight_floor));

    MixingDiagnostics {
        d_plus,
        d_minus,
        dinf_plus,
        dinf_minus,
        xi,
        horizon,
    }
}

/// Row-major CSV with 17 significant digits per entry.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| format!("{:.16e}", m[(i, j)]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Parses a CSV written by [`matrix_to_csv`].
pub fn matrix_from_csv(text: &str) -> Result<DMatrix<f64>, GraphError> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(ln, l)| {
            l.split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|_| GraphError::AdjacencyParse {
                            line: ln + 1,
                            msg: format!("bad number {tok:?}"),
                        })
                })
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Err(GraphError::AdjacencyParse {
            line: 0,
            msg: "empty csv".into(),
        });
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(GraphError::AdjacencyParse {
            line: 0,
            msg: "ragged csv".into(),
        });
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}
