//! The `diropt verify` self-check suites: mixing-rate bound, solver
//! reductions, and prox-vs-oracle equivalence, printed one PASS/FAIL line
//! per check.

use std::process::ExitCode;
use std::time::Instant;

use diropt::graph::{build_mixing_matrix, verify_mixing_rate, DirectedNetwork};
use diropt::problems::{
    make_l1_least_squares, Agent, Family, ProblemInstance, Reference, SmoothTerm,
};
use diropt::prox::{oracle_prox_1d, prox_scaled, scaled_evaluate, LqExponent, ProxOp};
use diropt::solvers::{extrapush_step, init, pg_extrapush_step, Algorithm, RunConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

pub fn cmd_verify() -> ExitCode {
    let start = Instant::now();
    let checks = [mixing_rate_suite(), reduction_suite(), prox_oracle_suite()];
    let mut all_ok = true;
    for c in &checks {
        println!(
            "{}: {} — {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        all_ok &= c.passed;
    }
    println!("verify finished in {:?}", start.elapsed());
    if all_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

/// Push-sum bound `|(A^t)_ij - phi_i| < 4(1 - 1/n^n)^t` on the five-node
/// benchmark graph and ten random strongly connected digraphs.
fn mixing_rate_suite() -> Outcome {
    let mut graphs = vec![DirectedNetwork::five_node_example()];
    for k in 0..10u64 {
        graphs.push(DirectedNetwork::random_strongly_connected(
            3 + (k as usize % 6),
            0.5,
            9000 + k,
        ));
    }
    let mut worst = f64::NEG_INFINITY;
    for net in &graphs {
        let mix = match build_mixing_matrix(net) {
            Ok(m) => m,
            Err(e) => {
                return Outcome {
                    name: "mixing-rate bound",
                    passed: false,
                    detail: format!("graph construction failed: {e}"),
                }
            }
        };
        worst = worst.max(verify_mixing_rate(&mix.a, &mix.phi, 100));
    }
    Outcome {
        name: "mixing-rate bound",
        passed: worst < 0.0,
        detail: format!("{} graphs, worst margin {worst:.3e}", graphs.len()),
    }
}

/// With `r = 0` the composite and smooth-only steps must coincide, and on a
/// symmetric doubly stochastic matrix the weights must pin to one.
fn reduction_suite() -> Outcome {
    let net = DirectedNetwork::five_node_example();
    let mix = build_mixing_matrix(&net).unwrap();
    let agents: Vec<Agent> = (0..5)
        .map(|i| Agent {
            smooth: SmoothTerm::Quadratic {
                q: DMatrix::from_element(1, 1, 1.0 + i as f64 * 0.4),
                h: DVector::from_element(1, (i as f64 * 0.7).sin()),
            },
            lipschitz: 1.0 + i as f64 * 0.4,
            prox: ProxOp::Zero,
        })
        .collect();
    let inst = ProblemInstance {
        family: Family::L1LeastSquares,
        n: 5,
        p: 1,
        agents,
        reference: Reference::IterateLimit { horizon: 0 },
        seed: 0,
        mu_estimate: 1.0,
        lipschitz_max: 2.6,
        resample_count: 0,
    };
    let z0 = DMatrix::from_fn(5, 1, |i, _| (i as f64).cos());
    let alpha = 0.05;
    let mut a = init(
        &inst,
        &mix,
        &RunConfig::new(Algorithm::PgExtraPush, alpha, 1, z0.clone()),
    )
    .unwrap();
    let mut b = init(
        &inst,
        &mix,
        &RunConfig::new(Algorithm::ExtraPush, alpha, 1, z0),
    )
    .unwrap();
    let mut gap = 0.0f64;
    for _ in 0..100 {
        pg_extrapush_step(&mut a, &inst, &mix, alpha).unwrap();
        extrapush_step(&mut b, &inst, &mix, alpha).unwrap();
        gap = gap.max((&a.z - &b.z).amax());
    }

    let mix4 = build_mixing_matrix(&DirectedNetwork::complete(4)).unwrap();
    let inst4 = make_l1_least_squares(4, 3, 6, 0.3, 5);
    let mut s = init(
        &inst4,
        &mix4,
        &RunConfig::new(Algorithm::PgExtraPush, 0.05, 1, DMatrix::zeros(4, 3)),
    )
    .unwrap();
    let mut w_drift = 0.0f64;
    for _ in 0..100 {
        pg_extrapush_step(&mut s, &inst4, &mix4, 0.05).unwrap();
        for i in 0..4 {
            w_drift = w_drift.max((s.w[i] - 1.0).abs());
        }
    }
    Outcome {
        name: "solver reductions",
        passed: gap < 1e-12 && w_drift < 1e-12,
        detail: format!("smooth-reduction gap {gap:.3e}, undirected weight drift {w_drift:.3e}"),
    }
}

/// Scaled proxes against the 1-D grid+refine oracle, 200 samples per
/// operator and weight.
fn prox_oracle_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let ops: Vec<ProxOp> = vec![
        ProxOp::L0 { lambda: 0.6 },
        ProxOp::L1 { lambda: 0.6 },
        ProxOp::Lq {
            lambda: 0.6,
            q: LqExponent::Half,
        },
        ProxOp::Lq {
            lambda: 0.6,
            q: LqExponent::TwoThirds,
        },
        ProxOp::DistanceTo {
            anchor: DVector::from_element(1, 0.4),
        },
        ProxOp::Halfspace {
            normal: DVector::from_element(1, 1.0),
            offset: 0.2,
        },
    ];
    let mut checked = 0usize;
    let mut worst = f64::NEG_INFINITY;
    for op in &ops {
        for &w in &[1.0 / 3125.0, 0.5, 1.0, 2.0] {
            for _ in 0..200 {
                let z = rng.random::<f64>() * 6.0 - 3.0;
                let alpha = 0.3 + rng.random::<f64>();
                let got = prox_scaled(op, &DVector::from_element(1, z), alpha, w).unwrap()[0];
                let r = |u: f64| scaled_evaluate(op, &DVector::from_element(1, u), w);
                let span = 4.0 * (1.0 + z.abs());
                let oracle = match oracle_prox_1d(r, z, alpha, -span, span, 2e-3) {
                    Ok(u) => u,
                    Err(e) => {
                        return Outcome {
                            name: "prox oracle equivalence",
                            passed: false,
                            detail: format!("oracle failed: {e}"),
                        }
                    }
                };
                let obj = |u: f64| r(u) + (u - z) * (u - z) / (2.0 * alpha);
                worst = worst.max(obj(got) - obj(oracle));
                checked += 1;
            }
        }
    }
    Outcome {
        name: "prox oracle equivalence",
        passed: worst <= 1e-6,
        detail: format!("{checked} samples, worst objective gap {worst:.3e}"),
    }
}
