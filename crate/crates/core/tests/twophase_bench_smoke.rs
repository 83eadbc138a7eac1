//! Coarse smoke runs of the two-phase benchmark: convergence behavior of the
//! fixed schemes and the switching rule on the real initial data.

use adaptfem::engine::{run_transient, EstimatorSet, FixedController, SchemeId, TransientConfig};
use adaptfem::twophase::{TwoPhaseConfig, TwoPhaseProblem, TwoPhaseSwitching};

fn run_fixed(gamma: f64, l: f64, mesh_n: usize, t_end: f64, scheme: SchemeId) -> (bool, usize, f64) {
    let cfg = TwoPhaseConfig { gamma, l, mesh_n, t_end, ..Default::default() };
    let (mut problem, state0) = TwoPhaseProblem::new(cfg.clone());
    let mut ctrl = FixedController {
        scheme_id: scheme,
        l,
        tau: cfg.tau,
        estimators: EstimatorSet::default(),
    };
    let rule = problem.stopping_rule();
    let res = run_transient(
        &mut problem,
        &mut ctrl,
        &rule,
        state0,
        TransientConfig { t_end, tau_min: 1e-9, fixed_grid: true },
    );
    let total = res.rows.len();
    let avg = total as f64 / res.steps_completed.max(1) as f64;
    (res.converged, total, avg)
}

#[test]
fn lscheme_converges_on_coarse_mesh() {
    let (ok, total, avg) = run_fixed(0.9, 1.0, 10, 0.3, SchemeId::TwophaseL);
    assert!(ok, "L-scheme with L=1, gamma=0.9 converges");
    assert!(total >= 3, "needs a few iterations, got {total}");
    assert!(avg < 30.0, "average {avg} should be modest");
}

#[test]
fn newton_converges_fast_in_the_mild_regime() {
    let (ok, _total, avg) = run_fixed(0.9, 1.0, 10, 0.3, SchemeId::TwophaseNewton);
    assert!(ok, "Newton at gamma=0.9 converges");
    assert!(avg <= 6.0, "Newton should be fast, avg {avg}");
}

#[test]
fn switching_uses_one_lscheme_iteration_per_step() {
    // the one-iteration switch is a benchmark-mesh property; coarse meshes
    // weigh the degenerate circle differently and may switch later
    let cfg = TwoPhaseConfig { gamma: 0.7, l: 10.0, mesh_n: 40, t_end: 0.3, ..Default::default() };
    let (mut problem, state0) = TwoPhaseProblem::new(cfg.clone());
    let mut ctrl = TwoPhaseSwitching::new(&cfg);
    let rule = problem.stopping_rule();
    let res = run_transient(
        &mut problem,
        &mut ctrl,
        &rule,
        state0,
        TransientConfig { t_end: cfg.t_end, tau_min: 1e-9, fixed_grid: true },
    );
    assert!(res.converged);
    for step in 1..=res.steps_completed {
        let rows: Vec<_> = res.rows.iter().filter(|r| r.step == step).collect();
        assert_eq!(rows[0].rec.scheme, SchemeId::TwophaseL, "step {step} starts with the L-scheme");
        if rows.len() > 1 {
            assert_eq!(
                rows[1].rec.scheme,
                SchemeId::TwophaseNewton,
                "step {step}: switch after the first iteration"
            );
        }
    }
}
