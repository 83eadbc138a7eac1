use adaptfem::engine::{
    run_transient, EstimatorSet, FixedController, SchemeId, TransientConfig,
};
use adaptfem::twophase::{TwoPhaseConfig, TwoPhaseProblem, TwoPhaseAdaptiveL, TwoPhaseSwitching};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    let n: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let gammas = [0.9, 0.8, 0.7, 0.6, 0.5];
    for &gamma in &gammas {
        for (name, scheme, l) in [
            ("L1", "fixed-L", 1.0),
            ("L2", "fixed-L", 10.0),
            ("Newton", "newton", 0.0),
            ("L1-A", "adaptive", 1.0),
            ("L2-A", "adaptive", 10.0),
            ("L1-N", "switch", 1.0),
            ("L2-N", "switch", 10.0),
        ] {
            if which != "all" && which != name {
                continue;
            }
            let cfg = TwoPhaseConfig { gamma, l, mesh_n: n, ..Default::default() };
            let (mut problem, state0) = TwoPhaseProblem::new(cfg.clone());
            let rule = problem.stopping_rule();
            let tc = TransientConfig { t_end: cfg.t_end, tau_min: 1e-9, fixed_grid: true };
            let res = match scheme {
                "fixed-L" => {
                    let mut c = FixedController {
                        scheme_id: SchemeId::TwophaseL,
                        l,
                        tau: cfg.tau,
                        estimators: EstimatorSet { e_1to1: true, ..Default::default() },
                    };
                    run_transient(&mut problem, &mut c, &rule, state0, tc)
                }
                "newton" => {
                    let mut c = FixedController {
                        scheme_id: SchemeId::TwophaseNewton,
                        l: 1.0,
                        tau: cfg.tau,
                        estimators: EstimatorSet { e_2to2: true, ..Default::default() },
                    };
                    run_transient(&mut problem, &mut c, &rule, state0, tc)
                }
                "adaptive" => {
                    let mut c = TwoPhaseAdaptiveL::new(&cfg);
                    run_transient(&mut problem, &mut c, &rule, state0, tc)
                }
                _ => {
                    let mut c = TwoPhaseSwitching::new(&cfg);
                    run_transient(&mut problem, &mut c, &rule, state0, tc)
                }
            };
            let total = res.rows.len();
            let l_iters = res
                .rows
                .iter()
                .filter(|r| r.rec.scheme == SchemeId::TwophaseL)
                .count();
            let avg = total as f64 / res.steps_completed.max(1) as f64;
            println!(
                "gamma {gamma} {name:7} conv {} total {total:4} avg {avg:6.2} L-iters {l_iters}",
                res.converged as u8
            );
        }
    }
}
