use adaptfem::engine::{run_transient, EstimatorSet, FixedController, SchemeId, TransientConfig};
use adaptfem::surfactant::{SurfactantConfig, SurfactantProblem, SurfSwitching, SurfTimestep};

fn main() {
    let mode = std::env::args().nth(1).unwrap_or_else(|| "lscheme".into());
    let n: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let t_end: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let max_iter: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(500);
    let n_fast: usize = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(10);
    let cfg = SurfactantConfig { mesh_n: n, t_end, max_iter, n_fast, ..Default::default() };
    let (mut problem, state0) = SurfactantProblem::new(cfg.clone());
    let rule = problem.stopping_rule();
    let tc = TransientConfig { t_end, tau_min: cfg.tau_min, fixed_grid: mode != "tau" };
    let res = match mode.as_str() {
        "lscheme" => {
            let mut c = FixedController {
                scheme_id: SchemeId::SurfL,
                l: cfg.l1,
                tau: cfg.tau,
                estimators: EstimatorSet::default(),
            };
            run_transient(&mut problem, &mut c, &rule, state0, tc)
        }
        "newton" => {
            let mut c = FixedController {
                scheme_id: SchemeId::SurfNewton,
                l: cfg.l1,
                tau: cfg.tau,
                estimators: EstimatorSet { e_4to4: true, ..Default::default() },
            };
            run_transient(&mut problem, &mut c, &rule, state0, tc)
        }
        "switch" => {
            let mut c = SurfSwitching::new(&cfg);
            run_transient(&mut problem, &mut c, &rule, state0, tc)
        }
        _ => {
            let mut c = SurfTimestep::new(&cfg);
            run_transient(&mut problem, &mut c, &rule, state0, tc)
        }
    };
    let mut shown = 0;
    for row in &res.rows {
        let r = &row.rec;
        if shown < 25 || r.k <= 2 || r.action != adaptfem::engine::Action::None {
            println!(
                "step {:2} t {:.4} k {:3} {:12} tau {:.5} inc {:.4e} e34 {} e44 {} act {}",
                row.step,
                row.time,
                r.k,
                r.scheme.as_str(),
                r.tau,
                r.eta_inc,
                r.estimators.e_3to4.map(|v| format!("{v:.3e}")).unwrap_or("-".into()),
                r.estimators.e_4to4.map(|v| format!("{v:.3e}")).unwrap_or("-".into()),
                r.action.label()
            );
            shown += 1;
        }
    }
    println!(
        "converged={} steps={} total_rows={} failed_attempts={}",
        res.converged,
        res.steps_completed,
        res.rows.len(),
        res.failed_attempts
    );
}
