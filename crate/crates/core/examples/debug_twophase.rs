use adaptfem::engine::{run_transient, SchemeId, TransientConfig};
use adaptfem::twophase::{TwoPhaseConfig, TwoPhaseProblem, TwoPhaseSwitching};

fn main() {
    let gamma: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.7);
    let l: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let n: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(10);
    let t_end: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.3);
    let cfg = TwoPhaseConfig { gamma, l, mesh_n: n, t_end, ..Default::default() };
    let (mut problem, state0) = TwoPhaseProblem::new(cfg.clone());
    let mut ctrl = TwoPhaseSwitching::new(&cfg);
    let rule = problem.stopping_rule();
    let res = run_transient(
        &mut problem,
        &mut ctrl,
        &rule,
        state0,
        TransientConfig { t_end, tau_min: 1e-9, fixed_grid: true },
    );
    for row in &res.rows {
        let r = &row.rec;
        let scheme = match r.scheme {
            SchemeId::TwophaseL => "L",
            SchemeId::TwophaseNewton => "N",
            _ => "?",
        };
        println!(
            "step {:2} k {:2} {} inc {:.6e} e12 {} e22 {} act {}",
            row.step,
            r.k,
            scheme,
            r.eta_inc,
            r.estimators.e_1to2.map(|v| format!("{v:.6e}")).unwrap_or("-".into()),
            r.estimators.e_2to2.map(|v| format!("{v:.6e}")).unwrap_or("-".into()),
            r.action.label()
        );
    }
    println!("converged={} steps={} total={}", res.converged, res.steps_completed, res.rows.len());
}
