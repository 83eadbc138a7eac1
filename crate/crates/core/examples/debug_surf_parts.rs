use adaptfem::assemble::{integrate, FieldDef};
use adaptfem::engine::{Problem, SchemeId};
use adaptfem::quad::QuadRule;
use adaptfem::surfactant::{SurfactantConfig, SurfactantProblem, SurfactantState};

fn main() {
    let cfg = SurfactantConfig { mesh_n: 6, ..Default::default() };
    let (mut problem, state0) = SurfactantProblem::new(cfg.clone());
    problem.prepare_step(&state0, cfg.tau, cfg.tau);
    // run: 1 L iteration, then Newton iterations, tracking the parts
    let mut km1 = state0.clone();
    let mut k_state = problem
        .scheme_step(SchemeId::SurfL, cfg.l1, cfg.tau, &state0, &km1)
        .unwrap()
        .state;
    for it in 2..=8 {
        let next = problem
            .scheme_step(SchemeId::SurfNewton, cfg.l1, cfg.tau, &state0, &k_state)
            .unwrap()
            .state;
        km1 = std::mem::replace(&mut k_state, next);
        // parts of eta_4to4 from iterates (k_state, km1)
        let parts = estimator_parts(&problem, &cfg, &km1, &k_state);
        let inc = problem.eta_inc(SchemeId::SurfNewton, cfg.l1, cfg.tau, &km1, &k_state);
        let dpsi: f64 = k_state
            .psi
            .iter()
            .zip(&km1.psi)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let dc: f64 =
            k_state.c.iter().zip(&km1.c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        println!(
            "it {it} inc {inc:.3e} |dpsi| {dpsi:.2e} |dc| {dc:.2e} eta_psi {:.3e} eta_c {:.3e} sqrt(tau)eta_D {:.3e} sqrt(tau)eta_K {:.3e}",
            parts.0, parts.1, parts.2, parts.3
        );
    }
}

fn estimator_parts(
    problem: &SurfactantProblem,
    cfg: &SurfactantConfig,
    km1: &SurfactantState,
    k: &SurfactantState,
) -> (f64, f64, f64, f64) {
    let vg = problem.vg;
    let quad = QuadRule::degree4();
    let tau = cfg.tau;
    let d = cfg.d_diff;
    let eps = cfg.eps_deg;
    let fields = [
        FieldDef::new(&problem.space_psi, &k.psi),
        FieldDef::new(&problem.space_c, &k.c),
        FieldDef::new(&problem.space_psi, &km1.psi),
        FieldDef::new(&problem.space_c, &km1.c),
    ];
    let uw = problem.flux_snapshot();
    let eta_d = integrate(&problem.mesh, &fields, &quad, |_, _, qp| {
        let gc_k = qp.grad(1);
        let gc_m = qp.grad(3);
        let dc = qp.val(1) - qp.val(3);
        let u = uw[qp.elem];
        let vx = d * (gc_k[0] - gc_m[0]) + u[0] * dc;
        let vy = d * (gc_k[1] - gc_m[1]) + u[1] * dc;
        Ok((vx * vx + vy * vy) / d)
    })
    .unwrap()
    .sqrt();
    let eta_k = integrate(&problem.mesh, &fields, &quad, |_, _, qp| {
        let (_, _, _, kk, _) = vg.eval(qp.val(0), qp.val(1));
        if kk < eps {
            return Ok(0.0);
        }
        let (_, dpsi_m, _, km, kpm) = vg.eval(qp.val(2), qp.val(3));
        let gk = qp.grad(0);
        let gm = qp.grad(2);
        let dpsi_inc = qp.val(0) - qp.val(2);
        let vx = (kk - km) * gk[0] - kpm * dpsi_m * gm[0] * dpsi_inc;
        let vy = (kk - km) * (gk[1] + 1.0) - kpm * dpsi_m * (gm[1] + 1.0) * dpsi_inc;
        Ok((vx * vx + vy * vy) / kk)
    })
    .unwrap()
    .sqrt();
    let eta_psi = integrate(&problem.mesh, &fields, &quad, |_, _, qp| {
        let (theta_k, dpsi_k, _) = vg.theta(qp.val(0), qp.val(1));
        if dpsi_k < eps {
            return Ok(0.0);
        }
        let (theta_m, dpsi_m, _) = vg.theta(qp.val(2), qp.val(3));
        let lin = dpsi_m * (qp.val(0) - qp.val(2));
        Ok((lin - (theta_k - theta_m)).powi(2) / dpsi_k)
    })
    .unwrap()
    .sqrt();
    (eta_psi, 0.0, tau.sqrt() * eta_d, tau.sqrt() * eta_k)
}
