use adaptfem::engine::{Problem, SchemeId};
use adaptfem::surfactant::{SurfactantConfig, SurfactantProblem};

fn main() {
    let cfg = SurfactantConfig { mesh_n: 6, ..Default::default() };
    let (mut problem, state0) = SurfactantProblem::new(cfg.clone());
    problem.prepare_step(&state0, cfg.tau, cfg.tau);
    let n = state0.psi.len();
    let free_psi: Vec<bool> = problem.space_psi.dirichlet.iter().map(|d| d.is_none()).collect();
    let free_c: Vec<bool> = problem.space_c.dirichlet.iter().map(|d| d.is_none()).collect();
    for seq in [
        vec![SchemeId::SurfL, SchemeId::SurfNewton, SchemeId::SurfNewton, SchemeId::SurfNewton, SchemeId::SurfNewton],
        vec![SchemeId::SurfL, SchemeId::SurfNewton, SchemeId::SurfL, SchemeId::SurfNewton, SchemeId::SurfL],
    ] {
        println!("== sequence ==");
        let mut x = state0.clone();
        for (it, &scheme) in seq.iter().enumerate() {
            let r = problem.residual(&state0, &x).unwrap();
            let rpsi: f64 = r[..n].iter().zip(&free_psi).filter(|(_, f)| **f).map(|(v, _)| v * v).sum::<f64>().sqrt();
            let rc: f64 = r[n..].iter().zip(&free_c).filter(|(_, f)| **f).map(|(v, _)| v * v).sum::<f64>().sqrt();
            let next = problem.scheme_step(scheme, cfg.l1, cfg.tau, &state0, &x).unwrap().state;
            let dpsi: f64 = next.psi.iter().zip(&x.psi).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let dc: f64 = next.c.iter().zip(&x.c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            println!(
                "it {} {:12} free |R_psi| {rpsi:.3e} |R_c| {rc:.3e} -> |dpsi| {dpsi:.3e} |dc| {dc:.3e}",
                it + 1,
                scheme.as_str()
            );
            x = next;
        }
    }
}
