use adaptfem::csr::CsrMatrix;
use adaptfem::engine::{Problem, SchemeId};
use adaptfem::lu::LuFactor;
use adaptfem::surfactant::{SurfactantConfig, SurfactantProblem};

fn main() {
    let cfg = SurfactantConfig { mesh_n: 6, ..Default::default() };
    let (mut problem, state0) = SurfactantProblem::new(cfg.clone());
    problem.prepare_step(&state0, cfg.tau, cfg.tau);
    let n = state0.psi.len();
    // two warmup steps: L then N
    let x1 = problem.scheme_step(SchemeId::SurfL, cfg.l1, cfg.tau, &state0, &state0).unwrap().state;
    let x2 = problem.scheme_step(SchemeId::SurfNewton, cfg.l1, cfg.tau, &state0, &x1).unwrap().state;
    let (t, rhs) = problem.debug_system(SchemeId::SurfNewton, &state0, &x2);
    let a = CsrMatrix::from_triplets(2 * n, 2 * n, &t).unwrap();
    let f = LuFactor::factor(&a).unwrap();
    let delta = f.solve(&rhs).unwrap();
    let ad = a.matvec(&delta);
    let err: f64 = ad.iter().zip(&rhs).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let rn: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dn: f64 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("||A d - rhs|| = {err:.3e}  ||rhs|| = {rn:.3e}  ||d|| = {dn:.3e}");
    let rc: f64 = rhs[n..].iter().map(|v| v * v).sum::<f64>().sqrt();
    let dc: f64 = delta[n..].iter().map(|v| v * v).sum::<f64>().sqrt();
    println!("c-part: ||rhs_c|| = {rc:.3e} ||d_c|| = {dc:.3e}");
    // row scale of the c-block diagonal
    let mut dmin = f64::MAX;
    let mut dmax: f64 = 0.0;
    for i in n..2 * n {
        let v = a.get(i, i).abs();
        if v > 0.0 {
            dmin = dmin.min(v);
            dmax = dmax.max(v);
        }
    }
    println!("c-diag range [{dmin:.3e}, {dmax:.3e}]");
    let cmin = x2.c.iter().zip(&delta[n..]).map(|(c, d)| c + d).fold(f64::MAX, f64::min);
    let cmax = x2.c.iter().zip(&delta[n..]).map(|(c, d)| c + d).fold(f64::MIN, f64::max);
    println!("updated c range [{cmin:.3e}, {cmax:.3e}]");
    let psimin = x2.psi.iter().zip(&delta[..n]).map(|(p, d)| p + d).fold(f64::MAX, f64::min);
    let psimax = x2.psi.iter().zip(&delta[..n]).map(|(p, d)| p + d).fold(f64::MIN, f64::max);
    println!("updated psi range [{psimin:.3e}, {psimax:.3e}]");
}
// second pass appended below via include hack not needed
