//! Two-phase flow in a global and complementary pressure formulation.
//!
//! Unknowns are the complementary pressure `Theta` and the global pressure
//! `P`, both P1. The saturation law is the Hoelder family `s = Theta^gamma`
//! with total mobility `s^gamma + (1-s)^gamma` and fractional flow
//! `s^gamma / (s^gamma + (1-s)^gamma)`; small `gamma` degrades both the
//! L-scheme and Newton. Estimators predict the incremental error of the next
//! iteration and drive scheme switching and stabilization tuning.
//!
//! All inverse-weighted estimator integrands are restricted to the region
//! where the weight exceeds `eps_deg`: the saturation degenerates (`s' = 0`)
//! in the dry circle of the benchmark, and those points contribute zero.

use crate::assemble::{
    apply_dirichlet, assemble, assemble_functional, integrate, Constraints, FieldDef, FnlTerm, Qp,
    Term,
};
use crate::csr::CsrMatrix;
use crate::engine::{
    Action, Controller, EstimatorSet, Estimators, IterationRecord, Problem, SchemeId, StepError,
    StepOutcome, StoppingRule,
};
use crate::lu::LuFactor;
use crate::mesh::{build_rect_mesh, BoundaryTag, Rect, TriMesh};
use crate::norms::{l2_norm, weighted_norm, NormTerm};
use crate::quad::QuadRule;
use crate::space::{DirichletValue, FeSpace};
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct TwoPhaseConfig {
    /// Hoelder exponent of the saturation law, in (0, 1].
    pub gamma: f64,
    /// Absolute permeability.
    pub kappa: f64,
    /// L-scheme stabilization (initial value for the adaptive variant).
    pub l: f64,
    pub tau: f64,
    pub t_end: f64,
    /// Switching tolerance multiplier, >= 1.
    pub c_tol: f64,
    /// Degeneracy threshold for validity masking.
    pub eps_deg: f64,
    /// Stopping threshold on both increments, L2.
    pub tol: f64,
    pub max_iter: usize,
    pub mesh_n: usize,
}

impl Default for TwoPhaseConfig {
    fn default() -> Self {
        TwoPhaseConfig {
            gamma: 0.9,
            kappa: 1e-5,
            l: 1.0,
            tau: 0.1,
            t_end: 1.0,
            c_tol: 1.0,
            eps_deg: 1e-12,
            tol: 1e-6,
            max_iter: 200,
            mesh_n: 40,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TwoPhaseState {
    pub theta: Vec<f64>,
    pub p: Vec<f64>,
}

/// Pointwise constitutive values of the Hoelder test family.
#[derive(Debug, Clone, Copy)]
pub struct Constitutive {
    pub gamma: f64,
    pub eps_deg: f64,
}

impl Constitutive {
    /// Saturation `s = Theta^gamma`, clamped into [0, 1].
    pub fn s(&self, theta: f64) -> f64 {
        let t = theta.clamp(0.0, 1.0);
        t.powf(self.gamma)
    }

    /// `s'(Theta) = gamma Theta^(gamma-1)`, defined as zero in the degenerate
    /// region `Theta < eps_deg`.
    pub fn s_prime(&self, theta: f64) -> f64 {
        if theta < self.eps_deg {
            0.0
        } else {
            self.gamma * theta.clamp(self.eps_deg, 1.0).powf(self.gamma - 1.0)
        }
    }

    pub fn lambda_t(&self, s: f64) -> f64 {
        s.powf(self.gamma) + (1.0 - s).powf(self.gamma)
    }

    pub fn f_w(&self, s: f64) -> f64 {
        let sg = s.powf(self.gamma);
        sg / (sg + (1.0 - s).powf(self.gamma))
    }

    /// `d/ds lambda_t`, with the end-point singularities floored at eps_deg.
    fn lambda_t_prime_s(&self, s: f64) -> f64 {
        let lo = s.max(self.eps_deg);
        let hi = (1.0 - s).max(self.eps_deg);
        self.gamma * (lo.powf(self.gamma - 1.0) - hi.powf(self.gamma - 1.0))
    }

    /// `d/ds f_w = gamma s^(g-1) (1-s)^(g-1) / lambda_t^2`.
    fn f_w_prime_s(&self, s: f64) -> f64 {
        let lo = s.max(self.eps_deg);
        let hi = (1.0 - s).max(self.eps_deg);
        self.gamma * lo.powf(self.gamma - 1.0) * hi.powf(self.gamma - 1.0)
            / self.lambda_t(s).powi(2)
    }

    /// `d/dTheta [lambda_t(s(Theta))]`; zero wherever `s' = 0`.
    pub fn lambda_t_prime_theta(&self, theta: f64) -> f64 {
        let sp = self.s_prime(theta);
        if sp == 0.0 {
            0.0
        } else {
            self.lambda_t_prime_s(self.s(theta)) * sp
        }
    }

    /// `d/dTheta [f_w(s(Theta))]`; zero wherever `s' = 0`.
    pub fn f_w_prime_theta(&self, theta: f64) -> f64 {
        let sp = self.s_prime(theta);
        if sp == 0.0 {
            0.0
        } else {
            self.f_w_prime_s(self.s(theta)) * sp
        }
    }

    /// All pointwise values at once, as `(s, s', lambda_t, lambda_t'(Theta),
    /// f_w, f_w'(Theta))`.
    pub fn eval(&self, theta: f64) -> (f64, f64, f64, f64, f64, f64) {
        let s = self.s(theta);
        (
            s,
            self.s_prime(theta),
            self.lambda_t(s),
            self.lambda_t_prime_theta(theta),
            self.f_w(s),
            self.f_w_prime_theta(theta),
        )
    }
}

pub struct TwoPhaseProblem {
    pub cfg: TwoPhaseConfig,
    pub mesh: Arc<TriMesh>,
    /// Theta test/trial space: pure Neumann.
    pub space_theta: FeSpace,
    /// P space: Dirichlet bottom/top.
    pub space_p: FeSpace,
    pub con: Constitutive,
    quad: QuadRule,
}

impl TwoPhaseProblem {
    /// Build the benchmark problem: unit square, P = 1 at the bottom and 0 at
    /// the top, no-flow saturation boundary, sources zero. Returns the
    /// problem and the initial state (saturation 0.2 with a wet band of 0.6
    /// at the bottom and a dry circle in the middle; P from one elliptic
    /// solve at the initial saturation).
    pub fn new(cfg: TwoPhaseConfig) -> (Self, TwoPhaseState) {
        let mesh = Arc::new(build_rect_mesh(cfg.mesh_n, cfg.mesh_n, Rect::unit_square()).unwrap());
        let space_theta = FeSpace::p1(mesh.clone());
        let mut space_p = FeSpace::p1(mesh.clone());
        space_p.set_dirichlet(0, &[BoundaryTag::Bottom], DirichletValue::Const(1.0));
        space_p.set_dirichlet(0, &[BoundaryTag::Top], DirichletValue::Const(0.0));
        let con = Constitutive { gamma: cfg.gamma, eps_deg: cfg.eps_deg };
        let band = 1.0 / cfg.mesh_n as f64 + 1e-12;
        let s0: Vec<f64> = space_theta
            .dof_coords
            .iter()
            .map(|&[x, y]| {
                if (x - 0.5).powi(2) + (y - 0.5).powi(2) <= 0.1 {
                    0.0
                } else if y <= band {
                    0.6
                } else {
                    0.2
                }
            })
            .collect();
        let theta0: Vec<f64> = s0.iter().map(|&s| s.powf(1.0 / cfg.gamma)).collect();
        let problem = TwoPhaseProblem { cfg, mesh, space_theta, space_p, con, quad: QuadRule::degree4() };
        let p0 = problem.solve_initial_pressure(&theta0);
        (problem, TwoPhaseState { theta: theta0, p: p0 })
    }

    /// Elliptic solve for the initial global pressure at the given Theta.
    fn solve_initial_pressure(&self, theta: &[f64]) -> Vec<f64> {
        let con = self.con;
        let kappa = self.cfg.kappa;
        let fields = [FieldDef::new(&self.space_theta, theta)];
        let coeff = move |qp: &Qp| kappa * con.lambda_t(con.s(qp.val(0)));
        let mut triplets =
            assemble(&[Term::Stiffness(&coeff)], &self.space_p, &self.space_p, &fields, &self.quad)
                .unwrap();
        let n = self.space_p.n_dofs();
        let mut rhs = vec![0.0; n];
        let cons = Constraints::at_time(&[(0, &self.space_p)], n, 0.0);
        apply_dirichlet(&mut triplets, &mut rhs, &cons);
        let a = CsrMatrix::from_triplets(n, n, &triplets).unwrap();
        LuFactor::factor(&a).unwrap().solve(&rhs).unwrap()
    }

    fn n(&self) -> usize {
        self.space_theta.n_dofs()
    }

    /// The nonlinear residual at `(theta, p)` against both test rows,
    /// stacked `[theta rows; p rows]`.
    pub fn residual(&self, prev_time: &TwoPhaseState, state: &TwoPhaseState) -> Result<Vec<f64>, StepError> {
        let con = self.con;
        let kappa = self.cfg.kappa;
        let tau = self.cfg.tau;
        let fields = [
            FieldDef::new(&self.space_theta, &state.theta),
            FieldDef::new(&self.space_p, &state.p),
            FieldDef::new(&self.space_theta, &prev_time.theta),
        ];
        let mass = move |qp: &Qp| con.s(qp.val(0)) - con.s(qp.val(2));
        let flux = move |qp: &Qp| {
            let (s, _, lt, _, fw, _) = con.eval(qp.val(0));
            let _ = s;
            let g_theta = qp.grad(0);
            let g_p = qp.grad(1);
            let c = fw * kappa * lt;
            [tau * (g_theta[0] + c * g_p[0]), tau * (g_theta[1] + c * g_p[1])]
        };
        let row_theta = assemble_functional(
            &[FnlTerm::ScalarTest(&mass), FnlTerm::VecGradTest(&flux)],
            &self.space_theta,
            &fields,
            &self.quad,
        )?;
        let flux_p = move |qp: &Qp| {
            let c = tau * kappa * con.lambda_t(con.s(qp.val(0)));
            let g = qp.grad(1);
            [c * g[0], c * g[1]]
        };
        let row_p =
            assemble_functional(&[FnlTerm::VecGradTest(&flux_p)], &self.space_p, &fields, &self.quad)?;
        let mut out = row_theta;
        out.extend(row_p);
        Ok(out)
    }

    fn system_triplets(
        &self,
        scheme: SchemeId,
        l: f64,
        state: &TwoPhaseState,
    ) -> Result<Vec<(usize, usize, f64)>, StepError> {
        let con = self.con;
        let kappa = self.cfg.kappa;
        let tau = self.cfg.tau;
        let n = self.n();
        let fields = [
            FieldDef::new(&self.space_theta, &state.theta),
            FieldDef::new(&self.space_p, &state.p),
        ];
        let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
        let mut push_block = |block: Vec<(usize, usize, f64)>, row_off: usize, col_off: usize| {
            triplets.extend(block.into_iter().map(|(r, c, v)| (r + row_off, c + col_off, v)));
        };
        let cross = move |qp: &Qp| {
            let (_, _, lt, _, fw, _) = con.eval(qp.val(0));
            tau * fw * kappa * lt
        };
        let pp = move |qp: &Qp| tau * kappa * con.lambda_t(con.s(qp.val(0)));
        match scheme {
            SchemeId::TwophaseL => {
                let stab = move |_: &Qp| l;
                let tt = assemble(
                    &[Term::Mass(&stab), Term::Stiffness(&|_| tau)],
                    &self.space_theta,
                    &self.space_theta,
                    &fields,
                    &self.quad,
                )?;
                push_block(tt, 0, 0);
            }
            SchemeId::TwophaseNewton => {
                let mass = move |qp: &Qp| con.s_prime(qp.val(0));
                let convect = move |qp: &Qp| {
                    let theta = qp.val(0);
                    let (_, _, lt, ltp, fw, fwp) = con.eval(theta);
                    let a = kappa * (fwp * lt + fw * ltp);
                    let g = qp.grad(1);
                    [tau * a * g[0], tau * a * g[1]]
                };
                let tt = assemble(
                    &[Term::Mass(&mass), Term::Stiffness(&|_| tau), Term::ConvectionGradTest(&convect)],
                    &self.space_theta,
                    &self.space_theta,
                    &fields,
                    &self.quad,
                )?;
                push_block(tt, 0, 0);
                let convect_p = move |qp: &Qp| {
                    let a = kappa * con.lambda_t_prime_theta(qp.val(0));
                    let g = qp.grad(1);
                    [tau * a * g[0], tau * a * g[1]]
                };
                let pt = assemble(
                    &[Term::ConvectionGradTest(&convect_p)],
                    &self.space_theta,
                    &self.space_p,
                    &fields,
                    &self.quad,
                )?;
                push_block(pt, n, 0);
            }
            _ => unreachable!("not a two-phase scheme"),
        }
        let tp = assemble(&[Term::Stiffness(&cross)], &self.space_p, &self.space_theta, &fields, &self.quad)?;
        push_block(tp, 0, n);
        let pp_block = assemble(&[Term::Stiffness(&pp)], &self.space_p, &self.space_p, &fields, &self.quad)?;
        push_block(pp_block, n, n);
        Ok(triplets)
    }

    fn scheme_norm(
        &self,
        scheme: SchemeId,
        l: f64,
        weights_at: &TwoPhaseState,
        delta_theta: &[f64],
        delta_p: &[f64],
    ) -> f64 {
        let con = self.con;
        let kappa = self.cfg.kappa;
        let tau = self.cfg.tau;
        let fields = [
            FieldDef::new(&self.space_theta, delta_theta),
            FieldDef::new(&self.space_p, delta_p),
            FieldDef::new(&self.space_theta, &weights_at.theta),
        ];
        let wp = move |qp: &Qp| tau * kappa * con.lambda_t(con.s(qp.val(2)));
        let w_theta_mass: Box<dyn Fn(&Qp) -> f64> = match scheme {
            SchemeId::TwophaseL => Box::new(move |_: &Qp| l),
            SchemeId::TwophaseNewton => Box::new(move |qp: &Qp| con.s_prime(qp.val(2))),
            _ => unreachable!(),
        };
        weighted_norm(
            &self.mesh,
            &fields,
            &self.quad,
            &[
                NormTerm::Value(0, &*w_theta_mass),
                NormTerm::Grad(0, &|_| tau),
                NormTerm::Grad(1, &wp),
            ],
        )
        .expect("two-phase norm weights are nonnegative")
    }

    /// The three estimator ingredients shared by the lemmas. `newton_taylor`
    /// selects the Taylor-remainder variants used after Newton iterations;
    /// `l_weight` picks the `eta_s` weight (s' for the Newton target, L for
    /// the L-scheme target).
    fn estimator_parts(
        &self,
        l: f64,
        km1: &TwoPhaseState,
        k: &TwoPhaseState,
        newton_taylor: bool,
        s_weight_is_l: bool,
    ) -> Result<(f64, f64, f64), StepError> {
        let con = self.con;
        let kappa = self.cfg.kappa;
        let eps = self.cfg.eps_deg;
        let fields = [
            FieldDef::new(&self.space_theta, &k.theta),
            FieldDef::new(&self.space_p, &k.p),
            FieldDef::new(&self.space_theta, &km1.theta),
            FieldDef::new(&self.space_p, &km1.p),
        ];
        let eta_s_sq = integrate(&self.mesh, &fields, &self.quad, |_, _, qp| {
            let (tk, tkm1) = (qp.val(0), qp.val(2));
            let ds = con.s(tk) - con.s(tkm1);
            let dtheta = tk - tkm1;
            let lin = if newton_taylor { con.s_prime(tkm1) * dtheta } else { l * dtheta };
            let w = if s_weight_is_l { l } else { con.s_prime(tk) };
            if w < eps {
                return Ok(0.0);
            }
            Ok((lin - ds).powi(2) / w)
        })?;
        let eta_theta_sq = integrate(&self.mesh, &fields, &self.quad, |_, _, qp| {
            let (tk, tkm1) = (qp.val(0), qp.val(2));
            let (sk, skm1) = (con.s(tk), con.s(tkm1));
            let ck = con.f_w(sk) * kappa * con.lambda_t(sk);
            let ckm1 = con.f_w(skm1) * kappa * con.lambda_t(skm1);
            let gp = qp.grad(1);
            let mut vx = (ck - ckm1) * gp[0];
            let mut vy = (ck - ckm1) * gp[1];
            if newton_taylor {
                let (_, _, lt, ltp, fw, fwp) = con.eval(tkm1);
                let a = kappa * (fwp * lt + fw * ltp);
                let gpm1 = qp.grad(3);
                let dtheta = tk - tkm1;
                vx -= a * gpm1[0] * dtheta;
                vy -= a * gpm1[1] * dtheta;
            }
            Ok(vx * vx + vy * vy)
        })?;
        let eta_lt_sq = integrate(&self.mesh, &fields, &self.quad, |_, _, qp| {
            let (tk, tkm1) = (qp.val(0), qp.val(2));
            let wk = kappa * con.lambda_t(con.s(tk));
            if wk < eps {
                return Ok(0.0);
            }
            let wkm1 = kappa * con.lambda_t(con.s(tkm1));
            let gp = qp.grad(1);
            let mut vx = (wk - wkm1) * gp[0];
            let mut vy = (wk - wkm1) * gp[1];
            if newton_taylor {
                let a = kappa * con.lambda_t_prime_theta(tkm1);
                let gpm1 = qp.grad(3);
                let dtheta = tk - tkm1;
                vx -= a * gpm1[0] * dtheta;
                vy -= a * gpm1[1] * dtheta;
            }
            Ok((vx * vx + vy * vy) / wk)
        })?;
        Ok((eta_s_sq, eta_theta_sq, eta_lt_sq))
    }

    /// Estimator for switching from the L-scheme to Newton.
    pub fn eta_l_to_n(&self, l: f64, km1: &TwoPhaseState, k: &TwoPhaseState) -> Result<f64, StepError> {
        let (s, th, lt) = self.estimator_parts(l, km1, k, false, false)?;
        Ok((s + self.cfg.tau * (th + lt)).sqrt())
    }

    /// Estimator for continuing with Newton.
    pub fn eta_n_to_n(&self, km1: &TwoPhaseState, k: &TwoPhaseState) -> Result<f64, StepError> {
        let (s, th, lt) = self.estimator_parts(0.0, km1, k, true, false)?;
        Ok((s + self.cfg.tau * (th + lt)).sqrt())
    }

    /// Estimator for continuing with the L-scheme.
    pub fn eta_l_to_l(&self, l: f64, km1: &TwoPhaseState, k: &TwoPhaseState) -> Result<f64, StepError> {
        let (s, th, lt) = self.estimator_parts(l, km1, k, false, true)?;
        Ok((s + self.cfg.tau * (th + lt)).sqrt())
    }

    pub fn stopping_rule(&self) -> StoppingRule {
        StoppingRule::absolute(self.cfg.tol, 2, self.cfg.max_iter)
    }
}

impl Problem for TwoPhaseProblem {
    type State = TwoPhaseState;

    fn prepare_step(&mut self, _prev: &TwoPhaseState, _t_new: f64, tau: f64) {
        self.cfg.tau = tau;
    }

    fn scheme_step(
        &mut self,
        scheme: SchemeId,
        l: f64,
        tau: f64,
        prev_time: &TwoPhaseState,
        iterate: &TwoPhaseState,
    ) -> Result<StepOutcome<TwoPhaseState>, StepError> {
        debug_assert_eq!(tau, self.cfg.tau);
        let n = self.n();
        let mut triplets = self.system_triplets(scheme, l, iterate)?;
        let res = self.residual(prev_time, iterate)?;
        let mut rhs: Vec<f64> = res.iter().map(|&r| -r).collect();
        let cons = Constraints::homogeneous(&[(0, &self.space_theta), (n, &self.space_p)], 2 * n);
        apply_dirichlet(&mut triplets, &mut rhs, &cons);
        let a = CsrMatrix::from_triplets(2 * n, 2 * n, &triplets).map_err(|_| {
            StepError::Solver(crate::lu::LuError::NotSquare(2 * n, 2 * n))
        })?;
        let delta = LuFactor::factor(&a)?.solve(&rhs)?;
        // B(delta, delta) = -<R, delta>: certifies the linear solve
        let adelta = a.matvec(&delta);
        let (mut lhs, mut rhsdot) = (0.0, 0.0);
        for i in 0..2 * n {
            lhs += delta[i] * adelta[i];
            rhsdot += delta[i] * rhs[i];
        }
        let scale = lhs.abs().max(rhsdot.abs());
        let lin_identity_rel_err = if scale > 0.0 { (lhs - rhsdot).abs() / scale } else { 0.0 };
        let theta: Vec<f64> = iterate
            .theta
            .iter()
            .zip(&delta[..n])
            .map(|(t, d)| (t + d).clamp(0.0, 1.0))
            .collect();
        let p: Vec<f64> = iterate.p.iter().zip(&delta[n..]).map(|(p, d)| p + d).collect();
        Ok(StepOutcome { state: TwoPhaseState { theta, p }, lin_identity_rel_err })
    }

    fn eta_inc(
        &self,
        scheme: SchemeId,
        l: f64,
        _tau: f64,
        weights_at: &TwoPhaseState,
        next: &TwoPhaseState,
    ) -> f64 {
        let dt: Vec<f64> = next.theta.iter().zip(&weights_at.theta).map(|(a, b)| a - b).collect();
        let dp: Vec<f64> = next.p.iter().zip(&weights_at.p).map(|(a, b)| a - b).collect();
        self.scheme_norm(scheme, l, weights_at, &dt, &dp)
    }

    fn estimators(
        &self,
        scheme: SchemeId,
        l: f64,
        _tau: f64,
        km1: &TwoPhaseState,
        k: &TwoPhaseState,
        want: EstimatorSet,
    ) -> Result<Estimators, StepError> {
        let mut est = Estimators::default();
        if scheme == SchemeId::TwophaseL {
            if want.e_1to2 {
                est.e_1to2 = Some(self.eta_l_to_n(l, km1, k)?);
            }
            if want.e_1to1 {
                est.e_1to1 = Some(self.eta_l_to_l(l, km1, k)?);
            }
        }
        if scheme == SchemeId::TwophaseNewton && want.e_2to2 {
            est.e_2to2 = Some(self.eta_n_to_n(km1, k)?);
        }
        Ok(est)
    }

    fn stopping_pairs(&self, km1: &TwoPhaseState, k: &TwoPhaseState) -> Vec<(f64, f64)> {
        let dt: Vec<f64> = k.theta.iter().zip(&km1.theta).map(|(a, b)| a - b).collect();
        let dp: Vec<f64> = k.p.iter().zip(&km1.p).map(|(a, b)| a - b).collect();
        vec![
            (
                l2_norm(&self.mesh, FieldDef::new(&self.space_theta, &dt), &self.quad),
                l2_norm(&self.mesh, FieldDef::new(&self.space_theta, &k.theta), &self.quad),
            ),
            (
                l2_norm(&self.mesh, FieldDef::new(&self.space_p, &dp), &self.quad),
                l2_norm(&self.mesh, FieldDef::new(&self.space_p, &k.p), &self.quad),
            ),
        ]
    }

    fn finite(&self, s: &TwoPhaseState) -> bool {
        s.theta.iter().chain(&s.p).all(|v| v.is_finite())
    }
}

/// L-scheme/Newton switching (two-phase variant, direct comparison with
/// `c_tol = 1`). The scheme resets to the L-scheme at every time step.
pub struct TwoPhaseSwitching {
    scheme: SchemeId,
    pub l: f64,
    pub tau: f64,
    pub c_tol: f64,
}

impl TwoPhaseSwitching {
    pub fn new(cfg: &TwoPhaseConfig) -> Self {
        TwoPhaseSwitching { scheme: SchemeId::TwophaseL, l: cfg.l, tau: cfg.tau, c_tol: cfg.c_tol }
    }
}

impl Controller for TwoPhaseSwitching {
    fn begin_step(&mut self, _prev_iters: Option<usize>) -> Option<Action> {
        self.scheme = SchemeId::TwophaseL;
        None
    }
    fn scheme(&self) -> SchemeId {
        self.scheme
    }
    fn l_value(&self) -> f64 {
        self.l
    }
    fn tau(&self) -> f64 {
        self.tau
    }
    fn clamp_tau(&mut self, max_tau: f64) {
        self.tau = self.tau.min(max_tau);
    }
    fn needed(&self) -> EstimatorSet {
        match self.scheme {
            SchemeId::TwophaseL => EstimatorSet { e_1to2: true, ..Default::default() },
            _ => EstimatorSet { e_2to2: true, ..Default::default() },
        }
    }
    fn decide(&mut self, rec: &IterationRecord) -> Action {
        match self.scheme {
            SchemeId::TwophaseL => {
                if let Some(e12) = rec.estimators.e_1to2 {
                    if e12 <= self.c_tol * rec.eta_inc {
                        self.scheme = SchemeId::TwophaseNewton;
                        return Action::SwitchTo(SchemeId::TwophaseNewton);
                    }
                }
            }
            _ => {
                if let Some(e22) = rec.estimators.e_2to2 {
                    if e22 > rec.eta_inc {
                        self.scheme = SchemeId::TwophaseL;
                        return Action::SwitchTo(SchemeId::TwophaseL);
                    }
                }
            }
        }
        Action::None
    }
}

/// Adaptive stabilization for the L-scheme: decrease by 0.8 while the
/// estimator sits in the [0.8, 1] band of the incremental error, increase by
/// sqrt(2) when it exceeds it.
pub struct TwoPhaseAdaptiveL {
    pub l: f64,
    pub tau: f64,
    pub c_up: f64,
}

impl TwoPhaseAdaptiveL {
    pub fn new(cfg: &TwoPhaseConfig) -> Self {
        TwoPhaseAdaptiveL { l: cfg.l, tau: cfg.tau, c_up: 2.0f64.sqrt() }
    }
}

impl Controller for TwoPhaseAdaptiveL {
    fn begin_step(&mut self, _prev_iters: Option<usize>) -> Option<Action> {
        None
    }
    fn scheme(&self) -> SchemeId {
        SchemeId::TwophaseL
    }
    fn l_value(&self) -> f64 {
        self.l
    }
    fn tau(&self) -> f64 {
        self.tau
    }
    fn clamp_tau(&mut self, max_tau: f64) {
        self.tau = self.tau.min(max_tau);
    }
    fn needed(&self) -> EstimatorSet {
        EstimatorSet { e_1to1: true, ..Default::default() }
    }
    fn decide(&mut self, rec: &IterationRecord) -> Action {
        let Some(e11) = rec.estimators.e_1to1 else { return Action::None };
        if rec.eta_inc >= e11 && e11 >= 0.8 * rec.eta_inc {
            self.l *= 0.8;
            return Action::LDown;
        }
        if e11 > rec.eta_inc {
            self.l *= self.c_up;
            return Action::LUp;
        }
        Action::None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{run_time_step, FixedController, StepStatus};

    fn small_cfg(gamma: f64) -> TwoPhaseConfig {
        TwoPhaseConfig { gamma, mesh_n: 4, ..Default::default() }
    }

    #[test]
    fn constitutive_trivial_values() {
        let con = Constitutive { gamma: 0.5, eps_deg: 1e-12 };
        assert!((con.s(0.25) - 0.5).abs() < 1e-15);
        assert!((con.lambda_t(0.0) - 1.0).abs() < 1e-15);
        let con1 = Constitutive { gamma: 1.0, eps_deg: 1e-12 };
        assert!((con1.f_w(0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn constitutive_derivatives_match_finite_differences() {
        let con = Constitutive { gamma: 0.7, eps_deg: 1e-12 };
        let h = 1e-7;
        for theta in [0.2, 0.5, 0.8] {
            let sp_fd = (con.s(theta + h) - con.s(theta - h)) / (2.0 * h);
            assert!((con.s_prime(theta) - sp_fd).abs() < 1e-6 * sp_fd.abs());
            let ltp_fd =
                (con.lambda_t(con.s(theta + h)) - con.lambda_t(con.s(theta - h))) / (2.0 * h);
            assert!((con.lambda_t_prime_theta(theta) - ltp_fd).abs() < 1e-5 * ltp_fd.abs().max(1.0));
            let fwp_fd = (con.f_w(con.s(theta + h)) - con.f_w(con.s(theta - h))) / (2.0 * h);
            assert!((con.f_w_prime_theta(theta) - fwp_fd).abs() < 1e-5 * fwp_fd.abs().max(1.0));
        }
    }

    #[test]
    fn degenerate_region_masks_derivatives() {
        let con = Constitutive { gamma: 0.5, eps_deg: 1e-12 };
        assert_eq!(con.s_prime(0.0), 0.0);
        assert_eq!(con.lambda_t_prime_theta(0.0), 0.0);
        assert_eq!(con.f_w_prime_theta(0.0), 0.0);
        assert!(con.s_prime(0.5).is_finite());
    }

    /// With homogeneous pressure boundary data, a constant Theta and zero P
    /// solve the nonlinear system exactly: one iteration, zero increment.
    #[test]
    fn fixed_point_converges_immediately() {
        let (mut problem, _) = TwoPhaseProblem::new(small_cfg(0.8));
        for d in problem.space_p.dirichlet.iter_mut().flatten() {
            *d = DirichletValue::Const(0.0);
        }
        let n = problem.n();
        let state = TwoPhaseState { theta: vec![0.5f64.powf(1.0 / 0.8); n], p: vec![0.0; n] };
        let mut ctrl = FixedController {
            scheme_id: SchemeId::TwophaseL,
            l: 1.0,
            tau: 0.1,
            estimators: EstimatorSet { e_1to1: true, ..Default::default() },
        };
        let rule = problem.stopping_rule();
        let prev = state.clone();
        problem.prepare_step(&prev, 0.1, 0.1);
        let out = run_time_step(&mut problem, &mut ctrl, &rule, &prev, None);
        assert_eq!(out.status, StepStatus::Converged);
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].eta_inc <= 1e-10, "eta_inc = {}", out.records[0].eta_inc);
        assert_eq!(out.records[0].estimators.e_1to1, Some(0.0));
    }

    #[test]
    fn lscheme_matrix_is_symmetric_before_dirichlet() {
        let (problem, state) = TwoPhaseProblem::new(small_cfg(0.7));
        let t = problem.system_triplets(SchemeId::TwophaseL, 1.0, &state).unwrap();
        // symmetric part: the (theta,p) coupling block breaks global symmetry,
        // but each diagonal block must be symmetric
        let n = problem.n();
        let a = CsrMatrix::from_triplets(2 * n, 2 * n, &t).unwrap();
        for r in 0..n {
            let (cols, vals) = a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                if c < n {
                    assert!((v - a.get(c, r)).abs() <= 1e-12 * a.max_abs());
                }
            }
        }
        for r in n..2 * n {
            let (cols, vals) = a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                if c >= n {
                    assert!((v - a.get(c, r)).abs() <= 1e-12 * a.max_abs());
                }
            }
        }
    }

    /// Directional finite differences of the residual against the assembled
    /// Newton form on a non-degenerate state.
    #[test]
    fn newton_jacobian_matches_finite_differences() {
        let cfg = TwoPhaseConfig { gamma: 0.6, mesh_n: 2, ..Default::default() };
        let (mut problem, _) = TwoPhaseProblem::new(cfg);
        let n = problem.n();
        let theta: Vec<f64> = problem
            .space_theta
            .dof_coords
            .iter()
            .map(|&[x, y]| 0.4 + 0.2 * x + 0.15 * y)
            .collect();
        let p: Vec<f64> = problem.space_p.dof_coords.iter().map(|&[x, y]| 1.0 - y + 0.1 * x * y).collect();
        let state = TwoPhaseState { theta, p };
        let prev = state.clone();
        problem.prepare_step(&prev, 0.1, 0.1);
        let jac_t = problem.system_triplets(SchemeId::TwophaseNewton, 1.0, &state).unwrap();
        let jac = CsrMatrix::from_triplets(2 * n, 2 * n, &jac_t).unwrap();
        let dir: Vec<f64> = (0..2 * n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 10.0).collect();
        let jv = jac.matvec(&dir);
        let mut errs = Vec::new();
        for eps in [1e-4, 1e-5, 1e-6] {
            let pert = TwoPhaseState {
                theta: state.theta.iter().zip(&dir[..n]).map(|(t, d)| t + eps * d).collect(),
                p: state.p.iter().zip(&dir[n..]).map(|(p, d)| p + eps * d).collect(),
            };
            let r1 = problem.residual(&prev, &pert).unwrap();
            let r0 = problem.residual(&prev, &state).unwrap();
            let err: f64 = (0..2 * n)
                .map(|i| ((r1[i] - r0[i]) / eps - jv[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            errs.push(err);
        }
        // first-order consistency: error shrinks linearly with eps
        assert!(errs[1] < 0.2 * errs[0], "errors {errs:?}");
        assert!(errs[2] < 0.2 * errs[1], "errors {errs:?}");
    }

    #[test]
    fn estimators_vanish_on_zero_increment() {
        let (problem, state) = TwoPhaseProblem::new(small_cfg(0.5));
        assert_eq!(problem.eta_l_to_n(1.0, &state, &state).unwrap(), 0.0);
        assert_eq!(problem.eta_n_to_n(&state, &state).unwrap(), 0.0);
        assert_eq!(problem.eta_l_to_l(1.0, &state, &state).unwrap(), 0.0);
    }

    #[test]
    fn estimators_finite_on_degenerate_state() {
        // the benchmark initial state contains the dry circle; a perturbed
        // second iterate must give finite estimators under validity masking
        let (problem, state) = TwoPhaseProblem::new(TwoPhaseConfig { gamma: 0.5, mesh_n: 8, ..Default::default() });
        let kicked = TwoPhaseState {
            theta: state.theta.iter().map(|t| (t + 0.01).min(1.0)).collect(),
            p: state.p.iter().map(|p| p * 1.01 + 0.001).collect(),
        };
        for v in [
            problem.eta_l_to_n(1.0, &state, &kicked).unwrap(),
            problem.eta_n_to_n(&state, &kicked).unwrap(),
            problem.eta_l_to_l(1.0, &state, &kicked).unwrap(),
        ] {
            assert!(v.is_finite() && v >= 0.0);
        }
    }

    /// Closed-form oracle on constant iterates: with constant Theta fields
    /// and a nodally linear P, each estimator term reduces to a product of
    /// constitutive differences, |grad P|, and the domain area.
    #[test]
    fn estimator_matches_closed_form_on_constant_fields() {
        let cfg = TwoPhaseConfig { gamma: 0.5, mesh_n: 3, ..Default::default() };
        let (problem, _) = TwoPhaseProblem::new(cfg.clone());
        let con = problem.con;
        let n = problem.n();
        let (a, b) = (0.64, 0.49);
        let grad = [0.3, -0.2];
        let p_lin: Vec<f64> = problem
            .space_p
            .dof_coords
            .iter()
            .map(|&[x, y]| grad[0] * x + grad[1] * y)
            .collect();
        let k_state = TwoPhaseState { theta: vec![a; n], p: p_lin.clone() };
        let km1_state = TwoPhaseState { theta: vec![b; n], p: p_lin };
        let l = 2.0;
        let g2 = grad[0] * grad[0] + grad[1] * grad[1];
        let (sa, sb) = (con.s(a), con.s(b));
        let kappa = cfg.kappa;
        let eta_s_sq = (l * (a - b) - (sa - sb)).powi(2) / con.s_prime(a);
        let ca = con.f_w(sa) * kappa * con.lambda_t(sa);
        let cb = con.f_w(sb) * kappa * con.lambda_t(sb);
        let eta_th_sq = (ca - cb).powi(2) * g2;
        let (wa, wb) = (kappa * con.lambda_t(sa), kappa * con.lambda_t(sb));
        let eta_lt_sq = (wa - wb).powi(2) * g2 / wa;
        let expected = (eta_s_sq + cfg.tau * (eta_th_sq + eta_lt_sq)).sqrt();
        let got = problem.eta_l_to_n(l, &km1_state, &k_state).unwrap();
        assert!(
            (got - expected).abs() <= 1e-12 * expected,
            "eta_1to2 {got} vs closed form {expected}"
        );
    }

    /// With gamma = 1 and L = 1 the L-to-L eta_s term vanishes identically.
    #[test]
    fn linear_saturation_kills_eta_s() {
        let cfg = TwoPhaseConfig { gamma: 1.0, mesh_n: 3, l: 1.0, ..Default::default() };
        let (problem, state) = TwoPhaseProblem::new(cfg);
        let n = problem.n();
        let kicked = TwoPhaseState {
            theta: state.theta.iter().map(|t| (t * 0.9 + 0.05).min(1.0)).collect(),
            p: vec![0.0; n],
        };
        // P = 0 on both iterates: the gradient terms vanish, so the whole
        // 1->1 estimator reduces to eta_s, which is identically zero
        let zero_p = TwoPhaseState { theta: state.theta.clone(), p: vec![0.0; n] };
        let e = problem.eta_l_to_l(1.0, &zero_p, &kicked).unwrap();
        assert!(e <= 1e-14, "eta_s should vanish for linear s, got {e}");
    }

    /// Newton-to-Newton eta_s term is the second-order Taylor remainder of s.
    #[test]
    fn eta_n_to_n_has_second_order_remainder() {
        let cfg = TwoPhaseConfig { gamma: 0.5, mesh_n: 2, ..Default::default() };
        let (problem, _) = TwoPhaseProblem::new(cfg);
        let con = problem.con;
        let n = problem.n();
        let base = 0.25;
        let mut prev_val = f64::NAN;
        for delta in [1e-2, 1e-3, 1e-4] {
            let km1 = TwoPhaseState { theta: vec![base; n], p: vec![0.0; n] };
            let k = TwoPhaseState { theta: vec![base + delta; n], p: vec![0.0; n] };
            let e = problem.eta_n_to_n(&km1, &k).unwrap();
            // remainder of s around base: |s(base+d) - s(base) - s'(base) d|
            let rem = (con.s(base + delta) - con.s(base) - con.s_prime(base) * delta).abs();
            let expected = rem / con.s_prime(base + delta).sqrt();
            // the remainder cancels ~4 leading digits at the smallest delta,
            // so ULP noise in powf caps the achievable agreement
            assert!((e - expected).abs() <= 1e-6 * expected.max(1e-300), "{e} vs {expected}");
            // second order: shrinking delta by 10 shrinks eta by ~100
            if prev_val.is_finite() {
                let ratio = prev_val / e;
                assert!(ratio > 50.0 && ratio < 200.0, "ratio {ratio}");
            }
            prev_val = e;
        }
    }

    /// Estimators respond continuously to iterate perturbations.
    #[test]
    fn estimators_are_continuous_in_iterates() {
        let (problem, state) = TwoPhaseProblem::new(small_cfg(0.7));
        let n = problem.n();
        let kicked = TwoPhaseState {
            theta: state.theta.iter().map(|t| (t * 0.8 + 0.1).min(1.0)).collect(),
            p: state.p.iter().map(|p| p * 0.9).collect(),
        };
        let base = problem.eta_l_to_n(1.0, &state, &kicked).unwrap();
        let mut wiggled = kicked.clone();
        for v in wiggled.theta.iter_mut().chain(wiggled.p.iter_mut()) {
            *v += 1e-8;
        }
        let moved = problem.eta_l_to_n(1.0, &state, &wiggled).unwrap();
        assert!((moved - base).abs() <= 1e-6 * base, "{moved} vs {base}");
        let _ = n;
    }

    #[test]
    fn switching_rules_fire_on_plain_inputs() {
        let cfg = TwoPhaseConfig::default();
        let mut ctrl = TwoPhaseSwitching::new(&cfg);
        let mut rec = IterationRecord {
            k: 1,
            scheme: SchemeId::TwophaseL,
            l_value: 1.0,
            tau: 0.1,
            eta_inc: 1.0,
            estimators: Estimators { e_1to2: Some(0.5), ..Default::default() },
            eff_index: None,
            action: Action::None,
        };
        assert_eq!(ctrl.decide(&rec), Action::SwitchTo(SchemeId::TwophaseNewton));
        rec.scheme = SchemeId::TwophaseNewton;
        rec.estimators = Estimators { e_2to2: Some(2.0), ..Default::default() };
        rec.eta_inc = 1.0;
        assert_eq!(ctrl.decide(&rec), Action::SwitchTo(SchemeId::TwophaseL));
    }

    #[test]
    fn adaptive_l_rules_fire_on_plain_inputs() {
        let cfg = TwoPhaseConfig { l: 1.0, ..Default::default() };
        let mut ctrl = TwoPhaseAdaptiveL::new(&cfg);
        let mut rec = IterationRecord {
            k: 1,
            scheme: SchemeId::TwophaseL,
            l_value: 1.0,
            tau: 0.1,
            eta_inc: 1.0,
            estimators: Estimators { e_1to1: Some(0.9), ..Default::default() },
            eff_index: None,
            action: Action::None,
        };
        assert_eq!(ctrl.decide(&rec), Action::LDown);
        assert!((ctrl.l - 0.8).abs() < 1e-15);
        rec.estimators.e_1to1 = Some(1.1);
        assert_eq!(ctrl.decide(&rec), Action::LUp);
        assert!((ctrl.l - 0.8 * 2.0f64.sqrt()).abs() < 1e-15);
        // never two switches in one decision: a single action is returned
        rec.estimators.e_1to1 = Some(0.5);
        assert_eq!(ctrl.decide(&rec), Action::None);
    }
}
