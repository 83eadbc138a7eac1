//! The adaptive-iteration engine.
//!
//! A scheme is one linear solve per iteration: a bilinear form frozen at the
//! current iterate, the nonlinear residual there, and the norm induced by the
//! form's symmetric part. Problems plug schemes in through [`Problem`];
//! adaptive logic (switching, stabilization tuning, time-step control) sits
//! behind [`Controller`]. The engine runs the iteration loop, records one
//! [`IterationRecord`] per linear solve, and applies controller actions.
//!
//! Estimators at iteration `k` are built from iterates `k` and `k-1`, where
//! iterate 0 is the initial guess of the time step, so switching rules can
//! already fire after the first computed iterate. The effectivity index
//! pairing an estimator with the increment it predicted exists from the
//! second same-scheme iteration on.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SchemeId {
    TwophaseL,
    TwophaseNewton,
    SurfL,
    SurfNewton,
    BiotFixedStress,
}

impl SchemeId {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::TwophaseL => "TWOPHASE_L",
            SchemeId::TwophaseNewton => "TWOPHASE_NEWTON",
            SchemeId::SurfL => "SURF_L",
            SchemeId::SurfNewton => "SURF_NEWTON",
            SchemeId::BiotFixedStress => "BIOT_FIXED_STRESS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    None,
    SwitchTo(SchemeId),
    LUp,
    LDown,
    TauHalve,
    TauDouble,
    StopConverged,
    StopDiverged,
}

impl Action {
    pub fn label(self) -> String {
        match self {
            Action::None => "NONE".into(),
            Action::SwitchTo(s) => format!("SWITCH_TO:{}", s.as_str()),
            Action::LUp => "L_UP".into(),
            Action::LDown => "L_DOWN".into(),
            Action::TauHalve => "TAU_HALVE".into(),
            Action::TauDouble => "TAU_DOUBLE".into(),
            Action::StopConverged => "STOP_CONVERGED".into(),
            Action::StopDiverged => "STOP_DIVERGED".into(),
        }
    }
}

/// A posteriori estimator values computed at one iteration. Names follow the
/// scheme numbering: 1/2 are the two-phase L-scheme and Newton, 3/4 the
/// surfactant ones, 5 is fixed-stress.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Estimators {
    pub e_1to2: Option<f64>,
    pub e_2to2: Option<f64>,
    pub e_1to1: Option<f64>,
    pub e_3to4: Option<f64>,
    pub e_4to4: Option<f64>,
    pub e_5to5: Option<f64>,
    /// Fixed-stress split of `e_5to5` for diagnostics.
    pub e_5_flow_mech: Option<(f64, f64)>,
}

impl Estimators {
    /// The estimator predicting the next increment of the same scheme.
    pub fn same_scheme(&self, scheme: SchemeId) -> Option<f64> {
        match scheme {
            SchemeId::TwophaseL => self.e_1to1,
            SchemeId::TwophaseNewton => self.e_2to2,
            SchemeId::SurfL => None,
            SchemeId::SurfNewton => self.e_4to4,
            SchemeId::BiotFixedStress => self.e_5to5,
        }
    }
}

/// Which estimators a controller wants computed each iteration.
#[derive(Debug, Clone, Copy, Default)]
pub struct EstimatorSet {
    pub e_1to2: bool,
    pub e_2to2: bool,
    pub e_1to1: bool,
    pub e_3to4: bool,
    pub e_4to4: bool,
    pub e_5to5: bool,
}

/// One linear solve and its bookkeeping.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub k: usize,
    pub scheme: SchemeId,
    pub l_value: f64,
    pub tau: f64,
    /// Incremental error: the scheme norm of the new increment, weights
    /// frozen at the previous iterate.
    pub eta_inc: f64,
    pub estimators: Estimators,
    /// Previous same-scheme estimator over this iteration's `eta_inc`.
    pub eff_index: Option<f64>,
    pub action: Action,
}

/// Stopping thresholds per state field plus the iteration cap.
#[derive(Debug, Clone)]
pub struct StoppingRule {
    pub criteria: Vec<FieldCriterion>,
    pub max_iter: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FieldCriterion {
    pub threshold: f64,
    pub relative: bool,
}

impl StoppingRule {
    pub fn absolute(threshold: f64, fields: usize, max_iter: usize) -> Self {
        assert!(threshold > 0.0 && max_iter >= 1);
        StoppingRule {
            criteria: vec![FieldCriterion { threshold, relative: false }; fields],
            max_iter,
        }
    }
}

/// True when every per-field criterion holds. `pairs` carries, per field, the
/// L2 norm of the increment and the L2 norm of the current iterate.
pub fn check_stopping(pairs: &[(f64, f64)], rule: &StoppingRule) -> bool {
    assert_eq!(pairs.len(), rule.criteria.len());
    pairs.iter().zip(&rule.criteria).all(|(&(delta, norm), c)| {
        let bound = if c.relative { c.threshold * norm } else { c.threshold };
        delta <= bound
    })
}

/// Ratio of a previous estimator to the incremental error it predicted;
/// undefined on a vanishing increment.
pub fn effectivity_index(prev_estimator: f64, eta_inc_now: f64) -> Option<f64> {
    (eta_inc_now > 0.0).then(|| prev_estimator / eta_inc_now)
}

#[derive(Debug, Error)]
pub enum StepError {
    #[error("linear solve failed: {0}")]
    Solver(#[from] crate::lu::LuError),
    #[error("assembly failed: {0}")]
    Assembly(#[from] crate::assemble::AssembleError),
}

/// Result of one scheme step: the new iterate and the relative defect of the
/// identity `B_lin(delta, delta) = -<R, delta>`, which certifies that the
/// increment solved the assembled linear system.
pub struct StepOutcome<S> {
    pub state: S,
    pub lin_identity_rel_err: f64,
}

pub trait Problem {
    type State: Clone;

    /// Called once per time-step attempt before the iterations, with the
    /// previous time solution, the target time and the step size.
    fn prepare_step(&mut self, prev: &Self::State, t_new: f64, tau: f64);

    fn scheme_step(
        &mut self,
        scheme: SchemeId,
        l: f64,
        tau: f64,
        prev_time: &Self::State,
        iterate: &Self::State,
    ) -> Result<StepOutcome<Self::State>, StepError>;

    /// Scheme norm of `next - weights_at` with weights frozen at `weights_at`.
    fn eta_inc(&self, scheme: SchemeId, l: f64, tau: f64, weights_at: &Self::State, next: &Self::State) -> f64;

    fn estimators(
        &self,
        scheme: SchemeId,
        l: f64,
        tau: f64,
        km1: &Self::State,
        k: &Self::State,
        want: EstimatorSet,
    ) -> Result<Estimators, StepError>;

    /// Per-field (increment L2, iterate L2) pairs for the stopping rule.
    fn stopping_pairs(&self, km1: &Self::State, k: &Self::State) -> Vec<(f64, f64)>;

    fn finite(&self, s: &Self::State) -> bool;
}

pub trait Controller {
    /// Start of a fresh time step (not of a halve retry). `prev_iters` is the
    /// converged iteration count of the previous step, when there was one.
    /// May return `Action::TauDouble`.
    fn begin_step(&mut self, prev_iters: Option<usize>) -> Option<Action>;
    fn scheme(&self) -> SchemeId;
    fn l_value(&self) -> f64;
    fn tau(&self) -> f64;
    /// Cap tau so the step does not overshoot the horizon.
    fn clamp_tau(&mut self, max_tau: f64);
    fn needed(&self) -> EstimatorSet;
    /// Inspect the finished iteration and mutate internal state. A returned
    /// `TauHalve` means: abandon this attempt, tau is already halved.
    fn decide(&mut self, rec: &IterationRecord) -> Action;
    /// Whether a hard failure (singular solve, NaN, iteration cap) should be
    /// retried with a halved step, as the time-step controller does.
    fn halve_on_failure(&mut self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Converged,
    Diverged,
    HalveRequested,
}

pub struct TimeStepOutput<S> {
    pub state: Option<S>,
    pub records: Vec<IterationRecord>,
    pub status: StepStatus,
    pub iters: usize,
}

/// Iterate one time step: controller picks scheme and parameters, the problem
/// solves one linear step, estimators and effectivity indices are recorded,
/// the controller reacts, and the loop stops on the rule or the cap.
pub fn run_time_step<P: Problem, C: Controller>(
    problem: &mut P,
    controller: &mut C,
    stopping: &StoppingRule,
    prev_time: &P::State,
    begin_action: Option<Action>,
) -> TimeStepOutput<P::State> {
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut state_km1 = prev_time.clone();
    let mut pending = begin_action;
    for k in 1..=stopping.max_iter {
        let scheme = controller.scheme();
        let (l, tau) = (controller.l_value(), controller.tau());
        let outcome = match problem.scheme_step(scheme, l, tau, prev_time, &state_km1) {
            Ok(o) => o,
            Err(_) => {
                records.push(failure_record(k, scheme, l, tau));
                return TimeStepOutput { state: None, records, status: StepStatus::Diverged, iters: k };
            }
        };
        if !problem.finite(&outcome.state) || outcome.lin_identity_rel_err > 1e-8 {
            records.push(failure_record(k, scheme, l, tau));
            return TimeStepOutput { state: None, records, status: StepStatus::Diverged, iters: k };
        }
        let eta_inc = problem.eta_inc(scheme, l, tau, &state_km1, &outcome.state);
        let want = controller.needed();
        let estimators = match problem.estimators(scheme, l, tau, &state_km1, &outcome.state, want) {
            Ok(e) => e,
            Err(_) => {
                records.push(failure_record(k, scheme, l, tau));
                return TimeStepOutput { state: None, records, status: StepStatus::Diverged, iters: k };
            }
        };
        let eff_index = records.last().and_then(|prev| {
            if prev.scheme == scheme {
                prev.estimators
                    .same_scheme(scheme)
                    .and_then(|e| effectivity_index(e, eta_inc))
            } else {
                None
            }
        });
        let mut rec = IterationRecord {
            k,
            scheme,
            l_value: l,
            tau,
            eta_inc,
            estimators,
            eff_index,
            action: Action::None,
        };
        if check_stopping(&problem.stopping_pairs(&state_km1, &outcome.state), stopping) {
            rec.action = Action::StopConverged;
            records.push(rec);
            return TimeStepOutput {
                state: Some(outcome.state),
                records,
                status: StepStatus::Converged,
                iters: k,
            };
        }
        let action = controller.decide(&rec);
        rec.action = match (pending.take(), action) {
            (Some(marker), Action::None) => marker,
            (_, a) => a,
        };
        let halted = rec.action == Action::TauHalve;
        records.push(rec);
        if halted {
            return TimeStepOutput { state: None, records, status: StepStatus::HalveRequested, iters: k };
        }
        state_km1 = outcome.state;
    }
    if let Some(last) = records.last_mut() {
        if last.action == Action::None {
            last.action = Action::StopDiverged;
        }
    }
    let iters = records.len();
    TimeStepOutput { state: None, records, status: StepStatus::Diverged, iters }
}

fn failure_record(k: usize, scheme: SchemeId, l: f64, tau: f64) -> IterationRecord {
    IterationRecord {
        k,
        scheme,
        l_value: l,
        tau,
        eta_inc: f64::NAN,
        estimators: Estimators::default(),
        eff_index: None,
        action: Action::StopDiverged,
    }
}

/// One trace line: a record placed at a time step attempt.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub step: usize,
    pub time: f64,
    pub rec: IterationRecord,
}

#[derive(Debug, Clone, Copy)]
pub struct TransientConfig {
    pub t_end: f64,
    /// Below this step size an adaptive-tau run aborts.
    pub tau_min: f64,
    /// Fixed-grid runs step to `n * tau0` exactly; adaptive runs accumulate.
    pub fixed_grid: bool,
}

pub struct TransientResult<S> {
    pub state: S,
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    pub steps_completed: usize,
    pub failed_attempts: usize,
}

/// March the problem over `[0, t_end]`, restarting abandoned steps from the
/// previous time solution with the controller's halved step size.
pub fn run_transient<P: Problem, C: Controller>(
    problem: &mut P,
    controller: &mut C,
    stopping: &StoppingRule,
    initial: P::State,
    cfg: TransientConfig,
) -> TransientResult<P::State> {
    let tau0 = controller.tau();
    let n_fixed_steps = if cfg.fixed_grid {
        (cfg.t_end / tau0).round() as usize
    } else {
        usize::MAX
    };
    let mut state = initial;
    let mut rows = Vec::new();
    let mut t = 0.0f64;
    let mut step = 1usize;
    let mut steps_completed = 0usize;
    let mut failed_attempts = 0usize;
    let mut prev_iters: Option<usize> = None;
    let mut fresh_step = true;

    loop {
        if cfg.fixed_grid {
            if step > n_fixed_steps {
                break;
            }
        } else if t >= cfg.t_end - 1e-12 * cfg.t_end.max(1.0) {
            break;
        }
        let begin_action = if fresh_step { controller.begin_step(prev_iters) } else { None };
        if !cfg.fixed_grid {
            controller.clamp_tau(cfg.t_end - t);
        }
        let tau = controller.tau();
        let t_new = if cfg.fixed_grid { step as f64 * tau0 } else { t + tau };
        problem.prepare_step(&state, t_new, tau);
        let out = run_time_step(problem, controller, stopping, &state, begin_action);
        for rec in out.records {
            rows.push(TraceRow { step, time: t_new, rec });
        }
        match out.status {
            StepStatus::Converged => {
                state = out.state.expect("converged step carries a state");
                t = t_new;
                step += 1;
                steps_completed += 1;
                prev_iters = Some(out.iters);
                fresh_step = true;
            }
            StepStatus::HalveRequested => {
                failed_attempts += 1;
                fresh_step = false;
                if controller.tau() < cfg.tau_min {
                    return TransientResult { state, rows, converged: false, steps_completed, failed_attempts };
                }
            }
            StepStatus::Diverged => {
                failed_attempts += 1;
                if controller.halve_on_failure() {
                    fresh_step = false;
                    if controller.tau() < cfg.tau_min {
                        return TransientResult { state, rows, converged: false, steps_completed, failed_attempts };
                    }
                } else {
                    return TransientResult { state, rows, converged: false, steps_completed, failed_attempts };
                }
            }
        }
    }
    TransientResult { state, rows, converged: true, steps_completed, failed_attempts }
}

/// Fixed scheme, fixed parameters: the baseline non-adaptive controller.
pub struct FixedController {
    pub scheme_id: SchemeId,
    pub l: f64,
    pub tau: f64,
    pub estimators: EstimatorSet,
}

impl Controller for FixedController {
    fn begin_step(&mut self, _prev_iters: Option<usize>) -> Option<Action> {
        None
    }
    fn scheme(&self) -> SchemeId {
        self.scheme_id
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
        self.estimators
    }
    fn decide(&mut self, _rec: &IterationRecord) -> Action {
        Action::None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effectivity_ratio() {
        assert_eq!(effectivity_index(2.0, 1.0), Some(2.0));
        assert_eq!(effectivity_index(0.7, 0.7), Some(1.0));
        assert_eq!(effectivity_index(1.0, 0.0), None);
    }

    #[test]
    fn stopping_rule_cases() {
        let rule = StoppingRule::absolute(1e-6, 2, 50);
        assert!(check_stopping(&[(0.0, 1.0), (0.0, 2.0)], &rule));
        assert!(!check_stopping(&[(1e-5, 1.0), (0.0, 1.0)], &rule));
        let rel = StoppingRule {
            criteria: vec![FieldCriterion { threshold: 1e-6, relative: true }],
            max_iter: 10,
        };
        assert!(check_stopping(&[(5e-7 * 3.0, 3.0)], &rel));
        assert!(!check_stopping(&[(2e-6 * 3.0, 3.0)], &rel));
    }

    /// Scalar fixed-point toy problem: x_{k+1} = x_k - (x_k - a) with the
    /// "scheme" solving exactly. Converges in one iteration, and the trace
    /// invariants hold.
    struct ToyProblem {
        target: f64,
    }

    impl Problem for ToyProblem {
        type State = f64;
        fn prepare_step(&mut self, _prev: &f64, _t: f64, _tau: f64) {}
        fn scheme_step(
            &mut self,
            _scheme: SchemeId,
            _l: f64,
            _tau: f64,
            _prev: &f64,
            it: &f64,
        ) -> Result<StepOutcome<f64>, StepError> {
            let delta = self.target - it;
            let _ = delta;
            Ok(StepOutcome { state: self.target, lin_identity_rel_err: 0.0 })
        }
        fn eta_inc(&self, _s: SchemeId, _l: f64, _t: f64, w: &f64, n: &f64) -> f64 {
            (n - w).abs()
        }
        fn estimators(
            &self,
            _s: SchemeId,
            _l: f64,
            _t: f64,
            _a: &f64,
            _b: &f64,
            _w: EstimatorSet,
        ) -> Result<Estimators, StepError> {
            Ok(Estimators::default())
        }
        fn stopping_pairs(&self, a: &f64, b: &f64) -> Vec<(f64, f64)> {
            vec![((b - a).abs(), b.abs())]
        }
        fn finite(&self, s: &f64) -> bool {
            s.is_finite()
        }
    }

    #[test]
    fn fixed_point_converges_in_one_iteration() {
        let mut p = ToyProblem { target: 2.0 };
        let mut c = FixedController {
            scheme_id: SchemeId::TwophaseL,
            l: 1.0,
            tau: 0.5,
            estimators: EstimatorSet::default(),
        };
        let rule = StoppingRule::absolute(1e-6, 1, 20);
        let out = run_time_step(&mut p, &mut c, &rule, &2.0, None);
        assert_eq!(out.status, StepStatus::Converged);
        assert_eq!(out.records.len(), 1);
        assert!(out.records[0].eta_inc <= 1e-12);
        assert_eq!(out.records[0].action, Action::StopConverged);
    }

    #[test]
    fn trace_has_increasing_k_without_gaps() {
        let mut p = ToyProblem { target: 1.0 };
        let mut c = FixedController {
            scheme_id: SchemeId::TwophaseL,
            l: 1.0,
            tau: 0.25,
            estimators: EstimatorSet::default(),
        };
        let rule = StoppingRule::absolute(1e-9, 1, 20);
        let res = run_transient(
            &mut p,
            &mut c,
            &rule,
            0.0,
            TransientConfig { t_end: 1.0, tau_min: 1e-6, fixed_grid: true },
        );
        assert!(res.converged);
        assert_eq!(res.steps_completed, 4);
        let mut per_step: std::collections::HashMap<usize, Vec<usize>> = Default::default();
        for row in &res.rows {
            per_step.entry(row.step).or_default().push(row.rec.k);
        }
        for ks in per_step.values() {
            for (i, &k) in ks.iter().enumerate() {
                assert_eq!(k, i + 1, "strictly increasing k without gaps");
            }
        }
    }
}
