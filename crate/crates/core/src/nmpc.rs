//! Single-shooting nonlinear MPC.
//!
//! Controls over the horizon are the only decision variables; states come
//! from RK4 rollouts. Obstacles enter as a quadratic penalty on the positive
//! part of `1 + margin − (p − c)ᵀP(p − c)`. The inner problem is solved by a
//! PANOC-type method: projected gradient steps on a box, accelerated by
//! L-BFGS directions accepted through a forward-backward envelope line
//! search.

use std::collections::VecDeque;
use std::ops::AddAssign;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::collision::ObstacleField;
use crate::dynamics::{rk4_jacobians, rk4_step, rk4_vjp, Dynamics};
use crate::error::{check_dim, Error, Result};
use crate::lqr::{DiagonalWeights, QuadraticCost};
use crate::trajectory::Trajectory;

/// Per-coordinate bounds; infinite entries leave a coordinate free.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxSet {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl BoxSet {
    pub fn new(lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        check_dim("box bounds", lo.len(), hi.len())?;
        if lo
            .iter()
            .zip(hi.iter())
            .any(|(l, h)| !(l <= h) || l.is_nan() || h.is_nan())
        {
            return Err(Error::Config("box bounds need lo ≤ hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn unbounded(n: usize) -> Self {
        Self {
            lo: DVector::from_element(n, f64::NEG_INFINITY),
            hi: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn project(&self, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.lo.iter().zip(self.hi.iter()))
                .map(|(v, (l, h))| v.clamp(*l, *h)),
        )
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        u.iter()
            .zip(self.lo.iter().zip(self.hi.iter()))
            .all(|(v, (l, h))| l <= v && v <= h)
    }
}

/// Smooth cost with gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value_and_gradient(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)>;
    fn value(&self, u: &DVector<f64>) -> Result<f64> {
        Ok(self.value_and_gradient(u)?.0)
    }
}

/// Objective from a closure returning value and gradient.
pub struct FnObjective<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&DVector<f64>) -> (f64, DVector<f64>)> Objective for FnObjective<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_and_gradient(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        Ok((self.f)(u))
    }
}

/// `v ↦ f(T v)` for an invertible `T`.
pub struct Preconditioned<'a> {
    pub inner: &'a dyn Objective,
    pub map: &'a DMatrix<f64>,
}

impl Objective for Preconditioned<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn value_and_gradient(&self, v: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let (f, g) = self.inner.value_and_gradient(&(self.map * v))?;
        Ok((f, self.map.tr_mul(&g)))
    }

    fn value(&self, v: &DVector<f64>) -> Result<f64> {
        self.inner.value(&(self.map * v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PanocConfig {
    /// Bound on the fixed-point residual `‖u − Π(u − γ∇f)‖/γ`.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub memory: usize,
    /// Largest number of τ halvings before the plain projected step.
    pub max_halvings: usize,
}

impl Default for PanocConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 500,
            memory: 10,
            max_halvings: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SolverState {
    pub iterate: DVector<f64>,
    pub lipschitz: f64,
    pub gamma: f64,
    pub memory: VecDeque<(DVector<f64>, DVector<f64>)>,
    pub residual: f64,
    pub iterations: usize,
    pub status: SolveStatus,
    /// Envelope value before and after every accepted step, at the step
    /// size in force for that step.
    pub envelope: Vec<[f64; 2]>,
    /// Accepted steps that fell back to the plain projected step.
    pub fallbacks: usize,
}

fn recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::DivergedRollout(_) | Error::NumericalOverflow(_) | Error::EulerSingularity { .. }
    )
}

/// Two-loop L-BFGS product `H r`.
fn lbfgs_apply(memory: &VecDeque<(DVector<f64>, DVector<f64>)>, r: &DVector<f64>) -> DVector<f64> {
    let Some((s_last, y_last)) = memory.back() else {
        return r.clone();
    };
    let mut q = r.clone();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y) in memory.iter().rev() {
        let rho = 1.0 / y.dot(s);
        let a = rho * s.dot(&q);
        q.axpy(-a, y, 1.0);
        alphas.push(a);
    }
    let mut z = q * (s_last.dot(y_last) / y_last.dot(y_last));
    for ((s, y), a) in memory.iter().zip(alphas.iter().rev()) {
        let rho = 1.0 / y.dot(s);
        let b = rho * y.dot(&z);
        z.axpy(a - b, s, 1.0);
    }
    z
}

struct Point {
    u: DVector<f64>,
    f: f64,
    grad: DVector<f64>,
}

/// Forward-backward quantities of a point at step `gamma`.
struct Forward {
    bar: DVector<f64>,
    r: DVector<f64>,
    envelope: f64,
}

fn forward(p: &Point, set: &BoxSet, gamma: f64) -> Forward {
    let bar = set.project(&(&p.u - &p.grad * gamma));
    let r = &p.u - &bar;
    let envelope = p.f - p.grad.dot(&r) + r.norm_squared() / (2.0 * gamma);
    Forward { bar, r, envelope }
}

fn evaluate(obj: &dyn Objective, u: DVector<f64>) -> Result<Point> {
    let (f, grad) = obj.value_and_gradient(&u)?;
    if !f.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalOverflow("objective"));
    }
    Ok(Point { u, f, grad })
}

/// Minimizes `obj` over `set` from `u0`.
pub fn panoc_solve(
    obj: &dyn Objective,
    set: &BoxSet,
    u0: &DVector<f64>,
    config: &PanocConfig,
) -> Result<(DVector<f64>, SolverState)> {
    let n = obj.dim();
    check_dim("initial guess", n, u0.len())?;
    check_dim("box", n, set.dim())?;
    if u0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("initial guess is not finite".into()));
    }
    if !(config.tolerance > 0.0) || config.memory == 0 {
        return Err(Error::Config("solver tolerance and memory must be positive".into()));
    }
    let mut p = evaluate(obj, u0.clone())?;

    // two-point Lipschitz estimate
    let delta = DVector::from_iterator(n, p.u.iter().map(|v| (1e-6 * v.abs()).max(1e-6)));
    let probe = evaluate(obj, &p.u + &delta)?;
    let mut lipschitz = ((&probe.grad - &p.grad).norm() / delta.norm()).max(1e-8);
    let alpha = 0.95;
    let beta = 0.1;
    let mut gamma = alpha / lipschitz;

    let mut memory: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::new();
    let mut envelope = Vec::new();
    let mut fallbacks = 0;
    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut iterations = 0;

    loop {
        // backtrack on the Lipschitz estimate until the projected step obeys
        // the descent lemma
        let mut fb = forward(&p, set, gamma);
        for _ in 0..60 {
            let f_bar = match obj.value(&fb.bar) {
                Ok(v) => v,
                Err(e) if recoverable(&e) => f64::INFINITY,
                Err(e) => return Err(e),
            };
            let bound = p.f - p.grad.dot(&fb.r) + 0.5 * lipschitz * fb.r.norm_squared();
            if f_bar <= bound + 1e-12 * p.f.abs().max(1.0) {
                break;
            }
            lipschitz *= 2.0;
            gamma = alpha / lipschitz;
            memory.clear();
            fb = forward(&p, set, gamma);
        }
        let residual = fb.r.norm() / gamma;
        let candidate = if set.contains(&p.u) {
            p.u.clone()
        } else {
            fb.bar.clone()
        };
        if best.as_ref().is_none_or(|(r, _)| residual < *r) {
            best = Some((residual, candidate.clone()));
        }
        if residual <= config.tolerance {
            let done = if set.contains(&p.u) {
                Some((p.u.clone(), residual))
            } else {
                // the projected point must meet the tolerance on its own
                match evaluate(obj, fb.bar.clone()) {
                    Ok(q) => {
                        let qf = forward(&q, set, gamma);
                        let rq = qf.r.norm() / gamma;
                        (rq <= config.tolerance).then_some((q.u, rq))
                    }
                    Err(e) if recoverable(&e) => None,
                    Err(e) => return Err(e),
                }
            };
            if let Some((u, r)) = done {
                return Ok((
                    u.clone(),
                    SolverState {
                        iterate: u,
                        lipschitz,
                        gamma,
                        memory,
                        residual: r,
                        iterations,
                        status: SolveStatus::Converged,
                        envelope,
                        fallbacks,
                    },
                ));
            }
        }
        if iterations >= config.max_iterations {
            let (residual, u) = best.expect("at least one iterate");
            return Ok((
                u.clone(),
                SolverState {
                    iterate: u,
                    lipschitz,
                    gamma,
                    memory,
                    residual,
                    iterations,
                    status: SolveStatus::MaxIterations,
                    envelope,
                    fallbacks,
                },
            ));
        }

        let d = -lbfgs_apply(&memory, &fb.r);
        let sigma = beta * (1.0 - gamma * lipschitz) / (2.0 * gamma);
        let target = fb.envelope - sigma * fb.r.norm_squared();
        let mut tau = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_halvings {
            let u_new = &fb.bar + (&fb.r + &d) * tau;
            match evaluate(obj, u_new) {
                Ok(q) => {
                    let qf = forward(&q, set, gamma);
                    if qf.envelope <= target {
                        accepted = Some((q, qf));
                        break;
                    }
                }
                Err(e) if recoverable(&e) => {}
                Err(e) => return Err(e),
            }
            tau *= 0.5;
        }
        let (q, qf) = match accepted {
            Some(a) => a,
            None => {
                fallbacks += 1;
                match evaluate(obj, fb.bar.clone()) {
                    Ok(q) => {
                        let qf = forward(&q, set, gamma);
                        (q, qf)
                    }
                    // the value passed but the gradient did not: shorten the step
                    Err(e) if recoverable(&e) => {
                        lipschitz *= 2.0;
                        gamma = alpha / lipschitz;
                        memory.clear();
                        iterations += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
        };
        envelope.push([fb.envelope, qf.envelope]);
        let s = &q.u - &p.u;
        let y = &fb.r - &qf.r;
        let y = -y;
        if s.dot(&y) > 1e-12 * s.norm_squared() {
            memory.push_back((s, y));
            if memory.len() > config.memory {
                memory.pop_front();
            }
        }
        p = q;
        iterations += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_h")]
    pub h: f64,
    /// Empty weights are filled in by the caller.
    #[serde(default)]
    pub weights: DiagonalWeights,
    #[serde(default = "default_solver")]
    pub solver: PanocConfig,
    #[serde(default = "default_penalty")]
    pub penalty_initial: f64,
    #[serde(default = "default_growth")]
    pub penalty_growth: f64,
    #[serde(default = "default_outer")]
    pub max_outer: usize,
    /// Largest accepted penalty residual.
    #[serde(default = "default_constraint_tolerance")]
    pub constraint_tolerance: f64,
    /// Added to 1 in the obstacle residual, in quadratic-form units.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Rescale the controls by the Gauss-Newton curvature before solving.
    #[serde(default = "default_precondition")]
    pub precondition: bool,
    #[serde(default)]
    pub u_min: Option<Vec<f64>>,
    #[serde(default)]
    pub u_max: Option<Vec<f64>>,
}

fn default_horizon() -> usize {
    10
}

fn default_h() -> f64 {
    0.2
}

fn default_solver() -> PanocConfig {
    PanocConfig {
        tolerance: 1e-3,
        max_iterations: 100,
        memory: 10,
        max_halvings: 20,
    }
}

fn default_penalty() -> f64 {
    100.0
}

fn default_growth() -> f64 {
    10.0
}

fn default_outer() -> usize {
    4
}

fn default_constraint_tolerance() -> f64 {
    1e-3
}

fn default_precondition() -> bool {
    true
}

fn default_margin() -> f64 {
    0.1
}

impl MpcConfig {
    pub fn with_weights(weights: DiagonalWeights) -> Self {
        Self {
            horizon: default_horizon(),
            h: default_h(),
            weights,
            solver: default_solver(),
            penalty_initial: default_penalty(),
            penalty_growth: default_growth(),
            max_outer: default_outer(),
            constraint_tolerance: default_constraint_tolerance(),
            margin: default_margin(),
            precondition: default_precondition(),
            u_min: None,
            u_max: None,
        }
    }

    pub fn validate(&self, n_x: usize, n_u: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("mpc: {m}")));
        if self.weights.q.len() != n_x || self.weights.q_n.len() != n_x || self.weights.r.len() != n_u {
            return bad(&format!("weights need {n_x} state and {n_u} control entries"));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.h > 0.0) {
            return bad("step must be positive");
        }
        if !(self.solver.tolerance > 0.0) || self.solver.memory == 0 {
            return bad("solver tolerance and memory must be positive");
        }
        if !(self.penalty_growth > 1.0) || !(self.penalty_initial > 0.0) || self.max_outer == 0 {
            return bad("penalty needs a positive start, growth above 1 and at least one outer round");
        }
        if !(self.constraint_tolerance > 0.0) || !(self.margin >= 0.0) {
            return bad("constraint tolerance must be positive and margin non-negative");
        }
        self.control_box(n_u).map(|_| ())
    }

    /// Box over the stacked horizon controls.
    pub fn control_box(&self, n_u: usize) -> Result<BoxSet> {
        let side = |v: &Option<Vec<f64>>, fill: f64| -> Result<DVector<f64>> {
            match v {
                Some(b) => {
                    check_dim("control bound", n_u, b.len())?;
                    Ok(DVector::from_iterator(
                        n_u * self.horizon,
                        b.iter().cycle().take(n_u * self.horizon).copied(),
                    ))
                }
                None => Ok(DVector::from_element(n_u * self.horizon, fill)),
            }
        };
        BoxSet::new(side(&self.u_min, f64::NEG_INFINITY)?, side(&self.u_max, f64::INFINITY)?)
    }
}

/// One horizon of the single-shooting problem.
pub struct MpcProblem<'a, D: Dynamics + ?Sized> {
    pub sys: &'a D,
    pub x0: DVector<f64>,
    /// Reference states for knots `0..=N`.
    pub ref_states: Vec<DVector<f64>>,
    /// Reference controls for steps `0..N`.
    pub ref_controls: Vec<DVector<f64>>,
    pub cost: QuadraticCost,
    pub obstacles: &'a ObstacleField,
    /// Time index of knot 0 for moving obstacles.
    pub k0: usize,
    pub penalty: f64,
    pub margin: f64,
    pub h: f64,
}

impl<D: Dynamics + ?Sized> MpcProblem<'_, D> {
    pub fn horizon(&self) -> usize {
        self.ref_controls.len()
    }

    fn control(&self, u: &DVector<f64>, k: usize) -> DVector<f64> {
        let m = self.sys.control_dim();
        u.rows(k * m, m).into_owned()
    }

    /// States of the rollout, knots `0..=N`.
    pub fn rollout(&self, u: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        let n = self.horizon();
        check_dim("stacked controls", n * self.sys.control_dim(), u.len())?;
        let mut xs = Vec::with_capacity(n + 1);
        xs.push(self.x0.clone());
        for k in 0..n {
            let next = rk4_step(self.sys, &xs[k], &self.control(u, k), self.h).map_err(|e| match e {
                Error::NumericalOverflow(_) => Error::DivergedRollout(format!("state became non-finite at step {k}")),
                e => e,
            })?;
            xs.push(next);
        }
        Ok(xs)
    }

    /// Penalty residuals `1 + margin − form` per obstacle at a knot.
    fn residuals(&self, x: &DVector<f64>, k: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let p = Vector3::new(x[0], x[1], x[2]);
        let margin = self.margin;
        self.obstacles
            .obstacles
            .iter()
            .enumerate()
            .map(move |(i, o)| (i, 1.0 + margin - o.quadratic_form(&p, k)))
    }

    /// Largest positive penalty residual over knots `1..=N`.
    pub fn max_violation(&self, xs: &[DVector<f64>]) -> f64 {
        let mut worst = 0.0f64;
        for (k, x) in xs.iter().enumerate().skip(1) {
            for (_, r) in self.residuals(x, self.k0 + k) {
                worst = worst.max(r);
            }
        }
        worst
    }

    fn cost_of(&self, u: &DVector<f64>, xs: &[DVector<f64>]) -> f64 {
        let n = self.horizon();
        let mut total = 0.0;
        for k in 0..n {
            total += self.cost.running(
                k,
                &(&xs[k] - &self.ref_states[k]),
                &(self.control(u, k) - &self.ref_controls[k]),
            );
        }
        total += self.cost.terminal(&(&xs[n] - &self.ref_states[n]));
        for (k, x) in xs.iter().enumerate().skip(1) {
            for (_, r) in self.residuals(x, self.k0 + k) {
                if r > 0.0 {
                    total += self.penalty * r * r;
                }
            }
        }
        total
    }

    /// Gauss-Newton Hessian of the objective at `u`, penalty curvature
    /// included.
    pub fn gauss_newton_hessian(&self, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let xs = self.rollout(u)?;
        let n = self.horizon();
        let m = self.sys.control_dim();
        let nx = self.sys.state_dim();
        let mut hess = DMatrix::zeros(n * m, n * m);
        // sensitivity of the current knot state to every control
        let mut sens = DMatrix::zeros(nx, n * m);
        for k in 0..n {
            let stage = self.cost.stage(k);
            hess.view_mut((k * m, k * m), (m, m)).add_assign(&stage.r);
            if k > 0 {
                let ps = &stage.p * &sens;
                hess.rows_mut(k * m, m).add_assign(&ps);
                hess.columns_mut(k * m, m).add_assign(&ps.transpose());
            }
            let (a, b) = rk4_jacobians(self.sys, &xs[k], &self.control(u, k), self.h)?;
            sens = &a * sens;
            sens.columns_mut(k * m, m).copy_from(&b);
            let j = k + 1;
            let mut w = if j == n {
                self.cost.q_n.clone()
            } else {
                self.cost.stage(j).q.clone()
            };
            let p = Vector3::new(xs[j][0], xs[j][1], xs[j][2]);
            for (i, r) in self.residuals(&xs[j], self.k0 + j) {
                if r > 0.0 {
                    let o = &self.obstacles.obstacles[i];
                    let g = o.effective_shape() * (p - o.center_at(self.k0 + j)) * 2.0;
                    let mut block = w.view_mut((0, 0), (3, 3));
                    block += g * g.transpose() * (2.0 * self.penalty);
                }
            }
            hess += sens.tr_mul(&(&w * &sens));
        }
        Ok(hess)
    }

    /// Gradient of the penalty term with respect to the knot state.
    fn penalty_gradient(&self, x: &DVector<f64>, k: usize, grad: &mut DVector<f64>) {
        let p = Vector3::new(x[0], x[1], x[2]);
        for (i, r) in self.residuals(x, k) {
            if r > 0.0 {
                let o = &self.obstacles.obstacles[i];
                let g = o.effective_shape() * (p - o.center_at(k)) * (-4.0 * self.penalty * r);
                for j in 0..3 {
                    grad[j] += g[j];
                }
            }
        }
    }
}

impl<D: Dynamics + ?Sized> Objective for MpcProblem<'_, D> {
    fn dim(&self) -> usize {
        self.horizon() * self.sys.control_dim()
    }

    fn value_and_gradient(&self, u: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        rollout_cost_and_gradient(self, u)
    }

    fn value(&self, u: &DVector<f64>) -> Result<f64> {
        let xs = self.rollout(u)?;
        Ok(self.cost_of(u, &xs))
    }
}

/// Cost and adjoint gradient of the single-shooting objective.
pub fn rollout_cost_and_gradient<D: Dynamics + ?Sized>(
    problem: &MpcProblem<'_, D>,
    u: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    let xs = problem.rollout(u)?;
    let cost = problem.cost_of(u, &xs);
    let n = problem.horizon();
    let m = problem.sys.control_dim();
    let mut grad = DVector::zeros(n * m);
    let dx_n = &xs[n] - &problem.ref_states[n];
    let mut lambda = &problem.cost.q_n * &dx_n + &problem.cost.q_n_lin;
    problem.penalty_gradient(&xs[n], problem.k0 + n, &mut lambda);
    for k in (0..n).rev() {
        let stage = problem.cost.stage(k);
        let uk = problem.control(u, k);
        let dx = &xs[k] - &problem.ref_states[k];
        let du = &uk - &problem.ref_controls[k];
        let (bar_x, bar_u) = rk4_vjp(problem.sys, &xs[k], &uk, problem.h, &lambda)?;
        let g_u = &stage.r_lin + &stage.r * &du + &stage.p * &dx + bar_u;
        grad.rows_mut(k * m, m).copy_from(&g_u);
        if k > 0 {
            lambda = &stage.q_lin + &stage.q * &dx + stage.p.tr_mul(&du) + bar_x;
            problem.penalty_gradient(&xs[k], problem.k0 + k, &mut lambda);
        }
    }
    Ok((cost, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    /// Wall-clock solve time; informative only.
    pub solve_ms: f64,
    pub inner_iterations: usize,
    pub outer_iterations: usize,
    pub residual: f64,
    pub max_violation: f64,
    pub converged: bool,
    pub infeasible: bool,
}

#[derive(Debug, Clone)]
pub struct MpcStep {
    pub control: DVector<f64>,
    pub sequence: DVector<f64>,
    pub diagnostics: StepDiagnostics,
    /// Largest penalty residual after each outer round.
    pub violations: Vec<f64>,
}

/// Change of variables `u = T v` that whitens the Gauss-Newton curvature.
/// A bounded set keeps a diagonal `T` so that it stays a box; otherwise the
/// Cholesky factor is used. Returns `T`, `T⁻¹` and the set in `v`.
fn preconditioner(hess: &DMatrix<f64>, set: &BoxSet) -> (DMatrix<f64>, DMatrix<f64>, BoxSet) {
    let n = hess.nrows();
    let bounded = set.lo.iter().chain(set.hi.iter()).any(|v| v.is_finite());
    if !bounded {
        if let Some(chol) = hess.clone().cholesky() {
            let lt = chol.l().transpose();
            if let Some(map) = lt.clone().try_inverse() {
                return (map, lt, BoxSet::unbounded(n));
            }
        }
    }
    let d = DVector::from_iterator(n, hess.diagonal().iter().map(|h| 1.0 / h.max(1e-12).sqrt()));
    let solve_set = BoxSet {
        lo: set.lo.component_div(&d),
        hi: set.hi.component_div(&d),
    };
    (
        DMatrix::from_diagonal(&d),
        DMatrix::from_diagonal(&d.map(|v| 1.0 / v)),
        solve_set,
    )
}

/// Reference knots `t..=t+N` and controls `t..t+N`, holding the final
/// reference state past the end.
pub fn reference_window(reference: &Trajectory, t: usize, horizon: usize) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let last = reference.len() - 1;
    let states = (0..=horizon)
        .map(|j| reference.states[(t + j).min(last)].clone())
        .collect();
    let controls = (0..horizon)
        .map(|j| {
            let i = t + j;
            if i < last {
                reference.controls[i].clone()
            } else {
                DVector::zeros(reference.control_dim())
            }
        })
        .collect();
    (states, controls)
}

/// Solves the horizon at reference index `t` from `x_now` and returns the
/// first control.
pub fn mpc_step<D: Dynamics + ?Sized>(
    sys: &D,
    x_now: &DVector<f64>,
    reference: &Trajectory,
    t: usize,
    obstacles: &ObstacleField,
    config: &MpcConfig,
    warm: Option<&DVector<f64>>,
) -> Result<MpcStep> {
    let m = sys.control_dim();
    check_dim("mpc state", sys.state_dim(), x_now.len())?;
    check_dim("reference state", sys.state_dim(), reference.state_dim())?;
    config.validate(sys.state_dim(), m)?;
    if (reference.h - config.h).abs() > 1e-12 {
        return Err(Error::Config(format!(
            "reference step {} differs from the mpc step {}",
            reference.h, config.h
        )));
    }
    let n = config.horizon;
    let (ref_states, ref_controls) = reference_window(reference, t, n);
    let set = config.control_box(m)?;
    let start = match warm {
        Some(prev) => {
            check_dim("warm start", n * m, prev.len())?;
            let mut shifted = DVector::zeros(n * m);
            shifted.rows_mut(0, (n - 1) * m).copy_from(&prev.rows(m, (n - 1) * m));
            shifted.rows_mut((n - 1) * m, m).copy_from(&prev.rows((n - 1) * m, m));
            shifted
        }
        None => DVector::from_iterator(n * m, ref_controls.iter().flat_map(|u| u.iter().copied())),
    };
    let mut problem = MpcProblem {
        sys,
        x0: x_now.clone(),
        ref_states,
        ref_controls,
        cost: config.weights.cost()?,
        obstacles,
        k0: t,
        penalty: config.penalty_initial,
        margin: config.margin,
        h: config.h,
    };
    let clock = Instant::now();
    let mut u = set.project(&start);
    let mut inner = 0;
    let mut violations = Vec::new();
    let mut state = None;
    for _ in 0..config.max_outer {
        let (sol, st) = if config.precondition {
            let (map, inverse, solve_set) = preconditioner(&problem.gauss_newton_hessian(&u)?, &set);
            let obj = Preconditioned {
                inner: &problem,
                map: &map,
            };
            let (v, st) = panoc_solve(&obj, &solve_set, &(&inverse * &u), &config.solver)?;
            (&map * v, st)
        } else {
            panoc_solve(&problem, &set, &u, &config.solver)?
        };
        inner += st.iterations;
        u = set.project(&sol);
        let v = problem.max_violation(&problem.rollout(&u)?);
        violations.push(v);
        state = Some(st);
        if v <= config.constraint_tolerance {
            break;
        }
        problem.penalty *= config.penalty_growth;
    }
    let state = state.expect("at least one outer round");
    let max_violation = *violations.last().expect("at least one outer round");
    let diagnostics = StepDiagnostics {
        step: t,
        solve_ms: clock.elapsed().as_secs_f64() * 1e3,
        inner_iterations: inner,
        outer_iterations: violations.len(),
        residual: state.residual,
        max_violation,
        converged: state.status == SolveStatus::Converged,
        infeasible: max_violation > config.constraint_tolerance,
    };
    Ok(MpcStep {
        control: u.rows(0, m).into_owned(),
        sequence: u,
        diagnostics,
        violations,
    })
}

#[derive(Debug, Clone)]
pub struct MpcRun {
    pub trajectory: Trajectory,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl MpcRun {
    pub fn mean_solve_ms(&self) -> f64 {
        if self.diagnostics.is_empty() {
            return 0.0;
        }
        self.diagnostics.iter().map(|d| d.solve_ms).sum::<f64>() / self.diagnostics.len() as f64
    }
}

/// Closed loop over every reference step, with the plant advanced by RK4.
pub fn run_receding_horizon<D: Dynamics + ?Sized>(
    sys: &D,
    x0: &DVector<f64>,
    reference: &Trajectory,
    obstacles: &ObstacleField,
    config: &MpcConfig,
) -> Result<MpcRun> {
    let steps = reference.steps();
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps + 1);
    let mut diagnostics = Vec::with_capacity(steps);
    let mut x = x0.clone();
    let mut warm: Option<DVector<f64>> = None;
    for t in 0..steps {
        let step = mpc_step(sys, &x, reference, t, obstacles, config, warm.as_ref())?;
        states.push(x.clone());
        x = rk4_step(sys, &x, &step.control, config.h)?;
        controls.push(step.control);
        diagnostics.push(step.diagnostics);
        warm = Some(step.sequence);
    }
    states.push(x);
    controls.push(DVector::zeros(sys.control_dim()));
    Ok(MpcRun {
        trajectory: Trajectory::new(config.h, states, controls)?,
        diagnostics,
    })
}
