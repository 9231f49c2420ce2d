//! Finite-horizon LQR on an LTV model: value iteration, affine policy,
//! cost-to-go, steering and tracking.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rk4_step, Dynamics};
use crate::error::{check_dim, Error, Result};
use crate::ltv::{build_lti_about, build_ltv_along, LtvSystem};
use crate::trajectory::Trajectory;

/// Running weights for one step. The cross term enters as `δuᵀ P δx`, so
/// `P` is `n_u × n_x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub q_lin: DVector<f64>,
    pub r_lin: DVector<f64>,
}

impl StageCost {
    pub fn diagonal(q: &[f64], r: &[f64]) -> Self {
        let n = q.len();
        let m = r.len();
        Self {
            q: DMatrix::from_diagonal(&DVector::from_column_slice(q)),
            r: DMatrix::from_diagonal(&DVector::from_column_slice(r)),
            p: DMatrix::zeros(m, n),
            q_lin: DVector::zeros(n),
            r_lin: DVector::zeros(m),
        }
    }

    /// `δxᵀq + δuᵀr + ½δxᵀQδx + ½δuᵀRδu + δuᵀPδx`.
    pub fn eval(&self, dx: &DVector<f64>, du: &DVector<f64>) -> f64 {
        dx.dot(&self.q_lin)
            + du.dot(&self.r_lin)
            + 0.5 * dx.dot(&(&self.q * dx))
            + 0.5 * du.dot(&(&self.r * du))
            + du.dot(&(&self.p * dx))
    }
}

/// Quadratic cost over a horizon. `stages[k]` applies at step `k`; steps past
/// the end reuse the last entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticCost {
    pub stages: Vec<StageCost>,
    pub q_n: DMatrix<f64>,
    pub q_n_lin: DVector<f64>,
    #[serde(default)]
    pub c: f64,
}

fn is_spd(m: &DMatrix<f64>) -> bool {
    m.clone().cholesky().is_some()
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

fn symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
}

impl QuadraticCost {
    pub fn new(stages: Vec<StageCost>, q_n: DMatrix<f64>, q_n_lin: DVector<f64>, c: f64) -> Result<Self> {
        let cost = Self {
            stages,
            q_n,
            q_n_lin,
            c,
        };
        cost.validate()?;
        Ok(cost)
    }

    /// Time-invariant diagonal weights with no linear terms.
    pub fn diagonal(q: &[f64], r: &[f64], q_n: &[f64]) -> Result<Self> {
        Self::new(
            vec![StageCost::diagonal(q, r)],
            DMatrix::from_diagonal(&DVector::from_column_slice(q_n)),
            DVector::zeros(q_n.len()),
            0.0,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.q_n.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.stages[0].r.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.is_empty() {
            return bad("cost needs at least one running stage".into());
        }
        let n = self.q_n.nrows();
        let m = self.stages[0].r.nrows();
        check_dim("Q_N columns", n, self.q_n.ncols())?;
        check_dim("q_N", n, self.q_n_lin.len())?;
        for (k, s) in self.stages.iter().enumerate() {
            check_dim("Q rows", n, s.q.nrows())?;
            check_dim("Q columns", n, s.q.ncols())?;
            check_dim("R rows", m, s.r.nrows())?;
            check_dim("R columns", m, s.r.ncols())?;
            check_dim("P rows", m, s.p.nrows())?;
            check_dim("P columns", n, s.p.ncols())?;
            check_dim("q", n, s.q_lin.len())?;
            check_dim("r", m, s.r_lin.len())?;
            if !symmetric(&s.q) || !is_spd(&s.q) {
                return bad(format!("Q at stage {k} must be symmetric positive definite"));
            }
            if !symmetric(&s.r) || !is_spd(&s.r) {
                return bad(format!("R at stage {k} must be symmetric positive definite"));
            }
            let mut block = DMatrix::zeros(n + m, n + m);
            block.view_mut((0, 0), (n, n)).copy_from(&s.q);
            block.view_mut((n, n), (m, m)).copy_from(&s.r);
            block.view_mut((n, 0), (m, n)).copy_from(&s.p);
            block.view_mut((0, n), (n, m)).copy_from(&s.p.transpose());
            if min_eig(&block) < -1e-12 * block.amax().max(1.0) {
                return bad(format!("weight block at stage {k} is not positive semidefinite"));
            }
        }
        if !symmetric(&self.q_n) || min_eig(&self.q_n) < -1e-12 * self.q_n.amax().max(1.0) {
            return bad("Q_N must be symmetric positive semidefinite".into());
        }
        if !self.c.is_finite() {
            return bad("terminal constant must be finite".into());
        }
        Ok(())
    }

    pub fn stage(&self, k: usize) -> &StageCost {
        &self.stages[k.min(self.stages.len() - 1)]
    }

    pub fn running(&self, k: usize, dx: &DVector<f64>, du: &DVector<f64>) -> f64 {
        self.stage(k).eval(dx, du)
    }

    pub fn terminal(&self, dx: &DVector<f64>) -> f64 {
        0.5 * dx.dot(&(&self.q_n * dx)) + dx.dot(&self.q_n_lin)
    }
}

/// `V_k(δx) = ½δxᵀS_kδx + δxᵀs_k + c_k` for `k = 0..=N` and the policy
/// `δu_k = K_k δx_k + l_k` for `k < N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunctionSequence {
    pub s: Vec<DMatrix<f64>>,
    pub s_lin: Vec<DVector<f64>>,
    pub c: Vec<f64>,
    pub k: Vec<DMatrix<f64>>,
    pub l: Vec<DVector<f64>>,
}

impl ValueFunctionSequence {
    pub fn horizon(&self) -> usize {
        self.k.len()
    }

    pub fn cost_to_go(&self, k: usize, dx: &DVector<f64>) -> f64 {
        cost_to_go(self, k, dx)
    }

    pub fn policy(&self, k: usize, dx: &DVector<f64>) -> DVector<f64> {
        &self.k[k] * dx + &self.l[k]
    }
}

pub fn cost_to_go(vfs: &ValueFunctionSequence, k: usize, dx: &DVector<f64>) -> f64 {
    0.5 * dx.dot(&(&vfs.s[k] * dx)) + dx.dot(&vfs.s_lin[k]) + vfs.c[k]
}

/// Value function one step earlier and the policy for that step.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiStep {
    pub s: DMatrix<f64>,
    pub s_lin: DVector<f64>,
    pub c: f64,
    pub k: DMatrix<f64>,
    pub l: DVector<f64>,
}

/// One backward step from `(S', s', c')` through `δx' = Aδx + Bδu + g`.
#[allow(clippy::too_many_arguments)]
pub fn riccati_step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    g: &DVector<f64>,
    stage: &StageCost,
    s_next: &DMatrix<f64>,
    s_lin_next: &DVector<f64>,
    c_next: f64,
) -> Result<RiccatiStep> {
    let at = a.transpose();
    let bt = b.transpose();
    let sa = s_next * a;
    let sb = s_next * b;
    let sg = s_next * g + s_lin_next;
    let m = &stage.r + &bt * &sb;
    let hx = &bt * &sa + &stage.p;
    let hv = &bt * &sg + &stage.r_lin;
    let chol = m
        .cholesky()
        .ok_or_else(|| Error::SolveFailure("R + BᵀSB is not positive definite".into()))?;
    let gain = -chol.solve(&hx);
    let offset = -chol.solve(&hv);
    let sk = &at * &sa + &stage.q + hx.transpose() * &gain;
    let asym = (&sk - sk.transpose()).amax();
    if asym > 1e-8 * sk.amax().max(1.0) {
        return Err(Error::Internal(format!(
            "value matrix lost symmetry (asymmetry {asym:.3e})"
        )));
    }
    let s_lin = &stage.q_lin + &at * &sg + hx.transpose() * &offset;
    let c = c_next + 0.5 * g.dot(&(s_next * g)) + s_lin_next.dot(g) + 0.5 * hv.dot(&offset);
    let s = (&sk + sk.transpose()) * 0.5;
    if !(c.is_finite() && s.iter().all(|v| v.is_finite())) {
        return Err(Error::NumericalOverflow("riccati_step"));
    }
    Ok(RiccatiStep {
        s,
        s_lin,
        c,
        k: gain,
        l: offset,
    })
}

/// Backward value iteration from `S_N = Q_N`, `s_N = q_N`, `c_N = c`.
pub fn riccati_backward_pass(ltv: &LtvSystem, cost: &QuadraticCost) -> Result<ValueFunctionSequence> {
    check_dim("cost state", ltv.state_dim(), cost.state_dim())?;
    check_dim("cost control", ltv.control_dim(), cost.control_dim())?;
    let n = ltv.len();
    let mut s = vec![cost.q_n.clone(); n + 1];
    let mut s_lin = vec![cost.q_n_lin.clone(); n + 1];
    let mut c = vec![cost.c; n + 1];
    let mut gains = vec![DMatrix::zeros(0, 0); n];
    let mut offsets = vec![DVector::zeros(0); n];
    for k in (0..n).rev() {
        let step = riccati_step(
            &ltv.a[k],
            &ltv.b[k],
            &ltv.g[k],
            cost.stage(k),
            &s[k + 1],
            &s_lin[k + 1],
            c[k + 1],
        )
        .map_err(|e| match e {
            Error::SolveFailure(m) => Error::SolveFailure(format!("{m} at step {k}")),
            Error::Internal(m) => Error::Internal(format!("{m} at step {k}")),
            other => other,
        })?;
        s[k] = step.s;
        s_lin[k] = step.s_lin;
        c[k] = step.c;
        gains[k] = step.k;
        offsets[k] = step.l;
    }
    Ok(ValueFunctionSequence {
        s,
        s_lin,
        c,
        k: gains,
        l: offsets,
    })
}

/// Closed-loop rollout on the nonlinear plant and its quadratic cost.
#[derive(Debug, Clone, PartialEq)]
pub struct SteerResult {
    pub trajectory: Trajectory,
    pub cost: f64,
}

/// Cost of a trajectory measured against per-knot operating points; the last
/// knot gets the terminal weight.
pub fn trajectory_cost(
    traj: &Trajectory,
    x_bar: &dyn Fn(usize) -> DVector<f64>,
    u_bar: &dyn Fn(usize) -> DVector<f64>,
    cost: &QuadraticCost,
) -> f64 {
    let n = traj.steps();
    let mut total = 0.0;
    for k in 0..n {
        total += cost.running(k, &(&traj.states[k] - x_bar(k)), &(&traj.controls[k] - u_bar(k)));
    }
    total + cost.terminal(&(&traj.states[n] - x_bar(n)))
}

/// LQR steering from `from` toward `to`: linearize about `to`, run the
/// backward pass and apply the affine policy to the nonlinear dynamics.
pub fn lqr_steer<D: Dynamics + ?Sized>(
    sys: &D,
    from: &DVector<f64>,
    to: &DVector<f64>,
    horizon: usize,
    cost: &QuadraticCost,
    h: f64,
) -> Result<SteerResult> {
    if horizon == 0 {
        return Err(Error::Config("steering horizon must be at least 1".into()));
    }
    let u_bar = DVector::zeros(sys.control_dim());
    let ltv = build_lti_about(sys, to, &u_bar, h, horizon)?;
    let vfs = riccati_backward_pass(&ltv, cost)?;
    steer_with(sys, from, to, &vfs, cost, h)
}

/// Rollout of a precomputed policy about the fixed target `to`; the cost is
/// measured in deviations from `(to, 0)`.
pub fn steer_with<D: Dynamics + ?Sized>(
    sys: &D,
    from: &DVector<f64>,
    to: &DVector<f64>,
    vfs: &ValueFunctionSequence,
    cost: &QuadraticCost,
    h: f64,
) -> Result<SteerResult> {
    let n = vfs.horizon();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n + 1);
    let mut x = from.clone();
    let mut total = 0.0;
    for k in 0..n {
        let dx = &x - to;
        let u = vfs.policy(k, &dx);
        total += cost.running(k, &dx, &u);
        states.push(x.clone());
        x = rk4_step(sys, &x, &u, h)?;
        controls.push(u);
    }
    total += cost.terminal(&(&x - to));
    states.push(x);
    controls.push(DVector::zeros(sys.control_dim()));
    Ok(SteerResult {
        trajectory: Trajectory::new(h, states, controls)?,
        cost: total,
    })
}

/// Time-varying LQR about `reference`, executed on the nonlinear plant
/// from `x0`.
pub fn track<D: Dynamics + ?Sized>(
    sys: &D,
    reference: &Trajectory,
    cost: &QuadraticCost,
    x0: &DVector<f64>,
) -> Result<Trajectory> {
    check_dim("initial state", reference.state_dim(), x0.len())?;
    let steps = reference.steps();
    if steps == 0 {
        return Ok(Trajectory::single(reference.h, x0.clone(), reference.control_dim()));
    }
    let ltv = build_ltv_along(sys, reference)?.truncated(steps)?;
    let vfs = riccati_backward_pass(&ltv, cost)?;
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    for k in 0..steps {
        let u = &reference.controls[k] + vfs.policy(k, &(&x - &reference.states[k]));
        states.push(x.clone());
        x = rk4_step(sys, &x, &u, reference.h)?;
        controls.push(u);
    }
    states.push(x);
    controls.push(reference.controls[steps].clone());
    Trajectory::new(reference.h, states, controls)
}

/// Diagonal weights as they appear in configuration files.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagonalWeights {
    pub q: Vec<f64>,
    pub r: Vec<f64>,
    pub q_n: Vec<f64>,
}

impl DiagonalWeights {
    /// `config` on the first half of the state, `velocity` on the rest.
    pub fn split(n_x: usize, n_u: usize, config: f64, velocity: f64, control: f64, terminal: f64) -> Self {
        let half = n_x / 2;
        Self {
            q: (0..n_x).map(|i| if i < half { config } else { velocity }).collect(),
            r: vec![control; n_u],
            q_n: vec![terminal; n_x],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty() && self.r.is_empty() && self.q_n.is_empty()
    }

    pub fn cost(&self) -> Result<QuadraticCost> {
        QuadraticCost::diagonal(&self.q, &self.r, &self.q_n)
    }
}
