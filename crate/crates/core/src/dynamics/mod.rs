//! Continuous dynamics and the fixed-step RK4 propagator.

mod description;
mod freeflyer;
pub mod spatial;

pub use description::{ArmGeometry, BodySpec, JointSpec, JointType, RobotDescription};
pub use freeflyer::{euler_rate_matrix, euler_rates, rotation, FreeFlyer, StateLayout, PITCH_GUARD};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A continuous-time system `ẋ = f(x, u)`.
pub trait Dynamics: Sync {
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;

    /// True when the first three state coordinates are a position that the
    /// vector field never reads, so linearizations repeat under translation.
    fn translation_invariant(&self) -> bool {
        false
    }

    /// Velocity coordinates of a state whose configuration (the first half
    /// of `x`) changes at `rates`; the identity for `x = [q, q̇]`.
    fn velocity_from_rates(&self, x: &DVector<f64>, rates: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(
            "configuration rates",
            self.state_dim() - self.state_dim() / 2,
            rates.len(),
        )?;
        let _ = x;
        Ok(rates.clone())
    }

    /// Continuous Jacobians `(∂f/∂x, ∂f/∂u)`, central differences by default.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        jacobians_fd(self, x, u)
    }

    /// Jacobians `(∂Φ/∂x, ∂Φ/∂u)` of one RK4 step, chained through the stages.
    fn step_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        rk4_jacobians(self, x, u, h)
    }
}

/// Central-difference step for one coordinate.
pub fn fd_step(v: f64) -> f64 {
    (1e-6 * v.abs()).max(1e-6)
}

/// Central differences of `f` over every state and control coordinate.
pub fn jacobians_fd<D: Dynamics + ?Sized>(
    sys: &D,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    check_dim("state", n, x.len())?;
    check_dim("control", m, u.len())?;
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut xp = x.clone();
    for j in 0..n {
        let e = fd_step(x[j]);
        xp[j] = x[j] + e;
        let hi = sys.derivative(&xp, u)?;
        xp[j] = x[j] - e;
        let lo = sys.derivative(&xp, u)?;
        xp[j] = x[j];
        a.set_column(j, &((hi - lo) / (2.0 * e)));
    }
    let mut up = u.clone();
    for j in 0..m {
        let e = fd_step(u[j]);
        up[j] = u[j] + e;
        let hi = sys.derivative(x, &up)?;
        up[j] = u[j] - e;
        let lo = sys.derivative(x, &up)?;
        up[j] = u[j];
        b.set_column(j, &((hi - lo) / (2.0 * e)));
    }
    Ok((a, b))
}

/// Exact derivative of the RK4 map given the continuous Jacobians at the
/// four stage points.
pub fn rk4_jacobians<D: Dynamics + ?Sized>(
    sys: &D,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = sys.state_dim();
    let m = sys.control_dim();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut acc_x = eye.clone();
    let mut acc_u = DMatrix::zeros(n, m);
    let mut stage_x = x.clone();
    let mut dx = eye.clone();
    let mut du = DMatrix::zeros(n, m);
    let weights = [1.0, 2.0, 2.0, 1.0];
    let advance = [0.5, 0.5, 1.0];
    for s in 0..4 {
        let k = sys.derivative(&stage_x, u)?;
        finite(&k)?;
        let (fx, fu) = sys.jacobians(&stage_x, u)?;
        let kx = &fx * &dx;
        let ku = &fx * &du + fu;
        acc_x += &kx * (weights[s] * h / 6.0);
        acc_u += &ku * (weights[s] * h / 6.0);
        if s < 3 {
            stage_x = x + &k * (advance[s] * h);
            dx = &eye + kx * (advance[s] * h);
            du = ku * (advance[s] * h);
        }
    }
    Ok((acc_x, acc_u))
}

/// `(λᵀ ∂Φ/∂x, λᵀ ∂Φ/∂u)` for one RK4 step, by reverse accumulation through
/// the stages.
pub fn rk4_vjp<D: Dynamics + ?Sized>(
    sys: &D,
    x: &DVector<f64>,
    u: &DVector<f64>,
    h: f64,
    lambda: &DVector<f64>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let advance = [0.5, 0.5, 1.0];
    let mut stages = Vec::with_capacity(4);
    stages.push(x.clone());
    for s in 0..3 {
        let k = sys.derivative(&stages[s], u)?;
        finite(&k)?;
        stages.push(x + &k * (advance[s] * h));
    }
    let weights = [1.0, 2.0, 2.0, 1.0];
    let mut bar_x = lambda.clone();
    let mut bar_u = DVector::zeros(u.len());
    // adjoint of k_s carried back from the later stages
    let mut carried = DVector::zeros(x.len());
    for s in (0..4).rev() {
        let bar_k = lambda * (weights[s] * h / 6.0) + &carried;
        let (fx, fu) = sys.jacobians(&stages[s], u)?;
        let bar_stage = fx.tr_mul(&bar_k);
        bar_u += fu.tr_mul(&bar_k);
        bar_x += &bar_stage;
        if s > 0 {
            carried = bar_stage * (advance[s - 1] * h);
        }
    }
    Ok((bar_x, bar_u))
}

fn finite(v: &DVector<f64>) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalOverflow("rk4_step"))
    }
}

/// One classical RK4 step with the control held over the interval.
pub fn rk4_step<D: Dynamics + ?Sized>(f: &D, x: &DVector<f64>, u: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    check_dim("state", f.state_dim(), x.len())?;
    check_dim("control", f.control_dim(), u.len())?;
    finite(x)?;
    finite(u)?;
    let k1 = f.derivative(x, u)?;
    finite(&k1)?;
    let k2 = f.derivative(&(x + &k1 * (0.5 * h)), u)?;
    finite(&k2)?;
    let k3 = f.derivative(&(x + &k2 * (0.5 * h)), u)?;
    finite(&k3)?;
    let k4 = f.derivative(&(x + &k3 * h), u)?;
    finite(&k4)?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    finite(&next)?;
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    /// Step size, s.
    pub h: f64,
    /// RK4 sub-steps per step; the control is held across all of them.
    #[serde(default = "one")]
    pub substeps: usize,
}

fn one() -> usize {
    1
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { h: 0.1, substeps: 1 }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::Config(format!(
                "integrator step must be positive, got {}",
                self.h
            )));
        }
        if self.substeps == 0 {
            return Err(Error::Config("integrator substeps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn step<D: Dynamics + ?Sized>(&self, f: &D, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.validate()?;
        let dt = self.h / self.substeps as f64;
        let mut x = x.clone();
        for _ in 0..self.substeps {
            x = rk4_step(f, &x, u, dt)?;
        }
        Ok(x)
    }
}

/// `ẋ = A x + B u + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        check_dim("A columns", n, a.ncols())?;
        check_dim("B rows", n, b.nrows())?;
        Ok(Self {
            a,
            b,
            c: DVector::zeros(n),
        })
    }

    pub fn with_drift(mut self, c: DVector<f64>) -> Result<Self> {
        check_dim("drift", self.a.nrows(), c.len())?;
        self.c = c;
        Ok(self)
    }
}

impl Dynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn control_dim(&self) -> usize {
        self.b.ncols()
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("control", self.control_dim(), u.len())?;
        Ok(&self.a * x + &self.b * u + &self.c)
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        Ok((self.a.clone(), self.b.clone()))
    }
}
