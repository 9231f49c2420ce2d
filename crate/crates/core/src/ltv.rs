//! Linearization and RK4/zero-order-hold discretization into an LTV system.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{rk4_step, Dynamics};
use crate::error::{check_dim, Error, Result};
use crate::trajectory::Trajectory;

/// Continuous-time Taylor model `ẋ ≈ f̄ + Ã δx + B̃ δu` about one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: DVector<f64>,
}

pub fn linearize<D: Dynamics + ?Sized>(sys: &D, x_bar: &DVector<f64>, u_bar: &DVector<f64>) -> Result<Linearization> {
    let f = sys.derivative(x_bar, u_bar)?;
    let (a, b) = sys.jacobians(x_bar, u_bar)?;
    Ok(Linearization { a, b, f })
}

/// Fourth-order truncation of the zero-order-hold discretization,
/// `A = Σ_{i≤4} (hÃ)ⁱ/i!` and `B = Σ_{i≤3} hⁱ⁺¹Ãⁱ/(i+1)! · B̃`.
pub fn discretize(a: &DMatrix<f64>, b: &DMatrix<f64>, h: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    check_dim("Ã columns", n, a.ncols())?;
    check_dim("B̃ rows", n, b.nrows())?;
    if !(h > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    let a3 = &a2 * a;
    let a4 = &a3 * a;
    let h2 = h * h / 2.0;
    let h3 = h * h * h / 6.0;
    let h4 = h * h * h * h / 24.0;
    let ad = &eye + a * h + &a2 * h2 + &a3 * h3 + &a4 * h4;
    let gamma = &eye * h + a * h2 + &a2 * h3 + &a3 * h4;
    Ok((ad, gamma * b))
}

/// `δx_{k+1} = A_k δx_k + B_k δu_k + g_k` about the operating points
/// `(x̄_k, ū_k)`, with `g_k = Φ(x̄_k, ū_k) − x̄_{k+1}` the propagation residual
/// of the operating points.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvSystem {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub g: Vec<DVector<f64>>,
    pub x_bar: Vec<DVector<f64>>,
    pub u_bar: Vec<DVector<f64>>,
    pub h: f64,
}

impl LtvSystem {
    pub fn new(
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        g: Vec<DVector<f64>>,
        x_bar: Vec<DVector<f64>>,
        u_bar: Vec<DVector<f64>>,
        h: f64,
    ) -> Result<Self> {
        let len = a.len();
        if len == 0 {
            return Err(Error::Validation("LTV system needs at least one step".into()));
        }
        for (what, got) in [
            ("B sequence", b.len()),
            ("g sequence", g.len()),
            ("x̄ sequence", x_bar.len()),
            ("ū sequence", u_bar.len()),
        ] {
            check_dim(what, len, got)?;
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        for k in 0..len {
            check_dim("A rows", n, a[k].nrows())?;
            check_dim("A columns", n, a[k].ncols())?;
            check_dim("B rows", n, b[k].nrows())?;
            check_dim("B columns", m, b[k].ncols())?;
            check_dim("g", n, g[k].len())?;
            check_dim("x̄", n, x_bar[k].len())?;
            check_dim("ū", m, u_bar[k].len())?;
        }
        Ok(Self {
            a,
            b,
            g,
            x_bar,
            u_bar,
            h,
        })
    }

    /// Same `(A, B, g)` at every step.
    pub fn time_invariant(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        g: DVector<f64>,
        x_bar: DVector<f64>,
        u_bar: DVector<f64>,
        h: f64,
        horizon: usize,
    ) -> Result<Self> {
        let horizon = horizon.max(1);
        Self::new(
            vec![a; horizon],
            vec![b; horizon],
            vec![g; horizon],
            vec![x_bar; horizon],
            vec![u_bar; horizon],
            h,
        )
    }

    /// Horizon length `N`.
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    /// First `n` steps.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(
            self.a[..n].to_vec(),
            self.b[..n].to_vec(),
            self.g[..n].to_vec(),
            self.x_bar[..n].to_vec(),
            self.u_bar[..n].to_vec(),
            self.h,
        )
    }

    /// One step of the perturbation dynamics.
    pub fn step(&self, k: usize, dx: &DVector<f64>, du: &DVector<f64>) -> DVector<f64> {
        &self.a[k] * dx + &self.b[k] * du + &self.g[k]
    }
}

/// Linearize and discretize about `(x̄, ū)` and repeat for `horizon` steps.
pub fn build_lti_about<D: Dynamics + ?Sized>(
    sys: &D,
    x_bar: &DVector<f64>,
    u_bar: &DVector<f64>,
    h: f64,
    horizon: usize,
) -> Result<LtvSystem> {
    let lin = linearize(sys, x_bar, u_bar)?;
    let (a, b) = discretize(&lin.a, &lin.b, h)?;
    let g = rk4_step(sys, x_bar, u_bar, h)? - x_bar;
    LtvSystem::time_invariant(a, b, g, x_bar.clone(), u_bar.clone(), h, horizon)
}

/// Per-knot linearization along a trajectory. The last knot has no
/// successor; its residual is the drift of the knot itself.
pub fn build_ltv_along<D: Dynamics + ?Sized>(sys: &D, traj: &Trajectory) -> Result<LtvSystem> {
    let n = traj.len();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    for k in 0..n {
        let x = &traj.states[k];
        let u = &traj.controls[k];
        let lin = linearize(sys, x, u)?;
        let (ad, bd) = discretize(&lin.a, &lin.b, traj.h)?;
        let next = traj.states.get(k + 1).unwrap_or(x);
        g.push(rk4_step(sys, x, u, traj.h)? - next);
        a.push(ad);
        b.push(bd);
    }
    LtvSystem::new(a, b, g, traj.states.clone(), traj.controls.clone(), traj.h)
}
