use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rk4_step, Dynamics};
use crate::error::{check_dim, Error, Result};

/// Uniformly sampled states and controls.
///
/// `controls[k]` is held over `[t_k, t_{k+1})`. Both sequences have `N + 1`
/// entries; the last control is never applied and is kept so that every knot
/// has a full row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub h: f64,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(h: f64, states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::Config(format!("trajectory step must be positive, got {h}")));
        }
        if states.is_empty() {
            return Err(Error::Validation("trajectory has no knots".into()));
        }
        check_dim("trajectory controls", states.len(), controls.len())?;
        let nx = states[0].len();
        let nu = controls[0].len();
        for s in &states {
            check_dim("trajectory state", nx, s.len())?;
        }
        for c in &controls {
            check_dim("trajectory control", nu, c.len())?;
        }
        Ok(Self { h, states, controls })
    }

    /// One knot holding `x` with a zero control.
    pub fn single(h: f64, x: DVector<f64>, n_u: usize) -> Self {
        Self {
            h,
            states: vec![x],
            controls: vec![DVector::zeros(n_u)],
        }
    }

    /// Open-loop RK4 rollout of `controls` from `x0`.
    pub fn rollout<D: Dynamics + ?Sized>(
        sys: &D,
        x0: &DVector<f64>,
        controls: &[DVector<f64>],
        h: f64,
    ) -> Result<Self> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0.clone());
        for u in controls {
            let next = rk4_step(sys, states.last().expect("nonempty"), u, h)?;
            states.push(next);
        }
        let mut controls = controls.to_vec();
        controls.push(DVector::zeros(sys.control_dim()));
        Self::new(h, states, controls)
    }

    /// Number of knots, `N + 1`.
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Number of steps, `N`.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn duration(&self) -> f64 {
        self.steps() as f64 * self.h
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.h
    }

    pub fn first(&self) -> &DVector<f64> {
        &self.states[0]
    }

    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("nonempty")
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn control_dim(&self) -> usize {
        self.controls[0].len()
    }

    /// Base positions, the first three state coordinates.
    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.states.iter().map(|x| Vector3::new(x[0], x[1], x[2])).collect()
    }

    /// Largest deviation between recorded states and a replay of the
    /// recorded controls from the first state.
    pub fn replay_error<D: Dynamics + ?Sized>(&self, sys: &D) -> Result<f64> {
        let mut x = self.states[0].clone();
        let mut worst = 0.0f64;
        for k in 0..self.steps() {
            x = rk4_step(sys, &x, &self.controls[k], self.h)?;
            worst = worst.max((&x - &self.states[k + 1]).amax());
        }
        Ok(worst)
    }

    /// Appends `other`, whose first knot must coincide with this last knot.
    pub fn append(&mut self, other: &Trajectory) -> Result<()> {
        if (self.h - other.h).abs() > 1e-12 {
            return Err(Error::Validation(
                "cannot join trajectories with different steps".into(),
            ));
        }
        let gap = (self.last() - other.first()).amax();
        if gap > 1e-9 {
            return Err(Error::Validation(format!("trajectories do not meet: gap {gap:.3e}")));
        }
        let last = self.controls.len() - 1;
        self.controls[last] = other.controls[0].clone();
        self.states.extend(other.states.iter().skip(1).cloned());
        self.controls.extend(other.controls.iter().skip(1).cloned());
        Ok(())
    }
}
