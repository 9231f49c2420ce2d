//! Shortcut smoothing of geometric paths and LQR re-timing.
//!
//! Paths are polylines through full states; length is measured over the
//! configuration block (the first half of the state). Shortcuts are straight
//! lines between two continuous path parameters, checked against the
//! obstacle field on the base position.

use nalgebra::{DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::ObstacleField;
use crate::dynamics::{rk4_step, Dynamics};
use crate::error::{check_dim, Error, Result};
use crate::lqr::{track, QuadraticCost};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricPath {
    states: Vec<DVector<f64>>,
    cumulative: Vec<f64>,
    config_dim: usize,
}

impl GeometricPath {
    pub fn new(states: Vec<DVector<f64>>, config_dim: usize) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::Validation("a path needs at least two knots".into()));
        }
        let n = states[0].len();
        if config_dim == 0 || config_dim > n {
            return Err(Error::Config(format!(
                "configuration size {config_dim} does not fit states of size {n}"
            )));
        }
        for x in &states {
            check_dim("path knot", n, x.len())?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation("path knot is not finite".into()));
            }
        }
        let mut path = Self {
            states,
            cumulative: Vec::new(),
            config_dim,
        };
        path.measure();
        Ok(path)
    }

    /// Path through the knots of a trajectory.
    pub fn from_trajectory(traj: &Trajectory, config_dim: usize) -> Result<Self> {
        let mut states = traj.states.clone();
        if states.len() == 1 {
            states.push(states[0].clone());
        }
        Self::new(states, config_dim)
    }

    fn measure(&mut self) {
        let mut acc = 0.0;
        self.cumulative = Vec::with_capacity(self.states.len());
        self.cumulative.push(0.0);
        for w in self.states.windows(2) {
            acc += self.distance(&w[0], &w[1]);
            self.cumulative.push(acc);
        }
    }

    /// Configuration-space distance.
    pub fn distance(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.rows(0, self.config_dim).metric_distance(&b.rows(0, self.config_dim))
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    pub fn config_dim(&self) -> usize {
        self.config_dim
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn length(&self) -> f64 {
        *self.cumulative.last().expect("path has knots")
    }

    pub fn first(&self) -> &DVector<f64> {
        &self.states[0]
    }

    pub fn last(&self) -> &DVector<f64> {
        self.states.last().expect("path has knots")
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.states.iter().map(|x| Vector3::new(x[0], x[1], x[2])).collect()
    }

    /// Segment index and fraction at arc length `s`, clamped to the path.
    pub fn locate(&self, s: f64) -> (usize, f64) {
        let last = self.states.len() - 2;
        let i = self.cumulative.partition_point(|&c| c <= s).saturating_sub(1).min(last);
        let span = self.cumulative[i + 1] - self.cumulative[i];
        let t = if span > 0.0 {
            ((s - self.cumulative[i]) / span).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (i, t)
    }

    /// State at arc length `s`, linear between knots.
    pub fn point_at(&self, s: f64) -> DVector<f64> {
        let (i, t) = self.locate(s);
        lerp(&self.states[i], &self.states[i + 1], t)
    }

    /// Unit configuration direction of the segment containing `s`.
    pub fn direction_at(&self, s: f64) -> DVector<f64> {
        let (mut i, _) = self.locate(s);
        // skip forward past zero-length segments
        while i + 2 < self.states.len() && self.cumulative[i + 1] == self.cumulative[i] {
            i += 1;
        }
        let d = self.states[i + 1].rows(0, self.config_dim) - self.states[i].rows(0, self.config_dim);
        let n = d.norm();
        if n > 0.0 {
            d / n
        } else {
            DVector::zeros(self.config_dim)
        }
    }

    /// Distance from `p` to the base-position polyline.
    pub fn position_deviation(&self, p: &Vector3<f64>) -> f64 {
        let pts = self.positions();
        pts.windows(2)
            .map(|w| {
                let d = w[1] - w[0];
                let len2 = d.norm_squared();
                let t = if len2 > 0.0 {
                    ((p - w[0]).dot(&d) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                (w[0] + d * t - p).norm()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

fn lerp(a: &DVector<f64>, b: &DVector<f64>, t: f64) -> DVector<f64> {
    a + (b - a) * t
}

fn position(x: &DVector<f64>) -> Vector3<f64> {
    Vector3::new(x[0], x[1], x[2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmootherConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_h_check")]
    pub h_check: f64,
    #[serde(default)]
    pub strict: bool,
}

fn default_iterations() -> usize {
    200
}

fn default_h_check() -> f64 {
    0.05
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            seed: 0,
            h_check: default_h_check(),
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShortcutResult {
    pub path: GeometricPath,
    /// Path length after each accepted shortcut.
    pub accepted_lengths: Vec<f64>,
    pub iterations: usize,
}

/// Random shortcutting between continuous path parameters `a < b`.
pub fn shortcut(path: &GeometricPath, obstacles: &ObstacleField, config: &SmootherConfig) -> Result<ShortcutResult> {
    if !(config.h_check > 0.0) {
        return Err(Error::Config("smoother h_check must be positive".into()));
    }
    if !obstacles.is_empty() {
        obstacles.check_resolution(config.h_check, config.strict)?;
    }
    if !(obstacles.point_clear(&position(path.first()), 0) && obstacles.point_clear(&position(path.last()), 0)) {
        return Err(Error::Validation("path endpoints must be collision-free".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut path = path.clone();
    let mut accepted_lengths = Vec::new();
    for _ in 0..config.iterations {
        let total = path.length();
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if total <= 0.0 {
            continue;
        }
        let (a, b) = if u1 <= u2 {
            (u1 * total, u2 * total)
        } else {
            (u2 * total, u1 * total)
        };
        let (ia, ta) = path.locate(a);
        let (ib, tb) = path.locate(b);
        if ia == ib {
            continue;
        }
        let xa = lerp(&path.states[ia], &path.states[ia + 1], ta);
        let xb = lerp(&path.states[ib], &path.states[ib + 1], tb);
        let candidate = path.cumulative[ia]
            + path.distance(&path.states[ia], &xa)
            + path.distance(&xa, &xb)
            + path.distance(&xb, &path.states[ib + 1])
            + (total - path.cumulative[ib + 1]);
        if candidate >= total - 1e-12 * total.max(1.0) {
            continue;
        }
        if !obstacles.segment_clear(&position(&xa), &position(&xb), config.h_check, config.strict)? {
            continue;
        }
        let mut states = Vec::with_capacity(path.len());
        states.extend(path.states[..=ia].iter().cloned());
        if ta > 0.0 {
            states.push(xa);
        }
        states.push(xb);
        states.extend(path.states[ib + 1..].iter().cloned());
        path.states = states;
        path.measure();
        accepted_lengths.push(path.length());
    }
    Ok(ShortcutResult {
        path,
        accepted_lengths,
        iterations: config.iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetimeConfig {
    /// Peak configuration-space speed of the timing law.
    #[serde(default = "default_speed")]
    pub v_max: f64,
    /// Seconds of rest appended after the motion.
    #[serde(default = "default_hold")]
    pub hold: f64,
    /// Largest accepted base deviation from the path, m.
    #[serde(default = "default_delta_track")]
    pub delta_track: f64,
}

fn default_speed() -> f64 {
    0.1
}

fn default_hold() -> f64 {
    4.0
}

fn default_delta_track() -> f64 {
    0.1
}

impl Default for RetimeConfig {
    fn default() -> Self {
        Self {
            v_max: default_speed(),
            hold: default_hold(),
            delta_track: default_delta_track(),
        }
    }
}

/// Time-stamped reference along the path: quintic arc-length timing from
/// rest to rest, a rest hold at the end, and one-step feedforward controls.
pub fn reference_along<D: Dynamics + ?Sized>(
    sys: &D,
    path: &GeometricPath,
    config: &RetimeConfig,
    h: f64,
) -> Result<Trajectory> {
    check_dim("path state", sys.state_dim(), path.first().len())?;
    if !(config.v_max > 0.0 && config.hold >= 0.0 && h > 0.0) {
        return Err(Error::Config(
            "retiming needs positive speed and step and a non-negative hold".into(),
        ));
    }
    let n_q = path.config_dim();
    let length = path.length();
    // the quintic profile peaks at 15/8 of the mean speed
    let steps = if length > 0.0 {
        (1.875 * length / config.v_max / h).ceil().max(1.0) as usize
    } else {
        0
    };
    let duration = steps as f64 * h;
    let mut states = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let tau = if steps == 0 { 1.0 } else { k as f64 / steps as f64 };
        let s = length * tau * tau * tau * (10.0 - 15.0 * tau + 6.0 * tau * tau);
        let mut x = path.point_at(s);
        let speed = if steps == 0 {
            0.0
        } else {
            length / duration * 30.0 * tau * tau * (1.0 - tau) * (1.0 - tau)
        };
        let rates = path.direction_at(s) * speed;
        let v = sys.velocity_from_rates(&x, &rates)?;
        x.rows_mut(n_q, x.len() - n_q).copy_from(&v);
        states.push(x);
    }
    let rest = states.last().expect("reference has knots").clone();
    let hold = (config.hold / h).ceil() as usize;
    states.extend(std::iter::repeat_n(rest, hold));
    let m = sys.control_dim();
    let zero = DVector::zeros(m);
    let mut controls = Vec::with_capacity(states.len());
    for k in 0..states.len() - 1 {
        let drift = rk4_step(sys, &states[k], &zero, h)?;
        let gap = &states[k + 1] - drift;
        if gap.amax() == 0.0 {
            controls.push(zero.clone());
            continue;
        }
        let (_, b) = sys.step_jacobians(&states[k], &zero, h)?;
        let u = b
            .svd(true, true)
            .solve(&gap, 1e-12)
            .map_err(|e| Error::SolveFailure(format!("feedforward: {e}")))?;
        controls.push(u);
    }
    controls.push(zero);
    Trajectory::new(h, states, controls)
}

/// LQR tracking of the path reference from the first path state.
pub fn retime<D: Dynamics + ?Sized>(
    sys: &D,
    path: &GeometricPath,
    cost: &QuadraticCost,
    config: &RetimeConfig,
    h: f64,
) -> Result<Trajectory> {
    let reference = reference_along(sys, path, config, h)?;
    track(sys, &reference, cost, path.first())
}

/// Largest base-position distance from the trajectory knots to the path.
pub fn max_deviation(path: &GeometricPath, traj: &Trajectory) -> f64 {
    traj.positions()
        .iter()
        .map(|p| path.position_deviation(p))
        .fold(0.0, f64::max)
}
