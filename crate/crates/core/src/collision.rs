//! Ellipsoidal keep-out zones and the collision predicates built on them.
//!
//! A point `x` is clear of an obstacle when
//! `(x − x_obs)ᵀ (P_obs / s²) (x − x_obs) ≥ 1`, with `s ≥ 1` the safety factor.

use nalgebra::{DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipsoidObstacle {
    pub name: String,
    pub center: Vector3<f64>,
    pub shape: Matrix3<f64>,
    pub safety: f64,
    /// Centroid per time index for moving obstacles; past the end the last
    /// entry holds. Empty for static obstacles.
    #[serde(default)]
    pub path: Vec<Vector3<f64>>,
}

impl EllipsoidObstacle {
    pub fn new(name: impl Into<String>, center: Vector3<f64>, shape: Matrix3<f64>, safety: f64) -> Result<Self> {
        let obs = Self {
            name: name.into(),
            center,
            shape,
            safety,
            path: Vec::new(),
        };
        obs.validate()?;
        Ok(obs)
    }

    /// Axis-aligned ellipsoid with the given semi-axes.
    pub fn axis_aligned(
        name: impl Into<String>,
        center: Vector3<f64>,
        semi_axes: Vector3<f64>,
        safety: f64,
    ) -> Result<Self> {
        if semi_axes.iter().any(|a| !(*a > 0.0)) {
            return Err(Error::Config("semi-axes must be positive".into()));
        }
        let shape = Matrix3::from_diagonal(&semi_axes.map(|a| 1.0 / (a * a)));
        Self::new(name, center, shape, safety)
    }

    pub fn sphere(name: impl Into<String>, center: Vector3<f64>, radius: f64) -> Result<Self> {
        Self::axis_aligned(name, center, Vector3::repeat(radius), 1.0)
    }

    pub fn with_path(mut self, path: Vec<Vector3<f64>>) -> Self {
        self.path = path;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("obstacle '{}': {m}", self.name)));
        if !(self.safety >= 1.0 && self.safety.is_finite()) {
            return bad(format!("safety factor must be at least 1, got {}", self.safety));
        }
        if (self.shape - self.shape.transpose()).amax() > 1e-12 * self.shape.amax().max(1.0) {
            return bad("shape matrix is not symmetric".into());
        }
        if self.shape.cholesky().is_none() {
            return bad("shape matrix is not positive definite".into());
        }
        if self
            .center
            .iter()
            .chain(self.path.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return bad("centroid is not finite".into());
        }
        Ok(())
    }

    pub fn center_at(&self, k: usize) -> Vector3<f64> {
        match self.path.len() {
            0 => self.center,
            n => self.path[k.min(n - 1)],
        }
    }

    /// `P_obs / s²`.
    pub fn effective_shape(&self) -> Matrix3<f64> {
        self.shape / (self.safety * self.safety)
    }

    /// Shortest semi-axis of the inflated ellipsoid.
    pub fn min_semi_axis(&self) -> f64 {
        let max_eig = self.effective_shape().symmetric_eigenvalues().max();
        1.0 / max_eig.sqrt()
    }

    pub fn quadratic_form(&self, x: &Vector3<f64>, k: usize) -> f64 {
        let d = x - self.center_at(k);
        d.dot(&(self.effective_shape() * d))
    }

    /// Boundary points count as clear.
    pub fn point_clear(&self, x: &Vector3<f64>, k: usize) -> bool {
        self.quadratic_form(x, k) >= 1.0
    }

    /// Minimum of the quadratic form along the segment from `xa` at time
    /// index `k` to `xb` at `k + 1`, with the centroid moving linearly.
    pub fn segment_min_form(&self, xa: &Vector3<f64>, xb: &Vector3<f64>, k: usize) -> f64 {
        let p = self.effective_shape();
        let d0 = xa - self.center_at(k);
        let d1 = xb - self.center_at(k + 1);
        let dd = d1 - d0;
        let a = dd.dot(&(p * dd));
        let b = d0.dot(&(p * dd));
        let t = if a > 0.0 { (-b / a).clamp(0.0, 1.0) } else { 0.0 };
        let d = d0 + dd * t;
        let interior = d.dot(&(p * d));
        interior.min(d0.dot(&(p * d0))).min(d1.dot(&(p * d1)))
    }
}

/// Whether two solid ellipsoids `(x − c)ᵀ P (x − c) ≤ 1` intersect.
///
/// They are disjoint exactly when
/// `K(s) = 1 − dᵀ (P_a⁻¹/(1 − s) + P_b⁻¹/s)⁻¹ d` is negative for some
/// `s ∈ (0, 1)`, with `d` the centre offset; `K` is convex in `s`.
pub fn ellipsoids_overlap(
    center_a: &Vector3<f64>,
    shape_a: &Matrix3<f64>,
    center_b: &Vector3<f64>,
    shape_b: &Matrix3<f64>,
) -> Result<bool> {
    let inv = |p: &Matrix3<f64>| {
        p.try_inverse()
            .ok_or_else(|| Error::Config("ellipsoid shape is singular".into()))
    };
    let (sa, sb) = (inv(shape_a)?, inv(shape_b)?);
    let d = center_b - center_a;
    let k = |s: f64| -> f64 {
        let m = sa / (1.0 - s) + sb / s;
        match m.cholesky() {
            Some(c) => 1.0 - d.dot(&c.solve(&d)),
            None => 1.0,
        }
    };
    // golden-section search for the minimum of the convex K
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
    let mut c = hi - ratio * (hi - lo);
    let mut e = lo + ratio * (hi - lo);
    let (mut kc, mut ke) = (k(c), k(e));
    for _ in 0..100 {
        if kc < 0.0 || ke < 0.0 {
            return Ok(false);
        }
        if kc < ke {
            hi = e;
            e = c;
            ke = kc;
            c = hi - ratio * (hi - lo);
            kc = k(c);
        } else {
            lo = c;
            c = e;
            kc = ke;
            e = lo + ratio * (hi - lo);
            ke = k(e);
        }
    }
    Ok(kc.min(ke) >= 0.0)
}

/// Worst point found by a dense audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub min_form: f64,
    pub worst_knot: usize,
    pub worst_obstacle: Option<String>,
    pub points: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.min_form >= 1.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObstacleField {
    pub obstacles: Vec<EllipsoidObstacle>,
}

impl ObstacleField {
    pub fn new(obstacles: Vec<EllipsoidObstacle>) -> Result<Self> {
        for o in &obstacles {
            o.validate()?;
        }
        Ok(Self { obstacles })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.obstacles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty()
    }

    pub fn push(&mut self, obs: EllipsoidObstacle) -> Result<()> {
        obs.validate()?;
        self.obstacles.push(obs);
        Ok(())
    }

    /// Removes the obstacle with this name and returns it.
    pub fn remove(&mut self, name: &str) -> Option<EllipsoidObstacle> {
        let i = self.obstacles.iter().position(|o| o.name == name)?;
        Some(self.obstacles.remove(i))
    }

    pub fn without(&self, name: &str) -> Self {
        Self {
            obstacles: self.obstacles.iter().filter(|o| o.name != name).cloned().collect(),
        }
    }

    /// Half the shortest inflated semi-axis over the field; sampling spacing
    /// at or below this cannot step over an obstacle.
    pub fn tunneling_bound(&self) -> f64 {
        self.obstacles
            .iter()
            .map(|o| 0.5 * o.min_semi_axis())
            .fold(f64::INFINITY, f64::min)
    }

    /// Checks `h_check` against the tunneling bound. In strict mode a larger
    /// spacing is a configuration error; otherwise it is clamped.
    pub fn check_resolution(&self, h_check: f64, strict: bool) -> Result<f64> {
        if !(h_check > 0.0) {
            return Err(Error::Config(format!(
                "collision resolution must be positive, got {h_check}"
            )));
        }
        let bound = self.tunneling_bound();
        if h_check > bound {
            if strict {
                return Err(Error::Config(format!(
                    "collision resolution {h_check} exceeds the tunneling bound {bound}"
                )));
            }
            return Ok(bound);
        }
        Ok(h_check)
    }

    pub fn min_form(&self, x: &Vector3<f64>, k: usize) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.quadratic_form(x, k))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn point_clear(&self, x: &Vector3<f64>, k: usize) -> bool {
        self.obstacles.iter().all(|o| o.point_clear(x, k))
    }

    /// Clear iff every point of the segment is clear; the quadratic form is
    /// minimized exactly along the segment, which bounds every sampling of
    /// it at spacing `h_check`.
    pub fn segment_clear(&self, xa: &Vector3<f64>, xb: &Vector3<f64>, h_check: f64, strict: bool) -> Result<bool> {
        if self.is_empty() {
            return Ok(true);
        }
        self.check_resolution(h_check, strict)?;
        Ok(self.segment_clear_at(xa, xb, 0))
    }

    /// Segment test between time indices `k` and `k + 1`.
    pub fn segment_clear_at(&self, xa: &Vector3<f64>, xb: &Vector3<f64>, k: usize) -> bool {
        self.obstacles.iter().all(|o| o.segment_min_form(xa, xb, k) >= 1.0)
    }

    /// Every consecutive pair of knots, with knot `k` at time index `k`.
    pub fn path_clear(&self, positions: &[Vector3<f64>]) -> bool {
        match positions {
            [] => true,
            [p] => self.point_clear(p, 0),
            _ => positions
                .windows(2)
                .enumerate()
                .all(|(k, w)| self.segment_clear_at(&w[0], &w[1], k)),
        }
    }

    /// `1 − (x_k − x_obs,i)ᵀ P_i (x_k − x_obs,i)` stacked obstacle-major:
    /// entry `i·N + k` is obstacle `i` at knot `k`.
    pub fn trajectory_constraint(&self, positions: &[Vector3<f64>]) -> DVector<f64> {
        let n = positions.len();
        DVector::from_fn(self.len() * n, |idx, _| {
            let (i, k) = (idx / n, idx % n);
            1.0 - self.obstacles[i].quadratic_form(&positions[k], k)
        })
    }

    /// Dense sampled audit: every segment is sampled with `2^j` sub-intervals
    /// of length at most `h_check`, endpoints included.
    pub fn audit(&self, positions: &[Vector3<f64>], h_check: f64) -> AuditReport {
        let mut report = AuditReport {
            min_form: f64::INFINITY,
            worst_knot: 0,
            worst_obstacle: None,
            points: 0,
        };
        let visit = |x: &Vector3<f64>, t: f64, k: usize, report: &mut AuditReport| {
            report.points += 1;
            for o in &self.obstacles {
                let c = o.center_at(k) * (1.0 - t) + o.center_at(k + 1) * t;
                let d = x - c;
                let f = d.dot(&(o.effective_shape() * d));
                if f < report.min_form {
                    report.min_form = f;
                    report.worst_knot = k;
                    report.worst_obstacle = Some(o.name.clone());
                }
            }
        };
        if let Some(first) = positions.first() {
            visit(first, 0.0, 0, &mut report);
        }
        for (k, w) in positions.windows(2).enumerate() {
            let n = dyadic_pieces((w[1] - w[0]).norm(), h_check);
            for j in 1..=n {
                let t = j as f64 / n as f64;
                visit(&(w[0] + (w[1] - w[0]) * t), t, k, &mut report);
            }
        }
        report
    }
}

/// Smallest power of two `n` with `len / n ≤ h`; nested under refinement.
pub fn dyadic_pieces(len: f64, h: f64) -> usize {
    let mut n = 1usize;
    while len / n as f64 > h && n < 1 << 24 {
        n *= 2;
    }
    n
}
