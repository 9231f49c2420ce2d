//! Minimal 6-D spatial algebra, angular part first.
//!
//! All quantities are expressed in a world-aligned frame whose origin
//! coincides with the base center of mass at the current instant.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use nalgebra::{Matrix3, Vector3};

/// Motion vector `[ω; v]` or force vector `[n; f]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Spatial {
    pub ang: Vector3<f64>,
    pub lin: Vector3<f64>,
}

impl Spatial {
    pub const fn new(ang: Vector3<f64>, lin: Vector3<f64>) -> Self {
        Self { ang, lin }
    }

    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn dot(&self, other: &Spatial) -> f64 {
        self.ang.dot(&other.ang) + self.lin.dot(&other.lin)
    }

    /// Motion cross product `self ×m m`.
    pub fn cross_motion(&self, m: &Spatial) -> Spatial {
        Spatial::new(self.ang.cross(&m.ang), self.ang.cross(&m.lin) + self.lin.cross(&m.ang))
    }

    /// Force cross product `self ×f f`.
    pub fn cross_force(&self, f: &Spatial) -> Spatial {
        Spatial::new(self.ang.cross(&f.ang) + self.lin.cross(&f.lin), self.ang.cross(&f.lin))
    }
}

impl Add for Spatial {
    type Output = Spatial;
    fn add(self, o: Spatial) -> Spatial {
        Spatial::new(self.ang + o.ang, self.lin + o.lin)
    }
}

impl Sub for Spatial {
    type Output = Spatial;
    fn sub(self, o: Spatial) -> Spatial {
        Spatial::new(self.ang - o.ang, self.lin - o.lin)
    }
}

impl AddAssign for Spatial {
    fn add_assign(&mut self, o: Spatial) {
        self.ang += o.ang;
        self.lin += o.lin;
    }
}

impl Neg for Spatial {
    type Output = Spatial;
    fn neg(self) -> Spatial {
        Spatial::new(-self.ang, -self.lin)
    }
}

impl Mul<f64> for Spatial {
    type Output = Spatial;
    fn mul(self, s: f64) -> Spatial {
        Spatial::new(self.ang * s, self.lin * s)
    }
}

/// Rigid-body spatial inertia about the frame origin.
///
/// `h` is the first mass moment `m·c` and `rot` the rotational inertia about
/// the origin, `I_c + m(|c|²I − ccᵀ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialInertia {
    pub mass: f64,
    pub h: Vector3<f64>,
    pub rot: Matrix3<f64>,
}

impl SpatialInertia {
    pub fn zero() -> Self {
        Self {
            mass: 0.0,
            h: Vector3::zeros(),
            rot: Matrix3::zeros(),
        }
    }

    /// Body of mass `m` with center of mass `c` and inertia `i_com` about it.
    pub fn from_com(mass: f64, c: &Vector3<f64>, i_com: &Matrix3<f64>) -> Self {
        let shift = mass * (Matrix3::identity() * c.norm_squared() - c * c.transpose());
        Self {
            mass,
            h: c * mass,
            rot: i_com + shift,
        }
    }

    pub fn com(&self) -> Vector3<f64> {
        self.h / self.mass
    }

    pub fn apply(&self, m: &Spatial) -> Spatial {
        Spatial::new(
            self.rot * m.ang + self.h.cross(&m.lin),
            m.lin * self.mass + m.ang.cross(&self.h),
        )
    }
}

impl AddAssign for SpatialInertia {
    fn add_assign(&mut self, o: SpatialInertia) {
        self.mass += o.mass;
        self.h += o.h;
        self.rot += o.rot;
    }
}

impl Add for SpatialInertia {
    type Output = SpatialInertia;
    fn add(mut self, o: SpatialInertia) -> SpatialInertia {
        self += o;
        self
    }
}
