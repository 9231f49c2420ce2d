//! Floating-base serial-arm dynamics.
//!
//! State `x = [r, θ, q, v, ω, q̇]` with `r` the base center of mass in the
//! world, `θ = (roll, pitch, yaw)` Z-Y-X Euler angles, `v` and `ω` the base
//! linear and angular velocity in world axes. Control
//! `τ = [F, n, τ_q]` with force and torque on the base in world axes (torque
//! about the base center of mass) and joint torques.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};

use super::description::{JointType, RobotDescription};
use super::spatial::{Spatial, SpatialInertia};
use super::{fd_step, Dynamics};
use crate::error::{check_dim, Error, Result};

/// Half-width of the excluded band around pitch = ±π/2, rad.
pub const PITCH_GUARD: f64 = 1e-3;

/// `R = Rz(yaw)·Ry(pitch)·Rx(roll)`.
pub fn rotation(theta: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_euler_angles(theta[0], theta[1], theta[2]).into_inner()
}

/// `E(θ)` with `ω = E θ̇`.
pub fn euler_rate_matrix(theta: &Vector3<f64>) -> Matrix3<f64> {
    let (sp, cp) = theta[1].sin_cos();
    let (sy, cy) = theta[2].sin_cos();
    Matrix3::new(cy * cp, -sy, 0.0, sy * cp, cy, 0.0, -sp, 0.0, 1.0)
}

/// `θ̇ = E(θ)⁻¹ ω`.
pub fn euler_rates(theta: &Vector3<f64>, omega: &Vector3<f64>) -> Result<Vector3<f64>> {
    let (sp, cp) = theta[1].sin_cos();
    if cp.abs() < PITCH_GUARD.sin() {
        return Err(Error::EulerSingularity { pitch: theta[1] });
    }
    let (sy, cy) = theta[2].sin_cos();
    let roll = (cy * omega[0] + sy * omega[1]) / cp;
    let pitch = -sy * omega[0] + cy * omega[1];
    let yaw = omega[2] + sp * roll;
    Ok(Vector3::new(roll, pitch, yaw))
}

/// Index arithmetic for the stacked state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StateLayout {
    pub n_m: usize,
}

impl StateLayout {
    pub fn new(n_m: usize) -> Self {
        Self { n_m }
    }

    /// Generalized coordinates, 6 + N_m.
    pub fn dof(&self) -> usize {
        6 + self.n_m
    }

    pub fn state_dim(&self) -> usize {
        2 * self.dof()
    }

    pub fn control_dim(&self) -> usize {
        self.dof()
    }

    pub fn position(&self, x: &DVector<f64>) -> Vector3<f64> {
        x.fixed_rows::<3>(0).into_owned()
    }

    pub fn attitude(&self, x: &DVector<f64>) -> Vector3<f64> {
        x.fixed_rows::<3>(3).into_owned()
    }

    pub fn joints(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(6, self.n_m).into_owned()
    }

    pub fn velocity(&self, x: &DVector<f64>) -> Vector3<f64> {
        x.fixed_rows::<3>(self.dof()).into_owned()
    }

    pub fn angular_velocity(&self, x: &DVector<f64>) -> Vector3<f64> {
        x.fixed_rows::<3>(self.dof() + 3).into_owned()
    }

    pub fn joint_rates(&self, x: &DVector<f64>) -> DVector<f64> {
        x.rows(self.dof() + 6, self.n_m).into_owned()
    }

    /// Index of the first velocity coordinate.
    pub fn vel_offset(&self) -> usize {
        self.dof()
    }

    /// Base pose at rest with the given joint angles.
    pub fn at_rest(&self, r: Vector3<f64>, theta: Vector3<f64>, q: &[f64]) -> DVector<f64> {
        let mut x = DVector::zeros(self.state_dim());
        x.fixed_rows_mut::<3>(0).copy_from(&r);
        x.fixed_rows_mut::<3>(3).copy_from(&theta);
        for (i, v) in q.iter().take(self.n_m).enumerate() {
            x[6 + i] = *v;
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Link {
    /// Parent link index; 0 is the base.
    parent: usize,
    /// Generalized-coordinate index among the joints.
    dof: usize,
    /// Joint axis in the parent link frame.
    axis: Unit<Vector3<f64>>,
    /// Joint point in the parent link frame.
    origin: Vector3<f64>,
    /// Link frame origin relative to the joint point, link frame.
    offset: Vector3<f64>,
}

/// Where an original body ended up after merging rigid attachments.
#[derive(Debug, Clone, Copy, PartialEq)]
struct BodyAnchor {
    link: usize,
    offset: Vector3<f64>,
}

/// Compiled multibody model of a free-flying base with a serial arm.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeFlyer {
    /// Links in topological order; entry 0 is the base and has no joint.
    links: Vec<Option<Link>>,
    /// Per-link inertia about the link frame origin, link axes.
    inertia: Vec<SpatialInertia>,
    anchors: HashMap<String, BodyAnchor>,
    layout: StateLayout,
    total_mass: f64,
    name: String,
}

/// Per-state kinematic quantities.
struct Kinematics {
    /// Link rotations, base first.
    rot: Vec<Matrix3<f64>>,
    /// Link frame origins relative to the base origin, world axes.
    pos: Vec<Vector3<f64>>,
    /// Joint motion subspaces (index 0 unused).
    axis: Vec<Spatial>,
    /// Spatial inertias about the base origin.
    inertia: Vec<SpatialInertia>,
}

impl FreeFlyer {
    pub fn new(desc: &RobotDescription) -> Result<Self> {
        desc.validate()?;
        let body_index: HashMap<&str, usize> = desc
            .bodies
            .iter()
            .enumerate()
            .map(|(i, b)| (b.name.as_str(), i))
            .collect();
        let body_inertia = |i: usize, at: Vector3<f64>| {
            let b = &desc.bodies[i];
            let i_com = Matrix3::from_fn(|r, c| b.inertia[r][c]);
            SpatialInertia::from_com(b.mass, &at, &i_com)
        };

        let mut links = vec![None];
        let mut inertia = vec![body_inertia(body_index[desc.base.as_str()], Vector3::zeros())];
        let mut anchors = HashMap::new();
        anchors.insert(
            desc.base.clone(),
            BodyAnchor {
                link: 0,
                offset: Vector3::zeros(),
            },
        );
        let dof_of: HashMap<&str, usize> = desc
            .joints
            .iter()
            .filter(|j| j.kind == JointType::Revolute)
            .enumerate()
            .map(|(k, j)| (j.name.as_str(), k))
            .collect();

        // breadth-first from the base so parents precede children
        let mut frontier = vec![desc.base.clone()];
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for parent in &frontier {
                let parent_anchor = anchors[parent.as_str()];
                for j in desc.joints.iter().filter(|j| &j.parent == parent) {
                    let child = body_index[j.child.as_str()];
                    let origin = parent_anchor.offset + Vector3::from(j.origin);
                    let offset = Vector3::from(j.child_offset);
                    let anchor = match j.kind {
                        JointType::Fixed => {
                            let at = origin + offset;
                            inertia[parent_anchor.link] += body_inertia(child, at);
                            BodyAnchor {
                                link: parent_anchor.link,
                                offset: at,
                            }
                        }
                        JointType::Revolute => {
                            links.push(Some(Link {
                                parent: parent_anchor.link,
                                dof: dof_of[j.name.as_str()],
                                axis: Unit::new_normalize(Vector3::from(j.axis)),
                                origin,
                                offset,
                            }));
                            inertia.push(body_inertia(child, Vector3::zeros()));
                            BodyAnchor {
                                link: links.len() - 1,
                                offset: Vector3::zeros(),
                            }
                        }
                    };
                    anchors.insert(j.child.clone(), anchor);
                    next.push(j.child.clone());
                }
            }
            frontier = next;
        }

        let total_mass = desc.bodies.iter().map(|b| b.mass).sum();
        Ok(Self {
            links,
            inertia,
            anchors,
            layout: StateLayout::new(desc.joint_count()),
            total_mass,
            name: desc.name.clone(),
        })
    }

    pub fn astrobee() -> Self {
        Self::new(&RobotDescription::astrobee()).expect("built-in description is valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn layout(&self) -> StateLayout {
        self.layout
    }

    pub fn joint_count(&self) -> usize {
        self.layout.n_m
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        check_dim("state", self.layout.state_dim(), x.len())
    }

    fn kinematics(&self, x: &DVector<f64>) -> Kinematics {
        let n = self.links.len();
        let mut rot = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        let mut axis = Vec::with_capacity(n);
        let mut inertia = Vec::with_capacity(n);
        for (i, link) in self.links.iter().enumerate() {
            let (r, p, s) = match link {
                None => (rotation(&self.layout.attitude(x)), Vector3::zeros(), Spatial::zeros()),
                Some(l) => {
                    let rp: Matrix3<f64> = rot[l.parent];
                    let pp: Vector3<f64> = pos[l.parent];
                    let q = x[6 + l.dof];
                    let r = rp * Rotation3::from_axis_angle(&l.axis, q).into_inner();
                    let joint: Vector3<f64> = pp + rp * l.origin;
                    let a = rp * l.axis.into_inner();
                    (r, joint + r * l.offset, Spatial::new(a, joint.cross(&a)))
                }
            };
            let local = &self.inertia[i];
            let c = local.com();
            let i_com = local.rot - local.mass * (Matrix3::identity() * c.norm_squared() - c * c.transpose());
            inertia.push(SpatialInertia::from_com(
                local.mass,
                &(p + r * c),
                &(r * i_com * r.transpose()),
            ));
            rot.push(r);
            pos.push(p);
            axis.push(s);
        }
        Kinematics {
            rot,
            pos,
            axis,
            inertia,
        }
    }

    fn base_twist(&self, x: &DVector<f64>) -> Spatial {
        Spatial::new(self.layout.angular_velocity(x), self.layout.velocity(x))
    }

    fn link_twists(&self, x: &DVector<f64>, kin: &Kinematics) -> Vec<Spatial> {
        let off = self.layout.vel_offset() + 6;
        let mut twist = Vec::with_capacity(self.links.len());
        for (i, link) in self.links.iter().enumerate() {
            twist.push(match link {
                None => self.base_twist(x),
                Some(l) => twist[l.parent] + kin.axis[i] * x[off + l.dof],
            });
        }
        twist
    }

    fn joint_dof(&self, i: usize) -> usize {
        6 + self.links[i].as_ref().map_or(0, |l| l.dof)
    }

    fn mass_matrix_from(&self, kin: &Kinematics) -> DMatrix<f64> {
        let n = self.layout.dof();
        let mut composite = kin.inertia.clone();
        for i in (1..self.links.len()).rev() {
            let p = self.links[i].as_ref().map(|l| l.parent).unwrap_or(0);
            let c = composite[i];
            composite[p] += c;
        }
        let mut g = DMatrix::zeros(n, n);
        let base = &composite[0];
        for j in 0..3 {
            let mut e = Vector3::zeros();
            e[j] = 1.0;
            let fv = base.apply(&Spatial::new(Vector3::zeros(), e));
            let fw = base.apply(&Spatial::new(e, Vector3::zeros()));
            for i in 0..3 {
                g[(i, j)] = fv.lin[i];
                g[(i + 3, j)] = fv.ang[i];
                g[(i, j + 3)] = fw.lin[i];
                g[(i + 3, j + 3)] = fw.ang[i];
            }
        }
        for i in 1..self.links.len() {
            let di = self.joint_dof(i);
            let f = composite[i].apply(&kin.axis[i]);
            g[(di, di)] = kin.axis[i].dot(&f);
            for r in 0..3 {
                g[(r, di)] = f.lin[r];
                g[(r + 3, di)] = f.ang[r];
                g[(di, r)] = f.lin[r];
                g[(di, r + 3)] = f.ang[r];
            }
            let mut j = self.links[i].as_ref().map_or(0, |l| l.parent);
            while j != 0 {
                let dj = self.joint_dof(j);
                let v = kin.axis[j].dot(&f);
                g[(dj, di)] = v;
                g[(di, dj)] = v;
                j = self.links[j].as_ref().map_or(0, |l| l.parent);
            }
        }
        g
    }

    fn bias_from(&self, x: &DVector<f64>, kin: &Kinematics) -> DVector<f64> {
        let off = self.layout.vel_offset() + 6;
        let twist = self.link_twists(x, kin);
        let v0 = self.base_twist(x);
        let nl = self.links.len();
        let mut acc = Vec::with_capacity(nl);
        let mut force = Vec::with_capacity(nl);
        for (i, link) in self.links.iter().enumerate() {
            let a = match link {
                None => Spatial::new(Vector3::zeros(), -v0.ang.cross(&v0.lin)),
                Some(l) => {
                    let a: Spatial = acc[l.parent];
                    a + twist[i].cross_motion(&kin.axis[i]) * x[off + l.dof]
                }
            };
            let inertia = &kin.inertia[i];
            force.push(inertia.apply(&a) + twist[i].cross_force(&inertia.apply(&twist[i])));
            acc.push(a);
        }
        let mut b = DVector::zeros(self.layout.dof());
        for i in (1..nl).rev() {
            let l = self.links[i].as_ref().expect("non-base link");
            b[6 + l.dof] = kin.axis[i].dot(&force[i]);
            let f = force[i];
            force[l.parent] += f;
        }
        b.fixed_rows_mut::<3>(0).copy_from(&force[0].lin);
        b.fixed_rows_mut::<3>(3).copy_from(&force[0].ang);
        b
    }

    /// Generalized inertia `G(x)`.
    pub fn mass_matrix(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        Ok(self.mass_matrix_from(&self.kinematics(x)))
    }

    /// Velocity-product terms `D(x, ẋ)·ẋ`.
    pub fn bias_forces(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        Ok(self.bias_from(x, &self.kinematics(x)))
    }

    /// Generalized accelerations solving `G ν̇ = τ − D ẋ`.
    pub fn accelerations(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        check_dim("control", self.layout.control_dim(), u.len())?;
        let kin = self.kinematics(x);
        let g = self.mass_matrix_from(&kin);
        let rhs = u - self.bias_from(x, &kin);
        let chol = g
            .cholesky()
            .ok_or_else(|| Error::SolveFailure("generalized inertia is not positive definite".into()))?;
        Ok(chol.solve(&rhs))
    }

    /// `½ νᵀ G ν`.
    pub fn kinetic_energy(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_state(x)?;
        let kin = self.kinematics(x);
        let twist = self.link_twists(x, &kin);
        Ok(twist
            .iter()
            .zip(&kin.inertia)
            .map(|(v, i)| 0.5 * v.dot(&i.apply(v)))
            .sum())
    }

    /// Total linear momentum, world axes.
    pub fn linear_momentum(&self, x: &DVector<f64>) -> Result<Vector3<f64>> {
        self.check_state(x)?;
        let kin = self.kinematics(x);
        let twist = self.link_twists(x, &kin);
        Ok(twist.iter().zip(&kin.inertia).map(|(v, i)| i.apply(v).lin).sum())
    }

    /// World position of a named body's center of mass.
    pub fn body_position(&self, x: &DVector<f64>, body: &str) -> Result<Vector3<f64>> {
        self.check_state(x)?;
        let anchor = self
            .anchors
            .get(body)
            .ok_or_else(|| Error::Config(format!("unknown body `{body}`")))?;
        let kin = self.kinematics(x);
        Ok(self.layout.position(x) + kin.pos[anchor.link] + kin.rot[anchor.link] * anchor.offset)
    }

    /// Whole-system center of mass, world.
    pub fn center_of_mass(&self, x: &DVector<f64>) -> Result<Vector3<f64>> {
        self.check_state(x)?;
        let kin = self.kinematics(x);
        let h: Vector3<f64> = kin.inertia.iter().map(|i| i.h).sum();
        Ok(self.layout.position(x) + h / self.total_mass)
    }
}

impl Dynamics for FreeFlyer {
    fn state_dim(&self) -> usize {
        self.layout.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.layout.control_dim()
    }

    fn translation_invariant(&self) -> bool {
        true
    }

    fn velocity_from_rates(&self, x: &DVector<f64>, rates: &DVector<f64>) -> Result<DVector<f64>> {
        let l = self.layout;
        check_dim("configuration rates", l.dof(), rates.len())?;
        let mut v = rates.clone();
        let omega = euler_rate_matrix(&l.attitude(x)) * rates.fixed_rows::<3>(3);
        v.fixed_rows_mut::<3>(3).copy_from(&omega);
        Ok(v)
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let l = self.layout;
        let rates = euler_rates(&l.attitude(x), &l.angular_velocity(x))?;
        let acc = self.accelerations(x, u)?;
        let mut dx = DVector::zeros(l.state_dim());
        let d = l.dof();
        dx.fixed_rows_mut::<3>(0).copy_from(&l.velocity(x));
        dx.fixed_rows_mut::<3>(3).copy_from(&rates);
        dx.rows_mut(6, l.n_m).copy_from(&x.rows(d + 6, l.n_m));
        dx.rows_mut(d, d).copy_from(&acc);
        Ok(dx)
    }

    /// Central differences over the configuration only. The velocity block
    /// reuses the factorization of `G`, which does not depend on velocities,
    /// and `∂f/∂u = [0; G⁻¹]` is exact.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_state(x)?;
        check_dim("control", self.layout.control_dim(), u.len())?;
        let l = self.layout;
        let d = l.dof();
        let n = l.state_dim();
        let mut fx = DMatrix::zeros(n, n);
        let mut fu = DMatrix::zeros(n, d);

        let mut xp = x.clone();
        for j in 3..d {
            let e = fd_step(x[j]);
            xp[j] = x[j] + e;
            let hi = self.derivative(&xp, u)?;
            xp[j] = x[j] - e;
            let lo = self.derivative(&xp, u)?;
            xp[j] = x[j];
            fx.set_column(j, &((hi - lo) / (2.0 * e)));
        }

        let kin = self.kinematics(x);
        let chol = self
            .mass_matrix_from(&kin)
            .cholesky()
            .ok_or_else(|| Error::SolveFailure("generalized inertia is not positive definite".into()))?;
        let theta = l.attitude(x);
        for j in 0..3 {
            fx[(j, d + j)] = 1.0;
            let mut e = Vector3::zeros();
            e[j] = 1.0;
            let col = euler_rates(&theta, &e)?;
            for i in 0..3 {
                fx[(3 + i, d + 3 + j)] = col[i];
            }
        }
        for k in 0..l.n_m {
            fx[(6 + k, d + 6 + k)] = 1.0;
        }
        let mut xv = x.clone();
        for j in d..n {
            let e = fd_step(x[j]);
            xv[j] = x[j] + e;
            let hi = self.bias_from(&xv, &kin);
            xv[j] = x[j] - e;
            let lo = self.bias_from(&xv, &kin);
            xv[j] = x[j];
            let col = chol.solve(&((lo - hi) / (2.0 * e)));
            fx.view_mut((d, j), (d, 1)).copy_from(&col);
        }
        fu.view_mut((d, 0), (d, d)).copy_from(&chol.inverse());
        Ok((fx, fu))
    }
}
