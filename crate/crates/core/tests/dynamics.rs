//! Multibody dynamics against kinetic-energy oracles built directly from the
//! robot description.

use freeflyer::dynamics::{euler_rate_matrix, rk4_step, Dynamics, FreeFlyer, JointType, RobotDescription, StateLayout};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use proptest::prelude::*;

struct BodyVel {
    mass: f64,
    inertia: Matrix3<f64>,
    rot: Matrix3<f64>,
    com_vel: Vector3<f64>,
    omega: Vector3<f64>,
}

fn rx(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn ry(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rz(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn axis_rotation(axis: &Vector3<f64>, q: f64) -> Matrix3<f64> {
    let k = Matrix3::new(0.0, -axis.z, axis.y, axis.z, 0.0, -axis.x, -axis.y, axis.x, 0.0);
    Matrix3::identity() + k * q.sin() + k * k * (1.0 - q.cos())
}

/// Body velocities from generalized coordinates `(r, θ, q)` and their rates,
/// via the geometric Jacobian of each body.
fn body_velocities(desc: &RobotDescription, pos: &[f64], rates: &[f64]) -> Vec<BodyVel> {
    let r = Vector3::new(pos[0], pos[1], pos[2]);
    let theta = Vector3::new(pos[3], pos[4], pos[5]);
    let rot0 = rz(theta.z) * ry(theta.y) * rx(theta.x);
    let v0 = Vector3::new(rates[0], rates[1], rates[2]);
    let w0 = euler_rate_matrix(&theta) * Vector3::new(rates[3], rates[4], rates[5]);

    struct Frame {
        name: String,
        rot: Matrix3<f64>,
        com: Vector3<f64>,
        // (axis, joint point, rate) of every revolute ancestor joint
        chain: Vec<(Vector3<f64>, Vector3<f64>, f64)>,
    }
    let mut frames = vec![Frame {
        name: desc.base.clone(),
        rot: rot0,
        com: r,
        chain: vec![],
    }];
    let mut dof = 0;
    let mut dof_of = std::collections::HashMap::new();
    for j in &desc.joints {
        if j.kind == JointType::Revolute {
            dof_of.insert(j.name.clone(), dof);
            dof += 1;
        }
    }
    let mut i = 0;
    while i < frames.len() {
        let mut children = Vec::new();
        for j in desc.joints.iter().filter(|j| j.parent == frames[i].name) {
            let parent = &frames[i];
            let joint = parent.com + parent.rot * Vector3::from(j.origin);
            let mut chain = parent.chain.clone();
            let rot = match j.kind {
                JointType::Fixed => parent.rot,
                JointType::Revolute => {
                    let k = dof_of[&j.name];
                    let axis = Vector3::from(j.axis);
                    chain.push((parent.rot * axis, joint, rates[6 + k]));
                    parent.rot * axis_rotation(&axis, pos[6 + k])
                }
            };
            children.push(Frame {
                name: j.child.clone(),
                rot,
                com: joint + rot * Vector3::from(j.child_offset),
                chain,
            });
        }
        frames.extend(children);
        i += 1;
    }
    frames
        .iter()
        .map(|f| {
            let body = desc.bodies.iter().find(|b| b.name == f.name).unwrap();
            let mut omega = w0;
            let mut com_vel = v0 + w0.cross(&(f.com - r));
            for (a, p, qd) in &f.chain {
                omega += a * *qd;
                com_vel += a.cross(&(f.com - p)) * *qd;
            }
            BodyVel {
                mass: body.mass,
                inertia: Matrix3::from_fn(|r, c| body.inertia[r][c]),
                rot: f.rot,
                com_vel,
                omega,
            }
        })
        .collect()
}

/// Kinetic energy in generalized coordinates and rates.
fn energy_q(desc: &RobotDescription, pos: &[f64], rates: &[f64]) -> f64 {
    body_velocities(desc, pos, rates)
        .iter()
        .map(|b| {
            let iw = b.rot * b.inertia * b.rot.transpose();
            0.5 * b.mass * b.com_vel.norm_squared() + 0.5 * b.omega.dot(&(iw * b.omega))
        })
        .sum()
}

/// `W` with `ν = W q̇_gen`.
fn w_matrix(theta: &Vector3<f64>, dof: usize) -> DMatrix<f64> {
    let mut w = DMatrix::identity(dof, dof);
    w.view_mut((3, 3), (3, 3)).copy_from(&euler_rate_matrix(theta));
    w
}

/// Inertia in the generalized rates, by polarization of the energy.
fn hessian_q(desc: &RobotDescription, pos: &[f64]) -> DMatrix<f64> {
    let n = pos.len();
    let t = |v: &DVector<f64>| energy_q(desc, pos, v.as_slice());
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let ei = DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
        m[(i, i)] = 2.0 * t(&ei);
        for j in 0..i {
            let ej = DVector::from_fn(n, |k, _| if k == j { 1.0 } else { 0.0 });
            let v = t(&(&ei + &ej)) - t(&ei) - t(&ej);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn split(layout: StateLayout, x: &DVector<f64>) -> (Vec<f64>, DVector<f64>) {
    let d = layout.dof();
    (x.rows(0, d).iter().copied().collect(), x.rows(d, d).into_owned())
}

/// `G` in the velocity coordinates `ν = (v, ω, q̇)`.
fn oracle_mass_matrix(desc: &RobotDescription, x: &DVector<f64>) -> DMatrix<f64> {
    let layout = StateLayout::new(desc.joint_count());
    let (pos, _) = split(layout, x);
    let theta = Vector3::new(pos[3], pos[4], pos[5]);
    let w = w_matrix(&theta, layout.dof());
    let winv = w.clone().try_inverse().unwrap();
    winv.transpose() * hessian_q(desc, &pos) * winv
}

/// Bias `b` in `G ν̇ + b = τ` from the Euler-Lagrange equations.
fn oracle_bias(desc: &RobotDescription, x: &DVector<f64>) -> DVector<f64> {
    let layout = StateLayout::new(desc.joint_count());
    let d = layout.dof();
    let (pos, nu) = split(layout, x);
    let theta = Vector3::new(pos[3], pos[4], pos[5]);
    let w = w_matrix(&theta, d);
    let winv = w.clone().try_inverse().unwrap();
    let qd = &winv * &nu;
    let eps = 1e-5;
    let shifted =
        |s: f64, dir: &DVector<f64>| -> Vec<f64> { pos.iter().zip(dir.iter()).map(|(p, v)| p + s * v).collect() };
    let mdot = (hessian_q(desc, &shifted(eps, &qd)) - hessian_q(desc, &shifted(-eps, &qd))) / (2.0 * eps);
    let mut dtdq = DVector::zeros(d);
    for j in 0..d {
        let mut e = DVector::zeros(d);
        e[j] = 1.0;
        dtdq[j] = (energy_q(desc, &shifted(eps, &e), qd.as_slice())
            - energy_q(desc, &shifted(-eps, &e), qd.as_slice()))
            / (2.0 * eps);
    }
    let c_q = mdot * &qd - dtdq;
    let wdot = (w_matrix(
        &Vector3::new(pos[3] + eps * qd[3], pos[4] + eps * qd[4], pos[5] + eps * qd[5]),
        d,
    ) - w_matrix(
        &Vector3::new(pos[3] - eps * qd[3], pos[4] - eps * qd[4], pos[5] - eps * qd[5]),
        d,
    )) / (2.0 * eps);
    let g = oracle_mass_matrix(desc, x);
    winv.transpose() * c_q - g * wdot * qd
}

fn state(vals: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(vals)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

#[test]
fn mass_matrix_matches_energy_oracle() {
    let desc = RobotDescription::astrobee();
    let ff = FreeFlyer::new(&desc).unwrap();
    for q in [[0.0, 0.0], [std::f64::consts::FRAC_PI_2, 0.0], [0.4, -1.1]] {
        let mut x = DVector::zeros(16);
        x[3] = 0.2;
        x[4] = -0.3;
        x[5] = 1.0;
        x[6] = q[0];
        x[7] = q[1];
        let g = ff.mass_matrix(&x).unwrap();
        let oracle = oracle_mass_matrix(&desc, &x);
        assert!(rel(&g, &oracle) < 1e-12, "q = {q:?}\n{g}\n{oracle}");
    }
}

#[test]
fn bias_matches_lagrangian_oracle() {
    let desc = RobotDescription::astrobee();
    let ff = FreeFlyer::new(&desc).unwrap();
    let x = state(&[
        0.3, -0.2, 0.1, 0.2, -0.4, 0.7, 0.6, -0.9, 0.2, -0.1, 0.3, 1.5, -0.8, 0.6, 0.9, -1.2,
    ]);
    let b = ff.bias_forces(&x).unwrap();
    let oracle = oracle_bias(&desc, &x);
    let err = (&b - &oracle).amax() / oracle.amax();
    assert!(err < 1e-6, "relative error {err:e}\n{b}\n{oracle}");
}

#[test]
fn joint_torque_response_matches_dense_solve() {
    let desc = RobotDescription::astrobee();
    let ff = FreeFlyer::new(&desc).unwrap();
    let x = state(&[
        0.0, 0.0, 0.0, 0.1, 0.2, -0.3, 0.5, 0.4, 0.05, -0.02, 0.01, 0.4, -0.3, 0.2, 0.3, -0.1,
    ]);
    let mut u = DVector::zeros(8);
    u[6] = 0.25;
    let acc = ff.accelerations(&x, &u).unwrap();
    let g = oracle_mass_matrix(&desc, &x);
    let b = oracle_bias(&desc, &x);
    let dense = g.lu().solve(&(u - b)).unwrap();
    assert!((&acc - &dense).amax() < 1e-6 * dense.amax(), "{acc}\n{dense}");
}

#[test]
fn free_drift_linear_momentum_is_constant() {
    let ff = FreeFlyer::astrobee();
    let mut x = state(&[
        0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.2, -0.1, 0.05, 0.3, -0.2, 0.4, 0.5, -0.6,
    ]);
    let p0 = ff.linear_momentum(&x).unwrap();
    let c0 = ff.center_of_mass(&x).unwrap();
    let u = DVector::zeros(8);
    for _ in 0..2000 {
        x = rk4_step(&ff, &x, &u, 1e-3).unwrap();
    }
    let p = ff.linear_momentum(&x).unwrap();
    assert!((p - p0).norm() < 1e-9 * p0.norm());
    // the system center of mass moves in a straight line
    let c = ff.center_of_mass(&x).unwrap();
    assert!((c - (c0 + p0 / ff.total_mass() * 2.0)).norm() < 1e-9);
}

#[test]
fn singular_pitch_is_rejected() {
    let ff = FreeFlyer::astrobee();
    let mut x = DVector::zeros(16);
    x[4] = std::f64::consts::FRAC_PI_2;
    assert!(matches!(
        ff.derivative(&x, &DVector::zeros(8)),
        Err(freeflyer::Error::EulerSingularity { .. })
    ));
    x[4] = -std::f64::consts::FRAC_PI_2 + 1e-4;
    assert!(ff.derivative(&x, &DVector::zeros(8)).is_err());
}

#[test]
fn description_file_round_trip_builds_same_model() {
    let desc = RobotDescription::astrobee();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("robot.toml");
    std::fs::write(&path, desc.to_toml_string()).unwrap();
    let loaded = RobotDescription::load(&path).unwrap();
    assert_eq!(FreeFlyer::new(&loaded).unwrap(), FreeFlyer::new(&desc).unwrap());
}

fn any_state() -> impl Strategy<Value = DVector<f64>> {
    (
        prop::collection::vec(-2.0..2.0f64, 3),
        prop::collection::vec(-1.4..1.4f64, 3),
        prop::collection::vec(-3.0..3.0f64, 2),
        prop::collection::vec(-1.0..1.0f64, 8),
    )
        .prop_map(|(r, th, q, v)| DVector::from_iterator(16, r.into_iter().chain(th).chain(q).chain(v)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn mass_matrix_symmetric_psd(x in any_state()) {
        let ff = FreeFlyer::astrobee();
        let g = ff.mass_matrix(&x).unwrap();
        prop_assert!((&g - g.transpose()).amax() <= 1e-14 * g.amax());
        let eig = g.symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() > 0.0);
    }

    #[test]
    fn equations_of_motion_residual(x in any_state(), u in prop::collection::vec(-2.0..2.0f64, 8)) {
        let ff = FreeFlyer::astrobee();
        let u = DVector::from_vec(u);
        let acc = ff.accelerations(&x, &u).unwrap();
        let residual = ff.mass_matrix(&x).unwrap() * acc + ff.bias_forces(&x).unwrap() - &u;
        prop_assert!(residual.amax() < 1e-10);
    }
}

#[test]
fn structured_jacobians_match_plain_differences() {
    let ff = FreeFlyer::astrobee();
    let x = state(&[
        0.3, -0.2, 0.1, 0.2, -0.4, 0.7, 0.6, -0.9, 0.2, -0.1, 0.3, 1.5, -0.8, 0.6, 0.9, -1.2,
    ]);
    let u = DVector::from_fn(8, |i, _| 0.1 * i as f64 - 0.3);
    let (fx, fu) = ff.jacobians(&x, &u).unwrap();
    let (gx, gu) = freeflyer::dynamics::jacobians_fd(&ff, &x, &u).unwrap();
    assert!((&fx - &gx).amax() < 1e-7 * gx.amax(), "{}", (&fx - &gx).amax());
    assert!((&fu - &gu).amax() < 1e-7 * gu.amax());

    // RK4 step derivative against differences of the step itself
    let h = 0.1;
    let (ax, au) = ff.step_jacobians(&x, &u, h).unwrap();
    for j in 3..16 {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += 1e-6;
        xm[j] -= 1e-6;
        let col = (rk4_step(&ff, &xp, &u, h).unwrap() - rk4_step(&ff, &xm, &u, h).unwrap()) / 2e-6;
        assert!((ax.column(j) - &col).amax() < 1e-7, "column {j}");
    }
    for j in 0..8 {
        let mut up = u.clone();
        let mut um = u.clone();
        up[j] += 1e-6;
        um[j] -= 1e-6;
        let col = (rk4_step(&ff, &x, &up, h).unwrap() - rk4_step(&ff, &x, &um, h).unwrap()) / 2e-6;
        assert!((au.column(j) - &col).amax() < 1e-7, "control column {j}");
    }
}
