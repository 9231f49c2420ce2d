mod common;

use common::{expm, random_matrix, random_vector, rng, uniform};
use freeflyer::dynamics::{rk4_step, Dynamics, FreeFlyer};
use freeflyer::ltv::{build_ltv_along, discretize, linearize};
use freeflyer::Trajectory;
use nalgebra::{dmatrix, DMatrix, DVector, Vector3};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

fn random_state(ff: &FreeFlyer, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let n = ff.layout().state_dim();
    let mut x = random_vector(rng, n, 1.0);
    x[4] = uniform(rng, -1.2, 1.2);
    x
}

#[test]
fn directional_derivative_agrees() {
    let ff = FreeFlyer::astrobee();
    let mut r = rng(11);
    for _ in 0..20 {
        let x = random_state(&ff, &mut r);
        let u = random_vector(&mut r, 8, 1.0);
        let v = random_vector(&mut r, 16, 1.0);
        let lin = linearize(&ff, &x, &u).unwrap();
        let eps = 1e-6;
        let fp = ff.derivative(&(&x + &v * eps), &u).unwrap();
        let fm = ff.derivative(&(&x - &v * eps), &u).unwrap();
        let fd = (fp - fm) / (2.0 * eps);
        let av = &lin.a * &v;
        assert!(
            (&fd - &av).norm() <= 1e-5 * av.norm().max(1.0),
            "{}",
            (&fd - &av).norm()
        );
        let w = random_vector(&mut r, 8, 1.0);
        let fp = ff.derivative(&x, &(&u + &w * eps)).unwrap();
        let fm = ff.derivative(&x, &(&u - &w * eps)).unwrap();
        let bw = &lin.b * &w;
        assert!(((fp - fm) / (2.0 * eps) - &bw).norm() <= 1e-5 * bw.norm().max(1.0));
    }
}

#[test]
fn taylor_remainder_is_quadratic() {
    let ff = FreeFlyer::astrobee();
    let mut r = rng(12);
    for _ in 0..100 {
        let x = random_state(&ff, &mut r);
        let u = random_vector(&mut r, 8, 1.0);
        let dir = random_vector(&mut r, 16, 1.0).normalize();
        let lin = linearize(&ff, &x, &u).unwrap();
        let scales = [1e-1, 5e-2, 2.5e-2, 1.25e-2, 6.25e-3];
        let pts: Vec<(f64, f64)> = scales
            .iter()
            .map(|&s| {
                let d = &dir * s;
                let rem = ff.derivative(&(&x + &d), &u).unwrap() - &lin.f - &lin.a * &d;
                (s.ln(), rem.norm().ln())
            })
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        assert!(num / den >= 1.9, "slope {}", num / den);
    }
}

#[test]
fn stable_spiral_close_to_exponential() {
    let a = dmatrix![-0.5, 2.0; -2.0, -0.5];
    let h = 0.1;
    let (ad, _) = discretize(&a, &DMatrix::zeros(2, 1), h).unwrap();
    let err = (ad - expm(&(&a * h))).norm();
    let bound = 2.0 * (&a * h).norm().powi(5) / 120.0;
    assert!(err <= bound, "{err} > {bound}");
}

#[test]
fn input_matrix_matches_integrated_exponential() {
    // Γ = ∫₀ʰ e^{Ãs} ds from the augmented exponential of [[Ã, B̃], [0, 0]].
    let mut r = rng(13);
    let a = random_matrix(&mut r, 3, 3, 1.0);
    let b = random_matrix(&mut r, 3, 2, 1.0);
    let h = 0.05;
    let mut aug = DMatrix::zeros(5, 5);
    aug.view_mut((0, 0), (3, 3)).copy_from(&(&a * h));
    aug.view_mut((0, 3), (3, 2)).copy_from(&(&b * h));
    let e = expm(&aug);
    let (_, bd) = discretize(&a, &b, h).unwrap();
    let err = (bd - e.view((0, 3), (3, 2))).norm();
    assert!(err < (&a * h).norm().powi(4) * h * b.norm(), "{err}");
}

#[test]
fn free_drift_propagation() {
    let ff = FreeFlyer::astrobee();
    let mut x0 = ff
        .layout()
        .at_rest(Vector3::new(0.2, -0.1, 0.3), Vector3::new(0.1, -0.2, 0.4), &[0.3, -0.5]);
    for (i, v) in [0.05, -0.02, 0.03, 0.1, -0.05, 0.08, 0.2, -0.1].iter().enumerate() {
        x0[8 + i] = *v;
    }
    let traj = Trajectory::rollout(&ff, &x0, &vec![DVector::zeros(8); 20], 0.1).unwrap();
    let ltv = build_ltv_along(&ff, &traj).unwrap();
    let mut r = rng(14);
    for k in 0..traj.steps() {
        let dx = random_vector(&mut r, 16, 1.0).normalize() * 1e-3;
        let predicted = &traj.states[k + 1] + &ltv.a[k] * &dx + &ltv.g[k];
        let actual = rk4_step(&ff, &(&traj.states[k] + &dx), &traj.controls[k], 0.1).unwrap();
        assert!((predicted - actual).amax() < 1e-4);
    }
}

#[test]
fn residual_tracks_inconsistent_reference() {
    let ff = FreeFlyer::astrobee();
    let x = ff.layout().at_rest(Vector3::zeros(), Vector3::zeros(), &[0.0, 0.0]);
    let mut y = x.clone();
    y[0] = 0.1;
    let u = DVector::from_fn(8, |i, _| if i == 0 { 1.0 } else { 0.0 });
    let traj = Trajectory::new(0.1, vec![x.clone(), y.clone()], vec![u.clone(), u.clone()]).unwrap();
    let ltv = build_ltv_along(&ff, &traj).unwrap();
    let expect = rk4_step(&ff, &x, &u, 0.1).unwrap() - &y;
    assert_eq!(ltv.g[0], expect);
    assert_eq!(ltv.g[1], rk4_step(&ff, &y, &u, 0.1).unwrap() - &y);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn discretize_is_termwise_polynomial(seed in any::<u64>(), h in 1e-3f64..0.5) {
        let mut r = rng(seed);
        let a = random_matrix(&mut r, 4, 4, 2.0);
        let b = random_matrix(&mut r, 4, 2, 2.0);
        let (ad, bd) = discretize(&a, &b, h).unwrap();
        let eye = DMatrix::<f64>::identity(4, 4);
        let a2 = &a * &a;
        let a3 = &a2 * &a;
        let a4 = &a3 * &a;
        let c2 = h * h / 2.0;
        let c3 = h * h * h / 6.0;
        let c4 = h * h * h * h / 24.0;
        let expect_a = &eye + &a * h + &a2 * c2 + &a3 * c3 + &a4 * c4;
        let expect_b = (&eye * h + &a * c2 + &a2 * c3 + &a3 * c4) * &b;
        prop_assert_eq!(ad, expect_a);
        prop_assert_eq!(bd, expect_b);
    }

    #[test]
    fn equilibrium_is_fixed_point(seed in any::<u64>()) {
        let ff = FreeFlyer::astrobee();
        let mut r = rng(seed);
        let q = [uniform(&mut r, -2.0, 2.0), uniform(&mut r, -2.0, 2.0)];
        let theta = Vector3::new(uniform(&mut r, -3.0, 3.0), uniform(&mut r, -1.4, 1.4), uniform(&mut r, -3.0, 3.0));
        let x = ff.layout().at_rest(random_vector(&mut r, 3, 5.0).fixed_rows::<3>(0).into_owned(), theta, &q);
        let traj = Trajectory::new(0.1, vec![x.clone(); 3], vec![DVector::zeros(8); 3]).unwrap();
        let ltv = build_ltv_along(&ff, &traj).unwrap();
        for k in 0..3 {
            prop_assert_eq!(ltv.step(k, &DVector::zeros(16), &DVector::zeros(8)).amax(), 0.0);
        }
    }
}
