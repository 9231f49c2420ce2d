mod common;

use common::{dense_optimum, random_cost, random_matrix, random_vector, rng, sequence_cost};
use freeflyer::dynamics::{FreeFlyer, LinearDynamics};
use freeflyer::lqr::{cost_to_go, lqr_steer, riccati_backward_pass, track, QuadraticCost, StageCost};
use freeflyer::ltv::LtvSystem;
use freeflyer::{Error, Trajectory};
use nalgebra::{dmatrix, dvector, DMatrix, DVector, Vector3};
use proptest::prelude::*;

struct Problem {
    ltv: LtvSystem,
    cost: QuadraticCost,
    x0: DVector<f64>,
}

fn random_problem(seed: u64, n: usize, m: usize, steps: usize, affine: bool) -> Problem {
    let mut r = rng(seed);
    let a = random_matrix(&mut r, n, n, 0.8);
    let b = random_matrix(&mut r, n, m, 1.0);
    let g = random_vector(&mut r, n, if affine { 0.3 } else { 0.0 });
    let cost = random_cost(&mut r, n, m, affine);
    let x0 = random_vector(&mut r, n, 1.0);
    let ltv = LtvSystem::time_invariant(a, b, g, DVector::zeros(n), DVector::zeros(m), 0.1, steps).unwrap();
    Problem { ltv, cost, x0 }
}

fn policy_rollout(p: &Problem) -> (Vec<DVector<f64>>, f64) {
    let vfs = riccati_backward_pass(&p.ltv, &p.cost).unwrap();
    let mut x = p.x0.clone();
    let mut us = vec![];
    for k in 0..p.ltv.len() {
        let u = vfs.policy(k, &x);
        x = p.ltv.step(k, &x, &u);
        us.push(u);
    }
    let j = sequence_cost(&p.ltv.a, &p.ltv.b, &p.ltv.g, &p.cost, &p.x0, &us);
    (us, j)
}

#[test]
fn scalar_one_step() {
    let ltv = LtvSystem::time_invariant(
        dmatrix![1.0],
        dmatrix![1.0],
        dvector![0.0],
        dvector![0.0],
        dvector![0.0],
        1.0,
        1,
    )
    .unwrap();
    let cost = QuadraticCost::diagonal(&[1.0], &[1.0], &[1.0]).unwrap();
    let vfs = riccati_backward_pass(&ltv, &cost).unwrap();
    assert_eq!(vfs.s[0][(0, 0)], 1.5);
    assert!((vfs.k[0][(0, 0)] + 0.5).abs() < 1e-15);
    assert_eq!(vfs.l[0][0], 0.0);
    assert_eq!(vfs.s[1][(0, 0)], 1.0);
}

#[test]
fn uncontrollable_limit() {
    let a = dmatrix![1.0, 0.2; 0.0, 0.9];
    let ltv = LtvSystem::time_invariant(
        a.clone(),
        DMatrix::zeros(2, 1),
        DVector::zeros(2),
        DVector::zeros(2),
        DVector::zeros(1),
        0.1,
        1,
    )
    .unwrap();
    let cost = QuadraticCost::diagonal(&[1.0, 2.0], &[3.0], &[4.0, 5.0]).unwrap();
    let vfs = riccati_backward_pass(&ltv, &cost).unwrap();
    let expect = a.transpose() * &cost.q_n * &a + &cost.stages[0].q;
    assert!((&vfs.s[0] - expect).amax() < 1e-14);
    assert_eq!(vfs.k[0].amax(), 0.0);
}

#[test]
fn dense_oracle_four_by_two() {
    let p = random_problem(3, 4, 2, 5, true);
    let (_, j_dense) = dense_optimum(&p.ltv.a, &p.ltv.b, &p.ltv.g, &p.cost, &p.x0);
    let (_, j_policy) = policy_rollout(&p);
    let vfs = riccati_backward_pass(&p.ltv, &p.cost).unwrap();
    assert!((j_policy - j_dense).abs() <= 1e-8 * j_dense.abs().max(1.0));
    assert!((cost_to_go(&vfs, 0, &p.x0) - j_dense).abs() <= 1e-8 * j_dense.abs().max(1.0));
}

#[test]
fn cost_to_go_reductions() {
    let p = random_problem(4, 3, 1, 4, true);
    let vfs = riccati_backward_pass(&p.ltv, &p.cost).unwrap();
    for k in 0..=4 {
        assert_eq!(cost_to_go(&vfs, k, &DVector::zeros(3)), vfs.c[k]);
    }
    let mut unit = vfs.clone();
    unit.s[0] = DMatrix::identity(3, 3);
    unit.s_lin[0] = DVector::zeros(3);
    unit.c[0] = 0.0;
    let dx = dvector![1.0, -2.0, 0.5];
    assert_eq!(cost_to_go(&unit, 0, &dx), 0.5 * dx.norm_squared());
}

/// Plain Riccati difference equation for the case without linear, cross
/// or affine terms.
fn textbook(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    qn: &DMatrix<f64>,
    steps: usize,
) -> Vec<DMatrix<f64>> {
    let mut p = qn.clone();
    let mut out = vec![p.clone()];
    for _ in 0..steps {
        let btpb = r + b.transpose() * &p * b;
        let inv = btpb.try_inverse().unwrap();
        p = a.transpose() * &p * a - a.transpose() * &p * b * inv * b.transpose() * &p * a + q;
        out.push(p.clone());
    }
    out.reverse();
    out
}

#[test]
fn rejects_bad_weights() {
    assert!(matches!(
        QuadraticCost::diagonal(&[1.0], &[0.0], &[1.0]),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        QuadraticCost::diagonal(&[1.0], &[1.0], &[-1.0]),
        Err(Error::Config(_))
    ));
    let mut stage = StageCost::diagonal(&[1.0, 1.0], &[1.0]);
    stage.p = dmatrix![5.0, 0.0];
    let bad = QuadraticCost::new(vec![stage], DMatrix::identity(2, 2), DVector::zeros(2), 0.0);
    assert!(matches!(bad, Err(Error::Config(_))));
}

#[test]
fn steer_holds_equilibrium() {
    let ff = FreeFlyer::astrobee();
    let x = ff
        .layout()
        .at_rest(Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 0.1, 0.2), &[0.2, 0.1]);
    let cost = QuadraticCost::diagonal(&[1.0; 16], &[1.0; 8], &[10.0; 16]).unwrap();
    let res = lqr_steer(&ff, &x, &x, 10, &cost, 0.1).unwrap();
    for (s, u) in res.trajectory.states.iter().zip(&res.trajectory.controls) {
        assert!((s - &x).amax() < 1e-12);
        assert!(u.amax() < 1e-12);
    }
    assert!(res.cost.abs() < 1e-20);
}

#[test]
fn steer_translation_converges_and_cost_matches_sum() {
    let ff = FreeFlyer::astrobee();
    let from = ff.layout().at_rest(Vector3::zeros(), Vector3::zeros(), &[0.0, 0.0]);
    let to = ff
        .layout()
        .at_rest(Vector3::new(0.5, -0.3, 0.2), Vector3::zeros(), &[0.0, 0.0]);
    let mut q = [10.0; 16];
    q[8..].fill(1.0);
    let cost = QuadraticCost::diagonal(&q, &[0.1; 8], &[100.0; 16]).unwrap();
    let res = lqr_steer(&ff, &from, &to, 150, &cost, 0.1).unwrap();
    let offset = (&to - &from).rows(0, 3).norm();
    let err = (res.trajectory.last() - &to).rows(0, 3).norm();
    assert!(err < 0.01 * offset, "{err}");
    let t = &res.trajectory;
    let mut sum = 0.0;
    for k in 0..t.steps() {
        sum += cost.running(k, &(&t.states[k] - &to), &t.controls[k]);
    }
    sum += cost.terminal(&(t.last() - &to));
    assert!((sum - res.cost).abs() <= 1e-12 * sum);
    assert!(t.replay_error(&ff).unwrap() < 1e-12);
}

#[test]
fn track_from_reference_start_stays_on_it() {
    let ff = FreeFlyer::astrobee();
    let mut x0 = ff.layout().at_rest(Vector3::zeros(), Vector3::zeros(), &[0.1, 0.2]);
    x0[8] = 0.05;
    x0[12] = 0.02;
    let controls: Vec<_> = (0..30)
        .map(|k| DVector::from_fn(8, |i, _| 0.1 * ((k + i) as f64 * 0.3).sin()))
        .collect();
    let reference = Trajectory::rollout(&ff, &x0, &controls, 0.1).unwrap();
    let cost = QuadraticCost::diagonal(&[1.0; 16], &[1.0; 8], &[1.0; 16]).unwrap();
    let run = track(&ff, &reference, &cost, &x0).unwrap();
    for (a, b) in run.states.iter().zip(&reference.states) {
        assert!((a - b).amax() < 1e-6);
    }
}

#[test]
fn track_linear_plant_matches_dense_oracle() {
    // On a linear plant the discrete model is the truncated series, so the
    // plant used for the oracle is that same series.
    let a = dmatrix![0.0, 1.0; -1.0, -0.2];
    let b = dmatrix![0.0; 1.0];
    let sys = LinearDynamics::new(a.clone(), b.clone()).unwrap();
    let h = 0.1;
    let reference = Trajectory::rollout(&sys, &dvector![1.0, 0.0], &vec![dvector![0.3]; 12], h).unwrap();
    let cost = QuadraticCost::diagonal(&[2.0, 1.0], &[0.5], &[5.0, 5.0]).unwrap();
    let x0 = dvector![1.2, -0.1];
    let run = track(&sys, &reference, &cost, &x0).unwrap();
    let (ad, bd) = freeflyer::ltv::discretize(&a, &b, h).unwrap();
    let steps = reference.steps();
    let g = vec![DVector::zeros(2); steps];
    let (us, _) = dense_optimum(
        &vec![ad; steps],
        &vec![bd; steps],
        &g,
        &cost,
        &(&x0 - reference.first()),
    );
    for k in 0..steps {
        let du = &run.controls[k] - &reference.controls[k];
        assert!((du - &us[k]).amax() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn value_matrices_symmetric_psd(seed in any::<u64>(), n in 1usize..6, m in 1usize..4, steps in 1usize..9) {
        let p = random_problem(seed, n, m, steps, true);
        let vfs = riccati_backward_pass(&p.ltv, &p.cost).unwrap();
        for s in &vfs.s {
            prop_assert_eq!(s, &s.transpose());
            let min = s.clone().symmetric_eigen().eigenvalues.min();
            prop_assert!(min >= -1e-9 * s.amax().max(1.0));
        }
        prop_assert_eq!(vfs.k.len(), steps);
        prop_assert_eq!(vfs.s.len(), steps + 1);
    }

    #[test]
    fn bellman_consistency(seed in any::<u64>(), n in 1usize..6, m in 1usize..4, steps in 1usize..9) {
        let p = random_problem(seed, n, m, steps, true);
        let vfs = riccati_backward_pass(&p.ltv, &p.cost).unwrap();
        let mut r = rng(seed ^ 0x55);
        for k in 0..steps {
            let dx = random_vector(&mut r, n, 1.0);
            let u = vfs.policy(k, &dx);
            let next = p.ltv.step(k, &dx, &u);
            let lhs = vfs.cost_to_go(k, &dx);
            let rhs = p.cost.running(k, &dx, &u) + vfs.cost_to_go(k + 1, &next);
            prop_assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{} vs {}", lhs, rhs);
        }
    }

    #[test]
    fn policy_is_stationary(seed in any::<u64>(), n in 1usize..5, m in 1usize..3, steps in 1usize..7) {
        let p = random_problem(seed, n, m, steps, true);
        let (us, j) = policy_rollout(&p);
        let eps = 1e-4;
        for k in 0..steps {
            for i in 0..m {
                for sign in [-1.0, 1.0] {
                    let mut perturbed = us.clone();
                    perturbed[k][i] += sign * eps;
                    let jp = sequence_cost(&p.ltv.a, &p.ltv.b, &p.ltv.g, &p.cost, &p.x0, &perturbed);
                    prop_assert!(jp > j - 1e-12 * j.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn cost_to_go_lower_bound(seed in any::<u64>(), n in 1usize..6, m in 1usize..4) {
        let p = random_problem(seed, n, m, 4, true);
        let vfs = riccati_backward_pass(&p.ltv, &p.cost).unwrap();
        let mut r = rng(seed ^ 0xaa);
        for k in 0..=4 {
            let pinv = vfs.s[k].clone().pseudo_inverse(1e-12).unwrap();
            let bound = vfs.c[k] - 0.5 * vfs.s_lin[k].dot(&(&pinv * &vfs.s_lin[k]));
            let dx = random_vector(&mut r, n, 3.0);
            prop_assert!(vfs.cost_to_go(k, &dx) >= bound - 1e-9 * bound.abs().max(1.0));
        }
    }

    #[test]
    fn reduces_to_textbook_riccati(seed in any::<u64>(), n in 1usize..6, m in 1usize..4, steps in 1usize..9) {
        let p = random_problem(seed, n, m, steps, false);
        let mut cost = p.cost.clone();
        cost.stages[0].p = DMatrix::zeros(m, n);
        let vfs = riccati_backward_pass(&p.ltv, &cost).unwrap();
        let reference = textbook(&p.ltv.a[0], &p.ltv.b[0], &cost.stages[0].q, &cost.stages[0].r, &cost.q_n, steps);
        for k in 0..=steps {
            prop_assert!((&vfs.s[k] - &reference[k]).amax() <= 1e-9 * reference[k].amax().max(1.0));
            prop_assert_eq!(vfs.s_lin[k].amax(), 0.0);
            prop_assert_eq!(vfs.c[k], 0.0);
        }
    }
}
