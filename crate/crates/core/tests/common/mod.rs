//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use freeflyer::lqr::{QuadraticCost, StageCost};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.random_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.random_range(-1.0..1.0))
}

/// Matrix exponential by scaling and squaring with a long Taylor series.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.norm();
    let mut squarings = 0;
    while norm / 2f64.powi(squarings) > 0.1 {
        squarings += 1;
    }
    let scaled = a / 2f64.powi(squarings);
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for i in 1..30 {
        term = &term * &scaled / i as f64;
        sum += &term;
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Stage weights whose joint block `[[Q, Pᵀ], [P, R]]` is positive definite,
/// with random linear terms.
pub fn random_stage(rng: &mut ChaCha8Rng, n: usize, m: usize, linear: bool) -> StageCost {
    let l = random_matrix(rng, n + m, n + m, 1.0);
    let w = l.transpose() * &l + DMatrix::identity(n + m, n + m) * 0.2;
    let scale = if linear { 1.0 } else { 0.0 };
    StageCost {
        q: w.view((0, 0), (n, n)).into_owned(),
        r: w.view((n, n), (m, m)).into_owned(),
        p: w.view((n, 0), (m, n)).into_owned(),
        q_lin: random_vector(rng, n, 1.0) * scale,
        r_lin: random_vector(rng, m, 1.0) * scale,
    }
}

pub fn random_cost(rng: &mut ChaCha8Rng, n: usize, m: usize, linear: bool) -> QuadraticCost {
    let stage = random_stage(rng, n, m, linear);
    let l = random_matrix(rng, n, n, 1.0);
    let q_n = l.transpose() * l;
    let q_n_lin = random_vector(rng, n, 1.0) * if linear { 1.0 } else { 0.0 };
    QuadraticCost::new(vec![stage], q_n, q_n_lin, 0.0).unwrap()
}

/// Cost of the control sequence `us` applied to `x_{k+1} = A_k x_k + B_k u_k + g_k`.
pub fn sequence_cost(
    a: &[DMatrix<f64>],
    b: &[DMatrix<f64>],
    g: &[DVector<f64>],
    cost: &QuadraticCost,
    x0: &DVector<f64>,
    us: &[DVector<f64>],
) -> f64 {
    let mut x = x0.clone();
    let mut total = cost.c;
    for k in 0..us.len() {
        total += cost.running(k, &x, &us[k]);
        x = &a[k] * &x + &b[k] * &us[k] + &g[k];
    }
    total + cost.terminal(&x)
}

/// Minimizes the cost over the stacked control vector by writing every state
/// as an affine function of it and solving the resulting normal equations.
pub fn dense_optimum(
    a: &[DMatrix<f64>],
    b: &[DMatrix<f64>],
    g: &[DVector<f64>],
    cost: &QuadraticCost,
    x0: &DVector<f64>,
) -> (Vec<DVector<f64>>, f64) {
    let n = x0.len();
    let m = b[0].ncols();
    let steps = a.len();
    let dim = steps * m;
    // x_k = c_k + T_k U
    let mut c = x0.clone();
    let mut t = DMatrix::zeros(n, dim);
    let mut hess = DMatrix::zeros(dim, dim);
    let mut grad = DVector::zeros(dim);
    for k in 0..steps {
        let s = cost.stage(k);
        let mut e = DMatrix::zeros(m, dim);
        e.view_mut((0, k * m), (m, m)).fill_with_identity();
        hess += t.transpose() * &s.q * &t
            + e.transpose() * &s.r * &e
            + e.transpose() * &s.p * &t
            + t.transpose() * s.p.transpose() * &e;
        grad += t.transpose() * (&s.q * &c + &s.q_lin) + e.transpose() * (&s.r_lin + &s.p * &c);
        let t_next = &a[k] * &t + &b[k] * &e;
        c = &a[k] * &c + &g[k];
        t = t_next;
    }
    hess += t.transpose() * &cost.q_n * &t;
    grad += t.transpose() * (&cost.q_n * &c + &cost.q_n_lin);
    let sol = hess
        .cholesky()
        .expect("dense Hessian positive definite")
        .solve(&(-grad));
    let us: Vec<_> = (0..steps).map(|k| sol.rows(k * m, m).into_owned()).collect();
    let j = sequence_cost(a, b, g, cost, x0, &us);
    (us, j)
}
