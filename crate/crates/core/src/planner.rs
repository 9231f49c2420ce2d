//! LQR-RRT*: RRT* with the LQR cost-to-go as pseudo-metric and LQR
//! steering as the local planner.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::collision::ObstacleField;
use crate::dynamics::{rk4_step, Dynamics};
use crate::error::{check_dim, Error, Result};
use crate::lqr::{riccati_step, DiagonalWeights, QuadraticCost};
use crate::ltv::{discretize, linearize};
use crate::trajectory::Trajectory;

/// Steering horizons are clamped to this range.
pub const MIN_STEER_STEPS: usize = 10;
pub const MAX_STEER_STEPS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlannerMode {
    /// Return as soon as a node enters the goal ball.
    #[default]
    FirstSolution,
    /// Spend the whole iteration budget and return the cheapest solution.
    FullBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub gamma: f64,
    pub max_iterations: usize,
    pub goal_tolerance: f64,
    /// `[lo, hi]` per state coordinate.
    pub bounds: Vec<[f64; 2]>,
    #[serde(default)]
    pub seed: u64,
    pub weights: DiagonalWeights,
    pub v_max: f64,
    #[serde(default = "default_h")]
    pub h: f64,
    /// Steps-to-go of the value function used as the metric.
    #[serde(default = "default_context_horizon")]
    pub context_horizon: usize,
    #[serde(default = "default_goal_bias")]
    pub goal_bias: f64,
    #[serde(default = "default_h_check")]
    pub h_check: f64,
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub mode: PlannerMode,
}

fn default_h() -> f64 {
    0.5
}

fn default_context_horizon() -> usize {
    MIN_STEER_STEPS
}

fn default_goal_bias() -> f64 {
    0.05
}

fn default_h_check() -> f64 {
    0.05
}

impl PlannerConfig {
    pub fn validate(&self, n_x: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("planner: {m}")));
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.goal_tolerance > 0.0) {
            return bad("goal tolerance must be positive".into());
        }
        if !(self.v_max > 0.0 && self.h > 0.0 && self.h_check > 0.0) {
            return bad("v_max, h and h_check must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.goal_bias) {
            return bad("goal bias must lie in [0, 1]".into());
        }
        if self.context_horizon == 0 {
            return bad("context horizon must be at least 1".into());
        }
        if self.bounds.len() != n_x {
            return bad(format!("expected {n_x} sample bounds, got {}", self.bounds.len()));
        }
        for (i, [lo, hi]) in self.bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("bound {i} is empty or not finite"));
            }
        }
        let cost = self.weights.cost()?;
        check_dim("planner weights", n_x, cost.state_dim())?;
        Ok(())
    }

    /// Steps for a steering extension covering the position change.
    pub fn steer_steps(&self, from: &DVector<f64>, to: &DVector<f64>) -> usize {
        let d = (to.rows(0, 3) - from.rows(0, 3)).norm();
        let steps = (d / (self.v_max * self.h)).ceil();
        (steps as usize).clamp(MIN_STEER_STEPS, MAX_STEER_STEPS)
    }
}

/// Uniform sample inside the bounds; degenerate bounds return the bound.
pub fn sample(config: &PlannerConfig, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_iterator(
        config.bounds.len(),
        config
            .bounds
            .iter()
            .map(|&[lo, hi]| if lo == hi { lo } else { rng.random_range(lo..hi) }),
    )
}

/// Cost-to-go `½δᵀSδ + δᵀs + c`, `δ = x − target`, of the LQR problem about
/// `target` with a fixed number of steps to go.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrMetric {
    pub target: DVector<f64>,
    pub s: DMatrix<f64>,
    pub s_lin: DVector<f64>,
    pub c: f64,
}

impl LqrMetric {
    pub fn about<D: Dynamics + ?Sized>(
        sys: &D,
        target: &DVector<f64>,
        cost: &QuadraticCost,
        h: f64,
        horizon: usize,
    ) -> Result<Self> {
        Ok(SteerContext::new(sys, target, cost, h, horizon)?.metric)
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        let n = x.len();
        let mut buf = [0.0; 64];
        let mut heap = Vec::new();
        let d: &mut [f64] = if n <= buf.len() {
            &mut buf[..n]
        } else {
            heap.resize(n, 0.0);
            &mut heap
        };
        for (di, (a, b)) in d.iter_mut().zip(x.iter().zip(self.target.iter())) {
            *di = a - b;
        }
        // S is symmetric: diagonal plus twice the strict upper triangle.
        let mut quad = 0.0;
        for (j, col) in self.s.as_slice().chunks_exact(n).enumerate() {
            let off: f64 = col[..j].iter().zip(&d[..j]).map(|(s, di)| s * di).sum();
            quad += d[j] * (col[j] * d[j] + 2.0 * off);
        }
        let lin: f64 = d.iter().zip(self.s_lin.iter()).map(|(a, b)| a * b).sum();
        0.5 * quad + lin + self.c
    }
}

enum ChordSolver {
    Square(nalgebra::linalg::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
    LeastSquares(nalgebra::linalg::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl ChordSolver {
    fn solve(&self, r: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            Self::Square(lu) => lu.solve(r),
            Self::LeastSquares(svd) => svd.solve(r, 1e-12).ok(),
        }
    }
}

/// LTI model about a target with its policy indexed by steps to go.
#[derive(Debug, Clone)]
struct SteerContext {
    target: DVector<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    g: DVector<f64>,
    gains: Vec<DMatrix<f64>>,
    offsets: Vec<DVector<f64>>,
    /// Set once the policy stops changing with the horizon.
    stationary: bool,
    s: DMatrix<f64>,
    s_lin: DVector<f64>,
    c: f64,
    metric: LqrMetric,
}

impl SteerContext {
    fn new<D: Dynamics + ?Sized>(
        sys: &D,
        target: &DVector<f64>,
        cost: &QuadraticCost,
        h: f64,
        horizon: usize,
    ) -> Result<Self> {
        let u_bar = DVector::zeros(sys.control_dim());
        let lin = linearize(sys, target, &u_bar)?;
        let (a, b) = discretize(&lin.a, &lin.b, h)?;
        let g = rk4_step(sys, target, &u_bar, h)? - target;
        let mut ctx = Self {
            target: target.clone(),
            a,
            b,
            g,
            gains: Vec::new(),
            offsets: Vec::new(),
            stationary: false,
            s: cost.q_n.clone(),
            s_lin: cost.q_n_lin.clone(),
            c: cost.c,
            metric: LqrMetric {
                target: target.clone(),
                s: cost.q_n.clone(),
                s_lin: cost.q_n_lin.clone(),
                c: cost.c,
            },
        };
        ctx.extend(horizon, cost)?;
        ctx.metric = LqrMetric {
            target: target.clone(),
            s: ctx.s.clone(),
            s_lin: ctx.s_lin.clone(),
            c: ctx.c,
        };
        Ok(ctx)
    }

    fn extend(&mut self, steps: usize, cost: &QuadraticCost) -> Result<()> {
        while !self.stationary && self.gains.len() < steps {
            let st = riccati_step(&self.a, &self.b, &self.g, cost.stage(0), &self.s, &self.s_lin, self.c)?;
            self.s = st.s;
            self.s_lin = st.s_lin;
            self.c = st.c;
            if let (Some(k), Some(l)) = (self.gains.last(), self.offsets.last()) {
                let tol = 1e-13;
                self.stationary =
                    (&st.k - k).amax() <= tol * (1.0 + k.amax()) && (&st.l - l).amax() <= tol * (1.0 + l.amax());
            }
            if !self.stationary {
                self.gains.push(st.k);
                self.offsets.push(st.l);
            }
        }
        Ok(())
    }

    /// Policy with `togo ≥ 1` steps remaining.
    fn control(&self, togo: usize, x: &DVector<f64>) -> DVector<f64> {
        let i = togo.min(self.gains.len()) - 1;
        &self.gains[i] * (x - &self.target) + &self.offsets[i]
    }

    /// `steps` steps of the affine policy on the nonlinear dynamics.
    fn rollout<D: Dynamics + ?Sized>(&self, sys: &D, from: &DVector<f64>, steps: usize, h: f64) -> Result<Trajectory> {
        let mut states = Vec::with_capacity(steps + 1);
        let mut controls = Vec::with_capacity(steps + 1);
        let mut x = from.clone();
        for i in 0..steps {
            let u = self.control(steps - i, &x);
            states.push(x.clone());
            x = rk4_step(sys, &x, &u, h)?;
            controls.push(u);
        }
        states.push(x);
        controls.push(DVector::zeros(sys.control_dim()));
        Trajectory::new(h, states, controls)
    }

    /// LQR for all but the last two steps, then a Newton solve on the two
    /// remaining controls so that the rollout ends on the target. `None`
    /// when the correction does not converge.
    fn rollout_exact<D: Dynamics + ?Sized>(
        &self,
        sys: &D,
        from: &DVector<f64>,
        steps: usize,
        h: f64,
    ) -> Result<Option<Trajectory>> {
        let mut traj = self.rollout(sys, from, steps, h)?;
        let m = sys.control_dim();
        let n = sys.state_dim();
        let x0 = traj.states[steps - 2].clone();
        let mut u0 = traj.controls[steps - 2].clone();
        let mut u1 = traj.controls[steps - 1].clone();
        let mut converged = false;
        let mut solver: Option<ChordSolver> = None;
        let mut last = f64::INFINITY;
        for _ in 0..30 {
            let x1 = rk4_step(sys, &x0, &u0, h)?;
            let x2 = rk4_step(sys, &x1, &u1, h)?;
            let r = &x2 - &self.target;
            let size = r.amax();
            if size <= 1e-11 * (1.0 + self.target.amax()) {
                converged = true;
                break;
            }
            if solver.is_none() || size > 0.5 * last {
                // The model about the target first, exact Jacobians after a stall.
                let (a1, b0, b1) = if solver.is_none() {
                    (self.a.clone(), self.b.clone(), self.b.clone())
                } else {
                    let (_, b0) = sys.step_jacobians(&x0, &u0, h)?;
                    let (a1, b1) = sys.step_jacobians(&x1, &u1, h)?;
                    (a1, b0, b1)
                };
                let mut jac = DMatrix::zeros(n, 2 * m);
                jac.view_mut((0, 0), (n, m)).copy_from(&(a1 * b0));
                jac.view_mut((0, m), (n, m)).copy_from(&b1);
                solver = Some(if 2 * m == n {
                    ChordSolver::Square(jac.lu())
                } else {
                    ChordSolver::LeastSquares(jac.svd(true, true))
                });
            }
            last = size;
            let step = match solver.as_ref().and_then(|s| s.solve(&r)) {
                Some(s) => s,
                None => return Ok(None),
            };
            u0 -= step.rows(0, m);
            u1 -= step.rows(m, m);
            if !(u0.iter().chain(u1.iter()).all(|v| v.is_finite())) {
                return Ok(None);
            }
        }
        if !converged {
            return Ok(None);
        }
        let x1 = rk4_step(sys, &x0, &u0, h)?;
        traj.states[steps - 1] = x1;
        traj.controls[steps - 2] = u0;
        traj.controls[steps - 1] = u1;
        traj.states[steps] = self.target.clone();
        Ok(Some(traj))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeNode {
    pub state: DVector<f64>,
    pub parent: Option<usize>,
    pub arrival_cost: f64,
    /// Trajectory from the parent's state to this state.
    pub edge: Option<Trajectory>,
    pub edge_cost: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PlannerTree {
    pub nodes: Vec<TreeNode>,
}

impl PlannerTree {
    pub fn with_root(state: DVector<f64>) -> Self {
        Self {
            nodes: vec![TreeNode {
                state,
                parent: None,
                arrival_cost: 0.0,
                edge: None,
                edge_cost: 0.0,
            }],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node indices from the root to `i`.
    pub fn path_to(&self, i: usize) -> Vec<usize> {
        let mut path = vec![i];
        let mut cur = i;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn trajectory_to(&self, i: usize, h: f64, n_u: usize) -> Result<Trajectory> {
        let path = self.path_to(i);
        let mut traj = Trajectory::single(h, self.nodes[path[0]].state.clone(), n_u);
        for &j in &path[1..] {
            traj.append(self.nodes[j].edge.as_ref().expect("non-root node has an edge"))?;
        }
        Ok(traj)
    }

    fn is_ancestor(&self, anc: usize, mut i: usize) -> bool {
        loop {
            if i == anc {
                return true;
            }
            match self.nodes[i].parent {
                Some(p) => i = p,
                None => return false,
            }
        }
    }

    /// Tree shape, cost ordering and edge endpoint checks.
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Internal(format!("planner tree: {m}")));
        if self.nodes.is_empty() || self.nodes[0].parent.is_some() {
            return fail("root missing".into());
        }
        for (i, node) in self.nodes.iter().enumerate().skip(1) {
            let Some(p) = node.parent else {
                return fail(format!("node {i} has no parent"));
            };
            if p >= self.nodes.len() || self.is_ancestor(i, p) {
                return fail(format!("node {i} has an invalid parent {p}"));
            }
            let parent = &self.nodes[p];
            if node.arrival_cost < parent.arrival_cost {
                return fail(format!("node {i} is cheaper than its parent"));
            }
            if (node.arrival_cost - parent.arrival_cost - node.edge_cost).abs() > 1e-9 * node.arrival_cost.max(1.0) {
                return fail(format!("node {i} cost does not add up"));
            }
            let Some(edge) = &node.edge else {
                return fail(format!("node {i} has no edge"));
            };
            if (edge.first() - &parent.state).amax() > 1e-9 || (edge.last() - &node.state).amax() > 1e-9 {
                return fail(format!("edge into node {i} does not meet its endpoints"));
            }
        }
        Ok(())
    }
}

/// Lowest metric value over the tree, ties to the lowest index.
pub fn nearest(tree: &PlannerTree, metric: &LqrMetric) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, n) in tree.nodes.iter().enumerate() {
        let v = metric.eval(&n.state);
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// `γ (ln n / n)^{1/n_x}`.
pub fn near_radius(gamma: f64, n: usize, n_x: usize) -> f64 {
    if n < 2 {
        return 0.0;
    }
    let n = n as f64;
    gamma * ((n.ln() / n).powf(1.0 / n_x as f64))
}

/// Nodes within the near-ball radius, in index order.
pub fn near_nodes(tree: &PlannerTree, metric: &LqrMetric, gamma: f64) -> Vec<usize> {
    let radius = near_radius(gamma, tree.len(), metric.target.len());
    tree.nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| metric.eval(&n.state) <= radius)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    pub cost: f64,
    pub goal_node: usize,
    pub iterations: usize,
    pub tree: PlannerTree,
    /// Cheapest solution cost after each iteration (infinite before the first).
    pub best_cost_history: Vec<f64>,
}

struct Planner<'a, D: Dynamics + ?Sized> {
    sys: &'a D,
    config: &'a PlannerConfig,
    cost: QuadraticCost,
    obstacles: &'a ObstacleField,
    tree: PlannerTree,
    children: Vec<Vec<usize>>,
    /// Steering context about each node, extended on demand.
    contexts: Vec<SteerContext>,
    /// Contexts about equilibria, keyed by the coordinates after position.
    translated: HashMap<Vec<u64>, SteerContext>,
}

impl<D: Dynamics + ?Sized> Planner<'_, D> {
    fn context(&self, target: &DVector<f64>) -> Result<SteerContext> {
        SteerContext::new(self.sys, target, &self.cost, self.config.h, self.config.context_horizon)
    }

    /// Key under which the context about `x` can be shared by translation.
    fn translation_key(&self, x: &DVector<f64>) -> Result<Option<Vec<u64>>> {
        if !self.sys.translation_invariant() {
            return Ok(None);
        }
        let u = DVector::zeros(self.sys.control_dim());
        let drift = rk4_step(self.sys, x, &u, self.config.h)? - x;
        Ok(drift
            .iter()
            .all(|v| *v == 0.0)
            .then(|| x.iter().skip(3).map(|v| v.to_bits()).collect()))
    }

    /// Context about a sample, reusing a translated copy when one exists.
    fn take_context(&mut self, x: &DVector<f64>) -> Result<(SteerContext, Option<Vec<u64>>)> {
        let key = self.translation_key(x)?;
        let ctx = match key.as_ref().and_then(|k| self.translated.remove(k)) {
            Some(mut ctx) => {
                ctx.target.copy_from(x);
                ctx.metric.target.copy_from(x);
                ctx
            }
            None => self.context(x)?,
        };
        Ok((ctx, key))
    }

    fn clear(&self, traj: &Trajectory) -> bool {
        self.obstacles.path_clear(&traj.positions())
    }

    /// Quadratic cost of an edge measured against its own end state.
    fn edge_cost(&self, traj: &Trajectory) -> f64 {
        let end = traj.last();
        (0..traj.steps())
            .map(|k| self.cost.running(k, &(&traj.states[k] - end), &traj.controls[k]))
            .sum()
    }

    fn add_node(&mut self, ctx: SteerContext, parent: usize, edge: Trajectory, edge_cost: f64) -> usize {
        let state = ctx.target.clone();
        let i = self.tree.len();
        self.tree.nodes.push(TreeNode {
            state,
            parent: Some(parent),
            arrival_cost: self.tree.nodes[parent].arrival_cost + edge_cost,
            edge: Some(edge),
            edge_cost,
        });
        self.children.push(Vec::new());
        self.children[parent].push(i);
        self.contexts.push(ctx);
        i
    }

    fn reparent(&mut self, j: usize, parent: usize, edge: Trajectory, edge_cost: f64) {
        let old = self.tree.nodes[j].parent.expect("rewired node is not the root");
        self.children[old].retain(|&c| c != j);
        self.children[parent].push(j);
        let delta = self.tree.nodes[parent].arrival_cost + edge_cost - self.tree.nodes[j].arrival_cost;
        let node = &mut self.tree.nodes[j];
        node.parent = Some(parent);
        node.edge = Some(edge);
        node.edge_cost = edge_cost;
        let mut stack = vec![j];
        while let Some(k) = stack.pop() {
            self.tree.nodes[k].arrival_cost += delta;
            stack.extend(self.children[k].iter().copied());
        }
    }
}

fn recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::EulerSingularity { .. } | Error::NumericalOverflow(_) | Error::SolveFailure(_)
    )
}

/// Runs LQR-RRT* from `start` toward the metric ball around `goal`.
pub fn plan<D: Dynamics + ?Sized>(
    sys: &D,
    start: &DVector<f64>,
    goal: &DVector<f64>,
    obstacles: &ObstacleField,
    config: &PlannerConfig,
) -> Result<PlanResult> {
    let n_x = sys.state_dim();
    check_dim("start state", n_x, start.len())?;
    check_dim("goal state", n_x, goal.len())?;
    config.validate(n_x)?;
    if !obstacles.is_empty() {
        obstacles.check_resolution(config.h_check, config.strict)?;
    }
    let cost = config.weights.cost()?;
    let pos = |x: &DVector<f64>| Vector3::new(x[0], x[1], x[2]);
    if !obstacles.point_clear(&pos(start), 0) {
        return Err(Error::StartInCollision);
    }
    let mut planner = Planner {
        sys,
        config,
        cost,
        obstacles,
        tree: PlannerTree::with_root(start.clone()),
        children: vec![Vec::new()],
        contexts: Vec::new(),
        translated: HashMap::new(),
    };
    let root = planner.context(start)?;
    planner.contexts.push(root);
    let goal_metric = planner.context(goal)?.metric;
    let n_u = sys.control_dim();

    let finish =
        |planner: Planner<'_, D>, goal_node: usize, iterations: usize, history: Vec<f64>| -> Result<PlanResult> {
            let trajectory = planner.tree.trajectory_to(goal_node, config.h, n_u)?;
            Ok(PlanResult {
                trajectory,
                cost: planner.tree.nodes[goal_node].arrival_cost,
                goal_node,
                iterations,
                tree: planner.tree,
                best_cost_history: history,
            })
        };

    if goal_metric.eval(start) <= config.goal_tolerance {
        return finish(planner, 0, 0, Vec::new());
    }
    if !obstacles.point_clear(&pos(goal), 0) {
        return Err(Error::NoPath {
            iterations: 0,
            nodes: 1,
            tree: Box::new(planner.tree),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut solutions: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(config.max_iterations);
    let best_solution = |tree: &PlannerTree, sols: &[usize]| {
        sols.iter().copied().min_by(|&a, &b| {
            tree.nodes[a]
                .arrival_cost
                .total_cmp(&tree.nodes[b].arrival_cost)
                .then(a.cmp(&b))
        })
    };

    for it in 0..config.max_iterations {
        let use_goal = rng.random::<f64>() < config.goal_bias;
        let x_rand = if use_goal {
            goal.clone()
        } else {
            sample(config, &mut rng)
        };
        match extend(&mut planner, &x_rand) {
            Ok(Some(i)) => {
                if goal_metric.eval(&planner.tree.nodes[i].state) <= config.goal_tolerance {
                    solutions.push(i);
                    if config.mode == PlannerMode::FirstSolution {
                        history.push(planner.tree.nodes[i].arrival_cost);
                        return finish(planner, i, it + 1, history);
                    }
                }
            }
            Ok(None) => {}
            Err(e) if recoverable(&e) => {}
            Err(e) => return Err(e),
        }
        history.push(
            best_solution(&planner.tree, &solutions)
                .map(|i| planner.tree.nodes[i].arrival_cost)
                .unwrap_or(f64::INFINITY),
        );
    }
    match best_solution(&planner.tree, &solutions) {
        Some(i) => finish(planner, i, config.max_iterations, history),
        None => Err(Error::NoPath {
            iterations: config.max_iterations,
            nodes: planner.tree.len(),
            tree: Box::new(planner.tree),
        }),
    }
}

/// One RRT* iteration toward `x_rand`: extend, choose parent, rewire.
fn extend<D: Dynamics + ?Sized>(p: &mut Planner<'_, D>, x_rand: &DVector<f64>) -> Result<Option<usize>> {
    let config = p.config;
    let h = config.h;
    let (mut ctx_rand, key) = p.take_context(x_rand)?;
    let near_idx = nearest(&p.tree, &ctx_rand.metric);
    let x_near = p.tree.nodes[near_idx].state.clone();
    let steps = config.steer_steps(&x_near, x_rand);
    let edge = ctx_rand
        .extend(steps, &p.cost)
        .and_then(|_| ctx_rand.rollout(p.sys, &x_near, steps, h));
    if let Some(key) = key {
        p.translated.insert(key, ctx_rand);
    }
    let edge = edge?;
    if !p.clear(&edge) {
        return Ok(None);
    }
    let x_new = edge.last().clone();
    let mut ctx_new = p.context(&x_new)?;
    let mut near = near_nodes(&p.tree, &ctx_new.metric, config.gamma);
    if near.is_empty() {
        near.push(near_idx);
    }

    // choose parent
    let mut best_parent = near_idx;
    let mut best_edge_cost = p.edge_cost(&edge);
    let mut best_edge = edge;
    let mut best_total = p.tree.nodes[near_idx].arrival_cost + best_edge_cost;
    for &j in &near {
        if j == near_idx {
            continue;
        }
        let xj = p.tree.nodes[j].state.clone();
        if p.tree.nodes[j].arrival_cost + ctx_new.metric.eval(&xj) >= best_total {
            continue;
        }
        let steps = config.steer_steps(&xj, &x_new);
        ctx_new.extend(steps, &p.cost)?;
        let cand = match ctx_new.rollout_exact(p.sys, &xj, steps, h) {
            Ok(Some(t)) => t,
            Ok(None) => continue,
            Err(e) if recoverable(&e) => continue,
            Err(e) => return Err(e),
        };
        if !p.clear(&cand) {
            continue;
        }
        let c = p.edge_cost(&cand);
        let total = p.tree.nodes[j].arrival_cost + c;
        if total < best_total {
            best_parent = j;
            best_edge_cost = c;
            best_edge = cand;
            best_total = total;
        }
    }
    let new = p.add_node(ctx_new, best_parent, best_edge, best_edge_cost);

    // rewire
    for &j in &near {
        if j == best_parent || p.tree.is_ancestor(j, new) {
            continue;
        }
        let cost_j = p.tree.nodes[j].arrival_cost;
        let base = p.tree.nodes[new].arrival_cost;
        if base + p.contexts[j].metric.eval(&x_new) >= cost_j {
            continue;
        }
        let steps = config.steer_steps(&x_new, &p.tree.nodes[j].state);
        match p.contexts[j].extend(steps, &p.cost) {
            Ok(()) => {}
            Err(e) if recoverable(&e) => continue,
            Err(e) => return Err(e),
        }
        let cand = match p.contexts[j].rollout_exact(p.sys, &x_new, steps, h) {
            Ok(Some(t)) => t,
            Ok(None) => continue,
            Err(e) if recoverable(&e) => continue,
            Err(e) => return Err(e),
        };
        if !p.clear(&cand) {
            continue;
        }
        let c = p.edge_cost(&cand);
        if base + c < cost_j {
            p.reparent(j, new, cand, c);
        }
    }
    Ok(Some(new))
}
