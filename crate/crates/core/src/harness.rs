//! Assembly scenarios: configuration, the deterministic phase loop, reports
//! and file export.

use std::f64::consts::FRAC_PI_4;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::collision::{ellipsoids_overlap, EllipsoidObstacle, ObstacleField};
use crate::dynamics::{Dynamics, FreeFlyer, RobotDescription};
use crate::error::{Error, Result};
use crate::lqr::{track, DiagonalWeights};
use crate::nmpc::{run_receding_horizon, MpcConfig, StepDiagnostics};
use crate::planner::{plan, PlannerConfig, PlannerMode};
use crate::smoother::{retime, shortcut, GeometricPath, RetimeConfig, SmootherConfig};
use crate::trajectory::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub position: [f64; 3],
    #[serde(default)]
    pub attitude: [f64; 3],
    /// Missing trailing joints are zero.
    #[serde(default)]
    pub joints: Vec<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self {
            position: [0.0; 3],
            attitude: [0.0; 3],
            joints: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EllipsoidSpec {
    pub name: String,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    #[serde(default = "one")]
    pub safety: f64,
}

impl EllipsoidSpec {
    pub fn obstacle(&self) -> Result<EllipsoidObstacle> {
        EllipsoidObstacle::axis_aligned(
            self.name.clone(),
            self.center.into(),
            self.semi_axes.into(),
            self.safety,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrinterSpec {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    #[serde(default = "one")]
    pub safety: f64,
    /// Base position for picking up parts, relative to the printer centre.
    pub pickup_offset: [f64; 3],
}

impl PrinterSpec {
    pub fn obstacle(&self) -> Result<EllipsoidObstacle> {
        EllipsoidObstacle::axis_aligned("printer", self.center.into(), self.semi_axes.into(), self.safety)
    }

    pub fn pickup(&self) -> Vector3<f64> {
        Vector3::from(self.center) + Vector3::from(self.pickup_offset)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartSpec {
    pub name: String,
    pub semi_axes: [f64; 3],
    /// Placed centre.
    pub goal: [f64; 3],
    #[serde(default = "one")]
    pub safety: f64,
}

impl PartSpec {
    pub fn obstacle(&self) -> Result<EllipsoidObstacle> {
        EllipsoidObstacle::axis_aligned(self.name.clone(), self.goal.into(), self.semi_axes.into(), self.safety)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workspace {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            lo: [-2.0; 3],
            hi: [2.0; 3],
        }
    }
}

impl Workspace {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| self.lo[i] <= p[i] && p[i] <= self.hi[i])
    }
}

/// Planner settings shared by every motion phase; bounds and seeds are
/// derived per phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerSettings {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_plan_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_goal_tolerance")]
    pub goal_tolerance: f64,
    #[serde(default = "default_plan_speed")]
    pub v_max: f64,
    #[serde(default = "default_plan_h")]
    pub h: f64,
    #[serde(default = "default_context_horizon")]
    pub context_horizon: usize,
    #[serde(default = "default_goal_bias")]
    pub goal_bias: f64,
    #[serde(default = "default_h_check")]
    pub h_check: f64,
    #[serde(default)]
    pub mode: PlannerMode,
    /// Empty means the planner defaults for the robot.
    #[serde(default)]
    pub weights: DiagonalWeights,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            max_iterations: default_plan_iterations(),
            goal_tolerance: default_goal_tolerance(),
            v_max: default_plan_speed(),
            h: default_plan_h(),
            context_horizon: default_context_horizon(),
            goal_bias: default_goal_bias(),
            h_check: default_h_check(),
            mode: PlannerMode::default(),
            weights: DiagonalWeights::default(),
        }
    }
}

impl PlannerSettings {
    pub fn config(&self, bounds: Vec<[f64; 2]>, seed: u64, strict: bool) -> PlannerConfig {
        PlannerConfig {
            gamma: self.gamma,
            max_iterations: self.max_iterations,
            goal_tolerance: self.goal_tolerance,
            bounds,
            seed,
            weights: self.weights.clone(),
            v_max: self.v_max,
            h: self.h,
            context_horizon: self.context_horizon,
            goal_bias: self.goal_bias,
            h_check: self.h_check,
            strict,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSettings {
    #[serde(default = "default_grasp_angle")]
    pub grasp_angle: f64,
    #[serde(default)]
    pub retract_angle: f64,
    /// Index of the commanded arm joint.
    #[serde(default)]
    pub arm_joint: usize,
    /// Length of the grasp and retract holds, s.
    #[serde(default = "default_hold_duration")]
    pub hold_duration: f64,
    #[serde(default = "default_place_duration")]
    pub place_duration: f64,
    /// Base position tolerance for attach and detach, m.
    #[serde(default = "default_arrival_tolerance")]
    pub arrival_tolerance: f64,
    /// Arm joint tolerance, rad.
    #[serde(default = "default_joint_tolerance")]
    pub joint_tolerance: f64,
}

impl Default for PhaseSettings {
    fn default() -> Self {
        Self {
            grasp_angle: default_grasp_angle(),
            retract_angle: 0.0,
            arm_joint: 0,
            hold_duration: default_hold_duration(),
            place_duration: default_place_duration(),
            arrival_tolerance: default_arrival_tolerance(),
            joint_tolerance: default_joint_tolerance(),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_name() -> String {
    "scenario".into()
}

fn default_standoff() -> [f64; 3] {
    [0.0, 0.0, 0.45]
}

fn default_gamma() -> f64 {
    5.0
}

fn default_plan_iterations() -> usize {
    3000
}

fn default_goal_tolerance() -> f64 {
    0.05
}

fn default_plan_speed() -> f64 {
    0.2
}

fn default_plan_h() -> f64 {
    0.5
}

fn default_context_horizon() -> usize {
    10
}

fn default_goal_bias() -> f64 {
    0.05
}

fn default_h_check() -> f64 {
    0.05
}

fn default_grasp_angle() -> f64 {
    FRAC_PI_4
}

fn default_hold_duration() -> f64 {
    8.0
}

fn default_place_duration() -> f64 {
    1.0
}

fn default_arrival_tolerance() -> f64 {
    0.02
}

fn default_joint_tolerance() -> f64 {
    1e-2
}

/// Tracking weights used by retiming and by the MPC unless overridden.
pub fn default_tracking_weights(n_x: usize, n_u: usize) -> DiagonalWeights {
    DiagonalWeights::split(n_x, n_u, 1000.0, 10.0, 1.0, 1000.0)
}

/// Steering weights used by the planner unless overridden.
pub fn default_planner_weights(n_x: usize, n_u: usize) -> DiagonalWeights {
    DiagonalWeights::split(n_x, n_u, 1.0, 1.0, 1.0, 1000.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub seed: u64,
    /// Robot description file, relative to the scenario file. The built-in
    /// robot is used when both this and `robot` are absent.
    #[serde(default)]
    pub robot_path: Option<PathBuf>,
    #[serde(default)]
    pub robot: Option<RobotDescription>,
    #[serde(default)]
    pub start: Pose,
    /// Target of a stand-alone planning query.
    #[serde(default)]
    pub goal: Option<Pose>,
    #[serde(default)]
    pub printer: Option<PrinterSpec>,
    /// Placement order.
    #[serde(default)]
    pub parts: Vec<PartSpec>,
    /// Static clutter.
    #[serde(default)]
    pub obstacles: Vec<EllipsoidSpec>,
    #[serde(default)]
    pub workspace: Workspace,
    /// Base position for placing a part, relative to its goal centre.
    #[serde(default = "default_standoff")]
    pub standoff: [f64; 3],
    #[serde(default)]
    pub planner: PlannerSettings,
    #[serde(default)]
    pub smoother: SmootherConfig,
    #[serde(default)]
    pub retime: RetimeConfig,
    /// Empty means [`default_tracking_weights`].
    #[serde(default)]
    pub tracking: DiagonalWeights,
    #[serde(default = "default_mpc")]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub phases: PhaseSettings,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_mpc() -> MpcConfig {
    MpcConfig::with_weights(DiagonalWeights::default())
}

/// Reads, resolves and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    ScenarioConfig::from_toml_str(&text, &path.display().to_string(), base)
}

impl ScenarioConfig {
    /// Parses `text`; relative paths resolve against `base`.
    pub fn from_toml_str(text: &str, origin: &str, base: &Path) -> Result<Self> {
        let mut config: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        config.resolve(base)?;
        config.validate()?;
        Ok(config)
    }

    /// Fills every default that depends on the robot.
    pub fn resolve(&mut self, base: &Path) -> Result<()> {
        if self.robot.is_none() {
            self.robot = Some(match &self.robot_path {
                Some(p) => RobotDescription::load(&base.join(p))?,
                None => RobotDescription::astrobee(),
            });
        }
        let sys = self.system()?;
        let (n_x, n_u) = (sys.state_dim(), sys.control_dim());
        if self.tracking.is_empty() {
            self.tracking = default_tracking_weights(n_x, n_u);
        }
        if self.mpc.weights.is_empty() {
            self.mpc.weights = self.tracking.clone();
        }
        if self.planner.weights.is_empty() {
            self.planner.weights = default_planner_weights(n_x, n_u);
        }
        let n_m = sys.joint_count();
        for pose in std::iter::once(&mut self.start).chain(self.goal.iter_mut()) {
            if pose.joints.len() < n_m {
                pose.joints.resize(n_m, 0.0);
            }
        }
        Ok(())
    }

    pub fn description(&self) -> &RobotDescription {
        self.robot.as_ref().expect("scenario is resolved")
    }

    pub fn system(&self) -> Result<FreeFlyer> {
        FreeFlyer::new(
            self.robot
                .as_ref()
                .ok_or_else(|| Error::Validation("robot is unresolved".into()))?,
        )
    }

    fn fixed_obstacles(&self) -> Result<Vec<EllipsoidObstacle>> {
        let mut out = Vec::new();
        if let Some(p) = &self.printer {
            out.push(p.obstacle()?);
        }
        for o in &self.obstacles {
            out.push(o.obstacle()?);
        }
        Ok(out)
    }

    /// Obstacles present before any part is placed.
    pub fn initial_field(&self) -> Result<ObstacleField> {
        ObstacleField::new(self.fixed_obstacles()?)
    }

    /// Base position while placing part `i`.
    pub fn station(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.parts[i].goal) + Vector3::from(self.standoff)
    }

    /// State targeted at the end of `phase` for part `i`.
    pub fn phase_target(&self, i: usize, phase: AssemblyPhase) -> Result<DVector<f64>> {
        let sys = self.system()?;
        let position = match phase {
            AssemblyPhase::MoveToPrinter | AssemblyPhase::Grasp => self
                .printer
                .as_ref()
                .ok_or_else(|| Error::Validation("parts need a printer".into()))?
                .pickup(),
            _ => self.station(i),
        };
        let mut joints = self.start.joints.clone();
        joints[self.phases.arm_joint] = phase.arm_command(&self.phases);
        Ok(sys
            .layout()
            .at_rest(position, Vector3::from(self.start.attitude), &joints))
    }

    pub fn start_state(&self) -> Result<DVector<f64>> {
        let sys = self.system()?;
        Ok(sys.layout().at_rest(
            self.start.position.into(),
            self.start.attitude.into(),
            &self.start.joints,
        ))
    }

    pub fn goal_state(&self) -> Result<Option<DVector<f64>>> {
        let sys = self.system()?;
        Ok(self
            .goal
            .as_ref()
            .map(|g| sys.layout().at_rest(g.position.into(), g.attitude.into(), &g.joints)))
    }

    /// Sample bounds for a motion toward `target`: the workspace box for
    /// the position, every other coordinate pinned to the target.
    pub fn planner_bounds(&self, target: &DVector<f64>) -> Vec<[f64; 2]> {
        (0..target.len())
            .map(|i| {
                if i < 3 {
                    [self.workspace.lo[i], self.workspace.hi[i]]
                } else {
                    [target[i], target[i]]
                }
            })
            .collect()
    }

    /// Resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("cannot serialize scenario: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        let sys = self.system()?;
        let (n_x, n_u, n_m) = (sys.state_dim(), sys.control_dim(), sys.joint_count());
        for (what, pose) in std::iter::once(("start", &self.start)).chain(self.goal.iter().map(|g| ("goal", g))) {
            if pose.joints.len() != n_m {
                return bad(format!(
                    "{what} pose has {} joints, the robot has {n_m}",
                    pose.joints.len()
                ));
            }
        }
        if (0..3).any(|i| !(self.workspace.lo[i] < self.workspace.hi[i])) {
            return bad("workspace bounds need lo < hi on every axis".into());
        }
        if self.phases.arm_joint >= n_m {
            return bad(format!("arm joint {} does not exist", self.phases.arm_joint));
        }
        let ph = &self.phases;
        if !(ph.hold_duration > 0.0
            && ph.place_duration > 0.0
            && ph.arrival_tolerance > 0.0
            && ph.joint_tolerance > 0.0)
        {
            return bad("phase durations and tolerances must be positive".into());
        }
        self.mpc.validate(n_x, n_u)?;
        self.tracking.cost()?;
        self.planner
            .config(self.planner_bounds(&self.start_state()?), self.seed, false)
            .validate(n_x)?;

        let mut names = std::collections::HashSet::new();
        for p in &self.parts {
            if !names.insert(p.name.as_str()) || p.name == "printer" {
                return bad(format!("part name '{}' is not unique", p.name));
            }
        }
        for o in &self.obstacles {
            if !names.insert(o.name.as_str()) || o.name == "printer" {
                return bad(format!("obstacle name '{}' is not unique", o.name));
            }
        }
        let fixed = self.fixed_obstacles()?;
        let parts: Vec<EllipsoidObstacle> = self.parts.iter().map(|p| p.obstacle()).collect::<Result<_>>()?;
        for (i, a) in parts.iter().enumerate() {
            for b in parts.iter().skip(i + 1) {
                if ellipsoids_overlap(&a.center, &a.shape, &b.center, &b.shape)? {
                    return bad(format!("part goals '{}' and '{}' overlap", a.name, b.name));
                }
            }
            for b in &fixed {
                if ellipsoids_overlap(&a.center, &a.shape, &b.center, &b.shape)? {
                    return bad(format!("part goal '{}' overlaps '{}'", a.name, b.name));
                }
            }
        }
        if !self.parts.is_empty() && self.printer.is_none() {
            return bad("parts need a printer".into());
        }
        let check = |what: String, p: Vector3<f64>, against: &[&EllipsoidObstacle]| -> Result<()> {
            if !self.workspace.contains(&p) {
                return Err(Error::Validation(format!("{what} lies outside the workspace")));
            }
            for o in against {
                if !o.point_clear(&p, 0) {
                    return Err(Error::Validation(format!("{what} lies inside '{}'", o.name)));
                }
            }
            Ok(())
        };
        let all: Vec<&EllipsoidObstacle> = fixed.iter().chain(parts.iter()).collect();
        check(
            "start".into(),
            self.start.position.into(),
            &fixed.iter().collect::<Vec<_>>(),
        )?;
        if let Some(g) = &self.goal {
            check("goal".into(), g.position.into(), &fixed.iter().collect::<Vec<_>>())?;
        }
        if let Some(p) = &self.printer {
            check("pickup station".into(), p.pickup(), &all)?;
        }
        for i in 0..self.parts.len() {
            let placed: Vec<&EllipsoidObstacle> = fixed.iter().chain(parts.iter().take(i + 1)).collect();
            check(format!("station of '{}'", self.parts[i].name), self.station(i), &placed)?;
        }
        Ok(())
    }
}

/// Steps of one part's assembly, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyPhase {
    MoveToPrinter,
    Grasp,
    MoveToGoal,
    Place,
    Retract,
}

impl AssemblyPhase {
    pub const SEQUENCE: [AssemblyPhase; 5] = [
        AssemblyPhase::MoveToPrinter,
        AssemblyPhase::Grasp,
        AssemblyPhase::MoveToGoal,
        AssemblyPhase::Place,
        AssemblyPhase::Retract,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AssemblyPhase::MoveToPrinter => "move_to_printer",
            AssemblyPhase::Grasp => "grasp",
            AssemblyPhase::MoveToGoal => "move_to_goal",
            AssemblyPhase::Place => "place",
            AssemblyPhase::Retract => "retract",
        }
    }

    /// Arm joint angle held during the phase.
    pub fn arm_command(self, s: &PhaseSettings) -> f64 {
        match self {
            AssemblyPhase::MoveToPrinter | AssemblyPhase::Retract => s.retract_angle,
            _ => s.grasp_angle,
        }
    }

    /// Whether the phase moves the base along a planned path.
    pub fn is_motion(self) -> bool {
        matches!(self, AssemblyPhase::MoveToPrinter | AssemblyPhase::MoveToGoal)
    }

    /// Whether the part is attached to the robot during the phase.
    pub fn carrying(self) -> bool {
        matches!(self, AssemblyPhase::MoveToGoal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub part: usize,
    pub part_name: String,
    pub phase: AssemblyPhase,
    pub success: bool,
    pub failure: Option<String>,
    /// Obstacles active while the phase ran.
    pub obstacle_count: usize,
    pub plan_cost: Option<f64>,
    pub plan_iterations: Option<usize>,
    pub raw_length: Option<f64>,
    pub smoothed_length: Option<f64>,
    pub steps: usize,
    /// Smallest quadratic form over the dense audit; `None` without
    /// obstacles.
    pub min_clearance: Option<f64>,
    pub audit_points: usize,
    pub position_error: f64,
    pub joint_error: f64,
    pub tracking_rms: f64,
    pub inner_iterations: usize,
    pub infeasible_steps: usize,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl PhaseRecord {
    fn new(part: usize, part_name: &str, phase: AssemblyPhase, obstacle_count: usize) -> Self {
        Self {
            part,
            part_name: part_name.to_string(),
            phase,
            success: false,
            failure: None,
            obstacle_count,
            plan_cost: None,
            plan_iterations: None,
            raw_length: None,
            smoothed_length: None,
            steps: 0,
            min_clearance: None,
            audit_points: 0,
            position_error: 0.0,
            joint_error: 0.0,
            tracking_rms: 0.0,
            inner_iterations: 0,
            infeasible_steps: 0,
            mean_solve_ms: 0.0,
            max_solve_ms: 0.0,
            diagnostics: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyReport {
    pub scenario: String,
    pub seed: u64,
    pub parts_total: usize,
    pub parts_placed: usize,
    pub success: bool,
    /// Obstacle count when each part starts.
    pub obstacle_counts: Vec<usize>,
    /// Arm joint error at the end of each grasp.
    pub grasp_errors: Vec<f64>,
    pub min_clearance: Option<f64>,
    pub total_steps: usize,
    pub mean_solve_ms: f64,
    pub max_solve_ms: f64,
    pub phases: Vec<PhaseRecord>,
}

/// A report with the executed trajectory of every phase record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyRun {
    pub config: ScenarioConfig,
    pub report: AssemblyReport,
    pub trajectories: Vec<Trajectory>,
}

fn phase_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn position(x: &DVector<f64>) -> Vector3<f64> {
    Vector3::new(x[0], x[1], x[2])
}

struct Runner<'a> {
    config: &'a ScenarioConfig,
    sys: FreeFlyer,
    field: ObstacleField,
    x: DVector<f64>,
    index: usize,
    strict: bool,
    /// Trajectory executed by the current phase, kept for failed phases.
    executed: Option<Trajectory>,
}

impl Runner<'_> {
    fn arm(&self, x: &DVector<f64>) -> f64 {
        x[6 + self.config.phases.arm_joint]
    }

    /// Tracks `reference` with the MPC from the current state and audits
    /// the executed trajectory.
    fn execute(&mut self, reference: &Trajectory, rec: &mut PhaseRecord) -> Result<Trajectory> {
        let run = run_receding_horizon(&self.sys, &self.x, reference, &self.field, &self.config.mpc)?;
        let traj = run.trajectory;
        self.x = traj.last().clone();
        self.executed = Some(traj.clone());
        rec.steps = traj.steps();
        rec.inner_iterations = run.diagnostics.iter().map(|d| d.inner_iterations).sum();
        rec.infeasible_steps = run.diagnostics.iter().filter(|d| d.infeasible).count();
        if !run.diagnostics.is_empty() {
            rec.mean_solve_ms = run.diagnostics.iter().map(|d| d.solve_ms).sum::<f64>() / run.diagnostics.len() as f64;
            rec.max_solve_ms = run.diagnostics.iter().map(|d| d.solve_ms).fold(0.0, f64::max);
        }
        rec.diagnostics = run.diagnostics;
        let sq: f64 = traj
            .states
            .iter()
            .zip(&reference.states)
            .map(|(a, b)| (position(a) - position(b)).norm_squared())
            .sum();
        rec.tracking_rms = (sq / traj.len() as f64).sqrt();
        let audit = self.field.audit(&traj.positions(), self.config.planner.h_check);
        rec.audit_points = audit.points;
        if !self.field.is_empty() {
            rec.min_clearance = Some(audit.min_form);
        }
        if !audit.passed() {
            return Err(Error::Validation(format!(
                "collision audit failed: quadratic form {:.4} at knot {} against '{}'",
                audit.min_form,
                audit.worst_knot,
                audit.worst_obstacle.unwrap_or_default()
            )));
        }
        Ok(traj)
    }

    fn motion(&mut self, target: &DVector<f64>, rec: &mut PhaseRecord) -> Result<Trajectory> {
        let c = self.config;
        let seed = phase_seed(c.seed, self.index);
        let pc = c.planner.config(c.planner_bounds(target), seed, self.strict);
        let planned = plan(&self.sys, &self.x, target, &self.field, &pc)?;
        rec.plan_cost = Some(planned.cost);
        rec.plan_iterations = Some(planned.iterations);
        let path = GeometricPath::from_trajectory(&planned.trajectory, self.sys.state_dim() / 2)?;
        rec.raw_length = Some(path.length());
        let sc = SmootherConfig {
            seed,
            strict: self.strict,
            ..c.smoother.clone()
        };
        let smoothed = shortcut(&path, &self.field, &sc)?.path;
        // end on the phase target rather than anywhere in the goal ball
        let mut knots = smoothed.states().to_vec();
        let last = knots[knots.len() - 1].clone();
        let cd = smoothed.config_dim();
        if (last.rows(0, cd) - target.rows(0, cd)).norm() > 1e-9
            && self
                .field
                .segment_clear(&position(&last), &position(target), c.planner.h_check, self.strict)?
        {
            knots.push(target.clone());
        }
        let smoothed = GeometricPath::new(knots, cd)?;
        rec.smoothed_length = Some(smoothed.length());
        let reference = retime(&self.sys, &smoothed, &c.tracking.cost()?, &c.retime, c.mpc.h)?;
        self.execute(&reference, rec)
    }

    fn hold(&mut self, target: &DVector<f64>, duration: f64, rec: &mut PhaseRecord) -> Result<Trajectory> {
        let h = self.config.mpc.h;
        let steps = (duration / h).ceil().max(1.0) as usize;
        let reference = Trajectory::new(
            h,
            vec![target.clone(); steps + 1],
            vec![DVector::zeros(self.sys.control_dim()); steps + 1],
        )?;
        self.execute(&reference, rec)
    }

    fn arrived(&self, target: &DVector<f64>, rec: &mut PhaseRecord) -> Result<()> {
        let s = &self.config.phases;
        rec.position_error = (position(&self.x) - position(target)).norm();
        rec.joint_error = (self.arm(&self.x) - self.arm(target)).abs();
        if rec.position_error > s.arrival_tolerance {
            return Err(Error::Validation(format!(
                "base is {:.4} m from the target, tolerance {}",
                rec.position_error, s.arrival_tolerance
            )));
        }
        if rec.joint_error > s.joint_tolerance {
            return Err(Error::Validation(format!(
                "arm joint is {:.4} rad from {:.4}, tolerance {}",
                rec.joint_error,
                self.arm(target),
                s.joint_tolerance
            )));
        }
        Ok(())
    }

    fn phase(&mut self, part: usize, phase: AssemblyPhase, rec: &mut PhaseRecord) -> Result<Trajectory> {
        let c = self.config;
        let target = c.phase_target(part, phase)?;
        let traj = match phase {
            AssemblyPhase::MoveToPrinter | AssemblyPhase::MoveToGoal => self.motion(&target, rec)?,
            AssemblyPhase::Grasp | AssemblyPhase::Retract => self.hold(&target, c.phases.hold_duration, rec)?,
            AssemblyPhase::Place => {
                let obs = c.parts[part].obstacle()?;
                if !obs.point_clear(&position(&self.x), 0) {
                    return Err(Error::Validation("base is inside the part being placed".into()));
                }
                self.field.push(obs)?;
                rec.obstacle_count = self.field.len();
                self.hold(&target, c.phases.place_duration, rec)?
            }
        };
        self.arrived(&target, rec)?;
        Ok(traj)
    }
}

/// Runs every part through the phase sequence. Phase failures are recorded
/// and end that part; with `strict` they end the run.
pub fn run_assembly(config: &ScenarioConfig, strict: bool) -> Result<AssemblyRun> {
    let sys = config.system()?;
    let mut runner = Runner {
        config,
        field: config.initial_field()?,
        x: config.start_state()?,
        sys,
        index: 0,
        strict,
        executed: None,
    };
    let mut phases = Vec::new();
    let mut trajectories = Vec::new();
    let mut obstacle_counts = Vec::new();
    let mut grasp_errors = Vec::new();
    let mut placed = 0;
    'parts: for (i, part) in config.parts.iter().enumerate() {
        obstacle_counts.push(runner.field.len());
        for phase in AssemblyPhase::SEQUENCE {
            let mut rec = PhaseRecord::new(i, &part.name, phase, runner.field.len());
            runner.executed = None;
            let outcome = runner.phase(i, phase, &mut rec);
            runner.index += 1;
            let traj = match outcome {
                Ok(t) => {
                    rec.success = true;
                    t
                }
                Err(e) => {
                    rec.failure = Some(e.to_string());
                    runner
                        .executed
                        .take()
                        .unwrap_or_else(|| Trajectory::single(config.mpc.h, runner.x.clone(), runner.sys.control_dim()))
                }
            };
            if phase == AssemblyPhase::Grasp {
                grasp_errors.push(rec.joint_error);
            }
            if phase == AssemblyPhase::Place && rec.success {
                placed += 1;
            }
            let ok = rec.success;
            phases.push(rec);
            trajectories.push(traj);
            if !ok {
                if strict {
                    break 'parts;
                }
                continue 'parts;
            }
        }
    }
    let diag: Vec<&StepDiagnostics> = phases.iter().flat_map(|p| p.diagnostics.iter()).collect();
    let mean_solve_ms = if diag.is_empty() {
        0.0
    } else {
        diag.iter().map(|d| d.solve_ms).sum::<f64>() / diag.len() as f64
    };
    let report = AssemblyReport {
        scenario: config.name.clone(),
        seed: config.seed,
        parts_total: config.parts.len(),
        parts_placed: placed,
        success: placed == config.parts.len() && phases.iter().all(|p| p.success),
        obstacle_counts,
        grasp_errors,
        min_clearance: phases.iter().filter_map(|p| p.min_clearance).reduce(f64::min),
        total_steps: diag.len(),
        mean_solve_ms,
        max_solve_ms: diag.iter().map(|d| d.solve_ms).fold(0.0, f64::max),
        phases,
    };
    Ok(AssemblyRun {
        config: config.clone(),
        report,
        trajectories,
    })
}

/// SHA-256 over the report without wall-clock fields and over every
/// trajectory value.
pub fn report_hash(run: &AssemblyRun) -> Result<String> {
    let mut report = run.report.clone();
    report.mean_solve_ms = 0.0;
    report.max_solve_ms = 0.0;
    for p in &mut report.phases {
        p.mean_solve_ms = 0.0;
        p.max_solve_ms = 0.0;
        for d in &mut p.diagnostics {
            d.solve_ms = 0.0;
        }
    }
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&report).map_err(|e| Error::Internal(e.to_string()))?);
    for t in &run.trajectories {
        hasher.update(t.h.to_le_bytes());
        for v in t.states.iter().chain(&t.controls).flat_map(|v| v.iter()) {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hasher.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// Column names for trajectory tables.
pub fn trajectory_header(n_m: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["t", "x", "y", "z", "roll", "pitch", "yaw"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    cols.extend((0..n_m).map(|j| format!("q{}", j + 1)));
    cols.extend(["vx", "vy", "vz", "wx", "wy", "wz"].iter().map(|s| s.to_string()));
    cols.extend((0..n_m).map(|j| format!("dq{}", j + 1)));
    cols.extend(["fx", "fy", "fz", "tx", "ty", "tz"].iter().map(|s| s.to_string()));
    cols.extend((0..n_m).map(|j| format!("tau{}", j + 1)));
    cols
}

/// Rows `t, state, control`, with `t0` added to the time column.
pub fn trajectory_csv(traj: &Trajectory, n_m: usize, t0: f64) -> String {
    let mut out = trajectory_header(n_m).join(",");
    out.push('\n');
    for k in 0..traj.len() {
        let _ = write!(out, "{}", t0 + traj.time(k));
        for v in traj.states[k].iter().chain(traj.controls[k].iter()) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Reads a table written by [`trajectory_csv`]; the time column fixes the
/// step.
pub fn read_trajectory_csv(text: &str, n_x: usize, n_u: usize) -> Result<Trajectory> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    lines
        .next()
        .ok_or_else(|| Error::Validation("empty trajectory table".into()))?;
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut controls = Vec::new();
    for (row, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Validation(format!("row {}: {e}", row + 2)))?;
        if vals.len() != 1 + n_x + n_u {
            return Err(Error::Validation(format!(
                "row {} has {} columns, expected {}",
                row + 2,
                vals.len(),
                1 + n_x + n_u
            )));
        }
        times.push(vals[0]);
        states.push(DVector::from_column_slice(&vals[1..1 + n_x]));
        controls.push(DVector::from_column_slice(&vals[1 + n_x..]));
    }
    if states.is_empty() {
        return Err(Error::Validation("trajectory table has no rows".into()));
    }
    let h = if times.len() > 1 {
        (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64
    } else {
        1.0
    };
    Trajectory::new(h, states, controls)
}

/// Writes the run tables into `dir` and returns the paths written.
///
/// Every file except `timing.csv` and `report.json` is a function of the
/// seeded computation only.
pub fn export_run(run: &AssemblyRun, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let n_m = run.config.description().joint_count();
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };

    // the whole run as one trajectory, then per phase
    let mut whole: Option<Trajectory> = None;
    let mut starts = Vec::new();
    for t in &run.trajectories {
        match whole.as_mut() {
            None => {
                starts.push(0.0);
                whole = Some(t.clone());
            }
            Some(w) => {
                starts.push(w.duration());
                w.append(t)?;
            }
        }
    }
    let body = match &whole {
        Some(w) => trajectory_csv(w, n_m, 0.0),
        None => trajectory_header(n_m).join(",") + "\n",
    };
    put("trajectory.csv", body)?;
    for ((rec, t), t0) in run.report.phases.iter().zip(&run.trajectories).zip(&starts) {
        put(
            &format!("part{:02}_{}.csv", rec.part, rec.phase.name()),
            trajectory_csv(t, n_m, *t0),
        )?;
    }

    let mut series = [
        "t,x,y,z\n".to_string(),
        "t,roll,pitch,yaw\n".to_string(),
        std::iter::once("t".to_string())
            .chain((0..n_m).map(|j| format!("q{}", j + 1)))
            .collect::<Vec<_>>()
            .join(",")
            + "\n",
    ];
    if let Some(w) = &whole {
        for k in 0..w.len() {
            let x = &w.states[k];
            let t = w.time(k);
            let _ = writeln!(series[0], "{t},{},{},{}", x[0], x[1], x[2]);
            let _ = writeln!(series[1], "{t},{},{},{}", x[3], x[4], x[5]);
            let _ = write!(series[2], "{t}");
            for j in 0..n_m {
                let _ = write!(series[2], ",{}", x[6 + j]);
            }
            series[2].push('\n');
        }
    }
    let [translation, attitude, arm] = series;
    put("base_translation.csv", translation)?;
    put("base_attitude.csv", attitude)?;
    put("manipulator.csv", arm)?;

    let mut diag =
        "part,phase,step,inner_iterations,outer_iterations,residual,max_violation,converged,infeasible\n".to_string();
    let mut timing = "part,phase,step,solve_ms\n".to_string();
    for rec in &run.report.phases {
        for d in &rec.diagnostics {
            let _ = writeln!(
                diag,
                "{},{},{},{},{},{},{},{},{}",
                rec.part,
                rec.phase.name(),
                d.step,
                d.inner_iterations,
                d.outer_iterations,
                d.residual,
                d.max_violation,
                d.converged,
                d.infeasible
            );
            let _ = writeln!(timing, "{},{},{},{}", rec.part, rec.phase.name(), d.step, d.solve_ms);
        }
    }
    put("diagnostics.csv", diag)?;
    put("timing.csv", timing)?;

    let mut phases = "part,name,phase,success,obstacles,plan_cost,raw_length,smoothed_length,steps,min_clearance,position_error,joint_error,tracking_rms,failure\n".to_string();
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in &run.report.phases {
        let _ = writeln!(
            phases,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.part,
            r.part_name,
            r.phase.name(),
            r.success,
            r.obstacle_count,
            opt(r.plan_cost),
            opt(r.raw_length),
            opt(r.smoothed_length),
            r.steps,
            opt(r.min_clearance),
            r.position_error,
            r.joint_error,
            r.tracking_rms,
            r.failure.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    put("phases.csv", phases)?;
    put("scenario.toml", run.config.to_toml()?)?;
    put("report_hash.txt", report_hash(run)? + "\n")?;
    put(
        "report.json",
        serde_json::to_string_pretty(&run.report).map_err(|e| Error::Internal(e.to_string()))? + "\n",
    )?;
    Ok(written)
}

/// Time after which coordinate `coord` stays within `band·|target − start|`
/// of `target`.
pub fn settling_time(traj: &Trajectory, coord: usize, start: f64, target: f64, band: f64) -> Option<f64> {
    let tol = band * (target - start).abs();
    let outside = traj.states.iter().rposition(|x| (x[coord] - target).abs() > tol);
    match outside {
        None => Some(0.0),
        Some(k) if k + 1 < traj.len() => Some(traj.time(k + 1)),
        Some(_) => None,
    }
}

/// LQR tracking of a unit-free step of `size` along base axis `axis` from
/// rest, over `duration` seconds at step `h`. Returns the executed
/// trajectory and its 2% settling time.
pub fn step_response(
    sys: &FreeFlyer,
    weights: &DiagonalWeights,
    axis: usize,
    size: f64,
    duration: f64,
    h: f64,
) -> Result<(Trajectory, Option<f64>)> {
    let l = sys.layout();
    let joints = vec![0.0; sys.joint_count()];
    let x0 = l.at_rest(Vector3::zeros(), Vector3::zeros(), &joints);
    let mut target = x0.clone();
    target[axis] += size;
    let steps = (duration / h).ceil() as usize;
    let reference = Trajectory::new(
        h,
        vec![target.clone(); steps + 1],
        vec![DVector::zeros(sys.control_dim()); steps + 1],
    )?;
    let traj = track(sys, &reference, &weights.cost()?, &x0)?;
    let settle = settling_time(&traj, axis, x0[axis], target[axis], 0.02);
    Ok((traj, settle))
}
