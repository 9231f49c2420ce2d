use std::f64::consts::FRAC_PI_4;
use std::fs;
use std::path::{Path, PathBuf};

use freeflyer::dynamics::FreeFlyer;
use freeflyer::harness::{
    default_tracking_weights, export_run, load_scenario, read_trajectory_csv, report_hash, run_assembly, step_response,
    trajectory_csv, AssemblyPhase, ScenarioConfig,
};
use freeflyer::Error;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn parse(text: &str) -> freeflyer::Result<ScenarioConfig> {
    ScenarioConfig::from_toml_str(text, "inline", &scenarios())
}

const ONE_PART: &str = r#"
seed = 11
[start]
position = [-0.5, -0.5, 0.5]
[printer]
center = [-1.0, 0.26, 0.2]
semi_axes = [0.35, 0.35, 0.35]
safety = 1.2
pickup_offset = [0.6, 0.0, 0.25]
[retime]
v_max = 0.2
hold = 2.0
[phases]
hold_duration = 5.0
[[parts]]
name = "block"
semi_axes = [0.12, 0.12, 0.1]
goal = [0.3, 0.0, 0.0]
safety = 1.5
"#;

#[test]
fn minimal_file_gets_defaults() {
    let c = parse("seed = 3").unwrap();
    assert_eq!(c.name, "scenario");
    assert_eq!(c.seed, 3);
    assert!(c.parts.is_empty());
    assert_eq!(c.start.joints, vec![0.0, 0.0]);
    assert_eq!(c.tracking, default_tracking_weights(16, 8));
    assert_eq!(c.mpc.weights, c.tracking);
    assert_eq!(c.mpc.horizon, 10);
    assert_eq!(c.planner.gamma, 5.0);
    assert_eq!(c.planner.weights.q_n, vec![1000.0; 16]);
    assert_eq!(c.phases.grasp_angle, FRAC_PI_4);
    assert_eq!(c.phases.retract_angle, 0.0);
    assert_eq!(c.description().name, "astrobee");
}

#[test]
fn resolved_echo_round_trips() {
    let c = load_scenario(&scenarios().join("pyramid10.toml")).unwrap();
    let again = parse(&c.to_toml().unwrap()).unwrap();
    assert_eq!(c, again);
}

#[test]
fn overlapping_goals_name_both_parts() {
    let text = r#"
seed = 1
[printer]
center = [-1.0, 0.0, 0.0]
semi_axes = [0.3, 0.3, 0.3]
pickup_offset = [0.6, 0.0, 0.0]
[[parts]]
name = "left"
semi_axes = [0.2, 0.2, 0.2]
goal = [0.5, 0.0, 0.0]
[[parts]]
name = "right"
semi_axes = [0.2, 0.2, 0.2]
goal = [0.8, 0.0, 0.0]
"#;
    match parse(text) {
        Err(Error::Validation(m)) => assert!(m.contains("'left'") && m.contains("'right'"), "{m}"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn parse_errors_locate_the_problem() {
    match parse("seed = 1\n[start]\nposition = [0.0, 0.0]\n") {
        Err(Error::Parse { message, .. }) => assert!(message.contains("line 3"), "{message}"),
        other => panic!("expected a parse error, got {other:?}"),
    }
    assert!(
        matches!(parse("name = \"x\""), Err(Error::Parse { .. })),
        "the seed is required"
    );
    assert!(matches!(parse("seed = 1\nspeed = 2"), Err(Error::Parse { .. })));
}

#[test]
fn invalid_scenarios_are_rejected() {
    // station inside the printer
    let text = ONE_PART.replace("pickup_offset = [0.6, 0.0, 0.25]", "pickup_offset = [0.1, 0.0, 0.0]");
    assert!(matches!(parse(&text), Err(Error::Validation(m)) if m.contains("pickup station")));
    // parts without a printer
    let text = "seed = 1\n[[parts]]\nname = \"a\"\nsemi_axes = [0.1, 0.1, 0.1]\ngoal = [0.0, 0.0, 0.0]\n";
    assert!(matches!(parse(text), Err(Error::Validation(_))));
    // start outside the workspace
    assert!(matches!(
        parse("seed = 1\n[start]\nposition = [5.0, 0.0, 0.0]\n"),
        Err(Error::Validation(_))
    ));
    // arm joint that does not exist
    assert!(matches!(
        parse("seed = 1\n[phases]\narm_joint = 4\n"),
        Err(Error::Validation(_))
    ));
}

#[test]
fn pyramid_layout() {
    let c = load_scenario(&scenarios().join("pyramid10.toml")).unwrap();
    assert_eq!(c.parts.len(), 10);
    let layer = |z: f64| c.parts.iter().filter(|p| (p.goal[2] - z).abs() < 1e-9).count();
    assert_eq!((layer(0.0), layer(0.2), layer(0.4)), (6, 3, 1));
    assert_eq!(c.mpc.horizon, 10);
    assert_eq!(c.initial_field().unwrap().len(), 1);
}

#[test]
fn zero_parts_give_an_empty_successful_report() {
    let c = parse("seed = 5").unwrap();
    let run = run_assembly(&c, false).unwrap();
    assert!(run.report.success);
    assert!(run.report.phases.is_empty());
    let dir = tempfile::tempdir().unwrap();
    export_run(&run, dir.path()).unwrap();
    for f in [
        "trajectory.csv",
        "diagnostics.csv",
        "base_translation.csv",
        "manipulator.csv",
    ] {
        let text = fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(text.lines().count(), 1, "{f}");
    }
}

#[test]
fn one_part_run_is_clear_deterministic_and_exports() {
    let c = parse(ONE_PART).unwrap();
    let run = run_assembly(&c, false).unwrap();
    let r = &run.report;
    assert!(
        r.success,
        "{:?}",
        r.phases.iter().map(|p| &p.failure).collect::<Vec<_>>()
    );
    assert_eq!(r.parts_placed, 1);
    assert!(r.min_clearance.unwrap() >= 1.0);
    let phases: Vec<_> = r.phases.iter().map(|p| p.phase).collect();
    assert_eq!(phases, AssemblyPhase::SEQUENCE);
    // printer alone, then printer and the placed part
    let counts: Vec<_> = r.phases.iter().map(|p| p.obstacle_count).collect();
    assert_eq!(counts, [1, 1, 1, 2, 2]);
    assert!(r.grasp_errors[0] < 1e-2);

    let ff = c.system().unwrap();
    for (t, next) in run.trajectories.iter().zip(run.trajectories.iter().skip(1)) {
        assert!(t.replay_error(&ff).unwrap() <= 1e-9);
        assert_eq!(t.last(), next.first());
    }

    let again = run_assembly(&c, false).unwrap();
    assert_eq!(report_hash(&run).unwrap(), report_hash(&again).unwrap());

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    export_run(&run, a.path()).unwrap();
    export_run(&again, b.path()).unwrap();
    for f in [
        "trajectory.csv",
        "diagnostics.csv",
        "phases.csv",
        "base_attitude.csv",
        "report_hash.txt",
        "scenario.toml",
    ] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let knots: usize = run.trajectories.iter().map(|t| t.steps()).sum::<usize>() + 1;
    let table = fs::read_to_string(a.path().join("trajectory.csv")).unwrap();
    assert_eq!(table.lines().count(), knots + 1);
    assert_eq!(table.lines().next().unwrap().split(',').count(), 1 + 16 + 8);
    let phase = fs::read_to_string(a.path().join("part00_grasp.csv")).unwrap();
    assert_eq!(phase.lines().count(), run.trajectories[1].len() + 1);
}

#[test]
fn failures_end_the_part_or_the_run() {
    let two = ONE_PART.to_string()
        + "[[parts]]\nname = \"other\"\nsemi_axes = [0.12, 0.12, 0.1]\ngoal = [0.3, 0.5, 0.0]\nsafety = 1.5\n";
    // a single planner iteration cannot reach any station
    let starved = two.replace("seed = 11", "seed = 11\n[planner]\nmax_iterations = 1");
    let c = parse(&starved).unwrap();
    let run = run_assembly(&c, false).unwrap();
    assert!(!run.report.success);
    assert_eq!(run.report.parts_placed, 0);
    assert_eq!(run.report.phases.len(), 2, "each part stops at its failed move");
    assert!(run.report.phases[0].failure.as_ref().unwrap().contains("no path"));
    let strict = run_assembly(&c, true).unwrap();
    assert_eq!(strict.report.phases.len(), 1);
    assert_eq!(strict.trajectories.len(), 1);
}

#[test]
fn trajectory_tables_round_trip() {
    let c = parse(ONE_PART).unwrap();
    let ff = FreeFlyer::astrobee();
    let (traj, _) = step_response(&ff, &c.tracking, 0, 0.3, 2.0, 0.2).unwrap();
    let text = trajectory_csv(&traj, 2, 0.0);
    let back = read_trajectory_csv(&text, 16, 8).unwrap();
    assert_eq!(back.states, traj.states);
    assert_eq!(back.controls, traj.controls);
    assert!((back.h - traj.h).abs() < 1e-12);
    assert!(read_trajectory_csv("t,x\n0,1\n", 16, 8).is_err());
}

#[test]
fn default_weights_settle_a_step() {
    let ff = FreeFlyer::astrobee();
    let w = default_tracking_weights(16, 8);
    for axis in 0..3 {
        let (traj, settle) = step_response(&ff, &w, axis, 1.0, 20.0, 0.2).unwrap();
        let t = settle.unwrap();
        assert!(t < 5.0, "axis {axis}: {t}");
        assert!((traj.last()[axis] - 1.0).abs() < 0.02);
    }
}
