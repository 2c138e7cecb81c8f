mod common;

use forge_core::io::{parse_problem, ProblemFile};
use forge_core::model::System;

const TWO_FACE: &str = r#"{
  "spec_version": 1,
  "system": {"kind": "double_integrator", "dt": 0.25, "pos_dim": 2, "horizon": 6, "x0": [0, 0, 0, 0]},
  "noise": {"w_radius": 0.05, "e_radius": 0.02},
  "cost": {"kind": "J3", "position_indices": [0, 1], "goal": [2.0, 0.0]},
  "known": [],
  "unknown": {"param_dim": 4, "param_lower": [-3, -3, -3, -3], "param_upper": [3, 3, 3, 3],
              "position_indices": [0, 1], "obstacles": [{"axis_box": 0, "times": [1, 2, 3, 4, 5, 6]}]},
  "theta_star": [0.6, 1.2, -0.5, 0.2]
}"#;

#[test]
fn double_integrator_file_matches_programmatic_instance() {
    let inst = parse_problem(TWO_FACE).unwrap().build().unwrap();
    let want = common::two_face_instance();
    assert_eq!(inst.system.as_ltv(), want.system.as_ltv());
    assert_eq!(inst.noise, want.noise);
    assert_eq!(inst.cost, want.cost);
    assert_eq!(inst.unknown, want.unknown);
    assert_eq!(inst.theta_star, want.theta_star);
    assert!(inst.known.halfspaces.is_empty());
}

#[test]
fn problem_file_round_trips() {
    let file = parse_problem(TWO_FACE).unwrap();
    let text = serde_json::to_string(&file).unwrap();
    let back: ProblemFile = serde_json::from_str(&text).unwrap();
    assert_eq!(file, back);
}

#[test]
fn lti_blocks_repeat_and_matrices_are_row_major() {
    let text = r#"{"spec_version": 1,
      "system": {"kind": "lti", "a": [[1, 2], [3, 4]], "b": [[0], [1]], "c": [[1, 0]], "x0": [1, 0], "horizon": 3},
      "cost": {"kind": "J1", "position_indices": [0]},
      "known": [{"input_lower": [-1], "input_upper": [1]},
                {"state": 1, "times": [3], "upper": 2.0},
                {"a": [1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], "b": 5.0}]}"#;
    let inst = parse_problem(text).unwrap().build().unwrap();
    let ltv = inst.system.as_ltv().unwrap();
    assert_eq!(ltv.a.len(), 3);
    assert_eq!(ltv.c.len(), 4);
    assert_eq!(ltv.a[2][(0, 1)], 2.0);
    assert_eq!(ltv.a[2][(1, 0)], 3.0);
    // 2 rows per input step, one state bound, one explicit row.
    assert_eq!(inst.known.halfspaces.len(), 2 * 3 + 1 + 1);
    assert!(inst.unknown.is_empty());
    assert!(inst.noise.is_zero());
}

#[test]
fn unicycle_builds_nonlinear_system() {
    let text = r#"{"spec_version": 1,
      "system": {"kind": "unicycle", "dt": 0.2, "horizon": 5, "x0": [0, 0, 0, 0.5], "output": "position"},
      "cost": {"kind": "J1", "position_indices": [0, 1]}}"#;
    let inst = parse_problem(text).unwrap().build().unwrap();
    assert!(matches!(inst.system, System::Nonlinear(_)));
    let d = inst.dims();
    assert_eq!((d.n, d.ni, d.no, d.horizon), (4, 2, 2, 5));
}

#[test]
fn bad_files_are_rejected() {
    let wrong_version = TWO_FACE.replace("\"spec_version\": 1", "\"spec_version\": 2");
    let err = parse_problem(&wrong_version).unwrap().build().unwrap_err();
    assert!(err.to_string().contains("spec_version"));
    let bad_box = TWO_FACE.replace("\"param_lower\": [-3, -3, -3, -3]", "\"param_lower\": [4, -3, -3, -3]");
    assert!(parse_problem(&bad_box).unwrap().build().is_err());
    let ragged = TWO_FACE.replace(
        r#""system": {"kind": "double_integrator", "dt": 0.25, "pos_dim": 2, "horizon": 6, "x0": [0, 0, 0, 0]}"#,
        r#""system": {"kind": "lti", "a": [[1, 2], [3]], "b": [[0], [1]], "c": [[1, 0]], "x0": [1, 0], "horizon": 3}"#,
    );
    assert!(parse_problem(&ragged).is_err());
}
