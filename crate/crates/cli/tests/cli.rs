use boxbench_core::dataset::load_dataset;
use boxbench_core::metrics::{MetricsReport, REPORT_SCHEMA_VERSION};
use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

fn boxbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxbench"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Answers every step with empty masks sized to the observed cloud.
const NULL_POLICY: &str = r#"import json, sys
print(json.dumps({"protocol_version": 1, "policy_name": "null", "reentrant": True}), flush=True)
for line in sys.stdin:
    req = json.loads(line)
    if req["type"] == "shutdown":
        break
    empty = {"len": len(req["cloud"]["points"]), "runs": [len(req["cloud"]["points"])]}
    print(json.dumps({"pick_mask": empty, "target_mask": empty, "done_probability": 0.0}), flush=True)
"#;

#[test]
fn usage_errors_exit_64() {
    assert_eq!(
        boxbench(&["evaluate", "--frobnicate"]).status.code(),
        Some(64)
    );
    assert_eq!(boxbench(&[]).status.code(), Some(64));
    assert_eq!(boxbench(&["--help"]).status.code(), Some(0));
}

#[test]
fn unknown_policy_and_variant_exit_65() {
    let o = boxbench(&["evaluate", "--policy", "telepathy", "-n", "1"]);
    assert_eq!(o.status.code(), Some(65), "{}", stderr(&o));
    let o = boxbench(&["oracle-rollout", "--variant", "nonsense"]);
    assert_eq!(o.status.code(), Some(65), "{}", stderr(&o));
}

#[test]
fn oracle_evaluation_is_perfect_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = [
        "evaluate", "--policy", "oracle", "--mode", "snap", "--seed", "7", "-n", "2", "--json",
    ];
    let mut with_out = args.to_vec();
    let out_str = out.to_str().unwrap();
    with_out.extend(["--out", out_str]);
    let a = boxbench(&with_out);
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(
        stderr(&a).contains("# boxbench"),
        "reproducibility header missing"
    );
    assert!(stderr(&a).contains("seed=7"));
    let b = boxbench(&args);
    assert_eq!(stdout(&a), stdout(&b));

    let report: MetricsReport = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(report.schema_version, REPORT_SCHEMA_VERSION);
    assert_eq!(report.episodes, 22);
    let snap = report.plan_success.values().next().unwrap();
    assert_eq!(snap.aggregate.percent, 100.0);
    assert_eq!(
        report.one_step_validity.as_ref().unwrap().aggregate.percent,
        100.0
    );

    assert_eq!(
        std::fs::read_to_string(out.join("report.json")).unwrap(),
        stdout(&a)
    );
    assert!(std::fs::read_to_string(out.join("run.txt"))
        .unwrap()
        .contains("config-sha256="));
    let r = boxbench(&["replay", out.join("episodes.ndjson").to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(stdout(&r).contains("verified 22 episode(s)"));

    let table = boxbench(&["report", out.join("report.json").to_str().unwrap()]);
    assert!(table.status.success());
    assert!(stdout(&table).contains("100.0"));
}

/// Field names a downstream reader depends on.
#[test]
fn report_json_shape() {
    let o = boxbench(&[
        "evaluate",
        "--policy",
        "noisy:0.3",
        "--seed",
        "3",
        "-n",
        "1",
        "--json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    for key in [
        "schema_version",
        "policy",
        "privileged",
        "episodes",
        "one_step_samples",
        "one_step_validity",
        "placement_error",
        "joint_iou",
        "plan_success",
    ] {
        assert!(v.get(key).is_some(), "report lacks {key}");
    }
    let ps = v["plan_success"].as_object().unwrap();
    assert_eq!(ps.len(), 2, "both execution modes by default");
    for mode in ps.values() {
        for key in ["aggregate", "by_bucket", "by_variant", "outcomes"] {
            assert!(mode.get(key).is_some(), "plan_success lacks {key}");
        }
        assert!(mode["aggregate"]["percent"].is_number());
    }
    assert_eq!(v["joint_iou"].as_array().unwrap().len(), 3);
    assert_eq!(v["privileged"], Value::Bool(true));
}

#[test]
fn ablation_report_subtracts() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, policy: &str| {
        let o = boxbench(&[
            "evaluate", "--policy", policy, "--seed", "5", "-n", "1", "--json",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let p = dir.path().join(name);
        std::fs::write(&p, o.stdout).unwrap();
        p
    };
    let full = write("full.json", "oracle");
    let ablated = write("ablated.json", "noisy:0.5");
    let o = boxbench(&[
        "report",
        ablated.to_str().unwrap(),
        "--against",
        full.to_str().unwrap(),
        "--json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let deltas = v["deltas"].as_object().unwrap();
    assert!(!deltas.is_empty());
    assert!(deltas.values().all(|d| d.as_f64().unwrap() <= 0.0));
}

#[test]
fn rollout_record_replays() {
    let dir = tempfile::tempdir().unwrap();
    let rec = dir.path().join("rec.json");
    let o = boxbench(&[
        "oracle-rollout",
        "--seed",
        "11",
        "--variant",
        "basic-placement",
        "--index",
        "2",
        "--mode",
        "freeform",
        "--out",
        rec.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("outcome: success"));
    let r = boxbench(&["replay", rec.to_str().unwrap()]);
    assert!(
        stdout(&r).contains("verified 1 episode(s)"),
        "{}",
        stderr(&r)
    );

    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&rec).unwrap()).unwrap();
    v["final_digest"] = Value::String("0".repeat(64));
    std::fs::write(&rec, v.to_string()).unwrap();
    let r = boxbench(&["replay", rec.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(65), "{}", stderr(&r));
}

#[test]
fn external_policy_runs_and_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("null_policy.py");
    std::fs::write(&script, NULL_POLICY).unwrap();
    let policy = format!("external:python3 {}", script.display());
    let o = boxbench(&[
        "evaluate",
        "--policy",
        &policy,
        "--seed",
        "1",
        "-n",
        "1",
        "--variants",
        "basic-placement",
        "--json",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: MetricsReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report.policy, "null");
    assert!(!report.privileged);
    for mode in report.plan_success.values() {
        assert_eq!(mode.aggregate.hits, 0);
    }

    let o = boxbench(&["evaluate", "--policy", "external:echo hello", "-n", "1"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let garbage = r#"external:echo '{"protocol_version":1,"policy_name":"g","reentrant":false}'; while read line; do echo '{"pick_mask":7}'; done"#;
    let o = boxbench(&[
        "evaluate",
        "--policy",
        garbage,
        "-n",
        "1",
        "--variants",
        "basic-placement",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn dataset_round_trips_through_loader() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let o = boxbench(&[
        "gen-dataset",
        "--seed",
        "8",
        "--episodes",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("wrote 5 episodes"));
    let ds = load_dataset(&out).unwrap();
    assert_eq!(ds.manifest.episodes.len(), 5);
    assert_eq!(ds.samples.len() as u64, ds.manifest.counts.total);
    assert!(Path::new(&out.join("rig.json")).exists());

    let manifest: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    for key in [
        "schema_version",
        "config",
        "config_digest",
        "counts",
        "train_episodes",
        "test_episodes",
        "episodes",
    ] {
        assert!(manifest.get(key).is_some(), "manifest lacks {key}");
    }
    let first = &manifest["episodes"][0];
    let samples = std::fs::read_to_string(
        out.join(first["dir"].as_str().unwrap())
            .join("samples.ndjson"),
    )
    .unwrap();
    let line: Value = serde_json::from_str(samples.lines().next().unwrap()).unwrap();
    for key in [
        "sample_id",
        "episode_id",
        "split",
        "kind",
        "goal_text",
        "pick_mask",
        "target_mask",
        "done_probability",
    ] {
        assert!(line.get(key).is_some(), "sample lacks {key}");
    }
}

#[test]
fn gen_scene_is_deterministic() {
    let a = boxbench(&["gen-scene", "--seed", "4", "--boxes", "12"]);
    let b = boxbench(&["gen-scene", "--seed", "4", "--boxes", "12"]);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let v: Value = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(v["boxes"].as_array().unwrap().len(), 12);
}
