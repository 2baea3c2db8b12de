//! End-to-end tests of the `semtopo` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use semtopo::model::load_checkpoint;
use semtopo::topology::load_anchors;

fn manifest(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn semtopo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semtopo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = semtopo(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const FAST: [&str; 4] = ["--epochs", "2", "--finetune-epochs", "2"];

#[test]
fn gen_data_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen-data", "--seed", "11", "--out", path(&a)]);
    ok(&["gen-data", "--seed", "11", "--out", path(&b)]);
    for name in ["train_task1.jsonl", "train_task2.jsonl", "train_task3.jsonl", "eval.jsonl", "schedule.toml"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let eval = fs::read_to_string(a.join("eval.jsonl")).unwrap();
    assert_eq!(eval.lines().count(), 600);

    // The written files drive a run exactly like the in-memory benchmark.
    let from_files = dir.path().join("files");
    let in_memory = dir.path().join("memory");
    let data = path(&a);
    let schedule = a.join("schedule.toml");
    ok(&[&["run", "--seed", "11", "--data", data, "--schedule", path(&schedule), "--out", path(&from_files)][..], &FAST].concat());
    ok(&[&["run", "--seed", "11", "--out", path(&in_memory)][..], &FAST].concat());
    assert_eq!(
        fs::read(from_files.join("metrics.csv")).unwrap(),
        fs::read(in_memory.join("metrics.csv")).unwrap()
    );
}

#[test]
fn default_run_matches_golden_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&["run", "--out", path(dir.path())]);
    assert!(stdout.contains("time point 3"));
    let got = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let want = fs::read_to_string(manifest("fixtures/golden/default_seed0_metrics.csv")).unwrap();
    assert_eq!(got, want);

    let mut reader = csv::Reader::from_reader(got.as_bytes());
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, ["task", "wi", "a_ose", "map_prev", "map_curr", "map_both"]);
    for (i, row) in reader.records().enumerate() {
        let row = row.unwrap();
        assert_eq!(row[0].parse::<usize>().unwrap(), i + 1);
        row[2].parse::<usize>().unwrap();
        for field in [&row[1], &row[3], &row[4], &row[5]] {
            field.parse::<f64>().unwrap();
        }
    }

    for t in 1..=3 {
        let params = load_checkpoint(&dir.path().join(format!("checkpoint_task{t}.bin"))).unwrap();
        assert_eq!(params.config.max_classes, 6);
        let topology = load_anchors(&dir.path().join(format!("topology_task{t}.jsonl")), true).unwrap();
        assert_eq!(topology.num_classes(), 2 * t);
        let features = fs::read_to_string(dir.path().join(format!("features_task{t}.jsonl"))).unwrap();
        let first: Value = serde_json::from_str(features.lines().next().unwrap()).unwrap();
        assert_eq!(first["f_hat"].as_array().unwrap().len(), 32);
    }
}

#[test]
fn eval_reproduces_the_golden_sets() {
    let schedule = manifest("fixtures/toy_schedule.toml");
    for name in ["five", "wi", "aose"] {
        let gt = manifest(&format!("fixtures/eval/{name}_gt.jsonl"));
        let det = manifest(&format!("fixtures/eval/{name}_det.jsonl"));
        let expected: Value =
            serde_json::from_str(&fs::read_to_string(manifest(&format!("fixtures/eval/{name}_expected.json"))).unwrap())
                .unwrap();
        let stdout = ok(&[
            "eval", "--gt", path(&gt), "--det", path(&det), "--schedule", path(&schedule), "--task", "1", "--json",
        ]);
        let got: Value = serde_json::from_str(stdout.trim()).unwrap();
        assert_eq!(got["a_ose"], expected["a_ose"], "{name}");
        if let Some(wi) = expected["wi"].as_f64() {
            assert!((got["wi"].as_f64().unwrap() - wi).abs() < 1e-12, "{name}");
        }
        let table = ok(&["eval", "--gt", path(&gt), "--det", path(&det), "--schedule", path(&schedule), "--task", "1"]);
        assert!(table.contains("A-OSE     2"), "{table}");
    }
}

#[test]
fn exit_codes_follow_the_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let bad_config = dir.path().join("bad.toml");
    fs::write(&bad_config, "[optim]\nepochs = -1\n").unwrap();
    let r = semtopo(&["run", "--config", path(&bad_config), "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(2), "{}", stderr_of(&r));

    let unknown_key = dir.path().join("typo.toml");
    fs::write(&unknown_key, "[loss]\nw_sa = 1.0\n").unwrap();
    assert_eq!(semtopo(&["run", "--config", path(&unknown_key), "--out", path(&out)]).status.code(), Some(2));

    let r = semtopo(&["run", "--anchors", "/no/such/anchors.jsonl", "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(3), "{}", stderr_of(&r));

    let data = dir.path().join("data");
    ok(&["gen-data", "--out", path(&data)]);
    let eval = data.join("eval.jsonl");
    let text = fs::read_to_string(&eval).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[6] = "{\"image_id\": 3, \"class\": ";
    fs::write(&eval, lines.join("\n")).unwrap();
    let r = semtopo(&["run", "--data", path(&data), "--out", path(&out)]);
    assert_eq!(r.status.code(), Some(4));
    assert!(stderr_of(&r).contains("eval.jsonl:7"), "{}", stderr_of(&r));

    let schedule = manifest("fixtures/toy_schedule.toml");
    let gt = manifest("fixtures/eval/five_gt.jsonl");
    let det = dir.path().join("det.jsonl");
    fs::write(&det, "{\"image_id\": 1, \"class\": \"bird\", \"score\": 0.5, \"box\": [1, 1, 2, 2]}\n").unwrap();
    let r = semtopo(&["eval", "--gt", path(&gt), "--det", path(&det), "--schedule", path(&schedule), "--task", "1"]);
    assert_eq!(r.status.code(), Some(4));
    assert!(stderr_of(&r).contains("det.jsonl:1"), "{}", stderr_of(&r));
}

#[test]
fn exported_topology_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("anchors.jsonl");
    ok(&["export-topology", "--task", "2", "--out", path(&file)]);
    let topology = load_anchors(&file, true).unwrap();
    assert_eq!(topology.num_classes(), 4);
    assert_eq!(topology.dim(), 32);
    assert_eq!(topology.name_of(semtopo::topology::Label::Class(2)), Some("bird"));

    let from_fixture = dir.path().join("clip.jsonl");
    ok(&["export-topology", "--anchors", path(&manifest("fixtures/anchors_512.jsonl")), "--out", path(&from_fixture)]);
    assert_eq!(load_anchors(&from_fixture, true).unwrap().dim(), 512);
}

#[test]
fn anchor_fixtures_load_with_unit_norms() {
    for dim in [512, 768] {
        let topology = load_anchors(&manifest(&format!("fixtures/anchors_{dim}.jsonl")), true).unwrap();
        assert_eq!(topology.dim(), dim);
        assert_eq!(topology.num_classes(), 20);
        for anchor in topology.iter() {
            assert_eq!(anchor.vector().len(), dim);
            assert!((anchor.norm() - 1.0).abs() < 1e-9);
        }
    }
}
