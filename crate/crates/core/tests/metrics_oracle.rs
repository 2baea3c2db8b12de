//! Metrics against brute-force oracles and hand-computed golden files.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use semtopo::experiment::cmd_eval;
use semtopo::metrics::{
    average_precision, compute_aose, compute_map, compute_wi, evaluate_records, ApInterpolation, DetectionRecord,
    GroundTruthRecord, MetricOptions, MetricsError,
};
use semtopo::protocol::TaskSchedule;
use semtopo::topology::Label;

use common::pr::*;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

#[test]
fn average_precision_matches_exhaustive_oracle() {
    let mut compared = 0;
    for seed in 0..200 {
        let (dets, gts) = random_instance(seed);
        for c in 0..3 {
            let class = Label::Class(c);
            let ap = average_precision(&dets, &gts, class, 0.5, ApInterpolation::AllPoint);
            let eleven = average_precision(&dets, &gts, class, 0.5, ApInterpolation::ElevenPoint);
            if gts.iter().any(|g| g.label == class) {
                let (ap, eleven) = (ap.unwrap(), eleven.unwrap());
                assert!((ap - oracle_ap(&dets, &gts, class)).abs() < 1e-9, "seed {seed} class {c}");
                assert!((eleven - oracle_eleven(&dets, &gts, class)).abs() < 1e-9, "seed {seed} class {c}");
                assert!((0.0..=1.0).contains(&ap));
                compared += 1;
            } else {
                assert_eq!(ap, None);
            }
        }
    }
    assert!(compared >= 200);
}

#[test]
fn higher_scored_false_positive_halves_ap() {
    let g = [gt(0, Label::Class(0), bx(5.0, 5.0, 2.0, 2.0))];
    let d = [
        det(0, Label::Class(0), 0.9, bx(20.0, 20.0, 2.0, 2.0)),
        det(0, Label::Class(0), 0.5, bx(5.0, 5.0, 2.0, 2.0)),
    ];
    let ap = average_precision(&d, &g, Label::Class(0), 0.5, ApInterpolation::AllPoint).unwrap();
    assert!((ap - 0.5).abs() < 1e-12);
}

#[test]
fn map_errors_are_explicit() {
    let g = [gt(0, Label::Class(0), bx(5.0, 5.0, 2.0, 2.0))];
    assert_eq!(compute_map(&[], &g, &[], 0.5, ApInterpolation::AllPoint), Err(MetricsError::EmptyClassSet));
    assert_eq!(
        compute_map(&[], &g, &[Label::Class(3)], 0.5, ApInterpolation::AllPoint),
        Err(MetricsError::NoGroundTruth)
    );
    assert_eq!(compute_map(&[], &g, &[Label::Class(0)], 0.5, ApInterpolation::AllPoint), Ok(0.0));
}

#[test]
fn aose_counts_misclassified_unknowns() {
    // Ten instances, three of them unknown; two unknowns are claimed by
    // known-class detections, the third is detected as unknown.
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for i in 0..10u64 {
        let b = bx(10.0 * i as f64, 0.0, 4.0, 4.0);
        let label = if i < 3 { Label::Unknown } else { Label::Class((i % 2) as usize) };
        gts.push(gt(0, label, b));
        let predicted = match i {
            0 | 1 => Label::Class(0),
            2 => Label::Unknown,
            _ => label,
        };
        dets.push(det(0, predicted, 0.8, b));
    }
    let known: BTreeSet<usize> = [0, 1].into();
    assert_eq!(compute_aose(&dets, &gts, &known, 0.5, 0.05), 2);
}

#[test]
fn wi_matches_precision_ratio() {
    // Ten known gts; at recall 0.9 there are nine true positives, one plain
    // false positive and two open-set errors: 0.9 / 0.75 - 1.
    let mut gts = Vec::new();
    let mut dets = Vec::new();
    for i in 0..10u64 {
        let b = bx(10.0 * i as f64, 0.0, 4.0, 4.0);
        gts.push(gt(0, Label::Class(0), b));
        if i < 9 {
            dets.push(det(0, Label::Class(0), 0.9 - 0.01 * i as f64, b));
        }
    }
    for j in 0..2 {
        let b = bx(10.0 * j as f64, 50.0, 4.0, 4.0);
        gts.push(gt(0, Label::Unknown, b));
        dets.push(det(0, Label::Class(0), 0.85, b));
    }
    dets.push(det(0, Label::Class(0), 0.84, bx(500.0, 500.0, 4.0, 4.0)));
    let known: BTreeSet<usize> = [0].into();
    let wi = compute_wi(&dets, &gts, &known, 0.9, 0.5).unwrap();
    assert!((wi - (0.9 / 0.75 - 1.0)).abs() < 1e-12, "{wi}");
}

fn read_jsonl(path: &Path, schedule: &TaskSchedule, t: usize) -> (Vec<DetectionRecord>, Vec<GroundTruthRecord>) {
    let known = schedule.known_at(t);
    let label = |v: &Value| {
        let name = v["class"].as_str().unwrap();
        match schedule.class_id(name) {
            Some(c) if known.contains(&c) => Label::Class(c),
            _ => Label::Unknown,
        }
    };
    let boxed = |v: &Value| {
        let a: Vec<f64> = serde_json::from_value(v["box"].clone()).unwrap();
        bx(a[0], a[1], a[2], a[3])
    };
    let lines = |p: &Path| -> Vec<Value> {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    };
    let stem = path.to_str().unwrap();
    let dets = lines(Path::new(&format!("{stem}_det.jsonl")))
        .iter()
        .map(|v| det(v["image_id"].as_u64().unwrap(), label(v), v["score"].as_f64().unwrap(), boxed(v)))
        .collect();
    let gts = lines(Path::new(&format!("{stem}_gt.jsonl")))
        .iter()
        .map(|v| gt(v["image_id"].as_u64().unwrap(), label(v), boxed(v)))
        .collect();
    (dets, gts)
}

fn check_golden(name: &str) {
    let schedule = TaskSchedule::load(&fixture("toy_schedule.toml")).unwrap();
    let expected: Value = serde_json::from_str(&fs::read_to_string(fixture(&format!("eval/{name}_expected.json"))).unwrap()).unwrap();
    let t = expected["task"].as_u64().unwrap() as usize;
    let options = MetricOptions::default();

    let (dets, gts) = read_jsonl(&fixture(&format!("eval/{name}")), &schedule, t);
    let prev: Vec<usize> = schedule.previously_known(t);
    let curr: Vec<usize> = schedule.task(t).to_vec();
    let via_library = evaluate_records(&dets, &gts, &prev, &curr, &options);
    let via_command = cmd_eval(
        &fixture(&format!("eval/{name}_gt.jsonl")),
        &fixture(&format!("eval/{name}_det.jsonl")),
        &schedule,
        t,
        &options,
    )
    .unwrap();
    assert_eq!(via_library, via_command);

    let got = serde_json::to_value(via_command).unwrap();
    for (key, want) in expected.as_object().unwrap() {
        if key == "task" {
            continue;
        }
        match want.as_f64() {
            Some(w) => assert!((got[key].as_f64().unwrap() - w).abs() < 1e-12, "{name}.{key}"),
            None => assert_eq!(&got[key], want, "{name}.{key}"),
        }
    }
}

#[test]
fn five_record_golden_file() {
    check_golden("five");
}

#[test]
fn wilderness_impact_golden_file() {
    check_golden("wi");
}

#[test]
fn open_set_error_golden_file() {
    check_golden("aose");
}

#[test]
fn empty_detection_file() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("det.jsonl");
    fs::write(&empty, "").unwrap();
    let schedule = TaskSchedule::load(&fixture("toy_schedule.toml")).unwrap();
    let m = cmd_eval(&fixture("eval/five_gt.jsonl"), &empty, &schedule, 1, &MetricOptions::default()).unwrap();
    assert_eq!(m.a_ose, 0);
    assert_eq!(m.map_curr, Some(0.0));
    assert_eq!(m.map_both, Some(0.0));
    assert_eq!(m.wi, None);
}
