use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gaussianssc::gradsuite::{check_case, run_suite, GradCase, OP_TOLERANCE};
use gaussianssc::gssc::{GsscFile, Payload};
use gaussianssc::tensor::{Kernel, NdBuffer};
use gaussianssc::{Error, Result};
use serde_json::Value;

const TINY: &str = "grid.dims = 16, 16, 4\ngrid.origin = 0, -1.6, 0\ncamera.position = -3, 0, 2.5\n\
model.width = 4\nmodel.merge_hidden = 4\nmodel.embed_width = 2\nmodel.head_width = 2\nmodel.points = 1\n\
suite.boxes = 1, 2\nsuite.box_height = 1, 2\nsuite.box_footprint = 2, 3\nsuite.pillars = 0, 1\n\
suite.train_scenes = 2\nsuite.heldout_scenes = 1\noptim.steps = 6\noptim.eval_every = 2\n";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gaussianssc"))
}

fn run(args: &[&str], config: Option<&Path>, out: &Path) -> Output {
    let mut cmd = bin();
    cmd.args(args).arg("--out").arg(out);
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    fs::write(&path, format!("{TINY}{extra}")).unwrap();
    path
}

fn json_lines(bytes: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(bytes)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not JSON: {l}: {e}")))
        .collect()
}

#[test]
fn gradcheck_passes_and_reports_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck"], None, dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = json_lines(&out.stdout);
    assert!(lines.len() > 40);
    for l in &lines {
        assert!(l["op"].is_string());
        assert!(l["max_rel_error"].as_f64().unwrap() <= l["tolerance"].as_f64().unwrap());
        assert_eq!(l["pass"], Value::Bool(true));
    }
    let ops: Vec<&str> = lines.iter().map(|l| l["op"].as_str().unwrap()).collect();
    assert!(ops.contains(&"stage1_pipeline") && ops.contains(&"stage2_pipeline"));
}

/// `2x` forward with a backward that returns `3g`.
struct CorruptedDouble;

impl Kernel for CorruptedDouble {
    fn name(&self) -> &str {
        "corrupted_double"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        NdBuffer::new(inputs[0].shape(), inputs[0].data().iter().map(|x| 2.0 * x).collect())
    }

    fn backward(&self, _: &[&NdBuffer], _: &NdBuffer, g: &NdBuffer, _: &[bool]) -> Result<Vec<Option<NdBuffer>>> {
        Ok(vec![Some(NdBuffer::new(g.shape(), g.data().iter().map(|x| 3.0 * x).collect())?)])
    }
}

#[test]
fn corrupted_backward_is_a_named_failure() {
    let case = GradCase {
        name: "corrupted_double".into(),
        tolerance: OP_TOLERANCE,
        kernel: Box::new(CorruptedDouble),
        inputs: vec![NdBuffer::new(&[2, 3], vec![0.1, -0.4, 0.7, 1.3, -2.0, 0.5]).unwrap()],
    };
    let entry = check_case(&case);
    assert!(!entry.pass);
    assert_eq!(entry.op, "corrupted_double");
    assert!(entry.max_rel_error > 0.1);
    let mut seen = Vec::new();
    let report = run_suite(&[case], |e| seen.push(e.to_json_line()));
    let line: Value = serde_json::from_str(&seen[0]).unwrap();
    assert_eq!(line["op"], "corrupted_double");
    assert_eq!(line["pass"], false);
    let err = Error::GradCheck {
        op: report[0].op.clone(),
        error: report[0].max_rel_error,
        tolerance: report[0].tolerance,
    };
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("corrupted_double"));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let bad = d.join("bad.cfg");
    fs::write(&bad, "model.widht = 4\n").unwrap();
    let out = run(&["train"], Some(&bad), d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.widht"));

    let out = run(&["train"], Some(&d.join("missing.cfg")), d);
    assert_eq!(out.status.code(), Some(3));

    let cfg = write_config(d, "");
    let out = run(&["eval", "--checkpoint", d.join("nowhere").to_str().unwrap()], Some(&cfg), d);
    assert_eq!(out.status.code(), Some(3));

    let out = run(&["eval"], Some(&cfg), d);
    assert_eq!(out.status.code(), Some(2));

    let stage2 = write_config(d, "run.gt_occupancy = false\n");
    let out = run(&["train", "--stage", "2"], Some(&stage2), d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "");
    let out = run(&["train", "--stage", "1"], Some(&cfg), d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let records = json_lines(&out.stdout);
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r["split"] == "heldout"));
    let stage1 = d.join("stage1");
    assert_eq!(fs::read(stage1.join("metrics.jsonl")).unwrap(), out.stdout);

    let pred = GsscFile::read(&stage1.join("predictions/heldout0.gssc")).unwrap();
    assert_eq!(pred.extents, vec![16, 16, 4]);
    assert_eq!(pred.payload.dtype_code(), 1);

    let ck = stage1.to_str().unwrap();
    let out = run(&["eval", "--checkpoint", ck], Some(&cfg), d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let evals = json_lines(&out.stdout);
    assert_eq!(evals.len(), 2);
    assert_eq!(evals[1]["split"], "heldout");
    assert_eq!(evals[1]["iou"], records[2]["iou"]);

    let out = run(&["export", "--checkpoint", ck], Some(&cfg), d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let paths: Vec<PathBuf> = String::from_utf8_lossy(&out.stdout).lines().map(PathBuf::from).collect();
    assert_eq!(paths.len(), 3);
    for p in &paths {
        let bytes = fs::read(p).unwrap();
        let f = GsscFile::from_bytes(&bytes, p).unwrap();
        assert_eq!(f.extents, vec![16, 16, 4]);
        assert_eq!(f.payload.dtype_code(), 1);
        assert_eq!(f.to_bytes(), bytes);
        assert!(matches!(f.payload, Payload::Labels(_)));
    }

    let stage2 = write_config(d, &format!("run.gt_occupancy = false\nrun.stage1_checkpoint = {ck}\n"));
    let out = run(&["train", "--stage", "2"], Some(&stage2), d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(json_lines(&out.stdout).iter().all(|r| r["miou"].is_number()));
}

#[test]
fn own_training_scene_scores_at_least_heldout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "suite.train_scenes = 1\noptim.steps = 300\noptim.eval_every = 0\n");
    for seed in ["0", "1", "2"] {
        assert_eq!(run(&["train", "--seed", seed], Some(&cfg), d).status.code(), Some(0));
        let ck = d.join("stage1");
        let out = run(&["eval", "--seed", seed, "--checkpoint", ck.to_str().unwrap()], Some(&cfg), d);
        let evals = json_lines(&out.stdout);
        assert_eq!((evals[0]["split"].as_str(), evals[1]["split"].as_str()), (Some("train"), Some("heldout")));
        assert!(evals[0]["iou"].as_f64().unwrap() >= evals[1]["iou"].as_f64().unwrap(), "seed {seed}: {evals:?}");
    }
}

#[test]
fn zero_learning_rate_keeps_the_loss_constant() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "optim.lr = 0\nloss.negative_sampling = false\n");
    let out = run(&["train"], Some(&cfg), d);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("stage1/losses.csv")).unwrap();
    let losses: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(losses.len(), 6);
    // two training scenes alternate, so the loss repeats with period two
    assert!(losses.iter().enumerate().all(|(i, l)| *l == losses[i % 2]));
}

fn logs(d: &Path, threads: &str) -> (Vec<u8>, Vec<u8>) {
    fs::create_dir_all(d).unwrap();
    let cfg = write_config(d, "");
    let out = d.join(format!("t{threads}"));
    let train = run(&["train", "--threads", threads, "--seed", "3"], Some(&cfg), &out);
    assert_eq!(train.status.code(), Some(0));
    let eval = run(
        &["eval", "--threads", threads, "--seed", "3", "--checkpoint", out.join("stage1").to_str().unwrap()],
        Some(&cfg),
        &out,
    );
    assert_eq!(eval.status.code(), Some(0));
    (fs::read(out.join("stage1/metrics.jsonl")).unwrap(), eval.stdout)
}

#[test]
fn logs_are_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let one = logs(dir.path(), "1");
    let again = logs(&dir.path().join("again"), "1");
    let four = logs(dir.path(), "4");
    assert_eq!(one, again);
    assert_eq!(one, four);
}
