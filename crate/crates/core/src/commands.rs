//! Command implementations behind the `gaussianssc` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::ablation::{ablate, AblationReport};
use crate::anchoring::Stage1Model;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gradsuite::{default_suite, run_suite, GradEntry};
use crate::gssc::GsscFile;
use crate::metrics::MetricRecord;
use crate::tensor::ParamStore;
use crate::train::{
    build_suite, checkpoint_config, evaluate_stage1, evaluate_stage2, load_checkpoint, new_stage1, new_stage2,
    predict_occupancy, predict_semantics, save_checkpoint, train_stage1, train_stage2, Gate, Scene,
};
use crate::triplane::TriplaneLayout;

/// Flag overrides applied on top of a configuration file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub stage: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.stage {
            cfg.stage = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.to_string_lossy().into_owned();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg.validate()
    }
}

fn write_line(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs the gradient suite, one JSON line per case; returns the failures.
pub fn cmd_gradcheck(cfg: &RunConfig, out: &mut dyn Write) -> Result<Vec<GradEntry>> {
    let cases = default_suite(cfg.seed)?;
    let mut io = Ok(());
    let entries = run_suite(&cases, |e| {
        if io.is_ok() {
            io = write_line(out, &e.to_json_line());
        }
    });
    io?;
    Ok(entries.into_iter().filter(|e| !e.pass).collect())
}

/// Directory holding the checkpoint, logs and predictions of one stage.
pub fn stage_dir(cfg: &RunConfig, stage: usize) -> PathBuf {
    Path::new(&cfg.out_dir).join(format!("stage{stage}"))
}

fn labels_file(cfg: &RunConfig, labels: Vec<u8>) -> Result<GsscFile> {
    GsscFile::labels(&cfg.grid_dims, labels)
}

/// A Stage-1 model restored from a checkpoint directory.
pub struct Stage1Checkpoint {
    pub config: RunConfig,
    pub store: ParamStore,
    pub model: Stage1Model,
}

pub fn load_stage1(dir: &Path) -> Result<Stage1Checkpoint> {
    let config = checkpoint_config(dir)?;
    let (mut store, model) = new_stage1(&config, config.seed)?;
    load_checkpoint(dir, &mut store)?;
    Ok(Stage1Checkpoint { config, store, model })
}

/// The Stage-1 checkpoint named by `run.stage1_checkpoint`, unless Stage 2 is
/// gated by ground truth.
fn stage2_gate_source(cfg: &RunConfig) -> Result<Option<Stage1Checkpoint>> {
    if cfg.gt_occupancy {
        return Ok(None);
    }
    if cfg.stage1_checkpoint.is_empty() {
        return Err(Error::config(
            "stage 2 needs `run.gt_occupancy = true` or a `run.stage1_checkpoint` directory",
        ));
    }
    let dir = Path::new(&cfg.stage1_checkpoint);
    if !dir.join("config.txt").is_file() {
        return Err(Error::config(format!(
            "key `run.stage1_checkpoint`: no checkpoint at {}",
            dir.display()
        )));
    }
    load_stage1(dir).map(Some)
}

fn gate_of(source: &Option<Stage1Checkpoint>) -> Gate<'_> {
    match source {
        None => Gate::GroundTruth,
        Some(c) => Gate::Stage1 {
            store: &c.store,
            model: &c.model,
        },
    }
}

fn check_grid(cfg: &RunConfig, other: &RunConfig) -> Result<()> {
    if cfg.grid_dims != other.grid_dims {
        return Err(Error::config(format!(
            "checkpoint grid {:?} differs from configured grid {:?}",
            other.grid_dims, cfg.grid_dims
        )));
    }
    Ok(())
}

/// Summary of a training run.
pub struct TrainSummary {
    pub dir: PathBuf,
    pub records: Vec<MetricRecord>,
    pub losses: Vec<f64>,
}

/// Trains the configured stage; writes parameters, `config.txt`,
/// `metrics.jsonl`, `losses.csv` and held-out predictions to the stage
/// directory, and echoes every metric record to `out`.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = stage_dir(cfg, cfg.stage);
    let (train, heldout) = build_suite(cfg, cfg.seed, &cfg.suite())?;
    let mut io = Ok(());
    let mut log = |r: &MetricRecord| {
        if io.is_ok() {
            io = write_line(out, &r.to_json_line());
        }
    };
    let layout = TriplaneLayout::new(cfg.grid_dims);
    let (store, records, losses, predictions) = match cfg.stage {
        1 => {
            let run = train_stage1(cfg, &train, &heldout, &mut log)?;
            let preds = heldout
                .iter()
                .map(|s| {
                    let occ = predict_occupancy(&run.store, &run.model, &layout, s)?;
                    labels_file(cfg, occ.iter().map(|&o| o as u8).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            (run.store, run.records, run.losses, preds)
        }
        2 => {
            let source = stage2_gate_source(cfg)?;
            if let Some(c) = &source {
                check_grid(cfg, &c.config)?;
            }
            let gate = gate_of(&source);
            let run = train_stage2(cfg, &train, &heldout, &gate, &mut log)?;
            let masks = gate.masks(&layout, &heldout)?;
            let preds = heldout
                .iter()
                .zip(&masks)
                .map(|(s, m)| labels_file(cfg, predict_semantics(&run.store, &run.model, &layout, s, m)?))
                .collect::<Result<Vec<_>>>()?;
            (run.store, run.records, run.losses, preds)
        }
        s => return Err(Error::config(format!("key `run.stage`: {s} is not 1 or 2"))),
    };
    io?;
    save_checkpoint(&dir, &store, cfg)?;
    let metrics: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
    write_file(&dir.join("metrics.jsonl"), &metrics)?;
    let loss_csv: String = std::iter::once("step,loss\n".to_string())
        .chain(losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)))
        .collect();
    write_file(&dir.join("losses.csv"), &loss_csv)?;
    let pred_dir = dir.join("predictions");
    create_dir(&pred_dir)?;
    for (i, f) in predictions.iter().enumerate() {
        f.write(&pred_dir.join(format!("heldout{i}.gssc")))?;
    }
    Ok(TrainSummary { dir, records, losses })
}

fn require_checkpoint(dir: &Path) -> Result<RunConfig> {
    let cfg_path = dir.join("config.txt");
    if !cfg_path.is_file() {
        return Err(Error::io(
            &cfg_path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found"),
        ));
    }
    checkpoint_config(dir)
}

fn eval_scenes(
    ck: &RunConfig,
    cfg: &RunConfig,
    dir: &Path,
    sets: &[(&str, &[Scene])],
    step: usize,
) -> Result<Vec<MetricRecord>> {
    let layout = TriplaneLayout::new(ck.grid_dims);
    match ck.stage {
        1 => {
            let (mut store, model) = new_stage1(ck, ck.seed)?;
            load_checkpoint(dir, &mut store)?;
            sets.iter()
                .map(|(name, scenes)| {
                    let c = evaluate_stage1(&store, &model, &layout, scenes)?;
                    Ok(MetricRecord::new(step, name, &c, None))
                })
                .collect()
        }
        2 => {
            let (mut store, model) = new_stage2(ck, ck.seed)?;
            load_checkpoint(dir, &mut store)?;
            let source = stage2_gate_source(cfg)?;
            let gate = gate_of(&source);
            sets.iter()
                .map(|(name, scenes)| {
                    let masks = gate.masks(&layout, scenes)?;
                    let (o, s) = evaluate_stage2(&store, &model, &layout, scenes, &masks)?;
                    Ok(MetricRecord::new(step, name, &o, Some(&s)))
                })
                .collect()
        }
        s => Err(Error::config(format!("checkpoint stage {s} is not 1 or 2"))),
    }
}

/// Evaluates a checkpoint on the training and held-out scenes of the
/// configured suite; emits one JSON line per split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &mut dyn Write) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let ck = require_checkpoint(checkpoint)?;
    check_grid(cfg, &ck)?;
    let (train, heldout) = build_suite(cfg, cfg.seed, &cfg.suite())?;
    let records = eval_scenes(&ck, cfg, checkpoint, &[("train", &train), ("heldout", &heldout)], ck.steps)?;
    for r in &records {
        write_line(out, &r.to_json_line())?;
    }
    Ok(records)
}

/// Runs the ablation matrix; writes `ablation.csv` and echoes it to `out`.
pub fn cmd_ablate(cfg: &RunConfig, out: &mut dyn Write) -> Result<AblationReport> {
    let report = ablate(cfg)?;
    let csv = report.to_csv();
    let dir = PathBuf::from(&cfg.out_dir);
    create_dir(&dir)?;
    write_file(&dir.join("ablation.csv"), &csv)?;
    write!(out, "{csv}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(report)
}

/// Writes predicted occupancy, predicted labels and ground truth of the
/// first held-out scene as label files; returns their paths.
pub fn cmd_export(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let ck = require_checkpoint(checkpoint)?;
    check_grid(cfg, &ck)?;
    let (_, heldout) = build_suite(cfg, cfg.seed, &cfg.suite())?;
    let scene = heldout
        .first()
        .ok_or_else(|| Error::config("key `suite.heldout_scenes`: export needs a held-out scene"))?;
    let layout = TriplaneLayout::new(ck.grid_dims);
    let vol = &scene.sample.volume;
    let (occupancy, labels) = match ck.stage {
        1 => {
            let (mut store, model) = new_stage1(&ck, ck.seed)?;
            load_checkpoint(checkpoint, &mut store)?;
            let occ = predict_occupancy(&store, &model, &layout, scene)?;
            let labels = occ.iter().map(|&o| o as u8).collect::<Vec<u8>>();
            (occ, labels)
        }
        2 => {
            let (mut store, model) = new_stage2(&ck, ck.seed)?;
            load_checkpoint(checkpoint, &mut store)?;
            let source = stage2_gate_source(cfg)?;
            let mask = gate_of(&source).masks(&layout, std::slice::from_ref(scene))?.remove(0);
            let labels = predict_semantics(&store, &model, &layout, scene, &mask)?;
            (labels.iter().map(|&l| l != 0).collect(), labels)
        }
        s => return Err(Error::config(format!("checkpoint stage {s} is not 1 or 2"))),
    };
    let dir = PathBuf::from(&cfg.out_dir).join("export");
    create_dir(&dir)?;
    let files = [
        ("pred_occupancy.gssc", occupancy.iter().map(|&o| o as u8).collect::<Vec<u8>>()),
        ("pred_labels.gssc", labels),
        ("gt_labels.gssc", vol.labels.clone()),
    ];
    let mut paths = Vec::new();
    for (name, data) in files {
        let path = dir.join(name);
        labels_file(cfg, data)?.write(&path)?;
        paths.push(path);
    }
    Ok(paths)
}
