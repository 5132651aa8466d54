//! Anchoring, negative-sampling and blend ablations with CSV output.

use crate::anchoring::Anchoring;
use crate::config::RunConfig;
use crate::error::Result;
use crate::metrics::MetricRecord;
use crate::train::{build_suite, train_stage1, train_stage2, Gate};

pub const CSV_HEADER: &str = "name,recall,precision,iou,miou";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub recall: f64,
    pub precision: f64,
    pub iou: f64,
    pub miou: f64,
}

impl AblationRow {
    fn from_record(name: String, r: &MetricRecord) -> Self {
        Self {
            name,
            recall: r.recall,
            precision: r.precision,
            iou: r.iou,
            miou: r.miou,
        }
    }

    fn mean(name: String, rows: &[AblationRow]) -> Self {
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&AblationRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            name,
            recall: avg(|r| r.recall),
            precision: avg(|r| r.precision),
            iou: avg(|r| r.iou),
            miou: avg(|r| r.miou),
        }
    }

    pub fn to_csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.name, self.recall, self.precision, self.iou, self.miou)
    }
}

/// Held-out metrics of one Stage-1 ablation cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Cell {
    pub anchoring: Anchoring,
    pub negative_sampling: bool,
    pub seed: u64,
    pub row: AblationRow,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub stage1: Vec<Stage1Cell>,
    pub stage1_means: Vec<AblationRow>,
    pub stage2: Vec<AblationRow>,
}

impl AblationReport {
    pub fn rows(&self) -> impl Iterator<Item = &AblationRow> {
        self.stage1.iter().map(|c| &c.row).chain(&self.stage1_means).chain(&self.stage2)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.rows() {
            out.push_str(&r.to_csv_line());
            out.push('\n');
        }
        out
    }

    /// Per-seed held-out IoU margin of Gaussian anchoring over point sampling,
    /// at the given negative-sampling setting.
    pub fn anchoring_margins(&self, negative_sampling: bool) -> Vec<(u64, f64)> {
        let pick = |a: Anchoring, seed: u64| {
            self.stage1
                .iter()
                .find(|c| c.anchoring == a && c.seed == seed && c.negative_sampling == negative_sampling)
                .map(|c| c.row.iou)
        };
        let mut seeds: Vec<u64> = self.stage1.iter().map(|c| c.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds
            .into_iter()
            .filter_map(|s| Some((s, pick(Anchoring::Gaussian, s)? - pick(Anchoring::Point, s)?)))
            .collect()
    }
}

fn anchoring_name(a: Anchoring) -> &'static str {
    match a {
        Anchoring::Gaussian => "gaussian",
        Anchoring::Point => "point",
    }
}

fn stem(anchoring: Anchoring, negative_sampling: bool) -> String {
    let neg = if negative_sampling { "on" } else { "off" };
    format!("s1-{}-neg{neg}", anchoring_name(anchoring))
}

fn final_record(records: &[MetricRecord]) -> MetricRecord {
    records.last().cloned().expect("ablation runs evaluate at their last step")
}

/// Stage-1 runs of one matrix row over the ablation seeds on the jittered
/// suite.
pub fn stage1_cells(base: &RunConfig, anchoring: Anchoring, negative_sampling: bool) -> Result<Vec<Stage1Cell>> {
    let stem = stem(anchoring, negative_sampling);
    base.ablate_seeds
        .iter()
        .map(|&seed| {
            let cfg = RunConfig {
                anchoring,
                negative_sampling,
                seed,
                jitter: base.ablate_jitter,
                steps: base.ablate_steps,
                eval_every: 0,
                ..base.clone()
            };
            let (train, heldout) = build_suite(&cfg, seed, &cfg.suite())?;
            let run = train_stage1(&cfg, &train, &heldout, |_| {})?;
            Ok(Stage1Cell {
                anchoring,
                negative_sampling,
                seed,
                row: AblationRow::from_record(format!("{stem}-seed{seed}"), &final_record(&run.records)),
            })
        })
        .collect()
}

/// Stage-1 matrix {point, gaussian} x {negative sampling off, on} with a
/// mean row per configuration.
pub fn ablate_stage1(base: &RunConfig) -> Result<(Vec<Stage1Cell>, Vec<AblationRow>)> {
    let mut cells = Vec::new();
    let mut means = Vec::new();
    for anchoring in [Anchoring::Point, Anchoring::Gaussian] {
        for negative_sampling in [false, true] {
            let row = stage1_cells(base, anchoring, negative_sampling)?;
            let rows: Vec<AblationRow> = row.iter().map(|c| c.row.clone()).collect();
            means.push(AblationRow::mean(format!("{}-mean", stem(anchoring, negative_sampling)), &rows));
            cells.extend(row);
        }
    }
    Ok((cells, means))
}

/// Stage-2 runs over the blend values with ground-truth gating.
pub fn ablate_stage2(base: &RunConfig) -> Result<Vec<AblationRow>> {
    let (train, heldout) = build_suite(base, base.seed, &base.suite())?;
    base.ablate_betas
        .iter()
        .map(|&beta| {
            let cfg = RunConfig {
                beta,
                steps: base.ablate_steps,
                eval_every: 0,
                ..base.clone()
            };
            let run = train_stage2(&cfg, &train, &heldout, &Gate::GroundTruth, |_| {})?;
            Ok(AblationRow::from_record(format!("s2-beta{beta}"), &final_record(&run.records)))
        })
        .collect()
}

pub fn ablate(base: &RunConfig) -> Result<AblationReport> {
    base.validate()?;
    let (stage1, stage1_means) = ablate_stage1(base)?;
    let stage2 = ablate_stage2(base)?;
    Ok(AblationReport {
        stage1,
        stage1_means,
        stage2,
    })
}
