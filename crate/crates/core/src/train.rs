//! Training and evaluation loops for both stages on synthetic suites.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use crate::anchoring::{stage1_forward, ImageContext, Stage1Model};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gssc::GsscFile;
use crate::losses::{negative_sample, stage1_loss, stage2_loss};
use crate::metrics::{confusion, occupancy_confusion, ConfusionCounts, MetricRecord};
use crate::nn::ModelRng;
use crate::refinement::{predict_labels, stage2_forward, Stage2Model};
use crate::synth::{generate_suite, query_batch, SuiteParams, SyntheticSample};
use crate::tensor::{adam_step, NdBuffer, OptimizerState, ParamStore, Tape};
use crate::triplane::TriplaneLayout;
use rand::SeedableRng;

/// Fused-map stride shared by all stages.
pub const FUSED_STRIDE: f64 = 4.0;

/// A synthetic sample with its per-scene precomputation.
#[derive(Clone, Debug)]
pub struct Scene {
    pub sample: SyntheticSample,
    pub ctx: ImageContext,
    pub queries: Vec<[usize; 3]>,
    pub features: Option<NdBuffer>,
}

impl Scene {
    pub fn new(sample: SyntheticSample) -> Result<Self> {
        let ctx = ImageContext::new(
            &sample.levels,
            FUSED_STRIDE,
            &sample.intrinsics,
            &sample.pose,
            &sample.volume.grid,
        )?;
        let channels = sample.levels[0].0.cols();
        let (queries, features) = query_batch(&sample.queries, channels);
        Ok(Self {
            sample,
            ctx,
            queries,
            features,
        })
    }

    pub fn num_voxels(&self) -> usize {
        self.sample.volume.labels.len()
    }
}

/// Train and held-out scenes of the configured suite.
pub fn build_suite(cfg: &RunConfig, seed: u64, suite: &SuiteParams) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let (train, heldout) = generate_suite(cfg.grid()?, &cfg.camera()?, suite, seed, cfg.train_scenes, cfg.heldout_scenes)?;
    let wrap = |v: Vec<SyntheticSample>| v.into_iter().map(Scene::new).collect::<Result<Vec<_>>>();
    Ok((wrap(train)?, wrap(heldout)?))
}

fn gradients_in_order(tape: &Tape, loss: crate::tensor::Var, p: &crate::tensor::Bound, store: &ParamStore) -> Result<Vec<NdBuffer>> {
    let mut g = tape.backward(loss)?;
    Ok(p.vars()
        .iter()
        .zip(store.values())
        .map(|(&v, value)| g.take(v).unwrap_or_else(|| NdBuffer::zeros(value.shape())))
        .collect())
}

fn is_eval_step(cfg: &RunConfig, step: usize) -> bool {
    let done = step + 1;
    done == cfg.steps || (cfg.eval_every > 0 && done % cfg.eval_every == 0)
}

/// A trained Stage-1 model with its logs.
pub struct Stage1Run {
    pub store: ParamStore,
    pub model: Stage1Model,
    pub losses: Vec<f64>,
    pub records: Vec<MetricRecord>,
}

pub fn new_stage1(cfg: &RunConfig, seed: u64) -> Result<(ParamStore, Stage1Model)> {
    let mut store = ParamStore::new();
    let mut rng = ModelRng::seed_from_u64(seed);
    let model = Stage1Model::new(&mut store, cfg.stage1(), cfg.grid_dims, &mut rng)?;
    Ok((store, model))
}

/// Per-voxel occupancy decisions (`logit_1 > logit_0`) for one scene.
pub fn predict_occupancy(store: &ParamStore, model: &Stage1Model, layout: &TriplaneLayout, scene: &Scene) -> Result<Vec<bool>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let f = scene.features.clone().map(|f| tape.constant(f));
    let out = stage1_forward(&mut tape, &p, model, layout, &scene.ctx, &scene.queries, f)?;
    let z = tape.value(out.logits);
    Ok((0..z.rows()).map(|v| z.row(v)[1] > z.row(v)[0]).collect())
}

pub fn evaluate_stage1(store: &ParamStore, model: &Stage1Model, layout: &TriplaneLayout, scenes: &[Scene]) -> Result<ConfusionCounts> {
    let mut total: Option<ConfusionCounts> = None;
    for s in scenes {
        let pred = predict_occupancy(store, model, layout, s)?;
        let vol = &s.sample.volume;
        let c = occupancy_confusion(&pred, &vol.labels, &vol.valid_mask())?;
        match &mut total {
            Some(t) => t.merge(&c)?,
            None => total = Some(c),
        }
    }
    total.ok_or_else(|| Error::config("evaluation needs at least one scene"))
}

pub fn train_stage1(
    cfg: &RunConfig,
    train: &[Scene],
    heldout: &[Scene],
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<Stage1Run> {
    if train.is_empty() {
        return Err(Error::config("training needs at least one scene"));
    }
    let layout = TriplaneLayout::new(cfg.grid_dims);
    let (mut store, model) = new_stage1(cfg, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.adam(), store.values());
    let weights = cfg.stage1_weights();
    let labels: Vec<Vec<Option<bool>>> = train.iter().map(|s| s.sample.volume.occupancy_labels()).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut records = Vec::new();
    for step in 0..cfg.steps {
        let k = step % train.len();
        let scene = &train[k];
        let target = if cfg.negative_sampling {
            let keep = negative_sample(&labels[k], weights.neg_ratio, cfg.seed ^ (step as u64).wrapping_mul(0x9e37_79b9))?;
            labels[k].iter().zip(keep).map(|(l, m)| if m { *l } else { None }).collect()
        } else {
            labels[k].clone()
        };
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = scene.features.clone().map(|f| tape.constant(f));
        let out = stage1_forward(&mut tape, &p, &model, &layout, &scene.ctx, &scene.queries, f)?;
        let gaussians = out.gaussians.map(|(delta, sigma, _)| (delta, sigma));
        let loss = stage1_loss(&mut tape, out.logits, Arc::new(target), gaussians, &weights)?;
        losses.push(tape.value(loss).item());
        let grads = gradients_in_order(&tape, loss, &p, &store)?;
        adam_step(store.values_mut(), &grads, &mut opt)?;
        if is_eval_step(cfg, step) && !heldout.is_empty() {
            let c = evaluate_stage1(&store, &model, &layout, heldout)?;
            let r = MetricRecord::new(step + 1, "heldout", &c, None);
            on_record(&r);
            records.push(r);
        }
    }
    Ok(Stage1Run {
        store,
        model,
        losses,
        records,
    })
}

/// A trained Stage-2 model with its logs.
pub struct Stage2Run {
    pub store: ParamStore,
    pub model: Stage2Model,
    pub losses: Vec<f64>,
    pub records: Vec<MetricRecord>,
}

pub fn new_stage2(cfg: &RunConfig, seed: u64) -> Result<(ParamStore, Stage2Model)> {
    let mut store = ParamStore::new();
    let mut rng = ModelRng::seed_from_u64(seed ^ 0x2222);
    let model = Stage2Model::new(&mut store, cfg.stage2(), cfg.grid_dims, &mut rng)?;
    Ok((store, model))
}

/// Gating masks: ground-truth occupancy or a Stage-1 model's predictions.
pub enum Gate<'a> {
    GroundTruth,
    Stage1 {
        store: &'a ParamStore,
        model: &'a Stage1Model,
    },
}

impl Gate<'_> {
    pub fn masks(&self, layout: &TriplaneLayout, scenes: &[Scene]) -> Result<Vec<Vec<bool>>> {
        scenes
            .iter()
            .map(|s| match self {
                Gate::GroundTruth => Ok(s.sample.volume.occupancy.clone()),
                Gate::Stage1 { store, model } => predict_occupancy(store, model, layout, s),
            })
            .collect()
    }
}

pub fn predict_semantics(store: &ParamStore, model: &Stage2Model, layout: &TriplaneLayout, scene: &Scene, mask: &[bool]) -> Result<Vec<u8>> {
    let mut tape = Tape::new();
    let p = store.bind_frozen(&mut tape);
    let out = stage2_forward(&mut tape, &p, model, layout, &scene.ctx, mask)?;
    Ok(predict_labels(tape.value(out.logits), mask))
}

/// Completion and semantic confusion over `scenes`.
pub fn evaluate_stage2(
    store: &ParamStore,
    model: &Stage2Model,
    layout: &TriplaneLayout,
    scenes: &[Scene],
    masks: &[Vec<bool>],
) -> Result<(ConfusionCounts, ConfusionCounts)> {
    let mut occ: Option<ConfusionCounts> = None;
    let mut sem: Option<ConfusionCounts> = None;
    for (s, mask) in scenes.iter().zip(masks) {
        let pred = predict_semantics(store, model, layout, s, mask)?;
        let vol = &s.sample.volume;
        let valid = vol.valid_mask();
        let o = occupancy_confusion(&pred.iter().map(|&l| l != 0).collect::<Vec<_>>(), &vol.labels, &valid)?;
        let c = confusion(&pred, &vol.labels, &valid, vol.num_classes)?;
        match (&mut occ, &mut sem) {
            (Some(a), Some(b)) => {
                a.merge(&o)?;
                b.merge(&c)?;
            }
            _ => {
                occ = Some(o);
                sem = Some(c);
            }
        }
    }
    Ok((
        occ.ok_or_else(|| Error::config("evaluation needs at least one scene"))?,
        sem.expect("set with occupancy"),
    ))
}

pub fn train_stage2(
    cfg: &RunConfig,
    train: &[Scene],
    heldout: &[Scene],
    gate: &Gate,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<Stage2Run> {
    if train.is_empty() {
        return Err(Error::config("training needs at least one scene"));
    }
    let layout = TriplaneLayout::new(cfg.grid_dims);
    let (mut store, model) = new_stage2(cfg, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.adam(), store.values());
    let weights = cfg.stage2_weights();
    let train_masks = gate.masks(&layout, train)?;
    let heldout_masks = gate.masks(&layout, heldout)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut records = Vec::new();
    for step in 0..cfg.steps {
        let k = step % train.len();
        let scene = &train[k];
        let vol = &scene.sample.volume;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = stage2_forward(&mut tape, &p, &model, &layout, &scene.ctx, &train_masks[k])?;
        let loss = stage2_loss(&mut tape, out.logits, &vol.labels, &vol.valid_mask(), &weights)?;
        losses.push(tape.value(loss).item());
        let grads = gradients_in_order(&tape, loss, &p, &store)?;
        adam_step(store.values_mut(), &grads, &mut opt)?;
        if is_eval_step(cfg, step) && !heldout.is_empty() {
            let (o, s) = evaluate_stage2(&store, &model, &layout, heldout, &heldout_masks)?;
            let r = MetricRecord::new(step + 1, "heldout", &o, Some(&s));
            on_record(&r);
            records.push(r);
        }
    }
    Ok(Stage2Run {
        store,
        model,
        losses,
        records,
    })
}

fn param_file(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.gssc"))
}

/// Writes every parameter as `<name>.gssc` and the run configuration as
/// `config.txt`.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, value) in store.iter() {
        GsscFile::from_buffer(value).write(&param_file(dir, name))?;
    }
    let cfg_path = dir.join("config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| Error::io(&cfg_path, e))
}

/// Fills `store` from a checkpoint directory; every parameter must exist
/// with a matching shape.
pub fn load_checkpoint(dir: &Path, store: &mut ParamStore) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint directory not found")));
    }
    let names: Vec<String> = store.names().to_vec();
    for name in names {
        let value = GsscFile::read(&param_file(dir, &name))?.to_buffer()?;
        store.load(&name, value)?;
    }
    Ok(())
}

/// The configuration stored alongside a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&dir.join("config.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::parse(
            "grid.dims = 16, 16, 4\ngrid.origin = 0, -1.6, 0\n\
             camera.position = -3, 0, 2.5\n\
             model.width = 4\nmodel.merge_hidden = 4\nmodel.embed_width = 2\nmodel.head_width = 2\nmodel.points = 1\n\
             suite.boxes = 1, 2\nsuite.box_height = 1, 2\nsuite.box_footprint = 2, 3\nsuite.pillars = 0, 1\n\
             suite.train_scenes = 2\nsuite.heldout_scenes = 1\noptim.steps = 3\noptim.eval_every = 2\n",
        )
        .unwrap();
        cfg.lr = 1e-2;
        cfg
    }

    #[test]
    fn stage1_training_is_reproducible_and_lr0_is_constant() {
        let cfg = tiny_config();
        let (train, heldout) = build_suite(&cfg, cfg.seed, &cfg.suite()).unwrap();
        let a = train_stage1(&cfg, &train, &heldout, |_| {}).unwrap();
        let b = train_stage1(&cfg, &train[..], &heldout, |_| {}).unwrap();
        assert_eq!(a.losses.len(), 3);
        assert_eq!(a.records.len(), 2);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.records, b.records);

        let frozen = RunConfig {
            lr: 0.0,
            negative_sampling: false,
            train_scenes: 1,
            ..cfg.clone()
        };
        let (one, _) = build_suite(&frozen, frozen.seed, &frozen.suite()).unwrap();
        let r = train_stage1(&frozen, &one, &[], |_| {}).unwrap();
        assert!(r.losses.iter().all(|&l| l == r.losses[0]));
    }

    #[test]
    fn stage2_training_runs_with_both_gates() {
        let cfg = tiny_config();
        let (train, heldout) = build_suite(&cfg, cfg.seed, &cfg.suite()).unwrap();
        let a = train_stage2(&cfg, &train, &heldout, &Gate::GroundTruth, |_| {}).unwrap();
        let b = train_stage2(&cfg, &train, &heldout, &Gate::GroundTruth, |_| {}).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.last().unwrap().per_class_iou.len(), 4);
        let (s1, m1) = new_stage1(&cfg, 0).unwrap();
        let gate = Gate::Stage1 { store: &s1, model: &m1 };
        let c = train_stage2(&cfg, &train, &heldout, &gate, |_| {}).unwrap();
        assert!(c.losses.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny_config();
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = new_stage1(&cfg, 3).unwrap();
        save_checkpoint(dir.path(), &store, &cfg).unwrap();
        let (mut other, _) = new_stage1(&cfg, 4).unwrap();
        load_checkpoint(dir.path(), &mut other).unwrap();
        assert!(store.values().iter().zip(other.values()).all(|(a, b)| a.bit_eq(b)));
        assert_eq!(checkpoint_config(dir.path()).unwrap(), cfg);
        let (mut s2, _) = new_stage2(&cfg, 0).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), &mut s2), Err(Error::Io { .. })));
        assert!(matches!(load_checkpoint(&dir.path().join("missing"), &mut other), Err(Error::Io { .. })));
    }
}
