//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key has a default
//! and unknown keys are rejected by name. [`RunConfig::to_text`] writes the
//! full, documented key set.

use std::fs;
use std::path::{Path, PathBuf};

use crate::anchoring::{Anchoring, Stage1Config};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, VoxelGridSpec};
use crate::losses::{Stage1LossWeights, Stage2LossWeights};
use crate::refinement::Stage2Config;
use crate::synth::{CameraSpec, SuiteParams};
use crate::tensor::AdamConfig;

/// A value type that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a number"))
    }
    fn render(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for usize {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|_| format!("`{s}` is not a non-negative integer"))
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(format!("`{s}` is not true or false")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for Anchoring {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(Anchoring::Gaussian),
            "point" => Ok(Anchoring::Point),
            _ => Err(format!("`{s}` is not gaussian or point")),
        }
    }
    fn render(&self) -> String {
        match self {
            Anchoring::Gaussian => "gaussian".into(),
            Anchoring::Point => "point".into(),
        }
    }
}

fn parse_list<T: ConfigValue>(s: &str) -> std::result::Result<Vec<T>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| T::parse_value(p.trim())).collect()
}

fn render_list<T: ConfigValue>(v: &[T]) -> String {
    v.iter().map(ConfigValue::render).collect::<Vec<_>>().join(", ")
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        parse_list(s)
    }
    fn render(&self) -> String {
        render_list(self)
    }
}

impl<T: ConfigValue + Copy, const N: usize> ConfigValue for [T; N] {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: Vec<T> = parse_list(s)?;
        v.try_into().map_err(|v: Vec<T>| format!("expected {N} values, got {}", v.len()))
    }
    fn render(&self) -> String {
        render_list(self)
    }
}

impl<T: ConfigValue + Copy> ConfigValue for (T, T) {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let [a, b] = <[T; 2]>::parse_value(s)?;
        Ok((a, b))
    }
    fn render(&self) -> String {
        render_list(&[self.0, self.1])
    }
}

macro_rules! run_config {
    ($( $key:literal => $field:ident : $ty:ty = $default:expr ; $doc:literal )*) => {
        /// Every setting of a run.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( #[doc = $doc] pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [(&'static str, &'static str)] = &[ $( ($key, $doc), )* ];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( $key => {
                        self.$field = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| Error::config(format!("key `{key}`: {e}")))?;
                    } )*
                    _ => return Err(Error::config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            /// The value of `key` as it would be written to a file.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( $key => Some(self.$field.render()), )*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    "grid.origin" => grid_origin: [f64; 3] = [0.0, -6.4, 0.0]; "World position of the grid's minimum corner (m)."
    "grid.dims" => grid_dims: [usize; 3] = [64, 64, 8]; "Voxels along x, y, z."
    "grid.resolution" => grid_resolution: f64 = 0.2; "Voxel edge length (m)."
    "camera.fx" => fx: f64 = 128.0; "Focal length along u (px)."
    "camera.fy" => fy: f64 = 128.0; "Focal length along v (px)."
    "camera.cx" => cx: f64 = 128.0; "Principal point u (px)."
    "camera.cy" => cy: f64 = 48.0; "Principal point v (px)."
    "camera.width" => image_width: usize = 256; "Image width (px)."
    "camera.height" => image_height: usize = 96; "Image height (px)."
    "camera.position" => camera_position: [f64; 3] = [-6.0, 0.0, 4.0]; "Camera center in world coordinates (m)."
    "camera.yaw" => camera_yaw: f64 = 0.0; "Heading from +x toward +y (rad)."
    "camera.pitch" => camera_pitch: f64 = 0.35; "Downward tilt (rad)."
    "model.width" => width: usize = 16; "Triplane and descriptor channels d."
    "model.embed_width" => embed_width: usize = 8; "Axis-embedding width D_tok."
    "model.feature_channels" => feature_channels: usize = 8; "Image feature channels C_f."
    "model.levels" => levels: usize = 3; "Image feature levels (strides 4, 8, 16)."
    "model.merge_hidden" => merge_hidden: usize = 16; "Hidden width of the plane-merge MLPs."
    "model.head_width" => head_width: usize = 4; "Channels of the Stage-1 occupancy head."
    "model.window_radius" => window_radius: usize = 2; "Gaussian-anchoring window radius (texels)."
    "model.sigma_lo" => sigma_lo: f64 = 0.3; "Lower clamp of Gaussian extents."
    "model.sigma_hi" => sigma_hi: f64 = 4.0; "Upper clamp of Gaussian extents."
    "model.sigma0" => sigma0: f64 = 1.0; "Reference and initial Gaussian extent."
    "model.anchoring" => anchoring: Anchoring = Anchoring::Gaussian; "Stage-1 image sampling: gaussian or point."
    "model.points" => points: usize = 4; "Sampling points of deformable attention."
    "model.beta" => beta: f64 = 0.5; "Blend between local gathering (1) and global aggregation (0)."
    "loss.class_alpha" => class_alpha: f64 = 0.54; "Occupied-class weight w1 = alpha, w0 = 1 - alpha."
    "loss.lambda_sigma" => lambda_sigma: f64 = 1e-3; "Weight of the log-extent prior."
    "loss.lambda_delta" => lambda_delta: f64 = 1e-4; "Weight of the offset L1 prior."
    "loss.negative_sampling" => negative_sampling: bool = true; "Restrict Stage-1 loss to positives plus sampled negatives."
    "loss.neg_ratio" => neg_ratio: f64 = 2.0; "Sampled negatives per positive."
    "loss.lambda_ce" => lambda_ce: f64 = 1.0; "Weight of the Stage-2 cross-entropy."
    "loss.lambda_sem" => lambda_sem: f64 = 1.0; "Weight of sem_scal."
    "loss.class_weights" => class_weights: Vec<f64> = vec![1.0; 4]; "Stage-2 per-class weights."
    "optim.lr" => lr: f64 = 1e-3; "Adam learning rate."
    "optim.beta1" => adam_beta1: f64 = 0.9; "Adam first-moment decay."
    "optim.beta2" => adam_beta2: f64 = 0.999; "Adam second-moment decay."
    "optim.eps" => adam_eps: f64 = 1e-8; "Adam denominator guard."
    "optim.steps" => steps: usize = 600; "Optimizer steps."
    "optim.eval_every" => eval_every: usize = 100; "Steps between held-out evaluations (0 = only at the end)."
    "suite.train_scenes" => train_scenes: usize = 8; "Training scenes."
    "suite.heldout_scenes" => heldout_scenes: usize = 2; "Held-out scenes."
    "suite.num_classes" => num_classes: usize = 4; "Semantic classes including empty."
    "suite.boxes" => boxes: (usize, usize) = (3, 6); "Boxes per scene (min, max)."
    "suite.box_height" => box_height: (usize, usize) = (2, 5); "Box height in voxels (min, max)."
    "suite.box_footprint" => box_footprint: (usize, usize) = (3, 8); "Box side in voxels (min, max)."
    "suite.pillars" => pillars: (usize, usize) = (1, 3); "Pillars per scene (min, max)."
    "suite.pillar_width" => pillar_width: (usize, usize) = (2, 3); "Pillar side in voxels (min, max)."
    "suite.noise_sigma" => noise_sigma: f64 = 0.05; "Gaussian noise on rendered features."
    "suite.dropout" => dropout: f64 = 0.2; "Fraction of surface seeds dropped."
    "suite.jitter" => jitter: f64 = 0.1; "Fraction of seeds moved by one voxel."
    "run.seed" => seed: u64 = 0; "Seed of scenes, initialization and sampling."
    "run.stage" => stage: usize = 1; "Stage to train or evaluate (1 or 2)."
    "run.threads" => threads: usize = 1; "Worker threads (1 = reference mode)."
    "run.out_dir" => out_dir: String = "out".to_string(); "Directory for logs, checkpoints and exports."
    "run.gt_occupancy" => gt_occupancy: bool = true; "Stage 2: gate with ground-truth occupancy instead of Stage-1 predictions."
    "run.stage1_checkpoint" => stage1_checkpoint: String = String::new(); "Stage 2: Stage-1 checkpoint used when gt_occupancy is false."
    "ablate.seeds" => ablate_seeds: Vec<u64> = vec![0, 1, 2]; "Seeds of the anchoring ablation."
    "ablate.jitter" => ablate_jitter: f64 = 0.5; "Seed jitter of the anchoring ablation suite."
    "ablate.steps" => ablate_steps: usize = 300; "Optimizer steps of every ablation run."
    "ablate.betas" => ablate_betas: Vec<f64> = vec![0.0, 0.5, 1.0]; "Blend values of the Stage-2 ablation."
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Every key with its documentation and current value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, doc) in Self::KEYS {
            out.push_str(&format!("# {doc}\n{key} = {}\n", self.get(key).expect("declared key")));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.camera()?;
        self.suite().validate()?;
        self.stage1_weights().validate()?;
        self.stage2_weights().validate()?;
        let checks: [(&str, bool); 14] = [
            ("model.width", self.width > 0),
            ("model.embed_width", self.embed_width > 0),
            ("model.merge_hidden", self.merge_hidden > 0),
            ("model.head_width", self.head_width > 0),
            ("model.points", self.points > 0),
            ("model.beta", (0.0..=1.0).contains(&self.beta)),
            ("model.sigma_lo", self.sigma_lo > 0.0 && self.sigma_lo < self.sigma_hi),
            ("model.sigma0", self.sigma0 >= self.sigma_lo && self.sigma0 <= self.sigma_hi),
            ("loss.class_alpha", self.class_alpha > 0.0 && self.class_alpha < 1.0),
            ("optim.lr", self.lr >= 0.0),
            ("suite.train_scenes", self.train_scenes > 0),
            ("suite.heldout_scenes", self.heldout_scenes > 0),
            ("run.stage", self.stage == 1 || self.stage == 2),
            ("run.threads", self.threads > 0),
        ];
        if let Some((key, _)) = checks.iter().find(|c| !c.1) {
            return Err(Error::config(format!("key `{key}` is out of range")));
        }
        if self.class_weights.len() != self.num_classes {
            return Err(Error::config(format!(
                "key `loss.class_weights` needs {} values, got {}",
                self.num_classes,
                self.class_weights.len()
            )));
        }
        if let Some(b) = self.ablate_betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::config(format!("key `ablate.betas`: {b} is outside [0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.ablate_jitter) {
            return Err(Error::config("key `ablate.jitter` is out of range"));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(self.grid_origin, self.grid_dims, self.grid_resolution)
    }

    pub fn camera(&self) -> Result<CameraSpec> {
        Ok(CameraSpec {
            intrinsics: CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.image_width, self.image_height)?,
            position: self.camera_position,
            yaw: self.camera_yaw,
            pitch: self.camera_pitch,
        })
    }

    pub fn suite(&self) -> SuiteParams {
        SuiteParams {
            num_classes: self.num_classes,
            boxes: self.boxes,
            box_height: self.box_height,
            box_footprint: self.box_footprint,
            pillars: self.pillars,
            pillar_width: self.pillar_width,
            feature_channels: self.feature_channels,
            levels: self.levels,
            noise_sigma: self.noise_sigma,
            dropout: self.dropout,
            jitter: self.jitter,
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            width: self.width,
            embed_width: self.embed_width,
            merge_hidden: self.merge_hidden,
            head_width: self.head_width,
            feature_channels: self.feature_channels,
            levels: self.levels,
            window_radius: self.window_radius,
            sigma_band: (self.sigma_lo, self.sigma_hi),
            sigma0: self.sigma0,
            anchoring: self.anchoring,
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            width: self.width,
            embed_width: self.embed_width,
            merge_hidden: self.merge_hidden,
            feature_channels: self.feature_channels,
            levels: self.levels,
            points: self.points,
            beta: self.beta,
            sigma_band: (self.sigma_lo, self.sigma_hi),
            sigma0: self.sigma0,
            num_classes: self.num_classes,
        }
    }

    pub fn stage1_weights(&self) -> Stage1LossWeights {
        Stage1LossWeights {
            w0: 1.0 - self.class_alpha,
            w1: self.class_alpha,
            lambda_sigma: self.lambda_sigma,
            lambda_delta: self.lambda_delta,
            sigma0: self.sigma0,
            neg_ratio: self.neg_ratio,
        }
    }

    pub fn stage2_weights(&self) -> Stage2LossWeights {
        Stage2LossWeights {
            class_weights: self.class_weights.clone(),
            lambda_ce: self.lambda_ce,
            lambda_sem: self.lambda_sem,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.out_dir)
    }
}
