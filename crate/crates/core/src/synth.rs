//! Seeded synthetic scenes: primitive rasterization, ray-cast multi-scale
//! feature maps and jittered seed queries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anchoring::fused_coord;
use crate::error::{Error, Result};
use crate::geometry::{
    in_image, project, voxel_center, CameraIntrinsics, CameraPose, SemanticVolume, Vec3, VoxelGridSpec, EMPTY,
    UNKNOWN,
};
use crate::tensor::ops::bilinear_sample;
use crate::tensor::NdBuffer;

/// Scale of the inverse-depth channel: `DEPTH_SCALE / depth`.
pub const DEPTH_SCALE: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Box,
    /// Fills the whole `z = 0` layer; position and size are ignored.
    Ground,
    Pillar,
}

/// An axis-aligned block of voxels `[min, min + size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Primitive {
    pub shape: Shape,
    pub min: [usize; 3],
    pub size: [usize; 3],
    pub class: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub grid: VoxelGridSpec,
    pub primitives: Vec<Primitive>,
    pub num_classes: usize,
}

/// Knobs of a randomly drawn scene suite.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteParams {
    pub num_classes: usize,
    pub boxes: (usize, usize),
    pub box_height: (usize, usize),
    pub box_footprint: (usize, usize),
    pub pillars: (usize, usize),
    pub pillar_width: (usize, usize),
    pub feature_channels: usize,
    pub levels: usize,
    pub noise_sigma: f64,
    pub dropout: f64,
    pub jitter: f64,
}

impl Default for SuiteParams {
    fn default() -> Self {
        Self {
            num_classes: 4,
            boxes: (3, 6),
            box_height: (2, 5),
            box_footprint: (3, 8),
            pillars: (1, 3),
            pillar_width: (2, 3),
            feature_channels: 8,
            levels: 3,
            noise_sigma: 0.05,
            dropout: 0.2,
            jitter: 0.1,
        }
    }
}

impl SuiteParams {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.feature_channels < self.num_classes + 1 {
            return Err(Error::config(format!(
                "feature_channels must hold {} class codes plus inverse depth",
                self.num_classes
            )));
        }
        if !(1..=3).contains(&self.levels) {
            return Err(Error::config("levels must be 1, 2 or 3"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(Error::config("jitter must lie in [0, 1]"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        for (name, (lo, hi)) in [
            ("boxes", self.boxes),
            ("box_height", self.box_height),
            ("box_footprint", self.box_footprint),
            ("pillars", self.pillars),
            ("pillar_width", self.pillar_width),
        ] {
            if lo > hi {
                return Err(Error::config(format!("{name}: lower bound exceeds upper bound")));
            }
        }
        if self.box_height.0 == 0 || self.box_footprint.0 == 0 || self.pillar_width.0 == 0 {
            return Err(Error::config("box and pillar sizes must be at least 1"));
        }
        Ok(())
    }
}

/// Class of ground, boxes and pillars for `num_classes` classes.
pub fn class_of(shape: Shape, num_classes: usize, draw: usize) -> u8 {
    let top = num_classes - 1;
    match shape {
        Shape::Ground => 1,
        Shape::Pillar => top as u8,
        Shape::Box if num_classes <= 3 => top as u8,
        Shape::Box => (2 + draw % (num_classes - 3)) as u8,
    }
}

impl SceneSpec {
    /// Ground plus random boxes and pillars resting on it.
    pub fn random(seed: u64, grid: VoxelGridSpec, params: &SuiteParams) -> Result<Self> {
        params.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [dx, dy, dz] = grid.dims;
        let mut primitives = vec![Primitive {
            shape: Shape::Ground,
            min: [0; 3],
            size: [dx, dy, 1],
            class: class_of(Shape::Ground, params.num_classes, 0),
        }];
        let base = 1.min(dz - 1);
        let boxes = rng.random_range(params.boxes.0..=params.boxes.1);
        for i in 0..boxes {
            let fx = rng.random_range(params.box_footprint.0..=params.box_footprint.1).min(dx);
            let fy = rng.random_range(params.box_footprint.0..=params.box_footprint.1).min(dy);
            let h = rng.random_range(params.box_height.0..=params.box_height.1).min(dz - base);
            primitives.push(Primitive {
                shape: Shape::Box,
                min: [rng.random_range(0..=dx - fx), rng.random_range(0..=dy - fy), base],
                size: [fx, fy, h.max(1)],
                class: class_of(Shape::Box, params.num_classes, i),
            });
        }
        let pillars = rng.random_range(params.pillars.0..=params.pillars.1);
        for _ in 0..pillars {
            let w = rng.random_range(params.pillar_width.0..=params.pillar_width.1).min(dx).min(dy);
            primitives.push(Primitive {
                shape: Shape::Pillar,
                min: [rng.random_range(0..=dx - w), rng.random_range(0..=dy - w), base],
                size: [w, w, (dz - base).max(1)],
                class: class_of(Shape::Pillar, params.num_classes, 0),
            });
        }
        Ok(Self {
            seed,
            grid,
            primitives,
            num_classes: params.num_classes,
        })
    }
}

/// Rasterizes the primitives in order; later primitives overwrite earlier
/// ones.
pub fn generate_scene(spec: &SceneSpec) -> Result<SemanticVolume> {
    let mut vol = SemanticVolume::empty(spec.grid, spec.num_classes)?;
    let dims = spec.grid.dims;
    for (k, p) in spec.primitives.iter().enumerate() {
        if p.class == EMPTY || p.class as usize >= spec.num_classes {
            return Err(Error::config(format!("primitive {k}: class {} out of range", p.class)));
        }
        let (min, size) = match p.shape {
            Shape::Ground => ([0; 3], [dims[0], dims[1], 1]),
            _ => (p.min, p.size),
        };
        if size.contains(&0) || (0..3).any(|a| min[a] + size[a] > dims[a]) {
            return Err(Error::config(format!("primitive {k} lies outside the region of interest")));
        }
        for x in min[0]..min[0] + size[0] {
            for y in min[1]..min[1] + size[1] {
                for z in min[2]..min[2] + size[2] {
                    let v = spec.grid.linear([x, y, z]);
                    vol.occupancy[v] = true;
                    vol.labels[v] = p.class;
                }
            }
        }
    }
    Ok(vol)
}

/// Marks voxels whose centers do not project into the image as unknown.
pub fn apply_frustum(vol: &mut SemanticVolume, intr: &CameraIntrinsics, pose: &CameraPose) -> Result<()> {
    for v in 0..vol.labels.len() {
        let p = voxel_center(&vol.grid, vol.grid.unravel(v))?;
        if !project(p, intr, pose).uv().is_some_and(|uv| in_image(uv, intr)) {
            vol.labels[v] = UNKNOWN;
        }
    }
    Ok(())
}

/// First occupied voxel along the ray through pixel `(u, v)` and the camera
/// depth at which the ray enters it.
pub fn cast_ray(
    vol: &SemanticVolume,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    u: f64,
    v: f64,
) -> Option<(usize, f64)> {
    let g = &vol.grid;
    let origin = pose.center();
    let dir = pose.direction_to_world([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0]);
    let hi: Vec3 = [0, 1, 2].map(|a| g.origin[a] + g.dims[a] as f64 * g.resolution);
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < g.origin[a] || origin[a] >= hi[a] {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((g.origin[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if t0 >= t1 {
        return None;
    }
    let entry: Vec3 = [0, 1, 2].map(|a| origin[a] + t0 * dir[a]);
    let mut cell = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let rel = (entry[a] - g.origin[a]) / g.resolution;
        cell[a] = (rel.floor() as i64).clamp(0, g.dims[a] as i64 - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (g.origin[a] + (cell[a] + 1) as f64 * g.resolution - origin[a]) / dir[a];
            t_delta[a] = g.resolution / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (g.origin[a] + cell[a] as f64 * g.resolution - origin[a]) / dir[a];
            t_delta[a] = -g.resolution / dir[a];
        }
    }
    let mut t = t0;
    loop {
        let lin = g.linear([cell[0] as usize, cell[1] as usize, cell[2] as usize]);
        if vol.occupancy[lin] {
            return Some((lin, t));
        }
        let a = (0..3).min_by(|&i, &j| t_max[i].total_cmp(&t_max[j])).expect("three axes");
        t = t_max[a];
        cell[a] += step[a];
        if cell[a] < 0 || cell[a] >= g.dims[a] as i64 {
            return None;
        }
        t_max[a] += t_delta[a];
    }
}

/// Feature vector of a ray hit: one-hot class code (channel 0 for
/// background) and inverse depth in the last channel. A hit on an unknown
/// voxel carries depth only.
pub fn hit_code(hit: Option<(u8, f64)>, channels: usize) -> Vec<f64> {
    let mut f = vec![0.0; channels];
    match hit {
        Some((class, depth)) => {
            if class != UNKNOWN {
                f[class as usize] = 1.0;
            }
            f[channels - 1] = DEPTH_SCALE / depth;
        }
        None => f[0] = 1.0,
    }
    f
}

fn downsample2(level: &NdBuffer) -> NdBuffer {
    let (h, w, c) = (level.shape()[0], level.shape()[1], level.shape()[2]);
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = NdBuffer::zeros(&[h2, w2, c]);
    for i in 0..h2 {
        for j in 0..w2 {
            let src: Vec<usize> = [(2 * i, 2 * j), (2 * i, 2 * j + 1), (2 * i + 1, 2 * j), (2 * i + 1, 2 * j + 1)]
                .into_iter()
                .filter(|&(a, b)| a < h && b < w)
                .map(|(a, b)| a * w + b)
                .collect();
            let row = out.row_mut(i * w2 + j);
            for &s in &src {
                for (o, x) in row.iter_mut().zip(&level.data()[s * c..(s + 1) * c]) {
                    *o += x / src.len() as f64;
                }
            }
        }
    }
    out
}

/// Ray-casts one texel-center ray per stride-4 texel, then builds coarser
/// levels by 2x2 averaging and adds seeded Gaussian noise to every level.
/// Returns `(level, stride)` pairs, finest first.
pub fn render_features(
    vol: &SemanticVolume,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    channels: usize,
    levels: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<(NdBuffer, f64)>> {
    if channels < vol.num_classes + 1 {
        return Err(Error::config("feature channels cannot hold the class codes and depth"));
    }
    let stride = 4.0;
    let h = (intr.height as f64 / stride).round().max(1.0) as usize;
    let w = (intr.width as f64 / stride).round().max(1.0) as usize;
    let mut fine = Vec::with_capacity(h * w * channels);
    for i in 0..h {
        for j in 0..w {
            let hit = cast_ray(vol, intr, pose, (j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
            fine.extend(hit_code(hit.map(|(v, t)| (vol.labels[v], t)), channels));
        }
    }
    let mut out = vec![(NdBuffer::new(&[h, w, channels], fine)?, stride)];
    for k in 1..levels {
        let next = downsample2(&out[k - 1].0);
        out.push((next, stride * (1 << k) as f64));
    }
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (level, _) in &mut out {
            level.data_mut().iter_mut().for_each(|x| *x += normal.sample(&mut rng));
        }
    }
    Ok(out)
}

/// A voxel query with its initial feature.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelQuery {
    pub idx: [usize; 3],
    pub feature: Vec<f64>,
}

/// Voxels hit first by the ray through any pixel center, in linear order.
pub fn visible_surface(vol: &SemanticVolume, intr: &CameraIntrinsics, pose: &CameraPose) -> Vec<usize> {
    let mut seen = vec![false; vol.labels.len()];
    for v in 0..intr.height {
        for u in 0..intr.width {
            if let Some((lin, _)) = cast_ray(vol, intr, pose, u as f64 + 0.5, v as f64 + 0.5) {
                seen[lin] = true;
            }
        }
    }
    (0..seen.len()).filter(|&v| seen[v]).collect()
}

/// Visible-surface voxels with a `dropout` fraction removed and a `jitter`
/// fraction moved by one voxel along a random axis; features are bilinear
/// reads of the finest level at each query's projection.
#[allow(clippy::too_many_arguments)]
pub fn seed_queries(
    vol: &SemanticVolume,
    intr: &CameraIntrinsics,
    pose: &CameraPose,
    finest: &(NdBuffer, f64),
    dropout: f64,
    jitter: f64,
    seed: u64,
) -> Result<Vec<VoxelQuery>> {
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::config(format!("dropout must lie in [0, 1), got {dropout}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = &vol.grid;
    let mut out = Vec::new();
    for v in visible_surface(vol, intr, pose) {
        let keep = rng.random::<f64>() >= dropout;
        let moved = rng.random::<f64>() < jitter;
        let axis = rng.random_range(0..3usize);
        let up = rng.random::<bool>();
        if !keep {
            continue;
        }
        let mut idx = g.unravel(v);
        if moved {
            idx[axis] = if up { (idx[axis] + 1).min(g.dims[axis] - 1) } else { idx[axis].saturating_sub(1) };
        }
        let feature = match project(voxel_center(g, idx)?, intr, pose).uv() {
            Some(uv) => bilinear_sample(&finest.0, fused_coord(uv, finest.1))?,
            None => vec![0.0; finest.0.cols()],
        };
        out.push(VoxelQuery { idx, feature });
    }
    Ok(out)
}

/// Query positions and a `[N x C_f]` feature buffer.
pub fn query_batch(queries: &[VoxelQuery], channels: usize) -> (Vec<[usize; 3]>, Option<NdBuffer>) {
    let idx = queries.iter().map(|q| q.idx).collect();
    if queries.is_empty() {
        return (idx, None);
    }
    let data = queries.iter().flat_map(|q| q.feature.iter().copied()).collect();
    (idx, Some(NdBuffer::new(&[queries.len(), channels], data).expect("query features")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraSpec {
    pub intrinsics: CameraIntrinsics,
    pub position: Vec3,
    pub yaw: f64,
    pub pitch: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics::new(128.0, 128.0, 128.0, 48.0, 256, 96).expect("valid intrinsics"),
            position: [-6.0, 0.0, 4.0],
            yaw: 0.0,
            pitch: 0.35,
        }
    }
}

impl CameraSpec {
    pub fn pose(&self) -> CameraPose {
        CameraPose::looking(self.position, self.yaw, self.pitch)
    }
}

/// A scene with its ground truth, camera, features and seed queries.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub seed: u64,
    /// Labels are unknown outside the camera frustum.
    pub volume: SemanticVolume,
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub levels: Vec<(NdBuffer, f64)>,
    pub queries: Vec<VoxelQuery>,
}

pub fn generate_sample(
    grid: VoxelGridSpec,
    camera: &CameraSpec,
    params: &SuiteParams,
    seed: u64,
) -> Result<SyntheticSample> {
    let spec = SceneSpec::random(seed, grid, params)?;
    let mut volume = generate_scene(&spec)?;
    let pose = camera.pose();
    let intr = camera.intrinsics;
    let levels = render_features(&volume, &intr, &pose, params.feature_channels, params.levels, params.noise_sigma, seed ^ 0x5eed_f00d)?;
    let queries = seed_queries(&volume, &intr, &pose, &levels[0], params.dropout, params.jitter, seed ^ 0x0051_7e5d)?;
    apply_frustum(&mut volume, &intr, &pose)?;
    Ok(SyntheticSample {
        seed,
        volume,
        intrinsics: intr,
        pose,
        levels,
        queries,
    })
}

/// Train and held-out samples drawn from disjoint seed streams.
pub fn generate_suite(
    grid: VoxelGridSpec,
    camera: &CameraSpec,
    params: &SuiteParams,
    seed: u64,
    train: usize,
    heldout: usize,
) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let base = seed.wrapping_mul(1_000_003);
    let make = |offset: u64, n: usize| -> Result<Vec<SyntheticSample>> {
        (0..n as u64).map(|i| generate_sample(grid, camera, params, base.wrapping_add(offset + i))).collect()
    };
    Ok((make(0, train)?, make(500_000, heldout)?))
}
