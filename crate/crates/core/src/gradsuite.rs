//! Finite-difference checks of every differentiable kernel, every composite
//! model operation and both stage pipelines on a 6x6x4 scene.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::anchoring::{
    gated_fuse, stage1_forward, AnchorAggregate, Anchoring, ImageContext, Stage1Config, Stage1Model, WeightedLevelSum,
};
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, CameraPose, VoxelGridSpec, UNKNOWN};
use crate::losses::{
    stage1_loss, stage2_loss, BalancedBce, DeltaReg, SemScal, SigmaReg, Stage1LossWeights, Stage2LossWeights,
    WeightedCe,
};
use crate::nn::ModelRng;
use crate::refinement::{
    condition_tokens, occupancy_gate, pool_to_plane, stage2_forward, Blend, GlobalAggregate, LocalGather,
    Stage2Config, Stage2Model,
};
use crate::tensor::conv::{Stencil, StencilConv};
use crate::tensor::ops::{
    AddBias, Binary, BilinearSample, ConcatCols, Elementwise, GatherRows, MatMul, MulScalar, Pointwise, Reshape,
    RowScale, ScatterAddRows, SliceCols, SoftmaxRows, SoftplusClamped, SumAll, Unary, WeightedScalarSum,
    WeightedSumK,
};
use crate::tensor::{Bound, FnKernel, GradCheck, Kernel, NdBuffer, ParamStore, Tape, Var};
use crate::triplane::{count_normalize, deform_sample_attend, refine_plane, scatter_queries, PlaneKind, TriplaneLayout};

/// Tolerance on the max relative error of a single kernel or operation.
pub const OP_TOLERANCE: f64 = 1e-5;
/// Tolerance on the max relative error of an end-to-end pipeline.
pub const PIPELINE_TOLERANCE: f64 = 1e-4;

const PROBES_PER_INPUT: usize = 24;
const FEATURE_CHANNELS: usize = 3;

/// One kernel with its inputs and tolerance.
pub struct GradCase {
    pub name: String,
    pub tolerance: f64,
    pub kernel: Box<dyn Kernel>,
    pub inputs: Vec<NdBuffer>,
}

impl GradCase {
    fn new(name: &str, tolerance: f64, kernel: impl Kernel + 'static, inputs: Vec<NdBuffer>) -> Self {
        Self {
            name: name.to_string(),
            tolerance,
            kernel: Box::new(kernel),
            inputs,
        }
    }
}

/// One line of the gradient report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEntry {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub probes: usize,
    pub pass: bool,
}

impl GradEntry {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("gradient entries serialize")
    }
}

/// Checks one case; a non-finite forward value counts as a failure.
pub fn check_case(case: &GradCase) -> GradEntry {
    let report = GradCheck::default().probes(PROBES_PER_INPUT).run(case.kernel.as_ref(), &case.inputs);
    let (err, probes) = match report {
        Ok(r) => (r.max_rel_error, r.probes),
        Err(_) => (f64::INFINITY, 0),
    };
    GradEntry {
        op: case.name.clone(),
        max_rel_error: err,
        tolerance: case.tolerance,
        probes,
        pass: err <= case.tolerance,
    }
}

pub fn run_suite(cases: &[GradCase], mut on_entry: impl FnMut(&GradEntry)) -> Vec<GradEntry> {
    cases
        .iter()
        .map(|c| {
            let e = check_case(c);
            on_entry(&e);
            e
        })
        .collect()
}

/// A 6x6x4 grid partly seen by a 64x32 camera, with random feature levels at
/// strides 4 and 8.
pub fn miniature_scene(channels: usize, seed: u64) -> (VoxelGridSpec, ImageContext) {
    let grid = VoxelGridSpec::new([0.0, -1.5, 0.0], [6, 6, 4], 0.5).expect("valid grid");
    let intr = CameraIntrinsics::new(32.0, 32.0, 32.0, 16.0, 64, 32).expect("valid intrinsics");
    let pose = CameraPose::looking([-1.0, 0.0, 2.0], 0.0, 0.35);
    let mut rng = ModelRng::seed_from_u64(seed);
    let mut level = |h: usize, w: usize| {
        NdBuffer::new(&[h, w, channels], (0..h * w * channels).map(|_| rng.random_range(-1.0..1.0)).collect())
            .expect("shape")
    };
    let levels = vec![(level(8, 16), 4.0), (level(4, 8), 8.0)];
    let ctx = ImageContext::new(&levels, 4.0, &intr, &pose, &grid).expect("valid scene");
    (grid, ctx)
}

struct Data(ModelRng);

impl Data {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> NdBuffer {
        let n = shape.iter().product();
        NdBuffer::new(shape, (0..n).map(|_| self.0.random_range(lo..hi)).collect()).expect("shape")
    }

    fn signed(&mut self, shape: &[usize]) -> NdBuffer {
        self.uniform(shape, -1.0, 1.0)
    }

    /// Values bounded away from zero, for kernels with a kink at 0.
    fn off_zero(&mut self, shape: &[usize]) -> NdBuffer {
        let mut b = self.uniform(shape, 0.1, 1.0);
        for (i, x) in b.data_mut().iter_mut().enumerate() {
            if i % 2 == 1 {
                *x = -*x;
            }
        }
        b
    }
}

fn perturbed(store: &mut ParamStore, rng: &mut ModelRng) {
    for v in store.values_mut() {
        v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1));
    }
}

fn small_stage1() -> Stage1Config {
    Stage1Config {
        width: 4,
        embed_width: 3,
        merge_hidden: 4,
        head_width: 3,
        feature_channels: FEATURE_CHANNELS,
        levels: 2,
        anchoring: Anchoring::Gaussian,
        ..Stage1Config::default()
    }
}

fn small_stage2() -> Stage2Config {
    Stage2Config {
        width: 4,
        embed_width: 3,
        merge_hidden: 4,
        feature_channels: FEATURE_CHANNELS,
        levels: 2,
        points: 2,
        ..Stage2Config::default()
    }
}

/// A kernel over `params ++ extra` built from a closure over the bound
/// parameters and the extra inputs.
fn with_params<F>(name: &str, tolerance: f64, store: &ParamStore, extra: Vec<NdBuffer>, f: F) -> GradCase
where
    F: Fn(&mut Tape, &Bound, &[Var]) -> Result<Var> + Send + Sync + 'static,
{
    let np = store.len();
    let mut inputs = store.values().to_vec();
    inputs.extend(extra);
    let kernel = FnKernel::new(name, move |tape: &mut Tape, vars: &[Var]| {
        let p = Bound::from_vars(vars[..np].to_vec());
        f(tape, &p, &vars[np..])
    });
    GradCase::new(name, tolerance, kernel, inputs)
}

fn tensor_cases(d: &mut Data) -> Vec<GradCase> {
    let plane3 = Arc::new(Stencil::plane3x3(4, 5));
    vec![
        GradCase::new("matmul", OP_TOLERANCE, MatMul, vec![d.signed(&[3, 4]), d.signed(&[4, 2])]),
        GradCase::new("add_bias", OP_TOLERANCE, AddBias, vec![d.signed(&[3, 4]), d.signed(&[4])]),
        GradCase::new("add", OP_TOLERANCE, Elementwise(Binary::Add), vec![d.signed(&[3, 2]), d.signed(&[3, 2])]),
        GradCase::new("sub", OP_TOLERANCE, Elementwise(Binary::Sub), vec![d.signed(&[3, 2]), d.signed(&[3, 2])]),
        GradCase::new("mul", OP_TOLERANCE, Elementwise(Binary::Mul), vec![d.signed(&[3, 2]), d.signed(&[3, 2])]),
        GradCase::new("relu", OP_TOLERANCE, Pointwise(Unary::Relu), vec![d.off_zero(&[4, 3])]),
        GradCase::new("sigmoid", OP_TOLERANCE, Pointwise(Unary::Sigmoid), vec![d.signed(&[4, 3])]),
        GradCase::new("scale", OP_TOLERANCE, Pointwise(Unary::Scale(-1.7)), vec![d.signed(&[4, 3])]),
        GradCase::new(
            "softplus_clamped",
            OP_TOLERANCE,
            SoftplusClamped::new(0.3, 4.0).expect("valid band"),
            vec![d.uniform(&[4, 3], -1.0, 1.0)],
        ),
        GradCase::new("mul_scalar", OP_TOLERANCE, MulScalar, vec![d.signed(&[3, 2]), d.signed(&[1])]),
        GradCase::new("concat_cols", OP_TOLERANCE, ConcatCols, vec![d.signed(&[3, 2]), d.signed(&[3, 1])]),
        GradCase::new("slice_cols", OP_TOLERANCE, SliceCols { start: 1, len: 2 }, vec![d.signed(&[3, 4])]),
        GradCase::new(
            "gather_rows",
            OP_TOLERANCE,
            GatherRows {
                index: Arc::new(vec![2, 0, 2, 1]),
            },
            vec![d.signed(&[3, 2])],
        ),
        GradCase::new(
            "scatter_add",
            OP_TOLERANCE,
            ScatterAddRows::new(&[2, 3, 2], &[4, 0, 4, 5, 1]).expect("valid index"),
            vec![d.signed(&[5, 2])],
        ),
        GradCase::new(
            "row_scale",
            OP_TOLERANCE,
            RowScale {
                scales: Arc::new(vec![0.5, -2.0, 0.0]),
            },
            vec![d.signed(&[3, 2])],
        ),
        GradCase::new("reshape", OP_TOLERANCE, Reshape(vec![2, 3, 2]), vec![d.signed(&[6, 2])]),
        GradCase::new("softmax_rows", OP_TOLERANCE, SoftmaxRows, vec![d.signed(&[3, 4])]),
        GradCase::new("sum_all", OP_TOLERANCE, SumAll, vec![d.signed(&[3, 4])]),
        GradCase::new(
            "weighted_scalar_sum",
            OP_TOLERANCE,
            WeightedScalarSum(vec![0.5, -3.0]),
            vec![d.signed(&[1]), d.signed(&[1])],
        ),
        GradCase::new(
            "bilinear_sample",
            OP_TOLERANCE,
            BilinearSample {
                base: Some(Arc::new(vec![[0.3, 0.6], [2.2, 1.4], [3.7, 2.1]])),
            },
            vec![d.signed(&[4, 5, 2]), d.uniform(&[3, 4], -0.45, 0.45)],
        ),
        GradCase::new("weighted_sum_k", OP_TOLERANCE, WeightedSumK, vec![d.signed(&[3, 2]), d.signed(&[3, 6])]),
        GradCase::new(
            "stencil_conv",
            OP_TOLERANCE,
            StencilConv { stencil: plane3 },
            vec![d.signed(&[20, 2]), d.signed(&[18, 3]), d.signed(&[3])],
        ),
    ]
}

fn loss_cases(d: &mut Data) -> Vec<GradCase> {
    let occ = Arc::new(vec![Some(true), Some(false), None, Some(false), Some(true), Some(false)]);
    let labels = [0u8, 3, 3, UNKNOWN, 1, 0, 2];
    let mask = [true, true, true, true, true, false, true];
    let w2 = Stage2LossWeights {
        class_weights: vec![0.5, 1.0, 2.0, 1.5],
        ..Stage2LossWeights::uniform(4)
    };
    vec![
        GradCase::new(
            "balanced_bce_occupancy",
            OP_TOLERANCE,
            BalancedBce::new(occ, 0.46, 0.54).expect("valid weights"),
            vec![d.signed(&[6, 2])],
        ),
        GradCase::new(
            "sigma_reg",
            OP_TOLERANCE,
            SigmaReg::new(1.0).expect("valid reference"),
            vec![d.uniform(&[5, 2], 0.4, 3.0)],
        ),
        GradCase::new("delta_reg", OP_TOLERANCE, DeltaReg, vec![d.off_zero(&[5, 2])]),
        GradCase::new(
            "weighted_ce_semantic",
            OP_TOLERANCE,
            WeightedCe::new(&labels, &mask, &w2).expect("valid labels"),
            vec![d.signed(&[7, 4])],
        ),
        GradCase::new(
            "sem_scal",
            OP_TOLERANCE,
            SemScal::new(&labels, &mask, 4).expect("valid labels"),
            vec![d.signed(&[7, 4])],
        ),
    ]
}

fn stage1_cases(d: &mut Data) -> Result<Vec<GradCase>> {
    let (grid, ctx) = miniature_scene(FEATURE_CHANNELS, 6);
    let ctx = Arc::new(ctx);
    let layout = Arc::new(TriplaneLayout::new(grid.dims));
    let n = grid.num_voxels();
    let mut store = ParamStore::new();
    let model = Arc::new(Stage1Model::new(&mut store, small_stage1(), grid.dims, &mut d.0)?);
    perturbed(&mut store, &mut d.0);
    let queries: Arc<Vec<[usize; 3]>> =
        Arc::new((0..10).map(|i| [(i * 5) % 6, (i * 7 + 1) % 6, (i * 3) % 4]).collect());
    let qf = d.signed(&[queries.len(), FEATURE_CHANNELS]);
    let width = model.config.width;
    let fc = ctx.map_dims().2;
    let mut cases = Vec::new();

    let base: Arc<Vec<[f64; 2]>> = Arc::new((0..5).map(|i| [0.7 * i as f64 + 0.2, 2.9 - 0.4 * i as f64]).collect());
    cases.push(GradCase::new(
        "weighted_level_sum",
        OP_TOLERANCE,
        WeightedLevelSum,
        vec![d.signed(&[2]), d.signed(&[4, 5, 2]), d.signed(&[4, 5, 2])],
    ));
    cases.push(GradCase::new(
        "anchor_aggregate",
        OP_TOLERANCE,
        AnchorAggregate {
            base,
            visible: Arc::new(vec![true, true, false, true, true]),
            radius: 2,
        },
        vec![
            d.signed(&[5, 6, 3]),
            d.uniform(&[5, 2], -0.9, 0.9),
            d.uniform(&[5, 2], 0.4, 2.0),
            d.uniform(&[5, 1], 0.1, 0.9),
        ],
    ));

    let (m, l, q) = (model.clone(), layout.clone(), queries.clone());
    cases.push(with_params("scatter_queries", OP_TOLERANCE, &store, vec![qf.clone()], move |t, p, x| {
        let tri = scatter_queries(t, p, &m.scatter, &l, &q, Some(x[0]))?;
        let tri = count_normalize(t, &tri)?;
        m.merge.forward(t, p, &l, &tri.planes, None)
    }));
    for pk in PlaneKind::ALL {
        let (m, l) = (model.clone(), layout.clone());
        let (a, b) = pk.extents(grid.dims);
        cases.push(with_params(
            &format!("refine_plane_{}", pk.name()),
            OP_TOLERANCE,
            &store,
            vec![d.signed(&[a, b, width])],
            move |t, p, x| refine_plane(t, p, &m.refine[pk.index()], l.stencil(pk), x[0]),
        ));
    }
    let planes: Vec<NdBuffer> = PlaneKind::ALL
        .iter()
        .map(|pk| {
            let (a, b) = pk.extents(grid.dims);
            d.signed(&[a, b, width])
        })
        .collect();
    let (m, l) = (model.clone(), layout.clone());
    cases.push(with_params("gather_merge", OP_TOLERANCE, &store, planes, move |t, p, x| {
        m.merge.forward(t, p, &l, &[x[0], x[1], x[2]], None)
    }));
    let m = model.clone();
    cases.push(with_params("decode_anchor", OP_TOLERANCE, &store, vec![d.signed(&[7, width])], move |t, p, x| {
        let (delta, sigma, alpha) = m.decoder.forward(t, p, x[0])?;
        t.concat_cols(&[delta, sigma, alpha])
    }));
    let m = model.clone();
    let open = Arc::new((0..7).map(|i| if i == 3 { 0.0 } else { 1.0 }).collect::<Vec<_>>());
    cases.push(with_params(
        "gated_fuse",
        OP_TOLERANCE,
        &store,
        vec![d.signed(&[7, width]), d.signed(&[7, fc])],
        move |t, p, x| gated_fuse(t, p, &m.gate, x[0], x[1], Some(open.clone())),
    ));
    let (m, l) = (model.clone(), layout.clone());
    cases.push(with_params("occupancy_head", OP_TOLERANCE, &store, vec![d.signed(&[n, width])], move |t, p, x| {
        m.head.forward(t, p, &l, x[0])
    }));

    let labels: Arc<Vec<Option<bool>>> =
        Arc::new((0..n).map(|v| if v % 7 == 0 { None } else { Some(v % 3 == 0) }).collect());
    let weights = Stage1LossWeights::default();
    let (m, l, c, q) = (model.clone(), layout.clone(), ctx.clone(), queries.clone());
    cases.push(with_params("stage1_pipeline", PIPELINE_TOLERANCE, &store, vec![qf], move |t, p, x| {
        let out = stage1_forward(t, p, &m, &l, &c, &q, Some(x[0]))?;
        let g = out.gaussians.map(|(delta, sigma, _)| (delta, sigma));
        stage1_loss(t, out.logits, labels.clone(), g, &weights)
    }));
    Ok(cases)
}

fn stage2_cases(d: &mut Data) -> Result<Vec<GradCase>> {
    let (grid, ctx) = miniature_scene(FEATURE_CHANNELS, 4);
    let ctx = Arc::new(ctx);
    let layout = Arc::new(TriplaneLayout::new(grid.dims));
    let n = grid.num_voxels();
    let mut store = ParamStore::new();
    let model = Arc::new(Stage2Model::new(&mut store, small_stage2(), grid.dims, &mut d.0)?);
    perturbed(&mut store, &mut d.0);
    let width = model.config.width;
    let mask: Arc<Vec<bool>> = Arc::new((0..n).map(|v| (v * 5) % 3 != 0).collect());
    let (fh, fw, fc) = ctx.map_dims();
    let mut cases = Vec::new();

    let mk = mask.clone();
    cases.push(GradCase::new(
        "occupancy_gate",
        OP_TOLERANCE,
        FnKernel::new("occupancy_gate", move |t: &mut Tape, x: &[Var]| occupancy_gate(t, x[0], &mk)),
        vec![d.signed(&[n, width])],
    ));
    let (m, c, mk) = (model.clone(), ctx.clone(), mask.clone());
    cases.push(with_params(
        "condition_tokens",
        OP_TOLERANCE,
        &store,
        vec![d.signed(&[n, width]), d.signed(&[fh, fw, fc])],
        move |t, p, x| condition_tokens(t, p, &m.condition, x[0], &mk, &c, x[1]),
    ));
    let m = model.clone();
    let refs: Arc<Vec<[f64; 2]>> = Arc::new((0..6).map(|i| [0.9 * i as f64 + 0.3, 0.5 * i as f64 + 0.2]).collect());
    cases.push(with_params(
        "deform_sample_attend",
        OP_TOLERANCE,
        &store,
        vec![d.signed(&[6, width]), d.signed(&[5, 6, width])],
        move |t, p, x| deform_sample_attend(t, p, &m.self_attn[0], x[0], refs.clone(), x[1]),
    ));
    let planes: Vec<NdBuffer> = PlaneKind::ALL
        .iter()
        .map(|pk| {
            let (a, b) = pk.extents(grid.dims);
            d.signed(&[a, b, width])
        })
        .collect();
    let (m, l) = (model.clone(), layout.clone());
    cases.push(with_params("decode_plane_gaussians", OP_TOLERANCE, &store, planes.clone(), move |t, p, x| {
        let g = m.geometry.forward(t, p, &l, &[x[0], x[1], x[2]], None)?;
        let (theta, alpha) = m.decoder.forward(t, p, g)?;
        t.concat_cols(&[theta, alpha])
    }));
    for pk in PlaneKind::ALL {
        let (l, mk) = (layout.clone(), mask.clone());
        cases.push(GradCase::new(
            &format!("pool_to_plane_{}", pk.name()),
            OP_TOLERANCE,
            FnKernel::new("pool_to_plane", move |t: &mut Tape, x: &[Var]| pool_to_plane(t, &l, pk, x[0], &mk)),
            vec![d.signed(&[n, 2])],
        ));
    }
    cases.push(GradCase::new(
        "local_gather",
        OP_TOLERANCE,
        LocalGather,
        vec![d.signed(&[5, 6, 2]), d.uniform(&[30, 2], 0.35, 1.9)],
    ));
    cases.push(GradCase::new(
        "global_aggregate",
        OP_TOLERANCE,
        GlobalAggregate,
        vec![d.signed(&[5, 6, 2]), d.uniform(&[30, 2], 0.35, 1.9), d.uniform(&[30, 1], 0.1, 0.9)],
    ));
    cases.push(GradCase::new(
        "blend",
        OP_TOLERANCE,
        Blend::new(0.3)?,
        vec![d.signed(&[5, 6, 2]), d.signed(&[5, 6, 2])],
    ));
    let (m, l) = (model.clone(), layout.clone());
    cases.push(with_params("lift_merge", OP_TOLERANCE, &store, planes, move |t, p, x| {
        m.lift.forward(t, p, &l, &[x[0], x[1], x[2]], None)
    }));
    let m = model.clone();
    cases.push(with_params("semantic_head", OP_TOLERANCE, &store, vec![d.signed(&[9, width])], move |t, p, x| {
        m.head.forward(t, p, x[0])
    }));

    let labels: Arc<Vec<u8>> = Arc::new(
        (0..n)
            .map(|v| if v % 11 == 0 { UNKNOWN } else if mask[v] { 1 + (v % 3) as u8 } else { 0 })
            .collect(),
    );
    let valid: Arc<Vec<bool>> = Arc::new((0..n).map(|v| v % 13 != 0).collect());
    let weights = Stage2LossWeights {
        class_weights: vec![0.5, 1.0, 1.5, 2.0],
        ..Stage2LossWeights::uniform(4)
    };
    let (m, l, c, mk) = (model.clone(), layout.clone(), ctx.clone(), mask.clone());
    cases.push(with_params("stage2_pipeline", PIPELINE_TOLERANCE, &store, Vec::new(), move |t, p, _| {
        let out = stage2_forward(t, p, &m, &l, &c, &mk)?;
        stage2_loss(t, out.logits, &labels, &valid, &weights)
    }));
    Ok(cases)
}

/// Every case of the gradient suite, in report order.
pub fn default_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut d = Data(ModelRng::seed_from_u64(seed));
    let mut cases = tensor_cases(&mut d);
    cases.extend(loss_cases(&mut d));
    cases.extend(stage1_cases(&mut d)?);
    cases.extend(stage2_cases(&mut d)?);
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn case_names_are_unique() {
        let cases = default_suite(0).unwrap();
        let mut names: Vec<&str> = cases.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        let before = names.len();
        names.dedup();
        assert_eq!(before, names.len());
        assert!(names.contains(&"stage1_pipeline") && names.contains(&"stage2_pipeline"));
    }
}
