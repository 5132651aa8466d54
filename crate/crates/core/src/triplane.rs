//! Query-conditioned triplanes: axis positional codes, scatter of voxel
//! queries onto three orthogonal planes, count normalization, 2D refinement,
//! deformable sampling attention and the voxel gather/merge.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{glorot, Linear, Mlp, ModelRng};
use crate::tensor::conv::{Stencil, StencilConv};
use crate::tensor::ops::{BilinearSample, ScatterAddRows, WeightedSumK};
use crate::tensor::{Bound, NdBuffer, ParamId, ParamStore, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PlaneKind {
    Hw,
    Hd,
    Wd,
}

impl PlaneKind {
    pub const ALL: [PlaneKind; 3] = [PlaneKind::Hw, PlaneKind::Hd, PlaneKind::Wd];

    /// Grid axes spanned by the plane; the remaining axis is collapsed.
    pub fn axes(self) -> (usize, usize) {
        match self {
            PlaneKind::Hw => (0, 1),
            PlaneKind::Hd => (0, 2),
            PlaneKind::Wd => (1, 2),
        }
    }

    pub fn missing_axis(self) -> usize {
        match self {
            PlaneKind::Hw => 2,
            PlaneKind::Hd => 1,
            PlaneKind::Wd => 0,
        }
    }

    pub fn extents(self, dims: [usize; 3]) -> (usize, usize) {
        let (a, b) = self.axes();
        (dims[a], dims[b])
    }

    pub fn project(self, idx: [usize; 3]) -> (usize, usize) {
        let (a, b) = self.axes();
        (idx[a], idx[b])
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            PlaneKind::Hw => "hw",
            PlaneKind::Hd => "hd",
            PlaneKind::Wd => "wd",
        }
    }
}

/// Index maps between a voxel grid and its three planes.
#[derive(Debug)]
pub struct TriplaneLayout {
    pub dims: [usize; 3],
    voxel_cells: [Arc<Vec<usize>>; 3],
    stencils: [Arc<Stencil>; 3],
    axis_index: [[Arc<Vec<usize>>; 2]; 3],
    grid_stencils: [Arc<Stencil>; 2],
    voxel_axes: [Arc<Vec<usize>>; 3],
}

impl TriplaneLayout {
    pub fn new(dims: [usize; 3]) -> Self {
        let n: usize = dims.iter().product();
        let voxel_cells = PlaneKind::ALL.map(|p| {
            let (_, b) = p.extents(dims);
            Arc::new(
                (0..n)
                    .map(|v| {
                        let idx = unravel(dims, v);
                        let (i, j) = p.project(idx);
                        i * b + j
                    })
                    .collect(),
            )
        });
        let stencils = PlaneKind::ALL.map(|p| {
            let (a, b) = p.extents(dims);
            Arc::new(Stencil::plane3x3(a, b))
        });
        let axis_index = PlaneKind::ALL.map(|p| {
            let (a, b) = p.extents(dims);
            [
                Arc::new((0..a * b).map(|c| c / b).collect()),
                Arc::new((0..a * b).map(|c| c % b).collect()),
            ]
        });
        Self {
            dims,
            voxel_cells,
            stencils,
            axis_index,
            grid_stencils: [1, 2].map(|d| Arc::new(Stencil::grid3(dims, d))),
            voxel_axes: [0, 1, 2].map(|a| Arc::new((0..n).map(|v| unravel(dims, v)[a]).collect())),
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn cells(&self, plane: PlaneKind) -> usize {
        let (a, b) = plane.extents(self.dims);
        a * b
    }

    pub fn plane_shape(&self, plane: PlaneKind, channels: usize) -> [usize; 3] {
        let (a, b) = plane.extents(self.dims);
        [a, b, channels]
    }

    pub fn cell_of(&self, plane: PlaneKind, idx: [usize; 3]) -> usize {
        let (_, b) = plane.extents(self.dims);
        let (i, j) = plane.project(idx);
        i * b + j
    }

    /// Plane cell of every voxel, in linear voxel order.
    pub fn voxel_cells(&self, plane: PlaneKind) -> &Arc<Vec<usize>> {
        &self.voxel_cells[plane.index()]
    }

    pub fn stencil(&self, plane: PlaneKind) -> &Arc<Stencil> {
        &self.stencils[plane.index()]
    }

    /// Index along grid axis `axis` of every voxel, in linear voxel order.
    pub fn voxel_axis(&self, axis: usize) -> &Arc<Vec<usize>> {
        &self.voxel_axes[axis]
    }

    /// 3x3x3 voxel neighborhood with dilation 1 or 2.
    pub fn grid_stencil(&self, dilation: usize) -> &Arc<Stencil> {
        &self.grid_stencils[dilation - 1]
    }

    /// Stored floats of three `channels`-wide planes.
    pub fn triplane_floats(&self, channels: usize) -> usize {
        PlaneKind::ALL.iter().map(|&p| self.cells(p)).sum::<usize>() * channels
    }

    /// Stored floats of the equivalent dense volume.
    pub fn dense_floats(&self, channels: usize) -> usize {
        self.num_voxels() * channels
    }

    pub fn check_voxel(&self, idx: [usize; 3]) -> Result<()> {
        if idx.iter().zip(&self.dims).any(|(i, d)| i >= d) {
            return Err(Error::index(format!("voxel {idx:?} outside grid {:?}", self.dims)));
        }
        Ok(())
    }
}

fn unravel(dims: [usize; 3], v: usize) -> [usize; 3] {
    [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]]
}

/// Learned per-axis embeddings fused into per-plane positional codes.
#[derive(Clone, Copy, Debug)]
pub struct AxisEmbeddings {
    pub axes: [ParamId; 3],
    pub fuse: Mlp,
    pub width: usize,
}

impl AxisEmbeddings {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        width: usize,
        code_width: usize,
        rng: &mut ModelRng,
    ) -> Self {
        let axes = [0, 1, 2].map(|a| {
            let data = (0..dims[a] * width).map(|_| rng.random_range(-1.0..1.0)).collect();
            store.add(
                format!("{name}.axis{a}"),
                NdBuffer::new(&[dims[a], width], data).expect("shape"),
            )
        });
        let fuse = Mlp::new(store, &format!("{name}.fuse"), [2 * width, code_width, code_width], rng);
        Self { axes, fuse, width }
    }

    /// Codes of every cell of `plane`, `[cells x code_width]`.
    pub fn plane_codes(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layout: &TriplaneLayout,
        plane: PlaneKind,
    ) -> Result<Var> {
        let (a, b) = plane.axes();
        let [ia, ib] = &layout.axis_index[plane.index()];
        let ea = tape.gather_rows(p.var(self.axes[a]), ia.clone())?;
        let eb = tape.gather_rows(p.var(self.axes[b]), ib.clone())?;
        let cat = tape.concat_cols(&[ea, eb])?;
        self.fuse.forward(tape, p, cat)
    }

    /// Code of one plane cell.
    pub fn plane_code(
        &self,
        store: &ParamStore,
        dims: [usize; 3],
        plane: PlaneKind,
        cell: (usize, usize),
    ) -> Result<Vec<f64>> {
        let (ea, eb) = plane.extents(dims);
        if cell.0 >= ea || cell.1 >= eb {
            return Err(Error::index(format!(
                "cell {cell:?} outside {} plane {ea}x{eb}",
                plane.name()
            )));
        }
        let (a, b) = plane.axes();
        let mut input = store.get(self.axes[a]).row(cell.0).to_vec();
        input.extend_from_slice(store.get(self.axes[b]).row(cell.1));
        Ok(self.fuse.eval(store, &input))
    }
}

/// Concat-then-MLP merge of the three plane reads at a voxel.
///
/// The first layer acts on `[P_hw; P_hd; P_wd]`; its weight is stored as
/// three per-plane blocks so the product can be taken once per plane cell
/// and gathered per voxel.
#[derive(Clone, Copy, Debug)]
pub struct MergeMlp {
    pub blocks: [ParamId; 3],
    pub bias: ParamId,
    pub out: Linear,
    pub width: usize,
    pub hidden: usize,
}

impl MergeMlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        out_width: usize,
        rng: &mut ModelRng,
    ) -> Self {
        let full = glorot(rng, 3 * width, hidden, 1.0);
        let blocks = [0, 1, 2].map(|k| {
            let data = full.data()[k * width * hidden..(k + 1) * width * hidden].to_vec();
            store.add(
                format!("{name}.block{k}"),
                NdBuffer::new(&[width, hidden], data).expect("shape"),
            )
        });
        let bias = store.add(format!("{name}.bias"), NdBuffer::zeros(&[hidden]));
        let out = Linear::new(store, &format!("{name}.out"), hidden, out_width, 1.0, rng);
        Self {
            blocks,
            bias,
            out,
            width,
            hidden,
        }
    }

    /// Merged descriptors `[N x out]` for the given voxels (all voxels when
    /// `voxels` is `None`). Planes are `[A x B x width]` or `[cells x width]`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        layout: &TriplaneLayout,
        planes: &[Var; 3],
        voxels: Option<&[usize]>,
    ) -> Result<Var> {
        let mut acc = None;
        for plane in PlaneKind::ALL {
            let proj = tape.matmul(planes[plane.index()], p.var(self.blocks[plane.index()]))?;
            let cells = layout.voxel_cells(plane);
            let index = match voxels {
                None => cells.clone(),
                Some(vs) => Arc::new(vs.iter().map(|&v| cells[v]).collect()),
            };
            let read = tape.gather_rows(proj, index)?;
            acc = Some(match acc {
                None => read,
                Some(a) => tape.add(a, read)?,
            });
        }
        let h = tape.add_bias(acc.expect("three planes"), p.var(self.bias))?;
        let h = tape.relu(h)?;
        self.out.forward(tape, p, h)
    }

    /// Direct evaluation on a concatenated `[3 * width]` read.
    pub fn eval_concat(&self, store: &ParamStore, concat: &[f64]) -> Vec<f64> {
        let mut h = store.get(self.bias).data().to_vec();
        for (k, block) in self.blocks.iter().enumerate() {
            let w = store.get(*block).data();
            for (i, &x) in concat[k * self.width..(k + 1) * self.width].iter().enumerate() {
                for (o, wv) in h.iter_mut().zip(&w[i * self.hidden..(i + 1) * self.hidden]) {
                    *o += x * wv;
                }
            }
        }
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        self.out.eval(store, &h)
    }
}

/// Three planes on a tape plus their per-cell contribution counts.
#[derive(Clone, Debug)]
pub struct Triplane {
    pub planes: [Var; 3],
    pub counts: [Vec<usize>; 3],
    pub channels: usize,
}

impl Triplane {
    pub fn zeros(tape: &mut Tape, layout: &TriplaneLayout, channels: usize) -> Self {
        let planes = PlaneKind::ALL.map(|p| tape.constant(NdBuffer::zeros(&layout.plane_shape(p, channels))));
        let counts = PlaneKind::ALL.map(|p| vec![0; layout.cells(p)]);
        Self {
            planes,
            counts,
            channels,
        }
    }

    pub fn plane(&self, p: PlaneKind) -> Var {
        self.planes[p.index()]
    }
}

/// Scatter parameters: positional codes, per-plane projections and scales.
#[derive(Clone, Copy, Debug)]
pub struct ScatterParams {
    pub embeddings: AxisEmbeddings,
    pub projections: [Mlp; 3],
    pub scales: [ParamId; 3],
    pub feature_width: usize,
    pub channels: usize,
}

impl ScatterParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        feature_width: usize,
        embed_width: usize,
        channels: usize,
        rng: &mut ModelRng,
    ) -> Self {
        let embeddings = AxisEmbeddings::new(store, &format!("{name}.pe"), dims, embed_width, channels, rng);
        let projections = PlaneKind::ALL.map(|p| {
            Mlp::new(
                store,
                &format!("{name}.psi_{}", p.name()),
                [feature_width + channels, channels, channels],
                rng,
            )
        });
        let scales = PlaneKind::ALL.map(|p| store.add(format!("{name}.scale_{}", p.name()), NdBuffer::scalar(1.0)));
        Self {
            embeddings,
            projections,
            scales,
            feature_width,
            channels,
        }
    }
}

/// Rasterizes voxel queries onto the three planes:
/// `P[pi(x_q)] += s_P * psi_P([t_q; rho_P(pi(x_q))])`.
pub fn scatter_queries(
    tape: &mut Tape,
    p: &Bound,
    params: &ScatterParams,
    layout: &TriplaneLayout,
    voxels: &[[usize; 3]],
    features: Option<Var>,
) -> Result<Triplane> {
    for &idx in voxels {
        layout.check_voxel(idx)?;
    }
    let d = params.channels;
    let features = match features {
        Some(f) if !voxels.is_empty() => {
            let fb = tape.value(f);
            if fb.rows() != voxels.len() || fb.cols() != params.feature_width {
                return Err(Error::dim(format!(
                    "{} queries but features are {:?} (width {} expected)",
                    voxels.len(),
                    fb.shape(),
                    params.feature_width
                )));
            }
            f
        }
        _ => return Ok(Triplane::zeros(tape, layout, d)),
    };
    let mut planes = Vec::with_capacity(3);
    let mut counts = Vec::with_capacity(3);
    for plane in PlaneKind::ALL {
        let cells: Vec<usize> = voxels.iter().map(|&v| layout.cell_of(plane, v)).collect();
        let codes = params.embeddings.plane_codes(tape, p, layout, plane)?;
        let qcodes = tape.gather_rows(codes, Arc::new(cells.clone()))?;
        let input = tape.concat_cols(&[features, qcodes])?;
        let proj = params.projections[plane.index()].forward(tape, p, input)?;
        let scaled = tape.mul_scalar(proj, p.var(params.scales[plane.index()]))?;
        let scatter = ScatterAddRows::new(&layout.plane_shape(plane, d), &cells)?;
        counts.push(scatter.counts());
        planes.push(tape.apply(scatter, &[scaled])?);
    }
    Ok(Triplane {
        planes: [planes[0], planes[1], planes[2]],
        counts: [counts[0].clone(), counts[1].clone(), counts[2].clone()],
        channels: d,
    })
}

/// Divides every cell by `max(count, 1)`.
pub fn count_normalize(tape: &mut Tape, tri: &Triplane) -> Result<Triplane> {
    let mut planes = tri.planes;
    for (k, plane) in planes.iter_mut().enumerate() {
        let scales: Vec<f64> = tri.counts[k].iter().map(|&c| 1.0 / c.max(1) as f64).collect();
        *plane = tape.row_scale(*plane, Arc::new(scales))?;
    }
    Ok(Triplane {
        planes,
        counts: tri.counts.clone(),
        channels: tri.channels,
    })
}

/// 3x3 local mixing and a pointwise FFN, each with a residual connection.
#[derive(Clone, Copy, Debug)]
pub struct RefineParams {
    pub mix_weight: ParamId,
    pub mix_bias: ParamId,
    pub ffn: Mlp,
}

impl RefineParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ModelRng) -> Self {
        let mix_weight = store.add(format!("{name}.mix.weight"), glorot(rng, 9 * channels, channels, 0.5));
        let mix_bias = store.add(format!("{name}.mix.bias"), NdBuffer::zeros(&[channels]));
        let hidden = Linear::new(store, &format!("{name}.ffn.0"), channels, 2 * channels, 1.0, rng);
        let out = Linear::zeroed(store, &format!("{name}.ffn.1"), 2 * channels, channels);
        Self {
            mix_weight,
            mix_bias,
            ffn: Mlp { hidden, out },
        }
    }
}

pub fn refine_plane(
    tape: &mut Tape,
    p: &Bound,
    params: &RefineParams,
    stencil: &Arc<Stencil>,
    plane: Var,
) -> Result<Var> {
    let mixed = tape.apply(
        StencilConv {
            stencil: stencil.clone(),
        },
        &[plane, p.var(params.mix_weight), p.var(params.mix_bias)],
    )?;
    let x1 = tape.add(plane, mixed)?;
    let f = params.ffn.forward(tape, p, x1)?;
    tape.add(x1, f)
}

/// Single-head deformable sampling attention with `points` sampling
/// locations per query.
#[derive(Clone, Copy, Debug)]
pub struct DeformAttnParams {
    pub offsets: Linear,
    pub weights: Linear,
    pub value: Linear,
    pub points: usize,
}

impl DeformAttnParams {
    /// Offsets start on a unit ring around the reference point.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_width: usize,
        value_width: usize,
        out_width: usize,
        points: usize,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        if points == 0 {
            return Err(Error::config("deformable attention needs at least one sampling point"));
        }
        let offsets = Linear::new(store, &format!("{name}.offsets"), query_width, 2 * points, 0.1, rng);
        if points > 1 {
            let bias = store.get_mut(offsets.bias);
            for k in 0..points {
                let a = TAU * k as f64 / points as f64;
                bias.data_mut()[2 * k] = a.cos();
                bias.data_mut()[2 * k + 1] = a.sin();
            }
        }
        let weights = Linear::new(store, &format!("{name}.weights"), query_width, points, 0.1, rng);
        let value = Linear::new(store, &format!("{name}.value"), value_width, out_width, 1.0, rng);
        Ok(Self {
            offsets,
            weights,
            value,
            points,
        })
    }
}

/// For each query row: predict `points` offsets and softmax weights, read
/// the target bilinearly at `reference + offset`, mix the reads with the
/// weights and project. Because the weights sum to one, projecting the mixed
/// read equals mixing the projected reads.
pub fn deform_sample_attend(
    tape: &mut Tape,
    p: &Bound,
    params: &DeformAttnParams,
    queries: Var,
    references: Arc<Vec<[f64; 2]>>,
    target: Var,
) -> Result<Var> {
    let offsets = params.offsets.forward(tape, p, queries)?;
    let logits = params.weights.forward(tape, p, queries)?;
    let weights = tape.softmax_rows(logits)?;
    let reads = tape.apply(
        BilinearSample {
            base: Some(references),
        },
        &[target, offsets],
    )?;
    let mixed = tape.apply(WeightedSumK, &[weights, reads])?;
    params.value.forward(tape, p, mixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, FnKernel};
    use rand::SeedableRng;

    fn rng() -> ModelRng {
        ModelRng::seed_from_u64(7)
    }

    #[test]
    fn plane_code_zero_and_pure() {
        let dims = [4, 3, 2];
        let mut store = ParamStore::new();
        let emb = AxisEmbeddings::new(&mut store, "pe", dims, 3, 5, &mut rng());
        let a = emb.plane_code(&store, dims, PlaneKind::Hd, (1, 1)).unwrap();
        assert_eq!(a, emb.plane_code(&store, dims, PlaneKind::Hd, (1, 1)).unwrap());
        for v in store.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let z = emb.plane_code(&store, dims, PlaneKind::Hw, (3, 2)).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        assert!(matches!(
            emb.plane_code(&store, dims, PlaneKind::Wd, (3, 0)),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn plane_codes_match_single_cell_evaluation() {
        let dims = [4, 3, 2];
        let layout = TriplaneLayout::new(dims);
        let mut store = ParamStore::new();
        let emb = AxisEmbeddings::new(&mut store, "pe", dims, 3, 5, &mut rng());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        for plane in PlaneKind::ALL {
            let codes = emb.plane_codes(&mut tape, &p, &layout, plane).unwrap();
            let (_, b) = plane.extents(dims);
            for c in 0..layout.cells(plane) {
                let single = emb.plane_code(&store, dims, plane, (c / b, c % b)).unwrap();
                let row = tape.value(codes).row(c);
                assert!(row.iter().zip(&single).all(|(x, y)| (x - y).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn plane_code_gradient_wrt_axis_embedding() {
        let dims = [4, 3, 2];
        let layout = Arc::new(TriplaneLayout::new(dims));
        let mut store = ParamStore::new();
        let emb = AxisEmbeddings::new(&mut store, "pe", dims, 3, 5, &mut rng());
        let values = store.values().to_vec();
        let k = FnKernel::new("plane_code", move |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            emb.plane_codes(tape, &p, &layout, PlaneKind::Hw)
        });
        let err = grad_check(&k, &values, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn triplane_memory_is_smaller_than_dense() {
        let layout = TriplaneLayout::new([256, 256, 32]);
        assert_eq!(layout.triplane_floats(1), 256 * 256 + 2 * 256 * 32);
        assert!(layout.triplane_floats(32) < layout.dense_floats(32));
        // Strictly smaller exactly when 1/X + 1/Y + 1/Z < 1.
        for x in 2..8 {
            for y in 2..8 {
                for z in 2..8 {
                    let l = TriplaneLayout::new([x, y, z]);
                    let smaller = l.triplane_floats(4) < l.dense_floats(4);
                    assert_eq!(smaller, x * y + x * z + y * z < x * y * z, "{x}x{y}x{z}");
                }
            }
        }
        assert!(!(TriplaneLayout::new([2, 2, 2]).triplane_floats(1) < 8));
    }

    fn scatter_setup(dims: [usize; 3]) -> (TriplaneLayout, ParamStore, ScatterParams) {
        let layout = TriplaneLayout::new(dims);
        let mut store = ParamStore::new();
        let params = ScatterParams::new(&mut store, "sc", dims, 3, 4, 5, &mut rng());
        (layout, store, params)
    }

    fn features(n: usize, w: usize) -> NdBuffer {
        NdBuffer::new(&[n, w], (0..n * w).map(|i| ((i * 37) % 11) as f64 * 0.2 - 1.0).collect()).unwrap()
    }

    fn nonzero_cells(b: &NdBuffer) -> usize {
        (0..b.rows()).filter(|&r| b.row(r).iter().any(|&x| x != 0.0)).count()
    }

    #[test]
    fn scatter_empty_and_single() {
        let (layout, mut store, params) = scatter_setup([4, 3, 2]);
        for m in &params.projections {
            store.get_mut(m.hidden.bias).data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let tri = scatter_queries(&mut tape, &p, &params, &layout, &[], None).unwrap();
        for k in 0..3 {
            assert!(tape.value(tri.planes[k]).data().iter().all(|&x| x == 0.0));
            assert!(tri.counts[k].iter().all(|&c| c == 0));
        }
        let f = tape.constant(features(1, 3));
        let tri = scatter_queries(&mut tape, &p, &params, &layout, &[[2, 1, 1]], Some(f)).unwrap();
        for k in 0..3 {
            assert_eq!(nonzero_cells(tape.value(tri.planes[k])), 1);
            assert_eq!(tri.counts[k].iter().sum::<usize>(), 1);
        }
    }

    #[test]
    fn scatter_shared_hw_cell_counts_two() {
        let (layout, store, params) = scatter_setup([4, 3, 2]);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let f = tape.constant(features(2, 3));
        let tri = scatter_queries(&mut tape, &p, &params, &layout, &[[1, 2, 0], [1, 2, 1]], Some(f)).unwrap();
        let hw = layout.cell_of(PlaneKind::Hw, [1, 2, 0]);
        assert_eq!(tri.counts[0][hw], 2);
        assert_eq!(tri.counts[1].iter().filter(|&&c| c == 1).count(), 2);
        assert!(matches!(
            scatter_queries(&mut tape, &p, &params, &layout, &[[4, 0, 0]], Some(f)),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn count_normalize_means() {
        let layout = TriplaneLayout::new([2, 2, 2]);
        let mut tape = Tape::new();
        let mut tri = Triplane::zeros(&mut tape, &layout, 2);
        let mut hw = NdBuffer::zeros(&[2, 2, 2]);
        hw.data_mut()[..2].copy_from_slice(&[3.0, 5.0]);
        hw.data_mut()[2..4].copy_from_slice(&[4.0, 4.0]);
        tri.planes[0] = tape.constant(hw);
        tri.counts[0] = vec![2, 1, 0, 0];
        let n = count_normalize(&mut tape, &tri).unwrap();
        let out = tape.value(n.planes[0]);
        assert_eq!(out.row(0), &[1.5, 2.5]);
        assert_eq!(out.row(1), &[4.0, 4.0]);
        assert_eq!(out.row(2), &[0.0, 0.0]);
        assert_eq!(n.counts, tri.counts);
    }

    #[test]
    fn scatter_normalize_is_permutation_invariant() {
        let (layout, store, params) = scatter_setup([4, 3, 2]);
        let voxels = [[0, 0, 0], [1, 2, 1], [0, 0, 1], [3, 1, 0], [1, 2, 0]];
        let fb = features(5, 3);
        let perm = [3, 0, 4, 2, 1];
        let run = |order: &[usize]| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let vs: Vec<_> = order.iter().map(|&i| voxels[i]).collect();
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| fb.row(i).to_vec()).collect();
            let f = tape.constant(NdBuffer::from_rows(&rows).unwrap());
            let tri = scatter_queries(&mut tape, &p, &params, &layout, &vs, Some(f)).unwrap();
            let n = count_normalize(&mut tape, &tri).unwrap();
            n.planes.map(|v| tape.value(v).clone())
        };
        let a = run(&[0, 1, 2, 3, 4]);
        let b = run(&perm);
        for k in 0..3 {
            assert!(a[k].max_abs_diff(&b[k]) < 1e-15);
        }
    }

    fn plane_buffer(a: usize, b: usize, c: usize, f: impl Fn(usize) -> f64) -> NdBuffer {
        NdBuffer::new(&[a, b, c], (0..a * b * c).map(f).collect()).unwrap()
    }

    #[test]
    fn refine_identity_and_constant() {
        let mut store = ParamStore::new();
        let params = RefineParams::new(&mut store, "r", 3, &mut rng());
        let stencil = Arc::new(Stencil::plane3x3(4, 5));
        let x = plane_buffer(4, 5, 3, |i| (i as f64 * 0.37).sin());
        let mut zeroed = ParamStore::new();
        let zp = RefineParams::new(&mut zeroed, "r", 3, &mut rng());
        zeroed.get_mut(zp.mix_weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let p = zeroed.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = refine_plane(&mut tape, &p, &zp, &stencil, xv).unwrap();
        assert!(tape.value(y).bit_eq(&x));

        let c = plane_buffer(4, 5, 3, |i| [0.3, -0.7, 1.1][i % 3]);
        let p = store.bind(&mut tape);
        let cv = tape.constant(c);
        let y = refine_plane(&mut tape, &p, &params, &stencil, cv).unwrap();
        let out = tape.value(y);
        for r in 1..out.rows() {
            assert!(out.row(r).iter().zip(out.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn refine_gradients() {
        let mut store = ParamStore::new();
        let params = RefineParams::new(&mut store, "r", 2, &mut rng());
        // move the zero-initialized FFN output off zero so both paths carry gradient
        let w = store.get_mut(params.ffn.out.weight);
        w.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.1 * ((i % 5) as f64 - 2.0));
        let stencil = Arc::new(Stencil::plane3x3(3, 4));
        let mut inputs = store.values().to_vec();
        inputs.push(plane_buffer(3, 4, 2, |i| (i as f64 * 0.61).cos()));
        let k = FnKernel::new("refine", move |tape, vars| {
            let (x, ps) = vars.split_last().unwrap();
            let p = Bound::from_vars(ps.to_vec());
            refine_plane(tape, &p, &params, &stencil, *x)
        });
        let err = grad_check(&k, &inputs, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn deform_single_point_reads_reference() {
        let mut store = ParamStore::new();
        let params = DeformAttnParams::new(&mut store, "da", 3, 2, 4, 1, &mut rng()).unwrap();
        store.get_mut(params.offsets.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let target = plane_buffer(5, 6, 2, |i| (i as f64 * 0.3).sin());
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let q = tape.constant(features(2, 3));
        let t = tape.constant(target.clone());
        let refs = Arc::new(vec![[2.25, 1.5], [0.0, 4.0]]);
        let out = deform_sample_attend(&mut tape, &p, &params, q, refs.clone(), t).unwrap();
        for (r, uv) in refs.iter().enumerate() {
            let read = crate::tensor::ops::bilinear_sample(&target, *uv).unwrap();
            let expect = params.value.eval(&store, &read);
            assert!(tape.value(out).row(r).iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        assert!(DeformAttnParams::new(&mut store, "bad", 3, 2, 4, 0, &mut rng()).is_err());
    }

    #[test]
    fn deform_weights_sum_to_one_and_uniform_target() {
        let mut store = ParamStore::new();
        let params = DeformAttnParams::new(&mut store, "da", 3, 2, 4, 4, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let q = tape.constant(features(6, 3));
        let logits = params.weights.forward(&mut tape, &p, q).unwrap();
        let w = tape.softmax_rows(logits).unwrap();
        for r in 0..6 {
            assert!((tape.value(w).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let t = tape.constant(plane_buffer(5, 6, 2, |i| [0.4, -1.3][i % 2]));
        let refs = Arc::new((0..6).map(|i| [i as f64 * 0.9, 0.7 * i as f64]).collect());
        let out = deform_sample_attend(&mut tape, &p, &params, q, refs, t).unwrap();
        let expect = params.value.eval(&store, &[0.4, -1.3]);
        for r in 0..6 {
            assert!(tape.value(out).row(r).iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    fn merge_setup(dims: [usize; 3]) -> (TriplaneLayout, ParamStore, MergeMlp, [NdBuffer; 3]) {
        let layout = TriplaneLayout::new(dims);
        let mut store = ParamStore::new();
        let m = MergeMlp::new(&mut store, "m", 3, 6, 4, &mut rng());
        store.get_mut(m.bias).data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.05 * i as f64 - 0.1);
        let planes = PlaneKind::ALL.map(|pk| {
            let (a, b) = pk.extents(dims);
            plane_buffer(a, b, 3, |i| ((i + 7 * pk.index()) as f64 * 0.41).sin())
        });
        (layout, store, m, planes)
    }

    #[test]
    fn gather_merge_matches_concat_oracle() {
        let dims = [3, 4, 2];
        let (layout, store, m, planes) = merge_setup(dims);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let vars = planes.clone().map(|b| tape.constant(b));
        let out = m.forward(&mut tape, &p, &layout, &vars, None).unwrap();
        for v in 0..layout.num_voxels() {
            let idx = unravel(dims, v);
            let mut concat = Vec::new();
            for pk in PlaneKind::ALL {
                concat.extend_from_slice(planes[pk.index()].row(layout.cell_of(pk, idx)));
            }
            let expect = m.eval_concat(&store, &concat);
            let got = tape.value(out).row(v);
            assert!(got.iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12), "voxel {v}");
        }
        let sub = m.forward(&mut tape, &p, &layout, &vars, Some(&[5, 0])).unwrap();
        assert!(tape.value(sub).row(0) == tape.value(out).row(5));
    }

    #[test]
    fn gather_merge_zero_planes() {
        let dims = [3, 4, 2];
        let (layout, mut store, m, _) = merge_setup(dims);
        store.get_mut(m.bias).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let tri = Triplane::zeros(&mut tape, &layout, 3);
        let out = m.forward(&mut tape, &p, &layout, &tri.planes, None).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gather_merge_gradients_reach_all_planes() {
        let dims = [3, 2, 2];
        let (layout, store, m, planes) = merge_setup(dims);
        let layout = Arc::new(layout);
        let mut inputs = store.values().to_vec();
        inputs.extend(planes);
        let np = store.len();
        let k = FnKernel::new("gather_merge", move |tape, vars| {
            let p = Bound::from_vars(vars[..np].to_vec());
            let pl = [vars[np], vars[np + 1], vars[np + 2]];
            m.forward(tape, &p, &layout, &pl, None)
        });
        let err = grad_check(&k, &inputs, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn single_query_descriptor_matches_direct_evaluation() {
        let dims = [4, 3, 2];
        let (layout, store, params) = scatter_setup(dims);
        let mut ms = store;
        let m = MergeMlp::new(&mut ms, "m", 5, 6, 4, &mut rng());
        let idx = [2, 1, 1];
        let f = features(1, 3);
        let mut tape = Tape::new();
        let p = ms.bind(&mut tape);
        let fv = tape.constant(f.clone());
        let tri = scatter_queries(&mut tape, &p, &params, &layout, &[idx], Some(fv)).unwrap();
        let tri = count_normalize(&mut tape, &tri).unwrap();
        let out = m.forward(&mut tape, &p, &layout, &tri.planes, Some(&[layout.num_voxels() / 2 + 3])).unwrap();
        let v = (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2];
        assert_eq!(v, layout.num_voxels() / 2 + 3);
        let mut concat = Vec::new();
        for pk in PlaneKind::ALL {
            let (i, j) = pk.project(idx);
            let mut input = f.row(0).to_vec();
            input.extend(params.embeddings.plane_code(&ms, dims, pk, (i, j)).unwrap());
            let psi = params.projections[pk.index()].eval(&ms, &input);
            let s = ms.get(params.scales[pk.index()]).item();
            concat.extend(psi.iter().map(|x| x * s));
        }
        let expect = m.eval_concat(&ms, &concat);
        assert!(tape.value(out).row(0).iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
