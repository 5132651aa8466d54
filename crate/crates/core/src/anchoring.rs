//! Stage 1: fused image features, Gaussian anchoring, gated fusion and the
//! dilated 3D occupancy head.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{in_image, project, voxel_center, CameraIntrinsics, CameraPose, VoxelGridSpec};
use crate::nn::{glorot, Linear, ModelRng};
use crate::par;
use crate::tensor::conv::StencilConv;
use crate::tensor::ops::{
    axpy, bilinear_sample, dot, plane_dims, sigmoid, softmax_in_place, want, BilinearSample, SoftplusClamped,
};
use crate::tensor::{Bound, Kernel, NdBuffer, ParamId, ParamStore, Tape, Var};
use crate::triplane::{
    count_normalize, refine_plane, scatter_queries, MergeMlp, PlaneKind, RefineParams, ScatterParams, TriplaneLayout,
};

/// Continuous feature-map coordinate of an image point; texel centers sit
/// on integers.
pub fn fused_coord(uv: [f64; 2], stride: f64) -> [f64; 2] {
    [uv[0] / stride - 0.5, uv[1] / stride - 0.5]
}

/// Bilinear resampling of a `[h' x w' x C]` level of stride `from` onto an
/// `h x w` grid of stride `to`.
pub fn resample_level(level: &NdBuffer, from: f64, to: f64, h: usize, w: usize) -> Result<NdBuffer> {
    let (_, _, c) = plane_dims(level)?;
    if !(from > 0.0 && to > 0.0) {
        return Err(Error::config(format!("strides must be positive, got {from} and {to}")));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for q in 0..w {
            let px = [(q as f64 + 0.5) * to, (r as f64 + 0.5) * to];
            out.extend(bilinear_sample(level, fused_coord(px, from))?);
        }
    }
    NdBuffer::new(&[h, w, c], out)
}

/// Resamples every `(level, stride)` to the common `stride` grid.
pub fn fuse_levels(levels: &[(NdBuffer, f64)], stride: f64, h: usize, w: usize) -> Result<Vec<NdBuffer>> {
    if levels.is_empty() {
        return Err(Error::config("at least one feature level is required"));
    }
    let channels = plane_dims(&levels[0].0)?.2;
    levels
        .iter()
        .map(|(l, s)| {
            if plane_dims(l)?.2 != channels {
                return Err(Error::dim("feature levels disagree on channel count"));
            }
            resample_level(l, *s, stride, h, w)
        })
        .collect()
}

/// `sum_l softmax(logits)_l * level_l`; inputs are `[logits, level_0, ...]`.
pub struct WeightedLevelSum;

impl Kernel for WeightedLevelSum {
    fn name(&self) -> &str {
        "weighted_level_sum"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (logits, levels) = inputs.split_first().ok_or_else(|| Error::config("no level weights"))?;
        if levels.is_empty() || logits.len() != levels.len() {
            return Err(Error::dim(format!(
                "{} level weights for {} levels",
                logits.len(),
                levels.len()
            )));
        }
        let mut w = logits.data().to_vec();
        softmax_in_place(&mut w);
        let mut out = NdBuffer::zeros(levels[0].shape());
        for (wl, level) in w.iter().zip(levels) {
            if level.shape() != levels[0].shape() {
                return Err(Error::dim("feature levels must share a shape after resampling"));
            }
            if *wl != 0.0 {
                axpy(*wl, level.data(), out.data_mut());
            }
        }
        Ok(out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let (logits, levels) = inputs.split_first().expect("checked in forward");
        let mut w = logits.data().to_vec();
        softmax_in_place(&mut w);
        let mut grads = vec![want(wants, 0, || {
            let s: Vec<f64> = levels.iter().map(|l| dot(g.data(), l.data())).collect();
            let mean = dot(&w, &s);
            let d = w.iter().zip(&s).map(|(wl, sl)| wl * (sl - mean)).collect();
            NdBuffer::new(logits.shape(), d).expect("shape")
        })];
        for (l, wl) in w.iter().enumerate() {
            grads.push(want(wants, l + 1, || g.map(|x| wl * x)));
        }
        Ok(grads)
    }
}

/// Image evidence for one scene: levels resampled to a common stride and
/// the fused-map coordinate and visibility of every voxel center.
#[derive(Clone, Debug)]
pub struct ImageContext {
    pub levels: Vec<NdBuffer>,
    pub stride: f64,
    pub base: Arc<Vec<[f64; 2]>>,
    pub visible: Arc<Vec<bool>>,
    /// Per plane cell: fused-map coordinate of the cell center with the
    /// collapsed axis at the middle of the region, and its visibility.
    pub plane_refs: [Arc<Vec<[f64; 2]>>; 3],
    pub plane_visible: [Arc<Vec<f64>>; 3],
}

impl ImageContext {
    pub fn new(
        levels: &[(NdBuffer, f64)],
        stride: f64,
        intr: &CameraIntrinsics,
        pose: &CameraPose,
        grid: &VoxelGridSpec,
    ) -> Result<Self> {
        let h = ((intr.height as f64) / stride).round().max(1.0) as usize;
        let w = ((intr.width as f64) / stride).round().max(1.0) as usize;
        let levels = fuse_levels(levels, stride, h, w)?;
        let n = grid.num_voxels();
        let mut base = Vec::with_capacity(n);
        let mut visible = Vec::with_capacity(n);
        for v in 0..n {
            let p = voxel_center(grid, grid.unravel(v))?;
            match project(p, intr, pose).uv() {
                Some(uv) if in_image(uv, intr) => {
                    base.push(fused_coord(uv, stride));
                    visible.push(true);
                }
                _ => {
                    base.push([0.0, 0.0]);
                    visible.push(false);
                }
            }
        }
        let mut plane_refs = Vec::with_capacity(3);
        let mut plane_visible = Vec::with_capacity(3);
        for pk in PlaneKind::ALL {
            let (a, b) = pk.axes();
            let (ea, eb) = pk.extents(grid.dims);
            let mut refs = Vec::with_capacity(ea * eb);
            let mut vis = Vec::with_capacity(ea * eb);
            for i in 0..ea {
                for j in 0..eb {
                    let mut cell = [0.0; 3];
                    cell[a] = i as f64 + 0.5;
                    cell[b] = j as f64 + 0.5;
                    cell[pk.missing_axis()] = grid.dims[pk.missing_axis()] as f64 / 2.0;
                    let p = [0, 1, 2].map(|k| grid.origin[k] + cell[k] * grid.resolution);
                    match project(p, intr, pose).uv() {
                        Some(uv) if in_image(uv, intr) => {
                            refs.push(fused_coord(uv, stride));
                            vis.push(1.0);
                        }
                        _ => {
                            refs.push([0.0, 0.0]);
                            vis.push(0.0);
                        }
                    }
                }
            }
            plane_refs.push(Arc::new(refs));
            plane_visible.push(Arc::new(vis));
        }
        let [r0, r1, r2]: [_; 3] = plane_refs.try_into().expect("three planes");
        let [v0, v1, v2]: [_; 3] = plane_visible.try_into().expect("three planes");
        Ok(Self {
            levels,
            stride,
            base: Arc::new(base),
            visible: Arc::new(visible),
            plane_refs: [r0, r1, r2],
            plane_visible: [v0, v1, v2],
        })
    }

    pub fn map_dims(&self) -> (usize, usize, usize) {
        plane_dims(&self.levels[0]).expect("levels are planes")
    }

    pub fn visibility_scales(&self) -> Arc<Vec<f64>> {
        Arc::new(self.visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())
    }

    /// Records the fused map `sum_l softmax(logits)_l F_l` on the tape.
    pub fn fused_map(&self, tape: &mut Tape, logits: Var) -> Result<Var> {
        let mut inputs = vec![logits];
        inputs.extend(self.levels.iter().map(|l| tape.constant(l.clone())));
        tape.apply(WeightedLevelSum, &inputs)
    }
}

/// Per-voxel image-plane Gaussian in feature-texel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorParams {
    pub delta: [f64; 2],
    pub sigma: [f64; 2],
    pub alpha: f64,
}

/// One texel of an anchor window.
#[derive(Clone, Copy, Debug)]
pub struct AnchorTap {
    /// Clamped texel read, `(row, col)`.
    pub texel: (usize, usize),
    /// Lattice position minus `mu`, `(du, dv)`.
    pub offset: [f64; 2],
    /// Unnormalized weight `alpha * exp(-q/2)`.
    pub raw: f64,
    pub weight: f64,
}

/// Gaussian window of `(2r+1)^2` texel centers around `round(mu)`, in
/// row-major order, with weights normalized to sum to one.
pub fn anchor_window(h: usize, w: usize, mu: [f64; 2], sigma: [f64; 2], alpha: f64, radius: usize) -> Vec<AnchorTap> {
    let mut taps = Vec::with_capacity((2 * radius + 1).pow(2));
    anchor_window_into(h, w, mu, sigma, alpha, radius, &mut taps);
    taps
}

fn anchor_window_into(
    h: usize,
    w: usize,
    mu: [f64; 2],
    sigma: [f64; 2],
    alpha: f64,
    radius: usize,
    taps: &mut Vec<AnchorTap>,
) {
    taps.clear();
    let r = radius as i64;
    let (cu, cv) = (mu[0].round() as i64, mu[1].round() as i64);
    let mut total = 0.0;
    for dv in -r..=r {
        for du in -r..=r {
            let (lu, lv) = (cu + du, cv + dv);
            let off = [lu as f64 - mu[0], lv as f64 - mu[1]];
            let q = (off[0] / sigma[0]).powi(2) + (off[1] / sigma[1]).powi(2);
            let raw = alpha * (-0.5 * q).exp();
            total += raw;
            taps.push(AnchorTap {
                texel: (lv.clamp(0, h as i64 - 1) as usize, lu.clamp(0, w as i64 - 1) as usize),
                offset: off,
                raw,
                weight: 0.0,
            });
        }
    }
    for t in taps.iter_mut() {
        t.weight = t.raw / total;
    }
}

/// Normalized `(2r+1) x (2r+1)` anchor weights for a Gaussian at `mu`.
pub fn anchor_weights(params: &AnchorParams, mu: [f64; 2], radius: usize) -> Result<NdBuffer> {
    if !(params.sigma[0] > 0.0 && params.sigma[1] > 0.0) {
        return Err(Error::Numeric(format!("anchor extents must be positive, got {:?}", params.sigma)));
    }
    let k = 2 * radius + 1;
    let taps = anchor_window(usize::MAX >> 1, usize::MAX >> 1, mu, params.sigma, params.alpha, radius);
    NdBuffer::new(&[k, k], taps.iter().map(|t| t.weight).collect())
}

/// Anchor feature `g = sum_ij w_ij F[i, j]` of one voxel.
pub fn anchor_aggregate(fmap: &NdBuffer, params: &AnchorParams, u_prime: [f64; 2], radius: usize) -> Result<Vec<f64>> {
    let (h, w, c) = plane_dims(fmap)?;
    let mu = [u_prime[0] + params.delta[0], u_prime[1] + params.delta[1]];
    let mut out = vec![0.0; c];
    for t in anchor_window(h, w, mu, params.sigma, params.alpha, radius) {
        let at = (t.texel.0 * w + t.texel.1) * c;
        axpy(t.weight, &fmap.data()[at..at + c], &mut out);
    }
    Ok(out)
}

/// Batched anchoring. Inputs are `[fmap [H x W x C], delta [N x 2],
/// sigma [N x 2], alpha [N x 1]]`; invisible voxels read zero.
pub struct AnchorAggregate {
    pub base: Arc<Vec<[f64; 2]>>,
    pub visible: Arc<Vec<bool>>,
    pub radius: usize,
}

impl AnchorAggregate {
    fn taps_into(&self, h: usize, w: usize, inputs: &[&NdBuffer], n: usize, taps: &mut Vec<AnchorTap>) {
        let (d, s) = (inputs[1].row(n), inputs[2].row(n));
        let b = self.base[n];
        let mu = [b[0] + d[0], b[1] + d[1]];
        anchor_window_into(h, w, mu, [s[0], s[1]], inputs[3].row(n)[0], self.radius, taps);
    }
}

impl Kernel for AnchorAggregate {
    fn name(&self) -> &str {
        "anchor_aggregate"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (h, w, c) = plane_dims(inputs[0])?;
        let n = self.base.len();
        for (k, cols) in [(1, 2), (2, 2), (3, 1)] {
            if inputs[k].rank() != 2 || inputs[k].rows() != n || inputs[k].cols() != cols {
                return Err(Error::dim(format!(
                    "anchor input {k} is {:?}, expected [{n} x {cols}]",
                    inputs[k].shape()
                )));
            }
        }
        if inputs[2].data().iter().any(|&s| s <= 0.0) {
            return Err(Error::Numeric("anchor extents must be positive".into()));
        }
        let fd = inputs[0].data();
        let mut out = vec![0.0; n * c];
        par::for_each_row(&mut out, c, |i, row| {
            if self.visible[i] {
                let mut taps = Vec::new();
                self.taps_into(h, w, inputs, i, &mut taps);
                for t in &taps {
                    let at = (t.texel.0 * w + t.texel.1) * c;
                    axpy(t.weight, &fd[at..at + c], row);
                }
            }
        });
        NdBuffer::new(&[n, c], out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let (h, w, c) = plane_dims(inputs[0])?;
        let n = self.base.len();
        let fd = inputs[0].data();
        let mut dmap = wants[0].then(|| NdBuffer::zeros(inputs[0].shape()));
        let want_params = wants[1] || wants[2];
        let mut ddelta = vec![0.0; if wants[1] { 2 * n } else { 0 }];
        let mut dsigma = vec![0.0; if wants[2] { 2 * n } else { 0 }];
        let mut taps = Vec::new();
        let mut s = Vec::new();
        for i in (0..n).filter(|&i| self.visible[i]) {
            self.taps_into(h, w, inputs, i, &mut taps);
            let gi = g.row(i);
            if let Some(dm) = dmap.as_mut() {
                let od = dm.data_mut();
                for t in &taps {
                    let at = (t.texel.0 * w + t.texel.1) * c;
                    axpy(t.weight, gi, &mut od[at..at + c]);
                }
            }
            if !want_params {
                continue;
            }
            s.clear();
            s.extend(taps.iter().map(|t| {
                let at = (t.texel.0 * w + t.texel.1) * c;
                dot(gi, &fd[at..at + c])
            }));
            let mean: f64 = taps.iter().zip(&s).map(|(t, sv)| t.weight * sv).sum();
            let sig = inputs[2].row(i);
            let (mut dd, mut ds) = ([0.0; 2], [0.0; 2]);
            for (t, sv) in taps.iter().zip(&s) {
                let k = t.weight * (sv - mean);
                for a in 0..2 {
                    let o = t.offset[a] / (sig[a] * sig[a]);
                    dd[a] += k * o;
                    ds[a] += k * o * t.offset[a] / sig[a];
                }
            }
            if wants[1] {
                ddelta[2 * i..2 * i + 2].copy_from_slice(&dd);
            }
            if wants[2] {
                dsigma[2 * i..2 * i + 2].copy_from_slice(&ds);
            }
        }
        let pack = |v: Vec<f64>, on: bool| on.then(|| NdBuffer::new(&[n, 2], v).expect("shape"));
        let ddelta = pack(ddelta, wants[1]);
        let dsigma = pack(dsigma, wants[2]);
        // alpha cancels under normalization
        let dalpha = want(wants, 3, || NdBuffer::zeros(inputs[3].shape()));
        Ok(vec![dmap, ddelta, dsigma, dalpha])
    }
}

/// Anchor decoder `f_v -> (delta, sigma, alpha)`.
#[derive(Clone, Copy, Debug)]
pub struct AnchorDecoder {
    pub linear: Linear,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
}

impl AnchorDecoder {
    /// Offsets start at zero and extents at `sigma0`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        band: (f64, f64),
        sigma0: f64,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        SoftplusClamped::new(band.0, band.1)?;
        let linear = Linear::new(store, name, width, 5, 0.1, rng);
        let wt = store.get_mut(linear.weight);
        for r in 0..width {
            wt.data_mut()[r * 5] = 0.0;
            wt.data_mut()[r * 5 + 1] = 0.0;
        }
        let pre = sigma0.exp_m1().ln();
        store.get_mut(linear.bias).data_mut()[2..4].copy_from_slice(&[pre, pre]);
        Ok(Self {
            linear,
            sigma_lo: band.0,
            sigma_hi: band.1,
        })
    }

    /// `(delta [N x 2], sigma [N x 2], alpha [N x 1])`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, f: Var) -> Result<(Var, Var, Var)> {
        let raw = self.linear.forward(tape, p, f)?;
        let delta = tape.slice_cols(raw, 0, 2)?;
        let s = tape.slice_cols(raw, 2, 2)?;
        let sigma = tape.softplus_clamped(s, self.sigma_lo, self.sigma_hi)?;
        let a = tape.slice_cols(raw, 4, 1)?;
        let alpha = tape.sigmoid(a)?;
        Ok((delta, sigma, alpha))
    }

    pub fn eval(&self, store: &ParamStore, f: &[f64]) -> AnchorParams {
        let raw = self.linear.eval(store, f);
        let sp = SoftplusClamped::new(self.sigma_lo, self.sigma_hi).expect("band validated at construction");
        AnchorParams {
            delta: [raw[0], raw[1]],
            sigma: [sp.eval(raw[2]), sp.eval(raw[3])],
            alpha: sigmoid(raw[4]),
        }
    }
}

/// `phi_proj` lifts the anchor feature to the descriptor width; `phi_gate`
/// predicts the gate from both.
#[derive(Clone, Copy, Debug)]
pub struct GateParams {
    pub proj: Linear,
    pub gate: Linear,
}

impl GateParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, feature_width: usize, rng: &mut ModelRng) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), feature_width, width, 1.0, rng),
            gate: Linear::new(store, &format!("{name}.gate"), 2 * width, width, 1.0, rng),
        }
    }
}

/// `h = f + sigma(phi_gate([f; phi_proj(g)])) * phi_proj(g)`, with the gate
/// of each row multiplied by `open` when given.
pub fn gated_fuse(
    tape: &mut Tape,
    p: &Bound,
    gp: &GateParams,
    f: Var,
    g: Var,
    open: Option<Arc<Vec<f64>>>,
) -> Result<Var> {
    let pg = gp.proj.forward(tape, p, g)?;
    let cat = tape.concat_cols(&[f, pg])?;
    let pre = gp.gate.forward(tape, p, cat)?;
    let mut a = tape.sigmoid(pre)?;
    if let Some(scales) = open {
        a = tape.row_scale(a, scales)?;
    }
    let ag = tape.mul(a, pg)?;
    tape.add(f, ag)
}

/// Pointwise lift, two residual 3x3x3 blocks (dilation 1 then 2) and a
/// two-logit projection. Receptive radius is three voxels.
#[derive(Clone, Copy, Debug)]
pub struct OccHead {
    pub input: Linear,
    pub convs: [(ParamId, ParamId); 2],
    pub output: Linear,
    pub width: usize,
}

impl OccHead {
    pub fn new(store: &mut ParamStore, name: &str, in_width: usize, width: usize, rng: &mut ModelRng) -> Self {
        let input = Linear::new(store, &format!("{name}.input"), in_width, width, 1.0, rng);
        let convs = [1, 2].map(|d| {
            (
                store.add(format!("{name}.conv{d}.weight"), glorot(rng, 27 * width, width, 1.0)),
                store.add(format!("{name}.conv{d}.bias"), NdBuffer::zeros(&[width])),
            )
        });
        let output = Linear::new(store, &format!("{name}.output"), width, 2, 1.0, rng);
        Self {
            input,
            convs,
            output,
            width,
        }
    }

    /// Logits `[N x 2]` for a voxel field `[N x d]` in linear voxel order.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, layout: &TriplaneLayout, field: Var) -> Result<Var> {
        let mut x = self.input.forward(tape, p, field)?;
        for (k, (w, b)) in self.convs.iter().enumerate() {
            let conv = StencilConv {
                stencil: layout.grid_stencil(k + 1).clone(),
            };
            let y = tape.apply(conv, &[x, p.var(*w), p.var(*b)])?;
            let y = tape.relu(y)?;
            x = tape.add(x, y)?;
        }
        self.output.forward(tape, p, x)
    }
}

/// Occupancy probability `softmax(z)[1]` per row of a `[N x 2]` logit buffer.
pub fn occupancy_probabilities(logits: &NdBuffer) -> Vec<f64> {
    (0..logits.rows())
        .map(|r| {
            let z = logits.row(r);
            sigmoid(z[1] - z[0])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchoring {
    /// Learned Gaussian window on the fused map.
    Gaussian,
    /// Single bilinear read at the projected voxel center.
    Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Config {
    pub width: usize,
    pub embed_width: usize,
    pub merge_hidden: usize,
    pub head_width: usize,
    pub feature_channels: usize,
    pub levels: usize,
    pub window_radius: usize,
    pub sigma_band: (f64, f64),
    pub sigma0: f64,
    pub anchoring: Anchoring,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            width: 32,
            embed_width: 8,
            merge_hidden: 32,
            head_width: 8,
            feature_channels: 8,
            levels: 3,
            window_radius: 2,
            sigma_band: (0.3, 4.0),
            sigma0: 1.0,
            anchoring: Anchoring::Gaussian,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage1Model {
    pub config: Stage1Config,
    pub scatter: ScatterParams,
    pub refine: [RefineParams; 3],
    pub merge: MergeMlp,
    pub level_logits: ParamId,
    pub decoder: AnchorDecoder,
    pub gate: GateParams,
    pub head: OccHead,
}

impl Stage1Model {
    pub fn new(store: &mut ParamStore, config: Stage1Config, dims: [usize; 3], rng: &mut ModelRng) -> Result<Self> {
        if config.levels == 0 {
            return Err(Error::config("levels must be at least 1"));
        }
        let d = config.width;
        let scatter = ScatterParams::new(store, "s1.scatter", dims, config.feature_channels, config.embed_width, d, rng);
        let refine = PlaneKind::ALL.map(|pk| RefineParams::new(store, &format!("s1.refine_{}", pk.name()), d, rng));
        let merge = MergeMlp::new(store, "s1.merge", d, config.merge_hidden, d, rng);
        let level_logits = store.add("s1.level_logits", NdBuffer::zeros(&[config.levels]));
        let decoder = AnchorDecoder::new(store, "s1.anchor", d, config.sigma_band, config.sigma0, rng)?;
        let gate = GateParams::new(store, "s1.fuse", d, config.feature_channels, rng);
        let head = OccHead::new(store, "s1.head", d, config.head_width, rng);
        Ok(Self {
            config,
            scatter,
            refine,
            merge,
            level_logits,
            decoder,
            gate,
            head,
        })
    }
}

/// Tape handles of one Stage-1 evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Output {
    pub logits: Var,
    pub descriptors: Var,
    pub anchor: Var,
    pub fused: Var,
    /// Anchor parameters, present for Gaussian anchoring.
    pub gaussians: Option<(Var, Var, Var)>,
}

/// scatter -> normalize -> refine -> merge -> anchor -> gated fuse -> head.
pub fn stage1_forward(
    tape: &mut Tape,
    p: &Bound,
    model: &Stage1Model,
    layout: &TriplaneLayout,
    ctx: &ImageContext,
    queries: &[[usize; 3]],
    query_features: Option<Var>,
) -> Result<Stage1Output> {
    if ctx.base.len() != layout.num_voxels() {
        return Err(Error::dim(format!(
            "image context covers {} voxels, grid has {}",
            ctx.base.len(),
            layout.num_voxels()
        )));
    }
    let tri = scatter_queries(tape, p, &model.scatter, layout, queries, query_features)?;
    let tri = count_normalize(tape, &tri)?;
    let mut planes = tri.planes;
    for pk in PlaneKind::ALL {
        let k = pk.index();
        planes[k] = refine_plane(tape, p, &model.refine[k], layout.stencil(pk), planes[k])?;
    }
    let descriptors = model.merge.forward(tape, p, layout, &planes, None)?;
    let fused = ctx.fused_map(tape, p.var(model.level_logits))?;
    let (anchor, gaussians) = match model.config.anchoring {
        Anchoring::Gaussian => {
            let (delta, sigma, alpha) = model.decoder.forward(tape, p, descriptors)?;
            let kernel = AnchorAggregate {
                base: ctx.base.clone(),
                visible: ctx.visible.clone(),
                radius: model.config.window_radius,
            };
            let g = tape.apply(kernel, &[fused, delta, sigma, alpha])?;
            (g, Some((delta, sigma, alpha)))
        }
        Anchoring::Point => {
            let zero = tape.constant(NdBuffer::zeros(&[layout.num_voxels(), 2]));
            let g = tape.apply(
                BilinearSample {
                    base: Some(ctx.base.clone()),
                },
                &[fused, zero],
            )?;
            (tape.row_scale(g, ctx.visibility_scales())?, None)
        }
    };
    let h = gated_fuse(tape, p, &model.gate, descriptors, anchor, Some(ctx.visibility_scales()))?;
    let logits = model.head.forward(tape, p, layout, h)?;
    Ok(Stage1Output {
        logits,
        descriptors,
        anchor,
        fused,
        gaussians,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, FnKernel, GradCheck};
    use rand::{Rng, SeedableRng};

    fn rng() -> ModelRng {
        ModelRng::seed_from_u64(11)
    }

    fn random_plane(h: usize, w: usize, c: usize, seed: u64) -> NdBuffer {
        let mut r = ModelRng::seed_from_u64(seed);
        NdBuffer::new(&[h, w, c], (0..h * w * c).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_level_same_stride_is_identity() {
        let l = random_plane(5, 7, 3, 1);
        let fused = fuse_levels(&[(l.clone(), 4.0)], 4.0, 5, 7).unwrap();
        assert!(fused[0].max_abs_diff(&l) < 1e-15);
        assert!(matches!(fuse_levels(&[], 4.0, 5, 7), Err(Error::Config(_))));
    }

    #[test]
    fn level_weights_convexity_and_saturation() {
        let a = random_plane(4, 6, 2, 2);
        let b = random_plane(4, 6, 2, 3);
        let logits = NdBuffer::new(&[2], vec![0.3, -1.7]).unwrap();
        let same = WeightedLevelSum.forward(&[&logits, &a, &a]).unwrap();
        assert!(same.max_abs_diff(&a) < 1e-15);
        let sat = NdBuffer::new(&[2], vec![f64::INFINITY, 0.0]).unwrap();
        assert!(WeightedLevelSum.forward(&[&sat, &a, &b]).unwrap().bit_eq(&a));
        let err = grad_check(&WeightedLevelSum, &[logits, a, b], 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn coarse_level_resamples_to_texel_centers() {
        // a coarse level constant along rows varies linearly along columns
        let coarse = NdBuffer::new(&[2, 4, 1], (0..8).map(|i| (i % 4) as f64).collect()).unwrap();
        let fine = resample_level(&coarse, 8.0, 4.0, 4, 8).unwrap();
        // fine column q sits at coarse coordinate (q + 0.5) / 2 - 0.5
        for q in 1..7 {
            let expect = ((q as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 3.0);
            assert!((fine.get(&[1, q, 0]).unwrap() - expect).abs() < 1e-12);
        }
    }

    fn decoder(store: &mut ParamStore) -> AnchorDecoder {
        AnchorDecoder::new(store, "dec", 4, (0.3, 4.0), 1.0, &mut rng()).unwrap()
    }

    #[test]
    fn zero_decoder_defaults() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store);
        store.values_mut().iter_mut().for_each(|v| v.data_mut().iter_mut().for_each(|x| *x = 0.0));
        let a = dec.eval(&store, &[0.4, -0.2, 1.0, 3.0]);
        assert_eq!(a.delta, [0.0, 0.0]);
        assert_eq!(a.sigma, [2f64.ln(), 2f64.ln()]);
        assert_eq!(a.alpha, 0.5);
    }

    #[test]
    fn decoder_starts_at_reference_scale_without_offset() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store);
        let a = dec.eval(&store, &[0.4, -0.2, 1.0, 3.0]);
        assert_eq!(a.delta, [0.0, 0.0]);
        let z = dec.eval(&store, &[0.0; 4]);
        assert!((z.sigma[0] - 1.0).abs() < 1e-12 && (z.sigma[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_range_and_decoder_gradients() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store);
        let mut r = rng();
        for v in store.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x = r.random_range(-3.0..3.0));
        }
        for _ in 0..1000 {
            let f: Vec<f64> = (0..4).map(|_| r.random_range(-20.0..20.0)).collect();
            let a = dec.eval(&store, &f);
            assert!(a.alpha > 0.0 && a.alpha <= 1.0);
            assert!(a.sigma.iter().all(|&s| (0.3..=4.0).contains(&s)));
        }
        let mut inputs = store.values().to_vec();
        inputs.push(NdBuffer::new(&[3, 4], (0..12).map(|i| (i as f64 * 0.7).sin() * 0.3).collect()).unwrap());
        let k = FnKernel::new("decode_anchor", move |tape, vars| {
            let (f, ps) = vars.split_last().unwrap();
            let p = Bound::from_vars(ps.to_vec());
            let (d, s, a) = dec.forward(tape, &p, *f)?;
            tape.concat_cols(&[d, s, a])
        });
        let err = grad_check(&k, &inputs, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    fn random_params(r: &mut ModelRng) -> AnchorParams {
        AnchorParams {
            delta: [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)],
            sigma: [r.random_range(0.3..4.0), r.random_range(0.3..4.0)],
            alpha: r.random_range(0.01..1.0),
        }
    }

    #[test]
    fn anchor_weights_normalized_symmetric_alpha_free() {
        let mut r = rng();
        for _ in 0..1000 {
            let p = random_params(&mut r);
            let mu = [r.random_range(-5.0..50.0), r.random_range(-5.0..50.0)];
            let w = anchor_weights(&p, mu, 2).unwrap();
            assert!((w.sum() - 1.0).abs() < 1e-12);
        }
        let iso = AnchorParams {
            delta: [0.0; 2],
            sigma: [0.8, 0.8],
            alpha: 0.3,
        };
        let w = anchor_weights(&iso, [3.0, 7.0], 2).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let a = w.get(&[i, j]).unwrap();
                assert!((a - w.get(&[j, 4 - i]).unwrap()).abs() < 1e-15);
                assert!(a <= w.get(&[2, 2]).unwrap());
            }
        }
        let w9 = anchor_weights(&AnchorParams { alpha: 0.9, ..iso }, [3.0, 7.0], 2).unwrap();
        assert!(w9.max_abs_diff(&w) < 1e-15);
        let bad = AnchorParams { sigma: [0.0, 1.0], ..iso };
        assert!(anchor_weights(&bad, [0.0, 0.0], 2).is_err());
    }

    #[test]
    fn anchor_aggregate_constant_and_hull() {
        let constant = NdBuffer::new(&[6, 9, 3], [0.2, -1.0, 4.0].repeat(54)).unwrap();
        let mut r = rng();
        let map = random_plane(6, 9, 3, 5);
        for _ in 0..1000 {
            let p = random_params(&mut r);
            let u = [r.random_range(-2.0..10.0), r.random_range(-2.0..7.0)];
            let g = anchor_aggregate(&constant, &p, u, 2).unwrap();
            assert!(g.iter().zip([0.2, -1.0, 4.0]).all(|(a, b)| (a - b).abs() < 1e-12));
            let g = anchor_aggregate(&map, &p, u, 2).unwrap();
            let mu = [u[0] + p.delta[0], u[1] + p.delta[1]];
            let taps = anchor_window(6, 9, mu, p.sigma, p.alpha, 2);
            for ch in 0..3 {
                let vals: Vec<f64> = taps.iter().map(|t| map.get(&[t.texel.0, t.texel.1, ch]).unwrap()).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                assert!(g[ch] >= lo - 1e-12 && g[ch] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn tight_gaussian_concentrates_on_its_texel() {
        // Off-center mass of a 5x5 window at the lower clamp, on a texel center.
        let off_center = |s: f64| {
            let z: f64 = (-2i32..=2)
                .flat_map(|i| (-2i32..=2).map(move |j| (-((i * i + j * j) as f64) / (2.0 * s * s)).exp()))
                .sum();
            1.0 - 1.0 / z
        };
        let map = random_plane(7, 7, 2, 9);
        for s in [0.3, 0.2, 0.15] {
            let p = AnchorParams {
                delta: [0.0; 2],
                sigma: [s, s],
                alpha: 0.7,
            };
            let g = anchor_aggregate(&map, &p, [3.0, 3.0], 2).unwrap();
            let centre = [map.get(&[3, 3, 0]).unwrap(), map.get(&[3, 3, 1]).unwrap()];
            let gap = (0..7 * 7)
                .flat_map(|t| (0..2).map(move |ch| (t, ch)))
                .map(|(t, ch)| (map.data()[t * 2 + ch] - centre[ch]).abs())
                .fold(0.0, f64::max);
            for ch in 0..2 {
                assert!((g[ch] - centre[ch]).abs() <= off_center(s) * gap + 1e-15);
            }
        }
        assert!(off_center(0.3) > 1e-3 && off_center(0.3) < 0.016);
        assert!(off_center(0.2) < 1e-3);
    }

    #[test]
    fn sub_texel_shift_consistency() {
        let map = random_plane(8, 10, 2, 4);
        let mut shifted = NdBuffer::zeros(&[8, 10, 2]);
        for r in 0..8 {
            for c in 1..10 {
                for ch in 0..2 {
                    shifted.set(&[r, c, ch], map.get(&[r, c - 1, ch]).unwrap()).unwrap();
                }
            }
        }
        let p = AnchorParams {
            delta: [0.3, -0.2],
            sigma: [0.9, 0.6],
            alpha: 0.5,
        };
        let a = anchor_aggregate(&map, &p, [4.1, 3.6], 2).unwrap();
        let moved = AnchorParams {
            delta: [1.3, -0.2],
            ..p
        };
        let b = anchor_aggregate(&shifted, &moved, [4.1, 3.6], 2).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn anchor_kernel_matches_scalar_and_gradients() {
        let n = 6;
        let base = Arc::new((0..n).map(|i| [0.7 * i as f64 + 0.2, 2.9 - 0.4 * i as f64]).collect::<Vec<_>>());
        let visible = Arc::new((0..n).map(|i| i != 4).collect::<Vec<_>>());
        let k = AnchorAggregate {
            base: base.clone(),
            visible: visible.clone(),
            radius: 2,
        };
        let map = random_plane(5, 6, 3, 8);
        let mut r = rng();
        let delta = NdBuffer::new(&[n, 2], (0..2 * n).map(|_| r.random_range(-0.9..0.9)).collect()).unwrap();
        let sigma = NdBuffer::new(&[n, 2], (0..2 * n).map(|_| r.random_range(0.4..2.0)).collect()).unwrap();
        let alpha = NdBuffer::new(&[n, 1], (0..n).map(|_| r.random_range(0.1..0.9)).collect()).unwrap();
        let out = k.forward(&[&map, &delta, &sigma, &alpha]).unwrap();
        for i in 0..n {
            let p = AnchorParams {
                delta: [delta.row(i)[0], delta.row(i)[1]],
                sigma: [sigma.row(i)[0], sigma.row(i)[1]],
                alpha: alpha.row(i)[0],
            };
            let expect = if visible[i] { anchor_aggregate(&map, &p, base[i], 2).unwrap() } else { vec![0.0; 3] };
            assert_eq!(out.row(i), expect.as_slice());
        }
        let report = GradCheck::default().run(&k, &[map, delta, sigma, alpha]).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    fn gate_inputs() -> (ParamStore, GateParams, NdBuffer, NdBuffer) {
        let mut store = ParamStore::new();
        let gp = GateParams::new(&mut store, "g", 4, 3, &mut rng());
        let f = NdBuffer::new(&[5, 4], (0..20).map(|i| (i as f64 * 0.3).sin()).collect()).unwrap();
        let g = NdBuffer::new(&[5, 3], (0..15).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        (store, gp, f, g)
    }

    #[test]
    fn gate_saturation_limits() {
        let (mut store, gp, f, g) = gate_inputs();
        for (bias, open) in [(-50.0, false), (50.0, true)] {
            store.get_mut(gp.gate.bias).data_mut().iter_mut().for_each(|b| *b = bias);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let (fv, gv) = (tape.constant(f.clone()), tape.constant(g.clone()));
            let h = gated_fuse(&mut tape, &p, &gp, fv, gv, None).unwrap();
            for r in 0..5 {
                let proj = gp.proj.eval(&store, g.row(r));
                for (c, &hv) in tape.value(h).row(r).iter().enumerate() {
                    let expect = f.row(r)[c] + if open { proj[c] } else { 0.0 };
                    assert!((hv - expect).abs() < 1e-15 + 1e-12 * expect.abs(), "{hv} vs {expect}");
                }
            }
        }
        // a closed visibility flag passes f through exactly
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (fv, gv) = (tape.constant(f.clone()), tape.constant(g.clone()));
        let h = gated_fuse(&mut tape, &p, &gp, fv, gv, Some(Arc::new(vec![0.0; 5]))).unwrap();
        assert!(tape.value(h).bit_eq(&f));
    }

    #[test]
    fn gate_gradients() {
        let (store, gp, f, g) = gate_inputs();
        let mut inputs = store.values().to_vec();
        inputs.push(f);
        inputs.push(g);
        let np = store.len();
        let k = FnKernel::new("gated_fuse", move |tape, vars| {
            let p = Bound::from_vars(vars[..np].to_vec());
            gated_fuse(tape, &p, &gp, vars[np], vars[np + 1], None)
        });
        let err = grad_check(&k, &inputs, 1e-6).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn occupancy_head_zero_field_and_receptive_field() {
        let dims = [9, 9, 9];
        let layout = TriplaneLayout::new(dims);
        let mut store = ParamStore::new();
        let head = OccHead::new(&mut store, "h", 3, 4, &mut rng());
        let n = 729;
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let zero = tape.constant(NdBuffer::zeros(&[n, 3]));
        let z = head.forward(&mut tape, &p, &layout, zero).unwrap();
        assert_eq!(tape.value(z).shape(), &[n, 2]);
        assert!(occupancy_probabilities(tape.value(z)).iter().all(|&q| q == 0.5));

        let mut r = rng();
        let mut r2 = ModelRng::seed_from_u64(3);
        for v in store.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x += r2.random_range(-0.2..0.2));
        }
        let field = NdBuffer::new(&[n, 3], (0..3 * n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let eval = |f: &NdBuffer| {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let x = tape.constant(f.clone());
            let z = head.forward(&mut tape, &p, &layout, x).unwrap();
            tape.value(z).clone()
        };
        let base = eval(&field);
        let centre = (4 * 9 + 4) * 9 + 4;
        let lin = |x: usize, y: usize, z: usize| (x * 9 + y) * 9 + z;
        let probe = |v: usize| {
            let mut f = field.clone();
            f.data_mut()[v * 3] += 5.0;
            eval(&f).row(centre) != base.row(centre)
        };
        assert!(!probe(lin(8, 4, 4)));
        assert!(!probe(lin(0, 0, 0)));
        assert!(probe(lin(7, 4, 4)));
        assert!(probe(lin(4, 4, 4)));
    }

    fn small_stage1(anchoring: Anchoring) -> Stage1Config {
        Stage1Config {
            width: 6,
            embed_width: 3,
            merge_hidden: 6,
            head_width: 3,
            feature_channels: 3,
            levels: 2,
            anchoring,
            ..Stage1Config::default()
        }
    }

    fn small_queries(n: usize) -> (Vec<[usize; 3]>, NdBuffer) {
        let q = (0..n).map(|i| [(i * 5) % 6, (i * 7 + 1) % 6, (i * 3) % 4]).collect();
        let f = NdBuffer::new(&[n, 3], (0..3 * n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        (q, f)
    }

    #[test]
    fn stage1_pipeline_shapes_and_determinism() {
        let (grid, ctx) = crate::testutil::tiny_scene(3, 5);
        let layout = TriplaneLayout::new(grid.dims);
        let n = grid.num_voxels();
        for anchoring in [Anchoring::Gaussian, Anchoring::Point] {
            let mut store = ParamStore::new();
            let model = Stage1Model::new(&mut store, small_stage1(anchoring), grid.dims, &mut rng()).unwrap();
            let (queries, feats) = small_queries(12);
            let run = |queries: &[[usize; 3]], feats: Option<&NdBuffer>| {
                let mut tape = Tape::new();
                let p = store.bind(&mut tape);
                let f = feats.map(|f| tape.constant(f.clone()));
                let out = stage1_forward(&mut tape, &p, &model, &layout, &ctx, queries, f).unwrap();
                assert_eq!(out.gaussians.is_some(), anchoring == Anchoring::Gaussian);
                tape.value(out.logits).clone()
            };
            let a = run(&queries, Some(&feats));
            assert_eq!(a.shape(), &[n, 2]);
            assert!(a.bit_eq(&run(&queries, Some(&feats))));
            let empty = run(&[], None);
            assert!(empty.is_finite());
            assert_eq!(empty.shape(), &[n, 2]);
        }
    }

    #[test]
    fn stage1_pipeline_gradients() {
        let (grid, ctx) = crate::testutil::tiny_scene(3, 6);
        let layout = Arc::new(TriplaneLayout::new(grid.dims));
        let mut store = ParamStore::new();
        let mut r = rng();
        let model = Stage1Model::new(&mut store, small_stage1(Anchoring::Gaussian), grid.dims, &mut r).unwrap();
        for v in store.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.1..0.1));
        }
        let (queries, feats) = small_queries(10);
        let np = store.len();
        let mut inputs = store.values().to_vec();
        inputs.push(feats);
        let k = FnKernel::new("stage1", move |tape, vars| {
            let p = Bound::from_vars(vars[..np].to_vec());
            Ok(stage1_forward(tape, &p, &model, &layout, &ctx, &queries, Some(vars[np]))?.logits)
        });
        let report = GradCheck::default().probes(6).run(&k, &inputs).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
