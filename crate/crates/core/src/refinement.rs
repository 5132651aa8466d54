//! Stage 2: occupancy-gated Gaussian tokens, image conditioning, per-plane
//! Gaussian refinement (local gathering, global aggregation, blend),
//! lift-merge and the semantic head.

use std::sync::Arc;

use rand::Rng;

use crate::anchoring::ImageContext;
use crate::error::{Error, Result};
use crate::nn::{Linear, ModelRng};
use crate::par;
use crate::tensor::ops::{axpy, dot, plane_dims, ScatterAddRows};
use crate::tensor::{Bound, Kernel, NdBuffer, ParamId, ParamStore, Tape, Var};
use crate::triplane::{
    count_normalize, deform_sample_attend, scatter_queries, DeformAttnParams, MergeMlp, PlaneKind, ScatterParams,
    TriplaneLayout,
};

/// Largest refinement radius, in plane cells.
pub const R_MAX: usize = 6;

/// Guard below which a global-aggregation denominator counts as empty.
pub const DENOM_EPS: f64 = 1e-12;

/// Window radius `min(ceil(3 max(theta)), R_MAX)`.
pub fn neighborhood_radius(theta: [f64; 2]) -> usize {
    ((3.0 * theta[0].max(theta[1])).ceil() as usize).min(R_MAX)
}

/// Unnormalized axis-aligned Gaussian at cell offset `(di, dj)`.
#[inline]
fn gauss(di: f64, dj: f64, theta: [f64; 2]) -> f64 {
    (-0.5 * ((di / theta[0]).powi(2) + (dj / theta[1]).powi(2))).exp()
}

/// Discrete mass of the Gaussian over its full window and the derivative of
/// that mass w.r.t. each extent.
fn window_mass(theta: [f64; 2]) -> (f64, [f64; 2]) {
    let r = neighborhood_radius(theta) as i64;
    let (mut z, mut dz) = (0.0, [0.0; 2]);
    for di in -r..=r {
        for dj in -r..=r {
            let (fi, fj) = (di as f64, dj as f64);
            let gv = gauss(fi, fj, theta);
            z += gv;
            dz[0] += gv * fi * fi / theta[0].powi(3);
            dz[1] += gv * fj * fj / theta[1].powi(3);
        }
    }
    (z, dz)
}

/// `W_P(delta; theta)`: the Gaussian normalized to unit mass over its own
/// window; offsets beyond the radius carry no weight.
pub fn plane_kernel(delta: [i64; 2], theta: [f64; 2]) -> f64 {
    let r = neighborhood_radius(theta) as i64;
    if delta[0].abs() > r || delta[1].abs() > r {
        return 0.0;
    }
    gauss(delta[0] as f64, delta[1] as f64, theta) / window_mass(theta).0
}

fn check_plane_params(name: &str, plane: &NdBuffer, theta: &NdBuffer, alpha: Option<&NdBuffer>) -> Result<(usize, usize, usize)> {
    let (a, b, c) = plane_dims(plane)?;
    if theta.rank() != 2 || theta.rows() != a * b || theta.cols() != 2 {
        return Err(Error::dim(format!(
            "{name}: extents {:?} do not match a {a}x{b} plane",
            theta.shape()
        )));
    }
    if let Some(al) = alpha {
        if al.len() != a * b {
            return Err(Error::dim(format!("{name}: {} opacities for {} cells", al.len(), a * b)));
        }
    }
    if theta.data().iter().any(|&t| !(t > 0.0)) {
        return Err(Error::Numeric(format!("{name}: extents must be positive")));
    }
    Ok((a, b, c))
}

/// Target-centric smoothing: each cell averages its neighbors under a
/// Gaussian with the cell's own extents. Inputs `[plane [A x B x C],
/// theta [A*B x 2]]`.
pub struct LocalGather;

impl Kernel for LocalGather {
    fn name(&self) -> &str {
        "local_gather"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (plane, theta) = (inputs[0], inputs[1]);
        let (a, b, c) = check_plane_params("local_gather", plane, theta, None)?;
        let pd = plane.data();
        let mut out = vec![0.0; a * b * c];
        par::for_each_row(&mut out, c, |i, row| {
            let th = [theta.row(i)[0], theta.row(i)[1]];
            let r = neighborhood_radius(th) as i64;
            let (ti, tj) = ((i / b) as i64, (i % b) as i64);
            let mut den = 0.0;
            for si in (ti - r).max(0)..=(ti + r).min(a as i64 - 1) {
                for sj in (tj - r).max(0)..=(tj + r).min(b as i64 - 1) {
                    let w = gauss((ti - si) as f64, (tj - sj) as f64, th);
                    let j = si as usize * b + sj as usize;
                    axpy(w, &pd[j * c..(j + 1) * c], row);
                    den += w;
                }
            }
            row.iter_mut().for_each(|v| *v /= den);
        });
        NdBuffer::new(plane.shape(), out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let (plane, theta) = (inputs[0], inputs[1]);
        let (a, b, c) = plane_dims(plane)?;
        let (pd, od, gd) = (plane.data(), output.data(), g.data());
        let window = |i: usize| {
            let th = [theta.row(i)[0], theta.row(i)[1]];
            let r = neighborhood_radius(th) as i64;
            let (ti, tj) = ((i / b) as i64, (i % b) as i64);
            let cells: Vec<(usize, f64, [f64; 2])> = ((ti - r).max(0)..=(ti + r).min(a as i64 - 1))
                .flat_map(|si| ((tj - r).max(0)..=(tj + r).min(b as i64 - 1)).map(move |sj| (si, sj)))
                .map(|(si, sj)| {
                    let d = [(ti - si) as f64, (tj - sj) as f64];
                    (si as usize * b + sj as usize, gauss(d[0], d[1], th), d)
                })
                .collect();
            let den: f64 = cells.iter().map(|t| t.1).sum();
            (th, cells, den)
        };
        let dplane = wants[0].then(|| {
            let mut out = vec![0.0; pd.len()];
            for i in 0..a * b {
                let (_, cells, den) = window(i);
                let gi = &gd[i * c..(i + 1) * c];
                for (j, w, _) in cells {
                    axpy(w / den, gi, &mut out[j * c..(j + 1) * c]);
                }
            }
            NdBuffer::new(plane.shape(), out).expect("shape")
        });
        let dtheta = wants[1].then(|| {
            let mut out = vec![0.0; a * b * 2];
            par::for_each_row(&mut out, 2, |i, row| {
                let (th, cells, den) = window(i);
                let gi = &gd[i * c..(i + 1) * c];
                let go = dot(gi, &od[i * c..(i + 1) * c]);
                for (j, w, d) in cells {
                    let k = w / den * (dot(gi, &pd[j * c..(j + 1) * c]) - go);
                    row[0] += k * d[0] * d[0] / th[0].powi(3);
                    row[1] += k * d[1] * d[1] / th[1].powi(3);
                }
            });
            NdBuffer::new(theta.shape(), out).expect("shape")
        });
        Ok(vec![dplane, dtheta])
    }
}

/// Source-centric aggregation: each cell spreads `alpha_j W_P(.; theta_j)`
/// mass to the targets within its own radius; every target divides by the
/// mass it received. Targets receiving no mass keep their input value.
/// Inputs `[plane [A x B x C], theta [A*B x 2], alpha [A*B x 1]]`.
pub struct GlobalAggregate;

struct SourceTerms {
    theta: Vec<[f64; 2]>,
    radius: Vec<i64>,
    mass: Vec<(f64, [f64; 2])>,
}

impl GlobalAggregate {
    fn sources(theta: &NdBuffer) -> SourceTerms {
        let th: Vec<[f64; 2]> = (0..theta.rows()).map(|i| [theta.row(i)[0], theta.row(i)[1]]).collect();
        SourceTerms {
            radius: th.iter().map(|&t| neighborhood_radius(t) as i64).collect(),
            mass: th.iter().map(|&t| window_mass(t)).collect(),
            theta: th,
        }
    }

    /// Visits the sources reaching target `i` in row-major source order.
    fn for_sources(a: usize, b: usize, s: &SourceTerms, alpha: &[f64], i: usize, mut f: impl FnMut(usize, f64)) {
        let r = R_MAX as i64;
        let (ti, tj) = ((i / b) as i64, (i % b) as i64);
        for si in (ti - r).max(0)..=(ti + r).min(a as i64 - 1) {
            for sj in (tj - r).max(0)..=(tj + r).min(b as i64 - 1) {
                let j = si as usize * b + sj as usize;
                let rj = s.radius[j];
                if (ti - si).abs() <= rj && (tj - sj).abs() <= rj {
                    let m = alpha[j] * gauss((ti - si) as f64, (tj - sj) as f64, s.theta[j]) / s.mass[j].0;
                    f(j, m);
                }
            }
        }
    }

    fn denominators(a: usize, b: usize, s: &SourceTerms, alpha: &[f64]) -> Vec<f64> {
        (0..a * b)
            .map(|i| {
                let mut den = 0.0;
                Self::for_sources(a, b, s, alpha, i, |_, m| den += m);
                den
            })
            .collect()
    }
}

impl Kernel for GlobalAggregate {
    fn name(&self) -> &str {
        "global_aggregate"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (plane, theta, alpha) = (inputs[0], inputs[1], inputs[2]);
        let (a, b, c) = check_plane_params("global_aggregate", plane, theta, Some(alpha))?;
        let s = Self::sources(theta);
        let (pd, ad) = (plane.data(), alpha.data());
        let mut out = vec![0.0; a * b * c];
        par::for_each_row(&mut out, c, |i, row| {
            let mut den = 0.0;
            Self::for_sources(a, b, &s, ad, i, |j, m| {
                axpy(m, &pd[j * c..(j + 1) * c], row);
                den += m;
            });
            if den > DENOM_EPS {
                row.iter_mut().for_each(|v| *v /= den);
            } else {
                row.copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
        });
        NdBuffer::new(plane.shape(), out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let (plane, theta, alpha) = (inputs[0], inputs[1], inputs[2]);
        let (a, b, c) = plane_dims(plane)?;
        let s = Self::sources(theta);
        let (pd, ad, od, gd) = (plane.data(), alpha.data(), output.data(), g.data());
        let den = Self::denominators(a, b, &s, ad);
        let go: Vec<f64> = (0..a * b).map(|i| dot(&gd[i * c..(i + 1) * c], &od[i * c..(i + 1) * c])).collect();
        // Per source j: [dP_j (C), dtheta_j (2), dalpha_j (1)], gathered over
        // the targets j reaches.
        let width = c + 3;
        let mut acc = vec![0.0; a * b * width];
        par::for_each_row(&mut acc, width, |j, row| {
            let (sj, tj) = ((j / b) as i64, (j % b) as i64);
            let th = s.theta[j];
            let rj = s.radius[j];
            let (z, dz) = s.mass[j];
            let pj = &pd[j * c..(j + 1) * c];
            for ti in (sj - rj).max(0)..=(sj + rj).min(a as i64 - 1) {
                for tq in (tj - rj).max(0)..=(tj + rj).min(b as i64 - 1) {
                    let i = ti as usize * b + tq as usize;
                    if den[i] <= DENOM_EPS {
                        continue;
                    }
                    let d = [(ti - sj) as f64, (tq - tj) as f64];
                    let k = gauss(d[0], d[1], th) / z;
                    let m = ad[j] * k;
                    let gi = &gd[i * c..(i + 1) * c];
                    axpy(m / den[i], gi, &mut row[..c]);
                    let q = (dot(gi, pj) - go[i]) / den[i];
                    row[c] += q * m * (d[0] * d[0] / th[0].powi(3) - dz[0] / z);
                    row[c + 1] += q * m * (d[1] * d[1] / th[1].powi(3) - dz[1] / z);
                    row[c + 2] += q * k;
                }
            }
            if den[j] <= DENOM_EPS {
                axpy(1.0, &gd[j * c..(j + 1) * c], &mut row[..c]);
            }
        });
        let column = |lo: usize, len: usize, shape: &[usize]| {
            let v = acc.chunks_exact(width).flat_map(|r| r[lo..lo + len].iter().copied()).collect();
            NdBuffer::new(shape, v).expect("shape")
        };
        Ok(vec![
            wants[0].then(|| column(0, c, plane.shape())),
            wants[1].then(|| column(c, 2, theta.shape())),
            wants[2].then(|| column(c + 2, 1, alpha.shape())),
        ])
    }
}

/// `beta * x + (1 - beta) * y`; the endpoints return a branch unchanged.
pub struct Blend {
    beta: f64,
}

impl Blend {
    pub fn new(beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config(format!("beta must lie in [0, 1], got {beta}")));
        }
        Ok(Self { beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

impl Kernel for Blend {
    fn name(&self) -> &str {
        "blend"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (x, y) = (inputs[0], inputs[1]);
        x.same_shape(y)?;
        Ok(if self.beta == 1.0 {
            x.clone()
        } else if self.beta == 0.0 {
            y.clone()
        } else {
            let d = x.data().iter().zip(y.data()).map(|(a, b)| self.beta * a + (1.0 - self.beta) * b).collect();
            NdBuffer::new(x.shape(), d)?
        })
    }

    fn backward(
        &self,
        _inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        Ok(vec![
            wants[0].then(|| g.map(|v| self.beta * v)),
            wants[1].then(|| g.map(|v| (1.0 - self.beta) * v)),
        ])
    }
}

/// Multiplies each token row by its mask bit.
pub fn occupancy_gate(tape: &mut Tape, tokens: Var, mask: &[bool]) -> Result<Var> {
    let rows = tape.value(tokens).rows();
    if rows != mask.len() {
        return Err(Error::dim(format!("{rows} tokens but {} mask entries", mask.len())));
    }
    let scales = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    tape.row_scale(tokens, Arc::new(scales))
}

/// `e'_v = e_v + attend(e_v, u'_v, fused map)` for active, visible voxels;
/// every other row passes through unchanged.
pub fn condition_tokens(
    tape: &mut Tape,
    p: &Bound,
    attn: &DeformAttnParams,
    tokens: Var,
    mask: &[bool],
    ctx: &ImageContext,
    fused: Var,
) -> Result<Var> {
    let n = tape.value(tokens).rows();
    if mask.len() != n || ctx.visible.len() != n {
        return Err(Error::dim("mask, tokens and image context disagree on voxel count"));
    }
    let active: Vec<usize> = (0..n).filter(|&v| mask[v] && ctx.visible[v]).collect();
    if active.is_empty() {
        return Ok(tokens);
    }
    let refs = Arc::new(active.iter().map(|&v| ctx.base[v]).collect());
    let q = tape.gather_rows(tokens, Arc::new(active.clone()))?;
    let upd = deform_sample_attend(tape, p, attn, q, refs, fused)?;
    let width = tape.value(upd).cols();
    let back = tape.apply(ScatterAddRows::new(&[n, width], &active)?, &[upd])?;
    tape.add(tokens, back)
}

/// Per-voxel plane extents and shared opacity decoded from `g^G`.
#[derive(Clone, Copy, Debug)]
pub struct GaussianDecoder {
    pub linear: Linear,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
}

impl GaussianDecoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        band: (f64, f64),
        sigma0: f64,
        rng: &mut ModelRng,
    ) -> Result<Self> {
        crate::tensor::ops::SoftplusClamped::new(band.0, band.1)?;
        let linear = Linear::new(store, name, width, 7, 0.1, rng);
        let pre = sigma0.exp_m1().ln();
        store.get_mut(linear.bias).data_mut()[..6].iter_mut().for_each(|v| *v = pre);
        Ok(Self {
            linear,
            sigma_lo: band.0,
            sigma_hi: band.1,
        })
    }

    /// `(theta [N x 6] as hw, hd, wd pairs, alpha [N x 1])`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, g: Var) -> Result<(Var, Var)> {
        let raw = self.linear.forward(tape, p, g)?;
        let t = tape.slice_cols(raw, 0, 6)?;
        let theta = tape.softplus_clamped(t, self.sigma_lo, self.sigma_hi)?;
        let a = tape.slice_cols(raw, 6, 1)?;
        Ok((theta, tape.sigmoid(a)?))
    }
}

/// Per plane cell, the mask-weighted mean of a voxel field over the
/// collapsed axis; cells without active voxels use the plain mean.
pub fn pool_to_plane(
    tape: &mut Tape,
    layout: &TriplaneLayout,
    plane: PlaneKind,
    field: Var,
    mask: &[bool],
) -> Result<Var> {
    let cells = layout.voxel_cells(plane);
    let ncell = layout.cells(plane);
    let (mut active, mut total) = (vec![0usize; ncell], vec![0usize; ncell]);
    for (v, &c) in cells.iter().enumerate() {
        total[c] += 1;
        active[c] += mask[v] as usize;
    }
    let scales = cells
        .iter()
        .enumerate()
        .map(|(v, &c)| match active[c] {
            0 => 1.0 / total[c] as f64,
            k if mask[v] => 1.0 / k as f64,
            _ => 0.0,
        })
        .collect();
    let weighted = tape.row_scale(field, Arc::new(scales))?;
    let width = tape.value(field).cols();
    tape.apply(ScatterAddRows::new(&[ncell, width], cells)?, &[weighted])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Config {
    pub width: usize,
    pub embed_width: usize,
    pub merge_hidden: usize,
    pub feature_channels: usize,
    pub levels: usize,
    pub points: usize,
    pub beta: f64,
    pub sigma_band: (f64, f64),
    pub sigma0: f64,
    pub num_classes: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            width: 32,
            embed_width: 8,
            merge_hidden: 32,
            feature_channels: 8,
            levels: 3,
            points: 4,
            beta: 0.5,
            sigma_band: (0.3, 4.0),
            sigma0: 1.0,
            num_classes: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Stage2Model {
    pub config: Stage2Config,
    pub tokens: [ParamId; 3],
    pub level_logits: ParamId,
    pub condition: DeformAttnParams,
    pub scatter: ScatterParams,
    pub self_attn: [DeformAttnParams; 3],
    pub cross_attn: [DeformAttnParams; 3],
    pub geometry: MergeMlp,
    pub decoder: GaussianDecoder,
    pub lift: MergeMlp,
    pub head: Linear,
}

impl Stage2Model {
    pub fn new(store: &mut ParamStore, config: Stage2Config, dims: [usize; 3], rng: &mut ModelRng) -> Result<Self> {
        Blend::new(config.beta)?;
        if config.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        let d = config.width;
        let tokens = [0, 1, 2].map(|a| {
            let data = (0..dims[a] * d).map(|_| rng.random_range(-0.5..0.5)).collect();
            store.add(format!("s2.token{a}"), NdBuffer::new(&[dims[a], d], data).expect("shape"))
        });
        let level_logits = store.add("s2.level_logits", NdBuffer::zeros(&[config.levels]));
        let k = config.points;
        let cf = config.feature_channels;
        let condition = DeformAttnParams::new(store, "s2.condition", d, cf, d, k, rng)?;
        let scatter = ScatterParams::new(store, "s2.scatter", dims, d, config.embed_width, d, rng);
        let mut self_attn = Vec::with_capacity(3);
        let mut cross_attn = Vec::with_capacity(3);
        for pk in PlaneKind::ALL {
            self_attn.push(DeformAttnParams::new(store, &format!("s2.self_{}", pk.name()), d, d, d, k, rng)?);
            cross_attn.push(DeformAttnParams::new(store, &format!("s2.cross_{}", pk.name()), d, cf, d, k, rng)?);
        }
        let geometry = MergeMlp::new(store, "s2.geometry", d, config.merge_hidden, d, rng);
        let decoder = GaussianDecoder::new(store, "s2.gaussians", d, config.sigma_band, config.sigma0, rng)?;
        let lift = MergeMlp::new(store, "s2.lift", d, config.merge_hidden, d, rng);
        let head = Linear::new(store, "s2.head", d, config.num_classes, 1.0, rng);
        Ok(Self {
            config,
            tokens,
            level_logits,
            condition,
            scatter,
            self_attn: self_attn.try_into().expect("three planes"),
            cross_attn: cross_attn.try_into().expect("three planes"),
            geometry,
            decoder,
            lift,
            head,
        })
    }
}

/// Tape handles of one Stage-2 evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Output {
    pub logits: Var,
    pub tokens: Var,
    pub conditioned: Var,
    pub geometry: Var,
    pub theta: Var,
    pub alpha: Var,
    pub refined: [Var; 3],
}

/// Per-voxel token `e_v = t_x[x] + t_y[y] + t_z[z]`.
pub fn voxel_tokens(tape: &mut Tape, p: &Bound, model: &Stage2Model, layout: &TriplaneLayout) -> Result<Var> {
    let mut acc = None;
    for a in 0..3 {
        let t = tape.gather_rows(p.var(model.tokens[a]), layout.voxel_axis(a).clone())?;
        acc = Some(match acc {
            None => t,
            Some(s) => tape.add(s, t)?,
        });
    }
    Ok(acc.expect("three axes"))
}

/// gate -> condition -> scatter -> per-plane attention -> merge -> decode
/// -> local/global refinement and blend -> lift-merge -> semantic head.
pub fn stage2_forward(
    tape: &mut Tape,
    p: &Bound,
    model: &Stage2Model,
    layout: &TriplaneLayout,
    ctx: &ImageContext,
    mask: &[bool],
) -> Result<Stage2Output> {
    let n = layout.num_voxels();
    if mask.len() != n || ctx.base.len() != n {
        return Err(Error::dim(format!(
            "grid has {n} voxels, mask {} and image context {}",
            mask.len(),
            ctx.base.len()
        )));
    }
    let blend = Blend::new(model.config.beta)?;
    let raw = voxel_tokens(tape, p, model, layout)?;
    let tokens = occupancy_gate(tape, raw, mask)?;
    let fused = ctx.fused_map(tape, p.var(model.level_logits))?;
    let conditioned = condition_tokens(tape, p, &model.condition, tokens, mask, ctx, fused)?;

    let active: Vec<usize> = (0..n).filter(|&v| mask[v]).collect();
    let voxels: Vec<[usize; 3]> = active.iter().map(|&v| unravel(layout.dims, v)).collect();
    let features = if active.is_empty() {
        None
    } else {
        Some(tape.gather_rows(conditioned, Arc::new(active))?)
    };
    let tri = scatter_queries(tape, p, &model.scatter, layout, &voxels, features)?;
    let tri = count_normalize(tape, &tri)?;
    let mut planes = tri.planes;
    for pk in PlaneKind::ALL {
        let k = pk.index();
        let (ea, eb) = pk.extents(layout.dims);
        let flat = tape.reshape(planes[k], &[ea * eb, model.config.width])?;
        let refs = Arc::new((0..ea * eb).map(|c| [(c % eb) as f64, (c / eb) as f64]).collect());
        let own = deform_sample_attend(tape, p, &model.self_attn[k], flat, refs, planes[k])?;
        let x1 = tape.add(flat, own)?;
        let cross = deform_sample_attend(tape, p, &model.cross_attn[k], x1, ctx.plane_refs[k].clone(), fused)?;
        let cross = tape.row_scale(cross, ctx.plane_visible[k].clone())?;
        let x2 = tape.add(x1, cross)?;
        planes[k] = tape.reshape(x2, &[ea, eb, model.config.width])?;
    }
    let geometry = model.geometry.forward(tape, p, layout, &planes, None)?;
    let (theta, alpha) = model.decoder.forward(tape, p, geometry)?;
    let mut refined = planes;
    for pk in PlaneKind::ALL {
        let k = pk.index();
        let th_v = tape.slice_cols(theta, 2 * k, 2)?;
        let th = pool_to_plane(tape, layout, pk, th_v, mask)?;
        let al = pool_to_plane(tape, layout, pk, alpha, mask)?;
        let local = tape.apply(LocalGather, &[planes[k], th])?;
        let global = tape.apply(GlobalAggregate, &[planes[k], th, al])?;
        refined[k] = tape.apply(Blend { beta: blend.beta }, &[local, global])?;
    }
    let lifted = model.lift.forward(tape, p, layout, &refined, None)?;
    let logits = model.head.forward(tape, p, lifted)?;
    Ok(Stage2Output {
        logits,
        tokens,
        conditioned,
        geometry,
        theta,
        alpha,
        refined,
    })
}

fn unravel(dims: [usize; 3], v: usize) -> [usize; 3] {
    [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]]
}

/// Row-wise argmax labels, forced to empty where the mask is off.
pub fn predict_labels(logits: &NdBuffer, mask: &[bool]) -> Vec<u8> {
    (0..logits.rows())
        .map(|r| {
            if !mask[r] {
                return crate::geometry::EMPTY;
            }
            let row = logits.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{FnKernel, GradCheck};
    use crate::testutil::tiny_scene;
    use rand::SeedableRng;

    fn rng() -> ModelRng {
        ModelRng::seed_from_u64(11)
    }

    fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> NdBuffer {
        let mut r = ModelRng::seed_from_u64(seed);
        let n = shape.iter().product();
        NdBuffer::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
    }

    fn offset(b: usize, i: usize, j: usize) -> [i64; 2] {
        [(i / b) as i64 - (j / b) as i64, (i % b) as i64 - (j % b) as i64]
    }

    #[test]
    fn radius_and_kernel_mass() {
        assert_eq!(neighborhood_radius([0.3, 0.3]), 1);
        assert_eq!(neighborhood_radius([1.0, 0.5]), 3);
        assert_eq!(neighborhood_radius([1.1, 0.5]), 4);
        assert_eq!(neighborhood_radius([2.5, 0.3]), R_MAX);
        for th in [[0.3, 0.3], [1.0, 2.0], [3.7, 0.6]] {
            let r = neighborhood_radius(th) as i64;
            let mut total = 0.0;
            for di in -8..=8i64 {
                for dj in -8..=8i64 {
                    let w = plane_kernel([di, dj], th);
                    if di.abs() > r || dj.abs() > r {
                        assert_eq!(w, 0.0);
                    }
                    total += w;
                }
            }
            assert!((total - 1.0).abs() < 1e-14);
            assert_eq!(plane_kernel([1, -2], th), plane_kernel([-1, 2], th));
        }
    }

    #[test]
    fn local_gather_matches_dense_oracle() {
        let (a, b, c) = (16, 16, 3);
        let plane = random(&[a, b, c], -1.0, 1.0, 1);
        let theta = random(&[a * b, 2], 0.3, 2.5, 2);
        let out = LocalGather.forward(&[&plane, &theta]).unwrap();
        for i in 0..a * b {
            let th = [theta.row(i)[0], theta.row(i)[1]];
            let (mut num, mut den) = (vec![0.0; c], 0.0);
            for j in 0..a * b {
                let w = plane_kernel(offset(b, i, j), th);
                den += w;
                for k in 0..c {
                    num[k] += w * plane.data()[j * c + k];
                }
            }
            for k in 0..c {
                assert!((out.data()[i * c + k] - num[k] / den).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn local_gather_constant_and_tight() {
        let theta = random(&[64, 2], 0.3, 3.0, 3);
        let flat = NdBuffer::filled(&[8, 8, 2], 0.75);
        let out = LocalGather.forward(&[&flat, &theta]).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));

        // at the tightest extent the deviation from the cell's own value is
        // bounded by the off-center mass times the largest neighbor gap
        let plane = random(&[8, 8, 1], -1.0, 1.0, 4);
        let tight = NdBuffer::filled(&[64, 2], 0.3);
        let out = LocalGather.forward(&[&plane, &tight]).unwrap();
        let off_mass = 1.0 - plane_kernel([0, 0], [0.3, 0.3]);
        assert!((off_mass - 0.0152).abs() < 1e-3);
        let p = plane.data();
        for i in 9..55 {
            let (r, q) = (i / 8, i % 8);
            if r == 0 || r == 7 || q == 0 || q == 7 {
                continue;
            }
            let gap = [i - 9, i - 8, i - 7, i - 1, i + 1, i + 7, i + 8, i + 9]
                .iter()
                .map(|&j| (p[j] - p[i]).abs())
                .fold(0.0, f64::max);
            assert!((out.data()[i] - p[i]).abs() <= off_mass * gap + 1e-15);
        }
    }

    #[test]
    fn local_gather_gradients() {
        let plane = random(&[5, 6, 2], -1.0, 1.0, 5);
        let theta = random(&[30, 2], 0.35, 1.9, 6);
        let report = GradCheck::default().run(&LocalGather, &[plane, theta]).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    fn aggregate_oracle(plane: &NdBuffer, theta: &NdBuffer, alpha: &NdBuffer) -> Vec<f64> {
        let (a, b, c) = plane_dims(plane).unwrap();
        let mut out = vec![0.0; a * b * c];
        for i in 0..a * b {
            let (mut num, mut den) = (vec![0.0; c], 0.0);
            for j in 0..a * b {
                let m = alpha.data()[j] * plane_kernel(offset(b, i, j), [theta.row(j)[0], theta.row(j)[1]]);
                den += m;
                for k in 0..c {
                    num[k] += m * plane.data()[j * c + k];
                }
            }
            for k in 0..c {
                out[i * c + k] = if den > DENOM_EPS { num[k] / den } else { plane.data()[i * c + k] };
            }
        }
        out
    }

    #[test]
    fn global_aggregate_matches_brute_force() {
        let plane = random(&[12, 12, 3], -1.0, 1.0, 7);
        let theta = random(&[144, 2], 0.3, 2.5, 8);
        let alpha = random(&[144, 1], 0.0, 1.0, 9);
        let out = GlobalAggregate.forward(&[&plane, &theta, &alpha]).unwrap();
        let expect = aggregate_oracle(&plane, &theta, &alpha);
        assert!(out.data().iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn global_aggregate_examples() {
        let (a, b) = (9, 9);
        let plane = random(&[a, b, 2], -1.0, 1.0, 10);
        let p = |i: usize| plane.data()[i * 2..i * 2 + 2].to_vec();
        let ones = NdBuffer::filled(&[a * b, 2], 1.0);
        let src = 4 * 9 + 4;

        // a single source reaches exactly its window; everything else keeps
        // its own value
        let mut alpha = NdBuffer::zeros(&[a * b, 1]);
        alpha.data_mut()[src] = 1.0;
        let out = GlobalAggregate.forward(&[&plane, &ones, &alpha]).unwrap();
        for i in 0..a * b {
            let (di, dj) = ((i / 9) as i64 - 4, (i % 9) as i64 - 4);
            let expect = if di.abs() <= 3 && dj.abs() <= 3 { p(src) } else { p(i) };
            assert!(out.data()[i * 2..i * 2 + 2].iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-15));
        }

        // two equal sources at equal distance give the midpoint
        let mut alpha = NdBuffer::zeros(&[a * b, 1]);
        alpha.data_mut()[4 * 9 + 2] = 0.8;
        alpha.data_mut()[4 * 9 + 6] = 0.8;
        let out = GlobalAggregate.forward(&[&plane, &ones, &alpha]).unwrap();
        let mid: Vec<f64> = (0..2).map(|k| 0.5 * (p(38)[k] + p(42)[k])).collect();
        assert!(out.data()[src * 2..src * 2 + 2].iter().zip(&mid).all(|(x, y)| (x - y).abs() < 1e-14));

        // distances 1 and 2 under unit extents weigh e^-0.5 against e^-2
        let mut alpha = NdBuffer::zeros(&[a * b, 1]);
        alpha.data_mut()[4 * 9 + 3] = 1.0;
        alpha.data_mut()[4 * 9 + 6] = 1.0;
        let out = GlobalAggregate.forward(&[&plane, &ones, &alpha]).unwrap();
        let (wa, wb) = ((-0.5f64).exp(), (-2f64).exp());
        for k in 0..2 {
            let expect = (wa * p(39)[k] + wb * p(42)[k]) / (wa + wb);
            assert!((out.data()[src * 2..src * 2 + 2][k] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn global_aggregate_alpha_scale_invariance() {
        let plane = random(&[7, 8, 2], -1.0, 1.0, 11);
        let theta = random(&[56, 2], 0.3, 2.0, 12);
        let alpha = random(&[56, 1], 0.05, 0.5, 13);
        let base = GlobalAggregate.forward(&[&plane, &theta, &alpha]).unwrap();
        for s in [0.25, 2.0] {
            let scaled = alpha.map(|v| v * s);
            let out = GlobalAggregate.forward(&[&plane, &theta, &scaled]).unwrap();
            assert!(out.bit_eq(&base));
        }
    }

    #[test]
    fn global_aggregate_gradients() {
        let plane = random(&[5, 6, 2], -1.0, 1.0, 14);
        let theta = random(&[30, 2], 0.35, 1.9, 15);
        let alpha = random(&[30, 1], 0.1, 0.9, 16);
        let report = GradCheck::default().run(&GlobalAggregate, &[plane, theta, alpha]).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn blend_endpoints_and_range() {
        let x = random(&[4, 4, 3], -1.0, 1.0, 17);
        let y = random(&[4, 4, 3], -1.0, 1.0, 18);
        assert!(Blend::new(1.0).unwrap().forward(&[&x, &y]).unwrap().bit_eq(&x));
        assert!(Blend::new(0.0).unwrap().forward(&[&x, &y]).unwrap().bit_eq(&y));
        let half = Blend::new(0.5).unwrap().forward(&[&x, &y]).unwrap();
        assert!((0..x.len()).all(|i| (half.data()[i] - 0.5 * (x.data()[i] + y.data()[i])).abs() < 1e-15));
        for beta in [-0.1, 1.5, f64::NAN] {
            assert!(matches!(Blend::new(beta), Err(Error::Config(_))));
        }
        let report = GradCheck::default().run(&Blend::new(0.3).unwrap(), &[x, y]).unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn occupancy_gate_examples() {
        let mut tape = Tape::new();
        let t = tape.constant(NdBuffer::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let g = occupancy_gate(&mut tape, t, &[true, false, true]).unwrap();
        assert_eq!(tape.value(g).data(), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
        let g = occupancy_gate(&mut tape, t, &[false; 3]).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| v == 0.0));
        assert!(matches!(occupancy_gate(&mut tape, t, &[true; 2]), Err(Error::Dimension(_))));
    }

    #[test]
    fn gaussian_decoder_initial_extent() {
        let mut store = ParamStore::new();
        let dec = GaussianDecoder::new(&mut store, "g", 5, (0.3, 4.0), 1.0, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let z = tape.constant(NdBuffer::zeros(&[3, 5]));
        let (theta, alpha) = dec.forward(&mut tape, &p, z).unwrap();
        assert!(tape.value(theta).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(tape.value(alpha).data().iter().all(|&v| v == 0.5));
        let x = tape.constant(random(&[20, 5], -30.0, 30.0, 19));
        let (theta, alpha) = dec.forward(&mut tape, &p, x).unwrap();
        assert!(tape.value(theta).data().iter().all(|&v| (0.3..=4.0).contains(&v)));
        assert!(tape.value(alpha).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(GaussianDecoder::new(&mut store, "h", 5, (0.0, 4.0), 1.0, &mut rng()).is_err());
    }

    #[test]
    fn pooling_prefers_active_voxels() {
        let layout = TriplaneLayout::new([2, 2, 3]);
        let field: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut mask = vec![false; 12];
        mask[1] = true;
        mask[2] = true;
        let mut tape = Tape::new();
        let f = tape.constant(NdBuffer::new(&[12, 1], field).unwrap());
        let hw = pool_to_plane(&mut tape, &layout, PlaneKind::Hw, f, &mask).unwrap();
        // cell (0,0) holds voxels 0..3 of which 1 and 2 are active; the other
        // cells have no active voxel and average all of theirs
        let hd = pool_to_plane(&mut tape, &layout, PlaneKind::Hd, f, &mask).unwrap();
        let close = |v: Var, e: &[f64]| tape.value(v).data().iter().zip(e).all(|(x, y)| (x - y).abs() < 1e-14);
        assert!(close(hw, &[1.5, 4.0, 7.0, 10.0]));
        assert!(close(hd, &[1.5, 1.0, 2.0, 7.5, 8.5, 9.5]));
    }

    fn zero_attention(store: &mut ParamStore, attn: &DeformAttnParams) {
        for id in [attn.value.weight, attn.value.bias] {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn condition_tokens_identity_and_inactive() {
        let (grid, ctx) = tiny_scene(3, 1);
        let n = grid.num_voxels();
        let mut store = ParamStore::new();
        let attn = DeformAttnParams::new(&mut store, "c", 4, 3, 4, 3, &mut rng()).unwrap();
        let logits = store.add("levels", NdBuffer::zeros(&[2]));
        let tokens = random(&[n, 4], -1.0, 1.0, 20);
        let mask: Vec<bool> = (0..n).map(|v| v % 3 != 0).collect();
        assert!(ctx.visible.iter().any(|&v| v) && ctx.visible.iter().any(|&v| !v));
        let run = |store: &ParamStore| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let t = tape.constant(tokens.clone());
            let fused = ctx.fused_map(&mut tape, p.var(logits)).unwrap();
            let out = condition_tokens(&mut tape, &p, &attn, t, &mask, &ctx, fused).unwrap();
            tape.value(out).clone()
        };
        let out = run(&store);
        for v in 0..n {
            if !(mask[v] && ctx.visible[v]) {
                assert_eq!(out.row(v), tokens.row(v));
            } else {
                assert_ne!(out.row(v), tokens.row(v));
            }
        }
        zero_attention(&mut store, &attn);
        assert!(run(&store).bit_eq(&tokens));
    }

    #[test]
    fn condition_tokens_gradients() {
        let (grid, ctx) = tiny_scene(3, 2);
        let n = grid.num_voxels();
        let mut store = ParamStore::new();
        let attn = DeformAttnParams::new(&mut store, "c", 4, 3, 4, 2, &mut rng()).unwrap();
        let logits = store.add("levels", NdBuffer::new(&[2], vec![0.3, -0.2]).unwrap());
        let mask: Vec<bool> = (0..n).map(|v| v % 4 != 1).collect();
        let mut inputs = store.values().to_vec();
        inputs.push(random(&[n, 4], -1.0, 1.0, 21));
        let np = store.len();
        let k = FnKernel::new("condition", move |tape, vars| {
            let p = Bound::from_vars(vars[..np].to_vec());
            let fused = ctx.fused_map(tape, p.var(logits))?;
            condition_tokens(tape, &p, &attn, vars[np], &mask, &ctx, fused)
        });
        let report = GradCheck::default().probes(40).run(&k, &inputs).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    fn small_config() -> Stage2Config {
        Stage2Config {
            width: 6,
            embed_width: 3,
            merge_hidden: 6,
            feature_channels: 3,
            levels: 2,
            points: 2,
            ..Stage2Config::default()
        }
    }

    #[test]
    fn stage2_forward_shapes_labels_and_determinism() {
        let (grid, ctx) = tiny_scene(3, 3);
        let layout = TriplaneLayout::new(grid.dims);
        let n = grid.num_voxels();
        let mut store = ParamStore::new();
        let model = Stage2Model::new(&mut store, small_config(), grid.dims, &mut rng()).unwrap();
        let mask: Vec<bool> = (0..n).map(|v| (v * 7) % 5 < 2).collect();
        let run = || {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let out = stage2_forward(&mut tape, &p, &model, &layout, &ctx, &mask).unwrap();
            (tape.value(out.logits).clone(), tape.value(out.theta).clone())
        };
        let (a, theta) = run();
        let (b, _) = run();
        assert!(a.bit_eq(&b));
        assert_eq!(a.shape(), &[n, 4]);
        assert!(a.is_finite());
        assert!(theta.data().iter().all(|&t| (0.3..=4.0).contains(&t)));
        let labels = predict_labels(&a, &mask);
        assert!((0..n).all(|v| mask[v] || labels[v] == crate::geometry::EMPTY));

        // nothing active still yields finite logits
        let none = vec![false; n];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let out = stage2_forward(&mut tape, &p, &model, &layout, &ctx, &none).unwrap();
        assert!(tape.value(out.logits).is_finite());
        assert!(stage2_forward(&mut tape, &p, &model, &layout, &ctx, &none[1..]).is_err());
    }

    #[test]
    fn stage2_config_validation() {
        let mut store = ParamStore::new();
        let bad = Stage2Config { beta: 1.2, ..small_config() };
        assert!(matches!(Stage2Model::new(&mut store, bad, [6, 6, 4], &mut rng()), Err(Error::Config(_))));
        let bad = Stage2Config { points: 0, ..small_config() };
        assert!(Stage2Model::new(&mut store, bad, [6, 6, 4], &mut rng()).is_err());
    }

    #[test]
    fn stage2_gradients() {
        let (grid, ctx) = tiny_scene(3, 4);
        let layout = Arc::new(TriplaneLayout::new(grid.dims));
        let n = grid.num_voxels();
        let mut store = ParamStore::new();
        let mut r = rng();
        let model = Stage2Model::new(&mut store, small_config(), grid.dims, &mut r).unwrap();
        for v in store.values_mut() {
            v.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.1..0.1));
        }
        let mask: Vec<bool> = (0..n).map(|v| (v * 5) % 3 != 0).collect();
        let np = store.len();
        let k = FnKernel::new("stage2", move |tape, vars| {
            let p = Bound::from_vars(vars[..np].to_vec());
            Ok(stage2_forward(tape, &p, &model, &layout, &ctx, &mask)?.logits)
        });
        let report = GradCheck::default().probes(6).run(&k, store.values()).unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
