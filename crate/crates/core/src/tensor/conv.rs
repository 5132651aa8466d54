//! Stencil convolutions on regular grids with clamp-to-edge borders.

use std::sync::Arc;

use super::gemm::{gemm, Mat};
use super::ops::want;
use super::{Kernel, NdBuffer};
use crate::error::{Error, Result};
use crate::par;

/// Precomputed neighbor table: for each of `n` sites, `taps` row indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stencil {
    pub n: usize,
    pub taps: usize,
    pub table: Vec<u32>,
}

impl Stencil {
    /// 3x3 neighborhood on an `h x w` plane, edge-clamped. Tap order is
    /// row-major over offsets `(-1..=1) x (-1..=1)`.
    pub fn plane3x3(h: usize, w: usize) -> Self {
        let mut table = Vec::with_capacity(h * w * 9);
        for r in 0..h {
            for c in 0..w {
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let rr = (r as i64 + dr).clamp(0, h as i64 - 1) as usize;
                        let cc = (c as i64 + dc).clamp(0, w as i64 - 1) as usize;
                        table.push((rr * w + cc) as u32);
                    }
                }
            }
        }
        Self { n: h * w, taps: 9, table }
    }

    /// 3x3x3 neighborhood with the given dilation on an `x x y x z` grid
    /// (row-major, z fastest), edge-clamped.
    pub fn grid3(dims: [usize; 3], dilation: usize) -> Self {
        let [nx, ny, nz] = dims;
        let d = dilation as i64;
        let clamp = |v: i64, e: usize| v.clamp(0, e as i64 - 1) as usize;
        let mut table = Vec::with_capacity(nx * ny * nz * 27);
        for x in 0..nx {
            for y in 0..ny {
                for z in 0..nz {
                    for dx in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dz in -1i64..=1 {
                                let xx = clamp(x as i64 + dx * d, nx);
                                let yy = clamp(y as i64 + dy * d, ny);
                                let zz = clamp(z as i64 + dz * d, nz);
                                table.push(((xx * ny + yy) * nz + zz) as u32);
                            }
                        }
                    }
                }
            }
        }
        Self {
            n: nx * ny * nz,
            taps: 27,
            table,
        }
    }

    fn neighbors(&self, site: usize) -> &[u32] {
        &self.table[site * self.taps..(site + 1) * self.taps]
    }
}

/// `out[v] = b + sum_t x[nb(v, t)] W_t` with `x: [N x C]`, `W: [T*C x Co]`,
/// `b: [Co]`. Output keeps the leading extents of `x`.
pub struct StencilConv {
    pub stencil: Arc<Stencil>,
}

impl StencilConv {
    fn dims(&self, x: &NdBuffer, w: &NdBuffer, b: &NdBuffer) -> Result<(usize, usize)> {
        let c = x.cols();
        if x.rows() != self.stencil.n {
            return Err(Error::dim(format!(
                "stencil covers {} sites but input is {:?}",
                self.stencil.n,
                x.shape()
            )));
        }
        match w.shape() {
            &[r, co] if r == self.stencil.taps * c && b.len() == co => Ok((c, co)),
            s => Err(Error::dim(format!(
                "conv weight {s:?} / bias {:?} incompatible with {} taps of {c} channels",
                b.shape(),
                self.stencil.taps
            ))),
        }
    }
}

/// Sites per neighborhood-matrix block; keeps each block cache resident.
const BLOCK: usize = 512;

impl StencilConv {
    /// Neighborhood matrix of sites `start..start + len`: row `v` holds the
    /// `T` neighbor rows of `x` side by side.
    fn columns(&self, xd: &[f64], c: usize, start: usize, col: &mut [f64]) {
        let tc = self.stencil.taps * c;
        for (v, row) in col.chunks_exact_mut(tc).enumerate() {
            for (t, &nb) in self.stencil.neighbors(start + v).iter().enumerate() {
                row[t * c..(t + 1) * c].copy_from_slice(&xd[nb as usize * c..(nb as usize + 1) * c]);
            }
        }
    }

    fn blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.stencil.n.div_ceil(BLOCK)).map(|b| (b * BLOCK, BLOCK.min(self.stencil.n - b * BLOCK)))
    }
}

impl Kernel for StencilConv {
    fn name(&self) -> &str {
        "stencil_conv"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (c, co) = self.dims(x, w, b)?;
        let tc = self.stencil.taps * c;
        let mut out: Vec<f64> = (0..self.stencil.n).flat_map(|_| b.data().iter().copied()).collect();
        par::for_each_row(&mut out, BLOCK * co, |k, rows| {
            let len = rows.len() / co;
            let mut col = vec![0.0; len * tc];
            self.columns(x.data(), c, k * BLOCK, &mut col);
            gemm(Mat::new(&col, len, tc), Mat::new(w.data(), tc, co), 1.0, rows);
        });
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank") = co;
        NdBuffer::new(&shape, out)
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (c, co) = self.dims(x, w, b)?;
        let tc = self.stencil.taps * c;
        let gd = g.data();
        let dx = want(wants, 0, || {
            let mut out = vec![0.0; x.len()];
            let mut dcol = vec![0.0; BLOCK * tc];
            for (start, len) in self.blocks() {
                let dcol = &mut dcol[..len * tc];
                let gm = Mat::new(&gd[start * co..(start + len) * co], len, co);
                gemm(gm, Mat::new(w.data(), tc, co).t(), 0.0, dcol);
                for (v, drow) in dcol.chunks_exact(tc).enumerate() {
                    for (t, &nb) in self.stencil.neighbors(start + v).iter().enumerate() {
                        let dst = &mut out[nb as usize * c..(nb as usize + 1) * c];
                        for (d, s) in dst.iter_mut().zip(&drow[t * c..(t + 1) * c]) {
                            *d += s;
                        }
                    }
                }
            }
            NdBuffer::new(x.shape(), out).expect("shape")
        });
        let dw = want(wants, 1, || {
            let mut out = vec![0.0; tc * co];
            let mut col = vec![0.0; BLOCK * tc];
            for (start, len) in self.blocks() {
                let col = &mut col[..len * tc];
                self.columns(x.data(), c, start, col);
                let gm = Mat::new(&gd[start * co..(start + len) * co], len, co);
                gemm(Mat::new(col, len, tc).t(), gm, 1.0, &mut out);
            }
            NdBuffer::new(w.shape(), out).expect("shape")
        });
        let db = want(wants, 2, || {
            let mut out = vec![0.0; co];
            for row in gd.chunks_exact(co) {
                for (o, gg) in out.iter_mut().zip(row) {
                    *o += gg;
                }
            }
            NdBuffer::new(b.shape(), out).expect("shape")
        });
        Ok(vec![dx, dw, db])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn plane_stencil_clamps_corners() {
        let s = Stencil::plane3x3(2, 3);
        // top-left corner: offsets (-1,-1) clamp to (0,0)
        assert_eq!(&s.table[..9], &[0, 0, 1, 0, 0, 1, 3, 3, 4]);
    }

    #[test]
    fn dilated_grid_reach() {
        let s = Stencil::grid3([5, 5, 5], 2);
        let center = (2 * 5 + 2) * 5 + 2;
        let nb = &s.table[center * 27..(center + 1) * 27];
        assert_eq!(nb[0] as usize, 0);
        assert_eq!(nb[26] as usize, (4 * 5 + 4) * 5 + 4);
    }

    #[test]
    fn conv_gradients() {
        let k = StencilConv {
            stencil: Arc::new(Stencil::grid3([3, 2, 2], 1)),
        };
        let x = NdBuffer::new(&[12, 2], (0..24).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.5).collect()).unwrap();
        let w = NdBuffer::new(&[54, 3], (0..162).map(|i| ((i * 11) % 13) as f64 * 0.05 - 0.3).collect()).unwrap();
        let b = NdBuffer::new(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let err = grad_check(&k, &[x, w, b], 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
