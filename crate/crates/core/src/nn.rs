//! Small parameterized layers shared by both stages.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Bound, NdBuffer, ParamId, ParamStore, Tape, Var};

pub type ModelRng = ChaCha8Rng;

/// Glorot-uniform matrix.
pub fn glorot(rng: &mut ModelRng, fan_in: usize, fan_out: usize, gain: f64) -> NdBuffer {
    let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    NdBuffer::new(&[fan_in, fan_out], data).expect("valid shape")
}

/// Affine map `x W + b` on rows.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut ModelRng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out, gain));
        let bias = store.add(format!("{name}.bias"), NdBuffer::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), NdBuffer::zeros(&[fan_in, fan_out]));
        let bias = store.add(format!("{name}.bias"), NdBuffer::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p.var(self.weight), p.var(self.bias))
    }

    /// Plain evaluation on a `[N x fan_in]` buffer.
    pub fn eval(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let w = store.get(self.weight).data();
        let mut out = store.get(self.bias).data().to_vec();
        for (i, &xv) in x.iter().enumerate() {
            for (o, wv) in out.iter_mut().zip(&w[i * self.fan_out..(i + 1) * self.fan_out]) {
                *o += xv * wv;
            }
        }
        out
    }
}

/// Two affine layers with a ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: [usize; 3],
        rng: &mut ModelRng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims[0], dims[1], 1.0, rng),
            out: Linear::new(store, &format!("{name}.1"), dims[1], dims[2], 1.0, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.out.forward(tape, p, h)
    }

    pub fn eval(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.hidden.eval(store, x).into_iter().map(|v| v.max(0.0)).collect();
        self.out.eval(store, &h)
    }
}
