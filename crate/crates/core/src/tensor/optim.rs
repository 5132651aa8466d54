//! Named parameter storage and the Adam optimizer.

use super::{NdBuffer, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered, named set of trainable buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<NdBuffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdBuffer) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &NdBuffer {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdBuffer {
        &mut self.values[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[NdBuffer] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [NdBuffer] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdBuffer)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a value by name, checking its shape.
    pub fn load(&mut self, name: &str, value: NdBuffer) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))?;
        self.values[id.0].same_shape(&value).map_err(|_| {
            Error::dim(format!(
                "parameter `{name}` has shape {:?}, file has {:?}",
                self.values[id.0].shape(),
                value.shape()
            ))
        })?;
        self.values[id.0] = value;
        Ok(())
    }

    /// Records every parameter as a gradient-carrying tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.param(v.clone())).collect(),
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
        }
    }
}

/// Tape variables of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps tape variables laid out in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<NdBuffer>,
    second: Vec<NdBuffer>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[NdBuffer]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| NdBuffer::zeros(p.shape())).collect(),
            second: params.iter().map(|p| NdBuffer::zeros(p.shape())).collect(),
        }
    }

    pub fn first_moments(&self) -> &[NdBuffer] {
        &self.first
    }

    pub fn second_moments(&self) -> &[NdBuffer] {
        &self.second
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [NdBuffer], grads: &[NdBuffer], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::dim(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        for (((pi, gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![NdBuffer::new(&[2], vec![1.0, -2.0]).unwrap()];
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        adam_step(&mut p, &[NdBuffer::zeros(&[2])], &mut s).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn descends_on_square() {
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut p = vec![NdBuffer::scalar(1.0)];
        let mut s = OptimizerState::new(cfg, &p);
        let g = NdBuffer::scalar(2.0 * p[0].item());
        adam_step(&mut p, &[g], &mut s).unwrap();
        assert!(p[0].item() < 1.0);
        for _ in 1..200 {
            let g = NdBuffer::scalar(2.0 * p[0].item());
            adam_step(&mut p, &[g], &mut s).unwrap();
        }
        assert!(p[0].item().abs() < 1e-2, "x = {}", p[0].item());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let mut p = vec![NdBuffer::zeros(&[2])];
        let mut s = OptimizerState::new(AdamConfig::default(), &p);
        let err = adam_step(&mut p, &[NdBuffer::zeros(&[3])], &mut s).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
