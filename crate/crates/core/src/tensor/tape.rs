//! Reverse-mode differentiation tape.
//!
//! Every recorded node pairs a [`Kernel`] forward evaluation with the
//! kernel's vector-Jacobian product. Replaying the nodes in reverse
//! recording order visits each node after all of its consumers, so every
//! input receives its full gradient exactly once.

use std::fmt;

use super::NdBuffer;
use crate::error::{Error, Result};

/// A differentiable kernel: a forward map on buffers and its
/// vector-Jacobian product.
///
/// Non-differentiable configuration (indices, constants, dimensions) lives in
/// the kernel value itself; `inputs` are the differentiable operands.
pub trait Kernel: Send + Sync {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer>;

    /// Returns one gradient per input. Entries whose `wants` flag is false
    /// may be `None`.
    fn backward(
        &self,
        inputs: &[&NdBuffer],
        output: &NdBuffer,
        grad_output: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Origin {
    Leaf,
    Op {
        kernel: Box<dyn Kernel>,
        inputs: Vec<Var>,
    },
}

struct Node {
    value: NdBuffer,
    origin: Origin,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

/// Gradients of one backward pass, keyed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<NdBuffer>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&NdBuffer> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<NdBuffer> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf whose gradient is wanted.
    pub fn param(&mut self, value: NdBuffer) -> Var {
        self.push(value, Origin::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: NdBuffer) -> Var {
        self.push(value, Origin::Leaf, false)
    }

    fn push(&mut self, value: NdBuffer, origin: Origin, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            origin,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &NdBuffer {
        &self.nodes[var.0].value
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    pub fn apply<K: Kernel + 'static>(&mut self, kernel: K, inputs: &[Var]) -> Result<Var> {
        self.apply_boxed(Box::new(kernel), inputs)
    }

    pub fn apply_boxed(&mut self, kernel: Box<dyn Kernel>, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&NdBuffer> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = kernel.forward(&values)?;
        if !out.is_finite() {
            return Err(Error::Numeric(format!(
                "kernel `{}` produced a non-finite value",
                kernel.name()
            )));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(
            out,
            Origin::Op {
                kernel,
                inputs: inputs.to_vec(),
            },
            needs_grad,
        ))
    }

    /// Backward pass from a one-element output, seeded with 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let value = self.value(output);
        if value.len() != 1 {
            return Err(Error::dim(format!(
                "backward() needs a scalar output, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with(output, NdBuffer::filled(value.shape(), 1.0))
    }

    /// Backward pass seeded with an arbitrary output cotangent.
    pub fn backward_with(&self, output: Var, seed: NdBuffer) -> Result<Gradients> {
        self.value(output).same_shape(&seed)?;
        let mut grads: Vec<Option<NdBuffer>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            let Origin::Op { kernel, inputs } = &node.origin else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let wants: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].needs_grad).collect();
            let in_values: Vec<&NdBuffer> =
                inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let in_grads = kernel.backward(&in_values, &node.value, &g, &wants)?;
            for ((var, want), ig) in inputs.iter().zip(&wants).zip(in_grads) {
                let (true, Some(ig)) = (*want, ig) else {
                    continue;
                };
                debug_assert_eq!(
                    ig.shape(),
                    self.nodes[var.0].value.shape(),
                    "gradient shape from `{}`",
                    kernel.name()
                );
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        // Only leaves keep their gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.origin, Origin::Op { .. }) {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Wraps a tape-building closure as a single [`Kernel`], so composite
/// pipelines can be checked and reused like primitive kernels.
pub struct FnKernel<F> {
    name: String,
    f: F,
}

impl<F> FnKernel<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            name: name.into(),
            f,
        }
    }

    fn build(&self, inputs: &[&NdBuffer]) -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|b| tape.param((*b).clone())).collect();
        let out = (self.f)(&mut tape, &vars)?;
        Ok((tape, vars, out))
    }
}

impl<F> Kernel for FnKernel<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let (tape, _, out) = self.build(inputs)?;
        Ok(tape.value(out).clone())
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        grad_output: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let (tape, vars, out) = self.build(inputs)?;
        let mut grads = tape.backward_with(out, grad_output.clone())?;
        Ok(vars
            .iter()
            .zip(inputs)
            .zip(wants)
            .map(|((v, b), &w)| {
                w.then(|| grads.take(*v).unwrap_or_else(|| NdBuffer::zeros(b.shape())))
            })
            .collect())
    }
}
