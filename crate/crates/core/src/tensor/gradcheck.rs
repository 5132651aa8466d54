//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Kernel, NdBuffer};
use crate::error::{Error, Result};

/// Seed of the fixed output projection that makes any kernel scalar-valued.
const PROJECTION_SEED: u64 = 0x6a09_e667;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Probe at most this many elements per input (chosen at random);
    /// `None` probes every element.
    pub max_probes: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-6,
            max_probes: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Input index and element offset of the worst probe.
    pub worst: Option<(usize, usize)>,
    pub probes: usize,
}

fn projected(op: &dyn Kernel, inputs: &[&NdBuffer], proj: &[f64]) -> Result<f64> {
    let out = op.forward(inputs)?;
    if !out.is_finite() {
        return Err(Error::Numeric(format!("`{}` forward value is not finite", op.name())));
    }
    Ok(out.data().iter().zip(proj).map(|(a, b)| a * b).sum())
}

impl GradCheck {
    pub fn with_step(step: f64) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }

    pub fn probes(mut self, n: usize) -> Self {
        self.max_probes = Some(n);
        self
    }

    /// Max over probed elements of `|analytic - numeric| / max(1, |numeric|)`.
    pub fn run(&self, op: &dyn Kernel, inputs: &[NdBuffer]) -> Result<GradCheckReport> {
        let refs: Vec<&NdBuffer> = inputs.iter().collect();
        let out = op.forward(&refs)?;
        if !out.is_finite() {
            return Err(Error::Numeric(format!("`{}` forward value is not finite", op.name())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
        let proj: Vec<f64> = (0..out.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let seed = NdBuffer::new(out.shape(), proj.clone())?;
        let wants = vec![true; inputs.len()];
        let analytic = op.backward(&refs, &out, &seed, &wants)?;

        let mut pick = ChaCha8Rng::seed_from_u64(self.seed);
        let mut report = GradCheckReport {
            max_rel_error: 0.0,
            worst: None,
            probes: 0,
        };
        for (i, input) in inputs.iter().enumerate() {
            let grad = analytic[i]
                .clone()
                .unwrap_or_else(|| NdBuffer::zeros(input.shape()));
            let elems: Vec<usize> = match self.max_probes {
                Some(m) if m < input.len() => {
                    let mut v = sample(&mut pick, input.len(), m).into_vec();
                    v.sort_unstable();
                    v
                }
                _ => (0..input.len()).collect(),
            };
            let mut work: Vec<NdBuffer> = inputs.to_vec();
            for j in elems {
                let x0 = input.data()[j];
                work[i].data_mut()[j] = x0 + self.step;
                let fp = projected(op, &work.iter().collect::<Vec<_>>(), &proj)?;
                work[i].data_mut()[j] = x0 - self.step;
                let fm = projected(op, &work.iter().collect::<Vec<_>>(), &proj)?;
                work[i].data_mut()[j] = x0;
                let numeric = (fp - fm) / (2.0 * self.step);
                let err = (grad.data()[j] - numeric).abs() / numeric.abs().max(1.0);
                report.probes += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some((i, j));
                }
            }
        }
        Ok(report)
    }
}

/// Max relative error between the analytic and central-difference gradients
/// of `op` under a fixed random projection of its output.
pub fn grad_check(op: &dyn Kernel, inputs: &[NdBuffer], h: f64) -> Result<f64> {
    Ok(GradCheck::with_step(h).run(op, inputs)?.max_rel_error)
}
