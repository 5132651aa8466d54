//! Training objectives for both stages.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::UNKNOWN;
use crate::tensor::{Kernel, NdBuffer, Tape, Var};

/// Guard for logarithms of ratios in `sem_scal`.
pub const LOG_EPS: f64 = 1e-12;

/// Negatives kept when a batch has no positives, before applying the ratio.
pub const NEGATIVE_FLOOR: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1LossWeights {
    pub w0: f64,
    pub w1: f64,
    pub lambda_sigma: f64,
    pub lambda_delta: f64,
    pub sigma0: f64,
    pub neg_ratio: f64,
}

impl Default for Stage1LossWeights {
    fn default() -> Self {
        let alpha = 0.54;
        Self {
            w0: 1.0 - alpha,
            w1: alpha,
            lambda_sigma: 1e-3,
            lambda_delta: 1e-4,
            sigma0: 1.0,
            neg_ratio: 2.0,
        }
    }
}

impl Stage1LossWeights {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("w0", self.w0 > 0.0),
            ("w1", self.w1 > 0.0),
            ("lambda_sigma", self.lambda_sigma >= 0.0),
            ("lambda_delta", self.lambda_delta >= 0.0),
            ("sigma0", self.sigma0 > 0.0),
            ("neg_ratio", self.neg_ratio > 0.0),
        ];
        match checks.iter().find(|c| !c.1) {
            Some((name, _)) => Err(Error::config(format!("loss weight `{name}` is out of range"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2LossWeights {
    pub class_weights: Vec<f64>,
    pub lambda_ce: f64,
    pub lambda_sem: f64,
}

impl Stage2LossWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            class_weights: vec![1.0; num_classes],
            lambda_ce: 1.0,
            lambda_sem: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.class_weights.iter().position(|&w| !(w > 0.0)) {
            return Err(Error::config(format!("class weight {c} must be positive")));
        }
        if !(self.lambda_ce >= 0.0 && self.lambda_sem >= 0.0) {
            return Err(Error::config("lambda_ce and lambda_sem must be non-negative"));
        }
        Ok(())
    }
}

fn log_softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// Class-balanced binary cross-entropy on probabilities, summed over the
/// voxels with `mask` set.
pub fn balanced_bce_occupancy(probs: &[f64], labels: &[bool], mask: &[bool], w: &Stage1LossWeights) -> Result<f64> {
    if probs.len() != labels.len() || probs.len() != mask.len() {
        return Err(Error::dim("probabilities, labels and mask differ in length"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::config("balanced BCE over an empty voxel set"));
    }
    let mut total = 0.0;
    for v in (0..probs.len()).filter(|&v| mask[v]) {
        total -= if labels[v] { w.w1 * probs[v].ln() } else { w.w0 * (1.0 - probs[v]).ln() };
    }
    Ok(total)
}

/// [`balanced_bce_occupancy`] on `[N x 2]` logits through a stable
/// log-softmax. Voxels with `None` labels are skipped.
pub struct BalancedBce {
    labels: Arc<Vec<Option<bool>>>,
    w0: f64,
    w1: f64,
}

impl BalancedBce {
    pub fn new(labels: Arc<Vec<Option<bool>>>, w0: f64, w1: f64) -> Result<Self> {
        if !labels.iter().any(Option::is_some) {
            return Err(Error::config("balanced BCE over an empty voxel set"));
        }
        Ok(Self { labels, w0, w1 })
    }

    fn check(&self, z: &NdBuffer) -> Result<()> {
        if z.rank() != 2 || z.cols() != 2 || z.rows() != self.labels.len() {
            return Err(Error::dim(format!("occupancy logits {:?} for {} voxels", z.shape(), self.labels.len())));
        }
        Ok(())
    }
}

impl Kernel for BalancedBce {
    fn name(&self) -> &str {
        "balanced_bce"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let z = inputs[0];
        self.check(z)?;
        let mut ls = [0.0; 2];
        let mut total = 0.0;
        for (v, label) in self.labels.iter().enumerate() {
            if let Some(o) = *label {
                log_softmax_row(z.row(v), &mut ls);
                total -= if o { self.w1 * ls[1] } else { self.w0 * ls[0] };
            }
        }
        Ok(NdBuffer::scalar(total))
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let z = inputs[0];
        Ok(vec![wants[0].then(|| {
            let mut out = NdBuffer::zeros(z.shape());
            let mut ls = [0.0; 2];
            for (v, label) in self.labels.iter().enumerate() {
                if let Some(o) = *label {
                    log_softmax_row(z.row(v), &mut ls);
                    let w = g.item() * if o { self.w1 } else { self.w0 };
                    let row = out.row_mut(v);
                    row[0] = w * (ls[0].exp() - if o { 0.0 } else { 1.0 });
                    row[1] = w * (ls[1].exp() - if o { 1.0 } else { 0.0 });
                }
            }
            out
        })])
    }
}

/// `sum_v ||log sigma_v - log sigma0||^2` over `[N x 2]` extents.
pub fn sigma_reg(sigma: &NdBuffer, sigma0: f64) -> Result<f64> {
    SigmaReg::new(sigma0)?.forward(&[sigma]).map(|b| b.item())
}

/// `sum_v ||delta_v||_1`.
pub fn delta_reg(delta: &NdBuffer) -> f64 {
    delta.data().iter().map(|d| d.abs()).sum()
}

pub struct SigmaReg {
    log_sigma0: f64,
}

impl SigmaReg {
    pub fn new(sigma0: f64) -> Result<Self> {
        if !(sigma0 > 0.0) {
            return Err(Error::config("reference scale must be positive"));
        }
        Ok(Self { log_sigma0: sigma0.ln() })
    }
}

impl Kernel for SigmaReg {
    fn name(&self) -> &str {
        "sigma_reg"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let s = inputs[0];
        if s.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Numeric("sigma_reg needs positive extents".into()));
        }
        Ok(NdBuffer::scalar(s.data().iter().map(|v| (v.ln() - self.log_sigma0).powi(2)).sum()))
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let k = g.item();
        Ok(vec![wants[0].then(|| inputs[0].map(|v| k * 2.0 * (v.ln() - self.log_sigma0) / v))])
    }
}

/// L1 norm; the subgradient at zero is zero.
pub struct DeltaReg;

impl Kernel for DeltaReg {
    fn name(&self) -> &str {
        "delta_reg"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        Ok(NdBuffer::scalar(delta_reg(inputs[0])))
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let k = g.item();
        Ok(vec![wants[0].then(|| {
            inputs[0].map(|v| {
                if v > 0.0 {
                    k
                } else if v < 0.0 {
                    -k
                } else {
                    0.0
                }
            })
        })])
    }
}

/// Keeps every positive and `min(round(ratio * N_pos), N_neg)` uniformly
/// drawn negatives; with no positives, `N_pos` is replaced by
/// [`NEGATIVE_FLOOR`]. `labels` is `None` for voxels outside the loss.
pub fn negative_sample(labels: &[Option<bool>], ratio: f64, seed: u64) -> Result<Vec<bool>> {
    if !(ratio > 0.0) {
        return Err(Error::config(format!("negative ratio must be positive, got {ratio}")));
    }
    let positives = labels.iter().filter(|l| **l == Some(true)).count();
    let negatives: Vec<usize> = (0..labels.len()).filter(|&v| labels[v] == Some(false)).collect();
    let base = if positives == 0 { NEGATIVE_FLOOR } else { positives };
    let keep = ((ratio * base as f64).round() as usize).min(negatives.len());
    let mut out: Vec<bool> = labels.iter().map(|l| *l == Some(true)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in sample(&mut rng, negatives.len(), keep) {
        out[negatives[i]] = true;
    }
    Ok(out)
}

/// Semantic labels restricted to voxels that are in the mask and known.
fn valid_labels(labels: &[u8], mask: &[bool], num_classes: usize) -> Result<Vec<Option<usize>>> {
    if labels.len() != mask.len() {
        return Err(Error::dim("labels and mask differ in length"));
    }
    labels
        .iter()
        .zip(mask)
        .map(|(&y, &m)| match (m, y) {
            (false, _) | (true, UNKNOWN) => Ok(None),
            (true, y) if (y as usize) < num_classes => Ok(Some(y as usize)),
            (true, y) => Err(Error::index(format!("label {y} with {num_classes} classes"))),
        })
        .collect()
}

/// Mean class-weighted cross-entropy over valid voxels of `[N x C]` logits.
pub struct WeightedCe {
    labels: Arc<Vec<Option<usize>>>,
    weights: Vec<f64>,
    count: usize,
}

impl WeightedCe {
    pub fn new(labels: &[u8], mask: &[bool], weights: &Stage2LossWeights) -> Result<Self> {
        weights.validate()?;
        let labels = valid_labels(labels, mask, weights.class_weights.len())?;
        let count = labels.iter().filter(|l| l.is_some()).count();
        if count == 0 {
            return Err(Error::config("cross-entropy over an empty voxel set"));
        }
        Ok(Self {
            labels: Arc::new(labels),
            weights: weights.class_weights.clone(),
            count,
        })
    }

    fn check(&self, z: &NdBuffer) -> Result<()> {
        if z.rank() != 2 || z.rows() != self.labels.len() || z.cols() != self.weights.len() {
            return Err(Error::dim(format!("semantic logits {:?} for {} voxels", z.shape(), self.labels.len())));
        }
        Ok(())
    }
}

impl Kernel for WeightedCe {
    fn name(&self) -> &str {
        "weighted_ce"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let z = inputs[0];
        self.check(z)?;
        let mut ls = vec![0.0; z.cols()];
        let mut total = 0.0;
        for (v, y) in self.labels.iter().enumerate() {
            if let Some(y) = *y {
                log_softmax_row(z.row(v), &mut ls);
                total -= self.weights[y] * ls[y];
            }
        }
        Ok(NdBuffer::scalar(total / self.count as f64))
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        let z = inputs[0];
        Ok(vec![wants[0].then(|| {
            let mut out = NdBuffer::zeros(z.shape());
            let mut ls = vec![0.0; z.cols()];
            for (v, y) in self.labels.iter().enumerate() {
                if let Some(y) = *y {
                    log_softmax_row(z.row(v), &mut ls);
                    let k = g.item() * self.weights[y] / self.count as f64;
                    for (c, o) in out.row_mut(v).iter_mut().enumerate() {
                        *o = k * (ls[c].exp() - if c == y { 1.0 } else { 0.0 });
                    }
                }
            }
            out
        })])
    }
}

/// Structure-aware loss: for each class with ground-truth support,
/// `-log precision - log recall - log specificity` of the soft predictions,
/// averaged over those classes.
pub struct SemScal {
    labels: Arc<Vec<Option<usize>>>,
    num_classes: usize,
}

/// Per-class soft sums over valid voxels.
struct ClassMass {
    /// `sum p_c [y = c]`, `sum p_c`, `#[y = c]`, `sum (1 - p_c)[y != c]`, `#[y != c]`.
    inter: f64,
    pred: f64,
    gt: f64,
    true_neg: f64,
    neg: f64,
}

fn guarded_nll(x: f64) -> (f64, bool) {
    if x > LOG_EPS {
        (-x.ln(), true)
    } else {
        (-LOG_EPS.ln(), false)
    }
}

impl SemScal {
    pub fn new(labels: &[u8], mask: &[bool], num_classes: usize) -> Result<Self> {
        Ok(Self {
            labels: Arc::new(valid_labels(labels, mask, num_classes)?),
            num_classes,
        })
    }

    fn masses(&self, probs: &NdBuffer) -> Vec<ClassMass> {
        let mut m: Vec<ClassMass> = (0..self.num_classes)
            .map(|_| ClassMass {
                inter: 0.0,
                pred: 0.0,
                gt: 0.0,
                true_neg: 0.0,
                neg: 0.0,
            })
            .collect();
        for (v, y) in self.labels.iter().enumerate() {
            if let Some(y) = *y {
                for (c, mc) in m.iter_mut().enumerate() {
                    let p = probs.row(v)[c];
                    mc.pred += p;
                    if c == y {
                        mc.inter += p;
                        mc.gt += 1.0;
                    } else {
                        mc.true_neg += 1.0 - p;
                        mc.neg += 1.0;
                    }
                }
            }
        }
        m
    }

    fn probabilities(&self, z: &NdBuffer) -> Result<NdBuffer> {
        if z.rank() != 2 || z.rows() != self.labels.len() || z.cols() != self.num_classes {
            return Err(Error::dim(format!("semantic logits {:?} for {} voxels", z.shape(), self.labels.len())));
        }
        let mut p = z.clone();
        for v in 0..p.rows() {
            crate::tensor::ops::softmax_in_place(p.row_mut(v));
        }
        Ok(p)
    }
}

impl Kernel for SemScal {
    fn name(&self) -> &str {
        "sem_scal"
    }

    fn forward(&self, inputs: &[&NdBuffer]) -> Result<NdBuffer> {
        let p = self.probabilities(inputs[0])?;
        let (mut total, mut classes) = (0.0, 0usize);
        for m in self.masses(&p).iter().filter(|m| m.gt > 0.0) {
            classes += 1;
            total += guarded_nll(m.inter / m.pred).0 + guarded_nll(m.inter / m.gt).0;
            if m.neg > 0.0 {
                total += guarded_nll(m.true_neg / m.neg).0;
            }
        }
        Ok(NdBuffer::scalar(if classes == 0 { 0.0 } else { total / classes as f64 }))
    }

    fn backward(
        &self,
        inputs: &[&NdBuffer],
        _output: &NdBuffer,
        g: &NdBuffer,
        wants: &[bool],
    ) -> Result<Vec<Option<NdBuffer>>> {
        if !wants[0] {
            return Ok(vec![None]);
        }
        let p = self.probabilities(inputs[0])?;
        let masses = self.masses(&p);
        let classes = masses.iter().filter(|m| m.gt > 0.0).count();
        let mut out = NdBuffer::zeros(p.shape());
        if classes == 0 {
            return Ok(vec![Some(out)]);
        }
        let k = g.item() / classes as f64;
        // d loss / d p_vc = a_c [y = c] + b_c + e_c [y != c]
        let coef: Vec<[f64; 3]> = masses
            .iter()
            .map(|m| {
                if m.gt <= 0.0 {
                    return [0.0; 3];
                }
                let mut a = 0.0;
                let mut b = 0.0;
                let mut e = 0.0;
                if guarded_nll(m.inter / m.pred).1 {
                    a -= 1.0 / m.inter;
                    b += 1.0 / m.pred;
                }
                if guarded_nll(m.inter / m.gt).1 {
                    a -= 1.0 / m.inter;
                }
                if m.neg > 0.0 && guarded_nll(m.true_neg / m.neg).1 {
                    e += 1.0 / m.true_neg;
                }
                [k * a, k * b, k * e]
            })
            .collect();
        let mut dp = vec![0.0; self.num_classes];
        for (v, y) in self.labels.iter().enumerate() {
            if let Some(y) = *y {
                let pv = p.row(v);
                for c in 0..self.num_classes {
                    dp[c] = coef[c][1] + if c == y { coef[c][0] } else { coef[c][2] };
                }
                let s: f64 = dp.iter().zip(pv).map(|(d, q)| d * q).sum();
                for (c, o) in out.row_mut(v).iter_mut().enumerate() {
                    *o = pv[c] * (dp[c] - s);
                }
            }
        }
        Ok(vec![Some(out)])
    }
}

/// `L_CE + lambda_sigma L_sigma + lambda_delta L_delta`, with the CE term
/// restricted to `labels` (already negative-sampled).
pub fn stage1_loss(
    tape: &mut Tape,
    logits: Var,
    labels: Arc<Vec<Option<bool>>>,
    gaussians: Option<(Var, Var)>,
    w: &Stage1LossWeights,
) -> Result<Var> {
    w.validate()?;
    let ce = tape.apply(BalancedBce::new(labels, w.w0, w.w1)?, &[logits])?;
    match gaussians {
        None => Ok(ce),
        Some((delta, sigma)) => {
            let ls = tape.apply(SigmaReg::new(w.sigma0)?, &[sigma])?;
            let ld = tape.apply(DeltaReg, &[delta])?;
            tape.weighted_sum(&[(ce, 1.0), (ls, w.lambda_sigma), (ld, w.lambda_delta)])
        }
    }
}

/// `lambda_CE L_CE + lambda_sem L_sem_scal` over voxels in `mask`.
pub fn stage2_loss(tape: &mut Tape, logits: Var, labels: &[u8], mask: &[bool], w: &Stage2LossWeights) -> Result<Var> {
    let ce = tape.apply(WeightedCe::new(labels, mask, w)?, &[logits])?;
    let sem = tape.apply(SemScal::new(labels, mask, w.class_weights.len())?, &[logits])?;
    tape.weighted_sum(&[(ce, w.lambda_ce), (sem, w.lambda_sem)])
}
