//! Adaptation objectives and the certain/uncertain batch split.
//!
//! Scalar helpers ([`entropy`], [`symmetric_kl`]) work on plain probability
//! rows. The `*_loss` functions build their value on a [`Tape`] so the trainer
//! can differentiate them. All logarithms are natural and clamp their input at
//! [`LOG_EPS`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var, LOG_EPS};
use crate::tensor::Tensor;

/// Tolerance on `Σ p = 1` for probability rows passed to the scalar helpers.
pub const NORMALIZATION_TOL: f64 = 1e-6;

fn clamped_ln(v: f64) -> f64 {
    v.max(LOG_EPS).ln()
}

fn check_normalized(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOL || p.iter().any(|&v| !(-NORMALIZATION_TOL..=1.0 + NORMALIZATION_TOL).contains(&v)) {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> Result<f64> {
    check_normalized(p)?;
    Ok(entropy_unchecked(p))
}

fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * clamped_ln(v)).sum::<f64>()
}

/// `½ (KL(a‖b) + KL(b‖a))`, which equals `½ Σ (a − b)(ln a − ln b)`.
pub fn symmetric_kl(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "symmetric_kl",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    check_normalized(a)?;
    check_normalized(b)?;
    Ok(0.5
        * a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y) * (clamped_ln(x) - clamped_ln(y)))
            .sum::<f64>())
}

/// Entropy of every row of an `[n×K]` probability matrix.
pub fn row_entropies(p: &Tensor) -> Result<Vec<f64>> {
    let (n, _) = p.dims2("row_entropies")?;
    (0..n).map(|r| entropy(p.row(r))).collect()
}

/// Linear-interpolation quantile of unsorted values.
///
/// For `q = 0.5` and an even count this is the midpoint of the two middle
/// order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Partition of a batch by anchor-prediction entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSplit {
    /// Samples with `H ≤ τ`.
    pub certain: Vec<usize>,
    /// Samples with `H > τ`.
    pub uncertain: Vec<usize>,
    pub tau: f64,
}

impl BatchSplit {
    /// Splits with an explicit threshold.
    pub fn from_threshold(entropies: &[f64], tau: f64) -> Self {
        let (mut certain, mut uncertain) = (Vec::new(), Vec::new());
        for (i, &h) in entropies.iter().enumerate() {
            if h > tau {
                uncertain.push(i);
            } else {
                certain.push(i);
            }
        }
        Self {
            certain,
            uncertain,
            tau,
        }
    }

    /// Every sample in the uncertain set.
    pub fn all_uncertain(n: usize) -> Self {
        Self {
            certain: Vec::new(),
            uncertain: (0..n).collect(),
            tau: f64::NEG_INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.certain.len() + self.uncertain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks that the two sets partition `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.certain.iter().chain(&self.uncertain) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Split(format!("index {i} is out of range or listed twice for a batch of {n}")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Split(format!("split covers {} of {n} samples", self.len())));
        }
        Ok(())
    }

    /// `+1` for certain rows, `−1` for uncertain rows.
    pub fn signs(&self, n: usize) -> Result<Vec<f64>> {
        self.validate(n)?;
        let mut s = vec![1.0; n];
        for &i in &self.uncertain {
            s[i] = -1.0;
        }
        Ok(s)
    }
}

/// Splits a batch at the `percentile` quantile of anchor entropies.
pub fn split_batch(p1: &Tensor, percentile: f64) -> Result<BatchSplit> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(Error::Percentile(percentile));
    }
    let n = p1.dims2("split_batch")?.0;
    if n < 2 {
        return Err(Error::BatchTooSmall { n });
    }
    let h = row_entropies(p1)?;
    let tau = quantile(&h, percentile);
    Ok(BatchSplit::from_threshold(&h, tau))
}

/// Named scalar loss value for logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub name: String,
    pub value: f64,
    pub batch_size: usize,
}

impl LossReport {
    pub fn new(name: &str, value: f64, batch_size: usize) -> Self {
        Self {
            name: name.to_string(),
            value,
            batch_size,
        }
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
    let (av, bv) = (tape.value(a), tape.value(b));
    if av.shape() != bv.shape() {
        return Err(Error::Shape {
            op,
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        });
    }
    av.dims2(op)
}

/// `−(1/n) Σ_i ln p[i, y_i]`.
pub fn cross_entropy_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = tape.value(probs).dims2("cross_entropy")?;
    if labels.len() != n {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: vec![n, k],
            right: vec![labels.len()],
        });
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        onehot[i * k + y] = 1.0;
    }
    let mask = tape.constant(Tensor::matrix(n, k, onehot)?);
    let logp = tape.log(probs);
    let picked = tape.mul(mask, logp)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Signed symmetric-KL agreement loss for the bait head.
///
/// `Σ_{x∈C} D_SKL(p1, p2) − Σ_{x∈U} D_SKL(p1, p2)`. `p1` is detached, so
/// gradients reach only whatever produced `p2`.
pub fn cast_loss(tape: &mut Tape, p1: Var, p2: Var, split: &BatchSplit) -> Result<Var> {
    let (n, k) = same_shape(tape, "cast_loss", p1, p2)?;
    let signs = split.signs(n)?;
    let p1 = tape.detach(p1);
    let weights: Vec<f64> = signs.iter().flat_map(|&s| std::iter::repeat_n(0.5 * s, k)).collect();
    let w = tape.constant(Tensor::matrix(n, k, weights)?);
    let diff = tape.sub(p1, p2)?;
    let l1 = tape.log(p1);
    let l2 = tape.log(p2);
    let ldiff = tape.sub(l1, l2)?;
    let skl = tape.mul(diff, ldiff)?;
    let signed = tape.mul(skl, w)?;
    Ok(tape.sum(signed))
}

/// Symmetric cross-entropy between the two heads, summed over the batch.
pub fn bite_loss(tape: &mut Tape, p1: Var, p2: Var) -> Result<Var> {
    same_shape(tape, "bite_loss", p1, p2)?;
    let l1 = tape.log(p1);
    let l2 = tape.log(p2);
    let a = tape.mul(p2, l1)?;
    let b = tape.mul(p1, l2)?;
    let both = tape.add(a, b)?;
    let s = tape.sum(both);
    Ok(tape.scale(s, -1.0))
}

/// `KL(p̄ ‖ uniform)` where `p̄` is the batch-mean prediction.
pub fn class_balance_single(tape: &mut Tape, p: Var) -> Result<Var> {
    let (n, k) = tape.value(p).dims2("class_balance")?;
    if n == 0 {
        return Err(Error::BatchTooSmall { n });
    }
    let avg = tape.constant(Tensor::full(&[1, n], 1.0 / n as f64));
    let mean = tape.matmul(avg, p)?;
    let log_mean = tape.log(mean);
    let log_q = tape.constant(Tensor::full(&[1, k], -(k as f64).ln()));
    let ratio = tape.sub(log_mean, log_q)?;
    let terms = tape.mul(mean, ratio)?;
    Ok(tape.sum(terms))
}

/// Class-balance loss over both heads: `KL(p̄¹‖q) + KL(p̄²‖q)`.
pub fn class_balance_loss(tape: &mut Tape, p1: Var, p2: Var) -> Result<Var> {
    same_shape(tape, "class_balance", p1, p2)?;
    let a = class_balance_single(tape, p1)?;
    let b = class_balance_single(tape, p2)?;
    tape.add(a, b)
}
