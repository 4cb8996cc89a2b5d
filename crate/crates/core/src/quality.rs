//! Quality aggregation, logistic score remapping and the MAE training loss.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{order_free_sum, Tensor};

/// Below this the batch spread is treated as zero.
pub const MIN_STD: f64 = 1e-12;

/// `Σ dᵢ(1 + wᵢ) / k`.
pub fn aggregate_quality(d: &[f64], w: &[f64]) -> Result<f64> {
    if d.len() != w.len() {
        return Err(Error::shape("aggregate_quality", &[d.len()], &[w.len()]));
    }
    if d.is_empty() {
        return Err(Error::Contract("aggregate_quality needs at least one frame".into()));
    }
    let mut terms: Vec<f64> = d.iter().zip(w).map(|(d, w)| d * (1.0 + w)).collect();
    Ok(order_free_sum(&mut terms) * (1.0 / d.len() as f64))
}

/// Tape form of [`aggregate_quality`]; `d` and `w` are `k × 1`. Without `w`
/// (no transformer) the result is the plain mean of `d`.
pub fn aggregate_quality_var(tape: &mut Tape, d: Var, w: Option<Var>) -> Result<Var> {
    let k = tape.value(d).rows();
    let terms = match w {
        Some(w) => {
            let shape = tape.value(w).shape().to_vec();
            let one = tape.constant(Tensor::full(&shape, 1.0));
            let gain = tape.add(w, one)?;
            tape.mul(d, gain)?
        }
        None => d,
    };
    let total = tape.sum(terms);
    Ok(tape.scale(total, 1.0 / k as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RemapStats {
    pub q_mean: f64,
    pub q_std: f64,
    pub s_min: f64,
    pub s_max: f64,
}

impl RemapStats {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.q_mean, self.q_std, self.s_min, self.s_max].iter().all(|v| v.is_finite());
        if !finite || self.q_std <= 0.0 || self.s_max <= self.s_min {
            return Err(Error::Degenerate(format!("invalid remap statistics {self:?}")));
        }
        Ok(())
    }
}

/// Logistic map into `(s_min, s_max)`. Increasing in `q` unless `decreasing`,
/// which reproduces the literal sign of the printed formula.
pub fn remap(q: f64, stats: &RemapStats, decreasing: bool) -> f64 {
    let z = (q - stats.q_mean) / stats.q_std;
    let z = if decreasing { -z } else { z };
    stats.s_min + (stats.s_max - stats.s_min) * crate::autograd::sigmoid(z)
}

pub fn label_range(s_values: &[f64]) -> Result<(f64, f64)> {
    let lo = s_values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
        return Err(Error::Degenerate(format!(
            "label range needs distinct finite labels, got [{lo}, {hi}]"
        )));
    }
    Ok((lo, hi))
}

fn mean_std(q: &[f64]) -> (f64, f64) {
    let n = q.len() as f64;
    let mean = q.iter().sum::<f64>() / n;
    let var = q.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and population std of `q_values`; label range of `s_values`.
pub fn compute_remap_stats(q_values: &[f64], s_values: &[f64]) -> Result<RemapStats> {
    if q_values.len() < 2 {
        return Err(Error::Degenerate(format!(
            "remap statistics need at least 2 predictions, got {}",
            q_values.len()
        )));
    }
    let (q_mean, q_std) = mean_std(q_values);
    if !(q_std > MIN_STD) {
        return Err(Error::Degenerate(format!("constant predictions (std {q_std})")));
    }
    let (s_min, s_max) = label_range(s_values)?;
    Ok(RemapStats {
        q_mean,
        q_std,
        s_min,
        s_max,
    })
}

/// Mean absolute error.
pub fn mae_loss(q_hat: &[f64], s: &[f64]) -> Result<f64> {
    if q_hat.len() != s.len() {
        return Err(Error::shape("mae_loss", &[q_hat.len()], &[s.len()]));
    }
    if s.is_empty() {
        return Err(Error::Contract("mae_loss on an empty batch".into()));
    }
    Ok(q_hat.iter().zip(s).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub loss: f64,
    /// `∂L/∂q_b` for every clip in the batch.
    pub dq: Vec<f64>,
    pub q_mean: f64,
    pub q_std: f64,
}

/// Remaps a batch with its own mean/std (differentiated through) and returns
/// the MAE against `labels` with its gradient with respect to the raw scores.
pub fn batch_remap_loss(q_raw: &[f64], labels: &[f64], s_range: (f64, f64), decreasing: bool) -> Result<BatchLoss> {
    let b = q_raw.len();
    if b != labels.len() {
        return Err(Error::shape("batch_remap_loss", &[b], &[labels.len()]));
    }
    if b < 2 {
        return Err(Error::Contract(format!("batch remap needs at least 2 clips, got {b}")));
    }
    if let Some(v) = q_raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite raw quality {v} in batch")));
    }
    let (mean, std) = mean_std(q_raw);
    if !(std > MIN_STD) {
        return Err(Error::Numerical(format!(
            "raw qualities collapsed within a batch (std {std:e}, mean {mean})"
        )));
    }
    let (s_min, s_max) = s_range;
    let mut tape = Tape::new();
    let q = tape.leaf(Tensor::row(q_raw.to_vec()));
    let m = tape.mean_axis(q, 1)?;
    let m = tape.broadcast(m, &[1, b])?;
    let centered = tape.sub(q, m)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_axis(sq, 1)?;
    let sd = tape.sqrt(var);
    let inv = tape.recip(sd);
    let inv = tape.broadcast(inv, &[1, b])?;
    let z = tape.mul(centered, inv)?;
    let z = if decreasing { tape.scale(z, -1.0) } else { z };
    let g = tape.sigmoid(z);
    let scaled = tape.scale(g, s_max - s_min);
    let target = tape.constant(Tensor::row(labels.iter().map(|s| s - s_min).collect()));
    let diff = tape.sub(scaled, target)?;
    let abs = tape.abs(diff);
    let total = tape.sum(abs);
    let loss = tape.scale(total, 1.0 / b as f64);
    let grads = tape.backward(loss)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Numerical(format!("non-finite batch loss {loss_value}")));
    }
    Ok(BatchLoss {
        loss: loss_value,
        dq: grads.wrt(q).into_data(),
        q_mean: mean,
        q_std: std,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QualityPrediction {
    pub q_raw: f64,
    pub q_mapped: f64,
    pub per_sample_raw: Vec<f64>,
}

impl QualityPrediction {
    pub fn new(per_sample_raw: Vec<f64>, stats: &RemapStats, decreasing: bool) -> Self {
        let q_raw = per_sample_raw.iter().sum::<f64>() / per_sample_raw.len() as f64;
        Self {
            q_raw,
            q_mapped: remap(q_raw, stats, decreasing),
            per_sample_raw,
        }
    }
}
