//! Temperature softmax and the hard / soft cross-entropy losses.
//!
//! Every loss returns the mean over the batch together with its gradient
//! with respect to the logits.

use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Real, Result, Tensor, NUM_CLASSES};

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Argument(format!("temperature must be positive and finite, got {t}")))
    }
}

fn check_logits<T: Real>(logits: &Tensor<T>) -> Result<()> {
    if logits.shape().len() != 2 {
        return Err(Error::Config(format!("logits must be [N, C], got {:?}", logits.shape())));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(())
}

/// Row-wise `exp(z_i/T) / Σ_j exp(z_j/T)`, max-subtracted.
pub fn softmax_with_temperature<T: Real>(logits: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    check_temperature(temperature)?;
    check_logits(logits)?;
    let t = T::from_f64(temperature);
    let mut out = Vec::with_capacity(logits.len());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &z in row {
            let e = ((z - max) / t).exp();
            sum = sum + e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p = *p / sum;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Row-wise log-softmax at temperature `t`, in `f64`.
fn log_softmax_row<T: Real>(row: &[T], t: f64) -> Vec<f64> {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = row.iter().map(|&z| (z.as_f64() - max) / t).collect();
    let lse = num_traits::Float::ln(shifted.iter().map(|&s| num_traits::Float::exp(s)).sum::<f64>());
    shifted.into_iter().map(|s| s - lse).collect()
}

/// Mean negative log-likelihood of the true class.
/// Gradient: `(softmax(z) − onehot) / N`.
pub fn cross_entropy_hard<T: Real>(logits: &Tensor<T>, labels: &[u8]) -> Result<(f64, Tensor<T>)> {
    check_logits(logits)?;
    let n = logits.rows();
    let classes = logits.row_len();
    if labels.len() != n {
        return Err(Error::Data(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes.min(NUM_CLASSES)) {
        return Err(Error::Data(format!("label {bad} out of range [0, {})", classes.min(NUM_CLASSES))));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    let inv_n = 1.0 / n as f64;
    for (i, &label) in labels.iter().enumerate() {
        let logp = log_softmax_row(logits.row(i), 1.0);
        loss -= logp[label as usize];
        for (j, lp) in logp.into_iter().enumerate() {
            let target = if j == label as usize { 1.0 } else { 0.0 };
            grad.push(T::from_f64((num_traits::Float::exp(lp) - target) * inv_n));
        }
    }
    Ok((loss * inv_n, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Soft-target cross-entropy at temperature `T`, scaled by `T²`:
/// `T² · mean_n(−Σ_i q_i log p_i)` with `p = softmax(z / T)`.
/// Gradient w.r.t. the student logits: `T · (p − q) / N`.
pub fn cross_entropy_soft<T: Real>(
    student_logits: &Tensor<T>,
    teacher_probs: &Tensor<T>,
    temperature: f64,
) -> Result<(f64, Tensor<T>)> {
    check_temperature(temperature)?;
    check_logits(student_logits)?;
    if teacher_probs.shape() != student_logits.shape() {
        return Err(Error::Data(format!(
            "teacher probabilities {:?} do not match logits {:?}",
            teacher_probs.shape(),
            student_logits.shape()
        )));
    }
    let n = student_logits.rows();
    for i in 0..n {
        let s: f64 = teacher_probs.row(i).iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::Data(format!("teacher row {i} sums to {s}")));
        }
    }
    let t = temperature;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(student_logits.len());
    for i in 0..n {
        let logp = log_softmax_row(student_logits.row(i), t);
        for (lp, &q) in logp.into_iter().zip(teacher_probs.row(i)) {
            let q = q.as_f64();
            loss -= q * lp;
            grad.push(T::from_f64(t * (num_traits::Float::exp(lp) - q) * inv_n));
        }
    }
    Ok((t * t * loss * inv_n, Tensor::new(student_logits.shape().to_vec(), grad)?))
}

/// Shannon entropy (nats) of each probability row.
pub fn entropy_rows<T: Real>(probs: &Tensor<T>) -> Vec<f64> {
    (0..probs.rows())
        .map(|i| {
            probs
                .row(i)
                .iter()
                .map(|p| p.as_f64())
                .filter(|&p| p > 0.0)
                .map(|p| -p * num_traits::Float::ln(p))
                .sum()
        })
        .collect()
}
