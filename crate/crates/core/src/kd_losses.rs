//! Temperature softmax, logits KD, feature-MSE baseline and the combined
//! objective.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result, UniKdError};
use crate::tensor::Tensor;

fn log_softmax_into(z: &[f64], tau: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max) / tau;
        sum += o.exp();
    }
    let lse = sum.ln();
    out.iter_mut().for_each(|o| *o -= lse);
}

/// `P_j = exp(z_j/τ) / Σ_c exp(z_c/τ)`, max-shifted.
pub fn softmax_tau(z: &[f64], tau: f64) -> Result<Vec<f64>> {
    ensure!(!z.is_empty(), "softmax of an empty vector");
    ensure!(tau > 0.0 && tau.is_finite(), "temperature must be positive and finite, got {tau}");
    ensure!(z.iter().all(|v| v.is_finite()), "softmax input must be finite");
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|v| ((v - max) / tau).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    Ok(p)
}

/// Teacher and student logits for one batch at a given temperature.
#[derive(Debug, Clone)]
pub struct LogitsBundle {
    teacher: Tensor,
    student: Tensor,
    tau: f64,
}

impl LogitsBundle {
    /// Both logits tensors are `(B, C)`.
    pub fn new(teacher: Tensor, student: Tensor, tau: f64) -> Result<Self> {
        ensure!(teacher.shape().len() == 2, "logits must be (B, C), got {:?}", teacher.shape());
        ensure!(
            teacher.shape() == student.shape(),
            "teacher logits {:?} and student logits {:?} differ in shape",
            teacher.shape(),
            student.shape()
        );
        ensure!(teacher.shape()[0] >= 1 && teacher.shape()[1] >= 1, "empty logits");
        ensure!(tau > 0.0 && tau.is_finite(), "temperature must be positive and finite, got {tau}");
        ensure!(teacher.is_finite() && student.is_finite(), "logits must be finite");
        Ok(LogitsBundle { teacher, student, tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn teacher(&self) -> &Tensor {
        &self.teacher
    }

    pub fn student(&self) -> &Tensor {
        &self.student
    }
}

/// Batch mean of `KL(p_t(τ) ‖ p_s(τ))`, teacher first.
pub fn logits_kd_loss(b: &LogitsBundle) -> f64 {
    logits_kd_loss_with_grad(b).0
}

/// Loss plus its gradient with respect to the student logits. The teacher
/// side is treated as constant.
pub fn logits_kd_loss_with_grad(b: &LogitsBundle) -> (f64, Tensor) {
    let (rows, c) = b.teacher.dims2();
    let mut grad = Tensor::zeros(&[rows, c]);
    let mut lt = vec![0.0; c];
    let mut ls = vec![0.0; c];
    let mut total = 0.0;
    for r in 0..rows {
        log_softmax_into(b.teacher.row(r), b.tau, &mut lt);
        log_softmax_into(b.student.row(r), b.tau, &mut ls);
        let g = &mut grad.data_mut()[r * c..(r + 1) * c];
        for j in 0..c {
            let pt = lt[j].exp();
            if pt > 0.0 {
                total += pt * (lt[j] - ls[j]);
            }
            g[j] = (ls[j].exp() - pt) / (b.tau * rows as f64);
        }
    }
    (total / rows as f64, grad)
}

/// Mean softmax cross-entropy against integer labels, with its logits gradient.
pub fn cross_entropy_with_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (rows, c) = logits.dims2();
    ensure!(rows == labels.len(), "{rows} logits rows but {} labels", labels.len());
    ensure!(rows >= 1, "empty batch");
    let mut grad = Tensor::zeros(&[rows, c]);
    let mut lp = vec![0.0; c];
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        ensure!(y < c, "label {y} out of range for {c} classes");
        log_softmax_into(logits.row(r), 1.0, &mut lp);
        total -= lp[y];
        let g = &mut grad.data_mut()[r * c..(r + 1) * c];
        for j in 0..c {
            g[j] = (lp[j].exp() - if j == y { 1.0 } else { 0.0 }) / rows as f64;
        }
    }
    Ok((total / rows as f64, grad))
}

/// `½ Σᵢ mean_e (F_iᵗ − w_i(F_iˢ))²`: squared residual averaged over the
/// elements of each layer, summed over layers.
pub fn feature_mse_loss(
    teacher_feats: &[Tensor],
    student_feats: &[Tensor],
    adapters: &[&dyn Fn(&Tensor) -> Result<Tensor>],
) -> Result<f64> {
    ensure!(
        teacher_feats.len() == student_feats.len() && student_feats.len() == adapters.len(),
        "feature lists differ in length: {} teacher, {} student, {} adapters",
        teacher_feats.len(),
        student_feats.len(),
        adapters.len()
    );
    let adapted = student_feats
        .iter()
        .zip(adapters)
        .map(|(f, w)| w(f))
        .collect::<Result<Vec<_>>>()?;
    Ok(feature_mse_with_grad(teacher_feats, &adapted)?.0)
}

/// Feature MSE on already-adapted student features, with the gradient with
/// respect to each adapted feature.
pub fn feature_mse_with_grad(teacher_feats: &[Tensor], adapted: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
    ensure!(teacher_feats.len() == adapted.len(), "feature lists differ in length");
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(adapted.len());
    for (i, (t, s)) in teacher_feats.iter().zip(adapted).enumerate() {
        if t.shape() != s.shape() {
            return Err(UniKdError::contract(format!(
                "layer {i}: adapted student feature {:?} does not match teacher {:?}",
                s.shape(),
                t.shape()
            )));
        }
        let n = t.numel() as f64;
        let mut sq = 0.0;
        let g = s.zip_map(t, |sv, tv| (sv - tv) / n);
        for (sv, tv) in s.data().iter().zip(t.data()) {
            let d = sv - tv;
            sq += d * d;
        }
        total += 0.5 * sq / n;
        grads.push(g);
    }
    Ok((total, grads))
}

/// Weights of the combined objective `ce + α·fl + β·logits_kl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        ensure!(alpha.is_finite() && alpha >= 0.0, "alpha must be finite and >= 0, got {alpha}");
        ensure!(beta.is_finite() && beta >= 0.0, "beta must be finite and >= 0, got {beta}");
        Ok(LossWeights { alpha, beta })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.1, beta: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub fl: f64,
    pub logits_kl: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Recombines the parts with the stored weights.
    pub fn recombined(&self) -> f64 {
        self.ce + self.weights.alpha * self.fl + self.weights.beta * self.logits_kl
    }
}

pub fn total_loss(ce: f64, fl: f64, logits_kl: f64, weights: LossWeights) -> Result<LossBreakdown> {
    ensure!(
        ce.is_finite() && fl.is_finite() && logits_kl.is_finite(),
        "loss components must be finite (ce={ce}, fl={fl}, logits_kl={logits_kl})"
    );
    Ok(LossBreakdown {
        ce,
        fl,
        logits_kl,
        total: ce + weights.alpha * fl + weights.beta * logits_kl,
        weights,
    })
}
