//! Feature distribution prediction: a head mapping a fused feature to a
//! per-sample diagonal Gaussian, shared by the teacher and student paths.

use rand::Rng;

use crate::aff::FusedRepresentation;
use crate::distributions::{kl_diag, kl_diag_grad, DiagGaussian};
use crate::error::{ensure, Result};
use crate::nn::{global_avg_pool, global_avg_pool_backward, join, Linear, Module, Param};
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Pool → project to `k` → mean head and log-variance head.
#[derive(Debug, Clone)]
pub struct FdpHead {
    pub projection: Linear,
    pub mean_head: Linear,
    pub logvar_head: Linear,
}

/// Per-sample Gaussian parameters, each `(B, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionBatch {
    pub mean: Tensor,
    pub var: Tensor,
}

impl DistributionBatch {
    pub fn batch_size(&self) -> usize {
        self.mean.shape()[0]
    }

    pub fn sample(&self, i: usize) -> Result<DiagGaussian> {
        DiagGaussian::new(self.mean.row(i).to_vec(), self.var.row(i).to_vec())
    }
}

pub struct FdpCache {
    in_shape: (usize, usize, usize, usize),
    pooled: Tensor,
    projected: Tensor,
    logvar_raw: Tensor,
}

impl FdpHead {
    pub fn new(in_channels: usize, k: usize, rng: &mut impl Rng) -> Self {
        FdpHead {
            projection: Linear::new(in_channels, k, rng),
            mean_head: Linear::new(k, k, rng),
            logvar_head: Linear::new(k, k, rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.projection.in_features
    }

    pub fn k(&self) -> usize {
        self.projection.out_features
    }

    fn check(&self, feature: &Tensor) -> Result<()> {
        ensure!(feature.shape().len() == 4, "fused feature must be 4-d, got {:?}", feature.shape());
        ensure!(
            feature.shape()[1] == self.in_channels(),
            "fused feature has {} channels, head expects {}",
            feature.shape()[1],
            self.in_channels()
        );
        Ok(())
    }

    pub fn forward_cached(&self, feature: &Tensor) -> Result<(DistributionBatch, FdpCache)> {
        self.check(feature)?;
        let pooled = global_avg_pool(feature);
        let projected = self.projection.forward(&pooled)?;
        let mean = self.mean_head.forward(&projected)?;
        let logvar_raw = self.logvar_head.forward(&projected)?;
        let var = logvar_raw.map(|s| s.clamp(LOGVAR_MIN, LOGVAR_MAX).exp());
        let cache = FdpCache { in_shape: feature.dims4(), pooled, projected, logvar_raw };
        Ok((DistributionBatch { mean, var }, cache))
    }

    /// Accumulates head gradients and returns the gradient for the fused feature.
    pub fn backward(&mut self, cache: &FdpCache, d_mean: &Tensor, d_var: &Tensor) -> Tensor {
        let d_logvar = cache.logvar_raw.zip_map(d_var, |s, g| {
            if (LOGVAR_MIN..=LOGVAR_MAX).contains(&s) {
                g * s.exp()
            } else {
                0.0
            }
        });
        let mut d_proj = self.mean_head.backward(&cache.projected, d_mean);
        d_proj.add_assign(&self.logvar_head.backward(&cache.projected, &d_logvar));
        let d_pooled = self.projection.backward(&cache.pooled, &d_proj);
        global_avg_pool_backward(&d_pooled, cache.in_shape)
    }
}

impl Module for FdpHead {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.projection.visit_params(&join(prefix, "projection"), f);
        self.mean_head.visit_params(&join(prefix, "mean_head"), f);
        self.logvar_head.visit_params(&join(prefix, "logvar_head"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.projection.visit_params_mut(&join(prefix, "projection"), f);
        self.mean_head.visit_params_mut(&join(prefix, "mean_head"), f);
        self.logvar_head.visit_params_mut(&join(prefix, "logvar_head"), f);
    }
}

/// Variances are `exp(clamp(s, −10, 10))` of the log-variance head output.
pub fn predict_distribution(fused: &FusedRepresentation, head: &FdpHead) -> Result<DistributionBatch> {
    Ok(head.forward_cached(&fused.feature)?.0)
}

/// Batch mean of `KL(student ‖ teacher)` over per-sample Gaussians.
pub fn feature_distribution_loss(
    student_fused: &FusedRepresentation,
    teacher_fused: &FusedRepresentation,
    head: &FdpHead,
) -> Result<f64> {
    let s = predict_distribution(student_fused, head)?;
    let t = predict_distribution(teacher_fused, head)?;
    distribution_kl(&s, &t)
}

fn distribution_kl(s: &DistributionBatch, t: &DistributionBatch) -> Result<f64> {
    ensure!(s.batch_size() == t.batch_size(), "student and teacher batch sizes differ");
    let b = s.batch_size();
    let mut total = 0.0;
    for i in 0..b {
        total += kl_diag(&s.sample(i)?, &t.sample(i)?)?;
    }
    Ok(total / b as f64)
}

pub struct FdpLossGrad {
    pub loss: f64,
    /// Gradient for the student fused feature.
    pub d_student: Tensor,
    /// Gradient for the teacher fused feature; `None` when the teacher
    /// distribution is detached.
    pub d_teacher: Option<Tensor>,
}

/// Loss with gradients. Head gradients are accumulated from both paths
/// (from the student path only when `detach_teacher` is set), scaled by `weight`.
pub fn feature_distribution_loss_with_grad(
    student_feature: &Tensor,
    teacher_feature: &Tensor,
    head: &mut FdpHead,
    weight: f64,
    detach_teacher: bool,
) -> Result<FdpLossGrad> {
    let (s, s_cache) = head.forward_cached(student_feature)?;
    let (t, t_cache) = head.forward_cached(teacher_feature)?;
    ensure!(s.batch_size() == t.batch_size(), "student and teacher batch sizes differ");
    let b = s.batch_size();
    let k = head.k();
    let mut d_ms = Tensor::zeros(&[b, k]);
    let mut d_vs = Tensor::zeros(&[b, k]);
    let mut d_mt = Tensor::zeros(&[b, k]);
    let mut d_vt = Tensor::zeros(&[b, k]);
    let mut total = 0.0;
    let scale = weight / b as f64;
    for i in 0..b {
        let (q, p) = (s.sample(i)?, t.sample(i)?);
        total += kl_diag(&q, &p)?;
        let g = kl_diag_grad(&q, &p)?;
        for j in 0..k {
            d_ms.data_mut()[i * k + j] = scale * g.mean_q[j];
            d_vs.data_mut()[i * k + j] = scale * g.var_q[j];
            d_mt.data_mut()[i * k + j] = scale * g.mean_p[j];
            d_vt.data_mut()[i * k + j] = scale * g.var_p[j];
        }
    }
    let d_student = head.backward(&s_cache, &d_ms, &d_vs);
    let d_teacher = (!detach_teacher).then(|| head.backward(&t_cache, &d_mt, &d_vt));
    Ok(FdpLossGrad { loss: total / b as f64, d_student, d_teacher })
}
