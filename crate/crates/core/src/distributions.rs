//! Gaussian distributions and the KL divergence between them.
//!
//! `kl_diag` and `kl_full` compute `KL(q ‖ p)` with the student distribution
//! as `q` and the teacher as `p`. [`kl_monte_carlo`] is a sampling estimate of
//! the same quantity that shares no code with the closed forms, so it can be
//! used to check them.
//!
//! All math here is `f64`. Variances are validated, never clamped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Result, UniKdError};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Maximum element-wise asymmetry accepted for a covariance matrix.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

/// Gaussian with diagonal covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        ensure!(!mean.is_empty(), "gaussian dimension must be at least 1");
        ensure!(
            mean.len() == var.len(),
            "mean has {} entries but var has {}",
            mean.len(),
            var.len()
        );
        if let Some(i) = mean.iter().position(|m| !m.is_finite()) {
            return Err(UniKdError::contract(format!("mean[{i}] is not finite")));
        }
        if let Some(i) = var.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(UniKdError::contract(format!(
                "var[{i}] = {} must be finite and strictly positive",
                var[i]
            )));
        }
        Ok(DiagGaussian { mean, var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    /// The same distribution as a dense-covariance Gaussian.
    pub fn to_full(&self) -> FullGaussian {
        let k = self.dim();
        let mut cov = vec![0.0; k * k];
        for i in 0..k {
            cov[i * k + i] = self.var[i];
        }
        FullGaussian::new(self.mean.clone(), cov).expect("positive diagonal is PD")
    }
}

/// Gaussian with dense covariance, factorized at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGaussian {
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Vec<f64>,
}

impl FullGaussian {
    /// `cov` is row-major `k × k`.
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let k = mean.len();
        ensure!(k >= 1, "gaussian dimension must be at least 1");
        ensure!(cov.len() == k * k, "covariance must be {k}x{k}, got {} entries", cov.len());
        ensure!(
            mean.iter().chain(&cov).all(|v| v.is_finite()),
            "mean and covariance entries must be finite"
        );
        for i in 0..k {
            for j in 0..i {
                let d = (cov[i * k + j] - cov[j * k + i]).abs();
                ensure!(
                    d <= SYMMETRY_TOLERANCE,
                    "covariance not symmetric at ({i},{j}): |diff| = {d:e}"
                );
            }
        }
        let chol = cholesky(&cov, k)?;
        Ok(FullGaussian { mean, cov, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn cov(&self) -> &[f64] {
        &self.cov
    }

    /// Lower-triangular factor `L` with `L Lᵀ = Σ`, row-major.
    pub fn cholesky_factor(&self) -> &[f64] {
        &self.chol
    }

    fn log_det(&self) -> f64 {
        let k = self.dim();
        2.0 * (0..k).map(|i| self.chol[i * k + i].ln()).sum::<f64>()
    }
}

/// Cholesky–Banachiewicz. Fails on the first non-positive pivot, which is
/// the smallest pivot seen so far.
pub fn cholesky(a: &[f64], k: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(UniKdError::NotPositiveDefinite { index: i, pivot: s });
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Ok(l)
}

/// Solves `L x = b` in place for lower-triangular `L`.
fn forward_substitute(l: &[f64], k: usize, b: &mut [f64]) {
    for i in 0..k {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * k + p] * b[p];
        }
        b[i] = s / l[i * k + i];
    }
}

fn check_dims(kq: usize, kp: usize) -> Result<()> {
    ensure!(kq == kp, "dimension mismatch: q has {kq}, p has {kp}");
    Ok(())
}

/// `KL(q ‖ p)` for diagonal Gaussians:
/// `½ Σᵢ [σ²_qi/σ²_pi + (μ_pi − μ_qi)²/σ²_pi − 1 + ln(σ²_pi/σ²_qi)]`.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    check_dims(q.dim(), p.dim())?;
    let mut acc = 0.0;
    for i in 0..q.dim() {
        let (vq, vp) = (q.var[i], p.var[i]);
        let dm = p.mean[i] - q.mean[i];
        let ratio = vq / vp;
        // ratio - 1 - ln(ratio) loses nothing when written this way
        acc += ratio - 1.0 - ratio.ln() + dm * dm / vp;
    }
    Ok(0.5 * acc)
}

/// Partial derivatives of [`kl_diag`] with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagKlGrad {
    pub mean_q: Vec<f64>,
    pub var_q: Vec<f64>,
    pub mean_p: Vec<f64>,
    pub var_p: Vec<f64>,
}

pub fn kl_diag_grad(q: &DiagGaussian, p: &DiagGaussian) -> Result<DiagKlGrad> {
    check_dims(q.dim(), p.dim())?;
    let k = q.dim();
    let mut g = DiagKlGrad {
        mean_q: vec![0.0; k],
        var_q: vec![0.0; k],
        mean_p: vec![0.0; k],
        var_p: vec![0.0; k],
    };
    for i in 0..k {
        let (vq, vp) = (q.var[i], p.var[i]);
        let dm = p.mean[i] - q.mean[i];
        g.mean_q[i] = -dm / vp;
        g.mean_p[i] = dm / vp;
        g.var_q[i] = 0.5 * (1.0 / vp - 1.0 / vq);
        g.var_p[i] = 0.5 * (1.0 / vp - (vq + dm * dm) / (vp * vp));
    }
    Ok(g)
}

/// `KL(q ‖ p)` for dense-covariance Gaussians:
/// `½ [tr(Σ_p⁻¹Σ_q) + (μ_p − μ_q)ᵀ Σ_p⁻¹ (μ_p − μ_q) − k + ln(|Σ_p|/|Σ_q|)]`,
/// evaluated through the Cholesky factors; no inverse is formed.
pub fn kl_full(q: &FullGaussian, p: &FullGaussian) -> Result<f64> {
    check_dims(q.dim(), p.dim())?;
    let k = q.dim();
    let lp = &p.chol;

    // tr(Σ_p⁻¹ Σ_q) = ‖L_p⁻¹ L_q‖²_F, one column of L_q at a time.
    let mut trace = 0.0;
    let mut col = vec![0.0; k];
    for j in 0..k {
        for i in 0..k {
            col[i] = q.chol[i * k + j];
        }
        forward_substitute(lp, k, &mut col);
        trace += col.iter().map(|v| v * v).sum::<f64>();
    }

    let mut diff: Vec<f64> = p.mean.iter().zip(&q.mean).map(|(a, b)| a - b).collect();
    forward_substitute(lp, k, &mut diff);
    let mahalanobis: f64 = diff.iter().map(|v| v * v).sum();

    Ok(0.5 * (trace + mahalanobis - k as f64 + p.log_det() - q.log_det()))
}

/// Sampling and density access for the Monte-Carlo estimator.
pub trait Gaussian {
    fn dim(&self) -> usize;
    /// Writes `μ + A z` where `A Aᵀ = Σ`.
    fn transform(&self, z: &[f64], out: &mut [f64]);
    fn log_pdf(&self, x: &[f64], scratch: &mut [f64]) -> f64;
}

impl Gaussian for DiagGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn transform(&self, z: &[f64], out: &mut [f64]) {
        for i in 0..self.mean.len() {
            out[i] = self.mean[i] + self.var[i].sqrt() * z[i];
        }
    }

    fn log_pdf(&self, x: &[f64], _scratch: &mut [f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.mean.len() {
            let d = x[i] - self.mean[i];
            acc += LN_2PI + self.var[i].ln() + d * d / self.var[i];
        }
        -0.5 * acc
    }
}

impl Gaussian for FullGaussian {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn transform(&self, z: &[f64], out: &mut [f64]) {
        let k = self.mean.len();
        for i in 0..k {
            let mut s = self.mean[i];
            for j in 0..=i {
                s += self.chol[i * k + j] * z[j];
            }
            out[i] = s;
        }
    }

    fn log_pdf(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let k = self.mean.len();
        for i in 0..k {
            scratch[i] = x[i] - self.mean[i];
        }
        forward_substitute(&self.chol, k, &mut scratch[..k]);
        let quad: f64 = scratch[..k].iter().map(|v| v * v).sum();
        -0.5 * (k as f64 * LN_2PI + self.log_det() + quad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Estimates `KL(q ‖ p)` as the sample mean of `log q(x) − log p(x)` with
/// `x ~ q`. Deterministic for a given seed.
pub fn kl_monte_carlo<G: Gaussian>(q: &G, p: &G, n_samples: usize, seed: u64) -> Result<McEstimate> {
    check_dims(q.dim(), p.dim())?;
    ensure!(n_samples >= 1, "n_samples must be at least 1");
    let k = q.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; k];
    let mut x = vec![0.0; k];
    let mut scratch = vec![0.0; k];
    // Welford accumulation
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for j in 0..n_samples {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        q.transform(&z, &mut x);
        let v = q.log_pdf(&x, &mut scratch) - p.log_pdf(&x, &mut scratch);
        let delta = v - mean;
        mean += delta / (j + 1) as f64;
        m2 += delta * (v - mean);
    }
    let stderr = if n_samples > 1 {
        (m2 / (n_samples - 1) as f64 / n_samples as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(McEstimate { estimate: mean, stderr })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(mean: &[f64], var: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn hand_values() {
        let kl = kl_diag(&diag(&[0.0], &[1.0]), &diag(&[1.0], &[1.0])).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);
        let kl = kl_diag(&diag(&[0.0], &[2.0]), &diag(&[0.0], &[1.0])).unwrap();
        assert!((kl - 0.153_426_4).abs() < 1e-7);
        let kl = kl_diag(&diag(&[0.0, 0.0], &[1.0, 2.0]), &diag(&[1.0, 0.0], &[1.0, 1.0])).unwrap();
        assert!((kl - 0.653_426_4).abs() < 1e-7);
    }

    #[test]
    fn full_two_dim_hand_value() {
        let q = FullGaussian::new(vec![0.0; 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = FullGaussian::new(vec![0.0; 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        assert!((kl_full(&q, &p).unwrap() - 0.193_147_2).abs() < 1e-7);
        assert!(kl_full(&q, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0], vec![-1.0]).is_err());
        assert!(DiagGaussian::new(vec![f64::NAN], vec![1.0]).is_err());
        assert!(DiagGaussian::new(vec![0.0, 1.0], vec![1.0]).is_err());
        assert!(DiagGaussian::new(vec![], vec![]).is_err());
        let a = diag(&[0.0], &[1.0]);
        let b = diag(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(kl_diag(&a, &b).is_err());
    }

    #[test]
    fn non_pd_reports_pivot() {
        let err = FullGaussian::new(vec![0.0; 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap_err();
        match err {
            UniKdError::NotPositiveDefinite { index, pivot } => {
                assert_eq!(index, 1);
                assert!((pivot + 3.0).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(FullGaussian::new(vec![0.0; 2], vec![1.0, 0.5, 0.4, 1.0]).is_err());
    }

    #[test]
    fn monte_carlo_identical_is_zero() {
        let q = diag(&[0.3, -1.0], &[0.5, 2.0]);
        let est = kl_monte_carlo(&q, &q, 1000, 1).unwrap();
        assert_eq!(est.estimate, 0.0);
        assert!(est.estimate.abs() <= 3.0 * est.stderr + 1e-15);
    }

    #[test]
    fn monte_carlo_is_seed_deterministic() {
        let q = diag(&[0.0], &[1.0]);
        let p = diag(&[1.0], &[1.0]);
        let a = kl_monte_carlo(&q, &p, 5000, 42).unwrap();
        let b = kl_monte_carlo(&q, &p, 5000, 42).unwrap();
        assert_eq!(a, b);
    }
}
