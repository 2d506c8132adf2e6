//! Evaluation diagnostics: top-1 accuracy, the CDF of teacher/student logit
//! gaps, correlation-matrix differences and the KL oracle self-check.

use std::io::Write;
use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::backbones::{ArchSpec, ToyResNet};
use crate::checkpoint::{self, Checkpoint};
use crate::data::{Dataset, Normalization};
use crate::distributions::{kl_diag, kl_full, kl_monte_carlo, DiagGaussian, FullGaussian};
use crate::error::{ensure, Result, UniKdError};
use crate::tensor::Tensor;

/// Maps raw `[0, 1]` images to logits.
pub trait Classifier {
    fn class_count(&self) -> usize;
    fn logits(&self, images: &Tensor) -> Result<Tensor>;
}

/// A backbone with the input normalization it was trained under.
#[derive(Debug, Clone)]
pub struct NormalizedNet {
    pub net: ToyResNet,
    pub norm: Normalization,
}

impl Classifier for NormalizedNet {
    fn class_count(&self) -> usize {
        self.net.spec().class_count
    }

    fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.net.logits(&self.norm.apply(images))
    }
}

/// Rebuilds the backbone stored in a checkpoint.
pub fn load_classifier(path: &Path) -> Result<NormalizedNet> {
    let ck = Checkpoint::load(path)?;
    let spec = ArchSpec::parse(&ck.meta.architecture, ck.meta.class_count, ck.meta.input_size)
        .map_err(|e| UniKdError::Checkpoint(e.to_string()))?;
    let mut net = ToyResNet::new(spec, &mut ChaCha8Rng::seed_from_u64(0));
    ck.load_module(checkpoint::BACKBONE, &mut net)?;
    Ok(NormalizedNet { net, norm: Normalization { mean: ck.meta.norm_mean, std: ck.meta.norm_std } })
}

fn check_split(model: &dyn Classifier, split: &Dataset) -> Result<()> {
    ensure!(!split.is_empty(), "evaluation split is empty");
    if model.class_count() != split.class_count() {
        return Err(UniKdError::Checkpoint(format!(
            "model predicts {} classes but the split has {}",
            model.class_count(),
            split.class_count()
        )));
    }
    Ok(())
}

/// `(N, C)` logits over the whole split, in storage order.
pub fn collect_logits(model: &dyn Classifier, split: &Dataset, batch_size: usize) -> Result<Tensor> {
    check_split(model, split)?;
    ensure!(batch_size >= 1, "batch_size must be at least 1");
    let mut parts = Vec::new();
    let mut start = 0;
    while start < split.len() {
        let end = (start + batch_size).min(split.len());
        let idx: Vec<usize> = (start..end).collect();
        parts.push(model.logits(&split.gather(&idx).images)?);
        start = end;
    }
    Tensor::concat_batch(&parts)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Percentage of samples whose argmax logit equals the label.
pub fn eval_top1(model: &dyn Classifier, split: &Dataset, batch_size: usize) -> Result<f64> {
    let logits = collect_logits(model, split, batch_size)?;
    let correct = split
        .labels()
        .iter()
        .enumerate()
        .filter(|(i, &y)| argmax(logits.row(*i)) == y)
        .count();
    Ok(100.0 * correct as f64 / split.len() as f64)
}

pub fn eval_top1_checkpoint(path: &Path, split: &Dataset, batch_size: usize) -> Result<f64> {
    let model = load_classifier(path)?;
    if model.net.spec().input_size != split.side() {
        return Err(UniKdError::Checkpoint(format!(
            "checkpoint expects {}x{} inputs but the split is {}x{}",
            model.net.spec().input_size,
            model.net.spec().input_size,
            split.side(),
            split.side()
        )));
    }
    eval_top1(&model, split, batch_size)
}

fn paired_logits(teacher: &dyn Classifier, student: &dyn Classifier, split: &Dataset) -> Result<(Tensor, Tensor)> {
    if teacher.class_count() != student.class_count() {
        return Err(UniKdError::contract(format!(
            "teacher has {} classes, student has {}",
            teacher.class_count(),
            student.class_count()
        )));
    }
    Ok((collect_logits(teacher, split, 256)?, collect_logits(student, split, 256)?))
}

/// Empirical CDF of `|z_t − z_s|` evaluated at `xs`.
pub fn empirical_cdf(samples: &mut [f64], xs: &[f64]) -> Vec<f64> {
    samples.sort_by(|a, b| a.total_cmp(b));
    let n = samples.len() as f64;
    xs.iter()
        .map(|&x| samples.partition_point(|&v| v <= x) as f64 / n)
        .collect()
}

/// `(x, F(x))` at `n_points` equally spaced `x` from 0 to the observed max.
pub fn cdf_from_logits(teacher: &Tensor, student: &Tensor, n_points: usize) -> Result<Vec<(f64, f64)>> {
    ensure!(teacher.shape() == student.shape(), "logit shapes differ");
    ensure!(n_points >= 1, "n_points must be at least 1");
    ensure!(teacher.numel() > 0, "no logits to compare");
    let mut gaps: Vec<f64> = teacher.data().iter().zip(student.data()).map(|(a, b)| (a - b).abs()).collect();
    let max = gaps.iter().copied().fold(0.0, f64::max);
    let xs: Vec<f64> = if n_points == 1 {
        vec![max]
    } else {
        (0..n_points)
            .map(|i| if i + 1 == n_points { max } else { max * i as f64 / (n_points - 1) as f64 })
            .collect()
    };
    let ys = empirical_cdf(&mut gaps, &xs);
    Ok(xs.into_iter().zip(ys).collect())
}

/// Per-element pooled CDF of teacher/student logit gaps over a split.
pub fn logits_cdf(
    teacher: &dyn Classifier,
    student: &dyn Classifier,
    split: &Dataset,
    n_points: usize,
) -> Result<Vec<(f64, f64)>> {
    let (t, s) = paired_logits(teacher, student, split)?;
    cdf_from_logits(&t, &s, n_points)
}

/// Pearson correlation between logit dimensions across samples. Dimensions
/// with zero variance get correlation 0 everywhere (including the diagonal)
/// and are returned in the second element.
pub fn pearson_matrix(logits: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c) = logits.dims2();
    let mut mean = vec![0.0; c];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(logits.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut cov = vec![0.0; c * c];
    for r in 0..n {
        let row = logits.row(r);
        for i in 0..c {
            let di = row[i] - mean[i];
            for j in i..c {
                cov[i * c + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let sd: Vec<f64> = (0..c).map(|i| cov[i * c + i].sqrt()).collect();
    let degenerate: Vec<usize> = (0..c).filter(|&i| !(sd[i] > 0.0)).collect();
    let mut corr = Tensor::zeros(&[c, c]);
    for i in 0..c {
        for j in i..c {
            let v = if sd[i] > 0.0 && i == j {
                1.0
            } else if sd[i] > 0.0 && sd[j] > 0.0 {
                (cov[i * c + j] / (sd[i] * sd[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            corr.data_mut()[i * c + j] = v;
            corr.data_mut()[j * c + i] = v;
        }
    }
    (corr, degenerate)
}

pub fn corr_diff_from_logits(teacher: &Tensor, student: &Tensor) -> Result<Tensor> {
    ensure!(teacher.shape() == student.shape(), "logit shapes differ");
    ensure!(teacher.dims2().0 >= 2, "need at least 2 samples for a correlation, got {}", teacher.dims2().0);
    let (ct, dt) = pearson_matrix(teacher);
    let (cs, ds) = pearson_matrix(student);
    if !dt.is_empty() || !ds.is_empty() {
        info!("zero-variance logit dimensions (teacher {dt:?}, student {ds:?}) given correlation 0");
    }
    Ok(ct.zip_map(&cs, |a, b| (a - b).abs()))
}

/// `|corr_t − corr_s|` over the split's logits.
pub fn corr_matrix_diff(teacher: &dyn Classifier, student: &dyn Classifier, split: &Dataset) -> Result<Tensor> {
    ensure!(split.len() >= 2, "need at least 2 samples, split has {}", split.len());
    let (t, s) = paired_logits(teacher, student, split)?;
    corr_diff_from_logits(&t, &s)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub top1: f64,
    pub cdf_points: Vec<(f64, f64)>,
    pub corr_diff: Tensor,
    pub mean_abs_logit_gap: f64,
}

pub fn diagnose(
    teacher: &dyn Classifier,
    student: &dyn Classifier,
    split: &Dataset,
    n_points: usize,
) -> Result<DiagnosticsReport> {
    let (t, s) = paired_logits(teacher, student, split)?;
    let correct = split.labels().iter().enumerate().filter(|(i, &y)| argmax(s.row(*i)) == y).count();
    let gap = t.data().iter().zip(s.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.numel() as f64;
    Ok(DiagnosticsReport {
        top1: 100.0 * correct as f64 / split.len() as f64,
        cdf_points: cdf_from_logits(&t, &s, n_points)?,
        corr_diff: corr_diff_from_logits(&t, &s)?,
        mean_abs_logit_gap: gap,
    })
}

pub fn write_cdf_csv(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# |z_t - z_s| pooled per logit element")?;
    writeln!(f, "x,y")?;
    for (x, y) in points {
        writeln!(f, "{x},{y}")?;
    }
    Ok(())
}

pub fn write_corr_csv(path: &Path, diff: &Tensor) -> Result<()> {
    let (c, _) = diff.dims2();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "C={c}")?;
    for r in 0..c {
        let row: Vec<String> = diff.row(r).iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct KlCheckOptions {
    pub n_cases: usize,
    pub seed: u64,
    pub n_samples: usize,
    /// Oracle agreement: `|closed − mc| ≤ max(stderr_factor·stderr, rel_tol·|closed|)`.
    pub stderr_factor: f64,
    pub rel_tol: f64,
    /// Diagonal reduction: `|kl_full − kl_diag| ≤ reduction_tol`.
    pub reduction_tol: f64,
}

impl KlCheckOptions {
    pub fn new(n_cases: usize, seed: u64) -> Self {
        KlCheckOptions { n_cases, seed, n_samples: 1_000_000, stderr_factor: 3.0, rel_tol: 0.02, reduction_tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlCase {
    pub index: usize,
    pub kind: &'static str,
    pub dim: usize,
    pub closed_form: f64,
    pub monte_carlo: f64,
    pub stderr: f64,
    /// `|closed − mc|` divided by the allowed deviation; ≤ 1 passes.
    pub oracle_ratio: f64,
    /// `|kl_full − kl_diag|`, diagonal cases only.
    pub reduction_deviation: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KlCheckSummary {
    pub cases: Vec<KlCase>,
    pub max_oracle_ratio: f64,
    pub max_reduction_deviation: f64,
    pub passed: bool,
}

/// Random diagonal Gaussian pair of dimension `k`. Variances span
/// `[e⁻³, e³]` in log space.
pub fn random_diag_pair(k: usize, rng: &mut impl Rng) -> (DiagGaussian, DiagGaussian) {
    let mut draw = || {
        let mean = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let var = (0..k).map(|_| rng.random_range(-3.0f64..3.0).exp()).collect();
        DiagGaussian::new(mean, var).expect("valid draw")
    };
    let q = draw();
    (q, draw())
}

/// Random dense-covariance pair: `Σ = A Aᵀ/k + 0.1 I` with Gaussian `A`.
pub fn random_full_pair(k: usize, rng: &mut impl Rng) -> (FullGaussian, FullGaussian) {
    let mut draw = || {
        let a: Vec<f64> = (0..k * k).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let mut cov = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let s: f64 = (0..k).map(|p| a[i * k + p] * a[j * k + p]).sum();
                cov[i * k + j] = s / k as f64 + if i == j { 0.1 } else { 0.0 };
            }
        }
        let mean = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        FullGaussian::new(mean, cov).expect("A Aᵀ + 0.1 I is PD")
    };
    let q = draw();
    (q, draw())
}

/// Closed-form KL against the Monte-Carlo estimate over random diagonal and
/// dense cases (alternating), plus the diagonal-reduction identity on each
/// diagonal case. Case 0 is a near-singular diagonal pair with `σ² = e⁻¹⁰`.
pub fn kl_selfcheck(opts: &KlCheckOptions) -> Result<KlCheckSummary> {
    ensure!(opts.n_cases >= 1, "n_cases must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cases = Vec::with_capacity(opts.n_cases);
    for index in 0..opts.n_cases {
        let k = rng.random_range(1..=8usize);
        let mc_seed: u64 = rng.random();
        let (kind, closed, mc, reduction) = if index == 0 {
            let q = DiagGaussian::new(vec![0.0; k], vec![(-10.0f64).exp(); k])?;
            let p = DiagGaussian::new(vec![0.5; k], vec![(-9.0f64).exp(); k])?;
            let closed = kl_diag(&q, &p)?;
            let red = (kl_full(&q.to_full(), &p.to_full())? - closed).abs();
            ("diag", closed, kl_monte_carlo(&q, &p, opts.n_samples, mc_seed)?, Some(red))
        } else if index % 2 == 1 {
            let (q, p) = random_diag_pair(k, &mut rng);
            let closed = kl_diag(&q, &p)?;
            let red = (kl_full(&q.to_full(), &p.to_full())? - closed).abs();
            ("diag", closed, kl_monte_carlo(&q, &p, opts.n_samples, mc_seed)?, Some(red))
        } else {
            let (q, p) = random_full_pair(k, &mut rng);
            ("full", kl_full(&q, &p)?, kl_monte_carlo(&q, &p, opts.n_samples, mc_seed)?, None)
        };
        let allowed = (opts.stderr_factor * mc.stderr).max(opts.rel_tol * closed.abs());
        let dev = (closed - mc.estimate).abs();
        let oracle_ratio = if allowed > 0.0 { dev / allowed } else if dev == 0.0 { 0.0 } else { f64::INFINITY };
        let red_ok = reduction.is_none_or(|r| r <= opts.reduction_tol);
        let finite = closed.is_finite() && mc.estimate.is_finite();
        cases.push(KlCase {
            index,
            kind,
            dim: k,
            closed_form: closed,
            monte_carlo: mc.estimate,
            stderr: mc.stderr,
            oracle_ratio,
            reduction_deviation: reduction,
            passed: finite && oracle_ratio <= 1.0 && red_ok,
        });
    }
    let max_oracle_ratio = cases.iter().map(|c| c.oracle_ratio).fold(0.0, f64::max);
    let max_reduction_deviation = cases.iter().filter_map(|c| c.reduction_deviation).fold(0.0, f64::max);
    let passed = cases.iter().all(|c| c.passed);
    Ok(KlCheckSummary { cases, max_oracle_ratio, max_reduction_deviation, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Stub {
        classes: usize,
        f: fn(&Tensor, usize) -> Tensor,
    }

    impl Classifier for Stub {
        fn class_count(&self) -> usize {
            self.classes
        }
        fn logits(&self, images: &Tensor) -> Result<Tensor> {
            Ok((self.f)(images, self.classes))
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 1.0]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn cdf_of_constant_gap() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = t.map(|v| v + 0.5);
        let pts = cdf_from_logits(&t, &s, 11).unwrap();
        for (x, y) in &pts {
            assert_eq!(*y, if *x < 0.5 { 0.0 } else { 1.0 }, "x={x}");
        }
        assert_eq!(pts.last().unwrap().0, 0.5);
    }

    #[test]
    fn cdf_of_identical_is_one_at_zero() {
        let t = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let pts = cdf_from_logits(&t, &t, 5).unwrap();
        assert_eq!(pts[0], (0.0, 1.0));
    }

    #[test]
    fn sign_flip_doubles_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = Tensor::from_vec(&[50, 3], (0..150).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut s = t.clone();
        for r in 0..50 {
            s.data_mut()[r * 3 + 1] *= -1.0;
        }
        let d = corr_diff_from_logits(&t, &s).unwrap();
        let (ct, _) = pearson_matrix(&t);
        for j in [0, 2] {
            assert!((d.data()[3 + j] - 2.0 * ct.data()[3 + j].abs()).abs() < 1e-12);
            assert!((d.data()[j * 3 + 1] - 2.0 * ct.data()[j * 3 + 1].abs()).abs() < 1e-12);
        }
        assert_eq!(d.data()[4], 0.0);
        assert!(corr_diff_from_logits(&t.batch_slice(0, 1), &s.batch_slice(0, 1)).is_err());
    }

    #[test]
    fn zero_variance_dimension_is_zero() {
        let t = Tensor::from_vec(&[3, 2], vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let (c, degenerate) = pearson_matrix(&t);
        assert_eq!(degenerate, vec![1]);
        assert_eq!(c.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn top1_with_stubs() {
        use crate::data::{synth_generate, DatasetSpec};
        let (_, val) = synth_generate(&DatasetSpec::synthetic(2, 4, 4, 10, 0)).unwrap();
        let uniform = Stub { classes: 2, f: |x, c| Tensor::zeros(&[x.shape()[0], c]) };
        assert_eq!(eval_top1(&uniform, &val, 3).unwrap(), 50.0);
        let wrong = Stub { classes: 3, f: |x, c| Tensor::zeros(&[x.shape()[0], c]) };
        assert!(eval_top1(&wrong, &val, 3).is_err());
    }

    #[test]
    fn selfcheck_small_is_deterministic() {
        let mut o = KlCheckOptions::new(6, 3);
        o.n_samples = 20_000;
        let a = kl_selfcheck(&o).unwrap();
        assert_eq!(a, kl_selfcheck(&o).unwrap());
        assert!(a.cases.iter().all(|c| c.closed_form.is_finite()));
    }
}
