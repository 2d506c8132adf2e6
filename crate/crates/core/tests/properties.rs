use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use unikd::aff::{fuse_pair, AffStack, FeaturePyramid, FusionLevel};
use unikd::distributions::{kl_diag, kl_full, DiagGaussian, FullGaussian};
use unikd::fdp::{FdpHead, LOGVAR_MAX, LOGVAR_MIN};
use unikd::kd_losses::{logits_kd_loss, softmax_tau, LogitsBundle};
use unikd::metrics::{cdf_from_logits, corr_diff_from_logits};
use unikd::nn::upsample_nearest;
use unikd::Tensor;

fn diag_pair(k: usize) -> impl Strategy<Value = (DiagGaussian, DiagGaussian)> {
    let one = (prop::collection::vec(-5.0..5.0f64, k), prop::collection::vec(-6.0..6.0f64, k))
        .prop_map(|(m, lv)| DiagGaussian::new(m, lv.into_iter().map(f64::exp).collect()).unwrap());
    (one.clone(), one)
}

fn full_gaussian(k: usize) -> impl Strategy<Value = FullGaussian> {
    (prop::collection::vec(-2.0..2.0f64, k), prop::collection::vec(-1.0..1.0f64, k * k)).prop_map(move |(m, a)| {
        let mut cov = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                cov[i * k + j] = (0..k).map(|p| a[i * k + p] * a[j * k + p]).sum::<f64>() + if i == j { 0.05 } else { 0.0 };
            }
        }
        FullGaussian::new(m, cov).unwrap()
    })
}

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |v| Tensor::from_vec(shape, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn kl_diag_is_nonnegative_and_zero_on_self((q, p) in (1usize..=8).prop_flat_map(diag_pair)) {
        prop_assert!(kl_diag(&q, &p).unwrap() >= 0.0);
        prop_assert!(kl_diag(&q, &q).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn kl_full_is_nonnegative((q, p) in (1usize..=6).prop_flat_map(|k| (full_gaussian(k), full_gaussian(k)))) {
        prop_assert!(kl_full(&q, &p).unwrap() >= -1e-10);
        prop_assert!(kl_full(&q, &q).unwrap().abs() <= 1e-9);
    }

    #[test]
    fn diagonal_reduction((q, p) in (1usize..=8).prop_flat_map(diag_pair)) {
        let d = kl_diag(&q, &p).unwrap();
        let f = kl_full(&q.to_full(), &p.to_full()).unwrap();
        prop_assert!((d - f).abs() <= 1e-10 * d.abs().max(1.0), "diag {d} full {f}");
    }

    #[test]
    fn softmax_normalized_and_shift_invariant(
        z in prop::collection::vec(-50.0..50.0f64, 1..12),
        shift in -100.0..100.0f64,
        tau in 0.05..20.0f64,
    ) {
        let p = softmax_tau(&z, tau).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let q = softmax_tau(&shifted, tau).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn temperature_preserves_argmax(z in prop::collection::vec(-10.0..10.0f64, 2..10), tau in 0.1..50.0f64) {
        let top = |v: &[f64]| v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b });
        let p = softmax_tau(&z, tau).unwrap();
        prop_assert_eq!(top(&p), top(&z));
    }

    #[test]
    fn logits_kd_nonnegative_and_zero_on_equal(t in tensor(&[3, 5], -5.0, 5.0), s in tensor(&[3, 5], -5.0, 5.0), tau in 0.5..8.0f64) {
        prop_assert!(logits_kd_loss(&LogitsBundle::new(t.clone(), s, tau).unwrap()) >= -1e-15);
        prop_assert!(logits_kd_loss(&LogitsBundle::new(t.clone(), t, tau).unwrap()).abs() <= 1e-15);
    }

    #[test]
    fn gate_in_unit_interval_and_output_convex(
        shallow in tensor(&[2, 3, 4, 4], -3.0, 3.0),
        deep in tensor(&[2, 5, 2, 2], -3.0, 3.0),
        seed in any::<u64>(),
    ) {
        let level = FusionLevel::new(3, 5, &mut ChaCha8Rng::seed_from_u64(seed));
        let fused = fuse_pair(&shallow, &deep, &level).unwrap();
        prop_assert_eq!(fused.feature.shape(), &[2, 5, 4, 4]);
        prop_assert!(fused.gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
        let e = level.expander.forward(&shallow).unwrap();
        let u = upsample_nearest(&deep, 2, 2);
        for ((o, a), b) in fused.feature.data().iter().zip(e.data()).zip(u.data()) {
            prop_assert!(*o >= a.min(*b) - 1e-12 && *o <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn cascade_output_has_shallowest_resolution(seed in any::<u64>(), w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = vec![
            Tensor::full(&[1, w, 8, 8], 0.3),
            Tensor::full(&[1, 2 * w, 4, 4], -0.2),
            Tensor::full(&[1, 4 * w, 2, 2], 0.7),
        ];
        let stack = AffStack::new(&[w, 2 * w, 4 * w], &mut rng).unwrap();
        let out = stack.fuse_pyramid(&FeaturePyramid::new(stages).unwrap()).unwrap();
        prop_assert_eq!(out.feature.shape(), &[1, 4 * w, 8, 8]);
    }

    #[test]
    fn fdp_variance_positive_and_bounded(x in tensor(&[3, 4, 2, 2], -1e3, 1e3), seed in any::<u64>()) {
        let head = FdpHead::new(4, 6, &mut ChaCha8Rng::seed_from_u64(seed));
        let (d, _) = head.forward_cached(&x).unwrap();
        prop_assert_eq!(d.mean.shape(), &[3, 6]);
        for &v in d.var.data() {
            prop_assert!(v > 0.0 && v >= LOGVAR_MIN.exp() && v <= LOGVAR_MAX.exp());
        }
    }

    #[test]
    fn cdf_monotone_with_terminal_one(t in tensor(&[6, 4], -5.0, 5.0), s in tensor(&[6, 4], -5.0, 5.0), n in 1usize..50) {
        let pts = cdf_from_logits(&t, &s, n).unwrap();
        prop_assert_eq!(pts.len(), n);
        prop_assert!(pts.windows(2).all(|w| w[0].1 <= w[1].1 && w[0].0 <= w[1].0));
        prop_assert!(pts[0].1 >= 0.0);
        prop_assert_eq!(pts.last().unwrap().1, 1.0);
    }

    #[test]
    fn corr_diff_symmetric_and_bounded(t in tensor(&[8, 4], -5.0, 5.0), s in tensor(&[8, 4], -5.0, 5.0)) {
        let d = corr_diff_from_logits(&t, &s).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let (a, b) = (d.data()[i * 4 + j], d.data()[j * 4 + i]);
                prop_assert!((a - b).abs() <= 1e-10);
                prop_assert!((0.0..=2.0).contains(&a));
            }
        }
        prop_assert!(corr_diff_from_logits(&t, &t).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
