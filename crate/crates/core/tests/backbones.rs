use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use unikd::backbones::{freeze, param_checksum, ArchSpec, ToyResNet};
use unikd::nn::Module;
use unikd::Tensor;

fn random_images(b: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = b * 3 * side * side;
    Tensor::from_vec(&[b, 3, side, side], (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn published_parameter_counts() {
    for (name, classes, expected) in [("toy_resnet_w16", 10, 77_706), ("toy_resnet_w8", 4, 19_588), ("toy_resnet_w4", 4, 5_028)] {
        let spec = ArchSpec::parse(name, classes, 8).unwrap();
        let net = ToyResNet::new(spec, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(spec.param_count(), expected, "{name}");
        assert_eq!(net.param_count(), expected, "{name}");
    }
}

#[test]
fn stage_shape_table() {
    let spec = ArchSpec::parse("toy_resnet_w16", 10, 32).unwrap();
    let net = ToyResNet::new(spec, &mut ChaCha8Rng::seed_from_u64(1));
    let out = net.forward(&random_images(2, 32, 2)).unwrap();
    let shapes: Vec<&[usize]> = out.pyramid.stages().iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, vec![&[2, 16, 32, 32][..], &[2, 32, 16, 16], &[2, 64, 8, 8]]);
    assert_eq!(out.logits.shape(), &[2, 10]);
    let expected: Vec<_> = spec.stage_shapes().iter().map(|&(c, h, w)| [2, c, h, w]).collect();
    for (s, e) in shapes.iter().zip(&expected) {
        assert_eq!(*s, &e[..]);
    }
}

#[test]
fn samples_are_independent_of_batch() {
    let spec = ArchSpec::parse("toy_resnet_w4", 3, 8).unwrap();
    let net = ToyResNet::new(spec, &mut ChaCha8Rng::seed_from_u64(3));
    let batch = random_images(4, 8, 4);
    let all = net.logits(&batch).unwrap();
    for i in 0..4 {
        let single = net.logits(&batch.batch_slice(i, 1)).unwrap();
        for (a, b) in single.data().iter().zip(all.row(i)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_input_is_finite() {
    let spec = ArchSpec::parse("toy_resnet_w8", 5, 16).unwrap();
    let net = ToyResNet::new(spec, &mut ChaCha8Rng::seed_from_u64(5));
    let out = net.forward(&Tensor::zeros(&[2, 3, 16, 16])).unwrap();
    assert!(out.logits.is_finite());
    assert!(out.pyramid.stages().iter().all(Tensor::is_finite));
}

#[test]
fn frozen_teacher_checksum_survives_forward_passes() {
    let spec = ArchSpec::parse("toy_resnet_w4", 4, 8).unwrap();
    let net = freeze(ToyResNet::new(spec, &mut ChaCha8Rng::seed_from_u64(6)));
    let before = param_checksum(&net);
    for s in 0..10 {
        net.forward(&random_images(3, 8, s)).unwrap();
    }
    assert_eq!(param_checksum(&net), before);
}
