//! Toy three-stage residual classifiers that expose their stage features.
//!
//! Architecture `toy_resnet_w{W}` at input size `S`:
//!
//! | part    | layers                                                   | output          |
//! |---------|----------------------------------------------------------|-----------------|
//! | stem    | conv3×3 3→W, ReLU                                        | W × S × S       |
//! | stage 1 | residual block W→W, stride 1                             | W × S × S       |
//! | stage 2 | residual block W→2W, stride 2, 1×1 projection shortcut   | 2W × S/2 × S/2  |
//! | stage 3 | residual block 2W→4W, stride 2, 1×1 projection shortcut  | 4W × S/4 × S/4  |
//! | head    | global average pool, linear 4W→C                         | C               |
//!
//! A residual block is `relu(conv3×3(relu(conv3×3(x))) + shortcut(x))`.
//! Every convolution carries a bias; there is no normalization layer, so
//! the forward pass is the same in training and evaluation.
//!
//! Published parameter counts (guarded by tests):
//!
//! | architecture     | classes | parameters |
//! |------------------|---------|------------|
//! | `toy_resnet_w16` | 10      | 77 706     |
//! | `toy_resnet_w8`  | 4       | 19 588     |
//! | `toy_resnet_w4`  | 4       | 5 028      |

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::aff::FeaturePyramid;
use crate::error::{ensure, Result, UniKdError};
use crate::nn::{global_avg_pool, global_avg_pool_backward, join, relu, relu_backward, Conv2d, ConvCache, Linear, Module, Param};
use crate::tensor::Tensor;

pub const STAGES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchSpec {
    pub width: usize,
    pub class_count: usize,
    pub input_size: usize,
}

impl ArchSpec {
    /// Parses `toy_resnet_w{W}`.
    pub fn parse(name: &str, class_count: usize, input_size: usize) -> Result<Self> {
        let width = name
            .strip_prefix("toy_resnet_w")
            .and_then(|w| w.parse::<usize>().ok())
            .filter(|&w| w >= 1)
            .ok_or_else(|| UniKdError::Config(format!("unknown architecture `{name}` (expected toy_resnet_w<N>)")))?;
        ensure!(class_count >= 2, "class count must be at least 2");
        ensure!(
            input_size >= 4 && input_size.is_multiple_of(4),
            "input size must be a positive multiple of 4, got {input_size}"
        );
        Ok(ArchSpec { width, class_count, input_size })
    }

    pub fn name(&self) -> String {
        format!("toy_resnet_w{}", self.width)
    }

    pub fn stage_channels(&self) -> [usize; STAGES] {
        [self.width, 2 * self.width, 4 * self.width]
    }

    /// `(C, H, W)` of each stage feature.
    pub fn stage_shapes(&self) -> [(usize, usize, usize); STAGES] {
        let s = self.input_size;
        let c = self.stage_channels();
        [(c[0], s, s), (c[1], s / 2, s / 2), (c[2], s / 4, s / 4)]
    }

    pub fn param_count(&self) -> usize {
        let w = self.width;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let stem = conv(3, w, 3);
        let s1 = 2 * conv(w, w, 3);
        let s2 = conv(w, 2 * w, 3) + conv(2 * w, 2 * w, 3) + conv(w, 2 * w, 1);
        let s3 = conv(2 * w, 4 * w, 3) + conv(4 * w, 4 * w, 3) + conv(2 * w, 4 * w, 1);
        let fc = 4 * w * self.class_count + self.class_count;
        stem + s1 + s2 + s3 + fc
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

struct BlockCache {
    conv1: ConvCache,
    hidden: Tensor,
    conv2: ConvCache,
    shortcut: Option<ConvCache>,
    out: Tensor,
}

impl ResidualBlock {
    fn new(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let shortcut = (cin != cout || stride != 1).then(|| Conv2d::new(cin, cout, 1, stride, 0, 1.0, rng));
        ResidualBlock {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, 6.0, rng),
            // small residual branch keeps the un-normalized stack stable
            conv2: Conv2d::new(cout, cout, 3, 1, 1, 0.5, rng),
            shortcut,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let hidden = relu(&self.conv1.forward(x)?);
        let mut out = self.conv2.forward(&hidden)?;
        match &self.shortcut {
            Some(sc) => out.add_assign(&sc.forward(x)?),
            None => out.add_assign(x),
        }
        Ok(relu(&out))
    }

    fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let (pre1, conv1) = self.conv1.forward_cached(x)?;
        let hidden = relu(&pre1);
        let (mut out, conv2) = self.conv2.forward_cached(&hidden)?;
        let shortcut = match &self.shortcut {
            Some(sc) => {
                let (s, c) = sc.forward_cached(x)?;
                out.add_assign(&s);
                Some(c)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        let out = relu(&out);
        Ok((out.clone(), BlockCache { conv1, hidden, conv2, shortcut, out }))
    }

    fn backward(&mut self, cache: &BlockCache, d_out: &Tensor) -> Tensor {
        let d_pre = relu_backward(&cache.out, d_out);
        let d_hidden = self.conv2.backward(&cache.conv2, &d_pre, true).expect("requested");
        let d_pre1 = relu_backward(&cache.hidden, &d_hidden);
        let mut d_x = self.conv1.backward(&cache.conv1, &d_pre1, true).expect("requested");
        match (&mut self.shortcut, &cache.shortcut) {
            (Some(sc), Some(c)) => d_x.add_assign(&sc.backward(c, &d_pre, true).expect("requested")),
            _ => d_x.add_assign(&d_pre),
        }
        d_x
    }
}

impl Module for ResidualBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        if let Some(sc) = &self.shortcut {
            sc.visit_params(&join(prefix, "shortcut"), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv1.visit_params_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_params_mut(&join(prefix, "conv2"), f);
        if let Some(sc) = &mut self.shortcut {
            sc.visit_params_mut(&join(prefix, "shortcut"), f);
        }
    }
}

/// Stage features and logits from one forward pass.
#[derive(Debug, Clone)]
pub struct StagedForwardOutput {
    pub pyramid: FeaturePyramid,
    pub logits: Tensor,
}

pub struct BackboneCache {
    stem: ConvCache,
    stem_out: Tensor,
    blocks: Vec<BlockCache>,
    pooled: Tensor,
    last_shape: (usize, usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct ToyResNet {
    spec: ArchSpec,
    stem: Conv2d,
    blocks: Vec<ResidualBlock>,
    fc: Linear,
    frozen: bool,
}

impl ToyResNet {
    pub fn new(spec: ArchSpec, rng: &mut impl Rng) -> Self {
        let [c1, c2, c3] = spec.stage_channels();
        ToyResNet {
            spec,
            stem: Conv2d::new(3, c1, 3, 1, 1, 6.0, rng),
            blocks: vec![
                ResidualBlock::new(c1, c1, 1, rng),
                ResidualBlock::new(c1, c2, 2, rng),
                ResidualBlock::new(c2, c3, 2, rng),
            ],
            fc: Linear::new(c3, spec.class_count, rng),
            frozen: false,
        }
    }

    pub fn spec(&self) -> ArchSpec {
        self.spec
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = self.spec.input_size;
        ensure!(
            x.shape().len() == 4 && x.shape()[1] == 3 && x.shape()[2] == s && x.shape()[3] == s && x.shape()[0] >= 1,
            "{} expects input (B, 3, {s}, {s}), got {:?}",
            self.spec.name(),
            x.shape()
        );
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<StagedForwardOutput> {
        self.check_input(x)?;
        let mut h = relu(&self.stem.forward(x)?);
        let mut stages = Vec::with_capacity(STAGES);
        for block in &self.blocks {
            h = block.forward(&h)?;
            stages.push(h.clone());
        }
        let logits = self.fc.forward(&global_avg_pool(&h))?;
        Ok(StagedForwardOutput { pyramid: FeaturePyramid::new(stages)?, logits })
    }

    /// Logits only.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.logits)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(StagedForwardOutput, BackboneCache)> {
        self.check_input(x)?;
        let (stem_pre, stem) = self.stem.forward_cached(x)?;
        let stem_out = relu(&stem_pre);
        let mut h = stem_out.clone();
        let mut stages = Vec::with_capacity(STAGES);
        let mut blocks = Vec::with_capacity(STAGES);
        for block in &self.blocks {
            let (out, cache) = block.forward_cached(&h)?;
            blocks.push(cache);
            stages.push(out.clone());
            h = out;
        }
        let pooled = global_avg_pool(&h);
        let logits = self.fc.forward(&pooled)?;
        let cache = BackboneCache { stem, stem_out, blocks, pooled, last_shape: h.dims4() };
        Ok((StagedForwardOutput { pyramid: FeaturePyramid::new(stages)?, logits }, cache))
    }

    /// Backpropagates a logits gradient plus optional per-stage gradients.
    pub fn backward(&mut self, cache: &BackboneCache, d_logits: &Tensor, d_stages: &[Option<Tensor>]) -> Result<()> {
        if self.frozen {
            return Err(UniKdError::contract(format!("backward through frozen backbone {}", self.spec.name())));
        }
        ensure!(d_stages.len() == STAGES || d_stages.is_empty(), "expected {STAGES} stage gradients");
        let d_pooled = self.fc.backward(&cache.pooled, d_logits);
        let mut d = global_avg_pool_backward(&d_pooled, cache.last_shape);
        for i in (0..STAGES).rev() {
            if let Some(Some(g)) = d_stages.get(i) {
                d.add_assign(g);
            }
            d = self.blocks[i].backward(&cache.blocks[i], &d);
        }
        let d_stem = relu_backward(&cache.stem_out, &d);
        self.stem.backward(&cache.stem, &d_stem, false);
        Ok(())
    }
}

impl Module for ToyResNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit_params(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.fc.visit_params(&join(prefix, "fc"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_params_mut(&join(prefix, "stem"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
        self.fc.visit_params_mut(&join(prefix, "fc"), f);
    }
}

/// Marks the network non-trainable. Without normalization layers there are
/// no running statistics to lock; the forward pass is unchanged.
pub fn freeze(mut net: ToyResNet) -> ToyResNet {
    net.frozen = true;
    net
}

/// SHA-256 over parameter names and little-endian values.
pub fn param_checksum(m: &dyn Module) -> String {
    let mut h = Sha256::new();
    m.visit_params("", &mut |name, p| {
        h.update(name.as_bytes());
        for v in p.value.data() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn parses_architecture_names() {
        assert_eq!(ArchSpec::parse("toy_resnet_w8", 4, 8).unwrap().width, 8);
        assert!(ArchSpec::parse("resnet56", 4, 8).is_err());
        assert!(ArchSpec::parse("toy_resnet_w0", 4, 8).is_err());
        assert!(ArchSpec::parse("toy_resnet_w8", 4, 6).is_err());
    }

    #[test]
    fn frozen_backward_is_refused() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ToyResNet::new(ArchSpec::parse("toy_resnet_w2", 2, 4).unwrap(), &mut rng);
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let (out, cache) = net.forward_cached(&x).unwrap();
        let mut frozen = freeze(net);
        assert!(frozen.backward(&cache, &out.logits, &[]).is_err());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = ToyResNet::new(ArchSpec::parse("toy_resnet_w2", 2, 8).unwrap(), &mut rng);
        assert!(net.forward(&Tensor::zeros(&[1, 3, 4, 4])).is_err());
        assert!(net.forward(&Tensor::zeros(&[1, 1, 8, 8])).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = ToyResNet::new(ArchSpec::parse("toy_resnet_w2", 2, 4).unwrap(), &mut rng);
        let before = param_checksum(&net);
        assert_eq!(before, param_checksum(&net.clone()));
        net.visit_params_mut("", &mut |_, p| p.value.data_mut()[0] += 1.0);
        assert_ne!(before, param_checksum(&net));
    }
}
