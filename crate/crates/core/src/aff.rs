//! Adaptive features fusion: gated top-down aggregation of a feature pyramid.
//!
//! One fusion level computes
//!
//! ```text
//! out = g ⊙ E(shallow) + (1 − g) ⊙ Up(deep)
//! g   = sigmoid(f(E(shallow) ⊕ Up(deep)))
//! ```
//!
//! where `E` is a 1×1 convolution lifting the shallow feature to the deep
//! feature's channel count, `Up` is nearest-neighbour upsampling, `⊕` is
//! channel concatenation and `f` is a 3×3 convolution. The pyramid is folded
//! from the deepest stage up: `R ← F_L`, then `R ← fuse(F_i, R)`.

use rand::Rng;

use crate::error::{ensure, Result, UniKdError};
use crate::nn::{
    concat_channels, join, sigmoid, split_channels, upsample_nearest, upsample_nearest_backward, Conv2d, ConvCache,
    Module, Param,
};
use crate::tensor::Tensor;

/// Gate bias used by [`FusionLevel::saturate_gate`]; `sigmoid(50)` rounds to 1.
const SATURATION_BIAS: f64 = 50.0;

/// Ordered stage features, shallow to deep.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    stages: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        ensure!(stages.len() >= 2, "a pyramid needs at least 2 stages, got {}", stages.len());
        for (i, s) in stages.iter().enumerate() {
            ensure!(s.shape().len() == 4, "stage {i} must be (B, C, H, W), got {:?}", s.shape());
        }
        let b = stages[0].shape()[0];
        for (i, pair) in stages.windows(2).enumerate() {
            let (pb, _, ph, pw) = pair[0].dims4();
            let (nb, _, nh, nw) = pair[1].dims4();
            ensure!(pb == b && nb == b, "stage {} batch size differs from stage 0", i + 1);
            ensure!(
                nh <= ph && nw <= pw,
                "stage {} resolution {}x{} exceeds stage {} resolution {}x{}",
                i + 1,
                nh,
                nw,
                i,
                ph,
                pw
            );
        }
        Ok(FeaturePyramid { stages })
    }

    pub fn stages(&self) -> &[Tensor] {
        &self.stages
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.stages[0].shape()[0]
    }

    pub fn into_stages(self) -> Vec<Tensor> {
        self.stages
    }
}

/// Output of a fusion: the fused feature and the gate that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    pub feature: Tensor,
    pub gate: Tensor,
}

/// Learned parameters of one fusion level.
#[derive(Debug, Clone)]
pub struct FusionLevel {
    pub expander: Conv2d,
    pub gate: Conv2d,
}

pub struct FusionCache {
    expander: ConvCache,
    gate_conv: ConvCache,
    expanded: Tensor,
    upsampled: Tensor,
    gate: Tensor,
    factors: (usize, usize),
}

impl FusionLevel {
    pub fn new(shallow_channels: usize, deep_channels: usize, rng: &mut impl Rng) -> Self {
        FusionLevel {
            expander: Conv2d::new(shallow_channels, deep_channels, 1, 1, 0, 1.0, rng),
            gate: Conv2d::new(2 * deep_channels, deep_channels, 3, 1, 1, 1.0, rng),
        }
    }

    pub fn shallow_channels(&self) -> usize {
        self.expander.in_channels
    }

    pub fn deep_channels(&self) -> usize {
        self.expander.out_channels
    }

    /// Pins the gate to 1 (`open`) or 0 by zeroing the gate weights and
    /// saturating its bias.
    pub fn saturate_gate(&mut self, open: bool) {
        self.gate.weight.value.fill(0.0);
        self.gate
            .bias
            .value
            .fill(if open { SATURATION_BIAS } else { -SATURATION_BIAS });
    }

    fn upsample_factors(&self, shallow: &Tensor, deep: &Tensor) -> Result<(usize, usize)> {
        ensure!(
            shallow.shape().len() == 4 && deep.shape().len() == 4,
            "fusion inputs must be 4-d, got {:?} and {:?}",
            shallow.shape(),
            deep.shape()
        );
        let (ba, ca, ha, wa) = shallow.dims4();
        let (bb, cb, hb, wb) = deep.dims4();
        ensure!(ba == bb, "batch sizes differ: {ba} vs {bb}");
        ensure!(
            ca == self.shallow_channels(),
            "shallow feature has {ca} channels, expander expects {}",
            self.shallow_channels()
        );
        ensure!(
            cb == self.deep_channels(),
            "deep feature has {cb} channels, fusion expects {}",
            self.deep_channels()
        );
        ensure!(hb >= 1 && wb >= 1 && ha >= hb && wa >= wb, "deep feature {hb}x{wb} is finer than shallow {ha}x{wa}");
        ensure!(
            ha % hb == 0 && wa % wb == 0,
            "spatial ratio {ha}x{wa} / {hb}x{wb} is not an integer"
        );
        Ok((ha / hb, wa / wb))
    }

    fn combine(expanded: &Tensor, upsampled: &Tensor, gate_pre: &Tensor) -> (Tensor, Tensor) {
        let gate = gate_pre.map(sigmoid);
        let mut out = Tensor::zeros(expanded.shape());
        for (((o, &e), &u), &g) in out
            .data_mut()
            .iter_mut()
            .zip(expanded.data())
            .zip(upsampled.data())
            .zip(gate.data())
        {
            *o = g * e + (1.0 - g) * u;
        }
        (out, gate)
    }

    pub fn forward(&self, shallow: &Tensor, deep: &Tensor) -> Result<FusedRepresentation> {
        let (fh, fw) = self.upsample_factors(shallow, deep)?;
        let expanded = self.expander.forward(shallow)?;
        let upsampled = upsample_nearest(deep, fh, fw);
        let gate_pre = self.gate.forward(&concat_channels(&expanded, &upsampled))?;
        let (feature, gate) = Self::combine(&expanded, &upsampled, &gate_pre);
        Ok(FusedRepresentation { feature, gate })
    }

    pub fn forward_cached(&self, shallow: &Tensor, deep: &Tensor) -> Result<(FusedRepresentation, FusionCache)> {
        let factors = self.upsample_factors(shallow, deep)?;
        let (expanded, expander) = self.expander.forward_cached(shallow)?;
        let upsampled = upsample_nearest(deep, factors.0, factors.1);
        let (gate_pre, gate_conv) = self.gate.forward_cached(&concat_channels(&expanded, &upsampled))?;
        let (feature, gate) = Self::combine(&expanded, &upsampled, &gate_pre);
        let cache = FusionCache { expander, gate_conv, expanded, upsampled, gate: gate.clone(), factors };
        Ok((FusedRepresentation { feature, gate }, cache))
    }

    /// Returns `(d shallow, d deep)`; the shallow gradient only when asked.
    pub fn backward(&mut self, cache: &FusionCache, d_out: &Tensor, need_shallow: bool) -> (Option<Tensor>, Tensor) {
        let n = d_out.numel();
        let mut d_exp = Tensor::zeros(d_out.shape());
        let mut d_up = Tensor::zeros(d_out.shape());
        let mut d_gate_pre = Tensor::zeros(d_out.shape());
        {
            let (de, du, dz) = (d_exp.data_mut(), d_up.data_mut(), d_gate_pre.data_mut());
            let (e, u, g, d) = (cache.expanded.data(), cache.upsampled.data(), cache.gate.data(), d_out.data());
            for i in 0..n {
                de[i] = d[i] * g[i];
                du[i] = d[i] * (1.0 - g[i]);
                dz[i] = d[i] * (e[i] - u[i]) * g[i] * (1.0 - g[i]);
            }
        }
        let d_cat = self
            .gate
            .backward(&cache.gate_conv, &d_gate_pre, true)
            .expect("input gradient requested");
        let (d_exp_cat, d_up_cat) = split_channels(&d_cat, self.deep_channels());
        d_exp.add_assign(&d_exp_cat);
        d_up.add_assign(&d_up_cat);
        let d_shallow = self.expander.backward(&cache.expander, &d_exp, need_shallow);
        let d_deep = upsample_nearest_backward(&d_up, cache.factors.0, cache.factors.1);
        (d_shallow, d_deep)
    }
}

impl Module for FusionLevel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.expander.visit_params(&join(prefix, "expander"), f);
        self.gate.visit_params(&join(prefix, "gate"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.expander.visit_params_mut(&join(prefix, "expander"), f);
        self.gate.visit_params_mut(&join(prefix, "gate"), f);
    }
}

/// `out = g ⊙ E(shallow) + (1 − g) ⊙ Up(deep)` for one adjacent pair.
pub fn fuse_pair(shallow: &Tensor, deep: &Tensor, params: &FusionLevel) -> Result<FusedRepresentation> {
    params.forward(shallow, deep)
}

/// Fusion levels for one network; `levels[i]` fuses stage `i` with the
/// running representation from the stages below it.
///
/// When the fused output must carry a channel count other than the deepest
/// stage's (a narrow student feeding a head sized for a wide teacher), a 1×1
/// `lateral` convolution lifts the deepest stage before the cascade starts.
#[derive(Debug, Clone)]
pub struct AffStack {
    lateral: Option<Conv2d>,
    levels: Vec<FusionLevel>,
}

pub struct PyramidCache {
    lateral: Option<ConvCache>,
    levels: Vec<FusionCache>,
}

impl AffStack {
    /// `stage_channels` lists channel counts shallow to deep.
    pub fn new(stage_channels: &[usize], rng: &mut impl Rng) -> Result<Self> {
        ensure!(!stage_channels.is_empty(), "need at least 2 stages to fuse");
        let deepest = *stage_channels.last().expect("non-empty");
        Self::with_target_channels(stage_channels, deepest, rng)
    }

    /// Like [`AffStack::new`] but the fused feature has `target` channels.
    pub fn with_target_channels(stage_channels: &[usize], target: usize, rng: &mut impl Rng) -> Result<Self> {
        ensure!(stage_channels.len() >= 2, "need at least 2 stages to fuse");
        ensure!(target >= 1, "target channel count must be positive");
        let deepest = *stage_channels.last().expect("non-empty");
        let lateral = (deepest != target).then(|| Conv2d::new(deepest, target, 1, 1, 0, 1.0, rng));
        let levels = stage_channels[..stage_channels.len() - 1]
            .iter()
            .map(|&c| FusionLevel::new(c, target, rng))
            .collect();
        Ok(AffStack { lateral, levels })
    }

    pub fn levels(&self) -> &[FusionLevel] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [FusionLevel] {
        &mut self.levels
    }

    pub fn lateral(&self) -> Option<&Conv2d> {
        self.lateral.as_ref()
    }

    pub fn output_channels(&self) -> usize {
        self.levels[0].deep_channels()
    }

    fn check(&self, p: &FeaturePyramid) -> Result<()> {
        ensure!(
            p.len() == self.levels.len() + 1,
            "pyramid has {} stages, fusion stack expects {}",
            p.len(),
            self.levels.len() + 1
        );
        Ok(())
    }

    pub fn fuse_pyramid(&self, p: &FeaturePyramid) -> Result<FusedRepresentation> {
        self.check(p)?;
        let stages = p.stages();
        let top = match &self.lateral {
            Some(conv) => Some(conv.forward(&stages[stages.len() - 1])?),
            None => None,
        };
        let mut running: Option<FusedRepresentation> = None;
        for i in (0..self.levels.len()).rev() {
            let deep = running
                .as_ref()
                .map(|r| &r.feature)
                .or(top.as_ref())
                .unwrap_or(&stages[i + 1]);
            let fused = self.levels[i].forward(&stages[i], deep).map_err(|e| at_level(i, e))?;
            running = Some(fused);
        }
        Ok(running.expect("at least one level"))
    }

    pub fn forward_cached(&self, p: &FeaturePyramid) -> Result<(FusedRepresentation, PyramidCache)> {
        self.check(p)?;
        let stages = p.stages();
        let lateral = match &self.lateral {
            Some(conv) => {
                let (y, c) = conv.forward_cached(&stages[stages.len() - 1])?;
                Some((c, y))
            }
            None => None,
        };
        let mut caches = Vec::with_capacity(self.levels.len());
        let mut running: Option<FusedRepresentation> = None;
        for i in (0..self.levels.len()).rev() {
            let deep = running
                .as_ref()
                .map(|r| &r.feature)
                .or(lateral.as_ref().map(|(_, y)| y))
                .unwrap_or(&stages[i + 1]);
            let (fused, cache) = self.levels[i].forward_cached(&stages[i], deep).map_err(|e| at_level(i, e))?;
            caches.push(cache);
            running = Some(fused);
        }
        caches.reverse();
        let lateral = lateral.map(|(c, _)| c);
        Ok((running.expect("at least one level"), PyramidCache { lateral, levels: caches }))
    }

    /// Backpropagates into the fusion parameters. Returns per-stage input
    /// gradients when `need_inputs` is set.
    pub fn backward(&mut self, cache: &PyramidCache, d_out: &Tensor, need_inputs: bool) -> Option<Vec<Tensor>> {
        let l = self.levels.len();
        let mut stage_grads: Vec<Option<Tensor>> = vec![None; l + 1];
        let mut d_running = d_out.clone();
        for i in 0..l {
            let (d_shallow, d_deep) = self.levels[i].backward(&cache.levels[i], &d_running, need_inputs);
            stage_grads[i] = d_shallow;
            d_running = d_deep;
        }
        stage_grads[l] = match (&mut self.lateral, &cache.lateral) {
            (Some(conv), Some(c)) => conv.backward(c, &d_running, need_inputs),
            _ => Some(d_running),
        };
        need_inputs.then(|| stage_grads.into_iter().map(|g| g.expect("requested")).collect())
    }
}

impl Module for AffStack {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(conv) = &self.lateral {
            conv.visit_params(&join(prefix, "lateral"), f);
        }
        for (i, level) in self.levels.iter().enumerate() {
            level.visit_params(&join(prefix, &format!("level{i}")), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(conv) = &mut self.lateral {
            conv.visit_params_mut(&join(prefix, "lateral"), f);
        }
        for (i, level) in self.levels.iter_mut().enumerate() {
            level.visit_params_mut(&join(prefix, &format!("level{i}")), f);
        }
    }
}

fn at_level(level: usize, e: UniKdError) -> UniKdError {
    match e {
        UniKdError::Contract(msg) => UniKdError::Contract(format!("fusion level {level}: {msg}")),
        other => other,
    }
}
