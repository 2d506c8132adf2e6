//! SGD with momentum and L2 weight decay.

use std::collections::{BTreeMap, BTreeSet};

use crate::nn::Module;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
    registered: BTreeSet<String>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: BTreeMap::new(), registered: BTreeSet::new() }
    }

    /// Adds every parameter of `m` under `prefix` to the optimized set.
    pub fn register(&mut self, prefix: &str, m: &dyn Module) {
        m.visit_params(prefix, &mut |name, p| {
            self.registered.insert(name.to_string());
            self.velocity.insert(name.to_string(), vec![0.0; p.value.numel()]);
        });
    }

    /// Names of every parameter this optimizer may update.
    pub fn registered(&self) -> &BTreeSet<String> {
        &self.registered
    }

    /// `v ← μv + (g + λw)`, `w ← w − lr·v` for the registered parameters of `m`.
    pub fn step(&mut self, prefix: &str, m: &mut dyn Module, lr: f64) {
        let (mu, wd) = (self.momentum, self.weight_decay);
        m.visit_params_mut(prefix, &mut |name, p| {
            let Some(v) = self.velocity.get_mut(name) else {
                return;
            };
            let grads = p.grad.data().to_vec();
            for ((w, g), vel) in p.value.data_mut().iter_mut().zip(grads).zip(v.iter_mut()) {
                *vel = mu * *vel + g + wd * *w;
                *w -= lr * *vel;
            }
        });
    }
}

/// Step schedule: ×0.1 at 50% and again at 75% of the epochs.
pub fn scheduled_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    let first = (epochs as f64 * 0.5).round() as usize;
    let second = (epochs as f64 * 0.75).round() as usize;
    let mut lr = base;
    if first > 0 && epoch >= first {
        lr *= 0.1;
    }
    if second > 0 && epoch >= second {
        lr *= 0.1;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Param};
    use crate::tensor::Tensor;

    #[test]
    fn schedule_milestones() {
        let lrs: Vec<f64> = (0..8).map(|e| scheduled_lr(1.0, e, 8)).collect();
        assert_eq!(lrs[..4], [1.0; 4]);
        assert!((lrs[4] - 0.1).abs() < 1e-15 && (lrs[5] - 0.1).abs() < 1e-15);
        assert!((lrs[6] - 0.01).abs() < 1e-15);
        assert_eq!(scheduled_lr(1.0, 0, 1), 1.0);
    }

    #[test]
    fn momentum_update() {
        let mut lin = Linear {
            weight: Param::new(Tensor::from_vec(&[1, 1], vec![1.0]).unwrap()),
            bias: Param::new(Tensor::zeros(&[1])),
            in_features: 1,
            out_features: 1,
        };
        let mut opt = Sgd::new(0.9, 0.0);
        opt.register("m", &lin);
        lin.weight.grad.data_mut()[0] = 1.0;
        opt.step("m", &mut lin, 0.1);
        assert!((lin.weight.value.data()[0] - 0.9).abs() < 1e-15);
        opt.step("m", &mut lin, 0.1);
        // v = 0.9 * 1 + 1 = 1.9
        assert!((lin.weight.value.data()[0] - 0.71).abs() < 1e-15);
        // unregistered prefix is untouched
        opt.step("other", &mut lin, 0.1);
        assert!((lin.weight.value.data()[0] - 0.71).abs() < 1e-15);
    }
}
