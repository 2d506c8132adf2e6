//! The distillation loop: a frozen teacher, and a student trained jointly
//! with two fusion stacks and one shared distribution head.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aff::{AffStack, FeaturePyramid};
use crate::backbones::{freeze, param_checksum, ArchSpec, ToyResNet};
use crate::checkpoint::{self, Checkpoint, CheckpointMeta, SCHEMA_VERSION};
use crate::config::{ExperimentConfig, Mode};
use crate::data::{load_splits, make_loader, Dataset, LabeledBatch, Normalization};
use crate::error::{Result, UniKdError};
use crate::fdp::{feature_distribution_loss, feature_distribution_loss_with_grad, FdpHead};
use crate::kd_losses::{
    cross_entropy_with_grad, feature_mse_with_grad, logits_kd_loss_with_grad, total_loss, LogitsBundle, LossBreakdown,
    LossWeights,
};
use crate::metrics::{eval_top1, NormalizedNet};
use crate::nn::{join, Conv2d, ConvCache, Module, Param};
use crate::optim::{scheduled_lr, Sgd};
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

/// Per-stage 1×1 convolutions lifting student features to teacher widths,
/// used by the feature-MSE modes.
#[derive(Debug, Clone)]
pub struct Adapters(pub Vec<Conv2d>);

impl Module for Adapters {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, c) in self.0.iter().enumerate() {
            c.visit_params(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, c) in self.0.iter_mut().enumerate() {
            c.visit_params_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Seeds a generator for one component. Both fusion stacks draw from the
/// same stream, so identical architectures start from identical weights.
fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Everything mutated by the training loop.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: ToyResNet,
    pub teacher: Option<ToyResNet>,
    pub aff_student: AffStack,
    pub aff_teacher: AffStack,
    pub fdp: FdpHead,
    pub adapters: Adapters,
    pub optimizer: Sgd,
    pub student_norm: Normalization,
    pub teacher_norm: Normalization,
    pub lr: f64,
    step: usize,
    touched: BTreeSet<String>,
}

impl TrainState {
    /// Builds fresh student-side modules. The fused width and the head input
    /// follow the teacher's deepest stage (the student's own when there is
    /// no teacher).
    pub fn new(cfg: &ExperimentConfig, teacher: Option<ToyResNet>, norm: Normalization) -> Result<Self> {
        let s_spec = cfg.student_arch()?;
        let t_spec = match &teacher {
            Some(t) => t.spec(),
            None => cfg.teacher_arch()?,
        };
        let teacher = teacher.map(freeze);
        let student = ToyResNet::new(s_spec, &mut component_rng(cfg.seed, 1));
        let target = *t_spec.stage_channels().last().expect("stages");
        let aff_student = AffStack::with_target_channels(&s_spec.stage_channels(), target, &mut component_rng(cfg.seed, 2))?;
        let aff_teacher = AffStack::new(&t_spec.stage_channels(), &mut component_rng(cfg.seed, 2))?;
        let fdp = FdpHead::new(target, s_spec.class_count, &mut component_rng(cfg.seed, 3));
        let adapters = if cfg.mode.uses_feature_mse() && teacher.is_some() {
            let mut rng = component_rng(cfg.seed, 4);
            Adapters(
                s_spec
                    .stage_channels()
                    .iter()
                    .zip(t_spec.stage_channels())
                    .map(|(&cs, ct)| Conv2d::new(cs, ct, 1, 1, 0, 1.0, &mut rng))
                    .collect(),
            )
        } else {
            Adapters(Vec::new())
        };
        let mut state = TrainState {
            student,
            teacher,
            aff_student,
            aff_teacher,
            fdp,
            adapters,
            optimizer: Sgd::new(cfg.optimizer.momentum, cfg.optimizer.weight_decay),
            student_norm: norm,
            teacher_norm: norm,
            lr: cfg.optimizer.lr,
            step: 0,
            touched: BTreeSet::new(),
        };
        state.register();
        Ok(state)
    }

    /// Replaces the student backbone, e.g. with a copy of the teacher.
    pub fn with_student(mut self, student: ToyResNet) -> Result<Self> {
        if student.spec() != self.student.spec() {
            return Err(UniKdError::contract(format!(
                "student must be {}, got {}",
                self.student.spec().name(),
                student.spec().name()
            )));
        }
        self.student = student;
        Ok(self)
    }

    fn register(&mut self) {
        let mut opt = Sgd::new(self.optimizer.momentum, self.optimizer.weight_decay);
        opt.register(checkpoint::BACKBONE, &self.student);
        opt.register(checkpoint::AFF_STUDENT, &self.aff_student);
        opt.register(checkpoint::AFF_TEACHER, &self.aff_teacher);
        opt.register(checkpoint::FDP, &self.fdp);
        opt.register(checkpoint::ADAPTER, &self.adapters);
        self.optimizer = opt;
    }

    /// Number of completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    /// Parameter names that have received a nonzero gradient so far.
    pub fn touched(&self) -> &BTreeSet<String> {
        &self.touched
    }

    fn trainable(&mut self) -> [(&'static str, &mut dyn Module); 5] {
        [
            (checkpoint::BACKBONE, &mut self.student),
            (checkpoint::AFF_STUDENT, &mut self.aff_student),
            (checkpoint::AFF_TEACHER, &mut self.aff_teacher),
            (checkpoint::FDP, &mut self.fdp),
            (checkpoint::ADAPTER, &mut self.adapters),
        ]
    }

    /// Loss components for a batch without touching any parameter.
    pub fn evaluate_losses(&self, batch: &LabeledBatch, cfg: &ExperimentConfig) -> Result<LossBreakdown> {
        let weights = cfg.mode.effective_weights(cfg.weights());
        let s_out = self.student.forward(&self.student_norm.apply(&batch.images))?;
        let (ce, _) = cross_entropy_with_grad(&s_out.logits, &batch.labels)?;
        let (fl, lk) = match &self.teacher {
            Some(t) => {
                let t_out = t.forward(&self.teacher_norm.apply(&batch.images))?;
                let lk = logits_kd_loss_with_grad(&LogitsBundle::new(t_out.logits, s_out.logits, cfg.tau)?).0;
                let fl = if cfg.mode.uses_feature_mse() {
                    let adapted = self.adapt(&s_out.pyramid)?;
                    feature_mse_with_grad(t_out.pyramid.stages(), &adapted)?.0
                } else {
                    let fs = self.aff_student.fuse_pyramid(&s_out.pyramid)?;
                    let ft = self.aff_teacher.fuse_pyramid(&t_out.pyramid)?;
                    feature_distribution_loss(&fs, &ft, &self.fdp)?
                };
                (fl, lk)
            }
            None => (0.0, 0.0),
        };
        check_finite(ce, fl, lk, self.step)?;
        total_loss(ce, fl, lk, weights)
    }

    fn adapt(&self, p: &FeaturePyramid) -> Result<Vec<Tensor>> {
        p.stages().iter().zip(&self.adapters.0).map(|(s, a)| a.forward(s)).collect()
    }
}

fn check_finite(ce: f64, fl: f64, logits_kl: f64, step: usize) -> Result<()> {
    for (component, v) in [("ce", ce), ("fl", fl), ("logits_kl", logits_kl)] {
        if !v.is_finite() {
            return Err(UniKdError::NonFiniteLoss { component, step });
        }
    }
    Ok(())
}

/// One optimization step. Returns the losses measured before the update.
pub fn train_step(batch: &LabeledBatch, state: &mut TrainState, cfg: &ExperimentConfig) -> Result<LossBreakdown> {
    if let Some(t) = &state.teacher {
        if !t.is_frozen() {
            return Err(UniKdError::contract("teacher must be frozen"));
        }
    }
    let weights = cfg.mode.effective_weights(cfg.weights());
    for (_, m) in state.trainable() {
        m.zero_grad();
    }

    let (s_out, s_cache) = state.student.forward_cached(&state.student_norm.apply(&batch.images))?;
    let (ce, mut d_logits) = cross_entropy_with_grad(&s_out.logits, &batch.labels)?;
    let mut d_stages: Vec<Option<Tensor>> = Vec::new();
    let (mut fl, mut lk) = (0.0, 0.0);

    if let Some(teacher) = &state.teacher {
        let t_out = teacher.forward(&state.teacher_norm.apply(&batch.images))?;
        let (kd, d_kd) = logits_kd_loss_with_grad(&LogitsBundle::new(t_out.logits, s_out.logits.clone(), cfg.tau)?);
        lk = kd;
        if weights.beta > 0.0 {
            d_logits.add_assign(&d_kd.map(|g| g * weights.beta));
        }

        if cfg.mode.uses_feature_mse() {
            let mut adapted = Vec::new();
            let mut caches: Vec<ConvCache> = Vec::new();
            for (s, a) in s_out.pyramid.stages().iter().zip(&state.adapters.0) {
                let (y, c) = a.forward_cached(s)?;
                adapted.push(y);
                caches.push(c);
            }
            let (mse, grads) = feature_mse_with_grad(t_out.pyramid.stages(), &adapted)?;
            fl = mse;
            if weights.alpha > 0.0 {
                d_stages = grads
                    .iter()
                    .zip(state.adapters.0.iter_mut())
                    .zip(&caches)
                    .map(|((g, a), c)| a.backward(c, &g.map(|v| v * weights.alpha), true))
                    .collect();
            }
        } else {
            let (fs, fs_cache) = state.aff_student.forward_cached(&s_out.pyramid)?;
            if weights.alpha > 0.0 {
                let (ft, ft_cache) = state.aff_teacher.forward_cached(&t_out.pyramid)?;
                let g = feature_distribution_loss_with_grad(
                    &fs.feature,
                    &ft.feature,
                    &mut state.fdp,
                    weights.alpha,
                    cfg.detach_teacher_distribution,
                )?;
                fl = g.loss;
                let inputs = state.aff_student.backward(&fs_cache, &g.d_student, true).expect("requested");
                d_stages = inputs.into_iter().map(Some).collect();
                if let Some(d_t) = &g.d_teacher {
                    state.aff_teacher.backward(&ft_cache, d_t, false);
                }
            } else {
                let ft = state.aff_teacher.fuse_pyramid(&t_out.pyramid)?;
                fl = feature_distribution_loss(&fs, &ft, &state.fdp)?;
            }
        }
    }

    check_finite(ce, fl, lk, state.step)?;
    let breakdown = total_loss(ce, fl, lk, weights)?;
    state.student.backward(&s_cache, &d_logits, &d_stages)?;

    let lr = state.lr;
    let mut touched = std::mem::take(&mut state.touched);
    let mut optimizer = std::mem::replace(&mut state.optimizer, Sgd::new(0.0, 0.0));
    for (prefix, m) in state.trainable() {
        m.visit_params(prefix, &mut |name, p| {
            if !touched.contains(name) && p.grad.data().iter().any(|&g| g != 0.0) {
                touched.insert(name.to_string());
            }
        });
        optimizer.step(prefix, m, lr);
    }
    state.optimizer = optimizer;
    state.touched = touched;
    state.step += 1;
    Ok(breakdown)
}

/// One line of `metrics.jsonl`. Step records carry the batch losses; the
/// record closing an epoch carries epoch means and `val_top1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub ce: f64,
    pub fl: f64,
    pub logits_kl: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_top1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub epochs: Vec<EpochSummary>,
    pub best_val_top1: f64,
    pub best_epoch: usize,
    /// Checkpoint of the best-validation student.
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub wall_clock_seconds: f64,
    pub seed: u64,
    /// Teacher parameter checksum before and after the run.
    pub teacher_checksum: Option<(String, String)>,
}

/// Loads a frozen teacher and the normalization it was trained with.
pub fn load_teacher(path: &Path, expected: ArchSpec) -> Result<(ToyResNet, Normalization)> {
    if !path.exists() {
        return Err(UniKdError::MissingTeacher(path.to_path_buf()));
    }
    let ck = Checkpoint::load(path)?;
    if ck.meta.architecture != expected.name()
        || ck.meta.class_count != expected.class_count
        || ck.meta.input_size != expected.input_size
    {
        return Err(UniKdError::Checkpoint(format!(
            "{} holds {} ({} classes, {}px) but the config expects {} ({} classes, {}px)",
            path.display(),
            ck.meta.architecture,
            ck.meta.class_count,
            ck.meta.input_size,
            expected.name(),
            expected.class_count,
            expected.input_size
        )));
    }
    let mut net = ToyResNet::new(expected, &mut ChaCha8Rng::seed_from_u64(0));
    ck.load_module(checkpoint::BACKBONE, &mut net)?;
    Ok((freeze(net), Normalization { mean: ck.meta.norm_mean, std: ck.meta.norm_std }))
}

fn save_checkpoint(state: &TrainState, cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    let spec = state.student.spec();
    let mut ck = Checkpoint::new(CheckpointMeta {
        schema_version: SCHEMA_VERSION,
        architecture: spec.name(),
        class_count: spec.class_count,
        config_hash: cfg.hash(),
        input_size: spec.input_size,
        norm_mean: state.student_norm.mean,
        norm_std: state.student_norm.std,
    });
    ck.insert_module(checkpoint::BACKBONE, &state.student);
    ck.insert_module(checkpoint::AFF_STUDENT, &state.aff_student);
    ck.insert_module(checkpoint::AFF_TEACHER, &state.aff_teacher);
    ck.insert_module(checkpoint::FDP, &state.fdp);
    ck.insert_module(checkpoint::ADAPTER, &state.adapters);
    ck.save(path)
}

/// Validation top-1 of the current student.
pub fn validate(state: &TrainState, val: &Dataset) -> Result<f64> {
    let model = NormalizedNet { net: state.student.clone(), norm: state.student_norm };
    eval_top1(&model, val, EVAL_BATCH)
}

/// Builds the initial state for `cfg`: loads the teacher (optional in
/// `ce_only`) and resolves normalization from the train split.
pub fn prepare(cfg: &ExperimentConfig, train: &Dataset) -> Result<TrainState> {
    let teacher = match (&cfg.teacher.checkpoint, cfg.mode.needs_teacher()) {
        (Some(p), true) => Some(load_teacher(p, cfg.teacher_arch()?)?),
        (Some(p), false) if p.exists() => Some(load_teacher(p, cfg.teacher_arch()?)?),
        (None, true) => {
            return Err(UniKdError::Config(format!("mode {} needs teacher.checkpoint", cfg.mode)));
        }
        _ => None,
    };
    let student_norm = Normalization::resolve(&cfg.dataset, train);
    let (teacher, teacher_norm) = match teacher {
        Some((t, n)) => (Some(t), n),
        None => (None, student_norm),
    };
    let mut state = TrainState::new(cfg, teacher, student_norm)?;
    state.teacher_norm = teacher_norm;
    Ok(state)
}

/// Full training run. Writes `metrics.jsonl`, `best.ckpt` and `report.json`
/// under the output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let started = Instant::now();
    let (train, val) = load_splits(&cfg.dataset)?;
    let mut state = prepare(cfg, &train)?;
    let checksum_before = state.teacher.as_ref().map(|t| param_checksum(t));

    let out = cfg.out_dir();
    std::fs::create_dir_all(&out)?;
    let metrics_path = out.join("metrics.jsonl");
    let ckpt_path = out.join("best.ckpt");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    let loader = make_loader(&train, cfg.batch_size, cfg.seed, true)?;
    let weights = cfg.mode.effective_weights(cfg.weights());

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let (mut best, mut best_epoch) = (f64::NEG_INFINITY, 0);
    for epoch in 0..cfg.epochs {
        state.lr = scheduled_lr(cfg.optimizer.lr, epoch, cfg.epochs);
        let mut sums = [0.0; 3];
        let mut n = 0usize;
        for batch in loader.epoch(epoch) {
            let b = train_step(&batch, &mut state, cfg)?;
            let rec = MetricsRecord {
                step: state.step(),
                epoch,
                ce: b.ce,
                fl: b.fl,
                logits_kl: b.logits_kl,
                total: b.total,
                val_top1: None,
            };
            writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
            for (s, v) in sums.iter_mut().zip([b.ce, b.fl, b.logits_kl]) {
                *s += v;
            }
            n += 1;
        }
        let mean = total_loss(sums[0] / n as f64, sums[1] / n as f64, sums[2] / n as f64, weights)?;
        let top1 = validate(&state, &val)?;
        let rec = MetricsRecord {
            step: state.step(),
            epoch,
            ce: mean.ce,
            fl: mean.fl,
            logits_kl: mean.logits_kl,
            total: mean.total,
            val_top1: Some(top1),
        };
        writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
        info!("[{}] epoch {epoch}: total {:.4} val top-1 {top1:.2}", cfg.mode, mean.total);
        if top1 > best {
            best = top1;
            best_epoch = epoch;
            save_checkpoint(&state, cfg, &ckpt_path)?;
        }
        epochs.push(EpochSummary { epoch, train: mean, val_top1: top1 });
    }
    metrics.flush()?;

    let teacher_checksum = checksum_before.zip(state.teacher.as_ref().map(|t| param_checksum(t)));
    let report = TrainReport {
        mode: cfg.mode,
        epochs,
        best_val_top1: best,
        best_epoch,
        checkpoint: ckpt_path,
        metrics: metrics_path,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        seed: cfg.seed,
        teacher_checksum,
    };
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Trains the teacher architecture with cross-entropy alone. The returned
/// report's checkpoint is usable as `teacher.checkpoint`.
pub fn pretrain_teacher(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let mut t = cfg.clone();
    t.mode = Mode::CeOnly;
    t.student.architecture = cfg.teacher.architecture.clone();
    t.teacher.checkpoint = None;
    t.alpha = 0.0;
    t.beta = 0.0;
    if t.out_dir.is_none() {
        t.out_dir = Some(PathBuf::from("runs").join("teacher"));
    }
    run_experiment(&t)
}

/// Weights as the trainer applies them for `cfg.mode`.
pub fn effective_weights(cfg: &ExperimentConfig) -> LossWeights {
    cfg.mode.effective_weights(cfg.weights())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn config(mode: Mode) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::from_toml_str(
            r#"
epochs = 1
batch_size = 8

[dataset]
kind = "synthetic"
class_count = 2
input_size = 8
train_size = 16
val_size = 8
seed = 5

[teacher]
architecture = "toy_resnet_w4"

[student]
architecture = "toy_resnet_w2"
"#,
        )
        .unwrap();
        cfg.mode = mode;
        cfg
    }

    fn state_with_teacher(cfg: &ExperimentConfig) -> (TrainState, Dataset) {
        let (train, _) = synth_generate(&cfg.dataset).unwrap();
        let teacher = ToyResNet::new(cfg.teacher_arch().unwrap(), &mut ChaCha8Rng::seed_from_u64(9));
        let norm = Normalization::resolve(&cfg.dataset, &train);
        (TrainState::new(cfg, Some(teacher), norm).unwrap(), train)
    }

    #[test]
    fn ce_only_total_is_ce() {
        let cfg = config(Mode::CeOnly);
        let (mut state, train) = state_with_teacher(&cfg);
        let b = train_step(&train.gather(&[0, 1, 2, 3]), &mut state, &cfg).unwrap();
        assert!(b.fl > 0.0 && b.logits_kl > 0.0);
        assert_eq!(b.total, b.ce);
    }

    #[test]
    fn hybrid_reports_both_terms() {
        let cfg = config(Mode::HybridKdMse);
        let (mut state, train) = state_with_teacher(&cfg);
        assert_eq!(state.adapters.0.len(), 3);
        let b = train_step(&train.gather(&[0, 1, 2, 3]), &mut state, &cfg).unwrap();
        assert!(b.fl > 0.0 && b.logits_kl > 0.0);
        assert!((b.total - b.recombined()).abs() <= 1e-12);
        assert!(state.touched().iter().any(|n| n.starts_with("adapter.")));
    }

    #[test]
    fn step_matches_evaluated_losses() {
        let cfg = config(Mode::Unikd);
        let (mut state, train) = state_with_teacher(&cfg);
        let batch = train.gather(&[4, 5, 6]);
        let before = state.evaluate_losses(&batch, &cfg).unwrap();
        let b = train_step(&batch, &mut state, &cfg).unwrap();
        assert!((before.total - b.total).abs() <= 1e-12);
        assert_ne!(state.evaluate_losses(&batch, &cfg).unwrap().total, b.total);
    }

    #[test]
    fn teacher_is_never_registered() {
        let cfg = config(Mode::Unikd);
        let (state, _) = state_with_teacher(&cfg);
        assert!(state.optimizer.registered().iter().all(|n| !n.starts_with("teacher")));
        let student_params = state.student.param_names(checkpoint::BACKBONE);
        assert!(student_params.iter().all(|n| state.optimizer.registered().contains(n)));
    }

    #[test]
    fn missing_teacher_is_reported() {
        let mut cfg = config(Mode::Unikd);
        cfg.teacher.checkpoint = Some(PathBuf::from("/nonexistent/teacher.ckpt"));
        let (train, _) = synth_generate(&cfg.dataset).unwrap();
        assert!(matches!(prepare(&cfg, &train), Err(UniKdError::MissingTeacher(_))));
        cfg.mode = Mode::CeOnly;
        assert!(prepare(&cfg, &train).unwrap().teacher.is_none());
    }
}
