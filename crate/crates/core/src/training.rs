//! Minibatch training with early stopping and best-weights restore.
//!
//! The loss is the pixel-mean binary cross-entropy. Gradients of a batch are
//! computed per sample in parallel windows and summed in sample order, so a
//! run is bit-identical for any thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::{report_from_predictions, EvalOptions};
use crate::preprocess::{DatasetSplit, SlideSample};
use crate::unet::{network, predict_samples, ModelState};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

pub const TRAIN_MAX_EPOCHS: usize = 200;
pub const RETRAIN_MAX_EPOCHS: usize = 50;

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 45,
            max_epochs: TRAIN_MAX_EPOCHS,
            early_stop_patience: 10,
            shuffle: true,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl Hyperparams {
    /// Defaults with the shorter fine-tuning budget.
    pub fn retrain_defaults() -> Self {
        Self { max_epochs: RETRAIN_MAX_EPOCHS, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidArgument("batch size, max epochs and patience must all be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean clamped binary cross-entropy over all pixels.
pub fn bce_loss(pred: &[f32], target: &[u8]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("prediction has {} pixels, target {}", pred.len(), target.len())));
    }
    let sum: f64 = pred.iter().zip(target).map(|(&p, &t)| network::bce_pixel(p as f64, t as f64)).sum();
    Ok(sum / pred.len() as f64)
}

/// What the stopping rule concluded after one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    NoImprovement,
    Stop,
}

/// Patience rule on a monitored loss. Only a strict decrease counts as
/// improvement; it fires once `patience` consecutive epochs fail to improve.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: 0, wait: 0 }
    }

    /// Feeds the loss of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.wait = 0;
            return Verdict::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            Verdict::Stop
        } else {
            Verdict::NoImprovement
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 0 until a finite loss has been seen.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// First epoch at which the rule fires on `losses`, if any.
pub fn stopping_epoch(losses: &[f64], patience: usize) -> Option<usize> {
    let mut rule = EarlyStopping::new(patience);
    losses.iter().enumerate().find_map(|(i, &l)| (rule.observe(i + 1, l) == Verdict::Stop).then_some(i + 1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    BudgetExhausted,
    /// The epoch observer asked to stop.
    Halted,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::BudgetExhausted => "budget_exhausted",
            StopReason::Halted => "halted",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub stopped_epoch: usize,
    pub stop_reason: StopReason,
    /// Epoch whose weights were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_f1\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:.8},{:.8},{:.6}", r.epoch, r.train_loss, r.val_loss, r.val_f1);
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::Io { path: path.to_owned(), source: e })
    }
}

/// Scores a model after each epoch: `(loss, f1)`. The loss drives early
/// stopping.
pub trait Validator {
    fn validate(&mut self, model: &ModelState) -> Result<(f64, f64)>;
}

/// Mean BCE and macro F1 (default evaluation options) over fixed samples.
pub struct SampleValidator<'a> {
    samples: &'a [SlideSample],
}

impl<'a> SampleValidator<'a> {
    pub fn new(samples: &'a [SlideSample]) -> Self {
        Self { samples }
    }
}

impl Validator for SampleValidator<'_> {
    fn validate(&mut self, model: &ModelState) -> Result<(f64, f64)> {
        let preds = predict_samples(model, self.samples)?;
        let mut sum = 0.0;
        let mut pixels = 0usize;
        for (p, s) in preds.iter().zip(self.samples) {
            sum += bce_loss(p, &s.target)? * p.len() as f64;
            pixels += p.len();
        }
        let f1 = report_from_predictions(self.samples, &preds, &EvalOptions::default())?.macro_avg.f1;
        Ok((sum / pixels as f64, f1))
    }
}

/// Returned by epoch observers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Halt,
}

enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, t: i32, m: Vec<Vec<f32>>, v: Vec<Vec<f32>> },
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-7;

    fn new(kind: OptimizerKind, lr: f64, model: &ModelState) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => {
                let zeros = || model.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
                Optimizer::Adam { lr, t: 0, m: zeros(), v: zeros() }
            }
        }
    }

    fn step(&mut self, model: &mut ModelState, grads: &[Vec<f32>]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (t, g) in model.tensors.iter_mut().zip(grads) {
                    for (p, &g) in t.data.iter_mut().zip(g) {
                        *p = (*p as f64 - *lr * g as f64) as f32;
                    }
                }
            }
            Optimizer::Adam { lr, t, m, v } => {
                *t += 1;
                let lr_t = *lr * (1.0 - Self::BETA2.powi(*t)).sqrt() / (1.0 - Self::BETA1.powi(*t));
                for (k, tensor) in model.tensors.iter_mut().enumerate() {
                    for (i, p) in tensor.data.iter_mut().enumerate() {
                        let g = grads[k][i] as f64;
                        let mi = Self::BETA1 * m[k][i] as f64 + (1.0 - Self::BETA1) * g;
                        let vi = Self::BETA2 * v[k][i] as f64 + (1.0 - Self::BETA2) * g * g;
                        m[k][i] = mi as f32;
                        v[k][i] = vi as f32;
                        *p = (*p as f64 - lr_t * mi / (vi.sqrt() + Self::EPS)) as f32;
                    }
                }
            }
        }
    }
}

/// Summed loss of `batch` and the gradient of the batch-mean loss.
fn batch_gradient(model: &ModelState, batch: &[&SlideSample]) -> (f64, Vec<Vec<f32>>) {
    let cfg = &model.config;
    let params = model.params();
    let scale = 1.0 / (batch.len() * cfg.pixels()) as f64;
    let mut total: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut loss = 0.0;
    for window in batch.chunks(crate::par::width()) {
        let parts = crate::par::map(window, |s| network::loss_and_grad(cfg, &params, &s.input, &s.target, scale));
        for (l, g) in parts {
            loss += l;
            for (acc, g) in total.iter_mut().zip(&g) {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
    (loss, total)
}

fn check_samples(model: &ModelState, samples: &[SlideSample], what: &str) -> Result<()> {
    let cfg = &model.config;
    for s in samples {
        if s.size != cfg.input_size || s.input.len() != cfg.pixels() * cfg.input_channels || s.target.len() != cfg.pixels() {
            return Err(Error::Shape(format!(
                "{what} sample {}:{} does not fit a {}x{} network",
                s.volume_id, s.slide_index, cfg.input_size, cfg.input_size
            )));
        }
    }
    Ok(())
}

/// The general loop behind [`train`] and [`retrain`].
///
/// After every epoch `validator` scores the weights, the stopping rule sees
/// the loss, and `observer` may halt the run. The returned weights are those
/// of the best validation epoch; `training_epochs_consumed` grows by the
/// number of epochs run.
pub fn train_with(
    mut model: ModelState,
    train_set: &[SlideSample],
    validator: &mut dyn Validator,
    hp: &Hyperparams,
    observer: &mut dyn FnMut(&EpochRecord, &ModelState) -> Control,
) -> Result<(ModelState, TrainHistory)> {
    hp.validate()?;
    model.check_shapes()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    check_samples(&model, train_set, "training")?;

    let start_epochs = model.training_epochs_consumed;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut opt = Optimizer::new(hp.optimizer, hp.learning_rate, &model);
    let mut rule = EarlyStopping::new(hp.early_stop_patience);
    let mut best = model.clone();
    let mut records = Vec::new();
    let mut reason = StopReason::BudgetExhausted;
    let pixels = (train_set.len() * model.config.pixels()) as f64;

    for epoch in 1..=hp.max_epochs {
        if hp.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for chunk in order.chunks(hp.batch_size) {
            let batch: Vec<&SlideSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, grads) = batch_gradient(&model, &batch);
            loss_sum += loss;
            opt.step(&mut model, &grads);
        }
        let (val_loss, val_f1) = validator.validate(&model)?;
        let record = EpochRecord { epoch, train_loss: loss_sum / pixels, val_loss, val_f1 };
        records.push(record);
        log::info!(
            "epoch {epoch}: train_loss {:.6} val_loss {val_loss:.6} val_f1 {val_f1:.4}",
            record.train_loss
        );

        let verdict = rule.observe(epoch, val_loss);
        if verdict == Verdict::Improved {
            best = model.clone();
        }
        let halt = observer(&record, &model) == Control::Halt;
        if verdict == Verdict::Stop {
            reason = StopReason::EarlyStop;
            break;
        }
        if halt {
            reason = StopReason::Halted;
            break;
        }
    }

    let stopped_epoch = records.len();
    // A loss that never became finite leaves the starting weights in place.
    let best_epoch = rule.best_epoch();
    best.training_epochs_consumed = start_epochs + stopped_epoch;
    Ok((best, TrainHistory { records, stopped_epoch, stop_reason: reason, best_epoch }))
}

/// Trains on `split.train`, validating on `split.validation`.
pub fn train(model: ModelState, split: &DatasetSplit, hp: &Hyperparams) -> Result<(ModelState, TrainHistory)> {
    if split.validation.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    check_samples(&model, &split.validation, "validation")?;
    train_with(model, &split.train, &mut SampleValidator::new(&split.validation), hp, &mut |_, _| Control::Continue)
}

/// Continues optimizing already trained weights. The optimizer state starts
/// fresh; the epoch counter carries over.
pub fn retrain(state: ModelState, split: &DatasetSplit, hp: &Hyperparams) -> Result<(ModelState, TrainHistory)> {
    train(state, split, hp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{make_split, volume_samples};
    use crate::unet::{build_unet, UNetConfig};
    use crate::volume_io::{synth_volume, PhantomSpec};

    fn small_samples(slides: usize, seed: u64) -> Vec<SlideSample> {
        let spec = PhantomSpec {
            slide_count: slides,
            height: 32,
            width: 32,
            lesion_radius_range: (2.0, 3.0),
            vessel_count: 2,
            seed,
            ..PhantomSpec::default()
        };
        volume_samples(&synth_volume(&spec).unwrap(), 16).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5; 4], &[0, 1, 1, 0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_loss(&[0.9], &[1]).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-7);
        assert!(bce_loss(&[1.0, 0.0], &[1, 0]).unwrap() < 1.1e-7);
        assert!(matches!(bce_loss(&[0.5], &[0, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn stopping_rule_scripted() {
        assert_eq!(stopping_epoch(&[1.0, 0.9, 0.9, 0.9, 0.9], 3), Some(5));
        assert_eq!(stopping_epoch(&[1.0, 0.9, 0.8, 0.7], 1), None);
        assert_eq!(stopping_epoch(&[1.0, 1.0], 1), Some(2));
        assert_eq!(stopping_epoch(&[3.0, 2.0, 2.5, 1.0, 1.5, 1.5], 2), Some(6));
    }

    #[test]
    fn single_epoch_budget() {
        let samples = small_samples(8, 1);
        let split = make_split(samples, 4, 2, 0).unwrap();
        let model = build_unet(&UNetConfig::new(2, 2, 16), 0).unwrap();
        let hp = Hyperparams { max_epochs: 1, batch_size: 2, ..Hyperparams::default() };
        let (m, h) = train(model, &split, &hp).unwrap();
        assert_eq!(h.records.len(), 1);
        assert_eq!(h.stopped_epoch, 1);
        assert_eq!(h.stop_reason, StopReason::BudgetExhausted);
        assert_eq!(m.training_epochs_consumed, 1);
    }

    #[test]
    fn runs_are_deterministic() {
        let split = make_split(small_samples(8, 2), 4, 2, 0).unwrap();
        let hp = Hyperparams { max_epochs: 3, batch_size: 3, learning_rate: 1e-3, seed: 9, ..Hyperparams::default() };
        let run = || train(build_unet(&UNetConfig::new(2, 2, 16), 1).unwrap(), &split, &hp).unwrap();
        let (a, ha) = run();
        let (b, hb) = run();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
    }

    #[test]
    fn one_small_step_does_not_raise_batch_loss() {
        let samples = small_samples(4, 3);
        let model = build_unet(&UNetConfig::new(2, 2, 16), 4).unwrap();
        let batch: Vec<&SlideSample> = samples.iter().collect();
        let (before, grads) = batch_gradient(&model, &batch);
        let mut stepped = model.clone();
        Optimizer::new(OptimizerKind::Sgd, 1e-2, &model).step(&mut stepped, &grads);
        let (after, _) = batch_gradient(&stepped, &batch);
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let model = build_unet(&UNetConfig::new(1, 1, 16), 0).unwrap();
        let val = small_samples(2, 0);
        let err = train_with(model, &[], &mut SampleValidator::new(&val), &Hyperparams::default(), &mut |_, _| Control::Continue);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    struct Scripted(Vec<f64>, usize);

    impl Validator for Scripted {
        fn validate(&mut self, _: &ModelState) -> Result<(f64, f64)> {
            self.1 += 1;
            Ok((self.0[self.1 - 1], 0.0))
        }
    }

    #[test]
    fn best_epoch_weights_are_returned() {
        let samples = small_samples(4, 5);
        let model = build_unet(&UNetConfig::new(1, 2, 16), 0).unwrap();
        let hp = Hyperparams { early_stop_patience: 3, batch_size: 2, learning_rate: 1e-2, ..Hyperparams::default() };
        let mut snapshots = Vec::new();
        let mut v = Scripted(vec![1.0, 0.9, 0.9, 0.9, 0.9, 0.1], 0);
        let (m, h) = train_with(model, &samples, &mut v, &hp, &mut |_, m| {
            snapshots.push(m.clone());
            Control::Continue
        })
        .unwrap();
        assert_eq!((h.stopped_epoch, h.stop_reason, h.best_epoch), (5, StopReason::EarlyStop, 2));
        assert_eq!(m.tensors, snapshots[1].tensors);
        assert_ne!(m.tensors, snapshots[4].tensors);
        assert_eq!(m.training_epochs_consumed, 5);
    }
}
