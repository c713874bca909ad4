//! Adam with linear learning-rate decay, best-validation selection.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{probabilities, PredictionRow, PredictionSet};
use crate::model::{HeadSpec, ModelCheckpoint, Target};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Learning-rate grid for the note-classification tasks.
pub const LR_GRID_CLASSIFICATION: [f64; 3] = [1e-5, 2e-5, 3e-5];
/// Learning-rate grid for the longitudinal prediction tasks.
pub const LR_GRID_LONGITUDINAL: [f64; 3] = [5e-5, 1e-4, 2e-4];

/// A model the training loop can optimize.
pub trait Trainable: Clone + Send + Sync {
    type Input: Sync;

    fn head(&self) -> &HeadSpec;

    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;

    /// Loss and gradients in `parameters_mut` order. `None` disables dropout.
    fn loss_and_grads(&self, input: &Self::Input, target: &Target, dropout_seed: Option<u64>) -> Result<(f64, Vec<Vec<f64>>)>;

    /// Inference-mode flat logits.
    fn logits(&self, input: &Self::Input) -> Result<Vec<f64>>;
}

impl Trainable for ModelCheckpoint {
    type Input = Vec<usize>;

    fn head(&self) -> &HeadSpec {
        &self.config.head
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.params_mut().collect()
    }

    fn loss_and_grads(&self, input: &Vec<usize>, target: &Target, dropout_seed: Option<u64>) -> Result<(f64, Vec<Vec<f64>>)> {
        ModelCheckpoint::loss_and_grads(self, input, target, dropout_seed)
    }

    fn logits(&self, input: &Vec<usize>) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.into_data())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    /// Parameters are rounded to single precision after every update.
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm cap; `null` disables clipping.
    pub clip_norm: Option<f64>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 8,
            epochs: 3,
            seed: 0,
            clip_norm: Some(1.0),
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be >= 0", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// `lr0 · (1 − step / total_steps)`.
pub fn lr_schedule(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    lr0 * (1.0 - step.min(total_steps) as f64 / total_steps as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        Self { m, v, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. A non-finite gradient aborts before
    /// anything is modified.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Dimension(format!("tensor {i}: optimizer state size mismatch")));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Training(format!("non-finite gradient in tensor {i}")));
            }
        }
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *w -= lr * mh / (vh.sqrt() + EPS);
            }
        }
        Ok(())
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub valid_metric: f64,
    /// Tie-breaker for selection; not part of the CSV log.
    pub valid_loss: f64,
}

pub const LOG_HEADER: &str = "epoch,step,lr,train_loss,valid_metric";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.step, r.lr, r.train_loss, r.valid_metric).expect("string write");
    }
    s
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    std::fs::write(path, log_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Whether `(metric, loss)` beats `best`: a higher metric, or an equal
/// metric with lower validation loss. NaN metrics never win.
fn improves(candidate: (f64, f64), best: Option<(f64, f64)>) -> bool {
    let (m, l) = candidate;
    if m.is_nan() {
        return false;
    }
    match best {
        None => true,
        Some((bm, bl)) => m > bm || (m == bm && l < bl),
    }
}

/// Index of the best `(metric, loss)` entry; among full ties the first.
pub fn select_best(entries: &[(f64, f64)]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &e) in entries.iter().enumerate() {
        if improves(e, best.map(|b| entries[b])) {
            best = Some(i);
        }
    }
    best
}

pub struct TrainOutcome<M> {
    /// Parameters from the epoch with the best validation metric.
    pub best: M,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub metric_name: &'static str,
    pub log: Vec<LogRow>,
}

pub fn predict_set<M: Trainable>(model: &M, data: &[(M::Input, Target)]) -> Result<PredictionSet> {
    let head = model.head().clone();
    let rows: Vec<Result<PredictionRow>> = data
        .par_iter()
        .map(|(x, y)| {
            Ok(PredictionRow {
                scores: probabilities(&head, &model.logits(x)?),
                gold: y.clone(),
            })
        })
        .collect();
    let mut set = PredictionSet::new(head);
    set.rows = rows.into_iter().collect::<Result<_>>()?;
    Ok(set)
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a simple combination.
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains for `cfg.epochs` epochs and returns the best-validation parameters.
///
/// Batch items are processed in parallel; gradients are summed in batch
/// order, so results do not depend on the worker count.
pub fn train<M: Trainable>(
    model: &M,
    train_set: &[(M::Input, Target)],
    valid_set: &[(M::Input, Target)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if valid_set.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    for (_, y) in train_set.iter().chain(valid_set) {
        model.head().check_target(y)?;
    }
    let mut current = model.clone();
    let sizes: Vec<usize> = current.parameters_mut().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(sizes);
    let batches_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(M, usize, f64, f64)> = None;
    let mut metric_name = "";
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.learning_rate;
        for batch in order.chunks(cfg.batch_size) {
            lr = lr_schedule(step, total_steps, cfg.learning_rate);
            let results: Vec<Result<(f64, Vec<Vec<f64>>)>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let (x, y) = &train_set[i];
                    current.loss_and_grads(x, y, Some(mix(cfg.seed, step as u64, slot as u64)))
                })
                .collect();
            let mut sum: Option<Vec<Vec<f64>>> = None;
            for r in results {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::Training(format!("non-finite loss at step {step}")));
                }
                loss_sum += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            let mut grads = sum.expect("batch is nonempty");
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            let mut params = current.parameters_mut();
            adam.step(&mut params, &grads, lr)?;
            if cfg.precision == Precision::F32 {
                for p in params {
                    p.data_mut().iter_mut().for_each(|w| *w = *w as f32 as f64);
                }
            }
            step += 1;
        }
        let preds = predict_set(&current, valid_set)?;
        metric_name = preds.primary_metric_name();
        let metric = match preds.primary_metric() {
            Ok((_, m)) => m,
            // e.g. a single-class validation set under AUC
            Err(Error::DegenerateInput(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        let valid_loss = preds.mean_log_loss()?;
        log.push(LogRow {
            epoch,
            step,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            valid_metric: metric,
            valid_loss,
        });
        if improves((metric, valid_loss), best.as_ref().map(|b| (b.2, b.3))) {
            best = Some((current.clone(), epoch, metric, valid_loss));
        }
    }
    let (best, best_epoch, best_metric) = match best {
        Some((m, e, metric, _)) => (m, e, metric),
        // Every epoch produced NaN; keep the final parameters.
        None => (current, cfg.epochs, f64::NAN),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metric,
        metric_name,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 10, 0.3), 0.3);
        assert_eq!(lr_schedule(10, 10, 0.3), 0.0);
        assert!((lr_schedule(5, 10, 0.3) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_hand_value() {
        let mut p = Tensor::scalar(0.0);
        let mut st = AdamState::new([1]);
        st.step(&mut [&mut p], &[vec![1.0]], 0.1).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new([3]);
        st.step(&mut [&mut p], &[vec![0.0; 3]], 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_rejects_nan_without_touching_params() {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new([1]);
        let err = st.step(&mut [&mut p], &[vec![f64::NAN]], 0.1);
        assert!(matches!(err, Err(Error::Training(_))));
        assert_eq!(p.data()[0], 1.0);
        assert_eq!(st.steps(), 0);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn best_epoch_is_first_maximum() {
        let curve = [(0.2, 1.0), (0.7, 0.5), (0.5, 0.4), (0.7, 0.5), (0.1, 0.3)];
        assert_eq!(select_best(&curve), Some(1));
        assert_eq!(select_best(&[(f64::NAN, 0.0), (0.1, 9.0)]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn metric_ties_go_to_lower_loss() {
        let curve = [(1.0, 0.6), (1.0, 0.2), (1.0, 0.3), (0.9, 0.01)];
        assert_eq!(select_best(&curve), Some(1));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn partial_config_file() {
        let c: TrainConfig = serde_json::from_str(r#"{"epochs": 7, "clip_norm": null}"#).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.clip_norm, None);
        assert_eq!(c.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn log_csv_layout() {
        let rows = [LogRow {
            epoch: 1,
            step: 4,
            lr: 0.5,
            train_loss: 0.25,
            valid_metric: 1.0,
            valid_loss: 0.1,
        }];
        assert_eq!(log_csv(&rows), "epoch,step,lr,train_loss,valid_metric\n1,4,0.5,0.25,1\n");
    }

    fn toy_data() -> Vec<(Vec<usize>, Target)> {
        // Class is decided by which marker token (4 or 5) appears.
        (0..16)
            .map(|i| {
                let marker = if i % 2 == 0 { 4 } else { 5 };
                let filler = 6 + i % 5;
                (vec![2, filler, marker, filler], Target::Class(i % 2))
            })
            .collect()
    }

    fn toy_model() -> ModelCheckpoint {
        use crate::attention::AttentionMode;
        use crate::model::tests::tiny_config;
        ModelCheckpoint::init(tiny_config(AttentionMode::Dense, HeadSpec::SingleLabel { n_classes: 2 })).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let m = toy_model();
        let data = toy_data();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&m, &data, &data, &cfg).unwrap();
        assert_eq!(out.best.params(), m.params());
        assert_eq!(out.log.len(), 1);
        assert_eq!(out.log[0].step, 4);
    }

    #[test]
    fn learns_marker_task_deterministically() {
        let m = toy_model();
        let data = toy_data();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 15,
            batch_size: 4,
            seed: 1,
            ..TrainConfig::default()
        };
        let a = train(&m, &data, &data, &cfg).unwrap();
        assert_eq!(a.metric_name, "macro_f1");
        assert_eq!(a.best_metric, 1.0, "log: {:?}", a.log);
        assert!(a.log.last().unwrap().train_loss < a.log[0].train_loss);
        let b = train(&m, &data, &data, &cfg).unwrap();
        assert_eq!(a.best.params(), b.best.params());
    }

    #[test]
    fn empty_sets_are_config_errors() {
        let m = toy_model();
        let data = toy_data();
        let cfg = TrainConfig::default();
        assert!(matches!(train(&m, &[], &data, &cfg), Err(Error::Config(_))));
        assert!(matches!(train(&m, &data, &[], &cfg), Err(Error::Config(_))));
    }
}
