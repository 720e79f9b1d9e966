//! Mini-batch training with momentum SGD (or AdamW), global-norm clipping and
//! a coefficient audit after every update.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use pdelab_core::LayerParams;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{cross_entropy, Model};
use crate::tasks::{Example, TaskDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    AdamW,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::SgdMomentum => "sgd-momentum",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" => Ok(OptimizerKind::SgdMomentum),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(Error::Config(format!("unknown optimizer '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Decoupled decay, AdamW only.
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Linear warmup over this fraction of all steps followed by cosine decay.
    pub warmup_cosine: Option<f64>,
    /// Keep the diffusion parameters at their initial values.
    pub freeze_pde: bool,
    /// Stop after the first epoch whose validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 32,
            lr: 0.05,
            seed: 0,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            warmup_cosine: None,
            freeze_pde: false,
            target_accuracy: None,
            eval_batch: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be finite and >= 0",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config("clip norm must be positive".into()));
            }
        }
        if let Some(w) = self.warmup_cosine {
            if !(0.0..1.0).contains(&w) {
                return Err(Error::Config(format!("warmup fraction {w} outside [0, 1)")));
            }
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let Some(warm) = self.warmup_cosine else {
            return self.lr;
        };
        let warm_steps = (warm * total as f64).ceil() as usize;
        if step < warm_steps {
            return self.lr * (step + 1) as f64 / warm_steps as f64;
        }
        let progress = (step - warm_steps) as f64 / (total - warm_steps).max(1) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's mini-batches, weighted by batch size.
    pub loss: f64,
    pub val_acc: f64,
    pub sec: f64,
}

/// Extremes of the diffusion coefficients seen over all audited steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoefficientAudit {
    pub checks: usize,
    pub violations: usize,
    pub min_alpha: f64,
    pub max_alpha: f64,
    /// Largest per-channel `sum_k |w_k| alpha_k` after runtime rescaling.
    pub max_effective_sum: f64,
}

impl Default for CoefficientAudit {
    fn default() -> Self {
        Self {
            checks: 0,
            violations: 0,
            min_alpha: f64::INFINITY,
            max_alpha: f64::NEG_INFINITY,
            max_effective_sum: 0.0,
        }
    }
}

impl CoefficientAudit {
    fn record(&mut self, p: &LayerParams) {
        self.checks += 1;
        let alphas = p.alphas();
        let (_, sums) = p.effective_alphas();
        let mut bad = false;
        for &a in &alphas {
            self.min_alpha = self.min_alpha.min(a);
            self.max_alpha = self.max_alpha.max(a);
            bad |= !(a > 0.0 && a < 0.5);
        }
        for &s in &sums {
            self.max_effective_sum = self.max_effective_sum.max(s);
            bad |= !(s < 0.5);
        }
        if bad {
            self.violations += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimisation step, in order.
    pub step_losses: Vec<f64>,
    pub audit: Option<CoefficientAudit>,
    /// Diffusion parameters after the last step.
    pub pde_snapshot: Option<LayerParams>,
    pub majority_baseline: f64,
}

impl TrainReport {
    pub fn final_val_acc(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.val_acc)
    }

    pub fn best_val_acc(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_acc).fold(0.0, f64::max)
    }

    pub fn cfl_violations(&self) -> usize {
        self.audit.map_or(0, |a| a.violations)
    }

    /// `epoch,loss,val_acc,sec` rows preceded by the header line.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "epoch,loss,val_acc,sec")?;
        for e in &self.epochs {
            writeln!(out, "{},{:.12e},{:.12e},{:.6}", e.epoch, e.loss, e.val_acc, e.sec)?;
        }
        Ok(())
    }
}

enum OptState {
    Sgd { velocity: Vec<Vec<f64>> },
    Adam { m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: i32 },
}

const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;

impl OptState {
    fn new(kind: OptimizerKind, shapes: &[usize]) -> Self {
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        match kind {
            OptimizerKind::SgdMomentum => OptState::Sgd { velocity: zeros() },
            OptimizerKind::AdamW => OptState::Adam {
                m: zeros(),
                v: zeros(),
                t: 0,
            },
        }
    }

    fn step(&mut self, cfg: &TrainConfig, lr: f64, params: Vec<&mut [f64]>, grads: &[&[f64]], scale: f64) {
        match self {
            OptState::Sgd { velocity } => {
                for ((p, g), v) in params.into_iter().zip(grads).zip(velocity.iter_mut()) {
                    for ((p, &g), v) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        *v = cfg.momentum * *v + g * scale;
                        *p -= lr * *v;
                    }
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let (b1, b2) = ADAM_BETAS;
                let c1 = 1.0 - b1.powi(*t);
                let c2 = 1.0 - b2.powi(*t);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = g * scale;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *p -= lr * cfg.weight_decay * *p;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Fraction of `examples` whose argmax logit equals the label.
pub fn accuracy(model: &Model, examples: &[Example], batch: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(batch.max(1)) {
        let refs: Vec<&[usize]> = chunk.iter().map(|e| e.tokens.as_slice()).collect();
        let logits = model.logits(&refs)?;
        for (row, e) in logits.rows().into_iter().zip(chunk) {
            let pred = row
                .iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                )
                .0;
            correct += usize::from(pred == e.label);
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

/// Trains `model` in place. Deterministic given the model and `cfg.seed`.
pub fn train(model: &mut Model, dataset: &TaskDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    dataset.validate()?;
    let mc = model.config();
    if dataset.max_len != mc.max_len || dataset.vocab > mc.vocab || dataset.num_classes > mc.num_classes {
        return Err(Error::Config(format!(
            "dataset (max_len {}, vocab {}, classes {}) does not fit the model (max_len {}, vocab {}, classes {})",
            dataset.max_len, dataset.vocab, dataset.num_classes, mc.max_len, mc.vocab, mc.num_classes
        )));
    }
    if dataset.train.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);

    let frozen = cfg.freeze_pde;
    let n_weight_slices = model.weights().slices().len();
    let shapes: Vec<usize> = model.params_mut().iter().map(|s| s.len()).collect();
    let mut opt = OptState::new(cfg.optimizer, &shapes);
    let mut audit = model.pde().map(|p| {
        let mut a = CoefficientAudit::default();
        a.record(p);
        a
    });

    let steps_per_epoch = dataset.train.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..dataset.train.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(cfg.epochs),
        step_losses: Vec::with_capacity(total_steps),
        audit: None,
        pde_snapshot: None,
        majority_baseline: dataset.majority_baseline(),
    };
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(cfg.batch) {
            let refs: Vec<&[usize]> = idx.iter().map(|&i| dataset.train[i].tokens.as_slice()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| dataset.train[i].label).collect();
            let (logits, cache) = model.forward(&refs, Some(&mut dropout_rng))?;
            let (loss, dlogits) = cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += loss * idx.len() as f64;
            report.step_losses.push(loss);
            let grads = model.backward(&cache, &dlogits)?;
            let gslices = grads.slices();
            let active = if frozen { n_weight_slices } else { gslices.len() };
            let norm = gslices[..active]
                .iter()
                .flat_map(|s| s.iter())
                .map(|g| g * g)
                .sum::<f64>()
                .sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    loss: norm,
                });
            }
            let scale = match cfg.clip_norm {
                Some(c) if norm > c => c / norm,
                _ => 1.0,
            };
            let lr = cfg.lr_at(step, total_steps);
            let mut params = model.params_mut();
            params.truncate(active);
            opt.step(cfg, lr, params, &gslices[..active], scale);
            if let (Some(a), Some(p)) = (audit.as_mut(), model.pde()) {
                a.record(p);
            }
            step += 1;
        }
        let val_acc = accuracy(model, &dataset.val, cfg.eval_batch)?;
        report.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / dataset.train.len() as f64,
            val_acc,
            sec: start.elapsed().as_secs_f64(),
        });
        if cfg.target_accuracy.is_some_and(|t| val_acc >= t) {
            break;
        }
    }
    report.audit = audit;
    report.pde_snapshot = model.pde().cloned();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{IntegrationPosition, ModelConfig};
    use crate::tasks::{listops_mini, ListOpsConfig};

    fn setup(position: IntegrationPosition) -> (Model, TaskDataset) {
        let data = listops_mini(
            96,
            32,
            1,
            &ListOpsConfig {
                max_len: 24,
                max_depth: 2,
                ..ListOpsConfig::default()
            },
        )
        .unwrap();
        let cfg = ModelConfig {
            dim: 8,
            heads: 2,
            mlp_hidden: 16,
            max_len: 24,
            position,
            seed: 4,
            ..ModelConfig::default()
        };
        (Model::new(cfg).unwrap(), data)
    }

    #[test]
    fn zero_learning_rate_keeps_the_loss() {
        let (model, data) = setup(IntegrationPosition::AfterMlp);
        let cfg = TrainConfig {
            epochs: 3,
            lr: 0.0,
            batch: 16,
            ..TrainConfig::default()
        };
        // dropout changes the loss between epochs, so compare in a dropout-free model
        let mut mc = model.config().clone();
        mc.dropout = 0.0;
        let mut model = Model::new(mc).unwrap();
        let before = model.clone();
        let r = train(&mut model, &data, &cfg).unwrap();
        assert!(r.epochs.windows(2).all(|w| (w[0].loss - w[1].loss).abs() < 1e-12));
        assert_eq!(model.weights(), before.weights());
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_cosine: Some(0.1),
            ..TrainConfig::default()
        };
        assert!((cfg.lr_at(0, 100) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9, 100) - 1.0).abs() < 1e-12);
        assert!(cfg.lr_at(99, 100) < 0.01);
    }

    #[test]
    fn frozen_pde_stays_put() {
        let (mut model, data) = setup(IntegrationPosition::AfterEmbedding);
        let before = model.pde().unwrap().clone();
        let cfg = TrainConfig {
            epochs: 1,
            freeze_pde: true,
            ..TrainConfig::default()
        };
        let r = train(&mut model, &data, &cfg).unwrap();
        assert_eq!(r.pde_snapshot.as_ref(), Some(&before));
        assert_eq!(r.cfl_violations(), 0);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut model, data) = setup(IntegrationPosition::None);
        let cfg = TrainConfig {
            lr: 1e300,
            clip_norm: None,
            epochs: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&mut model, &data, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn mismatched_dataset_is_rejected() {
        let (mut model, _) = setup(IntegrationPosition::None);
        let data = listops_mini(8, 8, 1, &ListOpsConfig::default()).unwrap();
        assert!(train(&mut model, &data, &TrainConfig::default()).is_err());
    }
}
