//! Adam with L2 weight decay, the epoch loop, validation and patience-based
//! early stopping with best-weight restoration.

use std::collections::HashSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{config_err, contract_err, Result};
use crate::loss::{hybrid_loss, HybridConfig, RankingConfig};
use crate::metrics::{evaluate, EvalReport};
use crate::model::RankVqaModel;
use crate::nn::{Mode, Pass};
use crate::rng::{Rng, SeedPlan};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
    pub ranking: RankingConfig,
    pub hybrid: HybridConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 64,
            max_epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0001,
            patience: 5,
            seed: 0,
            ranking: RankingConfig::default(),
            hybrid: HybridConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return config_err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return config_err(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return config_err("epsilon must be > 0 and weight_decay >= 0");
        }
        if self.patience == 0 || self.batch_size == 0 {
            return config_err("patience and batch_size must be at least 1");
        }
        self.ranking.validate()?;
        self.hybrid.validate()
    }
}

/// First and second moment estimates, one array per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with the decay term added to the gradient
/// (`g + weight_decay·θ`). Gradients are cleared afterwards.
pub fn adam_step(params: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if state.m.len() != params.len() {
        return contract_err("optimizer state does not match parameter list");
    }
    let grads = params
        .iter()
        .enumerate()
        .map(|(i, p)| p.grad().ok_or_else(|| crate::Error::Contract(format!("parameter {i} has no gradient"))))
        .collect::<Result<Vec<_>>>()?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params.iter().zip(&grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let mut theta = p.data_mut();
        for i in 0..g.len() {
            let g = g[i] + cfg.weight_decay * theta[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        drop(theta);
        p.zero_grad();
    }
    Ok(())
}

/// Tracks the best validation loss and stops once `patience` consecutive
/// epochs fail to improve on it strictly.
#[derive(Debug, Clone)]
pub struct EarlyStopper<C> {
    patience: usize,
    best_loss: f64,
    best_epoch: Option<usize>,
    since_improvement: usize,
    best: Option<C>,
}

impl<C> EarlyStopper<C> {
    pub fn new(patience: usize) -> Self {
        Self { patience, best_loss: f64::INFINITY, best_epoch: None, since_improvement: 0, best: None }
    }

    /// Records an epoch; `snapshot` is only called on improvement. Returns
    /// `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, loss: f64, snapshot: impl FnOnce() -> C) -> bool {
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
            self.best = Some(snapshot());
        } else {
            self.since_improvement += 1;
        }
        self.since_improvement >= self.patience
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best_loss
    }

    pub fn epochs_since_improvement(&self) -> usize {
        self.since_improvement
    }

    pub fn into_best(self) -> Option<C> {
        self.best
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_cls: f64,
    pub train_rank: f64,
    pub train_total: f64,
    pub val_cls: f64,
    pub val_rank: f64,
    pub val_total: f64,
    pub val_accuracy: f64,
    pub val_mrr: f64,
    pub lambda: f64,
    pub wall_time_s: f64,
}

impl EpochLog {
    /// Every field except the wall-clock time, as bit patterns.
    pub fn deterministic_bits(&self) -> [u64; 10] {
        [
            self.epoch as u64,
            self.train_cls.to_bits(),
            self.train_rank.to_bits(),
            self.train_total.to_bits(),
            self.val_cls.to_bits(),
            self.val_rank.to_bits(),
            self.val_total.to_bits(),
            self.val_accuracy.to_bits(),
            self.val_mrr.to_bits(),
            self.lambda.to_bits(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Validate,
}

/// Batch-size-weighted loss means for one pass over a split.
#[derive(Debug, Clone)]
pub struct PhaseStats {
    pub cls: f64,
    pub rank: f64,
    pub total: f64,
    pub lambda: f64,
    /// Present for validation passes.
    pub report: Option<EvalReport>,
}

/// Optimizer state and the seeded streams that drive training.
pub struct Trainer<'m> {
    model: &'m RankVqaModel,
    cfg: TrainConfig,
    params: Vec<Tensor>,
    adam: AdamState,
    shuffle_rng: Rng,
    /// Dropout masks and sampled negatives.
    noise_rng: Rng,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m RankVqaModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = model.param_tensors();
        let seeds = SeedPlan(cfg.seed);
        Ok(Self {
            model,
            adam: AdamState::new(&params),
            params,
            shuffle_rng: Rng::new(seeds.shuffle()),
            noise_rng: Rng::new(seeds.dropout()),
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One pass over `split`. `epoch` is zero-based and selects λ.
    pub fn run_epoch(&mut self, split: &Dataset, epoch: usize, phase: Phase) -> Result<PhaseStats> {
        if split.is_empty() {
            return contract_err("cannot run an epoch over an empty split");
        }
        let (mut cls, mut rank, mut total, mut lambda) = (0.0, 0.0, 0.0, 0.0);
        let mut all_scores = Vec::new();
        let mut all_targets = Vec::new();
        let mut val_rng = Rng::new(SeedPlan(self.cfg.seed).validation());
        let (mode, shuffle) = match phase {
            Phase::Train => (Mode::Train, Some(&mut self.shuffle_rng)),
            Phase::Validate => (Mode::Eval, None),
        };
        for batch in batches(split, self.cfg.batch_size, shuffle)? {
            let targets: Vec<usize> = batch.iter().map(|s| s.answer).collect();
            let rng = match phase {
                Phase::Train => &mut self.noise_rng,
                Phase::Validate => &mut val_rng,
            };
            let logits = self.model.forward_batch(&batch, &mut Pass::new(mode, rng))?;
            let (loss, parts) =
                hybrid_loss(&logits, &targets, &self.cfg.ranking, &self.cfg.hybrid, epoch, rng)?;
            let w = batch.len() as f64;
            cls += w * parts.cls;
            rank += w * parts.rank;
            total += w * parts.total;
            lambda = parts.lambda_used;
            match phase {
                Phase::Train => {
                    loss.backward()?;
                    adam_step(&self.params, &mut self.adam, &self.cfg)?;
                }
                Phase::Validate => {
                    let a = logits.shape()[1];
                    all_scores.extend(logits.data().chunks(a).map(|r| r.to_vec()));
                    all_targets.extend(targets);
                }
            }
        }
        let n = split.len() as f64;
        let report = match phase {
            Phase::Train => None,
            Phase::Validate => Some(evaluate(&all_scores, &all_targets)?),
        };
        Ok(PhaseStats { cls: cls / n, rank: rank / n, total: total / n, lambda, report })
    }
}

/// Result of [`fit`]. The model passed in holds the best weights on return.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub log: Vec<EpochLog>,
    /// 1-based epoch whose weights were restored; `None` if no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Trains for up to `max_epochs`, validating after each epoch and stopping
/// after `patience` epochs without strict improvement of the validation
/// total loss. `on_epoch` sees every log record and the current weights.
pub fn fit(
    model: &RankVqaModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, &RankVqaModel) -> Result<()>,
) -> Result<FitOutcome> {
    let train_ids: HashSet<&str> = train.samples.iter().map(|s| s.id.as_str()).collect();
    if val.samples.iter().any(|s| train_ids.contains(s.id.as_str())) {
        return contract_err("training and validation splits share samples");
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let tr = trainer.run_epoch(train, epoch, Phase::Train)?;
        let va = trainer.run_epoch(val, epoch, Phase::Validate)?;
        let report = va.report.expect("validation produces a report");
        let record = EpochLog {
            epoch: epoch + 1,
            train_cls: tr.cls,
            train_rank: tr.rank,
            train_total: tr.total,
            val_cls: va.cls,
            val_rank: va.rank,
            val_total: va.total,
            val_accuracy: report.accuracy,
            val_mrr: report.mrr,
            lambda: tr.lambda,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record, model)?;
        let stop = stopper.observe(epoch + 1, va.total, || model.snapshot());
        log.push(record);
        if stop {
            stopped_early = true;
            break;
        }
    }
    let best_epoch = stopper.best_epoch();
    let best_val_loss = stopper.best_loss();
    if let Some(best) = stopper.into_best() {
        model.restore(&best)?;
    }
    Ok(FitOutcome { log, best_epoch, best_val_loss, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crafted_losses_stop_after_patience() {
        let losses = [1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.5];
        let mut s = EarlyStopper::new(5);
        let mut stopped_at = None;
        for (i, &l) in losses.iter().enumerate() {
            if s.observe(i + 1, l, || i + 1) {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(7));
        assert_eq!(s.best_epoch(), Some(2));
        assert_eq!(s.into_best(), Some(2));
    }

    #[test]
    fn never_stops_early_while_improving() {
        let mut s = EarlyStopper::new(1);
        for e in 1..20 {
            assert!(!s.observe(e, 1.0 / e as f64, || ()));
        }
        assert!(s.observe(20, 1.0, || ()));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let p = Tensor::param(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        p.scale(0.0).sum().backward().unwrap();
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut st = AdamState::new(std::slice::from_ref(&p));
        adam_step(std::slice::from_ref(&p), &mut st, &cfg).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, -1.0, 2.0]);
        assert!(p.grad().is_none());
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        for g in [1e-3, 0.7, -25.0] {
            let p = Tensor::param(vec![1], vec![1.0]).unwrap();
            p.scale(g).sum().backward().unwrap();
            let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
            let mut st = AdamState::new(std::slice::from_ref(&p));
            adam_step(std::slice::from_ref(&p), &mut st, &cfg).unwrap();
            let delta = (p.to_vec()[0] - 1.0).abs();
            assert!((delta - 0.001).abs() < 1e-7, "g={g}: |Δθ|={delta}");
        }
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let p = Tensor::param(vec![1], vec![1.0]).unwrap();
        let mut st = AdamState::new(std::slice::from_ref(&p));
        let r = adam_step(std::slice::from_ref(&p), &mut st, &TrainConfig::default());
        assert!(matches!(r, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { beta1: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
