//! Classification, margin ranking and hybrid objectives.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which incorrect answers enter the ranking hinge for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Negatives {
    /// Every incorrect answer.
    All,
    /// `k` incorrect answers drawn without replacement per sample. Draws come
    /// from the `Rng` passed to [`ranking_loss`].
    Sampled { k: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankingConfig {
    pub margin_alpha: f64,
    pub negatives: Negatives,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self { margin_alpha: 0.2, negatives: Negatives::All }
    }
}

impl RankingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin_alpha >= 0.0) {
            return config_err(format!("margin must be >= 0, got {}", self.margin_alpha));
        }
        if self.negatives == (Negatives::Sampled { k: 0 }) {
            return config_err("sampled negatives need k >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant,
    /// λ grows linearly from 0 at epoch 0 to `lambda_rank` at `epochs`.
    LinearRamp { epochs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HybridConfig {
    pub lambda_rank: f64,
    pub schedule: LambdaSchedule,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self { lambda_rank: 1.0, schedule: LambdaSchedule::Constant }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rank >= 0.0) {
            return config_err(format!("lambda_rank must be >= 0, got {}", self.lambda_rank));
        }
        if self.schedule == (LambdaSchedule::LinearRamp { epochs: 0 }) {
            return config_err("linear ramp needs at least one epoch");
        }
        Ok(())
    }

    /// Ranking weight at a zero-based epoch index.
    pub fn lambda_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LambdaSchedule::Constant => self.lambda_rank,
            LambdaSchedule::LinearRamp { epochs } => {
                self.lambda_rank * (epoch.min(epochs) as f64 / epochs as f64)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub rank: f64,
    pub total: f64,
    pub lambda_used: f64,
}

fn check_targets(scores: &Tensor, targets: &[usize]) -> Result<(usize, usize)> {
    let (b, a) = scores.dims2("scores")?;
    if targets.len() != b {
        return contract_err(format!("{} targets for {b} score rows", targets.len()));
    }
    if let Some(t) = targets.iter().find(|&&t| t >= a) {
        return contract_err(format!("target {t} out of range for {a} answers"));
    }
    Ok((b, a))
}

/// Mean over the batch of `-log softmax(logits_b)[target_b]`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    check_targets(logits, targets)?;
    Ok(logits.log_softmax_rows()?.pick(targets)?.mean().scale(-1.0))
}

/// Per sample, `Σ_neg max(0, α - (s_pos - s_neg))` over the chosen negatives;
/// averaged over the batch.
pub fn ranking_loss(scores: &Tensor, targets: &[usize], cfg: &RankingConfig, rng: &mut Rng) -> Result<Tensor> {
    let (b, a) = check_targets(scores, targets)?;
    if a < 2 {
        return contract_err("ranking loss needs at least two candidate answers");
    }
    let mut mask = vec![0.0; b * a];
    for (row, &t) in mask.chunks_mut(a).zip(targets) {
        match cfg.negatives {
            Negatives::All => {
                row.fill(1.0);
                row[t] = 0.0;
            }
            Negatives::Sampled { k } => {
                let mut pool: Vec<usize> = (0..a).filter(|&j| j != t).collect();
                rng.shuffle(&mut pool);
                pool.iter().take(k).for_each(|&j| row[j] = 1.0);
            }
        }
    }
    let mask = Tensor::new(vec![b, a], mask)?;
    let gap = scores.pick(targets)?.broadcast_cols(a)?.sub(scores)?;
    let hinge = gap.scale(-1.0).add_scalar(cfg.margin_alpha).relu();
    Ok(hinge.mul(&mask)?.sum().scale(1.0 / b as f64))
}

/// `L_cls + λ·L_rank` with λ from the schedule at the zero-based `epoch`.
pub fn hybrid_loss(
    logits: &Tensor,
    targets: &[usize],
    rcfg: &RankingConfig,
    hcfg: &HybridConfig,
    epoch: usize,
    rng: &mut Rng,
) -> Result<(Tensor, LossBreakdown)> {
    let cls = cross_entropy(logits, targets)?;
    let rank = ranking_loss(logits, targets, rcfg, rng)?;
    let lambda = hcfg.lambda_at(epoch);
    let total = cls.add(&rank.scale(lambda))?;
    let breakdown = LossBreakdown {
        cls: cls.item(),
        rank: rank.item(),
        total: total.item(),
        lambda_used: lambda,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: Vec<f64>) -> Tensor {
        Tensor::new(vec![1, v.len()], v).unwrap()
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let l = cross_entropy(&row(vec![0.0, 0.0]), &[0]).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let l = cross_entropy(&row(vec![30.0, -30.0]), &[0]).unwrap().item();
        assert!(l < 1e-12);
        assert!(cross_entropy(&row(vec![0.0, 0.0]), &[2]).is_err());
    }

    #[test]
    fn ranking_hand_case() {
        let cfg = RankingConfig { margin_alpha: 0.5, negatives: Negatives::All };
        let l = ranking_loss(&row(vec![2.0, 1.0, 1.9, 2.2]), &[0], &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(l.item(), 1.1);
    }

    #[test]
    fn ranking_satisfied_margin_is_zero() {
        let cfg = RankingConfig { margin_alpha: 0.5, negatives: Negatives::All };
        let l = ranking_loss(&row(vec![0.4, 3.0, 2.5]), &[1], &cfg, &mut Rng::new(0)).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn ranking_needs_two_answers() {
        let cfg = RankingConfig::default();
        assert!(ranking_loss(&row(vec![1.0]), &[0], &cfg, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn sampled_negatives_use_k_terms() {
        // With α large every hinge is active, so the loss counts terms.
        let cfg = RankingConfig { margin_alpha: 100.0, negatives: Negatives::Sampled { k: 2 } };
        let l = ranking_loss(&row(vec![0.0; 6]), &[3], &cfg, &mut Rng::new(5)).unwrap();
        assert_eq!(l.item(), 200.0);
    }

    #[test]
    fn hybrid_arithmetic() {
        let logits = Tensor::new(vec![2, 3], vec![0.3, -0.1, 0.8, 1.2, 0.0, -0.4]).unwrap();
        let r = RankingConfig::default();
        let h0 = HybridConfig { lambda_rank: 0.0, ..HybridConfig::default() };
        let (_, b) = hybrid_loss(&logits, &[0, 2], &r, &h0, 0, &mut Rng::new(0)).unwrap();
        assert_eq!(b.total, b.cls);
        assert!(b.rank > 0.0);
        let h1 = HybridConfig::default();
        let (_, b) = hybrid_loss(&logits, &[0, 2], &r, &h1, 0, &mut Rng::new(0)).unwrap();
        assert_eq!(b.total, b.cls + b.lambda_used * b.rank);
    }

    #[test]
    fn ramp_schedule() {
        let h = HybridConfig { lambda_rank: 1.0, schedule: LambdaSchedule::LinearRamp { epochs: 10 } };
        assert_eq!(h.lambda_at(0), 0.0);
        assert_eq!(h.lambda_at(5), 0.5);
        assert_eq!(h.lambda_at(10), 1.0);
        assert_eq!(h.lambda_at(25), 1.0);
        let c = HybridConfig { lambda_rank: 0.7, schedule: LambdaSchedule::Constant };
        assert!((0..20).all(|e| c.lambda_at(e) == 0.7));
    }
}
