//! Ablation harness and gradient-check runner.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset, Sample};
use crate::error::{config_err, contract_err, Error, Result};
use crate::finite_diff::{finite_diff_in_place, relative_error};
use crate::loss::{hybrid_loss, HybridConfig, RankingConfig};
use crate::metrics::evaluate;
use crate::model::{FusionMode, ModelConfig, RankVqaModel};
use crate::nn::{Mode, Pass};
use crate::rng::{Rng, SeedPlan};
use crate::tensor::Tensor;
use crate::train::{fit, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoRanking,
    NoFusion,
    SingleHead,
    Baseline,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::SingleHead,
        AblationVariant::NoFusion,
        AblationVariant::NoRanking,
        AblationVariant::Baseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoRanking => "no_ranking",
            AblationVariant::NoFusion => "no_fusion",
            AblationVariant::SingleHead => "single_head",
            AblationVariant::Baseline => "baseline",
        }
    }

    /// The variant's model and training configuration derived from the full one.
    pub fn apply(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let (mut m, mut t) = (model.clone(), train.clone());
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoRanking => t.hybrid.lambda_rank = 0.0,
            AblationVariant::NoFusion => m.fusion_mode = FusionMode::Concat,
            AblationVariant::SingleHead => m.heads = 1,
            AblationVariant::Baseline => {
                m.fusion_mode = FusionMode::Concat;
                t.hybrid.lambda_rank = 0.0;
            }
        }
        (m, t)
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected one of full, no_ranking, no_fusion, single_head, baseline)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split_fractions: [f64; 3],
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self { model: ModelConfig::default(), train: TrainConfig::default(), split_fractions: [0.8, 0.1, 0.1] }
    }
}

/// Outcome of one (variant, seed) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: AblationVariant,
    pub seed: u64,
    pub split_checksum: u64,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
    pub val_accuracy: f64,
    pub val_mrr: f64,
    pub test_accuracy: f64,
    pub test_mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: AblationVariant,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub mrr_mean: f64,
    pub mrr_std: f64,
    pub val_accuracy_mean: f64,
    pub val_mrr_mean: f64,
}

/// `left` mean test accuracy ≥ `right` mean test accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub left: AblationVariant,
    pub right: AblationVariant,
    pub left_mean: f64,
    pub right_mean: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub interpretation: String,
    pub seeds: Vec<u64>,
    pub settings: AblationSettings,
    pub dataset_checksum: u64,
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<VariantSummary>,
    pub verdicts: Vec<Verdict>,
    /// Mean test accuracy of `full` minus that of `baseline`, when both ran.
    pub full_minus_baseline: Option<f64>,
}

impl AblationReport {
    pub fn all_verdicts_hold(&self) -> bool {
        self.verdicts.iter().all(|v| v.holds)
    }

    pub fn summary(&self, v: AblationVariant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == v)
    }

    /// Aligned plain-text table: one row per variant, then the verdicts.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.interpretation);
        let _ = writeln!(out, "seeds: {:?}", self.seeds);
        let _ = writeln!(out, "{:<12}  {:>17}  {:>17}", "variant", "accuracy", "mrr");
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{:<12}  {:>8.4} ± {:<6.4}  {:>8.4} ± {:<6.4}",
                s.variant.name(),
                s.accuracy_mean,
                s.accuracy_std,
                s.mrr_mean,
                s.mrr_std
            );
        }
        for v in &self.verdicts {
            let _ = writeln!(
                out,
                "{} {} >= {} ({:.4} vs {:.4})",
                if v.holds { "ok  " } else { "FAIL" },
                v.left,
                v.right,
                v.left_mean,
                v.right_mean
            );
        }
        if let Some(gap) = self.full_minus_baseline {
            let _ = writeln!(out, "full - baseline = {gap:.4}");
        }
        out
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn split_checksum(parts: [&Dataset; 3]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for p in parts {
        p.id_checksum().hash(&mut h);
    }
    h.finish()
}

fn eval_split(model: &RankVqaModel, d: &Dataset) -> Result<(f64, f64)> {
    let refs: Vec<&Sample> = d.samples.iter().collect();
    let scores = model.scores(&refs)?;
    let targets: Vec<usize> = d.samples.iter().map(|s| s.answer).collect();
    let r = evaluate(&scores, &targets)?;
    Ok((r.accuracy, r.mrr))
}

fn run_one(
    variant: AblationVariant,
    seed: u64,
    parts: &(Dataset, Dataset, Dataset),
    settings: &AblationSettings,
) -> Result<RunRecord> {
    let (mcfg, mut tcfg) = variant.apply(&settings.model, &settings.train);
    tcfg.seed = seed;
    let model = RankVqaModel::new(mcfg, &mut Rng::new(SeedPlan(seed).init()))?;
    let (train, val, test) = parts;
    let outcome = fit(&model, train, val, &tcfg, &mut |_, _| Ok(()))?;
    let (val_accuracy, val_mrr) = eval_split(&model, val)?;
    let (test_accuracy, test_mrr) = eval_split(&model, test)?;
    Ok(RunRecord {
        variant,
        seed,
        split_checksum: split_checksum([train, val, test]),
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.log.len(),
        val_accuracy,
        val_mrr,
        test_accuracy,
        test_mrr,
    })
}

/// Trains every variant on every seed and compares mean test accuracy.
///
/// For a given seed all variants share the same split, the same initializer
/// seed and the same shuffling/dropout streams; only model and loss differ.
/// Runs execute in parallel, each deterministic, so the report does not
/// depend on scheduling.
pub fn run_ablation(
    dataset: &Dataset,
    settings: &AblationSettings,
    variants: &[AblationVariant],
    seeds: &[u64],
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return contract_err("ablation needs at least one variant and one seed");
    }
    let mut unique = variants.to_vec();
    unique.sort();
    unique.dedup();
    if unique.len() != variants.len() {
        return config_err("duplicate ablation variant");
    }
    for &v in variants {
        let (m, t) = v.apply(&settings.model, &settings.train);
        m.validate()?;
        t.validate()?;
    }
    let splits: Vec<(Dataset, Dataset, Dataset)> = seeds
        .iter()
        .map(|&s| split(dataset, settings.split_fractions, SeedPlan(s).shuffle()))
        .collect::<Result<_>>()?;
    let jobs: Vec<(AblationVariant, usize)> =
        variants.iter().flat_map(|&v| (0..seeds.len()).map(move |i| (v, i))).collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(v, i)| run_one(v, seeds[i], &splits[i], settings))
        .collect::<Result<_>>()?;

    let mut by_variant: BTreeMap<AblationVariant, Vec<&RunRecord>> = BTreeMap::new();
    for r in &runs {
        by_variant.entry(r.variant).or_default().push(r);
    }
    let summaries: Vec<VariantSummary> = variants
        .iter()
        .map(|v| {
            let rs = &by_variant[v];
            let pick = |f: fn(&RunRecord) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (accuracy_mean, accuracy_std) = mean_std(&pick(|r| r.test_accuracy));
            let (mrr_mean, mrr_std) = mean_std(&pick(|r| r.test_mrr));
            VariantSummary {
                variant: *v,
                runs: rs.len(),
                accuracy_mean,
                accuracy_std,
                mrr_mean,
                mrr_std,
                val_accuracy_mean: mean_std(&pick(|r| r.val_accuracy)).0,
                val_mrr_mean: mean_std(&pick(|r| r.val_mrr)).0,
            }
        })
        .collect();

    let acc = |v: AblationVariant| summaries.iter().find(|s| s.variant == v).map(|s| s.accuracy_mean);
    let verdict = |l: AblationVariant, r: AblationVariant| {
        let (lm, rm) = (acc(l)?, acc(r)?);
        Some(Verdict { left: l, right: r, left_mean: lm, right_mean: rm, holds: lm >= rm })
    };
    let mut verdicts = Vec::new();
    let middle =
        [AblationVariant::SingleHead, AblationVariant::NoFusion, AblationVariant::NoRanking];
    for m in middle {
        verdicts.extend(verdict(AblationVariant::Full, m));
    }
    for m in middle {
        verdicts.extend(verdict(m, AblationVariant::Baseline));
    }
    verdicts.extend(verdict(AblationVariant::Full, AblationVariant::Baseline));
    let full_minus_baseline = acc(AblationVariant::Full).zip(acc(AblationVariant::Baseline)).map(|(f, b)| f - b);

    Ok(AblationReport {
        interpretation: "single_head realizes \"basic attention\" as one-head attention; \
                         all variants share splits, seeds and epoch budget"
            .to_string(),
        seeds: seeds.to_vec(),
        settings: settings.clone(),
        dataset_checksum: dataset.id_checksum(),
        runs,
        summaries,
        verdicts,
        full_minus_baseline,
    })
}

/// Multiplies the backward pass of every parameter whose name starts with
/// `param_prefix` by `factor`, leaving the forward value untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    pub param_prefix: String,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOptions {
    pub tolerance: f64,
    pub step: f64,
    pub batch_size: usize,
    pub ranking: RankingConfig,
    pub hybrid: HybridConfig,
    pub fault: Option<Fault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            batch_size: 8,
            ranking: RankingConfig::default(),
            hybrid: HybridConfig::default(),
            fault: None,
        }
    }
}

/// Worst agreement between analytic and numeric gradients over one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub config_index: usize,
    pub seed: u64,
    /// Parameter name without its `.weight` / `.bias` suffix.
    pub layer: String,
    pub elements: usize,
    pub max_relative_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub layers: Vec<LayerCheck>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &LayerCheck> {
        self.layers.iter().filter(|l| !l.passed)
    }

    pub fn worst(&self) -> f64 {
        self.layers.iter().map(|l| l.max_relative_error).fold(0.0, f64::max)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "tolerance {:e}, step {:e}", self.tolerance, self.step);
        let _ = writeln!(out, "{:>3} {:>6}  {:<16} {:>6} {:>12}  status", "cfg", "seed", "layer", "n", "max_rel_err");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:>3} {:>6}  {:<16} {:>6} {:>12.3e}  {}",
                l.config_index,
                l.seed,
                l.layer,
                l.elements,
                l.max_relative_error,
                if l.passed { "ok" } else { "FAIL" }
            );
        }
        let _ = writeln!(out, "{}", if self.passed { "all layers passed" } else { "gradient check FAILED" });
        out
    }
}

fn layer_of(name: &str) -> &str {
    name.rsplit_once('.').map_or(name, |(l, _)| l)
}

/// Random inputs with the model's widths.
pub fn random_batch(config: &ModelConfig, n: usize, rng: &mut Rng) -> Vec<Sample> {
    (0..n)
        .map(|i| Sample {
            id: format!("gc-{i}"),
            visual: (0..config.regions)
                .map(|_| (0..config.d_visual).map(|_| rng.normal()).collect())
                .collect(),
            text: (0..config.d_text).map(|_| rng.normal()).collect(),
            answer: rng.below(config.n_answers),
        })
        .collect()
}

/// Zero biases put a ReLU exactly on its kink whenever dropout clears a
/// whole input row, where central differences are meaningless.
const BIAS_JITTER: f64 = 0.1;

fn check_one(index: usize, config: &ModelConfig, seed: u64, opts: &GradcheckOptions) -> Result<Vec<LayerCheck>> {
    let plan = SeedPlan(seed);
    let mut init = Rng::new(plan.init());
    let model = RankVqaModel::new(config.clone(), &mut init)?;
    for (name, p) in model.params() {
        if name.ends_with(".bias") {
            p.data_mut().iter_mut().for_each(|b| *b = BIAS_JITTER * init.normal());
        }
    }
    let samples = random_batch(config, opts.batch_size, &mut Rng::new(plan.data()));
    let batch: Vec<&Sample> = samples.iter().collect();
    let targets: Vec<usize> = samples.iter().map(|s| s.answer).collect();

    let fault = opts.fault.clone();
    let tap = move |name: &str, p: &Tensor| match &fault {
        Some(f) if name.starts_with(&f.param_prefix) => p.grad_scale(f.factor),
        _ => p.clone(),
    };
    let loss = |with_tap: bool| -> Result<Tensor> {
        let mut rng = Rng::new(plan.dropout());
        let mut pass = Pass::new(Mode::Train, &mut rng);
        if with_tap {
            pass.tap = Some(&tap);
        }
        let logits = model.forward_batch(&batch, &mut pass)?;
        let mut neg_rng = Rng::new(plan.validation());
        Ok(hybrid_loss(&logits, &targets, &opts.ranking, &opts.hybrid, 0, &mut neg_rng)?.0)
    };

    model.zero_grad();
    loss(true)?.backward()?;
    let mut by_layer: Vec<LayerCheck> = Vec::new();
    for (name, p) in model.params() {
        let analytic = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
        let numeric = finite_diff_in_place(&p, opts.step, || Ok(loss(false)?.item()))?;
        let err = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max);
        let max_a = analytic.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let max_n = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let layer = layer_of(&name).to_string();
        match by_layer.last_mut().filter(|l| l.layer == layer) {
            Some(l) => {
                l.elements += p.numel();
                l.max_relative_error = l.max_relative_error.max(err);
                l.max_abs_analytic = l.max_abs_analytic.max(max_a);
                l.max_abs_numeric = l.max_abs_numeric.max(max_n);
            }
            None => by_layer.push(LayerCheck {
                config_index: index,
                seed,
                layer,
                elements: p.numel(),
                max_relative_error: err,
                max_abs_analytic: max_a,
                max_abs_numeric: max_n,
                passed: true,
            }),
        }
    }
    model.zero_grad();
    for l in &mut by_layer {
        l.passed = l.max_relative_error <= opts.tolerance;
    }
    Ok(by_layer)
}

/// Compares analytic gradients of the full hybrid loss against central
/// differences for every parameter of every (config, seed) pair. Dropout is
/// active with a fixed mask so the loss is a deterministic function of the
/// weights. Biases are drawn from `N(0, 0.1²)` rather than left at zero.
pub fn run_gradcheck(configs: &[ModelConfig], seeds: &[u64], opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if configs.is_empty() || seeds.is_empty() {
        return contract_err("gradcheck needs at least one config and one seed");
    }
    if !(opts.tolerance > 0.0) || !(opts.step > 0.0) || opts.batch_size == 0 {
        return config_err("gradcheck tolerance, step and batch_size must be positive");
    }
    opts.ranking.validate()?;
    opts.hybrid.validate()?;
    let mut layers = Vec::new();
    for (i, c) in configs.iter().enumerate() {
        c.validate()?;
        for &s in seeds {
            layers.extend(check_one(i, c, s, opts)?);
        }
    }
    let passed = layers.iter().all(|l| l.passed);
    Ok(GradcheckReport { tolerance: opts.tolerance, step: opts.step, layers, passed })
}
