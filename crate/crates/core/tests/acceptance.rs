//! One check per acceptance criterion, run at the stated tolerances. Prints a
//! PASS/FAIL line for each and exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rankvqa::data::{generate_synthetic, split, Sample};
use rankvqa::experiments::{run_ablation, run_gradcheck, AblationSettings, GradcheckOptions};
use rankvqa::loss::{cross_entropy, hybrid_loss, ranking_loss, HybridConfig, Negatives, RankingConfig};
use rankvqa::metrics::{evaluate, rank_of_correct};
use rankvqa::nn::{attention_weights, Mode, MultiHeadAttention, Pass};
use rankvqa::train::{fit, EarlyStopper, Phase, Trainer};
use rankvqa::{
    AblationVariant, Dataset, FusionMode, ModelConfig, RankVqaModel, Rng, SeedPlan, SyntheticSpec, Tensor,
    TrainConfig,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_s: u64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s as f64, format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn reference_data() -> (Dataset, Dataset, Dataset) {
    let spec = SyntheticSpec { seed: SeedPlan(0).data(), ..SyntheticSpec::default() };
    let d = generate_synthetic(&spec).unwrap();
    split(&d, [0.8, 0.1, 0.1], SeedPlan(0).shuffle()).unwrap()
}

fn test_metrics(model: &RankVqaModel, d: &Dataset) -> (f64, f64) {
    let refs: Vec<&Sample> = d.samples.iter().collect();
    let targets: Vec<usize> = d.samples.iter().map(|s| s.answer).collect();
    let r = evaluate(&model.scores(&refs).unwrap(), &targets).unwrap();
    (r.accuracy, r.mrr)
}

fn c1_gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let seeds: Vec<u64> = (0..20).collect();
    let r = run_gradcheck(&[ModelConfig::tiny()], &seeds, &GradcheckOptions::default()).map_err(|e| e.to_string())?;
    within(start.elapsed(), 60)?;
    let worst = r.worst();
    ensure(r.passed && worst <= 1e-4, format!("worst relative error {worst:e}"))?;
    Ok(format!("20 seeds x {} layers, worst relative error {worst:.2e} <= 1e-4 in {:.1}s", r.layers.len() / 20, start.elapsed().as_secs_f64()))
}

fn c2_formula_oracles() -> Outcome {
    let row = |v: Vec<f64>| Tensor::new(vec![1, v.len()], v).unwrap();
    let hand = RankingConfig { margin_alpha: 0.5, negatives: Negatives::All };
    let l = ranking_loss(&row(vec![2.0, 1.0, 1.9, 2.2]), &[0], &hand, &mut Rng::new(0)).unwrap().item();
    ensure(l == 1.1, format!("ranking hand case gave {l}"))?;

    let scores = vec![vec![3.0, 1.0, 0.0, -1.0], vec![1.0, 3.0, 0.0, -1.0], vec![1.0, 2.0, 3.0, 0.0]];
    let r = evaluate(&scores, &[0, 0, 3]).unwrap();
    ensure(r.ranks == vec![1, 2, 4], format!("ranks {:?}", r.ranks))?;
    ensure(r.mrr == 7.0 / 12.0, format!("mrr {}", r.mrr))?;

    let ce = cross_entropy(&row(vec![0.0, 0.0]), &[0]).unwrap().item();
    ensure((ce - std::f64::consts::LN_2).abs() <= 1e-12, format!("cross entropy {ce}"))?;

    let mut rng = Rng::new(5);
    for lambda in [0.0, 0.3, 1.0, 2.5] {
        let logits = Tensor::new(vec![4, 6], (0..24).map(|_| rng.normal()).collect()).unwrap();
        let h = HybridConfig { lambda_rank: lambda, ..HybridConfig::default() };
        let (_, b) = hybrid_loss(&logits, &[0, 5, 2, 2], &RankingConfig::default(), &h, 0, &mut rng).unwrap();
        ensure(b.total == b.cls + b.lambda_used * b.rank, format!("total {} != cls + λ·rank", b.total))?;
    }
    Ok("rank hand case = 1.1, MRR([1,2,4]) = 7/12, CE([0,0],0) = ln 2, total = cls + λ·rank exactly".into())
}

fn c3_attention_invariants() -> Outcome {
    let mut rng = Rng::new(13);
    let mut worst_row: f64 = 0.0;
    for _ in 0..20 {
        let q = Tensor::new(vec![4, 8], (0..32).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        let k = Tensor::new(vec![6, 8], (0..48).map(|_| 2.0 * rng.normal()).collect()).unwrap();
        for row in attention_weights(&q, &k).unwrap().data().chunks(6) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let mha = MultiHeadAttention::new("m", 8, 4, &mut rng).unwrap();
        let x = Tensor::new(vec![8, 8], (0..64).map(|_| rng.normal()).collect()).unwrap();
        for head in mha.head_weights(&x, 4).unwrap().into_iter().flatten() {
            for row in head.data().chunks(4) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let one = Tensor::new(vec![1, 8], (0..8).map(|_| rng.normal()).collect()).unwrap();
        let mut r = Rng::new(0);
        let pass = Pass::new(Mode::Eval, &mut r);
        let y = mha.forward(&one, 1, &pass).unwrap().to_vec();
        let direct = mha.w_o.forward(&mha.w_v.forward(&one, &pass).unwrap(), &pass).unwrap().to_vec();
        ensure(y == direct, "length-1 attention differs from w_o(w_v(x))")?;
    }
    ensure(worst_row <= 1e-12, format!("attention row sum off by {worst_row:e}"))?;

    let literal = ModelConfig { fusion_mode: FusionMode::PaperLiteral, ..ModelConfig::tiny() };
    let r = run_gradcheck(&[literal], &[0, 1, 2], &GradcheckOptions::default()).map_err(|e| e.to_string())?;
    for l in &r.layers {
        let qk = l.layer == "fusion.w_q" || l.layer == "fusion.w_k";
        ensure(!qk || l.max_abs_analytic == 0.0, format!("{} gradient {:e} in paper_literal mode", l.layer, l.max_abs_analytic))?;
    }

    let cfg = ModelConfig { regions: 5, ..ModelConfig::default() };
    let model = RankVqaModel::new(cfg.clone(), &mut rng).unwrap();
    let mut worst_perm: f64 = 0.0;
    for i in 0..20 {
        let s = Sample {
            id: i.to_string(),
            visual: (0..5).map(|_| (0..cfg.d_visual).map(|_| rng.normal()).collect()).collect(),
            text: (0..cfg.d_text).map(|_| rng.normal()).collect(),
            answer: 0,
        };
        let mut p = s.clone();
        rng.shuffle(&mut p.visual);
        let (a, b) = (model.scores(&[&s]).unwrap(), model.scores(&[&p]).unwrap());
        worst_perm = a[0].iter().zip(&b[0]).fold(worst_perm, |m, (x, y)| m.max((x - y).abs()));
    }
    ensure(worst_perm <= 1e-9, format!("region permutation changed scores by {worst_perm:e}"))?;
    Ok(format!(
        "row sums within {worst_row:.1e}, L=1 equals w_o∘w_v exactly, paper_literal w_q/w_k gradients 0, permutation drift {worst_perm:.1e}"
    ))
}

fn c4_rank_semantics() -> Outcome {
    let mut rng = Rng::new(99);
    let mut ties = 0;
    for _ in 0..1000 {
        let n = 2 + rng.below(10);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(5) as f64 * 0.5).collect();
        let t = rng.below(n);
        let brute = 1 + (0..n)
            .filter(|&j| j != t && (scores[j] > scores[t] || (scores[j] == scores[t] && j < t)))
            .count();
        if (0..n).any(|j| j != t && scores[j] == scores[t]) {
            ties += 1;
        }
        ensure(rank_of_correct(&scores, t) == brute, format!("{scores:?} target {t}"))?;
    }
    Ok(format!("1000 score vectors ({ties} with ties) agree with the pairwise oracle"))
}

fn c5_training_mechanics() -> Outcome {
    let start = Instant::now();
    let losses = [1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9];
    let mut stopper = EarlyStopper::new(5);
    let stopped = losses.iter().enumerate().position(|(i, &l)| stopper.observe(i + 1, l, || i + 1)).map(|i| i + 1);
    ensure(stopped == Some(7), format!("stopped at {stopped:?}"))?;
    ensure(stopper.best_epoch() == Some(2), "best epoch is not 2")?;

    let spec = SyntheticSpec { n_samples: 600, seed: SeedPlan(1).data(), ..SyntheticSpec::default() };
    let d = generate_synthetic(&spec).unwrap();
    let (tr, va, _) = split(&d, [0.8, 0.1, 0.1], SeedPlan(1).shuffle()).unwrap();
    let cfg = TrainConfig { max_epochs: 3, seed: 1, ..TrainConfig::default() };

    let model = RankVqaModel::new(ModelConfig::default(), &mut Rng::new(SeedPlan(1).init())).unwrap();
    let mut trainer = Trainer::new(&model, cfg.clone()).unwrap();
    let before = model.checksum();
    trainer.run_epoch(&va, 0, Phase::Validate).unwrap();
    ensure(model.checksum() == before, "validation changed the parameters")?;

    let run = || {
        let m = RankVqaModel::new(ModelConfig::default(), &mut Rng::new(SeedPlan(1).init())).unwrap();
        let out = fit(&m, &tr, &va, &cfg, &mut |_, _| Ok(())).unwrap();
        (out.log.iter().map(|l| l.deterministic_bits()).collect::<Vec<_>>(), m.checksum())
    };
    let (a, b) = (run(), run());
    ensure(a == b, "two seeded runs produced different logs")?;
    within(start.elapsed(), 60)?;
    Ok(format!("stop after epoch 7 keeping epoch 2, validation checksum unchanged, identical logs ({:.1}s)", start.elapsed().as_secs_f64()))
}

fn c6_end_to_end() -> Outcome {
    let start = Instant::now();
    let (tr, va, te) = reference_data();
    let model = RankVqaModel::new(ModelConfig::default(), &mut Rng::new(SeedPlan(0).init())).unwrap();
    let cfg = TrainConfig { seed: 0, ..TrainConfig::default() };
    let out = fit(&model, &tr, &va, &cfg, &mut |_, _| Ok(())).map_err(|e| e.to_string())?;
    let (acc, mrr) = test_metrics(&model, &te);
    within(start.elapsed(), 300)?;
    ensure(acc >= 0.95 && mrr >= 0.97, format!("test accuracy {acc:.4}, MRR {mrr:.4}"))?;
    Ok(format!(
        "test accuracy {acc:.4} >= 0.95, MRR {mrr:.4} >= 0.97 (best epoch {:?} of {}, {:.1}s)",
        out.best_epoch,
        out.log.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn c7_ablation_ordering() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec { seed: SeedPlan(0).data(), ..SyntheticSpec::default() };
    let d = generate_synthetic(&spec).unwrap();
    let report = run_ablation(&d, &AblationSettings::default(), &AblationVariant::ALL, &[0, 1, 2, 3, 4])
        .map_err(|e| e.to_string())?;
    for line in report.to_table().lines() {
        eprintln!("    {line}");
    }
    within(start.elapsed(), 1800)?;
    let gap = report.full_minus_baseline.unwrap();
    let failed: Vec<String> =
        report.verdicts.iter().filter(|v| !v.holds).map(|v| format!("{} >= {}", v.left, v.right)).collect();
    ensure(failed.is_empty(), format!("ordering violated: {}", failed.join(", ")))?;
    ensure(gap >= 0.03, format!("full - baseline = {gap:.4} < 0.03"))?;
    Ok(format!("all orderings hold over 5 seeds, full - baseline = {gap:.4} ({:.0}s)", start.elapsed().as_secs_f64()))
}

fn c8_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (tr, _, te) = reference_data();
    let model = RankVqaModel::new(ModelConfig::default(), &mut Rng::new(3)).unwrap();
    let path = dir.path().join("m.ckpt");
    model.save(&path).map_err(|e| e.to_string())?;
    let back = RankVqaModel::load(&path).map_err(|e| e.to_string())?;
    let bits = |m: &RankVqaModel| -> Vec<u64> { m.snapshot().iter().flatten().map(|v| v.to_bits()).collect() };
    ensure(bits(&model) == bits(&back), "parameters changed through a checkpoint")?;
    let refs: Vec<&Sample> = te.samples.iter().collect();
    let (a, b) = (model.scores(&refs).unwrap(), back.scores(&refs).unwrap());
    let drift = a.iter().flatten().zip(b.iter().flatten()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    ensure(drift <= 1e-12, format!("reloaded logits drift {drift:e}"))?;

    let dpath = dir.path().join("train.jsonl");
    tr.save(&dpath).map_err(|e| e.to_string())?;
    let loaded = Dataset::load(&dpath).map_err(|e| e.to_string())?;
    let fbits = |d: &Dataset| -> Vec<u64> {
        d.samples.iter().flat_map(|s| s.visual.iter().flatten().chain(&s.text)).map(|v| v.to_bits()).collect()
    };
    ensure(loaded == tr && fbits(&loaded) == fbits(&tr), "dataset changed through save/load")?;
    Ok(format!("{} parameters and {} samples round-trip bitwise, logit drift {drift:.1e}", bits(&model).len(), tr.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient fidelity", c1_gradient_fidelity),
        ("2 formula oracles", c2_formula_oracles),
        ("3 attention invariants", c3_attention_invariants),
        ("4 rank semantics", c4_rank_semantics),
        ("5 training mechanics", c5_training_mechanics),
        ("6 end-to-end learning", c6_end_to_end),
        ("7 ablation ordering", c7_ablation_ordering),
        ("8 persistence", c8_persistence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {failures} failed");
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
