use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::ValueEnum;
use rankvqa::data::{generate_synthetic, split, Sample};
use rankvqa::experiments::{run_ablation, run_gradcheck};
use rankvqa::metrics::evaluate;
use rankvqa::{fit, Dataset, ModelConfig, RankVqaModel, Rng, SeedPlan};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::{Command, Shared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    All,
    Train,
    Val,
    Test,
}

pub fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Generate { sigma, n_samples, shared } => {
            let mut o = overrides(&shared)?;
            push(&mut o, "data.noise_sigma", sigma);
            push(&mut o, "data.n_samples", n_samples);
            generate(&resolve(&shared, o)?)
        }
        Command::Train { max_epochs, lambda_rank, margin, learning_rate, batch_size, shared } => {
            let mut o = overrides(&shared)?;
            push(&mut o, "train.max_epochs", max_epochs);
            push(&mut o, "hybrid.lambda_rank", lambda_rank);
            push(&mut o, "ranking.margin_alpha", margin);
            push(&mut o, "train.learning_rate", learning_rate);
            push(&mut o, "train.batch_size", batch_size);
            train(resolve(&shared, o)?)
        }
        Command::Eval { checkpoint, split, shared } => {
            let mut o = overrides(&shared)?;
            push(&mut o, "paths.checkpoint", Some(&checkpoint));
            eval(&resolve(&shared, o)?, split)
        }
        Command::Gradcheck { seeds, shared } => {
            let mut o = overrides(&shared)?;
            if let Some(n) = seeds {
                let base = shared.seed.unwrap_or(0);
                push(&mut o, "gradcheck.seeds", Some((base..base + n).collect::<Vec<_>>()));
            }
            gradcheck(&resolve(&shared, o)?)
        }
        Command::Ablate { variants, seeds, max_epochs, shared } => {
            let mut o = overrides(&shared)?;
            push(&mut o, "ablation.variants", variants);
            push(&mut o, "ablation.seeds", seeds);
            push(&mut o, "train.max_epochs", max_epochs);
            ablate(resolve(&shared, o)?)
        }
    }
}

fn push<T: serde::Serialize>(o: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        o.push((key.to_string(), serde_json::to_value(v).expect("flag value serializes")));
    }
}

/// Shared flags as flat overrides; `--set` comes first so named flags win.
fn overrides(s: &Shared) -> Result<Vec<(String, Value)>> {
    let mut o = Vec::new();
    for kv in &s.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        o.push((k.to_string(), value));
    }
    push(&mut o, "seed", s.seed);
    push(&mut o, "paths.out", s.out.as_ref());
    push(&mut o, "paths.dataset", s.dataset.as_ref());
    Ok(o)
}

fn resolve(s: &Shared, o: Vec<(String, Value)>) -> Result<RunConfig> {
    RunConfig::resolve(s.config.as_deref(), &o)
}

fn echo(cfg: &RunConfig) {
    eprintln!("resolved config: {}", serde_json::to_string_pretty(&cfg.to_flat()).expect("json"));
}

fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.paths.dataset {
        Some(p) => Dataset::load(p).with_context(|| format!("loading dataset {}", p.display())),
        None => Ok(generate_synthetic(&cfg.synthetic_spec())?),
    }
}

/// Model widths always follow the dataset.
fn fit_widths(cfg: &mut RunConfig, d: &Dataset) {
    let m: &mut ModelConfig = &mut cfg.model;
    m.d_visual = d.meta.d_visual;
    m.d_text = d.meta.d_text;
    m.regions = d.meta.regions;
    m.n_answers = d.meta.n_answers;
}

fn out_dir(cfg: &RunConfig, default: &str) -> Result<PathBuf> {
    let dir = cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn generate(cfg: &RunConfig) -> Result<bool> {
    echo(cfg);
    let d = generate_synthetic(&cfg.synthetic_spec())?;
    let path = cfg.paths.out.clone().unwrap_or_else(|| PathBuf::from("synthetic.jsonl"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    d.save(&path).with_context(|| format!("writing {}", path.display()))?;
    let mut counts = vec![0usize; d.meta.n_answers];
    d.samples.iter().for_each(|s| counts[s.answer] += 1);
    let summary = json!({
        "path": path,
        "samples": d.len(),
        "d_visual": d.meta.d_visual,
        "d_text": d.meta.d_text,
        "regions": d.meta.regions,
        "n_answers": d.meta.n_answers,
        "answer_counts": counts,
    });
    println!("{summary}");
    Ok(true)
}

fn train(mut cfg: RunConfig) -> Result<bool> {
    let data = load_or_generate(&cfg)?;
    fit_widths(&mut cfg, &data);
    echo(&cfg);
    let dir = out_dir(&cfg, "run")?;
    write_json(&dir.join("config.json"), &cfg.to_flat())?;
    let (tr, va, te) = split(&data, cfg.split_fractions(), SeedPlan(cfg.seed).shuffle())?;
    let model = RankVqaModel::new(cfg.model.clone(), &mut Rng::new(SeedPlan(cfg.seed).init()))?;
    eprintln!("{} | train {} val {} test {}", model.summary(), tr.len(), va.len(), te.len());

    let mut log = fs::File::create(dir.join("log.jsonl"))?;
    let outcome = fit(&model, &tr, &va, &cfg.train_config(), &mut |rec, m| {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
        m.save(dir.join(format!("epoch_{}.ckpt", rec.epoch)))?;
        eprintln!(
            "epoch {:>3}  train {:.4} (cls {:.4} rank {:.4})  val {:.4}  acc {:.4}  mrr {:.4}  {:.1}s",
            rec.epoch, rec.train_total, rec.train_cls, rec.train_rank, rec.val_total, rec.val_accuracy, rec.val_mrr, rec.wall_time_s
        );
        Ok(())
    })?;
    model.save(dir.join("best.ckpt"))?;

    let score = |d: &Dataset| -> Result<Value> {
        let refs: Vec<&Sample> = d.samples.iter().collect();
        let targets: Vec<usize> = d.samples.iter().map(|s| s.answer).collect();
        let r = evaluate(&model.scores(&refs)?, &targets)?;
        Ok(json!({"accuracy": r.accuracy, "mrr": r.mrr, "n": r.n}))
    };
    let summary = json!({
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.log.len(),
        "stopped_early": outcome.stopped_early,
        "best_val_loss": outcome.best_val_loss,
        "val": score(&va)?,
        "test": score(&te)?,
        "out": dir,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{summary}");
    Ok(true)
}

fn eval(cfg: &RunConfig, part: Part) -> Result<bool> {
    echo(cfg);
    let ckpt = cfg.paths.checkpoint.as_ref().expect("eval always sets the checkpoint");
    let model = RankVqaModel::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let data = load_or_generate(cfg)?;
    let (m, meta) = (model.config(), &data.meta);
    if (m.d_visual, m.d_text, m.n_answers) != (meta.d_visual, meta.d_text, meta.n_answers) {
        bail!(
            "checkpoint expects d_visual={} d_text={} answers={}, dataset has d_visual={} d_text={} answers={}",
            m.d_visual, m.d_text, m.n_answers, meta.d_visual, meta.d_text, meta.n_answers
        );
    }
    let selected = match part {
        Part::All => data,
        other => {
            let (tr, va, te) = split(&data, cfg.split_fractions(), SeedPlan(cfg.seed).shuffle())?;
            match other {
                Part::Train => tr,
                Part::Val => va,
                _ => te,
            }
        }
    };
    let refs: Vec<&Sample> = selected.samples.iter().collect();
    let targets: Vec<usize> = selected.samples.iter().map(|s| s.answer).collect();
    let mut report = evaluate(&model.scores(&refs)?, &targets)?;
    report.config = json!({
        "checkpoint": ckpt,
        "dataset": cfg.paths.dataset,
        "split": format!("{part:?}").to_lowercase(),
        "seed": cfg.seed,
        "model": model.config(),
    });
    println!("{}", serde_json::to_string(&report)?);
    Ok(true)
}

fn gradcheck(cfg: &RunConfig) -> Result<bool> {
    echo(cfg);
    let configs: Vec<ModelConfig> = cfg
        .gradcheck
        .fusion_modes
        .iter()
        .map(|&fusion_mode| ModelConfig { fusion_mode, ..ModelConfig::tiny() })
        .collect();
    let report = run_gradcheck(&configs, &cfg.gradcheck.seeds, &cfg.gradcheck_options())?;
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = &cfg.paths.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
        fs::write(dir.join("gradcheck.txt"), &table)?;
    }
    Ok(report.passed)
}

fn ablate(mut cfg: RunConfig) -> Result<bool> {
    let data = load_or_generate(&cfg)?;
    fit_widths(&mut cfg, &data);
    echo(&cfg);
    let dir = out_dir(&cfg, "ablation")?;
    write_json(&dir.join("config.json"), &cfg.to_flat())?;
    let report = run_ablation(&data, &cfg.ablation_settings(), &cfg.ablation.variants, &cfg.ablation.seeds)?;
    let table = report.to_table();
    print!("{table}");
    write_json(&dir.join("ablation.json"), &report)?;
    fs::write(dir.join("ablation.txt"), &table)?;
    Ok(report.all_verdicts_hold())
}
