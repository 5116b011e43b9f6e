//! `debias` command line: pretrain a biased base model, fine-tune it with
//! classifier rewards, and evaluate checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::ddpo::{finetune, sample_terminals, RunLog};
use crate::denoiser::{load_checkpoint, save_checkpoint, DenoiserParams};
use crate::diffusion::{NoiseSchedule, Policy};
use crate::feedback::{
    classify_all, count_labels, ratio_q, reward_balance, reward_shift, write_classification_csv, ClassLabel,
    ClassifierOutput, Counts,
};
use crate::metrics::{chart_path, render_line_chart, render_scatter, write_runlog_csv, write_svg, PlotSpec, Series};
use crate::pretrain::{pretrain, sample_dataset, MixtureSpec};
use crate::rng::{self, Domain};

/// Environment variable consulted when `--out` is not given.
pub const OUT_ENV: &str = "DEBIAS_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "debias", version, about = "Fine-tune a toy diffusion model to correct attribute imbalance")]
pub struct Cli {
    /// Worker threads for rollout collection. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the biased base model on the imbalanced mixture.
    ///
    /// Writes dataset.csv, base.ckpt, pretrain_loss.csv, summary.json and the
    /// resolved config.json into the output directory.
    Pretrain {
        /// JSON run config. Missing keys take their defaults; see config.json
        /// in any output directory for the full resolved document.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (falls back to $DEBIAS_OUT_DIR, then the config's out_dir).
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint with the configured reward and trust region.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Sample a checkpoint, classify the samples and report ratios and rewards.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
        /// Config supplying the mixture, schedule and classifier threshold
        /// (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Classification summary of a batch of samples.
#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    #[serde(skip)]
    pub terminals: Vec<Vec<f64>>,
    #[serde(skip)]
    pub outputs: Vec<ClassifierOutput>,
    pub n: usize,
    pub count_a: usize,
    pub count_b: usize,
    pub count_none: usize,
    pub q: Option<f64>,
    pub mean_shift_reward_a: f64,
    pub mean_shift_reward_b: f64,
    pub mean_balance_reward: Option<f64>,
}

impl Evaluation {
    pub fn counts(&self) -> Counts {
        Counts {
            a: self.count_a,
            b: self.count_b,
            none: self.count_none,
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn evaluate_policy<P: Policy>(
    policy: &P,
    schedule: &NoiseSchedule,
    spec: &MixtureSpec,
    threshold: f64,
    n: usize,
    seed: u64,
) -> crate::Result<Evaluation> {
    let terminals = sample_terminals(policy, n, schedule, seed);
    let outputs = classify_all(&terminals, spec, threshold)?;
    let c = count_labels(&outputs);
    let balance = reward_balance(&outputs).ok().map(|(r, _)| mean(&r));
    Ok(Evaluation {
        n,
        count_a: c.a,
        count_b: c.b,
        count_none: c.none,
        q: ratio_q(&outputs),
        mean_shift_reward_a: mean(&reward_shift(&outputs, ClassLabel::A)?),
        mean_shift_reward_b: mean(&reward_shift(&outputs, ClassLabel::B)?),
        mean_balance_reward: balance,
        terminals,
        outputs,
    })
}

fn resolve_out(out: Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = out.unwrap_or_else(|| cfg.out_dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn fmt_q(q: Option<f64>) -> String {
    q.map_or_else(|| "undefined".to_string(), |q| format!("{q:.4}"))
}

fn check_shape(params: &DenoiserParams, cfg: &RunConfig, ckpt: &Path) -> anyhow::Result<()> {
    let want = cfg.net_shape()?;
    let got = params.shape();
    if got != want {
        bail!(
            "checkpoint {} has shape (d={}, H={}, E={}) but the config expects (d={}, H={}, E={})",
            ckpt.display(),
            got.dim,
            got.hidden,
            got.embed,
            want.dim,
            want.hidden,
            want.embed
        );
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    ensure!(cli.threads >= 1, "--threads must be at least 1");
    // A second call (tests running several commands in one process) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    match cli.command {
        Command::Pretrain { config, out } => cmd_pretrain(&config, out),
        Command::Finetune { config, ckpt, out } => cmd_finetune(&config, &ckpt, out),
        Command::Evaluate {
            ckpt,
            n,
            seed,
            out,
            config,
        } => cmd_evaluate(&ckpt, n, seed, out, config.as_deref()),
    }
}

#[derive(Serialize)]
struct PretrainSummary {
    final_loss: f64,
    first_decile_loss: f64,
    last_decile_loss: f64,
    dataset_fraction_a: f64,
    base: Evaluation,
}

pub fn cmd_pretrain(config: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let out = resolve_out(out, &cfg)?;
    cfg.write(&out.join("config.json"))?;

    let schedule = cfg.schedule.build()?;
    let data = sample_dataset(
        &cfg.mixture,
        cfg.pretrain.dataset_size,
        &mut rng::stream(cfg.seed, Domain::Dataset, 0, 0),
    );
    data.write_csv(&out.join("dataset.csv"))?;

    let outcome = pretrain(&data, &schedule, cfg.net_shape()?, &cfg.pretrain, cfg.seed)?;
    save_checkpoint(&outcome.params, &out.join("base.ckpt"))?;
    outcome.write_loss_csv(&out.join("pretrain_loss.csv"))?;

    let (first, last) = outcome.first_last_decile();
    let final_loss = outcome.losses.last().map_or(f64::NAN, |l| l.1);
    let base = evaluate_policy(
        &outcome.params,
        &schedule,
        &cfg.mixture,
        cfg.trainer.classifier_threshold,
        cfg.eval_samples,
        cfg.seed,
    )?;
    ensure!(final_loss.is_finite(), "final pretraining loss is not finite");
    ensure!(base.q.is_some(), "no base-model sample could be classified");
    println!("final loss: {final_loss:.6}");
    println!("loss first/last decile: {first:.6} / {last:.6}");
    println!(
        "base ratio q: {} (A={}, B={}, None={}, n={})",
        fmt_q(base.q),
        base.count_a,
        base.count_b,
        base.count_none,
        base.n
    );
    write_json(
        &PretrainSummary {
            final_loss,
            first_decile_loss: first,
            last_decile_loss: last,
            dataset_fraction_a: data.fraction_a(),
            base,
        },
        &out.join("summary.json"),
    )
}

fn scatter(eval: &Evaluation, title: &str, path: &Path) -> anyhow::Result<()> {
    let labels: Vec<ClassLabel> = eval.outputs.iter().map(|o| o.label).collect();
    write_svg(&render_scatter(&eval.terminals, &labels, title)?, path)?;
    Ok(())
}

fn charts(log: &RunLog, root: &Path, seed: u64) -> anyhow::Result<()> {
    let last = log.records.last().map_or(0, |r| r.step);
    let series = |name: &str, f: &dyn Fn(&crate::ddpo::StepRecord) -> Option<f64>| Series {
        name: name.to_string(),
        points: log
            .records
            .iter()
            .filter_map(|r| f(r).map(|v| (r.step as f64, v)))
            .collect(),
    };
    let plots = [
        ("reward", "Mean reward", series("mean reward", &|r| Some(r.mean_reward))),
        ("loss", "Surrogate loss", series("loss", &|r| Some(r.loss))),
        ("kl", "Mean per-step KL", series("mean KL", &|r| Some(r.mean_kl))),
        ("q", "Class-A ratio q", series("q", &|r| r.q)),
    ];
    for (kind, title, s) in plots {
        if s.points.is_empty() {
            continue;
        }
        let path = chart_path(root, seed, last, kind);
        let spec = PlotSpec {
            title: title.to_string(),
            x_label: "outer step".into(),
            y_label: kind.to_string(),
            series: vec![s],
            path: path.clone(),
        };
        write_svg(&render_line_chart(&spec)?, &path)?;
    }
    Ok(())
}

pub fn cmd_finetune(config: &Path, ckpt: &Path, out: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = RunConfig::load(config)?;
    let base = load_checkpoint(ckpt)?;
    check_shape(&base, &cfg, ckpt)?;
    let out = resolve_out(out, &cfg)?;
    cfg.write(&out.join("config.json"))?;

    let schedule = cfg.schedule.build()?;
    let tc = &cfg.trainer;
    let seed = tc.master_seed;
    let ckpt_dir = out.join("checkpoints");
    if tc.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    }

    let before = evaluate_policy(&base, &schedule, &cfg.mixture, tc.classifier_threshold, cfg.eval_samples, seed)?;
    scatter(&before, "Samples before fine-tuning", &chart_path(&out, seed, 0, "scatter"))?;

    let mut observer = |rec: &crate::ddpo::StepRecord, p: &DenoiserParams| -> crate::Result<()> {
        if tc.checkpoint_every > 0 && rec.step % tc.checkpoint_every == 0 {
            save_checkpoint(p, &ckpt_dir.join(format!("step_{}.ckpt", rec.step)))?;
        }
        Ok(())
    };
    let outcome = finetune(&base, &schedule, &cfg.mixture, tc, &mut observer)?;
    write_runlog_csv(&outcome.log, &out.join("runlog.csv"))?;
    save_checkpoint(&outcome.policy, &out.join("final.ckpt"))?;

    let Some(last) = outcome.log.records.last() else {
        println!("no outer steps run; checkpoint unchanged");
        return Ok(());
    };
    charts(&outcome.log, &out, seed)?;
    let after = evaluate_policy(
        &outcome.policy,
        &schedule,
        &cfg.mixture,
        tc.classifier_threshold,
        cfg.eval_samples,
        seed,
    )?;
    scatter(&after, "Samples after fine-tuning", &chart_path(&out, seed, last.step, "scatter"))?;
    write_json(&after, &out.join("final_evaluation.json"))?;

    let finite = outcome.log.records.iter().all(|r| {
        [r.mean_reward, r.loss, r.mean_kl, r.clip_or_rollback_frac, r.wall_ms]
            .iter()
            .chain(r.q.iter())
            .all(|v| v.is_finite())
    });
    ensure!(finite, "run log contains non-finite values");
    println!(
        "stopped after {} steps ({:?}); last batch q: {}, mean reward: {:.6}",
        outcome.log.len(),
        outcome.stop,
        fmt_q(last.q),
        last.mean_reward
    );
    println!(
        "final model over {} samples: q = {} (A={}, B={}, None={})",
        after.n,
        fmt_q(after.q),
        after.count_a,
        after.count_b,
        after.count_none
    );
    Ok(())
}

pub fn cmd_evaluate(
    ckpt: &Path,
    n: usize,
    seed: u64,
    out: Option<PathBuf>,
    config: Option<&Path>,
) -> anyhow::Result<()> {
    ensure!(n >= 1, "--n must be at least 1");
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let params = load_checkpoint(ckpt)?;
    if params.shape().dim != cfg.mixture.dim() {
        bail!(
            "checkpoint {} is {}-dimensional but the mixture is {}-dimensional",
            ckpt.display(),
            params.shape().dim,
            cfg.mixture.dim()
        );
    }
    let out = resolve_out(out, &cfg)?;
    let schedule = cfg.schedule.build()?;
    let eval = evaluate_policy(&params, &schedule, &cfg.mixture, cfg.trainer.classifier_threshold, n, seed)?;
    write_classification_csv(&out.join("classification.csv"), &eval.terminals, &eval.outputs)?;
    write_json(&eval, &out.join("evaluation.json"))?;
    println!("samples: {n}");
    println!("counts: A={} B={} None={}", eval.count_a, eval.count_b, eval.count_none);
    println!("q: {}", fmt_q(eval.q));
    println!("mean R_shift (U=A): {:.6}", eval.mean_shift_reward_a);
    println!("mean R_shift (U=B): {:.6}", eval.mean_shift_reward_b);
    match eval.mean_balance_reward {
        Some(r) => println!("mean R_balance: {r:.6}"),
        None => println!("mean R_balance: undefined (no sample classified)"),
    }
    Ok(())
}
