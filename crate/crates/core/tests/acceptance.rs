//! End-to-end acceptance suite. Run with
//! `cargo test --release --test acceptance`; prints one line per criterion
//! and exits nonzero if any criterion fails or overruns its time budget.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use debias_core::config::RunConfig;
use debias_core::ddpo::{
    collect_rollouts, finetune, sample_terminals, surrogate_clip, surrogate_loss, surrogate_rollback, OptimizerKind,
    RunLog, TrainerConfig, Variant,
};
use debias_core::denoiser::{backward, encode_checkpoint, init_params, DenoiserParams};
use debias_core::diffusion::{gaussian_log_prob, step_kl, NoiseSchedule};
use debias_core::feedback::{
    classify_all, ratio_q, reward_balance, reward_shift, ClassLabel, ClassifierOutput, RewardKind, DEFAULT_THRESHOLD,
};
use debias_core::metrics::runlog_to_csv;
use debias_core::pretrain::{mse_objective, pretrain, sample_dataset, MixtureSpec, PretrainConfig};
use debias_core::rng::{self, standard_normal, Domain};
use debias_core::Error;
use rand::Rng;

type Outcome = Result<String, String>;

struct Suite {
    failures: usize,
}

impl Suite {
    fn check(&mut self, id: usize, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = f();
        let took = start.elapsed();
        let (pass, detail) = match result {
            Ok(d) if took <= budget => (true, d),
            Ok(d) => (false, format!("{d}; over the {:.0} s budget", budget.as_secs_f64())),
            Err(d) => (false, d),
        };
        if !pass {
            self.failures += 1;
        }
        println!(
            "[{}] {id:>2}. {name}: {detail} ({:.2} s)",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn outputs(a: usize, b: usize, none: usize) -> Vec<ClassifierOutput> {
    let t = DEFAULT_THRESHOLD;
    let mut v = vec![ClassifierOutput::from_posterior(0.9, t); a];
    v.extend(vec![ClassifierOutput::from_posterior(0.1, t); b]);
    v.extend(vec![ClassifierOutput::from_posterior(0.5, t); none]);
    v
}

fn reward_units() -> Outcome {
    ensure(ratio_q(&outputs(8, 8, 0)) == Some(0.5), || "8 A / 8 B is not q = 0.5".into())?;
    ensure(ratio_q(&outputs(0, 16, 0)) == Some(0.0), || "0 A / 16 B is not q = 0".into())?;
    ensure(ratio_q(&outputs(3, 13, 4)) == Some(0.1875), || "3 A / 13 B / 4 None is not q = 0.1875".into())?;
    ensure(ratio_q(&outputs(0, 0, 5)).is_none(), || "all-None batch has a ratio".into())?;
    ensure(matches!(reward_balance(&outputs(0, 0, 5)), Err(Error::UndefinedRatio)), || {
        "all-None batch did not report an undefined ratio".into()
    })?;

    let (r, q) = reward_balance(&outputs(8, 8, 0)).map_err(err)?;
    ensure(q == 0.5 && r.iter().all(|v| *v == 0.0), || "balanced batch has nonzero rewards".into())?;
    let (r, q) = reward_balance(&outputs(4, 12, 0)).map_err(err)?;
    ensure(q == 0.25, || format!("4 A / 12 B gave q = {q}"))?;
    ensure(r[..4].iter().all(|v| *v == 0.25) && r[4..].iter().all(|v| *v == -0.25), || {
        format!("4 A / 12 B rewards {r:?}")
    })?;
    let (r, _) = reward_balance(&outputs(2, 14, 0)).map_err(err)?;
    let mean = r.iter().sum::<f64>() / r.len() as f64;
    ensure(mean == -0.28125, || format!("q = 0.125 mean reward {mean}"))?;
    let (r, _) = reward_balance(&outputs(3, 5, 2)).map_err(err)?;
    ensure(r[8..].iter().all(|v| *v == 0.0), || "None samples were rewarded".into())?;

    let t = DEFAULT_THRESHOLD;
    let shift = reward_shift(
        &[ClassifierOutput::from_posterior(1.0, t), ClassifierOutput::from_posterior(0.3, t)],
        ClassLabel::A,
    )
    .map_err(err)?;
    ensure(shift == [1.0, 0.3], || format!("shift rewards {shift:?}"))?;
    ensure(reward_shift(&outputs(1, 1, 0), ClassLabel::None).is_err(), || "U = None accepted".into())?;
    Ok("ratio, balance and shift examples exact".into())
}

fn total_reward_shape() -> Outcome {
    let mut worst = 0.0f64;
    let mut batches = 0;
    for n in 1..=32usize {
        let mut best = (f64::NEG_INFINITY, Vec::new());
        for f in 0..=n {
            let m = n - f;
            let (r, q) = reward_balance(&outputs(f, m, 0)).map_err(err)?;
            let total: f64 = r.iter().sum();
            ensure(total <= 0.0, || format!("f = {f}, m = {m}: total {total} > 0"))?;
            let closed = -(n as f64) * (2.0 * q - 1.0).abs() * (q - 0.5).abs();
            ensure((total - closed).abs() <= 1e-12, || format!("f = {f}, m = {m}: total {total} vs {closed}"))?;
            let mean = total / n as f64;
            let dev = (mean + 2.0 * (0.5 - q).powi(2)).abs();
            worst = worst.max(dev);
            ensure(dev <= 1e-12, || format!("f = {f}, m = {m}: mean {mean} vs {}", -2.0 * (0.5 - q).powi(2)))?;
            if total > best.0 {
                best = (total, vec![f]);
            } else if total == best.0 {
                best.1.push(f);
            }
            batches += 1;
        }
        if n % 2 == 0 {
            ensure(best.1 == [n / 2] && best.0 == 0.0, || format!("n = {n}: maxima at f = {:?}", best.1))?;
        } else {
            ensure(best.0 < 0.0, || format!("n = {n}: odd batch reached 0"))?;
        }
    }
    Ok(format!("{batches} compositions, unique maximum at q = 0.5, max mean deviation {worst:.1e}"))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error over `coords` central differences of `loss`.
fn fd_check(
    params: &DenoiserParams,
    analytic: &[f64],
    coords: &[usize],
    loss: &dyn Fn(&DenoiserParams) -> Result<f64, String>,
) -> Result<f64, String> {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &i in coords {
        let mut p = params.clone();
        p.as_mut_slice()[i] += h;
        let up = loss(&p)?;
        p.as_mut_slice()[i] -= 2.0 * h;
        let down = loss(&p)?;
        let numeric = (up - down) / (2.0 * h);
        let e = relative_error(analytic[i], numeric);
        ensure(e < 1e-4, || format!("coordinate {i}: analytic {} vs numeric {numeric}", analytic[i]))?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn gradient_checks() -> Outcome {
    let cfg = RunConfig::default();
    let sched = cfg.schedule.build().map_err(err)?;
    let shape = cfg.net_shape().map_err(err)?;
    let mut rng = rng::stream(0, Domain::Test, 3, 0);
    let params = init_params(&mut rng, shape);
    let n = params.as_slice().len();
    let coords: Vec<usize> = (0..100).map(|_| rng.random_range(0..n)).collect();

    let data = sample_dataset(&cfg.mixture, 16, &mut rng);
    let batch: Vec<_> = data
        .points
        .iter()
        .map(|x| (x.clone(), rng.random_range(1..=sched.steps()), standard_normal(&mut rng, 2)))
        .collect();
    let (_, tape) = mse_objective(&params, &batch, &sched).map_err(err)?;
    let grad = backward(&params, &tape).map_err(err)?;
    let mse = fd_check(&params, grad.as_slice(), &coords, &|p| {
        mse_objective(p, &batch, &sched).map(|(l, _)| l).map_err(err)
    })?;

    // rollouts from a nearby policy so ratios differ from 1 and both trust
    // regions are partly active
    let rollouts = collect_rollouts(&params, 6, &sched, 5, 0);
    let mut moved = params.clone();
    for v in moved.as_mut_slice() {
        *v += 0.02 * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    let advantages = [1.3, -0.4, 0.9, -1.7, 0.2, -0.3];
    let mut report = vec![format!("MSE worst {mse:.1e}")];
    for variant in [Variant::Clip, Variant::Rollback] {
        let tc = TrainerConfig {
            variant,
            clip_eps: 0.05,
            kl_delta: 1e-3,
            ..TrainerConfig::default()
        };
        let ev = surrogate_loss(&moved, &rollouts, &advantages, &sched, &tc).map_err(err)?;
        let worst = fd_check(&moved, &ev.grad, &coords, &|p| {
            surrogate_loss(p, &rollouts, &advantages, &sched, &tc).map(|e| e.loss).map_err(err)
        })?;
        report.push(format!(
            "{variant:?} worst {worst:.1e} ({:.0}% terms active)",
            100.0 * ev.active_frac
        ));
    }
    Ok(format!("100 coordinates each; {}", report.join(", ")))
}

fn kl_exactness() -> Outcome {
    let mut rng = rng::stream(0, Domain::Test, 4, 0);
    let samples = 1_000_000;
    let mut worst_z = 0.0f64;
    for pair in 0..20 {
        let d = rng.random_range(1..=3);
        let sigma = rng.random_range(0.05..2.0);
        let old: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let new: Vec<f64> = old.iter().map(|m| m + sigma * rng.random_range(-1.5..1.5)).collect();
        let exact = step_kl(&new, &old, sigma).map_err(err)?;
        let (mut sum, mut sq) = (0.0, 0.0);
        let mut x = vec![0.0; d];
        for _ in 0..samples {
            for (xi, m) in x.iter_mut().zip(&new) {
                *xi = m + sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            let v = gaussian_log_prob(&x, &new, sigma).map_err(err)? - gaussian_log_prob(&x, &old, sigma).map_err(err)?;
            sum += v;
            sq += v * v;
        }
        let n = samples as f64;
        let mean = sum / n;
        let se = ((sq / n - mean * mean).max(0.0) / n).sqrt();
        let z = (mean - exact).abs() / se;
        ensure(z <= 3.0, || format!("pair {pair}: exact {exact}, Monte Carlo {mean} +- {se}"))?;
        worst_z = worst_z.max(z);
    }
    Ok(format!("20 pairs x 1e6 samples, worst deviation {worst_z:.2} standard errors"))
}

fn base_config() -> RunConfig {
    RunConfig {
        pretrain: PretrainConfig {
            steps: 50_000,
            learning_rate: 0.1,
            log_every: 100,
            ..PretrainConfig::default()
        },
        ..RunConfig::default()
    }
}

fn class_ratio(policy: &DenoiserParams, sched: &NoiseSchedule, spec: &MixtureSpec, n: usize, seed: u64) -> Result<Option<f64>, String> {
    let terminals = sample_terminals(policy, n, sched, seed);
    Ok(ratio_q(&classify_all(&terminals, spec, DEFAULT_THRESHOLD).map_err(err)?))
}

fn bias_inheritance(cfg: &RunConfig, base: &mut Option<DenoiserParams>) -> Outcome {
    let sched = cfg.schedule.build().map_err(err)?;
    let data = sample_dataset(
        &cfg.mixture,
        cfg.pretrain.dataset_size,
        &mut rng::stream(cfg.seed, Domain::Dataset, 0, 0),
    );
    let out = pretrain(&data, &sched, cfg.net_shape().map_err(err)?, &cfg.pretrain, cfg.seed).map_err(err)?;
    let (first, last) = out.first_last_decile();
    let q = class_ratio(&out.params, &sched, &cfg.mixture, 1000, 101)?.ok_or("no sample classified")?;
    *base = Some(out.params);
    ensure((0.05..=0.15).contains(&q), || format!("q = {q:.3} outside [0.05, 0.15]"))?;
    Ok(format!(
        "q = {q:.3} over 1000 samples (dataset {:.3}); loss {first:.3} -> {last:.3}",
        data.fraction_a()
    ))
}

fn run(base: &DenoiserParams, cfg: &RunConfig, tc: &TrainerConfig) -> Result<(DenoiserParams, RunLog), String> {
    let sched = cfg.schedule.build().map_err(err)?;
    let out = finetune(base, &sched, &cfg.mixture, tc, &mut |_, _| Ok(())).map_err(err)?;
    Ok((out.policy, out.log))
}

fn shift_experiment(cfg: &RunConfig, base: &DenoiserParams) -> Outcome {
    let tc = TrainerConfig {
        reward_kind: RewardKind::Shift,
        underrepresented: Some(ClassLabel::A),
        max_outer_steps: 50,
        ..TrainerConfig::default()
    };
    let (_, log) = run(base, cfg, &tc)?;
    let first = log.records.iter().find(|r| r.mean_reward > 0.9);
    let best = log.records.iter().map(|r| r.mean_reward).fold(f64::NEG_INFINITY, f64::max);
    match first {
        Some(r) => Ok(format!("mean R_shift {:.3} at step {} (best {best:.3})", r.mean_reward, r.step)),
        None => Err(format!("best mean R_shift {best:.3} over {} steps", log.len())),
    }
}

fn balance_trainer() -> TrainerConfig {
    TrainerConfig {
        reward_kind: RewardKind::Balance,
        batch_size: 512,
        optimizer: OptimizerKind::Sgd,
        learning_rate: 0.08,
        balance_tolerance: 0.1,
        max_outer_steps: 100,
        ..TrainerConfig::default()
    }
}

fn balance_experiment(cfg: &RunConfig, base: &DenoiserParams, tuned: &mut Option<DenoiserParams>) -> Outcome {
    let (policy, log) = run(base, cfg, &balance_trainer())?;
    *tuned = Some(policy);
    ensure(log.len() >= 10 && log.len() <= 100, || format!("{} steps logged", log.len()))?;
    let tail = &log.records[log.len() - 10..];
    let worst = tail
        .iter()
        .map(|r| r.q.map_or(f64::INFINITY, |q| (q - 0.5).abs()))
        .fold(0.0, f64::max);
    let first = log.records.iter().find(|r| r.q.is_some_and(|q| (q - 0.5).abs() < 0.1)).map_or(0, |r| r.step);
    ensure(worst < 0.1, || format!("max |q - 0.5| over the final 10 of {} steps is {worst:.3}", log.len()))?;
    Ok(format!(
        "{} steps, first within 0.1 at step {first}, final-10 max |q - 0.5| = {worst:.3}",
        log.len()
    ))
}

fn quality(cfg: &RunConfig, tuned: &DenoiserParams) -> Outcome {
    let sched = cfg.schedule.build().map_err(err)?;
    let spec = &cfg.mixture;
    let terminals = sample_terminals(tuned, 1000, &sched, 202);
    let radius = 3.0 * spec.mode_sigma;
    let near = |x: &[f64], c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() <= radius;
    let inside = terminals
        .iter()
        .filter(|x| near(x, &spec.mode_a_center) || near(x, &spec.mode_b_center))
        .count();
    let frac = inside as f64 / 1000.0;
    let q = ratio_q(&classify_all(&terminals, spec, DEFAULT_THRESHOLD).map_err(err)?);
    let q = q.map_or("undefined".into(), |q| format!("{q:.3}"));
    ensure(frac >= 0.95, || format!("{:.1}% of 1000 samples within 3 sigma (q = {q})", 100.0 * frac))?;
    Ok(format!("{:.1}% of 1000 samples within 3 sigma of a center (q = {q})", 100.0 * frac))
}

fn slope(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn trust_region(cfg: &RunConfig, base: &DenoiserParams) -> Outcome {
    let mut rng = rng::stream(0, Domain::Test, 9, 0);
    for _ in 0..1000 {
        let eps = rng.random_range(0.05..0.5);
        let a = rng.random_range(0.01..3.0);
        let delta = rng.random_range(0.001..0.1);
        let c = rng.random_range(0.5..10.0);
        ensure(surrogate_clip(1.0, a, eps) == a && surrogate_clip(1.0, -a, eps) == -a, || "clip ratio-1 identity".into())?;
        ensure(surrogate_rollback(1.0, -a, 0.0, delta, c) == -a, || "rollback ratio-1 identity".into())?;

        let hi = 1.0 + eps + rng.random_range(0.01..1.0);
        let lo = 1.0 - eps - rng.random_range(0.01..(1.0 - eps - 0.001));
        let inside = 1.0 + eps * rng.random_range(-0.9..0.9);
        ensure(slope(|r| surrogate_clip(r, a, eps), hi).abs() < 1e-9, || format!("A > 0 slope above band at {hi}"))?;
        ensure(slope(|r| surrogate_clip(r, -a, eps), lo).abs() < 1e-9, || format!("A < 0 slope below band at {lo}"))?;
        ensure((slope(|r| surrogate_clip(r, a, eps), inside) - a).abs() < 1e-6, || "slope inside band".into())?;

        let above = delta + rng.random_range(0.001..1.0);
        let below = delta * rng.random_range(0.0..0.99);
        let r = rng.random_range(0.5..1.5);
        let s_above = slope(|k| surrogate_rollback(r, a, k, delta, c), above);
        let s_below = slope(|k| surrogate_rollback(r, a, k, delta, c), below.max(1e-6));
        ensure((s_above + c).abs() < 1e-6, || format!("hinge slope {s_above} vs {}", -c))?;
        ensure(s_below.abs() < 1e-9, || format!("slope {s_below} below the trigger"))?;
    }

    let tc = TrainerConfig {
        variant: Variant::Rollback,
        reward_kind: RewardKind::Shift,
        underrepresented: Some(ClassLabel::A),
        learning_rate: 1e-3,
        max_outer_steps: 20,
        ..TrainerConfig::default()
    };
    let (_, log) = run(base, cfg, &tc)?;
    ensure(log.len() == 20, || format!("{} steps logged", log.len()))?;
    ensure(log.records.iter().all(|r| r.loss.is_finite() && r.mean_kl.is_finite()), || {
        "non-finite loss or KL".into()
    })?;
    let max_kl = log.records.iter().map(|r| r.mean_kl).fold(0.0, f64::max);
    let fired = log.records.iter().map(|r| r.clip_or_rollback_frac).fold(0.0, f64::max);
    ensure(max_kl > 0.0, || "KL series is identically zero".into())?;
    Ok(format!(
        "1000 randomized cases; rollback run: 20 finite steps, max mean KL {max_kl:.2e}, max penalty share {:.1}%",
        100.0 * fired
    ))
}

fn determinism(base: &DenoiserParams) -> Outcome {
    let cfg = RunConfig::default();
    let small = RunConfig {
        pretrain: PretrainConfig {
            steps: 500,
            dataset_size: 2000,
            ..PretrainConfig::default()
        },
        ..RunConfig::default()
    };
    let sched = cfg.schedule.build().map_err(err)?;
    let pre = || -> Result<Vec<u8>, String> {
        let data = sample_dataset(&small.mixture, small.pretrain.dataset_size, &mut rng::stream(4, Domain::Dataset, 0, 0));
        let out = pretrain(&data, &sched, small.net_shape().map_err(err)?, &small.pretrain, 4).map_err(err)?;
        Ok(encode_checkpoint(&out.params))
    };
    ensure(pre()? == pre()?, || "pretraining checkpoints differ".into())?;

    let tc = TrainerConfig {
        max_outer_steps: 8,
        batch_size: 32,
        log_wall_time: false,
        master_seed: 17,
        ..TrainerConfig::default()
    };
    let once = || -> Result<(String, Vec<u8>), String> {
        let (p, log) = run(base, &cfg, &tc)?;
        Ok((runlog_to_csv(&log), encode_checkpoint(&p)))
    };
    let (log_a, ckpt_a) = once()?;
    let (log_b, ckpt_b) = once()?;
    ensure(log_a == log_b, || "run logs differ".into())?;
    ensure(ckpt_a == ckpt_b, || "fine-tuned checkpoints differ".into())?;
    Ok(format!(
        "identical pretraining checkpoints ({} bytes), run logs ({} bytes) and fine-tuned checkpoints",
        ckpt_a.len(),
        log_a.len()
    ))
}

fn main() -> ExitCode {
    // every budget is stated for a single worker thread
    rayon::ThreadPoolBuilder::new().num_threads(1).build_global().expect("thread pool");
    let secs = Duration::from_secs;
    let mut suite = Suite { failures: 0 };
    let cfg = base_config();

    suite.check(1, "reward-unit suite", secs(1), reward_units);
    suite.check(2, "total-reward shape", secs(1), total_reward_shape);
    suite.check(3, "gradient correctness", secs(30), gradient_checks);
    suite.check(4, "KL exactness", secs(60), kl_exactness);

    let mut base = None;
    suite.check(5, "bias inheritance", secs(600), || bias_inheritance(&cfg, &mut base));
    let mut tuned = None;
    match &base {
        Some(base) => {
            suite.check(6, "shift experiment", secs(1200), || shift_experiment(&cfg, base));
            suite.check(7, "balance experiment", secs(1800), || balance_experiment(&cfg, base, &mut tuned));
        }
        None => {
            for (id, name) in [(6, "shift experiment"), (7, "balance experiment")] {
                suite.check(id, name, secs(0), || Err("no base model".into()));
            }
        }
    }
    match &tuned {
        Some(tuned) => suite.check(8, "quality preservation", secs(60), || quality(&cfg, tuned)),
        None => suite.check(8, "quality preservation", secs(0), || Err("no balanced model".into())),
    }
    match &base {
        Some(base) => {
            suite.check(9, "trust-region properties", secs(300), || trust_region(&cfg, base));
            suite.check(10, "determinism", secs(600), || determinism(base));
        }
        None => {
            suite.check(9, "trust-region properties", secs(0), || Err("no base model".into()));
            suite.check(10, "determinism", secs(0), || Err("no base model".into()));
        }
    }

    println!("{} of 10 criteria passed", 10 - suite.failures);
    if suite.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
