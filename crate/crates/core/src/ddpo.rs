//! Policy-gradient fine-tuning of the reverse chain from terminal rewards.
//!
//! One outer step collects a batch of trajectories under the frozen current
//! policy, scores their terminal samples with the classifier, turns the
//! rewards into batch-normalized advantages and then runs several epochs of
//! importance-weighted updates. Every transition of a trajectory carries that
//! trajectory's advantage. The trust region is either the clipped ratio
//! objective or a KL-triggered hinge penalty ("rollback").

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{kl_unchecked, log_prob_unchecked, sample_trajectory, NoiseSchedule, Policy, Trajectory, TrajectorySeed};
use crate::error::{Error, Result};
use crate::feedback::{score_batch, ClassLabel, RewardKind, DEFAULT_THRESHOLD};
use crate::pretrain::MixtureSpec;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Clip,
    Rollback,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub variant: Variant,
    pub clip_eps: f64,
    /// KL level above which the rollback penalty switches on.
    pub kl_delta: f64,
    pub rollback_coef: f64,
    pub inner_epochs: usize,
    /// Trajectories per outer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    pub max_outer_steps: usize,
    pub reward_kind: RewardKind,
    /// Fixed class for the shift reward; `None` re-derives it from each batch.
    pub underrepresented: Option<ClassLabel>,
    pub balance_tolerance: f64,
    /// Consecutive in-tolerance steps that end a balance run.
    pub balance_patience: usize,
    pub classifier_threshold: f64,
    pub master_seed: u64,
    /// Write a checkpoint every this many outer steps; 0 disables.
    pub checkpoint_every: usize,
    /// When false the `wall_ms` column is written as 0 so logs are reproducible byte for byte.
    pub log_wall_time: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Clip,
            clip_eps: 0.2,
            kl_delta: 0.02,
            rollback_coef: 5.0,
            inner_epochs: 4,
            batch_size: 64,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            max_grad_norm: Some(1.0),
            max_outer_steps: 100,
            reward_kind: RewardKind::Balance,
            underrepresented: None,
            balance_tolerance: 0.05,
            balance_patience: 10,
            classifier_threshold: DEFAULT_THRESHOLD,
            master_seed: 0,
            checkpoint_every: 10,
            log_wall_time: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(Error::Config(format!("{k}: {m}")));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return err("clip_eps", format!("must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.kl_delta > 0.0) {
            return err("kl_delta", format!("must be positive, got {}", self.kl_delta));
        }
        if !(self.rollback_coef > 0.0) {
            return err("rollback_coef", format!("must be positive, got {}", self.rollback_coef));
        }
        if self.inner_epochs == 0 {
            return err("inner_epochs", "must be positive".into());
        }
        if self.batch_size < 2 {
            return err("batch_size", format!("must be at least 2, got {}", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if let Some(g) = self.max_grad_norm {
            if !(g > 0.0) {
                return err("max_grad_norm", format!("must be positive or null, got {g}"));
            }
        }
        if self.underrepresented == Some(ClassLabel::None) {
            return err("underrepresented", "must be \"A\", \"B\" or null".into());
        }
        if !(self.balance_tolerance >= 0.0) {
            return err("balance_tolerance", format!("must be non-negative, got {}", self.balance_tolerance));
        }
        if self.balance_patience == 0 {
            return err("balance_patience", "must be positive".into());
        }
        if !(self.classifier_threshold > 0.5 && self.classifier_threshold <= 1.0) {
            return err(
                "classifier_threshold",
                format!("must lie in (0.5, 1], got {}", self.classifier_threshold),
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    pub advantages: Vec<f64>,
    pub reward_mean: f64,
    pub reward_std: f64,
}

/// `(r - mean) / (std + 1e-8)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64]) -> Result<AdvantageBatch> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "advantage normalization needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let advantages = rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect();
    Ok(AdvantageBatch {
        advantages,
        reward_mean: mean,
        reward_std: std,
    })
}

/// `min(r A, clip(r, 1 - eps, 1 + eps) A)`, to be maximized.
pub fn surrogate_clip(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    clip_term(ratio, advantage, clip_eps).0
}

/// Value, derivative in the ratio, and whether the clipped branch is active.
fn clip_term(ratio: f64, advantage: f64, clip_eps: f64) -> (f64, f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage, false)
    } else {
        (clipped, 0.0, true)
    }
}

/// `r A`, minus `coef (kl - delta)` once the step KL leaves the trust region.
pub fn surrogate_rollback(ratio: f64, advantage: f64, kl: f64, kl_delta: f64, rollback_coef: f64) -> f64 {
    rollback_term(ratio, advantage, kl, kl_delta, rollback_coef).0
}

/// Value, derivatives in the ratio and the KL, and whether the penalty fired.
fn rollback_term(ratio: f64, advantage: f64, kl: f64, kl_delta: f64, coef: f64) -> (f64, f64, f64, bool) {
    let base = ratio * advantage;
    if kl <= kl_delta {
        (base, advantage, 0.0, false)
    } else {
        (base - coef * (kl - kl_delta), advantage, -coef, true)
    }
}

/// Samples `n` trajectories; trajectory `i` uses the stream
/// `(master_seed, outer_step, i)` regardless of thread count.
pub fn collect_rollouts<P: Policy>(
    policy: &P,
    n: usize,
    schedule: &NoiseSchedule,
    master_seed: u64,
    outer_step: u64,
) -> Vec<Trajectory> {
    (0..n as u64)
        .into_par_iter()
        .map(|index| {
            let mut rng = rng::stream(master_seed, Domain::Rollout, outer_step, index);
            let seed = TrajectorySeed {
                master: master_seed,
                step: outer_step,
                index,
            };
            sample_trajectory(policy, schedule, &mut rng, seed)
        })
        .collect()
}

/// Value and gradient of the (negated, averaged) surrogate over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEval {
    /// Minus the mean surrogate over all (trajectory, step) terms.
    pub loss: f64,
    pub grad: Vec<f64>,
    pub mean_kl: f64,
    /// Share of terms whose clip (or rollback penalty) was active.
    pub active_frac: f64,
    pub max_abs_log_ratio: f64,
}

struct TrajectoryEval {
    surrogate: f64,
    kl: f64,
    active: usize,
    max_abs_log_ratio: f64,
    grad: Vec<f64>,
}

pub fn surrogate_loss<P: Policy>(
    policy: &P,
    batch: &[Trajectory],
    advantages: &[f64],
    schedule: &NoiseSchedule,
    config: &TrainerConfig,
) -> Result<SurrogateEval> {
    if batch.len() != advantages.len() {
        return Err(Error::Shape(format!(
            "{} trajectories but {} advantages",
            batch.len(),
            advantages.len()
        )));
    }
    let horizon = schedule.steps();
    if let Some(tr) = batch.iter().find(|tr| tr.horizon() != horizon) {
        return Err(Error::Shape(format!(
            "trajectory has {} steps, schedule has {horizon}",
            tr.horizon()
        )));
    }
    let n_params = policy.num_params();
    let terms = (batch.len() * horizon) as f64;
    let scale = -1.0 / terms;

    let per_traj: Vec<TrajectoryEval> = batch
        .par_iter()
        .zip(advantages.par_iter())
        .map(|(tr, &adv)| {
            let mut ev = TrajectoryEval {
                surrogate: 0.0,
                kl: 0.0,
                active: 0,
                max_abs_log_ratio: 0.0,
                grad: vec![0.0; n_params],
            };
            for k in 0..horizon {
                let t = tr.step_at(k);
                let sigma = schedule.sigma(t);
                let var = sigma * sigma;
                let x_t = &tr.states[k];
                let action = &tr.states[k + 1];
                let old_mean = &tr.means[k];
                let old_lp = tr.log_probs[k];
                let mut upstream = |mean: &[f64]| -> Vec<f64> {
                    let log_ratio = log_prob_unchecked(action, mean, sigma) - old_lp;
                    let ratio = log_ratio.exp();
                    let kl = kl_unchecked(mean, old_mean, sigma);
                    let (value, d_ratio, d_kl, active) = match config.variant {
                        Variant::Clip => {
                            let (v, dr, a) = clip_term(ratio, adv, config.clip_eps);
                            (v, dr, 0.0, a)
                        }
                        Variant::Rollback => {
                            rollback_term(ratio, adv, kl, config.kl_delta, config.rollback_coef)
                        }
                    };
                    ev.surrogate += value;
                    ev.kl += kl;
                    ev.active += usize::from(active);
                    ev.max_abs_log_ratio = ev.max_abs_log_ratio.max(log_ratio.abs());
                    // d/dmu of log pi(action | mu) and of the step KL
                    mean.iter()
                        .zip(action)
                        .zip(old_mean)
                        .map(|((m, a), o)| {
                            scale * (d_ratio * ratio * (a - m) / var + d_kl * (m - o) / var)
                        })
                        .collect()
                };
                policy.mean_backward(x_t, t, schedule, &mut ev.grad, &mut upstream);
            }
            ev
        })
        .collect();

    let mut grad = vec![0.0; n_params];
    let (mut surrogate, mut kl, mut active, mut max_lr) = (0.0, 0.0, 0usize, 0.0f64);
    for ev in &per_traj {
        surrogate += ev.surrogate;
        kl += ev.kl;
        active += ev.active;
        max_lr = max_lr.max(ev.max_abs_log_ratio);
        grad.iter_mut().zip(&ev.grad).for_each(|(g, e)| *g += e);
    }
    Ok(SurrogateEval {
        loss: -surrogate / terms,
        grad,
        mean_kl: kl / terms,
        active_frac: active as f64 / terms,
        max_abs_log_ratio: max_lr,
    })
}

/// First-order optimizer over a flat parameter vector (minimizes).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => n_params,
        };
        Self {
            kind,
            lr,
            m: vec![0.0; state],
            v: vec![0.0; state],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                params.iter_mut().zip(grad).for_each(|(p, g)| *p -= self.lr * g);
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - Self::BETA1.powi(self.steps);
                let c2 = 1.0 - Self::BETA2.powi(self.steps);
                for i in 0..params.len() {
                    self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
                    self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + Self::EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean over inner epochs of the surrogate loss.
    pub loss: f64,
    pub mean_kl: f64,
    pub active_frac: f64,
    pub max_grad_norm: f64,
}

/// Runs `inner_epochs` passes of importance-weighted updates on `batch`,
/// which must have been sampled under `policy`'s current parameters.
pub fn update_step<P: Policy>(
    policy: &mut P,
    optimizer: &mut Optimizer,
    batch: &[Trajectory],
    advantages: &[f64],
    schedule: &NoiseSchedule,
    config: &TrainerConfig,
    outer_step: usize,
) -> Result<StepStats> {
    let epochs = config.inner_epochs as f64;
    let mut stats = StepStats {
        loss: 0.0,
        mean_kl: 0.0,
        active_frac: 0.0,
        max_grad_norm: 0.0,
    };
    for epoch in 0..config.inner_epochs {
        let mut ev = surrogate_loss(&*policy, batch, advantages, schedule, config)?;
        let diverged = |what: String| Error::Divergence {
            step: outer_step,
            detail: format!("epoch {epoch}: {what}"),
        };
        if !ev.loss.is_finite() {
            return Err(diverged(format!(
                "surrogate loss is {} (max |log ratio| {:.3e})",
                ev.loss, ev.max_abs_log_ratio
            )));
        }
        if let Some(i) = ev.grad.iter().position(|g| !g.is_finite()) {
            return Err(diverged(format!("gradient entry {i} is {}", ev.grad[i])));
        }
        let norm = ev.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if let Some(cap) = config.max_grad_norm {
            if norm > cap {
                let s = cap / norm;
                ev.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        optimizer.step(policy.params_mut(), &ev.grad);
        stats.loss += ev.loss / epochs;
        stats.mean_kl += ev.mean_kl / epochs;
        stats.active_frac += ev.active_frac / epochs;
        stats.max_grad_norm = stats.max_grad_norm.max(norm);
    }
    Ok(stats)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub mean_reward: f64,
    /// `None` when no sample of the batch was classified.
    pub q: Option<f64>,
    pub loss: f64,
    pub mean_kl: f64,
    pub clip_or_rollback_frac: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Why the outer loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    /// Shift run with automatic class choice found the batch balanced.
    Balanced,
    /// Balance run stayed within tolerance for `balance_patience` steps.
    Sustained,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<P> {
    pub policy: P,
    pub log: RunLog,
    pub stop: StopReason,
}

/// The outer fine-tuning loop.
///
/// `observer` runs after every logged step with the record and the policy
/// as it stands after that step's update.
pub fn finetune<P: Policy + Clone>(
    base: &P,
    schedule: &NoiseSchedule,
    spec: &MixtureSpec,
    config: &TrainerConfig,
    observer: &mut dyn FnMut(&StepRecord, &P) -> Result<()>,
) -> Result<FinetuneOutcome<P>> {
    config.validate()?;
    spec.validate()?;
    if base.dim() != spec.dim() {
        return Err(Error::Shape(format!(
            "policy dimension {} vs mixture dimension {}",
            base.dim(),
            spec.dim()
        )));
    }
    let mut policy = base.clone();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, policy.num_params());
    let mut log = RunLog::default();
    let mut streak = 0usize;
    let started = Instant::now();
    let mut stop = StopReason::MaxSteps;

    for step in 1..=config.max_outer_steps {
        let batch = collect_rollouts(&policy, config.batch_size, schedule, config.master_seed, step as u64);
        let terminals: Vec<Vec<f64>> = batch.iter().map(|t| t.terminal().to_vec()).collect();
        let wall = |started: &Instant| {
            if config.log_wall_time {
                started.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            }
        };

        let scored = match score_batch(
            &terminals,
            spec,
            config.classifier_threshold,
            config.reward_kind,
            config.underrepresented,
        ) {
            Ok(s) => s,
            Err(Error::UndefinedRatio) => {
                // nothing classified: no reward signal, no update
                let rec = StepRecord {
                    step,
                    mean_reward: 0.0,
                    q: None,
                    loss: 0.0,
                    mean_kl: 0.0,
                    clip_or_rollback_frac: 0.0,
                    wall_ms: wall(&started),
                };
                streak = 0;
                log.records.push(rec);
                observer(&rec, &policy)?;
                continue;
            }
            Err(e) => return Err(e),
        };

        let off_balance = scored.q.map(|q| (q - 0.5).abs());
        let auto_shift = config.reward_kind == RewardKind::Shift && config.underrepresented.is_none();
        if auto_shift && off_balance.is_some_and(|g| g <= config.balance_tolerance) {
            let rec = StepRecord {
                step,
                mean_reward: scored.mean_reward(),
                q: scored.q,
                loss: 0.0,
                mean_kl: 0.0,
                clip_or_rollback_frac: 0.0,
                wall_ms: wall(&started),
            };
            log.records.push(rec);
            observer(&rec, &policy)?;
            stop = StopReason::Balanced;
            break;
        }

        let adv = compute_advantages(&scored.rewards)?;
        let stats = update_step(
            &mut policy,
            &mut optimizer,
            &batch,
            &adv.advantages,
            schedule,
            config,
            step,
        )?;
        let rec = StepRecord {
            step,
            mean_reward: scored.mean_reward(),
            q: scored.q,
            loss: stats.loss,
            mean_kl: stats.mean_kl,
            clip_or_rollback_frac: stats.active_frac,
            wall_ms: wall(&started),
        };
        log.records.push(rec);
        observer(&rec, &policy)?;

        if config.reward_kind == RewardKind::Balance {
            streak = match off_balance {
                Some(g) if g <= config.balance_tolerance => streak + 1,
                _ => 0,
            };
            if streak >= config.balance_patience {
                stop = StopReason::Sustained;
                break;
            }
        }
    }
    Ok(FinetuneOutcome { policy, log, stop })
}

/// Terminal samples of `n` fresh trajectories drawn from streams distinct
/// from any training rollout.
pub fn sample_terminals<P: Policy>(policy: &P, n: usize, schedule: &NoiseSchedule, seed: u64) -> Vec<Vec<f64>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::stream(seed, Domain::Evaluate, 0, i);
            let s = TrajectorySeed {
                master: seed,
                step: 0,
                index: i,
            };
            sample_trajectory(policy, schedule, &mut rng, s).terminal().to_vec()
        })
        .collect()
}
