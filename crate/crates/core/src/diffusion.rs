//! Noise schedule, forward diffusion and the reverse chain viewed as a
//! fixed-horizon policy.
//!
//! Steps are indexed `t = 1..=T`. The reverse transition at step `t` is the
//! isotropic Gaussian `N(mu_theta(x_t, t), sigma_t^2 I)` with the fixed
//! variance `sigma_t^2 = beta_t`, so a trajectory's log-likelihood and the
//! KL between two policies at one step have closed forms.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear schedule from `beta_min` at `t = 1` to `beta_max` at `t = T`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::Config("schedule needs at least 2 steps".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// Replaces the reverse-step standard deviations by `scale * sigma_t`.
    /// Only the sampler sees the change; the forward process is untouched.
    pub fn with_sigma_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Domain(format!("sigma scale must be positive, got {scale}")));
        }
        self.sigmas.iter_mut().for_each(|s| *s *= scale);
        Ok(self)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(
            (1..=self.steps()).contains(&t),
            "step {t} outside 1..={}",
            self.steps()
        );
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.idx(t)]
    }

    /// Cumulative product of alphas up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[self.idx(t)]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[self.idx(t)]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Coefficient multiplying the noise prediction in the reverse mean:
    /// `mu = (x_t - c_t * eps) / sqrt(alpha_t)` with `c_t = beta_t / sqrt(1 - alpha_bar_t)`.
    pub fn eps_coef(&self, t: usize) -> f64 {
        self.beta(t) / (1.0 - self.alpha_bar(t)).sqrt()
    }
}

fn check_dims(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{what}: dimension {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Samples `x_t | x_0` in closed form: `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
pub fn forward_diffuse(
    x0: &[f64],
    t: usize,
    noise: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    check_dims(x0, noise, "forward_diffuse")?;
    if !(1..=schedule.steps()).contains(&t) {
        return Err(Error::Domain(format!("step {t} outside 1..={}", schedule.steps())));
    }
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(x, e)| s * x + n * e).collect())
}

/// Reverse-step mean from a noise prediction.
pub fn mean_from_eps(x_t: &[f64], eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64> {
    debug_assert_eq!(x_t.len(), eps.len());
    let c = schedule.eps_coef(t);
    let inv = 1.0 / schedule.alpha(t).sqrt();
    x_t.iter().zip(eps).map(|(x, e)| inv * (x - c * e)).collect()
}

/// Log-density of `N(mean, sigma^2 I)` at `x`.
pub fn gaussian_log_prob(x: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    check_dims(x, mean, "gaussian_log_prob")?;
    Ok(log_prob_unchecked(x, mean, sigma))
}

pub(crate) fn log_prob_unchecked(x: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let var = sigma * sigma;
    let sq: f64 = x.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * x.len() as f64 * (2.0 * PI * var).ln() - sq / (2.0 * var)
}

/// Exact KL divergence between two isotropic Gaussians sharing `sigma`.
pub fn step_kl(mean_new: &[f64], mean_old: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    check_dims(mean_new, mean_old, "step_kl")?;
    Ok(kl_unchecked(mean_new, mean_old, sigma))
}

pub(crate) fn kl_unchecked(mean_new: &[f64], mean_old: &[f64], sigma: f64) -> f64 {
    let sq: f64 = mean_new
        .iter()
        .zip(mean_old)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    sq / (2.0 * sigma * sigma)
}

/// A mean-parameterized Gaussian denoising policy with a flat parameter vector.
///
/// Implementors supply the reverse mean and the vector-Jacobian product of
/// that mean with respect to their parameters.
pub trait Policy: Sync {
    fn dim(&self) -> usize;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// Reverse mean `mu_theta(x_t, t)`.
    fn mean(&self, x_t: &[f64], t: usize, schedule: &NoiseSchedule) -> Vec<f64>;

    /// Computes the mean, asks `upstream` for `dL/dmu` at that mean, and adds
    /// `(dmu/dtheta)^T dL/dmu` into `grad`. Returns the mean.
    fn mean_backward(
        &self,
        x_t: &[f64],
        t: usize,
        schedule: &NoiseSchedule,
        grad: &mut [f64],
        upstream: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> Vec<f64>;

    fn num_params(&self) -> usize {
        self.params().len()
    }
}

/// One complete reverse chain `x_T -> ... -> x_0`.
///
/// `states[k]` is `x_{T-k}`; `means[k]` and `log_probs[k]` describe the
/// transition out of `states[k]`, taken at step `t = T - k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub means: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub seed: TrajectorySeed,
}

/// Coordinates of the stream that produced a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrajectorySeed {
    pub master: u64,
    pub step: u64,
    pub index: u64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.log_probs.len()
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Diffusion step at transition `k`.
    pub fn step_at(&self, k: usize) -> usize {
        self.horizon() - k
    }

    /// Recomputes every transition's log-probability from the stored states,
    /// means and the schedule's sigmas.
    pub fn recompute_log_probs(&self, schedule: &NoiseSchedule) -> Vec<f64> {
        (0..self.horizon())
            .map(|k| {
                log_prob_unchecked(
                    &self.states[k + 1],
                    &self.means[k],
                    schedule.sigma(self.step_at(k)),
                )
            })
            .collect()
    }
}

/// Runs the reverse chain once under `policy`, drawing `x_T` and every step's
/// noise from `rng`.
pub fn sample_trajectory<P: Policy + ?Sized>(
    policy: &P,
    schedule: &NoiseSchedule,
    rng: &mut Stream,
    seed: TrajectorySeed,
) -> Trajectory {
    let steps = schedule.steps();
    let d = policy.dim();
    let mut states = Vec::with_capacity(steps + 1);
    let mut means = Vec::with_capacity(steps);
    let mut log_probs = Vec::with_capacity(steps);

    states.push(rng::standard_normal(rng, d));
    for t in (1..=steps).rev() {
        let x_t = states.last().unwrap();
        let mean = policy.mean(x_t, t, schedule);
        let sigma = schedule.sigma(t);
        let xi = rng::standard_normal(rng, d);
        let next: Vec<f64> = mean.iter().zip(&xi).map(|(m, z)| m + sigma * z).collect();
        log_probs.push(log_prob_unchecked(&next, &mean, sigma));
        means.push(mean);
        states.push(next);
    }
    Trajectory {
        states,
        means,
        log_probs,
        seed,
    }
}
