//! Building the biased base model.
//!
//! The training data is a two-mode isotropic Gaussian mixture whose mode A
//! is deliberately rare. A denoiser trained on it by noise-prediction
//! regression inherits that imbalance, which the fine-tuner then corrects.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{backward, forward_traced, init_params, DenoiserParams, NetShape, Tape};
use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, Result};
use crate::rng::{self, Domain, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixtureSpec {
    pub mode_a_center: Vec<f64>,
    pub mode_b_center: Vec<f64>,
    pub mode_sigma: f64,
    /// Probability that a sample comes from mode A.
    pub weight_a: f64,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            mode_a_center: vec![-2.0, 0.0],
            mode_b_center: vec![2.0, 0.0],
            mode_sigma: 0.3,
            weight_a: 0.1,
        }
    }
}

impl MixtureSpec {
    pub fn dim(&self) -> usize {
        self.mode_a_center.len()
    }

    pub fn separation(&self) -> f64 {
        self.mode_a_center
            .iter()
            .zip(&self.mode_b_center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(Error::Config(format!("{k}: {m}")));
        if self.mode_a_center.is_empty() || self.mode_a_center.len() != self.mode_b_center.len() {
            return err(
                "mode_b_center",
                format!(
                    "centers must be non-empty and of equal dimension ({} vs {})",
                    self.mode_a_center.len(),
                    self.mode_b_center.len()
                ),
            );
        }
        if !(self.mode_sigma > 0.0 && self.mode_sigma.is_finite()) {
            return err("mode_sigma", format!("must be positive, got {}", self.mode_sigma));
        }
        if !(self.weight_a > 0.0 && self.weight_a < 1.0) {
            return err("weight_a", format!("must lie in (0, 1), got {}", self.weight_a));
        }
        let ratio = self.separation() / self.mode_sigma;
        if !(ratio >= 4.0) {
            return err(
                "mode_sigma",
                format!("mode separation is {ratio:.3} sigmas; at least 4 is required"),
            );
        }
        Ok(())
    }

    pub fn center(&self, mode: Mode) -> &[f64] {
        match mode {
            Mode::A => &self.mode_a_center,
            Mode::B => &self.mode_b_center,
        }
    }
}

/// Ground-truth mixture component of a training point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub points: Vec<Vec<f64>>,
    pub modes: Vec<Mode>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn fraction_a(&self) -> f64 {
        self.modes.iter().filter(|m| **m == Mode::A).count() as f64 / self.len() as f64
    }

    /// CSV with header `x_1,...,x_d,true_label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.points.first().map_or(0, Vec::len);
        let mut out = String::new();
        for j in 1..=d {
            out.push_str(&format!("x_{j},"));
        }
        out.push_str("true_label\n");
        for (p, m) in self.points.iter().zip(&self.modes) {
            for v in p {
                out.push_str(&format!("{v:.16e},"));
            }
            out.push_str(match m {
                Mode::A => "A\n",
                Mode::B => "B\n",
            });
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Draws `n` labelled points. `weight_a` outside `(0, 1)` is accepted here so
/// the degenerate one-mode cases can be produced.
pub fn sample_dataset(spec: &MixtureSpec, n: usize, rng: &mut Stream) -> Dataset {
    let mut points = Vec::with_capacity(n);
    let mut modes = Vec::with_capacity(n);
    for _ in 0..n {
        let mode = if rng.random::<f64>() < spec.weight_a {
            Mode::A
        } else {
            Mode::B
        };
        let z = rng::standard_normal(rng, spec.dim());
        points.push(
            spec.center(mode)
                .iter()
                .zip(z)
                .map(|(c, e)| c + spec.mode_sigma * e)
                .collect(),
        );
        modes.push(mode);
    }
    Dataset { points, modes }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Points drawn from the mixture before training.
    pub dataset_size: usize,
    /// A loss entry is recorded every `log_every` steps.
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 128,
            learning_rate: 0.05,
            dataset_size: 10_000,
            log_every: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: String| Err(Error::Config(format!("{k}: {m}")));
        if self.steps == 0 {
            return err("steps", "must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err("learning_rate", format!("must be positive, got {}", self.learning_rate));
        }
        if self.dataset_size == 0 {
            return err("dataset_size", "must be positive".into());
        }
        if self.log_every == 0 {
            return err("log_every", "must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOutcome {
    pub params: DenoiserParams,
    /// `(step, minibatch loss)` pairs, steps counted from 1.
    pub losses: Vec<(usize, f64)>,
}

impl PretrainOutcome {
    /// Mean loss over the first and last tenth of the recorded steps.
    pub fn first_last_decile(&self) -> (f64, f64) {
        let n = self.losses.len();
        let k = (n / 10).max(1);
        let mean = |s: &[(usize, f64)]| s.iter().map(|(_, l)| l).sum::<f64>() / s.len() as f64;
        (mean(&self.losses[..k]), mean(&self.losses[n - k..]))
    }

    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,loss\n");
        for (s, l) in &self.losses {
            out.push_str(&format!("{s},{l:.16e}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Noise-prediction MSE on one minibatch and its gradient tape.
///
/// Each entry is `(x0, t, eps)`; the loss is the mean over entries and
/// coordinates of `(eps - eps_theta(x_t, t))^2`.
pub fn mse_objective(
    params: &DenoiserParams,
    batch: &[(Vec<f64>, usize, Vec<f64>)],
    schedule: &NoiseSchedule,
) -> Result<(f64, Tape)> {
    let d = params.shape().dim;
    let scale = 1.0 / (batch.len() * d) as f64;
    let mut tape = Tape::new();
    let mut loss = 0.0;
    for (x0, t, eps) in batch {
        let xt = forward_diffuse(x0, *t, eps, schedule)?;
        let (pred, trace) = forward_traced(params, &xt, *t)?;
        let mut cot = Vec::with_capacity(d);
        for (p, e) in pred.iter().zip(eps) {
            let r = p - e;
            loss += r * r * scale;
            cot.push(2.0 * r * scale);
        }
        tape.push(trace, cot);
    }
    Ok((loss, tape))
}

/// Fits the denoiser to `data` with fixed-rate SGD.
pub fn pretrain(
    data: &Dataset,
    schedule: &NoiseSchedule,
    shape: NetShape,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if data.is_empty() {
        return Err(Error::Config("pretraining dataset is empty".into()));
    }
    if shape.dim != data.points[0].len() {
        return Err(Error::Shape(format!(
            "network dimension {} vs data dimension {}",
            shape.dim,
            data.points[0].len()
        )));
    }
    config.validate()?;
    let mut params = init_params(&mut rng::stream(seed, Domain::Init, 0, 0), shape);
    let mut rng = rng::stream(seed, Domain::Pretrain, 0, 0);
    let steps_total = schedule.steps();
    let mut losses = Vec::with_capacity(config.steps / config.log_every + 1);

    for step in 1..=config.steps {
        let batch: Vec<_> = (0..config.batch_size)
            .map(|_| {
                let i = rng.random_range(0..data.len());
                let t = rng.random_range(1..=steps_total);
                let eps = rng::standard_normal(&mut rng, shape.dim);
                (data.points[i].clone(), t, eps)
            })
            .collect();
        let (loss, tape) = mse_objective(&params, &batch, schedule)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("pretraining loss is {loss}"),
            });
        }
        let grad = backward(&params, &tape)?;
        for (p, g) in params.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *p -= config.learning_rate * g;
        }
        if params.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: "non-finite parameter after SGD step".into(),
            });
        }
        if step % config.log_every == 0 {
            losses.push((step, loss));
        }
    }
    Ok(PretrainOutcome { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid() {
        MixtureSpec::default().validate().unwrap();
    }

    #[test]
    fn spec_validation_names_the_key() {
        let mut s = MixtureSpec::default();
        s.weight_a = 1.5;
        let msg = s.validate().unwrap_err().to_string();
        assert!(msg.contains("weight_a"), "{msg}");

        let mut s = MixtureSpec::default();
        s.mode_sigma = 1.5;
        assert!(s.validate().unwrap_err().to_string().contains("mode_sigma"));

        let mut s = MixtureSpec::default();
        s.mode_b_center = vec![1.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn degenerate_weight_gives_single_mode() {
        let mut s = MixtureSpec::default();
        s.weight_a = 0.0;
        let d = sample_dataset(&s, 500, &mut rng::stream(1, Domain::Dataset, 0, 0));
        assert!(d.modes.iter().all(|m| *m == Mode::B));
    }

    #[test]
    fn mode_fraction_concentrates() {
        // 3 sigma binomial bound at n = 1e4, p = 0.1 is 0.009.
        let s = MixtureSpec::default();
        let d = sample_dataset(&s, 10_000, &mut rng::stream(2, Domain::Dataset, 0, 0));
        assert!((d.fraction_a() - 0.1).abs() < 0.01, "{}", d.fraction_a());
    }

    #[test]
    fn dataset_is_deterministic() {
        let s = MixtureSpec::default();
        let a = sample_dataset(&s, 100, &mut rng::stream(3, Domain::Dataset, 0, 0));
        let b = sample_dataset(&s, 100, &mut rng::stream(3, Domain::Dataset, 0, 0));
        assert_eq!(a, b);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = Dataset {
            points: vec![],
            modes: vec![],
        };
        let sched = NoiseSchedule::linear(10, 2e-3, 0.3).unwrap();
        let shape = NetShape::new(2, 4, 4).unwrap();
        assert!(pretrain(&data, &sched, shape, &PretrainConfig::default(), 0).is_err());
    }

    #[test]
    fn huge_learning_rate_reports_divergence_step() {
        let s = MixtureSpec::default();
        let data = sample_dataset(&s, 256, &mut rng::stream(4, Domain::Dataset, 0, 0));
        let sched = NoiseSchedule::linear(10, 2e-3, 0.3).unwrap();
        let shape = NetShape::new(2, 16, 8).unwrap();
        let cfg = PretrainConfig {
            steps: 500,
            learning_rate: 1e6,
            ..Default::default()
        };
        match pretrain(&data, &sched, shape, &cfg, 0) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1 && step <= 500),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
