//! Classifier feedback and the two reward functions.
//!
//! Class A is the attribute whose share the fine-tuner is asked to move;
//! the ratio `q` is the share of A among samples the classifier is confident
//! about. Samples below the confidence threshold are labelled `None`.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pretrain::MixtureSpec;

/// Confidence level below which the classifier abstains.
pub const DEFAULT_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    A,
    B,
    None,
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassLabel::A => "A",
            ClassLabel::B => "B",
            ClassLabel::None => "None",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierOutput {
    pub p_a: f64,
    pub label: ClassLabel,
}

impl ClassifierOutput {
    pub fn p_b(&self) -> f64 {
        1.0 - self.p_a
    }

    pub fn prob_of(&self, class: ClassLabel) -> Option<f64> {
        match class {
            ClassLabel::A => Some(self.p_a),
            ClassLabel::B => Some(self.p_b()),
            ClassLabel::None => None,
        }
    }

    /// Labels a posterior against a threshold in `(0.5, 1]`.
    pub fn from_posterior(p_a: f64, threshold: f64) -> Self {
        let label = if p_a >= threshold {
            ClassLabel::A
        } else if 1.0 - p_a >= threshold {
            ClassLabel::B
        } else {
            ClassLabel::None
        };
        Self { p_a, label }
    }
}

/// Equal-prior Bayes posterior of mode A at `x`, thresholded into a label.
///
/// The mixture weight is ignored on purpose: the classifier judges what a
/// sample looks like, not how common its class is.
pub fn classify(x: &[f64], spec: &MixtureSpec, threshold: f64) -> Result<ClassifierOutput> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0.5, 1], got {threshold}"
        )));
    }
    if x.len() != spec.dim() {
        return Err(Error::Shape(format!(
            "classifier expects {}-dimensional input, got {}",
            spec.dim(),
            x.len()
        )));
    }
    let sq = |c: &[f64]| x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    // log phi_b - log phi_a; p_a = 1 / (1 + exp(that))
    let log_ratio = (sq(&spec.mode_a_center) - sq(&spec.mode_b_center))
        / (2.0 * spec.mode_sigma * spec.mode_sigma);
    let p_a = 1.0 / (1.0 + log_ratio.exp());
    Ok(ClassifierOutput::from_posterior(p_a, threshold))
}

pub fn classify_all(
    points: &[Vec<f64>],
    spec: &MixtureSpec,
    threshold: f64,
) -> Result<Vec<ClassifierOutput>> {
    points.iter().map(|x| classify(x, spec, threshold)).collect()
}

/// Per-sample reward: classifier probability of the underrepresented class.
pub fn reward_shift(outputs: &[ClassifierOutput], underrepresented: ClassLabel) -> Result<Vec<f64>> {
    if underrepresented == ClassLabel::None {
        return Err(Error::Config(
            "underrepresented class must be A or B".into(),
        ));
    }
    Ok(outputs
        .iter()
        .map(|o| o.prob_of(underrepresented).unwrap())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub a: usize,
    pub b: usize,
    pub none: usize,
}

pub fn count_labels(outputs: &[ClassifierOutput]) -> Counts {
    let mut c = Counts::default();
    for o in outputs {
        match o.label {
            ClassLabel::A => c.a += 1,
            ClassLabel::B => c.b += 1,
            ClassLabel::None => c.none += 1,
        }
    }
    c
}

/// Share of A among classified samples; `None` when nothing was classified.
pub fn ratio_q(outputs: &[ClassifierOutput]) -> Option<f64> {
    let c = count_labels(outputs);
    let classified = c.a + c.b;
    (classified > 0).then(|| c.a as f64 / classified as f64)
}

/// Per-sample balance reward and the batch ratio.
///
/// `r_i = |q - 0.5| * (+1 if sample i has the minority label, else -1)`,
/// where the minority label is A when `q < 0.5` and B otherwise. Abstentions
/// get 0.
pub fn reward_balance(outputs: &[ClassifierOutput]) -> Result<(Vec<f64>, f64)> {
    let q = ratio_q(outputs).ok_or(Error::UndefinedRatio)?;
    let favoured = if q < 0.5 { ClassLabel::A } else { ClassLabel::B };
    let mag = (q - 0.5).abs();
    let rewards = outputs
        .iter()
        .map(|o| match o.label {
            ClassLabel::None => 0.0,
            l if l == favoured => mag,
            _ => -mag,
        })
        .collect();
    Ok((rewards, q))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Shift,
    Balance,
}

/// Everything derived from classifying one batch of terminal samples.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardBatch {
    pub outputs: Vec<ClassifierOutput>,
    pub counts: Counts,
    pub q: Option<f64>,
    pub rewards: Vec<f64>,
    /// Class the shift reward favoured; `None` for the balance reward.
    pub underrepresented: Option<ClassLabel>,
    /// 1 when `q < 0.5`.
    pub indicator: Option<u8>,
}

impl RewardBatch {
    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

/// Classifies a batch and scores it.
///
/// For the shift reward with `underrepresented = None`, the class is chosen
/// from the batch itself (A when `q < 0.5`, B otherwise). Returns
/// [`Error::UndefinedRatio`] when the ratio is needed but nothing was
/// classified.
pub fn score_batch(
    terminals: &[Vec<f64>],
    spec: &MixtureSpec,
    threshold: f64,
    kind: RewardKind,
    underrepresented: Option<ClassLabel>,
) -> Result<RewardBatch> {
    let outputs = classify_all(terminals, spec, threshold)?;
    let counts = count_labels(&outputs);
    let q = ratio_q(&outputs);
    let indicator = q.map(|q| u8::from(q < 0.5));
    match kind {
        RewardKind::Shift => {
            let u = match underrepresented {
                Some(u) => u,
                None => match q {
                    Some(q) if q < 0.5 => ClassLabel::A,
                    Some(_) => ClassLabel::B,
                    None => return Err(Error::UndefinedRatio),
                },
            };
            let rewards = reward_shift(&outputs, u)?;
            Ok(RewardBatch {
                outputs,
                counts,
                q,
                rewards,
                underrepresented: Some(u),
                indicator,
            })
        }
        RewardKind::Balance => {
            let (rewards, _) = reward_balance(&outputs)?;
            Ok(RewardBatch {
                outputs,
                counts,
                q,
                rewards,
                underrepresented: None,
                indicator,
            })
        }
    }
}

/// CSV with header `sample_index,x_1,...,x_d,p_a,label`.
pub fn write_classification_csv(
    path: &Path,
    points: &[Vec<f64>],
    outputs: &[ClassifierOutput],
) -> Result<()> {
    let d = points.first().map_or(0, Vec::len);
    let mut out = String::from("sample_index,");
    for j in 1..=d {
        out.push_str(&format!("x_{j},"));
    }
    out.push_str("p_a,label\n");
    for (i, (p, o)) in points.iter().zip(outputs).enumerate() {
        out.push_str(&format!("{i},"));
        for v in p {
            out.push_str(&format!("{v:.16e},"));
        }
        out.push_str(&format!("{:.16e},{}\n", o.p_a, o.label));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
