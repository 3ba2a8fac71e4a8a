//! ℓ∞ input-space attacks: FGSM, PGD-k with random start, margin-loss PGD,
//! and transfer evaluation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{self, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, ModelSpec, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

/// Inclusive input bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub lo: f32,
    pub hi: f32,
}

impl Default for Domain {
    fn default() -> Self {
        Self { lo: 0.0, hi: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AttackLoss {
    #[default]
    CrossEntropy,
    /// Drives `max(z_y - max_{j != y} z_j, -kappa)` down.
    CwMargin {
        #[serde(default)]
        kappa: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    #[serde(default)]
    pub loss: AttackLoss,
    #[serde(default)]
    pub domain: Domain,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::pgd(8.0 / 255.0, 2.0 / 255.0, 10)
    }
}

impl AttackConfig {
    /// Single step of size ε, no random start.
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            epsilon,
            step_size: epsilon,
            steps: 1,
            random_start: false,
            loss: AttackLoss::CrossEntropy,
            domain: Domain::default(),
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, steps: usize) -> Self {
        Self {
            epsilon,
            step_size,
            steps,
            random_start: true,
            loss: AttackLoss::CrossEntropy,
            domain: Domain::default(),
        }
    }

    pub fn with_loss(self, loss: AttackLoss) -> Self {
        Self { loss, ..self }
    }

    pub fn with_steps(self, steps: usize) -> Self {
        Self { steps, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::contract(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::contract(format!("step_size must be > 0, got {}", self.step_size)));
        }
        if self.steps == 0 {
            return Err(Error::contract("attack needs at least one step"));
        }
        if !(self.domain.lo < self.domain.hi) {
            return Err(Error::contract("attack domain must satisfy lo < hi"));
        }
        if let AttackLoss::CwMargin { kappa } = self.loss {
            if !(kappa >= 0.0 && kappa.is_finite()) {
                return Err(Error::contract(format!("kappa must be >= 0, got {kappa}")));
            }
        }
        Ok(())
    }
}

/// Clamp into the ε-ball around `orig`, then into the domain.
pub fn project(candidate: &Tensor<f32>, orig: &Tensor<f32>, epsilon: f64, domain: Domain) -> Result<Tensor<f32>> {
    if candidate.shape() != orig.shape() {
        return Err(Error::Shape {
            op: "project",
            lhs: candidate.shape().to_vec(),
            rhs: orig.shape().to_vec(),
        });
    }
    let eps = epsilon as f32;
    let data = candidate
        .data()
        .iter()
        .zip(orig.data())
        .map(|(&c, &o)| project_one(c, o, eps, domain))
        .collect();
    Tensor::new(candidate.shape().to_vec(), data)
}

#[inline]
fn project_one(c: f32, o: f32, eps: f32, domain: Domain) -> f32 {
    c.clamp(o - eps, o + eps).clamp(domain.lo, domain.hi)
}

/// `sign` with `sign(0) = 0`.
#[inline]
pub fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the attack objective with respect to the input batch.
/// The objective is ascended: cross-entropy, or the negated margin loss.
pub fn input_gradient(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor<f32>,
    labels: &[usize],
    loss: AttackLoss,
) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, false);
    let input = tape.leaf(x.clone(), true);
    let logits = nn::forward(&mut tape, spec, &vars, input)?;
    let objective = match loss {
        AttackLoss::CrossEntropy => tape.softmax_cross_entropy(logits, labels)?,
        AttackLoss::CwMargin { kappa } => {
            let m = tape.margin_loss(logits, labels, kappa)?;
            tape.scale(m, -1.0)?
        }
    };
    let mut grads = tape.backward(objective)?;
    let g = grads
        .take(input)
        .ok_or_else(|| Error::contract("input gradient missing"))?;
    if !g.all_finite() {
        return Err(Error::NonFinite {
            context: "attack input gradient".into(),
        });
    }
    Ok(g)
}

fn ascend(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor<f32>,
    current: &Tensor<f32>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Tensor<f32>> {
    let g = input_gradient(params, spec, current, labels, cfg.loss)?;
    let (alpha, eps) = (cfg.step_size as f32, cfg.epsilon as f32);
    let data = current
        .data()
        .iter()
        .zip(g.data())
        .zip(x.data())
        .map(|((&c, &gi), &o)| project_one(c + alpha * sign(gi), o, eps, cfg.domain))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// One signed step of size `cfg.step_size` from `x`, projected.
/// `cfg.steps` and `cfg.random_start` are ignored.
pub fn fgsm(params: &ParamSet, spec: &ModelSpec, x: &Tensor<f32>, labels: &[usize], cfg: &AttackConfig) -> Result<Tensor<f32>> {
    cfg.validate()?;
    ascend(params, spec, x, x, labels, cfg)
}

/// PGD-k. The random start is drawn from a stream keyed by `seed`.
pub fn pgd(
    params: &ParamSet,
    spec: &ModelSpec,
    x: &Tensor<f32>,
    labels: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    let mut current = if cfg.random_start && cfg.epsilon > 0.0 {
        let mut r = rng::stream(seed, &[rng::TAG_ATTACK]);
        let eps = cfg.epsilon as f32;
        let data = x
            .data()
            .iter()
            .map(|&o| project_one(o + r.random_range(-eps..=eps), o, eps, cfg.domain))
            .collect();
        Tensor::new(x.shape().to_vec(), data)?
    } else {
        x.clone()
    };
    for _ in 0..cfg.steps {
        current = ascend(params, spec, x, &current, labels, cfg)?;
    }
    Ok(current)
}

/// Raw margin `z_y - max_{j != y} z_j` for every row of a `(B, k)` logit
/// matrix; negative iff the row is misclassified.
pub fn cw_margin(logits: &Tensor<f32>, labels: &[usize]) -> Result<Vec<f64>> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() || logits.shape()[1] < 2 {
        return Err(Error::contract(format!(
            "cw_margin needs (batch, k >= 2) logits for {} labels, got {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            if y >= k {
                return Err(Error::contract(format!("label {y} out of range for {k} classes")));
            }
            let runner = crate::autodiff::runner_up(row, y);
            Ok(row[y] as f64 - row[runner] as f64)
        })
        .collect()
}

/// Correct-prediction counts for one pass over `dataset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub total: usize,
    pub clean: usize,
    /// Examples classified correctly both before and after perturbation.
    pub robust: usize,
}

impl Counts {
    pub fn clean_accuracy(&self) -> f64 {
        self.clean as f64 / self.total as f64
    }

    pub fn robust_accuracy(&self) -> f64 {
        self.robust as f64 / self.total as f64
    }
}

pub const EVAL_BATCH: usize = 500;

/// Crafts adversarial examples against `source` and scores `target` on
/// them. Batches run in parallel with per-batch RNG streams, so the result
/// does not depend on the thread count.
pub fn attack_counts(
    source: &ParamSet,
    target: &ParamSet,
    spec: &ModelSpec,
    dataset: &Dataset,
    cfg: Option<&AttackConfig>,
    seed: u64,
) -> Result<Counts> {
    if dataset.is_empty() {
        return Err(Error::contract("cannot evaluate on an empty dataset"));
    }
    source.check_aligned(target)?;
    if let Some(c) = cfg {
        c.validate()?;
    }
    let chunks = data::sequential_indices(dataset.len(), EVAL_BATCH);
    let per_batch: Vec<Result<Counts>> = chunks
        .par_iter()
        .enumerate()
        .map(|(b, idx)| {
            let batch = dataset.batch(idx)?;
            let clean_pred = nn::predict(target, spec, &batch.images)?.argmax_rows()?;
            let clean_ok: Vec<bool> = clean_pred.iter().zip(&batch.labels).map(|(p, y)| p == y).collect();
            let robust = match cfg {
                None => 0,
                Some(c) => {
                    let adv = pgd(source, spec, &batch.images, &batch.labels, c, rng_seed(seed, b))?;
                    let adv_pred = nn::predict(target, spec, &adv)?.argmax_rows()?;
                    adv_pred
                        .iter()
                        .zip(&batch.labels)
                        .zip(&clean_ok)
                        .filter(|((p, y), ok)| p == y && **ok)
                        .count()
                }
            };
            Ok(Counts {
                total: idx.len(),
                clean: clean_ok.iter().filter(|&&b| b).count(),
                robust,
            })
        })
        .collect();
    let mut total = Counts::default();
    for c in per_batch {
        let c = c?;
        total.total += c.total;
        total.clean += c.clean;
        total.robust += c.robust;
    }
    Ok(total)
}

fn rng_seed(seed: u64, batch: usize) -> u64 {
    seed ^ (rng::TAG_EVAL << 56) ^ (batch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Accuracy of `target` on adversarial examples crafted against `source`.
pub fn transfer_eval(
    source: &ParamSet,
    target: &ParamSet,
    spec: &ModelSpec,
    dataset: &Dataset,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<f64> {
    Ok(attack_counts(source, target, spec, dataset, Some(cfg), seed)?.robust_accuracy())
}
