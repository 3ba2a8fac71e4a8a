//! Natural, FGSM-adversarial and PGD-adversarial training with mask
//! enforcement, evaluation, and the prune → reset → retrain pipeline.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackConfig};
use crate::autodiff::Tape;
use crate::data::{self, Augment, Dataset};
use crate::error::{Error, Result};
use crate::nn::{self, ModelSpec, ParamSet};
use crate::optim::{EarlyStop, Schedule, Sgd, SgdConfig};
use crate::prune::{self, Mask, Provenance, Scope, SourceMode, Ticket};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum TrainMode {
    Natural,
    FgsmAt {
        #[serde(default = "default_fgsm")]
        attack: AttackConfig,
    },
    PgdAt {
        #[serde(default)]
        attack: AttackConfig,
    },
}

fn default_fgsm() -> AttackConfig {
    AttackConfig::fgsm(8.0 / 255.0)
}

impl TrainMode {
    pub fn fgsm_at(epsilon: f64) -> Self {
        TrainMode::FgsmAt {
            attack: AttackConfig::fgsm(epsilon),
        }
    }

    /// PGD-`steps` with step size `2.5·ε/steps`.
    pub fn pgd_at(epsilon: f64, steps: usize) -> Self {
        TrainMode::PgdAt {
            attack: pgd_budget(epsilon, steps),
        }
    }

    pub fn attack(&self) -> Option<&AttackConfig> {
        match self {
            TrainMode::Natural => None,
            TrainMode::FgsmAt { attack } | TrainMode::PgdAt { attack } => Some(attack),
        }
    }

    pub fn is_adversarial(&self) -> bool {
        self.attack().is_some()
    }

    pub fn source_mode(&self) -> SourceMode {
        match self {
            TrainMode::Natural => SourceMode::Natural,
            TrainMode::FgsmAt { .. } => SourceMode::FgsmAt,
            TrainMode::PgdAt { .. } => SourceMode::PgdAt,
        }
    }
}

/// PGD-k with random start and step `2.5·ε/k`.
pub fn pgd_budget(epsilon: f64, steps: usize) -> AttackConfig {
    AttackConfig::pgd(epsilon, 2.5 * epsilon / steps as f64, steps)
}

pub const VALIDATION_PGD_STEPS: usize = 10;
pub const REPORTED_PGD_STEPS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub schedule: Schedule,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Early-stopping patience in epochs.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Stop training when early stopping fires; otherwise only record it.
    #[serde(default = "default_true")]
    pub stop_early: bool,
    /// Validation attack; adversarial modes default to PGD-10 at the
    /// training ε.
    #[serde(default)]
    pub val_attack: Option<AttackConfig>,
    /// Reported test attack; adversarial modes default to PGD-20.
    #[serde(default)]
    pub test_attack: Option<AttackConfig>,
    #[serde(default)]
    pub augment: Augment,
    /// Keep a copy of the weights after every epoch.
    #[serde(default)]
    pub keep_snapshots: bool,
}

fn default_batch() -> usize {
    128
}

fn default_patience() -> usize {
    5
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn new(mode: TrainMode, schedule: Schedule) -> Self {
        Self {
            mode,
            schedule,
            batch_size: default_batch(),
            sgd: SgdConfig::default(),
            patience: default_patience(),
            stop_early: true,
            val_attack: None,
            test_attack: None,
            augment: Augment::default(),
            keep_snapshots: false,
        }
    }

    pub fn effective_val_attack(&self) -> Option<AttackConfig> {
        self.val_attack
            .or_else(|| self.mode.attack().map(|a| pgd_budget(a.epsilon, VALIDATION_PGD_STEPS)))
    }

    pub fn effective_test_attack(&self) -> Option<AttackConfig> {
        self.test_attack
            .or_else(|| self.mode.attack().map(|a| pgd_budget(a.epsilon, REPORTED_PGD_STEPS)))
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be at least 1"));
        }
        for a in [self.mode.attack().copied(), self.val_attack, self.test_attack].into_iter().flatten() {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub attack: u64,
}

pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub test: Option<&'a Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_clean: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_robust: Option<f64>,
    /// Largest |w| at a pruned coordinate after this epoch.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pruned_max_abs: Option<f64>,
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the selected checkpoint.
    pub best_epoch: usize,
    /// Epoch at which early stopping fired, if it did.
    pub early_stop_epoch: Option<usize>,
    pub best_val_clean: f64,
    pub best_val_robust: Option<f64>,
    pub test_clean: Option<f64>,
    pub test_robust: Option<f64>,
    #[serde(skip)]
    pub train_seconds: f64,
}

impl RunRecord {
    /// Convergence epoch: where early stopping fired, else the run length.
    pub fn stop_epoch(&self) -> usize {
        self.early_stop_epoch.unwrap_or(self.epochs.len())
    }

    /// One JSON object per epoch; wall-clock time excluded so replays
    /// compare byte for byte.
    pub fn metrics_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("epoch record serializes") + "\n")
            .collect()
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run record serializes") + "\n"
    }

    pub fn timings_json(&self) -> String {
        let per_epoch: Vec<f64> = self.epochs.iter().map(|e| e.wall_seconds).collect();
        serde_json::json!({ "train_seconds": self.train_seconds, "epoch_seconds": per_epoch }).to_string() + "\n"
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_clean,val_robust,wall_seconds\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                e.epoch,
                e.lr,
                e.train_loss,
                e.val_clean,
                e.val_robust.map(|v| v.to_string()).unwrap_or_default(),
                e.wall_seconds
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ParamSet,
    pub last: ParamSet,
    pub record: RunRecord,
    /// Weights after each epoch, when requested.
    pub snapshots: Vec<ParamSet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eval {
    pub clean: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub robust: Option<f64>,
}

/// Clean accuracy and, with an attack, robust accuracy (correct both
/// before and after perturbation) over the whole dataset.
pub fn evaluate(params: &ParamSet, spec: &ModelSpec, dataset: &Dataset, attack: Option<&AttackConfig>, seed: u64) -> Result<Eval> {
    let c = attack::attack_counts(params, params, spec, dataset, attack, seed)?;
    Ok(Eval {
        clean: c.clean_accuracy(),
        robust: attack.map(|_| c.robust_accuracy()),
    })
}

/// Parameter gradients of the mean cross-entropy on one batch.
fn batch_gradients(params: &ParamSet, spec: &ModelSpec, x: Tensor<f32>, labels: &[usize]) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, true);
    let input = tape.leaf(x, false);
    let logits = nn::forward(&mut tape, spec, &vars, input)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let value = tape.value(loss).item()? as f64;
    let mut grads = tape.backward(loss)?;
    let g = vars
        .iter()
        .map(|&v| grads.take(v).ok_or_else(|| Error::contract("parameter gradient missing")))
        .collect::<Result<Vec<_>>>()?;
    Ok((value, g))
}

/// Seed of the reported test-set attack.
pub fn test_eval_seed(seeds: &Seeds) -> u64 {
    seeds.attack ^ 0x7E57
}

fn batch_seed(seeds: &Seeds, epoch: usize, batch: usize) -> u64 {
    let mut r = rng::stream(seeds.attack, &[rng::TAG_ATTACK, epoch as u64, batch as u64]);
    rand::Rng::random(&mut r)
}

/// Trains from `init`. With a mask, `init` must already be masked; pruned
/// coordinates stay exactly zero throughout. Returns the checkpoint with
/// the best validation metric (robust accuracy in adversarial modes).
pub fn train(
    init: &ParamSet,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    mask: Option<&Mask>,
    seeds: Seeds,
    label: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::contract("training needs nonempty train and validation splits"));
    }
    if let Some(m) = mask {
        m.check_aligned(init)?;
        let leak = prune::max_pruned_magnitude(init, m);
        if leak != 0.0 {
            return Err(Error::contract(format!(
                "initial weights are not masked: |w| = {leak} at a pruned coordinate"
            )));
        }
    }
    let val_attack = cfg.effective_val_attack();
    let mut params = init.clone();
    let mut opt = Sgd::new(cfg.sgd);
    let mut es = EarlyStop::new(cfg.patience);
    let mut best = params.clone();
    let mut record = RunRecord {
        label: label.to_string(),
        epochs: Vec::new(),
        best_epoch: 0,
        early_stop_epoch: None,
        best_val_clean: 0.0,
        best_val_robust: None,
        test_clean: None,
        test_robust: None,
        train_seconds: 0.0,
    };
    let mut snapshots = Vec::new();
    let start = Instant::now();

    for epoch in 0..cfg.schedule.total_epochs {
        let epoch_start = Instant::now();
        let lr = cfg.schedule.lr_at(epoch)?;
        let mut loss_sum = 0.0f64;
        for (b, idx) in data::batch_indices(data.train.len(), cfg.batch_size, seeds.data, epoch)?
            .iter()
            .enumerate()
        {
            let batch = data.train.batch(idx)?;
            let x = cfg.augment.apply(&batch.images, seeds.data, epoch, b);
            let x = match cfg.mode.attack() {
                None => x,
                Some(a) => attack::pgd(&params, spec, &x, &batch.labels, a, batch_seed(&seeds, epoch, b))?,
            };
            let (loss, grads) = batch_gradients(&params, spec, x, &batch.labels).map_err(|e| match e {
                Error::NonFinite { context } => Error::NonFinite {
                    context: format!("{context} (epoch {epoch}, batch {b}, lr {lr})"),
                },
                other => other,
            })?;
            loss_sum += loss * idx.len() as f64;
            opt.step(&mut params, &grads, lr, mask)?;
        }
        let val_seed = seeds.attack ^ 0x5EED_0000 ^ epoch as u64;
        let val = evaluate(&params, spec, data.val, val_attack.as_ref(), val_seed)?;
        let metric = val.robust.unwrap_or(val.clean);
        let improved = es.best.is_none_or(|b| metric > b);
        let stop = es.update(epoch, metric)?;
        if improved {
            best = params.clone();
            record.best_epoch = epoch;
        }
        record.best_val_clean = record.best_val_clean.max(val.clean);
        if let Some(r) = val.robust {
            record.best_val_robust = Some(record.best_val_robust.map_or(r, |b: f64| b.max(r)));
        }
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / data.train.len() as f64,
            val_clean: val.clean,
            val_robust: val.robust,
            pruned_max_abs: mask.map(|m| prune::max_pruned_magnitude(&params, m)),
            wall_seconds: epoch_start.elapsed().as_secs_f64(),
        });
        if cfg.keep_snapshots {
            snapshots.push(params.clone());
        }
        if stop && record.early_stop_epoch.is_none() {
            record.early_stop_epoch = Some(epoch);
            if cfg.stop_early {
                break;
            }
        }
    }
    record.train_seconds = start.elapsed().as_secs_f64();

    if let Some(test) = data.test {
        let test_attack = cfg.effective_test_attack();
        let t = evaluate(&best, spec, test, test_attack.as_ref(), test_eval_seed(&seeds))?;
        record.test_clean = Some(t.clean);
        record.test_robust = t.robust;
    }
    Ok(TrainOutcome {
        best,
        last: params,
        record,
        snapshots,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub ratio: f64,
    #[serde(default)]
    pub scope: Scope,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    pub prune: TrainConfig,
    pub retrain: TrainConfig,
    /// Also retrain the mask from a fresh initialization.
    #[serde(default)]
    pub control: bool,
}

fn default_rounds() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub pruning_seconds: f64,
    pub training_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub init: ParamSet,
    pub ticket: Ticket,
    pub prune_run: TrainOutcome,
    pub retrain_run: TrainOutcome,
    pub control_run: Option<TrainOutcome>,
    pub timing: Timing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSeeds {
    pub init: u64,
    pub data: u64,
    pub attack: u64,
    /// Initialization of the random-reinit control.
    pub control: u64,
}

/// Full training → magnitude pruning → reset to the saved init → retraining.
pub fn boost_pipeline(spec: &ModelSpec, data: &TrainData<'_>, cfg: &PipelineConfig, seeds: PipelineSeeds) -> Result<PipelineOutcome> {
    let init = nn::init(spec, seeds.init)?;
    let train_seeds = Seeds {
        data: seeds.data,
        attack: seeds.attack,
    };
    let provenance = Provenance {
        ratio: cfg.ratio,
        scope: cfg.scope,
        source_mode: cfg.prune.mode.source_mode(),
        source_lr: cfg.prune.schedule.base_lr,
        rounds: cfg.rounds,
        init_seed: seeds.init,
        data_seed: seeds.data,
        note: String::new(),
    };

    let prune_start = Instant::now();
    let mut last_prune_run = None;
    let ticket = if cfg.rounds <= 1 {
        let run = train(&init, spec, &cfg.prune, data, None, train_seeds, "prune")?;
        let t = prune::make_ticket(spec, &init, &run.best, cfg.ratio, cfg.scope, provenance)?;
        last_prune_run = Some(run);
        t
    } else {
        let (t, _) = prune::iterative_prune(
            spec,
            &init,
            |start, mask, round| {
                let m = (round > 1).then_some(mask);
                let run = train(start, spec, &cfg.prune, data, m, train_seeds, &format!("prune-r{round}"))?;
                let best = run.best.clone();
                last_prune_run = Some(run);
                Ok(best)
            },
            cfg.ratio,
            cfg.rounds,
            cfg.scope,
            provenance,
        )?;
        t
    };
    let pruning_seconds = prune_start.elapsed().as_secs_f64();
    let prune_run = last_prune_run.expect("at least one pruning round ran");

    let retrain_start = Instant::now();
    let retrain_run = train(&ticket.init, spec, &cfg.retrain, data, Some(&ticket.mask), train_seeds, "retrain")?;
    let training_seconds = retrain_start.elapsed().as_secs_f64();

    let control_run = if cfg.control {
        let control = ticket.reinitialized(seeds.control)?;
        Some(train(&control.init, spec, &cfg.retrain, data, Some(&control.mask), train_seeds, "control")?)
    } else {
        None
    };
    Ok(PipelineOutcome {
        init,
        ticket,
        prune_run,
        retrain_run,
        control_run,
        timing: Timing {
            pruning_seconds,
            training_seconds,
            total_seconds: pruning_seconds + training_seconds,
        },
    })
}
