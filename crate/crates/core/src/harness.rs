//! Experiment driver: schema-versioned run configs, the run ledger with
//! replay checking, sweeps, distance series and transfer matrices.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{self, AttackConfig};
use crate::container;
use crate::data::{self, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{self, Checkpoint, ModelSpec};
use crate::optim::Schedule;
use crate::prune::{self, Ticket};
use crate::train::{self, PipelineConfig, PipelineSeeds, RunRecord, Seeds, TrainConfig, TrainData, TrainOutcome};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "BOOSTER_OUTPUT_ROOT";
pub const MNIST_DIR_ENV: &str = "BOOSTER_MNIST_DIR";
pub const DEFAULT_MNIST_DIR: &str = "data/mnist";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// One training run from a fresh initialization.
    Train,
    /// Train → prune → reset → retrain.
    TicketPipeline,
    /// The ticket pipeline plus the random-reinitialization control.
    LotteryBaseline,
}

impl Experiment {
    fn tag(self) -> &'static str {
        match self {
            Experiment::Train => "train",
            Experiment::TicketPipeline => "ticket_pipeline",
            Experiment::LotteryBaseline => "lottery_baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Mnist,
    Cifar,
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub k: usize,
    pub n_per_class: usize,
    pub dim: usize,
    pub margin: f64,
    /// Fraction of the generated examples held out as the test split.
    #[serde(default = "default_blob_test")]
    pub test_fraction: f64,
}

fn default_blob_test() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset directory; MNIST falls back to `$BOOSTER_MNIST_DIR`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Seeded subset of the training split taken before validation hold-out.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blobs: Option<BlobsConfig>,
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedConfig {
    pub init: u64,
    pub data: u64,
    pub attack: u64,
    /// Initialization of the random-reinit control; defaults to `init + 1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<u64>,
}

impl SeedConfig {
    pub fn uniform(seed: u64) -> Self {
        Self {
            init: seed,
            data: seed,
            attack: seed,
            control: None,
        }
    }

    fn pipeline(&self) -> PipelineSeeds {
        PipelineSeeds {
            init: self.init,
            data: self.data,
            attack: self.attack,
            control: self.control.unwrap_or(self.init.wrapping_add(1)),
        }
    }

    fn train(&self) -> Seeds {
        Seeds {
            data: self.data,
            attack: self.attack,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub seeds: SeedConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pipeline: Option<PipelineConfig>,
    /// Run directory relative to the output root; derived from the config
    /// hash when unset. Not part of the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = toml::Deserializer::parse(text).map_err(|e| Error::Config {
        path: "<document>".into(),
        message: e.to_string().trim().to_string(),
    })?;
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
        path: e.path().to_string(),
        message: e.inner().message().to_string(),
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn read_config_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| config_error("<file>", format!("cannot read {}: {e}", path.display())))
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = parse_toml(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_config_text(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Semantic checks beyond the schema; failures are config errors.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_error(
                "schema_version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        fn wrap(path: &'static str) -> impl Fn(Error) -> Error {
            move |e| config_error(path, e.to_string())
        }
        self.model.validate().map_err(wrap("model"))?;
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(config_error("data.val_fraction", "must lie in (0, 1)"));
        }
        if self.data.source == DataSource::Blobs && self.data.blobs.is_none() {
            return Err(config_error("data.blobs", "blobs source needs a [data.blobs] table"));
        }
        match self.experiment {
            Experiment::Train => {
                let t = self
                    .train
                    .as_ref()
                    .ok_or_else(|| config_error("train", "experiment `train` needs a [train] table"))?;
                t.validate().map_err(wrap("train"))?;
            }
            Experiment::TicketPipeline | Experiment::LotteryBaseline => {
                let p = self.pipeline.as_ref().ok_or_else(|| {
                    config_error("pipeline", format!("experiment `{}` needs a [pipeline] table", self.experiment.tag()))
                })?;
                if !(0.0..1.0).contains(&p.ratio) {
                    return Err(config_error("pipeline.ratio", format!("must lie in [0, 1), got {}", p.ratio)));
                }
                if p.rounds == 0 {
                    return Err(config_error("pipeline.rounds", "must be at least 1"));
                }
                p.prune.validate().map_err(wrap("pipeline.prune"))?;
                p.retrain.validate().map_err(wrap("pipeline.retrain"))?;
            }
        }
        Ok(())
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = SeedConfig::uniform(seed);
        self
    }

    /// SHA-256 (hex) of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        hex_digest(serde_json::to_string(&c).expect("run config serializes").as_bytes())
    }

    fn phases(&self) -> Vec<(&'static str, &TrainConfig)> {
        match (&self.train, &self.pipeline) {
            (Some(t), _) if self.experiment == Experiment::Train => vec![("train", t)],
            (_, Some(p)) => {
                let mut v = vec![("prune", &p.prune), ("retrain", &p.retrain)];
                if self.control() {
                    v.push(("control", &p.retrain));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    fn control(&self) -> bool {
        self.experiment == Experiment::LotteryBaseline || self.pipeline.as_ref().is_some_and(|p| p.control)
    }

    /// Per-phase learning-rate table, as printed by a dry run.
    pub fn schedule_table(&self) -> Result<String> {
        let mut out = String::from("phase,epoch,lr\n");
        for (phase, t) in self.phases() {
            for e in 0..t.schedule.total_epochs {
                writeln!(out, "{phase},{e},{}", t.schedule.lr_at(e)?).expect("write to string");
            }
        }
        Ok(out)
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct LoadedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl LoadedData {
    pub fn view(&self) -> TrainData<'_> {
        TrainData {
            train: &self.train,
            val: &self.val,
            test: Some(&self.test),
        }
    }
}

pub fn mnist_dir(cfg_dir: Option<&Path>) -> PathBuf {
    cfg_dir
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(MNIST_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_MNIST_DIR))
}

/// Loads train/validation/test splits; the validation split is carved out
/// of training data with the data seed.
pub fn load_data(cfg: &DataConfig, data_seed: u64) -> Result<LoadedData> {
    let (pool, test) = match cfg.source {
        DataSource::Mnist => data::load_mnist(&mnist_dir(cfg.dir.as_deref()))?,
        DataSource::Cifar => {
            let dir = cfg
                .dir
                .clone()
                .ok_or_else(|| config_error("data.dir", "cifar source needs a directory"))?;
            let train_files: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
            (
                data::load_cifar(&train_files, Split::Train)?,
                data::load_cifar(&[dir.join("test_batch.bin")], Split::Test)?,
            )
        }
        DataSource::Blobs => {
            let b = cfg.blobs.as_ref().expect("validated");
            let all = data::synth_blobs(b.k, b.n_per_class, b.dim, b.margin, data_seed)?;
            let (pool, test) = all.split_validation(b.test_fraction, data_seed ^ 0x7E57)?;
            (pool, test.with_split(Split::Test))
        }
    };
    let pool = match cfg.train_subset {
        Some(n) => pool.subsample(n, data_seed)?,
        None => pool,
    };
    let test = match cfg.test_subset {
        Some(n) => test.subsample(n, data_seed)?,
        None => test,
    };
    let (train, val) = pool.split_validation(cfg.val_fraction, data_seed)?;
    Ok(LoadedData { train, val, test })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    /// Compared byte for byte on replay; wall-clock files are not.
    pub compared: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub experiment: Experiment,
    pub model: String,
    pub tool_version: String,
    pub git_commit: String,
    pub files: Vec<ManifestEntry>,
}

struct Outputs {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Outputs {
    fn write(&mut self, rel: &str, bytes: &[u8], compared: bool) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        container::write_file_atomic(&path, bytes)?;
        self.entries.push(ManifestEntry {
            path: rel.to_string(),
            sha256: hex_digest(bytes),
            compared,
        });
        Ok(())
    }
}

/// How `execute` treated the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LedgerStatus {
    Fresh,
    /// The run already existed and the rerun matched it byte for byte.
    Replayed,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub dir: PathBuf,
    pub config_hash: String,
    pub status: LedgerStatus,
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMeta {
    pub config_hash: String,
    pub phase: String,
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub seeds: Seeds,
    pub eval_seed: u64,
}

fn phase_record_json(hash: &str, record: &RunRecord) -> String {
    let mut v = serde_json::to_value(record).expect("record serializes");
    v["config_hash"] = serde_json::Value::String(hash.to_string());
    serde_json::to_string_pretty(&v).expect("json") + "\n"
}

fn epochs_jsonl(hash: &str, record: &RunRecord) -> String {
    record
        .epochs
        .iter()
        .map(|e| {
            let mut v = serde_json::to_value(e).expect("epoch serializes");
            v["config_hash"] = serde_json::Value::String(hash.to_string());
            v.to_string() + "\n"
        })
        .collect()
}

fn checkpoint(spec: &ModelSpec, seed: u64, params: &nn::ParamSet) -> Vec<u8> {
    Checkpoint {
        spec: spec.clone(),
        seed,
        params: params.clone(),
    }
    .to_bytes()
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("checkpoints/epoch-{epoch:03}.ckpt")
}

#[allow(clippy::too_many_arguments)]
fn write_phase(
    out: &mut Outputs,
    hash: &str,
    phase: &str,
    spec: &ModelSpec,
    init_seed: u64,
    tc: &TrainConfig,
    seeds: Seeds,
    run: &TrainOutcome,
) -> Result<()> {
    let meta = PhaseMeta {
        config_hash: hash.to_string(),
        phase: phase.to_string(),
        spec: spec.clone(),
        train: tc.clone(),
        seeds,
        eval_seed: train::test_eval_seed(&seeds),
    };
    out.write(&format!("{phase}/phase.json"), (serde_json::to_string_pretty(&meta)? + "\n").as_bytes(), true)?;
    out.write(&format!("{phase}/record.json"), phase_record_json(hash, &run.record).as_bytes(), true)?;
    out.write(&format!("{phase}/epochs.jsonl"), epochs_jsonl(hash, &run.record).as_bytes(), true)?;
    out.write(&format!("{phase}/epochs.csv"), run.record.to_csv().as_bytes(), false)?;
    out.write(&format!("{phase}/timings.json"), run.record.timings_json().as_bytes(), false)?;
    out.write(&format!("{phase}/best.ckpt"), &checkpoint(spec, init_seed, &run.best), true)?;
    out.write(&format!("{phase}/last.ckpt"), &checkpoint(spec, init_seed, &run.last), true)?;
    for (e, snap) in run.snapshots.iter().enumerate() {
        out.write(&format!("{phase}/{}", epoch_checkpoint_name(e)), &checkpoint(spec, init_seed, snap), true)?;
    }
    Ok(())
}

fn phase_summary(r: &RunRecord) -> serde_json::Value {
    serde_json::json!({
        "epochs": r.epochs.len(),
        "best_epoch": r.best_epoch,
        "early_stop_epoch": r.early_stop_epoch,
        "stop_epoch": r.stop_epoch(),
        "best_val_clean": r.best_val_clean,
        "best_val_robust": r.best_val_robust,
        "test_clean": r.test_clean,
        "test_robust": r.test_robust,
    })
}

/// Runs the experiment into `dir` and returns its manifest and summary.
fn run_into(cfg: &RunConfig, hash: &str, dir: &Path) -> Result<(Manifest, serde_json::Value)> {
    let loaded = load_data(&cfg.data, cfg.seeds.data)?;
    let data = loaded.view();
    let spec = &cfg.model;
    let mut out = Outputs {
        root: dir.to_path_buf(),
        entries: Vec::new(),
    };
    out.write("config.toml", cfg.to_toml().as_bytes(), true)?;
    out.write("config.json", (serde_json::to_string_pretty(cfg)? + "\n").as_bytes(), true)?;

    let mut summary = serde_json::json!({ "config_hash": hash, "experiment": cfg.experiment, "model": spec.id() });
    match cfg.experiment {
        Experiment::Train => {
            let tc = cfg.train.as_ref().expect("validated");
            let init = nn::init(spec, cfg.seeds.init)?;
            out.write("init.ckpt", &checkpoint(spec, cfg.seeds.init, &init), true)?;
            let run = train::train(&init, spec, tc, &data, None, cfg.seeds.train(), "train")?;
            write_phase(&mut out, hash, "train", spec, cfg.seeds.init, tc, cfg.seeds.train(), &run)?;
            summary["train"] = phase_summary(&run.record);
            out.write(
                "timing.json",
                (serde_json::json!({ "training_seconds": run.record.train_seconds }).to_string() + "\n").as_bytes(),
                false,
            )?;
        }
        Experiment::TicketPipeline | Experiment::LotteryBaseline => {
            let mut pc = cfg.pipeline.clone().expect("validated");
            pc.control = cfg.control();
            let seeds = cfg.seeds.pipeline();
            let res = train::boost_pipeline(spec, &data, &pc, seeds)?;
            out.write("init.ckpt", &checkpoint(spec, seeds.init, &res.init), true)?;
            out.write("ticket.tkt", &res.ticket.to_bytes(), true)?;
            let ts = cfg.seeds.train();
            write_phase(&mut out, hash, "prune", spec, seeds.init, &pc.prune, ts, &res.prune_run)?;
            write_phase(&mut out, hash, "retrain", spec, seeds.init, &pc.retrain, ts, &res.retrain_run)?;
            summary["prune"] = phase_summary(&res.prune_run.record);
            summary["retrain"] = phase_summary(&res.retrain_run.record);
            summary["ticket_sparsity"] = res.ticket.mask.sparsity().into();
            if let Some(c) = &res.control_run {
                write_phase(&mut out, hash, "control", spec, seeds.control, &pc.retrain, ts, c)?;
                summary["control"] = phase_summary(&c.record);
            }
            out.write("timing.json", (serde_json::to_string_pretty(&res.timing)? + "\n").as_bytes(), false)?;
            summary["timing"] = serde_json::to_value(res.timing)?;
        }
    }
    let mut compared_summary = summary.clone();
    if let Some(obj) = compared_summary.as_object_mut() {
        obj.remove("timing");
    }
    out.write("summary.json", (serde_json::to_string_pretty(&compared_summary)? + "\n").as_bytes(), true)?;

    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_hash: hash.to_string(),
        experiment: cfg.experiment,
        model: spec.id(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        git_commit: git_commit(),
        files: out.entries,
    };
    container::write_file_atomic(&dir.join("manifest.json"), (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
    Ok((manifest, summary))
}

fn git_commit() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short=12", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// Exclusive ledger lock held for the lifetime of the value.
struct LedgerLock(PathBuf);

impl LedgerLock {
    fn acquire(path: PathBuf) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::contract(format!(
                "ledger entry is locked by another writer ({})",
                path.display()
            ))),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

impl Drop for LedgerLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub fn run_dir(cfg: &RunConfig, root: &Path) -> PathBuf {
    match &cfg.output_dir {
        Some(d) => root.join(d),
        None => root.join(format!("{}-{}", cfg.experiment.tag(), &cfg.hash()[..12])),
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    Ok(serde_json::from_str(&read_text(&path)?)?)
}

/// Runs `cfg` under `root`. An existing entry for the same config is rerun
/// in a scratch directory and compared byte for byte; any difference is a
/// [`Error::ReplayMismatch`] and the existing entry is left untouched.
pub fn execute(cfg: &RunConfig, root: &Path) -> Result<RunReport> {
    cfg.validate()?;
    let hash = cfg.hash();
    let dir = run_dir(cfg, root);
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| hash.clone());
    let lock_path = dir.with_file_name(format!(".{name}.lock"));
    if let Some(parent) = lock_path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let _lock = LedgerLock::acquire(lock_path)?;

    if dir.join("manifest.json").exists() {
        let existing = read_manifest(&dir)?;
        if existing.config_hash != hash {
            return Err(Error::ReplayMismatch(format!(
                "{}: directory holds config {} but this config hashes to {hash}",
                dir.display(),
                existing.config_hash
            )));
        }
        let scratch = dir.with_file_name(format!(".{name}.replay"));
        let _ = fs::remove_dir_all(&scratch);
        let result = run_into(cfg, &hash, &scratch);
        let outcome = result.and_then(|(fresh, summary)| {
            compare_manifests(&dir, &existing, &fresh)?;
            Ok(summary)
        });
        let _ = fs::remove_dir_all(&scratch);
        let summary = outcome?;
        return Ok(RunReport {
            dir,
            config_hash: hash,
            status: LedgerStatus::Replayed,
            summary,
        });
    }

    let partial = dir.with_file_name(format!(".{name}.partial"));
    let _ = fs::remove_dir_all(&partial);
    let (_, summary) = run_into(cfg, &hash, &partial)?;
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::rename(&partial, &dir).map_err(|e| Error::io(&dir, e))?;
    Ok(RunReport {
        dir,
        config_hash: hash,
        status: LedgerStatus::Fresh,
        summary,
    })
}

fn compare_manifests(dir: &Path, existing: &Manifest, fresh: &Manifest) -> Result<()> {
    let mut diffs = Vec::new();
    for entry in fresh.files.iter().filter(|e| e.compared) {
        let on_disk = fs::read(dir.join(&entry.path)).ok().map(|b| hex_digest(&b));
        let recorded = existing.files.iter().find(|e| e.path == entry.path).map(|e| &e.sha256);
        if on_disk.as_ref() != Some(&entry.sha256) || recorded != Some(&entry.sha256) {
            diffs.push(entry.path.clone());
        }
    }
    for entry in existing.files.iter().filter(|e| e.compared) {
        if !fresh.files.iter().any(|f| f.path == entry.path) {
            diffs.push(entry.path.clone());
        }
    }
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(Error::ReplayMismatch(format!("{}: {}", dir.display(), diffs.join(", "))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LearningRate,
    PruningRatio,
    /// Width multiplier of the model.
    Capacity,
    EpochBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub schema_version: u32,
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub base: RunConfig,
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: SweepSpec = parse_toml(text)?;
        if s.schema_version != SCHEMA_VERSION {
            return Err(config_error("schema_version", format!("unsupported schema version {}", s.schema_version)));
        }
        if s.values.is_empty() {
            return Err(config_error("values", "sweep needs at least one value"));
        }
        s.base.validate().map_err(|e| match e {
            Error::Config { path, message } => config_error(&format!("base.{path}"), message),
            other => other,
        })?;
        for (i, &v) in s.values.iter().enumerate() {
            s.point(v).map_err(|e| config_error(&format!("values[{i}]"), e.to_string()))?;
        }
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&read_config_text(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("sweep serializes")
    }

    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("sweep serializes").as_bytes())
    }

    fn primary(cfg: &mut RunConfig) -> &mut TrainConfig {
        match cfg.experiment {
            Experiment::Train => cfg.train.as_mut().expect("validated"),
            _ => &mut cfg.pipeline.as_mut().expect("validated").retrain,
        }
    }

    fn primary_phase(&self) -> &'static str {
        match self.base.experiment {
            Experiment::Train => "train",
            _ => "retrain",
        }
    }

    /// The base config with the axis set to `value`.
    pub fn point(&self, value: f64) -> Result<RunConfig> {
        let mut cfg = self.base.clone();
        cfg.output_dir = None;
        let whole = |v: f64, what: &str| -> Result<usize> {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::contract(format!("{what} must be a positive integer, got {v}")))
            }
        };
        match self.axis {
            SweepAxis::LearningRate => match cfg.experiment {
                Experiment::Train => cfg.train.as_mut().expect("validated").schedule.base_lr = value,
                _ => {
                    let p = cfg.pipeline.as_mut().expect("validated");
                    p.prune.schedule.base_lr = value;
                    p.retrain.schedule.warmup_start_lr = value;
                }
            },
            SweepAxis::PruningRatio => {
                cfg.pipeline
                    .as_mut()
                    .ok_or_else(|| Error::contract("pruning_ratio sweeps need a pipeline experiment"))?
                    .ratio = value
            }
            SweepAxis::Capacity => cfg.model.width = whole(value, "capacity")?,
            SweepAxis::EpochBudget => Self::primary(&mut cfg).schedule.total_epochs = whole(value, "epoch budget")?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn axis_tag(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::LearningRate => "learning_rate",
        SweepAxis::PruningRatio => "pruning_ratio",
        SweepAxis::Capacity => "capacity",
        SweepAxis::EpochBudget => "epoch_budget",
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub value: f64,
    pub dir: Option<PathBuf>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub dir: PathBuf,
    pub csv: PathBuf,
    pub points: Vec<SweepPoint>,
}

/// Runs every point (in parallel on the current rayon pool; each point
/// trains single-threaded) and writes `sweep.csv`. A failing point is
/// recorded and the sweep continues.
pub fn execute_sweep(spec: &SweepSpec, root: &Path) -> Result<SweepReport> {
    let dir = root.join(format!("sweep-{}", &spec.hash()[..12]));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    container::write_file_atomic(&dir.join("sweep.toml"), spec.to_toml().as_bytes())?;
    let tag = axis_tag(spec.axis);
    let results: Vec<(f64, Result<RunReport>)> = spec
        .values
        .par_iter()
        .map(|&v| {
            let r = spec.point(v).and_then(|mut cfg| {
                cfg.output_dir = Some(PathBuf::from(format!("points/{tag}={v}")));
                execute(&cfg, &dir)
            });
            (v, r)
        })
        .collect();

    let phase = spec.primary_phase();
    let mut csv = String::from(
        "axis,value,config_hash,phase,epoch,lr,train_loss,val_clean,val_robust,test_clean,test_robust,status\n",
    );
    let mut points = Vec::new();
    for (v, r) in results {
        match r.and_then(|rep| read_record(&rep.dir.join(phase)).map(|rec| (rep, rec))) {
            Ok((rep, rec)) => {
                let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
                for e in &rec.epochs {
                    writeln!(
                        csv,
                        "{tag},{v},{},{phase},{},{},{},{},{},{},{},ok",
                        rep.config_hash,
                        e.epoch,
                        e.lr,
                        e.train_loss,
                        e.val_clean,
                        opt(e.val_robust),
                        opt(rec.test_clean),
                        opt(rec.test_robust)
                    )
                    .expect("write to string");
                }
                points.push(SweepPoint {
                    value: v,
                    dir: Some(rep.dir),
                    error: None,
                });
            }
            Err(e) => {
                let msg = e.to_string().replace([',', '\n'], ";");
                writeln!(csv, "{tag},{v},,{phase},,,,,,,,error: {msg}").expect("write to string");
                points.push(SweepPoint {
                    value: v,
                    dir: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let csv_path = dir.join("sweep.csv");
    container::write_file_atomic(&csv_path, csv.as_bytes())?;
    Ok(SweepReport {
        dir,
        csv: csv_path,
        points,
    })
}

pub fn read_record(phase_dir: &Path) -> Result<RunRecord> {
    let path = phase_dir.join("record.json");
    Ok(serde_json::from_str(&read_text(&path)?)?)
}

pub fn read_phase_meta(phase_dir: &Path) -> Result<PhaseMeta> {
    let path = phase_dir.join("phase.json");
    Ok(serde_json::from_str(&read_text(&path)?)?)
}

fn load_epoch_checkpoints(phase_dir: &Path, epochs: usize) -> Result<Vec<Checkpoint>> {
    let missing: Vec<String> = (0..epochs)
        .filter(|&e| !phase_dir.join(epoch_checkpoint_name(e)).exists())
        .map(|e| e.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingCheckpoints(format!(
            "{} lacks epochs [{}] (train with keep_snapshots = true)",
            phase_dir.display(),
            missing.join(", ")
        )));
    }
    (0..epochs)
        .map(|e| Checkpoint::load(&phase_dir.join(epoch_checkpoint_name(e))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceRow {
    pub epoch: usize,
    pub distance: f64,
    pub full_val_clean: f64,
    pub pruned_val_clean: f64,
    pub full_val_robust: Option<f64>,
    pub pruned_val_robust: Option<f64>,
}

/// Relative ℓ2 distance between two saved trajectories at every common
/// epoch, alongside both validation curves.
pub fn distance_series(full_dir: &Path, pruned_dir: &Path) -> Result<Vec<DistanceRow>> {
    let (rf, rp) = (read_record(full_dir)?, read_record(pruned_dir)?);
    let common = rf.epochs.len().min(rp.epochs.len());
    let full = load_epoch_checkpoints(full_dir, common)?;
    let pruned = load_epoch_checkpoints(pruned_dir, common)?;
    let fs_: Vec<_> = full.into_iter().map(|c| c.params).collect();
    let ps: Vec<_> = pruned.into_iter().map(|c| c.params).collect();
    let d = prune::distance_series(&fs_, &ps)?;
    Ok((0..common)
        .map(|e| DistanceRow {
            epoch: e,
            distance: d[e],
            full_val_clean: rf.epochs[e].val_clean,
            pruned_val_clean: rp.epochs[e].val_clean,
            full_val_robust: rf.epochs[e].val_robust,
            pruned_val_robust: rp.epochs[e].val_robust,
        })
        .collect())
}

pub fn distance_csv(rows: &[DistanceRow]) -> String {
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut out = String::from("epoch,relative_distance,full_val_clean,pruned_val_clean,full_val_robust,pruned_val_robust\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.distance,
            r.full_val_clean,
            r.pruned_val_clean,
            opt(r.full_val_robust),
            opt(r.pruned_val_robust)
        )
        .expect("write to string");
    }
    out
}

/// Locates the run config for a phase directory (the phase's parent).
fn run_config_for(phase_dir: &Path) -> Result<RunConfig> {
    for dir in [phase_dir, phase_dir.parent().unwrap_or(phase_dir)] {
        let p = dir.join("config.toml");
        if p.exists() {
            return RunConfig::load(&p);
        }
    }
    Err(Error::contract(format!("no config.toml found for {}", phase_dir.display())))
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferMatrix {
    pub labels: Vec<String>,
    /// `cells[i][j]`: accuracy of model `j` on examples crafted against `i`.
    pub cells: Vec<Vec<f64>>,
}

impl TransferMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.cells) {
            out.push_str(l);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise transfer attacks between phase directories on the first run's
/// test set. The attack defaults to each source phase's reported test
/// attack and the seed to its test-evaluation seed, so the diagonal
/// reproduces the recorded white-box robust accuracy.
pub fn transfer_matrix(phase_dirs: &[PathBuf], attack_override: Option<AttackConfig>) -> Result<TransferMatrix> {
    if phase_dirs.len() < 2 {
        return Err(Error::contract("transfer needs at least two runs"));
    }
    let mut models = Vec::new();
    for d in phase_dirs {
        let meta = read_phase_meta(d)?;
        let ck = Checkpoint::load(&d.join("best.ckpt"))?;
        models.push((meta, ck));
    }
    let spec = models[0].1.spec.clone();
    for (d, (_, ck)) in phase_dirs.iter().zip(&models) {
        if ck.spec != spec {
            return Err(Error::contract(format!(
                "{} has model {} but the first run has {}",
                d.display(),
                ck.spec.id(),
                spec.id()
            )));
        }
        models[0].1.params.check_aligned(&ck.params)?;
    }
    let cfg = run_config_for(&phase_dirs[0])?;
    let loaded = load_data(&cfg.data, cfg.seeds.data)?;
    let mut cells = Vec::new();
    for (smeta, src) in &models {
        let attack = attack_override
            .or_else(|| smeta.train.effective_test_attack())
            .unwrap_or_else(|| train::pgd_budget(8.0 / 255.0, train::REPORTED_PGD_STEPS));
        let row = models
            .iter()
            .map(|(_, tgt)| attack::transfer_eval(&src.params, &tgt.params, &spec, &loaded.test, &attack, smeta.eval_seed))
            .collect::<Result<Vec<f64>>>()?;
        cells.push(row);
    }
    Ok(TransferMatrix {
        labels: phase_dirs.iter().map(|d| d.display().to_string()).collect(),
        cells,
    })
}

/// Human-oriented description of a ticket file.
pub fn inspect_ticket(ticket: &Ticket) -> serde_json::Value {
    let entries: Vec<serde_json::Value> = ticket
        .mask
        .iter()
        .map(|(name, e)| {
            serde_json::json!({
                "name": name,
                "shape": e.shape(),
                "kept": e.kept(),
                "total": e.bits().len(),
                "sparsity": 1.0 - e.kept() as f64 / e.bits().len() as f64,
            })
        })
        .collect();
    serde_json::json!({
        "model": ticket.spec.id(),
        "spec": ticket.spec,
        "parameters": ticket.init.num_params(),
        "prunable": ticket.init.num_prunable(),
        "pruned": ticket.mask.pruned(),
        "sparsity": ticket.mask.sparsity(),
        "masked_init_leak": prune::max_pruned_magnitude(&ticket.init, &ticket.mask),
        "provenance": ticket.provenance,
        "entries": entries,
    })
}

/// A minimal valid config, used by tests and as a template.
pub fn example_config(experiment: Experiment) -> RunConfig {
    let mut prune_cfg = TrainConfig::new(train::TrainMode::Natural, Schedule::constant(0.01, 3));
    prune_cfg.batch_size = 16;
    prune_cfg.keep_snapshots = true;
    let mut retrain = TrainConfig::new(train::TrainMode::Natural, Schedule::warmup(0.01, 0.1, 1, 3));
    retrain.batch_size = 16;
    retrain.keep_snapshots = true;
    let pipeline = PipelineConfig {
        ratio: 0.8,
        scope: prune::Scope::Global,
        rounds: 1,
        prune: prune_cfg.clone(),
        retrain,
        control: false,
    };
    RunConfig {
        schema_version: SCHEMA_VERSION,
        experiment,
        model: ModelSpec::mlp([1, 1, 4], &[16], 3),
        data: DataConfig {
            source: DataSource::Blobs,
            dir: None,
            train_subset: None,
            test_subset: None,
            val_fraction: 0.2,
            blobs: Some(BlobsConfig {
                k: 3,
                n_per_class: 40,
                dim: 4,
                margin: 0.4,
                test_fraction: 0.2,
            }),
        },
        seeds: SeedConfig::uniform(1),
        train: (experiment == Experiment::Train).then_some(prune_cfg),
        pipeline: (experiment != Experiment::Train).then_some(pipeline),
        output_dir: None,
    }
}
