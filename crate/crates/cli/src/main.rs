use std::path::{Path, PathBuf};
use std::process::ExitCode;

use booster_core::attack::AttackConfig;
use booster_core::harness::{self, RunConfig, SweepSpec};
use booster_core::nn::Checkpoint;
use booster_core::prune::{self, Provenance, Scope, SourceMode, Ticket};
use booster_core::train;
use booster_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Boosting-ticket experiment harness: pruning, adversarial training and
/// convergence diagnostics.
#[derive(Parser)]
#[command(name = "booster", version)]
struct Cli {
    /// Output root for run ledgers.
    #[arg(long, global = true, env = harness::OUTPUT_ROOT_ENV, default_value = "runs")]
    output_root: PathBuf,
    /// Override every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation and sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Validate and describe the work without running it.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config into the ledger.
    Run { config: PathBuf },
    /// Run a one-axis sweep.
    Sweep { spec: PathBuf },
    /// Relative weight distance between two phase directories per epoch.
    Distance {
        full: PathBuf,
        pruned: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise transfer-attack matrix over phase directories.
    Transfer {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        attack: AttackArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clean and robust accuracy of a checkpoint on a config's test split.
    Eval {
        checkpoint: PathBuf,
        /// Run config naming the data.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Build a ticket from trained weights and their initialization.
    Prune {
        trained: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        ratio: f64,
        #[arg(long, value_enum, default_value_t = ScopeArg::Global)]
        scope: ScopeArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Natural)]
        source_mode: ModeArg,
        #[arg(long, default_value_t = 0.0)]
        source_lr: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a ticket's mask statistics and provenance.
    InspectTicket { ticket: PathBuf },
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_enum)]
    attack: Option<AttackKind>,
    #[arg(long, default_value_t = 0.3)]
    epsilon: f64,
    #[arg(long, default_value_t = train::REPORTED_PGD_STEPS)]
    steps: usize,
}

impl AttackArgs {
    fn config(&self) -> Option<AttackConfig> {
        match self.attack? {
            AttackKind::None => None,
            AttackKind::Fgsm => Some(AttackConfig::fgsm(self.epsilon)),
            AttackKind::Pgd => Some(train::pgd_budget(self.epsilon, self.steps)),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackKind {
    None,
    Fgsm,
    Pgd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Global,
    Layerwise,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Natural,
    FgsmAt,
    PgdAt,
}

fn print_json(v: &impl serde::Serialize) -> Result<(), Error> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, Error> {
    let cfg = RunConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    let root = &cli.output_root;
    match &cli.command {
        Command::Run { config } => {
            let cfg = load_config(config, cli.seed)?;
            if cli.dry_run {
                println!("config_hash: {}", cfg.hash());
                println!("run_dir: {}", harness::run_dir(&cfg, root).display());
                print!("{}", cfg.schedule_table()?);
                return Ok(());
            }
            let report = harness::execute(&cfg, root)?;
            print_json(&report)
        }
        Command::Sweep { spec } => {
            let mut s = SweepSpec::load(spec)?;
            if let Some(seed) = cli.seed {
                s.base = s.base.with_seed(seed);
            }
            if cli.dry_run {
                for &v in &s.values {
                    let p = s.point(v)?;
                    println!("{v}: {}", p.hash());
                }
                return Ok(());
            }
            let report = harness::execute_sweep(&s, root)?;
            print_json(&report)?;
            if report.points.iter().all(|p| p.error.is_some()) {
                return Err(Error::contract("every sweep point failed"));
            }
            Ok(())
        }
        Command::Distance { full, pruned, out } => {
            let rows = harness::distance_series(full, pruned)?;
            write_or_print(out.as_deref(), &harness::distance_csv(&rows))
        }
        Command::Transfer { runs, attack, out } => {
            if cli.dry_run {
                for r in runs {
                    harness::read_phase_meta(r)?;
                }
                println!("{} x {} transfer matrix", runs.len(), runs.len());
                return Ok(());
            }
            let m = harness::transfer_matrix(runs, attack.config())?;
            write_or_print(out.as_deref(), &m.to_csv())
        }
        Command::Eval {
            checkpoint,
            config,
            attack,
        } => {
            let cfg = load_config(config, cli.seed)?;
            let ck = Checkpoint::load(checkpoint)?;
            if cli.dry_run {
                println!("{} on {:?}", ck.spec.id(), cfg.data.source);
                return Ok(());
            }
            let data = harness::load_data(&cfg.data, cfg.seeds.data)?;
            let eval = train::evaluate(&ck.params, &ck.spec, &data.test, attack.config().as_ref(), cfg.seeds.attack)?;
            print_json(&eval)
        }
        Command::Prune {
            trained,
            init,
            ratio,
            scope,
            source_mode,
            source_lr,
            out,
        } => {
            let trained_ck = Checkpoint::load(trained)?;
            let init_ck = Checkpoint::load(init)?;
            let scope = match scope {
                ScopeArg::Global => Scope::Global,
                ScopeArg::Layerwise => Scope::Layerwise,
            };
            let prov = Provenance {
                ratio: *ratio,
                scope,
                source_mode: match source_mode {
                    ModeArg::Natural => SourceMode::Natural,
                    ModeArg::FgsmAt => SourceMode::FgsmAt,
                    ModeArg::PgdAt => SourceMode::PgdAt,
                },
                source_lr: *source_lr,
                rounds: 1,
                init_seed: init_ck.seed,
                data_seed: cli.seed.unwrap_or(0),
                note: trained.display().to_string(),
            };
            let ticket = prune::make_ticket(&init_ck.spec, &init_ck.params, &trained_ck.params, *ratio, scope, prov)?;
            if cli.dry_run {
                return print_json(&harness::inspect_ticket(&ticket));
            }
            ticket.save(out)?;
            print_json(&harness::inspect_ticket(&ticket))
        }
        Command::InspectTicket { ticket } => print_json(&harness::inspect_ticket(&Ticket::load(ticket)?)),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
