use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use candle_core::{DType, Device};
use clap::{Parser, Subcommand};

use mtml_rsc::config::{load_config, ExperimentConfig};
use mtml_rsc::data::load_dataset;
use mtml_rsc::eval::evaluate;
use mtml_rsc::plot::emit_plots;
use mtml_rsc::sweep::{run_metadata, run_sweep, ResultRow, ResultsTable, SweepAxis, SweepOptions};
use mtml_rsc::train::{load_for_eval, train, TrainPlan};
use mtml_rsc::{selftest, RelaySystem, Scheme};

#[derive(Parser)]
#[command(name = "mtml-rsc", version, about = "Relay semantic communication: train, evaluate, sweep, plot")]
struct Cli {
    /// TOML experiment config; built-in toy defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints, logs, and results.
    #[arg(long, global = true, default_value = "runs/default")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run training stages; all three when no --stage is given.
    Train {
        #[arg(long = "stage", value_parser = clap::value_parser!(u8).range(1..=3))]
        stages: Vec<u8>,
        /// Stage-3 schemes (mtml_rsc, baseline).
        #[arg(long, value_delimiter = ',', default_value = "mtml_rsc,baseline")]
        schemes: Vec<String>,
    },
    /// Evaluate checkpoints in --out on the eval split.
    Eval {
        #[arg(long, value_delimiter = ',', default_value = "mtml_rsc,baseline")]
        schemes: Vec<String>,
    },
    /// Evaluate along an SNR or relay-distance axis.
    Sweep {
        #[arg(long, default_value = "snr")]
        axis: String,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        points: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "mtml_rsc,baseline")]
        schemes: Vec<String>,
        /// Fail on missing checkpoints instead of training them.
        #[arg(long)]
        require_checkpoints: bool,
        #[arg(long, default_value_t = 1)]
        trials: usize,
    },
    /// Render figures from a results file.
    Plot {
        #[arg(long)]
        results: PathBuf,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn resolve_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_schemes(names: &[String]) -> anyhow::Result<Vec<Scheme>> {
    let mut out = Vec::new();
    for n in names {
        let s = Scheme::parse(n.trim())?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    if out.is_empty() {
        bail!("no schemes given");
    }
    Ok(out)
}

fn results_path(out: &Path) -> PathBuf {
    out.join("results.csv")
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Selftest => {
            let mut failed = 0;
            for c in selftest::run_all()? {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed += usize::from(!c.passed);
            }
            if failed > 0 {
                bail!("{failed} self-test check(s) failed");
            }
        }
        Command::Train { stages, schemes } => {
            let cfg = resolve_config(&cli)?;
            let (train_set, _) = load_dataset(&cfg)?;
            let mut stages = stages.clone();
            if stages.is_empty() {
                stages = vec![1, 2, 3];
            }
            stages.sort_unstable();
            stages.dedup();
            let plan = TrainPlan {
                stages,
                schemes: parse_schemes(schemes)?,
            };
            let mut sys = RelaySystem::new(&cfg, DType::F32, &Device::Cpu)?;
            let records = train(&mut sys, &train_set, &plan, &cli.out)?;
            println!("{}", mtml_rsc::train::EpochRecord::HEADER);
            for r in records {
                println!("{}", r.to_line());
            }
            println!("checkpoints written to {}", cli.out.display());
        }
        Command::Eval { schemes } => {
            let cfg = resolve_config(&cli)?;
            let schemes = parse_schemes(schemes)?;
            let (_, eval_set) = load_dataset(&cfg)?;
            let mut sys = RelaySystem::new(&cfg, DType::F32, &Device::Cpu)?;
            load_for_eval(&mut sys, &schemes, &cli.out)?;
            let mut table = ResultsTable::default();
            for s in schemes {
                let r = evaluate(&sys, s, &eval_set, cfg.seed)?;
                table.push(ResultRow {
                    scheme: s,
                    fading: cfg.fading,
                    snr_db: cfg.snr_db,
                    d_sr: cfg.d_sr,
                    psnr_db: r.psnr_db,
                    saturated: r.saturated,
                    accuracy: r.accuracy,
                    seed: cfg.seed,
                    eval_size: r.eval_size,
                })?;
            }
            print!("{}", table.to_csv(&[])?);
            table.append_to(&results_path(&cli.out), &run_metadata(&cfg, &[("command", "eval".into())]))?;
        }
        Command::Sweep {
            axis,
            points,
            schemes,
            require_checkpoints,
            trials,
        } => {
            let cfg = resolve_config(&cli)?;
            let axis: SweepAxis = axis.parse()?;
            let opts = SweepOptions {
                axis,
                points: points.clone(),
                schemes: parse_schemes(schemes)?,
                train_on_demand: !require_checkpoints,
                trials: *trials,
                checkpoint_root: cli.out.join("points"),
            };
            let table = run_sweep(&cfg, &opts)?;
            print!("{}", table.to_csv(&[])?);
            let path = results_path(&cli.out);
            table.append_to(
                &path,
                &run_metadata(
                    &cfg,
                    &[("command", "sweep".into()), ("axis", axis.slug().into()), ("trials", trials.to_string())],
                ),
            )?;
            println!("results appended to {}", path.display());
        }
        Command::Plot { results } => {
            let table = ResultsTable::read(results).with_context(|| format!("reading {}", results.display()))?;
            let md = vec![("source".to_string(), results.display().to_string())];
            for p in emit_plots(&table, &cli.out, &md)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
