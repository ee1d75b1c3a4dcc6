use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use waveforge_core::config::ExperimentConfig;
use waveforge_core::dataset::Dataset;
use waveforge_core::error::{Error, ErrorKind, Result};
use waveforge_core::evaluation::DEFAULT_GUARD;
use waveforge_core::pipeline::{self, RunOptions};
use waveforge_core::report::{self, EvalSummary};
use waveforge_core::{io, kinematics};

#[derive(Parser, Debug)]
#[command(name = "waveforge", version, about = "Physics-regularized LSTM forecasting of 1D acoustic waves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a configuration file with every default spelled out.
    Init {
        #[arg(long, default_value = "waveforge.toml")]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Solve the wave equation and store the solver and ML mesh fields.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate wave speed and its mask on a stored field.
    Wavespeed {
        #[arg(long)]
        field: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Thresholds come from this config; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Cut training and test windows from the ML mesh field.
    Dataset {
        #[arg(long)]
        config: PathBuf,
        /// ML mesh field directory; generated on the fly when absent.
        #[arg(long)]
        field: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one network (λ and seed from the config unless overridden).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate run directories matching a glob against a dataset.
    Eval {
        #[arg(long)]
        runs: String,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_GUARD)]
        guard: f64,
    },
    /// Train and evaluate the λ x seed grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Output root; the config's `output_root` when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        dry_run: bool,
    },
    /// Print the tables of an evaluation directory.
    Report {
        #[arg(long)]
        eval: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 1,
        ErrorKind::Numeric => 2,
        ErrorKind::Io => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Init { out, force } => {
            if out.exists() && !force {
                return Err(Error::RunExists(out));
            }
            io::write_text(&out, &ExperimentConfig::default().to_toml())?;
            println!("wrote {}", out.display());
        }
        Command::Generate { config, out } => {
            let cfg = load_config(&config)?;
            let fine = pipeline::generate(&cfg)?;
            let ml = pipeline::ml_field(&cfg, &fine)?;
            pipeline::save_field(&out.join("fine"), &fine)?;
            pipeline::save_field(&out.join("ml"), &ml)?;
            println!(
                "fine {}x{}  ml {}x{}  courant {:.3}",
                fine.nt(),
                fine.nx(),
                ml.nt(),
                ml.nx(),
                fine.grid.courant_number(&cfg.domain)
            );
        }
        Command::Wavespeed { field, out, config } => {
            let thresholds = match config {
                Some(c) => load_config(&c)?.regularizer.thresholds,
                None => kinematics::MaskThresholds::default(),
            };
            let f = pipeline::load_field(&field)?;
            let ws = pipeline::compute_wave_speed(&f, &thresholds)?;
            pipeline::save_wave_speed(&out, &ws, &thresholds)?;
            println!(
                "{} of {} cells unmasked, mean speed {}",
                ws.unmasked_count(),
                ws.speeds.len(),
                ws.unmasked_mean()
                    .map(|m| format!("{m:.1}"))
                    .unwrap_or_else(|| "-".into())
            );
        }
        Command::Dataset { config, field, out } => {
            let cfg = load_config(&config)?;
            let ml = match field {
                Some(dir) => pipeline::load_field(&dir)?,
                None => pipeline::ml_field(&cfg, &pipeline::generate(&cfg)?)?,
            };
            let ds = pipeline::build_dataset(&cfg, &ml)?;
            ds.save(&out)?;
            println!(
                "{} training pairs, test cases {}",
                ds.manifest.train.len(),
                ds.manifest
                    .test
                    .iter()
                    .map(|t| format!("{}@{}", t.name, ds.pairs[t.index].origin_step))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
        Command::Train {
            config,
            dataset,
            out,
            lambda,
            seed,
            force,
            dry_run,
        } => {
            let mut cfg = load_config(&config)?;
            cfg = cfg.for_run(lambda.unwrap_or(cfg.regularizer.lambda), seed.unwrap_or(cfg.seed));
            cfg.validate()?;
            let ds = Dataset::load(&dataset)?;
            let opts = RunOptions { force, dry_run };
            match pipeline::train_run(&cfg, &ds, &out, opts, cfg.exec_mode())? {
                Some(r) => println!(
                    "trained lambda={:e} seed={} final mse {:e} reg {:e}",
                    r.lambda, r.seed, r.final_mse, r.final_reg
                ),
                None => println!("dry run: configuration valid, nothing written"),
            }
        }
        Command::Eval {
            runs,
            dataset,
            out,
            guard,
        } => {
            let ds = Dataset::load(&dataset)?;
            let dirs = expand_runs(&runs)?;
            let evals = dirs
                .iter()
                .map(|d| report::evaluate_run(d, &ds, guard))
                .collect::<Result<Vec<_>>>()?;
            let summary = report::write_eval(&out, &evals)?;
            print!("{}", report::render_tables(&summary));
        }
        Command::Sweep {
            config,
            lambdas,
            seeds,
            out,
            workers,
            force,
            dry_run,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(l) = lambdas {
                cfg.sweep.lambdas = l;
            }
            if let Some(s) = seeds {
                cfg.sweep.seeds = s;
            }
            if let Some(w) = workers {
                cfg.sweep.workers = w;
            }
            cfg.validate()?;
            let root = out.unwrap_or_else(|| cfg.output_root.clone());
            if dry_run {
                for &l in &cfg.sweep.lambdas {
                    for &s in &cfg.sweep.seeds {
                        let dir = pipeline::run_dir(&root, l, s);
                        if dir.join("run.json").exists() && !force {
                            return Err(Error::RunExists(dir));
                        }
                    }
                }
                println!(
                    "dry run: {} runs would be trained under {}",
                    cfg.sweep.lambdas.len() * cfg.sweep.seeds.len(),
                    root.display()
                );
                return Ok(());
            }
            let ds = prepare_dataset(&cfg, &root)?;
            let opts = RunOptions { force, dry_run: false };
            pipeline::sweep(&cfg, &ds, &root.join("runs"), opts)?;
            let dirs = report::find_runs(&root.join("runs"))?;
            let evals = dirs
                .iter()
                .map(|d| report::evaluate_run(d, &ds, DEFAULT_GUARD))
                .collect::<Result<Vec<_>>>()?;
            let summary = report::write_eval(&root.join("eval"), &evals)?;
            print!("{}", report::render_tables(&summary));
        }
        Command::Report { eval } => {
            let summary: EvalSummary = io::read_json(&eval.join("summary.json"))?;
            print!("{}", report::render_tables(&summary));
        }
    }
    Ok(())
}

/// Generates the field and dataset below `root` unless a matching dataset
/// is already there.
fn prepare_dataset(cfg: &ExperimentConfig, root: &Path) -> Result<Dataset> {
    let dir = root.join("dataset");
    let fine = pipeline::generate(cfg)?;
    let ml = pipeline::ml_field(cfg, &fine)?;
    let ds = pipeline::build_dataset(cfg, &ml)?;
    if dir.join("manifest.json").exists() {
        let existing = Dataset::load(&dir)?;
        if existing == ds {
            return Ok(existing);
        }
    }
    io::ensure_dir(root)?;
    io::write_text(&root.join("config.toml"), &cfg.to_toml())?;
    pipeline::save_field(&root.join("field"), &ml)?;
    ds.save(&dir)?;
    Ok(ds)
}

/// Run directories matched by a glob; matches that are not runs themselves
/// are searched for runs below them.
fn expand_runs(pattern: &str) -> Result<Vec<PathBuf>> {
    let paths = glob::glob(pattern).map_err(|e| Error::Config(format!("bad glob {pattern}: {e}")))?;
    let mut out = Vec::new();
    for p in paths {
        let p = p.map_err(|e| Error::Config(e.to_string()))?;
        if p.is_dir() {
            out.extend(report::find_runs(&p)?);
        }
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Missing(format!("no runs match {pattern}")));
    }
    Ok(out)
}
