use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use asa_geo::attention_export::{attention_for_image, load_model_image, write_attention};
use asa_geo::config::RunConfig;
use asa_geo::data::{generate_synthetic, materialize, SyntheticConfig};
use asa_geo::experiment::{
    ablation_csv, ablation_run, eval_run, prepare_output, resume_run, train_run, write_reports,
    write_text, Sweep,
};
use asa_geo::retrieval::{summary_table, Direction};

#[derive(Parser)]
#[command(
    name = "asa-geo",
    version,
    about = "UAV / satellite cross-view geo-localization with adaptive semantic aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (JSON). Defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from a built-in preset instead of the defaults.
    #[arg(long, value_enum, conflicts_with = "config")]
    preset: Option<Preset>,
    #[arg(long)]
    output: PathBuf,
    /// Training seed (`train.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Dotted-key overrides, e.g. `num_parts=1 strategy=hard_uniform`.
    #[arg(long, num_args = 1..)]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Training recipe defaults on the synthetic set.
    Default,
    /// 200-step overfit run on the synthetic set, evaluated on its training
    /// locations.
    Overfit,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum DirectionArg {
    UavToSat,
    SatToUav,
    Both,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Strategies,
    Parts,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the University-1652 layout.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 8)]
        locations: usize,
        #[arg(long, default_value_t = 6)]
        uav_views: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Extra held-out locations for the test splits.
        #[arg(long, default_value_t = 0)]
        test_locations: usize,
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes metrics.csv, checkpoints, config.json and
    /// retrieval reports.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by a previous run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint in one or both retrieval directions.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        direction: DirectionArg,
    },
    /// Strategy and part-count sweeps.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        sweep: SweepArg,
    },
    /// Per-part attention heatmaps and the raw weights of one image.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let base = match (&common.config, common.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(Preset::Overfit)) => RunConfig::overfit(),
        (None, _) => RunConfig::default(),
    };
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let cfg = base.with_overrides(&overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Run `f` against `output`; remove the directory again if `f` fails and
/// the directory did not exist before.
fn with_output<T>(output: &Path, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let existed = output.exists();
    let result = f();
    if result.is_err() && !existed && output.exists() {
        let _ = std::fs::remove_dir_all(output);
    }
    result
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            output,
            locations,
            uav_views,
            seed,
            image_size,
            test_locations,
            force,
        } => {
            let ds = generate_synthetic(&SyntheticConfig {
                num_locations: locations,
                uav_views_per_location: uav_views,
                seed,
                image_size,
                test_locations,
            })?;
            with_output(&output, || {
                let files = materialize(&ds, &output, force)?;
                println!("wrote {} files to {}", files.len(), output.display());
                Ok(())
            })
        }
        Command::Train { common, resume } => {
            let cfg = resolve(&common)?;
            with_output(&common.output, || {
                let run = match &resume {
                    Some(ck) => {
                        if !ck.exists() {
                            bail!("checkpoint {} does not exist", ck.display());
                        }
                        std::fs::create_dir_all(&common.output)?;
                        resume_run(&cfg, &common.output, ck)?
                    }
                    None => train_run(&cfg, &common.output, common.force)?,
                };
                print!(
                    "{}",
                    summary_table(&[("ASA".into(), run.reports.iter().collect())])
                );
                println!("checkpoint: {}", run.last_checkpoint.display());
                Ok(())
            })
        }
        Command::Eval {
            common,
            checkpoint,
            direction,
        } => {
            let cfg = resolve(&common)?;
            let directions = match direction {
                DirectionArg::UavToSat => vec![Direction::UavToSat],
                DirectionArg::SatToUav => vec![Direction::SatToUav],
                DirectionArg::Both => Direction::BOTH.to_vec(),
            };
            if !checkpoint.exists() {
                bail!("checkpoint {} does not exist", checkpoint.display());
            }
            let reports = eval_run(&cfg, &checkpoint, &directions)?;
            with_output(&common.output, || {
                prepare_output(&common.output, common.force)?;
                write_text(&common.output.join("config.json"), &cfg.to_json())?;
                write_reports(&common.output, "ASA", &reports)?;
                print!(
                    "{}",
                    summary_table(&[("ASA".into(), reports.iter().collect())])
                );
                Ok(())
            })
        }
        Command::Ablate { common, sweep } => {
            let cfg = resolve(&common)?;
            let sweep = match sweep {
                SweepArg::Strategies => Sweep::Strategies,
                SweepArg::Parts => Sweep::Parts,
                SweepArg::All => Sweep::All,
            };
            with_output(&common.output, || {
                let rows = ablation_run(&cfg, sweep, &common.output, common.force)?;
                write_text(&common.output.join("config.json"), &cfg.to_json())?;
                print!("{}", ablation_csv(&rows));
                Ok(())
            })
        }
        Command::ExportAttn {
            checkpoint,
            image,
            output,
            force,
        } => {
            if !checkpoint.exists() {
                bail!("checkpoint {} does not exist", checkpoint.display());
            }
            let ck = asa_geo::Checkpoint::load(&checkpoint)?;
            let model = asa_geo::GeoModel::from_checkpoint(&ck).context("loading checkpoint")?;
            let tensor = load_model_image(&model, &image)?;
            let weights = attention_for_image(&model, &tensor)?;
            with_output(&output, || {
                prepare_output(&output, force)?;
                let files = write_attention(&weights, model.config.backbone.grid(), &output)?;
                for f in files {
                    println!("{}", f.display());
                }
                Ok(())
            })
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(n) = std::env::var("ASA_NUM_THREADS") {
        let n: usize = n
            .parse()
            .with_context(|| format!("ASA_NUM_THREADS={n} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
