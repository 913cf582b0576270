use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use airtemp_core::io::read_config;
use airtemp_core::metrics::BreakdownKey;
use airtemp_core::pipeline::{self, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "airtemp", version, about = "Gap-filled surface temperature and air temperature mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene directory
    Synth {
        /// Scene description (key = value lines)
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the amplifier on every tile of a scene
    TrainAmplifier {
        #[arg(long)]
        scene: PathBuf,
        /// Train the ATC-only baseline (no convolutional head)
        #[arg(long)]
        baseline: bool,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ensemble mean and calibrated intervals from a trained model
    Reconstruct {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Target interval coverage [default: 0.95]
        #[arg(long)]
        coverage: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one air-temperature model per month
    TrainAir {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Station CSV [default: <scene>/stations.csv]
        #[arg(long)]
        stations: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Air temperature maps with propagated intervals
    Predict {
        #[arg(long)]
        air: PathBuf,
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against station observations
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Station CSV [default: <scene>/stations.csv]
        #[arg(long)]
        stations: Option<PathBuf>,
        /// Restrict scoring to the test stations of this split file
        #[arg(long)]
        split: Option<PathBuf>,
        /// Breakdown: none, hour, month, temp_bin or elev_bin
        #[arg(long, default_value = "none")]
        key: BreakdownKey,
        /// Report CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare ATC-only, amplifier + MLR and amplifier + air transformer
    Ablate {
        #[arg(long)]
        scene: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        /// Comparison CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one channel of a grid file as a PPM image
    Render {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 0)]
        channel: usize,
        /// thermal or gray
        #[arg(long, default_value = "thermal")]
        ramp: String,
        #[arg(long, requires = "max", allow_negative_numbers = true)]
        min: Option<f32>,
        #[arg(long, requires = "min", allow_negative_numbers = true)]
        max: Option<f32>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// Run configuration (key = value lines); flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Random seed; required here or in the config
    #[arg(long)]
    seed: Option<u64>,
    /// Tile edge in pixels [default: 64]
    #[arg(long)]
    tile: Option<usize>,
    /// Target interval coverage [default: 0.95]
    #[arg(long)]
    coverage: Option<f64>,
    /// Amplifier epochs [default: 600]
    #[arg(long)]
    epochs: Option<usize>,
    /// Amplifier learning rate for ATC and rho [default: 0.1]
    #[arg(long)]
    lr: Option<f32>,
    /// Amplifier learning rate for the convolutional head [default: 0.01]
    #[arg(long)]
    head_lr: Option<f32>,
    /// First snapshot epoch [default: 201]
    #[arg(long)]
    snapshot_start: Option<usize>,
    /// Epochs between snapshots [default: 2]
    #[arg(long)]
    snapshot_every: Option<usize>,
    /// Number of snapshots; the default schedule covers 201..600 step 2 [default: 200]
    #[arg(long)]
    snapshot_count: Option<usize>,
    /// Air-transformer epochs [default: 500]
    #[arg(long)]
    air_epochs: Option<usize>,
    /// Air-transformer learning rate [default: 0.01]
    #[arg(long)]
    air_lr: Option<f32>,
    /// Air-transformer batch size [default: 65536]
    #[arg(long)]
    air_batch_size: Option<usize>,
    /// Fraction of stations held out [default: 0.2]
    #[arg(long)]
    test_fraction: Option<f64>,
}

impl TrainArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let map = match &self.config {
            Some(p) => read_config(p)?,
            None => BTreeMap::new(),
        };
        let (mut c, file_seed) = RunConfig::from_map(&map)?;
        let Some(seed) = self.seed.or(file_seed) else {
            bail!("a seed is required (--seed or `seed` in the config)");
        };
        c = c.with_seed(seed);
        macro_rules! over {
            ($field:expr, $opt:expr) => {
                if let Some(v) = $opt {
                    $field = v;
                }
            };
        }
        over!(c.amplifier.tile, self.tile);
        over!(c.coverage, self.coverage);
        over!(c.amplifier.epochs, self.epochs);
        over!(c.amplifier.lr, self.lr);
        over!(c.amplifier.head_lr, self.head_lr);
        over!(c.amplifier.snapshot_start, self.snapshot_start);
        over!(c.amplifier.snapshot_every, self.snapshot_every);
        over!(c.amplifier.snapshot_count, self.snapshot_count);
        over!(c.air.epochs, self.air_epochs);
        over!(c.air.lr, self.air_lr);
        over!(c.air.batch_size, self.air_batch_size);
        over!(c.test_fraction, self.test_fraction);
        c.validate()?;
        Ok(c)
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("AIRTEMP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .with_context(|| format!("AIRTEMP_THREADS={v:?} is not a thread count"))?;
    if n == 0 {
        bail!("AIRTEMP_THREADS must be at least 1");
    }
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
        log::debug!("worker pool capped at {n} threads");
    }
    Ok(())
}

fn default_stations(scene: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| scene.join("stations.csv"))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Synth { config, seed, out } => {
            let map = match config {
                Some(p) => read_config(&p)?,
                None => BTreeMap::new(),
            };
            let spec = pipeline::scene_spec_from_map(&map, seed)?;
            pipeline::cmd_synth(&spec, &out)?;
        }
        Command::TrainAmplifier {
            scene,
            baseline,
            train,
            out,
        } => pipeline::cmd_train_amplifier(&scene, &train.resolve()?, !baseline, &out)?,
        Command::Reconstruct {
            model,
            scene,
            coverage,
            out,
        } => pipeline::cmd_reconstruct(&model, &scene, coverage.unwrap_or(0.95), &out)?,
        Command::TrainAir {
            recon,
            scene,
            stations,
            train,
            out,
        } => {
            let stations = default_stations(&scene, stations);
            pipeline::cmd_train_air(&recon, &scene, &stations, &train.resolve()?, &out)?
        }
        Command::Predict { air, recon, scene, out } => pipeline::cmd_predict(&air, &recon, &scene, &out)?,
        Command::Evaluate {
            pred,
            scene,
            stations,
            split,
            key,
            out,
        } => {
            let stations = default_stations(&scene, stations);
            pipeline::cmd_evaluate(&pred, &scene, &stations, split.as_deref(), key, &out)?
        }
        Command::Ablate { scene, train, out } => {
            let rows = pipeline::cmd_ablate(&scene, &train.resolve()?, &out)?;
            for r in rows {
                log::info!("{}: mae {:.4} rmse {:.4}", r.model, r.mae, r.rmse);
            }
        }
        Command::Render {
            grid,
            channel,
            ramp,
            min,
            max,
            out,
        } => pipeline::cmd_render(&grid, channel, &ramp, min.zip(max), &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
