use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use viscohom::error::{Error, Result};
use viscohom::harness::store::{ensure_dir, load_model, read_json, write_json};
use viscohom::harness::{
    read_dataset, run_eval, run_fit_prony, run_gen_data, run_macro_sim, run_train, EvalConfig, GenDataConfig, MacroSimConfig,
    TrainRunConfig,
};
use viscohom::materials::{sample_pc_kv, PiecewiseMaterialKV};

#[derive(Parser, Debug)]
#[command(name = "viscohom", version, about = "Homogenized viscoelastic constitutive laws and learned surrogates")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset of materials, strain programs and averaged stresses.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Analytic memory kernel of a layered material.
    FitProny {
        #[command(flatten)]
        common: Common,
        /// Layered material as JSON; a random one is drawn from --seed otherwise.
        #[arg(long)]
        material: Option<PathBuf>,
        /// Number of kernel samples on [0, 1].
        #[arg(long, default_value_t = 501)]
        kernel_points: usize,
    },
    /// Train a surrogate on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Continue from the training state saved in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Macroscale comparison of constitutive backends.
    MacroSim {
        #[command(flatten)]
        common: Common,
        /// Surrogate checkpoint, needed by the `rno` backend.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunEcho<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    inputs: Vec<String>,
    config: &'a T,
}

fn echo<T: Serialize>(out: &Path, command: &str, seed: Option<u64>, inputs: &[&Path], config: &T) -> Result<()> {
    ensure_dir(out)?;
    write_json(
        &out.join("run.json"),
        &RunEcho {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            config,
        },
    )
}

fn config_or<T: serde::de::DeserializeOwned>(path: &Option<PathBuf>, default: impl FnOnce() -> Result<T>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => default(),
    }
}

fn init_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            init_threads(common.threads)?;
            let mut cfg: GenDataConfig = config_or(&common.config, || Err(Error::Config("gen-data needs --config".into())))?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            echo(&common.out, "gen-data", common.seed, &[], &cfg)?;
            let ds = run_gen_data(&cfg, &common.out)?;
            log::info!("wrote {} samples ({} failures) to {}", ds.samples.len(), ds.failures.len(), common.out.display());
        }
        Command::FitProny {
            common,
            material,
            kernel_points,
        } => {
            init_threads(common.threads)?;
            let mat: PiecewiseMaterialKV = match (&material, common.seed) {
                (Some(p), _) => read_json(p)?,
                (None, Some(s)) => sample_pc_kv(s),
                (None, None) => return Err(Error::Config("fit-prony needs --material or --seed".into())),
            };
            let inputs: Vec<&Path> = material.iter().map(|p| p.as_path()).collect();
            echo(&common.out, "fit-prony", common.seed, &inputs, &mat)?;
            let (_, report) = run_fit_prony(&mat, kernel_points, Some(&common.out))?;
            log::info!("E' = {}, nu' = {}, {} modes", report.e_prime, report.nu_prime, report.alphas.len());
        }
        Command::Train { common, data, resume } => {
            init_threads(common.threads)?;
            let ds = read_dataset(&data)?;
            let mut cfg: TrainRunConfig = config_or(&common.config, || Ok(TrainRunConfig::full_scale(ds.kind().variant())))?;
            if let Some(s) = common.seed {
                cfg.init_seed = s;
                cfg.train.seed = s;
            }
            echo(&common.out, "train", common.seed, &[&data], &cfg)?;
            let state = run_train(&ds, &cfg, Some(&common.out), resume)?;
            log::info!("best validation error {:.4e} after {} epochs", state.best_val, state.epoch);
        }
        Command::Eval { common, data, checkpoint } => {
            init_threads(common.threads)?;
            let cfg: EvalConfig = config_or(&common.config, || Ok(EvalConfig::default()))?;
            let ds = read_dataset(&data)?;
            let model = load_model(&checkpoint)?;
            echo(&common.out, "eval", common.seed, &[&data, &checkpoint], &cfg)?;
            let report = run_eval(&ds, &model, &cfg, &common.out)?;
            log::info!("mean relative L2 {:.4e}, no-memory {:.4e}", report.model.mean, report.no_memory.mean);
        }
        Command::MacroSim { common, checkpoint } => {
            init_threads(common.threads)?;
            let mut cfg: MacroSimConfig = config_or(&common.config, || Ok(MacroSimConfig::full_scale()))?;
            if let Some(s) = common.seed {
                for (i, m) in cfg.materials.iter_mut().enumerate() {
                    m.seed = s + i as u64;
                }
            }
            let model = checkpoint.as_deref().map(load_model).transpose()?;
            let inputs: Vec<&Path> = checkpoint.iter().map(|p| p.as_path()).collect();
            echo(&common.out, "macro-sim", common.seed, &inputs, &cfg)?;
            let rows = run_macro_sim(&cfg, model.as_ref(), Some(&common.out))?;
            log::info!("{} backend runs", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
