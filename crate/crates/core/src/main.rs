use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ucl_abi::harness::{self, csv_subsets, parse_config, reference_samples, ExitStatus, PlotKind};
use ucl_abi::losses::Regime;
use ucl_abi::models::ModelSpec;
use ucl_abi::reference::{cache_dir_from_env, ReferenceCache, SamplerConfig, CACHE_ENV};
use ucl_abi::Error;

#[derive(Parser)]
#[command(
    name = "ucl-abi",
    version,
    about = "Continual self-consistency training for amortized posterior estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelName {
    Linreg,
    ConjGauss,
    Ar1,
}

#[derive(Subcommand)]
enum Command {
    /// Run every regime and seed of an experiment config.
    Run { config: PathBuf },
    /// Parse and check a config without running it.
    Validate { config: PathBuf },
    /// Aggregate an existing results directory into plot data.
    Report {
        results_dir: PathBuf,
        #[arg(long)]
        kind: PlotKind,
        /// Restrict to these regimes (repeatable).
        #[arg(long = "regime")]
        regimes: Vec<Regime>,
    },
    /// Precompute MCMC reference draws for the subsets of one CSV file.
    Reference {
        #[arg(long, value_enum)]
        model: ModelName,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "y")]
        response: String,
        #[arg(long, default_value_t = 10)]
        subsets: usize,
        #[arg(long, default_value_t = 100)]
        set_size: usize,
        /// Data seed used when the subsets are drawn.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        noise_sd: f64,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        thin: Option<usize>,
        #[arg(long)]
        step_scale: Option<f64>,
        /// Cache directory; defaults to the value of the cache environment
        /// variable.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
}

fn config_code(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if matches!(e, Error::Config { .. }) {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn run(config: &Path) -> ExitCode {
    let cfg = match parse_config(config) {
        Ok(c) => c,
        Err(e) => return config_code(&e),
    };
    let outcome = match harness::run_experiment(&cfg) {
        Ok(o) => o,
        Err(e) => return config_code(&e),
    };
    match harness::write_outputs(&cfg, &outcome) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
        }
        Err(e) => return config_code(&e),
    }
    for r in outcome.manifest.runs.iter().filter(|r| r.status != "ok") {
        eprintln!("{} seed {}: {}", r.label, r.spec.seed, r.status);
    }
    match outcome.status {
        ExitStatus::Ok => ExitCode::SUCCESS,
        ExitStatus::Partial => ExitCode::from(1),
    }
}

fn header_predictors(path: &Path) -> Result<usize, Error> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        file: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let n = r
        .headers()
        .map_err(|e| Error::Csv {
            file: path.to_path_buf(),
            message: e.to_string(),
        })?
        .len();
    Ok(n.saturating_sub(1))
}

#[allow(clippy::too_many_arguments)]
fn reference(
    model: ModelName,
    data: &Path,
    response: &str,
    subsets: usize,
    set_size: usize,
    seed: u64,
    noise_sd: f64,
    sampler: SamplerConfig,
    cache_dir: Option<PathBuf>,
) -> Result<(), Error> {
    let predictors = header_predictors(data)?;
    let spec = match model {
        ModelName::Linreg => ModelSpec::Linreg { predictors },
        ModelName::ConjGauss => ModelSpec::ConjGauss {
            predictors,
            noise_sd,
        },
        ModelName::Ar1 => ModelSpec::Ar1,
    };
    sampler.validate()?;
    let m = spec.build()?;
    let dir = cache_dir.or_else(cache_dir_from_env).ok_or_else(|| {
        Error::config("cache_dir", format!("pass --cache-dir or set {CACHE_ENV}"))
    })?;
    let cache = ReferenceCache::new(dir);
    for (j, x) in csv_subsets(m.as_ref(), data, response, subsets, set_size, seed)?
        .iter()
        .enumerate()
    {
        let s = reference_samples(
            &spec,
            m.as_ref(),
            &sampler,
            sampler.n_samples,
            x,
            Some(&cache),
        )?;
        println!("subset {j}: {} draws, mean {:?}", s.len(), s.mean());
    }
    println!("cache: {}", cache.dir().display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config } => run(&config),
        Command::Validate { config } => match parse_config(&config) {
            Ok(cfg) => {
                println!(
                    "{}: ok, {} runs, config hash {}",
                    config.display(),
                    cfg.runs().len(),
                    cfg.hash()
                );
                ExitCode::SUCCESS
            }
            Err(e) => config_code(&e),
        },
        Command::Report {
            results_dir,
            kind,
            regimes,
        } => {
            let filter = (!regimes.is_empty()).then_some(regimes.as_slice());
            match harness::report(&results_dir, kind, filter) {
                Ok(paths) => {
                    for p in paths {
                        println!("{}", p.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => config_code(&e),
            }
        }
        Command::Reference {
            model,
            data,
            response,
            subsets,
            set_size,
            seed,
            noise_sd,
            samples,
            warmup,
            thin,
            step_scale,
            cache_dir,
        } => {
            let d = SamplerConfig::default();
            let sampler = SamplerConfig {
                n_samples: samples.unwrap_or(d.n_samples),
                warmup: warmup.unwrap_or(d.warmup),
                thin: thin.unwrap_or(d.thin),
                step_scale: step_scale.unwrap_or(d.step_scale),
            };
            match reference(
                model, &data, &response, subsets, set_size, seed, noise_sd, sampler, cache_dir,
            ) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => config_code(&e),
            }
        }
    }
}
