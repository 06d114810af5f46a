//! Command-line front end. Exit codes: 0 success, 1 divergence or a failed
//! diagnostic, 2 configuration, input or I/O error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use divebatch_core::data::{generate_synthetic, NoiseConvention, SyntheticSpec};
use divebatch_core::Dataset64;

use crate::config::{find_preset, load_config, ConfigError, ExperimentConfig, Overrides, PRESETS};
use crate::diagnose::{run_suite, Suite};
use crate::experiment::{compare, run_experiment, summary_table, HarnessError, RunOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DIVERGED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "divebatch", version, about = "Adaptive-batch SGD experiments driven by gradient diversity")]
pub struct Cli {
    /// Log configuration provenance and progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic classification dataset as CSV plus split sidecar.
    GenData(GenDataArgs),
    /// Train one experiment (all of its trials).
    Train(TrainArgs),
    /// Run several experiments on a shared dataset and tabulate them.
    Compare(CompareArgs),
    /// Run the gradient, lemma and convergence-bound checks.
    Diagnose(DiagnoseArgs),
    /// List the built-in presets, or show one.
    Presets {
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 20_000)]
    pub n: usize,
    #[arg(long, default_value_t = 512)]
    pub d: usize,
    /// Label-noise scale.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Whether `--noise` is a variance or a standard deviation.
    #[arg(long, value_parser = ["variance", "stddev"], default_value = "variance")]
    pub noise_convention: String,
    /// Training fraction.
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct RunArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    /// Fixed-order reductions (bitwise reproducible).
    #[arg(long)]
    pub deterministic: bool,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Leave wall-time fields empty in all output files.
    #[arg(long)]
    pub mask_time: bool,
}

impl RunArgs {
    fn overrides(&self, out: Option<PathBuf>) -> Overrides {
        Overrides {
            trials: self.trials,
            deterministic: self.deterministic,
            output_dir: out,
            epochs: self.epochs,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "preset")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Comma-separated config files or preset names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub configs: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long, value_enum, default_value = "all")]
    pub suite: Suite,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Key-value report file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command) -> Result<i32, HarnessError> {
    match command {
        Command::GenData(a) => gen_data(&a).map(|_| EXIT_OK),
        Command::Train(a) => {
            let (cfg, _) = load_config(a.config.as_deref(), a.preset.as_deref(), &a.run.overrides(a.out.clone()))?;
            let opts = RunOptions {
                mask_time: a.run.mask_time,
            };
            let result = run_experiment(&cfg, opts)?;
            print!("{}", summary_table(std::slice::from_ref(&result.summary), opts.mask_time));
            if let Some(dir) = &cfg.output_dir {
                println!("wrote {}", dir.display());
            }
            if result.any_diverged() {
                return Err(HarnessError::Diverged(result.aggregate.diverged, result.trials.len()));
            }
            Ok(EXIT_OK)
        }
        Command::Compare(a) => {
            let configs = a
                .configs
                .iter()
                .map(|item| resolve_config(item, &a.run))
                .collect::<Result<Vec<_>, _>>()?;
            let opts = RunOptions {
                mask_time: a.run.mask_time,
            };
            let cmp = compare(&configs, a.out.as_deref(), opts)?;
            print!("{}", summary_table(&cmp.rows, opts.mask_time));
            let diverged: usize = cmp.results.iter().map(|r| r.aggregate.diverged).sum();
            if diverged > 0 {
                let total = cmp.results.iter().map(|r| r.trials.len()).sum();
                return Err(HarnessError::Diverged(diverged, total));
            }
            Ok(EXIT_OK)
        }
        Command::Diagnose(a) => {
            let report = run_suite(a.suite, a.seed).map_err(|e| {
                HarnessError::Config(ConfigError::Invalid {
                    key: "diagnose".into(),
                    reason: e.to_string(),
                })
            })?;
            print!("{}", report.table());
            if let Some(path) = &a.out {
                std::fs::write(path, report.to_key_values()).map_err(|source| HarnessError::Io {
                    path: path.clone(),
                    source,
                })?;
            }
            Ok(if report.passed() { EXIT_OK } else { EXIT_DIVERGED })
        }
        Command::Presets { show } => {
            match show {
                Some(name) => {
                    let p = find_preset(&name)?;
                    println!("# {}{}", p.description, if p.documentation_only { " (documentation only)" } else { "" });
                    for (k, v) in p.entries() {
                        println!("{k} = {v}");
                    }
                }
                None => {
                    for p in PRESETS {
                        let tag = if p.documentation_only { "  [documentation only]" } else { "" };
                        println!("{:<28} {}{tag}", p.name, p.description);
                    }
                }
            }
            Ok(EXIT_OK)
        }
    }
}

/// A `compare` item is a config file if one exists at that path, otherwise
/// a preset name.
fn resolve_config(item: &str, run: &RunArgs) -> Result<ExperimentConfig, HarnessError> {
    let path = Path::new(item);
    let (cfg, _) = if path.is_file() {
        load_config(Some(path), None, &run.overrides(None))?
    } else {
        load_config(None, Some(item), &run.overrides(None))?
    };
    Ok(cfg)
}

fn gen_data(a: &GenDataArgs) -> Result<(), HarnessError> {
    let spec = SyntheticSpec {
        n: a.n,
        d: a.d,
        noise_scale: a.noise,
        noise_convention: if a.noise_convention == "stddev" {
            NoiseConvention::StdDev
        } else {
            NoiseConvention::Variance
        },
        split_fraction: a.split,
        seed: a.seed,
    };
    let data: Dataset64 = generate_synthetic(&spec)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| HarnessError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    data.save_csv(&a.out)?;
    println!(
        "wrote {} ({} train / {} val rows, d = {})",
        a.out.display(),
        data.train_indices().len(),
        data.val_indices().len(),
        data.dim()
    );
    Ok(())
}
