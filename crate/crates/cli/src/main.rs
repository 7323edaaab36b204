//! `causemap` command line: scenario generation, prewhitening, causal and
//! spike-and-slab selection, model fitting, evaluation, and the rolling
//! comparison report. Outputs land in `--out-dir`; a one-line JSON summary
//! goes to stdout, and failures print a machine-readable error JSON with a
//! nonzero exit.

mod commands;
mod config;

use std::ops::Range;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::PipelineConfig;

#[derive(Parser)]
#[command(name = "causemap", version, about = "Causal feature selection for aggregated incidence scenarios")]
struct Cli {
    /// JSON configuration file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (bootstrap runs, chains, prewhitening jobs).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario with a known causal graph.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Prewhiten covariate fields and incidence; emit residual CSVs.
    Prewhiten {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Rank and select features: `causal` (bootstrap PC) or `spikeslab`.
    Select {
        /// `causal` or `spikeslab`.
        method: String,
        #[arg(long)]
        scenario: PathBuf,
        /// Required: selection is seeded for reproducibility.
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        /// Bootstrap run count for causal selection.
        #[arg(long)]
        bootstrap: Option<usize>,
        /// `gamma` or `perm`.
        #[arg(long)]
        pvalue: Option<String>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Fit the disaggregation regression on selected features.
    Fit {
        #[arg(long)]
        scenario: PathBuf,
        /// Required: the spatial basis is seeded for reproducibility.
        #[arg(long)]
        seed: u64,
        /// Comma-separated feature names.
        #[arg(long, value_delimiter = ',')]
        features: Vec<String>,
        /// Or a selected.json written by `select`.
        #[arg(long)]
        selected: Option<PathBuf>,
        /// Training months as `start:end` (end exclusive).
        #[arg(long)]
        train_months: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a fitted model against observed rates.
    Evaluate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Months as `start:end` (end exclusive).
        #[arg(long)]
        months: String,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Rolling-window comparison of no-selection vs causal vs spike-and-slab.
    Report {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        train_len: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
}

fn parse_months(text: &str) -> Result<Range<usize>, String> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 2 {
        return Err(format!("month range must be `start:end`, got `{text}`"));
    }
    let start: usize = parts[0]
        .parse()
        .map_err(|_| format!("bad month `{}`", parts[0]))?;
    let end: usize = parts[1]
        .parse()
        .map_err(|_| format!("bad month `{}`", parts[1]))?;
    if end <= start {
        return Err(format!("empty month range `{text}`"));
    }
    Ok(start..end)
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig, String> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let f = std::fs::File::open(p).map_err(|e| format!("opening {}: {e}", p.display()))?;
            serde_json::from_reader(std::io::BufReader::new(f))
                .map_err(|e| format!("parsing {}: {e}", p.display()))
        }
    }
}

fn load_selected(path: &PathBuf) -> Result<Vec<String>, String> {
    let f = std::fs::File::open(path).map_err(|e| format!("opening {}: {e}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_reader(std::io::BufReader::new(f)).map_err(|e| e.to_string())?;
    value
        .get("features")
        .and_then(|v| v.as_array())
        .map(|arr| {
            arr.iter()
                .filter_map(|v| v.as_str().map(String::from))
                .collect()
        })
        .ok_or_else(|| format!("{} has no `features` array", path.display()))
}

fn run(cli: Cli) -> commands::CmdResult {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| e.to_string())?;
    }
    let mut cfg = load_config(&cli.config)?;

    match cli.command {
        Command::Synth { seed, out_dir } => commands::cmd_synth(&cfg, seed, &out_dir),
        Command::Prewhiten {
            scenario,
            seed,
            out_dir,
        } => commands::cmd_prewhiten(&cfg, &scenario, seed, &out_dir),
        Command::Select {
            method,
            scenario,
            seed,
            out_dir,
            alpha,
            bootstrap,
            pvalue,
            fraction,
        } => {
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(b) = bootstrap {
                cfg.bootstrap_runs = b;
            }
            if let Some(p) = pvalue {
                cfg.pvalue = p;
            }
            if let Some(f) = fraction {
                cfg.subsample_fraction = f;
            }
            commands::cmd_select(&cfg, &method, &scenario, seed, &out_dir)
        }
        Command::Fit {
            scenario,
            seed,
            mut features,
            selected,
            train_months,
            out_dir,
        } => {
            if let Some(path) = selected {
                features = load_selected(&path)?;
            }
            if features.is_empty() {
                return Err("no features given (use --features or --selected)".into());
            }
            let train = parse_months(&train_months)?;
            commands::cmd_fit(&cfg, &scenario, seed, &features, train, &out_dir)
        }
        Command::Evaluate {
            scenario,
            model,
            months,
            out_dir,
        } => {
            let months = parse_months(&months)?;
            commands::cmd_evaluate(&scenario, &model, months, &out_dir)
        }
        Command::Report {
            scenario,
            seed,
            out_dir,
            iterations,
            train_len,
            horizon,
        } => {
            if let Some(n) = iterations {
                cfg.rolling.iterations = n;
            }
            if let Some(n) = train_len {
                cfg.rolling.train_len = n;
            }
            if let Some(n) = horizon {
                cfg.rolling.horizon = n;
            }
            commands::cmd_report(&cfg, &scenario, seed, &out_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(message) => {
            println!("{}", serde_json::json!({ "error": message }));
            ExitCode::FAILURE
        }
    }
}
