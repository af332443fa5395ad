use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use trafficopt::experiment::{run_experiment, seed_list, write_csv_outputs, Arm};
use trafficopt::history::read_history_csv;
use trafficopt::par::Execution;
use trafficopt::prediction::{fit, ModelDocument, ModelEntry};
use trafficopt::scenario::{load_config, Loaded};
use trafficopt::Error;

#[derive(Parser, Debug)]
#[command(name = "trafficopt", version, about = "Forecast-driven signal timing experiments")]
struct Cli {
    /// Scenario file (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// First seed; defaults to the scenario's seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of consecutive seeds
    #[arg(long, global = true, default_value_t = 1)]
    seeds: usize,
    /// Directory for per-interval and summary CSV files
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// Suppress notices on stderr
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fixed vs adaptive comparison, adaptive policy called directly
    Run {
        #[arg(long, value_enum, default_value_t = PolicyArg::Both)]
        policy: PolicyArg,
        /// Run seeds one after another instead of on the thread pool
        #[arg(long)]
        sequential: bool,
    },
    /// Adaptive policy driven end to end over the message bus
    Loop,
    /// Fit one ARX model per approach from a history CSV
    Fit {
        history: PathBuf,
        #[arg(long)]
        p: usize,
        #[arg(long, default_value_t = 0)]
        q: usize,
        #[arg(long, default_value_t = 0.0)]
        ridge: f64,
    },
    /// Load and validate a scenario without running it
    Validate,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    Fixed,
    Adaptive,
    Both,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn usage(e: Error) -> Self {
        Failure::Usage(e.to_string())
    }
    fn runtime(e: Error) -> Self {
        Failure::Runtime(e.to_string())
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
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("runtime fault: {m}");
            ExitCode::from(2)
        }
    }
}

fn load(cli: &Cli) -> Result<Loaded, Failure> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Failure::Usage("--config PATH is required for this command".into()))?;
    let loaded = load_config(path).map_err(Failure::usage)?;
    if !cli.quiet {
        for n in &loaded.notices {
            eprintln!("notice: {n}");
        }
    }
    Ok(loaded)
}

fn seeds(cli: &Cli, loaded: &Loaded) -> Result<Vec<u64>, Failure> {
    if cli.seeds == 0 {
        return Err(Failure::Usage("--seeds must be >= 1".into()));
    }
    Ok(seed_list(cli.seed.unwrap_or(loaded.config.seed), cli.seeds))
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn experiment(cli: &Cli, arms: &[Arm], exec: Execution) -> Result<(), Failure> {
    let loaded = load(cli)?;
    let seeds = seeds(cli, &loaded)?;
    let (report, runs) = run_experiment(&loaded.config, &seeds, arms, exec).map_err(Failure::runtime)?;
    if let Some(dir) = &cli.csv {
        write_csv_outputs(dir, &report, &runs).map_err(Failure::runtime)?;
    }
    if !cli.quiet {
        if let Some(stats) = &report.loop_stats {
            for w in &stats.warnings {
                eprintln!("warning: {w}");
            }
        }
    }
    print_json(&report);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Run { policy, sequential } => {
            let arms: &[Arm] = match policy {
                PolicyArg::Fixed => &[Arm::Fixed],
                PolicyArg::Adaptive => &[Arm::Adaptive],
                PolicyArg::Both => &[Arm::Fixed, Arm::Adaptive],
            };
            let exec = if *sequential { Execution::Sequential } else { Execution::Parallel };
            experiment(cli, arms, exec)
        }
        Command::Loop => experiment(cli, &[Arm::Loop], Execution::Sequential),
        Command::Fit { history, p, q, ridge } => cmd_fit(cli, history, *p, *q, *ridge),
        Command::Validate => {
            let loaded = load(cli)?;
            let c = &loaded.config;
            print_json(&serde_json::json!({
                "name": c.name,
                "approaches": c.intersection.approaches.iter().map(|a| &a.id).collect::<Vec<_>>(),
                "cycle_length_s": c.intersection.cycle_length_s,
                "green_budget_s": c.intersection.green_budget(),
                "duration_s": c.duration_s,
                "rounds": (c.duration_s / c.loop_config.reevaluation_period_s).ceil(),
                "valid": true,
            }));
            Ok(())
        }
    }
}

fn cmd_fit(cli: &Cli, history: &Path, p: usize, q: usize, ridge: f64) -> Result<(), Failure> {
    let file = std::fs::File::open(history)
        .map_err(|e| Failure::Usage(format!("{}: {e}", history.display())))?;
    let hist = read_history_csv(file, Some(q)).map_err(Failure::usage)?;
    if hist.series.is_empty() {
        return Err(Failure::Usage(format!("{}: no data rows", history.display())));
    }
    let mut models = Vec::with_capacity(hist.series.len());
    for (id, series) in &hist.series {
        let (mut m, report) = fit(series, &hist.exog, p, q, ridge)
            .map_err(|e| Failure::Usage(format!("approach `{id}`: {e}")))?;
        m.exog_names = hist.exog_names.clone();
        if report.condition_warning && !cli.quiet {
            eprintln!("notice: approach `{id}`: ill-conditioned fit, ridge fallback used");
        }
        models.push(ModelEntry::from_model(&m, Some(report)));
    }
    let doc = ModelDocument { models };
    let text = doc.to_toml();
    if let Some(dir) = &cli.csv {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.to_string()))?;
        let mut w = csv::Writer::from_path(dir.join("fit.csv")).map_err(|e| Failure::Runtime(e.to_string()))?;
        let rows = doc.models.iter().map(|m| {
            let r = m.report.clone().expect("fitted");
            let coef = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
            [
                m.approach_id.clone(),
                m.alpha.to_string(),
                coef(&m.beta),
                coef(&m.gamma),
                r.residual_rmse.to_string(),
                r.n_samples.to_string(),
            ]
        });
        w.write_record(["approach_id", "alpha", "beta", "gamma", "residual_rmse", "n_samples"])
            .and_then(|_| rows.map(|r| w.write_record(&r)).collect::<Result<(), _>>())
            .and_then(|_| w.flush().map_err(Into::into))
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    print!("{text}");
    Ok(())
}
