use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rankope::environment::{generate_logged_dataset, true_policy_value, ContextSource};
use rankope::harness::{
    emit_outputs, prepare_grid_point, run_selection, run_sweep, runs_stream, verify_theorems,
    verify_toy, ExperimentConfig, OutputFormat, TheoremScale, VerificationReport,
};
use rankope::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VERIFICATION: u8 = 3;

/// Off-policy evaluation experiments for ranking policies.
#[derive(Parser)]
#[command(name = "rankope", version, about)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true, env = "RANKOPE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sweep and write results.
    Run(RunArgs),
    /// Recompute the worked toy example's importance weights.
    VerifyToy,
    /// Check closed-form bias/variance expressions against exact enumeration.
    VerifyTheorems {
        /// JSON scale (action_count, ranking_length, contexts, lambda, ...).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Policy-selection accuracy per estimator and grid value.
    Select(RunArgs),
    /// Write one logged dataset (JSON lines) for the first grid value.
    GenData(CommonArgs),
    /// Print V(π) and V(π_0) for every grid value.
    Value(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
    Svg,
    All,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
            Format::Svg => OutputFormat::Svg,
            Format::All => OutputFormat::All,
        }
    }
}

enum Failure {
    Config(String),
    Runtime(String),
    Verification,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Parse { .. } => Failure::Config(e.to_string()),
            Error::Json(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Verification) => ExitCode::from(EXIT_VERIFICATION),
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run(args) => run(args),
        Command::VerifyToy => report(verify_toy()?),
        Command::VerifyTheorems { config, seed } => {
            let mut scale = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path)
                        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
                }
                None => TheoremScale::default(),
            };
            if let Some(s) = seed {
                scale.seed = s;
            }
            report(verify_theorems(&scale)?)
        }
        Command::Select(args) => select(args),
        Command::GenData(args) => gen_data(args),
        Command::Value(args) => value(args),
    }
}

fn load(args: &CommonArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.data.master_seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn report(r: VerificationReport) -> Result<(), Failure> {
    print!("{}", r.render());
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = load(&args.common)?;
    if let Some(f) = args.format {
        cfg.output.format = f.into();
    }
    let report = run_sweep(&cfg)?;
    let manifest = emit_outputs(&report, &cfg.output.dir, cfg.output.format)?;
    println!(
        "{:>10}  {:<28} {:>12} {:>12} {:>12}",
        report.axis.to_string(),
        "estimator",
        "mse",
        "bias2",
        "var"
    );
    for r in &report.rows {
        println!(
            "{:>10}  {:<28} {:>12.6} {:>12.6} {:>12.6}",
            r.sweep_value, r.estimator, r.mse, r.bias2, r.var
        );
    }
    for note in &report.axis_notes {
        println!(
            "alpha {:>5}: deterministic users Φ(α) = {:.2} (sample {:.2})",
            note.sweep_value, note.deterministic_fraction, note.empirical_fraction
        );
    }
    println!(
        "wrote {} files to {}",
        manifest.output_digests.len() + 1,
        cfg.output.dir.display()
    );
    Ok(())
}

fn select(args: RunArgs) -> Result<(), Failure> {
    let mut cfg = load(&args.common)?;
    if let Some(f) = args.format {
        cfg.output.format = f.into();
    }
    let rows = run_selection(&cfg)?;
    let dir = &cfg.output.dir;
    fs::create_dir_all(dir)?;
    let format = cfg.output.format;
    if format.includes(OutputFormat::Csv) {
        let mut w = csv::Writer::from_path(dir.join("selection.csv"))
            .map_err(|e| Failure::Runtime(e.to_string()))?;
        for r in &rows {
            w.serialize(r)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
        }
        w.flush()?;
    }
    if format.includes(OutputFormat::Json) {
        write_json(&dir.join("selection.json"), &rows)?;
    }
    for r in &rows {
        println!(
            "{:>10}  {:<28} {:>4}/{:<4} accuracy {:.2}",
            r.sweep_value, r.estimator, r.correct, r.trials, r.accuracy
        );
    }
    Ok(())
}

fn gen_data(args: CommonArgs) -> Result<(), Failure> {
    let cfg = load(&args)?;
    let value = cfg.sweep.grid()[0];
    let p = prepare_grid_point(&cfg, value)?;
    let rng = runs_stream(&cfg).derive("seed").derive(0);
    let data = generate_logged_dataset(
        p.env.as_ref(),
        &p.pair.logging,
        p.n,
        ContextSource::Environment,
        &rng,
    )?;
    fs::create_dir_all(&cfg.output.dir)?;
    let path = cfg.output.dir.join("dataset.jsonl");
    let file = fs::File::create(&path)?;
    let mut w = std::io::BufWriter::new(file);
    data.write_jsonl(&mut w)?;
    w.flush()?;
    println!("wrote {} records to {}", data.len(), path.display());
    Ok(())
}

fn value(args: CommonArgs) -> Result<(), Failure> {
    let cfg = load(&args)?;
    let m = &cfg.pipeline.marginal;
    let mut out = Vec::new();
    for v in cfg.sweep.grid() {
        let p = prepare_grid_point(&cfg, v)?;
        let target = true_policy_value(p.env.as_ref(), &p.pair.target, &p.contexts, m)?;
        let logging = true_policy_value(p.env.as_ref(), &p.pair.logging, &p.contexts, m)?;
        out.push(serde_json::json!({
            "axis": cfg.sweep.axis.to_string(),
            "sweep_value": v,
            "target_value": target,
            "logging_value": logging,
            "contexts": p.contexts.len(),
        }));
    }
    let text = serde_json::to_string_pretty(&out).map_err(Error::from)?;
    println!("{text}");
    if args.out.is_some() {
        fs::create_dir_all(&cfg.output.dir)?;
        fs::write(cfg.output.dir.join("value.json"), text + "\n")?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}
