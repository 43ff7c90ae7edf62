//! `tamaraw`: drives the adaptive padding pipeline over a workspace directory.
//!
//! Every subcommand reads the artifacts of earlier stages from the workspace
//! and writes its own next to them. Exit status is 0 on success, 1 for usage
//! errors (bad flags, missing or stale upstream artifacts), 2 for data errors
//! and 3 when an acceptance check such as the attack-versus-bound comparison
//! fails.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tamaraw_core::pipeline::{Mode, Pipeline, PipelineConfig};
use tamaraw_core::tamaraw::{defend, overheads, TamarawParams};
use tamaraw_core::trace::read_trace_file;
use tamaraw_core::Error;

#[derive(Debug, Parser)]
#[command(name = "tamaraw", version, about = "Adaptive Tamaraw padding toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Workspace directory holding every artifact.
    #[arg(long, global = true, default_value = "workspace")]
    workspace: PathBuf,

    /// JSON configuration file; flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Anonymity set size used by `attack` and the headline numbers.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Safe-time accuracy ratio.
    #[arg(long, global = true)]
    alpha: Option<f64>,

    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<Mode>,

    /// Synthetic corpus size. Part of the configuration, so pass it to every
    /// command that follows `synth` (or put it in the config file).
    #[arg(long, global = true)]
    sites: Option<u32>,

    #[arg(long, global = true)]
    traces_per_site: Option<u32>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "in-training" => Ok(Mode::InTraining),
        "out-of-training" => Ok(Mode::OutOfTraining),
        _ => Err(format!("unknown mode `{s}` (expected in-training or out-of-training)")),
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth,
    /// Import a directory of `<site>-<instance>` trace files.
    Ingest {
        #[arg(long)]
        input: PathBuf,
    },
    /// Write the traffic aggregation matrix of every trace.
    Tam,
    /// Pure Tamaraw over the dataset, or over one trace file with `--trace`.
    Defend(DefendArgs),
    /// Grid search and Pareto filter over global parameters.
    Pareto,
    /// Mine intra-site patterns.
    Patterns,
    /// Build anonymity sets for every (k, L).
    Sets,
    /// Train the detector and derive safe decision times.
    Safetimes,
    /// Simulate the adaptive defense.
    Simulate,
    /// Information-leakage bounds for every (k, L).
    Bounds,
    /// Closed-world attack on adaptively defended traces.
    Attack,
    /// Join all artifacts into table and figure data.
    Report,
    /// Run every stage in order, generating the corpus if needed.
    Run,
}

#[derive(Debug, Args)]
struct DefendArgs {
    #[arg(long)]
    rho_out: Option<f64>,
    #[arg(long)]
    rho_in: Option<f64>,
    #[arg(long)]
    bucket: Option<u32>,
    /// Defend this single trace file instead of the dataset.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Where to write the defended cells of `--trace` (stdout by default).
    #[arg(long, requires = "trace")]
    output: Option<PathBuf>,
}

fn load_config(g: &GlobalArgs) -> Result<PipelineConfig, Error> {
    let mut config = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = g.seed {
        config.seed = seed;
    }
    if let Some(k) = g.k {
        config.k = k;
    }
    if let Some(alpha) = g.alpha {
        config.alpha = alpha;
    }
    if let Some(mode) = g.mode {
        config.mode = mode;
    }
    if let Some(n) = g.sites {
        config.synth.n_sites = n;
    }
    if let Some(n) = g.traces_per_site {
        config.synth.traces_per_site = n;
    }
    Ok(config)
}

fn defend_params(config: &PipelineConfig, args: &DefendArgs) -> Result<TamarawParams, Error> {
    TamarawParams::new(
        args.rho_out.unwrap_or(config.global.rho_out),
        args.rho_in.unwrap_or(config.global.rho_in),
        args.bucket.unwrap_or(config.global.bucket),
    )
}

fn defend_one(
    params: &TamarawParams,
    path: &std::path::Path,
    output: Option<&std::path::Path>,
) -> Result<String, Error> {
    let trace = read_trace_file(path, 0, 0)?;
    let defended = defend(&trace, params)?;
    let mut csv = String::from("time,direction,is_dummy\n");
    for c in &defended.cells {
        csv.push_str(&format!(
            "{:.9},{},{}\n",
            c.time,
            c.direction.sign(),
            u8::from(c.is_dummy)
        ));
    }
    let o = overheads(&trace, &defended)?;
    let summary = format!(
        "{} cells ({} out, {} in), bandwidth overhead {:.4}, time overhead {:.4}",
        defended.total_cells(),
        defended.n_out,
        defended.n_in,
        o.bandwidth,
        o.time
    );
    match output {
        Some(out) => {
            std::fs::write(out, csv).map_err(|e| Error::Io {
                path: out.to_path_buf(),
                source: e,
            })?;
            Ok(summary)
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(csv.as_bytes());
            Ok(String::new())
        }
    }
}

fn run(cli: Cli) -> Result<Vec<String>, Error> {
    let config = load_config(&cli.global)?;
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let pipeline = Pipeline::new(config, &cli.global.workspace)?;
    let one = |r: Result<String, Error>| r.map(|m| vec![m]);
    match &cli.command {
        Command::Synth => one(pipeline.synth()),
        Command::Ingest { input } => one(pipeline.ingest(input)),
        Command::Tam => one(pipeline.tam()),
        Command::Defend(args) => {
            let params = defend_params(&pipeline.config, args)?;
            match &args.trace {
                Some(path) => one(defend_one(&params, path, args.output.as_deref())),
                None => one(pipeline.defend_all(&params)),
            }
        }
        Command::Pareto => one(pipeline.pareto()),
        Command::Patterns => one(pipeline.patterns()),
        Command::Sets => one(pipeline.sets()),
        Command::Safetimes => one(pipeline.safetimes()),
        Command::Simulate => one(pipeline.simulate()),
        Command::Bounds => one(pipeline.bounds()),
        Command::Attack => one(pipeline.attack()),
        Command::Report => one(pipeline.report().map(|r| r.message)),
        Command::Run => pipeline.run_all(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(lines) => {
            for l in lines.iter().filter(|l| !l.is_empty()) {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
