use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::Parser;

use hybrid_graph::bench::{self, BenchConfig};
use hybrid_graph::model::init_model;
use hybrid_graph::pipeline::{Engine, PipelineConfig, RunMode};

/// Runs the latency benchmark grid on the virtual device and writes one CSV
/// row per kept trial. A summary table goes to stdout.
#[derive(Debug, Parser)]
#[command(name = "hybrid-bench", version)]
struct Args {
    /// Flat `section.key = value` config file; flags override it.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Comma-separated run modes.
    #[arg(long, value_name = "M[,M...]")]
    mode: Option<String>,
    #[arg(long, value_name = "L[,L...]")]
    prompt_lens: Option<String>,
    #[arg(long, value_name = "L[,L...]")]
    gen_lens: Option<String>,
    #[arg(long, value_name = "N")]
    trials: Option<usize>,
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    /// CSV output path; stdout if omitted.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    #[arg(long = "cost.launch-us", value_name = "X")]
    launch_us: Option<f64>,
    #[arg(long = "cost.host-us", value_name = "X")]
    host_us: Option<f64>,
    #[arg(long = "cost.alpha", value_name = "X")]
    alpha: Option<f64>,
    #[arg(long = "cost.capture-us", value_name = "X")]
    capture_us: Option<f64>,
    /// Zero disables jitter.
    #[arg(long = "cost.jitter-sigma", value_name = "X")]
    jitter_sigma: Option<f64>,
    /// Writes the first trial's timeline to PATH and its counters to
    /// PATH.counters.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
    /// Prints the captured graph for length L and exits.
    #[arg(long, value_name = "L")]
    dump_graph: Option<usize>,
}

fn build_config(args: &Args) -> anyhow::Result<BenchConfig> {
    let mut cfg = match &args.config {
        Some(p) => BenchConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => BenchConfig::default(),
    };
    let overrides: [(&str, &str, Option<String>); 10] = [
        ("--mode", "bench.modes", args.mode.clone()),
        (
            "--prompt-lens",
            "bench.prompt_lens",
            args.prompt_lens.clone(),
        ),
        ("--gen-lens", "bench.gen_lens", args.gen_lens.clone()),
        (
            "--trials",
            "bench.trials",
            args.trials.map(|v| v.to_string()),
        ),
        ("--seed", "bench.seed", args.seed.map(|v| v.to_string())),
        (
            "--cost.launch-us",
            "cost.launch_us",
            args.launch_us.map(|v| v.to_string()),
        ),
        (
            "--cost.host-us",
            "cost.host_us",
            args.host_us.map(|v| v.to_string()),
        ),
        (
            "--cost.alpha",
            "cost.alpha",
            args.alpha.map(|v| v.to_string()),
        ),
        (
            "--cost.capture-us",
            "cost.capture_us",
            args.capture_us.map(|v| v.to_string()),
        ),
        (
            "--cost.jitter-sigma",
            "cost.jitter_sigma",
            args.jitter_sigma.map(|v| v.to_string()),
        ),
    ];
    for (flag, key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v).with_context(|| flag.to_string())?;
        }
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    Ok(cfg)
}

fn dump_graph(cfg: &BenchConfig, len: usize) -> anyhow::Result<()> {
    let weights = Arc::new(init_model(cfg.model.clone())?);
    let pipeline = PipelineConfig {
        warmup: None,
        ..cfg.pipeline.clone()
    };
    let mut engine = Engine::new(weights, RunMode::Hybrid, &pipeline)?;
    print!("{}", engine.capture_length(len)?.dump());
    Ok(())
}

fn run(args: Args) -> anyhow::Result<()> {
    let cfg = build_config(&args)?;
    if let Some(len) = args.dump_graph {
        return dump_graph(&cfg, len);
    }
    let out = bench::run_bench(&cfg, args.trace.is_some())?;
    match &cfg.out {
        Some(path) => bench::emit_csv(&out.rows, path)
            .with_context(|| format!("writing {}", path.display()))?,
        None => print!("{}", bench::csv_string(&out.rows)),
    }
    if let (Some(path), Some(tl)) = (&args.trace, &out.trace) {
        std::fs::write(path, tl.to_records())?;
        let mut counters = path.clone().into_os_string();
        counters.push(".counters");
        std::fs::write(counters, tl.counters.to_kv())?;
    }
    if cfg.out.is_some() {
        print!("{}", bench::emit_summary(&out.summary));
    } else {
        eprint!("{}", bench::emit_summary(&out.summary));
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
