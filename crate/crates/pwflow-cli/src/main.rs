//! `pwflow`: benchmark harness and model tooling for piecewise flows.
//!
//! Subcommands: `benchmark` reproduces the divergence and cost tables on
//! the analytic targets; `train`, `sample` and `evaluate` operate on user
//! sample files and fitted models. Every command is deterministic given
//! `--seed`; the `PWFLOW_THREADS` environment variable caps parallelism
//! without changing any result.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format problem, 3 training
//! failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use pwflow::{
    avg_log_likelihood, kl_divergence, load_samples, ClusterSelection, ColumnLayout, Error,
    PiecewiseConfig, PiecewiseFlow, Target, TrainingConfig,
};
use pwflow_cli::benchmark::{run_benchmark, BenchmarkConfig};
use pwflow_cli::report::render_report;

#[derive(Parser)]
#[command(
    name = "pwflow",
    version,
    about = "Piecewise normalizing flows: benchmark, train, sample, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark single flows against piecewise mixtures on analytic targets.
    Benchmark(BenchmarkArgs),
    /// Fit a piecewise mixture to a sample file and save it.
    Train(TrainArgs),
    /// Draw points from a fitted model into a sample file.
    Sample(SampleArgs),
    /// Score a fitted model against an analytic target or a sample file.
    Evaluate(EvaluateArgs),
}

/// Hidden widths such as `32,32`. Newtype so clap reads one comma list
/// instead of repeated flags.
#[derive(Clone, Debug)]
struct Widths(Vec<usize>);

fn parse_widths(s: &str) -> Result<Widths, String> {
    let mut widths = Vec::new();
    for part in s.split(',') {
        let w: usize =
            part.trim().parse().map_err(|_| format!("bad width {:?} in {s:?}", part.trim()))?;
        if w == 0 {
            return Err("layer widths must be positive".to_string());
        }
        widths.push(w);
    }
    if widths.is_empty() {
        return Err("expected at least one layer width".to_string());
    }
    Ok(Widths(widths))
}

/// Inclusive cluster-count range such as `2..12`.
#[derive(Clone, Copy, Debug)]
struct KRange(usize, usize);

fn parse_krange(s: &str) -> Result<KRange, String> {
    let (lo, hi) = s.split_once("..").ok_or_else(|| format!("expected MIN..MAX, got {s:?}"))?;
    let lo: usize = lo.trim().parse().map_err(|_| format!("bad lower bound in {s:?}"))?;
    let hi: usize = hi.trim().parse().map_err(|_| format!("bad upper bound in {s:?}"))?;
    if lo < 2 || hi < lo {
        return Err(format!("need 2 <= MIN <= MAX, got {lo}..{hi}"));
    }
    Ok(KRange(lo, hi))
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Fixed number of mixture components.
    #[arg(long, conflicts_with = "auto_k")]
    clusters: Option<usize>,
    /// Choose the component count by silhouette over this range, e.g. 2..12.
    #[arg(long, value_parser = parse_krange)]
    auto_k: Option<KRange>,
    /// Hidden layer widths of the reference flow.
    #[arg(long, value_parser = parse_widths, default_value = "32,32")]
    hidden: Widths,
    /// Autoregressive blocks per flow.
    #[arg(long, default_value_t = pwflow::DEFAULT_BLOCKS)]
    blocks: usize,
}

impl ModelArgs {
    fn selection(&self) -> ClusterSelection {
        match (self.clusters, self.auto_k) {
            (Some(k), _) => ClusterSelection::Fixed(k),
            (None, Some(KRange(lo, hi))) => ClusterSelection::Auto { k_min: lo, k_max: hi },
            (None, None) => ClusterSelection::Auto { k_min: 2, k_max: 12 },
        }
    }
}

#[derive(Args, Clone)]
struct TrainingArgs {
    /// Epoch budget; early stopping usually ends well before it.
    #[arg(long, default_value_t = 10_000)]
    max_epochs: usize,
    /// Patience as a fraction of the epoch budget.
    #[arg(long, default_value_t = 0.02)]
    patience_frac: f64,
    /// Held-out fraction for early stopping.
    #[arg(long, default_value_t = 0.2)]
    test_frac: f64,
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Minibatch size; 0 trains on the full batch every epoch.
    #[arg(long, default_value_t = 512)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainingArgs {
    fn config(&self) -> TrainingConfig {
        TrainingConfig {
            max_epochs: self.max_epochs,
            patience_fraction: self.patience_frac,
            test_fraction: self.test_frac,
            learning_rate: self.lr,
            batch_size: if self.batch_size == 0 { None } else { Some(self.batch_size) },
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Target to benchmark (repeatable); defaults to all analytic targets.
    #[arg(long = "target")]
    targets: Vec<String>,
    /// Training repetitions per target and method.
    #[arg(long, default_value_t = 10)]
    runs: usize,
    /// Training points drawn per target.
    #[arg(long, default_value_t = 10_000)]
    train_samples: usize,
    /// Model draws per divergence estimate.
    #[arg(long, default_value_t = 10_000)]
    kl_samples: usize,
    /// Points per plot-ready sample dump (0 = skip dumps).
    #[arg(long, default_value_t = 10_000)]
    dump_samples: usize,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Directory for the report, metadata, dumps and timing files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Sample file: whitespace or comma separated coordinates, optional
    /// header line, or the binary sample format.
    #[arg(long)]
    input: PathBuf,
    /// Treat the last column as a per-sample weight.
    #[arg(long)]
    weighted: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Where to write the fitted model.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Fitted model file.
    #[arg(long)]
    model: PathBuf,
    /// Number of points to draw.
    #[arg(short, long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append provenance columns: component index and latent coordinates.
    #[arg(long)]
    provenance: bool,
    /// Output sample file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fitted model file.
    #[arg(long)]
    model: PathBuf,
    /// Analytic target to compare against via Monte Carlo divergence.
    #[arg(long, conflicts_with = "samples")]
    target: Option<String>,
    /// Sample file to score by average log-likelihood.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Treat the last column of --samples as a per-sample weight.
    #[arg(long)]
    weighted: bool,
    /// Model draws for the divergence estimate.
    #[arg(short, long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Training { .. } | Error::ClusterTraining { .. } => 3,
        _ => 2,
    }
}

fn apply_thread_cap() -> Result<(), Error> {
    let Ok(raw) = std::env::var("PWFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Error::Config(format!("PWFLOW_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool setup failed: {e}")))
}

fn cmd_benchmark(args: BenchmarkArgs) -> Result<i32, Error> {
    let defaults = BenchmarkConfig::default();
    let cfg = BenchmarkConfig {
        targets: if args.targets.is_empty() { defaults.targets } else { args.targets },
        runs: args.runs,
        seed: args.training.seed,
        train_samples: args.train_samples,
        kl_samples: args.kl_samples,
        dump_samples: args.dump_samples,
        training: args.training.config(),
        clusters: args.model.selection(),
        hidden: args.model.hidden.0.clone(),
        blocks: args.model.blocks,
        threads: None,
    };
    let outcome = run_benchmark(&cfg, &args.out)?;
    print!("{}", render_report(&outcome.rows));
    println!("report={}", args.out.join("report.tsv").display());
    if outcome.failures.is_empty() {
        return Ok(0);
    }
    for f in &outcome.failures {
        eprintln!("error: {} {}: {}", f.target, f.method, f.error);
    }
    Ok(exit_code(&outcome.failures[0].error))
}

fn cmd_train(args: TrainArgs) -> Result<i32, Error> {
    let layout = if args.weighted { ColumnLayout::WeightedLast } else { ColumnLayout::Unweighted };
    let samples = load_samples(&args.input, layout)?;
    if samples.len() < 125 {
        return Err(Error::Config(format!(
            "need at least 125 samples to cluster and hold out a test split, got {}",
            samples.len()
        )));
    }
    let cfg = PiecewiseConfig {
        training: args.training.config(),
        clusters: args.model.selection(),
        hidden: args.model.hidden.0.clone(),
        blocks: args.model.blocks,
        threads: None,
        ..PiecewiseConfig::default()
    };
    let (flow, fit) = PiecewiseFlow::fit(&samples, &cfg)?;
    flow.save(&args.out)?;

    println!("samples={}", samples.len());
    println!("dim={}", flow.dim());
    println!("chosen_k={}", fit.chosen_k());
    if let Some((ks, scores)) = &fit.scan {
        let curve: Vec<String> = ks.iter().zip(scores).map(|(k, s)| format!("{k}:{s}")).collect();
        println!("silhouette_scan={}", curve.join(","));
    }
    println!("widths={}", fit.widths.iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
    for (i, r) in fit.reports.iter().enumerate() {
        println!(
            "cluster.{i}.samples={} cluster.{i}.epochs={} cluster.{i}.test_loss={}",
            r.samples_used, r.epochs_run, r.best_test_loss
        );
    }
    let total: usize = flow.components().iter().map(|c| c.parameter_count()).sum();
    println!("parameters={total}");
    println!("cost={}", pwflow::training_cost(&fit.reports)?);
    println!("model={}", args.out.display());
    Ok(0)
}

fn cmd_sample(args: SampleArgs) -> Result<i32, Error> {
    if args.n == 0 {
        return Err(Error::Config("cannot draw zero samples".to_string()));
    }
    let flow = PiecewiseFlow::load(&args.model)?;
    if args.provenance {
        let drawn = flow.sample_with_provenance(args.n, args.seed)?;
        let dim = drawn.points.cols();
        let mut out = String::new();
        for d in 0..dim {
            out.push_str(&format!("x{d} "));
        }
        out.push_str("component");
        for d in 0..dim {
            out.push_str(&format!(" z{d}"));
        }
        out.push('\n');
        for i in 0..drawn.points.rows() {
            for (c, v) in drawn.points.row(i).iter().enumerate() {
                if c > 0 {
                    out.push(' ');
                }
                out.push_str(&v.to_string());
            }
            out.push_str(&format!(" {}", drawn.components[i]));
            for v in drawn.latents.row(i) {
                out.push_str(&format!(" {v}"));
            }
            out.push('\n');
        }
        std::fs::write(&args.out, out)?;
    } else {
        let drawn = flow.sample(args.n, args.seed)?;
        drawn.save_text(&args.out, false)?;
    }
    println!("n={}", args.n);
    println!("out={}", args.out.display());
    Ok(0)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<i32, Error> {
    let flow = PiecewiseFlow::load(&args.model)?;
    match (&args.target, &args.samples) {
        (Some(name), None) => {
            let target = Target::by_name(name)?;
            let kl = kl_divergence(&flow, &target, args.n, args.seed)?;
            println!("target={name}");
            println!("kl={}", kl.value);
            println!("mc_error={}", kl.mc_error);
            println!("n={}", kl.n_samples);
            println!("clipped={}", kl.clipped);
        }
        (None, Some(path)) => {
            let layout =
                if args.weighted { ColumnLayout::WeightedLast } else { ColumnLayout::Unweighted };
            let samples = load_samples(path, layout)?;
            if samples.dim() != flow.dim() {
                return Err(Error::Config(format!(
                    "model has dimension {}, sample file has dimension {}",
                    flow.dim(),
                    samples.dim()
                )));
            }
            let (avg, err) = avg_log_likelihood(&flow, &samples)?;
            println!("avg_log_likelihood={avg}");
            println!("error_2sigma={err}");
            println!("n={}", samples.len());
        }
        _ => {
            return Err(Error::Config(
                "choose exactly one of --target NAME or --samples FILE".to_string(),
            ));
        }
    }
    Ok(0)
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests arrive here too; only real usage
            // problems take the usage exit code.
            let failed = e.use_stderr();
            let _ = e.print();
            std::process::exit(if failed { 1 } else { 0 });
        }
    };
    let run = || -> Result<i32, Error> {
        apply_thread_cap()?;
        match cli.command {
            Command::Benchmark(args) => cmd_benchmark(args),
            Command::Train(args) => cmd_train(args),
            Command::Sample(args) => cmd_sample(args),
            Command::Evaluate(args) => cmd_evaluate(args),
        }
    };
    match run() {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
