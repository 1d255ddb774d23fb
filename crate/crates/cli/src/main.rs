use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dtrformer::alloc::HugePageAlloc;
use dtrformer::data::{build_adjacency, read_edges_csv, write_edges_csv, Dataset, GraphPair, Split, TrafficSeries};
use dtrformer::metrics::{write_metrics_csv, MetricReport};
use dtrformer::model::{small_config, Ablations, CheckInstance};
use dtrformer::tensor::gradcheck::op_suite;
use dtrformer::train::{
    hi_evaluate, load_inputs, predict_split, restore_model, synth_generate, train_and_evaluate, SynthConfig,
    TrainConfig, DISTANCE_FILE, METRICS_FILE, TRAFFIC_FILE,
};

#[global_allocator]
static ALLOC: HugePageAlloc = HugePageAlloc;

#[derive(Parser)]
#[command(name = "dtrformer", version, about = "Spatio-temporal traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a `t,n,c,value` CSV to the binary series format and check it against a distance list
    Prepare(PrepareArgs),
    /// Generate a seeded synthetic dataset
    Synth(SynthArgs),
    /// Train a model and write its checkpoint, log and metrics
    Train(TrainArgs),
    /// Score a trained run on validation and test windows
    Eval(EvalArgs),
    /// Write per-window predictions of a trained run
    Predict(PredictArgs),
    /// Compare analytic gradients with central differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Traffic series (binary or `t,n,c,value` CSV)
    #[arg(long)]
    data: PathBuf,
    /// `from,to,distance` CSV
    #[arg(long)]
    adj: PathBuf,
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    common: Common,
    /// Input series as `t,n,c,value` rows
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    adj: PathBuf,
    /// Unix time of the first step
    #[arg(long, default_value_t = 0)]
    start_epoch: i64,
    #[arg(long, default_value_t = 300)]
    step_seconds: u32,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 16)]
    nodes: usize,
    #[arg(long, default_value_t = 14)]
    days: usize,
    /// Noise standard deviation; 0 gives an exactly periodic series
    #[arg(long, default_value_t = 5.0)]
    noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// `full` or one of the ablation variant names
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    no_adaptive: bool,
    #[arg(long)]
    no_transformer: bool,
    #[arg(long)]
    no_forward_graph: bool,
    #[arg(long)]
    no_backward_graph: bool,
    #[arg(long)]
    no_graphs: bool,
    #[arg(long)]
    no_augmented_residual: bool,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Override a config key, e.g. `--set lr=0.0005`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArgs,
    /// `train`, `val` or `test`
    #[arg(long, default_value = "test")]
    split: String,
    /// Defaults to `predictions.csv` in the run directory
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    /// Parameter components probed on the composed loss
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

/// `DTR_THREADS` caps the worker pool.
fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DTR_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("DTR_THREADS = `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn base_config(common: &Common) -> Result<TrainConfig> {
    let mut config = match &common.config {
        Some(path) => TrainConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn print_reports(rows: &[(&str, &MetricReport)]) -> Result<()> {
    write_metrics_csv(std::io::stdout().lock(), rows, true)?;
    Ok(())
}

fn prepare(a: PrepareArgs) -> Result<ExitCode> {
    let config = base_config(&a.common)?;
    let reader = BufReader::new(File::open(&a.csv).with_context(|| format!("opening {}", a.csv.display()))?);
    let series = TrafficSeries::from_csv(reader, a.start_epoch, a.step_seconds)?;
    let edges = read_edges_csv(BufReader::new(File::open(&a.adj)?))?;
    let adj = build_adjacency(&edges, series.nodes(), None, config.theta)?;
    let dataset = Dataset::new(series, config.dataset_config())?;

    std::fs::create_dir_all(&a.common.out_dir)?;
    dataset.series.save_binary(&a.common.out_dir.join(TRAFFIC_FILE))?;
    write_edges_csv(
        &edges,
        BufWriter::new(File::create(a.common.out_dir.join(DISTANCE_FILE))?),
    )?;

    let links = adj.data().iter().filter(|&&w| w > 0.0).count();
    println!(
        "{} steps, {} nodes, {} channels, {} steps per day",
        dataset.series.steps(),
        dataset.nodes(),
        dataset.channels(),
        dataset.steps_per_day
    );
    println!(
        "{} edges, {} nonzero adjacency entries (theta {})",
        edges.len(),
        links,
        config.theta
    );
    for split in Split::ALL {
        println!("{}: {} windows", split.name(), dataset.window_starts(split).len());
    }
    println!("mean {:?}, std {:?}", dataset.stats.mean, dataset.stats.std);
    Ok(ExitCode::SUCCESS)
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let cfg = SynthConfig {
        nodes: a.nodes,
        days: a.days,
        seed: a.common.seed.unwrap_or(0),
        noise: a.noise,
        ..SynthConfig::default()
    };
    let data = synth_generate(&cfg)?;
    let (traffic, distances) = data.write(&a.common.out_dir)?;
    println!("{}", traffic.display());
    println!("{}", distances.display());
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut config = base_config(&a.common)?;
    if let Some(v) = &a.variant {
        config.model.ablations = Ablations::variant(v)?;
    }
    let abl = &mut config.model.ablations;
    abl.no_adaptive |= a.no_adaptive;
    abl.no_transformer |= a.no_transformer;
    abl.no_forward_graph |= a.no_forward_graph;
    abl.no_backward_graph |= a.no_backward_graph;
    abl.no_graphs |= a.no_graphs;
    abl.no_augmented_residual |= a.no_augmented_residual;
    if let Some(n) = a.max_epochs {
        config.max_epochs = n;
    }
    for kv in &a.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{kv}`");
        };
        config.set(k.trim(), v.trim())?;
    }
    config.validate()?;

    let (dataset, graphs) = load_inputs(&a.data.data, &a.data.adj, &config)?;
    eprintln!(
        "training {} on {} nodes, {} train windows",
        config.model.ablations.label(),
        dataset.nodes(),
        dataset.window_starts(Split::Train).len()
    );
    let out = a.common.out_dir.as_path();
    let (_, summary) = train_and_evaluate(config, &dataset, graphs, Some(out), |e| {
        eprintln!(
            "epoch {:>3}  train {:.4}  val {:.4}  {:.1}s",
            e.epoch, e.train_mae, e.val_mae, e.seconds
        )
    })?;
    eprintln!(
        "best epoch {} (val MAE {:.4}){}",
        summary.report.best_epoch,
        summary.report.best_val_mae,
        if summary.report.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    print_reports(&[
        ("val", &summary.val),
        ("test", &summary.test),
        ("hi_test", &summary.baseline),
    ])?;
    Ok(ExitCode::SUCCESS)
}

fn restore(
    common: &Common,
    data: &DataArgs,
) -> Result<(TrainConfig, dtrformer::model::Dtrformer<f32>, Dataset, GraphPair)> {
    let run = common.out_dir.as_path();
    let (config, _) = dtrformer::train::load_run(run).with_context(|| format!("loading run from {}", run.display()))?;
    let (dataset, graphs) = load_inputs(&data.data, &data.adj, &config)?;
    let (config, model) = restore_model(run, &dataset)?;
    Ok((config, model, dataset, graphs))
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (config, model, dataset, graphs) = restore(&a.common, &a.data)?;
    let score = |split| -> Result<MetricReport> {
        let (pred, target) = predict_split(&model, &graphs, &dataset, split, config.batch_size)?;
        Ok(dtrformer::metrics::evaluate(
            &pred,
            &target,
            dtrformer::metrics::MAPE_FLOOR,
        )?)
    };
    let val = score(Split::Val)?;
    let test = score(Split::Test)?;
    let hi = hi_evaluate(&dataset, Split::Test)?;
    let rows = [("val", &val), ("test", &test), ("hi_test", &hi)];
    write_metrics_csv(File::create(a.common.out_dir.join(METRICS_FILE))?, &rows, true)?;
    print_reports(&rows)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_split(name: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .with_context(|| format!("unknown split `{name}`"))
}

fn predict(a: PredictArgs) -> Result<ExitCode> {
    let split = parse_split(&a.split)?;
    let (config, model, dataset, graphs) = restore(&a.common, &a.data)?;
    let (pred, target) = predict_split(&model, &graphs, &dataset, split, config.batch_size)?;
    let path = a.output.unwrap_or_else(|| a.common.out_dir.join("predictions.csv"));
    write_predictions(
        &path,
        dataset.window_starts(split),
        pred.shape(),
        pred.data(),
        target.data(),
    )?;
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

/// `start,step,node,channel,prediction,target`, one row per value.
fn write_predictions(path: &Path, starts: &[usize], shape: &[usize], pred: &[f32], target: &[f32]) -> Result<()> {
    let (t, n, c) = (shape[1], shape[2], shape[3]);
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "start,step,node,channel,prediction,target")?;
    for (i, (p, y)) in pred.iter().zip(target).enumerate() {
        let b = i / (t * n * c);
        writeln!(
            out,
            "{},{},{},{},{},{}",
            starts[b],
            (i / (n * c)) % t + 1,
            (i / c) % n,
            i % c,
            p,
            y
        )?;
    }
    out.flush()?;
    Ok(())
}

const OP_TOL: f64 = 1e-5;
const MODEL_TOL: f64 = 1e-4;

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let mut ok = true;
    for c in op_suite(a.eps)? {
        let pass = c.report.max_relative_error <= OP_TOL;
        ok &= pass;
        println!(
            "{:<22} {:.3e} {}",
            c.case,
            c.report.max_relative_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    let inst = CheckInstance::new(small_config(), 2, a.common.seed.unwrap_or(0))?;
    let r = inst.grad_check(a.count, a.common.seed.unwrap_or(0) + 1, a.eps)?;
    let pass = r.max_relative_error <= MODEL_TOL;
    ok &= pass;
    println!(
        "{:<22} {:.3e} {} ({} components)",
        "model",
        r.max_relative_error,
        if pass { "ok" } else { "FAIL" },
        r.checked
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
