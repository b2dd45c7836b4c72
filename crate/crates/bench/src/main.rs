use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gpbench::report::{emit_report, read_json_report, Method, MetricRow, ReportFormat, RunManifest};
use gpbench::runner::{gpr_row, sgpr_rows, svgp_row, trivial_rows, DatasetSource};
use gpbench_core::baseline::BaselineConfig;
use gpbench_core::data::{sample_toy, ToyGenerator};
use gpbench_core::kernels::KernelFamily;
use gpbench_core::svgp::{PlateauConfig, SvgpTrainConfig};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "gpbench",
    version,
    about = "Benchmark exact and sparse Gaussian-process regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Automatic SGPR procedure plus linear, constant-mean and (when small enough) exact GPR references.
    Bench(BenchArgs),
    /// Exact GPR only.
    Gpr(GprArgs),
    /// SVGP trained with Adam on minibatches.
    Svgp(SvgpArgs),
    /// Write a raw toy dataset as CSV.
    Toy(ToyArgs),
    /// Merge JSON reports and re-emit them.
    Report(ReportArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Delimited numeric text file with a header row.
    #[arg(long, conflicts_with = "toy", required_unless_present = "toy")]
    data: Option<PathBuf>,
    /// Toy generator: smooth1d or step1d.
    #[arg(long)]
    toy: Option<String>,
    /// Target column for --data, by name or zero-based index.
    #[arg(long, default_value = "last")]
    target: String,
    /// Number of toy points (before the train/test split).
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Toy noise standard deviation.
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,
}

impl DataArgs {
    fn source(&self) -> DatasetSource {
        match (&self.data, &self.toy) {
            (Some(path), _) => DatasetSource::File {
                path: path.clone(),
                target: self.target.parse().expect("infallible"),
            },
            (None, Some(name)) => DatasetSource::Toy {
                name: name.clone(),
                n: self.n,
                noise_sd: self.noise_sd,
            },
            (None, None) => unreachable!("clap requires --data or --toy"),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "se")]
    kernel: KernelFamily,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to run.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    /// Training time budget per run.
    #[arg(long)]
    timeout_secs: Option<f64>,
}

impl RunArgs {
    fn seed_list(&self) -> Vec<u64> {
        (self.seed..self.seed + self.seeds.max(1)).collect()
    }
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated inducing budgets.
    #[arg(long, value_delimiter = ',')]
    m_schedule: Option<Vec<usize>>,
    /// Run exact GPR only when the training split has at most this many points.
    #[arg(long, default_value_t = 20_000)]
    exact_gpr_cap: usize,
}

#[derive(Args)]
struct GprArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 20_000)]
    exact_gpr_cap: usize,
}

#[derive(Args)]
struct SvgpArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Number of inducing points.
    #[arg(long, default_value_t = 100)]
    m: usize,
    #[arg(long, default_value_t = 10_000)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    /// Keep the learning rate fixed.
    #[arg(long)]
    no_scheduler: bool,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    name: String,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    noise_sd: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON reports to merge.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
    #[arg(long, default_value = "merged")]
    stem: String,
}

fn manifest(
    source: &DatasetSource,
    method: Method,
    kernel: Option<KernelFamily>,
    seed: u64,
    config: serde_json::Value,
    out: &Path,
) -> RunManifest {
    RunManifest {
        dataset: source.id(),
        method,
        kernel: kernel.map(|k| k.to_string()),
        seed,
        config: json!({ "source": source, "settings": config }),
        output: out.to_path_buf(),
    }
}

fn finish(rows: Vec<MetricRow>, manifests: Vec<RunManifest>, run: &RunArgs, stem: &str) -> Result<()> {
    let files = emit_report(&rows, &manifests, run.format, &run.out, stem)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let source = args.data.source();
    let mut config = BaselineConfig {
        timeout_secs: args.run.timeout_secs,
        ..Default::default()
    };
    if let Some(s) = args.m_schedule {
        config.m_schedule = s;
    }
    config.validate()?;
    let family = args.run.kernel;
    let id = source.id();
    let mut rows = Vec::new();
    let mut manifests = Vec::new();
    for seed in args.run.seed_list() {
        let data = source.load(seed)?;
        let settings = serde_json::to_value(&config)?;

        eprintln!("[{id} seed {seed}] SGPR baseline, N = {}", data.n_train());
        rows.extend(sgpr_rows(&data, &id, family, &config)?);
        manifests.push(manifest(
            &source,
            Method::SgprBaseline,
            Some(family),
            seed,
            settings.clone(),
            &args.run.out,
        ));

        let (trivial, ridge) = trivial_rows(&data, &id)?;
        if ridge {
            eprintln!("[{id} seed {seed}] linear baseline used ridge fallback");
        }
        rows.extend(trivial);
        let trivial_settings = json!({ "ridge_fallback_used": ridge });
        manifests.push(manifest(
            &source,
            Method::Linear,
            None,
            seed,
            trivial_settings.clone(),
            &args.run.out,
        ));
        manifests.push(manifest(
            &source,
            Method::ConstantMean,
            None,
            seed,
            trivial_settings,
            &args.run.out,
        ));

        if data.n_train() <= args.exact_gpr_cap {
            eprintln!("[{id} seed {seed}] exact GPR");
            let initial = config.initial_hypers(family, data.input_dim())?;
            rows.push(gpr_row(&data, &id, family, &initial, &config.lbfgs)?);
            manifests.push(manifest(
                &source,
                Method::Gpr,
                Some(family),
                seed,
                settings,
                &args.run.out,
            ));
        }
    }
    finish(rows, manifests, &args.run, &format!("bench_{id}_{family}"))
}

fn gpr(args: GprArgs) -> Result<()> {
    let source = args.data.source();
    let config = BaselineConfig::default();
    let family = args.run.kernel;
    let id = source.id();
    let mut rows = Vec::new();
    let mut manifests = Vec::new();
    for seed in args.run.seed_list() {
        let data = source.load(seed)?;
        if data.n_train() > args.exact_gpr_cap {
            bail!(
                "training split has {} points, above --exact-gpr-cap {}",
                data.n_train(),
                args.exact_gpr_cap
            );
        }
        let initial = config.initial_hypers(family, data.input_dim())?;
        rows.push(gpr_row(&data, &id, family, &initial, &config.lbfgs)?);
        manifests.push(manifest(
            &source,
            Method::Gpr,
            Some(family),
            seed,
            serde_json::to_value(config.lbfgs)?,
            &args.run.out,
        ));
    }
    finish(rows, manifests, &args.run, &format!("gpr_{id}_{family}"))
}

fn svgp(args: SvgpArgs) -> Result<()> {
    let source = args.data.source();
    let family = args.run.kernel;
    let id = source.id();
    let baseline = BaselineConfig::default();
    let mut rows = Vec::new();
    let mut manifests = Vec::new();
    for seed in args.run.seed_list() {
        let data = source.load(seed)?;
        let config = SvgpTrainConfig {
            batch_size: args.batch_size,
            learning_rate: args.lr,
            total_steps: args.steps,
            scheduler: (!args.no_scheduler).then(PlateauConfig::default),
            seed,
            ..Default::default()
        };
        let initial = baseline.initial_hypers(family, data.input_dim())?;
        eprintln!("[{id} seed {seed}] SVGP, M = {}, {} steps", args.m, args.steps);
        rows.push(svgp_row(&data, &id, family, &initial, args.m, &config)?);
        manifests.push(manifest(
            &source,
            Method::Svgp,
            Some(family),
            seed,
            serde_json::to_value(config)?,
            &args.run.out,
        ));
    }
    finish(rows, manifests, &args.run, &format!("svgp_{id}_{family}_m{}", args.m))
}

fn toy(args: ToyArgs) -> Result<()> {
    let generator: ToyGenerator = args.name.parse()?;
    let (x, y) = sample_toy(generator, args.n, args.noise_sd, args.seed)?;
    let mut text = String::from("x,y\n");
    for i in 0..y.len() {
        text.push_str(&format!("{:.17e},{:.17e}\n", x[(i, 0)], y[i]));
    }
    gpbench::report::write_atomic(&args.out, text.as_bytes())?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    let mut manifests = Vec::new();
    for path in &args.inputs {
        let doc = read_json_report(path).with_context(|| format!("reading {}", path.display()))?;
        rows.extend(doc.rows);
        manifests.extend(doc.manifests);
    }
    let files = emit_report(&rows, &manifests, args.format, &args.out, &args.stem)?;
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Bench(a) => bench(a),
        Command::Gpr(a) => gpr(a),
        Command::Svgp(a) => svgp(a),
        Command::Toy(a) => toy(a),
        Command::Report(a) => report(a),
    }
}
