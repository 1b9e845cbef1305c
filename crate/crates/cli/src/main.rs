use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pseudomine::cbp::FusionMode;
use pseudomine::dataset::{box_ratio, generate_scenes, sample_sparse, Dataset, GenConfig};
use pseudomine::entropy::{fit_entropy_model, EntropyConfig, EntropyModel};
use pseudomine::pipeline::{run_to_dir, RunConfig};
use pseudomine::{io, report, Error, Exec};

#[derive(Parser)]
#[command(name = "pseudomine", version, about = "Pseudo-label mining on sparsely annotated rotated-box scenes")]
struct Cli {
    /// Worker threads (0 = one per core). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Keep a sparse subset of the labels.
    Sample(SampleArgs),
    /// Fit per-category entropy Gaussians on the labeled instances.
    FitEntropy(FitArgs),
    /// Run the mining loop.
    Mine(MineArgs),
    /// Print the final-epoch metrics of a run.
    Eval(RunArgs),
    /// Write report.svg and summary.csv for a run.
    Report(RunArgs),
}

#[derive(Args)]
struct GenArgs {
    /// TOML generator config; the built-in benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ratio: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 32)]
    bins: usize,
    /// Bins of the entropy histogram CSV.
    #[arg(long, default_value_t = 40)]
    hist_bins: usize,
    #[arg(long)]
    out: PathBuf,
    /// Histogram CSV path; defaults to the model path with a .csv extension.
    #[arg(long)]
    hist: Option<PathBuf>,
}

#[derive(Args)]
struct MineArgs {
    /// TOML run config (e.g. a previous run's config.toml); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    entropy: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_egpf: bool,
    #[arg(long)]
    no_plf: bool,
    /// Fuse boxes with the unnormalized sum divided by the cluster size.
    #[arg(long)]
    literal_eq2: bool,
    /// Disable mining: the teacher only learns from the real labels.
    #[arg(long)]
    baseline: bool,
    /// Also write every epoch's raw teacher proposals under <out>/proposals/.
    #[arg(long)]
    dump_proposals: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    run: PathBuf,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn gen(args: GenArgs, exec: Exec) -> Result<(), Error> {
    let cfg: GenConfig = match &args.config {
        Some(path) => io::read_toml(path)?,
        None => GenConfig::benchmark(),
    };
    let dataset = generate_scenes(&cfg, args.seed, exec)?;
    dataset.save(&args.out)?;
    println!(
        "wrote {} scenes, {} instances to {}",
        dataset.manifest.scenes.len(),
        dataset.manifest.instance_count(),
        args.out.display()
    );
    Ok(())
}

fn sample(args: SampleArgs) -> Result<(), Error> {
    let dataset = Dataset::load(&args.input)?;
    let manifest = sample_sparse(&dataset.manifest, args.ratio, args.seed)?;
    let ratio = box_ratio(&manifest)?;
    dataset.with_manifest(manifest).save(&args.out)?;
    println!("Box Ratio = {ratio:.3}");
    Ok(())
}

fn fit_entropy(args: FitArgs) -> Result<(), Error> {
    if args.hist_bins == 0 {
        return Err(usage("--hist-bins must be at least 1"));
    }
    let dataset = Dataset::load(&args.input)?;
    let config = EntropyConfig {
        bins: args.bins,
        ..EntropyConfig::default()
    };
    let model = fit_entropy_model(&dataset, config)?;
    io::write_json(&args.out, &model)?;
    let hist = args.hist.unwrap_or_else(|| args.out.with_extension("csv"));
    let mut csv = Vec::new();
    model
        .write_histogram_csv(&mut csv, args.hist_bins)
        .expect("writing to memory does not fail");
    io::write_bytes(&hist, &csv)?;
    for r in &model.categories {
        let name = &dataset.manifest.categories[r.category];
        println!(
            "{name}: mu {:.4} sigma {:.4} ({} samples)",
            r.gaussian.mu, r.gaussian.sigma, r.gaussian.sample_count
        );
    }
    Ok(())
}

fn mine(args: MineArgs, exec: Exec) -> Result<(), Error> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => io::read_toml(path)?,
        None => RunConfig::default(),
    };
    match (args.seed, &args.config) {
        (Some(seed), _) => cfg.seed = seed,
        (None, Some(_)) => {}
        (None, None) => return Err(usage("mine needs --seed (or a --config that carries one)")),
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(input) = args.input {
        cfg.dataset = Some(input);
    }
    if let Some(entropy) = args.entropy {
        cfg.entropy_model = Some(entropy);
    }
    if args.no_egpf {
        cfg.mode.egpf = false;
    }
    if args.no_plf {
        cfg.mode.plf = false;
    }
    if args.baseline {
        cfg.mode.mining = false;
    }
    if args.literal_eq2 {
        cfg.cbp.fusion = FusionMode::Literal;
    }
    let input = cfg.dataset.clone().ok_or_else(|| usage("mine needs --in <dataset dir>"))?;
    let dataset = Dataset::load(&input)?;
    let needs_model = cfg.mode.mining && cfg.mode.egpf;
    let model: Option<EntropyModel> = match (&cfg.entropy_model, needs_model) {
        (Some(path), true) => Some(io::read_json(path)?),
        (None, true) => return Err(usage("mine needs --entropy <model.json> unless --no-egpf or --baseline is set")),
        (_, false) => None,
    };
    let outcome = run_to_dir(&dataset, model.as_ref(), &cfg, exec, &args.out, args.dump_proposals)?;
    match outcome.epochs.last() {
        Some(last) => println!(
            "epoch {}: mAP {} precision {:.4} recall {:.4} frozen {}",
            last.epoch,
            last.all.ap.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            last.all.precision,
            last.all.recall,
            last.all.frozen_count
        ),
        None => println!("no epochs run"),
    }
    println!("run written to {}", args.out.display());
    Ok(())
}

fn eval(args: RunArgs) -> Result<(), Error> {
    let rows = report::read_run_metrics(&args.run)?;
    print!("{}", report::summary_table(&rows));
    Ok(())
}

fn write_report(args: RunArgs) -> Result<(), Error> {
    report::write_report(&args.run)?;
    let show = |name: &str| Path::new(&args.run).join(name).display().to_string();
    println!("wrote {} and {}", show(report::REPORT_FILE), show(report::SUMMARY_FILE));
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let exec = Exec::Parallel;
    match cli.command {
        Command::Gen(a) => gen(a, exec),
        Command::Sample(a) => sample(a),
        Command::FitEntropy(a) => fit_entropy(a),
        Command::Mine(a) => mine(a, exec),
        Command::Eval(a) => eval(a),
        Command::Report(a) => write_report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start {} worker threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: {msg}");
            ExitCode::from(if e.is_data_error() { 2 } else { 1 })
        }
    }
}
