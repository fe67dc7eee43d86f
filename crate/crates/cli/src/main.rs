//! `nestpref` command line: benchmark runs, itinerary utilities and a
//! terminal elicitation loop.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nestpref::bench::{run_benchmark, BenchTarget, ExperimentConfig, LatentFunction};
use nestpref::itinerary::{self, ItineraryCoefficients, Normalization, TimeBuckets};
use nestpref::pool::read_pool_csv;
use nestpref::{AcquisitionKind, NextQuery, Query, Session, SessionConfig, SurrogateKind};

#[derive(Parser)]
#[command(name = "nestpref", version, about = "Active preference learning with nested-logit comparison noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Benchmark experiments.
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Itinerary data tools.
    Itinerary {
        #[command(subcommand)]
        command: ItineraryCommand,
    },
    /// Find your favourite instance of a pool by answering comparisons on
    /// the terminal.
    Elicit(ElicitArgs),
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run models and the random baseline over seeded scenarios.
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML or JSON experiment file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Latent test function.
    #[arg(long, conflicts_with = "dataset")]
    function: Option<LatentFunction>,
    /// Dataset instead of a test function (`itinerary`).
    #[arg(long)]
    dataset: Option<String>,
    /// Surrogates to run; `random` selects the random baseline. Repeatable or
    /// comma separated.
    #[arg(long = "model", value_delimiter = ',')]
    models: Vec<String>,
    #[arg(long = "acq", value_delimiter = ',')]
    acquisitions: Vec<AcquisitionKind>,
    #[arg(long)]
    scenarios: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    baseline_reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    zeta: Option<f64>,
    /// Itinerary CSV replacing the bundled synthetic file.
    #[arg(long)]
    itineraries: Option<PathBuf>,
    /// Coefficient TOML or JSON replacing the bundled one.
    #[arg(long)]
    coefficients: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum ItineraryCommand {
    /// Write a synthetic itinerary CSV.
    Synthesize {
        #[arg(long, default_value_t = 543)]
        count: usize,
        #[arg(long, default_value_t = itinerary::SYNTHETIC_SEED)]
        seed: u64,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print utilities and choice probabilities as CSV.
    Probs {
        /// Itinerary CSV; the bundled file when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        coefficients: Option<PathBuf>,
        /// Use the nest term exactly as printed instead of the normalized one.
        #[arg(long)]
        literal: bool,
    },
}

#[derive(Args)]
struct ElicitArgs {
    /// Pool CSV with `id`, `nest`, optional `label` and feature columns.
    pool: PathBuf,
    #[arg(long, default_value = "dgp1")]
    model: SurrogateKind,
    #[arg(long, default_value = "pi")]
    acq: AcquisitionKind,
    #[arg(long, default_value_t = 20)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench { command: BenchCommand::Run(args) } => bench_run(args),
        Command::Itinerary { command } => itinerary_cmd(command),
        Command::Elicit(args) => elicit(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn experiment_config(args: &RunArgs) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(f) = args.function {
        cfg.target = match f {
            LatentFunction::F2d => BenchTarget::F2d,
            LatentFunction::F4d => BenchTarget::F4d,
            LatentFunction::F6d => BenchTarget::F6d,
        };
    }
    if let Some(d) = &args.dataset {
        if !d.eq_ignore_ascii_case("itinerary") {
            return Err(format!("unknown dataset '{d}' (expected itinerary)").into());
        }
        cfg.target = BenchTarget::Itinerary;
    }
    if !args.models.is_empty() {
        cfg.random_baseline = args.models.iter().any(|m| m.eq_ignore_ascii_case("random"));
        cfg.models = args
            .models
            .iter()
            .filter(|m| !m.eq_ignore_ascii_case("random"))
            .map(|m| m.parse::<SurrogateKind>())
            .collect::<Result<_, _>>()?;
    }
    if !args.acquisitions.is_empty() {
        cfg.acquisitions = args.acquisitions.clone();
    }
    macro_rules! set {
        ($($field:ident <- $arg:expr),*) => {$(if let Some(v) = $arg.clone() { cfg.$field = v; })*};
    }
    set!(scenarios <- args.scenarios, budget <- args.budget, baseline_repetitions <- args.baseline_reps,
         seed <- args.seed, zeta <- args.zeta);
    if args.itineraries.is_some() {
        cfg.itineraries = args.itineraries.clone();
    }
    if args.coefficients.is_some() {
        cfg.coefficients = args.coefficients.clone();
    }
    if args.out.is_some() {
        cfg.out = args.out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn bench_run(args: RunArgs) -> CliResult {
    let cfg = experiment_config(&args)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from(format!("bench-{}", cfg.target.name())));
    let problem = cfg.problem()?;
    tracing::info!(
        target = cfg.target.name(),
        instances = problem.instances.len(),
        nests = problem.nest_count,
        scenarios = cfg.scenarios,
        budget = cfg.budget,
        "starting benchmark"
    );
    let report = run_benchmark(&cfg, &problem, &mut |line| tracing::info!("{line}"))?;
    report.write_outputs(&out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "method,t,mean_gap")?;
    for c in report.curves.iter().filter(|c| c.t == cfg.budget || c.t == 1) {
        writeln!(stdout, "{},{},{:.6}", c.method, c.t, c.mean_gap)?;
    }
    tracing::info!(out = %out.display(), "wrote curves.csv, runs.csv, traces.csv, failures.csv, curves.svg");
    Ok(())
}

fn itinerary_cmd(command: ItineraryCommand) -> CliResult {
    match command {
        ItineraryCommand::Synthesize { count, seed, out } => {
            let its = itinerary::synthesize_itineraries(count, seed);
            match out {
                Some(path) => itinerary::write_itineraries(std::fs::File::create(path)?, &its)?,
                None => itinerary::write_itineraries(std::io::stdout().lock(), &its)?,
            }
        }
        ItineraryCommand::Probs { data, coefficients, literal } => {
            let its = match data {
                Some(p) => itinerary::load_itineraries(&p, &TimeBuckets::default())?,
                None => itinerary::bundled_itineraries(),
            };
            let coeffs = match coefficients {
                Some(p) => ItineraryCoefficients::load(&p)?,
                None => ItineraryCoefficients::default(),
            };
            let norm = if literal { Normalization::Literal } else { Normalization::Standard };
            let probs = itinerary::itinerary_choice_probs(&its, &coeffs, norm)?;
            let mut out = std::io::stdout().lock();
            writeln!(out, "id,nest,utility,probability")?;
            for (it, p) in its.iter().zip(probs) {
                writeln!(out, "{},{},{},{}", it.id, it.nest, itinerary::utility(it, &coeffs), p)?;
            }
        }
    }
    Ok(())
}

fn elicit(args: ElicitArgs) -> CliResult {
    let pool = read_pool_csv(std::fs::File::open(&args.pool)?)?;
    let config = SessionConfig {
        surrogate: args.model,
        acquisition: args.acq,
        budget: args.budget,
        seed: args.seed,
        ..SessionConfig::default()
    };
    let mut session = Session::new(pool.instances(), config)?;
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let mut out = std::io::stdout().lock();
    let describe = |pos: usize| {
        let r = &pool.records[pos];
        let feats: Vec<String> = pool.feature_names.iter().zip(&r.features).map(|(n, v)| format!("{n}={v}")).collect();
        let name = r.label.clone().unwrap_or_else(|| format!("#{}", r.id));
        format!("{name} [{}] {}", r.nest, feats.join(" "))
    };
    loop {
        match session.next_query()? {
            NextQuery::Finished(reason) => {
                let best = session.x_best().map(|b| describe(b)).unwrap_or_default();
                writeln!(out, "finished ({reason:?}); best: {best}")?;
                return Ok(());
            }
            NextQuery::Ask(q) => {
                let (a, b) = q.pair();
                let stage = match q {
                    Query::Initialization { .. } => "warm-up",
                    Query::Active { .. } => "query",
                };
                writeln!(out, "{stage}: which do you prefer?\n  1) {}\n  2) {}", describe(a), describe(b))?;
                out.flush()?;
                let winner = loop {
                    let Some(line) = lines.next() else {
                        writeln!(out, "input closed; stopping")?;
                        return Ok(());
                    };
                    match line?.trim() {
                        "1" => break a,
                        "2" => break b,
                        "q" | "quit" => return Ok(()),
                        other => writeln!(out, "answer 1 or 2 (q to quit), got '{other}'")?,
                    }
                };
                session.answer(winner)?;
            }
        }
    }
}
