use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use p4qs_core::config::{ConfigError, Protocol, SimConfig};
use p4qs_core::fixtures::write_fixtures;
use p4qs_core::peer::Fault;
use p4qs_core::scenarios::{emit_report, run_scenario, Preset, ReportFormat};
use p4qs_core::simnet::SimError;
use p4qs_core::tickets::{ownership_probability, ownership_probability_mc, ExchangeParams, McTopology};

/// Default config file when neither `--config` nor `--preset` is given.
const CONFIG_ENV: &str = "P4QS_CONFIG";

#[derive(Parser)]
#[command(name = "p4qs", version, about = "K-anonymous peer-to-peer location query simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation and write its privacy report.
    Run(RunArgs),
    /// Print the ticket ownership probability, optionally with a Monte-Carlo estimate.
    Probability(ProbabilityArgs),
    /// Regenerate the POI fixture and the golden wire files.
    Fixtures(FixturesArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProtocolArg {
    P4qs,
    Pseudonym,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    UndersizedBatch,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML config file (default: $P4QS_CONFIG).
    #[arg(short = 'c', long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named scenario: PM, DCM, RM, DUSQ or DUSW.
    #[arg(short = 'p', long)]
    preset: Option<String>,
    #[arg(short = 's', long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Inclusive seed range, e.g. `1..10`.
    #[arg(short = 'S', long)]
    seeds: Option<String>,
    #[arg(short = 'o', long)]
    out: Option<PathBuf>,
    /// Report format (default: from the `--out` extension, else json).
    #[arg(short = 'f', long, value_enum)]
    format: Option<FormatArg>,
    #[arg(short = 'P', long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Write the event trace as JSON lines (one file per seed).
    #[arg(short = 't', long)]
    trace: Option<PathBuf>,
    /// Deliberately break the protocol to exercise invariant checks.
    #[arg(long, value_enum)]
    fault: Option<FaultArg>,
}

#[derive(clap::Args)]
struct ProbabilityArgs {
    /// Tickets per batch.
    #[arg(short = 'T', long)]
    tickets: u32,
    /// Tickets exchanged per round.
    #[arg(short = 'E', long)]
    exchanged: u32,
    /// Number of peers.
    #[arg(short = 'N', long)]
    peers: u32,
    /// Exchange rounds.
    #[arg(short = 'R', long)]
    rounds: u32,
    /// Monte-Carlo trials.
    #[arg(short = 'm', long)]
    mc: Option<u32>,
    #[arg(short = 's', long, default_value_t = 1)]
    seed: u64,
    /// Use fixed ring partners in the Monte-Carlo run instead of fresh random ones.
    #[arg(long)]
    ring: bool,
}

#[derive(clap::Args)]
struct FixturesArgs {
    #[arg(short = 'o', long)]
    out: PathBuf,
    #[arg(short = 's', long, default_value_t = 7)]
    seed: u64,
    /// Number of POI records.
    #[arg(short = 'n', long, default_value_t = 2000)]
    count: usize,
}

enum Failure {
    Config(String),
    Invariant(String),
    Io(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Failure> {
    let bad = || Failure::Config(format!("invalid `--seeds` value `{s}`: expected a..b"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a > b {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

fn trace_path(base: &Path, seed: u64, many: bool) -> PathBuf {
    if !many {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}-{seed}.{ext}"),
        None => format!("{stem}-{seed}"),
    };
    base.with_file_name(name)
}

fn base_config(args: &RunArgs) -> Result<SimConfig, Failure> {
    if let Some(p) = &args.preset {
        let preset: Preset = p.parse().map_err(Failure::Config)?;
        return Ok(preset.config(1));
    }
    let path = match &args.config {
        Some(p) => Some(p.clone()),
        None => std::env::var_os(CONFIG_ENV).map(PathBuf::from),
    };
    match path {
        Some(p) => Ok(SimConfig::load(&p)?),
        None => Ok(SimConfig::default()),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let mut base = base_config(&args)?;
    if let Some(p) = args.protocol {
        base.protocol = match p {
            ProtocolArg::P4qs => Protocol::P4qs,
            ProtocolArg::Pseudonym => Protocol::Pseudonym,
        };
    }
    if let Some(FaultArg::UndersizedBatch) = args.fault {
        base.fault = Some(Fault::UndersizedBatch);
    }
    let seeds = match (&args.seeds, args.seed) {
        (Some(s), _) => parse_seeds(s)?,
        (None, Some(s)) => vec![s],
        (None, None) => vec![base.seed],
    };
    let format = match args.format {
        Some(FormatArg::Csv) => ReportFormat::Csv,
        Some(FormatArg::Json) => ReportFormat::Json,
        None => match args.out.as_ref().and_then(|p| p.extension()).and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => ReportFormat::Csv,
            _ => ReportFormat::Json,
        },
    };
    base.validate()?;

    let mut reports = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        if let Some(t) = &args.trace {
            cfg.trace_path = Some(trace_path(t, seed, seeds.len() > 1).display().to_string());
        }
        match run_scenario(cfg) {
            Ok((_, report)) => reports.push(report),
            Err(SimError::InvariantBreach(b)) => {
                return Err(Failure::Invariant(format!("seed {seed}: {}", b.join("; "))));
            }
            Err(e) => return Err(Failure::Io(e.to_string())),
        }
    }
    let bytes = emit_report(&reports, format);
    match &args.out {
        Some(p) => std::fs::write(p, bytes).map_err(|e| Failure::Io(format!("cannot write {}: {e}", p.display())))?,
        None => {
            use std::io::Write;
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| Failure::Io(e.to_string()))?;
        }
    }
    Ok(())
}

fn cmd_probability(args: ProbabilityArgs) -> Result<(), Failure> {
    let params = ExchangeParams::new(args.tickets, args.exchanged, args.rounds, args.peers)
        .map_err(|e| Failure::Config(e.to_string()))?;
    let p = ownership_probability(&params).map_err(|e| Failure::Config(e.to_string()))?;
    println!("analytic {p:?}");
    if let Some(trials) = args.mc {
        let topology = if args.ring {
            McTopology::Ring
        } else {
            McTopology::UniformRandom
        };
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let mc = ownership_probability_mc(&params, topology, &mut rng, trials)
            .map_err(|e| Failure::Config(e.to_string()))?;
        println!("monte_carlo {mc:?} trials={trials}");
        println!("difference {:?}", (mc - p).abs());
    }
    Ok(())
}

fn cmd_fixtures(args: FixturesArgs) -> Result<(), Failure> {
    let n = write_fixtures(&args.out, args.seed, args.count)
        .map_err(|e| Failure::Io(format!("cannot write fixtures to {}: {e}", args.out.display())))?;
    println!("wrote {n} POI records and wire fixtures to {}", args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Probability(a) => cmd_probability(a),
        Command::Fixtures(a) => cmd_fixtures(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Io(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Invariant(m)) => {
            eprintln!("invariant breach: {m}");
            ExitCode::from(2)
        }
    }
}
