use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpsa::analysis::TimingReport;
use dpsa::protocol::NeighborMode;
use dpsa_cli::{
    config_from_manifest, run_single, run_sweep, FileConfig, GroupChoice, RunConfig, RunError,
    SweepGrid, SynthSpec, TimingChoice,
};

#[derive(Parser)]
#[command(name = "dpsa", version, about = "Simulate differentially private secure aggregation for federated logistic regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation.
    Run {
        #[arg(long)]
        clients: Option<usize>,
        /// Privacy loss parameter.
        #[arg(long, conflicts_with = "no_noise")]
        epsilon: Option<f64>,
        #[arg(long, value_enum)]
        neighborhood: Option<Mode>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every combination of the listed values.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        clients: Vec<usize>,
        /// Comma-separated; `none` disables noise for that cell.
        #[arg(long, value_delimiter = ',', required = true)]
        epsilon: Vec<String>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "full")]
        neighborhood: Vec<Mode>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML key-value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Re-run the configuration recorded in an earlier manifest.json.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    no_noise: bool,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long = "local-iters")]
    local_iterations: Option<usize>,
    #[arg(long)]
    local_rows: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    alpha_reg: Option<f64>,
    #[arg(long, value_enum)]
    timing: Option<Timing>,
    #[arg(long, value_enum)]
    group: Option<Group>,
    /// Path to the credit-card fraud CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthetic data instead of (or as a fallback for) --data.
    #[arg(long, num_args = 2, value_names = ["ROWS", "RATE"])]
    synth: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write trace.csv.
    #[arg(long)]
    trace: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Full,
    Logn,
}

impl From<Mode> for NeighborMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Full => NeighborMode::Full,
            Mode::Logn => NeighborMode::LogN,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Timing {
    Measured,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum Group {
    Toy,
    Modp2048,
}

fn base_config(c: &Common) -> Result<RunConfig, RunError> {
    let mut cfg = match &c.manifest {
        Some(path) => config_from_manifest(path)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &c.config {
        FileConfig::load(path)?.apply(&mut cfg);
    }
    if c.no_noise {
        cfg.epsilon = None;
    }
    if let Some(v) = c.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = c.local_iterations {
        cfg.local_iterations = v;
    }
    if let Some(v) = c.local_rows {
        cfg.local_rows = v;
    }
    if let Some(v) = c.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = c.alpha_reg {
        cfg.alpha_reg = v;
    }
    if let Some(t) = c.timing {
        cfg.timing = match t {
            Timing::Measured => TimingChoice::Measured,
            Timing::Fixed => TimingChoice::Fixed,
        };
    }
    if let Some(g) = c.group {
        (cfg.group, cfg.lambda) = match g {
            Group::Toy => (GroupChoice::Toy, 128),
            Group::Modp2048 => (GroupChoice::Modp2048, dpsa::group_crypto::PRODUCTION_LAMBDA),
        };
    }
    if let Some(d) = &c.data {
        cfg.data = Some(d.clone());
    }
    if let Some(parts) = &c.synth {
        let rows = parts[0]
            .parse()
            .map_err(|_| RunError::Validation(format!("--synth ROWS: not an integer: {}", parts[0])))?;
        let fraud_rate = parts[1]
            .parse()
            .map_err(|_| RunError::Validation(format!("--synth RATE: not a number: {}", parts[1])))?;
        let previous = cfg.synth;
        cfg.synth = Some(SynthSpec {
            rows,
            fraud_rate,
            separation: previous.map_or(dpsa::data::DEFAULT_SEPARATION, |s| s.separation),
            seed: previous.map_or(cfg.seed, |s| s.seed),
        });
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.split_seed {
        cfg.split_seed = v;
    }
    if let Some(v) = &c.out {
        cfg.out = v.clone();
    }
    if c.trace {
        cfg.trace = true;
    }
    Ok(cfg)
}

fn parse_epsilon(s: &str) -> Result<Option<f64>, RunError> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| RunError::Validation(format!("--epsilon: not a number: {s}")))
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run {
            clients,
            epsilon,
            neighborhood,
            common,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(n) = clients {
                cfg.clients = n;
            }
            if let Some(e) = epsilon {
                cfg.epsilon = Some(e);
            }
            if let Some(m) = neighborhood {
                cfg.neighborhood = m.into();
            }
            let report = run_single(&cfg)?;
            let last = report.metrics.last().expect("at least one iteration");
            println!(
                "iterations={} final_loss={:.6} final_mcc={:.4} trace_hash={}",
                report.metrics.len(),
                last.loss,
                last.mcc,
                report.summary.trace_hash
            );
            print!("{}", TimingReport::table(&[report.timing]));
            println!("artifacts in {}", cfg.out.display());
        }
        Command::Sweep {
            clients,
            epsilon,
            neighborhood,
            common,
        } => {
            let cfg = base_config(&common)?;
            let grid = SweepGrid {
                clients,
                epsilons: epsilon.iter().map(|s| parse_epsilon(s)).collect::<Result<_, _>>()?,
                modes: neighborhood.into_iter().map(Into::into).collect(),
            };
            let rows = run_sweep(&cfg, &grid)?;
            for r in &rows {
                println!(
                    "n={} epsilon={} mode={} status={} mcc={} {}",
                    r.clients,
                    r.epsilon,
                    r.neighborhood,
                    r.status,
                    r.final_mcc.map_or("-".into(), |m| format!("{m:.4}")),
                    r.error
                );
            }
            if !rows.is_empty() {
                println!("combined results in {}", cfg.out.join("sweep.csv").display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
