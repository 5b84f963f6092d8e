//! Experiment runner: resolves a configuration, runs one simulation or a
//! grid of them, and writes the manifest, metrics and timing CSVs.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dpsa::analysis::{evaluate, write_csv, MetricsRow, TimingReport, TimingRow};
use dpsa::data::{self, disjoint, load_csv, synth, Dataset, LoadOptions, SplitConfig, SynthConfig};
use dpsa::group_crypto::{generate_group, GroupManifest, PRODUCTION_LAMBDA};
use dpsa::learner::TrainConfig;
use dpsa::protocol::{
    simulate, FixedCosts, LatencyConfig, NeighborMode, ProtocolConfig, ProtocolError, TimingMode,
};
use dpsa::simkernel::write_trace_csv;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Validation(String),

    #[error("protocol aborted: {0}")]
    Protocol(#[source] ProtocolError),

    #[error("cannot write {path}: {message}")]
    Output { path: PathBuf, message: String },
}

impl RunError {
    /// 1 for configuration problems, 2 for a protocol abort.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Validation(_) | RunError::Output { .. } => 1,
            RunError::Protocol(_) => 2,
        }
    }
}

impl From<ProtocolError> for RunError {
    fn from(e: ProtocolError) -> Self {
        match e {
            ProtocolError::Config(m) => RunError::Validation(m),
            other => RunError::Protocol(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupChoice {
    /// `p = 23`; for tests and fast simulations only.
    Toy,
    Modp2048,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingChoice {
    Measured,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub rows: usize,
    pub fraud_rate: f64,
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub clients: usize,
    /// `None` disables noise.
    pub epsilon: Option<f64>,
    pub iterations: u32,
    pub local_iterations: usize,
    pub learning_rate: f64,
    pub alpha_reg: f64,
    pub local_rows: usize,
    pub allow_small: bool,
    pub neighborhood: NeighborMode,
    pub timing: TimingChoice,
    /// Charged per phase in fixed timing mode.
    pub fixed_cost_ns: u64,
    pub latency_min_ns: u64,
    pub latency_max_ns: u64,
    pub jitter_max_ns: u64,
    pub fractional_bits: u32,
    pub max_abs_weight: f64,
    pub group: GroupChoice,
    pub lambda: u32,
    /// Used when the file exists; otherwise `synth` is required.
    pub data: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    pub standardize_amount: bool,
    pub train_fraction: f64,
    pub split_seed: u64,
    pub seed: u64,
    pub trace: bool,
    pub max_events: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            clients: 100,
            epsilon: Some(5e-4),
            iterations: 30,
            local_iterations: 250,
            learning_rate: 0.01,
            alpha_reg: 1.0,
            local_rows: data::DEFAULT_LOCAL_ROWS,
            allow_small: false,
            neighborhood: NeighborMode::Full,
            timing: TimingChoice::Fixed,
            fixed_cost_ns: 1_000_000,
            latency_min_ns: 200_000,
            latency_max_ns: 2_000_000,
            jitter_max_ns: 500_000,
            fractional_bits: dpsa::secure_agg::DEFAULT_FRACTIONAL_BITS,
            max_abs_weight: 100.0,
            group: GroupChoice::Modp2048,
            lambda: PRODUCTION_LAMBDA,
            data: None,
            synth: None,
            standardize_amount: false,
            train_fraction: 0.75,
            split_seed: 1,
            seed: 1,
            trace: false,
            max_events: dpsa::simkernel::DEFAULT_MAX_EVENTS,
            out: PathBuf::from("out"),
        }
    }
}

/// Optional overrides read from a TOML key-value file.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub clients: Option<usize>,
    pub epsilon: Option<f64>,
    pub no_noise: Option<bool>,
    pub iterations: Option<u32>,
    pub local_iterations: Option<usize>,
    pub learning_rate: Option<f64>,
    pub alpha_reg: Option<f64>,
    pub local_rows: Option<usize>,
    pub allow_small: Option<bool>,
    pub neighborhood: Option<NeighborMode>,
    pub timing: Option<TimingChoice>,
    pub fixed_cost_ns: Option<u64>,
    pub latency_min_ns: Option<u64>,
    pub latency_max_ns: Option<u64>,
    pub jitter_max_ns: Option<u64>,
    pub fractional_bits: Option<u32>,
    pub max_abs_weight: Option<f64>,
    pub group: Option<GroupChoice>,
    pub lambda: Option<u32>,
    pub data: Option<PathBuf>,
    pub synth_rows: Option<usize>,
    pub synth_fraud_rate: Option<f64>,
    pub synth_separation: Option<f64>,
    pub synth_seed: Option<u64>,
    pub standardize_amount: Option<bool>,
    pub train_fraction: Option<f64>,
    pub split_seed: Option<u64>,
    pub seed: Option<u64>,
    pub trace: Option<bool>,
    pub max_events: Option<u64>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, RunError> {
        toml::from_str(text).map_err(|e| RunError::Validation(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, RunError> {
        let text = fs::read_to_string(path)
            .map_err(|e| RunError::Validation(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { cfg.$f = v.clone(); } )* };
        }
        set!(
            clients, iterations, local_iterations, learning_rate, alpha_reg, local_rows,
            allow_small, neighborhood, timing, fixed_cost_ns, latency_min_ns, latency_max_ns,
            jitter_max_ns, fractional_bits, max_abs_weight, group, lambda, standardize_amount,
            train_fraction, split_seed, seed, trace, max_events, out
        );
        if let Some(e) = self.epsilon {
            cfg.epsilon = Some(e);
        }
        if self.no_noise == Some(true) {
            cfg.epsilon = None;
        }
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
        }
        if self.synth_rows.is_some() || self.synth_fraud_rate.is_some() {
            let mut s = cfg.synth.unwrap_or(SynthSpec {
                rows: 50_000,
                fraud_rate: 0.002,
                separation: data::DEFAULT_SEPARATION,
                seed: 1,
            });
            s.rows = self.synth_rows.unwrap_or(s.rows);
            s.fraud_rate = self.synth_fraud_rate.unwrap_or(s.fraud_rate);
            cfg.synth = Some(s);
        }
        if let Some(s) = cfg.synth.as_mut() {
            s.separation = self.synth_separation.unwrap_or(s.separation);
            s.seed = self.synth_seed.unwrap_or(s.seed);
        }
    }
}

impl RunConfig {
    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: &str| Err(RunError::Validation(m.to_string()));
        if self.clients == 0 {
            return bad("--clients must be at least 1");
        }
        if let Some(e) = self.epsilon {
            if !(e.is_finite() && e > 0.0) {
                return bad("--epsilon must be a positive number (use --no-noise to disable noise)");
            }
        }
        if self.iterations == 0 {
            return bad("--iterations must be at least 1");
        }
        if self.local_iterations == 0 {
            return bad("--local-iters must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.alpha_reg.is_finite() && self.alpha_reg > 0.0) {
            return bad("alpha_reg must be positive (the sensitivity bound divides by it)");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie strictly between 0 and 1");
        }
        if self.latency_min_ns > self.latency_max_ns {
            return bad("latency_min_ns exceeds latency_max_ns");
        }
        if let Some(s) = &self.synth {
            if s.rows == 0 || !(s.fraud_rate > 0.0 && s.fraud_rate < 1.0) {
                return bad("--synth needs a positive row count and a fraud rate in (0, 1)");
            }
        }
        if self.data.is_none() && self.synth.is_none() {
            return bad("no data source: pass --data PATH or --synth ROWS RATE");
        }
        Ok(())
    }

    fn protocol_config(&self) -> Result<ProtocolConfig, RunError> {
        let group = match self.group {
            GroupChoice::Toy => generate_group(self.lambda, true),
            GroupChoice::Modp2048 => generate_group(self.lambda, false),
        }
        .map_err(|e| RunError::Validation(e.to_string()))?;
        let mut p = ProtocolConfig::new(self.clients, group);
        p.iterations = self.iterations;
        p.train = TrainConfig {
            learning_rate: self.learning_rate,
            local_iterations: self.local_iterations,
            alpha_reg: self.alpha_reg,
        };
        p.local_rows = self.local_rows;
        p.allow_small = self.allow_small;
        p.epsilon = self.epsilon;
        p.neighborhood = self.neighborhood;
        p.timing = match self.timing {
            TimingChoice::Measured => TimingMode::Measured,
            TimingChoice::Fixed => TimingMode::Fixed(FixedCosts {
                dh_setup_ns: self.fixed_cost_ns,
                training_ns: self.fixed_cost_ns,
                encrypt_ns: self.fixed_cost_ns,
                server_ns: self.fixed_cost_ns,
            }),
        };
        p.fractional_bits = self.fractional_bits;
        p.max_abs_weight = self.max_abs_weight;
        p.latency = LatencyConfig {
            min_ns: self.latency_min_ns,
            max_ns: self.latency_max_ns,
            jitter_max_ns: self.jitter_max_ns,
        };
        p.seed = self.seed;
        p.record_trace = self.trace;
        p.max_events = self.max_events;
        Ok(p)
    }
}

/// Train/test partitions plus where they came from.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub source: DataOrigin,
    pub train: Arc<Dataset>,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataOrigin {
    Csv { path: PathBuf },
    Synth { spec: SynthSpec, fallback_from: Option<PathBuf> },
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData, RunError> {
    let (full, source) = match (&cfg.data, &cfg.synth) {
        (Some(path), _) if path.exists() => {
            let d = load_csv(
                path,
                LoadOptions {
                    standardize_amount: cfg.standardize_amount,
                },
            )
            .map_err(|e| RunError::Validation(e.to_string()))?;
            (d, DataOrigin::Csv { path: path.clone() })
        }
        (path, Some(spec)) => {
            let d = synth(&SynthConfig {
                rows: spec.rows,
                fraud_rate: spec.fraud_rate,
                features: data::DEFAULT_SYNTH_FEATURES,
                separation: spec.separation,
                seed: spec.seed,
            })
            .map_err(|e| RunError::Validation(e.to_string()))?;
            (
                d,
                DataOrigin::Synth {
                    spec: *spec,
                    fallback_from: path.clone(),
                },
            )
        }
        (Some(path), None) => {
            return Err(RunError::Validation(format!(
                "data file {} not found; download the credit-card fraud CSV or pass --synth ROWS RATE",
                path.display()
            )))
        }
        (None, None) => return Err(RunError::Validation("no data source configured".into())),
    };
    let (train, test) = data::split(
        &full,
        &SplitConfig {
            train_fraction: cfg.train_fraction,
            seed: cfg.split_seed,
        },
    )
    .map_err(|e| RunError::Validation(e.to_string()))?;
    assert!(disjoint(&train, &test), "holdout rows leaked into training");
    Ok(LoadedData {
        source,
        train: Arc::new(train),
        test,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Resolved {
    pub data: DataOrigin,
    pub train_rows: usize,
    pub test_rows: usize,
    pub train_fraud: usize,
    pub test_fraud: usize,
    pub features: Vec<String>,
    pub group: GroupManifest,
    pub sensitivity: Option<f64>,
    pub noise_scale: Option<f64>,
    pub effective_local_rows: usize,
    pub version: &'static str,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub resolved: Resolved,
}

#[derive(Debug, Clone, Deserialize)]
struct ManifestConfigOnly {
    config: RunConfig,
}

/// Reads the `config` section of a manifest written by an earlier run.
pub fn config_from_manifest(path: &Path) -> Result<RunConfig, RunError> {
    let text = fs::read_to_string(path)
        .map_err(|e| RunError::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str::<ManifestConfigOnly>(&text)
        .map(|m| m.config)
        .map_err(|e| RunError::Validation(format!("manifest {}: {e}", path.display())))
}

/// Run outcome that is not already in the CSVs.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummaryFile {
    pub trace_hash: String,
    pub events: u64,
    pub simulated_end_ns: u64,
    pub final_loss: f64,
    pub final_mcc: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub metrics: Vec<MetricsRow>,
    pub timing: TimingReport,
    pub summary: RunSummaryFile,
}

fn write_output<T>(path: &Path, f: impl FnOnce(BufWriter<File>) -> Result<T, String>) -> Result<T, RunError> {
    let file = File::create(path).map_err(|e| RunError::Output {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    f(BufWriter::new(file)).map_err(|message| RunError::Output {
        path: path.to_path_buf(),
        message,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    write_output(path, |w| serde_json::to_writer_pretty(w, value).map_err(|e| e.to_string()))
}

/// Loads the data and runs once.
pub fn run_single(cfg: &RunConfig) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_with_data(cfg, &data)
}

/// Runs once on pre-loaded data and writes every artifact under `cfg.out`:
/// `manifest.json`, `metrics.csv`, `timing.csv`, `summary.json` and, when
/// enabled, `trace.csv`.
pub fn run_with_data(cfg: &RunConfig, data: &LoadedData) -> Result<RunReport, RunError> {
    cfg.validate()?;
    let pcfg = cfg.protocol_config()?;
    pcfg.validate(data.train.len())?;
    let privacy = pcfg.privacy(data.train.len())?;
    let manifest = Manifest {
        config: cfg.clone(),
        resolved: Resolved {
            data: data.source.clone(),
            train_rows: data.train.len(),
            test_rows: data.test.len(),
            train_fraud: data.train.fraud_count(),
            test_fraud: data.test.fraud_count(),
            features: data.train.feature_names().to_vec(),
            group: pcfg.group.to_manifest(),
            sensitivity: privacy.map(|p| dpsa::privacy::sensitivity(&p)),
            noise_scale: privacy.map(|p| p.scale()),
            effective_local_rows: pcfg.effective_local_rows(data.train.len()),
            version: env!("CARGO_PKG_VERSION"),
        },
    };
    fs::create_dir_all(&cfg.out).map_err(|e| RunError::Output {
        path: cfg.out.clone(),
        message: e.to_string(),
    })?;
    write_json(&cfg.out.join("manifest.json"), &manifest)?;

    let sim = simulate(&pcfg, Arc::clone(&data.train))?;

    let mode = cfg.neighborhood.to_string();
    let mut metrics = Vec::with_capacity(sim.server.models().len());
    for (t, w) in sim.server.models().iter().enumerate() {
        let e = evaluate(w, &data.test).map_err(|e| RunError::Protocol(ProtocolError::Learn {
            client: 0,
            iteration: t as u32,
            source: e,
        }))?;
        metrics.push(MetricsRow::new(cfg.clients, cfg.epsilon, &mode, t as u32, &e));
    }
    let timing = TimingReport::from_simulation(&sim);
    let timing_label = match cfg.timing {
        TimingChoice::Measured => "measured",
        TimingChoice::Fixed => "fixed",
    };
    let timing_row = TimingRow::new(cfg.epsilon, &mode, timing_label, &timing);
    let last = metrics.last().expect("at least one iteration");
    let summary = RunSummaryFile {
        trace_hash: sim.summary.trace_hash.clone(),
        events: sim.summary.events,
        simulated_end_ns: sim.summary.end_time,
        final_loss: last.loss,
        final_mcc: last.mcc,
    };

    write_output(&cfg.out.join("metrics.csv"), |w| write_csv(&metrics, w).map_err(|e| e.to_string()))?;
    write_output(&cfg.out.join("timing.csv"), |w| {
        write_csv(&[timing_row], w).map_err(|e| e.to_string())
    })?;
    write_json(&cfg.out.join("summary.json"), &summary)?;
    if cfg.trace {
        write_output(&cfg.out.join("trace.csv"), |w| {
            write_trace_csv(&sim.trace, w).map_err(|e| e.to_string())
        })?;
    }
    Ok(RunReport {
        metrics,
        timing,
        summary,
    })
}

/// Cartesian grid of sweep cells.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepGrid {
    pub clients: Vec<usize>,
    pub epsilons: Vec<Option<f64>>,
    pub modes: Vec<NeighborMode>,
}

impl SweepGrid {
    pub fn cells(&self) -> Vec<(usize, Option<f64>, NeighborMode)> {
        let mut out = Vec::new();
        for &n in &self.clients {
            for &e in &self.epsilons {
                for &m in &self.modes {
                    out.push((n, e, m));
                }
            }
        }
        out
    }
}

/// One line of the combined sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub clients: usize,
    pub epsilon: String,
    pub neighborhood: String,
    pub status: String,
    pub final_loss: Option<f64>,
    pub final_mcc: Option<f64>,
    pub total_ms: Option<f64>,
    pub server_ms_per_iteration: Option<f64>,
    pub dh_setup_ms: Option<f64>,
    pub training_ms: Option<f64>,
    pub encrypt_ms: Option<f64>,
    pub error: String,
}

/// Runs every cell under `base.out/<cell>/` and writes `base.out/sweep.csv`.
/// A failing cell is recorded and the sweep moves on. An empty grid does
/// nothing.
pub fn run_sweep(base: &RunConfig, grid: &SweepGrid) -> Result<Vec<SweepRow>, RunError> {
    let cells = grid.cells();
    if cells.is_empty() {
        return Ok(Vec::new());
    }
    base.validate()?;
    let data = load_data(base)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (n, eps, mode) in cells {
        let mut cfg = base.clone();
        cfg.clients = n;
        cfg.epsilon = eps;
        cfg.neighborhood = mode;
        let label = dpsa::analysis::epsilon_label(eps);
        cfg.out = base.out.join(format!("n{n}_eps{label}_{mode}"));
        let mut row = SweepRow {
            clients: n,
            epsilon: label,
            neighborhood: mode.to_string(),
            status: "ok".into(),
            final_loss: None,
            final_mcc: None,
            total_ms: None,
            server_ms_per_iteration: None,
            dh_setup_ms: None,
            training_ms: None,
            encrypt_ms: None,
            error: String::new(),
        };
        match run_with_data(&cfg, &data) {
            Ok(r) => {
                row.final_loss = Some(r.summary.final_loss);
                row.final_mcc = Some(r.summary.final_mcc);
                row.total_ms = Some(r.timing.total_ms);
                row.server_ms_per_iteration = Some(r.timing.server_ms_per_iteration);
                row.dh_setup_ms = Some(r.timing.dh_setup_ms);
                row.training_ms = Some(r.timing.training_ms);
                row.encrypt_ms = Some(r.timing.encrypt_ms);
            }
            Err(e) => {
                row.status = match e.exit_code() {
                    2 => "protocol_abort",
                    _ => "validation",
                }
                .into();
                row.error = e.to_string();
            }
        }
        rows.push(row);
    }
    fs::create_dir_all(&base.out).map_err(|e| RunError::Output {
        path: base.out.clone(),
        message: e.to_string(),
    })?;
    write_output(&base.out.join("sweep.csv"), |w| write_csv(&rows, w).map_err(|e| e.to_string()))?;
    Ok(rows)
}
