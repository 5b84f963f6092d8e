//! Post-run evaluation: classification metrics, timing summaries and the two
//! adversarial reconstructions (a curious server, and colluding clients).

use std::collections::BTreeSet;
use std::io::Write;

use serde::Serialize;

use crate::data::Dataset;
use crate::group_crypto::{expand_masks, MaskChainState};
use crate::learner::{loss, predict, LearnError, ModelWeights};
use crate::protocol::Simulation;
use crate::secure_agg::ClientId;
use crate::simkernel::Nanos;

/// Counts at the `p ≥ 0.5 ⇒ fraud` threshold, fraud being the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn from_predictions(predicted: &[bool], actual: &[bool]) -> Self {
        assert_eq!(predicted.len(), actual.len(), "prediction/label length mismatch");
        let mut cm = ConfusionMatrix::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (true, true) => cm.tp += 1,
                (true, false) => cm.fp += 1,
                (false, false) => cm.tn += 1,
                (false, true) => cm.fn_ += 1,
            }
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Matthews correlation coefficient; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            return 0.0;
        }
        (tp * tn - fp * fn_) / denom.sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Evaluation {
    /// Mean logistic loss on the holdout set, without the penalty term.
    pub loss: f64,
    pub confusion: ConfusionMatrix,
    pub mcc: f64,
}

pub fn evaluate(w: &ModelWeights, test: &Dataset) -> Result<Evaluation, LearnError> {
    let loss = loss(w, test, 0.0)?;
    let mut predicted = Vec::with_capacity(test.len());
    for x in test.rows() {
        predicted.push(predict(w, x)? >= 0.5);
    }
    let actual: Vec<bool> = test.labels().iter().map(|&y| y > 0.0).collect();
    let confusion = ConfusionMatrix::from_predictions(&predicted, &actual);
    Ok(Evaluation {
        loss,
        confusion,
        mcc: confusion.mcc(),
    })
}

/// What a curious server learns about one client from that client's
/// submission alone.
#[derive(Debug, Clone, PartialEq)]
pub struct SnoopingReport {
    pub target: ClientId,
    pub iteration: u32,
    /// Center-lifted submission divided by `2^F`.
    pub estimate: Vec<f64>,
    pub true_weights: Vec<f64>,
    pub abs_errors: Vec<f64>,
    pub mean_abs_error: f64,
    pub mean_abs_weight: f64,
    /// True when the target applied no pairwise mask at all.
    pub insecure: bool,
}

impl SnoopingReport {
    /// Mean estimation error in units of the mean true weight magnitude.
    pub fn error_ratio(&self) -> f64 {
        self.mean_abs_error / self.mean_abs_weight
    }
}

pub fn snooping_server(sim: &Simulation, target: ClientId, iteration: u32) -> SnoopingReport {
    let record = &sim.clients[target as usize].records()[iteration as usize];
    let submitted = &sim.server.rounds()[iteration as usize][target as usize];
    assert_eq!(submitted.client_id, target);
    let estimate: Vec<f64> = submitted.words.iter().map(|&w| sim.codec.decode_word(w)).collect();
    let true_weights = record.trained.0.clone();
    let abs_errors: Vec<f64> = estimate.iter().zip(&true_weights).map(|(e, w)| (e - w).abs()).collect();
    let len = abs_errors.len() as f64;
    SnoopingReport {
        target,
        iteration,
        mean_abs_error: abs_errors.iter().sum::<f64>() / len,
        mean_abs_weight: true_weights.iter().map(|w| w.abs()).sum::<f64>() / len,
        estimate,
        true_weights,
        abs_errors,
        insecure: sim.graph.degree(target) == 0,
    }
}

/// Outcome of colluding clients pooling their secrets against one client.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryResult {
    pub target: ClientId,
    pub iteration: u32,
    pub full_collusion: bool,
    /// Pairwise masks of the target that no colluder knows.
    pub unknown_pairs: Vec<ClientId>,
    pub recovered: Vec<f64>,
    /// `W_h`.
    pub true_weights: Vec<f64>,
    /// `W_h + P_h`.
    pub true_noisy: Vec<f64>,
    /// `|recovered − (W_h + P_h)|`.
    pub errors_vs_noisy: Vec<f64>,
    /// `|recovered − W_h|`.
    pub residuals: Vec<f64>,
    /// Under full collusion: whether the shared-model route and the
    /// single-message unmasking route gave identical words.
    pub routes_agree: Option<bool>,
}

impl RecoveryResult {
    pub fn max_error_vs_noisy(&self) -> f64 {
        self.errors_vs_noisy.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean_residual(&self) -> f64 {
        self.residuals.iter().sum::<f64>() / self.residuals.len() as f64
    }
}

/// Reconstructs `W_h + P_h` for `target` from what `colluders` hold.
///
/// With every other client colluding, `n·W − Σ_c (w_c + η_c)` isolates the
/// target exactly; that value is also checked against unmasking the target's
/// own submission. With fewer colluders only the unmasking route applies, and
/// any mask shared with a non-colluder stays in the estimate.
pub fn colluding_clients(
    sim: &Simulation,
    target: ClientId,
    colluders: &[ClientId],
    iteration: u32,
) -> RecoveryResult {
    let n = sim.clients.len();
    let t = iteration as usize;
    let colluding: BTreeSet<ClientId> = colluders.iter().copied().filter(|&c| c != target).collect();
    let full = colluding.len() + 1 == n;
    let record = &sim.clients[target as usize].records()[t];
    let len = record.trained.len();

    let submitted = &sim.server.rounds()[t][target as usize];
    let mut unmasked = submitted.words.clone();
    let mut unknown_pairs = Vec::new();
    for &j in sim.graph.neighbors(target) {
        if !colluding.contains(&j) {
            unknown_pairs.push(j);
            continue;
        }
        let key = &sim.clients[j as usize].shared_keys()[&target];
        let mut chain = MaskChainState::for_pair(key, target, j);
        let mut r = chain.advance();
        for _ in 0..iteration {
            r = chain.advance();
        }
        let words = expand_masks(&r, len);
        for (u, m) in unmasked.iter_mut().zip(words) {
            // The target added masks shared with higher ids, subtracted lower.
            *u = if target < j { u.wrapping_sub(m) } else { u.wrapping_add(m) };
        }
    }

    let routes_agree = full.then(|| {
        let w = &sim.server.models()[t];
        let scale = sim.codec.scale();
        let mut words: Vec<u64> = w
            .as_slice()
            .iter()
            .map(|&v| (v * n as f64 * scale).round() as i64 as u64)
            .collect();
        for &c in &colluding {
            let r = &sim.clients[c as usize].records()[t];
            for ((acc, &e), &z) in words.iter_mut().zip(&r.encoded).zip(&r.noise_words) {
                *acc = acc.wrapping_sub(e).wrapping_sub(z);
            }
        }
        words == unmasked
    });

    let recovered: Vec<f64> = unmasked.iter().map(|&w| sim.codec.decode_word(w)).collect();
    let true_weights = record.trained.0.clone();
    let true_noisy: Vec<f64> = true_weights.iter().zip(&record.noise).map(|(w, p)| w + p).collect();
    RecoveryResult {
        target,
        iteration,
        full_collusion: full,
        unknown_pairs,
        errors_vs_noisy: recovered.iter().zip(&true_noisy).map(|(r, v)| (r - v).abs()).collect(),
        residuals: recovered.iter().zip(&true_weights).map(|(r, w)| (r - w).abs()).collect(),
        recovered,
        true_weights,
        true_noisy,
        routes_agree,
    }
}

/// Pearson chi-square of the top four bits of each word against uniform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub degrees_of_freedom: u32,
    /// Upper 5% point for 15 degrees of freedom.
    pub critical: f64,
}

impl ChiSquare {
    pub fn uniform_at_5pct(&self) -> bool {
        self.statistic < self.critical
    }
}

pub fn uniformity_chi_square(words: &[u64]) -> ChiSquare {
    let mut counts = [0u64; 16];
    for &w in words {
        counts[(w >> 60) as usize] += 1;
    }
    let expected = words.len() as f64 / 16.0;
    let statistic = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    ChiSquare {
        statistic,
        degrees_of_freedom: 15,
        critical: 24.995_790_139_728_616,
    }
}

fn ns_to_ms(ns: f64) -> f64 {
    ns / 1e6
}

fn mean(values: impl Iterator<Item = Nanos>) -> f64 {
    let (sum, count) = values.fold((0u128, 0u64), |(s, c), v| (s + v as u128, c + 1));
    if count == 0 {
        0.0
    } else {
        sum as f64 / count as f64
    }
}

/// Per-phase timing means, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingReport {
    pub clients: usize,
    pub iterations: usize,
    /// Simulated time at which the last agent went idle.
    pub total_ms: f64,
    pub server_ms_per_iteration: f64,
    /// Whole key exchange, per client.
    pub dh_setup_ms: f64,
    /// Per client per iteration.
    pub training_ms: f64,
    /// Noise, mask expansion and masking, per client per iteration.
    pub encrypt_ms: f64,
}

impl TimingReport {
    pub fn from_simulation(sim: &Simulation) -> Self {
        let clients = &sim.clients;
        TimingReport {
            clients: clients.len(),
            iterations: sim.server.models().len(),
            total_ms: ns_to_ms(sim.summary.end_time as f64),
            server_ms_per_iteration: ns_to_ms(mean(sim.server.server_ns().iter().copied())),
            dh_setup_ms: ns_to_ms(mean(clients.iter().map(|c| c.timing().dh_setup_ns))),
            training_ms: ns_to_ms(mean(
                clients.iter().flat_map(|c| c.timing().training_ns.iter().copied()),
            )),
            encrypt_ms: ns_to_ms(mean(
                clients.iter().flat_map(|c| c.timing().encrypt_ns.iter().copied()),
            )),
        }
    }

    /// Fixed-width table with a header row.
    pub fn table(reports: &[TimingReport]) -> String {
        let mut out = format!(
            "{:>7} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
            "users", "total_ms", "server_ms", "dh_ms", "train_ms", "encrypt_ms"
        );
        for r in reports {
            out.push_str(&format!(
                "{:>7} {:>12.3} {:>12.3} {:>12.3} {:>12.3} {:>12.3}\n",
                r.clients, r.total_ms, r.server_ms_per_iteration, r.dh_setup_ms, r.training_ms, r.encrypt_ms
            ));
        }
        out
    }
}

/// One holdout evaluation of the shared model after one iteration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub clients: usize,
    pub epsilon: String,
    pub neighborhood: String,
    pub iteration: u32,
    pub loss: f64,
    pub mcc: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MetricsRow {
    pub fn new(clients: usize, epsilon: Option<f64>, neighborhood: &str, iteration: u32, e: &Evaluation) -> Self {
        MetricsRow {
            clients,
            epsilon: epsilon_label(epsilon),
            neighborhood: neighborhood.to_string(),
            iteration,
            loss: e.loss,
            mcc: e.mcc,
            tp: e.confusion.tp,
            fp: e.confusion.fp,
            tn: e.confusion.tn,
            fn_: e.confusion.fn_,
        }
    }
}

/// `"none"` when noise is disabled, otherwise scientific notation.
pub fn epsilon_label(epsilon: Option<f64>) -> String {
    match epsilon {
        Some(e) => format!("{e:e}"),
        None => "none".to_string(),
    }
}

/// One timing summary for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub clients: usize,
    pub epsilon: String,
    pub neighborhood: String,
    pub timing_mode: String,
    pub iterations: usize,
    pub total_ms: f64,
    pub server_ms_per_iteration: f64,
    pub dh_setup_ms: f64,
    pub training_ms: f64,
    pub encrypt_ms: f64,
}

impl TimingRow {
    pub fn new(epsilon: Option<f64>, neighborhood: &str, timing_mode: &str, r: &TimingReport) -> Self {
        TimingRow {
            clients: r.clients,
            epsilon: epsilon_label(epsilon),
            neighborhood: neighborhood.to_string(),
            timing_mode: timing_mode.to_string(),
            iterations: r.iterations,
            total_ms: r.total_ms,
            server_ms_per_iteration: r.server_ms_per_iteration,
            dh_setup_ms: r.dh_setup_ms,
            training_ms: r.training_ms,
            encrypt_ms: r.encrypt_ms,
        }
    }
}

/// Writes any serializable rows as CSV with a header.
pub fn write_csv<W: Write, R: Serialize>(rows: &[R], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
