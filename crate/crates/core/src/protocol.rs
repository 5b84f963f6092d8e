//! Client and server agents for privacy-preserving federated averaging.
//!
//! Setup runs once: every client sends one public key per neighbor to the
//! server, which relays it to the counterparty. Each client then derives one
//! mask chain per neighbor. Every protocol iteration a client trains from the
//! last shared model, adds Laplace noise, masks the encoded result and sends
//! it to the server. The server sums the round, broadcasts the average, and
//! after the final iteration sends a terminal marker.
//!
//! The server is agent 0; client `c` is agent `c + 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_local, DataError, Dataset};
use crate::group_crypto::{agree, keygen, CryptoError, GroupParams, KeyPair, SharedKey};
use crate::learner::{train, LearnError, ModelWeights, TrainConfig};
use crate::privacy::{make_noise, PrivacyConfig, PrivacyError};
use crate::secure_agg::{
    aggregate, check_headroom, mask, AggregationError, ClientId, CodecError, FixedPointCodec,
    MaskedVector, PairAssignment,
};
use crate::seed;
use crate::simkernel::{
    Agent, AgentId, Context, Kernel, KernelConfig, KernelError, LatencyModel, Message, Nanos,
    Payload, RunSummary, TraceRecord, NANOS_PER_MS,
};

pub const SERVER: AgentId = 0;

pub fn client_agent(client: ClientId) -> AgentId {
    client as AgentId + 1
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("client {client}: {source}")]
    Crypto {
        client: ClientId,
        #[source]
        source: CryptoError,
    },

    #[error("client {client}, iteration {iteration}: {source}")]
    Learn {
        client: ClientId,
        iteration: u32,
        #[source]
        source: LearnError,
    },

    #[error("client {client}, iteration {iteration}: {source}")]
    Codec {
        client: ClientId,
        iteration: u32,
        #[source]
        source: CodecError,
    },

    #[error("client {client}, iteration {iteration}: {source}")]
    Data {
        client: ClientId,
        iteration: u32,
        #[source]
        source: DataError,
    },

    #[error("iteration {iteration}: {source}")]
    Aggregation {
        iteration: u32,
        #[source]
        source: AggregationError,
    },

    #[error(transparent)]
    Privacy(#[from] PrivacyError),

    #[error(transparent)]
    Kernel(#[from] KernelError),

    #[error("agent {agent} received unexpected {kind} message: {detail}")]
    Unexpected {
        agent: AgentId,
        kind: &'static str,
        detail: String,
    },

    #[error("protocol stalled: {0}")]
    Stalled(String),
}

/// Which client pairs exchange keys and masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborMode {
    Full,
    #[serde(rename = "logn")]
    LogN,
}

impl fmt::Display for NeighborMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NeighborMode::Full => "full",
            NeighborMode::LogN => "logn",
        })
    }
}

impl FromStr for NeighborMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(NeighborMode::Full),
            "logn" => Ok(NeighborMode::LogN),
            other => Err(format!("unknown neighborhood {other:?} (expected full or logn)")),
        }
    }
}

/// `⌈log2 n⌉`, zero for `n < 2`.
pub fn log_degree(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Symmetric pairing graph over clients.
///
/// In log-N mode client `i` is paired with `i+1, …, i+d (mod n)` for
/// `d = ⌈log2 n⌉`, and by symmetry with `i−1, …, i−d`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    mode: NeighborMode,
    adjacency: Vec<Vec<ClientId>>,
}

impl NeighborGraph {
    pub fn new(mode: NeighborMode, n: usize) -> Self {
        let mut sets = vec![BTreeSet::new(); n];
        match mode {
            NeighborMode::Full => {
                for (i, set) in sets.iter_mut().enumerate() {
                    set.extend((0..n as ClientId).filter(|&j| j as usize != i));
                }
            }
            NeighborMode::LogN => {
                let d = log_degree(n);
                for i in 0..n {
                    for step in 1..=d {
                        let j = (i + step) % n;
                        if j != i {
                            sets[i].insert(j as ClientId);
                            sets[j].insert(i as ClientId);
                        }
                    }
                }
            }
        }
        NeighborGraph {
            mode,
            adjacency: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn mode(&self) -> NeighborMode {
        self.mode
    }

    pub fn clients(&self) -> usize {
        self.adjacency.len()
    }

    /// Sorted neighbor list.
    pub fn neighbors(&self, client: ClientId) -> &[ClientId] {
        &self.adjacency[client as usize]
    }

    pub fn degree(&self, client: ClientId) -> usize {
        self.adjacency[client as usize].len()
    }

    pub fn contains(&self, a: ClientId, b: ClientId) -> bool {
        self.adjacency
            .get(a as usize)
            .is_some_and(|n| n.binary_search(&b).is_ok())
    }

    /// Every edge once, as `(low, high)`.
    pub fn pairs(&self) -> Vec<(ClientId, ClientId)> {
        let mut out = Vec::new();
        for (i, ns) in self.adjacency.iter().enumerate() {
            for &j in ns {
                if (i as ClientId) < j {
                    out.push((i as ClientId, j));
                }
            }
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        let n = self.adjacency.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.adjacency[i] {
                if !seen[j as usize] {
                    seen[j as usize] = true;
                    stack.push(j as usize);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Constant per-phase costs charged in fixed timing mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixedCosts {
    /// Whole key-exchange cost per client, charged half in each setup round.
    pub dh_setup_ns: Nanos,
    pub training_ns: Nanos,
    pub encrypt_ns: Nanos,
    pub server_ns: Nanos,
}

impl Default for FixedCosts {
    fn default() -> Self {
        FixedCosts {
            dh_setup_ns: NANOS_PER_MS,
            training_ns: NANOS_PER_MS,
            encrypt_ns: NANOS_PER_MS,
            server_ns: NANOS_PER_MS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimingMode {
    /// Charge the host wall-clock time of each computation.
    Measured,
    Fixed(FixedCosts),
}

impl TimingMode {
    fn run<T>(&self, fixed: Nanos, f: impl FnOnce() -> T) -> (T, Nanos) {
        match self {
            TimingMode::Measured => {
                let start = Instant::now();
                let out = f();
                (out, start.elapsed().as_nanos() as Nanos)
            }
            TimingMode::Fixed(_) => (f(), fixed),
        }
    }

    fn costs(&self) -> FixedCosts {
        match self {
            TimingMode::Measured => FixedCosts {
                dh_setup_ns: 0,
                training_ns: 0,
                encrypt_ns: 0,
                server_ns: 0,
            },
            TimingMode::Fixed(c) => *c,
        }
    }
}

/// Pairwise network placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyConfig {
    pub min_ns: Nanos,
    pub max_ns: Nanos,
    pub jitter_max_ns: Nanos,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            min_ns: 200_000,
            max_ns: 2_000_000,
            jitter_max_ns: 500_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub clients: usize,
    pub iterations: u32,
    pub train: TrainConfig,
    pub local_rows: usize,
    /// Lets a training partition smaller than `local_rows` be used whole.
    pub allow_small: bool,
    /// `None` disables noise.
    pub epsilon: Option<f64>,
    pub neighborhood: NeighborMode,
    pub timing: TimingMode,
    pub group: GroupParams,
    pub fractional_bits: u32,
    /// Assumed bound on any trained weight, used by the headroom check.
    pub max_abs_weight: f64,
    pub latency: LatencyConfig,
    pub seed: u64,
    pub record_trace: bool,
    pub max_events: u64,
    /// Test hook: the server silently drops the key `from → to`.
    pub drop_key: Option<(ClientId, ClientId)>,
}

impl ProtocolConfig {
    /// Default experiment parameters on the given group.
    pub fn new(clients: usize, group: GroupParams) -> Self {
        ProtocolConfig {
            clients,
            iterations: 30,
            train: TrainConfig::default(),
            local_rows: crate::data::DEFAULT_LOCAL_ROWS,
            allow_small: false,
            epsilon: None,
            neighborhood: NeighborMode::Full,
            timing: TimingMode::Fixed(FixedCosts::default()),
            group,
            fractional_bits: crate::secure_agg::DEFAULT_FRACTIONAL_BITS,
            max_abs_weight: 100.0,
            latency: LatencyConfig::default(),
            seed: 0,
            record_trace: false,
            max_events: crate::simkernel::DEFAULT_MAX_EVENTS,
            drop_key: None,
        }
    }

    /// Rows per local sample given the training partition.
    pub fn effective_local_rows(&self, train_rows: usize) -> usize {
        if self.allow_small {
            self.local_rows.min(train_rows)
        } else {
            self.local_rows
        }
    }

    pub fn privacy(&self, train_rows: usize) -> Result<Option<PrivacyConfig>, ProtocolError> {
        self.epsilon
            .map(|eps| {
                PrivacyConfig::new(
                    eps,
                    self.clients,
                    self.effective_local_rows(train_rows),
                    self.train.alpha_reg,
                )
            })
            .transpose()
            .map_err(ProtocolError::from)
    }

    /// Checks every precondition that can be checked before the run.
    pub fn validate(&self, train_rows: usize) -> Result<(), ProtocolError> {
        let bad = |m: String| Err(ProtocolError::Config(m));
        if self.clients == 0 {
            return bad("at least one client is required".into());
        }
        if self.clients > ClientId::MAX as usize {
            return bad(format!("too many clients: {}", self.clients));
        }
        if self.iterations == 0 {
            return bad("at least one protocol iteration is required".into());
        }
        if self.local_rows == 0 {
            return bad("local sample size must be positive".into());
        }
        if !self.allow_small && train_rows < self.local_rows {
            return bad(format!(
                "training partition has {train_rows} rows but each client samples {}",
                self.local_rows
            ));
        }
        if train_rows == 0 {
            return bad("training partition is empty".into());
        }
        if self.latency.min_ns > self.latency.max_ns {
            return bad("latency minimum exceeds maximum".into());
        }
        if !(self.max_abs_weight.is_finite() && self.max_abs_weight > 0.0) {
            return bad("max_abs_weight must be positive".into());
        }
        self.train
            .validate()
            .map_err(|e| ProtocolError::Config(e.to_string()))?;
        let codec = FixedPointCodec::new(self.fractional_bits)
            .map_err(|e| ProtocolError::Config(e.to_string()))?;
        let privacy = self.privacy(train_rows)?;
        check_headroom(
            &codec,
            self.clients,
            self.max_abs_weight,
            privacy.map(|p| p.scale()),
        )
        .map_err(|e| ProtocolError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Messages exchanged between agents.
#[derive(Debug, Clone)]
pub enum ProtocolMessage {
    /// Client `from` → server: public key for the pair `(from, to)`.
    PublicKey {
        from: ClientId,
        to: ClientId,
        key: BigUint,
    },
    /// Server → client `to`: the relayed public key of `from`.
    ForwardedKey {
        from: ClientId,
        to: ClientId,
        key: BigUint,
    },
    /// Client → server: a masked vector in its little-endian wire layout
    /// (iteration u32, client u32, count u32, count × u64).
    MaskedVector(Vec<u8>),
    /// Server → client: the shared model after `iteration`.
    ModelBroadcast { iteration: u32, weights: Vec<f64> },
    /// Server → client: no further iterations follow.
    Terminal { iterations: u32 },
}

impl Payload for ProtocolMessage {
    fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::PublicKey { .. } => "public_key",
            ProtocolMessage::ForwardedKey { .. } => "forwarded_key",
            ProtocolMessage::MaskedVector(_) => "masked_vector",
            ProtocolMessage::ModelBroadcast { .. } => "model_broadcast",
            ProtocolMessage::Terminal { .. } => "terminal",
        }
    }
}

/// Read-only run context shared by every agent.
#[derive(Debug)]
struct Shared {
    clients: usize,
    iterations: u32,
    train_cfg: TrainConfig,
    local_rows: usize,
    allow_small: bool,
    privacy: Option<PrivacyConfig>,
    group: GroupParams,
    codec: FixedPointCodec,
    graph: NeighborGraph,
    timing: TimingMode,
    seed: u64,
    data: Arc<Dataset>,
    drop_key: Option<(ClientId, ClientId)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientPhase {
    Setup1,
    Setup2,
    Training,
    AwaitingModel,
    Done,
    Failed,
}

/// Per-client charged durations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientTiming {
    pub dh_setup_ns: Nanos,
    pub training_ns: Vec<Nanos>,
    pub encrypt_ns: Vec<Nanos>,
}

/// Everything one client computed in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientRecord {
    pub iteration: u32,
    pub start: ModelWeights,
    /// Locally trained weights `w_i`, before noise.
    pub trained: ModelWeights,
    /// Noise `η_i` (all zeros when noise is disabled).
    pub noise: Vec<f64>,
    pub encoded: Vec<u64>,
    pub noise_words: Vec<u64>,
    pub masked: MaskedVector,
}

pub struct ClientAgent {
    id: ClientId,
    shared: Arc<Shared>,
    phase: ClientPhase,
    keypairs: BTreeMap<ClientId, KeyPair>,
    received: BTreeMap<ClientId, BigUint>,
    shared_keys: BTreeMap<ClientId, SharedKey>,
    chains: PairAssignment,
    weights: ModelWeights,
    iteration: u32,
    records: Vec<ClientRecord>,
    timing: ClientTiming,
    models_received: u32,
    terminal_seen: bool,
    error: Option<ProtocolError>,
}

impl fmt::Debug for ClientAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientAgent")
            .field("id", &self.id)
            .field("phase", &self.phase)
            .field("iteration", &self.iteration)
            .finish_non_exhaustive()
    }
}

impl ClientAgent {
    fn new(id: ClientId, shared: Arc<Shared>) -> Self {
        let cols = shared.data.cols();
        ClientAgent {
            id,
            shared,
            phase: ClientPhase::Setup1,
            keypairs: BTreeMap::new(),
            received: BTreeMap::new(),
            shared_keys: BTreeMap::new(),
            chains: PairAssignment::new(),
            weights: ModelWeights::zeros(cols),
            iteration: 0,
            records: Vec::new(),
            timing: ClientTiming::default(),
            models_received: 0,
            terminal_seen: false,
            error: None,
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn phase(&self) -> ClientPhase {
        self.phase
    }

    /// Pairwise keys by counterparty.
    pub fn shared_keys(&self) -> &BTreeMap<ClientId, SharedKey> {
        &self.shared_keys
    }

    pub fn chains(&self) -> &PairAssignment {
        &self.chains
    }

    /// Last model received from the server.
    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn records(&self) -> &[ClientRecord] {
        &self.records
    }

    pub fn timing(&self) -> &ClientTiming {
        &self.timing
    }

    pub fn error(&self) -> Option<&ProtocolError> {
        self.error.as_ref()
    }

    /// Neighbors whose public keys have not arrived.
    pub fn missing_keys(&self) -> Vec<ClientId> {
        self.shared
            .graph
            .neighbors(self.id)
            .iter()
            .copied()
            .filter(|j| !self.received.contains_key(j))
            .collect()
    }

    /// The marker can overtake the final broadcast under jitter.
    fn receive_terminal(&mut self) {
        if self.terminal_seen {
            return self.fail(ProtocolError::Unexpected {
                agent: client_agent(self.id),
                kind: "terminal",
                detail: "second terminal marker".into(),
            });
        }
        self.terminal_seen = true;
        if self.models_received == self.shared.iterations {
            self.phase = ClientPhase::Done;
        }
    }

    fn fail(&mut self, e: ProtocolError) {
        self.phase = ClientPhase::Failed;
        if self.error.is_none() {
            self.error = Some(e);
        }
    }

    fn setup_round1(&mut self, ctx: &mut Context<'_, ProtocolMessage>) {
        let sh = Arc::clone(&self.shared);
        let half = sh.timing.costs().dh_setup_ns / 2;
        let (keys, cost) = sh.timing.run(half, || {
            sh.graph
                .neighbors(self.id)
                .iter()
                .map(|&j| {
                    let mut rng = seed::stream(sh.seed, "dh", self.id as u64, j as u64);
                    (j, keygen(&sh.group, &mut rng))
                })
                .collect::<BTreeMap<_, _>>()
        });
        ctx.charge_computation(cost);
        self.timing.dh_setup_ns += cost;
        for (&j, kp) in &keys {
            let msg = ProtocolMessage::PublicKey {
                from: self.id,
                to: j,
                key: kp.public().clone(),
            };
            if let Err(e) = ctx.send(SERVER, msg) {
                return self.fail(e.into());
            }
        }
        self.keypairs = keys;
        self.phase = ClientPhase::Setup2;
        if self.keypairs.is_empty() {
            self.finish_setup(ctx);
        }
    }

    fn receive_key(
        &mut self,
        ctx: &mut Context<'_, ProtocolMessage>,
        from: ClientId,
        key: BigUint,
    ) {
        if self.phase != ClientPhase::Setup2
            || !self.keypairs.contains_key(&from)
            || self.received.contains_key(&from)
        {
            return self.fail(ProtocolError::Unexpected {
                agent: client_agent(self.id),
                kind: "forwarded_key",
                detail: format!("key from client {from} in phase {:?}", self.phase),
            });
        }
        self.received.insert(from, key);
        if self.received.len() == self.keypairs.len() {
            self.finish_setup(ctx);
        }
    }

    fn finish_setup(&mut self, ctx: &mut Context<'_, ProtocolMessage>) {
        let sh = Arc::clone(&self.shared);
        let fixed = sh.timing.costs().dh_setup_ns;
        let (derived, cost) = sh.timing.run(fixed - fixed / 2, || {
            self.received
                .iter()
                .map(|(&j, pk)| {
                    agree(&sh.group, self.keypairs[&j].secret(), pk).map(|k| (j, k))
                })
                .collect::<Result<BTreeMap<_, _>, _>>()
        });
        ctx.charge_computation(cost);
        self.timing.dh_setup_ns += cost;
        let derived = match derived {
            Ok(d) => d,
            Err(source) => {
                return self.fail(ProtocolError::Crypto {
                    client: self.id,
                    source,
                })
            }
        };
        for (&j, k) in &derived {
            self.chains
                .insert(self.id, j, k)
                .expect("neighbors are distinct and unique");
        }
        self.shared_keys = derived;
        self.phase = ClientPhase::Training;
        let start = self.weights.clone();
        self.run_iteration(ctx, start);
    }

    fn run_iteration(&mut self, ctx: &mut Context<'_, ProtocolMessage>, start: ModelWeights) {
        if let Err(e) = self.try_iteration(ctx, start) {
            self.fail(e);
        }
    }

    fn try_iteration(
        &mut self,
        ctx: &mut Context<'_, ProtocolMessage>,
        start: ModelWeights,
    ) -> Result<(), ProtocolError> {
        let sh = Arc::clone(&self.shared);
        let (id, t) = (self.id, self.iteration);
        let local = sample_local(&sh.data, id, t, sh.seed, sh.local_rows, sh.allow_small)
            .map_err(|source| ProtocolError::Data {
                client: id,
                iteration: t,
                source,
            })?;
        let costs = sh.timing.costs();

        let (trained, cost) = sh
            .timing
            .run(costs.training_ns, || train(&start, &local.data, &sh.train_cfg));
        ctx.charge_computation(cost);
        self.timing.training_ns.push(cost);
        let trained = trained.map_err(|source| ProtocolError::Learn {
            client: id,
            iteration: t,
            source,
        })?;

        let chains = &mut self.chains;
        let (sealed, cost) = sh.timing.run(costs.encrypt_ns, || {
            seal(&sh, chains, id, t, &trained)
        });
        ctx.charge_computation(cost);
        self.timing.encrypt_ns.push(cost);
        let (noise, encoded, noise_words, masked) = sealed?;

        ctx.send(SERVER, ProtocolMessage::MaskedVector(masked.to_bytes()))?;
        self.records.push(ClientRecord {
            iteration: t,
            start,
            trained,
            noise,
            encoded,
            noise_words,
            masked,
        });
        self.phase = ClientPhase::AwaitingModel;
        Ok(())
    }

    fn receive_model(
        &mut self,
        ctx: &mut Context<'_, ProtocolMessage>,
        iteration: u32,
        weights: Vec<f64>,
    ) {
        if self.phase != ClientPhase::AwaitingModel || iteration != self.iteration {
            return self.fail(ProtocolError::Unexpected {
                agent: client_agent(self.id),
                kind: "model_broadcast",
                detail: format!(
                    "model for iteration {iteration} while at {} in phase {:?}",
                    self.iteration, self.phase
                ),
            });
        }
        self.weights = ModelWeights(weights);
        self.models_received += 1;
        if self.models_received == self.shared.iterations {
            if self.terminal_seen {
                self.phase = ClientPhase::Done;
            }
        } else {
            self.iteration += 1;
            self.phase = ClientPhase::Training;
            let start = self.weights.clone();
            self.run_iteration(ctx, start);
        }
    }
}

type Sealed = (Vec<f64>, Vec<u64>, Vec<u64>, MaskedVector);

/// Noise, encode, advance every chain once and mask.
fn seal(
    sh: &Shared,
    chains: &mut PairAssignment,
    id: ClientId,
    t: u32,
    trained: &ModelWeights,
) -> Result<Sealed, ProtocolError> {
    let len = trained.len();
    let noise = match &sh.privacy {
        Some(p) => {
            let mut rng = seed::stream(sh.seed, "noise", id as u64, t as u64);
            make_noise(p, len, id, t, &mut rng).values
        }
        None => vec![0.0; len],
    };
    let codec_err = |source| ProtocolError::Codec {
        client: id,
        iteration: t,
        source,
    };
    let encoded = sh.codec.encode(trained.as_slice()).map_err(codec_err)?;
    let noise_words = sh.codec.encode(&noise).map_err(codec_err)?;
    let masks = chains.advance(len);
    let masked = mask(&masks, id, t, &encoded, &noise_words).map_err(|source| {
        ProtocolError::Aggregation {
            iteration: t,
            source,
        }
    })?;
    Ok((noise, encoded, noise_words, masked))
}

/// Message counts the server observed, for auditing.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ServerAudit {
    pub public_keys: usize,
    pub forwarded: usize,
    pub dropped: usize,
    /// Key messages that arrived after the first masked vector.
    pub late_keys: usize,
    pub masked_vectors: usize,
}

pub struct ServerAgent {
    shared: Arc<Shared>,
    iteration: u32,
    inbox: BTreeMap<ClientId, MaskedVector>,
    rounds: Vec<Vec<MaskedVector>>,
    models: Vec<ModelWeights>,
    server_ns: Vec<Nanos>,
    pending_ns: Nanos,
    audit: ServerAudit,
    done: bool,
    error: Option<ProtocolError>,
}

impl fmt::Debug for ServerAgent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerAgent")
            .field("iteration", &self.iteration)
            .field("inbox", &self.inbox.len())
            .field("done", &self.done)
            .finish_non_exhaustive()
    }
}

impl ServerAgent {
    fn new(shared: Arc<Shared>) -> Self {
        ServerAgent {
            shared,
            iteration: 0,
            inbox: BTreeMap::new(),
            rounds: Vec::new(),
            models: Vec::new(),
            server_ns: Vec::new(),
            pending_ns: 0,
            audit: ServerAudit::default(),
            done: false,
            error: None,
        }
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Every completed round's submissions, ordered by client id.
    pub fn rounds(&self) -> &[Vec<MaskedVector>] {
        &self.rounds
    }

    /// Shared model after each iteration.
    pub fn models(&self) -> &[ModelWeights] {
        &self.models
    }

    /// Charged server time per iteration.
    pub fn server_ns(&self) -> &[Nanos] {
        &self.server_ns
    }

    pub fn audit(&self) -> &ServerAudit {
        &self.audit
    }

    pub fn inbox_len(&self) -> usize {
        self.inbox.len()
    }

    pub fn error(&self) -> Option<&ProtocolError> {
        self.error.as_ref()
    }

    fn fail(&mut self, e: ProtocolError) {
        if self.error.is_none() {
            self.error = Some(e);
        }
    }

    fn relay(
        &mut self,
        ctx: &mut Context<'_, ProtocolMessage>,
        from: ClientId,
        to: ClientId,
        key: BigUint,
    ) {
        self.audit.public_keys += 1;
        if self.audit.masked_vectors > 0 {
            self.audit.late_keys += 1;
        }
        let n = self.shared.clients;
        if from as usize >= n || to as usize >= n || !self.shared.graph.contains(from, to) {
            return self.fail(ProtocolError::Unexpected {
                agent: SERVER,
                kind: "public_key",
                detail: format!("key for non-neighbors {from} → {to}"),
            });
        }
        if self.shared.drop_key == Some((from, to)) {
            self.audit.dropped += 1;
            return;
        }
        self.audit.forwarded += 1;
        if let Err(e) = ctx.send(client_agent(to), ProtocolMessage::ForwardedKey { from, to, key }) {
            self.fail(e.into());
        }
    }

    /// Files one submission and returns the new shared model once the round
    /// is complete.
    pub fn accept(&mut self, msg: MaskedVector) -> Result<Option<Vec<f64>>, ProtocolError> {
        let t = self.iteration;
        let agg_err = |source| ProtocolError::Aggregation { iteration: t, source };
        if self.done || msg.iteration != t {
            return Err(ProtocolError::Unexpected {
                agent: SERVER,
                kind: "masked_vector",
                detail: format!(
                    "submission for iteration {} from client {} while at {t}",
                    msg.iteration, msg.client_id
                ),
            });
        }
        if msg.client_id as usize >= self.shared.clients {
            return Err(agg_err(AggregationError::UnknownClient {
                client: msg.client_id,
                n: self.shared.clients,
            }));
        }
        if self.inbox.contains_key(&msg.client_id) {
            return Err(agg_err(AggregationError::Duplicate(msg.client_id)));
        }
        self.inbox.insert(msg.client_id, msg);
        if self.inbox.len() < self.shared.clients {
            return Ok(None);
        }
        let round: Vec<MaskedVector> = std::mem::take(&mut self.inbox).into_values().collect();
        let w = aggregate(&round, &self.shared.codec, self.shared.clients).map_err(agg_err)?;
        self.rounds.push(round);
        Ok(Some(w))
    }

    fn receive_masked(&mut self, ctx: &mut Context<'_, ProtocolMessage>, bytes: &[u8]) {
        self.audit.masked_vectors += 1;
        let timing = self.shared.timing;
        let (parsed, cost) = timing.run(0, || MaskedVector::from_bytes(bytes));
        ctx.charge_computation(cost);
        self.pending_ns += cost;
        let parsed = match parsed {
            Ok(p) => p,
            Err(source) => {
                return self.fail(ProtocolError::Aggregation {
                    iteration: self.iteration,
                    source,
                })
            }
        };
        let (outcome, cost) = timing.run(timing.costs().server_ns, || self.accept(parsed));
        match outcome {
            Err(e) => self.fail(e),
            Ok(None) => {
                // Only the aggregating call is charged in fixed mode.
                if matches!(timing, TimingMode::Measured) {
                    ctx.charge_computation(cost);
                    self.pending_ns += cost;
                }
            }
            Ok(Some(w)) => {
                ctx.charge_computation(cost);
                self.server_ns.push(self.pending_ns + cost);
                self.pending_ns = 0;
                self.broadcast(ctx, w);
            }
        }
    }

    fn broadcast(&mut self, ctx: &mut Context<'_, ProtocolMessage>, w: Vec<f64>) {
        let t = self.iteration;
        self.models.push(ModelWeights(w.clone()));
        let last = t + 1 == self.shared.iterations;
        for c in 0..self.shared.clients as ClientId {
            let msg = ProtocolMessage::ModelBroadcast {
                iteration: t,
                weights: w.clone(),
            };
            if let Err(e) = ctx.send(client_agent(c), msg) {
                return self.fail(e.into());
            }
            if last {
                let term = ProtocolMessage::Terminal {
                    iterations: self.shared.iterations,
                };
                if let Err(e) = ctx.send(client_agent(c), term) {
                    return self.fail(e.into());
                }
            }
        }
        if last {
            self.done = true;
        }
        self.iteration += 1;
    }
}

pub enum Node {
    Server(ServerAgent),
    Client(ClientAgent),
}

impl Agent<ProtocolMessage> for Node {
    fn on_start(&mut self, ctx: &mut Context<'_, ProtocolMessage>) {
        if let Node::Client(c) = self {
            c.setup_round1(ctx);
        }
    }

    fn on_message(&mut self, ctx: &mut Context<'_, ProtocolMessage>, msg: Message<ProtocolMessage>) {
        match self {
            Node::Server(s) => {
                if s.error.is_some() {
                    return;
                }
                match msg.payload {
                    ProtocolMessage::PublicKey { from, to, key } => {
                        if client_agent(from) != msg.sender {
                            return s.fail(ProtocolError::Unexpected {
                                agent: SERVER,
                                kind: "public_key",
                                detail: format!("agent {} claims to be client {from}", msg.sender),
                            });
                        }
                        s.relay(ctx, from, to, key)
                    }
                    ProtocolMessage::MaskedVector(bytes) => s.receive_masked(ctx, &bytes),
                    other => s.fail(ProtocolError::Unexpected {
                        agent: SERVER,
                        kind: other.kind(),
                        detail: format!("from agent {}", msg.sender),
                    }),
                }
            }
            Node::Client(c) => {
                if c.phase == ClientPhase::Failed {
                    return;
                }
                match msg.payload {
                    ProtocolMessage::ForwardedKey { from, to, key } if to == c.id => {
                        c.receive_key(ctx, from, key)
                    }
                    ProtocolMessage::ModelBroadcast { iteration, weights } => {
                        c.receive_model(ctx, iteration, weights)
                    }
                    ProtocolMessage::Terminal { .. } => c.receive_terminal(),
                    other => c.fail(ProtocolError::Unexpected {
                        agent: client_agent(c.id),
                        kind: other.kind(),
                        detail: format!("in phase {:?}", c.phase),
                    }),
                }
            }
        }
    }
}

/// A completed protocol run.
#[derive(Debug)]
pub struct Simulation {
    pub summary: RunSummary,
    pub server: ServerAgent,
    pub clients: Vec<ClientAgent>,
    pub trace: Vec<TraceRecord>,
    pub graph: NeighborGraph,
    pub codec: FixedPointCodec,
    pub privacy: Option<PrivacyConfig>,
}

impl Simulation {
    /// Final shared model.
    pub fn final_model(&self) -> &ModelWeights {
        self.server.models().last().expect("completed run has a model")
    }
}

/// Runs the protocol to completion on `data` (the training partition).
pub fn simulate(cfg: &ProtocolConfig, data: Arc<Dataset>) -> Result<Simulation, ProtocolError> {
    cfg.validate(data.len())?;
    let n = cfg.clients;
    let graph = NeighborGraph::new(cfg.neighborhood, n);
    let codec = FixedPointCodec::new(cfg.fractional_bits).expect("validated");
    let privacy = cfg.privacy(data.len())?;
    let shared = Arc::new(Shared {
        clients: n,
        iterations: cfg.iterations,
        train_cfg: cfg.train,
        local_rows: cfg.local_rows,
        allow_small: cfg.allow_small,
        privacy,
        group: cfg.group.clone(),
        codec,
        graph: graph.clone(),
        timing: cfg.timing,
        seed: cfg.seed,
        data,
        drop_key: cfg.drop_key,
    });

    let mut agents = Vec::with_capacity(n + 1);
    agents.push(Node::Server(ServerAgent::new(Arc::clone(&shared))));
    for c in 0..n as ClientId {
        agents.push(Node::Client(ClientAgent::new(c, Arc::clone(&shared))));
    }
    let latency = LatencyModel::random_placement(
        n + 1,
        cfg.latency.min_ns,
        cfg.latency.max_ns,
        cfg.latency.jitter_max_ns,
        seed::stream(cfg.seed, "latency", 0, 0),
    );
    let mut kernel = Kernel::new(
        agents,
        latency,
        KernelConfig {
            max_events: cfg.max_events,
            record_trace: cfg.record_trace,
        },
    )?;
    let summary = kernel.run(None)?;
    let trace = kernel.trace().to_vec();

    let mut server = None;
    let mut clients = Vec::with_capacity(n);
    for node in kernel.into_agents() {
        match node {
            Node::Server(s) => server = Some(s),
            Node::Client(c) => clients.push(c),
        }
    }
    let mut server = server.expect("agent 0 is the server");

    if let Some(e) = server.error.take() {
        return Err(e);
    }
    for c in &mut clients {
        if let Some(e) = c.error.take() {
            return Err(e);
        }
    }
    if !server.done || clients.iter().any(|c| c.phase != ClientPhase::Done) {
        return Err(ProtocolError::Stalled(diagnose(&server, &clients)));
    }
    Ok(Simulation {
        summary,
        server,
        clients,
        trace,
        graph,
        codec,
        privacy,
    })
}

fn diagnose(server: &ServerAgent, clients: &[ClientAgent]) -> String {
    let missing: Vec<String> = clients
        .iter()
        .filter(|c| c.phase == ClientPhase::Setup2)
        .map(|c| format!("client {} lacks keys from {:?}", c.id, c.missing_keys()))
        .collect();
    if !missing.is_empty() {
        return format!("key exchange incomplete: {}", missing.join("; "));
    }
    format!(
        "server at iteration {} holds {} of {} submissions",
        server.iteration,
        server.inbox.len(),
        clients.len()
    )
}

/// Federated averaging without any masking: the same samples, the same
/// noise draws, plain floating-point averages. Returns the model after each
/// iteration.
pub fn plaintext_fedavg(cfg: &ProtocolConfig, data: &Dataset) -> Result<Vec<ModelWeights>, ProtocolError> {
    cfg.validate(data.len())?;
    let n = cfg.clients;
    let privacy = cfg.privacy(data.len())?;
    let mut w = ModelWeights::zeros(data.cols());
    let mut out = Vec::with_capacity(cfg.iterations as usize);
    for t in 0..cfg.iterations {
        let mut sum = vec![0.0; w.len()];
        for c in 0..n as ClientId {
            let local = sample_local(data, c, t, cfg.seed, cfg.local_rows, cfg.allow_small)
                .map_err(|source| ProtocolError::Data {
                    client: c,
                    iteration: t,
                    source,
                })?;
            let trained = train(&w, &local.data, &cfg.train).map_err(|source| ProtocolError::Learn {
                client: c,
                iteration: t,
                source,
            })?;
            for (s, v) in sum.iter_mut().zip(trained.as_slice()) {
                *s += v;
            }
            if let Some(p) = &privacy {
                let mut rng = seed::stream(cfg.seed, "noise", c as u64, t as u64);
                let noise = make_noise(p, w.len(), c, t, &mut rng);
                for (s, v) in sum.iter_mut().zip(&noise.values) {
                    *s += v;
                }
            }
        }
        w = ModelWeights(sum.into_iter().map(|s| s / n as f64).collect());
        out.push(w.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth, SynthConfig};
    use crate::group_crypto::generate_group;

    fn toy() -> GroupParams {
        generate_group(128, true).unwrap()
    }

    fn small_data() -> Arc<Dataset> {
        let mut s = SynthConfig::new(400, 0.05, 11);
        s.features = 4;
        Arc::new(synth(&s).unwrap())
    }

    fn small_cfg(n: usize) -> ProtocolConfig {
        let mut cfg = ProtocolConfig::new(n, toy());
        cfg.iterations = 3;
        cfg.local_rows = 50;
        cfg.train.local_iterations = 20;
        cfg.seed = 9;
        cfg
    }

    #[test]
    fn log_degree_values() {
        assert_eq!(log_degree(1), 0);
        assert_eq!(log_degree(2), 1);
        assert_eq!(log_degree(3), 2);
        assert_eq!(log_degree(8), 3);
        assert_eq!(log_degree(9), 4);
        assert_eq!(log_degree(256), 8);
    }

    #[test]
    fn full_graph_is_complete() {
        let g = NeighborGraph::new(NeighborMode::Full, 10);
        assert_eq!(g.pairs().len(), 45);
        assert!((0..10).all(|c| g.degree(c) == 9));
        assert!(g.is_connected());
    }

    #[test]
    fn circulant_graph_shape() {
        let g = NeighborGraph::new(NeighborMode::LogN, 8);
        for c in 0..8 {
            assert_eq!(g.degree(c), 6);
        }
        assert_eq!(g.neighbors(0), &[1, 2, 3, 5, 6, 7]);
        assert!(g.is_connected());
        for (a, b) in g.pairs() {
            assert!(g.contains(a, b) && g.contains(b, a));
        }
        assert_eq!(NeighborGraph::new(NeighborMode::LogN, 2).pairs(), vec![(0, 1)]);
        assert_eq!(NeighborGraph::new(NeighborMode::LogN, 3).pairs().len(), 3);
        let big = NeighborGraph::new(NeighborMode::LogN, 256);
        assert!((0..256).all(|c| big.degree(c) == 16));
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("full".parse::<NeighborMode>().unwrap(), NeighborMode::Full);
        assert_eq!("logN".parse::<NeighborMode>().unwrap(), NeighborMode::LogN);
        assert!("ring".parse::<NeighborMode>().is_err());
    }

    #[test]
    fn three_clients_relay_six_keys() {
        let sim = simulate(&small_cfg(3), small_data()).unwrap();
        let a = sim.server.audit();
        assert_eq!(a.public_keys, 6);
        assert_eq!(a.forwarded, 6);
        assert_eq!(a.late_keys, 0);
        assert_eq!(a.masked_vectors, 9);
        assert_eq!(sim.server.models().len(), 3);
        assert_eq!(sim.server.server_ns().len(), 3);
    }

    #[test]
    fn pairwise_keys_agree() {
        let sim = simulate(&small_cfg(5), small_data()).unwrap();
        for c in &sim.clients {
            assert_eq!(c.shared_keys().len(), 4);
            for (&j, k) in c.shared_keys() {
                assert_eq!(&sim.clients[j as usize].shared_keys()[&c.id()], k);
            }
        }
    }

    #[test]
    fn noiseless_run_matches_plaintext_average() {
        let cfg = small_cfg(3);
        let data = small_data();
        let sim = simulate(&cfg, Arc::clone(&data)).unwrap();
        let oracle = plaintext_fedavg(&cfg, &data).unwrap();
        let tol = 3.0 * sim.codec.resolution() * cfg.iterations as f64;
        for (secure, plain) in sim.server.models().iter().zip(&oracle) {
            for (a, b) in secure.as_slice().iter().zip(plain.as_slice()) {
                assert!((a - b).abs() <= tol, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn first_iteration_starts_from_zero_then_from_broadcast() {
        let sim = simulate(&small_cfg(2), small_data()).unwrap();
        for c in &sim.clients {
            let r = c.records();
            assert!(r[0].start.as_slice().iter().all(|&w| w == 0.0));
            assert_eq!(r[1].start, sim.server.models()[0]);
            assert_eq!(r[2].start, sim.server.models()[1]);
            assert_eq!(c.weights(), sim.final_model());
        }
    }

    #[test]
    fn chains_advance_once_per_iteration() {
        let sim = simulate(&small_cfg(4), small_data()).unwrap();
        for c in &sim.clients {
            for (a, b) in c.chains().pairs() {
                assert_eq!(c.chains().chain(a, b).unwrap().iteration(), 3);
            }
        }
    }

    #[test]
    fn fixed_timing_is_exact_and_reproducible() {
        let cfg = small_cfg(3);
        let a = simulate(&cfg, small_data()).unwrap();
        let b = simulate(&cfg, small_data()).unwrap();
        assert_eq!(a.summary, b.summary);
        for c in &a.clients {
            assert_eq!(c.timing().dh_setup_ns, NANOS_PER_MS);
            assert_eq!(c.timing().training_ns, vec![NANOS_PER_MS; 3]);
            assert_eq!(c.timing().encrypt_ns, vec![NANOS_PER_MS; 3]);
        }
        assert_eq!(a.server.server_ns(), &[NANOS_PER_MS; 3]);
    }

    #[test]
    fn dropped_key_stalls_with_diagnostic() {
        let mut cfg = small_cfg(3);
        cfg.drop_key = Some((0, 2));
        match simulate(&cfg, small_data()) {
            Err(ProtocolError::Stalled(msg)) => {
                assert!(msg.contains("client 2 lacks keys from [0]"), "{msg}")
            }
            other => panic!("expected stall, got {other:?}"),
        }
    }

    #[test]
    fn single_client_runs_without_masks() {
        let sim = simulate(&small_cfg(1), small_data()).unwrap();
        let c = &sim.clients[0];
        assert!(c.shared_keys().is_empty());
        let last = c.records().last().unwrap();
        assert_eq!(last.masked.words, last.encoded);
    }

    #[test]
    fn duplicate_submission_is_rejected() {
        let cfg = small_cfg(3);
        let sim = simulate(&cfg, small_data()).unwrap();
        let mut server = ServerAgent::new(Arc::clone(&sim.clients[0].shared));
        let mv = MaskedVector {
            client_id: 1,
            iteration: 0,
            words: vec![0; 5],
        };
        assert_eq!(server.accept(mv.clone()).unwrap(), None);
        assert!(matches!(
            server.accept(mv),
            Err(ProtocolError::Aggregation {
                source: AggregationError::Duplicate(1),
                ..
            })
        ));
    }

    #[test]
    fn all_zero_round_gives_zero_model() {
        let sim = simulate(&small_cfg(3), small_data()).unwrap();
        let mut server = ServerAgent::new(Arc::clone(&sim.clients[0].shared));
        for c in 0..3 {
            let out = server
                .accept(MaskedVector {
                    client_id: c,
                    iteration: 0,
                    words: vec![0; 5],
                })
                .unwrap();
            if c == 2 {
                assert_eq!(out, Some(vec![0.0; 5]));
            }
        }
    }

    #[test]
    fn too_small_partition_is_a_config_error() {
        let mut cfg = small_cfg(2);
        cfg.local_rows = 10_000;
        assert!(matches!(simulate(&cfg, small_data()), Err(ProtocolError::Config(_))));
        cfg.allow_small = true;
        assert!(simulate(&cfg, small_data()).is_ok());
    }

    #[test]
    fn headroom_failure_is_a_config_error() {
        let mut cfg = small_cfg(2);
        cfg.fractional_bits = 39;
        cfg.max_abs_weight = 1e8;
        assert!(matches!(cfg.validate(400), Err(ProtocolError::Config(_))));
    }
}
