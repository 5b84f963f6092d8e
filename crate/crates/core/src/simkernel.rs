//! Single-threaded discrete-event kernel.
//!
//! Time is tracked in nanoseconds. Every inter-agent message goes through a
//! min-heap ordered by `(deliver_at, seq)`, so equal timestamps are delivered
//! in enqueue order. Each agent has its own clock: it handles a message at
//! `max(clock, deliver_at)`, and any computation it charges pushes the clock
//! (and the departure time of later sends) forward.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type AgentId = usize;
pub type Nanos = u64;

pub const NANOS_PER_MS: Nanos = 1_000_000;

/// Default event ceiling before the kernel assumes a livelock.
pub const DEFAULT_MAX_EVENTS: u64 = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KernelError {
    #[error("unknown agent {agent} (kernel has {agents})")]
    UnknownAgent { agent: AgentId, agents: usize },

    #[error("event ceiling of {limit} reached at t={time}ns with {pending} messages pending")]
    EventCeiling { limit: u64, time: Nanos, pending: usize },

    #[error("latency matrix must be square, symmetric and sized for {0} agents")]
    BadLatency(usize),
}

/// Message payloads name their kind for the trace.
pub trait Payload {
    fn kind(&self) -> &'static str;
}

#[derive(Debug, Clone)]
pub struct Message<P> {
    pub sender: AgentId,
    pub recipient: AgentId,
    pub sent_at: Nanos,
    pub deliver_at: Nanos,
    pub seq: u64,
    pub payload: P,
}

struct Entry<P>(Message<P>);

impl<P> PartialEq for Entry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<P> Eq for Entry<P> {}

impl<P> PartialOrd for Entry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Entry<P> {
    // Reversed so BinaryHeap pops the earliest (deliver_at, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        (other.0.deliver_at, other.0.seq).cmp(&(self.0.deliver_at, self.0.seq))
    }
}

pub struct EventQueue<P> {
    heap: BinaryHeap<Entry<P>>,
    next_seq: u64,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            next_seq: 0,
        }
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        sender: AgentId,
        recipient: AgentId,
        sent_at: Nanos,
        deliver_at: Nanos,
        payload: P,
    ) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Entry(Message {
            sender,
            recipient,
            sent_at,
            deliver_at,
            seq,
            payload,
        }));
        seq
    }

    pub fn pop(&mut self) -> Option<Message<P>> {
        self.heap.pop().map(|e| e.0)
    }

    pub fn peek_time(&self) -> Option<Nanos> {
        self.heap.peek().map(|e| e.0.deliver_at)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

/// Pairwise base latency plus a cubic jitter term `jitter_max · u³`.
pub struct LatencyModel {
    agents: usize,
    base: Vec<Nanos>,
    jitter_max: Nanos,
    rng: ChaCha20Rng,
}

impl LatencyModel {
    /// Uses an explicit `agents × agents` row-major base matrix.
    pub fn from_matrix(
        agents: usize,
        base: Vec<Nanos>,
        jitter_max: Nanos,
        rng: ChaCha20Rng,
    ) -> Result<Self, KernelError> {
        if base.len() != agents * agents {
            return Err(KernelError::BadLatency(agents));
        }
        for a in 0..agents {
            for b in 0..a {
                if base[a * agents + b] != base[b * agents + a] {
                    return Err(KernelError::BadLatency(agents));
                }
            }
        }
        Ok(LatencyModel {
            agents,
            base,
            jitter_max,
            rng,
        })
    }

    pub fn uniform(agents: usize, base: Nanos, jitter_max: Nanos, rng: ChaCha20Rng) -> Self {
        LatencyModel {
            agents,
            base: vec![base; agents * agents],
            jitter_max,
            rng,
        }
    }

    /// Draws each pair's base latency once, uniformly in `[min, max]`.
    pub fn random_placement(
        agents: usize,
        min: Nanos,
        max: Nanos,
        jitter_max: Nanos,
        mut rng: ChaCha20Rng,
    ) -> Self {
        let mut base = vec![0; agents * agents];
        for a in 0..agents {
            for b in a + 1..agents {
                let l = rng.gen_range(min..=max.max(min));
                base[a * agents + b] = l;
                base[b * agents + a] = l;
            }
        }
        LatencyModel {
            agents,
            base,
            jitter_max,
            rng,
        }
    }

    pub fn agents(&self) -> usize {
        self.agents
    }

    pub fn jitter_max(&self) -> Nanos {
        self.jitter_max
    }

    pub fn base(&self, from: AgentId, to: AgentId) -> Nanos {
        self.base[from * self.agents + to]
    }

    /// `round(jitter_max · u³)` for `u ∈ [0, 1)`.
    pub fn jitter_from_uniform(&self, u: f64) -> Nanos {
        (self.jitter_max as f64 * u * u * u).round() as Nanos
    }

    pub fn delay_with_uniform(&self, from: AgentId, to: AgentId, u: f64) -> Nanos {
        self.base(from, to) + self.jitter_from_uniform(u)
    }

    /// Samples a fresh one-way delay.
    pub fn sample(&mut self, from: AgentId, to: AgentId) -> Nanos {
        let u: f64 = self.rng.gen();
        self.delay_with_uniform(from, to, u)
    }
}

/// Handle an agent uses while processing one event.
pub struct Context<'a, P> {
    id: AgentId,
    now: Nanos,
    dispatch_time: Nanos,
    queue: &'a mut EventQueue<P>,
    latency: &'a mut LatencyModel,
}

impl<'a, P> Context<'a, P> {
    pub fn id(&self) -> AgentId {
        self.id
    }

    /// The agent's own clock.
    pub fn now(&self) -> Nanos {
        self.now
    }

    /// Delivery time of the event being processed.
    pub fn dispatch_time(&self) -> Nanos {
        self.dispatch_time
    }

    pub fn agent_count(&self) -> usize {
        self.latency.agents()
    }

    /// Advances this agent's clock by a computation's duration.
    pub fn charge_computation(&mut self, nanos: Nanos) {
        self.now += nanos;
    }

    /// Enqueues `payload` for `to`, departing at the agent's current time.
    pub fn send(&mut self, to: AgentId, payload: P) -> Result<u64, KernelError> {
        let agents = self.latency.agents();
        if to >= agents {
            return Err(KernelError::UnknownAgent { agent: to, agents });
        }
        assert!(
            self.now >= self.dispatch_time,
            "agent {} would send before its dispatch time",
            self.id
        );
        let deliver_at = self.now + self.latency.sample(self.id, to);
        Ok(self.queue.push(self.id, to, self.now, deliver_at, payload))
    }
}

pub trait Agent<P> {
    /// Called once at time zero, in agent-id order.
    fn on_start(&mut self, _ctx: &mut Context<'_, P>) {}

    fn on_message(&mut self, ctx: &mut Context<'_, P>, msg: Message<P>);
}

/// One delivered message, as written to the optional trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub deliver_at: Nanos,
    pub processed_at: Nanos,
    pub sender: AgentId,
    pub recipient: AgentId,
    pub seq: u64,
    pub kind: &'static str,
}

#[derive(Debug, Clone, Copy)]
pub struct KernelConfig {
    pub max_events: u64,
    pub record_trace: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            max_events: DEFAULT_MAX_EVENTS,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub events: u64,
    /// Latest agent clock once the run stopped.
    pub end_time: Nanos,
    pub trace_hash: String,
    /// True when the queue drained rather than hitting the horizon.
    pub quiescent: bool,
}

pub struct Kernel<P, A> {
    agents: Vec<A>,
    clocks: Vec<Nanos>,
    queue: EventQueue<P>,
    latency: LatencyModel,
    config: KernelConfig,
    events: u64,
    hasher: Sha256,
    trace: Vec<TraceRecord>,
}

impl<P: Payload, A: Agent<P>> Kernel<P, A> {
    pub fn new(agents: Vec<A>, latency: LatencyModel, config: KernelConfig) -> Result<Self, KernelError> {
        if latency.agents() != agents.len() {
            return Err(KernelError::BadLatency(agents.len()));
        }
        let clocks = vec![0; agents.len()];
        Ok(Kernel {
            agents,
            clocks,
            queue: EventQueue::new(),
            latency,
            config,
            events: 0,
            hasher: Sha256::new(),
            trace: Vec::new(),
        })
    }

    pub fn agents(&self) -> &[A] {
        &self.agents
    }

    pub fn into_agents(self) -> Vec<A> {
        self.agents
    }

    pub fn clock(&self, agent: AgentId) -> Nanos {
        self.clocks[agent]
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn trace_hash(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    /// Injects a message from outside any agent, departing at `at`.
    pub fn inject(&mut self, from: AgentId, to: AgentId, at: Nanos, payload: P) -> Result<u64, KernelError> {
        let agents = self.agents.len();
        if from >= agents || to >= agents {
            return Err(KernelError::UnknownAgent {
                agent: from.max(to),
                agents,
            });
        }
        let deliver_at = at + self.latency.sample(from, to);
        Ok(self.queue.push(from, to, at, deliver_at, payload))
    }

    /// Starts every agent, then dispatches until the queue drains or the
    /// next delivery lies beyond `until`.
    pub fn run(&mut self, until: Option<Nanos>) -> Result<RunSummary, KernelError> {
        for id in 0..self.agents.len() {
            let mut ctx = Context {
                id,
                now: self.clocks[id],
                dispatch_time: self.clocks[id],
                queue: &mut self.queue,
                latency: &mut self.latency,
            };
            self.agents[id].on_start(&mut ctx);
            self.clocks[id] = ctx.now;
        }
        self.resume(until)
    }

    /// Continues dispatching without re-running `on_start`.
    pub fn resume(&mut self, until: Option<Nanos>) -> Result<RunSummary, KernelError> {
        let mut quiescent = true;
        while let Some(t) = self.queue.peek_time() {
            if until.is_some_and(|h| t > h) {
                quiescent = false;
                break;
            }
            if self.events >= self.config.max_events {
                return Err(KernelError::EventCeiling {
                    limit: self.config.max_events,
                    time: t,
                    pending: self.queue.len(),
                });
            }
            let msg = self.queue.pop().expect("peeked");
            self.events += 1;
            let id = msg.recipient;
            let start = self.clocks[id].max(msg.deliver_at);
            self.record(&msg, start);
            let mut ctx = Context {
                id,
                now: start,
                dispatch_time: msg.deliver_at,
                queue: &mut self.queue,
                latency: &mut self.latency,
            };
            self.agents[id].on_message(&mut ctx, msg);
            self.clocks[id] = ctx.now;
        }
        Ok(RunSummary {
            events: self.events,
            end_time: self.clocks.iter().copied().max().unwrap_or(0),
            trace_hash: self.trace_hash(),
            quiescent,
        })
    }

    fn record(&mut self, msg: &Message<P>, processed_at: Nanos) {
        let kind = msg.payload.kind();
        self.hasher.update(msg.deliver_at.to_le_bytes());
        self.hasher.update(processed_at.to_le_bytes());
        self.hasher.update((msg.sender as u64).to_le_bytes());
        self.hasher.update((msg.recipient as u64).to_le_bytes());
        self.hasher.update(msg.seq.to_le_bytes());
        self.hasher.update(kind.as_bytes());
        if self.config.record_trace {
            self.trace.push(TraceRecord {
                deliver_at: msg.deliver_at,
                processed_at,
                sender: msg.sender,
                recipient: msg.recipient,
                seq: msg.seq,
                kind,
            });
        }
    }
}

/// Writes trace records as CSV: `deliver_at_ns,processed_at_ns,sender,recipient,seq,kind`.
pub fn write_trace_csv<W: Write>(records: &[TraceRecord], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["deliver_at_ns", "processed_at_ns", "sender", "recipient", "seq", "kind"])?;
    for r in records {
        w.write_record([
            r.deliver_at.to_string(),
            r.processed_at.to_string(),
            r.sender.to_string(),
            r.recipient.to_string(),
            r.seq.to_string(),
            r.kind.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[derive(Debug, Clone)]
    struct Ball(u32);

    impl Payload for Ball {
        fn kind(&self) -> &'static str {
            "ball"
        }
    }

    /// Returns the ball until `limit` hits, charging `work` per hit.
    struct Player {
        limit: u32,
        work: Nanos,
        log: Vec<(Nanos, u32)>,
    }

    impl Agent<Ball> for Player {
        fn on_start(&mut self, ctx: &mut Context<'_, Ball>) {
            if ctx.id() == 0 {
                ctx.send(1, Ball(0)).unwrap();
            }
        }

        fn on_message(&mut self, ctx: &mut Context<'_, Ball>, msg: Message<Ball>) {
            assert!(ctx.now() >= msg.deliver_at);
            self.log.push((ctx.now(), msg.payload.0));
            ctx.charge_computation(self.work);
            let next = msg.payload.0 + 1;
            if next < self.limit {
                ctx.send(msg.sender, Ball(next)).unwrap();
            }
        }
    }

    fn players(limit: u32, work: Nanos) -> Vec<Player> {
        (0..2)
            .map(|_| Player {
                limit,
                work,
                log: Vec::new(),
            })
            .collect()
    }

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    #[test]
    fn queue_is_fifo_among_equal_timestamps() {
        let mut q = EventQueue::new();
        q.push(0, 1, 0, 50, "a");
        q.push(0, 1, 0, 10, "b");
        q.push(0, 1, 0, 50, "c");
        q.push(0, 1, 0, 10, "d");
        let order: Vec<&str> = std::iter::from_fn(|| q.pop()).map(|m| m.payload).collect();
        assert_eq!(order, vec!["b", "d", "a", "c"]);
    }

    #[test]
    fn jitter_formula() {
        let l = LatencyModel::uniform(2, 1_000_000, 1000, rng(0));
        assert_eq!(l.delay_with_uniform(0, 1, 0.0), 1_000_000);
        assert_eq!(l.delay_with_uniform(0, 1, 0.5), 1_000_125);
        assert!(l.jitter_from_uniform(0.999_999_9) <= 1000);
        assert_eq!(l.jitter_from_uniform(0.999_999_9), 1000);
    }

    #[test]
    fn jitter_mean_is_a_quarter_of_max() {
        let mut l = LatencyModel::uniform(2, 0, 1_000_000, rng(3));
        let draws = 100_000;
        let mean = (0..draws).map(|_| l.sample(0, 1) as f64).sum::<f64>() / draws as f64;
        assert!((mean - 250_000.0).abs() < 0.05 * 250_000.0, "mean {mean}");
    }

    #[test]
    fn ping_pong_alternates() {
        let latency = LatencyModel::uniform(2, 1_000, 0, rng(1));
        let mut k = Kernel::new(players(20, 0), latency, KernelConfig::default()).unwrap();
        let summary = k.run(None).unwrap();
        assert_eq!(summary.events, 20);
        assert!(summary.quiescent);
        let agents = k.into_agents();
        assert_eq!(agents[1].log.iter().map(|e| e.1).collect::<Vec<_>>(), (0..20).step_by(2).collect::<Vec<_>>());
        assert_eq!(agents[0].log.iter().map(|e| e.1).collect::<Vec<_>>(), (1..20).step_by(2).collect::<Vec<_>>());
        assert_eq!(agents[1].log[0].0, 1_000);
        assert_eq!(agents[0].log[0].0, 2_000);
    }

    #[test]
    fn charged_computation_delays_departures() {
        let latency = LatencyModel::uniform(2, 1_000, 0, rng(1));
        let mut k = Kernel::new(players(3, 5_000_000), latency, KernelConfig::default()).unwrap();
        k.run(None).unwrap();
        let agents = k.into_agents();
        // Agent 1 receives at 1_000, works 5 ms, reply lands 1_000 ns later.
        assert_eq!(agents[0].log[0].0, 1_000 + 5_000_000 + 1_000);
    }

    #[test]
    fn zero_charge_leaves_clock_unchanged() {
        let latency = LatencyModel::uniform(2, 7, 0, rng(1));
        let mut k = Kernel::new(players(2, 0), latency, KernelConfig::default()).unwrap();
        k.run(None).unwrap();
        assert_eq!(k.clock(1), 7);
        assert_eq!(k.clock(0), 14);
    }

    #[test]
    fn same_seed_same_trace() {
        let run = |seed| {
            let latency = LatencyModel::random_placement(2, 200_000, 2_000_000, 500_000, rng(seed));
            let mut k = Kernel::new(
                players(50, 1_000),
                latency,
                KernelConfig {
                    record_trace: true,
                    ..KernelConfig::default()
                },
            )
            .unwrap();
            let s = k.run(None).unwrap();
            (s, k.trace().to_vec())
        };
        let (a, ta) = run(4);
        let (b, tb) = run(4);
        let (c, _) = run(5);
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert_ne!(a.trace_hash, c.trace_hash);
        assert!(ta.windows(2).all(|w| w[0].deliver_at <= w[1].deliver_at));
    }

    #[test]
    fn horizon_stops_early() {
        let latency = LatencyModel::uniform(2, 1_000, 0, rng(1));
        let mut k = Kernel::new(players(100, 0), latency, KernelConfig::default()).unwrap();
        let s = k.run(Some(5_000)).unwrap();
        assert_eq!(s.events, 5);
        assert!(!s.quiescent);
        assert!(k.pending() > 0);
    }

    #[test]
    fn event_ceiling_is_enforced() {
        let latency = LatencyModel::uniform(2, 1, 0, rng(1));
        let mut k = Kernel::new(
            players(u32::MAX, 0),
            latency,
            KernelConfig {
                max_events: 100,
                record_trace: false,
            },
        )
        .unwrap();
        assert!(matches!(
            k.run(None),
            Err(KernelError::EventCeiling { limit: 100, .. })
        ));
    }

    #[test]
    fn unknown_recipient_is_rejected() {
        let mut q: EventQueue<Ball> = EventQueue::new();
        let mut l = LatencyModel::uniform(2, 1, 0, rng(1));
        let mut ctx = Context {
            id: 0,
            now: 0,
            dispatch_time: 0,
            queue: &mut q,
            latency: &mut l,
        };
        assert_eq!(
            ctx.send(5, Ball(0)),
            Err(KernelError::UnknownAgent { agent: 5, agents: 2 })
        );
    }

    #[test]
    fn asymmetric_latency_is_rejected() {
        assert!(LatencyModel::from_matrix(2, vec![0, 1, 2, 0], 0, rng(0)).is_err());
        assert!(LatencyModel::from_matrix(2, vec![0, 1, 1, 0], 0, rng(0)).is_ok());
    }

    #[test]
    fn trace_csv_has_header() {
        let rec = TraceRecord {
            deliver_at: 5,
            processed_at: 6,
            sender: 0,
            recipient: 1,
            seq: 0,
            kind: "ball",
        };
        let mut buf = Vec::new();
        write_trace_csv(&[rec], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "deliver_at_ns,processed_at_ns,sender,recipient,seq,kind\n5,6,0,1,0,ball\n"
        );
    }
}
