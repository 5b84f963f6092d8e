use std::sync::Arc;

use dpsa::data::{synth, Dataset, SynthConfig};
use dpsa::group_crypto::generate_group;
use dpsa::protocol::{
    plaintext_fedavg, simulate, NeighborMode, ProtocolConfig, Simulation, TimingMode,
};
use dpsa::secure_agg::ClientId;

fn data(rows: usize, features: usize, seed: u64) -> Arc<Dataset> {
    let mut s = SynthConfig::new(rows, 0.02, seed);
    s.features = features;
    Arc::new(synth(&s).unwrap())
}

fn config(n: usize, mode: NeighborMode) -> ProtocolConfig {
    let mut cfg = ProtocolConfig::new(n, generate_group(128, true).unwrap());
    cfg.iterations = 3;
    cfg.local_rows = 60;
    cfg.train.local_iterations = 25;
    cfg.neighborhood = mode;
    cfg.seed = 77;
    cfg
}

/// Per word, `Σ y_i − Σ (enc(w_i) + enc(η_i))` over one round.
fn residual_masks(sim: &Simulation, t: usize) -> Vec<u64> {
    let round = &sim.server.rounds()[t];
    let len = round[0].words.len();
    let mut acc = vec![0u64; len];
    for (msg, client) in round.iter().zip(&sim.clients) {
        let r = &client.records()[t];
        for k in 0..len {
            acc[k] = acc[k]
                .wrapping_add(msg.words[k])
                .wrapping_sub(r.encoded[k])
                .wrapping_sub(r.noise_words[k]);
        }
    }
    acc
}

#[test]
fn masks_cancel_in_both_neighborhood_modes() {
    for mode in [NeighborMode::Full, NeighborMode::LogN] {
        for n in [2, 5, 17] {
            let mut cfg = config(n, mode);
            cfg.epsilon = Some(0.3);
            let sim = simulate(&cfg, data(500, 4, 1)).unwrap();
            for t in 0..3 {
                assert!(residual_masks(&sim, t).iter().all(|&w| w == 0), "{mode} n={n} t={t}");
            }
        }
    }
}

#[test]
fn noisy_run_tracks_the_oracle_with_identical_noise() {
    let mut cfg = config(6, NeighborMode::Full);
    cfg.epsilon = Some(0.5);
    let d = data(600, 4, 2);
    let sim = simulate(&cfg, Arc::clone(&d)).unwrap();
    let oracle = plaintext_fedavg(&cfg, &d).unwrap();
    let tol = 6.0 * 3.0 * sim.codec.resolution();
    for (a, b) in sim.final_model().as_slice().iter().zip(oracle.last().unwrap().as_slice()) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }
}

#[test]
fn key_exchange_happens_once() {
    for mode in [NeighborMode::Full, NeighborMode::LogN] {
        let sim = simulate(&config(12, mode), data(500, 3, 3)).unwrap();
        let degrees: usize = (0..12).map(|c| sim.graph.degree(c)).sum();
        let audit = sim.server.audit();
        assert_eq!(audit.public_keys, degrees);
        assert_eq!(audit.forwarded, degrees);
        assert_eq!(audit.late_keys, 0);
        assert_eq!(audit.masked_vectors, 12 * 3);
    }
}

#[test]
fn server_never_sees_plain_weights_or_pair_keys() {
    let mut cfg = config(5, NeighborMode::Full);
    cfg.epsilon = Some(1.0);
    cfg.record_trace = true;
    let sim = simulate(&cfg, data(500, 4, 4)).unwrap();
    for kind in sim.trace.iter().filter(|r| r.recipient == 0).map(|r| r.kind) {
        assert!(kind == "public_key" || kind == "masked_vector", "server received {kind}");
    }
    for (t, round) in sim.server.rounds().iter().enumerate() {
        for msg in round {
            let r = &sim.clients[msg.client_id as usize].records()[t];
            for (k, &w) in msg.words.iter().enumerate() {
                assert_ne!(w, r.encoded[k]);
                assert_ne!(w, r.encoded[k].wrapping_add(r.noise_words[k]));
            }
        }
    }
}

#[test]
fn fixed_mode_is_bit_reproducible() {
    let cfg = config(8, NeighborMode::LogN);
    let a = simulate(&cfg, data(500, 4, 5)).unwrap();
    let b = simulate(&cfg, data(500, 4, 5)).unwrap();
    assert_eq!(a.summary, b.summary);
    assert_eq!(a.server.models(), b.server.models());
    let mut other = cfg.clone();
    other.seed += 1;
    let c = simulate(&other, data(500, 4, 5)).unwrap();
    assert_ne!(a.summary.trace_hash, c.summary.trace_hash);
}

#[test]
fn measured_mode_changes_timing_but_not_models() {
    let mut cfg = config(4, NeighborMode::Full);
    cfg.timing = TimingMode::Measured;
    let a = simulate(&cfg, data(500, 4, 6)).unwrap();
    let b = simulate(&cfg, data(500, 4, 6)).unwrap();
    assert_eq!(a.server.models(), b.server.models());
    assert!(a.clients.iter().all(|c| c.timing().training_ns.iter().all(|&ns| ns > 0)));
}

#[test]
fn five_hundred_clients_finish_thirty_iterations() {
    let mut cfg = config(500, NeighborMode::LogN);
    cfg.iterations = 30;
    cfg.local_rows = 10;
    cfg.train.local_iterations = 2;
    let sim = simulate(&cfg, data(400, 2, 7)).unwrap();
    assert_eq!(sim.server.models().len(), 30);
    assert!(sim.summary.quiescent);
    assert!(sim.summary.events < cfg.max_events);
}

#[test]
fn clients_never_see_holdout_rows() {
    let full = synth(&SynthConfig::new(2_000, 0.01, 8)).unwrap();
    let (train, test) = dpsa::data::split(&full, &Default::default()).unwrap();
    for c in 0..4 as ClientId {
        for t in 0..5 {
            let local = dpsa::data::sample_local(&train, c, t, 8, 300, false).unwrap();
            assert!(dpsa::data::disjoint(&local.data, &test));
        }
    }
}
