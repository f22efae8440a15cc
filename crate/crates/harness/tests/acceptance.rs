//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

mod common;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::cmp::Reverse;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Mutex;
use std::time::Instant;

use cloudqos_core::codec::{decode, encode, SymbolBlock};
use cloudqos_core::control::{aggregate_gb_per_hour, deployment_cost, CostModel};
use cloudqos_core::event::{Action, FlushReason, ProtocolEvent, QueueId, TimerKind, Via};
use cloudqos_core::ingress::{CodingParams, IngressDc};
use cloudqos_core::packet::{BatchId, CodingKind, DataPacket, Markers, Packet, PacketSummary};
use cloudqos_core::simnet::{LinkSpec, LogEntry, LogEvent, LossModel, Network, Transmission};
use cloudqos_core::{FlowId, NodeId, Outbox, Seq, ServiceKind, SimDuration, SimTime};
use cloudqos_harness::config::{JitterConfig, LossConfig, PatternConfig, ServiceChoice};
use cloudqos_harness::feasibility::{feasibility_analysis, read_dataset};
use cloudqos_harness::whatif::{direct_trace, fec_whatif, parse_levels};
use cloudqos_harness::{run_scenario, RunOutput, ScenarioConfig};
use common::{cross_only, outage_four, star, Pair};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err(format!($($arg)+));
        }
    };
}

/// Every scenario run by the suite, with its metrics CSV, for the rerun check.
static RUNS: Mutex<Vec<(String, ScenarioConfig, String)>> = Mutex::new(Vec::new());

fn run(label: &str, cfg: &ScenarioConfig) -> Result<RunOutput, String> {
    let out = run_scenario(cfg).map_err(|e| format!("{label}: {e}"))?;
    RUNS.lock()
        .unwrap()
        .push((label.to_string(), cfg.clone(), out.report.to_csv_string()));
    Ok(out)
}

fn node_id(out: &RunOutput, name: &str) -> NodeId {
    *out.names.iter().find(|(_, n)| *n == name).expect("node").0
}

/// Seqs of `flow` whose copy on `from -> to` was dropped.
fn drops(log: &[LogEntry], from: NodeId, to: NodeId, flow: FlowId) -> BTreeSet<Seq> {
    log.iter()
        .filter_map(|e| match &e.event {
            LogEvent::Drop {
                from: f,
                to: t,
                packet: PacketSummary::Data { flow: fl, seq, .. },
                ..
            } if (*f, *t, *fl) == (from, to, flow) => Some(*seq),
            _ => None,
        })
        .collect()
}

fn recovered_deliveries(log: &[LogEntry]) -> BTreeMap<(FlowId, Seq), SimTime> {
    log.iter()
        .filter_map(|e| match &e.event {
            LogEvent::Proto {
                event:
                    ProtocolEvent::Delivered {
                        flow,
                        seq,
                        via: Via::Recovered { .. },
                        ..
                    },
                ..
            } => Some(((*flow, *seq), e.t)),
            _ => None,
        })
        .collect()
}

fn nacks(log: &[LogEntry]) -> Vec<(SimTime, FlowId, Vec<Seq>)> {
    log.iter()
        .filter_map(|e| match &e.event {
            LogEvent::Proto {
                event: ProtocolEvent::NackIssued { flow, seqs, .. },
                ..
            } => Some((e.t, *flow, seqs.clone())),
            _ => None,
        })
        .collect()
}

// 1 -------------------------------------------------------------------------

fn codec_mds() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut trials = 0u32;
    for k in 1..=10usize {
        for m in 1..=4usize {
            for _ in 0..1000 {
                let len = rng.random_range(1..=48);
                let data: Vec<Vec<u8>> = (0..k)
                    .map(|_| (0..len).map(|_| rng.random()).collect())
                    .collect();
                let parity = encode(&data, m).map_err(|e| e.to_string())?;
                let all: Vec<&Vec<u8>> = data.iter().chain(&parity).collect();
                let keep = rng.random_range(k..=k + m);
                let idx = sample(&mut rng, k + m, keep);
                let block = SymbolBlock::from_present(k, m, idx.iter().map(|i| (i, all[i].clone())))
                    .map_err(|e| e.to_string())?;
                let got = decode(&block).map_err(|e| format!("k={k} m={m}: {e}"))?;
                ensure!(got == data, "k={k} m={m} survivors {:?}: wrong data", idx.into_vec());
                trials += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!("{trials} erasure trials decoded bit-identical in {secs:.2}s"))
}

// 2 -------------------------------------------------------------------------

/// Three flows A, B, C to one DC2, queue capacity 3, two cross-stream
/// queues, 25 ms timers. Arrival times in ms. Stepping the pseudocode by
/// hand (per-flow round-robin cursors start at queue 0):
///
/// ```text
///  t  pkt  cursor  action
///  0  A0   q0      q0=[A0]            timer q0 @25
///  1  B0   q0      q0=[A0 B0]
///  2  C0   q0      q0 full -> batch 0
///  3  A1   q1      q1=[A1]            timer q1 @28
///  4  A2   q0      q0=[A2]            timer q0 @29
///  5  A3   q1 holds A, q0 holds A, back at q1: size 1 -> discard A1;
///                  q1=[A3]            timer q1 @30
///  6  B1   q1      q1=[A3 B1]
///  7  B2   q0      q0=[A2 B2]
///  8  B3   q1 holds B, q0 holds B, back at q1: size 2 -> batch 1;
///                  q1=[B3]            timer q1 @33
///  9  C1   q1      q1=[B3 C1]
/// 10  C2   q0      q0 full -> batch 2
/// 11  A4   q0      q0=[A4]            timer q0 @36
/// 33  timer q1     batch 3 over [B3 C1]
/// 36  timer q0     single packet -> discard A4
/// ```
fn algorithm_trace() -> Outcome {
    const D: NodeId = NodeId(9);
    let name = |f: FlowId, s: Seq| format!("{}{s}", ["A", "B", "C"][f.0 as usize]);
    let cov = |c: &[(FlowId, Seq)]| c.iter().map(|&(f, s)| name(f, s)).collect::<Vec<_>>().join(" ");
    let expected: Vec<String> = {
        let mut v = Vec::new();
        let mut batch = |t: u64, why: &str, q: usize, c: &str, b: u64| {
            v.push(format!("{t} flush {why} q{q} [{c}] -> batch {b}"));
            for i in 0..2 {
                v.push(format!("{t} coded batch {b} #{i}/2 [{c}] to {D}"));
            }
        };
        batch(2, "full", 0, "A0 B0 C0", 0);
        batch(8, "all_hold", 1, "A3 B1", 1);
        batch(10, "full", 0, "A2 B2 C2", 2);
        batch(33, "timer", 1, "B3 C1", 3);
        v.insert(3, "5 flush all_hold q1 [A1] -> discard".into());
        v.push("36 flush timer q0 [A4] -> discard".into());
        v
    };

    let params = CodingParams {
        k: 3,
        m_cross: 2,
        in_stream_block: 0,
        in_stream_parity: 0,
        queue_timeout: SimDuration::from_millis(25),
        cross_queues: 2,
    };
    let mut dc = IngressDc::new(NodeId(1), params).map_err(|e| e.to_string())?;
    for f in 0..3 {
        dc.assign_flow(FlowId(f), D).map_err(|e| e.to_string())?;
    }
    let trace = [
        (0, 0, 0),
        (1, 1, 0),
        (2, 2, 0),
        (3, 0, 1),
        (4, 0, 2),
        (5, 0, 3),
        (6, 1, 1),
        (7, 1, 2),
        (8, 1, 3),
        (9, 2, 1),
        (10, 2, 2),
        (11, 0, 4),
    ];
    let mut got = Vec::new();
    let mut timers: BinaryHeap<Reverse<(SimTime, u64, QueueId, u64)>> = BinaryHeap::new();
    let mut armed = 0u64;
    let mut collect = |t: SimTime, ob: &mut Outbox, timers: &mut BinaryHeap<_>| {
        let ms = t.0 / 1000;
        for a in ob.take() {
            match a {
                Action::Arm { at, timer } => {
                    if let TimerKind::Queue(q) = timer.kind {
                        timers.push(Reverse((at, armed, q, timer.epoch)));
                        armed += 1;
                    }
                }
                Action::Note(ProtocolEvent::QueueFlushed {
                    queue: QueueId::Cross { queue, .. },
                    reason,
                    coverage,
                    batch,
                    ..
                }) => {
                    let why = match reason {
                        FlushReason::Full => "full",
                        FlushReason::AllQueuesHold => "all_hold",
                        FlushReason::Timer => "timer",
                    };
                    let tail = batch.map_or("discard".to_string(), |b| format!("batch {}", b.serial));
                    got.push(format!("{ms} flush {why} q{queue} [{}] -> {tail}", cov(&coverage)));
                }
                Action::Send {
                    to,
                    packet: Packet::Coded(c),
                } => {
                    let c_ids: Vec<_> = c.coverage.iter().map(|e| (e.flow, e.seq)).collect();
                    got.push(format!(
                        "{ms} coded batch {} #{}/{} [{}] to {to}",
                        c.batch.serial,
                        c.parity_index,
                        c.parity_count,
                        cov(&c_ids)
                    ));
                }
                other => got.push(format!("{ms} unexpected {other:?}")),
            }
        }
    };
    let mut ob = Outbox::new();
    for &(t, f, s) in &trace {
        let now = SimTime::from_millis(t);
        let pkt = DataPacket {
            flow: FlowId(f),
            seq: s,
            sent_at: now,
            service: ServiceKind::Coding,
            markers: Markers::default(),
            payload: vec![f as u8 + 1; 20],
        };
        dc.dc1_process(now, pkt, &mut ob).map_err(|e| e.to_string())?;
        collect(now, &mut ob, &mut timers);
    }
    while let Some(Reverse((at, _, q, epoch))) = timers.pop() {
        dc.on_queue_timer(at, q, epoch, &mut ob);
        collect(at, &mut ob, &mut timers);
    }
    if got != expected {
        return Err(format!("emission mismatch\n  expected: {expected:#?}\n  got: {got:#?}"));
    }
    Ok(format!("{} emissions match the hand-stepped sequence", got.len()))
}

// 3 -------------------------------------------------------------------------

fn cost_reproduction() -> Outcome {
    let rate = aggregate_gb_per_hour(1.5, 150);
    let model = CostModel::default();
    let r = 1.0 / 15.0;
    let fwd = deployment_cost(ServiceKind::Forwarding, rate, r, 0.0, &model)
        .map_err(|e| e.to_string())?
        .upper;
    let coding = deployment_cost(ServiceKind::Coding, rate, r, 0.0, &model)
        .map_err(|e| e.to_string())?
        .upper;
    let cents = |v: f64| (v * 100.0).round() / 100.0;
    ensure!(cents(fwd) == 17.60, "forwarding ${fwd:.4}/h");
    ensure!(cents(coding) <= 1.17, "coding ${coding:.4}/h");
    let ratio = fwd / coding;
    ensure!((ratio - 15.0).abs() <= 0.1, "ratio {ratio}");
    Ok(format!(
        "forwarding ${fwd:.2}/h, coding ${coding:.4}/h (${:.2}), ratio {ratio:.2}",
        cents(coding)
    ))
}

// 4 -------------------------------------------------------------------------

/// Recovery completion minus detection for the single loss on flow 0.
fn recovery_after_detection(service: ServiceChoice) -> Result<(i64, i64), String> {
    // flow 0 requests; flows 1 and 2 are helpers 15 ms from DC2
    let mut pairs = vec![
        Pair::cbr(80.0, 10.0, 10.0, 20.0),
        Pair::cbr(80.0, 10.0, 15.0, 20.0),
        Pair::cbr(80.0, 10.0, 15.0, 20.0),
    ];
    pairs[0].loss = LossConfig::Outage {
        windows_ms: vec![[1000.0, 1000.5]],
    };
    let cfg = star(4, 2000.0, 60.0, service, cross_only(3, 2), &pairs);
    let out = run(&format!("analytic-{service:?}"), &cfg)?;
    let lost = drops(&out.log, node_id(&out, "s0"), node_id(&out, "r0"), FlowId(0));
    ensure!(lost.len() == 1, "expected one induced loss, got {lost:?}");
    let seq = *lost.iter().next().unwrap();
    let n = nacks(&out.log);
    ensure!(n.len() == 1, "expected one NACK, got {n:?}");
    let detect = n[0].0;
    let done = *recovered_deliveries(&out.log)
        .get(&(FlowId(0), seq))
        .ok_or(format!("{service:?}: seq {seq} never recovered"))?;
    Ok((done.0 as i64 - detect.0 as i64, detect.0 as i64))
}

fn analytic_latency() -> Outcome {
    let (dr, dr_helper) = (10_000i64, 15_000i64);
    let (caching, _) = recovery_after_detection(ServiceChoice::Caching)?;
    let (coding, _) = recovery_after_detection(ServiceChoice::Coding)?;
    let want_caching = 2 * dr;
    let want_coding = 2 * dr + 2 * dr_helper;
    ensure!(
        (caching - want_caching).abs() <= 1,
        "caching detection+{caching}us, expected +{want_caching}us"
    );
    ensure!(
        (coding - want_coding).abs() <= 1,
        "coding detection+{coding}us, expected +{want_coding}us"
    );
    Ok(format!(
        "caching detection+{:.3} ms, coding detection+{:.3} ms",
        caching as f64 / 1000.0,
        coding as f64 / 1000.0
    ))
}

// 5 -------------------------------------------------------------------------

fn outage_recovery() -> Outcome {
    let start = Instant::now();
    let cfg = outage_four(5, 2, None);
    let out = run("outage-m2", &cfg)?;
    let f0 = &out.report.flows[0];
    let window: Vec<Seq> = (1000..1200).collect();
    let lost = drops(&out.log, node_id(&out, "s0"), node_id(&out, "r0"), FlowId(0));
    ensure!(
        lost.iter().copied().eq(window.iter().copied()),
        "outage dropped {} packets, expected seqs 1000..1200",
        lost.len()
    );
    ensure!(
        f0.recovered_within_rtt == f0.lost && f0.lost == 200,
        "recovered {} of {} within RTT",
        f0.recovered_within_rtt,
        f0.lost
    );
    for f in &out.report.flows[1..] {
        ensure!(f.lost == 0, "{} lost {}", f.path, f.lost);
    }
    let trace = direct_trace(&out.log, &out.flows, &out.report);
    let outage_only: Vec<_> = trace.into_iter().filter(|r| r.flow == 0).collect();
    let levels = parse_levels("1/5,2/5,5/5").map_err(|e| e.to_string())?;
    let w = fec_whatif(&outage_only, &levels).map_err(|e| e.to_string())?;
    for l in &w.levels {
        ensure!(l.recovered == 0, "FEC {} recovered {} of {}", l.level, l.recovered, w.data_losses);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!(
        "coding recovered {}/{} within RTT; on-path FEC 0/{} at 1/5, 2/5, 5/5 ({secs:.1}s)",
        f0.recovered_within_rtt, f0.lost, w.data_losses
    ))
}

// 6 -------------------------------------------------------------------------

/// (single-loss batches, of which recovered within RTT).
fn single_loss_batches(m_cross: usize) -> Result<(usize, usize), String> {
    let cfg = outage_four(6, m_cross, Some(500.0));
    let out = run(&format!("straggler-m{m_cross}"), &cfg)?;
    let lost: BTreeSet<(FlowId, Seq)> = out
        .flows
        .iter()
        .flat_map(|f| {
            drops(&out.log, f.source, f.destination, f.flow)
                .into_iter()
                .map(move |s| (f.flow, s))
        })
        .collect();
    let recovered: BTreeSet<(FlowId, Seq)> = out
        .flows
        .iter()
        .flat_map(|f| {
            let m = out.report.flow(&f.label).unwrap();
            m.recovered_seqs().iter().map(move |&s| (f.flow, s)).collect::<Vec<_>>()
        })
        .collect();
    let mut singles = 0;
    let mut ok = 0;
    for e in &out.log {
        if let LogEvent::Proto {
            event:
                ProtocolEvent::QueueFlushed {
                    kind: CodingKind::CrossStream,
                    batch: Some(_),
                    coverage,
                    ..
                },
            ..
        } = &e.event
        {
            let hit: Vec<_> = coverage.iter().filter(|c| lost.contains(c)).collect();
            if hit.len() == 1 {
                singles += 1;
                ok += usize::from(recovered.contains(hit[0]));
            }
        }
    }
    Ok((singles, ok))
}

fn straggler_protection() -> Outcome {
    let (n2, ok2) = single_loss_batches(2)?;
    let (n1, ok1) = single_loss_batches(1)?;
    ensure!(n2 == 200 && n1 == 200, "expected 200 single-loss batches, got {n2} and {n1}");
    ensure!(ok2 == n2, "m_cross=2 recovered {ok2}/{n2}");
    ensure!(ok1 == 0, "m_cross=1 recovered {ok1}/{n1}");
    Ok(format!("m_cross=2 recovered {ok2}/{n2}, m_cross=1 recovered {ok1}/{n1}"))
}

// 7 -------------------------------------------------------------------------

fn burst_chain_stats() -> Outcome {
    let mut net = Network::new(77);
    let (a, b) = (NodeId(0), NodeId(1));
    net.add_link(LinkSpec::new(a, b, SimDuration::from_millis(30)).with_loss(LossModel::BurstChain {
        p_first: 0.01,
        p_subsequent: 0.5,
    }))
    .map_err(|e| e.to_string())?;
    let mut prev = false;
    let (mut n_ok, mut first, mut n_lost, mut next) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..1_000_000u64 {
        let lost = matches!(
            net.transmit(SimTime(i * 100), a, b, 100).map_err(|e| e.to_string())?,
            Transmission::Drop(_)
        );
        if i > 0 {
            if prev {
                n_lost += 1;
                next += u64::from(lost);
            } else {
                n_ok += 1;
                first += u64::from(lost);
            }
        }
        prev = lost;
    }
    let p1 = first as f64 / n_ok as f64;
    let p2 = next as f64 / n_lost as f64;
    ensure!((p1 - 0.01).abs() <= 0.002, "first-loss {p1:.4}");
    ensure!((p2 - 0.5).abs() <= 0.02, "subsequent-loss {p2:.4}");
    Ok(format!("first-loss {p1:.4}, subsequent-loss {p2:.4} over 10^6 packets"))
}

// 8 -------------------------------------------------------------------------

fn detector_hygiene() -> Outcome {
    let mut pair = Pair::cbr(80.0, 10.0, 10.0, 10.0);
    pair.jitter = JitterConfig::Uniform { j_ms: 3.0 };
    let duration = 1_000_000.0; // 10^5 packets at 10 ms
    let clean = star(8, duration, 60.0, ServiceChoice::Caching, cross_only(4, 2), &[pair.clone()]);
    let out = run("hygiene-clean", &clean)?;
    let sent = out.report.flows[0].sent;
    ensure!(sent == 100_000, "sent {sent}");
    let n = nacks(&out.log);
    ensure!(n.is_empty(), "{} NACKs on a lossless run, first {:?}", n.len(), n.first());

    pair.loss = LossConfig::Outage {
        windows_ms: vec![[500_000.0, 500_000.5]],
    };
    let gap = star(8, duration, 60.0, ServiceChoice::Caching, cross_only(4, 2), &[pair]);
    let out = run("hygiene-gap", &gap)?;
    let lost = drops(&out.log, node_id(&out, "s0"), node_id(&out, "r0"), FlowId(0));
    let n = nacks(&out.log);
    ensure!(lost.len() == 1, "induced {} losses", lost.len());
    ensure!(
        n.len() == 1 && n[0].2 == lost.iter().copied().collect::<Vec<_>>(),
        "gap produced NACKs {n:?} for loss {lost:?}"
    );
    Ok(format!("0 NACKs over {sent} jittered packets; 1 NACK for 1 gap"))
}

// 9 -------------------------------------------------------------------------

fn random_loss(rng: &mut ChaCha8Rng, duration: f64) -> LossConfig {
    let outage = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(1..=2);
        let mut windows = Vec::new();
        let mut t = 0.0;
        for _ in 0..n {
            t += rng.random_range(200.0..duration / 2.0);
            let len = rng.random_range(30.0..1500.0);
            windows.push([t, t + len]);
            t += len;
        }
        LossConfig::Outage { windows_ms: windows }
    };
    match rng.random_range(0..5) {
        0 => LossConfig::Bernoulli {
            p: rng.random_range(0.005..0.08),
        },
        1 => LossConfig::BurstChain {
            p_first: rng.random_range(0.005..0.05),
            p_subsequent: rng.random_range(0.2..0.7),
        },
        2 => outage(rng),
        3 => LossConfig::Composite {
            models: vec![
                LossConfig::Bernoulli {
                    p: rng.random_range(0.005..0.03),
                },
                outage(rng),
            ],
        },
        _ => LossConfig::Bernoulli { p: 0.0 },
    }
}

fn random_scenario(i: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37 + i);
    let n = rng.random_range(2..=5usize);
    let period = rng.random_range(10..=30) as f64;
    let per_flow = 5000 / n;
    let duration = per_flow as f64 * period;
    let pairs: Vec<Pair> = (0..n)
        .map(|_| {
            let mut p = Pair::cbr(
                rng.random_range(30..=120) as f64,
                rng.random_range(2..=30) as f64,
                rng.random_range(2..=30) as f64,
                period,
            );
            if rng.random_bool(0.3) {
                p.pattern = PatternConfig::OnOff {
                    on_ms: rng.random_range(200..=1500) as f64,
                    off_mean_ms: rng.random_range(100..=600) as f64,
                    period_ms: period,
                };
            }
            p.start_ms = rng.random_range(0..=3) as f64 * period / 4.0;
            p.loss = random_loss(&mut rng, duration);
            p
        })
        .collect();
    let k = rng.random_range(2..=5usize);
    let mut coding = cross_only(k, rng.random_range(1..k));
    coding.cross_queues = rng.random_range(1..=3);
    coding.queue_timeout_ms = rng.random_range(5..=40) as f64;
    let x = rng.random_range(10..=80) as f64;
    let mut cfg = star(i, duration, x, ServiceChoice::Coding, coding, &pairs);
    if rng.random_bool(0.4) {
        cfg.egress.ttl_ms = Some(rng.random_range(60..=400) as f64);
    }
    cfg
}

struct OBatch {
    coverage: Vec<(FlowId, Seq)>,
    stored_at: SimTime,
    symbols: BTreeSet<u8>,
    decoded: bool,
}

struct OTicket {
    missing: BTreeMap<usize, Vec<SimTime>>,
    solicited: BTreeSet<usize>,
    responses: BTreeSet<usize>,
    deadline: SimTime,
    /// Log index of the arrival whose handler armed the current deadline.
    armed_at: usize,
}

/// Brute-force replay of everything that reaches DC2, deciding for every
/// NACKed packet whether its cross-stream batch becomes decodable (stored
/// parities plus helper responses reaching `k_eff`) while some requester can
/// still use it.
struct Oracle {
    ttl: SimDuration,
    ret: BTreeMap<FlowId, SimDuration>,
    batches: BTreeMap<BatchId, OBatch>,
    tickets: BTreeMap<BatchId, OTicket>,
    nacked: BTreeSet<(FlowId, Seq)>,
    sent: BTreeSet<(FlowId, Seq)>,
}

impl Oracle {
    fn covering(&self, key: (FlowId, Seq)) -> Option<BatchId> {
        self.batches
            .iter()
            .find(|(_, b)| b.coverage.contains(&key))
            .map(|(id, _)| *id)
    }

    fn housekeeping(&mut self, now: SimTime) {
        let tickets = &self.tickets;
        let ttl = self.ttl;
        self.batches
            .retain(|id, b| tickets.contains_key(id) || now.since(b.stored_at) < ttl);
    }

    fn try_decode(&mut self, now: SimTime, id: BatchId) {
        let (Some(t), Some(b)) = (self.tickets.get(&id), self.batches.get_mut(&id)) else {
            return;
        };
        if t.responses.len() + b.symbols.len() < b.coverage.len() {
            return;
        }
        b.decoded = true;
        let t = self.tickets.remove(&id).unwrap();
        for (pos, deadlines) in t.missing {
            if deadlines.iter().any(|&d| now <= d) {
                self.sent.insert(b.coverage[pos]);
            }
        }
    }

    fn coded(&mut self, now: SimTime, id: BatchId, coverage: &[(FlowId, Seq)], idx: u8) {
        self.housekeeping(now);
        let b = self.batches.entry(id).or_insert_with(|| OBatch {
            coverage: coverage.to_vec(),
            stored_at: now,
            symbols: BTreeSet::new(),
            decoded: false,
        });
        b.symbols.insert(idx);
        self.try_decode(now, id);
    }

    fn nack(&mut self, now: SimTime, at: usize, flow: FlowId, seqs: &[Seq], deadline: SimTime) {
        self.housekeeping(now);
        let deliver_by = deadline
            .saturating_sub(self.ret[&flow])
            .max(now + SimDuration(1));
        for &seq in seqs {
            self.nacked.insert((flow, seq));
            let Some(id) = self.covering((flow, seq)) else {
                continue;
            };
            let b = &self.batches[&id];
            let pos = b.coverage.iter().position(|c| *c == (flow, seq)).unwrap();
            if b.decoded {
                self.sent.insert((flow, seq));
                continue;
            }
            match self.tickets.get_mut(&id) {
                Some(t) => {
                    t.missing.entry(pos).or_default().push(deliver_by);
                    t.solicited.remove(&pos);
                    t.responses.remove(&pos);
                    if deliver_by > t.deadline {
                        t.deadline = deliver_by;
                        t.armed_at = at;
                    }
                }
                None => {
                    let solicited = (0..b.coverage.len())
                        .filter(|&i| i != pos && !self.nacked.contains(&b.coverage[i]))
                        .collect();
                    self.tickets.insert(
                        id,
                        OTicket {
                            missing: BTreeMap::from([(pos, vec![deliver_by])]),
                            solicited,
                            responses: BTreeSet::new(),
                            deadline: deliver_by,
                            armed_at: at,
                        },
                    );
                }
            }
            self.try_decode(now, id);
        }
    }

    fn response(&mut self, now: SimTime, id: BatchId, key: (FlowId, Seq)) {
        self.housekeeping(now);
        let Some(b) = self.batches.get(&id) else {
            return;
        };
        let Some(pos) = b.coverage.iter().position(|c| *c == key) else {
            return;
        };
        if let Some(t) = self.tickets.get_mut(&id) {
            if t.solicited.contains(&pos) {
                t.responses.insert(pos);
                self.try_decode(now, id);
            }
        }
    }

    /// Expires every ticket whose timer is due before an event at `t`
    /// scheduled from log index `sched`.
    fn expire_before(&mut self, t: SimTime, sched: usize) {
        loop {
            let due = self
                .tickets
                .iter()
                .map(|(id, tk)| (tk.deadline, tk.armed_at, *id))
                .filter(|&(d, a, _)| d < t || (d == t && a < sched))
                .min();
            let Some((d, _, id)) = due else {
                return;
            };
            self.tickets.remove(&id);
            self.housekeeping(d);
        }
    }
}

/// Returns (predicted, reported) recovered sets and the number of NACKs.
fn oracle_check(cfg: &ScenarioConfig, out: &RunOutput) -> Result<(usize, usize), String> {
    let dc2 = node_id(out, "dc2");
    let ms = SimDuration::from_millis_f64;
    let ret: BTreeMap<FlowId, SimDuration> = cfg
        .flows
        .iter()
        .map(|f| (FlowId(f.id), ms(cfg.link("dc2", &f.destination).unwrap().latency_ms)))
        .collect();
    let max_rtt = out.flows.iter().map(|f| f.rtt).max().unwrap();
    let mut o = Oracle {
        ttl: cfg.egress.ttl_ms.map(ms).unwrap_or(max_rtt.times(2)),
        ret,
        batches: BTreeMap::new(),
        tickets: BTreeMap::new(),
        nacked: BTreeSet::new(),
        sent: BTreeSet::new(),
    };

    // Links are jitter-free, hence FIFO: pair every arrival at DC2 with the
    // transmit that scheduled it.
    let mut in_flight: BTreeMap<NodeId, VecDeque<usize>> = BTreeMap::new();
    let log = &out.log;
    let mut n_nacks = 0;
    for (i, e) in log.iter().enumerate() {
        match &e.event {
            LogEvent::Transmit { from, to, packet, .. } if *to == dc2 => {
                let dropped = matches!(log.get(i + 1).map(|n| &n.event),
                    Some(LogEvent::Drop { from: f, to: t, packet: p, .. }) if f == from && t == to && p == packet);
                if !dropped {
                    in_flight.entry(*from).or_default().push_back(i);
                }
            }
            LogEvent::Arrive { from, to, packet } if *to == dc2 => {
                let sched = in_flight
                    .get_mut(from)
                    .and_then(VecDeque::pop_front)
                    .ok_or(format!("arrival at index {i} without a transmit"))?;
                match &log[sched].event {
                    LogEvent::Transmit { packet: p, .. } if p == packet => {}
                    other => return Err(format!("arrival {i} paired with {other:?}")),
                }
                o.expire_before(e.t, sched);
                match packet {
                    PacketSummary::Coded {
                        batch,
                        kind,
                        parity_index,
                        coverage,
                    } => {
                        ensure!(*kind == CodingKind::CrossStream, "in-stream batch at DC2");
                        o.coded(e.t, *batch, coverage, *parity_index);
                    }
                    PacketSummary::Nack {
                        flow,
                        seqs,
                        deadline,
                        escalate,
                    } => {
                        ensure!(!escalate, "escalated NACK");
                        n_nacks += 1;
                        o.nack(e.t, i, *flow, seqs, *deadline);
                    }
                    PacketSummary::CoopResponse { batch, flow, seq } => o.response(e.t, *batch, (*flow, *seq)),
                    _ => {}
                }
            }
            _ => {}
        }
    }

    let dropped: BTreeSet<(FlowId, Seq)> = out
        .flows
        .iter()
        .flat_map(|f| {
            drops(log, f.source, f.destination, f.flow)
                .into_iter()
                .map(move |s| (f.flow, s))
        })
        .collect();
    let sent_by_dc2: BTreeSet<(FlowId, Seq)> = log
        .iter()
        .filter_map(|e| match &e.event {
            LogEvent::Transmit {
                from,
                packet: PacketSummary::Recovered { flow, seq, .. },
                ..
            } if *from == dc2 => Some((*flow, *seq)),
            _ => None,
        })
        .collect();
    ensure!(
        o.sent == sent_by_dc2,
        "DC2 sends differ: oracle-only {:?}, system-only {:?}",
        o.sent.difference(&sent_by_dc2).take(5).collect::<Vec<_>>(),
        sent_by_dc2.difference(&o.sent).take(5).collect::<Vec<_>>()
    );
    let predicted: BTreeSet<_> = o.sent.intersection(&dropped).copied().collect();
    let reported: BTreeSet<_> = recovered_deliveries(log).into_keys().collect();
    ensure!(
        predicted == reported,
        "recovered sets differ: oracle-only {:?}, system-only {:?}",
        predicted.difference(&reported).take(5).collect::<Vec<_>>(),
        reported.difference(&predicted).take(5).collect::<Vec<_>>()
    );
    let _ = n_nacks;
    Ok((reported.len(), dropped.len()))
}

fn oracle_equivalence() -> Outcome {
    let (mut recovered, mut lost, mut packets) = (0, 0, 0u64);
    for i in 0..50 {
        let cfg = random_scenario(i);
        let out = run(&format!("oracle-{i}"), &cfg)?;
        packets += out.report.aggregate.sent;
        ensure!(out.report.aggregate.sent <= 5000, "scenario {i} sent {}", out.report.aggregate.sent);
        let (r, l) = oracle_check(&cfg, &out).map_err(|e| format!("scenario {i}: {e}"))?;
        recovered += r;
        lost += l;
    }
    ensure!(recovered > 0 && recovered < lost, "degenerate sample: {recovered}/{lost}");
    Ok(format!(
        "50 scenarios, {packets} packets: {recovered} of {lost} losses recovered, sets identical"
    ))
}

// 10 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let runs = std::mem::take(&mut *RUNS.lock().unwrap());
    ensure!(!runs.is_empty(), "no scenarios recorded");
    for (label, cfg, csv) in &runs {
        let again = run_scenario(cfg).map_err(|e| e.to_string())?;
        ensure!(again.report.to_csv_string() == *csv, "{label}: metrics CSV differs on rerun");
    }
    Ok(format!("{} scenarios rerun with byte-identical metrics CSVs", runs.len()))
}

// 11 ------------------------------------------------------------------------

fn feasibility() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let regions = ["na-eu", "na-asia", "eu-asia", "intra-na"];
    let mut rows = Vec::new();
    for i in 0..1000 {
        let region = regions[i % regions.len()];
        let scale = 1.0 + (i % regions.len()) as f64;
        let ds = rng.random_range(1.0..20.0);
        let dr = rng.random_range(1.0..20.0);
        let x = rng.random_range(10.0..60.0) * scale;
        let y = x * rng.random_range(0.9..1.6);
        let helpers: Vec<f64> = (0..5).map(|_| rng.random_range(1.0..25.0)).collect();
        rows.push((format!("p{i}"), region, ds, dr, x, y, helpers));
    }
    let to_csv = |rows: &[(String, &str, f64, f64, f64, f64, Vec<f64>)]| {
        let mut s = String::from("path_id,region_pair,delta_s_dc1,delta_r_dc2,x,y,helper_1,helper_2,helper_3,helper_4,helper_5\n");
        for (id, region, ds, dr, x, y, h) in rows {
            s += &format!("{id},{region},{ds},{dr},{x},{y},{},{},{},{},{}\n", h[0], h[1], h[2], h[3], h[4]);
        }
        s
    };
    let (budget, delta) = (150.0, 5.0);
    let parsed = read_dataset(to_csv(&rows).as_bytes(), delta).map_err(|e| e.to_string())?;
    let rep = feasibility_analysis(&parsed, budget);

    // direct recomputation
    let mut counts: BTreeMap<String, [usize; 4]> = BTreeMap::new();
    for (_, region, ds, dr, x, y, h) in &rows {
        let helper = h.iter().copied().fold(f64::MIN, f64::max);
        let within = [
            x + ds + dr <= budget,
            y + 2.0 * dr + delta <= budget,
            y + 2.0 * dr + 2.0 * helper + delta <= budget,
        ];
        for key in [region.to_string(), "all".to_string()] {
            let c = counts.entry(key).or_default();
            c[3] += 1;
            for (j, w) in within.iter().enumerate() {
                c[j] += usize::from(*w);
            }
        }
    }
    for (region, c) in &counts {
        for (j, name) in ["forwarding", "caching", "coding"].iter().enumerate() {
            let want = c[j] as f64 / c[3] as f64;
            let got = rep.within_budget[region][*name];
            ensure!((got - want).abs() <= 1e-12, "{region}/{name}: {got} vs {want}");
        }
    }

    // shift every y; forwarding must not move
    let shifted: Vec<_> = rows
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.5 += rng.random_range(1.0..300.0);
            r
        })
        .collect();
    let rep2 = feasibility_analysis(
        &read_dataset(to_csv(&shifted).as_bytes(), delta).map_err(|e| e.to_string())?,
        budget,
    );
    for (a, b) in rep.rows.iter().zip(&rep2.rows) {
        ensure!(a.forwarding.to_bits() == b.forwarding.to_bits(), "{} forwarding moved with y", a.path_id);
    }
    ensure!(rep.cdf["forwarding"] == rep2.cdf["forwarding"], "forwarding CDF moved with y");
    ensure!(rep.cdf["caching"] != rep2.cdf["caching"], "caching CDF ignored y");
    let all = &rep.within_budget["all"];
    Ok(format!(
        "1000 rows match recomputation (all: fwd {:.3}, cache {:.3}, coding {:.3}); forwarding unchanged under y shifts",
        all["forwarding"], all["caching"], all["coding"]
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("codec MDS property", codec_mds),
        ("coding algorithm trace conformance", algorithm_trace),
        ("deployment cost reproduction", cost_reproduction),
        ("analytic recovery latency", analytic_latency),
        ("outage recovery vs on-path FEC", outage_recovery),
        ("straggler protection", straggler_protection),
        ("burst-chain statistics", burst_chain_stats),
        ("loss-detector hygiene", detector_hygiene),
        ("recoverability oracle equivalence", oracle_equivalence),
        ("determinism", determinism),
        ("feasibility analyzer", feasibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS {:>2} {name} [{secs:.1}s]: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{secs:.1}s]: {why}", i + 1);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
