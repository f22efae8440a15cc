//! Metrics computed from a simulator event log.
//!
//! Every sent packet lands in exactly one class: delivered on the direct
//! path, delivered over the overlay, recovered, lost for good, or still in
//! flight when the run ended. A packet is *lost* when its primary copy was
//! dropped (the direct copy, or the overlay copy for pure forwarding); it is
//! *recovered* when a non-direct copy reached the receiver no later than one
//! direct-path RTT after its expected arrival.
//!
//! CSV output has the frozen header `path,service,metric,value`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use cloudqos_core::control::CALIBRATED_EGRESS_PRICE;
use cloudqos_core::event::{NackCause, Via};
use cloudqos_core::packet::PacketSummary;
use cloudqos_core::simnet::{LogEntry, LogEvent};
use cloudqos_core::{FlowId, NodeId, ProtocolEvent, Seq, SimTime};
use serde::Serialize;

use crate::config::Role;
use crate::scenario::FlowInfo;

pub const CSV_HEADER: [&str; 4] = ["path", "service", "metric", "value"];

/// Loss-episode histogram: Random = 1 drop, MultiPacket = 2..=14,
/// Outage > 14.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Histogram {
    pub random: u64,
    pub multi_packet: u64,
    pub outage: u64,
}

impl Histogram {
    pub fn add_episode(&mut self, len: u64) {
        match len {
            0 => {}
            1 => self.random += 1,
            2..=14 => self.multi_packet += 1,
            _ => self.outage += 1,
        }
    }

    pub fn episodes(&self) -> u64 {
        self.random + self.multi_packet + self.outage
    }

    pub fn is_empty(&self) -> bool {
        self.episodes() == 0
    }

    fn merge(&mut self, o: &Histogram) {
        self.random += o.random;
        self.multi_packet += o.multi_packet;
        self.outage += o.outage;
    }
}

/// Maximal runs of consecutive dropped seqs.
pub fn episodes_of(drops: &BTreeSet<Seq>) -> Vec<(Seq, u64)> {
    let mut out: Vec<(Seq, u64)> = Vec::new();
    for &s in drops {
        match out.last_mut() {
            Some((start, len)) if *start + *len == s => *len += 1,
            _ => out.push((s, 1)),
        }
    }
    out
}

/// Drops of data packets on each flow's direct path, bucketed into
/// episodes.
pub fn classify_episodes(
    log: &[LogEntry],
    direct: &BTreeMap<FlowId, (NodeId, NodeId)>,
) -> BTreeMap<FlowId, Histogram> {
    let drops = direct_drops(log, direct);
    direct
        .keys()
        .map(|&f| {
            let mut h = Histogram::default();
            if let Some(d) = drops.get(&f) {
                for (_, len) in episodes_of(d) {
                    h.add_episode(len);
                }
            }
            (f, h)
        })
        .collect()
}

fn direct_drops(
    log: &[LogEntry],
    direct: &BTreeMap<FlowId, (NodeId, NodeId)>,
) -> BTreeMap<FlowId, BTreeSet<Seq>> {
    let mut drops: BTreeMap<FlowId, BTreeSet<Seq>> = BTreeMap::new();
    for e in log {
        if let LogEvent::Drop {
            from,
            to,
            packet: PacketSummary::Data { flow, seq, .. },
            ..
        } = &e.event
        {
            if direct.get(flow) == Some(&(*from, *to)) {
                drops.entry(*flow).or_default().insert(*seq);
            }
        }
    }
    drops
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Quantiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

fn quantiles(v: &[f64]) -> Option<Quantiles> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let q = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
    Some(Quantiles {
        p50: q(0.5),
        p90: q(0.9),
        p99: q(0.99),
        max: s[s.len() - 1],
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FlowMetrics {
    pub path: String,
    pub service: String,
    pub sent: u64,
    pub delivered_direct: u64,
    pub delivered_overlay: u64,
    pub recovered: u64,
    pub unrecovered_lost: u64,
    pub in_flight: u64,
    /// Primary copy dropped.
    pub lost: u64,
    pub recovered_within_rtt: u64,
    /// `lost - recovered_within_rtt`, late recoveries included.
    pub unrecovered: u64,
    pub loss_rate: f64,
    pub recovered_fraction: Option<f64>,
    pub unrecovered_fraction: Option<f64>,
    /// Recovery time divided by the direct-path RTT.
    pub recovery_ratio: Option<Quantiles>,
    pub episodes: Histogram,
    pub nacks: u64,
    /// NACKs for packets whose primary copy was not dropped.
    pub spurious_nacks: u64,
    #[serde(skip)]
    ratios: Vec<f64>,
    #[serde(skip)]
    recovered_set: BTreeSet<Seq>,
}

impl FlowMetrics {
    fn finish(&mut self) {
        self.unrecovered = self.lost - self.recovered_within_rtt;
        self.loss_rate = if self.sent == 0 {
            0.0
        } else {
            self.lost as f64 / self.sent as f64
        };
        if self.lost > 0 {
            self.recovered_fraction = Some(self.recovered_within_rtt as f64 / self.lost as f64);
            self.unrecovered_fraction = Some(self.unrecovered as f64 / self.lost as f64);
        }
        self.recovery_ratio = quantiles(&self.ratios);
    }

    /// Seqs counted in `recovered_within_rtt`.
    pub fn recovered_seqs(&self) -> &BTreeSet<Seq> {
        &self.recovered_set
    }

    pub fn recovery_ratios(&self) -> &[f64] {
        &self.ratios
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkUsage {
    pub bytes: u64,
    pub packets: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostSummary {
    /// Bytes leaving each DC.
    pub dc_egress_bytes: BTreeMap<String, u64>,
    pub egress_price_per_gb: f64,
    pub egress_cost_per_hour: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub duration_s: f64,
    pub flows: Vec<FlowMetrics>,
    pub aggregate: FlowMetrics,
    pub links: BTreeMap<String, LinkUsage>,
    pub cost: CostSummary,
}

#[derive(Default)]
struct FlowTrack {
    sent: BTreeMap<Seq, SimTime>,
    primary_dropped: BTreeSet<Seq>,
    first_delivery: BTreeMap<Seq, (SimTime, Via)>,
    nacked: Vec<Seq>,
}

/// Computes the report. `end` is the last time traffic could be generated;
/// packets whose recovery window extends past the last logged event are
/// counted as in flight.
pub fn compute(
    log: &[LogEntry],
    flows: &[FlowInfo],
    names: &BTreeMap<NodeId, String>,
    roles: &BTreeMap<NodeId, Role>,
    end: SimTime,
) -> MetricsReport {
    let by_flow: BTreeMap<FlowId, &FlowInfo> = flows.iter().map(|f| (f.flow, f)).collect();
    let overlay = |f: &FlowInfo, from: NodeId, to: NodeId| {
        [(f.source, f.ingress), (f.ingress, f.egress), (f.egress, f.destination)].contains(&(from, to))
    };
    let name = |n: &NodeId| names.get(n).cloned().unwrap_or_else(|| n.to_string());

    let mut track: BTreeMap<FlowId, FlowTrack> = flows.iter().map(|f| (f.flow, FlowTrack::default())).collect();
    let mut links: BTreeMap<String, LinkUsage> = BTreeMap::new();
    let mut dc_bytes: BTreeMap<String, u64> = BTreeMap::new();
    for (n, r) in roles {
        if *r != Role::Host {
            dc_bytes.insert(name(n), 0);
        }
    }
    let last = log.last().map_or(end, |e| e.t.max(end));

    for e in log {
        match &e.event {
            LogEvent::AppSend { flow, seq, .. } => {
                if let Some(t) = track.get_mut(flow) {
                    t.sent.insert(*seq, e.t);
                }
            }
            LogEvent::Transmit {
                from, to, bytes, ..
            } => {
                let u = links.entry(format!("{}->{}", name(from), name(to))).or_default();
                u.bytes += *bytes as u64;
                u.packets += 1;
                if roles.get(from).is_some_and(|r| *r != Role::Host) {
                    *dc_bytes.entry(name(from)).or_default() += *bytes as u64;
                }
            }
            LogEvent::Drop {
                from, to, packet, ..
            } => {
                links.entry(format!("{}->{}", name(from), name(to))).or_default().dropped += 1;
                if let PacketSummary::Data { flow, seq, .. } = packet {
                    let (Some(f), Some(t)) = (by_flow.get(flow), track.get_mut(flow)) else {
                        continue;
                    };
                    let primary = if f.direct_copy {
                        (*from, *to) == (f.source, f.destination)
                    } else {
                        overlay(f, *from, *to)
                    };
                    if primary {
                        t.primary_dropped.insert(*seq);
                    }
                }
            }
            LogEvent::Proto { node, event } => match event {
                ProtocolEvent::Delivered { flow, seq, via, .. } => {
                    if let (Some(f), Some(t)) = (by_flow.get(flow), track.get_mut(flow)) {
                        if *node == f.destination {
                            t.first_delivery.entry(*seq).or_insert((e.t, *via));
                        }
                    }
                }
                ProtocolEvent::NackIssued { flow, seqs, cause, .. } if *cause != NackCause::Escalation => {
                    if let Some(t) = track.get_mut(flow) {
                        t.nacked.extend(seqs);
                    }
                }
                _ => {}
            },
            LogEvent::Arrive { .. } => {}
        }
    }

    let mut out = Vec::new();
    let mut agg = FlowMetrics {
        path: "all".into(),
        ..FlowMetrics::default()
    };
    let services: BTreeSet<_> = flows.iter().map(|f| f.service.name()).collect();
    agg.service = services.into_iter().collect::<Vec<_>>().join("+");
    let direct: BTreeMap<FlowId, (NodeId, NodeId)> = flows
        .iter()
        .filter(|f| f.direct_copy)
        .map(|f| (f.flow, (f.source, f.destination)))
        .collect();
    let episodes = classify_episodes(log, &direct);

    for f in flows {
        let t = &track[&f.flow];
        let mut m = FlowMetrics {
            path: f.label.clone(),
            service: f.service.name().to_string(),
            sent: t.sent.len() as u64,
            episodes: episodes.get(&f.flow).copied().unwrap_or_default(),
            ..FlowMetrics::default()
        };
        let horizon = f.latencies.y + f.rtt.times(2);
        for (&seq, &sent_at) in &t.sent {
            match t.first_delivery.get(&seq) {
                Some((_, Via::Direct)) => m.delivered_direct += 1,
                Some((_, Via::Overlay)) => m.delivered_overlay += 1,
                Some((_, Via::Recovered { .. })) => m.recovered += 1,
                None if sent_at + horizon > last => m.in_flight += 1,
                None => m.unrecovered_lost += 1,
            }
            if t.primary_dropped.contains(&seq) {
                m.lost += 1;
                if let Some(&(at, via)) = t.first_delivery.get(&seq) {
                    if via != Via::Direct {
                        let expected = sent_at + f.latencies.y;
                        let rt = at.since(expected);
                        let ratio = rt.as_micros() as f64 / f.rtt.as_micros().max(1) as f64;
                        m.ratios.push(ratio);
                        if rt <= f.rtt {
                            m.recovered_within_rtt += 1;
                            m.recovered_set.insert(seq);
                        }
                    }
                }
            }
        }
        m.nacks = t.nacked.len() as u64;
        m.spurious_nacks = t
            .nacked
            .iter()
            .filter(|s| !t.primary_dropped.contains(s))
            .count() as u64;
        m.finish();

        agg.sent += m.sent;
        agg.delivered_direct += m.delivered_direct;
        agg.delivered_overlay += m.delivered_overlay;
        agg.recovered += m.recovered;
        agg.unrecovered_lost += m.unrecovered_lost;
        agg.in_flight += m.in_flight;
        agg.lost += m.lost;
        agg.recovered_within_rtt += m.recovered_within_rtt;
        agg.nacks += m.nacks;
        agg.spurious_nacks += m.spurious_nacks;
        agg.ratios.extend_from_slice(&m.ratios);
        agg.episodes.merge(&m.episodes);
        out.push(m);
    }
    agg.finish();

    let duration_s = end.as_micros() as f64 / 1e6;
    let total: u64 = dc_bytes.values().sum();
    let cost_per_hour = if duration_s > 0.0 {
        total as f64 / 1e9 * CALIBRATED_EGRESS_PRICE * 3600.0 / duration_s
    } else {
        0.0
    };
    MetricsReport {
        duration_s,
        flows: out,
        aggregate: agg,
        links,
        cost: CostSummary {
            dc_egress_bytes: dc_bytes,
            egress_price_per_gb: CALIBRATED_EGRESS_PRICE,
            egress_cost_per_hour: cost_per_hour,
        },
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

fn flow_rows(m: &FlowMetrics, rows: &mut Vec<[String; 4]>) {
    let mut push = |metric: &str, value: String| {
        rows.push([m.path.clone(), m.service.clone(), metric.to_string(), value]);
    };
    for (k, v) in [
        ("sent", m.sent),
        ("delivered_direct", m.delivered_direct),
        ("delivered_overlay", m.delivered_overlay),
        ("recovered", m.recovered),
        ("unrecovered_lost", m.unrecovered_lost),
        ("in_flight", m.in_flight),
        ("lost", m.lost),
        ("recovered_within_rtt", m.recovered_within_rtt),
        ("unrecovered", m.unrecovered),
        ("nacks", m.nacks),
        ("spurious_nacks", m.spurious_nacks),
        ("episodes_random", m.episodes.random),
        ("episodes_multi_packet", m.episodes.multi_packet),
        ("episodes_outage", m.episodes.outage),
    ] {
        push(k, v.to_string());
    }
    push("loss_rate", fmt_f(m.loss_rate));
    if let Some(v) = m.recovered_fraction {
        push("recovered_fraction", fmt_f(v));
    }
    if let Some(v) = m.unrecovered_fraction {
        push("unrecovered_fraction", fmt_f(v));
    }
    if let Some(q) = m.recovery_ratio {
        push("recovery_rtt_ratio_p50", fmt_f(q.p50));
        push("recovery_rtt_ratio_p90", fmt_f(q.p90));
        push("recovery_rtt_ratio_p99", fmt_f(q.p99));
        push("recovery_rtt_ratio_max", fmt_f(q.max));
    }
}

impl MetricsReport {
    pub fn csv_rows(&self) -> Vec<[String; 4]> {
        let mut rows = Vec::new();
        for f in &self.flows {
            flow_rows(f, &mut rows);
        }
        flow_rows(&self.aggregate, &mut rows);
        for (link, u) in &self.links {
            for (k, v) in [("bytes", u.bytes), ("packets", u.packets), ("dropped", u.dropped)] {
                rows.push([format!("link:{link}"), "-".into(), k.into(), v.to_string()]);
            }
        }
        for (dc, b) in &self.cost.dc_egress_bytes {
            rows.push([format!("dc:{dc}"), "-".into(), "egress_bytes".into(), b.to_string()]);
        }
        rows.push([
            "all".into(),
            "-".into(),
            "egress_cost_per_hour".into(),
            fmt_f(self.cost.egress_cost_per_hour),
        ]);
        rows
    }

    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CSV_HEADER)?;
        for r in self.csv_rows() {
            wr.write_record(&r)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8 csv")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn flow(&self, path: &str) -> Option<&FlowMetrics> {
        self.flows.iter().find(|f| f.path == path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bucketing() {
        let mut h = Histogram::default();
        for (start, len) in episodes_of(&[5, 9, 10].into_iter().collect()) {
            assert!(start == 5 || start == 9);
            h.add_episode(len);
        }
        assert_eq!(
            h,
            Histogram {
                random: 1,
                multi_packet: 1,
                outage: 0
            }
        );
        let mut h = Histogram::default();
        for (_, len) in episodes_of(&(100..120).collect()) {
            h.add_episode(len);
        }
        assert_eq!(h.outage, 1);
        assert!(episodes_of(&BTreeSet::new()).is_empty());
    }

    #[test]
    fn bucket_edges() {
        let mut h = Histogram::default();
        h.add_episode(14);
        h.add_episode(15);
        h.add_episode(2);
        assert_eq!((h.random, h.multi_packet, h.outage), (0, 2, 1));
    }

    #[test]
    fn nearest_rank_quantiles() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let q = quantiles(&v).unwrap();
        assert_eq!((q.p50, q.p90, q.p99, q.max), (50.0, 90.0, 99.0, 100.0));
        assert!(quantiles(&[]).is_none());
    }
}
