//! What-if comparison against on-path FEC.
//!
//! The direct-path probe trace of each flow is cut into frames of ten
//! consecutive probes: the first five are data, the next five stand in for
//! FEC packets. At overhead level `p/5` only the first `p` FEC probes are
//! used. A data loss in a frame is recoverable iff the frame's data losses
//! do not exceed its surviving FEC probes. The comparison column is the
//! fraction of the same data-role losses that the coding run recovered.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use cloudqos_core::packet::PacketSummary;
use cloudqos_core::simnet::{LogEntry, LogEvent};
use cloudqos_core::{FlowId, Seq};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsReport;
use crate::scenario::FlowInfo;

pub const BLOCK: usize = 5;
pub const FRAME: usize = 2 * BLOCK;

#[derive(Debug, Error)]
pub enum WhatIfError {
    #[error("trace has no flow with at least {FRAME} probes")]
    TooShort,
    #[error("bad overhead level '{0}' (expected p/5 with 1 <= p <= 5)")]
    BadLevel(String),
    #[error("trace line {line}: {message}")]
    Trace { line: u64, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One direct-path probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub flow: u32,
    pub seq: Seq,
    /// 1 if the direct copy dropped.
    pub lost: u8,
    /// 1 if the coding run recovered it within one RTT.
    pub recovered: u8,
}

/// Extracts the direct-path probe trace from a run.
pub fn direct_trace(log: &[LogEntry], flows: &[FlowInfo], report: &MetricsReport) -> Vec<TraceRow> {
    let mut rows: BTreeMap<(u32, Seq), TraceRow> = BTreeMap::new();
    let direct: BTreeMap<FlowId, _> = flows
        .iter()
        .filter(|f| f.direct_copy)
        .map(|f| (f.flow, (f.source, f.destination)))
        .collect();
    for e in log {
        let (from, to, packet, lost) = match &e.event {
            LogEvent::Transmit { from, to, packet, .. } => (from, to, packet, false),
            LogEvent::Drop { from, to, packet, .. } => (from, to, packet, true),
            _ => continue,
        };
        let PacketSummary::Data { flow, seq, .. } = packet else {
            continue;
        };
        if direct.get(flow) != Some(&(*from, *to)) {
            continue;
        }
        let row = rows.entry((flow.0, *seq)).or_insert(TraceRow {
            flow: flow.0,
            seq: *seq,
            lost: 0,
            recovered: 0,
        });
        if lost {
            row.lost = 1;
        }
    }
    for f in flows {
        if let Some(m) = report.flow(&f.label) {
            for &s in m.recovered_seqs() {
                if let Some(r) = rows.get_mut(&(f.flow.0, s)) {
                    r.recovered = 1;
                }
            }
        }
    }
    rows.into_values().collect()
}

pub fn write_trace<W: Write>(rows: &[TraceRow], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(r: R) -> Result<Vec<TraceRow>, WhatIfError> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.deserialize::<TraceRow>() {
        let row = rec.map_err(|e| WhatIfError::Trace {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        if row.lost > 1 || row.recovered > 1 {
            return Err(WhatIfError::Trace {
                line: 0,
                message: format!("flags must be 0 or 1 (flow {} seq {})", row.flow, row.seq),
            });
        }
        out.push(row);
    }
    Ok(out)
}

/// Parses levels like `1/5,2/5,5/5` into FEC probe counts.
pub fn parse_levels(s: &str) -> Result<Vec<usize>, WhatIfError> {
    s.split(',')
        .map(|part| {
            let part = part.trim();
            let bad = || WhatIfError::BadLevel(part.to_string());
            let (p, q) = part.split_once('/').ok_or_else(bad)?;
            let p: usize = p.trim().parse().map_err(|_| bad())?;
            let q: usize = q.trim().parse().map_err(|_| bad())?;
            if q != BLOCK || p == 0 || p > BLOCK {
                return Err(bad());
            }
            Ok(p)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelResult {
    pub level: String,
    pub fec_probes: usize,
    pub recovered: u64,
    pub rate: f64,
    /// Coding rate minus FEC rate, in percentage points.
    pub delta_pp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhatIfReport {
    pub frames: u64,
    pub data_losses: u64,
    pub coding_recovered: u64,
    pub coding_rate: f64,
    pub levels: Vec<LevelResult>,
}

pub fn fec_whatif(trace: &[TraceRow], levels: &[usize]) -> Result<WhatIfReport, WhatIfError> {
    let mut per_flow: BTreeMap<u32, Vec<&TraceRow>> = BTreeMap::new();
    for r in trace {
        per_flow.entry(r.flow).or_default().push(r);
    }
    let mut frames = 0u64;
    let mut data_losses = 0u64;
    let mut coding = 0u64;
    let mut fec = vec![0u64; levels.len()];
    for rows in per_flow.values_mut() {
        rows.sort_by_key(|r| r.seq);
        for frame in rows.chunks_exact(FRAME) {
            frames += 1;
            let (data, parity) = frame.split_at(BLOCK);
            let lost: u64 = data.iter().map(|r| r.lost as u64).sum();
            data_losses += lost;
            coding += data.iter().filter(|r| r.lost == 1 && r.recovered == 1).count() as u64;
            for (i, &p) in levels.iter().enumerate() {
                let surviving = parity[..p].iter().filter(|r| r.lost == 0).count() as u64;
                if lost <= surviving {
                    fec[i] += lost;
                }
            }
        }
    }
    if frames == 0 {
        return Err(WhatIfError::TooShort);
    }
    let rate = |n: u64| {
        if data_losses == 0 {
            1.0
        } else {
            n as f64 / data_losses as f64
        }
    };
    let coding_rate = rate(coding);
    Ok(WhatIfReport {
        frames,
        data_losses,
        coding_recovered: coding,
        coding_rate,
        levels: levels
            .iter()
            .zip(fec)
            .map(|(&p, n)| LevelResult {
                level: format!("{p}/{BLOCK}"),
                fec_probes: p,
                recovered: n,
                rate: rate(n),
                delta_pp: (coding_rate - rate(n)) * 100.0,
            })
            .collect(),
    })
}

impl WhatIfReport {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["level", "data_losses", "fec_recovered", "fec_rate", "coding_rate", "delta_pp"])?;
        for l in &self.levels {
            wr.write_record([
                l.level.clone(),
                self.data_losses.to_string(),
                l.recovered.to_string(),
                format!("{:.6}", l.rate),
                format!("{:.6}", self.coding_rate),
                format!("{:.6}", l.delta_pp),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}
