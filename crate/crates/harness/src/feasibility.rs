//! Latency-dataset feasibility analysis.
//!
//! Input is CSV with a header. Required columns: `path_id`, `region_pair`,
//! `delta_s_dc1`, `delta_r_dc2`, `x`, `y` (all one-way milliseconds).
//! The helper latency comes from `delta_r_prime_dc2`, or from the maximum of
//! any `helper_*` columns, or defaults to `delta_r_dc2`. An optional `delta`
//! column gives the egress wait; otherwise the global default applies.

use std::collections::BTreeMap;
use std::io::Read;

use cloudqos_core::control::service_delay_ms;
use cloudqos_core::ServiceKind;
use serde::Serialize;
use thiserror::Error;

pub const SERVICES: [ServiceKind; 3] = [
    ServiceKind::Forwarding,
    ServiceKind::Caching,
    ServiceKind::Coding,
];

#[derive(Debug, Error)]
pub enum FeasibilityError {
    #[error("missing required column '{0}'")]
    MissingColumn(&'static str),
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error("dataset has no rows")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyDatasetRow {
    pub path_id: String,
    pub region_pair: String,
    pub delta_s_dc1: f64,
    pub delta_r_dc2: f64,
    pub x: f64,
    pub y: f64,
    pub delta_r_prime_dc2: f64,
    pub delta: f64,
}

impl LatencyDatasetRow {
    pub fn delay(&self, kind: ServiceKind) -> f64 {
        service_delay_ms(
            kind,
            self.delta_s_dc1,
            self.delta_r_dc2,
            self.x,
            self.y,
            self.delta_r_prime_dc2,
            self.delta,
        )
    }
}

pub fn read_dataset<R: Read>(r: R, default_delta: f64) -> Result<Vec<LatencyDatasetRow>, FeasibilityError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rd.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &'static str| col(name).ok_or(FeasibilityError::MissingColumn(name));
    let c_id = need("path_id")?;
    let c_region = need("region_pair")?;
    let c_ds = need("delta_s_dc1")?;
    let c_dr = need("delta_r_dc2")?;
    let c_x = need("x")?;
    let c_y = need("y")?;
    let c_helper = col("delta_r_prime_dc2");
    let c_helpers: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with("helper_"))
        .map(|(i, _)| i)
        .collect();
    let c_delta = col("delta");

    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |message: String| FeasibilityError::Row { line, message };
        let num = |i: usize, name: &str| -> Result<f64, FeasibilityError> {
            let s = rec.get(i).unwrap_or("");
            let v: f64 = s
                .parse()
                .map_err(|_| err(format!("column '{name}': '{s}' is not a number")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(err(format!("column '{name}': {v} must be a non-negative latency")));
            }
            Ok(v)
        };
        let opt = |i: Option<usize>, name: &str| -> Result<Option<f64>, FeasibilityError> {
            match i.and_then(|i| rec.get(i)) {
                None | Some("") => Ok(None),
                Some(_) => num(i.unwrap(), name).map(Some),
            }
        };
        let delta_r_dc2 = num(c_dr, "delta_r_dc2")?;
        let mut helper = opt(c_helper, "delta_r_prime_dc2")?;
        if helper.is_none() && !c_helpers.is_empty() {
            let mut max: Option<f64> = None;
            for &i in &c_helpers {
                if let Some(v) = opt(Some(i), &headers[i])? {
                    max = Some(max.map_or(v, |m| m.max(v)));
                }
            }
            helper = max;
        }
        let id = rec.get(c_id).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(err("empty path_id".into()));
        }
        rows.push(LatencyDatasetRow {
            path_id: id,
            region_pair: rec.get(c_region).unwrap_or("").to_string(),
            delta_s_dc1: num(c_ds, "delta_s_dc1")?,
            delta_r_dc2,
            x: num(c_x, "x")?,
            y: num(c_y, "y")?,
            delta_r_prime_dc2: helper.unwrap_or(delta_r_dc2),
            delta: opt(c_delta, "delta")?.unwrap_or(default_delta),
        });
    }
    if rows.is_empty() {
        return Err(FeasibilityError::Empty);
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowDelays {
    pub path_id: String,
    pub region_pair: String,
    pub direct: f64,
    pub forwarding: f64,
    pub caching: f64,
    pub coding: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeasibilityReport {
    pub budget_ms: f64,
    pub rows: Vec<RowDelays>,
    /// Region pair (plus `all`) -> service -> fraction of paths within budget.
    pub within_budget: BTreeMap<String, BTreeMap<String, f64>>,
    /// Service -> sorted (delay, cumulative fraction) points.
    pub cdf: BTreeMap<String, Vec<(f64, f64)>>,
}

pub fn feasibility_analysis(rows: &[LatencyDatasetRow], budget_ms: f64) -> FeasibilityReport {
    let delays: Vec<RowDelays> = rows
        .iter()
        .map(|r| RowDelays {
            path_id: r.path_id.clone(),
            region_pair: r.region_pair.clone(),
            direct: r.delay(ServiceKind::DirectOnly),
            forwarding: r.delay(ServiceKind::Forwarding),
            caching: r.delay(ServiceKind::Caching),
            coding: r.delay(ServiceKind::Coding),
        })
        .collect();
    let pick = |d: &RowDelays, s: ServiceKind| match s {
        ServiceKind::Forwarding => d.forwarding,
        ServiceKind::Caching => d.caching,
        ServiceKind::Coding => d.coding,
        ServiceKind::DirectOnly => d.direct,
    };

    let mut groups: BTreeMap<String, Vec<&RowDelays>> = BTreeMap::new();
    for d in &delays {
        groups.entry(d.region_pair.clone()).or_default().push(d);
        groups.entry("all".into()).or_default().push(d);
    }
    let within_budget = groups
        .iter()
        .map(|(region, ds)| {
            let per = SERVICES
                .iter()
                .map(|&s| {
                    let n = ds.iter().filter(|d| pick(d, s) <= budget_ms).count();
                    (s.name().to_string(), n as f64 / ds.len() as f64)
                })
                .collect();
            (region.clone(), per)
        })
        .collect();

    let cdf = SERVICES
        .iter()
        .map(|&s| {
            let mut v: Vec<f64> = delays.iter().map(|d| pick(d, s)).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len() as f64;
            let pts = v
                .iter()
                .enumerate()
                .map(|(i, &x)| (x, (i + 1) as f64 / n))
                .collect();
            (s.name().to_string(), pts)
        })
        .collect();

    FeasibilityReport {
        budget_ms,
        rows: delays,
        within_budget,
        cdf,
    }
}

impl FeasibilityReport {
    pub fn write_delays_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["path_id", "region_pair", "direct", "forwarding", "caching", "coding"])?;
        for r in &self.rows {
            wr.write_record([
                r.path_id.clone(),
                r.region_pair.clone(),
                format!("{:.3}", r.direct),
                format!("{:.3}", r.forwarding),
                format!("{:.3}", r.caching),
                format!("{:.3}", r.coding),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: std::io::Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["region_pair", "service", "budget_ms", "within_budget"])?;
        for (region, per) in &self.within_budget {
            for (service, frac) in per {
                wr.write_record([
                    region.clone(),
                    service.clone(),
                    format!("{}", self.budget_ms),
                    format!("{frac:.6}"),
                ])?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DATA: &str = "\
path_id,region_pair,delta_s_dc1,delta_r_dc2,x,y,helper_1,helper_2
p1,us-eu,5,10,70,80,12,15
p2,us-eu,5,10,70,150,,
p3,us-asia,8,20,120,140,30,25
";

    #[test]
    fn reads_helpers_as_max() {
        let rows = read_dataset(DATA.as_bytes(), 0.0).unwrap();
        assert_eq!(rows[0].delta_r_prime_dc2, 15.0);
        assert_eq!(rows[1].delta_r_prime_dc2, 10.0);
        assert_eq!(rows[2].delta_r_prime_dc2, 30.0);
    }

    #[test]
    fn caching_example_row() {
        let rows = read_dataset(DATA.as_bytes(), 0.0).unwrap();
        assert_eq!(rows[0].delay(ServiceKind::Caching), 100.0);
        let rep = feasibility_analysis(&rows, 200.0);
        assert_eq!(rep.within_budget["us-eu"]["caching"], 1.0);
        assert_eq!(rep.within_budget["us-asia"]["coding"], 0.0);
        assert_eq!(rep.cdf["forwarding"].last().unwrap().1, 1.0);
    }

    #[test]
    fn bad_value_reports_line() {
        let bad = DATA.replace("p2,us-eu,5,10,70,150", "p2,us-eu,5,ten,70,150");
        let err = read_dataset(bad.as_bytes(), 0.0).unwrap_err();
        assert!(err.to_string().starts_with("line 3:"), "{err}");
    }

    #[test]
    fn missing_column() {
        let err = read_dataset("path_id,region_pair,x\n".as_bytes(), 0.0).unwrap_err();
        assert!(matches!(err, FeasibilityError::MissingColumn("delta_s_dc1")));
    }

    #[test]
    fn negative_latency_rejected() {
        let bad = DATA.replace("p1,us-eu,5,10,70,80", "p1,us-eu,-5,10,70,80");
        assert!(read_dataset(bad.as_bytes(), 0.0).is_err());
    }
}
