//! Metrics rows and the versioned CSV consumed by the plotting scripts.

use std::io::{Read, Write};

use kbt_core::{Error, Result};

/// Value of the `schema` column in every row.
pub const SCHEMA: &str = "kbt-metrics-v1";

pub const HEADER: [&str; 8] = [
    "schema",
    "method",
    "trial",
    "samples_seen",
    "success_rate",
    "time_per_sample_s",
    "mean_pred_variance",
    "sigma_data",
];

/// One evaluation point. Optional fields are written as empty cells.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub trial: usize,
    /// Samples (or, for uncertainty runs, iterations) processed so far.
    pub samples_seen: usize,
    pub success_rate: Option<f64>,
    pub time_per_sample_s: Option<f64>,
    pub mean_pred_variance: Option<f64>,
    pub sigma_data: Option<f64>,
}

impl MetricsRow {
    pub fn new(method: &str, trial: usize, samples_seen: usize) -> Self {
        Self {
            method: method.to_string(),
            trial,
            samples_seen,
            success_rate: None,
            time_per_sample_s: None,
            mean_pred_variance: None,
            sigma_data: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method.is_empty() || self.method.contains([',', '"', '\n']) {
            return Err(Error::Parse(format!("invalid method label `{}`", self.method)));
        }
        if let Some(s) = self.success_rate {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Parse(format!("success rate {s} outside [0, 1]")));
            }
        }
        for (name, v) in [("time_per_sample_s", self.time_per_sample_s), ("sigma_data", self.sigma_data)] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::Parse(format!("{name} = {v} must be finite and nonnegative")));
                }
            }
        }
        if let Some(v) = self.mean_pred_variance {
            if !v.is_finite() {
                return Err(Error::Parse(format!("mean_pred_variance = {v} is not finite")));
            }
        }
        Ok(())
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9e}")).unwrap_or_default()
}

pub fn write_csv<W: Write>(rows: &[MetricsRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    wr.write_record(HEADER).map_err(err)?;
    for r in rows {
        r.validate()?;
        wr.write_record([
            SCHEMA.to_string(),
            r.method.clone(),
            r.trial.to_string(),
            r.samples_seen.to_string(),
            cell(r.success_rate),
            cell(r.time_per_sample_s),
            cell(r.mean_pred_variance),
            cell(r.sigma_data),
        ])
        .map_err(err)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_reader(r);
    let err = |e: csv::Error| Error::Parse(e.to_string());
    if rd.headers().map_err(err)?.iter().ne(HEADER) {
        return Err(Error::Parse(format!("metrics header must be `{}`", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec.map_err(err)?;
        let bad = |col: &str| Error::Parse(format!("metrics row {}: bad `{col}`", i + 1));
        if rec.get(0) != Some(SCHEMA) {
            return Err(bad("schema"));
        }
        let opt = |k: usize| -> Result<Option<f64>> {
            match rec.get(k) {
                Some("") => Ok(None),
                Some(s) => s.parse().map(Some).map_err(|_| bad(HEADER[k])),
                None => Err(bad(HEADER[k])),
            }
        };
        let row = MetricsRow {
            method: rec.get(1).ok_or_else(|| bad("method"))?.to_string(),
            trial: rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("trial"))?,
            samples_seen: rec.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad("samples_seen"))?,
            success_rate: opt(4)?,
            time_per_sample_s: opt(5)?,
            mean_pred_variance: opt(6)?,
            sigma_data: opt(7)?,
        };
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Trailing-window mean; the output has `len − window + 1` entries.
///
/// Each window is summed afresh: a running sum leaves rounding residue
/// behind, which shows up as tiny nonzero (even negative) means over
/// windows of exact zeros.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || xs.len() < window {
        return Vec::new();
    }
    xs.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

/// Least-squares slope of `ys` against their index.
pub fn index_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

/// Whether a success-rate series never falls by more than `max_drop`
/// between consecutive points once it has exceeded `threshold`.
pub fn no_forgetting(series: &[f64], threshold: f64, max_drop: f64) -> bool {
    let Some(start) = series.iter().position(|s| *s > threshold) else {
        return true;
    };
    series[start..].windows(2).all(|w| w[0] - w[1] <= max_drop + 1e-12)
}

/// Largest drop between consecutive points.
pub fn largest_drop(series: &[f64]) -> f64 {
    series.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
}
