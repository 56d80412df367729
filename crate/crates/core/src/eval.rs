//! Results tables: success rate, metric means and operating characteristics.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::csv_error;
use crate::metrics::{MetricId, MetricValues};

pub const RESULTS_HEADER: [&str; 9] =
    ["sample_id", "method", "success", "l2", "cd", "hd", "curv", "smooth", "time_s"];
pub const QUERIES_COLUMN: &str = "queries";

/// Display scale of each metric column in [`summarize`] output.
pub const DISPLAY_SCALES: [(MetricId, f64); 5] = [
    (MetricId::L2, 1e-1),
    (MetricId::Cd, 1e-4),
    (MetricId::Hd, 1e-2),
    (MetricId::Curv, 1e-2),
    (MetricId::Smooth, 1e-3),
];

pub const DEFAULT_GRID_POINTS: usize = 200;

/// One row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sample_id: String,
    pub method: String,
    pub success: bool,
    /// Distances of the adversarial cloud; absent when the attack failed.
    pub distances: Option<MetricValues>,
    /// Wall seconds; absent when timing was not recorded.
    pub time_s: Option<f64>,
    /// Target queries spent by a black-box run.
    pub queries: Option<usize>,
}

impl EvalRecord {
    pub fn metric(&self, id: MetricId) -> Option<f64> {
        self.distances.as_ref().map(|d| d.get(id))
    }
}

fn opt_field<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes records as CSV. The `queries` column is emitted only when some
/// record carries a query count.
pub fn write_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let with_queries = records.iter().any(|r| r.queries.is_some());
    let mut header: Vec<&str> = RESULTS_HEADER.to_vec();
    if with_queries {
        header.push(QUERIES_COLUMN);
    }
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in records {
        let mut row = vec![r.sample_id.clone(), r.method.clone(), r.success.to_string()];
        for id in MetricId::ALL {
            row.push(opt_field(r.metric(id)));
        }
        row.push(opt_field(r.time_s));
        if with_queries {
            row.push(opt_field(r.queries));
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let with_queries = if header.iter().eq(RESULTS_HEADER) {
        false
    } else if header.len() == RESULTS_HEADER.len() + 1
        && header.iter().take(RESULTS_HEADER.len()).eq(RESULTS_HEADER)
        && &header[RESULTS_HEADER.len()] == QUERIES_COLUMN
    {
        true
    } else {
        return Err(Error::format(format!(
            "{} line 1: expected header '{}'",
            path.display(),
            RESULTS_HEADER.join(",")
        )));
    };
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        out.push(parse_record(&row, with_queries).map_err(|msg| {
            Error::format(format!("{} line {line}: {msg}", path.display()))
        })?);
    }
    Ok(out)
}

fn parse_record(row: &csv::StringRecord, with_queries: bool) -> std::result::Result<EvalRecord, String> {
    let float = |i: usize| -> std::result::Result<Option<f64>, String> {
        let s = &row[i];
        if s.is_empty() {
            return Ok(None);
        }
        let v: f64 = s.parse().map_err(|_| format!("bad number '{s}' in column {}", RESULTS_HEADER[i]))?;
        if !v.is_finite() || v < 0.0 {
            return Err(format!("{} must be finite and non-negative, got {v}", RESULTS_HEADER[i]));
        }
        Ok(Some(v))
    };
    let success = match &row[2] {
        "true" | "1" => true,
        "false" | "0" => false,
        s => return Err(format!("bad success flag '{s}'")),
    };
    let values = (3..8).map(float).collect::<std::result::Result<Vec<_>, _>>()?;
    let distances = match (success, values.iter().all(Option::is_some), values.iter().all(Option::is_none)) {
        (true, true, _) => Some(MetricValues {
            l2: values[0].unwrap(),
            cd: values[1].unwrap(),
            hd: values[2].unwrap(),
            curv: values[3].unwrap(),
            smooth: values[4].unwrap(),
        }),
        (false, _, true) => None,
        (true, _, _) => return Err("successful row needs all five distances".into()),
        (false, _, false) => return Err("failed row must leave distances empty".into()),
    };
    let queries = if with_queries && !row[9].is_empty() {
        Some(row[9].parse().map_err(|_| format!("bad query count '{}'", &row[9]))?)
    } else {
        None
    };
    Ok(EvalRecord {
        sample_id: row[0].to_string(),
        method: row[1].to_string(),
        success,
        distances,
        time_s: float(8)?,
        queries,
    })
}

pub fn success_rate(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::invalid("success rate of an empty record set"));
    }
    Ok(records.iter().filter(|r| r.success).count() as f64 / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatingCurve {
    /// `(D, P(D))` per grid point.
    pub points: Vec<(f64, f64)>,
    /// No attack succeeded; every `P` is zero.
    pub empty: bool,
}

/// Largest distance among successful records.
pub fn max_success_distance(records: &[EvalRecord], metric: MetricId) -> Option<f64> {
    records
        .iter()
        .filter_map(|r| r.metric(metric))
        .max_by(f64::total_cmp)
}

/// `steps` evenly spaced points from 0 to `1.05` times the largest observed
/// distance.
pub fn default_grid(records: &[EvalRecord], metric: MetricId, steps: usize) -> Vec<f64> {
    let top = 1.05 * max_success_distance(records, metric).unwrap_or(0.0);
    let steps = steps.max(2);
    (0..steps).map(|i| top * i as f64 / (steps - 1) as f64).collect()
}

/// `P(D)`: fraction of all records that succeeded with distance at most `D`.
/// Runs from 0 below the smallest successful distance up to the success rate
/// at the largest one.
pub fn operating_characteristic(
    records: &[EvalRecord],
    metric: MetricId,
    grid: &[f64],
) -> Result<OperatingCurve> {
    if records.is_empty() {
        return Err(Error::invalid("operating characteristic of an empty record set"));
    }
    if grid.iter().any(|d| !d.is_finite()) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("grid must be finite and ascending"));
    }
    let mut dists: Vec<f64> = records.iter().filter_map(|r| r.metric(metric)).collect();
    dists.sort_by(f64::total_cmp);
    if let (Some(&top), Some(&last)) = (dists.last(), grid.last()) {
        if last < top {
            return Err(Error::invalid(format!(
                "grid ends at {last}, below the largest distance {top}"
            )));
        }
    }
    let n = records.len() as f64;
    let points = grid
        .iter()
        .map(|&d| (d, dists.partition_point(|&x| x <= d) as f64 / n))
        .collect();
    Ok(OperatingCurve {
        points,
        empty: dists.is_empty(),
    })
}

pub fn format_curve(curve: &OperatingCurve) -> String {
    let mut out = String::from("D\tP\n");
    for (d, p) in &curve.points {
        let _ = writeln!(out, "{d}\t{p}");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub records: usize,
    pub success_rate: f64,
    /// Unscaled means over successful records, in [`MetricId::ALL`] order.
    pub metric_means: [Option<f64>; 5],
    /// Mean wall time over records that carry one.
    pub mean_time: Option<f64>,
}

pub fn summarize(records: &[EvalRecord]) -> Result<Summary> {
    let success_rate = success_rate(records)?;
    let mean = |vals: Vec<f64>| {
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let metric_means =
        MetricId::ALL.map(|id| mean(records.iter().filter_map(|r| r.metric(id)).collect()));
    Ok(Summary {
        records: records.len(),
        success_rate,
        metric_means,
        mean_time: mean(records.iter().filter_map(|r| r.time_s).collect()),
    })
}

pub fn summary_header() -> String {
    let mut cols = vec!["n".to_string(), "P_suc(%)".to_string()];
    cols.extend(DISPLAY_SCALES.iter().map(|(id, s)| format!("{}({s:e})", id.name())));
    cols.push("time(s)".into());
    cols.join("\t")
}

/// Tab-separated row; metric means are divided by their display scale and
/// absent values print as `-`.
pub fn format_summary(s: &Summary) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.10}"));
    let mut cols = vec![s.records.to_string(), format!("{:.10}", 100.0 * s.success_rate)];
    for (mean, (_, scale)) in s.metric_means.iter().zip(DISPLAY_SCALES) {
        cols.push(fmt(mean.map(|m| m / scale)));
    }
    cols.push(fmt(s.mean_time));
    cols.join("\t")
}

/// Inverse of [`format_summary`], up to its printed precision.
pub fn parse_summary(line: &str) -> Result<Summary> {
    let cols: Vec<&str> = line.trim_end().split('\t').collect();
    if cols.len() != 8 {
        return Err(Error::format(format!("summary row has {} columns, expected 8", cols.len())));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::format(format!("bad number '{s}' in summary row")))
    };
    let opt = |s: &str| -> Result<Option<f64>> {
        if s == "-" { Ok(None) } else { num(s).map(Some) }
    };
    let records = cols[0]
        .parse()
        .map_err(|_| Error::format(format!("bad record count '{}'", cols[0])))?;
    let mut metric_means = [None; 5];
    for (i, (_, scale)) in DISPLAY_SCALES.iter().enumerate() {
        metric_means[i] = opt(cols[2 + i])?.map(|v| v * scale);
    }
    Ok(Summary {
        records,
        success_rate: num(cols[1])? / 100.0,
        metric_means,
        mean_time: opt(cols[7])?,
    })
}
