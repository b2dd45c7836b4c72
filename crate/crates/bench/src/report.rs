//! Result rows, run manifests and report files.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::smoothing::{smooth_metric_curve, CurvePoint, Orientation};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_HEADER: &str = "dataset,method,kernel,seed,m,elapsed_s,bound_kind,bound_value,upper_bound,rmse,nlpd";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no records to report")]
    Empty,
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid report file {path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SGPR-baseline")]
    SgprBaseline,
    #[serde(rename = "GPR")]
    Gpr,
    #[serde(rename = "SVGP")]
    Svgp,
    #[serde(rename = "Linear")]
    Linear,
    #[serde(rename = "ConstantMean")]
    ConstantMean,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::SgprBaseline => "SGPR-baseline",
            Method::Gpr => "GPR",
            Method::Svgp => "SVGP",
            Method::Linear => "Linear",
            Method::ConstantMean => "ConstantMean",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// What `bound_value` measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Elbo,
    Lml,
    TrainLogLikelihood,
}

impl BoundKind {
    pub fn label(&self) -> &'static str {
        match self {
            BoundKind::Elbo => "elbo",
            BoundKind::Lml => "lml",
            BoundKind::TrainLogLikelihood => "train_log_likelihood",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown format `{other}` (expected csv or json)")),
        }
    }
}

/// Everything needed to rerun one (dataset, method, kernel, seed) combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub dataset: String,
    pub method: Method,
    pub kernel: Option<String>,
    pub seed: u64,
    pub config: Value,
    pub output: PathBuf,
}

/// One checkpoint of one run. Non-finite values mark a failed checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub method: Method,
    pub kernel: Option<String>,
    pub seed: u64,
    /// Inducing budget; `None` for methods without one.
    pub m: Option<usize>,
    pub elapsed_s: f64,
    pub bound_kind: BoundKind,
    #[serde(with = "nullable_f64")]
    pub bound_value: f64,
    #[serde(with = "nullable_f64")]
    pub upper_bound: f64,
    #[serde(with = "nullable_f64")]
    pub rmse: f64,
    #[serde(with = "nullable_f64")]
    pub nlpd: f64,
}

/// NaN and infinities round-trip through JSON as `null`.
mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn long_form_csv(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.dataset),
            r.method,
            csv_field(r.kernel.as_deref().unwrap_or("")),
            r.seed,
            r.m.map(|m| m.to_string()).unwrap_or_default(),
            format_float(r.elapsed_s),
            r.bound_kind.label(),
            format_float(r.bound_value),
            format_float(r.upper_bound),
            format_float(r.rmse),
            format_float(r.nlpd),
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PivotMetric {
    ElapsedS,
    BoundValue,
    UpperBound,
    Rmse,
    Nlpd,
}

impl PivotMetric {
    pub const ALL: [PivotMetric; 5] = [
        PivotMetric::ElapsedS,
        PivotMetric::BoundValue,
        PivotMetric::UpperBound,
        PivotMetric::Rmse,
        PivotMetric::Nlpd,
    ];

    fn label(&self) -> &'static str {
        match self {
            PivotMetric::ElapsedS => "elapsed_s",
            PivotMetric::BoundValue => "bound_value",
            PivotMetric::UpperBound => "upper_bound",
            PivotMetric::Rmse => "rmse",
            PivotMetric::Nlpd => "nlpd",
        }
    }

    fn of(&self, r: &MetricRow) -> f64 {
        match self {
            PivotMetric::ElapsedS => r.elapsed_s,
            PivotMetric::BoundValue => r.bound_value,
            PivotMetric::UpperBound => r.upper_bound,
            PivotMetric::Rmse => r.rmse,
            PivotMetric::Nlpd => r.nlpd,
        }
    }
}

/// One row of the wide table: per-seed means for each budget plus the final checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PivotRow {
    pub dataset: String,
    pub method: Method,
    pub kernel: Option<String>,
    pub metric: PivotMetric,
    /// Aligned with [`Pivot::columns`]; `None` where no seed reached that budget.
    #[serde(with = "nullable_cells")]
    pub cells: Vec<Option<f64>>,
    #[serde(with = "nullable_f64")]
    pub final_value: f64,
    pub n_seeds: usize,
}

mod nullable_cells {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Option<f64>], s: S) -> Result<S::Ok, S::Error> {
        let cleaned: Vec<Option<f64>> = v.iter().map(|c| c.filter(|x| x.is_finite())).collect();
        cleaned.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Option<f64>>, D::Error> {
        Vec::<Option<f64>>::deserialize(d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pivot {
    /// Budgets in increasing order; the final column is implicit.
    pub columns: Vec<usize>,
    pub rows: Vec<PivotRow>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

type GroupKey = (String, Method, Option<String>);

fn group_by_run(rows: &[MetricRow]) -> BTreeMap<GroupKey, BTreeMap<u64, Vec<&MetricRow>>> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<u64, Vec<&MetricRow>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.dataset.clone(), r.method, r.kernel.clone()))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r);
    }
    groups
}

/// Averages each metric over seeds, per budget and for each seed's last checkpoint.
pub fn pivot(rows: &[MetricRow]) -> Pivot {
    let mut columns: Vec<usize> = rows.iter().filter_map(|r| r.m).collect();
    columns.sort_unstable();
    columns.dedup();

    let mut out = Vec::new();
    for ((dataset, method, kernel), seeds) in group_by_run(rows) {
        for metric in PivotMetric::ALL {
            let cells = columns
                .iter()
                .map(|&m| {
                    let vals: Vec<f64> = seeds
                        .values()
                        .flat_map(|rs| rs.iter().filter(|r| r.m == Some(m)).map(|r| metric.of(r)))
                        .collect();
                    (!vals.is_empty()).then(|| mean(&vals))
                })
                .collect();
            let finals: Vec<f64> = seeds
                .values()
                .filter_map(|rs| rs.last().map(|r| metric.of(r)))
                .collect();
            out.push(PivotRow {
                dataset: dataset.clone(),
                method,
                kernel: kernel.clone(),
                metric,
                cells,
                final_value: mean(&finals),
                n_seeds: seeds.len(),
            });
        }
    }
    Pivot { columns, rows: out }
}

pub fn pivot_csv(p: &Pivot) -> String {
    let mut out = String::from("dataset,method,kernel,metric,n_seeds");
    for m in &p.columns {
        let _ = write!(out, ",m{m}");
    }
    out.push_str(",final\n");
    for r in &p.rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            csv_field(&r.dataset),
            r.method,
            csv_field(r.kernel.as_deref().unwrap_or("")),
            r.metric.label(),
            r.n_seeds
        );
        for c in &r.cells {
            out.push(',');
            if let Some(v) = c {
                out.push_str(&format_float(*v));
            }
        }
        let _ = writeln!(out, ",{}", format_float(r.final_value));
    }
    out
}

/// Smoothed bound curves (with RMSE and NLPD as companions), one per budgeted run.
pub fn smoothed_curves(rows: &[MetricRow]) -> Vec<Value> {
    let mut out = Vec::new();
    for ((dataset, method, kernel), seeds) in group_by_run(rows) {
        for (seed, rs) in seeds {
            if rs.iter().any(|r| r.m.is_none()) {
                continue;
            }
            let series: Vec<CurvePoint> = rs
                .iter()
                .map(|r| CurvePoint {
                    time: r.elapsed_s,
                    m: r.m.unwrap_or(0),
                    value: r.bound_value,
                    companions: vec![r.rmse, r.nlpd],
                })
                .collect();
            let smoothed = smooth_metric_curve(&series, Orientation::HigherIsBetter);
            let finite = |v: f64| if v.is_finite() { json!(v) } else { Value::Null };
            out.push(json!({
                "dataset": dataset,
                "method": method,
                "kernel": kernel,
                "seed": seed,
                "points": smoothed.iter().map(|p| json!({
                    "elapsed_s": finite(p.time),
                    "m": p.m,
                    "bound_value": finite(p.value),
                    "rmse": finite(p.companions[0]),
                    "nlpd": finite(p.companions[1]),
                })).collect::<Vec<_>>(),
            }));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonReport {
    pub schema_version: u32,
    pub manifests: Vec<RunManifest>,
    pub rows: Vec<MetricRow>,
    pub pivot: Pivot,
    pub smoothed: Vec<Value>,
}

pub fn json_report(rows: &[MetricRow], manifests: &[RunManifest]) -> JsonReport {
    JsonReport {
        schema_version: SCHEMA_VERSION,
        manifests: manifests.to_vec(),
        rows: rows.to_vec(),
        pivot: pivot(rows),
        smoothed: smoothed_curves(rows),
    }
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), ReportError> {
    let io_err = |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(io_err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(contents).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

/// Writes the report files under `out_dir` with file names starting `stem`.
///
/// CSV produces `<stem>.csv` (long form) and `<stem>_pivot.csv`; JSON produces `<stem>.json`.
pub fn emit_report(
    rows: &[MetricRow],
    manifests: &[RunManifest],
    format: ReportFormat,
    out_dir: &Path,
    stem: &str,
) -> Result<Vec<PathBuf>, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    match format {
        ReportFormat::Csv => {
            let long = out_dir.join(format!("{stem}.csv"));
            let wide = out_dir.join(format!("{stem}_pivot.csv"));
            write_atomic(&long, long_form_csv(rows).as_bytes())?;
            write_atomic(&wide, pivot_csv(&pivot(rows)).as_bytes())?;
            Ok(vec![long, wide])
        }
        ReportFormat::Json => {
            let path = out_dir.join(format!("{stem}.json"));
            let doc = json_report(rows, manifests);
            let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
            text.push('\n');
            write_atomic(&path, text.as_bytes())?;
            Ok(vec![path])
        }
    }
}

pub fn read_json_report(path: &Path) -> Result<JsonReport, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: JsonReport = serde_json::from_str(&text).map_err(|e| ReportError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if doc.schema_version != SCHEMA_VERSION {
        return Err(ReportError::Invalid {
            path: path.to_path_buf(),
            message: format!("schema_version {} is not {SCHEMA_VERSION}", doc.schema_version),
        });
    }
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, m: Option<usize>, bound: f64) -> MetricRow {
        MetricRow {
            dataset: "smooth1d".into(),
            method: if m.is_some() {
                Method::SgprBaseline
            } else {
                Method::Linear
            },
            kernel: m.map(|_| "se".to_string()),
            seed,
            m,
            elapsed_s: 0.5,
            bound_kind: BoundKind::Elbo,
            bound_value: bound,
            upper_bound: bound + 1.0,
            rmse: 0.25,
            nlpd: 0.1,
        }
    }

    #[test]
    fn floats_have_17_significant_digits() {
        assert_eq!(format_float(0.1), "1.0000000000000001e-1");
        assert_eq!(format_float(-2.0), "-2.0000000000000000e0");
        assert_eq!(format_float(f64::NAN), "NaN");
        let v = std::f64::consts::PI * 1e-7;
        assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
    }

    #[test]
    fn single_record_pivot() {
        let p = pivot(&[row(0, Some(10), -3.0)]);
        assert_eq!(p.columns, vec![10]);
        let bound = p.rows.iter().find(|r| r.metric == PivotMetric::BoundValue).unwrap();
        assert_eq!(bound.cells, vec![Some(-3.0)]);
        assert_eq!(bound.final_value, -3.0);
        assert_eq!(long_form_csv(&[row(0, Some(10), -3.0)]).lines().count(), 2);
    }

    #[test]
    fn pivot_averages_seeds() {
        let rows: Vec<MetricRow> = (0..5)
            .flat_map(|s| [row(s, Some(10), s as f64), row(s, Some(20), 10.0 + s as f64)])
            .chain([row(0, None, 7.0)])
            .collect();
        let p = pivot(&rows);
        assert_eq!(p.columns, vec![10, 20]);
        let sgpr = p
            .rows
            .iter()
            .find(|r| r.method == Method::SgprBaseline && r.metric == PivotMetric::BoundValue)
            .unwrap();
        assert_eq!(sgpr.cells, vec![Some(2.0), Some(12.0)]);
        assert_eq!(sgpr.final_value, 12.0);
        assert_eq!(sgpr.n_seeds, 5);
        let lin = p
            .rows
            .iter()
            .find(|r| r.method == Method::Linear && r.metric == PivotMetric::BoundValue)
            .unwrap();
        assert_eq!(lin.cells, vec![None, None]);
        assert_eq!(lin.final_value, 7.0);
    }

    #[test]
    fn non_finite_json_is_null() {
        let mut r = row(0, Some(10), f64::NAN);
        r.rmse = f64::INFINITY;
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"bound_value\":null") && text.contains("\"rmse\":null"));
        let back: MetricRow = serde_json::from_str(&text).unwrap();
        assert!(back.bound_value.is_nan());
    }

    #[test]
    fn csv_quotes_awkward_fields() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
