//! Metric tables: per-instance scores, summaries, box-plot data and the
//! headline comparison.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::WEIGHTED_AVERAGE_TAG;
use crate::metrics::{kruskal_wallis, summarize, StatTestResult, Summary};
use crate::optimizer::OPTIMIZER_LR_TAG;

/// Scores of one (instance, method) pair; `None` marks an undefined score.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub instance_id: String,
    pub method: String,
    pub faithfulness: Option<f64>,
    pub complexity: Option<f64>,
}

impl MetricRow {
    pub fn undefined(&self) -> bool {
        self.faithfulness.is_none() || self.complexity.is_none()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.17e}"))
}

fn parse_opt(s: &str, what: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::format("metrics CSV", format!("bad {what} value '{s}'")))
}

pub const METRIC_COLUMNS: [&str; 5] = ["instance_id", "method", "faithfulness", "complexity", "undefined_flag"];

pub fn write_metric_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.instance_id.clone(),
            r.method.clone(),
            fmt_opt(r.faithfulness),
            fmt_opt(r.complexity),
            (r.undefined() as u8).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_metric_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != METRIC_COLUMNS {
        return Err(Error::format("metrics CSV", format!("{}: unexpected header", path.display())));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            if rec.len() != METRIC_COLUMNS.len() {
                return Err(Error::format("metrics CSV", format!("{}: wrong column count", path.display())));
            }
            Ok(MetricRow {
                instance_id: rec[0].to_string(),
                method: rec[1].to_string(),
                faithfulness: parse_opt(&rec[2], "faithfulness")?,
                complexity: parse_opt(&rec[3], "complexity")?,
            })
        })
        .collect()
}

/// Method names in report order: baselines as first seen, then the
/// Weighted Average, then the optimizer.
pub fn method_order(rows: &[MetricRow]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for r in rows {
        if !seen.contains(&r.method) {
            seen.push(r.method.clone());
        }
    }
    let rank = |m: &str| match m {
        WEIGHTED_AVERAGE_TAG => 1,
        OPTIMIZER_LR_TAG => 2,
        _ => 0,
    };
    seen.sort_by_key(|m| rank(m));
    seen
}

/// Per-method summaries of one metric; undefined rows are excluded.
#[derive(Clone, Debug)]
pub struct MetricSummary {
    pub metric: &'static str,
    pub per_method: Vec<(String, Summary)>,
    /// Kruskal-Wallis across methods; `None` with fewer than two usable groups.
    pub test: Option<StatTestResult>,
}

fn summarize_metric(rows: &[MetricRow], methods: &[String], metric: &'static str) -> Result<MetricSummary> {
    let pick = |r: &MetricRow| -> Option<f64> {
        if r.undefined() {
            return None;
        }
        match metric {
            "faithfulness" => r.faithfulness,
            _ => r.complexity,
        }
    };
    let mut per_method = Vec::new();
    let mut groups = Vec::new();
    for m in methods {
        let scores: Vec<Option<f64>> = rows.iter().filter(|r| &r.method == m).map(pick).collect();
        let defined: Vec<f64> = scores.iter().flatten().copied().collect();
        if defined.len() >= 2 {
            groups.push((m.clone(), defined));
        }
        per_method.push((m.clone(), summarize(&scores)));
    }
    let test = if groups.len() >= 2 { Some(kruskal_wallis(&groups)?) } else { None };
    Ok(MetricSummary {
        metric,
        per_method,
        test,
    })
}

/// Faithfulness and complexity summaries for every method in `rows`.
pub fn summarize_rows(rows: &[MetricRow]) -> Result<[MetricSummary; 2]> {
    let methods = method_order(rows);
    Ok([
        summarize_metric(rows, &methods, "faithfulness")?,
        summarize_metric(rows, &methods, "complexity")?,
    ])
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.17e}")
    } else {
        String::new()
    }
}

/// One row per (method, metric) with the summary statistics and the
/// Kruskal-Wallis result for that metric.
pub fn write_summary_csv(summaries: &[MetricSummary], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "metric",
        "count",
        "undefined",
        "mean",
        "min",
        "q1",
        "median",
        "q3",
        "max",
        "kruskal_h",
        "kruskal_df",
        "kruskal_p",
    ])?;
    for s in summaries {
        let (h, df, p) = s.test.as_ref().map_or((String::new(), String::new(), String::new()), |t| {
            (num(t.statistic), t.degrees_of_freedom.to_string(), num(t.p_value))
        });
        for (m, x) in &s.per_method {
            w.write_record([
                m.clone(),
                s.metric.to_string(),
                x.count.to_string(),
                x.undefined.to_string(),
                num(x.mean),
                num(x.min),
                num(x.q1),
                num(x.median),
                num(x.q3),
                num(x.max),
                h.clone(),
                df.clone(),
                p.clone(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn write_boxplot_csv(summaries: &[MetricSummary], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "metric", "min", "q1", "median", "q3", "max"])?;
    for s in summaries {
        for (m, x) in &s.per_method {
            w.write_record([
                m.clone(),
                s.metric.to_string(),
                num(x.min),
                num(x.q1),
                num(x.median),
                num(x.q3),
                num(x.max),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::file(path, e))
}

/// Headline row: mean scores of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadlineRow {
    pub method: String,
    pub mean_faithfulness: f64,
    pub mean_complexity: f64,
    pub instances: usize,
    pub undefined: usize,
}

pub fn headline(summaries: &[MetricSummary; 2]) -> Vec<HeadlineRow> {
    let [faith, compx] = summaries;
    faith
        .per_method
        .iter()
        .zip(&compx.per_method)
        .map(|((m, f), (_, c))| HeadlineRow {
            method: m.clone(),
            mean_faithfulness: f.mean,
            mean_complexity: c.mean,
            instances: f.count + f.undefined,
            undefined: f.undefined,
        })
        .collect()
}

pub fn write_headline_csv(rows: &[HeadlineRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "mean_faithfulness", "mean_complexity", "instances", "undefined"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            num(r.mean_faithfulness),
            num(r.mean_complexity),
            r.instances.to_string(),
            r.undefined.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

/// Plain-text table for terminals and markdown viewers.
pub fn format_headline(rows: &[HeadlineRow], summaries: &[MetricSummary; 2]) -> String {
    let mut s = String::from("| method | faithfulness | complexity | n |\n|---|---:|---:|---:|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} | {} |",
            r.method, r.mean_faithfulness, r.mean_complexity, r.instances
        );
    }
    for m in summaries {
        if let Some(t) = &m.test {
            let _ = writeln!(
                s,
                "\nKruskal-Wallis ({}): H = {:.3}, df = {}, p = {:.3e}",
                m.metric, t.statistic, t.degrees_of_freedom, t.p_value
            );
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: usize, m: &str, f: Option<f64>, c: Option<f64>) -> MetricRow {
        MetricRow {
            instance_id: format!("{i:04}"),
            method: m.into(),
            faithfulness: f,
            complexity: c,
        }
    }

    fn rows() -> Vec<MetricRow> {
        let mut v = Vec::new();
        for i in 0..4 {
            v.push(row(i, OPTIMIZER_LR_TAG, Some(0.8 + i as f64 * 0.01), Some(1.0)));
            v.push(row(i, "saliency", Some(0.1 * i as f64), Some(3.0 + i as f64)));
            v.push(row(i, WEIGHTED_AVERAGE_TAG, Some(0.5), Some(2.0 + 0.1 * i as f64)));
        }
        v.push(row(4, "saliency", None, Some(4.0)));
        v
    }

    #[test]
    fn csv_round_trip_keeps_undefined_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        write_metric_csv(&rows(), &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("instance_id,method,faithfulness,complexity,undefined_flag\n"));
        assert!(text.contains("0004,saliency,,4.00000000000000000e0,1"));
        assert_eq!(read_metric_csv(&p).unwrap(), rows());
    }

    #[test]
    fn summaries_exclude_undefined_and_order_methods() {
        let s = summarize_rows(&rows()).unwrap();
        let names: Vec<&str> = s[0].per_method.iter().map(|(m, _)| m.as_str()).collect();
        assert_eq!(names, ["saliency", WEIGHTED_AVERAGE_TAG, OPTIMIZER_LR_TAG]);
        let sal = &s[1].per_method[0].1;
        assert_eq!((sal.count, sal.undefined), (4, 1));
        assert_eq!(sal.mean, 4.5);
        assert!(s[0].test.as_ref().unwrap().p_value < 0.05);
        let h = headline(&s);
        assert_eq!(h.len(), 3);
        assert_eq!(h[0].instances, 5);
        assert!(format_headline(&h, &s).contains("Kruskal-Wallis (faithfulness)"));
    }
}
