//! CSV output and cross-seed aggregation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::run::{CurvePoint, RunRecord};

pub const METRICS_HEADER: &str = "method,variant,seed,task_index,metric,value";
pub const CURVE_HEADER: &str = "step,split,loss,accuracy";

/// Six significant digits in `%g` style.
pub fn fmt_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    } else {
        trim(&format!("{v:.*}", (5 - exp) as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub variant: String,
    pub seed: u64,
    pub task_index: usize,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(method: &str, variant: &str, seed: u64, task_index: usize, metric: &str, value: f64) -> Self {
        MetricRow {
            method: method.into(),
            variant: variant.into(),
            seed,
            task_index,
            metric: metric.into(),
            value,
        }
    }
}

/// Accuracy after every task, plus final forgetting, backward transfer, selection accuracy and size.
pub fn record_rows(rec: &RunRecord) -> Vec<MetricRow> {
    let row = |t: usize, m: &str, v: f64| MetricRow::new(&rec.method, &rec.variant, rec.seed, t, m, v);
    let last = rec.matrix.tasks() - 1;
    let mut rows = Vec::new();
    for i in 0..rec.matrix.tasks() {
        let tallies: Vec<_> = (0..=i).filter_map(|j| rec.matrix.tally(i, j)).collect();
        if tallies.len() == i + 1 {
            if let Ok(a) = super::metrics::average_accuracy(&tallies) {
                rows.push(row(i, "avg_accuracy", a));
            }
        }
    }
    if rows.last().is_none_or(|r| r.task_index != last) {
        rows.push(row(last, "avg_accuracy", rec.avg_accuracy));
    }
    if let Some(f) = rec.forgetting {
        rows.push(row(last, "forgetting", f));
    }
    if let Some(b) = rec.backward_transfer {
        rows.push(row(last, "backward_transfer", b));
    }
    if let Some(s) = rec.expert_selection_accuracy {
        rows.push(row(last, "expert_selection_accuracy", s));
    }
    rows.push(row(last, "trainable_params", rec.trainable_params as f64));
    rows
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.method,
            r.variant,
            r.seed,
            r.task_index,
            r.metric,
            fmt_sig(r.value)
        )
        .unwrap();
    }
    out
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for p in points {
        writeln!(out, "{},{},{},{}", p.step, p.split, fmt_sig(p.loss), fmt_sig(p.accuracy)).unwrap();
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    write_text(path, &metrics_csv(rows))
}

pub fn write_curve(path: &Path, points: &[CurvePoint]) -> Result<()> {
    write_text(path, &curve_csv(points))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format(path, "missing metrics header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = || Error::format(path, format!("line {}: `{line}`", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            Ok(MetricRow {
                method: f[0].into(),
                variant: f[1].into(),
                seed: f[2].parse().map_err(|_| bad())?,
                task_index: f[3].parse().map_err(|_| bad())?,
                metric: f[4].into(),
                value: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Mean and sample standard deviation of one metric across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub method: String,
    pub variant: String,
    pub task_index: usize,
    pub metric: String,
    pub seeds: usize,
    pub mean: f64,
    /// `None` for a single seed.
    pub std: Option<f64>,
}

pub fn summarize(rows: &[MetricRow]) -> Vec<Summary> {
    let mut groups: BTreeMap<(String, String, usize, String), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.method.clone(), r.variant.clone(), r.task_index, r.metric.clone()))
            .or_default()
            .push(r.value);
    }
    groups
        .into_iter()
        .map(|((method, variant, task_index, metric), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = (v.len() > 1).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
            Summary {
                method,
                variant,
                task_index,
                metric,
                seeds: v.len(),
                mean,
                std,
            }
        })
        .collect()
}

pub fn summary_table(summaries: &[Summary]) -> String {
    let mut out = String::from("method,variant,task_index,metric,seeds,mean,std\n");
    for s in summaries {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.method,
            s.variant,
            s.task_index,
            s.metric,
            s.seeds,
            fmt_sig(s.mean),
            s.std.map_or("nan".into(), fmt_sig)
        )
        .unwrap();
    }
    out
}
