//! Cross-seed aggregation of metrics.csv files.

use std::fmt::Write as _;
use std::path::Path;

use super::{MetricRow, RunHeader};
use crate::error::{Error, Result};

pub fn read_metrics_csv(path: &Path) -> Result<(RunHeader, Vec<MetricRow>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text
        .lines()
        .next()
        .and_then(RunHeader::parse_comment)
        .ok_or_else(|| Error::format(path, "missing run_id/config_hash header line"))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<MetricRow>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((header, rows))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub condition: String,
    pub metric: String,
    pub mean: f64,
    /// Population standard deviation across runs.
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub config_hash: String,
    pub runs: Vec<String>,
    pub rows: Vec<AggregateRow>,
}

fn keys(rows: &[MetricRow]) -> Vec<(String, String)> {
    let mut k: Vec<(String, String)> = rows.iter().map(|r| (r.condition.clone(), r.metric.clone())).collect();
    k.sort();
    k.dedup();
    k
}

/// Mean ± std per (condition, metric); each run contributes the mean of its
/// own rows for a key. Refuses runs with different config hashes or metric sets.
pub fn aggregate(runs: &[(RunHeader, Vec<MetricRow>)]) -> Result<Report> {
    let (first, first_rows) = runs.first().ok_or_else(|| Error::Config("report needs at least one run".into()))?;
    for (h, _) in &runs[1..] {
        if h.config_hash != first.config_hash {
            return Err(Error::Config(format!(
                "config hashes differ: {} has {}, {} has {}",
                first.run_id, first.config_hash, h.run_id, h.config_hash
            )));
        }
    }
    let expected = keys(first_rows);
    for (h, rows) in &runs[1..] {
        let got = keys(rows);
        if got != expected {
            let missing: Vec<String> = expected.iter().filter(|k| !got.contains(k)).map(|(c, m)| format!("{c}/{m}")).collect();
            let extra: Vec<String> = got.iter().filter(|k| !expected.contains(k)).map(|(c, m)| format!("{c}/{m}")).collect();
            return Err(Error::Config(format!(
                "metric sets differ for {}: missing {missing:?}, extra {extra:?}",
                h.run_id
            )));
        }
    }
    // first-seen order of the first run
    let mut order: Vec<(String, String)> = Vec::new();
    for r in first_rows {
        let k = (r.condition.clone(), r.metric.clone());
        if !order.contains(&k) {
            order.push(k);
        }
    }
    let rows = order
        .into_iter()
        .map(|(condition, metric)| {
            let values: Vec<f64> = runs
                .iter()
                .map(|(_, rows)| {
                    let v: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.condition == condition && r.metric == metric)
                        .map(|r| r.value)
                        .collect();
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            AggregateRow {
                condition,
                metric,
                mean,
                std: var.sqrt(),
                n,
            }
        })
        .collect();
    Ok(Report {
        config_hash: first.config_hash.clone(),
        runs: runs.iter().map(|(h, _)| h.run_id.clone()).collect(),
        rows,
    })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("condition,metric,mean,std,n\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.condition, r.metric, r.mean, r.std, r.n);
        }
        s
    }

    /// Fixed-width table for terminals.
    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.condition.len()).max().unwrap_or(9).max(9);
        let mut s = format!("{:<w$}  {:<14}  {:>10}  {:>10}\n", "condition", "metric", "mean", "std");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:<14}  {:>10.4}  {:>10.4}", r.condition, r.metric, r.mean, r.std);
        }
        s
    }
}
