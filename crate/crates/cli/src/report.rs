//! Result tables: one row per run label, recall@k columns per evaluation
//! set. Text for reading, JSON for machines.

use std::collections::BTreeMap;
use std::fmt::Write;

use anyhow::{bail, Context, Result};
use placerec_core::evaluator::{parse_kv, RecallReport};
use serde::{Deserialize, Serialize};

/// One evaluation as written by `eval` into `report.kv`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub set: String,
    /// Conv-AP output channels, when the head has them.
    pub d: Option<usize>,
    /// Pooling grid as `s1xs2`.
    pub s: Option<String>,
    pub report: RecallReport,
}

impl RunResult {
    pub fn to_kv(&self) -> String {
        let mut s = self.report.to_kv();
        let _ = writeln!(s, "label={}", self.label);
        let _ = writeln!(s, "set={}", self.set);
        if let Some(d) = self.d {
            let _ = writeln!(s, "d={d}");
        }
        if let Some(grid) = &self.s {
            let _ = writeln!(s, "s={grid}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let report = RecallReport::from_kv(text)?;
        let label = kv.get("label").context("report lacks a label")?.clone();
        Ok(Self {
            label,
            set: kv.get("set").cloned().unwrap_or_else(|| "test".into()),
            d: kv.get("d").map(|d| d.parse()).transpose().context("bad d")?,
            s: kv.get("s").cloned(),
            report,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub d: Option<usize>,
    pub s: Option<String>,
    /// `values[set][i]` is recall@`ks[i]` on that set.
    pub values: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub ks: Vec<usize>,
    pub sets: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Assembles runs into a table. Rows are ordered by label, sets by name.
pub fn report_table(runs: &[RunResult]) -> Result<ReportTable> {
    let Some(first) = runs.first() else {
        bail!("no results to report");
    };
    let ks = first.report.ks.clone();
    let mut rows: BTreeMap<String, ReportRow> = BTreeMap::new();
    for r in runs {
        if r.report.ks != ks {
            bail!("run {:?} reports ks {:?}, expected {:?}", r.label, r.report.ks, ks);
        }
        let row = rows.entry(r.label.clone()).or_insert_with(|| ReportRow {
            label: r.label.clone(),
            d: r.d,
            s: r.s.clone(),
            values: BTreeMap::new(),
        });
        if row.d != r.d || row.s != r.s {
            bail!("label {:?} is used for different heads", r.label);
        }
        let values = ks.iter().map(|k| r.report.recall(*k).expect("ks checked")).collect();
        if row.values.insert(r.set.clone(), values).is_some() {
            bail!("label {:?} has two results on set {:?}", r.label, r.set);
        }
    }
    let mut sets: Vec<String> = runs.iter().map(|r| r.set.clone()).collect();
    sets.sort();
    sets.dedup();
    Ok(ReportTable {
        ks,
        sets,
        rows: rows.into_values().collect(),
    })
}

impl ReportTable {
    /// Fixed-width text, recall in percent.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let mut head = format!("{:<width$}  {:>5}  {:>5}", "label", "d", "s");
        for set in &self.sets {
            for k in &self.ks {
                head += &format!("  {:>10}", format!("{set} R@{k}"));
            }
        }
        let mut out = head.trim_end().to_owned();
        out.push('\n');
        for r in &self.rows {
            let dash = || "-".to_owned();
            let mut line = format!(
                "{:<width$}  {:>5}  {:>5}",
                r.label,
                r.d.map_or_else(dash, |d| d.to_string()),
                r.s.clone().unwrap_or_else(dash)
            );
            for set in &self.sets {
                match r.values.get(set) {
                    Some(v) => v.iter().for_each(|x| line += &format!("  {:>10.2}", 100.0 * x)),
                    None => self.ks.iter().for_each(|_| line += &format!("  {:>10}", "-")),
                }
            }
            out += line.trim_end();
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
