//! Reference table, correlation analysis and report rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::asr::SystemScore;
use super::ratings::{aggregate_ratings, similarity_percentage, Axis, RatingRecord};
use super::stats::{pearson, MeanInterval, Proportion};

/// Published results table: error rates in percent, ratings as mean and 95% half-width.
pub const REFERENCE_TABLE_CSV: &str = include_str!("../../data/table1.csv");

/// Reference correlations of accentedness with CER and WER over the 8 table rows.
pub const REFERENCE_CORRELATIONS: (f64, f64) = (0.413, 0.442);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub system: String,
    pub extractor: Option<String>,
    pub cer: f64,
    pub wer: f64,
    pub naturalness: f64,
    pub naturalness_ci: f64,
    pub similarity: Option<f64>,
    pub similarity_ci: Option<f64>,
    pub accentedness: f64,
    pub accentedness_ci: f64,
}

impl TableRow {
    pub fn label(&self) -> String {
        match &self.extractor {
            Some(e) => format!("{}/{}", self.system, e),
            None => self.system.clone(),
        }
    }
}

pub fn parse_table(csv_text: &str) -> Result<Vec<TableRow>> {
    let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<TableRow>, _>>()?;
    if rows.is_empty() {
        return Err(Error::invalid("results table has no rows"));
    }
    Ok(rows)
}

pub fn reference_table() -> Result<Vec<TableRow>> {
    parse_table(REFERENCE_TABLE_CSV)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correlations {
    pub accentedness_vs_cer: f64,
    pub accentedness_vs_wer: f64,
    pub n: usize,
}

/// Pearson correlation of accentedness with CER and with WER over all rows.
pub fn correlation_report(rows: &[TableRow]) -> Result<Correlations> {
    let acc: Vec<f64> = rows.iter().map(|r| r.accentedness).collect();
    let cer: Vec<f64> = rows.iter().map(|r| r.cer).collect();
    let wer: Vec<f64> = rows.iter().map(|r| r.wer).collect();
    Ok(Correlations {
        accentedness_vs_cer: pearson(&cer, &acc)?,
        accentedness_vs_wer: pearson(&wer, &acc)?,
        n: rows.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system_id: String,
    /// Pooled error rates as fractions.
    pub cer: Option<f64>,
    pub wer: Option<f64>,
    pub scored: usize,
    pub excluded: usize,
    pub naturalness: Option<MeanInterval>,
    pub accentedness: Option<MeanInterval>,
    pub similarity: Option<Proportion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub systems: Vec<SystemReport>,
    /// Present when at least 3 systems have both error rates and accentedness.
    pub correlations: Option<Correlations>,
}

/// Combines ASR scores and listener ratings per system id.
pub fn build_report(
    scores: &BTreeMap<String, SystemScore>,
    ratings: &[RatingRecord],
) -> Result<EvalReport> {
    let mut by_system: BTreeMap<String, Vec<RatingRecord>> = BTreeMap::new();
    for r in ratings {
        r.validate()?;
        by_system
            .entry(r.system_id.clone())
            .or_default()
            .push(r.clone());
    }
    let ids: std::collections::BTreeSet<&String> = scores.keys().chain(by_system.keys()).collect();
    let empty = Vec::new();
    let mut systems = Vec::new();
    for id in ids {
        let recs = by_system.get(id).unwrap_or(&empty);
        let has = |axis: Axis| recs.iter().any(|r| r.axis == axis);
        let score = scores.get(id);
        systems.push(SystemReport {
            system_id: id.clone(),
            cer: score.map(|s| s.cer),
            wer: score.map(|s| s.wer),
            scored: score.map_or(0, |s| s.per_utterance.len()),
            excluded: score.map_or(0, |s| s.exclusions.len()),
            naturalness: has(Axis::Naturalness)
                .then(|| aggregate_ratings(recs, Axis::Naturalness))
                .transpose()?,
            accentedness: has(Axis::Accentedness)
                .then(|| aggregate_ratings(recs, Axis::Accentedness))
                .transpose()?,
            similarity: has(Axis::Similarity)
                .then(|| similarity_percentage(recs))
                .transpose()?,
        });
    }
    let points: Vec<(f64, f64, f64)> = systems
        .iter()
        .filter_map(|s| Some((s.cer?, s.wer?, s.accentedness?.mean)))
        .collect();
    let correlations = if points.len() >= 3 {
        let acc: Vec<f64> = points.iter().map(|p| p.2).collect();
        let cer: Vec<f64> = points.iter().map(|p| p.0).collect();
        let wer: Vec<f64> = points.iter().map(|p| p.1).collect();
        match (pearson(&cer, &acc), pearson(&wer, &acc)) {
            (Ok(c), Ok(w)) => Some(Correlations {
                accentedness_vs_cer: c,
                accentedness_vs_wer: w,
                n: points.len(),
            }),
            _ => None,
        }
    } else {
        None
    };
    Ok(EvalReport {
        systems,
        correlations,
    })
}

/// `mean±half` with two decimals, e.g. `4.18±0.19`.
pub fn format_mean(m: &MeanInterval) -> String {
    match m.half_width {
        Some(h) => format!("{:.2}±{:.2}", m.mean, h),
        None => format!("{:.2}±n/a", m.mean),
    }
}

/// `percent±half` with one decimal, e.g. `28.7±6.7`.
pub fn format_percent(p: &Proportion) -> String {
    format!("{:.1}±{:.1}", p.percent, p.half_width)
}

pub fn render_table(report: &EvalReport) -> String {
    let opt = |s: Option<String>| s.unwrap_or_else(|| "--".into());
    let rows: Vec<[String; 6]> = report
        .systems
        .iter()
        .map(|s| {
            [
                s.system_id.clone(),
                opt(s.cer.map(|v| format!("{:.1}", 100.0 * v))),
                opt(s.wer.map(|v| format!("{:.1}", 100.0 * v))),
                opt(s.naturalness.as_ref().map(format_mean)),
                opt(s.similarity.as_ref().map(format_percent)),
                opt(s.accentedness.as_ref().map(format_mean)),
            ]
        })
        .collect();
    let header = [
        "System",
        "CER",
        "WER",
        "Naturalness",
        "Similarity",
        "Accentedness",
    ];
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&mut out, &header.map(String::from));
    for r in &rows {
        line(&mut out, r);
    }
    if let Some(c) = &report.correlations {
        let _ = writeln!(
            out,
            "accentedness vs CER r = {:.3}, vs WER r = {:.3} (n = {})",
            c.accentedness_vs_cer, c.accentedness_vs_wer, c.n
        );
    }
    out
}
