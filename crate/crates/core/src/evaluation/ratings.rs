//! Listener judgments and their aggregation.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::stats::{mean_interval, wilson, MeanInterval, Proportion};

pub const RATINGS_CSV_HEADER: [&str; 6] = [
    "listener_id",
    "sample_id",
    "system_id",
    "axis",
    "value",
    "timestamp",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Naturalness,
    Accentedness,
    Similarity,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Naturalness, Axis::Accentedness, Axis::Similarity];

    /// Inclusive value range of the rating scale.
    pub fn scale(self) -> (i64, i64) {
        match self {
            Axis::Naturalness => (1, 5),
            Axis::Accentedness => (1, 9),
            Axis::Similarity => (1, 4),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Naturalness => "naturalness",
            Axis::Accentedness => "accentedness",
            Axis::Similarity => "similarity",
        }
    }

    pub fn validate(self, value: i64) -> Result<()> {
        let (lo, hi) = self.scale();
        if (lo..=hi).contains(&value) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{self} rating {value} outside [{lo}, {hi}]"
            )))
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown axis {s:?}")))
    }
}

/// Four-point speaker similarity answer, encoded 1..=4.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimilarityAnswer {
    DifferentSure = 1,
    DifferentUnsure = 2,
    SameUnsure = 3,
    SameSure = 4,
}

impl SimilarityAnswer {
    pub fn from_value(v: i64) -> Result<Self> {
        Ok(match v {
            1 => Self::DifferentSure,
            2 => Self::DifferentUnsure,
            3 => Self::SameUnsure,
            4 => Self::SameSure,
            _ => {
                return Err(Error::invalid(format!(
                    "similarity rating {v} outside [1, 4]"
                )))
            }
        })
    }

    pub fn is_same(self) -> bool {
        matches!(self, Self::SameUnsure | Self::SameSure)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub listener_id: String,
    pub sample_id: String,
    pub system_id: String,
    pub axis: Axis,
    pub value: i64,
    /// RFC 3339 time of submission.
    pub timestamp: String,
}

impl RatingRecord {
    pub fn validate(&self) -> Result<()> {
        self.axis.validate(self.value)
    }
}

/// Mean and 95% t-interval of the records on `axis`.
pub fn aggregate_ratings(records: &[RatingRecord], axis: Axis) -> Result<MeanInterval> {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.axis == axis)
        .map(|r| r.value as f64)
        .collect();
    if values.is_empty() {
        return Err(Error::Statistics(format!("no {axis} ratings")));
    }
    mean_interval(&values)
}

/// Share of similarity records answered "same" (sure or unsure), with a Wilson interval.
pub fn similarity_percentage(records: &[RatingRecord]) -> Result<Proportion> {
    let mut same = 0;
    let mut n = 0;
    for r in records.iter().filter(|r| r.axis == Axis::Similarity) {
        n += 1;
        same += usize::from(SimilarityAnswer::from_value(r.value)?.is_same());
    }
    if n == 0 {
        return Err(Error::Statistics("no similarity ratings".into()));
    }
    wilson(same, n)
}

pub fn read_ratings_csv<R: Read>(reader: R) -> Result<Vec<RatingRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != RATINGS_CSV_HEADER {
        return Err(Error::invalid(format!(
            "unexpected ratings header {header:?}"
        )));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let rec: RatingRecord = row?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_ratings_csv<W: Write>(writer: W, records: &[RatingRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(writer);
    w.write_record(RATINGS_CSV_HEADER)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<ratings csv>", e))?;
    Ok(())
}
