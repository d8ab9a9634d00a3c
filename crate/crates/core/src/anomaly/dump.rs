use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnomalyFlags, SampleAttribution};
use crate::error::{Error, Result};

/// One row of the score/attribution dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub band: String,
    pub time_index: usize,
    pub s0: f64,
    pub sr: f64,
    #[serde(rename = "as")]
    pub attribution: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub sample_id: String,
    pub thresholds: Vec<f64>,
    pub flagged_steps: Vec<usize>,
    pub converged: bool,
}

impl DetectionSummary {
    pub fn new(
        sample_id: &str,
        flags: &AnomalyFlags,
        attribution: Option<&SampleAttribution>,
    ) -> Self {
        DetectionSummary {
            sample_id: sample_id.to_string(),
            thresholds: flags.thresholds.clone(),
            flagged_steps: flags.flagged_steps(),
            converged: attribution.is_none_or(SampleAttribution::converged),
        }
    }
}

/// Rows for one sample; `S^r` and AS default to `S^0` and 0 where no
/// attribution ran.
pub fn score_rows(
    sample_id: &str,
    bands: &[String],
    scores: &ndarray::Array2<f64>,
    flags: &AnomalyFlags,
    attribution: Option<&SampleAttribution>,
) -> Vec<ScoreRow> {
    let (c, len) = scores.dim();
    let mut rows = Vec::with_capacity(c * len);
    for (b, band) in bands.iter().enumerate().take(c) {
        for t in 0..len {
            let (sr, attr) = match attribution {
                Some(a) if a.covered[t] => (a.sr[[b, t]], a.attribution[[b, t]]),
                _ => (scores[[b, t]], 0.0),
            };
            rows.push(ScoreRow {
                sample_id: sample_id.to_string(),
                band: band.clone(),
                time_index: t,
                s0: scores[[b, t]],
                sr,
                attribution: attr,
                flagged: flags.cells[[b, t]],
            });
        }
    }
    rows
}

pub fn write_score_csv(rows: &[ScoreRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_score_csv(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                file: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn write_detection_json(summary: &DetectionSummary, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(summary)?).map_err(|e| Error::io(path, e))
}
