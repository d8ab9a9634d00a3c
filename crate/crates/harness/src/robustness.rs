//! Degraded-input protocols scored against the already trained detectors.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use tasgen_core::anomaly::AnomalyFlags;
use tasgen_core::data::{interpolate_missing, random_missing_mask, TimeSeriesSample};

use crate::artifacts::Workspace;
use crate::config::PipelineConfig;
use crate::error::{HarnessError, Result};
use crate::pipeline::{
    detect_all, detection_counts, load_scores, metadata, score_all, stage, sub_seed, truth_flags,
    Detectors, EvaluationReport, Prepared, REPORT,
};

pub const TABLE: &str = "robustness/table.csv";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Protocol {
    Full,
    /// Keep every k-th observation.
    Decimate(usize),
    /// Drop this fraction of time steps and interpolate.
    Missing(f64),
}

impl Protocol {
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || HarnessError::Validation(format!("unknown robustness protocol {s:?}"));
        match s.split_once(':') {
            None if s == "full" => Ok(Protocol::Full),
            Some(("decimate", k)) => match k.parse().map_err(|_| bad())? {
                k @ (2 | 4 | 8) => Ok(Protocol::Decimate(k)),
                _ => Err(HarnessError::Validation(format!(
                    "decimation factor must be 2, 4 or 8 in {s:?}"
                ))),
            },
            Some(("missing", r)) => {
                let r: f64 = r.parse().map_err(|_| bad())?;
                if (0.0..1.0).contains(&r) {
                    Ok(Protocol::Missing(r))
                } else {
                    Err(HarnessError::Validation(format!(
                        "missing ratio must lie in [0, 1) in {s:?}"
                    )))
                }
            }
            _ => Err(bad()),
        }
    }

    fn dir(&self) -> String {
        self.to_string().replace(':', "-")
    }

    /// Masked cells and the steps at which detection is evaluated.
    fn degrade(
        &self,
        s: &TimeSeriesSample,
        seed: u64,
    ) -> Result<(Array2<bool>, Option<Vec<usize>>)> {
        let mut mask = Array2::from_elem(s.values.dim(), false);
        match *self {
            Protocol::Full => Ok((mask, None)),
            Protocol::Decimate(k) => {
                let kept: Vec<usize> = (0..s.len()).step_by(k).collect();
                for t in (0..s.len()).filter(|t| t % k != 0) {
                    mask.column_mut(t).fill(true);
                }
                Ok((mask, Some(kept)))
            }
            Protocol::Missing(r) => Ok((random_missing_mask(s, r, seed)?, None)),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Full => f.write_str("full"),
            Protocol::Decimate(k) => write!(f, "decimate:{k}"),
            Protocol::Missing(r) => write!(f, "missing:{r}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::parse(s)
    }
}

/// One row of the robustness table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOutcome {
    pub protocol: String,
    pub report: Option<EvaluationReport>,
    pub error: Option<String>,
}

fn missing_seed(cfg: &PipelineConfig, index: usize) -> u64 {
    sub_seed(cfg.seed, 1000 + index as u64)
}

/// Detection F1 of the trained detectors on degraded inputs.
pub fn run_protocol(
    cfg: &PipelineConfig,
    ws: &Workspace,
    p: &Prepared,
    det: &Detectors,
    protocol: Protocol,
) -> Result<EvaluationReport> {
    if protocol == Protocol::Full && ws.exists(REPORT) {
        return ws.read_json(REPORT);
    }
    let mut degraded = Vec::with_capacity(p.normalized.len());
    let mut eval_steps = BTreeMap::new();
    for (i, s) in p.normalized.iter().enumerate() {
        let (mask, steps) = protocol.degrade(s, missing_seed(cfg, i))?;
        degraded.push(interpolate_missing(s, &mask)?);
        if let Some(steps) = steps {
            eval_steps.insert(s.sample_id.clone(), steps);
        }
    }
    let scores = if protocol == Protocol::Full && ws.exists(crate::pipeline::SCORES) {
        load_scores(ws, p)?
    } else {
        score_all(cfg, det, &degraded)?
    };
    let flags: BTreeMap<String, AnomalyFlags> = detect_all(cfg, det, &degraded, &scores)?;
    let steps = flags
        .iter()
        .map(|(k, v)| (k.clone(), v.steps.clone()))
        .collect();
    let truth = truth_flags(&p.set);
    let counts = detection_counts(
        &steps,
        &truth,
        (!eval_steps.is_empty()).then_some(&eval_steps),
    )?;
    let dir = format!("robustness/{}", protocol.dir());
    ws.write_json(&format!("{dir}/flags.json"), &flags)?;
    let report = EvaluationReport {
        protocol: protocol.to_string(),
        f1_a: counts.f1(),
        precision_a: counts.precision(),
        recall_a: counts.recall(),
        detection_counts: counts,
        f1_s: None,
        relabel_counts: None,
        oa: None,
        kappa: None,
        per_class: Vec::new(),
        confusion: None,
        ablation: BTreeMap::new(),
        harmonic_f1_a: None,
        metadata: metadata(cfg, p)?,
    };
    ws.write_json(&format!("{dir}/report.json"), &report)?;
    Ok(report)
}

/// Run every protocol; a failing protocol is recorded and the rest continue.
pub fn robustness_suite(
    cfg: &PipelineConfig,
    ws: &Workspace,
    protocols: &[Protocol],
) -> Result<Vec<ProtocolOutcome>> {
    stage("robustness", || {
        let p = Prepared::load(ws)?;
        let det = Detectors::load(ws, &p)?;
        let mut out = Vec::new();
        for &protocol in protocols {
            log::info!("robustness protocol {protocol}");
            let outcome = match run_protocol(cfg, ws, &p, &det, protocol) {
                Ok(report) => ProtocolOutcome {
                    protocol: protocol.to_string(),
                    report: Some(report),
                    error: None,
                },
                Err(e) => {
                    log::error!("protocol {protocol} failed: {e}");
                    ProtocolOutcome {
                        protocol: protocol.to_string(),
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            out.push(outcome);
        }
        let mut table = String::from("protocol,f1_a,precision_a,recall_a,error\n");
        for o in &out {
            match (&o.report, &o.error) {
                (Some(r), _) => table.push_str(&format!(
                    "{},{},{},{},\n",
                    o.protocol, r.f1_a, r.precision_a, r.recall_a
                )),
                (None, e) => table.push_str(&format!(
                    "{},,,,{}\n",
                    o.protocol,
                    e.as_deref().unwrap_or("").replace(',', ";")
                )),
            }
        }
        ws.write_text(TABLE, &table)?;
        ws.write_json("robustness/suite.json", &out)?;
        ws.record_stage("robustness", &["robustness"])?;
        Ok(out)
    })
}

/// Parse the protocol list of a config.
pub fn protocols(cfg: &PipelineConfig) -> Result<Vec<Protocol>> {
    cfg.robustness.iter().map(|s| Protocol::parse(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_protocol_names() {
        assert_eq!(Protocol::parse("full").unwrap(), Protocol::Full);
        assert_eq!(
            Protocol::parse("decimate:4").unwrap(),
            Protocol::Decimate(4)
        );
        assert_eq!(
            Protocol::parse("missing:0.5").unwrap(),
            Protocol::Missing(0.5)
        );
        assert_eq!(Protocol::Missing(0.5).to_string(), "missing:0.5");
        for bad in ["decimate:3", "missing:1.5", "half", "missing:x"] {
            assert!(Protocol::parse(bad).unwrap_err().is_validation(), "{bad}");
        }
    }

    #[test]
    fn decimation_masks_dropped_steps() {
        let s = TimeSeriesSample::new(
            "a",
            vec!["b".into(), "c".into()],
            (0..8).collect(),
            Array2::from_shape_fn((2, 8), |(_, t)| t as f64),
            0,
            "x",
        )
        .unwrap();
        let (mask, steps) = Protocol::Decimate(4).degrade(&s, 0).unwrap();
        assert_eq!(steps.unwrap(), vec![0, 4]);
        assert_eq!(
            mask.row(0).to_vec(),
            vec![false, true, true, true, false, true, true, true]
        );
    }
}
