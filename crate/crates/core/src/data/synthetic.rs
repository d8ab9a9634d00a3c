//! Seasonal multi-band scenarios with scripted, ground-truthed changes.
//!
//! Every class is a per-band sinusoid
//! `offset + amplitude * sin(2*pi*cycles*t/period + phase)`.
//! A sample follows its class template plus white noise, except inside the
//! scripted change events:
//!
//! * `temporal` adds a level shift to the affected bands. Pearson
//!   correlation is shift invariant, so inter-band relations survive.
//! * `spectral` reflects the seasonal deviation of some affected bands
//!   about their interval mean. Marginal interval means are unchanged while
//!   the correlation with the untouched bands flips sign.
//! * `temporal_spectral` swaps the whole interval to another class template.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnomalyKind, ChangeEvent, ChangeLog, SampleSet, TimeSeriesSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassTemplate {
    pub name: String,
    pub amplitude: Vec<f64>,
    pub phase: Vec<f64>,
    pub offset: Vec<f64>,
    /// Seasonal cycles per `period`.
    #[serde(default = "default_cycles")]
    pub cycles: f64,
}

fn default_cycles() -> f64 {
    1.0
}

impl ClassTemplate {
    pub fn value(&self, band: usize, step: usize, period: f64) -> f64 {
        let angle = std::f64::consts::TAU * self.cycles * step as f64 / period + self.phase[band];
        self.offset[band] + self.amplitude[band] * angle.sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    /// Index into the generated sample list.
    pub sample: usize,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub kind: AnomalyKind,
    #[serde(default)]
    pub bands: Vec<usize>,
    /// Level shift for temporal events, in raw units.
    #[serde(default)]
    pub magnitude: f64,
    /// Target class; defaults to the sample's own class.
    #[serde(default)]
    pub new_label: Option<String>,
}

fn default_spacing() -> i64 {
    4
}

fn default_period() -> f64 {
    92.0
}

fn default_per_class() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub bands: Vec<String>,
    pub steps: usize,
    pub classes: Vec<ClassTemplate>,
    pub noise_sigma: f64,
    #[serde(default)]
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_per_class")]
    pub samples_per_class: usize,
    /// Days between consecutive observations.
    #[serde(default = "default_spacing")]
    pub day_spacing: i64,
    /// Steps per seasonal cycle.
    #[serde(default = "default_period")]
    pub period: f64,
    /// Shared annotation step; defaults to the middle of the series.
    #[serde(default)]
    pub anchor_index: Option<usize>,
}

impl ScenarioConfig {
    pub fn anchor(&self) -> usize {
        self.anchor_index.unwrap_or(self.steps / 2)
    }

    pub fn sample_count(&self) -> usize {
        self.classes.len() * self.samples_per_class
    }

    pub fn class_of(&self, sample: usize) -> &ClassTemplate {
        &self.classes[sample / self.samples_per_class]
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.bands.len();
        if c < 2 {
            return Err(Error::Config("scenario needs at least 2 bands".into()));
        }
        if self.classes.is_empty() || self.samples_per_class == 0 {
            return Err(Error::Config(
                "scenario needs at least one class and sample".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.period > 0.0) {
            return Err(Error::Config(
                "noise_sigma must be >= 0 and period > 0".into(),
            ));
        }
        for cls in &self.classes {
            if cls.amplitude.len() != c || cls.phase.len() != c || cls.offset.len() != c {
                return Err(Error::Config(format!(
                    "class {}: template vectors must have {c} entries",
                    cls.name
                )));
            }
        }
        let anchor = self.anchor();
        if anchor >= self.steps {
            return Err(Error::Config(format!(
                "anchor index {anchor} outside series"
            )));
        }
        let mut per_sample: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for e in &self.events {
            if e.sample >= self.sample_count() {
                return Err(Error::Config(format!(
                    "event references unknown sample {}",
                    e.sample
                )));
            }
            if e.start >= e.end || e.end > self.steps {
                return Err(Error::Config(format!(
                    "event [{}, {}) outside series",
                    e.start, e.end
                )));
            }
            if (e.start..e.end).contains(&anchor) {
                return Err(Error::Config(format!(
                    "event [{}, {}) on sample {} contains the anchor step {anchor}",
                    e.start, e.end, e.sample
                )));
            }
            if let Some(&b) = e.bands.iter().find(|&&b| b >= c) {
                return Err(Error::Config(format!("event band {b} out of range")));
            }
            if e.kind != AnomalyKind::TemporalSpectral && e.bands.is_empty() {
                return Err(Error::Config(format!(
                    "{} event needs affected bands",
                    e.kind
                )));
            }
            if let Some(l) = &e.new_label {
                if !self.classes.iter().any(|k| &k.name == l) {
                    return Err(Error::Config(format!("event label {l:?} is not a class")));
                }
            } else if e.kind == AnomalyKind::TemporalSpectral {
                return Err(Error::Config(
                    "temporal_spectral event needs new_label".into(),
                ));
            }
            per_sample
                .entry(e.sample)
                .or_default()
                .push((e.start, e.end));
        }
        for (s, mut spans) in per_sample {
            spans.sort_unstable();
            if spans.windows(2).any(|w| w[1].0 < w[0].1) {
                return Err(Error::Config(format!("overlapping events on sample {s}")));
            }
        }
        Ok(())
    }
}

/// Noise-free signal for one sample, events applied.
pub fn clean_signal(config: &ScenarioConfig, sample: usize) -> Array2<f64> {
    let c = config.bands.len();
    let template = config.class_of(sample);
    let mut values = Array2::from_shape_fn((c, config.steps), |(b, t)| {
        template.value(b, t, config.period)
    });
    for e in config.events.iter().filter(|e| e.sample == sample) {
        match e.kind {
            AnomalyKind::Temporal => {
                for &b in &e.bands {
                    for t in e.start..e.end {
                        values[[b, t]] += e.magnitude;
                    }
                }
            }
            AnomalyKind::Spectral => {
                let mut bands = e.bands.clone();
                bands.sort_unstable();
                bands.dedup();
                let flipped: Vec<usize> = if bands.len() == 1 {
                    bands
                } else {
                    bands.into_iter().skip(1).step_by(2).collect()
                };
                for b in flipped {
                    let n = (e.end - e.start) as f64;
                    let mean = (e.start..e.end).map(|t| values[[b, t]]).sum::<f64>() / n;
                    for t in e.start..e.end {
                        values[[b, t]] = 2.0 * mean - values[[b, t]];
                    }
                }
            }
            AnomalyKind::TemporalSpectral => {
                let label = e.new_label.as_deref().unwrap_or(&template.name);
                let target = config
                    .classes
                    .iter()
                    .find(|k| k.name == label)
                    .expect("validated label");
                for b in 0..c {
                    for t in e.start..e.end {
                        values[[b, t]] = target.value(b, t, config.period);
                    }
                }
            }
        }
    }
    values
}

pub fn generate_synthetic(config: &ScenarioConfig, seed: u64) -> Result<SampleSet> {
    config.validate()?;
    let c = config.bands.len();
    let normal = Normal::new(0.0, config.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let timestamps: Vec<i64> = (0..config.steps as i64)
        .map(|i| i * config.day_spacing)
        .collect();
    let mut samples = Vec::with_capacity(config.sample_count());
    let mut change_logs = BTreeMap::new();
    for i in 0..config.sample_count() {
        let mut values = clean_signal(config, i);
        for v in values.iter_mut() {
            *v += normal.sample(&mut rng);
        }
        let id = format!("s{i:03}");
        let class = &config.class_of(i).name;
        let mut events: Vec<ChangeEvent> = config
            .events
            .iter()
            .filter(|e| e.sample == i)
            .map(|e| ChangeEvent {
                start_index: e.start,
                end_index: e.end,
                anomaly_kind: e.kind,
                affected_bands: if e.kind == AnomalyKind::TemporalSpectral {
                    (0..c).collect()
                } else {
                    e.bands.clone()
                },
                new_label: e.new_label.clone().unwrap_or_else(|| class.clone()),
            })
            .collect();
        events.sort_by_key(|e| e.start_index);
        change_logs.insert(id.clone(), ChangeLog { events });
        samples.push(TimeSeriesSample::new(
            id,
            config.bands.clone(),
            timestamps.clone(),
            values,
            config.anchor(),
            class.clone(),
        )?);
    }
    let vocabulary = config.classes.iter().map(|k| k.name.clone()).collect();
    SampleSet::new(samples, change_logs, vocabulary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(events: Vec<EventSpec>) -> ScenarioConfig {
        ScenarioConfig {
            bands: (0..6).map(|b| format!("B{b}")).collect(),
            steps: 368,
            classes: vec![
                ClassTemplate {
                    name: "marsh".into(),
                    amplitude: vec![0.1, 0.1, 0.1, 0.2, 0.2, 0.1],
                    phase: vec![0.0; 6],
                    offset: vec![0.3; 6],
                    cycles: 1.0,
                },
                ClassTemplate {
                    name: "water".into(),
                    amplitude: vec![0.05; 6],
                    phase: vec![1.0; 6],
                    offset: vec![0.1; 6],
                    cycles: 1.0,
                },
            ],
            noise_sigma: 0.01,
            events,
            seed: 0,
            samples_per_class: 2,
            day_spacing: 4,
            period: 92.0,
            anchor_index: Some(40),
        }
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn no_events_is_template_plus_noise() {
        let cfg = two_class(vec![]);
        let set = generate_synthetic(&cfg, 3).unwrap();
        assert!(set.change_logs.values().all(|l| l.events.is_empty()));
        let s = &set.samples[0];
        let resid: Vec<f64> = s
            .values
            .indexed_iter()
            .map(|((b, t), v)| v - cfg.classes[0].value(b, t, 92.0))
            .collect();
        let sd = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        assert!((sd - 0.01).abs() < 0.001, "residual sd {sd}");
    }

    #[test]
    fn class_switch_is_logged_verbatim() {
        let cfg = two_class(vec![EventSpec {
            sample: 0,
            start: 120,
            end: 200,
            kind: AnomalyKind::TemporalSpectral,
            bands: vec![],
            magnitude: 0.0,
            new_label: Some("water".into()),
        }]);
        let set = generate_synthetic(&cfg, 1).unwrap();
        let log = &set.change_logs["s000"];
        assert_eq!(log.events.len(), 1);
        let e = &log.events[0];
        assert_eq!((e.start_index, e.end_index), (120, 200));
        assert_eq!(e.anomaly_kind, AnomalyKind::TemporalSpectral);
        assert_eq!(e.new_label, "water");
        assert_eq!(set.samples[0].anchor_label, "marsh");
    }

    #[test]
    fn spectral_event_breaks_correlation_keeps_means() {
        let mut cfg = two_class(vec![EventSpec {
            sample: 0,
            start: 100,
            end: 192,
            kind: AnomalyKind::Spectral,
            bands: vec![3, 4],
            magnitude: 0.0,
            new_label: None,
        }]);
        cfg.classes[0].phase = vec![0.0; 6];
        let set = generate_synthetic(&cfg, 5).unwrap();
        let s = &set.samples[0];
        let band = |b: usize| -> Vec<f64> { (100..192).map(|t| s.values[[b, t]]).collect() };
        let tmpl = |b: usize| -> Vec<f64> {
            (100..192)
                .map(|t| cfg.classes[0].value(b, t, 92.0))
                .collect()
        };
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        for b in [3, 4] {
            assert!((mean(&band(b)) - mean(&tmpl(b))).abs() < cfg.noise_sigma);
        }
        let before = pearson(&tmpl(3), &tmpl(4));
        let after = pearson(&band(3), &band(4));
        assert!(before > 0.9);
        assert!(
            after.signum() != before.signum() || (after - before).abs() > 0.5,
            "{before} -> {after}"
        );
    }

    #[test]
    fn rejects_bad_events() {
        let ev = |start, end| EventSpec {
            sample: 0,
            start,
            end,
            kind: AnomalyKind::Temporal,
            bands: vec![0],
            magnitude: 0.1,
            new_label: None,
        };
        assert!(generate_synthetic(&two_class(vec![ev(100, 150), ev(140, 160)]), 0).is_err());
        assert!(generate_synthetic(&two_class(vec![ev(30, 50)]), 0).is_err());
        assert!(generate_synthetic(&two_class(vec![ev(100, 150), ev(150, 160)]), 0).is_ok());
    }

    #[test]
    fn reproducible_bits() {
        let cfg = two_class(vec![]);
        assert_eq!(
            generate_synthetic(&cfg, 9).unwrap(),
            generate_synthetic(&cfg, 9).unwrap()
        );
        assert_ne!(
            generate_synthetic(&cfg, 9).unwrap(),
            generate_synthetic(&cfg, 10).unwrap()
        );
    }
}
