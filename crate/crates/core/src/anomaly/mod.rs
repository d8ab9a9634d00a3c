//! Reconstruction scoring, threshold detection and Gibbs attribution.

mod dump;

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::data::{covering_starts, TimeSeriesSample, Window};
use crate::error::{Error, Result};
use crate::vae::{HtsVaeModel, PosteriorNoise};

pub use dump::{
    read_score_csv, score_rows, write_detection_json, write_score_csv, DetectionSummary, ScoreRow,
};

/// Per-cell negative log-likelihoods of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    /// `C x W`
    pub scores: Array2<f64>,
    pub sample_id: String,
    pub start_index: usize,
}

impl ScoreMatrix {
    pub fn total(&self) -> f64 {
        self.scores.sum()
    }

    pub fn cell_mean(&self) -> f64 {
        self.scores.mean().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    /// Mean over training windows of the summed per-cell score.
    pub b: f64,
    pub n_windows: usize,
    pub cells_per_window: usize,
    /// Std of the per-window sums.
    pub std: f64,
    /// `(probability, value)` of the per-window sums.
    pub quantiles: Vec<(f64, f64)>,
    /// Sorted per-cell training scores, one list per band.
    pub cell_scores: Vec<Vec<f64>>,
}

impl BaselineScore {
    /// `b` expressed per cell.
    pub fn per_cell(&self) -> f64 {
        self.b / self.cells_per_window as f64
    }

    /// Per-band cell threshold at quantile `q`, pooled over bands unless
    /// `per_band`.
    pub fn cell_thresholds(&self, q: f64, per_band: bool) -> Result<Vec<f64>> {
        check_quantile(q)?;
        if per_band {
            return Ok(self
                .cell_scores
                .iter()
                .map(|v| quantile_sorted(v, q))
                .collect());
        }
        let mut pooled: Vec<f64> = self.cell_scores.iter().flatten().copied().collect();
        pooled.sort_by(f64::total_cmp);
        let t = quantile_sorted(&pooled, q);
        Ok(vec![t; self.cell_scores.len()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub quantile: f64,
    /// Separate quantile per band instead of one pooled threshold.
    pub per_band: bool,
    /// Explicit cell threshold overriding the quantile.
    pub threshold: Option<f64>,
    /// Drop flagged runs shorter than this many steps.
    pub min_run: usize,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            quantile: 0.99,
            per_band: false,
            threshold: None,
            min_run: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyFlags {
    pub steps: Vec<bool>,
    /// `C x T`
    pub cells: Array2<bool>,
    /// Threshold used per band.
    pub thresholds: Vec<f64>,
}

impl AnomalyFlags {
    pub fn flagged_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, f)| **f)
            .map(|(t, _)| t)
            .collect()
    }

    /// Maximal runs of flagged steps as `[start, end)`.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        runs(&self.steps)
    }
}

pub(crate) fn runs(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, flags.len()));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GibbsConfig {
    /// Maximum sweeps `M`.
    pub max_sweeps: usize,
    /// Monte Carlo draws for the re-scored `S^r`.
    pub score_draws: usize,
    pub seed: u64,
}

impl Default for GibbsConfig {
    fn default() -> Self {
        GibbsConfig {
            max_sweeps: 10,
            score_draws: 40,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// `S^0 - S^r`
    pub attribution: Array2<f64>,
    pub s0: Array2<f64>,
    pub sr: Array2<f64>,
    /// Cells treated as anomalous.
    pub anomalous: Array2<bool>,
    /// Window after imputation.
    pub imputed: Array2<f64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Per-cell mean of `S^r` after each sweep.
    pub sweep_means: Vec<f64>,
}

fn check_quantile(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "quantile must lie in (0, 1), got {q}"
        )))
    }
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

fn check_model_window(model: &HtsVaeModel, x: &Window) -> Result<()> {
    model.check_window(&x.values)
}

/// `-(mean over draws of the per-cell log-likelihood)`.
pub fn score_window(
    model: &HtsVaeModel,
    x: &Window,
    draws: usize,
    seed: u64,
) -> Result<ScoreMatrix> {
    Ok(score_windows(model, std::slice::from_ref(x), draws, seed)?.remove(0))
}

/// Batched [`score_window`]; every window sees the same noise draws.
pub fn score_windows(
    model: &HtsVaeModel,
    windows: &[Window],
    draws: usize,
    seed: u64,
) -> Result<Vec<ScoreMatrix>> {
    for w in windows {
        check_model_window(model, w)?;
    }
    let values: Vec<Array2<f64>> = windows.iter().map(|w| w.values.clone()).collect();
    let recon = model.reconstruct(&values, draws, seed)?;
    windows
        .iter()
        .zip(recon)
        .map(|(w, r)| {
            let scores = r.log_lik.mapv(|v| -v);
            if scores.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "score of window {}@{}",
                    w.source_sample, w.start_index
                )));
            }
            Ok(ScoreMatrix {
                scores,
                sample_id: w.source_sample.clone(),
                start_index: w.start_index,
            })
        })
        .collect()
}

/// Baseline from already-computed training window scores.
pub fn baseline_from_scores(scores: &[ScoreMatrix]) -> Result<BaselineScore> {
    let first = scores
        .first()
        .ok_or_else(|| Error::Validation("baseline needs at least one training window".into()))?;
    let (bands, width) = first.scores.dim();
    let sums: Vec<f64> = scores.iter().map(ScoreMatrix::total).collect();
    let n = sums.len() as f64;
    let b = sums.iter().sum::<f64>() / n;
    let std = (sums.iter().map(|s| (s - b).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = sums.clone();
    sorted.sort_by(f64::total_cmp);
    let quantiles = [0.05, 0.25, 0.5, 0.75, 0.95]
        .iter()
        .map(|&p| (p, quantile_sorted(&sorted, p)))
        .collect();
    let mut cell_scores = vec![Vec::with_capacity(scores.len() * width); bands];
    for m in scores {
        if m.scores.dim() != (bands, width) {
            return Err(Error::Shape(
                "training score matrices differ in shape".into(),
            ));
        }
        for (c, row) in m.scores.rows().into_iter().enumerate() {
            cell_scores[c].extend(row.iter().copied());
        }
    }
    for v in &mut cell_scores {
        v.sort_by(f64::total_cmp);
    }
    Ok(BaselineScore {
        b,
        n_windows: scores.len(),
        cells_per_window: bands * width,
        std,
        quantiles,
        cell_scores,
    })
}

pub fn compute_baseline(
    model: &HtsVaeModel,
    train_windows: &[Window],
    draws: usize,
    seed: u64,
) -> Result<BaselineScore> {
    if train_windows.is_empty() {
        return Err(Error::Validation(
            "baseline needs at least one training window".into(),
        ));
    }
    baseline_from_scores(&score_windows(model, train_windows, draws, seed)?)
}

/// Mean of each cell's score over all windows containing it.
pub fn aggregate_overlaps(window_scores: &[ScoreMatrix], len: usize) -> Result<Array2<f64>> {
    let bands = window_scores
        .first()
        .map(|m| m.scores.nrows())
        .ok_or_else(|| Error::Validation("no window scores to aggregate".into()))?;
    let mut sum = Array2::<f64>::zeros((bands, len));
    let mut count = vec![0usize; len];
    for m in window_scores {
        let (c, w) = m.scores.dim();
        if c != bands || m.start_index + w > len {
            return Err(Error::Shape(format!(
                "window at {} ({c} x {w}) does not fit a {bands} x {len} sample",
                m.start_index
            )));
        }
        let mut view = sum.slice_mut(s![.., m.start_index..m.start_index + w]);
        view += &m.scores;
        for n in &mut count[m.start_index..m.start_index + w] {
            *n += 1;
        }
    }
    if let Some(t) = count.iter().position(|&n| n == 0) {
        return Err(Error::Validation(format!(
            "time step {t} is not covered by any window"
        )));
    }
    for (t, &n) in count.iter().enumerate() {
        sum.column_mut(t).mapv_inplace(|v| v / n as f64);
    }
    Ok(sum)
}

/// Score every step of a (normalized) sample with overlapping windows.
pub fn score_sample(
    model: &HtsVaeModel,
    sample: &TimeSeriesSample,
    stride: usize,
    draws: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<ScoreMatrix>)> {
    let w = model.config.window;
    let starts = covering_starts(sample.len(), w, stride);
    if starts.is_empty() {
        return Err(Error::Validation(format!(
            "sample {} shorter than window ({} < {w})",
            sample.sample_id,
            sample.len()
        )));
    }
    let windows = windows_at(sample, &starts, w)?;
    let scores = score_windows(model, &windows, draws, seed)?;
    Ok((aggregate_overlaps(&scores, sample.len())?, scores))
}

pub(crate) fn windows_at(
    sample: &TimeSeriesSample,
    starts: &[usize],
    w: usize,
) -> Result<Vec<Window>> {
    starts
        .iter()
        .map(|&s| {
            Window::new(
                sample.values.slice(s![.., s..s + w]).to_owned(),
                &sample.sample_id,
                s,
            )
        })
        .collect()
}

pub fn detect(
    sample_scores: &Array2<f64>,
    baseline: &BaselineScore,
    cfg: &DetectionConfig,
) -> Result<AnomalyFlags> {
    check_quantile(cfg.quantile)?;
    let bands = sample_scores.nrows();
    if bands != baseline.cell_scores.len() {
        return Err(Error::Shape(format!(
            "scores have {bands} bands, baseline {}",
            baseline.cell_scores.len()
        )));
    }
    let thresholds = match cfg.threshold {
        Some(t) => vec![t; bands],
        None => baseline.cell_thresholds(cfg.quantile, cfg.per_band)?,
    };
    Ok(flag_cells(sample_scores, &thresholds, cfg.min_run))
}

/// Cell flagged iff score > its band threshold; step flagged iff any cell is.
pub fn flag_cells(scores: &Array2<f64>, thresholds: &[f64], min_run: usize) -> AnomalyFlags {
    let mut cells = Array2::from_shape_fn(scores.dim(), |(c, t)| scores[[c, t]] > thresholds[c]);
    let mut steps: Vec<bool> = cells
        .columns()
        .into_iter()
        .map(|col| col.iter().any(|&f| f))
        .collect();
    for (a, b) in runs(&steps) {
        if b - a < min_run {
            for t in a..b {
                steps[t] = false;
                cells.column_mut(t).fill(false);
            }
        }
    }
    AnomalyFlags {
        steps,
        cells,
        thresholds: thresholds.to_vec(),
    }
}

/// Impute anomalous cells one at a time with the model's posterior-mean
/// reconstruction, sweeping until the re-scored window reaches the baseline
/// level or `max_sweeps` is exhausted.
pub fn gibbs_attribute(
    model: &HtsVaeModel,
    x: &Window,
    s0: &ScoreMatrix,
    baseline: &BaselineScore,
    cell_thresholds: &[f64],
    cfg: &GibbsConfig,
) -> Result<AttributionResult> {
    check_model_window(model, x)?;
    if s0.scores.dim() != x.values.dim() {
        return Err(Error::Shape("S0 shape differs from the window".into()));
    }
    if cell_thresholds.len() != x.bands() {
        return Err(Error::Shape("one threshold per band required".into()));
    }
    let anomalous = Array2::from_shape_fn(s0.scores.dim(), |(c, t)| {
        s0.scores[[c, t]] > cell_thresholds[c]
    });
    let mut result = AttributionResult {
        attribution: Array2::zeros(s0.scores.dim()),
        s0: s0.scores.clone(),
        sr: s0.scores.clone(),
        anomalous: anomalous.clone(),
        imputed: x.values.clone(),
        iterations_used: 0,
        converged: false,
        sweep_means: Vec::new(),
    };
    let cells: Vec<(usize, usize)> = anomalous
        .indexed_iter()
        .filter(|(_, &a)| a)
        .map(|(i, _)| i)
        .collect();
    if cells.is_empty() {
        result.converged = true;
        return Ok(result);
    }
    let net = model.net(true)?;
    let noise = PosteriorNoise::zeros(1, &model.config)?;
    let target = baseline.per_cell();
    let mut current = x.values.clone();
    for sweep in 0..cfg.max_sweeps {
        let before = current.clone();
        for &(c, t) in &cells {
            let input = crate::embedding::windows_tensor([&current])?;
            let pass = net.pass(&input, &noise)?;
            let mean: f64 = pass.output.mean.get(0)?.get(t)?.get(c)?.to_scalar()?;
            if !mean.is_finite() {
                return Err(Error::NonFinite(format!(
                    "imputation at band {c}, step {t}, sweep {sweep}"
                )));
            }
            current[[c, t]] = mean;
        }
        let rescored = score_window(
            model,
            &Window::new(current.clone(), &x.source_sample, x.start_index)?,
            cfg.score_draws,
            cfg.seed,
        )?;
        result.iterations_used = sweep + 1;
        let mean = rescored.cell_mean();
        // a sweep that worsens the reconstruction is undone and ends the loop
        if result
            .sweep_means
            .last()
            .is_some_and(|&prev| mean > prev + STALL_TOLERANCE)
        {
            current = before;
            break;
        }
        result.sweep_means.push(mean);
        result.sr = rescored.scores;
        if rescored_reached(&result.sr, target) {
            result.converged = true;
            break;
        }
    }
    result.attribution = &result.s0 - &result.sr;
    result.imputed = current;
    Ok(result)
}

const STALL_TOLERANCE: f64 = 1e-6;

fn rescored_reached(sr: &Array2<f64>, per_cell_baseline: f64) -> bool {
    sr.mean().is_some_and(|m| m <= per_cell_baseline)
}

/// Attribution over a whole sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAttribution {
    pub sample_id: String,
    /// `C x T`, zero outside attributed windows.
    pub attribution: Array2<f64>,
    pub s0: Array2<f64>,
    pub sr: Array2<f64>,
    /// Steps inside at least one attributed window.
    pub covered: Vec<bool>,
    /// Start index of each attributed window with its sweep count and
    /// convergence.
    pub windows: Vec<(usize, usize, bool)>,
}

impl SampleAttribution {
    pub fn converged(&self) -> bool {
        self.windows.iter().all(|w| w.2)
    }
}

/// Window starts of stride `W` tiling each flagged run, clamped to the
/// sample.
pub fn attribution_starts(flags: &AnomalyFlags, window: usize) -> Vec<usize> {
    let len = flags.steps.len();
    if len < window {
        return Vec::new();
    }
    let mut starts = std::collections::BTreeSet::new();
    for (a, b) in flags.runs() {
        let mut s = a;
        loop {
            starts.insert(s.min(len - window));
            if s + window >= b {
                break;
            }
            s += window;
        }
    }
    starts.into_iter().collect()
}

/// Gibbs attribution of every flagged run; cells covered by several windows
/// average their per-window results.
pub fn attribute_sample(
    model: &HtsVaeModel,
    sample: &TimeSeriesSample,
    flags: &AnomalyFlags,
    baseline: &BaselineScore,
    cfg: &GibbsConfig,
) -> Result<SampleAttribution> {
    let (bands, len) = sample.values.dim();
    let w = model.config.window;
    let starts = attribution_starts(flags, w);
    let windows = windows_at(sample, &starts, w)?;
    let s0s = score_windows(model, &windows, cfg.score_draws, cfg.seed)?;
    let mut sums: BTreeMap<&str, Array2<f64>> = ["as", "s0", "sr"]
        .into_iter()
        .map(|k| (k, Array2::zeros((bands, len))))
        .collect();
    let mut count = vec![0usize; len];
    let mut meta = Vec::with_capacity(windows.len());
    for (win, s0) in windows.iter().zip(&s0s) {
        let r = gibbs_attribute(model, win, s0, baseline, &flags.thresholds, cfg)?;
        let range = s![.., win.start_index..win.start_index + w];
        for (k, m) in [("as", &r.attribution), ("s0", &r.s0), ("sr", &r.sr)] {
            let mut view = sums.get_mut(k).expect("key").slice_mut(range);
            view += m;
        }
        for n in &mut count[win.start_index..win.start_index + w] {
            *n += 1;
        }
        meta.push((win.start_index, r.iterations_used, r.converged));
    }
    for m in sums.values_mut() {
        for (t, &n) in count.iter().enumerate() {
            if n > 1 {
                m.column_mut(t).mapv_inplace(|v| v / n as f64);
            }
        }
    }
    Ok(SampleAttribution {
        sample_id: sample.sample_id.clone(),
        attribution: sums.remove("as").expect("key"),
        s0: sums.remove("s0").expect("key"),
        sr: sums.remove("sr").expect("key"),
        covered: count.iter().map(|&n| n > 0).collect(),
        windows: meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sm(scores: Array2<f64>, start: usize) -> ScoreMatrix {
        ScoreMatrix {
            scores,
            sample_id: "s".into(),
            start_index: start,
        }
    }

    #[test]
    fn quantile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.875), 4.5);
    }

    #[test]
    fn baseline_of_one_window_is_its_sum() {
        let b = baseline_from_scores(&[sm(array![[1.0, 2.0], [3.0, 4.0]], 0)]).unwrap();
        assert_eq!(b.b, 10.0);
        assert_eq!(b.per_cell(), 2.5);
        assert!(baseline_from_scores(&[]).is_err());
    }

    #[test]
    fn baseline_invariant_under_duplication() {
        let list = vec![
            sm(array![[1.0, 2.5]], 0),
            sm(array![[0.5, 7.0]], 1),
            sm(array![[3.0, -1.0]], 2),
        ];
        let twice: Vec<_> = list.iter().chain(list.iter()).cloned().collect();
        let a = baseline_from_scores(&list).unwrap();
        let b = baseline_from_scores(&twice).unwrap();
        assert!((a.b - b.b).abs() <= 1e-12 * a.b.abs());
    }

    #[test]
    fn aggregation_with_non_overlapping_windows_is_identity() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        let out = aggregate_overlaps(&[sm(a, 0), sm(b, 2)], 4).unwrap();
        assert_eq!(out, array![[1.0, 2.0, 5.0, 6.0], [3.0, 4.0, 7.0, 8.0]]);
    }

    #[test]
    fn aggregation_reports_uncovered_steps() {
        let err = aggregate_overlaps(&[sm(array![[1.0, 2.0]], 0)], 3).unwrap_err();
        assert!(err.to_string().contains("time step 2"));
    }

    #[test]
    fn detection_thresholds_and_quantile_errors() {
        let base = baseline_from_scores(&[sm(
            Array2::from_shape_fn((2, 50), |(c, t)| (c * 50 + t) as f64),
            0,
        )])
        .unwrap();
        let low = Array2::from_elem((2, 5), -1.0);
        let flags = detect(&low, &base, &DetectionConfig::default()).unwrap();
        assert!(flags.steps.iter().all(|f| !f));
        for q in [0.0, 1.0, 1.5] {
            let cfg = DetectionConfig {
                quantile: q,
                ..Default::default()
            };
            assert!(detect(&low, &base, &cfg).is_err());
        }
    }

    #[test]
    fn min_run_drops_short_runs() {
        let scores = array![[5.0, 0.0, 5.0, 5.0, 5.0, 0.0]];
        let f = flag_cells(&scores, &[1.0], 2);
        assert_eq!(f.steps, vec![false, false, true, true, true, false]);
        assert!(!f.cells[[0, 0]]);
    }

    #[test]
    fn attribution_windows_tile_runs() {
        let mut steps = vec![false; 100];
        for f in &mut steps[10..75] {
            *f = true;
        }
        steps[98] = true;
        let flags = AnomalyFlags {
            cells: Array2::from_elem((1, 100), false),
            steps,
            thresholds: vec![0.0],
        };
        assert_eq!(attribution_starts(&flags, 30), vec![10, 40, 70]);
        assert_eq!(runs(&flags.steps), vec![(10, 75), (98, 99)]);
    }
}
