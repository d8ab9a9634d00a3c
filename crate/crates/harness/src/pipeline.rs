//! Stage-by-stage orchestration over an output directory.

use std::collections::BTreeMap;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};
use tasgen_core::anomaly::{
    self, attribute_sample, compute_baseline, detect, score_rows, score_sample, AnomalyFlags,
    BaselineScore, DetectionSummary, GibbsConfig, SampleAttribution,
};
use tasgen_core::data::{
    load_sample_set, save_sample_set, sliding_windows, synthetic::generate_synthetic,
    MinMaxNormalizer, SampleFormat, SampleSet, TimeSeriesSample, Window,
};
use tasgen_core::embedding::{curation_mse, pretrain_curation_from, CurationCheckpoint};
use tasgen_core::relabel::{
    fuse_features, relabel, significance_filter, train_classifier, write_labels_csv,
    DynamicLabelSequence, FeatureMode, LightweightClassifier,
};
use tasgen_core::vae::{
    load_checkpoint, save_checkpoint, train, write_metrics_csv, HtsVaeModel, TrainingHyper,
};

use crate::artifacts::{Workspace, LOG_DIR};
use crate::config::PipelineConfig;
use crate::error::{HarnessError, Result};
use crate::harmonic::harmonic_baseline_detect;
use crate::metrics::{oa_kappa, relabel_counts, ClassMetrics, ConfusionMatrix, FlagCounts};

pub const SAMPLES: &str = "data/samples.json";
pub const NORMALIZER: &str = "data/normalizer.json";
pub const CURATION: &str = "models/curation.json";
pub const FEATURE_MODEL: &str = "models/features.json";
pub const SCORES: &str = "scores/s0.csv";
pub const FLAGS: &str = "detection/flags.json";
pub const ATTRIBUTION: &str = "attribution/results.json";
pub const ATTRIBUTION_CSV: &str = "attribution/scores.csv";
pub const SIGNIFICANCE: &str = "relabel/significance.json";
pub const CLASSIFIER: &str = "relabel/classifier.json";
pub const LABELS_CSV: &str = "relabel/labels.csv";
pub const ABLATION: &str = "relabel/ablation.json";
pub const REPORT: &str = "report.json";

/// Deterministic per-stage seed.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn detector_path(class: &str) -> String {
    format!("models/detector-{}.json", file_safe(class))
}

pub fn baseline_path(class: &str) -> String {
    format!("models/baseline-{}.json", file_safe(class))
}

fn dynamic_path(sample_id: &str) -> String {
    format!("relabel/samples/{}.json", file_safe(sample_id))
}

fn summary_path(sample_id: &str) -> String {
    format!("attribution/samples/{}.json", file_safe(sample_id))
}

/// Run `f`, tagging any error with the stage name.
pub fn stage<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    f().map_err(|e| HarnessError::Stage {
        stage: name.to_string(),
        source: Box::new(e),
    })
}

/// Raw and normalized samples.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub set: SampleSet,
    pub normalizer: MinMaxNormalizer,
    pub normalized: Vec<TimeSeriesSample>,
}

impl Prepared {
    pub fn from_set(set: SampleSet, normalizer: MinMaxNormalizer) -> Result<Self> {
        let normalized = set
            .samples
            .iter()
            .map(|s| normalizer.apply(s))
            .collect::<tasgen_core::Result<Vec<_>>>()?;
        Ok(Prepared {
            set,
            normalizer,
            normalized,
        })
    }

    pub fn load(ws: &Workspace) -> Result<Self> {
        let set = load_sample_set(&ws.path(SAMPLES), SampleFormat::SingleJson)?;
        let normalizer = ws.read_json(NORMALIZER)?;
        Self::from_set(set, normalizer)
    }

    /// Classes that anchor at least one sample, in vocabulary order.
    pub fn anchor_classes(&self) -> Vec<String> {
        self.set
            .class_vocabulary
            .iter()
            .filter(|c| self.set.samples.iter().any(|s| &s.anchor_label == *c))
            .cloned()
            .collect()
    }
}

/// Windows lying within `radius` steps of each sample's anchor.
pub fn anchor_windows(
    samples: &[&TimeSeriesSample],
    window: usize,
    radius: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for s in samples {
        let len = s.len();
        if len < window {
            return Err(HarnessError::Validation(format!(
                "sample {} shorter than window",
                s.sample_id
            )));
        }
        let lo = s.anchor_index.saturating_sub(radius);
        let hi = (s.anchor_index + radius + 1).min(len);
        let starts: Vec<usize> = if hi - lo >= window {
            (lo..=hi - window).step_by(stride).collect()
        } else {
            vec![s.anchor_index.saturating_sub(window / 2).min(len - window)]
        };
        for st in starts {
            out.push(Window::new(
                s.values.slice(s![.., st..st + window]).to_owned(),
                &s.sample_id,
                st,
            )?);
        }
    }
    Ok(out)
}

fn feature_windows(p: &Prepared, window: usize, stride: usize) -> Result<Vec<Window>> {
    let mut out = Vec::new();
    for s in &p.normalized {
        out.extend(sliding_windows(s, window, stride)?);
    }
    Ok(out)
}

fn class_samples<'a>(p: &'a Prepared, class: &str) -> Vec<&'a TimeSeriesSample> {
    p.normalized
        .iter()
        .filter(|s| s.anchor_label == class)
        .collect()
}

fn detector_windows(cfg: &PipelineConfig, p: &Prepared, class: &str) -> Result<Vec<Window>> {
    anchor_windows(
        &class_samples(p, class),
        cfg.window(),
        cfg.windows.detector_radius,
        cfg.windows.detector_stride,
    )
}

pub fn stage_generate(cfg: &PipelineConfig, ws: &Workspace) -> Result<Prepared> {
    stage("generate", || {
        let set = match (&cfg.data.path, &cfg.data.scenario) {
            (Some(path), _) => {
                let format = match &cfg.data.format {
                    Some(f) => f.parse()?,
                    None if path.is_dir() => SampleFormat::CsvDir,
                    None => SampleFormat::SingleJson,
                };
                load_sample_set(path, format)?
            }
            (None, Some(scenario)) => generate_synthetic(scenario, scenario.seed)?,
            (None, None) => {
                return Err(HarnessError::Validation("no data source configured".into()))
            }
        };
        set.validate()?;
        let normalizer = MinMaxNormalizer::fit(set.samples.iter())?;
        save_sample_set(&set, &ws.prepare(SAMPLES)?, SampleFormat::SingleJson)?;
        ws.write_json(NORMALIZER, &normalizer)?;
        ws.record_stage("generate", &["data"])?;
        Prepared::from_set(set, normalizer)
    })
}

fn windows_values(w: &[Window]) -> Vec<Array2<f64>> {
    w.iter().map(|w| w.values.clone()).collect()
}

pub fn curation_path(class: &str) -> String {
    format!("models/curation-{}.json", file_safe(class))
}

fn pretrain_on(
    cfg: &PipelineConfig,
    p: &Prepared,
    windows: &[Window],
    seed: u64,
    name: &str,
    init: Option<&CurationCheckpoint>,
) -> Result<CurationCheckpoint> {
    let model_cfg = cfg
        .arch
        .model_config(p.set.band_names().len(), cfg.window());
    let hyper = TrainingHyper {
        epochs: cfg.windows.curation_epochs,
        seed,
        ..cfg.training.clone()
    };
    let values = windows_values(windows);
    let ckpt = pretrain_curation_from(&model_cfg, &values, &hyper, init)?;
    if !ckpt.converged {
        log::warn!("curation pretraining for {name} did not converge");
    }
    log::info!(
        "curation {name}: mse {:.3e} on {} windows",
        curation_mse(&ckpt, &values)?,
        values.len()
    );
    Ok(ckpt)
}

/// One curation path for the feature model plus one per detector class,
/// the latter fine-tuned from the former.
pub fn stage_pretrain(
    cfg: &PipelineConfig,
    ws: &Workspace,
    p: &Prepared,
) -> Result<CurationCheckpoint> {
    stage("pretrain", || {
        let windows = feature_windows(p, cfg.window(), cfg.windows.feature_stride)?;
        let ckpt = pretrain_on(cfg, p, &windows, sub_seed(cfg.seed, 1), "features", None)?;
        ckpt.save(&ws.prepare(CURATION)?)?;
        let mut written = vec![CURATION.to_string()];
        for (k, class) in p.anchor_classes().iter().enumerate() {
            let windows = detector_windows(cfg, p, class)?;
            let own = pretrain_on(
                cfg,
                p,
                &windows,
                sub_seed(cfg.seed, 30 + k as u64),
                class,
                Some(&ckpt),
            )?;
            let path = curation_path(class);
            own.save(&ws.prepare(&path)?)?;
            written.push(path);
        }
        let rels: Vec<&str> = written.iter().map(String::as_str).collect();
        ws.record_stage("pretrain", &rels)?;
        Ok(ckpt)
    })
}

fn train_one(
    cfg: &PipelineConfig,
    ws: &Workspace,
    p: &Prepared,
    curation: &CurationCheckpoint,
    windows: &[Window],
    seed: u64,
    name: &str,
) -> Result<HtsVaeModel> {
    let model_cfg = cfg
        .arch
        .model_config(p.set.band_names().len(), cfg.window());
    let mut model = HtsVaeModel::new(model_cfg, p.normalizer.clone(), seed)?;
    model.load_curation(curation)?;
    let hyper = TrainingHyper {
        seed: sub_seed(seed, 99),
        ..cfg.training.clone()
    };
    log::info!("training {name} on {} windows", windows.len());
    let out = train(&model, &windows_values(windows), &hyper)?;
    write_metrics_csv(
        &out.trace,
        &ws.prepare(&format!("{LOG_DIR}/train-{}.csv", file_safe(name)))?,
    )?;
    Ok(out.model)
}

pub fn stage_train(cfg: &PipelineConfig, ws: &Workspace, p: &Prepared) -> Result<()> {
    stage("train", || {
        let curation = CurationCheckpoint::load(&ws.path(CURATION))?;
        let fw = feature_windows(p, cfg.window(), cfg.windows.feature_stride)?;
        let features = train_one(
            cfg,
            ws,
            p,
            &curation,
            &fw,
            sub_seed(cfg.seed, 2),
            "features",
        )?;
        save_checkpoint(&features, &ws.prepare(FEATURE_MODEL)?)?;
        let mut written = vec![FEATURE_MODEL.to_string()];
        for (k, class) in p.anchor_classes().iter().enumerate() {
            let windows = detector_windows(cfg, p, class)?;
            let own = CurationCheckpoint::load(&ws.path(&curation_path(class)))?;
            let model = train_one(
                cfg,
                ws,
                p,
                &own,
                &windows,
                sub_seed(cfg.seed, 10 + k as u64),
                class,
            )?;
            let path = detector_path(class);
            save_checkpoint(&model, &ws.prepare(&path)?)?;
            written.push(path);
        }
        let rels: Vec<&str> = written.iter().map(String::as_str).collect();
        ws.record_stage("train", &rels)
    })
}

/// Trained detectors and their baselines keyed by anchor class.
pub struct Detectors {
    pub models: BTreeMap<String, HtsVaeModel>,
    pub baselines: BTreeMap<String, BaselineScore>,
}

impl Detectors {
    pub fn load(ws: &Workspace, p: &Prepared) -> Result<Self> {
        let mut models = BTreeMap::new();
        let mut baselines = BTreeMap::new();
        for class in p.anchor_classes() {
            models.insert(
                class.clone(),
                load_checkpoint(&ws.path(&detector_path(&class)))?,
            );
            if ws.exists(&baseline_path(&class)) {
                baselines.insert(class.clone(), ws.read_json(&baseline_path(&class))?);
            }
        }
        Ok(Detectors { models, baselines })
    }

    pub fn for_sample(
        &self,
        s: &TimeSeriesSample,
    ) -> Result<(&HtsVaeModel, Option<&BaselineScore>)> {
        let m = self.models.get(&s.anchor_label).ok_or_else(|| {
            HarnessError::Validation(format!("no detector for class {}", s.anchor_label))
        })?;
        Ok((m, self.baselines.get(&s.anchor_label)))
    }
}

fn score_seed(cfg: &PipelineConfig) -> u64 {
    sub_seed(cfg.seed, 3)
}

/// Aggregated per-cell scores for every sample using its class detector.
pub fn score_all(
    cfg: &PipelineConfig,
    det: &Detectors,
    samples: &[TimeSeriesSample],
) -> Result<BTreeMap<String, Array2<f64>>> {
    let mut out = BTreeMap::new();
    for s in samples {
        let (model, _) = det.for_sample(s)?;
        let (scores, _) = score_sample(
            model,
            s,
            cfg.scoring.stride,
            cfg.scoring.draws,
            score_seed(cfg),
        )?;
        out.insert(s.sample_id.clone(), scores);
    }
    Ok(out)
}

pub fn stage_score(
    cfg: &PipelineConfig,
    ws: &Workspace,
    p: &Prepared,
) -> Result<BTreeMap<String, Array2<f64>>> {
    stage("score", || {
        let mut det = Detectors::load(ws, p)?;
        let mut rels = Vec::new();
        for class in p.anchor_classes() {
            let windows = detector_windows(cfg, p, &class)?;
            let b = compute_baseline(
                &det.models[&class],
                &windows,
                cfg.scoring.draws,
                score_seed(cfg),
            )?;
            ws.write_json(&baseline_path(&class), &b)?;
            rels.push(baseline_path(&class));
            det.baselines.insert(class, b);
        }
        let scores = score_all(cfg, &det, &p.normalized)?;
        let bands = p.set.band_names().to_vec();
        let mut rows = Vec::new();
        for s in &p.normalized {
            let sc = &scores[&s.sample_id];
            let none = AnomalyFlags {
                steps: vec![false; s.len()],
                cells: Array2::from_elem(sc.dim(), false),
                thresholds: vec![f64::NAN; sc.nrows()],
            };
            rows.extend(score_rows(&s.sample_id, &bands, sc, &none, None));
        }
        anomaly::write_score_csv(&rows, &ws.prepare(SCORES)?)?;
        rels.push(SCORES.to_string());
        let rels: Vec<&str> = rels.iter().map(String::as_str).collect();
        ws.record_stage("score", &rels)?;
        Ok(scores)
    })
}

pub fn load_scores(ws: &Workspace, p: &Prepared) -> Result<BTreeMap<String, Array2<f64>>> {
    let rows = anomaly::read_score_csv(&ws.path(SCORES))?;
    let bands = p.set.band_names();
    let mut out: BTreeMap<String, Array2<f64>> = p
        .set
        .samples
        .iter()
        .map(|s| {
            (
                s.sample_id.clone(),
                Array2::from_elem((bands.len(), s.len()), f64::NAN),
            )
        })
        .collect();
    for r in rows {
        let b = bands.iter().position(|x| x == &r.band).ok_or_else(|| {
            HarnessError::Validation(format!("unknown band {} in scores", r.band))
        })?;
        let m = out.get_mut(&r.sample_id).ok_or_else(|| {
            HarnessError::Validation(format!("unknown sample {} in scores", r.sample_id))
        })?;
        m[[b, r.time_index]] = r.s0;
    }
    if let Some((id, _)) = out.iter().find(|(_, m)| m.iter().any(|v| v.is_nan())) {
        return Err(HarnessError::Validation(format!(
            "scores missing for sample {id}"
        )));
    }
    Ok(out)
}

pub fn detect_all(
    cfg: &PipelineConfig,
    det: &Detectors,
    samples: &[TimeSeriesSample],
    scores: &BTreeMap<String, Array2<f64>>,
) -> Result<BTreeMap<String, AnomalyFlags>> {
    let mut out = BTreeMap::new();
    for s in samples {
        let baseline = det.for_sample(s)?.1.ok_or_else(|| {
            HarnessError::Validation(format!("no baseline for class {}", s.anchor_label))
        })?;
        out.insert(
            s.sample_id.clone(),
            detect(&scores[&s.sample_id], baseline, &cfg.detection)?,
        );
    }
    Ok(out)
}

pub fn stage_detect(
    cfg: &PipelineConfig,
    ws: &Workspace,
    p: &Prepared,
) -> Result<BTreeMap<String, AnomalyFlags>> {
    stage("detect", || {
        let det = Detectors::load(ws, p)?;
        let scores = load_scores(ws, p)?;
        let flags = detect_all(cfg, &det, &p.normalized, &scores)?;
        ws.write_json(FLAGS, &flags)?;
        ws.record_stage("detect", &[FLAGS])?;
        Ok(flags)
    })
}

pub fn stage_attribute(
    cfg: &PipelineConfig,
    ws: &Workspace,
    p: &Prepared,
) -> Result<BTreeMap<String, SampleAttribution>> {
    stage("attribute", || {
        let det = Detectors::load(ws, p)?;
        let flags: BTreeMap<String, AnomalyFlags> = ws.read_json(FLAGS)?;
        let scores = load_scores(ws, p)?;
        let gibbs = GibbsConfig {
            seed: sub_seed(cfg.seed, 4),
            ..cfg.gibbs.clone()
        };
        let bands = p.set.band_names().to_vec();
        let mut results = BTreeMap::new();
        let mut rows = Vec::new();
        for s in &p.normalized {
            let f = &flags[&s.sample_id];
            let attribution = if f.steps.iter().any(|&x| x) {
                let (model, baseline) = det.for_sample(s)?;
                let baseline =
                    baseline.ok_or_else(|| HarnessError::Validation("missing baseline".into()))?;
                Some(attribute_sample(model, s, f, baseline, &gibbs)?)
            } else {
                None
            };
            rows.extend(score_rows(
                &s.sample_id,
                &bands,
                &scores[&s.sample_id],
                f,
                attribution.as_ref(),
            ));
            ws.write_json(
                &summary_path(&s.sample_id),
                &DetectionSummary::new(&s.sample_id, f, attribution.as_ref()),
            )?;
            if let Some(a) = attribution {
                results.insert(s.sample_id.clone(), a);
            }
        }
        ws.write_json(ATTRIBUTION, &results)?;
        anomaly::write_score_csv(&rows, &ws.prepare(ATTRIBUTION_CSV)?)?;
        ws.record_stage("attribute", &["attribution"])?;
        Ok(results)
    })
}

/// Significance masks per sample.
pub fn significance_all(
    cfg: &PipelineConfig,
    p: &Prepared,
    flags: &BTreeMap<String, AnomalyFlags>,
    attributions: &BTreeMap<String, SampleAttribution>,
) -> Result<BTreeMap<String, Vec<bool>>> {
    let mut out = BTreeMap::new();
    for s in &p.normalized {
        let f = &flags[&s.sample_id];
        let zero = Array2::zeros(s.values.dim());
        let a = attributions
            .get(&s.sample_id)
            .map_or(&zero, |a| &a.attribution);
        out.insert(
            s.sample_id.clone(),
            significance_filter(a, &f.steps, &cfg.relabel.significance)?,
        );
    }
    Ok(out)
}

fn select_features(
    full: &Array2<f64>,
    mode: FeatureMode,
    spectral_dim: usize,
    raw: &TimeSeriesSample,
) -> Array2<f64> {
    match mode {
        FeatureMode::Full => full.clone(),
        FeatureMode::OnlyEs => full.slice(s![.., ..spectral_dim]).to_owned(),
        FeatureMode::OnlyEt => full.slice(s![.., spectral_dim..]).to_owned(),
        FeatureMode::Raw => raw.values.t().to_owned(),
    }
}

/// Train a classifier on stable steps pooled over all samples and relabel
/// every sample.
pub fn relabel_with(
    cfg: &PipelineConfig,
    p: &Prepared,
    features: &BTreeMap<String, Array2<f64>>,
    flags: &BTreeMap<String, AnomalyFlags>,
    significance: &BTreeMap<String, Vec<bool>>,
) -> Result<(LightweightClassifier, Vec<DynamicLabelSequence>)> {
    let classes = &p.set.class_vocabulary;
    let dim = features.values().next().map_or(0, |f| f.ncols());
    let mut rows: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for s in &p.normalized {
        let f = &features[&s.sample_id];
        let sig = &significance[&s.sample_id];
        let y = p.set.class_index(&s.anchor_label).ok_or_else(|| {
            HarnessError::Validation(format!("anchor label {} not in vocabulary", s.anchor_label))
        })?;
        for t in (0..s.len()).filter(|&t| !sig[t]) {
            rows.extend(f.row(t).iter());
            labels.push(y);
        }
    }
    let x = Array2::from_shape_vec((labels.len(), dim), rows)
        .map_err(|e| HarnessError::Validation(e.to_string()))?;
    let hyper = tasgen_core::relabel::ClassifierHyper {
        seed: sub_seed(cfg.seed, 5),
        ..cfg.relabel.classifier.clone()
    };
    let classifier = train_classifier(&x, &labels, classes, &hyper)?;
    let seqs = p
        .normalized
        .iter()
        .map(|s| {
            relabel(
                s,
                &flags[&s.sample_id].steps,
                &significance[&s.sample_id],
                &classifier,
                &features[&s.sample_id],
            )
        })
        .collect::<tasgen_core::Result<Vec<_>>>()?;
    Ok((classifier, seqs))
}

pub fn stage_relabel(
    cfg: &PipelineConfig,
    ws: &Workspace,
    p: &Prepared,
) -> Result<Vec<DynamicLabelSequence>> {
    stage("relabel", || {
        let flags: BTreeMap<String, AnomalyFlags> = ws.read_json(FLAGS)?;
        let attributions: BTreeMap<String, SampleAttribution> = ws.read_json(ATTRIBUTION)?;
        let significance = significance_all(cfg, p, &flags, &attributions)?;
        ws.write_json(SIGNIFICANCE, &significance)?;
        let model = load_checkpoint(&ws.path(FEATURE_MODEL))?;
        let ds = model.config.spectral_dim;
        let mut full = BTreeMap::new();
        for s in &p.normalized {
            full.insert(
                s.sample_id.clone(),
                fuse_features(&model, s, FeatureMode::Full, cfg.relabel.feature_stride)?,
            );
        }
        let by_mode = |mode: FeatureMode| -> BTreeMap<String, Array2<f64>> {
            p.normalized
                .iter()
                .map(|s| {
                    (
                        s.sample_id.clone(),
                        select_features(&full[&s.sample_id], mode, ds, s),
                    )
                })
                .collect()
        };
        let mode = cfg.relabel.feature_mode;
        let (classifier, seqs) = relabel_with(cfg, p, &by_mode(mode), &flags, &significance)?;
        ws.write_json(CLASSIFIER, &classifier)?;
        for seq in &seqs {
            ws.write_json(&dynamic_path(&seq.sample_id), seq)?;
        }
        write_labels_csv(&seqs, &ws.prepare(LABELS_CSV)?)?;
        if cfg.relabel.ablation {
            let mut ablation: BTreeMap<String, Vec<DynamicLabelSequence>> = BTreeMap::new();
            for m in FeatureMode::ALL {
                let out = if m == mode {
                    seqs.clone()
                } else {
                    relabel_with(cfg, p, &by_mode(m), &flags, &significance)?.1
                };
                ablation.insert(m.to_string(), out);
            }
            ws.write_json(ABLATION, &ablation)?;
        }
        ws.record_stage("relabel", &["relabel"])?;
        Ok(seqs)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub samples: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// `full`, `decimate:<k>` or `missing:<ratio>`.
    pub protocol: String,
    pub f1_a: f64,
    pub precision_a: f64,
    pub recall_a: f64,
    pub detection_counts: FlagCounts,
    pub f1_s: Option<f64>,
    pub relabel_counts: Option<FlagCounts>,
    pub oa: Option<f64>,
    pub kappa: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Option<ConfusionMatrix>,
    /// F1-S per feature mode.
    pub ablation: BTreeMap<String, f64>,
    /// F1-A of the harmonic-regression sanity detector.
    pub harmonic_f1_a: Option<f64>,
    pub metadata: RunMetadata,
}

/// Truth step flags per sample from the change logs.
pub fn truth_flags(set: &SampleSet) -> BTreeMap<String, Vec<bool>> {
    set.samples
        .iter()
        .map(|s| {
            (
                s.sample_id.clone(),
                set.change_log(&s.sample_id).anomalous_steps(s.len()),
            )
        })
        .collect()
}

pub fn detection_counts(
    flags: &BTreeMap<String, Vec<bool>>,
    truth: &BTreeMap<String, Vec<bool>>,
    steps: Option<&BTreeMap<String, Vec<usize>>>,
) -> Result<FlagCounts> {
    let mut c = FlagCounts::default();
    for (id, t) in truth {
        let f = flags
            .get(id)
            .ok_or_else(|| HarnessError::Validation(format!("no flags for sample {id}")))?;
        let (f, t): (Vec<bool>, Vec<bool>) = match steps.and_then(|s| s.get(id)) {
            Some(idx) => (
                idx.iter().map(|&i| f[i]).collect(),
                idx.iter().map(|&i| t[i]).collect(),
            ),
            None => (f.clone(), t.clone()),
        };
        c.add(FlagCounts::from_flags(&f, &t)?);
    }
    Ok(c)
}

fn relabel_metrics(
    set: &SampleSet,
    seqs: &[DynamicLabelSequence],
) -> Result<(FlagCounts, ConfusionMatrix)> {
    let mut counts = FlagCounts::default();
    let mut cm = ConfusionMatrix::new(set.class_vocabulary.clone());
    for seq in seqs {
        let s = set
            .get(&seq.sample_id)
            .ok_or_else(|| HarnessError::Validation(format!("unknown sample {}", seq.sample_id)))?;
        let truth = set
            .change_log(&s.sample_id)
            .labels(s.len(), &s.anchor_label);
        counts.add(relabel_counts(&seq.labels, &truth, &s.anchor_label)?);
        for (t, p) in truth.iter().zip(&seq.labels) {
            cm.record(t, p)?;
        }
    }
    Ok((counts, cm))
}

fn harmonic_f1(
    cfg: &PipelineConfig,
    set: &SampleSet,
    truth: &BTreeMap<String, Vec<bool>>,
) -> Result<f64> {
    let period = cfg
        .data
        .scenario
        .as_ref()
        .map(|s| s.period * s.day_spacing as f64);
    let mut flags = BTreeMap::new();
    for s in &set.samples {
        flags.insert(
            s.sample_id.clone(),
            harmonic_baseline_detect(s, 2, period)?.steps,
        );
    }
    Ok(detection_counts(&flags, truth, None)?.f1())
}

pub fn stage_evaluate(
    cfg: &PipelineConfig,
    ws: &Workspace,
    p: &Prepared,
) -> Result<EvaluationReport> {
    stage("evaluate", || {
        let flags: BTreeMap<String, AnomalyFlags> = ws.read_json(FLAGS)?;
        let steps: BTreeMap<String, Vec<bool>> = flags
            .iter()
            .map(|(k, v)| (k.clone(), v.steps.clone()))
            .collect();
        let truth = truth_flags(&p.set);
        let det = detection_counts(&steps, &truth, None)?;
        let seqs: Vec<DynamicLabelSequence> = p
            .set
            .samples
            .iter()
            .map(|s| ws.read_json(&dynamic_path(&s.sample_id)))
            .collect::<Result<_>>()?;
        let (rc, cm) = relabel_metrics(&p.set, &seqs)?;
        let (oa, kappa) = match oa_kappa(&cm) {
            Ok((o, k)) => (Some(o), Some(k)),
            Err(e) => {
                log::warn!("OA/kappa unavailable: {e}");
                ((cm.total() > 0).then(|| trace_ratio(&cm)), None)
            }
        };
        let mut ablation = BTreeMap::new();
        if ws.exists(ABLATION) {
            let all: BTreeMap<String, Vec<DynamicLabelSequence>> = ws.read_json(ABLATION)?;
            for (mode, seqs) in all {
                ablation.insert(mode, relabel_metrics(&p.set, &seqs)?.0.f1());
            }
        }
        let report = EvaluationReport {
            protocol: "full".into(),
            f1_a: det.f1(),
            precision_a: det.precision(),
            recall_a: det.recall(),
            detection_counts: det,
            f1_s: Some(rc.f1()),
            relabel_counts: Some(rc),
            oa,
            kappa,
            per_class: cm.per_class(),
            confusion: Some(cm),
            ablation,
            harmonic_f1_a: Some(harmonic_f1(cfg, &p.set, &truth)?),
            metadata: metadata(cfg, p)?,
        };
        ws.write_json(REPORT, &report)?;
        ws.record_stage("evaluate", &[REPORT])?;
        Ok(report)
    })
}

fn trace_ratio(cm: &ConfusionMatrix) -> f64 {
    let k = cm.counts.len();
    (0..k).map(|i| cm.counts[i][i]).sum::<u64>() as f64 / cm.total() as f64
}

pub fn metadata(cfg: &PipelineConfig, p: &Prepared) -> Result<RunMetadata> {
    Ok(RunMetadata {
        seed: cfg.seed,
        config_hash: cfg.hash()?,
        samples: p.set.samples.len(),
        steps: p.set.samples.iter().map(TimeSeriesSample::len).sum(),
    })
}

/// Every stage from data to evaluation.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    let ws = Workspace::new(&cfg.output_dir)?;
    cfg.relocated().save(&ws.prepare("config.json")?)?;
    ws.record_stage("config", &["config.json"])?;
    let p = stage_generate(cfg, &ws)?;
    stage_pretrain(cfg, &ws, &p)?;
    stage_train(cfg, &ws, &p)?;
    stage_score(cfg, &ws, &p)?;
    stage_detect(cfg, &ws, &p)?;
    stage_attribute(cfg, &ws, &p)?;
    stage_relabel(cfg, &ws, &p)?;
    stage_evaluate(cfg, &ws, &p)
}
