use std::collections::BTreeMap;
use std::process::Command;

use tasgen::artifacts::{Workspace, MANIFEST};
use tasgen::config::{standard_config, PipelineConfig};
use tasgen::metrics::f1_score;
use tasgen::pipeline::{run_pipeline, truth_flags, Prepared, FLAGS};
use tasgen::report::emit_plots;
use tasgen::robustness::{robustness_suite, Protocol};
use tasgen_core::anomaly::{AnomalyFlags, SampleAttribution};
use tasgen_core::data::synthetic::EventSpec;
use tasgen_core::data::AnomalyKind;
use tasgen_core::relabel::{DynamicLabelSequence, Provenance};

/// Six short samples and small networks so a full run takes seconds.
fn tiny_config(out: &std::path::Path) -> PipelineConfig {
    let mut cfg = standard_config(out);
    let sc = cfg.data.scenario.as_mut().unwrap();
    sc.samples_per_class = 2;
    sc.steps = 64;
    sc.events = vec![
        EventSpec {
            sample: 1,
            start: 10,
            end: 24,
            kind: AnomalyKind::Temporal,
            bands: vec![3],
            magnitude: 0.08,
            new_label: None,
        },
        EventSpec {
            sample: 4,
            start: 40,
            end: 60,
            kind: AnomalyKind::TemporalSpectral,
            bands: vec![],
            magnitude: 0.0,
            new_label: Some("single_crop".into()),
        },
    ];
    cfg.training.window = 8;
    cfg.training.epochs = 3;
    cfg.training.batch_size = 16;
    cfg.windows.curation_epochs = 3;
    cfg.windows.detector_radius = 12;
    cfg.windows.feature_stride = 4;
    cfg.scoring.stride = 4;
    cfg.scoring.draws = 4;
    cfg.gibbs.max_sweeps = 2;
    cfg.gibbs.score_draws = 4;
    cfg.detection.quantile = 0.9;
    cfg.relabel.classifier.epochs = 3;
    cfg.relabel.feature_stride = 4;
    for h in [
        &mut cfg.arch.conv_hidden,
        &mut cfg.arch.gru_hidden,
        &mut cfg.arch.posterior_hidden,
        &mut cfg.arch.prior_hidden,
        &mut cfg.arch.head_hidden,
        &mut cfg.arch.flow_hidden,
    ] {
        *h = 4;
    }
    cfg.arch.temporal_dim = 2;
    cfg.robustness = vec!["full".into(), "decimate:2".into(), "missing:0.5".into()];
    cfg
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tasgen"))
}

#[test]
fn tiny_pipeline_end_to_end() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&root.path().join("a"));
    let report = run_pipeline(&cfg).unwrap();
    let ws = Workspace::new(&cfg.output_dir).unwrap();
    let p = Prepared::load(&ws).unwrap();

    // every stage leaves a manifest entry
    let manifest: BTreeMap<String, serde_json::Value> = ws.read_json(MANIFEST).unwrap();
    let stages: std::collections::BTreeSet<String> = manifest
        .values()
        .filter_map(|e| e.get("stage").and_then(|s| s.as_str()).map(str::to_string))
        .collect();
    for s in [
        "generate",
        "pretrain",
        "train",
        "score",
        "detect",
        "attribute",
        "relabel",
        "evaluate",
    ] {
        assert!(
            stages.contains(s),
            "stage {s} missing from manifest: {stages:?}"
        );
    }

    // metrics come from the persisted flag file
    let flags: BTreeMap<String, AnomalyFlags> = ws.read_json(FLAGS).unwrap();
    let truth = truth_flags(&p.set);
    let pred: Vec<bool> = truth.keys().flat_map(|k| flags[k].steps.clone()).collect();
    let all: Vec<bool> = truth.values().flatten().copied().collect();
    assert_eq!(f1_score(&pred, &all).unwrap(), report.f1_a);
    assert_eq!(report.protocol, "full");
    assert!(report.kappa.is_none_or(|k| (-1.0..=1.0).contains(&k)));
    assert_eq!(report.ablation.len(), 4);
    assert_eq!(report.metadata.config_hash, cfg.hash().unwrap());

    // inherited steps keep the anchor label
    for s in &p.set.samples {
        let seq: DynamicLabelSequence = ws
            .read_json(&format!("relabel/samples/{}.json", s.sample_id))
            .unwrap();
        for (l, prov) in seq.labels.iter().zip(&seq.provenance) {
            if *prov == Provenance::Inherited {
                assert_eq!(l, &s.anchor_label);
            }
        }
    }

    // identical config elsewhere reproduces every data artifact
    let again = PipelineConfig {
        output_dir: root.path().join("b"),
        ..cfg.clone()
    };
    let report_b = run_pipeline(&again).unwrap();
    assert_eq!(report, report_b);
    let a = ws.data_artifacts().unwrap();
    let b = Workspace::new(&again.output_dir)
        .unwrap()
        .data_artifacts()
        .unwrap();
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(b[k] == *v, "{k} differs between runs");
    }

    // robustness reuses the trained detectors
    let protocols: Vec<Protocol> = cfg.robustness.iter().map(|s| s.parse().unwrap()).collect();
    let suite = robustness_suite(&cfg, &ws, &protocols).unwrap();
    assert_eq!(suite.len(), 3);
    assert_eq!(suite[0].report.as_ref().unwrap(), &report);
    let missing = suite[2].report.as_ref().unwrap();
    assert_eq!(missing.protocol, "missing:0.5");
    assert!(ws.exists("robustness/missing-0.5/report.json"));
    assert!(ws.exists("robustness/table.csv"));

    // figures
    let plots = emit_plots(&ws).unwrap();
    assert!(plots.warnings.is_empty(), "{:?}", plots.warnings);
    let attributions: BTreeMap<String, SampleAttribution> =
        ws.read_json(tasgen::pipeline::ATTRIBUTION).unwrap();
    for (id, attr) in &attributions {
        let svg = std::fs::read_to_string(ws.path(&format!("plots/attribution-{id}.svg"))).unwrap();
        let heights: Vec<f64> = svg
            .lines()
            .filter(|l| l.contains("class=\"bar\""))
            .map(|l| {
                let h = l.split(" height=\"").nth(1).unwrap();
                h[..h.find('"').unwrap()].parse().unwrap()
            })
            .collect();
        let totals: Vec<f64> = attr
            .attribution
            .rows()
            .into_iter()
            .map(|r| r.sum())
            .collect();
        let arg = |v: &[f64]| {
            v.iter()
                .enumerate()
                .fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
        };
        if totals.iter().any(|&t| t > 0.0) {
            assert_eq!(arg(&heights), arg(&totals), "sample {id}");
        }
    }
    let again_plots = emit_plots(&ws).unwrap();
    assert_eq!(plots, again_plots);
    for f in &plots.files {
        assert!(ws.path(f).exists());
    }
    assert!(plots.files.iter().any(|f| f.starts_with("plots/score-")));
    assert!(plots.files.iter().any(|f| f.starts_with("plots/labels-")));
}

#[test]
fn odd_window_is_rejected_before_any_stage() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("run");
    let mut cfg = tiny_config(&out);
    cfg.training.window = 7;
    let path = root.path().join("cfg.json");
    std::fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let status = bin()
        .arg("--config")
        .arg(&path)
        .arg("pipeline")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.join(MANIFEST).exists());
    assert!(run_pipeline(&cfg).unwrap_err().is_validation());
}

#[test]
fn cli_exit_codes() {
    let root = tempfile::tempdir().unwrap();
    // no artifacts yet: runtime failure tagged with the stage
    let out = bin()
        .arg("--out")
        .arg(root.path())
        .arg("detect")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("detect") || err.contains("samples"), "{err}");

    let bad = root.path().join("bad.toml");
    std::fs::write(&bad, "seed = \"seven\"").unwrap();
    let status = bin()
        .arg("--config")
        .arg(&bad)
        .arg("generate")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let status = bin()
        .arg("--out")
        .arg(root.path())
        .arg("robustness")
        .arg("--protocol")
        .arg("decimate:3")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let gen = root.path().join("gen");
    let status = bin()
        .arg("--out")
        .arg(&gen)
        .arg("--seed")
        .arg("3")
        .arg("generate")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(gen.join("data/samples.json").exists());

    let empty = root.path().join("empty");
    let status = bin()
        .arg("--out")
        .arg(&empty)
        .arg("report")
        .status()
        .unwrap();
    assert!(status.success());
    let html = std::fs::read_to_string(empty.join("plots/index.html")).unwrap();
    assert!(html.contains("Warnings"));
}
