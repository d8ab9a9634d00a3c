//! Static SVG figures and an HTML index built from pipeline artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use tasgen_core::anomaly::{read_score_csv, AnomalyFlags, SampleAttribution};
use tasgen_core::relabel::DynamicLabelSequence;

use crate::artifacts::Workspace;
use crate::error::Result;
use crate::pipeline::{EvaluationReport, ATTRIBUTION, FLAGS, REPORT, SCORES};

pub const PLOT_DIR: &str = "plots";

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 200.0;
const PAD: f64 = 30.0;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotSummary {
    /// Paths relative to the artifact root.
    pub files: Vec<String>,
    pub warnings: Vec<String>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn file_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn svg_open(title: &str, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" \
         viewBox=\"0 0 {WIDTH} {height}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        escape(title)
    )
}

/// Summed score per step with flagged steps shaded.
pub fn score_svg(id: &str, score: &[f64], flagged: Option<&[bool]>) -> String {
    let mut svg = svg_open(&format!("{id}: anomaly score"), HEIGHT);
    let n = score.len().max(2);
    let x = |t: usize| PAD + (WIDTH - 2.0 * PAD) * t as f64 / (n - 1) as f64;
    let (lo, hi) = score
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let y = |v: f64| HEIGHT - PAD - (HEIGHT - 2.0 * PAD) * (v - lo) / span;
    if let Some(flags) = flagged {
        let step = (WIDTH - 2.0 * PAD) / (n - 1) as f64;
        for (t, _) in flags.iter().enumerate().filter(|(_, &f)| f) {
            let _ = writeln!(
                svg,
                "<rect x=\"{:.2}\" y=\"{PAD}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#f4b6b6\"/>",
                x(t) - step / 2.0,
                step,
                HEIGHT - 2.0 * PAD
            );
        }
    }
    let points: Vec<String> = score
        .iter()
        .enumerate()
        .map(|(t, &v)| format!("{:.2},{:.2}", x(t), y(v)))
        .collect();
    let _ = writeln!(
        svg,
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1\" points=\"{}\"/>",
        points.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}

/// One bar per band of the summed attribution.
pub fn attribution_svg(id: &str, bands: &[String], totals: &[f64]) -> String {
    let mut svg = svg_open(&format!("{id}: attribution per band"), HEIGHT);
    let max = totals.iter().cloned().fold(0.0_f64, f64::max);
    let max = if max > 0.0 { max } else { 1.0 };
    let slot = (WIDTH - 2.0 * PAD) / totals.len().max(1) as f64;
    for (b, &v) in totals.iter().enumerate() {
        let h = (HEIGHT - 2.0 * PAD - 14.0) * v.max(0.0) / max;
        let x0 = PAD + slot * b as f64 + slot * 0.1;
        let _ = writeln!(
            svg,
            "<rect class=\"bar\" data-band=\"{b}\" x=\"{x0:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"{}\"/>",
            HEIGHT - PAD - 14.0 - h,
            slot * 0.8,
            PALETTE[b % PALETTE.len()]
        );
        let label = bands.get(b).map_or_else(|| b.to_string(), |s| escape(s));
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{label}</text>",
            x0 + slot * 0.4,
            HEIGHT - PAD
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Coloured strip of labels over time.
pub fn timeline_svg(id: &str, labels: &[String], classes: &[String]) -> String {
    let height = 90.0;
    let mut svg = svg_open(&format!("{id}: labels"), height);
    let step = (WIDTH - 2.0 * PAD) / labels.len().max(1) as f64;
    let colour =
        |l: &str| PALETTE[classes.iter().position(|c| c == l).unwrap_or(0) % PALETTE.len()];
    let mut t = 0;
    while t < labels.len() {
        let end = (t..labels.len())
            .find(|&u| labels[u] != labels[t])
            .unwrap_or(labels.len());
        let _ = writeln!(
            svg,
            "<rect x=\"{:.2}\" y=\"28\" width=\"{:.2}\" height=\"24\" fill=\"{}\"><title>{}</title></rect>",
            PAD + step * t as f64,
            step * (end - t) as f64,
            colour(&labels[t]),
            escape(&labels[t])
        );
        t = end;
    }
    for (k, c) in classes.iter().enumerate() {
        let x = PAD + 140.0 * k as f64;
        let _ = writeln!(
            svg,
            "<rect x=\"{x:.2}\" y=\"64\" width=\"10\" height=\"10\" fill=\"{}\"/>\
             <text x=\"{:.2}\" y=\"73\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
            PALETTE[k % PALETTE.len()],
            x + 14.0,
            escape(c)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn metrics_table(r: &EvaluationReport) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    let mut rows = vec![
        ("protocol", r.protocol.clone()),
        ("F1-A", format!("{:.4}", r.f1_a)),
        ("F1-S", fmt(r.f1_s)),
        ("OA", fmt(r.oa)),
        ("Kappa", fmt(r.kappa)),
        ("harmonic F1-A", fmt(r.harmonic_f1_a)),
    ];
    for (mode, f1) in &r.ablation {
        rows.push(("F1-S ablation", format!("{mode}: {f1:.4}")));
    }
    let mut html = String::from("<table>\n");
    for (k, v) in rows {
        let _ = writeln!(
            html,
            "<tr><th>{}</th><td>{}</td></tr>",
            escape(k),
            escape(&v)
        );
    }
    html.push_str("</table>\n");
    html
}

fn load<T: serde::de::DeserializeOwned>(
    ws: &Workspace,
    rel: &str,
    warnings: &mut Vec<String>,
) -> Option<T> {
    if !ws.exists(rel) {
        warnings.push(format!("missing artifact {rel}"));
        return None;
    }
    match ws.read_json(rel) {
        Ok(v) => Some(v),
        Err(e) => {
            warnings.push(format!("unreadable artifact {rel}: {e}"));
            None
        }
    }
}

/// Render every figure the available artifacts allow.
pub fn emit_plots(ws: &Workspace) -> Result<PlotSummary> {
    let mut out = PlotSummary::default();
    let mut body = String::new();

    let report: Option<EvaluationReport> = load(ws, REPORT, &mut out.warnings);
    let flags: Option<BTreeMap<String, AnomalyFlags>> = load(ws, FLAGS, &mut out.warnings);
    let attributions: Option<BTreeMap<String, SampleAttribution>> =
        load(ws, ATTRIBUTION, &mut out.warnings);

    if let Some(r) = &report {
        body.push_str("<h2>Metrics</h2>\n");
        body.push_str(&metrics_table(r));
    }

    let mut bands: Vec<String> = Vec::new();
    let mut scores: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    if ws.exists(SCORES) {
        match read_score_csv(&ws.path(SCORES)) {
            Ok(rows) => {
                for r in rows {
                    if !bands.contains(&r.band) {
                        bands.push(r.band.clone());
                    }
                    let s = scores.entry(r.sample_id).or_default();
                    if s.len() <= r.time_index {
                        s.resize(r.time_index + 1, 0.0);
                    }
                    s[r.time_index] += r.s0;
                }
            }
            Err(e) => out
                .warnings
                .push(format!("unreadable artifact {SCORES}: {e}")),
        }
    } else {
        out.warnings.push(format!("missing artifact {SCORES}"));
    }

    let classes = report
        .as_ref()
        .and_then(|r| r.confusion.as_ref())
        .map(|c| c.class_vocabulary.clone())
        .unwrap_or_default();

    let mut ids: Vec<String> = scores.keys().cloned().collect();
    if let Some(f) = &flags {
        ids.extend(f.keys().filter(|k| !scores.contains_key(*k)).cloned());
    }
    let mut sections = Vec::new();
    for id in &ids {
        let mut figures = Vec::new();
        let name = file_name(id);
        if let Some(score) = scores.get(id) {
            let flagged = flags
                .as_ref()
                .and_then(|f| f.get(id))
                .map(|f| f.steps.as_slice());
            let rel = format!("{PLOT_DIR}/score-{name}.svg");
            ws.write_text(&rel, &score_svg(id, score, flagged))?;
            figures.push(rel);
        }
        if let Some(a) = attributions.as_ref().and_then(|m| m.get(id)) {
            let totals: Vec<f64> = a.attribution.rows().into_iter().map(|r| r.sum()).collect();
            let rel = format!("{PLOT_DIR}/attribution-{name}.svg");
            ws.write_text(&rel, &attribution_svg(id, &bands, &totals))?;
            figures.push(rel);
        }
        let seq_rel = format!("relabel/samples/{name}.json");
        if ws.exists(&seq_rel) {
            match ws.read_json::<DynamicLabelSequence>(&seq_rel) {
                Ok(seq) => {
                    let rel = format!("{PLOT_DIR}/labels-{name}.svg");
                    ws.write_text(&rel, &timeline_svg(id, &seq.labels, &classes))?;
                    figures.push(rel);
                }
                Err(e) => out
                    .warnings
                    .push(format!("unreadable artifact {seq_rel}: {e}")),
            }
        }
        sections.push((id, figures.clone()));
        out.files.extend(figures);
    }

    if !sections.is_empty() {
        body.push_str("<h2>Samples</h2>\n");
    }
    for (id, figures) in sections {
        let _ = writeln!(body, "<h3>{}</h3>", escape(id));
        for f in figures {
            let _ = writeln!(
                body,
                "<img src=\"{}\"/>",
                escape(f.trim_start_matches("plots/"))
            );
        }
    }
    if !out.warnings.is_empty() {
        body.push_str("<h2>Warnings</h2>\n<ul>\n");
        for w in &out.warnings {
            let _ = writeln!(body, "<li>{}</li>", escape(w));
        }
        body.push_str("</ul>\n");
    }
    let html = format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Pipeline report</title></head>\n<body>\n<h1>Pipeline report</h1>\n{body}</body></html>\n"
    );
    let index = format!("{PLOT_DIR}/index.html");
    ws.write_text(&index, &html)?;
    out.files.push(index);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tallest_bar_is_largest_band() {
        let svg = attribution_svg("s", &["a".into(), "b".into(), "c".into()], &[1.0, 5.0, 2.0]);
        let heights: Vec<f64> = svg
            .lines()
            .filter(|l| l.contains("class=\"bar\""))
            .map(|l| {
                let h = l.split("height=\"").nth(1).unwrap();
                h[..h.find('"').unwrap()].parse().unwrap()
            })
            .collect();
        let argmax = heights
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 1);
    }

    #[test]
    fn empty_dir_gives_warnings_only() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path()).unwrap();
        let out = emit_plots(&ws).unwrap();
        assert_eq!(out.files, vec!["plots/index.html".to_string()]);
        assert!(!out.warnings.is_empty());
        let html = std::fs::read_to_string(dir.path().join("plots/index.html")).unwrap();
        assert!(html.contains("Warnings"));
        assert!(!html.contains("<svg"));
    }

    #[test]
    fn svg_bytes_are_deterministic() {
        let a = score_svg("x", &[1.0, 3.0, 2.0], Some(&[false, true, false]));
        assert_eq!(
            a,
            score_svg("x", &[1.0, 3.0, 2.0], Some(&[false, true, false]))
        );
    }
}
