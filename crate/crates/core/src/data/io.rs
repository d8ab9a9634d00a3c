//! Sample-set files: a directory of per-sample CSVs with key-value sidecars,
//! or a single JSON document.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{ChangeLog, SampleSet, TimeSeriesSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFormat {
    CsvDir,
    SingleJson,
}

impl std::str::FromStr for SampleFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv_dir" | "csv" => Ok(SampleFormat::CsvDir),
            "single_json" | "json" => Ok(SampleFormat::SingleJson),
            other => Err(Error::Config(format!("unknown sample format {other:?}"))),
        }
    }
}

const META_EXT: &str = "meta";
const CLASSES_FILE: &str = "classes.txt";
const CHANGE_LOGS_FILE: &str = "change_logs.json";

#[derive(Serialize, Deserialize)]
struct JsonSample {
    sample_id: String,
    band_names: Vec<String>,
    timestamps: Vec<i64>,
    /// One row per band.
    values: Vec<Vec<f64>>,
    anchor_index: usize,
    anchor_label: String,
}

#[derive(Serialize, Deserialize)]
struct JsonSampleSet {
    class_vocabulary: Vec<String>,
    samples: Vec<JsonSample>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    change_logs: BTreeMap<String, ChangeLog>,
}

pub fn load_sample_set(path: &Path, format: SampleFormat) -> Result<SampleSet> {
    match format {
        SampleFormat::CsvDir => load_csv_dir(path),
        SampleFormat::SingleJson => load_json(path),
    }
}

pub fn save_sample_set(set: &SampleSet, path: &Path, format: SampleFormat) -> Result<()> {
    match format {
        SampleFormat::CsvDir => save_csv_dir(set, path),
        SampleFormat::SingleJson => save_json(set, path),
    }
}

fn load_json(path: &Path) -> Result<SampleSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: JsonSampleSet = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let mut samples = Vec::with_capacity(doc.samples.len());
    for s in doc.samples {
        let c = s.values.len();
        let t = s.values.first().map_or(0, Vec::len);
        if s.values.iter().any(|r| r.len() != t) {
            return Err(Error::Schema(format!(
                "sample {}: ragged value rows",
                s.sample_id
            )));
        }
        let flat: Vec<f64> = s.values.into_iter().flatten().collect();
        let values =
            Array2::from_shape_vec((c, t), flat).map_err(|e| Error::Schema(e.to_string()))?;
        samples.push(TimeSeriesSample::new(
            s.sample_id,
            s.band_names,
            s.timestamps,
            values,
            s.anchor_index,
            s.anchor_label,
        )?);
    }
    SampleSet::new(samples, doc.change_logs, doc.class_vocabulary)
}

fn save_json(set: &SampleSet, path: &Path) -> Result<()> {
    let doc = JsonSampleSet {
        class_vocabulary: set.class_vocabulary.clone(),
        samples: set
            .samples
            .iter()
            .map(|s| JsonSample {
                sample_id: s.sample_id.clone(),
                band_names: s.band_names.clone(),
                timestamps: s.timestamps.clone(),
                values: s.values.rows().into_iter().map(|r| r.to_vec()).collect(),
                anchor_index: s.anchor_index,
                anchor_label: s.anchor_label.clone(),
            })
            .collect(),
        change_logs: set.change_logs.clone(),
    };
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn read_meta(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| parse_err(path, i + 1, "expected key=value"))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn load_csv_sample(csv_path: &Path) -> Result<TimeSeriesSample> {
    let meta_path = csv_path.with_extension(META_EXT);
    let meta = read_meta(&meta_path)?;
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Schema(format!("{}: missing key {k:?}", meta_path.display())))
    };
    let sample_id = field("sample_id")?;
    let anchor_label = field("anchor_label")?;
    let anchor_index: usize = field("anchor_index")?.parse().map_err(|_| {
        Error::Schema(format!(
            "{}: anchor_index is not an integer",
            meta_path.display()
        ))
    })?;

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| parse_err(csv_path, 1, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(csv_path, 1, e.to_string()))?
        .clone();
    if headers.get(0) != Some("timestamp") || headers.len() < 2 {
        return Err(parse_err(
            csv_path,
            1,
            "header must be timestamp,<band_1>,...,<band_C>",
        ));
    }
    let band_names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let c = band_names.len();
    let mut timestamps = Vec::new();
    let mut columns: Vec<f64> = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(csv_path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != c + 1 {
            return Err(parse_err(
                csv_path,
                line,
                format!("expected {} fields, got {}", c + 1, rec.len()),
            ));
        }
        let ts: i64 = rec[0]
            .parse()
            .map_err(|_| parse_err(csv_path, line, format!("bad timestamp {:?}", &rec[0])))?;
        timestamps.push(ts);
        for f in rec.iter().skip(1) {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(csv_path, line, format!("bad value {f:?}")))?;
            columns.push(v);
        }
    }
    let t = timestamps.len();
    // rows were read time-major
    let values = Array2::from_shape_vec((t, c), columns)
        .map_err(|e| Error::Schema(e.to_string()))?
        .reversed_axes()
        .as_standard_layout()
        .to_owned();
    TimeSeriesSample::new(
        sample_id,
        band_names,
        timestamps,
        values,
        anchor_index,
        anchor_label,
    )
}

fn load_csv_dir(dir: &Path) -> Result<SampleSet> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut csvs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    csvs.sort();
    if csvs.is_empty() {
        return Err(Error::Schema("no samples found".into()));
    }
    let samples = csvs
        .iter()
        .map(|p| load_csv_sample(p))
        .collect::<Result<Vec<_>>>()?;

    let logs_path = dir.join(CHANGE_LOGS_FILE);
    let change_logs: BTreeMap<String, ChangeLog> = if logs_path.exists() {
        let text = fs::read_to_string(&logs_path).map_err(|e| Error::io(&logs_path, e))?;
        serde_json::from_str(&text).map_err(|e| parse_err(&logs_path, e.line(), e.to_string()))?
    } else {
        BTreeMap::new()
    };

    let classes_path = dir.join(CLASSES_FILE);
    let class_vocabulary = if classes_path.exists() {
        let text = fs::read_to_string(&classes_path).map_err(|e| Error::io(&classes_path, e))?;
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    } else {
        let mut seen: BTreeSet<String> = samples.iter().map(|s| s.anchor_label.clone()).collect();
        seen.extend(
            change_logs
                .values()
                .flat_map(|l| l.events.iter().map(|e| e.new_label.clone())),
        );
        seen.into_iter().collect()
    };
    SampleSet::new(samples, change_logs, class_vocabulary)
}

fn save_csv_dir(set: &SampleSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &set.samples {
        let csv_path = dir.join(format!("{}.csv", s.sample_id));
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| Error::Schema(e.to_string()))?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(s.band_names.iter().cloned());
        w.write_record(&header)
            .map_err(|e| Error::Schema(e.to_string()))?;
        for (t, ts) in s.timestamps.iter().enumerate() {
            let mut row = vec![ts.to_string()];
            row.extend(s.values.column(t).iter().map(|v| format!("{v:?}")));
            w.write_record(&row)
                .map_err(|e| Error::Schema(e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let meta = format!(
            "sample_id={}\nanchor_index={}\nanchor_label={}\n",
            s.sample_id, s.anchor_index, s.anchor_label
        );
        let meta_path = csv_path.with_extension(META_EXT);
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    }
    let classes_path = dir.join(CLASSES_FILE);
    fs::write(&classes_path, set.class_vocabulary.join("\n") + "\n")
        .map_err(|e| Error::io(&classes_path, e))?;
    if !set.change_logs.is_empty() {
        let p = dir.join(CHANGE_LOGS_FILE);
        fs::write(&p, serde_json::to_string_pretty(&set.change_logs)?)
            .map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
