//! Versioned on-disk artifacts and their provenance stamps.
//!
//! JSON artifacts (pipeline, calibration) embed the producing config hash and
//! seed directly. CSV artifacts stay plain RFC-4180 tables and carry their
//! provenance in a `<file>.meta.json` sidecar. Model files are little-endian
//! binary blobs with a magic/version/schema-hash header. Consumers refuse to
//! mix artifacts stamped with different config hashes.

use crate::calibration::ThresholdCalibration;
use crate::embedding::{ReferenceEncoder, TaskModel, TrainingMeta};
use crate::error::{Error, Result};
use crate::inference::{ModelScore, Prediction, ScoringMode, SupportClass, SupportSet};
use crate::preprocess::PreprocessPipeline;
use crate::schema::{format_num, FeatureSet};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

pub const MODEL_MAGIC: &[u8; 4] = b"STMB";
pub const MODEL_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub producer: String,
}

/// Write a file through a temp path so failures never leave partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

pub fn write_sidecar(path: &Path, prov: &Provenance) -> Result<()> {
    let text = serde_json::to_string_pretty(prov)?;
    write_atomic(&sidecar_path(path), text.as_bytes())
}

pub fn read_sidecar(path: &Path) -> Result<Option<Provenance>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(side)?;
    Ok(Some(serde_json::from_str(&text)?))
}

/// Reject artifact sets stamped with different config hashes.
pub fn ensure_consistent(stamps: &[(&str, &str)]) -> Result<()> {
    if let Some(((first_name, first_hash), rest)) = stamps.split_first() {
        for (name, hash) in rest {
            if hash != first_hash {
                return Err(Error::Artifact(format!(
                    "config hash mismatch: {first_name} was produced by {first_hash}, \
                     {name} by {hash}"
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Pipeline artifact

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineArtifact {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub feature_set: FeatureSet,
    pub pipeline: PreprocessPipeline,
}

pub fn write_pipeline(path: &Path, artifact: &PipelineArtifact) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(artifact)?.as_bytes())
}

pub fn read_pipeline(path: &Path) -> Result<PipelineArtifact> {
    let artifact: PipelineArtifact = serde_json::from_str(&fs::read_to_string(path)?)?;
    if artifact.version != ARTIFACT_VERSION {
        return Err(Error::Artifact(format!(
            "pipeline artifact version {} unsupported",
            artifact.version
        )));
    }
    Ok(artifact)
}

/// Hash of the pipeline's output schema; models bind to it.
pub fn schema_hash(column_names: &[String]) -> [u8; 32] {
    let joined = column_names.join("\n");
    Sha256::digest(joined.as_bytes()).into()
}

// ---------------------------------------------------------------------------
// Calibration artifact

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub scoring: ScoringMode,
    pub calibration: ThresholdCalibration,
}

pub fn write_calibration(path: &Path, artifact: &CalibrationArtifact) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(artifact)?.as_bytes())
}

pub fn read_calibration(path: &Path) -> Result<CalibrationArtifact> {
    if !path.exists() {
        return Err(Error::MissingThreshold);
    }
    let artifact: CalibrationArtifact = serde_json::from_str(&fs::read_to_string(path)?)?;
    if artifact.version != ARTIFACT_VERSION {
        return Err(Error::Artifact(format!(
            "calibration artifact version {} unsupported",
            artifact.version
        )));
    }
    Ok(artifact)
}

// ---------------------------------------------------------------------------
// Model files

#[derive(Debug, Clone, PartialEq)]
pub struct ModelHeader {
    pub schema_hash: [u8; 32],
    pub config_hash: String,
    pub seed: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u32(vs.len() as u32);
        for v in vs {
            self.f64(*v);
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Artifact("model file truncated".into()));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Artifact("bad utf8 in model".into()))
    }
}

pub fn model_to_bytes(model: &TaskModel, header: &ModelHeader) -> Vec<u8> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(MODEL_MAGIC);
    w.u32(MODEL_VERSION);
    w.buf.extend_from_slice(&header.schema_hash);
    w.str(&header.config_hash);
    w.u64(header.seed);
    let enc = &model.encoder;
    w.u32(enc.input_dim as u32);
    w.u32(enc.hidden_dim as u32);
    w.u32(enc.dim as u32);
    w.str(&model.benign_class);
    w.str(&model.attack_class);
    w.u64(model.meta.seed);
    w.u32(model.meta.epochs as u32);
    w.f64(model.meta.margin);
    w.f64s(&model.meta.loss_curve);
    w.f64s(&enc.w1);
    w.f64s(&enc.b1);
    w.f64s(&enc.w2);
    w.f64s(&enc.b2);
    w.buf
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(TaskModel, ModelHeader)> {
    let mut r = Reader { buf: bytes, at: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Artifact("not a task-model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(Error::Artifact(format!("model version {version} unsupported")));
    }
    let schema_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
    let config_hash = r.str()?;
    let seed = r.u64()?;
    let input_dim = r.u32()? as usize;
    let hidden_dim = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let benign_class = r.str()?;
    let attack_class = r.str()?;
    let meta_seed = r.u64()?;
    let epochs = r.u32()? as usize;
    let margin = r.f64()?;
    let loss_curve = r.f64s()?;
    let w1 = r.f64s()?;
    let b1 = r.f64s()?;
    let w2 = r.f64s()?;
    let b2 = r.f64s()?;
    if w1.len() != hidden_dim * input_dim
        || b1.len() != hidden_dim
        || w2.len() != dim * hidden_dim
        || b2.len() != dim
    {
        return Err(Error::Artifact("model weight shapes corrupt".into()));
    }
    Ok((
        TaskModel {
            benign_class,
            attack_class,
            encoder: ReferenceEncoder {
                input_dim,
                hidden_dim,
                dim,
                w1,
                b1,
                w2,
                b2,
            },
            meta: TrainingMeta {
                seed: meta_seed,
                epochs,
                margin,
                loss_curve,
            },
        },
        ModelHeader {
            schema_hash,
            config_hash,
            seed,
        },
    ))
}

pub fn write_model(path: &Path, model: &TaskModel, header: &ModelHeader) -> Result<()> {
    write_atomic(path, &model_to_bytes(model, header))
}

pub fn read_model(path: &Path) -> Result<(TaskModel, ModelHeader)> {
    model_from_bytes(&fs::read(path)?)
}

/// Deterministic model file name for one task.
pub fn model_file_name(attack_class: &str) -> String {
    let safe: String = attack_class
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("task_{safe}.stm")
}

/// Load every `.stm` file in a directory, sorted by file name.
pub fn read_model_dir(dir: &Path) -> Result<Vec<(TaskModel, ModelHeader)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "stm").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyModelSet);
    }
    paths.iter().map(|p| read_model(p)).collect()
}

// ---------------------------------------------------------------------------
// Support CSV

pub fn write_support_csv(path: &Path, support: &SupportSet, column_names: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["class".to_string()];
    header.extend(column_names.iter().cloned());
    wtr.write_record(&header)?;
    for class in &support.classes {
        for row in &class.rows {
            let mut rec = vec![class.name.clone()];
            rec.extend(row.iter().map(|v| format_num(*v)));
            wtr.write_record(&rec)?;
        }
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::Artifact(format!("support csv: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_support_csv(path: &Path, expected_columns: &[String]) -> Result<SupportSet> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.len() != expected_columns.len() + 1 || &headers[0] != "class" {
        return Err(Error::SchemaMismatch(format!(
            "support CSV {} does not match the pipeline schema",
            path.display()
        )));
    }
    for (h, expect) in headers.iter().skip(1).zip(expected_columns) {
        if h != expect {
            return Err(Error::SchemaMismatch(format!(
                "support CSV column {h:?} does not match pipeline column {expect:?}"
            )));
        }
    }
    let mut classes: Vec<SupportClass> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let name = record
            .get(0)
            .ok_or_else(|| Error::SchemaMismatch("short support record".into()))?
            .to_string();
        let mut row = Vec::with_capacity(expected_columns.len());
        for cell in record.iter().skip(1) {
            row.push(cell.parse::<f64>().map_err(|_| {
                Error::SchemaMismatch(format!("support CSV: bad number {cell:?}"))
            })?);
        }
        match classes.iter_mut().find(|c| c.name == name) {
            Some(c) => c.rows.push(row),
            None => classes.push(SupportClass {
                name,
                rows: vec![row],
            }),
        }
    }
    let k = classes.iter().map(|c| c.rows.len()).max().unwrap_or(0);
    Ok(SupportSet {
        classes,
        k,
        method: "greedy-farthest-point".to_string(),
        seed: 0,
    })
}

// ---------------------------------------------------------------------------
// Predictions CSV

pub fn write_predictions_csv(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let model_names: Vec<String> = predictions
        .first()
        .map(|p| p.per_model.iter().map(|s| s.model.clone()).collect())
        .unwrap_or_default();
    let mut header = vec![
        "query_id".to_string(),
        "label".to_string(),
        "mean_similarity".to_string(),
    ];
    for name in &model_names {
        header.push(format!("sim_{name}"));
        header.push(format!("vote_{name}"));
    }
    wtr.write_record(&header)?;
    for p in predictions {
        let mut rec = vec![
            p.query_id.to_string(),
            p.label.clone(),
            format_num(p.mean_similarity),
        ];
        for s in &p.per_model {
            rec.push(format_num(s.similarity));
            rec.push(s.label.clone());
        }
        wtr.write_record(&rec)?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::Artifact(format!("predictions csv: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let model_names: Vec<String> = headers
        .iter()
        .filter_map(|h| h.strip_prefix("sim_").map(str::to_string))
        .collect();
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let get = |i: usize| -> Result<&str> {
            record
                .get(i)
                .ok_or_else(|| Error::SchemaMismatch("short prediction record".into()))
        };
        let query_id: usize = get(0)?
            .parse()
            .map_err(|_| Error::SchemaMismatch("bad query id".into()))?;
        let label = get(1)?.to_string();
        let mean_similarity: f64 = get(2)?
            .parse()
            .map_err(|_| Error::SchemaMismatch("bad mean similarity".into()))?;
        let mut per_model = Vec::with_capacity(model_names.len());
        for (mi, name) in model_names.iter().enumerate() {
            let sim: f64 = get(3 + mi * 2)?
                .parse()
                .map_err(|_| Error::SchemaMismatch("bad model similarity".into()))?;
            per_model.push(ModelScore {
                model: name.clone(),
                similarity: sim,
                label: get(4 + mi * 2)?.to_string(),
            });
        }
        out.push(Prediction {
            query_id,
            label,
            mean_similarity,
            per_model,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Truth CSV (query id -> label)

pub fn write_truth_csv(path: &Path, truth: &[String]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["query_id", "label"])?;
    for (i, label) in truth.iter().enumerate() {
        wtr.write_record([i.to_string().as_str(), label])?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| Error::Artifact(format!("truth csv: {e}")))?;
    write_atomic(path, &bytes)
}

pub fn read_truth_csv(path: &Path) -> Result<Vec<(usize, String)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let id: usize = record
            .get(0)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::SchemaMismatch("bad truth query id".into()))?;
        let label = record
            .get(1)
            .ok_or_else(|| Error::SchemaMismatch("short truth record".into()))?
            .to_string();
        out.push((id, label));
    }
    Ok(out)
}
