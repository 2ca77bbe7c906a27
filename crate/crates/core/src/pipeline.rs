//! File-to-file pipeline stages. The CLI maps subcommands onto these; tests
//! drive them directly so both exercise identical artifact paths.
//!
//! Every stage stamps its outputs with the config hash and seed, refuses
//! inputs stamped by a different configuration, and removes partial outputs
//! when it fails.

use crate::artifacts::{self, CalibrationArtifact, ModelHeader, PipelineArtifact, Provenance};
use crate::calibration::{calibrate, ThresholdCalibration};
use crate::config::RunConfig;
use crate::embedding::{train_task_model, TaskData, TaskModel};
use crate::error::{Error, Result};
use crate::flow::{self, FlowTable};
use crate::fusion::{fuse, QualityReport};
use crate::inference::{build_support_set, detect, Prediction, UNKNOWN_LABEL};
use crate::metrics::{compute_metrics, MetricsReport};
use crate::packet::{self, packet_row, PacketRecord};
use crate::pcap::{decode_packet, read_capture};
use crate::preprocess::{fit, FeatureMatrix, FitOptions};
use crate::schema::FeatureTable;
use crate::synth::{generate, SynthSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Removes declared outputs on drop unless the stage committed.
struct OutputGuard {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        Self {
            paths: Vec::new(),
            committed: false,
        }
    }
    fn track(&mut self, path: &Path) {
        self.paths.push(path.to_path_buf());
    }
    fn commit(&mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed {
            for path in &self.paths {
                let _ = std::fs::remove_file(path);
            }
        }
    }
}

fn provenance(config: &RunConfig, producer: &str) -> Provenance {
    Provenance {
        config_hash: config.config_hash(),
        seed: config.seed,
        producer: producer.to_string(),
    }
}

/// Refuse CSV inputs stamped by another configuration (unstamped files pass).
fn check_input_stamp(path: &Path, config: &RunConfig) -> Result<()> {
    if let Some(prov) = artifacts::read_sidecar(path)? {
        artifacts::ensure_consistent(&[
            ("current config", &config.config_hash()),
            (&path.display().to_string(), &prov.config_hash),
        ])?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// extract

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractReport {
    pub packets_decoded: usize,
    pub packets_skipped: usize,
    pub skipped: Vec<(usize, String)>,
    pub flows: usize,
    pub flows_csv: PathBuf,
    pub packets_csv: PathBuf,
}

/// Decode a capture into the flow and packet CSVs. Malformed frames are
/// reported and skipped, never silently dropped.
pub fn run_extract(pcap_path: &Path, out_dir: &Path, config: &RunConfig) -> Result<ExtractReport> {
    let raw = read_capture(pcap_path)?;
    let mut decoded = Vec::with_capacity(raw.len());
    let mut skipped = Vec::new();
    for (i, pkt) in raw.iter().enumerate() {
        match decode_packet(pkt) {
            Ok(p) => decoded.push(p),
            Err(e) => skipped.push((i, e.to_string())),
        }
    }
    let mut table = FlowTable::new(config.tcp_idle_timeout, config.udp_idle_timeout);
    for pkt in &decoded {
        table.assign_packet(pkt);
    }
    let flows = table.finish();
    let rows: Vec<PacketRecord> = decoded.iter().map(packet_row).collect();

    let stem = pcap_path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "capture".to_string());
    std::fs::create_dir_all(out_dir)?;
    let flows_csv = out_dir.join(format!("{stem}.flows.csv"));
    let packets_csv = out_dir.join(format!("{stem}.packets.csv"));

    let mut guard = OutputGuard::new();
    guard.track(&flows_csv);
    guard.track(&packets_csv);
    flow::write_flow_csv(&flows, &flows_csv)?;
    packet::write_packet_csv(&rows, &packets_csv)?;
    let prov = provenance(config, "extract");
    artifacts::write_sidecar(&flows_csv, &prov)?;
    artifacts::write_sidecar(&packets_csv, &prov)?;
    guard.commit();

    Ok(ExtractReport {
        packets_decoded: decoded.len(),
        packets_skipped: skipped.len(),
        skipped,
        flows: flows.len(),
        flows_csv,
        packets_csv,
    })
}

// ---------------------------------------------------------------------------
// fuse

pub fn run_fuse(
    flows_csv: &Path,
    packets_csv: &Path,
    out: &Path,
    config: &RunConfig,
) -> Result<QualityReport> {
    check_input_stamp(flows_csv, config)?;
    check_input_stamp(packets_csv, config)?;
    let flows = flow::read_flow_csv(flows_csv)?;
    let packets = packet::read_packet_csv(packets_csv)?;
    let (table, quality) = fuse(&flows, &packets)?;

    let mut guard = OutputGuard::new();
    guard.track(out);
    table.write_csv(out)?;
    artifacts::write_sidecar(out, &provenance(config, "fuse"))?;
    let quality_path = out.with_extension("quality.json");
    guard.track(&quality_path);
    artifacts::write_atomic(&quality_path, serde_json::to_string_pretty(&quality)?.as_bytes())?;
    guard.commit();
    Ok(quality)
}

// ---------------------------------------------------------------------------
// preprocess (fit)

pub fn run_preprocess_fit(train_csv: &Path, out: &Path, config: &RunConfig) -> Result<PipelineArtifact> {
    check_input_stamp(train_csv, config)?;
    let full = FeatureTable::read_csv(train_csv)?;
    if full.labels.is_none() {
        return Err(Error::SchemaMismatch(format!(
            "{} has no label column",
            train_csv.display()
        )));
    }
    let selected = full.select(&config.feature_set.columns())?;
    let pipeline = fit(
        &selected,
        &FitOptions {
            importance_threshold: config.importance_threshold,
            seed: config.seed,
            forest: config.forest_config(),
        },
    )?;
    let artifact = PipelineArtifact {
        version: artifacts::ARTIFACT_VERSION,
        config_hash: config.config_hash(),
        seed: config.seed,
        feature_set: config.feature_set,
        pipeline,
    };
    let mut guard = OutputGuard::new();
    guard.track(out);
    artifacts::write_pipeline(out, &artifact)?;
    guard.commit();
    Ok(artifact)
}

// ---------------------------------------------------------------------------
// train

fn load_matrix(
    csv: &Path,
    artifact: &PipelineArtifact,
    config: &RunConfig,
) -> Result<FeatureMatrix> {
    check_input_stamp(csv, config)?;
    let full = FeatureTable::read_csv(csv)?;
    let selected = full.select(&artifact.feature_set.columns())?;
    artifact.pipeline.apply(&selected)
}

fn check_pipeline_stamp(artifact: &PipelineArtifact, config: &RunConfig) -> Result<()> {
    artifacts::ensure_consistent(&[
        ("current config", &config.config_hash()),
        ("pipeline artifact", &artifact.config_hash),
    ])
}

/// Group a labeled matrix into benign rows and per-attack-class rows while
/// keeping original row order (training depends on it for determinism).
fn split_classes(matrix: &FeatureMatrix, benign: &str) -> Result<(Vec<usize>, Vec<(String, Vec<usize>)>)> {
    let labels = matrix
        .labels
        .as_ref()
        .ok_or_else(|| Error::SchemaMismatch("training data has no labels".into()))?;
    if labels.iter().any(|l| l == UNKNOWN_LABEL) {
        return Err(Error::UnknownLabel(UNKNOWN_LABEL.to_string()));
    }
    let mut benign_rows = Vec::new();
    let mut classes: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, label) in labels.iter().enumerate() {
        if label == benign {
            benign_rows.push(i);
        } else {
            match classes.iter_mut().find(|(name, _)| name == label) {
                Some((_, rows)) => rows.push(i),
                None => classes.push((label.clone(), vec![i])),
            }
        }
    }
    if benign_rows.is_empty() {
        return Err(Error::MissingClass(benign.to_string()));
    }
    if classes.is_empty() {
        return Err(Error::InsufficientSamples(
            "training data has no attack classes".into(),
        ));
    }
    Ok((benign_rows, classes))
}

pub fn run_train(
    train_csv: &Path,
    pipeline_path: &Path,
    out_dir: &Path,
    config: &RunConfig,
) -> Result<Vec<PathBuf>> {
    let artifact = artifacts::read_pipeline(pipeline_path)?;
    check_pipeline_stamp(&artifact, config)?;
    let matrix = load_matrix(train_csv, &artifact, config)?;
    let (_, classes) = split_classes(&matrix, &config.benign_label)?;
    let labels = matrix.labels.as_ref().expect("checked in split_classes");

    std::fs::create_dir_all(out_dir)?;
    let schema_hash = artifacts::schema_hash(&matrix.column_names);
    let header = ModelHeader {
        schema_hash,
        config_hash: config.config_hash(),
        seed: config.seed,
    };
    let mut guard = OutputGuard::new();
    let mut written = Vec::new();
    for (attack, _) in &classes {
        // Task rows keep original table order; groups follow label equality.
        let mut rows = Vec::new();
        let mut groups = Vec::new();
        for (i, label) in labels.iter().enumerate() {
            if label == &config.benign_label || label == attack {
                rows.push(matrix.rows[i].clone());
                groups.push(u8::from(label == attack));
            }
        }
        let model = train_task_model(
            &config.benign_label,
            attack,
            &TaskData { rows, groups },
            &config.train_config(),
        )?;
        let path = out_dir.join(artifacts::model_file_name(attack));
        guard.track(&path);
        artifacts::write_model(&path, &model, &header)?;
        written.push(path);
    }
    guard.commit();
    Ok(written)
}

// ---------------------------------------------------------------------------
// support

pub fn run_support(
    train_csv: &Path,
    pipeline_path: &Path,
    out: &Path,
    config: &RunConfig,
) -> Result<()> {
    let artifact = artifacts::read_pipeline(pipeline_path)?;
    check_pipeline_stamp(&artifact, config)?;
    let matrix = load_matrix(train_csv, &artifact, config)?;
    let (_, classes) = split_classes(&matrix, &config.benign_label)?;
    let mut class_names = vec![config.benign_label.clone()];
    class_names.extend(classes.iter().map(|(name, _)| name.clone()));
    let support = build_support_set(&matrix, &class_names, config.support_k, config.seed)?;
    let mut guard = OutputGuard::new();
    guard.track(out);
    artifacts::write_support_csv(out, &support, &matrix.column_names)?;
    artifacts::write_sidecar(out, &provenance(config, "support"))?;
    guard.commit();
    Ok(())
}

// ---------------------------------------------------------------------------
// calibrate

fn load_models(models_dir: &Path, config: &RunConfig) -> Result<Vec<TaskModel>> {
    let loaded = artifacts::read_model_dir(models_dir)?;
    let mut stamps: Vec<(String, String)> = vec![("current config".into(), config.config_hash())];
    for (model, header) in &loaded {
        stamps.push((
            format!("model {}", model.attack_class),
            header.config_hash.clone(),
        ));
    }
    let stamp_refs: Vec<(&str, &str)> = stamps
        .iter()
        .map(|(a, b)| (a.as_str(), b.as_str()))
        .collect();
    artifacts::ensure_consistent(&stamp_refs)?;
    let first_schema = loaded[0].1.schema_hash;
    if loaded.iter().any(|(_, h)| h.schema_hash != first_schema) {
        return Err(Error::Artifact(
            "models were trained against different pipeline schemas".into(),
        ));
    }
    Ok(loaded.into_iter().map(|(m, _)| m).collect())
}

fn check_model_schema(models: &[TaskModel], matrix: &FeatureMatrix, models_dir: &Path) -> Result<()> {
    let width = matrix.column_names.len();
    if let Some(m) = models.iter().find(|m| m.encoder.input_dim != width) {
        return Err(Error::SchemaMismatch(format!(
            "model {} in {} expects {} features, pipeline emits {width}",
            m.attack_class,
            models_dir.display(),
            m.encoder.input_dim
        )));
    }
    Ok(())
}

pub fn run_calibrate(
    models_dir: &Path,
    pipeline_path: &Path,
    train_csv: &Path,
    out: &Path,
    config: &RunConfig,
) -> Result<ThresholdCalibration> {
    let artifact = artifacts::read_pipeline(pipeline_path)?;
    check_pipeline_stamp(&artifact, config)?;
    let models = load_models(models_dir, config)?;
    let matrix = load_matrix(train_csv, &artifact, config)?;
    check_model_schema(&models, &matrix, models_dir)?;
    let (benign_rows, classes) = split_classes(&matrix, &config.benign_label)?;

    // Models pair with classes by attack-class name, in model order.
    let mut class_rows: Vec<(String, Vec<Vec<f64>>)> = Vec::with_capacity(models.len());
    for model in &models {
        let rows = classes
            .iter()
            .find(|(name, _)| name == &model.attack_class)
            .map(|(_, idx)| idx.iter().map(|&i| matrix.rows[i].clone()).collect())
            .ok_or_else(|| Error::EmptyClassData(model.attack_class.clone()))?;
        class_rows.push((model.attack_class.clone(), rows));
    }
    let extra: Vec<&String> = classes
        .iter()
        .map(|(name, _)| name)
        .filter(|name| !models.iter().any(|m| &&m.attack_class == name))
        .collect();
    if !extra.is_empty() {
        return Err(Error::Artifact(format!(
            "training data has classes with no task model: {extra:?}"
        )));
    }

    let mut class_names = vec![config.benign_label.clone()];
    class_names.extend(class_rows.iter().map(|(name, _)| name.clone()));
    let support = build_support_set(&matrix, &class_names, config.support_k, config.seed)?;
    let benign: Vec<Vec<f64>> = benign_rows.iter().map(|&i| matrix.rows[i].clone()).collect();
    let calibration = calibrate(
        &models,
        &support,
        &benign,
        &class_rows,
        &config.grid()?,
        config.scoring,
    )?;
    let out_artifact = CalibrationArtifact {
        version: artifacts::ARTIFACT_VERSION,
        config_hash: config.config_hash(),
        seed: config.seed,
        scoring: config.scoring,
        calibration: calibration.clone(),
    };
    let mut guard = OutputGuard::new();
    guard.track(out);
    artifacts::write_calibration(out, &out_artifact)?;
    guard.commit();
    Ok(calibration)
}

// ---------------------------------------------------------------------------
// detect

pub fn run_detect(
    models_dir: &Path,
    pipeline_path: &Path,
    support_csv: &Path,
    calib_path: &Path,
    queries_csv: &Path,
    out: &Path,
    config: &RunConfig,
) -> Result<Vec<Prediction>> {
    let artifact = artifacts::read_pipeline(pipeline_path)?;
    let calib = artifacts::read_calibration(calib_path)?;
    let models = load_models(models_dir, config)?;
    artifacts::ensure_consistent(&[
        ("current config", &config.config_hash()),
        ("pipeline artifact", &artifact.config_hash),
        ("calibration artifact", &calib.config_hash),
    ])?;
    check_input_stamp(support_csv, config)?;
    let matrix = load_matrix(queries_csv, &artifact, config)?;
    check_model_schema(&models, &matrix, models_dir)?;
    let support = artifacts::read_support_csv(support_csv, &matrix.column_names)?;
    let predictions = detect(
        &matrix,
        &models,
        &support,
        calib.calibration.tau_star,
        calib.scoring,
    )?;
    let mut guard = OutputGuard::new();
    guard.track(out);
    artifacts::write_predictions_csv(out, &predictions)?;
    artifacts::write_sidecar(out, &provenance(config, "detect"))?;
    guard.commit();
    Ok(predictions)
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportArtifact {
    pub version: u32,
    pub config_hash: Option<String>,
    pub report: MetricsReport,
}

pub fn run_evaluate(pred_csv: &Path, truth_csv: &Path, out: &Path) -> Result<MetricsReport> {
    let predictions = artifacts::read_predictions_csv(pred_csv)?;
    let mut truth = artifacts::read_truth_csv(truth_csv)?;
    truth.sort_by_key(|(id, _)| *id);
    if truth.len() != predictions.len() {
        return Err(Error::LengthMismatch {
            expected: predictions.len(),
            got: truth.len(),
        });
    }
    let mut by_id: Vec<Option<&Prediction>> = vec![None; truth.len()];
    for p in &predictions {
        let slot = by_id.get_mut(p.query_id).ok_or_else(|| {
            Error::SchemaMismatch(format!("prediction for unknown query id {}", p.query_id))
        })?;
        *slot = Some(p);
    }
    let mut y_true = Vec::with_capacity(truth.len());
    let mut y_pred = Vec::with_capacity(truth.len());
    for (id, label) in &truth {
        let p = by_id[*id].ok_or_else(|| {
            Error::SchemaMismatch(format!("no prediction for query id {id}"))
        })?;
        y_true.push(label.clone());
        y_pred.push(p.label.clone());
    }
    let report = compute_metrics(&y_true, &y_pred, None, None)?;
    let artifact = ReportArtifact {
        version: artifacts::ARTIFACT_VERSION,
        config_hash: artifacts::read_sidecar(pred_csv)?.map(|p| p.config_hash),
        report: report.clone(),
    };
    let mut guard = OutputGuard::new();
    guard.track(out);
    artifacts::write_atomic(out, serde_json::to_string_pretty(&artifact)?.as_bytes())?;
    let text_path = out.with_extension("txt");
    guard.track(&text_path);
    artifacts::write_atomic(&text_path, report.render_text().as_bytes())?;
    guard.commit();
    Ok(report)
}

// ---------------------------------------------------------------------------
// synth

pub struct SynthOutputs {
    pub train_csv: PathBuf,
    pub test_csv: PathBuf,
    pub truth_csv: PathBuf,
}

pub fn run_synth(spec: &SynthSpec, out_dir: &Path, config: &RunConfig) -> Result<SynthOutputs> {
    let data = generate(spec)?;
    std::fs::create_dir_all(out_dir)?;
    let outputs = SynthOutputs {
        train_csv: out_dir.join("train.csv"),
        test_csv: out_dir.join("test.csv"),
        truth_csv: out_dir.join("truth.csv"),
    };
    let mut guard = OutputGuard::new();
    guard.track(&outputs.train_csv);
    guard.track(&outputs.test_csv);
    guard.track(&outputs.truth_csv);
    data.train.write_csv(&outputs.train_csv)?;
    data.test.write_csv(&outputs.test_csv)?;
    artifacts::write_truth_csv(&outputs.truth_csv, &data.truth)?;
    let prov = provenance(config, "synth");
    artifacts::write_sidecar(&outputs.train_csv, &prov)?;
    artifacts::write_sidecar(&outputs.test_csv, &prov)?;
    artifacts::write_sidecar(&outputs.truth_csv, &prov)?;
    guard.commit();
    Ok(outputs)
}
