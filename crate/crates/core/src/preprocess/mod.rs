//! Fitted preprocessing pipeline: one-hot encoding of categorical columns,
//! MinMax scaling of numeric columns, and optional forest-importance feature
//! selection. Fit once on training data; apply never mutates fitted state.

pub mod forest;

use crate::error::{Error, Result};
use crate::schema::{ColumnKind, FeatureTable};
use forest::{Forest, ForestConfig};
use serde::{Deserialize, Serialize};

/// History strings are bucketed to their first letters before one-hot so the
/// fitted category map stays bounded.
const HISTORY_BUCKET_LEN: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum ColumnPipeline {
    Numeric {
        name: String,
        min: f64,
        max: f64,
    },
    Categorical {
        name: String,
        /// Training categories in first-appearance order.
        categories: Vec<String>,
    },
}

impl ColumnPipeline {
    pub fn name(&self) -> &str {
        match self {
            ColumnPipeline::Numeric { name, .. } => name,
            ColumnPipeline::Categorical { name, .. } => name,
        }
    }
}

/// Dense numeric matrix produced by [`PreprocessPipeline::apply`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub column_names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PreprocessPipeline {
    pub schema_version: u32,
    pub importance_threshold: Option<f64>,
    pub seed: u64,
    pub columns: Vec<ColumnPipeline>,
    /// Expanded column names, one per one-hot/scaled output, pre-selection.
    pub expanded_names: Vec<String>,
    /// Keep-flag per expanded column.
    pub selected_mask: Vec<bool>,
    /// Normalized forest importances per expanded column, when selection ran.
    pub importances: Option<Vec<f64>>,
}

pub const PIPELINE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub importance_threshold: Option<f64>,
    pub seed: u64,
    pub forest: ForestConfig,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            importance_threshold: None,
            seed: 0,
            forest: ForestConfig::default(),
        }
    }
}

fn bucket_category(column: &str, raw: &str) -> String {
    if column == "history" {
        raw.chars().take(HISTORY_BUCKET_LEN).collect()
    } else {
        raw.to_string()
    }
}

/// Fit the pipeline on labeled training data. When an importance threshold is
/// set, a seeded Gini forest on the expanded matrix decides which columns
/// survive.
pub fn fit(train: &FeatureTable, opts: &FitOptions) -> Result<PreprocessPipeline> {
    if train.rows.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    if let Some(t) = opts.importance_threshold {
        if t != 0.01 && t != 0.02 {
            return Err(Error::InvalidSpec(format!(
                "importance threshold must be none, 0.01 or 0.02, got {t}"
            )));
        }
    }

    let mut columns = Vec::with_capacity(train.columns.len());
    for (ci, (name, kind)) in train.columns.iter().enumerate() {
        match kind {
            ColumnKind::Numeric => {
                let mut min = f64::INFINITY;
                let mut max = f64::NEG_INFINITY;
                for row in &train.rows {
                    let v = row[ci].as_num().ok_or_else(|| {
                        Error::SchemaMismatch(format!("column {name:?}: expected number"))
                    })?;
                    if !v.is_finite() {
                        return Err(Error::InvalidSpec(format!(
                            "column {name:?}: non-finite training value"
                        )));
                    }
                    min = min.min(v);
                    max = max.max(v);
                }
                columns.push(ColumnPipeline::Numeric {
                    name: name.clone(),
                    min,
                    max,
                });
            }
            ColumnKind::Categorical => {
                let mut categories: Vec<String> = Vec::new();
                for row in &train.rows {
                    let raw = row[ci].as_cat().ok_or_else(|| {
                        Error::SchemaMismatch(format!("column {name:?}: expected category"))
                    })?;
                    let cat = bucket_category(name, raw);
                    if !categories.contains(&cat) {
                        categories.push(cat);
                    }
                }
                columns.push(ColumnPipeline::Categorical {
                    name: name.clone(),
                    categories,
                });
            }
        }
    }

    let mut expanded_names = Vec::new();
    for col in &columns {
        match col {
            ColumnPipeline::Numeric { name, .. } => expanded_names.push(name.clone()),
            ColumnPipeline::Categorical { name, categories } => {
                for cat in categories {
                    expanded_names.push(format!("{name}_{cat}"));
                }
            }
        }
    }

    let mut pipeline = PreprocessPipeline {
        schema_version: PIPELINE_SCHEMA_VERSION,
        importance_threshold: opts.importance_threshold,
        seed: opts.seed,
        selected_mask: vec![true; expanded_names.len()],
        expanded_names,
        columns,
        importances: None,
    };

    if let Some(threshold) = opts.importance_threshold {
        let labels = train
            .labels
            .as_ref()
            .ok_or_else(|| Error::SchemaMismatch("importance selection needs labels".into()))?;
        let mut class_names: Vec<&str> = Vec::new();
        let mut y = Vec::with_capacity(labels.len());
        for lab in labels {
            let id = match class_names.iter().position(|c| c == lab) {
                Some(i) => i,
                None => {
                    class_names.push(lab);
                    class_names.len() - 1
                }
            };
            y.push(id);
        }
        if class_names.len() < 2 {
            return Err(Error::SingleClassTraining);
        }
        let matrix = expand_rows(&pipeline, train, false)?;
        let forest = Forest::fit(
            &matrix,
            &y,
            class_names.len(),
            &ForestConfig {
                seed: opts.seed,
                ..opts.forest
            },
        );
        pipeline.selected_mask = forest
            .importances
            .iter()
            .map(|&imp| imp >= threshold)
            .collect();
        pipeline.importances = Some(forest.importances);
        if pipeline.selected_mask.iter().all(|&keep| !keep) {
            return Err(Error::InvalidSpec(
                "importance selection masked out every column".into(),
            ));
        }
    }
    Ok(pipeline)
}

/// Expand and scale rows into the full (pre-selection) matrix.
fn expand_rows(
    pipeline: &PreprocessPipeline,
    table: &FeatureTable,
    clamp: bool,
) -> Result<Vec<Vec<f64>>> {
    let width = pipeline.expanded_names.len();
    let mut out = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        let mut expanded = Vec::with_capacity(width);
        for (ci, col) in pipeline.columns.iter().enumerate() {
            match col {
                ColumnPipeline::Numeric { name, min, max } => {
                    let v = row[ci].as_num().ok_or_else(|| {
                        Error::SchemaMismatch(format!("column {name:?}: expected number"))
                    })?;
                    let scaled = if max == min {
                        0.0
                    } else {
                        (v - min) / (max - min)
                    };
                    let scaled = if clamp { scaled.clamp(0.0, 1.0) } else { scaled };
                    expanded.push(scaled);
                }
                ColumnPipeline::Categorical { name, categories } => {
                    let raw = row[ci].as_cat().ok_or_else(|| {
                        Error::SchemaMismatch(format!("column {name:?}: expected category"))
                    })?;
                    let cat = bucket_category(name, raw);
                    // Unseen categories encode as an all-zero group.
                    for known in categories {
                        expanded.push(if *known == cat { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        out.push(expanded);
    }
    Ok(out)
}

impl PreprocessPipeline {
    /// Expanded column names that survive selection, in pipeline order.
    pub fn output_columns(&self) -> Vec<String> {
        self.expanded_names
            .iter()
            .zip(&self.selected_mask)
            .filter(|(_, &keep)| keep)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Transform a table through the fitted pipeline. Input columns must
    /// match the fitted schema exactly; test-time numerics clamp to [0, 1].
    pub fn apply(&self, table: &FeatureTable) -> Result<FeatureMatrix> {
        if table.columns.len() != self.columns.len() {
            return Err(Error::SchemaMismatch(format!(
                "pipeline expects {} columns, table has {}",
                self.columns.len(),
                table.columns.len()
            )));
        }
        for ((name, _), col) in table.columns.iter().zip(&self.columns) {
            if name != col.name() {
                return Err(Error::SchemaMismatch(format!(
                    "pipeline column {:?} does not match table column {name:?}",
                    col.name()
                )));
            }
        }
        let expanded = expand_rows(self, table, true)?;
        let rows = expanded
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .zip(&self.selected_mask)
                    .filter(|(_, &keep)| keep)
                    .map(|(v, _)| v)
                    .collect()
            })
            .collect();
        Ok(FeatureMatrix {
            column_names: self.output_columns(),
            rows,
            labels: table.labels.clone(),
        })
    }
}
