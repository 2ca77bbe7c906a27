//! Open-set inference: support-set construction, per-model similarity
//! scoring, majority voting and the threshold decision rule.
//!
//! Every task model scores a query against the support set under its own
//! embedding (nearest support sample by cosine, or class prototypes behind a
//! switch). The mean similarity across models gates the unknown decision:
//! strictly below the calibrated threshold means unknown, otherwise the
//! majority-voted class wins.

use crate::embedding::{cosine, normalize, TaskModel};
use crate::error::{Error, Result};
use crate::preprocess::FeatureMatrix;
use serde::{Deserialize, Serialize};

pub const UNKNOWN_LABEL: &str = "U";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoringMode {
    NearestNeighbor,
    ClassPrototype,
}

impl ScoringMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Self::NearestNeighbor),
            "prototype" => Ok(Self::ClassPrototype),
            other => Err(Error::InvalidSpec(format!(
                "unknown scoring mode {other:?} (expected nearest or prototype)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NearestNeighbor => "nearest",
            Self::ClassPrototype => "prototype",
        }
    }
}

/// Labeled reference rows per class, selected for intra-class diversity.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    pub classes: Vec<SupportClass>,
    pub k: usize,
    pub method: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportClass {
    pub name: String,
    pub rows: Vec<Vec<f64>>,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Greedy farthest-point selection: medoid first, then repeatedly the point
/// maximizing its minimum distance to the already-selected set. Ties resolve
/// to the smallest row index so selection is deterministic.
fn select_diverse(rows: &[&Vec<f64>], k: usize) -> Vec<usize> {
    if rows.is_empty() {
        return Vec::new();
    }
    if rows.len() <= k {
        return (0..rows.len()).collect();
    }
    let mut totals = vec![0.0f64; rows.len()];
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            if i != j {
                totals[i] += euclidean(rows[i], rows[j]);
            }
        }
    }
    let medoid = totals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("non-empty rows");
    let mut selected = vec![medoid];
    let mut min_dist: Vec<f64> = rows.iter().map(|r| euclidean(r, rows[medoid])).collect();
    while selected.len() < k {
        let mut best = None;
        for (i, &d) in min_dist.iter().enumerate() {
            if selected.contains(&i) {
                continue;
            }
            best = match best {
                None => Some((i, d)),
                Some((_, bd)) if d > bd => Some((i, d)),
                other => other,
            };
        }
        let (next, _) = best.expect("candidates remain");
        selected.push(next);
        for (i, md) in min_dist.iter_mut().enumerate() {
            *md = md.min(euclidean(rows[i], rows[next]));
        }
    }
    selected
}

/// Build the support set from labeled training rows: per class, up to `k`
/// rows by greedy farthest-point selection in preprocessed feature space.
pub fn build_support_set(
    train: &FeatureMatrix,
    classes: &[String],
    k: usize,
    seed: u64,
) -> Result<SupportSet> {
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::SchemaMismatch("support selection needs labels".into()))?;
    let mut support = SupportSet {
        classes: Vec::with_capacity(classes.len()),
        k,
        method: "greedy-farthest-point".to_string(),
        seed,
    };
    for class in classes {
        let rows: Vec<&Vec<f64>> = train
            .rows
            .iter()
            .zip(labels)
            .filter(|(_, lab)| *lab == class)
            .map(|(r, _)| r)
            .collect();
        if rows.is_empty() {
            return Err(Error::MissingClass(class.clone()));
        }
        let picked = select_diverse(&rows, k);
        support.classes.push(SupportClass {
            name: class.clone(),
            rows: picked.into_iter().map(|i| rows[i].clone()).collect(),
        });
    }
    Ok(support)
}

/// One model's verdict on one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelScore {
    pub model: String,
    pub similarity: f64,
    pub label: String,
}

/// Majority vote over per-model labels. Ties break on higher summed
/// similarity, then on lexicographic class order.
pub fn majority_vote(scores: &[ModelScore]) -> String {
    let mut tally: Vec<(&str, usize, f64)> = Vec::new();
    for s in scores {
        match tally.iter_mut().find(|(name, _, _)| *name == s.label) {
            Some((_, count, sim)) => {
                *count += 1;
                *sim += s.similarity;
            }
            None => tally.push((&s.label, 1, s.similarity)),
        }
    }
    tally
        .into_iter()
        .min_by(|a, b| {
            b.1.cmp(&a.1)
                .then(b.2.total_cmp(&a.2))
                .then(a.0.cmp(b.0))
        })
        .map(|(name, _, _)| name.to_string())
        .expect("at least one vote")
}

/// The open-set decision rule: strictly below the threshold is unknown,
/// otherwise the majority-voted class.
pub fn decide(mean_similarity: f64, tau_star: f64, vote: &str) -> String {
    if mean_similarity < tau_star {
        UNKNOWN_LABEL.to_string()
    } else {
        vote.to_string()
    }
}

/// Pre-embedded support rows for a model set: scoring many queries reuses
/// the per-model support embeddings.
pub struct Scorer<'a> {
    pub models: &'a [TaskModel],
    pub class_names: Vec<String>,
    /// `[model][class][row] -> embedding`; prototypes collapse rows to one.
    embedded: Vec<Vec<Vec<Vec<f64>>>>,
    pub mode: ScoringMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoteOutcome {
    pub per_model: Vec<ModelScore>,
    pub mean_similarity: f64,
    pub vote: String,
}

impl<'a> Scorer<'a> {
    pub fn new(models: &'a [TaskModel], support: &SupportSet, mode: ScoringMode) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::EmptyModelSet);
        }
        let class_names: Vec<String> = support.classes.iter().map(|c| c.name.clone()).collect();
        let mut embedded = Vec::with_capacity(models.len());
        for model in models {
            let mut per_class = Vec::with_capacity(support.classes.len());
            for class in &support.classes {
                let rows: Vec<Vec<f64>> = class.rows.iter().map(|r| model.embed(r)).collect();
                match mode {
                    ScoringMode::NearestNeighbor => per_class.push(rows),
                    ScoringMode::ClassPrototype => {
                        let dim = rows[0].len();
                        let mut mean = vec![0.0; dim];
                        for row in &rows {
                            for (m, v) in mean.iter_mut().zip(row) {
                                *m += v;
                            }
                        }
                        for m in &mut mean {
                            *m /= rows.len() as f64;
                        }
                        per_class.push(vec![normalize(&mean)]);
                    }
                }
            }
            embedded.push(per_class);
        }
        Ok(Self {
            models,
            class_names,
            embedded,
            mode,
        })
    }

    /// Score one query. `skip_model` withholds a task model (pseudo-unknown
    /// simulation) and `skip_class` hides a support class from every model.
    pub fn score(
        &self,
        query: &[f64],
        skip_model: Option<usize>,
        skip_class: Option<&str>,
    ) -> Result<VoteOutcome> {
        let mut per_model = Vec::new();
        for (mi, model) in self.models.iter().enumerate() {
            if skip_model == Some(mi) {
                continue;
            }
            let q = model.embed(query);
            let mut best: Option<(f64, &str)> = None;
            for (ci, class) in self.class_names.iter().enumerate() {
                if skip_class == Some(class.as_str()) {
                    continue;
                }
                for emb in &self.embedded[mi][ci] {
                    let sim = cosine(&q, emb);
                    best = match best {
                        None => Some((sim, class)),
                        Some((bs, _)) if sim > bs => Some((sim, class)),
                        other => other,
                    };
                }
            }
            let (similarity, label) =
                best.ok_or_else(|| Error::MissingClass("support set is empty".into()))?;
            per_model.push(ModelScore {
                model: model.attack_class.clone(),
                similarity,
                label: label.to_string(),
            });
        }
        if per_model.is_empty() {
            return Err(Error::EmptyModelSet);
        }
        let mean_similarity =
            per_model.iter().map(|s| s.similarity).sum::<f64>() / per_model.len() as f64;
        let vote = majority_vote(&per_model);
        Ok(VoteOutcome {
            per_model,
            mean_similarity,
            vote,
        })
    }
}

/// One classified query with its audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub query_id: usize,
    pub label: String,
    pub mean_similarity: f64,
    pub per_model: Vec<ModelScore>,
}

/// Classify a batch of queries against all task models (Algorithm 2
/// semantics: mean similarity gates unknown, majority vote names the class).
pub fn detect(
    queries: &FeatureMatrix,
    models: &[TaskModel],
    support: &SupportSet,
    tau_star: f64,
    mode: ScoringMode,
) -> Result<Vec<Prediction>> {
    if !tau_star.is_finite() {
        return Err(Error::MissingThreshold);
    }
    let scorer = Scorer::new(models, support, mode)?;
    let mut out = Vec::with_capacity(queries.rows.len());
    for (qi, row) in queries.rows.iter().enumerate() {
        let outcome = scorer.score(row, None, None)?;
        out.push(Prediction {
            query_id: qi,
            label: decide(outcome.mean_similarity, tau_star, &outcome.vote),
            mean_similarity: outcome.mean_similarity,
            per_model: outcome.per_model,
        });
    }
    Ok(out)
}
