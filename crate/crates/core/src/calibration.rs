//! Open-set threshold selection by pseudo-unknown simulation.
//!
//! Each known attack class is held out in turn: its task model and its
//! support rows are withheld, the remaining models score the held-out
//! samples together with benign traffic, and the grid threshold maximizing
//! the unknown-class F1 is recorded. The final threshold is the arithmetic
//! mean of the per-class winners.

use crate::embedding::TaskModel;
use crate::error::{Error, Result};
use crate::inference::{Scorer, ScoringMode, SupportSet};
use serde::{Deserialize, Serialize};

/// Candidate decision thresholds, ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    pub values: Vec<f64>,
}

impl ThresholdGrid {
    /// The default operating region: 0.10 to 0.80 in steps of 0.05.
    pub fn default_grid() -> Self {
        Self::new(0.10, 0.80, 0.05).expect("default grid is valid")
    }

    pub fn new(start: f64, end: f64, step: f64) -> Result<Self> {
        if !(start.is_finite() && end.is_finite() && step > 0.0 && end >= start) {
            return Err(Error::InvalidSpec(format!(
                "bad threshold grid [{start}, {end}] step {step}"
            )));
        }
        let count = ((end - start) / step).round() as usize + 1;
        let values: Vec<f64> = (0..count).map(|i| start + i as f64 * step).collect();
        Ok(Self { values })
    }
}

impl Default for ThresholdGrid {
    fn default() -> Self {
        Self::default_grid()
    }
}

/// One sample's aggregated verdict during a pseudo-unknown round.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub truth_unknown: bool,
    pub mean_similarity: f64,
    pub vote: String,
}

/// Unknown-class F1 at one threshold: a sample is predicted unknown exactly
/// when its mean similarity is strictly below `tau`.
pub fn unknown_f1(samples: &[ScoredSample], tau: f64) -> f64 {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for s in samples {
        let predicted_unknown = s.mean_similarity < tau;
        match (s.truth_unknown, predicted_unknown) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Grid-search the best threshold for one pseudo-unknown round. Ties go to
/// the smallest threshold. Returns (tau, best F1, full F1-vs-tau curve).
pub fn best_threshold(samples: &[ScoredSample], grid: &ThresholdGrid) -> (f64, f64, Vec<(f64, f64)>) {
    let curve: Vec<(f64, f64)> = grid
        .values
        .iter()
        .map(|&tau| (tau, unknown_f1(samples, tau)))
        .collect();
    let (tau, f1) = curve
        .iter()
        .fold(None::<(f64, f64)>, |best, &(tau, f1)| match best {
            None => Some((tau, f1)),
            Some((_, bf)) if f1 > bf => Some((tau, f1)),
            other => other,
        })
        .expect("grid is non-empty");
    (tau, f1, curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCalibration {
    pub class: String,
    pub tau: f64,
    pub best_unknown_f1: f64,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub per_class: Vec<ClassCalibration>,
    pub tau_star: f64,
    pub strategy: String,
    pub grid: ThresholdGrid,
}

/// Reduce per-holdout scored samples to the calibration: per-class optimal
/// thresholds and their arithmetic mean.
pub fn calibrate_scored(
    rounds: &[(String, Vec<ScoredSample>)],
    grid: &ThresholdGrid,
) -> Result<ThresholdCalibration> {
    if rounds.is_empty() {
        return Err(Error::TooFewModels(0));
    }
    let mut per_class = Vec::with_capacity(rounds.len());
    for (class, samples) in rounds {
        let (tau, best_f1, curve) = best_threshold(samples, grid);
        per_class.push(ClassCalibration {
            class: class.clone(),
            tau,
            best_unknown_f1: best_f1,
            curve,
        });
    }
    let tau_star = per_class.iter().map(|c| c.tau).sum::<f64>() / per_class.len() as f64;
    Ok(ThresholdCalibration {
        per_class,
        tau_star,
        strategy: "averaging+majority-vote".to_string(),
        grid: grid.clone(),
    })
}

/// Run the pseudo-unknown simulation. `class_rows` pairs each known attack
/// class with its evaluation samples; `models[i]` must be the task model for
/// `class_rows[i]`. Benign rows provide the negatives of every round.
pub fn calibrate(
    models: &[TaskModel],
    support: &SupportSet,
    benign_rows: &[Vec<f64>],
    class_rows: &[(String, Vec<Vec<f64>>)],
    grid: &ThresholdGrid,
    mode: ScoringMode,
) -> Result<ThresholdCalibration> {
    if models.len() < 2 {
        return Err(Error::TooFewModels(models.len()));
    }
    if models.len() != class_rows.len() {
        return Err(Error::LengthMismatch {
            expected: models.len(),
            got: class_rows.len(),
        });
    }
    for (model, (class, rows)) in models.iter().zip(class_rows) {
        if &model.attack_class != class {
            return Err(Error::MissingClass(format!(
                "model for {:?} paired with class {class:?}",
                model.attack_class
            )));
        }
        if rows.is_empty() {
            return Err(Error::EmptyClassData(class.clone()));
        }
    }
    if benign_rows.is_empty() {
        return Err(Error::EmptyClassData("benign".into()));
    }

    let scorer = Scorer::new(models, support, mode)?;
    let mut rounds = Vec::with_capacity(class_rows.len());
    for (i, (class, rows)) in class_rows.iter().enumerate() {
        let mut samples = Vec::with_capacity(rows.len() + benign_rows.len());
        for row in rows {
            let outcome = scorer.score(row, Some(i), Some(class.as_str()))?;
            samples.push(ScoredSample {
                truth_unknown: true,
                mean_similarity: outcome.mean_similarity,
                vote: outcome.vote,
            });
        }
        for row in benign_rows {
            let outcome = scorer.score(row, Some(i), Some(class.as_str()))?;
            samples.push(ScoredSample {
                truth_unknown: false,
                mean_similarity: outcome.mean_similarity,
                vote: outcome.vote,
            });
        }
        rounds.push((class.clone(), samples));
    }
    calibrate_scored(&rounds, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_fifteen_values() {
        let grid = ThresholdGrid::default_grid();
        assert_eq!(grid.values.len(), 15);
        assert_eq!(grid.values[0], 0.1);
        assert!((grid.values[14] - 0.8).abs() < 1e-12);
        assert!((grid.values[1] - 0.15).abs() < 1e-12);
    }

    fn sample(truth_unknown: bool, sim: f64) -> ScoredSample {
        ScoredSample {
            truth_unknown,
            mean_similarity: sim,
            vote: "B".into(),
        }
    }

    #[test]
    fn separable_scores_pick_smallest_tau() {
        // Unknowns at 0.2, benign at 0.9: F1 is 1.0 for every tau in
        // (0.2, 0.9], so the smallest winning grid point 0.25 is chosen.
        let samples: Vec<ScoredSample> = (0..10)
            .map(|i| sample(i < 5, if i < 5 { 0.2 } else { 0.9 }))
            .collect();
        let (tau, f1, curve) = best_threshold(&samples, &ThresholdGrid::default_grid());
        assert!((tau - 0.25).abs() < 1e-12);
        assert_eq!(f1, 1.0);
        assert_eq!(curve.len(), 15);
        assert_eq!(unknown_f1(&samples, 0.1), 0.0);
    }

    #[test]
    fn tau_star_is_the_mean() {
        let taus = [0.3, 0.5, 0.4];
        let mean = taus.iter().sum::<f64>() / 3.0;
        assert!((mean - 0.4).abs() < 1e-12);
    }

    #[test]
    fn predicted_unknown_set_grows_with_tau() {
        let samples: Vec<ScoredSample> = (0..40)
            .map(|i| sample(i % 2 == 0, (i as f64) / 40.0))
            .collect();
        let grid = ThresholdGrid::default_grid();
        let mut last = 0usize;
        for &tau in &grid.values {
            let count = samples.iter().filter(|s| s.mean_similarity < tau).count();
            assert!(count >= last);
            last = count;
        }
    }

    #[test]
    fn too_few_models_rejected() {
        let support = SupportSet {
            classes: vec![],
            k: 1,
            method: String::new(),
            seed: 0,
        };
        let err = calibrate(
            &[],
            &support,
            &[vec![0.0]],
            &[],
            &ThresholdGrid::default_grid(),
            ScoringMode::NearestNeighbor,
        );
        assert!(matches!(err, Err(Error::TooFewModels(0))));
    }
}
