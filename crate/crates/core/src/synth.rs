//! Seeded synthetic datasets over the fused feature schema, for golden tests
//! and desk-scale end-to-end runs. Known classes contribute training and test
//! rows; withheld classes appear only in the test set labeled as unknown.

use crate::error::{Error, Result};
use crate::inference::UNKNOWN_LABEL;
use crate::schema::{ColumnKind, FeatureTable, Value, FUSED_COLUMNS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Training rows for a known class; test rows for a withheld class.
    pub count: usize,
    /// Test rows for a known class.
    #[serde(default = "default_test_count")]
    pub test_count: usize,
    /// Fallback distribution for numeric columns without an override.
    pub default_numeric: GaussianSpec,
    #[serde(default)]
    pub numeric_overrides: BTreeMap<String, GaussianSpec>,
    /// Category weights per categorical column; unlisted columns fall back
    /// to a schema-wide constant category.
    #[serde(default)]
    pub categorical: BTreeMap<String, Vec<(String, f64)>>,
}

fn default_test_count() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub classes: Vec<ClassSpec>,
    /// Subset of class names withheld from training.
    pub unknown_classes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: FeatureTable,
    /// Unlabeled query rows.
    pub test: FeatureTable,
    /// Truth labels aligned with `test` rows; withheld classes appear as the
    /// unknown label.
    pub truth: Vec<String>,
}

fn default_category(column: &str) -> &'static str {
    match column {
        "conn_state" => "SF",
        "history" => "ShAD",
        "service" => "none",
        "IPv" => "4",
        "Protocol Type" => "6",
        "src_port" => "49152",
        "dst_port" => "80",
        _ => "0",
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidSpec("no classes".into()));
        }
        let mut seen = Vec::new();
        for class in &self.classes {
            if class.name == UNKNOWN_LABEL {
                return Err(Error::InvalidSpec(format!(
                    "class name {UNKNOWN_LABEL:?} is reserved for the unknown label"
                )));
            }
            if seen.contains(&class.name) {
                return Err(Error::InvalidSpec(format!("duplicate class {:?}", class.name)));
            }
            seen.push(class.name.clone());
            if class.count < 2 {
                return Err(Error::InvalidSpec(format!(
                    "class {:?} needs at least 2 samples",
                    class.name
                )));
            }
            let check_sigma = |spec: &GaussianSpec| -> Result<()> {
                if !(spec.std > 0.0 && spec.std.is_finite() && spec.mean.is_finite()) {
                    return Err(Error::InvalidSpec(format!(
                        "class {:?}: sigma must be positive and finite",
                        class.name
                    )));
                }
                Ok(())
            };
            check_sigma(&class.default_numeric)?;
            for spec in class.numeric_overrides.values() {
                check_sigma(spec)?;
            }
            for (column, weights) in &class.categorical {
                if crate::schema::column_kind(column) != Some(ColumnKind::Categorical) {
                    return Err(Error::InvalidSpec(format!(
                        "{column:?} is not a categorical fused column"
                    )));
                }
                let total: f64 = weights.iter().map(|(_, w)| w).sum();
                if weights.iter().any(|(_, w)| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidSpec(format!(
                        "class {:?}: weights for {column:?} must be nonnegative and sum to 1",
                        class.name
                    )));
                }
            }
        }
        for unknown in &self.unknown_classes {
            if !seen.contains(unknown) {
                return Err(Error::InvalidSpec(format!(
                    "unknown class {unknown:?} is not declared"
                )));
            }
        }
        if self.unknown_classes.len() == self.classes.len() {
            return Err(Error::InvalidSpec("every class is withheld".into()));
        }
        Ok(())
    }
}

fn sample_row(class: &ClassSpec, rng: &mut ChaCha8Rng) -> Vec<Value> {
    FUSED_COLUMNS
        .iter()
        .map(|(name, kind)| match kind {
            ColumnKind::Numeric => {
                let spec = class
                    .numeric_overrides
                    .get(*name)
                    .unwrap_or(&class.default_numeric);
                let normal = Normal::new(spec.mean, spec.std).expect("validated sigma");
                Value::Num(normal.sample(rng))
            }
            ColumnKind::Categorical => {
                let cat = match class.categorical.get(*name) {
                    None => default_category(name).to_string(),
                    Some(weights) => {
                        let draw: f64 = rng.gen();
                        let mut acc = 0.0;
                        let mut chosen = &weights[weights.len() - 1].0;
                        for (cat, w) in weights {
                            acc += w;
                            if draw < acc {
                                chosen = cat;
                                break;
                            }
                        }
                        chosen.clone()
                    }
                };
                Value::Cat(cat)
            }
        })
        .collect()
}

/// Generate (train, test, truth) deterministically under the spec seed.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut train = FeatureTable::fused();
    let mut train_labels = Vec::new();
    let mut test = FeatureTable::fused();
    let mut truth = Vec::new();

    for class in &spec.classes {
        let withheld = spec.unknown_classes.contains(&class.name);
        if withheld {
            for _ in 0..class.count {
                test.push_row(sample_row(class, &mut rng))?;
                truth.push(UNKNOWN_LABEL.to_string());
            }
        } else {
            for _ in 0..class.count {
                train.push_row(sample_row(class, &mut rng))?;
                train_labels.push(class.name.clone());
            }
            for _ in 0..class.test_count {
                test.push_row(sample_row(class, &mut rng))?;
                truth.push(class.name.clone());
            }
        }
    }
    train.labels = Some(train_labels);
    Ok(SynthDataset { train, test, truth })
}

/// Convenience spec: one benign class plus attack classes, each a Gaussian
/// cluster with unit sigma. Known classes get per-column means drawn from the
/// seed in `[0, spread]`; withheld classes sit between two known clusters so
/// their values fall inside the training range (MinMax scaling fitted on
/// training data clamps anything outside it onto the known extremes, which
/// would make an extrapolated unknown look exactly like a known class).
pub fn gaussian_cluster_spec(
    class_names: &[&str],
    unknown_classes: &[&str],
    count: usize,
    test_count: usize,
    spread: f64,
    seed: u64,
) -> SynthSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5_5e5a_11ad);
    let cat_pool: [(&str, &[&str]); 4] = [
        ("conn_state", &["SF", "S0", "REJ", "OTH", "S1"]),
        ("service", &["http", "dns", "ssh", "none", "telnet"]),
        ("Protocol Type", &["6", "17", "1"]),
        ("dst_port", &["80", "53", "22", "443", "23"]),
    ];
    let numeric_columns: Vec<&str> = FUSED_COLUMNS
        .iter()
        .filter(|(_, k)| *k == ColumnKind::Numeric)
        .map(|(n, _)| *n)
        .collect();

    // Per column, class centers are a seeded permutation of an even value
    // grid over [0, spread]. Withheld classes only ever take interior grid
    // values, so the extremes always belong to training classes and the
    // unknown's values stay inside the fitted MinMax range (out-of-range
    // values would clamp onto a known extreme and disguise the unknown).
    // Every class center is an independent-looking direction, making the
    // pseudo-unknown simulation an honest proxy for the withheld class.
    let n = class_names.len();
    let unknown_idx: Vec<usize> = (0..n)
        .filter(|i| unknown_classes.contains(&class_names[*i]))
        .collect();
    assert!(
        n >= 2 && unknown_idx.len() <= n.saturating_sub(2),
        "need at least two known classes"
    );
    let grid: Vec<f64> = (0..n)
        .map(|i| spread * i as f64 / (n - 1) as f64)
        .collect();
    let mut means: Vec<BTreeMap<String, f64>> = vec![BTreeMap::new(); n];
    for col in &numeric_columns {
        // Interior grid slots for the withheld classes.
        let mut interior: Vec<usize> = (1..n - 1).collect();
        for k in 0..interior.len() {
            let j = rng.gen_range(k..interior.len());
            interior.swap(k, j);
        }
        let mut taken = vec![false; n];
        for (u, &class) in unknown_idx.iter().enumerate() {
            let slot = interior[u];
            taken[slot] = true;
            means[class].insert((*col).to_string(), grid[slot]);
        }
        let mut remaining: Vec<usize> = (0..n).filter(|s| !taken[*s]).collect();
        for k in 0..remaining.len() {
            let j = rng.gen_range(k..remaining.len());
            remaining.swap(k, j);
        }
        let mut slots = remaining.into_iter();
        for class in 0..n {
            if !unknown_idx.contains(&class) {
                let slot = slots.next().expect("one slot per known class");
                means[class].insert((*col).to_string(), grid[slot]);
            }
        }
    }

    let classes = class_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let numeric_overrides: BTreeMap<String, GaussianSpec> = means[i]
                .iter()
                .map(|(col, mean)| {
                    (col.clone(), GaussianSpec { mean: *mean, std: 1.0 })
                })
                .collect();
            let mut categorical = BTreeMap::new();
            for (col, cats) in cat_pool {
                let favored = i % cats.len();
                let weights: Vec<(String, f64)> = cats
                    .iter()
                    .enumerate()
                    .map(|(ci, cat)| {
                        let w = if ci == favored { 0.8 } else { 0.2 / (cats.len() - 1) as f64 };
                        (cat.to_string(), w)
                    })
                    .collect();
                categorical.insert(col.to_string(), weights);
            }
            ClassSpec {
                name: name.to_string(),
                count,
                test_count,
                default_numeric: GaussianSpec { mean: 0.0, std: 1.0 },
                numeric_overrides,
                categorical,
            }
        })
        .collect();
    SynthSpec {
        seed,
        classes,
        unknown_classes: unknown_classes.iter().map(|s| s.to_string()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SynthSpec {
        gaussian_cluster_spec(
            &["Benign", "Flood", "Scan", "Brute", "Exfil", "Mirai"],
            &["Mirai"],
            10,
            5,
            10.0,
            42,
        )
    }

    #[test]
    fn withheld_class_appears_only_in_test() {
        let data = generate(&spec()).unwrap();
        assert_eq!(data.train.n_rows(), 50);
        let labels = data.train.labels.as_ref().unwrap();
        assert!(!labels.iter().any(|l| l == "Mirai" || l == UNKNOWN_LABEL));
        assert_eq!(data.test.n_rows(), 5 * 5 + 10);
        assert_eq!(data.truth.iter().filter(|l| *l == UNKNOWN_LABEL).count(), 10);
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate(&spec()).unwrap();
        let b = generate(&spec()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn zero_sigma_is_invalid() {
        let mut s = spec();
        s.classes[0].default_numeric.std = 0.0;
        s.classes[0].numeric_overrides.clear();
        assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn counts_below_two_are_invalid() {
        let mut s = spec();
        s.classes[1].count = 1;
        assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn undeclared_unknown_is_invalid() {
        let mut s = spec();
        s.unknown_classes = vec!["Ghost".to_string()];
        assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn reserved_label_is_invalid() {
        let mut s = spec();
        s.classes[0].name = UNKNOWN_LABEL.to_string();
        assert!(matches!(generate(&s), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn clusters_are_separated() {
        let s = spec();
        // Pairwise center distance in numeric space should dwarf sigma = 1.
        for i in 0..s.classes.len() {
            for j in i + 1..s.classes.len() {
                let a = &s.classes[i].numeric_overrides;
                let b = &s.classes[j].numeric_overrides;
                let d2: f64 = a
                    .iter()
                    .map(|(col, ga)| {
                        let gb = b[col];
                        (ga.mean - gb.mean) * (ga.mean - gb.mean)
                    })
                    .sum();
                assert!(d2.sqrt() >= 5.0, "classes {i} and {j} are {}", d2.sqrt());
            }
        }
    }

    #[test]
    fn spec_round_trips_through_json() {
        let s = spec();
        let text = serde_json::to_string_pretty(&s).unwrap();
        let back: SynthSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
