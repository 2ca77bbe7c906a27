//! Small deterministic random forest used for Gini-impurity feature
//! importance. Bootstrap sampling, sqrt(d) feature subsampling per node,
//! depth-limited CART trees. Seeded end to end so fitted pipelines are
//! reproducible bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 50,
            max_depth: 12,
            min_samples_split: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        class: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, row: &[f64]) -> usize {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { class } => return *class,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forest {
    trees: Vec<Tree>,
    /// Normalized mean-decrease-in-impurity per feature; sums to 1 unless no
    /// split ever gained anything.
    pub importances: Vec<f64>,
    pub n_classes: usize,
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts
        .iter()
        .map(|&c| {
            let p = c as f64 / t;
            p * p
        })
        .sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0usize;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    n_features: usize,
    mtry: usize,
    max_depth: usize,
    min_samples_split: usize,
    bootstrap_len: usize,
    nodes: Vec<Node>,
    importances: Vec<f64>,
}

impl<'a> TreeBuilder<'a> {
    fn class_counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &i in idx {
            counts[self.y[i]] += 1;
        }
        counts
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let counts = self.class_counts(&idx);
        let parent_gini = gini(&counts, idx.len());
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if pure || depth >= self.max_depth || idx.len() < self.min_samples_split {
            self.nodes.push(Node::Leaf {
                class: majority(&counts),
            });
            return self.nodes.len() - 1;
        }

        // Sample mtry distinct features, then scan them in ascending index
        // order for deterministic tie-breaking.
        let mut pool: Vec<usize> = (0..self.n_features).collect();
        for k in 0..self.mtry {
            let j = rng.gen_range(k..pool.len());
            pool.swap(k, j);
        }
        let mut candidates: Vec<usize> = pool[..self.mtry].to_vec();
        candidates.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None; // (gain, feature, threshold)
        for &f in &candidates {
            let mut vals: Vec<(f64, usize)> = idx.iter().map(|&i| (self.x[i][f], self.y[i])).collect();
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total = vals.len();
            let mut left_counts = vec![0usize; self.n_classes];
            let mut right_counts = self.class_counts(&idx);
            for s in 0..total - 1 {
                left_counts[vals[s].1] += 1;
                right_counts[vals[s].1] -= 1;
                if vals[s].0 == vals[s + 1].0 {
                    continue;
                }
                let nl = s + 1;
                let nr = total - nl;
                let gain = parent_gini
                    - (nl as f64 / total as f64) * gini(&left_counts, nl)
                    - (nr as f64 / total as f64) * gini(&right_counts, nr);
                let threshold = vals[s].0 + (vals[s + 1].0 - vals[s].0) / 2.0;
                let better = match best {
                    None => gain > 0.0,
                    Some((bg, _, _)) => gain > bg,
                };
                if better {
                    best = Some((gain, f, threshold));
                }
            }
        }

        let Some((gain, feature, threshold)) = best else {
            self.nodes.push(Node::Leaf {
                class: majority(&counts),
            });
            return self.nodes.len() - 1;
        };

        self.importances[feature] += (idx.len() as f64 / self.bootstrap_len as f64) * gain;

        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            idx.into_iter().partition(|&i| self.x[i][feature] <= threshold);
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { class: 0 }); // placeholder
        let left = self.grow(left_idx, depth + 1, rng);
        let right = self.grow(right_idx, depth + 1, rng);
        self.nodes[slot] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }
}

impl Forest {
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, config: &ForestConfig) -> Forest {
        assert_eq!(x.len(), y.len());
        assert!(!x.is_empty());
        let n_features = x[0].len();
        let mtry = ((n_features as f64).sqrt().floor() as usize).clamp(1, n_features);
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        let mut trees = Vec::with_capacity(config.n_trees);
        let mut importances = vec![0.0; n_features];
        for _ in 0..config.n_trees {
            let tree_seed: u64 = master.gen();
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed);
            let bootstrap: Vec<usize> = (0..x.len()).map(|_| rng.gen_range(0..x.len())).collect();
            let mut builder = TreeBuilder {
                x,
                y,
                n_classes,
                n_features,
                mtry,
                max_depth: config.max_depth,
                min_samples_split: config.min_samples_split,
                bootstrap_len: bootstrap.len(),
                nodes: Vec::new(),
                importances: vec![0.0; n_features],
            };
            builder.grow(bootstrap, 0, &mut rng);
            for (acc, v) in importances.iter_mut().zip(&builder.importances) {
                *acc += v;
            }
            trees.push(Tree {
                nodes: builder.nodes,
            });
        }
        let total: f64 = importances.iter().sum();
        if total > 0.0 {
            for v in &mut importances {
                *v /= total;
            }
        }
        Forest {
            trees,
            importances,
            n_classes,
        }
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let mut votes = vec![0usize; self.n_classes];
        for tree in &self.trees {
            votes[tree.predict(row)] += 1;
        }
        majority(&votes)
    }
}
