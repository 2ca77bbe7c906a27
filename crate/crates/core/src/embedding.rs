//! Similarity-model machinery: prompt serialization, the pluggable embedding
//! backend, triplet construction and the per-task training loop.
//!
//! The reference encoder is two affine layers with a tanh nonlinearity and an
//! L2-normalized output. It consumes the numeric feature vector directly; the
//! prompt path exists for external text-embedding backends, which plug in
//! behind [`PromptEmbedder`] and are never fine-tuned here.

use crate::error::{Error, Result};
use crate::schema::format_num;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub const DEFAULT_EMBEDDING_DIM: usize = 64;
pub const DEFAULT_MARGIN: f64 = 0.3;

// ---------------------------------------------------------------------------
// Prompts

/// Serialize a feature row as comma-separated `name=value` pairs in schema
/// order, numeric values rendered as shortest round-trip decimals.
pub fn serialize_prompt(names: &[String], row: &[f64]) -> Result<String> {
    if names.is_empty() || row.is_empty() {
        return Err(Error::SchemaMismatch("empty feature row".into()));
    }
    if names.len() != row.len() {
        return Err(Error::SchemaMismatch(format!(
            "{} names vs {} values",
            names.len(),
            row.len()
        )));
    }
    let mut parts = Vec::with_capacity(names.len());
    for (name, value) in names.iter().zip(row) {
        if name.contains(',') || name.contains('=') {
            return Err(Error::SchemaMismatch(format!(
                "column name {name:?} cannot appear in a prompt"
            )));
        }
        parts.push(format!("{name}={}", format_num(*value)));
    }
    Ok(parts.join(","))
}

/// Parse a prompt back into (name, value) pairs. Exact inverse of
/// [`serialize_prompt`] for finite values.
pub fn parse_prompt(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for pair in text.split(',') {
        let (name, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::SchemaMismatch(format!("bad prompt pair {pair:?}")))?;
        let v: f64 = value
            .parse()
            .map_err(|_| Error::SchemaMismatch(format!("bad prompt value {value:?}")))?;
        out.push((name.to_string(), v));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reference encoder

/// Two affine layers with tanh, output L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEncoder {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub dim: usize,
    /// Row-major `hidden_dim x input_dim`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// Row-major `dim x hidden_dim`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

const NORM_FLOOR: f64 = 1e-12;

impl ReferenceEncoder {
    pub fn init(input_dim: usize, hidden_dim: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let xavier = |fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let w1 = xavier(input_dim, hidden_dim, rng, hidden_dim * input_dim);
        // Features arrive MinMax-scaled into [0, 1]; initializing the first
        // bias to center the expected input keeps initial embeddings spread
        // over directions instead of collapsing into one orthant.
        let b1: Vec<f64> = (0..hidden_dim)
            .map(|h| {
                -0.5 * w1[h * input_dim..(h + 1) * input_dim]
                    .iter()
                    .sum::<f64>()
            })
            .collect();
        Self {
            input_dim,
            hidden_dim,
            dim,
            w1,
            b1,
            w2: xavier(hidden_dim, dim, rng, dim * hidden_dim),
            b2: vec![0.0; dim],
        }
    }

    fn forward(&self, x: &[f64]) -> ForwardPass {
        let mut z1 = self.b1.clone();
        for (h, z) in z1.iter_mut().enumerate() {
            let row = &self.w1[h * self.input_dim..(h + 1) * self.input_dim];
            for (w, xv) in row.iter().zip(x) {
                *z += w * xv;
            }
        }
        let a1: Vec<f64> = z1.iter().map(|z| z.tanh()).collect();
        let mut z2 = self.b2.clone();
        for (o, z) in z2.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden_dim..(o + 1) * self.hidden_dim];
            for (w, av) in row.iter().zip(&a1) {
                *z += w * av;
            }
        }
        let norm = z2.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        let embedding: Vec<f64> = z2.iter().map(|v| v / norm).collect();
        ForwardPass {
            a1,
            norm,
            embedding,
        }
    }

    /// Embed a feature row as a unit-norm vector. Deterministic.
    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x).embedding
    }
}

struct ForwardPass {
    a1: Vec<f64>,
    norm: f64,
    embedding: Vec<f64>,
}

/// Gradient buffers mirroring the encoder parameters.
struct GradBuffers {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl GradBuffers {
    fn zeros(enc: &ReferenceEncoder) -> Self {
        Self {
            w1: vec![0.0; enc.w1.len()],
            b1: vec![0.0; enc.b1.len()],
            w2: vec![0.0; enc.w2.len()],
            b2: vec![0.0; enc.b2.len()],
        }
    }
}

/// Backpropagate dL/d(embedding) through normalization and both layers,
/// accumulating parameter gradients.
fn backward(
    enc: &ReferenceEncoder,
    x: &[f64],
    pass: &ForwardPass,
    grad_embedding: &[f64],
    grads: &mut GradBuffers,
) {
    // Through e = z2 / ||z2||: dL/dz2 = (g - (g . e) e) / ||z2||.
    let ge: f64 = grad_embedding
        .iter()
        .zip(&pass.embedding)
        .map(|(g, e)| g * e)
        .sum();
    let dz2: Vec<f64> = grad_embedding
        .iter()
        .zip(&pass.embedding)
        .map(|(g, e)| (g - ge * e) / pass.norm)
        .collect();

    let mut da1 = vec![0.0; enc.hidden_dim];
    for (o, dz) in dz2.iter().enumerate() {
        grads.b2[o] += dz;
        let row = &mut grads.w2[o * enc.hidden_dim..(o + 1) * enc.hidden_dim];
        let wrow = &enc.w2[o * enc.hidden_dim..(o + 1) * enc.hidden_dim];
        for h in 0..enc.hidden_dim {
            row[h] += dz * pass.a1[h];
            da1[h] += wrow[h] * dz;
        }
    }
    for h in 0..enc.hidden_dim {
        let dz1 = da1[h] * (1.0 - pass.a1[h] * pass.a1[h]);
        grads.b1[h] += dz1;
        let row = &mut grads.w1[h * enc.input_dim..(h + 1) * enc.input_dim];
        for (g, xv) in row.iter_mut().zip(x) {
            *g += dz1 * xv;
        }
    }
}

// ---------------------------------------------------------------------------
// Backends

/// Adapter contract for external text-embedding services: prompt text in,
/// `dim` floats out. Transport is the adapter's business.
pub trait PromptEmbedder: Send + Sync {
    fn embed_prompt(&self, prompt: &str) -> Result<Vec<f64>>;
}

pub struct ExternalBackend {
    pub descriptor: String,
    pub dim: usize,
    pub column_names: Vec<String>,
    pub adapter: Option<Arc<dyn PromptEmbedder>>,
}

impl ExternalBackend {
    pub fn embed(&self, row: &[f64]) -> Result<Vec<f64>> {
        let adapter = self.adapter.as_ref().ok_or_else(|| {
            Error::BackendUnavailable(format!("no adapter registered for {:?}", self.descriptor))
        })?;
        let prompt = serialize_prompt(&self.column_names, row)?;
        let raw = adapter.embed_prompt(&prompt)?;
        if raw.len() != self.dim {
            return Err(Error::BackendUnavailable(format!(
                "adapter returned {} floats, expected {}",
                raw.len(),
                self.dim
            )));
        }
        Ok(normalize(&raw))
    }
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    v.iter().map(|x| x / norm).collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    dot / (na * nb)
}

// ---------------------------------------------------------------------------
// Triplets

/// Training rows for one meta-task; `groups[i]` is 0 or 1 and names which of
/// the task's two classes row `i` belongs to, in original table order.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub rows: Vec<Vec<f64>>,
    pub groups: Vec<u8>,
}

impl TaskData {
    fn group_indices(&self, group: u8) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Indices into a [`TaskData`]: anchor and positive share a group, the
/// negative comes from the other group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Sample `count` triplets: anchors uniform over all rows, positives from the
/// anchor's group excluding the anchor, negatives from the other group.
pub fn create_triplets(data: &TaskData, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Triplet>> {
    if data.rows.len() != data.groups.len() {
        return Err(Error::LengthMismatch {
            expected: data.rows.len(),
            got: data.groups.len(),
        });
    }
    let side0 = data.group_indices(0);
    let side1 = data.group_indices(1);
    if side0.len() < 2 || side1.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "need at least 2 samples per class, got {} and {}",
            side0.len(),
            side1.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = rng.gen_range(0..data.rows.len());
        let (same, other) = if data.groups[anchor] == 0 {
            (&side0, &side1)
        } else {
            (&side1, &side0)
        };
        let anchor_pos = same.iter().position(|&i| i == anchor).expect("anchor in its group");
        let mut p = rng.gen_range(0..same.len() - 1);
        if p >= anchor_pos {
            p += 1;
        }
        let positive = same[p];
        let negative = other[rng.gen_range(0..other.len())];
        out.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Triplet loss

/// Gradients of the triplet loss with respect to the three raw input vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TripletGradients {
    pub anchor: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Margin loss over cosine similarity:
/// `max(0, s(a, n) - s(a, p) + margin)`. Gradients flow through the cosine's
/// internal normalization, so the inputs need not be unit vectors.
pub fn triplet_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> (f64, TripletGradients) {
    let s_ap = cosine(a, p);
    let s_an = cosine(a, n);
    let loss = (s_an - s_ap + margin).max(0.0);
    let d = a.len();
    let mut grads = TripletGradients {
        anchor: vec![0.0; d],
        positive: vec![0.0; d],
        negative: vec![0.0; d],
    };
    if loss > 0.0 {
        // d s(u, v) / d u = (v/|v| - s * u/|u|) / |u|
        let grad_cos = |u: &[f64], v: &[f64], s: f64| -> Vec<f64> {
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
            u.iter()
                .zip(v)
                .map(|(ui, vi)| (vi / nv - s * ui / nu) / nu)
                .collect()
        };
        let dsan_da = grad_cos(a, n, s_an);
        let dsap_da = grad_cos(a, p, s_ap);
        for i in 0..d {
            grads.anchor[i] = dsan_da[i] - dsap_da[i];
        }
        grads.positive = grad_cos(p, a, s_ap).iter().map(|g| -g).collect();
        grads.negative = grad_cos(n, a, s_an);
    }
    (loss, grads)
}

// ---------------------------------------------------------------------------
// Task-model training

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub triplets_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            triplets_per_epoch: 256,
            batch_size: 32,
            learning_rate: 0.01,
            margin: DEFAULT_MARGIN,
            dim: DEFAULT_EMBEDDING_DIM,
            hidden_dim: DEFAULT_EMBEDDING_DIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub margin: f64,
    /// Mean probe-set loss before training, then after each epoch.
    pub loss_curve: Vec<f64>,
}

/// A trained per-task similarity model: the meta-task's two class names plus
/// the fine-tuned encoder state.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub benign_class: String,
    pub attack_class: String,
    pub encoder: ReferenceEncoder,
    pub meta: TrainingMeta,
}

impl TaskModel {
    pub fn embed(&self, row: &[f64]) -> Vec<f64> {
        self.encoder.embed(row)
    }
}

fn mean_probe_loss(enc: &ReferenceEncoder, data: &TaskData, probes: &[Triplet], margin: f64) -> f64 {
    let mut total = 0.0;
    for t in probes {
        let ea = enc.embed(&data.rows[t.anchor]);
        let ep = enc.embed(&data.rows[t.positive]);
        let en = enc.embed(&data.rows[t.negative]);
        let s_ap: f64 = ea.iter().zip(&ep).map(|(x, y)| x * y).sum();
        let s_an: f64 = ea.iter().zip(&en).map(|(x, y)| x * y).sum();
        total += (s_an - s_ap + margin).max(0.0);
    }
    total / probes.len() as f64
}

/// Fine-tune a fresh reference encoder on one meta-task with mini-batch SGD
/// over the triplet loss. Deterministic for fixed (data, config).
pub fn train_task_model(
    benign_class: &str,
    attack_class: &str,
    data: &TaskData,
    config: &TrainConfig,
) -> Result<TaskModel> {
    if data.rows.is_empty() {
        return Err(Error::InsufficientSamples("no training rows".into()));
    }
    let input_dim = data.rows[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = ReferenceEncoder::init(input_dim, config.hidden_dim, config.dim, &mut rng);

    // Fixed probe set: the loss curve is comparable across epochs.
    let probes = create_triplets(data, config.triplets_per_epoch, &mut rng)?;
    let mut loss_curve = vec![mean_probe_loss(&encoder, data, &probes, config.margin)];

    for _ in 0..config.epochs {
        let triplets = create_triplets(data, config.triplets_per_epoch, &mut rng)?;
        for batch in triplets.chunks(config.batch_size) {
            let mut grads = GradBuffers::zeros(&encoder);
            let mut batch_loss = 0.0;
            for t in batch {
                let xa = &data.rows[t.anchor];
                let xp = &data.rows[t.positive];
                let xn = &data.rows[t.negative];
                let fa = encoder.forward(xa);
                let fp = encoder.forward(xp);
                let fn_ = encoder.forward(xn);
                let s_ap: f64 = fa.embedding.iter().zip(&fp.embedding).map(|(x, y)| x * y).sum();
                let s_an: f64 = fa.embedding.iter().zip(&fn_.embedding).map(|(x, y)| x * y).sum();
                let loss = (s_an - s_ap + config.margin).max(0.0);
                batch_loss += loss;
                if loss > 0.0 {
                    // dL/de on unit embeddings: e_n - e_p, -e_a, e_a.
                    let ga: Vec<f64> = fn_
                        .embedding
                        .iter()
                        .zip(&fp.embedding)
                        .map(|(n, p)| n - p)
                        .collect();
                    let gp: Vec<f64> = fa.embedding.iter().map(|a| -a).collect();
                    let gn: Vec<f64> = fa.embedding.clone();
                    backward(&encoder, xa, &fa, &ga, &mut grads);
                    backward(&encoder, xp, &fp, &gp, &mut grads);
                    backward(&encoder, xn, &fn_, &gn, &mut grads);
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!(
                    "task ({benign_class}, {attack_class})"
                )));
            }
            let scale = config.learning_rate / batch.len() as f64;
            for (w, g) in encoder.w1.iter_mut().zip(&grads.w1) {
                *w -= scale * g;
            }
            for (b, g) in encoder.b1.iter_mut().zip(&grads.b1) {
                *b -= scale * g;
            }
            for (w, g) in encoder.w2.iter_mut().zip(&grads.w2) {
                *w -= scale * g;
            }
            for (b, g) in encoder.b2.iter_mut().zip(&grads.b2) {
                *b -= scale * g;
            }
        }
        loss_curve.push(mean_probe_loss(&encoder, data, &probes, config.margin));
    }

    Ok(TaskModel {
        benign_class: benign_class.to_string(),
        attack_class: attack_class.to_string(),
        encoder,
        meta: TrainingMeta {
            seed: config.seed,
            epochs: config.epochs,
            margin: config.margin,
            loss_curve,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_formatting_rules() {
        let names = vec!["duration".to_string(), "orig_bytes".to_string()];
        let prompt = serialize_prompt(&names, &[1.5, 100.0]).unwrap();
        assert_eq!(prompt, "duration=1.5,orig_bytes=100");
        let awkward = serialize_prompt(&names, &[0.1 + 0.2, 1.0]).unwrap();
        assert_eq!(awkward, "duration=0.30000000000000004,orig_bytes=1");
        assert!(matches!(
            serialize_prompt(&[], &[]),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn prompt_round_trip_is_lossless() {
        let names: Vec<String> = (0..8).map(|i| format!("f{i}")).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let row: Vec<f64> = (0..8).map(|_| rng.gen::<f64>() * 1e3 - 500.0).collect();
            let prompt = serialize_prompt(&names, &row).unwrap();
            let back = parse_prompt(&prompt).unwrap();
            for ((name, value), (orig_name, orig)) in back.iter().zip(names.iter().zip(&row)) {
                assert_eq!(name, orig_name);
                assert_eq!(value.to_bits(), orig.to_bits());
            }
        }
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ReferenceEncoder::init(10, 16, 8, &mut rng);
        for _ in 0..1000 {
            let row: Vec<f64> = (0..10).map(|_| rng.gen::<f64>()).collect();
            let e = enc.embed(&row);
            let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() <= 1e-6);
            assert_eq!(enc.embed(&row), e);
            assert!((cosine(&e, &e) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn zero_weight_encoder_collapses_to_bias_direction() {
        let enc = ReferenceEncoder {
            input_dim: 4,
            hidden_dim: 3,
            dim: 5,
            w1: vec![0.0; 12],
            b1: vec![0.0; 3],
            w2: vec![0.0; 15],
            b2: vec![1.0, 2.0, 0.0, 0.0, 0.0],
        };
        let e1 = enc.embed(&[1.0, 2.0, 3.0, 4.0]);
        let e2 = enc.embed(&[-9.0, 0.0, 0.5, 7.0]);
        assert!((cosine(&e1, &e2) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn external_backend_without_adapter_is_unavailable() {
        let backend = ExternalBackend {
            descriptor: "tcp://embedder".into(),
            dim: 4,
            column_names: vec!["duration".into()],
            adapter: None,
        };
        assert!(matches!(
            backend.embed(&[1.0]),
            Err(Error::BackendUnavailable(_))
        ));
    }

    struct FixedEmbedder(Vec<f64>);
    impl PromptEmbedder for FixedEmbedder {
        fn embed_prompt(&self, _prompt: &str) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn external_backend_normalizes_and_checks_dim() {
        let backend = ExternalBackend {
            descriptor: "test".into(),
            dim: 2,
            column_names: vec!["duration".into()],
            adapter: Some(Arc::new(FixedEmbedder(vec![3.0, 4.0]))),
        };
        let e = backend.embed(&[1.0]).unwrap();
        assert_eq!(e, vec![0.6, 0.8]);

        let bad = ExternalBackend {
            descriptor: "test".into(),
            dim: 3,
            column_names: vec!["duration".into()],
            adapter: Some(Arc::new(FixedEmbedder(vec![1.0]))),
        };
        assert!(matches!(
            bad.embed(&[1.0]),
            Err(Error::BackendUnavailable(_))
        ));
    }

    fn two_cluster_data(per_class: usize, separation: f64, seed: u64) -> TaskData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut groups = Vec::new();
        for i in 0..per_class * 2 {
            let group = (i % 2) as u8;
            let center = if group == 0 { 0.0 } else { separation };
            let row: Vec<f64> = (0..6).map(|_| center + rng.gen::<f64>() - 0.5).collect();
            rows.push(row);
            groups.push(group);
        }
        TaskData { rows, groups }
    }

    #[test]
    fn triplets_respect_class_constraint() {
        let data = TaskData {
            rows: vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]],
            groups: vec![0, 0, 1, 1],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let triplets = create_triplets(&data, 4, &mut rng).unwrap();
        assert_eq!(triplets.len(), 4);
        for t in &triplets {
            assert_eq!(data.groups[t.anchor], data.groups[t.positive]);
            assert_ne!(t.anchor, t.positive);
            assert_ne!(data.groups[t.anchor], data.groups[t.negative]);
        }
    }

    #[test]
    fn insufficient_samples_for_triplets() {
        let data = TaskData {
            rows: vec![vec![0.0], vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0]],
            groups: vec![0, 1, 1, 1, 1, 1],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(matches!(
            create_triplets(&data, 4, &mut rng),
            Err(Error::InsufficientSamples(_))
        ));
    }

    #[test]
    fn triplet_sampling_is_seed_deterministic() {
        let data = two_cluster_data(10, 5.0, 2);
        let a = create_triplets(&data, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = create_triplets(&data, 50, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn loss_examples() {
        // Unit-ish vectors engineered for exact similarities.
        let a = vec![1.0, 0.0];
        let p = |s: f64| vec![s, (1.0 - s * s).sqrt()];
        let (loss, _) = triplet_loss(&a, &p(0.9), &p(0.2), 0.3);
        assert!((loss - 0.0).abs() < 1e-12);
        let (loss, _) = triplet_loss(&a, &p(0.5), &p(0.6), 0.3);
        assert!((loss - 0.4).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_zero_iff_margin_met() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let v = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
            };
            let (a, p, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let margin = 0.3;
            let (loss, _) = triplet_loss(&a, &p, &n, margin);
            assert!(loss >= 0.0);
            let satisfied = cosine(&a, &p) - cosine(&a, &n) >= margin;
            assert_eq!(loss == 0.0, satisfied);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-5;
        let mut probes = 0;
        while probes < 120 {
            let v = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..5).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
            };
            let (a, p, n) = (v(&mut rng), v(&mut rng), v(&mut rng));
            let margin = 0.3;
            let violation = cosine(&a, &n) - cosine(&a, &p) + margin;
            if violation.abs() < 1e-3 {
                continue; // subgradient kink
            }
            probes += 1;
            let (_, grads) = triplet_loss(&a, &p, &n, margin);
            let numeric = |vecs: [&Vec<f64>; 3], which: usize, i: usize| -> f64 {
                let mut lo = [vecs[0].clone(), vecs[1].clone(), vecs[2].clone()];
                let mut hi = lo.clone();
                lo[which][i] -= h;
                hi[which][i] += h;
                let (l_lo, _) = triplet_loss(&lo[0], &lo[1], &lo[2], margin);
                let (l_hi, _) = triplet_loss(&hi[0], &hi[1], &hi[2], margin);
                (l_hi - l_lo) / (2.0 * h)
            };
            for i in 0..a.len() {
                for (which, analytic) in [
                    (0usize, grads.anchor[i]),
                    (1, grads.positive[i]),
                    (2, grads.negative[i]),
                ] {
                    let fd = numeric([&a, &p, &n], which, i);
                    let err = (analytic - fd).abs() / fd.abs().max(1e-3);
                    assert!(err < 1e-4, "which={which} i={i} analytic={analytic} fd={fd}");
                }
            }
        }
    }

    #[test]
    fn training_separates_clusters() {
        let data = two_cluster_data(40, 6.0, 11);
        let config = TrainConfig {
            epochs: 10,
            triplets_per_epoch: 128,
            seed: 42,
            ..TrainConfig::default()
        };
        let model = train_task_model("Benign", "Attack", &data, &config).unwrap();
        let first = model.meta.loss_curve.first().unwrap();
        let last = model.meta.loss_curve.last().unwrap();
        assert!(last <= first, "loss curve {:?}", model.meta.loss_curve);

        // Mean intra-class cosine should beat inter-class cosine by a margin.
        let embedded: Vec<(u8, Vec<f64>)> = data
            .rows
            .iter()
            .zip(&data.groups)
            .map(|(r, &g)| (g, model.embed(r)))
            .collect();
        let mut intra = (0.0, 0usize);
        let mut inter = (0.0, 0usize);
        for i in 0..embedded.len() {
            for j in i + 1..embedded.len() {
                let c = cosine(&embedded[i].1, &embedded[j].1);
                if embedded[i].0 == embedded[j].0 {
                    intra = (intra.0 + c, intra.1 + 1);
                } else {
                    inter = (inter.0 + c, inter.1 + 1);
                }
            }
        }
        let gap = intra.0 / intra.1 as f64 - inter.0 / inter.1 as f64;
        assert!(gap >= 0.2, "separation gap {gap}");
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let data = two_cluster_data(10, 5.0, 3);
        let config = TrainConfig {
            epochs: 3,
            triplets_per_epoch: 32,
            seed: 7,
            ..TrainConfig::default()
        };
        let a = train_task_model("Benign", "Attack", &data, &config).unwrap();
        let b = train_task_model("Benign", "Attack", &data, &config).unwrap();
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.meta.loss_curve, b.meta.loss_curve);
    }

    #[test]
    fn relabeled_classes_keep_the_loss_trajectory() {
        let data = two_cluster_data(10, 5.0, 8);
        let swapped = TaskData {
            rows: data.rows.clone(),
            groups: data.groups.iter().map(|g| 1 - g).collect(),
        };
        let config = TrainConfig {
            epochs: 3,
            triplets_per_epoch: 32,
            seed: 7,
            ..TrainConfig::default()
        };
        let a = train_task_model("Benign", "Attack", &data, &config).unwrap();
        let b = train_task_model("Benign", "Attack", &swapped, &config).unwrap();
        assert_eq!(a.meta.loss_curve, b.meta.loss_curve);
    }

    #[test]
    fn shared_weights_across_branch_roles() {
        let data = two_cluster_data(5, 4.0, 13);
        let config = TrainConfig {
            epochs: 1,
            triplets_per_epoch: 16,
            seed: 1,
            ..TrainConfig::default()
        };
        let model = train_task_model("Benign", "Attack", &data, &config).unwrap();
        let x = &data.rows[0];
        // One parameter set serves anchor, positive and negative branches.
        assert_eq!(model.embed(x), model.embed(x));
        assert_eq!(model.embed(x), model.encoder.embed(x));
    }
}
