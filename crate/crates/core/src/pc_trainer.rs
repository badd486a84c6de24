//! Patch clustering heads and their training objective.
//!
//! Three linear heads sit on frozen patch features:
//! `H` maps a feature to cluster logits (softmax gives the assignment `a`),
//! `Q` maps `a` to seen-class logits and `S` maps `a` to the word-embedding
//! space. The objective per batch is
//!
//! ```text
//! mean_i L_clu(a_i, a_nb(i)) + lambda * L_pel(mean_i a_i)
//!     + beta * mean_i L_cls(a_i, y_i) + gamma * mean_i L_sem(a_i, y_i)
//! ```
//!
//! Gradients are derived by hand; `tests/gradients.rs` checks them against
//! central finite differences.

use std::fs;
use std::path::Path;

use log::warn;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::write_bytes;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::linalg::{dot, log_sum_exp, norm, softmax};
use crate::manifest::{DatasetManifest, Split};
use crate::neighbors::NeighborIndex;
use crate::rng::{self, Rng};

/// Clamp applied inside every logarithm.
pub const LOG_EPS: f64 = 1e-8;
pub const PARAMS_MAGIC: &[u8; 4] = b"VGSP";
const PARAMS_VERSION: u8 = 0x01;
/// Samples per reduction chunk. Fixed so that parallel gradients reduce in
/// the same order regardless of thread count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterHeadParams {
    /// `D_f x D_v`
    pub w_h: Array2<f64>,
    pub b_h: Array1<f64>,
    /// `D_v x n_seen`
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    /// `D_v x D_w`
    pub w_s: Array2<f64>,
    pub b_s: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    pub feature_dim: usize,
    pub clusters: usize,
    pub seen_classes: usize,
    pub word_dim: usize,
}

impl ClusterHeadParams {
    pub fn zeros(d: HeadDims) -> Self {
        ClusterHeadParams {
            w_h: Array2::zeros((d.feature_dim, d.clusters)),
            b_h: Array1::zeros(d.clusters),
            w_q: Array2::zeros((d.clusters, d.seen_classes)),
            b_q: Array1::zeros(d.seen_classes),
            w_s: Array2::zeros((d.clusters, d.word_dim)),
            b_s: Array1::zeros(d.word_dim),
        }
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
    pub fn init(d: HeadDims, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(d);
        for (w, fan_in) in [
            (&mut p.w_h, d.feature_dim),
            (&mut p.w_q, d.clusters),
            (&mut p.w_s, d.clusters),
        ] {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).unwrap();
            w.iter_mut().for_each(|v| *v = dist.sample(rng));
        }
        p
    }

    pub fn dims(&self) -> HeadDims {
        HeadDims {
            feature_dim: self.w_h.nrows(),
            clusters: self.w_h.ncols(),
            seen_classes: self.w_q.ncols(),
            word_dim: self.w_s.ncols(),
        }
    }

    pub fn n_clusters(&self) -> usize {
        self.w_h.ncols()
    }

    fn slices(&self) -> [&[f64]; 6] {
        [
            self.w_h.as_slice().unwrap(),
            self.b_h.as_slice().unwrap(),
            self.w_q.as_slice().unwrap(),
            self.b_q.as_slice().unwrap(),
            self.w_s.as_slice().unwrap(),
            self.b_s.as_slice().unwrap(),
        ]
    }

    fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w_h.as_slice_mut().unwrap(),
            self.b_h.as_slice_mut().unwrap(),
            self.w_q.as_slice_mut().unwrap(),
            self.b_q.as_slice_mut().unwrap(),
            self.w_s.as_slice_mut().unwrap(),
            self.b_s.as_slice_mut().unwrap(),
        ]
    }

    /// All parameters in storage order (W_H, b_H, W_Q, b_Q, W_S, b_S).
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn from_flat(d: HeadDims, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(d);
        let total: usize = p.slices().iter().map(|s| s.len()).sum();
        if flat.len() != total {
            return Err(Error::DimMismatch { expected: total, actual: flat.len() });
        }
        let mut offset = 0;
        for s in p.slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Relabel clusters: new cluster `k` is old cluster `perm[k]`.
    pub fn permute_clusters(&self, perm: &[usize]) -> Self {
        ClusterHeadParams {
            w_h: self.w_h.select(Axis(1), perm).as_standard_layout().into_owned(),
            b_h: self.b_h.select(Axis(0), perm),
            w_q: self.w_q.select(Axis(0), perm),
            b_q: self.b_q.clone(),
            w_s: self.w_s.select(Axis(0), perm),
            b_s: self.b_s.clone(),
        }
    }

    fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += scale * s);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let d = self.dims();
        let mut out = Vec::new();
        out.extend_from_slice(PARAMS_MAGIC);
        out.push(PARAMS_VERSION);
        for v in [d.feature_dim, d.clusters, d.seen_classes, d.word_dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for s in self.slices() {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 1 + 16;
        if bytes.len() < HEADER {
            return Err(Error::Truncated { expected: HEADER, actual: bytes.len() });
        }
        if &bytes[..4] != PARAMS_MAGIC {
            return Err(Error::Format("params magic is not VGSP".into()));
        }
        if bytes[4] != PARAMS_VERSION {
            return Err(Error::Format(format!("unsupported params version {:#04x}", bytes[4])));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[5 + 4 * i..9 + 4 * i].try_into().unwrap()) as usize;
        let d = HeadDims {
            feature_dim: dim(0),
            clusters: dim(1),
            seen_classes: dim(2),
            word_dim: dim(3),
        };
        let payload = &bytes[HEADER..];
        let flat: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let expected = (d.feature_dim + 1) * d.clusters + (d.clusters + 1) * d.seen_classes + (d.clusters + 1) * d.word_dim;
        if flat.len() != expected || !payload.len().is_multiple_of(8) {
            return Err(Error::Truncated { expected: expected * 8, actual: payload.len() });
        }
        let p = Self::from_flat(d, &flat)?;
        if !p.is_finite() {
            return Err(Error::NonFinite { row: "cluster head parameters".into() });
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Probability of a patch (or image) belonging to each visual cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment(pub Array1<f64>);

impl ClusterAssignment {
    pub fn probs(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the most probable cluster, lowest index on ties.
    pub fn hard(&self) -> usize {
        crate::linalg::argmax(self.0.iter().copied()).unwrap_or(0)
    }
}

fn cluster_logits(params: &ClusterHeadParams, feature: ArrayView1<f64>) -> Array1<f64> {
    params.w_h.t().dot(&feature) + &params.b_h
}

pub fn forward_cluster(params: &ClusterHeadParams, feature: ArrayView1<f64>) -> Result<ClusterAssignment> {
    if feature.len() != params.w_h.nrows() {
        return Err(Error::DimMismatch { expected: params.w_h.nrows(), actual: feature.len() });
    }
    Ok(ClusterAssignment(softmax(cluster_logits(params, feature).view())))
}

/// Assignments for every row of `features`, computed in parallel.
pub fn assign_rows(params: &ClusterHeadParams, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    if features.ncols() != params.w_h.nrows() {
        return Err(Error::DimMismatch { expected: params.w_h.nrows(), actual: features.ncols() });
    }
    let mut logits = features.dot(&params.w_h);
    logits += &params.b_h;
    logits
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .for_each(|mut row| {
            let p = softmax(row.view());
            row.assign(&p);
        });
    Ok(logits)
}

/// Neighbour consistency: `-log(max(a . b, eps))`.
pub fn loss_clu(anchor: &ClusterAssignment, neighbor: &ClusterAssignment) -> f64 {
    -dot(anchor.probs(), neighbor.probs()).max(LOG_EPS).ln()
}

/// Negative entropy of the mean assignment, `sum_k m_k log m_k`.
pub fn loss_pel(batch: &[ClusterAssignment]) -> Result<f64> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidArgument("entropy penalty needs a non-empty batch".into()))?;
    let mut mean = Array1::<f64>::zeros(first.len());
    for a in batch {
        mean += &a.0;
    }
    mean /= batch.len() as f64;
    Ok(neg_entropy(mean.view()))
}

fn neg_entropy(mean: ArrayView1<f64>) -> f64 {
    mean.iter().map(|&m| m * m.max(LOG_EPS).ln()).sum()
}

fn class_logits(params: &ClusterHeadParams, a: ArrayView1<f64>) -> Array1<f64> {
    params.w_q.t().dot(&a) + &params.b_q
}

fn semantic_residual(params: &ClusterHeadParams, a: ArrayView1<f64>, target: ArrayView1<f64>) -> Array1<f64> {
    params.w_s.t().dot(&a) + &params.b_s - target
}

/// Cross-entropy of `softmax(Q a)` against the seen-class index `label`.
pub fn loss_cls(params: &ClusterHeadParams, assignment: &ClusterAssignment, label: usize) -> Result<f64> {
    if label >= params.w_q.ncols() {
        return Err(Error::InvalidArgument(format!(
            "label {label} is not one of the {} seen classes",
            params.w_q.ncols()
        )));
    }
    let z = class_logits(params, assignment.probs());
    Ok(log_sum_exp(z.view()) - z[label])
}

/// `|| S a - target ||_2`, not squared.
pub fn loss_sem(params: &ClusterHeadParams, assignment: &ClusterAssignment, target: ArrayView1<f64>) -> Result<f64> {
    if target.len() != params.w_s.ncols() {
        return Err(Error::DimMismatch { expected: params.w_s.ncols(), actual: target.len() });
    }
    Ok(norm(semantic_residual(params, assignment.probs(), target).view()))
}

/// Relative weights of the four loss terms. `clu` is 1 in training; the
/// other values let each term be isolated in gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clu: f64,
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { clu: 1.0, lambda: 5.0, beta: 1.0, gamma: 1.0 }
    }
}

/// One training example: an anchor patch, one of its neighbours, the seen
/// class index of the anchor and that class's word embedding.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub anchor: ArrayView1<'a, f64>,
    pub neighbor: ArrayView1<'a, f64>,
    pub label: usize,
    pub target: ArrayView1<'a, f64>,
}

/// Unweighted batch-mean loss terms and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub clu: f64,
    pub pel: f64,
    pub cls: f64,
    pub sem: f64,
    pub total: f64,
}

fn check_samples(params: &ClusterHeadParams, samples: &[Sample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let d = params.dims();
    for s in samples {
        if s.anchor.len() != d.feature_dim || s.neighbor.len() != d.feature_dim {
            return Err(Error::DimMismatch { expected: d.feature_dim, actual: s.anchor.len().max(s.neighbor.len()) });
        }
        if s.target.len() != d.word_dim {
            return Err(Error::DimMismatch { expected: d.word_dim, actual: s.target.len() });
        }
        if s.label >= d.seen_classes {
            return Err(Error::InvalidArgument(format!("label {} out of range", s.label)));
        }
    }
    Ok(())
}

pub fn total_loss(params: &ClusterHeadParams, samples: &[Sample], weights: &LossWeights) -> Result<LossBreakdown> {
    check_samples(params, samples)?;
    let m = samples.len() as f64;
    let mut out = LossBreakdown::default();
    let mut mean = Array1::<f64>::zeros(params.n_clusters());
    for s in samples {
        let a = ClusterAssignment(softmax(cluster_logits(params, s.anchor).view()));
        let b = ClusterAssignment(softmax(cluster_logits(params, s.neighbor).view()));
        out.clu += loss_clu(&a, &b) / m;
        out.cls += loss_cls(params, &a, s.label)? / m;
        out.sem += loss_sem(params, &a, s.target)? / m;
        mean += &a.0;
    }
    mean /= m;
    out.pel = neg_entropy(mean.view());
    out.total = weights.clu * out.clu + weights.lambda * out.pel + weights.beta * out.cls + weights.gamma * out.sem;
    Ok(out)
}

/// Propagate `d loss / d a` through the softmax into the H head.
fn backprop_cluster(grad: &mut ClusterHeadParams, x: ArrayView1<f64>, a: &Array1<f64>, ga: &Array1<f64>) {
    let inner = dot(a.view(), ga.view());
    let dz = a * &(ga - inner);
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            grad.w_h.row_mut(i).scaled_add(xi, &dz);
        }
    }
    grad.b_h += &dz;
}

/// Loss terms and gradient with respect to every parameter. Samples are
/// split into fixed-size chunks processed in parallel and summed in chunk
/// order, so the result does not depend on the thread count.
pub fn loss_and_grad(
    params: &ClusterHeadParams,
    samples: &[Sample],
    weights: &LossWeights,
) -> Result<(LossBreakdown, ClusterHeadParams)> {
    check_samples(params, samples)?;
    let m = samples.len() as f64;
    let dims = params.dims();

    let anchors: Vec<Array1<f64>> = samples
        .par_iter()
        .map(|s| softmax(cluster_logits(params, s.anchor).view()))
        .collect();
    let mut mean = Array1::<f64>::zeros(dims.clusters);
    for a in &anchors {
        mean += a;
    }
    mean /= m;
    let pel = neg_entropy(mean.view());
    // d pel / d mean_k, with the log clamp's flat region contributing log(eps)
    let pel_grad = mean.mapv(|v| if v > LOG_EPS { v.ln() + 1.0 } else { LOG_EPS.ln() });
    let pel_per_anchor = pel_grad * (weights.lambda / m);

    let partials: Vec<(LossBreakdown, ClusterHeadParams)> = samples
        .par_chunks(CHUNK)
        .zip(anchors.par_chunks(CHUNK))
        .map(|(chunk, chunk_anchors)| {
            let mut grad = ClusterHeadParams::zeros(dims);
            let mut part = LossBreakdown::default();
            for (s, a) in chunk.iter().zip(chunk_anchors) {
                let b = softmax(cluster_logits(params, s.neighbor).view());
                let mut ga = pel_per_anchor.clone();

                let ab = dot(a.view(), b.view());
                part.clu += -ab.max(LOG_EPS).ln() / m;
                if ab > LOG_EPS && weights.clu != 0.0 {
                    let c = -weights.clu / (m * ab);
                    ga.scaled_add(c, &b);
                    let gb = a * c;
                    backprop_cluster(&mut grad, s.neighbor, &b, &gb);
                }

                let z = class_logits(params, a.view());
                part.cls += (log_sum_exp(z.view()) - z[s.label]) / m;
                if weights.beta != 0.0 {
                    let mut dz = softmax(z.view());
                    dz[s.label] -= 1.0;
                    dz *= weights.beta / m;
                    for (k, &ak) in a.iter().enumerate() {
                        grad.w_q.row_mut(k).scaled_add(ak, &dz);
                    }
                    grad.b_q += &dz;
                    ga += &params.w_q.dot(&dz);
                }

                let r = semantic_residual(params, a.view(), s.target);
                let rn = norm(r.view());
                part.sem += rn / m;
                if weights.gamma != 0.0 && rn > 0.0 {
                    let dr = r * (weights.gamma / (m * rn));
                    for (k, &ak) in a.iter().enumerate() {
                        grad.w_s.row_mut(k).scaled_add(ak, &dr);
                    }
                    grad.b_s += &dr;
                    ga += &params.w_s.dot(&dr);
                }

                backprop_cluster(&mut grad, s.anchor, a, &ga);
            }
            (part, grad)
        })
        .collect();

    let mut loss = LossBreakdown { pel, ..Default::default() };
    let mut grad = ClusterHeadParams::zeros(dims);
    for (part, g) in partials {
        loss.clu += part.clu;
        loss.cls += part.cls;
        loss.sem += part.sem;
        grad.add_scaled(&g, 1.0);
    }
    loss.total = weights.clu * loss.clu + weights.lambda * loss.pel + weights.beta * loss.cls + weights.gamma * loss.sem;
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub clusters: usize,
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub neighbor_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            clusters: 150,
            lambda: 5.0,
            beta: 1.0,
            gamma: 1.0,
            learning_rate: 1e-4,
            batch_size: 256,
            epochs: 30,
            seed: 0,
            neighbor_k: crate::neighbors::DEFAULT_K,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights { clu: 1.0, lambda: self.lambda, beta: self.beta, gamma: self.gamma }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters < 2 {
            return Err(Error::InvalidArgument("cluster count must be at least 2".into()));
        }
        for (name, v) in [("lambda", self.lambda), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.neighbor_k == 0 {
            return Err(Error::InvalidArgument("batch size and neighbour count must be positive".into()));
        }
        Ok(())
    }
}

/// Training rows with their seen-class indices and word-embedding targets.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub features: FeatureMatrix,
    /// Seen-class index of each row.
    pub labels: Vec<usize>,
    /// `n_seen x D_w` word embeddings, indexed by seen-class index.
    pub targets: Array2<f64>,
}

impl TrainingSet {
    /// Pair train-split feature rows with labels from the manifest. Rows of
    /// any other split are rejected.
    pub fn from_manifest(features: &FeatureMatrix, manifest: &DatasetManifest) -> Result<Self> {
        if features.n_rows() == 0 {
            return Err(Error::InvalidArgument("the training split is empty".into()));
        }
        let mut labels = Vec::with_capacity(features.n_rows());
        for (index, id) in features.row_ids().iter().enumerate() {
            let img = manifest.image(id.image_id).ok_or_else(|| Error::Invariant {
                index,
                message: format!("row {id} references an image missing from the manifest"),
            })?;
            if img.split != Split::Train {
                return Err(Error::Invariant {
                    index,
                    message: format!("row {id} is from split {:?}; training uses train images only", img.split),
                });
            }
            labels.push(manifest.seen_index(img.class_id).expect("train images are seen"));
        }
        Ok(TrainingSet {
            features: features.clone(),
            labels,
            targets: manifest.word_matrix(&manifest.seen_classes()),
        })
    }

    pub fn head_dims(&self, clusters: usize) -> HeadDims {
        HeadDims {
            feature_dim: self.features.dim(),
            clusters,
            seen_classes: self.targets.nrows(),
            word_dim: self.targets.ncols(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss terms per epoch.
    pub epochs: Vec<LossBreakdown>,
    pub steps: usize,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    fn step(&mut self, params: &mut ClusterHeadParams, grad: &ClusterHeadParams) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut offset = 0;
        for (p, g) in params.slices_mut().into_iter().zip(grad.slices()) {
            for (i, (pi, gi)) in p.iter_mut().zip(g).enumerate() {
                let j = offset + i;
                self.m[j] = Self::BETA1 * self.m[j] + (1.0 - Self::BETA1) * gi;
                self.v[j] = Self::BETA2 * self.v[j] + (1.0 - Self::BETA2) * gi * gi;
                *pi -= self.lr * (self.m[j] / c1) / ((self.v[j] / c2).sqrt() + Self::EPS);
            }
            offset += p.len();
        }
    }
}

/// Train the heads with Adam. Each step takes a batch of anchors from a
/// seeded permutation and pairs every anchor with one of its first
/// `neighbor_k` neighbours, chosen uniformly.
pub fn train_pc(set: &TrainingSet, knn: &NeighborIndex, config: &TrainConfig) -> Result<(ClusterHeadParams, TrainReport)> {
    config.validate()?;
    let n = set.features.n_rows();
    if n == 0 {
        return Err(Error::InvalidArgument("the training split is empty".into()));
    }
    if knn.n_rows() != n {
        return Err(Error::DimMismatch { expected: n, actual: knn.n_rows() });
    }
    if config.clusters > n {
        warn!("{} clusters requested for {} training rows", config.clusters, n);
    }
    let k = config.neighbor_k.min(knn.k());
    let mut init_rng = rng::derived(config.seed, 1);
    let mut params = ClusterHeadParams::init(set.head_dims(config.clusters), &mut init_rng);
    let mut rng = rng::derived(config.seed, 2);
    let mut adam = Adam::new(params.to_flat().len(), config.learning_rate);
    let weights = config.weights();
    let values = set.features.values();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch = LossBreakdown::default();
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<Sample> = batch
                .iter()
                .map(|&i| {
                    let j = knn.neighbor(i, rng.random_range(0..k));
                    Sample {
                        anchor: values.row(i),
                        neighbor: values.row(j),
                        label: set.labels[i],
                        target: set.targets.row(set.labels[i]),
                    }
                })
                .collect();
            let (loss, grad) = loss_and_grad(&params, &samples, &weights)?;
            adam.step(&mut params, &grad);
            epoch.clu += loss.clu;
            epoch.pel += loss.pel;
            epoch.cls += loss.cls;
            epoch.sem += loss.sem;
            epoch.total += loss.total;
            batches += 1;
            report.steps += 1;
        }
        let b = batches.max(1) as f64;
        report.epochs.push(LossBreakdown {
            clu: epoch.clu / b,
            pel: epoch.pel / b,
            cls: epoch.cls / b,
            sem: epoch.sem / b,
            total: epoch.total / b,
        });
        if !params.is_finite() {
            return Err(Error::Internal("training diverged to non-finite parameters".into()));
        }
    }
    Ok((params, report))
}

/// Entropy penalty over the full dataset mean assignment (reporting only).
pub fn dataset_entropy_penalty(params: &ClusterHeadParams, features: &FeatureMatrix) -> Result<f64> {
    let a = assign_rows(params, features.values().view())?;
    let mean = a.mean_axis(Axis(0)).ok_or_else(|| Error::InvalidArgument("no rows".into()))?;
    Ok(neg_entropy(mean.view()))
}
