//! Bilinear compatibility classifier and zero-shot metrics.
//!
//! Scores are `f(x, y) = x^T W phi(y)`. Training makes a pass over shuffled
//! seen-class images and, whenever the most violating wrong class beats the
//! true class by less than the margin, moves `W` toward the true class and
//! away from the violator.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::ClassEmbeddingTable;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::manifest::{DatasetManifest, Split};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SjeConfig {
    pub learning_rate: f64,
    pub margin: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SjeConfig {
    fn default() -> Self {
        SjeConfig { learning_rate: 0.01, margin: 1.0, epochs: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityModel {
    /// `D_img x D_v`
    pub w: Array2<f64>,
    pub margin: f64,
}

impl CompatibilityModel {
    /// Seeded initialisation, uniform in `+-1/sqrt(D_img)`.
    pub fn init(image_dim: usize, embed_dim: usize, margin: f64, seed: u64) -> Self {
        let mut rng = rng::derived(seed, 3);
        let bound = 1.0 / (image_dim.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).unwrap();
        let w = Array2::from_shape_simple_fn((image_dim, embed_dim), || dist.sample(&mut rng));
        CompatibilityModel { w, margin }
    }

    pub fn score(&self, x: ArrayView1<f64>, phi: ArrayView1<f64>) -> f64 {
        x.dot(&self.w).dot(&phi)
    }
}

/// Candidate classes with their embedding rows, ordered by class id.
struct Candidates {
    ids: Vec<usize>,
    rows: Array2<f64>,
}

impl Candidates {
    fn new(table: &ClassEmbeddingTable, class_ids: &[usize]) -> Result<Self> {
        let mut ids = class_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.is_empty() {
            return Err(Error::InvalidArgument("no candidate classes".into()));
        }
        let rows = table.matrix_for(&ids)?;
        Ok(Candidates { ids, rows })
    }

    fn scores(&self, model: &CompatibilityModel, x: ArrayView1<f64>) -> Array1<f64> {
        self.rows.dot(&x.dot(&model.w))
    }

    fn best(&self, model: &CompatibilityModel, x: ArrayView1<f64>) -> usize {
        let s = self.scores(model, x);
        self.ids[crate::linalg::argmax(s.iter().copied()).unwrap()]
    }
}

/// Train on image-level features `x` with class ids `labels`, scoring only
/// against `seen_ids`.
pub fn train_compat(
    x: ArrayView2<f64>,
    labels: &[usize],
    table: &ClassEmbeddingTable,
    seen_ids: &[usize],
    config: &SjeConfig,
) -> Result<CompatibilityModel> {
    if x.nrows() != labels.len() {
        return Err(Error::DimMismatch { expected: x.nrows(), actual: labels.len() });
    }
    let cands = Candidates::new(table, seen_ids)?;
    let pos: BTreeMap<usize, usize> = cands.ids.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let label_pos = labels
        .iter()
        .map(|l| {
            pos.get(l)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("training label {l} has no embedding row")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut model = CompatibilityModel::init(x.ncols(), table.dim(), config.margin, config.seed);
    let mut rng = rng::derived(config.seed, 4);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let xi = x.row(i);
            let truth = label_pos[i];
            let scores = cands.scores(&model, xi);
            let mut violator: Option<(usize, f64)> = None;
            for (j, &s) in scores.iter().enumerate() {
                if j == truth {
                    continue;
                }
                let v = config.margin + s;
                if violator.is_none_or(|(_, best)| v > best) {
                    violator = Some((j, v));
                }
            }
            let Some((j, v)) = violator else { continue };
            if v > scores[truth] {
                let diff = &cands.rows.row(truth) - &cands.rows.row(j);
                for (r, &xv) in xi.iter().enumerate() {
                    if xv != 0.0 {
                        model.w.row_mut(r).scaled_add(config.learning_rate * xv, &diff);
                    }
                }
            }
        }
    }
    Ok(model)
}

/// Highest-scoring candidate; ties go to the lowest class id.
pub fn predict(model: &CompatibilityModel, x: ArrayView1<f64>, candidates: &[usize], table: &ClassEmbeddingTable) -> Result<usize> {
    Ok(Candidates::new(table, candidates)?.best(model, x))
}

/// Top-1 accuracy (percent) per true class over `candidates`.
pub fn per_class_accuracy(
    model: &CompatibilityModel,
    x: ArrayView2<f64>,
    labels: &[usize],
    candidates: &[usize],
    table: &ClassEmbeddingTable,
) -> Result<BTreeMap<usize, f64>> {
    if x.nrows() != labels.len() {
        return Err(Error::DimMismatch { expected: x.nrows(), actual: labels.len() });
    }
    let cands = Candidates::new(table, candidates)?;
    let hits: Vec<bool> = (0..x.nrows())
        .into_par_iter()
        .map(|i| cands.best(model, x.row(i)) == labels[i])
        .collect();
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&l, &h) in labels.iter().zip(&hits) {
        let c = counts.entry(l).or_default();
        c.0 += usize::from(h);
        c.1 += 1;
    }
    Ok(counts
        .into_iter()
        .map(|(c, (hit, n))| (c, 100.0 * hit as f64 / n as f64))
        .collect())
}

pub fn mean_accuracy(per_class: &BTreeMap<usize, f64>) -> f64 {
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.values().sum::<f64>() / per_class.len() as f64
}

pub fn harmonic_mean(u: f64, s: f64) -> f64 {
    if u + s > 0.0 {
        2.0 * u * s / (u + s)
    } else {
        0.0
    }
}

/// Image-level features and class labels of one split.
pub fn split_data(image_features: &FeatureMatrix, manifest: &DatasetManifest, split: Split) -> Result<(Array2<f64>, Vec<usize>)> {
    let sub = image_features.filter_split(manifest, split);
    let labels = sub
        .row_ids()
        .iter()
        .map(|id| manifest.image(id.image_id).map(|i| i.class_id).unwrap())
        .collect();
    Ok((sub.values().clone(), labels))
}

/// ZSL top-1 accuracy: per-class mean over unseen test classes, candidates
/// restricted to unseen classes.
pub fn eval_zsl(model: &CompatibilityModel, image_features: &FeatureMatrix, manifest: &DatasetManifest, table: &ClassEmbeddingTable) -> Result<f64> {
    let (x, y) = split_data(image_features, manifest, Split::TestUnseen)?;
    let pc = per_class_accuracy(model, x.view(), &y, &manifest.unseen_classes(), table)?;
    Ok(mean_accuracy(&pc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GzslScores {
    pub u: f64,
    pub s: f64,
    pub h: f64,
}

/// GZSL accuracies with all classes as candidates.
pub fn eval_gzsl(model: &CompatibilityModel, image_features: &FeatureMatrix, manifest: &DatasetManifest, table: &ClassEmbeddingTable) -> Result<GzslScores> {
    let all: Vec<usize> = (0..manifest.n_classes()).collect();
    let (xu, yu) = split_data(image_features, manifest, Split::TestUnseen)?;
    let (xs, ys) = split_data(image_features, manifest, Split::TestSeen)?;
    let u = mean_accuracy(&per_class_accuracy(model, xu.view(), &yu, &all, table)?);
    let s = mean_accuracy(&per_class_accuracy(model, xs.view(), &ys, &all, table)?);
    Ok(GzslScores { u, s, h: harmonic_mean(u, s) })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zsl: Option<f64>,
    pub gzsl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub t1: f64,
    pub u: f64,
    pub s: f64,
    pub h: f64,
    /// Keyed by class name.
    pub per_class: BTreeMap<String, ClassAccuracy>,
}

/// Train on the train split and report ZSL and GZSL metrics. `table` must
/// already be L2-normalised.
pub fn evaluate(image_features: &FeatureMatrix, manifest: &DatasetManifest, table: &ClassEmbeddingTable, config: &SjeConfig) -> Result<EvalReport> {
    let seen = manifest.seen_classes();
    let unseen = manifest.unseen_classes();
    let all: Vec<usize> = (0..manifest.n_classes()).collect();
    let (x, y) = split_data(image_features, manifest, Split::Train)?;
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("no train-split image features".into()));
    }
    let model = train_compat(x.view(), &y, table, &seen, config)?;

    let (xu, yu) = split_data(image_features, manifest, Split::TestUnseen)?;
    let (xs, ys) = split_data(image_features, manifest, Split::TestSeen)?;
    let zsl = per_class_accuracy(&model, xu.view(), &yu, &unseen, table)?;
    let gu = per_class_accuracy(&model, xu.view(), &yu, &all, table)?;
    let gs = per_class_accuracy(&model, xs.view(), &ys, &all, table)?;
    let (u, s) = (mean_accuracy(&gu), mean_accuracy(&gs));

    let mut per_class = BTreeMap::new();
    for (c, acc) in gu.iter().chain(gs.iter()) {
        per_class.insert(
            manifest.class(*c).unwrap().name.clone(),
            ClassAccuracy { zsl: zsl.get(c).copied(), gzsl: *acc },
        );
    }
    Ok(EvalReport { t1: mean_accuracy(&zsl), u, s, h: harmonic_mean(u, s), per_class })
}
