//! Synthetic zero-shot dataset with known latent structure.
//!
//! A handful of latent attribute prototypes live in feature space. Each class
//! owns a distinct subset of attributes; every patch of an image of that
//! class is one of the class's prototypes plus Gaussian noise. Class word
//! vectors are a fixed random linear image of the class's attribute
//! frequencies plus a little noise, so unseen word vectors are close to
//! affine combinations of seen ones.

use std::path::Path;

use itertools::Itertools;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, RowId};
use crate::manifest::{ClassRecord, DatasetManifest, ImageRecord, Role, Split};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub attributes: usize,
    pub feature_dim: usize,
    pub word_dim: usize,
    pub patches_per_image: usize,
    pub train_per_class: usize,
    pub test_seen_per_class: usize,
    pub test_unseen_per_class: usize,
    /// Standard deviation of per-patch noise (prototypes have unit-variance
    /// entries).
    pub patch_noise: f64,
    /// Standard deviation of noise added to word vectors.
    pub word_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seen_classes: 12,
            unseen_classes: 4,
            attributes: 6,
            feature_dim: 32,
            word_dim: 16,
            patches_per_image: 9,
            train_per_class: 30,
            test_seen_per_class: 10,
            test_unseen_per_class: 30,
            patch_noise: 0.5,
            word_noise: 0.1,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub patch_features: FeatureMatrix,
    /// Mean of each image's patch features, one row per image.
    pub image_features: FeatureMatrix,
    /// `attributes x feature_dim`
    pub prototypes: Array2<f64>,
    /// `classes x attributes`; row `c` holds the expected attribute
    /// frequencies of class `c` (uniform over its subset).
    pub class_attributes: Array2<f64>,
}

impl SyntheticDataset {
    pub fn write(&self, manifest_path: &Path, patch_path: &Path, image_path: &Path) -> Result<()> {
        self.manifest.save(manifest_path)?;
        self.patch_features.save(patch_path)?;
        self.image_features.save(image_path)
    }
}

/// Attribute subsets of size 2 and 3, shuffled, with the first
/// `seen` subsets spanning every attribute direction.
fn choose_subsets(attributes: usize, seen: usize, unseen: usize, rng: &mut rng::Rng) -> Result<Vec<Vec<usize>>> {
    let mut pool: Vec<Vec<usize>> = (0..attributes)
        .combinations(2)
        .chain((0..attributes).combinations(3))
        .collect();
    let need = seen + unseen;
    if pool.len() < need {
        return Err(Error::InvalidArgument(format!(
            "{attributes} attributes give only {} distinct classes, {need} requested",
            pool.len()
        )));
    }
    for _ in 0..1000 {
        pool.shuffle(rng);
        let seen_sets = &pool[..seen];
        if seen_sets.len() >= attributes && frequency_rank(seen_sets, attributes) == attributes {
            return Ok(pool[..need].to_vec());
        }
    }
    Err(Error::InvalidArgument("could not find seen classes spanning all attributes".into()))
}

fn frequencies(set: &[usize], attributes: usize) -> Array1<f64> {
    let mut f = Array1::zeros(attributes);
    for &a in set {
        f[a] = 1.0 / set.len() as f64;
    }
    f
}

fn frequency_rank(sets: &[Vec<usize>], attributes: usize) -> usize {
    // Gaussian elimination with partial pivoting on the frequency matrix.
    let mut m: Vec<Array1<f64>> = sets.iter().map(|s| frequencies(s, attributes)).collect();
    let mut rank = 0;
    for col in 0..attributes {
        let Some(p) = (rank..m.len()).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())) else {
            break;
        };
        if m[p][col].abs() < 1e-9 {
            continue;
        }
        m.swap(rank, p);
        let pivot = m[rank].clone();
        for row in m.iter_mut().skip(rank + 1) {
            let f = row[col] / pivot[col];
            row.scaled_add(-f, &pivot);
        }
        rank += 1;
    }
    rank
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    let c = config;
    if c.seen_classes == 0 || c.unseen_classes == 0 || c.patches_per_image == 0 || c.train_per_class == 0 {
        return Err(Error::InvalidArgument("synthetic dataset needs seen and unseen classes with images".into()));
    }
    let mut rng = rng::seeded(c.seed);
    let subsets = choose_subsets(c.attributes, c.seen_classes, c.unseen_classes, &mut rng)?;
    let n_classes = subsets.len();

    let prototypes = Array2::from_shape_simple_fn((c.attributes, c.feature_dim), || StandardNormal.sample(&mut rng));
    let projection: Array2<f64> = Array2::from_shape_simple_fn((c.attributes, c.word_dim), || StandardNormal.sample(&mut rng));
    let mut class_attributes = Array2::zeros((n_classes, c.attributes));
    for (k, s) in subsets.iter().enumerate() {
        class_attributes.row_mut(k).assign(&frequencies(s, c.attributes));
    }
    let word_noise = Normal::new(0.0, c.word_noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let words = class_attributes.dot(&projection).mapv(|v| v + word_noise.sample(&mut rng));

    let classes = (0..n_classes)
        .map(|k| ClassRecord {
            class_id: k,
            name: format!("class{k:02}_{}", subsets[k].iter().map(|a| a.to_string()).join("")),
            role: if k < c.seen_classes { Role::Seen } else { Role::Unseen },
            word_embedding: words.row(k).to_vec(),
        })
        .collect::<Vec<_>>();

    let noise = Normal::new(0.0, c.patch_noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut images = Vec::new();
    let mut patch_ids = Vec::new();
    let mut patch_rows: Vec<f64> = Vec::new();
    let mut image_ids = Vec::new();
    let mut image_rows: Vec<f64> = Vec::new();
    let mut next_image = 0u64;
    for (k, set) in subsets.iter().enumerate() {
        let splits: Vec<(Split, usize)> = if k < c.seen_classes {
            vec![(Split::Train, c.train_per_class), (Split::TestSeen, c.test_seen_per_class)]
        } else {
            vec![(Split::TestUnseen, c.test_unseen_per_class)]
        };
        for (split, count) in splits {
            for _ in 0..count {
                let image_id = next_image;
                next_image += 1;
                images.push(ImageRecord { image_id, class_id: k, split });
                let mut mean = Array1::<f64>::zeros(c.feature_dim);
                for t in 0..c.patches_per_image {
                    let attr = set[rng.random_range(0..set.len())];
                    let patch = prototypes.row(attr).mapv(|v| v + noise.sample(&mut rng));
                    mean += &patch;
                    patch_ids.push(RowId { image_id, patch_index: t as u32 });
                    patch_rows.extend(patch.iter());
                }
                mean /= c.patches_per_image as f64;
                image_ids.push(RowId { image_id, patch_index: 0 });
                image_rows.extend(mean.iter());
            }
        }
    }
    let manifest = DatasetManifest::new(classes, images)?;
    let patch_features = FeatureMatrix::new(
        patch_ids,
        Array2::from_shape_vec((patch_rows.len() / c.feature_dim, c.feature_dim), patch_rows)
            .map_err(|e| Error::Internal(e.to_string()))?,
    )?;
    let image_features = FeatureMatrix::new(
        image_ids,
        Array2::from_shape_vec((image_rows.len() / c.feature_dim, c.feature_dim), image_rows)
            .map_err(|e| Error::Internal(e.to_string()))?,
    )?;
    Ok(SyntheticDataset { manifest, patch_features, image_features, prototypes, class_attributes })
}

/// Expected class embedding under `params` when patches carry no noise:
/// the attribute-frequency mix of each prototype's assignment.
pub fn latent_class_embeddings(
    data: &SyntheticDataset,
    params: &crate::pc_trainer::ClusterHeadParams,
) -> Result<Array2<f64>> {
    let proto = crate::pc_trainer::assign_rows(params, data.prototypes.view())?;
    Ok(data.class_attributes.dot(&proto))
}

/// Seeded table of random non-negative rows, a chance-level baseline.
pub fn random_table(class_ids: &[usize], dim: usize, seed: u64) -> Result<crate::embeddings::ClassEmbeddingTable> {
    let mut rng = rng::derived(seed, 5);
    let rows = Array2::from_shape_simple_fn((class_ids.len(), dim), || rng.random_range(0.0..1.0));
    crate::embeddings::ClassEmbeddingTable::new(
        class_ids.to_vec(),
        vec![crate::embeddings::Origin::Predicted; class_ids.len()],
        rows,
    )
}
