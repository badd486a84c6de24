#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use vgse::pc_trainer::{loss_and_grad, total_loss, ClusterHeadParams, HeadDims, LossWeights, Sample};
use vgse::rng::{self, Rng};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

pub fn normal_vector(rng: &mut Rng, n: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
}

/// A random head and batch for gradient checks.
pub struct GradCase {
    pub params: ClusterHeadParams,
    pub anchors: Array2<f64>,
    pub neighbors: Array2<f64>,
    pub labels: Vec<usize>,
    pub targets: Array2<f64>,
}

impl GradCase {
    pub fn random(seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let dims = HeadDims {
            feature_dim: r.random_range(2..=32),
            clusters: r.random_range(2..=16),
            seen_classes: r.random_range(2..=6),
            word_dim: r.random_range(1..=6),
        };
        let batch = r.random_range(1..=8);
        let mut params = ClusterHeadParams::init(dims, &mut r);
        // Larger than the training init so the softmax is far from uniform.
        params.w_h *= 3.0;
        params.b_h = normal_vector(&mut r, dims.clusters, 0.5);
        let anchors = normal_matrix(&mut r, batch, dims.feature_dim, 1.0);
        let neighbors = &anchors + &normal_matrix(&mut r, batch, dims.feature_dim, 0.3);
        let labels = (0..batch).map(|_| r.random_range(0..dims.seen_classes)).collect();
        let targets = normal_matrix(&mut r, batch, dims.word_dim, 1.0);
        GradCase { params, anchors, neighbors, labels, targets }
    }

    pub fn samples(&self) -> Vec<Sample<'_>> {
        (0..self.labels.len())
            .map(|i| Sample {
                anchor: self.anchors.row(i),
                neighbor: self.neighbors.row(i),
                label: self.labels[i],
                target: self.targets.row(i),
            })
            .collect()
    }

    /// Relative error between the analytic and central-difference gradients:
    /// `||g - g_fd|| / max(||g||, ||g_fd||)`, and the worst per-entry error
    /// `|g_i - g_fd_i| / max(|g_i|, |g_fd_i|, 1e-3)`.
    pub fn check(&self, weights: &LossWeights, h: f64) -> (f64, f64) {
        let samples = self.samples();
        let dims = self.params.dims();
        let (_, grad) = loss_and_grad(&self.params, &samples, weights).unwrap();
        let analytic = grad.to_flat();
        let mut flat = self.params.to_flat();
        let mut numeric = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let orig = flat[i];
            flat[i] = orig + h;
            let up = total_loss(&ClusterHeadParams::from_flat(dims, &flat).unwrap(), &samples, weights).unwrap().total;
            flat[i] = orig - h;
            let down = total_loss(&ClusterHeadParams::from_flat(dims, &flat).unwrap(), &samples, weights).unwrap().total;
            flat[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        let global = if na.max(nn) == 0.0 { 0.0 } else { diff / na.max(nn) };
        let entry = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
            .fold(0.0, f64::max);
        (global, entry)
    }
}

pub fn isolated(term: &str) -> LossWeights {
    let zero = LossWeights { clu: 0.0, lambda: 0.0, beta: 0.0, gamma: 0.0 };
    match term {
        "clu" => LossWeights { clu: 1.0, ..zero },
        "pel" => LossWeights { lambda: 1.0, ..zero },
        "cls" => LossWeights { beta: 1.0, ..zero },
        "sem" => LossWeights { gamma: 1.0, ..zero },
        _ => LossWeights::default(),
    }
}

/// `1/2 ||A^T r - b||^2`
pub fn qp_objective(a: &Array2<f64>, b: &Array1<f64>, r: &Array1<f64>) -> f64 {
    let res = a.t().dot(r) - b;
    0.5 * res.dot(&res)
}

/// Exact minimiser of `1/2 ||A^T r - b||^2` subject to `alpha <= r <= 1`,
/// `sum r = 1`, by enumerating every assignment of each coordinate to its
/// lower bound, upper bound or the free set and solving the equality
/// constrained problem on each face with a pseudo-inverse. The best feasible
/// face solution is optimal: a vertex of the optimal set is the unique
/// minimiser on its own face.
pub fn qp_oracle(a: &Array2<f64>, b: &Array1<f64>, alpha: f64) -> (Array1<f64>, f64) {
    let n = a.nrows();
    let g = a.dot(&a.t());
    let c = a.dot(b);
    let mut best: Option<(Array1<f64>, f64)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut state = vec![0u8; n];
        let mut k = code;
        for s in state.iter_mut() {
            *s = (k % 3) as u8;
            k /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut r = Array1::from_shape_fn(n, |i| match state[i] {
            0 => alpha,
            1 => 1.0,
            _ => 0.0,
        });
        let fixed_sum: f64 = (0..n).filter(|&i| state[i] != 2).map(|i| r[i]).sum();
        if free.is_empty() {
            if (fixed_sum - 1.0).abs() > 1e-12 {
                continue;
            }
        } else {
            let m = free.len();
            let mut kkt = DMatrix::<f64>::zeros(m + 1, m + 1);
            let mut rhs = DVector::<f64>::zeros(m + 1);
            for (p, &i) in free.iter().enumerate() {
                for (q, &j) in free.iter().enumerate() {
                    kkt[(p, q)] = g[[i, j]];
                }
                kkt[(p, m)] = 1.0;
                kkt[(m, p)] = 1.0;
                let fixed_part: f64 = (0..n).filter(|&j| state[j] != 2).map(|j| g[[i, j]] * r[j]).sum();
                rhs[p] = c[i] - fixed_part;
            }
            rhs[m] = 1.0 - fixed_sum;
            let sol = kkt.pseudo_inverse(1e-12).unwrap() * rhs;
            for (p, &i) in free.iter().enumerate() {
                r[i] = sol[p];
            }
            let total: f64 = r.sum();
            if r.iter().any(|&v| v < alpha - 1e-9 || v > 1.0 + 1e-9) || (total - 1.0).abs() > 1e-9 {
                continue;
            }
        }
        let obj = qp_objective(a, b, &r);
        if best.as_ref().is_none_or(|(_, o)| obj < *o) {
            best = Some((r, obj));
        }
    }
    best.expect("the uniform point is feasible")
}

/// `n_blobs` well separated Gaussian blobs, one seen class per blob and one
/// single-patch image per point. Returns the manifest, the rows and the blob
/// of each row.
pub fn blob_dataset(
    n_blobs: usize,
    per_blob: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> (vgse::manifest::DatasetManifest, vgse::features::FeatureMatrix, Vec<usize>) {
    use vgse::features::{FeatureMatrix, RowId};
    use vgse::manifest::{ClassRecord, DatasetManifest, ImageRecord, Role, Split};

    let mut g = rng::seeded(seed);
    let centres = normal_matrix(&mut g, n_blobs, dim, 4.0);
    let classes = (0..n_blobs)
        .map(|c| ClassRecord {
            class_id: c,
            name: format!("blob{c}"),
            role: Role::Seen,
            word_embedding: (0..n_blobs).map(|j| if j == c { 1.0 } else { 0.0 }).collect(),
        })
        .collect();
    let n = n_blobs * per_blob;
    let blobs: Vec<usize> = (0..n).map(|i| i % n_blobs).collect();
    let images = (0..n)
        .map(|i| ImageRecord { image_id: i as u64, class_id: blobs[i], split: Split::Train })
        .collect();
    let values = Array2::from_shape_fn((n, dim), |(i, j)| {
        centres[[blobs[i], j]] + spread * Distribution::<f64>::sample(&StandardNormal, &mut g)
    });
    let ids = (0..n).map(|i| RowId { image_id: i as u64, patch_index: 0 }).collect();
    (
        DatasetManifest::new(classes, images).unwrap(),
        FeatureMatrix::new(ids, values).unwrap(),
        blobs,
    )
}

/// Fraction of rows whose hard cluster holds a majority of their own group.
pub fn purity(clusters: &[usize], groups: &[usize]) -> f64 {
    use std::collections::HashMap;
    let mut counts: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&c, &g) in clusters.iter().zip(groups) {
        *counts.entry(c).or_default().entry(g).or_default() += 1;
    }
    let majority: usize = counts.values().map(|m| m.values().copied().max().unwrap_or(0)).sum();
    majority as f64 / clusters.len() as f64
}

/// Trainer settings for the synthetic dataset: one cluster per prototype
/// pair is plenty, and a larger step than the default converges in 30 epochs.
pub fn synthetic_train_config(seed: u64) -> vgse::pc_trainer::TrainConfig {
    vgse::pc_trainer::TrainConfig {
        clusters: 12,
        learning_rate: 1e-2,
        batch_size: 128,
        epochs: 30,
        seed,
        ..Default::default()
    }
}

/// Synthetic data plus heads trained on its train split.
pub fn synthetic_trained(seed: u64) -> (vgse::synthetic::SyntheticDataset, ClusterHeadParams) {
    use vgse::manifest::Split;
    let data = vgse::synthetic::generate(&vgse::synthetic::SyntheticConfig::default()).unwrap();
    let train = data.patch_features.filter_split(&data.manifest, Split::Train);
    let cfg = synthetic_train_config(seed);
    let knn = vgse::neighbors::build_knn(&train, cfg.neighbor_k).unwrap();
    let set = vgse::pc_trainer::TrainingSet::from_manifest(&train, &data.manifest).unwrap();
    let (params, _) = vgse::pc_trainer::train_pc(&set, &knn, &cfg).unwrap();
    (data, params)
}
