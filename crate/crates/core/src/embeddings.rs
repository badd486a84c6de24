//! Image- and class-level semantic embeddings built from patch assignments.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::linalg::norm;
use crate::manifest::{DatasetManifest, Role, Split};
use crate::pc_trainer::{assign_rows, ClusterAssignment, ClusterHeadParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Aggregated,
    Predicted,
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct TableRow {
    class_id: usize,
    origin: Origin,
}

/// One embedding row per class, kept sorted by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    entries: Vec<TableRow>,
    rows: Array2<f64>,
}

impl ClassEmbeddingTable {
    pub fn new(class_ids: Vec<usize>, origins: Vec<Origin>, rows: Array2<f64>) -> Result<Self> {
        if class_ids.len() != rows.nrows() || origins.len() != rows.nrows() {
            return Err(Error::DimMismatch { expected: rows.nrows(), actual: class_ids.len().min(origins.len()) });
        }
        let mut order: Vec<usize> = (0..class_ids.len()).collect();
        order.sort_by_key(|&i| class_ids[i]);
        for w in order.windows(2) {
            if class_ids[w[0]] == class_ids[w[1]] {
                return Err(Error::InvalidArgument(format!("class {} appears twice", class_ids[w[0]])));
            }
        }
        if let Some(i) = rows.rows().into_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { row: format!("class {}", class_ids[i]) });
        }
        Ok(ClassEmbeddingTable {
            entries: order
                .iter()
                .map(|&i| TableRow { class_id: class_ids[i], origin: origins[i] })
                .collect(),
            rows: rows.select(Axis(0), &order),
        })
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.class_id).collect()
    }

    pub fn origins(&self) -> Vec<Origin> {
        self.entries.iter().map(|e| e.origin).collect()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn position(&self, class_id: usize) -> Option<usize> {
        self.entries.binary_search_by_key(&class_id, |e| e.class_id).ok()
    }

    pub fn row(&self, class_id: usize) -> Option<ArrayView1<'_, f64>> {
        self.position(class_id).map(|i| self.rows.row(i))
    }

    pub fn origin(&self, class_id: usize) -> Option<Origin> {
        self.position(class_id).map(|i| self.entries[i].origin)
    }

    /// Rows for `class_ids`, in that order.
    pub fn matrix_for(&self, class_ids: &[usize]) -> Result<Array2<f64>> {
        let idx = class_ids
            .iter()
            .map(|&c| {
                self.position(c)
                    .ok_or_else(|| Error::InvalidArgument(format!("class {c} has no embedding row")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(self.rows.select(Axis(0), &idx))
    }

    /// Union of two tables with disjoint classes.
    pub fn merge(&self, other: &ClassEmbeddingTable) -> Result<ClassEmbeddingTable> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(Error::DimMismatch { expected: self.dim(), actual: other.dim() });
        }
        let mut ids = self.class_ids();
        ids.extend(other.class_ids());
        let mut origins = self.origins();
        origins.extend(other.origins());
        let rows = ndarray::concatenate(Axis(0), &[self.rows.view(), other.rows.view()])
            .map_err(|e| Error::Internal(e.to_string()))?;
        ClassEmbeddingTable::new(ids, origins, rows)
    }

    /// Every row scaled by the same factor.
    pub fn scaled(&self, factor: f64) -> ClassEmbeddingTable {
        ClassEmbeddingTable { entries: self.entries.clone(), rows: &self.rows * factor }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode(&self.entries, &self.rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(path, &self.entries, &self.rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (entries, rows): (Vec<TableRow>, _) = container::read(path)?;
        ClassEmbeddingTable::new(
            entries.iter().map(|e| e.class_id).collect(),
            entries.iter().map(|e| e.origin).collect(),
            rows,
        )
    }
}

/// Mean of the patch assignments of one image (rows of `patch_features`).
pub fn image_embedding(params: &ClusterHeadParams, patch_features: ArrayView2<f64>) -> Result<ClusterAssignment> {
    if patch_features.nrows() == 0 {
        return Err(Error::InvalidArgument("image has no patches".into()));
    }
    let a = assign_rows(params, patch_features)?;
    Ok(ClusterAssignment(a.mean_axis(Axis(0)).unwrap()))
}

/// Image embeddings for every image in `features`, averaged over each
/// image's own patch count.
pub fn image_embeddings(params: &ClusterHeadParams, features: &FeatureMatrix) -> Result<Vec<(u64, Array1<f64>)>> {
    let a = assign_rows(params, features.values().view())?;
    Ok(features
        .rows_by_image()
        .into_iter()
        .map(|(image, rows)| (image, a.select(Axis(0), &rows).mean_axis(Axis(0)).unwrap()))
        .collect())
}

fn class_means(
    per_image: &[(u64, Array1<f64>)],
    manifest: &DatasetManifest,
    split: Split,
    dim: usize,
) -> BTreeMap<usize, Array1<f64>> {
    let mut sums: BTreeMap<usize, (Array1<f64>, usize)> = BTreeMap::new();
    for (image, emb) in per_image {
        let Some(rec) = manifest.image(*image) else { continue };
        if rec.split != split {
            continue;
        }
        let e = sums.entry(rec.class_id).or_insert_with(|| (Array1::zeros(dim), 0));
        e.0 += emb;
        e.1 += 1;
    }
    sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
}

/// Mean image embedding over the train images of seen class `class_id`.
pub fn seen_class_embedding(
    params: &ClusterHeadParams,
    features: &FeatureMatrix,
    manifest: &DatasetManifest,
    class_id: usize,
) -> Result<Array1<f64>> {
    match manifest.class(class_id) {
        Some(c) if c.role == Role::Seen => {}
        _ => return Err(Error::InvalidArgument(format!("class {class_id} is not a seen class"))),
    }
    let rows: Vec<usize> = features
        .row_ids()
        .iter()
        .enumerate()
        .filter(|(_, id)| {
            manifest
                .image(id.image_id)
                .is_some_and(|i| i.class_id == class_id && i.split == Split::Train)
        })
        .map(|(r, _)| r)
        .collect();
    let per_image = image_embeddings(params, &features.select(&rows))?;
    class_means(&per_image, manifest, Split::Train, params.n_clusters())
        .remove(&class_id)
        .ok_or_else(|| Error::InvalidArgument(format!("seen class {class_id} has no train images")))
}

/// Aggregated rows for every seen class, from train-split patches.
pub fn seen_table(params: &ClusterHeadParams, features: &FeatureMatrix, manifest: &DatasetManifest) -> Result<ClassEmbeddingTable> {
    let per_image = image_embeddings(params, features)?;
    let mut means = class_means(&per_image, manifest, Split::Train, params.n_clusters());
    aggregate_rows(manifest.seen_classes(), &mut means, Origin::Aggregated, params.n_clusters())
}

fn aggregate_rows(
    class_ids: Vec<usize>,
    means: &mut BTreeMap<usize, Array1<f64>>,
    origin: Origin,
    dim: usize,
) -> Result<ClassEmbeddingTable> {
    let mut rows = Array2::zeros((class_ids.len(), dim));
    for (r, c) in class_ids.iter().enumerate() {
        let m = means
            .remove(c)
            .ok_or_else(|| Error::InvalidArgument(format!("class {c} has no images to aggregate")))?;
        rows.row_mut(r).assign(&m);
    }
    let n = class_ids.len();
    ClassEmbeddingTable::new(class_ids, vec![origin; n], rows)
}

/// Unseen-class rows computed from unseen test images. This leaks test
/// images into the class table, so callers must opt in with `enabled`.
pub fn oracle_unseen_embedding(
    params: &ClusterHeadParams,
    features: &FeatureMatrix,
    manifest: &DatasetManifest,
    enabled: bool,
) -> Result<ClassEmbeddingTable> {
    if !enabled {
        return Err(Error::InvalidArgument(
            "oracle unseen embeddings require oracle mode to be enabled".into(),
        ));
    }
    let unseen = features.filter_split(manifest, Split::TestUnseen);
    let per_image = image_embeddings(params, &unseen)?;
    let mut means = class_means(&per_image, manifest, Split::TestUnseen, params.n_clusters());
    aggregate_rows(manifest.unseen_classes(), &mut means, Origin::Oracle, params.n_clusters())
}

/// Divide every row by its L2 norm.
pub fn l2_normalize(table: &ClassEmbeddingTable) -> Result<ClassEmbeddingTable> {
    let mut rows = table.rows.clone();
    for (i, mut r) in rows.rows_mut().into_iter().enumerate() {
        let n = norm(r.view());
        if n == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "class {} has a zero embedding row",
                table.entries[i].class_id
            )));
        }
        r /= n;
    }
    Ok(ClassEmbeddingTable { entries: table.entries.clone(), rows })
}

/// Per-patch assignments as CSV (`image_id,patch_index,c0,c1,...`), for
/// external visualisation tools.
pub fn write_assignments_csv(path: &Path, params: &ClusterHeadParams, features: &FeatureMatrix) -> Result<()> {
    let a = assign_rows(params, features.values().view())?;
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Internal(e.to_string()))?;
    let mut header = vec!["image_id".to_string(), "patch_index".to_string()];
    header.extend((0..params.n_clusters()).map(|k| format!("c{k}")));
    w.write_record(&header).map_err(|e| Error::Internal(e.to_string()))?;
    for (id, row) in features.row_ids().iter().zip(a.rows()) {
        let mut rec = vec![id.image_id.to_string(), id.patch_index.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| Error::Internal(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Class rows keyed by class id, used when building tables by hand.
pub fn table_from_map(rows: HashMap<usize, Array1<f64>>, origin: Origin) -> Result<ClassEmbeddingTable> {
    let mut ids: Vec<usize> = rows.keys().copied().collect();
    ids.sort_unstable();
    let dim = rows.values().next().map_or(0, |r| r.len());
    let mut m = Array2::zeros((ids.len(), dim));
    for (i, c) in ids.iter().enumerate() {
        if rows[c].len() != dim {
            return Err(Error::DimMismatch { expected: dim, actual: rows[c].len() });
        }
        m.row_mut(i).assign(&rows[c]);
    }
    let n = ids.len();
    ClassEmbeddingTable::new(ids, vec![origin; n], m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pc_trainer::HeadDims;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    /// Head whose assignment is (near) one-hot on the sign of the first feature.
    fn sign_head() -> ClusterHeadParams {
        let mut p = ClusterHeadParams::zeros(HeadDims { feature_dim: 1, clusters: 2, seen_classes: 1, word_dim: 1 });
        p.w_h = array![[100.0, -100.0]];
        p
    }

    #[test]
    fn image_embedding_is_patch_mean() {
        let p = sign_head();
        let one = image_embedding(&p, array![[1.0]].view()).unwrap();
        assert_abs_diff_eq!(one.probs()[0], 1.0, epsilon = 1e-12);
        let two = image_embedding(&p, array![[1.0], [-1.0]].view()).unwrap();
        assert_abs_diff_eq!(two.probs()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(two.probs().sum(), 1.0, epsilon = 1e-12);
        assert!(image_embedding(&p, Array2::zeros((0, 1)).view()).is_err());
    }

    #[test]
    fn normalize_rows() {
        let t = ClassEmbeddingTable::new(
            vec![0, 1],
            vec![Origin::Aggregated; 2],
            array![[3.0, 4.0, 0.0], [0.0, 1.0, 0.0]],
        )
        .unwrap();
        let n = l2_normalize(&t).unwrap();
        assert_abs_diff_eq!(n.rows()[[0, 0]], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(n.rows()[[0, 1]], 0.8, epsilon = 1e-15);
        assert_eq!(n.row(1).unwrap(), t.row(1).unwrap());
        let zero = ClassEmbeddingTable::new(vec![0], vec![Origin::Predicted], array![[0.0, 0.0]]).unwrap();
        assert!(l2_normalize(&zero).is_err());
    }

    #[test]
    fn table_sorted_and_merged() {
        let a = ClassEmbeddingTable::new(vec![2, 0], vec![Origin::Aggregated; 2], array![[2.0], [0.0]]).unwrap();
        assert_eq!(a.class_ids(), vec![0, 2]);
        let b = ClassEmbeddingTable::new(vec![1], vec![Origin::Predicted], array![[1.0]]).unwrap();
        let m = a.merge(&b).unwrap();
        assert_eq!(m.class_ids(), vec![0, 1, 2]);
        assert_eq!(m.rows().column(0).to_vec(), vec![0.0, 1.0, 2.0]);
        assert_eq!(m.origin(1), Some(Origin::Predicted));
        assert!(m.merge(&b).is_err());
    }

    #[test]
    fn table_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.vgsf");
        let t = ClassEmbeddingTable::new(vec![0, 3], vec![Origin::Aggregated, Origin::Oracle], array![[0.5, 0.5], [0.25, 0.75]]).unwrap();
        t.save(&p).unwrap();
        assert_eq!(ClassEmbeddingTable::load(&p).unwrap(), t);
    }
}
