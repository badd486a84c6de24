use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, Split};

/// Identifies one feature row: a patch of an image. Image-level features
/// use `patch_index = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RowId {
    pub image_id: u64,
    pub patch_index: u32,
}

impl fmt::Display for RowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(image {}, patch {})", self.image_id, self.patch_index)
    }
}

/// Patch (or image) feature vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    row_ids: Vec<RowId>,
    values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(row_ids: Vec<RowId>, values: Array2<f64>) -> Result<Self> {
        if row_ids.len() != values.nrows() {
            return Err(Error::DimMismatch {
                expected: values.nrows(),
                actual: row_ids.len(),
            });
        }
        for (id, row) in row_ids.iter().zip(values.rows()) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: id.to_string() });
            }
        }
        let mut seen = HashSet::with_capacity(row_ids.len());
        for (index, id) in row_ids.iter().enumerate() {
            if !seen.insert(*id) {
                return Err(Error::Invariant {
                    index,
                    message: format!("duplicate row id {id}"),
                });
            }
        }
        Ok(FeatureMatrix { row_ids, values })
    }

    pub fn row_ids(&self) -> &[RowId] {
        &self.row_ids
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Row indices grouped by image, images in order of first appearance.
    pub fn rows_by_image(&self) -> Vec<(u64, Vec<usize>)> {
        let mut order = Vec::new();
        let mut groups: HashMap<u64, Vec<usize>> = HashMap::new();
        for (i, id) in self.row_ids.iter().enumerate() {
            groups
                .entry(id.image_id)
                .or_insert_with(|| {
                    order.push(id.image_id);
                    Vec::new()
                })
                .push(i);
        }
        order
            .into_iter()
            .map(|img| {
                let rows = groups.remove(&img).unwrap();
                (img, rows)
            })
            .collect()
    }

    /// Sub-matrix of the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            row_ids: rows.iter().map(|&r| self.row_ids[r]).collect(),
            values: self.values.select(Axis(0), rows),
        }
    }

    /// Rows whose image belongs to `split`.
    pub fn filter_split(&self, manifest: &DatasetManifest, split: Split) -> FeatureMatrix {
        let rows: Vec<usize> = self
            .row_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| manifest.image(id.image_id).is_some_and(|img| img.split == split))
            .map(|(i, _)| i)
            .collect();
        self.select(&rows)
    }

    /// Keep at most `max` patches per image (the lowest patch indices).
    pub fn limit_patches(&self, max: usize) -> FeatureMatrix {
        let mut rows = Vec::new();
        for (_, mut group) in self.rows_by_image() {
            group.sort_by_key(|&r| self.row_ids[r].patch_index);
            group.truncate(max);
            rows.extend(group);
        }
        rows.sort_unstable();
        self.select(&rows)
    }

    /// Check that every referenced image exists and has `1..=max_patches` rows.
    pub fn validate_against(&self, manifest: &DatasetManifest, max_patches: Option<usize>) -> Result<()> {
        for (index, id) in self.row_ids.iter().enumerate() {
            if manifest.image(id.image_id).is_none() {
                return Err(Error::Invariant {
                    index,
                    message: format!("row {id} references an image missing from the manifest"),
                });
            }
        }
        if let Some(max) = max_patches {
            for (image, rows) in self.rows_by_image() {
                if rows.len() > max {
                    return Err(Error::Invariant {
                        index: rows[max],
                        message: format!("image {image} has {} patch rows, more than {max}", rows.len()),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        container::encode(&self.row_ids, &self.values)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write(path, &self.row_ids, &self.values)
    }
}

/// Read a feature container without manifest checks.
pub fn read_features(path: &Path) -> Result<FeatureMatrix> {
    let (rows, values) = container::read::<RowId>(path)?;
    FeatureMatrix::new(rows, values)
}

/// Read a feature container and check it against the manifest.
pub fn load_features(path: &Path, manifest: &DatasetManifest) -> Result<FeatureMatrix> {
    let f = read_features(path)?;
    f.validate_against(manifest, None)?;
    Ok(f)
}

pub fn save_features(path: &Path, features: &FeatureMatrix) -> Result<()> {
    features.save(path)
}
