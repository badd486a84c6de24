//! Exact k-nearest-neighbour search under L2 distance.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use crate::container::write_bytes;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::linalg::sq_dist;

pub const DEFAULT_K: usize = 20;
pub const MAGIC: &[u8; 4] = b"VGSN";

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    ids: Array2<u32>,
    distances: Array2<f64>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_rows(&self) -> usize {
        self.ids.nrows()
    }

    pub fn neighbor_ids(&self) -> &Array2<u32> {
        &self.ids
    }

    pub fn distances(&self) -> &Array2<f64> {
        &self.distances
    }

    /// The `j`-th nearest neighbour of `row`.
    pub fn neighbor(&self, row: usize, j: usize) -> usize {
        self.ids[[row, j]] as usize
    }

    /// Layout: magic `VGSN`, `u32` n, `u32` k, then `n*k` `u32` ids, then
    /// `n*k` `f32` distances, all little-endian and row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (n, k) = self.ids.dim();
        let mut out = Vec::with_capacity(12 + n * k * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        for id in self.ids.iter() {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for d in self.distances.iter() {
            out.extend_from_slice(&(*d as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Truncated { expected: 12, actual: bytes.len() });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("neighbour file magic is not VGSN".into()));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expected = n * k * 8;
        if bytes.len() - 12 != expected {
            return Err(Error::Truncated { expected, actual: bytes.len() - 12 });
        }
        let body = &bytes[12..];
        let ids: Vec<u32> = body[..n * k * 4]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= n) {
            return Err(Error::Format(format!("neighbour id {bad} out of range for {n} rows")));
        }
        let distances: Vec<f64> = body[n * k * 4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(NeighborIndex {
            k,
            ids: Array2::from_shape_vec((n, k), ids).unwrap(),
            distances: Array2::from_shape_vec((n, k), distances).unwrap(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// For every row, the `k` other rows with the smallest L2 distance; ties go to
/// the lower row index. Rows are processed in parallel.
pub fn build_knn(features: &FeatureMatrix, k: usize) -> Result<NeighborIndex> {
    let n = features.n_rows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must satisfy 1 <= k < n_rows = {n}"
        )));
    }
    let values = features.values();
    let rows: Vec<(Vec<u32>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let q = values.row(i);
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(q, values.row(j)), j))
                .collect();
            let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            cand.select_nth_unstable_by(k - 1, by_dist);
            cand.truncate(k);
            cand.sort_by(by_dist);
            (
                cand.iter().map(|c| c.1 as u32).collect(),
                cand.iter().map(|c| c.0.sqrt()).collect(),
            )
        })
        .collect();
    let mut ids = Array2::zeros((n, k));
    let mut distances = Array2::zeros((n, k));
    for (i, (row_ids, row_d)) in rows.into_iter().enumerate() {
        for j in 0..k {
            ids[[i, j]] = row_ids[j];
            distances[[i, j]] = row_d[j];
        }
    }
    Ok(NeighborIndex { k, ids, distances })
}
