//! Unseen-class embeddings predicted from seen-class embeddings through
//! relations measured in an external knowledge space (word vectors by
//! default).
//!
//! Two predictors are available:
//! - weighted average over the `n` nearest seen classes, weighted by
//!   `exp(-eta * distance)`;
//! - similarity-matrix optimisation: the mixing vector `r` that best
//!   reconstructs the unseen word vector from seen word vectors, subject to
//!   `alpha <= r_i <= 1` and `sum r = 1`, is reused to mix seen embeddings.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embeddings::{ClassEmbeddingTable, Origin};
use crate::error::{Error, Result};
use crate::linalg::{dist, dot, norm};
use crate::manifest::DatasetManifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelationMode {
    Wavg,
    Smo,
}

impl FromStr for RelationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wavg" => Ok(RelationMode::Wavg),
            "smo" => Ok(RelationMode::Smo),
            _ => Err(Error::InvalidArgument(format!("unknown relation mode {s:?}"))),
        }
    }
}

impl fmt::Display for RelationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelationMode::Wavg => "wavg",
            RelationMode::Smo => "smo",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CRConfig {
    pub mode: RelationMode,
    pub eta: f64,
    pub n_neighbors: usize,
    pub alpha: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Unit-normalise word vectors before measuring relations.
    pub normalize_word_embeddings: bool,
}

impl Default for CRConfig {
    fn default() -> Self {
        CRConfig {
            mode: RelationMode::Smo,
            eta: 5.0,
            n_neighbors: 5,
            alpha: -1.0,
            tol: 1e-8,
            max_iter: 50_000,
            normalize_word_embeddings: false,
        }
    }
}

impl CRConfig {
    pub fn validate(&self, n_seen: usize) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidArgument("eta must be positive".into()));
        }
        if self.alpha >= 1.0 || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument("alpha must be below 1".into()));
        }
        if self.mode == RelationMode::Wavg && (self.n_neighbors == 0 || self.n_neighbors > n_seen) {
            return Err(Error::InvalidArgument(format!(
                "n_neighbors = {} must be in 1..={n_seen}",
                self.n_neighbors
            )));
        }
        Ok(())
    }
}

/// Mixing weights of one unseen class over the seen classes (seen order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationWeights {
    #[serde(rename = "unseen_class")]
    pub unseen_class_id: usize,
    pub r: Vec<f64>,
    /// `|| w_unseen - r^T W_seen ||_2`
    pub residual: f64,
}

/// `exp(-eta * ||a - b||_2)`
pub fn similarity(a: ArrayView1<f64>, b: ArrayView1<f64>, eta: f64) -> f64 {
    (-eta * dist(a, b)).exp()
}

/// Weights used by the weighted average: `sim / n` on the `n` nearest seen
/// classes (ties to the lower index), zero elsewhere.
pub fn wavg_weights(unseen_w: ArrayView1<f64>, seen_w: ArrayView2<f64>, eta: f64, n_neighbors: usize) -> Result<Array1<f64>> {
    let n_seen = seen_w.nrows();
    if n_neighbors == 0 || n_neighbors > n_seen {
        return Err(Error::InvalidArgument(format!(
            "{n_neighbors} neighbours requested from {n_seen} seen classes"
        )));
    }
    let mut order: Vec<(f64, usize)> = seen_w
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| (dist(unseen_w, row), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut r = Array1::zeros(n_seen);
    for &(d, i) in &order[..n_neighbors] {
        r[i] = (-eta * d).exp() / n_neighbors as f64;
    }
    Ok(r)
}

/// `(1/n) * sum over the n nearest seen classes of sim * phi(seen)`. The sum
/// is not renormalised by the total similarity.
pub fn wavg_predict(
    unseen_w: ArrayView1<f64>,
    seen_w: ArrayView2<f64>,
    seen_rows: ArrayView2<f64>,
    eta: f64,
    n_neighbors: usize,
) -> Result<Array1<f64>> {
    if seen_w.nrows() != seen_rows.nrows() {
        return Err(Error::DimMismatch { expected: seen_w.nrows(), actual: seen_rows.nrows() });
    }
    let r = wavg_weights(unseen_w, seen_w, eta, n_neighbors)?;
    Ok(seen_rows.t().dot(&r))
}

/// Euclidean projection onto `{lo <= r_i <= hi, sum r = 1}`.
///
/// The projection is `clip(v - tau, lo, hi)` for the shift `tau` that makes
/// the entries sum to one; `tau` is found by bisection and then solved
/// exactly on the resulting free set.
pub fn project_capped_simplex(v: ArrayView1<f64>, lo: f64, hi: f64) -> Result<Array1<f64>> {
    let n = v.len() as f64;
    if v.is_empty() || n * lo > 1.0 + 1e-12 || n * hi < 1.0 - 1e-12 || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "no vector of length {} with entries in [{lo}, {hi}] sums to one",
            v.len()
        )));
    }
    let total = |tau: f64| v.iter().map(|&x| (x - tau).clamp(lo, hi)).sum::<f64>();
    let vmax = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let vmin = v.iter().copied().fold(f64::INFINITY, f64::min);
    // total(a) = n*hi >= 1 and total(b) = n*lo <= 1
    let (mut a, mut b) = (vmin - hi, vmax - lo);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if total(mid) > 1.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let mut tau = 0.5 * (a + b);
    let (mut free_sum, mut free_n, mut fixed) = (0.0, 0usize, 0.0);
    for &x in v.iter() {
        let y = x - tau;
        if y <= lo {
            fixed += lo;
        } else if y >= hi {
            fixed += hi;
        } else {
            free_sum += x;
            free_n += 1;
        }
    }
    if free_n > 0 {
        let exact = (free_sum + fixed - 1.0) / free_n as f64;
        // Keep the refinement only if it leaves the active set unchanged.
        let consistent = v.iter().all(|&x| {
            let (old, new) = (x - tau, x - exact);
            (old <= lo) == (new <= lo) && (old >= hi) == (new >= hi)
        });
        if consistent {
            tau = exact;
        }
    }
    Ok(v.mapv(|x| (x - tau).clamp(lo, hi)))
}

/// Result of one constrained least-squares solve.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoSolution {
    pub r: Array1<f64>,
    pub residual: f64,
    pub iterations: usize,
    /// Norm of the gradient mapping at the returned point.
    pub kkt: f64,
}

/// `min_r || w_unseen - r^T W_seen ||_2` s.t. `alpha <= r <= 1`, `sum r = 1`,
/// by accelerated projected gradient with step `1 / ||W_seen||_F^2`.
pub fn smo_solve(seen_w: ArrayView2<f64>, unseen_w: ArrayView1<f64>, alpha: f64, tol: f64, max_iter: usize) -> Result<SmoSolution> {
    let n = seen_w.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("no seen classes".into()));
    }
    if seen_w.ncols() != unseen_w.len() {
        return Err(Error::DimMismatch { expected: seen_w.ncols(), actual: unseen_w.len() });
    }
    let gram = seen_w.dot(&seen_w.t());
    let lin = seen_w.dot(&unseen_w);
    let lipschitz = gram.diag().sum();
    let residual = |r: &Array1<f64>| norm((seen_w.t().dot(r) - unseen_w).view());

    let mut r = project_capped_simplex(Array1::from_elem(n, 1.0 / n as f64).view(), alpha, 1.0)?;
    if lipschitz == 0.0 {
        return Ok(SmoSolution { residual: residual(&r), r, iterations: 0, kkt: 0.0 });
    }
    let step = 1.0 / lipschitz;
    let proj_step = |x: &Array1<f64>| -> Result<Array1<f64>> {
        let grad = gram.dot(x) - &lin;
        project_capped_simplex((x - &(grad * step)).view(), alpha, 1.0)
    };
    // Accelerated projected gradient; momentum restarts whenever the step
    // and the momentum direction disagree.
    let mut y = r.clone();
    let mut t = 1.0f64;
    let mut kkt = f64::INFINITY;
    for it in 0..max_iter {
        let next = proj_step(&y)?;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let moved = &next - &r;
        if dot((&y - &next).view(), moved.view()) > 0.0 {
            t = 1.0;
            y = next.clone();
        } else {
            y = &next + &(moved * ((t - 1.0) / t_next));
            t = t_next;
        }
        r = next;
        kkt = norm((&r - &proj_step(&r)?).view()) / step;
        if kkt <= tol {
            return Ok(SmoSolution { residual: residual(&r), r, iterations: it + 1, kkt });
        }
    }
    Err(Error::NotConverged { iterations: max_iter, kkt, residual: residual(&r) })
}

/// `r^T Phi_seen`
pub fn smo_predict(r: ArrayView1<f64>, seen_rows: ArrayView2<f64>) -> Result<Array1<f64>> {
    if r.len() != seen_rows.nrows() {
        return Err(Error::DimMismatch { expected: seen_rows.nrows(), actual: r.len() });
    }
    Ok(seen_rows.t().dot(&r))
}

fn word_vectors(manifest: &DatasetManifest, ids: &[usize], normalize: bool) -> Array2<f64> {
    let mut m = manifest.word_matrix(ids);
    if normalize {
        for mut row in m.rows_mut() {
            let n = norm(row.view());
            row /= n;
        }
    }
    m
}

/// Predict a row for every unseen class from the seen rows of `table`.
/// Returns the full table (seen rows plus predicted rows) and the relation
/// weights in unseen-class order. Classes are solved in parallel.
pub fn relate(
    table: &ClassEmbeddingTable,
    manifest: &DatasetManifest,
    config: &CRConfig,
) -> Result<(ClassEmbeddingTable, Vec<RelationWeights>)> {
    let seen = manifest.seen_classes();
    let unseen = manifest.unseen_classes();
    config.validate(seen.len())?;
    let seen_rows = table.matrix_for(&seen)?;
    let seen_w = word_vectors(manifest, &seen, config.normalize_word_embeddings);
    let unseen_w = word_vectors(manifest, &unseen, config.normalize_word_embeddings);

    let solved: Vec<Result<(Array1<f64>, RelationWeights)>> = unseen
        .par_iter()
        .enumerate()
        .map(|(u, &class_id)| {
            let target = unseen_w.row(u);
            let (r, residual) = match config.mode {
                RelationMode::Smo => {
                    let s = smo_solve(seen_w.view(), target, config.alpha, config.tol, config.max_iter)?;
                    (s.r, s.residual)
                }
                RelationMode::Wavg => {
                    let r = wavg_weights(target, seen_w.view(), config.eta, config.n_neighbors)?;
                    let res = norm((seen_w.t().dot(&r) - target).view());
                    (r, res)
                }
            };
            let row = smo_predict(r.view(), seen_rows.view())?;
            Ok((row, RelationWeights { unseen_class_id: class_id, r: r.to_vec(), residual }))
        })
        .collect();

    let mut rows = Array2::zeros((seen.len() + unseen.len(), table.dim()));
    let mut ids = seen.clone();
    let mut origins = vec![Origin::Aggregated; seen.len()];
    rows.slice_mut(ndarray::s![..seen.len(), ..]).assign(&seen_rows);
    let mut weights = Vec::with_capacity(unseen.len());
    for (u, res) in solved.into_iter().enumerate() {
        let (row, w) = res?;
        rows.row_mut(seen.len() + u).assign(&row);
        ids.push(unseen[u]);
        origins.push(Origin::Predicted);
        weights.push(w);
    }
    Ok((ClassEmbeddingTable::new(ids, origins, rows)?, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn similarity_closed_forms() {
        let a = array![1.0, 2.0];
        assert_eq!(similarity(a.view(), a.view(), 5.0), 1.0);
        let s = similarity(array![0.0, 0.0].view(), array![0.0, 1.0].view(), 5.0);
        assert_abs_diff_eq!(s, (-5.0f64).exp(), epsilon = 1e-18);
        assert_abs_diff_eq!(s, 6.737946999085467e-3, epsilon = 1e-15);
    }

    #[test]
    fn wavg_single_coincident_neighbor() {
        let seen_w = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let seen_rows = array![[0.1, 0.9], [0.7, 0.3], [0.5, 0.5]];
        let p = wavg_predict(array![0.0, 1.0].view(), seen_w.view(), seen_rows.view(), 5.0, 1).unwrap();
        assert_eq!(p, seen_rows.row(1).to_owned());
    }

    #[test]
    fn wavg_equidistant_pair() {
        let seen_w = array![[1.0, 0.0], [-1.0, 0.0], [5.0, 5.0]];
        let seen_rows = array![[1.0, 0.0], [0.0, 1.0], [9.0, 9.0]];
        let eta = 5.0;
        let p = wavg_predict(array![0.0, 0.0].view(), seen_w.view(), seen_rows.view(), eta, 2).unwrap();
        let expect = (-eta * 1.0f64).exp() / 2.0;
        assert_abs_diff_eq!(p[0], expect, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], expect, epsilon = 1e-15);
        assert!(wavg_predict(array![0.0, 0.0].view(), seen_w.view(), seen_rows.view(), eta, 4).is_err());
    }

    #[test]
    fn projection_properties() {
        let p = project_capped_simplex(array![0.2, 0.3, 0.5].view(), 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(p, array![0.2, 0.3, 0.5], epsilon = 1e-15);
        let p = project_capped_simplex(array![5.0, 0.0, 0.0].view(), 0.0, 1.0).unwrap();
        assert_abs_diff_eq!(p, array![1.0, 0.0, 0.0], epsilon = 1e-15);
        let p = project_capped_simplex(array![3.0, -7.0, 0.1, 0.2].view(), -1.0, 1.0).unwrap();
        assert_abs_diff_eq!(p.sum(), 1.0, epsilon = 1e-14);
        assert!(p.iter().all(|&x| (-1.0..=1.0).contains(&x)));
        assert!(project_capped_simplex(array![0.0, 0.0].view(), 0.6, 1.0).is_err());
    }

    #[test]
    fn single_seen_class_is_forced() {
        let s = smo_solve(array![[2.0, 1.0]].view(), array![0.0, 3.0].view(), -1.0, 1e-8, 100).unwrap();
        assert_eq!(s.r, array![1.0]);
    }

    #[test]
    fn smo_predict_cases() {
        let rows = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        assert_eq!(smo_predict(array![0.0, 1.0, 0.0].view(), rows.view()).unwrap(), array![0.0, 1.0]);
        let u = smo_predict(Array1::from_elem(3, 1.0 / 3.0).view(), rows.view()).unwrap();
        assert_abs_diff_eq!(u, array![0.5, 0.5], epsilon = 1e-15);
        assert!(smo_predict(array![1.0].view(), rows.view()).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("smo".parse::<RelationMode>().unwrap(), RelationMode::Smo);
        assert_eq!(RelationMode::Wavg.to_string(), "wavg");
        assert!("knn".parse::<RelationMode>().is_err());
    }
}
