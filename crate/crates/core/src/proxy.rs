//! SVD-based low-rank parameter proxy.
//!
//! The basis holds the top-r left singular directions of a d x W history
//! matrix (recent per-step parameter-update deltas stacked as columns). The
//! SVD is a one-sided Jacobi on the columns: W is small, so each sweep costs
//! O(d W^2) and the decomposition is deterministic given its input.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyBasis {
    /// Column-major d x r orthonormal basis; column j is `basis[j]`.
    pub columns: Vec<Vec<f64>>,
    pub dim: usize,
    pub rank: usize,
    pub built_at_step: u64,
    /// Number of history columns the basis was fitted on (0 for cold start).
    pub window: usize,
}

impl ProxyBasis {
    /// Cold-start proxy: identity on the first `rank` coordinates.
    pub fn identity(dim: usize, rank: usize) -> Self {
        assert!(rank >= 1 && rank <= dim);
        let mut columns = Vec::with_capacity(rank);
        for j in 0..rank {
            let mut c = vec![0.0; dim];
            c[j] = 1.0;
            columns.push(c);
        }
        Self { columns, dim, rank, built_at_step: 0, window: 0 }
    }

    /// Coordinate-subset proxy: columns are unit vectors on `coords`.
    pub fn coordinate_subset(dim: usize, coords: &[usize], built_at_step: u64) -> Self {
        assert!(!coords.is_empty());
        let mut columns = Vec::with_capacity(coords.len());
        for &i in coords {
            assert!(i < dim);
            let mut c = vec![0.0; dim];
            c[i] = 1.0;
            columns.push(c);
        }
        Self { columns, dim, rank: coords.len(), built_at_step, window: 0 }
    }

    /// `basis^T v`: project a full-space vector into proxy coordinates.
    pub fn project(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: v.len() });
        }
        Ok(self
            .columns
            .iter()
            .map(|c| c.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `B (B^T v)`: the reconstruction of `v` inside the subspace.
    pub fn reconstruct(&self, coeffs: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (c, &w) in self.columns.iter().zip(coeffs) {
            for (o, ci) in out.iter_mut().zip(c) {
                *o += w * ci;
            }
        }
        out
    }

    /// Largest pairwise deviation of `B^T B` from the identity.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rank {
            for j in i..self.rank {
                let dot: f64 = self.columns[i]
                    .iter()
                    .zip(&self.columns[j])
                    .map(|(a, b)| a * b)
                    .sum();
                let target = f64::from(i == j);
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// Fit the top-r left singular directions of the update-history matrix.
///
/// Ties in singular values keep the first occurrence in the decomposition's
/// column order; an all-zero history is an error (callers fall back to the
/// previous basis or the identity proxy).
pub fn fit_basis(update_history: &[Vec<f64>], rank: usize, built_at_step: u64) -> Result<ProxyBasis> {
    assert!(!update_history.is_empty(), "history must be nonempty");
    let dim = update_history[0].len();
    let w = update_history.len();
    assert!(rank >= 1 && rank <= dim.min(w), "rank out of range");
    for h in update_history {
        assert_eq!(h.len(), dim, "ragged history");
    }
    if update_history
        .iter()
        .all(|c| c.iter().all(|&x| x == 0.0))
    {
        return Err(Error::DegenerateHistory);
    }

    let (mut cols, sigmas) = jacobi_svd_columns(update_history);
    // Stable order: descending singular value, original index breaks ties.
    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by(|&a, &b| {
        sigmas[b]
            .partial_cmp(&sigmas[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(rank);
    for &j in order.iter().take(rank) {
        if sigmas[j] > 1e-12 {
            let mut c = std::mem::take(&mut cols[j]);
            for x in c.iter_mut() {
                *x /= sigmas[j];
            }
            canonicalize_sign(&mut c);
            columns.push(c);
        }
    }
    // Rank-deficient history: complete with coordinate directions
    // orthogonalized against what we have (deterministic).
    let mut coord = 0usize;
    while columns.len() < rank {
        let mut c = vec![0.0; dim];
        c[coord] = 1.0;
        coord += 1;
        for b in &columns {
            let dot: f64 = b.iter().zip(&c).map(|(a, x)| a * x).sum();
            for (ci, bi) in c.iter_mut().zip(b) {
                *ci -= dot * bi;
            }
        }
        let norm: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for x in c.iter_mut() {
                *x /= norm;
            }
            columns.push(c);
        }
        assert!(coord <= dim, "failed to complete basis");
    }

    Ok(ProxyBasis { columns, dim, rank, built_at_step, window: w })
}

/// One-sided Jacobi: rotate column pairs until all are mutually orthogonal.
/// Returns the rotated columns and their norms (the singular values).
fn jacobi_svd_columns(history: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let w = history.len();
    let mut cols: Vec<Vec<f64>> = history.to_vec();
    let tol = 1e-14;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for i in 0..w {
            for j in i + 1..w {
                let (mut aii, mut ajj, mut aij) = (0.0, 0.0, 0.0);
                for t in 0..cols[i].len() {
                    aii += cols[i][t] * cols[i][t];
                    ajj += cols[j][t] * cols[j][t];
                    aij += cols[i][t] * cols[j][t];
                }
                if aij.abs() <= tol * (aii * ajj).sqrt().max(1e-300) {
                    continue;
                }
                off = off.max(aij.abs() / (aii * ajj).sqrt().max(1e-300));
                let tau = (ajj - aii) / (2.0 * aij);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (ci, cj) = {
                    let (a, b) = cols.split_at_mut(j);
                    (&mut a[i], &mut b[0])
                };
                for t_idx in 0..ci.len() {
                    let x = ci[t_idx];
                    let y = cj[t_idx];
                    ci[t_idx] = c * x - s * y;
                    cj[t_idx] = s * x + c * y;
                }
            }
        }
        if off < 1e-13 {
            break;
        }
    }
    let sigmas: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    (cols, sigmas)
}

fn canonicalize_sign(c: &mut [f64]) {
    let lead = c.iter().find(|x| x.abs() > 1e-12).copied().unwrap_or(1.0);
    if lead < 0.0 {
        for x in c.iter_mut() {
            *x = -*x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;

    fn random_history(seed: u64, dim: usize, w: usize) -> Vec<Vec<f64>> {
        let mut rng = crate::rng::stream(seed, &[crate::rng::domain::PROXY]);
        (0..w)
            .map(|_| (0..dim).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect()
    }

    #[test]
    fn axis_history_spans_axes() {
        let mut e1 = vec![0.0; 3];
        e1[0] = 1.0;
        let mut e2 = vec![0.0; 3];
        e2[1] = 1.0;
        let b = fit_basis(&[e1, e2], 2, 0).unwrap();
        let e3 = vec![0.0, 0.0, 1.0];
        let p = b.project(&e3).unwrap();
        assert!(p.iter().all(|x| x.abs() < 1e-12));
        assert!(b.orthonormality_defect() < 1e-10);
    }

    #[test]
    fn full_rank_projection_reconstructs() {
        let hist = random_history(1, 6, 6);
        let b = fit_basis(&hist, 6, 0).unwrap();
        for v in &hist {
            let rec = b.reconstruct(&b.project(v).unwrap());
            for (a, x) in rec.iter().zip(v) {
                assert_relative_eq!(*a, *x, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn reconstruction_error_matches_tail_singular_energy() {
        // Independent route: nalgebra's full SVD of the same matrix.
        let dim = 16;
        let w = 10;
        let hist = random_history(2, dim, w);
        let m = DMatrix::from_fn(dim, w, |r, c| hist[c][r]);
        let svd = m.clone().svd(true, false);
        let mut sig: Vec<f64> = svd.singular_values.iter().copied().collect();
        sig.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let mut prev_err = f64::INFINITY;
        for r in 1..=w {
            let b = fit_basis(&hist, r, 0).unwrap();
            // Residual energy of the history matrix under the fitted basis.
            let mut err = 0.0;
            for v in &hist {
                let rec = b.reconstruct(&b.project(v).unwrap());
                err += v
                    .iter()
                    .zip(&rec)
                    .map(|(a, x)| (a - x) * (a - x))
                    .sum::<f64>();
            }
            let tail: f64 = sig[r..].iter().map(|s| s * s).sum();
            assert_relative_eq!(err, tail, epsilon = 1e-8, max_relative = 1e-6);
            assert!(err <= prev_err + 1e-10, "residual increased at r={r}");
            prev_err = err;
        }
    }

    #[test]
    fn projection_is_nonexpansive() {
        let hist = random_history(3, 12, 8);
        let b = fit_basis(&hist, 4, 0).unwrap();
        let mut rng = crate::rng::stream(4, &[crate::rng::domain::PROXY]);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() - 0.5).collect();
            let p = b.project(&v).unwrap();
            let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let np: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(np <= nv + 1e-12);
        }
        // Equality iff v is in the span.
        let inside = b.reconstruct(&[1.0, -2.0, 0.5, 3.0]);
        let p = b.project(&inside).unwrap();
        let ni: f64 = inside.iter().map(|x| x * x).sum::<f64>().sqrt();
        let np: f64 = p.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert_relative_eq!(ni, np, epsilon = 1e-10);
    }

    #[test]
    fn basis_column_projects_to_unit_coordinate() {
        let hist = random_history(5, 9, 5);
        let b = fit_basis(&hist, 3, 0).unwrap();
        for j in 0..3 {
            let p = b.project(&b.columns[j]).unwrap();
            for (i, x) in p.iter().enumerate() {
                assert_relative_eq!(*x, f64::from(i == j), epsilon = 1e-10);
            }
        }
        let zero = vec![0.0; 9];
        assert!(b.project(&zero).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn degenerate_history_is_an_error() {
        let z = vec![vec![0.0; 4], vec![0.0; 4]];
        assert!(matches!(
            fit_basis(&z, 2, 0),
            Err(Error::DegenerateHistory)
        ));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let b = ProxyBasis::identity(4, 2);
        assert!(b.project(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn deterministic_fit() {
        let hist = random_history(6, 10, 6);
        let a = fit_basis(&hist, 3, 7).unwrap();
        let b = fit_basis(&hist, 3, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rank_deficient_history_completes_deterministically() {
        // Two identical columns: rank 1 history, request rank 2.
        let c = vec![1.0, 2.0, 3.0, 4.0];
        let b = fit_basis(&[c.clone(), c], 2, 0).unwrap();
        assert_eq!(b.columns.len(), 2);
        assert!(b.orthonormality_defect() < 1e-9);
    }
}
