//! Rank, pseudoinverse, null space and minimum-norm least squares.
//!
//! Every routine goes through one SVD so that rank, pseudoinverse and null
//! space always agree on the cutoff.

use nalgebra::{DMatrix, DVector};

pub const DEFAULT_RTOL: f64 = 1e-8;

/// SVD with singular values sorted descending and the right-singular basis
/// split at the numerical rank.
#[derive(Debug, Clone)]
pub struct RankedFactorization {
    pub singular_values: Vec<f64>,
    pub rank: usize,
    /// Left singular vectors for the retained values (rows x rank).
    pub u_range: DMatrix<f64>,
    /// Right singular vectors spanning the row space (cols x rank).
    pub v_range: DMatrix<f64>,
    /// Orthonormal null-space basis (cols x (cols - rank)).
    pub v_null: DMatrix<f64>,
}

impl RankedFactorization {
    pub fn new(m: &DMatrix<f64>, rtol: f64) -> Self {
        let (rows, cols) = m.shape();
        if rows == 0 || cols == 0 {
            return RankedFactorization {
                singular_values: vec![],
                rank: 0,
                u_range: DMatrix::zeros(rows, 0),
                v_range: DMatrix::zeros(cols, 0),
                v_null: DMatrix::identity(cols, cols),
            };
        }
        // pad wide matrices so the thin SVD still yields a full right basis
        let work = if rows < cols {
            let mut p = DMatrix::zeros(cols, cols);
            p.view_mut((0, 0), (rows, cols)).copy_from(m);
            p
        } else {
            m.clone()
        };
        let svd = work.svd(true, true);
        let u = svd.u.expect("u requested");
        let vt = svd.v_t.expect("v_t requested");
        let sv = svd.singular_values;

        let mut order: Vec<usize> = (0..sv.len()).collect();
        order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
        let singular_values: Vec<f64> = order.iter().map(|&k| sv[k]).collect();
        let smax = singular_values.first().copied().unwrap_or(0.0);
        let rank = if smax > 0.0 {
            singular_values.iter().filter(|&&s| s > rtol * smax).count()
        } else {
            0
        };

        let mut u_range = DMatrix::zeros(rows, rank);
        let mut v_range = DMatrix::zeros(cols, rank);
        let mut v_null = DMatrix::zeros(cols, cols - rank);
        for (pos, &k) in order.iter().enumerate() {
            let v = vt.row(k).transpose();
            if pos < rank {
                v_range.set_column(pos, &v);
                u_range.set_column(pos, &u.column(k).rows(0, rows));
            } else {
                v_null.set_column(pos - rank, &canonical_sign(v));
            }
        }
        let singular_values = singular_values.into_iter().take(rows.min(cols)).collect();
        RankedFactorization { singular_values, rank, u_range, v_range, v_null }
    }

    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    pub fn pinv(&self) -> DMatrix<f64> {
        let mut s_inv = self.v_range.clone();
        for k in 0..self.rank {
            let s = self.singular_values[k];
            s_inv.column_mut(k).scale_mut(1.0 / s);
        }
        s_inv * self.u_range.transpose()
    }
}

/// Flip `v` so that its first entry of significant magnitude is positive.
pub fn canonical_sign(mut v: DVector<f64>) -> DVector<f64> {
    let scale = v.amax();
    if let Some(first) = v.iter().find(|c| c.abs() > 1e-8 * scale.max(f64::MIN_POSITIVE)) {
        if *first < 0.0 {
            v.neg_mut();
        }
    }
    v
}

pub fn numerical_rank(m: &DMatrix<f64>, rtol: f64) -> usize {
    RankedFactorization::new(m, rtol).rank
}

pub fn pinv(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    RankedFactorization::new(m, rtol).pinv()
}

pub fn nullspace(m: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    RankedFactorization::new(m, rtol).v_null
}

/// Minimum-norm least-squares solution `M⁺ z`.
pub fn lstsq_min_norm(m: &DMatrix<f64>, z: &DVector<f64>, rtol: f64) -> DVector<f64> {
    assert_eq!(m.nrows(), z.len(), "row count of M and length of z differ");
    pinv(m, rtol) * z
}

/// The same solution through the normal equations, `(MᵀM)⁺ Mᵀ z`.
pub fn lstsq_normal(m: &DMatrix<f64>, z: &DVector<f64>, rtol: f64) -> DVector<f64> {
    assert_eq!(m.nrows(), z.len(), "row count of M and length of z differ");
    let mtm = m.transpose() * m;
    // squaring the singular values squares the relative cutoff too
    pinv(&mtm, rtol * rtol) * (m.transpose() * z)
}

/// Column-orthonormality defect `‖NᵀN − I‖_max`.
pub fn orthonormality_defect(n: &DMatrix<f64>) -> f64 {
    let g = n.transpose() * n - DMatrix::identity(n.ncols(), n.ncols());
    g.amax()
}
