//! Dense helpers: orthonormalization and thin SVD via the method of snapshots.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative norm below which a vector is treated as linearly dependent
/// during Gram-Schmidt.
pub const DEPENDENCE_TOL: f64 = 1e-10;

/// Appends the columns of `new` to the orthonormal columns of `basis` using
/// modified Gram-Schmidt with one reorthogonalization pass. Columns whose
/// norm collapses below `DEPENDENCE_TOL` times their original norm are
/// dropped. Returns the grown basis.
pub fn orthonormal_extend(basis: &DMatrix<f64>, new: &DMatrix<f64>) -> DMatrix<f64> {
    let nrows = if basis.ncols() > 0 { basis.nrows() } else { new.nrows() };
    let mut cols: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    for c in new.column_iter() {
        let mut v = c.into_owned();
        let orig = v.norm();
        if orig == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &cols {
                let h = q.dot(&v);
                v.axpy(-h, q, 1.0);
            }
        }
        let nv = v.norm();
        if nv > DEPENDENCE_TOL * orig {
            cols.push(v / nv);
        }
    }
    if cols.is_empty() {
        return DMatrix::zeros(nrows, 0);
    }
    DMatrix::from_columns(&cols)
}

pub fn orthonormalize(m: &DMatrix<f64>) -> DMatrix<f64> {
    orthonormal_extend(&DMatrix::zeros(m.nrows(), 0), m)
}

/// Four-way unrolled dot product; lets the compiler vectorize despite
/// strict floating-point ordering.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `(R a, R b)` for upper trapezoidal `R`, given `lt = R^T` stored column
/// major so that each row of `R` is contiguous.
pub fn upper_mul_pair(lt: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let (q, rows) = lt.shape();
    let mut ra = DVector::zeros(rows);
    let mut rb = DVector::zeros(rows);
    let (a, b) = (a.as_slice(), b.as_slice());
    for i in 0..rows {
        let col = &lt.as_slice()[i * q + i..(i + 1) * q];
        ra[i] = dot(col, &a[i..q]);
        rb[i] = dot(col, &b[i..q]);
    }
    (ra, rb)
}

/// Thin singular value decomposition, truncated to numerically nonzero
/// singular values.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: Vec<f64>,
    /// Squared Frobenius norm of the decomposed matrix.
    pub total_energy: f64,
}

/// Left singular vectors and singular values of `x`.
///
/// Tall matrices with many columns go through the eigendecomposition of the
/// Gram matrix `X^T X` (method of snapshots); the rest through a direct SVD.
/// Singular values below `rank_tol * sigma_1` are discarded.
pub fn thin_svd(x: &DMatrix<f64>, rank_tol: f64) -> ThinSvd {
    thin_svd_leading(x, rank_tol, |s, _| s.len())
}

/// As [`thin_svd`], but only the leading `count(sigma, total_energy)` left
/// singular vectors are formed. `singular_values` still lists every
/// resolvable value, so `u` may have fewer columns.
pub fn thin_svd_leading(x: &DMatrix<f64>, rank_tol: f64, count: impl FnOnce(&[f64], f64) -> usize) -> ThinSvd {
    let total_energy = x.norm_squared();
    if x.ncols() == 0 || x.nrows() == 0 || total_energy == 0.0 {
        return ThinSvd {
            u: DMatrix::zeros(x.nrows(), 0),
            singular_values: Vec::new(),
            total_energy,
        };
    }

    let (u, s) = if x.nrows() >= x.ncols() && x.ncols() > 64 {
        gram_svd(x, rank_tol, |s| count(s, total_energy))
    } else if x.ncols() > x.nrows() && x.nrows() > 64 {
        outer_gram_svd(x, rank_tol, |s| count(s, total_energy))
    } else {
        let (u, s) = direct_svd(x, rank_tol);
        let k = count(&s, total_energy).min(u.ncols());
        (u.columns(0, k).into_owned(), s)
    };
    ThinSvd {
        u,
        singular_values: s,
        total_energy,
    }
}

fn direct_svd(x: &DMatrix<f64>, rank_tol: f64) -> (DMatrix<f64>, Vec<f64>) {
    let svd = x.clone().svd(true, false);
    let u = svd.u.expect("requested U");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let smax = svd.singular_values[order[0]];
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&i| svd.singular_values[i] > rank_tol * smax && svd.singular_values[i] > 0.0)
        .collect();
    let cols: Vec<DVector<f64>> = keep.iter().map(|&i| u.column(i).into_owned()).collect();
    let s = keep.iter().map(|&i| svd.singular_values[i]).collect();
    let u = if cols.is_empty() {
        DMatrix::zeros(x.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    (u, s)
}

fn gram_svd(x: &DMatrix<f64>, rank_tol: f64, count: impl FnOnce(&[f64]) -> usize) -> (DMatrix<f64>, Vec<f64>) {
    let gram = x.transpose() * x;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]].max(0.0);
    // eigenvalues of the Gram matrix carry absolute error ~ eps * lambda_max,
    // so singular values below sqrt(eps) * sigma_1 are not resolvable here
    let tol = rank_tol.max(1e-7);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            let lam = eig.eigenvalues[i];
            lam > 0.0 && lam.sqrt() > tol * lmax.sqrt()
        })
        .collect();
    let s: Vec<f64> = kept.iter().map(|&i| eig.eigenvalues[i].sqrt()).collect();
    let k = count(&s).min(s.len());
    if k == 0 {
        return (DMatrix::zeros(x.nrows(), 0), s);
    }
    let mut v = DMatrix::zeros(x.ncols(), k);
    for (j, &i) in kept[..k].iter().enumerate() {
        v.set_column(j, &(eig.eigenvectors.column(i) / s[j]));
    }
    let raw = x * v;
    // restore orthonormality lost to rounding in X V / sigma
    let u = cholesky_qr(&raw).unwrap_or_else(|| orthonormalize(&raw));
    (u, s)
}

/// Wide matrices: the eigenvectors of `X X^T` are the left singular vectors.
fn outer_gram_svd(x: &DMatrix<f64>, rank_tol: f64, count: impl FnOnce(&[f64]) -> usize) -> (DMatrix<f64>, Vec<f64>) {
    let gram = x * x.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]].max(0.0);
    let tol = rank_tol.max(1e-7);
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| {
            let lam = eig.eigenvalues[i];
            lam > 0.0 && lam.sqrt() > tol * lmax.sqrt()
        })
        .collect();
    let s: Vec<f64> = kept.iter().map(|&i| eig.eigenvalues[i].sqrt()).collect();
    let k = count(&s).min(s.len());
    let cols: Vec<DVector<f64>> = kept[..k]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    if cols.is_empty() {
        return (DMatrix::zeros(x.nrows(), 0), s);
    }
    (DMatrix::from_columns(&cols), s)
}

/// Two rounds of Cholesky QR. `None` when a Gram factor is not positive
/// definite, which happens once columns are close to dependent.
fn cholesky_qr(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut q = m.clone();
    for _ in 0..2 {
        let chol = (q.transpose() * &q).cholesky()?;
        let r = chol.l().transpose();
        // Q R = M  =>  R^T Q^T = M^T
        let qt = r.transpose().solve_lower_triangular(&q.transpose())?;
        q = qt.transpose();
    }
    if orthonormality_defect(&q) > 1e-12 {
        return None;
    }
    Some(q)
}

/// max |Q^T Q - I|.
pub fn orthonormality_defect(q: &DMatrix<f64>) -> f64 {
    if q.ncols() == 0 {
        return 0.0;
    }
    let g = q.tr_mul(q) - DMatrix::identity(q.ncols(), q.ncols());
    g.amax()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn extend_keeps_orthonormal_and_drops_dependent() {
        let a = orthonormalize(&random(20, 3, 1));
        let b = a.columns(0, 2) * DMatrix::from_row_slice(2, 1, &[0.3, -2.0]);
        let grown = orthonormal_extend(&a, &b);
        assert_eq!(grown.ncols(), 3);
        let c = random(20, 4, 2);
        let grown = orthonormal_extend(&a, &c);
        assert_eq!(grown.ncols(), 7);
        assert!(orthonormality_defect(&grown) < 1e-13);
        assert_eq!(grown.columns(0, 3), a);
    }

    #[test]
    fn wide_gram_path_matches_direct() {
        let x = random(90, 300, 8);
        let (u1, s1) = outer_gram_svd(&x, 1e-12, |s| s.len());
        let (u2, s2) = direct_svd(&x, 1e-12);
        assert_eq!(s1.len(), s2.len());
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() < 1e-9 * s2[0]);
        }
        assert!(orthonormality_defect(&u1) < 1e-12);
        for j in 0..5 {
            let d = u1.column(j).dot(&u2.column(j)).abs();
            assert!((d - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn gram_and_direct_paths_agree() {
        let x = random(600, 80, 3);
        let (u1, s1) = gram_svd(&x, 1e-12, |s| s.len());
        let (u2, s2) = direct_svd(&x, 1e-12);
        assert_eq!(s1.len(), s2.len());
        for (a, b) in s1.iter().zip(&s2) {
            assert!((a - b).abs() < 1e-9 * s2[0]);
        }
        // compare the leading subspaces column by column up to sign
        for j in 0..5 {
            let d = u1.column(j).dot(&u2.column(j)).abs();
            assert!((d - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_matrix_has_empty_svd() {
        let svd = thin_svd(&DMatrix::zeros(5, 3), 1e-12);
        assert_eq!(svd.u.ncols(), 0);
        assert!(svd.singular_values.is_empty());
    }
}
