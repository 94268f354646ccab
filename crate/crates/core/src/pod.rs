//! Proper orthogonal decomposition and discrete empirical interpolation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{thin_svd, DEPENDENCE_TOL};

/// How many POD modes to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ModeSelector {
    Count(usize),
    /// Smallest `n` whose discarded squared-singular-value tail, relative
    /// to the total, drops below the tolerance.
    Energy(f64),
}

#[derive(Debug, Clone)]
pub struct PodBasis {
    pub vectors: DMatrix<f64>,
    /// Retained singular values, descending.
    pub singular_values: Vec<f64>,
    /// All numerically nonzero singular values of the snapshot matrix.
    pub spectrum: Vec<f64>,
}

impl PodBasis {
    pub fn len(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.ncols() == 0
    }
}

/// Smallest `n` with `sum_{j>n} s_j^2 / total < tol`.
pub fn energy_count(singular_values: &[f64], total_energy: f64, tol: f64) -> usize {
    if total_energy <= 0.0 {
        return 0;
    }
    let mut tail = total_energy;
    for (j, s) in singular_values.iter().enumerate() {
        if tail / total_energy < tol {
            return j;
        }
        tail -= s * s;
    }
    singular_values.len()
}

pub fn pod(snapshots: &DMatrix<f64>, selector: ModeSelector) -> Result<PodBasis> {
    if snapshots.ncols() == 0 {
        return Err(Error::InvalidArgument("POD needs at least one snapshot".into()));
    }
    let svd = thin_svd(snapshots, DEPENDENCE_TOL);
    let rank = svd.u.ncols();
    let n = match selector {
        ModeSelector::Count(c) => c.min(rank),
        ModeSelector::Energy(tol) => {
            if !(tol > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "energy tolerance must be positive, got {tol}"
                )));
            }
            energy_count(&svd.singular_values, svd.total_energy, tol).min(rank)
        }
    };
    Ok(PodBasis {
        vectors: svd.u.columns(0, n).into_owned(),
        singular_values: svd.singular_values[..n].to_vec(),
        spectrum: svd.singular_values,
    })
}

/// DEIM interpolation indices for the columns of `u`.
pub fn deim_select(u: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (n, m) = u.shape();
    let mut idx: Vec<usize> = Vec::with_capacity(m);
    for l in 0..m {
        let col = u.column(l);
        let residual: DVector<f64> = if l == 0 {
            col.into_owned()
        } else {
            // solve (P^T U_l) c = P^T u_{l+1}, residual = u_{l+1} - U_l c
            let pu = DMatrix::from_fn(l, l, |i, j| u[(idx[i], j)]);
            let rhs = DVector::from_fn(l, |i, _| col[idx[i]]);
            let c = pu.lu().solve(&rhs).ok_or(Error::SelectionFailure { column: l })?;
            col - u.columns(0, l) * c
        };
        let scale = col.amax();
        let (arg, val) =
            residual.iter().enumerate().fold(
                (0, -1.0),
                |best, (i, v)| {
                    if v.abs() > best.1 {
                        (i, v.abs())
                    } else {
                        best
                    }
                },
            );
        if n == 0 || !(val > DEPENDENCE_TOL * scale.max(f64::MIN_POSITIVE)) || idx.contains(&arg) {
            return Err(Error::SelectionFailure { column: l });
        }
        idx.push(arg);
    }
    Ok(idx)
}

/// `f_EI = U (P^T U)^{-1} P^T f`.
pub fn deim_approximate(u: &DMatrix<f64>, idx: &[usize], f: &DVector<f64>) -> Result<DVector<f64>> {
    let m = idx.len();
    let pu = DMatrix::from_fn(m, m, |i, j| u[(idx[i], j)]);
    let rhs = DVector::from_fn(m, |i, _| f[idx[i]]);
    let c = pu
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::HyperreductionBuild("P^T U is singular".into()))?;
    Ok(u * c)
}

/// Running low-rank summary of a growing snapshot matrix. Holds `U` and
/// the singular values of all columns pushed so far, discarding directions
/// below `1e-7` of the leading singular value.
#[derive(Debug, Clone, Default)]
pub struct SnapshotCompressor {
    u: Option<DMatrix<f64>>,
    s: Vec<f64>,
}

const COMPRESSION_TOL: f64 = 1e-7;

impl SnapshotCompressor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: &DMatrix<f64>) {
        let stacked = match &self.u {
            None => x.clone(),
            Some(u) => {
                let scaled = u * DMatrix::from_diagonal(&DVector::from_row_slice(&self.s));
                let mut m = DMatrix::zeros(x.nrows(), scaled.ncols() + x.ncols());
                m.columns_mut(0, scaled.ncols()).copy_from(&scaled);
                m.columns_mut(scaled.ncols(), x.ncols()).copy_from(x);
                m
            }
        };
        let mut svd = thin_svd(&stacked, COMPRESSION_TOL);
        svd.singular_values.truncate(svd.u.ncols());
        self.u = Some(svd.u);
        self.s = svd.singular_values;
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.s
    }

    /// Leading `count` left singular vectors (fewer if the rank is smaller).
    pub fn modes(&self, count: usize) -> DMatrix<f64> {
        match &self.u {
            Some(u) => u.columns(0, count.min(u.ncols())).into_owned(),
            None => DMatrix::zeros(0, 0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormality_defect, orthonormalize};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn with_spectrum(sv: &[f64], rows: usize, seed: u64) -> DMatrix<f64> {
        let u = orthonormalize(&random(rows, sv.len(), seed));
        let v = orthonormalize(&random(sv.len() + 2, sv.len(), seed + 1));
        u * DMatrix::from_diagonal(&DVector::from_row_slice(sv)) * v.transpose()
    }

    #[test]
    fn energy_rule_by_hand() {
        assert_eq!(energy_count(&[2.0, 1.0, 0.1], 5.01, 0.01), 2);
        let x = with_spectrum(&[2.0, 1.0, 0.1], 12, 4);
        let b = pod(&x, ModeSelector::Energy(0.01)).unwrap();
        assert_eq!(b.len(), 2);
        assert_relative_eq!(b.singular_values[0], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn rank_one_half_energy() {
        let x = DVector::from_fn(7, |i, _| i as f64 + 1.0) * DVector::from_fn(4, |j, _| 1.0 - j as f64).transpose();
        assert_eq!(pod(&x, ModeSelector::Energy(0.5)).unwrap().len(), 1);
    }

    #[test]
    fn orthogonal_snapshots_reconstructed() {
        let x = orthonormalize(&random(10, 3, 9)) * 3.0;
        let b = pod(&x, ModeSelector::Count(3)).unwrap();
        let rec = &b.vectors * (b.vectors.transpose() * &x);
        assert!((rec - x).amax() < 1e-12);
    }

    #[test]
    fn zero_snapshots_give_empty_basis() {
        let b = pod(&DMatrix::zeros(6, 3), ModeSelector::Energy(1e-3)).unwrap();
        assert!(b.is_empty());
    }

    #[test]
    fn compressor_matches_batch_svd() {
        let a = random(50, 8, 31) * random(8, 30, 32);
        let b = random(50, 8, 33) * random(8, 30, 34);
        let mut c = SnapshotCompressor::new();
        c.push(&a);
        c.push(&b);
        let mut both = DMatrix::zeros(50, 60);
        both.columns_mut(0, 30).copy_from(&a);
        both.columns_mut(30, 30).copy_from(&b);
        let full = pod(&both, ModeSelector::Count(16)).unwrap();
        assert_eq!(c.rank(), 16);
        for (x, y) in c.singular_values().iter().zip(&full.singular_values) {
            assert_relative_eq!(*x, *y, max_relative = 1e-8);
        }
    }

    #[test]
    fn deim_on_identity_columns() {
        let u = DMatrix::<f64>::identity(6, 2);
        assert_eq!(deim_select(&u).unwrap(), vec![0, 1]);
    }

    #[test]
    fn deim_rejects_rank_deficient() {
        let mut u = DMatrix::<f64>::identity(5, 3);
        let c0 = u.column(0).into_owned();
        u.set_column(2, &c0);
        assert!(matches!(deim_select(&u), Err(Error::SelectionFailure { column: 2 })));
    }

    #[test]
    fn deim_full_space_is_identity() {
        let u = orthonormalize(&random(6, 6, 21));
        let idx = deim_select(&u).unwrap();
        let f = DVector::from_fn(6, |i, _| (i as f64).cos());
        assert!((deim_approximate(&u, &idx, &f).unwrap() - f).amax() < 1e-12);
    }

    /// Straight-line DEIM for two columns written out step by step.
    #[test]
    fn deim_matches_unrolled_oracle() {
        for seed in 0..20 {
            let u = orthonormalize(&random(5, 2, 100 + seed));
            let argmax = |v: &[f64]| {
                let mut best = 0;
                for i in 1..v.len() {
                    if v[i].abs() > v[best].abs() {
                        best = i;
                    }
                }
                best
            };
            let u1: Vec<f64> = (0..5).map(|i| u[(i, 0)]).collect();
            let u2: Vec<f64> = (0..5).map(|i| u[(i, 1)]).collect();
            let p1 = argmax(&u1);
            let c = u2[p1] / u1[p1];
            let r: Vec<f64> = (0..5).map(|i| u2[i] - c * u1[i]).collect();
            let p2 = argmax(&r);
            assert_eq!(deim_select(&u).unwrap(), vec![p1, p2]);
        }
    }

    proptest! {
        #[test]
        fn deim_exact_on_span(seed in 0u64..1000, m in 1usize..8) {
            let u = orthonormalize(&random(30, m, seed));
            let idx = deim_select(&u).unwrap();
            let coef = random(m, 1, seed + 7);
            let f = (&u * coef).column(0).into_owned();
            let approx = deim_approximate(&u, &idx, &f).unwrap();
            prop_assert!((approx - &f).norm() <= 1e-10 * f.norm());
        }

        #[test]
        fn tail_energy_identity(seed in 0u64..1000, n in 1usize..6) {
            let x = random(40, 12, seed);
            let b = pod(&x, ModeSelector::Count(n)).unwrap();
            prop_assert!(orthonormality_defect(&b.vectors) < 1e-10);
            let err = (&x - &b.vectors * (b.vectors.transpose() * &x)).norm_squared();
            let tail: f64 = b.spectrum[n..].iter().map(|s| s * s).sum();
            prop_assert!((err - tail).abs() <= 1e-8 * tail.max(1e-300));
        }
    }
}
