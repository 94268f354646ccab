//! Residual-based primal-dual output error estimation.
//!
//! Per step the estimate is
//!
//! ```text
//! Delta^k = (rho * beta * ||r_du|| + |1 - rho| * ||x_du||) * ||r^k||
//! ```
//!
//! with `beta = 1 / sigma_min(EE)`, the reduced dual solution `x_du`, its
//! residual `r_du` and the primal residual `r^k` of the reduced trajectory.
//! `Delta(p)` is the mean of `Delta^k` over `k = 1..N_t`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::{FullOrderSystem, Parameter};
use crate::linalg::{SparseCholesky, DEPENDENCE_TOL};
use crate::pod::deim_approximate;
use crate::rom::{ReducedModel, RomSolveOptions};

/// Linear solves with a fixed matrix and its transpose.
pub trait InverseOperator {
    fn dim(&self) -> usize;
    fn solve(&self, b: &DVector<f64>) -> DVector<f64>;
    fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64>;
}

impl InverseOperator for SparseCholesky {
    fn dim(&self) -> usize {
        SparseCholesky::dim(self)
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        SparseCholesky::solve(self, b)
    }

    fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        SparseCholesky::solve(self, b)
    }
}

/// Dense LU, for small or nonsymmetric matrices.
pub struct DenseInverse {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lu_t: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl DenseInverse {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension("matrix must be square".into()));
        }
        let lu = m.clone().lu();
        if !lu.is_invertible() {
            return Err(Error::Factorization("matrix is singular".into()));
        }
        Ok(Self {
            lu,
            lu_t: m.transpose().lu(),
        })
    }
}

impl InverseOperator for DenseInverse {
    fn dim(&self) -> usize {
        self.lu.l().nrows()
    }

    fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lu.solve(b).expect("checked invertible")
    }

    fn solve_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        self.lu_t.solve(b).expect("checked invertible")
    }
}

const BETA_BLOCK: usize = 6;
const BETA_MAX_ITER: usize = 2000;
const BETA_RTOL: f64 = 1e-12;

/// `beta = 1 / sigma_min(A)` from block power iteration with Rayleigh-Ritz
/// on `A^{-1} A^{-T}`.
pub fn compute_beta(inv: &dyn InverseOperator) -> Result<f64> {
    let n = inv.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("empty operator".into()));
    }
    let k = BETA_BLOCK.min(n);
    // deterministic, non-degenerate start block
    let mut x = DMatrix::from_fn(n, k, |i, j| {
        let t = ((i + 1) * (j + 3)) as f64;
        (t * 0.618_033_988_749_895).fract() - 0.5
    });
    x = crate::linalg::orthonormalize(&x);
    let apply = |x: &DMatrix<f64>| {
        let mut y = DMatrix::zeros(n, x.ncols());
        for j in 0..x.ncols() {
            let w = inv.solve_transpose(&x.column(j).into_owned());
            y.set_column(j, &inv.solve(&w));
        }
        y
    };
    let mut prev = 0.0;
    let mut lam = 0.0;
    let mut change = f64::INFINITY;
    for _ in 0..BETA_MAX_ITER {
        let y = apply(&x);
        // Rayleigh-Ritz on span(x)
        let h = x.tr_mul(&y);
        let h = (&h + h.transpose()) * 0.5;
        let eig = SymmetricEigen::new(h);
        lam = eig.eigenvalues.max();
        change = (lam - prev).abs() / lam.abs().max(f64::MIN_POSITIVE);
        if change < BETA_RTOL {
            break;
        }
        prev = lam;
        let q = crate::linalg::orthonormalize(&y);
        if q.ncols() == 0 {
            return Err(Error::Estimation("power iteration collapsed to zero".into()));
        }
        x = q;
    }
    if !(lam > 0.0) || !lam.is_finite() {
        return Err(Error::Estimation(format!("invalid dominant eigenvalue {lam}")));
    }
    if change > 1e-6 {
        return Err(Error::Estimation(format!(
            "smallest singular value did not converge (relative change {change:e})"
        )));
    }
    Ok(lam.sqrt())
}

/// Reduced dual problem `E_du x_du = C_du` with `E_du = EE^T`, `C_du = -C^T`,
/// projected onto the Krylov space `{E_du^{-1} C_du, E_du^{-2} C_du, ...}`.
#[derive(Debug, Clone)]
pub struct DualModel {
    pub basis: DMatrix<f64>,
    pub x_hat: DVector<f64>,
    pub x_du: DVector<f64>,
    pub residual_norm: f64,
    pub solution_norm: f64,
    /// Requested basis size; `basis.ncols()` is smaller after a breakdown.
    pub requested: usize,
}

impl DualModel {
    pub fn truncated(&self) -> bool {
        self.basis.ncols() < self.requested
    }
}

pub fn build_dual(fom: &FullOrderSystem, n_du: usize) -> Result<DualModel> {
    let e_du = fom.ee.transpose();
    let c_du = -&fom.output;
    build_dual_with(&e_du, &c_du, fom.factor(), n_du, true)
}

/// `inv` must invert `e_du` (or its transpose when `inv_is_transpose`).
pub fn build_dual_with(
    e_du: &crate::linalg::CsrMatrix,
    c_du: &DVector<f64>,
    inv: &dyn InverseOperator,
    n_du: usize,
    inv_is_transpose: bool,
) -> Result<DualModel> {
    if n_du == 0 {
        return Err(Error::InvalidArgument("dual basis size must be at least 1".into()));
    }
    let solve = |b: &DVector<f64>| {
        if inv_is_transpose {
            inv.solve_transpose(b)
        } else {
            inv.solve(b)
        }
    };
    let dim = c_du.len();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n_du);
    let mut w = solve(c_du);
    for _ in 0..n_du {
        let orig = w.norm();
        if orig == 0.0 || !orig.is_finite() {
            break;
        }
        let mut v = w.clone();
        for _ in 0..2 {
            for q in &cols {
                let h = q.dot(&v);
                v.axpy(-h, q, 1.0);
            }
        }
        let nv = v.norm();
        if nv <= DEPENDENCE_TOL * orig {
            break;
        }
        v /= nv;
        w = solve(&v);
        cols.push(v);
    }
    let (basis, x_hat) = if cols.is_empty() {
        (DMatrix::zeros(dim, 0), DVector::zeros(0))
    } else {
        let basis = DMatrix::from_columns(&cols);
        let red = basis.tr_mul(&e_du.mul_dense(&basis));
        let rhs = basis.tr_mul(c_du);
        let x_hat = red
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Estimation("reduced dual system is singular".into()))?;
        (basis, x_hat)
    };
    let x_du = &basis * &x_hat;
    let residual = c_du - e_du.mul_vec(&x_du);
    Ok(DualModel {
        residual_norm: residual.norm(),
        solution_norm: x_du.norm(),
        basis,
        x_hat,
        x_du,
        requested: n_du,
    })
}

pub const RHO_MIN: f64 = 1e-6;
pub const RHO_MAX: f64 = 1e6;

/// Median of `||e^k|| / (beta ||r^k||)` over steps with a nonzero
/// residual, clamped to `[RHO_MIN, RHO_MAX]`; 1 when every residual is zero.
pub fn rho_bar_from_series(errors: &[f64], residuals: &[f64], beta: f64) -> f64 {
    let mut ratios: Vec<f64> = errors
        .iter()
        .zip(residuals)
        .filter(|(_, &r)| r > 0.0)
        .map(|(&e, &r)| e / (beta * r))
        .filter(|v| v.is_finite())
        .collect();
    if ratios.is_empty() {
        return 1.0;
    }
    ratios.sort_by(f64::total_cmp);
    let m = ratios.len();
    let med = if m % 2 == 1 {
        ratios[m / 2]
    } else {
        0.5 * (ratios[m / 2 - 1] + ratios[m / 2])
    };
    med.clamp(RHO_MIN, RHO_MAX)
}

/// Snapshot-based `rho_bar` from the FOM trajectory at the greedy parameter.
pub fn estimate_rho_bar(fom_states: &DMatrix<f64>, rom: &ReducedModel, p: &Parameter, beta: f64) -> Result<f64> {
    let traj = rom.solve(
        p,
        RomSolveOptions {
            keep_states: true,
            residuals: true,
        },
    )?;
    let states = traj.states.expect("requested");
    let res = traj.residuals.expect("requested");
    if fom_states.ncols() != states.ncols() {
        return Err(Error::Dimension("FOM and ROM trajectories differ in length".into()));
    }
    let errors: Vec<f64> = (1..states.ncols())
        .map(|k| (fom_states.column(k) - rom.basis.lift(&states.column(k).into_owned())).norm())
        .collect();
    Ok(rho_bar_from_series(&errors, &res.total, beta))
}

/// Everything the online estimate needs besides the ROM itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub beta: f64,
    pub rho_bar: f64,
    pub dual_residual_norm: f64,
    pub dual_solution_norm: f64,
}

impl EstimatorState {
    pub fn prefactor(&self) -> f64 {
        self.rho_bar * self.beta * self.dual_residual_norm + (1.0 - self.rho_bar).abs() * self.dual_solution_norm
    }
}

#[derive(Debug, Clone)]
pub struct ErrorEstimate {
    /// `Delta^k`, k = 1..N_t.
    pub per_step: Vec<f64>,
    pub mean: f64,
    /// Mean estimates built from the reduced-basis and interpolation parts
    /// of the residual.
    pub mean_rb: f64,
    pub mean_ei: f64,
    pub outputs: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn error_estimate(rom: &ReducedModel, p: &Parameter, state: &EstimatorState) -> Result<ErrorEstimate> {
    let traj = rom.solve(p, RomSolveOptions::ESTIMATE)?;
    let res = traj.residuals.expect("requested");
    let c = state.prefactor();
    let per_step: Vec<f64> = res.total.iter().map(|r| c * r).collect();
    let rb: Vec<f64> = res.rb.iter().map(|r| c * r).collect();
    let ei: Vec<f64> = res.ei.iter().map(|r| c * r).collect();
    Ok(ErrorEstimate {
        mean: mean(&per_step),
        mean_rb: mean(&rb),
        mean_ei: mean(&ei),
        per_step,
        outputs: traj.outputs,
    })
}

/// Full-order residual of a reduced trajectory at step `k`, evaluated
/// directly in dimension `2N`: `(r, r_rb, r_ei)`.
pub fn primal_residual(
    fom: &FullOrderSystem,
    rom: &ReducedModel,
    reduced_states: &DMatrix<f64>,
    p: &Parameter,
    k: usize,
) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    if k == 0 || k >= reduced_states.ncols() {
        return Err(Error::InvalidArgument(format!("step {k} outside the trajectory")));
    }
    let n = fom.n;
    let physics = fom.physics_at(p);
    let prev = rom.basis.lift(&reduced_states.column(k - 1).into_owned());
    let cur = rom.basis.lift(&reduced_states.column(k).into_owned());
    let f = fom.nonlinear_term(&prev, &physics)?;
    let h = &rom.hyper;
    let u_phi = h.u_phi.columns(0, h.m_phi).into_owned();
    let u_r = h.u_r.columns(0, h.m_r).into_owned();
    let mut f_ei = DVector::zeros(2 * n);
    f_ei.rows_mut(0, n).copy_from(&deim_approximate(
        &u_phi,
        &h.p_phi[..h.m_phi],
        &f.rows(0, n).into_owned(),
    )?);
    f_ei.rows_mut(n, n)
        .copy_from(&deim_approximate(&u_r, &h.p_r[..h.m_r], &f.rows(n, n).into_owned())?);

    let ee_cur = fom.ee.mul_vec(&cur);
    let r = fom.step_rhs(&prev, &f, k, p.t_s) - &ee_cur;
    let r_rb = fom.step_rhs(&prev, &f_ei, k, p.t_s) - &ee_cur;
    let r_ei = fom.mf.mul_vec(&(&f - &f_ei)) * fom.dt;
    Ok((r, r_rb, r_ei))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalingMode {
    /// `max_k |y^k|`
    MaxAbs,
    /// `max_k y^k`
    Max,
}

/// Output scaling for the relative estimate. Falls back to `||Y||_2` when
/// the chosen maximum is not positive; the flag reports the fallback.
pub fn output_scaling(y: &[f64], mode: ScalingMode) -> Result<(f64, bool)> {
    let s = match mode {
        ScalingMode::MaxAbs => y.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        ScalingMode::Max => y.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    if s > 0.0 {
        return Ok((s, false));
    }
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        log::warn!("output maximum is {s}; scaling by the 2-norm instead");
        Ok((norm, true))
    } else {
        Err(Error::UndefinedMetric("output series is identically zero".into()))
    }
}

/// `||Y - Yhat||_2 / ||Y||_2`.
pub fn relative_error(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(Error::Dimension(format!(
            "output series lengths differ: {} vs {}",
            y.len(),
            y_hat.len()
        )));
    }
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::UndefinedMetric("reference output has zero norm".into()));
    }
    let diff = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(diff / norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{build_fom, solve_fom, StimulusProtocol};
    use crate::geometry::{assemble_operators, build_block_mesh};
    use crate::linalg::{orthonormalize, CsrMatrix};
    use crate::pod::{pod, ModeSelector};
    use crate::reaction::ApParameters;
    use crate::rom::{galerkin_project, BlockBasis, Hyperreduction};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn beta_of_diagonal() {
        let a = CsrMatrix::from_diagonal(&[2.0, 4.0]);
        let chol = SparseCholesky::factorize(&a).unwrap();
        assert_relative_eq!(compute_beta(&chol).unwrap(), 0.5, max_relative = 1e-12);
    }

    #[test]
    fn beta_of_rotation() {
        let (c, s) = (0.6f64, 0.8f64);
        let q = DMatrix::from_row_slice(3, 3, &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]);
        let inv = DenseInverse::new(&q).unwrap();
        assert_relative_eq!(compute_beta(&inv).unwrap(), 1.0, max_relative = 1e-10);
    }

    #[test]
    fn beta_of_random_spd_matches_dense_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = DMatrix::from_fn(100, 100, |_, _| rng.gen_range(-1.0..1.0));
        let a = b.transpose() * &b + DMatrix::identity(100, 100) * 0.5;
        let chol = SparseCholesky::factorize(&CsrMatrix::from_dense(&a)).unwrap();
        let smin = a.clone().svd(false, false).singular_values.min();
        assert_relative_eq!(compute_beta(&chol).unwrap(), 1.0 / smin, max_relative = 1e-8);
    }

    #[test]
    fn rho_bar_cases() {
        assert_eq!(rho_bar_from_series(&[1.0, 2.0], &[0.0, 0.0], 1.0), 1.0);
        assert_eq!(rho_bar_from_series(&[1e9, 1e10, 1e11], &[1.0; 3], 1.0), RHO_MAX);
        assert_eq!(rho_bar_from_series(&[1.0, 3.0, 2.0, 4.0], &[1.0; 4], 1.0), 2.5);
    }

    /// Scalar linear system x^k = a x^{k-1} with error e^k = beta r^k built in.
    #[test]
    fn rho_bar_is_one_when_error_equals_beta_times_residual() {
        let (ee, beta) = (4.0, 0.25);
        let x: Vec<f64> = (0..10).map(|k| 0.9f64.powi(k)).collect();
        let xt: Vec<f64> = x.iter().map(|v| v * 0.97).collect();
        // r^k = EE (x^k - xt^k) for a scalar system whose ROM is exact in the dynamics
        let r: Vec<f64> = x.iter().zip(&xt).map(|(a, b)| ee * (a - b)).collect();
        let e: Vec<f64> = x.iter().zip(&xt).map(|(a, b)| (a - b).abs()).collect();
        assert_relative_eq!(rho_bar_from_series(&e, &r, beta), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn metrics_by_hand() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_relative_eq!(relative_error(&[3.0, 4.0], &[3.0, 0.0]).unwrap(), 0.8, epsilon = 1e-15);
        assert!(matches!(
            relative_error(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::UndefinedMetric(_))
        ));
        assert_eq!(output_scaling(&[-3.0, 2.0], ScalingMode::MaxAbs).unwrap(), (3.0, false));
        let (s, fell_back) = output_scaling(&[-3.0, 0.0, -4.0], ScalingMode::Max).unwrap();
        assert!(fell_back);
        assert_relative_eq!(s, 5.0, epsilon = 1e-15);
    }

    fn block(nx: usize, ny: usize, nt: usize) -> FullOrderSystem {
        let mesh = build_block_mesh(nx, ny, 1, [nx as f64, ny as f64, 1.0]).unwrap();
        let ops = assemble_operators(&mesh, 1.0, [1.0, 0.0, 0.0]).unwrap();
        build_fom(&ops, &ApParameters::default(), 2.0, nt, &StimulusProtocol::planar()).unwrap()
    }

    #[test]
    fn dual_full_space_and_zero_rhs() {
        let fom = block(2, 1, 1);
        let d = build_dual(&fom, 2 * fom.n).unwrap();
        assert!(d.residual_norm < 1e-8);
        let zero = DVector::zeros(2 * fom.n);
        let d = build_dual_with(&fom.ee, &zero, fom.factor(), 4, true).unwrap();
        assert_eq!(d.solution_norm, 0.0);
        assert_eq!(d.residual_norm, 0.0);
        assert!(d.truncated());
    }

    #[test]
    fn zero_residual_gives_zero_estimate() {
        let fom = block(2, 1, 10);
        let eye = DMatrix::identity(fom.n, fom.n);
        let basis = BlockBasis {
            v_phi: eye.clone(),
            v_r: eye,
        };
        let rom = galerkin_project(&fom, &basis, &Hyperreduction::identity(fom.n)).unwrap();
        let state = EstimatorState {
            beta: 2.0,
            rho_bar: 1.0,
            dual_residual_norm: 0.0,
            dual_solution_norm: 3.0,
        };
        let est = error_estimate(&rom, &Parameter::new(0.002, 0.0), &state).unwrap();
        assert!(est.per_step.iter().all(|&d| (0.0..1e-6).contains(&d)));
    }

    fn truncated_rom(fom: &FullOrderSystem, nv: usize, nu: usize, p: &Parameter) -> ReducedModel {
        let traj = solve_fom(fom, p).unwrap();
        let s = traj.states.unwrap();
        let f = traj.nonlinear.unwrap();
        let n = fom.n;
        let basis = BlockBasis::empty(n)
            .update(&s, ModeSelector::Count(nv), ModeSelector::Count(nv))
            .unwrap();
        let u_phi = pod(&f.rows(0, n).into_owned(), ModeSelector::Count(nu + 2))
            .unwrap()
            .vectors;
        let u_r = pod(&f.rows(n, n).into_owned(), ModeSelector::Count(nu + 2))
            .unwrap()
            .vectors;
        let hyper = Hyperreduction::build(u_phi, nu, u_r, nu).unwrap();
        galerkin_project(fom, &basis, &hyper).unwrap()
    }

    #[test]
    fn split_identity_and_online_norms() {
        let fom = block(4, 4, 40);
        let p = Parameter::new(0.004, 0.0);
        let rom = truncated_rom(&fom, 2, 4, &p);
        let traj = rom.solve(&p, RomSolveOptions::FULL).unwrap();
        let states = traj.states.unwrap();
        let res = traj.residuals.unwrap();
        let peak = res.rb.iter().fold(0.0f64, |m, v| m.max(*v));
        assert!(peak > 1e-6);
        for k in 1..=40 {
            let (r, rb, ei) = primal_residual(&fom, &rom, &states, &p, k).unwrap();
            assert!((&r - (&rb + &ei)).amax() < 1e-12);
            assert!((res.rb[k - 1] - rb.norm()).abs() <= 1e-8 * peak);
        }
    }

    #[test]
    fn online_total_matches_direct_with_full_interpolation() {
        let fom = block(4, 4, 30);
        let p = Parameter::new(0.004, 0.0);
        let traj = solve_fom(&fom, &p).unwrap();
        let basis = BlockBasis::empty(fom.n)
            .update(&traj.states.unwrap(), ModeSelector::Count(4), ModeSelector::Count(3))
            .unwrap();
        let rom = galerkin_project(&fom, &basis, &Hyperreduction::identity(fom.n)).unwrap();
        let red = rom.solve(&p, RomSolveOptions::FULL).unwrap();
        let states = red.states.unwrap();
        let res = red.residuals.unwrap();
        for k in 1..=30 {
            let (r, _, ei) = primal_residual(&fom, &rom, &states, &p, k).unwrap();
            assert!(ei.amax() < 1e-9);
            assert_relative_eq!(res.total[k - 1], r.norm(), max_relative = 1e-8);
        }
    }

    /// Galerkin optimality: from a common start, one reduced step minimizes
    /// the EE-energy error, i.e. the residual in the EE^{-1} norm.
    #[test]
    fn larger_basis_never_raises_linear_residual() {
        let mut fom = block(4, 4, 3);
        fom.nonlinearity = crate::fom::Nonlinearity::Zero;
        let p = Parameter::new(0.002, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let wide = DMatrix::from_fn(fom.n, 12, |_, _| rng.gen_range(-1.0..1.0));
        let x0 = fom.x0.rows(0, fom.n).into_owned();
        let mut prev = f64::INFINITY;
        for cols in [1, 2, 4, 8, 12] {
            let mut v = DMatrix::zeros(fom.n, cols + 1);
            v.set_column(0, &x0);
            v.columns_mut(1, cols).copy_from(&wide.columns(0, cols));
            let basis = BlockBasis {
                v_phi: orthonormalize(&v),
                v_r: DMatrix::identity(fom.n, 1),
            };
            let rom = galerkin_project(&fom, &basis, &Hyperreduction::identity(fom.n)).unwrap();
            let states = rom.solve(&p, RomSolveOptions::FULL).unwrap().states.unwrap();
            let (r, _, _) = primal_residual(&fom, &rom, &states, &p, 1).unwrap();
            let energy = r.dot(&fom.factor().solve(&r)).sqrt();
            assert!(energy <= prev * (1.0 + 1e-10) + 1e-12, "{energy} > {prev}");
            prev = energy;
        }
    }
}
