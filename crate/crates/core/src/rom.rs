//! Block POD bases, DEIM hyperreduction and the Galerkin reduced model.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::{FullOrderSystem, Nonlinearity, Parameter, StimulusProtocol};
use crate::linalg::{orthonormal_extend, thin_svd_leading, upper_mul_pair, DEPENDENCE_TOL};
use crate::pod::{deim_select, energy_count, ModeSelector};
use crate::reaction::ApParameters;

/// Block-diagonal projection basis `V = diag(V_phi, V_r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockBasis {
    pub v_phi: DMatrix<f64>,
    pub v_r: DMatrix<f64>,
}

impl BlockBasis {
    pub fn empty(nodes: usize) -> Self {
        Self {
            v_phi: DMatrix::zeros(nodes, 0),
            v_r: DMatrix::zeros(nodes, 0),
        }
    }

    pub fn nodes(&self) -> usize {
        self.v_phi.nrows()
    }

    pub fn n_phi(&self) -> usize {
        self.v_phi.ncols()
    }

    pub fn n_r(&self) -> usize {
        self.v_r.ncols()
    }

    pub fn dim(&self) -> usize {
        self.n_phi() + self.n_r()
    }

    /// Dense `2N x n` matrix.
    pub fn assembled(&self) -> DMatrix<f64> {
        let (n, a, b) = (self.nodes(), self.n_phi(), self.n_r());
        let mut v = DMatrix::zeros(2 * n, a + b);
        v.view_mut((0, 0), (n, a)).copy_from(&self.v_phi);
        v.view_mut((n, a), (n, b)).copy_from(&self.v_r);
        v
    }

    pub fn lift(&self, xhat: &DVector<f64>) -> DVector<f64> {
        let n = self.nodes();
        let mut x = DVector::zeros(2 * n);
        x.rows_mut(0, n).copy_from(&(&self.v_phi * xhat.rows(0, self.n_phi())));
        x.rows_mut(n, n)
            .copy_from(&(&self.v_r * xhat.rows(self.n_phi(), self.n_r())));
        x
    }

    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.nodes();
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.n_phi())
            .copy_from(&self.v_phi.tr_mul(&x.rows(0, n)));
        out.rows_mut(self.n_phi(), self.n_r())
            .copy_from(&self.v_r.tr_mul(&x.rows(n, n)));
        out
    }

    /// Grows both blocks from new state snapshots (`2N x m`, top rows Phi).
    pub fn update(&self, snapshots: &DMatrix<f64>, sel_phi: ModeSelector, sel_r: ModeSelector) -> Result<Self> {
        let n = self.nodes();
        if snapshots.nrows() != 2 * n {
            return Err(Error::Dimension(format!(
                "snapshots have {} rows, expected {}",
                snapshots.nrows(),
                2 * n
            )));
        }
        Ok(Self {
            v_phi: update_block(&self.v_phi, &snapshots.rows(0, n).into_owned(), sel_phi)?,
            v_r: update_block(&self.v_r, &snapshots.rows(n, n).into_owned(), sel_r)?,
        })
    }
}

/// Deflates `snapshots` against `v_old`, takes POD modes of the remainder
/// and appends them with modified Gram-Schmidt.
pub fn update_block(v_old: &DMatrix<f64>, snapshots: &DMatrix<f64>, selector: ModeSelector) -> Result<DMatrix<f64>> {
    if v_old.ncols() > 0 && v_old.nrows() != snapshots.nrows() {
        return Err(Error::Dimension("basis and snapshots differ in row count".into()));
    }
    let scale = snapshots.norm();
    if scale == 0.0 || snapshots.ncols() == 0 {
        return Ok(v_old.clone());
    }
    let mut deflated = snapshots.clone();
    if v_old.ncols() > 0 {
        // two passes, as in classical Gram-Schmidt with reorthogonalization
        for _ in 0..2 {
            let coeff = v_old.transpose() * &deflated;
            deflated -= v_old * coeff;
        }
    }
    let svd = thin_svd_leading(&deflated, DEPENDENCE_TOL, |s, total| {
        let rank = s.iter().take_while(|&&v| v > DEPENDENCE_TOL * scale).count();
        match selector {
            ModeSelector::Count(c) => c.min(rank),
            ModeSelector::Energy(tol) => energy_count(s, total, tol).min(rank),
        }
    });
    let count = svd.u.ncols();
    Ok(orthonormal_extend(v_old, &svd.u.columns(0, count).into_owned()))
}

/// DEIM data for the two reaction blocks. The bases carry a few extra
/// columns beyond the `m_phi`/`m_r` used by the reduced model; the
/// surplus feeds the estimate of the interpolation error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperreduction {
    pub u_phi: DMatrix<f64>,
    pub u_r: DMatrix<f64>,
    pub m_phi: usize,
    pub m_r: usize,
    /// DEIM indices for all columns of `u_phi`; the first `m_phi` are used by the ROM.
    pub p_phi: Vec<usize>,
    pub p_r: Vec<usize>,
}

fn select_block(u: &DMatrix<f64>, m: usize, block: &str) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if m == 0 {
        return Err(Error::HyperreductionBuild(format!(
            "{block} block has no interpolation columns"
        )));
    }
    if m > u.ncols() {
        return Err(Error::HyperreductionBuild(format!(
            "{block} block requests {m} columns but the basis has {}",
            u.ncols()
        )));
    }
    match deim_select(u) {
        Ok(p) => Ok((u.clone(), p)),
        Err(Error::SelectionFailure { column }) if column >= m => {
            let trimmed = u.columns(0, column).into_owned();
            let p = deim_select(&trimmed)?;
            Ok((trimmed, p))
        }
        Err(Error::SelectionFailure { column }) => Err(Error::HyperreductionBuild(format!(
            "{block} block: DEIM selection failed at column {column}"
        ))),
        Err(e) => Err(e),
    }
}

impl Hyperreduction {
    pub fn build(u_phi: DMatrix<f64>, m_phi: usize, u_r: DMatrix<f64>, m_r: usize) -> Result<Self> {
        let (u_phi, p_phi) = select_block(&u_phi, m_phi, "phi")?;
        let (u_r, p_r) = select_block(&u_r, m_r, "r")?;
        Ok(Self {
            u_phi,
            u_r,
            m_phi,
            m_r,
            p_phi,
            p_r,
        })
    }

    /// Identity interpolation on all nodes (no hyperreduction).
    pub fn identity(nodes: usize) -> Self {
        let u = DMatrix::identity(nodes, nodes);
        Self {
            u_phi: u.clone(),
            u_r: u,
            m_phi: nodes,
            m_r: nodes,
            p_phi: (0..nodes).collect(),
            p_r: (0..nodes).collect(),
        }
    }

    pub fn n_ei(&self) -> usize {
        self.m_phi + self.m_r
    }
}

fn inverse(m: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let lu = m.lu();
    lu.solve(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::HyperreductionBuild(format!("{what} is singular")))
}

/// Galerkin-projected, hyperreduced model. All online quantities are small
/// dense matrices; the only size-N data kept are the bases themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReducedModel {
    pub basis: BlockBasis,
    pub hyper: Hyperreduction,
    pub dt: f64,
    pub n_steps: usize,
    pub physics: ApParameters,
    pub protocol: StimulusProtocol,
    pub nonlinearity: Nonlinearity,
    /// `V^T EE V`
    pub ee_hat: DMatrix<f64>,
    /// `V^T AA V`
    pub aa_hat: DMatrix<f64>,
    /// `V^T M_f U` restricted to the used columns; multiplies the DEIM
    /// coefficients `(P^T U)^{-1} P^T f`.
    pub hyper_hat: DMatrix<f64>,
    pub b_hat: Vec<DVector<f64>>,
    pub c_hat: DVector<f64>,
    pub x0_hat: DVector<f64>,
    // precomputed solves with ee_hat
    step: DMatrix<f64>,
    hyper_step: DMatrix<f64>,
    input_step: Vec<DVector<f64>>,
    // sample nodes and row slices of V there
    samples: Vec<usize>,
    vphi_rows: DMatrix<f64>,
    vr_rows: DMatrix<f64>,
    pos_phi: Vec<usize>,
    pos_r: Vec<usize>,
    inv_pu_phi: DMatrix<f64>,
    inv_pu_r: DMatrix<f64>,
    inv_pu_phi_ext: DMatrix<f64>,
    inv_pu_r_ext: DMatrix<f64>,
    /// Transposed triangular factor of the residual operator:
    /// `||r|| = ||R z||`, stored as `R^T`.
    residual_factor_t: DMatrix<f64>,
}

/// Residual norms per step `k = 1..N_t`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResidualSeries {
    pub total: Vec<f64>,
    pub rb: Vec<f64>,
    pub ei: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RomTrajectory {
    pub parameter: Parameter,
    pub outputs: Vec<f64>,
    /// `n x (N_t + 1)` reduced states.
    pub states: Option<DMatrix<f64>>,
    pub residuals: Option<ResidualSeries>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RomSolveOptions {
    pub keep_states: bool,
    pub residuals: bool,
}

impl RomSolveOptions {
    pub const OUTPUT_ONLY: Self = Self {
        keep_states: false,
        residuals: false,
    };
    pub const ESTIMATE: Self = Self {
        keep_states: false,
        residuals: true,
    };
    pub const FULL: Self = Self {
        keep_states: true,
        residuals: true,
    };
}

fn lift_block(top: bool, u: &DMatrix<f64>) -> DMatrix<f64> {
    let n = u.nrows();
    let mut out = DMatrix::zeros(2 * n, u.ncols());
    out.view_mut((if top { 0 } else { n }, 0), (n, u.ncols())).copy_from(u);
    out
}

pub fn galerkin_project(fom: &FullOrderSystem, basis: &BlockBasis, hyper: &Hyperreduction) -> Result<ReducedModel> {
    let n = basis.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("reduced basis is empty".into()));
    }
    if basis.nodes() != fom.n || hyper.u_phi.nrows() != fom.n || hyper.u_r.nrows() != fom.n {
        return Err(Error::Dimension(format!(
            "basis/hyperreduction rows do not match N = {}",
            fom.n
        )));
    }
    let (nphi, nr) = (basis.n_phi(), basis.n_r());
    let v = basis.assembled();
    let ee_v = fom.ee.mul_dense(&v);
    let aa_v = fom.aa.mul_dense(&v);
    let ee_hat = v.transpose() * &ee_v;
    let aa_hat = v.transpose() * &aa_v;

    let (mphi, mr) = (hyper.m_phi, hyper.m_r);
    let (ephi, er) = (hyper.u_phi.ncols(), hyper.u_r.ncols());
    let inv_pu_phi = inverse(
        DMatrix::from_fn(mphi, mphi, |i, j| hyper.u_phi[(hyper.p_phi[i], j)]),
        "P^T U (phi)",
    )?;
    let inv_pu_r = inverse(
        DMatrix::from_fn(mr, mr, |i, j| hyper.u_r[(hyper.p_r[i], j)]),
        "P^T U (r)",
    )?;
    let inv_pu_phi_ext = inverse(
        DMatrix::from_fn(ephi, ephi, |i, j| hyper.u_phi[(hyper.p_phi[i], j)]),
        "P^T U (phi)",
    )?;
    let inv_pu_r_ext = inverse(
        DMatrix::from_fn(er, er, |i, j| hyper.u_r[(hyper.p_r[i], j)]),
        "P^T U (r)",
    )?;

    let mu_phi = fom.mass.mul_dense(&hyper.u_phi);
    let mu_r = fom.mass.mul_dense(&hyper.u_r);
    let mut hyper_hat = DMatrix::zeros(n, mphi + mr);
    hyper_hat
        .view_mut((0, 0), (nphi, mphi))
        .copy_from(&(basis.v_phi.transpose() * mu_phi.columns(0, mphi)));
    hyper_hat
        .view_mut((nphi, mphi), (nr, mr))
        .copy_from(&(basis.v_r.transpose() * mu_r.columns(0, mr)));

    let b_hat: Vec<DVector<f64>> = fom.inputs.iter().map(|b| v.tr_mul(b)).collect();
    let c_hat = v.tr_mul(&fom.output);
    let x0_hat = v.tr_mul(&fom.x0);

    // consistency probe against the full operator
    let probe = DVector::from_fn(n, |i, _| ((i * 7919 % 101) as f64 / 101.0) - 0.5);
    let direct = v.tr_mul(&fom.ee.mul_vec(&(&v * &probe)));
    let reduced = &ee_hat * &probe;
    if (&direct - &reduced).norm() > 1e-10 * direct.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::Validation("projected operator failed the probe check".into()));
    }

    let lu = ee_hat.clone().lu();
    let solve = |m: &DMatrix<f64>| {
        lu.solve(m)
            .ok_or_else(|| Error::Factorization("projected system matrix is singular".into()))
    };
    let step = solve(&aa_hat)?;
    let hyper_step = solve(&hyper_hat)?;
    let input_step = b_hat
        .iter()
        .map(|b| solve(&DMatrix::from_column_slice(n, 1, b.as_slice())).map(|m| m.column(0).into_owned()))
        .collect::<Result<Vec<_>>>()?;

    let mut samples: Vec<usize> = hyper.p_phi.iter().chain(&hyper.p_r).copied().collect();
    samples.sort_unstable();
    samples.dedup();
    let pos = |p: &[usize]| -> Vec<usize> { p.iter().map(|i| samples.binary_search(i).unwrap()).collect() };
    let pos_phi = pos(&hyper.p_phi);
    let pos_r = pos(&hyper.p_r);
    let vphi_rows = DMatrix::from_fn(samples.len(), nphi, |i, j| basis.v_phi[(samples[i], j)]);
    let vr_rows = DMatrix::from_fn(samples.len(), nr, |i, j| basis.v_r[(samples[i], j)]);

    // W = [AA V | dt A V | dt M_f U_phi | dt M_f U_r | dt B_j]
    let nin = fom.inputs.len();
    let q = 2 * n + ephi + er + nin;
    let mut w = DMatrix::zeros(2 * fom.n, q);
    w.columns_mut(0, n).copy_from(&aa_v);
    w.columns_mut(n, n).copy_from(&(fom.a.mul_dense(&v) * fom.dt));
    w.columns_mut(2 * n, ephi)
        .copy_from(&(lift_block(true, &mu_phi) * fom.dt));
    w.columns_mut(2 * n + ephi, er)
        .copy_from(&(lift_block(false, &mu_r) * fom.dt));
    for (j, b) in fom.inputs.iter().enumerate() {
        w.column_mut(2 * n + ephi + er + j).copy_from(&(b * fom.dt));
    }
    let residual_factor_t = w.qr().r().transpose();

    Ok(ReducedModel {
        basis: basis.clone(),
        hyper: hyper.clone(),
        dt: fom.dt,
        n_steps: fom.n_steps,
        physics: fom.physics,
        protocol: fom.protocol.clone(),
        nonlinearity: fom.nonlinearity,
        ee_hat,
        aa_hat,
        hyper_hat,
        b_hat,
        c_hat,
        x0_hat,
        step,
        hyper_step,
        input_step,
        samples,
        vphi_rows,
        vr_rows,
        pos_phi,
        pos_r,
        inv_pu_phi,
        inv_pu_r,
        inv_pu_phi_ext,
        inv_pu_r_ext,
        residual_factor_t,
    })
}

impl ReducedModel {
    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn n_ei(&self) -> usize {
        self.hyper.n_ei()
    }

    pub fn sample_nodes(&self) -> &[usize] {
        &self.samples
    }

    pub fn physics_at(&self, p: &Parameter) -> ApParameters {
        ApParameters {
            gamma: p.gamma,
            t_s: p.t_s,
            ..self.physics
        }
    }

    /// Nodal reaction at the sample nodes for reduced state `xhat`.
    fn sampled_reaction(&self, xhat: &DVector<f64>, physics: &ApParameters) -> Result<(DVector<f64>, DVector<f64>)> {
        let (nphi, nr) = (self.basis.n_phi(), self.basis.n_r());
        let s = self.samples.len();
        if self.nonlinearity == Nonlinearity::Zero {
            return Ok((DVector::zeros(s), DVector::zeros(s)));
        }
        let phi = &self.vphi_rows * xhat.rows(0, nphi);
        let r = &self.vr_rows * xhat.rows(nphi, nr);
        let mut fphi = DVector::zeros(s);
        let mut fr = DVector::zeros(s);
        for i in 0..s {
            let (a, b) = physics
                .rates(physics.phi_of(phi[i]), r[i])
                .ok_or(Error::Singularity { node: self.samples[i] })?;
            fphi[i] = a;
            fr[i] = b;
        }
        Ok((fphi, fr))
    }

    pub fn solve(&self, p: &Parameter, opts: RomSolveOptions) -> Result<RomTrajectory> {
        let physics = self.physics_at(p);
        physics.validate()?;
        let n = self.dim();
        let nt = self.n_steps;
        let (mphi, mr) = (self.hyper.m_phi, self.hyper.m_r);
        let (ephi, er) = (self.hyper.u_phi.ncols(), self.hyper.u_r.ncols());
        let nin = self.input_step.len();
        let q = 2 * n + ephi + er + nin;

        let mut xhat = self.x0_hat.clone();
        let mut outputs = Vec::with_capacity(nt + 1);
        outputs.push(self.c_hat.dot(&xhat));
        let mut states = opts.keep_states.then(|| {
            let mut m = DMatrix::zeros(n, nt + 1);
            m.set_column(0, &xhat);
            m
        });
        let mut res = opts.residuals.then(|| ResidualSeries {
            total: Vec::with_capacity(nt),
            rb: Vec::with_capacity(nt),
            ei: Vec::with_capacity(nt),
        });
        let mut coeff = DVector::zeros(mphi + mr);
        let mut z_rb = DVector::zeros(q);
        let mut z_ei = DVector::zeros(q);

        for k in 1..=nt {
            let (fphi, fr) = self.sampled_reaction(&xhat, &physics)?;
            let gather = |f: &DVector<f64>, pos: &[usize], m: usize| DVector::from_fn(m, |i, _| f[pos[i]]);
            let c_phi = &self.inv_pu_phi * gather(&fphi, &self.pos_phi, mphi);
            let c_r = &self.inv_pu_r * gather(&fr, &self.pos_r, mr);
            coeff.rows_mut(0, mphi).copy_from(&c_phi);
            coeff.rows_mut(mphi, mr).copy_from(&c_r);

            let mut next = &self.step * &xhat;
            next.gemv(self.dt, &self.hyper_step, &coeff, 1.0);
            let amps = self.protocol.inputs_at(k, self.dt, p.t_s);
            for (b, &a) in self.input_step.iter().zip(&amps) {
                if a != 0.0 {
                    next.axpy(self.dt * a, b, 1.0);
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step: k });
            }

            if let Some(series) = res.as_mut() {
                let c_phi_ext = &self.inv_pu_phi_ext * gather(&fphi, &self.pos_phi, ephi);
                let c_r_ext = &self.inv_pu_r_ext * gather(&fr, &self.pos_r, er);
                z_rb.fill(0.0);
                z_ei.fill(0.0);
                z_rb.rows_mut(0, n).copy_from(&(&xhat - &next));
                z_rb.rows_mut(n, n).copy_from(&next);
                z_rb.rows_mut(2 * n, mphi).copy_from(&c_phi);
                z_rb.rows_mut(2 * n + ephi, mr).copy_from(&c_r);
                for (j, &a) in amps.iter().enumerate() {
                    z_rb[2 * n + ephi + er + j] = a;
                }
                z_ei.rows_mut(2 * n, ephi).copy_from(&c_phi_ext);
                z_ei.rows_mut(2 * n + ephi, er).copy_from(&c_r_ext);
                z_ei.rows_mut(2 * n, mphi).axpy(-1.0, &c_phi, 1.0);
                z_ei.rows_mut(2 * n + ephi, mr).axpy(-1.0, &c_r, 1.0);
                let (r_rb, r_ei) = upper_mul_pair(&self.residual_factor_t, &z_rb, &z_ei);
                series.total.push((&r_rb + &r_ei).norm());
                series.rb.push(r_rb.norm());
                series.ei.push(r_ei.norm());
            }

            xhat = next;
            outputs.push(self.c_hat.dot(&xhat));
            if let Some(s) = states.as_mut() {
                s.set_column(k, &xhat);
            }
        }
        Ok(RomTrajectory {
            parameter: *p,
            outputs,
            states,
            residuals: res,
        })
    }
}

pub fn solve_rom(rom: &ReducedModel, p: &Parameter) -> Result<RomTrajectory> {
    rom.solve(p, RomSolveOptions::FULL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fom::{build_fom, solve_fom};
    use crate::geometry::{assemble_operators, build_block_mesh};
    use crate::linalg::{orthonormality_defect, orthonormalize};
    use crate::pod::pod;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn bar(protocol: StimulusProtocol, nt: usize) -> FullOrderSystem {
        let mesh = build_block_mesh(2, 1, 1, [2.0, 1.0, 1.0]).unwrap();
        let ops = assemble_operators(&mesh, 1.0, [1.0, 0.0, 0.0]).unwrap();
        build_fom(&ops, &ApParameters::default(), 2.0, nt, &protocol).unwrap()
    }

    #[test]
    fn empty_basis_update_equals_pod() {
        let x = random(30, 10, 1);
        let grown = update_block(&DMatrix::zeros(30, 0), &x, ModeSelector::Count(4)).unwrap();
        let direct = pod(&x, ModeSelector::Count(4)).unwrap();
        for j in 0..4 {
            assert!((grown.column(j).dot(&direct.vectors.column(j)).abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn snapshots_in_span_add_nothing() {
        let v = orthonormalize(&random(30, 5, 2));
        let x = &v * random(5, 12, 3);
        let grown = update_block(&v, &x, ModeSelector::Count(3)).unwrap();
        assert_eq!(grown.ncols(), 5);
    }

    #[test]
    fn repeated_updates_stay_orthonormal() {
        let mut b = BlockBasis::empty(40);
        for it in 0..3 {
            let snaps = random(80, 15, 10 + it);
            b = b
                .update(&snaps, ModeSelector::Count(4), ModeSelector::Energy(0.1))
                .unwrap();
            assert!(orthonormality_defect(&b.assembled()) < 1e-10);
        }
        assert_eq!(b.n_phi(), 12);
    }

    #[test]
    fn empty_basis_rejected() {
        let fom = bar(StimulusProtocol::planar(), 2);
        let err = galerkin_project(&fom, &BlockBasis::empty(fom.n), &Hyperreduction::identity(fom.n)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn projected_operator_matches_dense_triple_product() {
        let fom = bar(StimulusProtocol::planar(), 2);
        let v = orthonormalize(&random(fom.n, 3, 5));
        let basis = BlockBasis {
            v_phi: v.clone(),
            v_r: v.columns(0, 2).into_owned(),
        };
        let rom = galerkin_project(&fom, &basis, &Hyperreduction::identity(fom.n)).unwrap();
        let vd = basis.assembled();
        let oracle = vd.transpose() * fom.ee.to_dense() * &vd;
        assert!((oracle - &rom.ee_hat).amax() < 1e-13);
    }

    #[test]
    fn full_rank_rom_reproduces_fom() {
        for protocol in [StimulusProtocol::planar(), StimulusProtocol::scroll()] {
            let fom = bar(protocol, 30);
            let p = Parameter::new(0.003, 20.0);
            let eye = DMatrix::identity(fom.n, fom.n);
            let basis = BlockBasis {
                v_phi: eye.clone(),
                v_r: eye,
            };
            let rom = galerkin_project(&fom, &basis, &Hyperreduction::identity(fom.n)).unwrap();
            let full = solve_fom(&fom, &p).unwrap();
            let red = solve_rom(&rom, &p).unwrap();
            let ymax = full.outputs.iter().fold(0.0f64, |m, y| m.max(y.abs()));
            for (a, b) in full.outputs.iter().zip(&red.outputs) {
                assert!((a - b).abs() <= 1e-10 * ymax.max(1.0), "{a} vs {b}");
            }
            let res = red.residuals.unwrap();
            assert!(res.total.iter().all(|&r| r < 1e-8));
        }
    }

    /// Rotated full-rank bases: `P^T U` is a dense matrix, not the identity.
    #[test]
    fn rotated_full_rank_rom_reproduces_fom() {
        let fom = bar(StimulusProtocol::scroll(), 30);
        let p = Parameter::new(0.003, 20.0);
        let basis = BlockBasis {
            v_phi: orthonormalize(&random(fom.n, fom.n, 41)),
            v_r: orthonormalize(&random(fom.n, fom.n, 42)),
        };
        let u = orthonormalize(&random(fom.n, fom.n, 43));
        let hyper = Hyperreduction::build(u.clone(), fom.n, u, fom.n).unwrap();
        assert_ne!(hyper.p_phi, (0..fom.n).collect::<Vec<_>>());
        let rom = galerkin_project(&fom, &basis, &hyper).unwrap();
        let full = solve_fom(&fom, &p).unwrap();
        let red = solve_rom(&rom, &p).unwrap();
        let ymax = full.outputs.iter().fold(0.0f64, |m, y| m.max(y.abs()));
        for (a, b) in full.outputs.iter().zip(&red.outputs) {
            assert!((a - b).abs() <= 1e-9 * ymax.max(1.0), "{a} vs {b}");
        }
        assert!(red.residuals.unwrap().total.iter().all(|&r| r < 1e-8));
    }
}
