//! Adaptive POD-greedy construction of the reduced model, with and without
//! adaptive refinement of the training set.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{
    build_dual, compute_beta, error_estimate, estimate_rho_bar, output_scaling, EstimatorState, ScalingMode, RHO_MIN,
};
use crate::fom::{FullOrderSystem, Parameter, SolveOptions};
use crate::pod::{ModeSelector, SnapshotCompressor};
use crate::rbf::{fit_rbf, RbfConfig};
use crate::rom::{galerkin_project, BlockBasis, Hyperreduction, ReducedModel};

/// Axis-aligned parameter domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterBox {
    pub gamma: [f64; 2],
    #[serde(default)]
    pub t_s: [f64; 2],
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

impl ParameterBox {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("gamma", self.gamma), ("t_s", self.t_s)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &Parameter) -> bool {
        let tol = |r: [f64; 2]| 1e-12 * r[0].abs().max(r[1].abs()).max(1e-300);
        p.gamma >= self.gamma[0] - tol(self.gamma)
            && p.gamma <= self.gamma[1] + tol(self.gamma)
            && p.t_s >= self.t_s[0] - tol(self.t_s)
            && p.t_s <= self.t_s[1] + tol(self.t_s)
    }

    /// Tensor grid, `t_s` varying fastest.
    pub fn grid(&self, n_gamma: usize, n_ts: usize) -> Vec<Parameter> {
        let ts = linspace(self.t_s[0], self.t_s[1], n_ts);
        linspace(self.gamma[0], self.gamma[1], n_gamma)
            .into_iter()
            .flat_map(|g| ts.iter().map(move |&t| Parameter::new(g, t)))
            .collect()
    }
}

/// Training and test parameters. The fixed-set greedy uses `train`; the adaptive
/// variant starts from the disjoint `coarse` and `fine` parts of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSets {
    pub bounds: ParameterBox,
    pub train: Vec<Parameter>,
    pub test: Vec<Parameter>,
    pub coarse: Vec<Parameter>,
    pub fine: Vec<Parameter>,
}

fn sort_params(v: &mut [Parameter]) {
    v.sort_by(|a, b| a.gamma.total_cmp(&b.gamma).then(a.t_s.total_cmp(&b.t_s)));
}

impl TrainingSets {
    /// Random split of `samples` into train/test, then of train into
    /// coarse/fine. Each part is returned sorted.
    pub fn split(
        bounds: ParameterBox,
        samples: &[Parameter],
        train_fraction: f64,
        coarse_fraction: f64,
        seed: u64,
    ) -> Result<Self> {
        bounds.validate()?;
        for f in [train_fraction, coarse_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::InvalidArgument(format!("split fraction {f} outside [0, 1]")));
            }
        }
        let mut shuffled = samples.to_vec();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (train_fraction * shuffled.len() as f64).round() as usize;
        let test = shuffled.split_off(n_train);
        let n_coarse = (coarse_fraction * shuffled.len() as f64).round() as usize;
        let mut coarse = shuffled[..n_coarse].to_vec();
        let mut fine = shuffled[n_coarse..].to_vec();
        let (mut train, mut test) = (shuffled, test);
        for v in [&mut train, &mut test, &mut coarse, &mut fine] {
            sort_params(v);
        }
        let sets = Self {
            bounds,
            train,
            test,
            coarse,
            fine,
        };
        sets.validate()?;
        Ok(sets)
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        for p in self
            .train
            .iter()
            .chain(&self.test)
            .chain(&self.coarse)
            .chain(&self.fine)
        {
            if !self.bounds.contains(p) {
                return Err(Error::InvalidArgument(format!(
                    "parameter ({}, {}) lies outside the parameter box",
                    p.gamma, p.t_s
                )));
            }
        }
        if self.coarse.iter().any(|c| self.fine.contains(c)) {
            return Err(Error::InvalidArgument("coarse and fine training sets overlap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GreedyConfig {
    pub tol: f64,
    pub c_rb: usize,
    pub c_ei: usize,
    /// Energy tolerances fixing the first-iteration basis sizes.
    pub svd_tol_phi: f64,
    pub svd_tol_r: f64,
    pub n_ei0_phi: usize,
    pub n_ei0_r: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// Dual Krylov basis size.
    pub n_du: usize,
    /// Interpolation modes kept beyond those used by the model, for
    /// estimating the interpolation error.
    pub ei_extra: usize,
    /// Fine samples moved to the coarse set per iteration (adaptive variant).
    pub n_add: usize,
    pub rbf: RbfConfig,
    /// Output scaling reported alongside the estimates.
    pub scaling: ScalingMode,
    /// Compare the scaled rather than the raw estimate against `tol`.
    pub scaled_convergence: bool,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        Self {
            tol: 1e-2,
            c_rb: 1,
            c_ei: 1,
            svd_tol_phi: 0.5,
            svd_tol_r: 0.5,
            n_ei0_phi: 8,
            n_ei0_r: 8,
            max_iterations: 20,
            seed: 0,
            n_du: 20,
            ei_extra: 8,
            n_add: 1,
            rbf: RbfConfig {
                log_values: true,
                ..RbfConfig::default()
            },
            scaling: ScalingMode::MaxAbs,
            scaled_convergence: false,
        }
    }
}

impl GreedyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if self.c_rb == 0 || self.c_ei == 0 {
            return bad("c_rb and c_ei must be positive integers");
        }
        if !(self.svd_tol_phi > 0.0 && self.svd_tol_r > 0.0) {
            return bad("SVD tolerances must be positive");
        }
        if self.n_ei0_phi == 0 || self.n_ei0_r == 0 {
            return bad("initial interpolation sizes must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if self.n_du == 0 {
            return bad("n_du must be positive");
        }
        Ok(())
    }
}

/// `floor(log10(ratio))`, robust against ratios a few ulps below a power of ten.
fn orders(ratio: f64) -> usize {
    (ratio.log10() + 1e-9).floor().max(0.0) as usize
}

/// New reduced-basis vectors for the next iteration and the next
/// interpolation size. Each contribution at or above `tol` grows by at
/// least 1 (RB) or `c_ei` (EI). When only their sum reaches `tol`, the
/// larger contribution gets the minimum growth.
pub fn update_counts(delta_rb: f64, delta_ei: f64, tol: f64, c_rb: usize, c_ei: usize, n_ei: usize) -> (usize, usize) {
    let mut n = 0;
    let mut n_ei_next = n_ei;
    if delta_rb >= tol {
        n = (c_rb * orders(delta_rb / tol)).max(1);
    }
    if delta_ei >= tol {
        n_ei_next += (c_ei * orders(delta_ei / tol)).max(c_ei);
    }
    if n == 0 && n_ei_next == n_ei && delta_rb + delta_ei >= tol {
        if delta_rb >= delta_ei {
            n = 1;
        } else {
            n_ei_next += c_ei;
        }
    }
    (n, n_ei_next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Parameter whose full-order snapshots entered this iteration.
    pub snapshot_parameter: Parameter,
    /// Argmax of the estimate; the next snapshot parameter.
    pub selected: Parameter,
    /// Estimate at `selected`, in the units compared against `tol`.
    pub epsilon: f64,
    pub delta_rb: f64,
    pub delta_ei: f64,
    /// Raw estimate at `selected` divided by `scaling`.
    pub epsilon_scaled: f64,
    pub n_phi: usize,
    pub n_r: usize,
    pub n_ei_phi: usize,
    pub n_ei_r: usize,
    pub rho_bar: f64,
    pub scaling: f64,
    /// Parameters estimated this iteration with their estimates, in the
    /// units of `epsilon`.
    pub evaluated: Vec<Parameter>,
    pub estimates: Vec<f64>,
    /// Coarse set size after adaptation (equals `evaluated.len()` for
    /// the fixed-set algorithm).
    pub coarse_size: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyHistory {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
    pub beta: f64,
    pub dual_size: usize,
    pub dual_residual_norm: f64,
    pub dual_solution_norm: f64,
    pub seconds: f64,
}

impl GreedyHistory {
    /// Estimator state of the returned model.
    pub fn estimator_state(&self) -> Option<EstimatorState> {
        self.records.last().map(|r| EstimatorState {
            beta: self.beta,
            rho_bar: r.rho_bar,
            dual_residual_norm: self.dual_residual_norm,
            dual_solution_norm: self.dual_solution_norm,
        })
    }

    pub fn final_epsilon(&self) -> Option<f64> {
        self.records.last().map(|r| r.epsilon)
    }

    /// Equality ignoring wall-clock times.
    pub fn same_run(&self, other: &Self) -> bool {
        let strip = |h: &Self| {
            let mut h = h.clone();
            h.seconds = 0.0;
            for r in &mut h.records {
                r.seconds = 0.0;
            }
            h
        };
        strip(self) == strip(other)
    }
}

/// Index of the largest value, smallest index on ties. NaN counts as +inf.
fn argmax(values: &[f64]) -> usize {
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    let mut best = 0;
    for i in 1..values.len() {
        if key(values[i]) > key(values[best]) {
            best = i;
        }
    }
    best
}

/// Removes coarse samples estimated below `tol` (never the argmax) and
/// moves the `n_add` fine samples with the largest surrogate error over.
pub fn adapt_training_set(
    coarse: &[Parameter],
    fine: &[Parameter],
    delta_coarse: &[f64],
    delta_fine: &[f64],
    tol: f64,
    n_add: usize,
) -> Result<(Vec<Parameter>, Vec<Parameter>)> {
    if coarse.len() != delta_coarse.len() || fine.len() != delta_fine.len() {
        return Err(Error::Dimension("estimates do not match the training sets".into()));
    }
    if coarse.is_empty() {
        return Err(Error::InvalidArgument("coarse training set is empty".into()));
    }
    let keep = argmax(delta_coarse);
    let mut new_coarse: Vec<Parameter> = coarse
        .iter()
        .zip(delta_coarse)
        .enumerate()
        .filter(|&(i, (_, &d))| i == keep || !(d < tol))
        .map(|(_, (p, _))| *p)
        .collect();
    let mut order: Vec<usize> = (0..fine.len()).collect();
    let key = |v: f64| if v.is_nan() { f64::INFINITY } else { v };
    order.sort_by(|&a, &b| key(delta_fine[b]).total_cmp(&key(delta_fine[a])).then(a.cmp(&b)));
    let moved: Vec<usize> = order.into_iter().take(n_add).collect();
    new_coarse.extend(moved.iter().map(|&i| fine[i]));
    let new_fine = fine
        .iter()
        .enumerate()
        .filter(|(i, _)| !moved.contains(i))
        .map(|(_, p)| *p)
        .collect();
    Ok((new_coarse, new_fine))
}

/// Estimates over `params` divided by `scale`. A failed reduced solve is recorded as
/// an infinite estimate, so that parameter is selected next.
fn estimate_all(rom: &ReducedModel, params: &[Parameter], state: &EstimatorState, scale: f64) -> Vec<(f64, f64, f64)> {
    params
        .par_iter()
        .map(|p| match error_estimate(rom, p, state) {
            Ok(e) => (e.mean / scale, e.mean_rb / scale, e.mean_ei / scale),
            Err(err) => {
                log::warn!("reduced solve failed at ({}, {}): {err}", p.gamma, p.t_s);
                (f64::INFINITY, f64::INFINITY, f64::INFINITY)
            }
        })
        .collect()
}

/// Parameter coordinates that vary across `params`, for the surrogate.
fn active_coordinates(params: &[Parameter]) -> Vec<usize> {
    let coords = |p: &Parameter| [p.gamma, p.t_s];
    (0..2)
        .filter(|&d| params.iter().any(|p| coords(p)[d] != coords(&params[0])[d]))
        .collect()
}

fn coordinates(p: &Parameter, active: &[usize]) -> Vec<f64> {
    let c = [p.gamma, p.t_s];
    active.iter().map(|&d| c[d]).collect()
}

struct Builder<'a> {
    fom: &'a FullOrderSystem,
    config: GreedyConfig,
    basis: BlockBasis,
    comp_phi: SnapshotCompressor,
    comp_r: SnapshotCompressor,
    n_new: usize,
    n_ei_phi: usize,
    n_ei_r: usize,
    rho_bar: Option<f64>,
}

impl<'a> Builder<'a> {
    fn new(fom: &'a FullOrderSystem, config: GreedyConfig) -> Self {
        Self {
            fom,
            config,
            basis: BlockBasis::empty(fom.n),
            comp_phi: SnapshotCompressor::new(),
            comp_r: SnapshotCompressor::new(),
            n_new: 0,
            n_ei_phi: config.n_ei0_phi,
            n_ei_r: config.n_ei0_r,
            rho_bar: None,
        }
    }

    /// Full-order solve at `p`, basis and interpolation update, projection.
    /// Returns the model, its `rho_bar` and the output scaling.
    fn enrich(&mut self, p: &Parameter, first: bool, beta: f64) -> Result<(ReducedModel, f64, f64)> {
        let n = self.fom.n;
        let traj = self.fom.solve(p, SolveOptions::FULL)?;
        let states = traj.states.expect("requested");
        let nonlinear = traj.nonlinear.expect("requested");
        let (sel_phi, sel_r) = if first {
            (
                ModeSelector::Energy(self.config.svd_tol_phi),
                ModeSelector::Energy(self.config.svd_tol_r),
            )
        } else {
            (ModeSelector::Count(self.n_new), ModeSelector::Count(self.n_new))
        };
        self.basis = self.basis.update(&states, sel_phi, sel_r)?;
        if self.basis.n_phi() == 0 || self.basis.n_r() == 0 {
            return Err(Error::InvalidArgument(
                "snapshots at the first greedy parameter span no modes in one block".into(),
            ));
        }
        self.comp_phi.push(&nonlinear.rows(0, n).into_owned());
        self.comp_r.push(&nonlinear.rows(n, n).into_owned());
        let hyper = self.hyperreduction()?;
        let rom = galerkin_project(self.fom, &self.basis, &hyper)?;
        // a reduced model that blows up at its own snapshot parameter keeps
        // the previous rho_bar, or the lower clamp on the first iteration
        let rho = match estimate_rho_bar(&states, &rom, p, beta) {
            Ok(r) => r,
            Err(err @ (Error::Divergence { .. } | Error::Singularity { .. })) => {
                log::warn!("rho_bar unavailable at ({}, {}): {err}", p.gamma, p.t_s);
                self.rho_bar.unwrap_or(RHO_MIN)
            }
            Err(err) => return Err(err),
        };
        self.rho_bar = Some(rho);
        let (scale, _) = output_scaling(&traj.outputs, self.config.scaling)?;
        Ok((rom, rho, scale))
    }

    fn hyperreduction(&mut self) -> Result<Hyperreduction> {
        let (rp, rr) = (self.comp_phi.rank(), self.comp_r.rank());
        if rp == 0 || rr == 0 {
            return Err(Error::HyperreductionBuild(
                "nonlinear snapshots are identically zero".into(),
            ));
        }
        // the interpolation size cannot exceed the snapshot rank
        self.n_ei_phi = self.n_ei_phi.min(rp);
        self.n_ei_r = self.n_ei_r.min(rr);
        let extra = self.config.ei_extra;
        Hyperreduction::build(
            self.comp_phi.modes(self.n_ei_phi + extra),
            self.n_ei_phi,
            self.comp_r.modes(self.n_ei_r + extra),
            self.n_ei_r,
        )
    }

    fn update(&mut self, epsilon: f64, delta_rb: f64, delta_ei: f64) {
        let c = &self.config;
        if !epsilon.is_finite() {
            self.n_new = c.c_rb;
            self.n_ei_phi += c.c_ei;
            self.n_ei_r += c.c_ei;
            return;
        }
        let (n, next) = update_counts(delta_rb, delta_ei, c.tol, c.c_rb, c.c_ei, self.n_ei_phi);
        let grow = next - self.n_ei_phi;
        self.n_new = n;
        self.n_ei_phi += grow;
        self.n_ei_r += grow;
    }
}

fn initial_state(fom: &FullOrderSystem, config: &GreedyConfig) -> Result<(f64, f64, f64)> {
    let dual = build_dual(fom, config.n_du)?;
    if dual.truncated() {
        log::info!(
            "dual Krylov space exhausted after {} of {} vectors",
            dual.basis.ncols(),
            dual.requested
        );
    }
    let beta = compute_beta(fom.factor())?;
    Ok((beta, dual.residual_norm, dual.solution_norm))
}

fn initial_parameter(set: &[Parameter], seed: u64) -> Parameter {
    set[ChaCha8Rng::seed_from_u64(seed).gen_range(0..set.len())]
}

/// Greedy construction over the fixed set `params`.
pub fn run_apodg_ei(
    fom: &FullOrderSystem,
    params: &[Parameter],
    config: &GreedyConfig,
) -> Result<(ReducedModel, GreedyHistory)> {
    run(fom, params, &[], config, false)
}

/// Greedy construction with the coarse set adapted each iteration from
/// surrogate estimates on the fine set.
pub fn run_apodg_ei_adapt(
    fom: &FullOrderSystem,
    sets: &TrainingSets,
    config: &GreedyConfig,
) -> Result<(ReducedModel, GreedyHistory)> {
    sets.validate()?;
    run(fom, &sets.coarse, &sets.fine, config, true)
}

fn run(
    fom: &FullOrderSystem,
    coarse: &[Parameter],
    fine: &[Parameter],
    config: &GreedyConfig,
    adaptive: bool,
) -> Result<(ReducedModel, GreedyHistory)> {
    config.validate()?;
    if coarse.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let start = Instant::now();
    let (beta, dual_res, dual_sol) = initial_state(fom, config)?;
    let mut builder = Builder::new(fom, *config);
    let mut coarse = coarse.to_vec();
    let mut fine = fine.to_vec();
    let mut p_star = initial_parameter(&coarse, config.seed);
    let mut records = Vec::new();
    let mut converged = false;
    let mut last_rom = None;

    for iteration in 1..=config.max_iterations {
        let t0 = Instant::now();
        let (rom, rho_bar, scale) = builder.enrich(&p_star, iteration == 1, beta)?;
        let state = EstimatorState {
            beta,
            rho_bar,
            dual_residual_norm: dual_res,
            dual_solution_norm: dual_sol,
        };
        let unit = if config.scaled_convergence { scale } else { 1.0 };
        let est = estimate_all(&rom, &coarse, &state, unit);
        let totals: Vec<f64> = est.iter().map(|e| e.0).collect();
        let best = argmax(&totals);
        let (epsilon, delta_rb, delta_ei) = est[best];
        let selected = coarse[best];
        let evaluated = coarse.clone();
        converged = epsilon < config.tol;

        if adaptive && !converged && !fine.is_empty() {
            let fine_est = surrogate_estimates(&coarse, &totals, &fine, config)?;
            let (c, f) = adapt_training_set(&coarse, &fine, &totals, &fine_est, config.tol, config.n_add)?;
            coarse = c;
            fine = f;
        }
        records.push(IterationRecord {
            iteration,
            snapshot_parameter: p_star,
            selected,
            epsilon,
            delta_rb,
            delta_ei,
            epsilon_scaled: epsilon * unit / scale,
            n_phi: rom.basis.n_phi(),
            n_r: rom.basis.n_r(),
            n_ei_phi: rom.hyper.m_phi,
            n_ei_r: rom.hyper.m_r,
            rho_bar,
            scaling: scale,
            evaluated,
            estimates: totals,
            coarse_size: coarse.len(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        log::info!(
            "iteration {iteration}: eps = {epsilon:.3e} (rb {delta_rb:.3e}, ei {delta_ei:.3e}), n = {}+{}, n_ei = {}+{}, |Xi| = {}",
            rom.basis.n_phi(),
            rom.basis.n_r(),
            rom.hyper.m_phi,
            rom.hyper.m_r,
            coarse.len()
        );
        last_rom = Some(rom);
        if converged {
            break;
        }
        builder.update(epsilon, delta_rb, delta_ei);
        p_star = selected;
    }
    let history = GreedyHistory {
        records,
        converged,
        beta,
        dual_size: config.n_du,
        dual_residual_norm: dual_res,
        dual_solution_norm: dual_sol,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((last_rom.expect("at least one iteration"), history))
}

/// Surrogate estimates on `fine` from the coarse estimates. Infinite
/// coarse values are left out of the fit; with fewer than two usable
/// centers every fine sample gets the coarse maximum.
fn surrogate_estimates(
    coarse: &[Parameter],
    delta: &[f64],
    fine: &[Parameter],
    config: &GreedyConfig,
) -> Result<Vec<f64>> {
    let usable: Vec<usize> = (0..coarse.len()).filter(|&i| delta[i].is_finite()).collect();
    let all: Vec<Parameter> = coarse.iter().chain(fine).copied().collect();
    let active = active_coordinates(&all);
    let fallback = || vec![delta.iter().copied().fold(f64::NEG_INFINITY, f64::max); fine.len()];
    if usable.len() < 2 || active.is_empty() {
        return Ok(fallback());
    }
    let points: Vec<Vec<f64>> = usable.iter().map(|&i| coordinates(&coarse[i], &active)).collect();
    let values: Vec<f64> = usable.iter().map(|&i| delta[i]).collect();
    match fit_rbf(&points, &values, config.rbf) {
        Ok(s) => Ok(fine.iter().map(|p| s.eval(&coordinates(p, &active))).collect()),
        Err(Error::Interpolation(msg)) => {
            log::warn!("error surrogate unavailable ({msg}); using the coarse maximum");
            Ok(fallback())
        }
        Err(e) => Err(e),
    }
}

/// Convenience for tests and tools: the stacked `[Phi; r]` snapshot matrix.
pub fn snapshot_matrix(fom: &FullOrderSystem, p: &Parameter) -> Result<DMatrix<f64>> {
    Ok(fom.solve(p, SolveOptions::FULL)?.states.expect("requested"))
}
