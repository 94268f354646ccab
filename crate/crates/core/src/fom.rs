//! Full-order coupled system and its first-order IMEX time stepper.
//!
//! State layout: `x = [Phi; r]` with `Phi` in mV and `r` dimensionless, so
//! `x` has length `2N`. One step solves
//!
//! ```text
//! EE x^k = AA x^{k-1} + dt (M_f f(x^{k-1}) + sum_j B_j i_j^k)
//! ```
//!
//! with `E = diag(M, beta_t M)`, `A = diag(S, 0)`, `EE = E - dt A`, `AA = E`
//! and `M_f = diag(M, M)`. Only `EE` is factorized, once per system.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AssembledOperators, LEFT_EDGE, S2_REGION};
use crate::linalg::{CsrMatrix, SparseCholesky};
use crate::reaction::ApParameters;

/// A point of the parameter space: the repolarization rate and the start of
/// the second stimulus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub gamma: f64,
    #[serde(default)]
    pub t_s: f64,
}

impl Parameter {
    pub fn new(gamma: f64, t_s: f64) -> Self {
        Self { gamma, t_s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    None,
    InitialConditionPlanar,
    S1s2Scroll,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StimulusProtocol {
    pub kind: ProtocolKind,
    /// Stimulus amplitude (dimensionless current density).
    pub amplitude: f64,
    /// Duration of the first stimulus, starting at t = 0 [ms].
    pub s1_window: f64,
    /// Duration of the second stimulus, starting at `t_s` [ms].
    pub s2_duration: f64,
    pub s1_set: String,
    pub s2_set: String,
    /// Nodes held at `excited_potential` in the initial state of the planar protocol.
    pub initial_set: String,
    pub rest_potential: f64,
    pub excited_potential: f64,
}

impl Default for StimulusProtocol {
    fn default() -> Self {
        Self {
            kind: ProtocolKind::InitialConditionPlanar,
            amplitude: 10.0,
            s1_window: 10.0,
            s2_duration: 20.0,
            s1_set: LEFT_EDGE.into(),
            s2_set: S2_REGION.into(),
            initial_set: LEFT_EDGE.into(),
            rest_potential: -80.0,
            excited_potential: -10.0,
        }
    }
}

impl StimulusProtocol {
    pub fn planar() -> Self {
        Self::default()
    }

    pub fn scroll() -> Self {
        Self {
            kind: ProtocolKind::S1s2Scroll,
            ..Self::default()
        }
    }

    pub fn none() -> Self {
        Self {
            kind: ProtocolKind::None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s1_window >= 0.0) || !(self.s2_duration >= 0.0) {
            return Err(Error::InvalidArgument("stimulus windows must be non-negative".into()));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::InvalidArgument("stimulus amplitude must be finite".into()));
        }
        Ok(())
    }

    /// Number of input channels the protocol drives.
    pub fn channels(&self) -> usize {
        match self.kind {
            ProtocolKind::S1s2Scroll => 2,
            _ => 0,
        }
    }

    /// Channel amplitudes for step `k >= 1`. A window is active when the
    /// midpoint of `(t_{k-1}, t_k]` falls inside `[start, start + duration)`,
    /// so a window of `m * dt` is active for exactly `m` steps.
    pub fn inputs_at(&self, k: usize, dt: f64, t_s: f64) -> Vec<f64> {
        let mid = (k as f64 - 0.5) * dt;
        let on = |start: f64, dur: f64| mid >= start && mid < start + dur;
        match self.kind {
            ProtocolKind::S1s2Scroll => vec![
                if on(0.0, self.s1_window) { self.amplitude } else { 0.0 },
                if on(t_s, self.s2_duration) { self.amplitude } else { 0.0 },
            ],
            _ => Vec::new(),
        }
    }
}

/// Which reaction term drives the system. `Zero` gives the linear
/// diffusion problem used by tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Nonlinearity {
    AlievPanfilov,
    Zero,
}

#[derive(Debug, Clone)]
pub struct FullOrderSystem {
    /// Number of mesh nodes; the state has length `2 * n`.
    pub n: usize,
    pub dt: f64,
    pub n_steps: usize,
    /// Fixed physics; `gamma` and `t_s` are overridden per parameter.
    pub physics: ApParameters,
    pub protocol: StimulusProtocol,
    pub nonlinearity: Nonlinearity,
    pub mass: CsrMatrix,
    pub stiffness: CsrMatrix,
    pub ee: CsrMatrix,
    pub aa: CsrMatrix,
    pub mf: CsrMatrix,
    /// Stiffness lifted to the coupled state, `A = diag(S, 0)`.
    pub a: CsrMatrix,
    /// Input columns `B_j` of length `2N`.
    pub inputs: Vec<DVector<f64>>,
    /// Output row `C` of length `2N`.
    pub output: DVector<f64>,
    pub x0: DVector<f64>,
    factor: SparseCholesky,
}

pub fn build_fom(
    ops: &AssembledOperators,
    physics: &ApParameters,
    dt: f64,
    n_steps: usize,
    protocol: &StimulusProtocol,
) -> Result<FullOrderSystem> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    physics.validate()?;
    protocol.validate()?;
    ops.check_shapes()?;
    let n = ops.dim();
    let set = |name: &str| -> Result<&Vec<usize>> {
        ops.node_sets
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("protocol references unknown node set '{name}'")))
    };

    let mass = ops.mass.clone();
    let stiffness = ops.stiffness.clone();
    let zero = CsrMatrix::zeros(n, n);
    let e = CsrMatrix::block_diagonal(&mass, &mass.scaled(physics.beta_t));
    let a = CsrMatrix::block_diagonal(&stiffness, &zero);
    let ee = e.linear_combination(1.0, &a, -dt)?;
    let mf = CsrMatrix::block_diagonal(&mass, &mass);
    let factor = SparseCholesky::factorize(&ee)?;

    let masked = |nodes: &[usize]| {
        let mut b = DVector::zeros(2 * n);
        for &i in nodes {
            b[i] = ops.input[i];
        }
        b
    };
    let inputs = match protocol.kind {
        ProtocolKind::S1s2Scroll => vec![masked(set(&protocol.s1_set)?), masked(set(&protocol.s2_set)?)],
        _ => Vec::new(),
    };

    let mut output = DVector::zeros(2 * n);
    output.rows_mut(0, n).copy_from(&ops.output);

    let mut x0 = DVector::zeros(2 * n);
    x0.rows_mut(0, n).fill(protocol.rest_potential);
    if protocol.kind == ProtocolKind::InitialConditionPlanar {
        for &i in set(&protocol.initial_set)? {
            x0[i] = protocol.excited_potential;
        }
    }

    Ok(FullOrderSystem {
        n,
        dt,
        n_steps,
        physics: *physics,
        protocol: protocol.clone(),
        nonlinearity: Nonlinearity::AlievPanfilov,
        mass,
        stiffness,
        ee,
        aa: e,
        mf,
        a,
        inputs,
        output,
        x0,
        factor,
    })
}

/// Full trajectory of one solve. `states` and `nonlinear` are stored column
/// by column when requested.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub parameter: Parameter,
    pub times: Vec<f64>,
    pub outputs: Vec<f64>,
    /// `2N x (N_t + 1)`, column k is `x^k`.
    pub states: Option<DMatrix<f64>>,
    /// `2N x N_t`, column `k - 1` is `f(x^{k-1})` (nodal, before the mass matrix).
    pub nonlinear: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolveOptions {
    pub keep_states: bool,
    pub keep_nonlinear: bool,
}

impl SolveOptions {
    pub const FULL: Self = Self {
        keep_states: true,
        keep_nonlinear: true,
    };
    pub const OUTPUT_ONLY: Self = Self {
        keep_states: false,
        keep_nonlinear: false,
    };
}

impl FullOrderSystem {
    pub fn state_dim(&self) -> usize {
        2 * self.n
    }

    pub fn factor(&self) -> &SparseCholesky {
        &self.factor
    }

    pub fn physics_at(&self, p: &Parameter) -> ApParameters {
        ApParameters {
            gamma: p.gamma,
            t_s: p.t_s,
            ..self.physics
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| k as f64 * self.dt).collect()
    }

    /// Stacked nodal nonlinearity `[f_phi; f_r]` at state `x`.
    pub fn nonlinear_term(&self, x: &DVector<f64>, physics: &ApParameters) -> Result<DVector<f64>> {
        let n = self.n;
        let mut f = DVector::zeros(2 * n);
        if self.nonlinearity == Nonlinearity::Zero {
            return Ok(f);
        }
        for i in 0..n {
            let phi = physics.phi_of(x[i]);
            let (a, b) = physics.rates(phi, x[n + i]).ok_or(Error::Singularity { node: i })?;
            f[i] = a;
            f[n + i] = b;
        }
        Ok(f)
    }

    /// Right-hand side of step `k` given `x^{k-1}` and `f(x^{k-1})`.
    pub fn step_rhs(&self, x_prev: &DVector<f64>, f_prev: &DVector<f64>, k: usize, t_s: f64) -> DVector<f64> {
        let mut rhs = self.aa.mul_vec(x_prev);
        let mf = self.mf.mul_vec(f_prev);
        rhs.axpy(self.dt, &mf, 1.0);
        for (b, amp) in self.inputs.iter().zip(self.protocol.inputs_at(k, self.dt, t_s)) {
            if amp != 0.0 {
                rhs.axpy(self.dt * amp, b, 1.0);
            }
        }
        rhs
    }

    /// One IMEX step from `x^{k-1}` to `x^k`.
    pub fn imex_step(&self, x_prev: &DVector<f64>, k: usize, p: &Parameter) -> Result<DVector<f64>> {
        let physics = self.physics_at(p);
        let f = self.nonlinear_term(x_prev, &physics)?;
        self.advance(x_prev, &f, k, p.t_s)
    }

    fn advance(&self, x_prev: &DVector<f64>, f_prev: &DVector<f64>, k: usize, t_s: f64) -> Result<DVector<f64>> {
        let mut x = self.step_rhs(x_prev, f_prev, k, t_s);
        self.factor.solve_in_place(x.as_mut_slice());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: k });
        }
        Ok(x)
    }

    pub fn output_of(&self, x: &DVector<f64>) -> f64 {
        self.output.dot(x)
    }

    pub fn solve(&self, p: &Parameter, opts: SolveOptions) -> Result<Trajectory> {
        let physics = self.physics_at(p);
        physics.validate()?;
        let nt = self.n_steps;
        let dim = self.state_dim();
        let mut states = opts.keep_states.then(|| {
            let mut m = DMatrix::zeros(dim, nt + 1);
            m.set_column(0, &self.x0);
            m
        });
        let mut nonlinear = opts.keep_nonlinear.then(|| DMatrix::zeros(dim, nt));
        let mut outputs = Vec::with_capacity(nt + 1);
        let mut x = self.x0.clone();
        outputs.push(self.output_of(&x));
        for k in 1..=nt {
            let f = self.nonlinear_term(&x, &physics)?;
            x = self.advance(&x, &f, k, p.t_s)?;
            outputs.push(self.output_of(&x));
            if let Some(s) = states.as_mut() {
                s.set_column(k, &x);
            }
            if let Some(g) = nonlinear.as_mut() {
                g.set_column(k - 1, &f);
            }
        }
        Ok(Trajectory {
            parameter: *p,
            times: self.times(),
            outputs,
            states,
            nonlinear,
        })
    }
}

/// Full march recording states and nonlinear snapshots.
pub fn solve_fom(sys: &FullOrderSystem, p: &Parameter) -> Result<Trajectory> {
    sys.solve(p, SolveOptions::FULL)
}
