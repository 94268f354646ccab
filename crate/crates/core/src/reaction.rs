//! Aliev-Panfilov reaction kinetics evaluated at mesh nodes.
//!
//! The transmembrane potential is carried in millivolts (`Phi`) by the
//! discrete system and converted to the dimensionless variable `phi` before
//! the kinetics are evaluated. Rates are returned in the units the
//! discretized system expects:
//!
//! * `f_phi = (beta_phi / beta_t) * [c phi (phi - alpha)(1 - phi) - r phi]` in mV/ms,
//! * `f_r = [gamma + mu1 r / (mu2 + phi)] * [-r - c phi (phi - b - 1)]`, the rate
//!   with respect to dimensionless time; the `beta_t` factor sits on the
//!   mass matrix of the recovery block.
//!
//! Offset convention: the stored `delta_phi` is -80 mV (the resting
//! potential). The transform subtracts it, `phi = (Phi - delta_phi) / beta_phi`,
//! so that rest (-80 mV) maps to 0 and +20 mV maps to 1.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApParameters {
    /// Time scale [ms].
    pub beta_t: f64,
    /// Potential scale [mV].
    pub beta_phi: f64,
    /// Potential offset [mV]; resting potential.
    pub delta_phi: f64,
    pub c: f64,
    pub alpha: f64,
    pub b: f64,
    pub mu1: f64,
    pub mu2: f64,
    /// Repolarization rate, a free parameter.
    pub gamma: f64,
    /// Start of the second stimulus [ms], a free parameter of S1-S2 protocols.
    pub t_s: f64,
}

impl Default for ApParameters {
    fn default() -> Self {
        Self {
            beta_t: 12.9,
            beta_phi: 100.0,
            delta_phi: -80.0,
            c: 8.0,
            alpha: 0.01,
            b: 0.15,
            mu1: 0.2,
            mu2: 0.3,
            gamma: 0.002,
            t_s: 0.0,
        }
    }
}

impl ApParameters {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.beta_t > 0.0, "beta_t must be positive"),
            (self.beta_phi > 0.0, "beta_phi must be positive"),
            (self.mu2 > 0.0, "mu2 must be positive"),
            (self.gamma.is_finite(), "gamma must be finite"),
            (self.t_s.is_finite(), "t_s must be finite"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidArgument(msg.into()));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn phi_of(&self, potential_mv: f64) -> f64 {
        (potential_mv - self.delta_phi) / self.beta_phi
    }

    #[inline]
    pub fn potential_of(&self, phi: f64) -> f64 {
        phi * self.beta_phi + self.delta_phi
    }

    /// Kinetics at a single node: `(f_phi [mV/ms], f_r)`.
    #[inline]
    pub fn rates(&self, phi: f64, r: f64) -> Option<(f64, f64)> {
        let denom = self.mu2 + phi;
        if denom == 0.0 {
            return None;
        }
        let excitation = self.c * phi * (phi - self.alpha) * (1.0 - phi) - r * phi;
        let f_phi = self.beta_phi / self.beta_t * excitation;
        let f_r = (self.gamma + self.mu1 * r / denom) * (-r - self.c * phi * (phi - self.b - 1.0));
        Some((f_phi, f_r))
    }
}

pub fn to_dimensionless(potential: &DVector<f64>, params: &ApParameters) -> DVector<f64> {
    potential.map(|v| params.phi_of(v))
}

pub fn to_physical(phi: &DVector<f64>, params: &ApParameters) -> DVector<f64> {
    phi.map(|v| params.potential_of(v))
}

/// Nodal reaction terms for dimensionless potential `phi` and recovery `r`.
pub fn eval_reaction(phi: &[f64], r: &[f64], params: &ApParameters) -> Result<(DVector<f64>, DVector<f64>)> {
    if phi.len() != r.len() {
        return Err(Error::Dimension(format!(
            "phi has {} entries, r has {}",
            phi.len(),
            r.len()
        )));
    }
    let mut f_phi = DVector::zeros(phi.len());
    let mut f_r = DVector::zeros(phi.len());
    for (i, (&p, &q)) in phi.iter().zip(r).enumerate() {
        let (a, b) = params.rates(p, q).ok_or(Error::Singularity { node: i })?;
        f_phi[i] = a;
        f_r[i] = b;
    }
    Ok((f_phi, f_r))
}
