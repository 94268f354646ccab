//! Radial basis function interpolation of scattered parameter data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Kernel {
    /// `r^2 log r` with a linear polynomial tail.
    ThinPlate,
    /// `exp(-(eps r)^2)` with a constant tail.
    Gaussian { shape: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RbfConfig {
    pub kernel: Kernel,
    /// Interpolate `log10` of the (positive) values instead of the values.
    pub log_values: bool,
}

impl Default for RbfConfig {
    fn default() -> Self {
        Self {
            kernel: Kernel::ThinPlate,
            log_values: false,
        }
    }
}

/// Floor applied before taking logarithms.
const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone)]
pub struct RbfSurrogate {
    centers: Vec<Vec<f64>>,
    weights: DVector<f64>,
    tail: DVector<f64>,
    config: RbfConfig,
    lo: Vec<f64>,
    span: Vec<f64>,
}

impl Kernel {
    fn eval(&self, r: f64) -> f64 {
        match *self {
            Kernel::ThinPlate => {
                if r == 0.0 {
                    0.0
                } else {
                    r * r * r.ln()
                }
            }
            Kernel::Gaussian { shape } => (-(shape * r).powi(2)).exp(),
        }
    }

    fn tail_len(&self, dim: usize) -> usize {
        match self {
            Kernel::ThinPlate => dim + 1,
            Kernel::Gaussian { .. } => 1,
        }
    }
}

fn tail_row(x: &[f64], len: usize) -> Vec<f64> {
    let mut row = vec![1.0];
    row.extend_from_slice(&x[..len - 1]);
    row
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fits an interpolant through `(points[i], values[i])`. Coordinates are
/// mapped to the unit box spanned by the centers before the kernel is
/// applied, so parameters of different magnitude weigh alike.
pub fn fit_rbf(points: &[Vec<f64>], values: &[f64], config: RbfConfig) -> Result<RbfSurrogate> {
    let m = points.len();
    if m != values.len() {
        return Err(Error::Dimension(format!("{m} points but {} values", values.len())));
    }
    if m < 2 {
        return Err(Error::InvalidArgument("RBF fit needs at least 2 centers".into()));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::Dimension("centers must share a positive dimension".into()));
    }
    if let Kernel::Gaussian { shape } = config.kernel {
        if !(shape > 0.0) {
            return Err(Error::InvalidArgument(
                "Gaussian shape parameter must be positive".into(),
            ));
        }
    }
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in points {
        for d in 0..dim {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| if h > l { h - l } else { 1.0 })
        .collect();
    let centers: Vec<Vec<f64>> = points
        .iter()
        .map(|p| (0..dim).map(|d| (p[d] - lo[d]) / span[d]).collect())
        .collect();
    for i in 0..m {
        for j in 0..i {
            if distance(&centers[i], &centers[j]) == 0.0 {
                return Err(Error::Interpolation(format!("centers {j} and {i} coincide")));
            }
        }
    }
    let targets: Vec<f64> = if config.log_values {
        values.iter().map(|v| v.max(LOG_FLOOR).log10()).collect()
    } else {
        values.to_vec()
    };

    // the linear tail needs dim + 1 affinely independent centers; fall back
    // to a constant tail when there are too few
    let mut t = config.kernel.tail_len(dim);
    if t > m {
        t = 1;
    }
    let build = |jitter: f64, t: usize| {
        let mut a = DMatrix::zeros(m + t, m + t);
        for i in 0..m {
            for j in 0..m {
                a[(i, j)] = config.kernel.eval(distance(&centers[i], &centers[j]));
            }
            a[(i, i)] += jitter;
            for (k, v) in tail_row(&centers[i], t).into_iter().enumerate() {
                a[(i, m + k)] = v;
                a[(m + k, i)] = v;
            }
        }
        a
    };
    let mut rhs = DVector::zeros(m + t);
    rhs.rows_mut(0, m).copy_from_slice(&targets);

    let mut attempts = vec![(0.0, t)];
    if t > 1 {
        attempts.push((0.0, 1));
    }
    attempts.push((1e-10, 1));
    for (jitter, t) in attempts {
        let a = build(jitter, t);
        let scale = a.amax().max(1.0);
        let mut rhs_t = DVector::zeros(m + t);
        rhs_t.rows_mut(0, m).copy_from(&rhs.rows(0, m));
        let lu = a.clone().lu();
        if let Some(sol) = lu.solve(&rhs_t) {
            let resid = (&a * &sol - &rhs_t).amax();
            if sol.iter().all(|v| v.is_finite()) && resid <= 1e-8 * scale * rhs_t.amax().max(1.0) {
                return Ok(RbfSurrogate {
                    centers,
                    weights: sol.rows(0, m).into_owned(),
                    tail: sol.rows(m, t).into_owned(),
                    config,
                    lo,
                    span,
                });
            }
        }
    }
    Err(Error::Interpolation("interpolation system is singular".into()))
}

impl RbfSurrogate {
    pub fn eval(&self, p: &[f64]) -> f64 {
        let x: Vec<f64> = (0..self.lo.len()).map(|d| (p[d] - self.lo[d]) / self.span[d]).collect();
        let mut s = 0.0;
        for (c, w) in self.centers.iter().zip(self.weights.iter()) {
            s += w * self.config.kernel.eval(distance(&x, c));
        }
        for (k, v) in tail_row(&x, self.tail.len()).into_iter().enumerate() {
            s += self.tail[k] * v;
        }
        if self.config.log_values {
            10f64.powf(s)
        } else {
            s
        }
    }

    pub fn num_centers(&self) -> usize {
        self.centers.len()
    }
}

pub fn eval_rbf(surrogate: &RbfSurrogate, p: &[f64]) -> f64 {
    surrogate.eval(p)
}
