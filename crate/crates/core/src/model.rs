//! Data model of the functional convolution model and its forward map.
//!
//! Each observation `i` carries a response curve `y_i` and `p` covariate
//! curves `x_ij` on a shared grid over `[0, T_i]`, plus `d` scalar
//! covariates. The prediction at time `t` is
//!
//! ```text
//! beta_00 + sum_k beta_0k z_ik + sum_j  int_0^{alpha_j} beta_j(u) x_ij(t - u) du
//! ```
//!
//! evaluated only on grid points `t` in `[alpha*, T_i]`, `alpha* = max_j alpha_j`,
//! so every window lies inside the observed domain. The `u`-integral uses
//! trapezoid weights including the halved endpoints at `u = 0` and
//! `u = alpha_j`; these weights fix the exact discrete normal equations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FcmError, Result};
use crate::grids::{steps_in, trapezoid_sum, trapezoid_weights, GridFunction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub y: GridFunction,
    pub x: Vec<GridFunction>,
    #[serde(default)]
    pub z: Vec<f64>,
}

impl Observation {
    pub fn new(y: GridFunction, x: Vec<GridFunction>, z: Vec<f64>) -> Self {
        Observation { y, x, z }
    }

    /// Domain length `T_i`.
    pub fn domain_length(&self) -> f64 {
        self.y.domain_length()
    }

    pub fn grid_len(&self) -> usize {
        self.y.len()
    }
}

/// A validated set of observations sharing one grid step and a set of lags.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    observations: Vec<Observation>,
    lags: Vec<f64>,
    step: f64,
    lag_steps: Vec<usize>,
}

impl Design {
    pub fn new(observations: Vec<Observation>, lags: Vec<f64>, step: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(FcmError::InvalidArgument(format!(
                "design step must be positive, got {step}"
            )));
        }
        if observations.is_empty() {
            return Err(FcmError::Shape("design has no observations".into()));
        }
        let mut lag_steps = Vec::with_capacity(lags.len());
        for (j, &alpha) in lags.iter().enumerate() {
            if !(alpha > 0.0) {
                return Err(FcmError::InvalidArgument(format!(
                    "lag {j} must be positive, got {alpha}"
                )));
            }
            lag_steps.push(steps_in(alpha, step).map_err(|e| {
                FcmError::InvalidArgument(format!("lag {j}: {e}"))
            })?);
        }
        let max_lag = lag_steps.iter().copied().max().unwrap_or(0);
        let p = lags.len();
        let d = observations[0].z.len();
        for (i, obs) in observations.iter().enumerate() {
            let y = &obs.y;
            if y.start() != 0.0 || y.step() != step {
                return Err(FcmError::GridMismatch(format!(
                    "observation {i}: response grid (start {}, step {}) must start at 0 with step {step}",
                    y.start(),
                    y.step()
                )));
            }
            if obs.x.len() != p {
                return Err(FcmError::Shape(format!(
                    "observation {i}: {} covariate curves, expected {p}",
                    obs.x.len()
                )));
            }
            for (j, x) in obs.x.iter().enumerate() {
                x.check_combinable(y).map_err(|e| {
                    FcmError::GridMismatch(format!("observation {i}, covariate {j}: {e}"))
                })?;
            }
            if obs.z.len() != d {
                return Err(FcmError::Shape(format!(
                    "observation {i}: {} scalar covariates, expected {d}",
                    obs.z.len()
                )));
            }
            if y.len() < max_lag + 2 {
                return Err(FcmError::DegenerateDomain(format!(
                    "observation {i}: domain length {} leaves fewer than 2 grid points in [alpha*, T]",
                    y.domain_length()
                )));
            }
        }
        Ok(Design {
            observations,
            lags,
            step,
            lag_steps,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn observation(&self, i: usize) -> Result<&Observation> {
        self.observations.get(i).ok_or(FcmError::IndexOutOfRange {
            index: i,
            len: self.observations.len(),
        })
    }

    pub fn lags(&self) -> &[f64] {
        &self.lags
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// `alpha_j / step`.
    pub fn lag_steps(&self) -> &[usize] {
        &self.lag_steps
    }

    /// `alpha* / step`: index of the first grid point with a full window.
    pub fn first_index(&self) -> usize {
        self.lag_steps.iter().copied().max().unwrap_or(0)
    }

    pub fn alpha_star(&self) -> f64 {
        self.first_index() as f64 * self.step
    }

    pub fn n_obs(&self) -> usize {
        self.observations.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.lags.len()
    }

    pub fn n_scalars(&self) -> usize {
        self.observations[0].z.len()
    }

    pub fn layout(&self) -> CoefficientLayout {
        CoefficientLayout::new(
            self.n_scalars(),
            self.lag_steps.iter().map(|&l| l + 1).collect(),
            self.step,
        )
    }

    /// Replaces the observations, keeping lags and step; revalidates.
    pub fn with_observations(&self, observations: Vec<Observation>) -> Result<Design> {
        Design::new(observations, self.lags.clone(), self.step)
    }

    pub fn into_observations(self) -> Vec<Observation> {
        self.observations
    }
}

/// Intercept, scalar coefficients and one lag kernel per covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    /// `[beta_00, beta_01, .., beta_0d]`.
    pub beta0: Vec<f64>,
    /// `beta_j` on `[0, alpha_j]`.
    pub betas: Vec<GridFunction>,
}

impl CoefficientSet {
    pub fn zeros(design: &Design) -> CoefficientSet {
        design.layout().unpack(&vec![0.0; design.layout().dim()])
    }

    pub fn check_conformal(&self, design: &Design) -> Result<()> {
        if self.beta0.len() != design.n_scalars() + 1 {
            return Err(FcmError::Shape(format!(
                "{} intercept/scalar coefficients, design needs {}",
                self.beta0.len(),
                design.n_scalars() + 1
            )));
        }
        if self.betas.len() != design.n_covariates() {
            return Err(FcmError::Shape(format!(
                "{} coefficient functions, design has {} covariates",
                self.betas.len(),
                design.n_covariates()
            )));
        }
        for (j, (beta, &l)) in self.betas.iter().zip(design.lag_steps()).enumerate() {
            if beta.start() != 0.0 || beta.step() != design.step() || beta.len() != l + 1 {
                return Err(FcmError::GridMismatch(format!(
                    "beta_{j}: grid (start {}, step {}, len {}) must cover [0, {}] with step {}",
                    beta.start(),
                    beta.step(),
                    beta.len(),
                    design.lags()[j],
                    design.step()
                )));
            }
        }
        Ok(())
    }

    /// `a * self + b * other`, componentwise.
    pub fn axpby(&self, a: f64, other: &CoefficientSet, b: f64) -> Result<CoefficientSet> {
        if self.beta0.len() != other.beta0.len() || self.betas.len() != other.betas.len() {
            return Err(FcmError::Shape("coefficient sets differ in shape".into()));
        }
        Ok(CoefficientSet {
            beta0: self
                .beta0
                .iter()
                .zip(&other.beta0)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            betas: self
                .betas
                .iter()
                .zip(&other.betas)
                .map(|(f, g)| f.axpby(a, g, b))
                .collect::<Result<_>>()?,
        })
    }

    pub fn scale(&self, s: f64) -> CoefficientSet {
        CoefficientSet {
            beta0: self.beta0.iter().map(|v| s * v).collect(),
            betas: self.betas.iter().map(|b| b.scale(s)).collect(),
        }
    }

    /// Copy with the intercept and scalar coefficients set to zero.
    pub fn covariate_part(&self) -> CoefficientSet {
        CoefficientSet {
            beta0: vec![0.0; self.beta0.len()],
            betas: self.betas.clone(),
        }
    }

    /// Quadrature-weighted norm over the coefficient functions only.
    pub fn covariate_norm(&self) -> f64 {
        self.betas
            .iter()
            .map(|b| {
                let sq: Vec<f64> = b.values().iter().map(|v| v * v).collect();
                trapezoid_sum(&sq, b.step())
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Relative discrete L² distance of the coefficient functions,
    /// `||self - truth|| / ||truth||`.
    pub fn relative_l2_error(&self, truth: &CoefficientSet) -> Result<f64> {
        let diff = self.axpby(1.0, truth, -1.0)?;
        Ok(diff.covariate_norm() / truth.covariate_norm())
    }
}

/// Which part of the coefficient vector a row belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Block {
    Intercept,
    Scalar(usize),
    Covariate(usize),
}

/// Flat packing of a [`CoefficientSet`]: `[beta_00, beta_01..beta_0d, beta_1(u_0..), .., beta_p(..)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientLayout {
    n_scalars: usize,
    block_lens: Vec<usize>,
    step: f64,
}

impl CoefficientLayout {
    pub fn new(n_scalars: usize, block_lens: Vec<usize>, step: f64) -> Self {
        CoefficientLayout {
            n_scalars,
            block_lens,
            step,
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.n_scalars
    }

    pub fn block_lens(&self) -> &[usize] {
        &self.block_lens
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Length of the intercept/scalar block.
    pub fn scalar_dim(&self) -> usize {
        self.n_scalars + 1
    }

    pub fn dim(&self) -> usize {
        self.scalar_dim() + self.block_lens.iter().sum::<usize>()
    }

    pub fn covariate_dim(&self) -> usize {
        self.dim() - self.scalar_dim()
    }

    pub fn block_offset(&self, j: usize) -> usize {
        self.scalar_dim() + self.block_lens[..j].iter().sum::<usize>()
    }

    /// Row of `(block, grid index)` in the packed vector.
    pub fn index(&self, block: Block, q: usize) -> usize {
        match block {
            Block::Intercept => 0,
            Block::Scalar(k) => 1 + k,
            Block::Covariate(j) => self.block_offset(j) + q,
        }
    }

    /// Inverse of [`CoefficientLayout::index`].
    pub fn block_of(&self, row: usize) -> (Block, usize) {
        if row == 0 {
            return (Block::Intercept, 0);
        }
        if row < self.scalar_dim() {
            return (Block::Scalar(row - 1), 0);
        }
        let mut r = row - self.scalar_dim();
        for (j, &len) in self.block_lens.iter().enumerate() {
            if r < len {
                return (Block::Covariate(j), r);
            }
            r -= len;
        }
        panic!("row {row} outside layout of dimension {}", self.dim());
    }

    /// Quadrature weights of the discrete inner product: 1 on the scalar
    /// block, trapezoid weights on each coefficient function.
    pub fn weights(&self) -> Vec<f64> {
        let mut w = vec![1.0; self.scalar_dim()];
        for &len in &self.block_lens {
            w.extend(trapezoid_weights(len, self.step));
        }
        w
    }

    pub fn pack(&self, coef: &CoefficientSet) -> Result<Vec<f64>> {
        if coef.beta0.len() != self.scalar_dim() || coef.betas.len() != self.block_lens.len() {
            return Err(FcmError::Shape("coefficient set does not match layout".into()));
        }
        let mut v = coef.beta0.clone();
        for (b, &len) in coef.betas.iter().zip(&self.block_lens) {
            if b.len() != len {
                return Err(FcmError::Shape(format!(
                    "coefficient function has {} samples, layout expects {len}",
                    b.len()
                )));
            }
            v.extend_from_slice(b.values());
        }
        Ok(v)
    }

    pub fn unpack(&self, v: &[f64]) -> CoefficientSet {
        assert_eq!(v.len(), self.dim(), "vector length does not match layout");
        let beta0 = v[..self.scalar_dim()].to_vec();
        let mut betas = Vec::with_capacity(self.block_lens.len());
        let mut off = self.scalar_dim();
        for &len in &self.block_lens {
            betas.push(
                GridFunction::new(0.0, self.step, v[off..off + len].to_vec())
                    .expect("layout blocks are non-empty"),
            );
            off += len;
        }
        CoefficientSet { beta0, betas }
    }
}

/// `sum_q w_q beta_q x_{m-q}` for `m = first, .., x.len()-1`. Summation runs
/// over `q` ascending; every forward-model route shares this order.
pub(crate) fn convolve_samples(x: &[f64], beta: &[f64], weights: &[f64], first: usize) -> Vec<f64> {
    debug_assert!(first + 1 >= beta.len());
    (first..x.len())
        .map(|m| {
            let mut acc = 0.0;
            for q in 0..beta.len() {
                acc += weights[q] * beta[q] * x[m - q];
            }
            acc
        })
        .collect()
}

/// `c(t) = int_0^alpha beta(u) x(t - u) du` on the grid points `t` in
/// `[alpha, T]`, by the trapezoid rule in `u`.
pub fn lag_convolve(x: &GridFunction, beta: &GridFunction, alpha: f64) -> Result<GridFunction> {
    let l = steps_in(alpha, x.step())?;
    if beta.step() != x.step() || beta.start() != 0.0 || beta.len() != l + 1 {
        return Err(FcmError::GridMismatch(format!(
            "kernel grid (start {}, step {}, len {}) must cover [0, {alpha}] with step {}",
            beta.start(),
            beta.step(),
            beta.len(),
            x.step()
        )));
    }
    if x.len() < l + 1 {
        return Err(FcmError::Domain(format!(
            "covariate domain {} shorter than lag {alpha}",
            x.domain_length()
        )));
    }
    let w = trapezoid_weights(l + 1, x.step());
    let values = convolve_samples(x.values(), beta.values(), &w, l);
    GridFunction::new(x.time(l), x.step(), values)
}

/// Prediction samples on `[alpha*, T_i]` without validation.
pub(crate) fn predict_samples(design: &Design, coef: &CoefficientSet, i: usize) -> Vec<f64> {
    let obs = &design.observations()[i];
    let first = design.first_index();
    let offset: f64 = coef.beta0[0]
        + coef.beta0[1..]
            .iter()
            .zip(&obs.z)
            .map(|(b, z)| b * z)
            .sum::<f64>();
    let mut out = vec![offset; obs.grid_len() - first];
    for (j, x) in obs.x.iter().enumerate() {
        let beta = coef.betas[j].values();
        let w = trapezoid_weights(beta.len(), design.step());
        let c = convolve_samples(x.values(), beta, &w, first);
        for (o, v) in out.iter_mut().zip(c) {
            *o += v;
        }
    }
    out
}

pub fn predict(design: &Design, coef: &CoefficientSet, i: usize) -> Result<GridFunction> {
    design.observation(i)?;
    coef.check_conformal(design)?;
    GridFunction::new(
        design.alpha_star(),
        design.step(),
        predict_samples(design, coef, i),
    )
}

/// Residual sum of squares `sum_i int_{alpha*}^{T_i} (y_i - prediction)^2 dt`.
///
/// Observation terms are computed in parallel and summed in index order.
pub fn sse(design: &Design, coef: &CoefficientSet) -> Result<f64> {
    coef.check_conformal(design)?;
    let first = design.first_index();
    let terms: Vec<f64> = (0..design.n_obs())
        .into_par_iter()
        .map(|i| {
            let pred = predict_samples(design, coef, i);
            let y = &design.observations()[i].y.values()[first..];
            let sq: Vec<f64> = y.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).collect();
            trapezoid_sum(&sq, design.step())
        })
        .collect();
    Ok(terms.iter().sum())
}

/// `sum_i int_{alpha*}^{T_i} y_i^2 dt`, the SSE of the zero coefficient set.
pub fn response_energy(design: &Design) -> f64 {
    let first = design.first_index();
    design
        .observations()
        .iter()
        .map(|o| {
            let sq: Vec<f64> = o.y.values()[first..].iter().map(|v| v * v).collect();
            trapezoid_sum(&sq, design.step())
        })
        .sum()
}
