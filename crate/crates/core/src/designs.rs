//! Synthetic covariates, coefficient functions and simulated designs.
//!
//! Every generator is a pure function of its spec and seed. Covariates are
//! defined as functions of continuous time, so the same curve can be sampled
//! on a fine reference grid and thinned (see [`SimulationSpec::oversample`]).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FcmError, Result};
use crate::grids::{steps_in, trapezoid_sum, trapezoid_weights, GridFunction, GRID_MULTIPLE_TOL};
use crate::model::{self, CoefficientSet, Design, Observation};

fn default_terms() -> usize {
    8
}

/// One term `c t^m e^{a t} sin(b t + d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelfSimilarTerm {
    pub c: f64,
    #[serde(default)]
    pub m: u32,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub d: f64,
}

impl SelfSimilarTerm {
    pub fn eval(&self, t: f64) -> f64 {
        self.c * t.powi(self.m as i32) * (self.a * t).exp() * (self.b * t + self.d).sin()
    }

    /// Dimension of the shift-invariant span of this term: `m + 1` for a real
    /// exponential, `2 (m + 1)` when oscillating.
    pub fn order(&self) -> usize {
        if self.c == 0.0 {
            0
        } else if self.b == 0.0 {
            // sin(d) is a constant factor; the term is zero when it vanishes
            if self.d.sin() == 0.0 {
                0
            } else {
                self.m as usize + 1
            }
        } else {
            2 * (self.m as usize + 1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateKind {
    /// `sum_{k=1..terms} 2^-k sin(2 k pi t)`.
    SinusoidRich {
        #[serde(default = "default_terms")]
        terms: usize,
    },
    /// `sum_{k=1..terms} 2^-4k sin(4 k pi t)`: orthogonal to every odd
    /// frequency `sin(2 pi (2j - 1) t)` on integer-length windows.
    OrthogonalCounterexample {
        #[serde(default = "default_terms")]
        terms: usize,
    },
    /// Finite sum of [`SelfSimilarTerm`]s.
    SelfSimilar { components: Vec<SelfSimilarTerm> },
    /// Random spectral synthesis: `modes` cosines with frequencies uniform on
    /// `(0, max_frequency)` and first-order low-pass amplitudes
    /// `1 / sqrt(1 + (w / bandwidth)^2)`. The frequency cutoff defaults to the
    /// grid Nyquist frequency `pi / step`.
    FilteredNoise {
        bandwidth: f64,
        #[serde(default = "default_modes")]
        modes: usize,
        #[serde(default)]
        max_frequency: Option<f64>,
    },
}

fn default_modes() -> usize {
    400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(flatten)]
    pub kind: CovariateKind,
    /// Domain length `T`; the curve lives on `[0, T]`.
    pub domain_length: f64,
    pub step: f64,
    #[serde(default)]
    pub seed: u64,
}

/// A covariate as a function of continuous time.
pub struct CovariateFn(Box<dyn Fn(f64) -> f64 + Send + Sync>);

impl CovariateFn {
    pub fn eval(&self, t: f64) -> f64 {
        (self.0)(t)
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(FcmError::InvalidArgument(format!(
                "generator step must be positive, got {}",
                self.step
            )));
        }
        let n = steps_in(self.domain_length, self.step)?;
        if n < 1 {
            return Err(FcmError::DegenerateDomain(format!(
                "domain length {} is shorter than one step",
                self.domain_length
            )));
        }
        match &self.kind {
            CovariateKind::SinusoidRich { terms } if *terms == 0 => {
                Err(FcmError::InvalidArgument("sinusoid_rich needs terms >= 1".into()))
            }
            CovariateKind::OrthogonalCounterexample { terms } => {
                if *terms == 0 {
                    return Err(FcmError::InvalidArgument(
                        "orthogonal_counterexample needs terms >= 1".into(),
                    ));
                }
                let t = self.domain_length;
                if (t - t.round()).abs() > GRID_MULTIPLE_TOL * t.max(1.0) {
                    return Err(FcmError::Domain(format!(
                        "orthogonal_counterexample needs an integer-length domain, got {t}"
                    )));
                }
                Ok(())
            }
            CovariateKind::SelfSimilar { components } => {
                if components
                    .iter()
                    .any(|c| !(c.c.is_finite() && c.a.is_finite() && c.b.is_finite() && c.d.is_finite()))
                {
                    return Err(FcmError::InvalidArgument(
                        "self_similar parameters must be finite".into(),
                    ));
                }
                Ok(())
            }
            CovariateKind::FilteredNoise {
                bandwidth,
                modes,
                max_frequency,
            } => {
                if !(*bandwidth > 0.0) || *modes == 0 {
                    return Err(FcmError::InvalidArgument(
                        "filtered_noise needs bandwidth > 0 and modes >= 1".into(),
                    ));
                }
                if let Some(w) = max_frequency {
                    if !(*w > 0.0) {
                        return Err(FcmError::InvalidArgument(format!(
                            "filtered_noise max_frequency must be positive, got {w}"
                        )));
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Continuous-time form of the covariate (randomness drawn from `seed`).
    pub fn function(&self) -> Result<CovariateFn> {
        self.validate()?;
        Ok(CovariateFn(match self.kind.clone() {
            CovariateKind::SinusoidRich { terms } => Box::new(move |t| {
                (1..=terms)
                    .map(|k| 0.5f64.powi(k as i32) * (2.0 * k as f64 * PI * t).sin())
                    .sum()
            }),
            CovariateKind::OrthogonalCounterexample { terms } => Box::new(move |t| {
                (1..=terms)
                    .map(|k| 2f64.powi(-4 * k as i32) * (4.0 * k as f64 * PI * t).sin())
                    .sum()
            }),
            CovariateKind::SelfSimilar { components } => {
                Box::new(move |t| components.iter().map(|c| c.eval(t)).sum())
            }
            CovariateKind::FilteredNoise {
                bandwidth,
                modes,
                max_frequency,
            } => {
                let cutoff = max_frequency.unwrap_or(PI / self.step);
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let norm = (2.0 / modes as f64).sqrt();
                let terms: Vec<(f64, f64, f64)> = (0..modes)
                    .map(|_| {
                        let w = rng.random_range(0.0..cutoff);
                        let phase = rng.random_range(0.0..2.0 * PI);
                        let amp = norm / (1.0 + (w / bandwidth).powi(2)).sqrt();
                        (w, phase, amp)
                    })
                    .collect();
                Box::new(move |t| terms.iter().map(|(w, p, a)| a * (w * t + p).cos()).sum())
            }
        }))
    }

    /// Analytic dimension of the shift-invariant span for self-similar specs.
    pub fn analytic_order(&self) -> Option<usize> {
        match &self.kind {
            CovariateKind::SelfSimilar { components } => {
                Some(components.iter().map(SelfSimilarTerm::order).sum())
            }
            _ => None,
        }
    }
}

/// Samples the covariate on `[0, T]`.
pub fn gen_covariate(spec: &GeneratorSpec) -> Result<GridFunction> {
    let f = spec.function()?;
    sample(&f, spec.domain_length, spec.step)
}

fn sample(f: &CovariateFn, domain_length: f64, step: f64) -> Result<GridFunction> {
    let n = steps_in(domain_length, step)?;
    GridFunction::from_fn(0.0, step, n + 1, |t| f.eval(t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Ar1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub sd: f64,
    /// Per-grid-step autocorrelation of the AR(1) process.
    #[serde(default)]
    pub ar_coefficient: f64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec {
            kind: NoiseKind::White,
            sd: 0.0,
            ar_coefficient: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sd >= 0.0 && self.sd.is_finite()) {
            return Err(FcmError::InvalidArgument(format!(
                "noise sd must be non-negative, got {}",
                self.sd
            )));
        }
        if !(self.ar_coefficient.abs() < 1.0) {
            return Err(FcmError::InvalidArgument(format!(
                "AR(1) coefficient must lie in (-1, 1), got {}",
                self.ar_coefficient
            )));
        }
        Ok(())
    }

    /// Stationary sample path of length `n` with marginal sd `sd`.
    pub fn sample(&self, rng: &mut impl Rng, n: usize) -> Vec<f64> {
        let mut draw = || -> f64 { StandardNormal.sample(rng) };
        match self.kind {
            NoiseKind::White => (0..n).map(|_| self.sd * draw()).collect(),
            NoiseKind::Ar1 => {
                let phi = self.ar_coefficient;
                let innovation = self.sd * (1.0 - phi * phi).sqrt();
                let mut out = Vec::with_capacity(n);
                let mut e = self.sd * draw();
                for _ in 0..n {
                    out.push(e);
                    e = phi * e + innovation * draw();
                }
                out
            }
        }
    }
}

const NOISE_STREAM: u64 = 1;
const SCALAR_STREAM: u64 = 2;

fn observation_rng(seed: u64, i: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
    rng.set_stream(stream);
    rng
}

/// Covariate specs with the per-observation seed `seed + i`.
fn for_observation(spec: &GeneratorSpec, i: usize) -> GeneratorSpec {
    GeneratorSpec {
        seed: spec.seed.wrapping_add(i as u64),
        ..spec.clone()
    }
}

/// Response curve over the whole domain: the exact forward model on
/// `[alpha*, T]`, and the truncated windows before `alpha*` (those samples
/// never enter the fit).
fn noiseless_response(design: &Design, coef: &CoefficientSet, i: usize) -> Vec<f64> {
    let obs = &design.observations()[i];
    let first = design.first_index();
    let offset = coef.beta0[0]
        + coef.beta0[1..].iter().zip(&obs.z).map(|(b, z)| b * z).sum::<f64>();
    let mut y = vec![offset; obs.grid_len()];
    for (m, v) in y.iter_mut().enumerate().take(first) {
        for (j, x) in obs.x.iter().enumerate() {
            let beta = coef.betas[j].values();
            let w = trapezoid_weights(beta.len(), design.step());
            for q in 0..beta.len().min(m + 1) {
                *v += w[q] * beta[q] * x.values()[m - q];
            }
        }
    }
    y[first..].copy_from_slice(&model::predict_samples(design, coef, i));
    y
}

/// Simulates `n` observations `y_i = prediction(beta_true) + noise`. Lags are
/// read off the kernels of `beta_true`; scalar covariates are standard normal.
/// Randomness for observation `i` comes from seeds `seed + i` (noise, scalars)
/// and `spec.seed + i` (covariates).
pub fn gen_design(
    cov_specs: &[GeneratorSpec],
    beta_true: &CoefficientSet,
    noise: &NoiseSpec,
    n: usize,
    seed: u64,
) -> Result<(Design, CoefficientSet)> {
    let functions = (0..n)
        .map(|i| {
            cov_specs
                .iter()
                .map(|s| for_observation(s, i).function())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let (domain_length, step) = common_grid(cov_specs)?;
    simulate_from(&functions, domain_length, step, 1, beta_true, noise, seed)
}

fn common_grid(cov_specs: &[GeneratorSpec]) -> Result<(f64, f64)> {
    let first = cov_specs
        .first()
        .ok_or_else(|| FcmError::Shape("at least one covariate spec is required".into()))?;
    for (j, s) in cov_specs.iter().enumerate() {
        if s.step != first.step || s.domain_length != first.domain_length {
            return Err(FcmError::GridMismatch(format!(
                "covariate {j}: grid (T = {}, step {}) differs from covariate 0 (T = {}, step {})",
                s.domain_length, s.step, first.domain_length, first.step
            )));
        }
    }
    Ok((first.domain_length, first.step))
}

/// Core simulator: covariates are sampled at `step / oversample`, the
/// response is computed there, and every curve is thinned back to `step`.
/// `beta_true` must live on the fine grid.
fn simulate_from(
    functions: &[Vec<CovariateFn>],
    domain_length: f64,
    step: f64,
    oversample: usize,
    beta_fine: &CoefficientSet,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<(Design, CoefficientSet)> {
    noise.validate()?;
    let n = functions.len();
    if n == 0 {
        return Err(FcmError::Shape("need at least one observation".into()));
    }
    let p = functions[0].len();
    if beta_fine.betas.len() != p {
        return Err(FcmError::Shape(format!(
            "{} kernels for {p} covariate specs",
            beta_fine.betas.len()
        )));
    }
    if beta_fine.beta0.is_empty() {
        return Err(FcmError::Shape("coefficient set has no intercept".into()));
    }
    let fine_step = step / oversample as f64;
    for (j, b) in beta_fine.betas.iter().enumerate() {
        if b.start() != 0.0 || (b.step() - fine_step).abs() > GRID_MULTIPLE_TOL * fine_step {
            return Err(FcmError::GridMismatch(format!(
                "kernel {j} must start at 0 with step {fine_step}"
            )));
        }
    }
    let d = beta_fine.beta0.len() - 1;
    let lags: Vec<f64> = beta_fine.betas.iter().map(|b| b.domain_length()).collect();

    let observations: Vec<Observation> = functions
        .par_iter()
        .enumerate()
        .map(|(i, fs)| {
            let x = fs
                .iter()
                .map(|f| sample(f, domain_length, fine_step))
                .collect::<Result<Vec<_>>>()?;
            let mut zrng = observation_rng(seed, i, SCALAR_STREAM);
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut zrng)).collect();
            let y = GridFunction::zeros(0.0, fine_step, x[0].len())?;
            Ok(Observation::new(y, x, z))
        })
        .collect::<Result<_>>()?;
    let proto = Design::new(observations, lags.clone(), fine_step)?;
    beta_fine.check_conformal(&proto)?;

    let observations: Vec<Observation> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut y = noiseless_response(&proto, beta_fine, i);
            let mut rng = observation_rng(seed, i, NOISE_STREAM);
            if noise.sd > 0.0 {
                // noise is drawn on the output grid so its law does not depend on oversampling
                let e = noise.sample(&mut rng, (y.len() - 1) / oversample + 1);
                for (k, v) in e.iter().enumerate() {
                    y[k * oversample] += v;
                }
            }
            let o = &proto.observations()[i];
            let y = GridFunction::new(0.0, fine_step, y)?;
            Ok(Observation::new(y, o.x.clone(), o.z.clone()))
        })
        .collect::<Result<_>>()?;
    let fine = proto.with_observations(observations)?;
    if oversample == 1 {
        return Ok((fine, beta_fine.clone()));
    }
    Ok((subsample(&fine, oversample)?, thin_coefficients(beta_fine, oversample)?))
}

/// Keeps every `factor`-th grid point of every curve.
pub fn subsample(design: &Design, factor: usize) -> Result<Design> {
    let observations = design
        .observations()
        .iter()
        .map(|o| {
            Ok(Observation::new(
                o.y.thin(factor)?,
                o.x.iter().map(|x| x.thin(factor)).collect::<Result<_>>()?,
                o.z.clone(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let step = observations[0].y.step();
    Design::new(observations, design.lags().to_vec(), step)
}

pub fn thin_coefficients(coef: &CoefficientSet, factor: usize) -> Result<CoefficientSet> {
    Ok(CoefficientSet {
        beta0: coef.beta0.clone(),
        betas: coef.betas.iter().map(|b| b.thin(factor)).collect::<Result<_>>()?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// Center `y` and `x`, keep scalar covariates.
    #[default]
    Keep,
    /// Center `y` and `x` and drop scalar covariates, as in the simplified
    /// model without scalar terms.
    Report,
}

/// Subtracts from each `y_i` its time average over `[alpha*, T_i]` and from
/// each covariate the across-observation mean curve (at each grid time, over
/// the observations whose domain reaches it).
pub fn center(design: &Design, mode: CenterMode) -> Result<Design> {
    let first = design.first_index();
    let step = design.step();
    let p = design.n_covariates();
    let max_len = design.observations().iter().map(|o| o.grid_len()).max().unwrap_or(0);
    let mut mean = vec![vec![0.0; max_len]; p];
    let mut count = vec![0usize; max_len];
    for o in design.observations() {
        for c in count.iter_mut().take(o.grid_len()) {
            *c += 1;
        }
        for (j, x) in o.x.iter().enumerate() {
            for (m, v) in x.values().iter().enumerate() {
                mean[j][m] += v;
            }
        }
    }
    for row in &mut mean {
        for (v, &c) in row.iter_mut().zip(&count) {
            *v /= c as f64;
        }
    }
    let observations = design
        .observations()
        .iter()
        .map(|o| {
            let tail = &o.y.values()[first..];
            let y_mean = trapezoid_sum(tail, step) / (step * (tail.len() - 1) as f64);
            let y = o.y.map(|v| v - y_mean);
            let x = o
                .x
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    let v: Vec<f64> = x.values().iter().zip(&mean[j]).map(|(a, b)| a - b).collect();
                    GridFunction::new(x.start(), step, v)
                })
                .collect::<Result<Vec<_>>>()?;
            let z = match mode {
                CenterMode::Keep => o.z.clone(),
                CenterMode::Report => Vec::new(),
            };
            Ok(Observation::new(y, x, z))
        })
        .collect::<Result<Vec<_>>>()?;
    Design::new(observations, design.lags().to_vec(), step)
}

/// A lag kernel as a function on `[0, alpha]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `sum_k c_k u^k`.
    Polynomial { coefficients: Vec<f64> },
    /// `sum_k c_k sin(k pi u / alpha)`, `k = 1, 2, ..`.
    Sines { coefficients: Vec<f64> },
    /// `sin^2(pi u / alpha) (c_0 + sum_{k>=1} c_k cos(k u))`: vanishes with
    /// its derivative at both window ends.
    Tapered { coefficients: Vec<f64> },
}

impl KernelSpec {
    pub fn eval(&self, u: f64, alpha: f64) -> f64 {
        match self {
            KernelSpec::Polynomial { coefficients } => {
                coefficients.iter().rev().fold(0.0, |acc, c| acc * u + c)
            }
            KernelSpec::Sines { coefficients } => coefficients
                .iter()
                .enumerate()
                .map(|(k, c)| c * ((k + 1) as f64 * PI * u / alpha).sin())
                .sum(),
            KernelSpec::Tapered { coefficients } => {
                let taper = (PI * u / alpha).sin().powi(2);
                taper
                    * coefficients
                        .iter()
                        .enumerate()
                        .map(|(k, c)| c * (k as f64 * u).cos())
                        .sum::<f64>()
            }
        }
    }
}

/// True coefficients: intercept, scalar coefficients and one kernel per lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaSpec {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub scalars: Vec<f64>,
    pub kernels: Vec<KernelSpec>,
}

impl BetaSpec {
    pub fn sample(&self, lags: &[f64], step: f64) -> Result<CoefficientSet> {
        if lags.len() != self.kernels.len() {
            return Err(FcmError::Shape(format!(
                "{} kernels for {} lags",
                self.kernels.len(),
                lags.len()
            )));
        }
        let mut beta0 = vec![self.intercept];
        beta0.extend(&self.scalars);
        let betas = self
            .kernels
            .iter()
            .zip(lags)
            .map(|(k, &alpha)| {
                let n = steps_in(alpha, step)?;
                GridFunction::from_fn(0.0, step, n + 1, |u| k.eval(u, alpha))
            })
            .collect::<Result<_>>()?;
        Ok(CoefficientSet { beta0, betas })
    }
}

fn default_n() -> usize {
    1
}

fn default_oversample() -> usize {
    1
}

/// Everything needed to regenerate a simulated design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    /// One generator per covariate; all share `domain_length` and `step`.
    pub covariates: Vec<GeneratorSpec>,
    pub lags: Vec<f64>,
    pub beta: BetaSpec,
    #[serde(default = "NoiseSpec::none")]
    pub noise: NoiseSpec,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Responses are computed on a grid `oversample` times finer than
    /// `step` and thinned, so discretization error in the simulated data is
    /// negligible next to that of the fit.
    #[serde(default = "default_oversample")]
    pub oversample: usize,
}

impl SimulationSpec {
    /// Returns the design on the output grid and the true coefficients
    /// sampled there.
    pub fn simulate(&self) -> Result<(Design, CoefficientSet)> {
        if self.oversample == 0 {
            return Err(FcmError::InvalidArgument("oversample must be >= 1".into()));
        }
        if self.n == 0 {
            return Err(FcmError::InvalidArgument("n must be >= 1".into()));
        }
        let (domain_length, step) = common_grid(&self.covariates)?;
        let functions = (0..self.n)
            .map(|i| {
                self.covariates
                    .iter()
                    .map(|s| for_observation(s, i).function())
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let fine = self.beta.sample(&self.lags, step / self.oversample as f64)?;
        simulate_from(
            &functions,
            domain_length,
            step,
            self.oversample,
            &fine,
            &self.noise,
            self.seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::inner_product;
    use crate::identifiability::self_similarity_residual;
    use crate::model::{lag_convolve, sse};

    fn spec(kind: CovariateKind, t: f64, step: f64) -> GeneratorSpec {
        GeneratorSpec {
            kind,
            domain_length: t,
            step,
            seed: 11,
        }
    }

    #[test]
    fn sinusoid_rich_partial_sum() {
        let x = gen_covariate(&spec(CovariateKind::SinusoidRich { terms: 4 }, 1.0, 0.125)).unwrap();
        assert!((x.values()[2] - 0.375).abs() < 1e-12);
    }

    #[test]
    fn counterexample_is_orthogonal_to_odd_sines() {
        for terms in [1, 3, 8] {
            let x = gen_covariate(&spec(CovariateKind::OrthogonalCounterexample { terms }, 2.0, 1.0 / 128.0)).unwrap();
            for j in 1..=4 {
                let s = GridFunction::on_interval(0.0, 2.0, 1.0 / 128.0, |t| (2.0 * PI * (2 * j - 1) as f64 * t).sin()).unwrap();
                assert!(inner_product(&x, &s).unwrap().abs() < 1e-10);
            }
        }
        let bad = spec(CovariateKind::OrthogonalCounterexample { terms: 2 }, 1.5, 0.125);
        assert!(matches!(gen_covariate(&bad), Err(FcmError::Domain(_))));
    }

    #[test]
    fn counterexample_annihilates_odd_sine_kernels() {
        let step = 1.0 / 128.0;
        let x = gen_covariate(&spec(CovariateKind::OrthogonalCounterexample { terms: 8 }, 4.0, step)).unwrap();
        for j in 1..=3 {
            let beta = GridFunction::on_interval(0.0, 1.0, step, |u| (2.0 * PI * (2 * j - 1) as f64 * u).sin()).unwrap();
            let c = lag_convolve(&x, &beta, 1.0).unwrap();
            assert!(c.max_abs() < 1e-8, "j = {j}: {}", c.max_abs());
        }
    }

    #[test]
    fn self_similar_reduces_to_cosine() {
        let term = SelfSimilarTerm { c: 1.0, m: 0, a: 0.0, b: 2.0 * PI, d: PI / 2.0 };
        let s = spec(CovariateKind::SelfSimilar { components: vec![term] }, 2.0, 0.125);
        let x = gen_covariate(&s).unwrap();
        assert_eq!(x.values()[0], 1.0);
        for (m, v) in x.values().iter().enumerate() {
            assert!((v - (2.0 * PI * x.time(m)).cos()).abs() < 1e-12);
        }
        assert_eq!(s.analytic_order(), Some(2));
    }

    #[test]
    fn self_similar_passes_residual_test() {
        let comps = vec![
            SelfSimilarTerm { c: 1.0, m: 1, a: -0.2, b: 3.0, d: 0.7 },
            SelfSimilarTerm { c: 0.5, m: 0, a: 0.3, b: 0.0, d: 1.0 },
        ];
        let s = spec(CovariateKind::SelfSimilar { components: comps }, 4.0, 1.0 / 256.0);
        let k = s.analytic_order().unwrap();
        assert_eq!(k, 5);
        let x = gen_covariate(&s).unwrap();
        assert!(self_similarity_residual(&x, 1.0, k).unwrap() < 1e-8);
    }

    #[test]
    fn filtered_noise_is_seeded_and_not_self_similar() {
        let mk = |seed| GeneratorSpec {
            seed,
            ..spec(CovariateKind::FilteredNoise { bandwidth: 40.0, modes: 400, max_frequency: None }, 3.0, 1.0 / 64.0)
        };
        let a = gen_covariate(&mk(3)).unwrap();
        assert_eq!(a, gen_covariate(&mk(3)).unwrap());
        assert_ne!(a, gen_covariate(&mk(4)).unwrap());
        let cols = 65;
        for k in [1, 8, cols / 2] {
            assert!(self_similarity_residual(&a, 1.0, k).unwrap() > 0.05);
        }
    }

    fn small_beta(step: f64) -> CoefficientSet {
        BetaSpec {
            intercept: 0.4,
            scalars: vec![-1.0],
            kernels: vec![KernelSpec::Polynomial { coefficients: vec![1.0, -0.5] }],
        }
        .sample(&[0.5], step)
        .unwrap()
    }

    #[test]
    fn noiseless_design_has_zero_sse() {
        let step = 1.0 / 32.0;
        let cov = spec(CovariateKind::FilteredNoise { bandwidth: 10.0, modes: 50, max_frequency: None }, 3.0, step);
        let beta = small_beta(step);
        let (d, truth) = gen_design(&[cov], &beta, &NoiseSpec::none(), 4, 9).unwrap();
        assert_eq!(truth, beta);
        assert_eq!(d.n_obs(), 4);
        assert!(sse(&d, &truth).unwrap() <= 1e-18);
    }

    #[test]
    fn designs_are_deterministic() {
        let step = 1.0 / 32.0;
        let cov = spec(CovariateKind::FilteredNoise { bandwidth: 10.0, modes: 50, max_frequency: None }, 3.0, step);
        let noise = NoiseSpec { kind: NoiseKind::Ar1, sd: 0.3, ar_coefficient: 0.6 };
        let beta = small_beta(step);
        let (a, _) = gen_design(&[cov.clone()], &beta, &noise, 3, 5).unwrap();
        let (b, _) = gen_design(&[cov.clone()], &beta, &noise, 3, 5).unwrap();
        assert_eq!(a, b);
        let (c, _) = gen_design(&[cov], &beta, &noise, 3, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ar1_noise_is_mean_zero() {
        let noise = NoiseSpec { kind: NoiseKind::Ar1, sd: 1.0, ar_coefficient: 0.8 };
        let reps = 200;
        let at = 37;
        let total: f64 = (0..reps)
            .map(|r| noise.sample(&mut observation_rng(1234, r, NOISE_STREAM), 64)[at])
            .sum();
        assert!((total / reps as f64).abs() < 3.0 * noise.sd / (reps as f64).sqrt());
    }

    #[test]
    fn noise_validation() {
        let bad = NoiseSpec { kind: NoiseKind::Ar1, sd: 1.0, ar_coefficient: 1.0 };
        assert!(bad.validate().is_err());
        let neg = NoiseSpec { kind: NoiseKind::White, sd: -1.0, ar_coefficient: 0.0 };
        assert!(neg.validate().is_err());
    }

    #[test]
    fn centering_properties() {
        let step = 1.0 / 16.0;
        let cov = spec(CovariateKind::FilteredNoise { bandwidth: 10.0, modes: 30, max_frequency: None }, 3.0, step);
        let noise = NoiseSpec { kind: NoiseKind::White, sd: 0.1, ar_coefficient: 0.0 };
        let (d, _) = gen_design(&[cov], &small_beta(step), &noise, 5, 2).unwrap();
        let c = center(&d, CenterMode::Keep).unwrap();
        for m in 0..c.observations()[0].grid_len() {
            let mean: f64 = c.observations().iter().map(|o| o.x[0].values()[m]).sum::<f64>() / 5.0;
            assert!(mean.abs() < 1e-12);
        }
        let again = center(&c, CenterMode::Keep).unwrap();
        for (a, b) in again.observations().iter().zip(c.observations()) {
            for (u, v) in a.y.values().iter().zip(b.y.values()) {
                assert!((u - v).abs() < 1e-12);
            }
            for (u, v) in a.x[0].values().iter().zip(b.x[0].values()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        assert_eq!(center(&d, CenterMode::Report).unwrap().n_scalars(), 0);

        let flat: Vec<Observation> = d
            .observations()
            .iter()
            .map(|o| Observation::new(o.y.map(|_| 2.5), o.x.clone(), o.z.clone()))
            .collect();
        let flat = d.with_observations(flat).unwrap();
        let c = center(&flat, CenterMode::Keep).unwrap();
        assert!(c.observations().iter().all(|o| o.y.max_abs() < 1e-12));
    }

    #[test]
    fn oversampled_simulation_matches_direct_sampling() {
        let sim = SimulationSpec {
            covariates: vec![spec(CovariateKind::SinusoidRich { terms: 8 }, 2.0, 1.0 / 16.0)],
            lags: vec![0.5],
            beta: BetaSpec { intercept: 0.0, scalars: vec![], kernels: vec![KernelSpec::Tapered { coefficients: vec![1.0, 0.0, 0.0, 1.0] }] },
            noise: NoiseSpec::none(),
            n: 2,
            seed: 0,
            oversample: 4,
        };
        let (d, truth) = sim.simulate().unwrap();
        assert_eq!(d.step(), 1.0 / 16.0);
        assert_eq!(truth.betas[0].len(), 9);
        let direct = gen_covariate(&sim.covariates[0]).unwrap();
        for (a, b) in d.observations()[0].x[0].values().iter().zip(direct.values()) {
            assert!((a - b).abs() < 1e-14);
        }
        // responses come from the finer quadrature, so they differ from a
        // coarse-grid prediction only by discretization error
        let coarse = model::predict(&d, &truth, 0).unwrap();
        let y = &d.observations()[0].y.values()[d.first_index()..];
        let err = coarse.values().iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err > 0.0 && err < 1e-2, "{err}");
    }

    #[test]
    fn spec_json_round_trip() {
        let s = spec(CovariateKind::FilteredNoise { bandwidth: 4.0, modes: 10, max_frequency: Some(30.0) }, 2.0, 0.25);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"kind\":\"filtered_noise\""));
        let back: GeneratorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let rich: GeneratorSpec = serde_json::from_str(r#"{"kind":"sinusoid_rich","domain_length":1,"step":0.125}"#).unwrap();
        assert_eq!(rich.kind, CovariateKind::SinusoidRich { terms: 8 });
    }
}
