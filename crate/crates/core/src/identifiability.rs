//! Identifiability diagnostics.
//!
//! Two complementary views of the same question:
//!
//! * the spectrum of the covariate block of the (quadrature-weighted) Gram
//!   matrix: the design identifies the kernels iff the quadratic form
//!   `<beta, G beta>` is strictly positive, i.e. the block has full numerical
//!   rank; the eigenvectors below tolerance are the non-identifiable
//!   directions;
//! * self-similarity of each covariate: the windows `x(t - u)`, `u in [0, alpha]`,
//!   span a finite-dimensional space exactly when `x` solves a linear
//!   constant-coefficient ODE, i.e. is a sum of terms
//!   `c t^m e^{a t} sin(b t + d)`. On a grid this shows up as low rank of the
//!   delay-embedding matrix and as an exact linear recurrence, whose
//!   characteristic roots `rho = e^{(a + ib) dt}` recover the modes.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FcmError, Result};
use crate::estimator::{assemble, GramSystem};
use crate::grids::{steps_in, trapezoid_sum, GridFunction};
use crate::model::{self, CoefficientSet, Design};

/// Default relative tolerance on singular values for rank tests.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;
/// Default relative tolerance on Gram eigenvalues.
pub const DEFAULT_SPECTRUM_TOL: f64 = 1e-10;
/// Recurrence fits whose lagged matrix has `sigma_min < this * sigma_max`
/// are reported as rank deficient.
pub const RECURRENCE_RANK_TOL: f64 = 1e-10;
/// Characteristic roots closer than this (relative) are merged into one
/// mode with multiplicity.
pub const DEFAULT_ROOT_CLUSTER_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Eigenvalues of the weighted covariate block, descending.
    pub eigenvalues: Vec<f64>,
    pub numerical_rank: usize,
    /// Orthonormal (in the quadrature-weighted inner product) basis of the
    /// numerical null space.
    pub null_basis: Vec<CoefficientSet>,
    pub tol: f64,
}

impl SpectrumReport {
    pub fn block_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_full_rank(&self) -> bool {
        self.numerical_rank == self.block_dim()
    }

    /// Norm of the projection of `gamma` onto the null space divided by the
    /// norm of `gamma`, both in the weighted inner product.
    pub fn null_projection(&self, gamma: &CoefficientSet) -> f64 {
        let norm = gamma.covariate_norm();
        if norm == 0.0 {
            return 0.0;
        }
        let proj: f64 = self
            .null_basis
            .iter()
            .map(|n| weighted_dot(n, gamma).powi(2))
            .sum();
        proj.sqrt() / norm
    }
}

/// Quadrature-weighted inner product of the coefficient functions.
pub fn weighted_dot(a: &CoefficientSet, b: &CoefficientSet) -> f64 {
    a.betas
        .iter()
        .zip(&b.betas)
        .map(|(f, g)| {
            let prod: Vec<f64> = f.values().iter().zip(g.values()).map(|(x, y)| x * y).collect();
            trapezoid_sum(&prod, f.step())
        })
        .sum()
}

/// `<beta, G beta> = sum_i int_{alpha*}^{T_i} (sum_j int_0^{alpha_j} x_ij(t-u) beta_j(u) du)^2 dt`,
/// computed from the forward model. The intercept and scalar coefficients
/// are ignored.
pub fn quadratic_form(design: &Design, beta: &CoefficientSet) -> Result<f64> {
    beta.check_conformal(design)?;
    let cov = beta.covariate_part();
    Ok((0..design.n_obs())
        .map(|i| {
            let c = model::predict_samples(design, &cov, i);
            let sq: Vec<f64> = c.iter().map(|v| v * v).collect();
            trapezoid_sum(&sq, design.step())
        })
        .sum())
}

/// Eigenpairs of the weighted covariate block, descending. Directions are
/// unpacked to coefficient sets (zero intercept/scalar part), orthonormal in
/// the weighted inner product.
pub fn gram_eigenpairs(sys: &GramSystem) -> (Vec<f64>, Vec<CoefficientSet>) {
    let s0 = sys.layout.scalar_dim();
    let n = sys.layout.covariate_dim();
    if n == 0 {
        return (Vec::new(), Vec::new());
    }
    let block = sys.weighted_gram().view((s0, s0), (n, n)).into_owned();
    let eig = SymmetricEigen::new(block);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut values = Vec::with_capacity(n);
    let mut dirs = Vec::with_capacity(n);
    for k in order {
        values.push(eig.eigenvalues[k]);
        let mut v = vec![0.0; sys.dim()];
        for r in 0..n {
            v[s0 + r] = eig.eigenvectors[(r, k)] / sys.weights[s0 + r].sqrt();
        }
        dirs.push(sys.layout.unpack(&v));
    }
    (values, dirs)
}

pub fn gram_spectrum(sys: &GramSystem, tol: f64) -> Result<SpectrumReport> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(FcmError::InvalidArgument(format!(
            "spectrum tolerance must lie in (0, 1), got {tol}"
        )));
    }
    let (eigenvalues, dirs) = gram_eigenpairs(sys);
    let max = eigenvalues.first().copied().unwrap_or(0.0);
    let numerical_rank = if max > 0.0 {
        eigenvalues.iter().filter(|&&l| l >= tol * max).count()
    } else {
        0
    };
    let null_basis = dirs.into_iter().skip(numerical_rank).collect();
    Ok(SpectrumReport {
        eigenvalues,
        numerical_rank,
        null_basis,
        tol,
    })
}

/// True iff `gamma`, scaled to unit weighted norm, has
/// `quadratic_form > tol`, i.e. it is not a non-identifiable direction.
pub fn certify_direction(design: &Design, gamma: &CoefficientSet, tol: f64) -> Result<bool> {
    gamma.check_conformal(design)?;
    let norm = gamma.covariate_norm();
    if !(norm > 0.0) {
        return Err(FcmError::InvalidArgument(
            "cannot certify a zero direction".into(),
        ));
    }
    Ok(quadratic_form(design, &gamma.scale(1.0 / norm))? > tol)
}

/// Delay-embedding rows `H[l][q] = x[first + l*stride - q]`, `q = 0..=lag`.
pub(crate) fn embed_samples(x: &[f64], lag: usize, first: usize, stride: usize) -> DMatrix<f64> {
    let rows: Vec<usize> = (first..x.len()).step_by(stride).collect();
    DMatrix::from_fn(rows.len(), lag + 1, |l, q| x[rows[l] - q])
}

/// Matrix of shifted windows `H[l][q] = x(t_l - u_q)`, rows over grid points
/// `t_l` in `[alpha, T]` taken every `stride` samples, columns over
/// `u_q` in `[0, alpha]`.
pub fn delay_embed(x: &GridFunction, alpha: f64, stride: usize) -> Result<DMatrix<f64>> {
    if stride == 0 {
        return Err(FcmError::InvalidArgument("stride must be >= 1".into()));
    }
    let lag = steps_in(alpha, x.step())?;
    if x.len() < lag + 1 {
        return Err(FcmError::Domain(format!(
            "domain length {} shorter than window {alpha}",
            x.domain_length()
        )));
    }
    Ok(embed_samples(x.values(), lag, lag, stride))
}

/// Singular values, descending.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = SVD::new(m.clone(), false, false)
        .singular_values
        .iter()
        .copied()
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Count of singular values `>= tol * sigma_max`.
pub fn numerical_rank(sv: &[f64], tol: f64) -> usize {
    match sv.first() {
        Some(&max) if max > 0.0 => sv.iter().filter(|&&s| s >= tol * max).count(),
        _ => 0,
    }
}

/// Relative tail energy `sqrt(sum_{k>K} s_k^2 / sum_k s_k^2)` for
/// `K = 1..=columns`. Zero when all singular values vanish.
pub fn residual_curve(sv: &[f64], columns: usize) -> Vec<f64> {
    // accumulate from the small end so the tail sums keep full relative accuracy
    let mut tail = vec![0.0; sv.len() + 1];
    for k in (0..sv.len()).rev() {
        tail[k] = tail[k + 1] + sv[k] * sv[k];
    }
    let total = tail[0];
    (1..=columns)
        .map(|k| {
            if total == 0.0 || k >= sv.len() {
                0.0
            } else {
                (tail[k] / total).sqrt()
            }
        })
        .collect()
}

/// Relative L² misfit of the best order-`order` shift-invariant approximation
/// of `x` over windows of length `alpha`: zero iff the windows span at most
/// `order` dimensions.
pub fn self_similarity_residual(x: &GridFunction, alpha: f64, order: usize) -> Result<f64> {
    let h = delay_embed(x, alpha, 1)?;
    let cols = h.ncols();
    if order == 0 || order > cols {
        return Err(FcmError::InvalidArgument(format!(
            "order {order} outside 1..={cols} embedding columns"
        )));
    }
    Ok(residual_curve(&singular_values(&h), cols)[order - 1])
}

/// One continuous-time mode `t^(m-1) e^{a t} sin(b t + .)` recovered from a
/// cluster of characteristic roots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub a: f64,
    pub b: f64,
    pub multiplicity: usize,
    /// The root has a conjugate partner (accounts for two orders per multiplicity).
    pub conjugate_pair: bool,
}

impl Mode {
    /// Recurrence orders taken by this mode.
    pub fn order(&self) -> usize {
        self.multiplicity * if self.conjugate_pair { 2 } else { 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Recurrence {
    /// `c_1..c_K` in `x(t) = sum_k c_k x(t - k * stride * step)`.
    pub coeffs: Vec<f64>,
    pub stride: usize,
    pub step: f64,
    /// `||x - prediction|| / ||x||` over the fitted samples.
    pub relative_residual: f64,
}

impl Recurrence {
    pub fn dt(&self) -> f64 {
        self.step * self.stride as f64
    }

    pub fn modes(&self, cluster_tol: f64) -> Vec<Mode> {
        recurrence_modes(&self.coeffs, self.dt(), cluster_tol)
    }
}

/// Least-squares linear-prediction coefficients of order `order` on the grid
/// step.
pub fn fit_recurrence(x: &GridFunction, order: usize) -> Result<Recurrence> {
    fit_recurrence_strided(x, order, 1)
}

/// As [`fit_recurrence`] with lags of `stride` grid steps.
pub fn fit_recurrence_strided(x: &GridFunction, order: usize, stride: usize) -> Result<Recurrence> {
    if order == 0 || stride == 0 {
        return Err(FcmError::InvalidArgument(
            "recurrence order and stride must be >= 1".into(),
        ));
    }
    let span = order * stride;
    let n = x.len();
    if n < span + 2 * order {
        return Err(FcmError::DegenerateDomain(format!(
            "{n} samples are too few for a recurrence of order {order} with stride {stride}"
        )));
    }
    let v = x.values();
    let rows = n - span;
    let lagged = DMatrix::from_fn(rows, order, |r, k| v[span + r - (k + 1) * stride]);
    let target = DVector::from_fn(rows, |r, _| v[span + r]);
    let svd = SVD::new(lagged.clone(), true, true);
    let smax = svd.singular_values.max();
    let rank = svd
        .singular_values
        .iter()
        .filter(|&&s| s > RECURRENCE_RANK_TOL * smax)
        .count();
    if rank < order {
        return Err(FcmError::RankDeficient { order, rank });
    }
    let c = svd
        .solve(&target, 0.0)
        .map_err(|e| FcmError::InvalidArgument(e.to_string()))?;
    let resid = (&target - &lagged * &c).norm();
    let tn = target.norm();
    Ok(Recurrence {
        coeffs: c.iter().copied().collect(),
        stride,
        step: x.step(),
        relative_residual: if tn > 0.0 { resid / tn } else { 0.0 },
    })
}

/// Roots of `z^K - c_1 z^{K-1} - .. - c_K` as eigenvalues of the companion matrix.
pub fn characteristic_roots(coeffs: &[f64]) -> Vec<nalgebra::Complex<f64>> {
    let k = coeffs.len();
    if k == 0 {
        return Vec::new();
    }
    let companion = DMatrix::from_fn(k, k, |r, c| {
        if r == 0 {
            coeffs[c]
        } else if c + 1 == r {
            1.0
        } else {
            0.0
        }
    });
    companion.complex_eigenvalues().iter().copied().collect()
}

/// Continuous-time modes `a = ln|rho| / dt`, `b = arg(rho) / dt` of the
/// characteristic roots; conjugate pairs are reported once with `b > 0`,
/// roots within `cluster_tol` (relative) are merged into one mode.
pub fn recurrence_modes(coeffs: &[f64], dt: f64, cluster_tol: f64) -> Vec<Mode> {
    let roots = characteristic_roots(coeffs);
    let close = |a: &nalgebra::Complex<f64>, b: &nalgebra::Complex<f64>| {
        (a - b).norm() <= cluster_tol * a.norm().max(b.norm()).max(1.0)
    };
    let mut real = Vec::new();
    let mut upper = Vec::new();
    for r in roots {
        if r.norm() == 0.0 {
            continue;
        }
        if r.im.abs() <= cluster_tol * r.norm().max(1.0) {
            real.push(nalgebra::Complex::new(r.re, 0.0));
        } else if r.im > 0.0 {
            upper.push(r);
        }
    }
    let mut modes = Vec::new();
    for (group, pair) in [(real, false), (upper, true)] {
        for cluster in single_linkage(&group, close) {
            let n = cluster.len();
            let centre = cluster.iter().fold(nalgebra::Complex::new(0.0, 0.0), |s, &k| s + group[k]) / n as f64;
            modes.push(Mode {
                a: centre.norm().ln() / dt,
                b: centre.arg().abs() / dt,
                multiplicity: n,
                conjugate_pair: pair,
            });
        }
    }
    modes.sort_by(|x, y| x.b.total_cmp(&y.b).then(x.a.total_cmp(&y.a)));
    modes
}

fn single_linkage<T>(items: &[T], close: impl Fn(&T, &T) -> bool) -> Vec<Vec<usize>> {
    let n = items.len();
    let mut label: Vec<usize> = (0..n).collect();
    fn root(label: &mut [usize], mut k: usize) -> usize {
        while label[k] != k {
            label[k] = label[label[k]];
            k = label[k];
        }
        k
    }
    for a in 0..n {
        for b in a + 1..n {
            if close(&items[a], &items[b]) {
                let (ra, rb) = (root(&mut label, a), root(&mut label, b));
                if ra != rb {
                    label[rb] = ra;
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    let mut index_of = vec![usize::MAX; n];
    for k in 0..n {
        let r = root(&mut label, k);
        if index_of[r] == usize::MAX {
            index_of[r] = clusters.len();
            clusters.push(Vec::new());
        }
        clusters[index_of[r]].push(k);
    }
    clusters
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfSimilarityReport {
    pub observation: usize,
    pub covariate: usize,
    /// Singular values of the delay embedding, descending.
    pub singular_values: Vec<f64>,
    /// Residual for `K = 1..=columns`.
    pub residual_curve: Vec<f64>,
    /// Smallest `K` with residual below the rank tolerance (0 for a zero curve).
    pub estimated_order: usize,
    /// `estimated_order` is below the number of embedding columns.
    pub finite_dimensional: bool,
    pub recurrence_coeffs: Vec<f64>,
    pub recurrence_stride: usize,
    pub modes: Vec<Mode>,
    /// Residual at `estimated_order`.
    pub residual: f64,
    pub rank_tol: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiagnoseOptions {
    /// Relative eigenvalue tolerance for the Gram spectrum.
    pub spectrum_tol: f64,
    /// Relative singular-value tolerance for the self-similarity order.
    pub rank_tol: f64,
    /// Row stride of the delay embedding.
    pub embed_stride: usize,
    /// Lag stride of the recurrence fit; `None` picks `max(1, lag / (4 K))`.
    pub recurrence_stride: Option<usize>,
    pub root_cluster_tol: f64,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        DiagnoseOptions {
            spectrum_tol: DEFAULT_SPECTRUM_TOL,
            rank_tol: DEFAULT_RANK_TOL,
            embed_stride: 1,
            recurrence_stride: None,
            root_cluster_tol: DEFAULT_ROOT_CLUSTER_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Identifiable,
    NonIdentifiable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnosis {
    pub verdict: Verdict,
    pub spectrum: SpectrumReport,
    /// One report per (observation, covariate), observation-major.
    pub self_similarity: Vec<SelfSimilarityReport>,
    /// Covariate `j` is finite-dimensional in every observation.
    pub covariate_finite_dimensional: Vec<bool>,
}

/// Self-similarity report of one covariate curve with windows of `lag`
/// samples, rows starting at sample `first`.
pub fn self_similarity_report(
    x: &GridFunction,
    lag: usize,
    first: usize,
    opts: &DiagnoseOptions,
) -> SelfSimilarityReport {
    let h = embed_samples(x.values(), lag, first, opts.embed_stride.max(1));
    let cols = h.ncols();
    let sv = singular_values(&h);
    let curve = residual_curve(&sv, cols);
    let estimated_order = if sv.first().copied().unwrap_or(0.0) == 0.0 {
        0
    } else {
        curve
            .iter()
            .position(|&r| r < opts.rank_tol)
            .map(|k| k + 1)
            .unwrap_or(cols)
    };
    let residual = if estimated_order == 0 { 0.0 } else { curve[estimated_order - 1] };
    let mut report = SelfSimilarityReport {
        observation: 0,
        covariate: 0,
        singular_values: sv,
        residual_curve: curve,
        estimated_order,
        finite_dimensional: estimated_order < cols,
        recurrence_coeffs: Vec::new(),
        recurrence_stride: 0,
        modes: Vec::new(),
        residual,
        rank_tol: opts.rank_tol,
    };
    if report.finite_dimensional && estimated_order > 0 {
        let stride = opts
            .recurrence_stride
            .unwrap_or_else(|| (lag / (4 * estimated_order)).max(1));
        if let Ok(rec) = fit_recurrence_strided(x, estimated_order, stride) {
            report.modes = rec.modes(opts.root_cluster_tol);
            report.recurrence_coeffs = rec.coeffs;
            report.recurrence_stride = stride;
        }
    }
    report
}

/// Gram spectrum plus per-curve self-similarity analysis. The verdict is
/// `Identifiable` iff the covariate block of the Gram matrix has full
/// numerical rank.
pub fn diagnose(design: &Design, opts: &DiagnoseOptions) -> Result<Diagnosis> {
    let sys = assemble(design);
    diagnose_system(design, &sys, opts)
}

pub fn diagnose_system(design: &Design, sys: &GramSystem, opts: &DiagnoseOptions) -> Result<Diagnosis> {
    let spectrum = gram_spectrum(sys, opts.spectrum_tol)?;
    let p = design.n_covariates();
    let first = design.first_index();
    let tasks: Vec<(usize, usize)> = (0..design.n_obs())
        .flat_map(|i| (0..p).map(move |j| (i, j)))
        .collect();
    let self_similarity: Vec<SelfSimilarityReport> = tasks
        .par_iter()
        .map(|&(i, j)| {
            let x = &design.observations()[i].x[j];
            let mut r = self_similarity_report(x, design.lag_steps()[j], first, opts);
            r.observation = i;
            r.covariate = j;
            r
        })
        .collect();
    let covariate_finite_dimensional = (0..p)
        .map(|j| {
            self_similarity
                .iter()
                .filter(|r| r.covariate == j)
                .all(|r| r.finite_dimensional)
        })
        .collect();
    let verdict = if spectrum.is_full_rank() && spectrum.block_dim() > 0 {
        Verdict::Identifiable
    } else {
        Verdict::NonIdentifiable
    };
    Ok(Diagnosis {
        verdict,
        spectrum,
        self_similarity,
        covariate_finite_dimensional,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Observation;
    use std::f64::consts::PI;

    fn curve(t_len: f64, step: f64, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction::on_interval(0.0, t_len, step, f).unwrap()
    }

    fn single(x: GridFunction, alpha: f64) -> Design {
        let step = x.step();
        let y = x.map(|_| 0.0);
        Design::new(vec![Observation::new(y, vec![x], vec![])], vec![alpha], step).unwrap()
    }

    /// Brute-force symmetric eigenvalues by cyclic Jacobi rotations; the
    /// oracle for rank claims, independent of nalgebra's SVD.
    fn jacobi_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
        let n = a.len();
        for _sweep in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
            if off < 1e-30 * (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>() {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
        ev.sort_by(|x, y| y.total_cmp(x));
        ev
    }

    /// Oracle rank of a delay embedding: Jacobi eigenvalues of H'H, compared
    /// against the squared tolerance.
    fn oracle_rank(h: &DMatrix<f64>, tol: f64) -> usize {
        let hth = h.transpose() * h;
        let a: Vec<Vec<f64>> = (0..hth.nrows()).map(|i| (0..hth.ncols()).map(|j| hth[(i, j)]).collect()).collect();
        let ev = jacobi_eigenvalues(a);
        ev.iter().filter(|&&l| l >= tol * tol * ev[0]).count()
    }

    #[test]
    fn quadratic_form_of_zero_is_zero() {
        let d = single(curve(3.0, 1.0 / 16.0, |t| t.sin()), 1.0);
        assert_eq!(quadratic_form(&d, &CoefficientSet::zeros(&d)).unwrap(), 0.0);
    }

    #[test]
    fn delay_embedding_ranks() {
        let step = 1.0 / 256.0;
        let e = curve(4.0, step, |t| (0.3 * t).exp());
        let sv = singular_values(&delay_embed(&e, 1.0, 1).unwrap());
        assert!(sv[1] / sv[0] < 1e-10);

        let s = curve(4.0, step, |t| (2.0 * PI * t).sin());
        let h = delay_embed(&s, 1.0, 1).unwrap();
        assert_eq!(numerical_rank(&singular_values(&h), DEFAULT_RANK_TOL), 2);

        let te = curve(4.0, step, |t| t * t.exp());
        let h = delay_embed(&te, 1.0, 1).unwrap();
        assert_eq!(numerical_rank(&singular_values(&h), DEFAULT_RANK_TOL), 2);
        assert_eq!(oracle_rank(&h, 1e-6), 2);

        let t2 = curve(4.0, step, |t| t * t * t.exp() * t.sin());
        let h = delay_embed(&t2, 1.0, 1).unwrap();
        assert_eq!(numerical_rank(&singular_values(&h), DEFAULT_RANK_TOL), 6);
    }

    #[test]
    fn delay_embedding_shape_and_errors() {
        let x = curve(2.0, 0.25, |t| t);
        let h = delay_embed(&x, 1.0, 1).unwrap();
        assert_eq!((h.nrows(), h.ncols()), (5, 5));
        assert_eq!(h[(0, 0)], 1.0);
        assert_eq!(h[(0, 4)], 0.0);
        assert_eq!(h[(4, 1)], 1.75);
        let strided = delay_embed(&x, 1.0, 2).unwrap();
        assert_eq!(strided.nrows(), 3);
        assert!(delay_embed(&x, 3.0, 1).is_err());
        assert!(delay_embed(&x, 1.0, 0).is_err());
    }

    #[test]
    fn recurrence_examples() {
        let step = 1.0 / 128.0;
        let e = curve(3.0, step, |t| (0.3 * t).exp());
        let r = fit_recurrence(&e, 1).unwrap();
        assert!((r.coeffs[0] - (0.3 * step).exp()).abs() < 1e-10);
        let modes = r.modes(DEFAULT_ROOT_CLUSTER_TOL);
        assert_eq!(modes.len(), 1);
        assert!((modes[0].a - 0.3).abs() < 1e-8 && modes[0].b == 0.0);

        let s = curve(3.0, step, |t| (2.0 * PI * t).sin());
        let r = fit_recurrence(&s, 2).unwrap();
        assert!((r.coeffs[0] - 2.0 * (2.0 * PI * step).cos()).abs() < 1e-8);
        assert!((r.coeffs[1] + 1.0).abs() < 1e-8);
        let modes = r.modes(DEFAULT_ROOT_CLUSTER_TOL);
        assert_eq!(modes.len(), 1);
        assert!(modes[0].conjugate_pair);
        assert!((modes[0].b - 2.0 * PI).abs() < 1e-6 && modes[0].a.abs() < 1e-6);

        assert!(matches!(fit_recurrence(&e, 2), Err(FcmError::RankDeficient { order: 2, rank: 1 })));
        assert!(fit_recurrence(&curve(0.0625, step, |t| t), 3).is_err());
    }

    #[test]
    fn repeated_roots_give_multiplicity() {
        let step = 1.0 / 64.0;
        let x = curve(4.0, step, |t| t * (0.3 * t).exp());
        let r = fit_recurrence_strided(&x, 2, 8).unwrap();
        let modes = r.modes(1e-6);
        assert_eq!(modes.len(), 1, "{modes:?}");
        assert_eq!(modes[0].multiplicity, 2);
        assert!((modes[0].a - 0.3).abs() < 1e-4);
    }

    #[test]
    fn residual_zero_for_family_member() {
        let step = 1.0 / 256.0;
        let x = curve(4.0, step, |t| 1.3 * t * (-0.2 * t).exp() * (3.0 * t + 0.7).sin());
        assert!(self_similarity_residual(&x, 1.0, 4).unwrap() < 1e-8);
        assert!(self_similarity_residual(&x, 1.0, 3).unwrap() > 1e-4);
        assert!(self_similarity_residual(&x, 1.0, 300).is_err());
    }

    #[test]
    fn six_sinusoids_need_order_twelve() {
        let step = 1.0 / 256.0;
        let x = curve(3.0, step, |t| (1..=6).map(|k| 0.5f64.powi(k) * (2.0 * k as f64 * PI * t).sin()).sum());
        let h = delay_embed(&x, 1.0, 1).unwrap();
        assert_eq!(oracle_rank(&h, 1e-5), 12);
        assert!(self_similarity_residual(&x, 1.0, 12).unwrap() < 1e-8);
        assert!(self_similarity_residual(&x, 1.0, 11).unwrap() > 1e-4);
    }

    #[test]
    fn sine_design_spectrum_has_rank_two() {
        let step = 1.0 / 128.0;
        let x = curve(4.0, step, |t| (2.0 * PI * t).sin());
        let d = single(x.clone(), 1.0);
        let rep = gram_spectrum(&assemble(&d), 1e-8).unwrap();
        assert_eq!(rep.numerical_rank, 2);
        assert_eq!(oracle_rank(&delay_embed(&x, 1.0, 1).unwrap(), 1e-4), 2);
        // null basis is orthonormal in the weighted inner product
        for a in rep.null_basis.iter().take(5) {
            for b in rep.null_basis.iter().take(5) {
                let dot = weighted_dot(a, b);
                let expected = if std::ptr::eq(a, b) { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn constant_design_has_rank_one() {
        let d = single(curve(4.0, 1.0 / 32.0, |_| 1.0), 1.0);
        let rep = gram_spectrum(&assemble(&d), DEFAULT_SPECTRUM_TOL).unwrap();
        assert_eq!(rep.numerical_rank, 1);
        assert!(gram_spectrum(&assemble(&d), 1.5).is_err());
    }

    #[test]
    fn certify_null_and_leading_directions() {
        let step = 1.0 / 64.0;
        let d = single(curve(4.0, step, |t| (2.0 * PI * t).sin() + 0.5 * (0.7 * t).exp()), 1.0);
        let sys = assemble(&d);
        let (ev, dirs) = gram_eigenpairs(&sys);
        let rep = gram_spectrum(&sys, 1e-10).unwrap();
        let tol = 1e-10 * ev[0];
        assert!(certify_direction(&d, &dirs[0], tol).unwrap());
        assert!(!certify_direction(&d, &rep.null_basis[0], tol).unwrap());
        for n in &rep.null_basis {
            assert!(quadratic_form(&d, n).unwrap() <= tol);
        }
        for k in 0..rep.numerical_rank {
            assert!(quadratic_form(&d, &dirs[k]).unwrap() > tol);
        }

        let zero = single(curve(4.0, step, |_| 0.0), 1.0);
        assert!(!certify_direction(&zero, &dirs[0], tol).unwrap());
        assert!(certify_direction(&d, &CoefficientSet::zeros(&d), tol).is_err());
    }

    #[test]
    fn diagnose_pure_exponentials() {
        let step = 1.0 / 64.0;
        let obs = (0..3)
            .map(|i| {
                let a = 0.2 * (i as f64 + 1.0);
                let x = curve(3.0, step, |t| (a * t).exp());
                Observation::new(x.map(|_| 0.0), vec![x], vec![])
            })
            .collect();
        let d = Design::new(obs, vec![1.0], step).unwrap();
        let diag = diagnose(&d, &DiagnoseOptions::default()).unwrap();
        assert_eq!(diag.verdict, Verdict::NonIdentifiable);
        assert_eq!(diag.spectrum.numerical_rank, 3);
        assert_eq!(diag.covariate_finite_dimensional, vec![true]);
        for (i, r) in diag.self_similarity.iter().enumerate() {
            assert_eq!(r.estimated_order, 1);
            assert_eq!(r.modes.len(), 1);
            assert!((r.modes[0].a - 0.2 * (i as f64 + 1.0)).abs() < 1e-6);
        }
    }
}
