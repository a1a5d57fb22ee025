//! Discrete normal equations and their solvers.
//!
//! The discrete SSE is `sum_i sum_m omega_m (y_im - r_im . c)^2`, where `c` is
//! the packed coefficient vector (see [`CoefficientLayout`]), `omega` are the
//! trapezoid weights in `t` over `[alpha*, T_i]`, and the design row `r_im`
//! holds `1`, the scalar covariates and `w_q x_ij(t_m - u_q)`. The Gram system
//! `G = sum omega r r'`, `F = sum omega y r` is therefore the exact gradient
//! system of the discrete criterion: `grad SSE(c) = 2 (G c - F)`.
//!
//! Spectral tests and the minimum-norm convention use the quadrature-weighted
//! matrix `D^{-1/2} G D^{-1/2}`, `D` = [`CoefficientLayout::weights`], whose
//! eigenvalues approximate those of the continuous Gram operator and do not
//! drift under grid refinement.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FcmError, Result};
use crate::grids::trapezoid_weights;
use crate::model::{self, CoefficientLayout, CoefficientSet, Design};

pub const DEFAULT_PIVOT_TOL: f64 = 1e-12;
pub const DEFAULT_SVD_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct GramSystem {
    pub gram: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub layout: CoefficientLayout,
    /// Quadrature weight of each unknown (1 on the intercept/scalar block).
    pub weights: DVector<f64>,
    /// `sum_i int y_i^2` over the fitted range; `SSE(c) = c'Gc - 2c'F + energy`.
    pub response_energy: f64,
}

impl GramSystem {
    pub fn new(gram: DMatrix<f64>, rhs: DVector<f64>, layout: CoefficientLayout) -> Result<Self> {
        let n = layout.dim();
        if gram.nrows() != n || gram.ncols() != n || rhs.len() != n {
            return Err(FcmError::Shape(format!(
                "Gram system {}x{} with rhs {} does not match layout dimension {n}",
                gram.nrows(),
                gram.ncols(),
                rhs.len()
            )));
        }
        let weights = DVector::from_vec(layout.weights());
        Ok(GramSystem {
            gram,
            rhs,
            layout,
            weights,
            response_energy: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn inv_sqrt_weights(&self) -> DVector<f64> {
        self.weights.map(|w| 1.0 / w.sqrt())
    }

    /// `D^{-1/2} G D^{-1/2}`.
    pub fn weighted_gram(&self) -> DMatrix<f64> {
        let s = self.inv_sqrt_weights();
        let mut m = self.gram.clone();
        for j in 0..m.ncols() {
            for i in 0..m.nrows() {
                m[(i, j)] *= s[i] * s[j];
            }
        }
        m
    }

    fn weighted_rhs(&self) -> DVector<f64> {
        self.rhs.component_mul(&self.inv_sqrt_weights())
    }

    fn unweight(&self, d: &DVector<f64>) -> DVector<f64> {
        d.component_mul(&self.inv_sqrt_weights())
    }

    /// Eigenvalues of the weighted Gram matrix, descending.
    pub fn weighted_eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.weighted_gram())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    /// `2 (G c - F)`.
    pub fn gradient(&self, c: &[f64]) -> Vec<f64> {
        let c = DVector::from_column_slice(c);
        let g = (&self.gram * c - &self.rhs) * 2.0;
        g.iter().copied().collect()
    }

    /// `c'Gc` for a packed vector.
    pub fn quadratic(&self, c: &[f64]) -> f64 {
        let c = DVector::from_column_slice(c);
        c.dot(&(&self.gram * &c))
    }

    /// Second-difference penalty `D2'D2` on each coefficient-function block.
    pub fn penalty_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut p = DMatrix::zeros(n, n);
        for (j, &len) in self.layout.block_lens().iter().enumerate() {
            let off = self.layout.block_offset(j);
            for r in 1..len.saturating_sub(1) {
                let idx = [off + r - 1, off + r, off + r + 1];
                let coeff = [1.0, -2.0, 1.0];
                for a in 0..3 {
                    for b in 0..3 {
                        p[(idx[a], idx[b])] += coeff[a] * coeff[b];
                    }
                }
            }
        }
        p
    }
}

/// Assembles the Gram system of a design. Observations contribute in
/// parallel; the reduction runs in observation order.
pub fn assemble(design: &Design) -> GramSystem {
    let layout = design.layout();
    let dim = layout.dim();
    let first = design.first_index();
    let step = design.step();
    let u_weights: Vec<Vec<f64>> = design
        .lag_steps()
        .iter()
        .map(|&l| trapezoid_weights(l + 1, step))
        .collect();

    let parts: Vec<(DMatrix<f64>, DVector<f64>, f64)> = design
        .observations()
        .par_iter()
        .map(|obs| {
            let rows = obs.grid_len() - first;
            let omega = trapezoid_weights(rows, step);
            let mut r = DMatrix::<f64>::zeros(rows, dim);
            for m in 0..rows {
                let t = first + m;
                r[(m, 0)] = 1.0;
                for (k, z) in obs.z.iter().enumerate() {
                    r[(m, 1 + k)] = *z;
                }
                for (j, x) in obs.x.iter().enumerate() {
                    let off = layout.block_offset(j);
                    let xv = x.values();
                    for (q, w) in u_weights[j].iter().enumerate() {
                        r[(m, off + q)] = w * xv[t - q];
                    }
                }
            }
            let y = &obs.y.values()[first..];
            let mut weighted = r.clone();
            let mut wy = DVector::<f64>::zeros(rows);
            for m in 0..rows {
                weighted.row_mut(m).scale_mut(omega[m]);
                wy[m] = omega[m] * y[m];
            }
            let g = r.tr_mul(&weighted);
            let f = r.tr_mul(&wy);
            let energy: f64 = y.iter().zip(&wy).map(|(v, wv)| wv * v).sum();
            (g, f, energy)
        })
        .collect();

    let mut gram = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    let mut energy = 0.0;
    for (g, f, e) in parts {
        gram += g;
        rhs += f;
        energy += e;
    }
    symmetrize(&mut gram);
    let mut sys = GramSystem::new(gram, rhs, layout).expect("assembled shapes agree");
    sys.response_energy = energy;
    sys
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

fn extreme_eigenvalues(ev: &[f64]) -> (f64, f64) {
    let max = ev.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = ev.iter().copied().fold(f64::INFINITY, f64::min);
    (min, max)
}

fn cholesky_solve(a: DMatrix<f64>, b: &DVector<f64>, ev: Option<&[f64]>) -> Result<DVector<f64>> {
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(b)),
        None => {
            let (min_eig, max_eig) = match ev {
                Some(ev) => extreme_eigenvalues(ev),
                None => {
                    let ev: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
                    extreme_eigenvalues(&ev)
                }
            };
            Err(FcmError::NearSingular { min_eig, max_eig })
        }
    }
}

/// Packed solution of `G c = F` after the pivot test on the weighted spectrum.
pub(crate) fn solve_direct_vec(sys: &GramSystem, pivot_tol: f64, ev: &[f64]) -> Result<DVector<f64>> {
    let (min_eig, max_eig) = extreme_eigenvalues(ev);
    if !(max_eig > 0.0) || !(min_eig > pivot_tol * max_eig) {
        return Err(FcmError::NearSingular { min_eig, max_eig });
    }
    let d = cholesky_solve(sys.weighted_gram(), &sys.weighted_rhs(), Some(ev))?;
    Ok(sys.unweight(&d))
}

/// Solves `G c = F` by Cholesky factorization of the weighted Gram matrix.
/// Fails with [`FcmError::NearSingular`] when
/// `lambda_min <= pivot_tol * lambda_max`, which signals a possibly
/// non-identifiable design.
pub fn solve_direct(sys: &GramSystem, pivot_tol: f64) -> Result<CoefficientSet> {
    let ev = sys.weighted_eigenvalues();
    let c = solve_direct_vec(sys, pivot_tol, &ev)?;
    Ok(sys.layout.unpack(c.as_slice()))
}

pub(crate) fn solve_truncated_vec(sys: &GramSystem, rel_tol: f64) -> (DVector<f64>, usize) {
    let eig = SymmetricEigen::new(sys.weighted_gram());
    let b = sys.weighted_rhs();
    let smax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut d = DVector::<f64>::zeros(sys.dim());
    let mut rank = 0;
    if smax > 0.0 {
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam.abs() >= rel_tol * smax {
                let e = eig.eigenvectors.column(k);
                d += e * (e.dot(&b) / lam);
                rank += 1;
            }
        }
    }
    (sys.unweight(&d), rank)
}

/// Pseudo-inverse solution keeping eigenvalues `>= rel_tol * sigma_max` of the
/// weighted Gram matrix. The result has minimum quadrature-weighted norm among
/// least-squares solutions of the truncated system.
pub fn solve_truncated_svd(sys: &GramSystem, rel_tol: f64) -> (CoefficientSet, usize) {
    let (c, rank) = solve_truncated_vec(sys, rel_tol);
    (sys.layout.unpack(c.as_slice()), rank)
}

pub(crate) fn solve_penalized_vec(sys: &GramSystem, lambda: f64) -> Result<DVector<f64>> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(FcmError::InvalidArgument(format!(
            "penalty weight must be a finite non-negative number, got {lambda}"
        )));
    }
    let s = sys.inv_sqrt_weights();
    let mut a = sys.weighted_gram();
    if lambda > 0.0 {
        let p = sys.penalty_matrix();
        for j in 0..a.ncols() {
            for i in 0..a.nrows() {
                a[(i, j)] += lambda * p[(i, j)] * s[i] * s[j];
            }
        }
    }
    let d = cholesky_solve(a, &sys.weighted_rhs(), None)?;
    Ok(sys.unweight(&d))
}

/// Solves `(G + lambda D2'D2) c = F` with the second-difference operator
/// applied to each coefficient function; the intercept and scalar
/// coefficients are not penalized.
pub fn solve_penalized(sys: &GramSystem, lambda: f64) -> Result<CoefficientSet> {
    let c = solve_penalized_vec(sys, lambda)?;
    Ok(sys.layout.unpack(c.as_slice()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Direct,
    TruncatedSvd,
    Ridge,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitOptions {
    pub solver: Solver,
    pub pivot_tol: f64,
    pub svd_rel_tol: f64,
    pub lambda: f64,
    /// Fall back to the truncated-SVD solution when the direct solve fails
    /// the pivot test.
    pub allow_rank_deficient: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            solver: Solver::Direct,
            pivot_tol: DEFAULT_PIVOT_TOL,
            svd_rel_tol: DEFAULT_SVD_REL_TOL,
            lambda: 0.0,
            allow_rank_deficient: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub coef: CoefficientSet,
    pub sse_value: f64,
    pub gram_min_eigenvalue: f64,
    pub gram_max_eigenvalue: f64,
    /// `lambda_max / lambda_min` of the weighted Gram matrix; infinite when
    /// `lambda_min <= 0`.
    pub gram_condition: f64,
    pub solver_used: Solver,
    pub truncation_rank: Option<usize>,
    /// Set when the reported coefficients are the minimum-norm representative
    /// of a non-unique least-squares solution.
    pub minimum_norm: bool,
}

pub fn fit(design: &Design, opts: &FitOptions) -> Result<FitResult> {
    let sys = assemble(design);
    let ev = sys.weighted_eigenvalues();
    let (min_eig, max_eig) = extreme_eigenvalues(&ev);
    let mut truncation_rank = None;
    let mut minimum_norm = false;
    let (c, solver_used) = match opts.solver {
        Solver::Direct => match solve_direct_vec(&sys, opts.pivot_tol, &ev) {
            Ok(c) => (c, Solver::Direct),
            Err(FcmError::NearSingular { .. }) if opts.allow_rank_deficient => {
                let (c, r) = solve_truncated_vec(&sys, opts.svd_rel_tol);
                truncation_rank = Some(r);
                minimum_norm = r < sys.dim();
                (c, Solver::TruncatedSvd)
            }
            Err(e) => return Err(e),
        },
        Solver::TruncatedSvd => {
            let (c, r) = solve_truncated_vec(&sys, opts.svd_rel_tol);
            truncation_rank = Some(r);
            minimum_norm = r < sys.dim();
            (c, Solver::TruncatedSvd)
        }
        Solver::Ridge => (solve_penalized_vec(&sys, opts.lambda)?, Solver::Ridge),
    };
    let coef = sys.layout.unpack(c.as_slice());
    let sse_value = model::sse(design, &coef)?;
    Ok(FitResult {
        coef,
        sse_value,
        gram_min_eigenvalue: min_eig,
        gram_max_eigenvalue: max_eig,
        gram_condition: if min_eig > 0.0 { max_eig / min_eig } else { f64::INFINITY },
        solver_used,
        truncation_rank,
        minimum_norm,
    })
}
