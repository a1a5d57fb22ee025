//! Down-sampling to a scalar-response functional linear model.
//!
//! Observing `y_i` only at the times `t = alpha* + l U` turns the convolution
//! model into an ordinary functional linear model: each row has a scalar
//! response and, per covariate, the reversed window `x_ij(t - u)`,
//! `u in [0, alpha_j]`, as its predictor curve.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FcmError, Result};
use crate::estimator::{solve_direct_vec, solve_penalized_vec, GramSystem};
use crate::grids::{steps_in, trapezoid_weights};
use crate::model::{CoefficientLayout, CoefficientSet, Design};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlmRow {
    pub observation: usize,
    pub l: usize,
    pub t: f64,
    pub y: f64,
    pub z: Vec<f64>,
    /// `windows[j][q] = x_ij(t - q * step)`.
    pub windows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlmDataset {
    pub rows: Vec<FlmRow>,
    pub spacing: f64,
    pub step: f64,
    pub lags: Vec<f64>,
    pub n_scalars: usize,
}

impl FlmDataset {
    pub fn layout(&self) -> CoefficientLayout {
        let lens = self.lags.iter().map(|&a| steps_in(a, self.step).map(|n| n + 1));
        CoefficientLayout::new(
            self.n_scalars,
            lens.collect::<Result<Vec<_>>>().expect("lags validated by the design"),
            self.step,
        )
    }

    /// Rows per observation, in observation order.
    pub fn counts(&self) -> Vec<usize> {
        let n = self.rows.iter().map(|r| r.observation + 1).max().unwrap_or(0);
        let mut c = vec![0; n];
        for r in &self.rows {
            c[r.observation] += 1;
        }
        c
    }

    /// `y - (beta_00 + z . beta_0 + sum_j int beta_j(u) x(t - u) du)` per row.
    pub fn residuals(&self, coef: &CoefficientSet) -> Result<Vec<f64>> {
        let layout = self.layout();
        let c = DVector::from_vec(layout.pack(coef)?);
        Ok(self
            .rows
            .iter()
            .map(|r| r.y - design_row(r, &layout).dot(&c))
            .collect())
    }

    /// Single CSV: `row,obs,l,t,y,z0..,x{j}_u{q}..`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| FcmError::InvalidArgument(format!("csv write failed: {e}"));
        let mut header = vec!["row".to_string(), "obs".into(), "l".into(), "t".into(), "y".into()];
        header.extend((0..self.n_scalars).map(|k| format!("z{k}")));
        let layout = self.layout();
        for (j, &len) in layout.block_lens().iter().enumerate() {
            header.extend((0..len).map(|q| format!("x{j}_u{q}")));
        }
        w.write_record(&header).map_err(to_err)?;
        for (k, r) in self.rows.iter().enumerate() {
            let mut rec = vec![
                k.to_string(),
                r.observation.to_string(),
                r.l.to_string(),
                format!("{:?}", r.t),
                format!("{:?}", r.y),
            ];
            rec.extend(r.z.iter().map(|v| format!("{v:?}")));
            for win in &r.windows {
                rec.extend(win.iter().map(|v| format!("{v:?}")));
            }
            w.write_record(&rec).map_err(to_err)?;
        }
        w.flush()
            .map_err(|e| FcmError::InvalidArgument(format!("csv write failed: {e}")))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::manifest::write_atomic(path, &buf)
    }
}

/// Rows at `t = alpha* + l U`, `l = 0..n_i`, `n_i = floor((T_i - alpha*) / U) + 1`.
pub fn to_flm(design: &Design, spacing: f64) -> Result<FlmDataset> {
    let stride = steps_in(spacing, design.step())?;
    if stride == 0 {
        return Err(FcmError::InvalidArgument(format!(
            "sampling interval must be a positive multiple of the step, got {spacing}"
        )));
    }
    let first = design.first_index();
    let step = design.step();
    let rows: Vec<Vec<FlmRow>> = design
        .observations()
        .par_iter()
        .enumerate()
        .map(|(i, o)| {
            (first..o.grid_len())
                .step_by(stride)
                .enumerate()
                .map(|(l, m)| FlmRow {
                    observation: i,
                    l,
                    t: m as f64 * step,
                    y: o.y.values()[m],
                    z: o.z.clone(),
                    windows: o
                        .x
                        .iter()
                        .zip(design.lag_steps())
                        .map(|(x, &lag)| (0..=lag).map(|q| x.values()[m - q]).collect())
                        .collect(),
                })
                .collect()
        })
        .collect();
    let rows: Vec<FlmRow> = rows.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(FcmError::DegenerateDomain("no sampling time in [alpha*, T]".into()));
    }
    Ok(FlmDataset {
        rows,
        spacing,
        step,
        lags: design.lags().to_vec(),
        n_scalars: design.n_scalars(),
    })
}

fn design_row(r: &FlmRow, layout: &CoefficientLayout) -> DVector<f64> {
    let mut v = DVector::zeros(layout.dim());
    v[0] = 1.0;
    for (k, z) in r.z.iter().enumerate() {
        v[1 + k] = *z;
    }
    for (j, win) in r.windows.iter().enumerate() {
        let off = layout.block_offset(j);
        let w = trapezoid_weights(win.len(), layout.step());
        for (q, x) in win.iter().enumerate() {
            v[off + q] = w[q] * x;
        }
    }
    v
}

/// Normal equations of the unweighted row sum `sum_rows (y - r . c)^2`.
pub fn flm_normal_system(data: &FlmDataset) -> GramSystem {
    let layout = data.layout();
    let dim = layout.dim();
    let mut r = DMatrix::<f64>::zeros(data.rows.len(), dim);
    let mut y = DVector::<f64>::zeros(data.rows.len());
    for (k, row) in data.rows.iter().enumerate() {
        r.set_row(k, &design_row(row, &layout).transpose());
        y[k] = row.y;
    }
    let mut gram = r.tr_mul(&r);
    for i in 0..dim {
        for j in 0..i {
            let v = 0.5 * (gram[(i, j)] + gram[(j, i)]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let rhs = r.tr_mul(&y);
    let mut sys = GramSystem::new(gram, rhs, layout).expect("shapes agree");
    sys.response_energy = y.norm_squared();
    sys
}

/// Least squares over rows, with the second-difference penalty when
/// `lambda > 0`. Without a penalty a system failing the pivot test is
/// reported as [`FcmError::NearSingular`].
pub fn fit_flm(data: &FlmDataset, lambda: f64, pivot_tol: f64) -> Result<CoefficientSet> {
    if !(lambda >= 0.0) {
        return Err(FcmError::InvalidArgument(format!(
            "penalty weight must be non-negative, got {lambda}"
        )));
    }
    let sys = flm_normal_system(data);
    let c = if lambda == 0.0 {
        let ev = sys.weighted_eigenvalues();
        solve_direct_vec(&sys, pivot_tol, &ev)?
    } else {
        solve_penalized_vec(&sys, lambda)?
    };
    Ok(sys.layout.unpack(c.as_slice()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::designs::{gen_design, BetaSpec, CovariateKind, GeneratorSpec, KernelSpec, NoiseSpec};
    use crate::estimator::{fit, DEFAULT_PIVOT_TOL, FitOptions};
    use crate::model::lag_convolve;

    fn noiseless(step: f64, n: usize) -> (Design, CoefficientSet) {
        let cov = GeneratorSpec {
            kind: CovariateKind::FilteredNoise { bandwidth: 40.0, modes: 200, max_frequency: None },
            domain_length: 4.0,
            step,
            seed: 21,
        };
        let beta = BetaSpec {
            intercept: 0.3,
            scalars: vec![0.7],
            kernels: vec![KernelSpec::Sines { coefficients: vec![1.0, -0.4, 0.2] }],
        }
        .sample(&[0.5], step)
        .unwrap();
        gen_design(&[cov], &beta, &NoiseSpec::none(), n, 3).unwrap()
    }

    #[test]
    fn unit_spacing_keeps_every_point() {
        let (d, _) = noiseless(1.0 / 16.0, 2);
        let flm = to_flm(&d, d.step()).unwrap();
        let per_obs = d.observations()[0].grid_len() - d.first_index();
        assert_eq!(flm.counts(), vec![per_obs; 2]);
        assert!((flm.rows[0].t - d.alpha_star()).abs() < 1e-15);
    }

    #[test]
    fn full_span_gives_two_rows() {
        let (d, _) = noiseless(1.0 / 16.0, 3);
        let flm = to_flm(&d, 4.0 - d.alpha_star()).unwrap();
        assert_eq!(flm.counts(), vec![2; 3]);
        assert_eq!(flm.rows[1].t, 4.0);
        assert!(to_flm(&d, 0.1).is_err());
    }

    #[test]
    fn rows_match_forward_model() {
        let (d, truth) = noiseless(1.0 / 32.0, 2);
        let flm = to_flm(&d, 4.0 / 32.0).unwrap();
        for r in flm.residuals(&truth).unwrap() {
            assert!(r.abs() < 1e-12);
        }
        let conv = lag_convolve(&d.observations()[1].x[0], &truth.betas[0], 0.5).unwrap();
        for row in flm.rows.iter().filter(|r| r.observation == 1) {
            let m = ((row.t - conv.start()) / d.step()).round() as usize;
            let offset = truth.beta0[0] + truth.beta0[1] * row.z[0];
            assert!((row.y - offset - conv.values()[m]).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_spacing_agrees_with_full_estimator() {
        let (d, _) = noiseless(1.0 / 32.0, 4);
        let full = fit(&d, &FitOptions::default()).unwrap().coef;
        let flm = fit_flm(&to_flm(&d, d.step()).unwrap(), 0.0, DEFAULT_PIVOT_TOL).unwrap();
        let layout = d.layout();
        let a = layout.pack(&full).unwrap();
        let b = layout.pack(&flm).unwrap();
        let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(num <= 1e-6 * den, "{}", num / den);
    }

    #[test]
    fn thinned_rows_recover_truth() {
        let (d, truth) = noiseless(1.0 / 32.0, 6);
        let flm = fit_flm(&to_flm(&d, 4.0 / 32.0).unwrap(), 0.0, DEFAULT_PIVOT_TOL).unwrap();
        assert!(flm.relative_l2_error(&truth).unwrap() < 1e-3);
    }

    #[test]
    fn single_row_is_singular() {
        let (d, _) = noiseless(1.0 / 16.0, 1);
        let mut flm = to_flm(&d, d.step()).unwrap();
        flm.rows.truncate(1);
        assert!(matches!(fit_flm(&flm, 0.0, DEFAULT_PIVOT_TOL), Err(FcmError::NearSingular { .. })));
        assert!(fit_flm(&flm, -1.0, DEFAULT_PIVOT_TOL).is_err());
    }

    #[test]
    fn thinning_loses_information() {
        let (d, _) = noiseless(1.0 / 32.0, 3);
        let mut prev = f64::INFINITY;
        for k in [1usize, 2, 4, 8] {
            let sys = flm_normal_system(&to_flm(&d, k as f64 / 32.0).unwrap());
            let min = *sys.weighted_eigenvalues().last().unwrap();
            assert!(min <= prev + 1e-12);
            prev = min;
        }
    }

    #[test]
    fn csv_export_layout() {
        let (d, _) = noiseless(0.25, 1);
        let flm = to_flm(&d, 0.5).unwrap();
        let mut buf = Vec::new();
        flm.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "row,obs,l,t,y,z0,x0_u0,x0_u1,x0_u2");
        assert_eq!(lines.count(), flm.rows.len());
    }
}
