//! Uniform-grid functions.
//!
//! A [`GridFunction`] holds samples of a real function at `start + m * step`.
//! All integrals use the trapezoid rule, and two grid functions may only be
//! combined when their grids match exactly (same start, step and length);
//! nothing is interpolated implicitly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FcmError, Result};

/// Relative tolerance used when checking that a length is a whole number of steps.
pub const GRID_MULTIPLE_TOL: f64 = 1e-9;

/// Relative tolerance for uniform spacing of `t` in the CSV format.
pub const CSV_SPACING_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    start: f64,
    step: f64,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(start: f64, step: f64, values: Vec<f64>) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(FcmError::InvalidArgument(format!(
                "grid step must be positive and finite, got {step}"
            )));
        }
        if !start.is_finite() {
            return Err(FcmError::InvalidArgument(format!(
                "grid start must be finite, got {start}"
            )));
        }
        if values.is_empty() {
            return Err(FcmError::DegenerateDomain(
                "grid function has no samples".into(),
            ));
        }
        Ok(GridFunction {
            start,
            step,
            values,
        })
    }

    /// Samples `f` at `len` points `start + m * step`.
    pub fn from_fn(start: f64, step: f64, len: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = (0..len).map(|m| f(start + m as f64 * step)).collect();
        GridFunction::new(start, step, values)
    }

    /// Samples `f` on `[start, start + length]`; `length` must be a whole
    /// number of steps.
    pub fn on_interval(
        start: f64,
        length: f64,
        step: f64,
        f: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        let n = steps_in(length, step)?;
        GridFunction::from_fn(start, step, n + 1, f)
    }

    pub fn zeros(start: f64, step: f64, len: usize) -> Result<Self> {
        GridFunction::new(start, step, vec![0.0; len])
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Always false; kept for clippy's `len_without_is_empty`.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Time of sample `m`.
    pub fn time(&self, m: usize) -> f64 {
        self.start + m as f64 * self.step
    }

    pub fn end(&self) -> f64 {
        self.time(self.len() - 1)
    }

    pub fn domain_length(&self) -> f64 {
        (self.len() - 1) as f64 * self.step
    }

    pub fn is_combinable(&self, other: &GridFunction) -> bool {
        self.start == other.start && self.step == other.step && self.len() == other.len()
    }

    pub fn check_combinable(&self, other: &GridFunction) -> Result<()> {
        if self.is_combinable(other) {
            Ok(())
        } else {
            Err(FcmError::GridMismatch(format!(
                "(start {}, step {}, len {}) vs (start {}, step {}, len {})",
                self.start,
                self.step,
                self.len(),
                other.start,
                other.step,
                other.len()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction {
            start: self.start,
            step: self.step,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> GridFunction {
        self.map(|v| s * v)
    }

    /// Pointwise `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &GridFunction, b: f64) -> Result<GridFunction> {
        self.check_combinable(other)?;
        Ok(GridFunction {
            start: self.start,
            step: self.step,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.axpby(1.0, other, 1.0)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.axpby(1.0, other, -1.0)
    }

    /// Samples `first..first + len` as a new grid function on the same step.
    pub fn window(&self, first: usize, len: usize) -> Result<GridFunction> {
        if len == 0 || first + len > self.len() {
            return Err(FcmError::Domain(format!(
                "window [{first}, {}) outside grid of length {}",
                first + len,
                self.len()
            )));
        }
        Ok(GridFunction {
            start: self.time(first),
            step: self.step,
            values: self.values[first..first + len].to_vec(),
        })
    }

    /// Keeps every `factor`-th sample starting at the first.
    pub fn thin(&self, factor: usize) -> Result<GridFunction> {
        if factor == 0 {
            return Err(FcmError::InvalidArgument("thinning factor must be >= 1".into()));
        }
        GridFunction::new(
            self.start,
            self.step * factor as f64,
            self.values.iter().step_by(factor).copied().collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Number of whole steps in `length`, within [`GRID_MULTIPLE_TOL`].
pub fn steps_in(length: f64, step: f64) -> Result<usize> {
    if !(step > 0.0) {
        return Err(FcmError::InvalidArgument(format!(
            "grid step must be positive, got {step}"
        )));
    }
    if !(length >= 0.0) || !length.is_finite() {
        return Err(FcmError::InvalidArgument(format!(
            "length must be non-negative and finite, got {length}"
        )));
    }
    let ratio = length / step;
    let n = ratio.round();
    if (ratio - n).abs() > GRID_MULTIPLE_TOL * ratio.max(1.0) {
        return Err(FcmError::InvalidArgument(format!(
            "{length} is not an integer multiple of the grid step {step}"
        )));
    }
    Ok(n as usize)
}

/// Trapezoid weights for `n` samples: `step/2` at both ends, `step` inside.
pub fn trapezoid_weights(n: usize, step: f64) -> Vec<f64> {
    let mut w = vec![step; n];
    if n > 0 {
        w[0] = 0.5 * step;
        w[n - 1] = 0.5 * step;
    }
    if n == 1 {
        w[0] = 0.0;
    }
    w
}

/// Trapezoid sum of raw samples; summation runs left to right.
pub(crate) fn trapezoid_sum(values: &[f64], step: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..n - 1].iter().sum();
    step * (inner + 0.5 * (values[0] + values[n - 1]))
}

pub fn trapezoid_integral(f: &GridFunction) -> Result<f64> {
    if f.len() < 2 {
        return Err(FcmError::DegenerateDomain(
            "trapezoid rule needs at least 2 samples".into(),
        ));
    }
    Ok(trapezoid_sum(&f.values, f.step))
}

/// L² inner product by the trapezoid rule. Exactly symmetric: the pointwise
/// product is formed first and summed in grid order.
pub fn inner_product(f: &GridFunction, g: &GridFunction) -> Result<f64> {
    f.check_combinable(g)?;
    if f.len() < 2 {
        return Err(FcmError::DegenerateDomain(
            "inner product needs at least 2 samples".into(),
        ));
    }
    let prod: Vec<f64> = f.values.iter().zip(&g.values).map(|(a, b)| a * b).collect();
    Ok(trapezoid_sum(&prod, f.step))
}

/// Linear interpolation onto the grid `start + m * step`, `m < len`.
pub fn resample_onto(f: &GridFunction, start: f64, step: f64, len: usize) -> Result<GridFunction> {
    if !(step > 0.0) {
        return Err(FcmError::InvalidArgument(format!(
            "resample step must be positive, got {step}"
        )));
    }
    let last = f.len() - 1;
    let mut values = Vec::with_capacity(len);
    for m in 0..len {
        let t = start + m as f64 * step;
        let s = (t - f.start) / f.step;
        let nearest = s.round();
        if (s - nearest).abs() <= GRID_MULTIPLE_TOL * s.abs().max(1.0) {
            if nearest < 0.0 || nearest as usize > last {
                return Err(extrapolation(t, f));
            }
            values.push(f.values[nearest as usize]);
            continue;
        }
        if s < 0.0 || s > last as f64 {
            return Err(extrapolation(t, f));
        }
        let k = s.floor() as usize;
        let frac = s - k as f64;
        values.push((1.0 - frac) * f.values[k] + frac * f.values[k + 1]);
    }
    GridFunction::new(start, step, values)
}

fn extrapolation(t: f64, f: &GridFunction) -> FcmError {
    FcmError::Domain(format!(
        "resample point {t} outside [{}, {}]",
        f.start,
        f.end()
    ))
}

/// Resamples onto a grid with `new_step`, starting at `f.start()` and covering
/// as many whole new steps as fit in the domain.
pub fn resample(f: &GridFunction, new_step: f64) -> Result<GridFunction> {
    if !(new_step > 0.0) {
        return Err(FcmError::InvalidArgument(format!(
            "resample step must be positive, got {new_step}"
        )));
    }
    let ratio = f.domain_length() / new_step;
    let n = (ratio + GRID_MULTIPLE_TOL * ratio.max(1.0)).floor() as usize;
    resample_onto(f, f.start, new_step, n + 1)
}

/// Central differences inside, second-order one-sided differences at the ends.
pub fn finite_diff(f: &GridFunction) -> Result<GridFunction> {
    let n = f.len();
    if n < 3 {
        return Err(FcmError::DegenerateDomain(
            "finite differences need at least 3 samples".into(),
        ));
    }
    let v = &f.values;
    let h2 = 2.0 * f.step;
    let mut d = Vec::with_capacity(n);
    d.push((-3.0 * v[0] + 4.0 * v[1] - v[2]) / h2);
    for m in 1..n - 1 {
        d.push((v[m + 1] - v[m - 1]) / h2);
    }
    d.push((3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / h2);
    GridFunction::new(f.start, f.step, d)
}

pub fn write_csv<W: Write>(f: &GridFunction, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| FcmError::Csv {
        path: "<output>".into(),
        line: 0,
        message: e.to_string(),
    };
    w.write_record(["t", "value"]).map_err(err)?;
    for (m, v) in f.values.iter().enumerate() {
        w.write_record([f.time(m).to_string(), v.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| FcmError::io("<output>", e))?;
    Ok(())
}

/// Parses the `t,value` format. `label` names the source in error messages.
pub fn parse_csv<R: Read>(reader: R, label: &str) -> Result<GridFunction> {
    let csv_err = |line: u64, message: String| FcmError::Csv {
        path: label.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .clone();
    if header.len() != 2 || &header[0] != "t" || &header[1] != "value" {
        return Err(csv_err(1, format!("expected header `t,value`, found `{}`", header.iter().collect::<Vec<_>>().join(","))));
    }
    let mut ts = Vec::new();
    let mut vs = Vec::new();
    let mut lines = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            csv_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != 2 {
            return Err(csv_err(line, format!("expected 2 fields, found {}", rec.len())));
        }
        let parse = |s: &str, what: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| csv_err(line, format!("invalid {what} `{s}`")))
        };
        ts.push(parse(&rec[0], "t")?);
        vs.push(parse(&rec[1], "value")?);
        lines.push(line);
    }
    if ts.len() < 2 {
        return Err(csv_err(
            lines.first().copied().unwrap_or(1),
            "need at least 2 rows".into(),
        ));
    }
    let n = ts.len();
    // rows are checked against the first interval so the error points at the
    // first offending line; the stored step is the end-to-end average
    let first = ts[1] - ts[0];
    for m in 1..n {
        let dt = ts[m] - ts[m - 1];
        if !(dt > 0.0) {
            return Err(csv_err(lines[m], format!("t not strictly increasing ({} after {})", ts[m], ts[m - 1])));
        }
        if (dt - first).abs() > CSV_SPACING_TOL * first {
            return Err(csv_err(
                lines[m],
                format!("non-uniform spacing: dt = {dt}, expected {first}"),
            ));
        }
    }
    let step = (ts[n - 1] - ts[0]) / (n - 1) as f64;
    GridFunction::new(ts[0], step, vs)
}

pub fn read_csv(path: &Path) -> Result<GridFunction> {
    let file = std::fs::File::open(path).map_err(|e| FcmError::io(path, e))?;
    parse_csv(std::io::BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn unit(step: f64, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction::on_interval(0.0, 1.0, step, f).unwrap()
    }

    /// Composite Simpson on a fine grid, independent of the trapezoid code.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * f(a + k as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn integral_of_constant_and_linear() {
        for step in [0.5, 0.25, 1.0 / 7.0] {
            let one = unit(step, |_| 1.0);
            assert!((trapezoid_integral(&one).unwrap() - 1.0).abs() < 1e-14);
        }
        let lin = unit(0.25, |t| t);
        assert_eq!(trapezoid_integral(&lin).unwrap(), 0.5);
    }

    #[test]
    fn integral_of_square_error_within_step_squared() {
        for n in [4usize, 16, 64, 256] {
            let step = 1.0 / n as f64;
            let sq = unit(step, |t| t * t);
            let err = (trapezoid_integral(&sq).unwrap() - 1.0 / 3.0).abs();
            assert!(err <= step * step, "n={n} err={err}");
            // trapezoid error for t^2 is exactly step^2/6
            assert!((err - step * step / 6.0).abs() < 1e-14);
        }
    }

    #[test]
    fn single_sample_is_degenerate() {
        let f = GridFunction::new(0.0, 0.1, vec![1.0]).unwrap();
        assert!(matches!(
            trapezoid_integral(&f),
            Err(FcmError::DegenerateDomain(_))
        ));
    }

    #[test]
    fn fourier_inner_products() {
        let step = 1.0 / 512.0;
        let s1 = unit(step, |t| (2.0 * PI * t).sin());
        let s2 = unit(step, |t| (4.0 * PI * t).sin());
        let zero = unit(step, |_| 0.0);
        assert_eq!(inner_product(&zero, &zero).unwrap(), 0.0);

        let oracle = simpson(|t| (2.0 * PI * t).sin() * (4.0 * PI * t).sin(), 0.0, 1.0, 1 << 14);
        let ip = inner_product(&s1, &s2).unwrap();
        assert!(ip.abs() < 1e-10 && oracle.abs() < 1e-10);
        assert!((inner_product(&s1, &s1).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn mismatched_grids_rejected() {
        let a = unit(0.25, |t| t);
        let b = unit(0.125, |t| t);
        assert!(matches!(inner_product(&a, &b), Err(FcmError::GridMismatch(_))));
        let shifted = GridFunction::new(0.5, 0.25, vec![0.0; 5]).unwrap();
        assert!(inner_product(&a, &shifted).is_err());
    }

    #[test]
    fn resample_identity_is_bitwise() {
        let f = unit(1.0 / 64.0, |t| (3.1 * t).exp().sin());
        let g = resample(&f, f.step()).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn resample_linear_and_quadratic() {
        let f = unit(0.125, |t| t);
        let g = resample(&f, 0.0625).unwrap();
        assert_eq!(g.len(), 17);
        for m in 0..g.len() {
            assert!((g.values()[m] - g.time(m)).abs() < 1e-15);
        }
        let q = unit(0.125, |t| t * t);
        let r = resample(&q, 0.0625).unwrap();
        for m in 0..r.len() {
            let t = r.time(m);
            // linear interpolation error is at most max|f''| h^2 / 8 = 1/256 for h = 1/8
            assert!((r.values()[m] - t * t).abs() <= 1.0 / 256.0 + 1e-15);
        }
    }

    #[test]
    fn resample_rejects_extrapolation() {
        let f = unit(0.125, |t| t);
        assert!(matches!(
            resample_onto(&f, 0.5, 0.125, 6),
            Err(FcmError::Domain(_))
        ));
        assert!(resample_onto(&f, -0.1, 0.125, 3).is_err());
        assert!(resample_onto(&f, 0.5, 0.125, 5).is_ok());
    }

    #[test]
    fn finite_differences() {
        let c = unit(0.1, |_| 2.5);
        assert!(finite_diff(&c).unwrap().values().iter().all(|v| v.abs() < 1e-12));

        let q = unit(1.0 / 16.0, |t| t * t);
        let d = finite_diff(&q).unwrap();
        for m in 0..d.len() {
            // one-sided second-order formulas are exact for quadratics too
            assert!((d.values()[m] - 2.0 * d.time(m)).abs() < 1e-12);
        }

        let step = 1.0 / 256.0;
        let e = unit(step, |t| (0.3 * t).exp());
        let de = finite_diff(&e).unwrap();
        let bound = 0.3f64.powi(3) * 0.3f64.exp() * step * step;
        for m in 1..de.len() - 1 {
            let exact = 0.3 * (0.3 * de.time(m)).exp();
            assert!((de.values()[m] - exact).abs() <= bound);
        }
        assert!(finite_diff(&GridFunction::new(0.0, 1.0, vec![1.0, 2.0]).unwrap()).is_err());
    }

    #[test]
    fn quadrature_converges_at_second_order() {
        // sin over a full period integrates to roundoff at every step
        for n in [8usize, 16, 32] {
            let s = unit(1.0 / n as f64, |t| (2.0 * PI * t).sin());
            assert!(trapezoid_integral(&s).unwrap().abs() < 1e-15);
        }
        let exact = 1f64.exp() - 1.0;
        let errs: Vec<f64> = [8usize, 16, 32, 64]
            .iter()
            .map(|&n| (trapezoid_integral(&unit(1.0 / n as f64, f64::exp)).unwrap() - exact).abs())
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((ratio - 4.0).abs() < 0.05, "ratio {ratio}");
        }
    }

    #[test]
    fn csv_round_trip_and_validation() {
        let f = unit(0.1, |t| t.sin());
        let mut buf = Vec::new();
        write_csv(&f, &mut buf).unwrap();
        let g = parse_csv(buf.as_slice(), "mem").unwrap();
        assert_eq!(f.values(), g.values());
        assert!((g.step() - 0.1).abs() < 1e-15);

        let bad = "t,value\n0,1\n0.1,2\n0.25,3\n";
        match parse_csv(bad.as_bytes(), "bad.csv") {
            Err(FcmError::Csv { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected csv error, got {other:?}"),
        }
        let header = "time,value\n0,1\n1,2\n";
        assert!(matches!(parse_csv(header.as_bytes(), "h"), Err(FcmError::Csv { line: 1, .. })));
        let decreasing = "t,value\n0,1\n-1,2\n";
        assert!(parse_csv(decreasing.as_bytes(), "d").is_err());
        let junk = "t,value\n0,1\n1,abc\n";
        assert!(matches!(parse_csv(junk.as_bytes(), "j"), Err(FcmError::Csv { line: 3, .. })));
    }

    #[test]
    fn steps_in_checks_multiples() {
        assert_eq!(steps_in(1.0, 1.0 / 128.0).unwrap(), 128);
        assert_eq!(steps_in(0.3, 0.1).unwrap(), 3);
        assert!(steps_in(0.35, 0.1).is_err());
    }

    fn grid_values() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn inner_product_is_symmetric((a, b) in grid_values(), step in 0.001f64..1.0) {
            let f = GridFunction::new(0.0, step, a).unwrap();
            let g = GridFunction::new(0.0, step, b).unwrap();
            prop_assert_eq!(inner_product(&f, &g).unwrap(), inner_product(&g, &f).unwrap());
        }

        #[test]
        fn integral_is_linear((a, b) in grid_values(), alpha in -5.0f64..5.0, beta in -5.0f64..5.0) {
            let f = GridFunction::new(0.0, 0.1, a).unwrap();
            let g = GridFunction::new(0.0, 0.1, b).unwrap();
            let lhs = trapezoid_integral(&f.axpby(alpha, &g, beta).unwrap()).unwrap();
            let fi = trapezoid_integral(&f).unwrap();
            let gi = trapezoid_integral(&g).unwrap();
            let rhs = alpha * fi + beta * gi;
            let scale = (alpha * fi).abs() + (beta * gi).abs() + 1e-300;
            let abs_scale = f.max_abs().max(g.max_abs()) * (alpha.abs() + beta.abs()) * f.domain_length();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * scale.max(abs_scale));
        }
    }
}
