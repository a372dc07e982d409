//! Covariance functions.
//!
//! The forcing prior uses an ARD Matérn kernel over emission vectors. All
//! temperature covariances are obtained by pushing that Gram through the
//! same discrete convolution used for the mean, so `L K Lᵀ` is the
//! temperature Gram and `K Lᵀ` the forcing–temperature cross-covariance.

use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ebm::{ConvolutionFilter, ImpulseParams, TimeGrid};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaternFamily {
    Matern12,
    Matern32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub family: MaternFamily,
    /// One lengthscale per input dimension (agent).
    pub lengthscales: Vec<f64>,
    pub variance: f64,
    pub standardize_inputs: bool,
}

impl KernelConfig {
    pub fn new(family: MaternFamily, lengthscales: Vec<f64>, variance: f64) -> Result<Self> {
        let cfg = Self {
            family,
            lengthscales,
            variance,
            standardize_inputs: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "lengthscale {l} must be positive"
            )));
        }
        if !(self.variance > 0.0 && self.variance.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel variance {} must be positive",
                self.variance
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Squared scaled distance `Σ (Δ_i/ℓ_i)²`.
    fn scaled_sq_distance(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let u = (a - b) / l;
                u * u
            })
            .sum()
    }

    fn profile(&self, r: f64) -> f64 {
        match self.family {
            MaternFamily::Matern12 => (-r).exp(),
            MaternFamily::Matern32 => {
                let s = 3f64.sqrt() * r;
                (1.0 + s) * (-s).exp()
            }
        }
    }

    fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        self.variance * self.profile(self.scaled_sq_distance(x, y).sqrt())
    }
}

/// ARD Matérn covariance between two input vectors.
pub fn matern(x: &[f64], y: &[f64], config: &KernelConfig) -> Result<f64> {
    if x.len() != config.dim() || y.len() != config.dim() {
        return Err(Error::DimensionMismatch(format!(
            "inputs of length {} and {} for a {}-dimensional kernel",
            x.len(),
            y.len(),
            config.dim()
        )));
    }
    Ok(config.eval_unchecked(x, y))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn check_inputs(m: &DMatrix<f64>, config: &KernelConfig, what: &str) -> Result<()> {
    if m.ncols() != config.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{what} has {} columns, kernel has {} lengthscales",
            m.ncols(),
            config.dim()
        )));
    }
    Ok(())
}

/// Forcing-prior Gram `ρ(E_a[i], E_b[j])` between two emission matrices
/// (one row per time step, one column per agent).
pub fn forcing_gram(
    emissions_a: &DMatrix<f64>,
    emissions_b: &DMatrix<f64>,
    config: &KernelConfig,
) -> Result<DMatrix<f64>> {
    check_inputs(emissions_a, config, "left emission matrix")?;
    check_inputs(emissions_b, config, "right emission matrix")?;
    let (n, m) = (emissions_a.nrows(), emissions_b.nrows());
    let a = rows_of(emissions_a);
    let b = rows_of(emissions_b);
    let mut out = DMatrix::zeros(n, m);
    if n == 0 || m == 0 {
        return Ok(out);
    }
    // column-major: chunk j is column j
    exec::for_each_chunk(out.as_mut_slice(), n, |j, col| {
        for (i, v) in col.iter_mut().enumerate() {
            *v = config.eval_unchecked(&a[i], &b[j]);
        }
    });
    Ok(out)
}

/// Gram over a single input set together with its derivatives with respect
/// to each `log ℓ_i` (in lengthscale order). The derivative with respect to
/// `log variance` is the Gram itself.
pub fn forcing_gram_with_gradients(
    emissions: &DMatrix<f64>,
    config: &KernelConfig,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    check_inputs(emissions, config, "emission matrix")?;
    let n = emissions.nrows();
    let d = config.dim();
    let x = rows_of(emissions);
    let columns = exec::map_indices(n, |j| {
        let mut value = vec![0.0; n];
        let mut grads = vec![vec![0.0; n]; d];
        for i in 0..n {
            let r2 = config.scaled_sq_distance(&x[i], &x[j]);
            let r = r2.sqrt();
            value[i] = config.variance * config.profile(r);
            // dk/dlogℓ_p = -r k'(r) · (Δ_p/ℓ_p)² / r²
            let radial = match config.family {
                MaternFamily::Matern32 => 3.0 * config.variance * (-(3f64.sqrt()) * r).exp(),
                MaternFamily::Matern12 if r > 0.0 => config.variance * (-r).exp() / r,
                MaternFamily::Matern12 => 0.0,
            };
            for p in 0..d {
                let u = (x[i][p] - x[j][p]) / config.lengthscales[p];
                grads[p][i] = radial * u * u;
            }
        }
        (value, grads)
    });
    let mut gram = DMatrix::zeros(n, n);
    let mut derivs = vec![DMatrix::zeros(n, n); d];
    for (j, (value, grads)) in columns.into_iter().enumerate() {
        gram.column_mut(j).copy_from_slice(&value);
        for (p, g) in grads.into_iter().enumerate() {
            derivs[p].column_mut(j).copy_from_slice(&g);
        }
    }
    Ok((gram, derivs))
}

/// Gram matrix plus the jitter that was added before factorisation.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub jitter: f64,
}

impl GramMatrix {
    pub fn new(values: DMatrix<f64>) -> Self {
        Self {
            values,
            jitter: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// `values + jitter·I`.
    pub fn jittered(&self) -> DMatrix<f64> {
        let mut m = self.values.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += self.jitter;
        }
        m
    }
}

/// `L_i K L_jᵀ` for explicit dense operators.
pub fn thermal_cross_gram(
    k: &DMatrix<f64>,
    l_i: &DMatrix<f64>,
    l_j: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if l_i.ncols() != k.nrows() || l_j.ncols() != k.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "operators {:?} and {:?} do not conform to Gram {:?}",
            l_i.shape(),
            l_j.shape(),
            k.shape()
        )));
    }
    Ok(l_i * k * l_j.transpose())
}

/// `K Lᵀ` with `L` block-diagonal over `segments` (applied to columns).
pub fn propagate_right(
    k: &DMatrix<f64>,
    filter: &ConvolutionFilter,
    segments: &[Range<usize>],
) -> DMatrix<f64> {
    let mut t = k.transpose();
    filter.apply_columns(&mut t, segments);
    t.transpose()
}

/// `L K Lᵀ` with `L` block-diagonal over `segments`. Also returns `K Lᵀ`.
pub fn propagate_both(
    k: &DMatrix<f64>,
    filter: &ConvolutionFilter,
    segments: &[Range<usize>],
) -> (DMatrix<f64>, DMatrix<f64>) {
    let cross = propagate_right(k, filter, segments);
    let mut full = cross.clone();
    filter.apply_columns(&mut full, segments);
    crate::linalg::symmetrize(&mut full);
    (full, cross)
}

fn check_square(k: &DMatrix<f64>, grid: &TimeGrid) -> Result<()> {
    if k.nrows() != grid.n_steps || k.ncols() != grid.n_steps {
        return Err(Error::DimensionMismatch(format!(
            "Gram {:?} does not match a {}-step grid",
            k.shape(),
            grid.n_steps
        )));
    }
    Ok(())
}

/// Temperature Gram `Σ_{i,j} L_i K L_jᵀ = L K Lᵀ` on one grid.
pub fn temperature_gram(
    k: &DMatrix<f64>,
    impulse: &ImpulseParams,
    grid: &TimeGrid,
) -> Result<DMatrix<f64>> {
    check_square(k, grid)?;
    let filter = ConvolutionFilter::new(impulse, grid.step);
    Ok(propagate_both(k, &filter, &[0..grid.n_steps]).0)
}

/// `Cov(F(s), T(t))` = `K Lᵀ` where the columns of `k` index the grid.
pub fn forcing_temperature_cross_gram(
    k: &DMatrix<f64>,
    impulse: &ImpulseParams,
    grid: &TimeGrid,
) -> Result<DMatrix<f64>> {
    if k.ncols() != grid.n_steps {
        return Err(Error::DimensionMismatch(format!(
            "Gram has {} columns, grid has {} steps",
            k.ncols(),
            grid.n_steps
        )));
    }
    let filter = ConvolutionFilter::new(impulse, grid.step);
    Ok(propagate_right(k, &filter, &[0..grid.n_steps]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariabilityMode {
    /// Stationary regime: `Σ_i ν_i γ_i(t, t')`.
    #[default]
    LongTime,
    /// Full covariance of the white-noise response started from zero.
    Exact,
}

/// Weights `ν_i = Σ_j 2 d_i q_j / (q_i (d_i + d_j))`.
pub fn nu_weights(impulse: &ImpulseParams) -> Vec<f64> {
    let d = &impulse.timescales;
    let q = &impulse.equilibrium_responses;
    (0..d.len())
        .map(|i| {
            (0..d.len())
                .map(|j| 2.0 * d[i] * q[j] / (q[i] * (d[i] + d[j])))
                .sum()
        })
        .collect()
}

/// Per-mode exponential kernel `γ_i(t, t') = q_i²/(2 d_i) e^{-|t-t'|/d_i}`.
pub fn mode_variability(impulse: &ImpulseParams, mode: usize, t: f64, s: f64) -> f64 {
    let d = impulse.timescales[mode];
    let q = impulse.equilibrium_responses[mode];
    q * q / (2.0 * d) * (-(t - s).abs() / d).exp()
}

/// Variability covariance (without the `σ²` factor) between two sets of
/// elapsed times measured from the zero state.
pub fn variability_cross(
    impulse: &ImpulseParams,
    times_a: &[f64],
    times_b: &[f64],
    mode: VariabilityMode,
) -> DMatrix<f64> {
    let d = &impulse.timescales;
    let q = &impulse.equilibrium_responses;
    let k = d.len();
    match mode {
        VariabilityMode::LongTime => {
            let nu = nu_weights(impulse);
            DMatrix::from_fn(times_a.len(), times_b.len(), |a, b| {
                (0..k)
                    .map(|i| nu[i] * mode_variability(impulse, i, times_a[a], times_b[b]))
                    .sum()
            })
        }
        VariabilityMode::Exact => DMatrix::from_fn(times_a.len(), times_b.len(), |a, b| {
            let (t, s) = (times_a[a], times_b[b]);
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    let lag = (t - s).abs();
                    let stationary = if t <= s {
                        (-lag / d[i]).exp()
                    } else {
                        (-lag / d[j]).exp()
                    };
                    let transient = (-t / d[i] - s / d[j]).exp();
                    acc += q[i] * q[j] / (d[i] + d[j]) * (stationary - transient);
                }
            }
            acc
        }),
    }
}

/// Internal-variability Gram `γ_T` on a grid, excluding `σ²`.
pub fn internal_variability_gram(
    impulse: &ImpulseParams,
    grid: &TimeGrid,
    mode: VariabilityMode,
) -> DMatrix<f64> {
    let t = grid.elapsed_times();
    let mut g = variability_cross(impulse, &t, &t, mode);
    crate::linalg::symmetrize(&mut g);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebm::{convolution_operator, total_convolution_operator};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn m32(ls: Vec<f64>) -> KernelConfig {
        KernelConfig::new(MaternFamily::Matern32, ls, 1.0).unwrap()
    }

    #[test]
    fn matern_at_zero_distance_is_variance() {
        let cfg = KernelConfig::new(MaternFamily::Matern32, vec![0.5, 2.0], 3.0).unwrap();
        assert_eq!(matern(&[1.0, 2.0], &[1.0, 2.0], &cfg).unwrap(), 3.0);
    }

    #[test]
    fn matern12_unit_distance() {
        let cfg = KernelConfig::new(MaternFamily::Matern12, vec![1.0], 1.0).unwrap();
        assert_relative_eq!(
            matern(&[0.0], &[1.0], &cfg).unwrap(),
            0.367_879_441_171_442_3
        );
    }

    #[test]
    fn matern32_ard_value() {
        let got = matern(&[0.0, 0.0], &[1.0, 2.0], &m32(vec![1.0, 2.0])).unwrap();
        let s6 = 6f64.sqrt();
        assert_relative_eq!(got, (1.0 + s6) * (-s6).exp(), max_relative = 1e-15);
    }

    #[test]
    fn matern_dimension_mismatch() {
        assert!(matches!(
            matern(&[0.0], &[1.0, 2.0], &m32(vec![1.0, 2.0])),
            Err(Error::DimensionMismatch(_))
        ));
        let a = DMatrix::zeros(3, 1);
        assert!(forcing_gram(&a, &a, &m32(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn forcing_gram_duplicates() {
        let cfg = KernelConfig::new(MaternFamily::Matern32, vec![1.0], 2.5).unwrap();
        let one = DMatrix::from_row_slice(1, 1, &[0.3]);
        assert_eq!(forcing_gram(&one, &one, &cfg).unwrap()[(0, 0)], 2.5);
        let two = DMatrix::from_row_slice(2, 1, &[0.3, 0.3]);
        let g = forcing_gram(&two, &two, &cfg).unwrap();
        assert!(g.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn forcing_gram_matches_scalar_loop() {
        let cfg = m32(vec![0.7, 1.3, 2.0, 0.4]);
        let a = DMatrix::from_fn(5, 4, |i, j| ((i * 7 + j * 3) as f64 * 0.37).sin());
        let b = DMatrix::from_fn(3, 4, |i, j| ((i * 5 + j) as f64 * 0.91).cos());
        let g = forcing_gram(&a, &b, &cfg).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let x: Vec<f64> = a.row(i).iter().copied().collect();
                let y: Vec<f64> = b.row(j).iter().copied().collect();
                assert_eq!(g[(i, j)], matern(&x, &y, &cfg).unwrap());
            }
        }
    }

    #[test]
    fn gram_gradients_match_finite_differences() {
        for family in [MaternFamily::Matern12, MaternFamily::Matern32] {
            let cfg = KernelConfig::new(family, vec![0.8, 1.7], 1.3).unwrap();
            let x = DMatrix::from_fn(6, 2, |i, j| (i as f64 * 0.3 + j as f64).sin());
            let (g, grads) = forcing_gram_with_gradients(&x, &cfg).unwrap();
            assert_eq!(g, forcing_gram(&x, &x, &cfg).unwrap());
            for p in 0..2 {
                let h: f64 = 1e-6;
                let mut up = cfg.clone();
                up.lengthscales[p] *= h.exp();
                let mut dn = cfg.clone();
                dn.lengthscales[p] *= (-h).exp();
                let fd = (forcing_gram(&x, &x, &up).unwrap() - forcing_gram(&x, &x, &dn).unwrap())
                    / (2.0 * h);
                assert!((fd - &grads[p]).amax() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_gram_propagates_to_zero() {
        let imp = ImpulseParams::new(vec![4.0, 100.0], vec![0.3, 0.4], 0.0).unwrap();
        let grid = TimeGrid::annual(0, 10).unwrap();
        let k = DMatrix::zeros(10, 10);
        assert_eq!(temperature_gram(&k, &imp, &grid).unwrap().amax(), 0.0);
        assert_eq!(
            forcing_temperature_cross_gram(&k, &imp, &grid)
                .unwrap()
                .amax(),
            0.0
        );
        let l = convolution_operator(&imp, 0, &grid);
        assert_eq!(thermal_cross_gram(&k, &l, &l).unwrap().amax(), 0.0);
    }

    #[test]
    fn one_step_algebra() {
        let imp = ImpulseParams::new(vec![4.0, 100.0], vec![0.3, 0.4], 0.0).unwrap();
        let grid = TimeGrid::annual(0, 1).unwrap();
        let k = DMatrix::from_element(1, 1, 2.0);
        let g: Vec<f64> = (0..2)
            .map(|i| imp.equilibrium_responses[i] * (1.0 - (-1.0 / imp.timescales[i]).exp()))
            .collect();
        let l0 = convolution_operator(&imp, 0, &grid);
        assert_relative_eq!(
            thermal_cross_gram(&k, &l0, &l0).unwrap()[(0, 0)],
            g[0] * g[0] * 2.0,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            forcing_temperature_cross_gram(&k, &imp, &grid).unwrap()[(0, 0)],
            2.0 * (g[0] + g[1]),
            max_relative = 1e-14
        );
    }

    #[test]
    fn temperature_gram_is_sum_of_cross_grams() {
        let imp = ImpulseParams::new(vec![3.0, 30.0, 200.0], vec![0.2, 0.3, 0.4], 0.0).unwrap();
        let grid = TimeGrid::annual(0, 15).unwrap();
        let x = DMatrix::from_fn(15, 1, |i, _| i as f64 / 5.0);
        let k = forcing_gram(&x, &x, &m32(vec![1.0])).unwrap();
        let ops: Vec<_> = (0..3)
            .map(|i| convolution_operator(&imp, i, &grid))
            .collect();
        let mut sum = DMatrix::zeros(15, 15);
        for li in &ops {
            for lj in &ops {
                sum += thermal_cross_gram(&k, li, lj).unwrap();
            }
        }
        let fast = temperature_gram(&k, &imp, &grid).unwrap();
        assert!(crate::linalg::relative_frobenius(&fast, &sum) < 1e-12);
        let l = total_convolution_operator(&imp, &grid);
        let cross = forcing_temperature_cross_gram(&k, &imp, &grid).unwrap();
        assert!(crate::linalg::relative_frobenius(&cross, &(&k * l.transpose())) < 1e-12);
    }

    #[test]
    fn single_mode_nu_is_one() {
        let imp = ImpulseParams::new(vec![7.0], vec![0.6], 0.0).unwrap();
        assert_relative_eq!(nu_weights(&imp)[0], 1.0);
        let grid = TimeGrid::annual(0, 5).unwrap();
        let g = internal_variability_gram(&imp, &grid, VariabilityMode::LongTime);
        assert_relative_eq!(g[(2, 2)], 0.36 / 14.0);
    }

    #[test]
    fn exact_variability_converges_to_long_time() {
        let imp = ImpulseParams::new(vec![2.0, 12.0], vec![0.4, 0.5], 0.0).unwrap();
        let late: Vec<f64> = (0..10).map(|i| 121.0 + i as f64).collect();
        let exact = variability_cross(&imp, &late, &late, VariabilityMode::Exact);
        let long = variability_cross(&imp, &late, &late, VariabilityMode::LongTime);
        assert!((exact - &long).amax() < 1e-3 * long.amax());
        let early = [0.5, 1.0];
        let exact = variability_cross(&imp, &early, &early, VariabilityMode::Exact);
        let long = variability_cross(&imp, &early, &early, VariabilityMode::LongTime);
        assert!(exact[(0, 0)] < long[(0, 0)]);
    }

    #[test]
    fn exact_variability_vanishes_at_origin() {
        let imp = ImpulseParams::new(vec![2.0, 12.0], vec![0.4, 0.5], 0.0).unwrap();
        let g = variability_cross(&imp, &[0.0, 3.0], &[0.0, 3.0], VariabilityMode::Exact);
        assert_eq!(g[(0, 0)], 0.0);
        assert!(g[(0, 1)].abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn kernel_is_symmetric(
            x in proptest::collection::vec(-5.0f64..5.0, 3),
            y in proptest::collection::vec(-5.0f64..5.0, 3),
            ls in proptest::collection::vec(0.1f64..4.0, 3),
        ) {
            for family in [MaternFamily::Matern12, MaternFamily::Matern32] {
                let cfg = KernelConfig::new(family, ls.clone(), 1.7).unwrap();
                prop_assert_eq!(matern(&x, &y, &cfg).unwrap(), matern(&y, &x, &cfg).unwrap());
            }
        }

        #[test]
        fn nu_weights_positive(
            d in proptest::collection::vec(0.5f64..500.0, 1..4),
            q in proptest::collection::vec(0.01f64..2.0, 3),
        ) {
            let k = d.len();
            if let Ok(imp) = ImpulseParams::new(d, q[..k].to_vec(), 0.0) {
                prop_assert!(nu_weights(&imp).iter().all(|&v| v > 0.0));
            }
        }
    }
}
