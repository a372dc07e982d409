//! Brute-force reference computations for the analytical quantities:
//! Monte Carlo sampling, direct ODE and SDE integration, and quadrature of
//! covariance integrals. Production inference never calls into this module.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::ebm::{
    build_feedback_matrix, diagonalize, thermal_response, BoxModelParams, ImpulseParams, TimeGrid,
};
use crate::exec;
use crate::gp::psd_square_root;
use crate::kernels::{
    forcing_gram, internal_variability_gram, temperature_gram, KernelConfig, MaternFamily,
    VariabilityMode,
};
use crate::linalg::relative_frobenius;
use crate::metrics::gaussian_crps;

fn stream_rng(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Unbiased sample covariance of the rows of `samples`.
pub fn empirical_covariance(samples: &DMatrix<f64>) -> DMatrix<f64> {
    let n = samples.nrows();
    let mean = samples.row_mean();
    let mut centred = samples.clone();
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    centred.tr_mul(&centred) / (n.saturating_sub(1).max(1) as f64)
}

/// Integrates `dS_i/dt = (q_i F - S_i)/d_i` with classical RK4, holding `F`
/// constant over each grid step, and returns `Σ S_i` at each step end.
pub fn integrate_impulse_rk4(
    forcing: &[f64],
    impulse: &ImpulseParams,
    grid: &TimeGrid,
    substeps: usize,
) -> Vec<f64> {
    let k = impulse.n_modes();
    let h = grid.step / substeps as f64;
    let mut s = vec![0.0; k];
    let mut out = Vec::with_capacity(forcing.len());
    for &f in forcing {
        for _ in 0..substeps {
            for i in 0..k {
                let (d, q) = (impulse.timescales[i], impulse.equilibrium_responses[i]);
                let rhs = |x: f64| (q * f - x) / d;
                let k1 = rhs(s[i]);
                let k2 = rhs(s[i] + 0.5 * h * k1);
                let k3 = rhs(s[i] + 0.5 * h * k2);
                let k4 = rhs(s[i] + h * k3);
                s[i] += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
        out.push(s.iter().sum());
    }
    out
}

/// Integrates the box form `dX/dt = A X + b F` with RK4 and returns the
/// surface box temperature at each step end.
pub fn integrate_box_rk4(
    params: &BoxModelParams,
    forcing: &[f64],
    grid: &TimeGrid,
    substeps: usize,
) -> Vec<f64> {
    let a = build_feedback_matrix(params);
    let b = params.forcing_vector();
    let h = grid.step / substeps as f64;
    let mut x = DVector::zeros(params.n_boxes());
    let mut out = Vec::with_capacity(forcing.len());
    for &f in forcing {
        let rhs = |x: &DVector<f64>| &a * x + &b * f;
        for _ in 0..substeps {
            let k1 = rhs(&x);
            let k2 = rhs(&(&x + &k1 * (0.5 * h)));
            let k3 = rhs(&(&x + &k2 * (0.5 * h)));
            let k4 = rhs(&(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        out.push(x[0]);
    }
    out
}

/// Steady-state surface temperature per unit forcing, `(-A⁻¹ b)_0`.
pub fn steady_state_gain(params: &BoxModelParams) -> f64 {
    let a = build_feedback_matrix(params);
    let b = params.forcing_vector();
    let x = a
        .lu()
        .solve(&(-b))
        .expect("feedback matrix of a valid box model is invertible");
    x[0]
}

/// Empirical temperature covariance from forcing paths drawn from
/// `N(0, K(E, E))` and integrated with RK4 (`substeps` per grid step).
/// `inputs` are the kernel inputs at each grid row.
pub fn mc_temperature_covariance(
    kernel: &KernelConfig,
    inputs: &DMatrix<f64>,
    impulse: &ImpulseParams,
    grid: &TimeGrid,
    n_samples: usize,
    substeps: usize,
    seed: u64,
) -> DMatrix<f64> {
    let n = grid.n_steps;
    let k = forcing_gram(inputs, inputs, kernel).expect("inputs match the kernel");
    let root = psd_square_root(&k).expect("forcing Gram is positive semi-definite");
    let paths = exec::map_indices(n_samples, |i| {
        let mut rng = stream_rng(seed, i);
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let f = &root * z;
        integrate_impulse_rk4(f.as_slice(), impulse, grid, substeps)
    });
    let flat: Vec<f64> = paths.into_iter().flatten().collect();
    empirical_covariance(&DMatrix::from_row_slice(n_samples, n, &flat))
}

/// Empirical covariance of `Σ_i S_i` under the white-noise-driven modes
/// `dS_i = -S_i/d_i dt + (q_i/d_i) σ dB`, by Euler–Maruyama with at most
/// `d_min / 50` per substep, started from zero at the grid origin.
pub fn sde_variability_covariance(
    impulse: &ImpulseParams,
    sigma: f64,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> DMatrix<f64> {
    let n = grid.n_steps;
    let k = impulse.n_modes();
    let d_min = impulse
        .timescales
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let substeps = (grid.step / (d_min / 50.0)).ceil().max(1.0) as usize;
    let dt = grid.step / substeps as f64;
    let sqrt_dt = dt.sqrt();
    let paths = exec::map_indices(n_paths, |p| {
        let mut rng = stream_rng(seed, p);
        let mut s = vec![0.0; k];
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            for _ in 0..substeps {
                let z: f64 = StandardNormal.sample(&mut rng);
                let db = sigma * sqrt_dt * z;
                for i in 0..k {
                    let (d, q) = (impulse.timescales[i], impulse.equilibrium_responses[i]);
                    s[i] += -s[i] / d * dt + q / d * db;
                }
            }
            out.push(s.iter().sum::<f64>());
        }
        out
    });
    let flat: Vec<f64> = paths.into_iter().flatten().collect();
    empirical_covariance(&DMatrix::from_row_slice(n_paths, n, &flat))
}

/// Kernel inputs at continuous time `s`, interpolated linearly between
/// step midpoints `(a + 1/2) Δ` and held constant beyond the first and last.
fn interpolate_inputs(inputs: &DMatrix<f64>, step: f64, s: f64) -> Vec<f64> {
    let n = inputs.nrows();
    let u = s / step - 0.5;
    if u <= 0.0 || n == 1 {
        return inputs.row(0).iter().copied().collect();
    }
    if u >= (n - 1) as f64 {
        return inputs.row(n - 1).iter().copied().collect();
    }
    let a = u.floor() as usize;
    let w = u - a as f64;
    inputs
        .row(a)
        .iter()
        .zip(inputs.row(a + 1).iter())
        .map(|(x, y)| (1.0 - w) * x + w * y)
        .collect()
}

/// Trapezoid evaluation of
/// `∫₀ᵗ ∫₀ᵗ' K(s, s') Σ_ij (q_i/d_i)(q_j/d_j) e^{-(t-s)/d_i} e^{-(t'-s')/d_j} ds ds'`
/// at every pair of grid times, with `substeps` nodes per step.
pub fn quadrature_thermal_covariance(
    kernel: &KernelConfig,
    inputs: &DMatrix<f64>,
    impulse: &ImpulseParams,
    grid: &TimeGrid,
    substeps: usize,
) -> DMatrix<f64> {
    let n = grid.n_steps;
    let h = grid.step / substeps as f64;
    let m = n * substeps + 1;
    let nodes: Vec<f64> = (0..m).map(|j| j as f64 * h).collect();
    let node_inputs: Vec<f64> = nodes
        .iter()
        .flat_map(|&s| interpolate_inputs(inputs, grid.step, s))
        .collect();
    let node_inputs = DMatrix::from_row_slice(m, inputs.ncols(), &node_inputs);
    let kn = forcing_gram(&node_inputs, &node_inputs, kernel).expect("inputs match the kernel");
    // G[a, j]: trapezoid weight on [0, t_a] times the summed impulse response
    let mut g = DMatrix::zeros(n, m);
    for a in 0..n {
        let last = (a + 1) * substeps;
        let t = grid.elapsed(a);
        for j in 0..=last {
            let w = if j == 0 || j == last { 0.5 * h } else { h };
            let lag = t - nodes[j];
            let response: f64 = impulse
                .timescales
                .iter()
                .zip(&impulse.equilibrium_responses)
                .map(|(d, q)| q / d * (-lag / d).exp())
                .sum();
            g[(a, j)] = w * response;
        }
    }
    &g * kn * g.transpose()
}

/// Monte Carlo estimate of the CRPS of `N(mean, std²)` at `y`, via
/// `E|X - y| - E|X - X'|/2` over stratified normal draws.
pub fn crps_monte_carlo(mean: f64, std: f64, y: f64, n_samples: usize, seed: u64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_samples as f64;
    let x: Vec<f64> = (0..n_samples)
        .map(|i| {
            let u = (i as f64 + rng.random::<f64>()) / n;
            mean + std * normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16))
        })
        .collect();
    // draws are increasing, so E|X - X'| = 2/n² Σ (2i - n + 1) x_i
    let abs_y = x.iter().map(|v| (v - y).abs()).sum::<f64>() / n;
    let pair = 2.0 / (n * n)
        * x.iter()
            .enumerate()
            .map(|(i, v)| (2.0 * i as f64 - n + 1.0) * v)
            .sum::<f64>();
    abs_y - 0.5 * pair
}

/// One row of the verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckRecord {
    pub check: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub detail: String,
}

impl CheckRecord {
    pub fn below(check: &str, statistic: f64, tolerance: f64, detail: String) -> Self {
        Self {
            check: check.into(),
            statistic,
            tolerance,
            pass: statistic <= tolerance,
            detail,
        }
    }

    pub fn csv_header() -> &'static str {
        "check,statistic,tolerance,pass,detail"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{},\"{}\"",
            self.check,
            self.statistic,
            self.tolerance,
            self.pass,
            self.detail.replace('"', "'")
        )
    }
}

/// Two-box toy model used by the verification suite.
pub fn toy_impulse() -> ImpulseParams {
    ImpulseParams::new(vec![4.0, 60.0], vec![0.35, 0.45], 1.0).expect("valid toy modes")
}

/// Smooth single-agent kernel inputs on `grid`.
pub fn toy_inputs(grid: &TimeGrid) -> DMatrix<f64> {
    let n = grid.n_steps as f64;
    DMatrix::from_fn(grid.n_steps, 1, |a, _| {
        let x = a as f64 / n;
        2.0 * x * x + 0.3 * (3.0 * x).sin()
    })
}

/// Reduced-size oracle-versus-production checks, suitable for the CLI.
pub fn run_verification_suite(seed: u64) -> Vec<CheckRecord> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut worst_reconstruction: f64 = 0.0;
    let mut worst_gain: f64 = 0.0;
    for _ in 0..20 {
        let k = rng.random_range(1..=3);
        let caps: Vec<f64> = (0..k)
            .map(|i| rng.random_range(2.0..20.0) * 10f64.powi(i))
            .collect();
        let kappa: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..2.0)).collect();
        let box_model =
            BoxModelParams::new(caps, kappa, rng.random_range(0.8..1.5)).expect("valid");
        if let Ok(decomp) = crate::ebm::modal_decomposition(&box_model) {
            let a = build_feedback_matrix(&box_model);
            if let Ok(r) = decomp.reconstruct() {
                worst_reconstruction = worst_reconstruction.max(relative_frobenius(&r, &a));
            }
            let gain = steady_state_gain(&box_model);
            worst_gain = worst_gain.max((decomp.impulse.total_gain() - gain).abs() / gain);
        }
    }
    out.push(CheckRecord::below(
        "diagonalization_reconstruction",
        worst_reconstruction,
        1e-10,
        "20 random box models".into(),
    ));
    out.push(CheckRecord::below(
        "steady_state_gain",
        worst_gain,
        1e-10,
        "20 random box models".into(),
    ));

    let box_model = BoxModelParams::new(vec![8.0, 100.0], vec![1.2, 0.7], 1.1).expect("valid");
    let impulse = diagonalize(&box_model).expect("toy box model diagonalises");
    let grid = TimeGrid::annual(1850, 250).expect("grid");
    let forcing = vec![3.7; grid.n_steps];
    let fast = thermal_response(&forcing, &impulse, &grid)
        .expect("shapes")
        .total;
    let slow = integrate_box_rk4(&box_model, &forcing, &grid, 50);
    let err = fast
        .iter()
        .zip(&slow)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / slow.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    out.push(CheckRecord::below(
        "impulse_vs_box_rk4",
        err,
        1e-6,
        "250-year step forcing, 50 RK4 substeps".into(),
    ));

    let impulse = toy_impulse();
    let grid = TimeGrid::annual(2000, 30).expect("grid");
    let kernel = KernelConfig::new(MaternFamily::Matern32, vec![1.5], 1.0).expect("kernel");
    let inputs = toy_inputs(&grid);
    let k = forcing_gram(&inputs, &inputs, &kernel).expect("shapes");
    let production = temperature_gram(&k, &impulse, &grid).expect("shapes");
    let samples = 2000;
    let mc = mc_temperature_covariance(&kernel, &inputs, &impulse, &grid, samples, 20, seed);
    out.push(CheckRecord::below(
        "temperature_gram_vs_monte_carlo",
        relative_frobenius(&mc, &production),
        0.05,
        format!("{samples} samples, 30-year grid"),
    ));
    let quad = quadrature_thermal_covariance(&kernel, &inputs, &impulse, &grid, 16);
    out.push(CheckRecord::below(
        "temperature_gram_vs_quadrature",
        relative_frobenius(&production, &quad),
        0.02,
        "16 substeps per year".into(),
    ));

    let one = ImpulseParams::new(vec![4.0], vec![0.5], 1.0).expect("valid");
    let grid = TimeGrid::annual(2000, 120).expect("grid");
    let paths = 2000;
    let emp = sde_variability_covariance(&one, 0.8, &grid, paths, seed);
    let late: Vec<f64> = (40..grid.n_steps).map(|a| emp[(a, a)]).collect();
    let stationary = 0.5 * 0.5 * 0.8 * 0.8 / (2.0 * 4.0);
    let avg = late.iter().sum::<f64>() / late.len() as f64;
    out.push(CheckRecord::below(
        "ou_stationary_variance",
        (avg - stationary).abs() / stationary,
        0.05,
        format!("{paths} Euler-Maruyama paths, k=1"),
    ));

    let two = toy_impulse();
    let grid = TimeGrid::annual(2000, 40).expect("grid");
    let emp = sde_variability_covariance(&two, 1.0, &grid, paths, seed ^ 1);
    let early = 0..15;
    let block = |m: &DMatrix<f64>| {
        m.view((early.start, early.start), (early.len(), early.len()))
            .into_owned()
    };
    let exact = internal_variability_gram(&two, &grid, VariabilityMode::Exact);
    let long = internal_variability_gram(&two, &grid, VariabilityMode::LongTime);
    let e_exact = relative_frobenius(&block(&exact), &block(&emp));
    let e_long = relative_frobenius(&block(&long), &block(&emp));
    out.push(CheckRecord {
        check: "exact_variability_beats_long_time_early".into(),
        statistic: e_exact,
        tolerance: e_long,
        pass: e_exact < e_long,
        detail: format!("first 15 years, {paths} paths; statistic is the exact-mode error"),
    });

    let y = 0.7;
    let mc = crps_monte_carlo(0.2, 1.3, y, 100_000, seed);
    out.push(CheckRecord::below(
        "crps_closed_form_vs_monte_carlo",
        (mc - gaussian_crps(0.2, 1.3, y)).abs(),
        1e-3,
        "100000 stratified draws".into(),
    ));
    out
}
