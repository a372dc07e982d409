//! Deterministic k-box energy balance model.
//!
//! The box form `dX/dt = A X + b F` is diagonalised into independent
//! thermal modes `dS_i/dt = (q_i F - S_i) / d_i` whose sum is the surface
//! temperature. Time is discretised on a uniform grid with the forcing held
//! constant over each step, which makes the per-step update exact:
//!
//! `S_i[a] = e^{-Δ/d_i} S_i[a-1] + q_i (1 - e^{-Δ/d_i}) F[a]`
//!
//! Row `a` of every series is the state at the end of step `a`; the state at
//! the start of step 0 (the grid's `start_year`) is zero.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Heat capacities, inter-box heat transfer coefficients and deep ocean
/// uptake efficacy of a k-box model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxModelParams {
    pub heat_capacities: Vec<f64>,
    pub heat_transfer: Vec<f64>,
    pub deep_ocean_efficacy: f64,
}

impl BoxModelParams {
    pub fn new(
        heat_capacities: Vec<f64>,
        heat_transfer: Vec<f64>,
        deep_ocean_efficacy: f64,
    ) -> Result<Self> {
        let params = Self {
            heat_capacities,
            heat_transfer,
            deep_ocean_efficacy,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.heat_capacities.len();
        if k == 0 {
            return Err(Error::InvalidParameter(
                "box model needs at least one box".into(),
            ));
        }
        if self.heat_transfer.len() != k {
            return Err(Error::InvalidParameter(format!(
                "{k} heat capacities but {} heat transfer coefficients",
                self.heat_transfer.len()
            )));
        }
        if let Some(c) = self
            .heat_capacities
            .iter()
            .find(|c| !(**c > 0.0 && c.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "heat capacity {c} must be positive"
            )));
        }
        if let Some(c) = self
            .heat_transfer
            .iter()
            .find(|c| !(**c > 0.0 && c.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "heat transfer coefficient {c} must be positive"
            )));
        }
        if !(self.deep_ocean_efficacy > 0.0 && self.deep_ocean_efficacy.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "deep ocean efficacy {} must be positive",
                self.deep_ocean_efficacy
            )));
        }
        Ok(())
    }

    pub fn n_boxes(&self) -> usize {
        self.heat_capacities.len()
    }

    /// Forcing feedback vector `b = [1/C_1, 0, ..., 0]`.
    pub fn forcing_vector(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.n_boxes());
        b[0] = 1.0 / self.heat_capacities[0];
        b
    }
}

/// Impulse-response parameters: response timescales `d_i` (years),
/// equilibrium responses `q_i` (K W⁻¹ m²) and the internal variability
/// amplitude `σ`. Modes are kept sorted by increasing timescale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseParams {
    pub timescales: Vec<f64>,
    pub equilibrium_responses: Vec<f64>,
    pub variability_amplitude: f64,
}

impl ImpulseParams {
    /// Validates and sorts the modes into canonical order.
    pub fn new(
        timescales: Vec<f64>,
        equilibrium_responses: Vec<f64>,
        variability_amplitude: f64,
    ) -> Result<Self> {
        if timescales.is_empty() {
            return Err(Error::InvalidParameter(
                "at least one thermal mode is required".into(),
            ));
        }
        if timescales.len() != equilibrium_responses.len() {
            return Err(Error::InvalidParameter(format!(
                "{} timescales but {} equilibrium responses",
                timescales.len(),
                equilibrium_responses.len()
            )));
        }
        if let Some(d) = timescales.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
            return Err(Error::InvalidParameter(format!(
                "timescale {d} must be positive"
            )));
        }
        if let Some(q) = equilibrium_responses
            .iter()
            .find(|q| !(**q > 0.0 && q.is_finite()))
        {
            return Err(Error::InvalidParameter(format!(
                "equilibrium response {q} must be positive"
            )));
        }
        if !(variability_amplitude >= 0.0 && variability_amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variability amplitude {variability_amplitude} must be non-negative"
            )));
        }
        let mut modes: Vec<(f64, f64)> =
            timescales.into_iter().zip(equilibrium_responses).collect();
        modes.sort_by(|a, b| a.0.total_cmp(&b.0));
        if modes.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidParameter(
                "timescales must be distinct".into(),
            ));
        }
        let (timescales, equilibrium_responses) = modes.into_iter().unzip();
        Ok(Self {
            timescales,
            equilibrium_responses,
            variability_amplitude,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.timescales.len()
    }

    pub fn with_variability(mut self, sigma: f64) -> Self {
        self.variability_amplitude = sigma;
        self
    }

    /// Equilibrium climate sensitivity per unit forcing, `Σ q_i`.
    pub fn total_gain(&self) -> f64 {
        self.equilibrium_responses.iter().sum()
    }
}

/// Uniform time grid. `step` is in years.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub start_year: i32,
    pub n_steps: usize,
    pub step: f64,
}

impl TimeGrid {
    pub fn new(start_year: i32, n_steps: usize, step: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidParameter(
                "time grid needs at least one step".into(),
            ));
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "time step {step} must be positive"
            )));
        }
        Ok(Self {
            start_year,
            n_steps,
            step,
        })
    }

    pub fn annual(start_year: i32, n_steps: usize) -> Result<Self> {
        Self::new(start_year, n_steps, 1.0)
    }

    /// Calendar year labelling row `a`.
    pub fn year(&self, a: usize) -> i32 {
        self.start_year + (a as f64 * self.step).round() as i32
    }

    pub fn years(&self) -> Vec<i32> {
        (0..self.n_steps).map(|a| self.year(a)).collect()
    }

    /// Time elapsed since the zero state when row `a` is reported.
    pub fn elapsed(&self, a: usize) -> f64 {
        (a + 1) as f64 * self.step
    }

    pub fn elapsed_times(&self) -> Vec<f64> {
        (0..self.n_steps).map(|a| self.elapsed(a)).collect()
    }
}

/// Tridiagonal temperature feedback matrix `A` of the box model.
///
/// The efficacy `ε` multiplies the coupling between the last two boxes, in
/// the diagonal and upper entries of row `k-1`.
pub fn build_feedback_matrix(params: &BoxModelParams) -> DMatrix<f64> {
    let k = params.n_boxes();
    let c = &params.heat_capacities;
    let kappa = &params.heat_transfer;
    let eps = params.deep_ocean_efficacy;
    let mut a = DMatrix::zeros(k, k);
    if k == 1 {
        a[(0, 0)] = -kappa[0] / c[0];
        return a;
    }
    for i in 0..k {
        if i == k - 1 {
            a[(i, i - 1)] = kappa[i] / c[i];
            a[(i, i)] = -kappa[i] / c[i];
            continue;
        }
        // coupling to the box below; scaled by the efficacy for the last link
        let down = if i == k - 2 {
            eps * kappa[i + 1]
        } else {
            kappa[i + 1]
        };
        if i > 0 {
            a[(i, i - 1)] = kappa[i] / c[i];
        }
        a[(i, i)] = -(kappa[i] + down) / c[i];
        a[(i, i + 1)] = down / c[i];
    }
    a
}

/// Eigendecomposition `A = Φ D Φ⁻¹` with the columns of `Φ` scaled so that
/// the first row of `Φ` is all ones (surface temperature = Σ S_i).
#[derive(Debug, Clone)]
pub struct ModalDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub impulse: ImpulseParams,
}

impl ModalDecomposition {
    /// `Φ D Φ⁻¹`, with `Φ⁻¹` obtained by a general LU inverse.
    pub fn reconstruct(&self) -> Result<DMatrix<f64>> {
        let inv = self
            .eigenvectors
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NonDiagonalizable("eigenvector matrix is singular".into()))?;
        Ok(&self.eigenvectors * DMatrix::from_diagonal(&self.eigenvalues) * inv)
    }
}

const EIGEN_SEPARATION_TOL: f64 = 1e-9;

/// Diagonalises the feedback matrix.
///
/// `A` is tridiagonal with positive off-diagonal products, so a diagonal
/// similarity `W A W⁻¹` makes it symmetric and a symmetric eigensolver gives
/// real eigenpairs directly.
pub fn modal_decomposition(params: &BoxModelParams) -> Result<ModalDecomposition> {
    params.validate()?;
    let a = build_feedback_matrix(params);
    let k = a.nrows();

    let mut w = vec![1.0; k];
    for i in 0..k.saturating_sub(1) {
        let upper = a[(i, i + 1)];
        let lower = a[(i + 1, i)];
        if !(upper * lower > 0.0) {
            return Err(Error::NonDiagonalizable(format!(
                "off-diagonal pair ({upper}, {lower}) is not sign-matched"
            )));
        }
        w[i + 1] = w[i] * (upper / lower).sqrt();
    }
    let mut s = DMatrix::zeros(k, k);
    for i in 0..k {
        s[(i, i)] = a[(i, i)];
        if i + 1 < k {
            let off = (a[(i, i + 1)] * a[(i + 1, i)]).sqrt();
            s[(i, i + 1)] = off;
            s[(i + 1, i)] = off;
        }
    }
    let eig = SymmetricEigen::new(s);

    let mut order: Vec<usize> = (0..k).collect();
    // most negative eigenvalue = shortest timescale first
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));

    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    for pair in order.windows(2) {
        let gap = (eig.eigenvalues[pair[1]] - eig.eigenvalues[pair[0]]).abs();
        if gap <= EIGEN_SEPARATION_TOL * scale {
            return Err(Error::NonDiagonalizable(format!(
                "repeated eigenvalue {}",
                eig.eigenvalues[pair[0]]
            )));
        }
    }

    let mut eigenvalues = DVector::zeros(k);
    let mut phi = DMatrix::zeros(k, k);
    let mut timescales = Vec::with_capacity(k);
    let mut responses = Vec::with_capacity(k);
    for (col, &idx) in order.iter().enumerate() {
        let lambda = eig.eigenvalues[idx];
        if !(lambda < 0.0) {
            return Err(Error::NonDiagonalizable(format!(
                "eigenvalue {lambda} is not negative"
            )));
        }
        let v = eig.eigenvectors.column(idx);
        let v0 = v[0];
        if v0.abs() < f64::EPSILON * v.amax() {
            return Err(Error::NonDiagonalizable(
                "mode does not couple to the surface box".into(),
            ));
        }
        // Φ = W⁻¹ V, normalised to a unit first row
        let first = v0 / w[0];
        for r in 0..k {
            phi[(r, col)] = v[r] / w[r] / first;
        }
        eigenvalues[col] = lambda;
        let d = -1.0 / lambda;
        timescales.push(d);
        // (Φ⁻¹ b)_i = V_{1i}² / C_1 after the normalisation above
        responses.push(d * v0 * v0 / params.heat_capacities[0]);
    }

    let impulse = ImpulseParams::new(timescales, responses, 0.0)?;
    Ok(ModalDecomposition {
        eigenvalues,
        eigenvectors: phi,
        impulse,
    })
}

/// Impulse-response form of a box model (without internal variability).
pub fn diagonalize(params: &BoxModelParams) -> Result<ImpulseParams> {
    Ok(modal_decomposition(params)?.impulse)
}

/// Forcing-model coefficients for one atmospheric agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentForcing {
    pub name: String,
    pub alpha_log: f64,
    pub alpha_lin: f64,
    pub alpha_sqrt: f64,
    pub preindustrial: f64,
}

impl AgentForcing {
    fn needs_positive(&self) -> bool {
        self.alpha_log != 0.0 || self.alpha_sqrt != 0.0
    }

    pub fn forcing_at(&self, concentration: f64) -> f64 {
        let c0 = self.preindustrial;
        let mut f = self.alpha_lin * (concentration - c0);
        if self.alpha_log != 0.0 {
            f += self.alpha_log * (concentration / c0).ln();
        }
        if self.alpha_sqrt != 0.0 {
            f += self.alpha_sqrt * (concentration.sqrt() - c0.sqrt());
        }
        f
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ForcingParams {
    pub agents: Vec<AgentForcing>,
}

impl ForcingParams {
    pub fn validate(&self) -> Result<()> {
        for a in &self.agents {
            if a.needs_positive() && !(a.preindustrial > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "agent `{}` needs a positive preindustrial concentration",
                    a.name
                )));
            }
        }
        Ok(())
    }
}

/// Total effective radiative forcing from per-agent concentration series
/// (same agent order as `params.agents`).
pub fn forcing_response<S: AsRef<[f64]>>(
    concentrations: &[S],
    params: &ForcingParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    if concentrations.len() != params.agents.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} concentration series for {} agents",
            concentrations.len(),
            params.agents.len()
        )));
    }
    let n = concentrations.first().map_or(0, |c| c.as_ref().len());
    let mut total = vec![0.0; n];
    for (agent, series) in params.agents.iter().zip(concentrations) {
        let series = series.as_ref();
        if series.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "agent `{}` has {} values, expected {n}",
                agent.name,
                series.len()
            )));
        }
        for (step, (&c, f)) in series.iter().zip(total.iter_mut()).enumerate() {
            if agent.needs_positive() && !(c > 0.0) {
                return Err(Error::NonPositiveConcentration {
                    agent: agent.name.clone(),
                    step,
                    value: c,
                });
            }
            *f += agent.forcing_at(c);
        }
    }
    Ok(total)
}

/// Convenience concentration rule `C(t) = C0 + scale · E(t)`.
///
/// Applied to cumulative emissions this is a linear accumulation; applied to
/// emission rates it is a burden proportional to current emissions. It has
/// no chemistry and is not a gas-cycle model.
pub fn linear_concentration(emissions: &[f64], preindustrial: f64, scale: f64) -> Vec<f64> {
    emissions
        .iter()
        .map(|e| preindustrial + scale * e)
        .collect()
}

/// Per-mode recursive form of the convolution operators `L_i`.
#[derive(Debug, Clone)]
pub struct ConvolutionFilter {
    decay: Vec<f64>,
    gain: Vec<f64>,
}

impl ConvolutionFilter {
    pub fn new(impulse: &ImpulseParams, step: f64) -> Self {
        let decay: Vec<f64> = impulse
            .timescales
            .iter()
            .map(|d| (-step / d).exp())
            .collect();
        let gain = impulse
            .equilibrium_responses
            .iter()
            .zip(&impulse.timescales)
            .map(|(q, d)| q * -(-step / d).exp_m1())
            .collect();
        Self { decay, gain }
    }

    pub fn n_modes(&self) -> usize {
        self.decay.len()
    }

    /// `L_mode x`.
    pub fn apply_mode(&self, mode: usize, x: &[f64]) -> Vec<f64> {
        let (decay, gain) = (self.decay[mode], self.gain[mode]);
        let mut state = 0.0;
        x.iter()
            .map(|&f| {
                state = decay * state + gain * f;
                state
            })
            .collect()
    }

    /// `L x` with `L = Σ_i L_i`, written into `out`.
    pub fn apply_total_into(&self, x: &[f64], out: &mut [f64], state: &mut [f64]) {
        state.iter_mut().for_each(|s| *s = 0.0);
        for (o, &f) in out.iter_mut().zip(x) {
            let mut t = 0.0;
            for ((s, decay), gain) in state.iter_mut().zip(&self.decay).zip(&self.gain) {
                *s = decay * *s + gain * f;
                t += *s;
            }
            *o = t;
        }
    }

    pub fn apply_total(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut state = vec![0.0; self.n_modes()];
        self.apply_total_into(x, &mut out, &mut state);
        out
    }

    /// Replaces each column `c` of `m` by the block-diagonal product
    /// `L c`, where the blocks are the given row segments.
    pub fn apply_columns(&self, m: &mut DMatrix<f64>, segments: &[std::ops::Range<usize>]) {
        let nrows = m.nrows();
        if nrows == 0 || m.ncols() == 0 {
            return;
        }
        let k = self.n_modes();
        crate::exec::for_each_chunk(m.as_mut_slice(), nrows, |_, col| {
            let mut state = vec![0.0; k];
            let mut buf = Vec::new();
            for seg in segments {
                buf.clear();
                buf.extend_from_slice(&col[seg.clone()]);
                self.apply_total_into(&buf, &mut col[seg.clone()], &mut state);
            }
        });
    }
}

/// Dense lower-triangular matrix of the discrete convolution for one mode:
/// entry `(a, b)` is `q_i (1 - e^{-Δ/d_i}) e^{-(a-b)Δ/d_i}` for `b <= a`.
pub fn convolution_operator(impulse: &ImpulseParams, mode: usize, grid: &TimeGrid) -> DMatrix<f64> {
    let n = grid.n_steps;
    let d = impulse.timescales[mode];
    let q = impulse.equilibrium_responses[mode];
    let gain = q * -(-grid.step / d).exp_m1();
    DMatrix::from_fn(n, n, |a, b| {
        if b <= a {
            gain * (-((a - b) as f64) * grid.step / d).exp()
        } else {
            0.0
        }
    })
}

/// `L = Σ_i L_i` as a dense matrix.
pub fn total_convolution_operator(impulse: &ImpulseParams, grid: &TimeGrid) -> DMatrix<f64> {
    (0..impulse.n_modes()).fold(DMatrix::zeros(grid.n_steps, grid.n_steps), |acc, i| {
        acc + convolution_operator(impulse, i, grid)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThermalResponse {
    /// One series per thermal mode.
    pub modes: Vec<Vec<f64>>,
    /// Surface temperature anomaly `T = Σ S_i`.
    pub total: Vec<f64>,
}

pub fn thermal_response(
    forcing: &[f64],
    impulse: &ImpulseParams,
    grid: &TimeGrid,
) -> Result<ThermalResponse> {
    if forcing.len() != grid.n_steps {
        return Err(Error::DimensionMismatch(format!(
            "forcing has {} steps, grid has {}",
            forcing.len(),
            grid.n_steps
        )));
    }
    let filter = ConvolutionFilter::new(impulse, grid.step);
    let modes: Vec<Vec<f64>> = (0..filter.n_modes())
        .map(|i| filter.apply_mode(i, forcing))
        .collect();
    let total = (0..grid.n_steps)
        .map(|a| modes.iter().map(|s| s[a]).sum())
        .collect();
    Ok(ThermalResponse { modes, total })
}
