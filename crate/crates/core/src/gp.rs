//! Prior assembly over stacked scenarios and exact Gaussian inference.

use std::collections::HashMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ebm::{thermal_response, ConvolutionFilter};
use crate::error::{Error, Result};
use crate::exec;
use crate::kernels::{forcing_gram, internal_variability_gram, propagate_both, GramMatrix};
use crate::linalg::{
    factorize, gaussian_log_density, select_block, select_entries, symmetrize, Factor, JitterLadder,
};
use crate::model::EmulatorParams;
use crate::scenario::{Scenario, Standardization};

/// Identifies one row of a stacked prior.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowKey {
    pub scenario: String,
    pub year: i32,
}

impl RowKey {
    pub fn new(scenario: &str, year: i32) -> Self {
        Self {
            scenario: scenario.to_string(),
            year,
        }
    }
}

/// Observed temperature rows stacked over the training scenarios.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// Full training scenarios; their whole grids enter the prior.
    pub scenarios: Vec<Scenario>,
    pub keys: Vec<RowKey>,
    pub values: DVector<f64>,
    /// Raw kernel inputs of the observed rows (`n × d`).
    pub emissions: DMatrix<f64>,
    pub times: Vec<f64>,
    pub boundaries: Vec<(String, Range<usize>)>,
    pub standardization: Standardization,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// Forcing-side blocks of the joint prior.
#[derive(Debug, Clone, PartialEq)]
pub struct ForcingPrior {
    pub mean: DVector<f64>,
    /// `K`.
    pub gram: DMatrix<f64>,
    /// `Cov(F, T) = K Lᵀ`.
    pub cross: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct GPPrior {
    pub index: Vec<RowKey>,
    pub segments: Vec<(String, Range<usize>)>,
    pub mean: DVector<f64>,
    /// `L K Lᵀ`.
    pub physics_gram: GramMatrix,
    /// `Γ`, block-diagonal over scenarios.
    pub variability_gram: GramMatrix,
    pub sigma: f64,
    pub ladder: JitterLadder,
    pub forcing: Option<ForcingPrior>,
    lookup: HashMap<RowKey, usize>,
}

fn segments_of(index: &[RowKey]) -> Vec<(String, Range<usize>)> {
    let mut out: Vec<(String, Range<usize>)> = Vec::new();
    for (i, key) in index.iter().enumerate() {
        match out.last_mut() {
            Some((name, range)) if *name == key.scenario => range.end = i + 1,
            _ => out.push((key.scenario.clone(), i..i + 1)),
        }
    }
    out
}

impl GPPrior {
    /// Assembles a prior from explicit blocks.
    pub fn from_parts(
        index: Vec<RowKey>,
        mean: DVector<f64>,
        physics_gram: DMatrix<f64>,
        variability_gram: DMatrix<f64>,
        sigma: f64,
        ladder: JitterLadder,
    ) -> Result<Self> {
        let n = index.len();
        if mean.len() != n || physics_gram.shape() != (n, n) || variability_gram.shape() != (n, n) {
            return Err(Error::DimensionMismatch(format!(
                "prior blocks do not match an index of {n} rows"
            )));
        }
        let lookup: HashMap<RowKey, usize> = index
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, k)| (k, i))
            .collect();
        if lookup.len() != n {
            return Err(Error::InvalidParameter(
                "duplicate row keys in prior index".into(),
            ));
        }
        Ok(Self {
            segments: segments_of(&index),
            index,
            mean,
            physics_gram: GramMatrix::new(physics_gram),
            variability_gram: GramMatrix::new(variability_gram),
            sigma,
            ladder,
            forcing: None,
            lookup,
        })
    }

    pub fn with_forcing(mut self, forcing: ForcingPrior) -> Result<Self> {
        let n = self.len();
        if forcing.mean.len() != n
            || forcing.gram.shape() != (n, n)
            || forcing.cross.shape() != (n, n)
        {
            return Err(Error::DimensionMismatch(
                "forcing blocks do not match the index".into(),
            ));
        }
        self.forcing = Some(forcing);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn row(&self, key: &RowKey) -> Result<usize> {
        self.lookup
            .get(key)
            .copied()
            .ok_or_else(|| Error::UnknownRow {
                scenario: key.scenario.clone(),
                year: key.year,
            })
    }

    pub fn rows(&self, keys: &[RowKey]) -> Result<Vec<usize>> {
        keys.iter().map(|k| self.row(k)).collect()
    }

    /// Keys of every row of one scenario, in time order.
    pub fn segment_keys(&self, scenario: &str) -> Result<Vec<RowKey>> {
        self.segments
            .iter()
            .find(|(name, _)| name == scenario)
            .map(|(_, r)| self.index[r.clone()].to_vec())
            .ok_or_else(|| Error::UnknownScenario(scenario.to_string()))
    }

    /// `σ² Γ`.
    pub fn noise(&self) -> DMatrix<f64> {
        &self.variability_gram.values * (self.sigma * self.sigma)
    }

    /// `σ² Γ` restricted to the given keys.
    pub fn noise_block(&self, keys: &[RowKey]) -> Result<DMatrix<f64>> {
        let rows = self.rows(keys)?;
        let s2 = self.sigma * self.sigma;
        Ok(select_block(&self.variability_gram.values, &rows, &rows) * s2)
    }
}

/// Standardized kernel inputs of every row of `scenarios`, stacked.
pub fn kernel_inputs(
    scenarios: &[Scenario],
    params: &EmulatorParams,
    standardization: &Standardization,
) -> DMatrix<f64> {
    let d = params.agents.len();
    let n: usize = scenarios.iter().map(Scenario::n_steps).sum();
    let mut e = DMatrix::zeros(n, d);
    let mut offset = 0;
    for s in scenarios {
        for j in 0..d {
            for (i, v) in s.emissions[j].iter().enumerate() {
                e[(offset + i, j)] = if params.kernel.standardize_inputs {
                    (v - standardization.mean[j]) / standardization.scale[j]
                } else {
                    *v
                };
            }
        }
        offset += s.n_steps();
    }
    e
}

/// Joint prior over every row of `scenarios`.
pub fn build_prior(
    scenarios: &[Scenario],
    params: &EmulatorParams,
    standardization: &Standardization,
) -> Result<GPPrior> {
    params.validate()?;
    if let Some(first) = scenarios.first() {
        if let Some(s) = scenarios.iter().find(|s| s.grid.step != first.grid.step) {
            return Err(Error::GridMismatch(format!(
                "scenario `{}` has step {}, `{}` has {}",
                s.name, s.grid.step, first.name, first.grid.step
            )));
        }
    }
    for s in scenarios {
        s.check_agents(&params.agents)?;
    }
    if standardization.mean.len() != params.agents.len() {
        return Err(Error::Incompatible(format!(
            "standardization has {} agents, model has {}",
            standardization.mean.len(),
            params.agents.len()
        )));
    }
    let step = scenarios.first().map_or(1.0, |s| s.grid.step);
    let n: usize = scenarios.iter().map(Scenario::n_steps).sum();

    let mut index = Vec::with_capacity(n);
    let mut segments = Vec::with_capacity(scenarios.len());
    let mut mean = DVector::zeros(n);
    let mut forcing_mean = DVector::zeros(n);
    let mut variability = DMatrix::zeros(n, n);
    let mut offset = 0;
    for s in scenarios {
        let m = s.n_steps();
        let forcing = s.forcing(&params.forcing, &params.concentration_scales)?;
        let response = thermal_response(&forcing, &params.impulse, &s.grid)?;
        mean.rows_mut(offset, m).copy_from_slice(&response.total);
        forcing_mean.rows_mut(offset, m).copy_from_slice(&forcing);
        let gamma = internal_variability_gram(&params.impulse, &s.grid, params.variability);
        variability
            .view_mut((offset, offset), (m, m))
            .copy_from(&gamma);
        index.extend(s.years().into_iter().map(|y| RowKey::new(&s.name, y)));
        segments.push(offset..offset + m);
        offset += m;
    }

    let inputs = kernel_inputs(scenarios, params, standardization);
    let k = forcing_gram(&inputs, &inputs, &params.kernel)?;
    let filter = ConvolutionFilter::new(&params.impulse, step);
    let (physics, cross) = propagate_both(&k, &filter, &segments);

    GPPrior::from_parts(
        index,
        mean,
        physics,
        variability,
        params.impulse.variability_amplitude,
        params.jitter.clone(),
    )?
    .with_forcing(ForcingPrior {
        mean: forcing_mean,
        gram: k,
        cross,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDistribution {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub index: Vec<RowKey>,
}

impl PosteriorDistribution {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.covariance
            .diagonal()
            .iter()
            .map(|v| v.max(0.0))
            .collect()
    }
}

/// Factorises `signal[r, r] + noise[r, r]` for the training rows `r`.
pub fn training_factor(
    signal: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    ladder: &JitterLadder,
    train: &[usize],
) -> Result<Factor> {
    let a = select_block(signal, train, train) + select_block(noise, train, train);
    factorize(&a, ladder)
}

/// Conditions the latent Gaussian `N(mean, signal)` on observations
/// `values = latent[train] + noise`, and returns the posterior over `test`.
pub fn condition_on(
    mean: &DVector<f64>,
    signal: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    ladder: &JitterLadder,
    train: &[usize],
    values: &DVector<f64>,
    test: &[usize],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if values.len() != train.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: train.len(),
        });
    }
    let prior_mean = select_entries(mean, test);
    let prior_cov = select_block(signal, test, test);
    if train.is_empty() {
        return Ok((prior_mean, prior_cov));
    }
    conditioned(
        prior_mean,
        prior_cov,
        &select_block(signal, train, test),
        &training_factor(signal, noise, ladder, train)?,
        &(values - select_entries(mean, train)),
    )
}

/// `mean + Cᵀ A⁻¹ r` and `cov − Cᵀ A⁻¹ C` with `C` the train × test
/// cross-covariance.
fn conditioned(
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    cross: &DMatrix<f64>,
    factor: &Factor,
    residual: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let alpha = factor.solve(residual);
    let mean = prior_mean + cross.tr_mul(&alpha);
    let w = factor.solve_lower(cross);
    let mut cov = prior_cov - w.tr_mul(&w);
    symmetrize(&mut cov);
    Ok((mean, cov))
}

fn check_training(prior: &GPPrior, train: &TrainingSet) -> Result<Vec<usize>> {
    if train.values.len() != train.keys.len() {
        return Err(Error::LengthMismatch {
            left: train.values.len(),
            right: train.keys.len(),
        });
    }
    prior.rows(&train.keys)
}

/// Posterior over the latent temperature at `test`.
pub fn posterior_temperature(
    prior: &GPPrior,
    train: &TrainingSet,
    test: &[RowKey],
) -> Result<PosteriorDistribution> {
    let r = check_training(prior, train)?;
    let s = prior.rows(test)?;
    let (mean, covariance) = condition_on(
        &prior.mean,
        &prior.physics_gram.values,
        &prior.noise(),
        &prior.ladder,
        &r,
        &train.values,
        &s,
    )?;
    Ok(PosteriorDistribution {
        mean,
        covariance,
        index: test.to_vec(),
    })
}

/// Posterior over the effective radiative forcing at `test`.
pub fn posterior_forcing(
    prior: &GPPrior,
    train: &TrainingSet,
    test: &[RowKey],
) -> Result<PosteriorDistribution> {
    let forcing = prior
        .forcing
        .as_ref()
        .ok_or_else(|| Error::Incompatible("prior carries no forcing blocks".into()))?;
    let r = check_training(prior, train)?;
    let s = prior.rows(test)?;
    let prior_mean = select_entries(&forcing.mean, &s);
    let prior_cov = select_block(&forcing.gram, &s, &s);
    let (mean, covariance) = if r.is_empty() {
        (prior_mean, prior_cov)
    } else {
        // Cov(T[r], F[s]) = (K Lᵀ)[s, r]ᵀ
        let cross = select_block(&forcing.cross, &s, &r).transpose();
        conditioned(
            prior_mean,
            prior_cov,
            &cross,
            &training_factor(
                &prior.physics_gram.values,
                &prior.noise(),
                &prior.ladder,
                &r,
            )?,
            &(&train.values - select_entries(&prior.mean, &r)),
        )?
    };
    Ok(PosteriorDistribution {
        mean,
        covariance,
        index: test.to_vec(),
    })
}

/// `log p(T | E, t)` of the training rows under the prior. Zero for an
/// empty training set.
pub fn marginal_log_likelihood(prior: &GPPrior, train: &TrainingSet) -> Result<f64> {
    let r = check_training(prior, train)?;
    if r.is_empty() {
        return Ok(0.0);
    }
    let factor = training_factor(
        &prior.physics_gram.values,
        &prior.noise(),
        &prior.ladder,
        &r,
    )?;
    let residual = &train.values - select_entries(&prior.mean, &r);
    let ll = gaussian_log_density(&factor, &residual);
    if !ll.is_finite() {
        return Err(Error::NonFinite(format!("marginal log-likelihood is {ll}")));
    }
    Ok(ll)
}

/// Tries an exact factorisation before falling back to the default ladder.
pub fn density_ladder() -> JitterLadder {
    JitterLadder {
        rungs: vec![0.0, 1e-6, 1e-5, 1e-4],
    }
}

fn predictive_covariance(
    posterior: &PosteriorDistribution,
    extra: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let m = posterior.len();
    match extra {
        Some(e) if e.shape() != (m, m) => Err(Error::DimensionMismatch(format!(
            "extra covariance {:?} for {m} rows",
            e.shape()
        ))),
        Some(e) => Ok(&posterior.covariance + e),
        None => Ok(posterior.covariance.clone()),
    }
}

/// `log N(values; m̄, K̄ + extra)`; `extra` is typically `σ² Γ*`.
pub fn predictive_log_density(
    posterior: &PosteriorDistribution,
    values: &DVector<f64>,
    extra: Option<&DMatrix<f64>>,
) -> Result<f64> {
    if values.len() != posterior.len() {
        return Err(Error::LengthMismatch {
            left: values.len(),
            right: posterior.len(),
        });
    }
    let cov = predictive_covariance(posterior, extra)?;
    let factor = factorize(&cov, &density_ladder())?;
    Ok(gaussian_log_density(&factor, &(values - &posterior.mean)))
}

/// `count × m` draws from `N(m̄, K̄ + extra)`; draw `i` uses stream `i` of
/// a ChaCha generator seeded with `seed`.
pub fn sample_posterior(
    posterior: &PosteriorDistribution,
    count: usize,
    seed: u64,
    extra: Option<&DMatrix<f64>>,
) -> Result<DMatrix<f64>> {
    let m = posterior.len();
    let cov = predictive_covariance(posterior, extra)?;
    let root = psd_square_root(&cov)?;
    let draws = exec::map_indices(count, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let z = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng));
        &posterior.mean + &root * z
    });
    let mut out = DMatrix::zeros(count, m);
    for (i, d) in draws.iter().enumerate() {
        out.row_mut(i).copy_from(&d.transpose());
    }
    Ok(out)
}

/// `V diag(√λ)` from the symmetric eigendecomposition. Small negative
/// eigenvalues from round-off are clamped to zero.
pub fn psd_square_root(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = cov.nrows();
    if m == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance has non-finite entries".into()));
    }
    let eig = SymmetricEigen::new(cov.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-8 * scale.max(f64::MIN_POSITIVE);
    if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
        if min < -tol {
            return Err(Error::SingularGram { jitter: 0.0 });
        }
    }
    let mut root = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        root.column_mut(j).scale_mut(s);
    }
    Ok(root)
}
