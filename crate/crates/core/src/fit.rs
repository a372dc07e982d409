//! Marginal-likelihood maximisation over kernel, noise and EBM parameters.
//!
//! Positive parameters are optimised on a log scale; forcing coefficients
//! on their natural scale. Kernel lengthscales, kernel variance and `σ` have
//! analytic gradients; the rest use central finite differences.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ebm::ConvolutionFilter;
use crate::error::{Error, Result};
use crate::gp::{
    build_prior, kernel_inputs, marginal_log_likelihood, training_factor, TrainingSet,
};
use crate::kernels::{forcing_gram_with_gradients, propagate_both};
use crate::linalg::{gaussian_log_density, select_block, select_entries};
use crate::model::{EmulatorParams, FitSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Param {
    Lengthscale(usize),
    KernelVariance,
    Sigma,
    Timescale(usize),
    EquilibriumResponse(usize),
    AlphaLog(usize),
    AlphaLin(usize),
    AlphaSqrt(usize),
}

impl Param {
    fn is_log(self) -> bool {
        !matches!(
            self,
            Param::AlphaLog(_) | Param::AlphaLin(_) | Param::AlphaSqrt(_)
        )
    }

    fn is_analytic(self) -> bool {
        matches!(
            self,
            Param::Lengthscale(_) | Param::KernelVariance | Param::Sigma
        )
    }

    fn natural(self, p: &EmulatorParams) -> f64 {
        match self {
            Param::Lengthscale(i) => p.kernel.lengthscales[i],
            Param::KernelVariance => p.kernel.variance,
            Param::Sigma => p.impulse.variability_amplitude,
            Param::Timescale(i) => p.impulse.timescales[i],
            Param::EquilibriumResponse(i) => p.impulse.equilibrium_responses[i],
            Param::AlphaLog(i) => p.forcing.agents[i].alpha_log,
            Param::AlphaLin(i) => p.forcing.agents[i].alpha_lin,
            Param::AlphaSqrt(i) => p.forcing.agents[i].alpha_sqrt,
        }
    }

    /// Value in optimiser coordinates.
    pub fn get(self, p: &EmulatorParams) -> f64 {
        let v = self.natural(p);
        if self.is_log() {
            v.ln()
        } else {
            v
        }
    }

    pub fn set(self, p: &mut EmulatorParams, x: f64) {
        let v = if self.is_log() { x.exp() } else { x };
        match self {
            Param::Lengthscale(i) => p.kernel.lengthscales[i] = v,
            Param::KernelVariance => p.kernel.variance = v,
            Param::Sigma => p.impulse.variability_amplitude = v,
            Param::Timescale(i) => p.impulse.timescales[i] = v,
            Param::EquilibriumResponse(i) => p.impulse.equilibrium_responses[i] = v,
            Param::AlphaLog(i) => p.forcing.agents[i].alpha_log = v,
            Param::AlphaLin(i) => p.forcing.agents[i].alpha_lin = v,
            Param::AlphaSqrt(i) => p.forcing.agents[i].alpha_sqrt = v,
        }
    }

    pub fn label(self, p: &EmulatorParams) -> String {
        let agent = |i: usize| p.agents[i].name.as_str();
        match self {
            Param::Lengthscale(i) => format!("lengthscale:{}", agent(i)),
            Param::KernelVariance => "kernel_variance".into(),
            Param::Sigma => "sigma".into(),
            Param::Timescale(i) => format!("timescale:{i}"),
            Param::EquilibriumResponse(i) => format!("equilibrium_response:{i}"),
            Param::AlphaLog(i) => format!("alpha_log:{}", agent(i)),
            Param::AlphaLin(i) => format!("alpha_lin:{}", agent(i)),
            Param::AlphaSqrt(i) => format!("alpha_sqrt:{}", agent(i)),
        }
    }
}

/// Ordered set of free parameters.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParameterMask {
    pub params: Vec<Param>,
}

impl ParameterMask {
    pub fn none() -> Self {
        Self::default()
    }

    /// Lengthscales, kernel variance and `σ`.
    pub fn kernel_and_noise(p: &EmulatorParams) -> Self {
        let mut params: Vec<Param> = (0..p.kernel.dim()).map(Param::Lengthscale).collect();
        params.push(Param::KernelVariance);
        params.push(Param::Sigma);
        Self { params }
    }

    /// Parses names such as `lengthscale`, `lengthscale:co2`, `sigma`,
    /// `kernel_variance`, `timescale:0` or `alpha_lin:so2`. A family name
    /// without a suffix frees every member of the family.
    pub fn parse(names: &[String], p: &EmulatorParams) -> Result<Self> {
        let mut params = Vec::new();
        let agent_index = |name: &str, agent: &str| {
            p.agents
                .iter()
                .position(|a| a.name == agent)
                .ok_or_else(|| {
                    Error::InvalidParameter(format!("unknown agent `{agent}` in `{name}`"))
                })
        };
        let mode_index = |name: &str, s: &str| -> Result<usize> {
            s.parse::<usize>()
                .ok()
                .filter(|i| *i < p.impulse.n_modes())
                .ok_or_else(|| Error::InvalidParameter(format!("bad mode index in `{name}`")))
        };
        for name in names {
            let (family, arg) = match name.split_once(':') {
                Some((f, a)) => (f, Some(a)),
                None => (name.as_str(), None),
            };
            let d = p.agents.len();
            let k = p.impulse.n_modes();
            let found: Vec<Param> = match (family, arg) {
                ("kernel_variance", None) => vec![Param::KernelVariance],
                ("sigma", None) => vec![Param::Sigma],
                ("lengthscale", None) => (0..d).map(Param::Lengthscale).collect(),
                ("lengthscale", Some(a)) => vec![Param::Lengthscale(agent_index(name, a)?)],
                ("timescale", None) => (0..k).map(Param::Timescale).collect(),
                ("timescale", Some(i)) => vec![Param::Timescale(mode_index(name, i)?)],
                ("equilibrium_response", None) => (0..k).map(Param::EquilibriumResponse).collect(),
                ("equilibrium_response", Some(i)) => {
                    vec![Param::EquilibriumResponse(mode_index(name, i)?)]
                }
                ("alpha_log", None) => (0..d).map(Param::AlphaLog).collect(),
                ("alpha_log", Some(a)) => vec![Param::AlphaLog(agent_index(name, a)?)],
                ("alpha_lin", None) => (0..d).map(Param::AlphaLin).collect(),
                ("alpha_lin", Some(a)) => vec![Param::AlphaLin(agent_index(name, a)?)],
                ("alpha_sqrt", None) => (0..d).map(Param::AlphaSqrt).collect(),
                ("alpha_sqrt", Some(a)) => vec![Param::AlphaSqrt(agent_index(name, a)?)],
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown parameter `{name}`"
                    )))
                }
            };
            for f in found {
                if !params.contains(&f) {
                    params.push(f);
                }
            }
        }
        Ok(Self { params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn values(&self, p: &EmulatorParams) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.params.iter().map(|q| q.get(p)))
    }

    pub fn apply(&self, p: &mut EmulatorParams, x: &DVector<f64>) {
        for (q, v) in self.params.iter().zip(x.iter()) {
            q.set(p, *v);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Randomised starts in addition to the initial point.
    pub restarts: usize,
    pub max_iterations: usize,
    pub seed: u64,
    /// Half-width of the uniform perturbation of restart points (in
    /// optimiser coordinates).
    pub perturbation: f64,
    pub gradient_tolerance: f64,
    pub value_tolerance: f64,
    /// Largest step (infinity norm) per iteration.
    pub max_step: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            max_iterations: 100,
            seed: 0,
            perturbation: 1.0,
            gradient_tolerance: 1e-5,
            value_tolerance: 1e-10,
            max_step: 2.0,
        }
    }
}

impl From<&FitSettings> for OptimizerConfig {
    fn from(s: &FitSettings) -> Self {
        Self {
            restarts: s.restarts,
            max_iterations: s.max_iterations,
            seed: s.seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub start: usize,
    pub iteration: usize,
    pub mll: f64,
    /// Best value seen so far over every start.
    pub best_mll: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: EmulatorParams,
    pub initial_mll: f64,
    pub final_mll: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub trace: Vec<TraceEntry>,
}

fn mll_at(train: &TrainingSet, params: &EmulatorParams) -> Result<f64> {
    let prior = build_prior(&train.scenarios, params, &train.standardization)?;
    marginal_log_likelihood(&prior, train)
}

/// MLL of the training rows and its gradient with respect to the masked
/// parameters in optimiser coordinates.
pub fn mll_and_gradient(
    train: &TrainingSet,
    params: &EmulatorParams,
    mask: &ParameterMask,
) -> Result<(f64, DVector<f64>)> {
    let prior = build_prior(&train.scenarios, params, &train.standardization)?;
    let r = prior.rows(&train.keys)?;
    let mut grad = DVector::zeros(mask.len());
    if r.is_empty() {
        return Ok((0.0, grad));
    }
    let noise = prior.noise();
    let factor = training_factor(&prior.physics_gram.values, &noise, &prior.ladder, &r)?;
    let residual = &train.values - select_entries(&prior.mean, &r);
    let mll = gaussian_log_density(&factor, &residual);
    if !mll.is_finite() {
        return Err(Error::NonFinite(format!(
            "marginal log-likelihood is {mll}"
        )));
    }

    if mask.params.iter().any(|p| p.is_analytic()) {
        let alpha = factor.solve(&residual);
        let inv = factor.inverse();
        let alpha_sq = alpha.norm_squared();
        let inv_trace = inv.trace();
        let n = r.len() as f64;
        // ½(αᵀDα − tr(A⁻¹D)), where the jitter rung adds rel·mean(diag D)·I
        let contribution = |d: &DMatrix<f64>| {
            let quad = alpha.dot(&(d * &alpha));
            let trace: f64 = inv.component_mul(d).sum();
            let shift = factor.relative_jitter * d.trace() / n;
            0.5 * (quad - trace + shift * (alpha_sq - inv_trace))
        };
        let lengthscale_grams = if mask
            .params
            .iter()
            .any(|p| matches!(p, Param::Lengthscale(_)))
        {
            let inputs = kernel_inputs(&train.scenarios, params, &train.standardization);
            let (_, dk) = forcing_gram_with_gradients(&inputs, &params.kernel)?;
            let step = train.scenarios.first().map_or(1.0, |s| s.grid.step);
            let filter = ConvolutionFilter::new(&params.impulse, step);
            let segments: Vec<_> = prior.segments.iter().map(|(_, s)| s.clone()).collect();
            Some(
                dk.iter()
                    .map(|g| select_block(&propagate_both(g, &filter, &segments).0, &r, &r))
                    .collect::<Vec<_>>(),
            )
        } else {
            None
        };
        for (slot, p) in mask.params.iter().enumerate() {
            grad[slot] = match p {
                Param::Lengthscale(i) => {
                    contribution(&lengthscale_grams.as_ref().expect("computed above")[*i])
                }
                Param::KernelVariance => {
                    contribution(&select_block(&prior.physics_gram.values, &r, &r))
                }
                Param::Sigma => contribution(&(select_block(&noise, &r, &r) * 2.0)),
                _ => continue,
            };
        }
    }

    for (slot, p) in mask.params.iter().enumerate() {
        if !p.is_analytic() {
            grad[slot] = finite_difference(train, params, *p)?;
        }
    }
    Ok((mll, grad))
}

fn finite_difference(train: &TrainingSet, params: &EmulatorParams, p: Param) -> Result<f64> {
    let x = p.get(params);
    let h = 1e-5 * x.abs().max(1.0);
    let mut plus = params.clone();
    p.set(&mut plus, x + h);
    let mut minus = params.clone();
    p.set(&mut minus, x - h);
    Ok((mll_at(train, &plus)? - mll_at(train, &minus)?) / (2.0 * h))
}

struct Objective<'a> {
    train: &'a TrainingSet,
    base: &'a EmulatorParams,
    mask: &'a ParameterMask,
    evaluations: usize,
}

impl Objective<'_> {
    /// Negative MLL and gradient, or `None` where the model is degenerate.
    fn eval(&mut self, x: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        self.evaluations += 1;
        if x.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut p = self.base.clone();
        self.mask.apply(&mut p, x);
        match mll_and_gradient(self.train, &p, self.mask) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Some((-f, -g)),
            _ => None,
        }
    }
}

struct StartOutcome {
    x: DVector<f64>,
    value: f64,
    iterations: usize,
}

fn bfgs(
    objective: &mut Objective<'_>,
    x0: DVector<f64>,
    config: &OptimizerConfig,
    start: usize,
    trace: &mut Vec<TraceEntry>,
    best: &mut f64,
) -> Option<StartOutcome> {
    let (mut f, mut g) = objective.eval(&x0)?;
    let mut x = x0;
    let n = x.len();
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first_update = true;
    let mut record = |iteration: usize, f: f64, trace: &mut Vec<TraceEntry>| {
        *best = best.max(-f);
        trace.push(TraceEntry {
            start,
            iteration,
            mll: -f,
            best_mll: *best,
        });
    };
    record(0, f, trace);
    let mut iterations = 0;
    while iterations < config.max_iterations {
        if g.amax() < config.gradient_tolerance {
            break;
        }
        let mut p = -(&h * &g);
        if p.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            p = -g.clone();
        }
        let longest = p.amax();
        if longest > config.max_step {
            p *= config.max_step / longest;
        }
        let slope = p.dot(&g);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn = &x + &p * t;
            if let Some((fnew, gnew)) = objective.eval(&xn) {
                if fnew <= f + 1e-4 * t * slope {
                    accepted = Some((xn, fnew, gnew));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        iterations += 1;
        let s = &xn - &x;
        let y = &gnew - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if first_update {
                h = DMatrix::identity(n, n) * (sy / y.norm_squared());
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let improvement = f - fnew;
        x = xn;
        f = fnew;
        g = gnew;
        record(iterations, f, trace);
        if improvement <= config.value_tolerance * (1.0 + f.abs()) {
            break;
        }
    }
    Some(StartOutcome {
        x,
        value: -f,
        iterations,
    })
}

/// Maximises the marginal likelihood of `train` over the parameters in
/// `mask`, starting from `initial` and from `config.restarts` perturbed
/// copies of it. The prior is rebuilt from `train.scenarios` at each
/// evaluation.
pub fn fit_hyperparameters(
    train: &TrainingSet,
    initial: &EmulatorParams,
    mask: &ParameterMask,
    config: &OptimizerConfig,
) -> Result<FitResult> {
    initial.validate()?;
    if mask.is_empty() {
        let mll = mll_at(train, initial)?;
        return Ok(FitResult {
            params: initial.clone(),
            initial_mll: mll,
            final_mll: mll,
            iterations: 0,
            evaluations: 1,
            trace: Vec::new(),
        });
    }
    if mask.params.contains(&Param::Sigma) && initial.impulse.variability_amplitude <= 0.0 {
        return Err(Error::InvalidParameter(
            "sigma must be positive to be optimised on a log scale".into(),
        ));
    }
    let x0 = mask.values(initial);
    let mut objective = Objective {
        train,
        base: initial,
        mask,
        evaluations: 0,
    };
    let initial_mll = match objective.eval(&x0) {
        Some((f, _)) => -f,
        None => {
            return Err(Error::NonFinite(
                "marginal log-likelihood is not finite at the initial parameters".into(),
            ))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    let mut best_seen = f64::NEG_INFINITY;
    let mut best: Option<StartOutcome> = None;
    let mut iterations = 0;
    for start in 0..=config.restarts {
        let mut x = x0.clone();
        if start > 0 {
            for (v, p) in x.iter_mut().zip(&mask.params) {
                let u: f64 = rng.random_range(-1.0..1.0);
                if p.is_log() {
                    *v += config.perturbation * u;
                } else {
                    *v += config.perturbation * u * v.abs().max(1e-3) * 0.5;
                }
            }
        }
        if let Some(out) = bfgs(&mut objective, x, config, start, &mut trace, &mut best_seen) {
            iterations += out.iterations;
            if best.as_ref().is_none_or(|b| out.value > b.value) {
                best = Some(out);
            }
        }
    }
    let best = best.ok_or_else(|| Error::NonFinite("every optimisation start failed".into()))?;
    let mut params = initial.clone();
    mask.apply(&mut params, &best.x);
    Ok(FitResult {
        params,
        initial_mll,
        final_mll: best.value,
        iterations,
        evaluations: objective.evaluations,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebm::{AgentForcing, ForcingParams, ImpulseParams, TimeGrid};
    use crate::gp::{sample_posterior, PosteriorDistribution};
    use crate::kernels::{KernelConfig, MaternFamily, VariabilityMode};
    use crate::linalg::JitterLadder;
    use crate::scenario::{assemble_training_set, AgentSpec, InputMode, Scenario};

    fn params() -> EmulatorParams {
        EmulatorParams {
            agents: vec![AgentSpec {
                name: "co2".into(),
                input_mode: InputMode::Emission,
                unit: String::new(),
            }],
            forcing: ForcingParams {
                agents: vec![AgentForcing {
                    name: "co2".into(),
                    alpha_log: 0.0,
                    alpha_lin: 0.5,
                    alpha_sqrt: 0.0,
                    preindustrial: 0.0,
                }],
            },
            concentration_scales: vec![1.0],
            impulse: ImpulseParams::new(vec![4.0, 200.0], vec![0.3, 0.4], 0.3).unwrap(),
            kernel: KernelConfig::new(MaternFamily::Matern32, vec![0.7], 2.0).unwrap(),
            variability: VariabilityMode::LongTime,
            jitter: JitterLadder::default(),
        }
    }

    fn scenario(name: &str, phase: f64, tas: Option<Vec<f64>>) -> Scenario {
        let n = 30;
        Scenario {
            name: name.into(),
            grid: TimeGrid::annual(2000, n).unwrap(),
            agents: params().agents,
            emissions: vec![(0..n)
                .map(|i| (i as f64 * 0.2 + phase).sin() * 2.0)
                .collect()],
            concentrations: vec![None],
            global_temperature: Some(
                tas.unwrap_or_else(|| (0..n).map(|i| (i as f64 * 0.1).cos() * 0.3).collect())
                    .into_iter()
                    .map(Some)
                    .collect(),
            ),
            spatial: None,
        }
    }

    fn training() -> TrainingSet {
        let s = vec![scenario("a", 0.0, None), scenario("b", 1.3, None)];
        assemble_training_set(&s, &[]).unwrap().0
    }

    #[test]
    fn mask_parsing() {
        let p = params();
        let m = ParameterMask::parse(&["lengthscale".into(), "sigma".into(), "sigma".into()], &p)
            .unwrap();
        assert_eq!(m.params, vec![Param::Lengthscale(0), Param::Sigma]);
        let m = ParameterMask::parse(&["timescale:1".into(), "alpha_lin:co2".into()], &p).unwrap();
        assert_eq!(m.params, vec![Param::Timescale(1), Param::AlphaLin(0)]);
        assert!(ParameterMask::parse(&["lengthscale:ch4".into()], &p).is_err());
        assert!(ParameterMask::parse(&["timescale:2".into()], &p).is_err());
        assert!(ParameterMask::parse(&["nope".into()], &p).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let train = training();
        let p = params();
        let mask = ParameterMask::kernel_and_noise(&p);
        let (_, g) = mll_and_gradient(&train, &p, &mask).unwrap();
        for (slot, q) in mask.params.iter().enumerate() {
            let fd = finite_difference(&train, &p, *q).unwrap();
            let rel = (g[slot] - fd).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "{q:?}: analytic {} vs fd {fd}", g[slot]);
        }
    }

    #[test]
    fn fixed_parameters_are_returned_unchanged() {
        let train = training();
        let p = params();
        let out = fit_hyperparameters(
            &train,
            &p,
            &ParameterMask::none(),
            &OptimizerConfig::default(),
        )
        .unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.iterations, 0);
    }

    #[test]
    fn fit_improves_and_trace_is_monotone() {
        // draw observations from the prior itself
        let p = params();
        let s = vec![scenario("a", 0.0, None), scenario("b", 1.3, None)];
        let prior = build_prior(&s, &p, &training().standardization).unwrap();
        let keys = prior.index.clone();
        let post = PosteriorDistribution {
            mean: prior.mean.clone(),
            covariance: prior.physics_gram.values.clone(),
            index: keys.clone(),
        };
        let draw = sample_posterior(&post, 1, 5, Some(&prior.noise())).unwrap();
        let s = vec![
            scenario(
                "a",
                0.0,
                Some(draw.row(0).columns(0, 30).iter().copied().collect()),
            ),
            scenario(
                "b",
                1.3,
                Some(draw.row(0).columns(30, 30).iter().copied().collect()),
            ),
        ];
        let train = assemble_training_set(&s, &[]).unwrap().0;
        let mut start = p.clone();
        start.kernel.lengthscales[0] = 3.0;
        start.impulse.variability_amplitude = 0.9;
        let cfg = OptimizerConfig {
            restarts: 1,
            ..OptimizerConfig::default()
        };
        let out = fit_hyperparameters(&train, &start, &ParameterMask::kernel_and_noise(&p), &cfg)
            .unwrap();
        assert!(out.final_mll >= out.initial_mll);
        assert!(out.trace.windows(2).all(|w| w[1].best_mll >= w[0].best_mll));
        assert!(out.iterations > 0);
    }

    #[test]
    fn ebm_parameters_use_finite_differences() {
        let train = training();
        let p = params();
        let mask = ParameterMask::parse(&["timescale:0".into(), "alpha_lin".into()], &p).unwrap();
        let (_, g) = mll_and_gradient(&train, &p, &mask).unwrap();
        assert!(g.iter().all(|v| v.is_finite() && *v != 0.0));
    }
}
