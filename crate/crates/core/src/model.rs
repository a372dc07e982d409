//! Emulator parameters and their TOML serialization.
//!
//! Configuration files and fitted model files share one grammar. A config is
//! a model file without `[standardization]`, `[summary]` or `[[training]]`.
//! Reals are written in shortest round-trip form, so save then load is exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::ebm::{
    diagonalize, AgentForcing, BoxModelParams, ForcingParams, ImpulseParams, TimeGrid,
};
use crate::error::{Error, Result};
use crate::kernels::{KernelConfig, MaternFamily, VariabilityMode};
use crate::linalg::JitterLadder;
use crate::scenario::{AgentSpec, InputMode, Scenario, SpatialField, Standardization};
use crate::spatial::SpatialGrid;

pub const FORMAT: &str = "fairgp-model";
pub const VERSION: u32 = 1;

/// Everything needed to build a prior.
#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorParams {
    pub agents: Vec<AgentSpec>,
    pub forcing: ForcingParams,
    /// Slopes of the linear concentration rule, used for agents whose
    /// scenarios carry no concentration series.
    pub concentration_scales: Vec<f64>,
    /// Thermal modes and `σ`.
    pub impulse: ImpulseParams,
    pub kernel: KernelConfig,
    pub variability: VariabilityMode,
    pub jitter: JitterLadder,
}

impl EmulatorParams {
    pub fn validate(&self) -> Result<()> {
        let d = self.agents.len();
        if self.forcing.agents.len() != d
            || self.concentration_scales.len() != d
            || self.kernel.dim() != d
        {
            return Err(Error::InvalidParameter(format!(
                "{d} agents but {} forcing entries, {} concentration scales and {} lengthscales",
                self.forcing.agents.len(),
                self.concentration_scales.len(),
                self.kernel.dim()
            )));
        }
        for (a, f) in self.agents.iter().zip(&self.forcing.agents) {
            if a.name != f.name {
                return Err(Error::InvalidParameter(format!(
                    "agent `{}` paired with forcing entry `{}`",
                    a.name, f.name
                )));
            }
        }
        self.forcing.validate()?;
        self.kernel.validate()?;
        let imp = &self.impulse;
        if imp.timescales.is_empty() || imp.timescales.len() != imp.equilibrium_responses.len() {
            return Err(Error::InvalidParameter(
                "thermal modes are inconsistent".into(),
            ));
        }
        let finite_positive = |v: &f64| *v > 0.0 && v.is_finite();
        if !imp.timescales.iter().all(finite_positive)
            || !imp.equilibrium_responses.iter().all(finite_positive)
        {
            return Err(Error::InvalidParameter(
                "timescales and equilibrium responses must be positive".into(),
            ));
        }
        if !(imp.variability_amplitude >= 0.0 && imp.variability_amplitude.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "variability amplitude {} must be non-negative",
                imp.variability_amplitude
            )));
        }
        if self.jitter.rungs.is_empty() {
            return Err(Error::InvalidParameter("jitter ladder is empty".into()));
        }
        Ok(())
    }
}

/// Optimiser settings carried in the `[fit]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSettings {
    #[serde(default = "FitSettings::default_free")]
    pub free: Vec<String>,
    #[serde(default = "FitSettings::default_restarts")]
    pub restarts: usize,
    #[serde(default = "FitSettings::default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default)]
    pub seed: u64,
}

impl FitSettings {
    fn default_free() -> Vec<String> {
        vec![
            "lengthscale".into(),
            "kernel_variance".into(),
            "sigma".into(),
        ]
    }
    fn default_restarts() -> usize {
        5
    }
    fn default_max_iterations() -> usize {
        100
    }
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            free: Self::default_free(),
            restarts: Self::default_restarts(),
            max_iterations: Self::default_max_iterations(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSummary {
    pub initial_mll: f64,
    pub final_mll: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

/// A configuration or fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: EmulatorParams,
    pub fit: FitSettings,
    pub standardization: Option<Standardization>,
    pub summary: Option<FitSummary>,
    /// Scenarios the model was conditioned on.
    pub training: Vec<Scenario>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    #[serde(default)]
    variability: VariabilityMode,
    agents: Vec<AgentEntry>,
    ebm: EbmEntry,
    kernel: KernelEntry,
    #[serde(default)]
    jitter: JitterLadder,
    #[serde(default)]
    fit: FitSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    standardization: Option<Standardization>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    summary: Option<FitSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    training: Vec<TrainingEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentEntry {
    name: String,
    mode: InputMode,
    #[serde(default)]
    unit: String,
    #[serde(default)]
    alpha_log: f64,
    #[serde(default)]
    alpha_lin: f64,
    #[serde(default)]
    alpha_sqrt: f64,
    #[serde(default = "one")]
    preindustrial: f64,
    #[serde(default)]
    concentration_scale: f64,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EbmEntry {
    #[serde(default)]
    sigma: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timescales: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    equilibrium_responses: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    box_model: Option<BoxModelParams>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelEntry {
    family: MaternFamily,
    lengthscales: Vec<f64>,
    variance: f64,
    #[serde(default = "yes")]
    standardize_inputs: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainingEntry {
    name: String,
    start_year: i32,
    n_steps: usize,
    step: f64,
    /// One series per agent, in kernel-input form.
    emissions: Vec<Vec<f64>>,
    /// Global temperature; `nan` marks unobserved years.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    concentrations: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spatial: Option<SpatialEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpatialEntry {
    latitudes: Vec<f64>,
    longitudes: Vec<f64>,
    years: Vec<i32>,
    /// One row per year, latitude-major cells.
    values: Vec<Vec<f64>>,
}

impl Model {
    /// An unfitted model from a parameter set.
    pub fn from_params(params: EmulatorParams) -> Self {
        Self {
            params,
            fit: FitSettings::default(),
            standardization: None,
            summary: None,
            training: Vec::new(),
        }
    }

    pub fn standardization(&self) -> Standardization {
        self.standardization
            .clone()
            .unwrap_or_else(|| Standardization::identity(self.params.agents.len()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: ModelFile = toml::from_str(text).map_err(|e| Error::Model(e.to_string()))?;
        if file.format != FORMAT {
            return Err(Error::Incompatible(format!(
                "expected format `{FORMAT}`, found `{}`",
                file.format
            )));
        }
        if file.version != VERSION {
            return Err(Error::Incompatible(format!(
                "unsupported model version {} (this build reads version {VERSION})",
                file.version
            )));
        }
        let agents: Vec<AgentSpec> = file
            .agents
            .iter()
            .map(|a| AgentSpec {
                name: a.name.clone(),
                input_mode: a.mode,
                unit: a.unit.clone(),
            })
            .collect();
        let mut names: Vec<&str> = agents.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Model("agent names must be unique".into()));
        }
        let forcing = ForcingParams {
            agents: file
                .agents
                .iter()
                .map(|a| AgentForcing {
                    name: a.name.clone(),
                    alpha_log: a.alpha_log,
                    alpha_lin: a.alpha_lin,
                    alpha_sqrt: a.alpha_sqrt,
                    preindustrial: a.preindustrial,
                })
                .collect(),
        };
        let impulse =
            match (
                &file.ebm.timescales,
                &file.ebm.equilibrium_responses,
                &file.ebm.box_model,
            ) {
                (Some(d), Some(q), _) => ImpulseParams::new(d.clone(), q.clone(), file.ebm.sigma)?,
                (None, None, Some(b)) => {
                    b.validate()?;
                    diagonalize(b)?.with_variability(file.ebm.sigma)
                }
                _ => return Err(Error::Model(
                    "[ebm] needs either timescales and equilibrium_responses or a box_model table"
                        .into(),
                )),
            };
        if !(file.ebm.sigma >= 0.0 && file.ebm.sigma.is_finite()) {
            return Err(Error::Model(format!(
                "sigma {} must be non-negative",
                file.ebm.sigma
            )));
        }
        let kernel = KernelConfig {
            family: file.kernel.family,
            lengthscales: file.kernel.lengthscales,
            variance: file.kernel.variance,
            standardize_inputs: file.kernel.standardize_inputs,
        };
        let params = EmulatorParams {
            concentration_scales: file.agents.iter().map(|a| a.concentration_scale).collect(),
            agents,
            forcing,
            impulse,
            kernel,
            variability: file.variability,
            jitter: file.jitter,
        };
        params.validate()?;
        let training = file
            .training
            .into_iter()
            .map(|t| t.into_scenario(&params.agents))
            .collect::<Result<Vec<_>>>()?;
        if let Some(s) = &file.standardization {
            if s.mean.len() != params.agents.len() || s.scale.len() != params.agents.len() {
                return Err(Error::Model(
                    "standardization does not match the agents".into(),
                ));
            }
        }
        Ok(Self {
            params,
            fit: file.fit,
            standardization: file.standardization,
            summary: file.summary,
            training,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        let p = &self.params;
        let file = ModelFile {
            format: FORMAT.into(),
            version: VERSION,
            variability: p.variability,
            agents: p
                .agents
                .iter()
                .zip(&p.forcing.agents)
                .zip(&p.concentration_scales)
                .map(|((a, f), scale)| AgentEntry {
                    name: a.name.clone(),
                    mode: a.input_mode,
                    unit: a.unit.clone(),
                    alpha_log: f.alpha_log,
                    alpha_lin: f.alpha_lin,
                    alpha_sqrt: f.alpha_sqrt,
                    preindustrial: f.preindustrial,
                    concentration_scale: *scale,
                })
                .collect(),
            ebm: EbmEntry {
                sigma: p.impulse.variability_amplitude,
                timescales: Some(p.impulse.timescales.clone()),
                equilibrium_responses: Some(p.impulse.equilibrium_responses.clone()),
                box_model: None,
            },
            kernel: KernelEntry {
                family: p.kernel.family,
                lengthscales: p.kernel.lengthscales.clone(),
                variance: p.kernel.variance,
                standardize_inputs: p.kernel.standardize_inputs,
            },
            jitter: p.jitter.clone(),
            fit: self.fit.clone(),
            standardization: self.standardization.clone(),
            summary: self.summary.clone(),
            training: self
                .training
                .iter()
                .map(TrainingEntry::from_scenario)
                .collect(),
        };
        toml::to_string(&file).map_err(|e| Error::Model(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Model(m) => Error::Model(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

impl TrainingEntry {
    fn from_scenario(s: &Scenario) -> Self {
        Self {
            name: s.name.clone(),
            start_year: s.grid.start_year,
            n_steps: s.grid.n_steps,
            step: s.grid.step,
            emissions: s.emissions.clone(),
            tas: s
                .global_temperature
                .as_ref()
                .map(|t| t.iter().map(|v| v.unwrap_or(f64::NAN)).collect()),
            concentrations: s
                .agents
                .iter()
                .zip(&s.concentrations)
                .filter_map(|(a, c)| c.as_ref().map(|c| (a.name.clone(), c.clone())))
                .collect(),
            spatial: s.spatial.as_ref().map(|f| SpatialEntry {
                latitudes: f.grid.latitudes.clone(),
                longitudes: f.grid.longitudes.clone(),
                years: f.years.clone(),
                values: f
                    .values
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect(),
            }),
        }
    }

    fn into_scenario(self, agents: &[AgentSpec]) -> Result<Scenario> {
        let grid = TimeGrid::new(self.start_year, self.n_steps, self.step)?;
        let n = grid.n_steps;
        let bad = |what: &str| Error::Model(format!("training scenario `{}`: {what}", self.name));
        if self.emissions.len() != agents.len() || self.emissions.iter().any(|e| e.len() != n) {
            return Err(bad("emission series do not match the agents and grid"));
        }
        if self.tas.as_ref().is_some_and(|t| t.len() != n) {
            return Err(bad("tas length does not match the grid"));
        }
        let mut concentrations = vec![None; agents.len()];
        for (name, c) in self.concentrations {
            let j = agents
                .iter()
                .position(|a| a.name == name)
                .ok_or_else(|| bad(&format!("unknown agent `{name}` in concentrations")))?;
            if c.len() != n {
                return Err(bad("concentration length does not match the grid"));
            }
            concentrations[j] = Some(c);
        }
        let spatial = match self.spatial {
            None => None,
            Some(sp) => {
                let grid = SpatialGrid::new(sp.latitudes, sp.longitudes)?;
                let cells = grid.n_cells();
                if sp.values.len() != sp.years.len() || sp.values.iter().any(|r| r.len() != cells) {
                    return Err(bad("spatial values do not match the grid"));
                }
                let flat: Vec<f64> = sp.values.into_iter().flatten().collect();
                Some(SpatialField {
                    grid,
                    values: DMatrix::from_row_slice(sp.years.len(), cells, &flat),
                    years: sp.years,
                })
            }
        };
        Ok(Scenario {
            name: self.name,
            grid,
            agents: agents.to_vec(),
            emissions: self.emissions,
            concentrations,
            global_temperature: self
                .tas
                .map(|t| t.into_iter().map(|v| (!v.is_nan()).then_some(v)).collect()),
            spatial,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CONFIG: &str = r#"
format = "fairgp-model"
version = 1

[[agents]]
name = "co2"
mode = "cumulative_emission"
unit = "GtCO2"
alpha_lin = 0.0015
preindustrial = 0.0
concentration_scale = 1.0

[[agents]]
name = "so2"
mode = "emission"
alpha_lin = -0.004
preindustrial = 0.0
concentration_scale = 1.0

[ebm]
sigma = 0.5

[ebm.box_model]
heat_capacities = [8.0, 100.0]
heat_transfer = [1.2, 0.7]
deep_ocean_efficacy = 1.1

[kernel]
family = "matern32"
lengthscales = [2.0, 3.0]
variance = 0.1
"#;

    #[test]
    fn config_with_box_model() {
        let m = Model::from_toml_str(CONFIG).unwrap();
        assert_eq!(m.params.impulse.n_modes(), 2);
        assert_eq!(m.params.impulse.variability_amplitude, 0.5);
        assert_eq!(m.fit, FitSettings::default());
        assert_eq!(m.params.variability, VariabilityMode::LongTime);
        let text = m.to_toml_string().unwrap();
        assert_eq!(Model::from_toml_str(&text).unwrap(), m);
    }

    #[test]
    fn rejects_wrong_version_and_unknown_keys() {
        let v2 = CONFIG.replace("version = 1", "version = 2");
        assert!(matches!(
            Model::from_toml_str(&v2),
            Err(Error::Incompatible(_))
        ));
        let extra = CONFIG.replace("variance = 0.1", "variance = 0.1\nbogus = 3");
        assert!(matches!(Model::from_toml_str(&extra), Err(Error::Model(_))));
        let short = CONFIG.replace("[2.0, 3.0]", "[2.0]");
        assert!(matches!(
            Model::from_toml_str(&short),
            Err(Error::InvalidParameter(_))
        ));
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop_oneof![
            -1e3f64..1e3,
            1e-300f64..1e-280,
            1e200f64..1e300,
            Just(0.1 + 0.2),
            Just(-0.0),
        ]
    }

    fn positive() -> impl Strategy<Value = f64> {
        prop_oneof![1e-8f64..1e8, Just(f64::MIN_POSITIVE), Just(1.0 / 3.0)]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn model_round_trip_is_bit_exact(
            ls in proptest::collection::vec(positive(), 2),
            var in positive(),
            d0 in 0.5f64..5.0, d1 in 50f64..500.0,
            q in proptest::collection::vec(positive(), 2),
            sigma in positive(),
            alpha in finite(),
            scale in finite(),
            em in proptest::collection::vec(finite(), 6),
            tas_mask in proptest::collection::vec(any::<bool>(), 3),
        ) {
            let mut m = Model::from_toml_str(CONFIG).unwrap();
            m.params.kernel.lengthscales = ls;
            m.params.kernel.variance = var;
            m.params.impulse = ImpulseParams::new(vec![d0, d1], q, sigma).unwrap();
            m.params.forcing.agents[1].alpha_lin = alpha;
            m.params.concentration_scales[0] = scale;
            m.standardization = Some(Standardization { mean: vec![alpha, scale], scale: vec![var, 1.0] });
            m.summary = Some(FitSummary { initial_mll: -alpha, final_mll: scale, iterations: 3, evaluations: 9 });
            m.training.push(Scenario {
                name: "s".into(),
                grid: TimeGrid::annual(2000, 3).unwrap(),
                agents: m.params.agents.clone(),
                emissions: vec![em[..3].to_vec(), em[3..].to_vec()],
                concentrations: vec![None, Some(em[3..].to_vec())],
                global_temperature: Some((0..3).map(|i| tas_mask[i].then_some(em[i])).collect()),
                spatial: Some(SpatialField {
                    grid: SpatialGrid::new(vec![-45.0, 45.0], vec![0.0]).unwrap(),
                    years: vec![2001],
                    values: DMatrix::from_row_slice(1, 2, &em[..2]),
                }),
            });
            let text = m.to_toml_string().unwrap();
            let back = Model::from_toml_str(&text).unwrap();
            prop_assert_eq!(&back, &m);
            // bitwise, including the sign of zero
            prop_assert_eq!(back.training[0].emissions[0][0].to_bits(), em[0].to_bits());
        }
    }
}
