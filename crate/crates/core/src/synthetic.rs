//! Synthetic four-scenario dataset with a known generating process.
//!
//! Temperatures come from a two-mode EBM driven by a forcing model that
//! differs from the emulator's (stronger CO₂ and aerosol sensitivity), plus
//! an independent internal-variability realization per scenario. Local
//! fields follow a fixed pattern with independent cell noise.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::ebm::{thermal_response, AgentForcing, ForcingParams, ImpulseParams, TimeGrid};
use crate::error::Result;
use crate::gp::psd_square_root;
use crate::kernels::{internal_variability_gram, KernelConfig, MaternFamily, VariabilityMode};
use crate::linalg::JitterLadder;
use crate::model::{EmulatorParams, FitSettings, Model};
use crate::scenario::{AgentSpec, InputMode, Scenario, SpatialField};
use crate::spatial::SpatialGrid;

pub const SCENARIOS: [&str; 4] = ["historical", "ssp126", "ssp245", "ssp585"];
pub const FIRST_YEAR: i32 = 1850;
pub const LAST_HISTORICAL: i32 = 2014;
pub const LAST_YEAR: i32 = 2100;

const TIMESCALES: [f64; 2] = [4.1, 249.0];
const RESPONSES: [f64; 2] = [0.33, 0.41];
const SIGMA: f64 = 0.5;
const CELL_NOISE: f64 = 0.15;

pub fn agents() -> Vec<AgentSpec> {
    vec![
        AgentSpec {
            name: "co2".into(),
            input_mode: InputMode::CumulativeEmission,
            unit: "GtCO2".into(),
        },
        AgentSpec {
            name: "ch4".into(),
            input_mode: InputMode::Emission,
            unit: "MtCH4/yr".into(),
        },
        AgentSpec {
            name: "so2".into(),
            input_mode: InputMode::Emission,
            unit: "MtSO2/yr".into(),
        },
    ]
}

fn forcing(co2_log: f64, so2_lin: f64) -> ForcingParams {
    ForcingParams {
        agents: vec![
            AgentForcing {
                name: "co2".into(),
                alpha_log: co2_log,
                alpha_lin: 0.0,
                alpha_sqrt: 0.0,
                preindustrial: 278.0,
            },
            AgentForcing {
                name: "ch4".into(),
                alpha_log: 0.0,
                alpha_lin: 0.0,
                alpha_sqrt: 0.036,
                preindustrial: 722.0,
            },
            AgentForcing {
                name: "so2".into(),
                alpha_log: 0.0,
                alpha_lin: so2_lin,
                alpha_sqrt: 0.0,
                preindustrial: 0.0,
            },
        ],
    }
}

/// Concentration-rule slopes: ppm per GtCO2, ppb per MtCH4/yr, burden per
/// MtSO2/yr.
const CONCENTRATION_SCALES: [f64; 3] = [0.0627, 3.0, 1.0];

/// Configuration the emulator starts from. Its forcing model is the
/// "FaIR-like" one; the data were generated with a different one.
pub fn emulator_config() -> Model {
    let params = EmulatorParams {
        agents: agents(),
        forcing: forcing(5.35, -0.008),
        concentration_scales: CONCENTRATION_SCALES.to_vec(),
        impulse: ImpulseParams::new(TIMESCALES.to_vec(), RESPONSES.to_vec(), 0.6)
            .expect("valid modes"),
        kernel: KernelConfig::new(MaternFamily::Matern32, vec![2.0, 2.0, 2.0], 0.5)
            .expect("valid kernel"),
        variability: VariabilityMode::LongTime,
        jitter: JitterLadder::default(),
    };
    let mut model = Model::from_params(params);
    model.fit = FitSettings {
        restarts: 1,
        max_iterations: 60,
        ..FitSettings::default()
    };
    model
}

fn truth_params() -> EmulatorParams {
    let mut p = emulator_config().params;
    p.forcing = forcing(5.35 * 1.2, -0.010);
    p.impulse.variability_amplitude = SIGMA;
    p
}

/// Smooth interpolation through `(year, value)` anchors.
fn smooth_path(anchors: &[(f64, f64)], year: f64) -> f64 {
    if year <= anchors[0].0 {
        return anchors[0].1;
    }
    for w in anchors.windows(2) {
        let ((y0, v0), (y1, v1)) = (w[0], w[1]);
        if year <= y1 {
            let u = (year - y0) / (y1 - y0);
            let s = 0.5 - 0.5 * (std::f64::consts::PI * u).cos();
            return v0 + (v1 - v0) * s;
        }
    }
    anchors[anchors.len() - 1].1
}

/// Annual emissions `(co2, ch4, so2)` of a scenario in a given year.
fn emissions(scenario: &str, year: i32) -> [f64; 3] {
    let y = year as f64;
    if year <= LAST_HISTORICAL {
        let co2 = 36.0 * (0.028 * (y - 2014.0)).exp();
        let ch4 = 30.0 + 350.0 * (0.022 * (y - 2014.0)).exp();
        let so2 = smooth_path(
            &[
                (1850.0, 2.0),
                (1950.0, 60.0),
                (1980.0, 130.0),
                (2014.0, 100.0),
            ],
            y,
        );
        return [co2, ch4, so2];
    }
    let (co2, ch4, so2): (&[(f64, f64)], &[(f64, f64)], &[(f64, f64)]) = match scenario {
        "ssp126" => (
            &[
                (2014.0, 36.0),
                (2020.0, 38.0),
                (2075.0, -4.0),
                (2100.0, -6.0),
            ],
            &[(2014.0, 380.0), (2060.0, 190.0), (2100.0, 150.0)],
            &[(2014.0, 100.0), (2050.0, 30.0), (2100.0, 12.0)],
        ),
        "ssp245" => (
            &[(2014.0, 36.0), (2045.0, 43.0), (2100.0, 12.0)],
            &[(2014.0, 380.0), (2040.0, 420.0), (2100.0, 330.0)],
            &[(2014.0, 100.0), (2060.0, 55.0), (2100.0, 30.0)],
        ),
        _ => (
            &[(2014.0, 36.0), (2100.0, 125.0)],
            &[(2014.0, 380.0), (2100.0, 850.0)],
            &[(2014.0, 100.0), (2040.0, 110.0), (2100.0, 45.0)],
        ),
    };
    [
        smooth_path(co2, y),
        smooth_path(ch4, y),
        smooth_path(so2, y),
    ]
}

pub fn spatial_grid() -> SpatialGrid {
    SpatialGrid::new(
        vec![-67.5, -22.5, 22.5, 67.5],
        vec![0.0, 90.0, 180.0, 270.0],
    )
    .expect("valid grid")
}

/// Local slope and intercept of the generating pattern at each cell.
pub fn true_pattern(grid: &SpatialGrid) -> (Vec<f64>, Vec<f64>) {
    (0..grid.n_cells())
        .map(|c| {
            let (lat, lon) = grid.coordinates(c);
            let s = lat.to_radians().sin();
            (0.7 + 0.9 * s * s + 0.1 * lon.to_radians().cos(), 0.05 * s)
        })
        .unzip()
}

/// Generates the four scenarios deterministically from `seed`.
pub fn generate(seed: u64) -> Result<Vec<Scenario>> {
    let truth = truth_params();
    let grid_sp = spatial_grid();
    let (slope, intercept) = true_pattern(&grid_sp);
    let cell_noise = Normal::new(0.0, CELL_NOISE).expect("positive std");
    let mut out = Vec::new();
    for (k, name) in SCENARIOS.iter().enumerate() {
        let last = if *name == "historical" {
            LAST_HISTORICAL
        } else {
            LAST_YEAR
        };
        let n = (last - FIRST_YEAR + 1) as usize;
        let grid = TimeGrid::annual(FIRST_YEAR, n)?;
        let annual: Vec<[f64; 3]> = grid.years().iter().map(|&y| emissions(name, y)).collect();
        let mut co2 = Vec::with_capacity(n);
        let mut acc = 0.0;
        for e in &annual {
            acc += e[0];
            co2.push(acc);
        }
        let mut scenario = Scenario {
            name: name.to_string(),
            grid,
            agents: agents(),
            emissions: vec![
                co2,
                annual.iter().map(|e| e[1]).collect(),
                annual.iter().map(|e| e[2]).collect(),
            ],
            concentrations: vec![None, None, None],
            global_temperature: None,
            spatial: None,
        };
        let f = scenario.forcing(&truth.forcing, &truth.concentration_scales)?;
        let forced = thermal_response(&f, &truth.impulse, &grid)?.total;
        let gamma = internal_variability_gram(&truth.impulse, &grid, VariabilityMode::Exact);
        let root = psd_square_root(&(gamma * (SIGMA * SIGMA)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let noise = root * z;
        let observed_from = if *name == "historical" {
            FIRST_YEAR
        } else {
            LAST_HISTORICAL + 1
        };
        let tas: Vec<Option<f64>> = (0..n)
            .map(|i| (grid.year(i) >= observed_from).then(|| forced[i] + noise[i]))
            .collect();
        let years: Vec<i32> = grid
            .years()
            .into_iter()
            .filter(|y| *y >= observed_from)
            .collect();
        let first = (observed_from - FIRST_YEAR) as usize;
        let values = DMatrix::from_fn(years.len(), grid_sp.n_cells(), |r, c| {
            let g = tas[first + r].expect("observed year");
            slope[c] * g + intercept[c] + cell_noise.sample(&mut rng)
        });
        scenario.global_temperature = Some(tas);
        scenario.spatial = Some(SpatialField {
            grid: grid_sp.clone(),
            years,
            values,
        });
        out.push(scenario);
    }
    Ok(out)
}
