//! Scenario data model, CSV ingestion and training-set assembly.
//!
//! Global scenario files are UTF-8 CSV with a header row:
//!
//! ```text
//! year, emission:<agent> | cumulative_emission:<agent>, [concentration:<agent>], [tas_global]
//! ```
//!
//! Years must be strictly increasing with a uniform integer step. Empty
//! `tas_global` cells mark unobserved years. A spatial cube may sit next to
//! the scenario as `<stem>.spatial.csv` with columns `lat, lon, year, tas`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ebm::{forcing_response, linear_concentration, ForcingParams, TimeGrid};
use crate::error::{Error, Result};
use crate::gp::{RowKey, TrainingSet};
use crate::spatial::SpatialGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Annual emission rate.
    Emission,
    /// Running sum of emissions since the start of the grid.
    CumulativeEmission,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub name: String,
    pub input_mode: InputMode,
    #[serde(default)]
    pub unit: String,
}

/// Gridded temperature anomalies for a subset of a scenario's years.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    pub grid: SpatialGrid,
    pub years: Vec<i32>,
    /// One row per year, one column per cell (latitude-major).
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub grid: TimeGrid,
    pub agents: Vec<AgentSpec>,
    /// Per-agent series in kernel-input form (cumulative where the agent's
    /// mode says so).
    pub emissions: Vec<Vec<f64>>,
    pub concentrations: Vec<Option<Vec<f64>>>,
    pub global_temperature: Option<Vec<Option<f64>>>,
    pub spatial: Option<SpatialField>,
}

impl Scenario {
    pub fn n_steps(&self) -> usize {
        self.grid.n_steps
    }

    pub fn years(&self) -> Vec<i32> {
        self.grid.years()
    }

    pub fn agent_names(&self) -> Vec<&str> {
        self.agents.iter().map(|a| a.name.as_str()).collect()
    }

    /// Row index of a calendar year, if it is on the grid.
    pub fn row_of(&self, year: i32) -> Option<usize> {
        self.years().iter().position(|&y| y == year)
    }

    /// `n × d` emission matrix (one row per year).
    pub fn emission_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_steps(), self.agents.len(), |i, j| {
            self.emissions[j][i]
        })
    }

    /// Rows carrying a global temperature observation.
    pub fn observed(&self) -> Vec<(usize, f64)> {
        self.global_temperature
            .as_ref()
            .map(|t| {
                t.iter()
                    .enumerate()
                    .filter_map(|(i, v)| v.map(|v| (i, v)))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Deterministic forcing. Agents without a concentration series use the
    /// linear rule `C0 + scale · E`.
    pub fn forcing(
        &self,
        params: &ForcingParams,
        concentration_scales: &[f64],
    ) -> Result<Vec<f64>> {
        if params.agents.len() != self.agents.len()
            || concentration_scales.len() != self.agents.len()
        {
            return Err(Error::Incompatible(format!(
                "scenario `{}` has {} agents, forcing model has {}",
                self.name,
                self.agents.len(),
                params.agents.len()
            )));
        }
        let conc: Vec<Vec<f64>> = params
            .agents
            .iter()
            .enumerate()
            .map(|(j, agent)| match &self.concentrations[j] {
                Some(c) => c.clone(),
                None => linear_concentration(
                    &self.emissions[j],
                    agent.preindustrial,
                    concentration_scales[j],
                ),
            })
            .collect();
        forcing_response(&conc, params)
    }

    pub fn check_agents(&self, agents: &[AgentSpec]) -> Result<()> {
        if self.agents != agents {
            return Err(Error::Incompatible(format!(
                "scenario `{}` agents {:?} differ from {:?}",
                self.name,
                self.agent_names(),
                agents.iter().map(|a| &a.name).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

fn parse_err(path: &Path, line: u64, column: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        column: column.to_string(),
        message: message.into(),
    }
}

fn schema_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn grid_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Grid {
        path: path.display().to_string(),
        message: message.into(),
    }
}

enum Column {
    Year,
    Emission(usize, bool),
    Concentration(usize),
    Tas,
}

/// Path of the spatial companion of a scenario file.
pub fn spatial_companion(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.spatial.csv"))
}

fn read_records(path: &Path) -> Result<(Vec<String>, Vec<(u64, csv::StringRecord)>)> {
    let text = fs::read_to_string(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(path, 1, "", e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, "", e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec));
    }
    Ok((headers, rows))
}

fn parse_f64(path: &Path, line: u64, column: &str, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| parse_err(path, line, column, format!("`{s}`: {e}")))
}

fn parse_year(path: &Path, line: u64, s: &str) -> Result<i32> {
    s.parse::<i32>()
        .map_err(|e| parse_err(path, line, "year", format!("`{s}`: {e}")))
}

fn check_uniform(path: &Path, years: &[i32]) -> Result<TimeGrid> {
    if years.is_empty() {
        return Err(grid_err(path, "no rows"));
    }
    if years.len() == 1 {
        return TimeGrid::annual(years[0], 1);
    }
    let step = years[1] - years[0];
    if step <= 0 {
        return Err(grid_err(
            path,
            format!("years {} and {} are not increasing", years[0], years[1]),
        ));
    }
    for w in years.windows(2) {
        if w[1] - w[0] != step {
            return Err(grid_err(
                path,
                format!("gap between {} and {} (expected step {step})", w[0], w[1]),
            ));
        }
    }
    TimeGrid::new(years[0], years.len(), step as f64)
}

/// Agent declarations implied by a scenario file's emission columns.
pub fn agents_from_header(path: impl AsRef<Path>) -> Result<Vec<AgentSpec>> {
    let path = path.as_ref();
    let (headers, _) = read_records(path)?;
    let mut agents: Vec<AgentSpec> = Vec::new();
    for h in headers {
        let (name, input_mode) = if let Some(n) = h.strip_prefix("cumulative_emission:") {
            (n, InputMode::CumulativeEmission)
        } else if let Some(n) = h.strip_prefix("emission:") {
            (n, InputMode::Emission)
        } else {
            continue;
        };
        if agents.iter().any(|a| a.name == name) {
            return Err(schema_err(
                path,
                format!("duplicate emission column for `{name}`"),
            ));
        }
        agents.push(AgentSpec {
            name: name.to_string(),
            input_mode,
            unit: String::new(),
        });
    }
    Ok(agents)
}

/// Fails with `Incompatible` unless the file declares exactly the given
/// agents (in any order).
pub fn check_file_agents(path: impl AsRef<Path>, agents: &[AgentSpec]) -> Result<()> {
    let path = path.as_ref();
    let found = agents_from_header(path)?;
    let mut a: Vec<&str> = found.iter().map(|a| a.name.as_str()).collect();
    let mut b: Vec<&str> = agents.iter().map(|a| a.name.as_str()).collect();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::Incompatible(format!(
            "{} declares agents {a:?}, the model expects {b:?}",
            path.display()
        )));
    }
    Ok(())
}

/// Loads and validates a scenario file (and its spatial companion, if any).
pub fn load_scenario(path: impl AsRef<Path>, agents: &[AgentSpec]) -> Result<Scenario> {
    let path = path.as_ref();
    let (headers, rows) = read_records(path)?;
    let mut columns = Vec::with_capacity(headers.len());
    let find_agent = |name: &str| agents.iter().position(|a| a.name == name);
    for h in &headers {
        let col = if h == "year" {
            Column::Year
        } else if h == "tas_global" {
            Column::Tas
        } else if let Some(name) = h.strip_prefix("cumulative_emission:") {
            let j = find_agent(name)
                .ok_or_else(|| schema_err(path, format!("unknown agent in `{h}`")))?;
            Column::Emission(j, true)
        } else if let Some(name) = h.strip_prefix("emission:") {
            let j = find_agent(name)
                .ok_or_else(|| schema_err(path, format!("unknown agent in `{h}`")))?;
            Column::Emission(j, false)
        } else if let Some(name) = h.strip_prefix("concentration:") {
            let j = find_agent(name)
                .ok_or_else(|| schema_err(path, format!("unknown agent in `{h}`")))?;
            Column::Concentration(j)
        } else {
            return Err(schema_err(path, format!("unrecognised column `{h}`")));
        };
        columns.push(col);
    }
    if !columns.iter().any(|c| matches!(c, Column::Year)) {
        return Err(schema_err(path, "missing column `year`"));
    }
    let mut emission_cols: Vec<Option<bool>> = vec![None; agents.len()];
    for c in &columns {
        if let Column::Emission(j, cumulative) = c {
            if emission_cols[*j].replace(*cumulative).is_some() {
                return Err(schema_err(
                    path,
                    format!("duplicate emission column for `{}`", agents[*j].name),
                ));
            }
        }
    }
    let mut missing = Vec::new();
    for (j, a) in agents.iter().enumerate() {
        match (emission_cols[j], a.input_mode) {
            (None, _) => missing.push(format!("emission:{}", a.name)),
            (Some(true), InputMode::Emission) => {
                return Err(schema_err(
                    path,
                    format!(
                        "agent `{}` expects emission rates but the file is cumulative",
                        a.name
                    ),
                ))
            }
            _ => {}
        }
    }
    if !missing.is_empty() {
        return Err(schema_err(
            path,
            format!("missing columns: {}", missing.join(", ")),
        ));
    }
    let has_tas = columns.iter().any(|c| matches!(c, Column::Tas));
    let has_conc: Vec<bool> = (0..agents.len())
        .map(|j| {
            columns
                .iter()
                .any(|c| matches!(c, Column::Concentration(k) if *k == j))
        })
        .collect();

    let n = rows.len();
    let mut years = Vec::with_capacity(n);
    let mut emissions = vec![Vec::with_capacity(n); agents.len()];
    let mut conc: Vec<Vec<f64>> = vec![Vec::with_capacity(n); agents.len()];
    let mut tas = Vec::with_capacity(n);
    for (line, rec) in &rows {
        if rec.len() != headers.len() {
            return Err(parse_err(
                path,
                *line,
                "",
                format!("expected {} fields, got {}", headers.len(), rec.len()),
            ));
        }
        for ((col, name), field) in columns.iter().zip(&headers).zip(rec.iter()) {
            match col {
                Column::Year => years.push(parse_year(path, *line, field)?),
                Column::Emission(j, _) => emissions[*j].push(parse_f64(path, *line, name, field)?),
                Column::Concentration(j) => conc[*j].push(parse_f64(path, *line, name, field)?),
                Column::Tas => tas.push(if field.is_empty() {
                    None
                } else {
                    let v = parse_f64(path, *line, name, field)?;
                    if !v.is_finite() {
                        return Err(parse_err(path, *line, name, "temperature must be finite"));
                    }
                    Some(v)
                }),
            }
        }
    }
    let grid = check_uniform(path, &years)?;

    for (j, a) in agents.iter().enumerate() {
        if a.input_mode == InputMode::CumulativeEmission && emission_cols[j] == Some(false) {
            let mut acc = 0.0;
            for e in emissions[j].iter_mut() {
                acc += *e;
                *e = acc;
            }
        }
    }

    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let companion = spatial_companion(path);
    let spatial = if companion.exists() {
        Some(load_spatial(&companion, &grid.years())?)
    } else {
        None
    };

    Ok(Scenario {
        name: stem,
        grid,
        agents: agents.to_vec(),
        emissions,
        concentrations: conc
            .into_iter()
            .zip(has_conc)
            .map(|(c, present)| present.then_some(c))
            .collect(),
        global_temperature: has_tas.then_some(tas),
        spatial,
    })
}

/// Loads a long-format `lat, lon, year, tas` cube. Every (year, cell)
/// combination must appear exactly once.
pub fn load_spatial(path: &Path, scenario_years: &[i32]) -> Result<SpatialField> {
    let (headers, rows) = read_records(path)?;
    let idx = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| schema_err(path, format!("missing column `{name}`")))
    };
    let (ilat, ilon, iyear, itas) = (idx("lat")?, idx("lon")?, idx("year")?, idx("tas")?);
    let mut entries = Vec::with_capacity(rows.len());
    let mut years = BTreeSet::new();
    for (line, rec) in &rows {
        let lat = parse_f64(path, *line, "lat", &rec[ilat])?;
        let lon = parse_f64(path, *line, "lon", &rec[ilon])?;
        let year = parse_year(path, *line, &rec[iyear])?;
        let tas = parse_f64(path, *line, "tas", &rec[itas])?;
        if !scenario_years.contains(&year) {
            return Err(grid_err(
                path,
                format!("year {year} is outside the scenario grid"),
            ));
        }
        years.insert(year);
        entries.push((lat, lon, year, tas, *line));
    }
    let mut lat_v: Vec<f64> = entries.iter().map(|e| e.0).collect();
    lat_v.sort_by(f64::total_cmp);
    lat_v.dedup();
    let mut lon_v: Vec<f64> = entries.iter().map(|e| e.1).collect();
    lon_v.sort_by(f64::total_cmp);
    lon_v.dedup();
    let grid = SpatialGrid::new(lat_v, lon_v).map_err(|e| grid_err(path, e.to_string()))?;
    let years: Vec<i32> = years.into_iter().collect();
    let n_cells = grid.n_cells();
    let mut values = DMatrix::from_element(years.len(), n_cells, f64::NAN);
    let mut seen = DMatrix::from_element(years.len(), n_cells, false);
    for (lat, lon, year, tas, line) in entries {
        let r = years.binary_search(&year).expect("year collected above");
        let c = grid.cell_of(lat, lon).expect("axes collected above");
        if seen[(r, c)] {
            return Err(parse_err(
                path,
                line,
                "",
                format!("duplicate entry ({lat}, {lon}, {year})"),
            ));
        }
        seen[(r, c)] = true;
        values[(r, c)] = tas;
    }
    if seen.iter().any(|s| !s) {
        return Err(grid_err(
            path,
            "cube is incomplete: some (year, lat, lon) entries are missing",
        ));
    }
    Ok(SpatialField {
        grid,
        years,
        values,
    })
}

/// Writes a scenario (and its spatial cube) so that `load_scenario` gives
/// it back bit for bit.
pub fn save_scenario(scenario: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut header = vec!["year".to_string()];
    for a in &scenario.agents {
        header.push(match a.input_mode {
            InputMode::Emission => format!("emission:{}", a.name),
            InputMode::CumulativeEmission => format!("cumulative_emission:{}", a.name),
        });
    }
    for (a, c) in scenario.agents.iter().zip(&scenario.concentrations) {
        if c.is_some() {
            header.push(format!("concentration:{}", a.name));
        }
    }
    if scenario.global_temperature.is_some() {
        header.push("tas_global".into());
    }
    let mut out = header.join(",");
    out.push('\n');
    for (i, year) in scenario.years().into_iter().enumerate() {
        let mut fields = vec![year.to_string()];
        fields.extend(scenario.emissions.iter().map(|e| format!("{:?}", e[i])));
        fields.extend(
            scenario
                .concentrations
                .iter()
                .flatten()
                .map(|c| format!("{:?}", c[i])),
        );
        if let Some(t) = &scenario.global_temperature {
            fields.push(t[i].map(|v| format!("{v:?}")).unwrap_or_default());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    let companion = spatial_companion(path);
    if let Some(field) = &scenario.spatial {
        save_spatial(field, &companion)?;
    }
    Ok(())
}

pub fn save_spatial(field: &SpatialField, path: &Path) -> Result<()> {
    let mut out = String::from("lat,lon,year,tas\n");
    for (r, year) in field.years.iter().enumerate() {
        for c in 0..field.grid.n_cells() {
            let (lat, lon) = field.grid.coordinates(c);
            out.push_str(&format!(
                "{lat:?},{lon:?},{year},{:?}\n",
                field.values[(r, c)]
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Subtracts the mean over the inclusive baseline window `[y0, y1]`.
/// Non-finite values are ignored when computing the baseline.
pub fn to_anomaly(series: &[f64], years: &[i32], window: (i32, i32)) -> Result<Vec<f64>> {
    if series.len() != years.len() {
        return Err(Error::LengthMismatch {
            left: series.len(),
            right: years.len(),
        });
    }
    let (sum, count) = series
        .iter()
        .zip(years)
        .filter(|(v, y)| **y >= window.0 && **y <= window.1 && v.is_finite())
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    if count == 0 {
        return Err(Error::EmptyWindow(window.0, window.1));
    }
    let baseline = sum / count as f64;
    Ok(series.iter().map(|v| v - baseline).collect())
}

/// Default baseline: the first 50 years of the given grid.
pub fn default_baseline(grid: &TimeGrid) -> (i32, i32) {
    let last = grid.n_steps.min(50) - 1;
    (grid.start_year, grid.year(last))
}

/// Per-agent affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: vec![0.0; d],
            scale: vec![1.0; d],
        }
    }

    /// Population mean and standard deviation of each column. Columns with
    /// fewer than two rows or zero spread keep unit scale.
    pub fn fit(rows: &DMatrix<f64>) -> Self {
        let (n, d) = rows.shape();
        if n == 0 {
            return Self::identity(d);
        }
        let mut mean = vec![0.0; d];
        let mut scale = vec![1.0; d];
        for j in 0..d {
            let col = rows.column(j);
            let m = col.mean();
            mean[j] = m;
            if n > 1 {
                let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                if var > 0.0 {
                    scale[j] = var.sqrt();
                }
            }
        }
        Self { mean, scale }
    }

    pub fn apply(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(rows.nrows(), rows.ncols(), |i, j| {
            (rows[(i, j)] - self.mean[j]) / self.scale[j]
        })
    }
}

/// Stacks the observed rows of every non-held-out scenario, in declared
/// order, and returns the held-out scenarios separately.
pub fn assemble_training_set(
    scenarios: &[Scenario],
    holdout: &[String],
) -> Result<(TrainingSet, Vec<Scenario>)> {
    for h in holdout {
        if !scenarios.iter().any(|s| &s.name == h) {
            return Err(Error::UnknownScenario(h.clone()));
        }
    }
    if let Some(first) = scenarios.first() {
        for s in &scenarios[1..] {
            s.check_agents(&first.agents)?;
            if s.grid.step != first.grid.step {
                return Err(Error::GridMismatch(format!(
                    "scenario `{}` has step {}, `{}` has {}",
                    s.name, s.grid.step, first.name, first.grid.step
                )));
            }
        }
    }
    let mut names = BTreeMap::new();
    for s in scenarios {
        if names.insert(s.name.clone(), ()).is_some() {
            return Err(Error::Incompatible(format!(
                "duplicate scenario name `{}`",
                s.name
            )));
        }
    }
    let (train, held): (Vec<Scenario>, Vec<Scenario>) = scenarios
        .iter()
        .cloned()
        .partition(|s| !holdout.contains(&s.name));

    let d = scenarios.first().map_or(0, |s| s.agents.len());
    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut emission_rows: Vec<f64> = Vec::new();
    let mut times = Vec::new();
    let mut boundaries: Vec<(String, Range<usize>)> = Vec::new();
    for s in &train {
        let start = keys.len();
        for (i, v) in s.observed() {
            keys.push(RowKey::new(&s.name, s.grid.year(i)));
            values.push(v);
            times.push(s.grid.elapsed(i));
            emission_rows.extend(s.emissions.iter().map(|e| e[i]));
        }
        boundaries.push((s.name.clone(), start..keys.len()));
    }
    let emissions = DMatrix::from_row_slice(keys.len(), d, &emission_rows);
    let standardization = Standardization::fit(&emissions);
    Ok((
        TrainingSet {
            scenarios: train,
            keys,
            values: DVector::from_vec(values),
            emissions,
            times,
            boundaries,
            standardization,
        },
        held,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn agents() -> Vec<AgentSpec> {
        vec![
            AgentSpec {
                name: "co2".into(),
                input_mode: InputMode::CumulativeEmission,
                unit: "GtCO2".into(),
            },
            AgentSpec {
                name: "so2".into(),
                input_mode: InputMode::Emission,
                unit: "Mt".into(),
            },
        ]
    }

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        p
    }

    #[test]
    fn minimal_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "hist.csv",
            "year,emission:co2,emission:so2,tas_global\n1850,1,2,0.0\n1851,2,3,\n1852,3,4,0.1\n",
        );
        let s = load_scenario(&p, &agents()).unwrap();
        assert_eq!(s.name, "hist");
        assert_eq!(s.n_steps(), 3);
        // raw CO2 emissions are accumulated
        assert_eq!(s.emissions[0], vec![1.0, 3.0, 6.0]);
        assert_eq!(s.emissions[1], vec![2.0, 3.0, 4.0]);
        assert_eq!(s.global_temperature.as_ref().unwrap()[1], None);
        assert_eq!(s.observed(), vec![(0, 0.0), (2, 0.1)]);
    }

    #[test]
    fn gap_year_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "gap.csv",
            "year,emission:co2,emission:so2\n1850,1,2\n1851,1,2\n1853,1,2\n",
        );
        let err = load_scenario(&p, &agents()).unwrap_err();
        match err {
            Error::Grid { message, .. } => assert!(message.contains("1851 and 1853"), "{message}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_and_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "bad.csv",
            "year,emission:co2,emission:so2\n1850,1,x\n",
        );
        assert!(matches!(
            load_scenario(&p, &agents()),
            Err(Error::Parse { line: 2, ref column, .. }) if column == "emission:so2"
        ));
        let p = write(dir.path(), "missing.csv", "year,emission:co2\n1850,1\n");
        assert!(matches!(
            load_scenario(&p, &agents()),
            Err(Error::Schema { .. })
        ));
        let p = write(
            dir.path(),
            "cum.csv",
            "year,emission:co2,cumulative_emission:so2\n1850,1,1\n",
        );
        assert!(matches!(
            load_scenario(&p, &agents()),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn spatial_companion_is_loaded() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "s.csv",
            "year,cumulative_emission:co2,emission:so2\n2000,1,2\n2001,2,2\n",
        );
        write(
            dir.path(),
            "s.spatial.csv",
            "lat,lon,year,tas\n0,0,2001,1.5\n0,90,2001,2.5\n",
        );
        let s = load_scenario(&p, &agents()).unwrap();
        let field = s.spatial.unwrap();
        assert_eq!(field.years, vec![2001]);
        assert_eq!(field.values.shape(), (1, 2));
        assert_eq!(field.values[(0, 1)], 2.5);
    }

    #[test]
    fn anomaly_baseline() {
        let years = [2000, 2001, 2002, 2003];
        assert_eq!(
            to_anomaly(&[3.0; 4], &years, (2000, 2003)).unwrap(),
            vec![0.0; 4]
        );
        let a = to_anomaly(&[1.0, 2.0, 4.0, 8.0], &years, (2000, 2001)).unwrap();
        assert_eq!(a, vec![-0.5, 0.5, 2.5, 6.5]);
        assert!(matches!(
            to_anomaly(&[1.0; 4], &years, (1900, 1950)),
            Err(Error::EmptyWindow(1900, 1950))
        ));
    }

    fn scenario(name: &str, n: usize, observed: bool) -> Scenario {
        Scenario {
            name: name.into(),
            grid: TimeGrid::annual(2000, n).unwrap(),
            agents: agents(),
            emissions: vec![
                (0..n).map(|i| i as f64).collect(),
                (0..n).map(|i| (i as f64).sin()).collect(),
            ],
            concentrations: vec![None, None],
            global_temperature: observed.then(|| (0..n).map(|i| Some(i as f64 * 0.01)).collect()),
            spatial: None,
        }
    }

    #[test]
    fn training_set_counts_and_holdout() {
        let all: Vec<Scenario> = (0..5)
            .map(|i| scenario(&format!("s{i}"), 10 + i, true))
            .collect();
        let (ts, held) = assemble_training_set(&all, &[]).unwrap();
        assert_eq!(ts.len(), (10..15).sum::<usize>());
        assert!(held.is_empty());
        let (ts, held) = assemble_training_set(&all, &["s2".into()]).unwrap();
        assert_eq!(ts.len(), (10..15).sum::<usize>() - 12);
        assert_eq!(held[0].name, "s2");
        let everything: Vec<String> = all.iter().map(|s| s.name.clone()).collect();
        let (ts, held) = assemble_training_set(&all, &everything).unwrap();
        assert_eq!(ts.len(), 0);
        assert_eq!(held.len(), 5);
        assert!(matches!(
            assemble_training_set(&all, &["nope".into()]),
            Err(Error::UnknownScenario(_))
        ));
    }

    #[test]
    fn standardization_of_training_rows() {
        let all: Vec<Scenario> = (0..3)
            .map(|i| scenario(&format!("s{i}"), 20, true))
            .collect();
        let (ts, _) = assemble_training_set(&all, &[]).unwrap();
        let z = ts.standardization.apply(&ts.emissions);
        for j in 0..2 {
            let c = z.column(j);
            let m = c.mean();
            let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / c.len() as f64;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-10);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn save_load_round_trip(
            co2 in proptest::collection::vec(-1e6f64..1e6, 1..12),
            so2_scale in -1e-3f64..1e3,
            tas_mask in proptest::collection::vec(any::<bool>(), 12),
        ) {
            let n = co2.len();
            let s = Scenario {
                name: "rt".into(),
                grid: TimeGrid::annual(1990, n).unwrap(),
                agents: agents(),
                emissions: vec![co2.clone(), co2.iter().map(|v| v * so2_scale / 3.0).collect()],
                concentrations: vec![Some(co2.iter().map(|v| v.abs() + 1e-7).collect()), None],
                global_temperature: Some((0..n).map(|i| tas_mask[i].then(|| co2[i] / 7.0)).collect()),
                spatial: None,
            };
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt.csv");
            save_scenario(&s, &p).unwrap();
            let back = load_scenario(&p, &agents()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
