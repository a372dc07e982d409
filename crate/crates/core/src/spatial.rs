//! Pattern scaling, per-cell priors and posteriors, and area weighting.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::gp::{condition_on, GPPrior, PosteriorDistribution, RowKey};

/// Regular latitude/longitude grid. Cells are numbered latitude-major:
/// cell `i * n_lon + j` sits at `(latitudes[i], longitudes[j])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub latitudes: Vec<f64>,
    pub longitudes: Vec<f64>,
}

fn strictly_monotone(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0]) || v.windows(2).all(|w| w[1] < w[0])
}

impl SpatialGrid {
    pub fn new(latitudes: Vec<f64>, longitudes: Vec<f64>) -> Result<Self> {
        if latitudes.is_empty() || longitudes.is_empty() {
            return Err(Error::EmptyGrid);
        }
        if latitudes.iter().any(|l| !(-90.0..=90.0).contains(l)) {
            return Err(Error::InvalidParameter(
                "latitudes must lie in [-90, 90]".into(),
            ));
        }
        if longitudes.iter().any(|l| !(0.0..360.0).contains(l)) {
            return Err(Error::InvalidParameter(
                "longitudes must lie in [0, 360)".into(),
            ));
        }
        if !strictly_monotone(&latitudes) || !strictly_monotone(&longitudes) {
            return Err(Error::InvalidParameter(
                "grid axes must be strictly monotone".into(),
            ));
        }
        Ok(Self {
            latitudes,
            longitudes,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.latitudes.len() * self.longitudes.len()
    }

    pub fn coordinates(&self, cell: usize) -> (f64, f64) {
        let n_lon = self.longitudes.len();
        (self.latitudes[cell / n_lon], self.longitudes[cell % n_lon])
    }

    pub fn cell_of(&self, lat: f64, lon: f64) -> Option<usize> {
        let i = self.latitudes.iter().position(|&l| l == lat)?;
        let j = self.longitudes.iter().position(|&l| l == lon)?;
        Some(i * self.longitudes.len() + j)
    }

    /// `cos(lat)` for each latitude row.
    pub fn row_weights(&self) -> Vec<f64> {
        self.latitudes
            .iter()
            .map(|l| l.to_radians().cos())
            .collect()
    }
}

/// `Σ_i Σ_j w_i x_ij / (N_lon Σ_i w_i)` with `w_i = cos(lat_i)`.
pub fn area_weighted_mean(grid: &SpatialGrid, field: &[f64]) -> Result<f64> {
    if field.is_empty() || grid.n_cells() == 0 {
        return Err(Error::EmptyGrid);
    }
    if field.len() != grid.n_cells() {
        return Err(Error::LengthMismatch {
            left: field.len(),
            right: grid.n_cells(),
        });
    }
    let n_lon = grid.longitudes.len();
    let weights = grid.row_weights();
    let num: f64 = field
        .chunks(n_lon)
        .zip(&weights)
        .map(|(row, w)| w * row.iter().sum::<f64>())
        .sum();
    Ok(num / (n_lon as f64 * weights.iter().sum::<f64>()))
}

/// Per-cell affine map from global to local temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternScalingMap {
    pub grid: SpatialGrid,
    pub slope: Vec<f64>,
    pub intercept: Vec<f64>,
    pub residual_variance: Vec<f64>,
}

/// Independent least-squares fits of each cell's series on the global one.
/// `local` has one row per time point and one column per cell.
pub fn fit_pattern_scaling(
    grid: &SpatialGrid,
    global: &[f64],
    local: &DMatrix<f64>,
) -> Result<PatternScalingMap> {
    let n = global.len();
    if local.nrows() != n {
        return Err(Error::LengthMismatch {
            left: local.nrows(),
            right: n,
        });
    }
    if local.ncols() != grid.n_cells() {
        return Err(Error::LengthMismatch {
            left: local.ncols(),
            right: grid.n_cells(),
        });
    }
    if n < 2 {
        return Err(Error::InvalidParameter(format!(
            "pattern scaling needs at least 2 time points, got {n}"
        )));
    }
    if global.iter().chain(local.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter(
            "pattern scaling data must be finite".into(),
        ));
    }
    let x_mean = global.iter().sum::<f64>() / n as f64;
    let sxx: f64 = global.iter().map(|x| (x - x_mean).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::DegenerateRegressor(
            "global temperature is constant over the fitting period".into(),
        ));
    }
    let cells = local.ncols();
    let fits = exec::map_indices(cells, |c| {
        let y = local.column(c);
        let y_mean = y.mean();
        let sxy: f64 = global
            .iter()
            .zip(y.iter())
            .map(|(x, y)| (x - x_mean) * (y - y_mean))
            .sum();
        let slope = sxy / sxx;
        let intercept = y_mean - slope * x_mean;
        let ssr: f64 = global
            .iter()
            .zip(y.iter())
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        let var = if n > 2 { ssr / (n - 2) as f64 } else { 0.0 };
        (slope, intercept, var)
    });
    Ok(PatternScalingMap {
        grid: grid.clone(),
        slope: fits.iter().map(|f| f.0).collect(),
        intercept: fits.iter().map(|f| f.1).collect(),
        residual_variance: fits.iter().map(|f| f.2).collect(),
    })
}

/// Gaussian prior of one cell over the rows of a global prior.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPrior {
    pub cell: usize,
    pub mean: DVector<f64>,
    /// `β² K`.
    pub covariance: DMatrix<f64>,
    /// `β² σ² Γ + r I`, with `r` the cell's residual variance.
    pub noise: DMatrix<f64>,
}

pub fn spatial_prior(pattern: &PatternScalingMap, prior: &GPPrior, cell: usize) -> CellPrior {
    let beta = pattern.slope[cell];
    let b2 = beta * beta;
    let mean = prior.mean.map(|m| beta * m + pattern.intercept[cell]);
    let covariance = &prior.physics_gram.values * b2;
    let mut noise = prior.noise() * b2;
    for i in 0..noise.nrows() {
        noise[(i, i)] += pattern.residual_variance[cell];
    }
    CellPrior {
        cell,
        mean,
        covariance,
        noise,
    }
}

/// Local observations: one row per key, one column per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialObservations {
    pub keys: Vec<RowKey>,
    pub values: DMatrix<f64>,
}

/// Exact per-cell posteriors over `test`, conditioned on each cell's own
/// observations. Cells are independent.
pub fn spatial_posterior(
    pattern: &PatternScalingMap,
    prior: &GPPrior,
    observations: &SpatialObservations,
    test: &[RowKey],
) -> Result<Vec<PosteriorDistribution>> {
    let cells = pattern.grid.n_cells();
    if observations.values.nrows() != observations.keys.len() {
        return Err(Error::LengthMismatch {
            left: observations.values.nrows(),
            right: observations.keys.len(),
        });
    }
    if observations.values.ncols() != cells && !observations.keys.is_empty() {
        return Err(Error::GridMismatch(format!(
            "observations cover {} cells, pattern has {cells}",
            observations.values.ncols()
        )));
    }
    let train = prior.rows(&observations.keys)?;
    let test_rows = prior.rows(test)?;
    let results = exec::map_indices(cells, |c| {
        let cell = spatial_prior(pattern, prior, c);
        let values = if observations.keys.is_empty() {
            DVector::zeros(0)
        } else {
            observations.values.column(c).into_owned()
        };
        condition_on(
            &cell.mean,
            &cell.covariance,
            &cell.noise,
            &prior.ladder,
            &train,
            &values,
            &test_rows,
        )
        .map(|(mean, covariance)| PosteriorDistribution {
            mean,
            covariance,
            index: test.to_vec(),
        })
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid2x3() -> SpatialGrid {
        SpatialGrid::new(vec![-30.0, 45.0], vec![0.0, 120.0, 240.0]).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(matches!(
            SpatialGrid::new(vec![], vec![0.0]),
            Err(Error::EmptyGrid)
        ));
        assert!(SpatialGrid::new(vec![0.0, 0.0], vec![0.0]).is_err());
        assert!(SpatialGrid::new(vec![0.0], vec![360.0]).is_err());
        let g = grid2x3();
        assert_eq!(g.n_cells(), 6);
        assert_eq!(g.coordinates(4), (45.0, 120.0));
        assert_eq!(g.cell_of(45.0, 120.0), Some(4));
    }

    #[test]
    fn weighted_mean_examples() {
        let g = grid2x3();
        assert_relative_eq!(
            area_weighted_mean(&g, &[2.5; 6]).unwrap(),
            2.5,
            epsilon = 1e-12
        );
        let g = SpatialGrid::new(vec![0.0, 60.0], vec![0.0]).unwrap();
        assert_relative_eq!(
            area_weighted_mean(&g, &[1.0, 0.0]).unwrap(),
            2.0 / 3.0,
            epsilon = 1e-12
        );
        assert!(matches!(area_weighted_mean(&g, &[]), Err(Error::EmptyGrid)));
    }

    fn loop_oracle(g: &SpatialGrid, field: &[f64]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, lat) in g.latitudes.iter().enumerate() {
            let w = (lat * std::f64::consts::PI / 180.0).cos();
            for j in 0..g.longitudes.len() {
                num += w * field[i * g.longitudes.len() + j];
                den += w;
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn weighted_mean_matches_loop_and_is_bounded(
            field in proptest::collection::vec(-50f64..50.0, 6)
        ) {
            let g = grid2x3();
            let m = area_weighted_mean(&g, &field).unwrap();
            prop_assert!((m - loop_oracle(&g, &field)).abs() < 1e-12);
            let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(m >= lo - 1e-12 && m <= hi + 1e-12);
        }

        #[test]
        fn residuals_orthogonal_to_regressor(
            x in proptest::collection::vec(-3f64..3.0, 5..20),
            noise in proptest::collection::vec(-1f64..1.0, 20),
        ) {
            prop_assume!(x.iter().any(|v| (v - x[0]).abs() > 1e-3));
            let g = SpatialGrid::new(vec![0.0], vec![0.0]).unwrap();
            let n = x.len();
            let local = DMatrix::from_fn(n, 1, |i, _| 1.7 * x[i] - 0.3 + noise[i]);
            let p = fit_pattern_scaling(&g, &x, &local).unwrap();
            let dot: f64 = (0..n)
                .map(|i| (local[(i, 0)] - p.intercept[0] - p.slope[0] * x[i]) * x[i])
                .sum();
            let scale: f64 = (0..n).map(|i| (local[(i, 0)] * x[i]).abs()).sum::<f64>().max(1.0);
            prop_assert!(dot.abs() / scale < 1e-8);
        }
    }

    #[test]
    fn exact_linear_fields() {
        let g = SpatialGrid::new(vec![0.0], vec![0.0, 90.0]).unwrap();
        let x = [0.1, 0.5, 0.2, 1.3];
        let local = DMatrix::from_fn(4, 2, |i, c| if c == 0 { x[i] } else { 2.0 * x[i] + 0.5 });
        let p = fit_pattern_scaling(&g, &x, &local).unwrap();
        assert_relative_eq!(p.slope[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(p.intercept[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(p.slope[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(p.intercept[1], 0.5, epsilon = 1e-12);
        assert!(p.residual_variance.iter().all(|v| *v < 1e-24));
        assert!(matches!(
            fit_pattern_scaling(&g, &[1.0; 4], &local),
            Err(Error::DegenerateRegressor(_))
        ));
    }
}
