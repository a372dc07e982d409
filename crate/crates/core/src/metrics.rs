//! Deterministic and probabilistic scores.

use std::f64::consts::PI;
use std::fmt;

use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::spatial::{area_weighted_mean, SpatialGrid};

/// Two-sided 95% standard normal quantile.
pub const Z95: f64 = 1.959964;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ScoreReport {
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub bias: Option<f64>,
    pub log_likelihood: Option<f64>,
    pub calib95: Option<f64>,
    pub crps: Option<f64>,
}

pub const REPORT_COLUMNS: [&str; 6] = ["rmse", "mae", "bias", "log_likelihood", "calib95", "crps"];

impl ScoreReport {
    fn fields(&self) -> [Option<f64>; 6] {
        [
            self.rmse,
            self.mae,
            self.bias,
            self.log_likelihood,
            self.calib95,
            self.crps,
        ]
    }

    fn from_fields(f: [Option<f64>; 6]) -> Self {
        Self {
            rmse: f[0],
            mae: f[1],
            bias: f[2],
            log_likelihood: f[3],
            calib95: f[4],
            crps: f[5],
        }
    }

    pub fn csv_header() -> String {
        REPORT_COLUMNS.join(",")
    }

    /// Values in `REPORT_COLUMNS` order; missing scores are empty fields.
    pub fn to_csv_row(&self) -> String {
        self.fields()
            .iter()
            .map(|v| v.map(|v| format!("{v:?}")).unwrap_or_default())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn from_csv_row(row: &str) -> Result<Self> {
        let parts: Vec<&str> = row.trim().split(',').collect();
        if parts.len() != REPORT_COLUMNS.len() {
            return Err(Error::LengthMismatch {
                left: parts.len(),
                right: REPORT_COLUMNS.len(),
            });
        }
        let mut f = [None; 6];
        for (slot, (p, name)) in f.iter_mut().zip(parts.iter().zip(REPORT_COLUMNS)) {
            let p = p.trim();
            if !p.is_empty() {
                *slot = Some(p.parse::<f64>().map_err(|e| Error::Parse {
                    path: "<score row>".into(),
                    line: 1,
                    column: name.into(),
                    message: e.to_string(),
                })?);
            }
        }
        Ok(Self::from_fields(f))
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, v) in REPORT_COLUMNS.iter().zip(self.fields()) {
            match v {
                Some(v) => writeln!(f, "{name:>15}  {v:.6}")?,
                None => writeln!(f, "{name:>15}  -")?,
            }
        }
        Ok(())
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::InvalidParameter(
            "scores need at least one point".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeterministicScores {
    pub rmse: f64,
    pub mae: f64,
    pub bias: f64,
}

pub fn deterministic_scores(prediction: &[f64], truth: &[f64]) -> Result<DeterministicScores> {
    check_lengths(prediction.len(), truth.len())?;
    let n = prediction.len() as f64;
    let (mut se, mut ae, mut b) = (0.0, 0.0, 0.0);
    for (p, t) in prediction.iter().zip(truth) {
        let e = p - t;
        se += e * e;
        ae += e.abs();
        b += e;
    }
    Ok(DeterministicScores {
        rmse: (se / n).sqrt(),
        mae: ae / n,
        bias: b / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbabilisticScores {
    /// Mean per-point marginal log-density; `None` if some variance is zero.
    pub log_likelihood: Option<f64>,
    pub calib95: f64,
    pub crps: f64,
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Closed-form CRPS of `N(mean, std²)` at `y`.
pub fn gaussian_crps(mean: f64, std: f64, y: f64) -> f64 {
    if std == 0.0 {
        return (y - mean).abs();
    }
    let z = (y - mean) / std;
    std * (z * (2.0 * std_normal_cdf(z) - 1.0) + 2.0 * std_normal_pdf(z) - 1.0 / PI.sqrt())
}

/// Scores under independent Gaussian marginals `N(mean_i, variance_i)`.
pub fn probabilistic_scores(
    mean: &[f64],
    variance: &[f64],
    truth: &[f64],
) -> Result<ProbabilisticScores> {
    check_lengths(mean.len(), truth.len())?;
    check_lengths(variance.len(), truth.len())?;
    if let Some((index, &value)) = variance
        .iter()
        .enumerate()
        .find(|(_, v)| !(**v >= 0.0 && v.is_finite()))
    {
        return Err(Error::NonPositiveVariance { index, value });
    }
    let n = truth.len() as f64;
    let degenerate = variance.contains(&0.0);
    let mut ll = 0.0;
    let mut inside = 0usize;
    let mut crps = 0.0;
    for ((m, v), y) in mean.iter().zip(variance).zip(truth) {
        let s = v.sqrt();
        if !degenerate {
            ll += -0.5 * ((2.0 * PI * v).ln() + (y - m).powi(2) / v);
        }
        if (y - m).abs() <= Z95 * s {
            inside += 1;
        }
        crps += gaussian_crps(*m, s, *y);
    }
    Ok(ProbabilisticScores {
        log_likelihood: (!degenerate).then_some(ll / n),
        calib95: inside as f64 / n,
        crps: crps / n,
    })
}

pub fn score_report(mean: &[f64], variance: &[f64], truth: &[f64]) -> Result<ScoreReport> {
    let d = deterministic_scores(mean, truth)?;
    let p = probabilistic_scores(mean, variance, truth)?;
    Ok(ScoreReport {
        rmse: Some(d.rmse),
        mae: Some(d.mae),
        bias: Some(d.bias),
        log_likelihood: p.log_likelihood,
        calib95: Some(p.calib95),
        crps: Some(p.crps),
    })
}

/// Area-weighted aggregate of per-cell reports. A score is kept only if
/// every cell has it.
pub fn spatial_scores(reports: &[ScoreReport], grid: &SpatialGrid) -> Result<ScoreReport> {
    if reports.len() != grid.n_cells() {
        return Err(Error::GridMismatch(format!(
            "{} cell reports for a grid of {} cells",
            reports.len(),
            grid.n_cells()
        )));
    }
    let mut out = [None; 6];
    for (k, slot) in out.iter_mut().enumerate() {
        let field: Option<Vec<f64>> = reports.iter().map(|r| r.fields()[k]).collect();
        if let Some(field) = field {
            *slot = Some(area_weighted_mean(grid, &field)?);
        }
    }
    Ok(ScoreReport::from_fields(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn deterministic_examples() {
        let d = deterministic_scores(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((d.rmse, d.mae, d.bias), (0.0, 0.0, 0.0));
        let d = deterministic_scores(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((d.rmse, d.mae, d.bias), (1.0, 1.0, 1.0));
        let d = deterministic_scores(&[0.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_relative_eq!(d.rmse, 2f64.sqrt());
        assert_eq!((d.mae, d.bias), (1.0, 1.0));
        assert!(matches!(
            deterministic_scores(&[1.0], &[1.0, 2.0]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn probabilistic_at_mean() {
        let p = probabilistic_scores(&[0.0], &[1.0], &[0.0]).unwrap();
        assert_relative_eq!(
            p.log_likelihood.unwrap(),
            -0.5 * (2.0 * PI).ln(),
            epsilon = 1e-15
        );
        assert_relative_eq!(
            p.crps,
            2.0 / (2.0 * PI).sqrt() - 1.0 / PI.sqrt(),
            epsilon = 1e-12
        );
        assert_eq!(p.calib95, 1.0);
    }

    #[test]
    fn degenerate_variance() {
        let p = probabilistic_scores(&[1.0, 2.0], &[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(p.calib95, 1.0);
        assert_eq!(p.log_likelihood, None);
        assert_eq!(p.crps, 0.0);
        let p = probabilistic_scores(&[1.0], &[0.0], &[1.0 + 1e-12]).unwrap();
        assert_eq!(p.calib95, 0.0);
        assert!(matches!(
            probabilistic_scores(&[1.0], &[-1.0], &[1.0]),
            Err(Error::NonPositiveVariance { index: 0, .. })
        ));
    }

    #[test]
    fn report_round_trip_and_display() {
        let r = ScoreReport {
            rmse: Some(0.1),
            mae: Some(1.0 / 3.0),
            bias: Some(-0.0),
            log_likelihood: None,
            calib95: Some(0.95),
            crps: Some(1e-300),
        };
        assert_eq!(ScoreReport::from_csv_row(&r.to_csv_row()).unwrap(), r);
        assert!(r.to_string().contains("log_likelihood"));
    }

    #[test]
    fn spatial_aggregation() {
        let g = SpatialGrid::new(vec![0.0, 60.0], vec![0.0]).unwrap();
        let a = ScoreReport {
            rmse: Some(1.0),
            crps: Some(0.5),
            ..Default::default()
        };
        assert_eq!(spatial_scores(&[a, a], &g).unwrap(), a);
        let b = ScoreReport {
            rmse: Some(0.0),
            crps: None,
            ..Default::default()
        };
        let s = spatial_scores(&[a, b], &g).unwrap();
        assert_relative_eq!(s.rmse.unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(s.crps, None);
        assert!(matches!(
            spatial_scores(&[a], &g),
            Err(Error::GridMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn score_ordering(pairs in proptest::collection::vec((-10f64..10.0, -10f64..10.0), 1..50)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let d = deterministic_scores(&p, &t).unwrap();
            prop_assert!(d.rmse + 1e-12 >= d.mae);
            prop_assert!(d.mae + 1e-12 >= d.bias.abs());
        }

        #[test]
        fn permutation_invariance(
            data in proptest::collection::vec((-5f64..5.0, 0.01f64..4.0, -5f64..5.0), 2..30),
            rot in 0usize..30,
        ) {
            let n = data.len();
            let k = rot % n;
            let (m, v, t): (Vec<f64>, Vec<f64>, Vec<f64>) =
                (data.iter().map(|x| x.0).collect(), data.iter().map(|x| x.1).collect(), data.iter().map(|x| x.2).collect());
            let rotate = |x: &[f64]| { let mut y = x.to_vec(); y.rotate_left(k); y };
            let a = score_report(&m, &v, &t).unwrap();
            let b = score_report(&rotate(&m), &rotate(&v), &rotate(&t)).unwrap();
            for (x, y) in a.fields().iter().zip(b.fields()) {
                prop_assert!((x.unwrap() - y.unwrap()).abs() < 1e-10);
            }
        }
    }
}
