//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed verification checks, 2 data errors,
//! 3 optimisation or numerical failures, 4 model/data incompatibility.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};

use crate::error::Error;
use crate::fit::{fit_hyperparameters, OptimizerConfig, ParameterMask};
use crate::gp::{
    build_prior, posterior_forcing, posterior_temperature, sample_posterior, GPPrior, RowKey,
    TrainingSet,
};
use crate::metrics::{score_report, spatial_scores, ScoreReport, Z95};
use crate::model::{FitSummary, Model};
use crate::scenario::{
    agents_from_header, assemble_training_set, check_file_agents, load_scenario, save_scenario,
    Scenario,
};
use crate::spatial::{fit_pattern_scaling, spatial_posterior, SpatialGrid, SpatialObservations};
use crate::DEFAULT_SEED;

#[derive(Debug, Parser)]
#[command(
    name = "fairgp",
    version,
    about = "Physically informed Gaussian-process temperature emulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit hyperparameters by maximising the marginal likelihood.
    Fit(FitArgs),
    /// Posterior global temperature for a scenario.
    Emulate(TargetArgs),
    /// Posterior effective radiative forcing for a scenario.
    Forcing(TargetArgs),
    /// Per-cell posterior temperature via pattern scaling.
    SpatialEmulate(TargetArgs),
    /// Score predictions against a scenario's observations.
    Evaluate(EvaluateArgs),
    /// Draw joint samples from the predictive distribution.
    Sample(SampleArgs),
    /// Run oracle-versus-production checks.
    Verify(VerifyArgs),
    /// Write the bundled synthetic dataset and its configuration.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "scenario", required = true, num_args = 1..)]
    pub scenarios: Vec<PathBuf>,
    #[arg(long)]
    pub holdout: Vec<String>,
    /// Overrides the seed in the configuration's `[fit]` table.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TargetArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    /// Inclusive year range `y0:y1`.
    #[arg(long, value_parser = parse_period)]
    pub period: (i32, i32),
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_period(s: &str) -> Result<(i32, i32), String> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| format!("expected y0:y1, got `{s}`"))?;
    let a: i32 = a.trim().parse().map_err(|e| format!("`{a}`: {e}"))?;
    let b: i32 = b.trim().parse().map_err(|e| format!("`{b}`: {e}"))?;
    if a > b {
        return Err(format!("period {a}:{b} is empty"));
    }
    Ok((a, b))
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

pub fn exit_code(error: &Error) -> u8 {
    match error {
        Error::NonFinite(_) | Error::SingularGram { .. } => 3,
        Error::Incompatible(_) => 4,
        _ => 2,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn with_path<T>(path: &Path, r: crate::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Failure::data(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn write_output(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> CliResult<Model> {
    with_path(path, Model::load(path))
}

fn load_for_model(path: &Path, model: &Model) -> CliResult<Scenario> {
    with_path(path, check_file_agents(path, &model.params.agents))?;
    with_path(path, load_scenario(path, &model.params.agents))
}

pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Emulate(a) => cmd_emulate(&a),
        Command::Forcing(a) => cmd_forcing(&a),
        Command::SpatialEmulate(a) => cmd_spatial_emulate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// Parses arguments, runs the command and reports the outcome.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<String> {
    let config = load_model(&args.config)?;
    let scenarios = args
        .scenarios
        .iter()
        .map(|p| load_for_model(p, &config))
        .collect::<CliResult<Vec<_>>>()?;
    let (train, _) = assemble_training_set(&scenarios, &args.holdout)?;
    let mask = ParameterMask::parse(&config.fit.free, &config.params)
        .map_err(|e| Failure::data(format!("{}: [fit] free: {e}", args.config.display())))?;
    let mut opt = OptimizerConfig::from(&config.fit);
    if let Some(seed) = args.seed {
        opt.seed = seed;
    }
    let result = fit_hyperparameters(&train, &config.params, &mask, &opt).map_err(|e| {
        let mut f = Failure::from(e);
        if f.code == 2 {
            f.code = 3;
        }
        f.message = format!("fitting failed: {}", f.message);
        f
    })?;

    let mut model = config.clone();
    model.params = result.params.clone();
    model.standardization = Some(train.standardization.clone());
    model.summary = Some(FitSummary {
        initial_mll: result.initial_mll,
        final_mll: result.final_mll,
        iterations: result.iterations,
        evaluations: result.evaluations,
    });
    model.training = train.scenarios.clone();
    with_path(&args.out, model.save(&args.out))?;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "training rows: {} from {} scenarios",
        train.len(),
        train.scenarios.len()
    );
    let _ = writeln!(
        s,
        "free parameters: {}",
        mask.params
            .iter()
            .map(|p| p.label(&model.params))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let _ = writeln!(s, "initial MLL: {:.6}", result.initial_mll);
    for start in 0..=opt.restarts {
        if let Some(last) = result.trace.iter().rev().find(|t| t.start == start) {
            let _ = writeln!(
                s,
                "start {start}: MLL {:.6} after {} iterations",
                last.mll, last.iteration
            );
        }
    }
    let _ = writeln!(
        s,
        "final MLL: {:.6} ({} iterations, {} evaluations)",
        result.final_mll, result.iterations, result.evaluations
    );
    for p in &mask.params {
        let _ = writeln!(
            s,
            "  {} = {:.6}",
            p.label(&model.params),
            natural_value(*p, &model)
        );
    }
    Ok(s)
}

fn natural_value(p: crate::fit::Param, model: &Model) -> f64 {
    let x = p.get(&model.params);
    if matches!(
        p,
        crate::fit::Param::AlphaLog(_)
            | crate::fit::Param::AlphaLin(_)
            | crate::fit::Param::AlphaSqrt(_)
    ) {
        x
    } else {
        x.exp()
    }
}

/// Everything needed to predict one target scenario.
struct Context {
    prior: GPPrior,
    train: TrainingSet,
    target: Vec<RowKey>,
    years: Vec<i32>,
}

fn context(model: &Model, mut target: Scenario) -> CliResult<Context> {
    if model.training.iter().any(|s| s.name == target.name) {
        target.name = format!("{}:target", target.name);
    }
    let years = target.years();
    let (mut train, _) = assemble_training_set(&model.training, &[])?;
    train.standardization = model.standardization();
    let mut all = model.training.clone();
    all.push(target.clone());
    let prior = build_prior(&all, &model.params, &train.standardization)?;
    let target_keys = prior.segment_keys(&target.name)?;
    Ok(Context {
        prior,
        train,
        target: target_keys,
        years,
    })
}

fn interval_table(years: &[i32], prior_mean: &[f64], mean: &[f64], std: &[f64]) -> String {
    let mut out = String::from("year,prior_mean,posterior_mean,posterior_std,lower95,upper95\n");
    for i in 0..years.len() {
        let _ = writeln!(
            out,
            "{},{:?},{:?},{:?},{:?},{:?}",
            years[i],
            prior_mean[i],
            mean[i],
            std[i],
            mean[i] - Z95 * std[i],
            mean[i] + Z95 * std[i]
        );
    }
    out
}

pub fn cmd_emulate(args: &TargetArgs) -> CliResult<String> {
    let model = load_model(&args.model)?;
    let target = load_for_model(&args.scenario, &model)?;
    let ctx = context(&model, target)?;
    let post = posterior_temperature(&ctx.prior, &ctx.train, &ctx.target)?;
    let rows = ctx.prior.rows(&ctx.target)?;
    let noise = ctx.prior.noise_block(&ctx.target)?;
    let prior_mean: Vec<f64> = rows.iter().map(|&r| ctx.prior.mean[r]).collect();
    let std: Vec<f64> = post
        .variance()
        .iter()
        .zip(noise.diagonal().iter())
        .map(|(v, n)| (v + n).sqrt())
        .collect();
    write_output(
        &args.out,
        &interval_table(&ctx.years, &prior_mean, post.mean.as_slice(), &std),
    )?;
    Ok(format!(
        "emulated {} years of `{}` with {} training rows -> {}\n",
        ctx.years.len(),
        args.scenario.display(),
        ctx.train.len(),
        args.out.display()
    ))
}

pub fn cmd_forcing(args: &TargetArgs) -> CliResult<String> {
    let model = load_model(&args.model)?;
    let target = load_for_model(&args.scenario, &model)?;
    let ctx = context(&model, target)?;
    let post = posterior_forcing(&ctx.prior, &ctx.train, &ctx.target)?;
    let rows = ctx.prior.rows(&ctx.target)?;
    let forcing = ctx
        .prior
        .forcing
        .as_ref()
        .expect("built priors carry forcing blocks");
    let prior_mean: Vec<f64> = rows.iter().map(|&r| forcing.mean[r]).collect();
    let std: Vec<f64> = post.variance().iter().map(|v| v.sqrt()).collect();
    write_output(
        &args.out,
        &interval_table(&ctx.years, &prior_mean, post.mean.as_slice(), &std),
    )?;
    Ok(format!(
        "wrote forcing posterior -> {}\n",
        args.out.display()
    ))
}

/// Stacks the spatial training data: global series, local values and the
/// row keys they belong to.
fn spatial_training(
    model: &Model,
) -> CliResult<(SpatialGrid, Vec<f64>, DMatrix<f64>, Vec<RowKey>)> {
    let mut grid: Option<SpatialGrid> = None;
    let mut global = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut keys = Vec::new();
    for s in &model.training {
        let Some(field) = &s.spatial else { continue };
        match &grid {
            None => grid = Some(field.grid.clone()),
            Some(g) if *g != field.grid => {
                return Err(Error::GridMismatch(format!(
                    "training scenario `{}` uses a different spatial grid",
                    s.name
                ))
                .into())
            }
            _ => {}
        }
        let tas = s.global_temperature.as_ref();
        for (r, &year) in field.years.iter().enumerate() {
            let i = s
                .row_of(year)
                .expect("spatial years lie on the scenario grid");
            let g = tas.and_then(|t| t[i]).ok_or_else(|| {
                Failure::data(format!(
                    "training scenario `{}` has local data but no global temperature in {year}",
                    s.name
                ))
            })?;
            global.push(g);
            rows.extend(field.values.row(r).iter());
            keys.push(RowKey::new(&s.name, year));
        }
    }
    let grid = grid.ok_or_else(|| Failure::data("the model carries no spatial training data"))?;
    let local = DMatrix::from_row_slice(keys.len(), grid.n_cells(), &rows);
    Ok((grid, global, local, keys))
}

pub fn cmd_spatial_emulate(args: &TargetArgs) -> CliResult<String> {
    let model = load_model(&args.model)?;
    let target = load_for_model(&args.scenario, &model)?;
    let (grid, global, local, keys) = spatial_training(&model)?;
    let pattern = fit_pattern_scaling(&grid, &global, &local)?;
    let ctx = context(&model, target)?;
    let obs = SpatialObservations {
        keys,
        values: local,
    };
    let posts = spatial_posterior(&pattern, &ctx.prior, &obs, &ctx.target)?;
    let rows = ctx.prior.rows(&ctx.target)?;
    let noise = ctx.prior.noise_block(&ctx.target)?;
    let mut out =
        String::from("lat,lon,year,prior_mean,posterior_mean,posterior_std,lower95,upper95\n");
    for (c, post) in posts.iter().enumerate() {
        let (lat, lon) = grid.coordinates(c);
        let beta = pattern.slope[c];
        let var = post.variance();
        for (i, &r) in rows.iter().enumerate() {
            let prior_mean = beta * ctx.prior.mean[r] + pattern.intercept[c];
            let std = (var[i] + beta * beta * noise[(i, i)] + pattern.residual_variance[c]).sqrt();
            let m = post.mean[i];
            let _ = writeln!(
                out,
                "{lat:?},{lon:?},{},{prior_mean:?},{m:?},{std:?},{:?},{:?}",
                ctx.years[i],
                m - Z95 * std,
                m + Z95 * std
            );
        }
    }
    write_output(&args.out, &out)?;
    Ok(format!(
        "emulated {} cells x {} years -> {}\n",
        grid.n_cells(),
        ctx.years.len(),
        args.out.display()
    ))
}

pub fn cmd_sample(args: &SampleArgs) -> CliResult<String> {
    let model = load_model(&args.model)?;
    let target = load_for_model(&args.scenario, &model)?;
    let ctx = context(&model, target)?;
    let post = posterior_temperature(&ctx.prior, &ctx.train, &ctx.target)?;
    let noise = ctx.prior.noise_block(&ctx.target)?;
    let draws = sample_posterior(&post, args.count, args.seed, Some(&noise))?;
    let mut out = String::from("year");
    for k in 0..args.count {
        let _ = write!(out, ",sample_{k}");
    }
    out.push('\n');
    for (i, year) in ctx.years.iter().enumerate() {
        let _ = write!(out, "{year}");
        for k in 0..args.count {
            let _ = write!(out, ",{:?}", draws[(k, i)]);
        }
        out.push('\n');
    }
    write_output(&args.out, &out)?;
    Ok(format!(
        "wrote {} samples -> {}\n",
        args.count,
        args.out.display()
    ))
}

/// Prediction table columns needed for scoring.
struct Predictions {
    cells: Vec<(f64, f64)>,
    /// `(cell, year, mean, std)`.
    rows: Vec<(usize, i32, f64, f64)>,
}

fn read_predictions(path: &Path) -> CliResult<Predictions> {
    let text =
        fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Failure::data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::data(format!("{}: missing column `{name}`", path.display())))
    };
    let (iy, im, is) = (col("year")?, col("posterior_mean")?, col("posterior_std")?);
    let spatial = headers.iter().any(|h| h == "lat");
    let lat_lon = if spatial {
        Some((col("lat")?, col("lon")?))
    } else {
        None
    };
    let mut cells: Vec<(f64, f64)> = Vec::new();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> CliResult<f64> {
            rec[i].parse::<f64>().map_err(|e| {
                Failure::data(format!(
                    "{}: line {line}, column `{}`: {e}",
                    path.display(),
                    headers[i]
                ))
            })
        };
        let year = rec[iy].parse::<i32>().map_err(|e| {
            Failure::data(format!(
                "{}: line {line}, column `year`: {e}",
                path.display()
            ))
        })?;
        let cell = match lat_lon {
            Some((ia, io)) => {
                let key = (num(ia)?, num(io)?);
                match cells.iter().position(|c| *c == key) {
                    Some(c) => c,
                    None => {
                        cells.push(key);
                        cells.len() - 1
                    }
                }
            }
            None => 0,
        };
        rows.push((cell, year, num(im)?, num(is)?));
    }
    Ok(Predictions { cells, rows })
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<String> {
    let preds = read_predictions(&args.predictions)?;
    let agents = with_path(&args.scenario, agents_from_header(&args.scenario))?;
    let truth = with_path(&args.scenario, load_scenario(&args.scenario, &agents))?;
    let (y0, y1) = args.period;
    let in_period = |y: i32| y >= y0 && y <= y1;
    let mismatch = |what: &str| {
        Failure::data(format!(
            "period {y0}:{y1}: {what} in {} and {}",
            args.predictions.display(),
            args.scenario.display()
        ))
    };

    let report = if preds.cells.is_empty() {
        let tas = truth.global_temperature.as_ref().ok_or_else(|| {
            Failure::data(format!("{}: no tas_global column", args.scenario.display()))
        })?;
        let (mut m, mut v, mut t) = (Vec::new(), Vec::new(), Vec::new());
        for &(_, year, mean, std) in preds.rows.iter().filter(|r| in_period(r.1)) {
            let Some(obs) = truth.row_of(year).and_then(|i| tas[i]) else {
                return Err(mismatch(&format!("year {year} has no observation")));
            };
            m.push(mean);
            v.push(std * std);
            t.push(obs);
        }
        if t.is_empty() {
            return Err(mismatch("no overlapping years"));
        }
        score_report(&m, &v, &t)?
    } else {
        let field = truth.spatial.as_ref().ok_or_else(|| {
            Failure::data(format!(
                "{}: no spatial companion file",
                args.scenario.display()
            ))
        })?;
        let grid = &field.grid;
        let mut reports = vec![ScoreReport::default(); grid.n_cells()];
        let mut per_cell: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> =
            vec![Default::default(); grid.n_cells()];
        for &(c, year, mean, std) in preds.rows.iter().filter(|r| in_period(r.1)) {
            let (lat, lon) = preds.cells[c];
            let cell = grid.cell_of(lat, lon).ok_or_else(|| {
                mismatch(&format!("cell ({lat}, {lon}) is not on the truth grid"))
            })?;
            let r = field
                .years
                .iter()
                .position(|y| *y == year)
                .ok_or_else(|| mismatch(&format!("year {year} has no local observation")))?;
            per_cell[cell].0.push(mean);
            per_cell[cell].1.push(std * std);
            per_cell[cell].2.push(field.values[(r, cell)]);
        }
        for (c, (m, v, t)) in per_cell.iter().enumerate() {
            if t.is_empty() {
                return Err(mismatch(&format!(
                    "cell {:?} has no predictions",
                    grid.coordinates(c)
                )));
            }
            reports[c] = score_report(m, v, t)?;
        }
        spatial_scores(&reports, grid)?
    };
    write_output(
        &args.out,
        &format!("{}\n{}\n", ScoreReport::csv_header(), report.to_csv_row()),
    )?;
    Ok(format!("scores over {y0}:{y1}\n{report}"))
}

#[cfg(feature = "oracles")]
pub fn cmd_verify(args: &VerifyArgs) -> CliResult<String> {
    use crate::oracles::{run_verification_suite, CheckRecord};
    let records = run_verification_suite(args.seed);
    let mut out = format!("{}\n", CheckRecord::csv_header());
    let mut summary = String::new();
    for r in &records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
        let _ = writeln!(
            summary,
            "[{}] {} = {:.3e} (tolerance {:.1e})",
            if r.pass { "PASS" } else { "FAIL" },
            r.check,
            r.statistic,
            r.tolerance
        );
    }
    write_output(&args.out, &out)?;
    if records.iter().all(|r| r.pass) {
        Ok(summary)
    } else {
        Err(Failure {
            code: 1,
            message: format!("verification checks failed\n{summary}"),
        })
    }
}

#[cfg(not(feature = "oracles"))]
pub fn cmd_verify(_: &VerifyArgs) -> CliResult<String> {
    Err(Failure {
        code: 4,
        message: "this build was compiled without the `oracles` feature".into(),
    })
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<String> {
    fs::create_dir_all(&args.out)
        .map_err(|e| Failure::data(format!("{}: {e}", args.out.display())))?;
    let scenarios = crate::synthetic::generate(args.seed)?;
    for s in &scenarios {
        let path = args.out.join(format!("{}.csv", s.name));
        with_path(&path, save_scenario(s, &path))?;
    }
    let config = args.out.join("config.toml");
    with_path(&config, crate::synthetic::emulator_config().save(&config))?;
    Ok(format!(
        "wrote {} scenarios and config.toml to {}\n",
        scenarios.len(),
        args.out.display()
    ))
}

/// Posterior mean and per-row predictive standard deviation of the global
/// temperature of `target`, for callers that want numbers rather than a file.
pub fn emulate_series(model: &Model, target: Scenario) -> crate::Result<(DVector<f64>, Vec<f64>)> {
    let ctx = context(model, target).map_err(|f| Error::Model(f.message))?;
    let post = posterior_temperature(&ctx.prior, &ctx.train, &ctx.target)?;
    let noise = ctx.prior.noise_block(&ctx.target)?;
    let std = post
        .variance()
        .iter()
        .zip(noise.diagonal().iter())
        .map(|(v, n)| (v + n).sqrt())
        .collect();
    Ok((post.mean, std))
}
