use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("data/synthetic")
        .join(name)
}

fn fairgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairgp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

/// Config with nothing free, so `fit` only records the training data.
fn frozen_config(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(data("config.toml")).unwrap();
    let text = text.replace(
        "free = [\"lengthscale\", \"kernel_variance\", \"sigma\"]",
        "free = []",
    );
    assert!(text.contains("free = []"));
    let path = dir.join("frozen.toml");
    fs::write(&path, text).unwrap();
    path
}

fn fitted_model(dir: &Path) -> PathBuf {
    let model = dir.join("model.toml");
    let out = fairgp(&[
        "fit",
        "--config",
        &p(&frozen_config(dir)),
        "--scenario",
        &p(&data("historical.csv")),
        &p(&data("ssp126.csv")),
        &p(&data("ssp585.csv")),
        "--out",
        &p(&model),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    model
}

#[test]
fn emulate_forcing_and_sample_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = fitted_model(dir.path());
    let target = p(&data("ssp245.csv"));

    let em = dir.path().join("em.csv");
    assert_eq!(
        code(&fairgp(&[
            "emulate",
            "--model",
            &p(&model),
            "--scenario",
            &target,
            "--out",
            &p(&em)
        ])),
        0
    );
    let text = fs::read_to_string(&em).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "year,prior_mean,posterior_mean,posterior_std,lower95,upper95"
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 251);
    assert_eq!(rows[0][0], 1850.0);
    for r in &rows {
        assert!(r[3] > 0.0);
        assert!(r[4] < r[2] && r[2] < r[5]);
    }

    let forcing = dir.path().join("forcing.csv");
    assert_eq!(
        code(&fairgp(&[
            "forcing",
            "--model",
            &p(&model),
            "--scenario",
            &target,
            "--out",
            &p(&forcing)
        ])),
        0
    );
    assert_eq!(fs::read_to_string(&forcing).unwrap().lines().count(), 252);

    let samples = dir.path().join("samples.csv");
    let out = fairgp(&[
        "sample",
        "--model",
        &p(&model),
        "--scenario",
        &target,
        "--count",
        "5",
        "--seed",
        "3",
        "--out",
        &p(&samples),
    ]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(&samples).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "year,sample_0,sample_1,sample_2,sample_3,sample_4"
    );
}

#[test]
fn spatial_emulate_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let model = fitted_model(dir.path());
    let target = p(&data("ssp245.csv"));
    let sp = dir.path().join("spatial.csv");
    let out = fairgp(&[
        "spatial-emulate",
        "--model",
        &p(&model),
        "--scenario",
        &target,
        "--out",
        &p(&sp),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&sp).unwrap();
    assert!(
        text.starts_with("lat,lon,year,prior_mean,posterior_mean,posterior_std,lower95,upper95\n")
    );
    assert_eq!(text.lines().count(), 1 + 16 * 251);

    let scores = dir.path().join("scores.csv");
    let out = fairgp(&[
        "evaluate",
        "--predictions",
        &p(&sp),
        "--scenario",
        &target,
        "--period",
        "2015:2100",
        "--out",
        &p(&scores),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&scores).unwrap();
    assert!(text.starts_with("rmse,mae,bias,log_likelihood,calib95,crps\n"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("calib95"));
}

#[test]
fn evaluate_rejects_unobserved_period() {
    let dir = tempfile::tempdir().unwrap();
    let model = fitted_model(dir.path());
    let target = p(&data("ssp245.csv"));
    let em = dir.path().join("em.csv");
    fairgp(&[
        "emulate",
        "--model",
        &p(&model),
        "--scenario",
        &target,
        "--out",
        &p(&em),
    ]);
    // ssp245 has no temperatures before 2015
    let out = fairgp(&[
        "evaluate",
        "--predictions",
        &p(&em),
        "--scenario",
        &target,
        "--period",
        "1900:1950",
        "--out",
        &p(&dir.path().join("s.csv")),
    ]);
    assert_eq!(code(&out), 2);
    let out = fairgp(&[
        "evaluate",
        "--predictions",
        &p(&em),
        "--scenario",
        &target,
        "--period",
        "2200:2300",
        "--out",
        &p(&dir.path().join("s.csv")),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let model = fitted_model(dir.path());
    let missing = fairgp(&[
        "emulate",
        "--model",
        &p(&model),
        "--scenario",
        "/nonexistent/x.csv",
        "--out",
        &p(&dir.path().join("o.csv")),
    ]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("/nonexistent/x.csv"));

    let gap = dir.path().join("gap.csv");
    fs::write(
        &gap,
        "year,cumulative_emission:co2,emission:ch4,emission:so2,tas_global\n1850,1,1,1,\n1851,2,1,1,\n1853,3,1,1,\n",
    )
    .unwrap();
    let out = fairgp(&[
        "emulate",
        "--model",
        &p(&model),
        "--scenario",
        &p(&gap),
        "--out",
        &p(&dir.path().join("o.csv")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("1853"));

    let bad = fairgp(&[
        "fit",
        "--config",
        &p(&data("config.toml")),
        "--scenario",
        &p(&data("ssp126.csv")),
        "--holdout",
        "nope",
        "--out",
        &p(&dir.path().join("m.toml")),
    ]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn incompatible_inputs_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let model = fitted_model(dir.path());
    let two_agents = dir.path().join("two.csv");
    fs::write(
        &two_agents,
        "year,cumulative_emission:co2,emission:ch4,tas_global\n1850,1,1,\n1851,2,1,\n",
    )
    .unwrap();
    let out = fairgp(&[
        "emulate",
        "--model",
        &p(&model),
        "--scenario",
        &p(&two_agents),
        "--out",
        &p(&dir.path().join("o.csv")),
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    let future = dir.path().join("future.toml");
    let text = fs::read_to_string(&model)
        .unwrap()
        .replace("version = 1", "version = 99");
    fs::write(&future, text).unwrap();
    let out = fairgp(&[
        "emulate",
        "--model",
        &p(&future),
        "--scenario",
        &p(&data("ssp245.csv")),
        "--out",
        &p(&dir.path().join("o.csv")),
    ]);
    assert_eq!(code(&out), 4);
}

#[cfg(feature = "oracles")]
#[test]
fn verify_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("verify.csv");
    let out = fairgp(&["verify", "--out", &p(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("check,statistic,tolerance,pass,detail\n"));
    assert_eq!(text.lines().count(), 9);
    assert!(text.lines().skip(1).all(|l| l.contains(",true,")));
}
