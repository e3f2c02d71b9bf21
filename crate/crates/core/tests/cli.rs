use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use saqe::data::{write_census_csv, write_survey_csv, CensusSchema, SurveySchema};
use saqe::rng::RngStream;
use saqe::sim::{draw_sample, gen_population, PopulationDesign, RunMetadata, ScenarioSpec};
use tempfile::TempDir;

fn saqe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saqe")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Data {
    dir: TempDir,
    survey: PathBuf,
    census: PathBuf,
}

impl Data {
    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }
}

fn data() -> Data {
    let design = PopulationDesign { areas: 6, pop_size: 120, ..ScenarioSpec::default().design() };
    let pop = gen_population(&design, RngStream::new(21, 0)).unwrap();
    let (sample, census) = draw_sample(&pop, 12, RngStream::new(21, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let x_cols: Vec<String> = ["x1", "x2", "x3"].map(String::from).to_vec();
    let survey = dir.path().join("survey.csv");
    let census_path = dir.path().join("census.csv");
    write_survey_csv(&sample, &survey, &SurveySchema { area_col: "area".into(), y_col: "y".into(), x_cols: x_cols.clone() })
        .unwrap();
    let schema = CensusSchema { x_cols, sampled_col: Some("sampled".into()), ..CensusSchema::default() };
    write_census_csv(&census, &census_path, &schema).unwrap();
    Data { dir, survey, census: census_path }
}

fn survey_args(d: &Data) -> Vec<String> {
    vec!["--survey".into(), d.survey.to_string_lossy().into_owned(), "--x-cols".into(), "x1,x2,x3".into()]
}

fn census_args(d: &Data) -> Vec<String> {
    vec!["--census".into(), d.census.to_string_lossy().into_owned(), "--sampled-col".into(), "sampled".into()]
}

fn run(cmd: &str, parts: &[Vec<String>]) -> Output {
    let mut args = vec![cmd.to_owned()];
    for p in parts {
        args.extend(p.iter().cloned());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    saqe(&refs)
}

fn strs(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn read(dir: &str, file: &str) -> Vec<u8> {
    fs::read(Path::new(dir).join(file)).unwrap_or_else(|e| panic!("{dir}/{file}: {e}"))
}

#[test]
fn el_without_census_warns_but_succeeds() {
    let d = data();
    let out = d.path("el");
    let o = run("predict", &[survey_args(&d), strs(&["--method", "el", "--out", &out])]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("sample covariate means"), "{}", stderr(&o));
    let csv = String::from_utf8(read(&out, "quantiles.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 5);
    assert!(Path::new(&out).join("run-metadata.json").exists());
}

#[test]
fn ebel_without_census_is_a_config_error() {
    let d = data();
    let o = run("predict", &[survey_args(&d), strs(&["--method", "ebel2", "--out", &d.path("x")])]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("census"));
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let d = data();
    let o = run("predict", &[survey_args(&d), strs(&["--method", "el", "--alphas", "0.5,1.2", "--out", &d.path("a")])]);
    assert_eq!(code(&o), 2);
    let o = run("predict", &[survey_args(&d), strs(&["--method", "nope", "--out", &d.path("b")])]);
    assert_eq!(code(&o), 2);
    let o = saqe(&["predict", "--survey", "/no/such/file.csv", "--method", "dir", "--out", &d.path("c")]);
    assert_eq!(code(&o), 2);

    let bad = d.path("bad.csv");
    fs::write(&bad, "area,y,x1\na,1.0,2.0\na,nan,3.0\nb,1.0,1.0\n").unwrap();
    let o = saqe(&["predict", "--survey", &bad, "--method", "dir", "--out", &d.path("d")]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let o = saqe(&["simulate", "--reps", "0", "--out", &d.path("e")]);
    assert_eq!(code(&o), 2);
    let o = saqe(&["--threads", "0", "simulate", "--reps", "1", "--out", &d.path("f")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn separable_drm_reports_non_convergence() {
    let d = data();
    let path = d.path("sep.csv");
    // x is orthogonal to y within each area, so the centralized slope is zero
    // and the residuals are y minus the area mean: tiny in one area, large in
    // the other, hence separable by a quadratic tilt.
    let x = [1.0, 1.0, -1.0, -1.0, 0.0, 0.0];
    let y = [0.1, -0.1, 0.1, -0.1, 0.2, -0.2];
    let mut body = String::from("area,y,x1\n");
    for (k, scale) in [(0, 1.0), (1, 50.0)] {
        for j in 0..6 {
            body.push_str(&format!("a{k},{},{}\n", 3.0 + scale * y[j], x[j]));
        }
    }
    fs::write(&path, body).unwrap();
    let o = saqe(&["fit-drm", "--survey", &path, "--basis", "quadratic", "--out", &d.path("g")]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = saqe(&["predict", "--survey", &path, "--basis", "quadratic", "--method", "el", "--out", &d.path("g2")]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn fit_and_mse_commands_write_artifacts() {
    let d = data();
    let ner = d.path("ner");
    let o = run("fit-ner", &[survey_args(&d), census_args(&d), strs(&["--out", &ner])]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit: serde_json::Value = serde_json::from_slice(&read(&ner, "ner_fit.json")).unwrap();
    assert_eq!(fit["xbar_source"], "census");

    let drm = d.path("drm");
    let o = run("fit-drm", &[survey_args(&d), strs(&["--out", &drm])]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(Path::new(&drm).join("drm_fit.json").exists());

    let mse = d.path("mse");
    let o = run("mse", &[survey_args(&d), census_args(&d), strs(&["--method", "ebel2", "--B", "6", "--out", &mse])]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(read(&mse, "mse.csv")).unwrap();
    assert!(csv.starts_with("area_id,alpha,mse,failures"));
    assert_eq!(csv.lines().count(), 1 + 6 * 5);

    let o = run(
        "mse",
        &[survey_args(&d), census_args(&d), strs(&["--method", "ebel2", "--variant", "nocensus-drm", "--out", &d.path("h")])],
    );
    assert_eq!(code(&o), 2);

    let shadow = d.path("shadow");
    let o = run("shadow", &[survey_args(&d), strs(&["--seed", "4", "--out", &shadow])]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(String::from_utf8(read(&shadow, "shadow.csv")).unwrap().lines().count(), 1 + 6 * 12);
}

#[test]
fn replay_reproduces_predictions_and_mse() {
    let d = data();
    for (cmd, extra, file) in [
        ("predict", strs(&["--method", "dir,ner,el,ebel2,mr,mq", "--seed", "5"]), "quantiles.csv"),
        ("mse", strs(&["--method", "el", "--B", "5", "--seed", "8"]), "mse.csv"),
    ] {
        let first = d.path(&format!("{cmd}-1"));
        let again = d.path(&format!("{cmd}-2"));
        let mut parts = vec![survey_args(&d), census_args(&d), extra];
        parts.push(strs(&["--out", &first]));
        let o = run(cmd, &parts);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let meta = RunMetadata::read(&Path::new(&first).join("run-metadata.json")).unwrap();
        assert_eq!(meta.command, cmd);
        assert!(!meta.args.iter().any(|a| a == "--out"));
        let o = saqe(&["replay", "--metadata", &format!("{first}/run-metadata.json"), "--out", &again]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(read(&first, file), read(&again, file));
        assert!(Path::new(&again).join("run-metadata.json").exists());
    }
}

#[test]
fn simulate_is_reproducible_and_thread_invariant() {
    let d = data();
    let args = ["simulate", "--scenario", "iii", "--areas", "6", "--pop-size", "150", "--nk", "10", "--reps", "4", "--seed", "7"];
    let runs: Vec<String> = ["1", "1", "3"]
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let out = d.path(&format!("sim{i}"));
            let mut a: Vec<&str> = vec!["--threads", t];
            a.extend(args);
            a.extend(["--methods", "dir,ner,el,ebel2,mr,mq,eb2", "--bootstrap-B", "3", "--out", &out]);
            let o = saqe(&a);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
            out
        })
        .collect();
    for file in ["amse.csv", "area_mse.csv", "ratios.csv"] {
        assert_eq!(read(&runs[0], file), read(&runs[1], file), "{file} differs between identical runs");
        assert_eq!(read(&runs[0], file), read(&runs[2], file), "{file} depends on the thread count");
    }
    let replay = d.path("sim-replay");
    let o = saqe(&["replay", "--metadata", &format!("{}/run-metadata.json", runs[0]), "--out", &replay]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read(&runs[0], "amse.csv"), read(&replay, "amse.csv"));
}

#[test]
fn config_file_supplies_flags_and_cli_wins() {
    let d = data();
    let cfg = d.path("run.toml");
    fs::write(
        &cfg,
        format!(
            "x_cols = \"x1,x2,x3\"\n[predict]\nsurvey = \"{}\"\nmethod = \"dir\"\nalphas = [0.25, 0.5]\n",
            d.survey.display()
        ),
    )
    .unwrap();
    let out = d.path("cfg");
    let o = saqe(&["--config", &cfg, "predict", "--alphas", "0.1", "--out", &out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(read(&out, "quantiles.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(csv.lines().skip(1).all(|l| l.contains(",0.1,")));

    let o = saqe(&["--config", &d.path("missing.toml"), "predict", "--out", &out]);
    assert_eq!(code(&o), 2);
}

#[test]
fn floats_round_trip_with_seventeen_digits() {
    let d = data();
    let out = d.path("digits");
    let o = run("predict", &[survey_args(&d), strs(&["--method", "ner", "--out", &out])]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(read(&out, "quantiles.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "quantile").expect("quantile column");
    for line in csv.lines().skip(1) {
        let field = line.split(',').nth(col).unwrap();
        let mantissa = field.split('e').next().unwrap().replace(['-', '.'], "");
        assert_eq!(mantissa.len(), 17, "{field}");
    }
}
