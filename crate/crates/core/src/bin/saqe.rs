//! Command-line front end: fitting, prediction, bootstrap MSE, simulation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use saqe::bootstrap::{bootstrap_mse, BootstrapInputs, BootstrapPlan, MethodPredictor, Variant};
use saqe::data::{load_census_csv, load_survey_csv, write_survey_csv, CensusFrame, CensusSchema, SurveySample, SurveySchema};
use saqe::drm::{fit_drm_sample, Basis};
use saqe::ner::fit_ner_mle;
use saqe::pipeline::{check_requirements, fit_models, predict_all, Method, PredictSettings};
use saqe::quantile::{parse_alphas, QuantileTable};
use saqe::rng::RngStream;
use saqe::sim::{run_experiment, shadow_population, BinomP, RunMetadata, Scenario, ScenarioSpec};
use saqe::{Error, Result};

const SUBCOMMANDS: [&str; 7] = ["fit-ner", "fit-drm", "predict", "mse", "simulate", "shadow", "replay"];
const DEFAULT_ALPHAS: &str = "0.05,0.25,0.5,0.75,0.95";

#[derive(Parser, Debug)]
#[command(name = "saqe", version, about = "Small-area quantile estimation")]
struct Cli {
    /// Worker threads (default: all available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// TOML file supplying any flag. Top-level keys apply to every command,
    /// a `[command]` table to that command only. Command-line flags win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More logging (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SurveyArgs {
    /// Survey CSV with one row per sampled unit.
    #[arg(long)]
    survey: PathBuf,
    #[arg(long, default_value = "area")]
    area_col: String,
    #[arg(long, default_value = "y")]
    y_col: String,
    /// Comma-separated covariate columns.
    #[arg(long, default_value = "x1")]
    x_cols: String,
}

impl SurveyArgs {
    fn x_cols(&self) -> Vec<String> {
        self.x_cols.split(',').map(|s| s.trim().to_owned()).filter(|s| !s.is_empty()).collect()
    }

    fn load(&self) -> Result<SurveySample> {
        let schema = SurveySchema { area_col: self.area_col.clone(), y_col: self.y_col.clone(), x_cols: self.x_cols() };
        load_survey_csv(&self.survey, &schema)
    }
}

#[derive(Args, Debug, Clone)]
struct CensusArgs {
    /// Census CSV: unit rows, or one `row_type = mean` row per area.
    #[arg(long)]
    census: Option<PathBuf>,
    /// Census column flagging the sampled units (needed by eb1, ebel1, mr, mq).
    #[arg(long)]
    sampled_col: Option<String>,
}

impl CensusArgs {
    fn load(&self, survey: &SurveyArgs) -> Result<Option<CensusFrame>> {
        let Some(path) = &self.census else { return Ok(None) };
        let schema = CensusSchema {
            area_col: survey.area_col.clone(),
            x_cols: survey.x_cols(),
            sampled_col: self.sampled_col.clone(),
            ..CensusSchema::default()
        };
        load_census_csv(path, &schema).map(Some)
    }
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// DRM basis: signroot, linear, quadratic or linear-sqrtabs.
    #[arg(long, default_value = "signroot")]
    basis: String,
    /// Index of the DRM baseline area (sample order).
    #[arg(long, default_value_t = 0)]
    baseline: usize,
    /// Fit the NER model without an intercept.
    #[arg(long)]
    no_intercept: bool,
    /// Monte-Carlo draws for the MR predictor.
    #[arg(long, default_value_t = saqe::competitors::DEFAULT_MC_DRAWS)]
    mr_draws: usize,
}

impl ModelArgs {
    fn settings(&self) -> Result<PredictSettings> {
        let mut s = PredictSettings::default();
        s.drm.basis = self.basis.parse::<Basis>()?;
        s.drm.baseline = self.baseline;
        s.ner.intercept = !self.no_intercept;
        if self.mr_draws == 0 {
            return Err(Error::Config("--mr-draws must be positive".into()));
        }
        s.mr_draws = self.mr_draws;
        Ok(s)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the nested-error regression model by maximum likelihood.
    #[command(args_override_self = true)]
    FitNer {
        #[command(flatten)]
        survey: SurveyArgs,
        #[command(flatten)]
        census: CensusArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the density ratio model to centralized residuals.
    #[command(args_override_self = true)]
    FitDrm {
        #[command(flatten)]
        survey: SurveyArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict area quantiles.
    #[command(args_override_self = true)]
    Predict {
        #[command(flatten)]
        survey: SurveyArgs,
        #[command(flatten)]
        census: CensusArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated methods: dir, ner, eb1, eb2, el, ebel1, ebel2, mr, mq.
        #[arg(long)]
        method: String,
        #[arg(long, default_value = DEFAULT_ALPHAS)]
        alphas: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parametric bootstrap MSE of one predictor.
    #[command(args_override_self = true)]
    Mse {
        #[command(flatten)]
        survey: SurveyArgs,
        #[command(flatten)]
        census: CensusArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        method: String,
        /// Bootstrap replicates.
        #[arg(long = "B", default_value_t = 100)]
        b: usize,
        #[arg(long, default_value = DEFAULT_ALPHAS)]
        alphas: String,
        /// census-drm, census-ner or nocensus-drm (default depends on the method).
        #[arg(long)]
        variant: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated-sampling experiment on synthetic populations.
    #[command(args_override_self = true)]
    Simulate {
        /// i, ii, iii or iv.
        #[arg(long, default_value = "i")]
        scenario: String,
        #[arg(long, default_value_t = 1.5)]
        beta_scale: f64,
        /// Sample size per area.
        #[arg(long, default_value_t = 30)]
        nk: usize,
        #[arg(long, default_value_t = 20)]
        areas: usize,
        /// Population size per area.
        #[arg(long, default_value_t = 1000)]
        pop_size: usize,
        #[arg(long, default_value_t = 200)]
        reps: usize,
        #[arg(long, default_value = "dir,ner,el,mr,ebel")]
        methods: String,
        #[arg(long, default_value = DEFAULT_ALPHAS)]
        alphas: String,
        /// Bootstrap replicates per repetition (0 skips the ratio table).
        #[arg(long = "bootstrap-B", default_value_t = 0)]
        bootstrap_b: usize,
        #[arg(long, default_value = "dir,el,mr,ebel")]
        bootstrap_methods: String,
        /// z-clamped or raw-clamped.
        #[arg(long, default_value = "z-clamped")]
        binom_p: String,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shadow population: fitted values plus within-area permuted residuals.
    #[command(args_override_self = true)]
    Shadow {
        #[command(flatten)]
        survey: SurveyArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun the command recorded in a run-metadata.json.
    #[command(args_override_self = true)]
    Replay {
        #[arg(long)]
        metadata: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("cannot write {}: {e}", path.display()))
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| io_error(out, e))
}

fn finish(out: &Path, command: &str, seed: Option<u64>, args: Vec<String>) -> Result<()> {
    RunMetadata::new(command, seed, args).write(&out.join("run-metadata.json"))
}

fn run(command: Command, args: Vec<String>) -> Result<()> {
    match command {
        Command::FitNer { survey, census, model, out } => {
            let sample = survey.load()?;
            let census = census.load(&survey)?;
            let fit = fit_ner_mle(&sample, census.as_ref(), &model.settings()?.ner)?;
            prepare_out(&out)?;
            write_json(&fit, &out.join("ner_fit.json"))?;
            finish(&out, "fit-ner", None, args)
        }
        Command::FitDrm { survey, model, out } => {
            let sample = survey.load()?;
            let fit = fit_drm_sample(&sample, &model.settings()?.drm, None)?;
            prepare_out(&out)?;
            write_json(&fit, &out.join("drm_fit.json"))?;
            finish(&out, "fit-drm", None, args)
        }
        Command::Predict { survey, census, model, method, alphas, seed, out } => {
            let methods = Method::parse_list(&method)?;
            let alphas = parse_alphas(&alphas)?;
            let settings = model.settings()?;
            let sample = survey.load()?;
            let census = census.load(&survey)?;
            check_requirements(&methods, census.as_ref())?;
            let (_, tables) = predict_all(&methods, &sample, census.as_ref(), &alphas, &settings, RngStream::new(seed, 0), None)?;
            prepare_out(&out)?;
            QuantileTable::write_many(&tables, out.join("quantiles.csv"))?;
            finish(&out, "predict", Some(seed), args)
        }
        Command::Mse { survey, census, model, method, b, alphas, variant, seed, out } => {
            let method: Method = method.parse()?;
            let alphas = parse_alphas(&alphas)?;
            let settings = model.settings()?;
            let sample = survey.load()?;
            let census = census.load(&survey)?;
            let variant = match variant {
                Some(v) => v.parse::<Variant>()?,
                None => Variant::natural_for(method, census.is_some()),
            };
            if variant.uses_census() {
                check_requirements(&[method], census.as_ref())?;
            } else if method.needs_census() {
                return Err(Error::Config(format!("method {method} cannot run under the {variant} bootstrap")));
            }
            let fits = fit_models(&sample, census.as_ref(), &[Method::Ner, Method::El], &settings, None)?;
            let inputs = BootstrapInputs {
                sample: &sample,
                census: census.as_ref(),
                ner: fits.ner.as_ref().expect("fitted"),
                drm: fits.drm.as_ref(),
            };
            let plan = BootstrapPlan { replicates: b, variant, alphas, stream: RngStream::new(seed, 0) };
            let predictor = MethodPredictor::new(vec![method], settings, fits.drm.clone());
            let report = bootstrap_mse(&plan, &inputs, &predictor)?;
            prepare_out(&out)?;
            report.write_csv(out.join("mse.csv"))?;
            finish(&out, "mse", Some(seed), args)
        }
        Command::Simulate {
            scenario,
            beta_scale,
            nk,
            areas,
            pop_size,
            reps,
            methods,
            alphas,
            bootstrap_b,
            bootstrap_methods,
            binom_p,
            seed,
            model,
            out,
        } => {
            let spec = ScenarioSpec {
                scenario: scenario.parse::<Scenario>()?,
                beta_scale,
                areas,
                pop_size,
                sample_size: nk,
                reps,
                seed,
                binom_p: binom_p.parse::<BinomP>()?,
                methods: Method::parse_list(&methods)?,
                alphas: parse_alphas(&alphas)?,
                bootstrap_b,
                bootstrap_methods: Method::parse_list(&bootstrap_methods)?,
                settings: model.settings()?,
            };
            let report = run_experiment(&spec)?;
            report.write_outputs(&out, args)
        }
        Command::Shadow { survey, model, seed, out } => {
            let sample = survey.load()?;
            let shadow = shadow_population(&sample, &model.settings()?.ner, RngStream::new(seed, 0))?;
            prepare_out(&out)?;
            let schema = SurveySchema { area_col: survey.area_col.clone(), y_col: survey.y_col.clone(), x_cols: survey.x_cols() };
            write_survey_csv(&shadow, out.join("shadow.csv"), &schema)?;
            finish(&out, "shadow", Some(seed), args)
        }
        Command::Replay { metadata, out } => {
            let meta = RunMetadata::read(&metadata)?;
            if meta.args.is_empty() {
                let spec = meta
                    .spec
                    .ok_or_else(|| Error::Config(format!("{} records neither arguments nor a spec", metadata.display())))?;
                return run_experiment(&spec)?.write_outputs(&out, Vec::new());
            }
            let mut argv: Vec<OsString> = vec!["saqe".into()];
            argv.extend(meta.args.iter().map(OsString::from));
            argv.extend(["--out".into(), out.into_os_string()]);
            let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Config(format!("recorded arguments no longer parse: {e}")))?;
            if matches!(cli.command, Command::Replay { .. }) {
                return Err(Error::Config("a replay record cannot point at another replay".into()));
            }
            run(cli.command, meta.args)
        }
    }
}

fn config_value(v: &toml::Value) -> Option<Result<String>> {
    match v {
        toml::Value::String(s) => Some(Ok(s.clone())),
        toml::Value::Integer(i) => Some(Ok(i.to_string())),
        toml::Value::Float(f) => Some(Ok(f.to_string())),
        toml::Value::Boolean(_) => None,
        toml::Value::Array(items) => Some(
            items
                .iter()
                .map(|i| match i {
                    toml::Value::String(s) => Ok(s.clone()),
                    toml::Value::Integer(n) => Ok(n.to_string()),
                    toml::Value::Float(f) => Ok(f.to_string()),
                    other => Err(Error::Config(format!("unsupported config list item {other}"))),
                })
                .collect::<Result<Vec<_>>>()
                .map(|v| v.join(",")),
        ),
        other => Some(Err(Error::Config(format!("unsupported config value {other}")))),
    }
}

fn push_config_entries(table: &toml::Table, out: &mut Vec<String>) -> Result<()> {
    for (key, value) in table {
        if value.is_table() {
            continue;
        }
        let flag = format!("--{}", key.replace('_', "-"));
        match (value, config_value(value)) {
            (toml::Value::Boolean(true), _) => out.push(flag),
            (toml::Value::Boolean(false), _) => {}
            (_, Some(v)) => {
                out.push(flag);
                out.push(v?);
            }
            (_, None) => {}
        }
    }
    Ok(())
}

/// Inserts the flags supplied by `--config` right after the subcommand name,
/// so that explicit command-line flags (parsed later) take precedence.
fn merge_config(argv: Vec<String>) -> Result<Vec<String>> {
    let mut config = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            config = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            config = Some(p.to_owned());
        }
    }
    let Some(path) = config else { return Ok(argv) };
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read config {path}: {e}")))?;
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid config {path}: {e}")))?;
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else { return Ok(argv) };
    let mut extra = Vec::new();
    push_config_entries(&table, &mut extra)?;
    if let Some(sub) = table.get(&argv[pos]).and_then(|v| v.as_table()) {
        push_config_entries(sub, &mut extra)?;
    }
    let mut merged = argv[..=pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[pos + 1..]);
    Ok(merged)
}

/// Arguments worth recording for a replay: everything from the subcommand
/// on, minus output, config and thread settings.
fn replay_args(argv: &[String]) -> Vec<String> {
    let Some(pos) = argv.iter().position(|a| SUBCOMMANDS.contains(&a.as_str())) else { return Vec::new() };
    let mut out = Vec::new();
    let mut it = argv[pos..].iter();
    while let Some(a) = it.next() {
        if ["--out", "--config", "--threads"].contains(&a.as_str()) {
            it.next();
        } else if a.starts_with("--out=") || a.starts_with("--config=") || a.starts_with("--threads=") {
        } else if a == "-v" || a == "-vv" || a == "--verbose" {
        } else {
            out.push(a.clone());
        }
    }
    out
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let cli = Cli::parse_from(&argv);
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(saqe::error::exit::CONFIG as u8);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(saqe::error::exit::CONFIG as u8);
        }
    }
    match run(cli.command, replay_args(&argv)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonConvergence { trace, .. } = &e {
                for line in trace {
                    log::info!("{line}");
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
