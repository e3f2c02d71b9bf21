use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::population::{area_id, draw_sample, gen_population, BinomP, PopulationDesign, Scenario};
use crate::bootstrap::{bootstrap_mse, population_quantiles, BootstrapInputs, BootstrapPlan, MethodPredictor, Variant};
use crate::error::{Error, Result};
use crate::fmt_f64;
use crate::pipeline::{fit_models, predict_quantiles, Method, PredictSettings};
use crate::quantile::{trimmed_ratio, validate_alphas, DEFAULT_ALPHAS};
use crate::rng::RngStream;

/// Largest tolerated share of failed repetitions.
pub const MAX_REP_FAILURE_SHARE: f64 = 0.05;

/// Methods the bootstrap ratios are computed for by default.
pub const DEFAULT_BOOTSTRAP_METHODS: [Method; 4] = [Method::Dir, Method::El, Method::Mr, Method::Ebel2];

/// Everything needed to rerun an experiment exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub beta_scale: f64,
    pub areas: usize,
    pub pop_size: usize,
    pub sample_size: usize,
    pub reps: usize,
    pub seed: u64,
    pub binom_p: BinomP,
    pub methods: Vec<Method>,
    pub alphas: Vec<f64>,
    /// Bootstrap replicates per repetition; zero disables the ratio table.
    pub bootstrap_b: usize,
    pub bootstrap_methods: Vec<Method>,
    pub settings: PredictSettings,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::I,
            beta_scale: 1.5,
            areas: 20,
            pop_size: 1000,
            sample_size: 30,
            reps: 200,
            seed: 1,
            binom_p: BinomP::default(),
            methods: vec![Method::Dir, Method::Ner, Method::El, Method::Mr, Method::Ebel2],
            alphas: DEFAULT_ALPHAS.to_vec(),
            bootstrap_b: 0,
            bootstrap_methods: DEFAULT_BOOTSTRAP_METHODS.to_vec(),
            settings: PredictSettings::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn design(&self) -> PopulationDesign {
        PopulationDesign {
            scenario: self.scenario,
            beta_scale: self.beta_scale,
            areas: self.areas,
            pop_size: self.pop_size,
            binom_p: self.binom_p,
        }
    }

    /// Bootstrap methods that are also simulated.
    pub fn effective_bootstrap_methods(&self) -> Vec<Method> {
        if self.bootstrap_b == 0 {
            return Vec::new();
        }
        self.bootstrap_methods.iter().copied().filter(|m| self.methods.contains(m)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.design().validate()?;
        validate_alphas(&self.alphas)?;
        if self.reps == 0 {
            return Err(Error::Config("need at least one repetition".into()));
        }
        if self.sample_size < 2 || self.sample_size > self.pop_size {
            return Err(Error::Config(format!("sample size {} is outside 2..={}", self.sample_size, self.pop_size)));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("method list is empty".into()));
        }
        if self.bootstrap_b == 1 {
            return Err(Error::Config("bootstrap needs B >= 2".into()));
        }
        if self.bootstrap_b > 0 && self.effective_bootstrap_methods().is_empty() {
            return Err(Error::Config("none of the bootstrap methods is among the simulated methods".into()));
        }
        if self.bootstrap_b > 0 && self.areas < 5 {
            return Err(Error::Config("trimmed bootstrap ratios need at least 5 areas".into()));
        }
        Ok(())
    }
}

/// Bootstrap-to-simulated MSE ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub methods: Vec<Method>,
    /// Trimmed mean over areas, `ratio[method][alpha]`.
    pub ratio: Vec<Vec<f64>>,
    /// Bootstrap MSE averaged over repetitions, `[method][area][alpha]`.
    pub bootstrap_mse: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: ScenarioSpec,
    pub area_ids: Vec<String>,
    /// `amse[method][alpha]`, averaged over areas and repetitions.
    pub amse: Vec<Vec<f64>>,
    /// `area_mse[method][area][alpha]`, averaged over repetitions.
    pub area_mse: Vec<Vec<Vec<f64>>>,
    pub ratios: Option<RatioTable>,
    pub reps_used: usize,
    pub failures: Vec<String>,
    /// Largest DRM constraint residual over every DRM fit, bootstrap refits
    /// included.
    pub max_constraint_violation: f64,
    pub drm_fits: usize,
}

impl ExperimentReport {
    pub fn method_index(&self, m: Method) -> Option<usize> {
        self.spec.methods.iter().position(|&x| x == m)
    }

    pub fn amse_of(&self, m: Method, alpha: f64) -> Option<f64> {
        let a = self.spec.alphas.iter().position(|&x| x == alpha)?;
        Some(self.amse[self.method_index(m)?][a])
    }

    pub fn ratio_of(&self, m: Method, alpha: f64) -> Option<f64> {
        let r = self.ratios.as_ref()?;
        let a = self.spec.alphas.iter().position(|&x| x == alpha)?;
        Some(r.ratio[r.methods.iter().position(|&x| x == m)?][a])
    }

    /// Writes amse.csv, area_mse.csv, ratios.csv (when bootstrapped) and
    /// run-metadata.json into `dir`. `args` is the command line that
    /// reproduces the run, recorded in the metadata.
    pub fn write_outputs(&self, dir: &Path, args: Vec<String>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let alphas = &self.spec.alphas;

        let path = dir.join("amse.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["method", "alpha", "amse"]).map_err(|e| Error::csv(&path, e))?;
        for (m, row) in self.spec.methods.iter().zip(&self.amse) {
            for (a, v) in alphas.iter().zip(row) {
                w.write_record([m.tag(), &a.to_string(), &fmt_f64(*v)]).map_err(|e| Error::csv(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let path = dir.join("area_mse.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
        w.write_record(["method", "area_id", "alpha", "mse"]).map_err(|e| Error::csv(&path, e))?;
        for (m, areas) in self.spec.methods.iter().zip(&self.area_mse) {
            for (id, row) in self.area_ids.iter().zip(areas) {
                for (a, v) in alphas.iter().zip(row) {
                    w.write_record([m.tag(), id, &a.to_string(), &fmt_f64(*v)]).map_err(|e| Error::csv(&path, e))?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        if let Some(r) = &self.ratios {
            let path = dir.join("ratios.csv");
            let mut w = csv::Writer::from_path(&path).map_err(|e| Error::csv(&path, e))?;
            w.write_record(["method", "alpha", "ratio"]).map_err(|e| Error::csv(&path, e))?;
            for (m, row) in r.methods.iter().zip(&r.ratio) {
                for (a, v) in alphas.iter().zip(row) {
                    w.write_record([m.tag(), &a.to_string(), &fmt_f64(*v)]).map_err(|e| Error::csv(&path, e))?;
                }
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }

        let meta = RunMetadata::simulate(self, args);
        meta.write(&dir.join("run-metadata.json"))
    }
}

/// Replay record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Fully resolved command-line arguments, without the output location.
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ScenarioSpec>,
    /// Which formula produced the binomial covariate's probability.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binom_p_note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reps_used: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_constraint_violation: Option<f64>,
}

/// Version string recorded in metadata.
pub fn version_string() -> String {
    format!("saqe v{}", env!("CARGO_PKG_VERSION"))
}

impl RunMetadata {
    pub fn new(command: impl Into<String>, seed: Option<u64>, args: Vec<String>) -> Self {
        Self {
            command: command.into(),
            version: version_string(),
            seed,
            args,
            spec: None,
            binom_p_note: None,
            reps_used: None,
            failures: Vec::new(),
            max_constraint_violation: None,
        }
    }

    fn simulate(report: &ExperimentReport, args: Vec<String>) -> Self {
        let note = match report.spec.binom_p {
            BinomP::ZClamped => "p = clamp(0.6 + 0.1 z, 0.01, 0.99), z the Beta(0.6, 0.6) draw",
            BinomP::RawClamped => "p = clamp(0.6 + 0.1 x2, 0.01, 0.99), x2 = 50 z",
        };
        Self {
            spec: Some(report.spec.clone()),
            binom_p_note: Some(note.into()),
            reps_used: Some(report.reps_used),
            failures: report.failures.clone(),
            max_constraint_violation: Some(report.max_constraint_violation),
            ..Self::new("simulate", Some(report.spec.seed), args)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

struct RepOutcome {
    /// Squared errors `[method][area][alpha]`.
    sq: Vec<Vec<Vec<f64>>>,
    /// Bootstrap MSEs `[bootstrap method][area][alpha]`.
    boot: Vec<Vec<Vec<f64>>>,
    violation: f64,
    drm_fits: usize,
}

fn run_rep(spec: &ScenarioSpec, boot_methods: &[Method], r: usize) -> Result<RepOutcome> {
    let rep = RngStream::new(spec.seed, 0).child(r as u64);
    let pop = gen_population(&spec.design(), rep.child(0))?;
    let (sample, census) = draw_sample(&pop, spec.sample_size, rep.child(1))?;
    let alphas = &spec.alphas;

    let mut fit_methods = spec.methods.clone();
    if !boot_methods.is_empty() {
        // Bootstrap populations need the NER variance components and G_k.
        fit_methods.extend([Method::Ner, Method::El]);
    }
    let fits = fit_models(&sample, Some(&census), &fit_methods, &spec.settings, None)?;
    let mut violation = fits.drm.as_ref().map_or(0.0, |d| d.max_constraint_violation());
    let mut drm_fits = usize::from(fits.drm.is_some());

    let truth = pop.areas.iter().map(|a| population_quantiles(&a.y, alphas)).collect::<Result<Vec<_>>>()?;
    let sq = spec
        .methods
        .iter()
        .map(|&m| {
            let t = predict_quantiles(m, &sample, Some(&census), &fits, alphas, &spec.settings, rep.child(2))?;
            Ok(t.values
                .iter()
                .zip(&truth)
                .map(|(p, tr)| p.iter().zip(tr).map(|(a, b)| (a - b).powi(2)).collect())
                .collect())
        })
        .collect::<Result<Vec<Vec<Vec<f64>>>>>()?;

    let mut boot = vec![Vec::new(); boot_methods.len()];
    if !boot_methods.is_empty() {
        let ner = fits.ner.as_ref().expect("fitted above");
        let inputs = BootstrapInputs { sample: &sample, census: Some(&census), ner, drm: fits.drm.as_ref() };
        for (vi, variant) in [Variant::CensusDrm, Variant::CensusNer].into_iter().enumerate() {
            let group: Vec<(usize, Method)> =
                boot_methods.iter().copied().enumerate().filter(|&(_, m)| Variant::natural_for(m, true) == variant).collect();
            if group.is_empty() {
                continue;
            }
            let plan = BootstrapPlan {
                replicates: spec.bootstrap_b,
                variant,
                alphas: alphas.clone(),
                stream: rep.child(3 + vi as u64),
            };
            let methods: Vec<Method> = group.iter().map(|&(_, m)| m).collect();
            let uses_drm = methods.iter().any(|m| m.needs_drm());
            let pred = MethodPredictor::new(methods, spec.settings, fits.drm.clone());
            let report = bootstrap_mse(&plan, &inputs, &pred)?;
            if uses_drm {
                violation = violation.max(pred.max_constraint_violation());
                drm_fits += spec.bootstrap_b - report.failures;
            }
            for ((i, _), table) in group.into_iter().zip(report.mse) {
                boot[i] = table;
            }
        }
    }
    Ok(RepOutcome { sq, boot, violation, drm_fits })
}

/// Runs the repeated-sampling experiment. Repetitions run in parallel and
/// are reduced in repetition order, so results do not depend on the thread
/// count.
pub fn run_experiment(spec: &ScenarioSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let boot_methods = spec.effective_bootstrap_methods();
    let outcomes: Vec<Result<RepOutcome>> = (0..spec.reps).into_par_iter().map(|r| run_rep(spec, &boot_methods, r)).collect();

    let (m, k, a) = (spec.methods.len(), spec.areas, spec.alphas.len());
    let zeros = |rows: usize| vec![vec![vec![0.0; a]; k]; rows];
    let mut area_sum = zeros(m);
    let mut boot_sum = zeros(boot_methods.len());
    let mut failures = Vec::new();
    let mut used = 0usize;
    let mut violation = 0.0f64;
    let mut drm_fits = 0usize;
    for (r, o) in outcomes.into_iter().enumerate() {
        let o = match o {
            Ok(o) => o,
            Err(e) => {
                failures.push(format!("repetition {r}: {e}"));
                continue;
            }
        };
        used += 1;
        violation = violation.max(o.violation);
        drm_fits += o.drm_fits;
        for (acc, add) in area_sum.iter_mut().zip(&o.sq).chain(boot_sum.iter_mut().zip(&o.boot)) {
            for (ra, rb) in acc.iter_mut().zip(add) {
                for (x, y) in ra.iter_mut().zip(rb) {
                    *x += y;
                }
            }
        }
    }
    if failures.len() as f64 > MAX_REP_FAILURE_SHARE * spec.reps as f64 || used == 0 {
        return Err(Error::NonConvergence {
            what: "simulation repetitions",
            iterations: spec.reps,
            detail: format!("{} of {} repetitions failed", failures.len(), spec.reps),
            trace: failures,
        });
    }
    for f in &failures {
        log::warn!("excluded {f}");
    }
    let scale = |t: &mut Vec<Vec<Vec<f64>>>| t.iter_mut().flatten().flatten().for_each(|v| *v /= used as f64);
    scale(&mut area_sum);
    scale(&mut boot_sum);
    let amse = area_sum
        .iter()
        .map(|areas| (0..a).map(|j| areas.iter().map(|row| row[j]).sum::<f64>() / k as f64).collect())
        .collect();
    let ratios = if boot_methods.is_empty() {
        None
    } else {
        let ratio = boot_methods
            .iter()
            .zip(&boot_sum)
            .map(|(bm, boot)| {
                let sim = &area_sum[spec.methods.iter().position(|x| x == bm).expect("subset")];
                (0..a)
                    .map(|j| {
                        let est: Vec<f64> = boot.iter().map(|row| row[j]).collect();
                        let s: Vec<f64> = sim.iter().map(|row| row[j]).collect();
                        trimmed_ratio(&est, &s)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Some(RatioTable { methods: boot_methods, ratio, bootstrap_mse: boot_sum })
    };
    Ok(ExperimentReport {
        spec: spec.clone(),
        area_ids: (0..k).map(area_id).collect(),
        amse,
        area_mse: area_sum,
        ratios,
        reps_used: used,
        failures,
        max_constraint_violation: violation,
        drm_fits,
    })
}
