//! Replication harness: bias, Monte Carlo and asymptotic standard errors,
//! coverage and MISE of the baseline hazard.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{fit, FitResult};
use crate::model::ModelConfig;
use crate::optimizer::InnerLoopConfig;
use crate::simulate::{alpha_names, event_time_quantile, generate, model_config, true_h0, SimScenario, TruthBundle};
use crate::variance::OuterLoopConfig;

pub const GRID_POINTS: usize = 200;
const Z975: f64 = 1.959963984540054;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mpl,
    Midpoint,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Mpl => "mpl",
            Method::Midpoint => "midpoint",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mpl" => Ok(Method::Mpl),
            "midpoint" => Ok(Method::Midpoint),
            _ => Err(Error::Validation(format!("unknown method '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub reps: usize,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub inner: InnerLoopConfig,
    #[serde(default)]
    pub outer: OuterLoopConfig,
    /// Model fitted to each replication; the design default when absent.
    #[serde(default)]
    pub model: Option<ModelConfig>,
}

impl BenchConfig {
    pub fn new(reps: usize, methods: Vec<Method>) -> Self {
        Self { reps, methods, inner: InnerLoopConfig::default(), outer: OuterLoopConfig::default(), model: None }
    }
}

/// Estimates of one fit that are scored against the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepFit {
    pub names: Vec<String>,
    pub estimate: Vec<f64>,
    /// Asymptotic standard errors; `None` for variance components.
    pub se: Vec<Option<f64>>,
    pub h0: Vec<f64>,
    pub h0_lower: Vec<f64>,
    pub h0_upper: Vec<f64>,
    pub ise: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub method: Method,
    pub parameter: String,
    pub truth: f64,
    pub bias: f64,
    pub mc_se: f64,
    pub mean_asym_se: Option<f64>,
    pub cp_asym: Option<f64>,
    pub cp_mc: f64,
    pub n_ok: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardBand {
    pub method: Method,
    pub time: Vec<f64>,
    pub truth: Vec<f64>,
    pub mean: Vec<f64>,
    /// Mean of the per-replication asymptotic 95% limits.
    pub asym_lower: Vec<f64>,
    pub asym_upper: Vec<f64>,
    /// Empirical 2.5% and 97.5% quantiles over replications.
    pub q025: Vec<f64>,
    pub q975: Vec<f64>,
}

impl HazardBand {
    /// Share of grid points whose true value lies inside the mean
    /// asymptotic band.
    pub fn truth_coverage(&self) -> f64 {
        let inside = (0..self.time.len())
            .filter(|&k| self.asym_lower[k] <= self.truth[k] && self.truth[k] <= self.asym_upper[k])
            .count();
        inside as f64 / self.time.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub mise_h0: f64,
    pub successes: usize,
    pub failures: usize,
    pub unreliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: SimScenario,
    pub reps: usize,
    pub seeds: Vec<u64>,
    pub rows: Vec<ParamRow>,
    pub methods: Vec<MethodSummary>,
    pub bands: Vec<HazardBand>,
}

impl BenchReport {
    pub fn row(&self, method: Method, parameter: &str) -> Option<&ParamRow> {
        self.rows.iter().find(|r| r.method == method && r.parameter == parameter)
    }

    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn band(&self, method: Method) -> Option<&HazardBand> {
        self.bands.iter().find(|b| b.method == method)
    }
}

/// Seed of replication `r`.
pub fn replication_seed(base: u64, r: usize) -> u64 {
    base.wrapping_add(r as u64)
}

/// Equally spaced grid of `GRID_POINTS` points on `[0, upper]`.
pub fn hazard_grid(upper: f64) -> Vec<f64> {
    (0..GRID_POINTS).map(|k| upper * k as f64 / (GRID_POINTS - 1) as f64).collect()
}

/// Trapezoid rule over a grid.
pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2).zip(values.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

/// Integrated squared error of an estimated baseline hazard.
pub fn ise(grid: &[f64], estimate: &[f64], truth: &[f64]) -> f64 {
    let sq: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).collect();
    trapezoid(grid, &sq)
}

/// Mean integrated squared error over replications.
pub fn mise_h0(grid: &[f64], estimates: &[Vec<f64>], truth: &[f64]) -> f64 {
    if estimates.is_empty() {
        return f64::NAN;
    }
    estimates.iter().map(|e| ise(grid, e, truth)).sum::<f64>() / estimates.len() as f64
}

/// Sample standard deviation (two-pass).
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
}

fn scored(fit: &FitResult, truth: &TruthBundle, grid: &[f64]) -> Result<RepFit> {
    let ly = fit.spec.layout();
    let se = fit.standard_errors();
    let mut names = Vec::new();
    let mut estimate = Vec::new();
    let mut ses = Vec::new();
    for j in 0..ly.p {
        names.push(format!("beta{}", j + 1));
        estimate.push(fit.state.beta[j]);
        ses.push(Some(se[ly.beta().start + j]));
    }
    names.push("gamma".into());
    estimate.push(fit.state.gamma[0]);
    ses.push(Some(se[ly.gamma().start]));
    if truth.alpha_model_order.is_some() {
        for (k, nm) in alpha_names(truth.scenario.design).into_iter().enumerate() {
            names.push(nm);
            estimate.push(fit.state.alpha[k]);
            ses.push(Some(se[ly.alpha().start + k]));
        }
    }
    names.push("sigma_eps".into());
    estimate.push(fit.var.sigma_eps2.sqrt());
    ses.push(None);
    for (l, s2) in fit.var.sigma_kappa2[0].iter().enumerate() {
        names.push(format!("sigma_kappa{l}"));
        estimate.push(s2.sqrt());
        ses.push(None);
    }
    let cov = fit.covariance_matrix();
    let th = ly.theta();
    let mut h0 = Vec::with_capacity(grid.len());
    let mut lo = Vec::with_capacity(grid.len());
    let mut hi = Vec::with_capacity(grid.len());
    for &t in grid {
        let psi = fit.spec.baseline.eval(t)?;
        let v: f64 = psi.iter().zip(&fit.state.theta).map(|(p, th)| p * th).sum();
        let mut var = 0.0;
        for (a, pa) in psi.iter().enumerate() {
            for (b, pb) in psi.iter().enumerate() {
                var += pa * cov[(th.start + a, th.start + b)] * pb;
            }
        }
        let s = var.max(0.0).sqrt();
        h0.push(v);
        lo.push((v - Z975 * s).max(0.0));
        hi.push(v + Z975 * s);
    }
    let tv: Vec<f64> = grid.iter().map(|&t| true_h0(truth.scenario.design, t)).collect();
    Ok(RepFit { ise: ise(grid, &h0, &tv), names, estimate, se: ses, h0, h0_lower: lo, h0_upper: hi, converged: fit.converged })
}

fn truth_values(truth: &TruthBundle) -> Vec<f64> {
    let m = &truth.model;
    let mut v = m.beta.clone();
    v.push(m.gamma);
    if let Some(a) = &truth.alpha_model_order {
        v.extend(a);
    }
    v.push(m.sigma_eps);
    v.extend(&m.sigma_kappa);
    v
}

/// One replication: generate, then fit each method. Failed or
/// non-converged fits are `None`.
pub fn run_replication(scn: &SimScenario, cfg: &BenchConfig) -> Result<(TruthBundle, Vec<Option<FitResult>>)> {
    let (ds, truth) = generate(scn)?;
    let model_cfg = cfg.model.clone().unwrap_or_else(|| model_config(scn.design));
    let fits = cfg
        .methods
        .iter()
        .map(|m| {
            let data = match m {
                Method::Mpl => ds.clone(),
                Method::Midpoint => ds.midpoint_impute(),
            };
            match fit(&data, &model_cfg, &cfg.inner, &cfg.outer) {
                Ok(f) if f.converged => Some(f),
                Ok(_) => {
                    log::warn!("{} fit did not converge (seed {})", m.name(), scn.seed);
                    None
                }
                Err(e) => {
                    log::warn!("{} fit failed (seed {}): {e}", m.name(), scn.seed);
                    None
                }
            }
        })
        .collect();
    Ok((truth, fits))
}

fn quantile_of(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    crate::basis::quantile(values, p)
}

/// Runs `cfg.reps` replications of the scenario in parallel on the current
/// rayon pool and aggregates them in replication order.
pub fn run_bench(scn: &SimScenario, cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.reps < 2 {
        return Err(Error::Validation("a benchmark needs at least 2 replications".into()));
    }
    if cfg.methods.is_empty() {
        return Err(Error::Validation("no methods selected".into()));
    }
    let base = scn.calibrated()?;
    let seeds: Vec<u64> = (0..cfg.reps).map(|r| replication_seed(base.seed, r)).collect();
    let fitted: Vec<(TruthBundle, Vec<Option<FitResult>>)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut s = base.clone();
            s.seed = seed;
            run_replication(&s, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let support = fitted
        .iter()
        .flat_map(|(_, f)| f.iter().flatten().map(|r| r.spec.baseline.upper()))
        .fold(f64::INFINITY, f64::min);
    let grid = hazard_grid(event_time_quantile(&base, 0.95).min(support));
    let results: Vec<(TruthBundle, Vec<Option<RepFit>>)> = fitted
        .into_par_iter()
        .map(|(truth, fits)| {
            let scored: Vec<Option<RepFit>> = fits
                .iter()
                .map(|f| f.as_ref().and_then(|f| scored(f, &truth, &grid).ok()))
                .collect();
            (truth, scored)
        })
        .collect();
    let truth_vals = truth_values(&results[0].0);
    let true_curve: Vec<f64> = grid.iter().map(|&t| true_h0(base.design, t)).collect();
    let mut rows = Vec::new();
    let mut methods = Vec::new();
    let mut bands = Vec::new();
    for (mi, &method) in cfg.methods.iter().enumerate() {
        let ok: Vec<&RepFit> = results.iter().filter_map(|(_, f)| f[mi].as_ref()).collect();
        let failures = cfg.reps - ok.len();
        methods.push(MethodSummary {
            method,
            mise_h0: if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| r.ise).sum::<f64>() / ok.len() as f64 },
            successes: ok.len(),
            failures,
            unreliable: failures as f64 > 0.2 * cfg.reps as f64,
        });
        if let Some(first) = ok.first() {
            for (k, name) in first.names.iter().enumerate() {
                let est: Vec<f64> = ok.iter().map(|r| r.estimate[k]).collect();
                let truth = truth_vals[k];
                let mean = est.iter().sum::<f64>() / est.len() as f64;
                let mc_se = sample_sd(&est);
                let se: Option<Vec<f64>> = ok.iter().map(|r| r.se[k]).collect();
                let cover = |e: f64, s: f64| (e - truth).abs() <= Z975 * s;
                let frac = |c: usize| c as f64 / est.len() as f64;
                rows.push(ParamRow {
                    method,
                    parameter: name.clone(),
                    truth,
                    bias: mean - truth,
                    mc_se,
                    mean_asym_se: se.as_ref().map(|s| s.iter().sum::<f64>() / s.len() as f64),
                    cp_asym: se.as_ref().map(|s| frac(est.iter().zip(s).filter(|(e, s)| cover(**e, **s)).count())),
                    cp_mc: frac(est.iter().filter(|e| cover(**e, mc_se)).count()),
                    n_ok: est.len(),
                });
            }
            let n = ok.len() as f64;
            let mut band = HazardBand {
                method,
                time: grid.clone(),
                truth: true_curve.clone(),
                mean: vec![],
                asym_lower: vec![],
                asym_upper: vec![],
                q025: vec![],
                q975: vec![],
            };
            for g in 0..grid.len() {
                let mut vals: Vec<f64> = ok.iter().map(|r| r.h0[g]).collect();
                band.mean.push(vals.iter().sum::<f64>() / n);
                band.asym_lower.push(ok.iter().map(|r| r.h0_lower[g]).sum::<f64>() / n);
                band.asym_upper.push(ok.iter().map(|r| r.h0_upper[g]).sum::<f64>() / n);
                band.q025.push(quantile_of(&mut vals, 0.025));
                band.q975.push(quantile_of(&mut vals, 0.975));
            }
            bands.push(band);
        }
    }
    Ok(BenchReport { scenario: base, reps: cfg.reps, seeds, rows, methods, bands })
}

pub const REPORT_CSV_HEADER: &str = "method,parameter,truth,bias,mc_se,mean_asym_se,cp_asym,cp_mc,n_ok";
pub const BAND_CSV_HEADER: &str = "method,time,truth,mean,asym_lower,asym_upper,q025,q975";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn report_csv(report: &BenchReport) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method.name(),
            r.parameter,
            r.truth,
            r.bias,
            r.mc_se,
            opt(r.mean_asym_se),
            opt(r.cp_asym),
            r.cp_mc,
            r.n_ok
        ));
    }
    for m in &report.methods {
        out.push_str(&format!("{},mise_h0,0,{},,,,,{}\n", m.method.name(), m.mise_h0, m.successes));
    }
    out
}

pub fn band_csv(report: &BenchReport) -> String {
    let mut out = String::from(BAND_CSV_HEADER);
    out.push('\n');
    for b in &report.bands {
        for k in 0..b.time.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                b.method.name(),
                b.time[k],
                b.truth[k],
                b.mean[k],
                b.asym_lower[k],
                b.asym_upper[k],
                b.q025[k],
                b.q975[k]
            ));
        }
    }
    out
}

/// Writes `report.csv`, `report.json` and `h0_band.csv` into `dir`.
pub fn emit(report: &BenchReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let write = |name: &str, body: &str| -> Result<()> {
        let mut f = std::fs::File::create(dir.join(name))?;
        f.write_all(body.as_bytes())?;
        Ok(())
    };
    write("report.csv", &report_csv(report))?;
    write("report.json", &serde_json::to_string_pretty(report)?)?;
    write("h0_band.csv", &band_csv(report))?;
    Ok(())
}

/// Per-method summary lines for quick inspection.
pub fn summary_table(report: &BenchReport) -> BTreeMap<String, String> {
    report
        .rows
        .iter()
        .map(|r| {
            (
                format!("{}:{}", r.method.name(), r.parameter),
                format!("bias {:+.4} mc_se {:.4} se {} cp {}", r.bias, r.mc_se, opt(r.mean_asym_se), opt(r.cp_asym)),
            )
        })
        .collect()
}
