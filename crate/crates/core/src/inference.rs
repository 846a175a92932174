//! Sandwich covariance, Wald tests and survival predictions.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::erf::erfc;

use crate::data::Dataset;
use crate::deriv::negative_hessian;
use crate::error::{Error, Result};
use crate::model::{JointModel, ModelConfig, ModelSpec, ParameterState, VarianceComponents};
use crate::optimizer::InnerLoopConfig;
use crate::variance::{free_indices, run_outer, ArrowInverse, OuterIteration, OuterLoopConfig};

pub const FIT_SCHEMA_VERSION: u32 = 1;
const Z975: f64 = 1.959963984540054;

/// Fixed covariates of one fitted subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectCovariates {
    pub id: String,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub schema_version: u32,
    pub tool_version: String,
    pub spec: ModelSpec,
    pub parameter_names: Vec<String>,
    pub state: ParameterState,
    pub var: VarianceComponents,
    /// Covariance over zeta = (beta, gamma, theta, alpha), row-major.
    pub covariance: Vec<Vec<f64>>,
    pub active_set: Vec<usize>,
    pub converged: bool,
    pub history: Vec<OuterIteration>,
    pub subjects: Vec<SubjectCovariates>,
    pub data_digest: String,
    pub spec_digest: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn data_digest(ds: &Dataset) -> Result<String> {
    let mut buf = Vec::new();
    ds.write_csv_to(&mut buf)?;
    Ok(sha256_hex(&buf))
}

pub fn parameter_names(spec: &ModelSpec, ds: &Dataset) -> Vec<String> {
    let ly = spec.layout();
    let mut names: Vec<String> = ds.x_names.iter().map(|x| format!("beta[{x}]")).collect();
    let zn = |r: usize| ds.z_names.get(r).cloned().unwrap_or_else(|| format!("z{}", r + 1));
    names.extend((0..ly.q).map(|r| format!("gamma[{}]", zn(r))));
    names.extend((0..ly.m).map(|u| format!("theta[{}]", u + 1)));
    for r in 0..ly.q {
        names.extend((0..ly.b[r]).map(|k| format!("alpha[{}][{}]", zn(r), k + 1)));
    }
    names
}

impl FitResult {
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let d = self.covariance.len();
        DMatrix::from_fn(d, d, |i, j| self.covariance[i][j])
    }

    pub fn zeta(&self) -> Vec<f64> {
        self.state.zeta()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.covariance.len()).map(|i| self.covariance[i][i].max(0.0).sqrt()).collect()
    }

    pub fn predictor(&self) -> JointModel {
        JointModel::predictor(self.spec.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let fit: FitResult = serde_json::from_str(s)?;
        if fit.schema_version != FIT_SCHEMA_VERSION {
            return Err(Error::Validation(format!("unsupported fit schema version {}", fit.schema_version)));
        }
        Ok(fit)
    }
}

/// Fits the model to a dataset: outer loop, active set and sandwich
/// covariance.
pub fn fit(ds: &Dataset, cfg: &ModelConfig, inner: &InnerLoopConfig, outer: &OuterLoopConfig) -> Result<FitResult> {
    let spec = ModelSpec::from_config(cfg, ds)?;
    let model = JointModel::new(spec.clone(), ds)?;
    let res = run_outer(&model, inner, outer)?;
    let cov = sandwich_covariance(&model, &res.state, &res.var, &res.active_set)?;
    let d = cov.nrows();
    Ok(FitResult {
        schema_version: FIT_SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        parameter_names: parameter_names(&spec, ds),
        spec_digest: sha256_hex(serde_json::to_string(&spec)?.as_bytes()),
        data_digest: data_digest(ds)?,
        spec,
        state: res.state,
        var: res.var,
        covariance: (0..d).map(|i| (0..d).map(|j| cov[(i, j)]).collect()).collect(),
        active_set: res.active_set,
        converged: res.converged,
        history: res.history,
        subjects: ds
            .subjects
            .iter()
            .map(|s| SubjectCovariates { id: s.id.clone(), x: s.x.clone(), w: s.w.clone() })
            .collect(),
    })
}

/// Covariance of zeta from the sandwich `A^{-1} M A^{-1}`, where `A` is the
/// negative Hessian of the penalised objective with the active baseline
/// coefficients removed and `M` the negative Hessian of the log-likelihood.
/// Rows and columns of active coefficients are zero.
pub fn sandwich_covariance(
    model: &JointModel,
    state: &ParameterState,
    var: &VarianceComponents,
    active: &[usize],
) -> Result<DMatrix<f64>> {
    let h = negative_hessian(model, state, var);
    let keep = free_indices(model, active);
    let inv = ArrowInverse::new(&h, keep.clone());
    let smallest = smallest_eigenvalue(&h, &keep);
    let scale = h.zz.diagonal().amax().max(1.0);
    if !inv.positive_definite || !(smallest > 1e-12 * scale) {
        return Err(Error::NotIdentifiable { smallest_eigenvalue: smallest });
    }
    let pen = h.penalty_zz();
    let p = DMatrix::from_fn(keep.len(), keep.len(), |a, b| pen[(keep[a], keep[b])]);
    let reduced = &inv.zz - &inv.zz * p * &inv.zz;
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    let mut out = DMatrix::zeros(model.layout.dzeta(), model.layout.dzeta());
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            out[(i, j)] = reduced[(a, b)];
        }
    }
    Ok(out)
}

/// Smallest eigenvalue over the subject blocks and the Schur complement of
/// the reduced negative Hessian.
fn smallest_eigenvalue(h: &crate::deriv::HessianAssembly, keep: &[usize]) -> f64 {
    let min_eig = |m: &DMatrix<f64>| {
        if m.nrows() == 0 {
            return f64::INFINITY;
        }
        SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.min()
    };
    let mut smallest = f64::INFINITY;
    let d = keep.len();
    let mut schur = DMatrix::from_fn(d, d, |a, b| h.zz[(keep[a], keep[b])]);
    for i in 0..h.n_subjects() {
        let k = &h.kk[i];
        smallest = smallest.min(min_eig(k));
        if let Some(ch) = k.clone().cholesky() {
            let b = DMatrix::from_fn(d, h.nk, |a, c| h.zk[i][(keep[a], c)]);
            schur -= &b * ch.solve(&b.transpose());
        }
    }
    smallest.min(min_eig(&schur))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wald {
    pub estimate: f64,
    pub se: f64,
    pub z: Option<f64>,
    pub p: Option<f64>,
    pub ci95: (f64, f64),
    pub flag: Option<String>,
}

/// Two-sided normal p-value.
pub fn normal_p_value(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Wald summary of `c' zeta`.
pub fn wald_contrast(fit: &FitResult, contrast: &[f64]) -> Result<Wald> {
    let zeta = fit.zeta();
    if contrast.len() != zeta.len() {
        return Err(Error::Dimension(format!("contrast has {} entries, expected {}", contrast.len(), zeta.len())));
    }
    let est: f64 = contrast.iter().zip(&zeta).map(|(c, z)| c * z).sum();
    let mut v = 0.0;
    for (i, ci) in contrast.iter().enumerate() {
        for (j, cj) in contrast.iter().enumerate() {
            v += ci * fit.covariance[i][j] * cj;
        }
    }
    Ok(wald_from(est, v.max(0.0).sqrt()))
}

pub fn wald_from(estimate: f64, se: f64) -> Wald {
    if se > 0.0 {
        let z = estimate / se;
        Wald {
            estimate,
            se,
            z: Some(z),
            p: Some(normal_p_value(z)),
            ci95: (estimate - Z975 * se, estimate + Z975 * se),
            flag: None,
        }
    } else {
        Wald {
            estimate,
            se,
            z: None,
            p: None,
            ci95: (estimate, estimate),
            flag: Some("zero standard error (constrained or degenerate)".into()),
        }
    }
}

pub fn wald(fit: &FitResult, index: usize) -> Result<Wald> {
    let d = fit.covariance.len();
    if index >= d {
        return Err(Error::Dimension(format!("parameter index {index} out of range")));
    }
    let mut c = vec![0.0; d];
    c[index] = 1.0;
    wald_contrast(fit, &c)
}

/// Hazard ratio `exp(beta_j)` with its 95% interval.
pub fn hazard_ratio(fit: &FitResult, j: usize) -> Result<(f64, f64, f64)> {
    if j >= fit.state.beta.len() {
        return Err(Error::Dimension(format!("beta index {j} out of range")));
    }
    let w = wald(fit, j)?;
    Ok((w.estimate.exp(), w.ci95.0.exp(), w.ci95.1.exp()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub time: Vec<f64>,
    pub survival: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Survival with a pointwise band from the delta method on `ln H`.
fn band(cov: &DMatrix<f64>, points: Vec<(f64, f64, Vec<f64>)>) -> SurvivalCurve {
    let mut c = SurvivalCurve { time: vec![], survival: vec![], lower: vec![], upper: vec![] };
    for (t, h, g) in points {
        let s = (-h).exp();
        let (lo, hi) = if h > 0.0 {
            let gv = nalgebra::DVector::from_vec(g);
            let var = (gv.transpose() * cov * &gv)[(0, 0)].max(0.0);
            let se = var.sqrt() / h;
            ((-h * (Z975 * se).exp()).exp(), (-h * (-Z975 * se).exp()).exp())
        } else {
            (s, s)
        };
        c.time.push(t);
        c.survival.push(s);
        c.lower.push(lo.min(s));
        c.upper.push(hi.max(s));
    }
    c
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
        return Err(Error::Domain("prediction grid must hold finite non-negative times".into()));
    }
    Ok(())
}

/// Survival for covariates `x`, `w` and random effects `kappa` (zeros for
/// the population curve). The band ignores the random effects.
pub fn predict_survival(fit: &FitResult, x: &[f64], w: &[f64], kappa: &[f64], grid: &[f64]) -> Result<SurvivalCurve> {
    check_grid(grid)?;
    let ly = fit.spec.layout();
    if x.len() != ly.p || w.len() != fit.spec.pw || kappa.len() != ly.n_kappa {
        return Err(Error::Dimension("covariate or random-effect length does not match the model".into()));
    }
    let model = fit.predictor();
    let zeta = fit.zeta();
    let pts = grid
        .iter()
        .map(|&t| model.cumulative_hazard_grad(&zeta, x, w, kappa, t).map(|(h, g)| (t, h, g)))
        .collect::<Result<Vec<_>>>()?;
    Ok(band(&fit.covariance_matrix(), pts))
}

/// Survival for covariates `x` and a supplied trajectory `z(t)`.
pub fn predict_survival_with(
    fit: &FitResult,
    x: &[f64],
    z: &dyn Fn(f64) -> Vec<f64>,
    grid: &[f64],
) -> Result<SurvivalCurve> {
    check_grid(grid)?;
    if x.len() != fit.spec.p {
        return Err(Error::Dimension("covariate length does not match the model".into()));
    }
    let model = fit.predictor();
    let zeta = fit.zeta();
    let pts = grid
        .iter()
        .map(|&t| model.cumulative_hazard_custom(&zeta, x, z, t).map(|(h, g)| (t, h, g)))
        .collect::<Result<Vec<_>>>()?;
    Ok(band(&fit.covariance_matrix(), pts))
}

/// `pi(u | t) = S(u) / S(t)`.
pub fn conditional_from(s_t: f64, s_u: f64) -> Result<f64> {
    if !(s_t > 0.0) {
        return Err(Error::Undefined(format!("survival at the conditioning time is {s_t}")));
    }
    Ok(s_u / s_t)
}

/// Conditional survival to `u` given event-free at `t`.
pub fn conditional_survival(fit: &FitResult, x: &[f64], w: &[f64], kappa: &[f64], t: f64, u: f64) -> Result<f64> {
    if !(u >= t) {
        return Err(Error::Domain(format!("horizon {u} precedes conditioning time {t}")));
    }
    let model = fit.predictor();
    let zeta = fit.zeta();
    let ht = model.cumulative_hazard_for(&zeta, x, w, kappa, t)?;
    if t == u {
        let st = (-ht).exp();
        return conditional_from(st, st).map(|_| 1.0);
    }
    let hu = model.cumulative_hazard_for(&zeta, x, w, kappa, u)?;
    conditional_from((-ht).exp(), (-hu).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualPrediction {
    pub time: Vec<f64>,
    /// `trajectory[r][k]` for covariate `r` at grid point `k`.
    pub trajectory: Vec<Vec<f64>>,
    pub survival: SurvivalCurve,
}

/// Trajectories and survival of fitted subject `i` at its estimated
/// random effects.
pub fn predict_individual(fit: &FitResult, i: usize, grid: &[f64]) -> Result<IndividualPrediction> {
    let subj = fit.subjects.get(i).ok_or_else(|| Error::Dimension(format!("subject index {i} out of range")))?;
    let kappa = &fit.state.kappa[i];
    let model = fit.predictor();
    let zeta = fit.zeta();
    let trajectory = (0..fit.spec.q())
        .map(|r| grid.iter().map(|&t| model.mean_trajectory(&zeta, &subj.w, kappa, r, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let survival = predict_survival(fit, &subj.x, &subj.w, kappa, grid)?;
    Ok(IndividualPrediction { time: grid.to_vec(), trajectory, survival })
}
