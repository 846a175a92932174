//! Laplace-approximate marginal likelihood and the variance-component
//! updates of the outer loop.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::deriv::{negative_hessian, theta_parts, HessianAssembly};
use crate::error::{Error, Result};
use crate::model::{JointModel, ParameterState, VarianceComponents};
use crate::optimizer::{detect_active, initial_state, least_squares_alpha, run_inner, InnerLoopConfig, InnerLoopTrace};

/// Lower bound applied to every updated variance component.
pub const VARIANCE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterLoopConfig {
    pub outer_tol: f64,
    pub max_outer: usize,
    pub dof_floor: f64,
}

impl Default for OuterLoopConfig {
    fn default() -> Self {
        Self { outer_tol: 1e-3, max_outer: 50, dof_floor: 0.5 }
    }
}

impl OuterLoopConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.outer_tol > 0.0) || self.max_outer == 0 || !(self.dof_floor > 0.0) {
            return Err(Error::Validation("invalid outer loop configuration".into()));
        }
        Ok(())
    }
}

/// Inverse and log-determinant of a block-arrow matrix
/// `[[Z, B_i], [B_i', K_i]]`, restricted to a subset of the zeta indices.
#[derive(Debug, Clone)]
pub struct ArrowInverse {
    /// Zeta indices kept, in order.
    pub keep: Vec<usize>,
    pub zz: DMatrix<f64>,
    pub zk: Vec<DMatrix<f64>>,
    /// Diagonal subject blocks of the inverse.
    pub kk: Vec<DMatrix<f64>>,
    pub log_det: f64,
    /// False when some block was not positive definite and absolute
    /// eigenvalues were used.
    pub positive_definite: bool,
}

fn abs_eigen_inverse(m: &DMatrix<f64>) -> (DMatrix<f64>, f64, bool) {
    let n = m.nrows();
    if n == 0 {
        return (DMatrix::zeros(0, 0), 0.0, true);
    }
    let sym = (m + m.transpose()) * 0.5;
    if let Some(ch) = sym.clone().cholesky() {
        let ld = 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        return (ch.inverse(), ld, true);
    }
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = 1e-12 * top.max(1e-300);
    let vals = eig.eigenvalues.map(|l| l.abs().max(floor));
    let ld = vals.iter().map(|v| v.ln()).sum();
    let inv = &eig.eigenvectors * DMatrix::from_diagonal(&vals.map(|v| 1.0 / v)) * eig.eigenvectors.transpose();
    (inv, ld, false)
}

impl ArrowInverse {
    pub fn new(h: &HessianAssembly, keep: Vec<usize>) -> Self {
        let d = keep.len();
        let mut schur = DMatrix::from_fn(d, d, |a, b| h.zz[(keep[a], keep[b])]);
        let mut log_det = 0.0;
        let mut pd = true;
        let mut kinv = Vec::with_capacity(h.n_subjects());
        let mut bk = Vec::with_capacity(h.n_subjects());
        for i in 0..h.n_subjects() {
            let (ki, ld, ok) = abs_eigen_inverse(&h.kk[i]);
            log_det += ld;
            pd &= ok;
            let b = DMatrix::from_fn(d, h.nk, |a, c| h.zk[i][(keep[a], c)]);
            let prod = &b * &ki;
            schur -= &prod * b.transpose();
            kinv.push(ki);
            bk.push(prod);
        }
        let (sinv, ld, ok) = abs_eigen_inverse(&schur);
        log_det += ld;
        pd &= ok;
        let zk: Vec<DMatrix<f64>> = bk.iter().map(|p| -(&sinv * p)).collect();
        let kk = kinv
            .iter()
            .zip(&bk)
            .map(|(ki, p)| ki + p.transpose() * &sinv * p)
            .collect();
        Self { keep, zz: sinv, zk, kk, log_det, positive_definite: pd }
    }

    /// Zeta covariance block padded back to the full zeta dimension.
    pub fn padded_zz(&self, dzeta: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(dzeta, dzeta);
        for (a, &i) in self.keep.iter().enumerate() {
            for (b, &j) in self.keep.iter().enumerate() {
                out[(i, j)] = self.zz[(a, b)];
            }
        }
        out
    }

    /// `trace(F^{-1} Q)` for a zeta-only `Q` given over the full zeta block.
    pub fn trace_zz(&self, q: &DMatrix<f64>) -> f64 {
        let mut t = 0.0;
        for (a, &i) in self.keep.iter().enumerate() {
            for (b, &j) in self.keep.iter().enumerate() {
                t += self.zz[(a, b)] * q[(j, i)];
            }
        }
        t
    }

    /// `trace(F^{-1} Q)` for a block-arrow `Q`.
    pub fn trace_arrow(&self, zz: &DMatrix<f64>, zk: &[DMatrix<f64>], kk: &[DMatrix<f64>]) -> f64 {
        let mut t = self.trace_zz(zz);
        for i in 0..self.kk.len() {
            for (a, &l) in self.keep.iter().enumerate() {
                for c in 0..self.kk[i].nrows() {
                    t += 2.0 * self.zk[i][(a, c)] * zk[i][(l, c)];
                }
            }
            t += self.kk[i].component_mul(&kk[i].transpose()).sum();
        }
        t
    }
}

/// Effective degrees of freedom `trace(F^{-1} Q)` of each component.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Nu {
    pub eps: f64,
    pub theta: f64,
    pub alpha: Vec<f64>,
    pub kappa: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceUpdate {
    pub var: VarianceComponents,
    pub nu: Nu,
    pub marginal: f64,
    pub flags: Vec<String>,
}

/// Starting variances from a two-stage least-squares fit: fixed effects
/// pooled, then per-subject random effects on the residuals. The
/// measurement-error variance is the within-subject residual variance and
/// each random-effect variance the mean square of the subject estimates.
/// Falls back to the pooled residual variance (and a quarter of it) when no
/// subject has more measurements than random effects. Smoothing parameters
/// start at one.
pub fn initial_variances(model: &JointModel) -> VarianceComponents {
    let ly = &model.layout;
    let (alpha, rss) = least_squares_alpha(model);
    let dof = model.n_meas as f64 - ly.n_alpha as f64;
    let mut pooled = if dof > 0.0 { rss / dof } else { 1.0 };
    if !(pooled > VARIANCE_FLOOR) || !pooled.is_finite() {
        pooled = 1.0;
    }
    let mut within = (0.0, 0.0);
    let mut sigma_kappa2: Vec<Vec<f64>> = ly.c.iter().map(|&c| vec![0.25 * pooled; c]).collect();
    for r in 0..ly.q {
        let (c, phi, xi) = (ly.c[r], ly.phi_span(r), ly.xi_span(r));
        let a = &alpha[ly.a_off[r]..ly.a_off[r] + ly.b[r]];
        let mut sq = vec![0.0; c];
        let mut used = 0usize;
        for s in &model.subjects {
            if s.records.len() <= c {
                continue;
            }
            let mut xtx = DMatrix::<f64>::zeros(c, c);
            let mut xty = DVector::<f64>::zeros(c);
            let mut res = Vec::with_capacity(s.records.len());
            for rec in &s.records {
                let e = rec.y[r] - crate::model::dot(&rec.design[phi.clone()], a);
                let row = DVector::from_column_slice(&rec.design[xi.clone()]);
                xtx += &row * row.transpose();
                xty += &row * e;
                res.push((e, row));
            }
            let Some(k) = xtx.cholesky().map(|ch| ch.solve(&xty)) else { continue };
            within.0 += res.iter().map(|(e, row)| (e - row.dot(&k)).powi(2)).sum::<f64>();
            within.1 += (s.records.len() - c) as f64;
            for (l, v) in k.iter().enumerate() {
                sq[l] += v * v;
            }
            used += 1;
        }
        if used > 0 {
            sigma_kappa2[r] = sq.iter().map(|v| (v / used as f64).max(VARIANCE_FLOOR)).collect();
        }
    }
    let sigma_eps2 = if within.1 > 0.0 && within.0 > 0.0 { within.0 / within.1 } else { pooled };
    VarianceComponents { sigma_eps2, sigma_theta2: 0.5, sigma_alpha2: vec![0.5; ly.q], sigma_kappa2 }
}

/// Zeta indices with active baseline coefficients removed.
pub fn free_indices(model: &JointModel, active: &[usize]) -> Vec<usize> {
    let th = model.layout.theta();
    (0..model.layout.dzeta()).filter(|l| !(th.contains(l) && active.contains(&(l - th.start)))).collect()
}

/// Rank of the baseline roughness matrix restricted to the free coefficients.
pub fn penalty_rank(r: &DMatrix<f64>, active: &[usize]) -> usize {
    let free: Vec<usize> = (0..r.nrows()).filter(|u| !active.contains(u)).collect();
    if free.is_empty() {
        return 0;
    }
    let sub = r.select_rows(&free).select_columns(&free);
    let ev = sub.symmetric_eigenvalues();
    let top = ev.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    ev.iter().filter(|&&e| e > 1e-9 * top).count()
}

fn penalty_log_normalizer(model: &JointModel, var: &VarianceComponents, active: &[usize]) -> f64 {
    let ly = &model.layout;
    let mut v = -0.5 * penalty_rank(&model.r_theta, active) as f64 * var.sigma_theta2.ln();
    for (r, l) in model.spec.longitudinal.iter().enumerate() {
        if l.penalized {
            v -= 0.5 * ly.b[r] as f64 * var.sigma_alpha2[r].ln();
        }
    }
    v
}

fn laplace(
    model: &JointModel,
    state: &ParameterState,
    var: &VarianceComponents,
    inv: &ArrowInverse,
    active: &[usize],
) -> f64 {
    model.penalised_objective(state, var) + penalty_log_normalizer(model, var, active) - 0.5 * inv.log_det
}

fn active_set(model: &JointModel, state: &ParameterState, var: &VarianceComponents) -> Vec<usize> {
    detect_active(&state.theta, &theta_parts(model, state, var).grad)
}

/// Laplace approximation `Phi - 1/2 ln|F|` (plus the normalizers of the
/// penalty priors) at an inner-loop maximizer.
pub fn marginal_loglik(model: &JointModel, state: &ParameterState, var: &VarianceComponents) -> f64 {
    let h = negative_hessian(model, state, var);
    let active = active_set(model, state, var);
    let inv = ArrowInverse::new(&h, free_indices(model, &active));
    if !inv.positive_definite {
        warn!("negative Hessian is not positive definite; using absolute eigenvalues");
    }
    laplace(model, state, var, &inv, &active)
}

/// Closed-form variance updates `sigma^2 = quadratic form / (dim - nu)`.
pub fn update_variances(
    model: &JointModel,
    state: &ParameterState,
    var: &VarianceComponents,
    cfg: &OuterLoopConfig,
) -> Result<VarianceUpdate> {
    update_variances_with(model, state, var, cfg, &active_set(model, state, var))
}

/// Variance updates with a given set of active baseline coefficients.
pub fn update_variances_with(
    model: &JointModel,
    state: &ParameterState,
    var: &VarianceComponents,
    cfg: &OuterLoopConfig,
    active: &[usize],
) -> Result<VarianceUpdate> {
    var.check()?;
    let ly = &model.layout;
    let h = negative_hessian(model, state, var);
    let inv = ArrowInverse::new(&h, free_indices(model, active));
    let mut flags = Vec::new();
    if !inv.positive_definite {
        flags.push("negative Hessian not positive definite".to_string());
    }
    let bounded = |name: String, nu: f64, dim: f64, flags: &mut Vec<String>| -> f64 {
        if nu < -1e-6 || nu > dim + 1e-6 {
            flags.push(format!("{name}: nu = {nu} outside [0, {dim}]"));
        }
        nu.clamp(0.0, dim)
    };
    let denom = |name: &str, d: f64, flags: &mut Vec<String>| -> f64 {
        if d <= cfg.dof_floor {
            flags.push(format!("{name}: denominator {d} clamped to {}", cfg.dof_floor));
            cfg.dof_floor
        } else {
            d
        }
    };
    let mut out = var.clone();
    let mut nu = Nu::default();

    let n_meas = model.n_meas as f64;
    if ly.q > 0 && n_meas > 0.0 {
        nu.eps = bounded("eps".into(), inv.trace_arrow(&h.eps_zz, &h.eps_zk, &h.eps_kk), n_meas, &mut flags);
        let d = denom("sigma_eps2", n_meas - nu.eps, &mut flags);
        out.sigma_eps2 = (model.residual_ss(state) / d).max(VARIANCE_FLOOR);
    }

    let quad = |x: &[f64], r: &DMatrix<f64>| {
        let v = DVector::from_column_slice(x);
        (v.transpose() * r * &v)[(0, 0)]
    };
    let rank = penalty_rank(&model.r_theta, active) as f64;
    nu.theta = bounded("theta".into(), inv.trace_zz(&h.q_theta), rank, &mut flags);
    let qt = quad(&state.theta, &model.r_theta);
    if qt > 0.0 {
        let d = denom("sigma_theta2", rank - nu.theta, &mut flags);
        out.sigma_theta2 = (qt / d).max(VARIANCE_FLOOR);
    } else {
        flags.push("sigma_theta2 held: zero roughness".into());
    }

    for (r, l) in model.spec.longitudinal.iter().enumerate() {
        let nr = bounded(format!("alpha{r}"), inv.trace_zz(&h.q_alpha[r]), ly.b[r] as f64, &mut flags);
        nu.alpha.push(nr);
        if !l.penalized {
            continue;
        }
        let qa = quad(&state.alpha[ly.a_off[r]..ly.a_off[r] + ly.b[r]], &model.r_alpha[r]);
        if qa > 0.0 {
            let d = denom(&format!("sigma_alpha2[{r}]"), ly.b[r] as f64 - nr, &mut flags);
            out.sigma_alpha2[r] = (qa / d).max(VARIANCE_FLOOR);
        } else {
            flags.push(format!("sigma_alpha2[{r}] held: zero roughness"));
        }
    }

    let n = model.n() as f64;
    for r in 0..ly.q {
        let mut row = Vec::with_capacity(ly.c[r]);
        for l in 0..ly.c[r] {
            let k = ly.k_off[r] + l;
            let tr: f64 = inv.kk.iter().map(|b| b[(k, k)]).sum::<f64>() * h.q_kappa[k];
            let nk = bounded(format!("kappa{r}.{l}"), tr, n, &mut flags);
            row.push(nk);
            let ss: f64 = state.kappa.iter().map(|kp| kp[k] * kp[k]).sum();
            let d = denom(&format!("sigma_kappa2[{r}][{l}]"), n - nk, &mut flags);
            out.sigma_kappa2[r][l] = (ss / d).max(VARIANCE_FLOOR);
        }
        nu.kappa.push(row);
    }
    let marginal = laplace(model, state, var, &inv, active);
    Ok(VarianceUpdate { var: out, nu, marginal, flags })
}

/// Largest relative change between two sets of variance components.
pub fn relative_change(a: &VarianceComponents, b: &VarianceComponents) -> f64 {
    let flat = |v: &VarianceComponents| -> Vec<f64> {
        [v.sigma_eps2, v.sigma_theta2]
            .into_iter()
            .chain(v.sigma_alpha2.iter().copied())
            .chain(v.sigma_kappa2.iter().flatten().copied())
            .collect()
    };
    flat(a).iter().zip(flat(b)).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / x.abs().max(VARIANCE_FLOOR)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterIteration {
    pub var: VarianceComponents,
    pub objective: f64,
    pub marginal: f64,
    pub nu: Nu,
    pub inner: InnerLoopTrace,
    pub relative_change: f64,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterResult {
    pub state: ParameterState,
    pub var: VarianceComponents,
    pub active_set: Vec<usize>,
    pub history: Vec<OuterIteration>,
    pub converged: bool,
}

/// Newly detected active coefficients plus earlier ones still below the
/// detection threshold, so the set cannot toggle between outer iterations.
fn merge_active(state: &ParameterState, previous: &[usize], detected: &[usize]) -> Vec<usize> {
    let mut out: Vec<usize> = previous.iter().copied().filter(|&u| state.theta[u] < 1e-2).collect();
    out.extend(detected.iter().copied());
    out.sort_unstable();
    out.dedup();
    out
}

/// Alternates the inner loop with the variance updates until every
/// component changes by less than `outer_tol` relative.
pub fn run_outer(model: &JointModel, inner: &InnerLoopConfig, outer: &OuterLoopConfig) -> Result<OuterResult> {
    let var0 = initial_variances(model);
    run_outer_from(model, &initial_state(model), &var0, inner, outer)
}

pub fn run_outer_from(
    model: &JointModel,
    state0: &ParameterState,
    var0: &VarianceComponents,
    inner: &InnerLoopConfig,
    outer: &OuterLoopConfig,
) -> Result<OuterResult> {
    outer.check()?;
    let mut var = var0.clone();
    let mut state = state0.clone();
    let mut history: Vec<OuterIteration> = Vec::new();
    let mut best: Option<(f64, ParameterState, VarianceComponents)> = None;
    let mut sticky: Vec<usize> = Vec::new();
    for k in 0..outer.max_outer {
        let (st, trace) = run_inner(model, &state, &var, inner)?;
        state = st;
        sticky = merge_active(&state, &sticky, &trace.active_set);
        let up = update_variances_with(model, &state, &var, outer, &sticky)?;
        let change = relative_change(&var, &up.var);
        debug!("outer {k}: marginal {} change {change:e}", up.marginal);
        if best.as_ref().is_none_or(|b| up.marginal > b.0) {
            best = Some((up.marginal, state.clone(), var.clone()));
        }
        let inner_ok = trace.converged;
        history.push(OuterIteration {
            var: var.clone(),
            objective: *trace.objective_path.last().unwrap_or(&f64::NAN),
            marginal: up.marginal,
            nu: up.nu,
            inner: trace,
            relative_change: change,
            flags: up.flags,
        });
        var = up.var;
        if change < outer.outer_tol && inner_ok {
            let (st, trace) = run_inner(model, &state, &var, inner)?;
            let active = merge_active(&st, &sticky, &trace.active_set);
            let converged = trace.converged;
            history.push(OuterIteration {
                var: var.clone(),
                objective: *trace.objective_path.last().unwrap_or(&f64::NAN),
                marginal: marginal_loglik(model, &st, &var),
                nu: Nu::default(),
                inner: trace,
                relative_change: 0.0,
                flags: Vec::new(),
            });
            return Ok(OuterResult { state: st, var, active_set: active, history, converged });
        }
    }
    warn!("outer loop reached {} iterations without converging", outer.max_outer);
    let (_, state, var) = best.expect("at least one outer iteration");
    let active = merge_active(&state, &sticky, &active_set(model, &state, &var));
    Ok(OuterResult { state, var, active_set: active, history, converged: false })
}
