//! Alternating Newton / multiplicative-iterative inner loop.
//!
//! One cycle updates beta, gamma, theta, alpha and every kappa_i, each with
//! the other blocks held at their latest values, then takes a joint Newton
//! step over everything except theta. Newton blocks use the exact Hessian
//! with its eigenvalues replaced by their absolute values (floored). Theta
//! takes a projected Newton step and falls back to the MI step
//! `theta + w theta / d * g`. Every step is accepted by Armijo
//! backtracking so the objective never falls.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::CensoringStatus;
use crate::deriv::{theta_parts, Selection};
use crate::error::{Error, Result};
use crate::model::{JointModel, ParameterState, VarianceComponents};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmijoConfig {
    pub contraction: f64,
    pub slope: f64,
    pub max_backtracks: usize,
}

impl Default for ArmijoConfig {
    fn default() -> Self {
        Self { contraction: 0.5, slope: 1e-4, max_backtracks: 30 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub armijo: ArmijoConfig,
    pub mi_upsilon: f64,
    /// Hold gamma at its current value.
    #[serde(default)]
    pub fix_gamma: bool,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        Self { tol: 1e-5, max_iter: 500, armijo: ArmijoConfig::default(), mi_upsilon: crate::deriv::MI_UPSILON, fix_gamma: false }
    }
}

impl InnerLoopConfig {
    pub fn check(&self) -> Result<()> {
        let a = &self.armijo;
        if !(self.tol > 0.0) || !(a.contraction > 0.0 && a.contraction < 1.0) || !(self.mi_upsilon > 0.0) {
            return Err(Error::Validation("invalid inner loop configuration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopTrace {
    pub iterations: usize,
    /// Objective after each full cycle, starting with the initial value.
    pub objective_path: Vec<f64>,
    pub converged: bool,
    pub active_set: Vec<usize>,
    /// Largest relative decrease seen over all sub-updates (<= 0 when every
    /// sub-update was an ascent).
    pub worst_decrease: f64,
    /// Theta entries restarted away from zero.
    pub restarts: usize,
}

/// Outcome of one sub-update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub before: f64,
    pub after: f64,
    pub step_size: f64,
    pub max_change: f64,
}

/// Newton direction with the Hessian's eigenvalues replaced by
/// `max(|lambda|, 1e-8 max(1, max |lambda|))`.
pub fn modified_newton_direction(grad: &DVector<f64>, neg_hess: &DMatrix<f64>) -> DVector<f64> {
    let n = grad.len();
    if n == 0 {
        return DVector::zeros(0);
    }
    let sym = (neg_hess + neg_hess.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-8 * top.max(1.0);
    let proj = eig.eigenvectors.transpose() * grad;
    let scaled = DVector::from_iterator(n, proj.iter().zip(eig.eigenvalues.iter()).map(|(p, l)| p / l.abs().max(floor)));
    eig.eigenvectors * scaled
}

/// Backtracking search for `f(x0 + w d) >= f0 + c w slope`. Returns the
/// accepted step size and value, or `None` if no step was accepted.
fn armijo(cfg: &ArmijoConfig, f0: f64, slope: f64, mut eval: impl FnMut(f64) -> f64) -> Option<(f64, f64)> {
    if !(slope > 0.0) || !slope.is_finite() {
        return None;
    }
    let mut w = 1.0;
    for _ in 0..=cfg.max_backtracks {
        let f = eval(w);
        if f.is_finite() && f >= f0 + cfg.slope * w * slope {
            return Some((w, f));
        }
        w *= cfg.contraction;
    }
    None
}

fn zeta_block_update(
    model: &JointModel,
    state: &mut ParameterState,
    var: &VarianceComponents,
    cfg: &InnerLoopConfig,
    range: std::ops::Range<usize>,
    f0: f64,
) -> Step {
    let no_move = Step { before: f0, after: f0, step_size: 0.0, max_change: 0.0 };
    if range.is_empty() {
        return no_move;
    }
    let sel = Selection::range(&model.layout, range.clone());
    let (g, h) = model.block_derivs(state, var, &sel);
    let dir = modified_newton_direction(&g, &(-h));
    let slope = g.dot(&dir);
    let base = state.zeta();
    let mut trial = state.clone();
    let mut candidate = |w: f64| {
        let mut z = base.clone();
        for (k, l) in range.clone().enumerate() {
            z[l] += w * dir[k];
        }
        trial.set_zeta(&z);
        model.penalised_objective(&trial, var)
    };
    match armijo(&cfg.armijo, f0, slope, &mut candidate) {
        Some((w, f)) => {
            let mut z = base.clone();
            for (k, l) in range.enumerate() {
                z[l] += w * dir[k];
            }
            state.set_zeta(&z);
            Step { before: f0, after: f, step_size: w, max_change: w * dir.amax() }
        }
        None => no_move,
    }
}

pub fn update_beta(model: &JointModel, state: &mut ParameterState, var: &VarianceComponents, cfg: &InnerLoopConfig, f0: f64) -> Step {
    zeta_block_update(model, state, var, cfg, model.layout.beta(), f0)
}

pub fn update_gamma(model: &JointModel, state: &mut ParameterState, var: &VarianceComponents, cfg: &InnerLoopConfig, f0: f64) -> Step {
    zeta_block_update(model, state, var, cfg, model.layout.gamma(), f0)
}

pub fn update_alpha(model: &JointModel, state: &mut ParameterState, var: &VarianceComponents, cfg: &InnerLoopConfig, f0: f64) -> Step {
    zeta_block_update(model, state, var, cfg, model.layout.alpha(), f0)
}

/// Theta update: a projected Newton step on the entries that are positive
/// or have a positive gradient, falling back to the MI step when no
/// projected step is accepted.
pub fn update_theta(model: &JointModel, state: &mut ParameterState, var: &VarianceComponents, cfg: &InnerLoopConfig, f0: f64) -> Step {
    let step = projected_newton_theta(model, state, var, cfg, f0);
    if step.step_size > 0.0 {
        return step;
    }
    mi_theta_step(model, state, var, cfg, f0)
}

fn projected_newton_theta(model: &JointModel, state: &mut ParameterState, var: &VarianceComponents, cfg: &InnerLoopConfig, f0: f64) -> Step {
    let no_move = Step { before: f0, after: f0, step_size: 0.0, max_change: 0.0 };
    let ly = &model.layout;
    let sel = Selection::range(ly, ly.theta());
    let (g, h) = model.block_derivs(state, var, &sel);
    let top = state.theta.iter().fold(0.0f64, |m, &t| m.max(t));
    let free: Vec<usize> = (0..ly.m).filter(|&u| state.theta[u] > 1e-10 * top || g[u] > 0.0).collect();
    if free.is_empty() {
        return no_move;
    }
    let gf = DVector::from_iterator(free.len(), free.iter().map(|&u| g[u]));
    let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| -h[(free[a], free[b])]);
    let df = modified_newton_direction(&gf, &hf);
    let mut dir = vec![0.0; ly.m];
    for (k, &u) in free.iter().enumerate() {
        dir[u] = df[k];
    }
    let base = state.theta.clone();
    let path = |w: f64, out: &mut Vec<f64>| {
        for ((o, b), d) in out.iter_mut().zip(&base).zip(&dir) {
            *o = (b + w * d).max(0.0);
        }
    };
    let mut trial = state.clone();
    let a = &cfg.armijo;
    let mut w = 1.0;
    for _ in 0..=a.max_backtracks {
        path(w, &mut trial.theta);
        let gain: f64 = trial.theta.iter().zip(&base).zip(g.iter()).map(|((t, b), gu)| gu * (t - b)).sum();
        if gain > 0.0 {
            let f = model.penalised_objective(&trial, var);
            if f.is_finite() && f >= f0 + a.slope * gain {
                let change = trial.theta.iter().zip(&base).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                state.theta = trial.theta;
                return Step { before: f0, after: f, step_size: w, max_change: change };
            }
        }
        w *= a.contraction;
    }
    no_move
}

/// MI step `theta' = theta + w S^{-1} g` with `S = diag(theta / d)`.
pub fn mi_theta_step(model: &JointModel, state: &mut ParameterState, var: &VarianceComponents, cfg: &InnerLoopConfig, f0: f64) -> Step {
    let no_move = Step { before: f0, after: f0, step_size: 0.0, max_change: 0.0 };
    let parts = theta_parts(model, state, var);
    let dir: Vec<f64> = state
        .theta
        .iter()
        .zip(&parts.grad)
        .zip(&parts.negative)
        .map(|((t, g), n)| t / (n + cfg.mi_upsilon) * g)
        .collect();
    let slope: f64 = dir.iter().zip(&parts.grad).map(|(d, g)| d * g).sum();
    let base = state.theta.clone();
    let mut trial = state.clone();
    let step = |w: f64, out: &mut Vec<f64>| {
        for ((o, b), d) in out.iter_mut().zip(&base).zip(&dir) {
            *o = (b + w * d).max(0.0);
        }
    };
    let found = armijo(&cfg.armijo, f0, slope, |w| {
        step(w, &mut trial.theta);
        model.penalised_objective(&trial, var)
    });
    match found {
        Some((w, f)) => {
            step(w, &mut state.theta);
            let change = state.theta.iter().zip(&base).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            Step { before: f0, after: f, step_size: w, max_change: change }
        }
        None => no_move,
    }
}

fn floored_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return m.clone();
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = 1e-8 * top.max(1.0);
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.abs().max(floor)));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Joint Newton step over beta, gamma, alpha and every kappa_i, solved
/// through the Schur complement of the block-arrow Hessian.
pub fn update_joint(model: &JointModel, state: &mut ParameterState, var: &VarianceComponents, cfg: &InnerLoopConfig, f0: f64) -> Step {
    let no_move = Step { before: f0, after: f0, step_size: 0.0, max_change: 0.0 };
    let ly = &model.layout;
    let theta = ly.theta();
    let mut idx: Vec<usize> = (0..ly.dzeta()).filter(|l| !theta.contains(l)).collect();
    if cfg.fix_gamma {
        let gr = ly.gamma();
        idx.retain(|l| !gr.contains(l));
    }
    if idx.is_empty() && ly.n_kappa == 0 {
        return no_move;
    }
    let sc = crate::deriv::score(model, state, var);
    let hs = crate::deriv::negative_hessian(model, state, var);
    let gz_all = sc.zeta();
    let gz = DVector::from_iterator(idx.len(), idx.iter().map(|&l| gz_all[l]));
    let mut schur = DMatrix::from_fn(idx.len(), idx.len(), |a, b| hs.zz[(idx[a], idx[b])]);
    let mut rhs = gz.clone();
    let mut kinv = Vec::with_capacity(model.n());
    let mut bs = Vec::with_capacity(model.n());
    for i in 0..model.n() {
        let ki = floored_inverse(&hs.kk[i]);
        let b = DMatrix::from_fn(idx.len(), ly.n_kappa, |a, c| hs.zk[i][(idx[a], c)]);
        let bk = &b * &ki;
        schur -= &bk * b.transpose();
        rhs -= &bk * DVector::from_column_slice(&sc.kappa[i]);
        kinv.push(ki);
        bs.push(b);
    }
    let dz = modified_newton_direction(&rhs, &schur);
    let dk: Vec<DVector<f64>> = (0..model.n())
        .map(|i| &kinv[i] * (DVector::from_column_slice(&sc.kappa[i]) - bs[i].transpose() * &dz))
        .collect();
    let mut slope = gz.dot(&dz);
    let mut amax = dz.amax();
    for (g, d) in sc.kappa.iter().zip(&dk) {
        slope += DVector::from_column_slice(g).dot(d);
        amax = amax.max(d.amax());
    }
    let base = state.clone();
    let z0 = base.zeta();
    let apply = |w: f64, out: &mut ParameterState| {
        let mut z = z0.clone();
        for (k, &l) in idx.iter().enumerate() {
            z[l] += w * dz[k];
        }
        out.set_zeta(&z);
        for (i, d) in dk.iter().enumerate() {
            for (c, v) in out.kappa[i].iter_mut().enumerate() {
                *v = base.kappa[i][c] + w * d[c];
            }
        }
    };
    let mut trial = base.clone();
    match armijo(&cfg.armijo, f0, slope, |w| {
        apply(w, &mut trial);
        model.penalised_objective(&trial, var)
    }) {
        Some((w, f)) => {
            apply(w, state);
            Step { before: f0, after: f, step_size: w, max_change: w * amax }
        }
        None => no_move,
    }
}

/// Per-subject Newton steps for the random effects.
pub fn update_kappa(model: &JointModel, state: &mut ParameterState, var: &VarianceComponents, cfg: &InnerLoopConfig, f0: f64) -> Step {
    let zeta = state.zeta();
    let mut gain = 0.0;
    let mut change = 0.0f64;
    for i in 0..model.n() {
        let k0 = state.kappa[i].clone();
        let (v0, g, h) = model.kappa_derivs(i, &zeta, &k0, var);
        let dir = modified_newton_direction(&g, &(-h));
        let slope = g.dot(&dir);
        let trial = |w: f64| -> Vec<f64> { k0.iter().zip(dir.iter()).map(|(k, d)| k + w * d).collect() };
        if let Some((w, v)) = armijo(&cfg.armijo, v0, slope, |w| model.subject_objective(i, &zeta, &trial(w), var)) {
            state.kappa[i] = trial(w);
            gain += v - v0;
            change = change.max(w * dir.amax());
        }
    }
    let after = if gain > 0.0 { model.penalised_objective(state, var) } else { f0 };
    Step { before: f0, after, step_size: 1.0, max_change: change }
}

/// Theta entries at an active constraint: `theta_u < 1e-2` with gradient
/// below `-1e-2`.
pub fn detect_active(theta: &[f64], grad_theta: &[f64]) -> Vec<usize> {
    theta
        .iter()
        .zip(grad_theta)
        .enumerate()
        .filter(|(_, (t, g))| **t < 1e-2 && **g < -1e-2)
        .map(|(u, _)| u)
        .collect()
}

/// Starting values: `beta = gamma = 0`, a constant baseline hazard equal to
/// the crude event rate, least-squares `alpha` and `kappa = 0`.
pub fn initial_state(model: &JointModel) -> ParameterState {
    let ly = &model.layout;
    let mut st = ParameterState::zeros(ly, model.n());
    let (mut events, mut exposure) = (0.0f64, 0.0f64);
    for s in &model.subjects {
        exposure += s.exposure;
        if s.status != CensoringStatus::Right {
            events += 1.0;
        }
    }
    let rate = if exposure > 0.0 { (events.max(0.5)) / exposure } else { 1.0 };
    st.theta = model.spec.baseline.constant_coefficients(rate).unwrap_or_else(|| vec![rate; ly.m]);
    st.alpha = least_squares_alpha(model).0;
    st
}

/// Per-covariate least squares of the longitudinal values on the fixed
/// design; returns the coefficients and the residual sum of squares.
pub fn least_squares_alpha(model: &JointModel) -> (Vec<f64>, f64) {
    let ly = &model.layout;
    let mut alpha = vec![0.0; ly.n_alpha];
    let mut rss = 0.0;
    for r in 0..ly.q {
        let b = ly.b[r];
        let span = ly.phi_span(r);
        let mut xtx = DMatrix::<f64>::zeros(b, b);
        let mut xty = DVector::<f64>::zeros(b);
        let mut yy = 0.0;
        for s in &model.subjects {
            for rec in &s.records {
                let row = DVector::from_column_slice(&rec.design[span.clone()]);
                xtx += &row * row.transpose();
                xty += &row * rec.y[r];
                yy += rec.y[r] * rec.y[r];
            }
        }
        let ridge = 1e-10 * xtx.trace().max(1.0);
        for j in 0..b {
            xtx[(j, j)] += ridge;
        }
        let sol = xtx.clone().cholesky().map(|c| c.solve(&xty)).unwrap_or_else(|| DVector::zeros(b));
        rss += (yy - 2.0 * sol.dot(&xty) + (sol.transpose() * (&xtx) * &sol)[(0, 0)]).max(0.0);
        alpha[ly.a_off[r]..ly.a_off[r] + b].copy_from_slice(sol.as_slice());
    }
    (alpha, rss)
}

/// Runs full cycles until the largest parameter change falls below `tol`.
pub fn run_inner(
    model: &JointModel,
    state0: &ParameterState,
    var: &VarianceComponents,
    cfg: &InnerLoopConfig,
) -> Result<(ParameterState, InnerLoopTrace)> {
    cfg.check()?;
    model.check_state(state0)?;
    var.check()?;
    let mut state = state0.clone();
    let mut f = model.penalised_objective(&state, var);
    if !f.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    let mut trace = InnerLoopTrace { objective_path: vec![f], ..Default::default() };
    let note = |s: &Step, trace: &mut InnerLoopTrace| {
        let rel = (s.before - s.after) / s.before.abs().max(1.0);
        trace.worst_decrease = trace.worst_decrease.max(rel);
    };
    for it in 0..cfg.max_iter {
        let mut change = 0.0f64;
        let s = update_beta(model, &mut state, var, cfg, f);
        note(&s, &mut trace);
        change = change.max(s.max_change);
        f = s.after;
        if !cfg.fix_gamma {
            let s = update_gamma(model, &mut state, var, cfg, f);
            note(&s, &mut trace);
            change = change.max(s.max_change);
            f = s.after;
        }
        let s = update_theta(model, &mut state, var, cfg, f);
        note(&s, &mut trace);
        change = change.max(s.max_change);
        f = s.after;
        let s = update_alpha(model, &mut state, var, cfg, f);
        note(&s, &mut trace);
        change = change.max(s.max_change);
        f = s.after;
        let s = update_kappa(model, &mut state, var, cfg, f);
        note(&s, &mut trace);
        change = change.max(s.max_change);
        f = s.after;
        let s = update_joint(model, &mut state, var, cfg, f);
        note(&s, &mut trace);
        change = change.max(s.max_change);
        f = s.after;
        trace.objective_path.push(f);
        trace.iterations = it + 1;
        if change < cfg.tol {
            if trace.restarts < 3 && restart_zero_theta(model, &mut state, var, &mut f) {
                trace.restarts += 1;
                continue;
            }
            trace.converged = true;
            break;
        }
    }
    if !trace.converged {
        warn!("inner loop stopped after {} iterations without converging", trace.iterations);
    }
    let parts = theta_parts(model, &state, var);
    trace.active_set = detect_active(&state.theta, &parts.grad);
    debug!("inner loop: {} iterations, objective {f}", trace.iterations);
    Ok((state, trace))
}

/// Moves theta entries that sit exactly at zero with a positive gradient to
/// `1e-4 max(theta)`, keeping the move only if the objective does not fall.
fn restart_zero_theta(model: &JointModel, state: &mut ParameterState, var: &VarianceComponents, f: &mut f64) -> bool {
    if !state.theta.iter().any(|&t| t == 0.0) {
        return false;
    }
    let grad = theta_parts(model, state, var).grad;
    let top = state.theta.iter().fold(0.0f64, |m, &t| m.max(t));
    if top == 0.0 {
        return false;
    }
    let mut trial = state.clone();
    let mut moved = false;
    for u in 0..trial.theta.len() {
        if trial.theta[u] == 0.0 && grad[u] > 0.0 {
            trial.theta[u] = 1e-4 * top;
            moved = true;
        }
    }
    if !moved {
        return false;
    }
    let ft = model.penalised_objective(&trial, var);
    if ft >= *f {
        *state = trial;
        *f = ft;
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSet;
    use crate::data::{Dataset, LongRecord, Subject};
    use crate::model::{LongitudinalSpec, ModelSpec};

    fn rec(t: f64, v: f64) -> LongRecord {
        LongRecord { time: t, values: vec![v] }
    }

    fn survival_only(subjects: Vec<Subject>, p: usize, upper: f64) -> JointModel {
        let names = (1..=p).map(|j| format!("x{j}")).collect();
        let ds = Dataset::new(subjects, names, vec![], vec![]);
        let spec = ModelSpec { baseline: BasisSet::indicator(vec![0.0, upper]).unwrap(), p, pw: 0, longitudinal: vec![] };
        JointModel::new(spec, &ds).unwrap()
    }

    fn no_var() -> VarianceComponents {
        VarianceComponents { sigma_eps2: 1.0, sigma_theta2: 1.0, sigma_alpha2: vec![], sigma_kappa2: vec![] }
    }

    fn long_model() -> (JointModel, VarianceComponents) {
        let subjects = vec![
            Subject::new("a", 1.5, 1.5, vec![], vec![], vec![rec(0.0, 0.4), rec(0.6, 0.9), rec(1.2, 1.1)]).unwrap(),
            Subject::new("b", 0.4, 1.1, vec![], vec![], vec![rec(0.0, -0.3), rec(0.3, 0.0)]).unwrap(),
            Subject::new("c", 2.0, f64::INFINITY, vec![], vec![], vec![rec(0.0, 0.1), rec(1.0, 0.2), rec(1.9, 0.6)]).unwrap(),
            Subject::new("d", 0.0, 0.9, vec![], vec![], vec![rec(0.0, 0.7)]).unwrap(),
        ];
        let ds = Dataset::new(subjects, vec![], vec!["z1".into()], vec![]);
        let spec = ModelSpec {
            baseline: BasisSet::mspline(3, vec![0.0, 1.0, 2.0]).unwrap(),
            p: 0,
            pw: 0,
            longitudinal: vec![LongitudinalSpec {
                name: "z1".into(),
                time_basis: BasisSet::polynomial(1, 0.0, 2.0).unwrap(),
                interactions: vec![],
                random_basis: BasisSet::polynomial(1, 0.0, 2.0).unwrap(),
                penalized: false,
            }],
        };
        let var = VarianceComponents {
            sigma_eps2: 0.05,
            sigma_theta2: 5.0,
            sigma_alpha2: vec![1.0],
            sigma_kappa2: vec![vec![0.3, 0.2]],
        };
        (JointModel::new(spec, &ds).unwrap(), var)
    }

    #[test]
    fn exponential_two_group_closed_form() {
        // group 0: events at 1, 2; censored at 3 -> rate 2/6
        // group 1: events at 0.5, 1.5, 2.5 -> rate 3/4.5
        let s = |id: &str, l: f64, r: f64, x: f64| Subject::new(id, l, r, vec![x], vec![], vec![]).unwrap();
        let model = survival_only(
            vec![
                s("a", 1.0, 1.0, 0.0),
                s("b", 2.0, 2.0, 0.0),
                s("c", 3.0, f64::INFINITY, 0.0),
                s("d", 0.5, 0.5, 1.0),
                s("e", 1.5, 1.5, 1.0),
                s("f", 2.5, 2.5, 1.0),
            ],
            1,
            3.0,
        );
        let cfg = InnerLoopConfig { tol: 1e-10, ..Default::default() };
        let (st, trace) = run_inner(&model, &initial_state(&model), &no_var(), &cfg).unwrap();
        assert!(trace.converged);
        let (r0, r1) = (2.0 / 6.0, 3.0 / 4.5);
        assert!((st.theta[0] - r0).abs() < 1e-6, "{:?}", st.theta);
        assert!((st.beta[0] - (r1 / r0).ln()).abs() < 1e-5, "{:?}", st.beta);
    }

    #[test]
    fn ascent_is_monotone_and_theta_stays_nonnegative() {
        let (model, var) = long_model();
        let mut st = initial_state(&model);
        let mut f = model.penalised_objective(&st, &var);
        let cfg = InnerLoopConfig::default();
        for _ in 0..30 {
            for upd in [update_beta, update_gamma, update_theta, update_alpha, update_kappa, update_joint] {
                let s = upd(&model, &mut st, &var, &cfg, f);
                assert!(s.after >= s.before - 1e-12 * s.before.abs());
                assert!(st.theta.iter().all(|&t| t >= 0.0));
                f = s.after;
            }
        }
        let (_, trace) = run_inner(&model, &initial_state(&model), &var, &cfg).unwrap();
        assert!(trace.worst_decrease <= 1e-12);
        assert!(trace.objective_path.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn active_set_rule() {
        assert_eq!(detect_active(&[0.0, 0.5, 0.005, 0.0], &[-1.0, -1.0, -0.02, 0.3]), vec![0, 2]);
        assert!(detect_active(&[0.0], &[-0.005]).is_empty());
    }

    #[test]
    fn all_right_censored_drives_baseline_to_zero() {
        let s = |id: &str, c: f64| Subject::new(id, c, f64::INFINITY, vec![], vec![], vec![]).unwrap();
        let model = survival_only(vec![s("a", 1.0), s("b", 2.0), s("c", 3.0)], 0, 3.0);
        let (st, _) = run_inner(&model, &initial_state(&model), &no_var(), &InnerLoopConfig::default()).unwrap();
        assert!(st.theta[0] < 1e-8, "{:?}", st.theta);
        assert!(st.theta[0] >= 0.0);
    }

    // With gamma = 0 the (alpha, kappa) subproblem is Gaussian, so one
    // undamped Newton step lands on the solution of the normal equations.
    fn dense_gaussian_solution(model: &JointModel, var: &VarianceComponents, alpha: Option<&[f64]>) -> Vec<f64> {
        let ly = &model.layout;
        let (b, c, n) = (ly.n_alpha, ly.n_kappa, model.n());
        let dim = if alpha.is_some() { n * c } else { b + n * c };
        let off = if alpha.is_some() { 0 } else { b };
        let mut a = DMatrix::<f64>::zeros(dim, dim);
        let mut y = DVector::<f64>::zeros(dim);
        for (i, s) in model.subjects.iter().enumerate() {
            for r in &s.records {
                let phi = &r.design[ly.phi_span(0)];
                let xi = &r.design[ly.xi_span(0)];
                let mut row = DVector::<f64>::zeros(dim);
                let mut target = r.y[0];
                match alpha {
                    Some(al) => target -= phi.iter().zip(al).map(|(p, a)| p * a).sum::<f64>(),
                    None => row.rows_mut(0, b).copy_from_slice(phi),
                }
                row.rows_mut(off + i * c, c).copy_from_slice(xi);
                a += &row * row.transpose() / var.sigma_eps2;
                y += &row * target / var.sigma_eps2;
            }
            for l in 0..c {
                a[(off + i * c + l, off + i * c + l)] += 1.0 / var.sigma_kappa2[0][l];
            }
        }
        a.lu().solve(&y).unwrap().as_slice().to_vec()
    }

    #[test]
    fn kappa_step_matches_dense_solve() {
        let (model, var) = long_model();
        let mut st = initial_state(&model);
        st.alpha = vec![0.2, 0.3];
        let f = model.penalised_objective(&st, &var);
        update_kappa(&model, &mut st, &var, &InnerLoopConfig::default(), f);
        let exact = dense_gaussian_solution(&model, &var, Some(&st.alpha));
        let got: Vec<f64> = st.kappa.iter().flatten().copied().collect();
        for (g, e) in got.iter().zip(&exact) {
            assert!((g - e).abs() < 1e-9, "{got:?} vs {exact:?}");
        }
    }

    #[test]
    fn joint_step_matches_dense_solve() {
        let (model, var) = long_model();
        let cfg = InnerLoopConfig { fix_gamma: true, ..Default::default() };
        let mut st = initial_state(&model);
        let f = model.penalised_objective(&st, &var);
        // theta is excluded from the joint step and gamma = 0 decouples the
        // survival part from (alpha, kappa)
        update_joint(&model, &mut st, &var, &cfg, f);
        let exact = dense_gaussian_solution(&model, &var, None);
        let got: Vec<f64> = st.alpha.iter().chain(st.kappa.iter().flatten()).copied().collect();
        for (g, e) in got.iter().zip(&exact) {
            assert!((g - e).abs() < 1e-8, "{got:?} vs {exact:?}");
        }
    }

    #[test]
    fn converged_state_is_a_fixed_point() {
        let (model, var) = long_model();
        // four subjects do not pin down gamma, so it is held fixed
        let cfg = InnerLoopConfig { tol: 1e-9, fix_gamma: true, ..Default::default() };
        let mut st0 = initial_state(&model);
        st0.gamma = vec![0.3];
        let (st, trace) = run_inner(&model, &st0, &var, &cfg).unwrap();
        assert!(trace.converged);
        let (again, t2) = run_inner(&model, &st, &var, &cfg).unwrap();
        assert!(t2.iterations <= 2);
        assert!(again.max_abs_diff(&st) < 1e-7);
    }

    #[test]
    fn modified_newton_flips_negative_curvature() {
        let g = DVector::from_vec(vec![1.0, 1.0]);
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -4.0]));
        let d = modified_newton_direction(&g, &h);
        assert!((d[0] - 0.5).abs() < 1e-15 && (d[1] - 0.25).abs() < 1e-15);
        assert!(g.dot(&d) > 0.0);
    }
}
