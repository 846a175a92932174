//! Analytic scores and Hessians of the penalised objective.
//!
//! With `F(s) = h0(s) exp(eta(s))` the cumulative hazard is a quadrature sum
//! of `F`, and every derivative follows from
//! `dF = F v + u` and `d2F = F (v v' + d2eta) + u v' + v u'`, where `v` is
//! the gradient of `eta` (zero in the theta slots), `u` holds
//! `psi_u exp(eta)` in the theta slots, and `d2eta` is non-zero only for the
//! `(gamma_r, alpha_r)` and `(gamma_r, kappa_r)` pairs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::CensoringStatus;
use crate::model::{dot, log1m_exp_neg, JointModel, Layout, Nodes, ParameterState, Slot, VarianceComponents};

/// Stabiliser added to the MI denominators.
pub const MI_UPSILON: f64 = 1e-3;
/// Floor on `h0` at exact event times in the Hessian.
pub const H0_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Beta(usize),
    Gamma(usize),
    Theta(usize),
    /// Alpha or kappa entry of covariate `r` with design index `d`.
    Lin(usize, usize),
}

/// A subset of local parameter indices over which derivatives are taken.
#[derive(Debug, Clone)]
pub struct Selection {
    pub idx: Vec<usize>,
    kinds: Vec<Kind>,
    /// `(a, b, d)`: `d2 eta / d sel_a d sel_b = design[d]`, with `a` a gamma.
    pairs: Vec<(usize, usize, usize)>,
}

impl Selection {
    pub fn new(layout: &Layout, idx: Vec<usize>) -> Self {
        let off = layout.p + layout.q;
        let kinds: Vec<Kind> = idx
            .iter()
            .map(|&l| match layout.slot(l) {
                Slot::Beta(j) => Kind::Beta(j),
                Slot::Gamma(r) => Kind::Gamma(r),
                Slot::Theta(u) => Kind::Theta(u),
                Slot::Alpha(r, _) | Slot::Kappa(r, _) => Kind::Lin(r, l - off),
            })
            .collect();
        let mut pairs = Vec::new();
        for (a, ka) in kinds.iter().enumerate() {
            if let Kind::Gamma(r) = *ka {
                for (b, kb) in kinds.iter().enumerate() {
                    if let Kind::Lin(r2, d) = *kb {
                        if r2 == r {
                            pairs.push((a, b, d));
                        }
                    }
                }
            }
        }
        Self { idx, kinds, pairs }
    }

    pub fn range(layout: &Layout, r: std::ops::Range<usize>) -> Self {
        Self::new(layout, r.collect())
    }

    /// Every local index of one subject.
    pub fn all(layout: &Layout) -> Self {
        Self::range(layout, 0..layout.dlocal())
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }
}

/// Value, gradient and (row-major, full) Hessian over a selection.
#[derive(Debug, Clone)]
pub(crate) struct Local {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<f64>,
}

impl Local {
    fn zeros(n: usize, order: usize) -> Self {
        Self {
            value: 0.0,
            grad: if order >= 1 { vec![0.0; n] } else { Vec::new() },
            hess: if order >= 2 { vec![0.0; n * n] } else { Vec::new() },
        }
    }

    fn add_scaled(&mut self, other: &Local, s: f64) {
        self.value += s * other.value;
        for (a, b) in self.grad.iter_mut().zip(&other.grad) {
            *a += s * b;
        }
        for (a, b) in self.hess.iter_mut().zip(&other.hess) {
            *a += s * b;
        }
    }

    fn mirror(&mut self, n: usize) {
        for a in 0..n {
            for b in 0..a {
                self.hess[a * n + b] = self.hess[b * n + a];
            }
        }
    }
}

struct Point {
    eta: f64,
    h0: f64,
    v: Vec<f64>,
}

impl JointModel {
    fn point(&self, d: &[f64], x: &[f64], zeta: &[f64], kappa: &[f64], sel: &Selection, need_v: bool) -> Point {
        let ly = &self.layout;
        let z: Vec<f64> = (0..ly.q).map(|r| self.traj(d, zeta, kappa, r)).collect();
        let gamma = &zeta[ly.gamma()];
        let eta = dot(x, &zeta[ly.beta()]) + dot(gamma, &z);
        let h0 = dot(&zeta[ly.theta()], &d[..ly.m]);
        let v = if need_v {
            sel.kinds
                .iter()
                .map(|k| match *k {
                    Kind::Beta(j) => x[j],
                    Kind::Gamma(r) => z[r],
                    Kind::Theta(_) => 0.0,
                    Kind::Lin(r, di) => gamma[r] * d[di],
                })
                .collect()
        } else {
            Vec::new()
        };
        Point { eta, h0, v }
    }

    /// Quadrature sum of `F` and its derivatives over a node set.
    fn integral_derivs(
        &self,
        nodes: &Nodes,
        x: &[f64],
        zeta: &[f64],
        kappa: &[f64],
        sel: &Selection,
        order: usize,
    ) -> Local {
        let n = sel.len();
        let len = self.layout.design_len();
        let mut out = Local::zeros(n, order);
        let mut u = vec![0.0; n];
        for (k, &w) in nodes.weights.iter().enumerate() {
            let d = &nodes.design[k * len..(k + 1) * len];
            let pt = self.point(d, x, zeta, kappa, sel, order >= 1);
            let e = pt.eta.exp();
            let f = pt.h0 * e;
            out.value += w * f;
            if order == 0 {
                continue;
            }
            for (a, kind) in sel.kinds.iter().enumerate() {
                u[a] = if let Kind::Theta(t) = *kind { d[t] * e } else { 0.0 };
                out.grad[a] += w * (f * pt.v[a] + u[a]);
            }
            if order < 2 {
                continue;
            }
            for a in 0..n {
                let (fva, ua, va) = (w * f * pt.v[a], w * u[a], w * pt.v[a]);
                let row = &mut out.hess[a * n..(a + 1) * n];
                for b in a..n {
                    row[b] += fva * pt.v[b] + ua * pt.v[b] + va * u[b];
                }
            }
            for &(a, b, di) in &sel.pairs {
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                out.hess[lo * n + hi] += w * f * d[di];
            }
        }
        if order >= 2 {
            out.mirror(n);
        }
        out
    }

    /// Survival term `l_i` and its derivatives.
    pub(crate) fn surv_derivs(&self, i: usize, zeta: &[f64], kappa: &[f64], sel: &Selection, order: usize) -> Local {
        let s = &self.subjects[i];
        let n = sel.len();
        let left = self.integral_derivs(&s.left, &s.x, zeta, kappa, sel, order);
        let mut out = Local::zeros(n, order);
        out.add_scaled(&left, -1.0);
        match s.status {
            CensoringStatus::Right => {}
            CensoringStatus::Exact => {
                let d = s.event.as_ref().unwrap();
                let pt = self.point(d, &s.x, zeta, kappa, sel, order >= 1);
                out.value += pt.h0.ln() + pt.eta;
                if order >= 1 {
                    let h0 = pt.h0.max(H0_FLOOR);
                    let psi: Vec<f64> =
                        sel.kinds.iter().map(|k| if let Kind::Theta(t) = *k { d[t] } else { 0.0 }).collect();
                    for a in 0..n {
                        out.grad[a] += pt.v[a] + psi[a] / h0;
                    }
                    if order >= 2 {
                        for a in 0..n {
                            for b in 0..n {
                                out.hess[a * n + b] -= psi[a] * psi[b] / (h0 * h0);
                            }
                        }
                        for &(a, b, di) in &sel.pairs {
                            out.hess[a * n + b] += d[di];
                            out.hess[b * n + a] += d[di];
                        }
                    }
                }
            }
            CensoringStatus::Left | CensoringStatus::Interval => {
                let r = self.integral_derivs(&s.right, &s.x, zeta, kappa, sel, order);
                let delta = r.value;
                out.value += log1m_exp_neg(delta);
                if order >= 1 {
                    let em1 = delta.exp_m1();
                    let g1 = 1.0 / em1;
                    for a in 0..n {
                        out.grad[a] += g1 * r.grad[a];
                    }
                    if order >= 2 {
                        let g2 = -1.0 / (em1 * -(-delta).exp_m1());
                        for a in 0..n {
                            for b in 0..n {
                                out.hess[a * n + b] += g1 * r.hess[a * n + b] + g2 * r.grad[a] * r.grad[b];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Longitudinal Gaussian term (without constant) and derivatives.
    pub(crate) fn long_derivs(
        &self,
        i: usize,
        zeta: &[f64],
        kappa: &[f64],
        sigma_eps2: f64,
        sel: &Selection,
        order: usize,
    ) -> Local {
        let n = sel.len();
        let mut out = Local::zeros(n, order);
        let lin: Vec<(usize, usize, usize)> = sel
            .kinds
            .iter()
            .enumerate()
            .filter_map(|(a, k)| if let Kind::Lin(r, d) = *k { Some((a, r, d)) } else { None })
            .collect();
        for rec in &self.subjects[i].records {
            for r in 0..self.layout.q {
                let e = rec.y[r] - self.traj(&rec.design, zeta, kappa, r);
                out.value -= 0.5 * e * e / sigma_eps2;
                if order == 0 {
                    continue;
                }
                for &(a, ra, da) in &lin {
                    if ra != r {
                        continue;
                    }
                    out.grad[a] += e * rec.design[da] / sigma_eps2;
                    if order >= 2 {
                        for &(b, rb, db) in &lin {
                            if rb == r {
                                out.hess[a * n + b] -= rec.design[da] * rec.design[db] / sigma_eps2;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gaussian prior of the random effects (without constant).
    fn prior_derivs(&self, kappa: &[f64], sk: &[f64], sel: &Selection, order: usize) -> Local {
        let n = sel.len();
        let mut out = Local::zeros(n, order);
        out.value = self.subject_prior(kappa, sk);
        if order >= 1 {
            let dz = self.layout.dzeta();
            for (a, &l) in sel.idx.iter().enumerate() {
                if l >= dz {
                    let k = l - dz;
                    out.grad[a] = -kappa[k] / sk[k];
                    if order >= 2 {
                        out.hess[a * n + a] = -1.0 / sk[k];
                    }
                }
            }
        }
        out
    }

    /// Gradient and Hessian of the penalty term `-J(theta, alpha)`.
    fn penalty_derivs(&self, zeta: &[f64], var: &VarianceComponents, sel: &Selection) -> (Vec<f64>, Vec<f64>) {
        let ly = &self.layout;
        let n = sel.len();
        let mut g = vec![0.0; n];
        let mut h = vec![0.0; n * n];
        // (block matrix, block start, 1/sigma^2)
        let mut blocks: Vec<(&DMatrix<f64>, usize, f64)> = vec![(&self.r_theta, ly.theta().start, 1.0 / var.sigma_theta2)];
        for r in 0..ly.q {
            blocks.push((&self.r_alpha[r], ly.alpha_r(r).start, 1.0 / var.sigma_alpha2[r]));
        }
        for (mat, start, s) in blocks {
            let size = mat.nrows();
            for (a, &la) in sel.idx.iter().enumerate() {
                if la < start || la >= start + size {
                    continue;
                }
                let u = la - start;
                g[a] -= s * (0..size).map(|v| mat[(u, v)] * zeta[start + v]).sum::<f64>();
                for (b, &lb) in sel.idx.iter().enumerate() {
                    if lb >= start && lb < start + size {
                        h[a * n + b] -= s * mat[(u, lb - start)];
                    }
                }
            }
        }
        (g, h)
    }

    /// Gradient and Hessian of the objective over a selection of shared
    /// (`zeta`) indices, summed over subjects.
    pub fn block_derivs(&self, state: &ParameterState, var: &VarianceComponents, sel: &Selection) -> (DVector<f64>, DMatrix<f64>) {
        let n = sel.len();
        let zeta = state.zeta();
        let touches_long = sel.kinds.iter().any(|k| matches!(k, Kind::Lin(..)));
        let mut acc = Local::zeros(n, 2);
        for i in 0..self.n() {
            acc.add_scaled(&self.surv_derivs(i, &zeta, &state.kappa[i], sel, 2), 1.0);
            if touches_long {
                acc.add_scaled(&self.long_derivs(i, &zeta, &state.kappa[i], var.sigma_eps2, sel, 2), 1.0);
            }
        }
        let (pg, ph) = self.penalty_derivs(&zeta, var, sel);
        let g = DVector::from_iterator(n, acc.grad.iter().zip(&pg).map(|(a, b)| a + b));
        let h = DMatrix::from_row_iterator(n, n, acc.hess.iter().zip(&ph).map(|(a, b)| a + b));
        (g, h)
    }

    /// Value, gradient and Hessian in `kappa_i` of the terms involving
    /// subject `i`.
    pub fn kappa_derivs(
        &self,
        i: usize,
        zeta: &[f64],
        kappa: &[f64],
        var: &VarianceComponents,
    ) -> (f64, DVector<f64>, DMatrix<f64>) {
        let sel = Selection::range(&self.layout, self.layout.kappa());
        let n = sel.len();
        let mut acc = self.surv_derivs(i, zeta, kappa, &sel, 2);
        acc.add_scaled(&self.long_derivs(i, zeta, kappa, var.sigma_eps2, &sel, 2), 1.0);
        acc.add_scaled(&self.prior_derivs(kappa, &var.kappa_flat(), &sel, 2), 1.0);
        (acc.value, DVector::from_vec(acc.grad), DMatrix::from_row_slice(n, n, &acc.hess))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBlocks {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub kappa: Vec<Vec<f64>>,
}

impl ScoreBlocks {
    pub fn zeta(&self) -> Vec<f64> {
        [&self.beta[..], &self.gamma, &self.theta, &self.alpha].concat()
    }

    pub fn max_abs(&self) -> f64 {
        self.zeta().iter().chain(self.kappa.iter().flatten()).fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Gradient of the penalised objective in every parameter.
pub fn score(model: &JointModel, state: &ParameterState, var: &VarianceComponents) -> ScoreBlocks {
    let ly = &model.layout;
    let sel = Selection::all(ly);
    let zeta = state.zeta();
    let sk = var.kappa_flat();
    let dz = ly.dzeta();
    let mut gz = vec![0.0; dz];
    let mut kappa = Vec::with_capacity(model.n());
    for i in 0..model.n() {
        let k = &state.kappa[i];
        let mut acc = model.surv_derivs(i, &zeta, k, &sel, 1);
        acc.add_scaled(&model.long_derivs(i, &zeta, k, var.sigma_eps2, &sel, 1), 1.0);
        acc.add_scaled(&model.prior_derivs(k, &sk, &sel, 1), 1.0);
        for (a, g) in gz.iter_mut().zip(&acc.grad[..dz]) {
            *a += g;
        }
        kappa.push(acc.grad[dz..].to_vec());
    }
    let zsel = Selection::range(ly, 0..dz);
    let (pg, _) = model.penalty_derivs(&zeta, var, &zsel);
    for (a, g) in gz.iter_mut().zip(pg) {
        *a += g;
    }
    ScoreBlocks {
        beta: gz[ly.beta()].to_vec(),
        gamma: gz[ly.gamma()].to_vec(),
        theta: gz[ly.theta()].to_vec(),
        alpha: gz[ly.alpha()].to_vec(),
        kappa,
    }
}

/// Negative Hessian of the penalised objective in block-arrow form.
///
/// The full matrix over `[zeta | kappa_1 | ... | kappa_n]` has a dense
/// `zeta` block `zz`, one `zeta x kappa_i` block `zk[i]` and one diagonal
/// block `kk[i]` per subject; blocks between different subjects are zero.
/// It decomposes as `H_eta + Q_theta + sum Q_alpha + Q_eps + sum Q_kappa`.
#[derive(Debug, Clone)]
pub struct HessianAssembly {
    pub dzeta: usize,
    pub nk: usize,
    pub zz: DMatrix<f64>,
    pub zk: Vec<DMatrix<f64>>,
    pub kk: Vec<DMatrix<f64>>,
    /// Survival part `H_eta`.
    pub surv_zz: DMatrix<f64>,
    pub surv_zk: Vec<DMatrix<f64>>,
    pub surv_kk: Vec<DMatrix<f64>>,
    /// Longitudinal part `Q_eps`.
    pub eps_zz: DMatrix<f64>,
    pub eps_zk: Vec<DMatrix<f64>>,
    pub eps_kk: Vec<DMatrix<f64>>,
    /// `Q_theta`, embedded in the zeta block.
    pub q_theta: DMatrix<f64>,
    /// `Q_alpha_r`, embedded in the zeta block.
    pub q_alpha: Vec<DMatrix<f64>>,
    /// Diagonal of `Q_kappa` for one subject (identical for all).
    pub q_kappa: Vec<f64>,
}

impl HessianAssembly {
    pub fn n_subjects(&self) -> usize {
        self.kk.len()
    }

    /// Sum of the penalty blocks in the zeta block.
    pub fn penalty_zz(&self) -> DMatrix<f64> {
        let mut p = self.q_theta.clone();
        for q in &self.q_alpha {
            p += q;
        }
        p
    }

    fn dense_of(&self, zz: &DMatrix<f64>, zk: &[DMatrix<f64>], kk: &[DMatrix<f64>]) -> DMatrix<f64> {
        let (dz, k, n) = (self.dzeta, self.nk, self.n_subjects());
        let mut out = DMatrix::zeros(dz + n * k, dz + n * k);
        out.view_mut((0, 0), (dz, dz)).copy_from(zz);
        for i in 0..n {
            let o = dz + i * k;
            out.view_mut((0, o), (dz, k)).copy_from(&zk[i]);
            out.view_mut((o, 0), (k, dz)).copy_from(&zk[i].transpose());
            out.view_mut((o, o), (k, k)).copy_from(&kk[i]);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.dense_of(&self.zz, &self.zk, &self.kk)
    }

    pub fn surv_dense(&self) -> DMatrix<f64> {
        self.dense_of(&self.surv_zz, &self.surv_zk, &self.surv_kk)
    }

    pub fn eps_dense(&self) -> DMatrix<f64> {
        self.dense_of(&self.eps_zz, &self.eps_zk, &self.eps_kk)
    }

    /// Rebuilds the full matrix from its decomposition.
    pub fn reassemble(&self) -> DMatrix<f64> {
        let mut f = self.surv_dense() + self.eps_dense();
        let p = self.penalty_zz();
        let dz = self.dzeta;
        let mut top = f.view_mut((0, 0), (dz, dz));
        top += p;
        for i in 0..self.n_subjects() {
            for (l, q) in self.q_kappa.iter().enumerate() {
                let o = dz + i * self.nk + l;
                f[(o, o)] += q;
            }
        }
        f
    }
}

pub fn negative_hessian(model: &JointModel, state: &ParameterState, var: &VarianceComponents) -> HessianAssembly {
    let ly = &model.layout;
    let sel = Selection::all(ly);
    let (dz, nk, dl) = (ly.dzeta(), ly.n_kappa, ly.dlocal());
    let zeta = state.zeta();
    let sk = var.kappa_flat();
    let q_kappa: Vec<f64> = sk.iter().map(|s| 1.0 / s).collect();
    let mut surv_zz = DMatrix::zeros(dz, dz);
    let mut eps_zz = DMatrix::zeros(dz, dz);
    let (mut surv_zk, mut surv_kk, mut eps_zk, mut eps_kk) = (vec![], vec![], vec![], vec![]);
    for i in 0..model.n() {
        let k = &state.kappa[i];
        let s = model.surv_derivs(i, &zeta, k, &sel, 2);
        let e = model.long_derivs(i, &zeta, k, var.sigma_eps2, &sel, 2);
        let sm = -DMatrix::from_row_slice(dl, dl, &s.hess);
        let em = -DMatrix::from_row_slice(dl, dl, &e.hess);
        surv_zz += sm.view((0, 0), (dz, dz));
        eps_zz += em.view((0, 0), (dz, dz));
        surv_zk.push(sm.view((0, dz), (dz, nk)).into_owned());
        surv_kk.push(sm.view((dz, dz), (nk, nk)).into_owned());
        eps_zk.push(em.view((0, dz), (dz, nk)).into_owned());
        eps_kk.push(em.view((dz, dz), (nk, nk)).into_owned());
    }
    let mut q_theta = DMatrix::zeros(dz, dz);
    q_theta
        .view_mut((ly.theta().start, ly.theta().start), (ly.m, ly.m))
        .copy_from(&(&model.r_theta / var.sigma_theta2));
    let q_alpha: Vec<DMatrix<f64>> = (0..ly.q)
        .map(|r| {
            let mut q = DMatrix::zeros(dz, dz);
            let s = ly.alpha_r(r).start;
            q.view_mut((s, s), (ly.b[r], ly.b[r])).copy_from(&(&model.r_alpha[r] / var.sigma_alpha2[r]));
            q
        })
        .collect();
    let mut zz = &surv_zz + &eps_zz + &q_theta;
    for q in &q_alpha {
        zz += q;
    }
    let zk = surv_zk.iter().zip(&eps_zk).map(|(a, b)| a + b).collect();
    let kk = surv_kk
        .iter()
        .zip(&eps_kk)
        .map(|(a, b)| {
            let mut m = a + b;
            for (l, q) in q_kappa.iter().enumerate() {
                m[(l, l)] += q;
            }
            m
        })
        .collect();
    HessianAssembly {
        dzeta: dz,
        nk,
        zz,
        zk,
        kk,
        surv_zz,
        surv_zk,
        surv_kk,
        eps_zz,
        eps_zk,
        eps_kk,
        q_theta,
        q_alpha,
        q_kappa,
    }
}

/// Theta gradient split into its structurally positive and negative parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaParts {
    pub grad: Vec<f64>,
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

/// Splits the theta gradient term by term: exposure integrals enter with a
/// negative sign, `psi / h0` at events and the censoring-window integrals
/// with a positive one, and the penalty by the sign of `R theta`.
pub fn theta_parts(model: &JointModel, state: &ParameterState, var: &VarianceComponents) -> ThetaParts {
    let ly = &model.layout;
    let m = ly.m;
    let sel = Selection::range(ly, ly.theta());
    let zeta = state.zeta();
    let mut pos = vec![0.0; m];
    let mut neg = vec![0.0; m];
    for (i, s) in model.subjects.iter().enumerate() {
        let k = &state.kappa[i];
        let left = model.integral_derivs(&s.left, &s.x, &zeta, k, &sel, 1);
        match s.status {
            CensoringStatus::Right => {
                for u in 0..m {
                    neg[u] += left.grad[u];
                }
            }
            CensoringStatus::Exact => {
                let d = s.event.as_ref().unwrap();
                let h0 = dot(&state.theta, &d[..m]).max(H0_FLOOR);
                for u in 0..m {
                    neg[u] += left.grad[u];
                    pos[u] += d[u] / h0;
                }
            }
            CensoringStatus::Left | CensoringStatus::Interval => {
                // l = -H_L + g(H_R - H_L) with H_R the integral to t_right
                let r = model.integral_derivs(&s.right, &s.x, &zeta, k, &sel, 1);
                let g1 = 1.0 / r.value.exp_m1();
                for u in 0..m {
                    neg[u] += (1.0 + g1) * left.grad[u];
                    pos[u] += g1 * (left.grad[u] + r.grad[u]);
                }
            }
        }
    }
    let rt = &model.r_theta * DVector::from_column_slice(&state.theta) / var.sigma_theta2;
    for u in 0..m {
        if rt[u] > 0.0 {
            neg[u] += rt[u];
        } else {
            pos[u] -= rt[u];
        }
    }
    let grad = pos.iter().zip(&neg).map(|(p, n)| p - n).collect();
    ThetaParts { grad, positive: pos, negative: neg }
}

/// MI denominators `d_u = [g_u]^- + upsilon`.
pub fn mi_denominators(model: &JointModel, state: &ParameterState, var: &VarianceComponents, upsilon: f64) -> Vec<f64> {
    theta_parts(model, state, var).negative.iter().map(|n| n + upsilon).collect()
}

/// Negative part `max(-g, 0)` of a gradient entry.
pub fn negative_part(g: f64) -> f64 {
    (-g).max(0.0)
}

/// Positive part `max(g, 0)` of a gradient entry.
pub fn positive_part(g: f64) -> f64 {
    g.max(0.0)
}

/// Relative tolerance of the score check.
pub const SCORE_TOL: f64 = 1e-5;
/// Relative tolerance of the Hessian check.
pub const HESSIAN_TOL: f64 = 1e-4;
const SCORE_ABS_FLOOR: f64 = 1e-8;
const HESSIAN_ABS_FLOOR: f64 = 1e-6;
const HESSIAN_STEP: f64 = 1e-5;

/// Worst finite-difference discrepancy over one block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    /// `"score"` or `"hessian"`.
    pub kind: String,
    /// Block name, or `"row/col"` for Hessian blocks.
    pub block: String,
    pub entries: usize,
    pub max_abs_err: f64,
    /// Error over `max(|fd|, floor / tol)`.
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }
}

fn block_name(ly: &Layout, idx: usize) -> &'static str {
    if idx >= ly.dzeta() {
        return "kappa";
    }
    match ly.slot(idx) {
        Slot::Beta(_) => "beta",
        Slot::Gamma(_) => "gamma",
        Slot::Theta(_) => "theta",
        Slot::Alpha(..) => "alpha",
        Slot::Kappa(..) => "kappa",
    }
}

fn flat_score(s: &ScoreBlocks) -> Vec<f64> {
    s.zeta().into_iter().chain(s.kappa.iter().flatten().copied()).collect()
}

fn shifted(state: &ParameterState, ly: &Layout, idx: usize, h: f64) -> ParameterState {
    let mut s = state.clone();
    let dz = ly.dzeta();
    if idx < dz {
        let mut z = s.zeta();
        z[idx] += h;
        s.set_zeta(&z);
    } else {
        let k = ly.n_kappa;
        s.kappa[(idx - dz) / k][(idx - dz) % k] += h;
    }
    s
}

fn param_value(state: &ParameterState, ly: &Layout, idx: usize) -> f64 {
    let dz = ly.dzeta();
    if idx < dz {
        state.zeta()[idx]
    } else {
        state.kappa[(idx - dz) / ly.n_kappa][(idx - dz) % ly.n_kappa]
    }
}

struct Accumulator {
    kind: &'static str,
    tol: f64,
    floor: f64,
    blocks: std::collections::BTreeMap<String, (usize, f64, f64)>,
    order: Vec<String>,
}

impl Accumulator {
    fn new(kind: &'static str, tol: f64, floor: f64) -> Self {
        Self { kind, tol, floor, blocks: Default::default(), order: vec![] }
    }

    fn add(&mut self, block: String, analytic: f64, fd: f64) {
        let err = (analytic - fd).abs();
        let rel = err / fd.abs().max(self.floor / self.tol);
        let rel = if rel.is_nan() { f64::INFINITY } else { rel };
        if !self.blocks.contains_key(&block) {
            self.order.push(block.clone());
        }
        let e = self.blocks.entry(block).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 = e.1.max(err);
        e.2 = e.2.max(rel);
    }

    fn finish(self, out: &mut Vec<BlockCheck>) {
        for name in self.order {
            let (entries, max_abs_err, max_rel_err) = self.blocks[&name];
            out.push(BlockCheck {
                kind: self.kind.into(),
                block: name,
                entries,
                max_abs_err,
                max_rel_err,
                tolerance: self.tol,
                passed: max_rel_err < self.tol,
            });
        }
    }
}

/// Compares the analytic score and negative Hessian with central
/// differences of the penalised objective and of the score.
pub fn gradcheck(model: &JointModel, state: &ParameterState, var: &VarianceComponents) -> GradCheckReport {
    gradcheck_with(model, state, var, &|m, s, v| flat_score(&score(m, s, v)), &|m, s, v| {
        negative_hessian(m, s, v).to_dense()
    })
}

/// Flattened score over `[zeta | kappa_1 | ... | kappa_n]`.
pub type ScoreFn<'a> = dyn Fn(&JointModel, &ParameterState, &VarianceComponents) -> Vec<f64> + 'a;
/// Dense negative Hessian over the same ordering.
pub type HessianFn<'a> = dyn Fn(&JointModel, &ParameterState, &VarianceComponents) -> DMatrix<f64> + 'a;

/// [`gradcheck`] with the analytic derivatives supplied by the caller.
pub fn gradcheck_with(
    model: &JointModel,
    state: &ParameterState,
    var: &VarianceComponents,
    score_fn: &ScoreFn,
    hessian_fn: &HessianFn,
) -> GradCheckReport {
    let ly = &model.layout;
    let g = score_fn(model, state, var);
    let dim = g.len();
    let mut sc = Accumulator::new("score", SCORE_TOL, SCORE_ABS_FLOOR);
    for (idx, &ga) in g.iter().enumerate() {
        let h = 1e-6 * (1.0 + param_value(state, ly, idx).abs());
        let fp = model.penalised_objective(&shifted(state, ly, idx, h), var);
        let fm = model.penalised_objective(&shifted(state, ly, idx, -h), var);
        sc.add(block_name(ly, idx).into(), ga, (fp - fm) / (2.0 * h));
    }
    let hess = hessian_fn(model, state, var);
    let mut hc = Accumulator::new("hessian", HESSIAN_TOL, HESSIAN_ABS_FLOOR);
    for j in 0..dim {
        let gp = score_fn(model, &shifted(state, ly, j, HESSIAN_STEP), var);
        let gm = score_fn(model, &shifted(state, ly, j, -HESSIAN_STEP), var);
        for a in 0..dim {
            let fd = -(gp[a] - gm[a]) / (2.0 * HESSIAN_STEP);
            hc.add(format!("{}/{}", block_name(ly, a), block_name(ly, j)), hess[(a, j)], fd);
        }
    }
    let mut blocks = Vec::new();
    sc.finish(&mut blocks);
    hc.finish(&mut blocks);
    GradCheckReport { blocks }
}

/// A random interior state: regression coefficients and random effects in
/// `[-0.5, 0.5]`, baseline coefficients in `[0.2, 1]`.
pub fn random_state(model: &JointModel, seed: u64) -> ParameterState {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let ly = &model.layout;
    let mut st = ParameterState::zeros(ly, model.n());
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    st.beta.iter_mut().for_each(|v| *v = u(-0.5, 0.5));
    st.gamma.iter_mut().for_each(|v| *v = u(-0.5, 0.5));
    st.theta.iter_mut().for_each(|v| *v = u(0.2, 1.0));
    st.alpha.iter_mut().for_each(|v| *v = u(-0.5, 0.5));
    st.kappa.iter_mut().flatten().for_each(|v| *v = u(-0.5, 0.5));
    st
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSet;
    use crate::data::{Dataset, LongRecord, Subject};
    use crate::model::{LongitudinalSpec, ModelSpec};

    #[test]
    fn negative_part_examples() {
        assert_eq!(negative_part(-2.0) + MI_UPSILON, 2.001);
        assert_eq!(negative_part(5.0) + MI_UPSILON, 0.001);
        for g in [-3.5, -1e-9, 0.0, 2.25] {
            assert_eq!(positive_part(g) - negative_part(g), g);
        }
    }

    #[test]
    fn selection_pairs_link_gamma_to_its_own_blocks() {
        let ly = Layout::new(1, 2, vec![2, 3], vec![1, 2]);
        let sel = Selection::all(&ly);
        // gamma_0 pairs with 2 alpha + 1 kappa, gamma_1 with 3 alpha + 2 kappa
        assert_eq!(sel.pairs.len(), 3 + 5);
    }

    fn toy() -> (JointModel, ParameterState, VarianceComponents) {
        let rec = |t: f64, v: f64| LongRecord { time: t, values: vec![v] };
        let subjects = vec![
            Subject::new("a", 1.2, 1.2, vec![0.3], vec![], vec![rec(0.0, 0.4), rec(0.7, 0.1)]).unwrap(),
            Subject::new("b", 0.5, 1.5, vec![-1.0], vec![], vec![rec(0.0, -0.2)]).unwrap(),
            Subject::new("c", 0.0, 0.8, vec![0.8], vec![], vec![rec(0.0, 0.3), rec(0.5, 0.6)]).unwrap(),
            Subject::new("d", 1.6, f64::INFINITY, vec![0.1], vec![], vec![rec(0.0, 0.0), rec(1.0, 0.9)]).unwrap(),
        ];
        let ds = Dataset::new(subjects, vec!["x1".into()], vec!["z1".into()], vec![]);
        let spec = ModelSpec {
            baseline: BasisSet::mspline(3, vec![0.0, 0.9, 1.6]).unwrap(),
            p: 1,
            pw: 0,
            longitudinal: vec![LongitudinalSpec {
                name: "z1".into(),
                time_basis: BasisSet::polynomial(2, 0.0, 1.6).unwrap(),
                interactions: vec![],
                random_basis: BasisSet::polynomial(1, 0.0, 1.6).unwrap(),
                penalized: true,
            }],
        };
        let model = JointModel::new(spec, &ds).unwrap();
        let mut st = ParameterState::zeros(&model.layout, 4);
        st.beta = vec![0.4];
        st.gamma = vec![-0.7];
        st.theta = vec![0.3, 0.8, 0.5, 0.2];
        st.alpha = vec![0.2, 0.3, -0.1];
        for (i, k) in st.kappa.iter_mut().enumerate() {
            *k = vec![0.1 * i as f64 - 0.1, 0.05 * i as f64];
        }
        let var = VarianceComponents {
            sigma_eps2: 0.3,
            sigma_theta2: 2.0,
            sigma_alpha2: vec![0.7],
            sigma_kappa2: vec![vec![0.5, 0.8]],
        };
        (model, st, var)
    }

    fn perturbed(st: &ParameterState, ly: &Layout, idx: usize, h: f64) -> ParameterState {
        let mut s = st.clone();
        let dz = ly.dzeta();
        if idx < dz {
            let mut z = s.zeta();
            z[idx] += h;
            s.set_zeta(&z);
        } else {
            let (i, k) = ((idx - dz) / ly.n_kappa, (idx - dz) % ly.n_kappa);
            s.kappa[i][k] += h;
        }
        s
    }

    #[test]
    fn score_matches_finite_differences() {
        let (model, st, var) = toy();
        let ly = model.layout.clone();
        let sc = score(&model, &st, &var);
        let flat: Vec<f64> = sc.zeta().into_iter().chain(sc.kappa.iter().flatten().copied()).collect();
        for (idx, g) in flat.iter().enumerate() {
            let z = if idx < ly.dzeta() { st.zeta()[idx] } else { 0.0 };
            let h = 1e-6 * (1.0 + z.abs());
            let fd = (model.penalised_objective(&perturbed(&st, &ly, idx, h), &var)
                - model.penalised_objective(&perturbed(&st, &ly, idx, -h), &var))
                / (2.0 * h);
            assert!((g - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "entry {idx}: {g} vs {fd}");
        }
    }

    #[test]
    fn hessian_reassembles_and_matches_score_differences() {
        let (model, st, var) = toy();
        let ly = model.layout.clone();
        let hs = negative_hessian(&model, &st, &var);
        let dense = hs.to_dense();
        let re = hs.reassemble();
        let scale = dense.amax();
        assert!((&dense - &re).amax() <= 1e-12 * scale);
        assert!((&dense - dense.transpose()).amax() <= 1e-12 * scale);
        let flat = |s: &ScoreBlocks| -> Vec<f64> { s.zeta().into_iter().chain(s.kappa.iter().flatten().copied()).collect() };
        for j in 0..dense.ncols() {
            let h = 1e-5;
            let gp = flat(&score(&model, &perturbed(&st, &ly, j, h), &var));
            let gm = flat(&score(&model, &perturbed(&st, &ly, j, -h), &var));
            for a in 0..dense.nrows() {
                let fd = -(gp[a] - gm[a]) / (2.0 * h);
                assert!((dense[(a, j)] - fd).abs() <= 1e-4 * fd.abs().max(1e-2), "({a},{j}) {} vs {fd}", dense[(a, j)]);
            }
        }
    }

    #[test]
    fn theta_parts_sum_to_score() {
        let (model, st, var) = toy();
        let parts = theta_parts(&model, &st, &var);
        let sc = score(&model, &st, &var);
        for u in 0..model.layout.m {
            assert!((parts.grad[u] - sc.theta[u]).abs() < 1e-10);
            assert!(parts.positive[u] >= 0.0 && parts.negative[u] >= 0.0);
        }
    }

    #[test]
    fn gradcheck_passes_on_toy_and_catches_a_corrupted_score() {
        let (model, st, var) = toy();
        let rep = gradcheck(&model, &st, &var);
        assert!(rep.passed(), "{:#?}", rep.blocks.iter().filter(|b| !b.passed).collect::<Vec<_>>());
        assert!(rep.blocks.iter().any(|b| b.block == "kappa/gamma"));
        let bad = gradcheck_with(
            &model,
            &st,
            &var,
            &|m, s, v| {
                let mut g = flat_score(&score(m, s, v));
                g[m.layout.gamma().start] *= 1.001;
                g
            },
            &|m, s, v| negative_hessian(m, s, v).to_dense(),
        );
        let failed: Vec<&str> = bad.blocks.iter().filter(|b| !b.passed).map(|b| b.block.as_str()).collect();
        assert!(failed.contains(&"gamma"));
    }

    #[test]
    fn random_state_is_interior_and_seeded() {
        let (model, _, _) = toy();
        let a = random_state(&model, 7);
        assert_eq!(a, random_state(&model, 7));
        assert_ne!(a, random_state(&model, 8));
        assert!(a.theta.iter().all(|&t| (0.2..=1.0).contains(&t)));
    }

    #[test]
    fn block_derivs_agree_with_full_assembly() {
        let (model, st, var) = toy();
        let ly = model.layout.clone();
        let hs = negative_hessian(&model, &st, &var);
        let sel = Selection::range(&ly, ly.alpha());
        let (g, h) = model.block_derivs(&st, &var, &sel);
        let sc = score(&model, &st, &var);
        for (a, &l) in sel.idx.iter().enumerate() {
            assert!((g[a] - sc.zeta()[l]).abs() < 1e-10);
            for (b, &m) in sel.idx.iter().enumerate() {
                assert!((h[(a, b)] + hs.zz[(l, m)]).abs() < 1e-10);
            }
        }
    }
}
