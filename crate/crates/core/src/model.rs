//! Model specification, parameter layout and likelihood evaluation.
//!
//! For subject `i` the hazard is `h0(t) exp(x_i'beta + sum_r gamma_r z_ir(t))`
//! with `h0(t) = sum_u theta_u psi_u(t)` and the modelled trajectory
//! `z_ir(t) = phi_r(t)'alpha_r + xi_r(t)'kappa_ir`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::{composite_rule, default_basis_size, default_knots, BasisFamily, BasisSet, NODES_PER_SEGMENT};
use crate::data::{CensoringStatus, Dataset};
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Columns `w * phi_j(t)` for the first `n_basis` time-basis functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    /// Index into the subject's baseline covariates `w`.
    pub covariate: usize,
    pub n_basis: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalSpec {
    pub name: String,
    pub time_basis: BasisSet,
    #[serde(default)]
    pub interactions: Vec<Interaction>,
    pub random_basis: BasisSet,
    /// Roughness penalty on the time-basis coefficients.
    #[serde(default)]
    pub penalized: bool,
}

impl LongitudinalSpec {
    pub fn fixed_size(&self) -> usize {
        self.time_basis.size() + self.interactions.iter().map(|i| i.n_basis).sum::<usize>()
    }

    pub fn random_size(&self) -> usize {
        self.random_basis.size()
    }

    /// Fixed-design row: time basis then interaction columns.
    pub fn fixed_row(&self, t: f64, w: &[f64]) -> Result<Vec<f64>> {
        let phi = self.time_basis.eval(t)?;
        let mut row = phi.clone();
        for int in &self.interactions {
            let wv = *w.get(int.covariate).ok_or_else(|| {
                Error::Dimension(format!("interaction covariate {} is out of range", int.covariate))
            })?;
            row.extend(phi[..int.n_basis].iter().map(|v| wv * v));
        }
        Ok(row)
    }

    pub fn random_row(&self, t: f64) -> Result<Vec<f64>> {
        self.random_basis.eval(t)
    }

    /// Penalty over the full fixed block; zero outside the time-basis part.
    pub fn penalty(&self) -> DMatrix<f64> {
        let b = self.fixed_size();
        let mut out = DMatrix::zeros(b, b);
        if self.penalized {
            let r = self.time_basis.penalty_matrix().matrix;
            out.view_mut((0, 0), (r.nrows(), r.ncols())).copy_from(&r);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub baseline: BasisSet,
    pub p: usize,
    pub pw: usize,
    pub longitudinal: Vec<LongitudinalSpec>,
}

impl ModelSpec {
    pub fn q(&self) -> usize {
        self.longitudinal.len()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(
            self.p,
            self.baseline.size(),
            self.longitudinal.iter().map(|l| l.fixed_size()).collect(),
            self.longitudinal.iter().map(|l| l.random_size()).collect(),
        )
    }

    pub fn check(&self, ds: &Dataset) -> Result<()> {
        if !self.baseline.is_nonnegative() {
            return Err(Error::Basis("baseline basis must be non-negative".into()));
        }
        if ds.p != self.p || ds.pw != self.pw || ds.q != self.q() {
            return Err(Error::Dimension(format!(
                "model expects (p, q, pw) = ({}, {}, {}), data has ({}, {}, {})",
                self.p,
                self.q(),
                self.pw,
                ds.p,
                ds.q,
                ds.pw
            )));
        }
        for l in &self.longitudinal {
            for int in &l.interactions {
                if int.covariate >= self.pw || int.n_basis > l.time_basis.size() {
                    return Err(Error::Dimension(format!("bad interaction in `{}`", l.name)));
                }
            }
        }
        Ok(())
    }

    /// Every knot of every basis, for splitting quadrature panels.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.baseline.breakpoints().to_vec();
        for l in &self.longitudinal {
            out.extend_from_slice(l.time_basis.breakpoints());
            out.extend_from_slice(l.random_basis.breakpoints());
        }
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    /// Builds the concrete bases for a dataset.
    pub fn from_config(cfg: &ModelConfig, ds: &Dataset) -> Result<Self> {
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Validation(format!("unsupported model schema version {}", cfg.schema_version)));
        }
        let mut ends: Vec<f64> = ds.finite_endpoints().into_iter().filter(|&t| t > 0.0).collect();
        if ends.is_empty() {
            return Err(Error::Validation("no positive event or censoring times".into()));
        }
        ends.sort_by(f64::total_cmp);
        let upper = *ends.last().unwrap();
        let bl = &cfg.baseline;
        let baseline = match bl.family {
            BaselineFamily::Mspline => {
                let family = BasisFamily::Mspline { order: bl.order };
                match &bl.interior_knots {
                    Some(inner) => {
                        let mut knots = vec![0.0];
                        knots.extend(inner.iter().copied());
                        knots.push(upper);
                        BasisSet::new(family, knots)?
                    }
                    None => {
                        let m = bl.n_basis.unwrap_or_else(|| default_basis_size(ds.n0(), bl.order));
                        let mut pts = ends.clone();
                        pts.push(0.0);
                        default_knots(&pts, m, family)?
                    }
                }
            }
            BaselineFamily::Indicator => {
                let cells = bl.n_basis.unwrap_or_else(|| default_basis_size(ds.n0(), 1));
                let mut knots = vec![0.0];
                for j in 1..cells {
                    knots.push(crate::basis::quantile(&ends, j as f64 / cells as f64));
                }
                knots.push(upper);
                knots.dedup();
                BasisSet::indicator(knots)?
            }
        };
        if ds.q != cfg.longitudinal.len() {
            return Err(Error::Dimension(format!(
                "model lists {} longitudinal columns, data has {}",
                cfg.longitudinal.len(),
                ds.q
            )));
        }
        let mut longitudinal = Vec::new();
        for (r, lc) in cfg.longitudinal.iter().enumerate() {
            if ds.z_names.get(r) != Some(&lc.column) {
                return Err(Error::Dimension(format!(
                    "longitudinal column `{}` does not match data column {r}",
                    lc.column
                )));
            }
            let interactions = lc
                .interactions
                .iter()
                .map(|ic| {
                    let covariate = ds
                        .w_names
                        .iter()
                        .position(|n| *n == ic.covariate)
                        .ok_or_else(|| Error::Validation(format!("unknown baseline covariate `{}`", ic.covariate)))?;
                    Ok(Interaction { covariate, n_basis: ic.n_basis })
                })
                .collect::<Result<Vec<_>>>()?;
            longitudinal.push(LongitudinalSpec {
                name: lc.column.clone(),
                time_basis: lc.time_basis.build(upper)?,
                interactions,
                random_basis: lc.random_basis.build(upper)?,
                penalized: lc.penalized,
            });
        }
        let spec = ModelSpec { baseline, p: ds.p, pw: ds.pw, longitudinal };
        spec.check(ds)?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineFamily {
    Mspline,
    Indicator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub family: BaselineFamily,
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default)]
    pub n_basis: Option<usize>,
    #[serde(default)]
    pub interior_knots: Option<Vec<f64>>,
}

fn default_order() -> usize {
    4
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { family: BaselineFamily::Mspline, order: default_order(), n_basis: None, interior_knots: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TimeBasisConfig {
    Polynomial {
        degree: usize,
    },
    Bspline {
        #[serde(default = "default_order")]
        order: usize,
        #[serde(default)]
        interior_knots: Vec<f64>,
    },
}

impl TimeBasisConfig {
    pub fn build(&self, upper: f64) -> Result<BasisSet> {
        match self {
            TimeBasisConfig::Polynomial { degree } => BasisSet::polynomial(*degree, 0.0, upper),
            TimeBasisConfig::Bspline { order, interior_knots } => {
                let mut knots = vec![0.0];
                knots.extend(interior_knots.iter().copied().filter(|&k| k > 0.0 && k < upper));
                knots.push(upper);
                BasisSet::bspline(*order, knots)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionConfig {
    pub covariate: String,
    pub n_basis: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalConfig {
    pub column: String,
    pub time_basis: TimeBasisConfig,
    #[serde(default)]
    pub interactions: Vec<InteractionConfig>,
    pub random_basis: TimeBasisConfig,
    #[serde(default)]
    pub penalized: bool,
}

/// The model specification document read by the command line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub cox_covariates: Vec<String>,
    #[serde(default)]
    pub long_covariates: Vec<String>,
    pub longitudinal: Vec<LongitudinalConfig>,
}

/// Positions of the parameter blocks.
///
/// `zeta = [beta | gamma | theta | alpha]` is shared by all subjects; the
/// local vector of subject `i` is `[zeta | kappa_i]`. Cached designs use the
/// order `[psi | phi_1 .. phi_q | xi_1 .. xi_q]`, so the design index of a
/// theta, alpha or kappa entry is its local index minus `p + q`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub p: usize,
    pub q: usize,
    pub m: usize,
    pub b: Vec<usize>,
    pub c: Vec<usize>,
    pub a_off: Vec<usize>,
    pub k_off: Vec<usize>,
    pub n_alpha: usize,
    pub n_kappa: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Beta(usize),
    Gamma(usize),
    Theta(usize),
    Alpha(usize, usize),
    Kappa(usize, usize),
}

impl Layout {
    pub fn new(p: usize, m: usize, b: Vec<usize>, c: Vec<usize>) -> Self {
        let offsets = |v: &[usize]| {
            let mut acc = 0;
            v.iter()
                .map(|&x| {
                    let o = acc;
                    acc += x;
                    o
                })
                .collect::<Vec<_>>()
        };
        let a_off = offsets(&b);
        let k_off = offsets(&c);
        Self { p, q: b.len(), m, n_alpha: b.iter().sum(), n_kappa: c.iter().sum(), b, c, a_off, k_off }
    }

    pub fn dzeta(&self) -> usize {
        self.p + self.q + self.m + self.n_alpha
    }

    pub fn dlocal(&self) -> usize {
        self.dzeta() + self.n_kappa
    }

    pub fn design_len(&self) -> usize {
        self.m + self.n_alpha + self.n_kappa
    }

    pub fn beta(&self) -> std::ops::Range<usize> {
        0..self.p
    }

    pub fn gamma(&self) -> std::ops::Range<usize> {
        self.p..self.p + self.q
    }

    pub fn theta(&self) -> std::ops::Range<usize> {
        let s = self.p + self.q;
        s..s + self.m
    }

    pub fn alpha(&self) -> std::ops::Range<usize> {
        let s = self.p + self.q + self.m;
        s..s + self.n_alpha
    }

    pub fn alpha_r(&self, r: usize) -> std::ops::Range<usize> {
        let s = self.alpha().start + self.a_off[r];
        s..s + self.b[r]
    }

    /// Local kappa indices.
    pub fn kappa(&self) -> std::ops::Range<usize> {
        self.dzeta()..self.dlocal()
    }

    pub fn kappa_r(&self, r: usize) -> std::ops::Range<usize> {
        let s = self.dzeta() + self.k_off[r];
        s..s + self.c[r]
    }

    /// Design positions of `phi_r` and `xi_r`.
    pub fn phi_span(&self, r: usize) -> std::ops::Range<usize> {
        let s = self.m + self.a_off[r];
        s..s + self.b[r]
    }

    pub fn xi_span(&self, r: usize) -> std::ops::Range<usize> {
        let s = self.m + self.n_alpha + self.k_off[r];
        s..s + self.c[r]
    }

    pub fn slot(&self, local: usize) -> Slot {
        let (p, q, m) = (self.p, self.q, self.m);
        if local < p {
            Slot::Beta(local)
        } else if local < p + q {
            Slot::Gamma(local - p)
        } else if local < p + q + m {
            Slot::Theta(local - p - q)
        } else if local < self.dzeta() {
            let a = local - p - q - m;
            let r = (0..q).rev().find(|&r| self.a_off[r] <= a).unwrap();
            Slot::Alpha(r, a - self.a_off[r])
        } else {
            let k = local - self.dzeta();
            let r = (0..q).rev().find(|&r| self.k_off[r] <= k).unwrap();
            Slot::Kappa(r, k - self.k_off[r])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// One row of `sum_r c_r` coefficients per subject.
    pub kappa: Vec<Vec<f64>>,
}

impl ParameterState {
    pub fn zeros(layout: &Layout, n: usize) -> Self {
        Self {
            beta: vec![0.0; layout.p],
            gamma: vec![0.0; layout.q],
            theta: vec![0.0; layout.m],
            alpha: vec![0.0; layout.n_alpha],
            kappa: vec![vec![0.0; layout.n_kappa]; n],
        }
    }

    pub fn zeta(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.beta.len() + self.gamma.len() + self.theta.len() + self.alpha.len());
        z.extend_from_slice(&self.beta);
        z.extend_from_slice(&self.gamma);
        z.extend_from_slice(&self.theta);
        z.extend_from_slice(&self.alpha);
        z
    }

    pub fn set_zeta(&mut self, z: &[f64]) {
        let (p, q, m) = (self.beta.len(), self.gamma.len(), self.theta.len());
        self.beta.copy_from_slice(&z[..p]);
        self.gamma.copy_from_slice(&z[p..p + q]);
        self.theta.copy_from_slice(&z[p + q..p + q + m]);
        self.alpha.copy_from_slice(&z[p + q + m..]);
    }

    pub fn check(&self, layout: &Layout, n: usize) -> Result<()> {
        let ok = self.beta.len() == layout.p
            && self.gamma.len() == layout.q
            && self.theta.len() == layout.m
            && self.alpha.len() == layout.n_alpha
            && self.kappa.len() == n
            && self.kappa.iter().all(|k| k.len() == layout.n_kappa);
        if !ok {
            return Err(Error::Dimension("parameter state does not match the model".into()));
        }
        if self.theta.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::Validation("theta must be non-negative".into()));
        }
        Ok(())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let pairs = self
            .zeta()
            .into_iter()
            .zip(other.zeta())
            .chain(self.kappa.iter().flatten().copied().zip(other.kappa.iter().flatten().copied()));
        pairs.map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma_eps2: f64,
    pub sigma_theta2: f64,
    /// One per longitudinal covariate.
    pub sigma_alpha2: Vec<f64>,
    /// `sigma_kappa2[r][l]` for random-basis function `l` of covariate `r`.
    pub sigma_kappa2: Vec<Vec<f64>>,
}

impl VarianceComponents {
    pub fn lambda_theta(&self) -> f64 {
        0.5 / self.sigma_theta2
    }

    pub fn lambda_alpha(&self, r: usize) -> f64 {
        0.5 / self.sigma_alpha2[r]
    }

    /// Random-effect variances in local kappa order.
    pub fn kappa_flat(&self) -> Vec<f64> {
        self.sigma_kappa2.iter().flatten().copied().collect()
    }

    pub fn check(&self) -> Result<()> {
        let all = [self.sigma_eps2, self.sigma_theta2]
            .into_iter()
            .chain(self.sigma_alpha2.iter().copied())
            .chain(self.sigma_kappa2.iter().flatten().copied());
        for v in all {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Validation(format!("variance component {v} is not strictly positive")));
            }
        }
        Ok(())
    }
}

/// Quadrature nodes with their cached design rows.
#[derive(Debug, Clone, Default)]
pub(crate) struct Nodes {
    pub weights: Vec<f64>,
    pub design: Vec<f64>,
}


#[derive(Debug, Clone)]
pub(crate) struct Record {
    pub design: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct SubjectCache {
    pub status: CensoringStatus,
    pub x: Vec<f64>,
    pub w: Vec<f64>,
    /// Crude time at risk: the event or censoring time, or the midpoint of
    /// the censoring window.
    pub exposure: f64,
    /// Nodes over `[0, t_left]`.
    pub left: Nodes,
    /// Nodes over `[t_left, t_right]` when `t_right` is finite.
    pub right: Nodes,
    /// Design at the event time for exact observations.
    pub event: Option<Vec<f64>>,
    pub records: Vec<Record>,
}

/// A model bound to a dataset, with per-subject quadrature caches.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub(crate) subjects: Vec<SubjectCache>,
    pub r_theta: DMatrix<f64>,
    pub r_alpha: Vec<DMatrix<f64>>,
    /// Count of scalar longitudinal measurements.
    pub n_meas: usize,
    breaks: Vec<f64>,
}

/// `ln(1 - exp(-d))` for `d > 0`.
pub fn log1m_exp_neg(d: f64) -> f64 {
    if d <= 0.0 {
        f64::NEG_INFINITY
    } else if d < std::f64::consts::LN_2 {
        (-(-d).exp_m1()).ln()
    } else {
        (-(-d).exp()).ln_1p()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl JointModel {
    pub fn new(spec: ModelSpec, ds: &Dataset) -> Result<Self> {
        spec.check(ds)?;
        let layout = spec.layout();
        let breaks = spec.breakpoints();
        let mut model = Self {
            r_theta: spec.baseline.penalty_matrix().matrix,
            r_alpha: spec.longitudinal.iter().map(|l| l.penalty()).collect(),
            n_meas: ds.n_measurements(),
            subjects: Vec::with_capacity(ds.n()),
            layout,
            spec,
            breaks,
        };
        for s in &ds.subjects {
            let left = model.nodes(0.0, s.t_left, &s.w)?;
            let right = if s.t_right.is_finite() && s.t_right > s.t_left {
                model.nodes(s.t_left, s.t_right, &s.w)?
            } else {
                Nodes::default()
            };
            let event = if s.status == CensoringStatus::Exact { Some(model.design(s.t_left, &s.w)?) } else { None };
            let records = s
                .longitudinal
                .iter()
                .map(|r| Ok(Record { design: model.design(r.time, &s.w)?, y: r.values.clone() }))
                .collect::<Result<Vec<_>>>()?;
            model.subjects.push(SubjectCache {
                status: s.status,
                exposure: if s.t_right.is_finite() { 0.5 * (s.t_left + s.t_right) } else { s.t_left },
                x: s.x.clone(),
                w: s.w.clone(),
                left,
                right,
                event,
                records,
            });
        }
        Ok(model)
    }

    /// A model without data, for evaluating fitted curves.
    pub fn predictor(spec: ModelSpec) -> Self {
        let layout = spec.layout();
        let breaks = spec.breakpoints();
        Self {
            r_theta: spec.baseline.penalty_matrix().matrix,
            r_alpha: spec.longitudinal.iter().map(|l| l.penalty()).collect(),
            n_meas: 0,
            subjects: Vec::new(),
            layout,
            spec,
            breaks,
        }
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    /// Design row `[psi | phi | xi]` at time `t` for baseline covariates `w`.
    pub fn design(&self, t: f64, w: &[f64]) -> Result<Vec<f64>> {
        let mut d = Vec::with_capacity(self.layout.design_len());
        d.extend(self.spec.baseline.eval(t)?);
        for l in &self.spec.longitudinal {
            d.extend(l.fixed_row(t, w)?);
        }
        for l in &self.spec.longitudinal {
            d.extend(l.random_row(t)?);
        }
        Ok(d)
    }

    pub(crate) fn nodes(&self, a: f64, b: f64, w: &[f64]) -> Result<Nodes> {
        if !(b > a) {
            return Ok(Nodes::default());
        }
        let rule = composite_rule(a, b, &self.breaks, NODES_PER_SEGMENT)?;
        let mut design = Vec::with_capacity(rule.nodes.len() * self.layout.design_len());
        for &s in &rule.nodes {
            design.extend(self.design(s, w)?);
        }
        Ok(Nodes { weights: rule.weights, design })
    }

    pub fn check_state(&self, state: &ParameterState) -> Result<()> {
        state.check(&self.layout, self.n())
    }

    /// `z_r` for a design row given `zeta` and a kappa row.
    pub(crate) fn traj(&self, d: &[f64], zeta: &[f64], kappa: &[f64], r: usize) -> f64 {
        let ly = &self.layout;
        let a = &zeta[ly.alpha_r(r)];
        let k = &kappa[ly.k_off[r]..ly.k_off[r] + ly.c[r]];
        dot(a, &d[ly.phi_span(r)]) + dot(k, &d[ly.xi_span(r)])
    }

    /// Linear predictor and baseline hazard at a design row.
    pub(crate) fn eta_h0(&self, d: &[f64], x: &[f64], zeta: &[f64], kappa: &[f64]) -> (f64, f64) {
        let ly = &self.layout;
        let mut eta = dot(x, &zeta[ly.beta()]);
        for r in 0..ly.q {
            eta += zeta[ly.gamma()][r] * self.traj(d, zeta, kappa, r);
        }
        (eta, dot(&zeta[ly.theta()], &d[..ly.m]))
    }

    pub(crate) fn integral(&self, nodes: &Nodes, x: &[f64], zeta: &[f64], kappa: &[f64]) -> f64 {
        let len = self.layout.design_len();
        let mut h = 0.0;
        for (k, &w) in nodes.weights.iter().enumerate() {
            let d = &nodes.design[k * len..(k + 1) * len];
            let (eta, h0) = self.eta_h0(d, x, zeta, kappa);
            if h0 != 0.0 {
                h += w * h0 * eta.exp();
            }
        }
        h
    }

    /// Survival part `l_i` of the log-likelihood.
    pub(crate) fn subject_surv(&self, i: usize, zeta: &[f64], kappa: &[f64]) -> f64 {
        let s = &self.subjects[i];
        let h_left = self.integral(&s.left, &s.x, zeta, kappa);
        match s.status {
            CensoringStatus::Exact => {
                let d = s.event.as_ref().unwrap();
                let (eta, h0) = self.eta_h0(d, &s.x, zeta, kappa);
                h0.ln() + eta - h_left
            }
            CensoringStatus::Right => -h_left,
            CensoringStatus::Left | CensoringStatus::Interval => {
                let delta = self.integral(&s.right, &s.x, zeta, kappa);
                -h_left + log1m_exp_neg(delta)
            }
        }
    }

    /// Longitudinal Gaussian term without its normalising constant.
    pub(crate) fn subject_long(&self, i: usize, zeta: &[f64], kappa: &[f64], sigma_eps2: f64) -> f64 {
        let mut ss = 0.0;
        for rec in &self.subjects[i].records {
            for r in 0..self.layout.q {
                let e = rec.y[r] - self.traj(&rec.design, zeta, kappa, r);
                ss += e * e;
            }
        }
        -0.5 * ss / sigma_eps2
    }

    pub(crate) fn subject_prior(&self, kappa: &[f64], sk: &[f64]) -> f64 {
        -0.5 * kappa.iter().zip(sk).map(|(k, s)| k * k / s).sum::<f64>()
    }

    /// All terms of the objective that involve subject `i`.
    pub fn subject_objective(&self, i: usize, zeta: &[f64], kappa: &[f64], var: &VarianceComponents) -> f64 {
        self.subject_surv(i, zeta, kappa)
            + self.subject_long(i, zeta, kappa, var.sigma_eps2)
            + self.subject_prior(kappa, &var.kappa_flat())
    }

    /// Residual sum of squares of the longitudinal fit.
    pub fn residual_ss(&self, state: &ParameterState) -> f64 {
        let zeta = state.zeta();
        (0..self.n()).map(|i| -2.0 * self.subject_long(i, &zeta, &state.kappa[i], 1.0)).sum()
    }

    /// Sum of the survival terms only.
    pub fn survival_loglik(&self, state: &ParameterState) -> f64 {
        let zeta = state.zeta();
        (0..self.n()).map(|i| self.subject_surv(i, &zeta, &state.kappa[i])).sum()
    }

    pub fn log_likelihood(&self, state: &ParameterState, var: &VarianceComponents) -> f64 {
        let zeta = state.zeta();
        let sk = var.kappa_flat();
        let mut total = 0.0;
        for i in 0..self.n() {
            total += self.subject_surv(i, &zeta, &state.kappa[i])
                + self.subject_long(i, &zeta, &state.kappa[i], var.sigma_eps2)
                + self.subject_prior(&state.kappa[i], &sk);
        }
        total - 0.5 * self.n_meas as f64 * var.sigma_eps2.ln()
            - 0.5 * self.n() as f64 * sk.iter().map(|s| s.ln()).sum::<f64>()
    }

    /// `theta'R theta / (2 sigma_theta^2) + sum_r alpha_r'R_r alpha_r / (2 sigma_alpha_r^2)`.
    pub fn penalty(&self, state: &ParameterState, var: &VarianceComponents) -> f64 {
        let quad = |m: &DMatrix<f64>, v: &[f64]| {
            let v = nalgebra::DVector::from_column_slice(v);
            (v.transpose() * m * &v)[(0, 0)]
        };
        let mut pen = var.lambda_theta() * quad(&self.r_theta, &state.theta);
        for r in 0..self.layout.q {
            let a = &state.alpha[self.layout.a_off[r]..self.layout.a_off[r] + self.layout.b[r]];
            pen += var.lambda_alpha(r) * quad(&self.r_alpha[r], a);
        }
        pen
    }

    pub fn penalised_objective(&self, state: &ParameterState, var: &VarianceComponents) -> f64 {
        let v = self.log_likelihood(state, var) - self.penalty(state, var);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    pub fn trajectory(&self, state: &ParameterState, i: usize, r: usize, t: f64) -> Result<f64> {
        let s = self.subject(i)?;
        if r >= self.layout.q {
            return Err(Error::Dimension(format!("covariate index {r} out of range")));
        }
        let d = self.design(t, &s.w)?;
        Ok(self.traj(&d, &state.zeta(), &state.kappa[i], r))
    }

    fn subject(&self, i: usize) -> Result<&SubjectCache> {
        self.subjects.get(i).ok_or_else(|| Error::Dimension(format!("subject index {i} out of range")))
    }

    pub fn hazard(&self, state: &ParameterState, i: usize, t: f64) -> Result<f64> {
        let s = self.subject(i)?;
        let d = self.design(t, &s.w)?;
        let (eta, h0) = self.eta_h0(&d, &s.x, &state.zeta(), &state.kappa[i]);
        Ok(h0 * eta.exp())
    }

    pub fn cumulative_hazard(&self, state: &ParameterState, i: usize, t: f64) -> Result<f64> {
        let s = self.subject(i)?;
        self.cumulative_hazard_for(&state.zeta(), &s.x, &s.w, &state.kappa[i], t)
    }

    /// Cumulative hazard for arbitrary covariates and random effects.
    pub fn cumulative_hazard_for(&self, zeta: &[f64], x: &[f64], w: &[f64], kappa: &[f64], t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("time {t} is negative")));
        }
        let nodes = self.nodes(0.0, t, w)?;
        Ok(self.integral(&nodes, x, zeta, kappa))
    }

    /// Cumulative hazard and its gradient with respect to zeta.
    pub fn cumulative_hazard_grad(
        &self,
        zeta: &[f64],
        x: &[f64],
        w: &[f64],
        kappa: &[f64],
        t: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("time {t} is negative")));
        }
        let ly = &self.layout;
        let nodes = self.nodes(0.0, t, w)?;
        let len = ly.design_len();
        let mut h = 0.0;
        let mut g = vec![0.0; ly.dzeta()];
        for (k, &wt) in nodes.weights.iter().enumerate() {
            let d = &nodes.design[k * len..(k + 1) * len];
            let (eta, h0) = self.eta_h0(d, x, zeta, kappa);
            let e = eta.exp();
            let f = wt * h0 * e;
            h += f;
            for (j, xj) in x.iter().enumerate() {
                g[ly.beta().start + j] += f * xj;
            }
            for (u, psi) in d[..ly.m].iter().enumerate() {
                g[ly.theta().start + u] += wt * psi * e;
            }
            for r in 0..ly.q {
                g[ly.gamma().start + r] += f * self.traj(d, zeta, kappa, r);
                let gam = zeta[ly.gamma().start + r];
                for (a, phi) in ly.alpha_r(r).zip(&d[ly.phi_span(r)]) {
                    g[a] += f * gam * phi;
                }
            }
        }
        Ok((h, g))
    }

    /// Cumulative hazard and its gradient over (beta, gamma, theta) for a
    /// supplied trajectory `z(t)` (one value per longitudinal covariate).
    pub fn cumulative_hazard_custom(
        &self,
        zeta: &[f64],
        x: &[f64],
        z: &dyn Fn(f64) -> Vec<f64>,
        t: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("time {t} is negative")));
        }
        let ly = &self.layout;
        let mut h = 0.0;
        let mut g = vec![0.0; ly.dzeta()];
        if t == 0.0 {
            return Ok((h, g));
        }
        let rule = composite_rule(0.0, t, &self.breaks, NODES_PER_SEGMENT)?;
        for (&s, &wt) in rule.nodes.iter().zip(&rule.weights) {
            let psi = self.spec.baseline.eval(s)?;
            let zs = z(s);
            if zs.len() != ly.q {
                return Err(Error::Dimension(format!("trajectory returned {} values, expected {}", zs.len(), ly.q)));
            }
            let eta = dot(x, &zeta[ly.beta()]) + dot(&zeta[ly.gamma()], &zs);
            let e = eta.exp();
            let f = wt * dot(&zeta[ly.theta()], &psi) * e;
            h += f;
            for (j, xj) in x.iter().enumerate() {
                g[ly.beta().start + j] += f * xj;
            }
            for (r, zr) in zs.iter().enumerate() {
                g[ly.gamma().start + r] += f * zr;
            }
            for (u, p) in psi.iter().enumerate() {
                g[ly.theta().start + u] += wt * p * e;
            }
        }
        Ok((h, g))
    }

    /// Trajectory of covariate `r` at `t` for given `w` and random effects.
    pub fn mean_trajectory(&self, zeta: &[f64], w: &[f64], kappa: &[f64], r: usize, t: f64) -> Result<f64> {
        if r >= self.layout.q {
            return Err(Error::Dimension(format!("covariate index {r} out of range")));
        }
        let d = self.design(t, w)?;
        Ok(self.traj(&d, zeta, kappa, r))
    }

    pub fn subject_covariates(&self, i: usize) -> Result<(&[f64], &[f64])> {
        let s = self.subject(i)?;
        Ok((&s.x, &s.w))
    }

    pub fn survival(&self, state: &ParameterState, i: usize, t: f64) -> Result<f64> {
        Ok((-self.cumulative_hazard(state, i, t)?).exp())
    }

    pub fn baseline_hazard(&self, theta: &[f64], t: f64) -> Result<f64> {
        Ok(dot(theta, &self.spec.baseline.eval(t)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LongRecord, Subject};

    fn one_z_spec(baseline: BasisSet, p: usize, upper: f64) -> ModelSpec {
        ModelSpec {
            baseline,
            p,
            pw: 0,
            longitudinal: vec![LongitudinalSpec {
                name: "z1".into(),
                time_basis: BasisSet::polynomial(3, 0.0, upper).unwrap(),
                interactions: vec![],
                random_basis: BasisSet::polynomial(1, 0.0, upper).unwrap(),
                penalized: false,
            }],
        }
    }

    fn var1() -> VarianceComponents {
        VarianceComponents {
            sigma_eps2: 1.0,
            sigma_theta2: 1.0,
            sigma_alpha2: vec![1.0],
            sigma_kappa2: vec![vec![1.0, 1.0]],
        }
    }

    #[test]
    fn study1_trajectory_at_one() {
        let spec = one_z_spec(BasisSet::indicator(vec![0.0, 2.0]).unwrap(), 0, 2.0);
        let s = Subject::new("a", 2.0, f64::INFINITY, vec![], vec![], vec![]).unwrap();
        let ds = Dataset::new(vec![s], vec![], vec!["z1".into()], vec![]);
        let model = JointModel::new(spec, &ds).unwrap();
        let mut st = ParameterState::zeros(&model.layout, 1);
        assert_eq!(model.trajectory(&st, 0, 0, 1.0).unwrap(), 0.0);
        st.alpha = vec![0.5, -0.5, 1.0, -0.5];
        assert!((model.trajectory(&st, 0, 0, 1.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cumulative_hazard_closed_forms() {
        let spec = one_z_spec(BasisSet::indicator(vec![0.0, 1.0]).unwrap(), 0, 1.0);
        let s = Subject::new("a", 1.0, f64::INFINITY, vec![], vec![], vec![]).unwrap();
        let ds = Dataset::new(vec![s], vec![], vec!["z1".into()], vec![]);
        let model = JointModel::new(spec, &ds).unwrap();
        let mut st = ParameterState::zeros(&model.layout, 1);
        st.theta = vec![2.0];
        assert_eq!(model.cumulative_hazard(&st, 0, 0.0).unwrap(), 0.0);
        assert!((model.cumulative_hazard(&st, 0, 0.7).unwrap() - 1.4).abs() < 1e-14);
        // z(s) = s, gamma = 0.5, h0 = 1
        st.theta = vec![1.0];
        st.gamma = vec![0.5];
        st.alpha = vec![0.0, 1.0, 0.0, 0.0];
        let h = model.cumulative_hazard(&st, 0, 1.0).unwrap();
        let exact = (0.5f64.exp() - 1.0) / 0.5;
        assert!(((h - exact) / exact).abs() < 1e-12, "{h} vs {exact}");
        let surv = model.survival(&st, 0, 1.0).unwrap();
        assert_eq!(surv, (-h).exp());
    }

    #[test]
    fn exponential_log_density() {
        let spec = ModelSpec {
            baseline: BasisSet::indicator(vec![0.0, 3.0]).unwrap(),
            p: 0,
            pw: 0,
            longitudinal: vec![],
        };
        let s = Subject::new("a", 3.0, 3.0, vec![], vec![], vec![]).unwrap();
        let ds = Dataset::new(vec![s], vec![], vec![], vec![]);
        let model = JointModel::new(spec, &ds).unwrap();
        let mut st = ParameterState::zeros(&model.layout, 1);
        st.theta = vec![0.4];
        let var = VarianceComponents { sigma_eps2: 1.0, sigma_theta2: 1.0, sigma_alpha2: vec![], sigma_kappa2: vec![] };
        let l = model.log_likelihood(&st, &var);
        assert!((l - (0.4f64.ln() - 1.2)).abs() < 1e-14);
        // indicator basis has no roughness penalty
        assert_eq!(model.penalised_objective(&st, &var), l);
    }

    #[test]
    fn right_censored_without_hazard_is_zero() {
        let spec = one_z_spec(BasisSet::indicator(vec![0.0, 5.0]).unwrap(), 0, 5.0);
        let s = Subject::new("a", 5.0, f64::INFINITY, vec![], vec![], vec![]).unwrap();
        let ds = Dataset::new(vec![s], vec![], vec!["z1".into()], vec![]);
        let model = JointModel::new(spec, &ds).unwrap();
        let st = ParameterState::zeros(&model.layout, 1);
        assert_eq!(model.log_likelihood(&st, &var1()), 0.0);
    }

    #[test]
    fn narrow_intervals_stay_finite_and_monotone() {
        let spec = one_z_spec(BasisSet::indicator(vec![0.0, 2.0]).unwrap(), 0, 2.0);
        let mut prev = f64::NEG_INFINITY;
        for k in (0..=8).rev() {
            let width = 10f64.powi(-k);
            let s = Subject::new("a", 1.0, 1.0 + width, vec![], vec![], vec![LongRecord { time: 0.0, values: vec![0.0] }])
                .unwrap();
            let ds = Dataset::new(vec![s], vec![], vec!["z1".into()], vec![]);
            let model = JointModel::new(spec.clone(), &ds).unwrap();
            let mut st = ParameterState::zeros(&model.layout, 1);
            st.theta = vec![0.8];
            let l = model.subject_surv(0, &st.zeta(), &st.kappa[0]);
            let actual = (1.0 + width) - 1.0;
            let exact = -0.8 + (-(-0.8 * actual).exp_m1()).ln();
            assert!(l.is_finite());
            assert!(((l - exact) / exact).abs() < 1e-10, "{width}: {l} vs {exact}");
            assert!(l > prev);
            prev = l;
        }
    }

    #[test]
    fn log1m_exp_branches_agree() {
        for d in [1e-12f64, 1e-3, 0.5, 0.69, 0.7, 3.0, 50.0] {
            let direct = if d < 1e-3 {
                // series of ln((1 - e^-d) / d)
                d.ln() + (-d / 2.0 + d * d / 6.0 - d * d * d / 24.0).ln_1p()
            } else {
                (1.0 - (-d as f64).exp()).ln()
            };
            let v = log1m_exp_neg(d);
            assert!((v - direct).abs() <= 1e-9 * direct.abs().max(1.0), "{d}");
        }
        assert_eq!(log1m_exp_neg(0.0), f64::NEG_INFINITY);
    }

    #[test]
    fn layout_slots_round_trip() {
        let ly = Layout::new(2, 3, vec![4, 2], vec![2, 1]);
        assert_eq!(ly.dzeta(), 2 + 2 + 3 + 6);
        assert_eq!(ly.slot(0), Slot::Beta(0));
        assert_eq!(ly.slot(3), Slot::Gamma(1));
        assert_eq!(ly.slot(4), Slot::Theta(0));
        assert_eq!(ly.slot(ly.alpha_r(1).start), Slot::Alpha(1, 0));
        assert_eq!(ly.slot(ly.kappa_r(1).start), Slot::Kappa(1, 0));
        assert_eq!(ly.phi_span(1), 3 + 4..3 + 6);
        assert_eq!(ly.xi_span(1), 3 + 6 + 2..3 + 6 + 3);
    }
}
