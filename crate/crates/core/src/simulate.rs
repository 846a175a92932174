//! Seeded data generators for the four simulation designs.
//!
//! Every subject draws from its own ChaCha stream selected by its index, so
//! a dataset is a pure function of the scenario and does not depend on how
//! generation is scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, LogNormal};

use crate::basis::gauss_legendre;
use crate::data::{Dataset, LongRecord, Subject};
use crate::error::{Error, Result};
use crate::model::{
    BaselineConfig, InteractionConfig, LongitudinalConfig, ModelConfig, TimeBasisConfig, SCHEMA_VERSION,
};

/// Seed of the pilot sample used to calibrate censoring.
pub const PILOT_SEED: u64 = 0x5EED_CA1B;
pub const PILOT_SIZE: usize = 50_000;
/// Event times beyond this horizon are treated as never occurring.
pub const T_MAX: f64 = 20.0;
const PANEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Design {
    Study1,
    Study2a,
    Study2b,
    Study2c,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub design: Design,
    pub n: usize,
    #[serde(default = "default_mean_ni")]
    pub mean_ni: f64,
    /// Measurement-error standard deviation; design default when absent.
    #[serde(default)]
    pub sigma_eps: Option<f64>,
    pub seed: u64,
    /// Target proportion of exact event times.
    #[serde(default)]
    pub pi_e: Option<f64>,
    /// Target right- and left-censored proportions (Studies 2a and 2c).
    #[serde(default)]
    pub pi_r: Option<f64>,
    #[serde(default)]
    pub pi_l: Option<f64>,
    /// Censoring scale for Study 1: `c ~ Unif[0.5 s, 1.5 s]`.
    #[serde(default)]
    pub censor_scale: Option<f64>,
    #[serde(default)]
    pub tau_l: Option<f64>,
    #[serde(default)]
    pub tau_r: Option<f64>,
    /// Overrides of the true Cox coefficients.
    #[serde(default)]
    pub beta: Option<Vec<f64>>,
    #[serde(default)]
    pub gamma: Option<f64>,
}

fn default_mean_ni() -> f64 {
    5.0
}

impl SimScenario {
    pub fn new(design: Design, n: usize, seed: u64) -> Self {
        Self {
            design,
            n,
            mean_ni: default_mean_ni(),
            sigma_eps: None,
            seed,
            pi_e: None,
            pi_r: None,
            pi_l: None,
            censor_scale: None,
            tau_l: None,
            tau_r: None,
            beta: None,
            gamma: None,
        }
    }

    pub fn pi_e(&self) -> f64 {
        self.pi_e.unwrap_or(match self.design {
            Design::Study1 => 0.7,
            _ => 0.0,
        })
    }

    pub fn pi_r(&self) -> f64 {
        self.pi_r.unwrap_or(match self.design {
            Design::Study2c => 0.25,
            _ => 0.3,
        })
    }

    pub fn pi_l(&self) -> f64 {
        self.pi_l.unwrap_or(match self.design {
            Design::Study2c => 0.35,
            _ => 0.1,
        })
    }

    pub fn check(&self) -> Result<()> {
        let probs = [self.pi_e, self.pi_r, self.pi_l];
        if probs.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("scenario probabilities must lie in [0, 1]".into()));
        }
        if self.n == 0 || !(self.mean_ni > 0.0) {
            return Err(Error::Validation("scenario needs n > 0 and mean_ni > 0".into()));
        }
        if let (Some(l), Some(r)) = (self.tau_l, self.tau_r) {
            if !(l < r) {
                return Err(Error::Validation("tau_l must be below tau_r".into()));
            }
        }
        Ok(())
    }

    /// Fills unset censoring parameters from a fixed pilot sample.
    pub fn calibrated(&self) -> Result<SimScenario> {
        self.check()?;
        let mut out = self.clone();
        let truth = TrueModel::for_scenario(self);
        match self.design {
            Design::Study1 if self.censor_scale.is_none() => {
                out.censor_scale = Some(calibrate_scale(&truth, self.pi_e()));
            }
            Design::Study2a | Design::Study2c if self.tau_l.is_none() || self.tau_r.is_none() => {
                let (l, r) = calibrate_taus(&truth, self.pi_e(), self.pi_r(), self.pi_l());
                out.tau_l = Some(self.tau_l.unwrap_or(l));
                out.tau_r = Some(self.tau_r.unwrap_or(r));
            }
            _ => {}
        }
        Ok(out)
    }
}

/// The data-generating model of a design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueModel {
    pub design: Design,
    pub beta: Vec<f64>,
    pub gamma: f64,
    /// Trajectory coefficients in generator order (empty for Study 2c).
    pub alpha: Vec<f64>,
    pub sigma_kappa: Vec<f64>,
    pub sigma_eps: f64,
}

impl TrueModel {
    pub fn for_scenario(scn: &SimScenario) -> Self {
        let (beta, gamma, alpha, sigma_kappa, sigma_eps) = match scn.design {
            Design::Study1 => (vec![-0.5], 0.5, vec![0.5, -0.5, 1.0, -0.5], vec![0.5, 0.8], 0.05),
            Design::Study2a => (vec![-0.5, 0.5], 0.25, vec![0.5, 0.5, 0.5, 0.5, -0.8, 0.2], vec![0.2, 0.3], 0.1),
            Design::Study2b => (vec![-1.0], -0.3, vec![-0.1, -0.1, -0.3], vec![0.2, 0.4], 0.1),
            Design::Study2c => (vec![0.2, -0.5], 1.0, vec![], vec![0.1, 0.05], 0.05),
        };
        Self {
            design: scn.design,
            beta: scn.beta.clone().unwrap_or(beta),
            gamma: scn.gamma.unwrap_or(gamma),
            alpha,
            sigma_kappa,
            sigma_eps: scn.sigma_eps.unwrap_or(sigma_eps),
        }
    }

    /// True baseline hazard.
    pub fn h0(&self, t: f64) -> f64 {
        true_h0(self.design, t)
    }

    /// Noise-free trajectory.
    pub fn z(&self, t: f64, w: &[f64], kappa: &[f64]) -> f64 {
        let a = &self.alpha;
        let re = kappa[0] + kappa[1] * t;
        re + match self.design {
            Design::Study1 => a[0] + a[1] * t + a[2] * t * t + a[3] * t.powi(3),
            Design::Study2a => {
                a[0] + a[1] * w[0] + a[2] * t + a[3] * w[0] * t + a[4] * t * t + a[5] * t.powi(3)
            }
            Design::Study2b => a[0] + a[1] * t + a[2] * w[0],
            Design::Study2c => 1.0 - 0.75 / (1.0 + (-4.0 * t).exp()),
        }
    }

    pub fn hazard(&self, t: f64, x: &[f64], w: &[f64], kappa: &[f64]) -> f64 {
        let lin: f64 = x.iter().zip(&self.beta).map(|(a, b)| a * b).sum();
        self.h0(t) * (lin + self.gamma * self.z(t, w, kappa)).exp()
    }

    fn panel(&self, a: f64, b: f64, x: &[f64], w: &[f64], kappa: &[f64]) -> f64 {
        if !(b > a) {
            return 0.0;
        }
        gauss_legendre(a, b, 15).expect("non-empty panel").integrate(|s| self.hazard(s, x, w, kappa))
    }

    pub fn cumulative_hazard(&self, t: f64, x: &[f64], w: &[f64], kappa: &[f64]) -> f64 {
        let mut h = 0.0;
        let mut a = 0.0;
        while a < t {
            let b = (a + PANEL).min(t);
            h += self.panel(a, b, x, w, kappa);
            a = b;
        }
        h
    }

    /// Smallest `t` with `H(t) = target`, or infinity beyond `T_MAX`.
    pub fn invert(&self, target: f64, x: &[f64], w: &[f64], kappa: &[f64]) -> f64 {
        let mut a = 0.0;
        let mut h = 0.0;
        while a < T_MAX {
            let b = a + PANEL;
            let hb = h + self.panel(a, b, x, w, kappa);
            if hb >= target {
                let (mut lo, mut hi) = (a, b);
                while hi - lo > 1e-12 * hi.max(1.0) {
                    let mid = 0.5 * (lo + hi);
                    if h + self.panel(a, mid, x, w, kappa) < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return 0.5 * (lo + hi);
            }
            h = hb;
            a = b;
        }
        f64::INFINITY
    }
}

/// True baseline hazards: `3t^2`, `4t^3/(1+t^4)`, `0.5 e^{2t}` and the
/// log-normal hazard with log-mean 0.3 and log-sd 0.5.
pub fn true_h0(design: Design, t: f64) -> f64 {
    match design {
        Design::Study1 => 3.0 * t * t,
        Design::Study2a => 4.0 * t.powi(3) / (1.0 + t.powi(4)),
        Design::Study2b => 0.5 * (2.0 * t).exp(),
        Design::Study2c => {
            if t <= 0.0 {
                return 0.0;
            }
            let d = LogNormal::new(0.3, 0.5).expect("valid log-normal");
            let sf = d.sf(t);
            if sf <= 0.0 {
                f64::INFINITY
            } else {
                d.pdf(t) / sf
            }
        }
    }
}

/// Model specification matching a design's data-generating trajectory.
pub fn model_config(design: Design) -> ModelConfig {
    let poly = |degree| TimeBasisConfig::Polynomial { degree };
    let (cox, w, time_basis, interactions, penalized) = match design {
        Design::Study1 => (vec!["x1"], vec![], poly(3), vec![], false),
        Design::Study2a => (vec!["x1", "x2"], vec!["w1"], poly(3), vec![("w1", 2)], false),
        Design::Study2b => (vec!["x1"], vec!["w1"], poly(1), vec![("w1", 1)], false),
        Design::Study2c => (
            vec!["x1", "x2"],
            vec![],
            TimeBasisConfig::Bspline { order: 4, interior_knots: vec![0.5] },
            vec![],
            true,
        ),
    };
    ModelConfig {
        schema_version: SCHEMA_VERSION,
        baseline: BaselineConfig::default(),
        cox_covariates: cox.into_iter().map(String::from).collect(),
        long_covariates: w.into_iter().map(String::from).collect(),
        longitudinal: vec![LongitudinalConfig {
            column: "z1".into(),
            time_basis,
            interactions: interactions
                .into_iter()
                .map(|(c, k)| InteractionConfig { covariate: c.into(), n_basis: k })
                .collect(),
            random_basis: poly(1),
            penalized,
        }],
    }
}

/// Names of the trajectory coefficients, listed in model order.
pub fn alpha_names(design: Design) -> Vec<String> {
    let idx: &[usize] = match design {
        Design::Study1 => &[0, 1, 2, 3],
        Design::Study2a => &[0, 2, 4, 5, 1, 3],
        Design::Study2b => &[0, 1, 2],
        Design::Study2c => &[],
    };
    idx.iter().map(|i| format!("alpha{i}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthBundle {
    pub scenario: SimScenario,
    pub model: TrueModel,
    /// True trajectory coefficients in model order (absent for Study 2c).
    pub alpha_model_order: Option<Vec<f64>>,
    pub kappa: Vec<Vec<f64>>,
    /// Latent event times (infinite when beyond the horizon).
    pub event_times: Vec<f64>,
    pub achieved: Proportions,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub exact: f64,
    pub left: f64,
    pub right: f64,
    pub interval: f64,
}

fn subject_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

struct Latent {
    x: Vec<f64>,
    w: Vec<f64>,
    kappa: Vec<f64>,
    y: f64,
}

fn draw_latent(truth: &TrueModel, rng: &mut ChaCha8Rng) -> Latent {
    let std = Normal::new(0.0, 1.0).unwrap();
    let bern = |rng: &mut ChaCha8Rng| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
    let (x, w) = match truth.design {
        Design::Study1 => (vec![bern(rng)], vec![]),
        Design::Study2a => {
            let x1 = rng.random::<f64>() * 2.0 - 1.0;
            let x2 = bern(rng);
            (vec![x1, x2], vec![std.sample(rng)])
        }
        Design::Study2b => {
            let w1 = bern(rng);
            (vec![std.sample(rng)], vec![w1])
        }
        Design::Study2c => {
            let x1 = std.sample(rng);
            (vec![x1, bern(rng)], vec![])
        }
    };
    let kappa: Vec<f64> = truth.sigma_kappa.iter().map(|s| s * std.sample(rng)).collect();
    let e = -(1.0 - rng.random::<f64>()).ln();
    let y = truth.invert(e, &x, &w, &kappa);
    Latent { x, w, kappa, y }
}

/// Visit times starting at 0 with `Poisson(mean_ni)` visits and
/// `Unif[0, nu2]` gaps, kept up to `horizon`.
fn visit_times(rng: &mut ChaCha8Rng, mean_ni: f64, nu2: f64, horizon: f64) -> Vec<f64> {
    let pois = Poisson::new(mean_ni).unwrap();
    let mut count = pois.sample(rng) as usize;
    if count == 0 {
        count = (pois.sample(rng) as usize).max(1);
    }
    let mut times = vec![0.0];
    let mut t = 0.0;
    for _ in 1..count {
        t += rng.random::<f64>() * nu2;
        if t > horizon {
            break;
        }
        if t > *times.last().unwrap() {
            times.push(t);
        }
    }
    times
}

fn records(truth: &TrueModel, rng: &mut ChaCha8Rng, times: &[f64], w: &[f64], kappa: &[f64]) -> Vec<LongRecord> {
    let noise = Normal::new(0.0, truth.sigma_eps).unwrap();
    times
        .iter()
        .map(|&t| LongRecord { time: t, values: vec![truth.z(t, w, kappa) + noise.sample(rng)] })
        .collect()
}

/// Censoring windows of Studies 2a and 2c.
fn window(y: f64, ue: f64, ul: f64, ur: f64, pi_e: f64, tau_l: f64, tau_r: f64) -> (f64, f64) {
    if ue < pi_e && y.is_finite() {
        return (y, y);
    }
    let (l, r) = (tau_l * ul, tau_r * ur);
    if y < l {
        (0.0, l)
    } else if y > r {
        (r, f64::INFINITY)
    } else {
        (l, r)
    }
}

/// Generates a dataset with its truth.
pub fn generate(scn: &SimScenario) -> Result<(Dataset, TruthBundle)> {
    let scn = scn.calibrated()?;
    let truth = TrueModel::for_scenario(&scn);
    let nu2 = 2.0 / scn.mean_ni;
    let mut subjects = Vec::with_capacity(scn.n);
    let mut kappas = Vec::with_capacity(scn.n);
    let mut ys = Vec::with_capacity(scn.n);
    for i in 0..scn.n {
        let mut rng = subject_rng(scn.seed, i);
        let lat = draw_latent(&truth, &mut rng);
        let (t_left, t_right) = match scn.design {
            Design::Study1 => {
                let c = match scn.censor_scale {
                    Some(s) if s.is_finite() => s * (0.5 + rng.random::<f64>()),
                    _ => f64::INFINITY,
                };
                if lat.y <= c {
                    (lat.y, lat.y)
                } else {
                    (c, f64::INFINITY)
                }
            }
            Design::Study2a | Design::Study2c => {
                let ue = rng.random::<f64>();
                let ul = rng.random::<f64>();
                let ur = ul + (1.0 - ul) * rng.random::<f64>();
                window(lat.y, ue, ul, ur, scn.pi_e(), scn.tau_l.unwrap(), scn.tau_r.unwrap())
            }
            Design::Study2b => {
                let c = 0.5 + 2.5 * rng.random::<f64>();
                let last = (c / 0.25).floor() * 0.25;
                if lat.y < 0.25 {
                    (0.0, 0.25)
                } else if lat.y > last {
                    (last, f64::INFINITY)
                } else {
                    let lo = (lat.y / 0.25).floor() * 0.25;
                    (lo, (lo + 0.25).min(last))
                }
            }
        };
        let upper = if t_right.is_finite() { t_right } else { t_left };
        let times = match scn.design {
            Design::Study2b => {
                let mut v = vec![0.0];
                let mut g = 0.25;
                while g <= t_left + 1e-12 {
                    v.push(g);
                    g += 0.25;
                }
                v
            }
            _ => visit_times(&mut rng, scn.mean_ni, nu2, lat.y.min(upper)),
        };
        let recs = records(&truth, &mut rng, &times, &lat.w, &lat.kappa);
        subjects.push(Subject::new(format!("{}", i + 1), t_left, t_right, lat.x, lat.w, recs)?);
        kappas.push(lat.kappa);
        ys.push(lat.y);
    }
    let names = |p: &str, k: usize| (1..=k).map(|j| format!("{p}{j}")).collect::<Vec<_>>();
    let p = truth.beta.len();
    let pw = subjects.first().map(|s| s.w.len()).unwrap_or(0);
    let ds = Dataset::new(subjects, names("x", p), names("z", 1), names("w", pw));
    let counts = ds.status_counts();
    let frac = |s| *counts.get(&s).unwrap_or(&0) as f64 / scn.n as f64;
    use crate::data::CensoringStatus as C;
    let achieved =
        Proportions { exact: frac(C::Exact), left: frac(C::Left), right: frac(C::Right), interval: frac(C::Interval) };
    let alpha_model_order = match scn.design {
        Design::Study2c => None,
        d => Some(
            alpha_names(d)
                .iter()
                .map(|nm| truth.alpha[nm[5..].parse::<usize>().unwrap()])
                .collect(),
        ),
    };
    let bundle = TruthBundle { scenario: scn, model: truth, alpha_model_order, kappa: kappas, event_times: ys, achieved };
    Ok((ds, bundle))
}

/// Quantile of the finite latent event times over the pilot sample.
pub fn event_time_quantile(scn: &SimScenario, prob: f64) -> f64 {
    let truth = TrueModel::for_scenario(scn);
    let mut y: Vec<f64> = pilot(&truth).y.into_iter().filter(|v| v.is_finite()).collect();
    if y.is_empty() {
        return T_MAX;
    }
    y.sort_by(f64::total_cmp);
    crate::basis::quantile(&y, prob)
}

struct Pilot {
    y: Vec<f64>,
    u: Vec<[f64; 3]>,
}

fn pilot(truth: &TrueModel) -> Pilot {
    let mut y = Vec::with_capacity(PILOT_SIZE);
    let mut u = Vec::with_capacity(PILOT_SIZE);
    for i in 0..PILOT_SIZE {
        let mut rng = subject_rng(PILOT_SEED, i);
        y.push(draw_latent(truth, &mut rng).y);
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        u.push([a, b, b + (1.0 - b) * rng.random::<f64>()]);
    }
    Pilot { y, u }
}

/// Geometric bisection for a monotone proportion.
fn bisect(target: f64, increasing: bool, f: impl Fn(f64) -> f64) -> f64 {
    let (mut lo, mut hi) = (1e-4f64, 1e3f64);
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        let v = f(mid);
        if (v < target) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

fn calibrate_scale(truth: &TrueModel, pi_e: f64) -> f64 {
    if pi_e >= 1.0 {
        return f64::INFINITY;
    }
    let pl = pilot(truth);
    let frac = |s: f64| {
        pl.y.iter().zip(&pl.u).filter(|(y, u)| **y <= s * (0.5 + u[0])).count() as f64 / PILOT_SIZE as f64
    };
    bisect(pi_e, true, frac)
}

fn calibrate_taus(truth: &TrueModel, pi_e: f64, pi_r: f64, pi_l: f64) -> (f64, f64) {
    let pl = pilot(truth);
    let props = |tl: f64, tr: f64| {
        let mut p = Proportions::default();
        for (y, u) in pl.y.iter().zip(&pl.u) {
            let (l, r) = window(*y, u[0], u[1], u[2], pi_e, tl, tr);
            if r.is_infinite() {
                p.right += 1.0;
            } else if l == 0.0 {
                p.left += 1.0;
            }
        }
        (p.left / PILOT_SIZE as f64, p.right / PILOT_SIZE as f64)
    };
    let mut tl = 0.3;
    let mut tr = 2.0;
    for _ in 0..3 {
        tr = bisect(pi_r, false, |t| props(tl, t).1);
        tl = bisect(pi_l, true, |t| props(t, tr).0);
    }
    (tl, tr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn true_baseline_values() {
        assert_eq!(true_h0(Design::Study1, 1.0), 3.0);
        assert_eq!(true_h0(Design::Study2b, 0.0), 0.5);
        assert_eq!(true_h0(Design::Study2a, 1.0), 2.0);
    }

    #[test]
    fn study1_defaults_and_trajectory() {
        let tm = TrueModel::for_scenario(&SimScenario::new(Design::Study1, 10, 1));
        assert_eq!((tm.beta.clone(), tm.gamma), (vec![-0.5], 0.5));
        assert_eq!(tm.alpha, vec![0.5, -0.5, 1.0, -0.5]);
        assert_eq!(tm.sigma_kappa, vec![0.5, 0.8]);
        assert!((tm.z(1.0, &[], &[0.0, 0.0]) - 0.5).abs() < 1e-15);
        let tm = TrueModel::for_scenario(&SimScenario::new(Design::Study2c, 10, 1));
        assert!((tm.z(0.0, &[], &[0.0, 0.0]) - 0.625).abs() < 1e-15);
        let tm = TrueModel::for_scenario(&SimScenario::new(Design::Study2b, 10, 1));
        assert_eq!((tm.beta.clone(), tm.gamma, tm.alpha.clone()), (vec![-1.0], -0.3, vec![-0.1, -0.1, -0.3]));
    }

    #[test]
    fn censoring_window_rules() {
        // exact when U^E < pi^E
        assert_eq!(window(0.7, 0.1, 0.5, 0.8, 0.2, 1.0, 2.0), (0.7, 0.7));
        // left when y < tau_L U^L
        assert_eq!(window(0.3, 0.9, 0.5, 0.8, 0.2, 1.0, 2.0), (0.0, 0.5));
        assert_eq!(window(1.0, 0.9, 0.5, 0.8, 0.2, 1.0, 2.0), (0.5, 1.6));
        assert_eq!(window(1.7, 0.9, 0.5, 0.8, 0.2, 1.0, 2.0), (1.6, f64::INFINITY));
    }

    #[test]
    fn generated_data_validate_and_repeat() {
        for design in [Design::Study1, Design::Study2a, Design::Study2b, Design::Study2c] {
            let mut scn = SimScenario::new(design, 40, 7);
            scn.censor_scale = Some(1.2);
            scn.tau_l = Some(0.4);
            scn.tau_r = Some(1.5);
            let (ds, truth) = generate(&scn).unwrap();
            assert!(ds.validate().is_empty(), "{design:?}: {:?}", ds.validate());
            assert_eq!(truth.kappa.len(), 40);
            let (again, _) = generate(&scn).unwrap();
            assert_eq!(ds, again);
        }
    }

    #[test]
    fn study2b_grid_censoring() {
        let mut scn = SimScenario::new(Design::Study2b, 300, 3);
        scn.n = 300;
        let (ds, truth) = generate(&scn).unwrap();
        for (s, y) in ds.subjects.iter().zip(&truth.event_times) {
            if *y < 0.25 {
                assert_eq!((s.t_left, s.t_right), (0.0, 0.25));
            } else if s.t_right.is_infinite() {
                assert!(*y > s.t_left);
            } else {
                assert!(s.t_left <= *y && *y <= s.t_right);
            }
        }
    }
}
