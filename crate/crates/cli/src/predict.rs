//! Query document for `jointpic predict` and the `curves.csv` writer.

use anyhow::{anyhow, bail, Result};
use serde::Deserialize;

use jointpic::inference::{conditional_survival, predict_individual, predict_survival, FitResult};

pub const CURVES_HEADER: &str = "label,kind,given,time,value,lower,upper";

#[derive(Debug, Deserialize)]
pub struct QueryFile {
    /// Default time grid for queries without their own.
    #[serde(default)]
    pub grid: Vec<f64>,
    pub queries: Vec<Query>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Query {
    /// Survival for given covariates with random effects at zero.
    Population {
        label: String,
        #[serde(default)]
        x: Vec<f64>,
        #[serde(default)]
        w: Vec<f64>,
        grid: Option<Vec<f64>>,
    },
    /// Trajectories and survival of a fitted subject.
    Individual { label: Option<String>, subject: String, grid: Option<Vec<f64>> },
    /// `S(u) / S(t)` for a fitted subject or for covariates.
    Conditional {
        label: String,
        subject: Option<String>,
        #[serde(default)]
        x: Vec<f64>,
        #[serde(default)]
        w: Vec<f64>,
        t: f64,
        u: Vec<f64>,
    },
}

fn subject_index(fit: &FitResult, id: &str) -> Result<usize> {
    fit.subjects.iter().position(|s| s.id == id).ok_or_else(|| anyhow!("unknown subject '{id}'"))
}

fn row(out: &mut String, label: &str, kind: &str, given: Option<f64>, time: f64, value: f64, band: Option<(f64, f64)>) {
    let given = given.map(|g| g.to_string()).unwrap_or_default();
    let (lo, hi) = band.map(|(l, h)| (l.to_string(), h.to_string())).unwrap_or_default();
    out.push_str(&format!("{label},{kind},{given},{time},{value},{lo},{hi}\n"));
}

/// Evaluates every query and renders `curves.csv`.
pub fn curves(fit: &FitResult, q: &QueryFile) -> Result<String> {
    let n_kappa = fit.spec.layout().n_kappa;
    let mut out = format!("{CURVES_HEADER}\n");
    let grid_for = |g: &Option<Vec<f64>>| -> Result<Vec<f64>> {
        let g = g.clone().unwrap_or_else(|| q.grid.clone());
        if g.is_empty() {
            bail!("query has no time grid");
        }
        Ok(g)
    };
    for query in &q.queries {
        match query {
            Query::Population { label, x, w, grid } => {
                let g = grid_for(grid)?;
                let c = predict_survival(fit, x, w, &vec![0.0; n_kappa], &g)?;
                for k in 0..g.len() {
                    row(&mut out, label, "survival", None, c.time[k], c.survival[k], Some((c.lower[k], c.upper[k])));
                }
            }
            Query::Individual { label, subject, grid } => {
                let g = grid_for(grid)?;
                let i = subject_index(fit, subject)?;
                let p = predict_individual(fit, i, &g)?;
                let label = label.as_deref().unwrap_or(subject);
                let s = &p.survival;
                for k in 0..g.len() {
                    row(&mut out, label, "survival", None, s.time[k], s.survival[k], Some((s.lower[k], s.upper[k])));
                }
                for (r, traj) in p.trajectory.iter().enumerate() {
                    let kind = format!("trajectory:{}", fit.spec.longitudinal[r].name);
                    for k in 0..g.len() {
                        row(&mut out, label, &kind, None, g[k], traj[k], None);
                    }
                }
            }
            Query::Conditional { label, subject, x, w, t, u } => {
                let (x, w, kappa) = match subject {
                    Some(id) => {
                        let i = subject_index(fit, id)?;
                        let s = &fit.subjects[i];
                        (s.x.clone(), s.w.clone(), fit.state.kappa[i].clone())
                    }
                    None => (x.clone(), w.clone(), vec![0.0; n_kappa]),
                };
                for &uu in u {
                    let pi = conditional_survival(fit, &x, &w, &kappa, *t, uu)?;
                    row(&mut out, label, "conditional", Some(*t), uu, pi, None);
                }
            }
        }
    }
    Ok(out)
}
