//! Basis functions on a time axis: M-splines and B-splines of arbitrary
//! order, plain polynomials and piecewise-constant indicators, together with
//! their analytic integrals, second-derivative roughness penalties and
//! Gauss–Legendre quadrature rules.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Gauss–Legendre nodes used per inter-knot segment when integrating
/// hazards and their derivatives.
pub const NODES_PER_SEGMENT: usize = 15;

/// Upper clamp for the automatic baseline dimension.
pub const MAX_DEFAULT_BASIS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum BasisFamily {
    /// Non-negative splines normalised to integrate to one.
    Mspline { order: usize },
    /// Partition-of-unity B-splines.
    Bspline { order: usize },
    /// Monomials `1, t, ..., t^degree`.
    Polynomial { degree: usize },
    /// Indicators of the half-open intervals between consecutive knots.
    Indicator,
}

/// A finite set of basis functions over `[knots[0], knots[last]]`.
///
/// For splines `knots` holds the boundary and interior knots (distinct,
/// ascending); the repeated boundary knots are implied by the order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub family: BasisFamily,
    pub knots: Vec<f64>,
    size: usize,
    /// Set when knots had to be nudged apart to stay strictly ascending.
    #[serde(default)]
    pub jittered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub matrix: DMatrix<f64>,
    /// The family has no second derivative, so the matrix is zero.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl BasisSet {
    pub fn new(family: BasisFamily, knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Basis("at least two knots are required".into()));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Basis("knots must be finite".into()));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Basis("knots must be strictly ascending".into()));
        }
        let size = match family {
            BasisFamily::Mspline { order } | BasisFamily::Bspline { order } => {
                if order == 0 {
                    return Err(Error::Basis("spline order must be positive".into()));
                }
                knots.len() - 2 + order
            }
            BasisFamily::Polynomial { degree } => {
                if knots.len() != 2 {
                    return Err(Error::Basis("polynomial basis takes exactly two boundary knots".into()));
                }
                degree + 1
            }
            BasisFamily::Indicator => knots.len() - 1,
        };
        Ok(Self { family, knots, size, jittered: false })
    }

    pub fn mspline(order: usize, knots: Vec<f64>) -> Result<Self> {
        Self::new(BasisFamily::Mspline { order }, knots)
    }

    pub fn bspline(order: usize, knots: Vec<f64>) -> Result<Self> {
        Self::new(BasisFamily::Bspline { order }, knots)
    }

    pub fn polynomial(degree: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(BasisFamily::Polynomial { degree }, vec![lower, upper])
    }

    pub fn indicator(knots: Vec<f64>) -> Result<Self> {
        Self::new(BasisFamily::Indicator, knots)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn lower(&self) -> f64 {
        self.knots[0]
    }

    pub fn upper(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    /// Points where the functions (or their derivatives) may be non-smooth.
    pub fn breakpoints(&self) -> &[f64] {
        &self.knots
    }

    /// True when every function is non-negative everywhere.
    pub fn is_nonnegative(&self) -> bool {
        match self.family {
            BasisFamily::Mspline { .. } | BasisFamily::Bspline { .. } | BasisFamily::Indicator => true,
            BasisFamily::Polynomial { degree } => degree == 0 && self.lower() >= 0.0,
        }
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !t.is_finite() {
            return Err(Error::Domain(format!("time {t} is not finite")));
        }
        if t < self.lower() {
            return Err(Error::Domain(format!(
                "time {t} lies below the first boundary knot {}",
                self.lower()
            )));
        }
        Ok(())
    }

    /// Values `(psi_1(t), ..., psi_size(t))`.
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        self.eval_deriv(t, 0)
    }

    /// `order`-th derivative of every function at `t`.
    pub fn eval_deriv(&self, t: f64, order: usize) -> Result<Vec<f64>> {
        self.check_time(t)?;
        Ok(match self.family {
            BasisFamily::Mspline { order: k } => {
                let tau = self.augmented(k, 0);
                let mut out = spline_derivs(&tau, k, t, order, self.size);
                for (j, v) in out.iter_mut().enumerate() {
                    let width = tau[j + k] - tau[j];
                    *v *= k as f64 / width;
                }
                out
            }
            BasisFamily::Bspline { order: k } => {
                let tau = self.augmented(k, 0);
                spline_derivs(&tau, k, t, order, self.size)
            }
            BasisFamily::Polynomial { degree } => (0..=degree)
                .map(|j| {
                    if j < order {
                        0.0
                    } else {
                        let falling: f64 = ((j - order + 1)..=j).map(|f| f as f64).product();
                        falling * t.powi((j - order) as i32)
                    }
                })
                .collect(),
            BasisFamily::Indicator => {
                let mut out = vec![0.0; self.size];
                if order == 0 {
                    if let Some(j) = self.indicator_cell(t) {
                        out[j] = 1.0;
                    }
                }
                out
            }
        })
    }

    /// Entry `u` equals the integral of `psi_u` from 0 (or the first knot,
    /// whichever is larger) to `t`.
    pub fn eval_integral(&self, t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        Ok(match self.family {
            BasisFamily::Mspline { order: k } => {
                // d/dt sum_{i>=j} B_{i,k+1} = M_j on the knot vector with one
                // extra boundary repeat.
                let tau = self.augmented(k, 1);
                let b = spline_derivs(&tau, k + 1, t.min(self.upper()), 0, self.size + 1);
                let mut out = vec![0.0; self.size];
                let mut tail = 0.0;
                for j in (0..self.size).rev() {
                    tail += b[j + 1];
                    out[j] = tail;
                }
                out
            }
            BasisFamily::Bspline { order: k } => {
                let tau = self.augmented(k, 1);
                let b = spline_derivs(&tau, k + 1, t.min(self.upper()), 0, self.size + 1);
                let base = self.augmented(k, 0);
                let mut out = vec![0.0; self.size];
                let mut tail = 0.0;
                for j in (0..self.size).rev() {
                    tail += b[j + 1];
                    out[j] = tail * (base[j + k] - base[j]) / k as f64;
                }
                out
            }
            BasisFamily::Polynomial { degree } => (0..=degree)
                .map(|j| t.powi(j as i32 + 1) / (j as f64 + 1.0))
                .collect(),
            BasisFamily::Indicator => self
                .knots
                .windows(2)
                .map(|w| (t.min(w[1]) - w[0]).max(0.0))
                .collect(),
        })
    }

    /// Coefficients whose combination equals the constant `c` on the
    /// domain, where the family can represent constants.
    pub fn constant_coefficients(&self, c: f64) -> Option<Vec<f64>> {
        match self.family {
            BasisFamily::Mspline { order: k } => {
                let tau = self.augmented(k, 0);
                Some((0..self.size).map(|j| c * (tau[j + k] - tau[j]) / k as f64).collect())
            }
            BasisFamily::Bspline { .. } | BasisFamily::Indicator => Some(vec![c; self.size]),
            BasisFamily::Polynomial { .. } => {
                let mut v = vec![0.0; self.size];
                v[0] = c;
                Some(v)
            }
        }
    }

    /// Gram matrix of second derivatives over the basis domain.
    pub fn penalty_matrix(&self) -> PenaltyMatrix {
        let n = self.size;
        let mut matrix = DMatrix::zeros(n, n);
        let nodes_per_piece = match self.family {
            BasisFamily::Mspline { order } | BasisFamily::Bspline { order } if order >= 3 => order,
            BasisFamily::Polynomial { degree } if degree >= 2 => degree + 1,
            _ => return PenaltyMatrix { matrix, degenerate: true },
        };
        for w in self.knots.windows(2) {
            let rule = gauss_legendre(w[0], w[1], nodes_per_piece).expect("ascending knots");
            for (&s, &wt) in rule.nodes.iter().zip(&rule.weights) {
                let d2 = self.eval_deriv(s, 2).expect("node inside domain");
                for u in 0..n {
                    if d2[u] == 0.0 {
                        continue;
                    }
                    for v in 0..n {
                        matrix[(u, v)] += wt * d2[u] * d2[v];
                    }
                }
            }
        }
        // exact symmetry
        let matrix = (&matrix + matrix.transpose()) * 0.5;
        PenaltyMatrix { matrix, degenerate: false }
    }

    fn augmented(&self, order: usize, extra: usize) -> Vec<f64> {
        let reps = order + extra;
        let mut tau = Vec::with_capacity(self.knots.len() + 2 * reps);
        tau.extend(std::iter::repeat_n(self.lower(), reps));
        tau.extend_from_slice(&self.knots[1..self.knots.len() - 1]);
        tau.extend(std::iter::repeat_n(self.upper(), reps));
        tau
    }

    fn indicator_cell(&self, t: f64) -> Option<usize> {
        let last = self.knots.len() - 1;
        if t > self.knots[last] || t < self.knots[0] {
            return None;
        }
        if t == self.knots[last] {
            return Some(last - 1);
        }
        Some(self.knots.partition_point(|&k| k <= t) - 1)
    }
}

/// Derivatives of order `deriv` of all B-splines of order `k` on the
/// augmented knot vector `tau`, evaluated at `t`. The last non-empty
/// interval is closed on the right.
fn spline_derivs(tau: &[f64], k: usize, t: f64, deriv: usize, count: usize) -> Vec<f64> {
    let lo = tau[0];
    let hi = *tau.last().unwrap();
    if t < lo || t > hi {
        return vec![0.0; count];
    }
    if deriv >= k {
        return vec![0.0; count];
    }
    // Order-1 indicators.
    let base_order = k - deriv;
    let n1 = tau.len() - 1;
    let mut b = vec![0.0; n1];
    let cell = if t >= hi {
        // last interval with positive width
        (0..n1).rev().find(|&j| tau[j + 1] > tau[j]).unwrap()
    } else {
        tau.partition_point(|&x| x <= t) - 1
    };
    b[cell] = 1.0;
    // Raise to base_order.
    for o in 2..=base_order {
        let mut next = vec![0.0; tau.len() - o];
        for (j, slot) in next.iter_mut().enumerate() {
            let mut v = 0.0;
            let d1 = tau[j + o - 1] - tau[j];
            if d1 > 0.0 {
                v += (t - tau[j]) / d1 * b[j];
            }
            let d2 = tau[j + o] - tau[j + 1];
            if d2 > 0.0 {
                v += (tau[j + o] - t) / d2 * b[j + 1];
            }
            *slot = v;
        }
        b = next;
    }
    // Differentiate `deriv` times by order reduction.
    for o in (base_order + 1)..=k {
        let mut next = vec![0.0; tau.len() - o];
        for (j, slot) in next.iter_mut().enumerate() {
            let mut v = 0.0;
            let d1 = tau[j + o - 1] - tau[j];
            if d1 > 0.0 {
                v += b[j] / d1;
            }
            let d2 = tau[j + o] - tau[j + 1];
            if d2 > 0.0 {
                v -= b[j + 1] / d2;
            }
            *slot = (o - 1) as f64 * v;
        }
        b = next;
    }
    b.truncate(count);
    b
}

fn legendre_reference(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            if n == 1 {
                p1 = x;
                p0 = 1.0;
            } else {
                for j in 2..=n {
                    let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                    p0 = p1;
                    p1 = p2;
                }
            }
            // p1 = P_n(x), p0 = P_{n-1}(x)
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            x = 0.0;
            dp = 1.0;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn reference_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    static FIFTEEN: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    if n == NODES_PER_SEGMENT {
        return FIFTEEN.get_or_init(|| legendre_reference(n)).clone();
    }
    legendre_reference(n)
}

/// `n`-point Gauss–Legendre rule on `[a, b]`.
pub fn gauss_legendre(a: f64, b: f64, n: usize) -> Result<QuadratureRule> {
    if !(a < b) {
        return Err(Error::Domain(format!("quadrature interval [{a}, {b}] is empty")));
    }
    if n == 0 {
        return Err(Error::Domain("quadrature needs at least one node".into()));
    }
    let (x, w) = reference_rule(n);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    Ok(QuadratureRule {
        nodes: x.iter().map(|xi| mid + half * xi).collect(),
        weights: w.iter().map(|wi| half * wi).collect(),
    })
}

/// Composite rule on `[a, b]`, one `n`-point panel between consecutive
/// breakpoints that fall inside the interval.
pub fn composite_rule(a: f64, b: f64, breaks: &[f64], n: usize) -> Result<QuadratureRule> {
    if !(a < b) {
        return Err(Error::Domain(format!("quadrature interval [{a}, {b}] is empty")));
    }
    let mut cuts = vec![a];
    cuts.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    cuts.push(b);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    let mut rule = QuadratureRule { nodes: Vec::new(), weights: Vec::new() };
    for w in cuts.windows(2) {
        if w[1] > w[0] {
            let panel = gauss_legendre(w[0], w[1], n)?;
            rule.nodes.extend(panel.nodes);
            rule.weights.extend(panel.weights);
        }
    }
    Ok(rule)
}

impl QuadratureRule {
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * f(x)).sum()
    }
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `round(n0^(1/3))` clamped to `[order, MAX_DEFAULT_BASIS]`.
pub fn default_basis_size(n0: usize, order: usize) -> usize {
    let m = (n0 as f64).cbrt().round() as usize;
    m.clamp(order, MAX_DEFAULT_BASIS.max(order))
}

/// Spline knots with `size - order` interior knots at equally spaced
/// quantiles of `times` and boundary knots at their extremes.
pub fn default_knots(times: &[f64], size: usize, family: BasisFamily) -> Result<BasisSet> {
    let order = match family {
        BasisFamily::Mspline { order } | BasisFamily::Bspline { order } => order,
        _ => return Err(Error::Basis("default knots apply to spline families only".into())),
    };
    if times.is_empty() {
        return Err(Error::Basis("no times to place knots on".into()));
    }
    if size < order {
        return Err(Error::Basis(format!("basis size {size} is below the spline order {order}")));
    }
    let mut sorted: Vec<f64> = times.iter().copied().filter(|t| t.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let (lo, hi) = (sorted[0], *sorted.last().unwrap());
    if !(hi > lo) {
        return Err(Error::Basis("all knot times are equal; support has zero width".into()));
    }
    let n_interior = size - order;
    let mut knots = vec![lo];
    for j in 1..=n_interior {
        knots.push(quantile(&sorted, j as f64 / (n_interior + 1) as f64));
    }
    knots.push(hi);
    let jittered = separate_knots(&mut knots);
    let mut basis = BasisSet::new(family, knots)?;
    basis.jittered = jittered;
    Ok(basis)
}

/// Pushes tied interior knots apart; returns true if anything moved.
fn separate_knots(knots: &mut [f64]) -> bool {
    let n = knots.len();
    let range = knots[n - 1] - knots[0];
    let gap = range * 1e3 * f64::EPSILON;
    let mut moved = false;
    for j in 1..n - 1 {
        if knots[j] <= knots[j - 1] + gap {
            knots[j] = knots[j - 1] + gap;
            moved = true;
        }
    }
    for j in (1..n - 1).rev() {
        if knots[j] >= knots[j + 1] - gap {
            knots[j] = knots[j + 1] - gap;
            moved = true;
        }
    }
    moved
}
