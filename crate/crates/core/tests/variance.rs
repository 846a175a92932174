use approx::assert_relative_eq;
use jointpic::basis::BasisSet;
use jointpic::data::{Dataset, LongRecord, Subject};
use jointpic::deriv::negative_hessian;
use jointpic::model::{JointModel, LongitudinalSpec, ModelSpec, ParameterState, VarianceComponents};
use jointpic::optimizer::{initial_state, run_inner, InnerLoopConfig};
use jointpic::simulate::{generate, model_config, Design, SimScenario};
use jointpic::variance::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

const SIGMA_K: f64 = 0.7;
const SIGMA_E: f64 = 0.4;

// Balanced random-effects data: k visits at t = 0, 0.1, ..., event times
// independent of the trajectory.
fn gaussian_data(n: usize, k: usize, slope: bool, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = Normal::new(0.0, SIGMA_E).unwrap();
    let ke = Normal::new(0.0, SIGMA_K).unwrap();
    let ev = Exp::new(0.5).unwrap();
    let subjects = (0..n)
        .map(|i| {
            let (b0, b1) = (ke.sample(&mut rng), if slope { ke.sample(&mut rng) } else { 0.0 });
            let recs = (0..k)
                .map(|j| {
                    let t = 0.1 * j as f64;
                    LongRecord { time: t, values: vec![10.0 + 0.5 * t + b0 + b1 * t + eps.sample(&mut rng)] }
                })
                .collect();
            let t = 0.6 + ev.sample(&mut rng);
            let (l, r) = if t > 4.0 { (4.0, f64::INFINITY) } else { (t, t) };
            Subject::new(format!("s{i}"), l, r, vec![], vec![], recs).unwrap()
        })
        .collect();
    Dataset::new(subjects, vec![], vec!["z".into()], vec![])
}

fn gaussian_model(ds: &Dataset, slope: bool) -> JointModel {
    let deg = usize::from(slope);
    let spec = ModelSpec {
        baseline: BasisSet::indicator(vec![0.0, 1.0, 2.0, 5.0]).unwrap(),
        p: 0,
        pw: 0,
        longitudinal: vec![LongitudinalSpec {
            name: "z".into(),
            time_basis: BasisSet::polynomial(deg, 0.0, 5.0).unwrap(),
            interactions: vec![],
            random_basis: BasisSet::polynomial(deg, 0.0, 5.0).unwrap(),
            penalized: false,
        }],
    };
    JointModel::new(spec, ds).unwrap()
}

fn tight() -> InnerLoopConfig {
    InnerLoopConfig { tol: 1e-11, fix_gamma: true, ..Default::default() }
}

#[test]
fn gaussian_laplace_matches_conjugate_marginal() {
    let ds = gaussian_data(12, 4, true, 3);
    let model = gaussian_model(&ds, true);
    let var = VarianceComponents {
        sigma_eps2: 0.2,
        sigma_theta2: 1.0,
        sigma_alpha2: vec![1.0],
        sigma_kappa2: vec![vec![0.5, 0.3]],
    };
    let (state, trace) = run_inner(&model, &initial_state(&model), &var, &tight()).unwrap();
    assert!(trace.converged);
    assert_eq!(state.gamma, vec![0.0]);

    // Gaussian part of the Laplace value over (alpha, kappa) at gamma = 0
    let h = negative_hessian(&model, &state, &var);
    let alpha: Vec<usize> = model.layout.alpha().collect();
    let inv = ArrowInverse::new(&h, alpha);
    let laplace = model.log_likelihood(&state, &var) - model.survival_loglik(&state) - 0.5 * inv.log_det;

    // y ~ N(X a, Z D Z' + s2 I) with a flat prior on a
    let mut rows_x = Vec::new();
    let mut y = Vec::new();
    for s in &ds.subjects {
        for r in &s.longitudinal {
            rows_x.push([1.0, r.time]);
            y.push(r.values[0]);
        }
    }
    let nn = y.len();
    let x = DMatrix::from_fn(nn, 2, |i, j| rows_x[i][j]);
    let mut v = DMatrix::<f64>::identity(nn, nn) * var.sigma_eps2;
    let mut off = 0;
    for s in &ds.subjects {
        let k = s.longitudinal.len();
        for a in 0..k {
            for b in 0..k {
                let (ta, tb) = (s.longitudinal[a].time, s.longitudinal[b].time);
                v[(off + a, off + b)] += 0.5 + 0.3 * ta * tb;
            }
        }
        off += k;
    }
    let y = DVector::from_vec(y);
    let vc = v.clone().cholesky().unwrap();
    let vinv = vc.inverse();
    let xtvx = x.transpose() * &vinv * &x;
    let ahat = xtvx.clone().cholesky().unwrap().solve(&(x.transpose() * &vinv * &y));
    let res = &y - &x * ahat;
    let ln_v = 2.0 * vc.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let restricted = -0.5 * ((nn - 2) as f64 * ln2pi + ln_v + xtvx.determinant().ln() + (res.transpose() * &vinv * &res)[0]);
    let oracle = restricted + 0.5 * (nn - 2) as f64 * ln2pi;
    assert_relative_eq!(laplace, oracle, max_relative = 1e-8);
}

#[test]
fn one_parameter_laplace_against_gamma_integral() {
    // Constant hazard, exact events and right censoring: Phi = d ln(theta) - theta T
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let subjects: Vec<Subject> = (0..150)
        .map(|i| {
            let t: f64 = rng.random_range(0.05..3.0);
            let r = if i % 3 == 0 { f64::INFINITY } else { t };
            Subject::new(format!("s{i}"), t, r, vec![], vec![], vec![]).unwrap()
        })
        .collect();
    let d = subjects.iter().filter(|s| s.t_right.is_finite()).count() as f64;
    let total: f64 = subjects.iter().map(|s| s.t_left).sum();
    let ds = Dataset::new(subjects, vec![], vec![], vec![]);
    let spec = ModelSpec { baseline: BasisSet::indicator(vec![0.0, 3.0]).unwrap(), p: 0, pw: 0, longitudinal: vec![] };
    let model = JointModel::new(spec, &ds).unwrap();
    let var = VarianceComponents { sigma_eps2: 1.0, sigma_theta2: 1.0, sigma_alpha2: vec![], sigma_kappa2: vec![] };
    let (state, _) = run_inner(&model, &initial_state(&model), &var, &tight()).unwrap();
    assert_relative_eq!(state.theta[0], d / total, max_relative = 1e-9);
    let laplace = marginal_loglik(&model, &state, &var) + 0.5 * (2.0 * std::f64::consts::PI).ln();
    let exact = statrs::function::gamma::ln_gamma(d + 1.0) - (d + 1.0) * total.ln();
    assert_relative_eq!(laplace, exact, max_relative = 1e-3);
    assert!((laplace - exact).abs() < 1e-2);
}

#[test]
fn full_inverse_trace_equals_dimension() {
    let ds = gaussian_data(30, 4, true, 9);
    let model = gaussian_model(&ds, true);
    let var = initial_variances(&model);
    let (state, _) = run_inner(&model, &initial_state(&model), &var, &tight()).unwrap();
    let h = negative_hessian(&model, &state, &var);
    let all: Vec<usize> = (0..model.layout.dzeta()).collect();
    let inv = ArrowInverse::new(&h, all);
    assert!(inv.positive_definite);
    let dim = model.layout.dzeta() + model.n() * h.nk;
    assert_relative_eq!(inv.trace_arrow(&h.zz, &h.zk, &h.kk), dim as f64, max_relative = 1e-10);
}

#[test]
fn balanced_intercept_model_reaches_closed_form_reml() {
    let (n, k) = (40, 6);
    let ds = gaussian_data(n, k, false, 21);
    let model = gaussian_model(&ds, false);
    let outer = OuterLoopConfig { outer_tol: 1e-9, max_outer: 200, ..Default::default() };
    let res = run_outer(&model, &tight(), &outer).unwrap();
    assert!(res.converged);

    // One-way ANOVA estimators coincide with REML when positive
    let means: Vec<f64> = ds
        .subjects
        .iter()
        .map(|s| s.longitudinal.iter().map(|r| r.values[0]).sum::<f64>() / k as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / n as f64;
    let ssw: f64 = ds
        .subjects
        .iter()
        .zip(&means)
        .map(|(s, m)| s.longitudinal.iter().map(|r| (r.values[0] - m).powi(2)).sum::<f64>())
        .sum();
    let ssb: f64 = means.iter().map(|m| k as f64 * (m - grand).powi(2)).sum();
    let msw = ssw / (n * (k - 1)) as f64;
    let msb = ssb / (n - 1) as f64;
    assert!(msb > msw);
    assert_relative_eq!(res.var.sigma_eps2, msw, max_relative = 1e-2);
    assert_relative_eq!(res.var.sigma_kappa2[0][0], (msb - msw) / k as f64, max_relative = 1e-2);
}

#[test]
fn zero_residuals_hit_the_floor() {
    let subjects: Vec<Subject> = (0..5)
        .map(|i| {
            let recs = (0..4).map(|j| LongRecord { time: 0.5 * j as f64, values: vec![1.0 + 2.0 * 0.5 * j as f64] }).collect();
            Subject::new(format!("s{i}"), 2.0 + i as f64 * 0.25, 2.0 + i as f64 * 0.25, vec![], vec![], recs).unwrap()
        })
        .collect();
    let ds = Dataset::new(subjects, vec![], vec!["z".into()], vec![]);
    let model = gaussian_model(&ds, true);
    let mut state = ParameterState::zeros(&model.layout, model.n());
    state.theta = vec![0.3; model.layout.m];
    state.alpha = vec![1.0, 2.0];
    let var = VarianceComponents {
        sigma_eps2: 0.1,
        sigma_theta2: 1.0,
        sigma_alpha2: vec![1.0],
        sigma_kappa2: vec![vec![0.5, 0.5]],
    };
    assert_eq!(model.residual_ss(&state), 0.0);
    let up = update_variances(&model, &state, &var, &OuterLoopConfig::default()).unwrap();
    assert_eq!(up.var.sigma_eps2, 1e-10);
    assert!(up.var.sigma_kappa2[0].iter().all(|&v| v == 1e-10));
}

#[test]
fn single_subject_completes_with_flags() {
    let ds = gaussian_data(1, 5, true, 2);
    let model = gaussian_model(&ds, true);
    let res = run_outer(&model, &InnerLoopConfig::default(), &OuterLoopConfig { max_outer: 10, ..Default::default() }).unwrap();
    assert!(res.history.iter().any(|h| !h.flags.is_empty()));
    assert!(res.var.check().is_ok());
}

#[test]
fn penalty_rank_counts_free_directions() {
    let b = BasisSet::mspline(4, vec![0.0, 0.5, 1.0, 1.7, 3.0]).unwrap();
    let r = b.penalty_matrix().matrix;
    assert_eq!(penalty_rank(&r, &[]), b.size() - 2);
    assert_eq!(penalty_rank(&r, &[0]), b.size() - 2);
    assert_eq!(penalty_rank(&r, &(0..b.size()).collect::<Vec<_>>()), 0);
    let ind = BasisSet::indicator(vec![0.0, 1.0, 2.0]).unwrap().penalty_matrix().matrix;
    assert_eq!(penalty_rank(&ind, &[]), 0);
}

#[test]
fn study1_fit_is_self_consistent_and_positive() {
    let scn = SimScenario::new(Design::Study1, 200, 77).calibrated().unwrap();
    let (ds, _) = generate(&scn).unwrap();
    let spec = ModelSpec::from_config(&model_config(Design::Study1), &ds).unwrap();
    let model = JointModel::new(spec, &ds).unwrap();
    let inner = InnerLoopConfig::default();
    let outer = OuterLoopConfig::default();
    let res = run_outer(&model, &inner, &outer).unwrap();
    assert!(res.converged);
    for h in &res.history {
        assert!(h.var.check().is_ok());
        assert!(!h.flags.iter().any(|f| f.contains("outside")), "{:?}", h.flags);
    }
    let again = run_outer_from(&model, &res.state, &res.var, &inner, &outer).unwrap();
    assert!(again.converged);
    assert!(again.history.len() - 1 <= 3, "{} cycles", again.history.len() - 1);
    assert!(relative_change(&res.var, &again.var) < 1e-2);
}
