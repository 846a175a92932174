use std::sync::OnceLock;

use approx::assert_relative_eq;
use jointpic::basis::BasisSet;
use jointpic::data::{Dataset, Subject};
use jointpic::deriv::negative_hessian;
use jointpic::inference::*;
use jointpic::model::{JointModel, ModelSpec, VarianceComponents};
use jointpic::optimizer::{initial_state, run_inner, InnerLoopConfig};
use jointpic::simulate::{generate, model_config, Design, SimScenario};
use jointpic::variance::OuterLoopConfig;

fn study1_fit() -> &'static (Dataset, FitResult) {
    static FIT: OnceLock<(Dataset, FitResult)> = OnceLock::new();
    FIT.get_or_init(|| {
        let scn = SimScenario::new(Design::Study1, 150, 4242).calibrated().unwrap();
        let (ds, _) = generate(&scn).unwrap();
        let f = fit(&ds, &model_config(Design::Study1), &InnerLoopConfig::default(), &OuterLoopConfig::default()).unwrap();
        (ds, f)
    })
}

fn two_group() -> (JointModel, VarianceComponents) {
    let mut subjects = Vec::new();
    for i in 0..40 {
        let x = (i % 2) as f64;
        let t = 0.2 + 0.05 * i as f64;
        let r = if i % 5 == 0 { f64::INFINITY } else { t };
        subjects.push(Subject::new(format!("s{i}"), t, r, vec![x], vec![], vec![]).unwrap());
    }
    let ds = Dataset::new(subjects, vec!["x".into()], vec![], vec![]);
    let spec = ModelSpec { baseline: BasisSet::indicator(vec![0.0, 1.0, 2.5]).unwrap(), p: 1, pw: 0, longitudinal: vec![] };
    let var = VarianceComponents { sigma_eps2: 1.0, sigma_theta2: 1.0, sigma_alpha2: vec![], sigma_kappa2: vec![] };
    (JointModel::new(spec, &ds).unwrap(), var)
}

#[test]
fn sandwich_is_plain_inverse_without_penalty() {
    let (model, var) = two_group();
    let cfg = InnerLoopConfig { tol: 1e-12, ..Default::default() };
    let (state, _) = run_inner(&model, &initial_state(&model), &var, &cfg).unwrap();
    let cov = sandwich_covariance(&model, &state, &var, &[]).unwrap();
    let inv = negative_hessian(&model, &state, &var).zz.try_inverse().unwrap();
    for i in 0..cov.nrows() {
        for j in 0..cov.ncols() {
            assert_relative_eq!(cov[(i, j)], inv[(i, j)], max_relative = 1e-8, epsilon = 1e-14);
        }
    }
}

#[test]
fn active_coefficient_has_zero_row_and_column() {
    let (model, var) = two_group();
    let (state, _) = run_inner(&model, &initial_state(&model), &var, &InnerLoopConfig::default()).unwrap();
    let cov = sandwich_covariance(&model, &state, &var, &[1]).unwrap();
    let k = model.layout.theta().start + 1;
    for j in 0..cov.nrows() {
        assert_eq!(cov[(k, j)], 0.0);
        assert_eq!(cov[(j, k)], 0.0);
        if j != k {
            assert!(cov[(j, j)] > 0.0);
        }
    }
}

#[test]
fn wald_standard_normal_cases() {
    let w = wald_from(0.0, 1.0);
    assert_relative_eq!(w.p.unwrap(), 1.0, max_relative = 1e-15);
    assert_relative_eq!(w.ci95.0, -1.959963984540054, max_relative = 1e-12);
    assert_relative_eq!(w.ci95.1, 1.959963984540054, max_relative = 1e-12);
    let w = wald_from(1.959963984540054, 1.0);
    assert_relative_eq!(w.p.unwrap(), 0.05, max_relative = 1e-9);
    let w = wald_from(0.3, 0.0);
    assert!(w.p.is_none() && w.z.is_none() && w.flag.is_some());
}

#[test]
fn contrast_matches_quadratic_form() {
    let (_, f) = study1_fit();
    let d = f.covariance.len();
    let c: Vec<f64> = (0..d).map(|i| if i < 2 { 1.0 } else if i == 3 { -0.5 } else { 0.0 }).collect();
    let w = wald_contrast(f, &c).unwrap();
    let cov = f.covariance_matrix();
    let cv = nalgebra::DVector::from_vec(c.clone());
    let se = (cv.transpose() * &cov * &cv)[0].sqrt();
    let est: f64 = c.iter().zip(f.zeta()).map(|(a, b)| a * b).sum();
    assert_relative_eq!(w.estimate, est, max_relative = 1e-14);
    assert_relative_eq!(w.se, se, max_relative = 1e-12);
    assert!(wald_contrast(f, &[1.0]).is_err());
}

#[test]
fn covariance_is_symmetric_with_nonnegative_diagonal() {
    let (_, f) = study1_fit();
    let cov = f.covariance_matrix();
    assert_relative_eq!(cov.clone(), cov.transpose(), epsilon = 1e-12);
    let th = f.spec.layout().theta();
    for i in 0..cov.nrows() {
        if th.contains(&i) && f.active_set.contains(&(i - th.start)) {
            assert_eq!(cov[(i, i)], 0.0);
        } else {
            assert!(cov[(i, i)] > 0.0);
        }
    }
}

#[test]
fn band_matches_numeric_delta_method() {
    let (_, f) = study1_fit();
    let model = f.predictor();
    let zeta = f.zeta();
    let (x, w) = (vec![1.0], vec![]);
    let kappa = vec![0.0; f.spec.layout().n_kappa];
    let grid = [0.3, 0.8, 1.4];
    let curve = predict_survival(f, &x, &w, &kappa, &grid).unwrap();
    let cov = f.covariance_matrix();
    for (k, &t) in grid.iter().enumerate() {
        let h = model.cumulative_hazard_for(&zeta, &x, &w, &kappa, t).unwrap();
        let g: Vec<f64> = (0..zeta.len())
            .map(|j| {
                let step = 1e-6 * (1.0 + zeta[j].abs());
                let mut zp = zeta.clone();
                zp[j] += step;
                let mut zm = zeta.clone();
                zm[j] -= step;
                let hp = model.cumulative_hazard_for(&zp, &x, &w, &kappa, t).unwrap();
                let hm = model.cumulative_hazard_for(&zm, &x, &w, &kappa, t).unwrap();
                (hp.ln() - hm.ln()) / (2.0 * step)
            })
            .collect();
        let gv = nalgebra::DVector::from_vec(g);
        let se = (gv.transpose() * &cov * &gv)[0].sqrt();
        let lo = (-h * (1.959963984540054 * se).exp()).exp();
        let hi = (-h * (-1.959963984540054 * se).exp()).exp();
        assert_relative_eq!(curve.survival[k], (-h).exp(), max_relative = 1e-12);
        assert_relative_eq!(curve.lower[k], lo, max_relative = 1e-6);
        assert_relative_eq!(curve.upper[k], hi, max_relative = 1e-6);
    }
}

#[test]
fn survival_curve_edge_cases() {
    let (_, f) = study1_fit();
    let kappa = vec![0.0; f.spec.layout().n_kappa];
    let grid: Vec<f64> = (0..40).map(|k| k as f64 * 0.05).collect();
    let c = predict_survival(f, &[0.0], &[], &kappa, &grid).unwrap();
    assert_eq!((c.survival[0], c.lower[0], c.upper[0]), (1.0, 1.0, 1.0));
    for k in 0..grid.len() {
        assert!(c.lower[k] <= c.survival[k] && c.survival[k] <= c.upper[k]);
        if k > 0 {
            assert!(c.survival[k] <= c.survival[k - 1]);
        }
    }
    let mut zero = f.clone();
    zero.covariance = vec![vec![0.0; f.covariance.len()]; f.covariance.len()];
    let c = predict_survival(&zero, &[0.0], &[], &kappa, &grid).unwrap();
    assert_eq!(c.lower, c.survival);
    assert_eq!(c.upper, c.survival);
    assert!(predict_survival(f, &[0.0], &[], &kappa, &[-1.0]).is_err());
}

#[test]
fn conditional_survival_cases() {
    assert_eq!(format!("{:.2}", conditional_from(0.73, 0.61).unwrap()), "0.84");
    assert!(conditional_from(0.0, 0.0).is_err());
    let (_, f) = study1_fit();
    let kappa = vec![0.0; f.spec.layout().n_kappa];
    assert_eq!(conditional_survival(f, &[1.0], &[], &kappa, 0.7, 0.7).unwrap(), 1.0);
    assert!(conditional_survival(f, &[1.0], &[], &kappa, 0.7, 0.5).is_err());

    // constant hazard: H(t) = theta t exp(beta x)
    let (model, var) = two_group();
    let (state, _) = run_inner(&model, &initial_state(&model), &var, &InnerLoopConfig::default()).unwrap();
    let mut g = f.clone();
    g.spec = model.spec.clone();
    g.state = state.clone();
    g.covariance = vec![vec![0.0; model.layout.dzeta()]; model.layout.dzeta()];
    let c = state.theta[0] * state.beta[0].exp();
    let pi = conditional_survival(&g, &[1.0], &[], &[], 0.2, 0.9).unwrap();
    assert_relative_eq!(pi, (-c * 0.7).exp(), max_relative = 1e-12);
}

#[test]
fn individual_predictions() {
    let (ds, f) = study1_fit();
    let grid: Vec<f64> = (0..30).map(|k| k as f64 * 0.05).collect();
    let model = f.predictor();
    let zeta = f.zeta();
    let mut close = 0usize;
    let mut total = 0usize;
    let sigma = f.var.sigma_eps2.sqrt();
    for (i, s) in ds.subjects.iter().enumerate() {
        for r in &s.longitudinal {
            let z = model.mean_trajectory(&zeta, &s.w, &f.state.kappa[i], 0, r.time).unwrap();
            total += 1;
            close += usize::from((z - r.values[0]).abs() <= 2.0 * sigma);
        }
    }
    assert!(close as f64 >= 0.9 * total as f64, "{close}/{total}");
    let p = predict_individual(f, 0, &grid).unwrap();
    assert!(p.survival.survival.windows(2).all(|w| w[1] <= w[0]));
    let mut g = f.clone();
    g.state.kappa[0] = vec![0.0; g.state.kappa[0].len()];
    let p = predict_individual(&g, 0, &grid).unwrap();
    for (k, &t) in grid.iter().enumerate() {
        let mean = model.mean_trajectory(&zeta, &ds.subjects[0].w, &g.state.kappa[0], 0, t).unwrap();
        assert_eq!(p.trajectory[0][k], mean);
    }
    assert!(predict_individual(f, ds.n(), &grid).is_err());
}

#[test]
fn fit_json_round_trip() {
    let (_, f) = study1_fit();
    let s = f.to_json().unwrap();
    let back = FitResult::from_json(&s).unwrap();
    assert_eq!(back.to_json().unwrap(), s);
    let bad = s.replacen("\"schema_version\": 1", "\"schema_version\": 99", 1);
    assert!(FitResult::from_json(&bad).is_err());
}
