mod common;

use common::{normal_vec, random_matrix, rng};
use optprior::diagnostics::{
    default_deltas, difference_surface, ensemble, ensemble_models, impulse_response, response_surface,
    shapley_attribution, shapley_row, ShapleyMode,
};
use optprior::models::{Arch, Forecaster, LinearModel, LinearKind, ModelConfig, NeuralNet, Parameters};
use optprior::{Result, Tensor};
use proptest::prelude::*;

/// A forecaster from a plain function of one row.
struct FnModel<F: Fn(&[f64]) -> f64 + Sync> {
    l: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> f64 + Sync> Forecaster for FnModel<F> {
    fn lookback(&self) -> usize {
        self.l
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        Ok((0..x.rows()).map(|i| (self.f)(x.row(i))).collect())
    }
}

fn linear(weights: Vec<f64>, intercept: f64) -> LinearModel {
    LinearModel {
        kind: LinearKind::Ols,
        weights,
        intercept,
        alpha: 0.0,
        rank_deficient: false,
    }
}

/// Shapley values from the coalition formula
/// `φ_i = Σ_{S ⊆ N∖i} |S|!(n−|S|−1)!/n! · (v(S ∪ i) − v(S))`.
fn coalition_shapley(f: &dyn Fn(&[f64]) -> f64, x: &[f64], bg: &[f64]) -> Vec<f64> {
    let n = x.len();
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    let value = |mask: usize| {
        let z: Vec<f64> = (0..n).map(|j| if mask >> j & 1 == 1 { x[j] } else { bg[j] }).collect();
        f(&z)
    };
    (0..n)
        .map(|i| {
            (0..1usize << n)
                .filter(|m| m >> i & 1 == 0)
                .map(|m| {
                    let s = m.count_ones() as usize;
                    fact(s) * fact(n - s - 1) / fact(n) * (value(m | 1 << i) - value(m))
                })
                .sum()
        })
        .collect()
}

fn mlp_fn(net: &NeuralNet) -> impl Fn(&[f64]) -> f64 + '_ {
    move |z: &[f64]| net.predict_one(z).unwrap()
}

#[test]
fn exhaustive_shapley_matches_coalition_formula() {
    for l in 2..=6 {
        let net = NeuralNet::init(ModelConfig::tiny(Arch::Mlp, l), l as u64).unwrap();
        let net = NeuralNet {
            params: jitter(&net.params, l as u64),
            ..net
        };
        let mut r = rng(l as u64);
        let x = normal_vec(&mut r, l);
        let bg = normal_vec(&mut r, l);
        let got = shapley_row(&net, &x, &bg, ShapleyMode::Exhaustive, &mut r).unwrap();
        let want = coalition_shapley(&mlp_fn(&net), &x, &bg);
        for (a, b) in got.phi.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "L={l}: {a} vs {b}");
        }
        let gap = net.predict_one(&x).unwrap() - net.predict_one(&bg).unwrap();
        assert!((got.phi.iter().sum::<f64>() - gap).abs() < 1e-12);
        assert_eq!(got.gap, gap);
    }
}

/// Moves every parameter, biases included, off its initial value.
fn jitter(p: &Parameters, seed: u64) -> Parameters {
    let e = normal_vec(&mut rng(seed + 100), p.num_params());
    let theta: Vec<f64> = p.flatten().iter().zip(e).map(|(t, e)| t + 0.3 * e).collect();
    p.with_flat(&theta).unwrap()
}

#[test]
fn two_lag_shapley_matches_brute_force() {
    let f = |z: &[f64]| (z[0] * z[1]).sin() + z[0] * z[0] - 0.5 * z[1];
    let m = FnModel { l: 2, f };
    let (x, bg) = ([1.3, -0.4], [0.2, 0.9]);
    let v = |a: f64, b: f64| f(&[a, b]);
    let phi0 = 0.5 * ((v(x[0], bg[1]) - v(bg[0], bg[1])) + (v(x[0], x[1]) - v(bg[0], x[1])));
    let phi1 = 0.5 * ((v(bg[0], x[1]) - v(bg[0], bg[1])) + (v(x[0], x[1]) - v(x[0], bg[1])));
    let r = shapley_row(&m, &x, &bg, ShapleyMode::Exhaustive, &mut rng(0)).unwrap();
    assert!((r.phi[0] - phi0).abs() < 1e-15);
    assert!((r.phi[1] - phi1).abs() < 1e-15);
}

#[test]
fn linear_shapley_closed_form() {
    let w: Vec<f64> = normal_vec(&mut rng(1), 30);
    let m = linear(w.clone(), 0.7);
    let rows = random_matrix(&mut rng(2), 5, 30);
    let bg = normal_vec(&mut rng(3), 30);
    for mode in [ShapleyMode::Sampled(1), ShapleyMode::Sampled(7)] {
        let rep = shapley_attribution(&m, &rows, &bg, mode, 4).unwrap();
        for (i, row) in rep.rows.iter().enumerate() {
            for k in 0..30 {
                let want = w[k] * (rows.row(i)[k] - bg[k]);
                assert!((row.phi[k] - want).abs() < 1e-12, "{k}: {} vs {want}", row.phi[k]);
            }
        }
    }
}

#[test]
fn background_row_gets_zero_attribution() {
    let net = NeuralNet::init(ModelConfig::tiny(Arch::Lstm, 5), 3).unwrap();
    let bg = normal_vec(&mut rng(3), 5);
    let r = shapley_row(&net, &bg, &bg, ShapleyMode::Exhaustive, &mut rng(0)).unwrap();
    assert!(r.phi.iter().all(|&p| p == 0.0));
}

#[test]
fn symmetric_lags_share_credit() {
    let m = FnModel {
        l: 5,
        f: |z: &[f64]| (z[1] + z[3]).tanh() * z[0] + z[1] * z[3] * z[4] + z[2],
    };
    let x = [0.4, 0.9, -1.1, 0.9, 1.7];
    let r = shapley_row(&m, &x, &[0.0; 5], ShapleyMode::Exhaustive, &mut rng(0)).unwrap();
    assert!((r.phi[1] - r.phi[3]).abs() < 1e-14);
    assert!((r.phi[2] - -1.1).abs() < 1e-14);
}

/// `Σ w_k x_k + x_3 x_7 + x_10 x_20 x_30` with a zero background: each
/// interaction term is split equally among its lags.
fn interaction(z: &[f64]) -> f64 {
    let lin: f64 = z.iter().enumerate().map(|(k, v)| (0.01 * k as f64 - 0.5) * v).sum();
    lin + z[3] * z[7] + z[10] * z[20] * z[30]
}

#[test]
fn sampled_shapley_is_within_four_standard_errors() {
    let m = FnModel { l: 100, f: interaction };
    let rows = random_matrix(&mut rng(8), 4, 100);
    let rep = shapley_attribution(&m, &rows, &[0.0; 100], ShapleyMode::Sampled(64), 11).unwrap();
    assert_eq!(rep.n_perm, 64);
    for (i, row) in rep.rows.iter().enumerate() {
        let x = rows.row(i);
        let mut exact: Vec<f64> = (0..100).map(|k| (0.01 * k as f64 - 0.5) * x[k]).collect();
        exact[3] += 0.5 * x[3] * x[7];
        exact[7] += 0.5 * x[3] * x[7];
        for k in [10, 20, 30] {
            exact[k] += x[10] * x[20] * x[30] / 3.0;
        }
        for k in 0..100 {
            let tol = 4.0 * row.stderr[k] + 1e-12;
            assert!((row.phi[k] - exact[k]).abs() <= tol, "row {i} lag {k}: {} vs {}", row.phi[k], exact[k]);
        }
        assert!((row.phi.iter().sum::<f64>() - row.gap).abs() < 1e-10);
    }
}

#[test]
fn sampled_mlp_estimate_agrees_with_long_run() {
    let cfg = ModelConfig::desk(Arch::Mlp, 100);
    let net = NeuralNet::init(cfg, 5).unwrap();
    let net = NeuralNet {
        params: jitter(&net.params, 5),
        ..net
    };
    let x = normal_vec(&mut rng(6), 100);
    let short = shapley_row(&net, &x, &[0.0; 100], ShapleyMode::Sampled(64), &mut rng(1)).unwrap();
    let long = shapley_row(&net, &x, &[0.0; 100], ShapleyMode::Sampled(4096), &mut rng(2)).unwrap();
    let mut outside = 0;
    for k in 0..100 {
        let se = (short.stderr[k].powi(2) + long.stderr[k].powi(2)).sqrt();
        if (short.phi[k] - long.phi[k]).abs() > 4.0 * se + 1e-12 {
            outside += 1;
        }
    }
    assert!(outside <= 1, "{outside} lags outside 4 SE");
}

#[test]
fn shapley_input_errors() {
    let m = linear(vec![1.0; 10], 0.0);
    let rows = Tensor::zeros(&[2, 10]);
    assert!(shapley_attribution(&m, &rows, &[0.0; 10], ShapleyMode::Exhaustive, 0).is_err());
    assert!(shapley_attribution(&m, &rows, &[0.0; 10], ShapleyMode::Sampled(0), 0).is_err());
    assert!(shapley_attribution(&m, &Tensor::zeros(&[2, 9]), &[0.0; 10], ShapleyMode::Sampled(2), 0).is_err());
}

#[test]
fn attribution_is_seed_deterministic() {
    let net = NeuralNet::init(ModelConfig::tiny(Arch::Cnn, 12), 1).unwrap();
    let rows = random_matrix(&mut rng(1), 6, 12);
    let a = shapley_attribution(&net, &rows, &[0.0; 12], ShapleyMode::Sampled(16), 3).unwrap();
    let b = shapley_attribution(&net, &rows, &[0.0; 12], ShapleyMode::Sampled(16), 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn linear_impulse_is_affine() {
    let m = linear(vec![0.5, -2.0, 1.5], 0.25);
    let d = default_deltas();
    for k in 0..3 {
        let c = impulse_response(&m, k, &d).unwrap();
        for (v, delta) in c.iter().zip(&d) {
            assert!((v - (0.25 + delta * m.weights[k])).abs() < 1e-14);
        }
    }
    assert!(impulse_response(&m, 3, &d).is_err());
}

#[test]
fn zero_shock_is_shared_by_all_lags() {
    let net = NeuralNet::init(ModelConfig::tiny(Arch::Transformer, 8), 2).unwrap();
    let base = impulse_response(&net, 0, &[0.0]).unwrap()[0];
    for k in 1..8 {
        assert_eq!(impulse_response(&net, k, &[0.0]).unwrap()[0], base);
    }
}

/// Hidden-unit sign pattern of a tiny MLP, evaluated by hand.
fn relu_pattern(p: &Parameters, z: &[f64]) -> Vec<bool> {
    let mut h = z.to_vec();
    let mut pattern = Vec::new();
    for i in 0.. {
        let Some(w) = p.get(&format!("mlp.{i}.weight")) else { break };
        let b = p.get(&format!("mlp.{i}.bias")).unwrap().data();
        let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
        let pre: Vec<f64> = (0..fan_out)
            .map(|o| b[o] + (0..fan_in).map(|j| h[j] * w.data()[j * fan_out + o]).sum::<f64>())
            .collect();
        pattern.extend(pre.iter().map(|&v| v > 0.0));
        h = pre.iter().map(|v| v.max(0.0)).collect();
    }
    pattern
}

#[test]
fn mlp_impulse_bends_only_where_units_switch() {
    let cfg = ModelConfig::tiny(Arch::Mlp, 6);
    let net = NeuralNet::init(cfg, 4).unwrap();
    let net = NeuralNet {
        params: jitter(&net.params, 4),
        ..net
    };
    let d: Vec<f64> = (0..=4000).map(|i| -4.0 + 0.002 * i as f64).collect();
    for k in 0..6 {
        let c = impulse_response(&net, k, &d).unwrap();
        let patterns: Vec<Vec<bool>> = d
            .iter()
            .map(|&delta| {
                let mut z = vec![0.0; 6];
                z[k] = delta;
                relu_pattern(&net.params, &z)
            })
            .collect();
        let mut kinks = 0;
        for i in 1..d.len() - 1 {
            let second = c[i + 1] - 2.0 * c[i] + c[i - 1];
            let same = patterns[i - 1] == patterns[i] && patterns[i] == patterns[i + 1];
            if same {
                assert!(second.abs() < 1e-12, "lag {k} at δ = {}: {second}", d[i]);
            } else {
                kinks += 1;
            }
        }
        assert!(kinks < 100, "{kinks}");
    }
}

#[test]
fn difference_surfaces_of_linear_models() {
    let lags: Vec<usize> = (0..5).collect();
    let d = default_deltas();
    let a = response_surface(&linear(vec![0.5, -1.0, 2.0, 0.3, 0.0], 0.1), &lags, &d).unwrap();
    let b = response_surface(&linear(vec![-0.2, 0.4, 1.0, 0.3, 1.0], -0.3), &lags, &d).unwrap();
    let ab = difference_surface(&a, &b).unwrap();
    assert!(ab.planarity < 1e-8);
    let aa = difference_surface(&a, &a).unwrap();
    assert!(aa.values.iter().all(|&v| v == 0.0));
    assert_eq!((aa.planarity, aa.global_planarity), (0.0, 0.0));
    let ba = difference_surface(&b, &a).unwrap();
    for (x, y) in ab.values.iter().zip(&ba.values) {
        assert_eq!(*x, -*y);
    }
}

#[test]
fn random_mlps_give_curved_difference_surfaces() {
    let cfg = ModelConfig::desk(Arch::Mlp, 20);
    let a = NeuralNet::init(cfg.clone(), 1).unwrap();
    let b = NeuralNet::init(cfg, 2).unwrap();
    let lags: Vec<usize> = (0..20).collect();
    let d = default_deltas();
    let s = difference_surface(&response_surface(&a, &lags, &d).unwrap(), &response_surface(&b, &lags, &d).unwrap())
        .unwrap();
    assert!(s.planarity > 0.0);
    assert!(s.global_planarity > 0.0);
}

#[test]
fn mismatched_grids_are_rejected() {
    let m = linear(vec![1.0; 4], 0.0);
    let a = response_surface(&m, &[0, 1], &[0.0, 1.0]).unwrap();
    let b = response_surface(&m, &[0, 2], &[0.0, 1.0]).unwrap();
    assert!(difference_surface(&a, &b).is_err());
}

#[test]
fn identical_members_have_no_ambiguity() {
    let y = normal_vec(&mut rng(1), 50);
    let p: Vec<f64> = y.iter().map(|v| 0.8 * v + 0.1).collect();
    let ids: Vec<String> = (0..3).map(|i| format!("m{i}")).collect();
    let r = ensemble(&ids, &[p.clone(), p.clone(), p.clone()], &y).unwrap();
    assert!(r.ambiguity < 1e-20);
    assert!((r.ensemble_nmse - r.member_nmse[0]).abs() < 1e-12);
}

#[test]
fn plus_minus_one_members_cancel() {
    let y = normal_vec(&mut rng(2), 40);
    let up: Vec<f64> = y.iter().map(|v| v + 1.0).collect();
    let down: Vec<f64> = y.iter().map(|v| v - 1.0).collect();
    let r = ensemble(&["a".into(), "b".into()], &[up, down], &y).unwrap();
    assert!(r.ensemble_mse < 1e-30);
    assert!((r.ambiguity_mse - 1.0).abs() < 1e-12);
    assert!((r.member_mse[0] - 1.0).abs() < 1e-12);
}

#[test]
fn ensemble_of_models_matches_prediction_route() {
    let x = random_matrix(&mut rng(3), 30, 8);
    let y = normal_vec(&mut rng(4), 30);
    let a = NeuralNet::init(ModelConfig::tiny(Arch::Mlp, 8), 1).unwrap();
    let b = linear(vec![0.1; 8], 0.0);
    let ids = vec!["mlp".to_string(), "ols".to_string()];
    let via_models = ensemble_models(&ids, &[&a, &b], &x, &y).unwrap();
    let via_preds = ensemble(&ids, &[a.predict(&x).unwrap(), b.predict(&x).unwrap()], &y).unwrap();
    assert_eq!(via_models, via_preds);
    assert!(ensemble(&ids[..1], &[y.clone()], &y).is_err());
    assert!(ensemble(&ids, &[y.clone(), y[1..].to_vec()], &y).is_err());
}

proptest! {
    #[test]
    fn ambiguity_decomposition_holds(seed in 0u64..10_000, m in 2usize..7, n in 2usize..60) {
        let mut r = rng(seed);
        let y = normal_vec(&mut r, n);
        let preds: Vec<Vec<f64>> = (0..m).map(|_| normal_vec(&mut r, n)).collect();
        let ids: Vec<String> = (0..m).map(|i| i.to_string()).collect();
        let rep = ensemble(&ids, &preds, &y).unwrap();
        // brute force both sides
        let ens: Vec<f64> = (0..n).map(|t| preds.iter().map(|p| p[t]).sum::<f64>() / m as f64).collect();
        let err = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / n as f64;
        let lhs = err(&ens, &y);
        let rhs = preds.iter().map(|p| err(p, &y)).sum::<f64>() / m as f64
            - preds.iter().map(|p| err(p, &ens)).sum::<f64>() / m as f64;
        prop_assert!((lhs - rhs).abs() < 1e-10);
        prop_assert!(rep.decomposition_gap < 1e-10);
        prop_assert!((rep.ensemble_mse - lhs).abs() < 1e-12);
        let mean_nmse = rep.member_nmse.iter().sum::<f64>() / m as f64;
        prop_assert!(rep.ensemble_nmse <= mean_nmse + 1e-12);
        prop_assert!((rep.ensemble_nmse - (mean_nmse - rep.ambiguity)).abs() < 1e-10);
    }

    #[test]
    fn difference_is_antisymmetric(s1 in 0u64..500, s2 in 0u64..500, arch_i in 0usize..4) {
        let cfg = ModelConfig::tiny(Arch::GRID[arch_i], 8);
        let a = NeuralNet::init(cfg.clone(), s1).unwrap();
        let b = NeuralNet::init(cfg, s2).unwrap();
        let lags = [0usize, 3, 7];
        let d = [-2.0, -0.5, 0.0, 1.0, 3.5];
        let sa = response_surface(&a, &lags, &d).unwrap();
        let sb = response_surface(&b, &lags, &d).unwrap();
        let ab = difference_surface(&sa, &sb).unwrap();
        let ba = difference_surface(&sb, &sa).unwrap();
        for (x, y) in ab.values.iter().zip(&ba.values) {
            prop_assert_eq!(*x, -*y);
        }
    }

    #[test]
    fn sampled_shapley_is_efficient(seed in 0u64..1000, n_perm in 1usize..9) {
        let net = NeuralNet::init(ModelConfig::tiny(Arch::Lstm, 7), seed).unwrap();
        let mut r = rng(seed);
        let x = normal_vec(&mut r, 7);
        let row = shapley_row(&net, &x, &[0.0; 7], ShapleyMode::Sampled(n_perm), &mut r).unwrap();
        prop_assert!((row.phi.iter().sum::<f64>() - row.gap).abs() < 1e-12);
    }
}
