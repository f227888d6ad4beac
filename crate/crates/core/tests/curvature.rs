mod common;

use common::{eigenvalues, line_fit, linear_data, normal_vec, pinv_ols, random_matrix, random_symmetric, rng, symmetric_with_spectrum};
use optprior::curvature::{
    batch_sharpness, extrapolate, first_crossing, fit_scaling_law, hvp, lambda_max, record_trace, run_intervention,
    stable_set_member, within_stable_set, CurvatureConfig, CurvatureTrace, InterventionSpec, NeuralObjective,
    Objective, PowerConfig, Quadratic, REPORTED_ENTRY_PAIRS, REPORTED_TARGET_SIZE,
};
use optprior::diagnostics::default_deltas;
use optprior::gradengine::flat_grad;
use optprior::ingest::Subset;
use optprior::models::{init, Arch, ModelConfig, Parameters};
use optprior::optim::{OptimizerConfig, OptimizerKind};
use optprior::Tensor;
use proptest::prelude::*;

fn matvec(a: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    d / dot(b, b).sqrt().max(1e-300)
}

/// Dense Hessian from central differences of every gradient coordinate,
/// symmetrised.
fn dense_hessian(obj: &dyn Objective, theta: &[f64], h: f64) -> Vec<f64> {
    let n = theta.len();
    let mut hess = vec![0.0; n * n];
    let mut t = theta.to_vec();
    for j in 0..n {
        t[j] = theta[j] + h;
        let gp = obj.loss_grad(&t).unwrap().1;
        t[j] = theta[j] - h;
        let gm = obj.loss_grad(&t).unwrap().1;
        t[j] = theta[j];
        for i in 0..n {
            hess[i * n + j] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (hess[i * n + j] + hess[j * n + i]);
            hess[i * n + j] = s;
            hess[j * n + i] = s;
        }
    }
    hess
}

struct Tiny {
    cfg: ModelConfig,
    params: Parameters,
    x: Tensor,
    y: Vec<f64>,
}

fn tiny(arch: Arch, seed: u64) -> Tiny {
    let mut cfg = ModelConfig::tiny(arch, 4);
    cfg.lstm_hidden = 3;
    cfg.tf_layers = 1;
    cfg.tf_ff_mult = 1;
    cfg.tf_head = vec![3];
    let p = init(&cfg, seed).unwrap();
    let e = normal_vec(&mut rng(seed + 50), p.num_params());
    let theta: Vec<f64> = p.flatten().iter().zip(e).map(|(t, e)| t + 0.2 * e).collect();
    let mut r = rng(seed);
    Tiny {
        params: p.with_flat(&theta).unwrap(),
        x: random_matrix(&mut r, 12, 4),
        y: normal_vec(&mut r, 12),
        cfg,
    }
}

impl Tiny {
    fn objective(&self) -> NeuralObjective<'_> {
        NeuralObjective {
            model: &self.cfg,
            template: &self.params,
            inputs: &self.x,
            targets: &self.y,
        }
    }
}

#[test]
fn hvp_on_quadratic_is_matrix_product() {
    let n = 12;
    let a = random_symmetric(&mut rng(1), n);
    let q = Quadratic::new(n, a.clone()).unwrap();
    let theta = normal_vec(&mut rng(2), n);
    for s in 0..5 {
        let v = normal_vec(&mut rng(10 + s), n);
        assert!(rel_err(&hvp(&q, &theta, &v).unwrap(), &matvec(&a, &v)) < 1e-6);
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let (h1, h2) = (hvp(&q, &theta, &v).unwrap(), hvp(&q, &theta, &v2).unwrap());
        for (a, b) in h1.iter().zip(&h2) {
            assert!((2.0 * a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
    }
    assert!(hvp(&q, &theta, &vec![0.0; n]).is_err());
}

#[test]
fn hvp_matches_dense_hessian_on_small_networks() {
    for arch in Arch::GRID {
        let t = tiny(arch, 3);
        let obj = t.objective();
        let n = obj.dim();
        assert!(n <= 200, "{arch}: {n} parameters");
        let theta = t.params.flatten();
        let hess = dense_hessian(&obj, &theta, 1e-5);
        for s in 0..3 {
            let v = normal_vec(&mut rng(20 + s), n);
            let e = rel_err(&hvp(&obj, &theta, &v).unwrap(), &matvec(&hess, &v));
            assert!(e < 1e-3, "{arch}: {e}");
        }
    }
}

#[test]
fn hvp_is_symmetric() {
    // at this point no ReLU pre-activation lies within h of zero; elsewhere a
    // stencil that straddles a kink is not symmetric
    for arch in Arch::GRID {
        let t = tiny(arch, 3);
        let obj = t.objective();
        let theta = t.params.flatten();
        let mut r = rng(4);
        for _ in 0..10 {
            let u = normal_vec(&mut r, obj.dim());
            let v = normal_vec(&mut r, obj.dim());
            let uhv = dot(&u, &hvp(&obj, &theta, &v).unwrap());
            let vhu = dot(&v, &hvp(&obj, &theta, &u).unwrap());
            assert!((uhv - vhu).abs() <= 1e-4 * uhv.abs().max(vhu.abs()).max(1e-3), "{arch}: {uhv} vs {vhu}");
        }
    }
}

#[test]
fn diag_five_one() {
    let r = lambda_max(&Quadratic::diag(&[5.0, 1.0]), &[0.3, -0.2], &PowerConfig::default(), None).unwrap();
    assert!((r.lambda - 5.0).abs() < 1e-4);
    assert!(r.converged);
}

#[test]
fn identity_takes_one_effective_iteration() {
    let r = lambda_max(&Quadratic::diag(&[1.0; 9]), &[0.0; 9], &PowerConfig::default(), None).unwrap();
    assert!((r.lambda - 1.0).abs() < 1e-8);
    assert!((r.history[0] - 1.0).abs() < 1e-8);
}

#[test]
fn random_50_by_50_matches_eigensolver() {
    for seed in 0..3 {
        let n = 50;
        let mut a = random_symmetric(&mut rng(seed), n);
        let shift = -eigenvalues(&a, n)[0] + 1.0;
        for i in 0..n {
            a[i * n + i] += shift;
        }
        let top = *eigenvalues(&a, n).last().unwrap();
        let cfg = PowerConfig {
            iters: 3000,
            tol: 1e-12,
            seed,
        };
        let r = lambda_max(&Quadratic::new(n, a).unwrap(), &vec![0.0; n], &cfg, None).unwrap();
        assert!((r.lambda - top).abs() <= 1e-3 * top, "seed {seed}: {} vs {top}", r.lambda);
    }
}

#[test]
fn known_spectra_and_step_size_threshold() {
    let eig = [0.3, 1.0, 2.5, 7.0, 7.5, 12.0];
    let a = symmetric_with_spectrum(&mut rng(5), &eig);
    let q = Quadratic::new(6, a).unwrap();
    let cfg = PowerConfig {
        iters: 500,
        tol: 1e-12,
        seed: 1,
    };
    let r = lambda_max(&q, &[0.0; 6], &cfg, None).unwrap();
    assert!((r.lambda - 12.0).abs() <= 1e-3 * 12.0);
    // 2/η on either side of the top eigenvalue
    assert!(stable_set_member(&q, &[0.0; 6], 2.0 / 12.5, &cfg).unwrap().member);
    assert!(!stable_set_member(&q, &[0.0; 6], 2.0 / 11.5, &cfg).unwrap().member);
    assert!(within_stable_set(1.0, 1.0));
    assert!(!within_stable_set(1.0, 3.0));
    assert!(within_stable_set(4.0, 0.5));
}

#[test]
fn power_iteration_is_monotone_on_psd_quadratics() {
    for seed in 0..5 {
        let eig: Vec<f64> = (0..15).map(|i| 0.1 + i as f64 * 0.7).collect();
        let q = Quadratic::new(15, symmetric_with_spectrum(&mut rng(seed), &eig)).unwrap();
        let cfg = PowerConfig {
            iters: 60,
            tol: 0.0,
            seed,
        };
        let r = lambda_max(&q, &[0.0; 15], &cfg, None).unwrap();
        for w in r.history.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{:?}", w);
        }
    }
}

#[test]
fn batch_sharpness_closed_form() {
    let n = 8;
    let a = symmetric_with_spectrum(&mut rng(6), &[0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let b = normal_vec(&mut rng(7), n);
    let q = Quadratic::with_linear(n, a.clone(), b.clone()).unwrap();
    let theta = normal_vec(&mut rng(8), n);
    let g: Vec<f64> = matvec(&a, &theta).iter().zip(&b).map(|(x, y)| x - y).collect();
    let want = dot(&g, &matvec(&a, &g)) / dot(&g, &g);
    let got = batch_sharpness(&[q], &theta).unwrap();
    assert!((got.value - want).abs() < 1e-6, "{} vs {want}", got.value);

    let iso = Quadratic::diag(&[3.5; 5]);
    for s in 0..3 {
        let th = normal_vec(&mut rng(30 + s), 5);
        assert!((batch_sharpness(&[iso.clone()], &th).unwrap().value - 3.5).abs() < 1e-8);
    }
}

#[test]
fn batch_sharpness_respects_rayleigh_bounds() {
    let t = tiny(Arch::Mlp, 9);
    let theta = t.params.flatten();
    let batches: Vec<(Tensor, Vec<f64>)> = (0..4)
        .map(|k| {
            let rows: Vec<usize> = (3 * k..3 * k + 3).collect();
            (t.x.select_rows(&rows), rows.iter().map(|&i| t.y[i]).collect())
        })
        .collect();
    let objs: Vec<NeuralObjective> = batches
        .iter()
        .map(|(x, y)| NeuralObjective {
            model: &t.cfg,
            template: &t.params,
            inputs: x,
            targets: y,
        })
        .collect();
    let bs = batch_sharpness(&objs, &theta).unwrap();
    for (o, v) in objs.iter().zip(&bs.per_batch) {
        let ev = eigenvalues(&dense_hessian(o, &theta, 1e-5), theta.len());
        let (lo, hi) = (ev[0], *ev.last().unwrap());
        let tol = 1e-3 * hi.abs().max(lo.abs());
        assert!(*v >= lo - tol && *v <= hi + tol, "{v} outside [{lo}, {hi}]");
    }
}

#[test]
fn first_crossing_examples() {
    assert_eq!(first_crossing(&[1.0, 2.0, 3.0], 2.5), Some(2));
    assert_eq!(first_crossing(&[1.0, 2.0, 2.4], 2.5), None);
    assert_eq!(first_crossing(&[2.5, 1.0, 2.5], 2.5), None);
    let mut tr = CurvatureTrace::new(0.8);
    for (s, l) in [(0, 1.0), (50, 2.0), (100, 3.0)] {
        tr.push(s, l, l, 0.0);
    }
    assert_eq!(tr.eos_entry(), Some(2));
    assert_eq!(tr.entry_step(), Some(100));
}

#[test]
fn scaling_fit_recovers_exact_power_law() {
    let pairs: Vec<(f64, f64)> = [1e3, 4e3, 3e4, 2e5, 1e6].iter().map(|&d: &f64| (d, 2.0 * d.sqrt())).collect();
    let f = fit_scaling_law(&pairs).unwrap();
    assert!((f.alpha - 2.0).abs() < 1e-9);
    assert!((f.beta - 0.5).abs() < 1e-9);
    assert!((f.r2 - 1.0).abs() < 1e-12);
}

#[test]
fn reported_pairs_fit_matches_independent_regression() {
    let f = fit_scaling_law(&REPORTED_ENTRY_PAIRS).unwrap();
    let xs: Vec<f64> = REPORTED_ENTRY_PAIRS.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = REPORTED_ENTRY_PAIRS.iter().map(|p| p.1.ln()).collect();
    let (b0, b1) = line_fit(&xs, &ys);
    // the same line through an SVD least-squares solve
    let (p0, p1) = pinv_ols(&Tensor::new(vec![4, 1], xs.clone()).unwrap(), &ys);
    assert!((b0 - p0).abs() < 1e-9 && (b1 - p1[0]).abs() < 1e-9);
    assert!((f.beta - b1).abs() < 1e-9);
    assert!((f.alpha.ln() - b0).abs() < 1e-9);
    let t = extrapolate(&f, REPORTED_TARGET_SIZE);
    let oracle = (b0 + b1 * REPORTED_TARGET_SIZE.ln()).exp();
    assert!((t - oracle).abs() <= 1e-9 * oracle);
    // frozen: β ≈ 0.9436 and about 2.35e5 steps at D = 2.3e6
    assert!((f.beta - 0.94364).abs() < 1e-4, "{}", f.beta);
    assert!((t - 235_111.0).abs() < 50.0, "{t}");
}

fn exact_linear_subset(n: usize) -> (Subset, Vec<f64>, f64) {
    let w = [0.8, -0.3, 0.5, 0.1];
    let (x, y) = linear_data(12, n, &w, 0.2, 0.3);
    let (b, wt) = pinv_ols(&x, &y);
    let s = Subset {
        inputs: x,
        targets: y,
        rows: (0..n).collect(),
    };
    (s, wt, b)
}

fn intervention(source: OptimizerConfig, target: OptimizerConfig, swap: usize, cont: usize, n: usize) -> InterventionSpec {
    InterventionSpec {
        model: ModelConfig::tiny(Arch::Linear, 4),
        source,
        target,
        swap_step: swap,
        continue_steps: cont,
        batch_size: n,
        seed: 3,
        lags: (0..4).collect(),
        deltas: default_deltas(),
        probe_rows: n,
        power: PowerConfig::default(),
    }
}

#[test]
fn convex_swap_lands_on_the_unique_minimizer() {
    let n = 256;
    let (data, w, b) = exact_linear_subset(n);
    let cfg = ModelConfig::tiny(Arch::Linear, 4);
    let init_p = init(&cfg, 1).unwrap();
    let spec = intervention(
        OptimizerConfig::new(OptimizerKind::Adam, 0.01, 0.0),
        OptimizerConfig::new(OptimizerKind::Sgd, 0.2, 0.0),
        200,
        3000,
        n,
    );
    let rep = run_intervention(&spec, &init_p, &data).unwrap();
    let post = rep.post_params.unwrap();
    let pw = post.get("head.weight").unwrap().data();
    for (a, e) in pw.iter().zip(&w) {
        assert!((a - e).abs() < 1e-8, "{a} vs {e}");
    }
    assert!((post.get("head.bias").unwrap().data()[0] - b).abs() < 1e-8);
    assert!(rep.param_distance < 1e-8);
    assert!(rep.difference.planarity < 1e-6);
    assert!(rep.difference.max_abs() < 1e-6);
    // the probe Hessian of an MSE linear model is 2·[1 X]ᵀ[1 X]/n
    assert!((rep.lambda_post - rep.lambda_baseline).abs() < 1e-4 * rep.lambda_baseline);
}

#[test]
fn swapping_plain_sgd_for_itself_changes_nothing() {
    let n = 64;
    let (data, _, _) = exact_linear_subset(n);
    for arch in [Arch::Linear, Arch::Mlp] {
        let cfg = ModelConfig::tiny(arch, 4);
        let p = init(&cfg, 2).unwrap();
        let sgd = OptimizerConfig::new(OptimizerKind::Sgd, 0.05, 0.0);
        let mut spec = intervention(sgd.clone(), sgd, 7, 9, 16);
        spec.model = cfg;
        let rep = run_intervention(&spec, &p, &data).unwrap();
        assert_eq!(rep.param_distance, 0.0, "{arch}");
        assert!(rep.difference.values.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn swap_at_step_zero_is_the_target_from_init() {
    let n = 64;
    let (data, _, _) = exact_linear_subset(n);
    let cfg = ModelConfig::tiny(Arch::Mlp, 4);
    let p = init(&cfg, 2).unwrap();
    let mut spec = intervention(
        OptimizerConfig::new(OptimizerKind::Muon, 0.01, 0.1),
        OptimizerConfig::new(OptimizerKind::Adam, 1e-3, 0.0),
        0,
        12,
        16,
    );
    spec.model = cfg;
    let rep = run_intervention(&spec, &p, &data).unwrap();
    assert_eq!(rep.param_distance, 0.0);
    assert_eq!(rep.swap_params.unwrap(), p);
}

#[test]
fn trace_is_deterministic_and_sampled_on_cadence() {
    let n = 96;
    let (data, _, _) = exact_linear_subset(n);
    let cfg = ModelConfig::tiny(Arch::Mlp, 4);
    let p = init(&cfg, 5).unwrap();
    let ccfg = CurvatureConfig {
        steps: 25,
        every: 10,
        probe_rows: 64,
        sharpness_batches: 2,
        power: PowerConfig {
            iters: 30,
            tol: 1e-6,
            seed: 0,
        },
        ..CurvatureConfig::default()
    };
    let opt = OptimizerConfig::new(OptimizerKind::Sgd, 0.05, 0.0);
    let (a, pa) = record_trace(&cfg, p.clone(), &opt, &data, 32, 1, &ccfg).unwrap();
    let (b, pb) = record_trace(&cfg, p, &opt, &data, 32, 1, &ccfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.steps, vec![0, 10, 20, 25]);
    assert_eq!(a.threshold, 2.0 / 0.05);
    assert!(a.lambda_max.iter().all(|l| l.is_finite()));
}

#[test]
fn flat_gradient_matches_objective() {
    let t = tiny(Arch::Transformer, 1);
    let theta = t.params.flatten();
    let (l1, g1) = t.objective().loss_grad(&theta).unwrap();
    let (l2, g2) = flat_grad(&t.cfg, &t.params, &theta, &t.x, &t.y).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}

proptest! {
    #[test]
    fn entry_ignores_values_after_crossing(
        before in prop::collection::vec(0.0f64..2.0, 0..20),
        cross in 2.01f64..10.0,
        after in prop::collection::vec(-5.0f64..50.0, 0..20),
    ) {
        let mut v = before.clone();
        v.push(cross);
        let base = first_crossing(&v, 2.0);
        prop_assert_eq!(base, Some(before.len()));
        v.extend(after);
        prop_assert_eq!(first_crossing(&v, 2.0), base);
    }

    #[test]
    fn hvp_is_linear_on_quadratics(seed in 0u64..1000, c in 0.1f64..10.0) {
        let n = 6;
        let q = Quadratic::new(n, random_symmetric(&mut rng(seed), n)).unwrap();
        let mut r = rng(seed + 1);
        let theta = normal_vec(&mut r, n);
        let u = normal_vec(&mut r, n);
        let v = normal_vec(&mut r, n);
        let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + c * b).collect();
        let lhs = hvp(&q, &theta, &sum).unwrap();
        let (hu, hv) = (hvp(&q, &theta, &u).unwrap(), hvp(&q, &theta, &v).unwrap());
        let rhs: Vec<f64> = hu.iter().zip(&hv).map(|(a, b)| a + c * b).collect();
        prop_assert!(rel_err(&lhs, &rhs) < 1e-6);
    }
}
