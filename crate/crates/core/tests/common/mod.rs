//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it is used to check.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use optprior::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            // Box-Muller keeps the oracle free of the library's samplers
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], normal_vec(rng, rows * cols)).unwrap()
}

/// Central finite difference of `f` at `x` along every coordinate.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a − b| ≤ abs` or `|a − b| ≤ rel·max(|a|, |b|)`.
pub fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    let d = (a - b).abs();
    d <= abs || d <= rel * a.abs().max(b.abs())
}

/// Random symmetric matrix with the given spectrum: `Q diag(eig) Qᵀ` for a
/// random orthogonal `Q`.
pub fn symmetric_with_spectrum(rng: &mut ChaCha8Rng, eig: &[f64]) -> Vec<f64> {
    let n = eig.len();
    let g = DMatrix::from_vec(n, n, normal_vec(rng, n * n));
    let q = g.qr().q();
    let a = &q * DMatrix::from_diagonal(&DVector::from_row_slice(eig)) * q.transpose();
    let a = (&a + a.transpose()) * 0.5;
    (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| a[(i, j)]).collect()
}

/// Random symmetric matrix with Gaussian entries.
pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let g = normal_vec(rng, n * n);
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = 0.5 * (g[i * n + j] + g[j * n + i]);
        }
    }
    a
}

/// Ascending eigenvalues of a row-major symmetric matrix.
pub fn eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(n, n, a);
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// Singular values of a row-major `(rows, cols)` matrix, descending.
pub fn singular_values(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let m = DMatrix::from_row_slice(rows, cols, a);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Least squares with intercept via the SVD pseudo-inverse of `[1 X]`.
/// Returns `(intercept, weights)`.
pub fn pinv_ols(x: &Tensor, y: &[f64]) -> (f64, Vec<f64>) {
    let (n, l) = (x.rows(), x.cols());
    let mut a = DMatrix::zeros(n, l + 1);
    for i in 0..n {
        a[(i, 0)] = 1.0;
        for j in 0..l {
            a[(i, j + 1)] = x.row(i)[j];
        }
    }
    let pinv = a.pseudo_inverse(1e-12).unwrap();
    let beta = pinv * DVector::from_row_slice(y);
    (beta[0], beta.iter().skip(1).copied().collect())
}

/// Ordinary least squares slope and intercept of `ys` on `xs` from
/// centred sums.
pub fn line_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

/// `(n, l)` Gaussian design and `y = X w + b + noise·ε`.
pub fn linear_data(seed: u64, n: usize, w: &[f64], b: f64, noise: f64) -> (Tensor, Vec<f64>) {
    let mut r = rng(seed);
    let x = random_matrix(&mut r, n, w.len());
    let e = normal_vec(&mut r, n);
    let y = (0..n)
        .map(|i| b + x.row(i).iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + noise * e[i])
        .collect();
    (x, y)
}

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub params: usize,
    pub coords: usize,
    pub failures: usize,
    pub worst: (f64, f64),
}

/// Every coordinate of `grad` against central differences (step 1e−5) at
/// `draws` random parameter draws of the tiny `arch` network.
pub fn gradient_check(arch: optprior::models::Arch, lookback: usize, draws: u64) -> GradCheck {
    use optprior::gradengine::{forward_loss, grad};
    use optprior::models::{init, ModelConfig};
    let cfg = ModelConfig::tiny(arch, lookback);
    let mut out = GradCheck {
        params: 0,
        coords: 0,
        failures: 0,
        worst: (0.0, 0.0),
    };
    let mut worst_err = 0.0;
    for draw in 0..draws {
        let mut r = rng(1000 + draw);
        let params = init(&cfg, 77 + draw).unwrap();
        // move off the zero-bias initialisation so every path carries signal
        let theta: Vec<f64> = params
            .flatten()
            .iter()
            .zip(normal_vec(&mut r, params.num_params()))
            .map(|(t, e)| t + 0.1 * e)
            .collect();
        let x = random_matrix(&mut r, 6, lookback);
        let y = normal_vec(&mut r, 6);
        let p = params.with_flat(&theta).unwrap();
        let analytic = grad(&cfg, &p, &x, &y).unwrap().1.flatten();
        let numeric = fd_gradient(
            |t| forward_loss(&cfg, &params.with_flat(t).unwrap(), &x, &y).unwrap(),
            &theta,
            1e-5,
        );
        out.params = params.num_params();
        for (a, n) in analytic.iter().zip(&numeric) {
            out.coords += 1;
            if !close(*a, *n, 1e-4, 1e-7) {
                out.failures += 1;
            }
            let err = (a - n).abs();
            if err > worst_err {
                worst_err = err;
                out.worst = (*a, *n);
            }
        }
    }
    out
}
