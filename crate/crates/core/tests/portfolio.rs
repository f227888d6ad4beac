mod common;

use std::collections::BTreeMap;

use common::{normal_vec, rng};
use optprior::ingest::AssetId;
use optprior::portfolio::{
    drift_weights, frontier, half_l1, max_drawdown, perf_from_returns, perf_summary, portfolio_returns, quintile_sort,
    rolling_mean, ForecastPanel, PERIODS_PER_YEAR,
};
use optprior::Error;
use proptest::prelude::*;
use rand::Rng;

type Row = BTreeMap<AssetId, f64>;

fn row(v: &[f64]) -> Row {
    v.iter().enumerate().map(|(i, x)| (i as AssetId + 1, *x)).collect()
}

/// Forecasts on dates `0..f.len()`, returns on dates `1..=r.len()`.
fn panel(f: &[Vec<f64>], r: &[Vec<f64>]) -> ForecastPanel {
    let fc = f.iter().enumerate().map(|(d, v)| (d as i32, row(v))).collect();
    let rt = r.iter().enumerate().map(|(d, v)| (d as i32 + 1, row(v))).collect();
    ForecastPanel::new(fc, rt)
}

/// Turnover on plain vectors indexed by asset.
fn turnover_oracle(prev: &[f64], ret: &[f64], next: &[f64]) -> f64 {
    let gross: f64 = prev.iter().zip(ret).map(|(w, r)| w * (1.0 + r)).sum();
    prev.iter()
        .zip(ret)
        .zip(next)
        .map(|((w, r), n)| (n - w * (1.0 + r) / gross).abs())
        .sum::<f64>()
        / 2.0
}

#[test]
fn two_asset_drift_example() {
    let w = row(&[0.5, 0.5]);
    let (d, gross) = drift_weights(&w, &row(&[0.10, 0.0]));
    assert!((gross - 1.05).abs() < 1e-15);
    assert!((d[&1] - 11.0 / 21.0).abs() < 1e-15);
    assert!((d[&2] - 10.0 / 21.0).abs() < 1e-15);
    assert!((half_l1(&w, &d) - 1.0 / 42.0).abs() < 1e-15);
    assert!((turnover_oracle(&[0.5, 0.5], &[0.1, 0.0], &[0.5, 0.5]) - 1.0 / 42.0).abs() < 1e-15);
}

#[test]
fn drift_example_through_the_book() {
    // ten assets: 1 and 2 stay in Q1, asset 1 earns 10% on the first day
    let f: Vec<Vec<f64>> = vec![(1..=10).map(f64::from).collect(); 2];
    let mut r = vec![vec![0.0; 10]; 2];
    r[0][0] = 0.10;
    let s = portfolio_returns(&panel(&f, &r), 1).unwrap();
    assert_eq!(s.dates, vec![1, 2]);
    assert!((s.returns[0] - 0.05).abs() < 1e-15);
    assert_eq!(s.turnover.len(), 1);
    assert!((s.turnover[0] - 1.0 / 42.0).abs() < 1e-15);
    assert_eq!(s.target_turnover, vec![0.0]);
}

#[test]
fn full_churn_and_no_trade() {
    let up: Vec<f64> = (1..=10).map(f64::from).collect();
    let down: Vec<f64> = up.iter().rev().copied().collect();
    let r = vec![vec![0.01; 10]; 2];
    let churn = portfolio_returns(&panel(&[up.clone(), down], &r), 1).unwrap();
    assert!((churn.turnover[0] - 1.0).abs() < 1e-15);

    let still = portfolio_returns(&panel(&[up.clone(), up.clone(), up], &[vec![0.0; 10], vec![0.0; 10], vec![0.0; 10]]), 3).unwrap();
    assert_eq!(still.turnover, vec![0.0, 0.0]);
    for w in &still.weights {
        assert_eq!(drift_weights(w, &row(&[0.0; 10])).0, *w);
    }
}

#[test]
fn portfolio_return_examples() {
    let f = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0]];
    let mut r = vec![vec![0.0; 10]];
    r[0][0] = 0.01;
    r[0][1] = -0.01;
    assert_eq!(portfolio_returns(&panel(&f, &r), 1).unwrap().returns, vec![0.0]);
    // five assets: each quintile holds one
    let s = portfolio_returns(&panel(&[vec![5.0, 4.0, 3.0, 2.0, 1.0]], &[vec![0.1, 0.2, 0.3, 0.4, 0.5]]), 2).unwrap();
    assert_eq!(s.weights[0].keys().copied().collect::<Vec<_>>(), vec![4]);
    assert_eq!(s.returns, vec![0.4]);
}

#[test]
fn missing_returns_drop_members() {
    let f = vec![(1..=10).map(f64::from).collect::<Vec<_>>()];
    let mut rets = row(&[0.02; 10]);
    rets.remove(&2);
    let p = ForecastPanel::new(BTreeMap::from([(0, row(&f[0]))]), BTreeMap::from([(1, rets)]));
    let s = portfolio_returns(&p, 1).unwrap();
    assert_eq!(s.dropped_assets, 1);
    assert_eq!(s.weights[0], BTreeMap::from([(1, 1.0)]));
    assert!((s.returns[0] - 0.02).abs() < 1e-15);
}

#[test]
fn short_dates_are_skipped() {
    let p = panel(&[vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0, 5.0]], &[vec![0.0; 4], vec![0.0; 5]]);
    let s = portfolio_returns(&p, 1).unwrap();
    assert_eq!(s.skipped_dates, 1);
    assert_eq!(s.dates, vec![2]);
    assert!(portfolio_returns(&p, 0).is_err());
    assert!(portfolio_returns(&p, 6).is_err());
}

#[test]
fn total_loss_is_a_degenerate_day() {
    let f = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0]; 2];
    let r = vec![vec![-1.0, 0.0, 0.0, 0.0, 0.0]; 2];
    assert!(matches!(portfolio_returns(&panel(&f, &r), 1), Err(Error::DegenerateDay { .. })));
}

#[test]
fn drawdown_examples() {
    assert!((max_drawdown(&[0.10, -0.10]) - (0.99 / 1.1 - 1.0)).abs() < 1e-15);
    assert!((max_drawdown(&[0.10, -0.10]) + 0.1).abs() < 1e-12);
    assert_eq!(max_drawdown(&[0.0, 0.0, 0.01, 0.0]), 0.0);
    assert!((max_drawdown(&[-1.0]) + 1.0).abs() < 1e-15);
}

#[test]
fn perf_summary_closed_form() {
    let r = normal_vec(&mut rng(1), 500).iter().map(|x| 0.0004 + 0.01 * x).collect::<Vec<_>>();
    let (ar, av, sh, dd) = perf_from_returns(&r, 252.0).unwrap();
    let n = r.len() as f64;
    let m = r.iter().sum::<f64>() / n;
    let sd = (r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((ar - 252.0 * m).abs() < 1e-13);
    assert!((av - sd * 252f64.sqrt()).abs() < 1e-13);
    assert!((sh - ar / av).abs() < 1e-12);
    assert!((-1.0..=0.0).contains(&dd));
    assert!(matches!(perf_from_returns(&[0.01; 10], 252.0), Err(Error::ZeroVolatility)));
    assert!(perf_from_returns(&[0.01], 252.0).is_err());
}

#[test]
fn reported_ratio_reproduces_reported_sharpe() {
    // a daily series whose annualized mean and volatility are exactly 0.120 and 0.130
    let n = 2520;
    let m = 0.120 / 252.0;
    let a = 0.130 / 252f64.sqrt() * ((n - 1) as f64 / n as f64).sqrt();
    let r: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { m + a } else { m - a }).collect();
    let (ar, av, sh, _) = perf_from_returns(&r, PERIODS_PER_YEAR).unwrap();
    assert!((ar - 0.120).abs() < 1e-12);
    assert!((av - 0.130).abs() < 1e-12);
    assert!((sh - 0.120 / 0.130).abs() < 1e-12);
    assert!((sh - 0.921).abs() <= 0.005, "{sh}");
}

#[test]
fn rolling_mean_matches_naive_windows() {
    let v = normal_vec(&mut rng(2), 300);
    for w in [1, 5, 126, 252, 300] {
        let got = rolling_mean(&v, w);
        assert_eq!(got.len(), v.len() - w + 1);
        for (i, g) in got.iter().enumerate() {
            let want = v[i..i + w].iter().sum::<f64>() / w as f64;
            assert!((g - want).abs() < 1e-12);
        }
    }
    assert!(rolling_mean(&v, 301).is_empty());
    assert!(rolling_mean(&v, 0).is_empty());
}

/// Returns with a per-asset volatility that changes every day, and the
/// volatility itself as a perfect forecast of the next day.
fn vol_panels(seed: u64, n_assets: usize, n_days: usize) -> (ForecastPanel, ForecastPanel) {
    let mut r = rng(seed);
    let sig: Vec<Vec<f64>> = (0..=n_days)
        .map(|_| (0..n_assets).map(|_| r.random_range(0.002..0.05)).collect())
        .collect();
    let rets: Vec<Vec<f64>> = sig[1..]
        .iter()
        .map(|s| s.iter().map(|v| v * normal_vec(&mut r, 1)[0]).collect())
        .collect();
    let perfect: Vec<Vec<f64>> = sig[1..].to_vec();
    let constant = vec![vec![1.0; n_assets]; n_days];
    (panel(&perfect, &rets), panel(&constant, &rets))
}

#[test]
fn frontier_rows_and_ranking() {
    let (perfect, constant) = vol_panels(3, 40, 300);
    let rows = frontier(&[("const".to_string(), &constant), ("oracle".to_string(), &perfect)], &[1, 5]).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.windows(2).all(|w| w[0].mean_turnover <= w[1].mean_turnover));
    let get = |m: &str, q: usize| rows.iter().find(|r| r.model == m && r.quintile == q).unwrap();
    assert!(get("oracle", 1).ann_vol < get("const", 1).ann_vol);
    assert!(get("oracle", 1).ann_vol < get("oracle", 5).ann_vol);
    // a constant forecast keeps the same names, so only drift trades
    assert!(get("const", 1).mean_turnover < get("oracle", 1).mean_turnover);

    let one = frontier(&[("m".to_string(), &perfect)], &[1, 2, 3, 4, 5]).unwrap();
    assert_eq!(one.len(), 5);
    let dup = frontier(&[("a".to_string(), &perfect), ("b".to_string(), &perfect)], &[1, 5]).unwrap();
    for q in [1, 5] {
        let a = dup.iter().find(|r| r.model == "a" && r.quintile == q).unwrap();
        let b = dup.iter().find(|r| r.model == "b" && r.quintile == q).unwrap();
        assert_eq!((a.sharpe, a.mean_turnover, a.max_drawdown), (b.sharpe, b.mean_turnover, b.max_drawdown));
    }
}

#[test]
fn frontier_rejects_mismatched_calendars() {
    let (a, _) = vol_panels(4, 10, 20);
    let (b, _) = vol_panels(5, 10, 21);
    assert!(matches!(
        frontier(&[("a".to_string(), &a), ("b".to_string(), &b)], &[1]),
        Err(Error::CalendarMismatch(_))
    ));
}

#[test]
fn turnover_matches_vector_oracle_on_random_books() {
    let (p, _) = vol_panels(6, 23, 60);
    for q in 1..=5 {
        let s = portfolio_returns(&p, q).unwrap();
        for t in 1..s.dates.len() {
            let ids: Vec<AssetId> = (1..=23).collect();
            let dense = |w: &Row| ids.iter().map(|a| w.get(a).copied().unwrap_or(0.0)).collect::<Vec<_>>();
            let ret = ids.iter().map(|a| p.returns[&s.dates[t - 1]][a]).collect::<Vec<_>>();
            let want = turnover_oracle(&dense(&s.weights[t - 1]), &ret, &dense(&s.weights[t]));
            assert!((s.turnover[t - 1] - want).abs() < 1e-14);
        }
        let perf = perf_summary(&s, PERIODS_PER_YEAR).unwrap();
        assert_eq!(perf.n_days, s.returns.len());
        assert!(perf.ann_vol >= 0.0);
    }
}

proptest! {
    #[test]
    fn sorting_ignores_monotone_transforms(v in prop::collection::vec(0.001f64..10.0, 5..40), c in 0.01f64..100.0) {
        let base = quintile_sort(&row(&v)).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| c * x).collect();
        let logged: Vec<f64> = v.iter().map(|x| x.ln()).collect();
        prop_assert_eq!(&quintile_sort(&row(&scaled)).unwrap(), &base);
        prop_assert_eq!(&quintile_sort(&row(&logged)).unwrap(), &base);
        let sizes = base.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), v.len());
        prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1] && w[0] - w[1] <= 1));
    }

    #[test]
    fn books_are_fully_invested_and_turnover_bounded(seed in 0u64..500, q in 1usize..=5) {
        let (p, _) = vol_panels(seed, 12, 15);
        let s = portfolio_returns(&p, q).unwrap();
        for w in &s.weights {
            prop_assert!(w.values().all(|&x| x >= 0.0));
            prop_assert!((w.values().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        for &t in s.turnover.iter().chain(&s.target_turnover) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&t));
        }
        prop_assert!((-1.0..=0.0).contains(&max_drawdown(&s.returns)));
    }
}
