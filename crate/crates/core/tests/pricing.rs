use std::path::PathBuf;

use evprice::dispatch::dispatch_sensitivity;
use evprice::equity::{gamma, PriceMatrix};
use evprice::grid::{parse_case, LoadForecast, Network, StationConfig};
use evprice::icd::{build_and_solve_icd, dual_price_from_primal, run_icd, IcdConfig};
use evprice::market::PricingContext;
use evprice::power_flow::{assemble_jacobian, OperatingPoint};
use evprice::sdid::{fd_grad_f, grad_f, objective_f, run_sdid, SdidConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn case(name: &str) -> Network {
    parse_case(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)).unwrap()
}

/// Two stations on the 4-bus ring.
fn ring(horizon: usize, smoothing: f64, phase: f64) -> PricingContext {
    let stations = vec![StationConfig::new(1, 3, 1.0, 0.5), StationConfig::new(2, 4, 2.0, 0.4)];
    let forecasts: Vec<LoadForecast> = (0..2)
        .map(|k| LoadForecast {
            station_id: k as u32 + 1,
            values: (0..horizon).map(|t| 0.6 + 0.4 * ((t as f64 + phase) * 1.1 + k as f64).sin()).collect(),
        })
        .collect();
    PricingContext::new(case("ring4.json"), stations, &forecasts, 0.25).unwrap().with_smoothing(smoothing)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_matches_end_to_end_differences(
        levels in proptest::collection::vec(0.15f64..0.35, 8),
        smoothing in 100.0f64..300.0,
        phase in 0.0f64..6.0,
        alpha in 1e4f64..1e6,
        beta in 0.0f64..1.0,
    ) {
        let ctx = ring(4, smoothing, phase);
        let prices = PriceMatrix::new(DMatrix::from_row_slice(2, 4, &levels), ctx.station_ids());
        let dispatches = ctx.solve_dispatches(&prices).unwrap();
        let p_net = PricingContext::net_power(&dispatches);
        let bundles = ctx.bundles(&p_net).unwrap();
        let sens: Vec<_> = (0..2)
            .map(|j| dispatch_sensitivity(&ctx.dispatch_problem(j, &prices.row(j)), &dispatches[j]).unwrap())
            .collect();
        prop_assume!(sens.iter().all(|s| !s.is_degenerate()));
        let g = grad_f(&ctx, &prices, &p_net, &sens, &bundles, alpha, beta);
        let fd = fd_grad_f(&ctx, &prices, &bundles, alpha, beta, 1e-5).unwrap();
        let err = (&g - &fd).amax() / fd.amax();
        prop_assert!(err < 1e-3, "relative error {err}\n{g}\n{fd}");
    }
}

#[test]
fn dual_map_is_symmetric_psd() {
    let net = case("ieee14.json");
    let b = assemble_jacobian(&net, &OperatingPoint::nominal(&net)).unwrap();
    let m = &b.sensitivity * 2.0;
    assert!((&m - m.transpose()).amax() <= 1e-12 * m.amax());
    for s in 0..20 {
        let v = DVector::from_fn(13, |i, _| ((i * 7 + s * 13) as f64 * 0.37).sin());
        assert!(v.dot(&(&m * &v)) >= 0.0);
    }
    // Linear in the injection changes.
    let bundles = vec![b.clone(), b];
    let buses = [10, 11, 12, 13];
    let d1 = DMatrix::from_fn(14, 2, |i, t| if t == 0 || i == 0 { 0.0 } else { (i as f64).cos() * 0.01 });
    let d2 = DMatrix::from_fn(14, 2, |i, t| if t == 0 || i == 0 { 0.0 } else { (i as f64 * 0.5).sin() * 0.02 });
    let ids = vec![1, 2, 3, 4];
    let l1 = dual_price_from_primal(&bundles, &d1, &buses, ids.clone(), 3.0).values;
    let l2 = dual_price_from_primal(&bundles, &d2, &buses, ids.clone(), 3.0).values;
    let mix = dual_price_from_primal(&bundles, &(&d1 * 2.0 - &d2 * 0.5), &buses, ids, 3.0).values;
    assert!((mix - (l1 * 2.0 - l2 * 0.5)).amax() < 1e-12);
}

#[test]
fn larger_beta_never_widens_the_spread() {
    let ctx = ring(12, 0.0, 0.3);
    let bundles = ctx.bundles(ctx.loads()).unwrap();
    let lambda = ctx.random_prices(5);
    let mut last = f64::INFINITY;
    for beta in [0.0, 1.0, 10.0, 100.0] {
        let inner = build_and_solve_icd(&ctx, &lambda, &IcdConfig::new(1e6, beta), &bundles).unwrap();
        let g = inner.gamma_value.abs();
        assert!(g <= last + 1e-6, "beta {beta}: |gamma| {g} after {last}");
        last = g;
    }
}

#[test]
fn icd_inner_solutions_are_certified() {
    let ctx = ring(16, 0.0, 1.0);
    let sol = run_icd(&ctx, &IcdConfig::new(1e6, 10.0)).unwrap();
    assert!(sol.outer_iters >= 1 && sol.best_iter <= sol.outer_iters);
    assert_eq!(sol.gamma_value, gamma(&sol.prices));
    for (j, d) in sol.dispatches.iter().enumerate() {
        d.check_feasible(&ctx.dispatch_problem(j, &sol.prices.row(j))).unwrap();
    }
    assert!(sol.objective <= sol.log[0].objective);
}

#[test]
fn sdid_best_iterate_is_no_worse_than_start() {
    let ctx = ring(8, 150.0, 2.0);
    let mut cfg = SdidConfig::new(1e5, 0.05);
    cfg.n_iters = 10;
    cfg.fd_check = true;
    let res = run_sdid(&ctx, &cfg).unwrap();
    assert_eq!(res.trace.records.len(), 10);
    let first = res.trace.initial();
    assert!(res.trace.records[res.best_iter].objective <= first.objective);
    assert!(res.fd_error.unwrap() < 1e-3 || first.degenerate);
    let bundles = ctx.bundles(&res.p_net).unwrap();
    let f = objective_f(&ctx, &res.prices, &res.p_net, &bundles, cfg.alpha, cfg.beta);
    assert!((f - res.trace.records[res.best_iter].objective).abs() <= 1e-9 * f.abs().max(1.0));
}
