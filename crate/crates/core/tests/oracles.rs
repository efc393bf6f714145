//! Analytic and ODE oracles for the solver and the arrival-time extraction.

use mcflab::arrival::*;
use mcflab::experiments::{run_speed_experiment, ExperimentPlan, Medium};
use mcflab::field::*;
use mcflab::grid::*;
use mcflab::levelset::*;

/// Area of `{u >= 0}` from bilinear interpolation on an 8x8 subsample per cell,
/// reported as the radius of the disc with that area.
fn area_radius(state: &LevelSetState) -> f64 {
    let g = state.grid;
    let u = &state.u;
    let h = g.spacing;
    let sub = 8;
    let mut area = 0.0;
    for j in 0..g.ny - 1 {
        for i in 0..g.nx - 1 {
            let (a, b, c, d) = (u[g.idx(i, j)], u[g.idx(i + 1, j)], u[g.idx(i, j + 1)], u[g.idx(i + 1, j + 1)]);
            if a < 0.0 && b < 0.0 && c < 0.0 && d < 0.0 {
                continue;
            }
            if a >= 0.0 && b >= 0.0 && c >= 0.0 && d >= 0.0 {
                area += h * h;
                continue;
            }
            let mut hits = 0;
            for p in 0..sub {
                for q in 0..sub {
                    let x = (p as f64 + 0.5) / sub as f64;
                    let y = (q as f64 + 0.5) / sub as f64;
                    let v = a * (1.0 - x) * (1.0 - y) + b * x * (1.0 - y) + c * (1.0 - x) * y + d * x * y;
                    if v >= 0.0 {
                        hits += 1;
                    }
                }
            }
            area += h * h * hits as f64 / (sub * sub) as f64;
        }
    }
    (area / std::f64::consts::PI).sqrt()
}

/// Time for `dr/dt = c - 1/r` to carry `r0` to `r1`, by RK4 on `dt/dr = 1/(c - 1/r)`.
fn expanding_disc_time(c: f64, r0: f64, r1: f64, n: usize) -> f64 {
    let f = |r: f64| 1.0 / (c - 1.0 / r);
    let dr = (r1 - r0) / n as f64;
    let mut t = 0.0;
    let mut r = r0;
    for _ in 0..n {
        let k1 = f(r);
        let k2 = f(r + dr / 2.0);
        let k4 = f(r + dr);
        t += dr * (k1 + 4.0 * k2 + k4) / 6.0;
        r += dr;
    }
    t
}

#[test]
fn rk4_oracle_matches_closed_form() {
    // c = 1: t(r) = r - r0 + ln((r - 1)/(r0 - 1)).
    let t = expanding_disc_time(1.0, 2.0, 10.0, 4000);
    assert!((t - 10.197_224_577_336_219).abs() < 1e-9, "{t}");
    let exact = 8.0 + 9.0f64.ln();
    assert!((t - exact).abs() < 1e-9);
}

#[test]
fn flat_front_reaches_probes_at_t_over_c() {
    for c in [1.0, 1.5] {
        let field = CoefficientField::constant(c).unwrap();
        let g = Grid2D::front_window([1.0, 0.0], -3.0, 24.0, 2.0, 0.05, true).unwrap();
        let m = compute_arrival(&field, &InitialSet::half_space([1.0, 0.0], 0.0, 2.0), &g, 22.0 / c).unwrap();
        for t in [5.0, 10.0, 20.0] {
            let got = m.at_point([t, 0.0]).unwrap();
            assert!((got * c / t - 1.0).abs() < 0.02, "c = {c}, t = {t}: {got}");
        }
    }
}

#[test]
fn probe_stop_rule_stops_near_distance_over_c() {
    let field = CoefficientField::constant(2.0).unwrap();
    let g = Grid2D::front_window([1.0, 0.0], -3.0, 8.0, 2.0, 0.05, true).unwrap();
    let (i, j) = g.nearest_node([5.0, 0.0]).unwrap();
    let st = evolve_until(
        signed_initial_state(&g, &InitialSet::half_space([1.0, 0.0], 0.0, 2.0)).unwrap(),
        &field,
        &StopRule::ProbesReached(vec![g.idx(i, j)]),
        10.0,
        SolverOptions::default(),
    )
    .unwrap();
    assert!((st.t / 2.5 - 1.0).abs() < 0.02, "{}", st.t);
}

#[test]
fn oblique_flat_front_speed() {
    let e = [0.6, 0.8];
    let field = CoefficientField::constant(1.0).unwrap();
    let g = Grid2D::front_window(e, -3.0, 14.0, 2.0, 0.05, true).unwrap();
    let m = compute_arrival(&field, &InitialSet::half_space(e, 0.0, 2.0), &g, 12.0).unwrap();
    let got = m.at_point([10.0 * e[0], 10.0 * e[1]]).unwrap();
    assert!((got / 10.0 - 1.0).abs() < 0.02, "{got}");
}

#[test]
fn expanding_disc_arrival_matches_ode() {
    let field = CoefficientField::constant(1.0).unwrap();
    let h = 0.05;
    let g = Grid2D::square([0.0, 0.0], 11.0, h, NormalBoundary::Extrapolation).unwrap();
    let r0 = 2.0;
    let m = compute_arrival(&field, &InitialSet::disc([0.0, 0.0], r0), &g, 11.0).unwrap();
    let mut worst: f64 = 0.0;
    for rho in [0.5, 1.0, 2.0, 4.0, 6.0, 8.0] {
        let expect = expanding_disc_time(1.0, r0, r0 + rho, 2000);
        for dir in [[1.0, 0.0], [0.6, 0.8], [0.0, -1.0], [-0.8, 0.6]] {
            let got = m.at_point([(r0 + rho) * dir[0], (r0 + rho) * dir[1]]).unwrap();
            worst = worst.max((got / expect - 1.0).abs());
        }
    }
    // Measured 0.24% at h = 0.05.
    assert!(worst < 0.02, "worst relative error {worst}");
}

#[test]
fn expanding_disc_area_tracks_ode() {
    let field = CoefficientField::constant(1.0).unwrap();
    let g = Grid2D::square([0.0, 0.0], 8.0, 0.05, NormalBoundary::Extrapolation).unwrap();
    let mut s = Solver::new(&g, &field, &InitialSet::disc([0.0, 0.0], 2.0), SolverOptions::default()).unwrap();
    for r in [3.0, 4.5, 6.0] {
        let t = expanding_disc_time(1.0, 2.0, r, 2000);
        s.run(&StopRule::Time(t), 100.0).unwrap();
        let got = area_radius(s.state());
        assert!((got / r - 1.0).abs() < 0.02, "r = {r}: {got}");
    }
}

#[test]
fn shrinking_disc_follows_square_root_law() {
    let one = CoefficientField::constant(1.0).unwrap();
    let h = 0.05;
    let g = Grid2D::square([0.0, 0.0], 2.5, h, NormalBoundary::Extrapolation).unwrap();
    let opts = SolverOptions { forcing: ForcingMode::Disabled, narrow_band: false, reinit_interval: 0 };
    let r0: f64 = 2.0;
    let mut s = Solver::new(&g, &one, &InitialSet::disc([0.0, 0.0], r0), opts).unwrap();
    for t in [0.5, 1.0, 1.5, 1.8, 1.9, 1.95, 1.98] {
        let exact = (r0 * r0 - 2.0 * t).sqrt();
        s.run(&StopRule::Time(t), 10.0).unwrap();
        let got = area_radius(s.state());
        assert!(exact >= 4.0 * h - 1e-12);
        assert!((got / exact - 1.0).abs() < 0.02, "t = {t}: {got} vs {exact}");
        assert!(((got * got + 2.0 * t) / (r0 * r0) - 1.0).abs() < 0.02);
    }
}

#[test]
fn laminar_speed_matches_harmonic_mean() {
    // c = lo + (hi - lo)(1 + sin)/2 along e: a flat front crosses one period in
    // P / sqrt(lo hi), so the effective speed is sqrt(lo hi).
    let plan = ExperimentPlan {
        medium: Medium::Laminar { lo: 1.0, hi: 2.0, period: 2.5 },
        times: vec![10.0, 20.0],
        n_seeds: 2,
        width: 2.0,
        bootstrap_resamples: 10,
        ..ExperimentPlan::default()
    };
    let est = run_speed_experiment(&plan, [1.0, 0.0]).unwrap();
    let expect = 2.0f64.sqrt();
    assert!((est.c_bar / expect - 1.0).abs() < 0.02, "{}", est.c_bar);
    // Quadrature of dx / c over [0, 10].
    let n = 100_000;
    let dx = 10.0 / n as f64;
    let q: f64 = (0..n)
        .map(|k| {
            let x = (k as f64 + 0.5) * dx;
            dx / (1.0 + 0.5 * (1.0 + (2.0 * std::f64::consts::PI * x / 2.5).sin()))
        })
        .sum();
    assert!((q - 10.0 / expect).abs() < 1e-6);
    assert!((est.mean[0] / q - 1.0).abs() < 0.02, "{} vs {q}", est.mean[0]);
}

#[test]
fn data_continuity_of_nested_discs() {
    let one = CoefficientField::constant(1.0).unwrap();
    let g = Grid2D::square([0.0, 0.0], 9.0, 0.1, NormalBoundary::Extrapolation).unwrap();
    let a = compute_arrival(&one, &InitialSet::disc([0.0, 0.0], 2.0), &g, 5.0).unwrap();
    let b = compute_arrival(&one, &InitialSet::disc([0.0, 0.0], 3.0), &g, 5.0).unwrap();
    let d = hausdorff(&sublevel_set(&a, 0.0), &sublevel_set(&b, 0.0)).unwrap();
    assert!((d - 1.0).abs() <= 0.1 + 1e-9);
    let r = check_data_continuity(&a, &b, d, Constants::new(&one.spec, 2.0));
    assert!(r.pass, "{}", r.summary());
    // Outside both discs the lag is the ODE time from 2 to 3.
    let lag = expanding_disc_time(1.0, 2.0, 3.0, 1000);
    let got = a.at_point([4.0, 0.0]).unwrap() - b.at_point([4.0, 0.0]).unwrap();
    assert!((got / lag - 1.0).abs() < 0.05, "{got} vs {lag}");
}

#[test]
fn narrow_band_agrees_with_full_grid_reference() {
    let field = sample_field(&FieldSpec { transverse_period: Some(10.0), ..FieldSpec::default() }, 11).unwrap();
    let g = Grid2D::front_window([1.0, 0.0], -4.0, 14.0, 10.0, 0.1, true).unwrap();
    let set = InitialSet::half_space([1.0, 0.0], 0.0, 2.0);
    let full = SolverOptions { narrow_band: false, reinit_interval: 0, ..SolverOptions::default() };
    let (a, _) = compute_arrival_with(&field, &set, &g, None, 7.0, &[], full).unwrap();
    let (b, _) = compute_arrival_with(&field, &set, &g, None, 7.0, &[], SolverOptions::default()).unwrap();
    let (mut worst, mut sum, mut n) = (0.0f64, 0.0, 0);
    for k in 0..a.m.len() {
        if a.m[k].is_finite() && b.m[k].is_finite() && a.m[k] > 0.0 {
            let d = (a.m[k] - b.m[k]).abs();
            worst = worst.max(d);
            sum += d;
            n += 1;
        }
    }
    // Measured: mean 0.0103, max 0.0165.
    assert!(n > 1000);
    assert!(sum / (n as f64) < 0.02 && worst < 0.03, "mean {} max {worst}", sum / n as f64);
}

#[test]
fn grid_refinement_changes_arrival_by_order_h() {
    let field = sample_field(&FieldSpec { transverse_period: Some(10.0), ..FieldSpec::default() }, 3).unwrap();
    let set = InitialSet::half_space([1.0, 0.0], 0.0, 2.0);
    let coarse_g = Grid2D::front_window([1.0, 0.0], -4.0, 14.0, 10.0, 0.1, true).unwrap();
    let fine_g = Grid2D::front_window([1.0, 0.0], -4.0, 14.0, 10.0, 0.05, true).unwrap();
    let coarse = compute_arrival(&field, &set, &coarse_g, 8.0).unwrap();
    let fine = compute_arrival(&field, &set, &fine_g, 8.0).unwrap();
    let mut c_fit: f64 = 0.0;
    for j in (0..coarse_g.ny).step_by(5) {
        for i in (40..coarse_g.nx).step_by(5) {
            let v = coarse.at(i, j);
            let w = fine.at(2 * i, 2 * j);
            if v.is_finite() && w.is_finite() {
                c_fit = c_fit.max((v - w).abs() / 0.1);
            }
        }
    }
    eprintln!("refinement constant C = {c_fit:.3}");
    assert!(c_fit < 1.0, "{c_fit}");
}

#[test]
fn time_zero_stop_and_probe_inside_source() {
    let field = CoefficientField::constant(1.0).unwrap();
    let g = Grid2D::front_window([1.0, 0.0], -3.0, 6.0, 2.0, 0.1, true).unwrap();
    let set = InitialSet::half_space([1.0, 0.0], 0.0, 2.0);
    let s0 = init_state(&g, &set).unwrap();
    let st = evolve_until(s0.clone(), &field, &StopRule::Time(0.0), 1.0, SolverOptions::default()).unwrap();
    assert_eq!(st.t, 0.0);
    let (i, j) = g.nearest_node([-1.0, 0.0]).unwrap();
    let st = evolve_until(s0, &field, &StopRule::ProbesReached(vec![g.idx(i, j)]), 1.0, SolverOptions::default()).unwrap();
    assert_eq!(st.t, 0.0);
}
