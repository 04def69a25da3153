use std::f64::consts::{PI, TAU};

use dwe_core::dynamics::*;
use dwe_core::geometry::*;
use dwe_core::{Damping, Metric, Point};
use proptest::prelude::*;

fn ychannel() -> Metric {
    build_metric(&MetricPreset::YChannel { eps: 0.1 }, 1.0, 32).unwrap()
}

fn flat() -> Metric {
    build_metric(&MetricPreset::Flat, 1.0, 32).unwrap()
}

fn zero() -> Damping {
    build_damping(&DampingPreset::Zero, 1.0, 32).unwrap()
}

/// Arc-length exponent of the Jacobi equation `J'' + K J = 0` along `{y = 0}`,
/// `K = -4 pi^2 eps e^{2 eps}`.
fn lambda_oracle(eps: f64) -> f64 {
    TAU * eps.sqrt() * eps.exp()
}

#[test]
fn flat_flow_is_a_straight_line() {
    let m = flat();
    let rho = Point::new([0.1, 0.2], [0.6, 0.8]);
    let end = flow_endpoint(&m, &rho, 0.75, 1e-3).unwrap();
    let exact = Point::new([0.1 + 0.45, 0.2 + 0.6], [0.6, 0.8]);
    assert!(phase_distance(1.0, &end, &exact) < 1e-12);
}

#[test]
fn flow_conserves_energy_and_reverses() {
    let m = ychannel();
    let rho = Point::unit(&m, [0.3, 0.2], 0.7);
    let tr = flow(&m, &rho, 5.0, 1e-3).unwrap();
    assert!(tr.max_drift <= DRIFT_TOL);
    let back = flow_endpoint(&m, tr.last(), -5.0, 1e-3).unwrap();
    assert!(phase_distance(1.0, &back.reduced(1.0), &rho) < 1e-9);
}

#[test]
fn flow_rejects_zero_momentum() {
    assert!(flow(&flat(), &Point::new([0.0, 0.0], [0.0, 0.0]), 1.0, 1e-3).is_err());
}

#[test]
fn ychannel_orbit_matches_oracles() {
    let m = ychannel();
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0)).unwrap();
    assert!(g.hyperbolic);
    assert!(g.rho0.x[1].abs() < 1e-9);
    // length of {y = 0} in the metric e^{2 phi}|dx|^2
    assert!((g.period - (-0.1f64).exp()).abs() < 1e-8);
    assert!((g.lambda - lambda_oracle(0.1)).abs() / lambda_oracle(0.1) < 1e-3);
    assert!((g.det - 1.0).abs() < 1e-6);
}

#[test]
fn unstable_jacobian_over_one_period() {
    let m = ychannel();
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0)).unwrap();
    let ju = unstable_jacobian(&m, &g, g.period).unwrap();
    assert!((ju - (-g.lambda * g.period).exp()).abs() < 1e-4);
}

#[test]
fn unstable_jacobian_is_multiplicative() {
    let m = ychannel();
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0)).unwrap();
    let (s, t) = (0.3 * g.period, 0.5 * g.period);
    let first = unstable_jacobian(&m, &g, s).unwrap();
    let second = unstable_jacobian_at(&m, &g, s, t).unwrap();
    let whole = unstable_jacobian(&m, &g, s + t).unwrap();
    assert!((first * second - whole).abs() < 1e-4 * whole);
}

#[test]
fn flat_orbit_is_parabolic() {
    let g = find_closed_geodesic(&flat(), &SectionGuess::horizontal(0.1)).unwrap();
    assert!(g.parabolic && !g.hyperbolic);
    assert!(unstable_jacobian(&flat(), &g, 1.0).is_err());
}

#[test]
fn birkhoff_average_of_constant_damping() {
    let c = 0.4;
    let d: Damping = build_damping(&DampingPreset::Constant { c }, 1.0, 32).unwrap();
    let (lo, hi) = estimate_a_bounds(&flat(), &d, 100, 5.0, 1e-2).unwrap();
    assert_eq!((lo, hi), (-c, -c));
}

#[test]
fn horizontal_flat_orbit_sees_its_row_average() {
    // a = depth sin^{2m}(pi y); along y = 1/2 the average is depth
    let d: Damping =
        build_damping(&DampingPreset::SmoothWell { center: 0.0, radius: 0.1, depth: 1.0 }, 1.0, 32).unwrap();
    let rho = Point::new([0.0, 0.5], [1.0, 0.0]);
    let avg = birkhoff_average(&flat(), &d, &rho, 3.0, 1e-3).unwrap();
    assert!((avg + 1.0).abs() < 1e-9);
}

#[test]
fn a_bounds_bracket_the_undamped_orbit() {
    let m = ychannel();
    let d: Damping =
        build_damping(&DampingPreset::SmoothWell { center: 0.0, radius: 0.1, depth: 1.0 }, 1.0, 32).unwrap();
    let (lo, hi) = estimate_a_bounds(&m, &d, 200, 20.0, 1e-2).unwrap();
    assert!(lo < hi && hi <= 0.0 && lo >= -1.0);
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0)).unwrap();
    assert!(g.beta(&m, &d).unwrap().abs() < 1e-4);
}

#[test]
fn estimator_needs_enough_samples() {
    assert!(estimate_a_bounds(&flat(), &zero(), 10, 1.0, 1e-2).is_err());
}

#[test]
fn pressure_of_single_orbit_is_minus_half_lambda() {
    let m = ychannel();
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0)).unwrap();
    let samples = orbit_neighborhood_samples(&m, &g, 40, &[-0.02, -0.01, 0.01, 0.02]).unwrap();
    let r = pressure_estimate(&m, &samples, Weight::HalfLogJu, 0.05, 8.0 * g.period).unwrap();
    let target = -lambda_oracle(0.1) / 2.0;
    assert!((r.pressure - target).abs() <= 0.1 * target.abs(), "{} vs {target}", r.pressure);
}

#[test]
fn zero_weight_pressure_of_single_orbit_vanishes() {
    let m = ychannel();
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0)).unwrap();
    let samples = orbit_neighborhood_samples(&m, &g, 40, &[-0.02, 0.02]).unwrap();
    let r = pressure_estimate(&m, &samples, Weight::Zero, 0.05, 8.0 * g.period).unwrap();
    assert!(r.pressure.abs() < 0.05, "{}", r.pressure);
}

#[test]
fn ehrenfest_time_formula() {
    assert!((ehrenfest_time(1.0 / 64.0, 2.0) - 64f64.ln() / 2.0).abs() < 1e-15);
    assert!(ehrenfest_time(0.1, 0.0).is_infinite());
}

#[test]
fn halton_first_terms() {
    assert_eq!(halton(1, 2), 0.5);
    assert_eq!(halton(2, 2), 0.25);
    assert!((halton(1, 3) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn f32_flow_tracks_f64() {
    let m32: dwe_core::Metric32 = build_metric(&MetricPreset::YChannel { eps: 0.1 }, 1.0f32, 32).unwrap();
    let m64 = ychannel();
    let r32 = PhaseSpacePoint::<f32>::unit(&m32, [0.3, 0.2], 0.7);
    let r64 = Point::unit(&m64, [0.3, 0.2], 0.7);
    let e32 = flow_endpoint(&m32, &r32, 1.0, 1e-2).unwrap();
    let e64 = flow_endpoint(&m64, &r64, 1.0, 1e-2).unwrap();
    for i in 0..2 {
        assert!((e32.x[i] as f64 - e64.x[i]).abs() < 1e-4);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hamiltonian_is_conserved(x in 0.0f64..1.0, y in 0.0f64..1.0, angle in 0.0f64..TAU) {
        let m = ychannel();
        let rho = Point::unit(&m, [x, y], angle);
        prop_assert!((hamiltonian(&m, &rho) - 0.5).abs() < 1e-12);
        let tr = flow(&m, &rho, 2.0, 1e-3).unwrap();
        prop_assert!(tr.max_drift <= DRIFT_TOL);
    }

    #[test]
    fn variational_flow_is_symplectic(x in 0.0f64..1.0, y in 0.0f64..1.0, angle in 0.0f64..TAU) {
        let m = ychannel();
        let rho = Point::unit(&m, [x, y], angle);
        let (_, d) = flow_variational(&m, &rho, 1.0, 1e-3).unwrap();
        // D^T J D = J with J = [[0, I], [-I, 0]]
        let j = |i: usize, k: usize| -> f64 {
            match (i, k) {
                (0, 2) | (1, 3) => 1.0,
                (2, 0) | (3, 1) => -1.0,
                _ => 0.0,
            }
        };
        for a in 0..4 {
            for b in 0..4 {
                let mut s = 0.0;
                for i in 0..4 {
                    for k in 0..4 {
                        s += d[i][a] * j(i, k) * d[k][b];
                    }
                }
                prop_assert!((s - j(a, b)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn flat_flow_speed_is_unit(angle in 0.0f64..TAU, t in 0.1f64..3.0) {
        let m = flat();
        let rho = Point::unit(&m, [0.0, 0.0], angle);
        let end = flow_endpoint(&m, &rho, t, 1e-2).unwrap();
        let ex = Point::new([t * angle.cos(), t * angle.sin()], rho.xi).reduced(1.0);
        prop_assert!(phase_distance(1.0, &end.reduced(1.0), &ex) < 1e-10);
    }

    #[test]
    fn period_oracle_for_random_channel(eps in 0.02f64..0.2) {
        let m: Metric = build_metric(&MetricPreset::YChannel { eps }, 1.0, 32).unwrap();
        let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0)).unwrap();
        prop_assert!((g.period - (-eps).exp()).abs() < 1e-7);
        prop_assert!((g.lambda - lambda_oracle(eps)).abs() / lambda_oracle(eps) < 2e-3);
        let _ = PI;
    }
}

fn well() -> Damping {
    build_damping(&DampingPreset::SmoothWell { center: 0.0, radius: 0.1, depth: 1.0 }, 1.0, 32).unwrap()
}

fn displaced(g: &ClosedGeodesic, dir: &[f64; 4], size: f64) -> Point {
    let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = dir.map(|v| size * v / n);
    Point::new([g.rho0.x[0] + s[0], g.rho0.x[1] + s[1]], [g.rho0.xi[0] + s[2], g.rho0.xi[1] + s[3]])
}

#[test]
fn smooth_well_leaves_orbit_pressure_unchanged() {
    let m = ychannel();
    let a = well();
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0)).unwrap();
    let samples = orbit_neighborhood_samples(&m, &g, 40, &[-0.02, -0.01, 0.01, 0.02]).unwrap();
    let plain = pressure_estimate(&m, &samples, Weight::HalfLogJu, 0.05, 8.0 * g.period).unwrap();
    let damped = pressure_estimate(&m, &samples, Weight::HalfLogJuMinusDamping(&a), 0.05, 8.0 * g.period).unwrap();
    assert!((plain.pressure - damped.pressure).abs() <= 1e-3, "{} vs {}", plain.pressure, damped.pressure);
}

#[test]
fn shadow_excess_vanishes_on_the_orbit() {
    let m = ychannel();
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0)).unwrap();
    let e = shadow_average_check(&m, &well(), &g, &g.rho0, 10.0, ShadowOptions::default()).unwrap();
    assert!(e.abs() <= 1e-6, "{e}");
}

#[test]
fn stable_displacement_has_bounded_excess() {
    let m = ychannel();
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0)).unwrap();
    let rho2 = displaced(&g, &g.e_s, 1e-3);
    let horizons: Vec<f64> = (1..=20).map(|k| 10.0 * k as f64).collect();
    let opts = ShadowOptions { reanchor: true, ..Default::default() };
    let r = shadow_average_scan(&m, &well(), &g, &rho2, &horizons, opts).unwrap();
    assert!(r.escape_time.is_none());
    assert_eq!(r.excess.len(), horizons.len());
    assert!(r.slope.abs() <= 1e-3, "{}", r.slope);
}

#[test]
fn unstable_displacement_escapes_near_the_hyperbolic_time() {
    let m = ychannel();
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0)).unwrap();
    let rho2 = displaced(&g, &g.e_u, 1e-3);
    let r = shadow_average_scan(&m, &well(), &g, &rho2, &[10.0, 50.0], ShadowOptions::default()).unwrap();
    let t = r.escape_time.expect("leaves the tube");
    let oracle = (1.0f64 / 1e-3).ln() / g.lambda;
    assert!(t > 0.5 * oracle && t < 3.0 * oracle, "escape {t}, oracle {oracle}");
    assert!(matches!(
        shadow_average_check(&m, &well(), &g, &rho2, 50.0, ShadowOptions::default()),
        Err(dwe_core::Error::LeftTube { .. })
    ));
}
