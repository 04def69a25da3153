use std::f64::consts::{PI, TAU};

use dwe_core::geometry::*;
use dwe_core::{Damping, Error, Metric};
use num_complex::Complex;
use proptest::prelude::*;

fn ychannel(eps: f64, n: usize) -> Metric {
    build_metric(&MetricPreset::YChannel { eps }, 1.0, n).unwrap()
}

#[test]
fn ychannel_phi_matches_closed_form() {
    let m = ychannel(0.1, 32);
    for &(x, y) in &[(0.0, 0.0), (0.3, 0.25), (0.7, 0.6)] {
        let exact = -0.1 * (TAU * y).cos();
        assert!((m.phi(x, y) - exact).abs() < 1e-14);
    }
}

#[test]
fn ychannel_curvature_oracle() {
    // K = -e^{-2 phi} Delta phi with phi = -eps cos(2 pi y)
    let eps = 0.1;
    let m = ychannel(eps, 32);
    for &y in &[0.0, 0.1, 0.37, 0.5] {
        let phi = -eps * (TAU * y).cos();
        let lap = 4.0 * PI * PI * eps * (TAU * y).cos();
        let exact = -(-2.0 * phi).exp() * lap;
        assert!((m.curvature_at(0.2, y) - exact).abs() < 1e-10, "y = {y}");
    }
}

#[test]
fn gauss_bonnet_vanishes_on_the_torus() {
    for preset in [
        MetricPreset::YChannel { eps: 0.1 },
        MetricPreset::Bumpy { eps: 0.05, modes: vec![(1, 0), (1, 1), (0, 2)] },
    ] {
        let m: Metric = build_metric(&preset, 1.0, 32).unwrap();
        assert!(m.gauss_bonnet().abs() < 1e-10, "{preset:?}");
    }
}

#[test]
fn flat_area_is_l_squared() {
    let m: Metric = build_metric(&MetricPreset::Flat, 2.0, 16).unwrap();
    assert!(m.is_flat());
    assert!((m.area() - 4.0).abs() < 1e-12);
}

#[test]
fn ychannel_area_against_bessel_series() {
    // integral of exp(-2 eps cos(2 pi y)) dy = I_0(2 eps)
    let eps: f64 = 0.1;
    let x = 2.0 * eps;
    let mut i0 = 0.0;
    let mut term = 1.0;
    for k in 0..20 {
        if k > 0 {
            term *= (x / 2.0) * (x / 2.0) / (k as f64 * k as f64);
        }
        i0 += term;
    }
    assert!((ychannel(eps, 32).area() - i0).abs() < 1e-12);
}

#[test]
fn aliasing_guard_rejects_high_band() {
    let m: Metric = build_metric(&MetricPreset::Bumpy { eps: 0.1, modes: vec![(5, 0)] }, 1.0, 16).unwrap();
    let grid = dwe_core::quantization::FourierGrid::new(16, 0.1, 1.0).unwrap();
    let r = dwe_core::quantization::laplace_beltrami(&m, &grid);
    assert!(matches!(r, Err(Error::Aliasing { band: 5, limit: 4 })));
}

#[test]
fn rejects_bad_presets() {
    assert!(build_metric::<f64>(&MetricPreset::YChannel { eps: 0.0 }, 1.0, 16).is_err());
    assert!(build_metric::<f64>(&MetricPreset::Flat, -1.0, 16).is_err());
    let well = DampingPreset::SmoothWell { center: 0.0, radius: 0.7, depth: 1.0 };
    assert!(build_damping::<f64>(&well, 1.0, 16).is_err());
    assert!(build_damping::<f64>(&DampingPreset::Series, 1.0, 16).is_err());
}

#[test]
fn negative_damping_rejected_when_nonnegativity_requested() {
    let s = FourierSeries::constant(1.0, -0.2);
    assert!(matches!(DampingField::from_series(s.clone(), 16, true), Err(Error::NegativeDamping { .. })));
    let d = DampingField::from_series(s, 16, false).unwrap();
    assert!(!d.nonnegative);
}

#[test]
fn smooth_well_vanishes_on_its_strip() {
    let d: Damping =
        build_damping(&DampingPreset::SmoothWell { center: 0.0, radius: 0.1, depth: 1.0 }, 1.0, 32).unwrap();
    let strip = d.strip.unwrap();
    assert!(strip.max_on_strip <= STRIP_TOLERANCE);
    assert!(d.nonnegative);
    assert!((d.a(0.3, 0.5) - 1.0).abs() < 1e-12);
    assert!(d.min >= -1e-15);
}

#[test]
fn constant_damping_reports_constant() {
    let d: Damping = build_damping(&DampingPreset::Constant { c: 0.5 }, 1.0, 16).unwrap();
    assert_eq!(d.as_constant(), Some(0.5));
    let z: Damping = build_damping(&DampingPreset::Zero, 1.0, 16).unwrap();
    assert!(z.is_zero());
}

#[test]
fn metric_json_round_trip() {
    let m = ychannel(0.1, 32);
    let back: Metric = ConformalMetric::from_json(&m.to_json()).unwrap();
    assert_eq!(back.phi_series(), m.phi_series());
    assert_eq!(back.grid_size(), m.grid_size());
}

#[test]
fn from_map_rejects_non_hermitian_coefficients() {
    let mut map = std::collections::BTreeMap::new();
    map.insert((1, 0), Complex::new(1.0, 0.0));
    assert!(FourierSeries::from_map(1.0, map).is_err());
}

#[test]
fn laplacian_of_cosine() {
    let s = FourierSeries::from_half(1.0, &[((2, 1), Complex::new(0.5, 0.0))]).unwrap();
    let lap = s.laplacian();
    let k2 = TAU * TAU * 5.0;
    for &(x, y) in &[(0.1, 0.2), (0.45, 0.8)] {
        assert!((lap.eval(x, y) + k2 * (TAU * (2.0 * x + y)).cos()).abs() < 1e-10);
    }
}

#[test]
fn f32_metric_tracks_f64() {
    let m64 = ychannel(0.1, 16);
    let m32: dwe_core::Metric32 = build_metric(&MetricPreset::YChannel { eps: 0.1 }, 1.0f32, 16).unwrap();
    for &(x, y) in &[(0.1, 0.2), (0.5, 0.9)] {
        assert!((m32.phi(x as f32, y as f32) as f64 - m64.phi(x, y)).abs() < 1e-6);
    }
}

fn series_strategy() -> impl Strategy<Value = Vec<((i32, i32), (f64, f64))>> {
    prop::collection::vec(((-3i32..=3, 1i32..=3), (-1.0f64..1.0, -1.0f64..1.0)), 1..5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn series_eval_matches_direct_sum(half in series_strategy(), x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let h: Vec<_> = half.iter().map(|&(k, (a, b))| (k, Complex::new(a, b))).collect();
        let s = FourierSeries::from_half(1.0, &h).unwrap();
        prop_assert!(s.is_hermitian());
        prop_assert!((s.eval(x, y) - s.eval_direct(x, y)).abs() < 1e-12);
    }

    #[test]
    fn series_is_periodic(half in series_strategy(), x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let h: Vec<_> = half.iter().map(|&(k, (a, b))| (k, Complex::new(a, b))).collect();
        let s = FourierSeries::from_half(1.0, &h).unwrap();
        prop_assert!((s.eval(x, y) - s.eval(x + 1.0, y - 1.0)).abs() < 1e-11);
    }

    #[test]
    fn derivatives_match_finite_differences(half in series_strategy(), x in 0.0f64..1.0, y in 0.0f64..1.0) {
        let h: Vec<_> = half.iter().map(|&(k, (a, b))| (k, Complex::new(a, b))).collect();
        let s = FourierSeries::from_half(1.0, &h).unwrap();
        let d = s.eval_derivs(x, y);
        let e = 1e-6;
        let fx = (s.eval(x + e, y) - s.eval(x - e, y)) / (2.0 * e);
        let fy = (s.eval(x, y + e) - s.eval(x, y - e)) / (2.0 * e);
        prop_assert!((d.fx - fx).abs() < 1e-5 * (1.0 + fx.abs()));
        prop_assert!((d.fy - fy).abs() < 1e-5 * (1.0 + fy.abs()));
    }

    #[test]
    fn gauss_bonnet_for_random_bumpy(eps in 0.01f64..0.15, kx in 0i32..3, ky in 1i32..3) {
        let m: Metric = build_metric(&MetricPreset::Bumpy { eps, modes: vec![(kx, ky)] }, 1.0, 32).unwrap();
        prop_assert!(m.gauss_bonnet().abs() < 1e-9);
    }
}
