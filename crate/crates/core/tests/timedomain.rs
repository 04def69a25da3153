use std::f64::consts::TAU;

use dwe_core::geometry::*;
use dwe_core::timedomain::*;
use dwe_core::{Damping, Error, Metric};
use proptest::prelude::*;

fn flat(n: usize) -> Metric {
    build_metric(&MetricPreset::Flat, 1.0, n).unwrap()
}

fn ychannel(n: usize) -> Metric {
    build_metric(&MetricPreset::YChannel { eps: 0.1 }, 1.0, n).unwrap()
}

fn damping(p: DampingPreset, n: usize) -> Damping {
    build_damping(&p, 1.0, n).unwrap()
}

/// Amplitude of `cos(k.x) T(t)` with `T'' + 2c T' + w^2 T = 0`, `T(0) = 1`, `T'(0) = 0`.
fn damped_amplitude(w: f64, c: f64, t: f64) -> f64 {
    let om = (w * w - c * c).sqrt();
    (-c * t).exp() * ((om * t).cos() + c / om * (om * t).sin())
}

#[test]
fn flat_mode_oscillates_at_its_frequency() {
    let n = 16;
    let st = WaveStepper::new(&flat(n), &damping(DampingPreset::Zero, n)).unwrap();
    let s0 = WaveState::cosine_mode(n, 1.0, (2, 1), 1.0);
    let (s1, _) = st.run(&s0, 1e-3, 10_000, 1000).unwrap();
    let w = TAU * 5f64.sqrt();
    let err = s1.v.iter().zip(&s0.v).map(|(a, b)| (a - (w * s1.t).cos() * b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-8, "{err}");
}

#[test]
fn damped_mode_matches_oscillator_solution() {
    let n = 16;
    let c = 0.5;
    let st = WaveStepper::new(&flat(n), &damping(DampingPreset::Constant { c }, n)).unwrap();
    let s0 = WaveState::cosine_mode(n, 1.0, (2, 1), 1.0);
    let (s1, _) = st.run(&s0, 1e-3, 5000, 1000).unwrap();
    let amp = damped_amplitude(TAU * 5f64.sqrt(), c, s1.t);
    let err = s1.v.iter().zip(&s0.v).map(|(a, b)| (a - amp * b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-5, "{err}");
}

#[test]
fn mode_energy_oracle() {
    // E = (1/2) int |grad v|^2 = w^2 / 4 for a unit cosine
    let n = 16;
    let st = WaveStepper::new(&flat(n), &damping(DampingPreset::Zero, n)).unwrap();
    let s = WaveState::cosine_mode(n, 1.0, (2, 1), 1.0);
    let w2 = TAU * TAU * 5.0;
    assert!((st.energy(&s) - w2 / 4.0).abs() < 1e-10);
    assert!((energy_flat(&s, 1.0) - w2 / 4.0).abs() < 1e-10);
}

#[test]
fn undamped_energy_is_conserved_on_ychannel() {
    let n = 16;
    let st = WaveStepper::new(&ychannel(n), &damping(DampingPreset::Zero, n)).unwrap();
    let g = WaveState::gaussian(n, 1.0, [0.5, 0.3], 0.1);
    let (_, tr) = st.run(&g, 2e-3, 10_000, 10).unwrap();
    assert!(tr.relative_drift() <= 1e-9, "{}", tr.relative_drift());
}

#[test]
fn undamped_flow_is_time_reversible() {
    let n = 16;
    let st = WaveStepper::new(&ychannel(n), &damping(DampingPreset::Zero, n)).unwrap();
    let g = WaveState::gaussian(n, 1.0, [0.5, 0.3], 0.1);
    let (f, _) = st.run(&g, 2e-3, 500, 100).unwrap();
    let (b, _) = st.run(&f, -2e-3, 500, 100).unwrap();
    assert!(b.max_diff(&g) < 1e-10);
}

#[test]
fn damped_energy_is_monotone() {
    let n = 16;
    let d = damping(DampingPreset::SmoothWell { center: 0.5, radius: 0.15, depth: 1.0 }, n);
    let st = WaveStepper::new(&ychannel(n), &d).unwrap();
    let g = WaveState::gaussian(n, 1.0, [0.3, 0.3], 0.1);
    let (_, tr) = st.run(&g, 2e-3, 2000, 1).unwrap();
    assert!(tr.is_monotone(1e-10), "{}", tr.max_step_rise);
    assert!(tr.samples.last().unwrap().1 < tr.samples[0].1);
}

#[test]
fn strang_splitting_is_second_order() {
    let n = 16;
    let d = damping(DampingPreset::SmoothWell { center: 0.5, radius: 0.15, depth: 1.0 }, n);
    let st = WaveStepper::new(&ychannel(n), &d).unwrap();
    let g = WaveState::gaussian(n, 1.0, [0.5, 0.3], 0.1);
    let run = |dt: f64, k: usize| st.run(&g, dt, k, k).unwrap().0;
    let reference = run(1e-3 / 16.0, 16 * 200);
    let coarse = run(1e-3, 200).max_diff(&reference);
    let fine = run(5e-4, 400).max_diff(&reference);
    let ratio = coarse / fine;
    assert!((3.5..4.6).contains(&ratio), "{ratio}");
}

#[test]
fn discrete_energy_identity() {
    let n = 16;
    let d = damping(DampingPreset::SmoothWell { center: 0.5, radius: 0.15, depth: 1.0 }, n);
    let st = WaveStepper::new(&ychannel(n), &d).unwrap();
    let mut s = WaveState::gaussian(n, 1.0, [0.3, 0.3], 0.1);
    let e0 = st.energy(&s);
    let dt = 1e-3;
    for _ in 0..100 {
        let next = st.step(&s, dt).unwrap();
        let de = st.energy(&next) - st.energy(&s);
        let diss = 0.5 * dt * (st.dissipation(&s) + st.dissipation(&next));
        assert!((de + diss).abs() / e0 < 1e-8);
        s = next;
    }
}

#[test]
fn cfl_guard() {
    let n = 16;
    let st = WaveStepper::new(&ychannel(n), &damping(DampingPreset::Zero, n)).unwrap();
    assert!((st.cfl() - cfl_limit(&ychannel(n))).abs() < 1e-15);
    let s = WaveState::zero(n);
    assert!(matches!(st.step(&s, 2.0 * st.cfl()), Err(Error::Cfl { .. })));
}

#[test]
fn state_constructor_checks() {
    assert!(WaveState::new(vec![0.0; 4], vec![0.0; 3]).is_err());
    assert!(WaveState::new(vec![f64::NAN; 4], vec![0.0; 4]).is_err());
    assert_eq!(WaveState::<f64>::zero(8).grid_size(), 8);
}

#[test]
fn f32_stepper_conserves_energy_loosely() {
    let n = 16;
    let m: dwe_core::Metric32 = build_metric(&MetricPreset::Flat, 1.0f32, n).unwrap();
    let z: dwe_core::Damping32 = build_damping(&DampingPreset::Zero, 1.0f32, n).unwrap();
    let st = WaveStepper::new(&m, &z).unwrap();
    let g = WaveState::<f32>::gaussian(n, 1.0, [0.5, 0.5], 0.1);
    let (_, tr) = st.run(&g, 1e-3, 1000, 10).unwrap();
    assert!(tr.relative_drift() < 1e-4);
}

fn synthetic(f: impl Fn(f64) -> f64) -> EnergyTrace {
    EnergyTrace::from_samples((0..2000).map(|i| {
        let t = i as f64 * 0.01;
        (t, f(t))
    }).collect())
}

#[test]
fn fits_recover_synthetic_models() {
    let e = decay_fit(&synthetic(|t| 2.0 * (-0.7 * t).exp()), DecayModel::Exponential).unwrap();
    assert!((e.rate - 0.7).abs() < 1e-10 && (e.intercept - 2f64.ln()).abs() < 1e-10);
    let s = decay_fit(&synthetic(|t| (-t.sqrt()).exp()), DecayModel::Stretched).unwrap();
    assert!((s.exponent.unwrap() - 0.5).abs() < 1e-4 && (s.rate - 1.0).abs() < 1e-3);
    let p = decay_fit(&synthetic(|t| (1.0 + t).powf(-2.0)), DecayModel::Power).unwrap();
    assert!((p.rate - 2.0).abs() < 1e-10);
}

#[test]
fn fit_preconditions() {
    let short = EnergyTrace::from_samples((0..10).map(|i| (i as f64, 1.0)).collect());
    assert!(decay_fit(&short, DecayModel::Exponential).is_err());
    let fast = decay_fit(&synthetic(|t| (-5.0 * t).exp()), DecayModel::Exponential).unwrap();
    assert!(fast.truncated);
}

#[test]
fn trace_csv_header() {
    let tr = EnergyTrace::from_samples(vec![(0.0, 1.0), (0.1, 0.9)]);
    assert!(tr.to_csv().starts_with("t,E\n"));
    assert!(tr.is_monotone(0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn constant_damping_never_increases_energy(c in 0.0f64..2.0, kx in 0i32..4, ky in 1i32..4) {
        let n = 16;
        let st = WaveStepper::new(&flat(n), &damping(DampingPreset::Constant { c }, n)).unwrap();
        let s0 = WaveState::cosine_mode(n, 1.0, (kx, ky), 1.0);
        let (_, tr) = st.run(&s0, 2e-3, 300, 1).unwrap();
        prop_assert!(tr.is_monotone(1e-12));
    }

    #[test]
    fn energy_is_quadratic(s in -3.0f64..3.0) {
        let n = 16;
        let st = WaveStepper::new(&ychannel(n), &damping(DampingPreset::Zero, n)).unwrap();
        let g = WaveState::gaussian(n, 1.0, [0.4, 0.6], 0.12);
        let scaled = WaveState::new(g.v.iter().map(|x| s * x).collect(), g.v_t.clone()).unwrap();
        prop_assert!((st.energy(&scaled) - s * s * st.energy(&g)).abs() < 1e-10 * (1.0 + st.energy(&scaled)));
    }
}
