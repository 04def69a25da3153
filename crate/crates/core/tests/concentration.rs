use std::f64::consts::TAU;

use dwe_core::concentration::*;
use dwe_core::dynamics::{find_closed_geodesic, ClosedGeodesic, SectionGuess};
use dwe_core::geometry::*;
use dwe_core::quantization::*;
use dwe_core::{Damping, Metric, C64};
use faer::Mat;
use proptest::prelude::*;

fn ychannel(n: usize) -> Metric {
    build_metric(&MetricPreset::YChannel { eps: 0.1 }, 1.0, n).unwrap()
}

fn zero(n: usize) -> Damping {
    build_damping(&DampingPreset::Zero, 1.0, n).unwrap()
}

fn orbit(m: &Metric) -> ClosedGeodesic {
    find_closed_geodesic(m, &SectionGuess::horizontal(0.0)).unwrap()
}

fn lambda_oracle(eps: f64) -> f64 {
    TAU * eps.sqrt() * eps.exp()
}

#[test]
fn falloff_endpoints() {
    assert_eq!(falloff(-1.0), 1.0);
    assert_eq!(falloff(0.0), 1.0);
    assert_eq!(falloff(1.0), 0.0);
    assert!((falloff(0.5) - 0.5).abs() < 1e-15);
}

#[test]
fn tube_cutoff_invariants() {
    let m = ychannel(16);
    let g = orbit(&m);
    let tube = build_tube_cutoff(&m, &g, 1.0 / 27.0, DEFAULT_NU_BAR).unwrap();
    let inv = tube.verify(24);
    assert!(inv.holds(), "{inv:?}");
    let w = tube.width;
    assert_eq!(tube.profile(0.4 * w), 1.0);
    assert_eq!(tube.profile(2.0 * w), 0.0);
    assert!((w - (1.0f64 / 27.0).powf(DEFAULT_NU_BAR)).abs() < 1e-15);
}

#[test]
fn tube_cutoff_errors() {
    let m = ychannel(16);
    let g = orbit(&m);
    assert!(build_tube_cutoff(&m, &g, 0.05, 0.6).is_err());
    let flat: Metric = build_metric(&MetricPreset::Flat, 1.0, 16).unwrap();
    let fg = orbit(&flat);
    assert!(build_tube_cutoff(&flat, &fg, 0.05, 0.3).is_err());
    let geom = OrbitGeometry::new(&m, &g).unwrap();
    assert!(TubeCutoff::around(&m, geom, 0.05, 0.6, 0.3).is_err());
}

#[test]
fn quantized_tube_lies_between_zero_and_one() {
    let m = ychannel(16);
    let g = orbit(&m);
    let grid = FourierGrid::new(16, 1.0 / 16.0, 1.0).unwrap();
    let tube = build_tube_cutoff(&m, &g, 1.0 / 16.0, DEFAULT_NU_BAR).unwrap();
    let op = tube.quantize(&grid);
    assert!(op.min_hermitian_eigenvalue().unwrap() >= -1e-10);
    let d = op.dim();
    let rest = OperatorMatrix::new(Mat::<C64>::identity(d, d) - &op.mat, op.provenance, op.hbar);
    assert!(rest.min_hermitian_eigenvalue().unwrap() >= -1e-10);
    let psi = WaveFunction::plane_wave(&grid, (3, 0));
    let mass = tube_mass_with(&op, &psi).mass;
    assert!((0.0..=1.0).contains(&mass));
}

#[test]
fn outside_mass_scan_needs_five_modes() {
    let grid = FourierGrid::new(16, 1.0 / 16.0, 1.0).unwrap();
    let op = quantize_antiwick(&SymbolField::constant(0.5), &grid);
    let few = vec![WaveFunction::plane_wave(&grid, (1, 0)); 3];
    assert!(mass_outside_scan(&[(1.0 / 16.0, few, op.clone())]).is_err());
    let many: Vec<_> = (1..6).map(|k| WaveFunction::plane_wave(&grid, (k, 0))).collect();
    let r = mass_outside_scan(&[(1.0 / 16.0, many, op)]).unwrap();
    assert!((r.rows[0].outside - 0.5).abs() < 1e-10);
    assert!((r.rows[0].product - 0.5 * 16f64.ln()).abs() < 1e-9);
}

#[test]
fn partition_sums_to_slab() {
    let m = ychannel(16);
    let g = orbit(&m);
    let p = build_partition(&m, &g, DEFAULT_EPS, g.period / 2.0, DEFAULT_DELTA).unwrap();
    assert_eq!(p.cells, 2);
    assert_eq!(p.alphabet_size(), 3);
    let r = p.verify(16);
    assert!(r.sum_defect < 1e-12, "{r:?}");
    assert!(r.min >= 0.0 && r.max <= 1.0 + 1e-12);
    assert!(r.cells_meet_orbit && r.infinity_off_tube);
}

#[test]
fn partition_rejects_narrow_slab() {
    let m = ychannel(16);
    let g = orbit(&m);
    assert!(build_partition(&m, &g, DEFAULT_EPS, 1.0, 0.05).is_err());
}

#[test]
fn lambda_words_follow_the_orbit() {
    let m = ychannel(16);
    let g = orbit(&m);
    let p = build_partition(&m, &g, DEFAULT_EPS, g.period / 3.0, DEFAULT_DELTA).unwrap();
    assert_eq!(p.cells, 3);
    let words = p.lambda_words(4);
    assert_eq!(words.len(), p.cells);
    for w in &words {
        assert!(p.admissible(w));
        assert_eq!(w.len(), 4);
    }
    assert_eq!(p.orbit_word(0, 4), vec![0, 1, 2, 0]);
    assert!(!p.admissible(&[0, p.infinity()]));
    assert!(!p.admissible(&[0, 2]));
}

#[test]
fn cell_pressure_oracle() {
    // translation invariance in x: J^u_t = e^{-lambda t} everywhere on the orbit
    let m = ychannel(16);
    let g = orbit(&m);
    let n0 = g.period / 2.0;
    let p = build_partition(&m, &g, DEFAULT_EPS, n0, DEFAULT_DELTA).unwrap();
    let (sum, p0) = p.pressure_sum(&m, &zero(16), &g).unwrap();
    let lam = lambda_oracle(0.1);
    let want = 2.0 * (-lam * n0 / 2.0).exp();
    assert!((sum - want).abs() < 2e-3 * want, "{sum} vs {want}");
    assert!((p0 - (lam / 2.0 - 2f64.ln() / n0)).abs() < 1e-2);
}

#[test]
fn completeness_and_telescoping_identities() {
    let m = ychannel(16);
    let g = orbit(&m);
    let p = build_partition(&m, &g, DEFAULT_EPS, g.period / 2.0, DEFAULT_DELTA).unwrap();
    let grid = FourierGrid::new(16, 1.0 / 16.0, 1.0).unwrap();
    let ctx = CylinderContext::new(&p, &m, &zero(16), &grid, C64::new(0.5, 0.0)).unwrap();
    let chi = quantize_weyl(&slab_cutoff(DEFAULT_DELTA), &grid);
    assert!(partition_completeness(&ctx, 1, &chi).unwrap() <= 1e-6);
    let s = sumsplit_check(&ctx, 2, 2);
    assert!(s.defect <= 1e-10 && s.lhs_norm > 0.0, "{s:?}");
    let sum = partition_sum(&ctx);
    let cyl = ctx.cylinder(&[p.infinity()]);
    assert_eq!(cyl.nrows(), ctx.dim());
    assert!(sum.norm_max().is_finite());
}

#[test]
fn invariance_is_exact_for_constant_symbol() {
    let m = ychannel(16);
    let grid = FourierGrid::new(16, 1.0 / 16.0, 1.0).unwrap();
    let psi = WaveFunction::plane_wave(&grid, (2, 1));
    let r = invariance_residual(&m, &zero(16), &psi, C64::new(16.0, 0.0), &SymbolField::constant(1.0), 1.0, &grid, 2.5e-3)
        .unwrap();
    assert!(r.residual <= 1e-8, "{r:?}");
    assert!(invariance_residual(&m, &zero(16), &psi, C64::new(16.0, 0.0), &SymbolField::constant(1.0), 3.0, &grid, 1e-2)
        .is_err());
}

#[test]
fn linear_slope_recovers_line() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y: Vec<f64> = x.iter().map(|v| 0.5 - 1.25 * v).collect();
    assert!((linear_slope(&x, &y) + 1.25).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn falloff_is_monotone(a in -0.5f64..1.5, b in -0.5f64..1.5) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(falloff(lo) >= falloff(hi));
        prop_assert!((0.0..=1.0).contains(&falloff(a)));
    }

    #[test]
    fn partition_is_pointwise_complete(x in 0.0f64..1.0, y in 0.0f64..1.0, r in 0.0f64..2.0, th in 0.0f64..TAU) {
        let m = ychannel(16);
        let g = orbit(&m);
        let p = build_partition(&m, &g, DEFAULT_EPS, g.period / 2.0, DEFAULT_DELTA).unwrap();
        let (a, c) = (r * th.cos(), r * th.sin());
        let total: f64 = (0..p.alphabet_size()).map(|k| p.eval(k, x, y, a, c)).sum();
        prop_assert!((total - p.slab(a, c)).abs() < 1e-12);
    }
}
