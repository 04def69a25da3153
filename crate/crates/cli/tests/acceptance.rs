//! Acceptance criteria 1-12. Prints one PASS/FAIL line per criterion, then asserts that all passed.

use std::f64::consts::TAU;
use std::path::Path;
use std::time::Instant;

use anyhow::Result;
use dwe_core::concentration::*;
use dwe_core::dynamics::*;
use dwe_core::geometry::*;
use dwe_core::quantization::*;
use dwe_core::spectrum::*;
use dwe_core::timedomain::*;
use dwe_core::{Damping, Metric, C64};
use dwe_lab::pipelines::{egorov_grid, egorov_symbol, envelope_deviation, generic_symbol, xi_bump};
use dwe_lab::report::CheckKind;
use dwe_lab::{Cache, ExperimentConfig, Run, RunReport};

const EPS: f64 = 0.1;

fn metric(p: &MetricPreset, n: usize) -> Result<Metric> {
    Ok(build_metric(p, 1.0, n)?)
}

fn damping(p: &DampingPreset, n: usize) -> Result<Damping> {
    Ok(build_damping(p, 1.0, n)?)
}

fn ychannel() -> MetricPreset {
    MetricPreset::YChannel { eps: EPS }
}

fn well() -> DampingPreset {
    DampingPreset::SmoothWell { center: 0.0, radius: 0.1, depth: 1.0 }
}

/// Exponent of `{y = 0}` in the y-channel: period `e^{-eps}`, `lambda = 2 pi sqrt(eps) e^eps`.
fn lambda_oracle(eps: f64) -> f64 {
    TAU * eps.sqrt() * eps.exp()
}

fn spectrum(m: &MetricPreset, d: &DampingPreset, n: usize) -> Result<SpectrumResult> {
    let p = QuadraticPencil::new(&metric(m, n)?, &damping(d, n)?)?;
    Ok(solve_spectrum(&p, resolved_window(n, 1.0))?)
}

fn closed_form(n: usize, c: f64, window: f64) -> Vec<C64> {
    let half = n as i32 / 2;
    let mut out = Vec::new();
    for kx in -half..half {
        for ky in -half..half {
            let r = C64::new(TAU * TAU * (kx * kx + ky * ky) as f64 - c * c, 0.0).sqrt();
            out.extend([C64::new(0.0, -c) + r, C64::new(0.0, -c) - r].into_iter().filter(|t| t.norm() <= window));
        }
    }
    out
}

struct Ctx {
    dir: tempfile::TempDir,
    cache: Cache,
    ychannel_cfg: ExperimentConfig,
    flat: Vec<(f64, SpectrumResult)>,
    ychannel_well: Option<SpectrumResult>,
}

type Outcome = Result<(bool, String)>;

fn c1(ctx: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let n = 32;
    let w = resolved_window(n, 1.0);
    let mut ok = true;
    let mut detail = Vec::new();
    for c in [0.0, 0.5] {
        let d = if c == 0.0 { DampingPreset::Zero } else { DampingPreset::Constant { c } };
        let r = spectrum(&MetricPreset::Flat, &d, n)?;
        let inner = w * (1.0 - 1e-6);
        let exact = closed_form(n, c, w);
        let got = r.taus();
        let err = match_defect(&exact, &got, inner).max(match_defect(&got, &exact, inner));
        let res = r.max_residual();
        ok &= err <= 1e-8 && res <= 1e-8;
        detail.push(format!("c={c}: match {err:.1e}, residual {res:.1e}"));
        ctx.flat.push((c, r));
    }
    let secs = t.elapsed().as_secs_f64();
    ok &= secs <= 120.0;
    Ok((ok, format!("{}, {secs:.0} s (<= 120 s)", detail.join("; "))))
}

fn c2(ctx: &mut Ctx) -> Outcome {
    let mut runs: Vec<(String, SpectrumResult)> =
        ctx.flat.iter().map(|(c, r)| (format!("flat c={c} N=32"), r.clone())).collect();
    let yw = spectrum(&ychannel(), &well(), 32)?;
    ctx.ychannel_well = Some(yw.clone());
    runs.push(("y-channel+well N=32".into(), yw));
    runs.push(("y-channel a=0 N=16".into(), spectrum(&ychannel(), &DampingPreset::Zero, 16)?));
    let bumpy = MetricPreset::Bumpy { eps: 0.05, modes: vec![(1, 0), (1, 1), (0, 2)] };
    runs.push(("bumpy+well N=16".into(), spectrum(&bumpy, &well(), 16)?));
    runs.push(("bumpy c=0.3 N=16".into(), spectrum(&bumpy, &DampingPreset::Constant { c: 0.3 }, 16)?));
    let mut ok = true;
    let mut worst = (0.0f64, f64::NEG_INFINITY);
    for (_, r) in &runs {
        let sym = r.symmetry_defect();
        let im = r.max_imag();
        ok &= sym <= 1e-8 && im <= 1e-10;
        worst = (worst.0.max(sym), worst.1.max(im));
    }
    Ok((ok, format!("{} presets: worst symmetry {:.1e} (<= 1e-8), max Im tau {:.1e} (<= 1e-10)", runs.len(), worst.0, worst.1)))
}

fn c3(ctx: &mut Ctx) -> Outcome {
    let n = 32;
    let m = metric(&ychannel(), n)?;
    let d = damping(&well(), n)?;
    let (a_minus, a_plus) = estimate_a_bounds(&m, &d, 400, 20.0, 0.01)?;
    let r = ctx.ychannel_well.as_ref().expect("criterion 2 ran");
    let s = strip_check(r, a_minus, a_plus, 0.1, 20.0);
    Ok((
        s.count > 0 && s.fraction == 1.0,
        format!(
            "{}/{} with Re tau >= 20 in [{:.3}, {:.3}] +- 0.1 (Im range [{:.3}, {:.3}])",
            s.inside, s.count, a_minus, a_plus, s.min_imag, s.max_imag
        ),
    ))
}

fn c4(_: &mut Ctx) -> Outcome {
    let t = Instant::now();
    let m = metric(&ychannel(), 32)?;
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0))?;
    let samples = orbit_neighborhood_samples(&m, &g, 40, &[-0.02, -0.01, 0.01, 0.02])?;
    let rep = pressure_estimate(&m, &samples, Weight::HalfLogJu, 0.05, 8.0 * g.period)?;
    let target = -lambda_oracle(EPS) / 2.0;
    let rel = (rep.pressure - target).abs() / target.abs();
    let secs = t.elapsed().as_secs_f64();
    Ok((
        rel <= 0.1 && secs <= 300.0,
        format!("P = {:.5}, -lambda/2 = {target:.5}, rel {rel:.1e} (<= 0.1), {secs:.1} s (<= 300 s)", rep.pressure),
    ))
}

fn c5(_: &mut Ctx) -> Outcome {
    let m = metric(&ychannel(), 32)?;
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0))?;
    let period_err = (g.period - (-EPS).exp()).abs();
    let lam_err = (g.lambda - lambda_oracle(EPS)).abs();
    let ju = unstable_jacobian(&m, &g, g.period)?;
    let ju_err = (ju - (-g.lambda * g.period).exp()).abs();
    let mut mult = 0.0f64;
    for (s, t) in [(0.3, 0.5), (0.5, 1.0), (1.0, 1.5)] {
        let (s, t) = (s * g.period, t * g.period);
        let whole = unstable_jacobian(&m, &g, s + t)?;
        let split = unstable_jacobian(&m, &g, s)? * unstable_jacobian_at(&m, &g, s, t)?;
        mult = mult.max((whole - split).abs() / whole);
    }
    Ok((
        ju_err <= 1e-4 && mult <= 1e-4 && lam_err <= 1e-4 * lambda_oracle(EPS),
        format!("|J^u_T - e^(-lambda T)| {ju_err:.1e}, multiplicativity {mult:.1e}, period err {period_err:.1e}, lambda err {lam_err:.1e}"),
    ))
}

fn c6(_: &mut Ctx) -> Outcome {
    let hbars = [1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0];
    let b = egorov_symbol();
    let mut rs = Vec::new();
    for &h in &hbars {
        let n = egorov_grid(h);
        let grid = FourierGrid::new(n, h, 1.0)?;
        let rep = egorov_residual(
            &metric(&MetricPreset::Flat, n)?,
            &damping(&DampingPreset::Zero, n)?,
            &b,
            1.0,
            &grid,
            EgorovOptions::default(),
        )?;
        rs.push(rep.residual);
    }
    let slope = loglog_slope(&hbars, &rs);
    let shown: Vec<String> = rs.iter().map(|r| format!("{r:.2e}")).collect();
    Ok((slope >= 0.9, format!("slope {slope:.3} (>= 0.9), residuals [{}]", shown.join(", "))))
}

fn c7(_: &mut Ctx) -> Outcome {
    let n = 16;
    let h = 1.0 / 16.0;
    let grid = FourierGrid::new(n, h, 1.0)?;
    let m = metric(&ychannel(), n)?;
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0))?;
    let tube = build_tube_cutoff(&m, &g, h, DEFAULT_NU_BAR)?;
    let wide = TubeCutoff::around(&m, OrbitGeometry::new(&m, &g)?, h, 0.15, DEFAULT_NU_BAR)?;
    let part = build_partition(&m, &g, DEFAULT_EPS, g.period / 2.0, DEFAULT_DELTA)?;
    let bank: Vec<SymbolField> = vec![
        SymbolField::constant(1.0),
        SymbolField::of_x("1 + cos", |x, _| 1.0 + (TAU * x).cos()),
        SymbolField::of_xi("ring", |a, b| xi_bump(a.hypot(b))),
        egorov_symbol(),
        generic_symbol(),
        tube.symbol(),
        wide.symbol(),
        tube.symbol().times(&generic_symbol()),
        part.symbol(0),
        slab_cutoff(DEFAULT_DELTA),
    ];
    let mut worst = f64::INFINITY;
    for b in &bank {
        worst = worst.min(quantize_antiwick(b, &grid).min_hermitian_eigenvalue()?);
    }
    Ok((worst >= -1e-10, format!("{} symbols, smallest eigenvalue {worst:.2e} (>= -1e-10)", bank.len())))
}

fn c8(_: &mut Ctx) -> Outcome {
    let n = 16;
    let m = metric(&ychannel(), n)?;
    let zero = damping(&DampingPreset::Zero, n)?;
    let g = find_closed_geodesic(&m, &SectionGuess::horizontal(0.0))?;
    let part = build_partition(&m, &g, DEFAULT_EPS, g.period / 2.0, DEFAULT_DELTA)?;
    let grid = FourierGrid::new(n, 1.0 / 16.0, 1.0)?;
    let ctx = CylinderContext::new(&part, &m, &zero, &grid, C64::new(0.5, 0.0))?;
    let chi = quantize_weyl(&slab_cutoff(DEFAULT_DELTA), &grid);
    let comp = partition_completeness(&ctx, 1, &chi)?;
    let split = [(2, 2), (3, 2), (2, 3)].iter().map(|&(n, k)| sumsplit_check(&ctx, n, k).defect).fold(0.0, f64::max);
    Ok((comp <= 1e-6 && split <= 1e-10, format!("completeness {comp:.1e} (<= 1e-6), sumsplit {split:.1e} (<= 1e-10)")))
}

fn dispersive(m: &MetricPreset, d: &DampingPreset) -> Result<(DispersiveReport, CylinderContext, ClosedGeodesic, Metric, Damping)> {
    let n = 32;
    let metric = metric(m, n)?;
    let damping = damping(d, n)?;
    let g = find_closed_geodesic(&metric, &SectionGuess::horizontal(0.0))?;
    let part = build_partition(&metric, &g, DEFAULT_EPS, 1.0, DEFAULT_DELTA)?;
    let grid = FourierGrid::new(n, 1.0 / 64.0, 1.0)?;
    let ctx = CylinderContext::new(&part, &metric, &damping, &grid, C64::new(0.5, 0.0))?;
    let rep = dispersive_check(&ctx, &metric, &damping, &g, 1, 10)?;
    Ok((rep, ctx, g, metric, damping))
}

fn c9(_: &mut Ctx) -> Outcome {
    let (y, ..) = dispersive(&ychannel(), &DampingPreset::Zero)?;
    let half = lambda_oracle(EPS) / 2.0;
    let rel = (y.rate - half).abs() / half;
    let (f, ..) = dispersive(&MetricPreset::Flat, &DampingPreset::Zero)?;
    Ok((
        rel <= 0.25 && f.rate <= 0.02,
        format!(
            "y-channel rate {:.4} vs lambda/2 {half:.4}, rel {rel:.3} (<= 0.25); flat control rate {:.4} (<= 0.02)",
            y.rate, f.rate
        ),
    ))
}

fn c10(_: &mut Ctx) -> Outcome {
    let (_, ctx, g, m, d) = dispersive(&ychannel(), &well())?;
    let beta = g.beta(&m, &d)?;
    let q = q_norm_check(&ctx, beta, 4, DEFAULT_KAPPA0)?;
    Ok((q.excess <= 0.05, format!("slope {:.4}, beta n0 {:.4}, excess {:.4} (<= 0.05)", q.slope, beta, q.excess)))
}

fn c11(_: &mut Ctx) -> Outcome {
    let n = 32;
    let ym = metric(&ychannel(), n)?;
    let init = WaveState::gaussian(n, 1.0, [0.5, 0.3], 0.08);
    let (_, cons) = WaveStepper::new(&ym, &damping(&DampingPreset::Zero, n)?)?.run(&init, 2e-3, 50_000, 100)?;
    let drift = cons.relative_drift();
    let (_, mono) = WaveStepper::new(&ym, &damping(&well(), n)?)?.run(&init, 2e-3, 10_000, 1)?;
    let monotone = mono.is_monotone(1e-10);
    let c = 0.5;
    let fm = metric(&MetricPreset::Flat, n)?;
    let mode = WaveState::cosine_mode(n, 1.0, (6, 0), 1.0);
    let (_, env) = WaveStepper::new(&fm, &damping(&DampingPreset::Constant { c }, n)?)?.run(&mode, 2e-3, 5000, 1)?;
    let dev = envelope_deviation(&env, c);
    Ok((
        drift <= 1e-9 && monotone && dev <= 0.02,
        format!(
            "a=0 drift {drift:.1e} over [0,100] (<= 1e-9); a>=0 monotone {monotone} (max rise {:.1e}); envelope dev {dev:.4} (<= 0.02)",
            mono.max_step_rise
        ),
    ))
}

fn trend(report: &RunReport, name: &str) -> Option<(bool, f64)> {
    report.checks.iter().find(|c| c.name == name && c.kind == CheckKind::Trend).map(|c| (c.passed, c.value))
}

fn c12(ctx: &mut Ctx) -> Outcome {
    let mut cfg = ctx.ychannel_cfg.clone();
    cfg.out = ctx.dir.path().join("trend");
    let run = Run::new(&cfg, &ctx.cache);
    let mut report = run.execute_and_write("tube-mass")?;
    let mut gaps = Vec::new();
    for n in [16, 32] {
        gaps.push(gap_scan(&spectrum(&ychannel(), &well(), n)?)?);
    }
    report.merge(run.execute_and_write("spectrum")?);
    let files = ["tube_mass.csv", "invariance.csv", "outside_mass.csv", "summary.txt"];
    let missing: Vec<&str> = files.iter().copied().filter(|f| !Path::new(&cfg.out).join(f).exists()).collect();
    let product = trend(&report, "outside mass product");
    let tube = trend(&report, "max tube mass");
    let inv = trend(&report, "invariance residual slope");
    let ok = missing.is_empty()
        && product.is_some_and(|p| p.0 && p.1 > 0.0)
        && tube.is_some_and(|t| t.0)
        && inv.is_some_and(|i| i.0)
        && gaps.iter().all(|&g| g > 0.0);
    Ok((
        ok,
        format!(
            "outside product min {:.3} (> 0); max tube mass {:.3} (<= 0.99); gap C N=16,32 {:.3}, {:.3} (> 0); invariance slope {:.2} (> 0); missing files {missing:?}",
            product.map_or(f64::NAN, |p| p.1),
            tube.map_or(f64::NAN, |t| t.1),
            gaps[0],
            gaps[1],
            inv.map_or(f64::NAN, |i| i.1),
        ),
    ))
}

#[test]
fn acceptance() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/y-channel.toml");
    let mut ctx = Ctx {
        cache: Cache::at(dir.path().join(".cache")),
        dir,
        ychannel_cfg: ExperimentConfig::load(Path::new(cfg_path)).unwrap(),
        flat: Vec::new(),
        ychannel_well: None,
    };
    let criteria: [(&str, fn(&mut Ctx) -> Outcome); 12] = [
        ("closed-form flat spectrum", c1),
        ("symmetry and dissipativity", c2),
        ("strip", c3),
        ("pressure oracle", c4),
        ("unstable Jacobian", c5),
        ("Egorov scaling", c6),
        ("anti-Wick positivity", c7),
        ("partition identities", c8),
        ("dispersive decay", c9),
        ("Q-bound", c10),
        ("energy", c11),
        ("trend reports", c12),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let (ok, detail) = f(&mut ctx).unwrap_or_else(|e| (false, format!("error: {e:#}")));
        println!(
            "criterion {:>2} {} {name}: {detail} [{:.1} s]",
            i + 1,
            if ok { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64()
        );
        if !ok {
            failed.push(i + 1);
        }
    }
    let total = start.elapsed().as_secs_f64();
    println!("acceptance suite: {total:.0} s (<= 3600 s)");
    assert!(total <= 3600.0);
    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
