//! Subcommand pipelines: each builds its inputs from the config, runs the core computation,
//! writes artifacts and records checks.

use std::f64::consts::TAU;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};

use dwe_core::concentration::{
    build_partition, build_tube_cutoff, dispersive_check, eigenmode_wavefunction, invariance_residual,
    mass_outside_scan, partition_completeness, q_norm_check, slab_cutoff, sumsplit_check, tube_mass_with,
    CylinderContext, OrbitGeometry, TubeCutoff, RATE_TOL,
};
use dwe_core::dynamics::{
    estimate_a_bounds, find_closed_geodesic, orbit_neighborhood_samples, pressure_estimate, ClosedGeodesic,
    SectionGuess, Weight,
};
use dwe_core::geometry::{build_damping, build_metric, DampingPreset, MetricPreset};
use dwe_core::quantization::{egorov_residual, loglog_slope, quantize_weyl, EgorovOptions, FourierGrid, SymbolField};
use dwe_core::spectrum::{
    flat_spectrum, gap_scan, imaginary_part_histogram, match_defect, resolved_window, resolvent_curve_scan,
    solve_spectrum, strip_check, weyl_count, Eigenpair, QuadraticPencil, SpectrumResult,
};
use dwe_core::timedomain::{compare_models, EnergyTrace, WaveState, WaveStepper};
use dwe_core::{Damping, Metric, C64};

use crate::cache::{Cache, Lookup};
use crate::config::{ExperimentConfig, InitialData};
use crate::report::RunReport;

pub const SUBCOMMANDS: [&str; 8] =
    ["spectrum", "resolvent-scan", "tube-mass", "pressure", "egorov", "cylinders", "decay", "all"];

pub struct Run<'a> {
    pub cfg: &'a ExperimentConfig,
    pub cache: &'a Cache,
    pub out: PathBuf,
}

impl<'a> Run<'a> {
    pub fn new(cfg: &'a ExperimentConfig, cache: &'a Cache) -> Self {
        Self { cfg, cache, out: cfg.out.clone() }
    }

    fn metric(&self, n: usize) -> Result<Metric> {
        Ok(build_metric(&self.cfg.metric, self.cfg.side, n)?)
    }

    fn damping(&self, n: usize) -> Result<Damping> {
        Ok(build_damping(&self.cfg.damping, self.cfg.side, n)?)
    }

    fn orbit(&self, metric: &Metric) -> Result<ClosedGeodesic> {
        Ok(find_closed_geodesic(metric, &SectionGuess::horizontal(0.0))?)
    }

    fn window(&self) -> f64 {
        self.cfg.window.tau_max.unwrap_or_else(|| resolved_window(self.cfg.n, self.cfg.side))
    }

    /// Eigensolve at the configured grid, through the cache.
    pub fn spectrum(&self, report: &mut RunReport) -> Result<SpectrumResult> {
        #[derive(Serialize)]
        struct Key<'k> {
            metric: &'k MetricPreset,
            damping: &'k DampingPreset,
            n: usize,
            side: f64,
            window: f64,
        }
        let n = self.cfg.n;
        let window = self.window();
        let key = Cache::key(
            "spectrum",
            &Key { metric: &self.cfg.metric, damping: &self.cfg.damping, n, side: self.cfg.side, window },
        );
        let t = Instant::now();
        let (stored, lookup) = self.cache.get_or_compute("spectrum", &key, || -> Result<StoredSpectrum> {
            let pencil = QuadraticPencil::new(&self.metric(n)?, &self.damping(n)?)?;
            Ok(StoredSpectrum::from(&solve_spectrum(&pencil, window)?))
        })?;
        report.wall_times.push(("eigensolve".into(), t.elapsed().as_secs_f64()));
        report.notes.push(format!("spectrum cache: {}", lookup_name(lookup)));
        Ok(stored.into_result())
    }

    pub fn execute(&self, sub: &str) -> Result<RunReport> {
        let mut report = match sub {
            "spectrum" => self.run_spectrum()?,
            "resolvent-scan" => self.run_resolvent()?,
            "tube-mass" => self.run_tube_mass()?,
            "pressure" => self.run_pressure()?,
            "egorov" => self.run_egorov()?,
            "cylinders" => self.run_cylinders()?,
            "decay" => self.run_decay()?,
            "all" => {
                let mut all = RunReport::new("all");
                for s in &SUBCOMMANDS[..7] {
                    match self.execute(s) {
                        Ok(rep) => all.merge(rep),
                        Err(e) => all.hard(&format!("{s} stage"), "cli::Run completes", false, f64::NAN, "no error", format!("{e:#}")),
                    }
                }
                all
            }
            other => bail!("unknown subcommand `{other}`"),
        };
        report.subcommand = sub.to_string();
        Ok(report)
    }

    /// Runs `sub` and writes `report.json`, `summary.txt` and `MANIFEST`.
    pub fn execute_and_write(&self, sub: &str) -> Result<RunReport> {
        let t = Instant::now();
        let mut report = self.execute(sub)?;
        report.wall_times.push(("total".into(), t.elapsed().as_secs_f64()));
        let summary = report.summary_table();
        report.emit(&self.out, "summary.txt", &summary, "summary table of checks and wall times")?;
        report.emit(&self.out, "config.toml", &self.cfg.to_toml(), "resolved configuration")?;
        let json = serde_json::to_string_pretty(&report)?;
        report.emit(&self.out, "report.json", &json, "run report: checks, artifacts, wall times")?;
        std::fs::write(self.out.join("MANIFEST"), report.manifest())?;
        Ok(report)
    }

    // -----------------------------------------------------------------------------------------

    fn run_spectrum(&self) -> Result<RunReport> {
        let mut r = RunReport::new("spectrum");
        let res = self.spectrum(&mut r)?;
        let n = self.cfg.n;
        let metric = self.metric(n)?;
        let damping = self.damping(n)?;
        r.emit(&self.out, "spectrum.csv", &res.to_csv(), "eigenvalues tau with companion residuals")?;
        r.emit(&self.out, "spectrum.json", &res.to_json(), "eigenvalue record")?;
        r.hard(
            "spectrum residual",
            "spectrum::Eigenpair residual",
            res.max_residual() <= 1e-8,
            res.max_residual(),
            "<= 1e-8",
            format!("{} pairs, {} rejected", res.pairs.len(), res.rejected),
        );
        r.hard(
            "conjugation symmetry",
            "spectrum::SpectrumResult tau <-> -conj(tau)",
            res.symmetry_defect() <= 1e-8,
            res.symmetry_defect(),
            "<= 1e-8",
            String::new(),
        );
        if damping.nonnegative {
            r.hard(
                "dissipativity",
                "spectrum::SpectrumResult a >= 0 => Im tau <= 0",
                res.max_imag() <= 1e-10,
                res.max_imag(),
                "<= 1e-10",
                String::new(),
            );
        }
        let constant = if damping.is_zero() { Some(0.0) } else { damping.as_constant() };
        if let (true, Some(c)) = (metric.is_flat(), constant) {
            let w = res.window * (1.0 - 1e-6);
            let exact = flat_spectrum(n, self.cfg.side, c, res.window);
            let got = res.taus();
            let d = match_defect(&got, &exact, w).max(match_defect(&exact, &got, w));
            r.hard("closed-form match", "spectrum::solve_spectrum flat closed form", d <= 1e-8, d, "<= 1e-8", format!("c = {c}"));
        }
        let d = &self.cfg.dynamics;
        let t = Instant::now();
        let (a_minus, a_plus) = estimate_a_bounds(&metric, &damping, d.samples, d.horizon, d.dt)?;
        r.wall_times.push(("a-bounds".into(), t.elapsed().as_secs_f64()));
        let w = &self.cfg.window;
        let strip = strip_check(&res, a_minus, a_plus, w.strip_tol, w.strip_re_min);
        r.emit(&self.out, "strip.json", &serde_json::to_string_pretty(&strip)?, "strip check against A-/A+")?;
        r.hard(
            "strip",
            "spectrum::strip_check fraction = 1",
            strip.fraction == 1.0 || strip.count == 0,
            strip.fraction,
            "= 1",
            format!("A- = {a_minus:.4}, A+ = {a_plus:.4}, {} of {} inside", strip.inside, strip.count),
        );
        if !damping.is_zero() && damping.nonnegative {
            match gap_scan(&res) {
                Ok(g) => r.trend("gap constant", "spectrum::gap_scan C_emp > 0", g > 0.0, g, "> 0", format!("N = {n}")),
                Err(e) => r.notes.push(format!("gap scan skipped: {e}")),
            }
        }
        let area = metric.area();
        let wl = weyl_count(&res, area, 0.0, (res.window * 0.4).min(20.0));
        r.trend(
            "weyl count",
            "spectrum::weyl_count deviation",
            wl.relative_deviation <= 0.15,
            wl.relative_deviation,
            "<= 0.15",
            format!("count {} vs {:.2}", wl.count, wl.weyl),
        );
        let hist = imaginary_part_histogram(&res, res.window * 0.5, 20);
        r.emit(&self.out, "imag_histogram.csv", &hist.to_csv(), "histogram of Im tau in the upper half of the window")?;
        r.notes.push(format!("Im tau mean {:.4} vs predicted {:.4}", hist.mean, hist.predicted_mean));
        Ok(r)
    }

    fn run_resolvent(&self) -> Result<RunReport> {
        let mut r = RunReport::new("resolvent-scan");
        let n = self.cfg.n;
        let pencil = QuadraticPencil::new(&self.metric(n)?, &self.damping(n)?)?;
        let rc = &self.cfg.resolvent;
        let t = Instant::now();
        let probes = resolvent_curve_scan(&pencil, rc.c, &rc.re_values)?;
        r.wall_times.push(("resolvent".into(), t.elapsed().as_secs_f64()));
        let mut csv = String::from("re,im,norm,sigma_min,singular\n");
        for p in &probes {
            csv.push_str(&format!("{:.6},{:.10e},{:.10e},{:.10e},{}\n", p.tau.re, p.tau.im, p.norm, p.sigma_min, p.singular));
        }
        r.emit(&self.out, "resolvent.csv", &csv, "resolvent norms along Im tau = -1/(c log Re tau)")?;
        let finite = probes.iter().all(|p| p.norm.is_finite() && !p.singular);
        let worst = probes.iter().map(|p| p.norm).fold(0.0, f64::max);
        r.trend("resolvent finite on curve", "spectrum::resolvent_norm finite", finite, worst, "finite", format!("c = {}", rc.c));
        Ok(r)
    }

    fn run_pressure(&self) -> Result<RunReport> {
        let mut r = RunReport::new("pressure");
        if !self.cfg.has_hyperbolic_orbit() {
            r.notes.push("pressure: metric has no configured hyperbolic orbit; skipped".into());
            return Ok(r);
        }
        let n = self.cfg.n;
        let metric = self.metric(n)?;
        let damping = self.damping(n)?;
        let g = self.orbit(&metric)?;
        let t = Instant::now();
        let samples = orbit_neighborhood_samples(&metric, &g, 40, &[-0.02, -0.01, 0.01, 0.02])?;
        let d = &self.cfg.dynamics;
        let rep = pressure_estimate(&metric, &samples, Weight::HalfLogJu, d.pressure_eps, d.pressure_periods * g.period)?;
        r.wall_times.push(("pressure".into(), t.elapsed().as_secs_f64()));
        let target = -g.lambda / 2.0;
        let rel = (rep.pressure - target).abs() / target.abs();
        let mut csv = String::from("eps,t,p,log_sum,count\n");
        for row in &rep.rows {
            csv.push_str(&format!("{},{:.6},{:.10e},{:.10e},{}\n", row.eps, row.t, row.p, row.log_sum, row.count));
        }
        r.emit(&self.out, "pressure.csv", &csv, "finite-horizon pressure sums over separated sets")?;
        r.hard(
            "pressure vs -lambda/2",
            "dynamics::pressure_estimate single orbit",
            rel <= 0.1,
            rel,
            "<= 0.1 rel",
            format!("P = {:.5}, -lambda/2 = {target:.5}", rep.pressure),
        );
        let part = build_partition(&metric, &g, self.cfg.eps, self.cfg.n0, self.cfg.delta)?;
        let (sum, p0) = part.pressure_sum(&metric, &damping, &g)?;
        r.trend("partition pressure P0", "concentration::PartitionOfUnity pressure sum", p0.is_finite(), p0, "reported", format!("sum w = {sum:.5}"));
        Ok(r)
    }

    fn run_egorov(&self) -> Result<RunReport> {
        let mut r = RunReport::new("egorov");
        let ec = &self.cfg.egorov;
        let flat = matches!(self.cfg.metric, MetricPreset::Flat);
        // curved metrics need one numerical flow per phase-space sample, which rules out N = 64
        let hbars = if flat { egorov_hbars(&self.cfg.hbar) } else { CURVED_EGOROV_HBARS.to_vec() };
        if !flat {
            r.notes.push(format!("egorov: curved metric, reduced sweep {hbars:?}"));
        }
        let b = egorov_symbol();
        let mut rows = String::from("hbar,n,residual,within_log_time\n");
        let (mut hs, mut rs) = (Vec::new(), Vec::new());
        let t = Instant::now();
        for &h in &hbars {
            let n = if flat { egorov_grid(h).max(self.cfg.n) } else { self.cfg.n.max(32) };
            let metric = self.metric(n)?;
            let damping = self.damping(n)?;
            let grid = FourierGrid::new(n, h, self.cfg.side)?;
            let opts = EgorovOptions { kappa1: ec.kappa1, ..Default::default() };
            let rep = egorov_residual(&metric, &damping, &b, ec.t, &grid, opts)?;
            rows.push_str(&format!("{h:.10e},{n},{:.10e},{}\n", rep.residual, rep.within_log_time));
            hs.push(h);
            rs.push(rep.residual);
        }
        r.wall_times.push(("egorov".into(), t.elapsed().as_secs_f64()));
        r.emit(&self.out, "egorov.csv", &rows, "Egorov residual ||U* Op(b) U - Op(b o g^t)|| per hbar")?;
        let slope = loglog_slope(&hs, &rs);
        let clean = flat && matches!(self.cfg.damping, DampingPreset::Zero);
        let detail = format!("t = {}, hbar in {:?}", ec.t, hbars);
        if clean {
            r.hard("egorov slope", "quantization::egorov_residual O(hbar)", slope >= 0.9, slope, ">= 0.9", detail);
        } else {
            r.trend("egorov slope", "quantization::egorov_residual O(hbar)", slope > 0.0, slope, "> 0", detail);
        }
        Ok(r)
    }

    fn run_tube_mass(&self) -> Result<RunReport> {
        let mut r = RunReport::new("tube-mass");
        if !self.cfg.has_hyperbolic_orbit() {
            r.notes.push("tube-mass: metric has no configured hyperbolic orbit; skipped".into());
            return Ok(r);
        }
        let res = self.spectrum(&mut r)?;
        let n = self.cfg.n;
        let metric = self.metric(n)?;
        let damping = self.damping(n)?;
        let g = self.orbit(&metric)?;
        let phi = metric.phi_series().sample_grid(n);
        let b = generic_symbol();
        let t = Instant::now();
        let mut mass_csv = String::from("hbar,modes,max_tube_mass,slop\n");
        let mut inv_csv = String::from("hbar,re_tau,beta,residual\n");
        let mut families = Vec::new();
        let mut maxima = Vec::new();
        let mut residuals = Vec::new();
        for &h in &self.cfg.hbar {
            let modes = window_modes(&res, h);
            if modes.is_empty() {
                r.notes.push(format!("no eigenmodes near Re tau = {:.2}", 1.0 / h));
                continue;
            }
            let grid = FourierGrid::new(n, h, self.cfg.side)?;
            let tube = build_tube_cutoff(&metric, &g, h, self.cfg.nu_bar)?;
            let op = tube.quantize(&grid);
            let psis: Vec<_> = modes.iter().map(|p| eigenmode_wavefunction(p, &phi, n)).collect();
            let masses: Vec<f64> = psis.iter().map(|psi| tube_mass_with(&op, psi).mass).collect();
            let max = masses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            mass_csv.push_str(&format!("{h:.10e},{},{max:.10e},{:.10e}\n", modes.len(), h.sqrt()));
            maxima.push((h, max));
            let nbhd = TubeCutoff::around(&metric, OrbitGeometry::new(&metric, &g)?, h, NEIGHBOURHOOD_WIDTH, self.cfg.nu_bar)?;
            families.push((h, psis.clone(), nbhd.quantize(&grid)));
            // invariance on the mode of largest tube mass
            let best = masses.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
            let h_mode = 1.0 / modes[best].tau.re;
            let inv = invariance_residual(
                &metric,
                &damping,
                &psis[best],
                modes[best].tau,
                &b,
                self.cfg.cylinders.invariance_t,
                &FourierGrid::new(n, h_mode, self.cfg.side)?,
                self.cfg.dynamics.dt,
            )?;
            inv_csv.push_str(&format!("{h_mode:.10e},{:.6},{:.10e},{:.10e}\n", modes[best].tau.re, inv.beta, inv.residual));
            residuals.push((h_mode, inv.residual));
        }
        r.wall_times.push(("tube-mass".into(), t.elapsed().as_secs_f64()));
        r.emit(&self.out, "tube_mass.csv", &mass_csv, "largest tube mass over eigenmodes with Re tau ~ 1/hbar")?;
        r.emit(&self.out, "invariance.csv", &inv_csv, "invariance-relation residual for the mode of largest tube mass")?;
        let worst = maxima.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
        r.trend("max tube mass", "concentration::tube_mass <= 0.99", !maxima.is_empty() && worst <= 0.99, worst, "<= 0.99", format!("{maxima:?}"));
        let (families, thin): (Vec<_>, Vec<_>) = families.into_iter().partition(|f| f.1.len() >= 5);
        for f in &thin {
            r.notes.push(format!("outside-mass scan drops hbar = {:.4}: only {} modes", f.0, f.1.len()));
        }
        match mass_outside_scan(&families) {
            Ok(scan) => {
                r.emit(&self.out, "outside_mass.csv", &scan.to_csv(), "outside mass times |log hbar| per hbar")?;
                r.trend(
                    "outside mass product",
                    "concentration::mass_outside_scan bounded below",
                    scan.bounded_below,
                    scan.min_product,
                    "> 0",
                    String::new(),
                );
            }
            Err(e) => r.notes.push(format!("outside-mass scan skipped: {e}")),
        }
        let (hs, rs): (Vec<f64>, Vec<f64>) = residuals.iter().copied().unzip();
        let slope = if residuals.len() >= 2 { loglog_slope(&hs, &rs) } else { f64::NAN };
        r.trend(
            "invariance residual slope",
            "concentration::invariance_residual decreasing in hbar",
            slope > 0.0,
            slope,
            "> 0",
            format!("{residuals:?}"),
        );
        Ok(r)
    }

    fn run_cylinders(&self) -> Result<RunReport> {
        let mut r = RunReport::new("cylinders");
        let cc = &self.cfg.cylinders;
        // combinatorial identities on the small grid
        let ns = cc.sumsplit_n;
        let metric = self.metric(ns)?;
        let zero: Damping = build_damping(&DampingPreset::Zero, self.cfg.side, ns)?;
        let g = self.orbit(&metric)?;
        let t = Instant::now();
        let part = build_partition(&metric, &g, self.cfg.eps, g.period / 2.0, self.cfg.delta)?;
        let grid = FourierGrid::new(ns, cc.sumsplit_hbar, self.cfg.side)?;
        let ctx = CylinderContext::new(&part, &metric, &zero, &grid, C64::new(0.5, 0.0))?;
        let chi = quantize_weyl(&slab_cutoff(self.cfg.delta), &grid);
        let mut comp_csv = String::from("n,residual\n");
        for k in 1..=3 {
            let res = partition_completeness(&ctx, k, &chi)?;
            comp_csv.push_str(&format!("{k},{res:.10e}\n"));
            if k == 1 {
                r.hard("completeness n=1", "concentration::partition_completeness", res <= 1e-6, res, "<= 1e-6", String::new());
            }
        }
        r.emit(&self.out, "completeness.csv", &comp_csv, "||(sum Pi_gamma - U^{n n0}) Op(chi)|| per word length")?;
        let mut split_csv = String::from("n,k,words,lhs_norm,defect\n");
        let mut worst = 0.0f64;
        for (n, k) in [(2, 2), (3, 2), (2, 3)] {
            let s = sumsplit_check(&ctx, n, k);
            split_csv.push_str(&format!("{n},{k},{},{:.10e},{:.10e}\n", s.words, s.lhs_norm, s.defect));
            worst = worst.max(s.defect);
        }
        r.emit(&self.out, "sumsplit.csv", &split_csv, "telescoping decomposition defect")?;
        r.hard("sumsplit identity", "concentration::sumsplit exact", worst <= 1e-10, worst, "<= 1e-10", String::new());
        r.wall_times.push(("identities".into(), t.elapsed().as_secs_f64()));

        // dispersive estimate and Q-norm at the configured grid
        let n = self.cfg.n;
        let metric = self.metric(n)?;
        let damping = self.damping(n)?;
        let g = self.orbit(&metric)?;
        let t = Instant::now();
        let part = build_partition(&metric, &g, self.cfg.eps, self.cfg.n0, self.cfg.delta)?;
        let grid = FourierGrid::new(n, cc.hbar, self.cfg.side)?;
        let ctx = CylinderContext::new(&part, &metric, &damping, &grid, C64::new(0.5, 0.0))?;
        let disp = dispersive_check(&ctx, &metric, &damping, &g, 1, cc.blocks)?;
        r.emit(&self.out, "dispersive.csv", &disp.to_csv(), "||Pi_Gamma|| along the orbit itinerary and the calibrated bound")?;
        if g.hyperbolic {
            r.hard(
                "dispersive rate",
                "concentration::dispersive_check rate",
                disp.rate_holds,
                disp.rate,
                &format!("{:.3} +- {:.3}", disp.predicted, RATE_TOL * disp.lambda / 2.0),
                format!("lambda/2 + inf a = {:.4}, implied O(eps) constant {:.3}", disp.predicted, disp.implied_eps_constant),
            );
        } else {
            let excess = disp.rate - disp.predicted;
            r.trend(
                "dispersive rate (control)",
                "concentration::dispersive_check flat control",
                excess <= 0.02,
                excess,
                "<= 0.02",
                format!("rate {:.4} minus inf a", disp.rate),
            );
        }
        let beta = g.beta(&metric, &damping)?;
        let q = q_norm_check(&ctx, beta, cc.p_max, self.cfg.kappa0)?;
        r.emit(&self.out, "q_norm.csv", &q.to_csv(), "||Q_{X_p}|| per p")?;
        r.hard("Q-norm slope", "concentration::q_norm_check excess", q.excess <= 0.05, q.excess, "<= 0.05", format!("beta = {beta:.4}"));
        r.wall_times.push(("cylinders".into(), t.elapsed().as_secs_f64()));
        Ok(r)
    }

    fn run_decay(&self) -> Result<RunReport> {
        let mut r = RunReport::new("decay");
        let n = self.cfg.n;
        let metric = self.metric(n)?;
        let damping = self.damping(n)?;
        let dc = &self.cfg.decay;
        let l = self.cfg.side;
        let init = match dc.initial {
            InitialData::Gaussian { center, width } => WaveState::gaussian(n, l, center, width),
            InitialData::Mode { k, amplitude } => WaveState::cosine_mode(n, l, (k[0], k[1]), amplitude),
        };
        let stepper = WaveStepper::new(&metric, &damping)?;
        let steps = (dc.t_end / dc.dt).round() as usize;
        let t = Instant::now();
        let (_, trace) = stepper.run(&init, dc.dt, steps, dc.every).context("time integration")?;
        r.wall_times.push(("decay".into(), t.elapsed().as_secs_f64()));
        r.emit(&self.out, "energy.csv", &trace.to_csv(), "energy trace")?;
        if damping.is_zero() {
            let d = trace.relative_drift();
            r.hard("energy conservation", "timedomain::EnergyTrace a = 0 conservation", d <= 1e-9, d, "<= 1e-9", String::new());
        }
        if damping.nonnegative {
            r.hard(
                "energy monotone",
                "timedomain::EnergyTrace a >= 0 monotone",
                trace.is_monotone(1e-10),
                trace.max_step_rise,
                "<= 1e-10",
                String::new(),
            );
        }
        if let (Some(c), InitialData::Mode { .. }) = (damping.as_constant(), &dc.initial) {
            if c > 0.0 {
                let dev = envelope_deviation(&trace, c);
                r.hard("damped envelope", "timedomain::step_wave e^{-2ct} envelope", dev <= 0.02, dev, "<= 0.02", format!("c = {c}"));
            }
        }
        let identity = energy_identity_residual(&stepper, &init, dc.dt.min(stepper.cfl()), 200)?;
        r.trend("energy identity", "timedomain::energy discrete identity O(dt^3)", identity.is_finite(), identity, "reported", String::new());
        if !damping.is_zero() && trace.samples.len() >= dwe_core::timedomain::MIN_FIT_SAMPLES {
            let fits = compare_models(&trace)?;
            r.emit(&self.out, "decay_fits.json", &serde_json::to_string_pretty(&fits)?, "least-squares fits of log E")?;
            for f in &fits {
                r.notes.push(format!("{:?}: rate {:.5} exponent {:?} residual {:.3e}", f.model, f.rate, f.exponent, f.residual));
            }
        }
        Ok(r)
    }
}

/// Width of the fixed neighbourhood `U` used for outside-mass scans.
pub const NEIGHBOURHOOD_WIDTH: f64 = 0.15;

fn lookup_name(l: Lookup) -> &'static str {
    match l {
        Lookup::Hit => "hit",
        Lookup::Miss => "miss",
        Lookup::Corrupt => "corrupt (recomputed)",
        Lookup::Disabled => "disabled",
    }
}

/// Eigenpairs with `Re tau` within 15% of `1/hbar`.
pub fn window_modes(res: &SpectrumResult, hbar: f64) -> Vec<&Eigenpair> {
    let c = 1.0 / hbar;
    res.pairs.iter().filter(|p| !p.zero_mode && p.tau.re >= 0.85 * c && p.tau.re <= 1.15 * c).collect()
}

/// `hbar` list for the Egorov sweep: the configured sweep when it already spans a factor 8,
/// otherwise `1/16 .. 1/128`.
/// Egorov sweep on curved metrics, all resolved at `N = 32`.
pub const CURVED_EGOROV_HBARS: [f64; 3] = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0];

fn egorov_hbars(sweep: &[f64]) -> Vec<f64> {
    let lo = sweep.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sweep.iter().copied().fold(0.0, f64::max);
    if hi / lo >= 8.0 {
        sweep.to_vec()
    } else {
        vec![1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0]
    }
}

/// Grid for the Egorov sweep: 32 down to `hbar = 1/32`, 64 below.
pub fn egorov_grid(hbar: f64) -> usize {
    if hbar >= 1.0 / 32.0 {
        32
    } else {
        64
    }
}

fn smooth_step(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else if u >= 1.0 {
        1.0
    } else {
        let a = (-1.0 / u).exp();
        let b = (-1.0 / (1.0 - u)).exp();
        a / (a + b)
    }
}

/// Smooth bump in `|xi|` supported in `[0.6, 1.4]`, equal to 1 near `|xi| = 1`.
pub fn xi_bump(r: f64) -> f64 {
    smooth_step((r - 0.6) / 0.3) * smooth_step((1.4 - r) / 0.3)
}

/// `(1 + 0.5 cos 2 pi x + 0.3 sin 2 pi y)` cut off smoothly to `|xi| <= 1.4`.
pub fn egorov_symbol() -> SymbolField {
    SymbolField::new("b", |x, y, a, c| {
        (1.0 + 0.5 * (TAU * x).cos() + 0.3 * (TAU * y).sin()) * smooth_step((1.4 - (a * a + c * c).sqrt()) / 0.4)
    })
    .with_support(0.0, 1.4)
}

/// `(1 + 0.5 cos 2 pi x + 0.3 sin 2 pi y) chi(|xi|)`.
pub fn generic_symbol() -> SymbolField {
    SymbolField::new("b", |x, y, a, c| {
        (1.0 + 0.5 * (TAU * x).cos() + 0.3 * (TAU * y).sin()) * xi_bump((a * a + c * c).sqrt())
    })
    .with_support(0.6, 1.4)
}

/// `max |E(t) e^{2ct} / E(0) - 1|`.
pub fn envelope_deviation(trace: &EnergyTrace, c: f64) -> f64 {
    let e0 = trace.samples[0].1;
    trace.samples.iter().map(|(t, e)| (e / e0 * (2.0 * c * t).exp() - 1.0).abs()).fold(0.0, f64::max)
}

/// `max_k |E_{k+1} - E_k + dt (D_k + D_{k+1}) / 2| / E_0` over `steps` steps.
pub fn energy_identity_residual(stepper: &WaveStepper<f64>, init: &WaveState<f64>, dt: f64, steps: usize) -> Result<f64> {
    let mut s = init.clone();
    let e0 = stepper.energy(&s);
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let next = stepper.step(&s, dt)?;
        let de = stepper.energy(&next) - stepper.energy(&s);
        let diss = 0.5 * dt * (stepper.dissipation(&s) + stepper.dissipation(&next));
        worst = worst.max((de + diss).abs() / e0);
        s = next;
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------------------------
// cached spectrum

#[derive(Serialize, Deserialize)]
struct StoredPair {
    tau: [f64; 2],
    residual: f64,
    zero_mode: bool,
    u: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
struct StoredSpectrum {
    pairs: Vec<StoredPair>,
    window: f64,
    n: usize,
    l: f64,
    damping_zero: bool,
    damping_mean: f64,
    rejected: usize,
}

impl From<&SpectrumResult> for StoredSpectrum {
    fn from(r: &SpectrumResult) -> Self {
        Self {
            pairs: r
                .pairs
                .iter()
                .map(|p| StoredPair {
                    tau: [p.tau.re, p.tau.im],
                    residual: p.residual,
                    zero_mode: p.zero_mode,
                    u: p.u.iter().map(|c| [c.re, c.im]).collect(),
                })
                .collect(),
            window: r.window,
            n: r.n,
            l: r.l,
            damping_zero: r.damping_zero,
            damping_mean: r.damping_mean,
            rejected: r.rejected,
        }
    }
}

impl StoredSpectrum {
    fn into_result(self) -> SpectrumResult {
        SpectrumResult {
            pairs: self
                .pairs
                .into_iter()
                .map(|p| Eigenpair {
                    tau: C64::new(p.tau[0], p.tau[1]),
                    u: p.u.into_iter().map(|c| C64::new(c[0], c[1])).collect(),
                    residual: p.residual,
                    zero_mode: p.zero_mode,
                })
                .collect(),
            window: self.window,
            n: self.n,
            l: self.l,
            damping_zero: self.damping_zero,
            damping_mean: self.damping_mean,
            rejected: self.rejected,
        }
    }
}
