//! Tube cutoffs around a closed geodesic, phase-space partitions along it, and the cylinder
//! operators `Pi_gamma = U^{n0} pi_{gamma^{n-1}} ... U^{n0} pi_{gamma^0}` built from them.

use std::f64::consts::TAU;
use std::sync::Arc;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    ehrenfest_time, flow_with_damping, unstable_jacobian_at, Axis, ClosedGeodesic, PhaseSpacePoint,
};
use crate::error::{Error, Result};
use crate::geometry::{ConformalMetric, DampingField, DampingPreset};
use crate::quantization::{
    build_p, op_norm, quantize_antiwick, quantize_kn, quantize_weyl, FourierGrid,
    OperatorMatrix, Propagator, SymbolField, WaveFunction,
};
use crate::C64;

pub const DEFAULT_NU_BAR: f64 = 0.3;
pub const DEFAULT_KAPPA0: f64 = 0.15;
pub const DEFAULT_EPS_TILDE0: f64 = 0.2;
pub const DEFAULT_EPS: f64 = 0.1;
pub const DEFAULT_DELTA: f64 = 0.5;
/// Width of the slab's falloff beyond `||xi|^2 - 1| = delta`.
pub const SLAB_RAMP: f64 = 0.3;
/// Half-width (in orbit phase) of the overlap between neighbouring cells.
pub const CELL_OVERLAP: f64 = 0.1;
const ORBIT_SAMPLES: usize = 256;

/// Quintic smoothstep: 1 for `s <= 0`, 0 for `s >= 1`, `C^2` at both ends.
pub fn falloff(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

fn wrap(d: f64, l: f64) -> f64 {
    let d = d.rem_euclid(l);
    d.min(l - d)
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Distance to the orbit in `(x, xi/|xi|)` and the orbit phase of the nearest point.
#[derive(Clone, Debug)]
enum OrbitShape {
    /// Straight closed geodesic `x[normal] = value` travelled at constant angle.
    Line { normal: usize, value: f64, along0: f64, angle: f64, sign: f64 },
    Sampled(Vec<PhaseSpacePoint<f64>>),
}

#[derive(Clone, Debug)]
pub struct OrbitGeometry {
    shape: OrbitShape,
    l: f64,
    pub period: f64,
}

impl OrbitGeometry {
    pub fn new(metric: &ConformalMetric<f64>, orbit: &ClosedGeodesic) -> Result<Self> {
        let l = metric.side();
        let pts = orbit.samples(metric, ORBIT_SAMPLES)?;
        let normal = match orbit.section.axis {
            Axis::X => 1,
            Axis::Y => 0,
        };
        let v0 = pts[0].x[normal];
        let a0 = pts[0].angle();
        let straight = pts
            .iter()
            .all(|p| wrap(p.x[normal] - v0, l) < 1e-9 && angle_diff(p.angle(), a0) < 1e-9);
        let shape = if straight {
            let along = 1 - normal;
            let sign = if pts[0].xi[along] >= 0.0 { 1.0 } else { -1.0 };
            OrbitShape::Line { normal, value: v0, along0: pts[0].x[along], angle: a0, sign }
        } else {
            OrbitShape::Sampled(pts)
        };
        Ok(Self { shape, l, period: orbit.period })
    }

    /// `(d, u)`: distance to the orbit and orbit phase `u in [0, 1)` of the nearest point.
    pub fn locate(&self, x: f64, y: f64, angle: f64) -> (f64, f64) {
        match &self.shape {
            OrbitShape::Line { normal, value, along0, angle: a0, sign } => {
                let p = [x, y];
                let dn = wrap(p[*normal] - value, self.l);
                let da = angle_diff(angle, *a0);
                let u = (sign * (p[1 - normal] - along0) / self.l).rem_euclid(1.0);
                (dn.hypot(da), u)
            }
            OrbitShape::Sampled(pts) => {
                let q = PhaseSpacePoint::new([x, y], [angle.cos(), angle.sin()]);
                let mut best = (f64::INFINITY, 0usize);
                for (i, p) in pts.iter().enumerate() {
                    let d = crate::dynamics::phase_distance(self.l, &q, p);
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                (best.0, best.1 as f64 / pts.len() as f64)
            }
        }
    }
}

/// `e^{-2 phi} |xi|^2`, twice the geodesic energy.
fn metric_energy(metric: &ConformalMetric<f64>, x: f64, y: f64, xi0: f64, xi1: f64) -> f64 {
    (-2.0 * metric.phi(x, y)).exp() * (xi0 * xi0 + xi1 * xi1)
}

/// Energy window of the tube cutoff: 1 on `[1/2, 3/2]`, 0 outside `[1/4, 2]`.
fn tube_energy_window(e: f64) -> f64 {
    if e < 0.5 {
        falloff((0.5 - e) / 0.25)
    } else {
        falloff((e - 1.5) / 0.5)
    }
}

// ---------------------------------------------------------------------------------------------
// tube cutoff

/// `Theta = 1` within `hbar^nu / 2` of the orbit, `0` beyond `2 hbar^nu`, restricted to an energy
/// window around `S*M`.
#[derive(Clone)]
pub struct TubeCutoff {
    pub nu_bar: f64,
    pub hbar: f64,
    /// `hbar^nu`.
    pub width: f64,
    metric: Arc<ConformalMetric<f64>>,
    geometry: Arc<OrbitGeometry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeInvariants {
    pub outside_energy_max: f64,
    pub homogeneity_defect: f64,
    pub inner_min: f64,
    pub outer_max: f64,
    /// `max |dTheta/dd| * hbar^nu` over radial samples (first-order seminorm surrogate).
    pub derivative_bound: f64,
    pub samples: usize,
}

impl TubeInvariants {
    pub fn holds(&self) -> bool {
        self.outside_energy_max == 0.0
            && self.homogeneity_defect < 1e-12
            && self.inner_min == 1.0
            && self.outer_max == 0.0
            && self.derivative_bound <= 2.0
    }
}

pub fn build_tube_cutoff(
    metric: &ConformalMetric<f64>,
    orbit: &ClosedGeodesic,
    hbar: f64,
    nu_bar: f64,
) -> Result<TubeCutoff> {
    if !(nu_bar > 0.0 && nu_bar < 0.5) {
        return Err(Error::InvalidParameter(format!("nu_bar must lie in (0, 1/2), got {nu_bar}")));
    }
    if !orbit.hyperbolic {
        return Err(Error::NotHyperbolic { trace: orbit.trace });
    }
    TubeCutoff::around(metric, OrbitGeometry::new(metric, orbit)?, hbar, hbar.powf(nu_bar), nu_bar)
}

impl TubeCutoff {
    /// Cutoff of explicit `width` (used for fixed neighbourhoods).
    pub fn around(
        metric: &ConformalMetric<f64>,
        geometry: OrbitGeometry,
        hbar: f64,
        width: f64,
        nu_bar: f64,
    ) -> Result<Self> {
        if !(hbar > 0.0) || !(width > 0.0) {
            return Err(Error::InvalidParameter("tube needs hbar > 0 and a positive width".into()));
        }
        if width / 2.0 >= metric.side() / 4.0 {
            return Err(Error::InvalidParameter(format!(
                "tube plateau {} exceeds the injectivity scale L/4",
                width / 2.0
            )));
        }
        Ok(Self { nu_bar, hbar, width, metric: Arc::new(metric.clone()), geometry: Arc::new(geometry) })
    }

    pub fn profile(&self, d: f64) -> f64 {
        falloff((d - self.width / 2.0) / (1.5 * self.width))
    }

    pub fn eval(&self, x: f64, y: f64, xi0: f64, xi1: f64) -> f64 {
        let e = metric_energy(&self.metric, x, y, xi0, xi1);
        let w = tube_energy_window(e);
        if w == 0.0 {
            return 0.0;
        }
        let (d, _) = self.geometry.locate(x, y, xi1.atan2(xi0));
        w * self.profile(d)
    }

    pub fn symbol(&self) -> SymbolField {
        let me = self.clone();
        SymbolField::new("tube", move |x, y, a, b| me.eval(x, y, a, b)).with_scale(self.nu_bar)
    }

    pub fn quantize(&self, grid: &FourierGrid) -> OperatorMatrix {
        quantize_antiwick(&self.symbol(), grid)
    }

    /// Checks the cutoff invariants on a `4N x 4N` position grid times angle/radius samples.
    pub fn verify(&self, n: usize) -> TubeInvariants {
        let l = self.metric.side();
        let fine = 4 * n;
        let h = l / fine as f64;
        let mut inv = TubeInvariants {
            outside_energy_max: 0.0,
            homogeneity_defect: 0.0,
            inner_min: 1.0,
            outer_max: 0.0,
            derivative_bound: 0.0,
            samples: 0,
        };
        let angles = 16;
        for i in 0..fine {
            for j in 0..fine {
                let (x, y) = (i as f64 * h, j as f64 * h);
                let ephi = self.metric.phi(x, y).exp();
                for k in 0..angles {
                    let th = TAU * k as f64 / angles as f64;
                    let (c, s) = (th.cos(), th.sin());
                    // |xi|_g^2 = r^2: outside [1/4, 2]
                    for r2 in [0.2f64, 2.1] {
                        let r = r2.sqrt() * ephi;
                        inv.outside_energy_max = inv.outside_energy_max.max(self.eval(x, y, r * c, r * s).abs());
                    }
                    let on = self.eval(x, y, ephi * c, ephi * s);
                    for r2 in [0.5f64, 0.8, 1.2, 1.5] {
                        let r = r2.sqrt() * ephi;
                        inv.homogeneity_defect = inv.homogeneity_defect.max((self.eval(x, y, r * c, r * s) - on).abs());
                    }
                    let (d, _) = self.geometry.locate(x, y, th);
                    if d <= self.width / 2.0 {
                        inv.inner_min = inv.inner_min.min(on);
                    } else if d >= 2.0 * self.width {
                        inv.outer_max = inv.outer_max.max(on);
                    }
                    inv.samples += 1;
                }
            }
        }
        // radial derivative of the profile in units of hbar^-nu
        let m = 2000;
        let span = 2.5 * self.width;
        let dd = span / m as f64;
        for q in 0..m {
            let d = q as f64 * dd;
            let der = (self.profile(d + dd) - self.profile(d)).abs() / dd;
            inv.derivative_bound = inv.derivative_bound.max(der * self.width);
        }
        inv
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeMass {
    pub mass: f64,
    /// Quantization slop `sqrt(hbar)`.
    pub slop: f64,
}

/// `<Op^AW(Theta) psi, psi>` for normalized `psi`.
pub fn tube_mass(psi: &WaveFunction, tube: &TubeCutoff, grid: &FourierGrid) -> TubeMass {
    tube_mass_with(&tube.quantize(grid), psi)
}

/// Tube mass against an already quantized cutoff.
pub fn tube_mass_with(op: &OperatorMatrix, psi: &WaveFunction) -> TubeMass {
    let psi = psi.normalized();
    TubeMass { mass: op.expectation(&psi).re, slop: op.hbar.sqrt() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutsideMassRow {
    pub hbar: f64,
    pub modes: usize,
    /// Smallest outside mass in the family.
    pub outside: f64,
    pub product: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutsideMassReport {
    pub rows: Vec<OutsideMassRow>,
    pub min_product: f64,
    pub bounded_below: bool,
}

impl OutsideMassReport {
    /// CSV with header `hbar,modes,outside,product`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("hbar,modes,outside,product\n");
        for r in &self.rows {
            s.push_str(&format!("{:.10e},{},{:.10e},{:.10e}\n", r.hbar, r.modes, r.outside, r.product));
        }
        s
    }
}

/// Outside mass `1 - <Op(chi_U) psi, psi>` for each family, with `chi_U` the quantized
/// neighbourhood at that `hbar`; reports `min outside * |log hbar|`.
pub fn mass_outside_scan(families: &[(f64, Vec<WaveFunction>, OperatorMatrix)]) -> Result<OutsideMassReport> {
    let mut rows = Vec::new();
    for (hbar, modes, op) in families {
        if modes.len() < 5 {
            return Err(Error::Precondition(format!("only {} modes at hbar = {hbar}", modes.len())));
        }
        let outside = modes
            .iter()
            .map(|psi| 1.0 - tube_mass_with(op, psi).mass)
            .fold(f64::INFINITY, f64::min);
        rows.push(OutsideMassRow { hbar: *hbar, modes: modes.len(), outside, product: outside * hbar.ln().abs() });
    }
    let min_product = rows.iter().map(|r| r.product).fold(f64::INFINITY, f64::min);
    Ok(OutsideMassReport { rows, min_product, bounded_below: min_product > 0.0 })
}

// ---------------------------------------------------------------------------------------------
// partition

/// Partition `{P_alpha}` of the energy slab: `m` tube cells along the orbit (letters
/// `0..m`) and the complement cell `infinity = m`.
#[derive(Clone)]
pub struct PartitionOfUnity {
    pub eps: f64,
    pub n0: f64,
    pub delta: f64,
    pub cells: usize,
    /// `successor[j]`: cell reached from the centre of cell `j` after time `n0`.
    pub successor: Vec<usize>,
    metric: Arc<ConformalMetric<f64>>,
    geometry: Arc<OrbitGeometry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub sum_defect: f64,
    pub min: f64,
    pub max: f64,
    pub cells_meet_orbit: bool,
    pub infinity_off_tube: bool,
}

pub fn build_partition(
    metric: &ConformalMetric<f64>,
    orbit: &ClosedGeodesic,
    eps: f64,
    n0: f64,
    delta: f64,
) -> Result<PartitionOfUnity> {
    if !(eps > 0.0 && eps <= DEFAULT_EPS_TILDE0 / 2.0 + 1e-12) {
        return Err(Error::InvalidParameter(format!(
            "cell width eps = {eps} must lie in (0, {}]",
            DEFAULT_EPS_TILDE0 / 2.0
        )));
    }
    if 2.0 * eps >= metric.side() / 4.0 {
        return Err(Error::InvalidParameter("eps too large for the tube".into()));
    }
    if !(n0 > 0.0) {
        return Err(Error::InvalidParameter("n0 must be positive".into()));
    }
    if !(delta > 0.0 && delta + SLAB_RAMP < 1.0) {
        return Err(Error::InvalidParameter(format!("slab half-width delta = {delta} out of range")));
    }
    let (lo, hi) = metric.phi_series().grid_range(4 * metric.grid_size());
    if (2.0 * lo).exp() < 1.0 - delta || (2.0 * hi).exp() > 1.0 + delta {
        return Err(Error::InvalidParameter(format!(
            "slab |xi|^2 in [{}, {}] does not contain the energy surface",
            1.0 - delta,
            1.0 + delta
        )));
    }
    let geometry = OrbitGeometry::new(metric, orbit)?;
    let cells = ((geometry.period / n0 - 1e-9).ceil() as usize).max(1);
    let shift = n0 / geometry.period;
    let successor = (0..cells)
        .map(|j| cell_of(((j as f64 + 0.5) / cells as f64 + shift).rem_euclid(1.0), cells))
        .collect();
    Ok(PartitionOfUnity {
        eps,
        n0,
        delta,
        cells,
        successor,
        metric: Arc::new(metric.clone()),
        geometry: Arc::new(geometry),
    })
}

fn cell_of(u: f64, cells: usize) -> usize {
    ((u * cells as f64).floor() as usize).min(cells - 1)
}

impl PartitionOfUnity {
    pub fn alphabet_size(&self) -> usize {
        self.cells + 1
    }

    pub fn infinity(&self) -> usize {
        self.cells
    }

    /// Slab cutoff in `q = |xi|^2`: 1 for `|q - 1| <= delta`. A Fourier multiplier, so that
    /// `sum_alpha pi_alpha = Op(slab)` commutes with `Op(chi)` exactly.
    pub fn slab(&self, xi0: f64, xi1: f64) -> f64 {
        slab_profile(xi0 * xi0 + xi1 * xi1, self.delta)
    }

    pub fn tube(&self, d: f64) -> f64 {
        falloff((d - self.eps) / self.eps)
    }

    /// Longitudinal factor of cell `j` at orbit phase `u`.
    pub fn longitudinal(&self, j: usize, u: f64) -> f64 {
        if self.cells == 1 {
            return 1.0;
        }
        let half = 0.5 / self.cells as f64;
        let w = CELL_OVERLAP.min(0.5 * half);
        let centre = (j as f64 + 0.5) / self.cells as f64;
        let dist = wrap(u - centre, 1.0);
        falloff((dist - (half - w)) / (2.0 * w))
    }

    pub fn eval(&self, alpha: usize, x: f64, y: f64, xi0: f64, xi1: f64) -> f64 {
        let s = self.slab(xi0, xi1);
        if s == 0.0 {
            return 0.0;
        }
        let (d, u) = self.geometry.locate(x, y, xi1.atan2(xi0));
        let t = self.tube(d);
        if alpha == self.cells {
            s * (1.0 - t)
        } else {
            s * t * self.longitudinal(alpha, u)
        }
    }

    pub fn symbol(&self, alpha: usize) -> SymbolField {
        let me = self.clone();
        SymbolField::new(&format!("P_{alpha}"), move |x, y, a, b| me.eval(alpha, x, y, a, b))
    }

    /// Sum of all cells minus 1 on the slab, range of each symbol, and the support statements.
    pub fn verify(&self, n: usize) -> PartitionReport {
        let l = self.metric.side();
        let h = l / n as f64;
        let mut rep = PartitionReport {
            sum_defect: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
            cells_meet_orbit: true,
            infinity_off_tube: true,
        };
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (i as f64 * h, j as f64 * h);
                for k in 0..16 {
                    let th = TAU * k as f64 / 16.0;
                    for q in [1.0 - self.delta, 1.0, 1.0 + self.delta] {
                        let r = q.sqrt();
                        let vals: Vec<f64> =
                            (0..self.alphabet_size()).map(|a| self.eval(a, x, y, r * th.cos(), r * th.sin())).collect();
                        let s: f64 = vals.iter().sum();
                        rep.sum_defect = rep.sum_defect.max((s - 1.0).abs());
                        for v in vals {
                            rep.min = rep.min.min(v);
                            rep.max = rep.max.max(v);
                        }
                    }
                }
            }
        }
        // on the orbit itself: cell centres carry their letter, infinity vanishes
        for j in 0..self.cells {
            let u = (j as f64 + 0.5) / self.cells as f64;
            let t = u * self.geometry.period;
            if let Some(rho) = self.orbit_point(t) {
                let r = metric_energy(&self.metric, rho.x[0], rho.x[1], rho.xi[0], rho.xi[1]).sqrt();
                let (a, b) = (rho.xi[0] / r, rho.xi[1] / r);
                let e = self.metric.phi(rho.x[0], rho.x[1]).exp();
                if self.eval(j, rho.x[0], rho.x[1], a * e, b * e) < 1.0 - 1e-12 {
                    rep.cells_meet_orbit = false;
                }
                if self.eval(self.cells, rho.x[0], rho.x[1], a * e, b * e) != 0.0 {
                    rep.infinity_off_tube = false;
                }
            }
        }
        rep
    }

    fn orbit_point(&self, t: f64) -> Option<PhaseSpacePoint<f64>> {
        match &self.geometry.shape {
            OrbitShape::Line { normal, value, along0, angle, sign } => {
                let mut x = [0.0; 2];
                x[*normal] = *value;
                x[1 - normal] = along0 + sign * self.metric.side() * t / self.geometry.period;
                Some(PhaseSpacePoint::new(x, [angle.cos(), angle.sin()]))
            }
            OrbitShape::Sampled(pts) => {
                let i = ((t / self.geometry.period) * pts.len() as f64) as usize % pts.len();
                Some(pts[i])
            }
        }
    }

    /// Orbit itinerary of length `n` starting in cell `start`.
    pub fn orbit_word(&self, start: usize, n: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(n);
        let mut c = start;
        for _ in 0..n {
            w.push(c);
            c = self.successor[c];
        }
        w
    }

    /// Membership in `Lambda_n`: tube letters following the orbit itinerary.
    pub fn admissible(&self, word: &[usize]) -> bool {
        word.iter().all(|&a| a < self.cells) && word.windows(2).all(|p| self.successor[p[0]] == p[1])
    }

    /// All words of `Lambda_n`.
    pub fn lambda_words(&self, n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![Vec::new()];
        }
        (0..self.cells).map(|s| self.orbit_word(s, n)).collect()
    }

    /// `sup` over orbit points of cell `alpha` of `exp(int_0^{n0} (1/2 log J^u - a) o g^t)`.
    pub fn cell_weight(
        &self,
        metric: &ConformalMetric<f64>,
        damping: &DampingField<f64>,
        orbit: &ClosedGeodesic,
        alpha: usize,
    ) -> Result<f64> {
        let per = self.geometry.period;
        let mut best = 0.0f64;
        let k = 8;
        for q in 0..k {
            let u = (alpha as f64 + (q as f64 + 0.5) / k as f64) / self.cells as f64;
            let s = u * per;
            let ju = if orbit.hyperbolic { unstable_jacobian_at(metric, orbit, s, self.n0)? } else { 1.0 };
            let base = orbit.point_at(metric, s)?;
            let (_, int_a) = flow_with_damping(metric, damping, &base, self.n0, orbit.dt)?;
            best = best.max((0.5 * ju.ln() - int_a).exp());
        }
        Ok(best)
    }

    /// `sum_{alpha in W}` of the cell weights and `P0 = beta - log(sum) / n0`.
    pub fn pressure_sum(
        &self,
        metric: &ConformalMetric<f64>,
        damping: &DampingField<f64>,
        orbit: &ClosedGeodesic,
    ) -> Result<(f64, f64)> {
        let mut sum = 0.0;
        for a in 0..self.cells {
            sum += self.cell_weight(metric, damping, orbit, a)?;
        }
        let beta = orbit.beta(metric, damping)?;
        Ok((sum, beta - sum.ln() / self.n0))
    }
}

// ---------------------------------------------------------------------------------------------
// cylinder operators

/// Quantized partition and propagators shared by all cylinder computations.
pub struct CylinderContext {
    pub partition: PartitionOfUnity,
    pub grid: FourierGrid,
    /// `pi_alpha = Op^W(P_alpha)`.
    pub pis: Vec<Mat<C64>>,
    /// `U^{n0}` of the damped generator.
    pub step: Mat<C64>,
    propagator: Propagator,
    undamped: Propagator,
}

#[derive(Clone, Debug)]
pub struct CylinderOperator {
    pub word: Vec<usize>,
    pub pi: Mat<C64>,
    pub pi_tilde: Mat<C64>,
    pub norm: f64,
    pub norm_tilde: f64,
}

impl CylinderContext {
    pub fn new(
        partition: &PartitionOfUnity,
        metric: &ConformalMetric<f64>,
        damping: &DampingField<f64>,
        grid: &FourierGrid,
        z: C64,
    ) -> Result<Self> {
        let pis: Vec<Mat<C64>> = (0..partition.alphabet_size())
            .map(|a| quantize_weyl(&partition.symbol(a), grid).mat)
            .collect();
        let propagator = Propagator::new(&build_p(metric, damping, grid, z)?)?;
        let zero = crate::geometry::build_damping(&DampingPreset::Zero, metric.side(), metric.grid_size())?;
        let undamped = Propagator::new(&build_p(metric, &zero, grid, z)?)?;
        let step = propagator.at(partition.n0)?.mat;
        Ok(Self { partition: partition.clone(), grid: grid.clone(), pis, step, propagator, undamped })
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// `U^{n0} pi_alpha M`.
    pub fn advance(&self, m: &Mat<C64>, alpha: usize) -> Mat<C64> {
        &self.step * (&self.pis[alpha] * m)
    }

    pub fn cylinder(&self, word: &[usize]) -> Mat<C64> {
        let d = self.dim();
        let mut m = Mat::<C64>::identity(d, d);
        for &a in word {
            m = self.advance(&m, a);
        }
        m
    }

    pub fn propagator_at(&self, t: f64) -> Result<Mat<C64>> {
        Ok(self.propagator.at(t)?.mat)
    }

    pub fn cylinder_operator(&self, word: &[usize]) -> Result<CylinderOperator> {
        if word.iter().any(|&a| a >= self.partition.alphabet_size()) {
            return Err(Error::InvalidParameter("word letter outside the alphabet".into()));
        }
        let pi = self.cylinder(word);
        let back = self.propagator_at(-(word.len() as f64) * self.partition.n0)?;
        let pi_tilde = &pi * &back;
        Ok(CylinderOperator { word: word.to_vec(), norm: op_norm(&pi), norm_tilde: op_norm(&pi_tilde), pi, pi_tilde })
    }

    /// Sum of `Pi_gamma` over all words of length `n` for which `keep` holds, by prefix-tree
    /// enumeration.
    pub fn word_sum(&self, n: usize, keep: &dyn Fn(&[usize]) -> bool) -> Mat<C64> {
        let d = self.dim();
        let mut acc = Mat::<C64>::zeros(d, d);
        let mut word = Vec::with_capacity(n);
        self.descend(&Mat::<C64>::identity(d, d), &mut word, n, keep, &mut acc);
        acc
    }

    fn descend(&self, m: &Mat<C64>, word: &mut Vec<usize>, n: usize, keep: &dyn Fn(&[usize]) -> bool, acc: &mut Mat<C64>) {
        if word.len() == n {
            if keep(word) {
                *acc += m;
            }
            return;
        }
        for a in 0..self.partition.alphabet_size() {
            word.push(a);
            let next = self.advance(m, a);
            self.descend(&next, word, n, keep, acc);
            word.pop();
        }
    }
}

pub fn cylinder_operator(
    partition: &PartitionOfUnity,
    word: &[usize],
    metric: &ConformalMetric<f64>,
    damping: &DampingField<f64>,
    grid: &FourierGrid,
    z: C64,
) -> Result<CylinderOperator> {
    CylinderContext::new(partition, metric, damping, grid, z)?.cylinder_operator(word)
}

fn slab_profile(q: f64, delta: f64) -> f64 {
    falloff(((q - 1.0).abs() - delta) / SLAB_RAMP)
}

/// Cutoff `chi(|xi|^2)`: 1 on `|q - 1| <= delta/2`, 0 beyond `delta`.
pub fn slab_cutoff(delta: f64) -> SymbolField {
    SymbolField::of_xi("chi", move |a, b| {
        let q = a * a + b * b;
        falloff(((q - 1.0).abs() - delta / 2.0) / (delta / 2.0))
    })
}

/// `||(sum_{|gamma| = n} Pi_gamma - U^{n n0}) Op(chi)||`.
pub fn partition_completeness(ctx: &CylinderContext, n: usize, chi: &OperatorMatrix) -> Result<f64> {
    let total = ctx.word_sum(n, &|_| true);
    let target = ctx.propagator_at(n as f64 * ctx.partition.n0)?;
    Ok(op_norm(&((&total - &target) * &chi.mat)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumSplitReport {
    pub n: usize,
    pub k: usize,
    pub words: usize,
    pub lhs_norm: f64,
    /// `||LHS - RHS|| / max(||LHS||, 1)`.
    pub defect: f64,
}

/// Compares the sum of `Pi_Gamma` over `(Lambda_n^k)^c`, enumerated word by word, with the
/// telescoping form `sum_j S_Lambda^{k-j-1} S_c S_all^j`.
pub fn sumsplit_check(ctx: &CylinderContext, n: usize, k: usize) -> SumSplitReport {
    let part = &ctx.partition;
    let in_lambda_k = |w: &[usize]| w.chunks(n).all(|c| part.admissible(c));
    let lhs = ctx.word_sum(n * k, &|w| !in_lambda_k(w));
    let s_lambda = ctx.word_sum(n, &|w| part.admissible(w));
    let s_c = ctx.word_sum(n, &|w| !part.admissible(w));
    let s_all = &s_lambda + &s_c;
    let d = ctx.dim();
    let pow = |m: &Mat<C64>, e: usize| {
        let mut r = Mat::<C64>::identity(d, d);
        for _ in 0..e {
            r = m * &r;
        }
        r
    };
    let mut rhs = Mat::<C64>::zeros(d, d);
    for j in 0..k {
        rhs += pow(&s_lambda, k - j - 1) * &s_c * pow(&s_all, j);
    }
    let lhs_norm = lhs.norm_l2();
    let defect = (&lhs - &rhs).norm_l2() / lhs_norm.max(1.0);
    SumSplitReport { n, k, words: part.alphabet_size().pow((n * k) as u32), lhs_norm, defect }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersiveRow {
    pub n: usize,
    pub time: f64,
    pub norm: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DispersiveReport {
    pub rows: Vec<DispersiveRow>,
    pub lambda: f64,
    pub ehrenfest: f64,
    /// Fitted decay rate of `||Pi_Gamma||` in `n n0` beyond the Ehrenfest scale.
    pub rate: f64,
    /// `lambda/2 + inf_tube a`.
    pub predicted: f64,
    pub calibration: f64,
    /// Whether the calibrated bound with `(1 + eps)^t` holds on the fitted rows.
    pub bound_holds: bool,
    /// Smallest `c` for which `(1 + c eps)^t` in place of `(1 + eps)^t` makes it hold.
    pub implied_eps_constant: f64,
    /// `|rate - predicted| <= RATE_TOL lambda/2`.
    pub rate_holds: bool,
}

impl DispersiveReport {
    /// CSV with header `n,time,norm,bound`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,time,norm,bound\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.6},{:.10e},{:.10e}\n", r.n, r.time, r.norm, r.bound));
        }
        s
    }
}

/// Relative tolerance on the fitted rate, measured in units of `lambda/2`.
pub const RATE_TOL: f64 = 0.25;

/// Least-squares slope of `y` against `x`.
pub fn linear_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Norms of `Pi_Gamma` along the orbit itinerary for word lengths `k, 2k, .., max_blocks k`,
/// against `C_k hbar^{-1} (1 + eps)^{n n0} prod_j w_{Gamma_j}`.
pub fn dispersive_check(
    ctx: &CylinderContext,
    metric: &ConformalMetric<f64>,
    damping: &DampingField<f64>,
    orbit: &ClosedGeodesic,
    k: usize,
    max_blocks: usize,
) -> Result<DispersiveReport> {
    let part = &ctx.partition;
    let hbar = ctx.grid.hbar();
    let weights: Vec<f64> =
        (0..part.cells).map(|a| part.cell_weight(metric, damping, orbit, a)).collect::<Result<_>>()?;
    let len = k * max_blocks;
    let word = part.orbit_word(0, len);
    let lambda = if orbit.hyperbolic { orbit.lambda } else { 0.0 };
    let ehrenfest = if lambda > 0.0 { ehrenfest_time(hbar, lambda) } else { 0.0 };
    let d = ctx.dim();
    let mut m = Mat::<C64>::identity(d, d);
    let mut rows = Vec::new();
    let mut log_w = 0.0;
    for (i, &a) in word.iter().enumerate() {
        m = ctx.advance(&m, a);
        log_w += weights[a].ln();
        let n = i + 1;
        if n % k == 0 {
            let time = n as f64 * part.n0;
            let raw = (-hbar.ln() + time * (1.0 + part.eps).ln() + log_w).exp();
            rows.push(DispersiveRow { n, time, norm: op_norm(&m), bound: raw });
        }
    }
    let beyond: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].time >= ehrenfest).collect();
    let fit: Vec<usize> = if beyond.len() >= 3 { beyond } else { (rows.len().saturating_sub(3)..rows.len()).collect() };
    let xs: Vec<f64> = fit.iter().map(|&i| rows[i].time).collect();
    let ys: Vec<f64> = fit.iter().map(|&i| rows[i].norm.ln()).collect();
    let rate = -linear_slope(&xs, &ys);
    let first = fit[0];
    let calibration = rows[first].norm / rows[first].bound;
    for r in rows.iter_mut() {
        r.bound *= calibration;
    }
    let bound_holds = fit.iter().all(|&i| rows[i].norm <= rows[i].bound * (1.0 + 1e-9));
    // smallest c with norm <= C (1 + c eps)^t prod w once C is fixed at the first fitted row
    let worst = fit[1..]
        .iter()
        .map(|&i| {
            let dt = rows[i].time - rows[first].time;
            let excess = (rows[i].norm / rows[first].norm).ln() - (rows[i].bound / rows[first].bound).ln();
            excess / dt + (1.0 + part.eps).ln()
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let implied_eps_constant = (worst.exp() - 1.0).max(0.0) / part.eps;
    let inf_a = orbit_damping_min(metric, damping, orbit)?;
    let predicted = lambda / 2.0 + inf_a;
    let rate_holds = lambda > 0.0 && (rate - predicted).abs() <= RATE_TOL * lambda / 2.0;
    Ok(DispersiveReport {
        rows,
        lambda,
        ehrenfest,
        rate,
        predicted,
        calibration,
        bound_holds,
        implied_eps_constant,
        rate_holds,
    })
}

fn orbit_damping_min(metric: &ConformalMetric<f64>, damping: &DampingField<f64>, orbit: &ClosedGeodesic) -> Result<f64> {
    Ok(orbit
        .samples(metric, 64)?
        .iter()
        .map(|p| damping.a(p.x[0], p.x[1]))
        .fold(f64::INFINITY, f64::min))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNormRow {
    pub p: usize,
    pub words: usize,
    pub norm: f64,
    pub reference: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNormReport {
    pub rows: Vec<QNormRow>,
    pub beta: f64,
    /// Slope of `log ||Q||` in `p`.
    pub slope: f64,
    /// `slope - beta n0`.
    pub excess: f64,
    /// Largest `p` allowed by `p n0 <= kappa0 |log hbar|`.
    pub p_limit: f64,
}

impl QNormReport {
    /// CSV with header `p,words,norm,reference`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("p,words,norm,reference\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.10e},{:.10e}\n", r.p, r.words, r.norm, r.reference));
        }
        s
    }
}

/// `||Q_{X_p}||` with `Q = U(0)^{-p n0} sum_{gamma in X_p} Pi_gamma` and `X_p = Lambda_p`.
pub fn q_norm_check(ctx: &CylinderContext, beta: f64, p_max: usize, kappa0: f64) -> Result<QNormReport> {
    let part = &ctx.partition;
    let mut rows = Vec::new();
    for p in 1..=p_max {
        let words = part.lambda_words(p);
        let d = ctx.dim();
        let mut sum = Mat::<C64>::zeros(d, d);
        for w in &words {
            sum += ctx.cylinder(w);
        }
        let back = ctx.undamped.at(-(p as f64) * part.n0)?.mat;
        let q = &back * &sum;
        rows.push(QNormRow { p, words: words.len(), norm: op_norm(&q), reference: (p as f64 * part.n0 * beta).exp() });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.p as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.norm.ln()).collect();
    let slope = if rows.len() >= 2 { linear_slope(&xs, &ys) } else { f64::NAN };
    Ok(QNormReport {
        rows,
        beta,
        slope,
        excess: slope - beta * part.n0,
        p_limit: kappa0 * ctx.grid.hbar().ln().abs() / part.n0,
    })
}

// ---------------------------------------------------------------------------------------------
// invariance

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub hbar: f64,
    pub beta: f64,
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// `|<Op(b) psi, psi> - <Op(b o g^t e^{-2 beta t - 2 Re(hbar tau) int_0^t a o g^s}) psi, psi>|`
/// with Kohn-Nirenberg quantization. The transported symbol vanishes off the energy support
/// of `b` (energy is conserved), so flows are only run there.
pub fn invariance_residual(
    metric: &ConformalMetric<f64>,
    damping: &DampingField<f64>,
    psi: &WaveFunction,
    tau: C64,
    b: &SymbolField,
    t: f64,
    grid: &FourierGrid,
    dt: f64,
) -> Result<InvarianceReport> {
    if t.abs() > 2.0 {
        return Err(Error::Precondition(format!("invariance time |t| = {} exceeds 2", t.abs())));
    }
    let hbar = grid.hbar();
    let z = crate::spectrum::semiclassical_z(tau, hbar);
    let beta = z.im / hbar;
    let strength = (hbar * tau).re;
    let psi = psi.normalized();
    let lhs = quantize_kn(b, grid).expectation(&psi).re;
    let (phi_lo, phi_hi) = metric.phi_series().grid_range(4 * metric.grid_size());
    let spread = (phi_hi - phi_lo).exp();
    let support = b.xi_support;
    let m = metric.clone();
    let a = damping.clone();
    let bb = b.clone();
    let err = Arc::new(std::sync::Mutex::new(None));
    let sink = Arc::clone(&err);
    let transported = SymbolField::new("b_t", move |x, y, xi0, xi1| {
        if let Some((r0, r1)) = support {
            let r = xi0.hypot(xi1);
            if r < r0 / spread || r > r1 * spread {
                return 0.0;
            }
        }
        let rho = PhaseSpacePoint::new([x, y], [xi0, xi1]);
        if xi0 == 0.0 && xi1 == 0.0 {
            return bb.eval(x, y, 0.0, 0.0) * (-2.0 * beta * t).exp();
        }
        match flow_with_damping(&m, &a, &rho, t, dt) {
            Ok((end, int_a)) => bb.eval_point(&end) * (-2.0 * beta * t - 2.0 * strength * int_a).exp(),
            Err(e) => {
                sink.lock().unwrap().get_or_insert(e);
                f64::NAN
            }
        }
    });
    let rhs = quantize_kn(&transported, grid).expectation(&psi).re;
    if let Some(e) = err.lock().unwrap().take() {
        return Err(e);
    }
    if !rhs.is_finite() {
        return Err(Error::InvalidParameter("transported symbol is not finite".into()));
    }
    Ok(InvarianceReport { hbar, beta, t, lhs, rhs, residual: (lhs - rhs).abs() })
}

/// Normalized half-density eigenmode `e^{phi} u` in Fourier coefficients.
pub fn eigenmode_wavefunction(pair: &crate::spectrum::Eigenpair, phi: &[f64], n: usize) -> WaveFunction {
    WaveFunction::from_grid(&pair.half_density(phi), n).normalized()
}

/// `Op^W(P_alpha)` summed over the alphabet, for completeness checks at `n = 1`.
pub fn partition_sum(ctx: &CylinderContext) -> Mat<C64> {
    let d = ctx.dim();
    let mut s = Mat::<C64>::zeros(d, d);
    for p in &ctx.pis {
        s += p;
    }
    s
}
