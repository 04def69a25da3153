//! Geodesic flow of `p0 = exp(-2 phi)|xi|^2 / 2`, closed orbits, Birkhoff averages, unstable
//! Jacobians and a separated-set pressure estimator.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ConformalMetric, DampingField};
use crate::scalar::{lit, Real};

/// Relative energy drift allowed per unit time by the default integrator.
pub const DRIFT_TOL: f64 = 1e-9;
/// Default RK4 step.
pub const DEFAULT_DT: f64 = 1e-3;

fn drift_tol<T: Real>() -> T {
    lit::<T>(DRIFT_TOL).max(T::epsilon() * lit(10.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpacePoint<T> {
    pub x: [T; 2],
    pub xi: [T; 2],
}

impl<T: Real> PhaseSpacePoint<T> {
    pub fn new(x: [T; 2], xi: [T; 2]) -> Self {
        Self { x, xi }
    }

    /// Point on the unit cosphere bundle `S*M` at `x` with velocity angle `angle`.
    pub fn unit(metric: &ConformalMetric<T>, x: [T; 2], angle: T) -> Self {
        let s = metric.phi(x[0], x[1]).exp();
        Self { x, xi: [s * angle.cos(), s * angle.sin()] }
    }

    pub fn reduced(self, l: T) -> Self {
        let r = |v: T| {
            let w = v % l;
            if w < T::zero() {
                w + l
            } else {
                w
            }
        };
        Self { x: [r(self.x[0]), r(self.x[1])], xi: self.xi }
    }

    fn to_state(self) -> [T; 4] {
        [self.x[0], self.x[1], self.xi[0], self.xi[1]]
    }

    fn from_state(z: [T; 4]) -> Self {
        Self { x: [z[0], z[1]], xi: [z[2], z[3]] }
    }

    /// Direction angle of the momentum.
    pub fn angle(&self) -> T {
        self.xi[1].atan2(self.xi[0])
    }
}

/// `p0(x, xi) = exp(-2 phi(x)) |xi|^2 / 2`.
pub fn hamiltonian<T: Real>(metric: &ConformalMetric<T>, rho: &PhaseSpacePoint<T>) -> T {
    let p = metric.phi(rho.x[0], rho.x[1]);
    (-(p + p)).exp() * (rho.xi[0] * rho.xi[0] + rho.xi[1] * rho.xi[1]) / lit(2.0)
}

#[inline]
fn rhs<T: Real>(metric: &ConformalMetric<T>, z: &[T; 4]) -> [T; 4] {
    let d = metric.phi_derivs(z[0], z[1]);
    let e = (-(d.f + d.f)).exp();
    let s = z[2] * z[2] + z[3] * z[3];
    [e * z[2], e * z[3], e * s * d.fx, e * s * d.fy]
}

/// Jacobian of the Hamiltonian vector field at `z`.
fn rhs_jacobian<T: Real>(metric: &ConformalMetric<T>, z: &[T; 4]) -> ([T; 4], [[T; 4]; 4]) {
    let d = metric.phi_derivs(z[0], z[1]);
    let two: T = lit(2.0);
    let e = (-(d.f + d.f)).exp();
    let xi = [z[2], z[3]];
    let s = xi[0] * xi[0] + xi[1] * xi[1];
    let g = [d.fx, d.fy];
    let h = [[d.fxx, d.fxy], [d.fxy, d.fyy]];
    let f = [e * xi[0], e * xi[1], e * s * g[0], e * s * g[1]];
    let mut a = [[T::zero(); 4]; 4];
    for i in 0..2 {
        for j in 0..2 {
            a[i][j] = -two * e * g[j] * xi[i];
            a[i][2 + j] = if i == j { e } else { T::zero() };
            a[2 + i][j] = e * s * (h[i][j] - two * g[i] * g[j]);
            a[2 + i][2 + j] = two * e * xi[j] * g[i];
        }
    }
    (f, a)
}

#[inline]
fn axpy4<T: Real>(z: &[T; 4], k: &[T; 4], h: T) -> [T; 4] {
    [z[0] + h * k[0], z[1] + h * k[1], z[2] + h * k[2], z[3] + h * k[3]]
}

#[inline]
fn rk4_step<T: Real>(metric: &ConformalMetric<T>, z: &[T; 4], h: T) -> [T; 4] {
    let half = h / lit(2.0);
    let k1 = rhs(metric, z);
    let k2 = rhs(metric, &axpy4(z, &k1, half));
    let k3 = rhs(metric, &axpy4(z, &k2, half));
    let k4 = rhs(metric, &axpy4(z, &k3, h));
    let six: T = lit(6.0);
    let mut out = *z;
    for i in 0..4 {
        out[i] = z[i] + h * (k1[i] + (k2[i] + k3[i]) * lit(2.0) + k4[i]) / six;
    }
    out
}

type Mat4<T> = [[T; 4]; 4];

fn mat4_mul<T: Real>(a: &Mat4<T>, b: &Mat4<T>) -> Mat4<T> {
    let mut c = [[T::zero(); 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let mut s = T::zero();
            for k in 0..4 {
                s = s + a[i][k] * b[k][j];
            }
            c[i][j] = s;
        }
    }
    c
}

fn mat4_vec<T: Real>(a: &Mat4<T>, v: &[T; 4]) -> [T; 4] {
    let mut out = [T::zero(); 4];
    for i in 0..4 {
        for k in 0..4 {
            out[i] = out[i] + a[i][k] * v[k];
        }
    }
    out
}

fn identity4<T: Real>() -> Mat4<T> {
    let mut m = [[T::zero(); 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = T::one();
    }
    m
}

/// One RK4 step of the state together with its tangent map.
fn rk4_variational<T: Real>(metric: &ConformalMetric<T>, z: &[T; 4], phi: &Mat4<T>, h: T) -> ([T; 4], Mat4<T>) {
    let half = h / lit(2.0);
    let add = |m: &Mat4<T>, k: &Mat4<T>, s: T| {
        let mut o = *m;
        for i in 0..4 {
            for j in 0..4 {
                o[i][j] = m[i][j] + s * k[i][j];
            }
        }
        o
    };
    let (f1, a1) = rhs_jacobian(metric, z);
    let k1 = mat4_mul(&a1, phi);
    let z2 = axpy4(z, &f1, half);
    let p2 = add(phi, &k1, half);
    let (f2, a2) = rhs_jacobian(metric, &z2);
    let k2 = mat4_mul(&a2, &p2);
    let z3 = axpy4(z, &f2, half);
    let p3 = add(phi, &k2, half);
    let (f3, a3) = rhs_jacobian(metric, &z3);
    let k3 = mat4_mul(&a3, &p3);
    let z4 = axpy4(z, &f3, h);
    let p4 = add(phi, &k3, h);
    let (f4, a4) = rhs_jacobian(metric, &z4);
    let k4 = mat4_mul(&a4, &p4);
    let six: T = lit(6.0);
    let two: T = lit(2.0);
    let mut zn = *z;
    let mut pn = *phi;
    for i in 0..4 {
        zn[i] = z[i] + h * (f1[i] + two * (f2[i] + f3[i]) + f4[i]) / six;
        for j in 0..4 {
            pn[i][j] = phi[i][j] + h * (k1[i][j] + two * (k2[i][j] + k3[i][j]) + k4[i][j]) / six;
        }
    }
    (zn, pn)
}

fn step_plan<T: Real>(t: T, dt: T) -> Result<(usize, T)> {
    if !(dt > T::zero()) || !t.is_finite() {
        return Err(Error::InvalidParameter("flow needs dt > 0 and finite T".into()));
    }
    let steps = (t.abs() / dt - lit(1e-9)).ceil().max(T::zero()).to_usize().unwrap_or(0);
    if steps == 0 {
        return Ok((0, T::zero()));
    }
    Ok((steps, t / T::from_usize(steps).unwrap()))
}

fn check_drift<T: Real>(metric: &ConformalMetric<T>, z0: &[T; 4], z: &[T; 4], t: T) -> Result<T> {
    let p0 = hamiltonian(metric, &PhaseSpacePoint::from_state(*z0));
    let p = hamiltonian(metric, &PhaseSpacePoint::from_state(*z));
    let drift = ((p - p0) / p0).abs();
    let limit = drift_tol::<T>() * lit(100.0) * t.abs().max(T::one());
    if drift > limit {
        return Err(Error::EnergyDrift { drift: drift.to_f64_lossy(), limit: limit.to_f64_lossy() });
    }
    Ok(drift)
}

/// Sampled trajectory of the geodesic flow; positions are reduced mod `L`.
#[derive(Clone, Debug)]
pub struct Trajectory<T> {
    pub dt: T,
    pub samples: Vec<(T, PhaseSpacePoint<T>)>,
    /// Largest relative energy deviation `|p0(t) - p0(0)| / p0(0)` seen.
    pub max_drift: T,
}

impl<T: Real> Trajectory<T> {
    pub fn last(&self) -> &PhaseSpacePoint<T> {
        &self.samples.last().expect("trajectory has samples").1
    }
}

/// Fixed-step RK4 integration of the geodesic flow for time `t` (negative `t` runs backwards).
pub fn flow<T: Real>(metric: &ConformalMetric<T>, rho: &PhaseSpacePoint<T>, t: T, dt: T) -> Result<Trajectory<T>> {
    if rho.xi[0] == T::zero() && rho.xi[1] == T::zero() {
        return Err(Error::InvalidParameter("flow needs |xi| > 0".into()));
    }
    let (steps, h) = step_plan(t, dt)?;
    let l = metric.side();
    let z0 = rho.to_state();
    let p0 = hamiltonian(metric, rho);
    let mut z = z0;
    let mut samples = Vec::with_capacity(steps + 1);
    samples.push((T::zero(), rho.reduced(l)));
    let mut max_drift = T::zero();
    for k in 1..=steps {
        z = rk4_step(metric, &z, h);
        let pt = PhaseSpacePoint::from_state(z);
        let d = ((hamiltonian(metric, &pt) - p0) / p0).abs();
        max_drift = max_drift.max(d);
        samples.push((h * T::from_usize(k).unwrap(), pt.reduced(l)));
    }
    let limit = drift_tol::<T>() * lit(100.0) * t.abs().max(T::one());
    if max_drift > limit {
        return Err(Error::EnergyDrift { drift: max_drift.to_f64_lossy(), limit: limit.to_f64_lossy() });
    }
    Ok(Trajectory { dt: h.abs(), samples, max_drift })
}

/// Endpoint `g^t(rho)` without storing samples; the position is not reduced.
pub fn flow_endpoint<T: Real>(metric: &ConformalMetric<T>, rho: &PhaseSpacePoint<T>, t: T, dt: T) -> Result<PhaseSpacePoint<T>> {
    let (steps, h) = step_plan(t, dt)?;
    let z0 = rho.to_state();
    let mut z = z0;
    for _ in 0..steps {
        z = rk4_step(metric, &z, h);
    }
    check_drift(metric, &z0, &z, t)?;
    Ok(PhaseSpacePoint::from_state(z))
}

/// Endpoint `g^t(rho)` together with `int_0^t a(g^s rho) ds` (composite trapezoid).
pub fn flow_with_damping<T: Real>(
    metric: &ConformalMetric<T>,
    damping: &DampingField<T>,
    rho: &PhaseSpacePoint<T>,
    t: T,
    dt: T,
) -> Result<(PhaseSpacePoint<T>, T)> {
    let (steps, h) = step_plan(t, dt)?;
    let z0 = rho.to_state();
    let mut z = z0;
    if let Some(c) = damping.as_constant() {
        for _ in 0..steps {
            z = rk4_step(metric, &z, h);
        }
        check_drift(metric, &z0, &z, t)?;
        return Ok((PhaseSpacePoint::from_state(z), c * t));
    }
    let mut acc = T::zero();
    let mut prev = damping.a(z[0], z[1]);
    for _ in 0..steps {
        z = rk4_step(metric, &z, h);
        let cur = damping.a(z[0], z[1]);
        acc = acc + h * (prev + cur) / lit(2.0);
        prev = cur;
    }
    check_drift(metric, &z0, &z, t)?;
    Ok((PhaseSpacePoint::from_state(z), acc))
}

/// Endpoint together with the tangent map `d g^t` (4x4, coordinates `(x, y, xi_x, xi_y)`).
pub fn flow_variational<T: Real>(
    metric: &ConformalMetric<T>,
    rho: &PhaseSpacePoint<T>,
    t: T,
    dt: T,
) -> Result<(PhaseSpacePoint<T>, [[T; 4]; 4])> {
    let (steps, h) = step_plan(t, dt)?;
    let z0 = rho.to_state();
    let mut z = z0;
    let mut phi = identity4();
    for _ in 0..steps {
        let (zn, pn) = rk4_variational(metric, &z, &phi, h);
        z = zn;
        phi = pn;
    }
    check_drift(metric, &z0, &z, t)?;
    Ok((PhaseSpacePoint::from_state(z), phi))
}

/// Composite-trapezoid time average of `-a` along `g^s(rho)`, `s in [0, T]`.
pub fn birkhoff_average<T: Real>(
    metric: &ConformalMetric<T>,
    damping: &DampingField<T>,
    rho: &PhaseSpacePoint<T>,
    t: T,
    dt: T,
) -> Result<T> {
    if let Some(c) = damping.as_constant() {
        step_plan(t, dt)?;
        return Ok(-c);
    }
    let (steps, h) = step_plan(t, dt)?;
    if steps == 0 {
        return Ok(-damping.a(rho.x[0], rho.x[1]));
    }
    let z0 = rho.to_state();
    let mut z = z0;
    let mut acc = damping.a(z[0], z[1]) / lit(2.0);
    for k in 1..=steps {
        z = rk4_step(metric, &z, h);
        let w = if k == steps { lit(0.5) } else { T::one() };
        acc = acc + w * damping.a(z[0], z[1]);
    }
    check_drift(metric, &z0, &z, t)?;
    Ok(-acc / T::from_usize(steps).unwrap())
}

/// Radical-inverse (Halton) coordinate of `i` in `base`.
pub fn halton(mut i: usize, base: usize) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Extremal Birkhoff averages and related dynamical quantities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsReport {
    pub a_minus: f64,
    pub a_plus: f64,
    /// Birkhoff average of `-a` on the reference orbit, when one is given.
    pub beta: Option<f64>,
    pub pressure: Option<f64>,
    pub n_samples: usize,
    pub horizon: f64,
}

/// Seeds on `S*M`: `n_samples` Halton points plus damping extrema in 16 directions.
pub fn sphere_bundle_seeds<T: Real>(
    metric: &ConformalMetric<T>,
    damping: &DampingField<T>,
    n_samples: usize,
) -> Vec<PhaseSpacePoint<T>> {
    let l = metric.side();
    let mut seeds: Vec<PhaseSpacePoint<T>> = (1..=n_samples)
        .map(|i| {
            let x = [l * lit(halton(i, 2)), l * lit(halton(i, 3))];
            PhaseSpacePoint::unit(metric, x, T::TAU() * lit(halton(i, 5)))
        })
        .collect();
    if damping.as_constant().is_none() {
        let n = 4 * metric.grid_size();
        let vals = damping.sample_grid(n);
        let h = l / T::from_usize(n).unwrap();
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let picks: Vec<usize> = idx.iter().take(2).chain(idx.iter().rev().take(2)).copied().collect();
        for p in picks {
            let x = [h * T::from_usize(p / n).unwrap(), h * T::from_usize(p % n).unwrap()];
            for d in 0..16 {
                let ang = T::TAU() * T::from_usize(d).unwrap() / lit(16.0);
                seeds.push(PhaseSpacePoint::unit(metric, x, ang));
            }
        }
    }
    seeds
}

/// `(A-, A+)`: extremal finite-horizon Birkhoff averages of `-a` over quasi-random seeds.
pub fn estimate_a_bounds<T: Real>(
    metric: &ConformalMetric<T>,
    damping: &DampingField<T>,
    n_samples: usize,
    t: T,
    dt: T,
) -> Result<(T, T)> {
    if n_samples < 100 {
        return Err(Error::InvalidParameter(format!("need at least 100 samples, got {n_samples}")));
    }
    if let Some(c) = damping.as_constant() {
        return Ok((-c, -c));
    }
    let seeds = sphere_bundle_seeds(metric, damping, n_samples);
    let avgs: Result<Vec<T>> =
        seeds.par_iter().map(|s| birkhoff_average(metric, damping, s, t, dt)).collect();
    let avgs = avgs?;
    let lo = avgs.iter().copied().fold(T::infinity(), T::min);
    let hi = avgs.iter().copied().fold(T::neg_infinity(), T::max);
    Ok((lo, hi))
}

/// Distance on `(x, xi/|xi|)`: torus distance of positions combined with the angle difference.
pub fn phase_distance(l: f64, a: &PhaseSpacePoint<f64>, b: &PhaseSpacePoint<f64>) -> f64 {
    let wrap = |d: f64| {
        let d = d.rem_euclid(l);
        d.min(l - d)
    };
    let dx = wrap(a.x[0] - b.x[0]);
    let dy = wrap(a.x[1] - b.x[1]);
    let mut dth = (a.angle() - b.angle()).rem_euclid(std::f64::consts::TAU);
    if dth > std::f64::consts::PI {
        dth = std::f64::consts::TAU - dth;
    }
    (dx * dx + dy * dy + dth * dth).sqrt()
}

// ---------------------------------------------------------------------------------------------
// closed geodesics

/// Section line: `x = value` for [`Axis::X`], `y = value` for [`Axis::Y`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    fn normal(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }
    fn along(self) -> usize {
        1 - self.normal()
    }
}

/// Poincare-section seed: section line plus an initial crossing `(s, p_s)`, where `s` is the
/// coordinate along the line and `p_s` the momentum component along it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectionGuess {
    pub axis: Axis,
    pub value: f64,
    pub s: f64,
    pub p_s: f64,
    /// Crossing direction, `+1` or `-1` in the normal coordinate.
    pub direction: i8,
}

impl SectionGuess {
    /// Section `x = 0` crossed in `+x` at `y = s`.
    pub fn horizontal(y: f64) -> Self {
        Self { axis: Axis::X, value: 0.0, s: y, p_s: 0.0, direction: 1 }
    }

    fn point(&self, metric: &ConformalMetric<f64>, s: f64, p: f64) -> Result<PhaseSpacePoint<f64>> {
        let (nrm, alg) = (self.axis.normal(), self.axis.along());
        let mut x = [0.0; 2];
        x[nrm] = self.value;
        x[alg] = s;
        let e2 = (2.0 * metric.phi(x[0], x[1])).exp();
        let rest = e2 - p * p;
        if rest <= 0.0 {
            return Err(Error::InvalidParameter("section momentum exceeds the energy shell".into()));
        }
        let mut xi = [0.0; 2];
        xi[alg] = p;
        xi[nrm] = self.direction.signum() as f64 * rest.sqrt();
        Ok(PhaseSpacePoint::new(x, xi))
    }
}

/// Maximum flow time searched for a return to the section, in units of `L`.
const RETURN_HORIZON: f64 = 20.0;

/// First return to the section; returns the crossing state (unreduced) and the return time.
fn first_return(
    metric: &ConformalMetric<f64>,
    sec: &SectionGuess,
    rho: &PhaseSpacePoint<f64>,
    dt: f64,
) -> Result<(PhaseSpacePoint<f64>, f64)> {
    let l = metric.side();
    let nrm = sec.axis.normal();
    let level = |z: &[f64; 4]| ((z[nrm] - sec.value) / l).floor();
    let mut z = rho.to_state();
    // start exactly on the line: treat the starting cell as the one we are moving into
    let mut cell = if sec.direction > 0 { 0.0 } else { -1.0 };
    let horizon = RETURN_HORIZON * l;
    let mut t = 0.0;
    while t < horizon {
        let zn = rk4_step(metric, &z, dt);
        let cn = level(&zn);
        let crossed = if sec.direction > 0 { cn > cell } else { cn < cell };
        if crossed {
            let target = sec.value + l * if sec.direction > 0 { cn } else { cn + 1.0 };
            // Newton on the partial step length
            let mut h = dt * (target - z[nrm]) / (zn[nrm] - z[nrm]);
            for _ in 0..8 {
                let zh = rk4_step(metric, &z, h);
                let f = rhs(metric, &zh);
                let dh = (zh[nrm] - target) / f[nrm];
                h -= dh;
                if dh.abs() < 1e-16 {
                    break;
                }
            }
            let zc = rk4_step(metric, &z, h);
            return Ok((PhaseSpacePoint::from_state(zc), t + h));
        }
        cell = cn;
        z = zn;
        t += dt;
    }
    Err(Error::NoReturn { horizon })
}

fn wrap_signed(d: f64, l: f64) -> f64 {
    let w = d.rem_euclid(l);
    if w > l / 2.0 {
        w - l
    } else {
        w
    }
}

fn return_residual(
    metric: &ConformalMetric<f64>,
    sec: &SectionGuess,
    s: f64,
    p: f64,
    dt: f64,
) -> Result<([f64; 2], f64, PhaseSpacePoint<f64>)> {
    let rho = sec.point(metric, s, p)?;
    let (ret, t) = first_return(metric, sec, &rho, dt)?;
    let alg = sec.axis.along();
    let r = [wrap_signed(ret.x[alg] - s, metric.side()), ret.xi[alg] - p];
    Ok((r, t, rho))
}

/// Periodic orbit record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosedGeodesic {
    pub rho0: PhaseSpacePoint<f64>,
    pub period: f64,
    /// Reduced transverse monodromy (Poincare map differential in section coordinates).
    pub monodromy: [[f64; 2]; 2],
    pub trace: f64,
    pub det: f64,
    /// Eigenvalues of the monodromy when real, moduli otherwise.
    pub eigenvalues: [f64; 2],
    pub lambda: f64,
    pub hyperbolic: bool,
    pub parabolic: bool,
    /// Final Newton residual.
    pub residual: f64,
    pub section: SectionGuess,
    pub dt: f64,
    /// Unstable and stable tangent vectors at `rho0` (4-vectors, unit Sasaki norm).
    pub e_u: [f64; 4],
    pub e_s: [f64; 4],
    /// `(t, J^u_t(rho0))` for `t` in `[0, period]`.
    pub ju_samples: Vec<(f64, f64)>,
}

/// Sasaki-type norm `e^{2 phi}|dx|^2 + e^{-2 phi}|dxi|^2` of a tangent vector at `rho`.
pub fn sasaki_norm(metric: &ConformalMetric<f64>, rho: &PhaseSpacePoint<f64>, v: &[f64; 4]) -> f64 {
    let e2 = (2.0 * metric.phi(rho.x[0], rho.x[1])).exp();
    (e2 * (v[0] * v[0] + v[1] * v[1]) + (v[2] * v[2] + v[3] * v[3]) / e2).sqrt()
}

fn solve2(a: [[f64; 2]; 2], b: [f64; 2]) -> [f64; 2] {
    // minimum-norm least squares through the 2x2 SVD, singular directions cut at 1e-8
    let m = faer::Mat::<f64>::from_fn(2, 2, |i, j| a[i][j]);
    let svd = match m.svd() {
        Ok(s) => s,
        Err(_) => return [0.0, 0.0],
    };
    let (u, s, v) = (svd.U(), svd.S(), svd.V());
    let smax = s[0].abs();
    let mut x = [0.0; 2];
    for k in 0..2 {
        let sk = s[k];
        if sk.abs() <= 1e-8 * smax || sk == 0.0 {
            continue;
        }
        let c = (u[(0, k)] * b[0] + u[(1, k)] * b[1]) / sk;
        x[0] += c * v[(0, k)];
        x[1] += c * v[(1, k)];
    }
    x
}

fn null_vector4(m: &Mat4<f64>) -> [f64; 4] {
    let a = faer::Mat::<f64>::from_fn(4, 4, |i, j| m[i][j]);
    let svd = a.svd().expect("4x4 svd");
    let v = svd.V();
    [v[(0, 3)], v[(1, 3)], v[(2, 3)], v[(3, 3)]]
}

/// Unstable/stable 4-vectors at a point of a closed orbit from the full monodromy
/// `d g^T`, whose eigenvalues are `{1, 1, mu, 1/mu}`.
fn invariant_directions(
    metric: &ConformalMetric<f64>,
    rho: &PhaseSpacePoint<f64>,
    phi_t: &Mat4<f64>,
    mu: f64,
) -> ([f64; 4], [f64; 4]) {
    let shifted = |m: f64| {
        let mut a = *phi_t;
        for (i, row) in a.iter_mut().enumerate() {
            row[i] -= m;
        }
        a
    };
    let mut u = null_vector4(&shifted(mu));
    let mut s = null_vector4(&shifted(1.0 / mu));
    let nu = sasaki_norm(metric, rho, &u);
    let ns = sasaki_norm(metric, rho, &s);
    u.iter_mut().for_each(|c| *c /= nu);
    s.iter_mut().for_each(|c| *c /= ns);
    (u, s)
}

/// Number of `J^u` samples stored along one period.
const JU_SAMPLES: usize = 64;

/// Newton iteration on the section return map, then monodromy and unstable data.
pub fn find_closed_geodesic(metric: &ConformalMetric<f64>, guess: &SectionGuess) -> Result<ClosedGeodesic> {
    find_closed_geodesic_with(metric, guess, DEFAULT_DT)
}

pub fn find_closed_geodesic_with(
    metric: &ConformalMetric<f64>,
    guess: &SectionGuess,
    dt: f64,
) -> Result<ClosedGeodesic> {
    const FD: f64 = 1e-6;
    const TOL: f64 = 1e-10;
    let (mut s, mut p) = (guess.s, guess.p_s);
    let mut iterations = 0;
    let (mut res, _, _) = return_residual(metric, guess, s, p, dt)?;
    let norm = |r: [f64; 2]| (r[0] * r[0] + r[1] * r[1]).sqrt();
    while norm(res) >= TOL {
        if iterations >= 50 {
            return Err(Error::NewtonFailed { iterations, residual: norm(res) });
        }
        let mut jac = [[0.0; 2]; 2];
        for (k, (ds, dp)) in [(FD, 0.0), (0.0, FD)].into_iter().enumerate() {
            let (rp, _, _) = return_residual(metric, guess, s + ds, p + dp, dt)?;
            let (rm, _, _) = return_residual(metric, guess, s - ds, p - dp, dt)?;
            for i in 0..2 {
                jac[i][k] = (rp[i] - rm[i]) / (2.0 * FD);
            }
        }
        let step = solve2(jac, [-res[0], -res[1]]);
        s += step[0];
        p += step[1];
        iterations += 1;
        res = return_residual(metric, guess, s, p, dt)?.0;
    }
    let (_, period, rho0) = return_residual(metric, guess, s, p, dt)?;
    complete_orbit(metric, guess, rho0, period, norm(res), dt)
}

fn complete_orbit(
    metric: &ConformalMetric<f64>,
    sec: &SectionGuess,
    rho0: PhaseSpacePoint<f64>,
    period: f64,
    residual: f64,
    dt: f64,
) -> Result<ClosedGeodesic> {
    let (nrm, alg) = (sec.axis.normal(), sec.axis.along());
    let (end, phi_t) = flow_variational(metric, &rho0, period, dt)?;
    let z0 = rho0.to_state();
    let f_end = rhs(metric, &end.to_state());
    let d0 = metric.phi_derivs(z0[0], z0[1]);
    let xi2 = z0[2] * z0[2] + z0[3] * z0[3];
    // columns: perturb s and p_s on the section keeping p0 fixed
    let mut m = [[0.0; 2]; 2];
    for col in 0..2 {
        let mut dz = [0.0; 4];
        let (ds, dp) = if col == 0 { (1.0, 0.0) } else { (0.0, 1.0) };
        dz[alg] = ds;
        dz[2 + alg] = dp;
        let grad_along = if alg == 0 { d0.fx } else { d0.fy };
        dz[2 + nrm] = (xi2 * grad_along * ds - z0[2 + alg] * dp) / z0[2 + nrm];
        let mut w = mat4_vec(&phi_t, &dz);
        let c = w[nrm] / f_end[nrm];
        for i in 0..4 {
            w[i] -= c * f_end[i];
        }
        m[0][col] = w[alg];
        m[1][col] = w[2 + alg];
    }
    let trace = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = trace * trace - 4.0 * det;
    let eigenvalues = if disc >= 0.0 {
        let r = disc.sqrt();
        let (a, b) = ((trace + r) / 2.0, (trace - r) / 2.0);
        if a.abs() >= b.abs() {
            [a, b]
        } else {
            [b, a]
        }
    } else {
        let md = det.abs().sqrt();
        [md, md]
    };
    let parabolic = (trace.abs() - 2.0).abs() <= 1e-8;
    let hyperbolic = !parabolic && trace.abs() > 2.0;
    let lambda = eigenvalues[0].abs().max(eigenvalues[1].abs()).ln() / period;
    let mut orbit = ClosedGeodesic {
        rho0,
        period,
        monodromy: m,
        trace,
        det,
        eigenvalues,
        lambda,
        hyperbolic,
        parabolic,
        residual,
        section: *sec,
        dt,
        e_u: [0.0; 4],
        e_s: [0.0; 4],
        ju_samples: vec![(0.0, 1.0)],
    };
    if hyperbolic {
        let mu = eigenvalues[0];
        let (u, s) = invariant_directions(metric, &rho0, &phi_t, mu);
        orbit.e_u = u;
        orbit.e_s = s;
        let mut samples = Vec::with_capacity(JU_SAMPLES + 1);
        samples.push((0.0, 1.0));
        let mut rho = rho0;
        let mut v = u;
        let h = period / JU_SAMPLES as f64;
        let mut log_growth = 0.0;
        for k in 1..=JU_SAMPLES {
            let (next, dphi) = flow_variational(metric, &rho, h, dt)?;
            let w = mat4_vec(&dphi, &v);
            let before = sasaki_norm(metric, &rho, &v);
            let after = sasaki_norm(metric, &next, &w);
            log_growth += (after / before).ln();
            samples.push((k as f64 * h, (-log_growth).exp()));
            rho = next;
            v = w;
        }
        orbit.ju_samples = samples;
    }
    Ok(orbit)
}

impl ClosedGeodesic {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("orbit serializes")
    }

    /// Point `g^s(rho0)` on the orbit.
    pub fn point_at(&self, metric: &ConformalMetric<f64>, s: f64) -> Result<PhaseSpacePoint<f64>> {
        let s = s.rem_euclid(self.period);
        Ok(flow_endpoint(metric, &self.rho0, s, self.dt)?.reduced(metric.side()))
    }

    /// Orbit samples at `n` equally spaced times over one period.
    pub fn samples(&self, metric: &ConformalMetric<f64>, n: usize) -> Result<Vec<PhaseSpacePoint<f64>>> {
        let l = metric.side();
        let h = self.period / n as f64;
        let mut out = Vec::with_capacity(n);
        let mut rho = self.rho0;
        for _ in 0..n {
            out.push(rho.reduced(l));
            rho = flow_endpoint(metric, &rho, h, self.dt)?;
        }
        Ok(out)
    }

    /// Birkhoff average of `-a` over one period.
    pub fn beta(&self, metric: &ConformalMetric<f64>, damping: &DampingField<f64>) -> Result<f64> {
        birkhoff_average(metric, damping, &self.rho0, self.period, self.dt)
    }
}

/// `J^u_t(rho0) = |v| / |d g^t v|` for the unstable vector `v` at `rho0`.
pub fn unstable_jacobian(metric: &ConformalMetric<f64>, orbit: &ClosedGeodesic, t: f64) -> Result<f64> {
    if !orbit.hyperbolic {
        return Err(Error::NotHyperbolic { trace: orbit.trace });
    }
    if t == 0.0 {
        return Ok(1.0);
    }
    let (end, phi) = flow_variational(metric, &orbit.rho0, t, orbit.dt)?;
    let w = mat4_vec(&phi, &orbit.e_u);
    Ok(sasaki_norm(metric, &orbit.rho0, &orbit.e_u) / sasaki_norm(metric, &end, &w))
}

/// `J^u_t(g^s rho0)` computed from scratch at the shifted base point: the unstable direction is
/// recomputed from the monodromy based at `g^s rho0`.
pub fn unstable_jacobian_at(
    metric: &ConformalMetric<f64>,
    orbit: &ClosedGeodesic,
    s: f64,
    t: f64,
) -> Result<f64> {
    if !orbit.hyperbolic {
        return Err(Error::NotHyperbolic { trace: orbit.trace });
    }
    let base = flow_endpoint(metric, &orbit.rho0, s, orbit.dt)?;
    let (_, phi_t) = flow_variational(metric, &base, orbit.period, orbit.dt)?;
    let (u, _) = invariant_directions(metric, &base, &phi_t, orbit.eigenvalues[0]);
    if t == 0.0 {
        return Ok(1.0);
    }
    let (end, phi) = flow_variational(metric, &base, t, orbit.dt)?;
    let w = mat4_vec(&phi, &u);
    Ok(sasaki_norm(metric, &base, &u) / sasaki_norm(metric, &end, &w))
}

// ---------------------------------------------------------------------------------------------
// pressure

/// Potential integrated along sample trajectories.
#[derive(Clone, Copy, Debug)]
pub enum Weight<'a> {
    Zero,
    /// `1/2 log J^u_1`.
    HalfLogJu,
    /// `1/2 log J^u_1 - a`.
    HalfLogJuMinusDamping(&'a DampingField<f64>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PressureOptions {
    pub dt: f64,
    /// Spacing of the stored trajectory samples used for separation tests.
    pub sample_dt: f64,
    /// Backward burn-in time used to align tangent vectors with `E^u`.
    pub burn_in: f64,
}

impl Default for PressureOptions {
    fn default() -> Self {
        Self { dt: DEFAULT_DT, sample_dt: 0.02, burn_in: 5.0 }
    }
}

/// Sample set for the pressure estimator: points near `reference` (samples of the invariant
/// set) together with the confinement radius. At horizon `T` only samples whose trajectory
/// stays within `radius` of the reference over `[0, T]` take part in the packing.
#[derive(Clone, Debug)]
pub struct NeighborhoodSamples {
    pub points: Vec<PhaseSpacePoint<f64>>,
    pub reference: Vec<PhaseSpacePoint<f64>>,
    pub radius: f64,
}

/// Default confinement radius around the orbit.
pub const CONFINE_RADIUS: f64 = 0.1;

/// Time over which stable offsets are pulled back onto the stable manifold.
const STABLE_PULLBACK: f64 = 4.0;

/// Samples on a closed orbit plus points of its local stable manifold at signed distances
/// `offsets`. Each offset point is `g^{-S}(g^S rho + delta e_s)` with `delta = o exp(-lambda S)`,
/// so backward contraction of the unstable error places it on `W^s` to high accuracy.
pub fn orbit_neighborhood_samples(
    metric: &ConformalMetric<f64>,
    orbit: &ClosedGeodesic,
    n_along: usize,
    offsets: &[f64],
) -> Result<NeighborhoodSamples> {
    let l = metric.side();
    let h = orbit.period / n_along as f64;
    let mut reference = Vec::with_capacity(n_along);
    let mut rho = orbit.rho0;
    for _ in 0..n_along {
        reference.push(rho.reduced(l));
        rho = flow_endpoint(metric, &rho, h, orbit.dt)?;
    }
    let mut points = reference.clone();
    if !offsets.is_empty() && orbit.hyperbolic {
        let shrink = (-orbit.lambda * STABLE_PULLBACK).exp();
        let frame = orbit_frame(metric, orbit, n_along)?;
        let lifted: Result<Vec<Vec<PhaseSpacePoint<f64>>>> = (0..n_along)
            .into_par_iter()
            .map(|k| {
                let (ahead, phi) = flow_variational(metric, &frame.points[k], STABLE_PULLBACK, orbit.dt)?;
                let w = mat4_vec(&phi, &frame.es[k]);
                let nw = sasaki_norm(metric, &ahead, &w);
                offsets
                    .iter()
                    .map(|&o| {
                        let d = o * shrink / nw;
                        let q = PhaseSpacePoint::new(
                            [ahead.x[0] + d * w[0], ahead.x[1] + d * w[1]],
                            [ahead.xi[0] + d * w[2], ahead.xi[1] + d * w[3]],
                        );
                        Ok(flow_endpoint(metric, &q, -STABLE_PULLBACK, orbit.dt)?.reduced(l))
                    })
                    .collect()
            })
            .collect();
        points.extend(lifted?.into_iter().flatten());
    }
    Ok(NeighborhoodSamples { points, reference, radius: CONFINE_RADIUS })
}

/// Sample trajectory cached for packing: states at `sample_dt` spacing and the cumulative
/// weight integral at the same times.
#[derive(Clone, Debug)]
struct CachedTrajectory {
    states: Vec<PhaseSpacePoint<f64>>,
    weight: Vec<f64>,
    /// First sample index outside the confinement tube (`states.len()` if none).
    exit: usize,
}

fn energy_tangent(metric: &ConformalMetric<f64>, rho: &PhaseSpacePoint<f64>, v: [f64; 4]) -> [f64; 4] {
    let d = metric.phi_derivs(rho.x[0], rho.x[1]);
    let e = (-2.0 * d.f).exp();
    let s = rho.xi[0] * rho.xi[0] + rho.xi[1] * rho.xi[1];
    let g = [-e * s * d.fx, -e * s * d.fy, e * rho.xi[0], e * rho.xi[1]];
    let gg: f64 = g.iter().map(|c| c * c).sum();
    let gv: f64 = g.iter().zip(&v).map(|(a, b)| a * b).sum();
    let mut out = v;
    for i in 0..4 {
        out[i] -= gv / gg * g[i];
    }
    out
}

fn cache_trajectory(
    metric: &ConformalMetric<f64>,
    damping: Option<&DampingField<f64>>,
    weight: Weight<'_>,
    rho: &PhaseSpacePoint<f64>,
    t_max: f64,
    opts: &PressureOptions,
) -> Result<CachedTrajectory> {
    let l = metric.side();
    let per_sample = (opts.sample_dt / opts.dt).round().max(1.0) as usize;
    let h = opts.sample_dt / per_sample as f64;
    let n_samples = (t_max / opts.sample_dt).ceil() as usize;
    let needs_ju = !matches!(weight, Weight::Zero);
    let one = (1.0 / h).round() as usize;
    let total_steps = n_samples * per_sample + if needs_ju { one } else { 0 };
    // log |v(s)| along the fine grid, with v aligned to E^u after backward burn-in
    let mut log_norm = Vec::new();
    let mut z;
    let mut v = [0.0; 4];
    if needs_ju {
        let start = flow_endpoint(metric, rho, -opts.burn_in, opts.dt)?;
        let f = rhs(metric, &start.to_state());
        let fnorm = (f[0] * f[0] + f[1] * f[1]).sqrt();
        v = energy_tangent(metric, &start, [-f[1] / fnorm, f[0] / fnorm, 0.0, 0.0]);
        z = start.to_state();
        let burn = (opts.burn_in / h).round() as usize;
        for _ in 0..burn {
            let (zn, phi) = rk4_variational(metric, &z, &identity4(), h);
            v = mat4_vec(&phi, &v);
            let nv = sasaki_norm(metric, &PhaseSpacePoint::from_state(zn), &v);
            v.iter_mut().for_each(|c| *c /= nv);
            z = zn;
        }
        // restart exactly at rho so all samples share the same base points
        z = rho.to_state();
    } else {
        z = rho.to_state();
    }
    let mut acc_log = 0.0;
    let mut states = Vec::with_capacity(n_samples + 1);
    let mut a_vals = Vec::with_capacity(total_steps + 1);
    if needs_ju {
        log_norm.push(0.0);
        let nv = sasaki_norm(metric, rho, &v);
        v.iter_mut().for_each(|c| *c /= nv);
    }
    states.push(rho.reduced(l));
    let a_at = |z: &[f64; 4]| damping.map(|d| d.a(z[0], z[1])).unwrap_or(0.0);
    a_vals.push(a_at(&z));
    for k in 1..=total_steps {
        if needs_ju {
            let (zn, phi) = rk4_variational(metric, &z, &identity4(), h);
            let w = mat4_vec(&phi, &v);
            let nw = sasaki_norm(metric, &PhaseSpacePoint::from_state(zn), &w);
            acc_log += nw.ln();
            log_norm.push(acc_log);
            v = [w[0] / nw, w[1] / nw, w[2] / nw, w[3] / nw];
            z = zn;
        } else {
            z = rk4_step(metric, &z, h);
        }
        a_vals.push(a_at(&z));
        if k % per_sample == 0 && k / per_sample <= n_samples {
            states.push(PhaseSpacePoint::from_state(z).reduced(l));
        }
    }
    // integrand on the fine grid: 1/2 log J^u_1(g^s rho) = -(log|v(s+1)| - log|v(s)|)/2
    let fine = n_samples * per_sample;
    let integrand = |k: usize| -> f64 {
        let mut w = 0.0;
        if needs_ju {
            w -= 0.5 * (log_norm[k + one] - log_norm[k]);
        }
        if let Weight::HalfLogJuMinusDamping(_) = weight {
            w -= a_vals[k];
        }
        w
    };
    let mut weight_cum = Vec::with_capacity(n_samples + 1);
    weight_cum.push(0.0);
    let mut acc = 0.0;
    let mut prev = integrand(0);
    for k in 1..=fine {
        let cur = integrand(k);
        acc += 0.5 * h * (prev + cur);
        prev = cur;
        if k % per_sample == 0 {
            weight_cum.push(acc);
        }
    }
    Ok(CachedTrajectory { states, weight: weight_cum, exit: usize::MAX })
}

/// Greedy `(eps, T)`-separated packing over cached sample trajectories.
pub struct PressureEstimator<'m> {
    metric: &'m ConformalMetric<f64>,
    opts: PressureOptions,
    t_max: f64,
    reference: Vec<PhaseSpacePoint<f64>>,
    radius: f64,
    trajectories: Vec<CachedTrajectory>,
}

/// Selected separated set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Packing {
    pub eps: f64,
    pub t: f64,
    pub chosen: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureRow {
    pub eps: f64,
    pub t: f64,
    /// Finite-horizon value `(1/T) log sum`.
    pub p: f64,
    pub log_sum: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PressureReport {
    pub rows: Vec<PressureRow>,
    /// Slope of `log sum` against `T` at the requested `eps` (the `T -> infinity` limit of the
    /// finite-horizon values); this is the reported pressure.
    pub pressure: f64,
    /// Slopes for every scanned `eps`.
    pub extrapolated: Vec<(f64, f64)>,
}

impl<'m> PressureEstimator<'m> {
    pub fn new(
        metric: &'m ConformalMetric<f64>,
        samples: &NeighborhoodSamples,
        weight: Weight<'_>,
        t_max: f64,
        opts: PressureOptions,
    ) -> Result<Self> {
        let mut e = Self {
            metric,
            opts,
            t_max,
            reference: samples.reference.clone(),
            radius: samples.radius,
            trajectories: Vec::new(),
        };
        e.add_samples(&samples.points, weight)?;
        Ok(e)
    }

    /// Appends samples; indices of existing samples are unchanged.
    pub fn add_samples(&mut self, samples: &[PhaseSpacePoint<f64>], weight: Weight<'_>) -> Result<()> {
        let damping = match weight {
            Weight::HalfLogJuMinusDamping(d) => Some(d),
            _ => None,
        };
        let metric = self.metric;
        let opts = self.opts;
        let t_max = self.t_max;
        let (reference, radius) = (&self.reference, self.radius);
        let l = metric.side();
        let new: Result<Vec<_>> = samples
            .par_iter()
            .map(|s| {
                let mut c = cache_trajectory(metric, damping, weight, s, t_max, &opts)?;
                c.exit = c
                    .states
                    .iter()
                    .position(|p| reference.iter().all(|r| phase_distance(l, p, r) > radius))
                    .unwrap_or(c.states.len());
                Ok(c)
            })
            .collect();
        self.trajectories.extend(new?);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    fn horizon_index(&self, t: f64) -> usize {
        ((t / self.opts.sample_dt).round() as usize).min(self.trajectories[0].states.len() - 1)
    }

    /// Cumulative weight `int_0^T w(g^s rho) ds` of sample `i`.
    pub fn weight_sum(&self, i: usize, t: f64) -> f64 {
        self.trajectories[i].weight[self.horizon_index(t).min(self.trajectories[i].weight.len() - 1)]
    }

    fn separated(&self, i: usize, j: usize, eps: f64, k_max: usize) -> bool {
        let l = self.metric.side();
        let (a, b) = (&self.trajectories[i].states, &self.trajectories[j].states);
        (0..=k_max).any(|k| phase_distance(l, &a[k], &b[k]) > eps)
    }

    /// Greedy packing over all samples.
    pub fn pack(&self, eps: f64, t: f64) -> Packing {
        let mut p = Packing { eps, t, chosen: Vec::new() };
        let all: Vec<usize> = (0..self.len()).collect();
        self.extend_packing(&mut p, &all);
        p
    }

    /// Adds candidates to an existing packing, keeping every previously chosen sample; the
    /// packing sum therefore never decreases.
    pub fn extend_packing(&self, packing: &mut Packing, candidates: &[usize]) {
        let t = packing.t;
        let k_max = self.horizon_index(t);
        let mut order: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&c| self.trajectories[c].exit > k_max && !packing.chosen.contains(&c))
            .collect();
        order.sort_by(|&a, &b| {
            self.weight_sum(b, t).partial_cmp(&self.weight_sum(a, t)).unwrap().then(a.cmp(&b))
        });
        for c in order {
            if packing.chosen.iter().all(|&s| self.separated(c, s, packing.eps, k_max)) {
                packing.chosen.push(c);
            }
        }
    }

    /// `log sum_{rho in F} exp(int_0^T weight)`.
    pub fn log_sum(&self, packing: &Packing) -> Result<f64> {
        if packing.chosen.is_empty() {
            return Err(Error::EmptySample);
        }
        let w: Vec<f64> = packing.chosen.iter().map(|&i| self.weight_sum(i, packing.t)).collect();
        let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(m + w.iter().map(|x| (x - m).exp()).sum::<f64>().ln())
    }
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Pressure scan at horizons `T/4, T/2, 3T/4, T` and separations `eps, eps/2, 2 eps`.
pub fn pressure_estimate(
    metric: &ConformalMetric<f64>,
    samples: &NeighborhoodSamples,
    weight: Weight<'_>,
    eps: f64,
    t: f64,
) -> Result<PressureReport> {
    pressure_estimate_with(metric, samples, weight, eps, t, PressureOptions::default())
}

pub fn pressure_estimate_with(
    metric: &ConformalMetric<f64>,
    samples: &NeighborhoodSamples,
    weight: Weight<'_>,
    eps: f64,
    t: f64,
    opts: PressureOptions,
) -> Result<PressureReport> {
    if samples.points.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(eps > 0.0 && t > 0.0) {
        return Err(Error::InvalidParameter("pressure needs eps > 0 and T > 0".into()));
    }
    let est = PressureEstimator::new(metric, samples, weight, t, opts)?;
    let horizons: Vec<f64> = (1..=4).map(|k| t * k as f64 / 4.0).collect();
    let mut rows = Vec::new();
    let mut extrapolated = Vec::new();
    let mut pressure = f64::NAN;
    for &e in &[2.0 * eps, eps, eps / 2.0] {
        let mut logs = Vec::new();
        for &h in &horizons {
            let p = est.pack(e, h);
            let ls = est.log_sum(&p)?;
            rows.push(PressureRow { eps: e, t: h, p: ls / h, log_sum: ls, count: p.chosen.len() });
            logs.push(ls);
        }
        let sl = slope(&horizons, &logs);
        if e == eps {
            pressure = sl;
        }
        extrapolated.push((e, sl));
    }
    Ok(PressureReport { rows, pressure, extrapolated })
}

// ---------------------------------------------------------------------------------------------
// shadowing

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShadowOptions {
    /// Tube radius in the [`phase_distance`] metric.
    pub eps_tilde: f64,
    /// Periodically remove the unstable component relative to the orbit (keeps a point that
    /// starts on the stable manifold there despite round-off growth).
    pub reanchor: bool,
    pub dt: f64,
}

impl Default for ShadowOptions {
    fn default() -> Self {
        Self { eps_tilde: 0.2, reanchor: false, dt: DEFAULT_DT }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShadowReport {
    pub beta: f64,
    /// `(p, excess)` for every requested horizon reached inside the tube.
    pub excess: Vec<(f64, f64)>,
    /// Least-squares slope of excess against `p`.
    pub slope: f64,
    /// Time at which the trajectory left the tube, if it did.
    pub escape_time: Option<f64>,
}

struct OrbitFrame {
    points: Vec<PhaseSpacePoint<f64>>,
    eu: Vec<[f64; 4]>,
    es: Vec<[f64; 4]>,
}

fn orbit_frame(metric: &ConformalMetric<f64>, orbit: &ClosedGeodesic, n: usize) -> Result<OrbitFrame> {
    let h = orbit.period / n as f64;
    let (mut rho, mut u, mut s) = (orbit.rho0, orbit.e_u, orbit.e_s);
    let mut f = OrbitFrame { points: Vec::new(), eu: Vec::new(), es: Vec::new() };
    for _ in 0..n {
        f.points.push(rho);
        f.eu.push(u);
        f.es.push(s);
        let (next, phi) = flow_variational(metric, &rho, h, orbit.dt)?;
        let nu = mat4_vec(&phi, &u);
        let ns = mat4_vec(&phi, &s);
        let (a, b) = (sasaki_norm(metric, &next, &nu), sasaki_norm(metric, &next, &ns));
        u = nu.map(|c| c / a);
        s = ns.map(|c| c / b);
        rho = next;
    }
    Ok(f)
}

fn solve4(a: Mat4<f64>, b: [f64; 4]) -> [f64; 4] {
    let m = faer::Mat::<f64>::from_fn(4, 4, |i, j| a[i][j]);
    let rhs = faer::Mat::<f64>::from_fn(4, 1, |i, _| b[i]);
    use faer::linalg::solvers::Solve;
    let x = m.partial_piv_lu().solve(&rhs);
    [x[(0, 0)], x[(1, 0)], x[(2, 0)], x[(3, 0)]]
}

fn reanchor(metric: &ConformalMetric<f64>, frame: &OrbitFrame, z: &mut [f64; 4]) {
    let l = metric.side();
    let here = PhaseSpacePoint::from_state(*z);
    let (k, _) = frame
        .points
        .iter()
        .enumerate()
        .map(|(k, p)| (k, phase_distance(l, p, &here)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        .unwrap();
    let base = frame.points[k];
    let d = [
        wrap_signed(z[0] - base.x[0], l),
        wrap_signed(z[1] - base.x[1], l),
        z[2] - base.xi[0],
        z[3] - base.xi[1],
    ];
    let f = rhs(metric, &base.to_state());
    let dd = metric.phi_derivs(base.x[0], base.x[1]);
    let e = (-2.0 * dd.f).exp();
    let s2 = base.xi[0] * base.xi[0] + base.xi[1] * base.xi[1];
    let g = [-e * s2 * dd.fx, -e * s2 * dd.fy, e * base.xi[0], e * base.xi[1]];
    let (u, s) = (frame.eu[k], frame.es[k]);
    let mut a = [[0.0; 4]; 4];
    for i in 0..4 {
        a[i] = [u[i], s[i], f[i], g[i]];
    }
    let c = solve4(a, d);
    for i in 0..4 {
        z[i] -= c[0] * u[i];
    }
}

/// Excess `-int_0^p a(g^s rho2) ds - beta p` over several horizons along one trajectory.
pub fn shadow_average_scan(
    metric: &ConformalMetric<f64>,
    damping: &DampingField<f64>,
    orbit: &ClosedGeodesic,
    rho2: &PhaseSpacePoint<f64>,
    horizons: &[f64],
    opts: ShadowOptions,
) -> Result<ShadowReport> {
    let beta = orbit.beta(metric, damping)?;
    let l = metric.side();
    let frame = orbit_frame(metric, orbit, 400)?;
    let p_max = horizons.iter().copied().fold(0.0, f64::max);
    let h = opts.dt;
    let steps = (p_max / h).round() as usize;
    let reanchor_every = (1.0 / h).round() as usize;
    let mut z = rho2.to_state();
    let mut integral = 0.0;
    let mut prev_a = damping.a(z[0], z[1]);
    let mut excess = Vec::new();
    let mut targets: Vec<(usize, f64)> = horizons.iter().map(|&p| ((p / h).round() as usize, p)).collect();
    targets.sort_by_key(|t| t.0);
    let mut next_target = 0;
    let mut escape_time = None;
    for k in 1..=steps {
        z = rk4_step(metric, &z, h);
        if opts.reanchor && k % reanchor_every == 0 {
            reanchor(metric, &frame, &mut z);
        }
        let a = damping.a(z[0], z[1]);
        integral += 0.5 * h * (prev_a + a);
        prev_a = a;
        if k % 10 == 0 {
            let here = PhaseSpacePoint::from_state(z).reduced(l);
            let dist = frame.points.iter().map(|p| phase_distance(l, p, &here)).fold(f64::INFINITY, f64::min);
            if dist > opts.eps_tilde {
                escape_time = Some(k as f64 * h);
                break;
            }
        }
        while next_target < targets.len() && targets[next_target].0 == k {
            let p = targets[next_target].1;
            excess.push((p, -integral - beta * p));
            next_target += 1;
        }
    }
    let slope = if excess.len() >= 2 {
        let xs: Vec<f64> = excess.iter().map(|e| e.0).collect();
        let ys: Vec<f64> = excess.iter().map(|e| e.1).collect();
        slope(&xs, &ys)
    } else {
        f64::NAN
    };
    Ok(ShadowReport { beta, excess, slope, escape_time })
}

/// Excess at a single horizon `p`; fails if the trajectory leaves the tube first.
pub fn shadow_average_check(
    metric: &ConformalMetric<f64>,
    damping: &DampingField<f64>,
    orbit: &ClosedGeodesic,
    rho2: &PhaseSpacePoint<f64>,
    p: f64,
    opts: ShadowOptions,
) -> Result<f64> {
    let r = shadow_average_scan(metric, damping, orbit, rho2, &[p], opts)?;
    match (r.escape_time, r.excess.first()) {
        (_, Some(&(_, e))) => Ok(e),
        (Some(t), None) => Err(Error::LeftTube { time: t }),
        (None, None) => Err(Error::LeftTube { time: p }),
    }
}

/// Ehrenfest time `|log hbar| / lambda`.
pub fn ehrenfest_time(hbar: f64, lambda: f64) -> f64 {
    if lambda > 0.0 {
        hbar.ln().abs() / lambda
    } else {
        f64::INFINITY
    }
}
