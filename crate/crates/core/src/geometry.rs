//! Conformal torus metrics `g = exp(2 phi)(dx^2 + dy^2)` and damping profiles, both stored as
//! finite Fourier series so that every derivative is exact.

use std::collections::BTreeMap;

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::Fft2;
use crate::scalar::{lit, Real};

/// Value and first/second derivatives of a real field at a point.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Derivs<T> {
    pub f: T,
    pub fx: T,
    pub fy: T,
    pub fxx: T,
    pub fxy: T,
    pub fyy: T,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Term<T> {
    kx: T,
    ky: T,
    re: T,
    im: T,
}

/// Real trigonometric polynomial on `[0, L)^2`.  Coefficients are Hermitian symmetric,
/// `c(-k) = conj(c(k))`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierSeries<T: Real> {
    l: T,
    coeffs: BTreeMap<(i32, i32), Complex<T>>,
    // (k, -k) pairs folded into one term with doubled amplitude
    terms: Vec<Term<T>>,
}

impl<T: Real> FourierSeries<T> {
    pub fn zero(l: T) -> Self {
        Self { l, coeffs: BTreeMap::new(), terms: Vec::new() }
    }

    pub fn constant(l: T, c: T) -> Self {
        let mut m = BTreeMap::new();
        if c != T::zero() {
            m.insert((0, 0), Complex::new(c, T::zero()));
        }
        Self::from_map(l, m).expect("constant is Hermitian")
    }

    /// Builds a series from an explicit coefficient map; fails unless it is exactly Hermitian.
    pub fn from_map(l: T, coeffs: BTreeMap<(i32, i32), Complex<T>>) -> Result<Self> {
        for (&(kx, ky), c) in &coeffs {
            let partner = coeffs.get(&(-kx, -ky)).copied().unwrap_or_default();
            if partner != c.conj() {
                return Err(Error::InvalidParameter(format!(
                    "coefficient at ({kx},{ky}) has no conjugate partner"
                )));
            }
        }
        let mut s = Self { l, coeffs, terms: Vec::new() };
        s.rebuild();
        Ok(s)
    }

    /// Builds a series from coefficients given on one half plane; partners are filled in.
    pub fn from_half(l: T, half: &[((i32, i32), Complex<T>)]) -> Result<Self> {
        let mut m: BTreeMap<(i32, i32), Complex<T>> = BTreeMap::new();
        for &((kx, ky), c) in half {
            if (kx, ky) == (0, 0) {
                if c.im != T::zero() {
                    return Err(Error::InvalidParameter("mean coefficient must be real".into()));
                }
                let e = m.entry((0, 0)).or_default();
                *e = *e + c;
            } else {
                let e = m.entry((kx, ky)).or_default();
                *e = *e + c;
                let e = m.entry((-kx, -ky)).or_default();
                *e = *e + c.conj();
            }
        }
        m.retain(|_, c| *c != Complex::default());
        Self::from_map(l, m)
    }

    fn rebuild(&mut self) {
        let two_pi_l = T::TAU() / self.l;
        self.terms.clear();
        for (&(kx, ky), &c) in &self.coeffs {
            let positive = kx > 0 || (kx == 0 && ky > 0);
            let factor = if (kx, ky) == (0, 0) {
                T::one()
            } else if positive {
                lit(2.0)
            } else {
                continue;
            };
            self.terms.push(Term {
                kx: two_pi_l * T::from_i32(kx).unwrap(),
                ky: two_pi_l * T::from_i32(ky).unwrap(),
                re: c.re * factor,
                im: c.im * factor,
            });
        }
    }

    pub fn side(&self) -> T {
        self.l
    }

    pub fn coeffs(&self) -> &BTreeMap<(i32, i32), Complex<T>> {
        &self.coeffs
    }

    pub fn coeff(&self, k: (i32, i32)) -> Complex<T> {
        self.coeffs.get(&k).copied().unwrap_or_default()
    }

    pub fn is_hermitian(&self) -> bool {
        self.coeffs.iter().all(|(&(kx, ky), c)| self.coeff((-kx, -ky)) == c.conj())
    }

    /// Largest `|k_i|` present.
    pub fn band(&self) -> i32 {
        self.coeffs.keys().map(|&(a, b)| a.abs().max(b.abs())).max().unwrap_or(0)
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Mean value (the `k = 0` coefficient).
    pub fn mean(&self) -> T {
        self.coeff((0, 0)).re
    }

    /// Returns `Some(c)` when the series is the constant `c`.
    pub fn as_constant(&self) -> Option<T> {
        if self.coeffs.keys().all(|&k| k == (0, 0)) {
            Some(self.mean())
        } else {
            None
        }
    }

    pub fn eval(&self, x: T, y: T) -> T {
        let mut s = T::zero();
        for t in &self.terms {
            let (sn, cs) = (t.kx * x + t.ky * y).sin_cos();
            s = s + t.re * cs - t.im * sn;
        }
        s
    }

    pub fn eval_derivs(&self, x: T, y: T) -> Derivs<T> {
        let mut d = Derivs::default();
        for t in &self.terms {
            let (sn, cs) = (t.kx * x + t.ky * y).sin_cos();
            let v = t.re * cs - t.im * sn;
            let w = t.re * sn + t.im * cs;
            d.f = d.f + v;
            d.fx = d.fx - t.kx * w;
            d.fy = d.fy - t.ky * w;
            d.fxx = d.fxx - t.kx * t.kx * v;
            d.fxy = d.fxy - t.kx * t.ky * v;
            d.fyy = d.fyy - t.ky * t.ky * v;
        }
        d
    }

    /// Reference evaluation summing every stored coefficient `c_k exp(2 pi i k.x / L)`.
    pub fn eval_direct(&self, x: T, y: T) -> T {
        let two_pi_l = T::TAU() / self.l;
        let mut s = Complex::new(T::zero(), T::zero());
        for (&(kx, ky), &c) in &self.coeffs {
            let th = two_pi_l * (T::from_i32(kx).unwrap() * x + T::from_i32(ky).unwrap() * y);
            s = s + c * Complex::new(th.cos(), th.sin());
        }
        s.re
    }

    pub fn laplacian(&self) -> Self {
        let two_pi_l = T::TAU() / self.l;
        let m = self
            .coeffs
            .iter()
            .filter(|(&k, _)| k != (0, 0))
            .map(|(&(kx, ky), &c)| {
                let k2 = T::from_i32(kx * kx + ky * ky).unwrap() * two_pi_l * two_pi_l;
                ((kx, ky), c * (-k2))
            })
            .collect();
        Self::from_map(self.l, m).expect("laplacian preserves symmetry")
    }

    pub fn plus_constant(&self, c: T) -> Self {
        let mut m = self.coeffs.clone();
        let e = m.entry((0, 0)).or_default();
        *e = *e + Complex::new(c, T::zero());
        m.retain(|_, v| *v != Complex::default());
        Self::from_map(self.l, m).expect("constant shift preserves symmetry")
    }

    pub fn scaled(&self, s: T) -> Self {
        let m = self.coeffs.iter().map(|(&k, &c)| (k, c * s)).collect();
        Self::from_map(self.l, m).expect("scaling preserves symmetry")
    }

    /// Values on the `n x n` grid `x_i = i L / n`, x-major.
    pub fn sample_grid(&self, n: usize) -> Vec<T> {
        let h = self.l / T::from_usize(n).unwrap();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            let x = h * T::from_usize(i).unwrap();
            for j in 0..n {
                out.push(self.eval(x, h * T::from_usize(j).unwrap()));
            }
        }
        out
    }

    /// `(min, max)` over the `n x n` grid.
    pub fn grid_range(&self, n: usize) -> (T, T) {
        self.sample_grid(n)
            .into_iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), v| (lo.min(v), hi.max(v)))
    }
}

/// Named metric presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum MetricPreset {
    Flat,
    /// `phi = -eps cos(2 pi y / L)`; `{y = 0}` is a hyperbolic closed geodesic.
    YChannel { eps: f64 },
    /// `phi = eps * sum over modes of cos(2 pi k.x / L)`.
    Bumpy { eps: f64, modes: Vec<(i32, i32)> },
}

impl MetricPreset {
    pub fn name(&self) -> &'static str {
        match self {
            MetricPreset::Flat => "flat",
            MetricPreset::YChannel { .. } => "y-channel",
            MetricPreset::Bumpy { .. } => "bumpy",
        }
    }
}

/// Conformally flat metric on the torus of side `L`, sampled on an `N x N` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConformalMetric<T: Real> {
    pub preset: MetricPreset,
    l: T,
    n: usize,
    phi: FourierSeries<T>,
}

/// Builds a metric from a preset.
pub fn build_metric<T: Real>(preset: &MetricPreset, l: T, n: usize) -> Result<ConformalMetric<T>> {
    if !(l > T::zero()) {
        return Err(Error::InvalidParameter("torus side L must be positive".into()));
    }
    let phi = match preset {
        MetricPreset::Flat => FourierSeries::zero(l),
        MetricPreset::YChannel { eps } => {
            if !(*eps > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "y-channel needs eps > 0 for a hyperbolic orbit, got {eps}"
                )));
            }
            // -eps cos(2 pi y) = -eps/2 (e^{i..} + e^{-i..})
            FourierSeries::from_half(l, &[((0, 1), Complex::new(lit(-eps / 2.0), T::zero()))])?
        }
        MetricPreset::Bumpy { eps, modes } => {
            if modes.is_empty() || modes.iter().any(|&m| m == (0, 0)) {
                return Err(Error::InvalidParameter("bumpy metric needs nonzero modes".into()));
            }
            let half: Vec<_> = modes
                .iter()
                .map(|&k| (k, Complex::new(lit(eps / 2.0), T::zero())))
                .collect();
            FourierSeries::from_half(l, &half)?
        }
    };
    ConformalMetric::from_series(preset.clone(), phi, n)
}

/// Builds a metric by preset name, as used by configuration files.
pub fn build_metric_named<T: Real>(
    name: &str,
    eps: f64,
    modes: &[(i32, i32)],
    l: T,
    n: usize,
) -> Result<ConformalMetric<T>> {
    let preset = match name {
        "flat" => MetricPreset::Flat,
        "y-channel" => MetricPreset::YChannel { eps },
        "bumpy" => MetricPreset::Bumpy { eps, modes: modes.to_vec() },
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    build_metric(&preset, l, n)
}

#[derive(Serialize, Deserialize)]
struct CoeffJson {
    kx: i32,
    ky: i32,
    re: f64,
    im: f64,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct MetricJson {
    L: f64,
    N: usize,
    coeffs: Vec<CoeffJson>,
}

impl<T: Real> ConformalMetric<T> {
    pub fn from_series(preset: MetricPreset, phi: FourierSeries<T>, n: usize) -> Result<Self> {
        if n < 4 || n % 2 != 0 {
            return Err(Error::InvalidParameter(format!("grid size N = {n} must be even and >= 4")));
        }
        if !phi.is_hermitian() {
            return Err(Error::InvalidParameter("conformal factor must be real".into()));
        }
        Ok(Self { preset, l: phi.side(), n, phi })
    }

    pub fn side(&self) -> T {
        self.l
    }

    pub fn grid_size(&self) -> usize {
        self.n
    }

    pub fn phi_series(&self) -> &FourierSeries<T> {
        &self.phi
    }

    pub fn is_flat(&self) -> bool {
        self.phi.is_zero()
    }

    pub fn band(&self) -> i32 {
        self.phi.band()
    }

    #[inline]
    pub fn phi(&self, x: T, y: T) -> T {
        self.phi.eval(x, y)
    }

    #[inline]
    pub fn phi_derivs(&self, x: T, y: T) -> Derivs<T> {
        self.phi.eval_derivs(x, y)
    }

    /// Gaussian curvature `K = -exp(-2 phi) Delta phi` at a point.
    pub fn curvature_at(&self, x: T, y: T) -> T {
        let d = self.phi.eval_derivs(x, y);
        -(-(d.f + d.f)).exp() * (d.fxx + d.fyy)
    }

    /// Curvature on the metric grid (x-major), from the exact Fourier Laplacian of `phi`.
    pub fn curvature(&self) -> Vec<T> {
        let lap = self.phi.laplacian().sample_grid(self.n);
        let phi = self.phi.sample_grid(self.n);
        lap.iter().zip(&phi).map(|(&d, &p)| -(-(p + p)).exp() * d).collect()
    }

    /// Discrete `integral of K dA_g` over the grid; zero on a torus.
    pub fn gauss_bonnet(&self) -> T {
        let cell = self.l * self.l / T::from_usize(self.n * self.n).unwrap();
        let phi = self.phi.sample_grid(self.n);
        self.curvature()
            .iter()
            .zip(&phi)
            .fold(T::zero(), |s, (&k, &p)| s + k * (p + p).exp())
            * cell
    }

    /// Riemannian area `integral of exp(2 phi)` (grid quadrature, spectrally accurate).
    pub fn area(&self) -> T {
        let m = (4 * self.n).max(64);
        let cell = self.l * self.l / T::from_usize(m * m).unwrap();
        self.phi.sample_grid(m).iter().fold(T::zero(), |s, &p| s + (p + p).exp()) * cell
    }

    /// Same metric with `phi` shifted by a constant.
    pub fn with_offset(&self, c: T) -> Self {
        Self { preset: self.preset.clone(), l: self.l, n: self.n, phi: self.phi.plus_constant(c) }
    }

    pub fn with_grid(&self, n: usize) -> Result<Self> {
        Self::from_series(self.preset.clone(), self.phi.clone(), n)
    }

    pub fn to_json(&self) -> String {
        let coeffs = self
            .phi
            .coeffs()
            .iter()
            .map(|(&(kx, ky), c)| CoeffJson { kx, ky, re: c.re.to_f64_lossy(), im: c.im.to_f64_lossy() })
            .collect();
        serde_json::to_string_pretty(&MetricJson { L: self.l.to_f64_lossy(), N: self.n, coeffs })
            .expect("metric serializes")
    }

    /// Reads `{L, N, coeffs: [{kx, ky, re, im}]}`; the preset tag is not part of the format.
    pub fn from_json(s: &str) -> Result<Self> {
        let j: MetricJson = serde_json::from_str(s).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let m = j
            .coeffs
            .iter()
            .map(|c| ((c.kx, c.ky), Complex::new(lit(c.re), lit(c.im))))
            .collect();
        let phi = FourierSeries::from_map(lit(j.L), m)?;
        let preset = if phi.is_zero() { MetricPreset::Flat } else { MetricPreset::Bumpy { eps: 0.0, modes: vec![] } };
        Self::from_series(preset, phi, j.N)
    }
}

/// Damping presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum DampingPreset {
    Zero,
    Constant { c: f64 },
    /// `depth * sin^{2m}(pi (y - center) / L)` with `m` chosen so the profile stays below
    /// `1e-4 * depth` on the strip `|y - center| <= radius`.
    SmoothWell { center: f64, radius: f64, depth: f64 },
    /// Arbitrary real series (built with [`DampingField::from_series`]).
    Series,
}

/// Relative level below which the smooth-well profile counts as vanishing on its strip.
pub const STRIP_TOLERANCE: f64 = 1e-4;

/// Horizontal strip `|y - center| <= radius` on which a smooth-well damping vanishes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Strip<T> {
    pub center: T,
    pub radius: T,
    /// Largest value of `a` found on the strip over the refinement grid.
    pub max_on_strip: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DampingField<T: Real> {
    pub preset: DampingPreset,
    series: FourierSeries<T>,
    pub nonnegative: bool,
    /// Minimum over the `4N x 4N` refinement grid.
    pub min: T,
    /// Maximum over the `4N x 4N` refinement grid.
    pub max: T,
    pub strip: Option<Strip<T>>,
}

pub fn build_damping<T: Real>(preset: &DampingPreset, l: T, n: usize) -> Result<DampingField<T>> {
    match *preset {
        DampingPreset::Zero => DampingField::from_series(FourierSeries::zero(l), n, true),
        DampingPreset::Constant { c } => {
            let mut d = DampingField::from_series(FourierSeries::constant(l, lit(c)), n, false)?;
            d.preset = preset.clone();
            Ok(d)
        }
        DampingPreset::SmoothWell { center, radius, depth } => {
            let lf = l.to_f64_lossy();
            if !(radius > 0.0 && radius < lf / 2.0) {
                return Err(Error::InvalidParameter(format!("well radius {radius} must be in (0, L/2)")));
            }
            if !(depth > 0.0) {
                return Err(Error::InvalidParameter(format!("well depth {depth} must be positive")));
            }
            let s_edge = (std::f64::consts::PI * radius / lf).sin().powi(2);
            let m = ((STRIP_TOLERANCE.ln() / s_edge.ln()).ceil() as usize).max(1);
            // s = sin^2(theta/2) = 1/2 - (e^{i theta} + e^{-i theta})/4, theta = 2 pi (y - c)/L
            let base = [-0.25, 0.5, -0.25];
            let mut poly = vec![1.0f64];
            for _ in 0..m {
                let mut next = vec![0.0; poly.len() + 2];
                for (i, &p) in poly.iter().enumerate() {
                    for (j, &b) in base.iter().enumerate() {
                        next[i + j] += p * b;
                    }
                }
                poly = next;
            }
            // poly[j] multiplies e^{i (j - m) theta}
            let mut half = Vec::new();
            for (j, &p) in poly.iter().enumerate().skip(m) {
                let q = (j - m) as i32;
                let phase = -std::f64::consts::TAU * q as f64 * center / lf;
                let c = Complex::new(p * depth * phase.cos(), p * depth * phase.sin());
                let c = if q == 0 { Complex::new(c.re, 0.0) } else { c };
                half.push(((0, q), Complex::new(lit(c.re), lit(c.im))));
            }
            let series = FourierSeries::from_half(l, &half)?;
            let mut d = DampingField::from_series(series, n, true)?;
            d.preset = preset.clone();
            let fine = 4 * n;
            let h = lf / fine as f64;
            let mut max_on = 0.0f64;
            for j in 0..fine {
                let y = j as f64 * h;
                let dy = (y - center).rem_euclid(lf);
                let dy = dy.min(lf - dy);
                if dy <= radius {
                    for i in 0..fine {
                        max_on = max_on.max(d.a(lit(i as f64 * h), lit(y)).to_f64_lossy());
                    }
                }
            }
            d.strip = Some(Strip { center: lit(center), radius: lit(radius), max_on_strip: lit(max_on) });
            Ok(d)
        }
        DampingPreset::Series => Err(Error::InvalidParameter(
            "series damping is built with DampingField::from_series".into(),
        )),
    }
}

/// Builds a damping field by preset name, as used by configuration files.
pub fn build_damping_named<T: Real>(
    name: &str,
    c: f64,
    center: f64,
    radius: f64,
    depth: f64,
    l: T,
    n: usize,
) -> Result<DampingField<T>> {
    let preset = match name {
        "zero" => DampingPreset::Zero,
        "constant" => DampingPreset::Constant { c },
        "smooth-well" => DampingPreset::SmoothWell { center, radius, depth },
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    build_damping(&preset, l, n)
}

impl<T: Real> DampingField<T> {
    /// Wraps an arbitrary real series; with `require_nonnegative` the profile is checked on the
    /// `4N` refinement grid.
    pub fn from_series(series: FourierSeries<T>, n: usize, require_nonnegative: bool) -> Result<Self> {
        let (min, max) = if series.is_zero() { (T::zero(), T::zero()) } else { series.grid_range(4 * n) };
        let nonneg = min >= lit(-1e-12);
        if require_nonnegative && !nonneg {
            return Err(Error::NegativeDamping { min: min.to_f64_lossy() });
        }
        let preset = if series.is_zero() { DampingPreset::Zero } else { DampingPreset::Series };
        Ok(Self { preset, series, nonnegative: nonneg, min, max, strip: None })
    }

    pub fn series(&self) -> &FourierSeries<T> {
        &self.series
    }

    #[inline]
    pub fn a(&self, x: T, y: T) -> T {
        self.series.eval(x, y)
    }

    pub fn is_zero(&self) -> bool {
        self.series.is_zero()
    }

    pub fn as_constant(&self) -> Option<T> {
        self.series.as_constant()
    }

    pub fn band(&self) -> i32 {
        self.series.band()
    }

    pub fn sample_grid(&self, n: usize) -> Vec<T> {
        self.series.sample_grid(n)
    }

    /// Mean of `a` against the Riemannian measure, `integral(a e^{2 phi}) / Area_g`.
    pub fn riemannian_mean(&self, metric: &ConformalMetric<T>) -> T {
        let m = (4 * metric.grid_size()).max(64);
        let a = self.series.sample_grid(m);
        let p = metric.phi_series().sample_grid(m);
        let (num, den) = a
            .iter()
            .zip(&p)
            .fold((T::zero(), T::zero()), |(s, w), (&a, &p)| (s + a * (p + p).exp(), w + (p + p).exp()));
        num / den
    }
}

/// Fourier coefficients of a grid field through the FFT; exposed for operator assembly.
pub fn grid_coefficients<T: Real>(samples: &[T], n: usize) -> Vec<Complex<T>> {
    Fft2::<T>::new(n).coefficients(samples)
}
