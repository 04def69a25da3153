//! Time integration of `v_tt = Delta_g v - 2 a v_t` and energy-decay fits.
//!
//! The step is a Strang splitting: exact damping half-kicks `v_t <- e^{-a dt} v_t` around the
//! exact conservative flow of `v_tt = e^{-2 phi} Delta v`, propagated mode by mode (Fourier
//! modes when the metric is flat, eigenvectors of `-e^{-phi} Delta e^{-phi}` otherwise).

use std::f64::consts::PI;

use faer::{Mat, Side};
use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{modes, Fft2};
use crate::geometry::{ConformalMetric, DampingField};
use crate::scalar::{lit, Real};

/// Energies below this fraction of `E(0)` are dropped from fits.
pub const ENERGY_FLOOR: f64 = 1e-14;
pub const MIN_FIT_SAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct WaveState<T: Real> {
    pub v: Vec<T>,
    pub v_t: Vec<T>,
    pub t: T,
}

impl<T: Real> WaveState<T> {
    pub fn new(v: Vec<T>, v_t: Vec<T>) -> Result<Self> {
        if v.len() != v_t.len() {
            return Err(Error::InvalidParameter("v and v_t differ in length".into()));
        }
        let s = Self { v, v_t, t: T::zero() };
        if !s.is_finite() {
            return Err(Error::InvalidParameter("initial data is not finite".into()));
        }
        Ok(s)
    }

    pub fn zero(n: usize) -> Self {
        Self { v: vec![T::zero(); n * n], v_t: vec![T::zero(); n * n], t: T::zero() }
    }

    /// `v = amp cos(2 pi k.x / L)`, `v_t = 0`.
    pub fn cosine_mode(n: usize, l: T, k: (i32, i32), amp: T) -> Self {
        let h = l / lit(n as f64);
        let two_pi = T::PI() + T::PI();
        let mut v = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (h * lit(i as f64), h * lit(j as f64));
                v[i * n + j] = amp * (two_pi * (lit::<T>(k.0 as f64) * x + lit::<T>(k.1 as f64) * y) / l).cos();
            }
        }
        Self { v, v_t: vec![T::zero(); n * n], t: T::zero() }
    }

    /// Smooth bump `exp(-|x - c|^2 / (2 w^2))` (periodized by minimal image), `v_t = 0`.
    pub fn gaussian(n: usize, l: T, centre: [T; 2], width: T) -> Self {
        let h = l / lit(n as f64);
        let half = l / lit(2.0);
        let wrap = |d: T| {
            let d = d - (d / l).floor() * l;
            if d > half { d - l } else { d }
        };
        let mut v = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let dx = wrap(h * lit(i as f64) - centre[0]);
                let dy = wrap(h * lit(j as f64) - centre[1]);
                v[i * n + j] = (-(dx * dx + dy * dy) / (lit::<T>(2.0) * width * width)).exp();
            }
        }
        Self { v, v_t: vec![T::zero(); n * n], t: T::zero() }
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(&self.v_t).all(|x| x.is_finite())
    }

    pub fn negated(&self) -> Self {
        Self { v: self.v.iter().map(|&x| -x).collect(), v_t: self.v_t.iter().map(|&x| -x).collect(), t: self.t }
    }

    pub fn grid_size(&self) -> usize {
        (self.v.len() as f64).sqrt().round() as usize
    }

    /// Largest pointwise difference to `other` in `v` and `v_t`.
    pub fn max_diff(&self, other: &Self) -> T {
        self.v
            .iter()
            .zip(&other.v)
            .chain(self.v_t.iter().zip(&other.v_t))
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }
}

/// `0.5 (L/N) e^{min phi} / pi`.
pub fn cfl_limit<T: Real>(metric: &ConformalMetric<T>) -> T {
    let n = metric.grid_size();
    let (lo, _) = metric.phi_series().grid_range(4 * n);
    lit::<T>(0.5) * metric.side() / lit(n as f64) * lo.exp() / T::PI()
}

enum Flow<T: Real> {
    /// Frequencies `2 pi |k| / L` in FFT order.
    Fourier { fft: Fft2<T>, omega: Vec<T> },
    /// `-e^{-phi} Delta e^{-phi} = Q diag(omega^2) Q^T` and `e^{phi}` on the grid.
    Modal { q: Mat<f64>, omega: Vec<f64>, ephi: Vec<f64> },
}

/// Precomputed stepper for one metric/damping pair on an `N x N` grid.
pub struct WaveStepper<T: Real> {
    n: usize,
    l: T,
    flow: Flow<T>,
    damping: Vec<T>,
    e2phi: Vec<T>,
    cfl: T,
}

impl<T: Real> WaveStepper<T> {
    pub fn new(metric: &ConformalMetric<T>, damping: &DampingField<T>) -> Result<Self> {
        let n = metric.grid_size();
        let l = metric.side();
        let phi = metric.phi_series().sample_grid(n);
        let ks = modes(n);
        let flow = if metric.is_flat() {
            let w = lit::<T>(2.0 * PI) / l;
            let omega = (0..n * n)
                .map(|idx| {
                    let (a, b) = (ks[idx / n] as f64, ks[idx % n] as f64);
                    w * lit((a * a + b * b).sqrt())
                })
                .collect();
            Flow::Fourier { fft: Fft2::new(n), omega }
        } else {
            modal_flow(n, l.to_f64_lossy(), &phi)?
        };
        Ok(Self {
            n,
            l,
            flow,
            damping: damping.sample_grid(n),
            e2phi: phi.iter().map(|&p| (p + p).exp()).collect(),
            cfl: cfl_limit(metric),
        })
    }

    pub fn cfl(&self) -> T {
        self.cfl
    }

    /// Exact solution of `v_t' = -2 a v_t` over `dt`.
    fn damp(&self, s: &mut WaveState<T>, dt: T) {
        for (vt, &a) in s.v_t.iter_mut().zip(&self.damping) {
            *vt = *vt * (-(a + a) * dt).exp();
        }
    }

    fn conservative(&self, s: &mut WaveState<T>, dt: T) {
        match &self.flow {
            Flow::Fourier { fft, omega } => {
                let mut v: Vec<Complex<T>> = s.v.iter().map(|&x| Complex::new(x, T::zero())).collect();
                let mut w: Vec<Complex<T>> = s.v_t.iter().map(|&x| Complex::new(x, T::zero())).collect();
                fft.forward(&mut v);
                fft.forward(&mut w);
                for k in 0..v.len() {
                    let om = omega[k];
                    let (c, sn) = ((om * dt).cos(), (om * dt).sin());
                    let (a, b) = (v[k], w[k]);
                    let sinc = if om > T::zero() { sn / om } else { dt };
                    v[k] = a * c + b * sinc;
                    w[k] = b * c - a * (om * sn);
                }
                fft.inverse(&mut v);
                fft.inverse(&mut w);
                let scale = T::one() / lit((self.n * self.n) as f64);
                for k in 0..v.len() {
                    s.v[k] = v[k].re * scale;
                    s.v_t[k] = w[k].re * scale;
                }
            }
            Flow::Modal { q, omega, ephi } => {
                let d = omega.len();
                // w = e^{phi} v solves w_tt = -S w
                let wv = Mat::<f64>::from_fn(d, 2, |i, c| {
                    let x = if c == 0 { s.v[i] } else { s.v_t[i] };
                    x.to_f64_lossy() * ephi[i]
                });
                let mut coef = q.transpose() * &wv;
                let dtf = dt.to_f64_lossy();
                for k in 0..d {
                    let om = omega[k];
                    let (c, sn) = ((om * dtf).cos(), (om * dtf).sin());
                    let (a, b) = (coef[(k, 0)], coef[(k, 1)]);
                    let sinc = if om > 1e-12 { sn / om } else { dtf };
                    coef[(k, 0)] = a * c + b * sinc;
                    coef[(k, 1)] = b * c - a * om * sn;
                }
                let back = q * &coef;
                for i in 0..d {
                    s.v[i] = lit(back[(i, 0)] / ephi[i]);
                    s.v_t[i] = lit(back[(i, 1)] / ephi[i]);
                }
            }
        }
    }

    /// One Strang step of size `dt` (negative `dt` runs backward).
    pub fn step(&self, state: &WaveState<T>, dt: T) -> Result<WaveState<T>> {
        if dt.abs() > self.cfl {
            return Err(Error::Cfl { dt: dt.abs().to_f64_lossy(), limit: self.cfl.to_f64_lossy() });
        }
        let mut s = state.clone();
        let half = dt / lit(2.0);
        self.damp(&mut s, half);
        self.conservative(&mut s, dt);
        self.damp(&mut s, half);
        s.t = s.t + dt;
        if !s.is_finite() {
            return Err(Error::InvalidParameter(format!("state became non-finite at t = {}", s.t)));
        }
        Ok(s)
    }

    /// Riemannian energy `1/2 (int |grad v|^2 + int e^{2 phi} v_t^2)`.
    pub fn energy(&self, s: &WaveState<T>) -> T {
        let kin: T = s.v_t.iter().zip(&self.e2phi).fold(T::zero(), |acc, (&vt, &w)| acc + w * vt * vt);
        let cell = self.l * self.l / lit((self.n * self.n) as f64);
        lit::<T>(0.5) * (dirichlet(&s.v, self.n, self.l) + kin * cell)
    }

    /// `-dE/dt = 2 int a e^{2 phi} v_t^2`.
    pub fn dissipation(&self, s: &WaveState<T>) -> T {
        let cell = self.l * self.l / lit((self.n * self.n) as f64);
        let sum = s
            .v_t
            .iter()
            .zip(&self.e2phi)
            .zip(&self.damping)
            .fold(T::zero(), |acc, ((&vt, &w), &a)| acc + a * w * vt * vt);
        lit::<T>(2.0) * sum * cell
    }

    /// Steps `steps` times from `state`, recording the energy every `every` steps.
    pub fn run(&self, state: &WaveState<T>, dt: T, steps: usize, every: usize) -> Result<(WaveState<T>, EnergyTrace)> {
        let every = every.max(1);
        let mut s = state.clone();
        let mut samples = vec![(s.t.to_f64_lossy(), self.energy(&s).to_f64_lossy())];
        let mut worst_rise = 0.0f64;
        let mut prev = samples[0].1;
        for q in 1..=steps {
            s = self.step(&s, dt)?;
            let e = self.energy(&s).to_f64_lossy();
            worst_rise = worst_rise.max(e - prev);
            prev = e;
            if q % every == 0 {
                samples.push((s.t.to_f64_lossy(), e));
            }
        }
        let e0 = samples[0].1;
        Ok((s, EnergyTrace { samples, max_step_rise: if e0 > 0.0 { worst_rise / e0 } else { 0.0 } }))
    }
}

fn modal_flow<T: Real>(n: usize, l: f64, phi: &[T]) -> Result<Flow<T>> {
    let d = n * n;
    let ks = modes(n);
    let w = 2.0 * PI / l;
    // Laplacian columns via the inverse FFT of -|k|^2 (circulant stencil)
    let fft = Fft2::<f64>::new(n);
    let sym: Vec<Complex<f64>> = (0..d)
        .map(|idx| {
            let (a, b) = (ks[idx / n] as f64, ks[idx % n] as f64);
            Complex::new(-(a * a + b * b) * w * w / d as f64, 0.0)
        })
        .collect();
    let stencil = fft.synthesize(&sym);
    let emphi: Vec<f64> = phi.iter().map(|p| (-p.to_f64_lossy()).exp()).collect();
    let s = Mat::<f64>::from_fn(d, d, |p, q| {
        let (i, j) = (p / n, p % n);
        let (a, b) = (q / n, q % n);
        let off = ((i + n - a) % n) * n + (j + n - b) % n;
        -emphi[p] * stencil[off].re * emphi[q]
    });
    let sym = Mat::<f64>::from_fn(d, d, |p, q| 0.5 * (s[(p, q)] + s[(q, p)]));
    let e = sym.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Linalg(format!("{e:?}")))?;
    let omega = (0..d).map(|k| e.S()[k].max(0.0).sqrt()).collect();
    Ok(Flow::Modal { q: e.U().to_owned(), omega, ephi: emphi.iter().map(|x| 1.0 / x).collect() })
}

/// `int |grad v|^2` by Parseval over the spectral gradient.
fn dirichlet<T: Real>(v: &[T], n: usize, l: T) -> T {
    let c = Fft2::<T>::new(n).coefficients(v);
    let ks = modes(n);
    let w = (T::PI() + T::PI()) / l;
    let mut sum = T::zero();
    for (idx, ck) in c.iter().enumerate() {
        let (a, b) = (lit::<T>(ks[idx / n] as f64), lit::<T>(ks[idx % n] as f64));
        sum = sum + (a * a + b * b) * w * w * ck.norm_sqr();
    }
    sum * l * l
}

/// Flat energy `1/2 (int |grad v|^2 + int v_t^2)` over the torus of side `l`.
pub fn energy_flat<T: Real>(s: &WaveState<T>, l: T) -> T {
    let n = s.grid_size();
    let cell = l * l / lit((n * n) as f64);
    let kin = s.v_t.iter().fold(T::zero(), |acc, &x| acc + x * x);
    lit::<T>(0.5) * (dirichlet(&s.v, n, l) + kin * cell)
}

/// One step of `v_tt = Delta_g v - 2 a v_t`.
pub fn step_wave<T: Real>(
    metric: &ConformalMetric<T>,
    damping: &DampingField<T>,
    state: &WaveState<T>,
    dt: T,
) -> Result<WaveState<T>> {
    WaveStepper::new(metric, damping)?.step(state, dt)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    /// `(t, E)`.
    pub samples: Vec<(f64, f64)>,
    /// Largest single-step increase of `E`, relative to `E(0)`.
    pub max_step_rise: f64,
}

impl EnergyTrace {
    pub fn from_samples(samples: Vec<(f64, f64)>) -> Self {
        let e0 = samples.first().map(|s| s.1).unwrap_or(0.0);
        let rise = samples.windows(2).map(|w| w[1].1 - w[0].1).fold(0.0f64, f64::max);
        Self { samples, max_step_rise: if e0 > 0.0 { rise / e0 } else { 0.0 } }
    }

    pub fn is_monotone(&self, tol: f64) -> bool {
        self.max_step_rise <= tol
    }

    /// `max |E(t) / E(0) - 1|`.
    pub fn relative_drift(&self) -> f64 {
        let e0 = self.samples[0].1;
        self.samples.iter().map(|s| (s.1 / e0 - 1.0).abs()).fold(0.0, f64::max)
    }

    /// CSV with header `t,E`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,E\n");
        for (t, e) in &self.samples {
            s.push_str(&format!("{t:.6},{e:.12e}\n"));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayModel {
    /// `log E = c - r t`.
    Exponential,
    /// `log E = c - r t^p`, `p` fitted.
    Stretched,
    /// `log E = c - q log(1 + t)`.
    Power,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub model: DecayModel,
    pub intercept: f64,
    /// `r` for exponential/stretched, `q` for power.
    pub rate: f64,
    /// `p` for the stretched model, 1 for exponential, `None` for power.
    pub exponent: Option<f64>,
    /// RMS residual of `log E`.
    pub residual: f64,
    pub samples_used: usize,
    pub truncated: bool,
}

fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let c = my - slope * mx;
    let rms = (x.iter().zip(y).map(|(a, b)| (b - c - slope * a).powi(2)).sum::<f64>() / n).sqrt();
    (c, slope, rms)
}

/// Least-squares fit of `log E` against `model`.
pub fn decay_fit(trace: &EnergyTrace, model: DecayModel) -> Result<DecayFit> {
    if trace.samples.len() < MIN_FIT_SAMPLES {
        return Err(Error::Precondition(format!(
            "trace has {} samples, need at least {MIN_FIT_SAMPLES}",
            trace.samples.len()
        )));
    }
    let e0 = trace.samples[0].1;
    if !(e0 > 0.0) {
        return Err(Error::Precondition("initial energy must be positive".into()));
    }
    let kept: Vec<(f64, f64)> = trace.samples.iter().copied().take_while(|s| s.1 > ENERGY_FLOOR * e0).collect();
    let truncated = kept.len() < trace.samples.len();
    if kept.len() < 10 {
        return Err(Error::Precondition("energy reaches the floor almost immediately".into()));
    }
    let t: Vec<f64> = kept.iter().map(|s| s.0).collect();
    let y: Vec<f64> = kept.iter().map(|s| s.1.ln()).collect();
    let fit_power = |p: f64| {
        let x: Vec<f64> = t.iter().map(|v| v.max(0.0).powf(p)).collect();
        linear_fit(&x, &y)
    };
    let (intercept, rate, exponent, residual) = match model {
        DecayModel::Exponential => {
            let (c, s, r) = linear_fit(&t, &y);
            (c, -s, Some(1.0), r)
        }
        DecayModel::Power => {
            let x: Vec<f64> = t.iter().map(|v| (1.0 + v).ln()).collect();
            let (c, s, r) = linear_fit(&x, &y);
            (c, -s, None, r)
        }
        DecayModel::Stretched => {
            // golden-section search on p
            let (mut a, mut b) = (0.05f64, 1.5f64);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            let mut x1 = b - g * (b - a);
            let mut x2 = a + g * (b - a);
            let (mut f1, mut f2) = (fit_power(x1).2, fit_power(x2).2);
            for _ in 0..80 {
                if f1 < f2 {
                    b = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = b - g * (b - a);
                    f1 = fit_power(x1).2;
                } else {
                    a = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = a + g * (b - a);
                    f2 = fit_power(x2).2;
                }
            }
            let p = 0.5 * (a + b);
            let (c, s, r) = fit_power(p);
            (c, -s, Some(p), r)
        }
    };
    Ok(DecayFit { model, intercept, rate, exponent, residual, samples_used: kept.len(), truncated })
}

/// All three fits, for side-by-side residual comparison.
pub fn compare_models(trace: &EnergyTrace) -> Result<Vec<DecayFit>> {
    [DecayModel::Exponential, DecayModel::Stretched, DecayModel::Power]
        .into_iter()
        .map(|m| decay_fit(trace, m))
        .collect()
}
