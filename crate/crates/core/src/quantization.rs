//! Dense matrix realizations of `Delta_g`, pseudodifferential quantizations, the semiclassical
//! operator `P(hbar, z)` and its propagator, on a Fourier grid of `N x N` modes.
//!
//! States are coefficient vectors in FFT mode order with the x-major flat index `i N + j`
//! (`i` the x-mode, `j` the y-mode). Grid values relate to coefficients by the unitary DFT.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, Scale, Side};
use num_complex::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{flow_with_damping, PhaseSpacePoint};
use crate::error::{Error, Result};
use crate::fourier::{modes, wrap_index, Fft2};
use crate::geometry::{ConformalMetric, DampingField};

pub type C64 = Complex<f64>;

const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Largest exponent accepted by the propagator before reporting overflow.
pub const OVERFLOW_EXPONENT: f64 = 700.0;
/// Eigenvector condition number above which the propagator switches to Pade.
pub const COND_THRESHOLD: f64 = 1e12;

#[derive(Clone, Debug, PartialEq)]
pub struct FourierGrid {
    n: usize,
    hbar: f64,
    l: f64,
    modes: Vec<i32>,
}

impl FourierGrid {
    pub fn new(n: usize, hbar: f64, l: f64) -> Result<Self> {
        if n < 16 || n % 2 != 0 {
            return Err(Error::InvalidParameter(format!("grid needs even N >= 16, got {n}")));
        }
        if !(hbar > 0.0) || !(l > 0.0) {
            return Err(Error::InvalidParameter("grid needs hbar > 0 and L > 0".into()));
        }
        Ok(Self { n, hbar, l, modes: modes(n) })
    }

    /// Grid for `metric` (same `L` and `N`).
    pub fn for_metric(metric: &ConformalMetric<f64>, hbar: f64) -> Result<Self> {
        Self::new(metric.grid_size(), hbar, metric.side())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.n * self.n
    }

    pub fn hbar(&self) -> f64 {
        self.hbar
    }

    pub fn side(&self) -> f64 {
        self.l
    }

    pub fn with_hbar(&self, hbar: f64) -> Result<Self> {
        Self::new(self.n, hbar, self.l)
    }

    /// Integer wavevector of flat index `idx`.
    pub fn mode(&self, idx: usize) -> (i32, i32) {
        (self.modes[idx / self.n], self.modes[idx % self.n])
    }

    pub fn index(&self, kx: i32, ky: i32) -> usize {
        wrap_index(kx, self.n) * self.n + wrap_index(ky, self.n)
    }

    /// Wavenumber `2 pi k / L`.
    pub fn wavenumber(&self, idx: usize) -> [f64; 2] {
        let (kx, ky) = self.mode(idx);
        let s = TAU / self.l;
        [s * kx as f64, s * ky as f64]
    }

    /// Semiclassical frequency `hbar 2 pi k / L`.
    pub fn xi(&self, idx: usize) -> [f64; 2] {
        let k = self.wavenumber(idx);
        [self.hbar * k[0], self.hbar * k[1]]
    }

    /// Largest resolved `|xi_i|`, `hbar (2 pi / L) N / 2`.
    pub fn xi_max(&self) -> f64 {
        self.hbar * TAU / self.l * (self.n / 2) as f64
    }

    /// Grid position of flat position index `p`.
    pub fn position(&self, p: usize) -> [f64; 2] {
        let h = self.l / self.n as f64;
        [h * (p / self.n) as f64, h * (p % self.n) as f64]
    }

    /// True if the mode lies on the Nyquist edge of the mode set.
    pub fn is_edge(&self, idx: usize) -> bool {
        let (kx, ky) = self.mode(idx);
        let h = (self.n / 2) as i32;
        kx == -h || ky == -h
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaveFunction {
    pub coeffs: Vec<C64>,
    pub norm: f64,
}

fn l2(v: &[C64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

impl WaveFunction {
    pub fn from_coeffs(coeffs: Vec<C64>) -> Self {
        let norm = l2(&coeffs);
        Self { coeffs, norm }
    }

    /// From grid values (x-major) via the unitary DFT.
    pub fn from_grid(values: &[C64], n: usize) -> Self {
        let fft = Fft2::<f64>::new(n);
        let mut data = values.to_vec();
        fft.forward(&mut data);
        let s = 1.0 / n as f64;
        data.iter_mut().for_each(|c| *c *= s);
        Self::from_coeffs(data)
    }

    pub fn to_grid(&self, n: usize) -> Vec<C64> {
        let fft = Fft2::<f64>::new(n);
        let mut data = self.coeffs.clone();
        fft.inverse(&mut data);
        let s = 1.0 / n as f64;
        data.iter_mut().for_each(|c| *c *= s);
        data
    }

    /// Plane wave `exp(2 pi i k.x / L)`, unit norm.
    pub fn plane_wave(grid: &FourierGrid, k: (i32, i32)) -> Self {
        let mut c = vec![C64::new(0.0, 0.0); grid.dim()];
        c[grid.index(k.0, k.1)] = C64::new(1.0, 0.0);
        Self::from_coeffs(c)
    }

    pub fn normalized(&self) -> Self {
        let s = 1.0 / self.norm;
        Self::from_coeffs(self.coeffs.iter().map(|c| c * s).collect())
    }

    pub fn as_col(&self) -> Mat<C64> {
        Mat::from_fn(self.coeffs.len(), 1, |i, _| self.coeffs[i])
    }

    pub fn inner(&self, other: &WaveFunction) -> C64 {
        self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a * b.conj()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Laplacian,
    Symbol,
    Propagator,
    Pencil,
    Product,
}

#[derive(Clone, Debug)]
pub struct OperatorMatrix {
    pub mat: Mat<C64>,
    pub provenance: Provenance,
    pub hbar: f64,
}

impl OperatorMatrix {
    pub fn new(mat: Mat<C64>, provenance: Provenance, hbar: f64) -> Self {
        Self { mat, provenance, hbar }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    /// Largest singular value.
    pub fn op_norm(&self) -> f64 {
        op_norm(&self.mat)
    }

    /// Frobenius norm of `A - A*` (an upper bound for its operator norm).
    pub fn hermitian_defect(&self) -> f64 {
        (&self.mat - self.mat.adjoint()).norm_l2()
    }

    pub fn adjoint(&self) -> Self {
        Self::new(self.mat.adjoint().to_owned(), self.provenance, self.hbar)
    }

    pub fn apply(&self, psi: &WaveFunction) -> WaveFunction {
        let y = &self.mat * psi.as_col();
        WaveFunction::from_coeffs((0..y.nrows()).map(|i| y[(i, 0)]).collect())
    }

    /// `<A psi, psi>`.
    pub fn expectation(&self, psi: &WaveFunction) -> C64 {
        self.apply(psi).inner(psi)
    }

    pub fn is_finite(&self) -> bool {
        let n = self.dim();
        (0..n).all(|j| (0..n).all(|i| self.mat[(i, j)].is_finite()))
    }

    /// Smallest eigenvalue of the Hermitian part.
    pub fn min_hermitian_eigenvalue(&self) -> Result<f64> {
        let h = hermitian_part(&self.mat);
        let ev = h.self_adjoint_eigenvalues(Side::Lower).map_err(|e| Error::Linalg(format!("{e:?}")))?;
        Ok(ev[0])
    }

    pub fn product(&self, other: &OperatorMatrix) -> Self {
        Self::new(&self.mat * &other.mat, Provenance::Product, self.hbar)
    }
}

/// Relative size below which whole rows or columns are dropped by [`op_norm`].
pub const NEGLIGIBLE: f64 = 1e-15;

/// Largest singular value, computed by a full SVD of the block spanned by the rows and
/// columns holding an entry above `NEGLIGIBLE * max|a_ij|`. Dropping them perturbs the norm by
/// at most `sqrt(n) * NEGLIGIBLE` relative.
pub fn op_norm(m: &Mat<C64>) -> f64 {
    let cut = m.norm_max() * NEGLIGIBLE;
    let rows: Vec<usize> = (0..m.nrows()).filter(|&i| (0..m.ncols()).any(|j| m[(i, j)].norm() > cut)).collect();
    let cols: Vec<usize> = (0..m.ncols()).filter(|&j| (0..m.nrows()).any(|i| m[(i, j)].norm() > cut)).collect();
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let block = Mat::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])]);
    if rows.len().min(cols.len()) <= GRAM_LIMIT {
        return match block.singular_values() {
            Ok(s) => s[0],
            Err(_) => f64::NAN,
        };
    }
    // largest eigenvalue of the smaller Gram matrix
    let gram = if rows.len() <= cols.len() { &block * block.adjoint() } else { block.adjoint() * &block };
    match gram.self_adjoint_eigenvalues(Side::Lower) {
        Ok(ev) => ev[ev.len() - 1].max(0.0).sqrt(),
        Err(_) => f64::NAN,
    }
}

/// Block size above which [`op_norm`] works with the Gram matrix instead of a full SVD.
pub const GRAM_LIMIT: usize = 1024;

pub fn hermitian_part(m: &Mat<C64>) -> Mat<C64> {
    Scale(C64::new(0.5, 0.0)) * (m + m.adjoint())
}

/// Real symbol `b(x, y, xi_x, xi_y)` with optional radial support `r0 <= |xi| <= r1`.
#[derive(Clone)]
pub struct SymbolField {
    f: Arc<dyn Fn(f64, f64, f64, f64) -> f64 + Send + Sync>,
    pub name: String,
    /// Declared support in the flat norm `|xi|`.
    pub xi_support: Option<(f64, f64)>,
    /// Smoothness scale exponent for `hbar^nu`-dependent symbols.
    pub nu_bar: Option<f64>,
    /// Symbol depends on `xi` only.
    pub xi_only: bool,
}

impl std::fmt::Debug for SymbolField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SymbolField")
            .field("name", &self.name)
            .field("xi_support", &self.xi_support)
            .field("nu_bar", &self.nu_bar)
            .finish()
    }
}

impl SymbolField {
    pub fn new(name: &str, f: impl Fn(f64, f64, f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { f: Arc::new(f), name: name.to_string(), xi_support: None, nu_bar: None, xi_only: false }
    }

    pub fn constant(c: f64) -> Self {
        let mut s = Self::new("constant", move |_, _, _, _| c);
        s.xi_only = true;
        s
    }

    pub fn of_xi(name: &str, g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        let mut s = Self::new(name, move |_, _, a, b| g(a, b));
        s.xi_only = true;
        s
    }

    pub fn of_x(name: &str, g: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(name, move |x, y, _, _| g(x, y))
    }

    pub fn with_support(mut self, r0: f64, r1: f64) -> Self {
        self.xi_support = Some((r0, r1));
        self
    }

    pub fn with_scale(mut self, nu_bar: f64) -> Self {
        self.nu_bar = Some(nu_bar);
        self
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64, xi0: f64, xi1: f64) -> f64 {
        (self.f)(x, y, xi0, xi1)
    }

    pub fn eval_point(&self, rho: &PhaseSpacePoint<f64>) -> f64 {
        self.eval(rho.x[0], rho.x[1], rho.xi[0], rho.xi[1])
    }

    /// Checks that `b` vanishes outside the declared support on `n^4` samples of
    /// `[0,L)^2 x [-xi_max, xi_max]^2`.
    pub fn verify_support(&self, l: f64, xi_max: f64, n: usize) -> bool {
        let Some((r0, r1)) = self.xi_support else { return true };
        let h = l / n as f64;
        let hx = 2.0 * xi_max / n as f64;
        (0..n * n).into_par_iter().all(|p| {
            let (x, y) = (h * (p / n) as f64, h * (p % n) as f64);
            (0..n * n).all(|q| {
                let a = -xi_max + hx * (q / n) as f64;
                let b = -xi_max + hx * (q % n) as f64;
                let r = (a * a + b * b).sqrt();
                (r >= r0 && r <= r1) || self.eval(x, y, a, b) == 0.0
            })
        })
    }

    /// Pointwise product with another symbol.
    pub fn times(&self, other: &SymbolField) -> SymbolField {
        let (f, g) = (self.f.clone(), other.f.clone());
        let mut s = SymbolField::new(&format!("{}*{}", self.name, other.name), move |x, y, a, b| {
            f(x, y, a, b) * g(x, y, a, b)
        });
        s.xi_only = self.xi_only && other.xi_only;
        s.xi_support = match (self.xi_support, other.xi_support) {
            (Some((a0, a1)), Some((b0, b1))) => Some((a0.max(b0), a1.min(b1))),
            (Some(s), None) | (None, Some(s)) => Some(s),
            (None, None) => None,
        };
        s
    }
}

/// Grid-exact Fourier-basis matrix of multiplication by a function sampled on the grid:
/// `M[m, k] = f_hat((m - k) mod N)`.
pub fn multiplication_matrix(samples: &[C64], n: usize) -> Mat<C64> {
    let fft = Fft2::<f64>::new(n);
    let mut c = samples.to_vec();
    fft.forward(&mut c);
    let s = 1.0 / (n * n) as f64;
    c.iter_mut().for_each(|v| *v *= s);
    let md = modes(n);
    Mat::from_fn(n * n, n * n, |r, col| {
        let (mx, my) = (md[r / n], md[r % n]);
        let (kx, ky) = (md[col / n], md[col % n]);
        c[wrap_index(mx - kx, n) * n + wrap_index(my - ky, n)]
    })
}

fn real_samples(v: &[f64]) -> Vec<C64> {
    v.iter().map(|&x| C64::new(x, 0.0)).collect()
}

fn aliasing_guard(band: i32, n: usize) -> Result<()> {
    let limit = (n / 4) as i32;
    if band > limit {
        return Err(Error::Aliasing { band, limit });
    }
    Ok(())
}

fn flat_laplacian_diag(grid: &FourierGrid) -> Vec<f64> {
    (0..grid.dim())
        .map(|i| {
            let k = grid.wavenumber(i);
            -(k[0] * k[0] + k[1] * k[1])
        })
        .collect()
}

fn scale_columns(m: &mut Mat<C64>, d: &[f64]) {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            m[(i, j)] *= d[j];
        }
    }
}

/// `Delta_g = exp(-2 phi) Delta` in the Fourier basis.
pub fn laplace_beltrami(metric: &ConformalMetric<f64>, grid: &FourierGrid) -> Result<OperatorMatrix> {
    let n = grid.size();
    aliasing_guard(metric.band(), n)?;
    let d = flat_laplacian_diag(grid);
    if metric.is_flat() && metric.phi_series().as_constant().map_or(true, |c| c == 0.0) {
        return Ok(OperatorMatrix::new(
            Mat::from_fn(n * n, n * n, |i, j| if i == j { C64::new(d[i], 0.0) } else { C64::new(0.0, 0.0) }),
            Provenance::Laplacian,
            grid.hbar,
        ));
    }
    let w: Vec<f64> = metric.phi_series().sample_grid(n).iter().map(|p| (-2.0 * p).exp()).collect();
    let mut m = multiplication_matrix(&real_samples(&w), n);
    scale_columns(&mut m, &d);
    Ok(OperatorMatrix::new(m, Provenance::Laplacian, grid.hbar))
}

/// Half-density form `exp(-phi) Delta exp(-phi)`: Hermitian and grid-similar to `Delta_g`
/// through multiplication by `exp(phi)`.
pub fn symmetrized_laplacian(metric: &ConformalMetric<f64>, grid: &FourierGrid) -> Result<OperatorMatrix> {
    let n = grid.size();
    aliasing_guard(metric.band(), n)?;
    let d = flat_laplacian_diag(grid);
    let w: Vec<f64> = metric.phi_series().sample_grid(n).iter().map(|p| (-p).exp()).collect();
    let e = multiplication_matrix(&real_samples(&w), n);
    let mut ed = e.clone();
    scale_columns(&mut ed, &d);
    let m = &ed * &e;
    Ok(OperatorMatrix::new(hermitian_part(&m), Provenance::Laplacian, grid.hbar))
}

/// Fourier coefficients (DFT / N^2, x-major) of `x -> b(x, xi)` on the grid.
fn symbol_coefficients(b: &SymbolField, grid: &FourierGrid, fft: &Fft2<f64>, xi: [f64; 2]) -> Option<Vec<C64>> {
    let n = grid.size();
    let mut data: Vec<C64> = (0..n * n)
        .map(|p| {
            let x = grid.position(p);
            C64::new(b.eval(x[0], x[1], xi[0], xi[1]), 0.0)
        })
        .collect();
    if data.iter().all(|c| c.re == 0.0) {
        return None;
    }
    fft.forward(&mut data);
    let s = 1.0 / (n * n) as f64;
    data.iter_mut().for_each(|c| *c *= s);
    Some(data)
}

fn diff_index(grid: &FourierGrid, m: usize, k: usize) -> usize {
    let (mx, my) = grid.mode(m);
    let (kx, ky) = grid.mode(k);
    grid.index(mx - kx, my - ky)
}

fn xi_only_matrix(b: &SymbolField, grid: &FourierGrid) -> Mat<C64> {
    let n = grid.dim();
    let d: Vec<f64> = (0..n)
        .map(|i| {
            let xi = grid.xi(i);
            b.eval(0.0, 0.0, xi[0], xi[1])
        })
        .collect();
    Mat::from_fn(n, n, |i, j| if i == j { C64::new(d[i], 0.0) } else { C64::new(0.0, 0.0) })
}

/// Kohn-Nirenberg quantization `(Op b) u(x) = sum_k b(x, hbar 2 pi k / L) u_hat(k) e^{2 pi i k.x/L}`,
/// exact on the grid.
pub fn quantize_kn(b: &SymbolField, grid: &FourierGrid) -> OperatorMatrix {
    if b.xi_only {
        return OperatorMatrix::new(xi_only_matrix(b, grid), Provenance::Symbol, grid.hbar);
    }
    let n = grid.dim();
    let fft = Fft2::<f64>::new(grid.size());
    let cols: Vec<Option<Vec<C64>>> =
        (0..n).into_par_iter().map(|k| symbol_coefficients(b, grid, &fft, grid.xi(k))).collect();
    let zero = C64::new(0.0, 0.0);
    let m = Mat::from_fn(n, n, |r, k| match &cols[k] {
        Some(c) => c[diff_index(grid, r, k)],
        None => zero,
    });
    OperatorMatrix::new(m, Provenance::Symbol, grid.hbar)
}

/// Midpoint Weyl quantization `Op[m, k] = b_hat(m - k; hbar 2 pi (m + k) / (2L))`. Hermitian
/// for real `b`; `xi`-only symbols are exact multipliers.
pub fn quantize_weyl(b: &SymbolField, grid: &FourierGrid) -> OperatorMatrix {
    if b.xi_only {
        return OperatorMatrix::new(xi_only_matrix(b, grid), Provenance::Symbol, grid.hbar);
    }
    let n = grid.size();
    let dim = grid.dim();
    let h = (n / 2) as i32;
    let fft = Fft2::<f64>::new(n);
    // midpoint sums s = m + k range over [-n, n - 2] per axis
    let sums: Vec<(i32, i32)> = (-2 * h..=2 * h - 2).flat_map(|a| (-2 * h..=2 * h - 2).map(move |b| (a, b))).collect();
    let s = TAU / grid.l * grid.hbar / 2.0;
    let entries: Vec<Vec<(usize, usize, C64)>> = sums
        .par_iter()
        .map(|&(sx, sy)| {
            let Some(c) = symbol_coefficients(b, grid, &fft, [s * sx as f64, s * sy as f64]) else {
                return Vec::new();
            };
            let mut out = Vec::new();
            for mx in (sx + 1 - h).max(-h)..=(sx + h).min(h - 1) {
                let kx = sx - mx;
                for my in (sy + 1 - h).max(-h)..=(sy + h).min(h - 1) {
                    let ky = sy - my;
                    let v = c[grid.index(mx - kx, my - ky)];
                    if v != C64::new(0.0, 0.0) {
                        out.push((grid.index(mx, my), grid.index(kx, ky), v));
                    }
                }
            }
            out
        })
        .collect();
    let mut m = Mat::<C64>::zeros(dim, dim);
    for (r, c, v) in entries.into_iter().flatten() {
        m[(r, c)] = v;
    }
    OperatorMatrix::new(hermitian_part(&m), Provenance::Symbol, grid.hbar)
}

/// Anti-Wick (coherent-state) quantization as a frame sum over a `xi`-lattice:
/// `Op[m, k] = h^2/(pi hbar) sum_l b_hat(m - k; xi_l) G_l(m) G_l(k)`,
/// `G_l(m) = exp(-|hbar 2 pi m / L - xi_l|^2 / (2 hbar))`.
/// Positive semidefinite whenever `b >= 0` on the grid, and the identity for `b = 1`.
pub fn quantize_antiwick(b: &SymbolField, grid: &FourierGrid) -> OperatorMatrix {
    let dim = grid.dim();
    let hb = grid.hbar;
    let sigma = (hb / 2.0).sqrt();
    let spacing = 0.7 * sigma;
    let reach = grid.xi_max() + 9.0 * sigma;
    let nl = (reach / spacing).ceil() as i64;
    let lattice: Vec<[f64; 2]> = (-nl..=nl)
        .flat_map(|a| (-nl..=nl).map(move |c| [a as f64 * spacing, c as f64 * spacing]))
        .collect();
    let weight = spacing * spacing / (PI * hb);
    let xis: Vec<[f64; 2]> = (0..dim).map(|i| grid.xi(i)).collect();
    let cut = 8.5 * sigma;
    let fft = Fft2::<f64>::new(grid.size());
    let zero = || vec![C64::new(0.0, 0.0); dim * dim];
    let acc = lattice
        .par_iter()
        .fold(zero, |mut acc, xl| {
            let near: Vec<(usize, f64)> = xis
                .iter()
                .enumerate()
                .filter_map(|(i, x)| {
                    let d2 = (x[0] - xl[0]).powi(2) + (x[1] - xl[1]).powi(2);
                    (d2.sqrt() <= cut).then(|| (i, (-d2 / (2.0 * hb)).exp()))
                })
                .collect();
            if near.is_empty() {
                return acc;
            }
            let Some(c) = symbol_coefficients(b, grid, &fft, *xl) else { return acc };
            for &(m, gm) in &near {
                for &(k, gk) in &near {
                    acc[m * dim + k] += c[diff_index(grid, m, k)] * (weight * gm * gk);
                }
            }
            acc
        })
        .reduce(zero, |mut a, b| {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            a
        });
    let m = Mat::from_fn(dim, dim, |i, j| acc[i * dim + j]);
    OperatorMatrix::new(hermitian_part(&m), Provenance::Symbol, grid.hbar)
}

/// `P(hbar, z) = -hbar^2/2 e^{-phi} Delta e^{-phi} - i hbar sqrt(2z) a`.
pub fn build_p(
    metric: &ConformalMetric<f64>,
    damping: &DampingField<f64>,
    grid: &FourierGrid,
    z: C64,
) -> Result<OperatorMatrix> {
    let n = grid.size();
    aliasing_guard(damping.band(), n)?;
    let hb = grid.hbar;
    let mut p = if metric.phi_series().is_zero() {
        let d = flat_laplacian_diag(grid);
        Mat::from_fn(grid.dim(), grid.dim(), |i, j| {
            if i == j { C64::new(-hb * hb / 2.0 * d[i], 0.0) } else { C64::new(0.0, 0.0) }
        })
    } else {
        Scale(C64::new(-hb * hb / 2.0, 0.0)) * &symmetrized_laplacian(metric, grid)?.mat
    };
    if !damping.is_zero() {
        let coef = -I * hb * (2.0 * z).sqrt();
        let a = multiplication_matrix(&real_samples(&damping.sample_grid(n)), n);
        p += Scale(coef) * &a;
    }
    Ok(OperatorMatrix::new(p, Provenance::Pencil, hb))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropagatorMethod {
    Diagonal,
    Hermitian,
    Eigen,
    Pade,
}

/// Reusable factorization of `P` for `U^t = exp(-i t P / hbar)`.
#[derive(Clone, Debug)]
pub struct Propagator {
    pub method: PropagatorMethod,
    pub hbar: f64,
    values: Vec<C64>,
    vectors: Option<Mat<C64>>,
    inverse: Option<Mat<C64>>,
    generator: Option<Mat<C64>>,
    /// Largest `|Im|` over the spectrum of `P` (or a numerical-range bound for Pade).
    pub max_imag: f64,
    /// Eigenvector condition number (1 for normal paths).
    pub condition: f64,
}

fn is_diagonal(m: &Mat<C64>) -> bool {
    let n = m.nrows();
    (0..n).all(|j| (0..n).all(|i| i == j || m[(i, j)] == C64::new(0.0, 0.0)))
}

impl Propagator {
    pub fn new(p: &OperatorMatrix) -> Result<Self> {
        let hbar = p.hbar;
        let n = p.dim();
        let m = &p.mat;
        if is_diagonal(m) {
            let values: Vec<C64> = (0..n).map(|i| m[(i, i)]).collect();
            let max_imag = values.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
            return Ok(Self {
                method: PropagatorMethod::Diagonal,
                hbar,
                values,
                vectors: None,
                inverse: None,
                generator: None,
                max_imag,
                condition: 1.0,
            });
        }
        let scale = m.norm_max().max(f64::MIN_POSITIVE);
        let defect = (m - m.adjoint()).norm_max();
        if defect <= 1e-14 * scale {
            let h = hermitian_part(m);
            let e = h.self_adjoint_eigen(Side::Lower).map_err(|e| Error::Linalg(format!("{e:?}")))?;
            let values = (0..n).map(|i| C64::new(e.S()[i].re, 0.0)).collect();
            return Ok(Self {
                method: PropagatorMethod::Hermitian,
                hbar,
                values,
                vectors: Some(e.U().to_owned()),
                inverse: None,
                generator: None,
                max_imag: 0.0,
                condition: 1.0,
            });
        }
        if let Ok(e) = m.eigen() {
            let v = e.U().to_owned();
            let values: Vec<C64> = (0..n).map(|i| e.S()[i]).collect();
            let max_imag = values.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
            let sv = v.singular_values().map_err(|e| Error::Linalg(format!("{e:?}")))?;
            let condition = sv[0] / sv[n - 1];
            if condition.is_finite() && condition <= COND_THRESHOLD {
                let inv = v.partial_piv_lu().inverse();
                return Ok(Self {
                    method: PropagatorMethod::Eigen,
                    hbar,
                    values,
                    vectors: Some(v),
                    inverse: Some(inv),
                    generator: None,
                    max_imag,
                    condition,
                });
            }
            return Ok(Self::pade(m, hbar, max_imag, condition));
        }
        // numerical range bound on the imaginary part
        let skew = Scale(C64::new(0.0, -0.5)) * (m - m.adjoint());
        let max_imag = op_norm(&skew);
        Ok(Self::pade(m, hbar, max_imag, f64::INFINITY))
    }

    fn pade(m: &Mat<C64>, hbar: f64, max_imag: f64, condition: f64) -> Self {
        Self {
            method: PropagatorMethod::Pade,
            hbar,
            values: Vec::new(),
            vectors: None,
            inverse: None,
            generator: Some(m.clone()),
            max_imag,
            condition,
        }
    }

    /// `(U^t)* A U^t`, elementwise when `U` is diagonal.
    pub fn conjugate(&self, a: &Mat<C64>, t: f64) -> Result<Mat<C64>> {
        if self.method == PropagatorMethod::Diagonal {
            let exponent = t.abs() * self.max_imag / self.hbar;
            if exponent > OVERFLOW_EXPONENT {
                return Err(Error::Overflow { exponent });
            }
            let d: Vec<C64> = self.values.iter().map(|&v| (-I * t * v / self.hbar).exp()).collect();
            return Ok(Mat::from_fn(a.nrows(), a.ncols(), |i, j| d[i].conj() * a[(i, j)] * d[j]));
        }
        let u = self.at(t)?;
        Ok(u.mat.adjoint() * a * &u.mat)
    }

    /// Eigenvalues of `P` (empty for the Pade path).
    pub fn eigenvalues(&self) -> &[C64] {
        &self.values
    }

    pub fn at(&self, t: f64) -> Result<OperatorMatrix> {
        if !t.is_finite() {
            return Err(Error::InvalidParameter("propagator time must be finite".into()));
        }
        let exponent = t.abs() * self.max_imag / self.hbar;
        if exponent > OVERFLOW_EXPONENT {
            return Err(Error::Overflow { exponent });
        }
        let phase = |lam: C64| (-I * t * lam / self.hbar).exp();
        let mat = match self.method {
            PropagatorMethod::Diagonal => {
                let n = self.values.len();
                let d: Vec<C64> = self.values.iter().map(|&v| phase(v)).collect();
                Mat::from_fn(n, n, |i, j| if i == j { d[i] } else { C64::new(0.0, 0.0) })
            }
            PropagatorMethod::Hermitian => {
                let v = self.vectors.as_ref().unwrap();
                let mut vd = v.clone();
                for j in 0..vd.ncols() {
                    let f = phase(self.values[j]);
                    for i in 0..vd.nrows() {
                        vd[(i, j)] *= f;
                    }
                }
                &vd * v.adjoint()
            }
            PropagatorMethod::Eigen => {
                let v = self.vectors.as_ref().unwrap();
                let mut vd = v.clone();
                for j in 0..vd.ncols() {
                    let f = phase(self.values[j]);
                    for i in 0..vd.nrows() {
                        vd[(i, j)] *= f;
                    }
                }
                &vd * self.inverse.as_ref().unwrap()
            }
            PropagatorMethod::Pade => {
                let g = self.generator.as_ref().unwrap();
                expm(&(Scale(-I * (t / self.hbar)) * g))
            }
        };
        Ok(OperatorMatrix::new(mat, Provenance::Propagator, self.hbar))
    }
}

/// `exp(-i t P / hbar)`.
pub fn propagator(p: &OperatorMatrix, t: f64) -> Result<OperatorMatrix> {
    Propagator::new(p)?.at(t)
}

fn norm1(m: &Mat<C64>) -> f64 {
    (0..m.ncols()).map(|j| (0..m.nrows()).map(|i| m[(i, j)].norm()).sum::<f64>()).fold(0.0, f64::max)
}

/// Matrix exponential by degree-13 Pade approximation with scaling and squaring.
pub fn expm(a: &Mat<C64>) -> Mat<C64> {
    const B: [f64; 14] = [
        64764752532480000.0,
        32382376266240000.0,
        7771770303897600.0,
        1187353796428800.0,
        129060195264000.0,
        10559470521600.0,
        670442572800.0,
        33522128640.0,
        1323241920.0,
        40840800.0,
        960960.0,
        16380.0,
        182.0,
        1.0,
    ];
    let n = a.nrows();
    let nrm = norm1(a);
    let s = if nrm > 5.371920351148152 { (nrm / 5.371920351148152).log2().ceil() as i32 } else { 0 };
    let a = Scale(C64::new(0.5f64.powi(s), 0.0)) * a;
    let id = Mat::<C64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let c = |k: usize| Scale(C64::new(B[k], 0.0));
    let inner_u = c(13) * &a6 + c(11) * &a4 + c(9) * &a2;
    let u = &a * (&a6 * &inner_u + c(7) * &a6 + c(5) * &a4 + c(3) * &a2 + c(1) * &id);
    let inner_v = c(12) * &a6 + c(10) * &a4 + c(8) * &a2;
    let v = &a6 * &inner_v + c(6) * &a6 + c(4) * &a4 + c(2) * &a2 + c(0) * &id;
    let num = &v + &u;
    let den = &v - &u;
    let mut r = den.partial_piv_lu().solve(&num);
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgorovOptions {
    pub kappa1: f64,
    /// Flow step for the transported symbol (ignored on the flat metric, where one RK4 step
    /// per sample is exact).
    pub dt: f64,
    pub z: C64,
}

impl Default for EgorovOptions {
    fn default() -> Self {
        Self { kappa1: 0.2, dt: 1e-2, z: C64::new(0.5, 0.0) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgorovReport {
    pub hbar: f64,
    pub t: f64,
    pub residual: f64,
    /// Whether `|t| <= kappa1 |log hbar|`.
    pub within_log_time: bool,
    pub kappa1: f64,
}

/// Transported symbol `b(g^t rho) exp(-2 Re sqrt(2z) int_0^t a(g^s rho) ds)` sampled at
/// every grid point and mode, as KN columns.
fn transported_kn(
    metric: &ConformalMetric<f64>,
    damping: &DampingField<f64>,
    b: &SymbolField,
    t: f64,
    grid: &FourierGrid,
    opts: &EgorovOptions,
) -> Result<OperatorMatrix> {
    let n = grid.size();
    let dim = grid.dim();
    let fft = Fft2::<f64>::new(n);
    let dt = if metric.is_flat() { t.abs().max(1e-300) } else { opts.dt };
    let rate = (2.0 * opts.z).sqrt().re;
    // |xi| changes along the flow by at most this factor (p0 is conserved)
    let (phi_lo, phi_hi) = metric.phi_series().grid_range(4 * metric.grid_size());
    let spread = (phi_hi - phi_lo).exp();
    let mut peak = 0.0f64;
    let cols: Result<Vec<(Option<Vec<C64>>, f64)>> = (0..dim)
        .into_par_iter()
        .map(|k| {
            let xi = grid.xi(k);
            if let Some((r0, r1)) = b.xi_support {
                let r = xi[0].hypot(xi[1]);
                if t != 0.0 && (r > r1 * spread || r < r0 / spread) {
                    return Ok((None, 0.0));
                }
            }
            let mut vals = Vec::with_capacity(dim);
            let mut vmax = 0.0f64;
            for p in 0..dim {
                let x = grid.position(p);
                let v = if (xi[0] == 0.0 && xi[1] == 0.0) || t == 0.0 {
                    b.eval(x[0], x[1], xi[0], xi[1]) * (-2.0 * rate * t * damping.a(x[0], x[1])).exp()
                } else {
                    let rho = PhaseSpacePoint::new(x, xi);
                    let (end, int_a) = flow_with_damping(metric, damping, &rho, t, dt)?;
                    b.eval_point(&end) * (-2.0 * rate * int_a).exp()
                };
                vmax = vmax.max(v.abs());
                vals.push(C64::new(v, 0.0));
            }
            if vmax == 0.0 {
                return Ok((None, 0.0));
            }
            fft.forward(&mut vals);
            let s = 1.0 / dim as f64;
            vals.iter_mut().for_each(|c| *c *= s);
            Ok((Some(vals), vmax))
        })
        .collect();
    let cols = cols?;
    for (_, v) in &cols {
        peak = peak.max(*v);
    }
    for (k, (_, v)) in cols.iter().enumerate() {
        if grid.is_edge(k) && *v > 1e-10 * peak.max(f64::MIN_POSITIVE) {
            let xi = grid.xi(k);
            return Err(Error::OutsideWindow { xi: xi[0].abs().max(xi[1].abs()), window: grid.xi_max() });
        }
    }
    let zero = C64::new(0.0, 0.0);
    let m = Mat::from_fn(dim, dim, |r, k| match &cols[k].0 {
        Some(c) => c[diff_index(grid, r, k)],
        None => zero,
    });
    Ok(OperatorMatrix::new(m, Provenance::Symbol, grid.hbar))
}

/// `|| (U^t)* Op(b) U^t - Op(b_t) ||` with KN quantization and the damped transported symbol.
pub fn egorov_residual(
    metric: &ConformalMetric<f64>,
    damping: &DampingField<f64>,
    b: &SymbolField,
    t: f64,
    grid: &FourierGrid,
    opts: EgorovOptions,
) -> Result<EgorovReport> {
    let p = build_p(metric, damping, grid, opts.z)?;
    let op_b = quantize_kn(b, grid);
    let heis = Propagator::new(&p)?.conjugate(&op_b.mat, t)?;
    let target = transported_kn(metric, damping, b, t, grid, &opts)?;
    let residual = op_norm(&(&heis - &target.mat));
    Ok(EgorovReport {
        hbar: grid.hbar,
        t,
        residual,
        within_log_time: t.abs() <= opts.kappa1 * grid.hbar.ln().abs(),
        kappa1: opts.kappa1,
    })
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
