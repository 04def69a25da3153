//! Quadratic eigenvalue problem `(-Delta_g - tau^2 - 2 i tau a) u = 0` on the position grid.
//!
//! The solver linearizes in `sigma = -i tau`, where the companion matrix is real; complex
//! eigenvalues then come in conjugate pairs, which is exactly the `tau <-> -conj(tau)` symmetry.

use std::f64::consts::{PI, TAU};

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{modes, Fft2};
use crate::geometry::{ConformalMetric, DampingField};
use crate::C64;
use faer::linalg::solvers::Solve;


const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Stored residuals must not exceed this.
pub const RESIDUAL_TOL: f64 = 1e-8;
/// `sigma_min` below which a resolvent probe is flagged singular.
pub const SINGULAR_TOL: f64 = 1e-13;

/// `K = -Delta_g`, `A = diag(a)` on the `N x N` position grid (x-major).
#[derive(Clone, Debug)]
pub struct QuadraticPencil {
    pub k: Mat<f64>,
    pub a: Vec<f64>,
    pub n: usize,
    pub l: f64,
    /// `phi` on the grid (zero for pencils built from raw parts).
    pub phi: Vec<f64>,
    /// `K 1 = 0`, enabling deflation of the constant mode.
    pub constant_kernel: bool,
    /// Mean of `a` against `dA_g`, divided by the area.
    pub damping_mean: f64,
}

/// First column of the flat grid Laplacian (a real symmetric circulant).
fn laplacian_stencil(n: usize, l: f64) -> Vec<f64> {
    let md = modes(n);
    let s = TAU / l;
    let mut c: Vec<C64> = (0..n * n)
        .map(|i| {
            let (kx, ky) = (md[i / n] as f64 * s, md[i % n] as f64 * s);
            C64::new(-(kx * kx + ky * ky), 0.0)
        })
        .collect();
    Fft2::<f64>::new(n).inverse(&mut c);
    let scale = 1.0 / (n * n) as f64;
    c.iter().map(|v| v.re * scale).collect()
}

impl QuadraticPencil {
    pub fn new(metric: &ConformalMetric<f64>, damping: &DampingField<f64>) -> Result<Self> {
        let n = metric.grid_size();
        let l = metric.side();
        let limit = (n / 4) as i32;
        if metric.band() > limit {
            return Err(Error::Aliasing { band: metric.band(), limit });
        }
        if damping.band() > limit {
            return Err(Error::Aliasing { band: damping.band(), limit });
        }
        let phi = metric.phi_series().sample_grid(n);
        let stencil = laplacian_stencil(n, l);
        let k = Mat::from_fn(n * n, n * n, |p, q| {
            let dx = (p / n + n - q / n) % n;
            let dy = (p % n + n - q % n) % n;
            -(-2.0 * phi[p]).exp() * stencil[dx * n + dy]
        });
        let a = damping.sample_grid(n);
        let w: Vec<f64> = phi.iter().map(|p| (2.0 * p).exp()).collect();
        let area: f64 = w.iter().sum();
        let damping_mean = a.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() / area;
        Ok(Self { k, a, n, l, phi, constant_kernel: true, damping_mean })
    }

    /// Pencil from explicit parts (no deflation, flat weight).
    pub fn from_parts(k: Mat<f64>, a: Vec<f64>) -> Result<Self> {
        let dim = k.nrows();
        if k.ncols() != dim || a.len() != dim {
            return Err(Error::InvalidParameter("pencil parts have inconsistent sizes".into()));
        }
        let damping_mean = a.iter().sum::<f64>() / dim.max(1) as f64;
        Ok(Self { k, a, n: 0, l: 1.0, phi: vec![0.0; dim], constant_kernel: false, damping_mean })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    /// `max |(W K)_{pq} - (W K)_{qp}|` with `W = diag(exp(2 phi))`, relative to `max |W K|`.
    pub fn weighted_hermitian_defect(&self) -> f64 {
        let d = self.dim();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for p in 0..d {
            let wp = (2.0 * self.phi[p]).exp();
            for q in 0..d {
                let wq = (2.0 * self.phi[q]).exp();
                let a = wp * self.k[(p, q)];
                num = num.max((a - wq * self.k[(q, p)]).abs());
                den = den.max(a.abs());
            }
        }
        num / den.max(f64::MIN_POSITIVE)
    }

    /// Characteristic frequency `(2 pi / L) N / 4` used to balance the companion.
    pub fn omega(&self) -> f64 {
        if self.n > 0 {
            TAU / self.l * (self.n / 4) as f64
        } else {
            let m = (0..self.dim()).map(|i| self.k[(i, i)].abs()).fold(0.0, f64::max);
            m.sqrt().max(1.0)
        }
    }

    /// `||(K - tau^2 - 2 i tau A) u|| / ||u||`.
    pub fn residual(&self, tau: C64, u: &[C64]) -> f64 {
        let d = self.dim();
        let mut num = 0.0;
        for p in 0..d {
            let mut s = C64::new(0.0, 0.0);
            for q in 0..d {
                s += u[q] * self.k[(p, q)];
            }
            s -= (tau * tau + 2.0 * I * tau * self.a[p]) * u[p];
            num += s.norm_sqr();
        }
        let den: f64 = u.iter().map(|c| c.norm_sqr()).sum();
        (num / den).sqrt()
    }

    /// `M(tau) = K - 2 i tau A - tau^2` as a complex matrix.
    pub fn matrix_at(&self, tau: C64) -> Mat<C64> {
        let d = self.dim();
        Mat::from_fn(d, d, |p, q| {
            let mut v = C64::new(self.k[(p, q)], 0.0);
            if p == q {
                v -= tau * tau + 2.0 * I * tau * self.a[p];
            }
            v
        })
    }
}

/// First-companion matrix in `tau` with `w = tau u / omega`:
/// `[[0, omega I], [K / omega, -2 i A]]`.
pub fn linearize(pencil: &QuadraticPencil) -> Mat<C64> {
    let d = pencil.dim();
    let om = pencil.omega();
    Mat::from_fn(2 * d, 2 * d, |i, j| match (i < d, j < d) {
        (true, true) => C64::new(0.0, 0.0),
        (true, false) => {
            if i == j - d {
                C64::new(om, 0.0)
            } else {
                C64::new(0.0, 0.0)
            }
        }
        (false, true) => C64::new(pencil.k[(i - d, j)] / om, 0.0),
        (false, false) => {
            if i == j {
                -2.0 * I * pencil.a[i - d]
            } else {
                C64::new(0.0, 0.0)
            }
        }
    })
}

/// Real companion in `sigma = -i tau`: `[[0, omega I], [-K / omega, -2 A]]`.
fn real_companion(k: &Mat<f64>, a: &Mat<f64>, om: f64) -> Mat<f64> {
    let d = k.nrows();
    Mat::from_fn(2 * d, 2 * d, |i, j| match (i < d, j < d) {
        (true, true) => 0.0,
        (true, false) => {
            if i == j - d {
                om
            } else {
                0.0
            }
        }
        (false, true) => -k[(i - d, j)] / om,
        (false, false) => -2.0 * a[(i - d, j - d)],
    })
}

/// Householder reflector `Q = I - 2 v v^T / v^T v` with `Q e_0 = 1 / sqrt(n)`.
fn householder_to_ones(d: usize) -> (Vec<f64>, f64) {
    let s = 1.0 / (d as f64).sqrt();
    let mut v = vec![-s; d];
    v[0] += 1.0;
    let vv: f64 = v.iter().map(|x| x * x).sum();
    (v, vv)
}

/// `Q^T M Q` for the reflector above (`Q` symmetric).
fn reflect_both(m: &Mat<f64>, v: &[f64], vv: f64) -> Mat<f64> {
    let d = m.nrows();
    // M Q = M - 2 (M v) v^T / vv
    let mv: Vec<f64> = (0..d).map(|i| (0..d).map(|j| m[(i, j)] * v[j]).sum()).collect();
    let mut mq = Mat::from_fn(d, d, |i, j| m[(i, j)] - 2.0 * mv[i] * v[j] / vv);
    // Q (MQ) = MQ - 2 v (v^T MQ) / vv
    let vt: Vec<f64> = (0..d).map(|j| (0..d).map(|i| v[i] * mq[(i, j)]).sum()).collect();
    for i in 0..d {
        for j in 0..d {
            mq[(i, j)] -= 2.0 * v[i] * vt[j] / vv;
        }
    }
    mq
}

fn reflect_vec(x: &[C64], v: &[f64], vv: f64) -> Vec<C64> {
    let dot: C64 = x.iter().zip(v).map(|(a, b)| a * b).sum();
    x.iter().zip(v).map(|(a, b)| a - dot * (2.0 * b / vv)).collect()
}

fn orthonormalize(xs: &mut [Vec<C64>]) {
    for j in 0..xs.len() {
        for _ in 0..2 {
            for i in 0..j {
                let dot: C64 = xs[i].iter().zip(&xs[j]).map(|(a, b)| a.conj() * b).sum();
                let prev = xs[i].clone();
                xs[j].iter_mut().zip(&prev).for_each(|(b, a)| *b -= dot * a);
            }
        }
        let nrm = xs[j].iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        xs[j].iter_mut().for_each(|c| *c /= nrm);
    }
}

/// Newton correction of a near-null basis `xs` of `M(tau)` through the bordered matrix
/// `[[M, X], [X^H, 0]]`, which stays well conditioned when `M` is singular. Plain LU on `M`
/// stalls near `eps ||K||`, above the residual tolerance on fine grids.
fn bordered_correct(pencil: &QuadraticPencil, tau: C64, xs: &mut [Vec<C64>]) {
    let d = pencil.dim();
    let m = xs.len();
    let mt = pencil.matrix_at(tau);
    for _ in 0..2 {
        let b = Mat::from_fn(d + m, d + m, |i, j| match (i < d, j < d) {
            (true, true) => mt[(i, j)],
            (true, false) => xs[j - d][i],
            (false, true) => xs[i - d][j].conj(),
            (false, false) => C64::new(0.0, 0.0),
        });
        let lu = b.partial_piv_lu();
        let rhs = Mat::from_fn(d + m, m, |i, j| {
            if i < d {
                -(0..d).map(|q| mt[(i, q)] * xs[j][q]).sum::<C64>()
            } else {
                C64::new(0.0, 0.0)
            }
        });
        let sol = lu.solve(&rhs);
        for (j, x) in xs.iter_mut().enumerate() {
            for i in 0..d {
                x[i] += sol[(i, j)];
            }
        }
        orthonormalize(xs);
    }
}

/// Two shifted inverse-iteration steps on `M(tau)` applied to a block of vectors.
fn inverse_iterate(pencil: &QuadraticPencil, tau: C64, xs: &mut [Vec<C64>]) {
    let d = pencil.dim();
    let shift = C64::new(1e-9, 1e-9) * (1.0 + tau.norm());
    let lu = pencil.matrix_at(tau + shift).partial_piv_lu();
    for _ in 0..2 {
        let b = Mat::from_fn(d, xs.len(), |i, j| xs[j][i]);
        let x = lu.solve(&b);
        for (j, v) in xs.iter_mut().enumerate() {
            for i in 0..d {
                v[i] = x[(i, j)];
            }
        }
        orthonormalize(xs);
    }
}

/// Repairs eigenvectors that fail the residual test. The dense eigensolver loses accuracy on
/// near-degenerate clusters (symmetric geometries); their eigenspace is recomputed as a block.
fn refine_candidates(pencil: &QuadraticPencil, cands: &mut [(C64, Vec<C64>)]) {
    let bad: Vec<usize> =
        (0..cands.len()).filter(|&i| pencil.residual(cands[i].0, &cands[i].1) > RESIDUAL_TOL).collect();
    let mut done = vec![false; cands.len()];
    for &i in &bad {
        if done[i] {
            continue;
        }
        let ti = cands[i].0;
        let cluster: Vec<usize> = (0..cands.len())
            .filter(|&j| (cands[j].0 - ti).norm() < 1e-6 * (1.0 + ti.norm()))
            .collect();
        let center = cluster.iter().map(|&j| cands[j].0).sum::<C64>() / cluster.len() as f64;
        let mut xs: Vec<Vec<C64>> = cluster.iter().map(|&j| cands[j].1.clone()).collect();
        inverse_iterate(pencil, center, &mut xs);
        bordered_correct(pencil, center, &mut xs);
        for (&j, x) in cluster.iter().zip(xs) {
            cands[j].1 = x;
            done[j] = true;
        }
        for &j in &cluster {
            if pencil.residual(cands[j].0, &cands[j].1) > RESIDUAL_TOL {
                let mut one = vec![cands[j].1.clone()];
                bordered_correct(pencil, cands[j].0, &mut one);
                cands[j].1 = one.pop().unwrap();
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eigenpair {
    pub tau: C64,
    /// Eigenmode on the position grid (x-major), unit `l2` norm.
    #[serde(skip)]
    pub u: Vec<C64>,
    pub residual: f64,
    /// Exceptional eigenvalue carried by the constant mode.
    pub zero_mode: bool,
}

impl Eigenpair {
    /// `z = (hbar tau)^2 / 2`.
    pub fn z(&self, hbar: f64) -> C64 {
        semiclassical_z(self.tau, hbar)
    }

    /// `beta = Im z / hbar`.
    pub fn beta(&self, hbar: f64) -> f64 {
        self.z(hbar).im / hbar
    }

    /// Half-density form `exp(phi) u`, renormalized: the eigenvector of the symmetrized
    /// operator.
    pub fn half_density(&self, phi: &[f64]) -> Vec<C64> {
        let v: Vec<C64> = self.u.iter().zip(phi).map(|(c, p)| c * p.exp()).collect();
        let nrm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        v.into_iter().map(|c| c / nrm).collect()
    }
}

pub fn semiclassical_z(tau: C64, hbar: f64) -> C64 {
    let t = tau * hbar;
    t * t / 2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumResult {
    /// Sorted by `Re tau`, then `Im tau`.
    pub pairs: Vec<Eigenpair>,
    /// Window radius: pairs satisfy `|tau| <= window`.
    pub window: f64,
    pub n: usize,
    pub l: f64,
    pub damping_zero: bool,
    pub damping_mean: f64,
    /// Eigenpairs in the window dropped for exceeding the residual tolerance.
    pub rejected: usize,
}

/// Default resolved window `(2 pi / L) N / 4`.
pub fn resolved_window(n: usize, l: f64) -> f64 {
    TAU / l * (n / 4) as f64
}

/// Dense eigensolve of the pencil; keeps `|tau| <= window (1 + 1e-9)`.
pub fn solve_spectrum(pencil: &QuadraticPencil, window: f64) -> Result<SpectrumResult> {
    let d = pencil.dim();
    let om = pencil.omega();
    let damping_zero = pencil.a.iter().all(|&x| x == 0.0);
    let a_mat = Mat::from_fn(d, d, |i, j| if i == j { pencil.a[i] } else { 0.0 });
    let (k_t, a_t, refl) = if pencil.constant_kernel {
        let (v, vv) = householder_to_ones(d);
        (reflect_both(&pencil.k, &v, vv), reflect_both(&a_mat, &v, vv), Some((v, vv)))
    } else {
        (pencil.k.clone(), a_mat, None)
    };
    let mut c = real_companion(&k_t, &a_t, om);
    let mut deflated: Vec<usize> = Vec::new();
    if pencil.constant_kernel {
        // K~ e_0 = 0 exactly in exact arithmetic; enforce it
        for i in 0..d {
            c[(d + i, 0)] = 0.0;
        }
        deflated.push(0);
        if damping_zero {
            deflated.push(d);
        }
    }
    let keep: Vec<usize> = (0..2 * d).filter(|i| !deflated.contains(i)).collect();
    let reduced = Mat::from_fn(keep.len(), keep.len(), |i, j| c[(keep[i], keep[j])]);
    let eig = reduced.eigen().map_err(|e| Error::Linalg(format!("eigensolver failed: {e:?}")))?;
    let s = eig.S();
    let vecs = eig.U();
    let limit = window * (1.0 + 1e-9);
    let mut pairs = Vec::new();
    let mut rejected = 0;
    let zero = C64::new(0.0, 0.0);
    let mut cands: Vec<(C64, Vec<C64>)> = Vec::new();
    for col in 0..keep.len() {
        let sigma = s[col];
        let tau = I * sigma;
        // conjugate partners (Re tau < 0) are rebuilt from Re tau > 0
        if sigma.im > 0.0 || tau.norm() > limit {
            continue;
        }
        let mut full = vec![zero; 2 * d];
        for (i, &kidx) in keep.iter().enumerate() {
            full[kidx] = vecs[(i, col)];
        }
        if sigma.norm() > 0.0 {
            for &dfl in deflated.iter().rev() {
                let mut acc = zero;
                for j in 0..2 * d {
                    if j != dfl {
                        acc += full[j] * c[(dfl, j)];
                    }
                }
                full[dfl] = acc / sigma;
            }
        }
        let ut: Vec<C64> = full[..d].to_vec();
        let u = match &refl {
            Some((v, vv)) => reflect_vec(&ut, v, *vv),
            None => ut,
        };
        let nrm = u.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if nrm == 0.0 {
            rejected += 1;
            continue;
        }
        cands.push((tau, u.into_iter().map(|c| c / nrm).collect::<Vec<C64>>()));
    }
    refine_candidates(pencil, &mut cands);
    for (tau, u) in cands {
        let residual = pencil.residual(tau, &u);
        if residual > RESIDUAL_TOL {
            rejected += if tau.re.abs() > 0.0 { 2 } else { 1 };
            continue;
        }
        if tau.re != 0.0 {
            let um: Vec<C64> = u.iter().map(|c| c.conj()).collect();
            let tm = -tau.conj();
            pairs.push(Eigenpair { tau: tm, residual: pencil.residual(tm, &um), u: um, zero_mode: false });
        }
        pairs.push(Eigenpair { tau, u, residual, zero_mode: false });
    }
    if pencil.constant_kernel {
        let u = vec![C64::new(1.0 / (d as f64).sqrt(), 0.0); d];
        let copies = if damping_zero { 2 } else { 1 };
        for _ in 0..copies {
            pairs.push(Eigenpair { tau: zero, u: u.clone(), residual: pencil.residual(zero, &u), zero_mode: true });
        }
        if !damping_zero {
            // the eigenvalue continuing the constant mode, tau = -2 i <a> for constant a
            let target = -2.0 * I * pencil.damping_mean;
            if let Some(p) = pairs
                .iter_mut()
                .filter(|p| !p.zero_mode && p.tau.re.abs() < 1e-8)
                .min_by(|a, b| (a.tau - target).norm().partial_cmp(&(b.tau - target).norm()).unwrap())
            {
                if (p.tau - target).norm() < 1e-6 * (1.0 + target.norm()) {
                    p.zero_mode = true;
                }
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.tau.re.partial_cmp(&b.tau.re).unwrap().then(a.tau.im.partial_cmp(&b.tau.im).unwrap())
    });
    Ok(SpectrumResult {
        pairs,
        window,
        n: pencil.n,
        l: pencil.l,
        damping_zero,
        damping_mean: pencil.damping_mean,
        rejected,
    })
}

impl SpectrumResult {
    pub fn taus(&self) -> Vec<C64> {
        self.pairs.iter().map(|p| p.tau).collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.pairs.iter().map(|p| p.residual).fold(0.0, f64::max)
    }

    pub fn max_imag(&self) -> f64 {
        self.pairs.iter().map(|p| p.tau.im).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest distance from each `tau` to the nearest unused `-conj(tau')`, with
    /// eigenvalues close to the window edge excluded (their mirror may fall outside).
    pub fn symmetry_defect(&self) -> f64 {
        let taus = self.taus();
        let mirrored: Vec<C64> = taus.iter().map(|t| -t.conj()).collect();
        match_defect(&taus, &mirrored, self.window * (1.0 - 1e-6))
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Row {
            re: f64,
            im: f64,
            residual: f64,
            zero_mode: bool,
        }
        #[derive(Serialize)]
        struct Out<'a> {
            window: f64,
            n: usize,
            l: f64,
            tau: Vec<Row>,
            rejected: &'a usize,
        }
        let out = Out {
            window: self.window,
            n: self.n,
            l: self.l,
            tau: self
                .pairs
                .iter()
                .map(|p| Row { re: p.tau.re, im: p.tau.im, residual: p.residual, zero_mode: p.zero_mode })
                .collect(),
            rejected: &self.rejected,
        };
        serde_json::to_string_pretty(&out).expect("spectrum serializes")
    }

    /// CSV with header `re,im,residual`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("re,im,residual\n");
        for p in &self.pairs {
            s.push_str(&format!("{:.17e},{:.17e},{:.6e}\n", p.tau.re, p.tau.im, p.residual));
        }
        s
    }
}

/// Greedy matching distance between two multisets restricted to `|x| <= inner`.
pub fn match_defect(a: &[C64], b: &[C64], inner: f64) -> f64 {
    let mut used = vec![false; b.len()];
    let mut worst = 0.0f64;
    for x in a.iter().filter(|x| x.norm() <= inner) {
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, y) in b.iter().enumerate() {
            if !used[j] {
                let d = (x - y).norm();
                if d < best.0 {
                    best = (d, j);
                }
            }
        }
        if best.1 == usize::MAX {
            return f64::INFINITY;
        }
        used[best.1] = true;
        worst = worst.max(best.0);
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StripReport {
    pub r0: f64,
    pub tol: f64,
    pub a_minus: f64,
    pub a_plus: f64,
    pub count: usize,
    pub inside: usize,
    pub fraction: f64,
    pub min_imag: f64,
    pub max_imag: f64,
}

/// Fraction of eigenvalues with `Re tau >= r0` whose imaginary part lies in
/// `[A- - tol, A+ + tol]`.
pub fn strip_check(result: &SpectrumResult, a_minus: f64, a_plus: f64, tol: f64, r0: f64) -> StripReport {
    let sel: Vec<f64> = result.pairs.iter().filter(|p| p.tau.re >= r0).map(|p| p.tau.im).collect();
    let inside = sel.iter().filter(|&&im| im >= a_minus - tol && im <= a_plus + tol).count();
    StripReport {
        r0,
        tol,
        a_minus,
        a_plus,
        count: sel.len(),
        inside,
        fraction: if sel.is_empty() { 1.0 } else { inside as f64 / sel.len() as f64 },
        min_imag: sel.iter().copied().fold(f64::INFINITY, f64::min),
        max_imag: sel.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolventProbe {
    pub tau: C64,
    /// `1 / sigma_min`, infinite when singular.
    pub norm: f64,
    pub sigma_min: f64,
    pub singular: bool,
}

/// `||(K - 2 i a tau - tau^2)^{-1}||` from the smallest singular value.
pub fn resolvent_norm(pencil: &QuadraticPencil, tau: C64) -> Result<ResolventProbe> {
    let m = pencil.matrix_at(tau);
    let sv = m.singular_values().map_err(|e| Error::Linalg(format!("{e:?}")))?;
    let sigma_min = sv[sv.len() - 1];
    let singular = sigma_min < SINGULAR_TOL;
    Ok(ResolventProbe { tau, norm: if singular { f64::INFINITY } else { 1.0 / sigma_min }, sigma_min, singular })
}

/// Resolvent probes along `Im tau = -1 / (c log(Re tau))`.
pub fn resolvent_curve_scan(pencil: &QuadraticPencil, c: f64, re_values: &[f64]) -> Result<Vec<ResolventProbe>> {
    re_values
        .iter()
        .map(|&re| resolvent_norm(pencil, C64::new(re, -1.0 / (c * re.ln()))))
        .collect()
}

/// `min (-Im tau) log(1 + |tau|)` over nonzero, non-exceptional eigenvalues.
pub fn gap_scan(result: &SpectrumResult) -> Result<f64> {
    if result.damping_zero {
        return Err(Error::Precondition("gap scan needs a nonzero damping".into()));
    }
    let v = result
        .pairs
        .iter()
        .filter(|p| !p.zero_mode && p.tau.norm() > 1e-8)
        .map(|p| -p.tau.im * (1.0 + p.tau.norm()).ln())
        .fold(f64::INFINITY, f64::min);
    if v.is_infinite() {
        return Err(Error::EmptyWindow);
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeylReport {
    pub lambda1: f64,
    pub lambda2: f64,
    pub count: usize,
    pub weyl: f64,
    pub relative_deviation: f64,
}

/// Counting function on `Re tau in [l1, l2]`, `Re tau > 0`, against `(Area_g / 4 pi)(l2^2 - l1^2)`.
pub fn weyl_count(result: &SpectrumResult, area: f64, l1: f64, l2: f64) -> WeylReport {
    if l2 <= l1 {
        return WeylReport { lambda1: l1, lambda2: l2, count: 0, weyl: 0.0, relative_deviation: 0.0 };
    }
    let count = result.pairs.iter().filter(|p| p.tau.re > 0.0 && p.tau.re >= l1 && p.tau.re <= l2).count();
    let weyl = area / (4.0 * PI) * (l2 * l2 - l1 * l1);
    WeylReport { lambda1: l1, lambda2: l2, count, weyl, relative_deviation: (count as f64 - weyl).abs() / weyl }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    /// `-(int a dA_g) / Area_g`.
    pub predicted_mean: f64,
}

impl Histogram {
    /// CSV with header `lo,hi,count`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:.10e},{:.10e},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }
}

/// Histogram of `Im tau` over `Re tau >= re_min`.
pub fn imaginary_part_histogram(result: &SpectrumResult, re_min: f64, bins: usize) -> Histogram {
    let ims: Vec<f64> = result.pairs.iter().filter(|p| p.tau.re >= re_min).map(|p| p.tau.im).collect();
    let bins = bins.max(1);
    let predicted_mean = -result.damping_mean;
    if ims.is_empty() {
        return Histogram { edges: vec![0.0, 0.0], counts: vec![0], mean: f64::NAN, predicted_mean };
    }
    let lo = ims.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5e-3, hi + 0.5e-3) } else { (lo, hi) };
    let w = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + w * i as f64).collect();
    let mut counts = vec![0; bins];
    for x in &ims {
        let b = (((x - lo) / w) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let mean = ims.iter().sum::<f64>() / ims.len() as f64;
    Histogram { edges, counts, mean, predicted_mean }
}

/// Closed-form flat-torus spectrum `tau = -i c +- sqrt(lambda_k - c^2)` within `window`.
pub fn flat_spectrum(n: usize, l: f64, c: f64, window: f64) -> Vec<C64> {
    let md = modes(n);
    let s = TAU / l;
    let mut out = Vec::new();
    for &kx in &md {
        for &ky in &md {
            let lam = s * s * (kx * kx + ky * ky) as f64;
            if kx == 0 && ky == 0 {
                out.push(C64::new(0.0, 0.0));
                out.push(C64::new(0.0, -2.0 * c));
                continue;
            }
            let r = C64::new(lam - c * c, 0.0).sqrt();
            out.push(-I * c + r);
            out.push(-I * c - r);
        }
    }
    out.retain(|t| t.norm() <= window * (1.0 + 1e-9));
    out
}
