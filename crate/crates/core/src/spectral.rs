//! Trigonometric polynomials on the torus `[0, L)^d` and the Fourier
//! multiplier form of the limit resolvent and semigroup for translation-
//! invariant kernels.
//!
//! Coefficients are stored in FFT order on an `m^d` grid (axis 0 fastest):
//! index `i` on an axis is the frequency `i` for `i <= m/2` and `i - m`
//! otherwise. A function is `Re Σ c_n e^{i ξ_n·x}` with `ξ_n = 2π n / L`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{domain, Result};
use crate::kernels::JumpKernel;
use crate::lattice::{LatticeWindow, Topology, MAX_DIM};
use crate::transfer::{AnalyticFunction, GridFunction};

/// Unnormalised d-dimensional DFT of an `n^d` array (axis 0 fastest);
/// `inverse` flips the sign of the exponent.
pub(crate) fn fft_nd(data: &mut [Complex64], n: usize, d: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let total = n.pow(d as u32);
    let mut stride = 1usize;
    for _ in 0..d {
        for start in 0..total {
            // Visit each line once: its first element has axis index 0.
            if (start / stride) % n != 0 {
                continue;
            }
            for (i, v) in line.iter_mut().enumerate() {
                *v = data[start + i * stride];
            }
            fft.process(&mut line);
            for (i, v) in line.iter().enumerate() {
                data[start + i * stride] = *v;
            }
        }
        stride *= n;
    }
}

fn signed(i: usize, m: usize) -> i64 {
    if 2 * i <= m {
        i as i64
    } else {
        i as i64 - m as i64
    }
}

fn sinc(t: f64) -> f64 {
    if t.abs() < 1e-8 {
        1.0 - t * t / 6.0
    } else {
        t.sin() / t
    }
}

/// `Re Σ c_n e^{i ξ_n·x}` on the torus of side `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFunction {
    d: usize,
    side_length: f64,
    m: usize,
    coeffs: Vec<Complex64>,
}

impl SpectralFunction {
    pub fn new(d: usize, side_length: f64, m: usize, coeffs: Vec<Complex64>) -> Result<Self> {
        if d == 0 || d > MAX_DIM {
            return domain("dimension must be in 1..=3");
        }
        if m < 2 || coeffs.len() != m.pow(d as u32) {
            return domain("coefficient array must have m^d entries with m >= 2");
        }
        if !(side_length > 0.0) {
            return domain("side length must be positive");
        }
        Ok(Self { d, side_length, m, coeffs })
    }

    /// Coefficients from `m^d` equispaced samples of `f` on `[0, L)^d`: the
    /// trigonometric interpolant. Accurate for smooth periodic `f`.
    pub fn from_analytic(f: &AnalyticFunction, side_length: f64, m: usize) -> Result<Self> {
        let d = f.d();
        let h = side_length / m as f64;
        let total = m.pow(d as u32);
        let mut data: Vec<Complex64> = (0..total)
            .map(|idx| {
                let mut x = [0.0; MAX_DIM];
                let mut rem = idx;
                for v in x.iter_mut().take(d) {
                    *v = (rem % m) as f64 * h;
                    rem /= m;
                }
                Complex64::new(f.eval(&x[..d]), 0.0)
            })
            .collect();
        fft_nd(&mut data, m, d, false);
        let scale = 1.0 / total as f64;
        data.iter_mut().for_each(|c| *c *= scale);
        Self::new(d, side_length, m, data)
    }

    pub fn constant(d: usize, side_length: f64, m: usize, c: f64) -> Result<Self> {
        let mut coeffs = vec![Complex64::new(0.0, 0.0); m.pow(d as u32)];
        coeffs[0] = Complex64::new(c, 0.0);
        Self::new(d, side_length, m, coeffs)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    pub fn modes_per_axis(&self) -> usize {
        self.m
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    /// Signed integer frequency of coefficient `idx`.
    pub fn frequency(&self, idx: usize) -> [i64; MAX_DIM] {
        let mut n = [0i64; MAX_DIM];
        let mut rem = idx;
        for v in n.iter_mut().take(self.d) {
            *v = signed(rem % self.m, self.m);
            rem /= self.m;
        }
        n
    }

    /// `|ξ_n|` of coefficient `idx`.
    pub fn frequency_norm(&self, idx: usize) -> f64 {
        let n = self.frequency(idx);
        let s: f64 = n.iter().map(|&v| (v * v) as f64).sum();
        2.0 * PI * s.sqrt() / self.side_length
    }

    pub fn mean(&self) -> f64 {
        self.coeffs[0].re
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let w = 2.0 * PI / self.side_length;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(idx, c)| {
                let n = self.frequency(idx);
                let phase: f64 = (0..self.d).map(|a| n[a] as f64 * w * x[a]).sum();
                c.re * phase.cos() - c.im * phase.sin()
            })
            .sum()
    }

    /// `‖f‖₂²` over the torus (Parseval).
    pub fn norm_sq(&self) -> f64 {
        let vol = self.side_length.powi(self.d as i32);
        vol * self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>()
    }

    /// Multiply coefficient `n` by `mult(|ξ_n|)`.
    pub fn apply_radial_multiplier(&self, mult: impl Fn(usize) -> f64) -> SpectralFunction {
        let coeffs = self.coeffs.iter().enumerate().map(|(i, c)| c * mult(i)).collect();
        SpectralFunction { d: self.d, side_length: self.side_length, m: self.m, coeffs }
    }

    /// Exact cell averages on a periodic window: each mode is multiplied by
    /// `Π sinc(π n_i / N)` and folded onto the `N^d` site grid.
    pub fn restrict(&self, w: &LatticeWindow) -> Result<GridFunction> {
        if w.topology() != Topology::Periodic || w.d() != self.d {
            return domain("spectral restriction needs a periodic window of the same dimension");
        }
        if (w.side_length() - self.side_length).abs() > 1e-12 * self.side_length {
            return domain("window and torus side lengths differ");
        }
        let n = w.n_per_axis();
        let d = self.d;
        let mut grid = vec![Complex64::new(0.0, 0.0); n.pow(d as u32)];
        for (idx, c) in self.coeffs.iter().enumerate() {
            let f = self.frequency(idx);
            let mut mult = 1.0;
            let mut slot = 0usize;
            let mut stride = 1usize;
            for a in 0..d {
                mult *= sinc(PI * f[a] as f64 / n as f64);
                slot += f[a].rem_euclid(n as i64) as usize * stride;
                stride *= n;
            }
            grid[slot] += c * mult;
        }
        fft_nd(&mut grid, n, d, true);
        GridFunction::new(*w, grid.iter().map(|c| c.re).collect())
    }

    /// `‖E_k u - f‖₂` without quadrature, from
    /// `‖u - π_k f‖²_k + ‖f‖² - ‖π_k f‖²_k`.
    pub fn distance_to_grid(&self, u: &GridFunction) -> Result<f64> {
        let p = self.restrict(u.window())?;
        let diff = u.lin_comb(1.0, &p, -1.0)?;
        let gap = (self.norm_sq() - p.norm().powi(2)).max(0.0);
        Ok((diff.norm().powi(2) + gap).sqrt())
    }
}

/// `ψ` on the dual lattice of the torus, with multiplier forms of the
/// resolvent `(λ + ψ)^{-1}` and the semigroup `e^{-tψ}`.
#[derive(Debug, Clone)]
pub struct SpectralOracle {
    d: usize,
    side_length: f64,
    m: usize,
    psi: Vec<f64>,
    psi_error: Vec<f64>,
}

impl SpectralOracle {
    /// `ψ` at every frequency of an `m^d` grid. Stable kernels use
    /// `ψ(ξ) = |ξ|^α ψ(e₁)`; other radial kernels one quadrature per
    /// distinct `|n|²`.
    pub fn new(kern: &JumpKernel, side_length: f64, m: usize) -> Result<Self> {
        let d = kern.d();
        if !kern.is_radial() {
            return Err(crate::error::JumpGridError::Unsupported(
                "spectral oracle needs a translation-invariant radial kernel".into(),
            ));
        }
        let proto = SpectralFunction::constant(d, side_length, m, 0.0)?;
        let total = m.pow(d as u32);
        let mut psi = vec![0.0; total];
        let mut err = vec![0.0; total];
        if let Some((alpha, _)) = kern.as_stable() {
            let unit = kern.psi_radial(1.0)?;
            for idx in 0..total {
                let s = proto.frequency_norm(idx);
                psi[idx] = unit.value * s.powf(alpha);
                err[idx] = unit.error * s.powf(alpha);
            }
        } else {
            let mut cache: std::collections::HashMap<i64, (f64, f64)> = std::collections::HashMap::new();
            for idx in 0..total {
                let n = proto.frequency(idx);
                let key: i64 = n.iter().map(|v| v * v).sum();
                let (v, e) = match cache.get(&key) {
                    Some(&p) => p,
                    None => {
                        let q = kern.psi_radial(proto.frequency_norm(idx))?;
                        cache.insert(key, (q.value, q.error));
                        (q.value, q.error)
                    }
                };
                psi[idx] = v;
                err[idx] = e;
            }
        }
        Ok(Self { d, side_length, m, psi, psi_error: err })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn side_length(&self) -> f64 {
        self.side_length
    }

    pub fn modes_per_axis(&self) -> usize {
        self.m
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    fn check(&self, f: &SpectralFunction) -> Result<()> {
        if f.d != self.d || f.m != self.m || (f.side_length - self.side_length).abs() > 1e-12 * self.side_length {
            return domain("function and oracle grids differ");
        }
        Ok(())
    }

    /// Coefficients of `f` on this oracle's grid.
    pub fn transform(&self, f: &AnalyticFunction) -> Result<SpectralFunction> {
        if f.d() != self.d {
            return domain("function and oracle dimensions differ");
        }
        SpectralFunction::from_analytic(f, self.side_length, self.m)
    }

    /// `G_λ f`.
    pub fn resolvent(&self, lambda: f64, f: &SpectralFunction) -> Result<SpectralFunction> {
        self.check(f)?;
        if !(lambda > 0.0) {
            return domain("lambda must be positive");
        }
        Ok(f.apply_radial_multiplier(|i| 1.0 / (lambda + self.psi[i])))
    }

    /// `T_t f`.
    pub fn semigroup(&self, t: f64, f: &SpectralFunction) -> Result<SpectralFunction> {
        self.check(f)?;
        if !(t >= 0.0) {
            return domain("time must be nonnegative");
        }
        Ok(f.apply_radial_multiplier(|i| (-t * self.psi[i]).exp()))
    }

    /// `(λ - A) f`, the inverse of [`Self::resolvent`].
    pub fn apply_shifted_generator(&self, lambda: f64, f: &SpectralFunction) -> Result<SpectralFunction> {
        self.check(f)?;
        Ok(f.apply_radial_multiplier(|i| lambda + self.psi[i]))
    }

    /// `ε(f, f) = L^d Σ ψ(ξ_n) |c_n|²`.
    pub fn energy(&self, f: &SpectralFunction) -> Result<f64> {
        self.check(f)?;
        let vol = self.side_length.powi(self.d as i32);
        Ok(vol * f.coeffs.iter().zip(&self.psi).map(|(c, p)| p * c.norm_sqr()).sum::<f64>())
    }

    /// Bound on the effect of `ψ` quadrature error on `‖G_λ f‖₂`:
    /// `‖f‖₂ · max δψ / λ²`.
    pub fn resolvent_error_bound(&self, lambda: f64, f: &SpectralFunction) -> f64 {
        let worst = self
            .psi_error
            .iter()
            .zip(&f.coeffs)
            .filter(|(_, c)| c.norm_sqr() > 0.0)
            .fold(0.0f64, |m, (e, _)| m.max(*e));
        f.norm_sq().sqrt() * worst / (lambda * lambda)
    }

    /// Bound on the effect of `ψ` quadrature error on `‖T_t f‖₂`: `t·max δψ·‖f‖₂`.
    pub fn semigroup_error_bound(&self, t: f64, f: &SpectralFunction) -> f64 {
        let worst = self
            .psi_error
            .iter()
            .zip(&f.coeffs)
            .filter(|(_, c)| c.norm_sqr() > 0.0)
            .fold(0.0f64, |m, (e, _)| m.max(*e));
        f.norm_sq().sqrt() * worst * t
    }

    /// Share of `‖f‖₂` carried by the outer half of the frequency box, a
    /// proxy for truncation of the mode grid.
    pub fn truncation_indicator(&self, f: &SpectralFunction) -> f64 {
        let vol = self.side_length.powi(self.d as i32);
        let outer: f64 = f
            .coeffs
            .iter()
            .enumerate()
            .filter(|(i, _)| f.frequency(*i).iter().any(|&n| 4 * n.unsigned_abs() as usize > self.m))
            .map(|(_, c)| c.norm_sqr())
            .sum();
        (vol * outer).sqrt()
    }
}
