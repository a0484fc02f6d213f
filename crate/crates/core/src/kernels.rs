//! Symmetric jump kernels `j(x, y)`, their characteristic exponents and
//! tail masses.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use crate::error::{domain, JumpGridError, Result};
use crate::quadrature::{adaptive, GaussLegendre, QuadResult};
use crate::rng::CounterRng;

type RadialFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type PairFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

const ABS_TOL: f64 = 1e-13;
const REL_TOL: f64 = 1e-12;
const MAX_SEGMENTS: usize = 4000;

/// Surface area of the unit sphere in `ℝ^d`.
pub fn sphere_area(d: usize) -> f64 {
    match d {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => {
            // 2 π^{d/2} / Γ(d/2) by recursion |S^{d-1}| = 2π/(d-2) |S^{d-3}|
            let mut a = if d % 2 == 0 { 2.0 * PI } else { 2.0 };
            let mut m = if d % 2 == 0 { 2 } else { 1 };
            while m < d {
                a *= 2.0 * PI / m as f64;
                m += 2;
            }
            a
        }
    }
}

/// Scale function `φ` of a φ-kernel `j(h) = φ(s) / (|h|^d φ(s|h|))`.
#[derive(Clone)]
pub enum PhiProfile {
    /// `φ(r) = r^exponent`.
    Power { exponent: f64 },
    /// Log-log linear interpolation through `(radii[i], values[i])`, with
    /// power-law extrapolation using the end slopes.
    Table { radii: Vec<f64>, values: Vec<f64> },
    /// Arbitrary increasing `φ` with `φ(r) ≍ r^near_index` at 0 and
    /// `≍ r^far_index` at infinity.
    Custom { f: RadialFn, near_index: f64, far_index: f64 },
}

impl fmt::Debug for PhiProfile {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhiProfile::Power { exponent } => write!(fm, "Power({exponent})"),
            PhiProfile::Table { radii, .. } => write!(fm, "Table({} points)", radii.len()),
            PhiProfile::Custom { near_index, far_index, .. } => {
                write!(fm, "Custom(near {near_index}, far {far_index})")
            }
        }
    }
}

impl PhiProfile {
    pub fn table(radii: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if radii.len() < 2 || radii.len() != values.len() {
            return domain("phi table needs at least two (radius, value) points of equal count");
        }
        if radii.windows(2).any(|w| w[1] <= w[0]) || radii[0] <= 0.0 {
            return domain("phi table radii must be positive and strictly increasing");
        }
        if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return domain("phi table values must be positive and finite");
        }
        Ok(PhiProfile::Table { radii, values })
    }

    pub fn eval(&self, r: f64) -> f64 {
        match self {
            PhiProfile::Power { exponent } => r.powf(*exponent),
            PhiProfile::Custom { f, .. } => f(r),
            PhiProfile::Table { radii, values } => {
                let n = radii.len();
                let lr = r.ln();
                let (i, j) = if r <= radii[0] {
                    (0, 1)
                } else if r >= radii[n - 1] {
                    (n - 2, n - 1)
                } else {
                    let j = radii.partition_point(|&x| x < r);
                    (j - 1, j)
                };
                let (x0, x1) = (radii[i].ln(), radii[j].ln());
                let (y0, y1) = (values[i].ln(), values[j].ln());
                (y0 + (y1 - y0) * (lr - x0) / (x1 - x0)).exp()
            }
        }
    }

    fn near_index(&self) -> f64 {
        match self {
            PhiProfile::Power { exponent } => *exponent,
            PhiProfile::Custom { near_index, .. } => *near_index,
            PhiProfile::Table { radii, values } => {
                (values[1] / values[0]).ln() / (radii[1] / radii[0]).ln()
            }
        }
    }

    fn far_index(&self) -> f64 {
        match self {
            PhiProfile::Power { exponent } => *exponent,
            PhiProfile::Custom { far_index, .. } => *far_index,
            PhiProfile::Table { radii, values } => {
                let n = radii.len();
                (values[n - 1] / values[n - 2]).ln() / (radii[n - 1] / radii[n - 2]).ln()
            }
        }
    }

    /// `φ(k) / φ(k r)`, whose large-`k` limit is `1/ψ(r)`.
    pub fn scaling_ratio(&self, k: f64, r: f64) -> f64 {
        match self {
            // Exact cancellation of the common factor k^exponent.
            PhiProfile::Power { exponent } => r.powf(-exponent),
            _ => self.eval(k) / self.eval(k * r),
        }
    }
}

#[derive(Clone)]
pub enum KernelKind {
    /// `A |x - y|^{-d-α}`.
    Stable { alpha: f64, amp: f64 },
    /// `φ(s) / (|x - y|^d φ(s |x - y|))` with scale `s`.
    Phi { profile: PhiProfile, scale: f64 },
    /// Translation-invariant radial profile `J(|x - y|)` behaving like
    /// `r^{-d-near_index}` at 0 and `r^{-d-far_index}` at infinity.
    Radial { profile: RadialFn, near_index: f64, far_index: f64 },
    /// Arbitrary symmetric function of two points.
    General { f: PairFn },
}

impl fmt::Debug for KernelKind {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelKind::Stable { alpha, amp } => write!(fm, "Stable(alpha={alpha}, amp={amp})"),
            KernelKind::Phi { profile, scale } => write!(fm, "Phi({profile:?}, scale={scale})"),
            KernelKind::Radial { near_index, far_index, .. } => {
                write!(fm, "Radial(near {near_index}, far {far_index})")
            }
            KernelKind::General { .. } => write!(fm, "General"),
        }
    }
}

/// A symmetric jump kernel on `ℝ^d`.
#[derive(Clone, Debug)]
pub struct JumpKernel {
    d: usize,
    kind: KernelKind,
}

/// Constants of the two-sided bounds checked by [`JumpKernel::verify_bounds`]:
/// `κ1 r^{-d-β} <= j <= κ2 r^{-d-α}` for `r < 1` and `j <= κ0` for `r >= 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundParams {
    pub kappa0: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    /// `κ1 r^{-d-β} <= j` failed at `r < 1`.
    Lower,
    /// `j <= κ2 r^{-d-α}` failed at `r < 1`.
    Upper,
    /// `j <= κ0` failed at `r >= 1`.
    Far,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundViolation {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub value: f64,
    pub bound: f64,
    pub kind: BoundKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundsReport {
    pub samples: usize,
    pub violations: Vec<BoundViolation>,
}

/// Characteristic exponent tabulated at a list of frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct CharExponent {
    pub freqs: Vec<Vec<f64>>,
    pub psi: Vec<f64>,
    pub quadrature_error: Vec<f64>,
}

impl JumpKernel {
    pub fn stable(d: usize, alpha: f64, amp: f64) -> Result<Self> {
        check_dim(d)?;
        if !(alpha > 0.0 && alpha < 2.0) {
            return domain(format!("stable index alpha must lie in (0, 2), got {alpha}"));
        }
        if !(amp > 0.0 && amp.is_finite()) {
            return domain(format!("kernel amplitude must be positive, got {amp}"));
        }
        Ok(Self { d, kind: KernelKind::Stable { alpha, amp } })
    }

    pub fn phi(d: usize, profile: PhiProfile, scale: f64) -> Result<Self> {
        check_dim(d)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return domain(format!("phi kernel scale must be positive, got {scale}"));
        }
        let (a0, a1) = (profile.near_index(), profile.far_index());
        if !(a0 > 0.0 && a0 < 2.0) || a1 <= 0.0 {
            return domain(format!(
                "phi profile must grow like r^a with 0 < a < 2 near 0 and a > 0 at infinity, got {a0}, {a1}"
            ));
        }
        Ok(Self { d, kind: KernelKind::Phi { profile, scale } })
    }

    pub fn radial<F>(d: usize, near_index: f64, far_index: f64, profile: F) -> Result<Self>
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        check_dim(d)?;
        if !(near_index < 2.0) {
            return domain(format!("near-origin index must be below 2, got {near_index}"));
        }
        Ok(Self { d, kind: KernelKind::Radial { profile: Arc::new(profile), near_index, far_index } })
    }

    pub fn general<F>(d: usize, f: F) -> Result<Self>
    where
        F: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        check_dim(d)?;
        Ok(Self { d, kind: KernelKind::General { f: Arc::new(f) } })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn kind(&self) -> &KernelKind {
        &self.kind
    }

    /// `(α, A)` when the kernel is exactly `A |h|^{-d-α}`.
    pub fn as_stable(&self) -> Option<(f64, f64)> {
        match &self.kind {
            KernelKind::Stable { alpha, amp } => Some((*alpha, *amp)),
            KernelKind::Phi { profile: PhiProfile::Power { exponent }, .. } => Some((*exponent, 1.0)),
            _ => None,
        }
    }

    pub fn is_radial(&self) -> bool {
        !matches!(self.kind, KernelKind::General { .. })
    }

    /// Exponent `a` with `J(r) ≍ r^{-d-a}` as `r → 0`.
    pub fn near_index(&self) -> f64 {
        match &self.kind {
            KernelKind::Stable { alpha, .. } => *alpha,
            KernelKind::Phi { profile, .. } => profile.near_index(),
            KernelKind::Radial { near_index, .. } => *near_index,
            KernelKind::General { .. } => 2.0 - 1e-9,
        }
    }

    /// Exponent `a` with `J(r) ≍ r^{-d-a}` as `r → ∞`.
    pub fn far_index(&self) -> f64 {
        match &self.kind {
            KernelKind::Stable { alpha, .. } => *alpha,
            KernelKind::Phi { profile, .. } => profile.far_index(),
            KernelKind::Radial { far_index, .. } => *far_index,
            KernelKind::General { .. } => 0.0,
        }
    }

    /// Radial profile `J(r)`; for general kernels the value at `(0, r e₁)`.
    #[inline]
    pub fn radial_value(&self, r: f64) -> f64 {
        match &self.kind {
            KernelKind::Stable { alpha, amp } => amp * r.powf(-(self.d as f64) - alpha),
            KernelKind::Phi { profile, scale } => {
                profile.scaling_ratio(*scale, r) / r.powi(self.d as i32)
            }
            KernelKind::Radial { profile, .. } => profile(r),
            KernelKind::General { f } => {
                let x = vec![0.0; self.d];
                let mut y = vec![0.0; self.d];
                y[0] = r;
                f(&x, &y)
            }
        }
    }

    /// `j(x, y)` without the diagonal check.
    #[inline]
    pub fn value(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.kind {
            KernelKind::General { f } => f(x, y),
            _ => {
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                self.radial_value(r2.sqrt())
            }
        }
    }

    /// `j(x, y)`; the kernel is singular on the diagonal.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != self.d || y.len() != self.d {
            return domain(format!("kernel is {}-dimensional", self.d));
        }
        if x == y {
            return domain("kernel is singular on the diagonal x = y");
        }
        Ok(self.value(x, y))
    }

    /// Monte-Carlo check of the two-sided bounds at `samples` random pairs.
    pub fn verify_bounds(&self, p: BoundParams, samples: usize, seed: u64) -> BoundsReport {
        let mut rng = CounterRng::with_stream(seed, 0xB0);
        let d = self.d as f64;
        let slack = 1e-12;
        let mut violations = Vec::new();
        for i in 0..samples {
            let x: Vec<f64> = (0..self.d).map(|_| 10.0 * rng.next_f64() - 5.0).collect();
            let mut dir: Vec<f64> = (0..self.d).map(|_| rng.next_normal()).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            dir.iter_mut().for_each(|v| *v /= norm);
            let near = i % 2 == 0;
            let u = rng.next_open01();
            let r = if near { 1e-3f64.powf(u) * (1.0 - 1e-12) } else { 1e3f64.powf(1.0 - u) };
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + r * b).collect();
            let rr = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let v = self.value(&x, &y);
            let mut push = |bound: f64, kind: BoundKind| {
                violations.push(BoundViolation { x: x.clone(), y: y.clone(), value: v, bound, kind })
            };
            if rr < 1.0 {
                let lo = p.kappa1 * rr.powf(-d - p.beta);
                let hi = p.kappa2 * rr.powf(-d - p.alpha);
                if v < lo * (1.0 - slack) {
                    push(lo, BoundKind::Lower);
                }
                if v > hi * (1.0 + slack) {
                    push(hi, BoundKind::Upper);
                }
            } else if v > p.kappa0 * (1.0 + slack) {
                push(p.kappa0, BoundKind::Far);
            }
        }
        BoundsReport { samples, violations }
    }

    fn require_radial(&self) -> Result<()> {
        if self.is_radial() {
            Ok(())
        } else {
            Err(JumpGridError::Unsupported("operation needs a radial kernel".into()))
        }
    }

    /// `|S^{d-1}| ∫_a^b J(r) r^{d-1} dr` for `0 < a < b`.
    pub fn annulus_mass(&self, a: f64, b: f64) -> Result<QuadResult> {
        self.require_radial()?;
        if !(a > 0.0 && b >= a) {
            return domain("annulus needs 0 < a <= b");
        }
        let dm1 = self.d as i32 - 1;
        let r = adaptive(|r| self.radial_value(r) * r.powi(dm1), a, b, ABS_TOL, REL_TOL, MAX_SEGMENTS);
        let s = sphere_area(self.d);
        Ok(QuadResult { value: s * r.value, error: s * r.error })
    }

    /// `∫_{|h| > R} j(h) dh`.
    pub fn tail_mass(&self, radius: f64) -> Result<f64> {
        Ok(self.tail_mass_quad(radius)?.value)
    }

    /// Tail mass with a quadrature error estimate (zero for closed forms).
    pub fn tail_mass_quad(&self, radius: f64) -> Result<QuadResult> {
        self.require_radial()?;
        if !(radius > 0.0) || radius.is_nan() {
            return domain(format!("tail radius must be positive, got {radius}"));
        }
        if radius.is_infinite() {
            return Ok(QuadResult { value: 0.0, error: 0.0 });
        }
        let a = self.far_index();
        if a <= 0.0 {
            return domain(format!("kernel tail is not integrable (far index {a})"));
        }
        if let Some((alpha, amp)) = self.as_stable() {
            let v = sphere_area(self.d) * amp * radius.powf(-alpha) / alpha;
            return Ok(QuadResult { value: v, error: 0.0 });
        }
        // r = R / t, t = w^q: the integrand in w is ~ w near 0.
        let q = 2.0 / a;
        let dm1 = self.d as i32 - 1;
        let g = |w: f64| {
            if w <= 0.0 {
                return 0.0;
            }
            let t = w.powf(q);
            let r = radius / t;
            self.radial_value(r) * r.powi(dm1) * radius / (t * t) * q * t / w
        };
        let res = adaptive(g, 0.0, 1.0, ABS_TOL, REL_TOL, MAX_SEGMENTS);
        let s = sphere_area(self.d);
        Ok(QuadResult { value: s * res.value, error: s * res.error })
    }

    /// `∫_{|h| < R} |h|² j(h) dh`.
    pub fn second_moment_within(&self, radius: f64) -> Result<QuadResult> {
        self.require_radial()?;
        if !(radius > 0.0) {
            return domain("radius must be positive");
        }
        let d = self.d as i32;
        let res = near_origin_integral(|r| self.radial_value(r) * r.powi(d + 1), radius, 1.0 - self.near_index());
        let s = sphere_area(self.d);
        Ok(QuadResult { value: s * res.value, error: s * res.error })
    }

    /// `sup_x ∫ (|x - y|² ∧ 1) j(x, y) dy` for translation-invariant kernels.
    pub fn a1_continuum_bound(&self) -> Result<f64> {
        Ok(self.second_moment_within(1.0)?.value + self.tail_mass(1.0)?)
    }

    /// `ψ` at a frequency of Euclidean norm `s`, with an error estimate.
    pub fn psi_radial(&self, s: f64) -> Result<QuadResult> {
        self.require_radial()?;
        if s == 0.0 {
            return Ok(QuadResult { value: 0.0, error: 0.0 });
        }
        let s = s.abs();
        let d = self.d;
        let dm1 = d as i32 - 1;
        // In u = s r: ψ = ∫ J(u/s) (u/s)^{d-1} S_d(u) du / s with
        // S_d(u) = |S^{d-1}| - osc_d(u).
        let amp = |u: f64| {
            let r = u / s;
            self.radial_value(r) * r.powi(dm1) / s
        };
        let u1 = 8.0 * PI;
        let near = near_origin_integral(|u| amp(u) * angular_gap(d, u), u1, 1.0 - self.near_index());
        let far_const = self.tail_mass_quad(u1 / s)?;
        let far_osc = oscillatory_tail(|u| amp(u) * osc(d, u), u1);
        Ok(QuadResult {
            value: near.value + far_const.value - far_osc.value,
            error: near.error + far_const.error + far_osc.error,
        })
    }

    /// Characteristic exponent `ψ(ξ) = ∫ (1 - cos ξ·h) j(h) dh` at each frequency.
    pub fn char_exponent(&self, freqs: &[Vec<f64>]) -> Result<CharExponent> {
        self.require_radial()?;
        let mut psi = Vec::with_capacity(freqs.len());
        let mut err = Vec::with_capacity(freqs.len());
        for f in freqs {
            if f.len() != self.d {
                return domain(format!("frequency has {} components, kernel is {}-dimensional", f.len(), self.d));
            }
            let s = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            let r = self.psi_radial(s)?;
            psi.push(r.value);
            err.push(r.error);
        }
        Ok(CharExponent { freqs: freqs.to_vec(), psi, quadrature_error: err })
    }
}

fn check_dim(d: usize) -> Result<()> {
    if d == 0 || d > crate::lattice::MAX_DIM {
        return domain(format!("dimension must be in 1..={}, got {d}", crate::lattice::MAX_DIM));
    }
    Ok(())
}

/// Oscillating part `osc_d(u)` of the angular average of `1 - cos`.
fn osc(d: usize, u: f64) -> f64 {
    match d {
        1 => 2.0 * u.cos(),
        2 => 2.0 * PI * libm::j0(u),
        _ => 4.0 * PI * if u == 0.0 { 1.0 } else { u.sin() / u },
    }
}

/// `S_d(u) = |S^{d-1}| - osc_d(u)`, evaluated without cancellation near 0.
fn angular_gap(d: usize, u: f64) -> f64 {
    match d {
        1 => {
            let s = (0.5 * u).sin();
            4.0 * s * s
        }
        2 => {
            if u < 0.5 {
                let x = u * u / 4.0;
                // 1 - J0(u) = Σ_{m>=1} (-1)^{m+1} x^m / (m!)²
                let mut term = 1.0;
                let mut acc = 0.0;
                for m in 1..12 {
                    term *= -x / (m as f64 * m as f64);
                    acc -= term;
                }
                2.0 * PI * acc
            } else {
                2.0 * PI * (1.0 - libm::j0(u))
            }
        }
        _ => {
            if u < 0.1 {
                let x = u * u;
                4.0 * PI * x * (1.0 / 6.0 - x * (1.0 / 120.0 - x * (1.0 / 5040.0 - x / 362_880.0)))
            } else {
                4.0 * PI * (1.0 - u.sin() / u)
            }
        }
    }
}

/// `∫_0^b g(r) dr` for `g(r) ≍ r^gamma` near 0 (`gamma > -1`), via
/// `r = b v^p` which makes the transformed integrand vanish linearly.
fn near_origin_integral<F: Fn(f64) -> f64>(g: F, b: f64, gamma: f64) -> QuadResult {
    let p = (2.0 / (gamma + 1.0)).max(1.0);
    let h = |v: f64| {
        if v <= 0.0 {
            return 0.0;
        }
        let r = b * v.powf(p);
        g(r) * b * p * v.powf(p - 1.0)
    };
    adaptive(h, 0.0, 1.0, ABS_TOL, REL_TOL, MAX_SEGMENTS)
}

/// `∫_{u0}^∞ g(u) du` for an integrand oscillating with period `2π` under a
/// decaying envelope: half-period panels summed, then repeated averaging of
/// the trailing partial sums.
fn oscillatory_tail<F: Fn(f64) -> f64>(g: F, u0: f64) -> QuadResult {
    let gl = GaussLegendre::cached(24);
    let mut partial = Vec::new();
    let mut total = 0.0;
    let max_panels = 200_000;
    for n in 0..max_panels {
        let a = u0 + n as f64 * PI;
        let v = gl.integrate(a, a + PI, &g);
        total += v;
        partial.push(total);
        if n >= 40 && v.abs() <= 1e-17 * total.abs().max(1e-300) {
            break;
        }
        if n >= 2000 && n % 64 == 0 {
            if let Some(r) = averaged(&partial) {
                if r.error <= 1e-15 * r.value.abs().max(1e-12) {
                    return r;
                }
            }
        }
    }
    averaged(&partial).unwrap_or(QuadResult { value: total, error: 0.0 })
}

fn averaged(partial: &[f64]) -> Option<QuadResult> {
    let m = 16;
    if partial.len() < m {
        return None;
    }
    let mut level: Vec<f64> = partial[partial.len() - m..].to_vec();
    let mut prev = level[level.len() - 1];
    while level.len() > 1 {
        prev = level[level.len() - 1];
        level = level.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    }
    let v = level[0];
    Some(QuadResult { value: v, error: (v - prev).abs() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stable1() -> JumpKernel {
        JumpKernel::stable(1, 1.0, 1.0).unwrap()
    }

    #[test]
    fn eval_examples() {
        let k = stable1();
        assert_eq!(k.eval(&[0.0], &[2.0]).unwrap(), 0.25);
        assert_eq!(k.eval(&[0.0], &[0.5]).unwrap(), 4.0);
        assert!(k.eval(&[1.0], &[1.0]).is_err());
        let p = JumpKernel::phi(1, PhiProfile::Power { exponent: 1.5 }, 1.0).unwrap();
        let want = 1.0 / (2.0 * 2f64.powf(1.5));
        assert!((p.eval(&[0.0], &[2.0]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.17677669529663687).abs() < 1e-15);
    }

    #[test]
    fn eval_is_symmetric() {
        let k = JumpKernel::stable(3, 0.7, 2.0).unwrap();
        let x = [0.1, -0.4, 2.0];
        let y = [1.3, 0.2, -0.5];
        assert_eq!(k.eval(&x, &y).unwrap(), k.eval(&y, &x).unwrap());
    }

    #[test]
    fn tail_mass_examples() {
        let k = stable1();
        assert_eq!(k.tail_mass(1.0).unwrap(), 2.0);
        assert_eq!(k.tail_mass(2.0).unwrap(), 1.0);
        assert_eq!(k.tail_mass(f64::INFINITY).unwrap(), 0.0);
        assert!(k.tail_mass(0.0).is_err());
        // Quadrature path agrees with the closed form.
        let q = JumpKernel::radial(1, 1.0, 1.0, |r| r.powi(-2)).unwrap();
        for r in [0.5, 1.0, 2.0, 10.0] {
            let v = q.tail_mass(r).unwrap();
            assert!((v - 2.0 / r).abs() < 1e-10 * (2.0 / r), "{r}: {v}");
        }
        let bad = JumpKernel::radial(1, 1.0, -0.5, |r| r.powf(-0.5)).unwrap();
        assert!(bad.tail_mass(1.0).is_err());
    }

    #[test]
    fn tail_mass_nonincreasing() {
        let q = JumpKernel::radial(2, 0.5, 1.3, |r| r.powf(-2.5) / (1.0 + r.powf(0.8))).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..20 {
            let v = q.tail_mass(0.1 * 1.5f64.powi(i)).unwrap();
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn psi_stable_d1() {
        let k = stable1();
        let p1 = k.psi_radial(1.0).unwrap();
        assert!((p1.value - PI).abs() < 1e-9, "{p1:?}");
        assert!(p1.error < 1e-8);
        let p2 = k.psi_radial(2.0).unwrap();
        assert!((p2.value - 2.0 * PI).abs() < 1e-8);
        assert_eq!(k.psi_radial(0.0).unwrap().value, 0.0);
    }

    /// `∫(1 - cos(e₁·h)) |h|^{-d-α} dh` in closed form.
    fn stable_constant(d: usize, alpha: f64) -> f64 {
        use statrs::function::gamma::gamma;
        let df = d as f64;
        2.0 * PI.powf(df / 2.0) * gamma(1.0 - alpha / 2.0)
            / (alpha * 2f64.powf(alpha) * gamma((df + alpha) / 2.0))
    }

    #[test]
    fn psi_matches_closed_form_constants() {
        for d in 1..=3 {
            for alpha in [0.3, 0.8, 1.0, 1.5, 1.9] {
                let k = JumpKernel::stable(d, alpha, 1.0).unwrap();
                let want = stable_constant(d, alpha);
                let got = k.psi_radial(1.0).unwrap();
                assert!((got.value - want).abs() < 1e-8 * want, "d={d} alpha={alpha}: {got:?} vs {want}");
            }
        }
        assert!((stable_constant(2, 1.0) - 2.0 * PI).abs() < 1e-12);
    }

    #[test]
    fn psi_homogeneity_on_log_grid() {
        for (d, alpha) in [(1, 1.0), (2, 0.6), (3, 1.7)] {
            let k = JumpKernel::stable(d, alpha, 1.0).unwrap();
            let base = k.psi_radial(1.0).unwrap().value;
            for i in -6..=6 {
                let lam = 10f64.powf(i as f64 / 2.0);
                let v = k.psi_radial(lam).unwrap().value;
                let want = lam.powf(alpha) * base;
                assert!((v - want).abs() < 1e-6 * want, "d={d} lam={lam}");
            }
        }
    }

    #[test]
    fn psi_is_even_and_monotone_for_radial_kernels() {
        let k = JumpKernel::radial(2, 0.7, 1.4, |r| r.powf(-2.7) * (-r).exp() + r.powf(-3.4) * 0.1).unwrap();
        let ce = k.char_exponent(&[vec![0.0, 0.0], vec![0.3, -0.4], vec![-0.3, 0.4], vec![1.0, 1.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(ce.psi[0], 0.0);
        assert_eq!(ce.psi[1], ce.psi[2]);
        assert!(ce.psi[1] < ce.psi[3] && ce.psi[3] < ce.psi[4]);
        assert!(ce.quadrature_error.iter().all(|&e| e <= 1e-8));
        let g = JumpKernel::general(1, |x, y| (x[0] - y[0]).abs().powi(-2)).unwrap();
        assert!(matches!(g.char_exponent(&[vec![1.0]]), Err(JumpGridError::Unsupported(_))));
    }

    #[test]
    fn a1_bound_stable_d1_is_four() {
        let k = stable1();
        assert!((k.a1_continuum_bound().unwrap() - 4.0).abs() < 1e-10);
    }

    #[test]
    fn bounds_examples() {
        let k = stable1();
        let ok = BoundParams { kappa0: 1.0, kappa1: 1.0, kappa2: 1.0, alpha: 1.0, beta: 1.0 };
        assert!(k.verify_bounds(ok, 500, 1).violations.is_empty());
        let bad = BoundParams { kappa2: 0.5, ..ok };
        assert!(!k.verify_bounds(bad, 500, 1).violations.is_empty());
        let p = JumpKernel::phi(1, PhiProfile::Power { exponent: 1.0 }, 1.0).unwrap();
        let loose = BoundParams { kappa0: 1.0, kappa1: 1.0, kappa2: 1.0, alpha: 1.1, beta: 0.9 };
        let rep = p.verify_bounds(loose, 500, 3);
        assert!(rep.violations.iter().all(|v| v.kind == BoundKind::Far));
    }

    #[test]
    fn phi_scaling_limit() {
        let p = PhiProfile::Power { exponent: 1.3 };
        for r in [0.5, 2.0] {
            let got = p.scaling_ratio(1e6, r);
            assert!((got - r.powf(-1.3)).abs() < 1e-12);
        }
        let t = PhiProfile::table(vec![0.1, 1.0, 10.0], vec![0.01, 1.0, 100.0]).unwrap();
        assert!((t.eval(3.0) - 9.0).abs() < 1e-12);
        assert!((t.eval(100.0) - 1e4).abs() < 1e-8);
    }

    #[test]
    fn sphere_areas() {
        assert_eq!(sphere_area(1), 2.0);
        assert!((sphere_area(4) - 2.0 * PI * PI).abs() < 1e-12);
        assert!((sphere_area(5) - 8.0 * PI * PI / 3.0).abs() < 1e-12);
    }
}
