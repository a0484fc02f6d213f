//! Dirichlet forms: the discrete form of a conductance matrix, the
//! continuum form of a kernel, their truncations to a ball with an inner
//! cutoff, the truncated generators and the truncated-mass constant
//! `K_{j,δ}`.
//!
//! Continuum forms in one dimension use the lag representation
//! `ε(f, f) = ½ ∫ j(h) D(h) dh` with `D(h) = ∫ (f(x+h) - f(x))² dx`, which
//! keeps the diagonal singularity one-dimensional. On periodic windows `f`
//! is periodic and the kernel is summed over images. In higher dimension
//! only periodic windows are supported, by Parseval.
//!
//! The truncated forms and generators are one-dimensional.

use rayon::prelude::*;

use crate::conductance::{build_cell_averaged, ConductanceMatrix, Storage};
use crate::error::{domain, JumpGridError, Result};
use crate::kernels::JumpKernel;
use crate::lattice::{LatticeWindow, Topology};
use crate::quadrature::{breakpoints_within, GaussLegendre};
use crate::spectral::{SpectralFunction, SpectralOracle};
use crate::transfer::{restrict, ContinuumFunction, GridFunction};

/// A form value with an estimate of its quadrature error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FormValue {
    pub value: f64,
    pub quadrature_error: f64,
    /// Set when the inner cutoff is below two cell diameters.
    pub straddle_warning: bool,
}

impl FormValue {
    fn exact(value: f64) -> Self {
        Self { value, quadrature_error: 0.0, straddle_warning: false }
    }
}

/// Ball `B_j` around the window centre and inner cutoff `δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncationParams {
    pub j: f64,
    pub delta: f64,
}

impl TruncationParams {
    pub fn new(j: f64, delta: f64) -> Result<Self> {
        if !(j > 0.0 && delta > 0.0 && j.is_finite()) {
            return domain("truncation needs positive j and delta");
        }
        if !(delta < j) {
            return domain(format!("truncation needs delta < j, got delta = {delta}, j = {j}"));
        }
        Ok(Self { j, delta })
    }

    /// `B_{j+2}` must fit in the window.
    pub fn check_window(&self, w: &LatticeWindow) -> Result<()> {
        if w.inscribed_radius() < self.j + 2.0 {
            return domain(format!(
                "ball of radius j + 2 = {} does not fit in a window of side {}",
                self.j + 2.0,
                w.side_length()
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Discrete form

/// `ε^{(k)}(u, v) = ½ Σ_{x,y} (u(x)-u(y))(v(x)-v(y)) 𝒞(x,y) m_k² + Σ_x u v κ m_k`,
/// the last term from partners outside an absorbing window (where `u = 0`).
/// Per-site partial sums are added in site order, so the value does not
/// depend on the thread count.
pub fn discrete_form(c: &ConductanceMatrix, u: &GridFunction, v: &GridFunction) -> Result<FormValue> {
    let w = c.window();
    if u.window() != w || v.window() != w {
        return domain("functions and conductances live on different windows");
    }
    let mk = w.cell_measure();
    let (uu, vv) = (u.values(), v.values());
    let partial: Vec<f64> = match c.storage() {
        Storage::Stencil(st) => {
            let entries = st.entries();
            (0..w.num_sites())
                .into_par_iter()
                .map(|a| {
                    let ia = w.multi_index(a);
                    let mut s = 0.0;
                    for (o, cv) in entries {
                        let mut ib = ia;
                        for ax in 0..w.d() {
                            ib[ax] += o[ax];
                        }
                        if let Some(b) = w.site_of(&ib) {
                            s += cv * (uu[a] - uu[b]) * (vv[a] - vv[b]);
                        }
                    }
                    0.5 * s
                })
                .collect()
        }
        Storage::Pairs(pl) => (0..w.num_sites())
            .into_par_iter()
            .map(|a| {
                let (cols, vals) = pl.row(a);
                let mut s = 0.0;
                for (&b, &cv) in cols.iter().zip(vals) {
                    let b = b as usize;
                    s += cv * (uu[a] - uu[b]) * (vv[a] - vv[b]);
                }
                s
            })
            .collect(),
    };
    let mut total = partial.iter().sum::<f64>() * mk * mk;
    if w.topology() == Topology::Absorbing {
        let kill = c.killing_rates();
        total += kill.iter().zip(uu.iter().zip(vv)).map(|(k, (a, b))| k * a * b).sum::<f64>() * mk;
    }
    Ok(FormValue::exact(total))
}

// ---------------------------------------------------------------------------
// One-dimensional helpers

/// `∫_a^b J(r) dr` for `0 < a <= b` (one side of the line).
fn line_mass(kern: &JumpKernel, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if let Some((alpha, amp)) = kern.as_stable() {
        return amp * (a.powf(-alpha) - b.powf(-alpha)) / alpha;
    }
    // Gauss in log r, one panel per factor of two.
    let gl = GaussLegendre::cached(16);
    let mut total = 0.0;
    let mut lo = a;
    while lo < b {
        let hi = (2.0 * lo).min(b);
        total += gl.integrate(lo.ln(), hi.ln(), |s| {
            let r = s.exp();
            kern.radial_value(r) * r
        });
        lo = hi;
    }
    total
}

/// Analytic functions are read on `[0, L)` on a torus.
fn ev(f: &ContinuumFunction, w: &LatticeWindow, x: f64) -> f64 {
    match f {
        ContinuumFunction::Analytic(a) if w.topology() == Topology::Periodic => {
            a.eval(&[x.rem_euclid(w.side_length())])
        }
        other => other.eval(&[x]),
    }
}

/// Discontinuities of `f` or its derivative on the line (absolute positions).
fn kinks_1d(f: &ContinuumFunction) -> Vec<f64> {
    match f {
        ContinuumFunction::Analytic(a) => {
            let mut k = a.kinks(0).to_vec();
            if let Some((lo, hi)) = a.support() {
                k.push(lo[0]);
                k.push(hi[0]);
            }
            k
        }
        ContinuumFunction::PiecewiseConstant(g) | ContinuumFunction::Tabulated { fine: g, .. } => {
            let w = g.window();
            let k = w.k() as f64;
            (0..=w.n_per_axis()).map(|i| (i as f64 - 0.5) / k).collect()
        }
        ContinuumFunction::Spectral(_) => Vec::new(),
    }
}

/// Gauss on each piece of `[a, b]` split at `breaks`.
fn piecewise_gauss(a: f64, b: f64, breaks: Vec<f64>, order: usize, mut g: impl FnMut(f64) -> f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let pts = breakpoints_within(a, b, breaks);
    let gl = GaussLegendre::cached(order);
    pts.windows(2).map(|s| gl.integrate(s[0], s[1], &mut g)).sum()
}

/// `D(h) = ∫_{lo}^{hi} (f(x+h) - f(x))² dx` with the range in `x`.
fn lag_profile(f: &ContinuumFunction, w: &LatticeWindow, kinks: &[f64], h: f64, lo: f64, hi: f64, order: usize) -> f64 {
    let periodic = w.topology() == Topology::Periodic;
    let l = w.side_length();
    let mut br = Vec::with_capacity(4 * kinks.len() + 4);
    for &p in kinks {
        for q in [p, p - h] {
            if periodic {
                let r = q.rem_euclid(l);
                br.extend([r - l, r, r + l]);
            } else {
                br.push(q);
            }
        }
    }
    if periodic {
        for m in [-1.0, 0.0, 1.0, 2.0] {
            br.push(m * l);
            br.push(m * l - h);
        }
    }
    piecewise_gauss(lo, hi, br, order, |x| {
        let e = ev(f, w, x + h) - ev(f, w, x);
        e * e
    })
}

/// `∫_0^b g`, for `g(h) ~ h^{1-α}` at 0: substitution `h = b v^p`.
fn graded(b: f64, alpha: f64, order: usize, mut g: impl FnMut(f64) -> f64) -> f64 {
    let p = (2.0 / (2.0 - alpha).max(0.05)).max(1.0);
    let gl = GaussLegendre::cached(order);
    // Two panels in v keep the rule away from the weakest point at v = 0.
    gl.integrate(0.0, 0.5, |v| g(b * v.powf(p)) * b * p * v.powf(p - 1.0))
        + gl.integrate(0.5, 1.0, |v| g(b * v.powf(p)) * b * p * v.powf(p - 1.0))
}

fn sorted_breaks(mut v: Vec<f64>, lo: f64, hi: f64) -> Vec<f64> {
    v.retain(|&x| x > lo && x < hi);
    v.push(lo);
    v.push(hi);
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v.dedup_by(|a, b| (*a - *b).abs() <= 1e-13 * (1.0 + b.abs()));
    v
}

/// `∫_{lo}^{hi} j(h) D(h) dh` with the near-zero panel graded; `extra`
/// evaluates an additional smooth weight.
fn lag_integral(
    kern: &JumpKernel,
    d_of_h: &dyn Fn(f64, usize) -> f64,
    weight: &dyn Fn(f64) -> f64,
    h_breaks: Vec<f64>,
    lo: f64,
    hi: f64,
    order: usize,
) -> f64 {
    let pts = sorted_breaks(h_breaks, lo, hi);
    let alpha = kern.near_index();
    let gl = GaussLegendre::cached(order);
    let mut total = 0.0;
    for s in pts.windows(2) {
        let g = |h: f64| weight(h) * d_of_h(h, order);
        if s[0] == 0.0 {
            total += graded(s[1], alpha, order, g);
        } else {
            // Split long panels so the kernel's decay is resolved.
            let n = (((s[1] / s[0]).ln() / 2f64.ln()).ceil() as usize).clamp(1, 64);
            let ratio = (s[1] / s[0]).powf(1.0 / n as f64);
            let mut a = s[0];
            for i in 0..n {
                let b = if i + 1 == n { s[1] } else { a * ratio };
                total += gl.integrate(a, b, g);
                a = b;
            }
        }
    }
    total
}

fn pairwise_differences(kinks: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for &a in kinks {
        for &b in kinks {
            out.push((a - b).abs());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Continuum form

fn continuum_form_1d(kern: &JumpKernel, f: &ContinuumFunction, w: &LatticeWindow, order: usize) -> Result<f64> {
    let kinks = kinks_1d(f);
    let l = w.side_length();
    match w.topology() {
        Topology::Absorbing => {
            let (s0, s1) = match f {
                ContinuumFunction::Analytic(a) => match a.support() {
                    Some((lo, hi)) => (lo[0], hi[0]),
                    None => return domain("continuum form on an absorbing window needs compact support"),
                },
                ContinuumFunction::PiecewiseConstant(g) | ContinuumFunction::Tabulated { fine: g, .. } => {
                    let h = 0.5 / g.window().k() as f64;
                    (-h, g.window().side_length() - h)
                }
                ContinuumFunction::Spectral(_) => return domain("spectral functions live on a torus"),
            };
            let (w0, w1) = (-0.5 / w.k() as f64, l - 0.5 / w.k() as f64);
            if s0 < w0 || s1 > w1 {
                return domain("support of f leaves the window");
            }
            let width = s1 - s0;
            let norm2 = piecewise_gauss(s0, s1, kinks.clone(), order, |x| ev(f, w, x).powi(2));
            let d_of_h = |h: f64, o: usize| lag_profile(f, w, &kinks, h, s0 - h, s1, o);
            let near = lag_integral(
                kern,
                &d_of_h,
                &|h| kern.radial_value(h),
                pairwise_differences(&kinks),
                0.0,
                width,
                order,
            );
            Ok(near + norm2 * kern.tail_mass(width)?)
        }
        Topology::Periodic => {
            let images = 64i64;
            let d_of_h = |h: f64, o: usize| lag_profile(f, w, &kinks, h, 0.0, l, o);
            let mut hb: Vec<f64> = Vec::new();
            for dlt in pairwise_differences(&kinks) {
                let r = dlt.rem_euclid(l);
                hb.push(r);
                hb.push(l - r);
            }
            for i in 1..16 {
                hb.push(0.5 * l * i as f64 / 16.0);
            }
            let near = lag_integral(kern, &d_of_h, &|h| kern.radial_value(h), hb.clone(), 0.0, 0.5 * l, order);
            let image_weight = |h: f64| {
                let mut s = 0.0;
                for m in 1..=images {
                    let ml = m as f64 * l;
                    s += kern.radial_value(ml + h) + kern.radial_value(ml - h);
                }
                s
            };
            let gl = GaussLegendre::cached(order);
            let pts = sorted_breaks(hb, 0.0, 0.5 * l);
            let mut img = 0.0;
            for s in pts.windows(2) {
                img += gl.integrate(s[0], s[1], |h| image_weight(h) * d_of_h(h, order));
            }
            let mass = piecewise_gauss(0.0, l, kinks.clone(), order, |x| ev(f, w, x));
            let norm2 = piecewise_gauss(0.0, l, kinks.clone(), order, |x| ev(f, w, x).powi(2));
            let mean_d = 2.0 * norm2 - 2.0 * mass * mass / l;
            let tail = 0.5 * mean_d * kern.tail_mass((images as f64 + 0.5) * l)?;
            Ok(near + img + tail)
        }
    }
}

fn truncated_continuum_1d(
    kern: &JumpKernel,
    f: &ContinuumFunction,
    w: &LatticeWindow,
    t: TruncationParams,
    order: usize,
) -> f64 {
    let c = w.center()[0];
    let (lo, hi) = (c - t.j, c + t.j);
    let mut kinks = kinks_1d(f);
    kinks.push(lo);
    kinks.push(hi);
    let d_of_h = |h: f64, o: usize| lag_profile(f, w, &kinks, h, lo, hi - h, o);
    let gl = GaussLegendre::cached(order);
    let pts = sorted_breaks(pairwise_differences(&kinks), t.delta, 2.0 * t.j);
    let mut total = 0.0;
    for s in pts.windows(2) {
        total += gl.integrate(s[0], s[1], |h| kern.radial_value(h) * d_of_h(h, order));
    }
    total
}

/// `ε(f, f) = ½ ∬ (f(x) - f(y))² j(x, y) dx dy` over the window, or its
/// truncation to `{x, y ∈ B_j, |x - y| > δ}`. The quadrature error is the
/// change between two rule orders.
pub fn continuum_form(
    kern: &JumpKernel,
    f: &ContinuumFunction,
    w: &LatticeWindow,
    trunc: Option<TruncationParams>,
) -> Result<FormValue> {
    if !kern.is_radial() {
        return Err(JumpGridError::Unsupported("continuum forms need a radial kernel".into()));
    }
    if f.d() != w.d() || kern.d() != w.d() {
        return domain("dimensions of kernel, function and window differ");
    }
    if let Some(t) = trunc {
        t.check_window(w)?;
        if w.d() != 1 {
            return Err(JumpGridError::Unsupported("truncated forms are one-dimensional".into()));
        }
        let a = truncated_continuum_1d(kern, f, w, t, 16);
        let b = truncated_continuum_1d(kern, f, w, t, 24);
        return Ok(FormValue { value: b, quadrature_error: (a - b).abs(), straddle_warning: false });
    }
    if w.d() == 1 {
        let a = continuum_form_1d(kern, f, w, 16)?;
        let b = continuum_form_1d(kern, f, w, 24)?;
        return Ok(FormValue { value: b, quadrature_error: (a - b).abs(), straddle_warning: false });
    }
    if w.topology() != Topology::Periodic {
        return Err(JumpGridError::Unsupported("continuum forms in d >= 2 need a periodic window".into()));
    }
    let m = if w.d() == 2 { 256 } else { 48 };
    let analytic = match f {
        ContinuumFunction::Analytic(a) => a.clone(),
        ContinuumFunction::Spectral(s) => {
            let o = SpectralOracle::new(kern, s.side_length(), s.modes_per_axis())?;
            return Ok(FormValue::exact(o.energy(s)?));
        }
        _ => return Err(JumpGridError::Unsupported("piecewise-constant inputs have infinite energy".into())),
    };
    let o = SpectralOracle::new(kern, w.side_length(), m)?;
    let s = SpectralFunction::from_analytic(&analytic, w.side_length(), m)?;
    let e = o.energy(&s)?;
    let tail = o.truncation_indicator(&s);
    Ok(FormValue { value: e, quadrature_error: tail * tail * o.psi().iter().fold(0.0f64, |a, b| a.max(*b)), straddle_warning: false })
}

// ---------------------------------------------------------------------------
// Truncated forms and generators (one dimension)

/// Kernel of a truncated form: the continuum kernel or conductances
/// extended to be constant on pairs of cells.
#[derive(Clone, Copy)]
pub enum TruncatedSource<'a> {
    Continuum(&'a JumpKernel),
    Discrete(&'a ConductanceMatrix),
}

impl TruncatedSource<'_> {
    fn site(c: &ConductanceMatrix, x: f64) -> Option<usize> {
        let w = c.window();
        let i = (x * w.k() as f64 + 0.5).floor() as i64;
        w.site_of(&[i, 0, 0])
    }

    fn value(&self, x: f64, y: f64) -> f64 {
        match self {
            TruncatedSource::Continuum(k) => k.radial_value((x - y).abs()),
            TruncatedSource::Discrete(c) => match (Self::site(c, x), Self::site(c, y)) {
                (Some(a), Some(b)) => c.get(a, b),
                _ => 0.0,
            },
        }
    }

    /// `∫_p^q κ(x, y) dy` for an interval on one side of `x`.
    fn mass(&self, x: f64, p: f64, q: f64) -> f64 {
        if q <= p {
            return 0.0;
        }
        match self {
            TruncatedSource::Continuum(k) => {
                if p >= x {
                    line_mass(k, p - x, q - x)
                } else {
                    line_mass(k, x - q, x - p)
                }
            }
            TruncatedSource::Discrete(c) => {
                let kk = c.window().k() as f64;
                let Some(a) = Self::site(c, x) else { return 0.0 };
                let i0 = (p * kk + 0.5).floor() as i64;
                let i1 = (q * kk + 0.5).floor() as i64;
                let w = c.window();
                let mut s = 0.0;
                for i in i0..=i1 {
                    let lo = ((i as f64 - 0.5) / kk).max(p);
                    let hi = ((i as f64 + 0.5) / kk).min(q);
                    if hi > lo {
                        if let Some(b) = w.site_of(&[i, 0, 0]) {
                            s += c.get(a, b) * (hi - lo);
                        }
                    }
                }
                s
            }
        }
    }

    /// Cell boundaries, or a grid of spacing `δ/2` for the continuum kernel
    /// so that no piece comes close to the diagonal relative to its length.
    fn breaks(&self, lo: f64, hi: f64, delta: f64, out: &mut Vec<f64>) {
        match self {
            TruncatedSource::Discrete(c) => {
                let kk = c.window().k() as f64;
                let first = (lo * kk - 0.5).ceil() as i64;
                let last = (hi * kk - 0.5).floor() as i64;
                for i in first..=last {
                    out.push((i as f64 + 0.5) / kk);
                }
            }
            TruncatedSource::Continuum(_) => {
                let n = ((hi - lo) / (0.5 * delta)).ceil() as usize;
                out.extend((1..n).map(|i| lo + (hi - lo) * i as f64 / n as f64));
            }
        }
    }
}

/// Truncated forms `ε_{j,δ}`, `ε̄^{(k)}_{j,δ}` and generators `L_{j,δ}`,
/// `L̄^{(k)}_{j,δ}` on the ball `B_j` around the window centre.
pub struct TruncatedOperator<'a> {
    source: TruncatedSource<'a>,
    window: LatticeWindow,
    trunc: TruncationParams,
    lo: f64,
    hi: f64,
    order: usize,
}

impl<'a> TruncatedOperator<'a> {
    pub fn new(source: TruncatedSource<'a>, window: &LatticeWindow, trunc: TruncationParams) -> Result<Self> {
        if window.d() != 1 {
            return Err(JumpGridError::Unsupported("truncated operators are one-dimensional".into()));
        }
        trunc.check_window(window)?;
        match source {
            TruncatedSource::Continuum(k) => {
                if !k.is_radial() || k.d() != 1 {
                    return domain("truncated operators need a one-dimensional radial kernel");
                }
            }
            TruncatedSource::Discrete(c) => {
                if c.window().d() != 1 || (c.window().side_length() - window.side_length()).abs() > 1e-12 {
                    return domain("conductances and window differ");
                }
            }
        }
        let c = window.center()[0];
        Ok(Self { source, window: *window, trunc, lo: c - trunc.j, hi: c + trunc.j, order: 8 })
    }

    /// Cutoff below two cell diameters of the conductances.
    pub fn straddle_warning(&self) -> bool {
        match self.source {
            TruncatedSource::Discrete(c) => self.trunc.delta < 2.0 * c.window().cell_diameter(),
            TruncatedSource::Continuum(_) => false,
        }
    }

    /// Pieces of `B_j` on which `f`, `g` and the kernel are smooth.
    fn pieces(&self, fs: &[&ContinuumFunction]) -> Vec<f64> {
        let mut br = Vec::new();
        for f in fs {
            br.extend(kinks_1d(f));
        }
        self.source.breaks(self.lo, self.hi, self.trunc.delta, &mut br);
        sorted_breaks(br, self.lo, self.hi)
    }

    fn is_piecewise_constant(f: &ContinuumFunction) -> bool {
        matches!(f, ContinuumFunction::PiecewiseConstant(_) | ContinuumFunction::Tabulated { .. })
    }

    /// `∫_{x ∈ [a0, a1]} ∫_{y ∈ [b0, b1], |x-y| > δ} g(x, y) κ(x, y)` by nested
    /// Gauss; `const_g` marks integrands constant on the rectangle.
    fn pair_integral(&self, a0: f64, a1: f64, b0: f64, b1: f64, order: usize, g: &dyn Fn(f64, f64) -> f64, const_g: Option<f64>) -> f64 {
        let dl = self.trunc.delta;
        let xb = vec![b0 - dl, b1 - dl, b0 + dl, b1 + dl];
        let gl = GaussLegendre::cached(order);
        piecewise_gauss(a0, a1, xb, order, |x| {
            // y-range split by the excluded window (x - δ, x + δ).
            let mut s = 0.0;
            for (p, q) in [(b0, b1.min(x - dl)), (b0.max(x + dl), b1)] {
                if q <= p {
                    continue;
                }
                s += match const_g {
                    Some(cg) => cg * self.source.mass(x, p, q),
                    None => match self.source {
                        TruncatedSource::Continuum(_) => gl.integrate(p, q, |y| g(x, y) * self.source.value(x, y)),
                        TruncatedSource::Discrete(_) => {
                            // Constant kernel on the pair of cells.
                            let mid = 0.5 * (p + q);
                            self.source.value(x, mid) * gl.integrate(p, q, |y| g(x, y))
                        }
                    },
                };
            }
            s
        })
    }

    fn form_at_order(&self, f: &ContinuumFunction, g: &ContinuumFunction, order: usize) -> f64 {
        let pts = self.pieces(&[f, g]);
        let n = pts.len() - 1;
        let w = &self.window;
        let pc = Self::is_piecewise_constant(f) && Self::is_piecewise_constant(g);
        let mids: Vec<(f64, f64)> = (0..n)
            .map(|a| {
                let m = 0.5 * (pts[a] + pts[a + 1]);
                (ev(f, w, m), ev(g, w, m))
            })
            .collect();
        // Pieces where both functions vanish identically pair to zero.
        let zero: Vec<bool> = (0..n)
            .map(|a| {
                let gl = GaussLegendre::cached(4);
                gl.mapped(pts[a], pts[a + 1]).all(|(x, _)| ev(f, w, x) == 0.0 && ev(g, w, x) == 0.0)
                    && ev(f, w, pts[a]) == 0.0
                    && ev(f, w, pts[a + 1]) == 0.0
                    && ev(g, w, pts[a]) == 0.0
                    && ev(g, w, pts[a + 1]) == 0.0
            })
            .collect();
        let integrand = |x: f64, y: f64| (ev(f, w, x) - ev(f, w, y)) * (ev(g, w, x) - ev(g, w, y));
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|a| {
                let mut s = 0.0;
                for b in a..n {
                    if zero[a] && zero[b] {
                        continue;
                    }
                    let cg = if pc { Some((mids[a].0 - mids[b].0) * (mids[a].1 - mids[b].1)) } else { None };
                    if cg == Some(0.0) {
                        continue;
                    }
                    let v = self.pair_integral(pts[a], pts[a + 1], pts[b], pts[b + 1], order, &integrand, cg);
                    s += if b == a { 0.5 * v } else { v };
                }
                s
            })
            .collect();
        rows.iter().sum()
    }

    /// `½ ∬_{B_j², |x-y|>δ} (f(x)-f(y))(g(x)-g(y)) κ(x,y) dx dy`. Exact
    /// pair sums for piecewise-constant inputs; nested Gauss otherwise,
    /// with the error taken from a second rule order.
    pub fn form(&self, f: &ContinuumFunction, g: &ContinuumFunction) -> Result<FormValue> {
        if f.d() != 1 || g.d() != 1 {
            return domain("truncated forms are one-dimensional");
        }
        let pc = Self::is_piecewise_constant(f) && Self::is_piecewise_constant(g);
        let v = self.form_at_order(f, g, self.order);
        let err = if pc && matches!(self.source, TruncatedSource::Discrete(_)) {
            0.0
        } else {
            (self.form_at_order(f, g, self.order + 4) - v).abs()
        };
        Ok(FormValue { value: v, quadrature_error: err, straddle_warning: self.straddle_warning() })
    }

    fn piece_values(&self, u: &ContinuumFunction) -> Result<(Vec<f64>, Vec<f64>)> {
        if !Self::is_piecewise_constant(u) {
            return domain("truncated generators act on tabulated (piecewise-constant) functions");
        }
        let pts = self.pieces(&[u]);
        let vals = pts.windows(2).map(|s| ev(u, &self.window, 0.5 * (s[0] + s[1]))).collect();
        Ok((pts, vals))
    }

    fn apply_with(&self, pts: &[f64], vals: &[f64], x: f64) -> f64 {
        let dl = self.trunc.delta;
        let ux = piece_value(pts, vals, x);
        let mut s = 0.0;
        for (b, v) in vals.iter().enumerate() {
            let (b0, b1) = (pts[b], pts[b + 1]);
            let diff = v - ux;
            if diff == 0.0 {
                continue;
            }
            let m = self.source.mass(x, b0, b1.min(x - dl)) + self.source.mass(x, b0.max(x + dl), b1);
            s += diff * m;
        }
        s
    }

    /// `L u(x) = ∫_{B_j, |y-x|>δ} (u(y) - u(x)) κ(x, y) dy` at each point.
    pub fn apply(&self, u: &ContinuumFunction, xs: &[f64]) -> Result<Vec<f64>> {
        let (pts, vals) = self.piece_values(u)?;
        Ok(xs.iter().map(|&x| if x < self.lo || x > self.hi { 0.0 } else { self.apply_with(&pts, &vals, x) }).collect())
    }

    /// Gauss nodes over `B_j`, split wherever `L u` may have a kink.
    fn x_rule(&self, pts: &[f64]) -> Vec<(f64, f64)> {
        let dl = self.trunc.delta;
        let mut br: Vec<f64> = pts.to_vec();
        for &p in pts {
            br.push(p - dl);
            br.push(p + dl);
        }
        let all = sorted_breaks(br, self.lo, self.hi);
        let gl = GaussLegendre::cached(self.order);
        all.windows(2).flat_map(|s| gl.mapped(s[0], s[1]).collect::<Vec<_>>()).collect()
    }

    /// `(u, L v)_{2, B_j}`; by symmetry equal to `-ε(u, v)`.
    pub fn pairing(&self, u: &ContinuumFunction, v: &ContinuumFunction) -> Result<f64> {
        let (pv, vv) = self.piece_values(v)?;
        let (pu, _) = self.piece_values(u)?;
        let mut all = pv.clone();
        all.extend(pu);
        let rule = self.x_rule(&sorted_breaks(all, self.lo, self.hi));
        let w = &self.window;
        let terms: Vec<f64> = rule
            .par_iter()
            .map(|&(x, wt)| wt * ev(u, w, x) * self.apply_with(&pv, &vv, x))
            .collect();
        Ok(terms.iter().sum())
    }

    /// `‖L u‖²_{2, B_j}`.
    pub fn image_norm_sq(&self, u: &ContinuumFunction) -> Result<f64> {
        let (pts, vals) = self.piece_values(u)?;
        let rule = self.x_rule(&pts);
        let terms: Vec<f64> = rule.par_iter().map(|&(x, wt)| wt * self.apply_with(&pts, &vals, x).powi(2)).collect();
        Ok(terms.iter().sum())
    }

    /// `‖u‖²_{2, B_j}`.
    pub fn norm_sq(&self, u: &ContinuumFunction) -> f64 {
        let br = kinks_1d(u);
        piecewise_gauss(self.lo, self.hi, br, self.order, |x| ev(u, &self.window, x).powi(2))
    }

    /// Ball end points.
    pub fn ball(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

fn piece_value(pts: &[f64], vals: &[f64], x: f64) -> f64 {
    match pts.partition_point(|&p| p <= x) {
        0 => vals[0],
        i if i > vals.len() => vals[vals.len() - 1],
        i => vals[i - 1],
    }
}

/// `K_{j,δ} = sup_{x ∈ B_j} ∫_{B_j} 1_{|x-y|>δ} j(x, y) dy` in one dimension:
/// the maximum over a grid of 4001 points plus the Lipschitz margin
/// `J(δ)·spacing/2`.
pub fn k_jdelta(kern: &JumpKernel, trunc: TruncationParams) -> Result<f64> {
    if kern.d() != 1 || !kern.is_radial() {
        return Err(JumpGridError::Unsupported("K_{j,δ} is computed for one-dimensional radial kernels".into()));
    }
    let (j, dl) = (trunc.j, trunc.delta);
    if dl >= 2.0 * j {
        return Ok(0.0);
    }
    let n = 4000;
    let h = 2.0 * j / n as f64;
    let mut best = 0.0f64;
    for i in 0..=n {
        let x = -j + i as f64 * h;
        let left = x + j;
        let right = j - x;
        let m = line_mass(kern, dl, left.max(dl)) + line_mass(kern, dl, right.max(dl));
        best = best.max(m);
    }
    Ok(best + kern.radial_value(dl) * h / 2.0)
}

// ---------------------------------------------------------------------------
// Convergence sweep

/// One level of a form convergence sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub k: u32,
    pub discrete_value: f64,
    pub target_value: f64,
    pub abs_error: f64,
    pub quadrature_error: f64,
}

/// `ε^{(k)}(π_k f, π_k f)` for cell-averaged conductances at each level
/// against `ε(f, f)`. Periodic windows fold the far tail (see
/// [`ConductanceMatrix::fold_far_tail`]) so both sides use the periodised
/// kernel.
pub fn form_convergence_sweep(
    kern: &JumpKernel,
    f: &ContinuumFunction,
    template: &LatticeWindow,
    k_list: &[u32],
    quad_order: usize,
    truncation_radius: f64,
) -> Result<Vec<SweepRow>> {
    let target = continuum_form(kern, f, template, None)?;
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let w = template.refine_to(k)?;
        let mut c = build_cell_averaged(&w, kern, quad_order, truncation_radius)?;
        if w.topology() == Topology::Periodic {
            c = c.fold_far_tail(kern)?;
        }
        let u = restrict(f, &w, 16)?;
        let v = discrete_form(&c, &u, &u)?.value;
        rows.push(SweepRow {
            k,
            discrete_value: v,
            target_value: target.value,
            abs_error: (v - target.value).abs(),
            quadrature_error: target.quadrature_error,
        });
    }
    Ok(rows)
}

/// Energy of a hat `(1 - |x|/r)⁺` in one dimension for the stable kernel
/// with `α = 1` and amplitude `A`: `4 A ln 2 / r`.
pub fn cauchy_hat_energy(amp: f64, radius: f64) -> f64 {
    4.0 * amp * 2f64.ln() / radius
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conductance::build_pointwise;
    use crate::transfer::{extend, AnalyticFunction};
    use std::f64::consts::PI;

    fn stable1() -> JumpKernel {
        JumpKernel::stable(1, 1.0, 1.0).unwrap()
    }

    fn hat_at(c: f64) -> ContinuumFunction {
        ContinuumFunction::Analytic(AnalyticFunction::hat(&[c], 1.0))
    }

    #[test]
    fn discrete_form_examples() {
        let w = LatticeWindow::new(1, 4, 4.0, Topology::Periodic).unwrap();
        let c = ConductanceMatrix::from_pairs(w, [(2, 5, 3.0)], 1.0, 0.0).unwrap();
        let one = GridFunction::constant(w, 2.0);
        assert_eq!(discrete_form(&c, &one, &one).unwrap().value, 0.0);
        let mut ind = GridFunction::zeros(w);
        ind.values_mut()[2] = 1.0;
        let v = discrete_form(&c, &ind, &ind).unwrap().value;
        assert!((v - 3.0 * 4f64.powi(-2)).abs() < 1e-15);
    }

    #[test]
    fn hat_energy_on_the_line() {
        // Brute-force midpoint double sum on a fine grid, tails in closed form.
        let h = 1.0 / 400.0;
        let n = 800;
        let xs: Vec<f64> = (0..n).map(|i| -1.0 + (i as f64 + 0.5) * h).collect();
        let f = |x: f64| (1.0 - x.abs()).max(0.0);
        let mut brute = 0.0;
        for &x in &xs {
            // Partners outside [-1, 1]: f(y) = 0, ∫ dy/(x-y)² = 1/(1+x) + 1/(1-x).
            brute += f(x).powi(2) * (1.0 / (1.0 + x) + 1.0 / (1.0 - x)) * h;
            for &y in &xs {
                if x != y {
                    brute += 0.5 * (f(x) - f(y)).powi(2) / (x - y).powi(2) * h * h;
                }
            }
        }
        let exact = cauchy_hat_energy(1.0, 1.0);
        assert!((brute - exact).abs() < 5e-3 * exact, "{brute} {exact}");
        let w = LatticeWindow::new(1, 4, 16.0, Topology::Absorbing).unwrap();
        let v = continuum_form(&stable1(), &hat_at(8.0), &w, None).unwrap();
        assert!((v.value - exact).abs() < 1e-9, "{} {exact}", v.value);
        assert!(v.quadrature_error < 1e-9);
    }

    /// Plancherel on the torus: `L Σ π|ξ_n| |c_n|²` with the hat's
    /// coefficients `c_n = sinc²(ξ_n/2) / L`, tail `∝ n^{-3}` by integral.
    fn periodic_hat_energy(l: f64) -> f64 {
        let mut s = 0.0;
        let nmax = 2_000_000u64;
        for n in 1..=nmax {
            let xi = 2.0 * PI * n as f64 / l;
            let c = ((xi / 2.0).sin() / (xi / 2.0)).powi(2) / l;
            s += 2.0 * l * PI * xi * c * c;
        }
        // Mean of sin⁴ is 3/8: tail of 2 L π ξ (16 sin⁴(ξ/2)/ξ⁴)/L².
        let k = 2.0 * PI / l;
        let tail = 2.0 * PI * 16.0 * 0.375 / (l * k.powi(3)) / (2.0 * (nmax as f64).powi(2));
        s + tail
    }

    #[test]
    fn hat_energy_on_the_torus() {
        let l = 16.0;
        let w = LatticeWindow::new(1, 4, l, Topology::Periodic).unwrap();
        let v = continuum_form(&stable1(), &hat_at(8.0), &w, None).unwrap();
        let oracle = periodic_hat_energy(l);
        assert!((v.value - oracle).abs() < 1e-7, "{} {oracle}", v.value);
        assert!(v.value < cauchy_hat_energy(1.0, 1.0));
        let zero = ContinuumFunction::Analytic(AnalyticFunction::constant(1, 0.0));
        assert_eq!(continuum_form(&stable1(), &zero, &w, None).unwrap().value, 0.0);
    }

    #[test]
    fn truncated_continuum_monotone() {
        let w = LatticeWindow::new(1, 4, 16.0, Topology::Periodic).unwrap();
        let f = hat_at(8.0);
        let mut last = 0.0;
        for delta in [0.5, 0.25, 0.1, 0.05] {
            let v = continuum_form(&stable1(), &f, &w, Some(TruncationParams::new(2.0, delta).unwrap())).unwrap();
            assert!(v.value > last);
            last = v.value;
        }
        let mut last = 0.0;
        for j in [1.0, 2.0, 3.0, 4.0] {
            let v = continuum_form(&stable1(), &f, &w, Some(TruncationParams::new(j, 0.25).unwrap())).unwrap();
            assert!(v.value >= last);
            last = v.value;
        }
        let full = continuum_form(&stable1(), &f, &w, None).unwrap().value;
        assert!(last < full);
    }

    #[test]
    fn truncated_engine_matches_lag_form() {
        let w = LatticeWindow::new(1, 8, 16.0, Topology::Periodic).unwrap();
        let t = TruncationParams::new(4.0, 0.25).unwrap();
        let f = hat_at(8.0);
        let kern = stable1();
        let op = TruncatedOperator::new(TruncatedSource::Continuum(&kern), &w, t).unwrap();
        let a = op.form(&f, &f).unwrap();
        let b = continuum_form(&kern, &f, &w, Some(t)).unwrap();
        assert!((a.value - b.value).abs() < 1e-8 * b.value, "{} {}", a.value, b.value);
    }

    #[test]
    fn k_jdelta_examples() {
        let kern = stable1();
        assert_eq!(k_jdelta(&kern, TruncationParams { j: 1.0, delta: 2.0 }).unwrap(), 0.0);
        let k = k_jdelta(&kern, TruncationParams::new(1.0, 0.5).unwrap()).unwrap();
        assert!(k >= 2.0 && k < 2.0 + 2e-3, "{k}");
        let mut last = f64::INFINITY;
        for dl in [0.1, 0.2, 0.4, 0.8] {
            let v = k_jdelta(&kern, TruncationParams::new(1.0, dl).unwrap()).unwrap();
            assert!(v <= last);
            last = v;
        }
    }

    #[test]
    fn truncated_pair_sum_identity() {
        let w = LatticeWindow::new(1, 32, 16.0, Topology::Periodic).unwrap();
        let kern = stable1();
        let c = build_cell_averaged(&w, &kern, 8, 8.0).unwrap();
        let t = TruncationParams::new(4.0, 0.25).unwrap();
        let op = TruncatedOperator::new(TruncatedSource::Discrete(&c), &w, t).unwrap();
        let p = restrict(&hat_at(8.0), &w, 16).unwrap();
        let e = extend(&p);
        let via_engine = op.form(&e, &e).unwrap();
        // Direct pair sum: (p_a - p_b)² 𝒞(a,b) times the area of the pair of
        // cells (clipped to B_j) at distance more than δ.
        let (lo, hi) = op.ball();
        let h = 1.0 / 32.0;
        let mut direct = 0.0;
        let n = w.num_sites();
        for a in 0..n {
            for b in (a + 1)..n {
                let diff = p.values()[a] - p.values()[b];
                if diff == 0.0 {
                    continue;
                }
                let (xa, xb) = (w.coords(a)[0], w.coords(b)[0]);
                let ia = ((xa - h / 2.0).max(lo), (xa + h / 2.0).min(hi));
                let ib = ((xb - h / 2.0).max(lo), (xb + h / 2.0).min(hi));
                if ia.1 <= ia.0 || ib.1 <= ib.0 {
                    continue;
                }
                // Area of {(x, y) ∈ ia × ib : |x - y| > δ} by fine midpoint rule.
                let m = 400;
                let mut area = 0.0;
                for i in 0..m {
                    let x = ia.0 + (i as f64 + 0.5) * (ia.1 - ia.0) / m as f64;
                    let excl = ((x + 0.25).min(ib.1) - (x - 0.25).max(ib.0)).max(0.0);
                    area += ((ib.1 - ib.0) - excl) * (ia.1 - ia.0) / m as f64;
                }
                direct += diff * diff * c.get(a, b) * area;
            }
        }
        assert!((via_engine.value - direct).abs() < 1e-6 * direct, "{} {direct}", via_engine.value);
        assert!(!via_engine.straddle_warning);
        let op_small = TruncatedOperator::new(TruncatedSource::Discrete(&c), &w, TruncationParams::new(4.0, 0.05).unwrap()).unwrap();
        assert!(op_small.straddle_warning());
    }

    fn random_pc(w: &LatticeWindow, seed: u64) -> ContinuumFunction {
        extend(&GridFunction::random(*w, -1.0, 1.0, seed))
    }

    #[test]
    fn generator_duality_and_constants() {
        let w = LatticeWindow::new(1, 16, 16.0, Topology::Periodic).unwrap();
        let kern = stable1();
        let t = TruncationParams::new(2.0, 0.25).unwrap();
        let c = build_pointwise(&w, &kern, 8.0).unwrap();
        for src in [TruncatedSource::Continuum(&kern), TruncatedSource::Discrete(&c)] {
            let op = TruncatedOperator::new(src, &w, t).unwrap();
            let one = extend(&GridFunction::constant(w, 1.0));
            assert!(op.apply(&one, &[7.0, 8.3, 9.9]).unwrap().iter().all(|&v| v == 0.0));
            let u = random_pc(&w, 1);
            let v = random_pc(&w, 2);
            let e = op.form(&u, &v).unwrap().value;
            let p = op.pairing(&u, &v).unwrap();
            assert!((e + p).abs() < 1e-6, "{e} {p}");
        }
    }

    #[test]
    fn form_is_bilinear_and_markovian() {
        let w = LatticeWindow::new(1, 8, 8.0, Topology::Periodic).unwrap();
        let c = build_cell_averaged(&w, &stable1(), 8, 4.0).unwrap();
        for seed in 0..50u64 {
            let u = GridFunction::random(w, -0.5, 1.5, seed);
            let v = GridFunction::random(w, -1.0, 1.0, seed + 100);
            let s = u.lin_comb(1.0, &v, 1.0).unwrap();
            let dfr = u.lin_comb(1.0, &v, -1.0).unwrap();
            let f = |a: &GridFunction| discrete_form(&c, a, a).unwrap().value;
            let lhs = f(&s) + f(&dfr);
            let rhs = 2.0 * f(&u) + 2.0 * f(&v);
            assert!((lhs - rhs).abs() < 1e-10 * rhs.max(1.0));
            assert!(f(&u) >= 0.0);
            let clamped = u.map(|x| x.clamp(0.0, 1.0));
            assert!(f(&clamped) <= f(&u) + 1e-12);
        }
    }

    #[test]
    fn killing_term_matches_zero_extension() {
        // Absorbing window: the form equals the periodic-free full-lattice
        // form of the zero extension, computed on a larger window.
        let kern = stable1();
        let small = LatticeWindow::new(1, 4, 4.0, Topology::Absorbing).unwrap();
        let big = LatticeWindow::with_sites(1, 4, 16 + 2 * 64, Topology::Absorbing).unwrap();
        let cs = build_pointwise(&small, &kern, 16.0).unwrap();
        let cb = build_pointwise(&big, &kern, 16.0).unwrap();
        let u = GridFunction::random(small, -1.0, 1.0, 4);
        let mut ub = GridFunction::zeros(big);
        for i in 0..16 {
            ub.values_mut()[64 + i] = u.values()[i];
        }
        let a = discrete_form(&cs, &u, &u).unwrap().value;
        let b = discrete_form(&cb, &ub, &ub).unwrap().value;
        // The big window still kills beyond its edge, 64 cells (16 units)
        // away, beyond the truncation radius.
        assert!((a - b).abs() < 1e-12 * a, "{a} {b}");
    }

    #[test]
    fn sweep_constant_and_hat() {
        let w = LatticeWindow::new(1, 8, 16.0, Topology::Periodic).unwrap();
        let kern = stable1();
        let one = ContinuumFunction::Analytic(AnalyticFunction::constant(1, 1.0));
        for r in form_convergence_sweep(&kern, &one, &w, &[8, 16], 8, 64.0).unwrap() {
            assert!(r.discrete_value.abs() < 1e-12 && r.target_value.abs() < 1e-12);
        }
        let rows = form_convergence_sweep(&kern, &hat_at(8.0), &w, &[8, 64], 8, 2000.0).unwrap();
        assert!(rows[1].abs_error < rows[0].abs_error);
    }

    #[test]
    fn truncated_bounds_for_random_functions() {
        let w = LatticeWindow::new(1, 32, 16.0, Topology::Periodic).unwrap();
        let kern = stable1();
        let t = TruncationParams::new(4.0, 0.25).unwrap();
        let kc = k_jdelta(&kern, t).unwrap();
        let op = TruncatedOperator::new(TruncatedSource::Continuum(&kern), &w, t).unwrap();
        for seed in 0..3 {
            let u = random_pc(&w, seed);
            let e = op.form(&u, &u).unwrap().value;
            let n2 = op.norm_sq(&u);
            let l2 = op.image_norm_sq(&u).unwrap();
            assert!(e <= kc * n2, "{e} {kc} {n2}");
            assert!(l2 <= kc * e, "{l2} {kc} {e}");
        }
    }

    /// Antisymmetric step on `B_1` with `δ = 0.9`: the truncated energy and the
    /// image norm exceed `K ‖u‖²` and `K ε` but respect twice those bounds.
    #[test]
    fn truncated_bounds_need_factor_two() {
        let w = LatticeWindow::new(1, 16, 8.0, Topology::Periodic).unwrap();
        let kern = stable1();
        let t = TruncationParams::new(1.0, 0.9).unwrap();
        let kc = k_jdelta(&kern, t).unwrap();
        assert!((kc - 0.611111).abs() < 1e-3, "{kc}");
        let g = GridFunction::from_fn(w, |x| if x[0] < 4.0 { -1.0 } else { 1.0 });
        let u = extend(&g);
        let op = TruncatedOperator::new(TruncatedSource::Continuum(&kern), &w, t).unwrap();
        let e = op.form(&u, &u).unwrap().value;
        let n2 = op.norm_sq(&u);
        let l2 = op.image_norm_sq(&u).unwrap();
        assert!(e > kc * n2 && e <= 2.0 * kc * n2, "{e} {kc} {n2}");
        assert!(l2 > kc * e && l2 <= 2.0 * kc * e, "{l2} {kc} {e}");
        // Step exactly at the centre (adaptive quadrature): 1.64887. The grid
        // step sits half a cell to the right.
        assert!((e - 1.64887).abs() < 0.03, "{e}");
    }
}
