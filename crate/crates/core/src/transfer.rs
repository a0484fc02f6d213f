//! Functions on the lattice and on the continuum, and the restriction
//! `π_k` (cell averages) and extension `E_k` (piecewise constants) between
//! them.
//!
//! Cells are the closed cubes of side `1/k` centred on the sites. On a
//! periodic window continuum functions live on the torus `[0, L)^d`; an
//! analytic function is read at the coordinate reduced into that box. On an
//! absorbing window they live on `ℝ^d` and piecewise-constant functions
//! vanish off the union of cells.

use std::fmt;
use std::sync::Arc;

use crate::error::{domain, Result};
use crate::lattice::{LatticeWindow, Topology, MAX_DIM};
use crate::quadrature::{breakpoints_within, GaussLegendre};
use crate::rng::CounterRng;
use crate::spectral::SpectralFunction;

/// Real values on the sites of a window, with the `m_k`-weighted inner
/// product `⟨f, g⟩_k = Σ f(x) g(x) m_k(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    window: LatticeWindow,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(window: LatticeWindow, values: Vec<f64>) -> Result<Self> {
        if values.len() != window.num_sites() {
            return domain(format!("expected {} values, got {}", window.num_sites(), values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return domain("grid function values must be finite");
        }
        Ok(Self { window, values })
    }

    pub fn zeros(window: LatticeWindow) -> Self {
        Self { window, values: vec![0.0; window.num_sites()] }
    }

    pub fn constant(window: LatticeWindow, c: f64) -> Self {
        Self { window, values: vec![c; window.num_sites()] }
    }

    /// Values `f(x)` at the site coordinates.
    pub fn from_fn(window: LatticeWindow, f: impl Fn(&[f64]) -> f64) -> Self {
        let d = window.d();
        let values = (0..window.num_sites()).map(|s| f(&window.coords(s)[..d])).collect();
        Self { window, values }
    }

    /// I.i.d. uniform values on `[lo, hi)`.
    pub fn random(window: LatticeWindow, lo: f64, hi: f64, seed: u64) -> Self {
        let mut rng = CounterRng::new(seed);
        let values = (0..window.num_sites()).map(|_| lo + (hi - lo) * rng.next_f64()).collect();
        Self { window, values }
    }

    pub fn window(&self) -> &LatticeWindow {
        &self.window
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn check_same(&self, other: &GridFunction) -> Result<()> {
        if self.window != other.window {
            return domain("grid functions live on different windows");
        }
        Ok(())
    }

    pub fn inner(&self, other: &GridFunction) -> Result<f64> {
        self.check_same(other)?;
        Ok(dot(&self.values, &other.values) * self.window.cell_measure())
    }

    /// `‖f‖_{k,2}`.
    pub fn norm(&self) -> f64 {
        (dot(&self.values, &self.values) * self.window.cell_measure()).sqrt()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction { window: self.window, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// `a·self + b·other`.
    pub fn lin_comb(&self, a: f64, other: &GridFunction, b: f64) -> Result<GridFunction> {
        self.check_same(other)?;
        let values = self.values.iter().zip(&other.values).map(|(x, y)| a * x + b * y).collect();
        Ok(GridFunction { window: self.window, values })
    }

    /// Value at the cell containing `point`; zero off an absorbing window.
    pub fn value_at_point(&self, point: &[f64]) -> f64 {
        match cell_of(&self.window, point) {
            Some(s) => self.values[s],
            None => 0.0,
        }
    }
}

/// Fixed-order summation so results do not depend on the caller.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four interleaved accumulators, combined in a fixed order.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            acc[j] += a[4 * i + j] * b[4 * i + j];
        }
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Site whose cell contains `point` (ties go to the upper cell).
fn cell_of(w: &LatticeWindow, point: &[f64]) -> Option<usize> {
    let k = w.k() as f64;
    let mut idx = [0i64; MAX_DIM];
    for a in 0..w.d() {
        idx[a] = (point[a] * k + 0.5).floor() as i64;
    }
    w.site_of(&idx)
}

type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Closed-form function with optional support box and per-axis kink
/// locations (where it is not smooth); quadrature splits at both.
#[derive(Clone)]
pub struct AnalyticFunction {
    d: usize,
    f: PointFn,
    support: Option<(Vec<f64>, Vec<f64>)>,
    kinks: Vec<Vec<f64>>,
    lipschitz: Option<f64>,
}

impl fmt::Debug for AnalyticFunction {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("AnalyticFunction")
            .field("d", &self.d)
            .field("support", &self.support)
            .field("kinks", &self.kinks)
            .finish()
    }
}

impl AnalyticFunction {
    pub fn new(d: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { d, f: Arc::new(f), support: None, kinks: vec![Vec::new(); d], lipschitz: None }
    }

    /// Declare the function zero outside the box `[lo, hi]`.
    pub fn with_support(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.support = Some((lo, hi));
        self
    }

    pub fn with_kinks(mut self, axis: usize, points: Vec<f64>) -> Self {
        self.kinks[axis].extend(points);
        self
    }

    pub fn with_lipschitz(mut self, c: f64) -> Self {
        self.lipschitz = Some(c);
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn support(&self) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.support.as_ref()
    }

    pub fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn kinks(&self, axis: usize) -> &[f64] {
        &self.kinks[axis]
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        if let Some((lo, hi)) = &self.support {
            if x.iter().zip(lo.iter().zip(hi)).any(|(v, (l, h))| v < l || v > h) {
                return 0.0;
            }
        }
        (self.f)(x)
    }

    /// Tensor hat `Π max(0, 1 - |x_i - c_i| / r)`, Lipschitz and compactly
    /// supported.
    pub fn hat(center: &[f64], radius: f64) -> Self {
        let d = center.len();
        let c = center.to_vec();
        let lo: Vec<f64> = c.iter().map(|v| v - radius).collect();
        let hi: Vec<f64> = c.iter().map(|v| v + radius).collect();
        let cc = c.clone();
        let mut f = Self::new(d, move |x| {
            x.iter().zip(&cc).map(|(v, m)| (1.0 - (v - m).abs() / radius).max(0.0)).product()
        })
        .with_support(lo, hi)
        .with_lipschitz(d as f64 / radius);
        for (a, m) in c.iter().enumerate() {
            f = f.with_kinks(a, vec![m - radius, *m, m + radius]);
        }
        f
    }

    /// `exp(-|x - c|² / (2σ²))`.
    pub fn gaussian(center: &[f64], sigma: f64) -> Self {
        let c = center.to_vec();
        Self::new(center.len(), move |x| {
            let r2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            (-r2 / (2.0 * sigma * sigma)).exp()
        })
        .with_lipschitz((-0.5f64).exp() / sigma)
    }

    pub fn constant(d: usize, c: f64) -> Self {
        Self::new(d, move |_| c).with_lipschitz(0.0)
    }
}

/// A function on the continuum in one of several representations; the
/// representation decides which identities hold exactly.
#[derive(Debug, Clone)]
pub enum ContinuumFunction {
    /// Closed form, integrated by quadrature.
    Analytic(AnalyticFunction),
    /// Constant on each cell of a window: the image of `E_k`.
    PiecewiseConstant(GridFunction),
    /// Values at the sites of a finer window of resolution `q·k`, read as
    /// constant on each fine cell.
    Tabulated { fine: GridFunction, q: u32 },
    /// Trigonometric polynomial on the torus.
    Spectral(SpectralFunction),
}

impl ContinuumFunction {
    pub fn d(&self) -> usize {
        match self {
            ContinuumFunction::Analytic(a) => a.d,
            ContinuumFunction::PiecewiseConstant(g) => g.window.d(),
            ContinuumFunction::Tabulated { fine, .. } => fine.window.d(),
            ContinuumFunction::Spectral(s) => s.d(),
        }
    }

    /// Tabulate `f` at the sites of the window refined `q` times.
    pub fn tabulate(f: &AnalyticFunction, w: &LatticeWindow, q: u32) -> Result<Self> {
        if q < 2 {
            return domain("tabulation factor q must be at least 2");
        }
        let fine_w = w.refine_to(w.k() * q)?;
        let fine = GridFunction::from_fn(fine_w, |x| eval_analytic(f, &fine_w, x));
        Ok(ContinuumFunction::Tabulated { fine, q })
    }

    /// Value at a point (window conventions in the module docs).
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ContinuumFunction::Analytic(a) => a.eval(x),
            ContinuumFunction::PiecewiseConstant(g) => g.value_at_point(x),
            ContinuumFunction::Tabulated { fine, .. } => fine.value_at_point(x),
            ContinuumFunction::Spectral(s) => s.eval(x),
        }
    }

    /// Per-axis discontinuity locations of the representation, within `[a, b]`.
    fn breaks(&self, axis: usize, a: f64, b: f64, out: &mut Vec<f64>) {
        match self {
            ContinuumFunction::Analytic(f) => {
                out.extend(f.kinks[axis].iter().copied().filter(|&p| p > a && p < b));
                if let Some((lo, hi)) = &f.support {
                    for p in [lo[axis], hi[axis]] {
                        if p > a && p < b {
                            out.push(p);
                        }
                    }
                }
            }
            ContinuumFunction::PiecewiseConstant(g) | ContinuumFunction::Tabulated { fine: g, .. } => {
                cell_boundaries(&g.window, a, b, out)
            }
            ContinuumFunction::Spectral(_) => {}
        }
    }
}

/// Analytic functions on a torus are read on the fundamental box `[0, L)^d`.
fn eval_analytic(f: &AnalyticFunction, w: &LatticeWindow, x: &[f64]) -> f64 {
    if w.topology() == Topology::Periodic {
        let l = w.side_length();
        let mut y = [0.0; MAX_DIM];
        for a in 0..x.len() {
            y[a] = x[a].rem_euclid(l);
        }
        f.eval(&y[..x.len()])
    } else {
        f.eval(x)
    }
}

fn cell_boundaries(w: &LatticeWindow, a: f64, b: f64, out: &mut Vec<f64>) {
    let k = w.k() as f64;
    let first = ((a * k) - 0.5).ceil() as i64;
    let last = ((b * k) - 0.5).floor() as i64;
    for i in first..=last {
        let p = (i as f64 + 0.5) / k;
        if p > a && p < b {
            out.push(p);
        }
    }
}

/// Integration box of one axis for functions on window `w`.
fn axis_domain(w: &LatticeWindow) -> (f64, f64) {
    match w.topology() {
        Topology::Periodic => (0.0, w.side_length()),
        Topology::Absorbing => {
            let h = 0.5 / w.k() as f64;
            (-h, w.side_length() - h)
        }
    }
}

/// Per-axis `(point, weight)` lists for `[a, b]`, split at `breaks`.
fn axis_rule(a: f64, b: f64, breaks: Vec<f64>, order: usize) -> Vec<(f64, f64)> {
    let pts = breakpoints_within(a, b, breaks);
    let gl = GaussLegendre::cached(order);
    let mut out = Vec::with_capacity(order * (pts.len() - 1));
    for s in pts.windows(2) {
        out.extend(gl.mapped(s[0], s[1]));
    }
    out
}

/// `∫_box Π` of a tensor product rule applied to `f`.
fn tensor_integrate(rules: &[Vec<(f64, f64)>], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let d = rules.len();
    let mut x = [0.0; MAX_DIM];
    let mut total = 0.0;
    match d {
        1 => {
            for &(p, w) in &rules[0] {
                x[0] = p;
                total += w * f(&x[..1]);
            }
        }
        2 => {
            for &(p0, w0) in &rules[0] {
                x[0] = p0;
                let mut row = 0.0;
                for &(p1, w1) in &rules[1] {
                    x[1] = p1;
                    row += w1 * f(&x[..2]);
                }
                total += w0 * row;
            }
        }
        _ => {
            for &(p0, w0) in &rules[0] {
                x[0] = p0;
                for &(p1, w1) in &rules[1] {
                    x[1] = p1;
                    let mut row = 0.0;
                    for &(p2, w2) in &rules[2] {
                        x[2] = p2;
                        row += w2 * f(&x[..3]);
                    }
                    total += w0 * w1 * row;
                }
            }
        }
    }
    total
}

/// Fraction of each target cell of one axis covered by each source cell.
fn axis_overlaps(target: &LatticeWindow, source: &LatticeWindow) -> Vec<Vec<(usize, f64)>> {
    let kt = target.k() as f64;
    let ks = source.k() as f64;
    let ns = source.n_per_axis() as i64;
    let periodic = source.topology() == Topology::Periodic;
    (0..target.n_per_axis())
        .map(|i| {
            let a = (i as f64 - 0.5) / kt;
            let b = (i as f64 + 0.5) / kt;
            let j0 = (a * ks - 0.5).floor() as i64;
            let j1 = (b * ks + 0.5).ceil() as i64;
            let mut row = Vec::new();
            for j in j0..=j1 {
                let lo = ((j as f64 - 0.5) / ks).max(a);
                let hi = ((j as f64 + 0.5) / ks).min(b);
                if hi <= lo {
                    continue;
                }
                let jj = if periodic {
                    j.rem_euclid(ns)
                } else if j < 0 || j >= ns {
                    continue;
                } else {
                    j
                };
                row.push((jj as usize, (hi - lo) * kt));
            }
            row
        })
        .collect()
}

fn restrict_grid(src: &GridFunction, w: &LatticeWindow) -> Result<GridFunction> {
    let sw = src.window;
    if sw.d() != w.d() || sw.topology() != w.topology() {
        return domain("restriction needs windows of equal dimension and topology");
    }
    if (sw.side_length() - w.side_length()).abs() > 1e-12 * w.side_length() {
        return domain("restriction needs windows of equal side length");
    }
    if sw == *w {
        return Ok(src.clone());
    }
    let ov = axis_overlaps(w, &sw);
    let d = w.d();
    let mut values = vec![0.0; w.num_sites()];
    for (s, out) in values.iter_mut().enumerate() {
        let it = w.multi_index(s);
        let mut acc = 0.0;
        let mut js = [0i64; MAX_DIM];
        match d {
            1 => {
                for &(j0, w0) in &ov[it[0] as usize] {
                    js[0] = j0 as i64;
                    acc += w0 * src.values[sw.site_of(&js).unwrap()];
                }
            }
            2 => {
                for &(j0, w0) in &ov[it[0] as usize] {
                    js[0] = j0 as i64;
                    for &(j1, w1) in &ov[it[1] as usize] {
                        js[1] = j1 as i64;
                        acc += w0 * w1 * src.values[sw.site_of(&js).unwrap()];
                    }
                }
            }
            _ => {
                for &(j0, w0) in &ov[it[0] as usize] {
                    js[0] = j0 as i64;
                    for &(j1, w1) in &ov[it[1] as usize] {
                        js[1] = j1 as i64;
                        for &(j2, w2) in &ov[it[2] as usize] {
                            js[2] = j2 as i64;
                            acc += w0 * w1 * w2 * src.values[sw.site_of(&js).unwrap()];
                        }
                    }
                }
            }
        }
        *out = acc;
    }
    GridFunction::new(*w, values)
}

/// `π_k f(x) = (1/m_k) ∫_{U_k(x)} f dm`. Exact for piecewise-constant and
/// tabulated inputs (overlap weights) and for spectral inputs (sinc
/// multipliers); tensor Gauss of `quad_order` per axis, split at kinks, for
/// analytic ones.
pub fn restrict(f: &ContinuumFunction, w: &LatticeWindow, quad_order: usize) -> Result<GridFunction> {
    if f.d() != w.d() {
        return domain("function and window dimensions differ");
    }
    match f {
        ContinuumFunction::PiecewiseConstant(g) => restrict_grid(g, w),
        ContinuumFunction::Tabulated { fine, .. } => restrict_grid(fine, w),
        ContinuumFunction::Spectral(s) => s.restrict(w),
        ContinuumFunction::Analytic(a) => {
            if !(1..=64).contains(&quad_order) {
                return domain("quad_order must be in 1..=64");
            }
            let k = w.k() as f64;
            let d = w.d();
            let l = w.side_length();
            let periodic = w.topology() == Topology::Periodic;
            let per_axis: Vec<Vec<Vec<(f64, f64)>>> = (0..d)
                .map(|ax| {
                    (0..w.n_per_axis())
                        .map(|i| {
                            let lo = (i as f64 - 0.5) / k;
                            let hi = (i as f64 + 0.5) / k;
                            let mut br = Vec::new();
                            f.breaks(ax, lo, hi, &mut br);
                            if periodic {
                                // The reduction into [0, L) jumps at multiples of L.
                                for m in [-1.0, 0.0, 1.0] {
                                    let p = m * l;
                                    if p > lo && p < hi {
                                        br.push(p);
                                    }
                                }
                                // Kinks of the reduced function repeat with period L.
                                let mut extra = Vec::new();
                                for m in [-1.0, 1.0] {
                                    let mut shifted = Vec::new();
                                    f.breaks(ax, lo - m * l, hi - m * l, &mut shifted);
                                    extra.extend(shifted.into_iter().map(|p| p + m * l));
                                }
                                br.extend(extra);
                            }
                            axis_rule(lo, hi, br, quad_order)
                        })
                        .collect()
                })
                .collect();
            let mk_inv = k.powi(d as i32);
            let values = (0..w.num_sites())
                .map(|s| {
                    let idx = w.multi_index(s);
                    let rules: Vec<Vec<(f64, f64)>> =
                        (0..d).map(|ax| per_axis[ax][idx[ax] as usize].clone()).collect();
                    tensor_integrate(&rules, |x| eval_analytic(a, w, x)) * mk_inv
                })
                .collect();
            GridFunction::new(*w, values)
        }
    }
}

/// `E_k g`, constant on each cell.
pub fn extend(g: &GridFunction) -> ContinuumFunction {
    ContinuumFunction::PiecewiseConstant(g.clone())
}

/// `f|_{V_k}`: values at the sites.
pub fn sample(f: &ContinuumFunction, w: &LatticeWindow) -> GridFunction {
    let d = w.d();
    GridFunction::from_fn(*w, |x| match f {
        ContinuumFunction::Analytic(a) => eval_analytic(a, w, &x[..d]),
        other => other.eval(&x[..d]),
    })
}

/// `∫ f g dm` over the window by tensor Gauss of `quad_order` per panel,
/// with panels split at every cell boundary and kink of both inputs. The
/// domain is the torus box on periodic windows and the union of the
/// absorbing window's cells otherwise.
pub fn l2_inner(
    w: &LatticeWindow,
    f: &ContinuumFunction,
    g: &ContinuumFunction,
    quad_order: usize,
) -> Result<f64> {
    if f.d() != w.d() || g.d() != w.d() {
        return domain("dimensions differ");
    }
    let (a, b) = axis_domain(w);
    let rules: Vec<Vec<(f64, f64)>> = (0..w.d())
        .map(|ax| {
            let mut br = Vec::new();
            f.breaks(ax, a, b, &mut br);
            g.breaks(ax, a, b, &mut br);
            cell_boundaries(w, a, b, &mut br);
            axis_rule(a, b, br, quad_order)
        })
        .collect();
    let ev = |h: &ContinuumFunction, x: &[f64]| match h {
        ContinuumFunction::Analytic(an) => eval_analytic(an, w, x),
        other => other.eval(x),
    };
    Ok(tensor_integrate(&rules, |x| ev(f, x) * ev(g, x)))
}

/// `‖f - g‖₂` over the window (see [`l2_inner`] for the domain).
pub fn l2_distance(
    w: &LatticeWindow,
    f: &ContinuumFunction,
    g: &ContinuumFunction,
    quad_order: usize,
) -> Result<f64> {
    if f.d() != w.d() || g.d() != w.d() {
        return domain("dimensions differ");
    }
    // Integrating the squared difference directly avoids cancellation.
    let (a, b) = axis_domain(w);
    let rules: Vec<Vec<(f64, f64)>> = (0..w.d())
        .map(|ax| {
            let mut br = Vec::new();
            f.breaks(ax, a, b, &mut br);
            g.breaks(ax, a, b, &mut br);
            cell_boundaries(w, a, b, &mut br);
            axis_rule(a, b, br, quad_order)
        })
        .collect();
    let ev = |h: &ContinuumFunction, x: &[f64]| match h {
        ContinuumFunction::Analytic(an) => eval_analytic(an, w, x),
        other => other.eval(x),
    };
    let direct = tensor_integrate(&rules, |x| {
        let e = ev(f, x) - ev(g, x);
        e * e
    });
    Ok(direct.max(0.0).sqrt())
}

/// `|⟨π_k f, g⟩_k - ⟨f, E_k g⟩|`, both sides at the same quadrature order.
pub fn adjointness_defect(f: &ContinuumFunction, g: &GridFunction, quad_order: usize) -> Result<f64> {
    let w = g.window();
    let lhs = restrict(f, w, quad_order)?.inner(g)?;
    let rhs = l2_inner(w, f, &extend(g), quad_order)?;
    Ok((lhs - rhs).abs())
}

/// Errors `‖E_k π_k f - f‖₂` along a list of refinement levels.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproxIdentityCurve {
    pub k_list: Vec<u32>,
    pub errors: Vec<f64>,
    /// Set when an absorbing window cuts the support of `f`.
    pub support_warning: bool,
}

pub fn approx_identity_error(
    f: &ContinuumFunction,
    template: &LatticeWindow,
    k_list: &[u32],
    quad_order: usize,
) -> Result<ApproxIdentityCurve> {
    let mut errors = Vec::with_capacity(k_list.len());
    let mut warn = false;
    if template.topology() == Topology::Absorbing {
        if let ContinuumFunction::Analytic(a) = f {
            match &a.support {
                Some((lo, hi)) => {
                    let l = template.side_length();
                    let h = 0.5 / template.k() as f64;
                    warn = lo.iter().any(|&v| v <= -h) || hi.iter().any(|&v| v >= l - h);
                }
                None => warn = true,
            }
        }
    }
    for &k in k_list {
        let w = template.refine_to(k)?;
        let p = restrict(f, &w, quad_order)?;
        errors.push(l2_distance(&w, &extend(&p), f, quad_order)?);
    }
    Ok(ApproxIdentityCurve { k_list: k_list.to_vec(), errors, support_warning: warn })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w1(k: u32, l: f64, topo: Topology) -> LatticeWindow {
        LatticeWindow::new(1, k, l, topo).unwrap()
    }

    #[test]
    fn restrict_examples() {
        let w = w1(2, 4.0, Topology::Absorbing);
        let c = ContinuumFunction::Analytic(AnalyticFunction::constant(1, 3.5));
        let r = restrict(&c, &w, 4).unwrap();
        assert!(r.values().iter().all(|&v| (v - 3.5).abs() < 1e-15));
        let lin = ContinuumFunction::Analytic(AnalyticFunction::new(1, |x| x[0]));
        let r = restrict(&lin, &w, 4).unwrap();
        assert!((r.values()[1] - 0.5).abs() < 1e-15);
        let sq = ContinuumFunction::Analytic(AnalyticFunction::new(1, |x| x[0] * x[0]));
        let r = restrict(&sq, &w, 4).unwrap();
        let exact = 2.0 * (0.75f64.powi(3) - 0.25f64.powi(3)) / 3.0;
        assert!((exact - 0.2708333333333333).abs() < 1e-15);
        assert!((r.values()[1] - exact).abs() < 1e-15);
    }

    #[test]
    fn extend_restrict_identities() {
        for topo in [Topology::Periodic, Topology::Absorbing] {
            let w = LatticeWindow::new(2, 4, 2.0, topo).unwrap();
            let g = GridFunction::random(w, -1.0, 1.0, 3);
            let e = extend(&g);
            let back = restrict(&e, &w, 4).unwrap();
            assert_eq!(back, g);
            let n2 = l2_inner(&w, &e, &e, 2).unwrap();
            assert!((n2.sqrt() - g.norm()).abs() < 1e-12);
            for s in [0, 5, 13] {
                let x = w.coords(s);
                assert_eq!(e.eval(&x[..2]), g.values()[s]);
            }
        }
    }

    #[test]
    fn adjointness_examples() {
        let w = w1(8, 4.0, Topology::Periodic);
        let g = GridFunction::random(w, -1.0, 1.0, 5);
        let f_pc = extend(&GridFunction::random(w, 0.0, 2.0, 6));
        assert!(adjointness_defect(&f_pc, &g, 4).unwrap() <= 1e-12);
        let bump = ContinuumFunction::Analytic(AnalyticFunction::gaussian(&[2.0], 0.4));
        assert!(adjointness_defect(&bump, &g, 8).unwrap() <= 1e-8);
        let z = GridFunction::zeros(w);
        assert_eq!(adjointness_defect(&bump, &z, 8).unwrap(), 0.0);
    }

    fn hat_error_closed_form(k: u32) -> f64 {
        // Hat on [-1, 1] (support inside the window, kinks on cell centres).
        // Integer-site cells at the kinks contribute h³/48 (centre, peak) and
        // 2·5h³/192 (the two support ends); the 2k - 2 others h³/12.
        let h = 1.0 / k as f64;
        (h.powi(3) * ((2 * k - 2) as f64 / 12.0 + 1.0 / 48.0 + 2.0 * 5.0 / 192.0)).sqrt()
    }

    #[test]
    fn hat_approximation_error_halves() {
        let w = w1(8, 8.0, Topology::Periodic);
        let hat = ContinuumFunction::Analytic(AnalyticFunction::hat(&[4.0], 1.0));
        let curve = approx_identity_error(&hat, &w, &[8, 16, 32], 8).unwrap();
        for (i, &k) in curve.k_list.iter().enumerate() {
            let want = hat_error_closed_form(k);
            assert!((curve.errors[i] - want).abs() < 1e-12, "k={k}: {} vs {want}", curve.errors[i]);
        }
        for i in 0..2 {
            let ratio = curve.errors[i] / curve.errors[i + 1];
            assert!((1.8..=2.2).contains(&ratio), "{ratio}");
        }
        assert!(!curve.support_warning);
    }

    #[test]
    fn constant_on_torus_has_no_error() {
        let w = w1(4, 4.0, Topology::Periodic);
        let one = ContinuumFunction::Analytic(AnalyticFunction::constant(1, 1.0));
        let c = approx_identity_error(&one, &w, &[4, 8], 4).unwrap();
        assert!(c.errors.iter().all(|&e| e < 1e-14));
    }

    #[test]
    fn piecewise_constant_error_same_level_zero() {
        let w8 = w1(8, 4.0, Topology::Periodic);
        let g = GridFunction::random(w8, 0.0, 1.0, 7);
        let f = extend(&g);
        let c = approx_identity_error(&f, &w8, &[8, 16], 4).unwrap();
        assert!(c.errors[0] < 1e-14);
        // Centred cells of level 16 straddle the boundaries of level 8 cells
        // (odd fine sites), so the next level is not exact. Each straddling
        // fine cell replaces two half-cells by their mean.
        let mut want = 0.0;
        let n8 = g.values().len();
        for i in 0..n8 {
            let a = g.values()[i];
            let b = g.values()[(i + 1) % n8];
            // Fine cell of width 1/16 split in halves of 1/32: error² = 2·(Δ/2)²/32.
            want += 2.0 * ((a - b) / 2.0).powi(2) / 32.0;
        }
        assert!((c.errors[1] - want.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn absorbing_support_warning() {
        let w = w1(4, 2.0, Topology::Absorbing);
        let hat = ContinuumFunction::Analytic(AnalyticFunction::hat(&[0.5], 1.0));
        assert!(approx_identity_error(&hat, &w, &[4], 4).unwrap().support_warning);
        let inner = ContinuumFunction::Analytic(AnalyticFunction::hat(&[1.0], 0.5));
        assert!(!approx_identity_error(&inner, &w, &[4], 4).unwrap().support_warning);
    }

    #[test]
    fn contraction_and_norm_convergence() {
        let w = w1(8, 4.0, Topology::Periodic);
        for seed in 0..100u64 {
            let f = ContinuumFunction::tabulate(
                &AnalyticFunction::new(1, move |x| ((seed as f64 + 1.0) * x[0]).sin() + 0.3),
                &w,
                4,
            )
            .unwrap();
            let p = restrict(&f, &w, 8).unwrap();
            let fnorm = l2_inner(&w, &f, &f, 2).unwrap().sqrt();
            assert!(p.norm() <= fnorm + 1e-8);
        }
        let g = ContinuumFunction::Analytic(AnalyticFunction::gaussian(&[2.0], 0.3));
        let fnorm = l2_inner(&w, &g, &g, 16).unwrap().sqrt();
        let mut last = f64::INFINITY;
        for k in [8u32, 16, 32, 64] {
            let wk = w.refine_to(k).unwrap();
            let gap = (restrict(&g, &wk, 8).unwrap().norm() - fnorm).abs();
            assert!(gap < last);
            last = gap;
        }
        let mut last = f64::INFINITY;
        for k in [8u32, 16, 32, 64] {
            let wk = w.refine_to(k).unwrap();
            let e = l2_distance(&wk, &extend(&sample(&g, &wk)), &g, 8).unwrap();
            assert!(e < last);
            last = e;
        }
    }
}
