//! The generator `A^{(k)}` of the lattice chain, its resolvent and
//! semigroup, and convergence against the spectral continuum oracle.
//!
//! Rates are `r(x, y) = 𝒞(x, y) m_k`. On an absorbing window the rate to
//! partners outside is a killing rate: it enters the diagonal but has no
//! in-window target.

use rayon::prelude::*;

use crate::conductance::{apply_random_field, build_cell_averaged, build_pointwise, ConductanceMatrix, Storage};
use crate::error::{domain, JumpGridError, Result};
use crate::kernels::JumpKernel;
use crate::lattice::{LatticeWindow, MultiIndex, Topology};
use crate::rcm::PairField;
use crate::spectral::{SpectralFunction, SpectralOracle};
use crate::transfer::{dot, AnalyticFunction, GridFunction};

#[derive(Debug, Clone)]
enum Rates {
    /// Translation-invariant rates by offset, with running sums for sampling.
    Stencil { entries: Vec<(MultiIndex, f64)>, cumulative: Vec<f64> },
    /// Symmetric rows (both directions stored).
    Rows { row_ptr: Vec<usize>, cols: Vec<u32>, rates: Vec<f64>, cumulative: Vec<f64> },
}

/// Sparse generator: off-diagonal rates and total jump rates `λ(x)`.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    window: LatticeWindow,
    rates: Rates,
    total: Vec<f64>,
    killing: Vec<f64>,
    max_rate: f64,
}

/// `A^{(k)}` with `r(x, y) = 𝒞(x, y) m_k`.
pub fn assemble_generator(c: &ConductanceMatrix) -> GeneratorMatrix {
    let w = *c.window();
    let mk = w.cell_measure();
    let n = w.num_sites();
    let killing = c.killing_rates();
    let (rates, total) = match c.storage() {
        Storage::Stencil(st) => {
            let entries: Vec<(MultiIndex, f64)> = st.entries().iter().map(|(o, v)| (*o, v * mk)).collect();
            let mut acc = 0.0;
            let cumulative: Vec<f64> = entries
                .iter()
                .map(|(_, r)| {
                    acc += r;
                    acc
                })
                .collect();
            // Every site sees the full stencil; on an absorbing window the
            // outside part is its killing rate.
            let total = vec![acc; n];
            (Rates::Stencil { entries, cumulative }, total)
        }
        Storage::Pairs(pl) => {
            let mut counts = vec![0usize; n + 1];
            for a in 0..n {
                let (cols, _) = pl.row(a);
                counts[a + 1] += cols.len();
                for &b in cols {
                    counts[b as usize + 1] += 1;
                }
            }
            for i in 0..n {
                counts[i + 1] += counts[i];
            }
            let row_ptr = counts.clone();
            let mut fill = counts;
            let len = row_ptr[n];
            let mut cols = vec![0u32; len];
            let mut rates = vec![0.0; len];
            // Lower partners first, then upper, so each row is sorted.
            for a in 0..n {
                let (cs, vs) = pl.row(a);
                for (&b, &v) in cs.iter().zip(vs) {
                    let b = b as usize;
                    cols[fill[b]] = a as u32;
                    rates[fill[b]] = v * mk;
                    fill[b] += 1;
                }
            }
            for a in 0..n {
                let (cs, vs) = pl.row(a);
                for (&b, &v) in cs.iter().zip(vs) {
                    cols[fill[a]] = b;
                    rates[fill[a]] = v * mk;
                    fill[a] += 1;
                }
            }
            let mut cumulative = vec![0.0; len];
            let mut total = vec![0.0; n];
            for a in 0..n {
                let mut acc = 0.0;
                for i in row_ptr[a]..row_ptr[a + 1] {
                    acc += rates[i];
                    cumulative[i] = acc;
                }
                total[a] = acc + killing[a];
            }
            (Rates::Rows { row_ptr, cols, rates, cumulative }, total)
        }
    };
    let max_rate = total.iter().fold(0.0f64, |m, &v| m.max(v));
    GeneratorMatrix { window: w, rates, total, killing, max_rate }
}

impl GeneratorMatrix {
    pub fn window(&self) -> &LatticeWindow {
        &self.window
    }

    /// Total jump rate `λ(x)` including killing.
    pub fn total_rates(&self) -> &[f64] {
        &self.total
    }

    pub fn killing_rates(&self) -> &[f64] {
        &self.killing
    }

    pub fn max_rate(&self) -> f64 {
        self.max_rate
    }

    fn partner(&self, ia: &MultiIndex, o: &MultiIndex) -> Option<usize> {
        let mut ib = *ia;
        for ax in 0..self.window.d() {
            ib[ax] += o[ax];
        }
        self.window.site_of(&ib)
    }

    /// In-window rates `(y, r(x, y))` of one site.
    pub fn row(&self, a: usize) -> Vec<(usize, f64)> {
        match &self.rates {
            Rates::Stencil { entries, .. } => {
                let ia = self.window.multi_index(a);
                entries.iter().filter_map(|(o, r)| self.partner(&ia, o).map(|b| (b, *r))).collect()
            }
            Rates::Rows { row_ptr, cols, rates, .. } => {
                (row_ptr[a]..row_ptr[a + 1]).map(|i| (cols[i] as usize, rates[i])).collect()
            }
        }
    }

    /// `r(a, b)`.
    pub fn rate(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 0.0;
        }
        self.row(a).iter().filter(|(y, _)| *y == b).map(|(_, r)| r).sum()
    }

    /// Next state of a jump from `a` given `u` uniform on `[0, λ(a))`;
    /// `None` for a jump out of the window.
    pub fn jump_target(&self, a: usize, u: f64) -> Option<usize> {
        match &self.rates {
            Rates::Stencil { entries, cumulative } => {
                let i = cumulative.partition_point(|&c| c <= u).min(entries.len() - 1);
                self.partner(&self.window.multi_index(a), &entries[i].0)
            }
            Rates::Rows { row_ptr, cols, cumulative, .. } => {
                let (s, e) = (row_ptr[a], row_ptr[a + 1]);
                let i = s + cumulative[s..e].partition_point(|&c| c <= u);
                if i < e {
                    Some(cols[i] as usize)
                } else if self.killing[a] > 0.0 {
                    None
                } else {
                    Some(cols[e - 1] as usize)
                }
            }
        }
    }

    /// `(A u)(x) = Σ_y r(x, y)(u(y) - u(x)) - κ(x) u(x)`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let n = self.window.num_sites();
        assert_eq!(u.len(), n, "vector length does not match the window");
        let mut out = vec![0.0; n];
        match &self.rates {
            Rates::Stencil { entries, .. } => {
                let w = &self.window;
                out.par_iter_mut().enumerate().for_each(|(a, o)| {
                    let ia = w.multi_index(a);
                    let ua = u[a];
                    let mut s = 0.0;
                    let mut kill = 0.0;
                    for (off, r) in entries {
                        match self.partner(&ia, off) {
                            Some(b) => s += r * (u[b] - ua),
                            None => kill += r,
                        }
                    }
                    *o = s - kill * ua;
                });
            }
            Rates::Rows { row_ptr, cols, rates, .. } => {
                let kill = &self.killing;
                out.par_iter_mut().enumerate().for_each(|(a, o)| {
                    let ua = u[a];
                    let mut s = 0.0;
                    for i in row_ptr[a]..row_ptr[a + 1] {
                        s += rates[i] * (u[cols[i] as usize] - ua);
                    }
                    *o = s - kill[a] * ua;
                });
            }
        }
        out
    }

    /// `⟨u, A v⟩_k`.
    pub fn pairing(&self, u: &GridFunction, v: &GridFunction) -> Result<f64> {
        self.check(u)?;
        self.check(v)?;
        Ok(dot(u.values(), &self.apply(v.values())) * self.window.cell_measure())
    }

    /// Largest `|Σ_y r(x, y) + κ(x) - λ(x)|` over sites.
    pub fn row_sum_defect(&self) -> f64 {
        (0..self.window.num_sites())
            .map(|a| {
                let s: f64 = self.row(a).iter().map(|(_, r)| r).sum::<f64>() + self.killing[a];
                (s - self.total[a]).abs()
            })
            .fold(0.0, f64::max)
    }

    fn check(&self, f: &GridFunction) -> Result<()> {
        if f.window() != &self.window {
            return domain("function and generator live on different windows");
        }
        Ok(())
    }
}

/// Solution of a resolvent equation with its final relative residual.
#[derive(Debug, Clone)]
pub struct Solve {
    pub solution: GridFunction,
    pub residual: f64,
    pub iterations: usize,
}

/// `u = (λ - A)^{-1} f` by conjugate gradients (`λ - A` is symmetric
/// positive definite; `m_k` is constant so the Euclidean product serves),
/// stopping at `‖(λ - A)u - f‖ ≤ tol ‖f‖`.
pub fn resolvent_solve(g: &GeneratorMatrix, lambda: f64, f: &GridFunction, tol: f64) -> Result<Solve> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return domain(format!("lambda must be positive, got {lambda}"));
    }
    if !(tol > 0.0) {
        return domain("tolerance must be positive");
    }
    g.check(f)?;
    let n = f.values().len();
    let b = f.values();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok(Solve { solution: GridFunction::zeros(*f.window()), residual: 0.0, iterations: 0 });
    }
    let op = |x: &[f64]| -> Vec<f64> {
        let ax = g.apply(x);
        x.iter().zip(ax).map(|(xi, a)| lambda * xi - a).collect()
    };
    // Jacobi-free start: x0 = f / (λ + λ(x)).
    let mut x: Vec<f64> = b.iter().zip(&g.total).map(|(bi, t)| bi / (lambda + t)).collect();
    let ax = op(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, a)| bi - a).collect();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let cap = 10 * n + 1000;
    let mut it = 0;
    while rr.sqrt() > tol * bnorm {
        if it >= cap {
            return Err(JumpGridError::NoConvergence { iterations: it, residual: rr.sqrt() / bnorm });
        }
        let ap = op(&p);
        let alpha = rr / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        it += 1;
        // Guard against drift of the recursive residual.
        if it % 50 == 0 {
            let ax = op(&x);
            r = b.iter().zip(&ax).map(|(bi, a)| bi - a).collect();
            rr = dot(&r, &r);
        }
    }
    let ax = op(&x);
    let res: Vec<f64> = b.iter().zip(&ax).map(|(bi, a)| bi - a).collect();
    let residual = dot(&res, &res).sqrt() / bnorm;
    Ok(Solve { solution: GridFunction::new(*f.window(), x)?, residual, iterations: it })
}

/// Largest `Λ t` handled in one uniformization step.
const CHUNK: f64 = 400.0;

/// `T_t f = e^{-Λt} Σ_n (Λt)^n / n! Pⁿ f` with `P = I + A/Λ`, `Λ = max_rate`.
/// The series stops once the Poisson tail is below `tol`; the kept weights
/// are renormalised to sum to one so constants are preserved exactly on a
/// torus. Large `Λ t` is split into chunks.
pub fn semigroup_apply(g: &GeneratorMatrix, t: f64, f: &GridFunction, tol: f64) -> Result<GridFunction> {
    if !(t >= 0.0 && t.is_finite()) {
        return domain(format!("time must be nonnegative, got {t}"));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return domain("tolerance must lie in (0, 1)");
    }
    g.check(f)?;
    let big = g.max_rate;
    if t == 0.0 || big == 0.0 {
        return Ok(f.clone());
    }
    let chunks = ((big * t) / CHUNK).ceil().max(1.0) as usize;
    let dt = t / chunks as f64;
    let lt = big * dt;
    // Poisson(Λ dt) weights up to a tail of tol / chunks.
    let mut weights = vec![(-lt).exp()];
    let mut acc = weights[0];
    let eps = tol / chunks as f64;
    while 1.0 - acc > eps {
        let n = weights.len() as f64;
        let next = weights[weights.len() - 1] * lt / n;
        weights.push(next);
        acc += next;
        if weights.len() > 100_000 {
            return Err(JumpGridError::Internal("uniformization series did not terminate".into()));
        }
    }
    let norm: f64 = weights.iter().sum();
    let mut v = f.values().to_vec();
    for _ in 0..chunks {
        let mut out: Vec<f64> = v.iter().map(|x| x * weights[0] / norm).collect();
        let mut pv = v.clone();
        for wn in &weights[1..] {
            let a = g.apply(&pv);
            for (p, ai) in pv.iter_mut().zip(a) {
                *p += ai / big;
            }
            for (o, p) in out.iter_mut().zip(&pv) {
                *o += wn / norm * p;
            }
        }
        v = out;
    }
    GridFunction::new(*f.window(), v)
}

/// Spectral `G_λ f`.
pub fn oracle_resolvent(oracle: &SpectralOracle, lambda: f64, f: &SpectralFunction) -> Result<SpectralFunction> {
    oracle.resolvent(lambda, f)
}

/// Spectral `T_t f`.
pub fn oracle_semigroup(oracle: &SpectralOracle, t: f64, f: &SpectralFunction) -> Result<SpectralFunction> {
    oracle.semigroup(t, f)
}

/// How the conductances of each level are built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Construction {
    CellAveraged { quad_order: usize },
    Pointwise,
}

/// Settings of a convergence run.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceSettings {
    pub construction: Construction,
    pub truncation_radius: f64,
    /// Spread the kernel mass beyond the truncation radius over the torus.
    pub fold_tail: bool,
    pub tol: f64,
    /// Fourier modes per axis of the oracle.
    pub oracle_modes: usize,
}

/// Conductances of one level with the settings applied.
pub fn build_level(
    kern: &JumpKernel,
    w: &LatticeWindow,
    s: &ConvergenceSettings,
    field: Option<&dyn PairField>,
) -> Result<ConductanceMatrix> {
    let mut c = match s.construction {
        Construction::CellAveraged { quad_order } => build_cell_averaged(w, kern, quad_order, s.truncation_radius)?,
        Construction::Pointwise => build_pointwise(w, kern, s.truncation_radius)?,
    };
    if s.fold_tail {
        c = c.fold_far_tail(kern)?;
    }
    if let Some(fld) = field {
        c = apply_random_field(&c, fld);
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Resolvent,
    Semigroup,
}

impl Quantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::Resolvent => "resolvent",
            Quantity::Semigroup => "semigroup",
        }
    }
}

/// One comparison `‖E_k X^{(k)} π_k f - X f‖₂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceRow {
    pub quantity: Quantity,
    pub k: u32,
    pub lambda_or_t: f64,
    pub l2_error: f64,
    pub solver_residual: f64,
    pub oracle_error_bound: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// `‖f‖₂` of the oracle representation.
    pub f_norm: f64,
}

impl ConvergenceReport {
    /// Rows of one quantity at one level.
    pub fn rows_for(&self, q: Quantity, k: u32) -> impl Iterator<Item = &ConvergenceRow> {
        self.rows.iter().filter(move |r| r.quantity == q && r.k == k)
    }

    /// Largest semigroup error over the times at one level.
    pub fn sup_semigroup_error(&self, k: u32) -> f64 {
        self.rows_for(Quantity::Semigroup, k).map(|r| r.l2_error).fold(0.0, f64::max)
    }

    pub const CSV_HEADER: &'static str = "quantity,k,lambda_or_t,l2_error,solver_residual,oracle_error_bound";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{:e},{:e},{:e}\n",
                r.quantity.as_str(),
                r.k,
                r.lambda_or_t,
                r.l2_error,
                r.solver_residual,
                r.oracle_error_bound
            ));
        }
        s
    }
}

/// Resolvent and semigroup errors per level against the spectral oracle on
/// a periodic window.
pub fn convergence_experiment(
    kern: &JumpKernel,
    f: &AnalyticFunction,
    template: &LatticeWindow,
    lambda_list: &[f64],
    t_list: &[f64],
    k_list: &[u32],
    settings: &ConvergenceSettings,
    field: Option<&dyn PairField>,
) -> Result<ConvergenceReport> {
    if template.topology() != Topology::Periodic {
        return domain("oracle comparisons need a periodic window");
    }
    let l = template.side_length();
    let oracle = SpectralOracle::new(kern, l, settings.oracle_modes)?;
    let fs = oracle.transform(f)?;
    let res_targets: Vec<(SpectralFunction, f64)> = lambda_list
        .iter()
        .map(|&lam| Ok((oracle.resolvent(lam, &fs)?, oracle.resolvent_error_bound(lam, &fs))))
        .collect::<Result<_>>()?;
    let sg_targets: Vec<(SpectralFunction, f64)> = t_list
        .iter()
        .map(|&t| Ok((oracle.semigroup(t, &fs)?, oracle.semigroup_error_bound(t, &fs))))
        .collect::<Result<_>>()?;
    let mut report = ConvergenceReport { rows: Vec::new(), f_norm: fs.norm_sq().sqrt() };
    for &k in k_list {
        let w = template.refine_to(k)?;
        let c = build_level(kern, &w, settings, field)?;
        let g = assemble_generator(&c);
        let pf = fs.restrict(&w)?;
        for (&lam, (target, bound)) in lambda_list.iter().zip(&res_targets) {
            let s = resolvent_solve(&g, lam, &pf, settings.tol)?;
            report.rows.push(ConvergenceRow {
                quantity: Quantity::Resolvent,
                k,
                lambda_or_t: lam,
                l2_error: target.distance_to_grid(&s.solution)?,
                solver_residual: s.residual,
                oracle_error_bound: *bound,
            });
        }
        for (&t, (target, bound)) in t_list.iter().zip(&sg_targets) {
            let u = semigroup_apply(&g, t, &pf, settings.tol)?;
            report.rows.push(ConvergenceRow {
                quantity: Quantity::Semigroup,
                k,
                lambda_or_t: t,
                l2_error: target.distance_to_grid(&u)?,
                solver_residual: settings.tol,
                oracle_error_bound: *bound,
            });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forms::discrete_form;

    fn cauchy() -> JumpKernel {
        JumpKernel::stable(1, 1.0, 1.0).unwrap()
    }

    #[test]
    fn small_generators() {
        let w = LatticeWindow::new(1, 1, 4.0, Topology::Periodic).unwrap();
        let empty = ConductanceMatrix::from_pairs(w, [], 1.0, 0.0).unwrap();
        let g = assemble_generator(&empty);
        assert_eq!(g.max_rate(), 0.0);
        assert!(g.apply(&[1.0, 2.0, 3.0, 4.0]).iter().all(|&v| v == 0.0));
        let one = ConductanceMatrix::from_pairs(w, [(0, 1, 2.5)], 1.0, 0.0).unwrap();
        let g = assemble_generator(&one);
        assert_eq!(g.rate(0, 1), 2.5);
        assert_eq!(g.rate(1, 0), 2.5);
        assert_eq!(g.total_rates()[0], 2.5);
        assert_eq!(g.apply(&[1.0, 0.0, 0.0, 0.0]), vec![-2.5, 2.5, 0.0, 0.0]);
    }

    #[test]
    fn generator_matches_form() {
        for topo in [Topology::Periodic, Topology::Absorbing] {
            let w = LatticeWindow::new(1, 8, 4.0, topo).unwrap();
            let c = build_cell_averaged(&w, &cauchy(), 8, 3.0).unwrap();
            let g = assemble_generator(&c);
            assert!(g.row_sum_defect() <= 1e-12);
            for seed in 0..20 {
                let u = GridFunction::random(w, -1.0, 1.0, seed);
                let e = discrete_form(&c, &u, &u).unwrap().value;
                assert!((g.pairing(&u, &u).unwrap() + e).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn resolvent_basics() {
        let w = LatticeWindow::new(1, 8, 4.0, Topology::Periodic).unwrap();
        let g = assemble_generator(&build_cell_averaged(&w, &cauchy(), 8, 100.0).unwrap());
        let one = GridFunction::constant(w, 1.0);
        let s = resolvent_solve(&g, 2.0, &one, 1e-10).unwrap();
        assert!(s.solution.values().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let f = GridFunction::random(w, 0.0, 1.0, 5);
        let lam = 1e4;
        let s = resolvent_solve(&g, lam, &f, 1e-10).unwrap();
        let dev = s.solution.map(|v| v * lam).lin_comb(1.0, &f, -1.0).unwrap().norm() / f.norm();
        assert!(dev < 1e-2, "{dev}");
        assert!(s.residual <= 1e-10);
    }

    #[test]
    fn semigroup_basics() {
        let w = LatticeWindow::new(1, 8, 4.0, Topology::Periodic).unwrap();
        let g = assemble_generator(&build_cell_averaged(&w, &cauchy(), 8, 100.0).unwrap());
        let f = GridFunction::random(w, -1.0, 1.0, 1);
        assert_eq!(semigroup_apply(&g, 0.0, &f, 1e-12).unwrap(), f);
        let c = GridFunction::constant(w, 3.0);
        let tc = semigroup_apply(&g, 2.5, &c, 1e-12).unwrap();
        assert!(tc.values().iter().all(|&v| (v - 3.0).abs() < 1e-10));
        let a = semigroup_apply(&g, 0.3, &semigroup_apply(&g, 0.7, &f, 1e-13).unwrap(), 1e-13).unwrap();
        let b = semigroup_apply(&g, 1.0, &f, 1e-13).unwrap();
        assert!(a.lin_comb(1.0, &b, -1.0).unwrap().sup_norm() < 1e-7);
    }

    #[test]
    fn chunked_uniformization_matches_resolvent_limit() {
        // Large Λt: T_t f approaches the mean for a connected torus chain.
        let w = LatticeWindow::new(1, 4, 2.0, Topology::Periodic).unwrap();
        let g = assemble_generator(&build_cell_averaged(&w, &cauchy(), 8, 50.0).unwrap());
        let f = GridFunction::random(w, 0.0, 1.0, 9);
        let mean = f.values().iter().sum::<f64>() / 8.0;
        let t = 1000.0 / g.max_rate();
        let u = semigroup_apply(&g, t, &f, 1e-12).unwrap();
        assert!(u.values().iter().all(|&v| (v - mean).abs() < 1e-9));
    }
}
