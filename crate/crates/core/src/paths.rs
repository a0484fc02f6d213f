//! Trajectories of the lattice chain: sampling, space–time scaling,
//! crossing counts, the convergence-in-measure distance and marginal
//! statistics.
//!
//! Draws are keyed by `(seed, path id, jump index)`: path `i` uses the
//! stream `(seed, i)` and jump `n` reads counters `2n` and `2n + 1`, so a
//! path does not depend on how paths are scheduled.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{domain, Result};
use crate::forms::{discrete_form, FormValue};
use crate::conductance::ConductanceMatrix;
use crate::lattice::{LatticeWindow, MAX_DIM};
use crate::resolvent::GeneratorMatrix;
use crate::rng::{unit_f64, CounterRng};
use crate::stats::{ks_statistic, mean_stderr};
use crate::transfer::GridFunction;

/// One trajectory on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub window: LatticeWindow,
    pub horizon: f64,
    /// Strictly increasing jump times in `(0, T]`.
    pub jump_times: Vec<f64>,
    /// Visited sites, one more than jumps.
    pub states: Vec<usize>,
    /// Time of the jump out of an absorbing window (the lifetime), if any.
    pub exit_time: Option<f64>,
    pub seed: u64,
    pub path_id: u64,
}

impl PathSample {
    pub fn exited(&self) -> bool {
        self.exit_time.is_some()
    }

    /// State at time `t`; `None` after the lifetime.
    pub fn state_at(&self, t: f64) -> Option<usize> {
        if let Some(z) = self.exit_time {
            if t >= z {
                return None;
            }
        }
        let i = self.jump_times.partition_point(|&s| s <= t);
        Some(self.states[i])
    }

    pub fn num_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Completed holding times `(site, duration)`; the last, censored one
    /// is left out.
    pub fn holding_times(&self) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.jump_times.len() + 1);
        let mut last = 0.0;
        for (i, &t) in self.jump_times.iter().enumerate() {
            out.push((self.states[i], t - last));
            last = t;
        }
        if let Some(z) = self.exit_time {
            out.push((self.states[self.states.len() - 1], z - last));
        }
        out
    }
}

/// Gillespie sampling: hold `Exp(λ(x))`, then jump to `y` with probability
/// `r(x, y)/λ(x)`, or leave the window with the killing rate.
pub fn sample_path(g: &GeneratorMatrix, x0: usize, horizon: f64, seed: u64, path_id: u64) -> Result<PathSample> {
    let w = *g.window();
    if x0 >= w.num_sites() {
        return domain(format!("start site {x0} outside the window"));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return domain("horizon must be finite and nonnegative");
    }
    let rng = CounterRng::with_stream(seed, path_id);
    let rates = g.total_rates();
    let mut p = PathSample {
        window: w,
        horizon,
        jump_times: Vec::new(),
        states: vec![x0],
        exit_time: None,
        seed,
        path_id,
    };
    let mut t = 0.0;
    let mut x = x0;
    for n in 0u64.. {
        let lam = rates[x];
        if lam <= 0.0 {
            break;
        }
        // 1 - U lies in (0, 1], so the logarithm is finite.
        t += -(1.0 - unit_f64(rng.at(2 * n))).ln() / lam;
        if t > horizon {
            break;
        }
        let u = unit_f64(rng.at(2 * n + 1)) * lam;
        match g.jump_target(x, u) {
            Some(y) => {
                p.jump_times.push(t);
                p.states.push(y);
                x = y;
            }
            None => {
                p.exit_time = Some(t);
                break;
            }
        }
    }
    Ok(p)
}

/// Paths `0..n` from a common start, in path order.
pub fn sample_paths(g: &GeneratorMatrix, x0: usize, horizon: f64, n: usize, seed: u64) -> Result<Vec<PathSample>> {
    (0..n as u64).into_par_iter().map(|i| sample_path(g, x0, horizon, seed, i)).collect()
}

/// Space–time scaling `X^{(k)}_t = k^{-1} X^{(1)}_{k^α t}` of a path on the
/// unit lattice: times divided by `k^α`, positions by `k`.
pub fn scale_path(p: &PathSample, k: u32, alpha: f64) -> Result<PathSample> {
    if p.window.k() != 1 {
        return domain("scaling starts from a path on the unit lattice");
    }
    let w = LatticeWindow::with_sites(p.window.d(), k, p.window.n_per_axis(), p.window.topology())?;
    let f = (k as f64).powf(alpha);
    Ok(PathSample {
        window: w,
        horizon: p.horizon / f,
        jump_times: p.jump_times.iter().map(|t| t / f).collect(),
        states: p.states.clone(),
        exit_time: p.exit_time.map(|z| z / f),
        seed: p.seed,
        path_id: p.path_id,
    })
}

/// Two separated site sets and a test function equal to 0 on the first
/// and 1 on the second.
#[derive(Debug, Clone)]
pub struct CrossingSpec {
    in_d1: Vec<bool>,
    in_d2: Vec<bool>,
    gap: f64,
    test_function: GridFunction,
}

impl CrossingSpec {
    /// Sets given as site lists; their Euclidean distance must be at least
    /// `min_gap > 0`. The test function is `(1 - dist(x, D2)/gap)⁺`.
    pub fn new(w: &LatticeWindow, d1: &[usize], d2: &[usize], min_gap: f64) -> Result<Self> {
        if !(min_gap > 0.0) {
            return domain("the sets need a positive minimum gap");
        }
        let n = w.num_sites();
        let mut in_d1 = vec![false; n];
        let mut in_d2 = vec![false; n];
        for &s in d1 {
            if s >= n {
                return domain(format!("site {s} outside the window"));
            }
            in_d1[s] = true;
        }
        for &s in d2 {
            if s >= n {
                return domain(format!("site {s} outside the window"));
            }
            if in_d1[s] {
                return domain("crossing sets overlap");
            }
            in_d2[s] = true;
        }
        if d1.is_empty() || d2.is_empty() {
            return domain("crossing sets must be nonempty");
        }
        let dist = |x: usize, set: &[usize]| set.iter().map(|&s| w.euclidean_distance_sites(x, s)).fold(f64::INFINITY, f64::min);
        let gap = d1.iter().map(|&a| dist(a, d2)).fold(f64::INFINITY, f64::min);
        if gap < min_gap {
            return domain(format!("crossing sets are {gap} apart, below the minimum gap {min_gap}"));
        }
        let values = (0..n).map(|x| if in_d2[x] { 1.0 } else { (1.0 - dist(x, d2) / gap).max(0.0) }).collect();
        let test_function = GridFunction::new(*w, values)?;
        Ok(Self { in_d1, in_d2, gap, test_function })
    }

    /// Sites whose offset from the window centre lies in the given boxes.
    pub fn from_boxes(w: &LatticeWindow, d1: (&[f64], &[f64]), d2: (&[f64], &[f64]), min_gap: f64) -> Result<Self> {
        let c = w.center();
        let pick = |lo: &[f64], hi: &[f64]| -> Vec<usize> {
            (0..w.num_sites())
                .filter(|&s| {
                    let x = w.coords(s);
                    let dsp = w.displacement(&c[..w.d()], &x[..w.d()]);
                    (0..w.d()).all(|a| dsp[a] >= lo[a] - 1e-12 && dsp[a] <= hi[a] + 1e-12)
                })
                .collect()
        };
        Self::new(w, &pick(d1.0, d1.1), &pick(d2.0, d2.1), min_gap)
    }

    pub fn gap(&self) -> f64 {
        self.gap
    }

    pub fn test_function(&self) -> &GridFunction {
        &self.test_function
    }

    pub fn in_d1(&self, s: usize) -> bool {
        self.in_d1[s]
    }

    pub fn in_d2(&self, s: usize) -> bool {
        self.in_d2[s]
    }
}

/// Completed crossings from `D1` into `D2`: a visit to `D1` arms the
/// counter, the next visit to `D2` counts one and disarms it.
pub fn count_crossings(p: &PathSample, spec: &CrossingSpec) -> Result<u64> {
    if p.window.num_sites() != spec.in_d1.len() {
        return domain("path and crossing sets live on different windows");
    }
    Ok(count_states(&p.states, spec))
}

fn count_states(states: &[usize], spec: &CrossingSpec) -> u64 {
    let mut armed = false;
    let mut n = 0;
    for &s in states {
        if spec.in_d1[s] {
            armed = true;
        } else if spec.in_d2[s] && armed {
            n += 1;
            armed = false;
        }
    }
    n
}

/// `∫_0^1 (ρ(p_t, q_t) ∧ 1) dt`, with the paths held at their last state
/// after their horizon; after a lifetime the path sits at a cemetery at
/// distance 1 from every site.
pub fn cm_distance(p: &PathSample, q: &PathSample) -> Result<f64> {
    if p.window != q.window {
        return domain("paths live on different windows");
    }
    let w = &p.window;
    let mut grid: Vec<f64> = vec![0.0, 1.0];
    for t in p.jump_times.iter().chain(&q.jump_times).chain(p.exit_time.iter()).chain(q.exit_time.iter()) {
        if *t < 1.0 {
            grid.push(*t);
        }
    }
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    let mut total = 0.0;
    for s in grid.windows(2) {
        let mid = 0.5 * (s[0] + s[1]);
        let rho = match (p.state_at(mid), q.state_at(mid)) {
            (Some(a), Some(b)) => {
                let (x, y) = (w.coords(a), w.coords(b));
                w.point_distance(&x[..w.d()], &y[..w.d()]).min(1.0)
            }
            (None, None) => 0.0,
            _ => 1.0,
        };
        total += rho * (s[1] - s[0]);
    }
    Ok(total)
}

/// Kolmogorov–Smirnov distance of one coordinate at time `t`, measured
/// from `origin` (minimal image on a torus), against a reference CDF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalKs {
    pub statistic: f64,
    pub used: usize,
    /// Fraction of paths dead by time `t` (excluded).
    pub excluded_fraction: f64,
}

pub fn marginal_ks(
    paths: &[PathSample],
    t: f64,
    coordinate: usize,
    origin: &[f64],
    reference_cdf: impl Fn(f64) -> f64,
) -> Result<MarginalKs> {
    let samples = marginal_samples(paths, t, coordinate, origin)?;
    let used = samples.len();
    Ok(MarginalKs {
        statistic: ks_statistic(&samples, reference_cdf),
        used,
        excluded_fraction: 1.0 - used as f64 / paths.len() as f64,
    })
}

/// Coordinates at time `t` of the surviving paths.
pub fn marginal_samples(paths: &[PathSample], t: f64, coordinate: usize, origin: &[f64]) -> Result<Vec<f64>> {
    if paths.len() < 100 {
        return domain("marginal statistics need at least 100 paths");
    }
    let w = paths[0].window;
    if coordinate >= w.d() || origin.len() != w.d() {
        return domain("coordinate or origin does not match the window dimension");
    }
    if paths.iter().any(|p| t > p.horizon) {
        return domain("time beyond the simulated horizon");
    }
    Ok(paths
        .iter()
        .filter_map(|p| p.state_at(t))
        .map(|s| {
            let x = w.coords(s);
            w.displacement(origin, &x[..w.d()])[coordinate]
        })
        .collect())
}

/// Holding-time sample mean at one site with its standard error and count.
pub fn holding_time_stats(paths: &[PathSample], site: usize) -> (f64, f64, usize) {
    let h: Vec<f64> = paths
        .iter()
        .flat_map(|p| p.holding_times())
        .filter(|(s, _)| *s == site)
        .map(|(_, d)| d)
        .collect();
    let (m, se) = mean_stderr(&h);
    (m, se, h.len())
}

/// Time spent at each site over `[0, horizon]` divided by the horizon.
pub fn occupation_frequencies(p: &PathSample) -> Vec<f64> {
    let mut occ = vec![0.0; p.window.num_sites()];
    let end = p.exit_time.unwrap_or(p.horizon);
    let mut last = 0.0;
    for (i, &t) in p.jump_times.iter().enumerate() {
        occ[p.states[i]] += t - last;
        last = t;
    }
    occ[p.states[p.states.len() - 1]] += end - last;
    occ.iter_mut().for_each(|v| *v /= p.horizon);
    occ
}

/// Crossing statistics for an initial law `φ m_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingReport {
    pub mean: f64,
    pub stderr: f64,
    pub phi_sup: f64,
    pub energy: FormValue,
    /// `2 ‖φ‖_∞ ε^{(k)}(g, g)`.
    pub bound: f64,
    pub paths: usize,
}

/// Sample start sites from `φ m_k` (φ ≥ 0 with `Σ φ m_k = 1`), run paths
/// on `[0, T]` and compare the mean crossing count with the energy bound.
pub fn crossing_experiment(
    c: &ConductanceMatrix,
    g: &GeneratorMatrix,
    spec: &CrossingSpec,
    phi: &GridFunction,
    n: usize,
    horizon: f64,
    seed: u64,
) -> Result<CrossingReport> {
    let w = g.window();
    if phi.window() != w || c.window() != w {
        return domain("density, conductances and generator live on different windows");
    }
    if phi.values().iter().any(|&v| v < 0.0) {
        return domain("initial density must be nonnegative");
    }
    let mk = w.cell_measure();
    let mut cum = Vec::with_capacity(w.num_sites());
    let mut acc = 0.0;
    for v in phi.values() {
        acc += v * mk;
        cum.push(acc);
    }
    if (acc - 1.0).abs() > 1e-9 {
        return domain(format!("initial density has mass {acc}, expected 1"));
    }
    // Start sites come from a stream of their own, disjoint from the jumps.
    let start_rng = CounterRng::with_stream(seed, u64::MAX);
    let counts: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let u = unit_f64(start_rng.at(i)) * acc;
            let x0 = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
            sample_path(g, x0, horizon, seed, i).map(|p| count_states(&p.states, spec) as f64)
        })
        .collect::<Result<_>>()?;
    let (mean, stderr) = mean_stderr(&counts);
    let tf = spec.test_function();
    let energy = discrete_form(c, tf, tf)?;
    let phi_sup = phi.sup_norm();
    Ok(CrossingReport { mean, stderr, phi_sup, energy, bound: 2.0 * phi_sup * energy.value, paths: n })
}

/// Paths as CSV rows `path_id,jump_index,time,x0[,x1[,x2]]`; jump index 0
/// is the start at time 0.
pub fn paths_to_csv(paths: &[PathSample]) -> String {
    let mut s = String::from("path_id,jump_index,time");
    let d = paths.first().map_or(1, |p| p.window.d());
    for a in 0..d {
        let _ = write!(s, ",x{a}");
    }
    s.push('\n');
    for p in paths {
        for (i, &st) in p.states.iter().enumerate() {
            let t = if i == 0 { 0.0 } else { p.jump_times[i - 1] };
            let x: [f64; MAX_DIM] = p.window.coords(st);
            let _ = write!(s, "{},{},{}", p.path_id, i, t);
            for v in x.iter().take(d) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}
