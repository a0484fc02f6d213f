//! The scaled lattice `k⁻¹ℤ^d` on a finite computational window.
//!
//! Sites are `i / k` for integer multi-indices `0 <= i_j < L k`. Each site
//! owns the closed cube of side `1/k` centred on it, so `m_k(x) = k^{-d}`.
//! Bonds join sites at Euclidean distance `1/k`; the induced graph metric is
//! `k ‖x - y‖₁` (taken over the minimal periodic image on a torus).

use crate::error::{domain, Result};

/// Largest supported dimension.
pub const MAX_DIM: usize = 3;

/// Integer multi-index padded with zeros past the window dimension.
pub type MultiIndex = [i64; MAX_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    /// Opposite faces identified; the window is a torus.
    Periodic,
    /// No wraparound; leaving the window ends the process.
    Absorbing,
}

impl Topology {
    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Periodic => "periodic",
            Topology::Absorbing => "absorbing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LatticeWindow {
    d: usize,
    k: u32,
    n: usize,
    topology: Topology,
}

/// Geometry constants comparing the graph metric with the Euclidean one and
/// bounding cell diameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// `4 C3 / C1`, the graph-distance cutoff of the cell-averaged conductances.
    pub cutoff_threshold: f64,
}

impl LatticeWindow {
    /// Window of side `side_length` (a positive multiple of `1/k`).
    pub fn new(d: usize, k: u32, side_length: f64, topology: Topology) -> Result<Self> {
        if d == 0 || d > MAX_DIM {
            return domain(format!("dimension must be in 1..={MAX_DIM}, got {d}"));
        }
        if k == 0 {
            return domain("refinement level k must be positive");
        }
        if !(side_length.is_finite() && side_length > 0.0) {
            return domain(format!("window side must be positive, got {side_length}"));
        }
        let sites = side_length * k as f64;
        let n = sites.round();
        if (sites - n).abs() > 1e-9 * sites.max(1.0) || n < 1.0 {
            return domain(format!("window side {side_length} is not a multiple of 1/{k}"));
        }
        Ok(Self { d, k, n: n as usize, topology })
    }

    /// Window with `n_per_axis` sites per axis.
    pub fn with_sites(d: usize, k: u32, n_per_axis: usize, topology: Topology) -> Result<Self> {
        Self::new(d, k, n_per_axis as f64 / k as f64, topology)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn n_per_axis(&self) -> usize {
        self.n
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn side_length(&self) -> f64 {
        self.n as f64 / self.k as f64
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.k as f64
    }

    pub fn num_sites(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// Same geometry at another refinement level with the same side length.
    pub fn refine_to(&self, k: u32) -> Result<Self> {
        Self::new(self.d, k, self.side_length(), self.topology)
    }

    /// Same window with another topology.
    pub fn with_topology(&self, topology: Topology) -> Self {
        Self { topology, ..*self }
    }

    /// `m_k(x)`, identical for every site.
    pub fn cell_measure(&self) -> f64 {
        (self.k as f64).powi(-(self.d as i32))
    }

    /// Euclidean diameter of one cell, `√d / k`.
    pub fn cell_diameter(&self) -> f64 {
        (self.d as f64).sqrt() / self.k as f64
    }

    pub fn multi_index(&self, site: usize) -> MultiIndex {
        let mut idx = [0i64; MAX_DIM];
        let mut rem = site;
        for slot in idx.iter_mut().take(self.d) {
            *slot = (rem % self.n) as i64;
            rem /= self.n;
        }
        idx
    }

    /// Site for a multi-index; periodic windows wrap, absorbing ones return
    /// `None` outside.
    pub fn site_of(&self, idx: &MultiIndex) -> Option<usize> {
        let n = self.n as i64;
        let mut site = 0usize;
        let mut stride = 1usize;
        for &i in idx.iter().take(self.d) {
            let j = match self.topology {
                Topology::Periodic => i.rem_euclid(n),
                Topology::Absorbing => {
                    if i < 0 || i >= n {
                        return None;
                    }
                    i
                }
            };
            site += j as usize * stride;
            stride *= self.n;
        }
        Some(site)
    }

    pub fn coords(&self, site: usize) -> [f64; MAX_DIM] {
        let idx = self.multi_index(site);
        let mut c = [0.0; MAX_DIM];
        for a in 0..self.d {
            c[a] = idx[a] as f64 / self.k as f64;
        }
        c
    }

    /// Lattice multi-index of a point; errors when it is not a lattice point.
    pub fn lattice_index(&self, point: &[f64]) -> Result<MultiIndex> {
        if point.len() != self.d {
            return domain(format!("point has {} coordinates, window is {}-dimensional", point.len(), self.d));
        }
        let mut idx = [0i64; MAX_DIM];
        for (a, &x) in point.iter().enumerate() {
            let s = x * self.k as f64;
            let r = s.round();
            if !s.is_finite() || (s - r).abs() > 1e-9 * s.abs().max(1.0) {
                return domain(format!("coordinate {x} is not on the lattice 1/{}·Z", self.k));
            }
            idx[a] = r as i64;
        }
        Ok(idx)
    }

    /// Site at the given coordinates.
    pub fn site_at(&self, point: &[f64]) -> Result<usize> {
        let idx = self.lattice_index(point)?;
        match self.site_of(&idx) {
            Some(s) => Ok(s),
            None => domain(format!("point {point:?} lies outside the absorbing window")),
        }
    }

    /// Signed per-axis offset from `a` to `b` in lattice units, minimal
    /// periodic image on a torus.
    pub fn offset(&self, a: usize, b: usize) -> MultiIndex {
        let ia = self.multi_index(a);
        let ib = self.multi_index(b);
        let mut o = [0i64; MAX_DIM];
        for ax in 0..self.d {
            o[ax] = self.wrap_delta(ib[ax] - ia[ax]);
        }
        o
    }

    /// Reduce a raw index difference to its minimal image (periodic only).
    pub fn wrap_delta(&self, delta: i64) -> i64 {
        match self.topology {
            Topology::Absorbing => delta,
            Topology::Periodic => {
                let n = self.n as i64;
                let r = delta.rem_euclid(n);
                if 2 * r > n {
                    r - n
                } else {
                    r
                }
            }
        }
    }

    /// Graph distance `ρ_k` between two sites (number of bonds).
    pub fn graph_distance_sites(&self, a: usize, b: usize) -> u64 {
        self.offset(a, b).iter().take(self.d).map(|o| o.unsigned_abs()).sum()
    }

    /// Graph distance between two lattice points given by coordinates.
    pub fn graph_distance(&self, x: &[f64], y: &[f64]) -> Result<u64> {
        let a = self.site_at(x)?;
        let b = self.site_at(y)?;
        Ok(self.graph_distance_sites(a, b))
    }

    /// Euclidean distance between sites (minimal image on a torus).
    pub fn euclidean_distance_sites(&self, a: usize, b: usize) -> f64 {
        let o = self.offset(a, b);
        let s: i64 = o.iter().take(self.d).map(|v| v * v).sum();
        (s as f64).sqrt() / self.k as f64
    }

    /// Displacement `y - x` between arbitrary points, minimal image on a torus.
    pub fn displacement(&self, x: &[f64], y: &[f64]) -> [f64; MAX_DIM] {
        let l = self.side_length();
        let mut out = [0.0; MAX_DIM];
        for a in 0..self.d {
            let mut dlt = y[a] - x[a];
            if self.topology == Topology::Periodic {
                dlt -= l * (dlt / l).round();
            }
            out[a] = dlt;
        }
        out
    }

    /// Euclidean distance between arbitrary points (minimal image on a torus).
    pub fn point_distance(&self, x: &[f64], y: &[f64]) -> f64 {
        self.displacement(x, y).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Geometric centre of the window; always a lattice site.
    pub fn center(&self) -> [f64; MAX_DIM] {
        let mut c = [0.0; MAX_DIM];
        let mid = (self.n / 2) as f64 / self.k as f64;
        for v in c.iter_mut().take(self.d) {
            *v = mid;
        }
        c
    }

    pub fn center_site(&self) -> usize {
        let mut idx = [0i64; MAX_DIM];
        for v in idx.iter_mut().take(self.d) {
            *v = (self.n / 2) as i64;
        }
        self.site_of(&idx).expect("centre lies inside the window")
    }

    /// Sites whose distance to the centre is below `radius` (strictly).
    pub fn ball_sites(&self, radius: f64) -> Vec<usize> {
        let c = self.center();
        (0..self.num_sites())
            .filter(|&s| self.point_distance(&c[..self.d], &self.coords(s)[..self.d]) < radius)
            .collect()
    }

    /// Largest radius `r` for which the centred ball `B_r` fits in the window
    /// without wrapping or touching an absorbing face.
    pub fn inscribed_radius(&self) -> f64 {
        let c = self.center()[0];
        let lo = c + 0.5 / self.k as f64;
        let hi = self.side_length() - 0.5 / self.k as f64 - c;
        lo.min(hi)
    }

    /// Metric comparison and cell-diameter constants for cube cells.
    pub fn ag_constants(&self) -> AgConstants {
        let d = self.d as f64;
        let c1 = 1.0 / d.sqrt();
        let c3 = d.sqrt();
        AgConstants { c1, c2: 1.0, c3, cutoff_threshold: 4.0 * self.d as f64 }
    }

    /// Graph-distance cutoff as an integer number of bonds (`4d`).
    pub fn cutoff_bonds(&self) -> u64 {
        4 * self.d as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn graph_distance_examples() {
        let w = LatticeWindow::new(2, 4, 2.0, Topology::Periodic).unwrap();
        assert_eq!(w.graph_distance(&[0.0, 0.0], &[0.25, 0.25]).unwrap(), 2);
        let w1 = LatticeWindow::new(1, 3, 2.0, Topology::Absorbing).unwrap();
        assert_eq!(w1.graph_distance(&[1.0 / 3.0], &[1.0 / 3.0]).unwrap(), 0);
    }

    #[test]
    fn graph_distance_matches_cycle_bfs() {
        // d=1, k=2, L=4: an 8-cycle. Brute-force shortest path from 0 to 3.5.
        let w = LatticeWindow::new(1, 2, 4.0, Topology::Periodic).unwrap();
        let n = w.n_per_axis();
        let target = 7usize;
        let mut dist = vec![usize::MAX; n];
        dist[0] = 0;
        let mut queue = std::collections::VecDeque::from([0usize]);
        while let Some(v) = queue.pop_front() {
            for u in [(v + 1) % n, (v + n - 1) % n] {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        assert_eq!(dist[target], 1);
        assert_eq!(w.graph_distance(&[0.0], &[3.5]).unwrap(), dist[target] as u64);
    }

    #[test]
    fn off_lattice_is_a_domain_error() {
        let w = LatticeWindow::new(1, 2, 4.0, Topology::Periodic).unwrap();
        assert!(w.graph_distance(&[0.1], &[0.0]).is_err());
        let wa = w.with_topology(Topology::Absorbing);
        assert!(wa.site_at(&[5.0]).is_err());
    }

    #[test]
    fn cell_measure_examples() {
        let m = |d, k| LatticeWindow::new(d, k, 4.0, Topology::Periodic).unwrap().cell_measure();
        assert_eq!(m(1, 2), 0.5);
        assert_eq!(m(2, 4), 0.0625);
        assert_eq!(m(3, 1), 1.0);
    }

    #[test]
    fn partition_sums_to_volume() {
        for d in 1..=3 {
            for k in [2u32, 4, 8] {
                let w = LatticeWindow::new(d, k, 2.0, Topology::Periodic).unwrap();
                let total: f64 = (0..w.num_sites()).map(|_| w.cell_measure()).sum();
                let vol = 2f64.powi(d as i32);
                assert!((total - vol).abs() <= 4.0 * f64::EPSILON * vol * w.num_sites() as f64);
            }
        }
    }

    #[test]
    fn ag_constants_values() {
        let w1 = LatticeWindow::new(1, 2, 2.0, Topology::Periodic).unwrap();
        let a = w1.ag_constants();
        assert_eq!((a.c1, a.c2, a.c3, a.cutoff_threshold), (1.0, 1.0, 1.0, 4.0));
        let w2 = LatticeWindow::new(2, 2, 2.0, Topology::Periodic).unwrap();
        assert_eq!(w2.ag_constants().cutoff_threshold, 8.0);
        let w3 = LatticeWindow::new(3, 2, 2.0, Topology::Periodic).unwrap();
        assert_eq!(w3.ag_constants().c3, 3f64.sqrt());
    }

    fn check_sandwich(w: &LatticeWindow, a: usize, b: usize) {
        let ag = w.ag_constants();
        let k = w.k() as f64;
        let rk = w.graph_distance_sites(a, b) as f64;
        let rho = w.euclidean_distance_sites(a, b);
        assert!(ag.c1 / k * rk <= rho * (1.0 + 1e-15), "lower bound fails {a} {b}");
        assert!(rho <= ag.c2 / k * rk, "upper bound fails {a} {b}");
    }

    #[test]
    fn metric_sandwich_exhaustive_small_windows() {
        for d in 1..=2 {
            let w = LatticeWindow::new(d, 2, 2.0, Topology::Periodic).unwrap();
            for a in 0..w.num_sites() {
                for b in 0..w.num_sites() {
                    if a != b {
                        check_sandwich(&w, a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn metric_sandwich_random_pairs() {
        let mut rng = CounterRng::new(9);
        for d in 1..=3 {
            for k in [2u32, 4, 8] {
                let w = LatticeWindow::new(d, k, 4.0, Topology::Absorbing).unwrap();
                for _ in 0..1000 {
                    let a = (rng.next_u64() % w.num_sites() as u64) as usize;
                    let b = (rng.next_u64() % w.num_sites() as u64) as usize;
                    if a != b {
                        check_sandwich(&w, a, b);
                    }
                }
            }
        }
    }

    #[test]
    fn cell_diameter_bound() {
        // sup distance inside a cell equals the cube diagonal, C3/k.
        for d in 1..=3 {
            let w = LatticeWindow::new(d, 4, 1.0, Topology::Periodic).unwrap();
            let diag = (d as f64).sqrt() / 4.0;
            assert!((w.cell_diameter() - diag).abs() < 1e-15);
            assert!(w.cell_diameter() <= w.ag_constants().c3 / 4.0 + 1e-15);
        }
    }

    #[test]
    fn graph_distance_is_a_metric() {
        for topo in [Topology::Periodic, Topology::Absorbing] {
            let w = LatticeWindow::with_sites(2, 1, 5, topo).unwrap();
            let n = w.num_sites();
            for a in 0..n {
                assert_eq!(w.graph_distance_sites(a, a), 0);
                for b in 0..n {
                    let dab = w.graph_distance_sites(a, b);
                    assert_eq!(dab, w.graph_distance_sites(b, a));
                    if a != b {
                        assert!(dab > 0);
                    }
                    for c in 0..n {
                        assert!(dab <= w.graph_distance_sites(a, c) + w.graph_distance_sites(c, b));
                    }
                }
            }
        }
    }
}
