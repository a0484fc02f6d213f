//! Random conductance fields on unordered pairs of `ℤ^d`.
//!
//! Values are never stored: `ξ(x, y)` is a hash of the seed and the
//! canonically ordered pair, so a field covers arbitrarily large windows in
//! constant memory and is bit-reproducible.

use crate::error::{domain, Result};
use crate::kernels::JumpKernel;
use crate::lattice::{LatticeWindow, MultiIndex, Topology, MAX_DIM};
use crate::resolvent::{assemble_generator, build_level, resolvent_solve, ConvergenceSettings};
use crate::rng::{hash_words, unit_f64};
use crate::spectral::SpectralOracle;
use crate::transfer::AnalyticFunction;

/// Nonnegative weights on unordered pairs of integer points.
pub trait PairField: Sync {
    /// Weight of the pair `{x, y}`; must not depend on the argument order.
    fn weight(&self, x: &MultiIndex, y: &MultiIndex) -> f64;
}

/// Field equal to a constant on every pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantField(pub f64);

impl PairField for ConstantField {
    fn weight(&self, _: &MultiIndex, _: &MultiIndex) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldDistribution {
    /// Uniform on `[0, 2]`.
    Uniform02,
    /// Uniform on `[2 - c, c]` for `c` in `[1, 2]` (larger `c` clamps to 2);
    /// mean 1, bounded by `c`. `c = 1` is the constant field.
    Bounded(f64),
    /// `1/p` with probability `p`, otherwise 0.
    BernoulliMix(f64),
}

impl FieldDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FieldDistribution::Uniform02 => Ok(()),
            FieldDistribution::Bounded(c) => {
                if c >= 1.0 && c.is_finite() {
                    Ok(())
                } else {
                    domain(format!("bounded field needs c >= 1 for mean one, got {c}"))
                }
            }
            FieldDistribution::BernoulliMix(p) => {
                if p > 0.0 && p <= 1.0 {
                    Ok(())
                } else {
                    domain(format!("bernoulli_mix needs p in (0, 1], got {p}"))
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        1.0
    }

    pub fn variance(&self) -> f64 {
        match *self {
            FieldDistribution::Uniform02 => 1.0 / 3.0,
            FieldDistribution::Bounded(c) => {
                let w = 2.0 * (c.min(2.0) - 1.0);
                w * w / 12.0
            }
            FieldDistribution::BernoulliMix(p) => (1.0 - p) / p,
        }
    }

    /// Map a uniform draw on `[0, 1)` to a sample.
    pub fn sample(&self, u: f64) -> f64 {
        match *self {
            FieldDistribution::Uniform02 => 2.0 * u,
            FieldDistribution::Bounded(c) => {
                let c = c.min(2.0);
                (2.0 - c) + 2.0 * (c - 1.0) * u
            }
            FieldDistribution::BernoulliMix(p) => {
                if u < p {
                    1.0 / p
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match *self {
            FieldDistribution::Uniform02 => "uniform02".into(),
            FieldDistribution::Bounded(c) => format!("bounded({c})"),
            FieldDistribution::BernoulliMix(p) => format!("bernoulli_mix({p})"),
        }
    }
}

/// I.i.d. mean-one weights keyed by `(seed, canonical pair)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomField {
    pub seed: u64,
    pub dist: FieldDistribution,
}

impl RandomField {
    pub fn new(seed: u64, dist: FieldDistribution) -> Result<Self> {
        dist.validate()?;
        Ok(Self { seed, dist })
    }

    /// `ξ(x, y)` for distinct integer points of the same dimension.
    pub fn field_value(&self, x: &[i64], y: &[i64]) -> Result<f64> {
        if x.len() != y.len() || x.is_empty() || x.len() > MAX_DIM {
            return domain("field points must share a dimension in 1..=3");
        }
        if x == y {
            return domain("field is defined on pairs of distinct points");
        }
        let mut a = [0i64; MAX_DIM];
        let mut b = [0i64; MAX_DIM];
        a[..x.len()].copy_from_slice(x);
        b[..y.len()].copy_from_slice(y);
        Ok(self.weight(&a, &b))
    }

    fn key(x: &MultiIndex, y: &MultiIndex) -> [u64; 2 * MAX_DIM] {
        let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
        let mut w = [0u64; 2 * MAX_DIM];
        for i in 0..MAX_DIM {
            w[i] = lo[i] as u64;
            w[MAX_DIM + i] = hi[i] as u64;
        }
        w
    }
}

impl PairField for RandomField {
    #[inline]
    fn weight(&self, x: &MultiIndex, y: &MultiIndex) -> f64 {
        let bits = hash_words(self.seed, &Self::key(x, y));
        self.dist.sample(unit_f64(bits))
    }
}

/// Resolvent errors of one level with and without the random field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RcmRow {
    pub k: u32,
    pub lambda: f64,
    pub deterministic_error: f64,
    pub random_error: f64,
    /// `‖G^ξ_λ π_k f - G^1_λ π_k f‖_{k,2}` at the same level.
    pub random_minus_deterministic: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RcmReport {
    pub rows: Vec<RcmRow>,
    pub seed: u64,
    pub dist: String,
    /// Set in one dimension, where almost-sure convergence needs sparse
    /// subsequences of levels.
    pub warning: Option<String>,
}

impl RcmReport {
    pub const CSV_HEADER: &'static str = "k,lambda,deterministic_error,random_error,random_minus_deterministic";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:e},{:e},{:e}\n",
                r.k, r.lambda, r.deterministic_error, r.random_error, r.random_minus_deterministic
            ));
        }
        s
    }
}

/// For each level: conductances with and without the field, both resolvents
/// of `π_k f`, and their distances to the same spectral oracle.
pub fn rcm_experiment(
    kern: &JumpKernel,
    field: &RandomField,
    f: &AnalyticFunction,
    template: &LatticeWindow,
    k_list: &[u32],
    lambda: f64,
    settings: &ConvergenceSettings,
) -> Result<RcmReport> {
    if template.topology() != Topology::Periodic {
        return domain("oracle comparisons need a periodic window");
    }
    let warning = (template.d() == 1).then(|| {
        "in one dimension the field fluctuations are not summable along all levels; \
         convergence is only expected along sparse subsequences"
            .to_string()
    });
    let oracle = SpectralOracle::new(kern, template.side_length(), settings.oracle_modes)?;
    let fs = oracle.transform(f)?;
    let target = oracle.resolvent(lambda, &fs)?;
    let mut rows = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let w = template.refine_to(k)?;
        let pf = fs.restrict(&w)?;
        let det = assemble_generator(&build_level(kern, &w, settings, None)?);
        let ud = resolvent_solve(&det, lambda, &pf, settings.tol)?.solution;
        drop(det);
        let rnd = assemble_generator(&build_level(kern, &w, settings, Some(field))?);
        let ur = resolvent_solve(&rnd, lambda, &pf, settings.tol)?.solution;
        rows.push(RcmRow {
            k,
            lambda,
            deterministic_error: target.distance_to_grid(&ud)?,
            random_error: target.distance_to_grid(&ur)?,
            random_minus_deterministic: ur.lin_comb(1.0, &ud, -1.0)?.norm(),
        });
    }
    Ok(RcmReport { rows, seed: field.seed, dist: field.dist.name(), warning })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_point(rng: &mut CounterRng, d: usize) -> Vec<i64> {
        (0..d).map(|_| (rng.next_u64() % 2001) as i64 - 1000).collect()
    }

    #[test]
    fn symmetric_exactly() {
        let f = RandomField::new(5, FieldDistribution::Uniform02).unwrap();
        let mut rng = CounterRng::new(11);
        for i in 0..100_000 {
            let d = 1 + i % 3;
            let x = random_point(&mut rng, d);
            let y = random_point(&mut rng, d);
            if x == y {
                continue;
            }
            assert_eq!(f.field_value(&x, &y).unwrap(), f.field_value(&y, &x).unwrap());
        }
        assert!(f.field_value(&[1, 2], &[1, 2]).is_err());
    }

    #[test]
    fn uniform02_mean() {
        let f = RandomField::new(2024, FieldDistribution::Uniform02).unwrap();
        let n = 1_000_000i64;
        let mut s = 0.0;
        for i in 0..n {
            let v = f.field_value(&[i], &[i + 1 + i % 7]).unwrap();
            assert!((0.0..=2.0).contains(&v));
            s += v;
        }
        let mean = s / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * (1.0 / 3f64.sqrt()) / 1e3, "{mean}");
    }

    #[test]
    fn bernoulli_mix_moments() {
        let f = RandomField::new(77, FieldDistribution::BernoulliMix(0.25)).unwrap();
        let n = 1_000_000i64;
        let mut hits = 0usize;
        for i in 0..n {
            let v = f.field_value(&[i, 0], &[i, 3]).unwrap();
            assert!(v == 0.0 || v == 4.0);
            if v == 4.0 {
                hits += 1;
            }
        }
        let p = hits as f64 / n as f64;
        assert!((p - 0.25).abs() < 3.0 * (0.1875f64 / 1e6).sqrt(), "{p}");
    }

    #[test]
    fn bounded_range_and_mean() {
        for c in [1.0, 1.5, 2.0, 3.0] {
            let dist = FieldDistribution::Bounded(c);
            let f = RandomField::new(3, dist).unwrap();
            let mut s = 0.0;
            let n = 200_000;
            for i in 0..n {
                let v = f.field_value(&[i], &[-i - 1]).unwrap();
                assert!(v >= 0.0 && v <= c.min(2.0) + 1e-15);
                s += v;
            }
            let sd = dist.variance().sqrt();
            assert!((s / n as f64 - 1.0).abs() <= 4.0 * sd / (n as f64).sqrt() + 1e-12);
        }
        assert!(RandomField::new(1, FieldDistribution::Bounded(0.5)).is_err());
        assert!(RandomField::new(1, FieldDistribution::BernoulliMix(0.0)).is_err());
    }

    #[test]
    fn reseeding_reproduces_values() {
        let a = RandomField::new(42, FieldDistribution::Uniform02).unwrap();
        let b = RandomField::new(42, FieldDistribution::Uniform02).unwrap();
        let c = RandomField::new(43, FieldDistribution::Uniform02).unwrap();
        let v = a.field_value(&[0], &[2]).unwrap();
        assert_eq!(v.to_bits(), b.field_value(&[0], &[2]).unwrap().to_bits());
        assert_ne!(v, c.field_value(&[0], &[2]).unwrap());
    }
}
