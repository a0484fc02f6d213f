use jumpgrid::conductance::{build_cell_averaged, build_pointwise};
use jumpgrid::forms::{
    continuum_form, discrete_form, form_convergence_sweep, TruncatedOperator, TruncatedSource, TruncationParams,
};
use jumpgrid::transfer::{extend, restrict, AnalyticFunction, ContinuumFunction, GridFunction};
use jumpgrid::{JumpKernel, LatticeWindow, Topology};
use proptest::prelude::*;

/// `ε(hat, hat)` on the torus of side 16 for the Cauchy kernel, from the
/// Plancherel series (checked in the unit tests to 1e-7).
const TORUS_HAT_ENERGY: f64 = 2.759704459;

fn cauchy() -> JumpKernel {
    JumpKernel::stable(1, 1.0, 1.0).unwrap()
}

fn hat() -> ContinuumFunction {
    ContinuumFunction::Analytic(AnalyticFunction::hat(&[8.0], 1.0))
}

#[test]
fn hat_sweep_converges() {
    let w = LatticeWindow::new(1, 8, 16.0, Topology::Periodic).unwrap();
    let rows = form_convergence_sweep(&cauchy(), &hat(), &w, &[8, 16, 32, 64], 8, 1.0e4).unwrap();
    assert!((rows[0].target_value - TORUS_HAT_ENERGY).abs() < 1e-8);
    for p in rows.windows(2) {
        assert!(p[1].abs_error < p[0].abs_error);
    }
    let rel = rows[3].abs_error / rows[3].target_value;
    assert!(rel < 0.05, "{rel}");
    // The cutoff removes pairs closer than four cells, so the error is
    // first order in 1/k: about 28% at k = 8 and halving per level.
    let rel8 = rows[0].abs_error / rows[0].target_value;
    assert!((rel8 - 0.2807).abs() < 1e-3, "{rel8}");
    for p in rows.windows(2) {
        let ratio = p[0].abs_error / p[1].abs_error;
        assert!((1.8..2.1).contains(&ratio), "{ratio}");
    }
}

#[test]
fn truncated_discrete_form_approaches_continuum() {
    let w = LatticeWindow::new(1, 8, 16.0, Topology::Absorbing).unwrap();
    let kern = cauchy();
    let t = TruncationParams::new(4.0, 0.25).unwrap();
    let target = continuum_form(&kern, &hat(), &w, Some(t)).unwrap().value;
    let mut last = f64::INFINITY;
    for k in [8u32, 16, 32, 64] {
        let wk = w.refine_to(k).unwrap();
        let c = build_cell_averaged(&wk, &kern, 8, 16.0).unwrap();
        let op = TruncatedOperator::new(TruncatedSource::Discrete(&c), &wk, t).unwrap();
        let err = (op.form(&hat(), &hat()).unwrap().value - target).abs();
        assert!(err < last, "k = {k}: {err} after {last}");
        last = err;
    }
    assert!(last < 2e-3);
}

/// Dyadic refinement does not lower the energy of grid functions here:
/// centred cells do not nest and the finer level sees pairs the coarse
/// cutoff removed. The ratio of `ε^{(2i)}(π_{2i} E_i f)` to `ε^{(i)}(f)` for
/// random `f` stays near 1.6.
#[test]
fn dyadic_refinement_energy_ratio() {
    let kern = cauchy();
    let w = LatticeWindow::new(1, 8, 16.0, Topology::Periodic).unwrap();
    for i in [8u32, 16] {
        let wi = w.refine_to(i).unwrap();
        let wk = w.refine_to(2 * i).unwrap();
        let ci = build_cell_averaged(&wi, &kern, 8, 1.0e4).unwrap();
        let ck = build_cell_averaged(&wk, &kern, 8, 1.0e4).unwrap();
        for seed in 0..20 {
            let f = GridFunction::random(wi, -1.0, 1.0, seed);
            let p = restrict(&extend(&f), &wk, 4).unwrap();
            let ratio = discrete_form(&ck, &p, &p).unwrap().value / discrete_form(&ci, &f, &f).unwrap().value;
            assert!(ratio > 1.3 && ratio < 1.7, "i = {i}: {ratio}");
        }
    }
}

#[test]
fn pointwise_and_cell_averaged_agree_away_from_the_diagonal() {
    let kern = cauchy();
    let w = LatticeWindow::new(1, 32, 16.0, Topology::Absorbing).unwrap();
    let t = TruncationParams::new(4.0, 0.5).unwrap();
    let a = build_cell_averaged(&w, &kern, 8, 16.0).unwrap();
    let b = build_pointwise(&w, &kern, 16.0).unwrap();
    let u = extend(&GridFunction::random(w, -1.0, 1.0, 3));
    let fa = TruncatedOperator::new(TruncatedSource::Discrete(&a), &w, t).unwrap().form(&u, &u).unwrap().value;
    let fb = TruncatedOperator::new(TruncatedSource::Discrete(&b), &w, t).unwrap().form(&u, &u).unwrap().value;
    assert!((fa - fb).abs() < 0.01 * fa, "{fa} {fb}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn parallelogram_law(seed in 0u64..1_000_000, absorbing in any::<bool>()) {
        let topo = if absorbing { Topology::Absorbing } else { Topology::Periodic };
        let w = LatticeWindow::new(1, 8, 4.0, topo).unwrap();
        let c = build_pointwise(&w, &cauchy(), 4.0).unwrap();
        let u = GridFunction::random(w, -1.0, 1.0, seed);
        let v = GridFunction::random(w, -1.0, 1.0, seed ^ 0xabc);
        let e = |a: &GridFunction| discrete_form(&c, a, a).unwrap().value;
        let lhs = e(&u.lin_comb(1.0, &v, 1.0).unwrap()) + e(&u.lin_comb(1.0, &v, -1.0).unwrap());
        let rhs = 2.0 * e(&u) + 2.0 * e(&v);
        prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs);
        let cross = discrete_form(&c, &u, &v).unwrap().value;
        prop_assert!((4.0 * cross - (lhs - 2.0 * e(&u.lin_comb(1.0, &v, -1.0).unwrap()))).abs() < 1e-9 * rhs);
    }

    #[test]
    fn unit_contraction(seed in 0u64..1_000_000) {
        let w = LatticeWindow::new(2, 4, 4.0, Topology::Periodic).unwrap();
        let kern = JumpKernel::stable(2, 1.0, 1.0).unwrap();
        let c = build_cell_averaged(&w, &kern, 6, 3.0).unwrap();
        let u = GridFunction::random(w, -0.5, 1.5, seed);
        let cl = u.map(|x| x.clamp(0.0, 1.0));
        prop_assert!(discrete_form(&c, &cl, &cl).unwrap().value <= discrete_form(&c, &u, &u).unwrap().value + 1e-12);
    }
}
