//! The experiments behind `jumpgrid run`.

use serde_json::{json, Value};

use jumpgrid::conductance::ConductanceMatrix;
use jumpgrid::forms::{continuum_form, form_convergence_sweep, k_jdelta, TruncatedOperator, TruncatedSource, TruncationParams};
use jumpgrid::paths::{crossing_experiment, holding_time_stats, marginal_ks, paths_to_csv, sample_paths, CrossingSpec};
use jumpgrid::rcm::{rcm_experiment, RandomField};
use jumpgrid::resolvent::{
    assemble_generator, build_level, convergence_experiment, Construction, ConvergenceReport, ConvergenceSettings,
    Quantity,
};
use jumpgrid::stats::cauchy_cdf;
use jumpgrid::transfer::{approx_identity_error, extend, l2_inner, restrict, ContinuumFunction, GridFunction};
use jumpgrid::{JumpGridError, LatticeWindow, Topology};

use crate::config::{field_distribution, ConstructionName, Experiment, ExperimentConfig};

/// Files to write and a summary for the manifest.
pub struct Outcome {
    pub files: Vec<(String, String)>,
    pub summary: Value,
    pub tolerances: Value,
}

type Res<T> = std::result::Result<T, JumpGridError>;

pub fn run(cfg: &ExperimentConfig) -> Res<Outcome> {
    match cfg.experiment {
        Experiment::Operators => operators(cfg),
        Experiment::Forms => forms(cfg),
        Experiment::Mosco => mosco(cfg),
        Experiment::Simulate => simulate(cfg),
        Experiment::Crossings => crossings(cfg),
        Experiment::Rcm => rcm(cfg),
    }
}

fn settings(cfg: &ExperimentConfig) -> ConvergenceSettings {
    ConvergenceSettings {
        construction: match cfg.construction {
            ConstructionName::CellAveraged => Construction::CellAveraged { quad_order: cfg.quad_order },
            ConstructionName::Pointwise => Construction::Pointwise,
        },
        truncation_radius: cfg.truncation_radius,
        fold_tail: cfg.fold_tail && cfg.topology() == Topology::Periodic,
        tol: cfg.tol,
        oracle_modes: cfg.oracle_modes.unwrap_or(match cfg.d {
            1 => 256,
            2 => 64,
            _ => 32,
        }),
    }
}

fn conductances(cfg: &ExperimentConfig, w: &LatticeWindow) -> Res<ConductanceMatrix> {
    build_level(&cfg.kernel()?, w, &settings(cfg), None)
}

fn operators(cfg: &ExperimentConfig) -> Res<Outcome> {
    let f = ContinuumFunction::Analytic(cfg.function()?);
    let template = cfg.window_at(cfg.k_list[0])?;
    let q = cfg.quad_order;
    let curve = approx_identity_error(&f, &template, &cfg.k_list, q)?;
    let mut csv = String::from(
        "k,approx_error,identity_defect,isometry_defect,adjointness_defect,restricted_norm,continuum_norm\n",
    );
    for (i, &k) in cfg.k_list.iter().enumerate() {
        let w = cfg.window_at(k)?;
        let u = GridFunction::random(w, -1.0, 1.0, cfg.seed.wrapping_add(k as u64));
        let eu = extend(&u);
        let identity = restrict(&eu, &w, q)?.lin_comb(1.0, &u, -1.0)?.sup_norm();
        let isometry = (l2_inner(&w, &eu, &eu, q)?.sqrt() - u.norm()).abs();
        let adjoint = jumpgrid::transfer::adjointness_defect(&f, &u, q)?;
        let pf = restrict(&f, &w, q)?;
        let fnorm = l2_inner(&w, &f, &f, q)?.sqrt();
        csv.push_str(&format!(
            "{k},{:e},{:e},{:e},{:e},{:e},{:e}\n",
            curve.errors[i],
            identity,
            isometry,
            adjoint,
            pf.norm(),
            fnorm
        ));
    }
    Ok(Outcome {
        files: vec![("operators.csv".into(), csv)],
        summary: json!({ "support_warning": curve.support_warning }),
        tolerances: json!({ "transfer_operators": { "quad_order": q } }),
    })
}

fn forms(cfg: &ExperimentConfig) -> Res<Outcome> {
    let kern = cfg.kernel()?;
    let f = ContinuumFunction::Analytic(cfg.function()?);
    let template = cfg.window_at(cfg.k_list[0])?;
    let rows = form_convergence_sweep(&kern, &f, &template, &cfg.k_list, cfg.quad_order, cfg.truncation_radius)?;
    let mut csv = String::from("k,discrete_value,target_value,abs_error,quadrature_error\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{:e},{:e},{:e},{:e}\n",
            r.k, r.discrete_value, r.target_value, r.abs_error, r.quadrature_error
        ));
    }
    let mut files = vec![("form_convergence.csv".to_string(), csv)];
    let mut summary = json!({ "target_value": rows[0].target_value });
    if let (Some(t), 1) = (cfg.trunc, cfg.d) {
        let tp = TruncationParams::new(t.j, t.delta)?;
        let kc = k_jdelta(&kern, tp)?;
        let target = continuum_form(&kern, &f, &template, Some(tp))?;
        let mut csv = String::from("k,discrete_truncated,continuum_truncated,abs_error,straddle_warning\n");
        for &k in &cfg.k_list {
            let w = cfg.window_at(k)?;
            let c = conductances(cfg, &w)?;
            let op = TruncatedOperator::new(TruncatedSource::Discrete(&c), &w, tp)?;
            let v = op.form(&f, &f)?;
            csv.push_str(&format!(
                "{k},{:e},{:e},{:e},{}\n",
                v.value,
                target.value,
                (v.value - target.value).abs(),
                v.straddle_warning
            ));
        }
        files.push(("truncated_forms.csv".into(), csv));
        summary["k_jdelta"] = json!(kc);
        summary["continuum_truncated"] = json!(target.value);
    }
    Ok(Outcome {
        files,
        summary,
        tolerances: json!({ "dirichlet_forms": { "quad_order": cfg.quad_order, "truncation_radius": cfg.truncation_radius } }),
    })
}

fn convergence_csv(rep: &ConvergenceReport, q: Quantity) -> String {
    let mut s = String::from(ConvergenceReport::CSV_HEADER);
    s.push('\n');
    let only = ConvergenceReport { rows: rep.rows.iter().filter(|r| r.quantity == q).copied().collect(), f_norm: rep.f_norm };
    s.push_str(only.to_csv().split_once('\n').map_or("", |p| p.1));
    s
}

fn mosco(cfg: &ExperimentConfig) -> Res<Outcome> {
    let kern = cfg.kernel()?;
    let f = cfg.function()?;
    let template = cfg.window_at(cfg.k_list[0])?;
    let s = settings(cfg);
    let rep = convergence_experiment(&kern, &f, &template, &cfg.lambda_list, &cfg.t_list, &cfg.k_list, &s, None)?;
    let mut files = vec![("resolvent_convergence.csv".to_string(), convergence_csv(&rep, Quantity::Resolvent))];
    if !cfg.t_list.is_empty() {
        files.push(("semigroup_convergence.csv".into(), convergence_csv(&rep, Quantity::Semigroup)));
    }
    let sup: Vec<Value> = cfg
        .k_list
        .iter()
        .map(|&k| json!({ "k": k, "sup_semigroup_error": rep.sup_semigroup_error(k) }))
        .collect();
    Ok(Outcome {
        files,
        summary: json!({ "f_norm": rep.f_norm, "semigroup": sup }),
        tolerances: json!({ "resolvent_solver": { "tol": s.tol, "oracle_modes": s.oracle_modes } }),
    })
}

/// Start site: window centre plus the configured offset, on the lattice.
fn start_site(cfg: &ExperimentConfig, w: &LatticeWindow) -> Res<usize> {
    let c = w.center();
    let mut p = c[..cfg.d].to_vec();
    if let Some(x) = cfg.paths.as_ref().and_then(|p| p.x0.as_ref()) {
        for (a, v) in x.iter().enumerate() {
            p[a] = ((p[a] + v) * w.k() as f64).round() / w.k() as f64;
        }
    }
    w.site_at(&p)
}

fn simulate(cfg: &ExperimentConfig) -> Res<Outcome> {
    let pc = cfg.paths.as_ref().expect("checked by the schema");
    let kern = cfg.kernel()?;
    let mut csv = String::from("k,paths,survival_fraction,mean_jumps,neglected_tail_rate\n");
    let mut hold = String::from("k,site,visits,mean,stderr,expected\n");
    let mut summary = Vec::new();
    let mut files = Vec::new();
    for (i, &k) in cfg.k_list.iter().enumerate() {
        let w = cfg.window_at(k)?;
        let c = conductances(cfg, &w)?;
        let g = assemble_generator(&c);
        let x0 = start_site(cfg, &w)?;
        let paths = sample_paths(&g, x0, pc.horizon, pc.n, cfg.seed)?;
        let alive = paths.iter().filter(|p| !p.exited()).count();
        let jumps = paths.iter().map(|p| p.num_jumps()).sum::<usize>() as f64 / paths.len() as f64;
        csv.push_str(&format!(
            "{k},{},{:e},{:e},{:e}\n",
            paths.len(),
            alive as f64 / paths.len() as f64,
            jumps,
            c.neglected_tail_rate()
        ));
        let mut entry = json!({ "k": k, "survival_fraction": alive as f64 / paths.len() as f64 });
        // One-dimensional marginals of the α = 1 process are Cauchy with
        // scale ψ(e₁) t.
        if cfg.alpha == 1.0 && paths.len() >= 100 {
            let scale = kern.psi_radial(1.0)?.value * pc.horizon;
            let origin = w.coords(x0);
            let ks = marginal_ks(&paths, pc.horizon, 0, &origin[..cfg.d], |x| cauchy_cdf(x, scale))?;
            entry["ks_statistic"] = json!(ks.statistic);
            entry["ks_excluded_fraction"] = json!(ks.excluded_fraction);
            entry["cauchy_scale"] = json!(scale);
        }
        summary.push(entry);
        let ix = w.multi_index(x0);
        for off in 0..10i64 {
            let mut idx = ix;
            idx[0] += off - 5;
            if let Some(s) = w.site_of(&idx) {
                let (m, se, n) = holding_time_stats(&paths, s);
                if n >= 2 {
                    hold.push_str(&format!("{k},{s},{n},{m:e},{se:e},{:e}\n", 1.0 / g.total_rates()[s]));
                }
            }
        }
        if pc.export && i + 1 == cfg.k_list.len() {
            files.push(("paths.csv".to_string(), paths_to_csv(&paths)));
        }
    }
    files.insert(0, ("simulate.csv".into(), csv));
    files.insert(1, ("holding_times.csv".into(), hold));
    Ok(Outcome {
        files,
        summary: json!({ "levels": summary, "seed": cfg.seed }),
        tolerances: json!({ "path_simulator": { "truncation_radius": cfg.truncation_radius } }),
    })
}

fn crossings(cfg: &ExperimentConfig) -> Res<Outcome> {
    let pc = cfg.paths.as_ref().expect("checked by the schema");
    let cc = cfg.crossings.clone().unwrap_or_default();
    let d = cfg.d;
    let mut csv = String::from("k,paths,mean,stderr,energy,phi_sup,bound\n");
    for &k in &cfg.k_list {
        let w = cfg.window_at(k)?;
        let c = conductances(cfg, &w)?;
        let g = assemble_generator(&c);
        let lo1 = vec![cc.d1[0]; d];
        let hi1 = vec![cc.d1[1]; d];
        let lo2 = vec![cc.d2[0]; d];
        let hi2 = vec![cc.d2[1]; d];
        let gap = (cc.d2[0] - cc.d1[1]).max(cc.d1[0] - cc.d2[1]);
        let spec = CrossingSpec::from_boxes(&w, (&lo1, &hi1), (&lo2, &hi2), gap.max(1e-9))?;
        let ctr = w.center();
        let r = cc.phi_radius;
        let raw = GridFunction::from_fn(w, |x| (0..d).map(|a| (1.0 - (x[a] - ctr[a]).abs() / r).max(0.0)).product());
        let mass = raw.values().iter().sum::<f64>() * w.cell_measure();
        if !(mass > 0.0) {
            return Err(JumpGridError::Domain("initial density vanishes on the lattice".into()));
        }
        let phi = raw.map(|v| v / mass);
        let rep = crossing_experiment(&c, &g, &spec, &phi, pc.n, pc.horizon, cfg.seed)?;
        csv.push_str(&format!(
            "{k},{},{:e},{:e},{:e},{:e},{:e}\n",
            rep.paths, rep.mean, rep.stderr, rep.energy.value, rep.phi_sup, rep.bound
        ));
    }
    Ok(Outcome {
        files: vec![("crossings.csv".into(), csv)],
        summary: json!({ "seed": cfg.seed }),
        tolerances: json!({ "path_simulator": { "truncation_radius": cfg.truncation_radius } }),
    })
}

fn rcm(cfg: &ExperimentConfig) -> Res<Outcome> {
    let fc = cfg.field.as_ref().expect("checked by the schema");
    let dist = field_distribution(fc).map_err(JumpGridError::Domain)?;
    let field = RandomField::new(fc.seed, dist)?;
    let template = cfg.window_at(cfg.k_list[0])?;
    let rep = rcm_experiment(
        &cfg.kernel()?,
        &field,
        &cfg.function()?,
        &template,
        &cfg.k_list,
        cfg.lambda_list[0],
        &settings(cfg),
    )?;
    if let Some(w) = &rep.warning {
        eprintln!("warning: {w}");
    }
    Ok(Outcome {
        files: vec![("rcm_convergence.csv".into(), rep.to_csv())],
        summary: json!({ "seed": rep.seed, "dist": rep.dist, "warning": rep.warning }),
        tolerances: json!({ "resolvent_solver": { "tol": cfg.tol } }),
    })
}
