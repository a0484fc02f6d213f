//! `jumpgrid run <config.json>` and `jumpgrid validate <config.json>`.

mod config;
mod experiments;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{ExperimentConfig, FieldError};
use jumpgrid::forms::TruncationParams;

#[derive(Parser)]
#[command(name = "jumpgrid", version, about = "Lattice approximations of symmetric jump processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a configuration file.
    Run {
        config: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Output directory, overriding `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a configuration and the summability conditions at the
    /// coarsest level.
    Validate { config: PathBuf },
}

const SCHEMA_EXIT: u8 = 2;
const NUMERIC_EXIT: u8 = 3;

fn fail(code: u8, kind: &str, body: serde_json::Value) -> ExitCode {
    let msg = json!({ "error": { "code": code, "kind": kind, "details": body } });
    eprintln!("{msg}");
    ExitCode::from(code)
}

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| fail(SCHEMA_EXIT, "io", json!({ "path": path.display().to_string(), "message": e.to_string() })))?;
    let mut cfg = config::parse(&text).map_err(|errs| fail(SCHEMA_EXIT, "schema", json!(errs)))?;
    if let Ok(s) = std::env::var("JUMPGRID_SEED") {
        match s.parse::<u64>() {
            Ok(seed) => cfg.override_seed(seed),
            Err(_) => {
                return Err(fail(
                    SCHEMA_EXIT,
                    "schema",
                    json!([FieldError { field: "JUMPGRID_SEED".into(), message: format!("not an unsigned integer: {s:?}") }]),
                ))
            }
        }
    }
    Ok(cfg)
}

fn run(config: &Path, threads: Option<usize>, out: Option<PathBuf>) -> ExitCode {
    let cfg = match load(config) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(n) = threads {
        if n == 0 {
            return fail(SCHEMA_EXIT, "schema", json!([{ "field": "--threads", "message": "must be positive" }]));
        }
        // Only fails if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let dir = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let outcome = match experiments::run(&cfg) {
        Ok(o) => o,
        Err(e) => return fail(NUMERIC_EXIT, "numerical", json!({ "message": e.to_string(), "diagnostics": format!("{e:?}") })),
    };
    for (name, body) in &outcome.files {
        if body.lines().skip(1).flat_map(|l| l.split(',')).any(|v| v.parse::<f64>().is_ok_and(|x| !x.is_finite())) {
            return fail(NUMERIC_EXIT, "numerical", json!({ "message": format!("{name} contains non-finite values") }));
        }
    }
    if let Err(e) = std::fs::create_dir_all(&dir) {
        return fail(SCHEMA_EXIT, "io", json!({ "path": dir.display().to_string(), "message": e.to_string() }));
    }
    let mut names = Vec::new();
    for (name, body) in &outcome.files {
        if let Err(e) = std::fs::write(dir.join(name), body) {
            return fail(SCHEMA_EXIT, "io", json!({ "path": name, "message": e.to_string() }));
        }
        names.push(name.clone());
    }
    let summary = serde_json::to_string_pretty(&outcome.summary).expect("summary serializes");
    let _ = std::fs::write(dir.join("summary.json"), summary + "\n");
    let manifest = json!({
        "config": cfg,
        "versions": { "jumpgrid": env!("CARGO_PKG_VERSION") },
        "seeds": { "seed": cfg.seed, "field": cfg.field.as_ref().map(|f| f.seed) },
        "threads": rayon::current_num_threads(),
        "started_unix": started,
        "wall_clock_seconds": clock.elapsed().as_secs_f64(),
        "tolerances": outcome.tolerances,
        "files": names,
        "summary": outcome.summary,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    if let Err(e) = std::fs::write(dir.join("manifest.json"), text + "\n") {
        return fail(SCHEMA_EXIT, "io", json!({ "path": "manifest.json", "message": e.to_string() }));
    }
    println!("{}", dir.display());
    ExitCode::SUCCESS
}

fn validate(config: &Path) -> ExitCode {
    let text = match std::fs::read_to_string(config) {
        Ok(t) => t,
        Err(e) => return fail(SCHEMA_EXIT, "io", json!({ "message": e.to_string() })),
    };
    let mut warnings: Vec<String> = Vec::new();
    let errors: Vec<FieldError> = match config::parse(&text) {
        Err(errs) => errs,
        Ok(cfg) => {
            preflight(&cfg, &mut warnings);
            Vec::new()
        }
    };
    println!("{}", serde_json::to_string_pretty(&json!({ "errors": errors, "warnings": warnings })).unwrap());
    ExitCode::SUCCESS
}

/// Condition checks at the smallest level and the cutoff rule at the
/// largest.
fn preflight(cfg: &ExperimentConfig, warnings: &mut Vec<String>) {
    let kmin = cfg.k_list[0];
    let kmax = *cfg.k_list.last().unwrap();
    if let Some(t) = cfg.trunc {
        if let Ok(w) = cfg.window_at(kmax) {
            if t.delta < 2.0 * w.cell_diameter() {
                warnings.push(format!(
                    "delta = {} is below two cell diagonals ({}) at k = {kmax}",
                    t.delta,
                    2.0 * w.cell_diameter()
                ));
            }
        }
        if TruncationParams::new(t.j, t.delta).is_err() {
            warnings.push("truncation parameters rejected".into());
        }
    }
    let j = cfg.trunc.map_or(1.0, |t| t.j);
    let mut probe = || -> jumpgrid::Result<()> {
        let w = cfg.window_at(kmin)?;
        let c = jumpgrid::resolvent::build_level(&cfg.kernel()?, &w, &experiments_settings(cfg), None)?;
        let rep = c.check_conditions(j)?;
        if !rep.local_sums_finite {
            warnings.push(format!("row sums are not finite at k = {kmin}"));
        }
        // Both sums grow with the level for singular kernels; flag values
        // far above the continuum scale.
        let scale = cfg.kernel()?.tail_mass(1.0)?;
        if rep.cons1_sup > 1e3 * scale.max(1.0) * kmin as f64 {
            warnings.push(format!("cons1 = {:e} looks unbounded at k = {kmin}", rep.cons1_sup));
        }
        if rep.a1a_sup > 1e3 * scale.max(1.0) {
            warnings.push(format!("a1a = {:e} looks unbounded at k = {kmin}", rep.a1a_sup));
        }
        Ok(())
    };
    if let Err(e) = probe() {
        warnings.push(format!("condition check skipped: {e}"));
    }
}

fn experiments_settings(cfg: &ExperimentConfig) -> jumpgrid::resolvent::ConvergenceSettings {
    jumpgrid::resolvent::ConvergenceSettings {
        construction: match cfg.construction {
            config::ConstructionName::CellAveraged => {
                jumpgrid::resolvent::Construction::CellAveraged { quad_order: cfg.quad_order }
            }
            config::ConstructionName::Pointwise => jumpgrid::resolvent::Construction::Pointwise,
        },
        truncation_radius: cfg.truncation_radius,
        fold_tail: false,
        tol: cfg.tol,
        oracle_modes: 16,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, threads, out } => run(&config, threads, out),
        Command::Validate { config } => validate(&config),
    }
}
