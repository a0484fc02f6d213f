//! Experiment configuration: JSON with unknown keys rejected and every
//! numeric field range-checked.

use serde::{Deserialize, Serialize};

use jumpgrid::rcm::FieldDistribution;
use jumpgrid::transfer::AnalyticFunction;
use jumpgrid::{JumpKernel, LatticeWindow, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Operators,
    Forms,
    Mosco,
    Simulate,
    Crossings,
    Rcm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyName {
    Periodic,
    Absorbing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstructionName {
    CellAveraged,
    Pointwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    #[serde(rename = "L")]
    pub side_length: f64,
    pub topology: TopologyName,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncConfig {
    pub j: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    /// `uniform02`, `bounded` or `bernoulli_mix`.
    pub dist: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Start point as an offset from the window centre (default: centre).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Write every path to `paths.csv`.
    #[serde(default)]
    pub export: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossingsConfig {
    pub d1: [f64; 2],
    pub d2: [f64; 2],
    /// Radius of the hat-shaped initial density.
    pub phi_radius: f64,
}

impl Default for CrossingsConfig {
    fn default() -> Self {
        Self { d1: [-0.5, 0.5], d2: [2.0, 3.0], phi_radius: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FunctionConfig {
    Gaussian { sigma: f64 },
    Hat { radius: f64 },
    Constant { value: f64 },
}

fn default_construction() -> ConstructionName {
    ConstructionName::CellAveraged
}

fn default_true() -> bool {
    true
}

fn default_function() -> FunctionConfig {
    FunctionConfig::Gaussian { sigma: 0.5 }
}

fn default_output() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub d: usize,
    pub alpha: f64,
    pub amp: f64,
    pub window: WindowConfig,
    pub k_list: Vec<u32>,
    #[serde(default)]
    pub lambda_list: Vec<f64>,
    #[serde(default)]
    pub t_list: Vec<f64>,
    pub truncation_radius: f64,
    pub quad_order: usize,
    #[serde(default = "default_construction")]
    pub construction: ConstructionName,
    /// Spread the kernel mass beyond the truncation radius over a torus.
    #[serde(default = "default_true")]
    pub fold_tail: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trunc: Option<TruncConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<PathsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crossings: Option<CrossingsConfig>,
    /// Test function, centred in the window.
    #[serde(default = "default_function")]
    pub function: FunctionConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_modes: Option<usize>,
    #[serde(default = "default_output")]
    pub output_dir: String,
}

fn default_tol() -> f64 {
    1e-10
}

/// A schema violation with the path of the offending field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

/// Parse and check a configuration.
pub fn parse(text: &str) -> Result<ExperimentConfig, Vec<FieldError>> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        // serde names the field in backticks: "unknown field `x`", "missing field `y`".
        let field = msg.split('`').nth(1).unwrap_or("").to_string();
        vec![FieldError { field, message: msg }]
    })?;
    let errs = cfg.check();
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(errs)
    }
}

impl ExperimentConfig {
    /// Range checks; empty when the configuration is usable.
    pub fn check(&self) -> Vec<FieldError> {
        let mut e = Vec::new();
        if !(1..=3).contains(&self.d) {
            e.push(FieldError::new("d", format!("dimension must be 1, 2 or 3, got {}", self.d)));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            e.push(FieldError::new("alpha", format!("alpha must lie in (0, 2), got {}", self.alpha)));
        }
        if !(self.amp > 0.0 && self.amp.is_finite()) {
            e.push(FieldError::new("amp", "amp must be positive"));
        }
        if !(self.window.side_length > 0.0 && self.window.side_length.is_finite()) {
            e.push(FieldError::new("window.L", "window side must be positive"));
        }
        if self.k_list.is_empty() {
            e.push(FieldError::new("k_list", "at least one level is needed"));
        }
        for (i, &k) in self.k_list.iter().enumerate() {
            if k == 0 {
                e.push(FieldError::new(&format!("k_list[{i}]"), "levels must be positive"));
            } else if self.window.side_length > 0.0
                && LatticeWindow::new(self.d.clamp(1, 3), k, self.window.side_length, Topology::Periodic).is_err()
            {
                e.push(FieldError::new(&format!("k_list[{i}]"), format!("window side is not a multiple of 1/{k}")));
            }
        }
        if self.k_list.windows(2).any(|p| p[1] <= p[0]) {
            e.push(FieldError::new("k_list", "levels must be strictly increasing"));
        }
        for (i, &l) in self.lambda_list.iter().enumerate() {
            if !(l > 0.0 && l.is_finite()) {
                e.push(FieldError::new(&format!("lambda_list[{i}]"), "lambda must be positive"));
            }
        }
        for (i, &t) in self.t_list.iter().enumerate() {
            if !(t >= 0.0 && t.is_finite()) {
                e.push(FieldError::new(&format!("t_list[{i}]"), "times must be nonnegative"));
            }
        }
        if !(self.truncation_radius > 0.0) {
            e.push(FieldError::new("truncation_radius", "truncation radius must be positive"));
        }
        if !(1..=64).contains(&self.quad_order) {
            e.push(FieldError::new("quad_order", "quad_order must lie in 1..=64"));
        }
        if !(self.tol > 0.0 && self.tol < 1e-2) {
            e.push(FieldError::new("tol", "tol must lie in (0, 0.01)"));
        }
        if let Some(m) = self.oracle_modes {
            if !(4..=4096).contains(&m) {
                e.push(FieldError::new("oracle_modes", "oracle_modes must lie in 4..=4096"));
            }
        }
        if let Some(t) = self.trunc {
            if !(t.j > 0.0) {
                e.push(FieldError::new("trunc.j", "j must be positive"));
            }
            if !(t.delta > 0.0 && t.delta < t.j) {
                e.push(FieldError::new("trunc.delta", "delta must lie in (0, j)"));
            }
            let half = self.window.side_length / 2.0;
            if t.j + 2.0 > half {
                e.push(FieldError::new("trunc.j", format!("ball B_(j+2) of radius {} overflows L/2 = {half}", t.j + 2.0)));
            }
        }
        if let Some(f) = &self.field {
            if let Err(msg) = field_distribution(f) {
                e.push(FieldError::new("field.dist", msg));
            }
        }
        if let Some(p) = &self.paths {
            if p.n == 0 {
                e.push(FieldError::new("paths.n", "at least one path"));
            }
            if !(p.horizon > 0.0 && p.horizon.is_finite()) {
                e.push(FieldError::new("paths.T", "horizon must be positive"));
            }
            if let Some(x) = &p.x0 {
                if x.len() != self.d {
                    e.push(FieldError::new("paths.x0", "start offset needs d coordinates"));
                }
            }
        }
        if let Some(c) = &self.crossings {
            if !(c.d1[0] <= c.d1[1] && c.d2[0] <= c.d2[1]) {
                e.push(FieldError::new("crossings", "set bounds must be ordered"));
            }
            if !(c.phi_radius > 0.0) {
                e.push(FieldError::new("crossings.phi_radius", "phi_radius must be positive"));
            }
        }
        match self.function {
            FunctionConfig::Gaussian { sigma } if !(sigma > 0.0) => {
                e.push(FieldError::new("function.sigma", "sigma must be positive"))
            }
            FunctionConfig::Hat { radius } if !(radius > 0.0) => {
                e.push(FieldError::new("function.radius", "radius must be positive"))
            }
            _ => {}
        }
        let needs = |name: &str, ok: bool, e: &mut Vec<FieldError>| {
            if !ok {
                e.push(FieldError::new(name, format!("required by the {:?} experiment", self.experiment)));
            }
        };
        match self.experiment {
            Experiment::Mosco => {
                needs("window.topology", self.window.topology == TopologyName::Periodic, &mut e);
                needs("lambda_list", !self.lambda_list.is_empty(), &mut e);
            }
            Experiment::Rcm => {
                needs("window.topology", self.window.topology == TopologyName::Periodic, &mut e);
                needs("field", self.field.is_some(), &mut e);
                needs("lambda_list", self.lambda_list.len() == 1, &mut e);
            }
            Experiment::Simulate | Experiment::Crossings => needs("paths", self.paths.is_some(), &mut e),
            Experiment::Operators | Experiment::Forms => {}
        }
        e
    }

    pub fn topology(&self) -> Topology {
        match self.window.topology {
            TopologyName::Periodic => Topology::Periodic,
            TopologyName::Absorbing => Topology::Absorbing,
        }
    }

    pub fn kernel(&self) -> jumpgrid::Result<JumpKernel> {
        JumpKernel::stable(self.d, self.alpha, self.amp)
    }

    /// Window at level `k`.
    pub fn window_at(&self, k: u32) -> jumpgrid::Result<LatticeWindow> {
        LatticeWindow::new(self.d, k, self.window.side_length, self.topology())
    }

    /// The test function, centred in the window.
    pub fn function(&self) -> jumpgrid::Result<AnalyticFunction> {
        let w = self.window_at(self.k_list[0])?;
        let c = w.center();
        let c = &c[..self.d];
        Ok(match self.function {
            FunctionConfig::Gaussian { sigma } => AnalyticFunction::gaussian(c, sigma),
            FunctionConfig::Hat { radius } => AnalyticFunction::hat(c, radius),
            FunctionConfig::Constant { value } => AnalyticFunction::constant(self.d, value),
        })
    }

    /// Replace every seed by `seed`.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(f) = &mut self.field {
            f.seed = seed;
        }
    }
}

pub fn field_distribution(f: &FieldConfig) -> Result<FieldDistribution, String> {
    let d = match f.dist.as_str() {
        "uniform02" => FieldDistribution::Uniform02,
        "bounded" => FieldDistribution::Bounded(f.c.ok_or("bounded needs c")?),
        "bernoulli_mix" => FieldDistribution::BernoulliMix(f.p.ok_or("bernoulli_mix needs p")?),
        other => return Err(format!("unknown distribution {other:?}")),
    };
    d.validate().map_err(|e| e.to_string())?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "experiment": "mosco", "d": 1, "alpha": 1.0, "amp": 1.0,
        "window": {"L": 16.0, "topology": "periodic"},
        "k_list": [8, 16], "lambda_list": [1.0], "t_list": [0.5],
        "truncation_radius": 100.0, "quad_order": 8, "output_dir": "out"
    }"#;

    #[test]
    fn valid_config() {
        let c = parse(BASE).unwrap();
        assert_eq!(c.experiment, Experiment::Mosco);
        assert!(c.check().is_empty());
    }

    #[test]
    fn bad_alpha_names_the_field() {
        let e = parse(&BASE.replace("\"alpha\": 1.0", "\"alpha\": 2.5")).unwrap_err();
        assert_eq!(e[0].field, "alpha");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse(&BASE.replace("\"d\": 1,", "\"d\": 1, \"colour\": 3,")).unwrap_err();
        assert_eq!(e[0].field, "colour");
        let e = parse(&BASE.replace("\"topology\": \"periodic\"", "\"topology\": \"periodic\", \"x\": 1")).unwrap_err();
        assert_eq!(e[0].field, "x");
    }

    #[test]
    fn ball_must_fit() {
        let text = BASE.replace("\"output_dir\"", "\"trunc\": {\"j\": 7.0, \"delta\": 0.5}, \"output_dir\"");
        let e = parse(&text).unwrap_err();
        assert_eq!(e[0].field, "trunc.j");
        let text = BASE.replace("\"output_dir\"", "\"trunc\": {\"j\": 4.0, \"delta\": 4.5}, \"output_dir\"");
        assert_eq!(parse(&text).unwrap_err()[0].field, "trunc.delta");
    }

    #[test]
    fn seed_override_reaches_the_field() {
        let text = BASE.replace("\"output_dir\"", "\"field\": {\"dist\": \"uniform02\", \"seed\": 4}, \"output_dir\"");
        let mut c = parse(&text).unwrap();
        c.override_seed(99);
        assert_eq!(c.seed, 99);
        assert_eq!(c.field.unwrap().seed, 99);
    }
}
