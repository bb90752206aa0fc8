//! Experiment plans: the sweep axes plus run settings, read from `key = value` text.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::diagnostics::{nesting_factor, DcvMode};
use crate::lattice::GridSpec;
use crate::scheme::{PhysicsParams, SolverConfig};
use crate::store::{Perturbation, RunManifest, SCHEMA_VERSION};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub amplitudes: Vec<f64>,
    pub masses: Vec<f64>,
    /// Points per axis, ascending, each dividing the next.
    pub grids: Vec<usize>,
    pub t_end: f64,
    pub eps_s: Vec<f64>,
    pub eps_c: Vec<f64>,
    pub dcv_mode: DcvMode,
    pub output: PathBuf,
    /// 1, or 3 for the x-only data replicated across y and z.
    pub dim: usize,
    pub transverse_points: usize,
    pub cadence: f64,
    /// `dt = dt_ratio * dx`.
    pub dt_ratio: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub lambda: f64,
    pub p: u32,
    /// Parallel runs; 0 lets the thread pool decide.
    pub workers: usize,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        let solver = SolverConfig::<f64>::default();
        Self {
            amplitudes: vec![2.0],
            masses: vec![4.0],
            grids: vec![32, 64, 128],
            t_end: 1.0,
            eps_s: vec![0.01],
            eps_c: vec![0.15],
            dcv_mode: DcvMode::default(),
            output: PathBuf::from("runs"),
            dim: 1,
            transverse_points: 5,
            cadence: 1.0,
            dt_ratio: 0.1,
            tol: solver.tol,
            max_iters: solver.max_iters,
            lambda: 1.0,
            p: 5,
            workers: 0,
        }
    }
}

fn plan_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Plan(msg.into())
}

fn parse_one<T: FromStr>(key: &str, raw: &str) -> Result<T, HarnessError> {
    raw.trim().parse().map_err(|_| plan_err(format!("{key}: cannot parse {raw:?}")))
}

fn parse_list<T: FromStr>(key: &str, raw: &str) -> Result<Vec<T>, HarnessError> {
    raw.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_one(key, s)).collect()
}

impl FromStr for ExperimentPlan {
    type Err = HarnessError;

    /// Parses `key = value` lines; `#` starts a comment, lists are comma separated.
    fn from_str(text: &str) -> Result<Self, HarnessError> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) =
                line.split_once('=').ok_or_else(|| plan_err(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(plan_err(format!("line {}: duplicate key {key}", lineno + 1)));
            }
        }
        let mut plan = ExperimentPlan::default();
        for (key, value) in &entries {
            let v = value.as_str();
            match key.as_str() {
                "amplitudes" => plan.amplitudes = parse_list(key, v)?,
                "masses" => plan.masses = parse_list(key, v)?,
                "grids" => plan.grids = parse_list(key, v)?,
                "t_end" => plan.t_end = parse_one(key, v)?,
                "eps_s" => plan.eps_s = parse_list(key, v)?,
                "eps_c" => plan.eps_c = parse_list(key, v)?,
                "dcv_mode" => plan.dcv_mode = v.parse().map_err(|e| plan_err(format!("dcv_mode: {e}")))?,
                "output" => plan.output = PathBuf::from(v),
                "dim" => plan.dim = parse_one(key, v)?,
                "transverse_points" => plan.transverse_points = parse_one(key, v)?,
                "cadence" => plan.cadence = parse_one(key, v)?,
                "dt_ratio" => plan.dt_ratio = parse_one(key, v)?,
                "tol" => plan.tol = parse_one(key, v)?,
                "max_iters" => plan.max_iters = parse_one(key, v)?,
                "lambda" => plan.lambda = parse_one(key, v)?,
                "p" => plan.p = parse_one(key, v)?,
                "workers" => plan.workers = parse_one(key, v)?,
                other => return Err(plan_err(format!("unknown key {other}"))),
            }
        }
        for required in ["amplitudes", "masses", "grids", "t_end"] {
            if !entries.contains_key(required) {
                return Err(plan_err(format!("missing required key {required}")));
            }
        }
        plan.validate()?;
        Ok(plan)
    }
}

impl ExperimentPlan {
    pub fn from_file(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        text.parse()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        if self.amplitudes.is_empty() || !finite(&self.amplitudes) {
            return Err(plan_err("amplitudes must be a non-empty list of finite values"));
        }
        if self.masses.is_empty() || !finite(&self.masses) || self.masses.iter().any(|&m| m < 0.0) {
            return Err(plan_err("masses must be a non-empty list of non-negative values"));
        }
        if self.grids.len() < 3 {
            return Err(plan_err("the grid ladder needs at least three grids"));
        }
        for pair in self.grids.windows(2) {
            if pair[0] >= pair[1] || nesting_factor(pair[0], pair[1]).is_err() {
                return Err(plan_err(format!("grids {} and {} are not nested ascending", pair[0], pair[1])));
            }
        }
        if self.eps_s.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
            return Err(plan_err("eps_s values must lie in (0, 1)"));
        }
        if self.eps_c.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(plan_err("eps_c values must be positive"));
        }
        if self.dim != 1 && self.dim != 3 {
            return Err(plan_err("dim must be 1 or 3"));
        }
        if !(self.dt_ratio > 0.0) || !self.dt_ratio.is_finite() {
            return Err(plan_err("dt_ratio must be positive"));
        }
        for &n in &self.grids {
            for &a in &self.amplitudes {
                for &m in &self.masses {
                    self.manifest(a, m, n)?.schedule().map_err(|e| plan_err(format!("N={n}: {e}")))?;
                }
            }
        }
        Ok(())
    }

    pub fn grid(&self, n: usize) -> Result<GridSpec<f64>, HarnessError> {
        let dx = 1.0 / n as f64;
        let mut points = vec![n; self.dim];
        for p in points.iter_mut().skip(1) {
            *p = self.transverse_points;
        }
        let grid = GridSpec::new(points, vec![1.0; self.dim], vec![-0.5; self.dim], self.dt_ratio * dx)
            .map_err(|e| plan_err(e.to_string()))?;
        Ok(grid)
    }

    /// Manifest of the run `(amplitude, mass, n)`.
    pub fn manifest(&self, amplitude: f64, mass: f64, n: usize) -> Result<RunManifest, HarnessError> {
        let physics = PhysicsParams::natural_units(mass, self.lambda, self.p).map_err(|e| plan_err(e.to_string()))?;
        let solver = SolverConfig { tol: self.tol, max_iters: self.max_iters, ..SolverConfig::default() };
        Ok(RunManifest {
            schema_version: SCHEMA_VERSION,
            grid: self.grid(n)?,
            physics,
            solver,
            initial_amplitude: amplitude,
            snapshot_cadence: self.cadence,
            t_end: self.t_end,
            perturbations: Vec::<Perturbation>::new(),
        })
    }

    pub fn finest(&self) -> usize {
        *self.grids.last().expect("validated ladder")
    }

    /// `(g, gbar, G)`: third largest, second largest and largest grid.
    pub fn dcv_triple(&self) -> (usize, usize, usize) {
        let k = self.grids.len();
        (self.grids[k - 3], self.grids[k - 2], self.grids[k - 1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = "
        # small ladder
        amplitudes = 2
        masses = 3.9, 4.0
        grids = 32, 64, 128
        t_end = 2
        eps_s = 0.01, 0.1
        eps_c = 0.15
        dcv_mode = richardson
        output = out
    ";

    #[test]
    fn parses_plan() {
        let plan: ExperimentPlan = DESK.parse().unwrap();
        assert_eq!(plan.masses, vec![3.9, 4.0]);
        assert_eq!(plan.grids, vec![32, 64, 128]);
        assert_eq!(plan.dcv_mode, DcvMode::Richardson);
        assert_eq!(plan.output, PathBuf::from("out"));
        assert_eq!(plan.cadence, 1.0);
        assert_eq!(plan.dcv_triple(), (32, 64, 128));
        let m = plan.manifest(2.0, 4.0, 64).unwrap();
        assert_eq!(m.schedule().unwrap().steps_per_sample, 640);
    }

    #[test]
    fn rejects_bad_plans() {
        let bad = |text: &str| text.parse::<ExperimentPlan>().unwrap_err();
        assert!(matches!(bad(&DESK.replace("32, 64, 128", "32, 48, 128")), HarnessError::Plan(_)));
        assert!(matches!(bad(&DESK.replace("32, 64, 128", "64, 128")), HarnessError::Plan(_)));
        assert!(matches!(bad(&DESK.replace("32, 64, 128", "128, 64, 32")), HarnessError::Plan(_)));
        assert!(matches!(bad(&format!("{DESK}\ncolour = red")), HarnessError::Plan(_)));
        assert!(matches!(bad(&format!("{DESK}\nt_end = 3")), HarnessError::Plan(_)));
        assert!(matches!(bad(&DESK.replace("t_end = 2", "t_end = 2.5")), HarnessError::Plan(_)));
        assert!(matches!(bad(&DESK.replace("richardson", "fancy")), HarnessError::Plan(_)));
        assert!(matches!(bad("masses = 4\n"), HarnessError::Plan(_)));
    }

    #[test]
    fn three_dimensional_grid() {
        let plan: ExperimentPlan = format!("{DESK}\ndim = 3\ntransverse_points = 6").parse().unwrap();
        let g = plan.grid(32).unwrap();
        assert_eq!(g.points(), &[32, 6, 6]);
        assert_eq!(g.dt(), 0.1 / 32.0);
    }
}
