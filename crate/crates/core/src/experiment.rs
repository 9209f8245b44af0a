//! JSON experiment configuration and the end-to-end runner.
//!
//! ```json
//! {
//!   "data": {
//!     "system": "double_pendulum",
//!     "sampler": { "kind": "uniform_box", "lo": [-0.5, -0.5, -0.5, -0.5], "hi": [0.5, 0.5, 0.5, 0.5] },
//!     "n_traj": 140, "horizon": 5, "sampling_period": 0.05, "substeps": 10, "state_bound": 2.2
//!   },
//!   "hierarchy": {
//!     "family": "rkhs",
//!     "kernels": [{ "kind": "gaussian", "gamma": 1.0 }],
//!     "norm_bounds": [20.0],
//!     "grid": { "spacing": 0.01 }
//!   },
//!   "delta": 0.1,
//!   "true_error": { "enabled": true, "samples": 1000 },
//!   "seed": 1,
//!   "out_dir": "out/rkhs"
//! }
//! ```
//!
//! `data.dataset_path` loads trajectories from CSV instead of simulating
//! them; `system` and `sampler` are still needed for true-error estimation.
//! A one-element `norm_bounds` (or `depths`) list applies to every class.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::complexity::{DiscretizationGrid, GRID_TOLERANCE};
use crate::data::Dataset;
use crate::dynamics::{generate_dataset, system_by_id, DiscreteFlow, InitialConditionSampler, SYSTEM_IDS};
use crate::error::{Error, Result};
use crate::nn::NnClassSpec;
use crate::opt::OptConfig;
use crate::risk::LossSpec;
use crate::rkhs::{Kernel, RkhsClassSpec};
use crate::rng;
use crate::srm::{self, ClassSpec, ErrorReport, Hierarchy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sampler: Option<InitialConditionSampler>,
    pub n_traj: usize,
    pub horizon: usize,
    pub sampling_period: f64,
    pub substeps: usize,
    pub state_bound: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<f64>,
    /// Largest grid value; defaults to the largest class bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum HierarchySpec {
    Rkhs {
        kernels: Vec<Kernel>,
        norm_bounds: Vec<f64>,
        grid: GridSpec,
    },
    Nn {
        depths: Vec<usize>,
        widths: Vec<usize>,
        norm_bounds: Vec<f64>,
        grid: GridSpec,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrueErrorSpec {
    pub enabled: bool,
    pub samples: usize,
}

impl Default for TrueErrorSpec {
    fn default() -> Self {
        Self {
            enabled: false,
            samples: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub hierarchy: HierarchySpec,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub opt: OptConfig,
    pub delta: f64,
    #[serde(default)]
    pub true_error: TrueErrorSpec,
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn broadcast<T: Copy>(name: &str, values: &[T], k: usize, problems: &mut Vec<String>) -> Vec<T> {
    match values.len() {
        1 => vec![values[0]; k],
        len if len == k => values.to_vec(),
        len => {
            problems.push(format!("hierarchy.{name} has {len} entries, expected 1 or {k}"));
            Vec::new()
        }
    }
}

impl HierarchySpec {
    /// Class list, or the problems preventing it.
    fn classes(&self) -> std::result::Result<Vec<ClassSpec>, Vec<String>> {
        let mut problems = Vec::new();
        let classes = match self {
            HierarchySpec::Rkhs { kernels, norm_bounds, .. } => {
                if kernels.is_empty() {
                    problems.push("hierarchy.kernels must not be empty".into());
                }
                let bounds = broadcast("norm_bounds", norm_bounds, kernels.len(), &mut problems);
                kernels
                    .iter()
                    .zip(bounds)
                    .map(|(kernel, norm_bound)| ClassSpec::Rkhs(RkhsClassSpec { kernel: *kernel, norm_bound }))
                    .collect()
            }
            HierarchySpec::Nn { depths, widths, norm_bounds, .. } => {
                if widths.is_empty() {
                    problems.push("hierarchy.widths must not be empty".into());
                }
                let depths = broadcast("depths", depths, widths.len(), &mut problems);
                let bounds = broadcast("norm_bounds", norm_bounds, widths.len(), &mut problems);
                widths
                    .iter()
                    .zip(depths)
                    .zip(bounds)
                    .map(|((&width, depth), norm_bound)| ClassSpec::Nn(NnClassSpec { depth, width, norm_bound }))
                    .collect::<Vec<_>>()
            }
        };
        for (k, c) in classes.iter().enumerate() {
            if let Err(e) = c.validate() {
                problems.push(format!("class {}: {e}", k + 1));
            }
        }
        if problems.is_empty() {
            Ok(classes)
        } else {
            Err(problems)
        }
    }

    fn grid_spec(&self) -> &GridSpec {
        match self {
            HierarchySpec::Rkhs { grid, .. } | HierarchySpec::Nn { grid, .. } => grid,
        }
    }

    fn grid(&self, max_bound: f64) -> Result<DiscretizationGrid> {
        let g = self.grid_spec();
        match (&g.values, g.spacing) {
            (Some(values), None) if g.max.is_none() => DiscretizationGrid::from_values(values.clone()),
            (None, Some(spacing)) => DiscretizationGrid::from_spacing(spacing, g.max.unwrap_or(max_bound)),
            _ => Err(Error::Config(
                "hierarchy.grid needs either `spacing` (optionally with `max`) or `values`".into(),
            )),
        }
    }

    pub fn build(&self) -> Result<Hierarchy> {
        let classes = self.classes().map_err(|p| Error::Config(p.join("; ")))?;
        let max_b = classes.iter().map(ClassSpec::norm_bound).fold(0.0, f64::max);
        Hierarchy::new(classes, self.grid(max_b)?)
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Every violated precondition; empty when the config is runnable.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = &self.data;
        if !(self.delta > 0.0 && self.delta < 1.0) {
            out.push(format!("delta must be in (0,1), got {}", self.delta));
        }
        if d.n_traj == 0 {
            out.push("data.n_traj must be at least 1".into());
        }
        if d.horizon == 0 {
            out.push("data.horizon must be at least 1".into());
        }
        if !(d.sampling_period > 0.0 && d.sampling_period.is_finite()) {
            out.push(format!("data.sampling_period must be positive, got {}", d.sampling_period));
        }
        if d.substeps == 0 {
            out.push("data.substeps must be at least 1".into());
        }
        if !(d.state_bound > 0.0 && d.state_bound.is_finite()) {
            out.push(format!("data.state_bound must be positive, got {}", d.state_bound));
        }
        let system = match &d.system {
            Some(id) => match system_by_id(id) {
                Ok(sys) => Some(sys),
                Err(_) => {
                    out.push(format!("unknown data.system `{id}` (known: {})", SYSTEM_IDS.join(", ")));
                    None
                }
            },
            None => None,
        };
        match &d.dataset_path {
            Some(p) if !p.exists() => out.push(format!("data.dataset_path {} does not exist", p.display())),
            Some(_) => {}
            None if d.system.is_none() => out.push("data needs `system` or `dataset_path`".into()),
            None if d.sampler.is_none() => out.push("data.sampler is required to simulate trajectories".into()),
            None => {}
        }
        if self.true_error.enabled && (d.system.is_none() || d.sampler.is_none()) {
            out.push("true_error.enabled requires data.system and data.sampler".into());
        }
        if self.true_error.samples == 0 {
            out.push("true_error.samples must be at least 1".into());
        }
        if let Some(sampler) = &d.sampler {
            if let Err(e) = sampler.validate() {
                out.push(format!("data.sampler: {e}"));
            } else if let Some(sys) = &system {
                if sampler.dim() != sys.dim() {
                    out.push(format!(
                        "data.sampler has dimension {} but system `{}` has dimension {}",
                        sampler.dim(),
                        d.system.as_deref().unwrap_or_default(),
                        sys.dim()
                    ));
                }
            }
        }
        if let Err(e) = self.opt.validate() {
            out.push(e.to_string());
        }
        match self.hierarchy.classes() {
            Err(problems) => out.extend(problems),
            Ok(classes) => {
                let max_b = classes.iter().map(ClassSpec::norm_bound).fold(0.0, f64::max);
                match self.hierarchy.grid(max_b) {
                    Err(e) => out.push(e.to_string()),
                    Ok(grid) if grid.max() < max_b * (1.0 - GRID_TOLERANCE) => out.push(format!(
                        "grid max M_Q = {} is below the largest class bound max B_k = {}",
                        grid.max(),
                        max_b
                    )),
                    Ok(_) => {}
                }
            }
        }
        out
    }

    fn flow(&self) -> Result<Option<DiscreteFlow>> {
        self.data
            .system
            .as_deref()
            .map(|id| DiscreteFlow::new(system_by_id(id)?, self.data.sampling_period, self.data.substeps))
            .transpose()
    }

    /// Loads or simulates the training set.
    pub fn dataset(&self) -> Result<Dataset> {
        let d = &self.data;
        if let Some(path) = &d.dataset_path {
            let s = Dataset::load(path, d.state_bound)?;
            if s.len() != d.n_traj || s.horizon() != d.horizon {
                return Err(Error::Config(format!(
                    "dataset has N = {}, T = {} but the config declares N = {}, T = {}",
                    s.len(),
                    s.horizon(),
                    d.n_traj,
                    d.horizon
                )));
            }
            return Ok(s);
        }
        let flow = self.flow()?.ok_or_else(|| Error::Config("data needs `system` or `dataset_path`".into()))?;
        let sampler = d
            .sampler
            .as_ref()
            .ok_or_else(|| Error::Config("data.sampler is required to simulate trajectories".into()))?;
        generate_dataset(
            &flow,
            sampler,
            d.n_traj,
            d.horizon,
            d.state_bound,
            rng::derive_seed(self.seed, rng::TAG_DATA),
        )
    }

    fn check(&self) -> Result<()> {
        let problems = self.diagnostics();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Reads and checks a config file. Unreadable or unparsable files are
/// errors; a parsed config yields its (possibly empty) list of problems.
pub fn validate_config(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(ExperimentConfig::load(path)?.diagnostics())
}

/// Runs SRM selection (and, if enabled, true-error estimation) without
/// writing anything.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<ErrorReport> {
    cfg.check()?;
    let s = cfg.dataset()?;
    let h = cfg.hierarchy.build()?;
    let mut report = srm::srm_select(&s, &h, cfg.loss, &cfg.opt, cfg.seed)?;
    srm::attach_epsilon(&mut report, cfg.delta)?;
    if cfg.true_error.enabled {
        let flow = cfg.flow()?.expect("checked by diagnostics");
        let sampler = cfg.data.sampler.as_ref().expect("checked by diagnostics");
        srm::attach_true_errors(
            &mut report,
            &flow,
            sampler,
            cfg.data.horizon,
            cfg.loss,
            cfg.true_error.samples,
            cfg.seed,
        )?;
    }
    Ok(report)
}

/// Runs the experiment and writes `report.csv`, `curves.csv` and
/// `config.echo.json` into `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ErrorReport> {
    let report = evaluate(cfg)?;
    fs::create_dir_all(&cfg.out_dir)?;
    report.write_csv(fs::File::create(cfg.out_dir.join("report.csv"))?)?;
    report.write_curves(fs::File::create(cfg.out_dir.join("curves.csv"))?)?;
    fs::write(cfg.out_dir.join("config.echo.json"), cfg.to_json()?)?;
    Ok(report)
}

/// Simulates (or loads) the dataset only and writes it to `path`.
pub fn gen_data(cfg: &ExperimentConfig, path: impl AsRef<Path>) -> Result<Dataset> {
    let problems: Vec<String> = cfg
        .diagnostics()
        .into_iter()
        .filter(|p| !p.starts_with("class ") && !p.starts_with("hierarchy") && !p.starts_with("grid"))
        .collect();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    let s = cfg.dataset()?;
    if let Some(parent) = path.as_ref().parent() {
        fs::create_dir_all(parent)?;
    }
    s.save(path)?;
    Ok(s)
}
