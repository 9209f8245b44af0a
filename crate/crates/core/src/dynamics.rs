//! Trajectory generation: continuous-time vector fields, classical RK4, the
//! sampled flow map `x_{t+1} = f_*(x_t)`, and initial-condition samplers.
//!
//! # Compound double pendulum
//!
//! Two identical uniform rods of length `l` and mass `m`, angles measured
//! from the downward vertical, state `(theta1, theta2, p1, p2)` with
//! canonical momenta. With `d = theta1 - theta2` and `k = 6 / (m l^2)`:
//!
//! ```text
//! theta1' = k (2 p1 - 3 cos(d) p2) / (16 - 9 cos(d)^2)
//! theta2' = k (8 p2 - 3 cos(d) p1) / (16 - 9 cos(d)^2)
//! p1'     = -(m l^2 / 2) (theta1' theta2' sin(d) + 3 (g / l) sin(theta1))
//! p2'     = -(m l^2 / 2) (-theta1' theta2' sin(d) + (g / l) sin(theta2))
//! ```
//!
//! The conserved energy is `H = (theta1' p1 + theta2' p2) / 2
//! - (m g l / 2) (3 cos(theta1) + cos(theta2))`.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_state_bound, Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::risk::Predictor;
use crate::rng;

type VectorField = dyn Fn(&[f64]) -> Vec<f64> + Send + Sync;

/// Autonomous ODE `x' = F(x)` on `R^n`.
#[derive(Clone)]
pub struct DynamicalSystem {
    dim: usize,
    rhs: Arc<VectorField>,
    description: String,
}

impl fmt::Debug for DynamicalSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DynamicalSystem")
            .field("dim", &self.dim)
            .field("description", &self.description)
            .finish()
    }
}

impl DynamicalSystem {
    /// Plug-in point for user systems.
    pub fn new(
        dim: usize,
        description: impl Into<String>,
        rhs: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            rhs: Arc::new(rhs),
            description: description.into(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn rhs(&self, x: &[f64]) -> Vec<f64> {
        (self.rhs)(x)
    }

    pub fn double_pendulum(params: DoublePendulum) -> Self {
        Self::new(4, format!("compound double pendulum {params:?}"), move |x| params.rhs(x))
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(dim, format!("zero vector field on R^{dim}"), move |_| vec![0.0; dim])
    }

    /// `x' = A x` with `A = [[0, 1], [-1, -0.1]]`, a lightly damped oscillator.
    pub fn linear_test() -> Self {
        Self::new(2, "damped linear oscillator", |x| vec![x[1], -x[0] - 0.1 * x[1]])
    }
}

/// Named systems selectable from configs.
pub const SYSTEM_IDS: [&str; 3] = ["double_pendulum", "linear_test", "zero"];

pub fn system_by_id(id: &str) -> Result<DynamicalSystem> {
    match id {
        "double_pendulum" => Ok(DynamicalSystem::double_pendulum(DoublePendulum::default())),
        "linear_test" => Ok(DynamicalSystem::linear_test()),
        "zero" => Ok(DynamicalSystem::zero(2)),
        other => Err(Error::Config(format!(
            "unknown system id {other:?}; known ids: {}",
            SYSTEM_IDS.join(", ")
        ))),
    }
}

/// Two identical compound (uniform-rod) pendula.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DoublePendulum {
    pub length: f64,
    pub mass: f64,
    pub gravity: f64,
}

impl Default for DoublePendulum {
    fn default() -> Self {
        Self {
            length: 1.0,
            mass: 0.5,
            gravity: 9.81,
        }
    }
}

impl DoublePendulum {
    fn angular_velocities(&self, x: &[f64]) -> (f64, f64) {
        let (th1, th2, p1, p2) = (x[0], x[1], x[2], x[3]);
        let c = (th1 - th2).cos();
        let k = 6.0 / (self.mass * self.length * self.length);
        let den = 16.0 - 9.0 * c * c;
        (k * (2.0 * p1 - 3.0 * c * p2) / den, k * (8.0 * p2 - 3.0 * c * p1) / den)
    }

    pub fn rhs(&self, x: &[f64]) -> Vec<f64> {
        let (th1, th2) = (x[0], x[1]);
        let (w1, w2) = self.angular_velocities(x);
        let s = (th1 - th2).sin();
        let half_ml2 = 0.5 * self.mass * self.length * self.length;
        let gl = self.gravity / self.length;
        vec![
            w1,
            w2,
            -half_ml2 * (w1 * w2 * s + 3.0 * gl * th1.sin()),
            -half_ml2 * (-w1 * w2 * s + gl * th2.sin()),
        ]
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        let (w1, w2) = self.angular_velocities(x);
        let kinetic = 0.5 * (w1 * x[2] + w2 * x[3]);
        let potential =
            -0.5 * self.mass * self.gravity * self.length * (3.0 * x[0].cos() + x[1].cos());
        kinetic + potential
    }
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step(sys: &DynamicalSystem, x: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::invalid(format!("rk4 step must be positive, got {dt}")));
    }
    let axpy = |a: f64, v: &[f64]| -> Vec<f64> { x.iter().zip(v).map(|(xi, vi)| xi + a * vi).collect() };
    let k1 = sys.rhs(x);
    let k2 = sys.rhs(&axpy(0.5 * dt, &k1));
    let k3 = sys.rhs(&axpy(0.5 * dt, &k2));
    let k4 = sys.rhs(&axpy(dt, &k3));
    let out: Vec<f64> = (0..x.len())
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("rk4 produced a non-finite state".into()));
    }
    Ok(out)
}

/// The sampled flow map: `substeps` RK4 steps spanning one sampling period.
/// This is the surrogate for the exact discretized dynamics `f_*`.
#[derive(Clone, Debug)]
pub struct DiscreteFlow {
    pub system: DynamicalSystem,
    pub sampling_period: f64,
    pub substeps: usize,
}

impl DiscreteFlow {
    pub fn new(system: DynamicalSystem, sampling_period: f64, substeps: usize) -> Result<Self> {
        if !(sampling_period > 0.0 && sampling_period.is_finite()) {
            return Err(Error::invalid(format!(
                "sampling period must be positive, got {sampling_period}"
            )));
        }
        if substeps == 0 {
            return Err(Error::invalid("substeps must be at least 1"));
        }
        Ok(Self {
            system,
            sampling_period,
            substeps,
        })
    }

    pub fn dim(&self) -> usize {
        self.system.dim()
    }

    pub fn step(&self, x: &[f64]) -> Result<Vec<f64>> {
        let dt = self.sampling_period / self.substeps as f64;
        let mut state = x.to_vec();
        for _ in 0..self.substeps {
            state = rk4_step(&self.system, &state, dt)?;
        }
        Ok(state)
    }

    pub fn rollout(&self, x0: Vec<f64>, horizon: usize) -> Result<Vec<Vec<f64>>> {
        let mut states = Vec::with_capacity(horizon + 1);
        states.push(x0);
        for t in 0..horizon {
            let next = self.step(&states[t])?;
            states.push(next);
        }
        Ok(states)
    }
}

impl Predictor for DiscreteFlow {
    fn dim(&self) -> usize {
        self.system.dim()
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.step(x).unwrap_or_else(|_| vec![f64::NAN; x.len()])
    }
}

/// Distribution of the initial condition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialConditionSampler {
    UniformBox {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// Independent normal coordinates, rejected until inside `[lo, hi]`.
    TruncatedGaussian {
        mean: Vec<f64>,
        std: Vec<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

const MAX_REJECTIONS: usize = 100_000;

impl InitialConditionSampler {
    /// Uniform on `[-half_width, half_width]^dim`.
    pub fn symmetric_box(dim: usize, half_width: f64) -> Self {
        Self::UniformBox {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::UniformBox { lo, .. } | Self::TruncatedGaussian { lo, .. } => lo.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = match self {
            Self::UniformBox { lo, hi } => (lo, hi),
            Self::TruncatedGaussian { mean, std, lo, hi } => {
                if mean.len() != lo.len() || std.len() != lo.len() {
                    return Err(Error::invalid("sampler mean/std/box dimensions differ"));
                }
                if std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                    return Err(Error::invalid("sampler std entries must be positive"));
                }
                (lo, hi)
            }
        };
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::invalid("sampler box bounds must be non-empty and of equal length"));
        }
        if lo.iter().zip(hi).any(|(l, h)| !(l <= h && l.is_finite() && h.is_finite())) {
            return Err(Error::invalid("sampler box is empty (lo > hi) or not finite"));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Vec<f64>> {
        match self {
            Self::UniformBox { lo, hi } => Ok(lo
                .iter()
                .zip(hi)
                .map(|(l, h)| if l == h { *l } else { rng.random_range(*l..*h) })
                .collect()),
            Self::TruncatedGaussian { mean, std, lo, hi } => {
                let mut out = Vec::with_capacity(mean.len());
                for j in 0..mean.len() {
                    let normal = Normal::new(mean[j], std[j])
                        .map_err(|e| Error::invalid(format!("sampler: {e}")))?;
                    let value = (0..MAX_REJECTIONS)
                        .map(|_| normal.sample(rng))
                        .find(|v| *v >= lo[j] && *v <= hi[j])
                        .ok_or_else(|| {
                            Error::invalid(format!(
                                "truncated gaussian coordinate {j}: box has negligible mass"
                            ))
                        })?;
                    out.push(value);
                }
                Ok(out)
            }
        }
    }
}

/// Draws `n_traj` initial conditions (stream `i` of `seed` for trajectory
/// `i`), rolls each out for `horizon` sampling periods and checks every state
/// against `bound`.
pub fn generate_dataset(
    flow: &DiscreteFlow,
    sampler: &InitialConditionSampler,
    n_traj: usize,
    horizon: usize,
    bound: f64,
    seed: u64,
) -> Result<Dataset> {
    sampler.validate()?;
    if sampler.dim() != flow.dim() {
        return Err(Error::invalid(format!(
            "sampler dimension {} does not match system dimension {}",
            sampler.dim(),
            flow.dim()
        )));
    }
    if n_traj == 0 || horizon == 0 {
        return Err(Error::invalid("N and T must both be at least 1"));
    }
    let trajectories = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let x0 = sampler.sample(&mut r)?;
            let states = flow.rollout(x0, horizon)?;
            check_state_bound(i, &states, bound)?;
            Trajectory::new(states)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(trajectories, bound)
}
