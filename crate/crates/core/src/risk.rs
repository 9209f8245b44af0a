//! Losses, output clipping and the two error functionals: the empirical
//! training error over a dataset and a Monte-Carlo estimate of the true
//! (expected one-step) error under the initial-condition distribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{norm2, Dataset};
use crate::dynamics::{DiscreteFlow, InitialConditionSampler};
use crate::error::{Error, Result};
use crate::rng;

/// One-step loss `l(r)` on the residual `r = f(x_t) - x_{t+1}`.
///
/// Every variant satisfies `l(0) = 0` and is Lipschitz on the ball of radius
/// `2B`; penalties depend on the loss only through [`LossSpec::lipschitz`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSpec {
    /// `l(r) = |r|_2`.
    #[default]
    Euclidean,
}

impl LossSpec {
    pub fn lipschitz(&self) -> f64 {
        match self {
            LossSpec::Euclidean => 1.0,
        }
    }

    pub fn value(&self, residual: &[f64]) -> f64 {
        match self {
            LossSpec::Euclidean => norm2(residual),
        }
    }

    /// Gradient of the loss w.r.t. the residual, written into `out`.
    /// At the kink `r = 0` the zero subgradient is used.
    pub fn gradient(&self, residual: &[f64], out: &mut [f64]) {
        match self {
            LossSpec::Euclidean => {
                let n = norm2(residual);
                if n > 0.0 {
                    for (o, r) in out.iter_mut().zip(residual) {
                        *o = r / n;
                    }
                } else {
                    out.fill(0.0);
                }
            }
        }
    }
}

/// A one-step predictor `f: R^n -> R^n`, evaluated unclipped.
pub trait Predictor: Sync {
    fn dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Vec<f64>;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn predict(&self, x: &[f64]) -> Vec<f64> {
        (**self).predict(x)
    }
}

/// Wraps a closure as a [`Predictor`].
pub struct FnPredictor<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> FnPredictor<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> Predictor for FnPredictor<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn predict(&self, x: &[f64]) -> Vec<f64> {
        (self.f)(x)
    }
}

/// The zero predictor of dimension `n`.
pub fn zero_predictor(n: usize) -> impl Predictor {
    FnPredictor::new(n, move |_| vec![0.0; n])
}

/// Radial clipping into the ball of radius `bound`.
pub fn clip(y: &[f64], bound: f64) -> Result<Vec<f64>> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("clip: non-finite input"));
    }
    if !(bound > 0.0) {
        return Err(Error::invalid(format!("clip: bound must be positive, got {bound}")));
    }
    let mut out = y.to_vec();
    clip_in_place(&mut out, bound);
    Ok(out)
}

pub(crate) fn clip_in_place(y: &mut [f64], bound: f64) {
    let n = norm2(y);
    if n > bound {
        let s = bound / n;
        y.iter_mut().for_each(|v| *v *= s);
    }
}

/// Vector-Jacobian product of the clipping map at `y`: returns `J^T u`.
///
/// Outside the ball the Jacobian is `(B/|y|)(I - y y^T/|y|^2)`; the radial
/// direction is flat because the clipped output stays on the sphere.
pub(crate) fn clip_vjp(y: &[f64], bound: f64, upstream: &[f64], out: &mut [f64]) {
    let n = norm2(y);
    if n > bound {
        let s = bound / n;
        let radial: f64 = y.iter().zip(upstream).map(|(a, b)| a * b).sum::<f64>() / (n * n);
        for ((o, u), yi) in out.iter_mut().zip(upstream).zip(y) {
            *o = s * (u - radial * yi);
        }
    } else {
        out.copy_from_slice(upstream);
    }
}

/// Clipped one-step loss `l(clip(f(x)) - y)`.
pub(crate) fn clipped_loss(pred: &mut [f64], target: &[f64], bound: f64, loss: LossSpec) -> f64 {
    clip_in_place(pred, bound);
    pred.iter_mut().zip(target).for_each(|(p, t)| *p -= t);
    loss.value(pred)
}

/// Average clipped one-step loss over all `N * T` transitions of `S`, with
/// clipping bound `S.state_bound()`.
pub fn training_error<P: Predictor + ?Sized>(f: &P, s: &Dataset, loss: LossSpec) -> Result<f64> {
    if f.dim() != s.dim() {
        return Err(Error::invalid(format!(
            "predictor dimension {} does not match dataset dimension {}",
            f.dim(),
            s.dim()
        )));
    }
    let bound = s.state_bound();
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in s.transitions() {
        let mut p = f.predict(x);
        if p.len() != y.len() {
            return Err(Error::invalid("predictor returned a vector of the wrong length"));
        }
        total += clipped_loss(&mut p, y, bound, loss);
        count += 1;
    }
    Ok(total / count as f64)
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let m = values.len();
        let mean = values.iter().sum::<f64>() / m as f64;
        let std_err = if m > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
            (var / m as f64).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            std_err,
            samples: m,
        }
    }
}

/// Monte-Carlo estimate of the true error of the clipped predictor: `m` fresh
/// initial conditions (stream `i` of `seed` for sample `i`), each rolled out
/// `horizon` steps through `flow`; returns the mean per-trajectory average
/// loss and its standard error.
///
/// A simulated state with norm above `10 * bound` is reported as a
/// divergence: the system and horizon are inconsistent with the state bound.
#[allow(clippy::too_many_arguments)]
pub fn true_error_mc<P: Predictor + ?Sized>(
    f: &P,
    flow: &DiscreteFlow,
    sampler: &InitialConditionSampler,
    horizon: usize,
    bound: f64,
    loss: LossSpec,
    m: usize,
    seed: u64,
) -> Result<McEstimate> {
    if m == 0 {
        return Err(Error::invalid("true_error_mc needs at least one sample"));
    }
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    if f.dim() != flow.dim() || sampler.dim() != flow.dim() {
        return Err(Error::invalid("predictor, system and sampler dimensions differ"));
    }
    let per_traj = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, i as u64);
            let mut x = sampler.sample(&mut r)?;
            let mut total = 0.0;
            for t in 0..horizon {
                let next = flow.step(&x)?;
                let norm = norm2(&next);
                if norm > 10.0 * bound {
                    return Err(Error::Divergence(format!(
                        "test trajectory {i} reached |x| = {norm} at t = {} (bound {bound})",
                        t + 1
                    )));
                }
                let mut p = f.predict(&x);
                total += clipped_loss(&mut p, &next, bound, loss);
                x = next;
            }
            Ok(total / horizon as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(McEstimate::from_samples(&per_traj))
}
