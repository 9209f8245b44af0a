//! Class-complexity penalties.
//!
//! - [`rademacher_mc`]: Monte-Carlo estimate of the empirical Rademacher
//!   complexity `E_sigma[ sup_g (1/N) sum_i sigma_i g(z_i) ]`, with the inner
//!   supremum supplied by the caller.
//! - [`general_penalty_mc`]: the general trajectory penalty
//!   `(2 sqrt(2) L / T) sum_t sum_j R_{S_t}(clipped component class j)`
//!   estimated with that oracle. It is only a test oracle: selection always
//!   uses the closed forms below.
//! - [`rkhs_penalty`] / [`nn_penalty`]: closed-form upper bounds for
//!   norm-constrained kernel and network classes, evaluated at the grid value
//!   `M_{q(f_k)}` of the learned model.
//! - [`DiscretizationGrid`] and [`epsilon_bound`].

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{norm2, Dataset};
use crate::error::{Error, Result};
use crate::nn;
use crate::risk::{LossSpec, McEstimate};
use crate::rkhs::{self, Kernel};
use crate::rng;
use crate::srm::ClassSpec;

/// Relative slack when checking a norm against the largest grid value.
pub const GRID_TOLERANCE: f64 = 1e-9;

/// Monte-Carlo estimate of an empirical Rademacher complexity.
///
/// `evaluate_sup(sigma)` must return `sup_{g in G} (1/N) sum_i sigma_i g(z_i)`
/// for the caller's class and sample. Draw `d` uses stream `d` of `seed`.
pub fn rademacher_mc<F>(evaluate_sup: F, n_points: usize, draws: usize, seed: u64) -> Result<McEstimate>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if draws == 0 || n_points == 0 {
        return Err(Error::invalid("rademacher_mc needs at least one draw and one point"));
    }
    let values: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|d| {
            let mut r = rng::stream(seed, d as u64);
            let sigma: Vec<f64> = (0..n_points)
                .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            evaluate_sup(&sigma)
        })
        .collect();
    if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("inner supremum was not finite at draw {bad}")));
    }
    Ok(McEstimate::from_samples(&values))
}

/// Monte-Carlo oracle for the general penalty of one class.
///
/// Each `R_{S_t}(F_{k,j})` is estimated with `draws` sign vectors; the inner
/// supremum is a constrained maximization over the class, so the result is a
/// lower estimate of the true penalty. The returned standard error combines
/// the `T * n` independent estimates.
pub fn general_penalty_mc(
    class: &ClassSpec,
    s: &Dataset,
    loss: LossSpec,
    draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    let (n, horizon) = (s.dim(), s.horizon());
    let clip_bound = s.state_bound();
    let mut sum = 0.0;
    let mut var = 0.0;
    for t in 0..horizon {
        let points: Vec<Vec<f64>> = s.time_slice(t).into_iter().map(<[f64]>::to_vec).collect();
        for j in 0..n {
            let sub_seed = rng::derive_seed(seed, (t * n + j) as u64);
            let est = match class {
                ClassSpec::Rkhs(c) => {
                    let gram = rkhs::gram(&c.kernel, &points)?;
                    rademacher_mc(
                        |sigma| rkhs::max_clipped_correlation(&gram, sigma, j, n, c.norm_bound, clip_bound),
                        points.len(),
                        draws,
                        sub_seed,
                    )
                }
                ClassSpec::Nn(c) => rademacher_mc(
                    |sigma| {
                        nn::max_clipped_correlation(c, &points, sigma, j, clip_bound, sub_seed)
                            .unwrap_or(f64::NAN)
                    },
                    points.len(),
                    draws,
                    sub_seed,
                ),
            }
            .map_err(|e| Error::OracleUnavailable(format!("t = {t}, j = {j}: {e}")))?;
            sum += est.mean;
            var += est.std_err * est.std_err;
        }
    }
    let scale = 2.0 * std::f64::consts::SQRT_2 * loss.lipschitz() / horizon as f64;
    Ok(McEstimate {
        mean: scale * sum,
        std_err: scale * var.sqrt(),
        samples: draws,
    })
}

/// Closed-form kernel-class penalty
/// `(2 sqrt(2) L n M / (T N)) sum_t sqrt(sum_i kappa(x_t^i, x_t^i))`.
pub fn rkhs_penalty(kernel: &Kernel, s: &Dataset, m_used: f64, loss: LossSpec) -> Result<f64> {
    check_grid_value(m_used)?;
    let mut sum = 0.0;
    for t in 0..s.horizon() {
        let mut diag = 0.0;
        for x in s.time_slice(t) {
            let k = kernel.eval(x, x);
            if !(k >= 0.0) {
                return Err(Error::InvalidKernel(format!("kernel diagonal is {k} at a sample point")));
            }
            diag += k;
        }
        sum += diag.sqrt();
    }
    let (n, horizon, big_n) = (s.dim() as f64, s.horizon() as f64, s.len() as f64);
    Ok(2.0 * std::f64::consts::SQRT_2 * loss.lipschitz() * n * m_used / (horizon * big_n) * sum)
}

/// Depth factor `a(D) = 2 sqrt(2) (sqrt(2 ln(2) D) + 1)`.
pub fn depth_factor(depth: usize) -> f64 {
    2.0 * std::f64::consts::SQRT_2 * ((2.0 * std::f64::consts::LN_2 * depth as f64).sqrt() + 1.0)
}

/// Closed-form network-class penalty
/// `(L n M^D a(D) / (T N)) sum_t sqrt(sum_i (|x_t^i|^2 + 1))`.
pub fn nn_penalty(depth: usize, m_used: f64, s: &Dataset, loss: LossSpec) -> Result<f64> {
    if depth == 0 {
        return Err(Error::invalid("network depth must be at least 1"));
    }
    check_grid_value(m_used)?;
    let sum: f64 = (0..s.horizon())
        .map(|t| {
            s.time_slice(t)
                .into_iter()
                .map(|x| norm2(x).powi(2) + 1.0)
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    let (n, horizon, big_n) = (s.dim() as f64, s.horizon() as f64, s.len() as f64);
    let scale = loss.lipschitz() * n * m_used.powi(depth as i32) * depth_factor(depth);
    Ok(scale / (horizon * big_n) * sum)
}

fn check_grid_value(m: f64) -> Result<()> {
    if !(m >= 0.0 && m.is_finite()) {
        return Err(Error::invalid(format!("grid value must be non-negative and finite, got {m}")));
    }
    Ok(())
}

/// Increasing grid `M_1 < ... < M_Q` quantizing learned model norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscretizationGrid {
    values: Vec<f64>,
}

/// A grid lookup result; `q` is 1-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub q: usize,
    pub value: f64,
}

impl DiscretizationGrid {
    /// `M_q = q * spacing` for `q = 1..=Q`, with `Q` the first index whose
    /// value covers `max_bound`.
    pub fn from_spacing(spacing: f64, max_bound: f64) -> Result<Self> {
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(Error::invalid(format!("grid spacing must be positive, got {spacing}")));
        }
        if !(max_bound > 0.0 && max_bound.is_finite()) {
            return Err(Error::invalid(format!("grid maximum must be positive, got {max_bound}")));
        }
        let mut q_max = ((max_bound / spacing) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        while (q_max as f64) * spacing < max_bound * (1.0 - GRID_TOLERANCE) {
            q_max += 1;
        }
        Ok(Self {
            values: (1..=q_max).map(|q| q as f64 * spacing).collect(),
        })
    }

    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("grid must have at least one value"));
        }
        if values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("grid values must be positive and finite"));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("grid values must be strictly increasing"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of grid points `Q`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `M_Q`.
    pub fn max(&self) -> f64 {
        *self.values.last().expect("grid is non-empty")
    }

    pub fn contains(&self, m: f64) -> bool {
        self.values.iter().any(|v| *v == m)
    }

    /// Smallest `q` with `norm <= M_q`.
    pub fn lookup_q(&self, norm: f64) -> Result<GridPoint> {
        if !(norm >= 0.0) {
            return Err(Error::invalid(format!("norm must be non-negative, got {norm}")));
        }
        let idx = self.values.partition_point(|m| *m < norm);
        if idx < self.values.len() {
            return Ok(GridPoint {
                q: idx + 1,
                value: self.values[idx],
            });
        }
        let max = self.max();
        if norm <= max * (1.0 + GRID_TOLERANCE) {
            Ok(GridPoint {
                q: self.values.len(),
                value: max,
            })
        } else {
            Err(Error::ConstraintViolated { norm, max })
        }
    }
}

/// Penalty of one learned model together with its generalization bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyReport {
    pub penalty: f64,
    pub m_used: f64,
    pub epsilon: f64,
}

/// Uniform-deviation bound `r + 6 L B sqrt(ln(4 Q / delta) / (2 N))`, with
/// `Q = 1` when no grid is involved.
pub fn epsilon_bound(
    penalty: f64,
    lipschitz: f64,
    state_bound: f64,
    n_traj: usize,
    delta: f64,
    grid_len: Option<usize>,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid(format!("delta must be in (0,1), got {delta}")));
    }
    if n_traj == 0 {
        return Err(Error::invalid("N must be at least 1"));
    }
    if !(penalty >= 0.0 && lipschitz > 0.0 && state_bound > 0.0) {
        return Err(Error::invalid("penalty, L and B must be non-negative / positive"));
    }
    let q = grid_len.unwrap_or(1);
    if q == 0 {
        return Err(Error::invalid("Q must be at least 1"));
    }
    let log_term = (4.0 * q as f64 / delta).ln();
    Ok(penalty + 6.0 * lipschitz * state_bound * (log_term / (2.0 * n_traj as f64)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;
    use approx::assert_abs_diff_eq;

    fn dataset_from(states_per_traj: Vec<Vec<Vec<f64>>>, bound: f64) -> Dataset {
        Dataset::new(
            states_per_traj.into_iter().map(|s| Trajectory::new(s).unwrap()).collect(),
            bound,
        )
        .unwrap()
    }

    /// Exact expectation over all 2^N sign vectors.
    fn enumerate_signs(n: usize, sup: impl Fn(&[f64]) -> f64) -> f64 {
        let total: f64 = (0..1u32 << n)
            .map(|mask| {
                let sigma: Vec<f64> =
                    (0..n).map(|i| if mask >> i & 1 == 1 { 1.0 } else { -1.0 }).collect();
                sup(&sigma)
            })
            .sum();
        total / (1u32 << n) as f64
    }

    #[test]
    fn rademacher_of_zero_class() {
        let e = rademacher_mc(|_| 0.0, 5, 100, 1).unwrap();
        assert_eq!((e.mean, e.std_err), (0.0, 0.0));
    }

    #[test]
    fn rademacher_of_symmetric_pair() {
        // G = {+c, -c}: sup = c |sum sigma| / N
        let sup = |s: &[f64]| s.iter().sum::<f64>().abs() / s.len() as f64;
        assert_abs_diff_eq!(enumerate_signs(2, sup), 0.5, epsilon = 1e-15);
        let mc = rademacher_mc(sup, 2, 4000, 9).unwrap();
        assert!((mc.mean - 0.5).abs() <= 3.0 * mc.std_err, "{mc:?}");

        // G = {z, -z} on {1, 1} is the same class
        let z = [1.0, 1.0];
        let sup2 = |s: &[f64]| (s.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / 2.0).abs();
        assert_abs_diff_eq!(enumerate_signs(2, sup2), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn rademacher_singleton_agrees_with_enumeration() {
        let g = [0.3, -1.2, 0.8, 2.0, -0.1, 0.5];
        let sup = |s: &[f64]| s.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / g.len() as f64;
        let exact = enumerate_signs(g.len(), sup);
        assert_abs_diff_eq!(exact, 0.0, epsilon = 1e-15);
        let mc = rademacher_mc(sup, g.len(), 3000, 4).unwrap();
        assert!((mc.mean - exact).abs() <= 3.0 * mc.std_err);
        // |.| of the singleton is a two-element class
        let abs_sup = |s: &[f64]| sup(s).abs();
        let exact_abs = enumerate_signs(g.len(), abs_sup);
        let mc_abs = rademacher_mc(abs_sup, g.len(), 3000, 5).unwrap();
        assert!((mc_abs.mean - exact_abs).abs() <= 3.0 * mc_abs.std_err);
    }

    #[test]
    fn rademacher_is_deterministic_and_rejects_nan() {
        let sup = |s: &[f64]| s[0].max(0.0);
        assert_eq!(rademacher_mc(sup, 3, 50, 2).unwrap(), rademacher_mc(sup, 3, 50, 2).unwrap());
        assert!(rademacher_mc(|_| f64::NAN, 3, 5, 2).is_err());
        assert!(rademacher_mc(sup, 3, 0, 2).is_err());
    }

    #[test]
    fn rkhs_penalty_unit_diagonal() {
        let states = (0..100)
            .map(|i| (0..6).map(|t| vec![0.001 * i as f64, 0.0, -0.001 * t as f64, 0.0]).collect())
            .collect();
        let s = dataset_from(states, 1.0);
        let k = Kernel::Gaussian { gamma: 0.7 };
        let p = rkhs_penalty(&k, &s, 1.0, LossSpec::Euclidean).unwrap();
        assert_abs_diff_eq!(p, 8.0 * std::f64::consts::SQRT_2 / 10.0, epsilon = 1e-12);
        assert_eq!(rkhs_penalty(&k, &s, 0.0, LossSpec::Euclidean).unwrap(), 0.0);
        let p2 = rkhs_penalty(&k, &s, 2.0, LossSpec::Euclidean).unwrap();
        assert_abs_diff_eq!(p2, 2.0 * p, epsilon = 1e-12);
    }

    #[test]
    fn nn_penalty_zero_states() {
        let s = dataset_from(vec![vec![vec![0.0], vec![0.0]]; 4], 1.0);
        let p = nn_penalty(1, 2.0, &s, LossSpec::Euclidean).unwrap();
        let expected = 2.0 * std::f64::consts::SQRT_2 * ((2.0 * 2f64.ln()).sqrt() + 1.0);
        assert_abs_diff_eq!(p, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(p, 6.158_645_569, epsilon = 1e-9);
        assert_eq!(nn_penalty(2, 0.0, &s, LossSpec::Euclidean).unwrap(), 0.0);
        let by_depth: Vec<f64> = (1..=3).map(|d| nn_penalty(d, 1.5, &s, LossSpec::Euclidean).unwrap()).collect();
        assert!(by_depth.windows(2).all(|w| w[0] <= w[1]));
        assert!(nn_penalty(0, 1.0, &s, LossSpec::Euclidean).is_err());
    }

    #[test]
    fn grid_lookup_examples() {
        let g = DiscretizationGrid::from_spacing(0.01, 20.0).unwrap();
        assert_eq!(g.len(), 2000);
        assert!(g.max() >= 20.0);
        assert_eq!(g.lookup_q(0.004).unwrap(), GridPoint { q: 1, value: 0.01 });
        assert_eq!(g.lookup_q(0.0151).unwrap(), GridPoint { q: 2, value: 0.02 });
        assert_eq!(g.lookup_q(g.values()[2]).unwrap().q, 3);
        assert_eq!(g.lookup_q(0.0).unwrap().q, 1);
        assert_eq!(g.lookup_q(20.0).unwrap().q, 2000);
        assert!(matches!(g.lookup_q(20.5), Err(Error::ConstraintViolated { .. })));
    }

    #[test]
    fn grid_covers_non_multiple_maximum() {
        let g = DiscretizationGrid::from_spacing(0.3, 1.0).unwrap();
        assert_eq!(g.len(), 4);
        assert_abs_diff_eq!(g.max(), 1.2, epsilon = 1e-12);
        assert!(DiscretizationGrid::from_values(vec![1.0, 1.0]).is_err());
        assert!(DiscretizationGrid::from_values(vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn epsilon_examples() {
        let delta = 4.0 / std::f64::consts::E.powi(2);
        let e = epsilon_bound(0.0, 1.0, 1.0, 2, delta, None).unwrap();
        assert_abs_diff_eq!(e, 6.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(e, epsilon_bound(0.0, 1.0, 1.0, 2, delta, Some(1)).unwrap());
        let e4 = epsilon_bound(0.0, 1.0, 1.0, 8, delta, None).unwrap();
        assert_abs_diff_eq!(e4, e / 2.0, epsilon = 1e-12);
        assert!(epsilon_bound(0.1, 1.0, 1.0, 2, 0.1, Some(10)).unwrap() > epsilon_bound(0.1, 1.0, 1.0, 2, 0.1, Some(9)).unwrap());
        assert!(epsilon_bound(0.0, 1.0, 1.0, 2, 1.5, None).is_err());
        assert!(epsilon_bound(0.0, 1.0, 1.0, 2, 0.0, None).is_err());
    }
}
