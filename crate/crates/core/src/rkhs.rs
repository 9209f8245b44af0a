//! Norm-constrained kernel classes.
//!
//! Over a dataset `S`, minimizing the clipped training error on the ball
//! `{ f : |f_j|_H <= B_k for all j }` reduces to kernel expansions anchored at
//! the `N * T` training inputs,
//!
//! ```text
//! f(x) = sum_a alpha_a kappa(x_a, x),        alpha_a in R^n,
//! |f_j|_H^2 = alpha_j^T G alpha_j,           G_ab = kappa(x_a, x_b),
//! ```
//!
//! because only the values of `f` at the anchors enter the objective. The
//! reduced problem is solved by projected gradient descent; the projection
//! radially rescales each output column `alpha_j` back onto the norm ball.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::opt::{FitSummary, OptConfig};
use crate::risk::{clip_in_place, clip_vjp, clipped_loss, LossSpec, Predictor};

/// Below this norm a column is treated as feasible without rescaling.
const MIN_RESCALE_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Kernel {
    /// `exp(-gamma |x - x'|^2)`
    Gaussian { gamma: f64 },
    /// `(x^T x' + offset)^degree`
    Polynomial { offset: f64, degree: u32 },
}

impl Kernel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Kernel::Gaussian { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(Error::InvalidKernel(format!("gaussian gamma must be positive, got {gamma}")))
            }
            Kernel::Polynomial { offset, .. } if !(offset >= 0.0 && offset.is_finite()) => Err(
                Error::InvalidKernel(format!("polynomial offset must be non-negative, got {offset}")),
            ),
            Kernel::Polynomial { degree: 0, .. } => {
                Err(Error::InvalidKernel("polynomial degree must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match *self {
            Kernel::Gaussian { gamma } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-gamma * d2).exp()
            }
            Kernel::Polynomial { offset, degree } => {
                let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                (dot + offset).powi(degree as i32)
            }
        }
    }

    pub fn describe(&self) -> String {
        match *self {
            Kernel::Gaussian { gamma } => format!("gaussian(gamma={gamma})"),
            Kernel::Polynomial { offset, degree } => format!("polynomial(c={offset},q={degree})"),
        }
    }
}

/// Gram matrix `G_ab = kappa(p_a, p_b)`.
pub fn gram<P: AsRef<[f64]>>(kernel: &Kernel, points: &[P]) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(Error::invalid("gram needs at least one point"));
    }
    let m = points.len();
    let g = DMatrix::from_fn(m, m, |a, b| kernel.eval(points[a].as_ref(), points[b].as_ref()));
    for a in 0..m {
        for b in 0..a {
            let (u, v) = (g[(a, b)], g[(b, a)]);
            if (u - v).abs() > 1e-12 * u.abs().max(v.abs()).max(1.0) {
                return Err(Error::KernelBug(format!("gram entry ({a},{b}) is not symmetric: {u} vs {v}")));
            }
        }
    }
    Ok(g)
}

/// A fitted kernel expansion. Rows of `alphas` pair with `anchors`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPredictor {
    pub kernel: Kernel,
    pub anchors: Vec<Vec<f64>>,
    pub alphas: DMatrix<f64>,
    pub clip_bound: f64,
}

impl KernelPredictor {
    pub fn zero(kernel: Kernel, anchors: Vec<Vec<f64>>, n: usize, clip_bound: f64) -> Self {
        let m = anchors.len();
        Self {
            kernel,
            anchors,
            alphas: DMatrix::zeros(m, n),
            clip_bound,
        }
    }

    pub fn clipped(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.predict(x);
        clip_in_place(&mut y, self.clip_bound);
        y
    }

    /// RKHS norm of every output component.
    pub fn rkhs_norms(&self) -> Result<Vec<f64>> {
        let g = gram(&self.kernel, &self.anchors)?;
        let ga = &g * &self.alphas;
        (0..self.alphas.ncols())
            .map(|j| quad_norm(self.alphas.column(j).dot(&ga.column(j))))
            .collect()
    }

    pub fn rkhs_norm(&self, j: usize) -> Result<f64> {
        if j >= self.alphas.ncols() {
            return Err(Error::invalid(format!("output index {j} out of range")));
        }
        Ok(self.rkhs_norms()?[j])
    }

    pub fn max_rkhs_norm(&self) -> Result<f64> {
        Ok(self.rkhs_norms()?.into_iter().fold(0.0, f64::max))
    }

    /// Writes the predictor as `# key=value` metadata lines followed by a CSV
    /// table `anchor,x0..x{n-1},alpha0..alpha{n-1}`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let n = self.alphas.ncols();
        writeln!(w, "# model=kernel_expansion")?;
        match self.kernel {
            Kernel::Gaussian { gamma } => {
                writeln!(w, "# kernel=gaussian")?;
                writeln!(w, "# gamma={gamma}")?;
            }
            Kernel::Polynomial { offset, degree } => {
                writeln!(w, "# kernel=polynomial")?;
                writeln!(w, "# offset={offset}")?;
                writeln!(w, "# degree={degree}")?;
            }
        }
        writeln!(w, "# clip_bound={}", self.clip_bound)?;
        let mut cw = csv::Writer::from_writer(w);
        let mut header = vec!["anchor".to_string()];
        header.extend((0..n).map(|j| format!("x{j}")));
        header.extend((0..n).map(|j| format!("alpha{j}")));
        cw.write_record(&header)?;
        for (a, x) in self.anchors.iter().enumerate() {
            let mut row = vec![a.to_string()];
            row.extend(x.iter().map(f64::to_string));
            row.extend(self.alphas.row(a).iter().map(f64::to_string));
            cw.write_record(&row)?;
        }
        cw.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let (meta, body) = crate::srm::split_metadata(reader)?;
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| Error::Format(format!("missing metadata key {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Format(format!("bad value for {k}")))
        };
        if get("model")? != "kernel_expansion" {
            return Err(Error::Format("not a kernel_expansion file".into()));
        }
        let kernel = match get("kernel")?.as_str() {
            "gaussian" => Kernel::Gaussian { gamma: num("gamma")? },
            "polynomial" => Kernel::Polynomial {
                offset: num("offset")?,
                degree: get("degree")?
                    .parse()
                    .map_err(|_| Error::Format("bad degree".into()))?,
            },
            other => return Err(Error::Format(format!("unknown kernel {other}"))),
        };
        kernel.validate()?;
        let clip_bound = num("clip_bound")?;
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let width = r.headers()?.len();
        if width < 3 || (width - 1) % 2 != 0 {
            return Err(Error::Format("expected columns anchor,x...,alpha...".into()));
        }
        let n = (width - 1) / 2;
        let mut anchors = Vec::new();
        let mut flat = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad number {v}"))))
                .collect::<Result<Vec<_>>>()?;
            anchors.push(vals[..n].to_vec());
            flat.extend_from_slice(&vals[n..]);
        }
        let alphas = DMatrix::from_row_slice(anchors.len(), n, &flat);
        Ok(Self {
            kernel,
            anchors,
            alphas,
            clip_bound,
        })
    }
}

impl Predictor for KernelPredictor {
    fn dim(&self) -> usize {
        self.alphas.ncols()
    }

    /// Unclipped expansion `sum_a alpha_a kappa(x_a, x)`.
    fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.alphas.ncols()];
        for (a, anchor) in self.anchors.iter().enumerate() {
            let k = self.kernel.eval(anchor, x);
            if k == 0.0 {
                continue;
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.alphas[(a, j)] * k;
            }
        }
        out
    }
}

fn quad_norm(q: f64) -> Result<f64> {
    if q < -1e-10 {
        return Err(Error::Numeric(format!("negative RKHS quadratic form {q}")));
    }
    Ok(q.max(0.0).sqrt())
}

/// Constrained kernel class `{ f : |f_j|_H <= norm_bound }`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RkhsClassSpec {
    pub kernel: Kernel,
    pub norm_bound: f64,
}

/// The reduced least-loss problem over expansion coefficients.
pub struct ReducedProblem {
    pub gram: DMatrix<f64>,
    pub anchors: Vec<Vec<f64>>,
    pub targets: DMatrix<f64>,
    pub clip_bound: f64,
    pub loss: LossSpec,
}

impl ReducedProblem {
    pub fn new(s: &Dataset, kernel: &Kernel, loss: LossSpec) -> Result<Self> {
        kernel.validate()?;
        let (anchors, next): (Vec<Vec<f64>>, Vec<Vec<f64>>) =
            s.transitions().map(|(x, y)| (x.to_vec(), y.to_vec())).unzip();
        let n = s.dim();
        let flat: Vec<f64> = next.iter().flatten().copied().collect();
        Ok(Self {
            gram: gram(kernel, &anchors)?,
            targets: DMatrix::from_row_slice(anchors.len(), n, &flat),
            anchors,
            clip_bound: s.state_bound(),
            loss,
        })
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn predictions(&self, alphas: &DMatrix<f64>) -> DMatrix<f64> {
        &self.gram * alphas
    }

    /// Clipped training error given anchor predictions `P = G alpha`.
    pub fn objective_at(&self, preds: &DMatrix<f64>) -> f64 {
        let m = self.n_anchors();
        let mut total = 0.0;
        let mut p = vec![0.0; preds.ncols()];
        let mut y = vec![0.0; preds.ncols()];
        for a in 0..m {
            for j in 0..p.len() {
                p[j] = preds[(a, j)];
                y[j] = self.targets[(a, j)];
            }
            total += clipped_loss(&mut p, &y, self.clip_bound, self.loss);
        }
        total / m as f64
    }

    pub fn objective(&self, alphas: &DMatrix<f64>) -> f64 {
        self.objective_at(&self.predictions(alphas))
    }

    /// Derivative of the objective w.r.t. the anchor predictions.
    pub fn prediction_gradient(&self, preds: &DMatrix<f64>) -> DMatrix<f64> {
        let (m, n) = preds.shape();
        let mut out = DMatrix::zeros(m, n);
        let (mut p, mut r, mut dl, mut dp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for a in 0..m {
            for j in 0..n {
                p[j] = preds[(a, j)];
            }
            r.copy_from_slice(&p);
            clip_in_place(&mut r, self.clip_bound);
            for j in 0..n {
                r[j] -= self.targets[(a, j)];
            }
            self.loss.gradient(&r, &mut dl);
            clip_vjp(&p, self.clip_bound, &dl, &mut dp);
            for j in 0..n {
                out[(a, j)] = dp[j] / m as f64;
            }
        }
        out
    }

    /// Euclidean gradient of the objective w.r.t. `alpha`: `G dObj/dP`.
    pub fn gradient(&self, alphas: &DMatrix<f64>) -> DMatrix<f64> {
        &self.gram * self.prediction_gradient(&self.predictions(alphas))
    }

    /// RKHS norms of every column, given `P = G alpha`.
    pub fn norms(&self, alphas: &DMatrix<f64>, preds: &DMatrix<f64>) -> Result<Vec<f64>> {
        (0..alphas.ncols())
            .map(|j| quad_norm(alphas.column(j).dot(&preds.column(j))))
            .collect()
    }

    /// Radial projection of every column onto `alpha_j^T G alpha_j <= bound^2`,
    /// applied to `alpha` and the matching predictions.
    pub fn project(&self, alphas: &mut DMatrix<f64>, preds: &mut DMatrix<f64>, bound: f64) -> Result<()> {
        for (j, norm) in self.norms(alphas, preds)?.into_iter().enumerate() {
            let mut norm = norm;
            // the quadratic form is not exactly homogeneous in floating
            // point, so re-check after rescaling
            for _ in 0..4 {
                if !(norm > bound && norm > MIN_RESCALE_NORM) {
                    break;
                }
                let s = bound / norm * (1.0 - 1e-12);
                alphas.column_mut(j).scale_mut(s);
                preds.column_mut(j).scale_mut(s);
                norm = quad_norm(alphas.column(j).dot(&preds.column(j)))?;
            }
        }
        Ok(())
    }
}

/// Relative objective decrease that counts as progress for patience.
const PROGRESS_TOL: f64 = 1e-9;
const MAX_BACKTRACKS: usize = 40;
const STEP_GROWTH: f64 = 1.25;
/// Gram eigenvalues below this fraction of the largest are dropped. Keeping
/// the expansion coefficients at most `1/sqrt(RANK_TOL)` times larger than
/// the features keeps `alpha^T G alpha` accurate to about `1e-8` relative.
const RANK_TOL: f64 = 1e-8;
const IRLS_MAX_ITERS: usize = 25;
const IRLS_TOL: f64 = 1e-7;
/// Residual floor in the reweighting, so exact fits stay finite.
const IRLS_FLOOR: f64 = 1e-10;

/// Constrained ERM over the kernel ball `|f_j|_H <= norm_bound`.
///
/// The search runs over expansions on the training states, which contain a
/// minimizer. In the orthonormal feature basis of the Gram matrix
/// (`G = Phi Phi^T`, numerically null directions dropped) the constraint is a
/// Euclidean ball per output and the Euclidean loss is minimized by
/// iteratively reweighted least squares: each step replaces `|r_i|` by the
/// majorizer `|r_i|^2 / (2 c_i) + c_i / 2` at the current residuals and solves
/// the resulting ball-constrained weighted least-squares problem exactly. The
/// result is refined by projected gradient descent on the exact clipped
/// objective.
pub fn fit_constrained(
    s: &Dataset,
    kernel: &Kernel,
    norm_bound: f64,
    loss: LossSpec,
    opt: &OptConfig,
    _seed: u64,
) -> Result<(KernelPredictor, FitSummary)> {
    let problem = ReducedProblem::new(s, kernel, loss)?;
    fit_reduced(&problem, *kernel, norm_bound, opt)
}

pub fn fit_reduced(
    problem: &ReducedProblem,
    kernel: Kernel,
    norm_bound: f64,
    opt: &OptConfig,
) -> Result<(KernelPredictor, FitSummary)> {
    if !(norm_bound >= 0.0 && norm_bound.is_finite()) {
        return Err(Error::invalid(format!("norm bound must be non-negative, got {norm_bound}")));
    }
    opt.validate()?;
    let (m, n) = problem.targets.shape();
    let (mut alphas, irls_iters) = if norm_bound > 0.0 {
        irls(problem, norm_bound)?
    } else {
        (DMatrix::zeros(m, n), 0)
    };
    let mut preds = problem.predictions(&alphas);
    problem.project(&mut alphas, &mut preds, norm_bound)?;
    let start = problem.objective_at(&preds);
    let zero = problem.objective_at(&DMatrix::zeros(m, n));
    if zero < start {
        alphas.fill(0.0);
        preds.fill(0.0);
    }
    let polish = descend(problem, alphas, preds, norm_bound, opt)?;
    let warning = (!polish.converged).then(|| {
        format!(
            "no convergence within {} iterations (objective {})",
            opt.max_iters, polish.objective
        )
    });
    let predictor = KernelPredictor {
        kernel,
        anchors: problem.anchors.clone(),
        alphas: polish.alphas,
        clip_bound: problem.clip_bound,
    };
    Ok((
        predictor,
        FitSummary {
            training_error: polish.objective,
            iterations: irls_iters + polish.iterations,
            warning,
        },
    ))
}

/// Reweighted least squares on the unclipped objective. Returns the
/// expansion coefficients and the number of reweighting steps.
fn irls(problem: &ReducedProblem, bound: f64) -> Result<(DMatrix<f64>, usize)> {
    let (m, n) = problem.targets.shape();
    let eig = problem.gram.clone().symmetric_eigen();
    let w_max = eig.eigenvalues.max();
    if !(w_max > 0.0) {
        return Ok((DMatrix::zeros(m, n), 0));
    }
    let kept: Vec<usize> = (0..m).filter(|&i| eig.eigenvalues[i] > RANK_TOL * w_max).collect();
    let r = kept.len();
    // Phi = V_kept diag(sqrt(w)), and alpha = V_kept diag(1/sqrt(w)) beta
    let phi = DMatrix::from_fn(m, r, |a, c| eig.eigenvectors[(a, kept[c])] * eig.eigenvalues[kept[c]].sqrt());
    let to_alpha = DMatrix::from_fn(m, r, |a, c| eig.eigenvectors[(a, kept[c])] / eig.eigenvalues[kept[c]].sqrt());

    let mut weights = vec![1.0; m];
    let mut best_beta = DMatrix::<f64>::zeros(r, n);
    let mut best_obj = unclipped_objective(&DMatrix::zeros(m, n), &problem.targets);
    let mut iters = 0;
    for _ in 0..IRLS_MAX_ITERS {
        iters += 1;
        let beta = weighted_ball_lsq(&phi, &problem.targets, &weights, bound);
        let preds = &phi * &beta;
        let obj = unclipped_objective(&preds, &problem.targets);
        if !obj.is_finite() {
            return Err(Error::Numeric("reweighted least squares produced a non-finite fit".into()));
        }
        let improvement = best_obj - obj;
        if obj < best_obj {
            best_obj = obj;
            best_beta = beta;
        }
        if improvement <= IRLS_TOL * best_obj.max(f64::MIN_POSITIVE) {
            break;
        }
        for (a, w) in weights.iter_mut().enumerate() {
            let res: f64 = (0..n).map(|j| (preds[(a, j)] - problem.targets[(a, j)]).powi(2)).sum();
            *w = 1.0 / res.sqrt().max(IRLS_FLOOR);
        }
    }
    Ok((to_alpha * best_beta, iters))
}

fn unclipped_objective(preds: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let diff = preds - targets;
    diff.row_iter().map(|r| r.norm()).sum::<f64>() / preds.nrows() as f64
}

/// Solves `min_beta sum_a w_a |(Phi beta)_a - y_a|^2` subject to
/// `|beta_j| <= bound` for every output column `j`.
///
/// With `H = Phi^T W Phi = Q diag(h) Q^T` and `c = Q^T Phi^T W y_j`, the
/// solution is `beta_j = Q diag(1 / (h + mu)) c` with the smallest `mu >= 0`
/// meeting the bound, found by bisection on the monotone norm.
fn weighted_ball_lsq(phi: &DMatrix<f64>, targets: &DMatrix<f64>, weights: &[f64], bound: f64) -> DMatrix<f64> {
    let r = phi.ncols();
    let mut wphi = phi.clone();
    for (a, w) in weights.iter().enumerate() {
        wphi.row_mut(a).scale_mut(*w);
    }
    let h = phi.transpose() * &wphi;
    let eig = h.symmetric_eigen();
    let h_max = eig.eigenvalues.max().max(0.0);
    let rhs = eig.eigenvectors.transpose() * (wphi.transpose() * targets);
    let mut beta = DMatrix::zeros(r, targets.ncols());
    for j in 0..targets.ncols() {
        let c = rhs.column(j);
        let sq_norm = |mu: f64| -> f64 {
            (0..r)
                .filter(|&i| eig.eigenvalues[i] > 1e-13 * h_max)
                .map(|i| (c[i] / (eig.eigenvalues[i] + mu)).powi(2))
                .sum()
        };
        let mu = if sq_norm(0.0) <= bound * bound {
            0.0
        } else {
            let (mut lo, mut hi) = (0.0, c.norm() / bound);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if sq_norm(mid) > bound * bound {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            hi
        };
        let coef = nalgebra::DVector::from_fn(r, |i, _| {
            let hi = eig.eigenvalues[i];
            if hi > 1e-13 * h_max {
                c[i] / (hi + mu)
            } else {
                0.0
            }
        });
        beta.set_column(j, &(&eig.eigenvectors * coef));
    }
    beta
}

struct Descent {
    alphas: DMatrix<f64>,
    objective: f64,
    iterations: usize,
    converged: bool,
}

/// Projected gradient descent on the clipped objective from a feasible start.
///
/// The descent direction is the functional (RKHS) gradient, i.e. the
/// gradient with respect to the predictions scaled by the number of anchors;
/// it is the steepest-descent direction in the `G`-seminorm, the metric in
/// which the radial rescaling is the exact projection. Steps that do not
/// decrease the objective are halved; accepted steps grow the step size by a
/// constant factor. The run stops once the objective has not improved for
/// `patience` consecutive iterations.
fn descend(
    problem: &ReducedProblem,
    mut alphas: DMatrix<f64>,
    mut preds: DMatrix<f64>,
    norm_bound: f64,
    opt: &OptConfig,
) -> Result<Descent> {
    let m = problem.n_anchors();
    let mut obj = problem.objective_at(&preds);
    let mut step = opt.step;
    let mut best = obj;
    let mut stale = 0usize;
    let mut iterations = 0usize;
    let mut converged = norm_bound == 0.0;

    while !converged && iterations < opt.max_iters {
        iterations += 1;
        let direction = problem.prediction_gradient(&preds) * (m as f64);
        let g_dir = &problem.gram * &direction;
        let mut accepted = false;
        for _ in 0..MAX_BACKTRACKS {
            let mut cand_a = &alphas - &direction * step;
            let mut cand_p = &preds - &g_dir * step;
            problem.project(&mut cand_a, &mut cand_p, norm_bound)?;
            let cand_obj = problem.objective_at(&cand_p);
            if !cand_obj.is_finite() {
                return Err(Error::Numeric(format!("objective became {cand_obj} at iteration {iterations}")));
            }
            if cand_obj <= obj {
                alphas = cand_a;
                preds = cand_p;
                obj = cand_obj;
                step *= STEP_GROWTH;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if obj < best * (1.0 - PROGRESS_TOL) {
            best = obj;
            stale = 0;
        } else {
            stale += 1;
        }
        if !accepted || stale >= opt.patience {
            converged = true;
        }
    }
    Ok(Descent {
        alphas,
        objective: obj,
        iterations,
        converged,
    })
}

/// Lower estimate of `sup (1/N) sum_i sigma_i clip(f(x_i))_j` over the
/// kernel ball of radius `norm_bound`, for the sample whose Gram matrix is
/// given.
///
/// The other output components only shrink component `j` through clipping,
/// so the supremum is attained with them at zero and reduces to a scalar
/// problem with saturation at `clip_bound`. Without saturation the maximizer
/// is `alpha = M sigma / sqrt(sigma^T G sigma)`; when it saturates, projected
/// gradient ascent refines it.
pub fn max_clipped_correlation(
    gram: &DMatrix<f64>,
    sigma: &[f64],
    _component: usize,
    _n_outputs: usize,
    norm_bound: f64,
    clip_bound: f64,
) -> f64 {
    let big_n = sigma.len() as f64;
    if norm_bound == 0.0 {
        return 0.0;
    }
    let sig = nalgebra::DVector::from_column_slice(sigma);
    let u = gram * &sig;
    let q = sig.dot(&u);
    if q <= 1e-15 {
        return 0.0;
    }
    let value = |v: &nalgebra::DVector<f64>| -> f64 {
        sigma
            .iter()
            .zip(v.iter())
            .map(|(s, vi)| s * vi.clamp(-clip_bound, clip_bound))
            .sum::<f64>()
            / big_n
    };
    let mut alpha = &sig * (norm_bound / q.sqrt());
    let mut v = &u * (norm_bound / q.sqrt());
    let peak = v.amax();
    if peak <= clip_bound {
        return norm_bound * q.sqrt() / big_n;
    }
    // the unsaturated maximizer shrunk until it just touches the clip level
    let mut best = value(&(&v * (clip_bound / peak))).max(value(&v));
    let mut current = value(&v);
    let mut step = 0.5 * norm_bound / q.sqrt();
    for _ in 0..200 {
        let dir = nalgebra::DVector::from_iterator(
            sigma.len(),
            sigma.iter().zip(v.iter()).map(|(s, vi)| if vi.abs() < clip_bound { *s } else { 0.0 }),
        );
        if dir.amax() == 0.0 {
            break;
        }
        let g_dir = gram * &dir;
        let mut improved = false;
        for _ in 0..20 {
            let mut a2 = &alpha + &dir * step;
            let mut v2 = &v + &g_dir * step;
            let nrm = a2.dot(&v2).max(0.0).sqrt();
            if nrm > norm_bound {
                a2 *= norm_bound / nrm;
                v2 *= norm_bound / nrm;
            }
            let val = value(&v2);
            if val > current {
                alpha = a2;
                v = v2;
                current = val;
                step *= 1.25;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
        best = best.max(current);
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    const E_INV: f64 = 0.367_879_441_171_442_33;

    #[test]
    fn kernel_examples() {
        let g1 = Kernel::Gaussian { gamma: 1.0 };
        assert_eq!(g1.eval(&[0.3, 0.4], &[0.3, 0.4]), 1.0);
        let g = Kernel::Gaussian { gamma: 0.5 };
        assert_abs_diff_eq!(g.eval(&[0.0, 0.0], &[1.0, 1.0]), E_INV, epsilon = 1e-15);
        let p = Kernel::Polynomial { offset: 1.0, degree: 2 };
        assert_eq!(p.eval(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        assert!(Kernel::Gaussian { gamma: 0.0 }.validate().is_err());
        assert!(Kernel::Polynomial { offset: -1.0, degree: 1 }.validate().is_err());
        assert!(Kernel::Polynomial { offset: 0.0, degree: 0 }.validate().is_err());
    }

    #[test]
    fn kernel_symmetry_and_unit_diagonal() {
        let mut r = rng::stream(5, 0);
        let kernels = [
            Kernel::Gaussian { gamma: 0.37 },
            Kernel::Polynomial { offset: 0.5, degree: 3 },
        ];
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            for k in &kernels {
                let (a, b) = (k.eval(&x, &y), k.eval(&y, &x));
                assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
            }
            assert_eq!(kernels[0].eval(&x, &x), 1.0);
        }
    }

    #[test]
    fn gram_examples() {
        let g = Kernel::Gaussian { gamma: 1.0 };
        assert_eq!(gram(&g, &[vec![0.2]]).unwrap(), DMatrix::from_element(1, 1, 1.0));
        let dup = gram(&g, &[vec![0.2, 0.1], vec![0.2, 0.1]]).unwrap();
        assert_eq!(dup, DMatrix::from_element(2, 2, 1.0));
        let two = gram(&g, &[vec![0.0], vec![1.0]]).unwrap();
        assert_abs_diff_eq!(two[(0, 1)], E_INV, epsilon = 1e-15);
        assert_abs_diff_eq!(two[(1, 0)], E_INV, epsilon = 1e-15);
        assert!(gram::<Vec<f64>>(&g, &[]).is_err());
    }

    #[test]
    fn gram_is_psd_up_to_round_off() {
        let mut r = rng::stream(6, 0);
        let pts: Vec<Vec<f64>> = (0..30).map(|_| (0..2).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        for k in [Kernel::Gaussian { gamma: 3.0 }, Kernel::Polynomial { offset: 1.0, degree: 2 }] {
            let g = gram(&k, &pts).unwrap();
            let min_eig = g.clone().symmetric_eigenvalues().min();
            assert!(min_eig >= -1e-8 * g.trace());
        }
    }

    #[test]
    fn norm_and_predict_examples() {
        let k = Kernel::Gaussian { gamma: 1.0 };
        let zero = KernelPredictor::zero(k, vec![vec![0.1, 0.2]], 2, 1.0);
        assert_eq!(zero.rkhs_norm(0).unwrap(), 0.0);
        assert_eq!(zero.predict(&[0.5, 0.5]), vec![0.0, 0.0]);

        let single = KernelPredictor {
            kernel: k,
            anchors: vec![vec![0.3]],
            alphas: DMatrix::from_element(1, 1, -2.5),
            clip_bound: 10.0,
        };
        assert_abs_diff_eq!(single.rkhs_norm(0).unwrap(), 2.5, epsilon = 1e-15);
        assert_eq!(single.predict(&[0.3]), vec![-2.5]);
        assert!(single.rkhs_norm(1).is_err());

        let dup = KernelPredictor {
            kernel: k,
            anchors: vec![vec![0.3], vec![0.3]],
            alphas: DMatrix::from_column_slice(2, 1, &[1.0, -1.0]),
            clip_bound: 10.0,
        };
        assert_eq!(dup.rkhs_norm(0).unwrap(), 0.0);

        let pair = KernelPredictor {
            kernel: k,
            anchors: vec![vec![0.0], vec![1.0]],
            alphas: DMatrix::from_column_slice(2, 1, &[1.0, 1.0]),
            clip_bound: 10.0,
        };
        assert_abs_diff_eq!(pair.predict(&[0.0])[0], 1.0 + E_INV, epsilon = 1e-15);
    }

    #[test]
    fn negative_quadratic_form_is_an_error() {
        assert!(quad_norm(-1e-11).is_ok());
        assert!(matches!(quad_norm(-1e-6), Err(Error::Numeric(_))));
    }

    fn linear_dataset() -> Dataset {
        let trajs = [0.8, -0.6, 0.3, 1.0]
            .iter()
            .map(|x0| Trajectory::new((0..4).map(|t| vec![x0 * 0.5f64.powi(t)]).collect()).unwrap())
            .collect();
        Dataset::new(trajs, 1.0).unwrap()
    }

    #[test]
    fn fit_reaches_linear_map_in_span() {
        let s = linear_dataset();
        // Oracle: least squares on the linear-kernel system, f(x) = w x with
        // w = sum x y / sum x^2, which is exactly 0.5 here.
        let (sxy, sxx) = s
            .transitions()
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x[0] * y[0], b + x[0] * x[0]));
        assert_abs_diff_eq!(sxy / sxx, 0.5, epsilon = 1e-15);

        let k = Kernel::Polynomial { offset: 0.0, degree: 1 };
        let (f, summary) = fit_constrained(&s, &k, 100.0, LossSpec::Euclidean, &OptConfig::default(), 0).unwrap();
        assert!(summary.training_error < 1e-4, "{summary:?}");
        let te = crate::risk::training_error(&f, &s, LossSpec::Euclidean).unwrap();
        assert_abs_diff_eq!(te, summary.training_error, epsilon = 1e-12);
    }

    #[test]
    fn zero_bound_returns_zero_expansion() {
        let s = linear_dataset();
        let k = Kernel::Gaussian { gamma: 1.0 };
        let (f, summary) = fit_constrained(&s, &k, 0.0, LossSpec::Euclidean, &OptConfig::default(), 0).unwrap();
        assert!(f.alphas.iter().all(|a| *a == 0.0));
        let zero_err = crate::risk::training_error(&crate::risk::zero_predictor(1), &s, LossSpec::Euclidean).unwrap();
        assert_abs_diff_eq!(summary.training_error, zero_err, epsilon = 1e-15);
    }

    #[test]
    fn projection_is_radial_and_idempotent() {
        let s = linear_dataset();
        let p = ReducedProblem::new(&s, &Kernel::Gaussian { gamma: 2.0 }, LossSpec::Euclidean).unwrap();
        let mut r = rng::stream(8, 0);
        let mut a = DMatrix::from_fn(p.n_anchors(), 1, |_, _| r.random_range(-3.0..3.0));
        let mut preds = p.predictions(&a);
        p.project(&mut a, &mut preds, 0.7).unwrap();
        let norms = p.norms(&a, &preds).unwrap();
        assert!(norms[0] <= 0.7 + 1e-10);
        let (a0, p0) = (a.clone(), preds.clone());
        p.project(&mut a, &mut preds, 0.7).unwrap();
        assert!((&a - &a0).amax() <= 1e-15 && (&preds - &p0).amax() <= 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let f = KernelPredictor {
            kernel: Kernel::Polynomial { offset: 0.25, degree: 3 },
            anchors: vec![vec![0.1, -0.2], vec![1.0 / 3.0, 0.0]],
            alphas: DMatrix::from_row_slice(2, 2, &[1.5, -2.0, 1e-9, 7.0]),
            clip_bound: 2.2,
        };
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let back = KernelPredictor::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn correlation_sup_matches_closed_form_without_clipping() {
        let pts = vec![vec![0.0], vec![0.5], vec![1.0]];
        let g = gram(&Kernel::Gaussian { gamma: 1.0 }, &pts).unwrap();
        let sigma = [1.0, -1.0, 1.0];
        let sig = nalgebra::DVector::from_column_slice(&sigma);
        let exact = 0.3 * sig.dot(&(&g * &sig)).sqrt() / 3.0;
        assert_abs_diff_eq!(max_clipped_correlation(&g, &sigma, 0, 1, 0.3, 10.0), exact, epsilon = 1e-15);
        // saturated case never exceeds the clip level
        let v = max_clipped_correlation(&g, &sigma, 0, 1, 100.0, 0.2);
        assert!(v <= 0.2 + 1e-12 && v > 0.0);
        assert_eq!(max_clipped_correlation(&g, &sigma, 0, 1, 0.0, 1.0), 0.0);
    }
}
