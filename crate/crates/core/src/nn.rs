//! Frobenius-norm-constrained multilayer perceptrons with folded-in biases:
//!
//! ```text
//! f(x) = W_D g~(W_{D-1} g~( ... g~(W_1 [x; 1]) ... ))
//! ```
//!
//! with `W_1` of shape `(H+1) x (n+1)`, hidden `W_d` of shape
//! `(H+1) x (H+1)` and `W_D` of shape `n x (H+1)`. The map `g~` applies the
//! activation to the first `H` entries and sets the last entry to the
//! constant 1, which carries the bias into the next layer. Depth 1 is the
//! plain affine map `W_1 [x; 1]` with `W_1` of shape `n x (n+1)`.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::opt::{FitSummary, OptConfig};
use crate::risk::{clip_in_place, clip_vjp, clipped_loss, training_error, LossSpec, Predictor};
use crate::rng;

/// 1-Lipschitz, positively homogeneous activation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative, with 0 at the kink.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Network class `F_NN(D, H, B)`: every layer has `|W_d|_F <= norm_bound`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NnClassSpec {
    pub depth: usize,
    pub width: usize,
    pub norm_bound: f64,
}

impl NnClassSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::invalid(format!(
                "network depth and width must be at least 1, got D={} H={}",
                self.depth, self.width
            )));
        }
        if !(self.norm_bound > 0.0 && self.norm_bound.is_finite()) {
            return Err(Error::invalid(format!(
                "network norm bound must be positive, got {}",
                self.norm_bound
            )));
        }
        Ok(())
    }
}

/// Layer shapes `(rows, cols)` for input/output dimension `n`.
pub fn layer_shapes(n: usize, depth: usize, width: usize) -> Vec<(usize, usize)> {
    if depth == 1 {
        return vec![(n, n + 1)];
    }
    let mut shapes = vec![(width + 1, n + 1)];
    shapes.extend(std::iter::repeat((width + 1, width + 1)).take(depth - 2));
    shapes.push((n, width + 1));
    shapes
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpPredictor {
    pub input_dim: usize,
    pub depth: usize,
    pub width: usize,
    pub weights: Vec<DMatrix<f64>>,
    pub activation: Activation,
    pub clip_bound: f64,
}

/// Per-layer inputs and pre-activations of one forward pass.
struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

fn matvec(w: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.nrows()];
    for (c, zc) in z.iter().enumerate() {
        if *zc == 0.0 {
            continue;
        }
        for (r, o) in out.iter_mut().enumerate() {
            *o += w[(r, c)] * zc;
        }
    }
    out
}

impl MlpPredictor {
    pub fn zeros(input_dim: usize, depth: usize, width: usize, clip_bound: f64) -> Self {
        Self {
            input_dim,
            depth,
            width,
            weights: layer_shapes(input_dim, depth, width)
                .into_iter()
                .map(|(r, c)| DMatrix::zeros(r, c))
                .collect(),
            activation: Activation::Relu,
            clip_bound,
        }
    }

    /// Checks that the weight shapes match `(n, D, H)`.
    pub fn validate(&self) -> Result<()> {
        let expected = layer_shapes(self.input_dim, self.depth, self.width);
        if self.weights.len() != expected.len()
            || self.weights.iter().zip(&expected).any(|(w, s)| w.shape() != *s)
        {
            return Err(Error::invalid("weight shapes do not match (n, D, H)"));
        }
        Ok(())
    }

    fn lift(&self, pre: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = pre.iter().map(|v| self.activation.apply(*v)).collect();
        *z.last_mut().expect("hidden layer has H+1 >= 2 entries") = 1.0;
        z
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut z = x.to_vec();
        z.push(1.0);
        let mut inputs = Vec::with_capacity(self.depth);
        let mut pre = Vec::with_capacity(self.depth);
        for (d, w) in self.weights.iter().enumerate() {
            let a = matvec(w, &z);
            inputs.push(z);
            z = if d + 1 < self.depth { self.lift(&a) } else { Vec::new() };
            pre.push(a);
        }
        Trace { inputs, pre }
    }

    /// Unclipped network output.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).pre.pop().expect("depth >= 1")
    }

    pub fn clipped(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.forward(x);
        clip_in_place(&mut y, self.clip_bound);
        y
    }

    /// Accumulates `d out / d W` contracted with `d_out` into `grads`.
    fn backward(&self, trace: &Trace, d_out: &[f64], grads: &mut [DMatrix<f64>]) {
        let mut delta = d_out.to_vec();
        for d in (0..self.depth).rev() {
            let z = &trace.inputs[d];
            let g = &mut grads[d];
            for (r, dr) in delta.iter().enumerate() {
                if *dr == 0.0 {
                    continue;
                }
                for (c, zc) in z.iter().enumerate() {
                    g[(r, c)] += dr * zc;
                }
            }
            if d == 0 {
                break;
            }
            let w = &self.weights[d];
            let prev_pre = &trace.pre[d - 1];
            let h1 = w.ncols();
            let mut next = vec![0.0; h1];
            // the last input entry is the constant 1: no gradient flows through it
            for (c, nc) in next.iter_mut().enumerate().take(h1 - 1) {
                let back: f64 = delta.iter().enumerate().map(|(r, dr)| w[(r, c)] * dr).sum();
                *nc = back * self.activation.derivative(prev_pre[c]);
            }
            delta = next;
        }
    }

    fn zero_grads(&self) -> Vec<DMatrix<f64>> {
        self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect()
    }

    /// Mean clipped loss over `(x, y)` pairs and its gradient w.r.t. every
    /// weight matrix.
    pub fn loss_and_gradient(&self, pairs: &[(&[f64], &[f64])], loss: LossSpec) -> (f64, Vec<DMatrix<f64>>) {
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        let n = self.input_dim;
        let (mut r, mut dl, mut dout) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for (x, y) in pairs {
            let trace = self.trace(x);
            let out = trace.pre.last().expect("depth >= 1");
            r.copy_from_slice(out);
            clip_in_place(&mut r, self.clip_bound);
            r.iter_mut().zip(y.iter()).for_each(|(ri, yi)| *ri -= yi);
            total += loss.value(&r);
            loss.gradient(&r, &mut dl);
            clip_vjp(out, self.clip_bound, &dl, &mut dout);
            self.backward(&trace, &dout, &mut grads);
        }
        let scale = 1.0 / pairs.len() as f64;
        grads.iter_mut().for_each(|g| *g *= scale);
        (total * scale, grads)
    }

    pub fn max_frob_norm(&self) -> f64 {
        max_frob_norm(&self.weights)
    }

    /// Writes `# key=value` metadata lines followed by rows
    /// `layer,row,v0,v1,...` (row-major weight dumps, ragged across layers).
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# model=mlp")?;
        writeln!(w, "# input_dim={}", self.input_dim)?;
        writeln!(w, "# depth={}", self.depth)?;
        writeln!(w, "# width={}", self.width)?;
        writeln!(w, "# activation=relu")?;
        writeln!(w, "# clip_bound={}", self.clip_bound)?;
        let mut cw = csv::WriterBuilder::new().flexible(true).from_writer(w);
        cw.write_record(["layer", "row", "values"])?;
        for (d, m) in self.weights.iter().enumerate() {
            for r in 0..m.nrows() {
                let mut row = vec![d.to_string(), r.to_string()];
                row.extend(m.row(r).iter().map(f64::to_string));
                cw.write_record(&row)?;
            }
        }
        cw.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let (meta, body) = crate::srm::split_metadata(reader)?;
        let int = |k: &str| -> Result<usize> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("missing or bad metadata key {k}")))
        };
        if meta.get("model").map(String::as_str) != Some("mlp") {
            return Err(Error::Format("not an mlp file".into()));
        }
        let clip_bound: f64 = meta
            .get("clip_bound")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("missing clip_bound".into()))?;
        let mut net = MlpPredictor::zeros(int("input_dim")?, int("depth")?, int("width")?, clip_bound);
        let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(body.as_bytes());
        for rec in r.records() {
            let rec = rec?;
            let bad = || Error::Format("bad weight row".into());
            let d: usize = rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let row: usize = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let m = net.weights.get_mut(d).ok_or_else(bad)?;
            if row >= m.nrows() || rec.len() != m.ncols() + 2 {
                return Err(bad());
            }
            for c in 0..m.ncols() {
                m[(row, c)] = rec[c + 2].trim().parse().map_err(|_| bad())?;
            }
        }
        Ok(net)
    }
}

impl Predictor for MlpPredictor {
    fn dim(&self) -> usize {
        self.input_dim
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.forward(x)
    }
}

pub fn frob_norm(w: &DMatrix<f64>) -> f64 {
    w.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Euclidean projection onto the Frobenius ball of radius `bound`.
pub fn frob_project(w: &DMatrix<f64>, bound: f64) -> DMatrix<f64> {
    let mut out = w.clone();
    frob_project_mut(&mut out, bound);
    out
}

pub(crate) fn frob_project_mut(w: &mut DMatrix<f64>, bound: f64) {
    let mut n = frob_norm(w);
    let mut scale = 1.0;
    // rounding can leave the rescaled norm one ulp above the bound
    while n > bound {
        *w *= scale * bound / n;
        n = frob_norm(w);
        scale *= 1.0 - 1e-15;
    }
}

pub fn max_frob_norm(weights: &[DMatrix<f64>]) -> f64 {
    weights.iter().map(frob_norm).fold(0.0, f64::max)
}

fn init_weights<R: Rng>(n: usize, spec: &NnClassSpec, r: &mut R) -> Vec<DMatrix<f64>> {
    layer_shapes(n, spec.depth, spec.width)
        .into_iter()
        .map(|(rows, cols)| {
            let scale = 1.0 / (cols as f64).sqrt();
            let mut w = DMatrix::from_fn(rows, cols, |_, _| r.random_range(-scale..scale));
            frob_project_mut(&mut w, spec.norm_bound);
            w
        })
        .collect()
}

/// Total learning-rate halvings before training stops.
const MAX_HALVINGS: usize = 10;

/// Mini-batch projected gradient descent with momentum on the clipped
/// training error. After every update each weight matrix is projected back
/// onto the Frobenius ball; the learning rate halves whenever the full
/// training error has not improved for `patience` epochs. Returns the best
/// iterate seen (by training error).
pub fn train_constrained(
    s: &Dataset,
    spec: &NnClassSpec,
    loss: LossSpec,
    opt: &OptConfig,
    seed: u64,
) -> Result<(MlpPredictor, FitSummary)> {
    if spec.depth == 0 || spec.width == 0 || !(spec.norm_bound >= 0.0) {
        return Err(Error::invalid("invalid network class"));
    }
    opt.validate()?;
    let n = s.dim();
    let mut r = rng::stream(seed, 0);
    let mut net = MlpPredictor {
        input_dim: n,
        depth: spec.depth,
        width: spec.width,
        weights: init_weights(n, spec, &mut r),
        activation: Activation::Relu,
        clip_bound: s.state_bound(),
    };
    let pairs: Vec<(&[f64], &[f64])> = s.transitions().collect();
    let batch = opt.batch_size.min(pairs.len());
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut velocity = net.zero_grads();
    let mut lr = opt.step;

    let mut best_err = training_error(&net, s, loss)?;
    let mut best = net.weights.clone();
    let mut stale = 0;
    let mut halvings = 0;
    let mut epochs = 0;
    let mut batch_pairs = Vec::with_capacity(batch);

    while epochs < opt.max_iters && halvings <= MAX_HALVINGS {
        epochs += 1;
        order.shuffle(&mut r);
        for chunk in order.chunks(batch) {
            batch_pairs.clear();
            batch_pairs.extend(chunk.iter().map(|&i| pairs[i]));
            let (_, grads) = net.loss_and_gradient(&batch_pairs, loss);
            for ((w, v), g) in net.weights.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
                *v *= opt.momentum;
                *v -= g * lr;
                *w += &*v;
                frob_project_mut(w, spec.norm_bound);
            }
        }
        let err = training_error(&net, s, loss)?;
        if !err.is_finite() {
            return Err(Error::TrainingDiverged { iteration: epochs });
        }
        if err < best_err * (1.0 - 1e-9) {
            best_err = err;
            best.clone_from(&net.weights);
            stale = 0;
        } else {
            stale += 1;
            if stale >= opt.patience {
                lr *= 0.5;
                halvings += 1;
                stale = 0;
                velocity.iter_mut().for_each(|v| v.fill(0.0));
            }
        }
    }
    let warning = (halvings <= MAX_HALVINGS).then(|| {
        format!("stopped at max_iters = {} before the learning rate settled", opt.max_iters)
    });
    net.weights = best;
    Ok((
        net,
        FitSummary {
            training_error: best_err,
            iterations: epochs,
            warning,
        },
    ))
}

/// Lower estimate of `sup (1/N) sum_i sigma_i clip(f(x_i))_j` over the class,
/// by projected gradient ascent from a few random feasible starts.
pub fn max_clipped_correlation(
    spec: &NnClassSpec,
    points: &[Vec<f64>],
    sigma: &[f64],
    j: usize,
    clip_bound: f64,
    seed: u64,
) -> Result<f64> {
    const RESTARTS: usize = 2;
    const ITERS: usize = 60;
    let n = points.first().map(Vec::len).ok_or_else(|| Error::invalid("no points"))?;
    let big_n = points.len() as f64;
    // seed the restarts from the sign pattern so that draws stay independent
    let sig_key = sigma.iter().fold(0u64, |k, s| (k << 1) | u64::from(*s > 0.0));
    let mut best = 0.0f64;
    for restart in 0..RESTARTS {
        let mut r = rng::stream(rng::derive_seed(seed, sig_key), restart as u64);
        let mut net = MlpPredictor {
            input_dim: n,
            depth: spec.depth,
            width: spec.width,
            weights: init_weights(n, spec, &mut r),
            activation: Activation::Relu,
            clip_bound,
        };
        // start on the boundary of the ball
        for w in &mut net.weights {
            let nrm = frob_norm(w);
            if nrm > 0.0 {
                *w *= spec.norm_bound / nrm;
            }
        }
        let mut step = 0.2 * spec.norm_bound.max(1e-12);
        for _ in 0..ITERS {
            let mut grads = net.zero_grads();
            let mut value = 0.0;
            let mut up = vec![0.0; n];
            let mut dout = vec![0.0; n];
            for (x, s) in points.iter().zip(sigma) {
                let trace = net.trace(x);
                let out = trace.pre.last().expect("depth >= 1");
                let mut c = out.clone();
                clip_in_place(&mut c, clip_bound);
                value += s * c[j] / big_n;
                up.fill(0.0);
                up[j] = s / big_n;
                clip_vjp(out, clip_bound, &up, &mut dout);
                net.backward(&trace, &dout, &mut grads);
            }
            if !value.is_finite() {
                return Err(Error::Numeric("non-finite correlation".into()));
            }
            best = best.max(value);
            for (w, g) in net.weights.iter_mut().zip(&grads) {
                *w += g * step;
                frob_project_mut(w, spec.norm_bound);
            }
            step *= 0.97;
        }
        let final_value: f64 = points
            .iter()
            .zip(sigma)
            .map(|(x, s)| s * net.clipped(x)[j])
            .sum::<f64>()
            / big_n;
        best = best.max(final_value);
    }
    Ok(best)
}

/// Clipped loss of one pair; test helper shared with integration tests.
pub fn pair_loss(net: &MlpPredictor, x: &[f64], y: &[f64], loss: LossSpec) -> f64 {
    let mut p = net.forward(x);
    clipped_loss(&mut p, y, net.clip_bound, loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;
    use approx::assert_abs_diff_eq;

    #[test]
    fn shapes() {
        assert_eq!(layer_shapes(4, 1, 7), vec![(4, 5)]);
        assert_eq!(layer_shapes(4, 2, 7), vec![(8, 5), (4, 8)]);
        assert_eq!(layer_shapes(1, 3, 2), vec![(3, 2), (3, 3), (1, 3)]);
    }

    #[test]
    fn forward_examples() {
        let zero = MlpPredictor::zeros(3, 3, 4, 1.0);
        assert_eq!(zero.forward(&[0.1, 0.2, 0.3]), vec![0.0; 3]);

        let mut affine = MlpPredictor::zeros(2, 1, 5, 10.0);
        affine.weights[0] = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 0.5]);
        assert_eq!(affine.forward(&[1.0, 1.0]), vec![6.0, -0.5]);

        let mut net = MlpPredictor::zeros(1, 2, 1, 10.0);
        net.weights[0] = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        net.weights[1] = DMatrix::from_row_slice(1, 2, &[2.0, 3.0]);
        assert_eq!(net.forward(&[1.0]), vec![5.0]);
        // relu cuts the negative branch; the bias entry stays 1
        assert_eq!(net.forward(&[-1.0]), vec![3.0]);
    }

    #[test]
    fn projection_examples() {
        let z = DMatrix::<f64>::zeros(2, 2);
        assert_eq!(frob_project(&z, 0.5), z);
        let w = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(frob_project(&w, 10.0), w);
        let p = frob_project(&w, 1.0);
        assert_abs_diff_eq!(p[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p[(0, 1)], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn max_norm_examples() {
        assert_eq!(MlpPredictor::zeros(2, 2, 3, 1.0).max_frob_norm(), 0.0);
        assert_eq!(max_frob_norm(&[DMatrix::from_row_slice(1, 2, &[3.0, 4.0])]), 5.0);
        let a = DMatrix::from_row_slice(1, 1, &[2.0]);
        let b = DMatrix::from_row_slice(1, 1, &[-7.0]);
        assert_eq!(max_frob_norm(&[a, b]), 7.0);
    }

    fn relu_dataset() -> Dataset {
        let trajs = [0.9, -0.4, 0.6, 0.2, -0.8, 0.5]
            .iter()
            .map(|x0: &f64| {
                let mut states = vec![vec![*x0]];
                for _ in 0..3 {
                    let last = states.last().unwrap()[0];
                    states.push(vec![last.max(0.0)]);
                }
                Trajectory::new(states).unwrap()
            })
            .collect();
        Dataset::new(trajs, 1.0).unwrap()
    }

    #[test]
    fn trains_exactly_representable_relu_map() {
        let s = relu_dataset();
        // Oracle: hand-built weights realizing x -> relu(x) give zero error.
        let mut exact = MlpPredictor::zeros(1, 2, 2, 1.0);
        exact.weights[0] = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        exact.weights[1] = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        assert!(exact.max_frob_norm() <= 5.0);
        assert_eq!(training_error(&exact, &s, LossSpec::Euclidean).unwrap(), 0.0);

        let spec = NnClassSpec { depth: 2, width: 2, norm_bound: 5.0 };
        let opt = OptConfig { max_iters: 3000, ..OptConfig::default() };
        let best = (0..4)
            .map(|seed| train_constrained(&s, &spec, LossSpec::Euclidean, &opt, seed).unwrap().1.training_error)
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-3, "best training error {best}");
    }

    #[test]
    fn training_respects_bound_and_is_deterministic() {
        let s = relu_dataset();
        let spec = NnClassSpec { depth: 3, width: 4, norm_bound: 0.8 };
        let opt = OptConfig { max_iters: 200, ..OptConfig::default() };
        let (a, sa) = train_constrained(&s, &spec, LossSpec::Euclidean, &opt, 3).unwrap();
        let (b, _) = train_constrained(&s, &spec, LossSpec::Euclidean, &opt, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.max_frob_norm() <= 0.8 * (1.0 + 1e-8));
        let zero_err = training_error(&crate::risk::zero_predictor(1), &s, LossSpec::Euclidean).unwrap();
        assert!(sa.training_error <= zero_err);
    }

    #[test]
    fn zero_bound_gives_zero_network() {
        let s = relu_dataset();
        let spec = NnClassSpec { depth: 2, width: 3, norm_bound: 0.0 };
        let (net, summary) = train_constrained(&s, &spec, LossSpec::Euclidean, &OptConfig { max_iters: 5, ..OptConfig::default() }, 1).unwrap();
        assert_eq!(net.max_frob_norm(), 0.0);
        let zero_err = training_error(&crate::risk::zero_predictor(1), &s, LossSpec::Euclidean).unwrap();
        assert_eq!(summary.training_error, zero_err);
    }

    #[test]
    fn csv_round_trip() {
        let mut r = rng::stream(2, 0);
        let spec = NnClassSpec { depth: 3, width: 2, norm_bound: 3.0 };
        let net = MlpPredictor {
            input_dim: 2,
            depth: 3,
            width: 2,
            weights: init_weights(2, &spec, &mut r),
            activation: Activation::Relu,
            clip_bound: 2.2,
        };
        let mut buf = Vec::new();
        net.write_csv(&mut buf).unwrap();
        assert_eq!(MlpPredictor::read_csv(buf.as_slice()).unwrap(), net);
    }

    #[test]
    fn correlation_sup_is_bounded_by_clip_level() {
        let spec = NnClassSpec { depth: 2, width: 3, norm_bound: 2.0 };
        let pts = vec![vec![0.1, 0.2], vec![-0.3, 0.5], vec![0.7, -0.1]];
        let v = max_clipped_correlation(&spec, &pts, &[1.0, -1.0, 1.0], 1, 0.5, 3).unwrap();
        assert!((0.0..=0.5 + 1e-12).contains(&v));
    }
}
