//! Hierarchies of model classes and the SRM selection rule.
//!
//! Each class is fitted on its own (constrained ERM), its learned norm is
//! rounded up to the discretization grid, the family's closed-form penalty is
//! evaluated at that grid value, and the class with the smallest
//! `training error + penalty` is selected. Ties go to the smaller index.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::complexity::{self, DiscretizationGrid, GRID_TOLERANCE};
use crate::data::Dataset;
use crate::dynamics::{DiscreteFlow, InitialConditionSampler};
use crate::error::{Error, Result};
use crate::nn::{self, MlpPredictor, NnClassSpec};
use crate::opt::{FitSummary, OptConfig};
use crate::risk::{true_error_mc, LossSpec, McEstimate, Predictor};
use crate::rkhs::{self, KernelPredictor, RkhsClassSpec};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Rkhs,
    Nn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassSpec {
    Rkhs(RkhsClassSpec),
    Nn(NnClassSpec),
}

impl ClassSpec {
    pub fn family(&self) -> Family {
        match self {
            ClassSpec::Rkhs(_) => Family::Rkhs,
            ClassSpec::Nn(_) => Family::Nn,
        }
    }

    pub fn norm_bound(&self) -> f64 {
        match self {
            ClassSpec::Rkhs(c) => c.norm_bound,
            ClassSpec::Nn(c) => c.norm_bound,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ClassSpec::Rkhs(c) => {
                c.kernel.validate()?;
                if !(c.norm_bound > 0.0 && c.norm_bound.is_finite()) {
                    return Err(Error::invalid(format!(
                        "RKHS norm bound must be positive, got {}",
                        c.norm_bound
                    )));
                }
                Ok(())
            }
            ClassSpec::Nn(c) => c.validate(),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ClassSpec::Rkhs(c) => format!("{} B={}", c.kernel.describe(), c.norm_bound),
            ClassSpec::Nn(c) => format!("mlp D={} H={} B={}", c.depth, c.width, c.norm_bound),
        }
    }
}

/// Ordered list of classes of a single family, plus the norm grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    classes: Vec<ClassSpec>,
    grid: DiscretizationGrid,
}

impl Hierarchy {
    pub fn new(classes: Vec<ClassSpec>, grid: DiscretizationGrid) -> Result<Self> {
        let first = classes
            .first()
            .ok_or_else(|| Error::invalid("a hierarchy needs at least one class"))?;
        if classes.iter().any(|c| c.family() != first.family()) {
            return Err(Error::invalid("all classes of a hierarchy must belong to one family"));
        }
        for c in &classes {
            c.validate()?;
        }
        let max_b = classes.iter().map(ClassSpec::norm_bound).fold(0.0, f64::max);
        if grid.max() < max_b * (1.0 - GRID_TOLERANCE) {
            return Err(Error::invalid(format!(
                "grid max M_Q = {} is below the largest class bound max B_k = {}",
                grid.max(),
                max_b
            )));
        }
        Ok(Self { classes, grid })
    }

    pub fn classes(&self) -> &[ClassSpec] {
        &self.classes
    }

    pub fn grid(&self) -> &DiscretizationGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn family(&self) -> Family {
        self.classes[0].family()
    }
}

/// A fitted k-class predictor. `predict` returns the raw output; every error
/// evaluation clips it.
#[derive(Clone, Debug, PartialEq)]
pub enum FittedModel {
    Kernel(KernelPredictor),
    Mlp(MlpPredictor),
}

impl FittedModel {
    /// Largest per-output RKHS norm, or largest layer Frobenius norm.
    pub fn norm(&self) -> Result<f64> {
        match self {
            FittedModel::Kernel(k) => k.max_rkhs_norm(),
            FittedModel::Mlp(m) => Ok(m.max_frob_norm()),
        }
    }

    pub fn clipped(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FittedModel::Kernel(k) => k.clipped(x),
            FittedModel::Mlp(m) => m.clipped(x),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        match self {
            FittedModel::Kernel(k) => k.write_csv(w),
            FittedModel::Mlp(m) => m.write_csv(w),
        }
    }
}

impl Predictor for FittedModel {
    fn dim(&self) -> usize {
        match self {
            FittedModel::Kernel(k) => k.dim(),
            FittedModel::Mlp(m) => m.dim(),
        }
    }

    fn predict(&self, x: &[f64]) -> Vec<f64> {
        match self {
            FittedModel::Kernel(k) => k.predict(x),
            FittedModel::Mlp(m) => m.predict(x),
        }
    }
}

/// Constrained ERM within class `k`.
pub fn fit_k_class(
    s: &Dataset,
    h: &Hierarchy,
    k: usize,
    loss: LossSpec,
    opt: &OptConfig,
    seed: u64,
) -> Result<(FittedModel, FitSummary)> {
    let class = h
        .classes
        .get(k)
        .ok_or_else(|| Error::invalid(format!("class index {k} out of range (K = {})", h.len())))?;
    match class {
        ClassSpec::Rkhs(c) => {
            let (f, summary) = rkhs::fit_constrained(s, &c.kernel, c.norm_bound, loss, opt, seed)?;
            Ok((FittedModel::Kernel(f), summary))
        }
        ClassSpec::Nn(c) => {
            let (f, summary) = nn::train_constrained(s, c, loss, opt, seed)?;
            Ok((FittedModel::Mlp(f), summary))
        }
    }
}

/// Closed-form penalty of `class` at grid value `m_used`.
pub fn class_penalty(class: &ClassSpec, s: &Dataset, m_used: f64, loss: LossSpec) -> Result<f64> {
    match class {
        ClassSpec::Rkhs(c) => complexity::rkhs_penalty(&c.kernel, s, m_used, loss),
        ClassSpec::Nn(c) => complexity::nn_penalty(c.depth, m_used, s, loss),
    }
}

/// One row of the error report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub k: usize,
    pub class_desc: String,
    pub training_error: f64,
    pub penalty: f64,
    pub srm_error: f64,
    pub epsilon: Option<f64>,
    pub m_used: f64,
    pub true_error: Option<McEstimate>,
    pub failure: Option<String>,
    pub warning: Option<String>,
}

impl ClassRow {
    fn failed(k: usize, class_desc: String, err: &Error) -> Self {
        Self {
            k,
            class_desc,
            training_error: f64::NAN,
            penalty: f64::NAN,
            srm_error: f64::NAN,
            epsilon: None,
            m_used: f64::NAN,
            true_error: None,
            failure: Some(err.to_string()),
            warning: None,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

#[derive(Clone, Debug)]
pub struct ErrorReport {
    pub rows: Vec<ClassRow>,
    pub selected_k: usize,
    /// Fitted predictors, `None` for failed classes.
    pub models: Vec<Option<FittedModel>>,
    pub grid_len: usize,
    pub n_traj: usize,
    pub state_bound: f64,
    pub lipschitz: f64,
}

/// Index of the smallest SRM error among non-failed rows, ties to the
/// smaller index.
pub fn argmin_srm(rows: &[ClassRow]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.iter().enumerate() {
        if r.is_failed() || !r.srm_error.is_finite() {
            continue;
        }
        if best.is_none_or(|(_, v)| r.srm_error < v) {
            best = Some((i, r.srm_error));
        }
    }
    best.map(|(i, _)| i)
}

fn fit_row(
    s: &Dataset,
    h: &Hierarchy,
    k: usize,
    loss: LossSpec,
    opt: &OptConfig,
    seed: u64,
) -> Result<(ClassRow, FittedModel)> {
    let class = &h.classes[k];
    let (model, summary) = fit_k_class(s, h, k, loss, opt, rng::derive_seed(seed, rng::TAG_CLASS + k as u64))?;
    let norm = model.norm()?;
    let point = h.grid.lookup_q(norm)?;
    let penalty = class_penalty(class, s, point.value, loss)?;
    let row = ClassRow {
        k,
        class_desc: class.describe(),
        training_error: summary.training_error,
        penalty,
        srm_error: summary.training_error + penalty,
        epsilon: None,
        m_used: point.value,
        true_error: None,
        failure: None,
        warning: summary.warning,
    };
    Ok((row, model))
}

/// Fits every class (in parallel, class `k` seeded with `(seed, k)`), prices
/// each learned model at its grid value and selects the smallest SRM error.
pub fn srm_select(s: &Dataset, h: &Hierarchy, loss: LossSpec, opt: &OptConfig, seed: u64) -> Result<ErrorReport> {
    let fits: Vec<Result<(ClassRow, FittedModel)>> =
        (0..h.len()).into_par_iter().map(|k| fit_row(s, h, k, loss, opt, seed)).collect();
    let mut rows = Vec::with_capacity(h.len());
    let mut models = Vec::with_capacity(h.len());
    for (k, fit) in fits.into_iter().enumerate() {
        match fit {
            Ok((row, model)) => {
                rows.push(row);
                models.push(Some(model));
            }
            Err(e) => {
                rows.push(ClassRow::failed(k, h.classes[k].describe(), &e));
                models.push(None);
            }
        }
    }
    let selected_k = argmin_srm(&rows).ok_or(Error::AllClassesFailed)?;
    Ok(ErrorReport {
        rows,
        selected_k,
        models,
        grid_len: h.grid.len(),
        n_traj: s.len(),
        state_bound: s.state_bound(),
        lipschitz: loss.lipschitz(),
    })
}

/// Per-class `epsilon_k(S, delta)`; `None` for failed classes.
pub fn epsilon_table(report: &ErrorReport, delta: f64) -> Result<Vec<Option<f64>>> {
    report
        .rows
        .iter()
        .map(|r| {
            if r.is_failed() {
                return Ok(None);
            }
            complexity::epsilon_bound(
                r.penalty,
                report.lipschitz,
                report.state_bound,
                report.n_traj,
                delta,
                Some(report.grid_len),
            )
            .map(Some)
        })
        .collect()
}

/// Fills the `epsilon` column at confidence `delta`.
pub fn attach_epsilon(report: &mut ErrorReport, delta: f64) -> Result<()> {
    let eps = epsilon_table(report, delta)?;
    for (row, e) in report.rows.iter_mut().zip(eps) {
        row.epsilon = e;
    }
    Ok(())
}

/// Right-hand side of the SRM guarantee,
/// `min_k ( e_k + 2 epsilon_k(S, 2 delta / (K + 1)) )`, where `e_k` is the
/// Monte-Carlo true error of class `k` when available and its training error
/// otherwise.
pub fn guarantee_rhs(report: &ErrorReport, delta: f64) -> Result<f64> {
    let k = report.rows.len() as f64;
    let eps = epsilon_table(report, 2.0 * delta / (k + 1.0))?;
    report
        .rows
        .iter()
        .zip(eps)
        .filter_map(|(r, e)| {
            let base = r.true_error.map_or(r.training_error, |t| t.mean);
            e.map(|e| base + 2.0 * e)
        })
        .reduce(f64::min)
        .ok_or(Error::AllClassesFailed)
}

/// Monte-Carlo true error of every fitted class on one shared test set.
pub fn attach_true_errors(
    report: &mut ErrorReport,
    flow: &DiscreteFlow,
    sampler: &InitialConditionSampler,
    horizon: usize,
    loss: LossSpec,
    samples: usize,
    seed: u64,
) -> Result<()> {
    let test_seed = rng::derive_seed(seed, rng::TAG_TEST_SET);
    for (row, model) in report.rows.iter_mut().zip(&report.models) {
        if let Some(m) = model {
            row.true_error = Some(true_error_mc(
                m,
                flow,
                sampler,
                horizon,
                report.state_bound,
                loss,
                samples,
                test_seed,
            )?);
        }
    }
    Ok(())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl ErrorReport {
    pub fn selected(&self) -> &ClassRow {
        &self.rows[self.selected_k]
    }

    /// `k,class_desc,train_err,penalty,srm_err,epsilon,M_used,true_err_mean,true_err_se,selected`,
    /// with `k` counted from 1. Failed rows have empty numeric cells.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record([
            "k",
            "class_desc",
            "train_err",
            "penalty",
            "srm_err",
            "epsilon",
            "M_used",
            "true_err_mean",
            "true_err_se",
            "selected",
        ])?;
        for r in &self.rows {
            let ok = |v: f64| if r.is_failed() { String::new() } else { v.to_string() };
            cw.write_record([
                (r.k + 1).to_string(),
                r.class_desc.clone(),
                ok(r.training_error),
                ok(r.penalty),
                ok(r.srm_error),
                opt_cell(r.epsilon),
                ok(r.m_used),
                opt_cell(r.true_error.map(|t| t.mean)),
                opt_cell(r.true_error.map(|t| t.std_err)),
                u8::from(r.k == self.selected_k).to_string(),
            ])?;
        }
        cw.flush()?;
        Ok(())
    }

    /// Plot-ready `k,train_err,srm_err,true_err` triples.
    pub fn write_curves<W: Write>(&self, w: W) -> Result<()> {
        let mut cw = csv::Writer::from_writer(w);
        cw.write_record(["k", "train_err", "srm_err", "true_err"])?;
        for r in self.rows.iter().filter(|r| !r.is_failed()) {
            cw.write_record([
                (r.k + 1).to_string(),
                r.training_error.to_string(),
                r.srm_error.to_string(),
                opt_cell(r.true_error.map(|t| t.mean)),
            ])?;
        }
        cw.flush()?;
        Ok(())
    }
}

/// Splits leading `# key=value` lines from the CSV body that follows.
pub fn split_metadata<R: BufRead>(reader: R) -> Result<(HashMap<String, String>, String)> {
    let mut meta = HashMap::new();
    let mut body = String::new();
    let mut in_header = true;
    for line in reader.lines() {
        let line = line?;
        if in_header {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
                continue;
            }
            in_header = false;
        }
        body.push_str(&line);
        body.push('\n');
    }
    Ok((meta, body))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Trajectory;
    use crate::rkhs::Kernel;

    fn row(k: usize, train: f64, penalty: f64) -> ClassRow {
        ClassRow {
            k,
            class_desc: format!("c{k}"),
            training_error: train,
            penalty,
            srm_error: train + penalty,
            epsilon: None,
            m_used: 1.0,
            true_error: None,
            failure: None,
            warning: None,
        }
    }

    #[test]
    fn argmin_ties_go_to_smaller_index() {
        let rows = vec![row(0, 0.5, 0.5), row(1, 0.2, 0.3), row(2, 0.1, 0.4)];
        assert_eq!(argmin_srm(&rows), Some(1));
        let tied = vec![row(0, 0.3, 0.2), row(1, 0.25, 0.25)];
        assert_eq!(argmin_srm(&tied), Some(0));
    }

    #[test]
    fn argmin_invariant_under_constant_shift() {
        let trains = [0.9, 0.4, 0.31, 0.3, 0.29];
        let pens = [0.01, 0.1, 0.2, 0.5, 0.9];
        let base: Vec<_> = (0..5).map(|k| row(k, trains[k], pens[k])).collect();
        let want = argmin_srm(&base);
        for c in [0.0, 0.125, 3.0, 1e3] {
            let shifted: Vec<_> = (0..5).map(|k| row(k, trains[k], pens[k] + c)).collect();
            assert_eq!(argmin_srm(&shifted), want);
        }
    }

    #[test]
    fn zero_penalties_reduce_to_erm() {
        let trains = [0.9, 0.4, 0.31, 0.3, 0.35];
        let rows: Vec<_> = (0..5).map(|k| row(k, trains[k], 0.0)).collect();
        assert_eq!(argmin_srm(&rows), Some(3));
    }

    #[test]
    fn failed_rows_are_skipped() {
        let mut rows = vec![row(0, 0.1, 0.0), row(1, 0.5, 0.0)];
        rows[0] = ClassRow::failed(0, "c0".into(), &Error::TrainingDiverged { iteration: 3 });
        assert_eq!(argmin_srm(&rows), Some(1));
        rows[1] = ClassRow::failed(1, "c1".into(), &Error::TrainingDiverged { iteration: 3 });
        assert_eq!(argmin_srm(&rows), None);
    }

    fn small_dataset() -> Dataset {
        let trajs = (0..6)
            .map(|i| {
                let x0 = -0.5 + 0.2 * i as f64;
                let states = (0..4).map(|t| vec![x0 * 0.8f64.powi(t), 0.1 * x0]).collect();
                Trajectory::new(states).unwrap()
            })
            .collect();
        Dataset::new(trajs, 1.0).unwrap()
    }

    fn gaussian(gamma: f64, b: f64) -> ClassSpec {
        ClassSpec::Rkhs(RkhsClassSpec { kernel: Kernel::Gaussian { gamma }, norm_bound: b })
    }

    #[test]
    fn hierarchy_validation() {
        let grid = DiscretizationGrid::from_spacing(0.5, 2.0).unwrap();
        assert!(Hierarchy::new(vec![], grid.clone()).is_err());
        assert!(Hierarchy::new(vec![gaussian(1.0, 3.0)], grid.clone()).is_err());
        let mixed = vec![
            gaussian(1.0, 1.0),
            ClassSpec::Nn(NnClassSpec { depth: 2, width: 3, norm_bound: 1.0 }),
        ];
        assert!(Hierarchy::new(mixed, grid.clone()).is_err());
        assert!(Hierarchy::new(vec![gaussian(1.0, 2.0)], grid).is_ok());
    }

    #[test]
    fn single_class_is_selected() {
        let s = small_dataset();
        let grid = DiscretizationGrid::from_spacing(0.01, 2.0).unwrap();
        let h = Hierarchy::new(vec![gaussian(1.0, 2.0)], grid).unwrap();
        let opt = OptConfig { max_iters: 200, ..OptConfig::default() };
        let report = srm_select(&s, &h, LossSpec::Euclidean, &opt, 1).unwrap();
        assert_eq!(report.selected_k, 0);
        assert_eq!(report.rows.len(), 1);
        let r = &report.rows[0];
        assert!((r.srm_error - (r.training_error + r.penalty)).abs() <= 1e-12);
    }

    #[test]
    fn identical_classes_with_identical_seeds_agree() {
        let s = small_dataset();
        let grid = DiscretizationGrid::from_spacing(0.01, 3.0).unwrap();
        let spec = ClassSpec::Nn(NnClassSpec { depth: 2, width: 3, norm_bound: 3.0 });
        let h = Hierarchy::new(vec![spec.clone(), spec], grid).unwrap();
        let opt = OptConfig { max_iters: 50, ..OptConfig::default() };
        let a = fit_k_class(&s, &h, 0, LossSpec::Euclidean, &opt, 9).unwrap();
        let b = fit_k_class(&s, &h, 1, LossSpec::Euclidean, &opt, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn nested_classes_with_equal_fit_prefer_the_smaller() {
        // the zero map is fitted exactly by every class; the learned norms
        // are then equal, so the smaller index wins
        let trajs = (0..4).map(|_| Trajectory::new(vec![vec![0.0]; 3]).unwrap()).collect();
        let s = Dataset::new(trajs, 1.0).unwrap();
        let grid = DiscretizationGrid::from_spacing(0.01, 4.0).unwrap();
        let h = Hierarchy::new(vec![gaussian(1.0, 2.0), gaussian(1.0, 4.0)], grid).unwrap();
        let report = srm_select(&s, &h, LossSpec::Euclidean, &OptConfig::default(), 0).unwrap();
        assert_eq!(report.rows[0].training_error, report.rows[1].training_error);
        assert_eq!(report.selected_k, 0);
    }

    #[test]
    fn epsilon_dominates_penalty_and_grows_with_q() {
        let s = small_dataset();
        let grid = DiscretizationGrid::from_spacing(0.01, 2.0).unwrap();
        let h = Hierarchy::new(vec![gaussian(0.5, 1.0), gaussian(5.0, 2.0)], grid).unwrap();
        let opt = OptConfig { max_iters: 100, ..OptConfig::default() };
        let mut report = srm_select(&s, &h, LossSpec::Euclidean, &opt, 4).unwrap();
        attach_epsilon(&mut report, 0.1).unwrap();
        for r in &report.rows {
            assert!(r.epsilon.unwrap() >= r.penalty);
        }
        let e1 = epsilon_table(&report, 0.1).unwrap();
        report.grid_len *= 2;
        let e2 = epsilon_table(&report, 0.1).unwrap();
        assert!(e1.iter().zip(&e2).all(|(a, b)| b.unwrap() > a.unwrap()));
        assert!(epsilon_table(&report, 1.5).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let report = ErrorReport {
            rows: vec![row(0, 0.5, 0.25), ClassRow::failed(1, "c1".into(), &Error::AllClassesFailed)],
            selected_k: 0,
            models: vec![None, None],
            grid_len: 10,
            n_traj: 4,
            state_bound: 1.0,
            lipschitz: 1.0,
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(
            lines[0],
            "k,class_desc,train_err,penalty,srm_err,epsilon,M_used,true_err_mean,true_err_se,selected"
        );
        assert_eq!(lines[1], "1,c0,0.5,0.25,0.75,,1,,,1");
        assert_eq!(lines[2], "2,c1,,,,,,,,0");
    }

    #[test]
    fn metadata_split() {
        let text = "# a=1\n# b = two\nx,y\n1,2\n";
        let (meta, body) = split_metadata(text.as_bytes()).unwrap();
        assert_eq!(meta["a"], "1");
        assert_eq!(meta["b"], "two");
        assert_eq!(body, "x,y\n1,2\n");
    }
}
