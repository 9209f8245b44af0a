//! Trajectories and datasets.
//!
//! A [`Dataset`] is `N` sampled trajectories `x_0, ..., x_T` of a common state
//! dimension `n`, together with a known bound `B` on every state norm.
//!
//! CSV layout: header `traj_id,t,x0,...,x{n-1}` and one row per
//! (trajectory, time) pair. The state bound is not stored in the file; it is
//! supplied by the loader's caller.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Relative slack on the state bound to absorb integration round-off.
pub const STATE_BOUND_TOLERANCE: f64 = 1e-9;

pub(crate) fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// One sampled trajectory `x_0, ..., x_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>) -> Result<Self> {
        if states.len() < 2 {
            return Err(Error::invalid(format!(
                "a trajectory needs at least two states (T >= 1), got {}",
                states.len()
            )));
        }
        let n = states[0].len();
        if n == 0 {
            return Err(Error::invalid("state dimension must be at least 1"));
        }
        for (t, x) in states.iter().enumerate() {
            if x.len() != n {
                return Err(Error::invalid(format!(
                    "state {t} has dimension {}, expected {n}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("state {t} has a non-finite entry")));
            }
        }
        Ok(Self { states })
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    /// Number of steps `T` (the trajectory holds `T + 1` states).
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t]
    }
}

/// The training sample `S`: `N` trajectories sharing `n` and `T`, all inside
/// the ball of radius `state_bound`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    trajectories: Vec<Trajectory>,
    state_bound: f64,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>, state_bound: f64) -> Result<Self> {
        if !(state_bound > 0.0 && state_bound.is_finite()) {
            return Err(Error::invalid(format!("state bound must be positive, got {state_bound}")));
        }
        let first = trajectories
            .first()
            .ok_or_else(|| Error::invalid("a dataset needs at least one trajectory"))?;
        let (n, horizon) = (first.dim(), first.horizon());
        for (i, traj) in trajectories.iter().enumerate() {
            if traj.dim() != n || traj.horizon() != horizon {
                return Err(Error::invalid(format!(
                    "trajectory {i} has (n, T) = ({}, {}), expected ({n}, {horizon})",
                    traj.dim(),
                    traj.horizon()
                )));
            }
            check_state_bound(i, traj.states(), state_bound)?;
        }
        Ok(Self {
            trajectories,
            state_bound,
        })
    }

    /// Number of trajectories `N`.
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.trajectories[0].dim()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories[0].horizon()
    }

    pub fn state_bound(&self) -> f64 {
        self.state_bound
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// `S_t = { x_t(xi_i) }_i`.
    pub fn time_slice(&self, t: usize) -> Vec<&[f64]> {
        self.trajectories.iter().map(|traj| traj.state(t)).collect()
    }

    /// All `N * T` transition pairs `(x_t, x_{t+1})`, trajectory-major.
    pub fn transitions(&self) -> impl Iterator<Item = (&[f64], &[f64])> + '_ {
        self.trajectories.iter().flat_map(|traj| {
            traj.states()
                .windows(2)
                .map(|w| (w[0].as_slice(), w[1].as_slice()))
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["traj_id".to_string(), "t".to_string()];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (i, traj) in self.trajectories.iter().enumerate() {
            for (t, x) in traj.states().iter().enumerate() {
                let mut row = vec![i.to_string(), t.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Parses the CSV layout and validates every dataset invariant against
    /// `state_bound`.
    pub fn read_csv<R: Read>(reader: R, state_bound: f64) -> Result<Self> {
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
        let header = r.headers()?.clone();
        if header.len() < 3 || &header[0] != "traj_id" || &header[1] != "t" {
            return Err(Error::Format("expected header traj_id,t,x0,...".into()));
        }
        for (j, name) in header.iter().skip(2).enumerate() {
            if name != format!("x{j}") {
                return Err(Error::Format(format!("column {} should be x{j}, found {name}", j + 2)));
            }
        }
        let n = header.len() - 2;
        let mut rows: BTreeMap<u64, Vec<(usize, Vec<f64>)>> = BTreeMap::new();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let parse_err = |what: &str| Error::Format(format!("row {}: bad {what}", line + 1));
            let id: u64 = record[0].trim().parse().map_err(|_| parse_err("traj_id"))?;
            let t: usize = record[1].trim().parse().map_err(|_| parse_err("t"))?;
            let x = (0..n)
                .map(|j| record[j + 2].trim().parse::<f64>().map_err(|_| parse_err("state value")))
                .collect::<Result<Vec<_>>>()?;
            rows.entry(id).or_default().push((t, x));
        }
        let mut trajectories = Vec::with_capacity(rows.len());
        for (id, mut states) in rows {
            states.sort_by_key(|(t, _)| *t);
            for (expected, (t, _)) in states.iter().enumerate() {
                if *t != expected {
                    return Err(Error::Format(format!(
                        "trajectory {id}: time indices must be 0..=T without gaps or repeats"
                    )));
                }
            }
            trajectories.push(Trajectory::new(states.into_iter().map(|(_, x)| x).collect())?);
        }
        Dataset::new(trajectories, state_bound)
    }

    pub fn load(path: impl AsRef<Path>, state_bound: f64) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file), state_bound)
    }
}

pub(crate) fn check_state_bound(trajectory: usize, states: &[Vec<f64>], bound: f64) -> Result<()> {
    for (t, x) in states.iter().enumerate() {
        let norm = norm2(x);
        if norm > bound * (1.0 + STATE_BOUND_TOLERANCE) {
            return Err(Error::StateBound {
                trajectory,
                t,
                norm,
                bound,
            });
        }
    }
    Ok(())
}
