//! Euler–Maruyama simulation with level-crossing bookkeeping.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::RngStream;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LevelHit {
    pub level: f64,
    pub index: Option<usize>,
}

/// A discretized path stopped in A or at its stop level.
#[derive(Clone, Serialize, Deserialize, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub dt: f64,
    /// Flat node storage, `dim` values per node.
    pub states: Vec<f64>,
    /// ξ at every node.
    pub xi: Vec<f64>,
    pub score: f64,
    pub hit_a: bool,
    pub hit_target: bool,
    pub first_hit: Vec<LevelHit>,
    pub rng_stream_id: u64,
    /// Euler steps simulated for this trajectory (excludes a copied prefix).
    pub simulated_steps: usize,
}

impl std::fmt::Debug for Trajectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trajectory")
            .field("nodes", &self.len())
            .field("first", &self.states.get(..self.dim))
            .field("last", &self.states.get(self.states.len().saturating_sub(self.dim)..))
            .field("score", &self.score)
            .field("hit_a", &self.hit_a)
            .field("hit_target", &self.hit_target)
            .field("rng_stream_id", &self.rng_stream_id)
            .finish()
    }
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// First node index with ξ ≥ l.
    pub fn first_hit_index(&self, l: f64) -> Option<usize> {
        if self.score < l {
            return None;
        }
        self.xi.iter().position(|&v| v >= l)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "t")?;
        for i in 0..self.dim {
            write!(w, ",x{i}")?;
        }
        writeln!(w, ",xi")?;
        for n in 0..self.len() {
            write!(w, "{}", n as f64 * self.dt)?;
            for v in self.state(n) {
                write!(w, ",{v}")?;
            }
            writeln!(w, ",{}", self.xi[n])?;
        }
        Ok(())
    }
}

/// sup of ξ over the stored nodes.
pub fn score(traj: &Trajectory) -> f64 {
    traj.xi.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub fn first_hit_state(traj: &Trajectory, l: f64) -> Result<&[f64]> {
    match traj.first_hit_index(l) {
        Some(i) => Ok(traj.state(i)),
        None => Err(Error::LevelNotReached { level: l, score: traj.score }),
    }
}

/// Simulates from `start` until A or {ξ ≥ stop_level}, with no level grid.
pub fn simulate(model: &Model, start: &[f64], stop_level: f64, rng: RngStream) -> Result<Trajectory> {
    Simulator::new(model, &[]).run(start, stop_level, rng)
}

/// Simulation with a fixed grid of levels whose first hits are recorded.
pub struct Simulator<'a> {
    model: &'a Model,
    grid: Vec<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a Model, grid: &[f64]) -> Self {
        let mut grid = grid.to_vec();
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Simulator { model, grid }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn run(&self, start: &[f64], stop_level: f64, rng: RngStream) -> Result<Trajectory> {
        let d = self.model.dim();
        if start.len() != d {
            return Err(Error::InvalidArgument("start has wrong dimension".into()));
        }
        let mut t = Trajectory {
            dim: d,
            dt: self.model.dt(),
            states: start.to_vec(),
            xi: vec![self.model.xi(start)],
            score: f64::NEG_INFINITY,
            hit_a: false,
            hit_target: false,
            first_hit: Vec::new(),
            rng_stream_id: rng.stream,
            simulated_steps: 0,
        };
        self.integrate(&mut t, stop_level, rng)?;
        Ok(t)
    }

    /// New trajectory sharing `parent`'s nodes up to `index`, continued with fresh noise.
    pub fn branch(&self, parent: &Trajectory, index: usize, stop_level: f64, rng: RngStream) -> Result<Trajectory> {
        let d = parent.dim;
        let mut t = Trajectory {
            dim: d,
            dt: parent.dt,
            states: parent.states[..(index + 1) * d].to_vec(),
            xi: parent.xi[..=index].to_vec(),
            score: f64::NEG_INFINITY,
            hit_a: false,
            hit_target: false,
            first_hit: Vec::new(),
            rng_stream_id: rng.stream,
            simulated_steps: 0,
        };
        self.integrate(&mut t, stop_level, rng)?;
        Ok(t)
    }

    fn integrate(&self, t: &mut Trajectory, stop_level: f64, stream: RngStream) -> Result<()> {
        let m = self.model;
        let d = m.dim();
        let nd = m.noise_dim();
        let dt = m.dt();
        let eps = m.epsilon();
        let amp = (eps * dt).sqrt();
        let iso = m.isotropic_scale();
        let sigma = m.sigma();
        let budget = m.max_steps();
        let mut x = t.last_state().to_vec();
        let mut b = vec![0.0; d];
        let mut z = vec![0.0; nd];
        let mut rng = stream.rng();
        let mut steps = 0usize;
        loop {
            if m.in_a(&x) {
                t.hit_a = true;
                break;
            }
            if *t.xi.last().unwrap() >= stop_level {
                t.hit_target = true;
                break;
            }
            if steps >= budget {
                t.simulated_steps = steps;
                self.finish(t);
                return Err(Error::StepBudget { budget, partial: Box::new(t.clone()) });
            }
            m.drift(&x, &mut b);
            if eps > 0.0 {
                for v in z.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            match iso {
                Some(s) => {
                    for i in 0..d {
                        x[i] += b[i] * dt + s * amp * z[i];
                    }
                }
                None => {
                    for i in 0..d {
                        let mut n = 0.0;
                        for j in 0..nd {
                            n += sigma[(i, j)] * z[j];
                        }
                        x[i] += b[i] * dt + amp * n;
                    }
                }
            }
            steps += 1;
            t.states.extend_from_slice(&x);
            t.xi.push(m.xi(&x));
        }
        t.simulated_steps = steps;
        self.finish(t);
        Ok(())
    }

    fn finish(&self, t: &mut Trajectory) {
        t.score = score(t);
        let mut hits: Vec<LevelHit> = self.grid.iter().map(|&level| LevelHit { level, index: None }).collect();
        let mut next = 0;
        for (i, &v) in t.xi.iter().enumerate() {
            while next < hits.len() && v >= hits[next].level {
                hits[next].index = Some(i);
                next += 1;
            }
            if next == hits.len() {
                break;
            }
        }
        t.first_hit = hits;
    }
}
