use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Regime, StateGraph, TimeSeriesSample};
use crate::error::{Error, Result};

/// Constants of the directed-spring box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpringWorld {
    /// Spring constant per edge type; `delta[0] == 0`.
    pub delta: Vec<f64>,
    /// Walls sit at `±box_half_width` on both axes.
    pub box_half_width: f64,
    /// Integrator step.
    pub dt: f64,
    /// Micro-steps between recorded frames.
    pub subsample: usize,
    /// Standard deviation of initial positions.
    pub loc_std: f64,
    /// Norm of initial velocities.
    pub vel_norm: f64,
}

impl Default for SpringWorld {
    fn default() -> Self {
        SpringWorld {
            delta: vec![0.0, 0.1],
            box_half_width: 5.0,
            dt: 0.001,
            subsample: 100,
            loc_std: 0.5,
            vel_norm: 0.5,
        }
    }
}

impl SpringWorld {
    pub fn validate(&self) -> Result<()> {
        if self.delta.first() != Some(&0.0) {
            return Err(Error::Parameter("delta[0] must be exactly zero".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Parameter(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.subsample == 0 {
            return Err(Error::Parameter("subsample must be at least 1".into()));
        }
        if !(self.box_half_width > 0.0) {
            return Err(Error::Parameter("box half-width must be positive".into()));
        }
        Ok(())
    }
}

/// Positions and velocities of all particles.
#[derive(Debug, Clone, PartialEq)]
pub struct SpringState {
    pub r: Vec<[f64; 2]>,
    pub v: Vec<[f64; 2]>,
}

/// How particle states evolve during a spring rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SpringRegime {
    /// Every particle advances to the next state (mod K) every `period` frames.
    Cyclic { period: usize },
    /// A particle advances its state on each wall collision.
    WallEvent,
    /// State 1 iff the particle's x-coordinate is negative.
    HiddenLocation,
}

impl SpringRegime {
    pub fn regime(self) -> Regime {
        match self {
            SpringRegime::Cyclic { .. } => Regime::ObservedIndependent,
            SpringRegime::WallEvent => Regime::ObservedDependent,
            SpringRegime::HiddenLocation => Regime::Hidden,
        }
    }
}

fn forces(r: &[[f64; 2]], graph: &StateGraph, world: &SpringWorld, states: &[u8]) -> Vec<[f64; 2]> {
    let n = r.len();
    let mut acc = vec![[0.0; 2]; n];
    for (i, a) in acc.iter_mut().enumerate() {
        for j in 0..n {
            if i == j {
                continue;
            }
            let k = graph.query(j, i, usize::from(states[j]));
            let d = world.delta[usize::from(k)];
            if d != 0.0 {
                a[0] -= d * (r[i][0] - r[j][0]);
                a[1] -= d * (r[i][1] - r[j][1]);
            }
        }
    }
    acc
}

/// Mirrors coordinates that crossed a wall back inside and flips the
/// corresponding velocity component. Returns whether anything was reflected.
fn reflect(r: &mut [f64; 2], v: &mut [f64; 2], half_width: f64) -> bool {
    let mut hit = false;
    for c in 0..2 {
        if r[c] > half_width {
            r[c] = 2.0 * half_width - r[c];
            v[c] = -v[c];
            hit = true;
        } else if r[c] < -half_width {
            r[c] = -2.0 * half_width - r[c];
            v[c] = -v[c];
            hit = true;
        }
    }
    hit
}

/// One leapfrog step (half kick, drift, wall reflection, half kick).
///
/// Returns, per particle, whether it touched a wall during the step.
pub fn spring_step(
    state: &mut SpringState,
    graph: &StateGraph,
    world: &SpringWorld,
    states: &[u8],
) -> Vec<bool> {
    let half = 0.5 * world.dt;
    let a0 = forces(&state.r, graph, world, states);
    let mut hits = vec![false; state.r.len()];
    for (i, hit) in hits.iter_mut().enumerate() {
        let (r, v) = (&mut state.r[i], &mut state.v[i]);
        for c in 0..2 {
            v[c] += half * a0[i][c];
            r[c] += world.dt * v[c];
        }
        *hit = reflect(r, v, world.box_half_width);
    }
    let a1 = forces(&state.r, graph, world, states);
    for (v, a) in state.v.iter_mut().zip(&a1) {
        v[0] += half * a[0];
        v[1] += half * a[1];
    }
    hits
}

/// Normal positions with `loc_std` and velocities of norm `vel_norm` in a
/// uniformly random direction.
pub fn initial_conditions(
    num_objects: usize,
    world: &SpringWorld,
    rng: &mut impl Rng,
) -> SpringState {
    let normal = Normal::new(0.0, world.loc_std).expect("finite std");
    let r = (0..num_objects)
        .map(|_| [normal.sample(rng), normal.sample(rng)])
        .collect();
    let v = (0..num_objects)
        .map(|_| {
            let angle = rng.random::<f64>() * std::f64::consts::TAU;
            [world.vel_norm * angle.cos(), world.vel_norm * angle.sin()]
        })
        .collect();
    SpringState { r, v }
}

fn location_state(r: &[f64; 2]) -> u8 {
    u8::from(r[0] < 0.0)
}

/// Simulates `num_steps` recorded frames of the spring box (D = 4: x, y, vx, vy).
pub fn spring_rollout(
    graph: &StateGraph,
    world: &SpringWorld,
    init: Option<SpringState>,
    num_steps: usize,
    regime: SpringRegime,
    rng: &mut impl Rng,
) -> Result<TimeSeriesSample> {
    world.validate()?;
    let n = graph.num_objects();
    let k = graph.num_states();
    if num_steps < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 steps, got {num_steps}"
        )));
    }
    if world.delta.len() != graph.edge_types() {
        return Err(Error::Parameter(format!(
            "world has {} spring constants, graph has {} edge types",
            world.delta.len(),
            graph.edge_types()
        )));
    }
    match regime {
        SpringRegime::Cyclic { period: 0 } => {
            return Err(Error::Parameter("state period must be at least 1".into()))
        }
        SpringRegime::HiddenLocation if k != 2 => {
            return Err(Error::Parameter(
                "the location rule needs exactly 2 states".into(),
            ))
        }
        _ => {}
    }
    let mut state = match init {
        Some(s) if s.r.len() != n || s.v.len() != n => {
            return Err(Error::shape("spring_rollout", &[n], &[s.r.len()]))
        }
        Some(s) => s,
        None => initial_conditions(n, world, rng),
    };
    let mut states: Vec<u8> = match regime {
        SpringRegime::Cyclic { .. } => vec![0; n],
        SpringRegime::WallEvent => (0..n).map(|_| rng.random_range(0..k) as u8).collect(),
        SpringRegime::HiddenLocation => state.r.iter().map(location_state).collect(),
    };

    let mut p = Vec::with_capacity(num_steps * n * 4);
    let mut s = Vec::with_capacity(num_steps * n);
    for frame in 0..num_steps {
        if let SpringRegime::Cyclic { period } = regime {
            states.fill(((frame / period) % k) as u8);
        }
        for (r, v) in state.r.iter().zip(&state.v) {
            p.extend_from_slice(&[r[0], r[1], v[0], v[1]]);
        }
        s.extend_from_slice(&states);
        if frame + 1 == num_steps {
            break;
        }
        for _ in 0..world.subsample {
            let hits = spring_step(&mut state, graph, world, &states);
            match regime {
                SpringRegime::Cyclic { .. } => {}
                SpringRegime::WallEvent => {
                    for (st, hit) in states.iter_mut().zip(hits) {
                        if hit {
                            *st = ((usize::from(*st) + 1) % k) as u8;
                        }
                    }
                }
                SpringRegime::HiddenLocation => {
                    for (st, r) in states.iter_mut().zip(&state.r) {
                        *st = location_state(r);
                    }
                }
            }
        }
    }
    let diverged = p.iter().any(|v| !v.is_finite());
    Ok(TimeSeriesSample {
        num_steps,
        num_objects: n,
        dims: 4,
        p,
        s,
        graph: graph.clone(),
        regime: regime.regime(),
        diverged,
    })
}
