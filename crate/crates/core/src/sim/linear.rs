use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Regime, StateGraph, TimeSeriesSample};
use crate::error::{Error, Result};

/// Magnitude above which a linear sample is flagged as diverged.
pub const OVERFLOW_GUARD: f64 = 1e6;

/// Coefficients of the linear world: self weight `alpha` and one weight per
/// edge type, with `beta[0] == 0` for "no edge".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearWorld {
    pub alpha: f64,
    pub beta: Vec<f64>,
}

impl LinearWorld {
    /// `edge_betas` are the weights of edge types `1..`; type 0 is fixed at zero.
    pub fn new(alpha: f64, edge_betas: &[f64]) -> Self {
        let mut beta = Vec::with_capacity(edge_betas.len() + 1);
        beta.push(0.0);
        beta.extend_from_slice(edge_betas);
        LinearWorld { alpha, beta }
    }

    pub fn edge_types(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.first() != Some(&0.0) {
            return Err(Error::Parameter("beta[0] must be exactly zero".into()));
        }
        if self.beta.len() < 2 {
            return Err(Error::Parameter("need at least one edge weight".into()));
        }
        Ok(())
    }
}

impl Default for LinearWorld {
    fn default() -> Self {
        LinearWorld::new(1.0, &[0.05])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stability {
    pub spectral_radius: f64,
    /// Spectral radius strictly below one.
    pub stable: bool,
}

/// Transition matrix `A` with `p^{t+1} = A p^t` for a fixed state assignment,
/// plus its stability verdict. Diagnostic only; generation never filters.
pub fn var_transition_matrix(
    graph: &StateGraph,
    world: &LinearWorld,
    states: &[u8],
) -> Result<(DMatrix<f64>, Stability)> {
    let n = graph.num_objects();
    if states.len() != n {
        return Err(Error::shape("var_transition_matrix", &[n], &[states.len()]));
    }
    let a = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            world.alpha
        } else {
            world.beta[usize::from(graph.query(j, i, usize::from(states[j])))]
        }
    });
    let spectral_radius = a
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    Ok((
        a,
        Stability {
            spectral_radius,
            stable: spectral_radius < 1.0,
        },
    ))
}

/// Where the per-step states of a linear rollout come from.
#[derive(Debug, Clone, Copy)]
pub enum LinearStates<'a> {
    /// A `[T × N]` schedule independent of the dynamics.
    Provided(&'a [u8]),
    /// `s_i^t = 1` iff `p_i^t < 0` (two states).
    SignHidden,
}

/// States drawn uniformly and independently for every object and frame.
pub fn iid_schedule(
    num_steps: usize,
    num_objects: usize,
    num_states: usize,
    rng: &mut impl Rng,
) -> Vec<u8> {
    (0..num_steps * num_objects)
        .map(|_| rng.random_range(0..num_states) as u8)
        .collect()
}

/// All objects advance to the next state (mod `K`) every `period` frames.
pub fn cyclic_schedule(
    num_steps: usize,
    num_objects: usize,
    num_states: usize,
    period: usize,
) -> Vec<u8> {
    (0..num_steps)
        .flat_map(|t| std::iter::repeat_n(((t / period.max(1)) % num_states) as u8, num_objects))
        .collect()
}

/// One deterministic update `p_i' = α p_i + Σ_{j≠i} β_{G(s_j)_{ji}} p_j`.
pub fn linear_step(graph: &StateGraph, world: &LinearWorld, p: &[f64], states: &[u8]) -> Vec<f64> {
    let n = p.len();
    (0..n)
        .map(|i| {
            let incoming: f64 = (0..n)
                .filter(|&j| j != i)
                .map(|j| world.beta[usize::from(graph.query(j, i, usize::from(states[j])))] * p[j])
                .sum();
            world.alpha * p[i] + incoming
        })
        .collect()
}

fn sign_state(v: f64) -> u8 {
    u8::from(v < 0.0)
}

/// Rolls the linear world forward for `num_steps` frames (D = 1).
///
/// `p0` defaults to a standard-normal draw from `rng`.
pub fn linear_rollout(
    graph: &StateGraph,
    world: &LinearWorld,
    p0: Option<&[f64]>,
    num_steps: usize,
    states: LinearStates<'_>,
    rng: &mut impl Rng,
) -> Result<TimeSeriesSample> {
    world.validate()?;
    let n = graph.num_objects();
    if num_steps < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 steps, got {num_steps}"
        )));
    }
    if world.edge_types() != graph.edge_types() {
        return Err(Error::Parameter(format!(
            "world has {} edge types, graph has {}",
            world.edge_types(),
            graph.edge_types()
        )));
    }
    let p0: Vec<f64> = match p0 {
        Some(p) if p.len() != n => return Err(Error::shape("linear_rollout", &[n], &[p.len()])),
        Some(p) if p.iter().any(|v| !v.is_finite()) => {
            return Err(Error::Parameter("initial values must be finite".into()))
        }
        Some(p) => p.to_vec(),
        None => (0..n).map(|_| rng.sample(StandardNormal)).collect(),
    };
    let regime = match states {
        LinearStates::Provided(sched) => {
            if sched.len() != num_steps * n {
                return Err(Error::shape(
                    "state schedule",
                    &[num_steps, n],
                    &[sched.len()],
                ));
            }
            if let Some(&bad) = sched
                .iter()
                .find(|&&s| usize::from(s) >= graph.num_states())
            {
                return Err(Error::Parameter(format!("state {bad} out of range")));
            }
            Regime::ObservedIndependent
        }
        LinearStates::SignHidden => {
            if graph.num_states() != 2 {
                return Err(Error::Parameter(
                    "the sign rule needs exactly 2 states".into(),
                ));
            }
            Regime::Hidden
        }
    };

    let mut p = Vec::with_capacity(num_steps * n);
    let mut s = Vec::with_capacity(num_steps * n);
    let mut cur = p0;
    for t in 0..num_steps {
        let st: Vec<u8> = match states {
            LinearStates::Provided(sched) => sched[t * n..(t + 1) * n].to_vec(),
            LinearStates::SignHidden => cur.iter().map(|&v| sign_state(v)).collect(),
        };
        p.extend_from_slice(&cur);
        if t + 1 < num_steps {
            cur = linear_step(graph, world, &cur, &st);
        }
        s.extend(st);
    }
    let diverged = p.iter().any(|v| !v.is_finite() || v.abs() > OVERFLOW_GUARD);
    Ok(TimeSeriesSample {
        num_steps,
        num_objects: n,
        dims: 1,
        p,
        s,
        graph: graph.clone(),
        regime,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn full_graph(n: usize) -> StateGraph {
        let mut g = StateGraph::empty(1, n, 2);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    g.set(0, i, j, 1).unwrap();
                }
            }
        }
        g
    }

    #[test]
    fn diagonal_transition_matrices() {
        let g = StateGraph::empty(1, 3, 2);
        let (_, st) =
            var_transition_matrix(&g, &LinearWorld::new(0.5, &[0.05]), &[0, 0, 0]).unwrap();
        assert!((st.spectral_radius - 0.5).abs() < 1e-12 && st.stable);
        let (_, st) =
            var_transition_matrix(&g, &LinearWorld::new(1.0, &[0.05]), &[0, 0, 0]).unwrap();
        assert!((st.spectral_radius - 1.0).abs() < 1e-12 && !st.stable);
    }

    #[test]
    fn fully_connected_eigenvalues() {
        // Oracle: I + 0.05 (J - I) has eigenvalues 1 + 0.05 (N - 1) and 1 - 0.05.
        let (a, st) =
            var_transition_matrix(&full_graph(3), &LinearWorld::default(), &[0, 0, 0]).unwrap();
        let mut eig: Vec<f64> = a.complex_eigenvalues().iter().map(|z| z.re).collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (got, want) in eig.iter().zip([1.1, 0.95, 0.95]) {
            assert!((got - want).abs() < 1e-12, "{eig:?}");
        }
        assert!(!st.stable);
        assert!((st.spectral_radius - 1.1).abs() < 1e-12);
    }

    #[test]
    fn single_edge_hand_step() {
        // Object 2 drives object 1 (0-based: 1 → 0).
        let mut g = StateGraph::empty(1, 2, 2);
        g.set(0, 1, 0, 1).unwrap();
        let next = linear_step(&g, &LinearWorld::default(), &[1.0, 2.0], &[0, 0]);
        assert!((next[0] - 1.1).abs() < 1e-15);
        assert_eq!(next[1], 2.0);
    }

    #[test]
    fn sign_rule_is_strict() {
        assert_eq!(sign_state(-0.3), 1);
        assert_eq!(sign_state(0.3), 0);
        assert_eq!(sign_state(0.0), 0);
    }

    #[test]
    fn empty_graph_identity_dynamics() {
        let g = StateGraph::empty(2, 3, 2);
        let sched = vec![0u8; 10 * 3];
        let sample = linear_rollout(
            &g,
            &LinearWorld::default(),
            Some(&[0.3, -1.2, 2.0]),
            10,
            LinearStates::Provided(&sched),
            &mut stream(0, "x", 0),
        )
        .unwrap();
        for t in 0..10 {
            assert_eq!(sample.frame(t), &[0.3, -1.2, 2.0]);
        }
    }

    #[test]
    fn hidden_states_follow_values() {
        let mut rng = stream(5, "x", 0);
        let g = crate::sim::sample_state_graph(3, 2, 2, 0.5, &mut rng).unwrap();
        let sample = linear_rollout(
            &g,
            &LinearWorld::default(),
            None,
            40,
            LinearStates::SignHidden,
            &mut rng,
        )
        .unwrap();
        for (v, s) in sample.p.iter().zip(&sample.s) {
            assert_eq!(*s, sign_state(*v));
        }
        assert_eq!(sample.regime, Regime::Hidden);
    }

    #[test]
    fn source_state_selects_graph() {
        // Edge 1 → 0 exists only while object 1 is in state 1.
        let mut g = StateGraph::empty(2, 2, 2);
        g.set(1, 1, 0, 1).unwrap();
        let w = LinearWorld::default();
        assert_eq!(linear_step(&g, &w, &[1.0, 2.0], &[0, 0]), vec![1.0, 2.0]);
        assert_eq!(linear_step(&g, &w, &[1.0, 2.0], &[1, 0]), vec![1.0, 2.0]);
        let next = linear_step(&g, &w, &[1.0, 2.0], &[0, 1]);
        assert!((next[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn divergence_is_flagged_not_dropped() {
        let sched = vec![0u8; 200 * 3];
        let sample = linear_rollout(
            &full_graph(3),
            &LinearWorld::new(1.0, &[0.5]),
            Some(&[1.0, 1.0, 1.0]),
            200,
            LinearStates::Provided(&sched),
            &mut stream(0, "x", 0),
        )
        .unwrap();
        assert!(sample.diverged);
        assert_eq!(sample.p.len(), 600);
    }

    #[test]
    fn schedules() {
        let c = cyclic_schedule(30, 2, 2, 10);
        assert_eq!(&c[0..2], &[0, 0]);
        assert_eq!(&c[2 * 10..2 * 10 + 2], &[1, 1]);
        assert_eq!(&c[2 * 20..2 * 20 + 2], &[0, 0]);
        let i = iid_schedule(40, 3, 2, &mut stream(1, "s", 0));
        assert!(i.iter().all(|&s| s < 2));
        assert!(i.contains(&0) && i.contains(&1));
    }
}
