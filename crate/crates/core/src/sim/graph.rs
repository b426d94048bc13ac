use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-state causal summary graph: `K` stacked `N×N` edge-type matrices.
///
/// `get(k, i, j)` is the type of the edge `i → j` while the source `i` is in
/// state `k`. Type 0 means no influence; the diagonal is always 0.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateGraph {
    num_states: usize,
    num_objects: usize,
    edge_types: usize,
    entries: Vec<u8>,
}

impl StateGraph {
    pub fn empty(num_states: usize, num_objects: usize, edge_types: usize) -> Self {
        StateGraph {
            num_states,
            num_objects,
            edge_types,
            entries: vec![0; num_states * num_objects * num_objects],
        }
    }

    pub fn from_entries(
        num_states: usize,
        num_objects: usize,
        edge_types: usize,
        entries: Vec<u8>,
    ) -> Result<Self> {
        if num_states == 0 || !(2..=255).contains(&edge_types) {
            return Err(Error::Parameter(format!(
                "need K >= 1 and 2 <= edge types <= 255, got K={num_states}, types={edge_types}"
            )));
        }
        if entries.len() != num_states * num_objects * num_objects {
            return Err(Error::shape(
                "state graph",
                &[num_states, num_objects, num_objects],
                &[entries.len()],
            ));
        }
        let g = StateGraph {
            num_states,
            num_objects,
            edge_types,
            entries,
        };
        for k in 0..num_states {
            for i in 0..num_objects {
                if g.get(k, i, i) != 0 {
                    return Err(Error::Contract(format!(
                        "self-edge at state {k}, object {i}"
                    )));
                }
                for j in 0..num_objects {
                    if usize::from(g.get(k, i, j)) >= edge_types {
                        return Err(Error::Contract(format!(
                            "edge type {} out of range at ({k},{i},{j})",
                            g.get(k, i, j)
                        )));
                    }
                }
            }
        }
        Ok(g)
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_objects(&self) -> usize {
        self.num_objects
    }

    pub fn edge_types(&self) -> usize {
        self.edge_types
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    fn at(&self, k: usize, i: usize, j: usize) -> usize {
        (k * self.num_objects + i) * self.num_objects + j
    }

    pub fn get(&self, k: usize, i: usize, j: usize) -> u8 {
        self.entries[self.at(k, i, j)]
    }

    pub fn set(&mut self, k: usize, i: usize, j: usize, e: u8) -> Result<()> {
        if i == j && e != 0 {
            return Err(Error::Contract("self-edges are not allowed".into()));
        }
        if usize::from(e) >= self.edge_types {
            return Err(Error::Contract(format!("edge type {e} out of range")));
        }
        let at = self.at(k, i, j);
        self.entries[at] = e;
        Ok(())
    }

    /// Edge type of `i → j` given the state of the source `i`.
    pub fn query(&self, i: usize, j: usize, source_state: usize) -> u8 {
        self.get(source_state, i, j)
    }

    /// Relabels objects: object `i` of `self` becomes object `perm[i]`.
    pub fn permute_objects(&self, perm: &[usize]) -> StateGraph {
        let mut out = StateGraph::empty(self.num_states, self.num_objects, self.edge_types);
        for k in 0..self.num_states {
            for i in 0..self.num_objects {
                for j in 0..self.num_objects {
                    let at = out.at(k, perm[i], perm[j]);
                    out.entries[at] = self.get(k, i, j);
                }
            }
        }
        out
    }
}

/// Draws a state graph where every off-diagonal `(k, i, j)` slot is an edge
/// with probability `edge_prob`, its type uniform over `1..edge_types`.
pub fn sample_state_graph(
    num_objects: usize,
    num_states: usize,
    edge_types: usize,
    edge_prob: f64,
    rng: &mut impl Rng,
) -> Result<StateGraph> {
    if num_objects < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 objects, got {num_objects}"
        )));
    }
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(Error::Parameter(format!(
            "edge probability must lie in [0, 1], got {edge_prob}"
        )));
    }
    let mut g = StateGraph::from_entries(
        num_states,
        num_objects,
        edge_types,
        vec![0; num_states * num_objects * num_objects],
    )?;
    for k in 0..num_states {
        for i in 0..num_objects {
            for j in 0..num_objects {
                if i == j {
                    continue;
                }
                if rng.random::<f64>() < edge_prob {
                    let e = rng.random_range(1..edge_types) as u8;
                    g.set(k, i, j, e)?;
                }
            }
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn zero_probability_gives_empty_graph() {
        let g = sample_state_graph(4, 3, 3, 0.0, &mut stream(0, "g", 0)).unwrap();
        assert!(g.entries().iter().all(|&e| e == 0));
    }

    #[test]
    fn same_seed_same_graph() {
        let a = sample_state_graph(5, 2, 3, 0.5, &mut stream(9, "g", 0)).unwrap();
        let b = sample_state_graph(5, 2, 3, 0.5, &mut stream(9, "g", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_and_zero_diagonal() {
        let g = sample_state_graph(3, 2, 2, 1.0, &mut stream(1, "g", 0)).unwrap();
        assert_eq!(g.entries().len(), 2 * 3 * 3);
        for k in 0..2 {
            for i in 0..3 {
                assert_eq!(g.get(k, i, i), 0);
                for j in 0..3 {
                    if i != j {
                        assert_eq!(g.get(k, i, j), 1);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let mut rng = stream(0, "g", 0);
        assert!(sample_state_graph(1, 1, 2, 0.5, &mut rng).is_err());
        assert!(sample_state_graph(3, 1, 2, 1.5, &mut rng).is_err());
        assert!(sample_state_graph(3, 1, 2, -0.1, &mut rng).is_err());
    }

    #[test]
    fn edge_frequency_within_binomial_bounds() {
        let mut rng = stream(42, "g", 0);
        let p = 0.5;
        let mut edges = 0usize;
        let mut slots = 0usize;
        for _ in 0..10_000 {
            let g = sample_state_graph(3, 1, 2, p, &mut rng).unwrap();
            edges += g.entries().iter().filter(|&&e| e != 0).count();
            slots += 6;
        }
        let mean = slots as f64 * p;
        let sd = (slots as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (edges as f64 - mean).abs() < 3.0 * sd,
            "{edges} vs {mean}±{sd}"
        );
    }
}
