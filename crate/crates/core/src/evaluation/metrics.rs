use crate::error::{Error, Result};
use crate::sim::{LinearWorld, StateGraph};

/// Percentage of off-diagonal `(state, i, j)` slots where `pred` matches
/// `truth`.
///
/// With `broadcast` a single-state prediction is compared against every
/// state of the truth. `state_map[k]` names the true state that predicted
/// state `k` stands for (identity when `None`).
pub fn edge_accuracy(
    pred: &StateGraph,
    truth: &StateGraph,
    broadcast: bool,
    state_map: Option<&[usize]>,
) -> Result<f64> {
    let n = truth.num_objects();
    if pred.num_objects() != n || pred.edge_types() != truth.edge_types() {
        return Err(Error::Contract(format!(
            "edge_accuracy: predicted {} objects / {} edge types, truth {} / {}",
            pred.num_objects(),
            pred.edge_types(),
            n,
            truth.edge_types()
        )));
    }
    let kt = truth.num_states();
    let broadcasting = broadcast && pred.num_states() == 1;
    if !broadcasting && pred.num_states() != kt {
        return Err(Error::Contract(format!(
            "edge_accuracy: predicted {} states, truth {kt} (enable broadcast for a one-state baseline)",
            pred.num_states()
        )));
    }
    // Predicted state for each true state.
    let mut source = vec![0usize; kt];
    if !broadcasting {
        match state_map {
            Some(map) => {
                if map.len() != kt {
                    return Err(Error::Contract(
                        "state map length differs from state count".into(),
                    ));
                }
                for (kp, &kt_) in map.iter().enumerate() {
                    source[kt_] = kp;
                }
            }
            None => source.iter_mut().enumerate().for_each(|(k, s)| *s = k),
        }
    }
    let mut hits = 0usize;
    for (k, &kp) in source.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                if i != j && pred.get(kp, i, j) == truth.get(k, i, j) {
                    hits += 1;
                }
            }
        }
    }
    Ok(100.0 * hits as f64 / (kt * n * (n - 1)) as f64)
}

/// Mean squared difference.
pub fn reconstruction_mse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "reconstruction_mse: {} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = pred.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(s / pred.len() as f64)
}

/// Mean absolute difference over `{α, β_1, …}` (`β_0` is fixed at zero and
/// not compared).
pub fn world_param_distance(alpha: f64, beta: &[f64], truth: &LinearWorld) -> Result<f64> {
    if beta.len() != truth.beta.len() {
        return Err(Error::Contract(format!(
            "world_param_distance: {} edge weights vs {}",
            beta.len(),
            truth.beta.len()
        )));
    }
    let diffs: Vec<f64> = std::iter::once((alpha - truth.alpha).abs())
        .chain(
            beta.iter()
                .zip(&truth.beta)
                .skip(1)
                .map(|(a, b)| (a - b).abs()),
        )
        .collect();
    Ok(diffs.iter().sum::<f64>() / diffs.len() as f64)
}

/// Largest state count accepted for permutation alignment.
pub const MAX_ALIGNED_STATES: usize = 6;

/// State accuracy in percent and the label map `pred k → true map[k]` used.
///
/// With `align` the best of all `K!` relabelings is taken.
pub fn state_accuracy_aligned(
    pred: &[u8],
    truth: &[u8],
    k: usize,
    align: bool,
) -> Result<(f64, Vec<usize>)> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "state_accuracy: {} predictions for {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&v| usize::from(v) >= k) {
        return Err(Error::Contract(format!("state {bad} out of range 0..{k}")));
    }
    if align && k > MAX_ALIGNED_STATES {
        return Err(Error::Parameter(format!(
            "aligning {k} states would try {k}! permutations; supply an explicit mapping instead"
        )));
    }
    if pred.is_empty() {
        return Ok((100.0, (0..k).collect()));
    }
    // Confusion counts make every permutation O(K).
    let mut confusion = vec![0usize; k * k];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[usize::from(p) * k + usize::from(t)] += 1;
    }
    let score = |map: &[usize]| -> usize {
        map.iter()
            .enumerate()
            .map(|(p, &t)| confusion[p * k + t])
            .sum()
    };
    let identity: Vec<usize> = (0..k).collect();
    let mut best = (score(&identity), identity.clone());
    if align {
        let mut perm = identity;
        while next_permutation(&mut perm) {
            let s = score(&perm);
            if s > best.0 {
                best = (s, perm.clone());
            }
        }
    }
    Ok((100.0 * best.0 as f64 / pred.len() as f64, best.1))
}

/// Advances to the next lexicographic permutation; false after the last.
fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}
