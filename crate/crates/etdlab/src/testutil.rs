//! Randomized model generators shared by unit and integration tests.

use rand::Rng;

use crate::mdp::{MdpModel, PolicyPair, RunRng};

/// Random valid model with strictly positive transition probabilities (hence
/// irreducible under any policy). With `rank_deficient`, the feature matrix is
/// built from a single column replicated with scalar multiples, so its rank
/// is 1 regardless of `n_features`.
pub fn random_model(
    rng: &mut RunRng,
    n_states: usize,
    n_actions: usize,
    n_features: usize,
    rank_deficient: bool,
) -> MdpModel {
    let mut trans = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    let mut reward_mean = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    let reward_noise_std = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            let mut sum = 0.0;
            for s2 in 0..n_states {
                let w: f64 = rng.random_range(0.05..1.0);
                trans[s][a][s2] = w;
                sum += w;
                reward_mean[s][a][s2] = rng.random_range(-1.0..1.0);
            }
            for s2 in 0..n_states {
                trans[s][a][s2] /= sum;
            }
        }
    }
    let gamma: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.3..0.95)).collect();
    let lambda: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.0..1.0)).collect();
    let interest: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.2..1.0)).collect();
    let features: Vec<Vec<f64>> = if rank_deficient {
        let base: Vec<f64> = (0..n_states).map(|_| rng.random_range(-1.0..1.0)).collect();
        (0..n_states)
            .map(|s| (0..n_features).map(|j| base[s] * (j as f64 + 1.0)).collect())
            .collect()
    } else {
        (0..n_states)
            .map(|_| (0..n_features).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    };
    MdpModel {
        n_states,
        n_actions,
        trans,
        reward_mean,
        reward_noise_std,
        gamma,
        lambda,
        interest,
        features,
    }
}

pub fn random_policy(rng: &mut RunRng, n_states: usize, n_actions: usize) -> Vec<Vec<f64>> {
    (0..n_states)
        .map(|_| {
            let mut row: Vec<f64> = (0..n_actions).map(|_| rng.random_range(0.05..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for w in &mut row {
                *w /= sum;
            }
            row
        })
        .collect()
}

/// Random valid model/policy pair with positive transitions everywhere.
pub fn random_instance(
    rng: &mut RunRng,
    n_states: usize,
    n_actions: usize,
    n_features: usize,
    rank_deficient: bool,
) -> (MdpModel, PolicyPair) {
    let mdp = random_model(rng, n_states, n_actions, n_features, rank_deficient);
    let pp = PolicyPair {
        target: random_policy(rng, n_states, n_actions),
        behavior: random_policy(rng, n_states, n_actions),
    };
    (mdp, pp)
}
