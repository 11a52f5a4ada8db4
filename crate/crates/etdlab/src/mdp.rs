//! Finite MDP model, target/behavior policy pair, validation of the standing
//! assumptions, stationary distributions and transition sampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EtdError, Result};

const PROB_TOL: f64 = 1e-12;

/// Per-run RNG. Run `r` of an ensemble uses stream `(base_seed, r)`, so runs
/// are order-independent and parallelizable.
pub type RunRng = ChaCha8Rng;

pub fn run_rng(base_seed: u64, run_index: u64) -> RunRng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(run_index);
    rng
}

/// A finite MDP with state-dependent discount, lambda and interest functions
/// and a linear feature map. Immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpModel {
    pub n_states: usize,
    pub n_actions: usize,
    /// trans[s][a][s'] = p(s'|s,a)
    pub trans: Vec<Vec<Vec<f64>>>,
    /// reward_mean[s][a][s'] = r(s,a,s')
    pub reward_mean: Vec<Vec<Vec<f64>>>,
    /// Std of zero-mean Gaussian reward noise, per (s,a,s').
    pub reward_noise_std: Vec<Vec<Vec<f64>>>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub interest: Vec<f64>,
    /// features[s] = phi(s), length n for every state.
    pub features: Vec<Vec<f64>>,
}

impl MdpModel {
    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(EtdError::InvalidModel("empty state or action space".into()));
        }
        let check3 = |t: &Vec<Vec<Vec<f64>>>, name: &str| -> Result<()> {
            if t.len() != ns || t.iter().any(|a| a.len() != na || a.iter().any(|r| r.len() != ns)) {
                return Err(EtdError::InvalidModel(format!("{name} must have shape N x A x N")));
            }
            Ok(())
        };
        check3(&self.trans, "trans")?;
        check3(&self.reward_mean, "reward_mean")?;
        check3(&self.reward_noise_std, "reward_noise_std")?;
        for s in 0..ns {
            for a in 0..na {
                let row = &self.trans[s][a];
                if row.iter().any(|&p| p < 0.0) {
                    return Err(EtdError::InvalidModel(format!("trans({s},{a},.) has a negative entry")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(EtdError::InvalidModel(format!(
                        "trans({s},{a},.) sums to {sum}, expected 1"
                    )));
                }
                if self.reward_noise_std[s][a].iter().any(|&v| v < 0.0) {
                    return Err(EtdError::InvalidModel("reward_noise_std must be nonnegative".into()));
                }
            }
        }
        for (name, v) in [("gamma", &self.gamma), ("lambda", &self.lambda)] {
            if v.len() != ns || v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(EtdError::InvalidModel(format!("{name} must be in [0,1]^N")));
            }
        }
        if !self.gamma.iter().any(|&g| g < 1.0) {
            return Err(EtdError::InvalidModel("gamma(s) < 1 must hold for at least one state".into()));
        }
        if self.interest.len() != ns || self.interest.iter().any(|&x| x < 0.0) {
            return Err(EtdError::InvalidModel("interest must be nonnegative of length N".into()));
        }
        let n = self.n_features();
        if self.features.len() != ns || self.features.iter().any(|f| f.len() != n) || n == 0 {
            return Err(EtdError::InvalidModel("features must be an N x n matrix with n >= 1".into()));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        self.features.first().map_or(0, |f| f.len())
    }

    pub fn feature(&self, s: usize) -> DVector<f64> {
        DVector::from_row_slice(&self.features[s])
    }

    /// Phi, with phi(s)^T as rows.
    pub fn feature_matrix(&self) -> DMatrix<f64> {
        let n = self.n_features();
        DMatrix::from_fn(self.n_states, n, |s, j| self.features[s][j])
    }

    pub fn gamma_diag(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.gamma))
    }

    pub fn lambda_diag(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.lambda))
    }
}

/// Target policy pi and behavior policy pi^o as row-stochastic N x A matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyPair {
    pub target: Vec<Vec<f64>>,
    pub behavior: Vec<Vec<f64>>,
}

impl PolicyPair {
    pub fn validate(&self, n_states: usize, n_actions: usize) -> Result<()> {
        for (name, pol) in [("target", &self.target), ("behavior", &self.behavior)] {
            if pol.len() != n_states || pol.iter().any(|r| r.len() != n_actions) {
                return Err(EtdError::InvalidModel(format!("{name} policy must be N x A")));
            }
            for (s, row) in pol.iter().enumerate() {
                if row.iter().any(|&p| p < 0.0) {
                    return Err(EtdError::InvalidModel(format!("{name} policy row {s} has a negative entry")));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(EtdError::InvalidModel(format!(
                        "{name} policy row {s} sums to {sum}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn support_ok(&self) -> bool {
        self.target.iter().zip(&self.behavior).all(|(t, b)| {
            t.iter().zip(b).all(|(&pt, &pb)| pt <= 0.0 || pb > 0.0)
        })
    }
}

/// rho(s,a) = pi(a|s)/pi^o(a|s), with 0/0 = 0.
pub fn importance_ratio(pp: &PolicyPair, s: usize, a: usize) -> Result<f64> {
    let pt = pp.target[s][a];
    let pb = pp.behavior[s][a];
    if pb > 0.0 {
        Ok(pt / pb)
    } else if pt == 0.0 {
        Ok(0.0)
    } else {
        Err(EtdError::UnreachableAction { state: s, action: a })
    }
}

/// Dense table of importance ratios, indexed [s][a].
pub fn importance_table(pp: &PolicyPair) -> Result<Vec<Vec<f64>>> {
    let ns = pp.target.len();
    let na = pp.target.first().map_or(0, |r| r.len());
    (0..ns)
        .map(|s| (0..na).map(|a| importance_ratio(pp, s, a)).collect())
        .collect()
}

/// Induced transition matrix P(s,s') = sum_a policy(a|s) p(s'|s,a) and
/// expected one-stage reward r(s) under the policy.
pub fn policy_matrices(mdp: &MdpModel, policy: &[Vec<f64>]) -> (DMatrix<f64>, DVector<f64>) {
    let ns = mdp.n_states;
    let mut p = DMatrix::zeros(ns, ns);
    let mut r = DVector::zeros(ns);
    for s in 0..ns {
        for a in 0..mdp.n_actions {
            let pa = policy[s][a];
            if pa == 0.0 {
                continue;
            }
            for s2 in 0..ns {
                let pt = mdp.trans[s][a][s2];
                p[(s, s2)] += pa * pt;
                r[s] += pa * pt * mdp.reward_mean[s][a][s2];
            }
        }
    }
    (p, r)
}

/// Stationary distribution of an irreducible stochastic matrix: solves
/// d^T P = d^T with sum(d) = 1 and checks strict positivity.
pub fn stationary_distribution(p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = p.nrows();
    // (P^T - I) d = 0 with the last equation replaced by sum(d) = 1.
    let mut a = p.transpose() - DMatrix::<f64>::identity(n, n);
    let mut rhs = DVector::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    rhs[n - 1] = 1.0;
    let d = a
        .lu()
        .solve(&rhs)
        .ok_or(EtdError::NonIrreducible)?;
    if d.iter().any(|&x| x <= 0.0) {
        return Err(EtdError::NonIrreducible);
    }
    let residual = (p.transpose() * &d - &d).amax();
    if residual > 1e-10 {
        return Err(EtdError::NonIrreducible);
    }
    Ok(d)
}

/// Spectral radius of a nonnegative matrix by power iteration.
pub fn spectral_radius(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let n = m.nrows();
    if m.amax() == 0.0 {
        return 0.0;
    }
    let mut x = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut prev = 0.0;
    for _ in 0..max_iter {
        let y = m * &x;
        let norm = y.norm();
        if norm == 0.0 {
            return 0.0;
        }
        x = y / norm;
        if (norm - prev).abs() <= tol * norm.max(1.0) {
            return norm;
        }
        prev = norm;
    }
    prev
}

/// Strong connectivity of {(s,s') : sum_a pi^o(a|s) p(s'|s,a) > 0}, checked
/// exactly on the directed graph.
fn strongly_connected(adj: &[Vec<bool>]) -> bool {
    let n = adj.len();
    let reach = |forward: bool| -> usize {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                let edge = if forward { adj[u][v] } else { adj[v][u] };
                if edge && !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count
    };
    reach(true) == n && reach(false) == n
}

/// Flags for the standing assumptions on the model and policy pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// I - P_pi Gamma invertible.
    pub invertible: bool,
    /// Spectral radius of P_pi Gamma.
    pub spectral_radius: f64,
    /// Behavior chain irreducible.
    pub irreducible: bool,
    /// pi(a|s) > 0 implies pi^o(a|s) > 0.
    pub support_ok: bool,
    /// Emphasized-state feature rank equals n; filled by the exact analysis,
    /// false until then.
    pub feature_rank_full: bool,
}

impl AssumptionReport {
    pub fn all_ok(&self) -> bool {
        self.invertible && self.irreducible && self.support_ok
    }
}

pub fn validate_assumptions(mdp: &MdpModel, pp: &PolicyPair) -> AssumptionReport {
    let (p_target, _) = policy_matrices(mdp, &pp.target);
    let pg = &p_target * mdp.gamma_diag();
    let n = mdp.n_states;
    let i_minus = DMatrix::<f64>::identity(n, n) - &pg;
    let svd = i_minus.svd(false, false);
    let smax = svd.singular_values.max();
    let invertible = smax > 0.0 && svd.rank(1e-12 * smax) == n;
    let rho = spectral_radius(&pg, 1e-10, 100_000);

    let (p_behavior, _) = policy_matrices(mdp, &pp.behavior);
    let adj: Vec<Vec<bool>> = (0..n)
        .map(|s| (0..n).map(|s2| p_behavior[(s, s2)] > 0.0).collect())
        .collect();

    AssumptionReport {
        invertible,
        spectral_radius: rho,
        irreducible: strongly_connected(&adj),
        support_ok: pp.support_ok(),
        feature_rank_full: false,
    }
}

/// One behavior-policy transition from state `s`: action, next state, and the
/// (possibly noisy) reward.
pub fn sample_step(mdp: &MdpModel, pp: &PolicyPair, rng: &mut RunRng, s: usize) -> (usize, usize, f64) {
    let a = sample_categorical(rng, &pp.behavior[s]);
    let s2 = sample_categorical(rng, &mdp.trans[s][a]);
    let z: f64 = StandardNormal.sample(rng);
    let reward = mdp.reward_mean[s][a][s2] + mdp.reward_noise_std[s][a][s2] * z;
    (a, s2, reward)
}

fn sample_categorical(rng: &mut RunRng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// JSON document bundling a model with its policy pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub n_states: usize,
    pub n_actions: usize,
    pub trans: Vec<Vec<Vec<f64>>>,
    pub reward_mean: Vec<Vec<Vec<f64>>>,
    pub reward_noise_std: Vec<Vec<Vec<f64>>>,
    pub gamma: Vec<f64>,
    pub lambda: Vec<f64>,
    pub interest: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    pub target_policy: Vec<Vec<f64>>,
    pub behavior_policy: Vec<Vec<f64>>,
}

impl ModelDocument {
    pub fn into_parts(self) -> Result<(MdpModel, PolicyPair)> {
        let mdp = MdpModel {
            n_states: self.n_states,
            n_actions: self.n_actions,
            trans: self.trans,
            reward_mean: self.reward_mean,
            reward_noise_std: self.reward_noise_std,
            gamma: self.gamma,
            lambda: self.lambda,
            interest: self.interest,
            features: self.features,
        };
        mdp.validate()?;
        let pp = PolicyPair {
            target: self.target_policy,
            behavior: self.behavior_policy,
        };
        pp.validate(mdp.n_states, mdp.n_actions)?;
        Ok((mdp, pp))
    }

    pub fn from_parts(mdp: &MdpModel, pp: &PolicyPair) -> Self {
        ModelDocument {
            n_states: mdp.n_states,
            n_actions: mdp.n_actions,
            trans: mdp.trans.clone(),
            reward_mean: mdp.reward_mean.clone(),
            reward_noise_std: mdp.reward_noise_std.clone(),
            gamma: mdp.gamma.clone(),
            lambda: mdp.lambda.clone(),
            interest: mdp.interest.clone(),
            features: mdp.features.clone(),
            target_policy: pp.target.clone(),
            behavior_policy: pp.behavior.clone(),
        }
    }
}

/// Built-in named examples.
pub fn builtin(name: &str) -> Result<(MdpModel, PolicyPair)> {
    match name {
        "twostate" => Ok(twostate()),
        "baird7" => Ok(baird7()),
        other => Err(EtdError::Config(format!("unknown builtin model '{other}'"))),
    }
}

/// Minimal 2-state, 2-action off-policy demo with a tabular feature map.
pub fn twostate() -> (MdpModel, PolicyPair) {
    let trans = vec![
        vec![vec![0.7, 0.3], vec![0.1, 0.9]],
        vec![vec![0.4, 0.6], vec![0.2, 0.8]],
    ];
    let reward_mean = vec![
        vec![vec![0.0, 1.0], vec![0.5, 2.0]],
        vec![vec![1.0, 0.0], vec![0.0, 1.5]],
    ];
    let reward_noise_std = vec![
        vec![vec![0.1, 0.1], vec![0.1, 0.1]],
        vec![vec![0.1, 0.1], vec![0.1, 0.1]],
    ];
    let mdp = MdpModel {
        n_states: 2,
        n_actions: 2,
        trans,
        reward_mean,
        reward_noise_std,
        gamma: vec![0.9, 0.9],
        lambda: vec![0.5, 0.5],
        interest: vec![1.0, 1.0],
        features: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
    };
    let pp = PolicyPair {
        target: vec![vec![0.6, 0.4], vec![0.3, 0.7]],
        behavior: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
    };
    (mdp, pp)
}

/// The 7-state star counterexample with the classic 8-feature map. Action 0
/// ("dashed") moves to one of states 0..5 uniformly; action 1 ("solid") moves
/// to state 6. The target policy always takes the solid action while the
/// behavior policy takes the dashed action with probability 6/7. Off-policy
/// TD(0) diverges on this configuration.
pub fn baird7() -> (MdpModel, PolicyPair) {
    let ns = 7;
    let na = 2;
    let mut trans = vec![vec![vec![0.0; ns]; na]; ns];
    for s in 0..ns {
        for s2 in 0..6 {
            trans[s][0][s2] = 1.0 / 6.0;
        }
        trans[s][1][6] = 1.0;
    }
    let reward_mean = vec![vec![vec![1.0; ns]; na]; ns];
    let reward_noise_std = vec![vec![vec![0.0; ns]; na]; ns];
    // V(s_i) = 2 theta_i + theta_7 for the six outer states, V(s_6) = theta_6 + 2 theta_7.
    let mut features = vec![vec![0.0; 8]; ns];
    for (s, row) in features.iter_mut().enumerate().take(6) {
        row[s] = 2.0;
        row[7] = 1.0;
    }
    features[6][6] = 1.0;
    features[6][7] = 2.0;
    let mdp = MdpModel {
        n_states: ns,
        n_actions: na,
        trans,
        reward_mean,
        reward_noise_std,
        gamma: vec![0.99; ns],
        lambda: vec![0.0; ns],
        interest: vec![1.0; ns],
        features,
    };
    let pp = PolicyPair {
        target: vec![vec![0.0, 1.0]; ns],
        behavior: vec![vec![6.0 / 7.0, 1.0 / 7.0]; ns],
    };
    (mdp, pp)
}
