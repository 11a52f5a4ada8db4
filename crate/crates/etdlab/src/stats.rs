//! Ensemble Monte Carlo harness: seeded trajectory runs and the estimators
//! that turn asymptotic convergence statements into finite-sample statistics.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EtdError, Result};
use crate::mdp::{importance_table, run_rng, sample_step, MdpModel, PolicyPair};
use crate::sim::{psi_clip, trace_step, AlgoConfig, ClipKind, Stepper, TruncatedTrace};

const WILSON_Z: f64 = 1.959963984540054;

/// Full description of a seeded ensemble experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub algo: AlgoConfig,
    pub horizon: u64,
    /// Steps discarded before computing occupation statistics.
    #[serde(default)]
    pub burn_in: Option<u64>,
    #[serde(default = "default_n_runs")]
    pub n_runs: usize,
    #[serde(default)]
    pub base_seed: u64,
    /// Neighborhood radius around theta*.
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// Consecutive-iterate window length for the kappa estimate.
    #[serde(default = "default_window_m")]
    pub window_m: usize,
    #[serde(default = "default_thin")]
    pub thin: u64,
}

fn default_n_runs() -> usize {
    1
}
fn default_delta() -> f64 {
    0.1
}
fn default_window_m() -> usize {
    10
}
fn default_thin() -> u64 {
    1
}

impl ExperimentPlan {
    /// Burn-in defaults to 20% of the horizon.
    pub fn burn_in_steps(&self) -> u64 {
        self.burn_in.unwrap_or(self.horizon / 5)
    }

    pub fn validate(&self, mdp: &MdpModel) -> Result<()> {
        self.algo.validate(mdp)?;
        if self.horizon == 0 {
            return Err(EtdError::Config("horizon must be positive".into()));
        }
        if self.burn_in_steps() >= self.horizon {
            return Err(EtdError::Config("burn_in must be below horizon".into()));
        }
        if self.n_runs == 0 {
            return Err(EtdError::Config("n_runs must be at least 1".into()));
        }
        if self.delta <= 0.0 {
            return Err(EtdError::Config("delta must be positive".into()));
        }
        if self.window_m == 0 || self.thin == 0 {
            return Err(EtdError::Config("window_m and thin must be positive".into()));
        }
        Ok(())
    }
}

/// Thinned iterate log of one run, stored column-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub run_index: u64,
    pub base_seed: u64,
    pub thin: u64,
    pub n: usize,
    pub t: Vec<u64>,
    pub state: Vec<usize>,
    pub follow_on: Vec<f64>,
    pub emphasis: Vec<f64>,
    pub norm_e: Vec<f64>,
    /// Row-major, one row of length n per logged step.
    pub theta: Vec<f64>,
    pub diverged: bool,
    pub diverged_at: Option<u64>,
    pub clip_activations: u64,
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn theta_row(&self, idx: usize) -> &[f64] {
        &self.theta[idx * self.n..(idx + 1) * self.n]
    }

    /// Index of the first logged point at or after the given step count.
    pub fn index_at_step(&self, step: u64) -> usize {
        self.t.partition_point(|&t| t < step)
    }
}

fn dist(theta: &[f64], target: &DVector<f64>) -> f64 {
    theta
        .iter()
        .zip(target.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Simulates one run of the planned algorithm. Deterministic given
/// (base_seed, run_index); divergence is recorded, not raised.
pub fn run_trajectory(
    mdp: &MdpModel,
    pp: &PolicyPair,
    plan: &ExperimentPlan,
    run_index: u64,
) -> Result<RunLog> {
    plan.validate(mdp)?;
    let stepper = Stepper::new(mdp, pp, &plan.algo)?;
    let mut state = stepper.init_state();
    let mut rng = run_rng(plan.base_seed, run_index);
    let mut log = RunLog {
        run_index,
        base_seed: plan.base_seed,
        thin: plan.thin,
        n: mdp.n_features(),
        t: Vec::new(),
        state: Vec::new(),
        follow_on: Vec::new(),
        emphasis: Vec::new(),
        norm_e: Vec::new(),
        theta: Vec::new(),
        diverged: false,
        diverged_at: None,
        clip_activations: 0,
    };
    let record = |st: &crate::sim::AlgState, log: &mut RunLog| {
        log.t.push(st.t);
        log.state.push(st.s);
        log.follow_on.push(st.f);
        log.emphasis.push(st.m);
        log.norm_e.push(st.e.norm());
        log.theta.extend(st.theta.iter());
    };
    while state.t < plan.horizon {
        if state.t % plan.thin == 0 {
            record(&state, &mut log);
        }
        let alpha = plan.algo.schedule.alpha(state.t);
        match stepper.advance(&mut state, &mut rng, alpha) {
            Ok(info) => {
                if info.clip_was_active {
                    log.clip_activations += 1;
                }
            }
            Err(EtdError::NonFinite { step }) => {
                log.diverged = true;
                log.diverged_at = Some(step as u64);
                return Ok(log);
            }
            Err(other) => return Err(other),
        }
    }
    record(&state, &mut log);
    Ok(log)
}

/// All runs of the plan, in run-index order, executed in parallel.
pub fn run_ensemble(mdp: &MdpModel, pp: &PolicyPair, plan: &ExperimentPlan) -> Result<Vec<RunLog>> {
    (0..plan.n_runs as u64)
        .into_par_iter()
        .map(|idx| run_trajectory(mdp, pp, plan, idx))
        .collect()
}

/// Monte Carlo estimate of the key matrix and vector: C_hat averages
/// e_t rho_t (gamma' phi(S') - phi(S))^T, b_hat averages e_t rho_t R_t.
pub fn elstd_estimate(
    mdp: &MdpModel,
    pp: &PolicyPair,
    horizon: u64,
    base_seed: u64,
    run_index: u64,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let rho = importance_table(pp)?;
    let n = mdp.n_features();
    let mut rng = run_rng(base_seed, run_index);
    let mut s = 0usize;
    let mut f = mdp.interest[s];
    let lam = mdp.lambda[s];
    let m0 = lam * mdp.interest[s] + (1.0 - lam) * f;
    let mut e = mdp.feature(s) * m0;
    let mut c_hat = DMatrix::zeros(n, n);
    let mut b_hat = DVector::zeros(n);
    for _ in 0..horizon {
        let (a, s2, reward) = sample_step(mdp, pp, &mut rng, s);
        let rho_t = rho[s][a];
        let diff = mdp.feature(s2) * mdp.gamma[s2] - mdp.feature(s);
        c_hat += &e * (diff.transpose() * rho_t);
        b_hat += &e * (rho_t * reward);
        let (e2, f2, _) = trace_step(mdp, &e, f, s2, rho_t);
        e = e2;
        f = f2;
        s = s2;
    }
    c_hat /= horizon as f64;
    b_hat /= horizon as f64;
    Ok((c_hat, b_hat))
}

/// Fraction of logged iterates in the closed delta-ball around theta*.
pub fn occupation_fraction(
    log: &RunLog,
    theta_star: &DVector<f64>,
    delta: f64,
    from_k: usize,
    length: usize,
) -> Result<f64> {
    if length == 0 || from_k + length > log.len() {
        return Err(EtdError::WindowOutOfRange {
            from: from_k,
            to: from_k + length,
            len: log.len(),
        });
    }
    let inside = (from_k..from_k + length)
        .filter(|&i| dist(log.theta_row(i), theta_star) <= delta)
        .count();
    Ok(inside as f64 / length as f64)
}

/// 95% Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Fraction of runs with at least one iterate leaving the delta-ball in the
/// window, with its Wilson interval.
pub fn segment_violation_prob(
    logs: &[RunLog],
    theta_star: &DVector<f64>,
    delta: f64,
    from_k: usize,
    length: usize,
) -> Result<(f64, (f64, f64))> {
    if logs.is_empty() {
        return Err(EtdError::MissingRuns("no logs for violation estimate".into()));
    }
    let mut violating = 0usize;
    for log in logs {
        let frac = occupation_fraction(log, theta_star, delta, from_k, length)?;
        if frac < 1.0 {
            violating += 1;
        }
    }
    let p = violating as f64 / logs.len() as f64;
    Ok((p, wilson_interval(violating, logs.len())))
}

/// Sup over the window of the distance between the running iterate average
/// and theta*.
pub fn averaged_deviation(
    log: &RunLog,
    theta_star: &DVector<f64>,
    k: usize,
    m: usize,
) -> Result<f64> {
    if m == 0 || k + m > log.len() {
        return Err(EtdError::WindowOutOfRange { from: k, to: k + m, len: log.len() });
    }
    let n = log.n;
    let mut mean = vec![0.0f64; n];
    let mut sup = 0.0f64;
    for i in 0..k + m {
        let row = log.theta_row(i);
        let count = (i + 1) as f64;
        for j in 0..n {
            mean[j] += (row[j] - mean[j]) / count;
        }
        if i >= k {
            sup = sup.max(dist(&mean, theta_star));
        }
    }
    Ok(sup)
}

/// Occupation-measure estimate of the invariant mass on m consecutive
/// iterates staying strictly inside the delta-ball, with a conservative
/// standard error based on non-overlapping window counts.
pub fn kappa_estimate(
    logs: &[RunLog],
    theta_star: &DVector<f64>,
    delta: f64,
    m: usize,
    burn_in_idx: usize,
) -> Result<(f64, f64)> {
    if logs.is_empty() {
        return Err(EtdError::MissingRuns("no logs for kappa estimate".into()));
    }
    let mut good = 0usize;
    let mut total = 0usize;
    for log in logs {
        let len = log.len();
        if burn_in_idx + m > len {
            return Err(EtdError::WindowOutOfRange { from: burn_in_idx, to: burn_in_idx + m, len });
        }
        let inside: Vec<bool> = (burn_in_idx..len)
            .map(|i| dist(log.theta_row(i), theta_star) < delta)
            .collect();
        let mut prefix = vec![0usize; inside.len() + 1];
        for (i, &b) in inside.iter().enumerate() {
            prefix[i + 1] = prefix[i] + b as usize;
        }
        for start in 0..=inside.len() - m {
            total += 1;
            if prefix[start + m] - prefix[start] == m {
                good += 1;
            }
        }
    }
    let kappa = good as f64 / total as f64;
    // Overlapping windows are dependent; use the non-overlapping count.
    let n_eff = (total / m).max(1) as f64;
    let se = (kappa * (1.0 - kappa) / n_eff).sqrt();
    Ok((kappa, se))
}

/// Uniform-integrability tail diagnostic: a -> max_t mean_runs of
/// ||e_t|| 1(||e_t|| >= a). Logs must share a common length.
pub fn ui_diagnostic(logs: &[RunLog], a_list: &[f64]) -> Result<Vec<(f64, f64)>> {
    if logs.is_empty() {
        return Err(EtdError::MissingRuns("no logs for tail diagnostic".into()));
    }
    let len = logs[0].len();
    if logs.iter().any(|l| l.len() != len) {
        return Err(EtdError::Config("tail diagnostic requires equal-length logs".into()));
    }
    let n_runs = logs.len() as f64;
    Ok(a_list
        .iter()
        .map(|&a| {
            let mut worst = 0.0f64;
            for i in 0..len {
                let mean = logs
                    .iter()
                    .map(|l| if l.norm_e[i] >= a { l.norm_e[i] } else { 0.0 })
                    .sum::<f64>()
                    / n_runs;
                worst = worst.max(mean);
            }
            (a, worst)
        })
        .collect())
}

/// Time-averaged infinity-norm gap between the exact and truncated traces,
/// one value per window length, all driven by the same sampled trajectory.
pub fn truncation_error_curve(
    mdp: &MdpModel,
    pp: &PolicyPair,
    horizon: u64,
    base_seed: u64,
    run_index: u64,
    k_list: &[usize],
) -> Result<Vec<(usize, f64)>> {
    let rho_table = importance_table(pp)?;
    let mut rng = run_rng(base_seed, run_index);
    let mut s = 0usize;
    let mut transitions = Vec::with_capacity(horizon as usize);
    for _ in 0..horizon {
        let (a, s2, _) = sample_step(mdp, pp, &mut rng, s);
        transitions.push((s2, rho_table[s][a]));
        s = s2;
    }
    let s0 = 0usize;
    let f0 = mdp.interest[s0];
    let m0 = mdp.lambda[s0] * mdp.interest[s0] + (1.0 - mdp.lambda[s0]) * f0;
    let e0 = mdp.feature(s0) * m0;
    let mut out = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let mut exact_e = e0.clone();
        let mut exact_f = f0;
        let mut trunc = TruncatedTrace::new(mdp, k, s0, e0.clone(), f0);
        let mut acc = 0.0f64;
        for &(s_new, rho) in &transitions {
            let (e2, f2, _) = trace_step(mdp, &exact_e, exact_f, s_new, rho);
            exact_e = e2;
            exact_f = f2;
            trunc.step(mdp, s_new, rho);
            let e_gap = (&exact_e - &trunc.e_tilde).amax();
            let f_gap = (exact_f - trunc.f_tilde).abs();
            acc += e_gap.max(f_gap);
        }
        out.push((k, acc / horizon as f64));
    }
    Ok(out)
}

/// How an h_bar estimate is clipped, if at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HbarClip {
    None,
    Trace { k: f64, kind: ClipKind },
    Increment { k: f64, kind: ClipKind },
}

/// Trajectory average of h(theta, xi_t) at a fixed theta, using mean rewards.
/// The unclipped estimate converges to C theta + b.
pub fn hbar_estimate(
    mdp: &MdpModel,
    pp: &PolicyPair,
    theta: &DVector<f64>,
    horizon: u64,
    base_seed: u64,
    run_index: u64,
    clip: HbarClip,
) -> Result<DVector<f64>> {
    let rho_table = importance_table(pp)?;
    let mut rng = run_rng(base_seed, run_index);
    let mut s = 0usize;
    let mut f = mdp.interest[s];
    let m0 = mdp.lambda[s] * mdp.interest[s] + (1.0 - mdp.lambda[s]) * f;
    let mut e = mdp.feature(s) * m0;
    let mut acc = DVector::zeros(mdp.n_features());
    for _ in 0..horizon {
        let (a, s2, _) = sample_step(mdp, pp, &mut rng, s);
        let rho = rho_table[s][a];
        let r_mean = mdp.reward_mean[s][a][s2];
        let td = r_mean + mdp.gamma[s2] * mdp.feature(s2).dot(theta) - mdp.feature(s).dot(theta);
        let h = match clip {
            HbarClip::None => &e * (rho * td),
            HbarClip::Trace { k, kind } => psi_clip(&e, k, kind) * (rho * td),
            HbarClip::Increment { k, kind } => psi_clip(&(&e * (rho * td)), k, kind),
        };
        acc += h;
        let (e2, f2, _) = trace_step(mdp, &e, f, s2, rho);
        e = e2;
        f = f2;
        s = s2;
    }
    Ok(acc / horizon as f64)
}

/// Gap series between two trace streams driven by identical transitions but
/// different initial conditions.
#[derive(Debug, Clone)]
pub struct CouplingSeries {
    pub f_gap: Vec<f64>,
    pub e_gap: Vec<f64>,
    pub terminal_f_gap: f64,
    pub terminal_e_gap: f64,
}

pub fn coupling_check(
    mdp: &MdpModel,
    pp: &PolicyPair,
    init_a: (DVector<f64>, f64),
    init_b: (DVector<f64>, f64),
    base_seed: u64,
    run_index: u64,
    horizon: u64,
    thin: u64,
) -> Result<CouplingSeries> {
    let rho_table = importance_table(pp)?;
    let mut rng = run_rng(base_seed, run_index);
    let mut s = 0usize;
    let (mut e_a, mut f_a) = init_a;
    let (mut e_b, mut f_b) = init_b;
    let mut f_gap = Vec::new();
    let mut e_gap = Vec::new();
    for t in 0..horizon {
        let (a, s2, _) = sample_step(mdp, pp, &mut rng, s);
        let rho = rho_table[s][a];
        let (ea, fa, _) = trace_step(mdp, &e_a, f_a, s2, rho);
        let (eb, fb, _) = trace_step(mdp, &e_b, f_b, s2, rho);
        e_a = ea;
        f_a = fa;
        e_b = eb;
        f_b = fb;
        s = s2;
        if (t + 1) % thin.max(1) == 0 || t + 1 == horizon {
            f_gap.push((f_a - f_b).abs());
            e_gap.push((&e_a - &e_b).amax());
        }
    }
    let terminal_f_gap = (f_a - f_b).abs();
    let terminal_e_gap = (&e_a - &e_b).amax();
    Ok(CouplingSeries { f_gap, e_gap, terminal_f_gap, terminal_e_gap })
}

/// Per-run and aggregate statistics of an ensemble against a fixed target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub n_runs: usize,
    pub diverged_runs: usize,
    pub occupation: Vec<f64>,
    pub occupation_median: f64,
    pub violation_prob: f64,
    pub violation_ci: (f64, f64),
    pub sup_avg_deviation: Vec<f64>,
    pub sup_avg_deviation_median: f64,
    pub kappa: f64,
    pub kappa_se: f64,
    /// Single-run occupation estimates are only justified pathwise for
    /// perturbed variants; otherwise the estimate is a heuristic.
    pub kappa_is_heuristic: bool,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Aggregates the per-run statistics of converging logs; diverged runs are
/// counted but excluded from occupation statistics.
pub fn ensemble_stats(
    logs: &[RunLog],
    plan: &ExperimentPlan,
    theta_star: &DVector<f64>,
) -> Result<EnsembleStats> {
    if logs.is_empty() {
        return Err(EtdError::MissingRuns("empty ensemble".into()));
    }
    let alive: Vec<&RunLog> = logs.iter().filter(|l| !l.diverged).collect();
    let diverged_runs = logs.len() - alive.len();
    if alive.is_empty() {
        return Ok(EnsembleStats {
            n_runs: logs.len(),
            diverged_runs,
            occupation: Vec::new(),
            occupation_median: f64::NAN,
            violation_prob: 1.0,
            violation_ci: wilson_interval(logs.len(), logs.len()),
            sup_avg_deviation: Vec::new(),
            sup_avg_deviation_median: f64::NAN,
            kappa: 0.0,
            kappa_se: 0.0,
            kappa_is_heuristic: true,
        });
    }
    let burn_idx = alive[0].index_at_step(plan.burn_in_steps());
    let len = alive.iter().map(|l| l.len()).min().unwrap();
    let window = len - burn_idx;
    let mut occupation = Vec::with_capacity(alive.len());
    let mut sup_avg = Vec::with_capacity(alive.len());
    for log in &alive {
        occupation.push(occupation_fraction(log, theta_star, plan.delta, burn_idx, window)?);
        sup_avg.push(averaged_deviation(log, theta_star, burn_idx, window)?);
    }
    let owned: Vec<RunLog> = alive.iter().map(|l| (*l).clone()).collect();
    let (violation_prob, violation_ci) =
        segment_violation_prob(&owned, theta_star, plan.delta, burn_idx, window)?;
    let (kappa, kappa_se) =
        kappa_estimate(&owned, theta_star, plan.delta, plan.window_m.min(window), burn_idx)?;
    Ok(EnsembleStats {
        n_runs: logs.len(),
        diverged_runs,
        occupation_median: median(&occupation),
        occupation,
        violation_prob,
        violation_ci,
        sup_avg_deviation_median: median(&sup_avg),
        sup_avg_deviation: sup_avg,
        kappa,
        kappa_se,
        kappa_is_heuristic: plan.algo.perturb_std == 0.0,
    })
}
