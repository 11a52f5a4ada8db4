//! The stochastic iterates: trace recursions, truncated traces, clipping
//! maps, ball projection, stepsize schedules and one-step updates for every
//! algorithm variant.

use std::collections::VecDeque;

use nalgebra::DVector;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{EtdError, Result};
use crate::mdp::{importance_table, sample_step, MdpModel, PolicyPair, RunRng};

/// Unconstrained iterates beyond this magnitude are recorded as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    UnconstrainedEtd,
    ProjectedEtd,
    ClipTraceEtd,
    ClipIncrementEtd,
    OffPolicyTd,
    ProjectedOffPolicyTd,
}

impl Variant {
    pub fn is_projected(self) -> bool {
        matches!(
            self,
            Variant::ProjectedEtd
                | Variant::ClipTraceEtd
                | Variant::ClipIncrementEtd
                | Variant::ProjectedOffPolicyTd
        )
    }

    pub fn is_td(self) -> bool {
        matches!(self, Variant::OffPolicyTd | Variant::ProjectedOffPolicyTd)
    }

    pub fn uses_clip(self) -> bool {
        matches!(self, Variant::ClipTraceEtd | Variant::ClipIncrementEtd)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipKind {
    Radial,
    Componentwise,
}

/// Stepsize schedules. All produce strictly positive stepsizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepSchedule {
    Constant { alpha: f64 },
    /// alpha_t = a / (t + t0)^beta with beta in (0, 1].
    Polynomial { a: f64, t0: f64, beta: f64 },
    /// Constant within intervals of growing length; the constant on the k-th
    /// interval is a * (k+1)^{-beta}, the k-th interval has length
    /// base_len * (k+1).
    PiecewiseConstant { a: f64, base_len: u64, beta: f64 },
    /// alpha_t = a / (t + t0), the classic schedule.
    Classic { a: f64, t0: f64 },
}

impl StepSchedule {
    pub fn alpha(&self, t: u64) -> f64 {
        match *self {
            StepSchedule::Constant { alpha } => alpha,
            StepSchedule::Polynomial { a, t0, beta } => a / (t as f64 + t0).powf(beta),
            StepSchedule::PiecewiseConstant { a, base_len, beta } => {
                let mut k = 0u64;
                let mut start = 0u64;
                loop {
                    let len = base_len * (k + 1);
                    if t < start + len {
                        return a / ((k + 1) as f64).powf(beta);
                    }
                    start += len;
                    k += 1;
                }
            }
            StepSchedule::Classic { a, t0 } => a / (t as f64 + t0),
        }
    }

    /// m(k,T): the latest iteration before time T has elapsed since the k-th
    /// iteration, by forward summation.
    pub fn m_of(&self, k: u64, horizon_t: f64) -> u64 {
        let mut t = k;
        let mut sum = self.alpha(k) + self.alpha(k + 1);
        loop {
            if sum > horizon_t {
                return t;
            }
            t += 1;
            sum += self.alpha(t + 1);
        }
    }

    /// sup_{0 <= j <= m} |alpha_{t+j}/alpha_t - 1|, the slow-decrease modulus
    /// used to check the diminishing-stepsize condition numerically.
    pub fn slow_decrease_sup(&self, t: u64, m: u64) -> f64 {
        let base = self.alpha(t);
        (0..=m)
            .map(|j| (self.alpha(t + j) / base - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Configuration of a single algorithm run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgoConfig {
    pub variant: Variant,
    /// Ball radius for projected variants.
    #[serde(default)]
    pub radius: Option<f64>,
    /// Clipping level K for the clip variants.
    #[serde(default)]
    pub clip_k: Option<f64>,
    #[serde(default = "default_clip_kind")]
    pub clip_kind: ClipKind,
    /// Std of the per-step Gaussian perturbation; zero disables it.
    #[serde(default)]
    pub perturb_std: f64,
    pub schedule: StepSchedule,
    #[serde(default)]
    pub init_e: Option<Vec<f64>>,
    #[serde(default)]
    pub init_f: Option<f64>,
    #[serde(default)]
    pub init_theta: Option<Vec<f64>>,
    /// Starting state, default 0.
    #[serde(default)]
    pub init_state: usize,
}

fn default_clip_kind() -> ClipKind {
    ClipKind::Componentwise
}

impl AlgoConfig {
    pub fn validate(&self, mdp: &MdpModel) -> Result<()> {
        if self.variant.is_projected() {
            match self.radius {
                Some(r) if r > 0.0 => {}
                _ => return Err(EtdError::Config("projected variants require radius > 0".into())),
            }
        }
        if self.variant.uses_clip() {
            match self.clip_k {
                Some(k) if k > 0.0 => {}
                _ => return Err(EtdError::Config("clip variants require clip_k > 0".into())),
            }
        }
        if self.variant.is_td() {
            let g0 = mdp.gamma[0];
            let l0 = mdp.lambda[0];
            if mdp.gamma.iter().any(|&g| g != g0) || mdp.lambda.iter().any(|&l| l != l0) {
                return Err(EtdError::Config(
                    "off-policy TD variants require constant gamma and lambda".into(),
                ));
            }
        }
        if self.init_state >= mdp.n_states {
            return Err(EtdError::Config("init_state out of range".into()));
        }
        let n = mdp.n_features();
        if self.init_e.as_ref().is_some_and(|e| e.len() != n)
            || self.init_theta.as_ref().is_some_and(|t| t.len() != n)
        {
            return Err(EtdError::Config("init_e/init_theta must have length n".into()));
        }
        if self.perturb_std < 0.0 {
            return Err(EtdError::Config("perturb_std must be nonnegative".into()));
        }
        Ok(())
    }
}

/// The joint iterate of any algorithm variant at one time step.
#[derive(Debug, Clone)]
pub struct AlgState {
    pub t: u64,
    pub s: usize,
    pub rho_prev: f64,
    pub e: DVector<f64>,
    pub f: f64,
    pub m: f64,
    pub theta: DVector<f64>,
}

impl AlgState {
    pub fn init(mdp: &MdpModel, cfg: &AlgoConfig) -> AlgState {
        let s0 = cfg.init_state;
        let f0 = cfg.init_f.unwrap_or(mdp.interest[s0]);
        let lam = mdp.lambda[s0];
        let m0 = lam * mdp.interest[s0] + (1.0 - lam) * f0;
        let m_eff = if cfg.variant.is_td() { 1.0 } else { m0 };
        let e0 = cfg
            .init_e
            .as_ref()
            .map(|e| DVector::from_row_slice(e))
            .unwrap_or_else(|| {
                if cfg.variant.is_td() {
                    mdp.feature(s0)
                } else {
                    mdp.feature(s0) * m0
                }
            });
        let theta0 = cfg
            .init_theta
            .as_ref()
            .map(|t| DVector::from_row_slice(t))
            .unwrap_or_else(|| DVector::zeros(mdp.n_features()));
        AlgState {
            t: 0,
            s: s0,
            rho_prev: 1.0,
            e: e0,
            f: f0,
            m: m_eff,
            theta: theta0,
        }
    }
}

/// Advances the emphatic trace triple to the next state:
/// F <- gamma(s') rho F + i(s'), M <- lambda i + (1-lambda) F,
/// e <- lambda gamma rho e + M phi(s').
pub fn trace_step(
    mdp: &MdpModel,
    e: &DVector<f64>,
    f: f64,
    s_new: usize,
    rho_prev: f64,
) -> (DVector<f64>, f64, f64) {
    let gamma = mdp.gamma[s_new];
    let lambda = mdp.lambda[s_new];
    let interest = mdp.interest[s_new];
    let f_new = gamma * rho_prev * f + interest;
    let m_new = lambda * interest + (1.0 - lambda) * f_new;
    let e_new = e * (lambda * gamma * rho_prev) + mdp.feature(s_new) * m_new;
    (e_new, f_new, m_new)
}

/// TD-style trace: M is identically 1 and the follow-on trace plays no role.
pub fn td_trace_step(
    mdp: &MdpModel,
    e: &DVector<f64>,
    s_new: usize,
    rho_prev: f64,
) -> DVector<f64> {
    let gamma = mdp.gamma[s_new];
    let lambda = mdp.lambda[s_new];
    e * (lambda * gamma * rho_prev) + mdp.feature(s_new)
}

/// Bounded Lipschitz clipping map: identity on the K-ball of the infinity
/// norm, never increasing the infinity norm.
pub fn psi_clip(x: &DVector<f64>, k: f64, kind: ClipKind) -> DVector<f64> {
    match kind {
        ClipKind::Componentwise => x.map(|v| v.clamp(-k, k)),
        ClipKind::Radial => {
            let r_bar = (x.len() as f64).sqrt() * k;
            let norm = x.norm();
            if norm >= r_bar && norm > 0.0 {
                x * (r_bar / norm)
            } else {
                x.clone()
            }
        }
    }
}

/// Whether `psi_clip` would alter `x`.
pub fn clip_active(x: &DVector<f64>, k: f64, kind: ClipKind) -> bool {
    match kind {
        ClipKind::Componentwise => x.amax() > k,
        ClipKind::Radial => x.norm() >= (x.len() as f64).sqrt() * k,
    }
}

/// Euclidean projection onto the origin-centered ball of radius r_b.
pub fn project_ball(theta: &DVector<f64>, r_b: f64) -> DVector<f64> {
    let norm = theta.norm();
    if norm <= r_b {
        theta.clone()
    } else {
        theta * (r_b / norm)
    }
}

/// h(theta, xi) with the mean reward: e * rho * (r + gamma' phi'^T theta -
/// phi^T theta).
pub fn h_eval(
    theta: &DVector<f64>,
    e: &DVector<f64>,
    rho: f64,
    reward_mean: f64,
    gamma_next: f64,
    phi_s: &DVector<f64>,
    phi_next: &DVector<f64>,
) -> DVector<f64> {
    let td = reward_mean + gamma_next * phi_next.dot(theta) - phi_s.dot(theta);
    e * (rho * td)
}

/// Outcome of a single simulated step.
#[derive(Debug, Clone)]
pub struct StepInfo {
    pub action: usize,
    pub next_state: usize,
    pub reward: f64,
    pub rho: f64,
    pub clip_was_active: bool,
}

/// Drives one run of a configured algorithm over a model.
pub struct Stepper<'a> {
    mdp: &'a MdpModel,
    pp: &'a PolicyPair,
    rho: Vec<Vec<f64>>,
    cfg: &'a AlgoConfig,
}

impl<'a> Stepper<'a> {
    pub fn new(mdp: &'a MdpModel, pp: &'a PolicyPair, cfg: &'a AlgoConfig) -> Result<Self> {
        cfg.validate(mdp)?;
        Ok(Stepper {
            mdp,
            pp,
            rho: importance_table(pp)?,
            cfg,
        })
    }

    pub fn init_state(&self) -> AlgState {
        AlgState::init(self.mdp, self.cfg)
    }

    /// One full iteration: sample a behavior transition, update theta
    /// according to the configured variant, then advance the traces.
    pub fn advance(&self, state: &mut AlgState, rng: &mut RunRng, alpha: f64) -> Result<StepInfo> {
        let (a, s_next, reward) = sample_step(self.mdp, self.pp, rng, state.s);
        let rho_t = self.rho[state.s][a];
        let theta_next = self.theta_update(state, a, s_next, reward, alpha, rng)?;
        let clip_was_active = self.clip_was_active(state, a, s_next, reward);
        state.theta = theta_next;
        if self.cfg.variant.is_td() {
            state.e = td_trace_step(self.mdp, &state.e, s_next, rho_t);
            let gamma = self.mdp.gamma[s_next];
            state.f = gamma * rho_t * state.f + self.mdp.interest[s_next];
            state.m = 1.0;
        } else {
            let (e, f, m) = trace_step(self.mdp, &state.e, state.f, s_next, rho_t);
            state.e = e;
            state.f = f;
            state.m = m;
        }
        state.rho_prev = rho_t;
        state.s = s_next;
        state.t += 1;
        Ok(StepInfo {
            action: a,
            next_state: s_next,
            reward,
            rho: rho_t,
            clip_was_active,
        })
    }

    fn clip_was_active(&self, state: &AlgState, a: usize, s_next: usize, _reward: f64) -> bool {
        let _ = (a, s_next);
        match self.cfg.variant {
            Variant::ClipTraceEtd => {
                clip_active(&state.e, self.cfg.clip_k.unwrap(), self.cfg.clip_kind)
            }
            Variant::ClipIncrementEtd => {
                // Checked against the pre-update increment inside theta_update;
                // recomputed here for reporting.
                let rho_t = self.rho[state.s][a];
                let td = _reward + self.mdp.gamma[s_next] * self.mdp.feature(s_next).dot(&state.theta)
                    - self.mdp.feature(state.s).dot(&state.theta);
                let y = &state.e * (rho_t * td);
                clip_active(&y, self.cfg.clip_k.unwrap(), self.cfg.clip_kind)
            }
            _ => false,
        }
    }

    fn theta_update(
        &self,
        state: &AlgState,
        a: usize,
        s_next: usize,
        reward: f64,
        alpha: f64,
        rng: &mut RunRng,
    ) -> Result<DVector<f64>> {
        let rho_t = self.rho[state.s][a];
        let td = reward + self.mdp.gamma[s_next] * self.mdp.feature(s_next).dot(&state.theta)
            - self.mdp.feature(state.s).dot(&state.theta);
        let increment = match self.cfg.variant {
            Variant::ClipTraceEtd => {
                psi_clip(&state.e, self.cfg.clip_k.unwrap(), self.cfg.clip_kind) * (rho_t * td)
            }
            Variant::ClipIncrementEtd => {
                let y = &state.e * (rho_t * td);
                psi_clip(&y, self.cfg.clip_k.unwrap(), self.cfg.clip_kind)
            }
            _ => &state.e * (rho_t * td),
        };
        let mut theta = &state.theta + increment * alpha;
        if self.cfg.perturb_std > 0.0 {
            let sigma = self.cfg.perturb_std;
            for v in theta.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += alpha * sigma * z;
            }
        }
        if let Some(r_b) = self.cfg.radius.filter(|_| self.cfg.variant.is_projected()) {
            theta = project_ball(&theta, r_b);
        }
        if theta.iter().any(|v| !v.is_finite()) || theta.norm() > DIVERGENCE_LIMIT {
            return Err(EtdError::NonFinite { step: state.t as usize });
        }
        Ok(theta)
    }
}

#[derive(Debug, Clone)]
struct TraceEntry {
    /// rho at the previous step, i.e. the factor multiplying the carried trace.
    rho_prev: f64,
    gamma: f64,
    lambda: f64,
    interest: f64,
    phi: DVector<f64>,
    f_tilde: f64,
}

/// Truncated traces over a sliding window: exact for t <= K, and a pure
/// function of the last 2K+1 transitions once t >= 2K+1.
#[derive(Debug, Clone)]
pub struct TruncatedTrace {
    k: usize,
    t: u64,
    buf: VecDeque<TraceEntry>,
    pub e_tilde: DVector<f64>,
    pub f_tilde: f64,
    pub m_tilde: f64,
}

impl TruncatedTrace {
    pub fn new(mdp: &MdpModel, k: usize, s0: usize, init_e: DVector<f64>, init_f: f64) -> Self {
        assert!(k >= 1);
        let lambda = mdp.lambda[s0];
        let m = lambda * mdp.interest[s0] + (1.0 - lambda) * init_f;
        let mut buf = VecDeque::with_capacity(k + 2);
        buf.push_back(TraceEntry {
            rho_prev: 1.0,
            gamma: mdp.gamma[s0],
            lambda,
            interest: mdp.interest[s0],
            phi: mdp.feature(s0),
            f_tilde: init_f,
        });
        TruncatedTrace {
            k,
            t: 0,
            buf,
            e_tilde: init_e,
            f_tilde: init_f,
            m_tilde: m,
        }
    }

    pub fn step(&mut self, mdp: &MdpModel, s_new: usize, rho_prev: f64) {
        self.t += 1;
        let gamma = mdp.gamma[s_new];
        let lambda = mdp.lambda[s_new];
        let interest = mdp.interest[s_new];
        let phi = mdp.feature(s_new);

        if self.t <= self.k as u64 {
            // Exact regime: identical to the untruncated recursion.
            self.f_tilde = gamma * rho_prev * self.f_tilde + interest;
            self.m_tilde = lambda * interest + (1.0 - lambda) * self.f_tilde;
            self.e_tilde = &self.e_tilde * (lambda * gamma * rho_prev) + &phi * self.m_tilde;
            self.buf.push_back(TraceEntry {
                rho_prev,
                gamma,
                lambda,
                interest,
                phi,
                f_tilde: self.f_tilde,
            });
        } else {
            self.buf.push_back(TraceEntry {
                rho_prev,
                gamma,
                lambda,
                interest,
                phi,
                f_tilde: 0.0,
            });
            // Windowed follow-on trace over the last K+1 entries.
            let len = self.buf.len();
            let mut f = 0.0;
            let mut prod = 1.0;
            for idx in (len - 1 - self.k..len).rev() {
                let entry = &self.buf[idx];
                f += entry.interest * prod;
                prod *= entry.rho_prev * entry.gamma;
            }
            self.buf[len - 1].f_tilde = f;
            self.f_tilde = f;
            let last = &self.buf[len - 1];
            self.m_tilde = last.lambda * last.interest + (1.0 - last.lambda) * f;
            // Windowed eligibility trace using the stored truncated follow-ons.
            let mut e = DVector::zeros(self.e_tilde.len());
            let mut beta_prod = 1.0;
            for idx in (len - 1 - self.k..len).rev() {
                let entry = &self.buf[idx];
                let m = entry.lambda * entry.interest + (1.0 - entry.lambda) * entry.f_tilde;
                e += &entry.phi * (m * beta_prod);
                beta_prod *= entry.rho_prev * entry.gamma * entry.lambda;
            }
            self.e_tilde = e;
        }
        while self.buf.len() > self.k + 1 {
            self.buf.pop_front();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{run_rng, twostate};
    use approx::assert_abs_diff_eq;

    fn scalar_model(gamma: f64, lambda: f64) -> MdpModel {
        MdpModel {
            n_states: 1,
            n_actions: 1,
            trans: vec![vec![vec![1.0]]],
            reward_mean: vec![vec![vec![0.0]]],
            reward_noise_std: vec![vec![vec![0.0]]],
            gamma: vec![gamma],
            lambda: vec![lambda],
            interest: vec![1.0],
            features: vec![vec![1.0]],
        }
    }

    #[test]
    fn trace_step_hand_example() {
        let mut mdp = twostate();
        let mdp = {
            mdp.0.gamma = vec![0.9, 0.9];
            mdp.0.lambda = vec![0.5, 0.5];
            mdp.0.interest = vec![1.0, 1.0];
            mdp.0.features = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
            mdp.0
        };
        let e = DVector::from_row_slice(&[1.0, 0.0]);
        let (e_new, f_new, m_new) = trace_step(&mdp, &e, 1.0, 1, 2.0);
        assert_abs_diff_eq!(f_new, 2.8, epsilon = 1e-14);
        assert_abs_diff_eq!(m_new, 1.9, epsilon = 1e-14);
        assert_abs_diff_eq!(e_new[0], 0.9, epsilon = 1e-14);
        assert_abs_diff_eq!(e_new[1], 1.9, epsilon = 1e-14);
    }

    #[test]
    fn trace_step_lambda_zero_collapse() {
        let (mut mdp, _) = twostate();
        mdp.lambda = vec![0.0, 0.0];
        let e = DVector::from_row_slice(&[3.0, -1.0]);
        let (e_new, f_new, _) = trace_step(&mdp, &e, 2.0, 1, 1.5);
        // History enters only through F: e_t = F_t phi(S_t).
        let expected = mdp.feature(1) * f_new;
        assert!((e_new - expected).amax() < 1e-14);
    }

    #[test]
    fn follow_on_geometric_fixed_point() {
        let mdp = scalar_model(0.5, 0.3);
        let mut e = DVector::from_row_slice(&[1.0]);
        let mut f = 1.0;
        for _ in 0..1000 {
            let (e2, f2, _) = trace_step(&mdp, &e, f, 0, 1.0);
            e = e2;
            f = f2;
        }
        assert_abs_diff_eq!(f, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn psi_clip_cases() {
        let inside = DVector::from_row_slice(&[0.5, -0.9]);
        for kind in [ClipKind::Componentwise, ClipKind::Radial] {
            assert!((psi_clip(&inside, 1.0, kind) - &inside).amax() == 0.0);
        }
        let x = DVector::from_row_slice(&[3.0, -0.5]);
        let clipped = psi_clip(&x, 1.0, ClipKind::Componentwise);
        assert_eq!(clipped[0], 1.0);
        assert_eq!(clipped[1], -0.5);
        let x = DVector::from_row_slice(&[3.0, 4.0]);
        let clipped = psi_clip(&x, 1.0, ClipKind::Radial);
        let r_bar = 2.0f64.sqrt();
        assert_abs_diff_eq!(clipped[0], r_bar * 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(clipped[1], r_bar * 0.8, epsilon = 1e-12);
    }

    #[test]
    fn project_ball_cases() {
        let inside = DVector::from_row_slice(&[3.0, 4.0]);
        assert!((project_ball(&inside, 5.0) - &inside).amax() == 0.0);
        let outside = DVector::from_row_slice(&[6.0, 8.0]);
        let projected = project_ball(&outside, 5.0);
        assert_abs_diff_eq!(projected[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(projected[1], 4.0, epsilon = 1e-12);
        let twice = project_ball(&projected, 5.0);
        assert_eq!(twice, projected);
    }

    #[test]
    fn h_eval_cases() {
        let theta = DVector::from_row_slice(&[2.0]);
        let e = DVector::from_row_slice(&[2.0]);
        let phi = DVector::from_row_slice(&[1.0]);
        let h = h_eval(&theta, &e, 1.5, 1.0, 0.9, &phi, &phi);
        assert_abs_diff_eq!(h[0], 2.4, epsilon = 1e-12);
        // Zero trace gives a zero update.
        let h0 = h_eval(&theta, &DVector::zeros(1), 1.5, 1.0, 0.9, &phi, &phi);
        assert_eq!(h0[0], 0.0);
        // Zero TD error gives a zero update: r + gamma' v' = v.
        let h0 = h_eval(&theta, &e, 1.5, 0.2, 0.9, &phi, &phi);
        assert!(h0[0].abs() < 1e-12);
    }

    #[test]
    fn m_of_constant_schedule() {
        let sched = StepSchedule::Constant { alpha: 0.1 };
        assert_eq!(sched.m_of(0, 1.0), 9);
    }

    #[test]
    fn polynomial_schedule_decreasing_divergent() {
        let sched = StepSchedule::Polynomial { a: 1.0, t0: 1.0, beta: 0.5 };
        let mut prev = f64::INFINITY;
        let mut sum = 0.0;
        for t in 0..1000 {
            let a = sched.alpha(t);
            assert!(a > 0.0 && a < prev + 1e-15);
            prev = a;
            sum += a;
        }
        assert!(sum > 60.0); // ~2 sqrt(1001) - 2
    }

    #[test]
    fn slow_decrease_condition_numeric_scan() {
        let sched = StepSchedule::Polynomial { a: 1.0, t0: 1.0, beta: 0.5 };
        for t in [10_000u64, 20_000, 50_000, 100_000] {
            let m = (t as f64).sqrt().floor() as u64;
            assert!(sched.slow_decrease_sup(t, m) <= 0.01, "t = {t}");
        }
    }

    #[test]
    fn piecewise_constant_schedule_shape() {
        let sched = StepSchedule::PiecewiseConstant { a: 0.5, base_len: 10, beta: 1.0 };
        assert_eq!(sched.alpha(0), 0.5);
        assert_eq!(sched.alpha(9), 0.5);
        assert_eq!(sched.alpha(10), 0.25);
        assert_eq!(sched.alpha(29), 0.25);
        assert_abs_diff_eq!(sched.alpha(30), 0.5 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn zero_stepsize_leaves_theta_unchanged() {
        let (mdp, pp) = twostate();
        for variant in [
            Variant::UnconstrainedEtd,
            Variant::ProjectedEtd,
            Variant::ClipTraceEtd,
            Variant::ClipIncrementEtd,
            Variant::OffPolicyTd,
            Variant::ProjectedOffPolicyTd,
        ] {
            let cfg = AlgoConfig {
                variant,
                radius: Some(10.0),
                clip_k: Some(1.0),
                clip_kind: ClipKind::Componentwise,
                perturb_std: 0.0,
                schedule: StepSchedule::Constant { alpha: 0.0 },
                init_e: None,
                init_f: None,
                init_theta: Some(vec![0.5, -0.25]),
                init_state: 0,
            };
            let stepper = Stepper::new(&mdp, &pp, &cfg).unwrap();
            let mut state = stepper.init_state();
            let mut rng = run_rng(1, 0);
            for _ in 0..20 {
                stepper.advance(&mut state, &mut rng, 0.0).unwrap();
            }
            assert_eq!(state.theta[0], 0.5, "{variant:?}");
            assert_eq!(state.theta[1], -0.25);
        }
    }

    #[test]
    fn inactive_constraints_match_unconstrained_bitwise() {
        let (mdp, pp) = twostate();
        let base = AlgoConfig {
            variant: Variant::UnconstrainedEtd,
            radius: None,
            clip_k: None,
            clip_kind: ClipKind::Componentwise,
            perturb_std: 0.0,
            schedule: StepSchedule::Constant { alpha: 0.01 },
            init_e: None,
            init_f: None,
            init_theta: None,
            init_state: 0,
        };
        let run = |cfg: &AlgoConfig| {
            let stepper = Stepper::new(&mdp, &pp, cfg).unwrap();
            let mut state = stepper.init_state();
            let mut rng = run_rng(7, 0);
            for _ in 0..200 {
                stepper.advance(&mut state, &mut rng, 0.01).unwrap();
            }
            state.theta
        };
        let reference = run(&base);
        for variant in [Variant::ProjectedEtd, Variant::ClipTraceEtd, Variant::ClipIncrementEtd] {
            let mut cfg = base.clone();
            cfg.variant = variant;
            cfg.radius = Some(1e6);
            cfg.clip_k = Some(1e6);
            let theta = run(&cfg);
            for i in 0..2 {
                assert_eq!(theta[i].to_bits(), reference[i].to_bits(), "{variant:?}");
            }
        }
    }

    #[test]
    fn three_step_run_matches_scalar_oracle() {
        // Straight-line scalar reimplementation of the recursion, checked
        // against the Stepper on identical sampled transitions.
        let (mdp, pp) = twostate();
        let cfg = AlgoConfig {
            variant: Variant::UnconstrainedEtd,
            radius: None,
            clip_k: None,
            clip_kind: ClipKind::Componentwise,
            perturb_std: 0.0,
            schedule: StepSchedule::Constant { alpha: 0.05 },
            init_e: None,
            init_f: None,
            init_theta: None,
            init_state: 0,
        };
        let stepper = Stepper::new(&mdp, &pp, &cfg).unwrap();
        let mut state = stepper.init_state();
        let mut rng = run_rng(99, 0);
        let mut infos = Vec::new();
        for _ in 0..3 {
            let pre_state = state.s;
            let info = stepper.advance(&mut state, &mut rng, 0.05).unwrap();
            infos.push((pre_state, info));
        }

        // Oracle with plain f64 arithmetic.
        let phi = |s: usize, j: usize| mdp.features[s][j];
        let mut theta = [0.0f64; 2];
        let s0 = 0usize;
        let mut f = mdp.interest[s0];
        let m0 = mdp.lambda[s0] * mdp.interest[s0] + (1.0 - mdp.lambda[s0]) * f;
        let mut e = [m0 * phi(s0, 0), m0 * phi(s0, 1)];
        for (s, info) in &infos {
            let s = *s;
            let s2 = info.next_state;
            let rho = pp.target[s][info.action] / pp.behavior[s][info.action];
            let td = info.reward
                + mdp.gamma[s2] * (phi(s2, 0) * theta[0] + phi(s2, 1) * theta[1])
                - (phi(s, 0) * theta[0] + phi(s, 1) * theta[1]);
            for j in 0..2 {
                theta[j] += 0.05 * e[j] * rho * td;
            }
            let g = mdp.gamma[s2];
            let l = mdp.lambda[s2];
            f = g * rho * f + mdp.interest[s2];
            let m = l * mdp.interest[s2] + (1.0 - l) * f;
            for j in 0..2 {
                e[j] = l * g * rho * e[j] + m * phi(s2, j);
            }
        }
        for j in 0..2 {
            assert_abs_diff_eq!(state.theta[j], theta[j], epsilon = 1e-14);
        }
        assert_abs_diff_eq!(state.f, f, epsilon = 1e-14);
    }

    #[test]
    fn projected_iterates_stay_in_ball() {
        let (mdp, pp) = twostate();
        let cfg = AlgoConfig {
            variant: Variant::ProjectedEtd,
            radius: Some(0.5),
            clip_k: None,
            clip_kind: ClipKind::Componentwise,
            perturb_std: 0.0,
            schedule: StepSchedule::Constant { alpha: 0.5 },
            init_e: None,
            init_f: None,
            init_theta: None,
            init_state: 0,
        };
        let stepper = Stepper::new(&mdp, &pp, &cfg).unwrap();
        let mut state = stepper.init_state();
        let mut rng = run_rng(3, 0);
        for _ in 0..500 {
            stepper.advance(&mut state, &mut rng, 0.5).unwrap();
            assert!(state.theta.norm() <= 0.5 + 1e-12);
        }
    }

    fn play_traces(mdp: &MdpModel, steps: &[(usize, f64)], init_e: DVector<f64>, init_f: f64, k: usize)
        -> (TruncatedTrace, DVector<f64>, f64)
    {
        let mut tt = TruncatedTrace::new(mdp, k, 0, init_e.clone(), init_f);
        let mut e = init_e;
        let mut f = init_f;
        for &(s_new, rho) in steps {
            tt.step(mdp, s_new, rho);
            let (e2, f2, _) = trace_step(mdp, &e, f, s_new, rho);
            e = e2;
            f = f2;
        }
        (tt, e, f)
    }

    #[test]
    fn truncated_equals_exact_for_small_t() {
        let (mdp, _) = twostate();
        let steps = vec![(1usize, 1.2), (0, 0.8), (1, 1.5), (1, 0.6)];
        let (tt, e, f) = play_traces(&mdp, &steps, DVector::from_row_slice(&[0.3, -0.2]), 0.7, 10);
        assert_eq!(tt.f_tilde.to_bits(), f.to_bits());
        for j in 0..2 {
            assert_eq!(tt.e_tilde[j].to_bits(), e[j].to_bits());
        }
    }

    #[test]
    fn truncated_k1_hand_trajectory() {
        // K = 1, three steps: the windowed sums have two terms each.
        let (mdp, _) = twostate();
        let steps = vec![(1usize, 1.5), (0, 0.5), (1, 2.0)];
        let (tt, _, _) = play_traces(&mdp, &steps, DVector::zeros(2), 1.0, 1);
        // Hand evaluation at t = 3 (states: s3 = 1, s2 = 0):
        // F~ = i(s3) + i(s2) rho_2 gamma(s3) = 1 + 1 * 2.0 * 0.9 = 2.8
        assert_abs_diff_eq!(tt.f_tilde, 2.8, epsilon = 1e-12);
        // F~_{2,1} = i(s2) + i(s1) rho_1 gamma(s2) = 1 + 0.5 * 0.9 = 1.45
        // M~_2 = 0.5 + 0.5 * 1.45 = 1.225, M~_3 = 0.5 + 0.5 * 2.8 = 1.9
        // e~ = M~_3 phi(1) + M~_2 phi(0) * beta_3, beta_3 = rho_2 gamma_3 lambda_3 = 2*0.9*0.5 = 0.9
        assert_abs_diff_eq!(tt.e_tilde[0], 1.225 * 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(tt.e_tilde[1], 1.9, epsilon = 1e-12);
    }

    #[test]
    fn truncated_forgets_initial_condition() {
        let (mdp, _) = twostate();
        let k = 2;
        let steps: Vec<(usize, f64)> = vec![
            (1, 1.2), (0, 0.8), (1, 1.5), (1, 0.6), (0, 1.1), (1, 0.9), (0, 1.3),
        ];
        let (tt_a, _, _) = play_traces(&mdp, &steps, DVector::from_row_slice(&[5.0, -5.0]), 9.0, k);
        let (tt_b, _, _) = play_traces(&mdp, &steps, DVector::zeros(2), 0.0, k);
        // t = 7 >= 2K+1 = 5: outputs depend only on the last 2K+1 transitions.
        assert_eq!(tt_a.f_tilde.to_bits(), tt_b.f_tilde.to_bits());
        for j in 0..2 {
            assert_eq!(tt_a.e_tilde[j].to_bits(), tt_b.e_tilde[j].to_bits());
        }
    }

    #[test]
    fn divergence_detected_as_nonfinite() {
        let (mdp, pp) = crate::mdp::baird7();
        let cfg = AlgoConfig {
            variant: Variant::OffPolicyTd,
            radius: None,
            clip_k: None,
            clip_kind: ClipKind::Componentwise,
            perturb_std: 0.0,
            schedule: StepSchedule::Constant { alpha: 0.1 },
            init_e: None,
            init_f: None,
            init_theta: Some(vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 10.0, 1.0]),
            init_state: 0,
        };
        let stepper = Stepper::new(&mdp, &pp, &cfg).unwrap();
        let mut state = stepper.init_state();
        let mut rng = run_rng(0, 0);
        let mut diverged = false;
        for _ in 0..100_000 {
            match stepper.advance(&mut state, &mut rng, 0.1) {
                Ok(_) => {}
                Err(EtdError::NonFinite { .. }) => {
                    diverged = true;
                    break;
                }
                Err(other) => panic!("{other}"),
            }
        }
        assert!(diverged);
    }
}
