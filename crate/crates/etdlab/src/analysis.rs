//! Closed-form computation of the model-implied quantities: multistep Bellman
//! operators, emphasis weights, the linear system C theta + b = 0 and its
//! solution, definiteness diagnostics, the emphasized-subspace structure in
//! the rank-deficient case, and mean-ODE integration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{EtdError, Result};
use crate::mdp::{policy_matrices, stationary_distribution, MdpModel, PolicyPair};

/// Emphasis entries this close to zero are treated as exactly zero when
/// forming the emphasized-state set.
const EMPHASIS_CLAMP: f64 = 1e-12;
/// Relative singular-value threshold for numerical rank decisions.
const RANK_RTOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct BellmanOperators {
    /// Substochastic matrix of the multistep Bellman operator.
    pub p_lambda: DMatrix<f64>,
    /// Multistep reward vector.
    pub r_lambda: DVector<f64>,
    /// Exact value function of the target policy.
    pub v_pi: DVector<f64>,
}

/// Ground truth for the projected Bellman equation in theta-space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolutionReport {
    /// Diagonal of the emphasis matrix, one entry per state.
    pub emphasis: Vec<f64>,
    pub c: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub theta_star: Vec<f64>,
    /// Tight constant c with theta^T C theta <= -c |theta|^2, i.e. the
    /// negated largest eigenvalue of the symmetric part of C. Zero or
    /// negative when C is only semidefinite.
    pub margin_c: f64,
    /// |b|/margin_c, the ball-radius threshold; present only when C is
    /// negative definite.
    pub radius_threshold: Option<f64>,
    pub emphasized_states: Vec<usize>,
    pub feature_rank_on_j1: usize,
    /// Present when the emphasized features do not span theta-space.
    pub subspace: Option<SubspaceReport>,
}

impl SolutionReport {
    /// The stability constant governing the ball-radius rule: the full-space
    /// margin when C is negative definite, otherwise the margin restricted to
    /// the emphasized-feature span.
    pub fn effective_margin(&self) -> f64 {
        match &self.subspace {
            Some(sub) => sub.subspace_margin,
            None => self.margin_c,
        }
    }
}

impl SolutionReport {
    pub fn c_matrix(&self) -> DMatrix<f64> {
        let n = self.b.len();
        DMatrix::from_fn(n, n, |i, j| self.c[i][j])
    }

    pub fn b_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.b)
    }

    pub fn theta_star_vector(&self) -> DVector<f64> {
        DVector::from_row_slice(&self.theta_star)
    }
}

/// Structure of C restricted to the emphasized states (the rank-deficient
/// analysis).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceReport {
    pub j1: Vec<usize>,
    pub j0: Vec<usize>,
    pub g_hat: Vec<Vec<f64>>,
    pub q_hat: Vec<Vec<f64>>,
    pub m_hat_diag: Vec<f64>,
    /// Smallest eigenvalue of the symmetric part of G_hat.
    pub pd_margin: f64,
    /// Orthonormal basis (as rows) of span{phi(s) : s in J1}.
    pub subspace_basis: Vec<Vec<f64>>,
    /// Definiteness margin of -C restricted to the emphasized-feature span.
    pub subspace_margin: f64,
}

impl SubspaceReport {
    /// Basis as an n x k matrix with orthonormal columns.
    pub fn basis_matrix(&self) -> DMatrix<f64> {
        let k = self.subspace_basis.len();
        let n = self.subspace_basis.first().map_or(0, |v| v.len());
        DMatrix::from_fn(n, k, |i, j| self.subspace_basis[j][i])
    }
}

fn solve_lu(a: DMatrix<f64>, rhs: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    a.lu()
        .solve(rhs)
        .ok_or_else(|| EtdError::SingularSystem(what.to_string()))
}

fn solve_lu_vec(a: DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    a.lu()
        .solve(rhs)
        .ok_or_else(|| EtdError::SingularSystem(what.to_string()))
}

/// v_pi as the solution of v = r_pi + P_pi Gamma v.
pub fn value_function(mdp: &MdpModel, pp: &PolicyPair) -> Result<DVector<f64>> {
    let (p_pi, r_pi) = policy_matrices(mdp, &pp.target);
    let n = mdp.n_states;
    let a = DMatrix::<f64>::identity(n, n) - p_pi * mdp.gamma_diag();
    solve_lu_vec(a, &r_pi, "I - P_pi Gamma")
}

/// The multistep operator pair: P^lambda = I - (I - P_pi Gamma Lambda)^{-1}
/// (I - P_pi Gamma) and r^lambda = (I - P_pi Gamma Lambda)^{-1} r_pi.
pub fn multistep_bellman(mdp: &MdpModel, pp: &PolicyPair) -> Result<BellmanOperators> {
    let (p_pi, r_pi) = policy_matrices(mdp, &pp.target);
    let n = mdp.n_states;
    let eye = DMatrix::<f64>::identity(n, n);
    let pg = &p_pi * mdp.gamma_diag();
    let pgl = &pg * mdp.lambda_diag();
    let a = &eye - &pgl;
    let x = solve_lu(a.clone(), &(&eye - &pg), "I - P_pi Gamma Lambda")?;
    let p_lambda = &eye - &x;
    let r_lambda = solve_lu_vec(a, &r_pi, "I - P_pi Gamma Lambda")?;
    let v_pi = solve_lu_vec(&eye - &pg, &r_pi, "I - P_pi Gamma")?;
    Ok(BellmanOperators { p_lambda, r_lambda, v_pi })
}

/// Interest-weighted steady-state vector d_{pi^o,i}.
pub fn behavior_interest_weights(mdp: &MdpModel, pp: &PolicyPair) -> Result<DVector<f64>> {
    let (p_behavior, _) = policy_matrices(mdp, &pp.behavior);
    let d = stationary_distribution(&p_behavior)?;
    Ok(DVector::from_fn(mdp.n_states, |s, _| d[s] * mdp.interest[s]))
}

/// Diagonal of the emphasis matrix: solves the row system
/// diag(M) = d_{pi^o,i}^T (I - P^lambda)^{-1}. Tiny negative round-off is
/// clamped to exactly zero.
pub fn emphasis_weights(mdp: &MdpModel, pp: &PolicyPair, ops: &BellmanOperators) -> Result<DVector<f64>> {
    let d_i = behavior_interest_weights(mdp, pp)?;
    let n = mdp.n_states;
    let a_t = (DMatrix::<f64>::identity(n, n) - &ops.p_lambda).transpose();
    let mut m = solve_lu_vec(a_t, &d_i, "I - P^lambda (transposed)")?;
    for v in m.iter_mut() {
        if v.abs() < EMPHASIS_CLAMP {
            *v = 0.0;
        } else if *v < 0.0 {
            return Err(EtdError::SingularSystem(format!(
                "emphasis weight went negative ({v:.3e})"
            )));
        }
    }
    Ok(m)
}

fn symmetric_part_eigs(c: &DMatrix<f64>) -> DVector<f64> {
    let sym = (c + c.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues
}

/// Assembles C, b and the solution diagnostics from the operators and an
/// emphasis-style weighting vector.
pub fn linear_system(mdp: &MdpModel, ops: &BellmanOperators, emphasis: &DVector<f64>) -> SolutionReport {
    let n_states = mdp.n_states;
    let phi = mdp.feature_matrix();
    let m_bar = DMatrix::from_diagonal(emphasis);
    let eye = DMatrix::<f64>::identity(n_states, n_states);
    let c = -(phi.transpose() * &m_bar * (&eye - &ops.p_lambda) * &phi);
    let b = phi.transpose() * &m_bar * &ops.r_lambda;
    let n = mdp.n_features();

    let margin_c = -symmetric_part_eigs(&c).max();
    let emphasized_states: Vec<usize> = (0..n_states).filter(|&s| emphasis[s] > 0.0).collect();

    let feature_rank_on_j1 = if emphasized_states.is_empty() {
        0
    } else {
        let phi1 = DMatrix::from_fn(emphasized_states.len(), n, |i, j| {
            mdp.features[emphasized_states[i]][j]
        });
        let svd = phi1.svd(false, false);
        let smax = svd.singular_values.max();
        if smax == 0.0 { 0 } else { svd.rank(RANK_RTOL * smax) }
    };

    let radius_threshold = if margin_c > 0.0 { Some(b.norm() / margin_c) } else { None };

    let subspace = if feature_rank_on_j1 < n && !emphasized_states.is_empty() {
        subspace_from_parts(mdp, ops, emphasis, &emphasized_states, &c).ok()
    } else {
        None
    };
    let theta_star = if emphasized_states.is_empty() {
        DVector::zeros(n)
    } else {
        solve_theta_star(&c, &b, subspace.as_ref()).unwrap_or_else(|_| DVector::zeros(n))
    };

    SolutionReport {
        emphasis: emphasis.iter().copied().collect(),
        c: (0..n).map(|i| (0..n).map(|j| c[(i, j)]).collect()).collect(),
        b: b.iter().copied().collect(),
        theta_star: theta_star.iter().copied().collect(),
        margin_c,
        radius_threshold,
        emphasized_states,
        feature_rank_on_j1,
        subspace,
    }
}

/// Solves C theta + b = 0. In the negative definite case this is a direct
/// solve; in the rank-deficient case the solution is restricted to the
/// emphasized-feature span via the orthonormal subspace basis, which picks
/// the minimal-norm representative.
pub fn solve_theta_star(
    c: &DMatrix<f64>,
    b: &DVector<f64>,
    subspace: Option<&SubspaceReport>,
) -> Result<DVector<f64>> {
    match subspace {
        None => {
            let theta = solve_lu_vec(c.clone(), &(-b), "C")?;
            let residual = (c * &theta + b).amax();
            if residual > 1e-9 * (1.0 + b.amax()) {
                return Err(EtdError::Inconsistent { residual });
            }
            Ok(theta)
        }
        Some(sub) => {
            let u = sub.basis_matrix();
            // b must lie in range(C) = span of the basis.
            let b_perp = b - &u * (u.transpose() * b);
            if b_perp.amax() > 1e-9 * (1.0 + b.amax()) {
                return Err(EtdError::Inconsistent { residual: b_perp.amax() });
            }
            let c_red = u.transpose() * c * &u;
            let rhs = -(u.transpose() * b);
            let y = solve_lu_vec(c_red, &rhs, "C restricted to emphasized span")?;
            let theta = &u * y;
            let residual_in_span = (u.transpose() * (c * &theta + b)).amax();
            if residual_in_span > 1e-9 * (1.0 + b.amax()) {
                return Err(EtdError::Inconsistent { residual: residual_in_span });
            }
            Ok(theta)
        }
    }
}

fn subspace_from_parts(
    mdp: &MdpModel,
    ops: &BellmanOperators,
    emphasis: &DVector<f64>,
    j1: &[usize],
    c: &DMatrix<f64>,
) -> Result<SubspaceReport> {
    if j1.is_empty() {
        return Err(EtdError::EmptyEmphasis);
    }
    let n = mdp.n_features();
    let k1 = j1.len();
    let j0: Vec<usize> = (0..mdp.n_states).filter(|s| !j1.contains(s)).collect();

    let q_hat = DMatrix::from_fn(k1, k1, |i, j| ops.p_lambda[(j1[i], j1[j])]);
    let m_hat: Vec<f64> = j1.iter().map(|&s| emphasis[s]).collect();
    let g_hat = DMatrix::from_diagonal(&DVector::from_row_slice(&m_hat))
        * (DMatrix::<f64>::identity(k1, k1) - &q_hat);
    let pd_margin = symmetric_part_eigs(&g_hat).min();

    // Orthonormal basis of span{phi(s) : s in J1} from the SVD of Phi_1^T.
    let phi1_t = DMatrix::from_fn(n, k1, |i, j| mdp.features[j1[j]][i]);
    let svd = phi1_t.clone().svd(true, false);
    let smax = svd.singular_values.max();
    let rank = if smax == 0.0 { 0 } else { svd.rank(RANK_RTOL * smax) };
    let u_full = svd.u.ok_or_else(|| EtdError::SingularSystem("SVD of Phi_1".into()))?;
    let basis: Vec<Vec<f64>> = (0..rank).map(|j| u_full.column(j).iter().copied().collect()).collect();

    let subspace_margin = if rank == 0 {
        0.0
    } else {
        let u = DMatrix::from_fn(n, rank, |i, j| basis[j][i]);
        let c_red = u.transpose() * c * &u;
        -symmetric_part_eigs(&c_red).max()
    };

    Ok(SubspaceReport {
        j1: j1.to_vec(),
        j0,
        g_hat: (0..k1).map(|i| (0..k1).map(|j| g_hat[(i, j)]).collect()).collect(),
        q_hat: (0..k1).map(|i| (0..k1).map(|j| q_hat[(i, j)]).collect()).collect(),
        m_hat_diag: m_hat,
        pd_margin,
        subspace_basis: basis,
        subspace_margin,
    })
}

/// Emphasized-subspace structure: Q_hat, G_hat = M_hat (I - Q_hat), its
/// definiteness margin, and an orthonormal basis of the emphasized-feature
/// span together with the margin of -C on that span.
pub fn subspace_analysis(
    mdp: &MdpModel,
    ops: &BellmanOperators,
    emphasis: &DVector<f64>,
) -> Result<SubspaceReport> {
    let j1: Vec<usize> = (0..mdp.n_states).filter(|&s| emphasis[s] > 0.0).collect();
    if j1.is_empty() {
        return Err(EtdError::EmptyEmphasis);
    }
    let report = linear_system(mdp, ops, emphasis);
    subspace_from_parts(mdp, ops, emphasis, &j1, &report.c_matrix())
}

/// Fixed-step RK4 integration of x' = Cx + b from theta0, sampling the path
/// at every step.
pub fn integrate_mean_ode(
    c: &DMatrix<f64>,
    b: &DVector<f64>,
    theta0: &DVector<f64>,
    horizon: f64,
    dt: f64,
) -> Vec<(f64, DVector<f64>)> {
    let f = |x: &DVector<f64>| c * x + b;
    let steps = (horizon / dt).round() as usize;
    let mut x = theta0.clone();
    let mut path = Vec::with_capacity(steps + 1);
    path.push((0.0, x.clone()));
    for k in 0..steps {
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * (dt / 2.0)));
        let k3 = f(&(&x + &k2 * (dt / 2.0)));
        let k4 = f(&(&x + &k3 * dt));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        path.push(((k + 1) as f64 * dt, x.clone()));
    }
    path
}
