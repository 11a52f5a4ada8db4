//! Calibration pilots. These are ignored by default; run them explicitly with
//!   cargo test --test pilot -- --ignored --nocapture
//! to reproduce the frozen thresholds used by the acceptance suite.

use etdlab::analysis::{emphasis_weights, linear_system, multistep_bellman};
use etdlab::mdp::{baird7, twostate};
use etdlab::sim::{AlgoConfig, ClipKind, StepSchedule, Variant};
use etdlab::stats::{
    averaged_deviation, elstd_estimate, ensemble_stats, kappa_estimate, median, run_ensemble,
    run_trajectory, truncation_error_curve, ExperimentPlan,
};
use nalgebra::DVector;

fn twostate_solution() -> (etdlab::mdp::MdpModel, etdlab::mdp::PolicyPair, DVector<f64>, f64, f64)
{
    let (mdp, pp) = twostate();
    let ops = multistep_bellman(&mdp, &pp).unwrap();
    let w = emphasis_weights(&mdp, &pp, &ops).unwrap();
    let sol = linear_system(&mdp, &ops, &w);
    let star = sol.theta_star_vector();
    (mdp, pp, star, sol.margin_c, sol.b_vector().norm())
}

fn plan(algo: AlgoConfig, horizon: u64, n_runs: usize, delta: f64) -> ExperimentPlan {
    ExperimentPlan {
        algo,
        horizon,
        burn_in: None,
        n_runs,
        base_seed: 0,
        delta,
        window_m: 100,
        thin: 1,
    }
}

fn projected(alpha: f64, radius: f64) -> AlgoConfig {
    AlgoConfig {
        variant: Variant::ProjectedEtd,
        radius: Some(radius),
        clip_k: None,
        clip_kind: ClipKind::Componentwise,
        perturb_std: 0.0,
        schedule: StepSchedule::Constant { alpha },
        init_e: None,
        init_f: None,
        init_theta: None,
        init_state: 0,
    }
}

#[test]
#[ignore]
fn pilot_elstd_errors() {
    let (mdp, pp, _, _, _) = twostate_solution();
    let ops = multistep_bellman(&mdp, &pp).unwrap();
    let w = emphasis_weights(&mdp, &pp, &ops).unwrap();
    let sol = linear_system(&mdp, &ops, &w);
    let c = sol.c_matrix();
    let b = sol.b_vector();
    for t in [10_000u64, 100_000, 1_000_000] {
        let mut errs = Vec::new();
        for seed in 0..10 {
            let (ch, bh) = elstd_estimate(&mdp, &pp, t, 0, seed).unwrap();
            let ce = (ch - &c).amax() / c.amax();
            let be = (bh - &b).amax() / (b.amax() + 1.0);
            errs.push(ce.max(be));
            if seed == 0 {
                println!("T={t} seed0: C_err={ce:.5} b_err={be:.5}");
            }
        }
        println!("T={t} median joint err = {:.5}", median(&errs));
    }
}

#[test]
#[ignore]
fn pilot_occupation_vs_alpha() {
    let (mdp, pp, star, margin, bnorm) = twostate_solution();
    let delta = 0.1 * star.norm().max(1.0);
    let r_b = 1.5 * bnorm / margin;
    println!("delta={delta:.4} r_B={r_b:.4} |theta*|={:.4}", star.norm());
    for alpha in [1e-2, 3e-3, 1e-3] {
        let p = plan(projected(alpha, r_b), 200_000, 10, delta);
        let logs = run_ensemble(&mdp, &pp, &p).unwrap();
        let stats = ensemble_stats(&logs, &p, &star).unwrap();
        println!(
            "alpha={alpha}: occ_median={:.4} viol={:.3} dev_median={:.4}",
            stats.occupation_median, stats.violation_prob, stats.sup_avg_deviation_median
        );
    }
}

#[test]
#[ignore]
fn pilot_trace_and_increment_magnitudes() {
    let (mdp, pp, _, margin, bnorm) = twostate_solution();
    let r_b = 1.5 * bnorm / margin;
    let p = plan(projected(1e-3, r_b), 200_000, 3, 1.0);
    let logs = run_ensemble(&mdp, &pp, &p).unwrap();
    for log in &logs {
        let max_e = log.norm_e.iter().cloned().fold(0.0, f64::max);
        println!("run {}: max |e|_2 = {max_e:.3}", log.run_index);
    }
}

#[test]
#[ignore]
fn pilot_clip_bias_grid() {
    let (mdp, pp, star, margin, bnorm) = twostate_solution();
    let r_b = 1.5 * bnorm / margin;
    let delta = 0.1 * star.norm().max(1.0);
    for variant in [Variant::ClipTraceEtd, Variant::ClipIncrementEtd] {
        for k in [0.25, 1.0, 4.0, 64.0] {
            let mut algo = projected(1e-3, r_b);
            algo.variant = variant;
            algo.clip_k = Some(k);
            let p = plan(algo, 200_000, 10, delta);
            let logs = run_ensemble(&mdp, &pp, &p).unwrap();
            let devs: Vec<f64> = logs
                .iter()
                .map(|l| {
                    let burn = l.index_at_step(p.burn_in_steps());
                    averaged_deviation(l, &star, burn, l.len() - burn).unwrap()
                })
                .collect();
            let clip_hits: u64 = logs.iter().map(|l| l.clip_activations).sum();
            println!(
                "{variant:?} K={k}: median dev={:.4} clip_hits={clip_hits}",
                median(&devs)
            );
        }
    }
}

#[test]
#[ignore]
fn pilot_perturbed_bound() {
    let (mdp, pp, star, margin, bnorm) = twostate_solution();
    let r_b = 1.5 * bnorm / margin;
    let delta = 0.1 * star.norm().max(1.0);
    let mut algo = projected(1e-3, r_b);
    algo.perturb_std = 1e-3;
    let p = plan(algo, 1_000_000, 1, delta);
    let log = run_trajectory(&mdp, &pp, &p, 0).unwrap();
    let burn = log.index_at_step(p.burn_in_steps());
    let dev = averaged_deviation(&log, &star, log.len() - 1, 1).unwrap();
    let (kappa, se) =
        kappa_estimate(&[log.clone()], &star, delta, p.window_m, burn).unwrap();
    let bound = delta * kappa + 2.0 * r_b * (1.0 - kappa) + 3.0 * se;
    println!("terminal avg dev={dev:.5} kappa={kappa:.5} se={se:.6} bound={bound:.5}");
}

#[test]
#[ignore]
fn pilot_truncation_and_trace_bound() {
    let (mdp, pp) = twostate();
    let mut medians = Vec::new();
    for k in [2usize, 5, 10, 20] {
        let mut errs = Vec::new();
        for seed in 0..10 {
            let curve = truncation_error_curve(&mdp, &pp, 10_000, 0, seed, &[k]).unwrap();
            errs.push(curve[0].1);
        }
        medians.push((k, median(&errs)));
    }
    println!("truncation medians: {medians:?}");

    let p = plan(projected(1e-3, 25.0), 100_000, 200, 1.0);
    let logs = run_ensemble(&mdp, &pp, &p).unwrap();
    let len = logs[0].len();
    let mut worst = 0.0f64;
    for i in 0..len {
        let mean = logs
            .iter()
            .map(|l| l.norm_e[i].hypot(l.follow_on[i]))
            .sum::<f64>()
            / logs.len() as f64;
        worst = worst.max(mean);
    }
    println!("max_t ensemble mean |(e,F)| = {worst:.4}");
}

#[test]
#[ignore]
fn pilot_baird_divergence_and_recovery() {
    let (mdp, pp) = baird7();
    let ops = multistep_bellman(&mdp, &pp).unwrap();
    let w = emphasis_weights(&mdp, &pp, &ops).unwrap();
    let sol = linear_system(&mdp, &ops, &w);
    let star = sol.theta_star_vector();
    let c = sol.effective_margin();
    let r_b = 1.5 * sol.b_vector().norm() / c;
    println!("baird7: subspace margin={c:.5} |b|={:.3} r_B={r_b:.3}", sol.b_vector().norm());

    for alpha in [0.03, 0.01, 0.003] {
        let mut algo = projected(alpha, r_b);
        algo.variant = Variant::OffPolicyTd;
        algo.radius = None;
        let p = plan(algo, 100_000, 5, 1.0);
        let logs = run_ensemble(&mdp, &pp, &p).unwrap();
        let diverged = logs.iter().filter(|l| l.diverged).count();
        println!("TD alpha={alpha}: {diverged}/5 diverged");
    }

    for alpha in [1e-4, 3e-5, 1e-5] {
        let p = plan(projected(alpha, r_b), 200_000, 5, 1.0);
        let logs = run_ensemble(&mdp, &pp, &p).unwrap();
        let dists: Vec<f64> = logs
            .iter()
            .map(|l| {
                let burn = l.index_at_step(p.burn_in_steps());
                let rows: Vec<f64> = (burn..l.len())
                    .map(|i| {
                        l.theta_row(i)
                            .iter()
                            .zip(star.iter())
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .collect();
                median(&rows)
            })
            .collect();
        println!("ETD alpha={alpha}: median post-burn dist per run = {dists:?}");
    }
}
