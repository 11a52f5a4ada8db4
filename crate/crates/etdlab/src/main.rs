use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use serde_json::json;

use etdlab::analysis::{
    emphasis_weights, integrate_mean_ode, linear_system, multistep_bellman, value_function,
    SolutionReport,
};
use etdlab::config::{AnalysisWeighting, ExperimentConfig};
use etdlab::error::{EtdError, Result};
use etdlab::mdp::{policy_matrices, stationary_distribution, validate_assumptions, MdpModel, PolicyPair};
use etdlab::stats::{ensemble_stats, run_ensemble, run_trajectory, EnsembleStats, RunLog};

#[derive(Parser)]
#[command(name = "etdlab", version, about = "Policy-evaluation laboratory for finite MDPs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact fixed-point analysis of a model: operators, key matrix, target.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// One seeded trajectory, logged to CSV.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        thin: Option<u64>,
    },
    /// Parallel ensemble of seeded runs with aggregate statistics.
    Ensemble {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        thin: Option<u64>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long, env = "ETDLAB_JOBS")]
        jobs: Option<usize>,
    },
    /// Assemble plot-ready trend curves from ensemble output directories.
    Report {
        /// Directory containing one or more ensemble output directories.
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}

fn exit_code(e: &EtdError) -> i32 {
    match e {
        EtdError::Config(_) | EtdError::Json(_) | EtdError::WindowOutOfRange { .. } => 2,
        EtdError::InvalidModel(_)
        | EtdError::UnreachableAction { .. }
        | EtdError::NonIrreducible
        | EtdError::SingularSystem(_)
        | EtdError::Inconsistent { .. }
        | EtdError::EmptyEmphasis
        | EtdError::NonFinite { .. } => 3,
        EtdError::Io(_) | EtdError::MissingRuns(_) => 4,
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Analyze { config, out } => cmd_analyze(&config, &out),
        Cmd::Run { config, out, seed, thin } => cmd_run(&config, &out, seed, thin),
        Cmd::Ensemble { config, out, seed, thin, runs, jobs } => {
            cmd_ensemble(&config, &out, seed, thin, runs, jobs)
        }
        Cmd::Report { dir, out } => cmd_report(&dir, out.as_deref()),
    }
}

fn load_model(cfg: &ExperimentConfig) -> Result<(MdpModel, PolicyPair)> {
    let (mdp, pp) = cfg.model.resolve()?;
    mdp.validate()?;
    pp.validate(mdp.n_states, mdp.n_actions)?;
    Ok((mdp, pp))
}

/// Exact solution under the configured state weighting.
fn solve(mdp: &MdpModel, pp: &PolicyPair, weighting: AnalysisWeighting) -> Result<SolutionReport> {
    let ops = multistep_bellman(mdp, pp)?;
    let weights = match weighting {
        AnalysisWeighting::Emphasis => emphasis_weights(mdp, pp, &ops)?,
        AnalysisWeighting::Behavior => {
            let (p, _) = policy_matrices(mdp, &pp.behavior);
            stationary_distribution(&p)?
        }
    };
    Ok(linear_system(mdp, &ops, &weights))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn cmd_analyze(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let hash = cfg.hash()?;
    let (mdp, pp) = load_model(&cfg)?;
    let assumptions = validate_assumptions(&mdp, &pp);
    if !assumptions.support_ok {
        return Err(EtdError::InvalidModel(
            "behavior policy does not cover the target policy's actions".into(),
        ));
    }
    if !assumptions.irreducible {
        return Err(EtdError::NonIrreducible);
    }
    let solution = solve(&mdp, &pp, cfg.weighting)?;
    let mut assumptions = assumptions;
    assumptions.feature_rank_full = solution.feature_rank_on_j1 == mdp.n_features();
    let v_pi = value_function(&mdp, &pp)?;
    fs::create_dir_all(out)?;
    let report = json!({
        "config_hash": hash,
        "weighting": cfg.weighting,
        "assumptions": assumptions,
        "solution": solution,
        "value_function": v_pi.as_slice(),
    });
    fs::write(out.join("analysis.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    if let Some(ode) = &cfg.ode {
        let theta0 = ode
            .theta0
            .as_ref()
            .map(|t| DVector::from_row_slice(t))
            .unwrap_or_else(|| DVector::zeros(mdp.n_features()));
        let path = integrate_mean_ode(
            &solution.c_matrix(),
            &solution.b_vector(),
            &theta0,
            ode.horizon,
            ode.dt,
        );
        let mut csv = String::from("# config_hash=");
        csv.push_str(&hash);
        csv.push('\n');
        csv.push_str("tau");
        for j in 0..mdp.n_features() {
            csv.push_str(&format!(",theta_{j}"));
        }
        csv.push('\n');
        for (tau, theta) in &path {
            csv.push_str(&format!("{tau}"));
            for v in theta.iter() {
                csv.push_str(&format!(",{v}"));
            }
            csv.push('\n');
        }
        fs::write(out.join("ode.csv"), csv)?;
    }
    println!("analysis written to {}", out.display());
    Ok(())
}

fn trajectory_csv(log: &RunLog, hash: &str) -> String {
    let mut csv = format!("# config_hash={hash}\n");
    csv.push_str("t,S_t,F_t,M_t,norm_e");
    for j in 0..log.n {
        csv.push_str(&format!(",theta_{j}"));
    }
    csv.push('\n');
    for i in 0..log.len() {
        csv.push_str(&format!(
            "{},{},{},{},{}",
            log.t[i], log.state[i], log.follow_on[i], log.emphasis[i], log.norm_e[i]
        ));
        for v in log.theta_row(i) {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    csv
}

fn cmd_run(config_path: &Path, out: &Path, seed: Option<u64>, thin: Option<u64>) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let hash = cfg.hash()?;
    let (mdp, pp) = load_model(&cfg)?;
    let mut plan = cfg.require_plan()?.clone();
    if let Some(s) = seed {
        plan.base_seed = s;
    }
    if let Some(t) = thin {
        plan.thin = t;
    }
    let log = run_trajectory(&mdp, &pp, &plan, 0)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("trajectory.csv"), trajectory_csv(&log, &hash))?;
    let sidecar = json!({
        "config_hash": hash,
        "base_seed": plan.base_seed,
        "run_index": 0,
        "thin": plan.thin,
        "diverged": log.diverged,
        "diverged_at": log.diverged_at,
        "clip_activations": log.clip_activations,
        "timestamp": unix_now(),
    });
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&sidecar)? + "\n")?;
    if log.diverged {
        println!("run diverged at step {} (recorded, not an error)", log.diverged_at.unwrap());
    } else {
        println!("run complete: {} logged points", log.len());
    }
    Ok(())
}

/// Aggregate emitted by `ensemble`, one file per output directory.
#[derive(Debug, Serialize, Deserialize)]
struct AggregateReport {
    config_hash: String,
    variant: etdlab::sim::Variant,
    alpha0: f64,
    clip_k: Option<f64>,
    radius: Option<f64>,
    delta: f64,
    horizon: u64,
    base_seed: u64,
    seeds: Vec<u64>,
    theta_star: Option<Vec<f64>>,
    diverged_runs: usize,
    stats: Option<EnsembleStats>,
}

fn cmd_ensemble(
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    thin: Option<u64>,
    runs: Option<usize>,
    jobs: Option<usize>,
) -> Result<()> {
    if let Some(j) = jobs {
        // Ignore failure: the global pool may already exist in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let cfg = ExperimentConfig::load(config_path)?;
    let hash = cfg.hash()?;
    let (mdp, pp) = load_model(&cfg)?;
    let mut plan = cfg.require_plan()?.clone();
    if let Some(s) = seed {
        plan.base_seed = s;
    }
    if let Some(t) = thin {
        plan.thin = t;
    }
    if let Some(r) = runs {
        plan.n_runs = r;
    }
    plan.validate(&mdp)?;
    let logs = run_ensemble(&mdp, &pp, &plan)?;
    fs::create_dir_all(out)?;
    for log in &logs {
        fs::write(
            out.join(format!("run_{:04}.csv", log.run_index)),
            trajectory_csv(log, &hash),
        )?;
    }
    let weighting = if plan.algo.variant.is_td() {
        AnalysisWeighting::Behavior
    } else {
        cfg.weighting
    };
    let solution = solve(&mdp, &pp, weighting).ok();
    let theta_star = solution.as_ref().map(|s| s.theta_star.clone());
    let stats = match &solution {
        Some(sol) if sol.margin_c > 0.0 || sol.subspace.is_some() => {
            let star = sol.theta_star_vector();
            ensemble_stats(&logs, &plan, &star).ok()
        }
        _ => None,
    };
    let diverged_runs = logs.iter().filter(|l| l.diverged).count();
    let aggregate = AggregateReport {
        config_hash: hash,
        variant: plan.algo.variant,
        alpha0: plan.algo.schedule.alpha(0),
        clip_k: plan.algo.clip_k,
        radius: plan.algo.radius,
        delta: plan.delta,
        horizon: plan.horizon,
        base_seed: plan.base_seed,
        seeds: (0..plan.n_runs as u64).collect(),
        theta_star,
        diverged_runs,
        stats,
    };
    fs::write(out.join("aggregate.json"), serde_json::to_string_pretty(&aggregate)? + "\n")?;
    println!("ensemble of {} runs written to {}", plan.n_runs, out.display());
    Ok(())
}

fn read_aggregate(dir: &Path) -> Result<Option<AggregateReport>> {
    let path = dir.join("aggregate.json");
    if !path.is_file() {
        return Ok(None);
    }
    let agg: AggregateReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
    // Per-run files within one ensemble directory must carry the same hash.
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with("run_") && name.ends_with(".csv") {
            let text = fs::read_to_string(entry.path())?;
            let first = text.lines().next().unwrap_or("");
            let found = first.strip_prefix("# config_hash=").unwrap_or("");
            if found != agg.config_hash {
                return Err(EtdError::Config(format!(
                    "mixed config hashes in {}: {} has {}",
                    dir.display(),
                    name,
                    found
                )));
            }
        }
    }
    Ok(Some(agg))
}

fn cmd_report(dir: &Path, out: Option<&Path>) -> Result<()> {
    let out = out.unwrap_or(dir);
    let mut aggregates = Vec::new();
    if let Some(agg) = read_aggregate(dir)? {
        aggregates.push(agg);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        if let Some(agg) = read_aggregate(&sub)? {
            aggregates.push(agg);
        }
    }
    if aggregates.is_empty() {
        return Err(EtdError::MissingRuns(format!(
            "no aggregate.json found under {}",
            dir.display()
        )));
    }
    fs::create_dir_all(out)?;
    // Summary row per ensemble, deterministic order.
    aggregates.sort_by(|a, b| {
        (format!("{:?}", a.variant), a.alpha0, a.clip_k.unwrap_or(f64::INFINITY))
            .partial_cmp(&(format!("{:?}", b.variant), b.alpha0, b.clip_k.unwrap_or(f64::INFINITY)))
            .unwrap()
    });
    let mut summary = String::from(
        "variant,alpha0,clip_k,radius,delta,horizon,diverged_runs,occupation_median,violation_prob,sup_avg_dev_median,kappa,config_hash\n",
    );
    for a in &aggregates {
        let (occ, viol, dev, kappa) = match &a.stats {
            Some(s) => (
                s.occupation_median.to_string(),
                s.violation_prob.to_string(),
                s.sup_avg_deviation_median.to_string(),
                s.kappa.to_string(),
            ),
            None => ("".into(), "".into(), "".into(), "".into()),
        };
        summary.push_str(&format!(
            "{:?},{},{},{},{},{},{},{},{},{},{},{}\n",
            a.variant,
            a.alpha0,
            a.clip_k.map(|k| k.to_string()).unwrap_or_default(),
            a.radius.map(|r| r.to_string()).unwrap_or_default(),
            a.delta,
            a.horizon,
            a.diverged_runs,
            occ,
            viol,
            dev,
            kappa,
            a.config_hash
        ));
    }
    fs::write(out.join("summary.csv"), summary)?;

    // Occupation-vs-stepsize curve per variant (the concentration trend).
    let mut variants: Vec<String> =
        aggregates.iter().map(|a| format!("{:?}", a.variant)).collect();
    variants.sort();
    variants.dedup();
    for variant in &variants {
        let mut rows: Vec<&AggregateReport> = aggregates
            .iter()
            .filter(|a| format!("{:?}", a.variant) == *variant && a.stats.is_some())
            .collect();
        if rows.len() < 2 {
            continue;
        }
        let alphas: Vec<f64> = rows.iter().map(|a| a.alpha0).collect();
        if alphas.windows(2).any(|w| w[0] != w[1]) {
            rows.sort_by(|a, b| b.alpha0.partial_cmp(&a.alpha0).unwrap());
            let mut csv =
                String::from("alpha,occupation_median,violation_prob,violation_lo,violation_hi\n");
            for a in &rows {
                let s = a.stats.as_ref().unwrap();
                csv.push_str(&format!(
                    "{},{},{},{},{}\n",
                    a.alpha0, s.occupation_median, s.violation_prob, s.violation_ci.0, s.violation_ci.1
                ));
            }
            fs::write(out.join(format!("occupation_vs_alpha_{variant}.csv")), csv)?;
        }
        let ks: Vec<Option<f64>> = rows.iter().map(|a| a.clip_k).collect();
        if ks.iter().flatten().count() >= 2 && ks.windows(2).any(|w| w[0] != w[1]) {
            let mut rows = rows.clone();
            rows.sort_by(|a, b| a.clip_k.partial_cmp(&b.clip_k).unwrap());
            let mut csv = String::from("clip_k,sup_avg_dev_median,occupation_median\n");
            for a in rows.iter().filter(|a| a.clip_k.is_some()) {
                let s = a.stats.as_ref().unwrap();
                csv.push_str(&format!(
                    "{},{},{}\n",
                    a.clip_k.unwrap(),
                    s.sup_avg_deviation_median,
                    s.occupation_median
                ));
            }
            fs::write(out.join(format!("bias_vs_clipk_{variant}.csv")), csv)?;
        }
    }
    println!("report written to {}", out.display());
    Ok(())
}
