use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::Serialize;
use serde_json::json;
use voltguard::controller::EpisodeResult;
use voltguard::scenario::{CaseBundle, Prepared, RunSetup};

use crate::{case, Failure, RunArgs};

#[derive(Debug, Serialize)]
pub struct ViolationSummary {
    pub mistakes: usize,
    pub avg_violation: f64,
    pub max_violation: f64,
}

/// Contents of summary.json.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub case: String,
    pub n: usize,
    pub steps: usize,
    pub dynamics: String,
    pub prior: String,
    pub delta: f64,
    pub seed: u64,
    pub mistakes: usize,
    pub avg_violation: f64,
    pub max_violation: f64,
    pub observed: ViolationSummary,
    pub reset_events: usize,
    pub reset_steps: Vec<usize>,
    pub infeasible_events: usize,
    pub movement_sum: f64,
    pub eta_star: f64,
    pub rho: f64,
    pub diameter: f64,
    pub param_dimension: usize,
    /// `null` when the bound overflows.
    pub mistake_bound: Option<f64>,
    pub settled_at: Option<usize>,
    pub final_model_error: f64,
    pub final_eta_hat: f64,
    pub max_pf_residual: Option<f64>,
    pub estimate_outside_full_set: Option<usize>,
    pub truth_outside_full_set: Option<usize>,
}

impl Summary {
    pub fn new(case: &str, prep: &Prepared, res: &EpisodeResult) -> Self {
        let last = res.steps.last();
        Self {
            case: case.to_string(),
            n: prep.plant.n(),
            steps: res.steps.len(),
            dynamics: prep.episode.dynamics.to_string(),
            prior: prep.prior_mode.to_string(),
            delta: prep.controller.delta,
            seed: prep.seed,
            mistakes: res.metrics.mistakes,
            avg_violation: res.metrics.avg_violation,
            max_violation: res.metrics.max_violation,
            observed: ViolationSummary {
                mistakes: res.observed_metrics.mistakes,
                avg_violation: res.observed_metrics.avg_violation,
                max_violation: res.observed_metrics.max_violation,
            },
            reset_events: res.reset_events,
            reset_steps: res.steps.iter().filter(|s| s.reset).map(|s| s.t).collect(),
            infeasible_events: res.infeasible_events,
            movement_sum: res.movement_sum,
            eta_star: res.eta_star,
            rho: res.rho,
            diameter: res.diameter,
            param_dimension: res.param_dimension,
            mistake_bound: res.mistake_bound.is_finite().then_some(res.mistake_bound),
            settled_at: res.settled_at,
            final_model_error: last.map_or(0.0, |s| s.model_error),
            final_eta_hat: last.map_or(0.0, |s| s.eta_hat),
            max_pf_residual: res.max_pf_residual,
            estimate_outside_full_set: res.estimate_outside_full_set,
            truth_outside_full_set: res.truth_outside_full_set,
        }
    }
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

pub fn write_trace(path: &Path, bundle: &CaseBundle, res: &EpisodeResult) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let labels = &bundle.labels[1..];
    let mut header = vec!["t".to_string()];
    for prefix in ["v", "u", "q"] {
        header.extend(labels.iter().map(|l| format!("{prefix}_{l}")));
    }
    header.extend(
        ["xi", "k", "mistake", "model_error", "eta_hat", "reset", "infeasible", "movement", "pf_residual"]
            .map(String::from),
    );
    w.write_record(&header)?;
    for s in &res.steps {
        let mut row = vec![s.t.to_string()];
        for vec in [&s.v, &s.u, &s.q_c] {
            row.extend(vec.iter().map(|x| x.to_string()));
        }
        row.push(s.xi.to_string());
        row.push(s.k.to_string());
        row.push(flag(s.mistake).into());
        row.push(s.model_error.to_string());
        row.push(s.eta_hat.to_string());
        row.push(flag(s.reset).into());
        row.push(flag(s.infeasible).into());
        row.push(s.movement.to_string());
        row.push(s.pf_residual.map(|r| r.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn version_string() -> String {
    match option_env!("VOLTGUARD_GIT_DESCRIBE") {
        Some(d) => d.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn resolved_config(bundle: &CaseBundle, prep: &Prepared, setup: &RunSetup) -> serde_json::Value {
    let c = &bundle.config;
    json!({
        "v0_kv2": c.v0_kv2,
        "vmin_pu": c.vmin_pu,
        "vmax_pu": c.vmax_pu,
        "qmin_mvar": c.qmin_mvar,
        "qmax_mvar": c.qmax_mvar,
        "pv_weight": c.pv_weight,
        "pu_weight": c.pu_weight,
        "beta": c.beta,
        "delta": prep.controller.delta,
        "epsilon": c.epsilon,
        "eta_bar": c.eta_bar,
        "alpha": c.alpha,
        "prior_mode": prep.prior_mode.to_string(),
        "dynamics": prep.episode.dynamics.to_string(),
        "steps": prep.episode.horizon,
        "subsample_latest": prep.episode.subsample_latest,
        "subsample_random": prep.episode.subsample_random,
        "known_eta": setup.known_eta,
        "slack": format!("{:?}", setup.slack),
        "topology_change": setup.topology_change.as_ref().map(|c| c.to_string()),
        "withheld": setup.withheld,
    })
}

pub fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let bundle = case::load(&args.case)?;
    let mut setup = case::setup(&args.case, args.prior, args.delta, args.seed)?;
    setup.audit_estimate = args.audit;
    setup.audit_truth = args.audit;
    let prep = case::prepare(&bundle, &setup)?;
    let res = case::episode(&prep)?;

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(Failure::input)?;
    let trace = args.out.join("trace.csv");
    let summary = args.out.join("summary.json");
    let manifest = args.out.join("manifest.json");
    write_trace(&trace, &bundle, &res).map_err(Failure::input)?;
    write_json(&summary, &Summary::new(&args.case.case, &prep, &res)).map_err(Failure::input)?;
    let outputs: Vec<PathBuf> = vec![trace, summary, manifest.clone()];
    let m = json!({
        "command": "run",
        "version": version_string(),
        "case": args.case.case,
        "config_file": args.case.config.as_ref().map(|p| p.display().to_string()),
        "config": resolved_config(&bundle, &prep, &setup),
        "seeds": { "case": bundle.config.seed, "initial_estimate": prep.seed, "subsample": prep.episode.seed },
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    write_json(&manifest, &m).map_err(Failure::input)?;
    Ok(())
}
