use std::time::Instant;

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde_json::json;
use voltguard::controller::PriorMode;

use crate::run::{version_string, write_json, Summary};
use crate::{case, Failure, SweepArgs};

struct Cell {
    delta: f64,
    prior: PriorMode,
    seed: u64,
    outcome: Result<Summary, String>,
}

fn list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    let items: Result<Vec<T>, _> = s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(str::parse).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        Ok(_) => Err(Failure::input(anyhow!("empty {what} list"))),
        Err(e) => Err(Failure::input(anyhow!("bad {what} list '{s}': {e}"))),
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let started = Instant::now();
    let bundle = case::load(&args.case)?;
    let deltas: Vec<f64> = match &args.deltas {
        Some(s) => list(s, "delta")?,
        None => vec![bundle.config.delta],
    };
    let mut priors: Vec<PriorMode> = match &args.priors {
        Some(s) => list(s, "prior")?,
        None => vec![bundle.config.prior_mode],
    };
    priors.sort();
    priors.dedup();
    let seeds: Vec<u64> = list(&args.seeds, "seed")?;
    // Validate the shared flags once so input errors are not reported per cell.
    let probe = case::setup(&args.case, Some(priors[0]), Some(deltas[0]), Some(seeds[0]))?;
    case::prepare(&bundle, &probe)?;

    let mut grid: Vec<(f64, PriorMode, u64)> = Vec::new();
    for &d in &deltas {
        for &p in &priors {
            grid.extend(seeds.iter().map(|&s| (d, p, s)));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .context("starting worker pool")
        .map_err(Failure::input)?;
    let cells: Vec<Cell> = pool.install(|| {
        grid.par_iter()
            .map(|&(delta, prior, seed)| {
                let outcome = case::setup(&args.case, Some(prior), Some(delta), Some(seed))
                    .and_then(|s| case::prepare(&bundle, &s))
                    .and_then(|p| case::episode(&p).map(|r| Summary::new(&args.case.case, &p, &r)))
                    .map_err(|f| format!("{:#}", f.error));
                Cell { delta, prior, seed, outcome }
            })
            .collect()
    });

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))
        .map_err(Failure::input)?;
    write_outputs(args, &deltas, &priors, &cells).map_err(Failure::input)?;
    let outputs = ["sweep.csv", "aggregate.csv", "manifest.json"].map(|f| args.out.join(f).display().to_string());
    let m = json!({
        "command": "sweep",
        "version": version_string(),
        "case": args.case.case,
        "config_file": args.case.config.as_ref().map(|p| p.display().to_string()),
        "dynamics": args.case.dynamics.to_string(),
        "steps": args.case.steps,
        "deltas": deltas,
        "priors": priors.iter().map(|p| p.to_string()).collect::<Vec<_>>(),
        "seeds": seeds,
        "outputs": outputs,
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    write_json(&args.out.join("manifest.json"), &m).map_err(Failure::input)?;
    Ok(())
}

fn write_outputs(args: &SweepArgs, deltas: &[f64], priors: &[PriorMode], cells: &[Cell]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(args.out.join("sweep.csv"))?;
    w.write_record([
        "delta", "prior", "seed", "status", "mistakes", "avg_violation", "max_violation", "reset_events",
        "movement_sum", "final_model_error", "error",
    ])?;
    for c in cells {
        let mut row = vec![c.delta.to_string(), c.prior.to_string(), c.seed.to_string()];
        match &c.outcome {
            Ok(s) => row.extend([
                "ok".to_string(),
                s.mistakes.to_string(),
                s.avg_violation.to_string(),
                s.max_violation.to_string(),
                s.reset_events.to_string(),
                s.movement_sum.to_string(),
                s.final_model_error.to_string(),
                String::new(),
            ]),
            Err(e) => {
                row.push("failed".into());
                row.extend(std::iter::repeat_n(String::new(), 6));
                row.push(e.clone());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(args.out.join("aggregate.csv"))?;
    w.write_record([
        "delta", "prior", "cells", "failures", "mistakes_mean", "mistakes_std", "avg_violation_mean",
        "avg_violation_std", "max_violation_mean", "max_violation_std",
    ])?;
    for &d in deltas {
        for &p in priors {
            let group: Vec<&Cell> = cells.iter().filter(|c| c.delta == d && c.prior == p).collect();
            let ok: Vec<&Summary> = group.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
            let stat = |f: fn(&Summary) -> f64| mean_std(&ok.iter().map(|s| f(s)).collect::<Vec<_>>());
            let (mm, ms) = stat(|s| s.mistakes as f64);
            let (am, as_) = stat(|s| s.avg_violation);
            let (xm, xs) = stat(|s| s.max_violation);
            let mut row = vec![d.to_string(), p.to_string(), group.len().to_string(), (group.len() - ok.len()).to_string()];
            row.extend([mm, ms, am, as_, xm, xs].map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
