use std::path::Path;

use anyhow::{anyhow, Context};
use voltguard::controller::{run_episode, ControllerError, EpisodeResult, PriorMode};
use voltguard::scenario::{self, CaseBundle, Prepared, RunSetup, SynthSpec, TopologyChange};

use crate::{CaseArgs, Failure};

pub fn load(args: &CaseArgs) -> Result<CaseBundle, Failure> {
    let mut bundle = match args.case.strip_prefix("synth:") {
        Some(spec) => {
            let spec: SynthSpec = spec.parse().map_err(Failure::input)?;
            scenario::synth_case(&spec).map_err(Failure::input)?
        }
        None => {
            let dir = Path::new(&args.case);
            if !dir.is_dir() {
                return Err(Failure::input(anyhow!("case {} is neither a directory nor synth:...", args.case)));
            }
            scenario::load_case_dir(dir).map_err(Failure::input)?
        }
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::input)?;
        bundle.config = bundle.config.parse_over(&text, &path.display().to_string()).map_err(Failure::input)?;
    }
    Ok(bundle)
}

pub fn setup(args: &CaseArgs, prior: Option<PriorMode>, delta: Option<f64>, seed: Option<u64>) -> Result<RunSetup, Failure> {
    let topology_change = match &args.topology_change {
        Some(s) => Some(s.parse::<TopologyChange>().map_err(Failure::input)?),
        None => None,
    };
    let withheld = match &args.partial_control {
        Some(s) => s.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect(),
        None => Vec::new(),
    };
    Ok(RunSetup {
        dynamics: args.dynamics,
        prior,
        steps: args.steps,
        seed,
        delta,
        topology_change,
        withheld,
        known_eta: args.known_eta,
        slack: args.slack.into(),
        ..RunSetup::default()
    })
}

pub fn prepare(bundle: &CaseBundle, setup: &RunSetup) -> Result<Prepared, Failure> {
    scenario::prepare(bundle, setup).map_err(|e| match e {
        scenario::ScenarioError::Controller(c) if c.is_solver_failure() => Failure::solver(c),
        other => Failure::input(other),
    })
}

pub fn episode(p: &Prepared) -> Result<EpisodeResult, Failure> {
    run_episode(&p.plant, &p.controller, &p.prior, &p.initial, &p.episode).map_err(|e: ControllerError| {
        if e.is_solver_failure() {
            Failure::solver(e)
        } else {
            Failure::input(e)
        }
    })
}
