//! Case files, synthetic feeders and perturbations.
//!
//! A case is an edge list, an injection series and a flat `key = value`
//! configuration. Bus labels in the files are arbitrary strings and are
//! remapped to `0..=n`; the substation is the one label that never appears
//! as a child. Units are kV² for squared voltages, MW and MVar for
//! injections and Ω for impedances.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::controller::{prior_for, ControllerError, Dynamics, EpisodeConfig, Plant, PriorMode};
use crate::geometry::{ModelEstimate, VparBox};
use crate::grid::{
    build_network, compute_sensitivity, random_initial_model, GridError, PriorSpec, RadialNetwork,
    SensitivityModel,
};
use crate::oracle::{box_condition_holds, ControllerConfig, OracleError, SlackPolicy};

pub const EDGE_FILE: &str = "edges.csv";
pub const SERIES_FILE: &str = "series.csv";
pub const CONFIG_FILE: &str = "case.conf";
pub const EDGE_HEADER: [&str; 5] = ["from", "to", "r_ohm", "x_ohm", "controllable"];
/// Padding (kV²) around the uncontrolled nonlinear voltages.
pub const DISTFLOW_VPAR_PADDING: f64 = 0.5;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{file} line {line}: {message}")]
    Parse { file: String, line: u64, message: String },
    #[error("series is missing column {0}")]
    MissingColumn(String),
    #[error("series has unexpected column {0}")]
    UnexpectedColumn(String),
    #[error("unknown bus label {0}")]
    UnknownBus(String),
    #[error("invalid network: {0}")]
    Network(String),
    #[error("invalid topology change: {0}")]
    Topology(String),
    #[error("invalid case: {0}")]
    Invalid(String),
    #[error("assumption check failed: {0}")]
    Assumption(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

fn io_err(path: &Path, e: impl fmt::Display) -> ScenarioError {
    ScenarioError::Io { path: path.display().to_string(), message: e.to_string() }
}

fn csv_err(file: &str, e: csv::Error) -> ScenarioError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    ScenarioError::Parse { file: file.to_string(), line, message: e.to_string() }
}

/// Scalar settings of a case. Voltage limits are per unit of the nominal
/// voltage magnitude, so `v_min = vmin_pu^2 * v0_kv2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseConfig {
    pub v0_kv2: f64,
    pub vmin_pu: f64,
    pub vmax_pu: f64,
    pub qmin_mvar: f64,
    pub qmax_mvar: f64,
    pub pv_weight: f64,
    pub pu_weight: f64,
    pub beta: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub eta_bar: f64,
    pub alpha: f64,
    pub prior_mode: PriorMode,
    pub seed: u64,
}

impl Default for CaseConfig {
    fn default() -> Self {
        Self {
            v0_kv2: 144.0,
            vmin_pu: 0.95,
            vmax_pu: 1.05,
            qmin_mvar: -0.24,
            qmax_mvar: 0.24,
            pv_weight: 0.1,
            pu_weight: 10.0,
            beta: 100.0,
            delta: 20.0,
            epsilon: 0.1,
            eta_bar: 10.0,
            alpha: 1.0,
            prior_mode: PriorMode::Unknown,
            seed: 0,
        }
    }
}

impl CaseConfig {
    pub fn v_min(&self) -> f64 {
        self.vmin_pu * self.vmin_pu * self.v0_kv2
    }

    pub fn v_max(&self) -> f64 {
        self.vmax_pu * self.vmax_pu * self.v0_kv2
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str, file: &str) -> Result<Self, ScenarioError> {
        Self::default().parse_over(text, file)
    }

    /// Like [`CaseConfig::parse`] but keys override `self`.
    pub fn parse_over(&self, text: &str, file: &str) -> Result<Self, ScenarioError> {
        let mut cfg = self.clone();
        for (k, raw) in text.lines().enumerate() {
            let line = (k + 1) as u64;
            let err = |message: String| ScenarioError::Parse { file: file.to_string(), line, message };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(err(format!("expected key = value, got '{content}'")));
            };
            let (key, value) = (key.trim(), value.trim());
            let num = || value.parse::<f64>().map_err(|_| err(format!("{key}: '{value}' is not a number")));
            match key {
                "v0_kv2" => cfg.v0_kv2 = num()?,
                "vmin_pu" => cfg.vmin_pu = num()?,
                "vmax_pu" => cfg.vmax_pu = num()?,
                "qmin_mvar" => cfg.qmin_mvar = num()?,
                "qmax_mvar" => cfg.qmax_mvar = num()?,
                "pv_weight" => cfg.pv_weight = num()?,
                "pu_weight" => cfg.pu_weight = num()?,
                "beta" => cfg.beta = num()?,
                "delta" => cfg.delta = num()?,
                "epsilon" => cfg.epsilon = num()?,
                "eta_bar" => cfg.eta_bar = num()?,
                "alpha" => cfg.alpha = num()?,
                "prior_mode" => cfg.prior_mode = value.parse().map_err(err)?,
                "seed" => {
                    cfg.seed = value.parse().map_err(|_| err(format!("seed: '{value}' is not an integer")))?
                }
                _ => return Err(err(format!("unknown key '{key}'"))),
            }
        }
        cfg.validate().map_err(|m| ScenarioError::Parse { file: file.to_string(), line: 0, message: m })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.v0_kv2 > 0.0) {
            return Err("v0_kv2 must be positive".into());
        }
        if !(0.0 < self.vmin_pu && self.vmin_pu < self.vmax_pu) {
            return Err("need 0 < vmin_pu < vmax_pu".into());
        }
        if !(self.qmin_mvar <= self.qmax_mvar) {
            return Err("qmin_mvar exceeds qmax_mvar".into());
        }
        if !(self.alpha >= 0.0) {
            return Err("alpha must be nonnegative".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "v0_kv2 = {}\nvmin_pu = {}\nvmax_pu = {}\nqmin_mvar = {}\nqmax_mvar = {}\n\
             pv_weight = {}\npu_weight = {}\nbeta = {}\ndelta = {}\nepsilon = {}\n\
             eta_bar = {}\nalpha = {}\nprior_mode = {}\nseed = {}\n",
            self.v0_kv2,
            self.vmin_pu,
            self.vmax_pu,
            self.qmin_mvar,
            self.qmax_mvar,
            self.pv_weight,
            self.pu_weight,
            self.beta,
            self.delta,
            self.epsilon,
            self.eta_bar,
            self.alpha,
            self.prior_mode,
            self.seed,
        )
    }
}

/// A feeder with its injection series and settings.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseBundle {
    pub network: RadialNetwork,
    /// File label of each bus; `labels[0]` is the substation.
    pub labels: Vec<String>,
    pub p: Vec<DVector<f64>>,
    pub q_e: Vec<DVector<f64>>,
    pub config: CaseConfig,
}

impl CaseBundle {
    pub fn new(
        network: RadialNetwork,
        labels: Vec<String>,
        p: Vec<DVector<f64>>,
        q_e: Vec<DVector<f64>>,
        config: CaseConfig,
    ) -> Result<Self, ScenarioError> {
        let n = network.n();
        if labels.len() != n + 1 {
            return Err(ScenarioError::Invalid(format!("{} labels for {} buses", labels.len(), n + 1)));
        }
        if labels.iter().collect::<HashSet<_>>().len() != labels.len() {
            return Err(ScenarioError::Invalid("bus labels are not unique".into()));
        }
        if p.len() != q_e.len() {
            return Err(ScenarioError::Invalid("p and q_e series differ in length".into()));
        }
        if p.is_empty() {
            return Err(ScenarioError::Invalid("series has no rows".into()));
        }
        if p.iter().chain(&q_e).any(|v| v.len() != n) {
            return Err(ScenarioError::Invalid("series width differs from bus count".into()));
        }
        config.validate().map_err(ScenarioError::Invalid)?;
        Ok(Self { network, labels, p, q_e, config })
    }

    pub fn n(&self) -> usize {
        self.network.n()
    }

    /// Number of series rows.
    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// Internal index of a file label.
    pub fn bus(&self, label: &str) -> Result<usize, ScenarioError> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| ScenarioError::UnknownBus(label.into()))
    }

    pub fn sensitivity(&self) -> SensitivityModel {
        compute_sensitivity(&self.network)
    }

    /// `max_t ||R dp(t) + X dq_e(t)||_inf` over the whole series.
    pub fn eta_star(&self) -> f64 {
        let m = self.sensitivity();
        (1..self.len())
            .map(|t| (&m.r * (&self.p[t] - &self.p[t - 1]) + &m.x * (&self.q_e[t] - &self.q_e[t - 1])).amax())
            .fold(0.0, f64::max)
    }
}

struct EdgeRow {
    from: String,
    to: String,
    r: f64,
    x: f64,
    controllable: bool,
    line: u64,
}

fn read_edges(reader: impl Read, file: &str) -> Result<Vec<EdgeRow>, ScenarioError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_err(file, e))?.clone();
    if header.iter().collect::<Vec<_>>() != EDGE_HEADER {
        return Err(ScenarioError::Parse {
            file: file.into(),
            line: 1,
            message: format!("header must be {}", EDGE_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(file, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let err = |message: String| ScenarioError::Parse { file: file.into(), line, message };
        let num = |k: usize| rec[k].parse::<f64>().map_err(|_| err(format!("{}: '{}' is not a number", EDGE_HEADER[k], &rec[k])));
        let controllable = match &rec[4] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("controllable must be 0 or 1, got '{other}'"))),
        };
        rows.push(EdgeRow { from: rec[0].to_string(), to: rec[1].to_string(), r: num(2)?, x: num(3)?, controllable, line });
    }
    Ok(rows)
}

fn label_grid_error(e: GridError, labels: &[String]) -> ScenarioError {
    let name = |b: usize| labels.get(b).cloned().unwrap_or_else(|| b.to_string());
    ScenarioError::Network(match e {
        GridError::Cycle(b) => format!("cycle through bus {}", name(b)),
        GridError::Disconnected(b) => format!("bus {} is not reachable from the substation", name(b)),
        GridError::DuplicateChild(b) => format!("bus {} has more than one parent", name(b)),
        GridError::NonPositiveImpedance { bus, r, x } => {
            format!("line into bus {} has nonpositive impedance (r={r}, x={x})", name(bus))
        }
        other => other.to_string(),
    })
}

fn assemble(rows: &[EdgeRow], file: &str) -> Result<(RadialNetwork, Vec<String>), ScenarioError> {
    if rows.is_empty() {
        return Err(ScenarioError::Network("edge list is empty".into()));
    }
    let children: HashSet<&str> = rows.iter().map(|r| r.to.as_str()).collect();
    let roots: Vec<&str> = rows
        .iter()
        .map(|r| r.from.as_str())
        .filter(|f| !children.contains(f))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if roots.len() != 1 {
        return Err(ScenarioError::Network(format!("expected one substation, found {}: {:?}", roots.len(), roots)));
    }
    let mut labels = vec![roots[0].to_string()];
    let mut index: HashMap<String, usize> = HashMap::from([(roots[0].to_string(), 0)]);
    for row in rows {
        if index.contains_key(&row.to) {
            return Err(ScenarioError::Parse {
                file: file.into(),
                line: row.line,
                message: format!("bus {} has more than one parent", row.to),
            });
        }
        index.insert(row.to.clone(), labels.len());
        labels.push(row.to.clone());
    }
    let edges: Vec<(usize, usize)> = rows.iter().map(|r| (index[&r.from], index[&r.to])).collect();
    let r: Vec<f64> = rows.iter().map(|r| r.r).collect();
    let x: Vec<f64> = rows.iter().map(|r| r.x).collect();
    let ctrl: Vec<usize> = rows.iter().filter(|r| r.controllable).map(|r| index[&r.to]).collect();
    let net = build_network(&edges, &r, &x, &ctrl).map_err(|e| label_grid_error(e, &labels))?;
    Ok((net, labels))
}

type Series = Vec<DVector<f64>>;

fn read_series(
    reader: impl Read,
    file: &str,
    labels: &[String],
) -> Result<(Series, Series), ScenarioError> {
    let n = labels.len() - 1;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_err(file, e))?.clone();
    let mut col: HashMap<&str, usize> = HashMap::new();
    for (k, h) in header.iter().enumerate() {
        if col.insert(h, k).is_some() {
            return Err(ScenarioError::Parse { file: file.into(), line: 1, message: format!("duplicate column {h}") });
        }
    }
    let names: Vec<String> = labels[1..]
        .iter()
        .map(|l| format!("p_{l}"))
        .chain(labels[1..].iter().map(|l| format!("qe_{l}")))
        .collect();
    let mut at = Vec::with_capacity(2 * n);
    for name in &names {
        at.push(*col.get(name.as_str()).ok_or_else(|| ScenarioError::MissingColumn(name.clone()))?);
    }
    if let Some(extra) = header.iter().find(|h| !names.iter().any(|n| n == h)) {
        return Err(ScenarioError::UnexpectedColumn(extra.to_string()));
    }
    let (mut p, mut q) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(file, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let mut vals = Vec::with_capacity(2 * n);
        for (k, &c) in at.iter().enumerate() {
            let v = rec[c].parse::<f64>().map_err(|_| ScenarioError::Parse {
                file: file.into(),
                line,
                message: format!("{}: '{}' is not a number", names[k], &rec[c]),
            })?;
            vals.push(v);
        }
        p.push(DVector::from_column_slice(&vals[..n]));
        q.push(DVector::from_column_slice(&vals[n..]));
    }
    Ok((p, q))
}

fn open(path: &Path) -> Result<File, ScenarioError> {
    File::open(path).map_err(|e| io_err(path, e))
}

/// Loads a case from its three files. Without a config file the defaults
/// apply.
pub fn load_case(edge_csv: &Path, series_csv: &Path, config: Option<&Path>) -> Result<CaseBundle, ScenarioError> {
    let ef = edge_csv.display().to_string();
    let (network, labels) = assemble(&read_edges(open(edge_csv)?, &ef)?, &ef)?;
    let (p, q_e) = read_series(open(series_csv)?, &series_csv.display().to_string(), &labels)?;
    let config = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            CaseConfig::parse(&text, &path.display().to_string())?
        }
        None => CaseConfig::default(),
    };
    CaseBundle::new(network, labels, p, q_e, config)
}

/// Loads `edges.csv`, `series.csv` and, if present, `case.conf` from `dir`.
pub fn load_case_dir(dir: &Path) -> Result<CaseBundle, ScenarioError> {
    let conf = dir.join(CONFIG_FILE);
    load_case(&dir.join(EDGE_FILE), &dir.join(SERIES_FILE), conf.exists().then_some(conf.as_path()))
}

fn write_csv(path: &Path, rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes the case in the formats [`load_case`] reads. Numbers are written
/// in shortest round-trip form, so loading reproduces them exactly.
pub fn save_case(bundle: &CaseBundle, edge_csv: &Path, series_csv: &Path, config: &Path) -> Result<(), ScenarioError> {
    let net = &bundle.network;
    let l = &bundle.labels;
    let header = EDGE_HEADER.iter().map(|s| s.to_string()).collect();
    let edges = (1..=net.n()).map(|b| {
        vec![
            l[net.parent(b)].clone(),
            l[b].clone(),
            net.resistance(b).to_string(),
            net.reactance(b).to_string(),
            (net.is_controllable(b) as u8).to_string(),
        ]
    });
    write_csv(edge_csv, std::iter::once(header).chain(edges))?;

    let header = l[1..].iter().map(|s| format!("p_{s}")).chain(l[1..].iter().map(|s| format!("qe_{s}"))).collect();
    let rows = bundle.p.iter().zip(&bundle.q_e).map(|(p, q)| p.iter().chain(q.iter()).map(|v| v.to_string()).collect());
    write_csv(series_csv, std::iter::once(header).chain(rows))?;

    let mut f = File::create(config).map_err(|e| io_err(config, e))?;
    f.write_all(bundle.config.to_text().as_bytes()).map_err(|e| io_err(config, e))
}

pub fn save_case_dir(bundle: &CaseBundle, dir: &Path) -> Result<(), ScenarioError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    save_case(bundle, &dir.join(EDGE_FILE), &dir.join(SERIES_FILE), &dir.join(CONFIG_FILE))
}

/// A line added by a topology change. Without an explicit impedance it
/// takes the impedance of the removed line at the same position.
#[derive(Debug, Clone, PartialEq)]
pub struct AddedLine {
    pub from: String,
    pub to: String,
    pub impedance: Option<(f64, f64)>,
}

/// Lines swapped at a given step, written `step: -a>b,+c>d` with an
/// optional `=r:x` impedance on added lines.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyChange {
    pub at_step: usize,
    pub removed: Vec<(String, String)>,
    pub added: Vec<AddedLine>,
}

impl FromStr for TopologyChange {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, ScenarioError> {
        let bad = |m: String| ScenarioError::Topology(m);
        let (step, rest) = s.split_once(':').ok_or_else(|| bad(format!("expected 'step: edits', got '{s}'")))?;
        let at_step = step.trim().parse().map_err(|_| bad(format!("bad step '{}'", step.trim())))?;
        let mut change = TopologyChange { at_step, removed: Vec::new(), added: Vec::new() };
        for item in rest.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (sign, body) = item.split_at(1);
            let (line, imp) = match body.split_once('=') {
                Some((l, i)) => (l, Some(i)),
                None => (body, None),
            };
            let (a, b) = line.split_once('>').ok_or_else(|| bad(format!("bad line '{item}'")))?;
            let (a, b) = (a.trim().to_string(), b.trim().to_string());
            match sign {
                "-" if imp.is_none() => change.removed.push((a, b)),
                "+" => {
                    let impedance = match imp {
                        None => None,
                        Some(i) => {
                            let (r, x) = i.split_once(':').ok_or_else(|| bad(format!("bad impedance in '{item}'")))?;
                            let parse = |v: &str| v.trim().parse::<f64>().map_err(|_| bad(format!("bad impedance in '{item}'")));
                            Some((parse(r)?, parse(x)?))
                        }
                    };
                    change.added.push(AddedLine { from: a, to: b, impedance });
                }
                _ => return Err(bad(format!("bad edit '{item}'"))),
            }
        }
        Ok(change)
    }
}

impl fmt::Display for TopologyChange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut items: Vec<String> = self.removed.iter().map(|(a, b)| format!("-{a}>{b}")).collect();
        for l in &self.added {
            match l.impedance {
                Some((r, x)) => items.push(format!("+{}>{}={r}:{x}", l.from, l.to)),
                None => items.push(format!("+{}>{}", l.from, l.to)),
            }
        }
        write!(f, "{}: {}", self.at_step, items.join(","))
    }
}

/// Applies the line swaps of `change`. Labels and series are kept, each
/// bus keeps its controllability, and the result must again be radial.
pub fn apply_topology_change(bundle: &CaseBundle, change: &TopologyChange) -> Result<CaseBundle, ScenarioError> {
    if change.removed.len() != change.added.len() {
        return Err(ScenarioError::Topology(format!(
            "removing {} and adding {} lines leaves buses disconnected or doubly fed",
            change.removed.len(),
            change.added.len()
        )));
    }
    let net = &bundle.network;
    let n = net.n();
    let mut parent: Vec<Option<usize>> = (1..=n).map(|b| Some(net.parent(b))).collect();
    let mut r: Vec<f64> = (1..=n).map(|b| net.resistance(b)).collect();
    let mut x: Vec<f64> = (1..=n).map(|b| net.reactance(b)).collect();
    let mut freed = VecDeque::new();
    for (a, b) in &change.removed {
        let (ia, ib) = (bundle.bus(a)?, bundle.bus(b)?);
        if ib == 0 || parent[ib - 1] != Some(ia) {
            return Err(ScenarioError::Topology(format!("no line {a}>{b}")));
        }
        parent[ib - 1] = None;
        freed.push_back((r[ib - 1], x[ib - 1]));
    }
    for line in &change.added {
        let (ia, ib) = (bundle.bus(&line.from)?, bundle.bus(&line.to)?);
        if ib == 0 {
            return Err(ScenarioError::Topology("the substation cannot be fed by a line".into()));
        }
        if parent[ib - 1].is_some() {
            return Err(ScenarioError::Topology(format!("bus {} would have two parents", line.to)));
        }
        let freed_imp = freed.pop_front();
        let (lr, lx) = line.impedance.or(freed_imp).expect("one freed impedance per added line");
        parent[ib - 1] = Some(ia);
        r[ib - 1] = lr;
        x[ib - 1] = lx;
    }
    let edges: Vec<(usize, usize)> = parent.iter().enumerate().map(|(k, p)| (p.expect("every bus fed"), k + 1)).collect();
    let network =
        build_network(&edges, &r, &x, &net.control_set()).map_err(|e| label_grid_error(e, &bundle.labels))?;
    Ok(CaseBundle { network, ..bundle.clone() })
}

/// Parameters of [`synth_case`], written `n=8,seed=1,noise=0.5,len=2001`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    /// Target for the realized noise bound `eta*` (kV²).
    pub noise_target: f64,
    /// Series rows.
    pub len: usize,
}

impl SynthSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, noise_target: 0.5, len: 2001 }
    }
}

impl FromStr for SynthSpec {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, ScenarioError> {
        let mut spec = SynthSpec::new(8, 0);
        let bad = |m: String| ScenarioError::Invalid(m);
        for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(|| bad(format!("expected key=value, got '{item}'")))?;
            let int = || v.parse::<usize>().map_err(|_| bad(format!("{k}: '{v}' is not an integer")));
            match k {
                "n" => spec.n = int()?,
                "seed" => spec.seed = int()? as u64,
                "len" => spec.len = int()?,
                "noise" => spec.noise_target = v.parse().map_err(|_| bad(format!("noise: '{v}' is not a number")))?,
                _ => return Err(bad(format!("unknown synthetic case key '{k}'"))),
            }
        }
        Ok(spec)
    }
}

const WALK_CLIP: f64 = 10.0;
const Q_START: f64 = 0.24;
const Q_GROWTH: f64 = 1.25;
const Q_CAP: f64 = 1e3;
const EXACT_CORNER_DIM: usize = 12;
const SAMPLED_CORNERS: usize = 4096;

/// Whether the box condition holds at every corner of `vbox` (a sample of
/// corners above `EXACT_CORNER_DIM` buses) for the single model `x`. The
/// set of `vpar` admitting a control is convex, so the corners decide.
pub fn corners_admit_control(
    cfg: &ControllerConfig,
    x: &DMatrix<f64>,
    vbox: &VparBox,
    margin: f64,
    seed: u64,
) -> Result<bool, ScenarioError> {
    let n = cfg.n();
    let corner = |mask: &dyn Fn(usize) -> bool| {
        DVector::from_fn(n, |i, _| if mask(i) { vbox.upper[i] } else { vbox.lower[i] })
    };
    for extreme in [false, true] {
        if !box_condition_holds(cfg, x, &corner(&|_| extreme), margin)? {
            return Ok(false);
        }
    }
    if n <= EXACT_CORNER_DIM {
        for m in 1..(1u64 << n) - 1 {
            if !box_condition_holds(cfg, x, &corner(&|i| m >> i & 1 == 1), margin)? {
                return Ok(false);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..SAMPLED_CORNERS {
            let bits: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            if !box_condition_holds(cfg, x, &corner(&|i| bits[i]), margin)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn clipped_walks(rng: &mut ChaCha8Rng, n: usize, len: usize) -> Vec<DVector<f64>> {
    let mut z: DVector<f64> = DVector::zeros(n);
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        if t > 0 {
            for i in 0..n {
                let step: f64 = rng.sample(StandardNormal);
                z[i] = (z[i] + step).clamp(-WALK_CLIP, WALK_CLIP);
            }
        }
        out.push(z.clone());
    }
    out
}

/// Generates a random feeder with load series.
///
/// The tree grows by uniform attachment with line impedances drawn from
/// `Uniform[0.05, 0.5]` Ω. Injections are a constant load plus clipped
/// random walks; the walks are scaled so the realized `eta*` equals
/// `noise_target`, and the load level is set so the uncontrolled voltage
/// dips below the lower limit. `eta_bar` is twice the noise target. The
/// symmetric injection range starts at ±0.24 MVar and grows until every
/// corner of the whole-series `vpar` box admits a control with margin
/// `eta_bar + epsilon` under the true model.
pub fn synth_case(spec: &SynthSpec) -> Result<CaseBundle, ScenarioError> {
    let n = spec.n;
    if n == 0 || spec.len == 0 {
        return Err(ScenarioError::Invalid("synthetic case needs n >= 1 and len >= 1".into()));
    }
    if !(spec.noise_target >= 0.0) {
        return Err(ScenarioError::Invalid("noise target must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let edges: Vec<(usize, usize)> = (1..=n).map(|b| (rng.random_range(0..b), b)).collect();
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
    let all: Vec<usize> = (1..=n).collect();
    let network = build_network(&edges, &r, &x, &all)?;
    let model = compute_sensitivity(&network);

    let zp = clipped_walks(&mut rng, n, spec.len);
    let zq = clipped_walks(&mut rng, n, spec.len);
    let unit_eta = (1..spec.len)
        .map(|t| (&model.r * (&zp[t] - &zp[t - 1]) + &model.x * (&zq[t] - &zq[t - 1])).amax())
        .fold(0.0, f64::max);
    let scale = if unit_eta > 0.0 { spec.noise_target / unit_eta } else { 0.0 };

    let mut config = CaseConfig { seed: spec.seed, eta_bar: (2.0 * spec.noise_target).max(1e-3), ..CaseConfig::default() };
    let base: DVector<f64> = DVector::from_fn(n, |_, _| rng.random_range(0.5..1.5));
    let p_base = -&base;
    let q_base = &base * -0.4;
    let g = &model.r * &p_base + &model.x * &q_base;
    let h_min = DVector::from_fn(n, |i, _| {
        (0..spec.len).map(|t| scale * (model.r.row(i).dot(&zp[t].transpose()) + model.x.row(i).dot(&zq[t].transpose()))).fold(f64::INFINITY, f64::min)
    });
    let lowest = |lambda: f64| (0..n).map(|i| config.v0_kv2 + lambda * g[i] + h_min[i]).fold(f64::INFINITY, f64::min);
    let target = config.v_min() - (2.0 * spec.noise_target).max(0.5);
    let mut lambda = 0.0;
    if lowest(0.0) > target {
        let mut hi = 1.0;
        while lowest(hi) > target {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if lowest(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lambda = hi;
    }
    let p: Vec<DVector<f64>> = zp.iter().map(|z| &p_base * lambda + z * scale).collect();
    let q_e: Vec<DVector<f64>> = zq.iter().map(|z| &q_base * lambda + z * scale).collect();

    let labels: Vec<String> = (0..=n).map(|b| b.to_string()).collect();
    let mut bundle = CaseBundle::new(network, labels, p, q_e, config.clone())?;
    let plant = Plant::new(bundle.network.clone(), None, config.v0_kv2, bundle.p.clone(), bundle.q_e.clone())?;
    let vbox = plant.vpar_box_linear(spec.len - 1);
    let margin = config.eta_bar + config.epsilon;
    let mut q = Q_START;
    loop {
        let cfg = ControllerConfig::uniform(n, config.v0_kv2, config.v_min(), config.v_max(), -q, q, 1.0, 1.0);
        if corners_admit_control(&cfg, &model.x, &vbox, margin, spec.seed)? {
            break;
        }
        q *= Q_GROWTH;
        if q > Q_CAP {
            return Err(ScenarioError::Assumption(format!("no injection range up to ±{Q_CAP} MVar controls every vpar corner")));
        }
    }
    config.qmin_mvar = -q;
    config.qmax_mvar = q;
    bundle.config = config;
    Ok(bundle)
}

/// Choices layered on top of a case for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSetup {
    pub dynamics: Dynamics,
    /// Overrides the case's prior mode.
    pub prior: Option<PriorMode>,
    /// Horizon; defaults to all series rows but the first.
    pub steps: Option<usize>,
    /// Overrides the case's seed for the random initial estimate.
    pub seed: Option<u64>,
    pub delta: Option<f64>,
    pub topology_change: Option<TopologyChange>,
    /// Labels of buses withheld from both control and observation.
    pub withheld: Vec<String>,
    pub known_eta: bool,
    pub slack: SlackPolicy,
    pub audit_estimate: bool,
    pub audit_truth: bool,
}

impl Default for RunSetup {
    fn default() -> Self {
        Self {
            dynamics: Dynamics::Linear,
            prior: None,
            steps: None,
            seed: None,
            delta: None,
            topology_change: None,
            withheld: Vec::new(),
            known_eta: false,
            slack: SlackPolicy::Single,
            audit_estimate: false,
            audit_truth: false,
        }
    }
}

/// Everything [`crate::controller::run_episode`] needs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub plant: Plant,
    pub controller: ControllerConfig,
    pub prior: PriorSpec,
    pub initial: ModelEstimate,
    pub episode: EpisodeConfig,
    pub prior_mode: PriorMode,
    pub seed: u64,
}

pub fn prepare(bundle: &CaseBundle, setup: &RunSetup) -> Result<Prepared, ScenarioError> {
    let c = &bundle.config;
    let n = bundle.n();
    let steps = setup.steps.unwrap_or(bundle.len().saturating_sub(1));
    if steps == 0 || steps + 1 > bundle.len() {
        return Err(ScenarioError::Invalid(format!("{steps} steps need {} series rows, case has {}", steps + 1, bundle.len())));
    }
    let prior_mode = setup.prior.unwrap_or(c.prior_mode);
    let seed = setup.seed.unwrap_or(c.seed);

    let change = match &setup.topology_change {
        Some(ch) => {
            if ch.at_step == 0 || ch.at_step > steps {
                return Err(ScenarioError::Topology(format!("step {} is outside 1..={steps}", ch.at_step)));
            }
            Some((ch.at_step, apply_topology_change(bundle, ch)?.network))
        }
        None => None,
    };
    let plant = Plant::new(bundle.network.clone(), change, c.v0_kv2, bundle.p.clone(), bundle.q_e.clone())?;

    let mut cfg = ControllerConfig::uniform(n, c.v0_kv2, c.v_min(), c.v_max(), c.qmin_mvar, c.qmax_mvar, c.pv_weight, c.pu_weight);
    cfg.beta = c.beta;
    cfg.delta = setup.delta.unwrap_or(c.delta);
    cfg.epsilon = c.epsilon;
    cfg.eta_bar = c.eta_bar;
    cfg.slack = setup.slack;
    let mut withheld = Vec::with_capacity(setup.withheld.len());
    for label in &setup.withheld {
        let b = bundle.bus(label)?;
        if b == 0 {
            return Err(ScenarioError::Invalid("the substation cannot be withheld".into()));
        }
        withheld.push(b);
        cfg.observed[b - 1] = false;
    }
    let control: Vec<usize> = bundle.network.control_set().into_iter().filter(|b| !withheld.contains(b)).collect();
    cfg.restrict_control(&control);
    let ep = EpisodeConfig {
        dynamics: setup.dynamics,
        horizon: steps,
        seed,
        known_eta: setup.known_eta,
        audit_estimate: setup.audit_estimate,
        audit_truth: setup.audit_truth,
        ..EpisodeConfig::default()
    };
    cfg.vpar_box = match setup.dynamics {
        Dynamics::Linear => plant.vpar_box_linear(steps),
        Dynamics::Distflow => plant.vpar_box_distflow(steps, DISTFLOW_VPAR_PADDING, ep.pf_tol, ep.pf_max_iter)?,
    };
    cfg.validate()?;

    let prior = prior_for(&bundle.network, prior_mode, c.alpha, true)?;
    let initial = random_initial_model(&bundle.network, &prior, seed)?;
    Ok(Prepared { plant, controller: cfg, prior, initial, episode: ep, prior_mode, seed })
}
