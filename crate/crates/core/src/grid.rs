//! Radial feeder topology, LinDistFlow sensitivity matrices and prior
//! uncertainty sets over the reactance sensitivity matrix.
//!
//! Buses are numbered `0..=n` with bus 0 the substation. Every other bus has
//! exactly one parent and owns the line that feeds it, so per-line data is
//! indexed by the child bus. Matrices are `n x n` and indexed by `bus - 1`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, ConsistentSetSpec, ModelEstimate, ProjectionOutcome, VparBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("network has no branch buses")]
    Empty,
    #[error("bus {0} out of range")]
    BusOutOfRange(usize),
    #[error("substation (bus 0) appears as a child")]
    RootAsChild,
    #[error("cycle detected through bus {0}")]
    Cycle(usize),
    #[error("bus {0} has more than one parent")]
    DuplicateChild(usize),
    #[error("bus {0} is not reachable from the substation")]
    Disconnected(usize),
    #[error("line into bus {bus} has nonpositive impedance (r={r}, x={x})")]
    NonPositiveImpedance { bus: usize, r: f64, x: f64 },
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("alpha must be nonnegative, got {0}")]
    NegativeAlpha(f64),
    #[error("contradictory pins on entry ({0}, {1})")]
    ContradictoryPins(usize, usize),
    #[error("prior set is empty")]
    EmptyPrior,
    #[error("projection failed: {0}")]
    Projection(String),
}

/// A radial distribution feeder rooted at the substation (bus 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialNetwork {
    parent: Vec<usize>,
    r: Vec<f64>,
    x: Vec<f64>,
    controllable: Vec<bool>,
    depth: Vec<usize>,
    order: Vec<usize>,
}

impl RadialNetwork {
    /// Number of branch buses (excluding the substation).
    pub fn n(&self) -> usize {
        self.parent.len()
    }

    /// Parent of `bus` (which must be in `1..=n`).
    pub fn parent(&self, bus: usize) -> usize {
        self.parent[bus - 1]
    }

    pub fn resistance(&self, bus: usize) -> f64 {
        self.r[bus - 1]
    }

    pub fn reactance(&self, bus: usize) -> f64 {
        self.x[bus - 1]
    }

    pub fn is_controllable(&self, bus: usize) -> bool {
        self.controllable[bus - 1]
    }

    pub fn control_set(&self) -> Vec<usize> {
        (1..=self.n()).filter(|&b| self.is_controllable(b)).collect()
    }

    /// Number of lines between `bus` and the substation.
    pub fn depth(&self, bus: usize) -> usize {
        if bus == 0 {
            0
        } else {
            self.depth[bus - 1]
        }
    }

    /// Branch buses ordered so every parent precedes its children.
    pub fn topological_order(&self) -> &[usize] {
        &self.order
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (1..=self.n()).map(|b| (self.parent(b), b)).collect()
    }

    pub fn children(&self, bus: usize) -> Vec<usize> {
        (1..=self.n()).filter(|&b| self.parent(b) == bus).collect()
    }

    /// Buses on the path from the substation to `bus`, excluding bus 0.
    pub fn root_path(&self, bus: usize) -> Vec<usize> {
        let mut path = Vec::with_capacity(self.depth(bus));
        let mut b = bus;
        while b != 0 {
            path.push(b);
            b = self.parent(b);
        }
        path.reverse();
        path
    }

    /// Returns a copy with line reactances replaced.
    pub fn with_reactances(&self, x: Vec<f64>) -> Result<Self, GridError> {
        if x.len() != self.n() {
            return Err(GridError::LengthMismatch { expected: self.n(), got: x.len() });
        }
        let mut out = self.clone();
        out.x = x;
        Ok(out)
    }

    pub fn with_controllable(&self, controllable: &[usize]) -> Result<Self, GridError> {
        let mut out = self.clone();
        out.controllable = vec![false; self.n()];
        for &b in controllable {
            if b == 0 || b > self.n() {
                return Err(GridError::BusOutOfRange(b));
            }
            out.controllable[b - 1] = true;
        }
        Ok(out)
    }
}

/// Builds and validates a radial network from `(parent, child)` edges.
///
/// `r[k]` and `x[k]` are the impedance of `edges[k]`. Buses must be
/// contiguous `0..=n` where `n = edges.len()`.
pub fn build_network(
    edges: &[(usize, usize)],
    r: &[f64],
    x: &[f64],
    controllable: &[usize],
) -> Result<RadialNetwork, GridError> {
    let n = edges.len();
    if n == 0 {
        return Err(GridError::Empty);
    }
    if r.len() != n || x.len() != n {
        return Err(GridError::LengthMismatch { expected: n, got: r.len().min(x.len()) });
    }
    for &(a, b) in edges {
        for bus in [a, b] {
            if bus > n {
                return Err(GridError::BusOutOfRange(bus));
            }
        }
        if b == 0 {
            return Err(GridError::RootAsChild);
        }
    }

    // Directed cycle search first: a cycle is the more informative diagnosis
    // than the duplicate parent it necessarily implies.
    let mut adj = vec![Vec::new(); n + 1];
    for &(a, b) in edges {
        adj[a].push(b);
    }
    if let Some(bus) = find_cycle(&adj) {
        return Err(GridError::Cycle(bus));
    }

    let mut parent = vec![usize::MAX; n];
    let mut rr = vec![0.0; n];
    let mut xx = vec![0.0; n];
    for (k, &(a, b)) in edges.iter().enumerate() {
        if parent[b - 1] != usize::MAX {
            return Err(GridError::DuplicateChild(b));
        }
        if !(r[k] > 0.0 && x[k] > 0.0) {
            return Err(GridError::NonPositiveImpedance { bus: b, r: r[k], x: x[k] });
        }
        parent[b - 1] = a;
        rr[b - 1] = r[k];
        xx[b - 1] = x[k];
    }

    // Breadth-first from the root gives depths and a topological order.
    let mut depth = vec![usize::MAX; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::from([0usize]);
    while let Some(u) = queue.pop_front() {
        for &c in &adj[u] {
            if depth[c - 1] == usize::MAX {
                depth[c - 1] = if u == 0 { 1 } else { depth[u - 1] + 1 };
                order.push(c);
                queue.push_back(c);
            }
        }
    }
    if let Some(b) = (1..=n).find(|&b| depth[b - 1] == usize::MAX) {
        return Err(GridError::Disconnected(b));
    }

    let mut ctrl = vec![false; n];
    for &b in controllable {
        if b == 0 || b > n {
            return Err(GridError::BusOutOfRange(b));
        }
        ctrl[b - 1] = true;
    }

    Ok(RadialNetwork { parent, r: rr, x: xx, controllable: ctrl, depth, order })
}

fn find_cycle(adj: &[Vec<usize>]) -> Option<usize> {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color = vec![0u8; adj.len()];
    for start in 0..adj.len() {
        if color[start] != 0 {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        color[start] = 1;
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            if *next < adj[u].len() {
                let v = adj[u][*next];
                *next += 1;
                match color[v] {
                    0 => {
                        color[v] = 1;
                        stack.push((v, 0));
                    }
                    1 => return Some(v),
                    _ => {}
                }
            } else {
                color[u] = 2;
                stack.pop();
            }
        }
    }
    None
}

/// Lowest common ancestor of buses `i` and `j`; 0 when their root paths
/// share only the substation.
pub fn lca(net: &RadialNetwork, i: usize, j: usize) -> Result<usize, GridError> {
    for b in [i, j] {
        if b == 0 || b > net.n() {
            return Err(GridError::BusOutOfRange(b));
        }
    }
    Ok(lca_unchecked(net, i, j))
}

fn lca_unchecked(net: &RadialNetwork, mut i: usize, mut j: usize) -> usize {
    while net.depth(i) > net.depth(j) {
        i = net.parent(i);
    }
    while net.depth(j) > net.depth(i) {
        j = net.parent(j);
    }
    while i != j {
        i = net.parent(i);
        j = net.parent(j);
    }
    i
}

/// The loss-free sensitivity matrices `R`, `X` of a radial feeder.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityModel {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
}

impl SensitivityModel {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }
}

/// `X_ij = 2 * sum of x over the shared part of the root paths of i and j`,
/// computed from root-path prefix sums evaluated at `lca(i, j)`.
pub fn compute_sensitivity(net: &RadialNetwork) -> SensitivityModel {
    let n = net.n();
    // prefix[b] = impedance summed along the root path of b; prefix[0] = 0.
    let mut prefix_r = vec![0.0; n + 1];
    let mut prefix_x = vec![0.0; n + 1];
    for &b in net.topological_order() {
        let p = net.parent(b);
        prefix_r[b] = prefix_r[p] + net.resistance(b);
        prefix_x[b] = prefix_x[p] + net.reactance(b);
    }
    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 1..=n {
        for j in i..=n {
            let k = lca_unchecked(net, i, j);
            let (rv, xv) = (2.0 * prefix_r[k], 2.0 * prefix_x[k]);
            r[(i - 1, j - 1)] = rv;
            r[(j - 1, i - 1)] = rv;
            x[(i - 1, j - 1)] = xv;
            x[(j - 1, i - 1)] = xv;
        }
    }
    SensitivityModel { r, x }
}

/// Checks the structural properties every feeder sensitivity matrix has:
/// symmetry, nonnegativity, `M_ij <= min(M_ii, M_jj)` and positive
/// definiteness. Returns a description of the first failure.
pub fn check_sensitivity_matrix(m: &DMatrix<f64>, tol: f64) -> Result<(), String> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err("not square".into());
    }
    for i in 0..n {
        for j in 0..n {
            let v = m[(i, j)];
            if (v - m[(j, i)]).abs() > tol {
                return Err(format!("asymmetric at ({i}, {j})"));
            }
            if v < -tol {
                return Err(format!("negative entry at ({i}, {j})"));
            }
            if v > m[(i, i)] + tol || v > m[(j, j)] + tol {
                return Err(format!("off-diagonal ({i}, {j}) exceeds its diagonal"));
            }
        }
    }
    let min_eig = min_eigenvalue(m);
    if min_eig <= tol {
        return Err(format!("not positive definite (min eigenvalue {min_eig:e})"));
    }
    Ok(())
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Known lowest common ancestor of a bus pair: `lca(i, j) = k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopoPin {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

/// Known exact value of the entry `X_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinePin {
    pub i: usize,
    pub j: usize,
    pub value: f64,
}

/// Prior uncertainty set over `X`:
///
/// * `||X - center||_tri <= alpha * ||center||_tri`
/// * `0 <= X_ij <= min(X_ii, X_jj)`, `X` symmetric
/// * `X_ij = 0` (if `k = 0`) or `X_ij = X_kk` for every topology pin
/// * `X_ij = value` for every line pin
/// * optionally `X` positive semidefinite
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub alpha: f64,
    pub center: DMatrix<f64>,
    pub topo_pins: Vec<TopoPin>,
    pub line_pins: Vec<LinePin>,
    pub enforce_psd: bool,
}

impl PriorSpec {
    pub fn n(&self) -> usize {
        self.center.nrows()
    }

    /// Radius of the norm ball around the center.
    pub fn radius(&self) -> f64 {
        self.alpha * geometry::tri_norm_unchecked(&self.center)
    }

    /// Diameter of the set under the upper-triangle norm (`2 * radius`).
    pub fn diameter(&self) -> f64 {
        2.0 * self.radius()
    }

    /// Largest violation of any prior constraint by `x` (0 when inside).
    pub fn max_violation(&self, x: &DMatrix<f64>) -> f64 {
        let n = self.n();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((x[(i, j)] - x[(j, i)]).abs());
                worst = worst.max(-x[(i, j)]);
                worst = worst.max(x[(i, j)] - x[(i, i)]);
            }
        }
        let dist = geometry::tri_norm_unchecked(&(x - &self.center));
        worst = worst.max(dist - self.radius());
        for pin in &self.topo_pins {
            let target = if pin.k == 0 { 0.0 } else { x[(pin.k - 1, pin.k - 1)] };
            worst = worst.max((x[(pin.i - 1, pin.j - 1)] - target).abs());
        }
        for pin in &self.line_pins {
            worst = worst.max((x[(pin.i - 1, pin.j - 1)] - pin.value).abs());
        }
        if self.enforce_psd {
            worst = worst.max(-min_eigenvalue(x));
        }
        worst
    }

    pub fn contains(&self, x: &DMatrix<f64>, tol: f64) -> bool {
        self.max_violation(x) <= tol
    }
}

/// Assembles a [`PriorSpec`], normalizing pins to `i <= j` and rejecting
/// contradictory ones.
pub fn make_prior_set(
    center: &DMatrix<f64>,
    alpha: f64,
    topo_pins: &[TopoPin],
    line_pins: &[LinePin],
    enforce_psd: bool,
) -> Result<PriorSpec, GridError> {
    if !(alpha >= 0.0) {
        return Err(GridError::NegativeAlpha(alpha));
    }
    let n = center.nrows();
    let in_range = |b: usize| b >= 1 && b <= n;

    let mut line_vals: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut lines = Vec::new();
    for pin in line_pins {
        if !in_range(pin.i) {
            return Err(GridError::BusOutOfRange(pin.i));
        }
        if !in_range(pin.j) {
            return Err(GridError::BusOutOfRange(pin.j));
        }
        let key = (pin.i.min(pin.j), pin.i.max(pin.j));
        match line_vals.get(&key) {
            Some(&v) if v != pin.value => return Err(GridError::ContradictoryPins(key.0, key.1)),
            Some(_) => continue,
            None => {
                line_vals.insert(key, pin.value);
                lines.push(LinePin { i: key.0, j: key.1, value: pin.value });
            }
        }
    }

    let mut topo_vals: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut topos = Vec::new();
    for pin in topo_pins {
        for b in [pin.i, pin.j] {
            if !in_range(b) {
                return Err(GridError::BusOutOfRange(b));
            }
        }
        if pin.k > n {
            return Err(GridError::BusOutOfRange(pin.k));
        }
        let key = (pin.i.min(pin.j), pin.i.max(pin.j));
        if key.0 == key.1 {
            // lca(i, i) = i; the pin carries no information unless it is wrong.
            if pin.k != key.0 {
                return Err(GridError::ContradictoryPins(key.0, key.1));
            }
            continue;
        }
        match topo_vals.get(&key) {
            Some(&k) if k != pin.k => return Err(GridError::ContradictoryPins(key.0, key.1)),
            Some(_) => continue,
            None => {
                topo_vals.insert(key, pin.k);
                topos.push(TopoPin { i: key.0, j: key.1, k: pin.k });
            }
        }
        let entry = line_vals.get(&key).copied();
        let target = if pin.k == 0 { Some(0.0) } else { line_vals.get(&(pin.k, pin.k)).copied() };
        if let (Some(a), Some(b)) = (entry, target) {
            if a != b {
                return Err(GridError::ContradictoryPins(key.0, key.1));
            }
        }
        if pin.k == 0 {
            if let Some(a) = entry {
                if a != 0.0 {
                    return Err(GridError::ContradictoryPins(key.0, key.1));
                }
            }
        }
    }

    Ok(PriorSpec {
        alpha,
        center: center.clone(),
        topo_pins: topos,
        line_pins: lines,
        enforce_psd,
    })
}

/// Topology pins `lca(i, j)` for all pairs `i < j <= k_max` of `net`.
pub fn topo_pins_first(net: &RadialNetwork, k_max: usize) -> Vec<TopoPin> {
    let k_max = k_max.min(net.n());
    let mut pins = Vec::new();
    for i in 1..=k_max {
        for j in (i + 1)..=k_max {
            pins.push(TopoPin { i, j, k: lca_unchecked(net, i, j) });
        }
    }
    pins
}

/// Line pins fixing `X_ij` to the entries of `x` for all `i <= j <= k_max`.
pub fn line_pins_first(x: &DMatrix<f64>, k_max: usize) -> Vec<LinePin> {
    let k_max = k_max.min(x.nrows());
    let mut pins = Vec::new();
    for i in 1..=k_max {
        for j in i..=k_max {
            pins.push(LinePin { i, j, value: x[(i - 1, j - 1)] });
        }
    }
    pins
}

/// Random starting estimate: each line reactance is scaled by an
/// independent `Uniform[0, 2]` factor, the bus labels are permuted
/// uniformly, and the result is projected onto the prior. `eta_hat = 0`.
pub fn random_initial_model(
    net: &RadialNetwork,
    prior: &PriorSpec,
    seed: u64,
) -> Result<ModelEstimate, GridError> {
    let n = net.n();
    if prior.n() != n {
        return Err(GridError::LengthMismatch { expected: n, got: prior.n() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scaled: Vec<f64> = (1..=n).map(|b| net.reactance(b) * rng.random_range(0.0..2.0)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    // A zero scale factor is allowed here: the matrix is only a starting point.
    let mut prefix = vec![0.0; n + 1];
    for &b in net.topological_order() {
        prefix[b] = prefix[net.parent(b)] + scaled[b - 1];
    }
    let mut raw = DMatrix::zeros(n, n);
    for i in 1..=n {
        for j in i..=n {
            let v = 2.0 * prefix[lca_unchecked(net, i, j)];
            raw[(i - 1, j - 1)] = v;
            raw[(j - 1, i - 1)] = v;
        }
    }
    let permuted = DMatrix::from_fn(n, n, |a, b| raw[(perm[a], perm[b])]);

    let start = ModelEstimate::new(permuted, 0.0);
    let set = ConsistentSetSpec::prior_only(prior.clone(), 0.0, VparBox::unbounded(n));
    match geometry::project(&set, &start, 1.0) {
        Ok(ProjectionOutcome::Projected(est)) => Ok(est),
        Ok(ProjectionOutcome::Infeasible { .. }) => Err(GridError::EmptyPrior),
        Err(e) => Err(GridError::Projection(e.to_string())),
    }
}
