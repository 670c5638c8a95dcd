//! Exact DC optimal transmission switching.
//!
//! Two solvers share the same contract:
//!
//! - [`OtsMode::Exhaustive`] solves a DC-OPF for every topology.
//! - [`OtsMode::BranchAndBound`] works on the big-M formulation with an
//!   explicit flow variable per undecided line,
//!
//!   ```text
//!   |f_l - b_l (C theta)_l| <= M_l (1 - z_l),   z_l p_min <= f_l <= z_l p_max,
//!   M_l = |b_l| * (largest angle difference allowed across line l),
//!   ```
//!
//!   relaxing `z_l` to `[0, 1]`. Lines fixed closed are written directly as
//!   DC-OPF rows and lines fixed open disappear, so a node with every line
//!   fixed is exactly the DC-OPF for that topology.
//!
//! Search order: dive depth-first into the child that agrees with the
//! rounded relaxation value, and pick the open node with the lowest bound
//! whenever a dive ends.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use super::{solve_dcopf, DispatchError, DispatchSolution, SwitchVector};
use crate::network::Network;
use crate::qp::{solve_qp_with, QpProblem, QpSettings, QpStatus};

const INTEGRALITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum OtsMode {
    BranchAndBound,
    Exhaustive,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OtsBudget {
    pub time_limit: Option<Duration>,
    pub node_limit: Option<usize>,
}

impl OtsBudget {
    pub fn unlimited() -> Self {
        Self::default()
    }

    pub fn seconds(secs: f64) -> Self {
        Self {
            time_limit: Some(Duration::from_secs_f64(secs.max(0.0))),
            node_limit: None,
        }
    }

    fn expired(&self, start: Instant, nodes: usize) -> bool {
        self.time_limit.is_some_and(|t| start.elapsed() >= t) || self.node_limit.is_some_and(|n| nodes >= n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OtsOptions {
    pub budget: OtsBudget,
    /// Maximum number of lines allowed open. Unlimited when `None`.
    pub max_open: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtsSolution {
    pub z: SwitchVector,
    pub dispatch: DispatchSolution,
    pub objective: f64,
    pub nodes_explored: usize,
    pub proved_optimal: bool,
    /// Objective of the root relaxation (branch-and-bound only).
    pub root_bound: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LineState {
    Free,
    Closed,
    Open,
}

#[derive(Debug, Clone)]
struct Node {
    states: Vec<LineState>,
    bound: f64,
    seq: usize,
}

/// Solves DC-OTS exactly (or returns the incumbent when the budget expires).
pub fn solve_ots_exact(
    net: &Network,
    demand: &[f64],
    mode: OtsMode,
    opts: &OtsOptions,
) -> Result<OtsSolution, DispatchError> {
    let start = Instant::now();
    let seed = solve_dcopf(net, demand, &SwitchVector::all_closed(net.n_line))?;
    if !seed.is_optimal() {
        return Err(DispatchError::NoIncumbent);
    }
    let incumbent = Incumbent {
        z: SwitchVector::all_closed(net.n_line),
        objective: seed.objective,
        dispatch: seed,
    };
    match mode {
        OtsMode::Exhaustive => exhaustive(net, demand, opts, incumbent, start),
        OtsMode::BranchAndBound => branch_and_bound(net, demand, opts, incumbent, start),
    }
}

struct Incumbent {
    z: SwitchVector,
    dispatch: DispatchSolution,
    objective: f64,
}

impl Incumbent {
    fn offer(&mut self, z: SwitchVector, sol: DispatchSolution) -> bool {
        if sol.is_optimal() && sol.objective < self.objective - 1e-12 * (1.0 + self.objective.abs()) {
            self.objective = sol.objective;
            self.z = z;
            self.dispatch = sol;
            true
        } else {
            false
        }
    }

    fn into_solution(self, nodes: usize, proved: bool, root_bound: Option<f64>) -> OtsSolution {
        OtsSolution {
            z: self.z,
            objective: self.objective,
            dispatch: self.dispatch,
            nodes_explored: nodes,
            proved_optimal: proved,
            root_bound,
        }
    }
}

fn exhaustive(
    net: &Network,
    demand: &[f64],
    opts: &OtsOptions,
    mut inc: Incumbent,
    start: Instant,
) -> Result<OtsSolution, DispatchError> {
    let nl = net.n_line;
    if nl >= 63 {
        return Err(DispatchError::DimensionMismatch(format!(
            "exhaustive enumeration over {nl} lines"
        )));
    }
    let mut nodes = 0;
    // mask bit set = line open; mask 0 is the already-solved seed.
    for mask in 1u64..(1u64 << nl) {
        if opts.budget.expired(start, nodes) {
            return Ok(inc.into_solution(nodes, false, None));
        }
        let n_open = mask.count_ones() as usize;
        if opts.max_open.is_some_and(|k| n_open > k) {
            continue;
        }
        let closed: Vec<bool> = (0..nl).map(|l| mask & (1 << l) == 0).collect();
        let z = SwitchVector::from_bools(&closed);
        let sol = solve_dcopf(net, demand, &z)?;
        nodes += 1;
        inc.offer(z, sol);
    }
    Ok(inc.into_solution(nodes, true, None))
}

/// Column layout of a node relaxation: `p_g`, `theta`, then `(f, z)` per
/// free line.
struct NodeLayout {
    free: Vec<usize>,
    n_gen: usize,
    n_bus: usize,
}

impl NodeLayout {
    fn theta(&self, bus: usize) -> usize {
        self.n_gen + bus
    }
    fn flow(&self, k: usize) -> usize {
        self.n_gen + self.n_bus + 2 * k
    }
    fn z(&self, k: usize) -> usize {
        self.n_gen + self.n_bus + 2 * k + 1
    }
    fn n_var(&self) -> usize {
        self.n_gen + self.n_bus + 2 * self.free.len()
    }
}

fn build_node(net: &Network, demand: &[f64], states: &[LineState], max_open: Option<usize>) -> (QpProblem, NodeLayout) {
    let (ng, nb) = (net.n_gen, net.n_bus);
    let lay = NodeLayout {
        free: (0..net.n_line).filter(|&l| states[l] == LineState::Free).collect(),
        n_gen: ng,
        n_bus: nb,
    };
    let n = lay.n_var();

    let mut quad = DMatrix::zeros(n, n);
    let mut lin = DVector::zeros(n);
    for g in 0..ng {
        quad[(g, g)] = 2.0 * net.cost.c2[g];
        lin[g] = net.cost.c1[g];
    }

    let mut eq_mat = DMatrix::zeros(nb + 1, n);
    let mut eq_rhs = DVector::zeros(nb + 1);
    for g in 0..ng {
        eq_mat[(net.gen_bus[g], g)] = 1.0;
    }
    eq_rhs.rows_mut(0, nb).copy_from_slice(demand);
    eq_mat[(nb, lay.theta(net.ref_bus))] = 1.0;

    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    for l in 0..net.n_line {
        let (f, t, b) = (net.line_from[l], net.line_to[l], net.susceptance[l]);
        match states[l] {
            LineState::Open => {}
            LineState::Closed => {
                eq_mat[(f, lay.theta(f))] -= b;
                eq_mat[(f, lay.theta(t))] += b;
                eq_mat[(t, lay.theta(t))] -= b;
                eq_mat[(t, lay.theta(f))] += b;
                rows.push((vec![(lay.theta(f), b), (lay.theta(t), -b)], net.flow_max[l]));
                rows.push((vec![(lay.theta(f), -b), (lay.theta(t), b)], -net.flow_min[l]));
            }
            LineState::Free => {}
        }
    }
    for (k, &l) in lay.free.iter().enumerate() {
        let (f, t, b) = (net.line_from[l], net.line_to[l], net.susceptance[l]);
        let (fc, zc) = (lay.flow(k), lay.z(k));
        eq_mat[(f, fc)] -= 1.0;
        eq_mat[(t, fc)] += 1.0;
        let big_m = b.abs() * net.angle_spread(l);
        // f - b(th_f - th_t) + M z <= M
        rows.push((vec![(fc, 1.0), (lay.theta(f), -b), (lay.theta(t), b), (zc, big_m)], big_m));
        // -f + b(th_f - th_t) + M z <= M
        rows.push((vec![(fc, -1.0), (lay.theta(f), b), (lay.theta(t), -b), (zc, big_m)], big_m));
        // f - p_max z <= 0 ; -f + p_min z <= 0
        rows.push((vec![(fc, 1.0), (zc, -net.flow_max[l])], 0.0));
        rows.push((vec![(fc, -1.0), (zc, net.flow_min[l])], 0.0));
        rows.push((vec![(zc, 1.0)], 1.0));
        rows.push((vec![(zc, -1.0)], 0.0));
    }
    if let Some(k) = max_open {
        let n_open = states.iter().filter(|&&s| s == LineState::Open).count();
        if !lay.free.is_empty() && n_open + lay.free.len() > k {
            // sum over free lines of (1 - z) <= k - n_open
            let coeffs = (0..lay.free.len()).map(|j| (lay.z(j), -1.0)).collect();
            rows.push((coeffs, k as f64 - n_open as f64 - lay.free.len() as f64));
        }
    }
    for g in 0..ng {
        rows.push((vec![(g, 1.0)], net.gen_max[g]));
        rows.push((vec![(g, -1.0)], -net.gen_min[g]));
    }
    for i in 0..nb {
        rows.push((vec![(lay.theta(i), 1.0)], net.theta_max[i]));
        rows.push((vec![(lay.theta(i), -1.0)], -net.theta_min[i]));
    }

    let mut ineq_mat = DMatrix::zeros(rows.len(), n);
    let mut ineq_rhs = DVector::zeros(rows.len());
    for (r, (coeffs, rhs)) in rows.into_iter().enumerate() {
        for (c, v) in coeffs {
            ineq_mat[(r, c)] += v;
        }
        ineq_rhs[r] = rhs;
    }
    (
        QpProblem {
            quad,
            lin,
            eq_mat,
            eq_rhs,
            ineq_mat,
            ineq_rhs,
        },
        lay,
    )
}

/// Root relaxation bound of the big-M formulation.
pub fn root_relaxation_bound(net: &Network, demand: &[f64]) -> Result<Option<f64>, DispatchError> {
    let states = vec![LineState::Free; net.n_line];
    let (qp, _) = build_node(net, demand, &states, None);
    let sol = solve_qp_with(&qp, &QpSettings::default())?;
    Ok((sol.status == QpStatus::Optimal).then(|| sol.objective + net.cost.constant()))
}

fn states_to_switch(states: &[LineState], free_values: impl Fn(usize) -> bool) -> SwitchVector {
    let mut k = 0;
    let closed: Vec<bool> = states
        .iter()
        .map(|s| match s {
            LineState::Closed => true,
            LineState::Open => false,
            LineState::Free => {
                let c = free_values(k);
                k += 1;
                c
            }
        })
        .collect();
    SwitchVector::from_bools(&closed)
}

fn branch_and_bound(
    net: &Network,
    demand: &[f64],
    opts: &OtsOptions,
    mut inc: Incumbent,
    start: Instant,
) -> Result<OtsSolution, DispatchError> {
    let settings = QpSettings::default();
    let prune_gap = |inc: f64| 1e-9 * (1.0 + inc.abs());
    let constant = net.cost.constant();

    let mut open: Vec<Node> = Vec::new();
    let mut seq = 0usize;
    let mut next = Some(Node {
        states: vec![LineState::Free; net.n_line],
        bound: f64::NEG_INFINITY,
        seq,
    });
    let mut nodes = 0usize;
    let mut root_bound = None;

    loop {
        let node = match next.take() {
            Some(n) => n,
            None => {
                open.retain(|n| n.bound < inc.objective - prune_gap(inc.objective));
                let Some(best) = open
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.bound.total_cmp(&b.1.bound).then(a.1.seq.cmp(&b.1.seq)))
                    .map(|(i, _)| i)
                else {
                    break;
                };
                open.swap_remove(best)
            }
        };
        if opts.budget.expired(start, nodes) {
            return Ok(inc.into_solution(nodes, false, root_bound));
        }
        if node.bound >= inc.objective - prune_gap(inc.objective) {
            continue;
        }
        let mut node = node;
        if let Some(k) = opts.max_open {
            let n_open = node.states.iter().filter(|&&s| s == LineState::Open).count();
            if n_open > k {
                continue;
            }
            if n_open == k {
                // No switching budget left: every undecided line stays closed.
                for s in node.states.iter_mut().filter(|s| **s == LineState::Free) {
                    *s = LineState::Closed;
                }
            }
        }

        nodes += 1;
        let (qp, lay) = build_node(net, demand, &node.states, opts.max_open);
        let sol = solve_qp_with(&qp, &settings)?;
        if sol.status != QpStatus::Optimal {
            continue;
        }
        let bound = sol.objective + constant;
        if node.seq == 0 {
            root_bound = Some(bound);
        }
        if bound >= inc.objective - prune_gap(inc.objective) {
            continue;
        }

        let zvals: Vec<f64> = (0..lay.free.len()).map(|k| sol.x[lay.z(k)]).collect();

        // Rounding heuristic.
        let rounded = states_to_switch(&node.states, |k| zvals[k] >= 0.5);
        let rounded_ok = opts.max_open.is_none_or(|k| rounded.open_lines().len() <= k);
        if rounded_ok {
            let cand = solve_dcopf(net, demand, &rounded)?;
            inc.offer(rounded, cand);
        }

        let branch = zvals
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > INTEGRALITY_TOL && v < 1.0 - INTEGRALITY_TOL)
            .min_by(|a, b| (a.1 - 0.5).abs().total_cmp(&(b.1 - 0.5).abs()).then(a.0.cmp(&b.0)));
        let Some((k, &value)) = branch else {
            // Integral relaxation: the rounded topology was already offered.
            continue;
        };
        let line = lay.free[k];
        let mut closed = node.states.clone();
        closed[line] = LineState::Closed;
        let mut opened = node.states;
        opened[line] = LineState::Open;
        let (dive, park) = if value >= 0.5 { (closed, opened) } else { (opened, closed) };
        seq += 1;
        next = Some(Node {
            states: dive,
            bound,
            seq,
        });
        seq += 1;
        open.push(Node {
            states: park,
            bound,
            seq,
        });
    }
    Ok(inc.into_solution(nodes, true, root_bound))
}
