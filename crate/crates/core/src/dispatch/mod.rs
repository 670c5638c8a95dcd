//! Economic dispatch, DC-OPF with relaxed or binary line statuses, and exact
//! DC-OTS.
//!
//! DC-OPF decision vector is `x = (p_g, theta)`. Row layout of the QP built by
//! [`build_dcopf`]:
//!
//! - equalities: one power-balance row per bus, then `theta_ref = 0`;
//! - inequalities: flow upper limits, flow lower limits, generator upper and
//!   lower limits, angle upper and lower limits (each block in index order).
//!
//! The line statuses enter through `z .* b` in the balance rows and the flow
//! rows, and through `z .* p_max`, `z .* p_min` in the flow right-hand sides.

mod ots;

use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::Network;
use crate::qp::{solve_qp_with, QpError, QpProblem, QpSettings, QpStatus};

pub use ots::{root_relaxation_bound, solve_ots_exact, OtsBudget, OtsMode, OtsOptions, OtsSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DispatchError {
    #[error("total demand {demand} outside the aggregate generation range [{min}, {max}]")]
    InfeasibleDemand { demand: f64, min: f64, max: f64 },
    #[error("the all-closed topology is infeasible, no incumbent to start from")]
    NoIncumbent,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid switch vector: {0}")]
    InvalidSwitch(String),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SwitchKind {
    Relaxed,
    Binary,
}

/// Line statuses, relaxed to `[0, 1]` or binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchVector {
    values: Vec<f64>,
    kind: SwitchKind,
}

impl SwitchVector {
    pub fn relaxed(values: Vec<f64>) -> Result<Self, DispatchError> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DispatchError::InvalidSwitch(format!("entry {v} outside [0, 1]")));
        }
        Ok(Self {
            values,
            kind: SwitchKind::Relaxed,
        })
    }

    pub fn binary(values: Vec<f64>) -> Result<Self, DispatchError> {
        if let Some(v) = values.iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(DispatchError::InvalidSwitch(format!("binary entry {v}")));
        }
        Ok(Self {
            values,
            kind: SwitchKind::Binary,
        })
    }

    pub fn from_bools(closed: &[bool]) -> Self {
        Self {
            values: closed.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect(),
            kind: SwitchKind::Binary,
        }
    }

    pub fn all_closed(n_line: usize) -> Self {
        Self {
            values: vec![1.0; n_line],
            kind: SwitchKind::Binary,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> SwitchKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Indices of lines that are open in a binary vector.
    pub fn open_lines(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Result of an ED, DC-OPF or OTS sub-solve.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSolution {
    pub p_g: Vec<f64>,
    pub theta: Vec<f64>,
    /// Generation cost in $/h (including constant terms).
    pub objective: f64,
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    /// Hash of the `(demand, z)` arguments that produced this solution.
    pub key: u64,
}

impl DispatchSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

pub fn solve_key(demand: &[f64], z: &[f64]) -> u64 {
    let mut h = DefaultHasher::new();
    for v in demand.iter().chain(z) {
        v.to_bits().hash(&mut h);
    }
    demand.len().hash(&mut h);
    h.finish()
}

fn check_demand(net: &Network, demand: &[f64]) -> Result<(), DispatchError> {
    if demand.len() != net.n_bus {
        return Err(DispatchError::DimensionMismatch(format!(
            "demand has length {}, network has {} buses",
            demand.len(),
            net.n_bus
        )));
    }
    Ok(())
}

/// Economic dispatch: cheapest generation meeting total demand, ignoring the
/// network.
pub fn solve_ed(net: &Network, demand: &[f64]) -> Result<DispatchSolution, DispatchError> {
    check_demand(net, demand)?;
    let total: f64 = demand.iter().sum();
    let (lo, hi) = net.total_gen_range();
    let slack = 1e-9 * (1.0 + total.abs());
    if total < lo - slack || total > hi + slack {
        return Err(DispatchError::InfeasibleDemand {
            demand: total,
            min: lo,
            max: hi,
        });
    }
    let ng = net.n_gen;
    let mut ineq_mat = DMatrix::zeros(2 * ng, ng);
    let mut ineq_rhs = DVector::zeros(2 * ng);
    for g in 0..ng {
        ineq_mat[(g, g)] = 1.0;
        ineq_rhs[g] = net.gen_max[g];
        ineq_mat[(ng + g, g)] = -1.0;
        ineq_rhs[ng + g] = -net.gen_min[g];
    }
    let qp = QpProblem {
        quad: DMatrix::from_diagonal(&DVector::from_iterator(ng, net.cost.c2.iter().map(|c| 2.0 * c))),
        lin: DVector::from_column_slice(&net.cost.c1),
        eq_mat: DMatrix::from_element(1, ng, 1.0),
        eq_rhs: DVector::from_element(1, total),
        ineq_mat,
        ineq_rhs,
    };
    let sol = solve_qp_with(&qp, &QpSettings::default())?;
    let p_g: Vec<f64> = sol.x.iter().copied().collect();
    Ok(DispatchSolution {
        objective: if sol.status == QpStatus::Optimal {
            net.cost.eval(&p_g)
        } else {
            f64::NAN
        },
        p_g,
        theta: vec![0.0; net.n_bus],
        lambda: sol.lambda.iter().copied().collect(),
        mu: sol.mu.iter().copied().collect(),
        status: sol.status,
        iterations: sol.iterations,
        key: solve_key(demand, &[]),
    })
}

/// Row offsets of the inequality blocks in [`build_dcopf`].
#[derive(Debug, Clone, Copy)]
pub struct OpfLayout {
    pub n_gen: usize,
    pub n_bus: usize,
    pub n_line: usize,
}

impl OpfLayout {
    pub fn new(net: &Network) -> Self {
        Self {
            n_gen: net.n_gen,
            n_bus: net.n_bus,
            n_line: net.n_line,
        }
    }
    pub fn n_var(&self) -> usize {
        self.n_gen + self.n_bus
    }
    pub fn theta(&self, bus: usize) -> usize {
        self.n_gen + bus
    }
    pub fn n_eq(&self) -> usize {
        self.n_bus + 1
    }
    pub fn ref_row(&self) -> usize {
        self.n_bus
    }
    pub fn flow_upper(&self, line: usize) -> usize {
        line
    }
    pub fn flow_lower(&self, line: usize) -> usize {
        self.n_line + line
    }
    pub fn gen_upper(&self, g: usize) -> usize {
        2 * self.n_line + g
    }
    pub fn gen_lower(&self, g: usize) -> usize {
        2 * self.n_line + self.n_gen + g
    }
    pub fn theta_upper(&self, bus: usize) -> usize {
        2 * self.n_line + 2 * self.n_gen + bus
    }
    pub fn theta_lower(&self, bus: usize) -> usize {
        2 * self.n_line + 2 * self.n_gen + self.n_bus + bus
    }
    pub fn n_ineq(&self) -> usize {
        2 * self.n_line + 2 * self.n_gen + 2 * self.n_bus
    }
}

/// Builds the DC-OPF QP for the given demand and line statuses.
pub fn build_dcopf(net: &Network, demand: &[f64], z: &SwitchVector) -> QpProblem {
    let lay = OpfLayout::new(net);
    let (ng, nb, nl) = (net.n_gen, net.n_bus, net.n_line);
    let zv = z.values();

    let mut quad = DMatrix::zeros(lay.n_var(), lay.n_var());
    let mut lin = DVector::zeros(lay.n_var());
    for g in 0..ng {
        quad[(g, g)] = 2.0 * net.cost.c2[g];
        lin[g] = net.cost.c1[g];
    }

    // M p_g - B(z) theta = p_d ; theta_ref = 0
    let mut eq_mat = DMatrix::zeros(lay.n_eq(), lay.n_var());
    let mut eq_rhs = DVector::zeros(lay.n_eq());
    for g in 0..ng {
        eq_mat[(net.gen_bus[g], g)] = 1.0;
    }
    for l in 0..nl {
        let w = zv[l] * net.susceptance[l];
        let (f, t) = (net.line_from[l], net.line_to[l]);
        eq_mat[(f, lay.theta(f))] -= w;
        eq_mat[(f, lay.theta(t))] += w;
        eq_mat[(t, lay.theta(t))] -= w;
        eq_mat[(t, lay.theta(f))] += w;
    }
    for i in 0..nb {
        eq_rhs[i] = demand[i];
    }
    eq_mat[(lay.ref_row(), lay.theta(net.ref_bus))] = 1.0;

    let mut ineq_mat = DMatrix::zeros(lay.n_ineq(), lay.n_var());
    let mut ineq_rhs = DVector::zeros(lay.n_ineq());
    for l in 0..nl {
        let w = zv[l] * net.susceptance[l];
        let (f, t) = (net.line_from[l], net.line_to[l]);
        let up = lay.flow_upper(l);
        ineq_mat[(up, lay.theta(f))] = w;
        ineq_mat[(up, lay.theta(t))] = -w;
        ineq_rhs[up] = zv[l] * net.flow_max[l];
        let lo = lay.flow_lower(l);
        ineq_mat[(lo, lay.theta(f))] = -w;
        ineq_mat[(lo, lay.theta(t))] = w;
        ineq_rhs[lo] = -zv[l] * net.flow_min[l];
    }
    for g in 0..ng {
        ineq_mat[(lay.gen_upper(g), g)] = 1.0;
        ineq_rhs[lay.gen_upper(g)] = net.gen_max[g];
        ineq_mat[(lay.gen_lower(g), g)] = -1.0;
        ineq_rhs[lay.gen_lower(g)] = -net.gen_min[g];
    }
    for i in 0..nb {
        ineq_mat[(lay.theta_upper(i), lay.theta(i))] = 1.0;
        ineq_rhs[lay.theta_upper(i)] = net.theta_max[i];
        ineq_mat[(lay.theta_lower(i), lay.theta(i))] = -1.0;
        ineq_rhs[lay.theta_lower(i)] = -net.theta_min[i];
    }

    QpProblem {
        quad,
        lin,
        eq_mat,
        eq_rhs,
        ineq_mat,
        ineq_rhs,
    }
}

/// DC-OPF at the given line statuses. An infeasible topology is reported
/// through `status`, not as an error.
pub fn solve_dcopf(net: &Network, demand: &[f64], z: &SwitchVector) -> Result<DispatchSolution, DispatchError> {
    solve_dcopf_with(net, demand, z, &QpSettings::default())
}

pub fn solve_dcopf_with(
    net: &Network,
    demand: &[f64],
    z: &SwitchVector,
    settings: &QpSettings,
) -> Result<DispatchSolution, DispatchError> {
    check_demand(net, demand)?;
    if z.len() != net.n_line {
        return Err(DispatchError::DimensionMismatch(format!(
            "switch vector has length {}, network has {} lines",
            z.len(),
            net.n_line
        )));
    }
    let qp = build_dcopf(net, demand, z);
    let sol = solve_qp_with(&qp, settings)?;
    let ng = net.n_gen;
    let p_g: Vec<f64> = sol.x.rows(0, ng).iter().copied().collect();
    let mut theta: Vec<f64> = sol.x.rows(ng, net.n_bus).iter().copied().collect();
    if sol.status == QpStatus::Optimal {
        theta[net.ref_bus] = 0.0;
    }
    Ok(DispatchSolution {
        objective: if sol.status == QpStatus::Optimal {
            net.cost.eval(&p_g)
        } else {
            f64::NAN
        },
        p_g,
        theta,
        lambda: sol.lambda.iter().copied().collect(),
        mu: sol.mu.iter().copied().collect(),
        status: sol.status,
        iterations: sol.iterations,
        key: solve_key(demand, z.values()),
    })
}

/// Largest violation of the DC-OTS constraints by `(z, p_g, theta)`,
/// evaluated directly from the network data.
pub fn ots_violation(net: &Network, demand: &[f64], z: &[f64], p_g: &[f64], theta: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    let mut injection = vec![0.0; net.n_bus];
    for (g, &p) in p_g.iter().enumerate() {
        injection[net.gen_bus[g]] += p;
        worst = worst.max(p - net.gen_max[g]).max(net.gen_min[g] - p);
    }
    for (i, d) in demand.iter().enumerate() {
        injection[i] -= d;
    }
    for l in 0..net.n_line {
        let (f, t) = (net.line_from[l], net.line_to[l]);
        let flow = z[l] * net.susceptance[l] * (theta[f] - theta[t]);
        injection[f] -= flow;
        injection[t] += flow;
        worst = worst
            .max(flow - z[l] * net.flow_max[l])
            .max(z[l] * net.flow_min[l] - flow);
    }
    for (i, inj) in injection.iter().enumerate() {
        worst = worst.max(inj.abs());
        worst = worst.max(theta[i] - net.theta_max[i]).max(net.theta_min[i] - theta[i]);
    }
    worst.max(theta[net.ref_bus].abs())
}
