//! Per-unit DC network model.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::matpower::RawCase;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("no reference (type 3) bus")]
    NoRefBus,
    #[error("more than one reference (type 3) bus: ids {0} and {1}")]
    DuplicateRefBus(i64, i64),
    #[error("angle bound must be positive, got {0}")]
    NonpositiveThetaBound(f64),
    #[error("invalid network: {0}")]
    Invalid(String),
}

/// Polynomial generator cost in $/h, evaluated on per-unit dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostFunction {
    pub c2: Vec<f64>,
    pub c1: Vec<f64>,
    pub c0: Vec<f64>,
}

impl CostFunction {
    pub fn eval(&self, p_g: &[f64]) -> f64 {
        p_g.iter()
            .enumerate()
            .map(|(i, &p)| (self.c2[i] * p + self.c1[i]) * p + self.c0[i])
            .sum()
    }

    /// Gradient of the total cost with respect to each generator output.
    pub fn grad(&self, p_g: &[f64]) -> Vec<f64> {
        p_g.iter()
            .enumerate()
            .map(|(i, &p)| 2.0 * self.c2[i] * p + self.c1[i])
            .collect()
    }

    pub fn constant(&self) -> f64 {
        self.c0.iter().sum()
    }

    pub fn is_linear(&self) -> bool {
        self.c2.iter().all(|&c| c == 0.0)
    }
}

/// Options for turning a [`RawCase`] into a [`Network`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkOptions {
    /// Symmetric bus-angle bound in radians applied at every bus.
    pub theta_bound: f64,
    /// Rating used for branches with `rate_a = 0`. Defaults to ten times the
    /// total nominal demand.
    pub unlimited_rate_mw: Option<f64>,
}

impl NetworkOptions {
    pub fn new(theta_bound: f64) -> Self {
        Self {
            theta_bound,
            unlimited_rate_mw: None,
        }
    }
}

/// Plain description of a network in per-unit, used to build synthetic
/// instances without going through the case format.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParts {
    pub n_bus: usize,
    /// `(from, to, susceptance, flow_max)` per line.
    pub lines: Vec<(usize, usize, f64, f64)>,
    /// `(bus, gen_min, gen_max)` per generator.
    pub gens: Vec<(usize, f64, f64)>,
    pub cost: CostFunction,
    pub demand: Vec<f64>,
    pub ref_bus: usize,
    pub theta_bound: f64,
    pub base_mva: f64,
}

/// Immutable per-unit grid model.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub n_bus: usize,
    pub n_gen: usize,
    pub n_line: usize,
    /// `n_line x n_bus`, +1 at the from bus and -1 at the to bus.
    pub branch_incidence: DMatrix<f64>,
    /// `n_bus x n_gen`, a single 1 per column.
    pub gen_incidence: DMatrix<f64>,
    pub line_from: Vec<usize>,
    pub line_to: Vec<usize>,
    pub gen_bus: Vec<usize>,
    pub susceptance: Vec<f64>,
    pub flow_max: Vec<f64>,
    pub flow_min: Vec<f64>,
    pub gen_max: Vec<f64>,
    pub gen_min: Vec<f64>,
    pub theta_max: Vec<f64>,
    pub theta_min: Vec<f64>,
    pub ref_bus: usize,
    pub cost: CostFunction,
    pub nominal_demand: Vec<f64>,
    pub base_mva: f64,
}

/// Builds the network with the default rating cap for unlimited branches.
pub fn build_network(case: &RawCase, theta_bound: f64) -> Result<Network, NetworkError> {
    build_network_with(case, &NetworkOptions::new(theta_bound))
}

pub fn build_network_with(case: &RawCase, opts: &NetworkOptions) -> Result<Network, NetworkError> {
    if !(opts.theta_bound > 0.0) {
        return Err(NetworkError::NonpositiveThetaBound(opts.theta_bound));
    }
    let base = case.base_mva;

    let mut ref_id: Option<i64> = None;
    let mut ref_bus = 0;
    for (i, b) in case.bus_rows.iter().enumerate() {
        if b.bus_type == 3 {
            if let Some(prev) = ref_id {
                return Err(NetworkError::DuplicateRefBus(prev, b.bus_id));
            }
            ref_id = Some(b.bus_id);
            ref_bus = i;
        }
    }
    if ref_id.is_none() {
        return Err(NetworkError::NoRefBus);
    }

    let index_of = |id: i64| -> Result<usize, NetworkError> {
        case.bus_rows
            .iter()
            .position(|b| b.bus_id == id)
            .ok_or_else(|| NetworkError::Invalid(format!("unknown bus id {id}")))
    };

    let demand_mw: Vec<f64> = case.bus_rows.iter().map(|b| b.pd).collect();
    let total_mw: f64 = demand_mw.iter().sum();
    let cap_mw = opts.unlimited_rate_mw.unwrap_or(10.0 * total_mw.abs());

    let mut lines = Vec::with_capacity(case.branch_rows.len());
    for br in &case.branch_rows {
        let rate = if br.rate_a == 0.0 { cap_mw } else { br.rate_a };
        lines.push((
            index_of(br.from_bus)?,
            index_of(br.to_bus)?,
            1.0 / br.x,
            rate / base,
        ));
    }

    let mut gens = Vec::with_capacity(case.gen_rows.len());
    for g in &case.gen_rows {
        gens.push((index_of(g.bus_id)?, g.pmin / base, g.pmax / base));
    }

    let n_gen = gens.len();
    let mut cost = CostFunction {
        c2: vec![0.0; n_gen],
        c1: vec![0.0; n_gen],
        c0: vec![0.0; n_gen],
    };
    if case.gencost_rows.len() != n_gen {
        return Err(NetworkError::Invalid(format!(
            "{} cost rows for {} generators",
            case.gencost_rows.len(),
            n_gen
        )));
    }
    for (i, row) in case.gencost_rows.iter().enumerate() {
        // C(P) with P in MW; substitute P = base * p.
        let (a, b, c) = match row.coeffs.as_slice() {
            [a, b, c] => (*a, *b, *c),
            [b, c] => (0.0, *b, *c),
            _ => {
                return Err(NetworkError::Invalid(format!(
                    "cost row {i} has {} coefficients",
                    row.coeffs.len()
                )))
            }
        };
        cost.c2[i] = a * base * base;
        cost.c1[i] = b * base;
        cost.c0[i] = c;
    }

    Network::from_parts(NetworkParts {
        n_bus: case.bus_rows.len(),
        lines,
        gens,
        cost,
        demand: demand_mw.iter().map(|d| d / base).collect(),
        ref_bus,
        theta_bound: opts.theta_bound,
        base_mva: base,
    })
}

impl Network {
    /// Assembles and validates a network from per-unit parts.
    pub fn from_parts(parts: NetworkParts) -> Result<Self, NetworkError> {
        let NetworkParts {
            n_bus,
            lines,
            gens,
            cost,
            demand,
            ref_bus,
            theta_bound,
            base_mva,
        } = parts;
        let invalid = |msg: String| Err(NetworkError::Invalid(msg));

        if !(theta_bound > 0.0) {
            return Err(NetworkError::NonpositiveThetaBound(theta_bound));
        }
        if ref_bus >= n_bus {
            return Err(NetworkError::NoRefBus);
        }
        if demand.len() != n_bus {
            return invalid(format!("demand has length {}, expected {n_bus}", demand.len()));
        }
        let n_line = lines.len();
        let n_gen = gens.len();
        if cost.c2.len() != n_gen || cost.c1.len() != n_gen || cost.c0.len() != n_gen {
            return invalid("cost vectors do not match generator count".into());
        }
        if cost.c2.iter().any(|&c| c < 0.0) {
            return invalid("quadratic cost coefficients must be nonnegative".into());
        }

        let mut branch_incidence = DMatrix::zeros(n_line, n_bus);
        let mut line_from = Vec::with_capacity(n_line);
        let mut line_to = Vec::with_capacity(n_line);
        let mut susceptance = Vec::with_capacity(n_line);
        let mut flow_max = Vec::with_capacity(n_line);
        for (l, &(f, t, b, fmax)) in lines.iter().enumerate() {
            if f >= n_bus || t >= n_bus || f == t {
                return invalid(format!("line {l} has invalid endpoints ({f}, {t})"));
            }
            if !b.is_finite() || b == 0.0 {
                return invalid(format!("line {l} has susceptance {b}"));
            }
            if !(fmax > 0.0) {
                return invalid(format!("line {l} has nonpositive rating {fmax}"));
            }
            branch_incidence[(l, f)] = 1.0;
            branch_incidence[(l, t)] = -1.0;
            line_from.push(f);
            line_to.push(t);
            susceptance.push(b);
            flow_max.push(fmax);
        }

        let mut gen_incidence = DMatrix::zeros(n_bus, n_gen);
        let mut gen_bus = Vec::with_capacity(n_gen);
        let mut gen_min = Vec::with_capacity(n_gen);
        let mut gen_max = Vec::with_capacity(n_gen);
        for (g, &(bus, lo, hi)) in gens.iter().enumerate() {
            if bus >= n_bus {
                return invalid(format!("generator {g} at unknown bus {bus}"));
            }
            if !(lo <= hi) {
                return invalid(format!("generator {g} has min {lo} > max {hi}"));
            }
            gen_incidence[(bus, g)] = 1.0;
            gen_bus.push(bus);
            gen_min.push(lo);
            gen_max.push(hi);
        }

        Ok(Self {
            n_bus,
            n_gen,
            n_line,
            branch_incidence,
            gen_incidence,
            line_from,
            line_to,
            gen_bus,
            susceptance,
            flow_min: flow_max.iter().map(|f| -f).collect(),
            flow_max,
            gen_max,
            gen_min,
            theta_max: vec![theta_bound; n_bus],
            theta_min: vec![-theta_bound; n_bus],
            ref_bus,
            cost,
            nominal_demand: demand,
            base_mva,
        })
    }

    /// Bus susceptance matrix `C^T diag(z .* b) C` for the given line statuses.
    pub fn bus_susceptance(&self, z: &[f64]) -> DMatrix<f64> {
        let mut bbus = DMatrix::zeros(self.n_bus, self.n_bus);
        for l in 0..self.n_line {
            let w = z[l] * self.susceptance[l];
            let (f, t) = (self.line_from[l], self.line_to[l]);
            bbus[(f, f)] += w;
            bbus[(t, t)] += w;
            bbus[(f, t)] -= w;
            bbus[(t, f)] -= w;
        }
        bbus
    }

    /// Line flows `diag(z .* b) C theta`.
    pub fn line_flows(&self, z: &[f64], theta: &[f64]) -> Vec<f64> {
        (0..self.n_line)
            .map(|l| z[l] * self.susceptance[l] * (theta[self.line_from[l]] - theta[self.line_to[l]]))
            .collect()
    }

    /// Largest possible angle difference across each line under the angle box.
    pub fn angle_spread(&self, line: usize) -> f64 {
        let (f, t) = (self.line_from[line], self.line_to[line]);
        (self.theta_max[f] - self.theta_min[t]).max(self.theta_max[t] - self.theta_min[f])
    }

    pub fn total_gen_range(&self) -> (f64, f64) {
        (self.gen_min.iter().sum(), self.gen_max.iter().sum())
    }

    /// Copy of the network with a different symmetric angle bound.
    pub fn with_theta_bound(&self, theta_bound: f64) -> Result<Self, NetworkError> {
        if !(theta_bound > 0.0) {
            return Err(NetworkError::NonpositiveThetaBound(theta_bound));
        }
        let mut net = self.clone();
        net.theta_max = vec![theta_bound; self.n_bus];
        net.theta_min = vec![-theta_bound; self.n_bus];
        Ok(net)
    }

    /// Copy of the network whose quadratic cost terms are at least `eps`.
    pub fn with_min_quadratic_cost(&self, eps: f64) -> Self {
        let mut net = self.clone();
        for c in &mut net.cost.c2 {
            *c = c.max(eps);
        }
        net
    }

    /// Short content hash identifying this network.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let put_usize = |h: &mut Sha256, v: usize| h.update((v as u64).to_le_bytes());
        put_usize(&mut h, self.n_bus);
        put_usize(&mut h, self.n_gen);
        put_usize(&mut h, self.n_line);
        put_usize(&mut h, self.ref_bus);
        for v in self.line_from.iter().chain(&self.line_to).chain(&self.gen_bus) {
            put_usize(&mut h, *v);
        }
        let floats = [
            &self.susceptance,
            &self.flow_max,
            &self.flow_min,
            &self.gen_max,
            &self.gen_min,
            &self.theta_max,
            &self.theta_min,
            &self.cost.c2,
            &self.cost.c1,
            &self.cost.c0,
            &self.nominal_demand,
        ];
        for vec in floats {
            for v in vec.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
