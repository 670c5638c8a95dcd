//! Seeded random DC networks for oracle and gradient tests.
//!
//! A network is a random spanning tree plus a few extra lines, with two or
//! three quadratic-cost generators. Ratings come from an unconstrained
//! DC-OPF: each line's rating is its unconstrained flow scaled by a random
//! factor in `[0.6, 1.4]`, so roughly half the lines end up congested. Draws
//! whose all-closed DC-OPF is infeasible are rejected.

use rand::Rng;

use crate::dispatch::{solve_dcopf, SwitchVector};
use crate::network::{CostFunction, Network, NetworkParts};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub min_bus: usize,
    pub max_bus: usize,
    pub max_lines: usize,
    pub theta_bound: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            min_bus: 4,
            max_bus: 8,
            max_lines: 12,
            theta_bound: 1.0,
        }
    }
}

/// Draws a random network whose all-closed DC-OPF is feasible at its
/// nominal demand.
pub fn random_network<R: Rng>(rng: &mut R, spec: &SyntheticSpec) -> Network {
    loop {
        if let Some(net) = try_draw(rng, spec) {
            return net;
        }
    }
}

fn try_draw<R: Rng>(rng: &mut R, spec: &SyntheticSpec) -> Option<Network> {
    let n = rng.gen_range(spec.min_bus..=spec.max_bus);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
    let n_extra = rng.gen_range(1..=n).min(spec.max_lines.saturating_sub(edges.len()));
    let mut attempts = 0;
    while edges.len() < n - 1 + n_extra && attempts < 100 {
        attempts += 1;
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        let e = (a.min(b), a.max(b));
        if a != b && !edges.contains(&e) {
            edges.push(e);
        }
    }
    let susceptance: Vec<f64> = edges.iter().map(|_| 1.0 / rng.gen_range(0.05..0.3)).collect();

    let n_gen = rng.gen_range(2..=3.min(n));
    let mut gen_buses: Vec<usize> = Vec::new();
    while gen_buses.len() < n_gen {
        let b = rng.gen_range(0..n);
        if !gen_buses.contains(&b) {
            gen_buses.push(b);
        }
    }
    let gen_max: Vec<f64> = (0..n_gen).map(|_| rng.gen_range(1.0..3.0)).collect();
    let cost = CostFunction {
        c2: (0..n_gen).map(|_| rng.gen_range(100.0..1000.0)).collect(),
        c1: (0..n_gen).map(|_| rng.gen_range(1000.0..5000.0)).collect(),
        c0: vec![0.0; n_gen],
    };
    let mut demand: Vec<f64> = (0..n)
        .map(|i| {
            if !gen_buses.contains(&i) && rng.gen_bool(0.8) {
                rng.gen_range(0.2..0.8)
            } else {
                0.0
            }
        })
        .collect();
    if demand.iter().all(|&d| d == 0.0) {
        let i = (0..n).find(|i| !gen_buses.contains(i)).unwrap_or(0);
        demand[i] = 0.5;
    }
    let total: f64 = demand.iter().sum();
    let cap: f64 = gen_max.iter().sum();
    if total > 0.6 * cap {
        let s = 0.6 * cap / total;
        demand.iter_mut().for_each(|d| *d *= s);
    }
    let ref_bus = gen_buses[0];

    let make = |ratings: &[f64]| {
        Network::from_parts(NetworkParts {
            n_bus: n,
            lines: edges
                .iter()
                .zip(&susceptance)
                .zip(ratings)
                .map(|((&(f, t), &b), &r)| (f, t, b, r))
                .collect(),
            gens: gen_buses.iter().zip(&gen_max).map(|(&b, &m)| (b, 0.0, m)).collect(),
            cost: cost.clone(),
            demand: demand.clone(),
            ref_bus,
            theta_bound: spec.theta_bound,
            base_mva: 100.0,
        })
        .ok()
    };

    let loose = make(&vec![10.0 * cap; edges.len()])?;
    let closed = SwitchVector::all_closed(edges.len());
    let free = solve_dcopf(&loose, &demand, &closed).ok()?;
    if !free.is_optimal() {
        return None;
    }
    let ratings: Vec<f64> = (0..edges.len())
        .map(|l| {
            let (f, t) = edges[l];
            let flow = susceptance[l] * (free.theta[f] - free.theta[t]);
            (flow.abs() * rng.gen_range(0.6..1.4)).max(0.05)
        })
        .collect();
    let net = make(&ratings)?;
    let sol = solve_dcopf(&net, &demand, &closed).ok()?;
    sol.is_optimal().then_some(net)
}
