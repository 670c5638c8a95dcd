//! DC-OPF as a differentiable layer in the relaxed line statuses.
//!
//! The forward pass is [`solve_dcopf`] at a relaxed `z`. The backward pass
//! differentiates the KKT residual
//!
//! ```text
//! F(x, lambda, mu; z) = [ Q x + c + A(z)' lambda + G(z)' mu ]
//!                       [ A(z) x - p_d                       ]
//!                       [ diag(mu) (G(z) x - h(z))           ]
//! ```
//!
//! and returns `dL/dz = -y' dF/dz` where `J' y = [dL/dx; 0; 0]` and `J` is
//! the Jacobian of `F` with respect to `(x, lambda, mu)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dispatch::{build_dcopf, solve_dcopf, solve_key, DispatchError, DispatchSolution, OpfLayout, SwitchKind, SwitchVector};
use crate::network::Network;
use crate::qp::QpProblem;

/// Diagonal shift added to the adjoint system when it is singular (weakly
/// active constraints). Not applied otherwise: even a tiny shift visibly
/// biases gradients on ill-conditioned but regular systems.
pub const TIKHONOV: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffOpfError {
    #[error("DC-OPF is infeasible at the given relaxed line statuses")]
    InfeasibleForward,
    #[error("KKT system is singular (condition estimate {condition:e})")]
    SingularKkt { condition: f64 },
    #[error("solution does not match the arguments passed to backward")]
    StaleSolution,
    #[error("switch vector must be relaxed")]
    NotRelaxed,
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    /// Derivative of the loss with respect to each relaxed line status.
    pub dcost_dz: Vec<f64>,
    /// `||J' y - rhs||_inf / (1 + ||rhs||_inf)` of the adjoint solve.
    pub solve_residual: f64,
}

/// Jacobian of the KKT residual with respect to `(x, lambda, mu)`.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub jacobian: DMatrix<f64>,
    pub n_var: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
}

impl KktSystem {
    pub fn assemble(qp: &QpProblem, x: &DVector<f64>, mu: &DVector<f64>) -> Self {
        let (n, me, mi) = (qp.n_var(), qp.n_eq(), qp.n_ineq());
        let mut j = DMatrix::zeros(n + me + mi, n + me + mi);
        j.view_mut((0, 0), (n, n)).copy_from(&qp.quad);
        j.view_mut((0, n), (n, me)).copy_from(&qp.eq_mat.transpose());
        j.view_mut((0, n + me), (n, mi)).copy_from(&qp.ineq_mat.transpose());
        j.view_mut((n, 0), (me, n)).copy_from(&qp.eq_mat);
        let slack = &qp.ineq_mat * x - &qp.ineq_rhs;
        for i in 0..mi {
            for c in 0..n {
                j[(n + me + i, c)] = mu[i] * qp.ineq_mat[(i, c)];
            }
            j[(n + me + i, n + me + i)] = slack[i];
        }
        Self {
            jacobian: j,
            n_var: n,
            n_eq: me,
            n_ineq: mi,
        }
    }

    fn dim(&self) -> usize {
        self.n_var + self.n_eq + self.n_ineq
    }
}

/// Forward pass: DC-OPF at relaxed line statuses.
pub fn forward(net: &Network, demand: &[f64], z: &SwitchVector) -> Result<DispatchSolution, DiffOpfError> {
    if z.kind() != SwitchKind::Relaxed {
        return Err(DiffOpfError::NotRelaxed);
    }
    let sol = solve_dcopf(net, demand, z)?;
    if !sol.is_optimal() {
        return Err(DiffOpfError::InfeasibleForward);
    }
    Ok(sol)
}

fn stacked(sol: &DispatchSolution) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let x = DVector::from_iterator(sol.p_g.len() + sol.theta.len(), sol.p_g.iter().chain(&sol.theta).copied());
    (x, DVector::from_column_slice(&sol.lambda), DVector::from_column_slice(&sol.mu))
}

/// `dF/dz_k` for every line, as columns of an `(n + m_e + m_i) x n_line`
/// matrix.
fn residual_param_jacobian(
    net: &Network,
    x: &DVector<f64>,
    lambda: &DVector<f64>,
    mu: &DVector<f64>,
) -> DMatrix<f64> {
    let lay = OpfLayout::new(net);
    let (n, me) = (lay.n_var(), lay.n_eq());
    let mut d = DMatrix::zeros(n + me + lay.n_ineq(), net.n_line);
    for l in 0..net.n_line {
        let b = net.susceptance[l];
        let (f, t) = (net.line_from[l], net.line_to[l]);
        let (tf, tt) = (lay.theta(f), lay.theta(t));
        let dtheta = x[tf] - x[tt];
        // dA/dz_l has entries at (f, tf) = -b, (f, tt) = +b, (t, tt) = -b, (t, tf) = +b.
        // Stationarity: dA'/dz lambda + dG'/dz mu.
        let dl = b * (lambda[t] - lambda[f]);
        let (up, lo) = (lay.flow_upper(l), lay.flow_lower(l));
        let dm = b * (mu[up] - mu[lo]);
        d[(tf, l)] += dl + dm;
        d[(tt, l)] -= dl + dm;
        // Balance rows: dA/dz x.
        d[(n + f, l)] = -b * dtheta;
        d[(n + t, l)] = b * dtheta;
        // Complementarity: mu_i (dG_i/dz x - dh_i/dz).
        d[(n + me + up, l)] = mu[up] * (b * dtheta - net.flow_max[l]);
        d[(n + me + lo, l)] = mu[lo] * (-b * dtheta + net.flow_min[l]);
    }
    d
}

fn factor_adjoint(kkt: &KktSystem) -> nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn> {
    let lu = kkt.jacobian.clone().lu();
    if lu.is_invertible() {
        return lu;
    }
    let dim = kkt.dim();
    (&kkt.jacobian + DMatrix::identity(dim, dim) * TIKHONOV).lu()
}

/// Solves `m y = rhs`, retrying with the [`TIKHONOV`] shift when `m` is
/// singular.
fn solve_shifted(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, DiffOpfError> {
    let finite = |y: &DVector<f64>| y.iter().all(|v| v.is_finite());
    if let Some(y) = m.clone().lu().solve(rhs).filter(finite) {
        return Ok(y);
    }
    let shifted = m + DMatrix::identity(m.nrows(), m.ncols()) * TIKHONOV;
    match shifted.clone().lu().solve(rhs) {
        Some(y) if finite(&y) => Ok(y),
        _ => Err(DiffOpfError::SingularKkt { condition: condition_estimate(&shifted) }),
    }
}

fn check_solution(net: &Network, demand: &[f64], z: &SwitchVector, sol: &DispatchSolution) -> Result<(), DiffOpfError> {
    if z.kind() != SwitchKind::Relaxed {
        return Err(DiffOpfError::NotRelaxed);
    }
    if !sol.is_optimal() {
        return Err(DiffOpfError::InfeasibleForward);
    }
    if sol.key != solve_key(demand, z.values())
        || sol.p_g.len() != net.n_gen
        || sol.theta.len() != net.n_bus
        || sol.mu.len() != OpfLayout::new(net).n_ineq()
    {
        return Err(DiffOpfError::StaleSolution);
    }
    Ok(())
}

/// Backward pass: gradient of the loss with respect to `z`, given
/// `upstream = dL/dp_g` at the forward solution.
pub fn backward(
    net: &Network,
    demand: &[f64],
    z: &SwitchVector,
    sol: &DispatchSolution,
    upstream: &[f64],
) -> Result<GradResult, DiffOpfError> {
    check_solution(net, demand, z, sol)?;
    if upstream.len() != net.n_gen {
        return Err(DispatchError::DimensionMismatch(format!(
            "upstream has length {}, network has {} generators",
            upstream.len(),
            net.n_gen
        ))
        .into());
    }
    let qp = build_dcopf(net, demand, z);
    let (x, lambda, mu) = stacked(sol);
    let kkt = KktSystem::assemble(&qp, &x, &mu);
    let mut rhs = DVector::zeros(kkt.dim());
    rhs.rows_mut(0, net.n_gen).copy_from_slice(upstream);

    let jt = kkt.jacobian.transpose();
    let y = solve_shifted(&jt, &rhs)?;
    let solve_residual = (&jt * &y - &rhs).amax() / (1.0 + rhs.amax());

    let dfdz = residual_param_jacobian(net, &x, &lambda, &mu);
    let grad = -(dfdz.transpose() * y);
    Ok(GradResult {
        dcost_dz: grad.iter().copied().collect(),
        solve_residual,
    })
}

/// Full sensitivity `dx/dz` (columns per line), solved column by column.
/// Meant for small instances and for checking [`backward`].
pub fn solution_jacobian(
    net: &Network,
    demand: &[f64],
    z: &SwitchVector,
    sol: &DispatchSolution,
) -> Result<DMatrix<f64>, DiffOpfError> {
    check_solution(net, demand, z, sol)?;
    let qp = build_dcopf(net, demand, z);
    let (x, lambda, mu) = stacked(sol);
    let kkt = KktSystem::assemble(&qp, &x, &mu);
    let lu = factor_adjoint(&kkt);
    let dfdz = residual_param_jacobian(net, &x, &lambda, &mu);
    let full = lu
        .solve(&(-dfdz))
        .ok_or_else(|| DiffOpfError::SingularKkt {
            condition: condition_estimate(&kkt.jacobian),
        })?;
    Ok(full.rows(0, kkt.n_var).into_owned())
}

/// Envelope-theorem derivative of the optimal objective with respect to `z`:
/// the partial derivative of the Lagrangian at the optimum. Independent of
/// the adjoint solve, so useful as a cross-check.
pub fn envelope_gradient(net: &Network, sol: &DispatchSolution) -> Vec<f64> {
    let lay = OpfLayout::new(net);
    (0..net.n_line)
        .map(|l| {
            let b = net.susceptance[l];
            let (f, t) = (net.line_from[l], net.line_to[l]);
            let dtheta = sol.theta[f] - sol.theta[t];
            let balance = sol.lambda[f] * (-b * dtheta) + sol.lambda[t] * (b * dtheta);
            let upper = sol.mu[lay.flow_upper(l)] * (b * dtheta - net.flow_max[l]);
            let lower = sol.mu[lay.flow_lower(l)] * (-b * dtheta + net.flow_min[l]);
            balance + upper + lower
        })
        .collect()
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Smallest `|mu_i| + |slack_i|` over the inequality rows: a measure of how
/// strictly complementary the solution is.
pub fn complementarity_margin(net: &Network, demand: &[f64], z: &SwitchVector, sol: &DispatchSolution) -> f64 {
    let qp = build_dcopf(net, demand, z);
    let (x, _, mu) = stacked(sol);
    let slack = &qp.ineq_mat * &x - &qp.ineq_rhs;
    mu.iter()
        .zip(slack.iter())
        .map(|(m, s)| m.abs() + s.abs())
        .fold(f64::INFINITY, f64::min)
}

/// Set of inequality rows that are active (multiplier above slack).
pub fn active_set(sol: &DispatchSolution, net: &Network, demand: &[f64], z: &SwitchVector) -> Vec<bool> {
    let qp = build_dcopf(net, demand, z);
    let (x, _, mu) = stacked(sol);
    let slack = &qp.ineq_mat * &x - &qp.ineq_rhs;
    mu.iter().zip(slack.iter()).map(|(m, s)| m.abs() > s.abs()).collect()
}

/// Whether the equality rows and the active inequality rows are linearly
/// independent. Without this the multipliers are not unique and the
/// adjoint system is singular.
pub fn independent_active_rows(net: &Network, demand: &[f64], z: &SwitchVector, sol: &DispatchSolution) -> bool {
    let qp = build_dcopf(net, demand, z);
    let active = active_set(sol, net, demand, z);
    let rows: Vec<_> = (0..qp.n_eq())
        .map(|i| qp.eq_mat.row(i).into_owned())
        .chain(active.iter().enumerate().filter(|(_, a)| **a).map(|(i, _)| qp.ineq_mat.row(i).into_owned()))
        .collect();
    if rows.len() > qp.n_var() {
        return false;
    }
    let sv = DMatrix::from_rows(&rows).singular_values();
    sv.min() > INDEPENDENCE_TOL * sv.max()
}

/// Relative singular-value floor used by [`independent_active_rows`].
pub const INDEPENDENCE_TOL: f64 = 1e-8;

/// Finite-difference step used by [`gradcheck`].
pub const FD_STEP: f64 = 1e-5;
/// Minimum `|mu_i| + |slack_i|` for an instance to count as strictly
/// complementary.
pub const STRICT_MARGIN: f64 = 1e-5;

/// Outcome of a gradient check over random instances.
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct GradcheckReport {
    /// Largest componentwise relative error per accepted instance.
    pub errors: Vec<f64>,
    /// Draws rejected because they were infeasible, degenerate, or crossed
    /// an active-set change within the finite-difference stencil.
    pub rejected: usize,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.max_error() <= tol
    }
}

/// Compares [`backward`] with central differences of the forward objective
/// at one `(demand, z)`. Returns `None` when the instance is not eligible:
/// infeasible, not strictly complementary, with dependent active rows, or
/// with an active set that changes inside the stencil.
pub fn check_instance(net: &Network, demand: &[f64], z: &[f64]) -> Result<Option<f64>, DiffOpfError> {
    let zv = SwitchVector::relaxed(z.to_vec())?;
    let sol = match forward(net, demand, &zv) {
        Ok(s) => s,
        Err(DiffOpfError::InfeasibleForward) => return Ok(None),
        Err(e) => return Err(e),
    };
    if complementarity_margin(net, demand, &zv, &sol) <= STRICT_MARGIN {
        return Ok(None);
    }
    if !independent_active_rows(net, demand, &zv, &sol) {
        return Ok(None);
    }
    let active = active_set(&sol, net, demand, &zv);
    let grad = backward(net, demand, &zv, &sol, &net.cost.grad(&sol.p_g))?;
    let mut worst = 0.0f64;
    for k in 0..z.len() {
        let mut side = [0.0; 2];
        for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut zs = z.to_vec();
            zs[k] += sign * FD_STEP;
            let Ok(zs) = SwitchVector::relaxed(zs) else {
                return Ok(None);
            };
            let s = solve_dcopf(net, demand, &zs)?;
            if !s.is_optimal() || active_set(&s, net, demand, &zs) != active {
                return Ok(None);
            }
            side[slot] = s.objective;
        }
        let fd = (side[0] - side[1]) / (2.0 * FD_STEP);
        let g = grad.dcost_dz[k];
        worst = worst.max((g - fd).abs() / (1.0 + g.abs()));
    }
    Ok(Some(worst))
}

/// Runs [`check_instance`] on random draws around the nominal demand until
/// `trials` instances are accepted (or `20 * trials` draws are spent).
/// Demands are scaled per bus by `U[1, 1.1]` and `z` is drawn from
/// `U[0.8, 0.99]`.
pub fn gradcheck<R: rand::Rng>(net: &Network, trials: usize, rng: &mut R) -> Result<GradcheckReport, DiffOpfError> {
    let mut report = GradcheckReport::default();
    let mut draws = 0;
    while report.errors.len() < trials && draws < 20 * trials {
        draws += 1;
        let demand: Vec<f64> = net.nominal_demand.iter().map(|d| d * rng.gen_range(1.0..1.1)).collect();
        let z: Vec<f64> = (0..net.n_line).map(|_| rng.gen_range(0.8..0.99)).collect();
        match check_instance(net, &demand, &z)? {
            Some(e) => report.errors.push(e),
            None => report.rejected += 1,
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cases;
    use crate::matpower::parse_case;
    use crate::network::build_network;

    fn net(text: &str) -> Network {
        build_network(&parse_case(text).unwrap(), 0.5).unwrap()
    }

    fn fd_gradient(net: &Network, demand: &[f64], z: &[f64], h: f64, embed: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
        (0..z.len())
            .map(|k| {
                let mut zp = z.to_vec();
                let mut zm = z.to_vec();
                zp[k] += h;
                zm[k] -= h;
                let fp = solve_dcopf(net, demand, &SwitchVector::relaxed(embed(&zp)).unwrap()).unwrap();
                let fm = solve_dcopf(net, demand, &SwitchVector::relaxed(embed(&zm)).unwrap()).unwrap();
                (fp.objective - fm.objective) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn case2_forward_examples() {
        let n = net(cases::CASE2);
        let d = n.nominal_demand.clone();
        let sol = forward(&n, &d, &SwitchVector::relaxed(vec![0.9]).unwrap()).unwrap();
        assert!((sol.p_g[0] - 1.0).abs() < 1e-7);
        assert!((sol.theta[1] + 1.0 / 9.0).abs() < 1e-7);
        assert!((sol.objective - 1000.0).abs() < 1e-6);

        let relaxed_one = forward(&n, &d, &SwitchVector::relaxed(vec![1.0]).unwrap()).unwrap();
        let plain = solve_dcopf(&n, &d, &SwitchVector::all_closed(1)).unwrap();
        assert_eq!(relaxed_one.p_g, plain.p_g);
        assert_eq!(relaxed_one.theta, plain.theta);

        assert_eq!(
            forward(&n, &d, &SwitchVector::relaxed(vec![0.5]).unwrap()),
            Err(DiffOpfError::InfeasibleForward)
        );
    }

    #[test]
    fn case2_gradient_is_zero() {
        let n = net(cases::CASE2);
        let d = n.nominal_demand.clone();
        let z = SwitchVector::relaxed(vec![0.9]).unwrap();
        let sol = forward(&n, &d, &z).unwrap();
        let g = backward(&n, &d, &z, &sol, &n.cost.grad(&sol.p_g)).unwrap();
        assert!(g.dcost_dz[0].abs() < 1e-6, "{:?}", g);
        let fd = fd_gradient(&n, &d, z.values(), 1e-5, |v| v.to_vec());
        assert!(fd[0].abs() < 1e-4);
    }

    #[test]
    fn case3b_direct_line_gradient() {
        // With A-C slightly below 1 the flow limit on A-C binds; the
        // angle-difference limit pbar/b does not depend on z, so raising z on
        // A-C relaxes nothing and the gradient matches finite differences.
        let n = net(cases::CASE3B);
        let d = n.nominal_demand.clone();
        let z = SwitchVector::relaxed(vec![1.0, 1.0, 0.95]).unwrap();
        let sol = forward(&n, &d, &z).unwrap();
        let g = backward(&n, &d, &z, &sol, &n.cost.grad(&sol.p_g)).unwrap();
        let fd = fd_gradient(&n, &d, &[0.95], 1e-5, |v| vec![1.0, 1.0, v[0]]);
        assert!((g.dcost_dz[2] - fd[0]).abs() <= 1e-4 * (1.0 + fd[0].abs()), "{g:?} vs {fd:?}");
        assert!((g.dcost_dz[2] + 2400.0).abs() < 1e-3, "{:?}", g.dcost_dz);
        assert!(g.solve_residual <= 1e-6);

        let z = SwitchVector::relaxed(vec![0.98, 0.99, 0.95]).unwrap();
        let sol = forward(&n, &d, &z).unwrap();
        let g = backward(&n, &d, &z, &sol, &n.cost.grad(&sol.p_g)).unwrap();
        let fd = fd_gradient(&n, &d, z.values(), 1e-5, |v| v.to_vec());
        for k in 0..3 {
            assert!((g.dcost_dz[k] - fd[k]).abs() <= 1e-4 * (1.0 + fd[k].abs()), "{g:?} vs {fd:?}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let n = net(cases::CASE3B);
        let d = n.nominal_demand.clone();
        let z = SwitchVector::relaxed(vec![0.9, 0.95, 0.85]).unwrap();
        let sol = forward(&n, &d, &z).unwrap();
        let g = backward(&n, &d, &z, &sol, &[0.0, 0.0]).unwrap();
        assert!(g.dcost_dz.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_matches_envelope_and_full_jacobian() {
        let n = net(cases::CASE3B);
        let d = n.nominal_demand.clone();
        let z = SwitchVector::relaxed(vec![0.9, 0.95, 0.85]).unwrap();
        let sol = forward(&n, &d, &z).unwrap();
        let up = n.cost.grad(&sol.p_g);
        let g = backward(&n, &d, &z, &sol, &up).unwrap();
        let env = envelope_gradient(&n, &sol);
        let jac = solution_jacobian(&n, &d, &z, &sol).unwrap();
        for k in 0..3 {
            let via_jac: f64 = (0..n.n_gen).map(|i| up[i] * jac[(i, k)]).sum();
            assert!((via_jac - g.dcost_dz[k]).abs() <= 1e-8 * (1.0 + g.dcost_dz[k].abs()));
            assert!((env[k] - g.dcost_dz[k]).abs() <= 1e-5 * (1.0 + env[k].abs()), "{env:?} {g:?}");
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let n = net(cases::CASE3B);
        let d = n.nominal_demand.clone();
        let z = SwitchVector::relaxed(vec![0.9, 0.95, 0.85]).unwrap();
        let sol = forward(&n, &d, &z).unwrap();
        let a = backward(&n, &d, &z, &sol, &[1.0, 0.0]).unwrap().dcost_dz;
        let b = backward(&n, &d, &z, &sol, &[0.0, 1.0]).unwrap().dcost_dz;
        let ab = backward(&n, &d, &z, &sol, &[2.0, -3.0]).unwrap().dcost_dz;
        for k in 0..3 {
            assert!((ab[k] - (2.0 * a[k] - 3.0 * b[k])).abs() < 1e-8 * (1.0 + ab[k].abs()));
        }
    }

    #[test]
    fn gradcheck_on_builtin_cases() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for (text, trials) in [(cases::CASE2, 10), (cases::CASE3B, 25)] {
            let n = net(text);
            let rep = gradcheck(&n, trials, &mut rng).unwrap();
            assert_eq!(rep.errors.len(), trials, "{rep:?}");
            assert!(rep.passed(1e-4), "{rep:?}");
        }
        let rep = gradcheck(&net(cases::CASE2), 0, &mut rng).unwrap();
        assert!(rep.errors.is_empty() && rep.passed(1e-4));
    }

    #[test]
    fn stale_solution_is_rejected() {
        let n = net(cases::CASE3B);
        let d = n.nominal_demand.clone();
        let z = SwitchVector::relaxed(vec![0.9, 0.95, 0.85]).unwrap();
        let sol = forward(&n, &d, &z).unwrap();
        let other = SwitchVector::relaxed(vec![0.9, 0.95, 0.86]).unwrap();
        assert_eq!(
            backward(&n, &d, &other, &sol, &[1.0, 1.0]),
            Err(DiffOpfError::StaleSolution)
        );
    }
}
