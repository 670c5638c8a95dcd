//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize     1/2 x' Q x + c' x
//!     subject to   A x  = b
//!                  G x <= h
//! ```
//!
//! with a primal-dual path-following interior point method (Mehrotra
//! predictor-corrector). Each Newton system is reduced to the quasi-definite
//! form `[[Q + G' D G + dI, A'], [A, -dI]]`, factored with a dense LDL^T and
//! cleaned up with iterative refinement against the unregularized matrix.
//!
//! On convergence the solver guesses the active set and re-solves the
//! equality-constrained KKT system on it ("polishing"). When the polished
//! point is primal and dual feasible it replaces the interior iterate, which
//! makes objectives and duals accurate to near machine precision.

mod ldl;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use ldl::Ldl;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;
const STATIC_REG: f64 = 1e-8;
const REFINE_STEPS: usize = 3;
/// Slack (relative to `tol`) for the fallback iterate kept in case the
/// iteration breaks down before reaching full accuracy.
const NEAR_FACTOR: f64 = 1e3;
const STEP_FRACTION: f64 = 0.995;
// Safe pass: minimum centering, neighbourhood width, and how much faster
// than the residual the gap may shrink.
const SAFE_SIGMA: f64 = 0.1;
/// Iterations after which the plain pass gives up in favour of the safe one.
const FAST_ITER_LIMIT: usize = 60;
const SAFE_GAMMA: f64 = 1e-3;
const SAFE_BETA: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

/// `min 1/2 x'Qx + c'x  s.t.  Ax = b, Gx <= h`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub quad: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub eq_mat: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_mat: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            polish: true,
        }
    }
}

/// KKT residual summary of a candidate primal-dual point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `||Qx + c + A'l + G'm||_inf`
    pub stationarity: f64,
    /// `max(||Ax - b||_inf, max(Gx - h, 0))`
    pub primal: f64,
    /// `max(-m, 0)`
    pub dual: f64,
    /// `max_i |m_i (Gx - h)_i|`
    pub complementarity: f64,
}

impl QpProblem {
    pub fn n_var(&self) -> usize {
        self.lin.len()
    }

    pub fn n_eq(&self) -> usize {
        self.eq_rhs.len()
    }

    pub fn n_ineq(&self) -> usize {
        self.ineq_rhs.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.quad * x)) + self.lin.dot(x)
    }

    pub fn check_dims(&self) -> Result<(), QpError> {
        let n = self.n_var();
        let bad = |what: &str| Err(QpError::DimensionMismatch(what.to_string()));
        if self.quad.nrows() != n || self.quad.ncols() != n {
            return bad("Q must be n x n");
        }
        if self.eq_mat.nrows() != self.n_eq() || self.eq_mat.ncols() != n {
            return bad("A must be m_e x n");
        }
        if self.ineq_mat.nrows() != self.n_ineq() || self.ineq_mat.ncols() != n {
            return bad("G must be m_i x n");
        }
        let asym = (&self.quad - self.quad.transpose()).amax();
        if asym > 1e-12 * (1.0 + self.quad.amax()) {
            return bad("Q is not symmetric");
        }
        Ok(())
    }

    pub fn residuals(&self, x: &DVector<f64>, lambda: &DVector<f64>, mu: &DVector<f64>) -> KktResiduals {
        let stat = &self.quad * x + &self.lin + self.eq_mat.tr_mul(lambda) + self.ineq_mat.tr_mul(mu);
        let eq = &self.eq_mat * x - &self.eq_rhs;
        let ineq = &self.ineq_mat * x - &self.ineq_rhs;
        let viol = ineq.iter().fold(0.0f64, |m, &v| m.max(v));
        KktResiduals {
            stationarity: stat.amax(),
            primal: eq.amax().max(viol),
            dual: mu.iter().fold(0.0f64, |m, &v| m.max(-v)),
            complementarity: mu.iter().zip(ineq.iter()).fold(0.0f64, |m, (a, b)| m.max((a * b).abs())),
        }
    }
}

/// Row-compressed copy of a dense matrix.
struct SparseRows {
    rows: Vec<Vec<(usize, f64)>>,
    ncols: usize,
}

impl SparseRows {
    fn from_dense(m: &DMatrix<f64>, keep: &[usize]) -> Self {
        let rows = keep
            .iter()
            .map(|&i| {
                (0..m.ncols())
                    .filter_map(|j| {
                        let v = m[(i, j)];
                        (v != 0.0).then_some((j, v))
                    })
                    .collect()
            })
            .collect();
        Self {
            rows,
            ncols: m.ncols(),
        }
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn mul(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|r| r.iter().map(|&(j, v)| v * x[j]).sum::<f64>()),
        )
    }

    fn tr_mul(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (r, &yi) in self.rows.iter().zip(y.iter()) {
            if yi != 0.0 {
                for &(j, v) in r {
                    out[j] += v * yi;
                }
            }
        }
        out
    }

    /// `acc += M' diag(w) M`
    fn add_weighted_gram(&self, w: &DVector<f64>, acc: &mut DMatrix<f64>) {
        for (r, &wi) in self.rows.iter().zip(w.iter()) {
            for &(j, vj) in r {
                for &(k, vk) in r {
                    acc[(j, k)] += wi * vj * vk;
                }
            }
        }
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.amax()
    }
}

/// Reduced problem after dropping identically-zero constraint rows.
struct Reduced<'a> {
    p: &'a QpProblem,
    a: SparseRows,
    b: DVector<f64>,
    g: SparseRows,
    h: DVector<f64>,
    eq_keep: Vec<usize>,
    ineq_keep: Vec<usize>,
}

enum Presolve<'a> {
    Reduced(Reduced<'a>),
    Infeasible,
}

fn presolve(p: &QpProblem, tol: f64) -> Presolve<'_> {
    let zero_row = |m: &DMatrix<f64>, i: usize| m.row(i).iter().all(|&v| v == 0.0);
    let mut eq_keep = Vec::new();
    for i in 0..p.n_eq() {
        if zero_row(&p.eq_mat, i) {
            if p.eq_rhs[i].abs() > tol {
                return Presolve::Infeasible;
            }
        } else {
            eq_keep.push(i);
        }
    }
    let mut ineq_keep = Vec::new();
    for i in 0..p.n_ineq() {
        if zero_row(&p.ineq_mat, i) {
            if p.ineq_rhs[i] < -tol {
                return Presolve::Infeasible;
            }
        } else {
            ineq_keep.push(i);
        }
    }
    Presolve::Reduced(Reduced {
        p,
        a: SparseRows::from_dense(&p.eq_mat, &eq_keep),
        b: DVector::from_iterator(eq_keep.len(), eq_keep.iter().map(|&i| p.eq_rhs[i])),
        g: SparseRows::from_dense(&p.ineq_mat, &ineq_keep),
        h: DVector::from_iterator(ineq_keep.len(), ineq_keep.iter().map(|&i| p.ineq_rhs[i])),
        eq_keep,
        ineq_keep,
    })
}

/// Factored reduced Newton matrix `[[H + dI, A'], [A, -dI]]` with the
/// unregularized `H` kept for refinement.
enum Factor {
    Ldl(Ldl),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factor {
    fn solve_in_place(&self, b: &mut DVector<f64>) {
        match self {
            Factor::Ldl(f) => f.solve_in_place(b),
            Factor::Lu(f) => {
                if !f.solve_mut(b) {
                    b.fill(f64::NAN);
                }
            }
        }
    }
}

struct NewtonSystem<'r> {
    factor: Factor,
    h: DMatrix<f64>,
    a: &'r SparseRows,
    n: usize,
}

impl<'r> NewtonSystem<'r> {
    /// With `pivoted` the LDL' attempt is skipped. Polishing needs this: its
    /// matrix has no barrier term, so the angle pivots are zero and the
    /// regularized LDL' is too inaccurate for refinement to recover.
    fn build(h: DMatrix<f64>, a: &'r SparseRows, delta: f64, pivoted: bool) -> Result<Self, QpError> {
        let n = h.nrows();
        let me = a.len();
        let mut k = DMatrix::zeros(n + me, n + me);
        k.view_mut((0, 0), (n, n)).copy_from(&h);
        for i in 0..n {
            k[(i, i)] += delta;
        }
        for (r, row) in a.rows.iter().enumerate() {
            for &(j, v) in row {
                k[(n + r, j)] = v;
                k[(j, n + r)] = v;
            }
            k[(n + r, n + r)] = -delta;
        }
        // The sign-fixed LDL' has no pivoting; when it breaks down on a
        // nearly dependent system, fall back to partially pivoted LU.
        let ldl = if pivoted { None } else { Ldl::factor(k.clone(), n, delta) };
        let factor = match ldl {
            Some(ldl) => Factor::Ldl(ldl),
            None => {
                let lu = k.lu();
                if !lu.is_invertible() {
                    return Err(QpError::NumericalBreakdown("singular KKT matrix".into()));
                }
                Factor::Lu(lu)
            }
        };
        Ok(Self { factor, h, a, n })
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        let vx = v.rows(0, n).into_owned();
        let vy = v.rows(n, v.len() - n).into_owned();
        let top = &self.h * &vx + self.a.tr_mul(&vy);
        let bot = self.a.mul(&vx);
        let mut out = DVector::zeros(v.len());
        out.rows_mut(0, n).copy_from(&top);
        out.rows_mut(n, v.len() - n).copy_from(&bot);
        out
    }

    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut sol = rhs.clone();
        self.factor.solve_in_place(&mut sol);
        for _ in 0..REFINE_STEPS {
            let mut r = rhs - self.apply(&sol);
            if r.amax() <= 1e-15 * (1.0 + rhs.amax()) {
                break;
            }
            self.factor.solve_in_place(&mut r);
            sol += r;
        }
        sol
    }
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    let mut alpha = f64::INFINITY;
    for (x, d) in v.iter().zip(dv.iter()) {
        if *d < 0.0 {
            alpha = alpha.min(-x / d);
        }
    }
    alpha
}

/// Solves the QP with default polishing.
pub fn solve_qp(problem: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    solve_qp_with(
        problem,
        &QpSettings {
            tol,
            max_iter,
            polish: true,
        },
    )
}

pub fn solve_qp_with(problem: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    problem.check_dims()?;
    if !(settings.tol > 0.0) {
        return Err(QpError::DimensionMismatch("tolerance must be positive".into()));
    }
    let n = problem.n_var();
    let red = match presolve(problem, settings.tol) {
        Presolve::Reduced(r) => r,
        Presolve::Infeasible => {
            return Ok(QpSolution {
                x: DVector::zeros(n),
                lambda: DVector::zeros(problem.n_eq()),
                mu: DVector::zeros(problem.n_ineq()),
                objective: f64::NAN,
                status: QpStatus::Infeasible,
                iterations: 0,
            })
        }
    };
    red.solve(settings)
}

impl Reduced<'_> {
    fn expand(&self, lam: &DVector<f64>, mu: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut lf = DVector::zeros(self.p.n_eq());
        for (k, &i) in self.eq_keep.iter().enumerate() {
            lf[i] = lam[k];
        }
        let mut mf = DVector::zeros(self.p.n_ineq());
        for (k, &i) in self.ineq_keep.iter().enumerate() {
            mf[i] = mu[k];
        }
        (lf, mf)
    }

    fn finish(
        &self,
        x: DVector<f64>,
        lam: &DVector<f64>,
        mu: &DVector<f64>,
        status: QpStatus,
        iterations: usize,
    ) -> QpSolution {
        let (lambda, mu) = self.expand(lam, mu);
        let objective = if status == QpStatus::Optimal {
            self.p.objective(&x)
        } else {
            f64::NAN
        };
        QpSolution {
            x,
            lambda,
            mu,
            objective,
            status,
            iterations,
        }
    }

    /// Optimal exit, with active-set polishing when it does not worsen the
    /// KKT residuals.
    fn accept(
        &self,
        x: &DVector<f64>,
        lam: &DVector<f64>,
        mu: &DVector<f64>,
        s: &DVector<f64>,
        iter: usize,
        settings: &QpSettings,
    ) -> QpSolution {
        let p = self.p;
        let tol = settings.tol;
        let mi = self.g.len();
        let b_scale = 1.0 + inf_norm(&self.b).max(inf_norm(&self.h));
        let c_scale = 1.0 + inf_norm(&p.lin);
        let obj_scale = 1.0 + (0.5 * x.dot(&(&p.quad * x)) + p.lin.dot(x)).abs();
        let mut sol = self.finish(x.clone(), lam, mu, QpStatus::Optimal, iter);

        if settings.polish && mi > 0 {
            if let Some(polished) = self.polish(x, s, mu, tol) {
                let (pl, pm) = self.expand(&polished.1, &polished.2);
                let before = p.residuals(&sol.x, &sol.lambda, &sol.mu);
                let after = p.residuals(&polished.0, &pl, &pm);
                let worst = |r: &KktResiduals| {
                    (r.stationarity / c_scale)
                        .max(r.primal / b_scale)
                        .max(r.dual / c_scale)
                        .max(r.complementarity / obj_scale)
                };
                if worst(&after) <= worst(&before).max(tol * 1e-2) {
                    sol.objective = p.objective(&polished.0);
                    sol.x = polished.0;
                    sol.lambda = pl;
                    sol.mu = pm;
                }
            }
        }
        sol
    }

    /// Plain Mehrotra first; if that breaks down, a slower pass that keeps
    /// the iterates well centred.
    fn solve(&self, settings: &QpSettings) -> Result<QpSolution, QpError> {
        let fast = match self.run(settings, false) {
            Ok((sol, false)) => return Ok(sol),
            other => other,
        };
        match (fast, self.run(settings, true)) {
            (_, Ok((sol, _))) => Ok(sol),
            (Ok((sol, _)), Err(_)) => Ok(sol),
            (Err(_), Err(e)) => Err(e),
        }
    }

    /// Returns the solution and whether it is only a guess made after a
    /// breakdown (a near-optimal iterate or an infeasibility verdict).
    fn run(&self, settings: &QpSettings, safe: bool) -> Result<(QpSolution, bool), QpError> {
        let p = self.p;
        let n = p.n_var();
        let me = self.a.len();
        let mi = self.g.len();
        let tol = settings.tol;
        let q = &p.quad;
        let c = &p.lin;

        let b_scale = 1.0 + inf_norm(&self.b).max(inf_norm(&self.h));
        let c_scale = 1.0 + inf_norm(c);

        // Initial point: minimize 1/2 x'Qx + c'x + 1/2 ||Gx - h||^2 s.t. Ax = b.
        let mut h0 = q.clone();
        self.g.add_weighted_gram(&DVector::from_element(mi, 1.0), &mut h0);
        let sys = NewtonSystem::build(h0, &self.a, STATIC_REG, false)?;
        let mut rhs = DVector::zeros(n + me);
        rhs.rows_mut(0, n).copy_from(&(-c + self.g.tr_mul(&self.h)));
        rhs.rows_mut(n, me).copy_from(&self.b);
        let sol0 = sys.solve(&rhs);
        let mut x = sol0.rows(0, n).into_owned();
        let mut lam = sol0.rows(n, me).into_owned();
        let mut s = &self.h - self.g.mul(&x);
        let mut mu = -s.clone();
        if mi > 0 {
            let shift_s = -s.min();
            if shift_s >= 0.0 {
                s.add_scalar_mut(1.0 + shift_s);
            }
            let shift_m = -mu.min();
            if shift_m >= 0.0 {
                mu.add_scalar_mut(1.0 + shift_m);
            }
        }

        let mut best_pres = f64::INFINITY;
        let mut stall = 0usize;
        // Reference ratio of complementarity to infeasibility at the start;
        // the safe pass does not let the gap close much faster than that.
        let mut start_ratio: Option<f64> = None;
        // Last iterate within `NEAR_FACTOR` of every tolerance; returned if
        // the iteration breaks down later.
        let mut near: Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, usize)> = None;
        macro_rules! bail {
            ($iter:expr, $status:expr, $err:expr) => {{
                if let Some((x, l, m, s, it)) = near.take() {
                    return Ok((self.accept(&x, &l, &m, &s, it, settings), true));
                }
                if best_pres > 1e-6 * b_scale {
                    return Ok((self.finish(x.map(|_| f64::NAN), &lam.map(|_| f64::NAN), &mu.map(|_| f64::NAN), $status, $iter), true));
                }
                return Err($err);
            }};
        }

        for iter in 0..settings.max_iter {
            let gx = self.g.mul(&x);
            let rd = q * &x + c + self.a.tr_mul(&lam) + self.g.tr_mul(&mu);
            let re = self.a.mul(&x) - &self.b;
            let ri = &gx + &s - &self.h;
            let gap = s.dot(&mu);
            let nu = if mi > 0 { gap / mi as f64 } else { 0.0 };
            let pobj = 0.5 * x.dot(&(q * &x)) + c.dot(&x);

            let pres = inf_norm(&re).max(inf_norm(&ri));
            let dres = inf_norm(&rd);
            let obj_scale = 1.0 + pobj.abs();
            // The fallback judges stationarity relative to its largest term,
            // so that large but finite multipliers do not block it.
            let d_scale = c_scale
                .max(inf_norm(&(q * &x)))
                .max(inf_norm(&self.a.tr_mul(&lam)))
                .max(inf_norm(&self.g.tr_mul(&mu)));
            if pres <= tol * b_scale && dres <= tol * c_scale && gap <= tol * obj_scale {
                return Ok((self.accept(&x, &lam, &mu, &s, iter, settings), false));
            }
            let loose = NEAR_FACTOR * tol;
            if pres <= loose * b_scale && dres <= loose * d_scale && gap <= loose * obj_scale {
                near = Some((x.clone(), lam.clone(), mu.clone(), s.clone(), iter));
            }

            // Farkas certificate of primal infeasibility from large duals.
            let ynorm = inf_norm(&lam).max(inf_norm(&mu));
            if ynorm > 1e6 * c_scale {
                let lh = &lam / ynorm;
                let mh = &mu / ynorm;
                let ray = self.a.tr_mul(&lh) + self.g.tr_mul(&mh);
                let bound = self.b.dot(&lh) + self.h.dot(&mh);
                // Any feasible x has ray'x <= bound, so a tiny ray with a
                // clearly negative bound rules out every x of the size of
                // the current iterate.
                let r = inf_norm(&ray);
                if r <= 1e-6 && bound < -1e-9 && 1e3 * r * (1.0 + inf_norm(&x)) < -bound {
                    return Ok((self.finish(x, &lam, &mu, QpStatus::Infeasible, iter), false));
                }
            }
            // Recession direction certificate of unboundedness.
            let xnorm = inf_norm(&x);
            if xnorm > 1e10 * b_scale {
                let d = &x / xnorm;
                let qd = inf_norm(&(q * &d));
                let ad = inf_norm(&self.a.mul(&d));
                let gd = self.g.mul(&d).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                if qd <= 1e-8 && ad <= 1e-8 && gd <= 1e-8 && c.dot(&d) < 0.0 {
                    return Ok((self.finish(x, &lam, &mu, QpStatus::Unbounded, iter), false));
                }
            }

            if pres < 0.9 * best_pres {
                best_pres = pres;
                stall = 0;
            } else {
                stall += 1;
            }
            if mi > 0 && stall >= 30 && pres > 1e-6 * b_scale && nu <= tol * obj_scale {
                return Ok((self.finish(x, &lam, &mu, QpStatus::Infeasible, iter), false));
            }

            // Plain Mehrotra can cycle; hand over to the safe pass.
            if !safe && iter >= FAST_ITER_LIMIT {
                bail!(iter, QpStatus::Infeasible, QpError::NumericalBreakdown("no progress".into()));
            }

            // Newton matrix for this iterate.
            let d = mu.component_div(&s);
            let mut hmat = q.clone();
            self.g.add_weighted_gram(&d, &mut hmat);
            let sys = match NewtonSystem::build(hmat, &self.a, STATIC_REG, false) {
                Ok(sys) => sys,
                Err(e) => bail!(iter, QpStatus::Infeasible, e),
            };

            let direction = |rc: &DVector<f64>| {
                // dmu = (rc + mu.ri + mu.G dx) / s ; ds = -ri - G dx
                let w = (rc + mu.component_mul(&ri)).component_div(&s);
                let mut rhs = DVector::zeros(n + me);
                rhs.rows_mut(0, n).copy_from(&(-&rd - self.g.tr_mul(&w)));
                rhs.rows_mut(n, me).copy_from(&(-&re));
                let sol = sys.solve(&rhs);
                let dx = sol.rows(0, n).into_owned();
                let dl = sol.rows(n, me).into_owned();
                let gdx = self.g.mul(&dx);
                let dm = &w + mu.component_mul(&gdx).component_div(&s);
                let ds = -&ri - gdx;
                (dx, dl, dm, ds)
            };

            // Predictor.
            let rc_aff = -s.component_mul(&mu);
            let (dx_a, dl_a, dm_a, ds_a) = direction(&rc_aff);
            if mi == 0 {
                x += dx_a;
                lam += dl_a;
                continue;
            }
            let alpha_aff = max_step(&s, &ds_a).min(max_step(&mu, &dm_a)).min(1.0);
            let nu_aff = (&s + alpha_aff * &ds_a).dot(&(&mu + alpha_aff * &dm_a)) / mi as f64;
            let mut sigma = (nu_aff / nu).powi(3).clamp(0.0, 1.0);
            if safe {
                sigma = sigma.max(SAFE_SIGMA);
            }

            // Corrector.
            let rc = &rc_aff - ds_a.component_mul(&dm_a) + DVector::from_element(mi, sigma * nu);
            let (dx, dl, dm, ds) = direction(&rc);
            let mut alpha = (STEP_FRACTION * max_step(&s, &ds).min(max_step(&mu, &dm))).min(1.0);
            if safe {
                let ratio = *start_ratio.get_or_insert(nu / pres.max(1e-300));
                for _ in 0..60 {
                    let s1 = &s + alpha * &ds;
                    let m1 = &mu + alpha * &dm;
                    let prod = s1.component_mul(&m1);
                    let nu1 = prod.sum() / mi as f64;
                    let pres1 = (1.0 - alpha) * pres;
                    if prod.min() >= SAFE_GAMMA * nu1 && nu1 >= SAFE_BETA * ratio * pres1 {
                        break;
                    }
                    alpha *= 0.8;
                }
            }
            if !(alpha > 0.0) {
                bail!(iter, QpStatus::Infeasible, QpError::NumericalBreakdown(format!("step length {alpha}")));
            }
            x += alpha * dx;
            lam += alpha * dl;
            mu += alpha * dm;
            s += alpha * ds;
            if !x.iter().chain(mu.iter()).chain(lam.iter()).all(|v| v.is_finite()) {
                // Diverging duals with a primal residual that never closed
                // mean the constraints are inconsistent.
                bail!(iter, QpStatus::Infeasible, QpError::NumericalBreakdown("non-finite iterate".into()));
            }
        }

        if let Some((x, l, m, s, it)) = near.take() {
            return Ok((self.accept(&x, &l, &m, &s, it, settings), true));
        }
        let gx = self.g.mul(&x);
        let pres = inf_norm(&(self.a.mul(&x) - &self.b)).max(inf_norm(&(&gx + &s - &self.h)));
        let status = if pres > 1e-6 * b_scale {
            QpStatus::Infeasible
        } else {
            QpStatus::MaxIter
        };
        Ok((self.finish(x, &lam, &mu, status, settings.max_iter), false))
    }

    /// Re-solves the KKT system with the guessed active set as equalities.
    /// Returns `(x, lambda, mu)` on the reduced rows when the result is
    /// primal and dual feasible.
    fn polish(
        &self,
        x_ipm: &DVector<f64>,
        s: &DVector<f64>,
        mu: &DVector<f64>,
        tol: f64,
    ) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        let p = self.p;
        let n = p.n_var();
        let active: Vec<usize> = (0..self.g.len()).filter(|&i| mu[i] > s[i]).collect();
        let me = self.a.len();
        let rows = SparseRows {
            rows: self
                .a
                .rows
                .iter()
                .cloned()
                .chain(active.iter().map(|&i| self.g.rows[i].clone()))
                .collect(),
            ncols: n,
        };
        let sys = NewtonSystem::build(p.quad.clone(), &rows, 1e-9, true).ok()?;
        let m = rows.len();
        let mut rhs = DVector::zeros(n + m);
        rhs.rows_mut(0, n).copy_from(&(-&p.lin));
        rhs.rows_mut(n, me).copy_from(&self.b);
        for (k, &i) in active.iter().enumerate() {
            rhs[n + me + k] = self.h[i];
        }
        let sol = sys.solve(&rhs);
        let x = sol.rows(0, n).into_owned();
        if !x.iter().all(|v| v.is_finite()) {
            return None;
        }
        let lam = sol.rows(n, me).into_owned();
        let mut mu_full = DVector::zeros(self.g.len());
        for (k, &i) in active.iter().enumerate() {
            mu_full[i] = sol[n + me + k];
        }
        let x_scale = 1.0 + inf_norm(x_ipm);
        let viol = self
            .g
            .mul(&x)
            .iter()
            .zip(self.h.iter())
            .fold(0.0f64, |m, (gx, h)| m.max(gx - h));
        let mu_scale = 1.0 + inf_norm(&mu_full);
        if viol > tol * x_scale || mu_full.iter().any(|&v| v < -tol * mu_scale) {
            return None;
        }
        Some((x, lam, mu_full.map(|v| v.max(0.0))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn qp(q: &[f64], c: &[f64], a: (usize, &[f64]), b: &[f64], g: (usize, &[f64]), h: &[f64]) -> QpProblem {
        let n = c.len();
        QpProblem {
            quad: DMatrix::from_row_slice(n, n, q),
            lin: DVector::from_column_slice(c),
            eq_mat: DMatrix::from_row_slice(a.0, n, a.1),
            eq_rhs: DVector::from_column_slice(b),
            ineq_mat: DMatrix::from_row_slice(g.0, n, g.1),
            ineq_rhs: DVector::from_column_slice(h),
        }
    }

    #[test]
    fn three_unit_dispatch_does_not_cycle() {
        // Plain Mehrotra alternates between two gaps on this one.
        let c2 = [722.69, 380.86, 691.91];
        let q = [2.0 * c2[0], 0.0, 0.0, 0.0, 2.0 * c2[1], 0.0, 0.0, 0.0, 2.0 * c2[2]];
        let g = [
            1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, //
            -1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0,
        ];
        let p = qp(
            &q,
            &[1396.40, 1504.04, 2169.84],
            (1, &[1.0, 1.0, 1.0]),
            &[0.48821],
            (6, &g),
            &[2.5849, 2.5275, 1.4175, 0.0, 0.0, 0.0],
        );
        let sol = solve_qp(&p, 1e-8, 200).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let r = p.residuals(&sol.x, &sol.lambda, &sol.mu);
        assert!(r.stationarity < 1e-8 && r.primal < 1e-12, "{r:?}");
        assert!(sol.x[2].abs() < 1e-9);
    }

    #[test]
    fn single_active_lower_bound() {
        // min x^2 s.t. -x <= -1
        let p = qp(&[2.0], &[0.0], (0, &[]), &[], (1, &[-1.0]), &[-1.0]);
        let sol = solve_qp(&p, 1e-8, 200).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.0).abs() < 1e-9);
        assert!((sol.mu[0] - 2.0).abs() < 1e-8);
        assert!((sol.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn unconstrained_vertex() {
        // (x - 2)^2 = x^2 - 4x + 4; the constant is dropped.
        let p = qp(&[2.0], &[-4.0], (0, &[]), &[], (0, &[]), &[]);
        let sol = solve_qp(&p, 1e-8, 200).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 2.0).abs() < 1e-9);
        assert!((sol.objective + 4.0).abs() < 1e-9);
    }

    #[test]
    fn empty_feasible_set() {
        let p = qp(&[2.0], &[0.0], (0, &[]), &[], (2, &[1.0, -1.0]), &[0.0, -1.0]);
        let sol = solve_qp(&p, 1e-8, 200).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn infeasible_lp_with_equalities() {
        // x + y = 3, 0 <= x, y <= 1
        let p = qp(
            &[0.0; 4],
            &[1.0, 1.0],
            (1, &[1.0, 1.0]),
            &[3.0],
            (4, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
            &[1.0, 1.0, 0.0, 0.0],
        );
        assert_eq!(solve_qp(&p, 1e-8, 200).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn unbounded_lp() {
        // min -x s.t. -x <= 0
        let p = qp(&[0.0], &[-1.0], (0, &[]), &[], (1, &[-1.0]), &[0.0]);
        assert_eq!(solve_qp(&p, 1e-8, 200).unwrap().status, QpStatus::Unbounded);
    }

    #[test]
    fn zero_rows_are_handled() {
        // 0 <= 0 and 0 = 0 rows plus min (x-1)^2 with x <= 0.5
        let p = qp(
            &[2.0],
            &[-2.0],
            (1, &[0.0]),
            &[0.0],
            (2, &[0.0, 1.0]),
            &[0.0, 0.5],
        );
        let sol = solve_qp(&p, 1e-8, 200).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 0.5).abs() < 1e-9);
        assert_eq!(sol.mu[0], 0.0);
        assert!((sol.mu[1] - 1.0).abs() < 1e-8);

        let bad = qp(&[2.0], &[0.0], (1, &[0.0]), &[1.0], (0, &[]), &[]);
        assert_eq!(solve_qp(&bad, 1e-8, 200).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn small_lp_vertex() {
        // min -x - y s.t. x + 2y <= 4, 3x + y <= 6, x, y >= 0 -> (1.6, 1.2)
        let p = qp(
            &[0.0; 4],
            &[-1.0, -1.0],
            (0, &[]),
            &[],
            (4, &[1.0, 2.0, 3.0, 1.0, -1.0, 0.0, 0.0, -1.0]),
            &[4.0, 6.0, 0.0, 0.0],
        );
        let sol = solve_qp(&p, 1e-8, 200).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 1.6).abs() < 1e-9);
        assert!((sol.x[1] - 1.2).abs() < 1e-9);
        assert!((sol.objective + 2.8).abs() < 1e-9);
    }

    fn random_problem(seed: u64, n: usize, m_e: usize, m_i: usize) -> QpProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let quad = r.transpose() * &r + DMatrix::identity(n, n) * 0.1;
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let eq_mat = DMatrix::from_fn(m_e, n, |_, _| rng.gen_range(-1.0..1.0));
        let eq_rhs = &eq_mat * &x0;
        let ineq_mat = DMatrix::from_fn(m_i, n, |_, _| rng.gen_range(-1.0..1.0));
        let ineq_rhs = &ineq_mat * &x0 + DVector::from_fn(m_i, |_, _| rng.gen_range(0.0..1.0));
        QpProblem {
            quad,
            lin: DVector::from_fn(n, |_, _| rng.gen_range(-3.0..3.0)),
            eq_mat,
            eq_rhs,
            ineq_mat,
            ineq_rhs,
        }
    }

    #[test]
    fn deterministic_iterates() {
        let p = random_problem(7, 6, 2, 10);
        let a = solve_qp(&p, 1e-8, 200).unwrap();
        let b = solve_qp(&p, 1e-8, 200).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn optimal_points_satisfy_kkt(seed in 0u64..10_000, n in 2usize..8, me in 0usize..3, mi in 1usize..12) {
            let p = random_problem(seed, n, me.min(n - 1), mi);
            let sol = solve_qp(&p, 1e-8, 200).unwrap();
            prop_assert_eq!(sol.status, QpStatus::Optimal);
            let r = p.residuals(&sol.x, &sol.lambda, &sol.mu);
            let scale = 1.0 + p.lin.amax();
            prop_assert!(r.stationarity <= 1e-8 * scale, "{:?}", r);
            prop_assert!(r.primal <= 1e-8 * scale, "{:?}", r);
            prop_assert!(r.dual <= 1e-8, "{:?}", r);
            prop_assert!(r.complementarity <= 1e-8 * scale, "{:?}", r);
            // duality gap
            let dual_obj = -0.5 * sol.x.dot(&(&p.quad * &sol.x)) - p.eq_rhs.dot(&sol.lambda) - p.ineq_rhs.dot(&sol.mu);
            prop_assert!((sol.objective - dual_obj).abs() <= 10.0 * 1e-8 * (1.0 + sol.objective.abs()));
        }

        #[test]
        fn inactive_boxes_give_newton_point(seed in 0u64..10_000, n in 1usize..7) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
            let quad = r.transpose() * &r + DMatrix::identity(n, n);
            let lin = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let x_star = -quad.clone().lu().solve(&lin).unwrap();
            let bound = x_star.amax() + 10.0;
            let mut ineq_mat = DMatrix::zeros(2 * n, n);
            for i in 0..n {
                ineq_mat[(i, i)] = 1.0;
                ineq_mat[(n + i, i)] = -1.0;
            }
            let p = QpProblem {
                quad,
                lin,
                eq_mat: DMatrix::zeros(0, n),
                eq_rhs: DVector::zeros(0),
                ineq_mat,
                ineq_rhs: DVector::from_element(2 * n, bound),
            };
            let sol = solve_qp(&p, 1e-8, 200).unwrap();
            prop_assert_eq!(sol.status, QpStatus::Optimal);
            prop_assert!((sol.x - x_star).amax() <= 1e-6);
        }
    }
}
