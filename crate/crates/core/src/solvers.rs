//! Projected accelerated gradient for `min ||y - A beta||^2` over three sets,
//! all leaving the intercept `beta_1` free:
//!
//! - the cone `beta_j >= 0, j >= 2`;
//! - the ball `sum_{j >= 2} |beta_j| <= V`;
//! - their intersection `beta_j >= 0, sum_{j >= 2} beta_j <= V`.
//!
//! Only `apply` / `transpose_apply` of the operator are used, so the lattice
//! design costs `O(d n)` per iteration.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::design::LinearOperator;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    /// Relative objective decrease over a 10-iteration window below which the
    /// KKT residual is checked.
    pub rel_tol: f64,
    pub kkt_tol: f64,
    pub lipschitz_power_iters: usize,
    pub restart: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iter: 50_000,
            rel_tol: 1e-10,
            kkt_tol: 1e-6,
            lipschitz_power_iters: 50,
            restart: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::InvalidInput("max_iter must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.kkt_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be positive".into()));
        }
        if self.lipschitz_power_iters == 0 {
            return Err(Error::InvalidInput(
                "power iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub beta: Vec<f64>,
    /// `||y - A beta||^2`.
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: f64,
}

/// Feasible set of a constrained least squares problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projector {
    NonnegExceptFirst,
    L1BallExceptFirst(f64),
    CappedSimplexExceptFirst(f64),
}

impl Projector {
    fn radius(&self) -> Option<f64> {
        match *self {
            Projector::NonnegExceptFirst => None,
            Projector::L1BallExceptFirst(v) | Projector::CappedSimplexExceptFirst(v) => Some(v),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.radius() {
            Some(v) if v.is_nan() || v < 0.0 => Err(Error::NegativeBound(v)),
            _ => Ok(()),
        }
    }

    /// Euclidean projection in place.
    pub fn project(&self, beta: &mut [f64]) {
        self.project_hinted(beta, 0.0);
    }

    /// Projection reusing the previous soft threshold; returns the new one.
    fn project_hinted(&self, beta: &mut [f64], hint: f64) -> f64 {
        if beta.len() < 2 {
            return 0.0;
        }
        let tail = &mut beta[1..];
        match *self {
            Projector::NonnegExceptFirst => {
                clamp_nonneg(tail);
                0.0
            }
            Projector::L1BallExceptFirst(v) => project_l1_ball(tail, v, hint),
            Projector::CappedSimplexExceptFirst(v) => {
                clamp_nonneg(tail);
                project_l1_ball(tail, v, hint)
            }
        }
    }

    /// Largest violation of the first-order optimality conditions, given
    /// `grad = A^T (A beta - y)`.
    pub fn kkt_residual(&self, beta: &[f64], grad: &[f64], tol: f64) -> f64 {
        let mut res = grad[0].abs();
        let (b, g) = (&beta[1..], &grad[1..]);
        match *self {
            Projector::NonnegExceptFirst => res = res.max(cone_residual(b, g)),
            Projector::L1BallExceptFirst(v) => {
                let l1: f64 = b.iter().map(|x| x.abs()).sum();
                if l1 < v - tol {
                    res = res.max(g.iter().fold(0.0, |m, x| m.max(x.abs())));
                } else {
                    let lambda = g.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
                    for (&bj, &gj) in b.iter().zip(g) {
                        if bj != 0.0 {
                            res = res.max((gj + lambda * bj.signum()).abs());
                        }
                    }
                }
            }
            Projector::CappedSimplexExceptFirst(v) => {
                let sum: f64 = b.iter().sum();
                if sum < v - tol {
                    res = res.max(cone_residual(b, g));
                } else {
                    let lambda = g.iter().fold(0.0, |m: f64, x| m.max(-x));
                    for (&bj, &gj) in b.iter().zip(g) {
                        if bj != 0.0 {
                            res = res.max((gj + lambda).abs());
                        }
                    }
                }
            }
        }
        res
    }
}

fn cone_residual(b: &[f64], g: &[f64]) -> f64 {
    b.iter().zip(g).fold(0.0, |m: f64, (&bj, &gj)| {
        m.max(-gj).max((gj * bj).abs() / (1.0 + bj.abs()))
    })
}

fn clamp_nonneg(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Projects `v` onto `{ ||v||_1 <= radius }` by soft-thresholding at the exact
/// pivot. Returns the threshold (0 if `v` was feasible).
///
/// A positive `hint` restricts the search to entries above it; the result is
/// accepted only if the threshold found there is at least `hint`, in which case
/// it is the global one.
fn project_l1_ball(v: &mut [f64], radius: f64, hint: f64) -> f64 {
    let total: f64 = v.iter().map(|x| x.abs()).sum();
    if total <= radius {
        return 0.0;
    }
    if radius <= 0.0 {
        v.fill(0.0);
        return f64::INFINITY;
    }
    let mut theta = None;
    if hint > 0.0 && hint.is_finite() {
        let cand: Vec<f64> = v.iter().map(|x| x.abs()).filter(|&u| u > hint).collect();
        if !cand.is_empty() {
            let t = pivot(cand, radius, hint);
            if t >= hint {
                theta = Some(t);
            }
        }
    }
    let theta = theta.unwrap_or_else(|| {
        let lower = (total - radius) / v.len() as f64;
        pivot(
            v.iter().map(|x| x.abs()).filter(|&u| u > lower).collect(),
            radius,
            lower,
        )
    });
    for x in v {
        let shrunk = x.abs() - theta;
        *x = if shrunk > 0.0 {
            shrunk.copysign(*x)
        } else {
            0.0
        };
    }
    theta
}

/// Threshold `t` with `sum (u - t)^+ = radius` over `cand`, all entries above `lower`.
///
/// `(sum - radius) / len` over any set containing the support bounds the
/// threshold from below, so entries at or below it are dropped until the set
/// is stable; the survivors are sorted.
fn pivot(mut cand: Vec<f64>, radius: f64, mut lower: f64) -> f64 {
    loop {
        let sum: f64 = cand.iter().sum();
        let next = (sum - radius) / cand.len() as f64;
        if next <= lower {
            break;
        }
        lower = next;
        let before = cand.len();
        cand.retain(|&u| u > lower);
        if cand.len() == before {
            break;
        }
    }
    cand.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in cand.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - radius) / (k + 1) as f64;
        if u > t {
            theta = t;
        } else {
            break;
        }
    }
    theta
}

/// `beta_1` kept, every other coordinate clamped at zero.
pub fn project_nonneg_except_first(beta: &[f64]) -> Vec<f64> {
    let mut out = beta.to_vec();
    Projector::NonnegExceptFirst.project(&mut out);
    out
}

/// `beta_1` kept, the tail projected onto the l1 ball of radius `v`.
pub fn project_l1_ball_except_first(beta: &[f64], v: f64) -> Result<Vec<f64>> {
    let proj = Projector::L1BallExceptFirst(v);
    proj.validate()?;
    let mut out = beta.to_vec();
    proj.project(&mut out);
    Ok(out)
}

/// `beta_1` kept, the tail projected onto `{b >= 0, sum b <= v}`.
pub fn project_capped_simplex_except_first(beta: &[f64], v: f64) -> Result<Vec<f64>> {
    let proj = Projector::CappedSimplexExceptFirst(v);
    proj.validate()?;
    let mut out = beta.to_vec();
    proj.project(&mut out);
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Upper estimate of `lambda_max(A^T A)`: power iteration inflated by 5%.
pub fn estimate_lipschitz(a: &dyn LinearOperator, iters: usize) -> f64 {
    let (n, p) = (a.nrows(), a.ncols());
    if n == 0 || p == 0 {
        return 0.0;
    }
    // deterministic, strictly positive start
    let mut v: Vec<f64> = (0..p)
        .map(|j| 1.0 + ((j as u64 * 2_654_435_761) % 1000) as f64 / 4000.0)
        .collect();
    let mut av = vec![0.0; n];
    let mut w = vec![0.0; p];
    let mut lambda = 0.0;
    for _ in 0..iters.max(1) {
        let norm = dot(&v, &v).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        a.apply(&v, &mut av);
        a.transpose_apply(&av, &mut w);
        lambda = dot(&w, &w).sqrt();
        std::mem::swap(&mut v, &mut w);
    }
    1.05 * lambda
}

fn check_inputs(a: &dyn LinearOperator, y: &[f64], projector: &Projector) -> Result<()> {
    if y.len() != a.nrows() {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: a.nrows(),
        });
    }
    if a.ncols() == 0 {
        return Err(Error::InvalidInput("design has no columns".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("responses must be finite".into()));
    }
    projector.validate()
}

/// Minimizes `||y - A beta||^2` over the projector's set, starting from
/// `beta = (mean(y), 0, ..., 0)`.
pub fn solve_constrained_ls(
    a: &dyn LinearOperator,
    y: &[f64],
    projector: Projector,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    check_inputs(a, y, &projector)?;
    let mut init = vec![0.0; a.ncols()];
    init[0] = y.iter().sum::<f64>() / y.len() as f64;
    solve_from(a, y, projector, cfg, init)
}

/// Same as [`solve_constrained_ls`] with an explicit starting point (projected first).
pub fn solve_constrained_ls_from(
    a: &dyn LinearOperator,
    y: &[f64],
    projector: Projector,
    cfg: &SolverConfig,
    init: Vec<f64>,
) -> Result<SolveResult> {
    check_inputs(a, y, &projector)?;
    if init.len() != a.ncols() {
        return Err(Error::LengthMismatch {
            left: init.len(),
            right: a.ncols(),
        });
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial point must be finite".into()));
    }
    solve_from(a, y, projector, cfg, init)
}

const WINDOW: usize = 10;
const SHRINK: f64 = 0.9;

fn solve_from(
    a: &dyn LinearOperator,
    y: &[f64],
    projector: Projector,
    cfg: &SolverConfig,
    mut x: Vec<f64>,
) -> Result<SolveResult> {
    cfg.validate()?;
    let (n, p) = (a.nrows(), a.ncols());
    projector.project(&mut x);

    // The intercept is profiled out: with centered columns and responses its
    // gradient vanishes, and the optimal value is restored at the end.
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let y_c: Vec<f64> = y.iter().map(|v| v - y_mean).collect();
    let centered = Centered::new(a);
    let (a_orig, y_orig) = (a, y);
    let (a, y): (&dyn LinearOperator, &[f64]) = (&centered, &y_c);

    // gradient of ||y - A b||^2 is 2 A^T (A b - y)
    let mut lip = 2.0 * estimate_lipschitz(a, cfg.lipschitz_power_iters);
    if lip == 0.0 {
        lip = 1.0;
    }
    let mut lip_max = lip;
    let mut lip_raises = 0;

    let mut ax = vec![0.0; n];
    a.apply(&x, &mut ax);
    let mut f = sq_dist(&ax, y);

    let mut z = x.clone();
    let mut az = ax.clone();
    let mut x_new = vec![0.0; p];
    let mut ax_new = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut grad = vec![0.0; p];
    let mut t = 1.0f64;
    let mut theta = 0.0;
    let mut at_x = true; // z == x, i.e. the next step is a plain projected gradient step
    let mut history = vec![f];
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut converged = false;

    while iterations < cfg.max_iter {
        iterations += 1;
        for ((r, &azi), &yi) in resid.iter_mut().zip(&az).zip(y) {
            *r = azi - yi;
        }
        a.transpose_apply(&resid, &mut grad);
        // backtracking on the local curvature |A d|^2 <= (L/2) |d|^2, d = x_new - z,
        // starting below the last accepted value
        let mut f_new;
        loop {
            let step = 2.0 / lip;
            for ((xn, &zj), &gj) in x_new.iter_mut().zip(&z).zip(&grad) {
                *xn = zj - step * gj;
            }
            theta = projector.project_hinted(&mut x_new, 0.95 * theta);
            a.apply(&x_new, &mut ax_new);
            f_new = sq_dist(&ax_new, y);
            let d2 = sq_dist(&x_new, &z);
            let ad2 = sq_dist(&ax_new, &az);
            if ad2 <= 0.5 * lip * d2 {
                break;
            }
            if lip >= lip_max {
                if d2 == 0.0 || ad2 <= 0.5 * lip * d2 * 1.01 || lip_raises >= 60 {
                    break;
                }
                // the power-iteration estimate was too low
                lip_max *= 2.0;
                lip_raises += 1;
            }
            lip = (2.0 * lip).min(lip_max);
        }

        // A plain step passing the curvature test cannot increase f, so only
        // momentum steps are checked.
        let increased = !at_x
            && ax_new
                .iter()
                .zip(&ax)
                .zip(y)
                .map(|((&u, &v), &yi)| (u - v) * (u + v - 2.0 * yi))
                .sum::<f64>()
                > 0.0; // f(x_new) - f(x), free of cancellation
        if cfg.restart && increased {
            t = 1.0;
            z.copy_from_slice(&x);
            az.copy_from_slice(&ax);
            at_x = true;
            history.push(f);
        } else {
            let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
            lip = (lip * SHRINK).max(lip_max * 1e-6);
            let momentum = (t - 1.0) / t_next;
            for j in 0..p {
                z[j] = x_new[j] + momentum * (x_new[j] - x[j]);
            }
            for i in 0..n {
                az[i] = ax_new[i] + momentum * (ax_new[i] - ax[i]);
            }
            at_x = momentum == 0.0;
            std::mem::swap(&mut x, &mut x_new);
            std::mem::swap(&mut ax, &mut ax_new);
            f = f_new;
            t = t_next;
            history.push(f);
        }

        if iterations % WINDOW == 0 {
            let old = history[history.len() - 1 - WINDOW];
            let rel = (old - f) / old.max(f64::MIN_POSITIVE);
            if rel < cfg.rel_tol {
                kkt = kkt_at(
                    a,
                    y,
                    &projector,
                    &x,
                    &ax,
                    cfg.kkt_tol,
                    &mut resid,
                    &mut grad,
                );
                if kkt < cfg.kkt_tol {
                    converged = true;
                    break;
                }
            }
        }
    }
    a_orig.apply(&x, &mut ax);
    x[0] += y_orig.iter().zip(&ax).map(|(yi, ai)| yi - ai).sum::<f64>() / n as f64;
    a_orig.apply(&x, &mut ax);
    let f = sq_dist(&ax, y_orig);
    let kkt_final = kkt_at(
        a_orig,
        y_orig,
        &projector,
        &x,
        &ax,
        cfg.kkt_tol,
        &mut resid,
        &mut grad,
    );
    if converged {
        kkt = kkt.max(kkt_final);
        converged = kkt < cfg.kkt_tol;
    } else {
        kkt = kkt_final;
    }
    Ok(SolveResult {
        beta: x,
        objective: f,
        iterations,
        converged,
        kkt_residual: kkt,
    })
}

/// `A` with column means removed from every column.
struct Centered<'a> {
    base: &'a dyn LinearOperator,
    scratch: Mutex<Vec<f64>>,
}

impl<'a> Centered<'a> {
    fn new(base: &'a dyn LinearOperator) -> Self {
        Centered {
            base,
            scratch: Mutex::new(vec![0.0; base.nrows()]),
        }
    }
}

impl LinearOperator for Centered<'_> {
    fn nrows(&self) -> usize {
        self.base.nrows()
    }
    fn ncols(&self) -> usize {
        self.base.ncols()
    }
    fn apply(&self, beta: &[f64], out: &mut [f64]) {
        self.base.apply(beta, out);
        let mean = out.iter().sum::<f64>() / out.len() as f64;
        out.iter_mut().for_each(|v| *v -= mean);
    }
    fn transpose_apply(&self, r: &[f64], out: &mut [f64]) {
        let mut rc = self.scratch.lock().unwrap_or_else(|e| e.into_inner());
        let mean = r.iter().sum::<f64>() / r.len() as f64;
        for (c, &v) in rc.iter_mut().zip(r) {
            *c = v - mean;
        }
        self.base.transpose_apply(&rc, out);
    }
}

#[allow(clippy::too_many_arguments)]
fn kkt_at(
    a: &dyn LinearOperator,
    y: &[f64],
    projector: &Projector,
    x: &[f64],
    ax: &[f64],
    tol: f64,
    resid: &mut [f64],
    grad: &mut [f64],
) -> f64 {
    for ((r, &axi), &yi) in resid.iter_mut().zip(ax).zip(y) {
        *r = axi - yi;
    }
    a.transpose_apply(resid, grad);
    projector.kkt_residual(x, grad, tol)
}

/// Candidate columns that can be priced all at once and restricted to a subset.
///
/// Column 0 is the intercept.
pub trait ColumnPricer: Sync {
    fn nrows(&self) -> usize;
    fn ncandidates(&self) -> usize;
    /// `out[j] = <column j, r>` for every candidate.
    fn price(&self, r: &[f64], out: &mut [f64]);
    fn restrict<'s>(&'s self, cols: &[usize]) -> Box<dyn LinearOperator + 's>;
    /// Representative of the candidates whose column equals column `j`.
    fn canonical(&self, j: usize) -> usize {
        j
    }
}

/// Every column of an operator is a candidate.
pub struct AllColumns<'a>(pub &'a dyn LinearOperator);

impl ColumnPricer for AllColumns<'_> {
    fn nrows(&self) -> usize {
        self.0.nrows()
    }
    fn ncandidates(&self) -> usize {
        self.0.ncols()
    }
    fn price(&self, r: &[f64], out: &mut [f64]) {
        self.0.transpose_apply(r, out);
    }
    fn restrict<'s>(&'s self, cols: &[usize]) -> Box<dyn LinearOperator + 's> {
        Box::new(SubColumns::new(self.0, cols.to_vec()))
    }
}

/// View of selected columns of an operator.
pub struct SubColumns<'a> {
    base: &'a dyn LinearOperator,
    cols: Vec<usize>,
    scratch: Mutex<Vec<f64>>,
}

impl<'a> SubColumns<'a> {
    pub fn new(base: &'a dyn LinearOperator, cols: Vec<usize>) -> Self {
        let scratch = Mutex::new(vec![0.0; base.ncols()]);
        SubColumns {
            base,
            cols,
            scratch,
        }
    }
}

impl LinearOperator for SubColumns<'_> {
    fn nrows(&self) -> usize {
        self.base.nrows()
    }
    fn ncols(&self) -> usize {
        self.cols.len()
    }
    fn apply(&self, beta: &[f64], out: &mut [f64]) {
        let mut full = self.scratch.lock().unwrap_or_else(|e| e.into_inner());
        full.fill(0.0);
        for (&c, &b) in self.cols.iter().zip(beta) {
            full[c] += b;
        }
        self.base.apply(&full, out);
    }
    fn transpose_apply(&self, r: &[f64], out: &mut [f64]) {
        let mut full = self.scratch.lock().unwrap_or_else(|e| e.into_inner());
        self.base.transpose_apply(r, &mut full);
        for (o, &c) in out.iter_mut().zip(&self.cols) {
            *o = full[c];
        }
    }
}

/// Solution of a working-set solve: coefficients on `columns` only.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSolution {
    pub columns: Vec<usize>,
    pub result: SolveResult,
    pub rounds: usize,
}

impl SparseSolution {
    pub fn dense_beta(&self, p: usize) -> Vec<f64> {
        let mut beta = vec![0.0; p];
        for (&c, &b) in self.columns.iter().zip(&self.result.beta) {
            beta[c] += b;
        }
        beta
    }
}

const MAX_ROUNDS: usize = 500;

/// Same problem as [`solve_constrained_ls`], solved on a growing set of columns.
///
/// Each round runs the accelerated solver on the working set, prices all
/// candidates at the restricted solution and adds the worst KKT violators.
/// Stops when the residual over all candidates is below `cfg.kkt_tol`.
/// `cfg.max_iter` bounds the total number of inner iterations.
pub fn solve_working_set(
    pricer: &dyn ColumnPricer,
    y: &[f64],
    projector: Projector,
    cfg: &SolverConfig,
) -> Result<SparseSolution> {
    cfg.validate()?;
    projector.validate()?;
    let (n, p) = (pricer.nrows(), pricer.ncandidates());
    if y.len() != n {
        return Err(Error::LengthMismatch {
            left: y.len(),
            right: n,
        });
    }
    if p == 0 {
        return Err(Error::InvalidInput("design has no columns".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("responses must be finite".into()));
    }

    let mut columns = vec![0usize];
    let mut beta = vec![y.iter().sum::<f64>() / n as f64];
    let mut in_set = vec![false; p];
    in_set[0] = true;
    let mut grad = vec![0.0; p];
    let mut fitted = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut iterations = 0;
    let mut rounds = 0;
    let mut inner_tol = cfg.kkt_tol;

    loop {
        rounds += 1;
        let sub = pricer.restrict(&columns);
        let inner = SolverConfig {
            max_iter: cfg.max_iter.saturating_sub(iterations).max(1),
            kkt_tol: inner_tol,
            ..*cfg
        };
        let res = solve_from(sub.as_ref(), y, projector, &inner, beta)?;
        iterations += res.iterations;
        sub.apply(&res.beta, &mut fitted);
        drop(sub);
        for ((r, &f), &yi) in resid.iter_mut().zip(&fitted).zip(y) {
            *r = f - yi;
        }
        pricer.price(&resid, &mut grad);

        let (kkt, additions) =
            full_kkt(&projector, &columns, &res.beta, &grad, &in_set, cfg.kkt_tol);
        let out_of_budget = iterations >= cfg.max_iter || rounds >= MAX_ROUNDS;
        // nothing left to add but the restricted solve is not accurate enough
        let refine = additions.is_empty()
            && res.converged
            && kkt >= cfg.kkt_tol
            && inner_tol > cfg.kkt_tol * 1e-3;
        if refine && !out_of_budget {
            inner_tol *= 0.1;
            beta = res.beta;
            continue;
        }
        if (kkt < cfg.kkt_tol && res.converged) || additions.is_empty() || out_of_budget {
            let converged = kkt < cfg.kkt_tol && res.converged;
            let result = SolveResult {
                kkt_residual: kkt,
                iterations,
                converged,
                ..res
            };
            return Ok(SparseSolution {
                columns,
                result,
                rounds,
            });
        }
        beta = res.beta;
        for j in additions {
            let c = pricer.canonical(j);
            if !in_set[c] {
                in_set[c] = true;
                columns.push(c);
                beta.push(0.0);
            }
            in_set[j] = true;
        }
    }
}

/// KKT residual over all candidates (zero outside the working set) and the
/// outside columns worth adding, worst first.
fn full_kkt(
    projector: &Projector,
    columns: &[usize],
    beta: &[f64],
    grad: &[f64],
    in_set: &[bool],
    tol: f64,
) -> (f64, Vec<usize>) {
    let score = |g: f64| match projector {
        Projector::L1BallExceptFirst(_) => g.abs(),
        _ => -g,
    };
    let budget_used: Option<f64> = projector.radius().map(|_| match projector {
        Projector::L1BallExceptFirst(_) => beta[1..].iter().map(|b| b.abs()).sum(),
        _ => beta[1..].iter().sum(),
    });
    let tight = match (budget_used, projector.radius()) {
        (Some(used), Some(v)) => used >= v - tol,
        _ => false,
    };
    let level = |cols: &mut dyn Iterator<Item = usize>| {
        cols.map(|j| score(grad[j]).max(0.0)).fold(0.0, f64::max)
    };
    let outside_max = level(&mut (1..grad.len()).filter(|&j| !in_set[j]));
    let inside_max = level(&mut columns.iter().skip(1).copied());

    // residual of the full problem, using the restricted beta padded with zeros
    let g_set: Vec<f64> = columns.iter().map(|&c| grad[c]).collect();
    let mut kkt = projector.kkt_residual(beta, &g_set, tol);
    if !tight {
        kkt = kkt.max(outside_max);
    } else if outside_max > inside_max {
        // the multiplier is set by a column outside the working set
        kkt = g_set[0].abs();
        for (&gj, &bj) in g_set.iter().zip(beta).skip(1) {
            if bj != 0.0 {
                let r = match projector {
                    Projector::L1BallExceptFirst(_) => gj + outside_max * bj.signum(),
                    _ => gj + outside_max,
                };
                kkt = kkt.max(r.abs());
            }
        }
    }

    let threshold = if tight { inside_max } else { 0.0 } + tol;
    let mut cands: Vec<(f64, usize)> = (1..grad.len())
        .filter(|&j| !in_set[j])
        .map(|j| (score(grad[j]), j))
        .filter(|&(s, _)| s > threshold)
        .collect();
    let k = (columns.len() / 2).max(16);
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0));
        cands.truncate(k);
    }
    cands.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    (kkt, cands.into_iter().map(|(_, j)| j).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_lattice, BitColumns};
    use crate::lattice::LatticeGrid;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Identity(usize);

    impl LinearOperator for Identity {
        fn nrows(&self) -> usize {
            self.0
        }
        fn ncols(&self) -> usize {
            self.0
        }
        fn apply(&self, beta: &[f64], out: &mut [f64]) {
            out.copy_from_slice(beta);
        }
        fn transpose_apply(&self, r: &[f64], out: &mut [f64]) {
            out.copy_from_slice(r);
        }
    }

    fn bit_matrix(cols: &[Vec<bool>], nrows: usize) -> BitColumns {
        let mut m = BitColumns::new(nrows);
        for c in cols {
            let mut words = vec![0u64; nrows.div_ceil(64)];
            for (i, &b) in c.iter().enumerate() {
                if b {
                    words[i / 64] |= 1 << (i % 64);
                }
            }
            m.push(&words);
        }
        m
    }

    /// Minimum-distance feasible candidate among closed-form solutions on every
    /// support / sign pattern. Covers interior and boundary cases of the ball.
    fn brute_projection(v: &[f64], proj: Projector) -> Vec<f64> {
        let m = v.len() - 1;
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut consider = |cand: Vec<f64>| {
            let d = sq_dist(&cand, v);
            if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                best = Some((d, cand));
            }
        };
        let patterns = 3usize.pow(m as u32);
        for code in 0..patterns {
            // sign per tail coordinate: 0 -> fixed at zero, 1 -> positive, 2 -> negative
            let mut signs = vec![0i32; m];
            let mut c = code;
            for s in signs.iter_mut() {
                *s = match c % 3 {
                    0 => 0,
                    1 => 1,
                    _ => -1,
                };
                c /= 3;
            }
            let support: Vec<usize> = (0..m).filter(|&j| signs[j] != 0).collect();
            let allow_negative = matches!(proj, Projector::L1BallExceptFirst(_));
            if !allow_negative && signs.iter().any(|&s| s < 0) {
                continue;
            }
            let mut base = vec![0.0; m + 1];
            base[0] = v[0];
            for &j in &support {
                base[j + 1] = v[j + 1];
            }
            let feasible = |b: &[f64]| -> bool {
                let tail = &b[1..];
                let sign_ok = (0..m).all(|j| {
                    (signs[j] == 0 && tail[j] == 0.0) || (signs[j] as f64 * tail[j] >= -1e-12)
                });
                let budget = match proj {
                    Projector::NonnegExceptFirst => true,
                    Projector::L1BallExceptFirst(r) | Projector::CappedSimplexExceptFirst(r) => {
                        tail.iter().map(|x| x.abs()).sum::<f64>() <= r + 1e-9
                    }
                };
                sign_ok && budget
            };
            // interior: free coordinates equal v
            if feasible(&base) {
                consider(base.clone());
            }
            // boundary: sum_j s_j b_j = r on the support
            if let Some(r) = proj.radius() {
                if !support.is_empty() {
                    let s_dot: f64 = support.iter().map(|&j| signs[j] as f64 * v[j + 1]).sum();
                    let mu = (s_dot - r) / support.len() as f64;
                    let mut b = base.clone();
                    for &j in &support {
                        b[j + 1] = v[j + 1] - mu * signs[j] as f64;
                    }
                    if feasible(&b) {
                        consider(b);
                    }
                }
            }
        }
        best.unwrap().1
    }

    #[test]
    fn cone_projection_examples() {
        assert_eq!(
            project_nonneg_except_first(&[-2.0, -1.0, 3.0]),
            vec![-2.0, 0.0, 3.0]
        );
        assert_eq!(
            project_nonneg_except_first(&[-2.0, 1.0, 3.0]),
            vec![-2.0, 1.0, 3.0]
        );
    }

    #[test]
    fn ball_projection_examples() {
        let b = vec![4.0, 0.5, -0.25, 0.1];
        assert_eq!(project_l1_ball_except_first(&b, 1.0).unwrap(), b);
        assert_eq!(
            project_l1_ball_except_first(&b, 0.0).unwrap(),
            vec![4.0, 0.0, 0.0, 0.0]
        );
        assert!(matches!(
            project_l1_ball_except_first(&b, -1.0),
            Err(Error::NegativeBound(_))
        ));
        let out = project_l1_ball_except_first(&[0.0, 3.0, -1.0], 1.0).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn simplex_projection_examples() {
        let b = vec![-1.0, 0.2, 0.3];
        assert_eq!(project_capped_simplex_except_first(&b, 1.0).unwrap(), b);
        assert_eq!(
            project_capped_simplex_except_first(&b, 0.0).unwrap(),
            vec![-1.0, 0.0, 0.0]
        );
        assert!(project_capped_simplex_except_first(&b, -0.5).is_err());
        let out = project_capped_simplex_except_first(&[0.0, 2.0, -5.0, 1.0], 2.0).unwrap();
        assert_eq!(out, vec![0.0, 1.5, 0.0, 0.5]);
        let inf = project_capped_simplex_except_first(&[0.0, 2.0, -5.0], f64::INFINITY).unwrap();
        assert_eq!(inf, vec![0.0, 2.0, 0.0]);
    }

    #[test]
    fn projections_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..300 {
            let p = rng.random_range(2..=6);
            let v: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
            let r = rng.random_range(0.0..4.0);
            for proj in [
                Projector::NonnegExceptFirst,
                Projector::L1BallExceptFirst(r),
                Projector::CappedSimplexExceptFirst(r),
            ] {
                let mut fast = v.clone();
                proj.project(&mut fast);
                let slow = brute_projection(&v, proj);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!(
                        (a - b).abs() < 1e-8,
                        "case {case} {proj:?}: {fast:?} vs {slow:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn lipschitz_examples() {
        let l = estimate_lipschitz(&Identity(7), 50);
        assert!((l - 1.05).abs() < 1e-12);

        let n = 13;
        let ones = bit_matrix(&[vec![true; n]], n);
        assert!((estimate_lipschitz(&ones, 50) - 1.05 * n as f64).abs() < 1e-9);

        let zero = bit_matrix(&[vec![false; 4], vec![false; 4]], 4);
        assert_eq!(estimate_lipschitz(&zero, 10), 0.0);

        let m = build_lattice(&LatticeGrid::new(vec![4, 4]).unwrap());
        let dense = DMatrix::from_fn(16, 16, |i, j| if m.entry(i, j) { 1.0 } else { 0.0 });
        let top = (dense.transpose() * &dense).symmetric_eigenvalues().max();
        let est = estimate_lipschitz(&m, 50);
        assert!(est >= top && est <= 1.1 * top, "{est} vs {top}");
    }

    #[test]
    fn zero_radius_solution_is_the_mean() {
        let m = build_lattice(&LatticeGrid::new(vec![4, 3]).unwrap());
        let y: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let res = solve_constrained_ls(
            &m,
            &y,
            Projector::L1BallExceptFirst(0.0),
            &SolverConfig::default(),
        )
        .unwrap();
        let mean = y.iter().sum::<f64>() / 12.0;
        assert!((res.beta[0] - mean).abs() < 1e-12);
        assert!(res.beta[1..].iter().all(|&b| b == 0.0));
        assert!(res.converged);
    }

    #[test]
    fn feasible_noiseless_data_is_recovered() {
        let m = build_lattice(&LatticeGrid::new(vec![5, 4]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut beta: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        beta[0] = -0.3;
        let mut y = vec![0.0; 20];
        m.apply(&beta, &mut y);
        for proj in [
            Projector::NonnegExceptFirst,
            Projector::L1BallExceptFirst(100.0),
        ] {
            let res = solve_constrained_ls(&m, &y, proj, &SolverConfig::default()).unwrap();
            let mut fit = vec![0.0; 20];
            m.apply(&res.beta, &mut fit);
            for (a, b) in fit.iter().zip(&y) {
                assert!((a - b).abs() < 1e-8);
            }
            assert!(res.objective < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = build_lattice(&LatticeGrid::new(vec![3]).unwrap());
        let cfg = SolverConfig::default();
        assert!(solve_constrained_ls(
            &m,
            &[1.0, f64::NAN, 0.0],
            Projector::NonnegExceptFirst,
            &cfg
        )
        .is_err());
        assert!(solve_constrained_ls(&m, &[1.0, 0.0], Projector::NonnegExceptFirst, &cfg).is_err());
        assert!(solve_constrained_ls(
            &m,
            &[1.0, 0.0, 2.0],
            Projector::L1BallExceptFirst(-1.0),
            &cfg
        )
        .is_err());
        let bad = SolverConfig { max_iter: 0, ..cfg };
        assert!(
            solve_constrained_ls(&m, &[1.0, 0.0, 2.0], Projector::NonnegExceptFirst, &bad).is_err()
        );
    }

    #[test]
    fn non_convergence_is_flagged() {
        let m = build_lattice(&LatticeGrid::new(vec![8, 8]).unwrap());
        let y: Vec<f64> = (0..64).map(|i| ((i * 37) % 11) as f64).collect();
        let cfg = SolverConfig {
            max_iter: 3,
            ..SolverConfig::default()
        };
        let res = solve_constrained_ls(&m, &y, Projector::NonnegExceptFirst, &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 3);
    }

    /// Least squares restricted to `cols` with an optional linear equality
    /// `sum_k c_k beta_{cols[k]} = rhs`. Returns `None` if rank deficient.
    fn restricted_ls(
        a: &DMatrix<f64>,
        y: &DVector<f64>,
        cols: &[usize],
        eq: Option<(&[f64], f64)>,
    ) -> Option<Vec<f64>> {
        let sub = DMatrix::from_fn(a.nrows(), cols.len(), |i, k| a[(i, cols[k])]);
        let k = cols.len();
        if sub.clone().svd(false, false).rank(1e-10) < k {
            return None;
        }
        let gram = sub.transpose() * &sub;
        let rhs = sub.transpose() * y;
        let sol = match eq {
            None => gram.lu().solve(&rhs)?,
            Some((c, r)) => {
                let mut kkt = DMatrix::zeros(k + 1, k + 1);
                kkt.view_mut((0, 0), (k, k)).copy_from(&gram);
                for i in 0..k {
                    kkt[(i, k)] = c[i];
                    kkt[(k, i)] = c[i];
                }
                let mut b = DVector::zeros(k + 1);
                b.rows_mut(0, k).copy_from(&rhs);
                b[k] = r;
                kkt.lu().solve(&b)?.rows(0, k).into_owned()
            }
        };
        Some(sol.iter().copied().collect())
    }

    /// Fitted values from exhaustive enumeration of supports and signs.
    fn brute_fit(a: &DMatrix<f64>, y: &DVector<f64>, proj: Projector) -> DVector<f64> {
        let p = a.ncols();
        let m = p - 1;
        let mut best: Option<(f64, DVector<f64>)> = None;
        for code in 0..3usize.pow(m as u32) {
            let mut signs = vec![0i32; m];
            let mut c = code;
            for s in signs.iter_mut() {
                *s = [0, 1, -1][c % 3];
                c /= 3;
            }
            if !matches!(proj, Projector::L1BallExceptFirst(_)) && signs.contains(&-1) {
                continue;
            }
            let mut cols = vec![0];
            cols.extend((0..m).filter(|&j| signs[j] != 0).map(|j| j + 1));
            let sgn: Vec<f64> = cols
                .iter()
                .map(|&c| if c == 0 { 0.0 } else { signs[c - 1] as f64 })
                .collect();
            let mut cands = vec![restricted_ls(a, y, &cols, None)];
            if let Some(r) = proj.radius() {
                if cols.len() > 1 && r.is_finite() {
                    cands.push(restricted_ls(a, y, &cols, Some((&sgn, r))));
                }
            }
            for beta in cands.into_iter().flatten() {
                let ok_sign = beta.iter().zip(&sgn).skip(1).all(|(b, s)| b * s >= -1e-10);
                let l1: f64 = beta.iter().skip(1).map(|b| b.abs()).sum();
                let ok_budget = proj.radius().is_none_or(|r| l1 <= r + 1e-9);
                if ok_sign && ok_budget {
                    let mut full = DVector::zeros(p);
                    for (k, &c) in cols.iter().enumerate() {
                        full[c] = beta[k];
                    }
                    let fit = a * &full;
                    let obj = (y - &fit).norm_squared();
                    if best.as_ref().is_none_or(|(o, _)| obj < *o) {
                        best = Some((obj, fit));
                    }
                }
            }
        }
        best.unwrap().1
    }

    #[test]
    fn solves_match_exhaustive_active_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (n, p) = (8, 5);
        let cfg = SolverConfig {
            kkt_tol: 1e-8,
            rel_tol: 1e-14,
            ..SolverConfig::default()
        };
        for case in 0..40 {
            let mut cols = vec![vec![true; n]];
            for _ in 1..p {
                cols.push((0..n).map(|_| rng.random_bool(0.5)).collect());
            }
            let op = bit_matrix(&cols, n);
            let dense = DMatrix::from_fn(n, p, |i, j| if cols[j][i] { 1.0 } else { 0.0 });
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let yv = DVector::from_vec(y.clone());
            let r = rng.random_range(0.1..2.0);
            for proj in [
                Projector::NonnegExceptFirst,
                Projector::L1BallExceptFirst(r),
                Projector::CappedSimplexExceptFirst(r),
            ] {
                let res = solve_constrained_ls(&op, &y, proj, &cfg).unwrap();
                let mut fit = vec![0.0; n];
                op.apply(&res.beta, &mut fit);
                let oracle = brute_fit(&dense, &yv, proj);
                for i in 0..n {
                    assert!(
                        (fit[i] - oracle[i]).abs() < 1e-6,
                        "case {case} {proj:?}: {fit:?} vs {oracle:?}"
                    );
                }
                assert!(
                    res.converged,
                    "case {case} {proj:?} kkt {} it {} beta {:?}",
                    res.kkt_residual, res.iterations, res.beta
                );
            }
        }
    }

    fn noisy_lattice(dims: &[usize], seed: u64) -> (crate::design::DesignMatrix, Vec<f64>) {
        let g = LatticeGrid::new(dims.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = (0..g.len())
            .map(|i| {
                let p = g.point_of(&g.multi_index(i));
                p.iter().sum::<f64>() + rng.random_range(-1.0..1.0)
            })
            .collect();
        (build_lattice(&g), y)
    }

    fn fitted(a: &dyn LinearOperator, beta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; a.nrows()];
        a.apply(beta, &mut out);
        out
    }

    #[test]
    fn fitted_values_do_not_depend_on_start() {
        let (m, y) = noisy_lattice(&[6, 5], 4);
        let cfg = SolverConfig {
            kkt_tol: 1e-9,
            ..SolverConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for proj in [
            Projector::NonnegExceptFirst,
            Projector::L1BallExceptFirst(1.5),
            Projector::CappedSimplexExceptFirst(1.5),
        ] {
            let a = solve_constrained_ls(&m, &y, proj, &cfg).unwrap();
            let init: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = solve_constrained_ls_from(&m, &y, proj, &cfg, init).unwrap();
            assert!(a.converged && b.converged);
            for (u, v) in fitted(&m, &a.beta).iter().zip(fitted(&m, &b.beta)) {
                assert!((u - v).abs() < 1e-6, "{proj:?}");
            }
        }
    }

    #[test]
    fn objective_never_increases() {
        let (m, y) = noisy_lattice(&[9, 9], 8);
        for proj in [
            Projector::NonnegExceptFirst,
            Projector::L1BallExceptFirst(2.0),
        ] {
            let mut last = f64::INFINITY;
            for max_iter in 1..150 {
                let cfg = SolverConfig {
                    max_iter,
                    ..SolverConfig::default()
                };
                let res = solve_constrained_ls(&m, &y, proj, &cfg).unwrap();
                assert!(
                    res.objective <= last * (1.0 + 1e-12),
                    "{proj:?} at {max_iter}"
                );
                last = res.objective;
            }
        }
    }

    #[test]
    fn solutions_are_feasible() {
        let (m, y) = noisy_lattice(&[7, 6], 11);
        let res = solve_constrained_ls(
            &m,
            &y,
            Projector::L1BallExceptFirst(0.7),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(res.beta[1..].iter().map(|b| b.abs()).sum::<f64>() <= 0.7 + 1e-12);
        let res = solve_constrained_ls(
            &m,
            &y,
            Projector::CappedSimplexExceptFirst(0.7),
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(res.beta[1..].iter().all(|&b| b >= 0.0));
        assert!(res.beta[1..].iter().sum::<f64>() <= 0.7 + 1e-12);
        let direct = sq_dist(&fitted(&m, &res.beta), &y);
        assert!((direct - res.objective).abs() <= 1e-12 * direct);
    }

    #[test]
    fn working_set_matches_full_solve() {
        let (m, y) = noisy_lattice(&[8, 7], 21);
        let cfg = SolverConfig {
            kkt_tol: 1e-9,
            ..SolverConfig::default()
        };
        for proj in [
            Projector::NonnegExceptFirst,
            Projector::L1BallExceptFirst(1.0),
            Projector::CappedSimplexExceptFirst(1.0),
        ] {
            let full = solve_constrained_ls(&m, &y, proj, &cfg).unwrap();
            let ws = solve_working_set(&AllColumns(&m), &y, proj, &cfg).unwrap();
            assert!(full.converged && ws.result.converged, "{proj:?}");
            assert!(ws.columns.len() < 56);
            let beta = ws.dense_beta(56);
            for (u, v) in fitted(&m, &full.beta).iter().zip(fitted(&m, &beta)) {
                assert!((u - v).abs() < 1e-6, "{proj:?}");
            }
            let mut g = vec![0.0; 56];
            let r: Vec<f64> = fitted(&m, &beta)
                .iter()
                .zip(&y)
                .map(|(f, yi)| f - yi)
                .collect();
            m.transpose_apply(&r, &mut g);
            assert!(proj.kkt_residual(&beta, &g, 1e-9) < 1e-9, "{proj:?}");
        }
    }

    proptest! {
        #[test]
        fn projections_idempotent_and_nonexpansive(
            u in prop::collection::vec(-5.0..5.0f64, 2..12),
            w_seed in any::<u64>(),
            r in 0.0..6.0f64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(w_seed);
            let w: Vec<f64> = u.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
            for proj in [
                Projector::NonnegExceptFirst,
                Projector::L1BallExceptFirst(r),
                Projector::CappedSimplexExceptFirst(r),
            ] {
                let mut pu = u.clone();
                proj.project(&mut pu);
                let mut ppu = pu.clone();
                proj.project(&mut ppu);
                for (a, b) in pu.iter().zip(&ppu) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
                let mut pw = w.clone();
                proj.project(&mut pw);
                prop_assert!(sq_dist(&pu, &pw) <= sq_dist(&u, &w) * (1.0 + 1e-12) + 1e-24);
                let tail: f64 = pu[1..].iter().map(|x| x.abs()).sum();
                if let Some(rad) = proj.radius() {
                    prop_assert!(tail <= rad + 1e-12);
                }
            }
        }
    }
}
