//! Dense strictly convex quadratic programming.
//!
//! Solves `min 0.5 z'Qz + c'z` subject to `E z = f` and `A z <= b` with
//! `Q` symmetric positive definite, by a dual active-set method: start at the
//! unconstrained optimum, repeatedly add the most violated constraint, taking
//! primal and dual steps and dropping blocking constraints as needed. The
//! iterate is always dual feasible and optimal for its active set, so when no
//! violated constraint remains the iterate is the optimum, and an addition
//! step that can make no progress proves the constraints inconsistent.
//!
//! Problems here are small (tens of variables, a few hundred rows), so each
//! step refactors the small active-set Gram matrix instead of maintaining
//! incremental factorizations.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Feasibility slack: a constraint counts as violated beyond this.
pub const FEASIBILITY_TOL: f64 = 1e-10;

/// Directions with smaller projected norm are treated as zero (linear
/// dependence on the active set).
const STEP_DIR_TOL: f64 = 1e-11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("quadratic cost matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("active set cycling: exceeded {0} iterations")]
    IterationLimit(usize),
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    /// Symmetric positive definite cost matrix.
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    /// Equality rows `eq_a z = eq_b`; may be 0 x n.
    pub eq_a: DMatrix<f64>,
    pub eq_b: DVector<f64>,
    /// Inequality rows `ineq_a z <= ineq_b`; may be 0 x n.
    pub ineq_a: DMatrix<f64>,
    pub ineq_b: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpOptimal {
    pub z: DVector<f64>,
    /// Multipliers for the equality rows (sign free).
    pub eq_duals: DVector<f64>,
    /// Multipliers for the inequality rows (nonnegative, zero when inactive).
    pub ineq_duals: DVector<f64>,
    /// Max over stationarity, primal feasibility and complementarity residuals.
    pub kkt_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub enum QpSolution {
    Optimal(QpOptimal),
    /// The constraint system admits no point (detected in the dual).
    Infeasible,
}

struct ActiveConstraint {
    /// Normal in `>=` orientation (flipped rows keep a record of the flip).
    normal: DVector<f64>,
    /// Index into the inequality rows, `None` for equality rows.
    ineq_index: Option<usize>,
    /// Sign applied to the original row to orient it (equalities only).
    sign: f64,
    multiplier: f64,
}

pub fn solve(p: &QpProblem) -> Result<QpSolution, QpError> {
    let n = p.q.nrows();
    assert_eq!(p.q.ncols(), n);
    assert_eq!(p.c.len(), n);
    assert_eq!(p.eq_a.nrows(), p.eq_b.len());
    assert_eq!(p.ineq_a.nrows(), p.ineq_b.len());

    let chol = p.q.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let mut z = chol.solve(&(-&p.c));
    let mut active: Vec<ActiveConstraint> = Vec::new();
    // Columns of Q^{-1} N for the active normals, kept in step with `active`.
    let mut qinv_n: Vec<DVector<f64>> = Vec::new();

    let max_iters = 50 * (n + p.eq_a.nrows() + p.ineq_a.nrows());
    let mut iterations = 0;

    // Queue: all equality rows first (forced), then repeated scans for the
    // most violated inequality.
    let mut eq_cursor = 0;
    loop {
        iterations += 1;
        if iterations > max_iters {
            return Err(QpError::IterationLimit(max_iters));
        }

        // Pick the next constraint to enforce.
        let (normal, target, ineq_index, sign) = if eq_cursor < p.eq_a.nrows() {
            let row: DVector<f64> = p.eq_a.row(eq_cursor).transpose();
            let resid = row.dot(&z) - p.eq_b[eq_cursor];
            let sign = if resid > 0.0 { -1.0 } else { 1.0 };
            let idx = eq_cursor;
            eq_cursor += 1;
            if resid.abs() <= FEASIBILITY_TOL {
                // Already satisfied; register with zero multiplier so later
                // steps still respect it.
                active.push(ActiveConstraint {
                    normal: row.clone() * sign,
                    ineq_index: None,
                    sign,
                    multiplier: 0.0,
                });
                qinv_n.push(chol.solve(&(row * sign)));
                continue;
            }
            let _ = idx;
            (row.clone() * sign, p.eq_b[eq_cursor - 1] * sign, None, sign)
        } else {
            // Most violated inequality not already active; ties broken by
            // lowest row index for determinism.
            let mut worst = FEASIBILITY_TOL;
            let mut pick: Option<usize> = None;
            for i in 0..p.ineq_a.nrows() {
                if active.iter().any(|a| a.ineq_index == Some(i)) {
                    continue;
                }
                let v = p.ineq_a.row(i).dot(&z.transpose()) - p.ineq_b[i];
                if v > worst {
                    worst = v;
                    pick = Some(i);
                }
            }
            match pick {
                None => break,
                Some(i) => {
                    // `a z <= b` becomes `-a z >= -b`.
                    let row: DVector<f64> = -p.ineq_a.row(i).transpose();
                    (row, -p.ineq_b[i], Some(i), -1.0)
                }
            }
        };

        // Inner loop: drive `normal . z` up to `target`, dropping blocking
        // active inequalities along the way.
        let mut entering_multiplier = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iters {
                return Err(QpError::IterationLimit(max_iters));
            }
            let y = chol.solve(&normal);
            // r solves  M r = N' Q^{-1} n  with M = N' Q^{-1} N.
            let na = active.len();
            let (step_dir, dual_rates) = if na == 0 {
                (y.clone(), DVector::zeros(0))
            } else {
                let mut m = DMatrix::zeros(na, na);
                let mut rhs = DVector::zeros(na);
                for i in 0..na {
                    rhs[i] = active[i].normal.dot(&y);
                    for j in 0..na {
                        m[(i, j)] = active[i].normal.dot(&qinv_n[j]);
                    }
                }
                let r = match m.clone().cholesky() {
                    Some(ch) => ch.solve(&rhs),
                    // Rank-deficient active set: minimum-norm least squares.
                    None => m
                        .svd(true, true)
                        .solve(&rhs, 1e-12)
                        .map_err(|_| QpError::NotPositiveDefinite)?,
                };
                let mut zdir = y.clone();
                for j in 0..na {
                    zdir -= &qinv_n[j] * r[j];
                }
                (zdir, r)
            };

            let ndz = normal.dot(&step_dir);
            let residual = target - normal.dot(&z);
            if residual <= FEASIBILITY_TOL {
                break;
            }

            // Dual blocking step over active inequalities with positive rate.
            let mut t1 = f64::INFINITY;
            let mut drop_idx: Option<usize> = None;
            for (k, a) in active.iter().enumerate() {
                if a.ineq_index.is_none() {
                    continue;
                }
                if dual_rates[k] > STEP_DIR_TOL {
                    let t = a.multiplier / dual_rates[k];
                    if t < t1 {
                        t1 = t;
                        drop_idx = Some(k);
                    }
                }
            }
            // Primal step to the constraint boundary.
            let t2 = if ndz > STEP_DIR_TOL * (1.0 + normal.norm() * step_dir.norm()) {
                residual / ndz
            } else {
                f64::INFINITY
            };

            if t1.is_infinite() && t2.is_infinite() {
                return Ok(QpSolution::Infeasible);
            }
            let t = t1.min(t2);
            if t2.is_finite() || t > 0.0 {
                if t2.is_finite() {
                    z += &step_dir * t;
                }
                for (k, a) in active.iter_mut().enumerate() {
                    a.multiplier -= t * dual_rates[k];
                }
                entering_multiplier += t;
            }
            if t2 <= t1 {
                active.push(ActiveConstraint {
                    normal: normal.clone(),
                    ineq_index,
                    sign,
                    multiplier: entering_multiplier,
                });
                qinv_n.push(y);
                break;
            } else {
                let k = drop_idx.expect("finite t1 implies a blocking constraint");
                active.remove(k);
                qinv_n.remove(k);
            }
        }
    }

    // Assemble duals in original row order and orientation.
    let mut eq_duals = DVector::zeros(p.eq_a.nrows());
    let mut ineq_duals = DVector::zeros(p.ineq_a.nrows());
    let mut eq_seen = 0;
    for a in &active {
        match a.ineq_index {
            // Stationarity holds as Qz + c - sum(n_i u_i) = 0 with oriented
            // normals n = sign * row, so the row-form multiplier is -sign * u.
            None => {
                eq_duals[eq_seen] = -a.sign * a.multiplier;
                eq_seen += 1;
            }
            Some(i) => ineq_duals[i] = a.multiplier,
        }
    }

    let kkt_residual = kkt_residual(p, &z, &eq_duals, &ineq_duals);
    Ok(QpSolution::Optimal(QpOptimal { z, eq_duals, ineq_duals, kkt_residual, iterations }))
}

/// Max KKT residual: stationarity of the Lagrangian (inequality rows enter as
/// `A z <= b` with nonnegative multipliers subtracted on the `>=` side, i.e.
/// `Qz + c + E'v + A'u = 0`), primal feasibility, and complementarity.
pub fn kkt_residual(
    p: &QpProblem,
    z: &DVector<f64>,
    eq_duals: &DVector<f64>,
    ineq_duals: &DVector<f64>,
) -> f64 {
    // The active-set normals are oriented `>=` (rows negated), so the
    // stationarity condition in original row orientation is
    // Qz + c + E'v_signed - (-A)'u = Qz + c + E'v_signed + A'u with u >= 0
    // absorbed below via the stored signs. Here duals are already expressed
    // for the original rows.
    let mut grad = &p.q * z + &p.c;
    if p.eq_a.nrows() > 0 {
        grad += p.eq_a.transpose() * eq_duals;
    }
    if p.ineq_a.nrows() > 0 {
        grad += p.ineq_a.transpose() * ineq_duals;
    }
    let mut res: f64 = grad.amax();
    for i in 0..p.eq_a.nrows() {
        res = res.max((p.eq_a.row(i).dot(&z.transpose()) - p.eq_b[i]).abs());
    }
    for i in 0..p.ineq_a.nrows() {
        let slack = p.ineq_a.row(i).dot(&z.transpose()) - p.ineq_b[i];
        res = res.max(slack.max(0.0));
        res = res.max((ineq_duals[i] * slack).abs());
        res = res.max((-ineq_duals[i]).max(0.0));
    }
    res
}
