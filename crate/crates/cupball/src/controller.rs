//! Output-feedback tube controller for the catch phase.
//!
//! The relative cup-ball error follows `e+ = e + dt u + w` with measurements
//! `y = e + v`. A Luenberger observer tracks `e`; the controller plans a
//! nominal error trajectory that ends exactly at zero when the task deadline
//! is reached (shrinking horizon), and tracks it with a static feedback gain.
//! Robustness comes from constraint tightening: invariant sets bound the
//! estimation error (`R_est`) and the tracking error of the observer state
//! around the nominal plan (`R_con`), and the state/input constraints are
//! shrunk by those sets so the true error respects the originals.
//!
//! Failure taxonomy used throughout the crate: a trial fails at setup when a
//! tightened set or the admissible initializer set is empty (an oversized
//! noise support; `FailureP2`), mid-run when some planning problem loses
//! feasibility (an undersized noise support; `FailureP1`), or silently when
//! the true error leaves the state constraint set even though every plan
//! solved (`ConstraintViolation`).

use crate::dynamics::LtiModel;
use crate::qp::{self, QpError, QpProblem, QpSolution};
use crate::sets::{
    linear_map, minkowski_sum, pontryagin_diff, rpi_outer_approx, Box2, ConvexSet, HPolytope,
    Zonotope,
};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("observer error map A - L is not Schur stable")]
    UnstableObserver,
    #[error("closed loop A + BK is not Schur stable")]
    UnstableFeedback,
    #[error("{0} must contain the origin")]
    OriginExcluded(&'static str),
    #[error("horizon must be at least one step")]
    ZeroHorizon,
    #[error("stage weights and rpi tolerance must be positive")]
    BadWeights,
    #[error("admissible observer initializer set is empty")]
    EmptyInitializerSet,
    #[error("planning requested at or beyond the task deadline")]
    StepBeyondHorizon,
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Strict modulus-inside-unit-circle test for a real 2x2 matrix.
fn schur_stable(m: &Matrix2<f64>) -> bool {
    let tr = m.trace();
    let det = m.determinant();
    let disc = tr * tr - 4.0 * det;
    if disc >= 0.0 {
        let s = disc.sqrt();
        0.5 * (tr + s).abs() < 1.0 && 0.5 * (tr - s).abs() < 1.0
    } else {
        // Complex pair with squared modulus det.
        det < 1.0
    }
}

/// Observer gain placing the poles of `A - L = I - L` at `poles`.
pub fn observer_gain_from_poles(poles: (f64, f64)) -> Matrix2<f64> {
    Matrix2::identity() - Matrix2::new(poles.0, 0.0, 0.0, poles.1)
}

/// Feedback gain placing the poles of `A + BK = I + dt K` at `poles`.
pub fn feedback_gain_from_poles(model: &LtiModel, poles: (f64, f64)) -> Matrix2<f64> {
    Matrix2::new((poles.0 - 1.0) / model.dt, 0.0, 0.0, (poles.1 - 1.0) / model.dt)
}

/// Catch-phase controller configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    /// Task deadline in steps; the nominal plan must reach zero at this step.
    pub horizon: usize,
    pub model: LtiModel,
    pub l_gain: Matrix2<f64>,
    pub k_gain: Matrix2<f64>,
    /// State constraint set for the true error.
    pub e_set: Box2,
    /// Input constraint set (relative velocity command).
    pub u_set: HPolytope,
    /// Process disturbance bound used for tightening.
    pub w_set: HPolytope,
    /// Assumed measurement-noise support (learned or configured).
    pub vhat: Box2,
    pub q_e: f64,
    pub r_u: f64,
    pub rpi_tol: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let model = LtiModel::default();
        Self {
            horizon: 25,
            model,
            l_gain: observer_gain_from_poles((0.6, 0.6)),
            k_gain: feedback_gain_from_poles(&model, (0.7, 0.7)),
            // Symmetric hull of the release-state envelope seen in swing-up
            // roll-outs.
            e_set: Box2::symmetric(Vector2::new(0.349, 0.2457)),
            u_set: Box2::symmetric(Vector2::new(8.0, 8.0)).to_hpolytope(),
            w_set: Box2::symmetric(Vector2::new(0.002, 0.002)).to_hpolytope(),
            vhat: Box2::symmetric(Vector2::new(0.012, 0.018)),
            q_e: 500.0,
            r_u: 0.4,
            rpi_tol: 1e-6,
        }
    }
}

impl ControllerConfig {
    /// Check the construction invariants: stability of both error maps and
    /// origin membership of every constraint set.
    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.horizon == 0 {
            return Err(ControllerError::ZeroHorizon);
        }
        if !(self.q_e > 0.0 && self.r_u > 0.0 && self.rpi_tol > 0.0) {
            return Err(ControllerError::BadWeights);
        }
        if !schur_stable(&(Matrix2::identity() - self.l_gain)) {
            return Err(ControllerError::UnstableObserver);
        }
        if !schur_stable(&(Matrix2::identity() + self.model.dt * self.k_gain)) {
            return Err(ControllerError::UnstableFeedback);
        }
        let origin = Vector2::zeros();
        if !self.e_set.contains(&origin) {
            return Err(ControllerError::OriginExcluded("state set"));
        }
        if !self.u_set.contains(&origin) {
            return Err(ControllerError::OriginExcluded("input set"));
        }
        if !self.w_set.contains(&origin) {
            return Err(ControllerError::OriginExcluded("disturbance set"));
        }
        if !self.vhat.contains(&origin) {
            return Err(ControllerError::OriginExcluded("noise support"));
        }
        Ok(())
    }

    pub fn with_vhat(mut self, vhat: Box2) -> Self {
        self.vhat = vhat;
        self
    }
}

/// Invariant error bounds and tightened constraint sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightenedSets {
    /// Invariant bound on the estimation error `e - e_hat`.
    pub r_est: Zonotope,
    /// Invariant bound on the tracking error `e_hat - e_bar`.
    pub r_con: Zonotope,
    /// State set shrunk by `r_est + r_con`.
    pub e_bar: HPolytope,
    /// Input set shrunk by `K r_con`.
    pub u_bar: HPolytope,
    /// Set when either tightened set is empty (setup-time failure).
    pub empty: bool,
}

/// Outer-approximate a configured disturbance set by a zonotope. Boxes and
/// zonotopes convert exactly; general H-polytopes fall back to their bounding
/// box, which only enlarges the tubes and so preserves soundness.
fn zonotope_cover(s: &HPolytope) -> Zonotope {
    let axes = [Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)];
    let hi = Vector2::new(
        s.support(&axes[0]).unwrap_or(0.0),
        s.support(&axes[1]).unwrap_or(0.0),
    );
    let lo = Vector2::new(
        -s.support(&(-axes[0])).unwrap_or(0.0),
        -s.support(&(-axes[1])).unwrap_or(0.0),
    );
    Box2::new(lo, hi).to_zonotope()
}

/// Build the invariant tubes and tightened constraints for a configuration.
/// Never fails: numerical non-convergence of the invariant-set iteration is
/// reported through the `empty` flag like any other setup-time infeasibility.
pub fn build_tightened_sets(cfg: &ControllerConfig) -> TightenedSets {
    let a_obs = Matrix2::identity() - cfg.l_gain;
    let a_fb = Matrix2::identity() + cfg.model.dt * cfg.k_gain;
    let vhat_z = cfg.vhat.to_zonotope();

    // Estimation-error disturbance: w - L v.
    let d_est = minkowski_sum(&zonotope_cover(&cfg.w_set), &vhat_z.linear_map(&(-cfg.l_gain)));
    let r_est = match rpi_outer_approx(&a_obs, &ConvexSet::Zonotope(d_est), cfg.rpi_tol) {
        Ok(z) => z,
        Err(e) => {
            log::warn!("estimation tube construction failed ({e}); reporting empty sets");
            return degenerate_sets();
        }
    };

    // Tracking-error disturbance: L (e - e_hat) + L v.
    let d_con = minkowski_sum(
        &r_est.linear_map(&cfg.l_gain),
        &vhat_z.linear_map(&cfg.l_gain),
    );
    let r_con = match rpi_outer_approx(&a_fb, &ConvexSet::Zonotope(d_con), cfg.rpi_tol) {
        Ok(z) => z,
        Err(e) => {
            log::warn!("tracking tube construction failed ({e}); reporting empty sets");
            return degenerate_sets();
        }
    };

    let both = minkowski_sum(&r_est, &r_con);
    let e_bar = pontryagin_diff(&cfg.e_set.to_hpolytope(), &ConvexSet::Zonotope(both));
    let k_r_con = match linear_map(&cfg.k_gain, &ConvexSet::Zonotope(r_con.clone())) {
        Ok(z) => z,
        Err(_) => r_con.clone(),
    };
    let u_bar = pontryagin_diff(&cfg.u_set, &ConvexSet::Zonotope(k_r_con));
    let empty = e_bar.is_empty() || u_bar.is_empty();
    TightenedSets { r_est, r_con, e_bar, u_bar, empty }
}

fn degenerate_sets() -> TightenedSets {
    // An unsatisfiable row (0 . x <= -1) makes emptiness self-describing.
    let infeasible = HPolytope { normals: vec![Vector2::zeros()], offsets: vec![-1.0] };
    TightenedSets {
        r_est: Zonotope::point(Vector2::zeros()),
        r_con: Zonotope::point(Vector2::zeros()),
        e_bar: infeasible.clone(),
        u_bar: infeasible,
        empty: true,
    }
}

/// Admissible observer initializers: starting the observer here keeps the
/// true error inside the state set for any estimation error in `R_est`.
/// Shrinking the (axis-aligned) state box by the tube's per-axis support is
/// the exact Pontryagin difference.
pub fn initializer_box(cfg: &ControllerConfig, ts: &TightenedSets) -> Box2 {
    let ex = Vector2::new(1.0, 0.0);
    let ez = Vector2::new(0.0, 1.0);
    let lo = Vector2::new(
        cfg.e_set.lo.x + ts.r_est.support(&(-ex)),
        cfg.e_set.lo.y + ts.r_est.support(&(-ez)),
    );
    let hi = Vector2::new(
        cfg.e_set.hi.x - ts.r_est.support(&ex),
        cfg.e_set.hi.y - ts.r_est.support(&ez),
    );
    Box2::new(lo, hi)
}

/// Deterministic interior point of the admissible initializer set (its
/// Chebyshev center, which for a box is the midpoint).
pub fn observer_init(cfg: &ControllerConfig, ts: &TightenedSets) -> Result<Vector2<f64>, ControllerError> {
    let b = initializer_box(cfg, ts);
    if b.is_empty() {
        return Err(ControllerError::EmptyInitializerSet);
    }
    Ok(b.center())
}

/// Initialize the observer from the first measurement by projecting it onto
/// the admissible set. When the assumed noise support covers the true one,
/// this puts the initial estimation error inside `R_est`.
pub fn init_from_measurement(
    cfg: &ControllerConfig,
    ts: &TightenedSets,
    y0: &Vector2<f64>,
) -> Result<Vector2<f64>, ControllerError> {
    let b = initializer_box(cfg, ts);
    if b.is_empty() {
        return Err(ControllerError::EmptyInitializerSet);
    }
    Ok(b.clamp(y0))
}

/// Observer update `e_hat+ = e_hat + dt u + L (y - e_hat)`.
pub fn observer_update(
    cfg: &ControllerConfig,
    e_hat: &Vector2<f64>,
    u: &Vector2<f64>,
    y: &Vector2<f64>,
) -> Vector2<f64> {
    e_hat + cfg.model.dt * u + cfg.l_gain * (y - e_hat)
}

/// Feedback law `u = u_bar + K (e_hat - e_bar)`.
pub fn control_law(
    u_bar: &Vector2<f64>,
    e_bar: &Vector2<f64>,
    e_hat: &Vector2<f64>,
    k_gain: &Matrix2<f64>,
) -> Vector2<f64> {
    u_bar + k_gain * (e_hat - e_bar)
}

/// Nominal plan from one shrinking-horizon solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NominalPlan {
    pub start_step: usize,
    /// Nominal errors from the current step to the deadline (length H + 1;
    /// the last entry is zero up to solver accuracy).
    pub e_bar: Vec<Vector2<f64>>,
    /// Nominal inputs (length H).
    pub u_bar: Vec<Vector2<f64>>,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlanOutcome {
    Plan(NominalPlan),
    Infeasible,
}

/// Stage cost of a nominal trajectory piece.
pub fn plan_cost(cfg: &ControllerConfig, e_bar: &[Vector2<f64>], u_bar: &[Vector2<f64>]) -> f64 {
    u_bar
        .iter()
        .enumerate()
        .map(|(m, u)| cfg.q_e * e_bar[m].norm_squared() + cfg.r_u * u.norm_squared())
        .sum()
}

/// Solve the shrinking-horizon planning problem at step `t`.
///
/// Decision variables are the current nominal error and the remaining
/// `H = horizon - t` nominal inputs; later nominal errors are affine in
/// those. Constraints: the nominal error must sit within `R_con` of the
/// observer state, every nominal error lies in the tightened state set,
/// every nominal input in the tightened input set, and the final error is
/// pinned to zero (which also makes any terminal cost a constant).
pub fn solve_shrinking_qp(
    cfg: &ControllerConfig,
    ts: &TightenedSets,
    e_hat: &Vector2<f64>,
    t: usize,
) -> Result<PlanOutcome, ControllerError> {
    if t >= cfg.horizon {
        return Err(ControllerError::StepBeyondHorizon);
    }
    if ts.empty {
        return Ok(PlanOutcome::Infeasible);
    }
    let h = cfg.horizon - t;
    let nb = 1 + h; // variable blocks: e_bar_t, then the inputs
    let nz = 2 * nb;
    let dt = cfg.model.dt;

    // Block-level quadratic form; expanded to interleaved coordinates below.
    let mut qb = DMatrix::<f64>::zeros(nb, nb);
    let mut coeff = vec![0.0; nb];
    for m in 0..h {
        coeff[0] = 1.0;
        for (j, c) in coeff.iter_mut().enumerate().skip(1) {
            *c = if j - 1 < m { dt } else { 0.0 };
        }
        for i in 0..nb {
            if coeff[i] == 0.0 {
                continue;
            }
            for j in 0..nb {
                if coeff[j] != 0.0 {
                    qb[(i, j)] += cfg.q_e * coeff[i] * coeff[j];
                }
            }
        }
    }
    for j in 1..nb {
        qb[(j, j)] += cfg.r_u;
    }
    let mut q = DMatrix::<f64>::zeros(nz, nz);
    for i in 0..nb {
        for j in 0..nb {
            let v = 2.0 * qb[(i, j)];
            if v != 0.0 {
                q[(2 * i, 2 * j)] = v;
                q[(2 * i + 1, 2 * j + 1)] = v;
            }
        }
    }
    let c = DVector::<f64>::zeros(nz);

    // Terminal equality: e_bar_t + dt * sum(u) = 0, one row per axis.
    let mut eq_a = DMatrix::<f64>::zeros(2, nz);
    for axis in 0..2 {
        eq_a[(axis, axis)] = 1.0;
        for j in 0..h {
            eq_a[(axis, 2 * (1 + j) + axis)] = dt;
        }
    }
    let eq_b = DVector::<f64>::zeros(2);

    // Inequalities: anchor, tightened states, tightened inputs.
    let anchor = ts.r_con.to_hpolytope().simplified();
    let e_rows = ts.e_bar.simplified();
    let u_rows = ts.u_bar.simplified();
    let n_ineq = anchor.normals.len() + h * (e_rows.normals.len() + u_rows.normals.len());
    let mut ia = DMatrix::<f64>::zeros(n_ineq, nz);
    let mut ib = DVector::<f64>::zeros(n_ineq);
    let mut row = 0;
    for (n, off) in anchor.normals.iter().zip(&anchor.offsets) {
        // n . (e_hat - e_bar_t) <= off
        ia[(row, 0)] = -n.x;
        ia[(row, 1)] = -n.y;
        ib[row] = off - n.dot(e_hat);
        row += 1;
    }
    for m in 0..h {
        for (n, off) in e_rows.normals.iter().zip(&e_rows.offsets) {
            ia[(row, 0)] = n.x;
            ia[(row, 1)] = n.y;
            for j in 0..m {
                ia[(row, 2 * (1 + j))] = dt * n.x;
                ia[(row, 2 * (1 + j) + 1)] = dt * n.y;
            }
            ib[row] = *off;
            row += 1;
        }
        for (n, off) in u_rows.normals.iter().zip(&u_rows.offsets) {
            ia[(row, 2 * (1 + m))] = n.x;
            ia[(row, 2 * (1 + m) + 1)] = n.y;
            ib[row] = *off;
            row += 1;
        }
    }
    debug_assert_eq!(row, n_ineq);

    let problem = QpProblem { q, c, eq_a, eq_b, ineq_a: ia, ineq_b: ib };
    match qp::solve(&problem)? {
        QpSolution::Infeasible => Ok(PlanOutcome::Infeasible),
        QpSolution::Optimal(opt) => {
            let z = opt.z;
            let mut e_bar = Vec::with_capacity(h + 1);
            let mut u_bar = Vec::with_capacity(h);
            e_bar.push(Vector2::new(z[0], z[1]));
            for m in 0..h {
                let u = Vector2::new(z[2 * (1 + m)], z[2 * (1 + m) + 1]);
                let next = e_bar[m] + dt * u;
                u_bar.push(u);
                e_bar.push(next);
            }
            Ok(PlanOutcome::Plan(NominalPlan {
                start_step: t,
                e_bar,
                u_bar,
                kkt_residual: opt.kkt_residual,
            }))
        }
    }
}

// ---------------------------------------------------------------------------
// Closed-loop status and trial classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ControllerStatus {
    Running,
    TrialFailureP1,
    TrialFailureP2,
    Done,
}

/// Mutable per-rollout controller bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub t: usize,
    pub e_hat: Vector2<f64>,
    pub e_bar_prev: Option<Vector2<f64>>,
    pub status: ControllerStatus,
}

impl ControllerState {
    pub fn new(e_hat0: Vector2<f64>) -> Self {
        Self { t: 0, e_hat: e_hat0, e_bar_prev: None, status: ControllerStatus::Running }
    }

    /// Transition to a terminal status; failures and completion are sticky.
    pub fn mark(&mut self, status: ControllerStatus) {
        if self.status == ControllerStatus::Running {
            self.status = status;
        }
    }
}

/// One row of a closed-loop trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    pub y: Vector2<f64>,
    pub e_hat: Vector2<f64>,
    pub e_bar: Option<Vector2<f64>>,
    pub u_bar: Option<Vector2<f64>>,
    pub u: Option<Vector2<f64>>,
    pub e_true: Vector2<f64>,
    pub qp_feasible: bool,
}

/// Complete closed-loop trace of one trial.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// Empty tightened sets or empty initializer set before the first step.
    pub setup_failed: bool,
    pub steps: Vec<StepRecord>,
    /// True error at the deadline (absent when the loop stopped early).
    pub final_e: Option<Vector2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialOutcome {
    Success,
    FailureP1,
    FailureP2,
    ConstraintViolation,
}

/// Classify a finished trial. Precedence: setup failures dominate, then
/// mid-run infeasibility, then true-state constraint violations.
pub fn classify_failure(trace: &Trace, e_set: &Box2) -> TrialOutcome {
    if trace.setup_failed {
        return TrialOutcome::FailureP2;
    }
    if let Some(step) = trace.steps.iter().find(|s| !s.qp_feasible) {
        return if step.t == 0 { TrialOutcome::FailureP2 } else { TrialOutcome::FailureP1 };
    }
    let violated = trace.steps.iter().any(|s| !e_set.contains(&s.e_true))
        || trace.final_e.map(|e| !e_set.contains(&e)).unwrap_or(false);
    if violated {
        TrialOutcome::ConstraintViolation
    } else {
        TrialOutcome::Success
    }
}
