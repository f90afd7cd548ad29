//! Offline swing-up planning.
//!
//! The planner solves a finite-horizon optimal control problem for the
//! string-taut phase: drive the cup so the ball swings from hanging rest to a
//! release state (angle and angular rate) from which it free-falls back onto
//! a motionless cup. The transcription is direct single shooting over the
//! planar cup forces with the planner-side Euler discretization; the terminal
//! equality and the state/input bounds are handled by an augmented
//! Lagrangian whose smooth inner problems are minimized with L-BFGS. All
//! gradients are adjoint-propagated analytically (finite-difference checked
//! in the tests).
//!
//! [`verify_terminal`] checks the release condition: from the terminal state,
//! with the cup held fixed, the predicted ball-cup gap must vanish at some
//! future time. [`rollout_openloop`] replays the planned force sequence
//! against the Runge-Kutta ground truth with perturbed physical parameters
//! and reports the realized start of the catch phase.

use crate::dynamics::{
    accel_jacobians, ball_position, ball_velocity, euler_step, predict_ballistic, rk4_step,
    string_tension, DynamicsError, PhysicalParams, State6,
};
use nalgebra::{Matrix2, Matrix6, SMatrix, Vector2, Vector3, Vector6};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gap norm below which the predicted rendezvous counts as a catch contact.
pub const VANISH_TOL: f64 = 0.005;

/// Ground-truth integration step (1 kHz).
pub const SIM_DT: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SwingupError {
    #[error("initial state violates the state bounds")]
    InfeasibleBounds,
    #[error("string tension never crossed zero within {0} simulated steps")]
    NoRelease(usize),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Axis-aligned box in the six-dimensional generalized state space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box6 {
    pub lo: Vector6<f64>,
    pub hi: Vector6<f64>,
}

impl Box6 {
    pub fn contains(&self, x: &State6) -> bool {
        (0..6).all(|i| x[i] >= self.lo[i] - 1e-9 && x[i] <= self.hi[i] + 1e-9)
    }

    pub fn max_violation(&self, x: &State6) -> f64 {
        (0..6)
            .map(|i| (self.lo[i] - x[i]).max(x[i] - self.hi[i]))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Planar force bounds for the cup actuator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForceBounds {
    pub lo: Vector2<f64>,
    pub hi: Vector2<f64>,
}

impl ForceBounds {
    pub fn clamp(&self, f: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new(f.x.clamp(self.lo.x, self.hi.x), f.y.clamp(self.lo.y, self.hi.y))
    }

    pub fn contains(&self, f: &Vector2<f64>) -> bool {
        f.x >= self.lo.x - 1e-9 && f.x <= self.hi.x + 1e-9
            && f.y >= self.lo.y - 1e-9
            && f.y <= self.hi.y + 1e-9
    }
}

/// Swing-up planning problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwingupProblem {
    pub params: PhysicalParams,
    /// Planner steps (at `dt`).
    pub horizon: usize,
    /// Planner discretization step.
    pub dt: f64,
    pub q_s: Matrix6<f64>,
    pub r_s: Matrix2<f64>,
    pub x_bounds: Box6,
    pub f_bounds: ForceBounds,
    pub x_init: State6,
    pub x_f: State6,
}

impl Default for SwingupProblem {
    fn default() -> Self {
        let params = PhysicalParams::default();
        Self {
            params,
            horizon: 150,
            dt: 0.01,
            q_s: Matrix6::from_diagonal(&Vector6::new(1.0, 1.0, 1.0, 0.1, 0.1, 0.1)),
            r_s: Matrix2::identity() * 0.01,
            // The swing angle is capped short of the inverted point so the
            // plan approaches the release state on its first upswing; looping
            // over the top would slacken the string mid-plan.
            x_bounds: Box6 {
                lo: Vector6::new(-0.8, -0.8, -2.9, -6.0, -6.0, -20.0),
                hi: Vector6::new(0.8, 0.8, 2.9, 6.0, 6.0, 20.0),
            },
            f_bounds: ForceBounds {
                lo: Vector2::new(-25.0, -25.0),
                hi: Vector2::new(25.0, 25.0),
            },
            x_init: State6::zeros(),
            // Release target: swing angle and rate with the cup back at rest
            // at the origin.
            x_f: State6::from_row_slice(&[0.0, 0.0, 2.44, 0.0, 0.0, 4.18]),
        }
    }
}

/// Solver knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Inf-norm tolerance on the augmented-Lagrangian gradient.
    pub tol: f64,
    /// Inf-norm tolerance on the terminal equality residual.
    pub term_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-6, term_tol: 1e-4, max_outer: 40, max_inner: 3000 }
    }
}

/// Result of one planning solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwingupSolution {
    pub f_star: Vec<Vector2<f64>>,
    pub x_traj: Vec<State6>,
    /// Stage cost of the returned trajectory (no penalty terms).
    pub cost: f64,
    /// `|x_N - x_f|` in the inf norm.
    pub terminal_residual: f64,
    /// Worst state/input bound violation (negative means strictly feasible).
    pub bound_violation: f64,
    /// Inf-norm of the Lagrangian gradient at the returned iterate.
    pub kkt_residual: f64,
    pub converged: bool,
    /// Merit values of accepted inner iterations, one list per outer round.
    pub merit_history: Vec<Vec<f64>>,
}

struct Multipliers {
    /// Terminal equality.
    lambda: Vector6<f64>,
    /// State bound rows (low, high per coordinate) for steps 1..=N.
    nu_x: Vec<[f64; 12]>,
    /// Input bound rows for steps 0..N.
    nu_f: Vec<[f64; 4]>,
    mu: f64,
}

/// Forward-simulate the planner dynamics; errors only on singular inertia,
/// which the cup-and-ball model cannot produce for positive masses.
fn shoot(p: &SwingupProblem, forces: &[Vector2<f64>]) -> Vec<State6> {
    let mut xs = Vec::with_capacity(forces.len() + 1);
    xs.push(p.x_init);
    for f in forces {
        let f3 = Vector3::new(f.x, f.y, 0.0);
        let next = euler_step(&p.params, xs.last().unwrap(), &f3, p.dt)
            .expect("inertia stays regular for positive masses");
        xs.push(next);
    }
    xs
}

/// Plain stage cost of a candidate. States are penalized about the rest
/// configuration; the release target enters only through the terminal
/// equality, so the plan stays quiet until the swing-up actually starts.
pub fn trajectory_cost(p: &SwingupProblem, xs: &[State6], forces: &[Vector2<f64>]) -> f64 {
    let mut j = 0.0;
    for (i, f) in forces.iter().enumerate() {
        let x = xs[i];
        j += (x.transpose() * p.q_s * x)[0] + (f.transpose() * p.r_s * f)[0];
    }
    j
}

/// Augmented-Lagrangian merit and its gradient with respect to the stacked
/// force sequence, via one backward adjoint sweep.
fn merit_and_grad(
    p: &SwingupProblem,
    forces: &[Vector2<f64>],
    m: &Multipliers,
) -> (f64, Vec<Vector2<f64>>, Vec<State6>) {
    let n = forces.len();
    let xs = shoot(p, forces);
    let mu = m.mu;

    // Merit.
    let mut merit = trajectory_cost(p, &xs, forces);
    let c = xs[n] - p.x_f;
    merit += m.lambda.dot(&c) + 0.5 * mu * c.norm_squared();
    let plus = |g: f64, nu: f64| (g + nu / mu).max(0.0);
    for i in 1..=n {
        for k in 0..6 {
            let lo = plus(p.x_bounds.lo[k] - xs[i][k], m.nu_x[i - 1][2 * k]);
            let hi = plus(xs[i][k] - p.x_bounds.hi[k], m.nu_x[i - 1][2 * k + 1]);
            merit += 0.5 * mu * (lo * lo + hi * hi);
        }
    }
    for (i, f) in forces.iter().enumerate() {
        for k in 0..2 {
            let lo = plus(p.f_bounds.lo[k] - f[k], m.nu_f[i][2 * k]);
            let hi = plus(f[k] - p.f_bounds.hi[k], m.nu_f[i][2 * k + 1]);
            merit += 0.5 * mu * (lo * lo + hi * hi);
        }
    }

    // Direct gradient of all terms that touch a given state.
    let state_grad = |i: usize| -> Vector6<f64> {
        let mut g = Vector6::zeros();
        if i < n {
            g += 2.0 * (p.q_s * xs[i]);
        }
        if i == n {
            g += m.lambda + mu * c;
        }
        if i >= 1 {
            for k in 0..6 {
                let lo = plus(p.x_bounds.lo[k] - xs[i][k], m.nu_x[i - 1][2 * k]);
                let hi = plus(xs[i][k] - p.x_bounds.hi[k], m.nu_x[i - 1][2 * k + 1]);
                g[k] += mu * (hi - lo);
            }
        }
        g
    };

    // Backward adjoint sweep. a holds dMerit/dx_{i+1} accumulated.
    let mut grads = vec![Vector2::zeros(); n];
    let mut a = state_grad(n);
    for i in (0..n).rev() {
        let f3 = Vector3::new(forces[i].x, forces[i].y, 0.0);
        let (da_dq, da_dqd, m_inv) = accel_jacobians(&p.params, &xs[i], &f3)
            .expect("inertia stays regular for positive masses");
        // A = I + dt * [0 I; da_dq da_dqd], B = dt * [0; M^{-1} S].
        let mut a_mat = Matrix6::<f64>::identity();
        for r in 0..3 {
            a_mat[(r, 3 + r)] += p.dt;
            for cidx in 0..3 {
                a_mat[(3 + r, cidx)] += p.dt * da_dq[(r, cidx)];
                a_mat[(3 + r, 3 + cidx)] += p.dt * da_dqd[(r, cidx)];
            }
        }
        let mut b_mat = SMatrix::<f64, 6, 2>::zeros();
        for r in 0..3 {
            for cidx in 0..2 {
                b_mat[(3 + r, cidx)] = p.dt * m_inv[(r, cidx)];
            }
        }

        let mut gf = 2.0 * (p.r_s * forces[i]) + b_mat.transpose() * a;
        for k in 0..2 {
            let lo = plus(p.f_bounds.lo[k] - forces[i][k], m.nu_f[i][2 * k]);
            let hi = plus(forces[i][k] - p.f_bounds.hi[k], m.nu_f[i][2 * k + 1]);
            gf[k] += mu * (hi - lo);
        }
        grads[i] = gf;
        a = state_grad(i) + a_mat.transpose() * a;
    }
    (merit, grads, xs)
}

fn dot(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn inf_norm(a: &[Vector2<f64>]) -> f64 {
    a.iter().map(|v| v.x.abs().max(v.y.abs())).fold(0.0, f64::max)
}

/// L-BFGS minimization of the current augmented Lagrangian. Returns the
/// final gradient inf-norm and the accepted merit values.
fn lbfgs_inner(
    p: &SwingupProblem,
    forces: &mut Vec<Vector2<f64>>,
    m: &Multipliers,
    opts: &SolverOptions,
) -> (f64, Vec<f64>) {
    const MEMORY: usize = 30;
    let n = forces.len();
    let (mut merit, mut grad, _) = merit_and_grad(p, forces, m);
    let mut merits = vec![merit];
    let mut s_hist: Vec<Vec<Vector2<f64>>> = Vec::new();
    let mut y_hist: Vec<Vec<Vector2<f64>>> = Vec::new();

    for _ in 0..opts.max_inner {
        let gnorm = inf_norm(&grad);
        if gnorm <= opts.tol {
            break;
        }
        // Two-loop recursion.
        let mut q: Vec<Vector2<f64>> = grad.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let alpha = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi -= alpha * yi;
            }
            alphas.push((alpha, rho));
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y).max(1e-300),
            _ => 1.0 / gnorm.max(1.0),
        };
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
        for ((s, y), (alpha, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.iter().rev()) {
            let beta = rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (alpha - beta) * si;
            }
        }
        let dir: Vec<Vector2<f64>> = q.iter().map(|v| -v).collect();
        let slope = dot(&grad, &dir);
        let (dir, slope) = if slope < 0.0 {
            (dir, slope)
        } else {
            // Curvature information went stale; fall back to steepest descent.
            s_hist.clear();
            y_hist.clear();
            let d: Vec<Vector2<f64>> = grad.iter().map(|g| -g).collect();
            let s = -dot(&grad, &grad);
            (d, s)
        };

        // Backtracking Armijo line search.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let trial: Vec<Vector2<f64>> =
                forces.iter().zip(&dir).map(|(f, d)| f + step * d).collect();
            let (tm, tg, _) = merit_and_grad(p, &trial, m);
            if tm <= merit + 1e-4 * step * slope {
                accepted = Some((trial, tm, tg));
                break;
            }
            step *= 0.5;
        }
        let Some((new_forces, new_merit, new_grad)) = accepted else {
            if !s_hist.is_empty() {
                // Stale curvature can point the quasi-Newton step into a wall;
                // drop the memory once and retry from steepest descent.
                s_hist.clear();
                y_hist.clear();
                continue;
            }
            break; // steepest descent stalled too: as converged as it gets
        };
        let s_vec: Vec<Vector2<f64>> =
            new_forces.iter().zip(forces.iter()).map(|(a, b)| a - b).collect();
        let y_vec: Vec<Vector2<f64>> =
            new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s_vec, &y_vec);
        if sy > 1e-10 * (dot(&s_vec, &s_vec) * dot(&y_vec, &y_vec)).sqrt() {
            s_hist.push(s_vec);
            y_hist.push(y_vec);
            if s_hist.len() > MEMORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
        }
        *forces = new_forces;
        merit = new_merit;
        grad = new_grad;
        merits.push(merit);
        debug_assert_eq!(forces.len(), n);
    }
    (inf_norm(&grad), merits)
}

/// Resonant pumping initial guess: gravity compensation plus a sideways
/// sinusoid at the hanging-pendulum frequency.
fn initial_guess(p: &SwingupProblem) -> Vec<Vector2<f64>> {
    let omega = (p.params.gravity / p.params.string_length).max(0.0).sqrt();
    let hover = p.params.total_mass() * p.params.gravity;
    (0..p.horizon)
        .map(|i| {
            let t = i as f64 * p.dt;
            p.f_bounds.clamp(&Vector2::new(1.2 * (omega * t).sin(), hover))
        })
        .collect()
}

/// Solve the swing-up problem. Always returns the best iterate; `converged`
/// reports whether all tolerances were met.
pub fn solve_swingup(p: &SwingupProblem, opts: &SolverOptions) -> Result<SwingupSolution, SwingupError> {
    if !p.x_bounds.contains(&p.x_init) {
        return Err(SwingupError::InfeasibleBounds);
    }
    let n = p.horizon;
    let mut forces = initial_guess(p);
    let mut mult = Multipliers {
        lambda: Vector6::zeros(),
        nu_x: vec![[0.0; 12]; n],
        nu_f: vec![[0.0; 4]; n],
        mu: 10.0,
    };
    let mut history = Vec::new();
    let mut kkt = f64::INFINITY;
    let mut prev_feas = f64::INFINITY;
    let mut prev_merit = f64::INFINITY;
    let mut stalled_rounds = 0usize;

    for _ in 0..opts.max_outer {
        let (g, merits) = lbfgs_inner(p, &mut forces, &mult, opts);
        kkt = g;
        let round_merit = *merits.last().unwrap();
        history.push(merits);

        let xs = shoot(p, &forces);
        let c = xs[n] - p.x_f;
        let mut viol = c.amax();
        for x in xs.iter().skip(1) {
            viol = viol.max(p.x_bounds.max_violation(x));
        }
        for f in &forces {
            viol = viol.max((p.f_bounds.lo - f).max().max((f - p.f_bounds.hi).max()));
        }
        let feas = viol.max(0.0);
        if c.amax() <= opts.term_tol && feas <= 1e-6 && g <= opts.tol {
            break;
        }
        // Two rounds in a row with an already-feasible iterate and no merit
        // movement means the multiplier updates have converged; further
        // rounds only repeat the same inner solve.
        if (round_merit - prev_merit).abs() <= 1e-10 * (1.0 + round_merit.abs())
            && feas <= 0.1 * opts.term_tol
        {
            stalled_rounds += 1;
            if stalled_rounds >= 2 {
                break;
            }
        } else {
            stalled_rounds = 0;
        }
        prev_merit = round_merit;

        // First-order multiplier updates, then tighten the penalty when the
        // constraint violation stops improving.
        mult.lambda += mult.mu * c;
        for (i, nu) in mult.nu_x.iter_mut().enumerate() {
            for k in 0..6 {
                nu[2 * k] = (nu[2 * k] + mult.mu * (p.x_bounds.lo[k] - xs[i + 1][k])).max(0.0);
                nu[2 * k + 1] =
                    (nu[2 * k + 1] + mult.mu * (xs[i + 1][k] - p.x_bounds.hi[k])).max(0.0);
            }
        }
        for (i, nu) in mult.nu_f.iter_mut().enumerate() {
            for k in 0..2 {
                nu[2 * k] = (nu[2 * k] + mult.mu * (p.f_bounds.lo[k] - forces[i][k])).max(0.0);
                nu[2 * k + 1] =
                    (nu[2 * k + 1] + mult.mu * (forces[i][k] - p.f_bounds.hi[k])).max(0.0);
            }
        }
        // Tighten the penalty only while meaningfully infeasible; once the
        // violation is at tolerance, growing mu just ruins conditioning.
        if feas > 0.25 * prev_feas && feas > 0.1 * opts.term_tol {
            mult.mu = (mult.mu * 10.0).min(1e8);
        }
        prev_feas = feas;
    }

    let xs = shoot(p, &forces);
    let terminal_residual = (xs[n] - p.x_f).amax();
    let mut bound_violation = f64::NEG_INFINITY;
    for x in xs.iter().skip(1) {
        bound_violation = bound_violation.max(p.x_bounds.max_violation(x));
    }
    for f in &forces {
        bound_violation =
            bound_violation.max((p.f_bounds.lo - f).max().max((f - p.f_bounds.hi).max()));
    }
    let cost = trajectory_cost(p, &xs, &forces);
    let converged =
        terminal_residual <= opts.term_tol && bound_violation <= 1e-6 && kkt <= opts.tol;
    Ok(SwingupSolution {
        f_star: forces,
        x_traj: xs,
        cost,
        terminal_residual,
        bound_violation,
        kkt_residual: kkt,
        converged,
        merit_history: history,
    })
}

// ---------------------------------------------------------------------------
// Terminal verification and open-loop replay
// ---------------------------------------------------------------------------

/// String length for which the free-fall arc from release state
/// `(phi, phid)` returns exactly onto a motionless cup. The horizontal gap
/// closes at `t* = -tan(phi)/phid` independent of the length; matching the
/// vertical gap at that instant fixes the length.
pub fn rendezvous_string_length(phi: f64, phid: f64, gravity: f64) -> f64 {
    let t = -phi.tan() / phid;
    gravity * t * t / (2.0 * (phid * phi.sin() * t - phi.cos()))
}

/// Tension in a pendulum swinging on a pinned (motionless) cup. Negative at
/// the release target means the string naturally goes slack as the swing-up
/// decelerates, which is the physical release mechanism.
pub fn pinned_cup_tension(p: &PhysicalParams, phi: f64, phid: f64) -> f64 {
    p.ball_mass * (p.gravity * phi.cos() + p.string_length * phid * phid)
}

/// Predicted ball-minus-cup gap from a terminal state with the cup frozen,
/// sampled at the ground-truth rate. Returns the gap trajectory and the
/// first time the gap norm drops below [`VANISH_TOL`].
pub fn verify_terminal(
    p: &PhysicalParams,
    x_n: &State6,
    horizon_s: f64,
) -> (Vec<(f64, Vector2<f64>)>, Option<f64>) {
    let cup = Vector2::new(x_n[0], x_n[1]);
    let b0 = ball_position(p, x_n);
    let v0 = ball_velocity(p, x_n);
    let steps = (horizon_s / SIM_DT).round() as usize;
    let mut gaps = Vec::with_capacity(steps + 1);
    let mut vanish = None;
    for i in 0..=steps {
        let t = i as f64 * SIM_DT;
        let (pos, _) = predict_ballistic(&b0, &v0, p.gravity, t);
        let gap = pos - cup;
        if vanish.is_none() && gap.norm() < VANISH_TOL {
            vanish = Some(t);
        }
        gaps.push((t, gap));
    }
    (gaps, vanish)
}

/// Multiplicative parameter and additive force perturbations for open-loop
/// replay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Relative half-range for mass and length perturbation (0.05 = +/-5%).
    pub param_frac: f64,
    /// Half-range of additive uniform force noise per axis, in newtons.
    pub force_noise: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self { param_frac: 0.05, force_noise: 0.05 }
    }
}

/// Realized swing-up trajectory up to string release.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenloopRollout {
    pub params: PhysicalParams,
    pub states: Vec<State6>,
    pub release_time: f64,
    pub release_state: State6,
    /// Cup-minus-ball position at release: the catch-phase initial error.
    pub e0: Vector2<f64>,
    /// Cup-minus-ball velocity at release.
    pub e0_rate: Vector2<f64>,
}

/// Replay a planned force sequence against the Runge-Kutta ground truth with
/// perturbed parameters, stopping at the tension zero crossing. After the
/// plan runs out the last force is held. The release state interpolates the
/// crossing between simulation steps.
pub fn rollout_openloop(
    p: &SwingupProblem,
    f_star: &[Vector2<f64>],
    perturbation: &PerturbationSpec,
    seed: u64,
) -> Result<OpenloopRollout, SwingupError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |frac: f64| 1.0 + rng.gen_range(-frac..=frac);
    let params = PhysicalParams {
        cup_mass: p.params.cup_mass * draw(perturbation.param_frac),
        ball_mass: p.params.ball_mass * draw(perturbation.param_frac),
        string_length: p.params.string_length * draw(perturbation.param_frac),
        gravity: p.params.gravity,
    };

    let substeps = (p.dt / SIM_DT).round().max(1.0) as usize;
    let max_steps = 2 * p.horizon * substeps;
    let mut x = p.x_init;
    let mut states = vec![x];
    let mut prev_tension = f64::INFINITY;
    for step in 0..max_steps {
        let plan_idx = (step / substeps).min(f_star.len().saturating_sub(1));
        let noise = Vector2::new(
            rng.gen_range(-perturbation.force_noise..=perturbation.force_noise),
            rng.gen_range(-perturbation.force_noise..=perturbation.force_noise),
        );
        let f = f_star[plan_idx] + noise;
        let f3 = Vector3::new(f.x, f.y, 0.0);
        let tension = string_tension(&params, &x, &f3)?;
        if tension <= 0.0 && prev_tension > 0.0 && step > 0 {
            // Interpolate the crossing between the previous and current step.
            let tau = prev_tension / (prev_tension - tension);
            let x_prev = states[states.len() - 2];
            let x_rel = x_prev + (x - x_prev) * tau;
            let t_rel = ((step - 1) as f64 + tau) * SIM_DT;
            let cup = Vector2::new(x_rel[0], x_rel[1]);
            let cup_v = Vector2::new(x_rel[3], x_rel[4]);
            return Ok(OpenloopRollout {
                params,
                states,
                release_time: t_rel,
                release_state: x_rel,
                e0: cup - ball_position(&params, &x_rel),
                e0_rate: cup_v - ball_velocity(&params, &x_rel),
            });
        }
        prev_tension = tension;
        x = rk4_step(&params, &x, &f3, SIM_DT)?;
        states.push(x);
    }
    Err(SwingupError::NoRelease(max_steps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::rngs::StdRng;

    fn default_solution() -> &'static SwingupSolution {
        use std::sync::OnceLock;
        static SOLUTION: OnceLock<SwingupSolution> = OnceLock::new();
        SOLUTION.get_or_init(|| {
            solve_swingup(&SwingupProblem::default(), &SolverOptions::default()).unwrap()
        })
    }

    /// First zero crossing of string tension along the nominal trajectory,
    /// with the planned force held over each step.
    fn nominal_release(p: &SwingupProblem, sol: &SwingupSolution) -> (usize, State6) {
        let mut prev = f64::INFINITY;
        for (i, x) in sol.x_traj.iter().enumerate() {
            let f = sol.f_star.get(i).or_else(|| sol.f_star.last()).unwrap();
            let f3 = Vector3::new(f.x, f.y, 0.0);
            let tension = string_tension(&p.params, x, &f3).unwrap();
            if prev > 0.0 && tension <= 0.0 {
                return (i, *x);
            }
            prev = tension;
        }
        panic!("nominal trajectory never slackens");
    }

    #[test]
    fn rendezvous_length_consistent_with_default_params() {
        let p = PhysicalParams::default();
        let r = rendezvous_string_length(2.44, 4.18, p.gravity);
        // The configured default is this value rounded to 0.1 mm.
        assert_abs_diff_eq!(p.string_length, r, epsilon = 5e-4);
        // Independent check: both gap components vanish at t*.
        let t = -(2.44f64).tan() / 4.18;
        let gap_x = r * (2.44f64).sin() + r * 4.18 * (2.44f64).cos() * t;
        let gap_z = -r * (2.44f64).cos() + r * 4.18 * (2.44f64).sin() * t
            - 0.5 * p.gravity * t * t;
        assert_abs_diff_eq!(gap_x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gap_z, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn release_target_tension_is_negative_for_defaults() {
        // Diagnostic consistency: at the release target the string is already
        // slack for a pinned cup, so tension crosses zero during the swing.
        let p = PhysicalParams::default();
        assert!(pinned_cup_tension(&p, 2.44, 4.18) < 0.0);
        // Hanging at rest the same formula gives the ball weight.
        assert_relative_eq!(pinned_cup_tension(&p, 0.0, 0.0), p.ball_mass * p.gravity);
    }

    #[test]
    fn zero_gravity_stay_put_solution_is_zero_force() {
        let mut problem = SwingupProblem::default();
        problem.params.gravity = 0.0;
        problem.horizon = 10;
        problem.x_f = problem.x_init;
        let sol = solve_swingup(&problem, &SolverOptions::default()).unwrap();
        assert!(sol.converged, "residual {} kkt {}", sol.terminal_residual, sol.kkt_residual);
        assert!(sol.cost < 1e-10, "cost {}", sol.cost);
        for f in &sol.f_star {
            assert!(f.norm() < 1e-4, "leftover force {f:?}");
        }
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let mut problem = SwingupProblem::default();
        problem.horizon = 25;
        let mut rng = StdRng::seed_from_u64(3);
        let forces: Vec<Vector2<f64>> = (0..problem.horizon)
            .map(|_| Vector2::new(rng.gen_range(-3.0..3.0), rng.gen_range(0.0..5.0)))
            .collect();
        let mult = Multipliers {
            lambda: Vector6::from_fn(|i, _| 0.1 * (i as f64 + 1.0)),
            nu_x: vec![[0.05; 12]; problem.horizon],
            nu_f: vec![[0.02; 4]; problem.horizon],
            mu: 7.0,
        };
        let (_, grad, _) = merit_and_grad(&problem, &forces, &mult);
        let h = 1e-6;
        for idx in [0usize, 7, 12, 24] {
            for axis in 0..2 {
                let mut fp = forces.clone();
                let mut fm = forces.clone();
                fp[idx][axis] += h;
                fm[idx][axis] -= h;
                let (mp, _, _) = merit_and_grad(&problem, &fp, &mult);
                let (mm, _, _) = merit_and_grad(&problem, &fm, &mult);
                let fd = (mp - mm) / (2.0 * h);
                assert_relative_eq!(grad[idx][axis], fd, epsilon = 1e-4, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn default_swingup_reaches_release_target() {
        let sol = default_solution();
        assert!(
            sol.terminal_residual < 1e-3,
            "terminal residual {}",
            sol.terminal_residual
        );
        assert!(sol.bound_violation <= 1e-6, "bound violation {}", sol.bound_violation);
        assert!(sol.converged, "kkt {} residual {}", sol.kkt_residual, sol.terminal_residual);
        // The trajectory is definitionally the Euler recursion of the forces.
        let p = SwingupProblem::default();
        let replay = shoot(&p, &sol.f_star);
        for (a, b) in sol.x_traj.iter().zip(&replay) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn solution_beats_random_shooting() {
        let p = SwingupProblem::default();
        let sol = default_solution();
        // Random sequences cannot hit the terminal equality, so the
        // comparison prices the miss with a penalty far above the optimal
        // cost scale; the solver's near-zero residual leaves it unaffected.
        let scored = |forces: &[Vector2<f64>]| {
            let xs = shoot(&p, forces);
            let c = xs[p.horizon] - p.x_f;
            trajectory_cost(&p, &xs, forces) + 1e4 * c.norm_squared()
        };
        let sol_score = scored(&sol.f_star);
        assert_relative_eq!(sol_score, sol.cost, epsilon = 1e-6);
        let mut rng = StdRng::seed_from_u64(9);
        let hover = p.params.total_mass() * p.params.gravity;
        for _ in 0..100 {
            let amp = rng.gen_range(0.0..5.0);
            let omega = rng.gen_range(2.0..15.0);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let forces: Vec<Vector2<f64>> = (0..p.horizon)
                .map(|i| {
                    let t = i as f64 * p.dt;
                    let jitter = Vector2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                    p.f_bounds.clamp(&(Vector2::new(amp * (omega * t + phase).sin(), hover) + jitter))
                })
                .collect();
            let score = scored(&forces);
            assert!(score >= sol_score, "random sequence score {score} beat optimum {sol_score}");
        }
    }

    #[test]
    fn merit_decreases_within_each_round() {
        let sol = default_solution();
        for merits in &sol.merit_history {
            for pair in merits.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-9, "merit increased: {pair:?}");
            }
        }
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let mut p = SwingupProblem::default();
        p.x_init[0] = 5.0;
        assert_eq!(
            solve_swingup(&p, &SolverOptions::default()),
            Err(SwingupError::InfeasibleBounds)
        );
    }

    #[test]
    fn verify_terminal_drop_case_matches_kinematics() {
        let p = PhysicalParams::default();
        // Ball straight above the cup: phi = pi puts it at distance r above.
        let x = State6::from_row_slice(&[0.0, 0.0, std::f64::consts::PI, 0.0, 0.0, 0.0]);
        let (gaps, vanish) = verify_terminal(&p, &x, 0.5);
        let t = vanish.expect("drop must meet the cup");
        let ideal = (2.0 * p.string_length / p.gravity).sqrt();
        assert!((t - ideal).abs() < 0.02, "vanish {t} vs kinematic {ideal}");
        assert_eq!(gaps.len(), 501);
        assert_relative_eq!(gaps[0].1.norm(), p.string_length, epsilon = 1e-12);
    }

    #[test]
    fn verify_terminal_finds_rendezvous_from_planned_release() {
        let sol = default_solution();
        let p = PhysicalParams::default();
        let (_, vanish) = verify_terminal(&p, sol.x_traj.last().unwrap(), 0.5);
        assert!(vanish.is_some(), "no gap-vanish time from the planned terminal state");
        let t = vanish.unwrap();
        assert!(t > 0.05, "vanish time {t} suspiciously early");
    }

    #[test]
    fn verify_terminal_none_when_ball_escapes() {
        let p = PhysicalParams::default();
        // Ball at the side, flying outward fast: never returns over the cup.
        let x = State6::from_row_slice(&[0.0, 0.0, 1.57, 0.0, 0.0, 20.0]);
        let (_, vanish) = verify_terminal(&p, &x, 0.5);
        assert!(vanish.is_none());
    }

    #[test]
    fn unperturbed_rollout_releases_near_nominal_state() {
        let p = SwingupProblem::default();
        let sol = default_solution();
        let none = PerturbationSpec { param_frac: 0.0, force_noise: 0.0 };
        let roll = rollout_openloop(&p, &sol.f_star, &none, 1).unwrap();
        let plan_time = p.horizon as f64 * p.dt;
        assert!(
            roll.release_time > 0.6 * plan_time && roll.release_time < 1.3 * plan_time,
            "release at {} for a {plan_time} plan",
            roll.release_time
        );
        // The replay integrates the same forces with a finer step, so its
        // release must track the nominal trajectory's own tension crossing
        // up to integrator mismatch.
        let (i_star, x_star) = nominal_release(&p, sol);
        let t_star = i_star as f64 * p.dt;
        assert!(
            (roll.release_time - t_star).abs() < 0.05,
            "release at {} vs nominal crossing at {t_star}",
            roll.release_time
        );
        assert!(
            (roll.release_state[2] - x_star[2]).abs() < 0.1,
            "release angle {} vs nominal {}",
            roll.release_state[2],
            x_star[2]
        );
        assert!(
            (roll.release_state[5] - x_star[5]).abs() < 0.6,
            "release rate {} vs nominal {}",
            roll.release_state[5],
            x_star[5]
        );
        // With the string taut the error has exactly string length.
        assert_relative_eq!(roll.e0.norm(), p.params.string_length, epsilon = 1e-9);
    }

    #[test]
    fn perturbed_rollouts_stay_inside_reference_envelope() {
        let p = SwingupProblem::default();
        let sol = default_solution();
        let spec = PerturbationSpec::default();
        let envelope_lo = Vector2::new(-0.316, -0.2095);
        let envelope_hi = Vector2::new(0.349, 0.2457);
        let mut releases = 0;
        for seed in 0..100u64 {
            let roll = rollout_openloop(&p, &sol.f_star, &spec, seed).unwrap();
            releases += 1;
            assert!(
                roll.e0.x >= envelope_lo.x
                    && roll.e0.x <= envelope_hi.x
                    && roll.e0.y >= envelope_lo.y
                    && roll.e0.y <= envelope_hi.y,
                "e0 {:?} outside the reference envelope",
                roll.e0
            );
            assert!(roll.e0.norm() <= 1.06 * p.params.string_length);
        }
        assert_eq!(releases, 100);
    }

    #[test]
    fn hover_forces_never_release() {
        let mut p = SwingupProblem::default();
        p.horizon = 30;
        let hover = vec![Vector2::new(0.0, p.params.total_mass() * p.params.gravity); 30];
        let none = PerturbationSpec { param_frac: 0.0, force_noise: 0.0 };
        match rollout_openloop(&p, &hover, &none, 4) {
            Err(SwingupError::NoRelease(_)) => {}
            other => panic!("expected NoRelease, got {other:?}"),
        }
    }
}
