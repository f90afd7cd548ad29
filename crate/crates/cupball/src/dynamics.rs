//! Planar cup-and-ball dynamics.
//!
//! Swing phase: the cup is an actuated planar body and the ball hangs from it
//! on a taut inextensible string, modeled as a rigid massless rod. With
//! generalized coordinates `q = (x_c, z_c, phi)` (cup position and string
//! angle from the downward vertical) the equations of motion are
//! `M(q) qdd + C(q, qd) qd + G(q) = F`. The closed forms for `M`, `C`, `G`
//! are derived in `docs/dynamics.md`; tests check positive definiteness,
//! passivity (skew symmetry of `Mdot - 2C`) and energy conservation.
//!
//! Ballistic phase: after the string goes slack the ball free-falls and only
//! the relative cup-ball state matters. The catch controller sees a double
//! integrator in relative position driven by the commanded relative velocity,
//! discretized at [`LtiModel::dt`].
//!
//! State layout: `x = (x_c, z_c, phi, xd_c, zd_c, phid)`.

use nalgebra::{Matrix2, Matrix3, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type State6 = SVector<f64, 6>;

/// Conditioning bound above which the inertia matrix counts as singular.
const INERTIA_COND_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("inertia matrix conditioning exceeds {INERTIA_COND_LIMIT:e}")]
    SingularInertia,
}

/// Masses, string length and gravity. Serialized in configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalParams {
    pub cup_mass: f64,
    pub ball_mass: f64,
    pub string_length: f64,
    pub gravity: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        // The string length is chosen so that the free-fall arc from the
        // nominal release state (phi = 2.44 rad, phid = 4.18 rad/s) returns
        // to a motionless cup: both relative coordinates vanish at the same
        // future instant. See `swingup::rendezvous_string_length`.
        Self { cup_mass: 0.2, ball_mass: 0.03, string_length: 0.1531, gravity: 9.81 }
    }
}

impl PhysicalParams {
    pub fn total_mass(&self) -> f64 {
        self.cup_mass + self.ball_mass
    }
}

/// Inertia matrix `M(q)`; symmetric positive definite for positive masses.
pub fn inertia(p: &PhysicalParams, phi: f64) -> Matrix3<f64> {
    let mt = p.total_mass();
    let k = p.ball_mass * p.string_length;
    let (s, c) = phi.sin_cos();
    Matrix3::new(
        mt, 0.0, k * c,
        0.0, mt, k * s,
        k * c, k * s, k * p.string_length,
    )
}

/// Coriolis/centrifugal matrix in the factorization `C(q, qd) qd`.
pub fn coriolis(p: &PhysicalParams, phi: f64, phid: f64) -> Matrix3<f64> {
    let k = p.ball_mass * p.string_length;
    let (s, c) = phi.sin_cos();
    Matrix3::new(
        0.0, 0.0, -k * s * phid,
        0.0, 0.0, k * c * phid,
        0.0, 0.0, 0.0,
    )
}

/// Gravity vector `G(q)`.
pub fn gravity_vector(p: &PhysicalParams, phi: f64) -> Vector3<f64> {
    Vector3::new(
        0.0,
        p.total_mass() * p.gravity,
        p.ball_mass * p.gravity * p.string_length * phi.sin(),
    )
}

/// Generalized acceleration `qdd = M^{-1} (F - C qd - G)`.
pub fn accel(p: &PhysicalParams, x: &State6, f: &Vector3<f64>) -> Result<Vector3<f64>, DynamicsError> {
    let phi = x[2];
    let qd = Vector3::new(x[3], x[4], x[5]);
    let m = inertia(p, phi);
    check_conditioning(&m)?;
    let rhs = f - coriolis(p, phi, x[5]) * qd - gravity_vector(p, phi);
    Ok(m.try_inverse().ok_or(DynamicsError::SingularInertia)? * rhs)
}

fn check_conditioning(m: &Matrix3<f64>) -> Result<(), DynamicsError> {
    let eig = m.symmetric_eigenvalues();
    let max = eig.amax();
    let min = eig.iter().cloned().fold(f64::INFINITY, |a, b| a.min(b.abs()));
    if !(min > 0.0) || max / min > INERTIA_COND_LIMIT {
        return Err(DynamicsError::SingularInertia);
    }
    Ok(())
}

/// Full state derivative `(qd, qdd)` under generalized force `f`.
pub fn continuous_dynamics(
    p: &PhysicalParams,
    x: &State6,
    f: &Vector3<f64>,
) -> Result<State6, DynamicsError> {
    let qdd = accel(p, x, f)?;
    Ok(State6::from_row_slice(&[x[3], x[4], x[5], qdd[0], qdd[1], qdd[2]]))
}

/// Jacobians of `accel` with respect to `q`, `qd` and `f`. Only the angle
/// enters `M`, `C`, `G`, so the `q` block has a single nonzero column.
pub fn accel_jacobians(
    p: &PhysicalParams,
    x: &State6,
    f: &Vector3<f64>,
) -> Result<(Matrix3<f64>, Matrix3<f64>, Matrix3<f64>), DynamicsError> {
    let phi = x[2];
    let phid = x[5];
    let k = p.ball_mass * p.string_length;
    let (s, c) = phi.sin_cos();
    let m = inertia(p, phi);
    check_conditioning(&m)?;
    let m_inv = m.try_inverse().ok_or(DynamicsError::SingularInertia)?;
    let qd = Vector3::new(x[3], x[4], x[5]);
    let a = m_inv * (f - coriolis(p, phi, phid) * qd - gravity_vector(p, phi));

    let dm_dphi = Matrix3::new(
        0.0, 0.0, -k * s,
        0.0, 0.0, k * c,
        -k * s, k * c, 0.0,
    );
    let dcqd_dphi = Vector3::new(-k * c * phid * phid, -k * s * phid * phid, 0.0);
    let dg_dphi = Vector3::new(0.0, 0.0, p.ball_mass * p.gravity * p.string_length * c);
    let da_dphi = m_inv * (-dcqd_dphi - dg_dphi - dm_dphi * a);

    let dcqd_dphid = Vector3::new(-2.0 * k * s * phid, 2.0 * k * c * phid, 0.0);
    let da_dphid = m_inv * (-dcqd_dphid);

    let mut da_dq = Matrix3::zeros();
    da_dq.set_column(2, &da_dphi);
    let mut da_dqd = Matrix3::zeros();
    da_dqd.set_column(2, &da_dphid);
    Ok((da_dq, da_dqd, m_inv))
}

/// Forward Euler step, the planner-side discretization.
pub fn euler_step(
    p: &PhysicalParams,
    x: &State6,
    f: &Vector3<f64>,
    dt: f64,
) -> Result<State6, DynamicsError> {
    Ok(x + continuous_dynamics(p, x, f)? * dt)
}

/// Classical Runge-Kutta step, the simulation ground truth.
pub fn rk4_step(
    p: &PhysicalParams,
    x: &State6,
    f: &Vector3<f64>,
    dt: f64,
) -> Result<State6, DynamicsError> {
    let k1 = continuous_dynamics(p, x, f)?;
    let k2 = continuous_dynamics(p, &(x + k1 * (dt * 0.5)), f)?;
    let k3 = continuous_dynamics(p, &(x + k2 * (dt * 0.5)), f)?;
    let k4 = continuous_dynamics(p, &(x + k3 * dt), f)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Total mechanical energy `T + V`.
pub fn energy(p: &PhysicalParams, x: &State6) -> f64 {
    let (s, c) = x[2].sin_cos();
    let (xd, zd, phid) = (x[3], x[4], x[5]);
    let mt = p.total_mass();
    let r = p.string_length;
    let t = 0.5 * mt * (xd * xd + zd * zd)
        + 0.5 * p.ball_mass * r * r * phid * phid
        + p.ball_mass * r * phid * (xd * c + zd * s);
    let v = mt * p.gravity * x[1] - p.ball_mass * p.gravity * r * c;
    t + v
}

/// Ball position from the generalized state (string taut).
pub fn ball_position(p: &PhysicalParams, x: &State6) -> Vector2<f64> {
    let (s, c) = x[2].sin_cos();
    Vector2::new(x[0] + p.string_length * s, x[1] - p.string_length * c)
}

/// Ball velocity from the generalized state (string taut).
pub fn ball_velocity(p: &PhysicalParams, x: &State6) -> Vector2<f64> {
    let (s, c) = x[2].sin_cos();
    Vector2::new(
        x[3] + p.string_length * x[5] * c,
        x[4] + p.string_length * x[5] * s,
    )
}

/// String tension under force `f`. Positive while the string is taut; a zero
/// crossing marks release into free fall. Derived by projecting the ball's
/// Newton equation onto the string direction:
/// `T = m_b (g cos(phi) + r phid^2 - a_cup . u)` with `u` the cup-to-ball
/// unit vector.
pub fn string_tension(p: &PhysicalParams, x: &State6, f: &Vector3<f64>) -> Result<f64, DynamicsError> {
    let qdd = accel(p, x, f)?;
    let (s, c) = x[2].sin_cos();
    let a_dot_u = qdd[0] * s - qdd[1] * c;
    Ok(p.ball_mass * (p.gravity * c + p.string_length * x[5] * x[5] - a_dot_u))
}

/// Ballistic free-fall prediction, closed form.
pub fn predict_ballistic(
    pos: &Vector2<f64>,
    vel: &Vector2<f64>,
    gravity: f64,
    t: f64,
) -> (Vector2<f64>, Vector2<f64>) {
    let g = Vector2::new(0.0, -gravity);
    (pos + vel * t + g * (0.5 * t * t), vel + g * t)
}

/// Ballistic free-fall by forward Euler; drifts from the closed form by at
/// most `0.5 * g * dt * t` in position.
pub fn ballistic_euler(
    pos: &Vector2<f64>,
    vel: &Vector2<f64>,
    gravity: f64,
    dt: f64,
    steps: usize,
) -> (Vector2<f64>, Vector2<f64>) {
    let g = Vector2::new(0.0, -gravity);
    let mut p = *pos;
    let mut v = *vel;
    for _ in 0..steps {
        p += v * dt;
        v += g * dt;
    }
    (p, v)
}

// ---------------------------------------------------------------------------
// Catch-phase relative error model
// ---------------------------------------------------------------------------

/// Discrete relative-position model for the ballistic phase:
/// `e+ = e + dt u + w`, `y = e + v`, with `e` the cup-minus-ball position,
/// `u` the commanded relative velocity, `w` process noise and `v`
/// measurement noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LtiModel {
    pub dt: f64,
}

impl Default for LtiModel {
    fn default() -> Self {
        Self { dt: 0.01 }
    }
}

impl LtiModel {
    pub fn a(&self) -> Matrix2<f64> {
        Matrix2::identity()
    }

    pub fn b(&self) -> Matrix2<f64> {
        Matrix2::identity() * self.dt
    }

    pub fn error_step(&self, e: &Vector2<f64>, u: &Vector2<f64>, w: &Vector2<f64>) -> Vector2<f64> {
        e + u * self.dt + w
    }

    pub fn measure(&self, e: &Vector2<f64>, v: &Vector2<f64>) -> Vector2<f64> {
        e + v
    }
}
