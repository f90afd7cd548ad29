//! Closed-loop Monte Carlo harness for the catch phase.
//!
//! A rollout drops a ball-cup error state into the tube controller and steps
//! the true LTI error dynamics under bounded process disturbance and
//! truncated-normal measurement noise. A sweep repeats this over a schedule
//! of calibration sample sizes: for each `n` the noise support is re-learned
//! from `n` fresh samples, the constraint tightening is rebuilt, and a batch
//! of seeded rollouts is scored for catches, center hits, and impact
//! velocity. As the learned support tightens toward the true one, the
//! controller gives away less margin and the catch statistics improve; the
//! sweep summary quantifies that trend with a rank-correlation test.

use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

use crate::controller::{
    build_tightened_sets, classify_failure, control_law, init_from_measurement, observer_update,
    solve_shrinking_qp, ControllerConfig, PlanOutcome, StepRecord, TightenedSets, Trace,
    TrialOutcome,
};
use crate::noise::{fit_confidence_support, sample_noise, ConfidenceSupport, NoiseModel, MIN_SAMPLES};
use crate::sets::Box2;

/// A rollout counts as hitting the cup center when the lateral error at the
/// end of the trial (the impact point when there is one) is below this.
pub const HIT_CENTER_TOL: f64 = 0.005;
/// Multiplier applied to epsilon when a learned support produces empty
/// tightened sets, and the cap at which escalation gives up.
pub const EPSILON_ESCALATION: f64 = 1.5;
pub const EPSILON_CAP: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("sample-size schedule must be non-empty")]
    EmptySchedule,
    #[error("sample-size schedule must be strictly increasing and at least {MIN_SAMPLES}")]
    BadSchedule,
    #[error("rollouts per sample size must be at least 1")]
    NoRollouts,
    #[error("epsilon must lie in (0, 1), got {0}")]
    InvalidEpsilon(f64),
    #[error("need cup radius > ball radius > 0 and a non-negative impact velocity limit")]
    BadGeometry,
    #[error("realized disturbance box must sit inside the controller's assumed bound")]
    DisturbanceExceedsBound,
    #[error("task length {task} does not match controller horizon {controller}")]
    HorizonMismatch { task: usize, controller: usize },
    #[error(transparent)]
    Controller(#[from] crate::controller::ControllerError),
    #[error(transparent)]
    Noise(#[from] crate::noise::NoiseError),
}

/// Monte Carlo experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Calibration sample counts, strictly increasing.
    pub n_schedule: Vec<usize>,
    pub rollouts_per_n: usize,
    /// Miscoverage budget for the learned noise support.
    pub epsilon: f64,
    /// Catch-phase task length in steps; must equal the controller horizon.
    pub task_steps: usize,
    /// Master seed; all per-fit and per-rollout seeds derive from it.
    pub seed: u64,
    /// Ground-truth sensor noise (sampled, never shown to the controller).
    pub true_noise: NoiseModel,
    /// Support of the disturbance actually injected into the true dynamics.
    /// Must be contained in the controller's assumed disturbance bound.
    pub w_true: Box2,
    /// Release-state envelope the initial error is drawn from.
    pub e_train: Box2,
    pub cup_radius: f64,
    pub ball_radius: f64,
    /// A catch additionally requires the commanded vertical rate at impact
    /// to be at most this (closing softly or receding).
    pub max_impact_vz: f64,
    /// Optional initial-error pool (e.g. swing-up release errors); when set,
    /// rollouts cycle through it instead of sampling `e_train`.
    pub e0_pool: Option<Vec<[f64; 2]>>,
    /// Attach the full closed-loop trace to every record.
    pub keep_traces: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_schedule: vec![50, 100, 200, 400, 800, 1400, 2000],
            rollouts_per_n: 1000,
            epsilon: 0.1,
            task_steps: 25,
            seed: 7,
            true_noise: NoiseModel::default(),
            w_true: Box2::symmetric(Vector2::new(0.002, 0.002)),
            e_train: Box2::new(Vector2::new(-0.316, -0.2095), Vector2::new(0.349, 0.2457)),
            cup_radius: 0.045,
            ball_radius: 0.01,
            max_impact_vz: 0.1,
            e0_pool: None,
            keep_traces: false,
        }
    }
}

impl ExperimentConfig {
    /// Lateral window within which a plane crossing counts as contact.
    pub fn catch_radius(&self) -> f64 {
        self.cup_radius - self.ball_radius
    }

    pub fn validate(&self, ctrl: &ControllerConfig) -> Result<(), SimError> {
        if self.n_schedule.is_empty() {
            return Err(SimError::EmptySchedule);
        }
        let increasing = self.n_schedule.windows(2).all(|w| w[0] < w[1]);
        if !increasing || self.n_schedule[0] < MIN_SAMPLES {
            return Err(SimError::BadSchedule);
        }
        if self.rollouts_per_n == 0 {
            return Err(SimError::NoRollouts);
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(SimError::InvalidEpsilon(self.epsilon));
        }
        if !(self.cup_radius > self.ball_radius
            && self.ball_radius > 0.0
            && self.max_impact_vz >= 0.0)
        {
            return Err(SimError::BadGeometry);
        }
        if self.task_steps != ctrl.horizon {
            return Err(SimError::HorizonMismatch {
                task: self.task_steps,
                controller: ctrl.horizon,
            });
        }
        for dir in [
            Vector2::new(1.0, 0.0),
            Vector2::new(-1.0, 0.0),
            Vector2::new(0.0, 1.0),
            Vector2::new(0.0, -1.0),
        ] {
            if let Some(bound) = ctrl.w_set.support(&dir) {
                if self.w_true.support(&dir) > bound + 1e-12 {
                    return Err(SimError::DisturbanceExceedsBound);
                }
            }
        }
        Ok(())
    }
}

/// One scored closed-loop trial.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub n: usize,
    pub seed: u64,
    pub e0: Vector2<f64>,
    pub outcome: TrialOutcome,
    /// Lateral error at the end of the trial within [`HIT_CENTER_TOL`], for
    /// trials that were not aborted by infeasibility.
    pub hit_center: bool,
    /// Step index (1-based, at most the task length) of the first cup-plane
    /// crossing within the catch radius, if any.
    pub impact_step: Option<usize>,
    /// Commanded vertical rate entering the impact step.
    pub impact_rel_vz: Option<f64>,
    pub catch: bool,
    /// Interpolated impact point when there is one, otherwise the final
    /// recorded true error.
    pub final_e: Vector2<f64>,
    pub trace: Option<Trace>,
}

/// Mutually exclusive scoring bucket of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutCategory {
    Catch,
    Miss,
    FailureP1,
    FailureP2,
    ConstraintViolation,
}

impl RolloutCategory {
    pub fn label(&self) -> &'static str {
        match self {
            RolloutCategory::Catch => "catch",
            RolloutCategory::Miss => "miss",
            RolloutCategory::FailureP1 => "p1",
            RolloutCategory::FailureP2 => "p2",
            RolloutCategory::ConstraintViolation => "violation",
        }
    }
}

impl RolloutRecord {
    /// Every rollout falls in exactly one bucket; a catch outranks a state
    /// constraint violation, infeasibility outranks both.
    pub fn category(&self) -> RolloutCategory {
        match self.outcome {
            TrialOutcome::FailureP2 => RolloutCategory::FailureP2,
            TrialOutcome::FailureP1 => RolloutCategory::FailureP1,
            TrialOutcome::ConstraintViolation if !self.catch => {
                RolloutCategory::ConstraintViolation
            }
            _ => {
                if self.catch {
                    RolloutCategory::Catch
                } else {
                    RolloutCategory::Miss
                }
            }
        }
    }
}

/// SplitMix64 step, used to derive independent deterministic seeds.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Independent deterministic seed for `(lane, index)` under one master seed.
/// The sweep uses lane `1` for the fit at schedule position `j` and lane
/// `2 + j` for that batch's rollouts; external tooling can reproduce any
/// single trial from these coordinates.
pub fn derive_seed(master: u64, lane: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(lane)).wrapping_add(index))
}

/// First crossing of the cup plane on the segment from `a` to `b`: returns
/// the interpolation fraction and the lateral error at the crossing. Touching
/// the plane counts; a segment entirely on one side does not.
fn plane_crossing(a: &Vector2<f64>, b: &Vector2<f64>) -> Option<(f64, f64)> {
    if a.y * b.y > 0.0 {
        return None;
    }
    let lambda = if a.y == 0.0 {
        0.0
    } else if a.y == b.y {
        // Both endpoints exactly on the plane.
        0.0
    } else {
        a.y / (a.y - b.y)
    };
    Some((lambda, a.x + lambda * (b.x - a.x)))
}

/// Run one closed-loop trial against prebuilt tightened sets.
///
/// The loop measures the current state, replans from the observer state,
/// applies the tube feedback, then advances the truth and the observer. The
/// trial ends at the first cup-plane crossing within the catch radius, at an
/// infeasible plan, or at the deadline. All randomness comes from the seed.
pub fn run_rollout(
    cfg: &ExperimentConfig,
    ctrl: &ControllerConfig,
    ts: &TightenedSets,
    n: usize,
    seed: u64,
) -> RolloutRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e0 = match &cfg.e0_pool {
        Some(pool) if !pool.is_empty() => {
            let pick = pool[(seed % pool.len() as u64) as usize];
            Vector2::new(pick[0], pick[1])
        }
        _ => cfg.e_train.sample(&mut rng),
    };

    let mut trace = Trace::default();
    let mut impact: Option<(usize, f64, f64)> = None;
    let mut final_e = e0;

    'run: {
        if ts.empty {
            trace.setup_failed = true;
            break 'run;
        }
        let mut e = e0;
        let mut v = cfg.true_noise.draw(&mut rng);
        let mut y = ctrl.model.measure(&e, &v);
        let mut e_hat = match init_from_measurement(ctrl, ts, &y) {
            Ok(x) => x,
            Err(_) => {
                trace.setup_failed = true;
                break 'run;
            }
        };

        let radius = cfg.catch_radius();
        for t in 0..ctrl.horizon {
            let plan = match solve_shrinking_qp(ctrl, ts, &e_hat, t) {
                Ok(PlanOutcome::Plan(p)) => p,
                _ => {
                    trace.steps.push(StepRecord {
                        t,
                        y,
                        e_hat,
                        e_bar: None,
                        u_bar: None,
                        u: None,
                        e_true: e,
                        qp_feasible: false,
                    });
                    final_e = e;
                    break 'run;
                }
            };
            let u = control_law(&plan.u_bar[0], &plan.e_bar[0], &e_hat, &ctrl.k_gain);
            trace.steps.push(StepRecord {
                t,
                y,
                e_hat,
                e_bar: Some(plan.e_bar[0]),
                u_bar: Some(plan.u_bar[0]),
                u: Some(u),
                e_true: e,
                qp_feasible: true,
            });

            let w = cfg.w_true.sample(&mut rng);
            let e_next = ctrl.model.error_step(&e, &u, &w);
            if let Some((lambda, ex)) = plane_crossing(&e, &e_next) {
                if ex.abs() <= radius {
                    impact = Some((t + 1, ex, u.y));
                    final_e = e + lambda * (e_next - e);
                    break 'run;
                }
            }
            e_hat = observer_update(ctrl, &e_hat, &u, &y);
            e = e_next;
            v = cfg.true_noise.draw(&mut rng);
            y = ctrl.model.measure(&e, &v);
            final_e = e;
        }
        trace.final_e = Some(final_e);
    }

    let outcome = classify_failure(&trace, &ctrl.e_set);
    let aborted = matches!(outcome, TrialOutcome::FailureP1 | TrialOutcome::FailureP2);
    let catch = impact.map(|(_, _, vz)| vz <= cfg.max_impact_vz).unwrap_or(false) && !aborted;
    RolloutRecord {
        n,
        seed,
        e0,
        outcome,
        hit_center: !aborted && final_e.x.abs() <= HIT_CENTER_TOL,
        impact_step: impact.map(|(t, _, _)| t),
        impact_rel_vz: impact.map(|(_, _, vz)| vz),
        catch,
        final_e,
        trace: cfg.keep_traces.then_some(trace),
    }
}

/// Convenience entry: build the tightening for a learned support and run one
/// trial against it.
pub fn run_rollout_with_support(
    cfg: &ExperimentConfig,
    ctrl: &ControllerConfig,
    support: &ConfidenceSupport,
    n: usize,
    seed: u64,
) -> RolloutRecord {
    let tuned = ctrl.clone().with_vhat(support.support.clone());
    let ts = build_tightened_sets(&tuned);
    run_rollout(cfg, &tuned, &ts, n, seed)
}

/// Deterministic parallel batch: record `i` always uses the same derived
/// seed, and the output order is the index order regardless of scheduling.
pub fn run_batch(
    cfg: &ExperimentConfig,
    ctrl: &ControllerConfig,
    ts: &TightenedSets,
    n: usize,
    seeds: &[u64],
) -> Vec<RolloutRecord> {
    seeds
        .par_iter()
        .map(|&seed| run_rollout(cfg, ctrl, ts, n, seed))
        .collect()
}

/// Per-sample-size slice of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NSummary {
    pub n: usize,
    /// Miscoverage budget actually used after any escalation.
    pub epsilon_used: f64,
    /// Learned noise support the controller was tightened with.
    pub vhat: Box2,
    pub rollouts: usize,
    pub catches: usize,
    pub misses: usize,
    pub p1_failures: usize,
    pub p2_failures: usize,
    pub constraint_violations: usize,
    pub hit_centers: usize,
    pub impacts: usize,
    pub catch_pct: f64,
    pub hit_center_pct: f64,
    pub trial_failure_pct: f64,
    pub mean_impact_vz: Option<f64>,
    pub std_impact_vz: Option<f64>,
}

/// Whole-sweep scorecard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub per_n: Vec<NSummary>,
    /// Rank correlation of catch percentage against the sample schedule and
    /// its one-sided (increasing) permutation p-value.
    pub spearman_rho: f64,
    pub spearman_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub summary: SweepSummary,
    pub records: Vec<RolloutRecord>,
}

fn summarize(n: usize, epsilon_used: f64, vhat: Box2, records: &[RolloutRecord]) -> NSummary {
    let mut counts = [0usize; 5];
    let mut hit_centers = 0;
    let mut vz = Vec::new();
    for r in records {
        let idx = match r.category() {
            RolloutCategory::Catch => 0,
            RolloutCategory::Miss => 1,
            RolloutCategory::FailureP1 => 2,
            RolloutCategory::FailureP2 => 3,
            RolloutCategory::ConstraintViolation => 4,
        };
        counts[idx] += 1;
        if r.hit_center {
            hit_centers += 1;
        }
        if let Some(x) = r.impact_rel_vz {
            vz.push(x);
        }
    }
    let total = records.len();
    let pct = |k: usize| 100.0 * k as f64 / total as f64;
    let mean = (!vz.is_empty()).then(|| vz.iter().sum::<f64>() / vz.len() as f64);
    let std = (vz.len() >= 2).then(|| {
        let m = mean.unwrap();
        (vz.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (vz.len() - 1) as f64).sqrt()
    });
    NSummary {
        n,
        epsilon_used,
        vhat,
        rollouts: total,
        catches: counts[0],
        misses: counts[1],
        p1_failures: counts[2],
        p2_failures: counts[3],
        constraint_violations: counts[4],
        hit_centers,
        impacts: vz.len(),
        catch_pct: pct(counts[0]),
        hit_center_pct: pct(hit_centers),
        trial_failure_pct: pct(counts[2] + counts[3]),
        mean_impact_vz: mean,
        std_impact_vz: std,
    }
}

/// Learn a support for `n` samples and build the tightening, escalating the
/// miscoverage budget geometrically while the tightened sets come out empty.
/// Returns the tuned controller, its sets, the budget used, and the support.
pub fn learn_and_tighten(
    cfg: &ExperimentConfig,
    ctrl: &ControllerConfig,
    n: usize,
    fit_seed: u64,
) -> Result<(ControllerConfig, TightenedSets, f64, Box2), SimError> {
    let samples = sample_noise(&cfg.true_noise, fit_seed, n);
    let mut eps = cfg.epsilon;
    loop {
        let support = fit_confidence_support(&samples, eps)?.support;
        let tuned = ctrl.clone().with_vhat(support.clone());
        let ts = build_tightened_sets(&tuned);
        if !ts.empty {
            return Ok((tuned, ts, eps, support));
        }
        if eps >= EPSILON_CAP {
            // Give up: the caller records the whole batch as setup failures.
            return Ok((tuned, ts, eps, support));
        }
        eps = (eps * EPSILON_ESCALATION).min(EPSILON_CAP);
    }
}

/// Full learning sweep over the sample-size schedule.
pub fn run_sweep(cfg: &ExperimentConfig, ctrl: &ControllerConfig) -> Result<SweepOutput, SimError> {
    cfg.validate(ctrl)?;
    let mut records = Vec::with_capacity(cfg.n_schedule.len() * cfg.rollouts_per_n);
    let mut per_n = Vec::with_capacity(cfg.n_schedule.len());
    for (j, &n) in cfg.n_schedule.iter().enumerate() {
        let fit_seed = derive_seed(cfg.seed, 1, j as u64);
        let (tuned, ts, eps_used, vhat) = learn_and_tighten(cfg, ctrl, n, fit_seed)?;
        let seeds: Vec<u64> = (0..cfg.rollouts_per_n)
            .map(|i| derive_seed(cfg.seed, 2 + j as u64, i as u64))
            .collect();
        let batch = run_batch(cfg, &tuned, &ts, n, &seeds);
        per_n.push(summarize(n, eps_used, vhat, &batch));
        records.extend(batch);
    }
    let ns: Vec<f64> = cfg.n_schedule.iter().map(|&n| n as f64).collect();
    let catches: Vec<f64> = per_n.iter().map(|s| s.catch_pct).collect();
    // A single-point schedule has no trend; report the neutral values.
    let (rho, p) =
        if ns.len() >= 2 { spearman_trend_test(&ns, &catches) } else { (0.0, 1.0) };
    Ok(SweepOutput { summary: SweepSummary { per_n, spearman_rho: rho, spearman_p: p }, records })
}

/// Closed-loop miscoverage statistics over repeated support refits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureStats {
    pub pairs: usize,
    /// Pairs whose rollout hit mid-task infeasibility or left the state set.
    pub tube_failures: usize,
    /// Pairs that could not even set up (empty sets / initializer).
    pub setup_failures: usize,
    /// Pairs that ran the whole task feasibly and inside the state set.
    pub successes: usize,
}

impl FailureStats {
    pub fn failure_rate(&self) -> f64 {
        self.tube_failures as f64 / self.pairs as f64
    }

    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.pairs as f64
    }
}

/// Estimate how often a freshly learned support lets the tube fail: each
/// pair draws `n` calibration samples, fits a support at `epsilon` (no
/// escalation), and runs one rollout against it. `force_vhat` replaces the
/// learned support, e.g. with the true one as a conditional check.
pub fn empirical_failure_rate(
    cfg: &ExperimentConfig,
    ctrl: &ControllerConfig,
    n: usize,
    epsilon: f64,
    refits: usize,
    force_vhat: Option<&Box2>,
) -> Result<FailureStats, SimError> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(SimError::InvalidEpsilon(epsilon));
    }
    let outcomes: Vec<TrialOutcome> = (0..refits)
        .into_par_iter()
        .map(|r| {
            let vhat = match force_vhat {
                Some(b) => b.clone(),
                None => {
                    let fit_seed = derive_seed(cfg.seed, 3, r as u64);
                    let samples = sample_noise(&cfg.true_noise, fit_seed, n);
                    fit_confidence_support(&samples, epsilon)
                        .expect("schedule sizes are validated against the sample minimum")
                        .support
                }
            };
            let tuned = ctrl.clone().with_vhat(vhat);
            let ts = build_tightened_sets(&tuned);
            run_rollout(cfg, &tuned, &ts, n, derive_seed(cfg.seed, 4, r as u64)).outcome
        })
        .collect();
    let mut stats = FailureStats { pairs: refits, tube_failures: 0, setup_failures: 0, successes: 0 };
    for o in outcomes {
        match o {
            TrialOutcome::FailureP1 | TrialOutcome::ConstraintViolation => {
                stats.tube_failures += 1
            }
            TrialOutcome::FailureP2 => stats.setup_failures += 1,
            TrialOutcome::Success => stats.successes += 1,
        }
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Trend statistics
// ---------------------------------------------------------------------------

/// Average ranks (ties share their mean rank).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("ranks need comparable values"));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys))
}

/// One-sided test for an increasing trend: exact permutation p-value for up
/// to 9 points, a normal approximation beyond.
pub fn spearman_trend_test(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "a trend needs at least two points");
    let xr = ranks(xs);
    let mut yr = ranks(ys);
    let rho = pearson(&xr, &yr);
    if xs.len() <= 9 {
        // Heap's algorithm over permutations of the y-ranks.
        let mut count = 0usize;
        let mut total = 0usize;
        let n = yr.len();
        let mut c = vec![0usize; n];
        total += 1;
        count += (pearson(&xr, &yr) >= rho - 1e-12) as usize;
        let mut i = 0;
        while i < n {
            if c[i] < i {
                if i % 2 == 0 {
                    yr.swap(0, i);
                } else {
                    yr.swap(c[i], i);
                }
                total += 1;
                count += (pearson(&xr, &yr) >= rho - 1e-12) as usize;
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        (rho, count as f64 / total as f64)
    } else {
        let z = rho * ((xs.len() - 1) as f64).sqrt();
        let normal = statrs::distribution::Normal::new(0.0, 1.0).unwrap();
        use statrs::distribution::ContinuousCDF;
        (rho, 1.0 - normal.cdf(z))
    }
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// One CSV row per rollout.
pub fn write_records_csv(path: &Path, records: &[RolloutRecord]) -> Result<(), std::io::Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "n",
        "seed",
        "e0_x",
        "e0_z",
        "outcome",
        "category",
        "hit_center",
        "impact_step",
        "impact_rel_vz",
        "catch",
        "final_ex",
        "final_ez",
    ])?;
    for r in records {
        let outcome = match r.outcome {
            TrialOutcome::Success => "success",
            TrialOutcome::FailureP1 => "failure_p1",
            TrialOutcome::FailureP2 => "failure_p2",
            TrialOutcome::ConstraintViolation => "constraint_violation",
        };
        w.write_record([
            r.n.to_string(),
            r.seed.to_string(),
            format!("{:.17e}", r.e0.x),
            format!("{:.17e}", r.e0.y),
            outcome.to_string(),
            r.category().label().to_string(),
            r.hit_center.to_string(),
            r.impact_step.map(|t| t.to_string()).unwrap_or_default(),
            r.impact_rel_vz.map(|v| format!("{v:.17e}")).unwrap_or_default(),
            r.catch.to_string(),
            format!("{:.17e}", r.final_e.x),
            format!("{:.17e}", r.final_e.y),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON summary with a trailing newline.
pub fn write_summary_json(path: &Path, summary: &SweepSummary) -> Result<(), std::io::Error> {
    let mut file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, summary)?;
    writeln!(file)?;
    Ok(())
}
