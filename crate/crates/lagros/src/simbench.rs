//! Closed-loop rollouts under bounded disturbances, success/effort metrics,
//! local-observation extraction, and the planner comparison harness:
//! (a) a policy imitating the nominal input, (b) receding-horizon planning
//! with the robust tracking controller, (c) a policy imitating the robust
//! tracking controller itself.

use nalgebra::DVector;
use rayon::prelude::*;
use std::time::Instant;

use crate::bounds::{verify_tube, TubeProfile, TubeReport};
use crate::controller::u_star;
use crate::cvstem::MetricTable;
use crate::dynamics::{rk4_step, DisturbanceSpec, SystemModel};
use crate::learner::{percentile, policy_input, Policy};
use crate::planner::{agent_positions, plan, Environment, NominalTrajectory, PlanOptions};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Local observation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ObserveOptions {
    /// Communication/sensing radius for neighbors.
    pub radius: f64,
    /// Fixed number of neighbor slots (nearest first, zero padded).
    pub k_nearest: usize,
}

impl Default for ObserveOptions {
    fn default() -> Self {
        Self {
            radius: 2.0,
            k_nearest: 4,
        }
    }
}

/// Fixed-width local observation: ego state, goal - ego, then k_nearest
/// slots of (dp_x, dp_y, dv_x, dv_y) for the nearest obstacles/agents within
/// the radius, nearest first, distance ties broken by index, zero padded.
pub fn observe_local(
    x_ego: &DVector<f64>,
    agent_idx: usize,
    all_agents: &[DVector<f64>],
    env: &Environment,
    opts: &ObserveOptions,
) -> DVector<f64> {
    let n = x_ego.len();
    let goal = &env.goals[agent_idx];
    let mut out = DVector::zeros(2 * n + 4 * opts.k_nearest);
    out.rows_mut(0, n).copy_from(x_ego);
    out.rows_mut(n, n).copy_from(&(goal - x_ego));
    if opts.k_nearest == 0 {
        return out;
    }
    let (px, py) = (x_ego[0], x_ego[1]);
    let (vx, vy) = if n >= 4 { (x_ego[2], x_ego[3]) } else { (0.0, 0.0) };
    // neighbors: (distance, tiebreak index, dpx, dpy, dvx, dvy)
    let mut neighbors: Vec<(f64, usize, [f64; 4])> = Vec::new();
    for (i, o) in env.obstacles.iter().enumerate() {
        let dp = [o.center[0] - px, o.center[1] - py];
        let d = (dp[0] * dp[0] + dp[1] * dp[1]).sqrt();
        if d <= opts.radius {
            neighbors.push((d, i, [dp[0], dp[1], -vx, -vy]));
        }
    }
    for (j, other) in all_agents.iter().enumerate() {
        if j == agent_idx {
            continue;
        }
        let dp = [other[0] - px, other[1] - py];
        let d = (dp[0] * dp[0] + dp[1] * dp[1]).sqrt();
        if d <= opts.radius {
            let dv = if n >= 4 {
                [other[2] - vx, other[3] - vy]
            } else {
                [0.0, 0.0]
            };
            neighbors.push((d, env.obstacles.len() + j, [dp[0], dp[1], dv[0], dv[1]]));
        }
    }
    neighbors.sort_by(|a, b| (a.0, a.1).partial_cmp(&(b.0, b.1)).unwrap());
    for (slot, (_, _, entry)) in neighbors.iter().take(opts.k_nearest).enumerate() {
        for (k, v) in entry.iter().enumerate() {
            out[2 * n + 4 * slot + k] = *v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Control sources
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct OnlineMpOptions {
    /// Receding horizon length in seconds.
    pub horizon: f64,
    pub knots: usize,
    pub plan: PlanOptions,
    /// Replan every this many control intervals.
    pub replan_every: usize,
}

impl OnlineMpOptions {
    pub fn new(horizon: f64, knots: usize) -> Self {
        let mut plan = PlanOptions::new(horizon, knots);
        plan.restarts = 1;
        plan.max_rounds = 8;
        Self {
            horizon,
            knots,
            plan,
            replan_every: 1,
        }
    }
}

/// What produces u at each control instant.
pub enum ControlSource<'a> {
    /// Robust tracking control against a precomputed nominal.
    Expert {
        table: &'a MetricTable,
        nominal: &'a NominalTrajectory,
    },
    /// One network evaluation per agent per control instant.
    Policy { policy: &'a Policy, observe: ObserveOptions },
    /// Receding-horizon replanning plus the tracking controller: the
    /// comparison baseline that pays for x_d online.
    OnlineMp {
        table: &'a MetricTable,
        tube: &'a TubeProfile,
        opts: OnlineMpOptions,
    },
    /// Constant zero input (sanity baseline).
    Null,
}

// ---------------------------------------------------------------------------
// Rollout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub sim_dt: f64,
    /// Zero-order-hold control interval (the admissible compute budget).
    pub control_dt: f64,
    /// Success horizon.
    pub horizon: f64,
    /// Nominal horizon: failures integrate effort up to this time.
    pub nominal_horizon: f64,
    pub blowup: f64,
    /// Actuator saturation |u_i| <= u_sat applied by the simulator.
    pub u_sat: f64,
}

impl RolloutConfig {
    pub fn new(horizon: f64, nominal_horizon: f64) -> Self {
        Self {
            sim_dt: 1e-3,
            control_dt: 0.1,
            horizon,
            nominal_horizon,
            blowup: 1e6,
            u_sat: f64::INFINITY,
        }
    }
}

fn saturate(u: &mut DVector<f64>, u_sat: f64) {
    if u_sat.is_finite() {
        for v in u.iter_mut() {
            *v = v.clamp(-u_sat, u_sat);
        }
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// ||x - x_d|| per sample when a nominal was supplied.
    pub tracking_errors: Vec<f64>,
    pub success: bool,
    pub t_success: Option<f64>,
    pub collided: bool,
    pub collision_time: Option<f64>,
    /// Effort up to t* on success, up to the nominal horizon on failure.
    pub effort: f64,
    /// Wall-clock seconds per control evaluation.
    pub control_times: Vec<f64>,
    pub tube_report: Option<TubeReport>,
}

fn collision_margin(env: &Environment, x: &DVector<f64>, base_dim: usize) -> f64 {
    let positions = agent_positions(x, env.agents(), base_dim);
    let mut margin = f64::INFINITY;
    for p in &positions {
        for o in &env.obstacles {
            let d = ((p[0] - o.center[0]).powi(2) + (p[1] - o.center[1]).powi(2)).sqrt();
            margin = margin.min(d - o.radius);
        }
    }
    for i in 0..positions.len() {
        for j in (i + 1)..positions.len() {
            let d = ((positions[i][0] - positions[j][0]).powi(2)
                + (positions[i][1] - positions[j][1]).powi(2))
            .sqrt();
            margin = margin.min(d - 2.0 * env.agent_radius);
        }
    }
    margin
}

/// All agents within r_ell(t) of their goals.
fn team_at_goal(
    env: &Environment,
    x: &DVector<f64>,
    base_dim: usize,
    tube: &TubeProfile,
    t: f64,
) -> bool {
    let r = tube.r_ell(t);
    (0..env.agents()).all(|a| {
        let xa = x.rows(a * base_dim, base_dim);
        (xa - &env.goals[a]).norm() <= r
    })
}

#[allow(clippy::too_many_arguments)]
pub fn rollout(
    model: &dyn SystemModel,
    base_model: &dyn SystemModel,
    env: &Environment,
    source: &mut ControlSource<'_>,
    nominal: Option<&NominalTrajectory>,
    tube: &TubeProfile,
    disturbance: &DisturbanceSpec,
    cfg: &RolloutConfig,
) -> Result<RolloutResult> {
    let n = model.state_dim();
    let m = model.input_dim();
    let base_dim = base_model.state_dim();
    let base_m = base_model.input_dim();
    let agents = env.agents();
    let x0 = match nominal {
        Some(tr) => tr.states[0].clone(),
        None => env.stacked_start(),
    };
    assert_eq!(x0.len(), n);

    let steps = (cfg.horizon / cfg.sim_dt).round() as usize;
    let control_every = (cfg.control_dt / cfg.sim_dt).round().max(1.0) as usize;
    let mut x = x0;
    let mut u = DVector::zeros(m);
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps);
    let mut tracking = Vec::with_capacity(steps + 1);
    let mut control_times = Vec::new();
    let mut success = false;
    let mut t_success = None;
    let mut collided = false;
    let mut collision_time = None;
    // receding-horizon state for the online baseline: (replan time, plan)
    let mut mp_nominal: Option<(f64, NominalTrajectory)> = None;
    let mut mp_age = usize::MAX;

    times.push(0.0);
    states.push(x.clone());
    if let Some(tr) = nominal {
        tracking.push((&x - tr.sample(0.0).0).norm());
    }

    for k in 0..steps {
        let t = k as f64 * cfg.sim_dt;
        if k % control_every == 0 {
            let tic = Instant::now();
            u = match source {
                ControlSource::Null => DVector::zeros(m),
                ControlSource::Expert { table, nominal } => {
                    let (x_d, u_d) = nominal.sample(t);
                    let mut out = DVector::zeros(m);
                    for a in 0..agents {
                        let xa = x.rows(a * base_dim, base_dim).into_owned();
                        let xda = x_d.rows(a * base_dim, base_dim).into_owned();
                        let uda = u_d.rows(a * base_m, base_m).into_owned();
                        let res = u_star(base_model, table, &xa, &xda, &uda, t)?;
                        out.rows_mut(a * base_m, base_m).copy_from(&res.u);
                    }
                    out
                }
                ControlSource::Policy { policy, observe } => {
                    let agent_states: Vec<DVector<f64>> = (0..agents)
                        .map(|a| x.rows(a * base_dim, base_dim).into_owned())
                        .collect();
                    let mut out = DVector::zeros(m);
                    for a in 0..agents {
                        let o_ell =
                            observe_local(&agent_states[a], a, &agent_states, env, observe);
                        let input = policy_input(&agent_states[a], &o_ell, t);
                        let ua = policy.infer(&input);
                        out.rows_mut(a * base_m, base_m).copy_from(&ua);
                    }
                    out
                }
                ControlSource::OnlineMp { table, tube, opts } => {
                    if mp_age >= opts.replan_every {
                        // keep tracking the stale plan when replanning fails
                        if let Some(fresh) = replan_from(model, env, &x, t, tube, opts, cfg.horizon)
                        {
                            mp_nominal = Some((t, fresh));
                        }
                        mp_age = 0;
                    }
                    mp_age += 1;
                    match &mp_nominal {
                        Some((t0, fresh)) => {
                            let (x_d, u_d) = fresh.sample((t - t0).max(0.0));
                            let mut out = DVector::zeros(m);
                            for a in 0..agents {
                                let xa = x.rows(a * base_dim, base_dim).into_owned();
                                let xda = x_d.rows(a * base_dim, base_dim).into_owned();
                                let uda = u_d.rows(a * base_m, base_m).into_owned();
                                let res = u_star(base_model, table, &xa, &xda, &uda, t)?;
                                out.rows_mut(a * base_m, base_m).copy_from(&res.u);
                            }
                            out
                        }
                        None => u.clone(),
                    }
                }
            };
            control_times.push(tic.elapsed().as_secs_f64());
            saturate(&mut u, cfg.u_sat);
        }
        let d = disturbance.sample(t);
        x = rk4_step(model, &x, &u, &d, t, cfg.sim_dt);
        let norm = x.norm();
        if !norm.is_finite() || norm > cfg.blowup {
            return Err(Error::Divergence { t: t + cfg.sim_dt, norm });
        }
        let t_next = (k + 1) as f64 * cfg.sim_dt;
        times.push(t_next);
        inputs.push(u.clone());
        states.push(x.clone());
        if let Some(tr) = nominal {
            tracking.push((&x - tr.sample(t_next).0).norm());
        }
        if !collided && collision_margin(env, &x, base_dim) < 0.0 {
            collided = true;
            collision_time = Some(t_next);
        }
        if !success && !collided && team_at_goal(env, &x, base_dim, tube, t_next) {
            success = true;
            t_success = Some(t_next);
        }
    }

    // effort: to t* on success, to the nominal horizon otherwise
    let t_cut = if success {
        t_success.unwrap()
    } else {
        cfg.nominal_horizon
    };
    let effort = effort_integral(&times, &inputs, t_cut);
    let tube_report = nominal.map(|tr| {
        let nominal_states: Vec<DVector<f64>> =
            times.iter().map(|t| tr.sample(*t).0).collect();
        let traj = crate::dynamics::Trajectory {
            times: times.clone(),
            states: states.clone(),
            inputs: inputs.clone(),
            disturbances: Vec::new(),
        };
        verify_tube(&traj, &nominal_states, tube)
    });
    Ok(RolloutResult {
        times,
        states,
        inputs,
        tracking_errors: tracking,
        success,
        t_success,
        collided,
        collision_time,
        effort,
        control_times,
        tube_report,
    })
}

fn replan_from(
    model: &dyn SystemModel,
    env: &Environment,
    x: &DVector<f64>,
    t: f64,
    tube: &TubeProfile,
    opts: &OnlineMpOptions,
    horizon: f64,
) -> Option<NominalTrajectory> {
    // reachable subgoal: pull the goal toward the current state when the
    // remaining window is shorter than the remaining task
    let remaining = (horizon - t).max(opts.horizon * 0.5);
    let frac = (opts.horizon / remaining).min(1.0);
    let base_dim = model.state_dim() / env.agents();
    let mut sub_env = env.clone();
    sub_env.starts = (0..env.agents())
        .map(|a| x.rows(a * base_dim, base_dim).into_owned())
        .collect();
    sub_env.goals = env
        .goals
        .iter()
        .zip(&sub_env.starts)
        .map(|(g, s)| s + (g - s) * frac)
        .collect();
    let mut plan_opts = opts.plan.clone();
    plan_opts.horizon = opts.horizon;
    plan_opts.knots = opts.knots;
    // the replanned nominal starts at the perturbed state, so its own tube
    // begins at zero radius again
    plan(model, &sub_env, tube, &plan_opts).ok()
}

/// Trapezoid integral of ||u||^2 up to t_cut (u is held per step).
pub fn effort_integral(times: &[f64], inputs: &[DVector<f64>], t_cut: f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..inputs.len() {
        let (t0, t1) = (times[k], times[k + 1]);
        if t0 >= t_cut {
            break;
        }
        let dt = t1.min(t_cut) - t0;
        acc += inputs[k].norm_squared() * dt;
    }
    acc
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlannerKind {
    NaivePolicy,
    OnlineMp,
    LagRos,
}

impl PlannerKind {
    pub fn label(&self) -> &'static str {
        match self {
            PlannerKind::NaivePolicy => "a-naive-policy",
            PlannerKind::OnlineMp => "b-online-mp",
            PlannerKind::LagRos => "c-lagros",
        }
    }
}

/// Aggregated metrics for one (planner, disturbance) cell.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub planner: PlannerKind,
    pub d_bar: f64,
    pub trials: usize,
    pub success_rate: f64,
    pub mean_effort: f64,
    pub mean_dt: f64,
    pub p95_dt: f64,
    pub mean_tube_violation: f64,
    pub tube_satisfied_fraction: f64,
    pub collisions: usize,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Per-trial records: (planner, d_bar, trial, success, effort).
    pub trials: Vec<(PlannerKind, f64, usize, bool, f64)>,
}

impl BenchReport {
    /// The external interface row format.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("planner,d_bar,success_rate,mean_effort,mean_dt,p95_dt\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.planner.label(),
                r.d_bar,
                r.success_rate,
                r.mean_effort,
                r.mean_dt,
                r.p95_dt
            ));
        }
        out
    }

    /// Deterministic per-trial records (no wall-clock columns).
    pub fn trials_csv(&self) -> String {
        let mut out = String::from("planner,d_bar,trial,success,effort\n");
        for (p, d, i, s, e) in &self.trials {
            out.push_str(&format!("{},{},{},{},{}\n", p.label(), d, i, *s as u8, e));
        }
        out
    }
}

pub struct BenchmarkInputs<'a> {
    pub model: &'a dyn SystemModel,
    pub base_model: &'a dyn SystemModel,
    pub table: &'a MetricTable,
    pub tube: &'a TubeProfile,
    pub lagros_policy: Option<&'a Policy>,
    pub naive_policy: Option<&'a Policy>,
    pub online_mp: Option<OnlineMpOptions>,
    pub observe: ObserveOptions,
    /// Environment per trial (shared across planners for matched seeds).
    pub envs: &'a [Environment],
    /// Offline nominal per trial, used by tube verification.
    pub nominals: &'a [NominalTrajectory],
}

pub fn benchmark(
    inputs: &BenchmarkInputs<'_>,
    planners: &[PlannerKind],
    d_bars: &[f64],
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<BenchReport> {
    let mut rows = Vec::new();
    let mut trial_records = Vec::new();
    for &d_bar in d_bars {
        for &planner in planners {
            let per_trial: Vec<Result<RolloutResult>> = inputs
                .envs
                .par_iter()
                .zip(inputs.nominals.par_iter())
                .enumerate()
                .map(|(i, (env, nominal))| {
                    let disturbance = DisturbanceSpec {
                        kind: crate::dynamics::DisturbanceKind::PiecewiseRandom,
                        magnitude: d_bar,
                        hold_interval: 1.0,
                        seed: seed ^ (i as u64).wrapping_mul(0x9e3779b97f4a7c15),
                        dim: inputs.model.state_dim(),
                    };
                    let mut source = match planner {
                        PlannerKind::NaivePolicy => ControlSource::Policy {
                            policy: inputs.naive_policy.ok_or_else(|| {
                                Error::Config("naive policy missing".into())
                            })?,
                            observe: inputs.observe.clone(),
                        },
                        PlannerKind::LagRos => ControlSource::Policy {
                            policy: inputs.lagros_policy.ok_or_else(|| {
                                Error::Config("lagros policy missing".into())
                            })?,
                            observe: inputs.observe.clone(),
                        },
                        PlannerKind::OnlineMp => ControlSource::OnlineMp {
                            table: inputs.table,
                            tube: inputs.tube,
                            opts: inputs
                                .online_mp
                                .clone()
                                .ok_or_else(|| Error::Config("online-mp options missing".into()))?,
                        },
                    };
                    rollout(
                        inputs.model,
                        inputs.base_model,
                        env,
                        &mut source,
                        Some(nominal),
                        inputs.tube,
                        &disturbance,
                        cfg,
                    )
                })
                .collect();
            let mut successes = 0usize;
            let mut collisions = 0usize;
            let mut efforts = Vec::new();
            let mut dts = Vec::new();
            let mut violations = Vec::new();
            let mut inside = 0usize;
            let n_trials = per_trial.len();
            for (i, r) in per_trial.into_iter().enumerate() {
                let r = r?;
                successes += r.success as usize;
                collisions += r.collided as usize;
                efforts.push(r.effort);
                dts.extend(r.control_times.iter().copied());
                if let Some(tr) = &r.tube_report {
                    violations.push(tr.max_violation);
                    if tr.max_violation <= 0.0 {
                        inside += 1;
                    }
                }
                trial_records.push((planner, d_bar, i, r.success, r.effort));
            }
            rows.push(BenchRow {
                planner,
                d_bar,
                trials: n_trials,
                success_rate: successes as f64 / n_trials.max(1) as f64,
                mean_effort: efforts.iter().sum::<f64>() / efforts.len().max(1) as f64,
                mean_dt: dts.iter().sum::<f64>() / dts.len().max(1) as f64,
                p95_dt: percentile(&dts, 0.95),
                mean_tube_violation: if violations.is_empty() {
                    f64::NAN
                } else {
                    violations.iter().sum::<f64>() / violations.len() as f64
                },
                tube_satisfied_fraction: inside as f64 / n_trials.max(1) as f64,
                collisions,
            });
        }
    }
    Ok(BenchReport {
        rows,
        trials: trial_records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cvstem::{self, GridPoint, SynthesisOptions};
    use crate::dynamics::{DisturbanceKind, PlanarAgentModel};
    use crate::planner::Obstacle;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn simple_env() -> Environment {
        Environment {
            starts: vec![dv(&[0.0, 0.0, 0.0, 0.0])],
            goals: vec![dv(&[2.0, 1.0, 0.0, 0.0])],
            obstacles: vec![Obstacle { center: [1.0, 0.5], radius: 0.3 }],
            workspace: Some(([-1.0, -1.0], [4.0, 4.0])),
            agent_radius: 0.0,
        }
    }

    #[test]
    fn empty_neighborhood_pads_with_zeros() {
        let env = Environment {
            obstacles: vec![],
            ..simple_env()
        };
        let x = dv(&[0.5, 0.5, 0.1, -0.1]);
        let o = observe_local(&x, 0, &[x.clone()], &env, &ObserveOptions::default());
        assert_eq!(o.len(), 8 + 16);
        assert_eq!(o.rows(0, 4).into_owned(), x);
        assert_eq!(o.rows(4, 4).into_owned(), &env.goals[0] - &x);
        assert_eq!(o.rows(8, 16).norm(), 0.0);
    }

    #[test]
    fn single_obstacle_lands_in_first_slot() {
        let env = simple_env();
        let x = dv(&[0.5, 0.5, 0.2, 0.0]);
        let o = observe_local(&x, 0, &[x.clone()], &env, &ObserveOptions::default());
        assert_abs_diff_eq!(o[8], 0.5, epsilon = 1e-12); // dp_x = 1.0 - 0.5
        assert_abs_diff_eq!(o[9], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(o[10], -0.2, epsilon = 1e-12); // static obstacle
        assert_eq!(o.rows(12, 12).norm(), 0.0);
    }

    #[test]
    fn observation_invariant_to_obstacle_permutation() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..50 {
            let mut env = simple_env();
            env.obstacles = (0..5)
                .map(|_| Obstacle {
                    center: [rng.random_range(-1.0..3.0), rng.random_range(-1.0..3.0)],
                    radius: 0.2,
                })
                .collect();
            let x = dv(&[0.5, 0.5, 0.0, 0.0]);
            let o1 = observe_local(&x, 0, &[x.clone()], &env, &ObserveOptions::default());
            env.obstacles.reverse();
            let o2 = observe_local(&x, 0, &[x.clone()], &env, &ObserveOptions::default());
            assert_eq!(o1, o2);
        }
    }

    fn planar_pipeline() -> (PlanarAgentModel, MetricTable, TubeProfile, NominalTrajectory) {
        let model = PlanarAgentModel::new(false, 0.02);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let grid: Vec<GridPoint> = (0..10)
            .map(|i| {
                let x_d = DVector::from_fn(4, |k, _| {
                    let scale = [2.0, 2.0, 0.6, 0.6][k];
                    rng.random_range(-0.2..scale)
                });
                GridPoint {
                    x: &x_d + DVector::from_fn(4, |_, _| rng.random_range(-0.15..0.15)),
                    x_d,
                    u_d: DVector::from_fn(2, |_, _| rng.random_range(-0.4..0.4)),
                    t: i as f64,
                }
            })
            .collect();
        let table = cvstem::synthesize(&model, &grid, &SynthesisOptions::new(0.3, 2)).unwrap();
        let tube = TubeProfile::from_chi(table.chi, 0.3, model.b_bar(), 0.0, 0.02);
        let env = simple_env();
        let mut popts = PlanOptions::new(8.0, 32);
        popts.seed = 2;
        let nominal = plan(&model, &env, &tube, &popts).unwrap();
        (model, table, tube, nominal)
    }

    #[test]
    fn expert_tracks_under_zero_disturbance() {
        let (model, table, tube, nominal) = planar_pipeline();
        let env = simple_env();
        let mut source = ControlSource::Expert {
            table: &table,
            nominal: &nominal,
        };
        let cfg = RolloutConfig::new(8.0, 8.0);
        let res = rollout(
            &model,
            &model,
            &env,
            &mut source,
            Some(&nominal),
            &tube,
            &DisturbanceSpec::zero(4),
            &cfg,
        )
        .unwrap();
        assert!(res.success, "expert should reach the goal");
        assert!(!res.collided);
        let max_err = res
            .tracking_errors
            .iter()
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(max_err < 0.05, "tracking error {max_err}");
        let report = res.tube_report.unwrap();
        assert!(report.max_violation <= 0.0, "violation {}", report.max_violation);
    }

    #[test]
    fn null_controller_under_huge_disturbance_fails() {
        let (model, _table, tube, nominal) = planar_pipeline();
        let env = simple_env();
        let mut source = ControlSource::Null;
        let cfg = RolloutConfig::new(8.0, 8.0);
        let spec = DisturbanceSpec {
            kind: DisturbanceKind::ConstantRandomDirection,
            magnitude: 3.0,
            hold_interval: 1.0,
            seed: 4,
            dim: 4,
        };
        let res = rollout(
            &model, &model, &env, &mut source, Some(&nominal), &tube, &spec, &cfg,
        )
        .unwrap();
        assert!(!res.success);
    }

    #[test]
    fn effort_is_additive_across_a_split() {
        let times: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let inputs: Vec<DVector<f64>> = (0..100)
            .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let whole = effort_integral(&times, &inputs, 1.0);
        let tau = 0.37;
        let first = effort_integral(&times, &inputs, tau);
        // second segment: integrate from tau by shifting the cut
        let mut second = 0.0;
        for k in 0..inputs.len() {
            let (t0, t1) = (times[k], times[k + 1]);
            if t1 <= tau {
                continue;
            }
            let lo = t0.max(tau);
            second += inputs[k].norm_squared() * (t1 - lo);
        }
        assert_abs_diff_eq!(first + second, whole, epsilon = 1e-9);
    }

    #[test]
    fn online_mp_with_full_horizon_matches_offline_cost() {
        let (model, table, tube, nominal) = planar_pipeline();
        let env = Environment {
            obstacles: vec![],
            ..simple_env()
        };
        let mut popts = PlanOptions::new(8.0, 32);
        popts.seed = 2;
        let offline = plan(&model, &env, &tube, &popts).unwrap();
        // a single replan with the full horizon from the true start solves
        // the same problem
        let mut opts = OnlineMpOptions::new(8.0, 32);
        opts.plan.max_rounds = 30;
        opts.plan.seed = 2;
        let replanned = super::replan_from(&model, &env, &env.stacked_start(), 0.0, &tube, &opts, 8.0)
            .expect("full-horizon replan must succeed");
        let rel = (replanned.cost - offline.cost).abs() / offline.cost.max(1e-9);
        assert!(rel < 0.01, "cost gap {rel}");
        let _ = (table, nominal);
    }

    #[test]
    fn online_mp_compute_time_exceeds_policy_inference() {
        let (model, table, tube, nominal) = planar_pipeline();
        let env = simple_env();
        let cfg = RolloutConfig {
            sim_dt: 1e-2,
            control_dt: 0.1,
            horizon: 2.0,
            nominal_horizon: 8.0,
            blowup: 1e6,
        };
        let mut mp = ControlSource::OnlineMp {
            table: &table,
            tube: &tube,
            opts: OnlineMpOptions::new(2.0, 8),
        };
        let mp_res = rollout(
            &model,
            &model,
            &env,
            &mut mp,
            Some(&nominal),
            &tube,
            &DisturbanceSpec::zero(4),
            &cfg,
        )
        .unwrap();
        let policy = Policy::init(&[4 + 8 + 16 + 1, 16, 2], crate::learner::OutputTransform::Identity, 0);
        let mut pol = ControlSource::Policy {
            policy: &policy,
            observe: ObserveOptions::default(),
        };
        let pol_res = rollout(
            &model,
            &model,
            &env,
            &mut pol,
            Some(&nominal),
            &tube,
            &DisturbanceSpec::zero(4),
            &cfg,
        )
        .unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&mp_res.control_times) > mean(&pol_res.control_times),
            "planner {} vs policy {}",
            mean(&mp_res.control_times),
            mean(&pol_res.control_times)
        );
    }

    #[test]
    fn short_horizon_replanning_degrades_behind_obstacle() {
        // the receding-horizon baseline with a one-knot-like myopic window
        // walks toward the subgoal straight at the obstacle and stalls, while
        // the full-horizon offline plan goes around
        let model = PlanarAgentModel::new(false, 0.02);
        let env = Environment {
            starts: vec![dv(&[0.0, 2.0, 0.0, 0.0])],
            goals: vec![dv(&[4.0, 2.0, 0.0, 0.0])],
            obstacles: vec![Obstacle { center: [2.0, 2.0], radius: 0.6 }],
            workspace: Some(([-1.0, -1.0], [6.0, 5.0])),
            agent_radius: 0.0,
        };
        let (_, table, tube, _) = planar_pipeline();
        let cfg = RolloutConfig {
            sim_dt: 1e-2,
            control_dt: 0.1,
            horizon: 6.0,
            nominal_horizon: 6.0,
            blowup: 1e6,
        };
        let mut myopic = ControlSource::OnlineMp {
            table: &table,
            tube: &tube,
            opts: OnlineMpOptions::new(0.5, 1),
        };
        let res = rollout(
            &model,
            &model,
            &env,
            &mut myopic,
            None,
            &tube,
            &DisturbanceSpec::zero(4),
            &cfg,
        )
        .unwrap();
        let final_gap = (res.states.last().unwrap().rows(0, 2).into_owned()
            - dv(&[4.0, 2.0]))
        .norm();
        assert!(
            !res.success || final_gap > 0.5,
            "myopic planner unexpectedly solved the detour (gap {final_gap})"
        );
    }

    #[test]
    fn benchmark_rows_are_deterministic() {
        let (model, table, tube, nominal) = planar_pipeline();
        let policy = Policy::init(&[4 + 8 + 16 + 1, 16, 2], crate::learner::OutputTransform::Identity, 0);
        let env = simple_env();
        let inputs = BenchmarkInputs {
            model: &model,
            base_model: &model,
            table: &table,
            tube: &tube,
            lagros_policy: Some(&policy),
            naive_policy: Some(&policy),
            online_mp: None,
            observe: ObserveOptions::default(),
            envs: std::slice::from_ref(&env),
            nominals: std::slice::from_ref(&nominal),
        };
        let cfg = RolloutConfig {
            sim_dt: 1e-2,
            control_dt: 0.1,
            horizon: 2.0,
            nominal_horizon: 2.0,
            blowup: 1e6,
        };
        let a = benchmark(&inputs, &[PlannerKind::LagRos], &[0.1], &cfg, 3).unwrap();
        let b = benchmark(&inputs, &[PlannerKind::LagRos], &[0.1], &cfg, 3).unwrap();
        assert_eq!(a.trials_csv(), b.trials_csv());
        assert_eq!(a.rows[0].success_rate, b.rows[0].success_rate);
        assert_eq!(a.rows[0].mean_effort, b.rows[0].mean_effort);
        // identical planner twice gives identical deterministic rows
        let c = benchmark(
            &inputs,
            &[PlannerKind::LagRos, PlannerKind::NaivePolicy],
            &[0.1],
            &cfg,
            3,
        )
        .unwrap();
        assert_eq!(c.rows[0].mean_effort, c.rows[1].mean_effort);
    }
}
