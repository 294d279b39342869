//! Imitation dataset generation: randomized environments, tube-eroded
//! plans, perturbed states sampled uniformly inside the robust error tube,
//! and robust-control labels from the metric controller. With x(0) = x_d(0)
//! the tube radius is the state-independent r_ell(t), so the sampling set is
//! known ahead of the rollout.

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::bounds::TubeProfile;
use crate::controller::u_star;
use crate::cvstem::MetricTable;
use crate::dynamics::SystemModel;
use crate::planner::{plan, Environment, NominalTrajectory, Obstacle, PlanOptions};
use crate::simbench::{observe_local, ObserveOptions};
use crate::{Error, Result};

/// One labeled record: perturbed state, local observation, time, robust
/// control label, and the nominal input for the naive-imitation baseline.
#[derive(Debug, Clone)]
pub struct DemoSample {
    pub x: DVector<f64>,
    pub o_ell: DVector<f64>,
    pub t: f64,
    pub u_star: DVector<f64>,
    pub u_d: DVector<f64>,
    pub env_id: usize,
    pub traj_id: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub model_id: String,
    pub state_dim: usize,
    pub obs_dim: usize,
    pub input_dim: usize,
    pub tube: TubeProfile,
    pub eps_target: f64,
    pub seed: u64,
    pub samples: Vec<DemoSample>,
    /// Environments that had to be resampled because planning failed.
    pub resampled_envs: usize,
}

/// Environment randomization ranges.
#[derive(Debug, Clone)]
pub struct EnvSampler {
    pub agents: usize,
    pub agent_radius: f64,
    pub workspace: Option<([f64; 2], [f64; 2])>,
    /// Goals uniform in [lo, hi] per coordinate.
    pub goal_lo: Vec<f64>,
    pub goal_hi: Vec<f64>,
    pub start_lo: Vec<f64>,
    pub start_hi: Vec<f64>,
    pub obstacle_count: (usize, usize),
    pub obstacle_radius: f64,
    /// Clearance required between sampled obstacles and endpoints.
    pub clearance: f64,
}

impl EnvSampler {
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> Environment {
        let dim = self.goal_lo.len();
        let draw = |rng: &mut ChaCha12Rng, lo: &[f64], hi: &[f64]| {
            DVector::from_fn(dim, |i, _| {
                if hi[i] > lo[i] {
                    rng.random_range(lo[i]..hi[i])
                } else {
                    lo[i]
                }
            })
        };
        'outer: loop {
            let mut starts = Vec::with_capacity(self.agents);
            let mut goals = Vec::with_capacity(self.agents);
            for _ in 0..self.agents {
                starts.push(draw(rng, &self.start_lo, &self.start_hi));
                goals.push(draw(rng, &self.goal_lo, &self.goal_hi));
            }
            // endpoints must be mutually separated for multi-agent setups
            for i in 0..self.agents {
                for j in (i + 1)..self.agents {
                    for (a, b) in [(&starts, &starts), (&goals, &goals)] {
                        let d = (&a[i] - &b[j]).rows(0, 2.min(dim)).norm();
                        if d < 2.0 * self.agent_radius + 2.0 * self.clearance {
                            continue 'outer;
                        }
                    }
                }
            }
            let count = if self.obstacle_count.1 > self.obstacle_count.0 {
                rng.random_range(self.obstacle_count.0..=self.obstacle_count.1)
            } else {
                self.obstacle_count.0
            };
            let mut obstacles = Vec::with_capacity(count);
            let ws = self.workspace.unwrap_or(([0.0, 0.0], [5.0, 5.0]));
            let mut tries = 0;
            while obstacles.len() < count {
                tries += 1;
                if tries > 200 {
                    continue 'outer;
                }
                let c = [
                    rng.random_range(ws.0[0]..ws.1[0]),
                    rng.random_range(ws.0[1]..ws.1[1]),
                ];
                let clear = |p: &DVector<f64>| {
                    ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
                        >= self.obstacle_radius + self.clearance
                };
                if starts.iter().all(&clear) && goals.iter().all(&clear) {
                    obstacles.push(Obstacle {
                        center: c,
                        radius: self.obstacle_radius,
                    });
                }
            }
            return Environment {
                starts,
                goals,
                obstacles,
                workspace: self.workspace,
                agent_radius: self.agent_radius,
            };
        }
    }
}

/// Uniform sample in the closed Euclidean ball of radius r about center.
pub fn sample_tube_state(
    center: &DVector<f64>,
    radius: f64,
    rng: &mut ChaCha12Rng,
) -> DVector<f64> {
    let n = center.len();
    if radius == 0.0 {
        return center.clone();
    }
    // isotropic direction via normalized Gaussian, radius via u^(1/n)
    let mut dir = DVector::from_fn(n, |_, _| {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let norm = dir.norm();
    if norm == 0.0 {
        dir[0] = 1.0;
    } else {
        dir /= norm;
    }
    let u: f64 = rng.random_range(0.0..=1.0);
    let r = radius * u.powf(1.0 / n as f64);
    center + dir * r
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub n_envs: usize,
    /// Labeled samples per trajectory per agent.
    pub d_per_traj: usize,
    pub seed: u64,
    pub plan: PlanOptions,
    pub observe: ObserveOptions,
    /// Maximum planner re-draws per environment slot.
    pub max_resamples: usize,
    pub eps_target: f64,
    /// Cap on the tube-sampling ball radius.
    pub radius_cap: f64,
}

/// Runs the full generation loop over freshly sampled environments.
pub fn generate(
    model: &dyn SystemModel,
    base_model: &dyn SystemModel,
    table: &MetricTable,
    tube: &TubeProfile,
    sampler: &EnvSampler,
    opts: &GenerateOptions,
) -> Result<Dataset> {
    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut envs = Vec::with_capacity(opts.n_envs);
    let mut trajs: Vec<NominalTrajectory> = Vec::with_capacity(opts.n_envs);
    let mut resampled = 0usize;

    // sequential sampling keeps the dataset reproducible: each env slot draws
    // from the master stream, planning retries burn further draws
    for _slot in 0..opts.n_envs {
        let mut found = false;
        for _try in 0..opts.max_resamples {
            let env = sampler.sample(&mut rng);
            let mut plan_opts = opts.plan.clone();
            plan_opts.seed = rng.next_u64();
            match plan(model, &env, tube, &plan_opts) {
                Ok(traj) => {
                    envs.push(env);
                    trajs.push(traj);
                    found = true;
                    break;
                }
                Err(_) => {
                    resampled += 1;
                }
            }
        }
        if !found {
            return Err(Error::PlanningInfeasible(format!(
                "no plannable environment found in {} draws",
                opts.max_resamples
            )));
        }
    }

    let dataset_samples = generate_for_trajectories(
        model, base_model, table, tube, &envs, &trajs, opts,
    )?;
    let obs_dim = dataset_samples
        .first()
        .map(|s| s.o_ell.len())
        .unwrap_or(0);
    Ok(Dataset {
        model_id: model.name().to_string(),
        state_dim: base_model.state_dim(),
        obs_dim,
        input_dim: base_model.input_dim(),
        tube: tube.clone(),
        eps_target: opts.eps_target,
        seed: opts.seed,
        samples: dataset_samples,
        resampled_envs: resampled,
    })
}

/// Labels a fixed set of environments/trajectories (used by `generate` and
/// directly by tests). Per-environment RNG streams are derived from the
/// master seed so scheduling cannot affect the output.
pub fn generate_for_trajectories(
    _model: &dyn SystemModel,
    base_model: &dyn SystemModel,
    table: &MetricTable,
    tube: &TubeProfile,
    envs: &[Environment],
    trajs: &[NominalTrajectory],
    opts: &GenerateOptions,
) -> Result<Vec<DemoSample>> {
    let n_base = base_model.state_dim();
    let m_base = base_model.input_dim();
    let per_env: Vec<Result<Vec<DemoSample>>> = envs
        .par_iter()
        .zip(trajs.par_iter())
        .enumerate()
        .map(|(env_id, (env, traj))| {
            let mut rng =
                ChaCha12Rng::seed_from_u64(opts.seed ^ (env_id as u64).wrapping_mul(0x2545f4914f6cdd1d) ^ 0x9e37);
            let agents = env.agents();
            let horizon = traj.horizon();
            let d = opts.d_per_traj;
            let mut out = Vec::with_capacity(d * agents);
            for j in 0..d {
                // stratified time: one uniform draw per bin keeps max gap <= 2T/D
                let t = (j as f64 + rng.random_range(0.0..1.0)) * horizon / d as f64;
                let (x_d_stacked, u_d_stacked) = traj.sample(t);
                let radius = tube.r_ell(t).min(opts.radius_cap);
                // perturb every agent, then observe against the perturbed world
                let mut xs = Vec::with_capacity(agents);
                for a in 0..agents {
                    let x_d_a = x_d_stacked.rows(a * n_base, n_base).into_owned();
                    let x_a = sample_tube_state(&x_d_a, radius, &mut rng);
                    debug_assert!((&x_a - &x_d_a).norm() <= radius * (1.0 + 1e-12));
                    xs.push(x_a);
                }
                for a in 0..agents {
                    let x_d_a = x_d_stacked.rows(a * n_base, n_base).into_owned();
                    let u_d_a = u_d_stacked.rows(a * m_base, m_base).into_owned();
                    let res = u_star(base_model, table, &xs[a], &x_d_a, &u_d_a, t)?;
                    let o_ell = observe_local(&xs[a], a, &xs, env, &opts.observe);
                    out.push(DemoSample {
                        x: xs[a].clone(),
                        o_ell,
                        t,
                        u_star: res.u,
                        u_d: u_d_a,
                        env_id,
                        traj_id: env_id,
                    });
                }
            }
            Ok(out)
        })
        .collect();
    let mut samples = Vec::new();
    for r in per_env {
        samples.extend(r?);
    }
    Ok(samples)
}

impl Dataset {
    /// Header block plus one CSV record per sample; exact float round-trip.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# lagros-dataset v1\n");
        out.push_str(&format!("# model = {}\n", self.model_id));
        out.push_str(&format!("# state_dim = {}\n", self.state_dim));
        out.push_str(&format!("# obs_dim = {}\n", self.obs_dim));
        out.push_str(&format!("# input_dim = {}\n", self.input_dim));
        out.push_str(&format!("# eps_target = {}\n", self.eps_target));
        out.push_str(&format!("# seed = {}\n", self.seed));
        out.push_str(&format!("# resampled_envs = {}\n", self.resampled_envs));
        out.push_str(&format!(
            "# tube = {},{},{},{},{},{},{}\n",
            self.tube.r0,
            self.tube.omega_lo,
            self.tube.omega_hi,
            self.tube.alpha,
            self.tube.b_bar,
            self.tube.eps_ell,
            self.tube.d_bar
        ));
        out.push_str("# columns: env_id,traj_id,t,x...,o_ell...,u_star...,u_d...\n");
        for s in &self.samples {
            out.push_str(&format!("{},{},{}", s.env_id, s.traj_id, s.t));
            for v in s.x.iter().chain(s.o_ell.iter()).chain(s.u_star.iter()).chain(s.u_d.iter()) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::Artifact {
            path: "<dataset>".into(),
            detail: d,
        };
        let mut model_id = String::new();
        let (mut n, mut p, mut m) = (0usize, 0usize, 0usize);
        let mut eps_target = 0.0;
        let mut seed = 0u64;
        let mut resampled = 0usize;
        let mut tube = None;
        let mut samples = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# model = ") {
                model_id = rest.to_string();
            } else if let Some(rest) = line.strip_prefix("# state_dim = ") {
                n = rest.parse().map_err(|_| bad("bad state_dim".into()))?;
            } else if let Some(rest) = line.strip_prefix("# obs_dim = ") {
                p = rest.parse().map_err(|_| bad("bad obs_dim".into()))?;
            } else if let Some(rest) = line.strip_prefix("# input_dim = ") {
                m = rest.parse().map_err(|_| bad("bad input_dim".into()))?;
            } else if let Some(rest) = line.strip_prefix("# eps_target = ") {
                eps_target = rest.parse().map_err(|_| bad("bad eps_target".into()))?;
            } else if let Some(rest) = line.strip_prefix("# seed = ") {
                seed = rest.parse().map_err(|_| bad("bad seed".into()))?;
            } else if let Some(rest) = line.strip_prefix("# resampled_envs = ") {
                resampled = rest.parse().map_err(|_| bad("bad resampled_envs".into()))?;
            } else if let Some(rest) = line.strip_prefix("# tube = ") {
                let v: Vec<f64> = rest
                    .split(',')
                    .map(|x| x.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(e.to_string()))?;
                tube = Some(TubeProfile::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6]));
            } else if line.starts_with('#') || line.is_empty() {
                continue;
            } else {
                let mut parts = line.split(',');
                let env_id: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad env_id".into()))?;
                let traj_id: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad traj_id".into()))?;
                let t: f64 = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad("bad t".into()))?;
                let rest: Vec<f64> = parts
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(e.to_string()))?;
                if rest.len() != n + p + 2 * m {
                    return Err(bad(format!(
                        "record has {} values, expected {}",
                        rest.len(),
                        n + p + 2 * m
                    )));
                }
                samples.push(DemoSample {
                    x: DVector::from_row_slice(&rest[..n]),
                    o_ell: DVector::from_row_slice(&rest[n..n + p]),
                    t,
                    u_star: DVector::from_row_slice(&rest[n + p..n + p + m]),
                    u_d: DVector::from_row_slice(&rest[n + p + m..]),
                    env_id,
                    traj_id,
                });
            }
        }
        Ok(Dataset {
            model_id,
            state_dim: n,
            obs_dim: p,
            input_dim: m,
            tube: tube.ok_or_else(|| bad("missing tube".into()))?,
            eps_target,
            seed,
            samples,
            resampled_envs: resampled,
        })
    }
}
