//! Tube-eroded trajectory optimization: direct transcription with RK4
//! single-step defect constraints, solved by sequential convex programming
//! (linearized dynamics, supporting-hyperplane obstacle cuts, trust region
//! with radius halving, soft obstacle slacks under an exact penalty).
//!
//! Eroding the admissible set by the tube radius makes nominal feasibility
//! imply perturbed feasibility: every obstacle is inflated by r_ell(t), the
//! workspace box shrinks inward by r_ell(t), and the required inter-agent
//! separation grows by 2 r_ell(t).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::bounds::TubeProfile;
use crate::dynamics::{rk4_step, InputConstraint, SystemModel};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Environment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Global environment descriptor: per-agent endpoints, circular obstacles,
/// optional workspace box on position coordinates, and the agent collision
/// radius.
#[derive(Debug, Clone)]
pub struct Environment {
    pub starts: Vec<DVector<f64>>,
    pub goals: Vec<DVector<f64>>,
    pub obstacles: Vec<Obstacle>,
    pub workspace: Option<([f64; 2], [f64; 2])>,
    pub agent_radius: f64,
}

impl Environment {
    pub fn single(start: DVector<f64>, goal: DVector<f64>) -> Self {
        Self {
            starts: vec![start],
            goals: vec![goal],
            obstacles: Vec::new(),
            workspace: None,
            agent_radius: 0.0,
        }
    }

    pub fn agents(&self) -> usize {
        self.starts.len()
    }

    pub fn stacked_start(&self) -> DVector<f64> {
        stack(&self.starts)
    }

    pub fn stacked_goal(&self) -> DVector<f64> {
        stack(&self.goals)
    }

    /// Key-value text form with one `obstacle = cx,cy,r` line per obstacle.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# lagros-env v1\n");
        out.push_str(&format!("agents = {}\n", self.agents()));
        out.push_str(&format!("agent_radius = {}\n", self.agent_radius));
        if let Some((lo, hi)) = &self.workspace {
            out.push_str(&format!("workspace = {},{},{},{}\n", lo[0], lo[1], hi[0], hi[1]));
        }
        for (i, (s, g)) in self.starts.iter().zip(&self.goals).enumerate() {
            out.push_str(&format!("start {} = {}\n", i, join(s.iter())));
            out.push_str(&format!("goal {} = {}\n", i, join(g.iter())));
        }
        for o in &self.obstacles {
            out.push_str(&format!(
                "obstacle = {},{},{}\n",
                o.center[0], o.center[1], o.radius
            ));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: &str| Error::Artifact {
            path: "<environment>".into(),
            detail: d.to_string(),
        };
        let mut agents = 1usize;
        let mut agent_radius = 0.0;
        let mut workspace = None;
        let mut starts: Vec<(usize, DVector<f64>)> = Vec::new();
        let mut goals: Vec<(usize, DVector<f64>)> = Vec::new();
        let mut obstacles = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(&format!("expected key = value, got `{line}`")))?;
            let key = key.trim();
            let nums: Vec<f64> = value
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(&format!("bad number in `{line}`: {e}")))?;
            match key.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["agents"] => agents = nums[0] as usize,
                ["agent_radius"] => agent_radius = nums[0],
                ["workspace"] => workspace = Some(([nums[0], nums[1]], [nums[2], nums[3]])),
                ["obstacle"] => obstacles.push(Obstacle {
                    center: [nums[0], nums[1]],
                    radius: nums[2],
                }),
                ["start", i] => starts.push((
                    i.parse().map_err(|_| bad("bad start index"))?,
                    DVector::from_vec(nums),
                )),
                ["goal", i] => goals.push((
                    i.parse().map_err(|_| bad("bad goal index"))?,
                    DVector::from_vec(nums),
                )),
                _ => return Err(bad(&format!("unknown key `{key}`"))),
            }
        }
        starts.sort_by_key(|(i, _)| *i);
        goals.sort_by_key(|(i, _)| *i);
        if starts.len() != agents || goals.len() != agents {
            return Err(bad("start/goal count does not match agents"));
        }
        Ok(Self {
            starts: starts.into_iter().map(|(_, v)| v).collect(),
            goals: goals.into_iter().map(|(_, v)| v).collect(),
            obstacles,
            workspace,
            agent_radius,
        })
    }
}

fn stack(vs: &[DVector<f64>]) -> DVector<f64> {
    let total: usize = vs.iter().map(|v| v.len()).sum();
    let mut out = DVector::zeros(total);
    let mut at = 0;
    for v in vs {
        out.rows_mut(at, v.len()).copy_from(v);
        at += v.len();
    }
    out
}

fn join<'a>(it: impl Iterator<Item = &'a f64>) -> String {
    it.map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join(",")
}

// ---------------------------------------------------------------------------
// Erosion
// ---------------------------------------------------------------------------

/// Tube-eroded constraint set at time t.
#[derive(Debug, Clone)]
pub struct ErodedSet {
    pub obstacle_radii: Vec<f64>,
    pub workspace: Option<([f64; 2], [f64; 2])>,
    pub min_separation: f64,
}

impl ErodedSet {
    /// Signed margin of a stacked position tuple (one [x,y] per agent);
    /// nonnegative = inside.
    pub fn margin(&self, positions: &[[f64; 2]], env: &Environment) -> f64 {
        let mut m = f64::INFINITY;
        for p in positions {
            for (o, r) in env.obstacles.iter().zip(&self.obstacle_radii) {
                let d = ((p[0] - o.center[0]).powi(2) + (p[1] - o.center[1]).powi(2)).sqrt();
                m = m.min(d - r);
            }
            if let Some((lo, hi)) = &self.workspace {
                m = m.min(p[0] - lo[0]).min(p[1] - lo[1]);
                m = m.min(hi[0] - p[0]).min(hi[1] - p[1]);
            }
        }
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                let d = ((positions[i][0] - positions[j][0]).powi(2)
                    + (positions[i][1] - positions[j][1]).powi(2))
                .sqrt();
                m = m.min(d - self.min_separation);
            }
        }
        m
    }
}

/// Robust admissible set at time t: obstacles inflated by r_ell(t), the box
/// shrunk inward by r_ell(t), pairwise separation raised by 2 r_ell(t).
pub fn erode(env: &Environment, tube: &TubeProfile, t: f64) -> Result<ErodedSet> {
    let r = tube.r_ell(t);
    let workspace = match &env.workspace {
        Some((lo, hi)) => {
            let shrunk = ([lo[0] + r, lo[1] + r], [hi[0] - r, hi[1] - r]);
            if shrunk.0[0] > shrunk.1[0] || shrunk.0[1] > shrunk.1[1] {
                return Err(Error::PlanningInfeasible(format!(
                    "eroded workspace empty at t = {t}: tube radius {r} exceeds the box"
                )));
            }
            Some(shrunk)
        }
        None => None,
    };
    Ok(ErodedSet {
        obstacle_radii: env.obstacles.iter().map(|o| o.radius + r).collect(),
        workspace,
        min_separation: 2.0 * env.agent_radius + 2.0 * r,
    })
}

// ---------------------------------------------------------------------------
// Nominal trajectory
// ---------------------------------------------------------------------------

/// Discretized solution of the tube-eroded optimal control problem, plus a
/// dense resampling used as the tracking target.
#[derive(Debug, Clone)]
pub struct NominalTrajectory {
    pub dt: f64,
    /// Knot states x_d[0..=N].
    pub states: Vec<DVector<f64>>,
    /// Knot inputs u_d[0..N], held over each interval.
    pub inputs: Vec<DVector<f64>>,
    pub env: Environment,
    pub tube: TubeProfile,
    pub cost: f64,
    /// Merit values of the accepted SCP iterations (non-increasing).
    pub merit_history: Vec<f64>,
    dense_dt: f64,
    dense_states: Vec<DVector<f64>>,
}

impl NominalTrajectory {
    pub fn horizon(&self) -> f64 {
        self.dt * self.inputs.len() as f64
    }

    pub fn knots(&self) -> usize {
        self.inputs.len()
    }

    /// Tracking target at continuous time (clamped to the horizon): state by
    /// linear interpolation of the dense resampling, input by zero-order
    /// hold of the knot inputs.
    pub fn sample(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let t = t.clamp(0.0, self.horizon());
        let fid = t / self.dense_dt;
        let i = (fid.floor() as usize).min(self.dense_states.len() - 1);
        let x = if i + 1 < self.dense_states.len() {
            let w = fid - i as f64;
            &self.dense_states[i] * (1.0 - w) + &self.dense_states[i + 1] * w
        } else {
            self.dense_states[i].clone()
        };
        let k = ((t / self.dt).floor() as usize).min(self.inputs.len() - 1);
        (x, self.inputs[k].clone())
    }

    /// Max dynamics defect over knots: ||x[k+1] - Phi(x[k], u[k])||.
    pub fn max_defect(&self, model: &dyn SystemModel) -> f64 {
        let zero = DVector::zeros(model.state_dim());
        (0..self.inputs.len())
            .map(|k| {
                let pred = rk4_step(
                    model,
                    &self.states[k],
                    &self.inputs[k],
                    &zero,
                    k as f64 * self.dt,
                    self.dt,
                );
                (&self.states[k + 1] - pred).norm()
            })
            .fold(0.0f64, f64::max)
    }

    /// Worst violation of the eroded constraints over the knots
    /// (nonnegative = satisfied everywhere).
    pub fn eroded_margin(&self, base_state_dim: usize) -> Result<f64> {
        let mut worst = f64::INFINITY;
        for (k, x) in self.states.iter().enumerate() {
            let t = k as f64 * self.dt;
            let set = erode(&self.env, &self.tube, t)?;
            let positions = agent_positions(x, self.env.agents(), base_state_dim);
            worst = worst.min(set.margin(&positions, &self.env));
        }
        Ok(worst)
    }

    /// CSV export with a header block; parsed back by `from_csv`.
    pub fn to_csv(&self) -> String {
        let n = self.states[0].len();
        let m = self.inputs[0].len();
        let mut out = String::from("# lagros-nominal v1\n");
        out.push_str(&format!("# dt = {}\n", self.dt));
        out.push_str(&format!("# cost = {}\n", self.cost));
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
        for line in self.env.to_text().lines() {
            out.push_str(&format!("#env {line}\n"));
        }
        out.push('k');
        for i in 0..n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 0..m {
            out.push_str(&format!(",u{i}"));
        }
        out.push('\n');
        for k in 0..self.states.len() {
            out.push_str(&format!("{k}"));
            for v in self.states[k].iter() {
                out.push_str(&format!(",{v}"));
            }
            let ku = k.min(self.inputs.len() - 1);
            for v in self.inputs[ku].iter() {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, model: &dyn SystemModel) -> Result<Self> {
        let bad = |d: String| Error::Artifact {
            path: "<nominal>".into(),
            detail: d,
        };
        let mut dt = None;
        let mut cost = 0.0;
        let mut tube = None;
        let mut env_text = String::new();
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        let n = model.state_dim();
        let m = model.input_dim();
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("#env ") {
                env_text.push_str(rest);
                env_text.push('\n');
            } else if let Some(rest) = line.strip_prefix("# dt = ") {
                dt = Some(rest.parse::<f64>().map_err(|e| bad(e.to_string()))?);
            } else if let Some(rest) = line.strip_prefix("# cost = ") {
                cost = rest.parse::<f64>().map_err(|e| bad(e.to_string()))?;
            } else if let Some(rest) = line.strip_prefix("# tube = ") {
                let v: Vec<f64> = rest
                    .split(',')
                    .map(|x| x.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(e.to_string()))?;
                tube = Some(TubeProfile::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6]));
            } else if line.starts_with('#') || line.is_empty() || line.starts_with('k') {
                continue;
            } else {
                let v: Vec<f64> = line
                    .split(',')
                    .skip(1)
                    .map(|x| x.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(e.to_string()))?;
                if v.len() != n + m {
                    return Err(bad(format!("row has {} values, expected {}", v.len(), n + m)));
                }
                states.push(DVector::from_row_slice(&v[..n]));
                inputs.push(DVector::from_row_slice(&v[n..]));
            }
        }
        if states.len() < 2 {
            return Err(bad("fewer than two knots".into()));
        }
        inputs.pop(); // last row repeats the final interval input
        let dt = dt.ok_or_else(|| bad("missing dt".into()))?;
        let tube = tube.ok_or_else(|| bad("missing tube".into()))?;
        let env = Environment::from_text(&env_text)?;
        Ok(Self::assemble(
            model,
            dt,
            states,
            inputs,
            env,
            tube,
            cost,
            Vec::new(),
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: &dyn SystemModel,
        dt: f64,
        states: Vec<DVector<f64>>,
        inputs: Vec<DVector<f64>>,
        env: Environment,
        tube: TubeProfile,
        cost: f64,
        merit_history: Vec<f64>,
    ) -> Self {
        // dense resampling: RK4 substeps inside each knot interval
        let sub = (dt / 0.02).ceil().max(1.0) as usize;
        let dense_dt = dt / sub as f64;
        let zero = DVector::zeros(model.state_dim());
        let mut dense_states = Vec::with_capacity(inputs.len() * sub + 1);
        for k in 0..inputs.len() {
            let mut x = states[k].clone();
            for s in 0..sub {
                dense_states.push(x.clone());
                let t = k as f64 * dt + s as f64 * dense_dt;
                x = rk4_step(model, &x, &inputs[k], &zero, t, dense_dt);
            }
        }
        dense_states.push(states.last().unwrap().clone());
        Self {
            dt,
            states,
            inputs,
            env,
            tube,
            cost,
            merit_history,
            dense_dt,
            dense_states,
        }
    }
}

pub fn agent_positions(x: &DVector<f64>, agents: usize, base_dim: usize) -> Vec<[f64; 2]> {
    (0..agents)
        .map(|i| {
            if base_dim >= 2 && x.len() >= (i + 1) * base_dim {
                [x[i * base_dim], x[i * base_dim + 1]]
            } else {
                [x[0], 0.0]
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Planner options
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PlanOptions {
    pub horizon: f64,
    pub knots: usize,
    /// Effort weight c1 in the objective c1 ||u||^2 + c2 P.
    pub c1: f64,
    /// Weight of the (identically zero by default) performance cost P.
    pub c2: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub max_rounds: usize,
    pub restarts: usize,
    pub seed: u64,
    /// Exact-penalty weight on defects and constraint violations.
    pub penalty: f64,
    /// Whether position constraints (obstacles, workspace, separation) apply.
    pub spatial_constraints: bool,
}

impl PlanOptions {
    pub fn new(horizon: f64, knots: usize) -> Self {
        Self {
            horizon,
            knots,
            c1: 1.0,
            c2: 0.0,
            u_min: -50.0,
            u_max: 50.0,
            max_rounds: 30,
            restarts: 3,
            seed: 0,
            penalty: 1e3,
            spatial_constraints: true,
        }
    }
}

// ---------------------------------------------------------------------------
// SCP planner
// ---------------------------------------------------------------------------

struct Transcription<'a> {
    model: &'a dyn SystemModel,
    env: &'a Environment,
    tube: &'a TubeProfile,
    opts: &'a PlanOptions,
    n: usize,
    m: usize,
    knots: usize,
    dt: f64,
    base_dim: usize,
}

pub fn plan(
    model: &dyn SystemModel,
    env: &Environment,
    tube: &TubeProfile,
    opts: &PlanOptions,
) -> Result<NominalTrajectory> {
    let n = model.state_dim();
    let m = model.input_dim();
    assert_eq!(env.stacked_start().len(), n, "start dimension mismatch");
    let knots = opts.knots;
    let dt = opts.horizon / knots as f64;
    // erosion must be well defined along the whole horizon
    for k in 0..=knots {
        erode(env, tube, k as f64 * dt)?;
    }
    let tr = Transcription {
        model,
        env,
        tube,
        opts,
        n,
        m,
        knots,
        dt,
        base_dim: n / env.agents(),
    };

    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut best: Option<NominalTrajectory> = None;
    let mut last_err = None;
    for restart in 0..opts.restarts.max(1) {
        let init = tr.initial_guess(restart, &mut rng);
        match tr.solve(init) {
            Ok(traj) => {
                if best.as_ref().map_or(true, |b| traj.cost < b.cost) {
                    best = Some(traj);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        last_err.unwrap_or_else(|| Error::PlanningInfeasible("no restart converged".into()))
    })
}

struct Iterate {
    states: Vec<DVector<f64>>,
    inputs: Vec<DVector<f64>>,
}

impl Transcription<'_> {
    fn initial_guess(&self, restart: usize, rng: &mut ChaCha12Rng) -> Iterate {
        let start = self.env.stacked_start();
        let goal = self.env.stacked_goal();
        // straight-line interpolation; later restarts bow the midpoint
        let mid_offset: DVector<f64> = if restart == 0 {
            DVector::zeros(self.n)
        } else {
            DVector::from_fn(self.n, |_, _| rng.random_range(-1.0..1.0))
                * (0.3 * restart as f64)
        };
        let states = (0..=self.knots)
            .map(|k| {
                let s = k as f64 / self.knots as f64;
                let bow = 4.0 * s * (1.0 - s);
                &start * (1.0 - s) + &goal * s + &mid_offset * bow
            })
            .collect();
        let u0 = match self.model.input_constraint() {
            InputConstraint::Nonnegative => 0.1,
            _ => 0.0,
        };
        let inputs = (0..self.knots)
            .map(|_| DVector::from_element(self.m, u0))
            .collect();
        Iterate { states, inputs }
    }

    fn input_bounds(&self) -> (f64, f64) {
        match self.model.input_constraint() {
            InputConstraint::Nonnegative => (0.0, self.opts.u_max),
            InputConstraint::Box { lo, hi } => (lo, hi),
            InputConstraint::None => (self.opts.u_min, self.opts.u_max),
        }
    }

    fn true_cost(&self, it: &Iterate) -> f64 {
        self.opts.c1
            * self.dt
            * it.inputs.iter().map(|u| u.norm_squared()).sum::<f64>()
    }

    /// Exact-penalty merit: cost + penalty * (defects + constraint violations).
    fn merit(&self, it: &Iterate) -> f64 {
        let zero = DVector::zeros(self.n);
        let mut defect = 0.0;
        for k in 0..self.knots {
            let pred = rk4_step(
                self.model,
                &it.states[k],
                &it.inputs[k],
                &zero,
                k as f64 * self.dt,
                self.dt,
            );
            defect += (&it.states[k + 1] - pred).norm();
        }
        let mut violation = 0.0;
        let (u_lo, u_hi) = self.input_bounds();
        for u in &it.inputs {
            for v in u.iter() {
                violation += (u_lo - v).max(0.0) + (v - u_hi).max(0.0);
            }
        }
        if self.opts.spatial_constraints {
            for (k, x) in it.states.iter().enumerate() {
                let t = k as f64 * self.dt;
                let set = erode(self.env, self.tube, t).expect("checked in plan()");
                let margin =
                    set.margin(&agent_positions(x, self.env.agents(), self.base_dim), self.env);
                violation += (-margin).max(0.0);
            }
        }
        self.true_cost(it) + self.opts.penalty * (defect + violation)
    }

    fn solve(&self, mut it: Iterate) -> Result<NominalTrajectory> {
        let debug = std::env::var("LAGROS_SCP_DEBUG").is_ok();
        let mut trust_x: f64 =
            2.0_f64.max(2.0 * (self.env.stacked_goal() - self.env.stacked_start()).amax());
        let mut trust_u: f64 = 0.5 * (self.input_bounds().1 - self.input_bounds().0);
        let trust_x0 = trust_x;
        let trust_u0 = trust_u;
        let mut merit = self.merit(&it);
        let mut merit_history = vec![merit];
        for round in 0..self.opts.max_rounds {
            let candidate = match self.solve_subproblem(&it, trust_x, trust_u) {
                Some(c) => c,
                None => {
                    if debug {
                        eprintln!("scp round {round}: qp failed, trust {trust_u:.2e}");
                    }
                    trust_x *= 0.5;
                    trust_u *= 0.5;
                    if trust_u < 1e-9 {
                        break;
                    }
                    continue;
                }
            };
            let cand_merit = self.merit(&candidate);
            let step: f64 = candidate
                .inputs
                .iter()
                .zip(&it.inputs)
                .map(|(a, b)| (a - b).amax())
                .fold(0.0f64, f64::max);
            if debug {
                eprintln!(
                    "scp round {round}: merit {merit:.6e} -> {cand_merit:.6e}, step {step:.2e}, trust {trust_u:.2e}"
                );
            }
            if cand_merit <= merit + 1e-12 {
                it = candidate;
                merit = cand_merit;
                merit_history.push(merit);
                trust_x = (trust_x * 1.5).min(trust_x0);
                trust_u = (trust_u * 1.5).min(trust_u0);
                if step < 1e-5 {
                    break;
                }
            } else {
                trust_x *= 0.5;
                trust_u *= 0.5;
                if trust_u < 1e-9 {
                    break;
                }
            }
        }
        let traj = NominalTrajectory::assemble(
            self.model,
            self.dt,
            it.states,
            it.inputs,
            self.env.clone(),
            self.tube.clone(),
            0.0,
            merit_history,
        );
        let traj = NominalTrajectory {
            cost: self.true_cost(&Iterate {
                states: traj.states.clone(),
                inputs: traj.inputs.clone(),
            }),
            ..traj
        };
        // feasibility gate
        let defect = traj.max_defect(self.model);
        if defect > 1e-6 {
            return Err(Error::PlanningInfeasible(format!(
                "transcription defect {defect:.3e} above tolerance"
            )));
        }
        if self.opts.spatial_constraints {
            let margin = traj.eroded_margin(self.base_dim)?;
            if margin < -1e-6 {
                return Err(Error::PlanningInfeasible(format!(
                    "eroded constraints violated by {:.3e}",
                    -margin
                )));
            }
        }
        let (u_lo, u_hi) = self.input_bounds();
        for u in &traj.inputs {
            for v in u.iter() {
                if *v < u_lo - 1e-7 || *v > u_hi + 1e-7 {
                    return Err(Error::PlanningInfeasible("input bounds violated".into()));
                }
            }
        }
        Ok(traj)
    }

    /// One convexified subproblem around the iterate: direct transcription
    /// with states and inputs as variables, linearized single-step dynamics
    /// as equalities, supporting-hyperplane obstacle cuts with slacks, and a
    /// trust region on both states and inputs. Sparse rows keep the
    /// interior-point factorization stable even for unstable dynamics.
    fn solve_subproblem(&self, it: &Iterate, trust_x: f64, trust_u: f64) -> Option<Iterate> {
        let (n, m, knots) = (self.n, self.m, self.knots);
        let nx = (knots + 1) * n;
        let nu = knots * m;
        let zero = DVector::zeros(n);

        let agents = self.env.agents();
        let pairs = agents * (agents - 1) / 2;
        let per_knot_slacks = if self.opts.spatial_constraints {
            self.env.obstacles.len() * agents + pairs
        } else {
            0
        };
        let ns = (knots + 1) * per_knot_slacks;
        let nv = nx + nu + ns;
        let xi = |k: usize, j: usize| k * n + j;
        let ui = |k: usize, j: usize| nx + k * m + j;
        let si = |k: usize, j: usize| nx + nu + k * per_knot_slacks + j;

        // objective: c1 dt ||u||^2 + penalty * s + tiny regularization
        let mut p_diag = DVector::from_element(nv, 1e-9);
        let mut q = DVector::zeros(nv);
        for k in 0..knots {
            for j in 0..m {
                p_diag[ui(k, j)] = 2.0 * self.opts.c1 * self.dt;
            }
        }
        for k in 0..=knots {
            for j in 0..per_knot_slacks {
                q[si(k, j)] = self.opts.penalty;
            }
        }

        // equalities: endpoints + linearized dynamics
        let neq = 2 * n + knots * n;
        let mut a_eq = DMatrix::zeros(neq, nv);
        let mut b_eq = DVector::zeros(neq);
        let start = self.env.stacked_start();
        let goal = self.env.stacked_goal();
        for j in 0..n {
            a_eq[(j, xi(0, j))] = 1.0;
            b_eq[j] = start[j];
            a_eq[(n + j, xi(knots, j))] = 1.0;
            b_eq[n + j] = goal[j];
        }
        for k in 0..knots {
            let t = k as f64 * self.dt;
            let phi = rk4_step(self.model, &it.states[k], &it.inputs[k], &zero, t, self.dt);
            let (phi_x, phi_u) = self.step_jacobians(&it.states[k], &it.inputs[k], t);
            let rhs = &phi - &phi_x * &it.states[k] - &phi_u * &it.inputs[k];
            let row0 = 2 * n + k * n;
            for r in 0..n {
                a_eq[(row0 + r, xi(k + 1, r))] = 1.0;
                for c in 0..n {
                    a_eq[(row0 + r, xi(k, c))] = -phi_x[(r, c)];
                }
                for c in 0..m {
                    a_eq[(row0 + r, ui(k, c))] = -phi_u[(r, c)];
                }
                b_eq[row0 + r] = rhs[r];
            }
        }

        // inequalities G z <= h, all rows sparse
        let mut g_rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut h_vals: Vec<f64> = Vec::new();
        let (u_lo, u_hi) = self.input_bounds();
        for k in 0..knots {
            for j in 0..m {
                g_rows.push(vec![(ui(k, j), 1.0)]);
                h_vals.push(u_hi.min(it.inputs[k][j] + trust_u));
                g_rows.push(vec![(ui(k, j), -1.0)]);
                h_vals.push(-(u_lo.max(it.inputs[k][j] - trust_u)));
            }
        }
        for k in 0..=knots {
            for j in 0..n {
                g_rows.push(vec![(xi(k, j), 1.0)]);
                h_vals.push(it.states[k][j] + trust_x);
                g_rows.push(vec![(xi(k, j), -1.0)]);
                h_vals.push(-(it.states[k][j] - trust_x));
            }
        }
        if self.opts.spatial_constraints {
            for k in 0..=knots {
                let t = k as f64 * self.dt;
                let set = erode(self.env, self.tube, t).ok()?;
                let mut slack_idx = 0usize;
                for a in 0..agents {
                    let (px, py) = (xi(k, a * self.base_dim), xi(k, a * self.base_dim + 1));
                    let p_bar = [
                        it.states[k][a * self.base_dim],
                        it.states[k][a * self.base_dim + 1],
                    ];
                    for (o, r_eff) in self.env.obstacles.iter().zip(&set.obstacle_radii) {
                        // supporting hyperplane: nhat . (p - c) + s >= r_eff
                        let mut nx_ = p_bar[0] - o.center[0];
                        let mut ny_ = p_bar[1] - o.center[1];
                        let norm = (nx_ * nx_ + ny_ * ny_).sqrt();
                        if norm < 1e-9 {
                            nx_ = 1.0;
                            ny_ = 0.0;
                        } else {
                            nx_ /= norm;
                            ny_ /= norm;
                        }
                        let s_col = si(k, slack_idx);
                        slack_idx += 1;
                        // -nhat . p - s <= -(r_eff + nhat . c)
                        g_rows.push(vec![(px, -nx_), (py, -ny_), (s_col, -1.0)]);
                        h_vals.push(-(r_eff + nx_ * o.center[0] + ny_ * o.center[1]));
                        g_rows.push(vec![(s_col, -1.0)]);
                        h_vals.push(0.0);
                        g_rows.push(vec![(s_col, 1.0)]);
                        h_vals.push(1e4);
                    }
                    if let Some((lo, hi)) = &set.workspace {
                        g_rows.push(vec![(px, 1.0)]);
                        h_vals.push(hi[0]);
                        g_rows.push(vec![(px, -1.0)]);
                        h_vals.push(-lo[0]);
                        g_rows.push(vec![(py, 1.0)]);
                        h_vals.push(hi[1]);
                        g_rows.push(vec![(py, -1.0)]);
                        h_vals.push(-lo[1]);
                    }
                }
                for a in 0..agents {
                    for b2 in (a + 1)..agents {
                        let (ax, ay) = (xi(k, a * self.base_dim), xi(k, a * self.base_dim + 1));
                        let (bx, by) =
                            (xi(k, b2 * self.base_dim), xi(k, b2 * self.base_dim + 1));
                        let mut dx = it.states[k][a * self.base_dim] - it.states[k][b2 * self.base_dim];
                        let mut dy = it.states[k][a * self.base_dim + 1]
                            - it.states[k][b2 * self.base_dim + 1];
                        let norm = (dx * dx + dy * dy).sqrt();
                        if norm < 1e-9 {
                            dx = 1.0;
                            dy = 0.0;
                        } else {
                            dx /= norm;
                            dy /= norm;
                        }
                        let s_col = si(k, slack_idx);
                        slack_idx += 1;
                        // nhat . (pa - pb) + s >= d_min
                        g_rows.push(vec![
                            (ax, -dx),
                            (ay, -dy),
                            (bx, dx),
                            (by, dy),
                            (s_col, -1.0),
                        ]);
                        h_vals.push(-set.min_separation);
                        g_rows.push(vec![(s_col, -1.0)]);
                        h_vals.push(0.0);
                        g_rows.push(vec![(s_col, 1.0)]);
                        h_vals.push(1e4);
                    }
                }
            }
        }

        // start at the iterate; slacks sized to current violations
        let mut z0 = DVector::zeros(nv);
        for k in 0..=knots {
            for j in 0..n {
                z0[xi(k, j)] = it.states[k][j];
            }
        }
        for k in 0..knots {
            for j in 0..m {
                z0[ui(k, j)] = it.inputs[k][j].clamp(u_lo, u_hi);
            }
        }
        for (row, h) in g_rows.iter().zip(&h_vals) {
            if let Some((col, coef)) = row.iter().find(|(c, _)| *c >= nx + nu) {
                if *coef < 0.0 {
                    let lhs: f64 = row
                        .iter()
                        .filter(|(c, _)| *c < nx + nu)
                        .map(|(c, w)| w * z0[*c])
                        .sum();
                    let need = lhs - h + 1.0;
                    if need > z0[*col] {
                        z0[*col] = need;
                    }
                }
            }
        }

        // knot-interleaved ordering keeps the KKT banded:
        // [x_k | s_k | (start rows) | u_k | dynamics rows k] per knot,
        // goal rows after x_N
        let mut perm = vec![0usize; nv + neq];
        let mut pos = 0usize;
        for k in 0..=knots {
            for j in 0..n {
                perm[xi(k, j)] = pos;
                pos += 1;
            }
            for j in 0..per_knot_slacks {
                perm[si(k, j)] = pos;
                pos += 1;
            }
            if k == 0 {
                for r in 0..n {
                    perm[nv + r] = pos;
                    pos += 1;
                }
            }
            if k < knots {
                for j in 0..m {
                    perm[ui(k, j)] = pos;
                    pos += 1;
                }
                for r in 0..n {
                    perm[nv + 2 * n + k * n + r] = pos;
                    pos += 1;
                }
            } else {
                for r in 0..n {
                    perm[nv + n + r] = pos;
                    pos += 1;
                }
            }
        }
        debug_assert_eq!(pos, nv + neq);

        let sol = solve_qp(&p_diag, &q, &a_eq, &b_eq, &g_rows, &h_vals, z0, &perm)?;
        let states = (0..=knots)
            .map(|k| DVector::from_fn(n, |j, _| sol[xi(k, j)]))
            .collect();
        let inputs = (0..knots)
            .map(|k| DVector::from_fn(m, |j, _| sol[ui(k, j)]))
            .collect();
        Some(Iterate { states, inputs })
    }

    fn step_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        t: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, m) = (self.n, self.m);
        let zero = DVector::zeros(n);
        let mut phi_x = DMatrix::zeros(n, n);
        for j in 0..n {
            let h = 1e-6 * (1.0 + x[j].abs());
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (rk4_step(self.model, &xp, u, &zero, t, self.dt)
                - rk4_step(self.model, &xm, u, &zero, t, self.dt))
                / (2.0 * h);
            phi_x.set_column(j, &col);
        }
        let mut phi_u = DMatrix::zeros(n, m);
        for j in 0..m {
            let h = 1e-6 * (1.0 + u[j].abs());
            let mut up = u.clone();
            let mut um = u.clone();
            up[j] += h;
            um[j] -= h;
            let col = (rk4_step(self.model, x, &up, &zero, t, self.dt)
                - rk4_step(self.model, x, &um, &zero, t, self.dt))
                / (2.0 * h);
            phi_u.set_column(j, &col);
        }
        (phi_x, phi_u)
    }
}

// ---------------------------------------------------------------------------
// QP: diagonal objective, dense equalities, sparse inequality rows
// ---------------------------------------------------------------------------

/// Primal-dual interior-point QP (Mehrotra predictor-corrector) for
/// min 1/2 z^T P z + q^T z  s.t.  A z = b, G z <= h,
/// with diagonal P and sparse inequality rows. The dz block is eliminated so
/// the factorized system stays at (nv + neq). Returns None on numerical
/// failure.
fn solve_qp(
    p_diag: &DVector<f64>,
    q: &DVector<f64>,
    a_eq: &DMatrix<f64>,
    b_eq: &DVector<f64>,
    g_rows: &[Vec<(usize, f64)>],
    h_vals: &[f64],
    z0: DVector<f64>,
    perm: &[usize],
) -> Option<DVector<f64>> {
    let nv = p_diag.len();
    let neq = b_eq.len();
    let ni = g_rows.len();
    // bandwidth of the permuted KKT, fixed across iterations
    let mut bw = 0usize;
    for (i, row) in g_rows.iter().enumerate() {
        let _ = i;
        for (ci, _) in row {
            for (cj, _) in row {
                bw = bw.max(perm[*ci].abs_diff(perm[*cj]));
            }
        }
    }
    for r in 0..neq {
        let pr = perm[nv + r];
        for c in 0..nv {
            if a_eq[(r, c)] != 0.0 {
                bw = bw.max(pr.abs_diff(perm[c]));
            }
        }
    }
    let mut x = z0;
    let mut y = DVector::zeros(neq);
    // slacks from the strictly feasible start
    // slacks are free in the infeasible-start formulation: clamp to stay in
    // the cone and let r_ineq carry the initial mismatch
    let mut s = DVector::from_fn(ni, |i, _| {
        let lhs: f64 = g_rows[i].iter().map(|(c, w)| w * x[*c]).sum();
        (h_vals[i] - lhs).max(1e-3)
    });
    let mut zd = DVector::from_element(ni, 1.0);

    let g_mul = |v: &DVector<f64>| -> DVector<f64> {
        DVector::from_fn(ni, |i, _| g_rows[i].iter().map(|(c, w)| w * v[*c]).sum())
    };
    let gt_mul = |v: &DVector<f64>| -> DVector<f64> {
        let mut out = DVector::zeros(nv);
        for (i, row) in g_rows.iter().enumerate() {
            for (c, w) in row {
                out[*c] += w * v[i];
            }
        }
        out
    };

    let kkt_dim = nv + neq;
    let obj_scale = 1.0 + q.amax();
    for _iter in 0..80 {
        let r_dual = p_diag.component_mul(&x) + q + a_eq.transpose() * &y + gt_mul(&zd);
        let r_eq = a_eq * &x - b_eq;
        let r_ineq = g_mul(&x) + &s - DVector::from_column_slice(h_vals);
        let mu = s.dot(&zd) / ni as f64;
        if mu < 1e-11 * obj_scale
            && r_eq.amax() < 1e-9 * (1.0 + b_eq.amax())
            && r_dual.amax() < 1e-7 * obj_scale
        {
            break;
        }

        // reduced KKT [P + G^T (z/s) G, A^T; A, 0] assembled in the
        // permuted banded layout; quasidefinite regularization makes an
        // unpivoted LDLt stable
        let mut band = BandedKkt::new(kkt_dim, bw, perm.to_vec(), nv);
        for i in 0..nv {
            band.add(i, i, p_diag[i].max(1e-12));
        }
        for (i, row) in g_rows.iter().enumerate() {
            let w = zd[i] / s[i];
            if row.len() == 1 {
                let (c, coef) = row[0];
                band.add(c, c, coef * coef * w);
            } else {
                for (ci, wi) in row {
                    for (cj, wj) in row {
                        if perm[*ci] >= perm[*cj] {
                            band.add(*ci, *cj, wi * wj * w);
                        }
                    }
                }
            }
        }
        for r in 0..neq {
            for c in 0..nv {
                let v = a_eq[(r, c)];
                if v != 0.0 {
                    band.add(nv + r, c, v);
                }
            }
        }
        let factored = band.factor()?;

        // one Newton solve for a given complementarity target
        let solve_dir = |factored: &FactoredKkt,
                         r_comp: &DVector<f64>|
         -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            // dz eliminated: dz = (z/s) (G dx + r_ineq) - r_comp/s
            let mut rhs = DVector::zeros(kkt_dim);
            let correction = DVector::from_fn(ni, |i, _| {
                (zd[i] * r_ineq[i] - r_comp[i]) / s[i]
            });
            let top = -&r_dual - gt_mul(&correction);
            for i in 0..nv {
                rhs[i] = top[i];
            }
            for r in 0..neq {
                rhs[nv + r] = -r_eq[r];
            }
            let sol = factored.solve(&rhs);
            let dx = sol.rows(0, nv).into_owned();
            let dy = sol.rows(nv, neq).into_owned();
            let gdx = g_mul(&dx);
            let dz = DVector::from_fn(ni, |i, _| {
                (zd[i] * (gdx[i] + r_ineq[i]) - r_comp[i]) / s[i]
            });
            let ds = DVector::from_fn(ni, |i, _| -(r_comp[i] + s[i] * dz[i]) / zd[i]);
            Some((dx, dy, ds, dz))
        };

        let step_len = |v: &DVector<f64>, dv: &DVector<f64>| -> f64 {
            let mut a: f64 = 1.0;
            for i in 0..ni {
                if dv[i] < 0.0 {
                    a = a.min(-v[i] / dv[i]);
                }
            }
            a
        };

        // affine (predictor) direction
        let r_comp_aff = DVector::from_fn(ni, |i, _| s[i] * zd[i]);
        let (dx_a, _dy_a, ds_a, dz_a) = solve_dir(&factored, &r_comp_aff)?;
        let alpha_aff = step_len(&s, &ds_a).min(step_len(&zd, &dz_a)).min(1.0);
        let mu_aff = (0..ni)
            .map(|i| (s[i] + alpha_aff * ds_a[i]) * (zd[i] + alpha_aff * dz_a[i]))
            .sum::<f64>()
            / ni as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
        let _ = dx_a;

        // corrector
        let r_comp = DVector::from_fn(ni, |i, _| {
            s[i] * zd[i] + ds_a[i] * dz_a[i] - sigma * mu
        });
        let (dx, dy, ds, dz) = solve_dir(&factored, &r_comp)?;
        let alpha = 0.99 * step_len(&s, &ds).min(step_len(&zd, &dz)).min(1.0 / 0.99);
        if !alpha.is_finite() || alpha <= 1e-13 {
            if std::env::var("LAGROS_QP_DEBUG").is_ok() {
                eprintln!("qp: step collapsed, alpha = {alpha}");
            }
            return None;
        }
        x += &dx * alpha;
        y += &dy * alpha;
        s += &ds * alpha;
        zd += &dz * alpha;
        if s.min() <= 0.0 || zd.min() <= 0.0 {
            return None;
        }
    }
    if (a_eq * &x - b_eq).amax() > 1e-7 {
        if std::env::var("LAGROS_QP_DEBUG").is_ok() {
            eprintln!("qp: equality residual {} too large", (a_eq * &x - b_eq).amax());
        }
        return None;
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::PlanarAgentModel;
    use approx::assert_abs_diff_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn zero_tube() -> TubeProfile {
        TubeProfile::new(0.0, 1.0, 1.0, 0.5, 0.0, 0.0, 0.0)
    }

    fn planar_tube() -> TubeProfile {
        // 0.125 (1 - e^{-0.30 t})
        let chi = (0.125f64 * 0.30 / 0.0375).powi(2);
        TubeProfile::from_chi(chi, 0.30, 1.0, 0.0, 0.0375)
    }

    #[test]
    fn erode_identity_with_zero_tube() {
        let env = Environment {
            starts: vec![dv(&[0.0, 0.0, 0.0, 0.0])],
            goals: vec![dv(&[5.0, 5.0, 0.0, 0.0])],
            obstacles: vec![Obstacle { center: [2.0, 2.0], radius: 0.5 }],
            workspace: Some(([0.0, 0.0], [5.0, 5.0])),
            agent_radius: 0.25,
        };
        let set = erode(&env, &zero_tube(), 3.0).unwrap();
        assert_eq!(set.obstacle_radii[0], 0.5);
        assert_eq!(set.workspace.unwrap(), ([0.0, 0.0], [5.0, 5.0]));
        assert_eq!(set.min_separation, 0.5);
    }

    #[test]
    fn erode_inflates_obstacle_by_published_tube_radius() {
        let env = Environment {
            starts: vec![dv(&[0.0, 0.0, 0.0, 0.0])],
            goals: vec![dv(&[5.0, 5.0, 0.0, 0.0])],
            obstacles: vec![Obstacle { center: [2.0, 2.0], radius: 0.5 }],
            workspace: None,
            agent_radius: 0.0,
        };
        // steady state of the planar tube is 0.125
        let set = erode(&env, &planar_tube(), 1e9).unwrap();
        assert_abs_diff_eq!(set.obstacle_radii[0], 0.625, epsilon = 1e-12);
        // a point at distance 0.6 from the center is feasible in X but not in
        // the eroded set
        let margin_eroded = set.margin(&[[2.0 + 0.6, 2.0]], &env);
        assert!(margin_eroded < 0.0);
        let plain = erode(&env, &zero_tube(), 0.0).unwrap();
        assert!(plain.margin(&[[2.0 + 0.6, 2.0]], &env) > 0.0);
    }

    #[test]
    fn erode_empty_workspace_is_an_error() {
        let env = Environment {
            starts: vec![dv(&[0.0, 0.0, 0.0, 0.0])],
            goals: vec![dv(&[1.0, 1.0, 0.0, 0.0])],
            obstacles: vec![],
            workspace: Some(([0.0, 0.0], [1.0, 1.0])),
            agent_radius: 0.0,
        };
        let tube = TubeProfile::new(0.0, 1.0, 1.0, 0.5, 0.0, 0.0, 0.6);
        assert!(matches!(
            erode(&env, &tube, 10.0),
            Err(Error::PlanningInfeasible(_))
        ));
    }

    #[test]
    fn start_equals_goal_gives_zero_cost() {
        let model = PlanarAgentModel::new(false, 0.0);
        let here = dv(&[1.0, 1.0, 0.0, 0.0]);
        let env = Environment::single(here.clone(), here.clone());
        let mut opts = PlanOptions::new(4.0, 20);
        opts.restarts = 1;
        let traj = plan(&model, &env, &zero_tube(), &opts).unwrap();
        assert!(traj.cost < 1e-12, "cost {}", traj.cost);
        for u in &traj.inputs {
            assert!(u.norm() < 1e-6);
        }
        for x in &traj.states {
            assert!((x - &here).norm() < 1e-6);
        }
    }

    /// Min-effort double integrator with fixed endpoints: the continuous
    /// optimum is u(t) linear in t with a cubic position profile. With the
    /// drag turned off the planar model is a double integrator.
    struct DoubleIntegratorOracle {
        p0: f64,
        pf: f64,
        tf: f64,
    }

    impl DoubleIntegratorOracle {
        /// rest-to-rest minimum-effort position profile
        fn position(&self, t: f64) -> f64 {
            let s = t / self.tf;
            self.p0 + (self.pf - self.p0) * (3.0 * s * s - 2.0 * s * s * s)
        }
    }

    #[test]
    fn double_integrator_matches_cubic_oracle() {
        let mut model = PlanarAgentModel::new(false, 0.0);
        model.drag = 0.0;
        let env = Environment::single(dv(&[0.0, 0.0, 0.0, 0.0]), dv(&[2.0, 0.0, 0.0, 0.0]));
        let mut opts = PlanOptions::new(2.0, 100);
        opts.restarts = 1;
        opts.max_rounds = 40;
        let traj = plan(&model, &env, &zero_tube(), &opts).unwrap();
        let oracle = DoubleIntegratorOracle { p0: 0.0, pf: 2.0, tf: 2.0 };
        for (k, x) in traj.states.iter().enumerate() {
            let t = k as f64 * traj.dt;
            assert!(
                (x[0] - oracle.position(t)).abs() < 1e-4,
                "k = {k}: {} vs {}",
                x[0],
                oracle.position(t)
            );
        }
        assert!(traj.max_defect(&model) <= 1e-6);
    }

    #[test]
    fn obstacle_clearance_respected_along_plan() {
        let model = PlanarAgentModel::new(false, 0.0);
        let env = Environment {
            starts: vec![dv(&[0.0, 2.0, 0.0, 0.0])],
            goals: vec![dv(&[4.0, 2.0, 0.0, 0.0])],
            obstacles: vec![Obstacle { center: [2.0, 2.0], radius: 0.5 }],
            workspace: Some(([-1.0, -1.0], [6.0, 6.0])),
            agent_radius: 0.0,
        };
        let tube = planar_tube();
        let mut opts = PlanOptions::new(10.0, 50);
        opts.seed = 3;
        let traj = plan(&model, &env, &tube, &opts).unwrap();
        // geometric post-check at the knots
        for (k, x) in traj.states.iter().enumerate() {
            let t = k as f64 * traj.dt;
            let clearance = ((x[0] - 2.0).powi(2) + (x[1] - 2.0).powi(2)).sqrt();
            assert!(
                clearance >= 0.5 + tube.r_ell(t) - 1e-6,
                "knot {k}: clearance {clearance}"
            );
        }
        assert!(traj.max_defect(&model) <= 1e-6);
        assert!(traj.eroded_margin(4).unwrap() >= -1e-6);
    }

    #[test]
    fn merit_history_is_non_increasing() {
        let model = PlanarAgentModel::new(false, 0.0);
        let env = Environment {
            starts: vec![dv(&[0.0, 0.0, 0.0, 0.0])],
            goals: vec![dv(&[3.0, 3.0, 0.0, 0.0])],
            obstacles: vec![Obstacle { center: [1.5, 1.5], radius: 0.4 }],
            workspace: None,
            agent_radius: 0.0,
        };
        let mut opts = PlanOptions::new(8.0, 40);
        opts.restarts = 1;
        let traj = plan(&model, &env, &planar_tube(), &opts).unwrap();
        for w in traj.merit_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "merit increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn nonnegative_input_constraint_enforced_at_every_knot() {
        let model = PlanarAgentModel::new(true, 0.0);
        let env = Environment::single(dv(&[0.0, 0.0, 0.0, 0.0]), dv(&[2.0, 1.0, 0.0, 0.0]));
        let mut opts = PlanOptions::new(6.0, 30);
        opts.u_max = 2.0;
        opts.restarts = 1;
        let traj = plan(&model, &env, &zero_tube(), &opts).unwrap();
        for u in &traj.inputs {
            for v in u.iter() {
                assert!(*v >= -1e-9, "negative thruster command {v}");
            }
        }
    }

    #[test]
    fn two_agent_plan_respects_separation() {
        let base = PlanarAgentModel::new(false, 0.0);
        let model = crate::dynamics::MultiAgentModel::new(base, 2);
        // agents swap positions; straight lines would collide in the middle
        let env = Environment {
            starts: vec![dv(&[0.0, 0.0, 0.0, 0.0]), dv(&[4.0, 0.0, 0.0, 0.0])],
            goals: vec![dv(&[4.0, 0.0, 0.0, 0.0]), dv(&[0.0, 0.0, 0.0, 0.0])],
            obstacles: vec![],
            workspace: Some(([-2.0, -3.0], [6.0, 3.0])),
            agent_radius: 0.25,
        };
        let mut opts = PlanOptions::new(12.0, 40);
        opts.seed = 5;
        let traj = plan(&model, &env, &planar_tube(), &opts).unwrap();
        let sep_needed = 0.5 + 2.0 * 0.125;
        for (k, x) in traj.states.iter().enumerate() {
            let t = k as f64 * traj.dt;
            let d = ((x[0] - x[4]).powi(2) + (x[1] - x[5]).powi(2)).sqrt();
            let needed = 0.5 + 2.0 * planar_tube().r_ell(t);
            assert!(d >= needed - 1e-6, "knot {k}: separation {d} < {needed}");
        }
        let _ = sep_needed;
    }

    #[test]
    fn environment_text_roundtrip() {
        let env = Environment {
            starts: vec![dv(&[0.0, 0.25, 0.0, 0.0]), dv(&[4.0, 0.0, 0.0, 0.0])],
            goals: vec![dv(&[4.0, 1.0, 0.0, 0.0]), dv(&[0.5, 0.0, 0.0, 0.0])],
            obstacles: vec![Obstacle { center: [2.0, 0.5], radius: 0.5 }],
            workspace: Some(([0.0, 0.0], [5.0, 5.0])),
            agent_radius: 0.25,
        };
        let text = env.to_text();
        let parsed = Environment::from_text(&text).unwrap();
        assert_eq!(parsed.starts, env.starts);
        assert_eq!(parsed.goals, env.goals);
        assert_eq!(parsed.obstacles.len(), 1);
        assert_eq!(parsed.workspace, env.workspace);
        assert_eq!(parsed.agent_radius, 0.25);
    }

    #[test]
    fn nominal_csv_roundtrip_is_exact() {
        let model = PlanarAgentModel::new(false, 0.0);
        let env = Environment::single(dv(&[0.0, 0.0, 0.0, 0.0]), dv(&[1.0, 1.0, 0.0, 0.0]));
        let mut opts = PlanOptions::new(3.0, 15);
        opts.restarts = 1;
        let traj = plan(&model, &env, &zero_tube(), &opts).unwrap();
        let text = traj.to_csv();
        let parsed = NominalTrajectory::from_csv(&text, &model).unwrap();
        assert_eq!(parsed.states, traj.states);
        assert_eq!(parsed.inputs, traj.inputs);
        assert_eq!(parsed.dt, traj.dt);
        assert_eq!(parsed.cost, traj.cost);
    }

    #[test]
    fn plan_is_deterministic() {
        let model = PlanarAgentModel::new(false, 0.0);
        let env = Environment {
            starts: vec![dv(&[0.0, 0.0, 0.0, 0.0])],
            goals: vec![dv(&[3.0, 2.0, 0.0, 0.0])],
            obstacles: vec![Obstacle { center: [1.5, 1.0], radius: 0.4 }],
            workspace: None,
            agent_radius: 0.0,
        };
        let mut opts = PlanOptions::new(8.0, 30);
        opts.seed = 11;
        let a = plan(&model, &env, &planar_tube(), &opts).unwrap();
        let b = plan(&model, &env, &planar_tube(), &opts).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.inputs, b.inputs);
    }
}

// ---------------------------------------------------------------------------
// Banded quasidefinite KKT
// ---------------------------------------------------------------------------

/// Symmetric banded matrix in a knot-interleaved permutation. With +delta on
/// primal and -delta on dual diagonal entries the matrix is quasidefinite,
/// so the unpivoted banded LDL^T below is stable; one step of iterative
/// refinement against the unregularized operator absorbs the perturbation.
struct BandedKkt {
    dim: usize,
    bw: usize,
    /// position of each original index in the banded ordering
    perm: Vec<usize>,
    /// original index at each banded position
    inv: Vec<usize>,
    /// lower band, row-major: entry (i, i - d) at i * (bw + 1) + d
    band: Vec<f64>,
    nv: usize,
}

struct FactoredKkt {
    dim: usize,
    bw: usize,
    perm: Vec<usize>,
    inv: Vec<usize>,
    /// unregularized band for the refinement residual
    band0: Vec<f64>,
    /// L factors (unit diagonal) in band layout
    low: Vec<f64>,
    d: Vec<f64>,
}

const KKT_REG: f64 = 1e-11;

impl BandedKkt {
    fn new(dim: usize, bw: usize, perm: Vec<usize>, nv: usize) -> Self {
        let mut inv = vec![0usize; dim];
        for (orig, &p) in perm.iter().enumerate() {
            inv[p] = orig;
        }
        Self {
            dim,
            bw,
            perm,
            inv,
            band: vec![0.0; dim * (bw + 1)],
            nv,
        }
    }

    /// Accumulates K[a, b] (original indices; lower entry chosen internally).
    #[inline]
    fn add(&mut self, a: usize, b: usize, v: f64) {
        let (pi, pj) = (self.perm[a], self.perm[b]);
        let (hi, lo) = if pi >= pj { (pi, pj) } else { (pj, pi) };
        debug_assert!(hi - lo <= self.bw);
        self.band[hi * (self.bw + 1) + (hi - lo)] += v;
    }

    fn factor(self) -> Option<FactoredKkt> {
        let (dim, bw) = (self.dim, self.bw);
        let band0 = self.band.clone();
        let mut low = self.band;
        let mut d = vec![0.0; dim];
        let width = bw + 1;
        for i in 0..dim {
            // quasidefinite regularization by original index class
            let reg = if self.inv[i] < self.nv { KKT_REG } else { -KKT_REG };
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut sum = low[i * width + (i - j)];
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    sum -= low[i * width + (i - k)] * low[j * width + (j - k)] * d[k];
                }
                if j < i {
                    if d[j] == 0.0 {
                        return None;
                    }
                    low[i * width + (i - j)] = sum / d[j];
                } else {
                    let pivot = sum + reg;
                    if pivot.abs() < 1e-300 || !pivot.is_finite() {
                        return None;
                    }
                    d[i] = pivot;
                }
            }
        }
        Some(FactoredKkt {
            dim,
            bw,
            perm: self.perm,
            inv: self.inv,
            band0,
            low,
            d,
        })
    }
}

impl FactoredKkt {
    fn solve_permuted(&self, b: &[f64]) -> Vec<f64> {
        let (dim, bw) = (self.dim, self.bw);
        let width = bw + 1;
        let mut w = b.to_vec();
        for i in 0..dim {
            let k0 = i.saturating_sub(bw);
            let mut acc = w[i];
            for k in k0..i {
                acc -= self.low[i * width + (i - k)] * w[k];
            }
            w[i] = acc;
        }
        for i in 0..dim {
            w[i] /= self.d[i];
        }
        for i in (0..dim).rev() {
            let kmax = (i + bw).min(dim - 1);
            let mut acc = w[i];
            for k in (i + 1)..=kmax {
                acc -= self.low[k * width + (k - i)] * w[k];
            }
            w[i] = acc;
        }
        w
    }

    fn apply_permuted(&self, x: &[f64]) -> Vec<f64> {
        let (dim, bw) = (self.dim, self.bw);
        let width = bw + 1;
        let mut out = vec![0.0; dim];
        for i in 0..dim {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let v = self.band0[i * width + (i - j)];
                if v != 0.0 {
                    out[i] += v * x[j];
                    if j != i {
                        out[j] += v * x[i];
                    }
                }
            }
        }
        out
    }

    /// Solves K x = rhs in original index space, with one refinement step
    /// against the unregularized operator.
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut pb = vec![0.0; self.dim];
        for (orig, &p) in self.perm.iter().enumerate() {
            pb[p] = rhs[orig];
        }
        let mut x = self.solve_permuted(&pb);
        let kx = self.apply_permuted(&x);
        let resid: Vec<f64> = pb.iter().zip(&kx).map(|(b, k)| b - k).collect();
        let corr = self.solve_permuted(&resid);
        for i in 0..self.dim {
            x[i] += corr[i];
        }
        DVector::from_fn(self.dim, |orig, _| x[self.perm[orig]])
    }
}
