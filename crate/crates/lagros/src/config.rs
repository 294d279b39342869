//! Run configuration: plain key-value files with `[section]` headers.
//! Every field has a default, unknown sections or keys are rejected, and
//! `section.key=value` override strings (command-line flags) reuse the same
//! assignment path.
//!
//! Grammar:
//!   - `# ...` comment lines and blank lines are ignored
//!   - `[section]` switches the active section
//!   - `key = value` assigns within the active section
//!   - lists are comma separated, booleans are true/false

use crate::{Error, Result};

fn lagros_interp_check(s: &str) -> Option<crate::cvstem::Interpolation> {
    crate::cvstem::Interpolation::parse(s)
}

macro_rules! parse_as {
    ($value:expr, $t:ty, $key:expr) => {
        $value.trim().parse::<$t>().map_err(|_| {
            Error::Config(format!("bad value `{}` for {}", $value.trim(), $key))
        })?
    };
}

fn parse_list(value: &str, key: &str) -> Result<Vec<f64>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad list entry `{v}` for {key}")))
        })
        .collect()
}

fn parse_usize_list(value: &str, key: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad list entry `{v}` for {key}")))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    /// cartpole | planar
    pub kind: String,
    pub agents: usize,
    /// planar only: four nonnegative thrusters instead of two signed inputs
    pub thrusters: bool,
    pub d_bar: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: "cartpole".into(),
            agents: 1,
            thrusters: false,
            d_bar: 0.4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TubeConfig {
    pub alpha: f64,
    pub eps_ell: f64,
    pub d_bar: f64,
    /// 0 = take the model's bound.
    pub b_bar: f64,
    /// Steady-state tube radius; together with alpha it pins the curve
    /// radius_inf * (1 - e^{-alpha t}) used for erosion and sampling.
    pub radius_inf: f64,
}

impl Default for TubeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.60,
            eps_ell: 0.01,
            d_bar: 0.4,
            b_bar: 0.0,
            radius_inf: 3.15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvstemConfig {
    /// Trajectories planned (zero-tube) to seed the metric grid.
    pub grid_trajectories: usize,
    /// Stratified times per trajectory.
    pub grid_times: usize,
    /// Tube-perturbed states per time, in addition to the on-trajectory point.
    pub grid_perturbations: usize,
    /// Cap on the grid perturbation radius.
    pub perturbation_cap: f64,
    pub r_weight: f64,
    pub nu_min: f64,
    pub nu_max: f64,
    pub beta: f64,
    /// Contraction rate used for synthesis; 0 = same as tube.alpha.
    pub alpha: f64,
    /// Metric interpolation: nearest | idw,k,power.
    pub interp: String,
}

impl Default for CvstemConfig {
    fn default() -> Self {
        Self {
            grid_trajectories: 4,
            grid_times: 10,
            grid_perturbations: 2,
            perturbation_cap: 0.6,
            r_weight: 1.0,
            nu_min: 1e-6,
            nu_max: 1e6,
            beta: 0.05,
            alpha: 0.0,
            interp: "idw,4,2".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlannerConfig {
    pub horizon: f64,
    pub knots: usize,
    pub c1: f64,
    pub c2: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub restarts: usize,
    pub max_rounds: usize,
    pub penalty: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 9.0,
            knots: 45,
            c1: 1.0,
            c2: 0.0,
            u_min: -25.0,
            u_max: 25.0,
            restarts: 3,
            max_rounds: 30,
            penalty: 1e3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DemosConfig {
    pub n_envs: usize,
    pub d_per_traj: usize,
    pub workspace_lo: Vec<f64>,
    pub workspace_hi: Vec<f64>,
    pub use_workspace: bool,
    pub start_lo: Vec<f64>,
    pub start_hi: Vec<f64>,
    pub goal_lo: Vec<f64>,
    pub goal_hi: Vec<f64>,
    pub obstacles_min: usize,
    pub obstacles_max: usize,
    pub obstacle_radius: f64,
    pub clearance: f64,
    pub agent_radius: f64,
    pub max_resamples: usize,
    /// Cap on the tube-sampling radius (the ball radius is
    /// min(r_ell(t), radius_cap)); keeps labels inside the region where the
    /// metric was synthesized.
    pub radius_cap: f64,
}

impl Default for DemosConfig {
    fn default() -> Self {
        // cart-pole defaults: random terminal cart position, no obstacles
        Self {
            n_envs: 10,
            d_per_traj: 400,
            workspace_lo: vec![0.0, 0.0],
            workspace_hi: vec![5.0, 5.0],
            use_workspace: false,
            start_lo: vec![0.0, 0.0, 0.0, 0.0],
            start_hi: vec![0.0, 0.0, 0.0, 0.0],
            goal_lo: vec![-2.0, 0.0, 0.0, 0.0],
            goal_hi: vec![2.0, 0.0, 0.0, 0.0],
            obstacles_min: 0,
            obstacles_max: 0,
            obstacle_radius: 0.5,
            clearance: 0.3,
            agent_radius: 0.25,
            max_resamples: 10,
            radius_cap: 0.8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LearnerConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub momentum: f64,
    pub split: f64,
    pub squared_loss: bool,
    /// ReLU on the policy output for nonnegative input channels.
    pub relu_clamp: bool,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100, 100],
            epochs: 60,
            batch: 32,
            lr: 0.02,
            lr_decay: 0.97,
            momentum: 0.9,
            split: 0.9,
            squared_loss: false,
            relu_clamp: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub trials: usize,
    /// Success horizon (>= the nominal horizon).
    pub horizon: f64,
    pub control_dt: f64,
    pub sim_dt: f64,
    pub hold_interval: f64,
    /// Disturbance magnitudes to sweep; empty = derive one point from
    /// d_eps_total.
    pub d_sweep: Vec<f64>,
    /// Target b_bar eps_hat + d_bar; the applied d_bar is the remainder
    /// after the measured learning error (clamped at 0).
    pub d_eps_total: f64,
    pub online_horizon: f64,
    pub online_knots: usize,
    pub observe_radius: f64,
    pub k_nearest: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            horizon: 9.0,
            control_dt: 0.1,
            sim_dt: 1e-3,
            hold_interval: 1.0,
            d_sweep: vec![],
            d_eps_total: 0.75,
            online_horizon: 3.0,
            online_knots: 10,
            observe_radius: 2.0,
            k_nearest: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: usize,
    pub model: ModelConfig,
    pub tube: TubeConfig,
    pub cvstem: CvstemConfig,
    pub planner: PlannerConfig,
    pub demos: DemosConfig,
    pub learner: LearnerConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    Error::Config(format!("line {}: bad section header", lineno + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            cfg.assign(&section, key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Applies one `section.key=value` override (command-line flag form).
    pub fn apply_override(&mut self, spec: &str) -> Result<()> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{spec}` must be section.key=value")))?;
        let (section, key) = path
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override `{spec}` must be section.key=value")))?;
        self.assign(section.trim(), key.trim(), value.trim())
    }

    fn assign(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let full = format!("{section}.{key}");
        match (section, key) {
            ("", "seed") | ("run", "seed") => self.seed = parse_as!(value, u64, full),
            ("", "jobs") | ("run", "jobs") => self.jobs = parse_as!(value, usize, full),
            ("model", "kind") => {
                if value != "cartpole" && value != "planar" {
                    return Err(Error::Config(format!("unknown model kind `{value}`")));
                }
                self.model.kind = value.to_string();
            }
            ("model", "agents") => self.model.agents = parse_as!(value, usize, full),
            ("model", "thrusters") => self.model.thrusters = parse_as!(value, bool, full),
            ("model", "d_bar") => self.model.d_bar = parse_as!(value, f64, full),
            ("tube", "alpha") => self.tube.alpha = parse_as!(value, f64, full),
            ("tube", "eps_ell") => self.tube.eps_ell = parse_as!(value, f64, full),
            ("tube", "d_bar") => self.tube.d_bar = parse_as!(value, f64, full),
            ("tube", "b_bar") => self.tube.b_bar = parse_as!(value, f64, full),
            ("tube", "radius_inf") => self.tube.radius_inf = parse_as!(value, f64, full),
            ("cvstem", "grid_trajectories") => {
                self.cvstem.grid_trajectories = parse_as!(value, usize, full)
            }
            ("cvstem", "grid_times") => self.cvstem.grid_times = parse_as!(value, usize, full),
            ("cvstem", "grid_perturbations") => {
                self.cvstem.grid_perturbations = parse_as!(value, usize, full)
            }
            ("cvstem", "perturbation_cap") => {
                self.cvstem.perturbation_cap = parse_as!(value, f64, full)
            }
            ("cvstem", "r_weight") => self.cvstem.r_weight = parse_as!(value, f64, full),
            ("cvstem", "nu_min") => self.cvstem.nu_min = parse_as!(value, f64, full),
            ("cvstem", "nu_max") => self.cvstem.nu_max = parse_as!(value, f64, full),
            ("cvstem", "beta") => self.cvstem.beta = parse_as!(value, f64, full),
            ("cvstem", "alpha") => self.cvstem.alpha = parse_as!(value, f64, full),
            ("cvstem", "interp") => {
                if lagros_interp_check(value).is_none() {
                    return Err(Error::Config(format!("bad interpolation `{value}`")));
                }
                self.cvstem.interp = value.to_string();
            }
            ("planner", "horizon") => self.planner.horizon = parse_as!(value, f64, full),
            ("planner", "knots") => self.planner.knots = parse_as!(value, usize, full),
            ("planner", "c1") => self.planner.c1 = parse_as!(value, f64, full),
            ("planner", "c2") => self.planner.c2 = parse_as!(value, f64, full),
            ("planner", "u_min") => self.planner.u_min = parse_as!(value, f64, full),
            ("planner", "u_max") => self.planner.u_max = parse_as!(value, f64, full),
            ("planner", "restarts") => self.planner.restarts = parse_as!(value, usize, full),
            ("planner", "max_rounds") => self.planner.max_rounds = parse_as!(value, usize, full),
            ("planner", "penalty") => self.planner.penalty = parse_as!(value, f64, full),
            ("demos", "n_envs") => self.demos.n_envs = parse_as!(value, usize, full),
            ("demos", "d_per_traj") => self.demos.d_per_traj = parse_as!(value, usize, full),
            ("demos", "workspace_lo") => self.demos.workspace_lo = parse_list(value, &full)?,
            ("demos", "workspace_hi") => self.demos.workspace_hi = parse_list(value, &full)?,
            ("demos", "use_workspace") => self.demos.use_workspace = parse_as!(value, bool, full),
            ("demos", "start_lo") => self.demos.start_lo = parse_list(value, &full)?,
            ("demos", "start_hi") => self.demos.start_hi = parse_list(value, &full)?,
            ("demos", "goal_lo") => self.demos.goal_lo = parse_list(value, &full)?,
            ("demos", "goal_hi") => self.demos.goal_hi = parse_list(value, &full)?,
            ("demos", "obstacles_min") => self.demos.obstacles_min = parse_as!(value, usize, full),
            ("demos", "obstacles_max") => self.demos.obstacles_max = parse_as!(value, usize, full),
            ("demos", "obstacle_radius") => {
                self.demos.obstacle_radius = parse_as!(value, f64, full)
            }
            ("demos", "clearance") => self.demos.clearance = parse_as!(value, f64, full),
            ("demos", "agent_radius") => self.demos.agent_radius = parse_as!(value, f64, full),
            ("demos", "max_resamples") => {
                self.demos.max_resamples = parse_as!(value, usize, full)
            }
            ("demos", "radius_cap") => self.demos.radius_cap = parse_as!(value, f64, full),
            ("learner", "hidden") => self.learner.hidden = parse_usize_list(value, &full)?,
            ("learner", "epochs") => self.learner.epochs = parse_as!(value, usize, full),
            ("learner", "batch") => self.learner.batch = parse_as!(value, usize, full),
            ("learner", "lr") => self.learner.lr = parse_as!(value, f64, full),
            ("learner", "lr_decay") => self.learner.lr_decay = parse_as!(value, f64, full),
            ("learner", "momentum") => self.learner.momentum = parse_as!(value, f64, full),
            ("learner", "split") => self.learner.split = parse_as!(value, f64, full),
            ("learner", "squared_loss") => {
                self.learner.squared_loss = parse_as!(value, bool, full)
            }
            ("learner", "relu_clamp") => self.learner.relu_clamp = parse_as!(value, bool, full),
            ("bench", "trials") => self.bench.trials = parse_as!(value, usize, full),
            ("bench", "horizon") => self.bench.horizon = parse_as!(value, f64, full),
            ("bench", "control_dt") => self.bench.control_dt = parse_as!(value, f64, full),
            ("bench", "sim_dt") => self.bench.sim_dt = parse_as!(value, f64, full),
            ("bench", "hold_interval") => self.bench.hold_interval = parse_as!(value, f64, full),
            ("bench", "d_sweep") => self.bench.d_sweep = parse_list(value, &full)?,
            ("bench", "d_eps_total") => self.bench.d_eps_total = parse_as!(value, f64, full),
            ("bench", "online_horizon") => self.bench.online_horizon = parse_as!(value, f64, full),
            ("bench", "online_knots") => self.bench.online_knots = parse_as!(value, usize, full),
            ("bench", "observe_radius") => {
                self.bench.observe_radius = parse_as!(value, f64, full)
            }
            ("bench", "k_nearest") => self.bench.k_nearest = parse_as!(value, usize, full),
            _ => {
                return Err(Error::Config(format!(
                    "unknown configuration key `{full}`"
                )))
            }
        }
        Ok(())
    }

    /// Canonical text form: feeding it back through `parse` reproduces the
    /// configuration; its hash identifies the run.
    pub fn canonical_text(&self) -> String {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let join_usize = |v: &[usize]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "[run]\nseed = {}\njobs = {}\n\n[model]\nkind = {}\nagents = {}\nthrusters = {}\nd_bar = {}\n\n\
             [tube]\nalpha = {}\neps_ell = {}\nd_bar = {}\nb_bar = {}\nradius_inf = {}\n\n\
             [cvstem]\ngrid_trajectories = {}\ngrid_times = {}\ngrid_perturbations = {}\nperturbation_cap = {}\nr_weight = {}\nnu_min = {}\nnu_max = {}\nbeta = {}\nalpha = {}\ninterp = {}\n\n\
             [planner]\nhorizon = {}\nknots = {}\nc1 = {}\nc2 = {}\nu_min = {}\nu_max = {}\nrestarts = {}\nmax_rounds = {}\npenalty = {}\n\n\
             [demos]\nn_envs = {}\nd_per_traj = {}\nworkspace_lo = {}\nworkspace_hi = {}\nuse_workspace = {}\nstart_lo = {}\nstart_hi = {}\ngoal_lo = {}\ngoal_hi = {}\nobstacles_min = {}\nobstacles_max = {}\nobstacle_radius = {}\nclearance = {}\nagent_radius = {}\nmax_resamples = {}\nradius_cap = {}\n\n\
             [learner]\nhidden = {}\nepochs = {}\nbatch = {}\nlr = {}\nlr_decay = {}\nmomentum = {}\nsplit = {}\nsquared_loss = {}\nrelu_clamp = {}\n\n\
             [bench]\ntrials = {}\nhorizon = {}\ncontrol_dt = {}\nsim_dt = {}\nhold_interval = {}\nd_sweep = {}\nd_eps_total = {}\nonline_horizon = {}\nonline_knots = {}\nobserve_radius = {}\nk_nearest = {}\n",
            self.seed,
            self.jobs,
            self.model.kind,
            self.model.agents,
            self.model.thrusters,
            self.model.d_bar,
            self.tube.alpha,
            self.tube.eps_ell,
            self.tube.d_bar,
            self.tube.b_bar,
            self.tube.radius_inf,
            self.cvstem.grid_trajectories,
            self.cvstem.grid_times,
            self.cvstem.grid_perturbations,
            self.cvstem.perturbation_cap,
            self.cvstem.r_weight,
            self.cvstem.nu_min,
            self.cvstem.nu_max,
            self.cvstem.beta,
            self.cvstem.alpha,
            self.cvstem.interp,
            self.planner.horizon,
            self.planner.knots,
            self.planner.c1,
            self.planner.c2,
            self.planner.u_min,
            self.planner.u_max,
            self.planner.restarts,
            self.planner.max_rounds,
            self.planner.penalty,
            self.demos.n_envs,
            self.demos.d_per_traj,
            join(&self.demos.workspace_lo),
            join(&self.demos.workspace_hi),
            self.demos.use_workspace,
            join(&self.demos.start_lo),
            join(&self.demos.start_hi),
            join(&self.demos.goal_lo),
            join(&self.demos.goal_hi),
            self.demos.obstacles_min,
            self.demos.obstacles_max,
            self.demos.obstacle_radius,
            self.demos.clearance,
            self.demos.agent_radius,
            self.demos.max_resamples,
            self.demos.radius_cap,
            join_usize(&self.learner.hidden),
            self.learner.epochs,
            self.learner.batch,
            self.learner.lr,
            self.learner.lr_decay,
            self.learner.momentum,
            self.learner.split,
            self.learner.squared_loss,
            self.learner.relu_clamp,
            self.bench.trials,
            self.bench.horizon,
            self.bench.control_dt,
            self.bench.sim_dt,
            self.bench.hold_interval,
            join(&self.bench.d_sweep),
            self.bench.d_eps_total,
            self.bench.online_horizon,
            self.bench.online_knots,
            self.bench.observe_radius,
            self.bench.k_nearest,
        )
    }
}
