//! Pipeline driver shared by the command-line binary and the integration
//! tests: metric synthesis, planning, demonstration generation, training,
//! rollouts, benchmarking, and bound verification, all file-based and
//! reproducible from (config, seed).

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use lagros::artifact::{read_artifact, sha256_hex, write_artifact, Manifest};
use lagros::bounds::{NaiveBoundParams, TubeProfile};
use lagros::config::RunConfig;
use lagros::cvstem::{self, GridPoint, Interpolation, MetricTable, SynthesisOptions};
use lagros::demos::{self, Dataset, EnvSampler, GenerateOptions};
use lagros::dynamics::{
    CartPoleModel, DisturbanceKind, DisturbanceSpec, MultiAgentModel, PlanarAgentModel,
    SystemModel,
};
use lagros::learner::{self, LabelKind, OutputTransform, Policy, TrainOptions};
use lagros::planner::{plan, Environment, NominalTrajectory, PlanOptions};
use lagros::simbench::{
    benchmark, rollout, BenchReport, BenchmarkInputs, ControlSource, ObserveOptions,
    OnlineMpOptions, PlannerKind, RolloutConfig,
};
use lagros::{Error, Result};

pub const METRIC_FILE: &str = "metric.csv";
pub const NOMINAL_FILE: &str = "nominal.csv";
pub const DATASET_FILE: &str = "dataset.csv";
pub const POLICY_FILE: &str = "policy_lagros.txt";
pub const NAIVE_POLICY_FILE: &str = "policy_naive.txt";
pub const TRAIN_REPORT_FILE: &str = "train_report.txt";
pub const BENCH_REPORT_FILE: &str = "bench_report.csv";
pub const BENCH_TRIALS_FILE: &str = "bench_trials.csv";
pub const BOUND_CURVES_FILE: &str = "bound_curves.csv";
pub const BOUNDS_REPORT_FILE: &str = "bounds_report.txt";

/// Everything a pipeline stage needs: parsed config, its hash, output dir.
pub struct Pipeline {
    pub cfg: RunConfig,
    pub out_dir: PathBuf,
    pub config_hash: String,
}

/// Stacked simulation model plus the per-agent base model.
pub struct Models {
    pub stacked: Box<dyn SystemModel>,
    pub base: Box<dyn SystemModel>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out_dir: &Path) -> Self {
        let config_hash = sha256_hex(cfg.canonical_text().as_bytes());
        Self {
            cfg,
            out_dir: out_dir.to_path_buf(),
            config_hash,
        }
    }

    pub fn models(&self) -> Result<Models> {
        let agents = self.cfg.model.agents.max(1);
        match self.cfg.model.kind.as_str() {
            "cartpole" => {
                if agents != 1 {
                    return Err(Error::Config("cartpole supports a single agent".into()));
                }
                Ok(Models {
                    stacked: Box::new(CartPoleModel::new(self.cfg.model.d_bar)),
                    base: Box::new(CartPoleModel::new(self.cfg.model.d_bar)),
                })
            }
            "planar" => {
                let base = PlanarAgentModel::new(self.cfg.model.thrusters, self.cfg.model.d_bar);
                let stacked: Box<dyn SystemModel> = if agents == 1 {
                    Box::new(base.clone())
                } else {
                    Box::new(MultiAgentModel::new(base.clone(), agents))
                };
                Ok(Models {
                    stacked,
                    base: Box::new(base),
                })
            }
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }

    pub fn b_bar(&self, base: &dyn SystemModel) -> f64 {
        if self.cfg.tube.b_bar > 0.0 {
            self.cfg.tube.b_bar
        } else {
            base.b_bar()
        }
    }

    /// The pinned tube curve radius_inf (1 - e^{-alpha t}): sqrt(chi) is
    /// derived from (radius_inf, alpha, b_bar eps_ell + d_bar).
    pub fn pinned_tube(&self, base: &dyn SystemModel) -> TubeProfile {
        let t = &self.cfg.tube;
        let b_bar = self.b_bar(base);
        let d_eps = b_bar * t.eps_ell + t.d_bar;
        let sqrt_chi = t.radius_inf * t.alpha / d_eps;
        TubeProfile::from_chi(sqrt_chi * sqrt_chi, t.alpha, b_bar, t.eps_ell, t.d_bar)
    }

    pub fn plan_options(&self, seed: u64) -> PlanOptions {
        let p = &self.cfg.planner;
        PlanOptions {
            horizon: p.horizon,
            knots: p.knots,
            c1: p.c1,
            c2: p.c2,
            u_min: p.u_min,
            u_max: p.u_max,
            max_rounds: p.max_rounds,
            restarts: p.restarts,
            seed,
            penalty: p.penalty,
            spatial_constraints: self.cfg.model.kind == "planar",
        }
    }

    pub fn env_sampler(&self) -> EnvSampler {
        let d = &self.cfg.demos;
        EnvSampler {
            agents: self.cfg.model.agents.max(1),
            agent_radius: d.agent_radius,
            workspace: if d.use_workspace {
                Some((
                    [d.workspace_lo[0], d.workspace_lo[1]],
                    [d.workspace_hi[0], d.workspace_hi[1]],
                ))
            } else {
                None
            },
            goal_lo: d.goal_lo.clone(),
            goal_hi: d.goal_hi.clone(),
            start_lo: d.start_lo.clone(),
            start_hi: d.start_hi.clone(),
            obstacle_count: (d.obstacles_min, d.obstacles_max),
            obstacle_radius: d.obstacle_radius,
            clearance: d.clearance,
        }
    }

    pub fn observe_options(&self) -> ObserveOptions {
        ObserveOptions {
            radius: self.cfg.bench.observe_radius,
            k_nearest: self.cfg.bench.k_nearest,
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn finish(&self, manifest: Manifest, command: &str) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        std::fs::write(
            self.path(&format!("{command}.manifest")),
            manifest.to_text(),
        )?;
        Ok(())
    }

    // -----------------------------------------------------------------
    // synthesize-metric
    // -----------------------------------------------------------------

    /// Builds the sample grid from zero-tube plans over randomized
    /// environments, with tube-perturbed companions per stratified time.
    pub fn build_grid(&self, models: &Models) -> Result<Vec<GridPoint>> {
        let n = models.base.state_dim();
        let agents = self.cfg.model.agents.max(1);
        let sampler = self.env_sampler();
        let tube = self.pinned_tube(models.base.as_ref());
        let zero_tube = TubeProfile::new(0.0, 1.0, 1.0, tube.alpha, 0.0, 0.0, 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(self.cfg.seed ^ 0xa11ce);
        let mut grid = Vec::new();
        let mut planned = 0usize;
        let mut attempts = 0usize;
        while planned < self.cfg.cvstem.grid_trajectories {
            attempts += 1;
            if attempts > self.cfg.cvstem.grid_trajectories * self.cfg.demos.max_resamples {
                return Err(Error::PlanningInfeasible(
                    "grid seeding could not find plannable environments".into(),
                ));
            }
            let env = sampler.sample(&mut rng);
            let mut popts = self.plan_options(rng.next_u64());
            let traj = match plan(models.stacked.as_ref(), &env, &zero_tube, &popts) {
                Ok(t) => t,
                Err(_) => {
                    popts.restarts += 2;
                    match plan(models.stacked.as_ref(), &env, &zero_tube, &popts) {
                        Ok(t) => t,
                        Err(_) => continue,
                    }
                }
            };
            planned += 1;
            let horizon = traj.horizon();
            for j in 0..self.cfg.cvstem.grid_times {
                let t = (j as f64 + rng.random_range(0.0..1.0)) * horizon
                    / self.cfg.cvstem.grid_times as f64;
                let (x_d, u_d) = traj.sample(t);
                let radius = tube.r_ell(t).min(self.cvstem_cap());
                for a in 0..agents {
                    let x_d_a = x_d.rows(a * n, n).into_owned();
                    let u_d_a = u_d
                        .rows(a * models.base.input_dim(), models.base.input_dim())
                        .into_owned();
                    grid.push(GridPoint {
                        x: x_d_a.clone(),
                        x_d: x_d_a.clone(),
                        u_d: u_d_a.clone(),
                        t,
                    });
                    for _ in 0..self.cfg.cvstem.grid_perturbations {
                        let x = demos::sample_tube_state(&x_d_a, radius, &mut rng);
                        grid.push(GridPoint {
                            x,
                            x_d: x_d_a.clone(),
                            u_d: u_d_a.clone(),
                            t,
                        });
                    }
                }
            }
        }
        Ok(grid)
    }

    fn cvstem_cap(&self) -> f64 {
        self.cfg.cvstem.perturbation_cap
    }

    pub fn synthesize_metric(&self) -> Result<MetricTable> {
        let models = self.models()?;
        let grid = self.build_grid(&models)?;
        let m = models.base.input_dim();
        let alpha = if self.cfg.cvstem.alpha > 0.0 {
            self.cfg.cvstem.alpha
        } else {
            self.cfg.tube.alpha
        };
        let opts = SynthesisOptions {
            alpha,
            beta: self.cfg.cvstem.beta,
            nu_min: self.cfg.cvstem.nu_min,
            nu_max: self.cfg.cvstem.nu_max,
            chi_max: 1e6,
            r_weight: nalgebra::DMatrix::identity(m, m) * self.cfg.cvstem.r_weight,
            interp: Interpolation::parse(&self.cfg.cvstem.interp)
                .ok_or_else(|| Error::Config("bad cvstem.interp".into()))?,
            time_weight: 1.0,
            sdp: Default::default(),
        };
        let table = cvstem::synthesize(models.base.as_ref(), &grid, &opts)?;
        let mut manifest = Manifest::new("synthesize-metric", &self.config_hash, self.cfg.seed);
        write_artifact(
            &self.out_dir,
            METRIC_FILE,
            &table.to_csv(),
            &self.config_hash,
            self.cfg.seed,
            true,
            &mut manifest,
        )?;
        self.finish(manifest, "synthesize-metric")?;
        Ok(table)
    }

    pub fn load_metric(&self) -> Result<MetricTable> {
        let text = read_artifact(&self.path(METRIC_FILE), "synthesize-metric")?;
        MetricTable::from_csv(&text)
    }

    // -----------------------------------------------------------------
    // plan
    // -----------------------------------------------------------------

    pub fn plan_nominal(&self, env: Option<Environment>) -> Result<NominalTrajectory> {
        let models = self.models()?;
        let tube = self.pinned_tube(models.base.as_ref());
        let mut rng = ChaCha12Rng::seed_from_u64(self.cfg.seed ^ 0x91a2);
        let env = match env {
            Some(e) => e,
            None => self.env_sampler().sample(&mut rng),
        };
        let popts = self.plan_options(rng.next_u64());
        let traj = plan(models.stacked.as_ref(), &env, &tube, &popts)?;
        let mut manifest = Manifest::new("plan", &self.config_hash, self.cfg.seed);
        write_artifact(
            &self.out_dir,
            NOMINAL_FILE,
            &traj.to_csv(),
            &self.config_hash,
            self.cfg.seed,
            true,
            &mut manifest,
        )?;
        self.finish(manifest, "plan")?;
        Ok(traj)
    }

    pub fn load_nominal(&self, models: &Models) -> Result<NominalTrajectory> {
        let text = read_artifact(&self.path(NOMINAL_FILE), "plan")?;
        NominalTrajectory::from_csv(&text, models.stacked.as_ref())
    }

    // -----------------------------------------------------------------
    // gen-demos
    // -----------------------------------------------------------------

    pub fn gen_demos(&self) -> Result<Dataset> {
        let models = self.models()?;
        let table = self.load_metric()?;
        let tube = self.pinned_tube(models.base.as_ref());
        let opts = GenerateOptions {
            n_envs: self.cfg.demos.n_envs,
            d_per_traj: self.cfg.demos.d_per_traj,
            seed: self.cfg.seed ^ 0xde305,
            plan: self.plan_options(0),
            observe: self.observe_options(),
            max_resamples: self.cfg.demos.max_resamples,
            eps_target: self.cfg.tube.eps_ell,
            radius_cap: self.cfg.demos.radius_cap,
        };
        let dataset = demos::generate(
            models.stacked.as_ref(),
            models.base.as_ref(),
            &table,
            &tube,
            &self.env_sampler(),
            &opts,
        )?;
        let mut manifest = Manifest::new("gen-demos", &self.config_hash, self.cfg.seed);
        manifest.record_input(METRIC_FILE, table.to_csv().as_bytes());
        write_artifact(
            &self.out_dir,
            DATASET_FILE,
            &dataset.to_csv(),
            &self.config_hash,
            self.cfg.seed,
            true,
            &mut manifest,
        )?;
        self.finish(manifest, "gen-demos")?;
        Ok(dataset)
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let text = read_artifact(&self.path(DATASET_FILE), "gen-demos")?;
        Dataset::from_csv(&text)
    }

    // -----------------------------------------------------------------
    // train
    // -----------------------------------------------------------------

    pub fn train_options(&self) -> TrainOptions {
        let l = &self.cfg.learner;
        TrainOptions {
            hidden: l.hidden.clone(),
            epochs: l.epochs,
            batch: l.batch,
            lr: l.lr,
            lr_decay: l.lr_decay,
            momentum: l.momentum,
            split: l.split,
            squared_loss: l.squared_loss,
            transform: if l.relu_clamp {
                OutputTransform::ReluClamp
            } else {
                OutputTransform::Identity
            },
            seed: self.cfg.seed ^ 0x7ea1,
        }
    }

    /// Trains both the robust-control imitator and the nominal-input
    /// baseline. Returns (policy, naive policy, eps_hat).
    pub fn train(&self) -> Result<(Policy, Policy, f64)> {
        let dataset = self.load_dataset()?;
        let opts = self.train_options();
        let (policy, report) = learner::train(&dataset, LabelKind::RobustControl, &opts)?;
        let mut naive_opts = opts.clone();
        naive_opts.seed ^= 0xbead;
        let (naive, naive_report) = learner::train(&dataset, LabelKind::NominalInput, &naive_opts)?;
        let mut manifest = Manifest::new("train", &self.config_hash, self.cfg.seed);
        manifest.record_input(DATASET_FILE, dataset.to_csv().as_bytes());
        write_artifact(
            &self.out_dir,
            POLICY_FILE,
            &policy.to_text(),
            &self.config_hash,
            self.cfg.seed,
            true,
            &mut manifest,
        )?;
        write_artifact(
            &self.out_dir,
            NAIVE_POLICY_FILE,
            &naive.to_text(),
            &self.config_hash,
            self.cfg.seed,
            true,
            &mut manifest,
        )?;
        let report_text = format!(
            "eps_hat = {}\ntest_mean = {}\ntest_p95 = {}\ntest_max = {}\nfinal_train_loss = {}\n\
             naive_eps_hat = {}\ntrain_samples = {}\ntest_samples = {}\neps_target = {}\n",
            report.eps_hat,
            report.test_mean,
            report.test_p95,
            report.test_max,
            report.final_train_loss,
            naive_report.eps_hat,
            report.train_samples,
            report.test_samples,
            dataset.eps_target,
        );
        write_artifact(
            &self.out_dir,
            TRAIN_REPORT_FILE,
            &report_text,
            &self.config_hash,
            self.cfg.seed,
            true,
            &mut manifest,
        )?;
        self.finish(manifest, "train")?;
        Ok((policy, naive, report.eps_hat))
    }

    pub fn load_policy(&self, file: &str) -> Result<Policy> {
        let text = read_artifact(&self.path(file), "train")?;
        Policy::from_text(&text)
    }

    pub fn load_eps_hat(&self) -> Result<f64> {
        let text = read_artifact(&self.path(TRAIN_REPORT_FILE), "train")?;
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix("eps_hat = ") {
                return rest.parse::<f64>().map_err(|e| Error::Artifact {
                    path: TRAIN_REPORT_FILE.into(),
                    detail: e.to_string(),
                });
            }
        }
        Err(Error::Artifact {
            path: TRAIN_REPORT_FILE.into(),
            detail: "missing eps_hat".into(),
        })
    }

    // -----------------------------------------------------------------
    // bench environments
    // -----------------------------------------------------------------

    /// Disturbance magnitude for the benchmark: the remainder of the
    /// d_eps budget after the measured learning error.
    pub fn bench_d_bar(&self, b_bar: f64, eps_hat: f64) -> f64 {
        (self.cfg.bench.d_eps_total - b_bar * eps_hat).max(0.0)
    }

    /// Per-trial environments and offline nominals, planned in parallel.
    pub fn bench_envs(
        &self,
        models: &Models,
        trials: usize,
    ) -> Result<(Vec<Environment>, Vec<NominalTrajectory>)> {
        use rayon::prelude::*;
        let sampler = self.env_sampler();
        let tube = self.pinned_tube(models.base.as_ref());
        let mut rng = ChaCha12Rng::seed_from_u64(self.cfg.seed ^ 0xbe7c);
        let mut specs = Vec::with_capacity(trials);
        for _ in 0..trials {
            // pre-draw candidate envs and plan seeds so retries stay
            // deterministic under parallel planning
            let cands: Vec<(Environment, u64)> = (0..self.cfg.demos.max_resamples)
                .map(|_| (sampler.sample(&mut rng), rng.next_u64()))
                .collect();
            specs.push(cands);
        }
        let planned: Vec<Result<(Environment, NominalTrajectory)>> = specs
            .par_iter()
            .map(|cands| {
                for (env, seed) in cands {
                    let mut popts = self.plan_options(*seed);
                    popts.restarts = popts.restarts.max(2);
                    if let Ok(traj) = plan(models.stacked.as_ref(), env, &tube, &popts) {
                        return Ok((env.clone(), traj));
                    }
                }
                Err(Error::PlanningInfeasible(
                    "no plannable benchmark environment".into(),
                ))
            })
            .collect();
        let mut envs = Vec::with_capacity(trials);
        let mut nominals = Vec::with_capacity(trials);
        for r in planned {
            let (e, t) = r?;
            envs.push(e);
            nominals.push(t);
        }
        Ok((envs, nominals))
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            sim_dt: self.cfg.bench.sim_dt,
            control_dt: self.cfg.bench.control_dt,
            horizon: self.cfg.bench.horizon,
            nominal_horizon: self.cfg.planner.horizon,
            blowup: 1e6,
            u_sat: self.cfg.planner.u_max.abs().max(self.cfg.planner.u_min.abs()),
        }
    }

    pub fn online_mp_options(&self) -> OnlineMpOptions {
        let mut opts = OnlineMpOptions::new(self.cfg.bench.online_horizon, self.cfg.bench.online_knots);
        opts.plan.u_min = self.cfg.planner.u_min;
        opts.plan.u_max = self.cfg.planner.u_max;
        opts.plan.spatial_constraints = self.cfg.model.kind == "planar";
        opts
    }

    // -----------------------------------------------------------------
    // rollout command
    // -----------------------------------------------------------------

    /// One closed-loop rollout with the chosen source against the stored
    /// nominal. Writes the trajectory and a tube report.
    pub fn run_rollout(&self, source_name: &str) -> Result<f64> {
        let models = self.models()?;
        let table = self.load_metric()?;
        let nominal = self.load_nominal(&models)?;
        let eps_hat = match source_name {
            "expert" => 0.0,
            _ => self.load_eps_hat()?,
        };
        let b_bar = self.b_bar(models.base.as_ref());
        let tube = self.pinned_tube(models.base.as_ref());
        let policy;
        let naive;
        let mut source = match source_name {
            "expert" => ControlSource::Expert {
                table: &table,
                nominal: &nominal,
            },
            "lagros" => {
                policy = self.load_policy(POLICY_FILE)?;
                ControlSource::Policy {
                    policy: &policy,
                    observe: self.observe_options(),
                }
            }
            "naive" => {
                naive = self.load_policy(NAIVE_POLICY_FILE)?;
                ControlSource::Policy {
                    policy: &naive,
                    observe: self.observe_options(),
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown rollout source `{other}` (expert | lagros | naive)"
                )))
            }
        };
        let d_bar = if self.cfg.bench.d_sweep.is_empty() {
            self.bench_d_bar(b_bar, eps_hat)
        } else {
            self.cfg.bench.d_sweep[0]
        };
        let disturbance = DisturbanceSpec {
            kind: DisturbanceKind::PiecewiseRandom,
            magnitude: d_bar,
            hold_interval: self.cfg.bench.hold_interval,
            seed: self.cfg.seed ^ 0x5011,
            dim: models.stacked.state_dim(),
        };
        let result = rollout(
            models.stacked.as_ref(),
            models.base.as_ref(),
            &nominal.env.clone(),
            &mut source,
            Some(&nominal),
            &tube,
            &disturbance,
            &self.rollout_config(),
        )?;
        let mut manifest = Manifest::new("rollout", &self.config_hash, self.cfg.seed);
        let traj = lagros::dynamics::Trajectory {
            times: result.times.clone(),
            states: result.states.clone(),
            inputs: result.inputs.clone(),
            disturbances: Vec::new(),
        };
        write_artifact(
            &self.out_dir,
            &format!("rollout_{source_name}.csv"),
            &traj.to_csv(),
            &self.config_hash,
            self.cfg.seed,
            true,
            &mut manifest,
        )?;
        let report = result.tube_report.as_ref().expect("nominal supplied");
        let summary = format!(
            "source = {source_name}\nsuccess = {}\neffort = {}\nmax_violation = {}\ninside_fraction = {}\nmax_error = {}\nd_bar = {d_bar}\n",
            result.success, result.effort, report.max_violation, report.inside_fraction, report.max_error,
        );
        write_artifact(
            &self.out_dir,
            &format!("rollout_{source_name}_report.txt"),
            &summary,
            &self.config_hash,
            self.cfg.seed,
            true,
            &mut manifest,
        )?;
        self.finish(manifest, "rollout")?;
        Ok(report.max_violation)
    }

    // -----------------------------------------------------------------
    // bench command
    // -----------------------------------------------------------------

    pub fn run_bench(&self, planners: &[PlannerKind]) -> Result<BenchReport> {
        let models = self.models()?;
        let table = self.load_metric()?;
        let lagros_policy = if planners.contains(&PlannerKind::LagRos) {
            Some(self.load_policy(POLICY_FILE)?)
        } else {
            None
        };
        let naive_policy = if planners.contains(&PlannerKind::NaivePolicy) {
            Some(self.load_policy(NAIVE_POLICY_FILE)?)
        } else {
            None
        };
        let eps_hat = if lagros_policy.is_some() || naive_policy.is_some() {
            self.load_eps_hat()?
        } else {
            0.0
        };
        let b_bar = self.b_bar(models.base.as_ref());
        let tube = self.pinned_tube(models.base.as_ref());
        let (envs, nominals) = self.bench_envs(&models, self.cfg.bench.trials)?;
        let d_bars = if self.cfg.bench.d_sweep.is_empty() {
            vec![self.bench_d_bar(b_bar, eps_hat)]
        } else {
            self.cfg.bench.d_sweep.clone()
        };
        let inputs = BenchmarkInputs {
            model: models.stacked.as_ref(),
            base_model: models.base.as_ref(),
            table: &table,
            tube: &tube,
            lagros_policy: lagros_policy.as_ref(),
            naive_policy: naive_policy.as_ref(),
            online_mp: Some(self.online_mp_options()),
            observe: self.observe_options(),
            envs: &envs,
            nominals: &nominals,
        };
        let report = benchmark(
            &inputs,
            planners,
            &d_bars,
            &self.rollout_config(),
            self.cfg.seed ^ 0xbe9c,
        )?;
        let mut manifest = Manifest::new("bench", &self.config_hash, self.cfg.seed);
        manifest.record_input(METRIC_FILE, table.to_csv().as_bytes());
        // wall-clock columns make the full report non-deterministic; the
        // per-trial file carries the reproducible numbers
        write_artifact(
            &self.out_dir,
            BENCH_REPORT_FILE,
            &report.to_csv(),
            &self.config_hash,
            self.cfg.seed,
            false,
            &mut manifest,
        )?;
        write_artifact(
            &self.out_dir,
            BENCH_TRIALS_FILE,
            &report.trials_csv(),
            &self.config_hash,
            self.cfg.seed,
            true,
            &mut manifest,
        )?;
        self.finish(manifest, "bench")?;
        Ok(report)
    }

    // -----------------------------------------------------------------
    // verify-bounds command
    // -----------------------------------------------------------------

    /// Re-checks the tube on a stored rollout and exports bound curves.
    pub fn verify_bounds(&self, source_name: &str) -> Result<f64> {
        let models = self.models()?;
        let nominal = self.load_nominal(&models)?;
        let tube = self.pinned_tube(models.base.as_ref());
        let roll_path = self.path(&format!("rollout_{source_name}.csv"));
        let text = read_artifact(&roll_path, "rollout")?;
        let n = models.stacked.state_dim();
        let mut times = Vec::new();
        let mut states = Vec::new();
        for line in text.lines() {
            if line.starts_with('#') || line.starts_with('t') || line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Artifact {
                    path: roll_path.display().to_string(),
                    detail: e.to_string(),
                })?;
            times.push(vals[0]);
            states.push(DVector::from_row_slice(&vals[1..1 + n]));
        }
        let nominal_states: Vec<DVector<f64>> = times.iter().map(|t| nominal.sample(*t).0).collect();
        let traj = lagros::dynamics::Trajectory {
            times,
            states,
            inputs: Vec::new(),
            disturbances: Vec::new(),
        };
        let report = lagros::bounds::verify_tube(&traj, &nominal_states, &tube);
        // diverging-envelope parameters from the closed-loop Lipschitz
        // estimate over the operating region
        let naive = NaiveBoundParams {
            e0: 0.0,
            lipschitz: lagros::bounds::estimate_lipschitz(
                models.base.as_ref(),
                &|_x| DVector::zeros(models.base.input_dim()),
                models.base.operating_region(),
                2000,
                1.2,
                self.cfg.seed ^ 0x11f,
            ),
            b_bar: self.b_bar(models.base.as_ref()),
            eps_ell: self.cfg.tube.eps_ell,
            d_bar: self.cfg.tube.d_bar,
        };
        let mut manifest = Manifest::new("verify-bounds", &self.config_hash, self.cfg.seed);
        write_artifact(
            &self.out_dir,
            BOUND_CURVES_FILE,
            &tube.curve_csv(Some(&naive), self.cfg.bench.horizon, 0.05),
            &self.config_hash,
            self.cfg.seed,
            true,
            &mut manifest,
        )?;
        let summary = format!(
            "source = {source_name}\nmax_violation = {}\ninside_fraction = {}\nfirst_exit = {:?}\nmax_error = {}\nviolations = {}\n",
            report.max_violation,
            report.inside_fraction,
            report.first_exit_time,
            report.max_error,
            if report.max_violation > 0.0 { 1 } else { 0 },
        );
        write_artifact(
            &self.out_dir,
            BOUNDS_REPORT_FILE,
            &summary,
            &self.config_hash,
            self.cfg.seed,
            true,
            &mut manifest,
        )?;
        self.finish(manifest, "verify-bounds")?;
        Ok(report.max_violation)
    }
}

/// Reads config text from a file (or defaults when None), applies overrides
/// and the LAGROS_SEED environment variable.
pub fn load_config(
    config_path: Option<&Path>,
    overrides: &[String],
    seed_flag: Option<u64>,
    jobs_flag: Option<usize>,
) -> Result<RunConfig> {
    let mut cfg = match config_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!(
                "cannot read config {}: {e}",
                p.display()
            )))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    for o in overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = seed_flag {
        cfg.seed = seed;
    }
    if let Ok(env_seed) = std::env::var("LAGROS_SEED") {
        cfg.seed = env_seed
            .parse::<u64>()
            .map_err(|_| Error::Config(format!("bad LAGROS_SEED `{env_seed}`")))?;
    }
    if let Some(jobs) = jobs_flag {
        cfg.jobs = jobs;
    }
    Ok(cfg)
}

/// Configures the global worker pool; call once at startup.
pub fn configure_jobs(jobs: usize) {
    if jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
}
