//! Control-affine system models, state-dependent-coefficient factorization,
//! fixed-step integration, and bounded-disturbance generation.
//!
//! All systems have the form `xdot = f(x,t) + B(x,t) u + d(x,t)` with
//! `sup ||d|| = d_bar` and `sup ||B|| = b_bar` over the declared operating
//! region.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::{Error, Result};

/// Per-channel input constraint handled at the planning / policy-output
/// level, never inside the tracking controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputConstraint {
    None,
    Nonnegative,
    Box { lo: f64, hi: f64 },
}

/// Axis-aligned operating region; used to validate `b_bar` by dense sampling
/// and to bound Lipschitz-estimate sampling.
#[derive(Debug, Clone)]
pub struct Region {
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

impl Region {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        Self {
            lo: DVector::from_vec(lo),
            hi: DVector::from_vec(hi),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_fn(self.lo.len(), |i, _| {
            rng.random_range(self.lo[i]..=self.hi[i])
        })
    }

    pub fn clamp(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.lo.len(), |i, _| x[i].clamp(self.lo[i], self.hi[i]))
    }
}

/// Control-affine dynamics bundle.
pub trait SystemModel: Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    /// Drift term f(x, t).
    fn drift(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;
    /// Input matrix B(x, t).
    fn input_matrix(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64>;
    fn input_constraint(&self) -> InputConstraint;
    /// Upper bound on the induced 2-norm of B over the operating region.
    fn b_bar(&self) -> f64;
    /// Disturbance bound sup ||d||.
    fn d_bar(&self) -> f64;
    fn operating_region(&self) -> &Region;
    /// Indices of position coordinates (workspace constraints act on these).
    fn position_indices(&self) -> Vec<usize> {
        vec![]
    }
}

/// Checked drift evaluation for the public API surface.
pub fn eval_f(model: &dyn SystemModel, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    if !x.iter().all(|v| v.is_finite()) || !t.is_finite() {
        return Err(Error::NonFinite("eval_f input"));
    }
    if x.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "state has length {}, model {} expects {}",
            x.len(),
            model.name(),
            model.state_dim()
        )));
    }
    let f = model.drift(x, t);
    if !f.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("eval_f output"));
    }
    Ok(f)
}

/// Checked input-matrix evaluation.
pub fn eval_b(model: &dyn SystemModel, x: &DVector<f64>, t: f64) -> Result<DMatrix<f64>> {
    if !x.iter().all(|v| v.is_finite()) || !t.is_finite() {
        return Err(Error::NonFinite("eval_b input"));
    }
    Ok(model.input_matrix(x, t))
}

/// Validates that `b_bar` dominates ||B(x,t)|| on a dense sample of the
/// operating region. Returns the largest observed norm.
pub fn validate_b_bar(model: &dyn SystemModel, samples: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let region = model.operating_region();
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = region.sample(&mut rng);
        let b = model.input_matrix(&x, rng.random_range(0.0..10.0));
        let norm = induced_2_norm(&b);
        worst = worst.max(norm);
        if norm > model.b_bar() {
            return Err(Error::Config(format!(
                "b_bar = {} violated: ||B|| = {} at x = {:?}",
                model.b_bar(),
                norm,
                x.as_slice()
            )));
        }
    }
    Ok(worst)
}

pub(crate) fn induced_2_norm(m: &DMatrix<f64>) -> f64 {
    // largest singular value via the symmetric eigremainder of M^T M
    let gram = m.transpose() * m;
    let eig = gram.symmetric_eigen();
    eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b)).sqrt()
}

// ---------------------------------------------------------------------------
// Cart-pole
// ---------------------------------------------------------------------------

/// Friction cart-pole with state x = [p, theta, pdot, thetadot] and a single
/// horizontal force input on the cart. Viscous track friction `mu_c pdot`,
/// pivot friction `mu_p thetadot / (m l)`, pole modeled as a rod about the
/// pivot (the 4/3 factor). theta = 0 is upright.
#[derive(Debug, Clone)]
pub struct CartPoleModel {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub mu_cart: f64,
    pub mu_pole: f64,
    pub half_length: f64,
    pub d_bar: f64,
    region: Region,
}

impl CartPoleModel {
    pub fn new(d_bar: f64) -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            mu_cart: 0.5,
            mu_pole: 0.002,
            half_length: 0.5,
            d_bar,
            region: Region::new(
                vec![-6.0, -std::f64::consts::PI, -8.0, -8.0],
                vec![6.0, std::f64::consts::PI, 8.0, 8.0],
            ),
        }
    }

    /// Frictionless variant; conserves the pendulum-cart energy.
    pub fn frictionless(mut self) -> Self {
        self.mu_cart = 0.0;
        self.mu_pole = 0.0;
        self
    }

    fn total_mass(&self) -> f64 {
        self.cart_mass + self.pole_mass
    }

    fn denom(&self, theta: f64) -> f64 {
        self.half_length * (4.0 / 3.0 - self.pole_mass * theta.cos().powi(2) / self.total_mass())
    }

    /// Pendulum-cart mechanical energy (meaningful for the frictionless
    /// variant, where it is conserved under u = 0).
    pub fn energy(&self, x: &DVector<f64>) -> f64 {
        let (th, pd, thd) = (x[1], x[2], x[3]);
        let (m, l) = (self.pole_mass, self.half_length);
        0.5 * self.total_mass() * pd * pd
            + m * l * pd * thd * th.cos()
            + 0.5 * (4.0 / 3.0) * m * l * l * thd * thd
            + m * self.gravity * l * th.cos()
    }
}

impl SystemModel for CartPoleModel {
    fn name(&self) -> &'static str {
        "cartpole"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn drift(&self, x: &DVector<f64>, _t: f64) -> DVector<f64> {
        let (th, pd, thd) = (x[1], x[2], x[3]);
        let (g, m, l) = (self.gravity, self.pole_mass, self.half_length);
        let mt = self.total_mass();
        let thdd = (g * th.sin()
            + th.cos() * ((-m * l * thd * thd * th.sin() + self.mu_cart * pd) / mt)
            - self.mu_pole * thd / (m * l))
            / self.denom(th);
        let pdd = (m * l * (thd * thd * th.sin() - thdd * th.cos()) - self.mu_cart * pd) / mt;
        DVector::from_vec(vec![pd, thd, pdd, thdd])
    }

    fn input_matrix(&self, x: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        let th = x[1];
        let mt = self.total_mass();
        let d = self.denom(th);
        let b_th = -th.cos() / (mt * d);
        let b_p = (1.0 + self.pole_mass * self.half_length * th.cos().powi(2) / (mt * d)) / mt;
        DMatrix::from_column_slice(4, 1, &[0.0, 0.0, b_p, b_th])
    }

    fn input_constraint(&self) -> InputConstraint {
        InputConstraint::None
    }

    fn b_bar(&self) -> f64 {
        // sup over theta of ||B|| is 1.75881 (attained at cos^2 = 1)
        1.759
    }

    fn d_bar(&self) -> f64 {
        self.d_bar
    }

    fn operating_region(&self) -> &Region {
        &self.region
    }

    fn position_indices(&self) -> Vec<usize> {
        vec![0]
    }
}

// ---------------------------------------------------------------------------
// Planar agent
// ---------------------------------------------------------------------------

/// Unit-mass planar point robot with state [px, py, vx, vy] and quadratic
/// drag -c ||v|| v, all parameters 1. With `thrusters`, the four inputs are
/// nonnegative thrust magnitudes along +x, -x, +y, -y; otherwise the two
/// inputs are signed accelerations.
#[derive(Debug, Clone)]
pub struct PlanarAgentModel {
    pub drag: f64,
    pub thrusters: bool,
    pub d_bar: f64,
    region: Region,
}

impl PlanarAgentModel {
    pub fn new(thrusters: bool, d_bar: f64) -> Self {
        Self {
            drag: 1.0,
            thrusters,
            d_bar,
            region: Region::new(vec![-1.0, -1.0, -2.0, -2.0], vec![6.0, 6.0, 2.0, 2.0]),
        }
    }
}

impl SystemModel for PlanarAgentModel {
    fn name(&self) -> &'static str {
        "planar"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        if self.thrusters {
            4
        } else {
            2
        }
    }

    fn drift(&self, x: &DVector<f64>, _t: f64) -> DVector<f64> {
        let (vx, vy) = (x[2], x[3]);
        let speed = (vx * vx + vy * vy).sqrt();
        DVector::from_vec(vec![vx, vy, -self.drag * speed * vx, -self.drag * speed * vy])
    }

    fn input_matrix(&self, _x: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        if self.thrusters {
            DMatrix::from_row_slice(
                4,
                4,
                &[
                    0.0, 0.0, 0.0, 0.0, //
                    0.0, 0.0, 0.0, 0.0, //
                    1.0, -1.0, 0.0, 0.0, //
                    0.0, 0.0, 1.0, -1.0,
                ],
            )
        } else {
            DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
        }
    }

    fn input_constraint(&self) -> InputConstraint {
        if self.thrusters {
            InputConstraint::Nonnegative
        } else {
            InputConstraint::None
        }
    }

    fn b_bar(&self) -> f64 {
        if self.thrusters {
            std::f64::consts::SQRT_2 + 1e-12
        } else {
            1.0
        }
    }

    fn d_bar(&self) -> f64 {
        self.d_bar
    }

    fn operating_region(&self) -> &Region {
        &self.region
    }

    fn position_indices(&self) -> Vec<usize> {
        vec![0, 1]
    }
}

// ---------------------------------------------------------------------------
// Linear model (tests and bound oracles)
// ---------------------------------------------------------------------------

/// xdot = F x + G u. Used by analytic oracles.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub f_mat: DMatrix<f64>,
    pub g_mat: DMatrix<f64>,
    pub d_bar: f64,
    region: Region,
}

impl LinearModel {
    pub fn new(f_mat: DMatrix<f64>, g_mat: DMatrix<f64>, d_bar: f64) -> Self {
        let n = f_mat.nrows();
        Self {
            f_mat,
            g_mat,
            d_bar,
            region: Region::new(vec![-10.0; n], vec![10.0; n]),
        }
    }
}

impl SystemModel for LinearModel {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn state_dim(&self) -> usize {
        self.f_mat.nrows()
    }

    fn input_dim(&self) -> usize {
        self.g_mat.ncols()
    }

    fn drift(&self, x: &DVector<f64>, _t: f64) -> DVector<f64> {
        &self.f_mat * x
    }

    fn input_matrix(&self, _x: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        self.g_mat.clone()
    }

    fn input_constraint(&self) -> InputConstraint {
        InputConstraint::None
    }

    fn b_bar(&self) -> f64 {
        induced_2_norm(&self.g_mat) + 1e-9
    }

    fn d_bar(&self) -> f64 {
        self.d_bar
    }

    fn operating_region(&self) -> &Region {
        &self.region
    }
}

// ---------------------------------------------------------------------------
// Multi-agent stack
// ---------------------------------------------------------------------------

/// k independent copies of a base model stacked block-diagonally. Couplings
/// (separation constraints) enter through the planner, not the dynamics.
pub struct MultiAgentModel<M: SystemModel + Clone> {
    pub base: M,
    pub agents: usize,
    region: Region,
}

impl<M: SystemModel + Clone> MultiAgentModel<M> {
    pub fn new(base: M, agents: usize) -> Self {
        let r = base.operating_region();
        let lo: Vec<f64> = (0..agents).flat_map(|_| r.lo.iter().copied()).collect();
        let hi: Vec<f64> = (0..agents).flat_map(|_| r.hi.iter().copied()).collect();
        Self {
            base,
            agents,
            region: Region::new(lo, hi),
        }
    }

    pub fn agent_state<'a>(&self, x: &'a DVector<f64>, i: usize) -> DVector<f64> {
        let n = self.base.state_dim();
        x.rows(i * n, n).into_owned()
    }
}

impl<M: SystemModel + Clone> SystemModel for MultiAgentModel<M> {
    fn name(&self) -> &'static str {
        "multi-agent"
    }

    fn state_dim(&self) -> usize {
        self.base.state_dim() * self.agents
    }

    fn input_dim(&self) -> usize {
        self.base.input_dim() * self.agents
    }

    fn drift(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        let n = self.base.state_dim();
        let mut out = DVector::zeros(self.state_dim());
        for i in 0..self.agents {
            let fi = self.base.drift(&x.rows(i * n, n).into_owned(), t);
            out.rows_mut(i * n, n).copy_from(&fi);
        }
        out
    }

    fn input_matrix(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64> {
        let (n, m) = (self.base.state_dim(), self.base.input_dim());
        let mut out = DMatrix::zeros(self.state_dim(), self.input_dim());
        for i in 0..self.agents {
            let bi = self.base.input_matrix(&x.rows(i * n, n).into_owned(), t);
            out.view_mut((i * n, i * m), (n, m)).copy_from(&bi);
        }
        out
    }

    fn input_constraint(&self) -> InputConstraint {
        self.base.input_constraint()
    }

    fn b_bar(&self) -> f64 {
        self.base.b_bar()
    }

    fn d_bar(&self) -> f64 {
        self.base.d_bar()
    }

    fn operating_region(&self) -> &Region {
        &self.region
    }

    fn position_indices(&self) -> Vec<usize> {
        let n = self.base.state_dim();
        (0..self.agents)
            .flat_map(|i| self.base.position_indices().into_iter().map(move |p| i * n + p))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// SDC factorization
// ---------------------------------------------------------------------------

/// A(x, x_d, u_d, t) with A (x - x_d) = f(x) + B(x) u_d - f(x_d) - B(x_d) u_d,
/// computed as the line integral of the Jacobian of g(z) = f(z) + B(z) u_d
/// along the chord from x_d to x. Adaptive composite 8-point Gauss-Legendre
/// in the chord parameter; Jacobians by central differences.
pub fn sdc_factorize(
    model: &dyn SystemModel,
    x: &DVector<f64>,
    x_d: &DVector<f64>,
    u_d: &DVector<f64>,
    t: f64,
) -> Result<DMatrix<f64>> {
    for (label, v) in [("x", x), ("x_d", x_d), ("u_d", u_d)] {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(Error::NonFinite(match label {
                "x" => "sdc x",
                "x_d" => "sdc x_d",
                _ => "sdc u_d",
            }));
        }
    }
    let n = model.state_dim();
    let jac_at = |c: f64| -> DMatrix<f64> {
        let z = x_d + (x - x_d) * c;
        closed_loop_jacobian(model, &z, u_d, t)
    };
    let delta = x - x_d;
    if delta.norm() == 0.0 {
        return Ok(jac_at(0.0));
    }
    let mut acc = DMatrix::zeros(n, n);
    let whole = gl8_panel(&jac_at, 0.0, 1.0);
    adaptive_gl8(&jac_at, 0.0, 1.0, whole, 3e-10, 0, &mut acc);
    Ok(acc)
}

/// Jacobian of f(z,t) + B(z,t) u_d with respect to z, central differences.
pub fn closed_loop_jacobian(
    model: &dyn SystemModel,
    z: &DVector<f64>,
    u_d: &DVector<f64>,
    t: f64,
) -> DMatrix<f64> {
    let n = model.state_dim();
    let g = |p: &DVector<f64>| model.drift(p, t) + model.input_matrix(p, t) * u_d;
    let mut jac = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-6 * (1.0 + z[j].abs());
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[j] += h;
        zm[j] -= h;
        let col = (g(&zp) - g(&zm)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

const GL8_NODES: [f64; 8] = [
    -0.9602898564975362,
    -0.7966664774136267,
    -0.5255324099163290,
    -0.1834346424956498,
    0.1834346424956498,
    0.5255324099163290,
    0.7966664774136267,
    0.9602898564975362,
];
const GL8_WEIGHTS: [f64; 8] = [
    0.1012285362903763,
    0.2223810344533745,
    0.3137066458778873,
    0.3626837833783620,
    0.3626837833783620,
    0.3137066458778873,
    0.2223810344533745,
    0.1012285362903763,
];

fn gl8_panel(f: &impl Fn(f64) -> DMatrix<f64>, a: f64, b: f64) -> DMatrix<f64> {
    let mid = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let mut acc: Option<DMatrix<f64>> = None;
    for (node, w) in GL8_NODES.iter().zip(GL8_WEIGHTS.iter()) {
        let v = f(mid + half * node) * (*w * half);
        acc = Some(match acc {
            None => v,
            Some(a) => a + v,
        });
    }
    acc.unwrap()
}

fn adaptive_gl8(
    f: &impl Fn(f64) -> DMatrix<f64>,
    a: f64,
    b: f64,
    whole: DMatrix<f64>,
    tol: f64,
    depth: usize,
    out: &mut DMatrix<f64>,
) {
    let mid = 0.5 * (a + b);
    let left = gl8_panel(f, a, mid);
    let right = gl8_panel(f, mid, b);
    let err = (&left + &right - &whole).norm();
    // error budget proportional to panel length so recursion terminates at
    // the drag kink
    if err < tol * (b - a) || depth >= 10 {
        *out += left + right;
    } else {
        adaptive_gl8(f, a, mid, left, tol, depth + 1, out);
        adaptive_gl8(f, mid, b, right, tol, depth + 1, out);
    }
}

// ---------------------------------------------------------------------------
// Disturbance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DisturbanceKind {
    Zero,
    /// One random direction per seed, constant over the whole run.
    ConstantRandomDirection,
    /// New random direction every `hold_interval` seconds.
    PiecewiseRandom,
}

/// Deterministic bounded disturbance: d(t) is a pure function of
/// (seed, floor(t / hold_interval)) with ||d(t)|| <= magnitude always.
#[derive(Debug, Clone)]
pub struct DisturbanceSpec {
    pub kind: DisturbanceKind,
    pub magnitude: f64,
    pub hold_interval: f64,
    pub seed: u64,
    pub dim: usize,
}

impl DisturbanceSpec {
    pub fn zero(dim: usize) -> Self {
        Self {
            kind: DisturbanceKind::Zero,
            magnitude: 0.0,
            hold_interval: 1.0,
            seed: 0,
            dim,
        }
    }

    pub fn sample(&self, t: f64) -> DVector<f64> {
        match self.kind {
            DisturbanceKind::Zero => DVector::zeros(self.dim),
            DisturbanceKind::ConstantRandomDirection => self.direction(0),
            DisturbanceKind::PiecewiseRandom => {
                let k = (t / self.hold_interval + 1e-12).floor() as u64;
                self.direction(k)
            }
        }
    }

    fn direction(&self, k: u64) -> DVector<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed ^ k.wrapping_mul(0x9e3779b97f4a7c15));
        let mut v = DVector::from_fn(self.dim, |_, _| {
            // Box-Muller standard normal
            let u1: f64 = rng.random_range(f64::EPSILON..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let norm = v.norm();
        if norm == 0.0 {
            v[0] = 1.0;
            return self.rescale(v);
        }
        v /= norm;
        self.rescale(v)
    }

    fn rescale(&self, mut v: DVector<f64>) -> DVector<f64> {
        v *= self.magnitude;
        let norm = v.norm();
        if norm > self.magnitude && norm > 0.0 {
            v *= self.magnitude / norm;
        }
        debug_assert!(v.norm() <= self.magnitude * (1.0 + 1e-12) + f64::MIN_POSITIVE);
        v
    }
}

// ---------------------------------------------------------------------------
// Integration
// ---------------------------------------------------------------------------

/// One trajectory sampled on a fixed grid; `inputs[k]` and `disturbances[k]`
/// act over [times[k], times[k+1]).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("non-empty trajectory")
    }

    /// CSV export: t, x..., u..., d... (inputs/disturbances repeat the last
    /// interval value on the final row).
    pub fn to_csv(&self) -> String {
        let n = self.states[0].len();
        let m = self.inputs.first().map_or(0, |u| u.len());
        let mut out = String::new();
        out.push('t');
        for i in 0..n {
            out.push_str(&format!(",x{i}"));
        }
        for i in 0..m {
            out.push_str(&format!(",u{i}"));
        }
        for i in 0..n {
            out.push_str(&format!(",d{i}"));
        }
        out.push('\n');
        for k in 0..self.times.len() {
            out.push_str(&format!("{}", self.times[k]));
            for v in self.states[k].iter() {
                out.push_str(&format!(",{v}"));
            }
            let ku = k.min(self.inputs.len().saturating_sub(1));
            if !self.inputs.is_empty() {
                for v in self.inputs[ku].iter() {
                    out.push_str(&format!(",{v}"));
                }
            }
            let kd = k.min(self.disturbances.len().saturating_sub(1));
            if !self.disturbances.is_empty() {
                for v in self.disturbances[kd].iter() {
                    out.push_str(&format!(",{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Classical RK4 step of xdot = f(x,t) + B(x,t) u + d with u, d held constant.
pub fn rk4_step(
    model: &dyn SystemModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    d: &DVector<f64>,
    t: f64,
    dt: f64,
) -> DVector<f64> {
    let deriv = |x: &DVector<f64>, t: f64| model.drift(x, t) + model.input_matrix(x, t) * u + d;
    let k1 = deriv(x, t);
    let k2 = deriv(&(x + &k1 * (dt / 2.0)), t + dt / 2.0);
    let k3 = deriv(&(x + &k2 * (dt / 2.0)), t + dt / 2.0);
    let k4 = deriv(&(x + &k3 * dt), t + dt);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Fixed-step RK4 with an arbitrary control law evaluated at every step and a
/// disturbance applied additively. Errors out when the state norm crosses
/// `blowup`.
pub fn integrate_rk4(
    model: &dyn SystemModel,
    x0: &DVector<f64>,
    control: &mut dyn FnMut(f64, &DVector<f64>) -> DVector<f64>,
    disturbance: &DisturbanceSpec,
    dt: f64,
    t_final: f64,
    blowup: f64,
) -> Result<Trajectory> {
    assert!(dt > 0.0 && t_final >= dt, "dt > 0 and T >= dt required");
    let steps = (t_final / dt).round() as usize;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps);
    let mut disturbances = Vec::with_capacity(steps);
    let mut x = x0.clone();
    times.push(0.0);
    states.push(x.clone());
    for k in 0..steps {
        let t = k as f64 * dt;
        let u = control(t, &x);
        let d = disturbance.sample(t);
        x = rk4_step(model, &x, &u, &d, t, dt);
        let norm = x.norm();
        if !norm.is_finite() || norm > blowup {
            return Err(Error::Divergence { t: t + dt, norm });
        }
        times.push((k + 1) as f64 * dt);
        inputs.push(u);
        disturbances.push(d);
        states.push(x.clone());
    }
    Ok(Trajectory {
        times,
        states,
        inputs,
        disturbances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn cartpole_equilibrium_at_origin() {
        let model = CartPoleModel::new(0.0);
        let f = eval_f(&model, &dv(&[0.0, 0.0, 0.0, 0.0]), 0.0).unwrap();
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn planar_zero_velocity_has_zero_drift() {
        let model = PlanarAgentModel::new(false, 0.0);
        let f = eval_f(&model, &dv(&[1.0, 2.0, 0.0, 0.0]), 0.0).unwrap();
        assert_eq!(f.norm(), 0.0);
    }

    #[test]
    fn cartpole_drift_matches_hand_evaluated_golden_value() {
        // Independent high-precision evaluation of the friction cart-pole ODE
        // at x = [0, 0.1, 0, 0], u = 0.
        let model = CartPoleModel::new(0.0);
        let f = eval_f(&model, &dv(&[0.0, 0.1, 0.0, 0.0]), 0.0).unwrap();
        assert_abs_diff_eq!(f[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(f[2], -0.07117831516049841, epsilon = 1e-14);
        assert_abs_diff_eq!(f[3], 1.5737853048016257, epsilon = 1e-13);
    }

    #[test]
    fn eval_f_rejects_non_finite_input() {
        let model = CartPoleModel::new(0.0);
        assert!(matches!(
            eval_f(&model, &dv(&[f64::NAN, 0.0, 0.0, 0.0]), 0.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn b_bar_dominates_sampled_input_matrix_norms() {
        let model = CartPoleModel::new(0.0);
        let worst = validate_b_bar(&model, 2000, 7).unwrap();
        assert!(worst <= model.b_bar());
        assert!(worst > 1.7, "expected the bound to be near-tight: {worst}");
        let planar = PlanarAgentModel::new(true, 0.0);
        validate_b_bar(&planar, 500, 8).unwrap();
    }

    #[test]
    fn sdc_is_exact_for_linear_systems() {
        let f_mat = DMatrix::from_row_slice(2, 2, &[0.3, -1.2, 0.8, -0.5]);
        let g_mat = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let model = LinearModel::new(f_mat.clone(), g_mat, 0.0);
        let a = sdc_factorize(
            &model,
            &dv(&[1.0, -2.0]),
            &dv(&[0.4, 0.7]),
            &dv(&[0.3]),
            0.0,
        )
        .unwrap();
        assert!((a - f_mat).norm() < 1e-8);
    }

    #[test]
    fn sdc_at_coincident_states_returns_jacobian() {
        let model = CartPoleModel::new(0.0);
        let x = dv(&[0.2, 0.3, -0.1, 0.4]);
        let u = dv(&[0.5]);
        let a = sdc_factorize(&model, &x, &x, &u, 0.0).unwrap();
        let jac = closed_loop_jacobian(&model, &x, &u, 0.0);
        assert!((a - jac).norm() < 1e-12);
    }

    #[test]
    fn sdc_residual_small_on_random_cartpole_pairs() {
        let model = CartPoleModel::new(0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..1000 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-1.5..1.5));
            let x_d = DVector::from_fn(4, |_, _| rng.random_range(-1.5..1.5));
            let u_d = dv(&[rng.random_range(-5.0..5.0)]);
            let a = sdc_factorize(&model, &x, &x_d, &u_d, 0.0).unwrap();
            let lhs = &a * (&x - &x_d);
            let rhs = model.drift(&x, 0.0) + model.input_matrix(&x, 0.0) * &u_d
                - model.drift(&x_d, 0.0)
                - model.input_matrix(&x_d, 0.0) * &u_d;
            let resid = (lhs - rhs).norm();
            assert!(
                resid <= 1e-8 * (1.0 + (&x - &x_d).norm()),
                "residual {resid} too large"
            );
        }
    }

    #[test]
    fn sdc_residual_small_on_random_planar_pairs() {
        // the drag Jacobian has a kink at v = 0; the adaptive quadrature must
        // still deliver the chord identity
        let model = PlanarAgentModel::new(false, 0.0);
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        for _ in 0..1000 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let x_d = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let u_d = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
            let a = sdc_factorize(&model, &x, &x_d, &u_d, 0.0).unwrap();
            let lhs = &a * (&x - &x_d);
            let rhs = model.drift(&x, 0.0) - model.drift(&x_d, 0.0);
            let resid = (lhs - rhs).norm();
            assert!(
                resid <= 1e-8 * (1.0 + (&x - &x_d).norm()),
                "residual {resid} too large"
            );
        }
    }

    #[test]
    fn rk4_constant_when_unforced() {
        let model = LinearModel::new(DMatrix::zeros(2, 2), DMatrix::zeros(2, 1), 0.0);
        let traj = integrate_rk4(
            &model,
            &dv(&[1.0, -2.0]),
            &mut |_, _| dv(&[0.0]),
            &DisturbanceSpec::zero(2),
            0.01,
            1.0,
            1e6,
        )
        .unwrap();
        for s in &traj.states {
            assert_eq!(s, &dv(&[1.0, -2.0]));
        }
    }

    #[test]
    fn rk4_matches_analytic_exponential() {
        let model = LinearModel::new(
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            DMatrix::zeros(1, 1),
            0.0,
        );
        let traj = integrate_rk4(
            &model,
            &dv(&[1.0]),
            &mut |_, _| dv(&[0.0]),
            &DisturbanceSpec::zero(1),
            1e-3,
            1.0,
            1e6,
        )
        .unwrap();
        assert_abs_diff_eq!(traj.final_state()[0], (-1.0f64).exp(), epsilon = 1e-6);
    }

    #[test]
    fn rk4_energy_drift_small_on_frictionless_cartpole() {
        let model = CartPoleModel::new(0.0).frictionless();
        let x0 = dv(&[0.0, 0.4, 0.0, 0.0]);
        let e0 = model.energy(&x0);
        let traj = integrate_rk4(
            &model,
            &x0,
            &mut |_, _| dv(&[0.0]),
            &DisturbanceSpec::zero(4),
            1e-3,
            10.0,
            1e6,
        )
        .unwrap();
        let drift = traj
            .states
            .iter()
            .map(|s| (model.energy(s) - e0).abs())
            .fold(0.0f64, f64::max);
        assert!(drift < 1e-4, "energy drift {drift}");
    }

    #[test]
    fn rk4_shows_fourth_order_convergence() {
        // halving dt reduces the error against a dt/8 reference by ~16x
        let model = CartPoleModel::new(0.0);
        let x0 = dv(&[0.1, 0.2, -0.3, 0.1]);
        let run = |dt: f64| {
            integrate_rk4(
                &model,
                &x0,
                &mut |_, _| dv(&[0.5]),
                &DisturbanceSpec::zero(4),
                dt,
                0.5,
                1e6,
            )
            .unwrap()
            .final_state()
            .clone()
        };
        let reference = run(0.05 / 8.0);
        let e1 = (run(0.05) - &reference).norm();
        let e2 = (run(0.025) - &reference).norm();
        let ratio = e1 / e2;
        assert!(
            (10.0..26.0).contains(&ratio),
            "expected ~16x error reduction, got {ratio}"
        );
    }

    #[test]
    fn rk4_reports_divergence_time() {
        let model = LinearModel::new(
            DMatrix::from_row_slice(1, 1, &[5.0]),
            DMatrix::zeros(1, 1),
            0.0,
        );
        let err = integrate_rk4(
            &model,
            &dv(&[1.0]),
            &mut |_, _| dv(&[0.0]),
            &DisturbanceSpec::zero(1),
            0.01,
            10.0,
            1e3,
        )
        .unwrap_err();
        match err {
            Error::Divergence { t, .. } => assert!(t > 0.0 && t < 10.0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn disturbance_zero_kind_is_zero() {
        let spec = DisturbanceSpec::zero(3);
        assert_eq!(spec.sample(1.23).norm(), 0.0);
    }

    #[test]
    fn disturbance_norm_never_exceeds_magnitude() {
        let spec = DisturbanceSpec {
            kind: DisturbanceKind::PiecewiseRandom,
            magnitude: 0.4,
            hold_interval: 0.5,
            seed: 11,
            dim: 4,
        };
        for k in 0..2000 {
            let t = k as f64 * 0.013;
            assert!(spec.sample(t).norm() <= 0.4 * (1.0 + 1e-12));
        }
    }

    #[test]
    fn disturbance_held_constant_within_interval() {
        let spec = DisturbanceSpec {
            kind: DisturbanceKind::PiecewiseRandom,
            magnitude: 1.0,
            hold_interval: 0.5,
            seed: 3,
            dim: 2,
        };
        let a = spec.sample(1.01);
        let b = spec.sample(1.49);
        assert_eq!(a, b);
        let c = spec.sample(1.51);
        assert_ne!(a, c);
    }

    #[test]
    fn disturbance_deterministic_given_seed_and_time() {
        let mk = || DisturbanceSpec {
            kind: DisturbanceKind::PiecewiseRandom,
            magnitude: 0.7,
            hold_interval: 1.0,
            seed: 99,
            dim: 4,
        };
        assert_eq!(mk().sample(3.7), mk().sample(3.7));
    }
}
