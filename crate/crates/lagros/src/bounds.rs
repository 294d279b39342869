//! Closed-form tracking-error envelopes: the exponentially convergent tube
//! radius r_ell(t) for policies imitating the robust control, the
//! Gronwall-type diverging envelope for policies imitating the nominal
//! input, and empirical verification against rollouts.

use nalgebra::DVector;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dynamics::{Region, SystemModel, Trajectory};

/// Parameters of the robust error tube
/// r_ell(t) = R0 sqrt(omega_hi) e^{-alpha t}
///          + (b_bar eps_ell + d_bar)/alpha * sqrt(omega_hi/omega_lo) (1 - e^{-alpha t}).
#[derive(Debug, Clone)]
pub struct TubeProfile {
    pub r0: f64,
    pub omega_lo: f64,
    pub omega_hi: f64,
    pub alpha: f64,
    pub b_bar: f64,
    pub eps_ell: f64,
    pub d_bar: f64,
}

impl TubeProfile {
    pub fn new(
        r0: f64,
        omega_lo: f64,
        omega_hi: f64,
        alpha: f64,
        b_bar: f64,
        eps_ell: f64,
        d_bar: f64,
    ) -> Self {
        assert!(alpha > 0.0, "alpha must be positive");
        assert!(omega_hi >= omega_lo && omega_lo > 0.0, "need omega_hi >= omega_lo > 0");
        assert!(r0 >= 0.0 && b_bar >= 0.0 && eps_ell >= 0.0 && d_bar >= 0.0);
        Self {
            r0,
            omega_lo,
            omega_hi,
            alpha,
            b_bar,
            eps_ell,
            d_bar,
        }
    }

    /// Convenience constructor when only chi = omega_hi/omega_lo matters
    /// (R0 = 0 makes the omega_hi prefactor irrelevant).
    pub fn from_chi(chi: f64, alpha: f64, b_bar: f64, eps_ell: f64, d_bar: f64) -> Self {
        Self::new(0.0, 1.0, chi, alpha, b_bar, eps_ell, d_bar)
    }

    pub fn d_eps(&self) -> f64 {
        self.b_bar * self.eps_ell + self.d_bar
    }

    pub fn r_ell(&self, t: f64) -> f64 {
        assert!(t >= 0.0, "tube evaluated at negative time");
        let decay = (-self.alpha * t).exp();
        self.r0 * self.omega_hi.sqrt() * decay
            + self.d_eps() / self.alpha * (self.omega_hi / self.omega_lo).sqrt() * (1.0 - decay)
    }

    pub fn steady_state(&self) -> f64 {
        self.d_eps() / self.alpha * (self.omega_hi / self.omega_lo).sqrt()
    }

    /// CSV of (t, r_ell, naive_bound) on a uniform grid, for plotting.
    pub fn curve_csv(&self, naive: Option<&NaiveBoundParams>, t_final: f64, dt: f64) -> String {
        let mut out = String::from("t,r_ell,naive_bound\n");
        let steps = (t_final / dt).round() as usize;
        for k in 0..=steps {
            let t = k as f64 * dt;
            let nb = naive.map_or(f64::NAN, |p| p.naive_bound(t));
            out.push_str(&format!("{},{},{}\n", t, self.r_ell(t), nb));
        }
        out
    }
}

/// Parameters of the diverging envelope
/// ||e(0)|| e^{L t} + (b_bar eps_ell + d_bar)/L (e^{L t} - 1).
#[derive(Debug, Clone)]
pub struct NaiveBoundParams {
    pub e0: f64,
    pub lipschitz: f64,
    pub b_bar: f64,
    pub eps_ell: f64,
    pub d_bar: f64,
}

impl NaiveBoundParams {
    pub fn naive_bound(&self, t: f64) -> f64 {
        assert!(t >= 0.0);
        let growth = (self.lipschitz * t).exp();
        let d_eps = self.b_bar * self.eps_ell + self.d_bar;
        if self.lipschitz == 0.0 {
            return self.e0 + d_eps * t;
        }
        self.e0 * growth + d_eps / self.lipschitz * (growth - 1.0)
    }
}

/// Tube-satisfaction report for one rollout against a nominal trajectory.
#[derive(Debug, Clone)]
pub struct TubeReport {
    /// max over t of ||x(t) - x_d(t)|| - r_ell(t); <= 0 means inside.
    pub max_violation: f64,
    pub inside_fraction: f64,
    pub first_exit_time: Option<f64>,
    /// max over t of ||x(t) - x_d(t)||.
    pub max_error: f64,
}

/// Compares a rollout with a nominal sampled at the same times.
pub fn verify_tube(
    trajectory: &Trajectory,
    nominal_states: &[DVector<f64>],
    profile: &TubeProfile,
) -> TubeReport {
    assert_eq!(trajectory.states.len(), nominal_states.len());
    let mut max_violation = f64::NEG_INFINITY;
    let mut inside = 0usize;
    let mut first_exit = None;
    let mut max_error = 0.0f64;
    for ((t, x), x_d) in trajectory
        .times
        .iter()
        .zip(&trajectory.states)
        .zip(nominal_states)
    {
        let err = (x - x_d).norm();
        let violation = err - profile.r_ell(*t);
        max_error = max_error.max(err);
        if violation > max_violation {
            max_violation = violation;
        }
        if violation <= 0.0 {
            inside += 1;
        } else if first_exit.is_none() {
            first_exit = Some(*t);
        }
    }
    TubeReport {
        max_violation,
        inside_fraction: inside as f64 / trajectory.times.len() as f64,
        first_exit_time: first_exit,
        max_error,
    }
}

/// Empirical Lipschitz estimate of f_cl(x) = f(x) + B(x) u_policy(x) over a
/// region: max pairwise slope over sampled pairs, inflated by `inflation`
/// (1.2 by default upstream; pass 1.0 for the raw max-ratio estimate).
pub fn estimate_lipschitz(
    model: &dyn SystemModel,
    u_policy: &dyn Fn(&DVector<f64>) -> DVector<f64>,
    region: &Region,
    samples: usize,
    inflation: f64,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let f_cl = |x: &DVector<f64>| {
        model.drift(x, 0.0) + model.input_matrix(x, 0.0) * u_policy(x)
    };
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let x1 = region.sample(&mut rng);
        let x2 = region.sample(&mut rng);
        let dist = (&x1 - &x2).norm();
        if dist < 1e-12 {
            continue;
        }
        let slope = (f_cl(&x1) - f_cl(&x2)).norm() / dist;
        best = best.max(slope);
    }
    best * inflation
}
