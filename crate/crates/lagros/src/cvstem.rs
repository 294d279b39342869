//! Contraction-metric synthesis by convex optimization over a sample grid,
//! plus metric evaluation, its flow derivative, and the steady-state
//! tracking-error bound.
//!
//! The metric is M = nu * Wbar^-1 with one shared (nu, chi) and a per-point
//! Wbar satisfying, at every grid point,
//!
//!   beta I + 2 sym(A Wbar) - 2 nu B R^-1 B^T <= -2 alpha Wbar
//!   I <= Wbar <= chi I
//!
//! The grid decomposes exactly: minimizing chi per point and taking the max
//! over points equals the joint optimum, because raising nu or chi never
//! shrinks a point's feasible set. A second per-point pass minimizes nu at
//! the optimal chi to pin the gain scale.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dynamics::{sdc_factorize, SystemModel};
use crate::sdp::{self, LmiBlock, LmiProblem, SdpOptions, SdpStatus};
use crate::{Error, Result};

/// One synthesis/query anchor (x, x_d, u_d, t) with its solved Wbar.
#[derive(Debug, Clone)]
pub struct MetricSample {
    pub x: DVector<f64>,
    pub x_d: DVector<f64>,
    pub u_d: DVector<f64>,
    pub t: f64,
    pub w_bar: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Interpolation {
    /// Certified default: the stored Wbar of the nearest grid point.
    Nearest,
    /// Inverse-distance blend of the k nearest Wbar (power 1 is piecewise
    /// linear between two points); preserves the I..chi I envelope by
    /// convexity.
    InverseDistance { k: usize, power: i32 },
}

impl Interpolation {
    pub fn id(&self) -> String {
        match self {
            Interpolation::Nearest => "nearest".to_string(),
            Interpolation::InverseDistance { k, power } => format!("idw,{k},{power}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        if s == "nearest" {
            return Some(Interpolation::Nearest);
        }
        let mut parts = s.split(',');
        if parts.next()? != "idw" {
            return None;
        }
        Some(Interpolation::InverseDistance {
            k: parts.next()?.parse().ok()?,
            power: parts.next()?.parse().ok()?,
        })
    }
}

/// Synthesized contraction metric over a sample grid.
#[derive(Debug, Clone)]
pub struct MetricTable {
    pub alpha: f64,
    pub nu: f64,
    pub chi: f64,
    /// Margin standing in for -d(Wbar)/dt inside the synthesis LMI.
    pub beta: f64,
    pub r_weight: DMatrix<f64>,
    pub samples: Vec<MetricSample>,
    pub interp: Interpolation,
    /// Weight of t in the query feature vector.
    pub time_weight: f64,
    extrapolation_radius: f64,
}

/// Result of a metric query.
#[derive(Debug, Clone)]
pub struct MetricEval {
    pub m: DMatrix<f64>,
    /// Set when the query lies far outside the grid hull.
    pub extrapolated: bool,
}

/// Directional derivatives supplied to the finite-difference metric slope.
#[derive(Debug, Clone)]
pub struct FlowContext {
    pub x_dot: DVector<f64>,
    pub x_d_dot: DVector<f64>,
    pub u_d_dot: DVector<f64>,
}

impl FlowContext {
    /// Frozen state transport: only the explicit time argument moves.
    pub fn frozen(n: usize, m: usize) -> Self {
        Self {
            x_dot: DVector::zeros(n),
            x_d_dot: DVector::zeros(n),
            u_d_dot: DVector::zeros(m),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridPoint {
    pub x: DVector<f64>,
    pub x_d: DVector<f64>,
    pub u_d: DVector<f64>,
    pub t: f64,
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    pub alpha: f64,
    /// Margin replacing the Wbar time derivative in the LMI.
    pub beta: f64,
    pub nu_min: f64,
    pub nu_max: f64,
    pub chi_max: f64,
    pub r_weight: DMatrix<f64>,
    pub interp: Interpolation,
    pub time_weight: f64,
    pub sdp: SdpOptions,
}

impl SynthesisOptions {
    pub fn new(alpha: f64, input_dim: usize) -> Self {
        Self {
            alpha,
            beta: 0.05,
            nu_min: 1e-6,
            nu_max: 1e6,
            chi_max: 1e6,
            r_weight: DMatrix::identity(input_dim, input_dim),
            interp: Interpolation::Nearest,
            time_weight: 1.0,
            sdp: SdpOptions::default(),
        }
    }
}

/// Symmetric basis matrices in vech order.
fn sym_basis(n: usize) -> Vec<DMatrix<f64>> {
    let mut basis = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let mut s = DMatrix::zeros(n, n);
            if i == j {
                s[(i, i)] = 1.0;
            } else {
                s[(i, j)] = 1.0;
                s[(j, i)] = 1.0;
            }
            basis.push(s);
        }
    }
    basis
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Assembles the per-point LMI problem. Variable order: nu, chi, vech(Wbar).
fn point_problem(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    opts: &SynthesisOptions,
    objective_nu: bool,
    chi_cap: Option<f64>,
) -> LmiProblem {
    let n = a.nrows();
    let basis = sym_basis(n);
    let nw = basis.len();
    let mut c = vec![0.0; 2 + nw];
    if objective_nu {
        c[0] = 1.0;
    } else {
        c[1] = 1.0;
    }
    let mut p = LmiProblem::new(2 + nw, c);

    let r_inv = opts
        .r_weight
        .clone()
        .try_inverse()
        .expect("input weight R must be invertible");
    let brb = b * &r_inv * b.transpose();

    // contraction block: -beta I - 2 alpha Wbar - 2 sym(A Wbar) + 2 nu B R^-1 B^T >= 0
    let mut vars = vec![0usize];
    let mut coeffs = vec![&brb * 2.0];
    for (k, s) in basis.iter().enumerate() {
        vars.push(2 + k);
        coeffs.push(sym(&(a * s)) * -2.0 - s * (2.0 * opts.alpha));
    }
    p.add_block(LmiBlock::new(
        DMatrix::identity(n, n) * (-opts.beta),
        vars,
        coeffs,
    ));

    // Wbar - I >= 0
    p.add_block(LmiBlock::new(
        DMatrix::identity(n, n) * -1.0,
        (0..nw).map(|k| 2 + k).collect(),
        basis.clone(),
    ));

    // chi I - Wbar >= 0
    let mut vars3 = vec![1usize];
    let mut coeffs3 = vec![DMatrix::identity(n, n)];
    for (k, s) in basis.iter().enumerate() {
        vars3.push(2 + k);
        coeffs3.push(s * -1.0);
    }
    p.add_block(LmiBlock::new(DMatrix::zeros(n, n), vars3, coeffs3));

    p.add_lower_bound(0, opts.nu_min);
    p.add_upper_bound(0, opts.nu_max);
    p.add_lower_bound(1, 1.0);
    p.add_upper_bound(1, chi_cap.unwrap_or(opts.chi_max));
    p
}

fn unpack_w(y: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(n, n);
    let mut k = 2;
    for i in 0..n {
        for j in i..n {
            w[(i, j)] = y[k];
            w[(j, i)] = y[k];
            k += 1;
        }
    }
    w
}

/// Synthesizes the metric: one shared (nu, chi), per-point Wbar.
pub fn synthesize(
    model: &dyn SystemModel,
    grid: &[GridPoint],
    opts: &SynthesisOptions,
) -> Result<MetricTable> {
    if grid.is_empty() {
        return Err(Error::Config("metric grid is empty".to_string()));
    }
    assert!(opts.alpha > 0.0, "contraction rate must be positive");

    let point_data: Vec<(DMatrix<f64>, DMatrix<f64>)> = grid
        .iter()
        .map(|g| {
            let a = sdc_factorize(model, &g.x, &g.x_d, &g.u_d, g.t)?;
            let b = model.input_matrix(&g.x, g.t);
            Ok((a, b))
        })
        .collect::<Result<_>>()?;

    // pass 1: smallest feasible chi per point
    let pass1: Vec<std::result::Result<f64, usize>> = point_data
        .par_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let p = point_problem(a, b, opts, false, None);
            let sol = sdp::solve(&p, &opts.sdp);
            match sol.status {
                SdpStatus::Infeasible => Err(i),
                _ => Ok(sol.y[1]),
            }
        })
        .collect();
    let mut chi = 1.0f64;
    for r in &pass1 {
        match r {
            Ok(c) => chi = chi.max(*c),
            Err(i) => {
                return Err(Error::SynthesisInfeasible {
                    index: *i,
                    detail: format!(
                        "contraction rate alpha = {} not achievable there; lower alpha",
                        opts.alpha
                    ),
                })
            }
        }
    }
    // headroom so every point keeps a strict interior at the shared chi
    let chi_shared = chi * (1.0 + 3e-5) + 1e-7;

    // pass 2: smallest nu at the shared chi; keeps the gain scale small
    let pass2: Vec<std::result::Result<(f64, DMatrix<f64>), usize>> = point_data
        .par_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let p = point_problem(a, b, opts, true, Some(chi_shared));
            let sol = sdp::solve(&p, &opts.sdp);
            match sol.status {
                SdpStatus::Infeasible => Err(i),
                _ => Ok((sol.y[0], unpack_w(&sol.y, model.state_dim()))),
            }
        })
        .collect();
    let mut nu = opts.nu_min;
    let mut samples = Vec::with_capacity(grid.len());
    for (g, r) in grid.iter().zip(pass2) {
        match r {
            Ok((nu_p, w_bar)) => {
                nu = nu.max(nu_p);
                samples.push(MetricSample {
                    x: g.x.clone(),
                    x_d: g.x_d.clone(),
                    u_d: g.u_d.clone(),
                    t: g.t,
                    w_bar,
                });
            }
            Err(i) => {
                return Err(Error::SynthesisInfeasible {
                    index: i,
                    detail: "gain-scale pass infeasible at shared chi".to_string(),
                })
            }
        }
    }

    Ok(MetricTable::from_parts(
        opts.alpha,
        nu,
        chi_shared,
        opts.beta,
        opts.r_weight.clone(),
        samples,
        opts.interp,
        opts.time_weight,
    ))
}

impl MetricTable {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        alpha: f64,
        nu: f64,
        chi: f64,
        beta: f64,
        r_weight: DMatrix<f64>,
        samples: Vec<MetricSample>,
        interp: Interpolation,
        time_weight: f64,
    ) -> Self {
        let mut table = Self {
            alpha,
            nu,
            chi,
            beta,
            r_weight,
            samples,
            interp,
            time_weight,
            extrapolation_radius: f64::INFINITY,
        };
        table.extrapolation_radius = table.compute_extrapolation_radius();
        table
    }

    pub fn state_dim(&self) -> usize {
        self.samples[0].x.len()
    }

    pub fn input_dim(&self) -> usize {
        self.samples[0].u_d.len()
    }

    /// omega_lo = 1/nu; M <= I/omega_lo.
    pub fn omega_lo(&self) -> f64 {
        1.0 / self.nu
    }

    /// omega_hi = chi/nu; M >= I/omega_hi.
    pub fn omega_hi(&self) -> f64 {
        self.chi / self.nu
    }

    fn feature(
        &self,
        x: &DVector<f64>,
        x_d: &DVector<f64>,
        u_d: &DVector<f64>,
        t: f64,
    ) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 * x.len() + u_d.len() + 1);
        f.extend(x.iter());
        f.extend(x_d.iter());
        f.extend(u_d.iter());
        f.push(self.time_weight * t);
        f
    }

    fn sample_feature(&self, s: &MetricSample) -> Vec<f64> {
        self.feature(&s.x, &s.x_d, &s.u_d, s.t)
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }

    fn compute_extrapolation_radius(&self) -> f64 {
        if self.samples.len() < 2 {
            return f64::INFINITY;
        }
        let feats: Vec<Vec<f64>> = self
            .samples
            .iter()
            .map(|s| self.sample_feature(s))
            .collect();
        let mut max_nn = 0.0f64;
        for (i, fi) in feats.iter().enumerate() {
            let mut nn = f64::INFINITY;
            for (j, fj) in feats.iter().enumerate() {
                if i != j {
                    nn = nn.min(Self::dist(fi, fj));
                }
            }
            max_nn = max_nn.max(nn);
        }
        2.0 * max_nn
    }

    fn wbar_at(
        &self,
        x: &DVector<f64>,
        x_d: &DVector<f64>,
        u_d: &DVector<f64>,
        t: f64,
    ) -> (DMatrix<f64>, bool) {
        let q = self.feature(x, x_d, u_d, t);
        let mut dists: Vec<(f64, usize)> = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| (Self::dist(&q, &self.sample_feature(s)), i))
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let nearest = dists[0];
        let extrapolated = nearest.0 > self.extrapolation_radius;
        match self.interp {
            Interpolation::Nearest => (self.samples[nearest.1].w_bar.clone(), extrapolated),
            Interpolation::InverseDistance { k, power } => {
                if nearest.0 == 0.0 {
                    return (self.samples[nearest.1].w_bar.clone(), extrapolated);
                }
                let k = k.min(dists.len());
                let mut acc = DMatrix::zeros(self.state_dim(), self.state_dim());
                let mut wsum = 0.0;
                for &(d, i) in dists.iter().take(k) {
                    let w = d.powi(-power);
                    acc += &self.samples[i].w_bar * w;
                    wsum += w;
                }
                (acc / wsum, extrapolated)
            }
        }
    }

    /// M(x, x_d, u_d, t) = nu * Wbar^-1, symmetric positive definite.
    pub fn eval_m(
        &self,
        x: &DVector<f64>,
        x_d: &DVector<f64>,
        u_d: &DVector<f64>,
        t: f64,
    ) -> MetricEval {
        let (w_bar, extrapolated) = self.wbar_at(x, x_d, u_d, t);
        let inv = w_bar.clone().cholesky().map(|ch| ch.inverse()).unwrap_or_else(|| {
            w_bar
                .try_inverse()
                .expect("Wbar is positive definite by construction")
        });
        let m = sym(&(inv * self.nu));
        MetricEval { m, extrapolated }
    }

    /// Central finite difference of eval_m along the supplied flow, h = 1e-4.
    pub fn eval_mdot(
        &self,
        x: &DVector<f64>,
        x_d: &DVector<f64>,
        u_d: &DVector<f64>,
        t: f64,
        ctx: &FlowContext,
    ) -> DMatrix<f64> {
        let h = 1e-4;
        let plus = self.eval_m(
            &(x + &ctx.x_dot * h),
            &(x_d + &ctx.x_d_dot * h),
            &(u_d + &ctx.u_d_dot * h),
            t + h,
        );
        let minus = self.eval_m(
            &(x - &ctx.x_dot * h),
            &(x_d - &ctx.x_d_dot * h),
            &(u_d - &ctx.u_d_dot * h),
            t - h,
        );
        sym(&((plus.m - minus.m) / (2.0 * h)))
    }

    /// (b_bar eps + d_bar)/alpha * sqrt(chi): the t -> infinity tracking
    /// bound with R(0) = 0.
    pub fn steady_state_bound(&self, eps_ell: f64, d_bar: f64, b_bar: f64) -> f64 {
        (b_bar * eps_ell + d_bar) / self.alpha * self.chi.sqrt()
    }

    /// The synthesis objective as written: (b_bar eps + d_bar)/alpha * chi.
    pub fn objective_value(&self, eps_ell: f64, d_bar: f64, b_bar: f64) -> f64 {
        (b_bar * eps_ell + d_bar) / self.alpha * self.chi
    }

    /// Versioned CSV-with-header archive: scalars block plus one row per
    /// grid point with the upper triangle of Wbar.
    pub fn to_csv(&self) -> String {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut out = String::from("# lagros-metric v1\n");
        out.push_str(&format!("# alpha = {}\n", self.alpha));
        out.push_str(&format!("# nu = {}\n", self.nu));
        out.push_str(&format!("# chi = {}\n", self.chi));
        out.push_str(&format!("# beta = {}\n", self.beta));
        out.push_str(&format!("# interp = {}\n", self.interp.id()));
        out.push_str(&format!("# time_weight = {}\n", self.time_weight));
        out.push_str(&format!("# n = {n}\n# m = {m}\n"));
        let r_flat: Vec<String> = self.r_weight.iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!("# r_weight = {}\n", r_flat.join(",")));
        out.push_str("# columns: t,x...,x_d...,u_d...,wbar upper triangle row-major\n");
        for s in &self.samples {
            out.push_str(&format!("{}", s.t));
            for v in s.x.iter().chain(s.x_d.iter()).chain(s.u_d.iter()) {
                out.push_str(&format!(",{v}"));
            }
            for i in 0..n {
                for j in i..n {
                    out.push_str(&format!(",{}", s.w_bar[(i, j)]));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::Artifact {
            path: "<metric>".into(),
            detail: d,
        };
        let mut alpha = None;
        let mut nu = None;
        let mut chi = None;
        let mut beta = 0.0;
        let mut interp = Interpolation::Nearest;
        let mut time_weight = 1.0;
        let (mut n, mut m) = (0usize, 0usize);
        let mut r_flat: Vec<f64> = Vec::new();
        let mut samples = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# alpha = ") {
                alpha = Some(rest.parse::<f64>().map_err(|e| bad(e.to_string()))?);
            } else if let Some(rest) = line.strip_prefix("# nu = ") {
                nu = Some(rest.parse::<f64>().map_err(|e| bad(e.to_string()))?);
            } else if let Some(rest) = line.strip_prefix("# chi = ") {
                chi = Some(rest.parse::<f64>().map_err(|e| bad(e.to_string()))?);
            } else if let Some(rest) = line.strip_prefix("# beta = ") {
                beta = rest.parse::<f64>().map_err(|e| bad(e.to_string()))?;
            } else if let Some(rest) = line.strip_prefix("# interp = ") {
                interp = Interpolation::parse(rest)
                    .ok_or_else(|| bad(format!("unknown interpolation `{rest}`")))?;
            } else if let Some(rest) = line.strip_prefix("# time_weight = ") {
                time_weight = rest.parse::<f64>().map_err(|e| bad(e.to_string()))?;
            } else if let Some(rest) = line.strip_prefix("# n = ") {
                n = rest.parse().map_err(|_| bad("bad n".into()))?;
            } else if let Some(rest) = line.strip_prefix("# m = ") {
                m = rest.parse().map_err(|_| bad("bad m".into()))?;
            } else if let Some(rest) = line.strip_prefix("# r_weight = ") {
                r_flat = rest
                    .split(',')
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(e.to_string()))?;
            } else if line.starts_with('#') || line.is_empty() {
                continue;
            } else {
                let vals: Vec<f64> = line
                    .split(',')
                    .map(|v| v.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(e.to_string()))?;
                let expected = 1 + 2 * n + m + n * (n + 1) / 2;
                if vals.len() != expected {
                    return Err(bad(format!(
                        "row has {} values, expected {expected}",
                        vals.len()
                    )));
                }
                let mut w_bar = DMatrix::zeros(n, n);
                let mut at = 1 + 2 * n + m;
                for i in 0..n {
                    for j in i..n {
                        w_bar[(i, j)] = vals[at];
                        w_bar[(j, i)] = vals[at];
                        at += 1;
                    }
                }
                samples.push(MetricSample {
                    x: DVector::from_row_slice(&vals[1..1 + n]),
                    x_d: DVector::from_row_slice(&vals[1 + n..1 + 2 * n]),
                    u_d: DVector::from_row_slice(&vals[1 + 2 * n..1 + 2 * n + m]),
                    t: vals[0],
                    w_bar,
                });
            }
        }
        if samples.is_empty() {
            return Err(bad("no grid rows".into()));
        }
        let r_weight = DMatrix::from_row_slice(m, m, &r_flat);
        Ok(Self::from_parts(
            alpha.ok_or_else(|| bad("missing alpha".into()))?,
            nu.ok_or_else(|| bad("missing nu".into()))?,
            chi.ok_or_else(|| bad("missing chi".into()))?,
            beta,
            r_weight,
            samples,
            interp,
            time_weight,
        ))
    }

    /// Post-hoc check of both LMIs at every grid point with the shared
    /// (nu, chi): per-point smallest eigenvalues of the two slack matrices
    /// (contraction, envelope); negative means violated.
    pub fn verify_lmi(&self, model: &dyn SystemModel) -> Result<Vec<(f64, f64)>> {
        let n = self.state_dim();
        let r_inv = self
            .r_weight
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Config("singular input weight".into()))?;
        self.samples
            .iter()
            .map(|s| {
                let a = sdc_factorize(model, &s.x, &s.x_d, &s.u_d, s.t)?;
                let b = model.input_matrix(&s.x, s.t);
                let brb = &b * &r_inv * b.transpose();
                let slack = DMatrix::identity(n, n) * (-self.beta)
                    - sym(&(&a * &s.w_bar)) * 2.0
                    + &brb * (2.0 * self.nu)
                    - &s.w_bar * (2.0 * self.alpha);
                let contraction = slack.symmetric_eigen().eigenvalues.min();
                let lower = (&s.w_bar - DMatrix::identity(n, n))
                    .symmetric_eigen()
                    .eigenvalues
                    .min();
                let upper = (DMatrix::identity(n, n) * self.chi - &s.w_bar)
                    .symmetric_eigen()
                    .eigenvalues
                    .min();
                Ok((contraction, lower.min(upper)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{CartPoleModel, LinearModel};
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn scalar_model() -> LinearModel {
        LinearModel::new(
            DMatrix::from_row_slice(1, 1, &[-1.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            0.0,
        )
    }

    fn scalar_grid() -> Vec<GridPoint> {
        vec![GridPoint {
            x: dv(&[0.3]),
            x_d: dv(&[0.0]),
            u_d: dv(&[0.0]),
            t: 0.0,
        }]
    }

    #[test]
    fn scalar_system_reaches_unit_chi() {
        // xdot = -x + u with alpha <= 1: 2(-1)w - 2 nu <= -2 alpha w holds
        // for any nu >= 0 once beta = 0, so the optimum is chi = 1
        let mut opts = SynthesisOptions::new(0.5, 1);
        opts.beta = 0.0;
        let table = synthesize(&scalar_model(), &scalar_grid(), &opts).unwrap();
        assert!((table.chi - 1.0).abs() < 1e-4, "chi = {}", table.chi);
        for (c, e) in table.verify_lmi(&scalar_model()).unwrap() {
            assert!(c >= -1e-6, "contraction margin {c}");
            assert!(e >= -1e-6, "envelope margin {e}");
        }
    }

    #[test]
    fn unreachable_rate_with_capped_nu_is_infeasible() {
        // alpha = 2 > 1 and nu <= 0.5: 2(alpha-1) w <= 2 nu fails for w >= 1
        let mut opts = SynthesisOptions::new(2.0, 1);
        opts.beta = 0.0;
        opts.nu_max = 0.5;
        let err = synthesize(&scalar_model(), &scalar_grid(), &opts).unwrap_err();
        assert!(matches!(err, Error::SynthesisInfeasible { index: 0, .. }));
    }

    #[test]
    fn duplicate_grid_points_get_identical_wbar() {
        let mut grid = scalar_grid();
        grid.push(grid[0].clone());
        let opts = SynthesisOptions::new(0.5, 1);
        let table = synthesize(&scalar_model(), &grid, &opts).unwrap();
        assert_eq!(table.samples[0].w_bar, table.samples[1].w_bar);
    }

    fn cartpole_grid(n_points: usize) -> (CartPoleModel, Vec<GridPoint>) {
        use rand::{Rng, SeedableRng};
        let model = CartPoleModel::new(0.4);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(12);
        let grid = (0..n_points)
            .map(|i| {
                let x_d = DVector::from_fn(4, |k, _| {
                    let scale = [2.0, 0.3, 1.0, 0.5][k];
                    rng.random_range(-scale..scale)
                });
                let x = &x_d
                    + DVector::from_fn(4, |k, _| {
                        let scale = [0.5, 0.2, 0.4, 0.3][k];
                        rng.random_range(-scale..scale)
                    });
                GridPoint {
                    x,
                    x_d,
                    u_d: dv(&[rng.random_range(-3.0..3.0)]),
                    t: i as f64 * 0.3,
                }
            })
            .collect();
        (model, grid)
    }

    #[test]
    fn cartpole_synthesis_satisfies_both_lmis_everywhere() {
        let (model, grid) = cartpole_grid(24);
        let table = synthesize(&model, &grid, &SynthesisOptions::new(0.6, 1)).unwrap();
        assert!(table.chi >= 1.0 && table.nu > 0.0);
        for (i, (c, e)) in table.verify_lmi(&model).unwrap().iter().enumerate() {
            assert!(*c >= -1e-6, "point {i} contraction margin {c}");
            assert!(*e >= -1e-6, "point {i} envelope margin {e}");
        }
    }

    #[test]
    fn shrinking_alpha_never_increases_chi() {
        let (model, grid) = cartpole_grid(8);
        let hi = synthesize(&model, &grid, &SynthesisOptions::new(0.6, 1)).unwrap();
        let lo = synthesize(&model, &grid, &SynthesisOptions::new(0.3, 1)).unwrap();
        assert!(
            lo.chi <= hi.chi + 1e-6,
            "chi grew from {} to {} as alpha shrank",
            hi.chi,
            lo.chi
        );
    }

    #[test]
    fn eval_m_at_grid_point_is_exact_inverse() {
        let (model, grid) = cartpole_grid(6);
        let table = synthesize(&model, &grid, &SynthesisOptions::new(0.5, 1)).unwrap();
        let s = &table.samples[2];
        let eval = table.eval_m(&s.x, &s.x_d, &s.u_d, s.t);
        let identity = &eval.m * &s.w_bar / table.nu;
        assert!((identity - DMatrix::identity(4, 4)).norm() < 1e-9);
        assert!(!eval.extrapolated);
    }

    #[test]
    fn random_queries_respect_omega_bounds() {
        use rand::{Rng, SeedableRng};
        let (model, grid) = cartpole_grid(10);
        let table = synthesize(&model, &grid, &SynthesisOptions::new(0.5, 1)).unwrap();
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let x_d = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
            let eval = table.eval_m(&x, &x_d, &dv(&[0.0]), rng.random_range(0.0..3.0));
            let eig = eval.m.symmetric_eigen().eigenvalues;
            assert!(eig.min() >= 1.0 / table.omega_hi() - 1e-9);
            assert!(eig.max() <= 1.0 / table.omega_lo() + 1e-9);
        }
    }

    #[test]
    fn midpoint_blend_stays_within_endpoint_envelope() {
        let w1 = DMatrix::from_diagonal(&dv(&[1.0, 2.0]));
        let w2 = DMatrix::from_diagonal(&dv(&[3.0, 1.5]));
        let samples = vec![
            MetricSample {
                x: dv(&[0.0, 0.0]),
                x_d: dv(&[0.0, 0.0]),
                u_d: dv(&[]),
                t: 0.0,
                w_bar: w1,
            },
            MetricSample {
                x: dv(&[1.0, 0.0]),
                x_d: dv(&[1.0, 0.0]),
                u_d: dv(&[]),
                t: 0.0,
                w_bar: w2,
            },
        ];
        let table = MetricTable::from_parts(
            0.5,
            1.0,
            3.0,
            0.0,
            DMatrix::identity(0, 0),
            samples,
            Interpolation::InverseDistance { k: 2, power: 1 },
            1.0,
        );
        let eval = table.eval_m(&dv(&[0.5, 0.0]), &dv(&[0.5, 0.0]), &dv(&[]), 0.0);
        let eig = eval.m.symmetric_eigen().eigenvalues;
        assert!(eig.min() >= 1.0 / table.omega_hi() - 1e-12);
        assert!(eig.max() <= 1.0 / table.omega_lo() + 1e-12);
    }

    #[test]
    fn mdot_zero_for_constant_table() {
        let samples = vec![MetricSample {
            x: dv(&[0.0]),
            x_d: dv(&[0.0]),
            u_d: dv(&[]),
            t: 0.0,
            w_bar: DMatrix::from_element(1, 1, 2.0),
        }];
        let table = MetricTable::from_parts(
            0.5,
            1.0,
            2.0,
            0.0,
            DMatrix::identity(0, 0),
            samples,
            Interpolation::Nearest,
            1.0,
        );
        let ctx = FlowContext {
            x_dot: dv(&[1.0]),
            x_d_dot: dv(&[0.5]),
            u_d_dot: dv(&[]),
        };
        let mdot = table.eval_mdot(&dv(&[0.1]), &dv(&[0.0]), &dv(&[]), 0.0, &ctx);
        assert_eq!(mdot[(0, 0)], 0.0);
    }

    #[test]
    fn mdot_matches_analytic_slope_on_linear_in_time_table() {
        // Wbar(t) = (1 + t) I on t in [0, 1] via two idw(power 1) anchors;
        // M = nu/(1+t) => dM/dt = -nu/(1+t)^2
        let samples = vec![
            MetricSample {
                x: dv(&[0.0]),
                x_d: dv(&[0.0]),
                u_d: dv(&[]),
                t: 0.0,
                w_bar: DMatrix::from_element(1, 1, 1.0),
            },
            MetricSample {
                x: dv(&[0.0]),
                x_d: dv(&[0.0]),
                u_d: dv(&[]),
                t: 1.0,
                w_bar: DMatrix::from_element(1, 1, 2.0),
            },
        ];
        let nu = 1.5;
        let table = MetricTable::from_parts(
            0.5,
            nu,
            2.0,
            0.0,
            DMatrix::identity(0, 0),
            samples,
            Interpolation::InverseDistance { k: 2, power: 1 },
            1.0,
        );
        let t = 0.4;
        let ctx = FlowContext::frozen(1, 0);
        let mdot = table.eval_mdot(&dv(&[0.0]), &dv(&[0.0]), &dv(&[]), t, &ctx);
        let analytic = -nu / ((1.0 + t) * (1.0 + t));
        assert_abs_diff_eq!(mdot[(0, 0)], analytic, epsilon = 1e-5);
    }

    #[test]
    fn frozen_context_leaves_only_time_transport() {
        // table varying in x only: a frozen context sees zero slope
        let samples = vec![
            MetricSample {
                x: dv(&[0.0]),
                x_d: dv(&[0.0]),
                u_d: dv(&[]),
                t: 0.0,
                w_bar: DMatrix::from_element(1, 1, 1.0),
            },
            MetricSample {
                x: dv(&[1.0]),
                x_d: dv(&[0.0]),
                u_d: dv(&[]),
                t: 0.0,
                w_bar: DMatrix::from_element(1, 1, 2.0),
            },
        ];
        let table = MetricTable::from_parts(
            0.5,
            1.0,
            2.0,
            0.0,
            DMatrix::identity(0, 0),
            samples,
            Interpolation::InverseDistance { k: 2, power: 1 },
            0.0,
        );
        let ctx = FlowContext::frozen(1, 0);
        let mdot = table.eval_mdot(&dv(&[0.5]), &dv(&[0.0]), &dv(&[]), 0.0, &ctx);
        assert_abs_diff_eq!(mdot[(0, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn steady_state_bound_trivials_and_linearity() {
        let samples = vec![MetricSample {
            x: dv(&[0.0]),
            x_d: dv(&[0.0]),
            u_d: dv(&[]),
            t: 0.0,
            w_bar: DMatrix::from_element(1, 1, 1.0),
        }];
        let chi = (3.15f64 * 0.60 / 0.75).powi(2);
        let table = MetricTable::from_parts(
            0.60,
            1.0,
            chi,
            0.0,
            DMatrix::identity(0, 0),
            samples,
            Interpolation::Nearest,
            1.0,
        );
        assert_eq!(table.steady_state_bound(0.0, 0.0, 1.0), 0.0);
        // (b eps + d) = 0.75, alpha = 0.60 gives 3.15
        let bound = table.steady_state_bound(0.35, 0.4, 1.0);
        assert_abs_diff_eq!(bound, 3.15, epsilon = 1e-12);
        let doubled = table.steady_state_bound(0.70, 0.8, 1.0);
        assert_abs_diff_eq!(doubled, 2.0 * bound, epsilon = 1e-12);
    }

    #[test]
    fn far_query_sets_extrapolation_flag() {
        let (model, grid) = cartpole_grid(6);
        let table = synthesize(&model, &grid, &SynthesisOptions::new(0.5, 1)).unwrap();
        let eval = table.eval_m(
            &dv(&[100.0, 0.0, 0.0, 0.0]),
            &dv(&[100.0, 0.0, 0.0, 0.0]),
            &dv(&[0.0]),
            0.0,
        );
        assert!(eval.extrapolated);
    }
    #[test]
    fn metric_csv_roundtrip_is_exact() {
        let (model, grid) = cartpole_grid(5);
        let table = synthesize(&model, &grid, &SynthesisOptions::new(0.5, 1)).unwrap();
        let parsed = MetricTable::from_csv(&table.to_csv()).unwrap();
        assert_eq!(parsed.alpha, table.alpha);
        assert_eq!(parsed.nu, table.nu);
        assert_eq!(parsed.chi, table.chi);
        assert_eq!(parsed.beta, table.beta);
        assert_eq!(parsed.r_weight, table.r_weight);
        assert_eq!(parsed.samples.len(), table.samples.len());
        for (a, b) in parsed.samples.iter().zip(&table.samples) {
            assert_eq!(a.w_bar, b.w_bar);
            assert_eq!(a.x, b.x);
            assert_eq!(a.t, b.t);
        }
    }
}
