//! Small dense semidefinite programming: minimize a linear objective subject
//! to linear matrix inequalities, sized for metric-synthesis instances
//! (block sizes up to ~12, up to ~40 scalar variables).
//!
//! Algorithm: log-det barrier interior point with damped Newton steps and a
//! big-M phase-I for initialization / infeasibility detection. The duality
//! gap of the central point certifies optimality.

use nalgebra::{Cholesky, DMatrix, DVector};

/// One affine matrix block F0 + sum_i y_i F_i required to be PSD. Only the
/// variables listed in `vars` participate; `coeffs[k]` multiplies
/// `y[vars[k]]`.
#[derive(Debug, Clone)]
pub struct LmiBlock {
    pub dim: usize,
    pub f0: DMatrix<f64>,
    pub vars: Vec<usize>,
    pub coeffs: Vec<DMatrix<f64>>,
}

impl LmiBlock {
    pub fn new(f0: DMatrix<f64>, vars: Vec<usize>, coeffs: Vec<DMatrix<f64>>) -> Self {
        let dim = f0.nrows();
        assert_eq!(f0.ncols(), dim);
        assert_eq!(vars.len(), coeffs.len());
        for c in &coeffs {
            assert_eq!(c.nrows(), dim);
            assert_eq!(c.ncols(), dim);
            debug_assert!((c - c.transpose()).norm() < 1e-10 * (1.0 + c.norm()));
        }
        Self {
            dim,
            f0,
            vars,
            coeffs,
        }
    }

    pub fn eval(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.f0.clone();
        for (idx, c) in self.vars.iter().zip(self.coeffs.iter()) {
            m += c * y[*idx];
        }
        m
    }
}

/// min c^T y subject to every block being PSD. Box bounds become 1x1 blocks.
#[derive(Debug, Clone, Default)]
pub struct LmiProblem {
    pub variable_count: usize,
    pub objective: Vec<f64>,
    pub blocks: Vec<LmiBlock>,
}

impl LmiProblem {
    pub fn new(variable_count: usize, objective: Vec<f64>) -> Self {
        assert_eq!(objective.len(), variable_count);
        Self {
            variable_count,
            objective,
            blocks: Vec::new(),
        }
    }

    pub fn add_block(&mut self, block: LmiBlock) {
        for &v in &block.vars {
            assert!(v < self.variable_count);
        }
        self.blocks.push(block);
    }

    /// y[i] >= lo as a 1x1 block.
    pub fn add_lower_bound(&mut self, i: usize, lo: f64) {
        self.add_block(LmiBlock::new(
            DMatrix::from_element(1, 1, -lo),
            vec![i],
            vec![DMatrix::from_element(1, 1, 1.0)],
        ));
    }

    /// y[i] <= hi as a 1x1 block.
    pub fn add_upper_bound(&mut self, i: usize, hi: f64) {
        self.add_block(LmiBlock::new(
            DMatrix::from_element(1, 1, hi),
            vec![i],
            vec![DMatrix::from_element(1, 1, -1.0)],
        ));
    }

    /// Smallest eigenvalue over all blocks at `y`; negative means infeasible
    /// by that margin.
    pub fn check_feasible(&self, y: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                if b.dim == 1 {
                    b.eval(y)[(0, 0)]
                } else {
                    b.eval(y).symmetric_eigen().eigenvalues.min()
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn total_block_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub y: DVector<f64>,
    pub objective: f64,
    pub status: SdpStatus,
    /// Most negative eigenvalue across blocks at `y` (positive = strict interior).
    pub violation: f64,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SdpOptions {
    pub feas_tol: f64,
    pub gap_tol: f64,
    pub max_iter: usize,
}

impl Default for SdpOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-7,
            gap_tol: 1e-6,
            max_iter: 200,
        }
    }
}

pub fn solve(problem: &LmiProblem, options: &SdpOptions) -> SdpSolution {
    let v = problem.variable_count;
    let y0 = DVector::zeros(v);

    // Phase I unless y = 0 is already strictly interior.
    let margin = problem.check_feasible(&y0);
    let mut iters = 0usize;
    let start = if margin > 10.0 * options.feas_tol {
        y0
    } else {
        match phase_one(problem, &y0, options, &mut iters) {
            Some(y) => y,
            None => {
                let violation = problem.check_feasible(&y0);
                return SdpSolution {
                    y: y0,
                    objective: f64::NAN,
                    status: SdpStatus::Infeasible,
                    violation,
                    newton_iterations: iters,
                };
            }
        }
    };

    let c = DVector::from_vec(problem.objective.clone());
    let (y, converged) = barrier_minimize(problem, &c, start, options, &mut iters);
    let violation = problem.check_feasible(&y);
    SdpSolution {
        objective: c.dot(&y),
        status: if converged {
            SdpStatus::Optimal
        } else {
            SdpStatus::MaxIterations
        },
        violation,
        y,
        newton_iterations: iters,
    }
}

/// Augmented problem min s s.t. F_b(y) + s I >= 0; returns a strictly
/// feasible y for the original problem or None.
fn phase_one(
    problem: &LmiProblem,
    y0: &DVector<f64>,
    options: &SdpOptions,
    iters: &mut usize,
) -> Option<DVector<f64>> {
    let v = problem.variable_count;
    let mut aug = LmiProblem::new(v + 1, {
        let mut c = vec![0.0; v + 1];
        c[v] = 1.0;
        c
    });
    for b in &problem.blocks {
        let mut vars = b.vars.clone();
        let mut coeffs = b.coeffs.clone();
        vars.push(v);
        coeffs.push(DMatrix::identity(b.dim, b.dim));
        aug.add_block(LmiBlock::new(b.f0.clone(), vars, coeffs));
    }
    // keep phase I bounded
    let s0 = (-problem.check_feasible(y0)).max(0.0) + 1.0;
    aug.add_upper_bound(v, 10.0 * s0 + 10.0);
    aug.add_lower_bound(v, -1.0);

    let mut start = DVector::zeros(v + 1);
    start.rows_mut(0, v).copy_from(y0);
    start[v] = s0;
    debug_assert!(aug.check_feasible(&start) > 0.0);

    let c = DVector::from_vec(aug.objective.clone());
    let target = -10.0 * options.feas_tol;
    let (y_aug, _) = barrier_minimize_until(problem_ref(&aug), &c, start, options, iters, |y| {
        y[c.len() - 1] < target
    });
    if y_aug[v] < -options.feas_tol {
        Some(y_aug.rows(0, v).into_owned())
    } else {
        None
    }
}

fn problem_ref(p: &LmiProblem) -> &LmiProblem {
    p
}

fn barrier_minimize(
    problem: &LmiProblem,
    c: &DVector<f64>,
    start: DVector<f64>,
    options: &SdpOptions,
    iters: &mut usize,
) -> (DVector<f64>, bool) {
    barrier_minimize_until(problem, c, start, options, iters, |_| false)
}

/// Central-path following; `stop_early` aborts once satisfied (phase I).
fn barrier_minimize_until(
    problem: &LmiProblem,
    c: &DVector<f64>,
    start: DVector<f64>,
    options: &SdpOptions,
    iters: &mut usize,
    stop_early: impl Fn(&DVector<f64>) -> bool,
) -> (DVector<f64>, bool) {
    let v = problem.variable_count;
    let m_total = problem.total_block_dim() as f64;
    let mut y = start;
    let mut t = 1.0;
    let c_scale = c.norm().max(1.0);
    loop {
        // Newton on t*c^T y - sum log det F_b(y)
        let mut converged_stage = false;
        for _ in 0..60 {
            if *iters >= options.max_iter {
                return (y, false);
            }
            *iters += 1;
            let Some((grad, hess)) = barrier_derivatives(problem, &y, c, t) else {
                return (y, false);
            };
            let step = solve_regularized(&hess, &grad, v);
            let decrement = grad.dot(&step);
            // backtracking: stay strictly inside the cone, Armijo on f
            let f_cur = barrier_value(problem, &y, c, t);
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &y + &step * alpha;
                if problem.check_feasible_cholesky(&cand) {
                    let f_new = barrier_value(problem, &cand, c, t);
                    if f_new <= f_cur - 1e-4 * alpha * decrement.abs() || f_new < f_cur {
                        y = cand;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if stop_early(&y) {
                return (y, true);
            }
            if !accepted || decrement.abs() < 1e-10 * (1.0 + t * c_scale) {
                converged_stage = true;
                break;
            }
        }
        let _ = converged_stage;
        if m_total / t < options.gap_tol {
            return (y, true);
        }
        t *= 10.0;
    }
}

impl LmiProblem {
    fn check_feasible_cholesky(&self, y: &DVector<f64>) -> bool {
        self.blocks.iter().all(|b| {
            let m = b.eval(y);
            if b.dim == 1 {
                m[(0, 0)] > 0.0
            } else {
                Cholesky::new(m).is_some()
            }
        })
    }
}

fn barrier_value(problem: &LmiProblem, y: &DVector<f64>, c: &DVector<f64>, t: f64) -> f64 {
    let mut val = t * c.dot(y);
    for b in &problem.blocks {
        let m = b.eval(y);
        if b.dim == 1 {
            if m[(0, 0)] <= 0.0 {
                return f64::INFINITY;
            }
            val -= m[(0, 0)].ln();
        } else {
            match Cholesky::new(m) {
                Some(ch) => {
                    let ld: f64 = ch.l().diagonal().iter().map(|d| d.ln()).sum();
                    val -= 2.0 * ld;
                }
                None => return f64::INFINITY,
            }
        }
    }
    val
}

/// Gradient and Hessian of t c^T y - sum log det F_b(y). None when any block
/// leaves the cone.
fn barrier_derivatives(
    problem: &LmiProblem,
    y: &DVector<f64>,
    c: &DVector<f64>,
    t: f64,
) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let v = problem.variable_count;
    let mut grad = c * t;
    let mut hess = DMatrix::zeros(v, v);
    for b in &problem.blocks {
        let m = b.eval(y);
        if b.dim == 1 {
            let s = m[(0, 0)];
            if s <= 0.0 {
                return None;
            }
            for (k, &vk) in b.vars.iter().enumerate() {
                let a = b.coeffs[k][(0, 0)];
                grad[vk] -= a / s;
                for (l, &vl) in b.vars.iter().enumerate() {
                    hess[(vk, vl)] += a * b.coeffs[l][(0, 0)] / (s * s);
                }
            }
            continue;
        }
        let ch = Cholesky::new(m)?;
        let inv = ch.inverse();
        // cache S F_i for the block's variables
        let prods: Vec<DMatrix<f64>> = b.coeffs.iter().map(|f| &inv * f).collect();
        for (k, &vk) in b.vars.iter().enumerate() {
            grad[vk] -= prods[k].trace();
            for (l, &vl) in b.vars.iter().enumerate().skip(k) {
                let hkl = (&prods[k] * &prods[l]).trace();
                hess[(vk, vl)] += hkl;
                if vl != vk {
                    hess[(vl, vk)] += hkl;
                }
            }
        }
    }
    Some((grad, hess))
}

fn solve_regularized(hess: &DMatrix<f64>, grad: &DVector<f64>, v: usize) -> DVector<f64> {
    let mut reg = 0.0;
    for _ in 0..12 {
        let h = hess + DMatrix::identity(v, v) * reg;
        if let Some(ch) = Cholesky::new(h) {
            return -ch.solve(grad);
        }
        reg = if reg == 0.0 { 1e-12 } else { reg * 100.0 };
    }
    -grad.clone()
}
