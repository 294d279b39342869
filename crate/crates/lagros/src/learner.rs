//! From-scratch multilayer perceptron imitating the robust control: tanh
//! hidden layers, linear output with an optional ReLU clamp, SGD with
//! momentum on the unsquared-norm loss ||u_L - u*|| (squared form behind a
//! flag), input normalization from the training split, and a finite-
//! difference gradient check.

use nalgebra::{DMatrix, DVector};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::demos::Dataset;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputTransform {
    Identity,
    /// Elementwise max(0, .) on the output, for nonnegative input channels.
    ReluClamp,
}

impl OutputTransform {
    fn id(&self) -> &'static str {
        match self {
            OutputTransform::Identity => "identity",
            OutputTransform::ReluClamp => "relu-clamp",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(OutputTransform::Identity),
            "relu-clamp" => Some(OutputTransform::ReluClamp),
            _ => None,
        }
    }
}

/// Feedforward policy: sizes[0] inputs, tanh hidden layers, linear output.
#[derive(Debug, Clone)]
pub struct Policy {
    pub sizes: Vec<usize>,
    /// weights[l] has shape (sizes[l+1], sizes[l]).
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
    pub transform: OutputTransform,
    /// Per-input shift/scale fitted on the training split.
    pub in_mean: DVector<f64>,
    pub in_scale: DVector<f64>,
    /// Output de-standardization: u = raw * out_scale + out_mean. The single
    /// global scale keeps the unsquared-norm loss exactly proportional.
    pub out_mean: DVector<f64>,
    pub out_scale: f64,
    pub seed: u64,
}

impl Policy {
    /// Kaiming-uniform-style init: U(-sqrt(6/fan_in), sqrt(6/fan_in)),
    /// zero biases.
    pub fn init(sizes: &[usize], transform: OutputTransform, seed: u64) -> Self {
        assert!(sizes.len() >= 2);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for l in 0..sizes.len() - 1 {
            let bound = (6.0 / sizes[l] as f64).sqrt();
            weights.push(DMatrix::from_fn(sizes[l + 1], sizes[l], |_, _| {
                rng.random_range(-bound..bound)
            }));
            biases.push(DVector::zeros(sizes[l + 1]));
        }
        Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            transform,
            in_mean: DVector::zeros(sizes[0]),
            in_scale: DVector::from_element(sizes[0], 1.0),
            out_mean: DVector::zeros(*sizes.last().unwrap()),
            out_scale: 1.0,
            seed,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    fn normalize(&self, input: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(input.len(), |i, _| {
            (input[i] - self.in_mean[i]) / self.in_scale[i]
        })
    }

    /// Raw forward pass (before the output transform), with activations for
    /// backprop: returns (per-layer post-activation values, output).
    fn forward_raw(&self, input: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>) {
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(self.normalize(input));
        for l in 0..self.weights.len() {
            let z = &self.weights[l] * acts.last().unwrap() + &self.biases[l];
            if l + 1 == self.weights.len() {
                return (acts, z);
            }
            acts.push(z.map(|v| v.tanh()));
        }
        unreachable!()
    }

    /// Deployed inference: one forward pass, de-standardization, then the
    /// output transform.
    pub fn infer(&self, input: &DVector<f64>) -> DVector<f64> {
        let (_, raw) = self.forward_raw(input);
        let phys = raw * self.out_scale + &self.out_mean;
        let out = match self.transform {
            OutputTransform::Identity => phys,
            OutputTransform::ReluClamp => phys.map(|v| v.max(0.0)),
        };
        debug_assert!(out.iter().all(|v| v.is_finite()));
        if self.transform == OutputTransform::ReluClamp {
            debug_assert!(out.iter().all(|v| *v >= 0.0));
        }
        out
    }

    /// Loss over a batch and parameter gradients, scaled by `loss_scale`.
    /// The loss is the batch mean of ||raw(x) - y|| (unsquared) or of
    /// ||raw(x) - y||^2 when `squared`. Batched matrix form; raw outputs,
    /// no de-standardization.
    pub fn loss_and_grads(
        &self,
        batch: &[(DVector<f64>, DVector<f64>)],
        squared: bool,
        loss_scale: f64,
    ) -> (f64, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let nl = self.weights.len();
        let bsz = batch.len();
        let in_dim = self.sizes[0];
        let out_dim = *self.sizes.last().unwrap();
        // columns are samples
        let mut x = DMatrix::zeros(in_dim, bsz);
        let mut y = DMatrix::zeros(out_dim, bsz);
        for (j, (input, target)) in batch.iter().enumerate() {
            for i in 0..in_dim {
                x[(i, j)] = (input[i] - self.in_mean[i]) / self.in_scale[i];
            }
            y.set_column(j, target);
        }
        // forward with stored activations
        let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(nl);
        acts.push(x);
        let mut raw = DMatrix::zeros(0, 0);
        for l in 0..nl {
            let mut z = &self.weights[l] * acts.last().unwrap();
            for j in 0..bsz {
                for i in 0..z.nrows() {
                    z[(i, j)] += self.biases[l][i];
                }
            }
            if l + 1 == nl {
                raw = z;
            } else {
                acts.push(z.map(|v| v.tanh()));
            }
        }
        // per-sample output sensitivity
        let resid = &raw - &y;
        let scale = loss_scale / bsz as f64;
        let mut loss = 0.0;
        let mut delta = DMatrix::zeros(out_dim, bsz);
        for j in 0..bsz {
            let col = resid.column(j);
            let norm = col.norm();
            if squared {
                loss += norm * norm;
                delta.column_mut(j).copy_from(&(col * 2.0));
            } else {
                loss += norm;
                if norm > 1e-300 {
                    delta.column_mut(j).copy_from(&(col / norm));
                }
            }
        }
        // backprop
        let mut gw: Vec<DMatrix<f64>> = Vec::with_capacity(nl);
        let mut gb: Vec<DVector<f64>> = Vec::with_capacity(nl);
        for w in &self.weights {
            gw.push(DMatrix::zeros(w.nrows(), w.ncols()));
            gb.push(DVector::zeros(w.nrows()));
        }
        for l in (0..nl).rev() {
            gw[l] = &delta * acts[l].transpose() * scale;
            gb[l] = DVector::from_fn(delta.nrows(), |i, _| delta.row(i).sum() * scale);
            if l > 0 {
                let upstream = self.weights[l].transpose() * &delta;
                let a = &acts[l];
                delta = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| {
                    upstream[(i, j)] * (1.0 - a[(i, j)] * a[(i, j)])
                });
            }
        }
        (loss * scale, gw, gb)
    }

    /// Versioned text serialization (dims header + row-major CSV blocks).
    pub fn to_text(&self) -> String {
        let mut out = String::from("# lagros-policy v1\n");
        out.push_str(&format!(
            "sizes = {}\n",
            self.sizes
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        out.push_str(&format!("transform = {}\n", self.transform.id()));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("in_mean = {}\n", join(self.in_mean.iter())));
        out.push_str(&format!("in_scale = {}\n", join(self.in_scale.iter())));
        out.push_str(&format!("out_mean = {}\n", join(self.out_mean.iter())));
        out.push_str(&format!("out_scale = {}\n", self.out_scale));
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push_str(&format!("layer {l} bias = {}\n", join(b.iter())));
            for r in 0..w.nrows() {
                out.push_str(&format!("layer {l} row {r} = {}\n", join(w.row(r).iter())));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| Error::Artifact {
            path: "<policy>".into(),
            detail: d,
        };
        let mut sizes: Vec<usize> = Vec::new();
        let mut transform = OutputTransform::Identity;
        let mut seed = 0u64;
        let mut in_mean = None;
        let mut in_scale = None;
        let mut out_mean: Option<DVector<f64>> = None;
        let mut out_scale = 1.0f64;
        let mut weights: Vec<DMatrix<f64>> = Vec::new();
        let mut biases: Vec<DVector<f64>> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key = value, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            let parse_vec = |v: &str| -> Result<Vec<f64>> {
                v.split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(e.to_string()))
            };
            match key.split_whitespace().collect::<Vec<_>>().as_slice() {
                ["sizes"] => {
                    sizes = value
                        .split(',')
                        .map(|x| x.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(e.to_string()))?;
                    for l in 0..sizes.len() - 1 {
                        weights.push(DMatrix::zeros(sizes[l + 1], sizes[l]));
                        biases.push(DVector::zeros(sizes[l + 1]));
                    }
                }
                ["transform"] => {
                    transform = OutputTransform::parse(value)
                        .ok_or_else(|| bad(format!("unknown transform `{value}`")))?;
                }
                ["seed"] => seed = value.parse().map_err(|_| bad("bad seed".into()))?,
                ["in_mean"] => in_mean = Some(DVector::from_vec(parse_vec(value)?)),
                ["in_scale"] => in_scale = Some(DVector::from_vec(parse_vec(value)?)),
                ["out_mean"] => out_mean = Some(DVector::from_vec(parse_vec(value)?)),
                ["out_scale"] => {
                    out_scale = value.parse().map_err(|_| bad("bad out_scale".into()))?
                }
                ["layer", l, "bias"] => {
                    let l: usize = l.parse().map_err(|_| bad("bad layer index".into()))?;
                    biases[l] = DVector::from_vec(parse_vec(value)?);
                }
                ["layer", l, "row", r] => {
                    let l: usize = l.parse().map_err(|_| bad("bad layer index".into()))?;
                    let r: usize = r.parse().map_err(|_| bad("bad row index".into()))?;
                    let vals = parse_vec(value)?;
                    for (c, v) in vals.iter().enumerate() {
                        weights[l][(r, c)] = *v;
                    }
                }
                _ => return Err(bad(format!("unknown key `{key}`"))),
            }
        }
        if sizes.is_empty() {
            return Err(bad("missing sizes".into()));
        }
        let out_dim = *sizes.last().unwrap();
        Ok(Self {
            in_mean: in_mean.ok_or_else(|| bad("missing in_mean".into()))?,
            in_scale: in_scale.ok_or_else(|| bad("missing in_scale".into()))?,
            out_mean: out_mean.unwrap_or_else(|| DVector::zeros(out_dim)),
            out_scale,
            sizes,
            weights,
            biases,
            transform,
            seed,
        })
    }
}

fn join<'a>(it: impl Iterator<Item = &'a f64>) -> String {
    it.map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Multiplicative decay applied to the learning rate each epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    /// Train fraction; the rest is the held-out test split.
    pub split: f64,
    pub squared_loss: bool,
    pub transform: OutputTransform,
    pub seed: u64,
}

impl Default for TrainOptions {
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
            transform: OutputTransform::Identity,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub final_train_loss: f64,
    pub test_mean: f64,
    pub test_p95: f64,
    pub test_max: f64,
    /// The statistic plugged into the tube: 95th percentile of the held-out
    /// deployment error ||u_L - u*|| (max is reported alongside).
    pub eps_hat: f64,
    pub train_samples: usize,
    pub test_samples: usize,
}

/// Policy input layout: [x, o_ell, t].
pub fn policy_input(x: &DVector<f64>, o_ell: &DVector<f64>, t: f64) -> DVector<f64> {
    let mut v = DVector::zeros(x.len() + o_ell.len() + 1);
    v.rows_mut(0, x.len()).copy_from(x);
    v.rows_mut(x.len(), o_ell.len()).copy_from(o_ell);
    v[x.len() + o_ell.len()] = t;
    v
}

/// Label selector for training: the robust control (default) or the nominal
/// input (naive-imitation baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    RobustControl,
    NominalInput,
}

pub fn train(dataset: &Dataset, label: LabelKind, opts: &TrainOptions) -> Result<(Policy, TrainReport)> {
    if dataset.samples.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    let pairs: Vec<(DVector<f64>, DVector<f64>)> = dataset
        .samples
        .iter()
        .map(|s| {
            let input = policy_input(&s.x, &s.o_ell, s.t);
            let target = match label {
                LabelKind::RobustControl => s.u_star.clone(),
                LabelKind::NominalInput => s.u_d.clone(),
            };
            (input, target)
        })
        .collect();
    train_pairs(&pairs, opts)
}

/// Core training loop over explicit (input, target) pairs.
pub fn train_pairs(
    pairs: &[(DVector<f64>, DVector<f64>)],
    opts: &TrainOptions,
) -> Result<(Policy, TrainReport)> {
    let in_dim = pairs[0].0.len();
    let out_dim = pairs[0].1.len();
    let mut sizes = vec![in_dim];
    sizes.extend(&opts.hidden);
    sizes.push(out_dim);

    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((pairs.len() as f64) * opts.split).round().max(1.0) as usize;
    let n_train = n_train.min(pairs.len());
    let (train_idx, test_idx) = order.split_at(n_train);

    let mut policy = Policy::init(&sizes, opts.transform, opts.seed);
    // input normalization from the training split
    let mut mean = DVector::zeros(in_dim);
    for &i in train_idx {
        mean += &pairs[i].0;
    }
    mean /= n_train as f64;
    let mut var = DVector::zeros(in_dim);
    for &i in train_idx {
        let d = &pairs[i].0 - &mean;
        var += d.component_mul(&d);
    }
    var /= n_train as f64;
    policy.in_mean = mean;
    policy.in_scale = var.map(|v| v.sqrt().max(1e-6));
    // target standardization: per-channel mean, one global scale, so the
    // training loss stays exactly proportional to the physical-unit loss
    let mut out_mean = DVector::zeros(out_dim);
    for &i in train_idx {
        out_mean += &pairs[i].1;
    }
    out_mean /= n_train as f64;
    let mut out_var = 0.0;
    for &i in train_idx {
        out_var += (&pairs[i].1 - &out_mean).norm_squared();
    }
    let out_scale = (out_var / (n_train * out_dim) as f64).sqrt().max(1e-9);
    let std_pairs: Vec<(DVector<f64>, DVector<f64>)> = pairs
        .iter()
        .map(|(x, y)| (x.clone(), (y - &out_mean) / out_scale))
        .collect();
    let pairs = &std_pairs;

    let mut vel_w: Vec<DMatrix<f64>> = policy
        .weights
        .iter()
        .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
        .collect();
    let mut vel_b: Vec<DVector<f64>> = policy.biases.iter().map(|b| DVector::zeros(b.len())).collect();

    let mut lr = opts.lr;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut shuffled: Vec<usize> = train_idx.to_vec();
    for _epoch in 0..opts.epochs {
        shuffled.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0.0f64;
        for chunk in shuffled.chunks(opts.batch) {
            let batch: Vec<(DVector<f64>, DVector<f64>)> =
                chunk.iter().map(|&i| pairs[i].clone()).collect();
            let (loss, gw, gb) = policy.loss_and_grads(&batch, opts.squared_loss, 1.0);
            if !loss.is_finite() {
                return Err(Error::Training(format!(
                    "loss diverged to {loss} (lr too large?)"
                )));
            }
            epoch_loss += loss;
            batches += 1.0;
            for l in 0..policy.weights.len() {
                vel_w[l] = &vel_w[l] * opts.momentum - &gw[l] * lr;
                vel_b[l] = &vel_b[l] * opts.momentum - &gb[l] * lr;
                policy.weights[l] += &vel_w[l];
                policy.biases[l] += &vel_b[l];
            }
        }
        epoch_losses.push(epoch_loss / batches.max(1.0));
        lr *= opts.lr_decay;
    }

    policy.out_mean = out_mean;
    policy.out_scale = out_scale;
    // held-out deployment error in physical units (after the transform)
    let eval_errors = |idx: &[usize]| -> Vec<f64> {
        idx.iter()
            .map(|&i| {
                let phys_target = &pairs[i].1 * policy.out_scale + &policy.out_mean;
                (policy.infer(&pairs[i].0) - phys_target).norm()
            })
            .collect()
    };
    let test_errors = if test_idx.is_empty() {
        eval_errors(train_idx)
    } else {
        eval_errors(test_idx)
    };
    let report = TrainReport {
        epochs: opts.epochs,
        final_train_loss: *epoch_losses.last().unwrap_or(&f64::NAN),
        epoch_losses,
        test_mean: mean_of(&test_errors),
        test_p95: percentile(&test_errors, 0.95),
        test_max: test_errors.iter().fold(0.0f64, |a, &b| a.max(b)),
        eps_hat: percentile(&test_errors, 0.95),
        train_samples: n_train,
        test_samples: test_idx.len(),
    };
    Ok((policy, report))
}

/// Statistic of the deployment error over a held-out set; the 95th
/// percentile feeds the tube profile downstream.
pub fn estimate_epsilon(policy: &Policy, pairs: &[(DVector<f64>, DVector<f64>)]) -> f64 {
    let errors: Vec<f64> = pairs
        .iter()
        .map(|(x, y)| (policy.infer(x) - y).norm())
        .collect();
    percentile(&errors, 0.95)
}

fn mean_of(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// kth-smallest at ceil(q n): exact order statistic, no interpolation.
pub fn percentile(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[k - 1]
}

/// Backprop vs central finite differences over every parameter; returns the
/// max relative error.
pub fn grad_check(policy: &Policy, batch: &[(DVector<f64>, DVector<f64>)], squared: bool) -> f64 {
    let h = 1e-5;
    let (_, gw, gb) = policy.loss_and_grads(batch, squared, 1.0);
    let mut worst = 0.0f64;
    let mut check = |analytic: f64, mut bump: Box<dyn FnMut(&mut Policy, f64)>| {
        let mut plus = policy.clone();
        bump(&mut plus, h);
        let mut minus = policy.clone();
        bump(&mut minus, -h);
        let (lp, _, _) = plus.loss_and_grads(batch, squared, 1.0);
        let (lm, _, _) = minus.loss_and_grads(batch, squared, 1.0);
        let numeric = (lp - lm) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    };
    for l in 0..policy.weights.len() {
        for r in 0..policy.weights[l].nrows() {
            for c in 0..policy.weights[l].ncols() {
                check(
                    gw[l][(r, c)],
                    Box::new(move |p: &mut Policy, eps: f64| {
                        p.weights[l][(r, c)] += eps;
                    }),
                );
            }
        }
        for r in 0..policy.biases[l].len() {
            check(
                gb[l][r],
                Box::new(move |p: &mut Policy, eps: f64| {
                    p.biases[l][r] += eps;
                }),
            );
        }
    }
    worst
}
