//! Unsupervised training on dispatched generation cost, inference with a
//! feasibility fallback, and evaluation against the ED / DC-OPF / DC-OTS
//! baselines.

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff_opf::{self, DiffOpfError};
use crate::dispatch::{solve_dcopf, solve_ed, solve_ots_exact, DispatchError, DispatchSolution, OtsBudget, OtsMode, OtsOptions, SwitchVector};
use crate::network::Network;
use crate::neural::{adamw_step, backprop, init_params, mlp_forward, AdamWState, Gradients, MlpParams, NeuralError};
use crate::scenarios::{Dataset, ScenarioError, Split};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("every forward pass in epoch {epoch} was infeasible")]
    AllForwardsInfeasible { epoch: usize },
    #[error("fallback topology (all lines closed) is infeasible for this demand")]
    FallbackAlsoInfeasible,
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dataset(#[from] ScenarioError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    DiffOpf(#[from] DiffOpfError),
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eta: f64,
    pub seed: u64,
    /// Hidden width; `None` picks 64 up to 100 buses and 128 above.
    pub hidden: Option<usize>,
    /// Quadratic cost added to every generator during training when the
    /// cost data is purely linear.
    pub lp_regularizer_eps: f64,
    pub threshold: f64,
    /// Zero-weight head with bias `9 / eta`. Turning it off gives the
    /// random-head baseline.
    pub custom_head: bool,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 25,
            lr: 5e-5,
            weight_decay: 1e-2,
            eta: 3.0,
            seed: 0,
            hidden: None,
            lp_regularizer_eps: 1e-4,
            threshold: 0.5,
            custom_head: true,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn hidden_width(&self, n_bus: usize) -> usize {
        self.hidden.unwrap_or(if n_bus <= 100 { 64 } else { 128 })
    }

    fn validate(&self, n_train: usize) -> Result<(), TrainError> {
        let positive = [("lr", self.lr), ("eta", self.eta)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(TrainError::Invalid(format!("{name} = {v} must be positive")));
        }
        if !(self.weight_decay >= 0.0) || !(self.lp_regularizer_eps >= 0.0) {
            return Err(TrainError::Invalid("weight decay and regularizer must be nonnegative".into()));
        }
        if self.batch_size == 0 || self.batch_size > n_train {
            return Err(TrainError::Invalid(format!(
                "batch size {} with {n_train} training samples",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based epoch index.
    pub epoch: usize,
    /// Mean relaxed dispatch cost ($/h) over feasible training forwards.
    pub train_loss: f64,
    /// Mean binarized-inference cost ($/h) on the validation split after
    /// the epoch.
    pub val_cost: f64,
    pub infeasible: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Validation cost of the initial parameters.
    pub initial_val_cost: f64,
    /// Epoch whose parameters were returned; `None` means the initial ones.
    pub selected_epoch: Option<usize>,
}

/// Network used for the training loss: adds the small quadratic term when
/// every cost is linear.
pub fn training_network(net: &Network, eps: f64) -> Network {
    if net.cost.is_linear() && eps > 0.0 {
        net.with_min_quadratic_cost(eps)
    } else {
        net.clone()
    }
}

/// Initial parameters for `net`, with input statistics from `train`.
pub fn initial_params(net: &Network, train: &[&[f64]], cfg: &TrainConfig) -> Result<MlpParams, TrainError> {
    let h = cfg.hidden_width(net.n_bus);
    let mut params = init_params(cfg.seed, &[net.n_bus, h, h, net.n_line], cfg.eta, cfg.custom_head)?;
    let (mean, std) = column_stats(train, net.n_bus);
    params.set_normalization(mean, std)?;
    Ok(params)
}

fn column_stats(rows: &[&[f64]], n: usize) -> (Vec<f64>, Vec<f64>) {
    if rows.is_empty() {
        return (vec![0.0; n], vec![1.0; n]);
    }
    let k = rows.len() as f64;
    let mean: Vec<f64> = (0..n).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / k).collect();
    let std = (0..n)
        .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / k).sqrt())
        .collect();
    (mean, std)
}

/// Relaxed forward and gradient for one sample. `None` when the relaxed
/// DC-OPF is infeasible.
fn sample_step(params: &MlpParams, net: &Network, demand: &[f64]) -> Result<Option<(f64, Gradients)>, TrainError> {
    let (z, cache) = mlp_forward(params, demand)?;
    let zs = SwitchVector::relaxed(z)?;
    let sol = match diff_opf::forward(net, demand, &zs) {
        Ok(s) => s,
        Err(DiffOpfError::InfeasibleForward) => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    let loss = net.cost.eval(&sol.p_g);
    let g = diff_opf::backward(net, demand, &zs, &sol, &net.cost.grad(&sol.p_g))?;
    Ok(Some((loss, backprop(params, &cache, &g.dcost_dz)?)))
}

fn map_samples<T: Send>(
    samples: &[&[f64]],
    deterministic: bool,
    f: impl Fn(&[f64]) -> Result<T, TrainError> + Sync + Send,
) -> Result<Vec<T>, TrainError> {
    if deterministic {
        samples.iter().map(|d| f(d)).collect()
    } else {
        samples.par_iter().map(|d| f(d)).collect()
    }
}

/// Relaxed-forward costs of `params` on each sample (`None` = infeasible),
/// without any update.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedPass {
    pub costs: Vec<Option<f64>>,
    pub infeasible: usize,
}

impl RelaxedPass {
    pub fn mean_cost(&self) -> Option<f64> {
        let ok: Vec<f64> = self.costs.iter().flatten().copied().collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }
}

pub fn relaxed_pass(params: &MlpParams, net: &Network, samples: &[&[f64]]) -> Result<RelaxedPass, TrainError> {
    let costs = map_samples(samples, true, |d| {
        let (z, _) = mlp_forward(params, d)?;
        match diff_opf::forward(net, d, &SwitchVector::relaxed(z)?) {
            Ok(s) => Ok(Some(net.cost.eval(&s.p_g))),
            Err(DiffOpfError::InfeasibleForward) => Ok(None),
            Err(e) => Err(e.into()),
        }
    })?;
    let infeasible = costs.iter().filter(|c| c.is_none()).count();
    Ok(RelaxedPass { costs, infeasible })
}

/// Trains the switching network on the dataset's training split and returns
/// the parameters with the lowest validation cost (the initial parameters
/// included).
pub fn train(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<(MlpParams, TrainHistory), TrainError> {
    data.check_network(net)?;
    let train_set = data.subset(Split::Train);
    let val_set = data.subset(Split::Val);
    cfg.validate(train_set.len())?;
    let loss_net = training_network(net, cfg.lp_regularizer_eps);

    let mut params = initial_params(net, &train_set, cfg)?;
    let mut opt = AdamWState::new(params.n_params(), cfg.lr, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a11);

    let mut history = TrainHistory {
        initial_val_cost: validation_cost(&params, net, &val_set, cfg)?,
        ..TrainHistory::default()
    };
    let mut best = (history.initial_val_cost, params.clone());

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut n_ok, mut infeasible) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&[f64]> = batch.iter().map(|&i| train_set[i]).collect();
            let results = map_samples(&samples, cfg.deterministic, |d| sample_step(&params, &loss_net, d))?;
            let mut acc = Gradients::zeros_like(&params);
            let mut count = 0usize;
            for r in results {
                match r {
                    Some((loss, g)) => {
                        loss_sum += loss;
                        count += 1;
                        acc.add_scaled(&g, 1.0);
                    }
                    None => infeasible += 1,
                }
            }
            if count > 0 {
                let mut mean = Gradients::zeros_like(&params);
                mean.add_scaled(&acc, 1.0 / count as f64);
                adamw_step(&mut params, &mean, &mut opt)?;
                n_ok += count;
            }
        }
        if n_ok == 0 {
            return Err(TrainError::AllForwardsInfeasible { epoch });
        }
        let val_cost = validation_cost(&params, net, &val_set, cfg)?;
        if val_cost < best.0 {
            best = (val_cost, params.clone());
            history.selected_epoch = Some(epoch);
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_ok as f64,
            val_cost,
            infeasible,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok((best.1, history))
}

fn validation_cost(params: &MlpParams, net: &Network, val: &[&[f64]], cfg: &TrainConfig) -> Result<f64, TrainError> {
    if val.is_empty() {
        return Ok(f64::NAN);
    }
    let costs = map_samples(val, cfg.deterministic, |d| Ok(infer(params, net, d, cfg.threshold)?.dispatch.objective))?;
    Ok(costs.iter().sum::<f64>() / costs.len() as f64)
}

/// `z_i = 1` exactly when `z_hat_i >= threshold`.
pub fn binarize(z_hat: &[f64], threshold: f64) -> SwitchVector {
    let closed: Vec<bool> = z_hat.iter().map(|&v| v >= threshold).collect();
    SwitchVector::from_bools(&closed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub z: SwitchVector,
    pub dispatch: DispatchSolution,
    pub used_fallback: bool,
}

/// Binarized topology and its dispatch. Falls back to all lines closed when
/// the predicted topology is infeasible.
pub fn infer(params: &MlpParams, net: &Network, demand: &[f64], threshold: f64) -> Result<Inference, TrainError> {
    let (z_hat, _) = mlp_forward(params, demand)?;
    let z = binarize(&z_hat, threshold);
    let sol = solve_dcopf(net, demand, &z)?;
    if sol.is_optimal() {
        return Ok(Inference {
            z,
            dispatch: sol,
            used_fallback: false,
        });
    }
    let z = SwitchVector::all_closed(net.n_line);
    let sol = solve_dcopf(net, demand, &z)?;
    if !sol.is_optimal() {
        return Err(TrainError::FallbackAlsoInfeasible);
    }
    Ok(Inference {
        z,
        dispatch: sol,
        used_fallback: true,
    })
}

/// Counts of `z_hat` values in `bins` equal-width bins over `[0, 1]`.
pub fn zhat_histogram(params: &MlpParams, samples: &[&[f64]], bins: usize) -> Result<Vec<usize>, TrainError> {
    let mut counts = vec![0; bins.max(1)];
    for d in samples {
        let (z, _) = mlp_forward(params, d)?;
        for v in z {
            let b = ((v * counts.len() as f64) as usize).min(counts.len() - 1);
            counts[b] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Run exact DC-OTS with this budget per sample; `None` skips it.
    pub ots_budget: Option<OtsBudget>,
    pub ots_mode: OtsMode,
    pub threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ots_budget: None,
            ots_mode: OtsMode::BranchAndBound,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub ed: f64,
    pub opf: f64,
    /// Proven-optimal OTS cost; `None` when skipped or not solved in budget.
    pub ots: Option<f64>,
    pub dadnn: Option<f64>,
    pub used_fallback: bool,
    /// Largest violation of the switching constraints by the DA-DNN pair.
    pub dadnn_violation: Option<f64>,
    pub ed_ms: f64,
    pub opf_ms: f64,
    pub ots_ms: Option<f64>,
    pub dadnn_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub mean_cost: Option<f64>,
    pub median_ms: Option<f64>,
    /// True when at least one sample was not solved (the column is "NS").
    pub not_solved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ed: MethodSummary,
    pub opf: MethodSummary,
    pub ots: Option<MethodSummary>,
    pub dadnn: Option<MethodSummary>,
    pub fallback_count: usize,
    pub samples: Vec<SampleRecord>,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64() * 1e3)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn summarize(costs: Vec<Option<f64>>, mut times: Vec<f64>) -> MethodSummary {
    let not_solved = costs.iter().any(|c| c.is_none());
    let mean_cost = (!not_solved && !costs.is_empty()).then(|| costs.iter().flatten().sum::<f64>() / costs.len() as f64);
    MethodSummary {
        mean_cost,
        median_ms: median(&mut times),
        not_solved,
    }
}

/// Evaluates the baselines and (when `params` is given) the trained model
/// on one split. Samples are processed sequentially so timings are not
/// distorted by contention.
pub fn evaluate(
    params: Option<&MlpParams>,
    net: &Network,
    data: &Dataset,
    split: Split,
    opts: &EvalOptions,
) -> Result<EvalReport, TrainError> {
    data.check_network(net)?;
    let samples = data.subset(split);
    if samples.is_empty() {
        return Err(TrainError::Invalid(format!("split '{}' is empty", split.as_str())));
    }
    let closed = SwitchVector::all_closed(net.n_line);
    let mut records = Vec::with_capacity(samples.len());
    for (index, d) in samples.iter().enumerate() {
        let (ed, ed_ms) = timed(|| solve_ed(net, d));
        let (opf, opf_ms) = timed(|| solve_dcopf(net, d, &closed));
        let opf = opf?;
        if !opf.is_optimal() {
            return Err(TrainError::FallbackAlsoInfeasible);
        }
        let (ots, ots_ms) = match opts.ots_budget {
            Some(budget) => {
                let o = OtsOptions { budget, max_open: None };
                let (r, ms) = timed(|| solve_ots_exact(net, d, opts.ots_mode, &o));
                let r = r?;
                (r.proved_optimal.then_some(r.objective), Some(ms))
            }
            None => (None, None),
        };
        let (dadnn, dadnn_ms, used_fallback, violation) = match params {
            Some(p) => {
                let (inf, ms) = timed(|| infer(p, net, d, opts.threshold));
                let inf = inf?;
                let v = crate::dispatch::ots_violation(net, d, inf.z.values(), &inf.dispatch.p_g, &inf.dispatch.theta);
                (Some(inf.dispatch.objective), Some(ms), inf.used_fallback, Some(v))
            }
            None => (None, None, false, None),
        };
        records.push(SampleRecord {
            index,
            ed: ed?.objective,
            opf: opf.objective,
            ots,
            dadnn,
            used_fallback,
            dadnn_violation: violation,
            ed_ms,
            opf_ms,
            ots_ms,
            dadnn_ms,
        });
    }
    let ed = summarize(records.iter().map(|r| Some(r.ed)).collect(), records.iter().map(|r| r.ed_ms).collect());
    let opf = summarize(records.iter().map(|r| Some(r.opf)).collect(), records.iter().map(|r| r.opf_ms).collect());
    let ots = opts
        .ots_budget
        .map(|_| summarize(records.iter().map(|r| r.ots).collect(), records.iter().filter_map(|r| r.ots_ms).collect()));
    let dadnn = params
        .map(|_| summarize(records.iter().map(|r| r.dadnn).collect(), records.iter().filter_map(|r| r.dadnn_ms).collect()));
    Ok(EvalReport {
        ed,
        opf,
        ots,
        dadnn,
        fallback_count: records.iter().filter(|r| r.used_fallback).count(),
        samples: records,
    })
}

/// Median wall time of `f` over `reps` runs, in milliseconds.
pub fn median_time(reps: usize, mut f: impl FnMut()) -> f64 {
    let mut t: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    median(&mut t).unwrap_or(0.0)
}

/// Zero time budget, used to mark the OTS column as not solved.
pub fn zero_budget() -> OtsBudget {
    OtsBudget {
        time_limit: Some(Duration::ZERO),
        node_limit: None,
    }
}
