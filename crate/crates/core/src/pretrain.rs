//! Proximal-matching training of [`ProxNet`] and denoising score matching of
//! the baseline [`ScoreNet`].
//!
//! Minibatches are assembled from per-sample streams keyed by
//! `(seed, domain, iteration, sample)`, so a batch is a pure function of the
//! seed and the iteration index.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{Network, ObjectiveGrad, ProxNet, QueryBatch, ScoreNet};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::{self, StreamRng};
use crate::schedule::{forward_marginal, NoiseSchedule, TimeGrid};
use crate::target::{Condition, MixtureTarget};

pub const DEFAULT_STEP_COUNTS: [usize; 8] = [4, 5, 6, 7, 8, 9, 10, 25];

/// The step counts samplers may use, with their grids. Prox training draws
/// `(t_{k-1}, gamma_k)` pairs from these grids only.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGridSet {
    grids: Vec<TimeGrid>,
}

impl StepGridSet {
    pub fn new(counts: &[usize], schedule: &NoiseSchedule, t_min: f64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Argument("step grid set is empty".into()));
        }
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != counts.len() {
            return Err(Error::Argument(format!("step grid set {counts:?} has duplicates")));
        }
        let grids = counts
            .iter()
            .map(|&k| TimeGrid::uniform(schedule, k, t_min))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { grids })
    }

    pub fn default_for(schedule: &NoiseSchedule, t_min: f64) -> Result<Self> {
        Self::new(&DEFAULT_STEP_COUNTS, schedule, t_min)
    }

    pub fn counts(&self) -> Vec<usize> {
        self.grids.iter().map(TimeGrid::steps).collect()
    }

    pub fn grids(&self) -> &[TimeGrid] {
        &self.grids
    }

    pub fn grid(&self, steps: usize) -> Option<&TimeGrid> {
        self.grids.iter().find(|g| g.steps() == steps)
    }

    /// Every `(t_{k-1}, gamma_k)` pair the set can emit.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        self.grids
            .iter()
            .flat_map(|g| (1..=g.steps()).map(move |k| (g.time(k - 1), g.gamma(k))))
            .collect()
    }

    /// Errors unless `grid` is one of the trained grids.
    pub fn check_supported(&self, grid: &TimeGrid) -> Result<()> {
        if self.grids.iter().any(|g| g == grid) {
            Ok(())
        } else {
            Err(Error::Unsupported(format!(
                "a {}-step grid with t_min = {} is outside the trained step grids {:?}",
                grid.steps(),
                grid.t_min(),
                self.counts()
            )))
        }
    }
}

/// Draws a step count uniformly, then `k` uniformly in `1..=K`, and returns `(t_{k-1}, gamma_k)`.
pub fn sample_t_lambda(gridset: &StepGridSet, rng: &mut StreamRng) -> (f64, f64) {
    let grid = &gridset.grids[rng::index(rng, gridset.grids.len())];
    let k = 1 + rng::index(rng, grid.steps());
    (grid.time(k - 1), grid.gamma(k))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub iters: usize,
    pub zeta: f64,
    pub p_null: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { batch: 256, lr: 1e-3, iters: 20_000, zeta: 1.0, p_null: 0.1, seed: 0, optimizer: OptimizerKind::default() }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.zeta > 0.0 && self.zeta.is_finite()) {
            return Err(Error::Config(format!("zeta must be positive, got {}", self.zeta)));
        }
        if !(0.0..1.0).contains(&self.p_null) {
            return Err(Error::Config(format!("p_null must lie in [0, 1), got {}", self.p_null)));
        }
        Ok(())
    }
}

/// `1 - exp(-|output - x_t|^2 / (d zeta^2))`.
pub fn pm_loss(output: &[f64], x_t: &[f64], zeta: f64) -> Result<f64> {
    if !(zeta > 0.0) {
        return Err(Error::Argument(format!("zeta must be positive, got {zeta}")));
    }
    if output.len() != x_t.len() || output.is_empty() {
        return Err(Error::Argument("pm_loss needs two points of the same positive dimension".into()));
    }
    let sq: f64 = output.iter().zip(x_t).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-(-sq / (output.len() as f64 * zeta * zeta)).exp_m1())
}

/// Draws a condition uniformly over labels, then drops it to null with probability `p_null`.
/// Returns `(data label, training condition)`.
fn draw_condition(target: &MixtureTarget, p_null: f64, rng: &mut StreamRng) -> (usize, Condition) {
    let label = rng::index(rng, target.num_labels());
    let cond = if rng::uniform(rng) < p_null { Condition::Null } else { Condition::Label(label) };
    (label, cond)
}

/// A proximal-matching minibatch: queries `x_t + sqrt(lambda) eps` and their regression targets `x_t`.
#[derive(Debug, Clone)]
pub struct PmBatch {
    pub queries: QueryBatch,
    pub targets: Array2<f64>,
}

pub fn pm_batch(target: &MixtureTarget, schedule: &NoiseSchedule, cfg: &PretrainConfig, gridset: &StepGridSet, iteration: usize) -> Result<PmBatch> {
    let d = target.dim();
    let mut queries = QueryBatch::with_capacity(d, cfg.batch);
    let mut targets = Array2::zeros((cfg.batch, d));
    for i in 0..cfg.batch {
        let mut r = rng::stream(cfg.seed, &[rng::domain::PRETRAIN_PROX, iteration as u64, i as u64]);
        let (label, cond) = draw_condition(target, cfg.p_null, &mut r);
        let x0 = target.sample(Condition::Label(label), &mut r)?;
        let (t, lambda) = sample_t_lambda(gridset, &mut r);
        let xi = rng::normal_vec(&mut r, d);
        let xt = forward_marginal(&x0, t, &xi, schedule)?;
        let sl = lambda.sqrt();
        let query: Vec<f64> = xt.iter().map(|x| x + sl * rng::normal(&mut r)).collect();
        queries.push(&query, t, Some(lambda), cond);
        targets.row_mut(i).assign(&ndarray::ArrayView1::from(&xt[..]));
    }
    Ok(PmBatch { queries, targets })
}

/// Mean proximal-matching loss over `batch` and its parameter gradient.
pub fn pm_value_and_grad(net: &ProxNet, batch: &PmBatch, zeta: f64) -> Result<(f64, Vec<f64>)> {
    if !(zeta > 0.0) {
        return Err(Error::Argument(format!("zeta must be positive, got {zeta}")));
    }
    net.value_and_grad(&batch.queries, |out, _| {
        let (n, d) = out.dim();
        let scale = 1.0 / (d as f64 * zeta * zeta);
        let mut d_out = Array2::zeros((n, d));
        let mut total = 0.0;
        for i in 0..n {
            let diff = &out.row(i) - &batch.targets.row(i);
            let w = (-scale * diff.dot(&diff)).exp();
            total += 1.0 - w;
            d_out.row_mut(i).assign(&(diff * (2.0 * scale * w / n as f64)));
        }
        Ok(ObjectiveGrad::from_outputs(total / n as f64, d_out))
    })
}

fn checked_loss(iteration: usize, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Training { iteration, loss })
    }
}

/// One proximal-matching update. Returns the pre-update batch loss.
pub fn pm_training_step(
    net: &mut ProxNet,
    opt: &mut dyn Optimizer,
    target: &MixtureTarget,
    cfg: &PretrainConfig,
    gridset: &StepGridSet,
    iteration: usize,
) -> Result<f64> {
    let batch = pm_batch(target, &net.schedule().clone(), cfg, gridset, iteration)?;
    let (loss, grad) = pm_value_and_grad(net, &batch, cfg.zeta)?;
    let loss = checked_loss(iteration, loss)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training { iteration, loss: f64::NAN });
    }
    opt.step(net.params_mut(), &grad);
    Ok(loss)
}

/// A denoising minibatch: noised points and the noise that produced them.
#[derive(Debug, Clone)]
pub struct DsmBatch {
    pub queries: QueryBatch,
    pub noises: Array2<f64>,
}

/// Draws `t ~ U[t_min, 1]` per sample; `t_min` must be positive so the score is defined.
pub fn dsm_batch(target: &MixtureTarget, schedule: &NoiseSchedule, cfg: &PretrainConfig, t_min: f64, iteration: usize) -> Result<DsmBatch> {
    if !(t_min > 0.0 && t_min < 1.0) {
        return Err(Error::Argument(format!("score training needs 0 < t_min < 1, got {t_min}")));
    }
    let d = target.dim();
    let mut queries = QueryBatch::with_capacity(d, cfg.batch);
    let mut noises = Array2::zeros((cfg.batch, d));
    for i in 0..cfg.batch {
        let mut r = rng::stream(cfg.seed, &[rng::domain::PRETRAIN_SCORE, iteration as u64, i as u64]);
        let (label, cond) = draw_condition(target, cfg.p_null, &mut r);
        let x0 = target.sample(Condition::Label(label), &mut r)?;
        let t = t_min + (1.0 - t_min) * rng::uniform(&mut r);
        let xi = rng::normal_vec(&mut r, d);
        let xt = forward_marginal(&x0, t, &xi, schedule)?;
        queries.push(&xt, t, None, cond);
        noises.row_mut(i).assign(&ndarray::ArrayView1::from(&xi[..]));
    }
    Ok(DsmBatch { queries, noises })
}

/// Mean `|eps_hat - xi|^2` over `batch` and its parameter gradient.
pub fn dsm_value_and_grad(net: &ScoreNet, batch: &DsmBatch) -> Result<(f64, Vec<f64>)> {
    net.noise_value_and_grad(&batch.queries, |eps, _| {
        let n = eps.nrows();
        let diff = &eps - &batch.noises;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / n as f64;
        Ok(ObjectiveGrad::from_outputs(loss, diff * (2.0 / n as f64)))
    })
}

/// One denoising score-matching update. Returns the pre-update batch loss.
pub fn dsm_training_step(
    net: &mut ScoreNet,
    opt: &mut dyn Optimizer,
    target: &MixtureTarget,
    cfg: &PretrainConfig,
    t_min: f64,
    iteration: usize,
) -> Result<f64> {
    let batch = dsm_batch(target, &net.schedule().clone(), cfg, t_min, iteration)?;
    let (loss, grad) = dsm_value_and_grad(net, &batch)?;
    let loss = checked_loss(iteration, loss)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Training { iteration, loss: f64::NAN });
    }
    opt.step(net.params_mut(), &grad);
    Ok(loss)
}

fn check_labels(net_labels: usize, target: &MixtureTarget) -> Result<()> {
    if net_labels != target.num_labels() {
        return Err(Error::Argument(format!(
            "network has {net_labels} label rows but the target has {} labels",
            target.num_labels()
        )));
    }
    Ok(())
}

/// Runs `cfg.iters` proximal-matching updates and returns the loss curve.
pub fn train_prox(net: &mut ProxNet, target: &MixtureTarget, cfg: &PretrainConfig, gridset: &StepGridSet) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_labels(net.architecture().labels, target)?;
    let mut opt = cfg.optimizer.build(cfg.lr);
    (0..cfg.iters)
        .map(|it| pm_training_step(net, opt.as_mut(), target, cfg, gridset, it))
        .collect()
}

/// Runs `cfg.iters` denoising updates and returns the loss curve.
pub fn train_score(net: &mut ScoreNet, target: &MixtureTarget, cfg: &PretrainConfig, t_min: f64) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_labels(net.architecture().labels, target)?;
    let mut opt = cfg.optimizer.build(cfg.lr);
    (0..cfg.iters)
        .map(|it| dsm_training_step(net, opt.as_mut(), target, cfg, t_min, it))
        .collect()
}
