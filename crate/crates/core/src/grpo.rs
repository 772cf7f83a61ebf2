//! GRPO fine-tuning of the proximal sampler through its auxiliary chain.
//!
//! For `k = K..2` the auxiliary transition is Gaussian,
//! `Y_{k-1} | Y_k ~ N((1 + gamma_{k-1} / 2) f_omega(Y_k), gamma_{k-1} I)`, with
//! `f_omega` the guided prox at `(t_{k-1}, gamma_k)`. The last map
//! `Y_0 = f_omega(Y_1)` is deterministic and carries no likelihood term.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::model::{Network, ObjectiveGrad, ProxNet, QueryBatch};
use crate::optim::OptimizerKind;
use crate::rng;
use crate::sampler::{guide, run_chains_batched_with_noises, chain_noises, BatchModel, ChainRecord, RuleKind, StepRule};
use crate::schedule::TimeGrid;
use crate::target::{Condition, MixtureTarget};

/// Deterministic reward on a final sample.
pub trait RewardFn {
    fn reward(&self, x: &[f64], cond: Condition) -> Result<f64>;
}

impl<F> RewardFn for F
where
    F: Fn(&[f64], Condition) -> Result<f64>,
{
    fn reward(&self, x: &[f64], cond: Condition) -> Result<f64> {
        self(x, cond)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    ModeDistance,
    Ring,
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardKind::ModeDistance => "mode-dist",
            RewardKind::Ring => "ring",
        })
    }
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mode-dist" => Ok(RewardKind::ModeDistance),
            "ring" => Ok(RewardKind::Ring),
            _ => Err(Error::Argument(format!("unknown reward `{s}` (expected mode-dist or ring)"))),
        }
    }
}

/// Built-in rewards, both maximized (at 0) on a per-label set.
#[derive(Debug, Clone, PartialEq)]
pub enum Reward {
    /// `-|x - mu*_c|` for one designated point per label.
    ModeDistance { modes: Vec<Vec<f64>> },
    /// `-| |x| - r_c |` for one radius per label.
    Ring { radii: Vec<f64> },
}

impl Reward {
    /// Mode-distance reward toward each label's designated (first) mode.
    pub fn mode_distance(target: &MixtureTarget) -> Result<Self> {
        let modes = (0..target.num_labels())
            .map(|c| target.designated_mode(c).map(<[f64]>::to_vec))
            .collect::<Result<_>>()?;
        Ok(Reward::ModeDistance { modes })
    }

    pub fn ring(radii: Vec<f64>) -> Result<Self> {
        if radii.is_empty() || radii.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return Err(Error::Argument(format!("ring radii must be finite and non-negative, got {radii:?}")));
        }
        Ok(Reward::Ring { radii })
    }

    fn label(&self, cond: Condition) -> Result<usize> {
        let n = match self {
            Reward::ModeDistance { modes } => modes.len(),
            Reward::Ring { radii } => radii.len(),
        };
        match cond {
            Condition::Label(c) if c < n => Ok(c),
            other => Err(Error::Argument(format!("reward is not defined for condition {other}"))),
        }
    }
}

impl RewardFn for Reward {
    fn reward(&self, x: &[f64], cond: Condition) -> Result<f64> {
        let c = self.label(cond)?;
        let r = match self {
            Reward::ModeDistance { modes } => {
                if modes[c].len() != x.len() {
                    return Err(Error::Argument("reward point has the wrong dimension".into()));
                }
                -x.iter().zip(&modes[c]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            }
            Reward::Ring { radii } => -(x.iter().map(|a| a * a).sum::<f64>().sqrt() - radii[c]).abs(),
        };
        if r.is_finite() {
            Ok(r)
        } else {
            Err(Error::NonFinite(format!("reward at {x:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    pub group: usize,
    pub steps: usize,
    pub kl: f64,
    pub clip: f64,
    pub omega: f64,
    pub prompts_per_batch: usize,
    pub lr: f64,
    pub updates: usize,
    pub std_floor: f64,
    /// Sub-batches the gradient is accumulated over.
    pub accumulation: usize,
    /// Gradient steps per rollout batch.
    pub inner_epochs: usize,
    pub optimizer: OptimizerKind,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group: 24,
            steps: 10,
            kl: 0.001,
            clip: 0.2,
            omega: 4.0,
            prompts_per_batch: 1,
            lr: 1e-4,
            updates: 300,
            std_floor: 1e-8,
            accumulation: 6,
            inner_epochs: 1,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.group < 2 {
            return bad(format!("group size must be at least 2, got {}", self.group));
        }
        if self.steps < 2 {
            return bad(format!("GRPO needs at least 2 sampling steps, got {}", self.steps));
        }
        if !(self.kl >= 0.0 && self.kl.is_finite()) {
            return bad(format!("KL weight must be >= 0, got {}", self.kl));
        }
        if !(self.clip > 0.0) {
            return bad(format!("clip radius must be positive, got {}", self.clip));
        }
        if !(self.std_floor > 0.0) {
            return bad(format!("advantage std floor must be positive, got {}", self.std_floor));
        }
        if !(self.omega >= -1.0 && self.omega.is_finite()) {
            return bad(format!("guidance weight must be >= -1, got {}", self.omega));
        }
        if self.prompts_per_batch == 0 || self.accumulation == 0 || self.inner_epochs == 0 {
            return bad("prompts_per_batch, accumulation and inner_epochs must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// `(R - mean) / max(std, floor)` with the population standard deviation.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Argument(format!("advantages need a group of at least 2, got {}", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
    let denom = std.max(std_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

fn check_transition(k: usize, grid: &TimeGrid) -> Result<()> {
    if k < 2 || k > grid.steps() {
        return Err(Error::Contract(format!(
            "transition index k = {k} must lie in 2..={} (the k = 1 map is deterministic)",
            grid.steps()
        )));
    }
    Ok(())
}

/// `ln N(y_next; (1 + gamma_{k-1} / 2) f, gamma_{k-1} I)` for the transition `Y_k -> Y_{k-1}`.
///
/// `y_cur` only enters through `f = f_omega(y_cur)`; it is accepted so call
/// sites read like the kernel they evaluate.
pub fn transition_logpdf(y_next: &[f64], _y_cur: &[f64], k: usize, grid: &TimeGrid, f: &[f64]) -> Result<f64> {
    check_transition(k, grid)?;
    if y_next.len() != f.len() {
        return Err(Error::Argument("transition points differ in dimension".into()));
    }
    Ok(gaussian_logpdf(y_next, f, grid.gamma(k - 1)))
}

fn gaussian_logpdf(y: &[f64], f: &[f64], gamma: f64) -> f64 {
    let a = 1.0 + 0.5 * gamma;
    let sq: f64 = y.iter().zip(f).map(|(y, f)| (y - a * f) * (y - a * f)).sum();
    -0.5 * y.len() as f64 * (2.0 * std::f64::consts::PI * gamma).ln() - sq / (2.0 * gamma)
}

/// KL between the policy and reference transitions out of the same `Y_k`.
pub fn transition_kl(f_theta: &[f64], f_ref: &[f64], k: usize, grid: &TimeGrid) -> Result<f64> {
    check_transition(k, grid)?;
    if f_theta.len() != f_ref.len() {
        return Err(Error::Argument("KL arguments differ in dimension".into()));
    }
    let gamma = grid.gamma(k - 1);
    let a = 1.0 + 0.5 * gamma;
    let sq: f64 = f_theta.iter().zip(f_ref).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(a * a * sq / (2.0 * gamma))
}

/// One condition's group of rollouts under the behaviour policy.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub cond: Condition,
    pub omega: f64,
    pub records: Vec<ChainRecord>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// `old_logp[i][k - 2]` for `k = 2..=K`.
    pub old_logp: Vec<Vec<f64>>,
}

impl GroupBatch {
    pub fn old_logp(&self, chain: usize, k: usize) -> f64 {
        self.old_logp[chain][k - 2]
    }

    pub fn transitions(&self) -> usize {
        self.records.iter().map(|r| r.grid.steps() - 1).sum()
    }
}

/// Stream key for group `group` of a rollout round.
fn group_seed(seed: u64, round: u64, group: u64) -> u64 {
    rng::derive_seed(seed, &[rng::domain::GRPO_ROLLOUT, round, group])
}

/// Rolls `cfg.group` hybrid chains under `net` (the frozen behaviour policy),
/// scores `Y_0`, and caches per-transition log-densities.
pub fn rollout_group(
    net: &ProxNet,
    cond: Condition,
    grid: &TimeGrid,
    cfg: &GrpoConfig,
    reward: &dyn RewardFn,
    seed: u64,
) -> Result<GroupBatch> {
    if cfg.group < 2 {
        return Err(Error::Argument(format!("group size must be at least 2, got {}", cfg.group)));
    }
    let dim = net.architecture().dim;
    let rule = StepRule::new(RuleKind::PdaHybrid, cfg.omega)?;
    let (inits, noises): (Vec<_>, Vec<_>) = (0..cfg.group as u64).map(|i| chain_noises(seed, i, grid.steps(), dim)).unzip();
    let records = run_chains_batched_with_noises(rule, grid, BatchModel::Prox(net), cond, inits, noises)?;

    let rewards = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            reward.reward(r.sample(), cond).map_err(|e| Error::Numeric { step: 0, what: format!("reward of chain {i}: {e}") })
        })
        .collect::<Result<Vec<_>>>()?;
    let advantages = compute_advantages(&rewards, cfg.std_floor)?;
    let old_logp = policy_logps(net, &records, cfg.omega)?;
    Ok(GroupBatch { cond, omega: cfg.omega, records, rewards, advantages, old_logp })
}

/// Guided prox outputs at every scored transition, as `out[i][k - 2]`.
fn guided_outputs(net: &ProxNet, records: &[ChainRecord], omega: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    let (q, index) = transition_queries(records, omega);
    let out = net.forward_batch(&q)?;
    Ok(split_guided(out.view(), &index, omega, records))
}

fn policy_logps(net: &ProxNet, records: &[ChainRecord], omega: f64) -> Result<Vec<Vec<f64>>> {
    let fs = guided_outputs(net, records, omega)?;
    records
        .iter()
        .zip(&fs)
        .map(|(r, f)| (2..=r.grid.steps()).map(|k| transition_logpdf(&r.states[k - 1], &r.states[k], k, &r.grid, &f[k - 2])).collect())
        .collect()
}

/// Stacks one conditional row (and, if guided, one null row) per scored
/// transition. Returns the batch and `(chain, k)` for each conditional row.
fn transition_queries(records: &[ChainRecord], omega: f64) -> (QueryBatch, Vec<(usize, usize)>) {
    let mut index = Vec::new();
    for (i, r) in records.iter().enumerate() {
        for k in (2..=r.grid.steps()).rev() {
            index.push((i, k));
        }
    }
    let dim = records.first().map_or(0, |r| r.init.len());
    let branches = if omega == 0.0 { 1 } else { 2 };
    let mut q = QueryBatch::with_capacity(dim, index.len() * branches);
    for b in 0..branches {
        for &(i, k) in &index {
            let r = &records[i];
            let c = if b == 0 { r.cond } else { Condition::Null };
            q.push(&r.states[k], r.grid.time(k - 1), Some(r.grid.gamma(k)), c);
        }
    }
    (q, index)
}

fn split_guided(out: ndarray::ArrayView2<'_, f64>, index: &[(usize, usize)], omega: f64, records: &[ChainRecord]) -> Vec<Vec<Vec<f64>>> {
    let n = index.len();
    let mut fs: Vec<Vec<Vec<f64>>> = records.iter().map(|r| vec![Vec::new(); r.grid.steps() - 1]).collect();
    for (row, &(i, k)) in index.iter().enumerate() {
        fs[i][k - 2] = if omega == 0.0 {
            out.row(row).to_vec()
        } else {
            out.row(row).iter().zip(out.row(n + row)).map(|(&c, &u)| guide(c, u, omega)).collect()
        };
    }
    fs
}

/// Objective value, its gradient, and diagnostics.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    /// Sum over chains and scored transitions of the surrogate minus the KL penalty.
    pub value: f64,
    pub grad: Vec<f64>,
    pub terms: usize,
    pub kl_sum: f64,
    pub clipped: usize,
}

/// Evaluates the clipped (or, with `clip = false`, unclipped ratio) GRPO
/// objective on `batches` and its gradient with respect to `net`'s parameters.
/// Gradients flow through both guidance branches.
pub fn grpo_objective_with(
    net: &ProxNet,
    reference: &ProxNet,
    batches: &[GroupBatch],
    cfg: &GrpoConfig,
    clip: bool,
) -> Result<ObjectiveEval> {
    let mut total = ObjectiveEval { value: 0.0, grad: vec![0.0; net.params().len()], terms: 0, kl_sum: 0.0, clipped: 0 };
    for b in batches {
        let e = group_objective(net, reference, b, cfg, clip)?;
        total.value += e.value;
        total.terms += e.terms;
        total.kl_sum += e.kl_sum;
        total.clipped += e.clipped;
        for (g, d) in total.grad.iter_mut().zip(e.grad) {
            *g += d;
        }
    }
    Ok(total)
}

/// The clipped GRPO objective (to maximize) and its gradient.
pub fn grpo_objective(net: &ProxNet, reference: &ProxNet, batches: &[GroupBatch], cfg: &GrpoConfig) -> Result<ObjectiveEval> {
    grpo_objective_with(net, reference, batches, cfg, true)
}

fn group_objective(net: &ProxNet, reference: &ProxNet, b: &GroupBatch, cfg: &GrpoConfig, clip: bool) -> Result<ObjectiveEval> {
    let omega = b.omega;
    let (q, index) = transition_queries(&b.records, omega);
    let n = index.len();
    let ref_out = reference.forward_batch(&q)?;
    let ref_f = split_guided(ref_out.view(), &index, omega, &b.records);
    let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);

    let mut kl_sum = 0.0;
    let mut clipped = 0;
    let (value, grad) = net.value_and_grad(&q, |out, _| {
        let d = out.ncols();
        let fs = split_guided(out, &index, omega, &b.records);
        let mut d_out = Array2::zeros(out.dim());
        let mut value = 0.0;
        for (row, &(i, k)) in index.iter().enumerate() {
            let r = &b.records[i];
            let f = &fs[i][k - 2];
            let y = &r.states[k - 1];
            let gamma = r.grid.gamma(k - 1);
            let a = 1.0 + 0.5 * gamma;
            let logp = transition_logpdf(y, &r.states[k], k, &r.grid, f)?;
            let ratio = (logp - b.old_logp(i, k)).exp();
            if !ratio.is_finite() {
                return Err(Error::Numeric { step: k, what: format!("likelihood ratio of chain {i}") });
            }
            let adv = b.advantages[i];
            let kl = transition_kl(f, &ref_f[i][k - 2], k, &r.grid)?;
            kl_sum += kl;

            // d ratio / d f = ratio * a (y - a f) / gamma
            let is_clipped = clip && ((adv > 0.0 && ratio > hi) || (adv < 0.0 && ratio < lo));
            let surrogate = if clip { (ratio * adv).min(ratio.clamp(lo, hi) * adv) } else { ratio * adv };
            if is_clipped {
                clipped += 1;
            }
            value += surrogate - cfg.kl * kl;

            let w_ratio = if is_clipped { 0.0 } else { adv * ratio };
            let w_kl = cfg.kl * a * a / gamma;
            for j in 0..d {
                let g = w_ratio * a * (y[j] - a * f[j]) / gamma - w_kl * (f[j] - ref_f[i][k - 2][j]);
                if omega == 0.0 {
                    d_out[[row, j]] = g;
                } else {
                    d_out[[row, j]] = (1.0 + omega) * g;
                    d_out[[n + row, j]] = -omega * g;
                }
            }
        }
        Ok(ObjectiveGrad::from_outputs(value, d_out))
    })?;
    Ok(ObjectiveEval { value, grad, terms: n, kl_sum, clipped })
}

/// One row of the fine-tuning log.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateLog {
    pub update: usize,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
}

/// GRPO fine-tuning. `net` starts as the pretrained policy, which is also the
/// KL reference. Each update rolls `prompts_per_batch` groups under a frozen
/// snapshot, then takes `inner_epochs` ascent steps on the mean per-transition
/// objective, accumulating the gradient over `accumulation` sub-batches of groups.
pub fn grpo_update_loop(
    net: &mut ProxNet,
    reward: &dyn RewardFn,
    prompts: &[Condition],
    grid: &TimeGrid,
    cfg: &GrpoConfig,
    seed: u64,
    mut on_update: impl FnMut(&UpdateLog, &ProxNet),
) -> Result<Vec<UpdateLog>> {
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::Argument("GRPO needs at least one prompt".into()));
    }
    if grid.steps() != cfg.steps {
        return Err(Error::Argument(format!("grid has {} steps but the config asks for {}", grid.steps(), cfg.steps)));
    }
    let reference = net.snapshot();
    let mut opt = cfg.optimizer.build(cfg.lr);
    let mut log = Vec::with_capacity(cfg.updates);

    for u in 0..cfg.updates {
        let old = net.snapshot();
        let batches = (0..cfg.prompts_per_batch)
            .map(|j| {
                let cond = prompts[(u * cfg.prompts_per_batch + j) % prompts.len()];
                rollout_group(&old, cond, grid, cfg, reward, group_seed(seed, u as u64, j as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let rewards: Vec<f64> = batches.iter().flat_map(|b| b.rewards.iter().copied()).collect();
        let mean_reward = rewards.iter().sum::<f64>() / rewards.len() as f64;

        let mut first = None;
        for _ in 0..cfg.inner_epochs {
            let chunk = batches.len().div_ceil(cfg.accumulation.min(batches.len()));
            let mut grad = vec![0.0; net.params().len()];
            let mut stats = (0usize, 0.0, 0usize);
            for sub in batches.chunks(chunk) {
                let e = grpo_objective(net, &reference, sub, cfg)?;
                for (g, d) in grad.iter_mut().zip(&e.grad) {
                    *g += d;
                }
                stats.0 += e.terms;
                stats.1 += e.kl_sum;
                stats.2 += e.clipped;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training { iteration: u, loss: f64::NAN });
            }
            let scale = -1.0 / stats.0 as f64;
            let step: Vec<f64> = grad.iter().map(|g| g * scale).collect();
            opt.step(net.params_mut(), &step);
            first.get_or_insert(stats);
        }
        let (terms, kl_sum, clipped) = first.expect("at least one inner epoch");
        let entry = UpdateLog {
            update: u,
            mean_reward,
            mean_kl: kl_sum / terms as f64,
            clip_fraction: clipped as f64 / terms as f64,
        };
        if !entry.mean_reward.is_finite() || !entry.mean_kl.is_finite() {
            return Err(Error::Training { iteration: u, loss: entry.mean_reward });
        }
        on_update(&entry, net);
        log.push(entry);
    }
    Ok(log)
}

/// Mean reward of `count` fresh hybrid chains per prompt under `net`.
pub fn evaluate_reward(
    net: &ProxNet,
    reward: &dyn RewardFn,
    prompts: &[Condition],
    grid: &TimeGrid,
    omega: f64,
    seed: u64,
    count: usize,
) -> Result<f64> {
    let rule = StepRule::new(RuleKind::PdaHybrid, omega)?;
    let dim = net.architecture().dim;
    let mut total = 0.0;
    let mut n = 0usize;
    for (j, &cond) in prompts.iter().enumerate() {
        let s = group_seed(seed, u64::MAX, j as u64);
        for x in crate::sampler::sample_batched(rule, grid, BatchModel::Prox(net), cond, dim, s, 0, count, 256)? {
            total += reward.reward(&x, cond)?;
            n += 1;
        }
    }
    Ok(total / n as f64)
}
