//! Oracle invariant suite, runnable from the CLI (`oracle-check`) and the tests.
//!
//! Every check compares an implementation against a closed form or an
//! independent numerical oracle and reports a one-line verdict.

use std::fmt;

use crate::checkpoint::{Checkpoint, Metadata};
use crate::error::{Error, Result};
use crate::grpo::{
    compute_advantages, grpo_objective_with, grpo_update_loop, rollout_group, transition_kl, transition_logpdf, GrpoConfig,
    Reward,
};
use crate::model::{Architecture, NetKind, Network, ProxNet, QueryBatch, ScoreNet};
use crate::pretrain::{
    dsm_batch, dsm_value_and_grad, pm_batch, pm_loss, pm_value_and_grad, sample_t_lambda, PretrainConfig, StepGridSet,
    DEFAULT_STEP_COUNTS,
};
use crate::rng;
use crate::sampler::{
    hybrid_input, pda_hybrid_step, pda_step, prox_cfg, run_chain, score_cfg, BruteForceProx, Drift, GaussianProx,
    OracleScore, RuleKind, StepRule,
};
use crate::schedule::{NoiseSchedule, TimeGrid, DEFAULT_T_MIN};
use crate::target::{Component, Condition, MixtureTarget, Oracle, ProxQuery};

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub passed: bool,
    pub detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub verdict: Verdict,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.verdict.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.verdict.detail)
    }
}

/// Mean and per-coordinate variance of `X_0` under PDA-hybrid with the exact
/// prox of an isotropic Gaussian target, started from `N(0, I)`.
/// Each step is affine: `X <- a (1 + g/2) X + a sqrt(g) xi + b`.
pub fn hybrid_gaussian_moments(o: &Oracle, grid: &TimeGrid, mean: &[f64]) -> Result<(Vec<f64>, f64)> {
    let mut m = vec![0.0; mean.len()];
    let mut var = 1.0;
    for k in (1..=grid.steps()).rev() {
        let g = grid.gamma(k);
        let alpha = o.schedule().alpha_at(grid.time(k - 1))?;
        let v = alpha * o.target().sigma2() + 1.0 - alpha;
        let a = v / (v + g);
        let s = 1.0 + 0.5 * g;
        for (mi, mu) in m.iter_mut().zip(mean) {
            *mi = a * s * *mi + g * alpha.sqrt() * mu / (v + g);
        }
        var = a * a * (s * s * var + g);
    }
    Ok((m, var))
}

fn sample_moments(xs: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = xs.len() as f64;
    let d = xs[0].len();
    let mut mean = vec![0.0; d];
    for x in xs {
        for j in 0..d {
            mean[j] += x[j] / n;
        }
    }
    let mut cov = vec![vec![0.0; d]; d];
    for x in xs {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (x[i] - mean[i]) * (x[j] - mean[j]) / (n - 1.0);
            }
        }
    }
    (mean, cov)
}

/// Oracle-driven PDA-hybrid on `N(mean, I)` against the affine recursion.
pub fn gaussian_sampler_exactness(chains: usize, steps: usize) -> Result<Verdict> {
    let mean = [1.0, -1.0];
    let o = Oracle::new(MixtureTarget::gaussian(mean.to_vec(), 1.0)?, NoiseSchedule::default());
    let grid = TimeGrid::uniform(o.schedule(), steps, DEFAULT_T_MIN)?;
    let rule = StepRule::new(RuleKind::PdaHybrid, 0.0)?;
    let prox = GaussianProx(&o);
    let xs = (0..chains as u64)
        .map(|i| run_chain(rule, &grid, Drift::Prox(&prox), Condition::Label(0), 2, 11, i).map(|r| r.states[0].clone()))
        .collect::<Result<Vec<_>>>()?;
    let (em, ev) = hybrid_gaussian_moments(&o, &grid, &mean)?;
    let (m, c) = sample_moments(&xs);
    let mean_err = m.iter().zip(&em).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut cov_err: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let exact = if i == j { ev } else { 0.0 };
            cov_err = cov_err.max((c[i][j] - exact).abs());
        }
    }
    Ok(Verdict::new(
        mean_err <= 0.03 && cov_err <= 0.05,
        format!("N = {chains}, K = {steps}: mean error {mean_err:.4} (tol 0.03), covariance error {cov_err:.4} (tol 0.05)"),
    ))
}

pub fn three_component_target() -> Result<MixtureTarget> {
    let comp = |w: f64, m: [f64; 2]| Component { weight: w, mean: m.to_vec() };
    MixtureTarget::new(2, 0.2, vec![vec![comp(0.5, [2.0, 0.0]), comp(0.3, [-1.0, 1.5]), comp(0.2, [-1.0, -2.0])]])
}

/// Brute-force prox residual on a 3-component mixture with grid-supported `(t, lambda)`.
pub fn prox_residual_check(queries: usize) -> Result<Verdict> {
    let o = Oracle::new(three_component_target()?, NoiseSchedule::default());
    let gridset = StepGridSet::new(&DEFAULT_STEP_COUNTS, o.schedule(), DEFAULT_T_MIN)?;
    let mut r = rng::stream(2, &[rng::domain::CHECK, 2]);
    let mut worst: f64 = 0.0;
    for _ in 0..queries {
        let (t, lambda) = sample_t_lambda(&gridset, &mut r);
        let x: Vec<f64> = rng::normal_vec(&mut r, 2).into_iter().map(|v| 3.0 * v).collect();
        let q = ProxQuery::new(x, t, lambda, Condition::Label(0));
        let u = o.bruteforce_prox(&q)?;
        worst = worst.max(o.prox_residual(&u, &q)?);
    }
    Ok(Verdict::new(worst <= 1e-8, format!("{queries} queries: max residual {worst:.3e} (tol 1e-8)")))
}

/// Closed-form Gaussian prox against the brute-force minimizer.
pub fn gaussian_prox_agreement() -> Result<Verdict> {
    let o = Oracle::new(MixtureTarget::gaussian(vec![0.5, -2.0], 0.3)?, NoiseSchedule::default());
    let mut r = rng::stream(3, &[rng::domain::CHECK, 3]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng::uniform(&mut r);
        let lambda = (10.0f64).powf(-3.0 + 4.0 * rng::uniform(&mut r));
        let q = ProxQuery::new(rng::normal_vec(&mut r, 2), t, lambda, Condition::Label(0));
        let a = o.prox_gaussian(&q)?;
        let b = o.bruteforce_prox(&q)?;
        worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    Ok(Verdict::new(worst <= 1e-8, format!("max |closed form - brute force| {worst:.3e} (tol 1e-8)")))
}

pub fn alpha_monotone() -> Result<Verdict> {
    let s = NoiseSchedule::default();
    let mut prev = s.alpha_at(0.0)?;
    let start_ok = prev == 1.0;
    let mut ok = start_ok;
    for i in 1..=1000 {
        let a = s.alpha_at(i as f64 / 1000.0)?;
        ok &= a < prev && a > 0.0;
        prev = a;
    }
    Ok(Verdict::new(ok, format!("alpha_0 = 1: {start_ok}; strictly decreasing on 1000 points: {ok}")))
}

/// With `omega = 0` guided drifts equal the conditional ones bit for bit.
pub fn cfg_zero_reduction() -> Result<Verdict> {
    let o = Oracle::new(MixtureTarget::ring(8, 4.0, 0.09, 2)?, NoiseSchedule::default());
    let mut r = rng::stream(4, &[rng::domain::CHECK, 4]);
    let mut ok = true;
    for _ in 0..50 {
        let x = rng::normal_vec(&mut r, 2);
        let t = 0.05 + 0.9 * rng::uniform(&mut r);
        let c = Condition::Label(rng::index(&mut r, 2));
        ok &= score_cfg(&OracleScore(&o), &x, t, c, 0.0)? == o.score(c, &x, t)?;
        let q = ProxQuery::new(x.clone(), t, 0.3, c);
        ok &= prox_cfg(&BruteForceProx(&o), &x, t, 0.3, c, 0.0)? == o.bruteforce_prox(&q)?;
    }
    Ok(Verdict::new(ok, "score and prox, 50 points"))
}

/// Reconstructs the X-chain from the recorded Y-chain and checks `Y_k = (1 + g/2) X_k + sqrt(g) xi_k`.
pub fn xy_chain_identity() -> Result<Verdict> {
    let o = Oracle::new(MixtureTarget::ring(8, 4.0, 0.09, 2)?, NoiseSchedule::default());
    let prox = BruteForceProx(&o);
    let mut worst: f64 = 0.0;
    for steps in [4, 10] {
        let grid = TimeGrid::uniform(o.schedule(), steps, DEFAULT_T_MIN)?;
        let rule = StepRule::new(RuleKind::PdaHybrid, 2.0)?;
        let cond = Condition::Label(1);
        for chain in 0..5 {
            let rec = run_chain(rule, &grid, Drift::Prox(&prox), cond, 2, 5, chain)?;
            let mut x = rec.init.clone();
            for k in (1..=steps).rev() {
                let y = hybrid_input(grid.gamma(k), &x, rec.noise(k));
                worst = worst.max(y.iter().zip(&rec.states[k]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
                x = pda_hybrid_step(&x, k, &grid, |x, t, l| prox_cfg(&prox, x, t, l, cond, 2.0), rec.noise(k))?;
            }
            worst = worst.max(x.iter().zip(rec.sample()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok(Verdict::new(worst <= 1e-12, format!("max |Y - (1 + g/2) X - sqrt(g) xi| {worst:.3e} (tol 1e-12)")))
}

/// PDA refuses `gamma >= 2`; PDA-hybrid takes `gamma = 10`.
pub fn step_size_behavior() -> Result<Verdict> {
    let o = Oracle::new(MixtureTarget::gaussian(vec![0.0], 1.0)?, NoiseSchedule::default());
    let prox = |x: &[f64], t: f64, l: f64| o.prox_gaussian(&ProxQuery::new(x.to_vec(), t, l, Condition::Label(0)));
    let flat = |gamma: f64| TimeGrid::uniform(&NoiseSchedule::new(4.0 * gamma, 4.0 * gamma)?, 4, 0.0);
    let at_two = matches!(pda_step(&[0.3], 2, &flat(2.0)?, prox, &[0.1]), Err(Error::StepSize { .. }));
    let above = matches!(pda_step(&[0.3], 2, &flat(3.0)?, prox, &[0.1]), Err(Error::StepSize { .. }));
    let below = pda_step(&[0.3], 2, &flat(1.9)?, prox, &[0.1]).is_ok();
    let grid10 = flat(10.0)?;
    let hybrid = pda_hybrid_step(&[0.3], 2, &grid10, prox, &[0.1])?;
    let hybrid_ok = (grid10.gamma(2) - 10.0).abs() < 1e-12 && hybrid.iter().all(|v| v.is_finite());
    let rule_ok = matches!(StepRule::new(RuleKind::Pda, 0.0)?.check_grid(&flat(2.0)?), Err(Error::StepSize { .. }))
        && StepRule::new(RuleKind::PdaHybrid, 0.0)?.check_grid(&grid10).is_ok();
    Ok(Verdict::new(
        at_two && above && below && hybrid_ok && rule_ok,
        format!("PDA rejects 2.0: {at_two}, 3.0: {above}, accepts 1.9: {below}; hybrid at 10: {hybrid_ok}; grid checks: {rule_ok}"),
    ))
}

pub fn pm_loss_properties() -> Result<Verdict> {
    let mut ok = pm_loss(&[1.0, 2.0], &[1.0, 2.0], 0.5)? == 0.0;
    for &zeta in &[0.1, 1.0, 3.0] {
        let mut prev = -1.0;
        for i in 0..200 {
            let l = pm_loss(&[0.02 * i as f64, 0.0], &[0.0, 0.0], zeta)?;
            ok &= (0.0..=1.0).contains(&l) && l >= prev;
            prev = l;
        }
    }
    Ok(Verdict::new(ok, "zero at coincidence, in [0, 1], non-decreasing in distance"))
}

pub fn advantage_normalization() -> Result<Verdict> {
    let mut r = rng::stream(6, &[rng::domain::CHECK, 6]);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let rewards: Vec<f64> = (0..24).map(|_| 5.0 * rng::normal(&mut r) - 3.0).collect();
        let a = compute_advantages(&rewards, 1e-8)?;
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let sd = (a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / a.len() as f64).sqrt();
        worst = worst.max(mean.abs()).max((sd - 1.0).abs());
    }
    let zeros = compute_advantages(&[2.0; 24], 1e-8)?.iter().all(|&v| v == 0.0);
    Ok(Verdict::new(
        worst <= 1e-12 && zeros,
        format!("max |mean|, |std - 1| {worst:.3e} (tol 1e-12); constant group gives zeros: {zeros}"),
    ))
}

pub fn logpdf_formula() -> Result<Verdict> {
    let grid = TimeGrid::uniform(&NoiseSchedule::default(), 10, DEFAULT_T_MIN)?;
    let mut r = rng::stream(7, &[rng::domain::CHECK, 7]);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let k = 2 + rng::index(&mut r, 9);
        let (y, f) = (rng::normal_vec(&mut r, 2), rng::normal_vec(&mut r, 2));
        let g = grid.gamma(k - 1);
        let a = 1.0 + 0.5 * g;
        let direct: f64 = y
            .iter()
            .zip(&f)
            .map(|(y, f)| ((-(y - a * f).powi(2) / (2.0 * g)).exp() / (2.0 * std::f64::consts::PI * g).sqrt()).ln())
            .sum();
        worst = worst.max((transition_logpdf(&y, &y, k, &grid, &f)? - direct).abs());
    }
    let contract = matches!(transition_logpdf(&[0.0], &[0.0], 1, &grid, &[0.0]), Err(Error::Contract(_)));
    Ok(Verdict::new(
        worst <= 1e-12 && contract,
        format!("max deviation {worst:.3e} (tol 1e-12); k = 1 is a contract error: {contract}"),
    ))
}

pub fn kl_monte_carlo(samples: usize) -> Result<Verdict> {
    let grid = TimeGrid::uniform(&NoiseSchedule::default(), 10, DEFAULT_T_MIN)?;
    let k = 4;
    let (f1, f2) = ([0.4, -0.1], [-0.2, 0.3]);
    let exact = transition_kl(&f1, &f2, k, &grid)?;
    let g = grid.gamma(k - 1);
    let a = 1.0 + 0.5 * g;
    let mut r = rng::stream(8, &[rng::domain::CHECK, 8]);
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..samples {
        let y: Vec<f64> = f1.iter().map(|f| a * f + g.sqrt() * rng::normal(&mut r)).collect();
        let v = transition_logpdf(&y, &y, k, &grid, &f1)? - transition_logpdf(&y, &y, k, &grid, &f2)?;
        s += v;
        s2 += v * v;
    }
    let n = samples as f64;
    let est = s / n;
    let se = ((s2 / n - est * est) / n).sqrt();
    Ok(Verdict::new(
        (est - exact).abs() <= 3.0 * se,
        format!("closed form {exact:.5}, Monte Carlo {est:.5} +- {se:.1e} ({samples} samples, tol 3 SE)"),
    ))
}

fn perturbed<N: Network>(mut net: N, seed: u64, scale: f64) -> N {
    let mut r = rng::stream(seed, &[rng::domain::CHECK, 100]);
    for p in net.params_mut() {
        *p += scale * rng::normal(&mut r);
    }
    net
}

fn small_prox(seed: u64) -> Result<ProxNet> {
    let arch = Architecture::new(NetKind::Prox, 2, 2).with_size(16, 2);
    Ok(perturbed(ProxNet::with_architecture(arch, NoiseSchedule::default(), seed)?, seed, 0.1))
}

/// Worst relative error of `grad` against central differences of `f` over every `stride`-th parameter.
fn fd_worst<N: Network>(net: &N, grad: &[f64], stride: usize, f: impl Fn(&N) -> Result<f64>) -> Result<f64> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in (0..grad.len()).step_by(stride) {
        let mut plus = net.clone();
        plus.params_mut()[i] += h;
        let mut minus = net.clone();
        minus.params_mut()[i] -= h;
        let fd = (f(&plus)? - f(&minus)?) / (2.0 * h);
        worst = worst.max((grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-3));
    }
    Ok(worst)
}

/// Analytic gradients of the proximal-matching, score-matching and GRPO objectives against finite differences.
pub fn gradient_checks() -> Result<Verdict> {
    let target = MixtureTarget::ring(8, 4.0, 0.09, 2)?;
    let schedule = NoiseSchedule::default();
    let cfg = PretrainConfig { batch: 16, ..Default::default() };
    let gridset = StepGridSet::new(&DEFAULT_STEP_COUNTS, &schedule, DEFAULT_T_MIN)?;

    let prox = small_prox(1)?;
    let pm = pm_batch(&target, &schedule, &cfg, &gridset, 0)?;
    let (_, g) = pm_value_and_grad(&prox, &pm, 1.0)?;
    let pm_err = fd_worst(&prox, &g, 7, |n| Ok(pm_value_and_grad(n, &pm, 1.0)?.0))?;

    let arch = Architecture::new(NetKind::Score, 2, 2).with_size(16, 2);
    let score = perturbed(ScoreNet::with_architecture(arch, schedule, 2)?, 2, 0.1);
    let dsm = dsm_batch(&target, &schedule, &cfg, DEFAULT_T_MIN, 0)?;
    let (_, g) = dsm_value_and_grad(&score, &dsm)?;
    let dsm_err = fd_worst(&score, &g, 7, |n| Ok(dsm_value_and_grad(n, &dsm)?.0))?;

    let grpo_cfg = GrpoConfig { group: 6, steps: 4, omega: 2.0, kl: 0.3, ..Default::default() };
    let grid = TimeGrid::uniform(&schedule, 4, DEFAULT_T_MIN)?;
    let reward = Reward::mode_distance(&target)?;
    let batch = rollout_group(&prox, Condition::Label(0), &grid, &grpo_cfg, &reward, 3)?;
    let theta = perturbed(prox.clone(), 4, 0.002);
    let reference = small_prox(5)?;
    let e = grpo_objective_with(&theta, &reference, std::slice::from_ref(&batch), &grpo_cfg, false)?;
    let grpo_err = fd_worst(&theta, &e.grad, 7, |n| {
        Ok(grpo_objective_with(n, &reference, std::slice::from_ref(&batch), &grpo_cfg, false)?.value)
    })?;
    let worst = pm_err.max(dsm_err).max(grpo_err);
    Ok(Verdict::new(
        worst <= 1e-4,
        format!("max relative error: proximal matching {pm_err:.1e}, score matching {dsm_err:.1e}, GRPO {grpo_err:.1e} (tol 1e-4)"),
    ))
}

/// At theta = theta_old every ratio is 1, so clipping cannot change the gradient.
pub fn first_update_clip_identity() -> Result<Verdict> {
    let target = MixtureTarget::ring(8, 4.0, 0.09, 2)?;
    let net = small_prox(6)?;
    let reference = small_prox(7)?;
    let grid = TimeGrid::uniform(&NoiseSchedule::default(), 10, DEFAULT_T_MIN)?;
    let cfg = GrpoConfig { group: 8, steps: 10, ..Default::default() };
    let batch = rollout_group(&net, Condition::Label(1), &grid, &cfg, &Reward::mode_distance(&target)?, 8)?;
    let batches = [batch];
    let clipped = grpo_objective_with(&net, &reference, &batches, &cfg, true)?;
    let plain = grpo_objective_with(&net, &reference, &batches, &cfg, false)?;
    let worst = clipped.grad.iter().zip(&plain.grad).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let at_ref = grpo_objective_with(&net, &net, &batches, &cfg, true)?.value;
    Ok(Verdict::new(
        worst <= 1e-12 && at_ref.abs() <= 1e-12,
        format!("max |clipped - unclipped| gradient {worst:.1e} (tol 1e-12); objective at theta_old = theta_ref: {at_ref:.1e}"),
    ))
}

/// A constant reward gives zero advantages and leaves every parameter bit-identical.
pub fn constant_reward_no_drift() -> Result<Verdict> {
    let mut net = small_prox(9)?;
    let start = net.params().to_vec();
    let grid = TimeGrid::uniform(&NoiseSchedule::default(), 4, DEFAULT_T_MIN)?;
    let cfg = GrpoConfig { group: 8, steps: 4, updates: 3, prompts_per_batch: 2, ..Default::default() };
    let constant = |_: &[f64], _: Condition| Ok(1.5);
    let batch = rollout_group(&net, Condition::Label(0), &grid, &cfg, &constant, 1)?;
    let zero_adv = batch.advantages.iter().all(|&a| a == 0.0);
    grpo_update_loop(&mut net, &constant, &[Condition::Label(0), Condition::Label(1)], &grid, &cfg, 1, |_, _| {})?;
    let drift = net.params().iter().zip(&start).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
    Ok(Verdict::new(
        zero_adv && drift == 0,
        format!("advantages all zero: {zero_adv}; parameters changed after 3 updates: {drift}"),
    ))
}

/// Save/load through the byte container reproduces parameters and outputs bit for bit.
pub fn checkpoint_round_trip() -> Result<Verdict> {
    let net = small_prox(10)?;
    let meta = Metadata::from([("stage".to_string(), "check".to_string())]);
    let path = std::path::Path::new("<memory>");
    let back = Checkpoint::from_bytes(&Checkpoint::of(&net, meta.clone()).to_bytes()?, path)?;
    let meta_ok = back.metadata == meta;
    let restored = back.into_prox(path)?;
    let params_ok = restored.params().iter().zip(net.params()).all(|(a, b)| a.to_bits() == b.to_bits());
    let mut r = rng::stream(10, &[rng::domain::CHECK, 10]);
    let mut q = QueryBatch::with_capacity(2, 100);
    for i in 0..100 {
        let c = if i % 5 == 0 { Condition::Null } else { Condition::Label(i % 2) };
        q.push(&rng::normal_vec(&mut r, 2), rng::uniform(&mut r), Some(0.01 + rng::uniform(&mut r)), c);
    }
    let (a, b) = (net.forward_batch(&q)?, restored.forward_batch(&q)?);
    let outputs_ok = a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(Verdict::new(
        meta_ok && params_ok && outputs_ok,
        format!("metadata {meta_ok}, parameters {params_ok}, 100 forward outputs {outputs_ok}"),
    ))
}

/// Worst-case gap between a learned prox and the closed-form Gaussian prox over `xs` (1-d inputs)
/// and every `(t, lambda)` pair of the trained grids. Returns the gap and where it occurs.
pub fn gaussian_prox_fidelity(net: &ProxNet, o: &Oracle, gridset: &StepGridSet, xs: &[f64]) -> Result<(f64, [f64; 3])> {
    let mut worst = (0.0, [0.0; 3]);
    for (t, lambda) in gridset.pairs() {
        let mut q = QueryBatch::with_capacity(1, xs.len());
        for &x in xs {
            q.push(&[x], t, Some(lambda), Condition::Label(0));
        }
        let out = net.forward_batch(&q)?;
        for (i, &x) in xs.iter().enumerate() {
            let exact = o.prox_gaussian(&ProxQuery::new(vec![x], t, lambda, Condition::Label(0)))?;
            let gap = (out[[i, 0]] - exact[0]).abs();
            if gap.is_nan() {
                return Ok((gap, [x, t, lambda]));
            }
            if gap > worst.0 {
                worst = (gap, [x, t, lambda]);
            }
        }
    }
    Ok(worst)
}

/// Runs every oracle check; failures inside a check count as failed checks.
pub fn oracle_suite() -> Vec<CheckOutcome> {
    let checks: Vec<(&'static str, Box<dyn Fn() -> Result<Verdict>>)> = vec![
        ("alpha monotone", Box::new(alpha_monotone)),
        ("gaussian prox closed form", Box::new(gaussian_prox_agreement)),
        ("mixture prox residual", Box::new(|| prox_residual_check(100))),
        ("gaussian sampler exactness", Box::new(|| gaussian_sampler_exactness(50_000, 10))),
        ("cfg omega = 0 reduction", Box::new(cfg_zero_reduction)),
        ("X/Y chain identity", Box::new(xy_chain_identity)),
        ("step-size behavior", Box::new(step_size_behavior)),
        ("pm_loss bounds", Box::new(pm_loss_properties)),
        ("advantage normalization", Box::new(advantage_normalization)),
        ("transition logpdf", Box::new(logpdf_formula)),
        ("transition KL", Box::new(|| kl_monte_carlo(1_000_000))),
        ("gradients vs finite differences", Box::new(gradient_checks)),
        ("first-update clip identity", Box::new(first_update_clip_identity)),
        ("constant reward", Box::new(constant_reward_no_drift)),
        ("checkpoint round trip", Box::new(checkpoint_round_trip)),
    ];
    checks
        .into_iter()
        .map(|(name, f)| CheckOutcome {
            name,
            verdict: f().unwrap_or_else(|e| Verdict::new(false, format!("error: {e}"))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recursion_is_exact_for_one_step() {
        // With K = 1: X_0 = a ((1 + g/2) X + sqrt(g) xi) + b, X ~ N(0, 1).
        let o = Oracle::new(MixtureTarget::gaussian(vec![2.0], 0.5).unwrap(), NoiseSchedule::default());
        let grid = TimeGrid::uniform(o.schedule(), 1, 0.5).unwrap();
        let (m, v) = hybrid_gaussian_moments(&o, &grid, &[2.0]).unwrap();
        let g = grid.gamma(1);
        let alpha = o.schedule().alpha_at(0.5).unwrap();
        let var_t = alpha * 0.5 + 1.0 - alpha;
        let a = var_t / (var_t + g);
        assert!((m[0] - g * alpha.sqrt() * 2.0 / (var_t + g)).abs() < 1e-15);
        assert!((v - a * a * ((1.0 + 0.5 * g).powi(2) + g)).abs() < 1e-15);
    }

    #[test]
    fn fast_checks_pass() {
        for v in [
            alpha_monotone(),
            gaussian_prox_agreement(),
            prox_residual_check(20),
            cfg_zero_reduction(),
            xy_chain_identity(),
            step_size_behavior(),
            pm_loss_properties(),
            advantage_normalization(),
            logpdf_formula(),
            gradient_checks(),
            first_update_clip_identity(),
            constant_reward_no_drift(),
            checkpoint_round_trip(),
        ] {
            let v = v.unwrap();
            assert!(v.passed, "{}", v.detail);
        }
    }
}
