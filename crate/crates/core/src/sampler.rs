//! Reverse-process step rules and chain drivers.
//!
//! Score baselines take explicit steps with the score evaluated at `(X_k, t_k)`.
//! Proximal rules take implicit steps through a prox evaluated at `t_{k-1}`.
//! The hybrid rule is driven through its auxiliary chain
//! `Y_k = (1 + gamma_k / 2) X_k + sqrt(gamma_k) xi_k`, whose transitions are
//! Gaussian; [`ChainRecord`] keeps everything needed to replay them.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Network, ProxNet, QueryBatch, ScoreNet};
use crate::rng;
use crate::schedule::TimeGrid;
use crate::target::{Condition, Oracle, ProxQuery};

/// Something that evaluates `prox_{-lambda ln p_t(. | c)}(x)`.
pub trait ProxFn {
    fn prox(&self, x: &[f64], t: f64, lambda: f64, cond: Condition) -> Result<Vec<f64>>;
}

/// Something that evaluates `grad ln p_t(x | c)`.
pub trait ScoreFn {
    fn score(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>>;
}

impl<F> ProxFn for F
where
    F: Fn(&[f64], f64, f64, Condition) -> Result<Vec<f64>>,
{
    fn prox(&self, x: &[f64], t: f64, lambda: f64, cond: Condition) -> Result<Vec<f64>> {
        self(x, t, lambda, cond)
    }
}

impl ProxFn for ProxNet {
    fn prox(&self, x: &[f64], t: f64, lambda: f64, cond: Condition) -> Result<Vec<f64>> {
        self.prox_forward(x, t, lambda, cond)
    }
}

impl ScoreFn for ScoreNet {
    fn score(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        self.score_forward(x, t, cond)
    }
}

/// Closed-form prox of a single-Gaussian oracle.
pub struct GaussianProx<'a>(pub &'a Oracle);

impl ProxFn for GaussianProx<'_> {
    fn prox(&self, x: &[f64], t: f64, lambda: f64, cond: Condition) -> Result<Vec<f64>> {
        self.0.prox_gaussian(&ProxQuery::new(x.to_vec(), t, lambda, cond))
    }
}

/// Multi-start Newton prox of any mixture oracle.
pub struct BruteForceProx<'a>(pub &'a Oracle);

impl ProxFn for BruteForceProx<'_> {
    fn prox(&self, x: &[f64], t: f64, lambda: f64, cond: Condition) -> Result<Vec<f64>> {
        self.0.bruteforce_prox(&ProxQuery::new(x.to_vec(), t, lambda, cond))
    }
}

/// Exact score of a mixture oracle.
pub struct OracleScore<'a>(pub &'a Oracle);

impl ScoreFn for OracleScore<'_> {
    fn score(&self, x: &[f64], t: f64, cond: Condition) -> Result<Vec<f64>> {
        self.0.score(cond, x, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RuleKind {
    SdeEuler,
    OdeEuler,
    Pda,
    PdaHybrid,
}

impl RuleKind {
    pub const ALL: [RuleKind; 4] = [RuleKind::SdeEuler, RuleKind::OdeEuler, RuleKind::Pda, RuleKind::PdaHybrid];

    pub fn is_proximal(self) -> bool {
        matches!(self, RuleKind::Pda | RuleKind::PdaHybrid)
    }

    pub fn tag(self) -> &'static str {
        match self {
            RuleKind::SdeEuler => "sde-euler",
            RuleKind::OdeEuler => "ode-euler",
            RuleKind::Pda => "pda",
            RuleKind::PdaHybrid => "pda-hybrid",
        }
    }
}

impl fmt::Display for RuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for RuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RuleKind::ALL
            .into_iter()
            .find(|r| r.tag() == s)
            .ok_or_else(|| Error::Argument(format!("unknown sampler `{s}` (expected sde-euler, ode-euler, pda, pda-hybrid)")))
    }
}

/// A step rule plus its guidance weight `omega >= -1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRule {
    pub kind: RuleKind,
    pub omega: f64,
}

impl StepRule {
    pub fn new(kind: RuleKind, omega: f64) -> Result<Self> {
        if !(omega >= -1.0 && omega.is_finite()) {
            return Err(Error::Argument(format!("guidance weight must be >= -1, got {omega}")));
        }
        Ok(Self { kind, omega })
    }

    /// Checks rule-specific constraints on the grid (PDA needs every `gamma_k < 2`).
    pub fn check_grid(&self, grid: &TimeGrid) -> Result<()> {
        if self.kind == RuleKind::Pda {
            for k in (1..=grid.steps()).rev() {
                let gamma = grid.gamma(k);
                if gamma >= 2.0 {
                    return Err(Error::StepSize { step: k, gamma });
                }
            }
        }
        Ok(())
    }
}

/// `(1 + omega) cond - omega null`, elementwise. Every guided evaluation goes through this.
#[inline]
pub fn guide(cond: f64, null: f64, omega: f64) -> f64 {
    (1.0 + omega) * cond + (-omega) * null
}

fn finite_or(step: usize, what: &str, v: Vec<f64>) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::Numeric { step, what: what.to_string() })
    }
}

fn at_step<T>(step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(what) => Error::Numeric { step, what },
        other => other,
    })
}

fn check_dims(step: usize, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("step {step}: state has dimension {} but noise has {}", a.len(), b.len())));
    }
    Ok(())
}

/// `(1 + omega) s(x, t, c) - omega s(x, t, null)`; `omega = 0` skips the null branch.
pub fn score_cfg<S: ScoreFn + ?Sized>(score_fn: &S, x: &[f64], t: f64, cond: Condition, omega: f64) -> Result<Vec<f64>> {
    let cond_score = score_fn.score(x, t, cond)?;
    if omega == 0.0 {
        return Ok(cond_score);
    }
    let null_score = score_fn.score(x, t, Condition::Null)?;
    Ok(cond_score.iter().zip(&null_score).map(|(&c, &n)| guide(c, n, omega)).collect())
}

/// `(1 + omega) prox(x; c) - omega prox(x; null)`; `omega = 0` skips the null branch.
pub fn prox_cfg<P: ProxFn + ?Sized>(
    prox_fn: &P,
    x: &[f64],
    t: f64,
    lambda: f64,
    cond: Condition,
    omega: f64,
) -> Result<Vec<f64>> {
    let cond_prox = prox_fn.prox(x, t, lambda, cond)?;
    if omega == 0.0 {
        return Ok(cond_prox);
    }
    let null_prox = prox_fn.prox(x, t, lambda, Condition::Null)?;
    Ok(cond_prox.iter().zip(&null_prox).map(|(&c, &n)| guide(c, n, omega)).collect())
}

/// Explicit Euler–Maruyama: `X_{k-1} = X_k + gamma_k (X_k / 2 + s(X_k, t_k)) + sqrt(gamma_k) xi`.
pub fn sde_euler_step<S>(x: &[f64], k: usize, grid: &TimeGrid, score: S, xi: &[f64]) -> Result<Vec<f64>>
where
    S: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    check_dims(k, x, xi)?;
    let gamma = grid.gamma(k);
    let s = at_step(k, score(x, grid.time(k)))?;
    let sg = gamma.sqrt();
    let out = x
        .iter()
        .zip(&s)
        .zip(xi)
        .map(|((x, s), n)| x + gamma * (0.5 * x + s) + sg * n)
        .collect();
    finite_or(k, "sde-euler update", out)
}

/// Euler step of the probability-flow ODE: `X_{k-1} = X_k + gamma_k (X_k + s(X_k, t_k)) / 2`.
pub fn ode_euler_step<S>(x: &[f64], k: usize, grid: &TimeGrid, score: S) -> Result<Vec<f64>>
where
    S: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let gamma = grid.gamma(k);
    let s = at_step(k, score(x, grid.time(k)))?;
    let out = x.iter().zip(&s).map(|(x, s)| x + gamma * (0.5 * x + 0.5 * s)).collect();
    finite_or(k, "ode-euler update", out)
}

/// Fully implicit step: prox with weight `2 gamma / (2 - gamma)` at `t_{k-1}` of
/// `2 (X_k + sqrt(gamma) xi) / (2 - gamma)`. Requires `gamma_k < 2`.
pub fn pda_step<P>(x: &[f64], k: usize, grid: &TimeGrid, prox: P, xi: &[f64]) -> Result<Vec<f64>>
where
    P: Fn(&[f64], f64, f64) -> Result<Vec<f64>>,
{
    check_dims(k, x, xi)?;
    let gamma = grid.gamma(k);
    if gamma >= 2.0 {
        return Err(Error::StepSize { step: k, gamma });
    }
    let lambda = 2.0 * gamma / (2.0 - gamma);
    let scale = 2.0 / (2.0 - gamma);
    let sg = gamma.sqrt();
    let input: Vec<f64> = x.iter().zip(xi).map(|(x, n)| scale * (x + sg * n)).collect();
    let out = at_step(k, prox(&input, grid.time(k - 1), lambda))?;
    finite_or(k, "pda update", out)
}

/// Forward–backward step: prox with weight `gamma_k` at `t_{k-1}` of
/// `(1 + gamma_k / 2) X_k + sqrt(gamma_k) xi`. No step-size cap.
pub fn pda_hybrid_step<P>(x: &[f64], k: usize, grid: &TimeGrid, prox: P, xi: &[f64]) -> Result<Vec<f64>>
where
    P: Fn(&[f64], f64, f64) -> Result<Vec<f64>>,
{
    check_dims(k, x, xi)?;
    let gamma = grid.gamma(k);
    let input = hybrid_input(gamma, x, xi);
    let out = at_step(k, prox(&input, grid.time(k - 1), gamma))?;
    finite_or(k, "pda-hybrid update", out)
}

/// `(1 + gamma / 2) x + sqrt(gamma) xi`, shared by the X- and Y-chain forms.
#[inline]
pub fn hybrid_input(gamma: f64, x: &[f64], xi: &[f64]) -> Vec<f64> {
    let a = 1.0 + 0.5 * gamma;
    let sg = gamma.sqrt();
    x.iter().zip(xi).map(|(x, n)| a * x + sg * n).collect()
}

/// Which learned or analytic function drives a chain.
#[derive(Clone, Copy)]
pub enum Drift<'a> {
    Score(&'a dyn ScoreFn),
    Prox(&'a dyn ProxFn),
}

/// A recorded chain.
///
/// `states[k]` is the state at index `k` (so `states[0]` is the sample and
/// `states[K]` the initial state). For the hybrid rule the states are the
/// auxiliary `Y_k`; for the other rules they are the `X_k`. `noises[k - 1]`
/// is `xi_k` and `init` is the standard-normal `X_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub rule: StepRule,
    pub cond: Condition,
    pub grid: TimeGrid,
    pub init: Vec<f64>,
    pub noises: Vec<Vec<f64>>,
    pub states: Vec<Vec<f64>>,
}

impl ChainRecord {
    pub fn sample(&self) -> &[f64] {
        &self.states[0]
    }

    /// The Gaussian noise `xi_k`, `k in 1..=K`.
    pub fn noise(&self, k: usize) -> &[f64] {
        &self.noises[k - 1]
    }
}

/// Pre-draws the initial state and all step noises of chain `chain` under `seed`.
pub fn chain_noises(seed: u64, chain: u64, steps: usize, dim: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let init = rng::normal_vec(&mut rng::stream(seed, &[rng::domain::CHAIN, chain, u64::MAX]), dim);
    let noises = (1..=steps as u64)
        .map(|k| rng::normal_vec(&mut rng::stream(seed, &[rng::domain::CHAIN, chain, k]), dim))
        .collect();
    (init, noises)
}

/// Runs one chain of `rule` on `grid` with noises keyed by `(seed, chain)`.
pub fn run_chain(
    rule: StepRule,
    grid: &TimeGrid,
    drift: Drift<'_>,
    cond: Condition,
    dim: usize,
    seed: u64,
    chain: u64,
) -> Result<ChainRecord> {
    let (init, noises) = chain_noises(seed, chain, grid.steps(), dim);
    run_chain_with_noises(rule, grid, drift, cond, init, noises)
}

/// [`run_chain`] with caller-supplied noises.
pub fn run_chain_with_noises(
    rule: StepRule,
    grid: &TimeGrid,
    drift: Drift<'_>,
    cond: Condition,
    init: Vec<f64>,
    noises: Vec<Vec<f64>>,
) -> Result<ChainRecord> {
    let steps = grid.steps();
    if noises.len() != steps {
        return Err(Error::Argument(format!("{} noises for a {steps}-step grid", noises.len())));
    }
    rule.check_grid(grid)?;
    let mut states = vec![Vec::new(); steps + 1];
    let omega = rule.omega;

    match (rule.kind, drift) {
        (RuleKind::SdeEuler | RuleKind::OdeEuler, Drift::Score(score_fn)) => {
            let score = |x: &[f64], t: f64| score_cfg(score_fn, x, t, cond, omega);
            states[steps] = init.clone();
            for k in (1..=steps).rev() {
                states[k - 1] = if rule.kind == RuleKind::SdeEuler {
                    sde_euler_step(&states[k], k, grid, score, &noises[k - 1])?
                } else {
                    ode_euler_step(&states[k], k, grid, score)?
                };
            }
        }
        (RuleKind::Pda, Drift::Prox(prox_fn)) => {
            let prox = |x: &[f64], t: f64, lambda: f64| prox_cfg(prox_fn, x, t, lambda, cond, omega);
            states[steps] = init.clone();
            for k in (1..=steps).rev() {
                states[k - 1] = pda_step(&states[k], k, grid, prox, &noises[k - 1])?;
            }
        }
        (RuleKind::PdaHybrid, Drift::Prox(prox_fn)) => {
            // Y_K = (1 + gamma_K / 2) X_K + sqrt(gamma_K) xi_K with X_K ~ N(0, I).
            states[steps] = hybrid_input(grid.gamma(steps), &init, &noises[steps - 1]);
            for k in (1..=steps).rev() {
                let f = at_step(k, prox_cfg(prox_fn, &states[k], grid.time(k - 1), grid.gamma(k), cond, omega))?;
                let f = finite_or(k, "guided prox", f)?;
                states[k - 1] = if k >= 2 { hybrid_input(grid.gamma(k - 1), &f, &noises[k - 2]) } else { f };
            }
        }
        (kind, _) => {
            return Err(Error::Argument(format!("sampler `{kind}` cannot be driven by this model kind")));
        }
    }
    Ok(ChainRecord { rule, cond, grid: grid.clone(), init, noises, states })
}

/// Runs chains `first..first + count` and returns their final samples.
pub fn sample_many(
    rule: StepRule,
    grid: &TimeGrid,
    drift: Drift<'_>,
    cond: Condition,
    dim: usize,
    seed: u64,
    first: u64,
    count: usize,
) -> Result<Vec<Vec<f64>>> {
    (first..first + count as u64)
        .map(|i| run_chain(rule, grid, drift, cond, dim, seed, i).map(|r| r.states[0].clone()))
        .collect()
}

/// A learned model evaluated a whole batch of chains at a time.
#[derive(Clone, Copy)]
pub enum BatchModel<'a> {
    Prox(&'a ProxNet),
    Score(&'a ScoreNet),
}

/// Rows `[x_0 .. x_{n-1}]` under `cond`, then (unless `omega = 0`) the same rows under null.
fn guided_queries(xs: &[Vec<f64>], t: f64, lambda: Option<f64>, cond: Condition, omega: f64) -> QueryBatch {
    let dim = xs.first().map_or(0, Vec::len);
    let branches: &[Condition] = if omega == 0.0 { &[cond] } else { &[cond, Condition::Null] };
    let mut q = QueryBatch::with_capacity(dim, xs.len() * branches.len());
    for &c in branches {
        for x in xs {
            q.push(x, t, lambda, c);
        }
    }
    q
}

/// Combines the stacked conditional and null outputs of [`guided_queries`].
fn combine_guided(out: ndarray::ArrayView2<'_, f64>, n: usize, omega: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            if omega == 0.0 {
                out.row(i).to_vec()
            } else {
                out.row(i).iter().zip(out.row(n + i)).map(|(&c, &u)| guide(c, u, omega)).collect()
            }
        })
        .collect()
}

/// `f_omega` for a prox network on a batch of points.
pub fn guided_prox_batch(net: &ProxNet, xs: &[Vec<f64>], t: f64, lambda: f64, cond: Condition, omega: f64) -> Result<Vec<Vec<f64>>> {
    let out = net.forward_batch(&guided_queries(xs, t, Some(lambda), cond, omega))?;
    Ok(combine_guided(out.view(), xs.len(), omega))
}

/// Guided score of a score network on a batch of points.
pub fn guided_score_batch(net: &ScoreNet, xs: &[Vec<f64>], t: f64, cond: Condition, omega: f64) -> Result<Vec<Vec<f64>>> {
    let out = net.forward_batch(&guided_queries(xs, t, None, cond, omega))?;
    Ok(combine_guided(out.view(), xs.len(), omega))
}

/// Runs chains `first..first + count` in lockstep with one batched model call
/// per step. Produces the same records as [`run_chain`] on each chain.
pub fn run_chains_batched(
    rule: StepRule,
    grid: &TimeGrid,
    model: BatchModel<'_>,
    cond: Condition,
    dim: usize,
    seed: u64,
    first: u64,
    count: usize,
) -> Result<Vec<ChainRecord>> {
    let (inits, noises): (Vec<_>, Vec<_>) = (first..first + count as u64).map(|i| chain_noises(seed, i, grid.steps(), dim)).unzip();
    run_chains_batched_with_noises(rule, grid, model, cond, inits, noises)
}

/// [`run_chains_batched`] with caller-supplied noises (`noises[chain][k - 1]`).
pub fn run_chains_batched_with_noises(
    rule: StepRule,
    grid: &TimeGrid,
    model: BatchModel<'_>,
    cond: Condition,
    inits: Vec<Vec<f64>>,
    noises: Vec<Vec<Vec<f64>>>,
) -> Result<Vec<ChainRecord>> {
    let steps = grid.steps();
    let n = inits.len();
    if noises.len() != n || noises.iter().any(|z| z.len() != steps) {
        return Err(Error::Argument("noise array does not match chain count and grid".into()));
    }
    rule.check_grid(grid)?;
    let omega = rule.omega;
    // states[k][chain]
    let mut states: Vec<Vec<Vec<f64>>> = vec![Vec::new(); steps + 1];

    match (rule.kind, model) {
        (RuleKind::SdeEuler | RuleKind::OdeEuler, BatchModel::Score(net)) => {
            states[steps] = inits.clone();
            for k in (1..=steps).rev() {
                let scores = at_step(k, guided_score_batch(net, &states[k], grid.time(k), cond, omega))?;
                let mut next = Vec::with_capacity(n);
                for (j, s) in scores.into_iter().enumerate() {
                    let given = |_: &[f64], _: f64| Ok(s.clone());
                    next.push(if rule.kind == RuleKind::SdeEuler {
                        sde_euler_step(&states[k][j], k, grid, given, &noises[j][k - 1])?
                    } else {
                        ode_euler_step(&states[k][j], k, grid, given)?
                    });
                }
                states[k - 1] = next;
            }
        }
        (RuleKind::Pda, BatchModel::Prox(net)) => {
            states[steps] = inits.clone();
            for k in (1..=steps).rev() {
                let gamma = grid.gamma(k);
                let scale = 2.0 / (2.0 - gamma);
                let sg = gamma.sqrt();
                let inputs: Vec<Vec<f64>> = states[k]
                    .iter()
                    .zip(&noises)
                    .map(|(x, z)| x.iter().zip(&z[k - 1]).map(|(x, n)| scale * (x + sg * n)).collect())
                    .collect();
                let lambda = 2.0 * gamma / (2.0 - gamma);
                let outs = at_step(k, guided_prox_batch(net, &inputs, grid.time(k - 1), lambda, cond, omega))?;
                states[k - 1] = outs.into_iter().map(|o| finite_or(k, "pda update", o)).collect::<Result<_>>()?;
            }
        }
        (RuleKind::PdaHybrid, BatchModel::Prox(net)) => {
            states[steps] = inits.iter().zip(&noises).map(|(x, z)| hybrid_input(grid.gamma(steps), x, &z[steps - 1])).collect();
            for k in (1..=steps).rev() {
                let fs = at_step(k, guided_prox_batch(net, &states[k], grid.time(k - 1), grid.gamma(k), cond, omega))?;
                let mut next = Vec::with_capacity(n);
                for (j, f) in fs.into_iter().enumerate() {
                    let f = finite_or(k, "guided prox", f)?;
                    next.push(if k >= 2 { hybrid_input(grid.gamma(k - 1), &f, &noises[j][k - 2]) } else { f });
                }
                states[k - 1] = next;
            }
        }
        (kind, _) => {
            return Err(Error::Argument(format!("sampler `{kind}` cannot be driven by this model kind")));
        }
    }

    let mut records = Vec::with_capacity(n);
    for (j, (init, z)) in inits.into_iter().zip(noises).enumerate() {
        records.push(ChainRecord {
            rule,
            cond,
            grid: grid.clone(),
            init,
            noises: z,
            states: states.iter_mut().map(|s| std::mem::take(&mut s[j])).collect(),
        });
    }
    Ok(records)
}

/// Final samples of chains `first..first + count`, batched in blocks of `block` chains.
pub fn sample_batched(
    rule: StepRule,
    grid: &TimeGrid,
    model: BatchModel<'_>,
    cond: Condition,
    dim: usize,
    seed: u64,
    first: u64,
    count: usize,
    block: usize,
) -> Result<Vec<Vec<f64>>> {
    let block = block.max(1);
    let mut out = Vec::with_capacity(count);
    let mut start = first;
    let end = first + count as u64;
    while start < end {
        let n = block.min((end - start) as usize);
        for r in run_chains_batched(rule, grid, model, cond, dim, seed, start, n)? {
            out.push(r.states.into_iter().next().expect("chain has a final state"));
        }
        start += n as u64;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;
    use crate::target::MixtureTarget;

    fn std_normal_oracle() -> Oracle {
        Oracle::new(MixtureTarget::gaussian(vec![0.0], 1.0).unwrap(), NoiseSchedule::default())
    }

    fn grid_with_gamma(gamma: f64) -> TimeGrid {
        // One step from t = 0.5 to t = 1 with constant beta = 2 gamma.
        TimeGrid::uniform(&NoiseSchedule::new(2.0 * gamma, 2.0 * gamma).unwrap(), 1, 0.5).unwrap()
    }

    #[test]
    fn rule_parsing() {
        for r in RuleKind::ALL {
            assert_eq!(r.tag().parse::<RuleKind>().unwrap(), r);
        }
        assert!("euler".parse::<RuleKind>().is_err());
        assert!(StepRule::new(RuleKind::PdaHybrid, -1.5).is_err());
    }

    #[test]
    fn score_cfg_reductions() {
        let o = Oracle::new(
            MixtureTarget::new(
                1,
                0.5,
                vec![
                    vec![crate::Component { weight: 1.0, mean: vec![2.0] }],
                    vec![crate::Component { weight: 1.0, mean: vec![-1.0] }],
                ],
            )
            .unwrap(),
            NoiseSchedule::default(),
        );
        let s = OracleScore(&o);
        let x = [0.4];
        let c = o.score(Condition::Label(0), &x, 0.2).unwrap()[0];
        let u = o.score(Condition::Null, &x, 0.2).unwrap()[0];
        assert_eq!(score_cfg(&s, &x, 0.2, Condition::Label(0), 0.0).unwrap()[0], c);
        assert!((score_cfg(&s, &x, 0.2, Condition::Label(0), -1.0).unwrap()[0] - u).abs() < 1e-15);
        assert!((score_cfg(&s, &x, 0.2, Condition::Label(0), 4.0).unwrap()[0] - (5.0 * c - 4.0 * u)).abs() < 1e-12);
    }

    #[test]
    fn prox_cfg_reductions() {
        let a = Oracle::new(MixtureTarget::gaussian(vec![2.0], 1.0).unwrap(), NoiseSchedule::default());
        let b = Oracle::new(MixtureTarget::gaussian(vec![-1.0], 0.5).unwrap(), NoiseSchedule::default());
        // Conditional prox from one Gaussian, unconditional from another.
        let split = |x: &[f64], t: f64, l: f64, c: Condition| match c {
            Condition::Label(_) => a.prox_gaussian(&ProxQuery::new(x.to_vec(), t, l, Condition::Label(0))),
            Condition::Null => b.prox_gaussian(&ProxQuery::new(x.to_vec(), t, l, Condition::Label(0))),
        };
        let x = [0.7];
        let (t, l) = (0.3, 1.5);
        let pc = split(&x, t, l, Condition::Label(0)).unwrap()[0];
        let pn = split(&x, t, l, Condition::Null).unwrap()[0];
        assert_eq!(prox_cfg(&split, &x, t, l, Condition::Label(0), 0.0).unwrap()[0], pc);
        let guided = prox_cfg(&split, &x, t, l, Condition::Label(0), 4.0).unwrap()[0];
        assert!((guided - (5.0 * pc - 4.0 * pn)).abs() < 1e-12);

        let same = GaussianProx(&a);
        let o0 = prox_cfg(&same, &x, t, l, Condition::Label(0), 0.0).unwrap()[0];
        for omega in [0.5, 4.0, 10.0] {
            let v = prox_cfg(&|x: &[f64], t, l, _c| same.prox(x, t, l, Condition::Label(0)), &x, t, l, Condition::Label(0), omega)
                .unwrap()[0];
            assert!((v - o0).abs() < 1e-12);
        }
    }

    #[test]
    fn sde_euler_examples() {
        let o = std_normal_oracle();
        let score = |x: &[f64], t: f64| o.score(Condition::Label(0), x, t);
        let g = grid_with_gamma(0.1);
        assert!((g.gamma(1) - 0.1).abs() < 1e-15);
        let out = sde_euler_step(&[1.0], 1, &g, score, &[0.0]).unwrap()[0];
        assert!((out - 0.95).abs() < 1e-14);
        let out = sde_euler_step(&[1.0], 1, &g, score, &[1.0]).unwrap()[0];
        assert!((out - (0.95 + 0.1f64.sqrt())).abs() < 1e-14);
        assert!((out - 1.26623).abs() < 1e-5);

        let tiny = grid_with_gamma(1e-12);
        let zero = |x: &[f64], _t: f64| Ok(vec![0.0; x.len()]);
        assert!((sde_euler_step(&[0.8], 1, &tiny, zero, &[0.3]).unwrap()[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn ode_euler_examples() {
        let o = std_normal_oracle();
        let score = |x: &[f64], t: f64| o.score(Condition::Label(0), x, t);
        let g = grid_with_gamma(0.1);
        assert_eq!(ode_euler_step(&[1.0], 1, &g, score).unwrap()[0], 1.0);
        let zero = |x: &[f64], _t: f64| Ok(vec![0.0; x.len()]);
        assert!((ode_euler_step(&[0.8], 1, &grid_with_gamma(1e-12), zero).unwrap()[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn ode_chain_transports_the_mean() {
        // The probability-flow ODE is linear for a Gaussian target, so the
        // mean of p_1 maps to the mean of p_{t_min}.
        let mu = 2.0;
        let o = Oracle::new(MixtureTarget::gaussian(vec![mu], 0.5).unwrap(), NoiseSchedule::default());
        let grid = TimeGrid::uniform(o.schedule(), 100, 1e-3).unwrap();
        let start = o.schedule().alpha_at(1.0).unwrap().sqrt() * mu;
        let rule = StepRule::new(RuleKind::OdeEuler, 0.0).unwrap();
        let scorer = OracleScore(&o);
        let rec = run_chain_with_noises(rule, &grid, Drift::Score(&scorer), Condition::Label(0), vec![start], vec![vec![0.0]; 100]).unwrap();
        let expected = o.schedule().alpha_at(1e-3).unwrap().sqrt() * mu;
        assert!((rec.sample()[0] - expected).abs() <= 0.02 * expected.abs(), "{} vs {expected}", rec.sample()[0]);
    }

    #[test]
    fn pda_examples() {
        let o = std_normal_oracle();
        let prox = |x: &[f64], t: f64, l: f64| GaussianProx(&o).prox(x, t, l, Condition::Label(0));
        let g = grid_with_gamma(1.0);
        let (x, xi) = (0.9, -0.4);
        let out = pda_step(&[x], 1, &g, prox, &[xi]).unwrap()[0];
        assert!((out - 2.0 * (x + xi) / 3.0).abs() < 1e-14);

        let tiny = grid_with_gamma(1e-12);
        assert!((pda_step(&[0.9], 1, &tiny, prox, &[0.5]).unwrap()[0] - 0.9).abs() < 1e-6);

        assert!(pda_step(&[0.9], 1, &grid_with_gamma(1.9), prox, &[0.5]).is_ok());
        assert!(matches!(pda_step(&[0.9], 1, &grid_with_gamma(2.0), prox, &[0.5]), Err(Error::StepSize { step: 1, .. })));
    }

    #[test]
    fn pda_hybrid_examples() {
        let o = std_normal_oracle();
        let prox = |x: &[f64], t: f64, l: f64| GaussianProx(&o).prox(x, t, l, Condition::Label(0));
        let out = pda_hybrid_step(&[1.0], 1, &grid_with_gamma(2.0), prox, &[0.0]).unwrap()[0];
        assert!((out - 2.0 / 3.0).abs() < 1e-14);
        assert!((pda_hybrid_step(&[0.9], 1, &grid_with_gamma(1e-12), prox, &[0.5]).unwrap()[0] - 0.9).abs() < 1e-6);
        assert!(pda_hybrid_step(&[0.9], 1, &grid_with_gamma(10.0), prox, &[0.5]).unwrap()[0].is_finite());
    }

    #[test]
    fn step_errors_carry_the_step_index() {
        let g = TimeGrid::uniform(&NoiseSchedule::default(), 4, 1e-3).unwrap();
        let bad = |x: &[f64], _t: f64| Ok(vec![f64::NAN; x.len()]);
        assert!(matches!(sde_euler_step(&[1.0], 3, &g, bad, &[0.0]), Err(Error::Numeric { step: 3, .. })));
        let rule = StepRule::new(RuleKind::Pda, 0.0).unwrap();
        let o = std_normal_oracle();
        let gp = GaussianProx(&o);
        let err = run_chain(rule, &g, Drift::Prox(&gp), Condition::Label(0), 1, 0, 0);
        assert!(matches!(err, Err(Error::StepSize { step: 4, .. })));
    }

    #[test]
    fn rule_and_drift_must_agree() {
        let g = TimeGrid::uniform(&NoiseSchedule::default(), 4, 1e-3).unwrap();
        let o = std_normal_oracle();
        let gp = GaussianProx(&o);
        let rule = StepRule::new(RuleKind::SdeEuler, 0.0).unwrap();
        assert!(run_chain(rule, &g, Drift::Prox(&gp), Condition::Label(0), 1, 0, 0).is_err());
    }

    #[test]
    fn single_step_chain_unrolls() {
        let o = std_normal_oracle();
        let gp = GaussianProx(&o);
        let g = grid_with_gamma(1.0);
        let rule = StepRule::new(RuleKind::PdaHybrid, 0.0).unwrap();
        let rec = run_chain(rule, &g, Drift::Prox(&gp), Condition::Label(0), 1, 3, 0).unwrap();
        let y1 = 1.5 * rec.init[0] + rec.noise(1)[0];
        assert_eq!(rec.states[1][0], y1);
        let f = gp.prox(&[y1], g.time(0), 1.0, Condition::Label(0)).unwrap()[0];
        assert_eq!(rec.sample()[0], f);
    }

    #[test]
    fn initial_auxiliary_variance() {
        // Var(Y_K) = (1 + gamma/2)^2 + gamma = 3.25 at gamma = 1.
        let o = std_normal_oracle();
        let gp = GaussianProx(&o);
        let g = grid_with_gamma(1.0);
        let rule = StepRule::new(RuleKind::PdaHybrid, 0.0).unwrap();
        let n = 50_000;
        let ys: Vec<f64> = (0..n)
            .map(|i| run_chain(rule, &g, Drift::Prox(&gp), Condition::Label(0), 1, 17, i).unwrap().states[1][0])
            .collect();
        let mean = ys.iter().sum::<f64>() / n as f64;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 3.25).abs() < 4.0 * 3.25 * (2.0 / n as f64).sqrt(), "{var}");
    }

    #[test]
    fn chains_are_reproducible() {
        let o = std_normal_oracle();
        let gp = GaussianProx(&o);
        let g = TimeGrid::uniform(o.schedule(), 10, 1e-3).unwrap();
        let rule = StepRule::new(RuleKind::PdaHybrid, 0.0).unwrap();
        let a = run_chain(rule, &g, Drift::Prox(&gp), Condition::Label(0), 1, 5, 2).unwrap();
        let b = run_chain(rule, &g, Drift::Prox(&gp), Condition::Label(0), 1, 5, 2).unwrap();
        assert_eq!(a, b);
        let c = run_chain(rule, &g, Drift::Prox(&gp), Condition::Label(0), 1, 5, 3).unwrap();
        assert_ne!(a.sample(), c.sample());
    }

    #[test]
    fn auxiliary_chain_matches_direct_chain() {
        // The X-chain driven by pda_hybrid_step and the recorded Y-chain share noises.
        let target = MixtureTarget::ring(8, 4.0, 0.09, 2).unwrap();
        let o = Oracle::new(target, NoiseSchedule::default());
        let bf = BruteForceProx(&o);
        for steps in [4, 10] {
            let g = TimeGrid::uniform(o.schedule(), steps, 1e-3).unwrap();
            let rule = StepRule::new(RuleKind::PdaHybrid, 2.0).unwrap();
            for chain in 0..5 {
                let rec = run_chain(rule, &g, Drift::Prox(&bf), Condition::Label(1), 2, 21, chain).unwrap();
                let prox = |x: &[f64], t: f64, l: f64| prox_cfg(&bf, x, t, l, Condition::Label(1), 2.0);
                let mut x = rec.init.clone();
                for k in (1..=steps).rev() {
                    x = pda_hybrid_step(&x, k, &g, prox, rec.noise(k)).unwrap();
                }
                assert_eq!(x.as_slice(), rec.sample());
            }
        }
    }

    #[test]
    fn first_order_conditions_hold_along_a_chain() {
        let target = MixtureTarget::ring(8, 4.0, 0.09, 2).unwrap();
        let o = Oracle::new(target, NoiseSchedule::default());
        let checked = |x: &[f64], t: f64, l: f64, c: Condition| {
            let q = ProxQuery::new(x.to_vec(), t, l, c);
            let u = o.bruteforce_prox(&q)?;
            let r = o.prox_residual(&u, &q)?;
            assert!(r <= 1e-8, "residual {r} at t = {t}, lambda = {l}");
            Ok(u)
        };
        let g = TimeGrid::uniform(o.schedule(), 10, 1e-3).unwrap();
        let rule = StepRule::new(RuleKind::PdaHybrid, 4.0).unwrap();
        for chain in 0..10 {
            run_chain(rule, &g, Drift::Prox(&checked), Condition::Label(0), 2, 8, chain).unwrap();
        }
    }

    #[test]
    fn zero_guidance_equals_conditional_chain() {
        let target = MixtureTarget::ring(8, 4.0, 0.09, 2).unwrap();
        let o = Oracle::new(target, NoiseSchedule::default());
        let bf = BruteForceProx(&o);
        let cond_only = |x: &[f64], t: f64, l: f64, _c: Condition| o.bruteforce_prox(&ProxQuery::new(x.to_vec(), t, l, Condition::Label(0)));
        let g = TimeGrid::uniform(o.schedule(), 6, 1e-3).unwrap();
        let rule = StepRule::new(RuleKind::PdaHybrid, 0.0).unwrap();
        let a = run_chain(rule, &g, Drift::Prox(&bf), Condition::Label(0), 2, 4, 1).unwrap();
        let b = run_chain(rule, &g, Drift::Prox(&cond_only), Condition::Label(0), 2, 4, 1).unwrap();
        assert_eq!(a.states, b.states);
    }

    /// Mean and variance of X_0 for the hybrid rule on N(m, s2) in 1-d, where
    /// every step is affine: X_{k-1} = a_k ((1 + g/2) X_k + sqrt(g) xi) + b_k.
    fn hybrid_gaussian_recursion(o: &Oracle, grid: &TimeGrid, m: f64) -> (f64, f64) {
        let (mut mean, mut var) = (0.0, 1.0);
        for k in (1..=grid.steps()).rev() {
            let g = grid.gamma(k);
            let t = grid.time(k - 1);
            let alpha = o.schedule().alpha_at(t).unwrap();
            let v = alpha * o.target().sigma2() + 1.0 - alpha;
            let a = v / (v + g);
            let b = g * alpha.sqrt() * m / (v + g);
            let s = 1.0 + 0.5 * g;
            mean = a * s * mean + b;
            var = a * a * (s * s * var + g);
        }
        (mean, var)
    }

    #[test]
    fn hybrid_chain_matches_gaussian_recursion() {
        let (m, s2) = (1.5, 0.6);
        let o = Oracle::new(MixtureTarget::gaussian(vec![m], s2).unwrap(), NoiseSchedule::default());
        let gp = GaussianProx(&o);
        let rule = StepRule::new(RuleKind::PdaHybrid, 0.0).unwrap();
        for steps in [4, 10] {
            let g = TimeGrid::uniform(o.schedule(), steps, 1e-3).unwrap();
            let (em, ev) = hybrid_gaussian_recursion(&o, &g, m);
            let n = 100_000;
            let xs = sample_many(rule, &g, Drift::Prox(&gp), Condition::Label(0), 1, 99, 0, n).unwrap();
            let mean = xs.iter().map(|x| x[0]).sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x[0] - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((mean - em).abs() < 4.0 * (ev / n as f64).sqrt(), "K={steps}: mean {mean} vs {em}");
            assert!((var - ev).abs() < 4.0 * ev * (2.0 / n as f64).sqrt(), "K={steps}: var {var} vs {ev}");
        }
    }

    fn randomized_nets() -> (ProxNet, ScoreNet) {
        let mut p = ProxNet::new(2, 2, NoiseSchedule::default(), 3).unwrap();
        let mut s = ScoreNet::new(2, 2, NoiseSchedule::default(), 4).unwrap();
        let mut r = rng::stream(5, &[rng::domain::CHECK]);
        for v in p.params_mut().iter_mut().chain(s.params_mut().iter_mut()) {
            *v += 0.05 * rng::normal(&mut r);
        }
        (p, s)
    }

    #[test]
    fn batched_chains_match_single_chains() {
        let (p, s) = randomized_nets();
        let sched = NoiseSchedule::default();
        for (kind, steps) in [(RuleKind::SdeEuler, 10), (RuleKind::OdeEuler, 6), (RuleKind::Pda, 25), (RuleKind::PdaHybrid, 10)] {
            let g = TimeGrid::uniform(&sched, steps, 1e-3).unwrap();
            for omega in [0.0, 4.0] {
                let rule = StepRule::new(kind, omega).unwrap();
                let (model, drift) = if kind.is_proximal() {
                    (BatchModel::Prox(&p), Drift::Prox(&p as &dyn ProxFn))
                } else {
                    (BatchModel::Score(&s), Drift::Score(&s as &dyn ScoreFn))
                };
                let batched = run_chains_batched(rule, &g, model, Condition::Label(1), 2, 12, 3, 7).unwrap();
                for (j, rec) in batched.iter().enumerate() {
                    let single = run_chain(rule, &g, drift, Condition::Label(1), 2, 12, 3 + j as u64).unwrap();
                    assert_eq!(&single, rec, "{kind} omega={omega} chain {j}");
                }
                let samples = sample_batched(rule, &g, model, Condition::Label(1), 2, 12, 3, 7, 3).unwrap();
                assert!(samples.iter().zip(&batched).all(|(a, r)| a.as_slice() == r.sample()));
            }
        }
    }

    #[test]
    fn batched_pda_rejects_large_steps() {
        let (p, _) = randomized_nets();
        let g = TimeGrid::uniform(&NoiseSchedule::default(), 4, 1e-3).unwrap();
        let rule = StepRule::new(RuleKind::Pda, 0.0).unwrap();
        assert!(matches!(run_chains_batched(rule, &g, BatchModel::Prox(&p), Condition::Label(0), 2, 0, 0, 3), Err(Error::StepSize { .. })));
    }
}
