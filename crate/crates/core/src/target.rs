//! Analytic conditional targets.
//!
//! Every target is a mixture of isotropic Gaussians with one shared variance.
//! The forward process keeps that family closed, so the time-`t` marginal,
//! its score, and its proximal operator are all available in closed form or
//! to machine precision. These oracles gate every other test in the crate.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::NoiseSchedule;

/// A condition label or the reserved unconditional token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Label(usize),
    Null,
}

impl std::fmt::Display for Condition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Condition::Label(c) => write!(f, "{c}"),
            Condition::Null => f.write_str("null"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
}

/// Per-label Gaussian mixtures sharing one isotropic variance. The
/// unconditional distribution is the equal-weight mixture over labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureTarget {
    dim: usize,
    sigma2: f64,
    labels: Vec<Vec<Component>>,
}

impl MixtureTarget {
    pub fn new(dim: usize, sigma2: f64, labels: Vec<Vec<Component>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("target dimension must be positive".into()));
        }
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Argument(format!("component variance must be positive, got {sigma2}")));
        }
        if labels.is_empty() {
            return Err(Error::Argument("target needs at least one label".into()));
        }
        for (c, comps) in labels.iter().enumerate() {
            if comps.is_empty() {
                return Err(Error::Argument(format!("label {c} has no components")));
            }
            let mut total = 0.0;
            for comp in comps {
                if comp.mean.len() != dim {
                    return Err(Error::Argument(format!(
                        "label {c}: mean of dimension {} in a {dim}-d target",
                        comp.mean.len()
                    )));
                }
                if !comp.mean.iter().all(|m| m.is_finite()) {
                    return Err(Error::Argument(format!("label {c}: non-finite mean")));
                }
                if !(comp.weight >= 0.0) {
                    return Err(Error::Argument(format!("label {c}: negative weight {}", comp.weight)));
                }
                total += comp.weight;
            }
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::Argument(format!("label {c}: weights sum to {total}, not 1")));
            }
        }
        Ok(Self { dim, sigma2, labels })
    }

    /// Single label, single component `N(mean, sigma2 I)`.
    pub fn gaussian(mean: Vec<f64>, sigma2: f64) -> Result<Self> {
        let dim = mean.len();
        Self::new(dim, sigma2, vec![vec![Component { weight: 1.0, mean }]])
    }

    /// `modes` equally weighted modes on a circle of `radius` in 2-d, dealt
    /// round-robin to `labels` labels (mode `j` goes to label `j % labels`).
    pub fn ring(modes: usize, radius: f64, sigma2: f64, labels: usize) -> Result<Self> {
        if labels == 0 || modes < labels || modes % labels != 0 {
            return Err(Error::Argument(format!("cannot split {modes} modes evenly across {labels} labels")));
        }
        let per_label = modes / labels;
        let mut table = vec![Vec::with_capacity(per_label); labels];
        for j in 0..modes {
            let angle = 2.0 * PI * j as f64 / modes as f64;
            table[j % labels].push(Component {
                weight: 1.0 / per_label as f64,
                mean: vec![radius * angle.cos(), radius * angle.sin()],
            });
        }
        Self::new(2, sigma2, table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_components(&self) -> &[Vec<Component>] {
        &self.labels
    }

    fn check_condition(&self, cond: Condition) -> Result<()> {
        match cond {
            Condition::Label(c) if c >= self.labels.len() => Err(Error::Argument(format!(
                "unknown label {c}; target has {} labels",
                self.labels.len()
            ))),
            _ => Ok(()),
        }
    }

    /// Data-time mixture components of `p(. | cond)`.
    pub fn components(&self, cond: Condition) -> Result<Vec<Component>> {
        self.check_condition(cond)?;
        Ok(match cond {
            Condition::Label(c) => self.labels[c].clone(),
            Condition::Null => {
                let share = 1.0 / self.labels.len() as f64;
                self.labels
                    .iter()
                    .flatten()
                    .map(|comp| Component { weight: comp.weight * share, mean: comp.mean.clone() })
                    .collect()
            }
        })
    }

    /// The first component of a label; the reference point of the mode-distance reward.
    pub fn designated_mode(&self, label: usize) -> Result<&[f64]> {
        self.check_condition(Condition::Label(label))?;
        Ok(&self.labels[label][0].mean)
    }

    /// Draws one point from `p_data(. | cond)`.
    pub fn sample<R: Rng + ?Sized>(&self, cond: Condition, rng: &mut R) -> Result<Vec<f64>> {
        self.check_condition(cond)?;
        let label = match cond {
            Condition::Label(c) => c,
            Condition::Null => rng::index(rng, self.labels.len()),
        };
        let comps = &self.labels[label];
        let u = rng::uniform(rng);
        let mut acc = 0.0;
        let mut pick = comps.len() - 1;
        for (i, comp) in comps.iter().enumerate() {
            acc += comp.weight;
            if u < acc {
                pick = i;
                break;
            }
        }
        let sd = self.sigma2.sqrt();
        Ok(comps[pick].mean.iter().map(|m| m + sd * rng::normal(rng)).collect())
    }
}

/// Exact representation of the diffused marginal `p_t(. | c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusedMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variance: f64,
}

impl DiffusedMixture {
    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn log_terms(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim() as f64;
        let norm = -0.5 * d * (2.0 * PI * self.variance).ln();
        self.weights
            .iter()
            .zip(&self.means)
            .map(|(&w, m)| {
                let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                w.ln() + norm - 0.5 * sq / self.variance
            })
            .collect()
    }

    /// Posterior component probabilities at `x`.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let terms = self.log_terms(x);
        let lse = log_sum_exp(&terms);
        terms.iter().map(|l| (l - lse).exp()).collect()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        log_sum_exp(&self.log_terms(x))
    }

    pub fn score(&self, x: &[f64]) -> Vec<f64> {
        let r = self.responsibilities(x);
        let mut g = vec![0.0; x.len()];
        for (ri, m) in r.iter().zip(&self.means) {
            for j in 0..x.len() {
                g[j] -= ri * (x[j] - m[j]) / self.variance;
            }
        }
        g
    }

    /// Hessian of `ln p` at `x`, row-major `d x d`.
    pub fn log_hessian(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let r = self.responsibilities(x);
        let g = self.score(x);
        let mut h = vec![0.0; d * d];
        for (ri, m) in r.iter().zip(&self.means) {
            let s: Vec<f64> = (0..d).map(|j| -(x[j] - m[j]) / self.variance).collect();
            for a in 0..d {
                for b in 0..d {
                    h[a * d + b] += ri * s[a] * s[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                h[a * d + b] -= g[a] * g[b];
            }
            h[a * d + a] -= 1.0 / self.variance;
        }
        h
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Arguments of `prox_{-lambda ln p_t(. | cond)}(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxQuery {
    pub x: Vec<f64>,
    pub t: f64,
    pub lambda: f64,
    pub cond: Condition,
}

impl ProxQuery {
    pub fn new(x: Vec<f64>, t: f64, lambda: f64, cond: Condition) -> Self {
        Self { x, t, lambda, cond }
    }
}

pub const BRUTEFORCE_GRAD_TOL: f64 = 1e-10;
const BRUTEFORCE_MAX_ITERS: usize = 500;

/// A target bound to a schedule: the ground truth for scores and proxes.
#[derive(Debug, Clone)]
pub struct Oracle {
    target: MixtureTarget,
    schedule: NoiseSchedule,
}

impl Oracle {
    pub fn new(target: MixtureTarget, schedule: NoiseSchedule) -> Self {
        Self { target, schedule }
    }

    pub fn target(&self) -> &MixtureTarget {
        &self.target
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Mixture form of `p_t(. | cond)`: weights unchanged, means scaled by
    /// `sqrt(alpha_t)`, variance `alpha_t sigma^2 + 1 - alpha_t`.
    pub fn marginal_params(&self, cond: Condition, t: f64) -> Result<DiffusedMixture> {
        let comps = self.target.components(cond)?;
        let alpha = self.schedule.alpha_at(t)?;
        let scale = alpha.sqrt();
        Ok(DiffusedMixture {
            weights: comps.iter().map(|c| c.weight).collect(),
            means: comps.iter().map(|c| c.mean.iter().map(|m| scale * m).collect()).collect(),
            variance: alpha * self.target.sigma2() + (1.0 - alpha),
        })
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.target.dim() {
            return Err(Error::Argument(format!(
                "point of dimension {} for a {}-d target",
                x.len(),
                self.target.dim()
            )));
        }
        Ok(())
    }

    fn check_query(&self, q: &ProxQuery) -> Result<()> {
        self.check_point(&q.x)?;
        if !(q.lambda > 0.0 && q.lambda.is_finite()) {
            return Err(Error::Argument(format!("prox weight must be positive, got {}", q.lambda)));
        }
        Ok(())
    }

    pub fn log_density(&self, cond: Condition, x: &[f64], t: f64) -> Result<f64> {
        self.check_point(x)?;
        Ok(self.marginal_params(cond, t)?.log_density(x))
    }

    /// `grad ln p_t(x | cond)`.
    pub fn score(&self, cond: Condition, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_point(x)?;
        Ok(self.marginal_params(cond, t)?.score(x))
    }

    /// Closed-form prox for a single Gaussian: `(v x + lambda sqrt(alpha) mu) / (v + lambda)`.
    pub fn prox_gaussian(&self, q: &ProxQuery) -> Result<Vec<f64>> {
        self.check_query(q)?;
        let mix = self.marginal_params(q.cond, q.t)?;
        if mix.weights.len() != 1 {
            return Err(Error::Unsupported(format!(
                "closed-form prox needs a single component, condition {} has {}",
                q.cond,
                mix.weights.len()
            )));
        }
        let v = mix.variance;
        let denom = v + q.lambda;
        Ok(q.x.iter().zip(&mix.means[0]).map(|(x, m)| (v * x + q.lambda * m) / denom).collect())
    }

    /// `|| -lambda grad ln p_t(u) + u - x ||`, zero exactly at stationary points of the prox objective.
    pub fn prox_residual(&self, u: &[f64], q: &ProxQuery) -> Result<f64> {
        self.check_query(q)?;
        self.check_point(u)?;
        let score = self.score(q.cond, u, q.t)?;
        Ok(u.iter()
            .zip(&q.x)
            .zip(&score)
            .map(|((u, x), s)| (-q.lambda * s + u - x).powi(2))
            .sum::<f64>()
            .sqrt())
    }

    /// Global minimizer of `-lambda ln p_t(u) + |u - x|^2 / 2` by damped Newton
    /// from `x` and from every diffused component mean. Ties go to the lower φ,
    /// then to the earlier start.
    pub fn bruteforce_prox(&self, q: &ProxQuery) -> Result<Vec<f64>> {
        self.check_query(q)?;
        let mix = self.marginal_params(q.cond, q.t)?;
        let mut starts = vec![q.x.clone()];
        starts.extend(mix.means.iter().cloned());

        let mut best: Option<(f64, Vec<f64>)> = None;
        for (i, start) in starts.into_iter().enumerate() {
            let u = newton_minimize(&mix, q, start).map_err(|e| match e {
                Error::OracleFailure(msg) => Error::OracleFailure(format!("start {i}: {msg}")),
                other => other,
            })?;
            let phi = prox_objective(&mix, q, &u);
            if best.as_ref().map_or(true, |(b, _)| phi < *b) {
                best = Some((phi, u));
            }
        }
        Ok(best.expect("at least one start").1)
    }
}

fn prox_objective(mix: &DiffusedMixture, q: &ProxQuery, u: &[f64]) -> f64 {
    let sq: f64 = u.iter().zip(&q.x).map(|(a, b)| (a - b) * (a - b)).sum();
    -q.lambda * mix.log_density(u) + 0.5 * sq
}

fn prox_gradient(mix: &DiffusedMixture, q: &ProxQuery, u: &[f64]) -> Vec<f64> {
    let s = mix.score(u);
    u.iter().zip(&q.x).zip(&s).map(|((u, x), s)| -q.lambda * s + u - x).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// In-place Cholesky of a row-major SPD matrix; `None` when not positive definite.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], d: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in i + 1..d {
            s -= l[k * d + i] * x[k];
        }
        x[i] = s / l[i * d + i];
    }
    x
}

fn newton_minimize(mix: &DiffusedMixture, q: &ProxQuery, mut u: Vec<f64>) -> Result<Vec<f64>> {
    let d = u.len();
    let mut grad = prox_gradient(mix, q, &u);
    let mut phi = prox_objective(mix, q, &u);
    for _ in 0..BRUTEFORCE_MAX_ITERS {
        let gnorm = norm(&grad);
        if gnorm <= BRUTEFORCE_GRAD_TOL {
            return Ok(u);
        }
        // Hessian of φ is I - lambda * Hess(ln p); shift until positive definite.
        let mut hess = mix.log_hessian(&u);
        for v in hess.iter_mut() {
            *v *= -q.lambda;
        }
        for a in 0..d {
            hess[a * d + a] += 1.0;
        }
        let mut shift = 0.0;
        let chol = loop {
            let mut shifted = hess.clone();
            for a in 0..d {
                shifted[a * d + a] += shift;
            }
            if let Some(l) = cholesky(&shifted, d) {
                break l;
            }
            shift = if shift == 0.0 { 1e-3 } else { shift * 4.0 };
            if shift > 1e12 {
                return Err(Error::OracleFailure("could not regularize the Newton system".into()));
            }
        };
        let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
        let dir = cholesky_solve(&chol, d, &neg);
        let slope: f64 = dir.iter().zip(&grad).map(|(a, b)| a * b).sum();

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let cand: Vec<f64> = u.iter().zip(&dir).map(|(a, b)| a + step * b).collect();
            let cand_phi = prox_objective(mix, q, &cand);
            let cand_grad = prox_gradient(mix, q, &cand);
            let armijo = cand_phi <= phi + 1e-4 * step * slope;
            // Near the optimum φ stops resolving progress; accept on gradient decrease.
            let flat = cand_phi <= phi + 1e-12 * phi.abs().max(1.0) && norm(&cand_grad) < gnorm;
            if armijo || flat {
                u = cand;
                phi = cand_phi;
                grad = cand_grad;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::OracleFailure(format!("line search stalled at |grad| = {gnorm:e}")));
        }
    }
    Err(Error::OracleFailure(format!(
        "no convergence after {BRUTEFORCE_MAX_ITERS} iterations (|grad| = {:e})",
        norm(&grad)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn bimodal_1d() -> MixtureTarget {
        MixtureTarget::new(
            1,
            0.25,
            vec![vec![
                Component { weight: 0.5, mean: vec![-1.0] },
                Component { weight: 0.5, mean: vec![1.0] },
            ]],
        )
        .unwrap()
    }

    fn three_mode_2d() -> MixtureTarget {
        MixtureTarget::new(
            2,
            0.2,
            vec![
                vec![
                    Component { weight: 0.5, mean: vec![2.0, 0.0] },
                    Component { weight: 0.3, mean: vec![-1.0, 1.5] },
                    Component { weight: 0.2, mean: vec![-0.5, -2.0] },
                ],
                vec![Component { weight: 1.0, mean: vec![0.0, 3.0] }],
            ],
        )
        .unwrap()
    }

    /// Central difference of ln p_t, independent of the analytic score.
    fn fd_score(o: &Oracle, c: Condition, x: &[f64], t: f64, h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (o.log_density(c, &xp, t).unwrap() - o.log_density(c, &xm, t).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn target_validation() {
        assert!(MixtureTarget::gaussian(vec![0.0], 0.0).is_err());
        assert!(MixtureTarget::new(1, 1.0, vec![vec![Component { weight: 0.4, mean: vec![0.0] }]]).is_err());
        assert!(MixtureTarget::new(2, 1.0, vec![vec![Component { weight: 1.0, mean: vec![0.0] }]]).is_err());
        assert!(MixtureTarget::new(1, 1.0, vec![vec![Component { weight: 1.0, mean: vec![f64::NAN] }]]).is_err());
        assert!(MixtureTarget::ring(8, 4.0, 0.09, 3).is_err());
    }

    #[test]
    fn ring_layout() {
        let t = MixtureTarget::ring(8, 4.0, 0.09, 2).unwrap();
        assert_eq!(t.num_labels(), 2);
        assert_eq!(t.label_components()[0].len(), 4);
        let null = t.components(Condition::Null).unwrap();
        assert_eq!(null.len(), 8);
        assert!(null.iter().all(|c| (c.weight - 0.125).abs() < 1e-15));
        for c in &null {
            assert!(((c.mean[0].powi(2) + c.mean[1].powi(2)).sqrt() - 4.0).abs() < 1e-12);
        }
        assert_eq!(t.designated_mode(0).unwrap(), &[4.0, 0.0]);
    }

    #[test]
    fn marginal_at_zero_is_data() {
        let o = Oracle::new(three_mode_2d(), sched());
        let m = o.marginal_params(Condition::Label(0), 0.0).unwrap();
        assert_eq!(m.means[0], vec![2.0, 0.0]);
        assert!((m.variance - 0.2).abs() < 1e-15);
        assert_eq!(m.weights, vec![0.5, 0.3, 0.2]);
    }

    #[test]
    fn single_gaussian_marginal() {
        let o = Oracle::new(MixtureTarget::gaussian(vec![1.0, -2.0], 0.5).unwrap(), sched());
        let t = 0.37;
        let a = sched().alpha_at(t).unwrap();
        let m = o.marginal_params(Condition::Label(0), t).unwrap();
        assert!((m.means[0][0] - a.sqrt()).abs() < 1e-15);
        assert!((m.means[0][1] + 2.0 * a.sqrt()).abs() < 1e-15);
        assert!((m.variance - (0.5 * a + 1.0 - a)).abs() < 1e-15);
    }

    #[test]
    fn unit_variance_is_preserved() {
        let o = Oracle::new(MixtureTarget::gaussian(vec![3.0], 1.0).unwrap(), sched());
        for t in [0.0, 0.1, 0.5, 1.0] {
            assert!((o.marginal_params(Condition::Label(0), t).unwrap().variance - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn unknown_label_rejected() {
        let o = Oracle::new(three_mode_2d(), sched());
        assert!(matches!(o.marginal_params(Condition::Label(5), 0.1), Err(Error::Argument(_))));
    }

    #[test]
    fn standard_normal_score() {
        let o = Oracle::new(MixtureTarget::gaussian(vec![0.0, 0.0], 1.0).unwrap(), sched());
        for t in [0.0, 0.3, 1.0] {
            let s = o.score(Condition::Label(0), &[2.0, 0.0], t).unwrap();
            assert!((s[0] + 2.0).abs() < 1e-14 && s[1].abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_mixture_midpoint_score_vanishes() {
        let target = MixtureTarget::new(
            2,
            0.3,
            vec![vec![
                Component { weight: 0.5, mean: vec![-2.0, 1.0] },
                Component { weight: 0.5, mean: vec![2.0, 1.0] },
            ]],
        )
        .unwrap();
        let o = Oracle::new(target, sched());
        let s = o.score(Condition::Label(0), &[0.0, 0.4], 0.2).unwrap();
        assert!(s[0].abs() < 1e-14);
    }

    #[test]
    fn bimodal_score_matches_finite_difference() {
        let o = Oracle::new(bimodal_1d(), sched());
        let s = o.score(Condition::Label(0), &[0.3], 0.0).unwrap()[0];
        let fd = fd_score(&o, Condition::Label(0), &[0.3], 0.0, 1e-6)[0];
        assert!(((s - fd) / s).abs() < 1e-6, "{s} vs {fd}");
    }

    #[test]
    fn score_matches_finite_difference_on_random_queries() {
        let o = Oracle::new(three_mode_2d(), sched());
        let mut rng = rng::stream(5, &[rng::domain::CHECK]);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| 3.0 * rng::normal(&mut rng)).collect();
            let t = 1e-3 + rng::uniform(&mut rng) * 0.999;
            let c = match rng::index(&mut rng, 3) {
                2 => Condition::Null,
                l => Condition::Label(l),
            };
            let s = o.score(c, &x, t).unwrap();
            let fd = fd_score(&o, c, &x, t, 1e-6);
            let scale = norm(&s).max(1.0);
            for i in 0..2 {
                assert!((s[i] - fd[i]).abs() / scale < 1e-6, "{s:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn gaussian_prox_examples() {
        let o = Oracle::new(MixtureTarget::gaussian(vec![0.0, 0.0], 1.0).unwrap(), sched());
        let p = o.prox_gaussian(&ProxQuery::new(vec![2.0, 0.0], 0.4, 1.0, Condition::Label(0))).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1].abs() < 1e-15);

        let tiny = o.prox_gaussian(&ProxQuery::new(vec![2.0, -1.0], 0.4, 1e-12, Condition::Label(0))).unwrap();
        assert!((tiny[0] - 2.0).abs() < 1e-9 && (tiny[1] + 1.0).abs() < 1e-9);
        assert!(o.prox_gaussian(&ProxQuery::new(vec![2.0, 0.0], 0.4, 0.0, Condition::Label(0))).is_err());

        let o = Oracle::new(MixtureTarget::gaussian(vec![3.0], 1.0).unwrap(), sched());
        let p = o.prox_gaussian(&ProxQuery::new(vec![1.0], 0.0, 3.0, Condition::Label(0))).unwrap();
        assert!((p[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_prox_rejects_mixtures() {
        let o = Oracle::new(bimodal_1d(), sched());
        let err = o.prox_gaussian(&ProxQuery::new(vec![0.0], 0.1, 0.5, Condition::Label(0)));
        assert!(matches!(err, Err(Error::Unsupported(_))));
    }

    #[test]
    fn residual_of_closed_form_is_zero() {
        let o = Oracle::new(MixtureTarget::gaussian(vec![1.0, -1.0], 0.7).unwrap(), sched());
        let q = ProxQuery::new(vec![0.3, 2.2], 0.25, 1.7, Condition::Label(0));
        let u = o.prox_gaussian(&q).unwrap();
        assert!(o.prox_residual(&u, &q).unwrap() <= 1e-10);

        let q = ProxQuery::new(vec![0.3, 2.2], 0.25, 1e-12, Condition::Label(0));
        assert!(o.prox_residual(&q.x, &q).unwrap() <= 1e-6);
    }

    #[test]
    fn residual_is_linear_for_gaussians() {
        // Residual at u = prox + offset is (1 + lambda / v) * |offset| for a Gaussian.
        let o = Oracle::new(MixtureTarget::gaussian(vec![1.0, -1.0], 0.7).unwrap(), sched());
        let q = ProxQuery::new(vec![0.3, 2.2], 0.25, 1.7, Condition::Label(0));
        let v = o.marginal_params(q.cond, q.t).unwrap().variance;
        let mut u = o.prox_gaussian(&q).unwrap();
        let offset = [0.2, -0.5];
        u[0] += offset[0];
        u[1] += offset[1];
        let expected = (1.0 + q.lambda / v) * norm(&offset);
        assert!((o.prox_residual(&u, &q).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn bruteforce_matches_closed_form() {
        let o = Oracle::new(MixtureTarget::gaussian(vec![1.0, -1.0], 0.4).unwrap(), sched());
        let mut rng = rng::stream(9, &[rng::domain::CHECK]);
        for _ in 0..50 {
            let x = vec![3.0 * rng::normal(&mut rng), 3.0 * rng::normal(&mut rng)];
            let q = ProxQuery::new(x, 1e-3 + 0.99 * rng::uniform(&mut rng), 5.0 * rng::uniform(&mut rng) + 1e-3, Condition::Label(0));
            let a = o.bruteforce_prox(&q).unwrap();
            let b = o.prox_gaussian(&q).unwrap();
            assert!(norm(&[a[0] - b[0], a[1] - b[1]]) < 1e-8);
        }
    }

    #[test]
    fn bruteforce_near_identity() {
        let o = Oracle::new(three_mode_2d(), sched());
        let q = ProxQuery::new(vec![0.7, -0.4], 0.05, 1e-12, Condition::Null);
        let u = o.bruteforce_prox(&q).unwrap();
        assert!((u[0] - 0.7).abs() < 1e-6 && (u[1] + 0.4).abs() < 1e-6);
    }

    #[test]
    fn bruteforce_bimodal_is_global_minimum() {
        let o = Oracle::new(bimodal_1d(), sched());
        let q = ProxQuery::new(vec![0.0], 0.0, 2.0, Condition::Label(0));
        let u = o.bruteforce_prox(&q).unwrap();
        let mix = o.marginal_params(q.cond, q.t).unwrap();
        assert!(o.prox_residual(&u, &q).unwrap() <= 1e-10);
        assert!(prox_objective(&mix, &q, &u) <= prox_objective(&mix, &q, &[0.0]));
        // Dense scan at resolution 1e-4 must not find anything lower.
        let best_scan = (-40_000..=40_000)
            .map(|i| prox_objective(&mix, &q, &[i as f64 * 1e-4]))
            .fold(f64::INFINITY, f64::min);
        assert!(prox_objective(&mix, &q, &u) <= best_scan + 1e-12);
        assert!(u[0].abs() > 0.5, "prox of the midpoint should fall into a mode, got {}", u[0]);
    }

    #[test]
    fn bruteforce_prox_optimality_random() {
        let o = Oracle::new(three_mode_2d(), sched());
        let mut rng = rng::stream(13, &[rng::domain::CHECK]);
        for _ in 0..100 {
            let x = vec![3.0 * rng::normal(&mut rng), 3.0 * rng::normal(&mut rng)];
            let c = if rng::uniform(&mut rng) < 0.5 { Condition::Label(0) } else { Condition::Null };
            let q = ProxQuery::new(x, 1e-3 + 0.999 * rng::uniform(&mut rng), 5.0 * rng::uniform(&mut rng) + 1e-4, c);
            let u = o.bruteforce_prox(&q).unwrap();
            assert!(o.prox_residual(&u, &q).unwrap() <= 1e-8);
        }
    }

    #[test]
    fn sampling_follows_weights() {
        let target = three_mode_2d();
        let mut rng = rng::stream(3, &[rng::domain::CHECK]);
        let n = 20_000;
        let mut near_first = 0;
        for _ in 0..n {
            let x = target.sample(Condition::Label(0), &mut rng).unwrap();
            if (x[0] - 2.0).powi(2) + x[1].powi(2) < 1.0 {
                near_first += 1;
            }
        }
        let frac = near_first as f64 / n as f64;
        // P(|N(0, 0.2 I)| < 1) = 1 - exp(-1 / 0.4) for the first component.
        let p = 0.5 * (1.0 - (-1.0f64 / 0.4).exp());
        assert!((frac - p).abs() < 4.0 * (p * (1.0 - p) / n as f64).sqrt());
    }

    proptest! {
        #[test]
        fn mixture_closure(t in 0.0f64..1.0, sigma2 in 0.01f64..3.0) {
            let target = MixtureTarget::new(1, sigma2, vec![vec![
                Component { weight: 0.25, mean: vec![-1.0] },
                Component { weight: 0.75, mean: vec![2.0] },
            ]]).unwrap();
            let o = Oracle::new(target, sched());
            let a = sched().alpha_at(t).unwrap();
            let m = o.marginal_params(Condition::Label(0), t).unwrap();
            prop_assert_eq!(m.weights, vec![0.25, 0.75]);
            prop_assert!((m.variance - (a * sigma2 + 1.0 - a)).abs() < 1e-14);
        }
    }
}
