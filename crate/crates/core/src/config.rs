//! Flat `key = value` experiment configuration.
//!
//! One entry per line, `#` starts a comment, lists are comma separated.
//! Unknown or repeated keys are errors. Keys and defaults:
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `experiment` | `experiment` | id written to every metrics row |
//! | `out` | `out` | output directory |
//! | `target` | `ring` | `ring` or `gaussian` |
//! | `ring_modes`, `ring_radius`, `labels` | `8`, `4`, `2` | ring target layout |
//! | `mean` | `1,-1` | gaussian target mean |
//! | `sigma2` | `0.09` | per-component variance |
//! | `beta_min`, `beta_max`, `t_min` | `0.1`, `20`, `0.001` | schedule and grid |
//! | `steps` | `4,10` | step counts of the sampling sweeps |
//! | `step_grid` | `4,5,6,7,8,9,10,25` | step counts whose grids are trained |
//! | `samplers` | `sde-euler,pda-hybrid:0,pda-hybrid:4` | `rule[:omega]` list |
//! | `seeds` | `0` | one full pipeline per seed |
//! | `eval_samples` | `2000` | chains per label per sweep cell |
//! | `max_dump_rows` | `100000` | cap on rows per sample dump |
//! | `hidden`, `depth` | `128`, `3` | network size |
//! | `zeta`, `p_null`, `batch`, `iters`, `lr`, `optimizer` | `1`, `0.1`, `256`, `20000`, `0.001`, `sgd:0.9` | pretraining |
//! | `init_checkpoint` | none | prox checkpoint that replaces prox pretraining |
//! | `grpo` | `false` | run fine-tuning and resample sweeps |
//! | `reward` | `mode-dist` | `mode-dist` or `ring` |
//! | `ring_radii` | `ring_radius` per label | radii of the ring reward |
//! | `prompts` | every label | labels rolled out during fine-tuning |
//! | `group`, `grpo_steps`, `kl`, `clip`, `grpo_omega` | `24`, `10`, `0.001`, `0.2`, `4` | GRPO |
//! | `updates`, `grpo_lr`, `grpo_optimizer` | `300`, `0.0001`, `adam` | GRPO optimization |
//! | `accumulation`, `prompts_per_batch`, `inner_epochs` | `6`, `1`, `1` | GRPO batching |
//! | `checkpoint_every` | `100` | periodic GRPO checkpoints (0 disables) |

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::grpo::{GrpoConfig, Reward, RewardKind};
use crate::model::{Architecture, NetKind};
use crate::pretrain::{PretrainConfig, StepGridSet};
use crate::sampler::{RuleKind, StepRule};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::target::MixtureTarget;

#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    Ring { modes: usize, radius: f64, labels: usize, sigma2: f64 },
    Gaussian { mean: Vec<f64>, sigma2: f64 },
}

impl TargetSpec {
    pub fn build(&self) -> Result<MixtureTarget> {
        match self {
            TargetSpec::Ring { modes, radius, labels, sigma2 } => MixtureTarget::ring(*modes, *radius, *sigma2, *labels),
            TargetSpec::Gaussian { mean, sigma2 } => MixtureTarget::gaussian(mean.clone(), *sigma2),
        }
    }
}

/// A sampler column of the sweep: rule plus guidance weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerSpec {
    pub rule: StepRule,
}

impl SamplerSpec {
    /// File- and CSV-safe tag, e.g. `pda-hybrid-w4`.
    pub fn tag(&self) -> String {
        format!("{}-w{}", self.rule.kind.tag(), self.rule.omega)
    }
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.rule.kind.tag(), self.rule.omega)
    }
}

impl FromStr for SamplerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, omega) = match s.split_once(':') {
            Some((k, w)) => (k, w.parse::<f64>().map_err(|_| Error::Config(format!("bad guidance weight in sampler `{s}`")))?),
            None => (s, 0.0),
        };
        let kind: RuleKind = kind.parse().map_err(|e: Error| Error::Config(e.to_string()))?;
        Ok(Self { rule: StepRule::new(kind, omega).map_err(|e| Error::Config(e.to_string()))? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// The text the config was parsed from, echoed into the manifest.
    pub source: String,
    pub experiment: String,
    pub out: PathBuf,
    pub target: TargetSpec,
    pub schedule: NoiseSchedule,
    pub t_min: f64,
    pub steps: Vec<usize>,
    pub step_grid: Vec<usize>,
    pub samplers: Vec<SamplerSpec>,
    pub seeds: Vec<u64>,
    pub eval_samples: usize,
    pub max_dump_rows: usize,
    pub hidden: usize,
    pub depth: usize,
    pub pretrain: PretrainConfig,
    pub init_checkpoint: Option<PathBuf>,
    pub grpo_enabled: bool,
    pub reward: RewardKind,
    pub ring_radii: Option<Vec<f64>>,
    pub prompts: Option<Vec<usize>>,
    pub grpo: GrpoConfig,
    pub checkpoint_every: usize,
}

const KEYS: &[&str] = &[
    "experiment", "out", "target", "ring_modes", "ring_radius", "labels", "mean", "sigma2", "beta_min", "beta_max",
    "t_min", "steps", "step_grid", "samplers", "seeds", "eval_samples", "max_dump_rows", "hidden", "depth", "zeta",
    "p_null", "batch", "iters", "lr", "optimizer", "init_checkpoint", "grpo", "reward", "ring_radii", "prompts", "group",
    "grpo_steps", "kl", "clip", "grpo_omega", "updates", "grpo_lr", "grpo_optimizer", "accumulation",
    "prompts_per_batch", "inner_epochs", "checkpoint_every",
];

/// Parses `key = value` lines into a map, rejecting unknown and duplicate keys.
pub fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", n + 1)));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key `{k}` given twice", n + 1)));
        }
    }
    Ok(map)
}

struct Entries(BTreeMap<String, String>);

impl Entries {
    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.0.get(key) {
            Some(v) => v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
            None => Ok(default),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.0
            .get(key)
            .map(|v| {
                v.split(',')
                    .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad list item `{s}` for `{key}`"))))
                    .collect()
            })
            .transpose()
    }

    fn text(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let e = Entries(parse_entries(text)?);
        let sigma2 = e.get("sigma2", 0.09)?;
        let target = match e.text("target").unwrap_or("ring") {
            "ring" => TargetSpec::Ring {
                modes: e.get("ring_modes", 8)?,
                radius: e.get("ring_radius", 4.0)?,
                labels: e.get("labels", 2)?,
                sigma2,
            },
            "gaussian" => {
                for k in ["ring_modes", "ring_radius", "labels"] {
                    if e.text(k).is_some() {
                        return Err(Error::Config(format!("`{k}` does not apply to a gaussian target")));
                    }
                }
                TargetSpec::Gaussian { mean: e.list("mean")?.unwrap_or_else(|| vec![1.0, -1.0]), sigma2 }
            }
            other => return Err(Error::Config(format!("unknown target `{other}` (expected ring or gaussian)"))),
        };
        if matches!(target, TargetSpec::Ring { .. }) && e.text("mean").is_some() {
            return Err(Error::Config("`mean` only applies to a gaussian target".into()));
        }
        let schedule = NoiseSchedule::new(e.get("beta_min", 0.1)?, e.get("beta_max", 20.0)?)
            .map_err(|err| Error::Config(err.to_string()))?;
        let defaults = PretrainConfig::default();
        let pretrain = PretrainConfig {
            batch: e.get("batch", defaults.batch)?,
            lr: e.get("lr", defaults.lr)?,
            iters: e.get("iters", defaults.iters)?,
            zeta: e.get("zeta", defaults.zeta)?,
            p_null: e.get("p_null", defaults.p_null)?,
            seed: 0,
            optimizer: e.get("optimizer", defaults.optimizer)?,
        };
        let g = GrpoConfig::default();
        let grpo = GrpoConfig {
            group: e.get("group", g.group)?,
            steps: e.get("grpo_steps", g.steps)?,
            kl: e.get("kl", g.kl)?,
            clip: e.get("clip", g.clip)?,
            omega: e.get("grpo_omega", g.omega)?,
            prompts_per_batch: e.get("prompts_per_batch", g.prompts_per_batch)?,
            lr: e.get("grpo_lr", g.lr)?,
            updates: e.get("updates", g.updates)?,
            std_floor: g.std_floor,
            accumulation: e.get("accumulation", g.accumulation)?,
            inner_epochs: e.get("inner_epochs", g.inner_epochs)?,
            optimizer: e.get("grpo_optimizer", g.optimizer)?,
        };
        let cfg = Self {
            source: text.to_string(),
            experiment: e.text("experiment").unwrap_or("experiment").to_string(),
            out: PathBuf::from(e.text("out").unwrap_or("out")),
            target,
            schedule,
            t_min: e.get("t_min", crate::schedule::DEFAULT_T_MIN)?,
            steps: e.list("steps")?.unwrap_or_else(|| vec![4, 10]),
            step_grid: e.list("step_grid")?.unwrap_or_else(|| crate::pretrain::DEFAULT_STEP_COUNTS.to_vec()),
            samplers: match e.text("samplers") {
                Some(v) => v.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?,
                None => vec!["sde-euler".parse()?, "pda-hybrid:0".parse()?, "pda-hybrid:4".parse()?],
            },
            seeds: e.list("seeds")?.unwrap_or_else(|| vec![0]),
            eval_samples: e.get("eval_samples", 2000)?,
            max_dump_rows: e.get("max_dump_rows", 100_000)?,
            hidden: e.get("hidden", 128)?,
            depth: e.get("depth", 3)?,
            pretrain,
            init_checkpoint: e.text("init_checkpoint").filter(|s| !s.is_empty()).map(PathBuf::from),
            grpo_enabled: e.get("grpo", false)?,
            reward: e.get("reward", RewardKind::ModeDistance)?,
            ring_radii: e.list("ring_radii")?,
            prompts: e.list("prompts")?,
            grpo,
            checkpoint_every: e.get("checkpoint_every", 100)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Default config with `overrides` (`key=value` strings) applied on top of `text`.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut map = parse_entries(text)?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut rendered = String::new();
        for (k, v) in &map {
            rendered.push_str(&format!("{k} = {v}\n"));
        }
        if overrides.is_empty() {
            Self::parse(text)
        } else {
            Self::parse(&rendered)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let target = self.target.build().map_err(|e| Error::Config(e.to_string()))?;
        if !(0.0..1.0).contains(&self.t_min) {
            return bad(format!("t_min must lie in [0, 1), got {}", self.t_min));
        }
        if self.steps.is_empty() || self.samplers.is_empty() || self.seeds.is_empty() {
            return bad("steps, samplers and seeds must be non-empty".into());
        }
        if self.eval_samples < 2 {
            return bad(format!("eval_samples must be at least 2, got {}", self.eval_samples));
        }
        if self.max_dump_rows == 0 || self.hidden == 0 || self.depth == 0 {
            return bad("max_dump_rows, hidden and depth must be positive".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(*s) {
                return bad(format!("seed {s} listed twice"));
            }
        }
        self.pretrain.validate()?;
        let gridset = self.gridset()?;
        for &k in &self.steps {
            let grid = TimeGrid::uniform(&self.schedule, k, self.t_min).map_err(|e| Error::Config(e.to_string()))?;
            if self.samplers.iter().any(|s| s.rule.kind.is_proximal()) {
                gridset.check_supported(&grid).map_err(|e| Error::Config(e.to_string()))?;
            }
            for s in &self.samplers {
                s.rule.check_grid(&grid).map_err(|e| Error::Config(format!("sampler {s} at K = {k}: {e}")))?;
            }
        }
        if self.grpo_enabled {
            self.grpo.validate()?;
            let grid = TimeGrid::uniform(&self.schedule, self.grpo.steps, self.t_min)?;
            gridset.check_supported(&grid).map_err(|e| Error::Config(e.to_string()))?;
            if let Some(p) = &self.prompts {
                if p.is_empty() || p.iter().any(|&c| c >= target.num_labels()) {
                    return bad(format!("prompts must be labels below {}", target.num_labels()));
                }
            }
            self.reward_fn()?;
        }
        Ok(())
    }

    pub fn build_target(&self) -> Result<MixtureTarget> {
        self.target.build()
    }

    pub fn gridset(&self) -> Result<StepGridSet> {
        StepGridSet::new(&self.step_grid, &self.schedule, self.t_min).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid(&self, steps: usize) -> Result<TimeGrid> {
        TimeGrid::uniform(&self.schedule, steps, self.t_min)
    }

    pub fn architecture(&self, kind: NetKind) -> Result<Architecture> {
        let t = self.build_target()?;
        Ok(Architecture::new(kind, t.dim(), t.num_labels()).with_size(self.hidden, self.depth))
    }

    pub fn pretrain_for_seed(&self, seed: u64) -> PretrainConfig {
        PretrainConfig { seed, ..self.pretrain.clone() }
    }

    pub fn reward_fn(&self) -> Result<Reward> {
        let target = self.build_target()?;
        match self.reward {
            RewardKind::ModeDistance => Reward::mode_distance(&target),
            RewardKind::Ring => {
                let radii = match (&self.ring_radii, &self.target) {
                    (Some(r), _) => r.clone(),
                    (None, TargetSpec::Ring { radius, labels, .. }) => vec![*radius; *labels],
                    (None, TargetSpec::Gaussian { .. }) => {
                        return Err(Error::Config("the ring reward on a gaussian target needs `ring_radii`".into()))
                    }
                };
                if radii.len() != target.num_labels() {
                    return Err(Error::Config(format!("ring_radii needs {} entries", target.num_labels())));
                }
                Reward::ring(radii).map_err(|e| Error::Config(e.to_string()))
            }
        }
    }

    pub fn prompt_labels(&self) -> Result<Vec<usize>> {
        Ok(self.prompts.clone().unwrap_or_else(|| (0..self.target.build().map(|t| t.num_labels()).unwrap_or(1)).collect()))
    }

    pub fn uses_score(&self) -> bool {
        self.samplers.iter().any(|s| !s.rule.kind.is_proximal())
    }

    pub fn uses_prox(&self) -> bool {
        self.grpo_enabled || self.samplers.iter().any(|s| s.rule.kind.is_proximal())
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults are valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.steps, vec![4, 10]);
        assert_eq!(c.samplers.len(), 3);
        assert_eq!(c.samplers[2].tag(), "pda-hybrid-w4");
        assert_eq!(c.pretrain.optimizer, OptimizerKind::Sgd { momentum: 0.9 });
        assert_eq!(c.build_target().unwrap().num_labels(), 2);
    }

    #[test]
    fn parses_values_and_comments() {
        let c = ExperimentConfig::parse(
            "# demo\nexperiment = a1 \n target = gaussian\nmean = 0.5 # 1-d\nsigma2=1\nsteps=10\nsamplers = pda-hybrid, ode-euler:2\nseeds = 3,4\n",
        )
        .unwrap();
        assert_eq!(c.experiment, "a1");
        assert_eq!(c.target, TargetSpec::Gaussian { mean: vec![0.5], sigma2: 1.0 });
        assert_eq!(c.seeds, vec![3, 4]);
        assert_eq!(c.samplers[1].rule.omega, 2.0);
        assert_eq!(c.samplers[1].rule.kind, RuleKind::OdeEuler);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(matches!(ExperimentConfig::parse("stepz = 4"), Err(Error::Config(m)) if m.contains("stepz")));
        assert!(ExperimentConfig::parse("seeds = 1\nseeds = 2").is_err());
        assert!(ExperimentConfig::parse("just words").is_err());
        assert!(ExperimentConfig::parse("iters = many").is_err());
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ExperimentConfig::parse("t_min = 1").is_err());
        assert!(ExperimentConfig::parse("samplers = pda:-2").is_err());
        // Unsupported grid for a learned prox.
        assert!(ExperimentConfig::parse("steps = 11").is_err());
        // PDA needs gamma < 2, which the 4-step default grid violates.
        assert!(ExperimentConfig::parse("samplers = pda").is_err());
        assert!(ExperimentConfig::parse("samplers = pda\nsteps = 25").is_ok());
        assert!(ExperimentConfig::parse("grpo = true\nprompts = 5").is_err());
        assert!(ExperimentConfig::parse("grpo = true\ngroup = 1").is_err());
        assert!(ExperimentConfig::parse("target = gaussian\nlabels = 2").is_err());
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::parse_with_overrides("iters = 5\n", &["iters=7".into(), "seeds=1,2".into()]).unwrap();
        assert_eq!(c.pretrain.iters, 7);
        assert_eq!(c.seeds, vec![1, 2]);
        assert!(ExperimentConfig::parse_with_overrides("", &["bogus=1".into()]).is_err());
    }

    #[test]
    fn rewards_from_config() {
        let c = ExperimentConfig::parse("grpo = true\nreward = ring\nring_radii = 1,2").unwrap();
        assert_eq!(c.reward_fn().unwrap(), Reward::Ring { radii: vec![1.0, 2.0] });
        assert!(ExperimentConfig::parse("grpo = true\nreward = ring\nring_radii = 1").is_err());
        assert_eq!(c.prompt_labels().unwrap(), vec![0, 1]);
    }
}
