use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use proxdiff::checkpoint::load_checkpoint;
use proxdiff::checks::oracle_suite;
use proxdiff::config::{ExperimentConfig, SamplerSpec};
use proxdiff::experiment::{
    evaluate_cell, grpo_log_csv, grpo_stage, metrics_csv, prox_stage, run_experiment, samples_csv, score_stage,
    write_file, write_manifest, MetricsRow,
};
use proxdiff::model::NetKind;
use proxdiff::sampler::{sample_batched, BatchModel};
use proxdiff::target::Condition;

#[derive(Parser)]
#[command(name = "proxdiff", about = "Proximal diffusion samplers, proximal matching and GRPO on analytic targets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus `key=value` overrides.
#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat key = value config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set iters=5000` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?,
            None => String::new(),
        };
        let mut all = self.overrides.clone();
        all.extend_from_slice(extra);
        let cfg = ExperimentConfig::parse_with_overrides(&text, &all);
        match (&self.config, cfg) {
            (Some(p), Err(e)) => Err(e).with_context(|| format!("config {}", p.display())),
            (_, r) => Ok(r?),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: pretrain, sampling sweeps, optional GRPO and resampling.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides `out`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the prox and/or score networks for every configured seed.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Which networks to train.
        #[arg(long, default_value = "both", value_parser = ["prox", "score", "both"])]
        kind: String,
    },
    /// Draw samples from a checkpoint and write them as CSV.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Step rule: sde-euler, ode-euler, pda or pda-hybrid.
        #[arg(long, default_value = "pda-hybrid")]
        rule: String,
        #[arg(long, default_value_t = 0.0)]
        omega: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Label index, or `null` for unconditional sampling.
        #[arg(long, default_value = "0")]
        label: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// GRPO fine-tuning of a pretrained prox checkpoint.
    Grpo {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "mode-dist", value_parser = ["mode-dist", "ring"])]
        reward: String,
        #[arg(long, default_value_t = 24)]
        group: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0.001)]
        kl: f64,
        #[arg(long, default_value_t = 0.2)]
        clip: f64,
        #[arg(long, default_value_t = 1000)]
        updates: usize,
        /// File with one label per line; defaults to every label.
        #[arg(long)]
        prompts: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Energy distance and mean reward of a checkpoint's samples.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "pda-hybrid")]
        rule: String,
        #[arg(long, default_value_t = 0.0)]
        omega: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the oracle invariant suite; exits nonzero on any failure.
    OracleCheck,
}

fn sampler(rule: &str, omega: f64) -> Result<SamplerSpec> {
    Ok(format!("{rule}:{omega}").parse()?)
}

fn model_of(path: &Path, spec: &SamplerSpec) -> Result<(Option<proxdiff::model::ProxNet>, Option<proxdiff::model::ScoreNet>)> {
    let ck = load_checkpoint(path)?;
    Ok(match (spec.rule.kind.is_proximal(), ck.architecture.kind) {
        (true, NetKind::Prox) => (Some(ck.into_prox(path)?), None),
        (false, NetKind::Score) => (None, Some(ck.into_score(path)?)),
        (_, k) => bail!("{}: a {} checkpoint cannot drive the {} rule", path.display(), k.as_str(), spec.rule.kind.tag()),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { cfg, out } => {
            let extra: Vec<String> = out.iter().map(|o| format!("out={}", o.display())).collect();
            let cfg = cfg.load(&extra)?;
            let summary = run_experiment(&cfg)?;
            print!("{}", metrics_csv(&summary.rows));
            eprintln!("wrote {}", summary.out.display());
        }
        Command::Pretrain { cfg, out, kind } => {
            let extra: Vec<String> = out.iter().map(|o| format!("out={}", o.display())).collect();
            let cfg = cfg.load(&extra)?;
            let target = cfg.build_target()?;
            for &seed in &cfg.seeds {
                if kind != "score" {
                    prox_stage(&cfg, &target, seed, &cfg.out)?;
                }
                if kind != "prox" {
                    score_stage(&cfg, &target, seed, &cfg.out)?;
                }
            }
            write_manifest(&cfg.out, &cfg.source)?;
            eprintln!("wrote {}", cfg.out.display());
        }
        Command::Sample { cfg, checkpoint, rule, omega, steps, n, label, seed, out } => {
            let cfg = cfg.load(&[])?;
            let spec = sampler(&rule, omega)?;
            let cond = if label == "null" {
                Condition::Null
            } else {
                Condition::Label(label.parse().with_context(|| format!("bad label `{label}`"))?)
            };
            let grid = cfg.grid(steps)?;
            spec.rule.check_grid(&grid)?;
            let (prox, score) = model_of(&checkpoint, &spec)?;
            let model = match (&prox, &score) {
                (Some(p), _) => {
                    cfg.gridset()?.check_supported(&grid)?;
                    BatchModel::Prox(p)
                }
                (_, Some(s)) => BatchModel::Score(s),
                _ => unreachable!("model_of returns one network"),
            };
            let dim = cfg.build_target()?.dim();
            let xs = sample_batched(spec.rule, &grid, model, cond, dim, seed, 0, n, 512)?;
            let rows: Vec<(Condition, Vec<f64>)> = xs.into_iter().map(|x| (cond, x)).collect();
            write_file(&out, samples_csv(&rows, cfg.max_dump_rows).as_bytes())?;
            eprintln!("wrote {} samples to {}", rows.len().min(cfg.max_dump_rows), out.display());
        }
        Command::Grpo { cfg, checkpoint, reward, group, steps, kl, clip, updates, prompts, seed, out } => {
            let mut extra = vec![
                "grpo=true".to_string(),
                format!("init_checkpoint={}", checkpoint.display()),
                format!("reward={reward}"),
                format!("group={group}"),
                format!("grpo_steps={steps}"),
                format!("kl={kl}"),
                format!("clip={clip}"),
                format!("updates={updates}"),
                format!("seeds={seed}"),
                format!("out={}", out.display()),
            ];
            if let Some(p) = prompts {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading prompts {}", p.display()))?;
                let labels: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
                if labels.is_empty() {
                    bail!("{}: no prompts", p.display());
                }
                extra.push(format!("prompts={}", labels.join(",")));
            }
            let cfg = cfg.load(&extra)?;
            let target = cfg.build_target()?;
            let mut net = prox_stage(&cfg, &target, seed, &cfg.out)?;
            let log = grpo_stage(&cfg, &mut net, seed, &cfg.out)?;
            write_manifest(&cfg.out, &cfg.source)?;
            print!("{}", grpo_log_csv(&log));
        }
        Command::Eval { cfg, checkpoint, rule, omega, steps, seed } => {
            let cfg = cfg.load(&[])?;
            let spec = sampler(&rule, omega)?;
            let grid = cfg.grid(steps)?;
            spec.rule.check_grid(&grid)?;
            let target = cfg.build_target()?;
            let reward = cfg.reward_fn()?;
            let (prox, score) = model_of(&checkpoint, &spec)?;
            let model = match (&prox, &score) {
                (Some(p), _) => BatchModel::Prox(p),
                (_, Some(s)) => BatchModel::Score(s),
                _ => unreachable!("model_of returns one network"),
            };
            let cell = evaluate_cell(model, spec.rule, &grid, &target, Some(&reward), cfg.eval_samples, seed)?;
            let row = MetricsRow {
                experiment: cfg.experiment.clone(),
                stage: "eval".into(),
                sampler: spec.tag(),
                steps,
                seed,
                energy_distance: cell.energy_distance,
                mean_reward: cell.mean_reward,
            };
            print!("{}", metrics_csv(&[row]));
        }
        Command::OracleCheck => {
            let outcomes = oracle_suite();
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.verdict.passed).count();
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", outcomes.len());
                return Ok(ExitCode::FAILURE);
            }
            eprintln!("all {} checks passed", outcomes.len());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
