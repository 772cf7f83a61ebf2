//! The staged experiment pipeline and its on-disk artifacts.
//!
//! Layout under the output directory:
//! `metrics.csv`, `timings.csv`, `manifest.txt`, `samples/<tag>.csv`,
//! `curves/<stage>-seed<s>.csv` and `checkpoints/<stage>-seed<s>.ckpt`.
//! Everything except `timings.csv` (and the manifest line that hashes it) is a
//! deterministic function of the config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Metadata};
use crate::config::{ExperimentConfig, SamplerSpec};
use crate::error::{Error, Result};
use crate::grpo::{grpo_update_loop, RewardFn, UpdateLog};
use crate::metrics::{energy_distance, mean};
use crate::model::{NetKind, ProxNet, ScoreNet};
use crate::pretrain::{train_prox, train_score};
use crate::rng;
use crate::sampler::{sample_batched, BatchModel, StepRule};
use crate::schedule::TimeGrid;
use crate::target::{Condition, MixtureTarget};

/// Chains per batched forward pass in the sweeps.
const SWEEP_BLOCK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub experiment: String,
    /// `pretrained` or `grpo`.
    pub stage: String,
    pub sampler: String,
    pub steps: usize,
    pub seed: u64,
    pub energy_distance: f64,
    pub mean_reward: f64,
}

pub const METRICS_HEADER: &str = "experiment,stage,sampler,steps,seed,energy_distance,mean_reward";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.experiment, self.stage, self.sampler, self.steps, self.seed, self.energy_distance, self.mean_reward
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub stage: String,
    pub seed: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub timings: Vec<Timing>,
    pub grpo_logs: Vec<(u64, Vec<UpdateLog>)>,
}

/// Samples and scores of one sweep cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    /// `(label, sample)` rows, label-major.
    pub samples: Vec<(usize, Vec<f64>)>,
    /// Mean over labels of the per-label energy distance to the target.
    pub energy_distance: f64,
    pub mean_reward: f64,
}

/// Draws `per_label` chains for every label and scores them against fresh
/// target samples. Chain noises depend on `(seed, K, label)` only, so every
/// sampler in a sweep sees the same noises.
pub fn evaluate_cell(
    model: BatchModel<'_>,
    rule: StepRule,
    grid: &TimeGrid,
    target: &MixtureTarget,
    reward: Option<&dyn RewardFn>,
    per_label: usize,
    seed: u64,
) -> Result<CellResult> {
    let dim = target.dim();
    let mut samples = Vec::with_capacity(per_label * target.num_labels());
    let mut energies = Vec::new();
    let mut rewards = Vec::new();
    for c in 0..target.num_labels() {
        let cond = Condition::Label(c);
        let chain_seed = rng::derive_seed(seed, &[rng::domain::SWEEP, grid.steps() as u64, c as u64]);
        let xs = sample_batched(rule, grid, model, cond, dim, chain_seed, 0, per_label, SWEEP_BLOCK)?;
        let mut r = rng::stream(seed, &[rng::domain::TARGET_SAMPLES, c as u64]);
        let reference = (0..per_label).map(|_| target.sample(cond, &mut r)).collect::<Result<Vec<_>>>()?;
        energies.push(energy_distance(&xs, &reference)?);
        if let Some(f) = reward {
            for x in &xs {
                rewards.push(f.reward(x, cond)?);
            }
        }
        samples.extend(xs.into_iter().map(|x| (c, x)));
    }
    Ok(CellResult {
        samples,
        energy_distance: mean(&energies),
        mean_reward: if rewards.is_empty() { f64::NAN } else { mean(&rewards) },
    })
}

/// `label,x0,x1,...` rows, evenly strided down to at most `cap` rows.
pub fn samples_csv<L: std::fmt::Display>(samples: &[(L, Vec<f64>)], cap: usize) -> String {
    let dim = samples.first().map_or(0, |s| s.1.len());
    let mut out = String::from("label");
    for j in 0..dim {
        write!(out, ",x{j}").expect("writing to a String");
    }
    out.push('\n');
    let n = samples.len();
    let keep = n.min(cap.max(1));
    for i in 0..keep {
        let (c, x) = &samples[i * n / keep];
        write!(out, "{c}").expect("writing to a String");
        for v in x {
            write!(out, ",{v}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{l}").expect("writing to a String");
    }
    out
}

pub fn grpo_log_csv(log: &[UpdateLog]) -> String {
    let mut out = String::from("update,mean_reward,mean_kl,clip_fraction\n");
    for l in log {
        writeln!(out, "{},{},{},{}", l.update, l.mean_reward, l.mean_kl, l.clip_fraction).expect("writing to a String");
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn staged<T>(stage: &str, seed: u64, timings: &mut Vec<Timing>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| Error::Stage { stage: stage.to_string(), seed, source: Box::new(e) })?;
    timings.push(Timing { stage: stage.to_string(), seed, seconds: start.elapsed().as_secs_f64() });
    Ok(out)
}

fn metadata(cfg: &ExperimentConfig, stage: &str, seed: u64) -> Metadata {
    Metadata::from([
        ("experiment".to_string(), cfg.experiment.clone()),
        ("stage".to_string(), stage.to_string()),
        ("seed".to_string(), seed.to_string()),
    ])
}

/// Pretrains (or loads) the prox network for `seed` and writes its artifacts.
pub fn prox_stage(cfg: &ExperimentConfig, target: &MixtureTarget, seed: u64, out: &Path) -> Result<ProxNet> {
    if let Some(path) = &cfg.init_checkpoint {
        let ck = load_checkpoint(path)?;
        ck.expect_architecture(&cfg.architecture(NetKind::Prox)?, path)?;
        return ck.into_prox(path);
    }
    let mut net = ProxNet::with_architecture(cfg.architecture(NetKind::Prox)?, cfg.schedule, seed)?;
    let losses = train_prox(&mut net, target, &cfg.pretrain_for_seed(seed), &cfg.gridset()?)?;
    write_file(&out.join(format!("curves/prox-seed{seed}.csv")), loss_curve_csv(&losses).as_bytes())?;
    save_checkpoint(&net, &metadata(cfg, "prox", seed), &out.join(format!("checkpoints/prox-seed{seed}.ckpt")))?;
    Ok(net)
}

pub fn score_stage(cfg: &ExperimentConfig, target: &MixtureTarget, seed: u64, out: &Path) -> Result<ScoreNet> {
    let mut net = ScoreNet::with_architecture(cfg.architecture(NetKind::Score)?, cfg.schedule, seed)?;
    let losses = train_score(&mut net, target, &cfg.pretrain_for_seed(seed), cfg.t_min)?;
    write_file(&out.join(format!("curves/score-seed{seed}.csv")), loss_curve_csv(&losses).as_bytes())?;
    save_checkpoint(&net, &metadata(cfg, "score", seed), &out.join(format!("checkpoints/score-seed{seed}.ckpt")))?;
    Ok(net)
}

/// Fine-tunes `net` in place and writes the update log plus checkpoints.
pub fn grpo_stage(cfg: &ExperimentConfig, net: &mut ProxNet, seed: u64, out: &Path) -> Result<Vec<UpdateLog>> {
    let reward = cfg.reward_fn()?;
    let prompts: Vec<Condition> = cfg.prompt_labels()?.into_iter().map(Condition::Label).collect();
    let grid = cfg.grid(cfg.grpo.steps)?;
    let mut saved = Ok(());
    let log = grpo_update_loop(net, &reward, &prompts, &grid, &cfg.grpo, seed, |entry, net| {
        let u = entry.update + 1;
        if cfg.checkpoint_every > 0 && u % cfg.checkpoint_every == 0 && u < cfg.grpo.updates && saved.is_ok() {
            saved = save_checkpoint(net, &metadata(cfg, "grpo", seed), &out.join(format!("checkpoints/grpo-seed{seed}-u{u}.ckpt")));
        }
    })?;
    saved?;
    write_file(&out.join(format!("curves/grpo-seed{seed}.csv")), grpo_log_csv(&log).as_bytes())?;
    save_checkpoint(net, &metadata(cfg, "grpo", seed), &out.join(format!("checkpoints/grpo-seed{seed}.ckpt")))?;
    Ok(log)
}

fn sweep(
    cfg: &ExperimentConfig,
    target: &MixtureTarget,
    reward: &dyn RewardFn,
    prox: Option<&ProxNet>,
    score: Option<&ScoreNet>,
    stage: &str,
    seed: u64,
    out: &Path,
) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for &k in &cfg.steps {
        let grid = cfg.grid(k)?;
        for s in &cfg.samplers {
            let model = match (s.rule.kind.is_proximal(), prox, score) {
                (true, Some(p), _) => BatchModel::Prox(p),
                (false, _, Some(n)) => BatchModel::Score(n),
                _ => continue,
            };
            let cell = evaluate_cell(model, s.rule, &grid, target, Some(reward), cfg.eval_samples, seed)?;
            let name = cell_tag(stage, s, k, seed);
            write_file(&out.join(format!("samples/{name}.csv")), samples_csv(&cell.samples, cfg.max_dump_rows).as_bytes())?;
            rows.push(MetricsRow {
                experiment: cfg.experiment.clone(),
                stage: stage.to_string(),
                sampler: s.tag(),
                steps: k,
                seed,
                energy_distance: cell.energy_distance,
                mean_reward: cell.mean_reward,
            });
        }
    }
    Ok(rows)
}

pub fn cell_tag(stage: &str, s: &SamplerSpec, k: usize, seed: u64) -> String {
    format!("{stage}-{}-K{k}-seed{seed}", s.tag())
}

struct SeedOutput {
    rows: Vec<MetricsRow>,
    timings: Vec<Timing>,
    grpo_log: Option<Vec<UpdateLog>>,
}

fn run_seed(cfg: &ExperimentConfig, target: &MixtureTarget, seed: u64, out: &Path) -> Result<SeedOutput> {
    let mut timings = Vec::new();
    let reward = staged("reward", seed, &mut timings, || cfg.reward_fn())?;
    let mut prox = if cfg.uses_prox() {
        Some(staged("pretrain-prox", seed, &mut timings, || prox_stage(cfg, target, seed, out))?)
    } else {
        None
    };
    let score = if cfg.uses_score() {
        Some(staged("pretrain-score", seed, &mut timings, || score_stage(cfg, target, seed, out))?)
    } else {
        None
    };
    let mut rows = staged("sample", seed, &mut timings, || {
        sweep(cfg, target, &reward, prox.as_ref(), score.as_ref(), "pretrained", seed, out)
    })?;
    let mut grpo_log = None;
    if cfg.grpo_enabled {
        let net = prox.as_mut().expect("GRPO implies a prox network");
        grpo_log = Some(staged("grpo", seed, &mut timings, || grpo_stage(cfg, net, seed, out))?);
        rows.extend(staged("resample", seed, &mut timings, || {
            sweep(cfg, target, &reward, prox.as_ref(), None, "grpo", seed, out)
        })?);
    }
    Ok(SeedOutput { rows, timings, grpo_log })
}

/// Runs the full pipeline, one thread per seed, and writes metrics, timings and the manifest.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let target = cfg.build_target()?;

    let results: Vec<Result<SeedOutput>> = std::thread::scope(|scope| {
        let handles: Vec<_> =
            cfg.seeds.iter().map(|&seed| scope.spawn({
                let (target, out) = (&target, &out);
                move || run_seed(cfg, target, seed, out)
            })).collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
    });

    let mut summary = RunSummary { out: out.clone(), rows: Vec::new(), timings: Vec::new(), grpo_logs: Vec::new() };
    for (r, &seed) in results.into_iter().zip(&cfg.seeds) {
        let r = r?;
        summary.rows.extend(r.rows);
        summary.timings.extend(r.timings);
        if let Some(log) = r.grpo_log {
            summary.grpo_logs.push((seed, log));
        }
    }

    write_file(&out.join("metrics.csv"), metrics_csv(&summary.rows).as_bytes())?;
    let mut timings = String::from("stage,seed,seconds\n");
    for t in &summary.timings {
        writeln!(timings, "{},{},{}", t.stage, t.seed, t.seconds).expect("writing to a String");
    }
    write_file(&out.join("timings.csv"), timings.as_bytes())?;
    write_manifest(&out, &cfg.source)?;
    Ok(summary)
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// Writes `manifest.txt`: the config verbatim, then `sha256  path` for every
/// file under `out` (sorted, the manifest itself excluded).
pub fn write_manifest(out: &Path, config_text: &str) -> Result<()> {
    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    files.retain(|p| p != Path::new("manifest.txt"));
    files.sort();
    let mut text = String::from("[config]\n");
    text.push_str(config_text);
    if !config_text.ends_with('\n') && !config_text.is_empty() {
        text.push('\n');
    }
    text.push_str("[files]\n");
    for rel in files {
        let path = out.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let rel = rel.to_string_lossy().replace('\\', "/");
        writeln!(text, "{}  {rel}", sha256_hex(&bytes)).expect("writing to a String");
    }
    write_file(&out.join("manifest.txt"), text.as_bytes())
}

fn collect_files(root: &Path, dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, files)?;
        } else {
            files.push(path.strip_prefix(root).expect("walked from root").to_path_buf());
        }
    }
    Ok(())
}

/// Parses a `manifest.txt` file list back into `(sha256, relative path)` pairs.
pub fn read_manifest_files(text: &str) -> Vec<(String, String)> {
    text.split_once("[files]\n")
        .map(|(_, files)| {
            files
                .lines()
                .filter_map(|l| l.split_once("  ").map(|(h, p)| (h.to_string(), p.to_string())))
                .collect()
        })
        .unwrap_or_default()
}
