//! Experiment orchestration.
//!
//! A run trains one bundle: warm-up, then joint training, logging a
//! [`RunRecord`] every `log_every` batches. An experiment runs
//! `repetitions` independent runs in parallel (each with its own RNG stream
//! derived from the master seed) and averages their estimate traces.
//!
//! Estimates are in nats. The CSV log has the fixed header [`CSV_HEADER`];
//! `wall_ms` is zero unless wall-clock logging is enabled, so that logs are
//! byte-identical across invocations by default.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::agents::{sample_episode, train_batch, AgentBundle, Algo, TrainConfig};
use crate::envs::{RoomKind, SizeOverrides, StateId, WorldName, WorldSpec};
use crate::error::{Error, Result};
use crate::rng::{stream, stream_id};

pub const CSV_HEADER: &str =
    "run_id,algo,world,seed,batch,episodes,i_hat,policy_term,transition_term,external_term,baseline,wall_ms";

const PURPOSE_INIT: u64 = 1;
const PURPOSE_TRAIN: u64 = 2;
const PURPOSE_EVAL: u64 = 3;

/// Exponential moving average of the final-state distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmpowermentEstimator {
    pub ema_dist: BTreeMap<StateId, f64>,
    pub decay: f64,
    pub repetition_estimates: Vec<f64>,
    initialized: bool,
}

impl EmpowermentEstimator {
    pub fn new(decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::InvalidArgument(format!("decay must lie in (0, 1), got {decay}")));
        }
        Ok(Self {
            ema_dist: BTreeMap::new(),
            decay,
            repetition_estimates: Vec::new(),
            initialized: false,
        })
    }

    /// Starts from a given distribution instead of the first batch.
    pub fn with_dist(decay: f64, dist: BTreeMap<StateId, f64>) -> Result<Self> {
        let mut e = Self::new(decay)?;
        e.ema_dist = dist;
        e.initialized = true;
        Ok(e)
    }

    /// Folds in one batch of final states and returns the new estimate.
    /// The first batch initializes the average.
    pub fn update(&mut self, batch_finals: &[StateId]) -> Result<f64> {
        if batch_finals.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let w = 1.0 / batch_finals.len() as f64;
        let mut batch = BTreeMap::new();
        for &s in batch_finals {
            *batch.entry(s).or_insert(0.0) += w;
        }
        if self.initialized {
            for v in self.ema_dist.values_mut() {
                *v *= self.decay;
            }
            for (s, p) in batch {
                *self.ema_dist.entry(s).or_insert(0.0) += (1.0 - self.decay) * p;
            }
        } else {
            self.ema_dist = batch;
            self.initialized = true;
        }
        Ok(self.estimate())
    }

    /// Entropy of the current average.
    pub fn estimate(&self) -> f64 {
        entropy_of(self.ema_dist.values().copied())
    }
}

fn entropy_of(ps: impl Iterator<Item = f64>) -> f64 {
    ps.filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

/// One logged point of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub run_id: usize,
    pub algo: Algo,
    pub world: WorldName,
    pub seed: u64,
    pub batch: usize,
    pub episodes: usize,
    pub i_hat: f64,
    pub policy_term: f64,
    pub transition_term: f64,
    pub external_term: f64,
    pub baseline: f64,
    pub wall_ms: u64,
}

impl RunRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.algo,
            self.world,
            self.seed,
            self.batch,
            self.episodes,
            self.i_hat,
            self.policy_term,
            self.transition_term,
            self.external_term,
            self.baseline,
            self.wall_ms
        )
    }
}

pub fn csv_string(records: &[RunRecord]) -> String {
    let mut s = String::with_capacity(64 * (records.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    }
    std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Policy evaluation after training.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub episodes: usize,
    pub mean_external: f64,
    pub special_room_hits: usize,
    pub final_states: BTreeMap<usize, usize>,
}

/// Result of one repetition.
#[derive(Debug, Clone, Serialize)]
pub struct RunOutcome {
    pub run_id: usize,
    pub seed: u64,
    pub batches: usize,
    pub final_i_hat: f64,
    pub ema_dist: Vec<(usize, f64)>,
    pub evaluation: Evaluation,
    #[serde(skip)]
    pub records: Vec<RunRecord>,
    #[serde(skip)]
    pub bundle: Option<AgentBundle>,
}

/// Averaged result of all repetitions.
#[derive(Debug, Clone, Serialize)]
pub struct FinalReport {
    pub config: TrainConfig,
    pub runs: Vec<RunOutcome>,
    /// Pointwise mean of the logged estimates; runs that stopped early
    /// contribute their last value.
    pub mean_trace: Vec<(usize, f64)>,
    pub final_mean_i_hat: f64,
    pub mean_external: f64,
    pub ceiling: f64,
}

impl FinalReport {
    pub fn records(&self) -> Vec<RunRecord> {
        self.runs.iter().flat_map(|r| r.records.iter().cloned()).collect()
    }

    pub fn csv(&self) -> String {
        csv_string(&self.records())
    }

    /// Mean of the runs' EMA distributions over state ids.
    pub fn mean_dist(&self, n_states: usize) -> Vec<f64> {
        let mut d = vec![0.0; n_states];
        for r in &self.runs {
            for &(s, p) in &r.ema_dist {
                d[s] += p / self.runs.len() as f64;
            }
        }
        d
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }
}

/// Samples `n` options from the trained policy and scores them.
pub fn evaluate(bundle: &AgentBundle, world: &WorldSpec, n: usize, seed: u64, run_id: usize) -> Result<Evaluation> {
    let mut rng = stream(seed, stream_id(run_id as u64, PURPOSE_EVAL, 0));
    let mut total = 0.0;
    let mut hits = 0;
    let mut finals = BTreeMap::new();
    for _ in 0..n {
        let omega = sample_episode(bundle, world, &mut rng)?;
        let sf = omega.current();
        total += world.external_reward(&omega)?;
        if world.room(sf) == Some(RoomKind::Special) {
            hits += 1;
        }
        *finals.entry(sf.0).or_insert(0) += 1;
    }
    Ok(Evaluation {
        episodes: n,
        mean_external: if n > 0 { total / n as f64 } else { 0.0 },
        special_room_hits: hits,
        final_states: finals,
    })
}

/// Trains repetition `run_id` of `cfg`.
pub fn run_single(cfg: &TrainConfig, run_id: usize, out: &RunOutput) -> Result<RunOutcome> {
    cfg.validate()?;
    let world = cfg.make_world()?;
    let mut init_rng = stream(cfg.seed, stream_id(run_id as u64, PURPOSE_INIT, 0));
    let mut rng = stream(cfg.seed, stream_id(run_id as u64, PURPOSE_TRAIN, 0));
    let mut bundle = AgentBundle::new(&world, cfg, &mut init_rng)?;
    let mut est = EmpowermentEstimator::new(cfg.ema_decay)?;
    let clock = Instant::now();
    let mut records = Vec::new();
    let total = cfg.warmup_batches + cfg.total_batches;
    let mut done = 0;
    for batch in 0..total {
        let joint = batch >= cfg.warmup_batches;
        let summary = match train_batch(&mut bundle, &world, cfg, &mut rng, joint) {
            Ok(s) => s,
            Err(e) => {
                if let (Error::NonFinite { .. }, Some(p)) = (&e, out.path(&format!("run{run_id}_abort.ckpt"))) {
                    bundle.checkpoint().save(&p)?;
                }
                return Err(e);
            }
        };
        done = batch + 1;
        let finals: Vec<StateId> = summary.episodes.iter().map(|o| o.current()).collect();
        let i_hat = est.update(&finals)?;
        let reached = joint && cfg.target_i_hat.is_some_and(|t| i_hat >= t);
        if batch % cfg.log_every == 0 || done == total || reached {
            records.push(RunRecord {
                run_id,
                algo: cfg.algo,
                world: cfg.world,
                seed: cfg.seed,
                batch,
                episodes: done * cfg.batch_size,
                i_hat,
                policy_term: summary.mean(|r| r.policy_term),
                transition_term: summary.mean(|r| r.transition_term),
                external_term: summary.mean(|r| r.external_term),
                baseline: summary.mean(|r| r.baseline),
                wall_ms: if cfg.log_wall_time { clock.elapsed().as_millis() as u64 } else { 0 },
            });
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            if let Some(p) = out.path(&format!("run{run_id}.ckpt")) {
                bundle.checkpoint().save(&p)?;
            }
        }
        if reached {
            break;
        }
    }
    if let Some(p) = out.path(&format!("run{run_id}.csv")) {
        write_file(&p, csv_string(&records).as_bytes())?;
    }
    let evaluation = evaluate(&bundle, &world, cfg.eval_episodes, cfg.seed, run_id)?;
    Ok(RunOutcome {
        run_id,
        seed: cfg.seed,
        batches: done,
        final_i_hat: est.estimate(),
        ema_dist: est.ema_dist.iter().map(|(s, &p)| (s.0, p)).collect(),
        evaluation,
        records,
        bundle: Some(bundle),
    })
}

/// Runs every repetition in parallel and merges their logs.
pub fn run_experiment(cfg: &TrainConfig, out: &RunOutput) -> Result<FinalReport> {
    cfg.validate()?;
    let world = cfg.make_world()?;
    let runs: Vec<RunOutcome> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|k| run_single(cfg, k, out))
        .collect::<Result<_>>()?;
    let mut points: Vec<usize> = runs.iter().flat_map(|r| r.records.iter().map(|x| x.batch)).collect();
    points.sort_unstable();
    points.dedup();
    let mean_trace = points
        .iter()
        .map(|&b| {
            let sum: f64 = runs
                .iter()
                .map(|r| {
                    r.records
                        .iter()
                        .take_while(|x| x.batch <= b)
                        .last()
                        .map_or(0.0, |x| x.i_hat)
                })
                .sum();
            (b, sum / runs.len() as f64)
        })
        .collect();
    let n = runs.len() as f64;
    let report = FinalReport {
        config: cfg.clone(),
        final_mean_i_hat: runs.iter().map(|r| r.final_i_hat).sum::<f64>() / n,
        mean_external: runs.iter().map(|r| r.evaluation.mean_external).sum::<f64>() / n,
        ceiling: (world.reachable_final_states(world.start_states[0]).len() as f64).ln(),
        mean_trace,
        runs,
    };
    if let Some(p) = out.path("metrics.csv") {
        write_file(&p, report.csv().as_bytes())?;
    }
    if let Some(p) = out.path("report.json") {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        write_file(&p, json.as_bytes())?;
    }
    Ok(report)
}

/// Writes a coordinate CSV and an 8-bit PGM image of a final-state
/// distribution indexed by state id. The most likely cell maps to 255.
pub fn emit_heatmap(world: &WorldSpec, dist: &[f64], path: &Path) -> Result<(PathBuf, PathBuf)> {
    if dist.len() != world.n_states() {
        return Err(Error::Shape(format!("{} probabilities for {} states", dist.len(), world.n_states())));
    }
    let dim = world.dim();
    if dim == 0 || dim > 2 {
        return Err(Error::InvalidArgument(format!("heatmaps need 1D or 2D coordinates, world has {dim}")));
    }
    let total: f64 = dist.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("distribution has no mass".into()));
    }
    let p: Vec<f64> = dist.iter().map(|v| v / total).collect();

    let mut csv = String::from(if dim == 1 { "x,probability\n" } else { "x,y,probability\n" });
    for (i, c) in world.coords.iter().enumerate() {
        for v in c {
            write!(csv, "{v},").expect("string write");
        }
        writeln!(csv, "{}", p[i]).expect("string write");
    }

    let coord = |i: usize, k: usize| if k < dim { world.coords[i][k] } else { 0 };
    let min = |k: usize| (0..world.n_states()).map(|i| coord(i, k)).min().unwrap_or(0);
    let max = |k: usize| (0..world.n_states()).map(|i| coord(i, k)).max().unwrap_or(0);
    let (x0, y0) = (min(0), min(1));
    let width = (max(0) - x0 + 1) as usize;
    let height = (max(1) - y0 + 1) as usize;
    let peak = p.iter().cloned().fold(0.0, f64::max);
    let mut pixels = vec![0u8; width * height];
    for i in 0..world.n_states() {
        let x = (coord(i, 0) - x0) as usize;
        let y = (coord(i, 1) - y0) as usize;
        pixels[y * width + x] = (255.0 * p[i] / peak).round().clamp(0.0, 255.0) as u8;
    }
    let mut pgm = format!("P5\n{width} {height}\n255\n").into_bytes();
    pgm.extend_from_slice(&pixels);

    let csv_path = path.with_extension("csv");
    let pgm_path = path.with_extension("pgm");
    write_file(&csv_path, csv.as_bytes())?;
    write_file(&pgm_path, &pgm)?;
    Ok((csv_path, pgm_path))
}

/// Relative gain of one final estimate over another.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Gain {
    /// `100 * (ratio - 1)`.
    pub percent: f64,
    pub ratio: f64,
}

pub fn compute_gain(i_alg: f64, i_vic: f64) -> Result<Gain> {
    if i_vic == 0.0 || !i_vic.is_finite() || !i_alg.is_finite() {
        return Err(Error::InvalidArgument(format!("gain undefined for estimates {i_alg} and {i_vic}")));
    }
    let ratio = i_alg / i_vic;
    Ok(Gain {
        percent: 100.0 * (ratio - 1.0),
        ratio,
    })
}

const KEYS: &[&str] = &[
    "algo",
    "world",
    "length",
    "width",
    "height",
    "depth",
    "t_max",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "batch_size",
    "t_smooth",
    "sigma",
    "n_gmm",
    "warmup_batches",
    "alpha",
    "entropy_coef",
    "total_batches",
    "seed",
    "repetitions",
    "hidden",
    "init_std",
    "baseline_lr",
    "ema_decay",
    "log_every",
    "log_wall_time",
    "checkpoint_every",
    "target_i_hat",
    "eval_episodes",
];

/// Parses `key = value` lines (`#` starts a comment). Missing keys keep
/// their defaults; unknown keys and malformed values are rejected with the
/// offending line number.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    let mut seen = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: line_no, msg };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(err(format!("unknown key `{key}`")));
        }
        if let Some(prev) = seen.insert(key.to_string(), line_no) {
            return Err(err(format!("duplicate key `{key}` (first on line {prev})")));
        }
        fn num<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
            value.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("`{key}` expects a number, got `{value}`"),
            })
        }
        let n = line_no;
        match key {
            "algo" => c.algo = value.parse().map_err(|_| err(format!("unknown algo `{value}`")))?,
            "world" => c.world = value.parse().map_err(|_| err(format!("unknown world `{value}`")))?,
            "length" => c.sizes.length = Some(num(key, value, n)?),
            "width" => c.sizes.width = Some(num(key, value, n)?),
            "height" => c.sizes.height = Some(num(key, value, n)?),
            "depth" => c.sizes.depth = Some(num(key, value, n)?),
            "t_max" => c.sizes.t_max = Some(num(key, value, n)?),
            "lr" => c.lr = Some(num(key, value, n)?),
            "beta1" => c.beta1 = num(key, value, n)?,
            "beta2" => c.beta2 = num(key, value, n)?,
            "eps" => c.eps = num(key, value, n)?,
            "batch_size" => c.batch_size = num(key, value, n)?,
            "t_smooth" => c.t_smooth = num(key, value, n)?,
            "sigma" => c.sigma = num(key, value, n)?,
            "n_gmm" => c.n_gmm = num(key, value, n)?,
            "warmup_batches" => c.warmup_batches = num(key, value, n)?,
            "alpha" => c.alpha = Some(num(key, value, n)?),
            "entropy_coef" => c.entropy_coef = num(key, value, n)?,
            "total_batches" => c.total_batches = num(key, value, n)?,
            "seed" => c.seed = num(key, value, n)?,
            "repetitions" => c.repetitions = num(key, value, n)?,
            "hidden" => c.hidden = num(key, value, n)?,
            "init_std" => c.init_std = num(key, value, n)?,
            "baseline_lr" => c.baseline_lr = num(key, value, n)?,
            "ema_decay" => c.ema_decay = num(key, value, n)?,
            "log_every" => c.log_every = num(key, value, n)?,
            "log_wall_time" => {
                c.log_wall_time = value
                    .parse()
                    .map_err(|_| err(format!("`log_wall_time` expects true or false, got `{value}`")))?
            }
            "checkpoint_every" => c.checkpoint_every = num(key, value, n)?,
            "target_i_hat" => c.target_i_hat = Some(num(key, value, n)?),
            "eval_episodes" => c.eval_episodes = num(key, value, n)?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    parse_config(&text)
}

/// Text form accepted by [`parse_config`]; unset optional keys are omitted.
pub fn config_to_text(c: &TrainConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        writeln!(s, "{k} = {v}").expect("string write");
    };
    kv("algo", c.algo.to_string());
    kv("world", c.world.to_string());
    let SizeOverrides { length, width, height, depth, t_max } = c.sizes;
    for (k, v) in [("length", length), ("width", width), ("height", height), ("depth", depth), ("t_max", t_max)] {
        if let Some(v) = v {
            kv(k, v.to_string());
        }
    }
    if let Some(lr) = c.lr {
        kv("lr", format!("{lr:?}"));
    }
    kv("beta1", format!("{:?}", c.beta1));
    kv("beta2", format!("{:?}", c.beta2));
    kv("eps", format!("{:?}", c.eps));
    kv("batch_size", c.batch_size.to_string());
    kv("t_smooth", c.t_smooth.to_string());
    kv("sigma", format!("{:?}", c.sigma));
    kv("n_gmm", c.n_gmm.to_string());
    kv("warmup_batches", c.warmup_batches.to_string());
    if let Some(a) = c.alpha {
        kv("alpha", format!("{a:?}"));
    }
    kv("entropy_coef", format!("{:?}", c.entropy_coef));
    kv("total_batches", c.total_batches.to_string());
    kv("seed", c.seed.to_string());
    kv("repetitions", c.repetitions.to_string());
    kv("hidden", c.hidden.to_string());
    kv("init_std", format!("{:?}", c.init_std));
    kv("baseline_lr", format!("{:?}", c.baseline_lr));
    kv("ema_decay", format!("{:?}", c.ema_decay));
    kv("log_every", c.log_every.to_string());
    kv("log_wall_time", c.log_wall_time.to_string());
    kv("checkpoint_every", c.checkpoint_every.to_string());
    if let Some(t) = c.target_i_hat {
        kv("target_i_hat", format!("{t:?}"));
    }
    kv("eval_episodes", c.eval_episodes.to_string());
    s
}

#[cfg(test)]
mod tests;
