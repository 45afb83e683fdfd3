use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use empower_core::agents::TransitionHeads;
use empower_core::envs::{make_world, SizeOverrides};
use empower_core::harness::{
    compute_gain, emit_heatmap, load_config, run_experiment, RunOutput,
};
use empower_core::oracle::{ExactAnalysis, TabularPolicy, DEFAULT_CAP};
use empower_core::tensor::Checkpoint;
use empower_core::{AgentBundle, Algo, Error, Result, TrainConfig, WorldName};

#[derive(Parser)]
#[command(name = "empower", version, about = "Empowerment maximization with implicit options")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration over all repetitions.
    Train(TrainArgs),
    /// Exact bounds of a trained checkpoint on a small world.
    Audit(AuditArgs),
    /// Exact quantities of a tabular policy by enumeration.
    Oracle(OracleArgs),
    /// Heatmap of the final-state distribution in a training report.
    Heatmap(HeatmapArgs),
    /// Empowerment gain of one training report over another.
    Gain(GainArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    world: Option<WorldName>,
    #[arg(long)]
    algo: Option<Algo>,
    #[arg(long)]
    tmax: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat `key = value` config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(w) = self.world {
            c.world = w;
        }
        if let Some(a) = self.algo {
            c.algo = a;
        }
        if let Some(t) = self.tmax {
            c.sizes.t_max = Some(t);
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Joint-training batches.
    #[arg(long)]
    batches: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// Output directory for logs, report, checkpoints and heatmap.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint written by `train`; without one the untrained bundle is audited.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    /// Tabular policy text file; uniform when omitted.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    sigma: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    /// `report.json` written by `train`.
    #[arg(long)]
    report: PathBuf,
    /// Output path stem; `.csv` and `.pgm` are appended.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GainArgs {
    #[arg(long)]
    alg: PathBuf,
    #[arg(long)]
    vic: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Audit(a) => audit(a),
        Command::Oracle(a) => oracle(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Gain(a) => gain(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    match out {
        Some(p) => std::fs::write(p, text + "\n").map_err(|source| Error::Io { path: p.to_path_buf(), source }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = a.common.resolve()?;
    if let Some(b) = a.batches {
        cfg.total_batches = b;
    }
    if let Some(w) = a.warmup {
        cfg.warmup_batches = w;
    }
    if let Some(r) = a.repetitions {
        cfg.repetitions = r;
    }
    let out = RunOutput { dir: a.out.clone() };
    let report = run_experiment(&cfg, &out)?;
    let world = cfg.make_world()?;
    match &a.out {
        Some(dir) => {
            if world.dim() <= 2 {
                emit_heatmap(&world, &report.mean_dist(world.n_states()), &dir.join("heatmap"))?;
            }
            if let Some(b) = report.runs.first().and_then(|r| r.bundle.as_ref()) {
                b.checkpoint().save(&dir.join("final.ckpt"))?;
            }
        }
        None => print!("{}", report.csv()),
    }
    eprintln!(
        "{} on {}: mean estimate {:.4} nats (ceiling {:.4}), mean external {:.4}",
        cfg.algo, cfg.world, report.final_mean_i_hat, report.ceiling, report.mean_external
    );
    Ok(())
}

fn small_world(cfg: &TrainConfig) -> Result<empower_core::WorldSpec> {
    make_world(cfg.world, cfg.sizes)
}

fn audit(a: AuditArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let world = small_world(&cfg)?;
    let start = world.start_states[0];
    let mut rng = empower_core::rng::stream(cfg.seed, 0);
    let mut bundle = AgentBundle::new(&world, &cfg, &mut rng)?;
    if let Some(p) = &a.checkpoint {
        bundle.restore(&Checkpoint::load(p)?)?;
    }
    let policy = TabularPolicy::from_model(&world, start, &bundle.policy, DEFAULT_CAP)?;
    let an = ExactAnalysis::new(&world, start, &policy, DEFAULT_CAP)?;
    let mut expected_policy_term = 0.0;
    let mut expected_bias = 0.0;
    for (omega, p) in &an.options {
        expected_policy_term += p * empower_core::agents::policy_term(&world, omega, &bundle.policy, &bundle.inference)?;
        expected_bias += p * an.bias(&world, omega)?;
    }
    let mut report = json!({
        "world": cfg.world,
        "algo": cfg.algo,
        "mi": an.mi,
        "expected_policy_term": expected_policy_term,
        "expected_bias": expected_bias,
        "n_options": an.options.len(),
    });
    match &bundle.transitions {
        TransitionHeads::Softmax { prior, posterior } => {
            let (ive, uve) = an.ive_and_uve(&world, &bundle.inference, posterior, prior)?;
            report["i_ve"] = json!(ive);
            report["u_ve"] = json!(uve);
            report["bound_holds"] = json!((an.mi - ive).abs() <= uve + 1e-9);
        }
        TransitionHeads::Gmm { prior, posterior } => {
            let (u1, u2) = an.uve_sigma(&world, &bundle.inference, posterior, prior)?;
            report["u_ve_sigma"] = json!([u1, u2]);
        }
        TransitionHeads::None => {}
    }
    emit(&report, a.out.as_deref())
}

fn oracle(a: OracleArgs) -> Result<()> {
    let cfg = a.common.resolve()?;
    let world = small_world(&cfg)?;
    let policy = match &a.policy {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.clone(), source })?;
            TabularPolicy::from_text(&world, &text)?
        }
        None => TabularPolicy::uniform(),
    };
    let an = ExactAnalysis::new(&world, world.start_states[0], &policy, DEFAULT_CAP)?;
    let report = an.report(&world, a.sigma)?;
    emit(&serde_json::to_value(&report).expect("report serializes"), a.out.as_deref())
}

fn read_report(path: &Path) -> Result<(TrainConfig, Value)> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })?;
    let cfg: TrainConfig = serde_json::from_value(v["config"].clone()).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("report config: {e}"),
    })?;
    Ok((cfg, v))
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let (cfg, v) = read_report(&a.report)?;
    let world = cfg.make_world()?;
    let runs = v["runs"].as_array().cloned().unwrap_or_default();
    if runs.is_empty() {
        return Err(Error::Parse { line: 0, msg: "report has no runs".into() });
    }
    let mut dist = vec![0.0; world.n_states()];
    for r in &runs {
        for pair in r["ema_dist"].as_array().into_iter().flatten() {
            let (Some(s), Some(p)) = (pair[0].as_u64(), pair[1].as_f64()) else {
                return Err(Error::Parse { line: 0, msg: "malformed ema_dist entry".into() });
            };
            let s = s as usize;
            if s >= dist.len() {
                return Err(Error::Parse { line: 0, msg: format!("state {s} out of range") });
            }
            dist[s] += p / runs.len() as f64;
        }
    }
    let (csv, pgm) = emit_heatmap(&world, &dist, &a.out)?;
    println!("{}\n{}", csv.display(), pgm.display());
    Ok(())
}

fn gain(a: GainArgs) -> Result<()> {
    let (ca, va) = read_report(&a.alg)?;
    let (cv, vv) = read_report(&a.vic)?;
    let key = |c: &TrainConfig| -> Result<(WorldName, SizeOverrides, usize)> { Ok((c.world, c.sizes, c.make_world()?.t_max)) };
    if key(&ca)? != key(&cv)? {
        return Err(Error::InvalidArgument(format!(
            "reports are for different worlds: {} vs {}",
            ca.world, cv.world
        )));
    }
    let est = |v: &Value| v["final_mean_i_hat"].as_f64().ok_or_else(|| Error::Parse { line: 0, msg: "missing final_mean_i_hat".into() });
    let (ia, iv) = (est(&va)?, est(&vv)?);
    let g = compute_gain(ia, iv)?;
    emit(
        &json!({ "world": ca.world, "i_alg": ia, "i_vic": iv, "gain_percent": g.percent, "ratio": g.ratio }),
        None,
    )
}
