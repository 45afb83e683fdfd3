//! Training algorithms.
//!
//! All learners share one batch loop: sample options from the policy,
//! score each option with the algorithm's intrinsic reward, fit the
//! inference and transition models by maximum likelihood, update the
//! per-start baseline and take one policy-gradient step.
//!
//! | algo     | transition term                         |
//! |----------|-----------------------------------------|
//! | `vic`    | none (biased in stochastic worlds)      |
//! | `alg1`   | softmax posterior minus softmax prior   |
//! | `alg2`   | smoothed mixture posterior minus prior  |
//! | `random` | intrinsic terms zeroed, external only   |

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::{make_world, SizeOverrides, StateId, Trajectory, WorldName, WorldSpec};
use crate::error::{Error, Result};
use crate::models::{ActionHead, ActionModel, Baseline, GmmHead, TransSoftmaxHead, TransitionModel};
use crate::rng::Rng;
use crate::tensor::{floor_log, AdamConfig, Checkpoint, Graph, NamedTensor, NodeId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Vic,
    Alg1,
    Alg2,
    Random,
}

impl Algo {
    pub const ALL: [Algo; 4] = [Algo::Vic, Algo::Alg1, Algo::Alg2, Algo::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Algo::Vic => "vic",
            Algo::Alg1 => "alg1",
            Algo::Alg2 => "alg2",
            Algo::Random => "random",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown algo `{s}` (expected vic, alg1, alg2 or random)")))
    }
}

/// Decomposition of the reward of one option.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub algo: Algo,
    pub policy_term: f64,
    pub transition_term: f64,
    pub external_term: f64,
    pub alpha: f64,
    pub baseline: f64,
    pub total_for_gradient: f64,
}

impl RewardBreakdown {
    /// Builds a breakdown and fills in the total.
    pub fn new(algo: Algo, policy_term: f64, transition_term: f64, external_term: f64, alpha: f64, baseline: f64) -> Self {
        let mut r = Self {
            algo,
            policy_term,
            transition_term,
            external_term,
            alpha,
            baseline,
            total_for_gradient: 0.0,
        };
        r.total_for_gradient = r.before_baseline() - baseline;
        r
    }

    /// Reward before the baseline is subtracted.
    pub fn before_baseline(&self) -> f64 {
        self.policy_term + self.transition_term + self.alpha * self.external_term
    }

    /// Same reward with a different baseline.
    pub fn with_baseline(mut self, baseline: f64) -> Self {
        self.baseline = baseline;
        self.total_for_gradient = self.before_baseline() - baseline;
        self
    }
}

/// Hyper-parameters of one training run. `None` fields resolve to
/// world-dependent defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub algo: Algo,
    pub world: WorldName,
    pub sizes: SizeOverrides,
    /// Adam step size; 1e-3 for small worlds and 1e-4 for room worlds.
    pub lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub t_smooth: usize,
    pub sigma: f64,
    pub n_gmm: usize,
    pub warmup_batches: usize,
    /// Weight of the external reward; 30 for room worlds, 0 otherwise.
    pub alpha: Option<f64>,
    pub entropy_coef: f64,
    /// Joint-training batches after warm-up.
    pub total_batches: usize,
    pub seed: u64,
    pub repetitions: usize,
    pub hidden: usize,
    pub init_std: f64,
    pub baseline_lr: f64,
    pub ema_decay: f64,
    pub log_every: usize,
    pub log_wall_time: bool,
    /// Checkpoint period in batches; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Stops a run early once its own estimate reaches this value.
    pub target_i_hat: Option<f64>,
    pub eval_episodes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Alg2,
            world: WorldName::Det1d,
            sizes: SizeOverrides::default(),
            lr: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 128,
            t_smooth: 128,
            sigma: 0.25,
            n_gmm: 10,
            warmup_batches: 1000,
            alpha: None,
            entropy_coef: 0.01,
            total_batches: 50_000,
            seed: 0,
            repetitions: 5,
            hidden: 64,
            init_std: 0.1,
            baseline_lr: 0.1,
            ema_decay: 0.99,
            log_every: 100,
            log_wall_time: false,
            checkpoint_every: 0,
            target_i_hat: None,
            eval_episodes: 100,
        }
    }
}

impl TrainConfig {
    pub fn effective_lr(&self) -> f64 {
        self.lr.unwrap_or(if self.world.is_rooms() { 1e-4 } else { 1e-3 })
    }

    pub fn effective_alpha(&self) -> f64 {
        self.alpha.unwrap_or(if self.world.is_rooms() { 30.0 } else { 0.0 })
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.effective_lr(),
            betas: (self.beta1, self.beta2),
            eps: self.eps,
        }
    }

    pub fn make_world(&self) -> Result<WorldSpec> {
        make_world(self.world, self.sizes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let lr = self.effective_lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return bad(format!("lr must be positive, got {lr}"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.t_smooth == 0 {
            return bad("t_smooth must be at least 1".into());
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if self.n_gmm == 0 {
            return bad("n_gmm must be at least 1".into());
        }
        let alpha = self.effective_alpha();
        if !alpha.is_finite() {
            return bad(format!("alpha must be finite, got {alpha}"));
        }
        if alpha != 0.0 && !self.world.is_rooms() {
            return bad(format!("alpha = {alpha} needs a room world, got {}", self.world));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return bad(format!("entropy_coef must be non-negative, got {}", self.entropy_coef));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1".into());
        }
        if !(self.init_std > 0.0) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        if !(self.baseline_lr > 0.0 && self.baseline_lr <= 1.0) {
            return bad(format!("baseline_lr must lie in (0, 1], got {}", self.baseline_lr));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        self.sizes.check()
    }
}

/// Transition models of a bundle, by algorithm.
#[derive(Debug, Clone)]
pub enum TransitionHeads {
    None,
    Softmax { prior: TransSoftmaxHead, posterior: TransSoftmaxHead },
    Gmm { prior: GmmHead, posterior: GmmHead },
}

/// Everything one learner owns.
#[derive(Debug, Clone)]
pub struct AgentBundle {
    pub algo: Algo,
    pub alpha: f64,
    pub policy: ActionHead,
    pub inference: ActionHead,
    pub transitions: TransitionHeads,
    pub baseline: Baseline,
}

impl AgentBundle {
    pub fn new(world: &WorldSpec, cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let std = cfg.init_std;
        let policy = ActionHead::new(world, h, false, rng, std)?;
        let inference = ActionHead::new(world, h, true, rng, std)?;
        let transitions = match cfg.algo {
            Algo::Vic | Algo::Random => TransitionHeads::None,
            Algo::Alg1 => TransitionHeads::Softmax {
                prior: TransSoftmaxHead::new(world, h, false, rng, std)?,
                posterior: TransSoftmaxHead::new(world, h, true, rng, std)?,
            },
            Algo::Alg2 => TransitionHeads::Gmm {
                prior: GmmHead::new(world, h, false, cfg.n_gmm, cfg.sigma, rng, std)?,
                posterior: GmmHead::new(world, h, true, cfg.n_gmm, cfg.sigma, rng, std)?,
            },
        };
        Ok(Self {
            algo: cfg.algo,
            alpha: cfg.effective_alpha(),
            policy,
            inference,
            transitions,
            baseline: Baseline::new(world.n_states()),
        })
    }

    fn stores(&self) -> Vec<(&'static str, &ParamStore)> {
        let mut out = vec![("policy", &self.policy.store), ("inference", &self.inference.store)];
        match &self.transitions {
            TransitionHeads::None => {}
            TransitionHeads::Softmax { prior, posterior } => {
                out.push(("trans_prior", &prior.store));
                out.push(("trans_posterior", &posterior.store));
            }
            TransitionHeads::Gmm { prior, posterior } => {
                out.push(("trans_prior", &prior.store));
                out.push(("trans_posterior", &posterior.store));
            }
        }
        out
    }

    /// Parameter values of every model plus the baseline.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (role, store) in self.stores() {
            ck.push_store(role, store);
        }
        ck.entries.push(NamedTensor {
            name: "baseline".into(),
            rows: 1,
            cols: self.baseline.values.len(),
            values: self.baseline.values.clone(),
        });
        ck
    }

    /// Loads values saved by [`AgentBundle::checkpoint`] into a bundle of
    /// the same shape. Optimizer moments are not restored.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.restore_store("policy", &mut self.policy.store)?;
        ck.restore_store("inference", &mut self.inference.store)?;
        match &mut self.transitions {
            TransitionHeads::None => {}
            TransitionHeads::Softmax { prior, posterior } => {
                ck.restore_store("trans_prior", &mut prior.store)?;
                ck.restore_store("trans_posterior", &mut posterior.store)?;
            }
            TransitionHeads::Gmm { prior, posterior } => {
                ck.restore_store("trans_prior", &mut prior.store)?;
                ck.restore_store("trans_posterior", &mut posterior.store)?;
            }
        }
        let b = ck
            .entries
            .iter()
            .find(|e| e.name == "baseline")
            .ok_or_else(|| Error::Checkpoint("missing `baseline`".into()))?;
        if b.values.len() != self.baseline.values.len() {
            return Err(Error::Checkpoint("baseline length mismatch".into()));
        }
        self.baseline.values.clone_from(&b.values);
        Ok(())
    }
}

fn pick_start(world: &WorldSpec, rng: &mut Rng) -> StateId {
    let n = world.start_states.len();
    if n == 1 {
        world.start_states[0]
    } else {
        world.start_states[rng.random_range(0..n)]
    }
}

fn sample_index(rng: &mut Rng, log_p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &l) in log_p.iter().enumerate() {
        if l == f64::NEG_INFINITY {
            continue;
        }
        acc += l.exp();
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// One policy rollout recorded in a graph over the policy parameters.
struct Rollout {
    omega: Trajectory,
    /// `log pi^p(a_t | tau_t)` per step.
    log_pi: Vec<NodeId>,
    /// Entropy of `pi^p(. | tau_t)` per step.
    entropies: Vec<NodeId>,
}

fn rollout(g: &mut Graph<'_>, world: &WorldSpec, policy: &ActionHead, rng: &mut Rng, with_entropy: bool) -> Result<Rollout> {
    let enc = policy.encoder();
    let mut omega = Trajectory::new(pick_start(world, rng));
    let mut st = enc.start(g);
    let mut prev = None;
    let mut log_pi = Vec::new();
    let mut entropies = Vec::new();
    loop {
        let s = omega.current();
        st = enc.step(g, st, s, prev, None);
        let mask = world.mask_at(s, omega.env_steps());
        let lp = policy.log_probs_node(g, st.h, &mask)?;
        let a = sample_index(rng, g.value(lp));
        log_pi.push(g.pick(lp, a));
        if with_entropy {
            entropies.push(g.entropy(lp));
        }
        let action = world.action_at(a);
        let (_, done) = world.step(rng, &mut omega, action)?;
        if done {
            break;
        }
        prev = Some(a);
    }
    Ok(Rollout { omega, log_pi, entropies })
}

/// Samples one option from `pi^p` with legality masking.
pub fn sample_episode(bundle: &AgentBundle, world: &WorldSpec, rng: &mut Rng) -> Result<Trajectory> {
    let mut g = Graph::new(&bundle.policy.store);
    Ok(rollout(&mut g, world, &bundle.policy, rng, false)?.omega)
}

fn action_picks(world: &WorldSpec, omega: &Trajectory, log_probs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if log_probs.len() != omega.steps.len() {
        return Err(Error::Shape(format!("{} action rows for {} steps", log_probs.len(), omega.steps.len())));
    }
    Ok(omega
        .steps
        .iter()
        .zip(log_probs)
        .map(|(&(a, _), row)| row[world.action_index(a)])
        .collect())
}

/// `sum_t [log pi^q(a_t | tau_t, s_f) - log pi^p(a_t | tau_t)]` over every
/// step including termination.
pub fn policy_term(world: &WorldSpec, omega: &Trajectory, policy: &dyn ActionModel, inference: &dyn ActionModel) -> Result<f64> {
    let s_f = omega.final_state().ok_or(Error::Incomplete)?;
    let p = action_picks(world, omega, &policy.action_log_probs(world, omega, None)?)?;
    let q = action_picks(world, omega, &inference.action_log_probs(world, omega, Some(s_f))?)?;
    Ok(log_ratio_sum(&q, &p))
}

/// `sum_t [log rho^q(s_{t+1} | ..., s_f) - log rho^p(s_{t+1} | ...)]` over
/// movement steps. Termination contributes nothing.
pub fn transition_term(world: &WorldSpec, omega: &Trajectory, prior: &dyn TransitionModel, posterior: &dyn TransitionModel) -> Result<f64> {
    let s_f = omega.final_state().ok_or(Error::Incomplete)?;
    let p = prior.transition_log_probs(world, omega, None)?;
    let q = posterior.transition_log_probs(world, omega, Some(s_f))?;
    if p.len() != q.len() {
        return Err(Error::Shape(format!("prior has {} steps, posterior {}", p.len(), q.len())));
    }
    Ok(log_ratio_sum(&q, &p))
}

fn log_ratio_sum(q: &[f64], p: &[f64]) -> f64 {
    q.iter().zip(p).map(|(&a, &b)| floor_log(a) - floor_log(b)).sum()
}

fn check_algo(bundle: &AgentBundle, want: Algo) -> Result<()> {
    if bundle.algo == want {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{} reward requested from a {} bundle", want, bundle.algo)))
    }
}

fn breakdown(bundle: &AgentBundle, world: &WorldSpec, omega: &Trajectory, transition: f64, policy: f64) -> Result<RewardBreakdown> {
    let external = if bundle.alpha != 0.0 { world.external_reward(omega)? } else { 0.0 };
    Ok(RewardBreakdown::new(bundle.algo, policy, transition, external, bundle.alpha, bundle.baseline.value(omega.start)))
}

/// Implicit VIC reward; the transition term is zero.
pub fn reward_vic(bundle: &AgentBundle, world: &WorldSpec, omega: &Trajectory) -> Result<RewardBreakdown> {
    check_algo(bundle, Algo::Vic)?;
    let p = policy_term(world, omega, &bundle.policy, &bundle.inference)?;
    breakdown(bundle, world, omega, 0.0, p)
}

/// Implicit VIC reward corrected by softmax transition models.
pub fn reward_alg1(bundle: &AgentBundle, world: &WorldSpec, omega: &Trajectory) -> Result<RewardBreakdown> {
    check_algo(bundle, Algo::Alg1)?;
    let TransitionHeads::Softmax { prior, posterior } = &bundle.transitions else {
        return Err(Error::InvalidArgument("alg1 bundle without softmax heads".into()));
    };
    let p = policy_term(world, omega, &bundle.policy, &bundle.inference)?;
    let t = transition_term(world, omega, prior, posterior)?;
    breakdown(bundle, world, omega, t, p)
}

/// Implicit VIC reward corrected by smoothed mixture densities at the
/// realized (noise-free) next states.
pub fn reward_alg2(bundle: &AgentBundle, world: &WorldSpec, omega: &Trajectory) -> Result<RewardBreakdown> {
    check_algo(bundle, Algo::Alg2)?;
    let TransitionHeads::Gmm { prior, posterior } = &bundle.transitions else {
        return Err(Error::InvalidArgument("alg2 bundle without mixture heads".into()));
    };
    let p = policy_term(world, omega, &bundle.policy, &bundle.inference)?;
    let t = transition_term(world, omega, prior, posterior)?;
    breakdown(bundle, world, omega, t, p)
}

/// Reward of the bundle's own algorithm. The random agent gets only the
/// external part.
pub fn reward(bundle: &AgentBundle, world: &WorldSpec, omega: &Trajectory) -> Result<RewardBreakdown> {
    match bundle.algo {
        Algo::Vic => reward_vic(bundle, world, omega),
        Algo::Alg1 => reward_alg1(bundle, world, omega),
        Algo::Alg2 => reward_alg2(bundle, world, omega),
        Algo::Random => breakdown(bundle, world, omega, 0.0, 0.0),
    }
}

/// Adds `alpha * r^E(omega)` to an intrinsic breakdown.
pub fn mixed_reward(world: &WorldSpec, omega: &Trajectory, intrinsic: RewardBreakdown, alpha: f64) -> Result<RewardBreakdown> {
    if alpha != 0.0 && !world.has_rooms() {
        return Err(Error::Config(format!("alpha = {alpha} needs a room world, got {}", world.name)));
    }
    let external = if world.has_rooms() { world.external_reward(omega)? } else { 0.0 };
    Ok(RewardBreakdown::new(
        intrinsic.algo,
        intrinsic.policy_term,
        intrinsic.transition_term,
        external,
        alpha,
        intrinsic.baseline,
    ))
}

/// Per-episode weights `(r_i - b_i) / B` of the score-function gradient.
pub fn gradient_weights(rewards: &[RewardBreakdown]) -> Vec<f64> {
    let n = rewards.len().max(1) as f64;
    rewards.iter().map(|r| r.total_for_gradient / n).collect()
}

/// Score-function update on a batch already sampled from the bundle's
/// policy: accumulates `mean_i (r_i - b_i) grad sum_t log pi^p(a_t | tau_t)`
/// and takes one ascent step.
pub fn policy_gradient_step(
    bundle: &mut AgentBundle,
    world: &WorldSpec,
    batch: &[(Trajectory, RewardBreakdown)],
    adam: &AdamConfig,
) -> Result<()> {
    if let Some((_, r)) = batch.iter().find(|(_, r)| r.algo != bundle.algo) {
        return Err(Error::InvalidArgument(format!("{} reward passed to a {} bundle", r.algo, bundle.algo)));
    }
    let rewards: Vec<RewardBreakdown> = batch.iter().map(|(_, r)| *r).collect();
    let weights = gradient_weights(&rewards);
    let policy = &bundle.policy;
    let mut g = Graph::new(&policy.store);
    let mut terms = Vec::new();
    for ((omega, _), &w) in batch.iter().zip(&weights) {
        let nodes = policy.trace_nodes(&mut g, world, omega, None)?;
        for (t, lp) in nodes.into_iter().enumerate() {
            let pick = g.pick(lp, world.action_index(omega.steps[t].0));
            terms.push(g.scale(pick, w));
        }
    }
    if terms.is_empty() {
        return Ok(());
    }
    let objective = g.add_n(&terms);
    let mut buf = policy.store.grad_buffer();
    g.backward(objective, -1.0, &mut buf)?;
    drop(g);
    bundle.policy.store.accumulate(&buf, 1.0);
    bundle.policy.store.adam_step(adam)
}

/// Outcome of one training batch.
#[derive(Debug, Clone)]
pub struct BatchSummary {
    pub episodes: Vec<Trajectory>,
    pub rewards: Vec<RewardBreakdown>,
}

impl BatchSummary {
    pub fn mean(&self, f: impl Fn(&RewardBreakdown) -> f64) -> f64 {
        self.rewards.iter().map(f).sum::<f64>() / self.rewards.len().max(1) as f64
    }
}

/// Applies `-(1/B) * sum(nodes)` as a loss on `store` and takes one step.
fn likelihood_step(g: &mut Graph<'_>, store: &ParamStore, nodes: &[NodeId], batch: usize, adam: &AdamConfig) -> Result<Option<ParamStore>> {
    if nodes.is_empty() {
        return Ok(None);
    }
    let total = g.add_n(nodes);
    let mut buf = store.grad_buffer();
    g.backward(total, -1.0 / batch as f64, &mut buf)?;
    let mut next = store.clone();
    next.accumulate(&buf, 1.0);
    next.adam_step(adam)?;
    Ok(Some(next))
}

fn scalar_sum(g: &Graph<'_>, nodes: &[NodeId]) -> f64 {
    nodes.iter().map(|&n| floor_log(g.scalar(n))).sum()
}

/// Likelihood nodes and per-episode floored sums for one transition head
/// pair evaluated on the whole batch.
struct TransFit {
    prior_fit: Vec<NodeId>,
    posterior_fit: Vec<NodeId>,
    terms: Vec<f64>,
}

/// One batch: sample, score, fit the models and (unless `update_policy` is
/// false, as during warm-up) step the policy.
pub fn train_batch(
    bundle: &mut AgentBundle,
    world: &WorldSpec,
    cfg: &TrainConfig,
    rng: &mut Rng,
    update_policy: bool,
) -> Result<BatchSummary> {
    let adam = cfg.adam();
    let b = cfg.batch_size;
    let use_entropy = bundle.algo == Algo::Random && cfg.entropy_coef > 0.0;
    let intrinsic = bundle.algo != Algo::Random;

    let mut pg = Graph::new(&bundle.policy.store);
    let mut rollouts = Vec::with_capacity(b);
    for _ in 0..b {
        rollouts.push(rollout(&mut pg, world, &bundle.policy, rng, use_entropy)?);
    }
    pg.check()?;
    let episodes: Vec<Trajectory> = rollouts.iter().map(|r| r.omega.clone()).collect();

    let mut policy_terms = vec![0.0; b];
    let mut new_inference = None;
    if intrinsic {
        let mut qg = Graph::new(&bundle.inference.store);
        let mut fit = Vec::new();
        for (i, (r, omega)) in rollouts.iter().zip(&episodes).enumerate() {
            let nodes = bundle.inference.trace_nodes(&mut qg, world, omega, omega.final_state())?;
            let mut q_sum = 0.0;
            for (t, lp) in nodes.into_iter().enumerate() {
                let pick = qg.pick(lp, world.action_index(omega.steps[t].0));
                q_sum += floor_log(qg.scalar(pick));
                fit.push(pick);
            }
            policy_terms[i] = q_sum - scalar_sum(&pg, &r.log_pi);
        }
        qg.check()?;
        new_inference = likelihood_step(&mut qg, &bundle.inference.store, &fit, b, &adam)?;
    }

    let mut transition_terms = vec![0.0; b];
    let mut new_trans: Option<(ParamStore, ParamStore)> = None;
    match &bundle.transitions {
        TransitionHeads::None => {}
        TransitionHeads::Softmax { prior, posterior } => {
            let mut gp = Graph::new(&prior.store);
            let mut gq = Graph::new(&posterior.store);
            let mut tf = TransFit { prior_fit: Vec::new(), posterior_fit: Vec::new(), terms: Vec::new() };
            for omega in &episodes {
                let p = prior.trace_nodes(&mut gp, world, omega, None)?;
                let q = posterior.trace_nodes(&mut gq, world, omega, omega.final_state())?;
                tf.terms.push(scalar_sum(&gq, &q) - scalar_sum(&gp, &p));
                tf.prior_fit.extend(p);
                tf.posterior_fit.extend(q);
            }
            gp.check()?;
            gq.check()?;
            transition_terms = tf.terms;
            let np = likelihood_step(&mut gp, &prior.store, &tf.prior_fit, b, &adam)?;
            let nq = likelihood_step(&mut gq, &posterior.store, &tf.posterior_fit, b, &adam)?;
            if let (Some(np), Some(nq)) = (np, nq) {
                new_trans = Some((np, nq));
            }
        }
        TransitionHeads::Gmm { prior, posterior } => {
            let mut gp = Graph::new(&prior.store);
            let mut gq = Graph::new(&posterior.store);
            let mut tf = TransFit { prior_fit: Vec::new(), posterior_fit: Vec::new(), terms: Vec::new() };
            let k = cfg.t_smooth;
            for omega in &episodes {
                let p = prior.trace_pairs(&mut gp, world, omega, None, Some((&mut *rng, k)))?;
                let q = posterior.trace_pairs(&mut gq, world, omega, omega.final_state(), Some((&mut *rng, k)))?;
                let clean = |g: &Graph<'_>, v: &[(NodeId, Option<NodeId>)]| -> f64 {
                    v.iter().map(|&(c, _)| floor_log(g.scalar(c))).sum()
                };
                tf.terms.push(clean(&gq, &q) - clean(&gp, &p));
                tf.prior_fit.extend(p.iter().filter_map(|&(_, n)| n));
                tf.posterior_fit.extend(q.iter().filter_map(|&(_, n)| n));
            }
            gp.check()?;
            gq.check()?;
            transition_terms = tf.terms;
            let np = likelihood_step(&mut gp, &prior.store, &tf.prior_fit, b, &adam)?;
            let nq = likelihood_step(&mut gq, &posterior.store, &tf.posterior_fit, b, &adam)?;
            if let (Some(np), Some(nq)) = (np, nq) {
                new_trans = Some((np, nq));
            }
        }
    }

    let alpha = bundle.alpha;
    let mut rewards = Vec::with_capacity(b);
    for (i, omega) in episodes.iter().enumerate() {
        let external = if alpha != 0.0 { world.external_reward(omega)? } else { 0.0 };
        rewards.push(RewardBreakdown::new(
            bundle.algo,
            policy_terms[i],
            transition_terms[i],
            external,
            alpha,
            bundle.baseline.value(omega.start),
        ));
    }

    let mut new_policy = None;
    if update_policy {
        let weights = gradient_weights(&rewards);
        let mut terms = Vec::new();
        for (r, &w) in rollouts.iter().zip(&weights) {
            for &lp in &r.log_pi {
                terms.push(pg.scale(lp, w));
            }
            for &h in &r.entropies {
                terms.push(pg.scale(h, cfg.entropy_coef / b as f64));
            }
        }
        let objective = pg.add_n(&terms);
        let mut buf = bundle.policy.store.grad_buffer();
        pg.backward(objective, -1.0, &mut buf)?;
        let mut next = bundle.policy.store.clone();
        next.accumulate(&buf, 1.0);
        next.adam_step(&adam)?;
        new_policy = Some(next);
    }
    drop(pg);

    if let Some(p) = new_policy {
        bundle.policy.store = p;
    }
    if let Some(q) = new_inference {
        bundle.inference.store = q;
    }
    if let Some((np, nq)) = new_trans {
        match &mut bundle.transitions {
            TransitionHeads::Softmax { prior, posterior } => {
                prior.store = np;
                posterior.store = nq;
            }
            TransitionHeads::Gmm { prior, posterior } => {
                prior.store = np;
                posterior.store = nq;
            }
            TransitionHeads::None => unreachable!("new transition stores imply heads"),
        }
    }
    update_baseline(&mut bundle.baseline, &episodes, &rewards, cfg.baseline_lr);

    Ok(BatchSummary { episodes, rewards })
}

/// Moves `b(s_0)` towards the batch-mean pre-baseline reward of each start
/// state present in the batch.
pub fn update_baseline(baseline: &mut Baseline, episodes: &[Trajectory], rewards: &[RewardBreakdown], lr: f64) {
    let mut sums: std::collections::BTreeMap<StateId, (f64, usize)> = Default::default();
    for (omega, r) in episodes.iter().zip(rewards) {
        let e = sums.entry(omega.start).or_default();
        e.0 += r.before_baseline();
        e.1 += 1;
    }
    for (s0, (sum, n)) in sums {
        baseline.update(s0, sum / n as f64, lr);
    }
}

/// Warm-up: trains inference, transition models and the baseline while the
/// policy stays frozen.
pub fn warmup_phase(bundle: &mut AgentBundle, world: &WorldSpec, cfg: &TrainConfig, rng: &mut Rng) -> Result<()> {
    for _ in 0..cfg.warmup_batches {
        train_batch(bundle, world, cfg, rng, false)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
