//! Exact ground truth by exhaustive enumeration on small worlds.
//!
//! Policies are tabular and keyed by the literal prefix
//! `(s_0, a_0, ..., s_t)`, so no two histories are ever aliased. Every
//! quantity is computed from the enumerated option distribution; the oracle
//! refuses worlds whose option count exceeds a cap instead of
//! approximating.

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::envs::{Action, StateId, Trajectory, WorldSpec};
use crate::error::{Error, Result};
use crate::models::{ActionModel, TransitionModel};
use crate::rng::Rng;
use crate::tensor::log_sum_exp;

/// Default cap on the number of enumerated options.
pub const DEFAULT_CAP: usize = 1_000_000;

/// Token sequence `s_0, a_0, s_1, ...` with actions as world indices.
pub type PrefixKey = Vec<u32>;

/// Full token sequence of a trajectory. The prefix `tau_t` is the first
/// `2t + 1` tokens; `tau_t` followed by `a_t` is the first `2t + 2`.
pub fn tokens(world: &WorldSpec, traj: &Trajectory) -> PrefixKey {
    let mut k = Vec::with_capacity(2 * traj.steps.len() + 1);
    k.push(traj.start.0 as u32);
    for &(a, s) in &traj.steps {
        k.push(world.action_index(a) as u32);
        k.push(s.0 as u32);
    }
    k
}

/// Masked log-softmax; entries outside `mask` are `-inf`.
fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let lse = log_sum_exp(
        logits
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&l, _)| l),
    );
    if !lse.is_finite() {
        return Err(Error::EmptyLegalSet);
    }
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l - lse } else { f64::NEG_INFINITY })
        .collect())
}

/// A policy given by logits per literal prefix. Missing prefixes are
/// uniform over the legal actions; `-inf` logits forbid an action.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TabularPolicy {
    pub logits: HashMap<PrefixKey, Vec<f64>>,
}

impl TabularPolicy {
    pub fn uniform() -> Self {
        Self::default()
    }

    /// Log-probabilities over all action indices at prefix `key`.
    pub fn log_probs(&self, world: &WorldSpec, key: &[u32], mask: &[bool]) -> Result<Vec<f64>> {
        match self.logits.get(key) {
            Some(l) if l.len() == mask.len() => masked_log_softmax(l, mask),
            Some(l) => Err(Error::Shape(format!(
                "policy entry has {} logits, world has {} actions",
                l.len(),
                world.n_actions()
            ))),
            None => masked_log_softmax(&vec![0.0; mask.len()], mask),
        }
    }

    /// Gaussian logits with standard deviation `std` at every prefix
    /// reachable from `start`.
    pub fn random(world: &WorldSpec, start: StateId, rng: &mut Rng, std: f64, cap: usize) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut logits = HashMap::new();
        for (key, _, _) in all_prefixes(world, start, cap)? {
            let l = (0..world.n_actions()).map(|_| normal.sample(rng)).collect();
            logits.insert(key, l);
        }
        Ok(Self { logits })
    }

    /// Tabulates any action model at every prefix reachable from `start`.
    pub fn from_model(world: &WorldSpec, start: StateId, model: &dyn ActionModel, cap: usize) -> Result<Self> {
        let mut logits = HashMap::new();
        for (key, s, _) in all_prefixes(world, start, cap)? {
            let mut traj = Trajectory::new(start);
            for pair in key[1..].chunks(2) {
                traj.steps.push((world.action_at(pair[0] as usize), StateId(pair[1] as usize)));
            }
            traj.steps.push((Action::Terminate, s));
            let rows = model.action_log_probs(world, &traj, None)?;
            let last = rows.last().cloned().ok_or(Error::Incomplete)?;
            logits.insert(key, last);
        }
        Ok(Self { logits })
    }

    /// Samples one option.
    pub fn sample_episode(&self, world: &WorldSpec, start: StateId, rng: &mut Rng) -> Result<Trajectory> {
        let mut traj = Trajectory::new(start);
        loop {
            let mask = world.legal_mask(&traj)?;
            let lp = self.log_probs(world, &tokens(world, &traj), &mask)?;
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = world.n_moves();
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc && mask[i] {
                    pick = i;
                    break;
                }
            }
            let (_, done) = world.step(rng, &mut traj, world.action_at(pick))?;
            if done {
                return Ok(traj);
            }
        }
    }

    /// Text form: one `tokens -> logits` line per prefix, actions by name,
    /// sorted for stable output.
    pub fn to_text(&self, world: &WorldSpec) -> String {
        let mut lines: Vec<String> = self
            .logits
            .iter()
            .map(|(k, l)| {
                let toks: Vec<String> = k
                    .iter()
                    .enumerate()
                    .map(|(i, &t)| {
                        if i % 2 == 0 {
                            t.to_string()
                        } else {
                            world.action_name(world.action_at(t as usize)).to_string()
                        }
                    })
                    .collect();
                let vals: Vec<String> = l.iter().map(|v| format!("{v:?}")).collect();
                format!("{} -> {}", toks.join(" "), vals.join(" "))
            })
            .collect();
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn from_text(world: &WorldSpec, text: &str) -> Result<Self> {
        let mut logits = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (lhs, rhs) = line.split_once("->").ok_or_else(|| err("expected `->`".into()))?;
            let mut key = Vec::new();
            for (j, tok) in lhs.split_whitespace().enumerate() {
                let v = if j % 2 == 0 {
                    let s: usize = tok.parse().map_err(|_| err(format!("bad state `{tok}`")))?;
                    if s >= world.n_states() {
                        return Err(err(format!("state {s} out of range")));
                    }
                    s
                } else {
                    let a = world.parse_action(tok).ok_or_else(|| err(format!("unknown action `{tok}`")))?;
                    world.action_index(a)
                };
                key.push(v as u32);
            }
            if key.len() % 2 == 0 {
                return Err(err("prefix must end with a state".into()));
            }
            let vals = rhs
                .split_whitespace()
                .map(|v| match v {
                    "-inf" => Ok(f64::NEG_INFINITY),
                    _ => v.parse::<f64>().map_err(|_| err(format!("bad logit `{v}`"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != world.n_actions() {
                return Err(err(format!("expected {} logits, got {}", world.n_actions(), vals.len())));
            }
            logits.insert(key, vals);
        }
        Ok(Self { logits })
    }
}

impl ActionModel for TabularPolicy {
    fn action_log_probs(&self, world: &WorldSpec, traj: &Trajectory, _s_f: Option<StateId>) -> Result<Vec<Vec<f64>>> {
        let toks = tokens(world, traj);
        let mut steps_taken = 0;
        let mut out = Vec::with_capacity(traj.steps.len());
        for t in 0..traj.steps.len() {
            let mask = world.mask_at(traj.state_at(t), steps_taken);
            out.push(self.log_probs(world, &toks[..2 * t + 1], &mask)?);
            if traj.steps[t].0 != Action::Terminate {
                steps_taken += 1;
            }
        }
        Ok(out)
    }
}

/// Every decision prefix reachable from `start` under any policy, with the
/// current state and the number of movement steps taken.
pub fn all_prefixes(world: &WorldSpec, start: StateId, cap: usize) -> Result<Vec<(PrefixKey, StateId, usize)>> {
    let mut out = Vec::new();
    let mut stack = vec![(vec![start.0 as u32], start, 0usize)];
    while let Some((key, s, n)) = stack.pop() {
        if out.len() >= cap {
            return Err(Error::CapExceeded(cap));
        }
        let mask = world.mask_at(s, n);
        for (m, legal) in mask.iter().enumerate().take(world.n_moves()) {
            if !legal {
                continue;
            }
            for &(next, _) in world.table.row(s, m).expect("legal move has a row") {
                let mut k = key.clone();
                k.extend([m as u32, next.0 as u32]);
                stack.push((k, next, n + 1));
            }
        }
        out.push((key, s, n));
    }
    Ok(out)
}

/// All options of `policy` from `start` with positive probability.
pub fn enumerate_options(world: &WorldSpec, start: StateId, policy: &TabularPolicy, cap: usize) -> Result<Vec<(Trajectory, f64)>> {
    let mut out = Vec::new();
    let mut stack = vec![(Trajectory::new(start), 1.0f64)];
    while let Some((traj, p)) = stack.pop() {
        let mask = world.legal_mask(&traj)?;
        let lp = policy.log_probs(world, &tokens(world, &traj), &mask)?;
        let s = traj.current();
        for (i, l) in lp.iter().enumerate().rev() {
            let pa = l.exp();
            if pa <= 0.0 {
                continue;
            }
            match world.action_at(i) {
                Action::Terminate => {
                    if out.len() >= cap {
                        return Err(Error::CapExceeded(cap));
                    }
                    let mut done = traj.clone();
                    done.steps.push((Action::Terminate, s));
                    out.push((done, p * pa));
                }
                Action::Move(m) => {
                    for &(next, q) in world.table.row(s, m).expect("legal move has a row") {
                        let mut t = traj.clone();
                        t.steps.push((Action::Move(m), next));
                        stack.push((t, p * pa * q));
                    }
                }
            }
        }
    }
    out.sort_by(|a, b| tokens(world, &a.0).cmp(&tokens(world, &b.0)));
    Ok(out)
}

/// Shannon entropy in nats; zero entries contribute nothing.
pub fn entropy(probs: impl IntoIterator<Item = f64>) -> f64 {
    probs.into_iter().filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

/// Exact analysis of one tabular policy from one start state.
#[derive(Debug, Clone)]
pub struct ExactAnalysis {
    pub start: StateId,
    pub policy: TabularPolicy,
    pub options: Vec<(Trajectory, f64)>,
    pub final_marginal: BTreeMap<StateId, f64>,
    /// `I(Omega; s_f | s_0)`, equal to `h_sf` for implicit options.
    pub mi: f64,
    pub h_sf: f64,
    /// Probability mass of completions per prefix, split by final state.
    masses: HashMap<PrefixKey, BTreeMap<u32, f64>>,
}

impl ExactAnalysis {
    pub fn new(world: &WorldSpec, start: StateId, policy: &TabularPolicy, cap: usize) -> Result<Self> {
        let options = enumerate_options(world, start, policy, cap)?;
        let mut final_marginal = BTreeMap::new();
        let mut masses: HashMap<PrefixKey, BTreeMap<u32, f64>> = HashMap::new();
        for (traj, p) in &options {
            let sf = traj.current();
            *final_marginal.entry(sf).or_insert(0.0) += p;
            let toks = tokens(world, traj);
            for len in 1..=toks.len() {
                *masses
                    .entry(toks[..len].to_vec())
                    .or_default()
                    .entry(sf.0 as u32)
                    .or_insert(0.0) += p;
            }
        }
        let h_sf = entropy(final_marginal.values().copied());
        Ok(Self {
            start,
            policy: policy.clone(),
            options,
            final_marginal,
            mi: h_sf,
            h_sf,
            masses,
        })
    }

    pub fn total_probability(&self) -> f64 {
        self.options.iter().map(|o| o.1).sum()
    }

    /// Mass of options extending `key`, optionally restricted to final
    /// state `s_f`.
    pub fn mass(&self, key: &[u32], s_f: Option<StateId>) -> f64 {
        self.masses.get(key).map_or(0.0, |m| match s_f {
            None => m.values().sum(),
            Some(f) => m.get(&(f.0 as u32)).copied().unwrap_or(0.0),
        })
    }

    /// `p(a | tau, s_f)` by Bayes' rule over completions.
    pub fn posterior_action(&self, tau: &[u32], action: usize, s_f: StateId) -> Result<f64> {
        let den = self.mass(tau, Some(s_f));
        if den <= 0.0 {
            return Err(Error::ZeroProbability);
        }
        let mut k = tau.to_vec();
        k.push(action as u32);
        Ok(self.mass(&k, Some(s_f)) / den)
    }

    /// `p(s' | tau, a, s_f)` by Bayes' rule over completions.
    pub fn posterior_trans(&self, tau: &[u32], action: usize, next: StateId, s_f: StateId) -> Result<f64> {
        let mut k = tau.to_vec();
        k.push(action as u32);
        let den = self.mass(&k, Some(s_f));
        if den <= 0.0 {
            return Err(Error::ZeroProbability);
        }
        k.push(next.0 as u32);
        Ok(self.mass(&k, Some(s_f)) / den)
    }

    fn option_index(&self, world: &WorldSpec, omega: &Trajectory) -> Result<usize> {
        let key = tokens(world, omega);
        self.options
            .binary_search_by(|o| tokens(world, &o.0).cmp(&key))
            .map_err(|_| Error::ZeroProbability)
    }

    /// Probability of a complete option, zero if it is not in the support.
    pub fn option_probability(&self, world: &WorldSpec, omega: &Trajectory) -> f64 {
        self.option_index(world, omega).map_or(0.0, |i| self.options[i].1)
    }

    /// Variational bias of one option: the summed log-ratio of posterior
    /// to prior transition probabilities over its movement steps.
    pub fn bias(&self, world: &WorldSpec, omega: &Trajectory) -> Result<f64> {
        self.option_index(world, omega)?;
        let toks = tokens(world, omega);
        let sf = omega.current();
        let mut b = 0.0;
        for (t, &(a, next)) in omega.steps.iter().enumerate() {
            if let Action::Move(m) = a {
                let post = self.posterior_trans(&toks[..2 * t + 1], m, next, sf)?;
                let prior = world.table.prob(omega.state_at(t), m, next);
                b += (post / prior).ln();
            }
        }
        Ok(b)
    }

    /// `sum_t log p(a_t | tau_t, s_f) - log pi(a_t | tau_t)` with the exact
    /// action posterior, including the termination step.
    pub fn exact_vb_reward(&self, world: &WorldSpec, omega: &Trajectory) -> Result<f64> {
        let toks = tokens(world, omega);
        let sf = omega.current();
        let lp = self.policy.action_log_probs(world, omega, None)?;
        let mut r = 0.0;
        for (t, &(a, _)) in omega.steps.iter().enumerate() {
            let ai = world.action_index(a);
            r += self.posterior_action(&toks[..2 * t + 1], ai, sf)?.ln() - lp[t][ai];
        }
        Ok(r)
    }

    /// `r^I = log p(Omega | s_f) - log p(Omega) = -log p(s_f)`.
    pub fn exact_reward(&self, omega: &Trajectory) -> Result<f64> {
        let p = self.final_marginal.get(&omega.current()).copied().unwrap_or(0.0);
        if p <= 0.0 {
            return Err(Error::ZeroProbability);
        }
        Ok(-p.ln())
    }

    /// Mutual information as the expectation of the per-step log-ratios of
    /// exact posteriors to priors.
    pub fn mi_from_posteriors(&self, world: &WorldSpec) -> Result<f64> {
        let mut total = 0.0;
        for (omega, p) in &self.options {
            total += p * (self.exact_vb_reward(world, omega)? + self.bias(world, omega)?);
        }
        Ok(total)
    }

    /// `I^VE` and its error bound `U^VE` for inference model `q_action`,
    /// posterior transition model `q_trans` and prior transition model
    /// `p_trans`, with this analysis' policy as the true `pi^p`.
    pub fn ive_and_uve(
        &self,
        world: &WorldSpec,
        q_action: &dyn ActionModel,
        q_trans: &dyn TransitionModel,
        p_trans: &dyn TransitionModel,
    ) -> Result<(f64, f64)> {
        let (mut ive, mut kl_post, mut kl_prior) = (0.0, 0.0, 0.0);
        for (omega, p) in &self.options {
            let sf = omega.current();
            let pi = self.policy.action_log_probs(world, omega, None)?;
            let qa = q_action.action_log_probs(world, omega, Some(sf))?;
            let qt = q_trans.transition_log_probs(world, omega, Some(sf))?;
            let pt = p_trans.transition_log_probs(world, omega, None)?;
            let mut log_q = qt.iter().sum::<f64>();
            let mut log_m = pt.iter().sum::<f64>();
            for (t, &(a, _)) in omega.steps.iter().enumerate() {
                let ai = world.action_index(a);
                log_q += qa[t][ai];
                log_m += pi[t][ai];
            }
            let log_p = p.ln();
            let log_p_cond = log_p - self.final_marginal[&sf].ln();
            ive += p * (log_q - log_m);
            kl_post += p * (log_p_cond - log_q);
            kl_prior += p * (log_p - log_m);
        }
        Ok((ive, kl_post + kl_prior))
    }

    /// The smoothed-estimate error bounds: `U_sigma_1` for the density
    /// models `f_q`, `f_p`, and `U_sigma_2` for the inference model.
    pub fn uve_sigma(
        &self,
        world: &WorldSpec,
        q_action: &dyn ActionModel,
        f_q: &dyn TransitionModel,
        f_p: &dyn TransitionModel,
    ) -> Result<(f64, f64)> {
        let (mut u1, mut u2) = (0.0, 0.0);
        for (omega, p) in &self.options {
            let sf = omega.current();
            let toks = tokens(world, omega);
            let qa = q_action.action_log_probs(world, omega, Some(sf))?;
            let fq = f_q.transition_log_probs(world, omega, Some(sf))?;
            let fp = f_p.transition_log_probs(world, omega, None)?;
            let mut ratio = fp.iter().sum::<f64>() - fq.iter().sum::<f64>();
            let mut log_post_pi = 0.0;
            let mut log_q = 0.0;
            for (t, &(a, next)) in omega.steps.iter().enumerate() {
                let ai = world.action_index(a);
                log_post_pi += self.posterior_action(&toks[..2 * t + 1], ai, sf)?.ln();
                log_q += qa[t][ai];
                if let Action::Move(m) = a {
                    let post = self.posterior_trans(&toks[..2 * t + 1], m, next, sf)?;
                    ratio += (post / world.table.prob(omega.state_at(t), m, next)).ln();
                }
            }
            u1 += p * ratio;
            u2 += p * (log_post_pi - log_q);
        }
        Ok((u1.abs(), u2))
    }

    /// Exact smoothed transition densities for this policy.
    pub fn smoothed(&self, sigma: f64) -> Result<SmoothedDensities<'_>> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
        }
        Ok(SmoothedDensities { analysis: self, sigma })
    }

    /// Computes `I - I_sigma` exactly and checks it against the envelope
    /// `-(T/p_min_f) e^{-d^2/2s^2} <= I - I_sigma <= (T/p_min) e^{-d^2/2s^2}`
    /// with `T` both the mean and the maximum option length.
    pub fn smoothing_bound_check(&self, world: &WorldSpec, sigma: f64) -> Result<SmoothingReport> {
        let dens = self.smoothed(sigma)?;
        let (mut diff, mut t_bar, mut t_max) = (0.0, 0.0, 0usize);
        let (mut p_min, mut p_min_f) = (1.0f64, 1.0f64);
        for (omega, p) in &self.options {
            let sf = omega.current();
            let toks = tokens(world, omega);
            let steps = omega.env_steps();
            t_bar += p * steps as f64;
            t_max = t_max.max(steps);
            for (t, &(a, next)) in omega.steps.iter().enumerate() {
                let Action::Move(m) = a else { continue };
                let tau = &toks[..2 * t + 1];
                let s = omega.state_at(t);
                let prior = world.table.prob(s, m, next);
                let post = self.posterior_trans(tau, m, next, sf)?;
                p_min = p_min.min(prior);
                p_min_f = p_min_f.min(post);
                let excess_prior = dens.log_excess(world, tau, s, m, next, None)?;
                let excess_post = dens.log_excess(world, tau, s, m, next, Some(sf))?;
                diff += p * (excess_prior - excess_post);
            }
        }
        let d_min = world.min_distance();
        let eps = (-d_min * d_min / (2.0 * sigma * sigma)).exp();
        let lower_mean = -t_bar / p_min_f * eps;
        let upper_mean = t_bar / p_min * eps;
        let lower_max = -(t_max as f64) / p_min_f * eps;
        let upper_max = t_max as f64 / p_min * eps;
        Ok(SmoothingReport {
            sigma,
            difference: diff,
            lower_mean,
            upper_mean,
            lower_max,
            upper_max,
            t_bar,
            t_max,
            p_min,
            p_min_f,
            d_min,
            holds_mean: lower_mean <= diff && diff <= upper_mean,
            holds_max: lower_max <= diff && diff <= upper_max,
        })
    }

    /// Exact score-function gradient of the mutual information with
    /// respect to every policy logit at every decision prefix.
    pub fn score_function_gradient(&self, world: &WorldSpec) -> Result<BTreeMap<(PrefixKey, usize), f64>> {
        let mut grad = BTreeMap::new();
        for (key, s, n) in self.decision_prefixes(world) {
            let mask = world.mask_at(s, n);
            for (a, &legal) in mask.iter().enumerate() {
                if legal {
                    grad.insert((key.clone(), a), 0.0);
                }
            }
        }
        for (omega, p) in &self.options {
            let r = self.exact_reward(omega)?;
            let toks = tokens(world, omega);
            let lp = self.policy.action_log_probs(world, omega, None)?;
            for (t, &(a, _)) in omega.steps.iter().enumerate() {
                let tau = &toks[..2 * t + 1];
                let taken = world.action_index(a);
                for (b, l) in lp[t].iter().enumerate() {
                    if let Some(g) = grad.get_mut(&(tau.to_vec(), b)) {
                        *g += p * r * (f64::from(b == taken) - l.exp());
                    }
                }
            }
        }
        Ok(grad)
    }

    /// Prefixes at which the policy decides, with state and steps taken.
    fn decision_prefixes(&self, world: &WorldSpec) -> Vec<(PrefixKey, StateId, usize)> {
        let mut seen = BTreeMap::new();
        for (omega, _) in &self.options {
            let toks = tokens(world, omega);
            let mut n = 0;
            for t in 0..omega.steps.len() {
                seen.entry(toks[..2 * t + 1].to_vec()).or_insert((omega.state_at(t), n));
                if omega.steps[t].0 != Action::Terminate {
                    n += 1;
                }
            }
        }
        seen.into_iter().map(|(k, (s, n))| (k, s, n)).collect()
    }

    /// JSON-serializable summary.
    pub fn report(&self, world: &WorldSpec, sigma: f64) -> Result<AuditReport> {
        let mut options = Vec::with_capacity(self.options.len());
        let mut mean_bias = 0.0;
        for (omega, p) in &self.options {
            let bias = self.bias(world, omega)?;
            mean_bias += p * bias;
            options.push(OptionRecord {
                trace: format_trace(world, omega),
                probability: *p,
                bias,
            });
        }
        let uniform = TabularPolicy::uniform();
        let flat = UniformTransitions;
        let (ive_uniform, uve_uniform) = self.ive_and_uve(world, &uniform, &flat, &flat)?;
        Ok(AuditReport {
            world: world.name.clone(),
            start: self.start.0,
            n_options: self.options.len(),
            total_probability: self.total_probability(),
            mi: self.mi,
            h_sf: self.h_sf,
            mi_from_posteriors: self.mi_from_posteriors(world)?,
            mean_bias,
            final_marginal: self.final_marginal.iter().map(|(s, p)| (s.0, *p)).collect(),
            ive_uniform_models: ive_uniform,
            uve_uniform_models: uve_uniform,
            smoothing: self.smoothing_bound_check(world, sigma)?,
            options,
        })
    }
}

/// Human-readable form `s0 action s1 ... terminate sf`.
pub fn format_trace(world: &WorldSpec, omega: &Trajectory) -> String {
    let mut s = omega.start.to_string();
    for &(a, next) in &omega.steps {
        s.push(' ');
        s.push_str(world.action_name(a));
        s.push(' ');
        s.push_str(&next.to_string());
    }
    s
}

/// Uniform categorical over all states, the zero-information model.
struct UniformTransitions;

impl TransitionModel for UniformTransitions {
    fn transition_log_probs(&self, world: &WorldSpec, traj: &Trajectory, _s_f: Option<StateId>) -> Result<Vec<f64>> {
        Ok(vec![-(world.n_states() as f64).ln(); traj.env_steps()])
    }
}

/// Evaluator for the exact Gaussian-smoothed transition densities.
pub struct SmoothedDensities<'a> {
    analysis: &'a ExactAnalysis,
    sigma: f64,
}

impl SmoothedDensities<'_> {
    /// Density at absolute point `x` of the next state after move `m` from
    /// state `s` at prefix `tau`, conditioned on `s_f` when given.
    pub fn density(&self, world: &WorldSpec, tau: &[u32], s: StateId, m: usize, x: &[f64], s_f: Option<StateId>) -> Result<f64> {
        let row = world
            .table
            .row(s, m)
            .ok_or_else(|| Error::InvalidArgument(format!("no move {m} in state {s}")))?;
        let mut total = 0.0;
        for &(next, prior) in row {
            let w = match s_f {
                None => prior,
                Some(f) => self.analysis.posterior_trans(tau, m, next, f)?,
            };
            if w > 0.0 {
                total += w * gaussian_density(x, world.coord(next), self.sigma);
            }
        }
        Ok(total)
    }

    /// `ln(f(next) / (w(next) N(0; 0, sigma^2 I)))` at the realized next
    /// state, computed as `ln_1p` of the kernel-weighted mass of the other
    /// atoms. `log(p_f / p) - log(f_f / f)` equals the prior excess minus
    /// the posterior excess, and this form keeps full relative precision
    /// when the kernels are tiny.
    pub fn log_excess(&self, world: &WorldSpec, tau: &[u32], s: StateId, m: usize, next: StateId, s_f: Option<StateId>) -> Result<f64> {
        let row = world
            .table
            .row(s, m)
            .ok_or_else(|| Error::InvalidArgument(format!("no move {m} in state {s}")))?;
        let weight = |t: StateId| match s_f {
            None => Ok(world.table.prob(s, m, t)),
            Some(f) => self.analysis.posterior_trans(tau, m, t, f),
        };
        let own = weight(next)?;
        if own <= 0.0 {
            return Err(Error::ZeroProbability);
        }
        let at = world.coord(next);
        let mut other = 0.0;
        for &(t, _) in row {
            if t == next {
                continue;
            }
            let d2: f64 = world.coord(t).iter().zip(at).map(|(&a, &b)| f64::from(a - b).powi(2)).sum();
            other += weight(t)? * (-d2 / (2.0 * self.sigma * self.sigma)).exp();
        }
        Ok((other / own).ln_1p())
    }
}

/// Isotropic normal density `N(x; c, sigma^2 I)`.
pub fn gaussian_density(x: &[f64], c: &[i32], sigma: f64) -> f64 {
    let d2: f64 = x.iter().zip(c).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum();
    let dim = x.len() as f64;
    (-d2 / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).powf(dim / 2.0)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SmoothingReport {
    pub sigma: f64,
    /// Exact `I - I_sigma`.
    pub difference: f64,
    pub lower_mean: f64,
    pub upper_mean: f64,
    pub lower_max: f64,
    pub upper_max: f64,
    pub t_bar: f64,
    pub t_max: usize,
    /// Smallest nonzero prior transition probability on the support.
    pub p_min: f64,
    /// Smallest nonzero posterior transition probability on the support.
    pub p_min_f: f64,
    pub d_min: f64,
    pub holds_mean: bool,
    pub holds_max: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptionRecord {
    pub trace: String,
    pub probability: f64,
    pub bias: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub world: String,
    pub start: usize,
    pub n_options: usize,
    pub total_probability: f64,
    pub mi: f64,
    pub h_sf: f64,
    pub mi_from_posteriors: f64,
    pub mean_bias: f64,
    pub final_marginal: Vec<(usize, f64)>,
    /// `I^VE` and `U^VE` with uniform inference and transition models.
    pub ive_uniform_models: f64,
    pub uve_uniform_models: f64,
    pub smoothing: SmoothingReport,
    pub options: Vec<OptionRecord>,
}

/// Central finite differences of the exact mutual information with
/// respect to every policy logit that the score-function gradient covers.
pub fn finite_difference_policy_grad(
    world: &WorldSpec,
    start: StateId,
    policy: &TabularPolicy,
    h: f64,
    cap: usize,
) -> Result<BTreeMap<(PrefixKey, usize), f64>> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let base = ExactAnalysis::new(world, start, policy, cap)?;
    let mut out = BTreeMap::new();
    for (key, s, n) in base.decision_prefixes(world) {
        let mask = world.mask_at(s, n);
        let logits = policy.logits.get(&key).cloned().unwrap_or_else(|| vec![0.0; world.n_actions()]);
        for (a, &legal) in mask.iter().enumerate() {
            if !legal {
                continue;
            }
            let eval = |delta: f64| -> Result<f64> {
                let mut p = policy.clone();
                let mut l = logits.clone();
                l[a] += delta;
                p.logits.insert(key.clone(), l);
                Ok(ExactAnalysis::new(world, start, &p, cap)?.mi)
            };
            out.insert((key.clone(), a), (eval(h)? - eval(-h)?) / (2.0 * h));
        }
    }
    Ok(out)
}

/// Tabular inference or transition model with explicit logits, used as an
/// arbitrary model bundle in bound checks.
#[derive(Debug, Clone, Default)]
pub struct TabularModel {
    /// Keyed by (prefix, final state); unconditioned entries use `None`.
    pub logits: HashMap<(PrefixKey, Option<u32>), Vec<f64>>,
}

impl TabularModel {
    /// Logits `ln(max(p, 1e-3)) + N(0, noise^2)` around the exact
    /// distributions of `analysis`. With `noise = 0` and `floor = 0` the
    /// model is exact on the support. Kinds: inference actions when
    /// `actions`, else transitions; conditioned when `conditioned`.
    pub fn perturbed(
        world: &WorldSpec,
        analysis: &ExactAnalysis,
        actions: bool,
        conditioned: bool,
        noise: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let jitter = |rng: &mut Rng| if noise > 0.0 { normal.sample(rng) } else { 0.0 };
        let mut logits = HashMap::new();
        let log_floor = |p: f64| if noise > 0.0 { p.max(1e-3).ln() } else { p.ln() };
        for (omega, _) in &analysis.options {
            let sf = omega.current();
            let cond = conditioned.then_some(sf.0 as u32);
            let toks = tokens(world, omega);
            let pi = analysis.policy.action_log_probs(world, omega, None)?;
            for (t, &(a, _)) in omega.steps.iter().enumerate() {
                let tau = &toks[..2 * t + 1];
                if actions {
                    let key = (tau.to_vec(), cond);
                    if logits.contains_key(&key) {
                        continue;
                    }
                    let mut l = Vec::with_capacity(world.n_actions());
                    for (b, lp) in pi[t].iter().enumerate() {
                        let p = match conditioned {
                            true => analysis.posterior_action(tau, b, sf)?,
                            false => lp.exp(),
                        };
                        l.push(log_floor(p) + jitter(rng));
                    }
                    logits.insert(key, l);
                } else if let Action::Move(m) = a {
                    let mut k = tau.to_vec();
                    k.push(m as u32);
                    let key = (k, cond);
                    if logits.contains_key(&key) {
                        continue;
                    }
                    let s = omega.state_at(t);
                    let mut l = Vec::with_capacity(world.n_states());
                    for next in 0..world.n_states() {
                        let next = StateId(next);
                        let p = match conditioned {
                            true if world.table.prob(s, m, next) > 0.0 => analysis.posterior_trans(tau, m, next, sf)?,
                            true => 0.0,
                            false => world.table.prob(s, m, next),
                        };
                        l.push(log_floor(p) + jitter(rng));
                    }
                    logits.insert(key, l);
                }
            }
        }
        Ok(Self { logits })
    }

    fn lookup(&self, key: &[u32], s_f: Option<StateId>, len: usize) -> Vec<f64> {
        let k = (key.to_vec(), s_f.map(|f| f.0 as u32));
        self.logits
            .get(&k)
            .or_else(|| self.logits.get(&(key.to_vec(), None)))
            .cloned()
            .unwrap_or_else(|| vec![0.0; len])
    }
}

impl ActionModel for TabularModel {
    fn action_log_probs(&self, world: &WorldSpec, traj: &Trajectory, s_f: Option<StateId>) -> Result<Vec<Vec<f64>>> {
        let toks = tokens(world, traj);
        let mut steps_taken = 0;
        let mut out = Vec::new();
        for t in 0..traj.steps.len() {
            let mask = world.mask_at(traj.state_at(t), steps_taken);
            let l = self.lookup(&toks[..2 * t + 1], s_f, world.n_actions());
            out.push(masked_log_softmax(&l, &mask)?);
            if traj.steps[t].0 != Action::Terminate {
                steps_taken += 1;
            }
        }
        Ok(out)
    }
}

impl TransitionModel for TabularModel {
    fn transition_log_probs(&self, world: &WorldSpec, traj: &Trajectory, s_f: Option<StateId>) -> Result<Vec<f64>> {
        let toks = tokens(world, traj);
        let all = vec![true; world.n_states()];
        let mut out = Vec::new();
        for (t, &(a, next)) in traj.steps.iter().enumerate() {
            if a == Action::Terminate {
                continue;
            }
            let l = self.lookup(&toks[..2 * t + 2], s_f, world.n_states());
            out.push(masked_log_softmax(&l, &all)?[next.0]);
        }
        Ok(out)
    }
}

/// Monte Carlo estimate of `KL(f || g)` from `n` samples of `f`, with its
/// standard error.
pub fn monte_carlo_kl(
    n: usize,
    rng: &mut Rng,
    mut sample_f: impl FnMut(&mut Rng) -> Vec<f64>,
    log_f: impl Fn(&[f64]) -> f64,
    log_g: impl Fn(&[f64]) -> f64,
) -> (f64, f64) {
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..n {
        let x = sample_f(rng);
        let d = log_f(&x) - log_g(&x);
        sum += d;
        sum2 += d * d;
    }
    let mean = sum / n as f64;
    let var = (sum2 / n as f64 - mean * mean).max(0.0);
    (mean, (var / n as f64).sqrt())
}
