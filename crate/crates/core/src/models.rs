//! Learned components of an agent.
//!
//! Every head owns its own recurrent encoder over the trajectory prefix
//! `tau_t = (s_0, a_0, ..., s_t)`. Step inputs are one-hot (current state,
//! previous action with a null token at `t = 0`, and the final state for
//! conditioned heads), realized as row gathers from one embedding table.
//!
//! Heads expose two interfaces. Training code records graph nodes through
//! the `*_nodes` methods so that one forward pass serves both the reward and
//! the gradient. Evaluation code uses the [`ActionModel`] and
//! [`TransitionModel`] traits, which the oracle also implements with exact
//! tables.

use rand_distr::{Distribution, Normal};

use crate::envs::{Action, StateId, Trajectory, WorldSpec};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{lstm_cell, Graph, LstmParams, NodeId, ParamId, ParamStore};

/// Log-probabilities of the action taken at every decision of a trajectory.
pub trait ActionModel {
    /// One log-probability vector over all action indices per step of
    /// `traj` (illegal actions are `-inf`).
    fn action_log_probs(&self, world: &WorldSpec, traj: &Trajectory, s_f: Option<StateId>) -> Result<Vec<Vec<f64>>>;
}

/// Log-probability (or log-density) of every realized movement step.
pub trait TransitionModel {
    /// One value per non-terminal step of `traj`, in order.
    fn transition_log_probs(&self, world: &WorldSpec, traj: &Trajectory, s_f: Option<StateId>) -> Result<Vec<f64>>;
}

/// Recurrent state after consuming a prefix.
#[derive(Debug, Clone, Copy)]
pub struct EncState {
    pub h: NodeId,
    pub c: NodeId,
}

/// Embedding plus one LSTM layer.
#[derive(Debug, Clone)]
pub struct Encoder {
    embed: ParamId,
    lstm: LstmParams,
    n_states: usize,
    n_actions: usize,
    conditioned: bool,
}

impl Encoder {
    fn register(store: &mut ParamStore, world: &WorldSpec, hidden: usize, conditioned: bool) -> Self {
        let n_states = world.n_states();
        let n_actions = world.n_actions();
        let rows = n_states + n_actions + 1 + if conditioned { n_states } else { 0 };
        Self {
            embed: store.add("embed", rows, 4 * hidden),
            lstm: LstmParams::register(store, "lstm", hidden),
            n_states,
            n_actions,
            conditioned,
        }
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden
    }

    pub fn start(&self, g: &mut Graph<'_>) -> EncState {
        EncState {
            h: g.zeros(self.hidden()),
            c: g.zeros(self.hidden()),
        }
    }

    /// Consumes `s_t` reached by action index `prev`.
    pub fn step(&self, g: &mut Graph<'_>, st: EncState, s: StateId, prev: Option<usize>, s_f: Option<StateId>) -> EncState {
        let state = g.gather(self.embed, s.0);
        let action = g.gather(self.embed, self.n_states + prev.unwrap_or(self.n_actions));
        let x = match (self.conditioned, s_f) {
            (true, Some(f)) => {
                let goal = g.gather(self.embed, self.n_states + self.n_actions + 1 + f.0);
                g.add_n(&[state, action, goal])
            }
            _ => g.add(state, action),
        };
        let (h, c) = lstm_cell(g, &self.lstm, x, st.h, st.c);
        EncState { h, c }
    }

    /// Hidden states for the prefixes `tau_0 .. tau_{n-1}` of `traj`.
    pub fn run(&self, g: &mut Graph<'_>, world: &WorldSpec, traj: &Trajectory, s_f: Option<StateId>, n: usize) -> Vec<NodeId> {
        let mut st = self.start(g);
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let prev = (t > 0).then(|| world.action_index(traj.steps[t - 1].0));
            st = self.step(g, st, traj.state_at(t), prev, s_f);
            out.push(st.h);
        }
        out
    }

    fn check_condition(&self, s_f: Option<StateId>) -> Result<()> {
        match (self.conditioned, s_f) {
            (true, None) => Err(Error::InvalidArgument("conditioned head needs a final state".into())),
            (true, Some(f)) if f.0 >= self.n_states => Err(Error::InvalidArgument(format!("final state {f} out of range"))),
            _ => Ok(()),
        }
    }
}

/// Indices of the movement steps of a trajectory, with their move and the
/// state reached.
fn movement_steps(traj: &Trajectory) -> impl Iterator<Item = (usize, usize, StateId)> + '_ {
    traj.steps.iter().enumerate().filter_map(|(t, &(a, s))| match a {
        Action::Move(m) => Some((t, m, s)),
        Action::Terminate => None,
    })
}

/// Policy `pi^p(a | tau)` or inference model `pi^q(a | tau, s_f)`.
#[derive(Debug, Clone)]
pub struct ActionHead {
    pub store: ParamStore,
    enc: Encoder,
    out_w: ParamId,
    out_b: ParamId,
}

impl ActionHead {
    pub fn new(world: &WorldSpec, hidden: usize, conditioned: bool, rng: &mut Rng, init_std: f64) -> Result<Self> {
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, world, hidden, conditioned);
        let out_w = store.add("out.w", world.n_actions(), hidden);
        let out_b = store.add("out.b", 1, world.n_actions());
        store.gaussian_init(rng, init_std)?;
        Ok(Self { store, enc, out_w, out_b })
    }

    pub fn encoder(&self) -> &Encoder {
        &self.enc
    }

    pub fn is_conditioned(&self) -> bool {
        self.enc.conditioned
    }

    /// Zeroes the output layer so every legal action is equally likely.
    pub fn zero_output(&mut self) {
        for id in [self.out_w, self.out_b] {
            self.store.get_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Masked log-softmax over actions from hidden state `h`.
    pub fn log_probs_node(&self, g: &mut Graph<'_>, h: NodeId, mask: &[bool]) -> Result<NodeId> {
        if !mask.iter().any(|&l| l) {
            return Err(Error::EmptyLegalSet);
        }
        let z = g.matvec(self.out_w, h);
        let b = g.param(self.out_b);
        let logits = g.add(z, b);
        Ok(g.log_softmax(logits, Some(mask)))
    }

    /// Log-probability vectors at every decision of a complete trajectory.
    pub fn trace_nodes(&self, g: &mut Graph<'_>, world: &WorldSpec, traj: &Trajectory, s_f: Option<StateId>) -> Result<Vec<NodeId>> {
        self.enc.check_condition(s_f)?;
        let n = traj.steps.len();
        let hs = self.enc.run(g, world, traj, s_f, n);
        let mut steps_taken = 0;
        let mut out = Vec::with_capacity(n);
        for (t, h) in hs.into_iter().enumerate() {
            let mask = world.mask_at(traj.state_at(t), steps_taken);
            out.push(self.log_probs_node(g, h, &mask)?);
            if traj.steps[t].0 != Action::Terminate {
                steps_taken += 1;
            }
        }
        Ok(out)
    }
}

impl ActionModel for ActionHead {
    fn action_log_probs(&self, world: &WorldSpec, traj: &Trajectory, s_f: Option<StateId>) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.store);
        let nodes = self.trace_nodes(&mut g, world, traj, s_f)?;
        g.check()?;
        Ok(nodes.iter().map(|&n| g.value(n).to_vec()).collect())
    }
}

/// Softmax transition model `rho^p(s' | tau, a)` or `rho^q(s' | tau, a, s_f)`
/// over the full state set, with one output layer per move.
#[derive(Debug, Clone)]
pub struct TransSoftmaxHead {
    pub store: ParamStore,
    enc: Encoder,
    out: Vec<(ParamId, ParamId)>,
}

impl TransSoftmaxHead {
    pub fn new(world: &WorldSpec, hidden: usize, conditioned: bool, rng: &mut Rng, init_std: f64) -> Result<Self> {
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, world, hidden, conditioned);
        let out = (0..world.n_moves())
            .map(|m| {
                let w = store.add(format!("out{m}.w"), world.n_states(), hidden);
                let b = store.add(format!("out{m}.b"), 1, world.n_states());
                (w, b)
            })
            .collect();
        store.gaussian_init(rng, init_std)?;
        Ok(Self { store, enc, out })
    }

    pub fn is_conditioned(&self) -> bool {
        self.enc.conditioned
    }

    pub fn zero_output(&mut self) {
        for &(w, b) in &self.out {
            for id in [w, b] {
                self.store.get_mut(id).values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Log-probabilities over next states after `action` from hidden `h`.
    pub fn log_probs_node(&self, g: &mut Graph<'_>, h: NodeId, action: Action) -> Result<NodeId> {
        let Action::Move(m) = action else {
            return Err(Error::InvalidArgument("termination transitions are not modeled".into()));
        };
        let (w, b) = self.out[m];
        let z = g.matvec(w, h);
        let bias = g.param(b);
        let logits = g.add(z, bias);
        Ok(g.log_softmax(logits, None))
    }

    /// `log rho(s_{t+1} | ...)` as scalar nodes, one per movement step.
    pub fn trace_nodes(&self, g: &mut Graph<'_>, world: &WorldSpec, traj: &Trajectory, s_f: Option<StateId>) -> Result<Vec<NodeId>> {
        self.enc.check_condition(s_f)?;
        let hs = self.enc.run(g, world, traj, s_f, traj.steps.len());
        movement_steps(traj)
            .map(|(t, m, next)| {
                let lp = self.log_probs_node(g, hs[t], Action::Move(m))?;
                Ok(g.pick(lp, next.0))
            })
            .collect()
    }
}

impl TransitionModel for TransSoftmaxHead {
    fn transition_log_probs(&self, world: &WorldSpec, traj: &Trajectory, s_f: Option<StateId>) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let nodes = self.trace_nodes(&mut g, world, traj, s_f)?;
        g.check()?;
        Ok(nodes.iter().map(|&n| g.scalar(n)).collect())
    }
}

#[derive(Debug, Clone, Copy)]
struct GmmOut {
    logit_w: ParamId,
    logit_b: ParamId,
    mean_w: ParamId,
    mean_b: ParamId,
}

/// Gaussian-mixture model of the smoothed displacement
/// `x_{t+1} - s_t` with `n_gmm` components and fixed isotropic `sigma`.
#[derive(Debug, Clone)]
pub struct GmmHead {
    pub store: ParamStore,
    enc: Encoder,
    out: Vec<GmmOut>,
    n_gmm: usize,
    dim: usize,
    sigma: f64,
}

impl GmmHead {
    pub fn new(
        world: &WorldSpec,
        hidden: usize,
        conditioned: bool,
        n_gmm: usize,
        sigma: f64,
        rng: &mut Rng,
        init_std: f64,
    ) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
        }
        if n_gmm == 0 {
            return Err(Error::Config("n_gmm must be at least 1".into()));
        }
        let dim = world.dim();
        let mut store = ParamStore::new();
        let enc = Encoder::register(&mut store, world, hidden, conditioned);
        let out = (0..world.n_moves())
            .map(|m| GmmOut {
                logit_w: store.add(format!("out{m}.logit_w"), n_gmm, hidden),
                logit_b: store.add(format!("out{m}.logit_b"), 1, n_gmm),
                mean_w: store.add(format!("out{m}.mean_w"), n_gmm * dim, hidden),
                mean_b: store.add(format!("out{m}.mean_b"), 1, n_gmm * dim),
            })
            .collect();
        store.gaussian_init(rng, init_std)?;
        Ok(Self { store, enc, out, n_gmm, dim, sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn n_gmm(&self) -> usize {
        self.n_gmm
    }

    pub fn is_conditioned(&self) -> bool {
        self.enc.conditioned
    }

    /// Mixture logits and means predicted after `action` from hidden `h`.
    fn mixture(&self, g: &mut Graph<'_>, h: NodeId, action: Action) -> Result<(NodeId, NodeId)> {
        let Action::Move(m) = action else {
            return Err(Error::InvalidArgument("termination transitions are not modeled".into()));
        };
        let o = self.out[m];
        let zl = g.matvec(o.logit_w, h);
        let bl = g.param(o.logit_b);
        let logits = g.add(zl, bl);
        let zm = g.matvec(o.mean_w, h);
        let bm = g.param(o.mean_b);
        let means = g.add(zm, bm);
        Ok((logits, means))
    }

    /// Summed log-density of `targets` (flattened displacements) under the
    /// mixture predicted after `action` from hidden `h`.
    pub fn log_density_node(&self, g: &mut Graph<'_>, h: NodeId, action: Action, targets: Vec<f64>) -> Result<NodeId> {
        if targets.len() % self.dim != 0 {
            return Err(Error::Shape(format!("gmm target length {} for dimension {}", targets.len(), self.dim)));
        }
        let (logits, means) = self.mixture(g, h, action)?;
        Ok(g.gmm_log_density(logits, means, targets, self.dim, self.sigma))
    }

    /// Per movement step, the log-density at the noise-free displacement
    /// and, when `noise = Some((rng, k))`, the mean log-density over `k`
    /// noisy copies `delta + z` with `z ~ N(0, sigma^2 I)`. Both share one
    /// encoder pass.
    pub fn trace_pairs(
        &self,
        g: &mut Graph<'_>,
        world: &WorldSpec,
        traj: &Trajectory,
        s_f: Option<StateId>,
        mut noise: Option<(&mut Rng, usize)>,
    ) -> Result<Vec<(NodeId, Option<NodeId>)>> {
        self.enc.check_condition(s_f)?;
        let hs = self.enc.run(g, world, traj, s_f, traj.steps.len());
        let normal = Normal::new(0.0, self.sigma).expect("sigma checked at construction");
        let mut out = Vec::new();
        for (t, m, next) in movement_steps(traj) {
            let delta = displacement(world, traj.state_at(t), next);
            let (logits, means) = self.mixture(g, hs[t], Action::Move(m))?;
            let noisy = match noise.as_mut() {
                None => None,
                Some((rng, k)) => {
                    let k = (*k).max(1);
                    let mut targets = Vec::with_capacity(k * self.dim);
                    for _ in 0..k {
                        targets.extend(delta.iter().map(|d| d + normal.sample(*rng)));
                    }
                    let total = g.gmm_log_density(logits, means, targets, self.dim, self.sigma);
                    Some(g.scale(total, 1.0 / k as f64))
                }
            };
            let clean = g.gmm_log_density(logits, means, delta, self.dim, self.sigma);
            out.push((clean, noisy));
        }
        Ok(out)
    }

    /// Log-density of displacement `x` for `action` taken at the end of `tau`.
    pub fn log_density_after(
        &self,
        world: &WorldSpec,
        tau: &Trajectory,
        s_f: Option<StateId>,
        action: Action,
        x: &[f64],
    ) -> Result<f64> {
        self.enc.check_condition(s_f)?;
        let mut g = Graph::new(&self.store);
        let hs = self.enc.run(&mut g, world, tau, s_f, tau.steps.len() + 1);
        let node = self.log_density_node(&mut g, hs[tau.steps.len()], action, x.to_vec())?;
        g.check()?;
        Ok(g.scalar(node))
    }
}

impl TransitionModel for GmmHead {
    fn transition_log_probs(&self, world: &WorldSpec, traj: &Trajectory, s_f: Option<StateId>) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let nodes = self.trace_pairs(&mut g, world, traj, s_f, None)?;
        g.check()?;
        Ok(nodes.iter().map(|&(n, _)| g.scalar(n)).collect())
    }
}

/// Coordinate difference `next - from` as reals.
pub fn displacement(world: &WorldSpec, from: StateId, next: StateId) -> Vec<f64> {
    world
        .coord(next)
        .iter()
        .zip(world.coord(from))
        .map(|(&b, &a)| f64::from(b - a))
        .collect()
}

/// Per-start-state scalar baseline `b(s_0)`, zero-initialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Baseline {
    pub values: Vec<f64>,
}

impl Baseline {
    pub fn new(n_states: usize) -> Self {
        Self { values: vec![0.0; n_states] }
    }

    pub fn value(&self, s0: StateId) -> f64 {
        self.values[s0.0]
    }

    /// One gradient step on `(b - target)^2 / 2`.
    pub fn update(&mut self, s0: StateId, target: f64, lr: f64) {
        let b = &mut self.values[s0.0];
        *b -= lr * (*b - target);
    }
}

#[cfg(test)]
mod tests;
