//! Finite grid worlds with a termination action.
//!
//! A world is a finite MDP over integer-embedded states. Every world has the
//! distinguished [`Action::Terminate`], which ends the option in place, and a
//! length cap `t_max` after which termination is the only legal action.

mod text;
mod worlds;

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub use worlds::{make_world, SizeOverrides, WorldName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateId(pub usize);

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    /// A movement action, indexing the world's `move_names`.
    Move(usize),
    Terminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoomKind {
    Normal,
    Special,
}

/// Categorical next-state distributions keyed by (state, move).
///
/// A missing row means the move is unavailable in that state. Termination
/// never has a row: it always leaves the agent where it is.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTable {
    n_moves: usize,
    rows: Vec<Option<Vec<(StateId, f64)>>>,
}

impl TransitionTable {
    pub fn new(n_states: usize, n_moves: usize) -> Self {
        Self {
            n_moves,
            rows: vec![None; n_states * n_moves],
        }
    }

    /// Sets a row, merging duplicate targets and dropping zero entries.
    pub fn set_row(&mut self, s: StateId, m: usize, entries: &[(StateId, f64)]) {
        let mut row: Vec<(StateId, f64)> = Vec::with_capacity(entries.len());
        for &(t, p) in entries {
            if p == 0.0 {
                continue;
            }
            match row.iter_mut().find(|(u, _)| *u == t) {
                Some(e) => e.1 += p,
                None => row.push((t, p)),
            }
        }
        row.sort_by_key(|e| e.0);
        self.rows[s.0 * self.n_moves + m] = Some(row);
    }

    pub fn row(&self, s: StateId, m: usize) -> Option<&[(StateId, f64)]> {
        self.rows
            .get(s.0 * self.n_moves + m)
            .and_then(|r| r.as_deref())
    }

    pub fn prob(&self, s: StateId, m: usize, next: StateId) -> f64 {
        self.row(s, m)
            .and_then(|r| r.iter().find(|e| e.0 == next).map(|e| e.1))
            .unwrap_or(0.0)
    }

    pub fn n_moves(&self) -> usize {
        self.n_moves
    }
}

/// An immutable finite world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub name: String,
    /// Integer embedding of every state; all vectors share one dimension.
    pub coords: Vec<Vec<i32>>,
    pub move_names: Vec<String>,
    pub table: TransitionTable,
    pub start_states: Vec<StateId>,
    pub t_max: usize,
    /// Room annotation per state; entering any room ends the option.
    pub rooms: Vec<Option<RoomKind>>,
    pub step_penalty: f64,
    pub normal_bonus: f64,
    pub special_bonus: f64,
}

impl WorldSpec {
    pub fn n_states(&self) -> usize {
        self.coords.len()
    }

    pub fn n_moves(&self) -> usize {
        self.move_names.len()
    }

    /// Number of actions including termination.
    pub fn n_actions(&self) -> usize {
        self.move_names.len() + 1
    }

    pub fn dim(&self) -> usize {
        self.coords.first().map_or(0, Vec::len)
    }

    pub fn action_index(&self, a: Action) -> usize {
        match a {
            Action::Move(m) => m,
            Action::Terminate => self.n_moves(),
        }
    }

    pub fn action_at(&self, index: usize) -> Action {
        if index == self.n_moves() {
            Action::Terminate
        } else {
            Action::Move(index)
        }
    }

    pub fn action_name(&self, a: Action) -> &str {
        match a {
            Action::Move(m) => &self.move_names[m],
            Action::Terminate => "terminate",
        }
    }

    pub fn parse_action(&self, name: &str) -> Option<Action> {
        if name == "terminate" {
            return Some(Action::Terminate);
        }
        self.move_names
            .iter()
            .position(|n| n == name)
            .map(Action::Move)
    }

    pub fn coord(&self, s: StateId) -> &[i32] {
        &self.coords[s.0]
    }

    pub fn state_at(&self, coord: &[i32]) -> Option<StateId> {
        self.coords.iter().position(|c| c == coord).map(StateId)
    }

    pub fn has_rooms(&self) -> bool {
        self.rooms.iter().any(Option::is_some)
    }

    pub fn room(&self, s: StateId) -> Option<RoomKind> {
        self.rooms.get(s.0).copied().flatten()
    }

    /// Legality mask over action indices (termination last).
    pub fn legal_mask(&self, traj: &Trajectory) -> Result<Vec<bool>> {
        if traj.is_complete() {
            return Err(Error::Terminated);
        }
        Ok(self.mask_at(traj.current(), traj.env_steps()))
    }

    /// Legality mask in state `s` after `steps_taken` movement steps.
    pub fn mask_at(&self, s: StateId, steps_taken: usize) -> Vec<bool> {
        let mut mask = vec![false; self.n_actions()];
        mask[self.n_moves()] = true;
        if steps_taken < self.t_max && self.room(s).is_none() {
            for (m, legal) in mask.iter_mut().take(self.n_moves()).enumerate() {
                *legal = self.table.row(s, m).is_some();
            }
        }
        mask
    }

    /// Actions available after `traj`.
    pub fn legal_actions(&self, traj: &Trajectory) -> Result<Vec<Action>> {
        Ok(self
            .legal_mask(traj)?
            .iter()
            .enumerate()
            .filter(|(_, &l)| l)
            .map(|(i, _)| self.action_at(i))
            .collect())
    }

    /// Applies `action`, samples the next state and appends it to `traj`.
    pub fn step(&self, rng: &mut Rng, traj: &mut Trajectory, action: Action) -> Result<(StateId, bool)> {
        let mask = self.legal_mask(traj)?;
        let s = traj.current();
        if !mask[self.action_index(action)] {
            return Err(Error::IllegalAction {
                state: s.0,
                action: self.action_name(action).to_string(),
            });
        }
        let next = match action {
            Action::Terminate => s,
            Action::Move(m) => {
                let row = self.table.row(s, m).expect("legal move has a row");
                sample_row(rng, row)
            }
        };
        traj.steps.push((action, next));
        Ok((next, action == Action::Terminate))
    }

    /// External score of a complete option; zero outside room worlds.
    pub fn external_reward(&self, omega: &Trajectory) -> Result<f64> {
        let sf = omega.final_state().ok_or(Error::Incomplete)?;
        if !self.has_rooms() {
            return Ok(0.0);
        }
        let mut r = -self.step_penalty * omega.env_steps() as f64;
        match self.room(sf) {
            Some(RoomKind::Normal) => r += self.normal_bonus,
            Some(RoomKind::Special) => r += self.special_bonus,
            None => {}
        }
        Ok(r)
    }

    /// States reachable with positive probability within `t_max` steps.
    pub fn reachable_final_states(&self, start: StateId) -> BTreeSet<StateId> {
        let mut seen = BTreeSet::from([start]);
        let mut frontier = vec![start];
        for _ in 0..self.t_max {
            let mut next = Vec::new();
            for &s in &frontier {
                if self.room(s).is_some() {
                    continue;
                }
                for m in 0..self.n_moves() {
                    for &(t, p) in self.table.row(s, m).unwrap_or(&[]) {
                        if p > 0.0 && seen.insert(t) {
                            next.push(t);
                        }
                    }
                }
            }
            frontier = next;
        }
        seen
    }

    /// Minimum Euclidean distance between distinct state coordinates.
    pub fn min_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.coords.iter().enumerate() {
            for b in &self.coords[i + 1..] {
                let d2: i64 = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| ((x - y) as i64).pow(2))
                    .sum();
                best = best.min((d2 as f64).sqrt());
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if n == 0 {
            return Err(Error::InvalidWorld("no states".into()));
        }
        let d = self.dim();
        if self.coords.iter().any(|c| c.len() != d) {
            return Err(Error::InvalidWorld("coordinate dimensions differ".into()));
        }
        let distinct: BTreeSet<&Vec<i32>> = self.coords.iter().collect();
        if distinct.len() != n {
            return Err(Error::InvalidWorld("duplicate coordinates".into()));
        }
        if self.t_max == 0 {
            return Err(Error::InvalidWorld("t_max must be at least 1".into()));
        }
        if self.start_states.is_empty() || self.start_states.iter().any(|s| s.0 >= n) {
            return Err(Error::InvalidWorld("invalid start states".into()));
        }
        if self.rooms.len() != n {
            return Err(Error::InvalidWorld("room annotations do not cover states".into()));
        }
        for s in 0..n {
            for m in 0..self.n_moves() {
                if let Some(row) = self.table.row(StateId(s), m) {
                    if row.iter().any(|&(t, p)| t.0 >= n || !(p >= 0.0)) {
                        return Err(Error::InvalidWorld(format!("bad entry in row ({s}, {m})")));
                    }
                    let total: f64 = row.iter().map(|e| e.1).sum();
                    if (total - 1.0).abs() > 1e-12 {
                        return Err(Error::InvalidWorld(format!(
                            "row ({s}, {m}) sums to {total}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

fn sample_row(rng: &mut Rng, row: &[(StateId, f64)]) -> StateId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(t, p) in row {
        acc += p;
        if u < acc {
            return t;
        }
    }
    row.last().expect("non-empty row").0
}

/// A partial or complete trajectory `(s_0, a_0, s_1, ...)`.
///
/// A trajectory whose last action is [`Action::Terminate`] is an option;
/// its final state is the state in which it terminated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: StateId,
    pub steps: Vec<(Action, StateId)>,
}

impl Trajectory {
    pub fn new(start: StateId) -> Self {
        Self {
            start,
            steps: Vec::new(),
        }
    }

    pub fn current(&self) -> StateId {
        self.steps.last().map_or(self.start, |s| s.1)
    }

    /// Number of movement steps taken.
    pub fn env_steps(&self) -> usize {
        self.steps
            .iter()
            .filter(|(a, _)| *a != Action::Terminate)
            .count()
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.steps.last(), Some((Action::Terminate, _)))
    }

    pub fn final_state(&self) -> Option<StateId> {
        self.is_complete().then(|| self.current())
    }

    /// State before step `t` (that is, `s_t`).
    pub fn state_at(&self, t: usize) -> StateId {
        if t == 0 {
            self.start
        } else {
            self.steps[t - 1].1
        }
    }

    /// The prefix `tau_t` containing `t` steps.
    pub fn prefix(&self, t: usize) -> Trajectory {
        Trajectory {
            start: self.start,
            steps: self.steps[..t].to_vec(),
        }
    }

    /// Checks the structural invariants against `world`.
    pub fn check(&self, world: &WorldSpec) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(format!("trajectory: {msg}")));
        if self.steps.len() > world.t_max + 1 {
            return bad("too long");
        }
        let mut prev = self.start;
        for (i, &(a, s)) in self.steps.iter().enumerate() {
            if a == Action::Terminate {
                if i + 1 != self.steps.len() {
                    return bad("terminate before the end");
                }
                if s != prev {
                    return bad("terminate moved the agent");
                }
            } else if let Action::Move(m) = a {
                if world.table.prob(prev, m, s) <= 0.0 {
                    return bad("impossible transition");
                }
            }
            prev = s;
        }
        Ok(())
    }
}
