//! The shipped worlds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{RoomKind, StateId, TransitionTable, WorldSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WorldName {
    Det1d,
    Stoch1d,
    Det2d,
    Stoch2d,
    DetTree,
    StochTree,
    Rooms4,
    Rooms35,
}

impl WorldName {
    pub const ALL: [WorldName; 8] = [
        WorldName::Det1d,
        WorldName::Stoch1d,
        WorldName::Det2d,
        WorldName::Stoch2d,
        WorldName::DetTree,
        WorldName::StochTree,
        WorldName::Rooms4,
        WorldName::Rooms35,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WorldName::Det1d => "det-1d",
            WorldName::Stoch1d => "stoch-1d",
            WorldName::Det2d => "det-2d",
            WorldName::Stoch2d => "stoch-2d",
            WorldName::DetTree => "det-tree",
            WorldName::StochTree => "stoch-tree",
            WorldName::Rooms4 => "rooms-4",
            WorldName::Rooms35 => "rooms-35",
        }
    }

    pub fn is_rooms(self) -> bool {
        matches!(self, WorldName::Rooms4 | WorldName::Rooms35)
    }
}

impl fmt::Display for WorldName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WorldName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WorldName::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| Error::UnknownWorld(s.to_string()))
    }
}

/// Optional size changes to the canonical worlds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeOverrides {
    /// Corridor length of the 1D worlds.
    pub length: Option<usize>,
    /// Grid width and height of the 2D worlds.
    pub width: Option<usize>,
    pub height: Option<usize>,
    /// Depth of the tree worlds.
    pub depth: Option<usize>,
    pub t_max: Option<usize>,
}

impl SizeOverrides {
    pub fn check(&self) -> Result<()> {
        for (key, v) in [
            ("length", self.length),
            ("width", self.width),
            ("height", self.height),
            ("depth", self.depth),
            ("t_max", self.t_max),
        ] {
            if v == Some(0) {
                return Err(Error::InvalidArgument(format!("{key} must be positive")));
            }
        }
        Ok(())
    }
}

/// Builds one of the canonical worlds.
pub fn make_world(name: WorldName, overrides: SizeOverrides) -> Result<WorldSpec> {
    overrides.check()?;
    let world = match name {
        WorldName::Det1d | WorldName::Stoch1d => corridor(
            name,
            overrides.length.unwrap_or(11),
            overrides.t_max.unwrap_or(5),
        ),
        WorldName::Det2d | WorldName::Stoch2d => grid(
            name,
            overrides.width.unwrap_or(5),
            overrides.height.unwrap_or(5),
            overrides.t_max.unwrap_or(5),
        ),
        WorldName::DetTree | WorldName::StochTree => tree(
            name,
            overrides.depth.unwrap_or(4),
            overrides.t_max.unwrap_or(4),
        ),
        WorldName::Rooms4 => four_rooms(overrides.t_max.unwrap_or(25)),
        WorldName::Rooms35 => rooms35(overrides.t_max.unwrap_or(25)),
    };
    world.validate()?;
    Ok(world)
}

fn blank(name: WorldName, coords: Vec<Vec<i32>>, moves: &[&str], starts: Vec<StateId>, t_max: usize) -> WorldSpec {
    let n = coords.len();
    WorldSpec {
        name: name.as_str().to_string(),
        table: TransitionTable::new(n, moves.len()),
        coords,
        move_names: moves.iter().map(|m| m.to_string()).collect(),
        start_states: starts,
        t_max,
        rooms: vec![None; n],
        step_penalty: 0.0,
        normal_bonus: 0.0,
        special_bonus: 0.0,
    }
}

/// Corridor with the start in the middle; coordinates are offsets from it.
fn corridor(name: WorldName, length: usize, t_max: usize) -> WorldSpec {
    let center = (length / 2) as i32;
    let coords = (0..length as i32).map(|x| vec![x - center]).collect();
    let mut w = blank(name, coords, &["left", "right"], vec![StateId(center as usize)], t_max);
    let clamp = |x: i64| StateId(x.clamp(0, length as i64 - 1) as usize);
    for x in 0..length as i64 {
        let (l, r) = (clamp(x - 1), clamp(x + 1));
        let s = StateId(x as usize);
        if name == WorldName::Stoch1d {
            w.table.set_row(s, 0, &[(l, 0.7), (r, 0.3)]);
            w.table.set_row(s, 1, &[(l, 0.3), (r, 0.7)]);
        } else {
            w.table.set_row(s, 0, &[(l, 1.0)]);
            w.table.set_row(s, 1, &[(r, 1.0)]);
        }
    }
    w
}

// left, up, right, down as (dx, dy); up decreases y.
const DIRS4: [(i32, i32); 4] = [(-1, 0), (0, -1), (1, 0), (0, 1)];

/// Open grid with the start in the middle; coordinates are offsets from it.
fn grid(name: WorldName, width: usize, height: usize, t_max: usize) -> WorldSpec {
    let (cx, cy) = ((width / 2) as i32, (height / 2) as i32);
    let mut coords = Vec::with_capacity(width * height);
    for y in 0..height as i32 {
        for x in 0..width as i32 {
            coords.push(vec![x - cx, y - cy]);
        }
    }
    let start = StateId((cy as usize) * width + cx as usize);
    let mut w = blank(name, coords, &["left", "up", "right", "down"], vec![start], t_max);
    let target = |x: i32, y: i32, (dx, dy): (i32, i32)| {
        let (nx, ny) = (x + dx, y + dy);
        if nx < 0 || ny < 0 || nx >= width as i32 || ny >= height as i32 {
            StateId(y as usize * width + x as usize)
        } else {
            StateId(ny as usize * width + nx as usize)
        }
    };
    for y in 0..height as i32 {
        for x in 0..width as i32 {
            let s = StateId(y as usize * width + x as usize);
            for m in 0..4 {
                if name == WorldName::Stoch2d {
                    let row: Vec<(StateId, f64)> = (0..4)
                        .map(|k| (target(x, y, DIRS4[k]), if k == m { 0.7 } else { 0.1 }))
                        .collect();
                    w.table.set_row(s, m, &row);
                } else {
                    w.table.set_row(s, m, &[(target(x, y, DIRS4[m]), 1.0)]);
                }
            }
        }
    }
    w
}

/// Complete binary tree; coordinates are (depth, index within depth).
fn tree(name: WorldName, depth: usize, t_max: usize) -> WorldSpec {
    let id = |d: usize, i: usize| StateId((1 << d) - 1 + i);
    let mut coords = Vec::new();
    for d in 0..=depth {
        for i in 0..(1usize << d) {
            coords.push(vec![d as i32, i as i32]);
        }
    }
    let mut w = blank(name, coords, &["left", "right"], vec![id(0, 0)], t_max);
    for d in 0..depth {
        for i in 0..(1usize << d) {
            let (s, lc, rc) = (id(d, i), id(d + 1, 2 * i), id(d + 1, 2 * i + 1));
            if name == WorldName::StochTree {
                w.table.set_row(s, 0, &[(lc, 0.8), (rc, 0.0), (s, 0.2)]);
                w.table.set_row(s, 1, &[(lc, 0.6), (rc, 0.2), (s, 0.2)]);
            } else {
                w.table.set_row(s, 0, &[(lc, 1.0)]);
                w.table.set_row(s, 1, &[(rc, 1.0)]);
            }
        }
    }
    w
}

/// Builds a grid world from a free-cell predicate over absolute (x, y).
fn walled_grid(
    name: WorldName,
    size: usize,
    free: impl Fn(i32, i32) -> bool,
    moves: &[&str],
    dirs: &[(i32, i32)],
    starts: &[(i32, i32)],
    t_max: usize,
) -> WorldSpec {
    let n = size as i32;
    let mut coords = Vec::new();
    for y in 0..n {
        for x in 0..n {
            if free(x, y) {
                coords.push(vec![x, y]);
            }
        }
    }
    let lookup = |coords: &[Vec<i32>], x: i32, y: i32| {
        coords.iter().position(|c| c[0] == x && c[1] == y).map(StateId)
    };
    let starts = starts
        .iter()
        .map(|&(x, y)| lookup(&coords, x, y).expect("start cell is free"))
        .collect();
    let mut w = blank(name, coords.clone(), moves, starts, t_max);
    for (i, c) in coords.iter().enumerate() {
        for (m, &(dx, dy)) in dirs.iter().enumerate() {
            let moved = lookup(&coords, c[0] + dx, c[1] + dy).unwrap_or(StateId(i));
            w.table.set_row(StateId(i), m, &[(moved, 1.0)]);
        }
    }
    w
}

/// 25x25 grid split into four rooms by one vertical and one horizontal wall
/// with two single-cell doors each.
fn four_rooms(t_max: usize) -> WorldSpec {
    let free = |x: i32, y: i32| match (x == 12, y == 12) {
        (true, true) => false,
        (true, false) => y == 5 || y == 19,
        (false, true) => x == 5 || x == 19,
        (false, false) => true,
    };
    walled_grid(
        WorldName::Rooms4,
        25,
        free,
        &["left", "up", "right", "down"],
        &DIRS4,
        &[(4, 4), (10, 4)],
        t_max,
    )
}

/// Room columns and rows of the 35-room world.
const ROOM_COLS: [i32; 7] = [2, 4, 6, 8, 10, 12, 14];
const ROOM_ROWS: [i32; 5] = [1, 4, 7, 10, 13];
/// The special room, reachable in 16 moves from the start.
pub(crate) const SPECIAL_ROOM: (i32, i32) = (14, 4);

/// 15x15 grid with 35 one-cell rooms. Each room has a wall cell directly
/// above it and is entered from the left or from below. Moves are up, down
/// and right; a move succeeds with probability 0.7 and otherwise leaves the
/// agent in place.
fn rooms35(t_max: usize) -> WorldSpec {
    let is_room = |x: i32, y: i32| ROOM_COLS.contains(&x) && ROOM_ROWS.contains(&y);
    let is_wall = |x: i32, y: i32| ROOM_COLS.contains(&x) && ROOM_ROWS.contains(&(y + 1));
    let mut w = walled_grid(
        WorldName::Rooms35,
        15,
        |x, y| !is_wall(x, y),
        &["up", "down", "right"],
        &[(0, -1), (0, 1), (1, 0)],
        &[(0, 6)],
        t_max,
    );
    let n = w.n_states();
    let det = w.table.clone();
    let mut table = TransitionTable::new(n, 3);
    for i in 0..n {
        let s = StateId(i);
        let (x, y) = (w.coords[i][0], w.coords[i][1]);
        if is_room(x, y) {
            w.rooms[i] = Some(if (x, y) == SPECIAL_ROOM {
                RoomKind::Special
            } else {
                RoomKind::Normal
            });
            continue;
        }
        for m in 0..3 {
            let moved = det.row(s, m).expect("row")[0].0;
            table.set_row(s, m, &[(moved, 0.7), (s, 0.3)]);
        }
    }
    w.table = table;
    w.step_penalty = 0.1;
    w.normal_bonus = 1.0;
    w.special_bonus = 100.0;
    w
}
