//! Flat text serialization of worlds.
//!
//! ```text
//! name stoch-1d
//! moves left right
//! tmax 5
//! state 0 -1
//! state 1 0
//! start 1
//! room 2 special
//! reward 0.1 1 100
//! 0 left -> 0:0.7,1:0.3
//! ```
//!
//! Every transition row is one `state move -> state:prob,...` line. Blank
//! lines and `#` comments are ignored.

use std::fmt::Write as _;

use super::{RoomKind, StateId, TransitionTable, WorldSpec};
use crate::error::{Error, Result};

impl WorldSpec {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "name {}", self.name);
        let _ = writeln!(out, "moves {}", self.move_names.join(" "));
        let _ = writeln!(out, "tmax {}", self.t_max);
        for (i, c) in self.coords.iter().enumerate() {
            let c: Vec<String> = c.iter().map(i32::to_string).collect();
            let _ = writeln!(out, "state {i} {}", c.join(" "));
        }
        for s in &self.start_states {
            let _ = writeln!(out, "start {s}");
        }
        for (i, r) in self.rooms.iter().enumerate() {
            match r {
                Some(RoomKind::Normal) => {
                    let _ = writeln!(out, "room {i} normal");
                }
                Some(RoomKind::Special) => {
                    let _ = writeln!(out, "room {i} special");
                }
                None => {}
            }
        }
        if self.has_rooms() {
            let _ = writeln!(
                out,
                "reward {} {} {}",
                self.step_penalty, self.normal_bonus, self.special_bonus
            );
        }
        for s in 0..self.n_states() {
            for m in 0..self.n_moves() {
                if let Some(row) = self.table.row(StateId(s), m) {
                    let entries: Vec<String> = row.iter().map(|(t, p)| format!("{t}:{p}")).collect();
                    let _ = writeln!(out, "{s} {} -> {}", self.move_names[m], entries.join(","));
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<WorldSpec> {
        let mut name = String::from("custom");
        let mut moves: Option<Vec<String>> = None;
        let mut t_max = None;
        let mut coords: Vec<(usize, Vec<i32>)> = Vec::new();
        let mut starts = Vec::new();
        let mut rooms: Vec<(usize, RoomKind)> = Vec::new();
        let mut reward = (0.0, 0.0, 0.0);
        let mut rows: Vec<(usize, usize, String, Vec<(StateId, f64)>)> = Vec::new();

        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let err = |msg: String| Error::Parse { line, msg };
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some((lhs, rhs)) = content.split_once("->") {
                let mut lhs = lhs.split_whitespace();
                let (Some(s), Some(mv), None) = (lhs.next(), lhs.next(), lhs.next()) else {
                    return Err(err("expected `state move -> ...`".into()));
                };
                let s = parse_num::<usize>(s).map_err(err)?;
                let mut entries = Vec::new();
                for part in rhs.split(',') {
                    let (t, p) = part
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| err(format!("bad entry `{}`", part.trim())))?;
                    entries.push((
                        StateId(parse_num::<usize>(t).map_err(err)?),
                        parse_num::<f64>(p).map_err(err)?,
                    ));
                }
                rows.push((line, s, mv.to_string(), entries));
                continue;
            }
            let mut words = content.split_whitespace();
            let key = words.next().unwrap_or_default();
            let rest: Vec<&str> = words.collect();
            match key {
                "name" => name = rest.join(" "),
                "moves" => moves = Some(rest.iter().map(|s| s.to_string()).collect()),
                "tmax" => {
                    let [v] = rest[..] else {
                        return Err(err("tmax takes one value".into()));
                    };
                    t_max = Some(parse_num::<usize>(v).map_err(err)?);
                }
                "state" => {
                    let (idx, c) = rest
                        .split_first()
                        .ok_or_else(|| err("state needs an index".into()))?;
                    let c = c
                        .iter()
                        .map(|v| parse_num::<i32>(v))
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(err)?;
                    coords.push((parse_num::<usize>(idx).map_err(err)?, c));
                }
                "start" => {
                    for v in rest {
                        starts.push(StateId(parse_num::<usize>(v).map_err(err)?));
                    }
                }
                "room" => {
                    let [idx, kind] = rest[..] else {
                        return Err(err("room takes an index and a kind".into()));
                    };
                    let kind = match kind {
                        "normal" => RoomKind::Normal,
                        "special" => RoomKind::Special,
                        other => return Err(err(format!("unknown room kind `{other}`"))),
                    };
                    rooms.push((parse_num::<usize>(idx).map_err(err)?, kind));
                }
                "reward" => {
                    let [a, b, c] = rest[..] else {
                        return Err(err("reward takes three values".into()));
                    };
                    reward = (
                        parse_num::<f64>(a).map_err(err)?,
                        parse_num::<f64>(b).map_err(err)?,
                        parse_num::<f64>(c).map_err(err)?,
                    );
                }
                other => return Err(err(format!("unknown directive `{other}`"))),
            }
        }

        let moves = moves.ok_or(Error::Parse {
            line: 0,
            msg: "missing `moves`".into(),
        })?;
        let t_max = t_max.ok_or(Error::Parse {
            line: 0,
            msg: "missing `tmax`".into(),
        })?;
        coords.sort_by_key(|c| c.0);
        if coords.iter().enumerate().any(|(i, c)| c.0 != i) {
            return Err(Error::InvalidWorld("state indices must be 0..n".into()));
        }
        let n = coords.len();
        let mut table = TransitionTable::new(n, moves.len());
        for (line, s, mv, entries) in rows {
            let m = moves.iter().position(|x| *x == mv).ok_or(Error::Parse {
                line,
                msg: format!("unknown move `{mv}`"),
            })?;
            if s >= n {
                return Err(Error::Parse {
                    line,
                    msg: format!("state {s} out of range"),
                });
            }
            table.set_row(StateId(s), m, &entries);
        }
        let mut room_ann = vec![None; n];
        for (i, kind) in rooms {
            *room_ann
                .get_mut(i)
                .ok_or_else(|| Error::InvalidWorld(format!("room on unknown state {i}")))? = Some(kind);
        }
        let world = WorldSpec {
            name,
            coords: coords.into_iter().map(|c| c.1).collect(),
            move_names: moves,
            table,
            start_states: starts,
            t_max,
            rooms: room_ann,
            step_penalty: reward.0,
            normal_bonus: reward.1,
            special_bonus: reward.2,
        };
        world.validate()?;
        Ok(world)
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
    s.trim()
        .parse::<T>()
        .map_err(|_| format!("cannot parse `{}`", s.trim()))
}
