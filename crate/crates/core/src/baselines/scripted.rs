//! Shortest-path realization of grounded operators.

use std::collections::VecDeque;

use crate::dt::ACTION_COUNT;
use crate::gridworld::{Action, Cell, EnvState, Flags, GridWorld, Tile};
use crate::hierarchy::{Policy, Query};
use crate::symbolic::{Operator, OperatorKind};

use super::one_hot;

/// Successful-move distance from every cell to `target` with `flags` held
/// fixed, indexed `row * width + col`. `None` marks cells that cannot reach
/// the target.
pub fn distance_map(world: &GridWorld, flags: Flags, target: Cell) -> Vec<Option<usize>> {
    let w = world.width();
    let idx = |c: Cell| c.row * w + c.col;
    let n = w * world.height();
    let mut preds: Vec<Vec<Cell>> = vec![Vec::new(); n];
    for u in world.open_cells() {
        let s = world.state_at(u, flags);
        for a in Action::MOVES {
            if let Some(v) = world.move_target(&s, a) {
                preds[idx(v)].push(u);
            }
        }
    }
    let mut dist = vec![None; n];
    if world.tile(target) == Tile::Wall {
        return dist;
    }
    dist[idx(target)] = Some(0);
    let mut queue = VecDeque::from([target]);
    while let Some(v) = queue.pop_front() {
        let d = dist[idx(v)].expect("queued cells have a distance");
        for &u in &preds[idx(v)] {
            if dist[idx(u)].is_none() {
                dist[idx(u)] = Some(d + 1);
                queue.push_back(u);
            }
        }
    }
    dist
}

/// Next action of the scripted controller, or `None` if the operator's
/// target cannot be reached from `state`.
///
/// Navigation takes the first action in code order that moves one step
/// closer; it is re-queried every step, so failed moves are retried.
pub fn scripted_action(world: &GridWorld, op: &Operator, state: &EnvState) -> Option<Action> {
    let target = op.kind.target();
    let here = state.cell();
    if here == target {
        return match op.kind {
            OperatorKind::Move { .. } => None,
            _ => Some(Action::PickOpen),
        };
    }
    let dist = distance_map(world, state.flags, target);
    let w = world.width();
    let d = dist[here.row * w + here.col]?;
    Action::MOVES.into_iter().find(|&a| {
        world.move_target(state, a).is_some_and(|v| dist[v.row * w + v.col] == Some(d - 1))
    })
}

/// Steps the scripted controller needs for `op` from `state` without
/// movement failures.
pub fn scripted_steps(world: &GridWorld, op: &Operator, state: &EnvState) -> Option<usize> {
    let target = op.kind.target();
    let dist = distance_map(world, state.flags, target);
    let d = dist[state.row * world.width() + state.col]?;
    Some(d + usize::from(!op.kind.is_move()))
}

/// Hand-written executor for planner operators.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedPolicy;

impl Policy for ScriptedPolicy {
    fn name(&self) -> &str {
        "SymbolicScripted"
    }

    fn conditioned(&self) -> bool {
        true
    }

    fn act(&self, queries: &mut [Query<'_>]) -> Vec<Option<[f64; ACTION_COUNT]>> {
        queries
            .iter()
            .map(|q| {
                let op = q.operator?;
                scripted_action(q.world, op, q.state()).map(|a| one_hot(a.code()))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridworld::EnvConfig;
    use crate::symbolic::ground_operators;

    fn world() -> GridWorld {
        GridWorld::new(EnvConfig::case1_default().with_fail_prob(0.0)).unwrap()
    }

    #[test]
    fn steps_toward_target() {
        let w = world();
        let ops = ground_operators(&w);
        let mv = ops
            .iter()
            .find(|o| o.kind == OperatorKind::Move { from: Cell::new(1, 1), to: Cell::new(1, 2) })
            .unwrap();
        let s = w.state_at(Cell::new(1, 1), Flags::new(2));
        assert_eq!(scripted_action(&w, mv, &s), Some(Action::Right));
        let pick = ops.iter().find(|o| o.name == "PickKey").unwrap();
        let on_key = w.state_at(w.config().key_cell(1).unwrap(), Flags::new(2));
        assert_eq!(scripted_action(&w, pick, &on_key), Some(Action::PickOpen));
        assert_eq!(scripted_steps(&w, pick, &w.reset()), Some(5));
    }

    #[test]
    fn closed_door_cell_cannot_be_left() {
        let w = world();
        let door = w.config().door_cell(1).unwrap();
        let dist = distance_map(&w, Flags::new(2), Cell::new(0, 0));
        assert_eq!(dist[door.row * w.width() + door.col], None);
        let mut open = Flags::new(2);
        open.set(0);
        open.set(1);
        let dist = distance_map(&w, open, Cell::new(0, 0));
        assert!(dist[door.row * w.width() + door.col].is_some());
    }
}
