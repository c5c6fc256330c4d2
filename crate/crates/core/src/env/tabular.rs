use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// Grid actions, in index order.
pub const GRID_ACTIONS: [(i64, i64); 4] = [(0, 1), (0, -1), (-1, 0), (1, 0)];
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

/// Finite MDP with a sparse transition table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    /// `transitions[s * n_actions + a]` lists `(next_state, probability)`.
    transitions: Vec<Vec<(usize, f64)>>,
    pub initial_state: usize,
    pub gamma: f64,
    /// Episode length; there are no terminal states.
    pub horizon: usize,
    pub wall_mask: Option<Vec<bool>>,
    /// Side length when the MDP is a square grid.
    pub grid_side: Option<usize>,
}

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<Vec<(usize, f64)>>,
        initial_state: usize,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self> {
        let mdp = Self {
            n_states,
            n_actions,
            transitions,
            initial_state,
            gamma,
            horizon,
            wall_mask: None,
            grid_side: None,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(contract("MDP needs at least one state and one action"));
        }
        if self.transitions.len() != self.n_states * self.n_actions {
            return Err(contract("transition table has the wrong number of rows"));
        }
        if self.initial_state >= self.n_states {
            return Err(contract("initial state out of range"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(contract(format!("discount {} not in (0, 1)", self.gamma)));
        }
        if self.horizon == 0 {
            return Err(contract("horizon must be positive"));
        }
        for (row, dist) in self.transitions.iter().enumerate() {
            let mut total = 0.0;
            for &(s, p) in dist {
                if s >= self.n_states || !(0.0..=1.0).contains(&p) {
                    return Err(contract(format!("bad transition entry ({s}, {p}) in row {row}")));
                }
                total += p;
            }
            if (total - 1.0).abs() > 1e-12 {
                return Err(contract(format!("transition row {row} sums to {total}")));
            }
        }
        if let Some(mask) = &self.wall_mask {
            if mask.len() != self.n_states {
                return Err(contract("wall mask length differs from state count"));
            }
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn transition(&self, s: usize, a: usize) -> &[(usize, f64)] {
        &self.transitions[s * self.n_actions + a]
    }

    pub fn is_wall(&self, s: usize) -> bool {
        self.wall_mask.as_ref().is_some_and(|m| m[s])
    }

    /// Dense `P(s'|s,a)`.
    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition(s, a)
            .iter()
            .filter(|(t, _)| *t == next)
            .map(|(_, p)| p)
            .sum()
    }

    /// Grid coordinates `(x, y)` of a state when the MDP is a grid.
    pub fn coords(&self, s: usize) -> Option<(usize, usize)> {
        self.grid_side.map(|n| (s % n, s / n))
    }
}

/// Square `side x side` gridworld with deterministic 4-connected moves.
pub fn build_gridworld(side: usize) -> Result<TabularMDP> {
    build_gridworld_with(side, 0.0, None)
}

/// Gridworld with an optional slip probability (the move is replaced by a
/// uniformly random action) and optional wall cells. Moves off the grid or
/// into a wall leave the state unchanged.
pub fn build_gridworld_with(side: usize, slip: f64, walls: Option<Vec<bool>>) -> Result<TabularMDP> {
    if side < 2 {
        return Err(contract("gridworld side must be at least 2"));
    }
    if !(0.0..=1.0).contains(&slip) {
        return Err(contract("slip probability must be in [0, 1]"));
    }
    let n = side * side;
    if let Some(w) = &walls {
        if w.len() != n || w[0] {
            return Err(contract("wall mask must cover the grid and leave the start open"));
        }
    }
    let blocked = |s: usize| walls.as_ref().is_some_and(|w| w[s]);
    let target = |s: usize, a: usize| -> usize {
        let (x, y) = ((s % side) as i64, (s / side) as i64);
        let (dx, dy) = GRID_ACTIONS[a];
        let (nx, ny) = (x + dx, y + dy);
        if nx < 0 || ny < 0 || nx >= side as i64 || ny >= side as i64 {
            return s;
        }
        let t = ny as usize * side + nx as usize;
        if blocked(t) {
            s
        } else {
            t
        }
    };
    let mut transitions = Vec::with_capacity(n * 4);
    for s in 0..n {
        for a in 0..4 {
            let mut dist: Vec<(usize, f64)> = Vec::new();
            let mut push = |t: usize, p: f64| {
                if p == 0.0 {
                    return;
                }
                match dist.iter_mut().find(|(u, _)| *u == t) {
                    Some(e) => e.1 += p,
                    None => dist.push((t, p)),
                }
            };
            push(target(s, a), 1.0 - slip);
            for b in 0..4 {
                push(target(s, b), slip / 4.0);
            }
            transitions.push(dist);
        }
    }
    let mut mdp = TabularMDP::new(n, 4, transitions, 0, 0.99, 100)?;
    mdp.wall_mask = walls;
    mdp.grid_side = Some(side);
    Ok(mdp)
}

/// Sample `s' ~ P(.|s,a)`. `t` is the zero-based step index inside the
/// episode; `done` is raised only when the horizon is reached.
pub fn tabular_step<R: Rng>(mdp: &TabularMDP, s: usize, a: usize, t: usize, rng: &mut R) -> Result<(usize, bool)> {
    if s >= mdp.n_states || a >= mdp.n_actions {
        return Err(contract(format!(
            "tabular_step: state {s} / action {a} out of range ({} states, {} actions)",
            mdp.n_states, mdp.n_actions
        )));
    }
    let dist = mdp.transition(s, a);
    let next = if dist.len() == 1 {
        dist[0].0
    } else {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = dist[dist.len() - 1].0;
        for &(t, p) in dist {
            acc += p;
            if u < acc {
                chosen = t;
                break;
            }
        }
        chosen
    };
    Ok((next, t + 1 >= mdp.horizon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gridworld_shape() {
        let g = build_gridworld(5).unwrap();
        assert_eq!((g.n_states(), g.n_actions()), (25, 4));
        assert!(build_gridworld(1).is_err());
    }

    #[test]
    fn deterministic_move_right() {
        let g = build_gridworld(5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (s, done) = tabular_step(&g, 0, RIGHT, 0, &mut rng).unwrap();
        assert_eq!(g.coords(s), Some((1, 0)));
        assert!(!done);
    }

    #[test]
    fn moving_into_boundary_or_wall_stays() {
        let g = build_gridworld(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(tabular_step(&g, 0, LEFT, 0, &mut rng).unwrap().0, 0);
        assert_eq!(tabular_step(&g, 0, DOWN, 0, &mut rng).unwrap().0, 0);
        let mut walls = vec![false; 9];
        walls[1] = true;
        let g = build_gridworld_with(3, 0.0, Some(walls)).unwrap();
        assert_eq!(tabular_step(&g, 0, RIGHT, 0, &mut rng).unwrap().0, 0);
    }

    #[test]
    fn done_only_at_horizon() {
        let g = build_gridworld(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(!tabular_step(&g, 0, UP, 98, &mut rng).unwrap().1);
        assert!(tabular_step(&g, 0, UP, 99, &mut rng).unwrap().1);
    }

    #[test]
    fn out_of_range_is_contract_violation() {
        let g = build_gridworld(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(tabular_step(&g, 4, 0, 0, &mut rng).is_err());
        assert!(tabular_step(&g, 0, 4, 0, &mut rng).is_err());
    }

    #[test]
    fn stochastic_frequency_matches_table() {
        let mdp = TabularMDP::new(
            3,
            1,
            vec![vec![(1, 0.5), (2, 0.5)], vec![(1, 1.0)], vec![(2, 1.0)]],
            0,
            0.9,
            10,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| tabular_step(&mdp, 0, 0, 0, &mut rng).unwrap().0 == 1)
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn rows_must_be_stochastic() {
        assert!(TabularMDP::new(2, 1, vec![vec![(0, 0.5)], vec![(1, 1.0)]], 0, 0.9, 5).is_err());
        assert!(TabularMDP::new(2, 1, vec![vec![(0, 1.0)], vec![(1, 1.0)]], 0, 1.0, 5).is_err());
    }

    #[test]
    fn slip_rows_sum_to_one() {
        let g = build_gridworld_with(4, 0.2, None).unwrap();
        g.validate().unwrap();
        assert!((g.prob(5, RIGHT, 6) - 0.85).abs() < 1e-12);
    }
}
