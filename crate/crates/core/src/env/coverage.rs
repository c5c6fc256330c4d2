use serde::{Deserialize, Serialize};

use super::maze::{MazeSpec, Point};
use super::tabular::TabularMDP;
use crate::error::{contract, Result};

/// Rollout of one skill: `states.len() == actions.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<S, A> {
    pub skill: usize,
    pub states: Vec<S>,
    pub actions: Vec<A>,
}

pub type MazeTrajectory = Trajectory<Point, Point>;
pub type GridTrajectory = Trajectory<usize, usize>;

impl<S: Clone, A> Trajectory<S, A> {
    pub fn start(skill: usize, s0: S) -> Self {
        Self {
            skill,
            states: vec![s0],
            actions: Vec::new(),
        }
    }

    pub fn push(&mut self, action: A, next: S) {
        self.actions.push(action);
        self.states.push(next);
    }

    pub fn final_state(&self) -> &S {
        self.states.last().expect("trajectory holds at least the start state")
    }

    pub fn is_consistent(&self) -> bool {
        self.states.len() == self.actions.len() + 1
    }
}

/// Occupancy grid over the maze bounds; cells whose centre lies in a solid
/// region are not counted.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    pub visits: Vec<u64>,
    pub blocked: Vec<bool>,
    min: Point,
    cell: Point,
}

impl OccupancyGrid {
    pub fn new(spec: &MazeSpec, resolution: usize) -> Result<Self> {
        if resolution < 2 {
            return Err(contract(format!("coverage resolution {resolution} < 2")));
        }
        let min = spec.bounds.min;
        let cell = [
            (spec.bounds.max[0] - min[0]) / resolution as f64,
            (spec.bounds.max[1] - min[1]) / resolution as f64,
        ];
        let mut blocked = vec![false; resolution * resolution];
        for iy in 0..resolution {
            for ix in 0..resolution {
                let c = [
                    min[0] + (ix as f64 + 0.5) * cell[0],
                    min[1] + (iy as f64 + 0.5) * cell[1],
                ];
                blocked[iy * resolution + ix] = spec.in_solid(c);
            }
        }
        Ok(Self {
            resolution,
            visits: vec![0; resolution * resolution],
            blocked,
            min,
            cell,
        })
    }

    pub fn cell_of(&self, p: Point) -> usize {
        let idx = |v: f64, lo: f64, w: f64| -> usize {
            let i = ((v - lo) / w).floor();
            if i.is_nan() || i < 0.0 {
                0
            } else {
                (i as usize).min(self.resolution - 1)
            }
        };
        idx(p[1], self.min[1], self.cell[1]) * self.resolution + idx(p[0], self.min[0], self.cell[0])
    }

    pub fn add(&mut self, p: Point) {
        let c = self.cell_of(p);
        self.visits[c] += 1;
    }

    pub fn open_cells(&self) -> usize {
        self.blocked.iter().filter(|b| !**b).count()
    }

    pub fn coverage(&self) -> f64 {
        let open = self.open_cells();
        if open == 0 {
            return 0.0;
        }
        let hit = self
            .visits
            .iter()
            .zip(&self.blocked)
            .filter(|(v, b)| **v > 0 && !**b)
            .count();
        hit as f64 / open as f64
    }
}

/// Fraction of open grid cells visited by any state of any trajectory.
pub fn occupancy_coverage(spec: &MazeSpec, trajectories: &[MazeTrajectory], resolution: usize) -> Result<f64> {
    let grid = occupancy_grid(spec, trajectories, resolution)?;
    Ok(grid.coverage())
}

pub fn occupancy_grid(spec: &MazeSpec, trajectories: &[MazeTrajectory], resolution: usize) -> Result<OccupancyGrid> {
    let mut grid = OccupancyGrid::new(spec, resolution)?;
    for t in trajectories {
        for &p in &t.states {
            grid.add(p);
        }
    }
    Ok(grid)
}

/// Fraction of non-wall tabular states visited.
pub fn tabular_coverage(mdp: &TabularMDP, trajectories: &[GridTrajectory]) -> f64 {
    let mut seen = vec![false; mdp.n_states()];
    for t in trajectories {
        for &s in &t.states {
            if s < seen.len() {
                seen[s] = true;
            }
        }
    }
    let open = (0..mdp.n_states()).filter(|&s| !mdp.is_wall(s)).count();
    let hit = (0..mdp.n_states()).filter(|&s| seen[s] && !mdp.is_wall(s)).count();
    if open == 0 {
        0.0
    } else {
        hit as f64 / open as f64
    }
}
