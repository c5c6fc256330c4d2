//! Gridworld MDPs, continuous point mazes and coverage metrics.

mod coverage;
mod maze;
mod tabular;

pub use coverage::{
    occupancy_coverage, occupancy_grid, tabular_coverage, GridTrajectory, MazeTrajectory, OccupancyGrid, Trajectory,
};
pub use maze::{
    build_tree_maze, build_u_maze, maze_step, tree_cell_center, tree_cell_rect, MazeSpec, Point, Rect, Segment,
    TREE_CELL, TREE_MAZE_ROWS, WALL_MARGIN,
};
pub use tabular::{
    build_gridworld, build_gridworld_with, tabular_step, TabularMDP, DOWN, GRID_ACTIONS, LEFT, RIGHT, UP,
};
