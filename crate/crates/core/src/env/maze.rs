use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

pub type Point = [f64; 2];

/// Distance kept between the agent and any wall it runs into.
pub const WALL_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub a: Point,
    pub b: Point,
}

impl Segment {
    pub fn new(a: Point, b: Point) -> Self {
        Self { a, b }
    }
}

/// Axis-aligned rectangle `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn new(min: Point, max: Point) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    pub fn contains_strict(&self, p: Point) -> bool {
        p[0] > self.min[0] && p[0] < self.max[0] && p[1] > self.min[1] && p[1] < self.max[1]
    }

    fn edges(&self) -> [Segment; 4] {
        let [x0, y0] = self.min;
        let [x1, y1] = self.max;
        [
            Segment::new([x0, y0], [x1, y0]),
            Segment::new([x1, y0], [x1, y1]),
            Segment::new([x1, y1], [x0, y1]),
            Segment::new([x0, y1], [x0, y0]),
        ]
    }
}

/// Continuous 2-D maze: position state, velocity action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MazeSpec {
    pub name: String,
    pub walls: Vec<Segment>,
    /// Solid regions enclosed by walls; excluded from coverage.
    #[serde(default)]
    pub solids: Vec<Rect>,
    pub start: Point,
    pub bounds: Rect,
    pub max_speed: f64,
    pub episode_len: usize,
}

impl MazeSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_speed > 0.0) {
            return Err(contract("maze max speed must be positive"));
        }
        if self.episode_len == 0 {
            return Err(contract("maze episode length must be positive"));
        }
        if !self.bounds.contains_strict(self.start) {
            return Err(contract("maze start is not strictly inside the bounds"));
        }
        if self.solids.iter().any(|r| r.contains(self.start)) {
            return Err(contract("maze start lies inside a solid region"));
        }
        if self
            .walls
            .iter()
            .any(|w| point_segment_distance(self.start, w) < WALL_MARGIN)
        {
            return Err(contract("maze start lies on a wall"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MazeSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn in_solid(&self, p: Point) -> bool {
        self.solids.iter().any(|r| r.contains_strict(p))
    }

    /// All blocking segments: interior walls plus the bounding box.
    fn blockers(&self) -> impl Iterator<Item = Segment> + '_ {
        self.walls.iter().copied().chain(self.bounds.edges())
    }

    /// True if the straight move `p -> q` touches any wall or the boundary.
    pub fn crosses_wall(&self, p: Point, q: Point) -> bool {
        self.blockers().any(|w| first_hit(p, q, &w).is_some())
    }
}

/// Advance `pos` by the clamped action scaled by `max_speed`. A move that
/// would cross a wall stops `WALL_MARGIN` short of it along the direction of motion.
pub fn maze_step(spec: &MazeSpec, pos: Point, action: Point) -> Point {
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let a = [
        if a[0].is_finite() { a[0] } else { 0.0 },
        if a[1].is_finite() { a[1] } else { 0.0 },
    ];
    let delta = [a[0] * spec.max_speed, a[1] * spec.max_speed];
    let len = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
    if len == 0.0 {
        return pos;
    }
    let target = [pos[0] + delta[0], pos[1] + delta[1]];
    let hit = spec
        .blockers()
        .filter_map(|w| first_hit(pos, target, &w))
        .fold(f64::INFINITY, f64::min);
    let next = if hit.is_finite() {
        let travel = (hit * len - WALL_MARGIN).max(0.0);
        [pos[0] + delta[0] * travel / len, pos[1] + delta[1] * travel / len]
    } else {
        target
    };
    let b = &spec.bounds;
    [
        next[0].clamp(b.min[0] + WALL_MARGIN, b.max[0] - WALL_MARGIN),
        next[1].clamp(b.min[1] + WALL_MARGIN, b.max[1] - WALL_MARGIN),
    ]
}

fn cross(u: Point, v: Point) -> f64 {
    u[0] * v[1] - u[1] * v[0]
}

/// Fraction `t` along `p -> q` of the first contact with `w`, if any.
fn first_hit(p: Point, q: Point, w: &Segment) -> Option<f64> {
    let r = [q[0] - p[0], q[1] - p[1]];
    let s = [w.b[0] - w.a[0], w.b[1] - w.a[1]];
    let qp = [w.a[0] - p[0], w.a[1] - p[1]];
    let denom = cross(r, s);
    let scale = (r[0].abs() + r[1].abs()) * (s[0].abs() + s[1].abs());
    if denom.abs() <= 1e-15 * scale.max(1e-300) {
        // Parallel: only a collinear overlap blocks.
        if cross(qp, r).abs() > 1e-12 * (r[0].abs() + r[1].abs()).max(1e-300) {
            return None;
        }
        let rr = r[0] * r[0] + r[1] * r[1];
        if rr == 0.0 {
            return None;
        }
        let t0 = (qp[0] * r[0] + qp[1] * r[1]) / rr;
        let t1 = t0 + (s[0] * r[0] + s[1] * r[1]) / rr;
        let (lo, hi) = (t0.min(t1), t0.max(t1));
        if hi < 0.0 || lo > 1.0 {
            return None;
        }
        return Some(lo.max(0.0));
    }
    let t = cross(qp, s) / denom;
    let u = cross(qp, r) / denom;
    if (0.0..=1.0).contains(&t) && (0.0..=1.0).contains(&u) {
        Some(t)
    } else {
        None
    }
}

fn point_segment_distance(p: Point, w: &Segment) -> f64 {
    let s = [w.b[0] - w.a[0], w.b[1] - w.a[1]];
    let ss = s[0] * s[0] + s[1] * s[1];
    let t = if ss == 0.0 {
        0.0
    } else {
        (((p[0] - w.a[0]) * s[0] + (p[1] - w.a[1]) * s[1]) / ss).clamp(0.0, 1.0)
    };
    let c = [w.a[0] + t * s[0], w.a[1] + t * s[1]];
    ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt()
}

fn square_bounds() -> Rect {
    Rect::new([-1.0, -1.0], [1.0, 1.0])
}

/// U-maze on `[-1, 1]^2`: a barrier along `y = 0` from the left wall to
/// `x = 0.4`. The agent starts bottom-left and must detour around the
/// barrier's right end to reach the top half.
pub fn build_u_maze() -> MazeSpec {
    let spec = MazeSpec {
        name: "u_maze".into(),
        walls: vec![Segment::new([-1.0, 0.0], [0.4, 0.0])],
        solids: vec![],
        start: [-0.7, -0.7],
        bounds: square_bounds(),
        max_speed: 0.1,
        episode_len: 200,
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

/// Tree maze cell layout on an 8x8 grid, row 0 at the top, `o` open and `#`
/// solid. A trunk descends
/// from the start, splits into two branches, each of which splits again into
/// two leaf corridors.
pub const TREE_MAZE_ROWS: [&str; 8] = [
    "###o####", "###o####", "#ooooo##", "#o###o##", "ooo#ooo#", "o#o#o#o#", "o#o#o#o#", "o#o#o#o#",
];

/// Cell size of the tree maze grid.
pub const TREE_CELL: f64 = 0.25;

/// Extent of cell `(col, row)` in the tree maze.
pub fn tree_cell_rect(col: usize, row: usize) -> Rect {
    let x0 = -1.0 + col as f64 * TREE_CELL;
    let y1 = 1.0 - row as f64 * TREE_CELL;
    Rect::new([x0, y1 - TREE_CELL], [x0 + TREE_CELL, y1])
}

/// Centre of cell `(col, row)` in the tree maze.
pub fn tree_cell_center(col: usize, row: usize) -> Point {
    let r = tree_cell_rect(col, row);
    [(r.min[0] + r.max[0]) / 2.0, (r.min[1] + r.max[1]) / 2.0]
}

/// Binary tree maze: corridors one cell wide, four leaf corridors.
pub fn build_tree_maze() -> MazeSpec {
    let open = |c: i64, r: i64| -> bool {
        if !(0..8).contains(&c) || !(0..8).contains(&r) {
            return false;
        }
        TREE_MAZE_ROWS[r as usize].as_bytes()[c as usize] == b'o'
    };
    let mut walls = Vec::new();
    let mut solids = Vec::new();
    for r in 0..8i64 {
        for c in 0..8i64 {
            let rect = tree_cell_rect(c as usize, r as usize);
            if !open(c, r) {
                solids.push(rect);
                continue;
            }
            let [x0, y0] = rect.min;
            let [x1, y1] = rect.max;
            if !open(c, r - 1) {
                walls.push(Segment::new([x0, y1], [x1, y1]));
            }
            if !open(c, r + 1) {
                walls.push(Segment::new([x0, y0], [x1, y0]));
            }
            if !open(c - 1, r) {
                walls.push(Segment::new([x0, y0], [x0, y1]));
            }
            if !open(c + 1, r) {
                walls.push(Segment::new([x1, y0], [x1, y1]));
            }
        }
    }
    let spec = MazeSpec {
        name: "tree_maze".into(),
        walls,
        solids,
        start: tree_cell_center(3, 0),
        bounds: square_bounds(),
        max_speed: 0.1,
        episode_len: 200,
    };
    debug_assert!(spec.validate().is_ok());
    spec
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_square(max_speed: f64) -> MazeSpec {
        MazeSpec {
            name: "open".into(),
            walls: vec![],
            solids: vec![],
            start: [0.0, 0.0],
            bounds: square_bounds(),
            max_speed,
            episode_len: 10,
        }
    }

    #[test]
    fn zero_action_stays() {
        let m = build_u_maze();
        assert_eq!(maze_step(&m, [0.3, -0.2], [0.0, 0.0]), [0.3, -0.2]);
    }

    #[test]
    fn open_move() {
        let m = open_square(0.1);
        let p = maze_step(&m, [0.0, 0.0], [1.0, 0.0]);
        assert!((p[0] - 0.1).abs() < 1e-15 && p[1] == 0.0);
    }

    #[test]
    fn wall_stops_motion_short_of_it() {
        let mut m = open_square(0.1);
        m.walls.push(Segment::new([0.05, -1.0], [0.05, 1.0]));
        let p = maze_step(&m, [0.0, 0.0], [1.0, 0.0]);
        assert!((p[0] - (0.05 - 1e-6)).abs() < 1e-15, "{}", p[0]);
        // Pushing again against the wall does not cross it.
        let q = maze_step(&m, p, [1.0, 0.3]);
        assert!(q[0] < 0.05);
    }

    #[test]
    fn actions_are_clamped() {
        let m = open_square(0.1);
        let p = maze_step(&m, [0.0, 0.0], [5.0, -7.0]);
        assert!((p[0] - 0.1).abs() < 1e-15 && (p[1] + 0.1).abs() < 1e-15);
        assert_eq!(maze_step(&m, [0.0, 0.0], [f64::NAN, 0.0]), [0.0, 0.0]);
    }

    #[test]
    fn bounds_are_walls() {
        let m = open_square(0.1);
        let p = maze_step(&m, [0.95, 0.0], [1.0, 0.0]);
        assert!(p[0] < 1.0 && p[0] > 0.99);
    }

    #[test]
    fn collinear_approach_is_blocked() {
        let m = build_u_maze();
        let p = maze_step(&m, [0.45, 0.0], [-1.0, 0.0]);
        assert!(p[0] >= 0.4 - 1e-12, "{p:?}");
    }

    #[test]
    fn builders_are_valid() {
        build_u_maze().validate().unwrap();
        let t = build_tree_maze();
        t.validate().unwrap();
        assert!(!t.in_solid(t.start));
        assert!(t.solids.len() > 30);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut m = open_square(0.1);
        m.max_speed = 0.0;
        assert!(m.validate().is_err());
        let mut m = open_square(0.1);
        m.start = [1.0, 0.0];
        assert!(m.validate().is_err());
        let mut m = open_square(0.1);
        m.walls.push(Segment::new([-1.0, 0.0], [1.0, 0.0]));
        assert!(m.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = build_tree_maze();
        let back = MazeSpec::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(t, back);
        assert!(MazeSpec::from_json(r#"{"name":"x"}"#).is_err());
    }
}
