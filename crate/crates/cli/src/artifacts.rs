//! Trajectory, occupancy and SVG exports of evaluation rollouts.

use std::fmt::Write as _;

use anyhow::Result;

use sd3::agent::{Environment, Rollouts};
use sd3::env::{occupancy_grid, Point};

/// A polyline per rollout in world coordinates, with the skill that drew it.
struct Scene {
    min: Point,
    max: Point,
    walls: Vec<(Point, Point)>,
    solids: Vec<(Point, Point)>,
    paths: Vec<(usize, Vec<Point>)>,
}

fn scene(env: &Environment, rollouts: &Rollouts) -> Scene {
    match (env, rollouts) {
        (Environment::Grid(mdp), Rollouts::Grid(ts)) => {
            let side = mdp.grid_side.unwrap_or(1);
            let centre = |s: usize| -> Point {
                let (x, y) = mdp.coords(s).unwrap_or((0, 0));
                [x as f64 + 0.5, y as f64 + 0.5]
            };
            let solids = (0..mdp.n_states())
                .filter(|&s| mdp.is_wall(s))
                .map(|s| {
                    let c = centre(s);
                    ([c[0] - 0.5, c[1] - 0.5], [c[0] + 0.5, c[1] + 0.5])
                })
                .collect();
            Scene {
                min: [0.0, 0.0],
                max: [side as f64, side as f64],
                walls: Vec::new(),
                solids,
                paths: ts
                    .iter()
                    .map(|t| (t.skill, t.states.iter().map(|&s| centre(s)).collect()))
                    .collect(),
            }
        }
        (Environment::Maze(spec), Rollouts::Maze(ts)) => Scene {
            min: spec.bounds.min,
            max: spec.bounds.max,
            walls: spec.walls.iter().map(|w| (w.a, w.b)).collect(),
            solids: spec.solids.iter().map(|r| (r.min, r.max)).collect(),
            paths: ts.iter().map(|t| (t.skill, t.states.clone())).collect(),
        },
        _ => Scene {
            min: [0.0, 0.0],
            max: [1.0, 1.0],
            walls: Vec::new(),
            solids: Vec::new(),
            paths: Vec::new(),
        },
    }
}

/// `n` evenly spaced hues as `#rrggbb`.
pub fn skill_colors(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let h = i as f64 / n.max(1) as f64 * 6.0;
            let (s, l) = (0.75, 0.45);
            let c = (1.0 - (2.0 * l - 1.0_f64).abs()) * s;
            let x = c * (1.0 - (h % 2.0 - 1.0).abs());
            let (r, g, b) = match h as usize {
                0 => (c, x, 0.0),
                1 => (x, c, 0.0),
                2 => (0.0, c, x),
                3 => (0.0, x, c),
                4 => (x, 0.0, c),
                _ => (c, 0.0, x),
            };
            let m = l - c / 2.0;
            let byte = |v: f64| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
            format!("#{:02x}{:02x}{:02x}", byte(r), byte(g), byte(b))
        })
        .collect()
}

/// Skill trajectories over the environment layout, one colour per skill.
pub fn skills_svg(env: &Environment, rollouts: &Rollouts, n_skills: usize) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 10.0;
    let sc = scene(env, rollouts);
    let span = (sc.max[0] - sc.min[0]).max(sc.max[1] - sc.min[1]).max(1e-12);
    let k = (SIZE - 2.0 * PAD) / span;
    let px = |p: Point| (PAD + (p[0] - sc.min[0]) * k, SIZE - PAD - (p[1] - sc.min[1]) * k);
    let colors = skill_colors(n_skills);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let (x0, y1) = px(sc.min);
    let (x1, y0) = px(sc.max);
    let _ = writeln!(
        out,
        r##"<rect x="{x0:.2}" y="{y0:.2}" width="{:.2}" height="{:.2}" fill="#ffffff" stroke="#000000" stroke-width="2"/>"##,
        x1 - x0,
        y1 - y0
    );
    for (lo, hi) in &sc.solids {
        let (a, b) = (px(*lo), px(*hi));
        let _ = writeln!(
            out,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#9e9e9e"/>"##,
            a.0,
            b.1,
            b.0 - a.0,
            a.1 - b.1
        );
    }
    for (a, b) in &sc.walls {
        let (a, b) = (px(*a), px(*b));
        let _ = writeln!(
            out,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#000000" stroke-width="3"/>"##,
            a.0, a.1, b.0, b.1
        );
    }
    for (z, pts) in &sc.paths {
        let color = colors.get(*z).map_or("#000000", String::as_str);
        let points: Vec<String> = pts
            .iter()
            .map(|p| {
                let (x, y) = px(*p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline data-skill="{z}" points="{}" fill="none" stroke="{color}" stroke-width="1.2" stroke-opacity="0.8"/>"#,
            points.join(" ")
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Columns `seed, episode, step, skill` followed by the state components.
pub fn trajectories_csv(env: &Environment, rollouts: &Rollouts, seed: u64) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    match (env, rollouts) {
        (Environment::Grid(mdp), Rollouts::Grid(ts)) => {
            w.write_record(["seed", "episode", "step", "skill", "state", "x", "y"])?;
            for (e, t) in ts.iter().enumerate() {
                for (step, &s) in t.states.iter().enumerate() {
                    let (x, y) = mdp.coords(s).unwrap_or((0, 0));
                    w.serialize((seed, e, step, t.skill, s, x, y))?;
                }
            }
        }
        (Environment::Maze(_), Rollouts::Maze(ts)) => {
            w.write_record(["seed", "episode", "step", "skill", "x", "y"])?;
            for (e, t) in ts.iter().enumerate() {
                for (step, p) in t.states.iter().enumerate() {
                    w.serialize((seed, e, step, t.skill, p[0], p[1]))?;
                }
            }
        }
        _ => anyhow::bail!("rollouts do not match the environment"),
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Visit counts per cell: the coverage grid for mazes, the states for grids.
pub fn occupancy_csv(env: &Environment, rollouts: &Rollouts, resolution: usize) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    match (env, rollouts) {
        (Environment::Grid(mdp), Rollouts::Grid(ts)) => {
            let mut visits = vec![0u64; mdp.n_states()];
            for t in ts {
                for &s in &t.states {
                    visits[s] += 1;
                }
            }
            w.write_record(["state", "x", "y", "visits", "blocked"])?;
            for (s, v) in visits.iter().enumerate() {
                let (x, y) = mdp.coords(s).unwrap_or((0, 0));
                w.serialize((s, x, y, v, mdp.is_wall(s)))?;
            }
        }
        (Environment::Maze(spec), Rollouts::Maze(ts)) => {
            let grid = occupancy_grid(spec, ts, resolution)?;
            w.write_record(["ix", "iy", "visits", "blocked"])?;
            for iy in 0..grid.resolution {
                for ix in 0..grid.resolution {
                    let c = iy * grid.resolution + ix;
                    w.serialize((ix, iy, grid.visits[c], grid.blocked[c]))?;
                }
            }
        }
        _ => anyhow::bail!("rollouts do not match the environment"),
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn colors_are_distinct() {
        for n in [1, 2, 5, 10, 25] {
            let c = skill_colors(n);
            assert_eq!(c.iter().collect::<HashSet<_>>().len(), n);
        }
        assert_eq!(skill_colors(1), vec!["#c91d1d"]);
    }
}
