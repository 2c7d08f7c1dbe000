//! Layer-by-layer laser toolpaths and the element birth schedule they imply.
//!
//! Tracks run along element-center lines at the top surface of each layer,
//! entering and leaving a run at the outer edge of its first and last
//! element. One track per element row, so hatch spacing equals element size.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::mesh::{ElementId, ElementTag, GridIndex, HexMesh};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("time {t} outside path range [0, {end}]")]
    OutOfRange { t: f64, end: f64 },
    #[error("schedule incomplete: build elements never visited by the laser: {0:?}")]
    ScheduleIncomplete(Vec<ElementId>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    ZigZag,
    InwardFromBoundary,
}

impl std::str::FromStr for Strategy {
    type Err = PathError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zigzag" => Ok(Strategy::ZigZag),
            "inward" => Ok(Strategy::InwardFromBoundary),
            other => Err(PathError::InvalidArgument(format!(
                "unknown strategy `{other}` (expected zigzag or inward)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToolpathSegment {
    pub t_start: f64,
    pub t_end: f64,
    pub p_start: [f64; 3],
    pub p_end: [f64; 3],
    pub laser_on: bool,
}

impl ToolpathSegment {
    pub fn position(&self, t: f64) -> [f64; 3] {
        let s = ((t - self.t_start) / (self.t_end - self.t_start)).clamp(0.0, 1.0);
        [0, 1, 2].map(|d| self.p_start[d] + s * (self.p_end[d] - self.p_start[d]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Toolpath {
    pub segments: Vec<ToolpathSegment>,
    pub scan_speed: f64,
    pub layer_dwell: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaserState {
    pub position: [f64; 3],
    pub on: bool,
}

/// Per-element activation step. Substrate elements are born at step 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BirthSchedule {
    pub birth_step: Vec<usize>,
}

impl BirthSchedule {
    /// Every element active from step 0.
    pub fn all_active(n_elements: usize) -> Self {
        BirthSchedule {
            birth_step: vec![0; n_elements],
        }
    }

    pub fn is_active(&self, e: ElementId, step: usize) -> bool {
        self.birth_step[e] <= step
    }

    pub fn active_at(&self, step: usize) -> Vec<ElementId> {
        (0..self.birth_step.len())
            .filter(|&e| self.birth_step[e] <= step)
            .collect()
    }
}

/// Cells of one layer in deposition order, split into runs of 4-adjacent cells.
fn order_layer(
    cells: &BTreeSet<(i64, i64)>,
    strategy: Strategy,
) -> Vec<(Vec<(i64, i64)>, (i64, i64))> {
    let mut runs = Vec::new();
    match strategy {
        Strategy::ZigZag => {
            let mut rows: BTreeMap<i64, Vec<i64>> = BTreeMap::new();
            for &(i, j) in cells {
                rows.entry(j).or_default().push(i);
            }
            for (r, (j, mut is)) in rows.into_iter().enumerate() {
                let dir = if r % 2 == 0 { 1 } else { -1 };
                if dir < 0 {
                    is.reverse();
                }
                let mut run: Vec<(i64, i64)> = Vec::new();
                for i in is {
                    if let Some(&(pi, _)) = run.last() {
                        if (i - pi).abs() != 1 {
                            runs.push((std::mem::take(&mut run), (dir, 0)));
                        }
                    }
                    run.push((i, j));
                }
                if !run.is_empty() {
                    runs.push((run, (dir, 0)));
                }
            }
        }
        Strategy::InwardFromBoundary => {
            let (mut i0, mut i1) = (i64::MAX, i64::MIN);
            let (mut j0, mut j1) = (i64::MAX, i64::MIN);
            for &(i, j) in cells {
                i0 = i0.min(i);
                i1 = i1.max(i);
                j0 = j0.min(j);
                j1 = j1.max(j);
            }
            let mut order = Vec::with_capacity(cells.len());
            while i0 <= i1 && j0 <= j1 {
                for i in i0..=i1 {
                    order.push((i, j0));
                }
                for j in j0 + 1..=j1 {
                    order.push((i1, j));
                }
                if j1 > j0 {
                    for i in (i0..i1).rev() {
                        order.push((i, j1));
                    }
                }
                if i1 > i0 {
                    for j in (j0 + 1..j1).rev() {
                        order.push((i0, j));
                    }
                }
                i0 += 1;
                i1 -= 1;
                j0 += 1;
                j1 -= 1;
            }
            let mut run: Vec<(i64, i64)> = Vec::new();
            for c in order.into_iter().filter(|c| cells.contains(c)) {
                if let Some(&p) = run.last() {
                    if (c.0 - p.0).abs() + (c.1 - p.1).abs() != 1 {
                        runs.push((std::mem::take(&mut run), (1, 0)));
                    }
                }
                run.push(c);
            }
            if !run.is_empty() {
                runs.push((run, (1, 0)));
            }
        }
    }
    runs
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn same_direction(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> bool {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - b[0], c[1] - b[1], c[2] - b[2]];
    let cross = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let nu = dist(a, b);
    let nv = dist(b, c);
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    cross.iter().all(|x| x.abs() <= 1e-12 * nu * nv) && dot > 0.0
}

/// Generates a layer-by-layer path covering every build element center once.
pub fn generate_toolpath(
    mesh: &HexMesh,
    strategy: Strategy,
    scan_speed: f64,
    layer_dwell: f64,
) -> Result<Toolpath, PathError> {
    if !(scan_speed > 0.0 && scan_speed.is_finite()) {
        return Err(PathError::InvalidArgument(format!(
            "scan speed must be positive, got {scan_speed}"
        )));
    }
    if !(layer_dwell > 0.0 && layer_dwell.is_finite()) {
        return Err(PathError::InvalidArgument(format!(
            "layer dwell must be positive, got {layer_dwell}"
        )));
    }
    let grid = GridIndex::new(mesh);
    let mut layers: BTreeMap<i64, BTreeSet<(i64, i64)>> = BTreeMap::new();
    for e in mesh.build_elements() {
        let [i, j, k] = grid.element_cell(mesh, e);
        layers.entry(k).or_default().insert((i, j));
    }
    if layers.is_empty() {
        return Err(PathError::InvalidArgument(
            "mesh has no build elements".into(),
        ));
    }
    let [dx, dy, _] = mesh.element_size;
    let center = |c: (i64, i64), z: f64| {
        [
            grid.origin[0] + (c.0 as f64 + 0.5) * dx,
            grid.origin[1] + (c.1 as f64 + 0.5) * dy,
            z,
        ]
    };

    // polylines of laser-on waypoints, one per run, tagged with layer index
    let mut polylines: Vec<(usize, Vec<[f64; 3]>)> = Vec::new();
    for (layer, (&k, cells)) in layers.iter().enumerate() {
        let z_top = grid.plane_z(k + 1);
        for (run, default_dir) in order_layer(cells, strategy) {
            let first_dir = if run.len() > 1 {
                (run[1].0 - run[0].0, run[1].1 - run[0].1)
            } else {
                default_dir
            };
            let last_dir = if run.len() > 1 {
                let n = run.len();
                (run[n - 1].0 - run[n - 2].0, run[n - 1].1 - run[n - 2].1)
            } else {
                default_dir
            };
            let c0 = center(run[0], z_top);
            let cn = center(*run.last().unwrap(), z_top);
            let mut pts = vec![[
                c0[0] - 0.5 * dx * first_dir.0 as f64,
                c0[1] - 0.5 * dy * first_dir.1 as f64,
                z_top,
            ]];
            pts.extend(run.iter().map(|&c| center(c, z_top)));
            pts.push([
                cn[0] + 0.5 * dx * last_dir.0 as f64,
                cn[1] + 0.5 * dy * last_dir.1 as f64,
                z_top,
            ]);
            // merge collinear waypoints
            let mut merged: Vec<[f64; 3]> = Vec::with_capacity(pts.len());
            for p in pts {
                while merged.len() >= 2
                    && same_direction(merged[merged.len() - 2], merged[merged.len() - 1], p)
                {
                    merged.pop();
                }
                merged.push(p);
            }
            polylines.push((layer, merged));
        }
    }

    let mut segments = Vec::new();
    let mut t = 0.0;
    let mut push =
        |segments: &mut Vec<ToolpathSegment>, a: [f64; 3], b: [f64; 3], on: bool, duration: f64| {
            segments.push(ToolpathSegment {
                t_start: t,
                t_end: t + duration,
                p_start: a,
                p_end: b,
                laser_on: on,
            });
            t += duration;
        };
    let mut prev: Option<(usize, [f64; 3])> = None;
    for (layer, pts) in &polylines {
        if let Some((prev_layer, end)) = prev {
            let start = pts[0];
            if prev_layer != *layer {
                push(&mut segments, end, start, false, layer_dwell);
            } else {
                let d = dist(end, start);
                if d > 0.0 {
                    push(&mut segments, end, start, false, d / scan_speed);
                }
            }
        }
        for w in pts.windows(2) {
            push(
                &mut segments,
                w[0],
                w[1],
                true,
                dist(w[0], w[1]) / scan_speed,
            );
        }
        prev = Some((*layer, *pts.last().unwrap()));
    }
    Ok(Toolpath {
        segments,
        scan_speed,
        layer_dwell,
    })
}

impl Toolpath {
    pub fn end_time(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.t_end)
    }

    pub fn validate(&self) -> Result<(), PathError> {
        for (i, s) in self.segments.iter().enumerate() {
            if !(s.t_end > s.t_start) {
                return Err(PathError::InvalidArgument(format!(
                    "segment {i} has non-positive duration"
                )));
            }
            if i > 0 && self.segments[i - 1].t_end != s.t_start {
                return Err(PathError::InvalidArgument(format!(
                    "segment {i} is not time-contiguous"
                )));
            }
        }
        Ok(())
    }

    /// Laser position and on/off flag at time `t`. A segment boundary belongs
    /// to the later segment; `t == end_time()` returns the final waypoint.
    pub fn laser_state_at(&self, t: f64) -> Result<LaserState, PathError> {
        let end = self.end_time();
        if !(t >= 0.0 && t <= end) || self.segments.is_empty() {
            return Err(PathError::OutOfRange { t, end });
        }
        let idx = self
            .segments
            .partition_point(|s| s.t_start <= t)
            .saturating_sub(1);
        let seg = &self.segments[idx];
        let position = if t >= seg.t_end {
            seg.p_end
        } else {
            seg.position(t)
        };
        Ok(LaserState {
            position,
            on: seg.laser_on,
        })
    }

    /// Laser state for every solver step `n` at `t = n dt`; off after the path ends.
    pub fn sample_steps(&self, dt: f64, n_steps: usize) -> Vec<LaserState> {
        (0..n_steps)
            .map(|n| {
                self.laser_state_at(n as f64 * dt).unwrap_or(LaserState {
                    position: self.segments.last().map_or([0.0; 3], |s| s.p_end),
                    on: false,
                })
            })
            .collect()
    }
}

/// Birth step of each element: `floor(t_visit / dt)`, where `t_visit` is the
/// time of closest approach of the first laser-on segment of the element's
/// own layer passing within half an element of its center.
pub fn birth_schedule(
    mesh: &HexMesh,
    path: &Toolpath,
    dt: f64,
) -> Result<BirthSchedule, PathError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(PathError::InvalidArgument(format!(
            "dt must be positive, got {dt}"
        )));
    }
    let [dx, dy, dz] = mesh.element_size;
    let reach = 0.5 * dx.min(dy);
    let mut birth_step = vec![0; mesh.n_elements()];
    let mut missing = Vec::new();
    for e in 0..mesh.n_elements() {
        if mesh.tags[e] == ElementTag::Substrate {
            continue;
        }
        let c = mesh.element_center(e);
        let z_top = c[2] + 0.5 * dz;
        let visit = path
            .segments
            .iter()
            .filter(|s| s.laser_on && (s.p_start[2] - z_top).abs() <= 1e-6 * dz)
            .find_map(|s| {
                let u = [s.p_end[0] - s.p_start[0], s.p_end[1] - s.p_start[1]];
                let w = [c[0] - s.p_start[0], c[1] - s.p_start[1]];
                let len2 = u[0] * u[0] + u[1] * u[1];
                let frac = if len2 > 0.0 {
                    ((w[0] * u[0] + w[1] * u[1]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let px = s.p_start[0] + frac * u[0] - c[0];
                let py = s.p_start[1] + frac * u[1] - c[1];
                ((px * px + py * py).sqrt() < reach)
                    .then(|| s.t_start + frac * (s.t_end - s.t_start))
            });
        match visit {
            Some(t) => birth_step[e] = (t / dt + 1e-9).floor() as usize,
            None => missing.push(e),
        }
    }
    if !missing.is_empty() {
        return Err(PathError::ScheduleIncomplete(missing));
    }
    Ok(BirthSchedule { birth_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_block_mesh, build_layered_mesh};

    fn layer_mesh(n: usize) -> HexMesh {
        build_layered_mesh([n, n, 1], &[(n, n)], [1.0, 1.0, 1.0]).unwrap()
    }

    fn centers_on(path: &Toolpath, mesh: &HexMesh) -> BTreeSet<ElementId> {
        // brute force: point-to-segment distance from every element's top center
        let mut hit = BTreeSet::new();
        for s in path.segments.iter().filter(|s| s.laser_on) {
            let d: Vec<f64> = (0..3).map(|i| s.p_end[i] - s.p_start[i]).collect();
            let len2: f64 = d.iter().map(|v| v * v).sum();
            for e in mesh.build_elements() {
                let mut c = mesh.element_center(e);
                c[2] += 0.5 * mesh.element_size[2];
                let u = ((0..3).map(|i| (c[i] - s.p_start[i]) * d[i]).sum::<f64>() / len2)
                    .clamp(0.0, 1.0);
                let gap: f64 = (0..3)
                    .map(|i| (s.p_start[i] + u * d[i] - c[i]).powi(2))
                    .sum();
                if gap.sqrt() < 1e-9 {
                    hit.insert(e);
                }
            }
        }
        hit
    }

    #[test]
    fn zigzag_three_by_three() {
        let mesh = layer_mesh(3);
        let path = generate_toolpath(&mesh, Strategy::ZigZag, 1.0, 1.0).unwrap();
        path.validate().unwrap();
        let on = path.segments.iter().filter(|s| s.laser_on).count();
        let off = path.segments.iter().filter(|s| !s.laser_on).count();
        assert_eq!((on, off), (3, 2));
        assert_eq!(centers_on(&path, &mesh).len(), 9);
        // rows alternate direction
        let rows: Vec<_> = path.segments.iter().filter(|s| s.laser_on).collect();
        assert!(rows[0].p_end[0] > rows[0].p_start[0]);
        assert!(rows[1].p_end[0] < rows[1].p_start[0]);
    }

    #[test]
    fn single_element_layer() {
        let mesh = layer_mesh(1);
        let path = generate_toolpath(&mesh, Strategy::ZigZag, 2.0, 1.0).unwrap();
        assert_eq!(path.segments.len(), 1);
        assert!(path.segments[0].laser_on);
        assert_eq!(path.end_time(), 0.5);
    }

    #[test]
    fn inward_four_by_four() {
        let mesh = layer_mesh(4);
        let path = generate_toolpath(&mesh, Strategy::InwardFromBoundary, 1.0, 1.0).unwrap();
        path.validate().unwrap();
        let all: BTreeSet<_> = mesh.build_elements().collect();
        assert_eq!(centers_on(&path, &mesh), all);
        // visit order: 12 perimeter centers, then the 4 inner ones
        let sched = birth_schedule(&mesh, &path, 1e-3).unwrap();
        let mut order: Vec<_> = mesh.build_elements().collect();
        order.sort_by_key(|&e| sched.birth_step[e]);
        let grid = GridIndex::new(&mesh);
        let ring = |e: ElementId| {
            let [i, j, _] = grid.element_cell(&mesh, e);
            i == 0 || j == 0 || i == 3 || j == 3
        };
        assert!(order[..12].iter().all(|&e| ring(e)));
        assert!(order[12..].iter().all(|&e| !ring(e)));
    }

    #[test]
    fn empty_build_rejected() {
        let mesh = build_block_mesh(2, 2, 1, [1.0; 3], ElementTag::Substrate).unwrap();
        assert!(generate_toolpath(&mesh, Strategy::ZigZag, 1.0, 1.0).is_err());
        let mesh = layer_mesh(2);
        assert!(generate_toolpath(&mesh, Strategy::ZigZag, 0.0, 1.0).is_err());
    }

    #[test]
    fn laser_state_queries() {
        let path = Toolpath {
            segments: vec![
                ToolpathSegment {
                    t_start: 0.0,
                    t_end: 1.0,
                    p_start: [0.0; 3],
                    p_end: [2e-3, 0.0, 0.0],
                    laser_on: true,
                },
                ToolpathSegment {
                    t_start: 1.0,
                    t_end: 2.0,
                    p_start: [2e-3, 0.0, 0.0],
                    p_end: [2e-3, 1e-3, 0.0],
                    laser_on: false,
                },
            ],
            scan_speed: 2e-3,
            layer_dwell: 1.0,
        };
        let mid = path.laser_state_at(0.5).unwrap();
        assert_eq!(mid.position, [1e-3, 0.0, 0.0]);
        assert!(mid.on);
        let b = path.laser_state_at(1.0).unwrap();
        assert_eq!(b.position, [2e-3, 0.0, 0.0]);
        assert!(!b.on);
        let end = path.laser_state_at(2.0).unwrap();
        assert_eq!(end.position, [2e-3, 1e-3, 0.0]);
        assert!(!end.on);
        assert!(matches!(
            path.laser_state_at(2.5),
            Err(PathError::OutOfRange { .. })
        ));
        assert!(path.laser_state_at(-0.1).is_err());
    }

    #[test]
    fn birth_floor_and_substrate() {
        // one element visited at t = 0.25 s
        let mesh = layer_mesh(1);
        let path = generate_toolpath(&mesh, Strategy::ZigZag, 2.0, 1.0).unwrap();
        let sched = birth_schedule(&mesh, &path, 0.1).unwrap();
        let build: Vec<_> = mesh.build_elements().collect();
        assert_eq!(sched.birth_step[build[0]], 2);
        assert_eq!(sched.birth_step[0], 0);
    }

    /// Independent walk of a unit-speed serpentine: element (i, j) center is
    /// reached at j * (3 + 1) + 0.5 + (i or 2 - i).
    #[test]
    fn zigzag_births_follow_serpentine() {
        let mesh = layer_mesh(3);
        let path = generate_toolpath(&mesh, Strategy::ZigZag, 1.0, 1.0).unwrap();
        let dt = 0.25;
        let sched = birth_schedule(&mesh, &path, dt).unwrap();
        let grid = GridIndex::new(&mesh);
        let mut serpentine = Vec::new();
        for e in mesh.build_elements() {
            let [i, j, _] = grid.element_cell(&mesh, e);
            let along = if j % 2 == 0 { i } else { 2 - i } as f64;
            let t = j as f64 * 4.0 + 0.5 + along;
            assert_eq!(sched.birth_step[e], (t / dt).floor() as usize);
            serpentine.push((t, sched.birth_step[e]));
        }
        serpentine.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(serpentine.windows(2).all(|w| w[1].1 > w[0].1));
    }

    #[test]
    fn incomplete_schedule_lists_offenders() {
        let mesh = layer_mesh(2);
        let mut path = generate_toolpath(&mesh, Strategy::ZigZag, 1.0, 1.0).unwrap();
        path.segments.truncate(1);
        match birth_schedule(&mesh, &path, 0.1) {
            Err(PathError::ScheduleIncomplete(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layers_deposit_in_order() {
        let mesh = build_layered_mesh([4, 4, 1], &[(3, 3), (2, 2), (3, 3)], [1e-3; 3]).unwrap();
        for strategy in [Strategy::ZigZag, Strategy::InwardFromBoundary] {
            let path = generate_toolpath(&mesh, strategy, 1e-2, 0.5).unwrap();
            path.validate().unwrap();
            let sched = birth_schedule(&mesh, &path, 0.01).unwrap();
            let grid = GridIndex::new(&mesh);
            let mut by_layer: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
            for e in mesh.build_elements() {
                by_layer
                    .entry(grid.element_cell(&mesh, e)[2])
                    .or_default()
                    .push(sched.birth_step[e]);
            }
            let layers: Vec<_> = by_layer.values().collect();
            for w in layers.windows(2) {
                assert!(w[1].iter().min() > w[0].iter().max());
            }
            // z rises by one element height per layer
            let zs: BTreeSet<i64> = path
                .segments
                .iter()
                .filter(|s| s.laser_on)
                .map(|s| (s.p_start[2] / 1e-3).round() as i64)
                .collect();
            assert_eq!(zs.into_iter().collect::<Vec<_>>(), vec![1, 2, 3]);
        }
    }

    use proptest::prelude::{prop_assert, proptest};

    proptest! {
        #[test]
        fn laser_motion_is_continuous(n in 1usize..5, t in 0.0f64..1.0, speed in 0.5f64..3.0) {
            let mesh = layer_mesh(n);
            let path = generate_toolpath(&mesh, Strategy::InwardFromBoundary, speed, 0.5).unwrap();
            let t = t * path.end_time();
            let eps = 1e-6;
            if t + eps <= path.end_time() {
                let a = path.laser_state_at(t).unwrap();
                let b = path.laser_state_at(t + eps).unwrap();
                prop_assert!(dist(a.position, b.position) <= speed * eps + 1e-12);
            }
        }
    }
}
