//! Voxel world model with partial observability.
//!
//! The world keeps two occupancy layers over one uniform grid: the ground
//! truth used by the simulator for collision checks, and the vehicle's
//! knowledge, which starts fully unknown and grows through range-limited
//! line-of-sight reveals. Planning treats unknown space as occupied, so
//! routes only ever cross space the vehicle has actually seen.
//!
//! Distance queries run on a squared Euclidean distance transform with
//! nearest-site tracking, so every query returns the closest obstacle
//! point and the outward surface normal alongside the signed distance.
//! The world bounds act as obstacles in every query.

use crate::error::{Error, Result};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

const NO_SITE: u32 = u32::MAX;
/// Hard cap on grid size to catch config mistakes early.
const MAX_CELLS: usize = 32_000_000;

/// What the vehicle believes about one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Knowledge {
    Unknown,
    Free,
    Occupied,
}

/// Procedural world family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    Empty,
    Corridor,
    Forest,
    Room,
}

impl WorldKind {
    fn as_str(&self) -> &'static str {
        match self {
            WorldKind::Empty => "empty",
            WorldKind::Corridor => "corridor",
            WorldKind::Forest => "forest",
            WorldKind::Room => "room",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "empty" => Ok(WorldKind::Empty),
            "corridor" => Ok(WorldKind::Corridor),
            "forest" => Ok(WorldKind::Forest),
            "room" => Ok(WorldKind::Room),
            other => Err(Error::Config(format!("unknown world kind '{other}'"))),
        }
    }
}

/// Vertical cylinder obstacle (full world height).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cylinder {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
}

/// Axis-aligned box obstacle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxObstacle {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

/// Result of a signed distance query.
#[derive(Debug, Clone, Copy)]
pub struct DistanceQuery {
    /// Signed distance to the closest obstacle surface [m]; negative
    /// inside obstacles or unknown space.
    pub distance: f64,
    /// Closest point on the obstacle surface.
    pub surface: Vector3<f64>,
    /// Outward direction: moving the query point this way increases the
    /// distance.
    pub normal: Vector3<f64>,
}

/// Squared-distance field with nearest-site tracking, in cell units.
struct DistanceField {
    /// Squared distance to the nearest obstacle cell center; `f64::MAX`
    /// when no obstacle exists.
    d2: Vec<f64>,
    /// Linear index of the nearest obstacle cell, `NO_SITE` when none.
    site: Vec<u32>,
    /// Nearest free cell (complement transform), used for the sign inside
    /// obstacles.
    site_free: Vec<u32>,
}

pub struct GridWorld {
    resolution: f64,
    min: Vector3<f64>,
    dims: [usize; 3],
    kind: WorldKind,
    seed: u64,
    truth: Vec<bool>,
    known: Vec<Knowledge>,
    cylinders: Vec<Cylinder>,
    boxes: Vec<BoxObstacle>,
    field: Option<DistanceField>,
}

impl GridWorld {
    /// Creates an all-free world spanning `min..max`, snapping the upper
    /// corner outward to whole cells.
    pub fn empty(min: Vector3<f64>, max: Vector3<f64>, resolution: f64) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::Config(format!("world resolution {resolution} must be > 0")));
        }
        let mut dims = [0usize; 3];
        for k in 0..3 {
            let span = max[k] - min[k];
            if !(span > 0.0) || !span.is_finite() {
                return Err(Error::Config(format!(
                    "world bounds axis {k}: max must exceed min"
                )));
            }
            dims[k] = ((span / resolution) - 1e-9).ceil().max(1.0) as usize;
        }
        let total = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Config("world grid size overflows".into()))?;
        if total > MAX_CELLS {
            return Err(Error::Config(format!(
                "world grid has {total} cells, cap is {MAX_CELLS}"
            )));
        }
        Ok(Self {
            resolution,
            min,
            dims,
            kind: WorldKind::Empty,
            seed: 0,
            truth: vec![false; total],
            known: vec![Knowledge::Unknown; total],
            cylinders: Vec::new(),
            boxes: Vec::new(),
            field: None,
        })
    }

    /// Generates a seeded world of the requested kind.
    pub fn generate(
        kind: WorldKind,
        min: Vector3<f64>,
        max: Vector3<f64>,
        resolution: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut world = Self::empty(min, max, resolution)?;
        world.kind = kind;
        world.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match kind {
            WorldKind::Empty => {}
            WorldKind::Corridor => world.build_corridor(),
            WorldKind::Forest => world.build_forest(&mut rng)?,
            WorldKind::Room => world.build_room(&mut rng)?,
        }
        Ok(world)
    }

    /// Rasterizes an explicit point cloud: every listed point marks its
    /// cell occupied. Points outside the bounds are rejected.
    pub fn from_points(
        points: &[Vector3<f64>],
        min: Vector3<f64>,
        max: Vector3<f64>,
        resolution: f64,
    ) -> Result<Self> {
        let mut world = Self::empty(min, max, resolution)?;
        for (i, p) in points.iter().enumerate() {
            let cell = world
                .world_to_cell(p)
                .ok_or_else(|| Error::InvalidInput(format!("point {i} outside bounds")))?;
            let idx = world.index(cell);
            world.truth[idx] = true;
        }
        Ok(world)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn kind(&self) -> WorldKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cylinders(&self) -> &[Cylinder] {
        &self.cylinders
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let max = self.min
            + Vector3::new(
                self.dims[0] as f64 * self.resolution,
                self.dims[1] as f64 * self.resolution,
                self.dims[2] as f64 * self.resolution,
            );
        (self.min, max)
    }

    fn index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn world_to_cell(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut c = [0usize; 3];
        for k in 0..3 {
            let v = ((p[k] - self.min[k]) / self.resolution).floor();
            if v < 0.0 || v >= self.dims[k] as f64 {
                return None;
            }
            c[k] = v as usize;
        }
        Some(c)
    }

    pub fn cell_center(&self, c: [usize; 3]) -> Vector3<f64> {
        Vector3::new(
            self.min.x + (c[0] as f64 + 0.5) * self.resolution,
            self.min.y + (c[1] as f64 + 0.5) * self.resolution,
            self.min.z + (c[2] as f64 + 0.5) * self.resolution,
        )
    }

    /// True collision test against ground truth; outside the bounds counts
    /// as collision.
    pub fn truth_occupied(&self, p: &Vector3<f64>) -> bool {
        match self.world_to_cell(p) {
            Some(c) => self.truth[self.index(c)],
            None => true,
        }
    }

    pub fn knowledge_at(&self, p: &Vector3<f64>) -> Knowledge {
        match self.world_to_cell(p) {
            Some(c) => self.known[self.index(c)],
            None => Knowledge::Occupied,
        }
    }

    fn set_truth_cell(&mut self, c: [usize; 3], value: bool) {
        let idx = self.index(c);
        self.truth[idx] = value;
    }

    // ----- generation -----

    fn build_corridor(&mut self) {
        // A straight 2 m wide free channel along x; everything else solid.
        let (min, max) = self.bounds();
        let y_center = 0.5 * (min.y + max.y);
        for idx in 0..self.truth.len() {
            let c = self.coords(idx);
            let y = self.cell_center(c).y;
            self.truth[idx] = (y - y_center).abs() > 1.0;
        }
    }

    fn rasterize_cylinder(&mut self, cyl: &Cylinder) {
        let r_cells = (cyl.radius / self.resolution).ceil() as i64 + 1;
        let center = Vector3::new(cyl.x, cyl.y, self.min.z);
        let cc = [
            ((cyl.x - self.min.x) / self.resolution).floor() as i64,
            ((cyl.y - self.min.y) / self.resolution).floor() as i64,
            0,
        ];
        for dy in -r_cells..=r_cells {
            for dx in -r_cells..=r_cells {
                let cx = cc[0] + dx;
                let cy = cc[1] + dy;
                if cx < 0 || cy < 0 || cx >= self.dims[0] as i64 || cy >= self.dims[1] as i64 {
                    continue;
                }
                let p = self.cell_center([cx as usize, cy as usize, 0]);
                let d = ((p.x - center.x).powi(2) + (p.y - center.y).powi(2)).sqrt();
                if d <= cyl.radius {
                    for cz in 0..self.dims[2] {
                        self.set_truth_cell([cx as usize, cy as usize, cz], true);
                    }
                }
            }
        }
    }

    fn rasterize_box(&mut self, b: &BoxObstacle) {
        let lo = b.min;
        let hi = b.max;
        for idx in 0..self.truth.len() {
            let p = self.cell_center(self.coords(idx));
            if p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z
            {
                self.truth[idx] = true;
            }
        }
    }

    fn build_forest(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let (min, max) = self.bounds();
        // Keep the ends clear so start and goal bands stay reachable.
        let x_lo = min.x + 2.5;
        let x_hi = max.x - 2.5;
        let y_lo = min.y + 0.6;
        let y_hi = max.y - 0.6;
        if x_hi <= x_lo || y_hi <= y_lo {
            return Err(Error::Generation("forest bounds too small".into()));
        }
        let area = (x_hi - x_lo) * (y_hi - y_lo);
        let target = ((area / 12.0).round() as usize).clamp(4, 80);
        let mut placed: Vec<Cylinder> = Vec::new();
        let mut attempts = 0usize;
        while placed.len() < target && attempts < 4000 {
            attempts += 1;
            let cand = Cylinder {
                x: rng.random_range(x_lo..x_hi),
                y: rng.random_range(y_lo..y_hi),
                radius: rng.random_range(0.1..0.4),
            };
            // Surface-to-surface gap of at least one meter keeps every
            // passage flyable.
            let ok = placed.iter().all(|c| {
                let d = ((c.x - cand.x).powi(2) + (c.y - cand.y).powi(2)).sqrt();
                d >= c.radius + cand.radius + 1.0
            });
            if ok {
                placed.push(cand);
            }
        }
        if placed.len() < 3 {
            return Err(Error::Generation(format!(
                "forest placement yielded only {} obstacles",
                placed.len()
            )));
        }
        for c in placed.clone() {
            self.rasterize_cylinder(&c);
        }
        self.cylinders = placed;
        Ok(())
    }

    fn build_room(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        let (min, max) = self.bounds();
        let x_lo = min.x + 1.2;
        let x_hi = max.x - 1.2;
        let y_lo = min.y + 0.8;
        let y_hi = max.y - 0.8;
        if x_hi <= x_lo || y_hi <= y_lo {
            return Err(Error::Generation("room bounds too small".into()));
        }
        let area = (x_hi - x_lo) * (y_hi - y_lo);
        let target = ((area / 10.0).round() as usize).clamp(3, 30);
        let mut placed: Vec<BoxObstacle> = Vec::new();
        let mut attempts = 0usize;
        while placed.len() < target && attempts < 4000 {
            attempts += 1;
            let sx = rng.random_range(0.4..1.2);
            let sy = rng.random_range(0.4..1.2);
            let sz = rng.random_range(0.6..(max.z - min.z));
            let cx = rng.random_range(x_lo..x_hi);
            let cy = rng.random_range(y_lo..y_hi);
            let cand = BoxObstacle {
                min: Vector3::new(cx - sx / 2.0, cy - sy / 2.0, min.z),
                max: Vector3::new(cx + sx / 2.0, cy + sy / 2.0, min.z + sz),
            };
            let ok = placed.iter().all(|b| {
                let gap_x = (cand.min.x - b.max.x).max(b.min.x - cand.max.x);
                let gap_y = (cand.min.y - b.max.y).max(b.min.y - cand.max.y);
                gap_x.max(gap_y) >= 1.0
            });
            if ok {
                placed.push(cand);
            }
        }
        if placed.is_empty() {
            return Err(Error::Generation("room placement produced no boxes".into()));
        }
        for b in placed.clone() {
            self.rasterize_box(&b);
        }
        self.boxes = placed;
        Ok(())
    }

    /// Samples a start/goal pair near opposite x ends with at least the
    /// requested true clearance.
    pub fn sample_start_goal(
        &self,
        seed: u64,
        clearance: f64,
    ) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let field = compute_edt(&self.dims, |idx| self.truth[idx]);
        let (min, max) = self.bounds();
        let z_mid = (0.5 * (min.z + max.z)).clamp(min.z + 0.5, max.z - 0.5);
        let pick = |x_lo: f64, x_hi: f64, rng: &mut ChaCha8Rng| -> Option<Vector3<f64>> {
            for _ in 0..500 {
                let p = Vector3::new(
                    rng.random_range(x_lo..x_hi),
                    rng.random_range(min.y + 0.7..max.y - 0.7),
                    z_mid,
                );
                let cell = self.world_to_cell(&p)?;
                let idx = self.index(cell);
                let d = if field.site[idx] == NO_SITE {
                    f64::MAX
                } else {
                    field.d2[idx].sqrt() * self.resolution - 0.5 * self.resolution
                };
                let d_bound = bounds_distance(&p, &min, &max).0;
                if d.min(d_bound) >= clearance {
                    return Some(p);
                }
            }
            None
        };
        let start = pick(min.x + 0.7, min.x + 2.0, &mut rng)
            .ok_or_else(|| Error::Generation("no clear start position found".into()))?;
        let goal = pick(max.x - 2.0, max.x - 0.7, &mut rng)
            .ok_or_else(|| Error::Generation("no clear goal position found".into()))?;
        Ok((start, goal))
    }

    // ----- observation -----

    /// Reveals everything (fully known map).
    pub fn reveal_all(&mut self) {
        for idx in 0..self.truth.len() {
            self.known[idx] = if self.truth[idx] { Knowledge::Occupied } else { Knowledge::Free };
        }
        self.field = None;
    }

    /// Range-limited line-of-sight reveal from `origin`.
    ///
    /// Every still-unknown cell within `radius` gets a ray cast toward it;
    /// cells along the ray become known, and the first occupied cell on a
    /// ray is itself revealed while everything behind it stays unknown.
    pub fn reveal(&mut self, origin: &Vector3<f64>, radius: f64) {
        let (min, max) = self.bounds();
        let mut o = *origin;
        for k in 0..3 {
            o[k] = o[k].clamp(min[k] + 1e-6, max[k] - 1e-6);
        }
        let lo = [
            (((o.x - radius) - self.min.x) / self.resolution).floor().max(0.0) as usize,
            (((o.y - radius) - self.min.y) / self.resolution).floor().max(0.0) as usize,
            (((o.z - radius) - self.min.z) / self.resolution).floor().max(0.0) as usize,
        ];
        let hi = [
            ((((o.x + radius) - self.min.x) / self.resolution).ceil() as usize)
                .min(self.dims[0]),
            ((((o.y + radius) - self.min.y) / self.resolution).ceil() as usize)
                .min(self.dims[1]),
            ((((o.z + radius) - self.min.z) / self.resolution).ceil() as usize)
                .min(self.dims[2]),
        ];
        let r_sq = radius * radius;
        for cz in lo[2]..hi[2] {
            for cy in lo[1]..hi[1] {
                for cx in lo[0]..hi[0] {
                    let cell = [cx, cy, cz];
                    let idx = self.index(cell);
                    if self.known[idx] != Knowledge::Unknown {
                        continue;
                    }
                    let center = self.cell_center(cell);
                    if (center - o).norm_squared() > r_sq {
                        continue;
                    }
                    self.cast_reveal_ray(&o, cell);
                }
            }
        }
        self.field = None;
    }

    /// Walks the grid from `origin` to the target cell, revealing along
    /// the way, stopping at the first occupied cell.
    fn cast_reveal_ray(&mut self, origin: &Vector3<f64>, target: [usize; 3]) {
        let target_center = self.cell_center(target);
        let dir = target_center - origin;
        let len = dir.norm();
        let start_cell = match self.world_to_cell(origin) {
            Some(c) => c,
            None => return,
        };
        if len < 1e-9 {
            self.reveal_cell(start_cell);
            return;
        }
        let u = dir / len;
        let mut cell = [start_cell[0] as i64, start_cell[1] as i64, start_cell[2] as i64];
        let tgt = [target[0] as i64, target[1] as i64, target[2] as i64];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        let mut step = [0i64; 3];
        for k in 0..3 {
            if u[k] > 1e-12 {
                step[k] = 1;
                let boundary = self.min[k] + (cell[k] + 1) as f64 * self.resolution;
                t_max[k] = (boundary - origin[k]) / u[k];
                t_delta[k] = self.resolution / u[k];
            } else if u[k] < -1e-12 {
                step[k] = -1;
                let boundary = self.min[k] + cell[k] as f64 * self.resolution;
                t_max[k] = (boundary - origin[k]) / u[k];
                t_delta[k] = self.resolution / (-u[k]);
            }
        }
        let max_steps = self.dims[0] + self.dims[1] + self.dims[2] + 3;
        for _ in 0..max_steps {
            let c = [cell[0] as usize, cell[1] as usize, cell[2] as usize];
            let blocked = self.reveal_cell(c);
            if blocked || cell == tgt {
                return;
            }
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            cell[axis] += step[axis];
            t_max[axis] += t_delta[axis];
            if cell[axis] < 0 || cell[axis] >= self.dims[axis] as i64 {
                return;
            }
        }
    }

    /// Marks one cell known; returns true when the cell blocks sight.
    fn reveal_cell(&mut self, c: [usize; 3]) -> bool {
        let idx = self.index(c);
        if self.truth[idx] {
            self.known[idx] = Knowledge::Occupied;
            true
        } else {
            self.known[idx] = Knowledge::Free;
            false
        }
    }

    // ----- distance queries -----

    /// Rebuilds the distance field over the current knowledge if needed.
    /// Unknown cells count as obstacles.
    pub fn ensure_field(&mut self) {
        if self.field.is_none() {
            let known = &self.known;
            self.field = Some(compute_edt(&self.dims, |idx| {
                known[idx] != Knowledge::Free
            }));
        }
    }

    fn field(&self) -> Result<&DistanceField> {
        self.field.as_ref().ok_or_else(|| {
            Error::Query("distance field is stale; call ensure_field after reveals".into())
        })
    }

    /// Signed distance from `p` to the nearest known obstacle, unknown
    /// space or world bound, with the closest surface point and outward
    /// normal.
    pub fn distance_query(&self, p: &Vector3<f64>) -> Result<DistanceQuery> {
        let field = self.field()?;
        let (min, max) = self.bounds();
        let mut pc = *p;
        for k in 0..3 {
            pc[k] = pc[k].clamp(min[k] + 1e-9, max[k] - 1e-9);
        }
        let cell = self
            .world_to_cell(&pc)
            .ok_or_else(|| Error::Query("query point cannot be mapped to a cell".into()))?;
        let idx = self.index(cell);
        let half = 0.5 * self.resolution;

        let obstacle_q = if self.known[idx] != Knowledge::Free {
            // Inside the obstacle set: the sign flips and the escape
            // direction points at the nearest free cell.
            if field.site_free[idx] == NO_SITE {
                Some(DistanceQuery {
                    distance: -(max - min).norm(),
                    surface: pc,
                    normal: Vector3::z(),
                })
            } else {
                let c_free = self.cell_center(self.coords(field.site_free[idx] as usize));
                let to_p = pc - c_free;
                let dist = to_p.norm();
                let dir = if dist > 1e-9 { to_p / dist } else { Vector3::z() };
                Some(DistanceQuery {
                    distance: half - dist,
                    surface: c_free + dir * half,
                    normal: -dir,
                })
            }
        } else if field.site[idx] != NO_SITE {
            let c_obs = self.cell_center(self.coords(field.site[idx] as usize));
            let to_p = pc - c_obs;
            let dist = to_p.norm();
            let dir = if dist > 1e-9 { to_p / dist } else { Vector3::z() };
            Some(DistanceQuery {
                distance: dist - half,
                surface: c_obs + dir * half,
                normal: dir,
            })
        } else {
            None
        };

        let (d_bound, face_axis, face_sign) = bounds_distance(p, &min, &max);
        let bound_q = {
            let mut surface = *p;
            let mut normal = Vector3::zeros();
            surface[face_axis] = if face_sign > 0 { max[face_axis] } else { min[face_axis] };
            normal[face_axis] = -(face_sign as f64);
            DistanceQuery { distance: d_bound, surface, normal }
        };

        Ok(match obstacle_q {
            Some(oq) if oq.distance <= bound_q.distance => oq,
            Some(_) => bound_q,
            None => bound_q,
        })
    }

    /// Cell-center clearance used by the planner, in meters.
    fn cell_clearance(&self, field: &DistanceField, idx: usize) -> f64 {
        if self.known[idx] != Knowledge::Free {
            return -1.0;
        }
        let d_obs = if field.site[idx] == NO_SITE {
            f64::MAX
        } else {
            field.d2[idx].sqrt() * self.resolution - 0.5 * self.resolution
        };
        let (min, max) = self.bounds();
        let p = self.cell_center(self.coords(idx));
        d_obs.min(bounds_distance(&p, &min, &max).0)
    }

    // ----- planning -----

    /// 26-connected shortest path between the cells containing `start`
    /// and `goal`, keeping `clearance` to obstacles, followed by
    /// line-of-sight shortcutting. Returns world-frame waypoints from
    /// `start` to `goal`.
    pub fn plan(
        &self,
        start: &Vector3<f64>,
        goal: &Vector3<f64>,
        clearance: f64,
    ) -> Result<Vec<Vector3<f64>>> {
        let field = self.field()?;
        let start_cell = self.nearest_passable_cell(field, start, clearance).ok_or_else(|| {
            Error::Planning(format!("no passable cell near start {start:?}"))
        })?;
        let goal_cell = self.nearest_passable_cell(field, goal, clearance).ok_or_else(|| {
            Error::Planning(format!("no passable cell near goal {goal:?}"))
        })?;

        let cells = self
            .astar(field, start_cell, goal_cell, clearance)
            .ok_or_else(|| Error::Planning("no path found".into()))?;
        let mut pts: Vec<Vector3<f64>> = Vec::with_capacity(cells.len() + 2);
        pts.push(*start);
        for c in &cells {
            pts.push(self.cell_center(*c));
        }
        pts.push(*goal);
        Ok(self.shortcut(&pts, clearance))
    }

    /// Deterministically picks the passable cell nearest to `p` within
    /// half a meter.
    fn nearest_passable_cell(
        &self,
        field: &DistanceField,
        p: &Vector3<f64>,
        clearance: f64,
    ) -> Option<[usize; 3]> {
        let base = self.world_to_cell(p)?;
        let r = (0.5 / self.resolution).ceil() as i64;
        let mut best: Option<([usize; 3], f64)> = None;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let c = [
                        base[0] as i64 + dx,
                        base[1] as i64 + dy,
                        base[2] as i64 + dz,
                    ];
                    if c.iter().zip(&self.dims).any(|(v, d)| *v < 0 || *v >= **(&d) as i64) {
                        continue;
                    }
                    let cell = [c[0] as usize, c[1] as usize, c[2] as usize];
                    let idx = self.index(cell);
                    if self.cell_clearance(field, idx) < clearance {
                        continue;
                    }
                    let d = (self.cell_center(cell) - p).norm_squared();
                    let better = match best {
                        None => true,
                        Some((_, bd)) => d < bd - 1e-12,
                    };
                    if better {
                        best = Some((cell, d));
                    }
                }
            }
        }
        best.map(|(c, _)| c)
    }

    fn astar(
        &self,
        field: &DistanceField,
        start: [usize; 3],
        goal: [usize; 3],
        clearance: f64,
    ) -> Option<Vec<[usize; 3]>> {
        let total = self.truth.len();
        let start_idx = self.index(start);
        let goal_idx = self.index(goal);
        let goal_p = self.cell_center(goal);
        let mut g_cost = vec![f64::INFINITY; total];
        let mut parent = vec![u32::MAX; total];
        let mut closed = vec![false; total];
        let mut heap: BinaryHeap<Reverse<(u64, u32)>> = BinaryHeap::new();
        g_cost[start_idx] = 0.0;
        let h0 = (self.cell_center(start) - goal_p).norm();
        heap.push(Reverse((h0.to_bits(), start_idx as u32)));

        while let Some(Reverse((_, idx32))) = heap.pop() {
            let idx = idx32 as usize;
            if closed[idx] {
                continue;
            }
            closed[idx] = true;
            if idx == goal_idx {
                let mut path = Vec::new();
                let mut cur = idx;
                loop {
                    path.push(self.coords(cur));
                    if cur == start_idx {
                        break;
                    }
                    cur = parent[cur] as usize;
                }
                path.reverse();
                return Some(path);
            }
            let c = self.coords(idx);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let n = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        if n[0] < 0
                            || n[1] < 0
                            || n[2] < 0
                            || n[0] >= self.dims[0] as i64
                            || n[1] >= self.dims[1] as i64
                            || n[2] >= self.dims[2] as i64
                        {
                            continue;
                        }
                        let ncell = [n[0] as usize, n[1] as usize, n[2] as usize];
                        let nidx = self.index(ncell);
                        if closed[nidx] || self.cell_clearance(field, nidx) < clearance {
                            continue;
                        }
                        let step = self.resolution
                            * ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                        let cand = g_cost[idx] + step;
                        if cand < g_cost[nidx] - 1e-12 {
                            g_cost[nidx] = cand;
                            parent[nidx] = idx as u32;
                            let f = cand + (self.cell_center(ncell) - goal_p).norm();
                            heap.push(Reverse((f.to_bits(), nidx as u32)));
                        }
                    }
                }
            }
        }
        None
    }

    /// Greedy line-of-sight shortcutting over a waypoint chain.
    fn shortcut(&self, pts: &[Vector3<f64>], clearance: f64) -> Vec<Vector3<f64>> {
        if pts.len() <= 2 {
            return pts.to_vec();
        }
        let mut out = vec![pts[0]];
        let mut i = 0usize;
        while i + 1 < pts.len() {
            let mut j = pts.len() - 1;
            while j > i + 1 {
                if self.segment_clear(&pts[i], &pts[j], clearance) {
                    break;
                }
                j -= 1;
            }
            out.push(pts[j]);
            i = j;
        }
        out
    }

    /// Checks a straight segment against the known map at sub-cell
    /// sampling density.
    pub fn segment_clear(&self, a: &Vector3<f64>, b: &Vector3<f64>, clearance: f64) -> bool {
        let len = (b - a).norm();
        let steps = ((len / (0.5 * self.resolution)).ceil() as usize).max(1);
        for s in 0..=steps {
            let p = a + (b - a) * (s as f64 / steps as f64);
            match self.distance_query(&p) {
                Ok(q) => {
                    if q.distance < clearance * 0.999 {
                        return false;
                    }
                }
                Err(_) => return false,
            }
        }
        true
    }

    // ----- persistence -----

    /// Writes the world (truth layer and provenance) as a text file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        writeln!(w, "world v1")?;
        writeln!(w, "kind {}", self.kind.as_str())?;
        writeln!(w, "seed {}", self.seed)?;
        writeln!(w, "resolution {}", self.resolution)?;
        writeln!(w, "min {} {} {}", self.min.x, self.min.y, self.min.z)?;
        writeln!(w, "dims {} {} {}", self.dims[0], self.dims[1], self.dims[2])?;
        writeln!(w, "cylinders {}", self.cylinders.len())?;
        for c in &self.cylinders {
            writeln!(w, "{} {} {}", c.x, c.y, c.radius)?;
        }
        writeln!(w, "boxes {}", self.boxes.len())?;
        for b in &self.boxes {
            writeln!(
                w,
                "{} {} {} {} {} {}",
                b.min.x, b.min.y, b.min.z, b.max.x, b.max.y, b.max.z
            )?;
        }
        let runs = rle_encode(&self.truth);
        writeln!(w, "occupancy {} {}", self.truth.len(), runs.len())?;
        for chunk in runs.chunks(16) {
            let line: Vec<String> =
                chunk.iter().map(|(len, v)| format!("{}:{}", len, u8::from(*v))).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        writeln!(w, "end")?;
        Ok(())
    }

    /// Loads a world saved by [`GridWorld::save`]. Knowledge starts fully
    /// unknown.
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines();
        let bad = |msg: &str| Error::Config(format!("world file {}: {msg}", path.display()));
        let next_line = |lines: &mut std::io::Lines<BufReader<std::fs::File>>| -> Result<String> {
            match lines.next() {
                Some(Ok(l)) => Ok(l),
                Some(Err(e)) => Err(Error::Io(e)),
                None => Err(Error::Config(format!(
                    "world file {}: unexpected end of file",
                    path.display()
                ))),
            }
        };

        let header = next_line(&mut lines)?;
        if header.trim() != "world v1" {
            return Err(bad("missing 'world v1' header"));
        }
        let kind_line = next_line(&mut lines)?;
        let kind = WorldKind::parse(
            kind_line.strip_prefix("kind ").ok_or_else(|| bad("expected 'kind'"))?.trim(),
        )?;
        let seed: u64 = parse_tail(&next_line(&mut lines)?, "seed", 1, &bad)?[0] as u64;
        let resolution = parse_tail_f(&next_line(&mut lines)?, "resolution", 1, &bad)?[0];
        let minv = parse_tail_f(&next_line(&mut lines)?, "min", 3, &bad)?;
        let dimsv = parse_tail(&next_line(&mut lines)?, "dims", 3, &bad)?;

        let min = Vector3::new(minv[0], minv[1], minv[2]);
        let dims = [dimsv[0] as usize, dimsv[1] as usize, dimsv[2] as usize];
        let max = min
            + Vector3::new(
                dims[0] as f64 * resolution,
                dims[1] as f64 * resolution,
                dims[2] as f64 * resolution,
            );
        let mut world = Self::empty(min, max, resolution)?;
        if world.dims != dims {
            return Err(bad("dims do not round-trip with resolution"));
        }
        world.kind = kind;
        world.seed = seed;

        let n_cyl = parse_tail(&next_line(&mut lines)?, "cylinders", 1, &bad)?[0] as usize;
        for _ in 0..n_cyl {
            let vals = parse_floats(&next_line(&mut lines)?, 3, &bad)?;
            world.cylinders.push(Cylinder { x: vals[0], y: vals[1], radius: vals[2] });
        }
        let n_box = parse_tail(&next_line(&mut lines)?, "boxes", 1, &bad)?[0] as usize;
        for _ in 0..n_box {
            let v = parse_floats(&next_line(&mut lines)?, 6, &bad)?;
            world.boxes.push(BoxObstacle {
                min: Vector3::new(v[0], v[1], v[2]),
                max: Vector3::new(v[3], v[4], v[5]),
            });
        }
        let occ = parse_tail(&next_line(&mut lines)?, "occupancy", 2, &bad)?;
        let total = occ[0] as usize;
        let n_runs = occ[1] as usize;
        if total != world.truth.len() {
            return Err(bad(&format!(
                "occupancy count {total} does not match grid size {}",
                world.truth.len()
            )));
        }
        let mut filled = 0usize;
        let mut runs_seen = 0usize;
        while runs_seen < n_runs {
            let line = next_line(&mut lines)?;
            for tok in line.split_whitespace() {
                let (len_s, val_s) =
                    tok.split_once(':').ok_or_else(|| bad(&format!("bad run '{tok}'")))?;
                let len: usize =
                    len_s.parse().map_err(|_| bad(&format!("bad run length '{len_s}'")))?;
                let val = match val_s {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(&format!("bad run value '{val_s}'"))),
                };
                if filled + len > total {
                    return Err(bad("occupancy runs overflow the grid"));
                }
                for idx in filled..filled + len {
                    world.truth[idx] = val;
                }
                filled += len;
                runs_seen += 1;
            }
        }
        if filled != total {
            return Err(bad(&format!("occupancy runs cover {filled} of {total} cells")));
        }
        let tail = next_line(&mut lines)?;
        if tail.trim() != "end" {
            return Err(bad("missing 'end' terminator"));
        }
        Ok(world)
    }

    /// Reads a plain x-y-z point list (one point per line, `#` comments)
    /// and rasterizes it.
    pub fn load_points(
        path: &Path,
        min: Vector3<f64>,
        max: Vector3<f64>,
        resolution: f64,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut pts = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    Error::Config(format!(
                        "point file {}: line {} is not numeric",
                        path.display(),
                        ln + 1
                    ))
                })?;
            if vals.len() != 3 {
                return Err(Error::Config(format!(
                    "point file {}: line {} needs exactly x y z",
                    path.display(),
                    ln + 1
                )));
            }
            pts.push(Vector3::new(vals[0], vals[1], vals[2]));
        }
        Self::from_points(&pts, min, max, resolution)
    }
}

/// Signed distance from `p` to the world bounds (negative outside) along
/// with the closest face (axis, +1 for the max face).
fn bounds_distance(
    p: &Vector3<f64>,
    min: &Vector3<f64>,
    max: &Vector3<f64>,
) -> (f64, usize, i32) {
    let mut best = f64::MAX;
    let mut axis = 0usize;
    let mut sign = 1i32;
    for k in 0..3 {
        let d_lo = p[k] - min[k];
        if d_lo < best {
            best = d_lo;
            axis = k;
            sign = -1;
        }
        let d_hi = max[k] - p[k];
        if d_hi < best {
            best = d_hi;
            axis = k;
            sign = 1;
        }
    }
    (best, axis, sign)
}

fn rle_encode(bits: &[bool]) -> Vec<(usize, bool)> {
    let mut runs = Vec::new();
    let mut i = 0usize;
    while i < bits.len() {
        let v = bits[i];
        let mut j = i + 1;
        while j < bits.len() && bits[j] == v {
            j += 1;
        }
        runs.push((j - i, v));
        i = j;
    }
    runs
}

fn parse_tail(line: &str, key: &str, n: usize, bad: &dyn Fn(&str) -> Error) -> Result<Vec<i64>> {
    let rest = line
        .strip_prefix(key)
        .ok_or_else(|| bad(&format!("expected '{key}', got '{line}'")))?;
    let vals: Vec<i64> = rest
        .split_whitespace()
        .map(|t| t.parse::<i64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(&format!("non-integer value in '{line}'")))?;
    if vals.len() != n {
        return Err(bad(&format!("'{key}' expects {n} values")));
    }
    if vals.iter().any(|v| *v < 0) {
        return Err(bad(&format!("'{key}' values must be non-negative")));
    }
    Ok(vals)
}

fn parse_tail_f(line: &str, key: &str, n: usize, bad: &dyn Fn(&str) -> Error) -> Result<Vec<f64>> {
    let rest = line
        .strip_prefix(key)
        .ok_or_else(|| bad(&format!("expected '{key}', got '{line}'")))?;
    parse_floats(rest, n, bad)
}

fn parse_floats(text: &str, n: usize, bad: &dyn Fn(&str) -> Error) -> Result<Vec<f64>> {
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(&format!("non-numeric value in '{text}'")))?;
    if vals.len() != n {
        return Err(bad(&format!("expected {n} numbers in '{text}'")));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(bad("values must be finite"));
    }
    Ok(vals)
}

/// Exact squared Euclidean distance transform with nearest-site tracking,
/// separable lower-envelope scan per axis.
fn compute_edt(dims: &[usize; 3], obstacle: impl Fn(usize) -> bool) -> DistanceField {
    let total = dims[0] * dims[1] * dims[2];
    let mut d2 = vec![f64::INFINITY; total];
    let mut site = vec![NO_SITE; total];
    let mut d2_free = vec![f64::INFINITY; total];
    let mut site_free = vec![NO_SITE; total];
    for idx in 0..total {
        if obstacle(idx) {
            d2[idx] = 0.0;
            site[idx] = idx as u32;
        } else {
            d2_free[idx] = 0.0;
            site_free[idx] = idx as u32;
        }
    }
    edt_sweep(dims, &mut d2, &mut site);
    edt_sweep(dims, &mut d2_free, &mut site_free);
    for v in d2.iter_mut() {
        if !v.is_finite() {
            *v = f64::MAX;
        }
    }
    DistanceField { d2, site, site_free }
}

fn edt_sweep(dims: &[usize; 3], d2: &mut [f64], site: &mut [u32]) {
    let [nx, ny, nz] = *dims;
    let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
    let n_max = nx.max(ny).max(nz);
    let mut f = vec![0.0f64; n_max];
    let mut s_in = vec![NO_SITE; n_max];
    let mut out_d = vec![0.0f64; n_max];
    let mut out_s = vec![NO_SITE; n_max];

    // X pass.
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                f[x] = d2[idx(x, y, z)];
                s_in[x] = site[idx(x, y, z)];
            }
            edt_1d(&f[..nx], &s_in[..nx], &mut out_d[..nx], &mut out_s[..nx]);
            for x in 0..nx {
                d2[idx(x, y, z)] = out_d[x];
                site[idx(x, y, z)] = out_s[x];
            }
        }
    }
    // Y pass.
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                f[y] = d2[idx(x, y, z)];
                s_in[y] = site[idx(x, y, z)];
            }
            edt_1d(&f[..ny], &s_in[..ny], &mut out_d[..ny], &mut out_s[..ny]);
            for y in 0..ny {
                d2[idx(x, y, z)] = out_d[y];
                site[idx(x, y, z)] = out_s[y];
            }
        }
    }
    // Z pass.
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                f[z] = d2[idx(x, y, z)];
                s_in[z] = site[idx(x, y, z)];
            }
            edt_1d(&f[..nz], &s_in[..nz], &mut out_d[..nz], &mut out_s[..nz]);
            for z in 0..nz {
                d2[idx(x, y, z)] = out_d[z];
                site[idx(x, y, z)] = out_s[z];
            }
        }
    }
}

/// One-dimensional squared distance transform of a sampled function via
/// the lower envelope of parabolas, carrying the winning site along.
fn edt_1d(f: &[f64], s_in: &[u32], out_d: &mut [f64], out_s: &mut [u32]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&i| f[i].is_finite()).collect();
    if finite.is_empty() {
        for i in 0..n {
            out_d[i] = f64::INFINITY;
            out_s[i] = NO_SITE;
        }
        return;
    }
    let mut v = vec![0usize; finite.len()];
    let mut z = vec![0.0f64; finite.len() + 1];
    let mut k = 0usize;
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let sq = |a: usize| (a * a) as f64;
    for &q in finite.iter().skip(1) {
        loop {
            let p = v[k];
            let s = ((f[q] + sq(q)) - (f[p] + sq(p))) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0usize;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q as f64 - p as f64;
        out_d[q] = dq * dq + f[p];
        out_s[q] = s_in[p];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_world() -> GridWorld {
        GridWorld::empty(Vector3::new(0.0, 0.0, 0.0), Vector3::new(2.0, 1.6, 0.8), 0.1).unwrap()
    }

    #[test]
    fn edt_matches_brute_force_with_sites() {
        let dims = [14usize, 11, 6];
        let total = dims[0] * dims[1] * dims[2];
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mask: Vec<bool> = (0..total).map(|_| rng.random_range(0.0..1.0) < 0.12).collect();
            if !mask.iter().any(|m| *m) {
                continue;
            }
            let field = compute_edt(&dims, |i| mask[i]);
            let coords = |idx: usize| {
                let x = idx % dims[0];
                let rest = idx / dims[0];
                (x as f64, (rest % dims[1]) as f64, (rest / dims[1]) as f64)
            };
            for idx in 0..total {
                let (x, y, z) = coords(idx);
                let mut best = f64::INFINITY;
                for j in 0..total {
                    if !mask[j] {
                        continue;
                    }
                    let (ox, oy, oz) = coords(j);
                    let d = (x - ox).powi(2) + (y - oy).powi(2) + (z - oz).powi(2);
                    best = best.min(d);
                }
                assert_relative_eq!(field.d2[idx], best, epsilon = 1e-9);
                let s = field.site[idx] as usize;
                assert!(mask[s], "site must be an obstacle cell");
                let (sx, sy, sz) = coords(s);
                let ds = (x - sx).powi(2) + (y - sy).powi(2) + (z - sz).powi(2);
                assert_relative_eq!(ds, best, epsilon = 1e-9, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn distance_query_matches_single_cell_analytics() {
        let mut w = small_world();
        let cell = w.world_to_cell(&Vector3::new(1.05, 0.85, 0.45)).unwrap();
        let idx = w.index(cell);
        w.truth[idx] = true;
        w.reveal_all();
        w.ensure_field();
        let center = w.cell_center(cell);
        let p = Vector3::new(1.05 + 0.3, 0.85, 0.45);
        let q = w.distance_query(&p).unwrap();
        let expected = (p - center).norm() - 0.05;
        assert_relative_eq!(q.distance, expected, epsilon = 1e-12);
        assert_relative_eq!(q.normal.dot(&Vector3::x()), 1.0, epsilon = 1e-12);
        assert_relative_eq!((q.surface - center).norm(), 0.05, epsilon = 1e-12);
        // Query inside the occupied cell: negative distance, escape normal.
        let q_in = w.distance_query(&center).unwrap();
        assert!(q_in.distance < 0.0);
        assert!(q_in.normal.norm() > 0.9);
    }

    #[test]
    fn bounds_act_as_obstacles() {
        let mut w = small_world();
        w.reveal_all();
        w.ensure_field();
        let p = Vector3::new(0.12, 0.8, 0.4);
        let q = w.distance_query(&p).unwrap();
        assert_relative_eq!(q.distance, 0.12, epsilon = 1e-12);
        assert_relative_eq!(q.normal.dot(&Vector3::x()), 1.0, epsilon = 1e-12);
        assert_relative_eq!(q.surface.x, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn unknown_space_reads_as_obstacle() {
        let mut w = small_world();
        w.ensure_field();
        let q = w.distance_query(&Vector3::new(1.0, 0.8, 0.4)).unwrap();
        assert!(q.distance <= 0.0, "unknown space must not look free");
    }

    #[test]
    fn reveal_respects_occlusion_and_radius() {
        let mut w =
            GridWorld::empty(Vector3::zeros(), Vector3::new(6.0, 1.0, 0.6), 0.1).unwrap();
        // A wall across x = 2.0..2.1 blocking the corridor.
        for cy in 0..w.dims[1] {
            for cz in 0..w.dims[2] {
                w.set_truth_cell([20, cy, cz], true);
            }
        }
        let origin = Vector3::new(0.55, 0.55, 0.35);
        w.reveal(&origin, 1.2);
        // Free cell inside range and sight: revealed.
        assert_eq!(w.knowledge_at(&Vector3::new(1.15, 0.55, 0.35)), Knowledge::Free);
        // Beyond the radius: still unknown.
        assert_eq!(w.knowledge_at(&Vector3::new(3.5, 0.55, 0.35)), Knowledge::Unknown);
        let mut w2 = w;
        w2.reveal(&origin, 8.0);
        // The wall face is revealed as occupied.
        assert_eq!(w2.knowledge_at(&Vector3::new(2.05, 0.55, 0.35)), Knowledge::Occupied);
        // Space behind the wall stays unknown.
        assert_eq!(w2.knowledge_at(&Vector3::new(3.0, 0.55, 0.35)), Knowledge::Unknown);
        assert_eq!(w2.knowledge_at(&Vector3::new(5.5, 0.55, 0.35)), Knowledge::Unknown);
    }

    #[test]
    fn astar_matches_dijkstra_cost() {
        for seed in 0..6u64 {
            let mut w = GridWorld::generate(
                WorldKind::Forest,
                Vector3::new(-6.0, -4.0, 0.0),
                Vector3::new(6.0, 4.0, 1.0),
                0.2,
                seed,
            )
            .unwrap();
            w.reveal_all();
            w.ensure_field();
            let field = w.field.as_ref().unwrap();
            let start = w.world_to_cell(&Vector3::new(-5.0, -3.0, 0.5)).unwrap();
            let goal = w.world_to_cell(&Vector3::new(5.0, 3.0, 0.5)).unwrap();
            let clearance = 0.3;
            if w.cell_clearance(field, w.index(start)) < clearance
                || w.cell_clearance(field, w.index(goal)) < clearance
            {
                continue;
            }
            let astar_path = w.astar(field, start, goal, clearance);
            let dij = dijkstra_cost(&w, field, start, goal, clearance);
            match (astar_path, dij) {
                (Some(path), Some(cost)) => {
                    let mut a_cost = 0.0;
                    for k in 1..path.len() {
                        a_cost += (w.cell_center(path[k]) - w.cell_center(path[k - 1])).norm();
                    }
                    assert_relative_eq!(a_cost, cost, epsilon = 1e-9);
                }
                (None, None) => {}
                (a, d) => panic!("A* and reference search disagree: {:?} vs {:?}", a.is_some(), d),
            }
        }
    }

    fn dijkstra_cost(
        w: &GridWorld,
        field: &DistanceField,
        start: [usize; 3],
        goal: [usize; 3],
        clearance: f64,
    ) -> Option<f64> {
        let total = w.truth.len();
        let mut dist = vec![f64::INFINITY; total];
        let mut closed = vec![false; total];
        let mut heap: BinaryHeap<Reverse<(u64, u32)>> = BinaryHeap::new();
        let start_idx = w.index(start);
        let goal_idx = w.index(goal);
        dist[start_idx] = 0.0;
        heap.push(Reverse((0f64.to_bits(), start_idx as u32)));
        while let Some(Reverse((_, i32v))) = heap.pop() {
            let idx = i32v as usize;
            if closed[idx] {
                continue;
            }
            closed[idx] = true;
            if idx == goal_idx {
                return Some(dist[idx]);
            }
            let c = w.coords(idx);
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 && dz == 0 {
                            continue;
                        }
                        let n = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        if n[0] < 0
                            || n[1] < 0
                            || n[2] < 0
                            || n[0] >= w.dims[0] as i64
                            || n[1] >= w.dims[1] as i64
                            || n[2] >= w.dims[2] as i64
                        {
                            continue;
                        }
                        let ncell = [n[0] as usize, n[1] as usize, n[2] as usize];
                        let nidx = w.index(ncell);
                        if closed[nidx] || w.cell_clearance(field, nidx) < clearance {
                            continue;
                        }
                        let step =
                            w.resolution * ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                        if dist[idx] + step < dist[nidx] - 1e-12 {
                            dist[nidx] = dist[idx] + step;
                            heap.push(Reverse((dist[nidx].to_bits(), nidx as u32)));
                        }
                    }
                }
            }
        }
        None
    }

    #[test]
    fn plan_shortcut_keeps_clearance() {
        let mut w = GridWorld::generate(
            WorldKind::Forest,
            Vector3::new(-12.0, -8.0, 0.0),
            Vector3::new(12.0, 8.0, 3.0),
            0.1,
            11,
        )
        .unwrap();
        w.reveal_all();
        w.ensure_field();
        let (start, goal) = w.sample_start_goal(11, 0.6).unwrap();
        let path = w.plan(&start, &goal, 0.3).unwrap();
        assert!(path.len() >= 2);
        assert_relative_eq!((path[0] - start).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((path.last().unwrap() - goal).norm(), 0.0, epsilon = 1e-12);
        for leg in path.windows(2) {
            assert!(w.segment_clear(&leg[0], &leg[1], 0.3));
        }
    }

    #[test]
    fn forest_generation_respects_gaps_and_sampling() {
        for seed in 0..4u64 {
            let w = GridWorld::generate(
                WorldKind::Forest,
                Vector3::new(-12.0, -8.0, 0.0),
                Vector3::new(12.0, 8.0, 3.0),
                0.1,
                seed,
            )
            .unwrap();
            for (i, a) in w.cylinders.iter().enumerate() {
                assert!(a.radius >= 0.1 && a.radius <= 0.4);
                for b in w.cylinders.iter().skip(i + 1) {
                    let d = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                    assert!(
                        d >= a.radius + b.radius + 1.0 - 1e-9,
                        "cylinder gap violated: {d}"
                    );
                }
            }
            let (start, goal) = w.sample_start_goal(seed, 0.6).unwrap();
            for p in [start, goal] {
                assert!(!w.truth_occupied(&p));
                for c in &w.cylinders {
                    let d = ((p.x - c.x).powi(2) + (p.y - c.y).powi(2)).sqrt() - c.radius;
                    assert!(d >= 0.55, "start/goal too close to an obstacle: {d}");
                }
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("world.txt");
        let w = GridWorld::generate(
            WorldKind::Forest,
            Vector3::new(-12.0, -8.0, 0.0),
            Vector3::new(12.0, 8.0, 3.0),
            0.1,
            5,
        )
        .unwrap();
        w.save(&path).unwrap();
        let r = GridWorld::load(&path).unwrap();
        assert_eq!(r.dims, w.dims);
        assert_eq!(r.kind, w.kind);
        assert_eq!(r.seed, w.seed);
        assert_eq!(r.truth, w.truth);
        assert_eq!(r.cylinders.len(), w.cylinders.len());
        assert!(r.known.iter().all(|k| *k == Knowledge::Unknown));
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "world v1\nkind forest\nseed 1\n").unwrap();
        assert!(matches!(GridWorld::load(&path), Err(Error::Config(_))));
        std::fs::write(&path, "not a world\n").unwrap();
        assert!(matches!(GridWorld::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn point_import_rasterizes_cells() {
        let pts = vec![Vector3::new(0.55, 0.35, 0.15), Vector3::new(1.25, 0.95, 0.55)];
        let w = GridWorld::from_points(
            &pts,
            Vector3::zeros(),
            Vector3::new(2.0, 1.6, 0.8),
            0.1,
        )
        .unwrap();
        assert!(w.truth_occupied(&pts[0]));
        assert!(w.truth_occupied(&pts[1]));
        assert!(!w.truth_occupied(&Vector3::new(0.2, 0.2, 0.2)));
        assert!(GridWorld::from_points(
            &[Vector3::new(9.0, 0.0, 0.0)],
            Vector3::zeros(),
            Vector3::new(2.0, 1.6, 0.8),
            0.1
        )
        .is_err());
    }
}
