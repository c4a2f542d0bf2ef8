//! Grid, pose and trajectory primitives plus raycasting, distance fields and
//! circle-footprint collision tests.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Cell values at or below this are occupied.
pub const OCCUPIED_MAX: u8 = 50;
/// Cell values at or above this are free. Anything between is unknown and
/// treated as occupied for collision purposes.
pub const FREE_MIN: u8 = 250;

pub const OCCUPIED: u8 = 0;
pub const FREE: u8 = 255;

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn scale(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl From<(f64, f64)> for Vec2 {
    fn from((x, y): (f64, f64)) -> Self {
        Vec2::new(x, y)
    }
}

/// Planar pose; `theta` is kept in `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// A circular obstacle (dynamic obstacles, robot footprints).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: Vec2,
    pub radius: f64,
}

impl Circle {
    pub fn new(center: Vec2, radius: f64) -> Self {
        Self { center, radius }
    }
}

/// Row-major occupancy grid. Row 0 is the bottom row (smallest y); cell
/// `(0, 0)` has its lower-left corner at `origin`.
///
/// Serialises as `{width, height, resolution, origin: [x, y], data}` with the
/// cells base64-encoded in `data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub struct OccupancyGrid {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Vec2,
    cells: Vec<u8>,
}

impl OccupancyGrid {
    pub fn new(
        width: usize,
        height: usize,
        resolution: f64,
        origin: Vec2,
        cells: Vec<u8>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidGrid("width and height must be positive".into()));
        }
        if width.checked_mul(height) != Some(cells.len()) {
            return Err(Error::InvalidGrid(format!(
                "{}x{} grid needs {} cells, got {}",
                width,
                height,
                width * height,
                cells.len()
            )));
        }
        if !(resolution.is_finite() && resolution > 0.0) {
            return Err(Error::InvalidGrid(format!("resolution must be > 0, got {resolution}")));
        }
        if !(origin.x.is_finite() && origin.y.is_finite()) {
            return Err(Error::InvalidGrid("origin must be finite".into()));
        }
        Ok(Self {
            width,
            height,
            resolution,
            origin,
            cells,
        })
    }

    pub fn filled(width: usize, height: usize, resolution: f64, origin: Vec2, value: u8) -> Result<Self> {
        Self::new(width, height, resolution, origin, vec![value; width * height])
    }

    /// A free grid of the given metric size with a one-cell occupied border.
    pub fn bordered(width_m: f64, height_m: f64, resolution: f64) -> Result<Self> {
        let w = (width_m / resolution).round() as usize;
        let h = (height_m / resolution).round() as usize;
        let mut g = Self::filled(w, h, resolution, Vec2::default(), FREE)?;
        g.draw_border();
        Ok(g)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn origin(&self) -> Vec2 {
        self.origin
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn width_m(&self) -> f64 {
        self.width as f64 * self.resolution
    }

    pub fn height_m(&self) -> f64 {
        self.height as f64 * self.resolution
    }

    pub fn diagonal_m(&self) -> f64 {
        self.width_m().hypot(self.height_m())
    }

    #[inline]
    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    #[inline]
    pub fn get(&self, col: usize, row: usize) -> u8 {
        self.cells[self.index(col, row)]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: u8) {
        let i = self.index(col, row);
        self.cells[i] = value;
    }

    /// Occupied or unknown.
    #[inline]
    pub fn is_blocked(&self, col: usize, row: usize) -> bool {
        self.get(col, row) < FREE_MIN
    }

    #[inline]
    pub fn is_free(&self, col: usize, row: usize) -> bool {
        !self.is_blocked(col, row)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        self.cell_of(p).is_some()
    }

    /// Cell containing a world point, or `None` outside the grid.
    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let gx = (p.x - self.origin.x) / self.resolution;
        let gy = (p.y - self.origin.y) / self.resolution;
        if !(gx >= 0.0 && gy >= 0.0) {
            return None;
        }
        let (c, r) = (gx.floor() as usize, gy.floor() as usize);
        (c < self.width && r < self.height).then_some((c, r))
    }

    pub fn cell_center(&self, col: usize, row: usize) -> Vec2 {
        Vec2::new(
            self.origin.x + (col as f64 + 0.5) * self.resolution,
            self.origin.y + (row as f64 + 0.5) * self.resolution,
        )
    }

    /// True when the point lies in a free cell.
    pub fn is_free_at(&self, p: Vec2) -> bool {
        self.cell_of(p).is_some_and(|(c, r)| self.is_free(c, r))
    }

    pub fn draw_border(&mut self) {
        let (w, h) = (self.width, self.height);
        for c in 0..w {
            self.set(c, 0, OCCUPIED);
            self.set(c, h - 1, OCCUPIED);
        }
        for r in 0..h {
            self.set(0, r, OCCUPIED);
            self.set(w - 1, r, OCCUPIED);
        }
    }

    pub fn border_occupied(&self) -> bool {
        let (w, h) = (self.width, self.height);
        (0..w).all(|c| self.get(c, 0) <= OCCUPIED_MAX && self.get(c, h - 1) <= OCCUPIED_MAX)
            && (0..h).all(|r| self.get(0, r) <= OCCUPIED_MAX && self.get(w - 1, r) <= OCCUPIED_MAX)
    }

    pub fn free_fraction(&self) -> f64 {
        let free = self.cells.iter().filter(|&&v| v >= FREE_MIN).count();
        free as f64 / self.cells.len() as f64
    }

    /// Labels 4-connected components of free cells. Returns the label per cell
    /// (`usize::MAX` for blocked cells) and the component count.
    pub fn free_components(&self) -> (Vec<usize>, usize) {
        let mut labels = vec![usize::MAX; self.cells.len()];
        let mut count = 0;
        let mut stack = Vec::new();
        for start in 0..self.cells.len() {
            if labels[start] != usize::MAX || self.cells[start] < FREE_MIN {
                continue;
            }
            labels[start] = count;
            stack.push(start);
            while let Some(i) = stack.pop() {
                let (c, r) = (i % self.width, i / self.width);
                let mut visit = |j: usize| {
                    if labels[j] == usize::MAX && self.cells[j] >= FREE_MIN {
                        labels[j] = count;
                        stack.push(j);
                    }
                };
                if c > 0 {
                    visit(i - 1);
                }
                if c + 1 < self.width {
                    visit(i + 1);
                }
                if r > 0 {
                    visit(i - self.width);
                }
                if r + 1 < self.height {
                    visit(i + self.width);
                }
            }
            count += 1;
        }
        (labels, count)
    }
}

#[derive(Serialize, Deserialize)]
struct GridRepr {
    width: usize,
    height: usize,
    resolution: f64,
    origin: [f64; 2],
    data: String,
}

impl From<OccupancyGrid> for GridRepr {
    fn from(g: OccupancyGrid) -> Self {
        use base64::Engine;
        GridRepr {
            width: g.width,
            height: g.height,
            resolution: g.resolution,
            origin: [g.origin.x, g.origin.y],
            data: base64::engine::general_purpose::STANDARD.encode(&g.cells),
        }
    }
}

impl TryFrom<GridRepr> for OccupancyGrid {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        use base64::Engine;
        let cells = base64::engine::general_purpose::STANDARD
            .decode(r.data.as_bytes())
            .map_err(|e| Error::InvalidGrid(format!("data is not base64: {e}")))?;
        OccupancyGrid::new(r.width, r.height, r.resolution, Vec2::new(r.origin[0], r.origin[1]), cells)
    }
}

/// Distance from a point along a world-frame direction to the first blocked
/// cell, found by exact grid traversal and capped at `max_range`. Leaving the
/// grid counts as a hit at the boundary.
pub fn raycast(grid: &OccupancyGrid, from: Vec2, angle: f64, max_range: f64) -> Result<f64> {
    let (mut col, mut row) = grid
        .cell_of(from)
        .ok_or(Error::OutOfBounds { x: from.x, y: from.y })?;
    if grid.is_blocked(col, row) {
        return Ok(0.0);
    }
    let res = grid.resolution();
    let (dx, dy) = (angle.cos(), angle.sin());
    let gx = (from.x - grid.origin().x) / res;
    let gy = (from.y - grid.origin().y) / res;
    // Ray parameter t is measured in cells along a unit direction.
    let (step_c, mut t_max_x, t_delta_x) = axis_setup(gx, col, dx);
    let (step_r, mut t_max_y, t_delta_y) = axis_setup(gy, row, dy);
    let max_t = max_range / res;
    loop {
        let t = if t_max_x < t_max_y {
            let t = t_max_x;
            t_max_x += t_delta_x;
            if step_c < 0 && col == 0 {
                return Ok((t * res).min(max_range));
            }
            col = (col as isize + step_c) as usize;
            t
        } else {
            let t = t_max_y;
            t_max_y += t_delta_y;
            if step_r < 0 && row == 0 {
                return Ok((t * res).min(max_range));
            }
            row = (row as isize + step_r) as usize;
            t
        };
        if t >= max_t {
            return Ok(max_range);
        }
        if col >= grid.width() || row >= grid.height() || grid.is_blocked(col, row) {
            return Ok(t * res);
        }
    }
}

fn axis_setup(g: f64, cell: usize, d: f64) -> (isize, f64, f64) {
    if d > 1e-15 {
        (1, (cell as f64 + 1.0 - g) / d, 1.0 / d)
    } else if d < -1e-15 {
        (-1, (g - cell as f64) / -d, 1.0 / -d)
    } else {
        (0, f64::INFINITY, f64::INFINITY)
    }
}

/// Distance from a ray to a circle, if the ray hits it going forward.
pub fn ray_circle(from: Vec2, angle: f64, circle: &Circle) -> Option<f64> {
    let d = Vec2::new(angle.cos(), angle.sin());
    let m = from - circle.center;
    let b = m.dot(d);
    let c = m.dot(m) - circle.radius * circle.radius;
    if c <= 0.0 {
        return Some(0.0);
    }
    if b > 0.0 {
        return None;
    }
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    Some(-b - disc.sqrt())
}

/// Per-cell Euclidean distance (metres, cell centre to nearest blocked cell
/// centre). Blocked cells hold 0; a grid without blocked cells holds infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    width: usize,
    height: usize,
    resolution: f64,
    origin: Vec2,
    values: Vec<f64>,
}

const EDT_INF: f64 = 1e20;

/// Exact Euclidean distance transform (two separable lower-envelope passes).
pub fn distance_field(grid: &OccupancyGrid) -> DistanceField {
    let (w, h) = (grid.width(), grid.height());
    let mut sq: Vec<f64> = grid
        .cells()
        .iter()
        .map(|&v| if v < FREE_MIN { 0.0 } else { EDT_INF })
        .collect();

    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];

    for c in 0..w {
        for r in 0..h {
            f[r] = sq[r * w + c];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for r in 0..h {
            sq[r * w + c] = out[r];
        }
    }
    for r in 0..h {
        f[..w].copy_from_slice(&sq[r * w..(r + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        sq[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }

    let res = grid.resolution();
    let values = sq
        .into_iter()
        .map(|d| if d >= EDT_INF * 0.5 { f64::INFINITY } else { d.sqrt() * res })
        .collect();
    DistanceField {
        width: w,
        height: h,
        resolution: res,
        origin: grid.origin(),
        values,
    }
}

/// 1-D squared distance transform of a sampled function (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| {
        ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
    };
    for q in 1..n {
        // z[0] is -inf, so this stops at k == 0 at the latest
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *dq = diff * diff + f[p];
    }
}

impl DistanceField {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Distance stored for the cell containing `p`; 0 outside the grid.
    pub fn at(&self, p: Vec2) -> f64 {
        let gx = (p.x - self.origin.x) / self.resolution;
        let gy = (p.y - self.origin.y) / self.resolution;
        if !(gx >= 0.0 && gy >= 0.0) {
            return 0.0;
        }
        let (c, r) = (gx.floor() as usize, gy.floor() as usize);
        if c >= self.width || r >= self.height {
            return 0.0;
        }
        self.get(c, r)
    }

    /// Signed gap between a circular footprint at `p` and the nearest static
    /// or dynamic obstacle; negative means overlap.
    pub fn footprint_gap(&self, p: Vec2, radius: f64, obstacles: &[Circle]) -> f64 {
        obstacles
            .iter()
            .map(|o| p.dist(o.center) - o.radius - radius)
            .fold(self.at(p) - radius, f64::min)
    }

    /// Footprint clearance clamped at zero (contact reads as 0).
    pub fn clearance(&self, p: Vec2, radius: f64, obstacles: &[Circle]) -> f64 {
        self.footprint_gap(p, radius, obstacles).max(0.0)
    }
}

/// True when a circular robot at `pose` touches a blocked cell (according to
/// the distance field) or overlaps any dynamic obstacle. Poses outside the
/// grid always collide.
pub fn footprint_collides(field: &DistanceField, pose: &Pose, radius: f64, obstacles: &[Circle]) -> bool {
    field.footprint_gap(pose.position(), radius, obstacles) < 0.0
}

/// One recorded simulation step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub pose: Pose,
    /// Signed forward speed (differential) or planar speed magnitude (omni).
    pub v_lin: f64,
    pub v_ang: f64,
    pub min_clearance: f64,
    pub collision: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn new(samples: Vec<TrajectorySample>) -> Self {
        Self { samples }
    }

    /// Builds a trajectory from positions at unit spacing `dt`; the other
    /// fields are zero. Mostly useful for metric tests.
    pub fn from_points(points: &[Vec2], dt: f64) -> Self {
        let samples = points
            .iter()
            .enumerate()
            .map(|(i, p)| TrajectorySample {
                t: i as f64 * dt,
                pose: Pose::new(p.x, p.y, 0.0),
                v_lin: 0.0,
                v_ang: 0.0,
                min_clearance: 0.0,
                collision: false,
            })
            .collect();
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.samples.iter().map(|s| s.pose.position()).collect()
    }

    /// Checks the time-ordering invariant.
    pub fn is_well_formed(&self) -> bool {
        !self.samples.is_empty() && self.samples.windows(2).all(|w| w[1].t > w[0].t)
    }
}
