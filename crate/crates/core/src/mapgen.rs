//! Seeded procedural maps and the PGM + YAML map bundle format.
//!
//! Indoor maps are built by binary space partitioning: the interior is split
//! into `room_count` leaves, a room is carved in each leaf, and consecutive
//! rooms are joined by L-shaped corridors of `corridor_width`. Outdoor maps
//! scatter rectangles and discs over an open bordered field. In both modes
//! obstacles are placed one at a time and any placement that would split the
//! free space is rejected, so the free space always forms a single
//! 4-connected component.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{OccupancyGrid, Vec2, FREE, FREE_MIN, OCCUPIED, OCCUPIED_MAX};
use crate::{Error, Result};

const MAX_ATTEMPTS: u64 = 50;
const PLACEMENT_TRIES: usize = 100;
pub const MIN_CORRIDOR_WIDTH: f64 = 0.6;
pub const MIN_MAP_SIZE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Indoor,
    Outdoor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapGenParams {
    pub kind: MapKind,
    pub width: f64,
    pub height: f64,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default)]
    pub obstacle_count: u32,
    #[serde(default = "default_obstacle_size")]
    pub obstacle_size: f64,
    #[serde(default = "default_corridor_width")]
    pub corridor_width: f64,
    #[serde(default = "default_room_count")]
    pub room_count: u32,
    #[serde(default = "default_room_size")]
    pub room_size: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_resolution() -> f64 {
    0.05
}
fn default_obstacle_size() -> f64 {
    0.5
}
fn default_corridor_width() -> f64 {
    1.0
}
fn default_room_count() -> u32 {
    4
}
fn default_room_size() -> f64 {
    3.0
}

impl Default for MapGenParams {
    fn default() -> Self {
        Self {
            kind: MapKind::Outdoor,
            width: 10.0,
            height: 10.0,
            resolution: default_resolution(),
            obstacle_count: 10,
            obstacle_size: default_obstacle_size(),
            corridor_width: default_corridor_width(),
            room_count: default_room_count(),
            room_size: default_room_size(),
            seed: 0,
        }
    }
}

impl MapGenParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::param(field, format!("must be a positive number, got {v}")))
            }
        };
        positive("resolution", self.resolution)?;
        positive("obstacle_size", self.obstacle_size)?;
        positive("room_size", self.room_size)?;
        for (field, v) in [("width", self.width), ("height", self.height)] {
            if !(v.is_finite() && v >= MIN_MAP_SIZE) {
                return Err(Error::param(field, format!("must be >= {MIN_MAP_SIZE} m, got {v}")));
            }
        }
        if self.kind == MapKind::Indoor {
            if !(self.corridor_width >= MIN_CORRIDOR_WIDTH) {
                return Err(Error::param(
                    "corridor_width",
                    format!("must be >= {MIN_CORRIDOR_WIDTH} m, got {}", self.corridor_width),
                ));
            }
            if self.room_count < 1 {
                return Err(Error::param("room_count", "must be >= 1"));
            }
        }
        let cells = (self.width / self.resolution) * (self.height / self.resolution);
        if cells > 16e6 {
            return Err(Error::param("resolution", "map would exceed 16M cells"));
        }
        Ok(())
    }
}

/// Axis-aligned cell rectangle `[c0, c1) x [r0, r1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRect {
    pub c0: usize,
    pub r0: usize,
    pub c1: usize,
    pub r1: usize,
}

impl CellRect {
    fn w(&self) -> usize {
        self.c1 - self.c0
    }
    fn h(&self) -> usize {
        self.r1 - self.r0
    }
    fn center(&self) -> (usize, usize) {
        ((self.c0 + self.c1) / 2, (self.r0 + self.r1) / 2)
    }
    fn intersects(&self, o: &CellRect) -> bool {
        self.c0 < o.c1 && o.c0 < self.c1 && self.r0 < o.r1 && o.r0 < self.r1
    }
}

/// The carved structure of an indoor map.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MapLayout {
    pub rooms: Vec<CellRect>,
    /// Corridor bands; each spans the full corridor width across its short side.
    pub corridors: Vec<CellRect>,
}

pub fn generate_map(params: &MapGenParams) -> Result<OccupancyGrid> {
    generate_map_layout(params).map(|(g, _)| g)
}

/// Like [`generate_map`] but also returns the rooms and corridors carved.
pub fn generate_map_layout(params: &MapGenParams) -> Result<(OccupancyGrid, MapLayout)> {
    params.validate()?;
    let w = (params.width / params.resolution).round() as usize;
    let h = (params.height / params.resolution).round() as usize;
    let mut last_reason = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let seed = params.seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let result = match params.kind {
            MapKind::Indoor => indoor(params, w, h, seed),
            MapKind::Outdoor => outdoor(params, w, h, seed).map(|g| (g, MapLayout::default())),
        };
        match result {
            Ok((grid, layout)) => {
                if grid.free_components().1 == 1 {
                    return Ok((grid, layout));
                }
                last_reason = "free space is not connected".into();
            }
            Err(reason) => last_reason = reason,
        }
    }
    Err(Error::InfeasibleParameters(format!(
        "no connected map after {MAX_ATTEMPTS} attempts ({last_reason})"
    )))
}

fn layout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// A separate stream for obstacles keeps obstacle k identical whatever the
// total count, so adding obstacles only ever removes free space.
fn obstacle_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x0B57_AC1E_5EED_0001)
}

fn cells_of(m: f64, res: f64) -> usize {
    (m / res - 1e-9).ceil().max(1.0) as usize
}

fn indoor(p: &MapGenParams, w: usize, h: usize, seed: u64) -> Result<(OccupancyGrid, MapLayout), String> {
    let res = p.resolution;
    let mut rng = layout_rng(seed);
    let corridor = cells_of(p.corridor_width, res);
    let room_target = cells_of(p.room_size, res);
    let min_room = corridor + 2;
    // leaf must hold a room plus a one-cell wall on each side
    let min_leaf = (min_room + 2).max((room_target as f64 * 0.6) as usize);

    let mut grid = OccupancyGrid::filled(w, h, res, Vec2::default(), OCCUPIED).map_err(|e| e.to_string())?;
    let interior = CellRect { c0: 1, r0: 1, c1: w - 1, r1: h - 1 };
    if interior.w() < min_leaf || interior.h() < min_leaf {
        return Err("map too small for a single room".into());
    }

    let mut leaves = vec![interior];
    while leaves.len() < p.room_count as usize {
        let candidate = leaves
            .iter()
            .enumerate()
            .filter(|(_, l)| l.w() >= 2 * min_leaf || l.h() >= 2 * min_leaf)
            .max_by_key(|(i, l)| (l.w() * l.h(), usize::MAX - i))
            .map(|(i, _)| i);
        let Some(i) = candidate else {
            return Err(format!("cannot fit {} rooms", p.room_count));
        };
        let leaf = leaves.remove(i);
        let split_cols = if leaf.w() >= 2 * min_leaf && leaf.h() >= 2 * min_leaf {
            leaf.w() >= leaf.h()
        } else {
            leaf.w() >= 2 * min_leaf
        };
        let (a, b) = if split_cols {
            let at = rng.random_range(leaf.c0 + min_leaf..=leaf.c1 - min_leaf);
            (CellRect { c1: at, ..leaf }, CellRect { c0: at, ..leaf })
        } else {
            let at = rng.random_range(leaf.r0 + min_leaf..=leaf.r1 - min_leaf);
            (CellRect { r1: at, ..leaf }, CellRect { r0: at, ..leaf })
        };
        leaves.insert(i, b);
        leaves.insert(i, a);
    }

    let mut rooms = Vec::with_capacity(leaves.len());
    for leaf in &leaves {
        let max_w = leaf.w() - 2;
        let max_h = leaf.h() - 2;
        let rw = ((room_target as f64 * rng.random_range(0.8..1.2)) as usize).clamp(min_room, max_w);
        let rh = ((room_target as f64 * rng.random_range(0.8..1.2)) as usize).clamp(min_room, max_h);
        let c0 = rng.random_range(leaf.c0 + 1..=leaf.c1 - 1 - rw);
        let r0 = rng.random_range(leaf.r0 + 1..=leaf.r1 - 1 - rh);
        rooms.push(CellRect { c0, r0, c1: c0 + rw, r1: r0 + rh });
    }

    let half = corridor / 2;
    let mut corridors = Vec::new();
    for pair in rooms.windows(2) {
        let (ax, ay) = pair[0].center();
        let (bx, by) = pair[1].center();
        // horizontal leg at the first room's centre row, vertical leg at the
        // second room's centre column
        corridors.push(CellRect {
            c0: ax.min(bx) - half,
            c1: ax.max(bx) - half + corridor,
            r0: ay - half,
            r1: ay - half + corridor,
        });
        corridors.push(CellRect {
            c0: bx - half,
            c1: bx - half + corridor,
            r0: ay.min(by) - half,
            r1: ay.max(by) - half + corridor,
        });
    }

    for r in rooms.iter().chain(&corridors) {
        fill(&mut grid, r, FREE);
    }

    let layout = MapLayout { rooms, corridors };
    let mut orng = obstacle_rng(seed);
    let keep_out = layout.corridors.clone();
    scatter_obstacles(&mut grid, p, &mut orng, &keep_out, Some(&layout.rooms))?;
    Ok((grid, layout))
}

fn outdoor(p: &MapGenParams, w: usize, h: usize, seed: u64) -> Result<OccupancyGrid, String> {
    let mut grid =
        OccupancyGrid::filled(w, h, p.resolution, Vec2::default(), FREE).map_err(|e| e.to_string())?;
    grid.draw_border();
    let mut rng = obstacle_rng(seed);
    scatter_obstacles(&mut grid, p, &mut rng, &[], None)?;
    Ok(grid)
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect(CellRect),
    Disc { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    fn bounds(&self, w: usize, h: usize) -> CellRect {
        match *self {
            Shape::Rect(r) => r,
            Shape::Disc { cx, cy, r } => CellRect {
                c0: (cx - r).floor().max(0.0) as usize,
                r0: (cy - r).floor().max(0.0) as usize,
                c1: ((cx + r).ceil() as usize + 1).min(w),
                r1: ((cy + r).ceil() as usize + 1).min(h),
            },
        }
    }

    fn covers(&self, c: usize, r: usize) -> bool {
        match *self {
            Shape::Rect(rect) => c >= rect.c0 && c < rect.c1 && r >= rect.r0 && r < rect.r1,
            Shape::Disc { cx, cy, r: rad } => {
                let dx = c as f64 + 0.5 - cx;
                let dy = r as f64 + 0.5 - cy;
                dx * dx + dy * dy <= rad * rad
            }
        }
    }
}

fn scatter_obstacles(
    grid: &mut OccupancyGrid,
    p: &MapGenParams,
    rng: &mut ChaCha8Rng,
    keep_out: &[CellRect],
    regions: Option<&[CellRect]>,
) -> Result<(), String> {
    let (w, h) = (grid.width(), grid.height());
    let size = p.obstacle_size / p.resolution;
    for k in 0..p.obstacle_count {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let s = (size * rng.random_range(0.7..1.3)).max(1.0);
            let region = match regions {
                Some(rooms) => rooms[rng.random_range(0..rooms.len())],
                None => CellRect { c0: 1, r0: 1, c1: w - 1, r1: h - 1 },
            };
            let cx = rng.random_range(region.c0 as f64..region.c1 as f64);
            let cy = rng.random_range(region.r0 as f64..region.r1 as f64);
            let shape = if rng.random_bool(0.5) {
                let sw = (s * rng.random_range(0.5..1.5)).max(1.0);
                let sh = (s * rng.random_range(0.5..1.5)).max(1.0);
                let c0 = (cx - sw / 2.0).max(1.0) as usize;
                let r0 = (cy - sh / 2.0).max(1.0) as usize;
                Shape::Rect(CellRect {
                    c0,
                    r0,
                    c1: ((cx + sw / 2.0) as usize).clamp(c0 + 1, w - 1),
                    r1: ((cy + sh / 2.0) as usize).clamp(r0 + 1, h - 1),
                })
            } else {
                Shape::Disc { cx, cy, r: s / 2.0 }
            };
            let bounds = shape.bounds(w, h);
            if keep_out.iter().any(|k| k.intersects(&bounds)) {
                continue;
            }
            let mut trial = grid.clone();
            for r in bounds.r0..bounds.r1 {
                for c in bounds.c0..bounds.c1 {
                    if shape.covers(c, r) {
                        trial.set(c, r, OCCUPIED);
                    }
                }
            }
            if trial == *grid {
                continue;
            }
            if trial.free_components().1 == 1 {
                *grid = trial;
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(format!("could not place obstacle {k} without disconnecting free space"));
        }
    }
    Ok(())
}

fn fill(grid: &mut OccupancyGrid, rect: &CellRect, value: u8) {
    for r in rect.r0..rect.r1 {
        for c in rect.c0..rect.c1 {
            grid.set(c, r, value);
        }
    }
}

/// Probability thresholds written to bundle metadata. With occupancy
/// probability `p = (255 - v) / 255` they reproduce the cell convention used
/// here: `v <= 50` occupied, `v >= 250` free.
pub const OCCUPIED_THRESH: f64 = 0.8;
pub const FREE_THRESH: f64 = 0.02;

/// YAML metadata that accompanies a PGM map image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMetadata {
    pub image: String,
    pub resolution: f64,
    pub origin: [f64; 3],
    #[serde(default)]
    pub negate: u8,
    pub occupied_thresh: f64,
    pub free_thresh: f64,
}

impl MapMetadata {
    pub fn for_grid(grid: &OccupancyGrid, image: impl Into<String>) -> Self {
        Self {
            image: image.into(),
            resolution: grid.resolution(),
            origin: [grid.origin().x, grid.origin().y, 0.0],
            negate: 0,
            occupied_thresh: OCCUPIED_THRESH,
            free_thresh: FREE_THRESH,
        }
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("metadata serialises")
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        serde_yaml::from_str(text).map_err(|e| Error::Parse {
            what: "map metadata".into(),
            reason: e.to_string(),
        })
    }

    fn uses_native_encoding(&self) -> bool {
        self.negate == 0 && self.occupied_thresh == OCCUPIED_THRESH && self.free_thresh == FREE_THRESH
    }
}

/// Binary PGM (P5, maxval 255). Image rows run top (max y) to bottom.
pub fn encode_pgm(grid: &OccupancyGrid) -> Vec<u8> {
    let mut header = String::new();
    let _ = write!(header, "P5\n{} {}\n255\n", grid.width(), grid.height());
    let mut out = header.into_bytes();
    out.reserve(grid.cells().len());
    for row in (0..grid.height()).rev() {
        let start = row * grid.width();
        out.extend_from_slice(&grid.cells()[start..start + grid.width()]);
    }
    out
}

/// Decodes P5 or P2 PGM into `(width, height, pixels)` with pixels scaled to
/// 0..=255 and in image order (top row first).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let perr = |reason: String| Error::Parse { what: "pgm".into(), reason };
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = next_token(bytes).ok_or_else(|| perr("empty file".into()))?;
    let mut num = |name: &str| -> Result<usize> {
        next_token(bytes)
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| perr(format!("bad or missing {name}")))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(perr(format!("unsupported maxval {maxval}")));
    }
    let scale = |v: usize| ((v.min(maxval) * 255 + maxval / 2) / maxval) as u8;
    let n = w.checked_mul(h).ok_or_else(|| perr("dimensions overflow".into()))?;
    let pixels = match magic.as_str() {
        "P5" => {
            // exactly one whitespace byte separates maxval from the raster
            let start = pos + 1;
            let data = bytes
                .get(start..start + n)
                .ok_or_else(|| perr(format!("raster truncated: expected {n} bytes")))?;
            data.iter().map(|&v| scale(v as usize)).collect()
        }
        "P2" => {
            let mut px = Vec::with_capacity(n);
            for _ in 0..n {
                px.push(scale(num("pixel")?));
            }
            px
        }
        other => return Err(perr(format!("unsupported magic {other}"))),
    };
    Ok((w, h, pixels))
}

/// Builds a grid from image-order pixels and metadata. Images whose
/// thresholds differ from the native encoding are re-thresholded.
pub fn grid_from_image(w: usize, h: usize, pixels: &[u8], meta: &MapMetadata) -> Result<OccupancyGrid> {
    if meta.origin[2] != 0.0 {
        return Err(Error::param("origin", "rotated map origins are not supported"));
    }
    let native = meta.uses_native_encoding();
    let mut cells = vec![0u8; w * h];
    for img_row in 0..h {
        let row = h - 1 - img_row;
        for c in 0..w {
            let v = pixels[img_row * w + c];
            cells[row * w + c] = if native {
                v
            } else {
                let p = if meta.negate != 0 { v as f64 / 255.0 } else { (255.0 - v as f64) / 255.0 };
                if p > meta.occupied_thresh {
                    OCCUPIED
                } else if p < meta.free_thresh {
                    FREE
                } else {
                    128
                }
            };
        }
    }
    OccupancyGrid::new(w, h, meta.resolution, Vec2::new(meta.origin[0], meta.origin[1]), cells)
}

/// Writes `<name>.pgm` and `<name>.map.yaml` into `dir`.
pub fn export_map(grid: &OccupancyGrid, dir: &Path, name: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let image = dir.join(format!("{name}.pgm"));
    let yaml = dir.join(format!("{name}.map.yaml"));
    std::fs::write(&image, encode_pgm(grid)).map_err(|e| Error::io(&image, e))?;
    let meta = MapMetadata::for_grid(grid, format!("{name}.pgm"));
    std::fs::write(&yaml, meta.to_yaml()).map_err(|e| Error::io(&yaml, e))?;
    Ok((image, yaml))
}

/// Loads a bundle from its metadata file; the image path is resolved relative
/// to the metadata file.
pub fn import_map(yaml_path: &Path) -> Result<OccupancyGrid> {
    let text = std::fs::read_to_string(yaml_path).map_err(|e| Error::io(yaml_path, e))?;
    let meta = MapMetadata::from_yaml(&text)?;
    let image = yaml_path.parent().unwrap_or(Path::new(".")).join(&meta.image);
    let bytes = std::fs::read(&image).map_err(|e| Error::io(&image, e))?;
    let (w, h, px) = decode_pgm(&bytes)?;
    grid_from_image(w, h, &px, &meta)
}

/// Connectivity and border checks shared by tests and upload validation.
pub fn check_map(grid: &OccupancyGrid) -> Vec<String> {
    let mut problems = Vec::new();
    if !grid.border_occupied() {
        problems.push("border ring is not fully occupied".to_string());
    }
    match grid.free_components().1 {
        0 => problems.push("map has no free space".to_string()),
        1 => {}
        n => problems.push(format!("free space has {n} disconnected components")),
    }
    problems
}

pub fn is_occupied_value(v: u8) -> bool {
    v <= OCCUPIED_MAX
}

pub fn is_free_value(v: u8) -> bool {
    v >= FREE_MIN
}
