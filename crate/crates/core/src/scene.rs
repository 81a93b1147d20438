//! Procedural piecewise-smooth depth scenes with sharp discontinuities and
//! analytically known edge masks.
//!
//! A scene is a smooth polynomial background with a handful of strictly
//! nearer rectangle / disk objects composited over it. Every object keeps a
//! guaranteed depth gap to the background beneath its (1-pixel dilated)
//! silhouette, objects never touch each other, and within-surface gradients
//! stay well below the declared discontinuity floor. The edge mask is the
//! set of object silhouette pixels (object pixels with a 4-neighbor outside
//! the object) — computed from the shapes, never by thresholding — and is
//! consistent with the directed-jump rule: a pixel is an edge pixel exactly
//! when some 4-neighbor is more than `edge_floor` farther away.
//!
//! The network input is not RGB but a noisy normalized copy of the depth
//! plus x/y coordinate channels, which isolates the denoising / boundary-
//! sharpening behavior of the mixture head.
//!
//! Scenes persist as a directory of `MDG1` grids plus a plain-text
//! `scene.meta` of `key=value` lines. Datasets split by index parity: even
//! indices train, odd indices test.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{ensure, Error, Result};
use crate::grid::{read_grid, write_grid, Grid, GridStack, MaskGrid};
use crate::rng::{derive_seed, stream};

/// Pinhole camera intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// Generation parameters for one scene (or a dataset template).
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Near and far depth bounds in meters; near must be positive.
    pub depth_near: f64,
    pub depth_far: f64,
    /// Standard deviation of the input-field noise, in normalized depth
    /// units (the ground truth maps to [0, 1]).
    pub noise_std: f64,
    /// Smallest 4-neighbor depth jump (meters) that counts as a
    /// discontinuity.
    pub edge_floor: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            objects_min: 1,
            objects_max: 5,
            depth_near: 1.0,
            depth_far: 10.0,
            noise_std: 0.05,
            edge_floor: 0.25,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        ensure(self.height >= 8 && self.width >= 8, || {
            format!("scene dimensions must be at least 8x8, got {}x{}", self.height, self.width)
        })?;
        ensure(self.depth_near > 0.0, || "depth_near must be positive".into())?;
        ensure(self.depth_far > self.depth_near, || {
            "depth_far must exceed depth_near".into()
        })?;
        ensure(self.objects_min <= self.objects_max, || {
            "objects_min must not exceed objects_max".into()
        })?;
        ensure(self.noise_std >= 0.0, || "noise_std must be non-negative".into())?;
        ensure(self.edge_floor > 0.0, || "edge_floor must be positive".into())?;
        ensure(self.edge_floor < (self.depth_far - self.depth_near) * 0.5, || {
            "edge_floor must leave room for object placement".into()
        })
    }

    /// Default intrinsics: fx = fy = 0.6 * width, principal point at the
    /// pixel-center midpoint.
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: 0.6 * self.width as f64,
            fy: 0.6 * self.width as f64,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
        }
    }
}

/// One synthetic sample: network input channels (noisy normalized depth,
/// x coordinate, y coordinate), metric ground-truth depth, the analytic
/// silhouette mask, camera intrinsics, and the [`SceneSpec`] that
/// generated it.
#[derive(Debug, Clone)]
pub struct Scene {
    pub input: GridStack,
    pub gt_depth: Grid,
    pub gt_edges: MaskGrid,
    pub intrinsics: Intrinsics,
    pub spec: SceneSpec,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { cy: f64, cx: f64, hy: f64, hx: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (yf, xf) = (y as f64, x as f64);
        match *self {
            Shape::Disk { cy, cx, r } => (yf - cy).powi(2) + (xf - cx).powi(2) <= r * r,
            Shape::Rect { cy, cx, hy, hx } => (yf - cy).abs() <= hy && (xf - cx).abs() <= hx,
        }
    }
}

const PLACEMENT_RETRIES: usize = 200;
/// Guaranteed silhouette gap as a multiple of the edge floor.
const GAP_FACTOR: f64 = 1.5;
/// Per-retry size shrink, so crowded scenes converge to placeable objects.
const RETRY_SHRINK: f64 = 0.97;

/// Generates one scene deterministically from its spec.
pub fn generate(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let range = spec.depth_far - spec.depth_near;
    let mut rng = stream(spec.seed, "scene");

    // Smooth background: a bounded quadratic in normalized [-1, 1]^2
    // coordinates, rescaled so no 4-neighbor step can reach the edge floor.
    let base = spec.depth_near + rng.random_range(0.55..0.85) * range;
    let mut coeffs = [0.0; 5]; // x, y, x^2, x*y, y^2
    for c in &mut coeffs {
        *c = rng.random_range(-1.0..1.0) * 0.024 * range;
    }
    let [a, b, c2, d, e] = coeffs;
    let grad_bound = (a.abs() + 2.0 * c2.abs() + d.abs()).max(b.abs() + 2.0 * e.abs() + d.abs());
    let pixel_step = 2.0 / (h.min(w) as f64 - 1.0);
    let max_step = grad_bound * pixel_step;
    let slope_cap = 0.4 * spec.edge_floor;
    let rescale = if max_step > slope_cap { slope_cap / max_step } else { 1.0 };
    let xn = |x: usize| 2.0 * x as f64 / (w as f64 - 1.0) - 1.0;
    let yn = |y: usize| 2.0 * y as f64 / (h as f64 - 1.0) - 1.0;
    let mut depth = Grid::from_fn(h, w, |y, x| {
        let (u, v) = (xn(x), yn(y));
        base + rescale * (a * u + b * v + c2 * u * u + d * u * v + e * v * v)
    });

    // Objects: nearer than the background with a guaranteed gap under the
    // dilated silhouette, mutually separated, 2 pixels inside the border.
    let n_objects = rng.random_range(spec.objects_min..=spec.objects_max);
    let mut occupied = MaskGrid::falses(h, w);
    let mut edges = MaskGrid::falses(h, w);
    let gap = GAP_FACTOR * spec.edge_floor;
    // Extents stay a hair under (min dim - 5)/2 so the 2-pixel border
    // margin always leaves a non-empty placement range.
    let max_extent = (h.min(w) as f64 - 5.0) / 2.0 - 0.01;
    let min_extent = 1.2f64.min(max_extent);
    for obj in 0..n_objects {
        let mut placed = false;
        'attempt: for attempt in 0..PLACEMENT_RETRIES {
            let scale = h.min(w) as f64 * RETRY_SHRINK.powi(attempt as i32);
            let extent = |raw: f64| raw.clamp(min_extent, max_extent);
            let shape = if rng.random_range(0.0..1.0) < 0.5 {
                let r = extent(rng.random_range(0.06..0.16) * scale);
                let cy = rng.random_range(2.0 + r..h as f64 - 3.0 - r);
                let cx = rng.random_range(2.0 + r..w as f64 - 3.0 - r);
                Shape::Disk { cy, cx, r }
            } else {
                let hy = extent(rng.random_range(0.05..0.14) * scale);
                let hx = extent(rng.random_range(0.05..0.14) * scale);
                let cy = rng.random_range(2.0 + hy..h as f64 - 3.0 - hy);
                let cx = rng.random_range(2.0 + hx..w as f64 - 3.0 - hx);
                Shape::Rect { cy, cx, hy, hx }
            };
            // Planar depth with a small in-surface slope (or flat).
            let (gy, gx) = if rng.random_range(0.0..1.0) < 0.5 {
                (0.0, 0.0)
            } else {
                (
                    rng.random_range(-1.0..1.0) * 0.2 * spec.edge_floor,
                    rng.random_range(-1.0..1.0) * 0.2 * spec.edge_floor,
                )
            };
            let (center_y, center_x) = match shape {
                Shape::Disk { cy, cx, .. } => (cy, cx),
                Shape::Rect { cy, cx, .. } => (cy, cx),
            };

            let mut mask = Vec::new();
            let mut min_under = f64::INFINITY;
            let mut relief_min = f64::INFINITY;
            let mut relief_max = f64::NEG_INFINITY;
            for y in 0..h {
                for x in 0..w {
                    if !shape.contains(y, x) {
                        continue;
                    }
                    mask.push((y, x));
                    let relief = gy * (y as f64 - center_y) + gx * (x as f64 - center_x);
                    relief_min = relief_min.min(relief);
                    relief_max = relief_max.max(relief);
                }
            }
            if mask.is_empty() {
                continue;
            }
            // Dilated footprint: separation from other objects plus the
            // background minimum that bounds the silhouette jump.
            for &(y, x) in &mask {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue 'attempt; // touches the border
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if occupied.at(ny, nx) {
                            continue 'attempt;
                        }
                        min_under = min_under.min(depth.at(ny, nx));
                    }
                }
            }
            let d0_hi = min_under - gap - relief_max;
            let d0_lo = spec.depth_near - relief_min;
            if d0_hi <= d0_lo {
                continue;
            }
            let d0 = rng.random_range(d0_lo..d0_hi);

            for &(y, x) in &mask {
                let relief = gy * (y as f64 - center_y) + gx * (x as f64 - center_x);
                depth.set(y, x, d0 + relief);
            }
            for &(y, x) in &mask {
                let boundary = [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)]
                    .iter()
                    .any(|&(ny, nx)| ny >= h || nx >= w || !shape.contains(ny, nx));
                if boundary {
                    edges.set(y, x, true);
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = ((y as i64 + dy) as usize, (x as i64 + dx) as usize);
                        occupied.set(ny, nx, true);
                    }
                }
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {obj} of {n_objects} after {PLACEMENT_RETRIES} attempts \
                 (seed {}, {h}x{w})",
                spec.seed
            )));
        }
    }

    debug_assert!(edges_consistent(&depth, &edges, spec.edge_floor));

    // Input channels: noisy normalized depth plus coordinate channels.
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noisy = Grid::from_fn(h, w, |y, x| {
        let norm = (depth.at(y, x) - spec.depth_near) / range;
        norm + spec.noise_std * normal.sample(&mut rng)
    });
    let x_coord = Grid::from_fn(h, w, |_, x| x as f64 / (w as f64 - 1.0));
    let y_coord = Grid::from_fn(h, w, |y, _| y as f64 / (h as f64 - 1.0));
    let input = GridStack::new(vec![noisy, x_coord, y_coord])?;

    Ok(Scene {
        input,
        gt_depth: depth,
        gt_edges: edges,
        intrinsics: spec.intrinsics(),
        spec: spec.clone(),
    })
}

/// Checks the generator's self-consistency rule: a pixel is an edge pixel
/// exactly when some 4-neighbor is more than `floor` farther away.
pub fn edges_consistent(depth: &Grid, edges: &MaskGrid, floor: f64) -> bool {
    let (h, w) = (depth.height(), depth.width());
    for y in 0..h {
        for x in 0..w {
            let mut max_jump = f64::NEG_INFINITY;
            let mut check = |ny: usize, nx: usize| {
                if ny < h && nx < w {
                    max_jump = max_jump.max(depth.at(ny, nx) - depth.at(y, x));
                }
            };
            check(y.wrapping_sub(1), x);
            check(y + 1, x);
            check(y, x.wrapping_sub(1));
            check(y, x + 1);
            if edges.at(y, x) != (max_jump > floor) {
                return false;
            }
        }
    }
    true
}

/// Generates `count` scenes from a template; scene `i` uses the sub-seed
/// `derive_seed(seed, "scene/i")`. Even indices are the training split, odd
/// indices the test split.
pub fn make_dataset(template: &SceneSpec, count: usize, seed: u64) -> Result<Vec<Scene>> {
    ensure(count >= 1, || "dataset count must be at least 1".into())?;
    (0..count)
        .map(|i| {
            let mut spec = template.clone();
            spec.seed = derive_seed(seed, &format!("scene/{i}"));
            generate(&spec)
        })
        .collect()
}

/// Index-parity split: even indices train, odd indices test.
pub fn split_train_test(scenes: &[Scene]) -> (Vec<&Scene>, Vec<&Scene>) {
    let train = scenes.iter().step_by(2).collect();
    let test = scenes.iter().skip(1).step_by(2).collect();
    (train, test)
}

// ---------------------------------------------------------------------------
// Persistence: a directory of MDG1 grids plus a `scene.meta` key=value file.
// ---------------------------------------------------------------------------

const META_FILE: &str = "scene.meta";

/// Writes a scene into `dir` (created if missing).
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, chan) in scene.input.iter().enumerate() {
        write_grid(chan, &dir.join(format!("input_c{i}.mdg")))?;
    }
    write_grid(&scene.gt_depth, &dir.join("gt_depth.mdg"))?;
    write_grid(&scene.gt_edges.to_grid(), &dir.join("gt_edges.mdg"))?;

    let s = &scene.spec;
    let mut meta = String::new();
    let _ = writeln!(meta, "fx={}", scene.intrinsics.fx);
    let _ = writeln!(meta, "fy={}", scene.intrinsics.fy);
    let _ = writeln!(meta, "cx={}", scene.intrinsics.cx);
    let _ = writeln!(meta, "cy={}", scene.intrinsics.cy);
    let _ = writeln!(meta, "input_channels={}", scene.input.channels());
    let _ = writeln!(meta, "height={}", s.height);
    let _ = writeln!(meta, "width={}", s.width);
    let _ = writeln!(meta, "objects_min={}", s.objects_min);
    let _ = writeln!(meta, "objects_max={}", s.objects_max);
    let _ = writeln!(meta, "depth_near={}", s.depth_near);
    let _ = writeln!(meta, "depth_far={}", s.depth_far);
    let _ = writeln!(meta, "noise_std={}", s.noise_std);
    let _ = writeln!(meta, "edge_floor={}", s.edge_floor);
    let _ = writeln!(meta, "seed={}", s.seed);
    let meta_path = dir.join(META_FILE);
    std::fs::write(&meta_path, meta).map_err(|e| Error::io(meta_path, e))
}

/// Reads a scene written by [`save_scene`].
pub fn load_scene(dir: &Path) -> Result<Scene> {
    let meta_path = dir.join(META_FILE);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&meta_path, format!("bad meta line `{line}`")))?;
        kv.insert(key.to_string(), value.to_string());
    }
    let get = |key: &str| -> Result<&String> {
        kv.get(key)
            .ok_or_else(|| Error::format(&meta_path, format!("missing meta key `{key}`")))
    };
    let parse_f64 = |key: &str| -> Result<f64> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(&meta_path, format!("bad value for `{key}`")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| Error::format(&meta_path, format!("bad value for `{key}`")))
    };

    let channels = parse_usize("input_channels")?;
    let mut input_channels = Vec::with_capacity(channels);
    for i in 0..channels {
        input_channels.push(read_grid(&dir.join(format!("input_c{i}.mdg")))?);
    }
    let input = GridStack::new(input_channels)?;
    let gt_depth = read_grid(&dir.join("gt_depth.mdg"))?;
    let gt_edges = MaskGrid::from_grid(&read_grid(&dir.join("gt_edges.mdg"))?);

    let spec = SceneSpec {
        height: parse_usize("height")?,
        width: parse_usize("width")?,
        objects_min: parse_usize("objects_min")?,
        objects_max: parse_usize("objects_max")?,
        depth_near: parse_f64("depth_near")?,
        depth_far: parse_f64("depth_far")?,
        noise_std: parse_f64("noise_std")?,
        edge_floor: parse_f64("edge_floor")?,
        seed: get("seed")?
            .parse()
            .map_err(|_| Error::format(&meta_path, "bad value for `seed`"))?,
    };
    Ok(Scene {
        input,
        gt_depth,
        gt_edges,
        intrinsics: Intrinsics {
            fx: parse_f64("fx")?,
            fy: parse_f64("fy")?,
            cx: parse_f64("cx")?,
            cy: parse_f64("cy")?,
        },
        spec,
    })
}
