//! 3-D analysis: pinhole unprojection, normal estimation, accuracy /
//! completeness / normal-consistency metrics, flying-point detection, and
//! confidence masking.
//!
//! Nearest-neighbor queries are exact. Brute force is used below 10^5
//! target points and a grid-bucketed index above; the bucketed path returns
//! bit-identical results (ties broken toward the lowest point index in both
//! paths) and the equivalence is asserted in the tests.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{ensure, Error, Result};
use crate::eval::median;
use crate::grid::Grid;
use crate::scene::Intrinsics;

/// Grid provenance of a cloud: image dimensions and the source pixel index
/// of every point.
#[derive(Debug, Clone)]
pub struct GridSource {
    pub height: usize,
    pub width: usize,
    pub pixel_index: Vec<usize>,
}

/// Points in meters, optional unit normals, optional grid provenance.
#[derive(Debug, Clone)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    normals: Option<Vec<[f64; 3]>>,
    source: Option<GridSource>,
}

impl PointCloud {
    pub fn from_points(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            normals: None,
            source: None,
        }
    }

    /// Attaches normals; each must have unit length within 1e-9.
    pub fn with_normals(points: Vec<[f64; 3]>, normals: Vec<[f64; 3]>) -> Result<Self> {
        ensure(points.len() == normals.len(), || {
            "normals must be congruent with points".into()
        })?;
        for n in &normals {
            let len = norm(n);
            ensure((len - 1.0).abs() <= 1e-9, || {
                format!("normal has length {len}, expected 1")
            })?;
        }
        Ok(Self {
            points,
            normals: Some(normals),
            source: None,
        })
    }

    #[inline]
    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    #[inline]
    pub fn normals(&self) -> Option<&[[f64; 3]]> {
        self.normals.as_deref()
    }

    #[inline]
    pub fn source(&self) -> Option<&GridSource> {
        self.source.as_ref()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.points.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Unprojects a depth map through the pinhole model:
/// `x = (u - cx) d / fx`, `y = (v - cy) d / fy`, `z = d`.
///
/// Pixels that are not finite and positive are skipped (NaN is the masked
/// sentinel; non-positive depth has no pinhole preimage); source pixel
/// indices are recorded for grid-based operations.
pub fn unproject(depth: &Grid, intrinsics: &Intrinsics) -> Result<PointCloud> {
    ensure(intrinsics.fx > 0.0 && intrinsics.fy > 0.0, || {
        "focal lengths must be positive".into()
    })?;
    let (h, w) = (depth.height(), depth.width());
    let mut points = Vec::new();
    let mut pixel_index = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let d = depth.at(v, u);
            if !d.is_finite() || d <= 0.0 {
                continue;
            }
            points.push([
                (u as f64 - intrinsics.cx) * d / intrinsics.fx,
                (v as f64 - intrinsics.cy) * d / intrinsics.fy,
                d,
            ]);
            pixel_index.push(v * w + u);
        }
    }
    ensure(!points.is_empty(), || "no valid pixels to unproject".into())?;
    Ok(PointCloud {
        points,
        normals: None,
        source: Some(GridSource {
            height: h,
            width: w,
            pixel_index,
        }),
    })
}

/// Per-point normals from central-difference tangents in the image x and y
/// directions, oriented to face the camera (non-positive z component).
/// Border, hole-adjacent, and degenerate points inherit the normal of the
/// nearest point that has one (4-connected breadth-first fill, seeded in
/// row-major order).
pub fn estimate_normals(cloud: &PointCloud) -> Result<PointCloud> {
    let source = cloud
        .source
        .as_ref()
        .ok_or_else(|| Error::Contract("normal estimation needs grid provenance".into()))?;
    let (h, w) = (source.height, source.width);
    let mut point_at = vec![usize::MAX; h * w];
    for (i, &pix) in source.pixel_index.iter().enumerate() {
        point_at[pix] = i;
    }
    let at = |y: usize, x: usize| -> Option<usize> {
        if y < h && x < w && point_at[y * w + x] != usize::MAX {
            Some(point_at[y * w + x])
        } else {
            None
        }
    };

    let mut normals: Vec<Option<[f64; 3]>> = vec![None; cloud.len()];
    for i in 0..cloud.len() {
        let pix = source.pixel_index[i];
        let (y, x) = (pix / w, pix % w);
        let (xm, xp) = (at(y, x.wrapping_sub(1)), at(y, x + 1));
        let (ym, yp) = (at(y.wrapping_sub(1), x), at(y + 1, x));
        if let (Some(xm), Some(xp), Some(ym), Some(yp)) = (xm, xp, ym, yp) {
            let tx = sub(&cloud.points[xp], &cloud.points[xm]);
            let ty = sub(&cloud.points[yp], &cloud.points[ym]);
            let mut n = cross(&tx, &ty);
            let len = norm(&n);
            if len > 1e-12 {
                for c in &mut n {
                    *c /= len;
                }
                if n[2] > 0.0 {
                    for c in &mut n {
                        *c = -*c;
                    }
                }
                normals[i] = Some(n);
            }
        }
    }

    // Breadth-first fill from points that have normals, in deterministic
    // row-major seed order.
    let mut queue: std::collections::VecDeque<usize> = (0..cloud.len())
        .filter(|&i| normals[i].is_some())
        .collect();
    ensure(!queue.is_empty(), || {
        "cloud has no interior point with a well-defined normal".into()
    })?;
    while let Some(i) = queue.pop_front() {
        let pix = source.pixel_index[i];
        let (y, x) = (pix / w, pix % w);
        let n = normals[i].expect("queued points have normals");
        for (ny, nx) in [(y.wrapping_sub(1), x), (y + 1, x), (y, x.wrapping_sub(1)), (y, x + 1)] {
            if let Some(j) = at(ny, nx) {
                if normals[j].is_none() {
                    normals[j] = Some(n);
                    queue.push_back(j);
                }
            }
        }
    }
    // Any still-unfilled points (islands) take the first available normal.
    let fallback = normals.iter().flatten().next().copied().expect("non-empty");
    let normals: Vec<[f64; 3]> = normals.into_iter().map(|n| n.unwrap_or(fallback)).collect();
    Ok(PointCloud {
        points: cloud.points.clone(),
        normals: Some(normals),
        source: cloud.source.clone(),
    })
}

#[inline]
fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Targets above this size use the grid-bucketed nearest-neighbor index.
const BRUTE_FORCE_LIMIT: usize = 100_000;

/// Exact nearest neighbor of every query in `targets` by brute force.
/// Ties break toward the lowest target index. Returns `(distance, index)`.
pub fn nn_brute(queries: &[[f64; 3]], targets: &[[f64; 3]]) -> Vec<(f64, usize)> {
    assert!(!targets.is_empty(), "nearest neighbor needs a non-empty target");
    queries
        .par_iter()
        .map(|q| {
            let mut best = (f64::INFINITY, usize::MAX);
            for (i, t) in targets.iter().enumerate() {
                let d2 = dist2(q, t);
                if d2 < best.0 {
                    best = (d2, i);
                }
            }
            (best.0.sqrt(), best.1)
        })
        .collect()
}

/// Exact nearest neighbor via a uniform grid of buckets; identical results
/// to [`nn_brute`] including tie-breaking.
pub fn nn_bucketed(queries: &[[f64; 3]], targets: &[[f64; 3]]) -> Vec<(f64, usize)> {
    assert!(!targets.is_empty(), "nearest neighbor needs a non-empty target");
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for t in targets {
        for c in 0..3 {
            lo[c] = lo[c].min(t[c]);
            hi[c] = hi[c].max(t[c]);
        }
    }
    let max_extent = (0..3).map(|c| hi[c] - lo[c]).fold(0.0, f64::max);
    let cells_per_axis = (targets.len() as f64).cbrt().ceil().max(1.0);
    let cell = if max_extent > 0.0 {
        max_extent / cells_per_axis
    } else {
        1.0
    };
    let coord = |p: &[f64; 3]| -> [i64; 3] {
        [
            ((p[0] - lo[0]) / cell).floor() as i64,
            ((p[1] - lo[1]) / cell).floor() as i64,
            ((p[2] - lo[2]) / cell).floor() as i64,
        ]
    };
    let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, t) in targets.iter().enumerate() {
        buckets.entry(coord(t)).or_default().push(i);
    }
    let max_cell = coord(&hi);

    queries
        .par_iter()
        .map(|q| {
            let qc = coord(q);
            // Largest ring that can still contain target cells.
            let r_max = (0..3)
                .map(|c| (qc[c].max(max_cell[c] - qc[c].min(0))).abs() + max_cell[c].abs() + 1)
                .max()
                .unwrap_or(1)
                .max(1);
            let mut best = (f64::INFINITY, usize::MAX);
            let mut r: i64 = 0;
            loop {
                if best.1 != usize::MAX && (r - 1).max(0) as f64 * cell > best.0.sqrt() {
                    break;
                }
                if r > r_max && best.1 != usize::MAX {
                    break;
                }
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            let key = [qc[0] + dx, qc[1] + dy, qc[2] + dz];
                            let Some(bucket) = buckets.get(&key) else {
                                continue;
                            };
                            // Exact cell lower bound: clamp q into the cell box.
                            let mut lb2 = 0.0;
                            for c in 0..3 {
                                let cell_lo = lo[c] + key[c] as f64 * cell;
                                let d = if q[c] < cell_lo {
                                    cell_lo - q[c]
                                } else if q[c] > cell_lo + cell {
                                    q[c] - (cell_lo + cell)
                                } else {
                                    0.0
                                };
                                lb2 += d * d;
                            }
                            if lb2 > best.0 {
                                continue;
                            }
                            for &i in bucket {
                                let d2 = dist2(q, &targets[i]);
                                if d2 < best.0 || (d2 == best.0 && i < best.1) {
                                    best = (d2, i);
                                }
                            }
                        }
                    }
                }
                r += 1;
                debug_assert!(r < r_max + 4, "ring search must terminate");
            }
            (best.0.sqrt(), best.1)
        })
        .collect()
}

fn nearest_neighbors(queries: &[[f64; 3]], targets: &[[f64; 3]]) -> Vec<(f64, usize)> {
    if targets.len() < BRUTE_FORCE_LIMIT {
        nn_brute(queries, targets)
    } else {
        nn_bucketed(queries, targets)
    }
}

/// Accuracy / completeness / normal-consistency report. Accuracy and
/// completeness are meters; normal consistency is the unsigned cosine in
/// `[0, 1]` and is present only when both clouds carry normals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconReport {
    pub acc_mean: f64,
    pub acc_median: f64,
    pub comp_mean: f64,
    pub comp_median: f64,
    pub nc_mean: Option<f64>,
    pub nc_median: Option<f64>,
}

/// Point-cloud comparison: accuracy is the nearest-neighbor distance from
/// each predicted point to the ground truth (mean and median), completeness
/// the same from ground truth to prediction, and normal consistency the
/// unsigned cosine between each predicted normal and its nearest ground-
/// truth neighbor's normal.
pub fn recon_metrics(pred: &PointCloud, gt: &PointCloud) -> Result<ReconReport> {
    ensure(!pred.is_empty() && !gt.is_empty(), || {
        "reconstruction metrics need non-empty clouds".into()
    })?;
    let acc = nearest_neighbors(pred.points(), gt.points());
    let comp = nearest_neighbors(gt.points(), pred.points());
    let acc_d: Vec<f64> = acc.iter().map(|&(d, _)| d).collect();
    let comp_d: Vec<f64> = comp.iter().map(|&(d, _)| d).collect();

    let (nc_mean, nc_median) = match (pred.normals(), gt.normals()) {
        (Some(pn), Some(gn)) => {
            let nc: Vec<f64> = acc
                .iter()
                .enumerate()
                .map(|(i, &(_, j))| {
                    let a = &pn[i];
                    let b = &gn[j];
                    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).abs()
                })
                .collect();
            (
                Some(nc.iter().sum::<f64>() / nc.len() as f64),
                Some(median(nc)),
            )
        }
        _ => (None, None),
    };
    Ok(ReconReport {
        acc_mean: acc_d.iter().sum::<f64>() / acc_d.len() as f64,
        acc_median: median(acc_d),
        comp_mean: comp_d.iter().sum::<f64>() / comp_d.len() as f64,
        comp_median: median(comp_d),
        nc_mean,
        nc_median,
    })
}

impl ReconReport {
    pub fn kv_lines(&self, prefix: &str) -> String {
        let mut out = format!(
            "{prefix}acc_mean={}\n{prefix}acc_median={}\n{prefix}comp_mean={}\n{prefix}comp_median={}\n",
            self.acc_mean, self.acc_median, self.comp_mean, self.comp_median
        );
        match (self.nc_mean, self.nc_median) {
            (Some(m), Some(md)) => {
                let _ = writeln!(out, "{prefix}nc_mean={m}");
                let _ = writeln!(out, "{prefix}nc_median={md}");
            }
            _ => {
                let _ = writeln!(out, "{prefix}nc=missing-normals");
            }
        }
        out
    }
}

/// Flags flying points: a point is flying when its mean 3-D distance to its
/// `k` nearest image-space neighbors exceeds `ratio` times the cloud median
/// of that statistic. Needs grid provenance; image-space neighbor ranking
/// ties break toward the lower pixel index. Returns the per-point mask and
/// the flying count.
pub fn detect_flying_points(cloud: &PointCloud, k: usize, ratio: f64) -> Result<(Vec<bool>, usize)> {
    ensure(k >= 1, || "flying-point detector needs k >= 1".into())?;
    let source = cloud
        .source
        .as_ref()
        .ok_or_else(|| Error::Contract("flying-point detection needs grid provenance".into()))?;
    ensure(cloud.len() > k, || {
        format!("grid too small: {} points cannot have {k} neighbors", cloud.len())
    })?;
    let (h, w) = (source.height, source.width);
    let mut point_at = vec![usize::MAX; h * w];
    for (i, &pix) in source.pixel_index.iter().enumerate() {
        point_at[pix] = i;
    }

    let stats: Vec<f64> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let pix = source.pixel_index[i];
            let (y, x) = ((pix / w) as i64, (pix % w) as i64);
            // Expanding square rings until the k nearest (by image
            // distance, then pixel index) cannot change.
            let mut candidates: Vec<(i64, usize, usize)> = Vec::new(); // (d2_img, pixel, point)
            let r_max = (h.max(w)) as i64;
            let mut r = 1i64;
            loop {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dy.abs().max(dx.abs()) != r {
                            continue;
                        }
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let pix_n = ny as usize * w + nx as usize;
                        let j = point_at[pix_n];
                        if j != usize::MAX {
                            candidates.push((dy * dy + dx * dx, pix_n, j));
                        }
                    }
                }
                if candidates.len() >= k {
                    candidates.sort_unstable_by_key(|&(d2, pix, _)| (d2, pix));
                    let kth = candidates[k - 1].0;
                    if (r + 1) * (r + 1) > kth {
                        break;
                    }
                }
                r += 1;
                if r > r_max {
                    break;
                }
            }
            let mean_dist: f64 = candidates
                .iter()
                .take(k)
                .map(|&(_, _, j)| dist2(&cloud.points[i], &cloud.points[j]).sqrt())
                .sum::<f64>()
                / k as f64;
            mean_dist
        })
        .collect();

    let med = median(stats.clone());
    let mask: Vec<bool> = stats.iter().map(|&s| s > ratio * med).collect();
    let count = mask.iter().filter(|&&b| b).count();
    Ok((mask, count))
}

/// Masks the lowest-confidence pixels of a depth map to NaN.
///
/// Exactly `floor(percentile * n / 100)` pixels are masked — the lower
/// order statistics of the confidence distribution, ties broken by pixel
/// index.
pub fn confidence_mask(depth: &Grid, confidence: &Grid, percentile: f64) -> Result<Grid> {
    ensure(depth.same_shape(confidence), || {
        "confidence grid must match the depth grid".into()
    })?;
    ensure((0.0..100.0).contains(&percentile), || {
        format!("percentile must lie in [0, 100), got {percentile}")
    })?;
    let n = depth.len();
    let to_mask = (percentile * n as f64 / 100.0).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        confidence.data()[a]
            .total_cmp(&confidence.data()[b])
            .then(a.cmp(&b))
    });
    let mut out = depth.clone();
    for &i in order.iter().take(to_mask) {
        out.data_mut()[i] = f64::NAN;
    }
    Ok(out)
}

/// Writes an ASCII PLY file (vertices, plus normals when present).
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals().is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.push_str("end_header\n");
    for (i, p) in cloud.points().iter().enumerate() {
        match cloud.normals() {
            Some(normals) => {
                let n = normals[i];
                let _ = writeln!(out, "{} {} {} {} {} {}", p[0], p[1], p[2], n[0], n[1], n[2]);
            }
            None => {
                let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
            }
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
