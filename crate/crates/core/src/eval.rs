//! 2-D evaluation: Sobel depth-edge extraction, boundary segmentation
//! metrics, and standard monocular depth metrics with median scaling.

use crate::error::{ensure, Result};
use crate::grid::{Grid, MaskGrid};

/// Edge extraction parameters. The fixed gradient threshold assumes
/// pixel-intensity scale, so depth is affinely mapped to `[0, 255]` first
/// by default (disable with `scale_to_255 = false` to threshold raw metric
/// gradients).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeConfig {
    pub threshold: f64,
    pub scale_to_255: bool,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            threshold: 50.0,
            scale_to_255: true,
        }
    }
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Sobel gradient magnitude `sqrt(Gx^2 + Gy^2)` with edge-replication
/// padding. `NaN` input pixels propagate `NaN` through every window that
/// touches them. A degenerate value range scales to zero.
pub fn sobel_magnitude(depth: &Grid, cfg: &EdgeConfig) -> Result<Grid> {
    ensure(cfg.threshold > 0.0, || "edge threshold must be positive".into())?;
    let (h, w) = (depth.height(), depth.width());
    let (lo, hi) = depth
        .min_max_finite()
        .ok_or_else(|| crate::error::Error::Contract("sobel input is entirely NaN".into()))?;
    let scaled: Grid = if cfg.scale_to_255 {
        let range = hi - lo;
        Grid::from_fn(h, w, |y, x| {
            let v = depth.at(y, x);
            if range > 0.0 {
                (v - lo) / range * 255.0
            } else {
                v * 0.0 // preserves NaN, zeros finite values
            }
        })
    } else {
        depth.clone()
    };
    let clamp = |v: i64, max: usize| v.clamp(0, max as i64 - 1) as usize;
    Ok(Grid::from_fn(h, w, |y, x| {
        let mut gx = 0.0;
        let mut gy = 0.0;
        for ky in 0..3 {
            for kx in 0..3 {
                let sy = clamp(y as i64 + ky as i64 - 1, h);
                let sx = clamp(x as i64 + kx as i64 - 1, w);
                let v = scaled.at(sy, sx);
                gx += SOBEL_X[ky][kx] * v;
                gy += SOBEL_Y[ky][kx] * v;
            }
        }
        (gx * gx + gy * gy).sqrt()
    }))
}

/// Thresholds the Sobel magnitude: edge where `G > threshold`; `NaN` is not
/// an edge. Raising the threshold never adds edge pixels.
pub fn extract_edges(depth: &Grid, cfg: &EdgeConfig) -> Result<MaskGrid> {
    let mag = sobel_magnitude(depth, cfg)?;
    MaskGrid::new(
        depth.height(),
        depth.width(),
        mag.data().iter().map(|&g| g > cfg.threshold).collect(),
    )
}

/// Set-based boundary comparison counts and the derived ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryReport {
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pred_count: usize,
    pub gt_count: usize,
    pub intersection: usize,
    pub union: usize,
}

/// Pixel-set comparison of predicted vs ground-truth edge masks.
///
/// Conventions: two empty masks score 1 everywhere; an empty prediction
/// against non-empty ground truth scores precision 0 (an empty prediction
/// has recovered nothing), mirrored for recall. `f1 = 2PR/(P+R)` when
/// `P+R > 0`, else 0; `miou = |I|/|U|` when the union is non-empty, else 1.
pub fn boundary_metrics(pred: &MaskGrid, gt: &MaskGrid) -> Result<BoundaryReport> {
    ensure(pred.height() == gt.height() && pred.width() == gt.width(), || {
        "boundary masks must share dimensions".into()
    })?;
    let mut pred_count = 0usize;
    let mut gt_count = 0usize;
    let mut intersection = 0usize;
    for (p, g) in pred.data().iter().zip(gt.data()) {
        pred_count += usize::from(*p);
        gt_count += usize::from(*g);
        intersection += usize::from(*p && *g);
    }
    let union = pred_count + gt_count - intersection;
    let precision = if pred_count > 0 {
        intersection as f64 / pred_count as f64
    } else if gt_count == 0 {
        1.0
    } else {
        0.0
    };
    let recall = if gt_count > 0 {
        intersection as f64 / gt_count as f64
    } else if pred_count == 0 {
        1.0
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let miou = if union > 0 {
        intersection as f64 / union as f64
    } else {
        1.0
    };
    Ok(BoundaryReport {
        miou,
        precision,
        recall,
        f1,
        pred_count,
        gt_count,
        intersection,
        union,
    })
}

/// AbsRel and threshold accuracies, optionally after median scaling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthReport {
    pub abs_rel: f64,
    pub delta_1: f64,
    pub delta_2: f64,
    pub delta_3: f64,
    /// Multiplier applied to the prediction (1 when scaling is off).
    pub scale: f64,
    pub valid_count: usize,
}

/// Standard monocular depth metrics over valid pixels (finite prediction,
/// finite positive ground truth).
///
/// With `median_scaling` the prediction is first multiplied by
/// `median(gt) / median(pred)`, which removes global scale:
/// `abs_rel = mean(|pred - gt| / gt)`, `delta_k` is the fraction of pixels
/// with `max(pred/gt, gt/pred) < 1.25^k`.
pub fn depth_metrics(pred: &Grid, gt: &Grid, median_scaling: bool) -> Result<DepthReport> {
    ensure(pred.same_shape(gt), || "depth grids must share dimensions".into())?;
    let mut pred_valid = Vec::new();
    let mut gt_valid = Vec::new();
    for (p, g) in pred.data().iter().zip(gt.data()) {
        if p.is_finite() && g.is_finite() && *g > 0.0 {
            pred_valid.push(*p);
            gt_valid.push(*g);
        }
    }
    ensure(!pred_valid.is_empty(), || {
        "depth metrics need at least one valid pixel with positive ground truth".into()
    })?;
    let scale = if median_scaling {
        let pred_med = median(pred_valid.clone());
        ensure(pred_med > 0.0, || {
            format!("median scaling needs a positive prediction median, got {pred_med}")
        })?;
        median(gt_valid.clone()) / pred_med
    } else {
        1.0
    };
    let n = pred_valid.len() as f64;
    let mut abs_rel = 0.0;
    let mut d = [0usize; 3];
    for (&p, &g) in pred_valid.iter().zip(&gt_valid) {
        let p = p * scale;
        abs_rel += (p - g).abs() / g;
        let ratio = if p > 0.0 {
            (p / g).max(g / p)
        } else {
            f64::INFINITY
        };
        for (k, count) in d.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *count += 1;
            }
        }
    }
    Ok(DepthReport {
        abs_rel: abs_rel / n,
        delta_1: d[0] as f64 / n,
        delta_2: d[1] as f64 / n,
        delta_3: d[2] as f64 / n,
        scale,
        valid_count: pred_valid.len(),
    })
}

/// Midpoint median (mean of the two central order statistics for even
/// lengths).
pub fn median(mut values: Vec<f64>) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    values.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in median input"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl BoundaryReport {
    /// `key=value` lines (prefixable for per-scene reports).
    pub fn kv_lines(&self, prefix: &str) -> String {
        format!(
            "{prefix}miou={}\n{prefix}precision={}\n{prefix}recall={}\n{prefix}f1={}\n\
             {prefix}pred_edges={}\n{prefix}gt_edges={}\n{prefix}intersection={}\n{prefix}union={}\n",
            self.miou,
            self.precision,
            self.recall,
            self.f1,
            self.pred_count,
            self.gt_count,
            self.intersection,
            self.union
        )
    }
}

impl DepthReport {
    pub fn kv_lines(&self, prefix: &str) -> String {
        format!(
            "{prefix}abs_rel={}\n{prefix}delta_1={}\n{prefix}delta_2={}\n{prefix}delta_3={}\n\
             {prefix}scale={}\n{prefix}valid_pixels={}\n",
            self.abs_rel, self.delta_1, self.delta_2, self.delta_3, self.scale, self.valid_count
        )
    }
}
