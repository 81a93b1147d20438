//! Dense 2-D grid containers, the `MDG1` binary grid format, and PPM export.
//!
//! [`Grid`] is the universal dense carrier (depth maps, gradient magnitudes,
//! gate-weight channels). Grids are immutable from a reader's perspective
//! once built; all mutation goes through explicit `*_mut` accessors owned by
//! a single writer, so shared references are safe across threads.
//!
//! File formats (bit-exact):
//!
//! - `MDG1` grid: magic `MDG1`, height and width as 32-bit little-endian
//!   unsigned integers, then the row-major data as 64-bit little-endian
//!   IEEE-754 values.
//! - Images: binary PPM (`P6`, maxval 255).

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Magic bytes of the binary grid format.
pub const GRID_MAGIC: &[u8; 4] = b"MDG1";

/// An H×W scalar field stored row-major as `f64`.
///
/// Values are finite unless the grid is explicitly used as a masked grid, in
/// which case `NaN` marks invalid pixels; every metric operation skips `NaN`
/// pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    /// Builds a grid from row-major data. Dimensions must be positive and
    /// match the data length.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure(height > 0 && width > 0, || {
            format!("grid dimensions must be positive, got {height}x{width}")
        })?;
        ensure(data.len() == height * width, || {
            format!(
                "grid data length {} does not match {height}x{width}",
                data.len()
            )
        })?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Builds a grid by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false // dimensions are always positive
    }

    #[inline]
    pub fn same_shape(&self, other: &Grid) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Minimum and maximum over finite pixels, or `None` if every pixel is
    /// non-finite.
    pub fn min_max_finite(&self) -> Option<(f64, f64)> {
        let mut out: Option<(f64, f64)> = None;
        for &v in &self.data {
            if v.is_finite() {
                out = Some(match out {
                    None => (v, v),
                    Some((lo, hi)) => (lo.min(v), hi.max(v)),
                });
            }
        }
        out
    }
}

/// K same-sized grids treated as channels (per-expert depth maps, gate
/// logits, gate weights).
#[derive(Debug, Clone, PartialEq)]
pub struct GridStack {
    grids: Vec<Grid>,
}

impl GridStack {
    /// Builds a stack; all channels must share dimensions.
    pub fn new(grids: Vec<Grid>) -> Result<Self> {
        ensure(!grids.is_empty(), || "grid stack needs at least one channel".into())?;
        let (h, w) = (grids[0].height(), grids[0].width());
        ensure(grids.iter().all(|g| g.height() == h && g.width() == w), || {
            "grid stack channels must share dimensions".into()
        })?;
        Ok(Self { grids })
    }

    pub fn from_grid(grid: Grid) -> Self {
        Self { grids: vec![grid] }
    }

    /// Stack of `channels` zero grids.
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0, "grid stack needs at least one channel");
        Self {
            grids: (0..channels).map(|_| Grid::zeros(height, width)).collect(),
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.grids.len()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.grids[0].height()
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.grids[0].width()
    }

    #[inline]
    pub fn channel(&self, k: usize) -> &Grid {
        &self.grids[k]
    }

    #[inline]
    pub fn channel_mut(&mut self, k: usize) -> &mut Grid {
        &mut self.grids[k]
    }

    #[inline]
    pub fn iter(&self) -> std::slice::Iter<'_, Grid> {
        self.grids.iter()
    }

    #[inline]
    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Grid> {
        self.grids.iter_mut()
    }

    pub fn same_shape(&self, other: &GridStack) -> bool {
        self.channels() == other.channels()
            && self.height() == other.height()
            && self.width() == other.width()
    }
}

/// An H×W boolean mask (edge maps, validity masks).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        ensure(height > 0 && width > 0, || {
            format!("mask dimensions must be positive, got {height}x{width}")
        })?;
        ensure(data.len() == height * width, || {
            format!(
                "mask data length {} does not match {height}x{width}",
                data.len()
            )
        })?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn falses(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Mask as a 0.0/1.0 grid (used to persist masks in `MDG1`).
    pub fn to_grid(&self) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Inverse of [`MaskGrid::to_grid`]: nonzero means set.
    pub fn from_grid(grid: &Grid) -> Self {
        Self {
            height: grid.height(),
            width: grid.width(),
            data: grid.data().iter().map(|&v| v != 0.0).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// MDG1 binary grid format
// ---------------------------------------------------------------------------

/// Writes a grid in the `MDG1` format.
pub fn write_grid(grid: &Grid, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + grid.len() * 8);
    bytes.extend_from_slice(GRID_MAGIC);
    bytes.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    for &v in grid.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a grid written by [`write_grid`].
pub fn read_grid(path: &Path) -> Result<Grid> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::format(path, "file shorter than the 12-byte header"),
        _ => Error::io(path, e),
    })?;
    if &header[0..4] != GRID_MAGIC {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected {:?}", &header[0..4], GRID_MAGIC),
        ));
    }
    let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    if height == 0 || width == 0 {
        return Err(Error::format(path, format!("zero dimension {height}x{width}")));
    }
    let expected = height * width * 8;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, expected {expected} for {height}x{width}",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Grid::new(height, width, data)
}

// ---------------------------------------------------------------------------
// PPM image export
// ---------------------------------------------------------------------------

/// How to colorize a stack when exporting it as an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorMode {
    /// Single channel mapped linearly from `[min, max]` to a grayscale ramp.
    DepthColormap,
    /// Each pixel takes the palette color of its maximum-weight channel.
    GateArgmax,
    /// Weight-weighted average of the palette colors.
    GateBlend,
}

/// Fixed palette color of expert `k` out of `channels`.
///
/// Red, blue, green, yellow for up to four experts; evenly spaced hues
/// otherwise.
pub fn expert_color(k: usize, channels: usize) -> [u8; 3] {
    const BASE: [[u8; 3]; 4] = [[255, 0, 0], [0, 0, 255], [0, 255, 0], [255, 255, 0]];
    if channels <= 4 {
        BASE[k]
    } else {
        hsv_to_rgb(k as f64 / channels as f64 * 360.0)
    }
}

fn hsv_to_rgb(hue_deg: f64) -> [u8; 3] {
    // Full saturation and value; standard sector interpolation.
    let h = (hue_deg.rem_euclid(360.0)) / 60.0;
    let sector = h.floor() as usize % 6;
    let f = h - h.floor();
    let q = ((1.0 - f) * 255.0).round() as u8;
    let t = (f * 255.0).round() as u8;
    match sector {
        0 => [255, t, 0],
        1 => [q, 255, 0],
        2 => [0, 255, t],
        3 => [0, q, 255],
        4 => [t, 0, 255],
        _ => [255, 0, q],
    }
}

/// Renders a stack to a binary PPM (`P6`) image.
///
/// Gate modes require per-pixel channel sums within `1e-6` of 1.
/// `DepthColormap` requires a single channel; a degenerate value range
/// (max == min) renders mid-gray instead of failing, so visualization can
/// never abort a run.
pub fn export_color_image(stack: &GridStack, mode: ColorMode, path: &Path) -> Result<()> {
    let pixels = render_pixels(stack, mode)?;
    let mut bytes = format!("P6\n{} {}\n255\n", stack.width(), stack.height()).into_bytes();
    bytes.extend_from_slice(&pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn render_pixels(stack: &GridStack, mode: ColorMode) -> Result<Vec<u8>> {
    let (h, w, channels) = (stack.height(), stack.width(), stack.channels());
    let mut out = Vec::with_capacity(h * w * 3);
    match mode {
        ColorMode::DepthColormap => {
            ensure(channels == 1, || {
                format!("depth colormap takes a single channel, got {channels}")
            })?;
            let grid = stack.channel(0);
            let (lo, hi) = grid.min_max_finite().unwrap_or((0.0, 0.0));
            let range = hi - lo;
            for &v in grid.data() {
                let g = if !v.is_finite() {
                    0
                } else if range > 0.0 {
                    (((v - lo) / range) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    128
                };
                out.extend_from_slice(&[g, g, g]);
            }
        }
        ColorMode::GateArgmax | ColorMode::GateBlend => {
            check_normalized(stack)?;
            let palette: Vec<[u8; 3]> = (0..channels).map(|k| expert_color(k, channels)).collect();
            for i in 0..h * w {
                match mode {
                    ColorMode::GateArgmax => {
                        let mut best = 0;
                        for k in 1..channels {
                            if stack.channel(k).data()[i] > stack.channel(best).data()[i] {
                                best = k;
                            }
                        }
                        out.extend_from_slice(&palette[best]);
                    }
                    ColorMode::GateBlend => {
                        let mut rgb = [0.0f64; 3];
                        for k in 0..channels {
                            let wk = stack.channel(k).data()[i];
                            for c in 0..3 {
                                rgb[c] += wk * f64::from(palette[k][c]);
                            }
                        }
                        out.extend(rgb.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
                    }
                    ColorMode::DepthColormap => unreachable!(),
                }
            }
        }
    }
    Ok(out)
}

fn check_normalized(stack: &GridStack) -> Result<()> {
    for i in 0..stack.height() * stack.width() {
        let sum: f64 = stack.iter().map(|g| g.data()[i]).sum();
        ensure((sum - 1.0).abs() <= 1e-6, || {
            format!("gate weights must sum to 1 per pixel, got {sum} at pixel {i}")
        })?;
    }
    Ok(())
}

/// Writes any byte buffer, mapping failures to [`Error::Io`].
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}
