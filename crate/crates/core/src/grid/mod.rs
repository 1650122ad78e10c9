//! Georeferenced rasters and the resampling operators shared by every stage.
//!
//! A [`GeoGrid`] stores one variable on a regular latitude/longitude lattice.
//! `lat0`/`lon0` locate the center of the north-west cell; rows advance
//! southwards and columns eastwards.

mod raster;
mod series;

pub use raster::{decode_grd, encode_grd, read_raster, write_raster, GRD_MAGIC};
pub use series::{parse_manifest, read_series, write_series, SeriesManifest, MANIFEST_FILE};

use thiserror::Error;

/// Smallest standard deviation a [`NormStats`] channel may carry.
pub const STD_FLOOR: f64 = 1e-8;
/// Tolerance in degrees when comparing grid georeferences.
pub const GEOREF_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("{rows}x{cols} grid is not divisible by factor {factor}")]
    NotDivisible { rows: usize, cols: usize, factor: usize },
    #[error("resampling factor must be at least 2, got {0}")]
    BadFactor(usize),
    #[error("grid must have at least one row and column, got {rows}x{cols}")]
    Empty { rows: usize, cols: usize },
    #[error("value count {got} does not match {rows}x{cols}")]
    ValueCount { rows: usize, cols: usize, got: usize },
    #[error("cell size must be positive and finite (dlat={dlat}, dlon={dlon})")]
    BadCellSize { dlat: f64, dlon: f64 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("channel stack is empty")]
    NoChannels,
    #[error("channel {index} does not share the stack geometry")]
    ChannelMismatch { index: usize },
    #[error("normalization stats cover {stats} channels, stack has {stack}")]
    StatsMismatch { stats: usize, stack: usize },
    #[error("bad magic {:?}, expected \"GRD1\"", String::from_utf8_lossy(.found))]
    BadMagic { found: [u8; 4] },
    #[error("truncated payload: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dimensions {rows}x{cols} overflow the addressable size")]
    DimensionOverflow { rows: u64, cols: u64 },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GridError>;

/// A 2-D raster of one variable with its georeferencing.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoGrid {
    rows: usize,
    cols: usize,
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
    values: Vec<f64>,
}

impl GeoGrid {
    pub fn new(
        rows: usize,
        cols: usize,
        lat0: f64,
        lon0: f64,
        dlat: f64,
        dlon: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(GridError::Empty { rows, cols });
        }
        if values.len() != rows * cols {
            return Err(GridError::ValueCount { rows, cols, got: values.len() });
        }
        if !(dlat.is_finite() && dlon.is_finite() && dlat > 0.0 && dlon > 0.0)
            || !lat0.is_finite()
            || !lon0.is_finite()
        {
            return Err(GridError::BadCellSize { dlat, dlon });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self { rows, cols, lat0, lon0, dlat, dlon, values })
    }

    /// Unit-spaced grid anchored at the origin, handy for tests and scratch work.
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(rows, cols, 0.0, 0.0, 1.0, 1.0, values)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Result<Self> {
        Self::from_values(rows, cols, vec![value; rows * cols])
    }

    /// Same georeferencing as `self`, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.rows, self.cols, self.lat0, self.lon0, self.dlat, self.dlon, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    /// Value at (row, col) with out-of-range indices clamped to the border.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.rows as isize - 1) as usize;
        let c = col.clamp(0, self.cols as isize - 1) as usize;
        self.values[r * self.cols + c]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Same shape and same cell-center lattice, within `tol` degrees.
    pub fn same_georef(&self, other: &GeoGrid, tol: f64) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && (self.lat0 - other.lat0).abs() <= tol
            && (self.lon0 - other.lon0).abs() <= tol
            && (self.dlat - other.dlat).abs() <= tol
            && (self.dlon - other.dlon).abs() <= tol
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_values(self.values.iter().map(|&v| f(v)).collect())
    }

    /// Copy of the `h`x`w` window whose north-west cell is (row, col).
    pub fn window(&self, row: usize, col: usize, h: usize, w: usize) -> Result<Self> {
        if row + h > self.rows || col + w > self.cols {
            return Err(GridError::ValueCount { rows: h, cols: w, got: 0 });
        }
        let mut values = Vec::with_capacity(h * w);
        for r in row..row + h {
            values.extend_from_slice(&self.values[r * self.cols + col..r * self.cols + col + w]);
        }
        Self::new(
            h,
            w,
            self.lat0 - row as f64 * self.dlat,
            self.lon0 + col as f64 * self.dlon,
            self.dlat,
            self.dlon,
            values,
        )
    }

    /// Georeference that `coarsen(self, factor)` would produce.
    pub fn coarse_georef(&self, factor: usize) -> (f64, f64, f64, f64) {
        let half = (factor as f64 - 1.0) / 2.0;
        (
            self.lat0 - half * self.dlat,
            self.lon0 + half * self.dlon,
            self.dlat * factor as f64,
            self.dlon * factor as f64,
        )
    }

    /// Georeference that `bicubic_upsample(self, factor)` would produce.
    pub fn fine_georef(&self, factor: usize) -> (f64, f64, f64, f64) {
        let f = factor as f64;
        let dlat = self.dlat / f;
        let dlon = self.dlon / f;
        let half = (f - 1.0) / 2.0;
        (self.lat0 + half * dlat, self.lon0 - half * dlon, dlat, dlon)
    }
}

/// Area-mean block pooling: each output cell averages a `factor`x`factor` block.
pub fn coarsen(g: &GeoGrid, factor: usize) -> Result<GeoGrid> {
    if factor < 2 {
        return Err(GridError::BadFactor(factor));
    }
    if g.rows % factor != 0 || g.cols % factor != 0 {
        return Err(GridError::NotDivisible { rows: g.rows, cols: g.cols, factor });
    }
    let (rows, cols) = (g.rows / factor, g.cols / factor);
    let mut sums = vec![0.0; rows * cols];
    for r in 0..g.rows {
        let out_row = &mut sums[(r / factor) * cols..(r / factor + 1) * cols];
        let src = &g.values[r * g.cols..(r + 1) * g.cols];
        for (c, v) in src.iter().enumerate() {
            out_row[c / factor] += v;
        }
    }
    let area = (factor * factor) as f64;
    sums.iter_mut().for_each(|s| *s /= area);
    let (lat0, lon0, dlat, dlon) = g.coarse_georef(factor);
    GeoGrid::new(rows, cols, lat0, lon0, dlat, dlon, sums)
}

/// Catmull-Rom (a = -0.5) weights for the four taps around a sample at
/// fractional offset `t` in `[0, 1)` from tap 1.
#[inline]
pub fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Evaluate a 1-D edge-clamped Catmull-Rom interpolant of `samples` at
/// continuous index `x`.
pub fn cubic_sample_1d(samples: &[f64], x: f64) -> f64 {
    let (base, w) = taps(x);
    let n = samples.len() as isize;
    (0..4)
        .map(|k| w[k] * samples[(base + k as isize - 1).clamp(0, n - 1) as usize])
        .sum()
}

#[inline]
fn taps(x: f64) -> (isize, [f64; 4]) {
    let base = x.floor();
    (base as isize, catmull_rom_weights(x - base))
}

/// Bicubic (Catmull-Rom, edge-clamped) refinement by an integer factor.
///
/// Output cell centers sit at input-index coordinate `(i + 0.5) / factor - 0.5`,
/// so coarse cell centers coincide with the centroid of their refined block.
pub fn bicubic_upsample(g: &GeoGrid, factor: usize) -> Result<GeoGrid> {
    if factor < 2 {
        return Err(GridError::BadFactor(factor));
    }
    let rows = g.rows * factor;
    let cols = g.cols * factor;
    let f = factor as f64;

    let col_taps: Vec<(isize, [f64; 4])> =
        (0..cols).map(|j| taps((j as f64 + 0.5) / f - 0.5)).collect();

    // Separable: interpolate along columns for every input row, then along rows.
    let mut horiz = vec![0.0; g.rows * cols];
    for r in 0..g.rows {
        let src = &g.values[r * g.cols..(r + 1) * g.cols];
        let dst = &mut horiz[r * cols..(r + 1) * cols];
        for (j, (base, w)) in col_taps.iter().enumerate() {
            let mut acc = 0.0;
            for k in 0..4 {
                let c = (base + k as isize - 1).clamp(0, g.cols as isize - 1) as usize;
                acc += w[k] * src[c];
            }
            dst[j] = acc;
        }
    }

    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let (base, w) = taps((i as f64 + 0.5) / f - 0.5);
        let dst = &mut out[i * cols..(i + 1) * cols];
        for k in 0..4 {
            let r = (base + k as isize - 1).clamp(0, g.rows as isize - 1) as usize;
            let src = &horiz[r * cols..(r + 1) * cols];
            let wk = w[k];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += wk * s;
            }
        }
    }

    let (lat0, lon0, dlat, dlon) = g.fine_georef(factor);
    GeoGrid::new(rows, cols, lat0, lon0, dlat, dlon, out)
}

/// Extend a grid by `pad` replicated border cells on every side.
pub fn replicate_pad(g: &GeoGrid, pad: usize) -> Result<GeoGrid> {
    let rows = g.rows + 2 * pad;
    let cols = g.cols + 2 * pad;
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let sr = r as isize - pad as isize;
        for c in 0..cols {
            values.push(g.get_clamped(sr, c as isize - pad as isize));
        }
    }
    GeoGrid::new(
        rows,
        cols,
        g.lat0 + pad as f64 * g.dlat,
        g.lon0 - pad as f64 * g.dlon,
        g.dlat,
        g.dlon,
        values,
    )
}

/// Co-registered grids used together as network input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    channels: Vec<GeoGrid>,
    roles: Vec<String>,
}

impl ChannelStack {
    pub fn new(channels: Vec<GeoGrid>, roles: Vec<String>) -> Result<Self> {
        let first = channels.first().ok_or(GridError::NoChannels)?;
        for (index, ch) in channels.iter().enumerate().skip(1) {
            if !ch.same_georef(first, GEOREF_TOL) {
                return Err(GridError::ChannelMismatch { index });
            }
        }
        if roles.len() != channels.len() {
            return Err(GridError::StatsMismatch { stats: roles.len(), stack: channels.len() });
        }
        Ok(Self { channels, roles })
    }

    pub fn channels(&self) -> &[GeoGrid] {
        &self.channels
    }

    pub fn roles(&self) -> &[String] {
        &self.roles
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }

    pub fn into_channels(self) -> Vec<GeoGrid> {
        self.channels
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Self {
        let std = std.into_iter().map(|s| s.max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    /// Population mean/std of every channel over the whole stack.
    pub fn fit(cs: &ChannelStack) -> Self {
        let (mean, std) = cs.channels.iter().map(|ch| mean_std(ch.values())).unzip();
        Self::new(mean, std)
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    pub fn apply(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    #[inline]
    pub fn invert(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn normalize(cs: &ChannelStack, stats: &NormStats) -> Result<ChannelStack> {
    transform(cs, stats, NormStats::apply)
}

pub fn denormalize(cs: &ChannelStack, stats: &NormStats) -> Result<ChannelStack> {
    transform(cs, stats, NormStats::invert)
}

fn transform(
    cs: &ChannelStack,
    stats: &NormStats,
    f: fn(&NormStats, usize, f64) -> f64,
) -> Result<ChannelStack> {
    if stats.channels() != cs.len() {
        return Err(GridError::StatsMismatch { stats: stats.channels(), stack: cs.len() });
    }
    let channels = cs
        .channels
        .iter()
        .enumerate()
        .map(|(i, ch)| ch.map(|v| f(stats, i, v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ChannelStack { channels, roles: cs.roles.clone() })
}
