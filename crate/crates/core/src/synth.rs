//! Deterministic synthetic terrain and orographically coupled daily precipitation.
//!
//! Randomness comes from ChaCha8 with one stream per (seed, day): stream 0
//! draws the terrain and stream `d + 1` draws day `d`, so any day can be
//! regenerated on its own and in any order.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::grid::{GeoGrid, GridError};

/// Elevation range of the generated terrain, in meters.
pub const MAX_ELEVATION: f64 = 3000.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("grid {rows}x{cols} must be non-empty and divisible by 8")]
    BadDims { rows: usize, cols: usize },
    #[error("day count must be at least 1")]
    NoDays,
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("elevation is {got:?}, configuration expects {want:?}")]
    ElevationDims { got: (usize, usize), want: (usize, usize) },
    #[error("split fraction {fraction} of {days} days leaves an empty side")]
    DegenerateSplit { fraction: f64, days: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub rows: usize,
    pub cols: usize,
    pub days: usize,
    pub seed: u64,
    /// Target fraction of wet cells per day.
    pub rain_fraction: f64,
    /// Wet amounts are multiplied by `1 + coupling * elevation / 3000`.
    pub coupling: f64,
    /// Standard deviation, in cells, of the Gaussian filter shaping storms.
    pub storm_length: f64,
    /// Exponent applied to storm excess; values above 1 skew amounts.
    pub skew: f64,
    /// Gamma shape of the daily storm intensity.
    pub intensity_shape: f64,
    /// Gamma scale of the daily storm intensity, mm/day.
    pub intensity_scale: f64,
    /// Spectral slope of the terrain power spectrum, `P(k) ~ k^-slope`.
    pub terrain_slope: f64,
    pub start_date: NaiveDate,
    pub lat0: f64,
    pub lon0: f64,
    pub cell: f64,
}

impl Default for SynthConfig {
    /// A 208x464 1/8-degree raster over the conterminous US.
    fn default() -> Self {
        Self {
            rows: 208,
            cols: 464,
            days: 365,
            seed: 0,
            rain_fraction: 0.3,
            coupling: 3.0,
            storm_length: 4.0,
            skew: 1.5,
            intensity_shape: 2.0,
            intensity_scale: 1.0,
            terrain_slope: 2.0,
            start_date: NaiveDate::from_ymd_opt(2000, 1, 1).unwrap(),
            lat0: 49.9375,
            lon0: -124.6875,
            cell: 0.125,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.rows % 8 != 0 || self.cols % 8 != 0 {
            return Err(SynthError::BadDims { rows: self.rows, cols: self.cols });
        }
        if self.days == 0 {
            return Err(SynthError::NoDays);
        }
        let checks = [
            (self.rain_fraction > 0.0 && self.rain_fraction < 1.0, "rain_fraction must lie in (0, 1)"),
            (self.coupling >= 0.0 && self.coupling.is_finite(), "coupling must be >= 0"),
            (self.storm_length > 0.0 && self.storm_length.is_finite(), "storm_length must be > 0"),
            (self.skew > 0.0 && self.skew.is_finite(), "skew must be > 0"),
            (self.intensity_shape > 0.0 && self.intensity_scale > 0.0, "intensity parameters must be > 0"),
            (self.terrain_slope >= 0.0 && self.terrain_slope.is_finite(), "terrain_slope must be >= 0"),
            (self.cell > 0.0 && self.cell.is_finite(), "cell must be > 0"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(SynthError::Param(msg.into()));
            }
        }
        Ok(())
    }

    fn grid(&self, values: Vec<f64>) -> Result<GeoGrid> {
        Ok(GeoGrid::new(self.rows, self.cols, self.lat0, self.lon0, self.cell, self.cell, values)?)
    }

    fn stream(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// White Gaussian noise shaped in the frequency domain by `filter(k)`, where
/// `k` is the radial frequency in cycles per cell.
fn filtered_noise(rows: usize, cols: usize, rng: &mut ChaCha8Rng, filter: impl Fn(f64) -> f64) -> Vec<f64> {
    let mut data: Vec<Complex<f64>> =
        (0..rows * cols).map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::new();
    fft2(&mut data, rows, cols, &mut planner, false);
    let freq = |i: usize, n: usize| i.min(n - i) as f64 / n as f64;
    for r in 0..rows {
        let fy = freq(r, rows);
        for c in 0..cols {
            let fx = freq(c, cols);
            data[r * cols + c] *= filter((fx * fx + fy * fy).sqrt());
        }
    }
    fft2(&mut data, rows, cols, &mut planner, true);
    data.into_iter().map(|z| z.re).collect()
}

fn fft2(data: &mut [Complex<f64>], rows: usize, cols: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    for row in data.chunks_exact_mut(cols) {
        row_fft.process(row);
    }
    let mut column = vec![Complex::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
    if inverse {
        let scale = 1.0 / (rows * cols) as f64;
        data.iter_mut().for_each(|z| *z *= scale);
    }
}

/// Power-law (fractal) terrain rescaled to `[0, 3000]` m.
pub fn gen_elevation(cfg: &SynthConfig) -> Result<GeoGrid> {
    cfg.validate()?;
    let half_slope = cfg.terrain_slope / 2.0;
    let raw = filtered_noise(cfg.rows, cfg.cols, &mut cfg.stream(0), |k| {
        if k == 0.0 {
            0.0
        } else {
            k.powf(-half_slope)
        }
    });
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let values = raw.iter().map(|v| ((v - lo) / span * MAX_ELEVATION).clamp(0.0, MAX_ELEVATION)).collect();
    cfg.grid(values)
}

/// One day of precipitation in mm/day.
pub fn gen_precip_day(elevation: &GeoGrid, cfg: &SynthConfig, day: usize) -> Result<GeoGrid> {
    cfg.validate()?;
    if elevation.dims() != (cfg.rows, cfg.cols) {
        return Err(SynthError::ElevationDims { got: elevation.dims(), want: (cfg.rows, cfg.cols) });
    }
    let mut rng = cfg.stream(day as u64 + 1);
    let length = cfg.storm_length;
    let two_pi_sq = 2.0 * std::f64::consts::PI * std::f64::consts::PI;
    let mut storm = filtered_noise(cfg.rows, cfg.cols, &mut rng, |k| (-two_pi_sq * length * length * k * k).exp());
    let n = storm.len() as f64;
    let mean = storm.iter().sum::<f64>() / n;
    let std = (storm.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(1e-12);
    storm.iter_mut().for_each(|v| *v = (*v - mean) / std);

    // Wet area varies from day to day around the target fraction.
    let jitter: f64 = rng.gen_range(0.5..1.5);
    let wet_fraction = (cfg.rain_fraction * jitter).clamp(0.0, 1.0);
    let mut sorted = storm.clone();
    sorted.sort_by(f64::total_cmp);
    let cut = ((1.0 - wet_fraction) * n).floor() as usize;
    let threshold = if cut >= sorted.len() { f64::INFINITY } else { sorted[cut] };

    let intensity = Gamma::new(cfg.intensity_shape, cfg.intensity_scale)
        .map_err(|e| SynthError::Param(e.to_string()))?
        .sample(&mut rng);
    let values = storm
        .iter()
        .zip(elevation.values())
        .map(|(&z, &e)| {
            if z < threshold {
                0.0
            } else {
                // excess is >= 0; f32 storage keeps tiny amounts distinguishable from dry
                let excess = (z - threshold).max(0.0) + 0.05;
                intensity * excess.powf(cfg.skew) * (1.0 + cfg.coupling * e / MAX_ELEVATION)
            }
        })
        .collect();
    cfg.grid(values)
}

pub fn gen_precip_series(elevation: &GeoGrid, cfg: &SynthConfig) -> Result<Vec<GeoGrid>> {
    (0..cfg.days).map(|d| gen_precip_day(elevation, cfg, d)).collect()
}

/// Chronological split: the first `round(fraction * n)` items train, the rest test.
pub fn split_train_test<T: Clone>(series: &[T], fraction: f64) -> Result<(Vec<T>, Vec<T>)> {
    let days = series.len();
    let degenerate = SynthError::DegenerateSplit { fraction, days };
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(degenerate);
    }
    let cut = (fraction * days as f64).round() as usize;
    if cut == 0 || cut >= days {
        return Err(degenerate);
    }
    Ok((series[..cut].to_vec(), series[cut..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig { rows: 64, cols: 96, days: 30, seed: 7, ..Default::default() }
    }

    fn autocorr(g: &GeoGrid, lag: usize) -> f64 {
        let (m, _) = crate::grid::mean_std(g.values());
        let (mut num, mut den) = (0.0, 0.0);
        for r in 0..g.rows() {
            for c in 0..g.cols() {
                let a = g.get(r, c) - m;
                den += a * a;
                if c + lag < g.cols() {
                    num += a * (g.get(r, c + lag) - m);
                }
            }
        }
        num / den
    }

    #[test]
    fn elevation_is_seeded_bounded_and_smooth() {
        let cfg = small();
        let a = gen_elevation(&cfg).unwrap();
        assert_eq!(a, gen_elevation(&cfg).unwrap());
        let (lo, hi) = a.min_max();
        assert!(lo >= 0.0 && hi <= MAX_ELEVATION);
        assert!((lo - 0.0).abs() < 1e-9 && (hi - MAX_ELEVATION).abs() < 1e-9);
        assert!(autocorr(&a, 1) > autocorr(&a, 10));
    }

    #[test]
    fn precip_is_non_negative_and_order_independent() {
        let cfg = small();
        let elev = gen_elevation(&cfg).unwrap();
        let series = gen_precip_series(&elev, &cfg).unwrap();
        assert!(series.iter().all(|g| g.values().iter().all(|&v| v >= 0.0)));
        assert_eq!(gen_precip_day(&elev, &cfg, 17).unwrap(), series[17]);
    }

    #[test]
    fn dry_fraction_matches_target() {
        let cfg = SynthConfig { days: 60, ..small() };
        let elev = gen_elevation(&cfg).unwrap();
        let series = gen_precip_series(&elev, &cfg).unwrap();
        let zeros = series.iter().flat_map(|g| g.values()).filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / (series.len() * cfg.rows * cfg.cols) as f64;
        assert!((frac - (1.0 - cfg.rain_fraction)).abs() <= 0.1, "dry fraction {frac}");
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let (ma, sa) = crate::grid::mean_std(a);
        let (mb, sb) = crate::grid::mean_std(b);
        a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 * sa * sb)
    }

    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        idx.iter().enumerate().for_each(|(rank, &i)| r[i] = rank as f64);
        r
    }

    #[test]
    fn uncoupled_precip_ignores_elevation() {
        let cfg = SynthConfig { coupling: 0.0, days: 200, ..small() };
        let elev = gen_elevation(&cfg).unwrap();
        let mut rng = cfg.stream(999);
        let (mut p, mut e) = (Vec::new(), Vec::new());
        for _ in 0..2000 {
            let (day, cell) = (rng.gen_range(0..cfg.days), rng.gen_range(0..cfg.rows * cfg.cols));
            p.push(gen_precip_day(&elev, &cfg, day).unwrap().values()[cell]);
            e.push(elev.values()[cell]);
        }
        let r = pearson(&p, &e);
        assert!(r.abs() < 0.05, "r = {r}");
    }

    #[test]
    fn coupled_precip_rises_with_elevation() {
        let cfg = SynthConfig { coupling: 1.0, days: 40, ..small() };
        let elev = gen_elevation(&cfg).unwrap();
        let (mut p, mut e) = (Vec::new(), Vec::new());
        for g in gen_precip_series(&elev, &cfg).unwrap() {
            for (v, z) in g.values().iter().zip(elev.values()) {
                if *v > 0.0 {
                    p.push(*v);
                    e.push(*z);
                }
            }
        }
        let rho = pearson(&ranks(&p), &ranks(&e));
        assert!(rho > 0.0, "rank correlation {rho}");
    }

    #[test]
    fn split_is_positional() {
        let days: Vec<usize> = (0..100).collect();
        let (train, test) = split_train_test(&days, 0.8).unwrap();
        assert_eq!(train, (0..80).collect::<Vec<_>>());
        assert_eq!(test, (80..100).collect::<Vec<_>>());
        assert!(split_train_test(&days, 0.0).is_err());
        assert!(split_train_test(&days, 1.0).is_err());
        assert!(split_train_test(&days[..1], 0.5).is_err());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SynthConfig { rows: 60, ..small() }.validate().is_err());
        assert!(SynthConfig { days: 0, ..small() }.validate().is_err());
        assert!(SynthConfig { rain_fraction: 1.0, ..small() }.validate().is_err());
    }
}
