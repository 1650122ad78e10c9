//! Bias correction and spatial disaggregation: interpolate the coarse field
//! back to the fine grid and scale it by per-cell, per-calendar-month
//! climatology ratios fitted on a training period.

use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{bicubic_upsample, coarsen, read_raster, write_raster, GeoGrid, GridError, GEOREF_TOL};

#[derive(Debug, Error)]
pub enum BcsdError {
    #[error("empty training series")]
    Empty,
    #[error("{days} days but {dates} dates")]
    DateCount { days: usize, dates: usize },
    #[error("grid {got:?} does not match the model grid {want:?}")]
    Georef { got: (usize, usize), want: (usize, usize) },
    #[error("no factors fitted for month {0}")]
    MonthNotFitted(u32),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("bad model manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, BcsdError>;

pub const MODEL_MANIFEST: &str = "bcsd.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BcsdParams {
    /// Total refinement between the coarse and fine grids.
    pub factor: usize,
    /// Lower bound on the interpolated monthly mean (mm/day).
    pub floor: f64,
    pub cap: f64,
}

impl Default for BcsdParams {
    fn default() -> Self {
        Self { factor: 8, floor: 0.01, cap: 10.0 }
    }
}

impl BcsdParams {
    pub fn validate(&self) -> Result<()> {
        if self.factor < 2 {
            return Err(BcsdError::Params("factor must be >= 2".into()));
        }
        if !(self.floor.is_finite() && self.floor > 0.0) {
            return Err(BcsdError::Params("floor must be > 0".into()));
        }
        if !(self.cap.is_finite() && self.cap > 0.0) {
            return Err(BcsdError::Params("cap must be > 0".into()));
        }
        Ok(())
    }
}

/// Lattice description of a grid, without values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Georef {
    pub rows: usize,
    pub cols: usize,
    pub lat0: f64,
    pub lon0: f64,
    pub dlat: f64,
    pub dlon: f64,
}

impl Georef {
    pub fn of(g: &GeoGrid) -> Self {
        Self { rows: g.rows(), cols: g.cols(), lat0: g.lat0, lon0: g.lon0, dlat: g.dlat, dlon: g.dlon }
    }

    pub fn matches(&self, g: &GeoGrid) -> bool {
        let other = Self::of(g);
        self.rows == other.rows
            && self.cols == other.cols
            && [
                (self.lat0, other.lat0),
                (self.lon0, other.lon0),
                (self.dlat, other.dlat),
                (self.dlon, other.dlon),
            ]
            .iter()
            .all(|(a, b)| (a - b).abs() <= GEOREF_TOL)
    }

    pub fn grid(&self, values: Vec<f64>) -> Result<GeoGrid> {
        Ok(GeoGrid::new(self.rows, self.cols, self.lat0, self.lon0, self.dlat, self.dlon, values)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BcsdModel {
    pub params: BcsdParams,
    pub lr: Georef,
    pub hr: Georef,
    /// Factor grid per calendar month (index 0 = January); `None` when the
    /// training period had no days in that month.
    pub factors: [Option<GeoGrid>; 12],
    pub train_start: NaiveDate,
    pub train_days: usize,
}

impl BcsdModel {
    pub fn factor(&self, month: u32) -> Result<&GeoGrid> {
        (month as usize)
            .checked_sub(1)
            .and_then(|i| self.factors.get(i))
            .and_then(Option::as_ref)
            .ok_or(BcsdError::MonthNotFitted(month))
    }
}

/// Coarsen then re-interpolate, with negative interpolation overshoot removed.
pub fn degrade(hr: &GeoGrid, factor: usize) -> Result<GeoGrid> {
    Ok(bicubic_upsample(&coarsen(hr, factor)?, factor)?.map(|v| v.max(0.0))?)
}

/// Interpolates a coarse field to the fine grid, negatives removed.
pub fn interpolate(lr: &GeoGrid, factor: usize) -> Result<GeoGrid> {
    Ok(bicubic_upsample(lr, factor)?.map(|v| v.max(0.0))?)
}

/// Monthly ratio of mean observed to mean degraded precipitation per cell.
pub fn fit_bcsd(hr_obs: &[GeoGrid], dates: &[NaiveDate], params: BcsdParams) -> Result<BcsdModel> {
    params.validate()?;
    let first = hr_obs.first().ok_or(BcsdError::Empty)?;
    if dates.len() != hr_obs.len() {
        return Err(BcsdError::DateCount { days: hr_obs.len(), dates: dates.len() });
    }
    let hr = Georef::of(first);
    let cells = first.values().len();
    let mut num = vec![vec![0.0; cells]; 12];
    let mut den = vec![vec![0.0; cells]; 12];
    let mut count = [0usize; 12];
    let mut lr = None;
    for (g, date) in hr_obs.iter().zip(dates) {
        if !hr.matches(g) {
            return Err(BcsdError::Georef { got: g.dims(), want: (hr.rows, hr.cols) });
        }
        let coarse = coarsen(g, params.factor)?;
        lr.get_or_insert(Georef::of(&coarse));
        let interp = interpolate(&coarse, params.factor)?;
        let m = date.month0() as usize;
        count[m] += 1;
        for ((n, d), (o, i)) in num[m].iter_mut().zip(den[m].iter_mut()).zip(g.values().iter().zip(interp.values())) {
            *n += o;
            *d += i;
        }
    }
    let mut factors: [Option<GeoGrid>; 12] = Default::default();
    for m in 0..12 {
        if count[m] == 0 {
            continue;
        }
        let k = count[m] as f64;
        let values =
            num[m].iter().zip(&den[m]).map(|(n, d)| ((n / k) / (d / k).max(params.floor)).min(params.cap)).collect();
        factors[m] = Some(first.with_values(values)?);
    }
    Ok(BcsdModel {
        params,
        lr: lr.expect("series is nonempty"),
        hr,
        factors,
        train_start: dates[0],
        train_days: hr_obs.len(),
    })
}

pub fn downscale_day(model: &BcsdModel, lr: &GeoGrid, date: NaiveDate) -> Result<GeoGrid> {
    if !model.lr.matches(lr) {
        return Err(BcsdError::Georef { got: lr.dims(), want: (model.lr.rows, model.lr.cols) });
    }
    let factor = model.factor(date.month())?;
    let interp = interpolate(lr, model.params.factor)?;
    let values = interp.values().iter().zip(factor.values()).map(|(i, f)| (i * f).max(0.0)).collect();
    model.hr.grid(values)
}

pub fn downscale_bcsd(model: &BcsdModel, lr: &[GeoGrid], dates: &[NaiveDate]) -> Result<Vec<GeoGrid>> {
    if dates.len() != lr.len() {
        return Err(BcsdError::DateCount { days: lr.len(), dates: dates.len() });
    }
    lr.iter().zip(dates).map(|(g, d)| downscale_day(model, g, *d)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub params: BcsdParams,
    pub lr: Georef,
    pub hr: Georef,
    /// Calendar months (1-12) with a factor file.
    pub months: Vec<u32>,
    pub train_start: String,
    pub train_days: usize,
}

pub fn factor_file(month: u32) -> String {
    format!("factor_{month:02}.grd")
}

pub fn parse_model_manifest(text: &str) -> Result<ModelManifest> {
    let m: ModelManifest = serde_json::from_str(text).map_err(|e| BcsdError::Manifest(e.to_string()))?;
    m.params.validate()?;
    NaiveDate::parse_from_str(&m.train_start, "%Y-%m-%d").map_err(|e| BcsdError::Manifest(e.to_string()))?;
    if m.months.iter().any(|&mo| !(1..=12).contains(&mo)) {
        return Err(BcsdError::Manifest("month outside 1-12".into()));
    }
    if m.months.windows(2).any(|w| w[0] >= w[1]) {
        return Err(BcsdError::Manifest("months must be strictly increasing".into()));
    }
    let f = m.params.factor;
    let rows_ok = m.lr.rows.checked_mul(f) == Some(m.hr.rows);
    let cols_ok = m.lr.cols.checked_mul(f) == Some(m.hr.cols);
    if !rows_ok || !cols_ok {
        return Err(BcsdError::Manifest("grid dims inconsistent with factor".into()));
    }
    Ok(m)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BcsdError + '_ {
    move |source| BcsdError::Io { path: path.display().to_string(), source }
}

pub fn save_bcsd(model: &BcsdModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut months = Vec::new();
    for (m, f) in model.factors.iter().enumerate() {
        if let Some(f) = f {
            let month = m as u32 + 1;
            write_raster(f, &dir.join(factor_file(month)))?;
            months.push(month);
        }
    }
    let manifest = ModelManifest {
        params: model.params,
        lr: model.lr,
        hr: model.hr,
        months,
        train_start: model.train_start.format("%Y-%m-%d").to_string(),
        train_days: model.train_days,
    };
    let path = dir.join(MODEL_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))
}

pub fn load_bcsd(dir: &Path) -> Result<BcsdModel> {
    let path = dir.join(MODEL_MANIFEST);
    let m = parse_model_manifest(&fs::read_to_string(&path).map_err(io_err(&path))?)?;
    let mut factors: [Option<GeoGrid>; 12] = Default::default();
    for &month in &m.months {
        let g = read_raster(&dir.join(factor_file(month)))?;
        if !m.hr.matches(&g) {
            return Err(BcsdError::Georef { got: g.dims(), want: (m.hr.rows, m.hr.cols) });
        }
        factors[month as usize - 1] = Some(g);
    }
    Ok(BcsdModel {
        params: m.params,
        lr: m.lr,
        hr: m.hr,
        factors,
        train_start: NaiveDate::parse_from_str(&m.train_start, "%Y-%m-%d").expect("validated"),
        train_days: m.train_days,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dates(n: usize) -> Vec<NaiveDate> {
        NaiveDate::from_ymd_opt(2001, 1, 1).unwrap().iter_days().take(n).collect()
    }

    fn day(seed: usize) -> GeoGrid {
        GeoGrid::from_values(16, 24, (0..16 * 24).map(|k| ((k * 31 + seed * 17) % 23) as f64 * 0.5).collect())
            .unwrap()
    }

    #[test]
    fn spatially_constant_days_give_unit_factors() {
        let obs: Vec<GeoGrid> = (0..40).map(|d| GeoGrid::filled(16, 24, 1.0 + d as f64).unwrap()).collect();
        let model = fit_bcsd(&obs, &dates(40), BcsdParams::default()).unwrap();
        for m in [1, 2] {
            assert!(model.factor(m).unwrap().values().iter().all(|f| (f - 1.0).abs() < 1e-12));
        }
        assert!(matches!(model.factor(3), Err(BcsdError::MonthNotFitted(3))));
    }

    #[test]
    fn dry_cells_get_zero_factor() {
        let mut values = vec![2.0; 16 * 24];
        values[0] = 0.0;
        let obs = vec![GeoGrid::from_values(16, 24, values).unwrap(); 5];
        let model = fit_bcsd(&obs, &dates(5), BcsdParams::default()).unwrap();
        assert_eq!(model.factor(1).unwrap().values()[0], 0.0);
    }

    #[test]
    fn unit_factors_reproduce_interpolation() {
        let obs: Vec<GeoGrid> = (0..3).map(|d| GeoGrid::filled(16, 24, d as f64).unwrap()).collect();
        let model = fit_bcsd(&obs, &dates(3), BcsdParams::default()).unwrap();
        let lr = coarsen(&day(4), 8).unwrap();
        let out = downscale_day(&model, &lr, dates(1)[0]).unwrap();
        assert_eq!(out.values(), interpolate(&lr, 8).unwrap().values());
        let zero = downscale_day(&model, &lr.map(|_| 0.0).unwrap(), dates(1)[0]).unwrap();
        assert!(zero.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reproduces_training_monthly_means() {
        let obs: Vec<GeoGrid> = (0..60).map(day).collect();
        let ds = dates(60);
        let params = BcsdParams { factor: 4, ..Default::default() };
        let model = fit_bcsd(&obs, &ds, params).unwrap();
        let lr: Vec<GeoGrid> = obs.iter().map(|g| coarsen(g, 4).unwrap()).collect();
        let out = downscale_bcsd(&model, &lr, &ds).unwrap();
        let jan: Vec<usize> = (0..60).filter(|&d| ds[d].month() == 1).collect();
        for cell in 0..16 * 24 {
            let mean = |s: &[GeoGrid]| jan.iter().map(|&d| s[d].values()[cell]).sum::<f64>() / jan.len() as f64;
            let f = model.factor(1).unwrap().values()[cell];
            let interp: Vec<GeoGrid> = jan.iter().map(|&d| degrade(&obs[d], 4).unwrap()).collect();
            let interp_mean = interp.iter().map(|g| g.values()[cell]).sum::<f64>() / jan.len() as f64;
            if f < params.cap && interp_mean >= params.floor {
                assert!((mean(&out) - mean(&obs)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_mismatched_grids() {
        let obs = vec![day(0), GeoGrid::filled(8, 8, 1.0).unwrap()];
        assert!(matches!(fit_bcsd(&obs, &dates(2), BcsdParams::default()), Err(BcsdError::Georef { .. })));
        let model = fit_bcsd(&[day(0)], &dates(1), BcsdParams::default()).unwrap();
        let wrong = GeoGrid::filled(3, 3, 1.0).unwrap();
        assert!(matches!(downscale_day(&model, &wrong, dates(1)[0]), Err(BcsdError::Georef { .. })));
        assert!(fit_bcsd(&[], &[], BcsdParams::default()).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let obs: Vec<GeoGrid> = (0..40).map(day).collect();
        let model = fit_bcsd(&obs, &dates(40), BcsdParams::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bcsd(&model, dir.path()).unwrap();
        let back = load_bcsd(dir.path()).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.lr, model.lr);
        // Factor files store single precision.
        for m in 0..12 {
            assert_eq!(back.factors[m].is_some(), model.factors[m].is_some());
            if let (Some(a), Some(b)) = (&back.factors[m], &model.factors[m]) {
                assert!(a.values().iter().zip(b.values()).all(|(x, y)| *x == *y as f32 as f64));
            }
        }
    }

    #[test]
    fn manifest_validation() {
        let good = r#"{"params":{"factor":8,"floor":0.01,"cap":10.0},
            "lr":{"rows":2,"cols":3,"lat0":0,"lon0":0,"dlat":1,"dlon":1},
            "hr":{"rows":16,"cols":24,"lat0":0,"lon0":0,"dlat":0.125,"dlon":0.125},
            "months":[1,2],"train_start":"2001-01-01","train_days":40}"#;
        assert!(parse_model_manifest(good).is_ok());
        assert!(parse_model_manifest(&good.replace("[1,2]", "[2,1]")).is_err());
        assert!(parse_model_manifest(&good.replace("\"rows\":16", "\"rows\":17")).is_err());
        assert!(parse_model_manifest(&good.replace("2001-01-01", "2001-13-01")).is_err());
        assert!(parse_model_manifest("{").is_err());
    }
}
