//! Per-location daily skill metrics and their spatial aggregation by season
//! and by extreme-event threshold.

use chrono::{Datelike, NaiveDate};
use thiserror::Error;

use crate::grid::{GeoGrid, GridError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("series lengths differ ({obs} observed vs {pred} predicted)")]
    LengthMismatch { obs: usize, pred: usize },
    #[error("need at least {need} values, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("bin width must be finite and > 0")]
    BadBinWidth,
    #[error("percentile {0} outside [0, 100]")]
    BadPercentile(f64),
    #[error("non-finite value in series")]
    NonFinite,
    #[error("no locations")]
    NoLocations,
    #[error("location ({row}, {col}) outside {rows}x{cols} grid")]
    OutOfBounds { row: usize, col: usize, rows: usize, cols: usize },
    #[error("grid dims {got:?} differ from {want:?} within a series")]
    DimsMismatch { got: (usize, usize), want: (usize, usize) },
    #[error("no location has enough events at any threshold")]
    NoEvents,
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const DEFAULT_BIN_WIDTH: f64 = 1.0;
pub const EXTREME_THRESHOLDS: [f64; 6] = [90.0, 95.0, 97.5, 99.0, 99.5, 99.9];
pub const DEFAULT_MIN_EVENTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationMetrics {
    pub bias: f64,
    /// `None` when either series is constant.
    pub corr: Option<f64>,
    pub rmse: f64,
    pub skill: f64,
}

fn check_pair(obs: &[f64], pred: &[f64], need: usize) -> Result<()> {
    if obs.len() != pred.len() {
        return Err(MetricsError::LengthMismatch { obs: obs.len(), pred: pred.len() });
    }
    if obs.len() < need {
        return Err(MetricsError::TooShort { need, got: obs.len() });
    }
    if obs.iter().chain(pred).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

pub fn location_metrics(obs: &[f64], pred: &[f64]) -> Result<LocationMetrics> {
    check_pair(obs, pred, 2)?;
    let n = obs.len() as f64;
    let bias = obs.iter().zip(pred).map(|(o, p)| p - o).sum::<f64>() / n;
    let rmse = (obs.iter().zip(pred).map(|(o, p)| (p - o) * (p - o)).sum::<f64>() / n).sqrt();
    Ok(LocationMetrics { bias, corr: pearson(obs, pred), rmse, skill: perkins_skill(obs, pred, DEFAULT_BIN_WIDTH)? })
}

/// Pearson correlation, `None` if lengths differ, fewer than two values, or
/// either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Normalized histogram on fixed-width bins starting at `origin`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub origin: f64,
    pub bin_width: f64,
    pub masses: Vec<f64>,
}

impl Histogram {
    /// Bins `[origin + k·w, origin + (k+1)·w)` for `k < bins`; values past
    /// the last edge fall into the last bin.
    pub fn new(values: &[f64], origin: f64, bin_width: f64, bins: usize) -> Result<Self> {
        if !(bin_width.is_finite() && bin_width > 0.0) {
            return Err(MetricsError::BadBinWidth);
        }
        if values.is_empty() || bins == 0 {
            return Err(MetricsError::TooShort { need: 1, got: values.len() });
        }
        let n = values.len() as f64;
        let masses = bin_counts(values, origin, bin_width, bins).into_iter().map(|c| c as f64 / n).collect();
        Ok(Self { origin, bin_width, masses })
    }
}

fn bin_counts(values: &[f64], origin: f64, bin_width: f64, bins: usize) -> Vec<u64> {
    let mut counts = vec![0; bins];
    for v in values {
        let k = ((v - origin) / bin_width).floor().max(0.0) as usize;
        counts[k.min(bins - 1)] += 1;
    }
    counts
}

/// Overlap of the two empirical distributions on shared bins running from
/// `min(0, joint min)` to the joint maximum.
pub fn perkins_skill(obs: &[f64], pred: &[f64], bin_width: f64) -> Result<f64> {
    if obs.is_empty() || pred.is_empty() {
        return Err(MetricsError::TooShort { need: 1, got: 0 });
    }
    if obs.iter().chain(pred).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let (lo, hi) = obs.iter().chain(pred).fold((0.0f64, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(MetricsError::BadBinWidth);
    }
    let origin = (lo / bin_width).floor() * bin_width;
    let bins = ((hi - origin) / bin_width).floor() as usize + 1;
    // min(co/no, cm/nm) summed over bins, in integers so identical
    // distributions score exactly 1.
    let (no, nm) = (obs.len() as u128, pred.len() as u128);
    let co = bin_counts(obs, origin, bin_width, bins);
    let cm = bin_counts(pred, origin, bin_width, bins);
    let overlap: u128 = co.iter().zip(&cm).map(|(&a, &b)| (a as u128 * nm).min(b as u128 * no)).sum();
    Ok(overlap as f64 / (no * nm) as f64)
}

/// `p`-th percentile by linear interpolation between order statistics
/// (rank `p/100 · (n − 1)`).
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if !(0.0..=100.0).contains(&p) {
        return Err(MetricsError::BadPercentile(p));
    }
    if sorted.is_empty() {
        return Err(MetricsError::TooShort { need: 1, got: 0 });
    }
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Season {
    Djf,
    Mam,
    Jja,
    Son,
}

impl Season {
    pub const ALL: [Season; 4] = [Season::Djf, Season::Mam, Season::Jja, Season::Son];

    pub fn of(date: NaiveDate) -> Self {
        match date.month() {
            12 | 1 | 2 => Season::Djf,
            3..=5 => Season::Mam,
            6..=8 => Season::Jja,
            _ => Season::Son,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Season::Djf => "DJF",
            Season::Mam => "MAM",
            Season::Jja => "JJA",
            Season::Son => "SON",
        }
    }
}

/// Spatial mean and interquartile band of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub q25: f64,
    pub q75: f64,
}

impl Aggregate {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        // Sum in sorted order so the result does not depend on location order.
        let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
        Some(Self { mean, q25: percentile_sorted(&sorted, 25.0).ok()?, q75: percentile_sorted(&sorted, 75.0).ok()? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `all`, `season` or `extreme`.
    pub scope: String,
    /// Season label or percentile threshold; empty for `all`.
    pub key: String,
    pub bias: Aggregate,
    /// `None` when no location had a defined correlation.
    pub corr: Option<Aggregate>,
    pub rmse: Aggregate,
    pub skill: Aggregate,
    pub locations: usize,
    /// Days scored, summed over locations.
    pub events: usize,
    /// Locations skipped for lack of data.
    pub dropped: usize,
}

fn aggregate(scope: &str, key: String, per_loc: &[LocationMetrics], events: usize, dropped: usize) -> Option<EvalReport> {
    let pick = |f: fn(&LocationMetrics) -> f64| per_loc.iter().map(f).collect::<Vec<_>>();
    let corrs: Vec<f64> = per_loc.iter().filter_map(|m| m.corr).collect();
    Some(EvalReport {
        scope: scope.into(),
        key,
        bias: Aggregate::of(&pick(|m| m.bias))?,
        corr: Aggregate::of(&corrs),
        rmse: Aggregate::of(&pick(|m| m.rmse))?,
        skill: Aggregate::of(&pick(|m| m.skill))?,
        locations: per_loc.len(),
        events,
        dropped,
    })
}

fn check_locations(obs: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<()> {
    if obs.is_empty() {
        return Err(MetricsError::NoLocations);
    }
    if obs.len() != pred.len() {
        return Err(MetricsError::LengthMismatch { obs: obs.len(), pred: pred.len() });
    }
    Ok(())
}

/// Metrics over all days. `obs[l]` and `pred[l]` are the daily series at location `l`.
pub fn overall_report(obs: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<EvalReport> {
    check_locations(obs, pred)?;
    let per_loc = obs.iter().zip(pred).map(|(o, p)| location_metrics(o, p)).collect::<Result<Vec<_>>>()?;
    let events = obs.iter().map(Vec::len).sum();
    aggregate("all", String::new(), &per_loc, events, 0).ok_or(MetricsError::NoLocations)
}

/// One report per season, `None` for seasons with fewer than two days.
pub fn seasonal_report(
    obs: &[Vec<f64>],
    pred: &[Vec<f64>],
    dates: &[NaiveDate],
) -> Result<Vec<(Season, Option<EvalReport>)>> {
    check_locations(obs, pred)?;
    for (o, p) in obs.iter().zip(pred) {
        check_pair(o, p, 0)?;
        if o.len() != dates.len() {
            return Err(MetricsError::LengthMismatch { obs: o.len(), pred: dates.len() });
        }
    }
    let mut out = Vec::with_capacity(4);
    for season in Season::ALL {
        let days: Vec<usize> = (0..dates.len()).filter(|&d| Season::of(dates[d]) == season).collect();
        if days.len() < 2 {
            out.push((season, None));
            continue;
        }
        let per_loc = obs
            .iter()
            .zip(pred)
            .map(|(o, p)| {
                let so: Vec<f64> = days.iter().map(|&d| o[d]).collect();
                let sp: Vec<f64> = days.iter().map(|&d| p[d]).collect();
                location_metrics(&so, &sp)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((season, aggregate("season", season.label().into(), &per_loc, days.len() * obs.len(), 0)));
    }
    Ok(out)
}

/// Metrics restricted to days whose observation exceeds the location's own
/// observed `p`-th percentile, for each threshold `p`. Locations with fewer
/// than `min_events` selected days (or fewer than two) are dropped from that
/// threshold; a threshold with no remaining locations yields `None`.
pub fn extreme_sweep(
    obs: &[Vec<f64>],
    pred: &[Vec<f64>],
    thresholds: &[f64],
    min_events: usize,
) -> Result<Vec<(f64, Option<EvalReport>)>> {
    check_locations(obs, pred)?;
    let mut sorted_obs = Vec::with_capacity(obs.len());
    for (o, p) in obs.iter().zip(pred) {
        check_pair(o, p, 1)?;
        let mut s = o.clone();
        s.sort_by(f64::total_cmp);
        sorted_obs.push(s);
    }
    let mut out = Vec::with_capacity(thresholds.len());
    for &p in thresholds {
        let mut per_loc = Vec::new();
        let (mut events, mut dropped) = (0, 0);
        for ((o, pr), sorted) in obs.iter().zip(pred).zip(&sorted_obs) {
            let cut = percentile_sorted(sorted, p)?;
            let (so, sp): (Vec<f64>, Vec<f64>) = o.iter().zip(pr).filter(|(v, _)| **v > cut).map(|(a, b)| (*a, *b)).unzip();
            if so.len() < min_events.max(2) {
                dropped += 1;
                continue;
            }
            events += so.len();
            per_loc.push(location_metrics(&so, &sp)?);
        }
        out.push((p, aggregate("extreme", format_threshold(p), &per_loc, events, dropped)));
    }
    if out.iter().all(|(_, r)| r.is_none()) {
        return Err(MetricsError::NoEvents);
    }
    Ok(out)
}

fn format_threshold(p: f64) -> String {
    format!("{p}")
}

/// Daily series at each location, in location order.
pub fn location_series(series: &[GeoGrid], locations: &[(usize, usize)]) -> Result<Vec<Vec<f64>>> {
    let first = series.first().ok_or(MetricsError::TooShort { need: 1, got: 0 })?;
    let (rows, cols) = first.dims();
    if let Some(g) = series.iter().find(|g| g.dims() != (rows, cols)) {
        return Err(MetricsError::DimsMismatch { got: g.dims(), want: (rows, cols) });
    }
    locations
        .iter()
        .map(|&(row, col)| {
            if row >= rows || col >= cols {
                return Err(MetricsError::OutOfBounds { row, col, rows, cols });
            }
            Ok(series.iter().map(|g| g.get(row, col)).collect())
        })
        .collect()
}

/// Every cell in row-major order.
pub fn all_locations(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect()
}

/// Per-cell RMSE over the series, on the observation grid.
pub fn rmse_raster(obs: &[GeoGrid], pred: &[GeoGrid]) -> Result<GeoGrid> {
    if obs.len() != pred.len() {
        return Err(MetricsError::LengthMismatch { obs: obs.len(), pred: pred.len() });
    }
    let first = obs.first().ok_or(MetricsError::TooShort { need: 1, got: 0 })?;
    let mut sum = vec![0.0; first.values().len()];
    for (o, p) in obs.iter().zip(pred) {
        for g in [o, p] {
            if g.dims() != first.dims() {
                return Err(MetricsError::DimsMismatch { got: g.dims(), want: first.dims() });
            }
        }
        for ((s, a), b) in sum.iter_mut().zip(o.values()).zip(p.values()) {
            *s += (b - a) * (b - a);
        }
    }
    let n = obs.len() as f64;
    Ok(first.with_values(sum.into_iter().map(|s| (s / n).sqrt()).collect())?)
}

pub const REPORT_HEADER: &str = "scope,season_or_threshold,bias,corr,rmse,skill,\
q25_bias,q25_corr,q25_rmse,q25_skill,q75_bias,q75_corr,q75_rmse,q75_skill,locations,events";

/// CSV row for one report; `None` renders as an omitted row with empty metric fields.
pub fn report_row(scope: &str, key: &str, report: Option<&EvalReport>) -> String {
    let Some(r) = report else {
        return format!("{scope},{key},,,,,,,,,,,,,0,0\n");
    };
    let f = |v: f64| format!("{v:.6}");
    let corr = |pick: fn(&Aggregate) -> f64| r.corr.as_ref().map(|c| f(pick(c))).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        r.scope,
        r.key,
        f(r.bias.mean),
        corr(|a| a.mean),
        f(r.rmse.mean),
        f(r.skill.mean),
        f(r.bias.q25),
        corr(|a| a.q25),
        f(r.rmse.q25),
        f(r.skill.q25),
        f(r.bias.q75),
        corr(|a| a.q75),
        f(r.rmse.q75),
        f(r.skill.q75),
        r.locations,
        r.events
    )
}
