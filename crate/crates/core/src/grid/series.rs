//! Day-indexed raster series: one `GRD1` file per day plus a JSON manifest.

use std::path::Path;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{read_raster, write_raster, GeoGrid, GridError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesManifest {
    pub days: usize,
    pub variable: String,
    pub units: String,
    /// Calendar date of day 0, `YYYY-MM-DD`.
    pub start_date: String,
    #[serde(default = "default_prefix")]
    pub file_prefix: String,
    #[serde(default = "default_width")]
    pub index_width: usize,
}

fn default_prefix() -> String {
    "day_".into()
}

fn default_width() -> usize {
    5
}

impl SeriesManifest {
    pub fn new(days: usize, variable: &str, units: &str, start: NaiveDate) -> Self {
        Self {
            days,
            variable: variable.into(),
            units: units.into(),
            start_date: start.format("%Y-%m-%d").to_string(),
            file_prefix: default_prefix(),
            index_width: default_width(),
        }
    }

    pub fn start(&self) -> Result<NaiveDate> {
        NaiveDate::parse_from_str(&self.start_date, "%Y-%m-%d")
            .map_err(|e| GridError::Manifest(format!("start_date {:?}: {e}", self.start_date)))
    }

    pub fn dates(&self) -> Result<Vec<NaiveDate>> {
        let start = self.start()?;
        Ok((0..self.days).map(|d| start + Duration::days(d as i64)).collect())
    }

    pub fn file_name(&self, day: usize) -> String {
        format!("{}{:0width$}.grd", self.file_prefix, day, width = self.index_width)
    }
}

pub fn parse_manifest(text: &str) -> Result<SeriesManifest> {
    let m: SeriesManifest =
        serde_json::from_str(text).map_err(|e| GridError::Manifest(e.to_string()))?;
    m.start()?;
    if m.index_width == 0 || m.index_width > 12 {
        return Err(GridError::Manifest(format!("index_width {} out of range", m.index_width)));
    }
    if m.file_prefix.contains(['/', '\\']) || m.file_prefix.contains("..") {
        return Err(GridError::Manifest(format!("file_prefix {:?} is not a plain name", m.file_prefix)));
    }
    // Guard date arithmetic for absurd day counts.
    if m.days > 10_000_000 {
        return Err(GridError::Manifest(format!("day count {} out of range", m.days)));
    }
    Ok(m)
}

/// Writes `grids` as a series under `dir`, creating it if needed.
pub fn write_series(dir: &Path, grids: &[GeoGrid], manifest: &SeriesManifest) -> Result<()> {
    let io = |source| GridError::Io { path: dir.display().to_string(), source };
    std::fs::create_dir_all(dir).map_err(io)?;
    if manifest.days != grids.len() {
        return Err(GridError::Manifest(format!(
            "manifest lists {} days but {} grids were given",
            manifest.days,
            grids.len()
        )));
    }
    for (d, g) in grids.iter().enumerate() {
        write_raster(g, dir.join(manifest.file_name(d)))?;
    }
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(dir.join(MANIFEST_FILE), text + "\n").map_err(io)
}

pub fn read_series(dir: &Path) -> Result<(SeriesManifest, Vec<GeoGrid>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path)
        .map_err(|source| GridError::Io { path: path.display().to_string(), source })?;
    let manifest = parse_manifest(&text)?;
    let grids = (0..manifest.days)
        .map(|d| read_raster(dir.join(manifest.file_name(d))))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, grids))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_round_trip_with_dates() {
        let dir = tempfile::tempdir().unwrap();
        let grids: Vec<_> = (0..3).map(|d| GeoGrid::filled(2, 3, d as f64).unwrap()).collect();
        let m = SeriesManifest::new(3, "precip", "mm/day", NaiveDate::from_ymd_opt(2001, 12, 31).unwrap());
        write_series(dir.path(), &grids, &m).unwrap();
        assert!(dir.path().join("day_00002.grd").exists());
        let (m2, back) = read_series(dir.path()).unwrap();
        assert_eq!(m2, m);
        assert_eq!(back, grids);
        assert_eq!(m2.dates().unwrap()[1], NaiveDate::from_ymd_opt(2002, 1, 1).unwrap());
    }

    #[test]
    fn manifest_rejects_bad_fields() {
        assert!(parse_manifest("{").is_err());
        assert!(parse_manifest(r#"{"days":1,"variable":"p","units":"u","start_date":"2001-13-01"}"#).is_err());
        assert!(parse_manifest(
            r#"{"days":1,"variable":"p","units":"u","start_date":"2001-01-01","file_prefix":"../x"}"#
        )
        .is_err());
        let ok = parse_manifest(r#"{"days":2,"variable":"p","units":"u","start_date":"2001-01-01"}"#).unwrap();
        assert_eq!(ok.file_name(1), "day_00001.grd");
    }
}
