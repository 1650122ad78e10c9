//! Chained inference through independently trained levels, coarse to fine.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::grid::{bicubic_upsample, coarsen, read_raster, replicate_pad, GeoGrid, GridError, GEOREF_TOL};
use crate::nn::{forward, load_checkpoint, NnError, SrcnnParams, Tensor3};

#[derive(Debug, Error)]
pub enum StackError {
    #[error("empty stack")]
    Empty,
    #[error("level {level}: {msg}")]
    Level { level: usize, msg: String },
    #[error("input grid {got:?} does not match the stack input grid {want:?}")]
    Georef { got: (usize, usize), want: (usize, usize) },
    #[error("stack file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, StackError>;

#[derive(Debug, Clone)]
pub struct StackLevel {
    pub params: SrcnnParams,
    pub scale: usize,
    /// Elevation at this level's output resolution.
    pub elevation: GeoGrid,
}

/// Levels ordered coarse to fine.
#[derive(Debug, Clone)]
pub struct StackSpec {
    levels: Vec<StackLevel>,
}

impl StackSpec {
    pub fn new(levels: Vec<StackLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(StackError::Empty);
        }
        for (k, level) in levels.iter().enumerate() {
            let err = |msg: String| StackError::Level { level: k + 1, msg };
            level.params.check_shapes().map_err(|e| err(e.to_string()))?;
            if level.params.arch.channels != 2 || level.params.norm.channels() != 2 {
                return Err(err("network must take precipitation and elevation".into()));
            }
            if level.scale < 2 {
                return Err(err("scale must be >= 2".into()));
            }
            let (rows, cols) = level.elevation.dims();
            if rows % level.scale != 0 || cols % level.scale != 0 {
                return Err(err(format!("elevation {rows}x{cols} not divisible by scale {}", level.scale)));
            }
            if k > 0 {
                let prev = &levels[k - 1].elevation;
                let expected = bicubic_georef(prev, level.scale);
                if !level.elevation.same_georef(&expected, GEOREF_TOL) {
                    return Err(err(format!(
                        "elevation {:?} is not the previous level {:?} refined by {}",
                        level.elevation.dims(),
                        prev.dims(),
                        level.scale
                    )));
                }
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[StackLevel] {
        &self.levels
    }

    pub fn total_scale(&self) -> usize {
        self.levels.iter().map(|l| l.scale).product()
    }

    /// Grid the stack expects as input (values zero).
    pub fn input_template(&self) -> Result<GeoGrid> {
        let first = &self.levels[0];
        Ok(coarsen(&first.elevation, first.scale)?.map(|_| 0.0)?)
    }

    pub fn output_dims(&self) -> (usize, usize) {
        self.levels.last().expect("nonempty").elevation.dims()
    }
}

fn bicubic_georef(g: &GeoGrid, factor: usize) -> GeoGrid {
    let (lat0, lon0, dlat, dlon) = g.fine_georef(factor);
    GeoGrid::new(g.rows() * factor, g.cols() * factor, lat0, lon0, dlat, dlon, vec![0.0; g.values().len() * factor * factor])
        .expect("refined lattice of a valid grid")
}

/// Elevation at each level's output resolution, finest last.
pub fn elevation_pyramid(hr_elevation: &GeoGrid, levels: usize, scale: usize) -> Result<Vec<GeoGrid>> {
    elevation_pyramid_scales(hr_elevation, &vec![scale; levels])
}

/// As [`elevation_pyramid`] with a scale per level, coarse to fine.
pub fn elevation_pyramid_scales(hr_elevation: &GeoGrid, scales: &[usize]) -> Result<Vec<GeoGrid>> {
    if scales.is_empty() {
        return Err(StackError::Empty);
    }
    let mut out = vec![hr_elevation.clone()];
    for &s in scales[1..].iter().rev() {
        let next = coarsen(out.last().expect("nonempty"), s)?;
        out.push(next);
    }
    out.reverse();
    // The coarsest level's input must also exist.
    let (rows, cols) = out[0].dims();
    if rows % scales[0] != 0 || cols % scales[0] != 0 {
        return Err(GridError::NotDivisible { rows, cols, factor: scales[0] }.into());
    }
    Ok(out)
}

/// One level: interpolate, attach elevation, normalize, pad, run the
/// network, map back to mm/day and clamp at zero.
pub fn infer_level(level: &StackLevel, precip: &GeoGrid) -> Result<GeoGrid> {
    let up = bicubic_upsample(precip, level.scale)?;
    if !up.same_georef(&level.elevation, GEOREF_TOL) {
        return Err(StackError::Georef { got: precip.dims(), want: input_dims(level) });
    }
    let p = &level.params;
    let pad = p.arch.margin();
    let (rows, cols) = up.dims();
    let (ph, pw) = (rows + 2 * pad, cols + 2 * pad);
    let mut data = Vec::with_capacity(2 * ph * pw);
    for (ch, grid) in [&up, &level.elevation].into_iter().enumerate() {
        let padded = replicate_pad(grid, pad)?;
        data.extend(padded.values().iter().map(|&v| p.norm.apply(ch, v)));
    }
    let out = forward(p, &Tensor3::from_vec(2, ph, pw, data)?)?;
    debug_assert_eq!((out.height, out.width), (rows, cols));
    Ok(up.with_values(out.data.iter().map(|&v| p.norm.invert(0, v).max(0.0)).collect())?)
}

fn input_dims(level: &StackLevel) -> (usize, usize) {
    let (r, c) = level.elevation.dims();
    (r / level.scale, c / level.scale)
}

pub fn infer(stack: &StackSpec, lr_precip: &GeoGrid) -> Result<GeoGrid> {
    Ok(infer_timed(stack, lr_precip)?.0)
}

/// [`infer`] plus the wall time spent in each level.
pub fn infer_timed(stack: &StackSpec, lr_precip: &GeoGrid) -> Result<(GeoGrid, Vec<Duration>)> {
    let template = stack.input_template()?;
    if !lr_precip.same_georef(&template, GEOREF_TOL) {
        return Err(StackError::Georef { got: lr_precip.dims(), want: template.dims() });
    }
    let mut current = lr_precip.clone();
    let mut times = Vec::with_capacity(stack.levels.len());
    for level in &stack.levels {
        let start = Instant::now();
        current = infer_level(level, &current)?;
        times.push(start.elapsed());
    }
    Ok((current, times))
}

/// Wall time of a serial run over many days.
#[derive(Debug, Clone, PartialEq)]
pub struct StackTiming {
    /// Nanoseconds spent in each level, summed over days.
    pub per_level_ns: Vec<u128>,
    /// Nanoseconds from the first level of the first day to the end of the last.
    pub total_ns: u128,
}

/// Runs every day through the stack serially. Level times come from one
/// unbroken chain of clock readings, so they add up to the total exactly.
pub fn infer_series_timed(stack: &StackSpec, days: &[GeoGrid]) -> Result<(Vec<GeoGrid>, StackTiming)> {
    let template = stack.input_template()?;
    if let Some(bad) = days.iter().find(|g| !g.same_georef(&template, GEOREF_TOL)) {
        return Err(StackError::Georef { got: bad.dims(), want: template.dims() });
    }
    let mut per_level_ns = vec![0u128; stack.levels.len()];
    let mut outputs = Vec::with_capacity(days.len());
    let start = Instant::now();
    let mut mark = start;
    for day in days {
        let mut current = day.clone();
        for (k, level) in stack.levels.iter().enumerate() {
            current = infer_level(level, &current)?;
            let now = Instant::now();
            per_level_ns[k] += now.duration_since(mark).as_nanos();
            mark = now;
        }
        outputs.push(current);
    }
    let total_ns = mark.duration_since(start).as_nanos();
    Ok((outputs, StackTiming { per_level_ns, total_ns }))
}

/// Parsed stack description.
///
/// ```text
/// # comments and blank lines are ignored
/// elevation hr_elevation.grd
/// level 2 level1.ckpt
/// level 2 level2.ckpt
/// level 2 level3.ckpt
/// ```
///
/// Levels are listed coarse to fine; relative paths are resolved against the
/// file's directory by [`load_stack`].
#[derive(Debug, Clone, PartialEq)]
pub struct StackFile {
    pub elevation: PathBuf,
    pub levels: Vec<(usize, PathBuf)>,
}

pub fn parse_stack_file(text: &str) -> Result<StackFile> {
    let mut elevation = None;
    let mut levels = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: &str| StackError::Parse { line, msg: msg.into() };
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut words = trimmed.split_whitespace();
        match words.next() {
            Some("elevation") => {
                let path = words.next().ok_or_else(|| err("missing elevation path"))?;
                if elevation.replace(PathBuf::from(path)).is_some() {
                    return Err(err("elevation given twice"));
                }
            }
            Some("level") => {
                let scale: usize = words
                    .next()
                    .and_then(|s| s.parse().ok())
                    .filter(|s| (2..=64).contains(s))
                    .ok_or_else(|| err("scale must be an integer in 2..=64"))?;
                let path = words.next().ok_or_else(|| err("missing checkpoint path"))?;
                levels.push((scale, PathBuf::from(path)));
            }
            _ => return Err(err("expected `elevation <path>` or `level <scale> <checkpoint>`")),
        }
        if words.next().is_some() {
            return Err(err("trailing fields"));
        }
    }
    let elevation = elevation.ok_or(StackError::Parse { line: 0, msg: "no elevation line".into() })?;
    if levels.is_empty() {
        return Err(StackError::Empty);
    }
    Ok(StackFile { elevation, levels })
}

pub fn render_stack_file(file: &StackFile) -> String {
    let mut out = format!("elevation {}\n", file.elevation.display());
    for (s, p) in &file.levels {
        out.push_str(&format!("level {s} {}\n", p.display()));
    }
    out
}

pub fn load_stack(path: &Path) -> Result<StackSpec> {
    let text = fs::read_to_string(path).map_err(|source| StackError::Io { path: path.display().to_string(), source })?;
    let file = parse_stack_file(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let elevation = read_raster(&base.join(&file.elevation))?;
    let scales: Vec<usize> = file.levels.iter().map(|(s, _)| *s).collect();
    let pyramid = elevation_pyramid_scales(&elevation, &scales)?;
    let levels = file
        .levels
        .iter()
        .zip(pyramid)
        .map(|((scale, ckpt), elevation)| {
            Ok(StackLevel { params: load_checkpoint(base.join(ckpt))?, scale: *scale, elevation })
        })
        .collect::<Result<Vec<_>>>()?;
    StackSpec::new(levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::NormStats;
    use crate::nn::{init_params, Architecture};

    fn level(params: SrcnnParams, elevation: GeoGrid) -> StackLevel {
        StackLevel { params, scale: 2, elevation }
    }

    fn small_arch() -> Architecture {
        Architecture { n1: 4, n2: 3, ..Default::default() }
    }

    #[test]
    fn pyramid_dims_and_means() {
        let hr = GeoGrid::from_values(208, 464, (0..208 * 464).map(|k| (k % 97) as f64).collect()).unwrap();
        let pyr = elevation_pyramid(&hr, 3, 2).unwrap();
        let dims: Vec<_> = pyr.iter().map(GeoGrid::dims).collect();
        assert_eq!(dims, vec![(52, 116), (104, 232), (208, 464)]);
        for g in &pyr {
            assert!((g.mean() - hr.mean()).abs() < 1e-9);
        }
        let flat = GeoGrid::filled(208, 464, 5.0).unwrap();
        assert!(elevation_pyramid(&flat, 3, 2).unwrap().iter().all(|g| g.values().iter().all(|v| *v == 5.0)));
        assert!(elevation_pyramid(&GeoGrid::filled(20, 20, 0.0).unwrap(), 3, 2).is_err());
    }

    #[test]
    fn three_levels_map_26x58_to_208x464() {
        let hr = GeoGrid::filled(208, 464, 100.0).unwrap();
        let levels = elevation_pyramid(&hr, 3, 2)
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(k, e)| {
                let mut p = init_params(k as u64, small_arch());
                p.norm = NormStats::new(vec![1.0, 100.0], vec![2.0, 1.0]);
                level(p, e)
            })
            .collect();
        let stack = StackSpec::new(levels).unwrap();
        let lr = stack.input_template().unwrap().map(|_| 3.0).unwrap();
        assert_eq!(lr.dims(), (26, 58));
        let (out, times) = infer_timed(&stack, &lr).unwrap();
        assert_eq!(out.dims(), (208, 464));
        assert_eq!(times.len(), 3);
        assert!(out.values().iter().all(|v| *v >= 0.0));
        assert_eq!(stack.total_scale(), 8);
        let (outs, timing) = infer_series_timed(&stack, &[lr.clone(), lr]).unwrap();
        assert_eq!(outs[1], out);
        assert_eq!(timing.per_level_ns.iter().sum::<u128>(), timing.total_ns);
    }

    #[test]
    fn zero_network_gives_zero_output() {
        let elev = GeoGrid::filled(32, 32, 10.0).unwrap();
        let mut p = SrcnnParams::zeros(small_arch());
        p.norm = NormStats::new(vec![0.0, 10.0], vec![1.0, 1.0]);
        let stack = StackSpec::new(vec![level(p, elev)]).unwrap();
        let lr = stack.input_template().unwrap().map(|_| 7.0).unwrap();
        assert!(infer(&stack, &lr).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_input_gives_constant_output() {
        let elev = GeoGrid::filled(40, 40, 250.0).unwrap();
        let mut p = init_params(3, small_arch());
        p.norm = NormStats::new(vec![2.0, 250.0], vec![3.0, 10.0]);
        let stack = StackSpec::new(vec![level(p, elev)]).unwrap();
        let out = infer(&stack, &stack.input_template().unwrap().map(|_| 4.0).unwrap()).unwrap();
        let v0 = out.values()[0];
        assert!(out.values().iter().all(|v| (v - v0).abs() < 1e-12));
    }

    #[test]
    fn rejects_mismatches() {
        let elev = GeoGrid::filled(32, 32, 0.0).unwrap();
        let p = init_params(0, small_arch());
        let stack = StackSpec::new(vec![level(p.clone(), elev.clone())]).unwrap();
        assert!(matches!(infer(&stack, &GeoGrid::filled(8, 8, 1.0).unwrap()), Err(StackError::Georef { .. })));
        let wrong = GeoGrid::filled(48, 48, 0.0).unwrap();
        assert!(StackSpec::new(vec![level(p.clone(), elev), level(p.clone(), wrong)]).is_err());
        let mut one_channel = p;
        one_channel.arch.channels = 1;
        assert!(StackSpec::new(vec![level(one_channel, GeoGrid::filled(32, 32, 0.0).unwrap())]).is_err());
    }

    #[test]
    fn stack_file_round_trip() {
        let text = "# three levels\nelevation elev.grd\nlevel 2 a.ckpt\n\nlevel 2 b.ckpt\nlevel 4 c.ckpt\n";
        let f = parse_stack_file(text).unwrap();
        assert_eq!(f.levels.len(), 3);
        assert_eq!(f.levels[2], (4, PathBuf::from("c.ckpt")));
        assert_eq!(parse_stack_file(&render_stack_file(&f)).unwrap(), f);
        for bad in ["level 2 a.ckpt\n", "elevation e\nlevel x a\n", "elevation e\n", "elevation e\nlevel 2 a b\n", "lvl 2 a"] {
            assert!(parse_stack_file(bad).is_err(), "{bad:?}");
        }
    }
}
