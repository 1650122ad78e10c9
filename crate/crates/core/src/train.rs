//! Training pairs for one stack level and the squared-error minimization
//! that turns them into a checkpoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, KeyValues};
use crate::grid::{bicubic_upsample, coarsen, ChannelStack, GeoGrid, GridError, NormStats};
use crate::nn::{
    adam_step, backward, forward, forward_cached, init_params, mse_loss, AdamState, Architecture, Gradients,
    NnError, SrcnnParams, Tensor3, DEFAULT_LEARNING_RATES,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid level configuration: {0}")]
    Config(String),
    #[error("no training windows: {0}")]
    NoPairs(String),
    #[error("loss diverged at iteration {iteration} (loss = {loss})")]
    Diverged { iteration: usize, loss: f64 },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    KeyValue(#[from] ConfigError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Batch loss (normalized units, where predicting the mean scores about 1)
/// above which training is abandoned as diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct LevelConfig {
    /// Resolution gain of this level.
    pub scale: usize,
    /// Side of the square training sub-images.
    pub patch: usize,
    pub stride: usize,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    pub learning_rates: [f64; 3],
    pub arch: Architecture,
}

impl Default for LevelConfig {
    fn default() -> Self {
        Self {
            scale: 2,
            patch: 51,
            stride: 20,
            batch: 200,
            iterations: 30_000,
            seed: 0,
            learning_rates: DEFAULT_LEARNING_RATES,
            arch: Architecture::default(),
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "scale", "patch", "stride", "batch", "iterations", "seed", "lr1", "lr2", "lr3", "n1", "n2", "f1", "f2", "f3",
];

impl LevelConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.scale < 2 {
            return bad("scale must be >= 2");
        }
        if self.patch <= self.arch.shrink() {
            return bad("patch must exceed the network shrinkage");
        }
        if self.stride == 0 || self.batch == 0 {
            return bad("stride and batch must be >= 1");
        }
        if self.learning_rates.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
            return bad("learning rates must be finite and >= 0");
        }
        Ok(())
    }

    /// Apply overrides from a `key = value` file on top of `self`.
    pub fn with_overrides(mut self, kv: &KeyValues) -> Result<Self> {
        kv.check_known(CONFIG_KEYS)?;
        macro_rules! set {
            ($key:literal => $field:expr) => {
                if let Some(v) = kv.parsed($key)? {
                    $field = v;
                }
            };
        }
        set!("scale" => self.scale);
        set!("patch" => self.patch);
        set!("stride" => self.stride);
        set!("batch" => self.batch);
        set!("iterations" => self.iterations);
        set!("seed" => self.seed);
        set!("lr1" => self.learning_rates[0]);
        set!("lr2" => self.learning_rates[1]);
        set!("lr3" => self.learning_rates[2]);
        set!("n1" => self.arch.n1);
        set!("n2" => self.arch.n2);
        set!("f1" => self.arch.f1);
        set!("f2" => self.arch.f2);
        set!("f3" => self.arch.f3);
        self.validate()?;
        Ok(self)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.insert("scale", self.scale);
        kv.insert("patch", self.patch);
        kv.insert("stride", self.stride);
        kv.insert("batch", self.batch);
        kv.insert("iterations", self.iterations);
        kv.insert("seed", self.seed);
        for (i, lr) in self.learning_rates.iter().enumerate() {
            kv.insert(&format!("lr{}", i + 1), format!("{lr:e}"));
        }
        kv.insert("n1", self.arch.n1);
        kv.insert("n2", self.arch.n2);
        kv.insert("f1", self.arch.f1);
        kv.insert("f2", self.arch.f2);
        kv.insert("f3", self.arch.f3);
        kv
    }
}

/// Sliding-window start offsets along one axis.
pub fn window_starts(len: usize, size: usize, stride: usize) -> Vec<usize> {
    if len < size {
        return Vec::new();
    }
    (0..=len - size).step_by(stride).collect()
}

/// One raw (unnormalized) training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    /// Interpolated precipitation and elevation at the level's output resolution.
    pub input: ChannelStack,
    /// High-resolution precipitation over the center of the input window.
    pub label: GeoGrid,
}

#[derive(Debug, Clone)]
struct DayFields {
    interp: GeoGrid,
    truth: GeoGrid,
}

/// All sub-image windows of a set of days, extracted lazily.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    days: Vec<DayFields>,
    elevation: GeoGrid,
    windows: Vec<(usize, usize, usize)>,
    stats: NormStats,
    patch: usize,
    margin: usize,
}

/// Target, interpolated input and elevation for one level of one day.
///
/// `out_factor` coarsens the high-resolution field to the level's output
/// resolution (1 for the finest level).
fn level_fields(hr: &GeoGrid, out_factor: usize, scale: usize) -> Result<DayFields> {
    let truth = if out_factor > 1 { coarsen(hr, out_factor)? } else { hr.clone() };
    let interp = bicubic_upsample(&coarsen(&truth, scale)?, scale)?;
    Ok(DayFields { interp, truth })
}

/// Builds the training windows for a level whose output sits `out_factor`
/// times coarser than `hr_precip`. Statistics are fitted on the windows.
pub fn make_training_pairs(
    hr_precip: &[GeoGrid],
    hr_elevation: &GeoGrid,
    out_factor: usize,
    cfg: &LevelConfig,
) -> Result<TrainingSet> {
    make_pairs_inner(hr_precip, hr_elevation, out_factor, cfg, None)
}

/// As [`make_training_pairs`], normalizing with previously fitted statistics
/// (for held-out days).
pub fn make_pairs_with_stats(
    hr_precip: &[GeoGrid],
    hr_elevation: &GeoGrid,
    out_factor: usize,
    cfg: &LevelConfig,
    stats: NormStats,
) -> Result<TrainingSet> {
    make_pairs_inner(hr_precip, hr_elevation, out_factor, cfg, Some(stats))
}

fn make_pairs_inner(
    hr_precip: &[GeoGrid],
    hr_elevation: &GeoGrid,
    out_factor: usize,
    cfg: &LevelConfig,
    stats: Option<NormStats>,
) -> Result<TrainingSet> {
    cfg.validate()?;
    if cfg.arch.channels != 2 {
        return Err(TrainError::Config("training pairs carry precipitation and elevation (2 channels)".into()));
    }
    if hr_precip.is_empty() {
        return Err(TrainError::NoPairs("empty precipitation series".into()));
    }
    if out_factor == 0 {
        return Err(TrainError::Config("out_factor must be >= 1".into()));
    }
    let (hr_rows, hr_cols) = hr_elevation.dims();
    let total = out_factor * cfg.scale;
    if hr_rows % total != 0 || hr_cols % total != 0 {
        return Err(GridError::NotDivisible { rows: hr_rows, cols: hr_cols, factor: total }.into());
    }
    let elevation = if out_factor > 1 { coarsen(hr_elevation, out_factor)? } else { hr_elevation.clone() };
    let days = hr_precip
        .iter()
        .map(|g| {
            if g.dims() != (hr_rows, hr_cols) {
                return Err(TrainError::Config(format!(
                    "precipitation grid {:?} does not match elevation {:?}",
                    g.dims(),
                    (hr_rows, hr_cols)
                )));
            }
            level_fields(g, out_factor, cfg.scale)
        })
        .collect::<Result<Vec<_>>>()?;

    let (rows, cols) = elevation.dims();
    let row_starts = window_starts(rows, cfg.patch, cfg.stride);
    let col_starts = window_starts(cols, cfg.patch, cfg.stride);
    if row_starts.is_empty() || col_starts.is_empty() {
        return Err(TrainError::NoPairs(format!("{rows}x{cols} level is smaller than a {0}x{0} window", cfg.patch)));
    }
    let mut windows = Vec::with_capacity(days.len() * row_starts.len() * col_starts.len());
    for d in 0..days.len() {
        for &r in &row_starts {
            for &c in &col_starts {
                windows.push((d, r, c));
            }
        }
    }

    let stats = match stats {
        Some(s) => s,
        None => fit_window_stats(&days, &elevation, &row_starts, &col_starts, cfg.patch),
    };
    Ok(TrainingSet { days, elevation, windows, stats, patch: cfg.patch, margin: cfg.arch.margin() })
}

/// Per-channel mean/std over every pixel of every window, counting overlaps.
fn fit_window_stats(
    days: &[DayFields],
    elevation: &GeoGrid,
    row_starts: &[usize],
    col_starts: &[usize],
    patch: usize,
) -> NormStats {
    let coverage = |starts: &[usize], len: usize| {
        let mut cover = vec![0.0; len];
        for &s in starts {
            cover[s..s + patch].iter_mut().for_each(|c| *c += 1.0);
        }
        cover
    };
    let (rows, cols) = elevation.dims();
    let row_cover = coverage(row_starts, rows);
    let col_cover = coverage(col_starts, cols);
    let weighted = |grids: &[&GeoGrid]| {
        let mut w = 0.0;
        let mut s = 0.0;
        for g in grids {
            for r in 0..rows {
                for c in 0..cols {
                    let wt = row_cover[r] * col_cover[c];
                    w += wt;
                    s += wt * g.get(r, c);
                }
            }
        }
        let mean = s / w;
        let mut s2 = 0.0;
        for g in grids {
            for r in 0..rows {
                for c in 0..cols {
                    let d = g.get(r, c) - mean;
                    s2 += row_cover[r] * col_cover[c] * d * d;
                }
            }
        }
        (mean, (s2 / w).sqrt())
    };
    let interp: Vec<&GeoGrid> = days.iter().map(|d| &d.interp).collect();
    let (pm, ps) = weighted(&interp);
    let (em, es) = weighted(&[elevation]);
    NormStats::new(vec![pm, em], vec![ps, es])
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn days(&self) -> usize {
        self.days.len()
    }

    pub fn stats(&self) -> &NormStats {
        &self.stats
    }

    pub fn label_size(&self) -> usize {
        self.patch - 2 * self.margin
    }

    /// Window origins as (day, row, col).
    pub fn windows(&self) -> &[(usize, usize, usize)] {
        &self.windows
    }

    /// Raw sub-image `i`.
    pub fn pair(&self, i: usize) -> Result<TrainPair> {
        let (d, r, c) = self.windows[i];
        let (p, m, l) = (self.patch, self.margin, self.label_size());
        let input = ChannelStack::new(
            vec![self.days[d].interp.window(r, c, p, p)?, self.elevation.window(r, c, p, p)?],
            vec!["precip".into(), "elevation".into()],
        )?;
        let label = self.days[d].truth.window(r + m, c + m, l, l)?;
        Ok(TrainPair { input, label })
    }

    /// Normalized network input and label for window `i`.
    pub fn sample(&self, i: usize) -> (Tensor3, Tensor3) {
        let (d, r, c) = self.windows[i];
        let (p, m, l) = (self.patch, self.margin, self.label_size());
        let day = &self.days[d];
        let mut input = Vec::with_capacity(2 * p * p);
        for (ch, grid) in [&day.interp, &self.elevation].into_iter().enumerate() {
            for y in r..r + p {
                input.extend((c..c + p).map(|x| self.stats.apply(ch, grid.get(y, x))));
            }
        }
        let mut label = Vec::with_capacity(l * l);
        for y in r + m..r + m + l {
            label.extend((c + m..c + m + l).map(|x| self.stats.apply(0, day.truth.get(y, x))));
        }
        (
            Tensor3 { channels: 2, height: p, width: p, data: input },
            Tensor3 { channels: 1, height: l, width: l, data: label },
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: SrcnnParams,
    /// Batch loss (normalized units) after each iteration, starting at iteration 1.
    pub losses: Vec<f64>,
}

pub fn train_level(set: &TrainingSet, cfg: &LevelConfig) -> Result<TrainOutcome> {
    train_level_with(set, cfg, |_, _| {})
}

/// [`train_level`] with a callback invoked as `(iteration, loss)` after every step.
pub fn train_level_with(
    set: &TrainingSet,
    cfg: &LevelConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(TrainError::NoPairs("training set is empty".into()));
    }
    let mut params = init_params(cfg.seed, cfg.arch);
    params.norm = set.stats.clone();
    let mut adam = AdamState::new(&params, cfg.learning_rates);
    let mut sampler = ChaCha8Rng::seed_from_u64(cfg.seed);
    sampler.set_stream(1);

    let mut losses = Vec::with_capacity(cfg.iterations);
    let scale = 1.0 / cfg.batch as f64;
    for iteration in 1..=cfg.iterations {
        let mut grads = Gradients::zeros_like(&params);
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let (x, y) = set.sample(sampler.gen_range(0..set.len()));
            let cache = forward_cached(&params, &x)?;
            let (l, mut d_out) = mse_loss(&cache.output, &y)?;
            d_out.data.iter_mut().for_each(|g| *g *= scale);
            grads.accumulate(&backward(&params, &cache, &d_out, false)?);
            loss += l * scale;
        }
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(TrainError::Diverged { iteration, loss });
        }
        adam_step(&mut params, &grads, &mut adam);
        losses.push(loss);
        progress(iteration, loss);
    }
    Ok(TrainOutcome { params, losses })
}

/// Mean squared error over every window, in normalized units.
pub fn validation_loss(params: &SrcnnParams, set: &TrainingSet) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..set.len() {
        let (x, y) = set.sample(i);
        total += mse_loss(&forward(params, &x)?, &y)?.0;
    }
    Ok(total / set.len() as f64)
}

/// Root mean squared error (mm/day) of the network and of plain bicubic
/// interpolation on every window label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScores {
    pub model_rmse: f64,
    pub bicubic_rmse: f64,
}

pub fn score_pairs(params: &SrcnnParams, set: &TrainingSet) -> Result<PairScores> {
    let (mut model, mut bicubic, mut n) = (0.0, 0.0, 0usize);
    let (m, l) = (set.margin, set.label_size());
    for i in 0..set.len() {
        let (x, y) = set.sample(i);
        let pred = forward(params, &x)?;
        for py in 0..l {
            for px in 0..l {
                let truth = set.stats.invert(0, y.at(0, py, px));
                let p = set.stats.invert(0, pred.at(0, py, px)).max(0.0);
                let b = set.stats.invert(0, x.at(0, py + m, px + m));
                model += (p - truth) * (p - truth);
                bicubic += (b - truth) * (b - truth);
            }
        }
        n += l * l;
    }
    Ok(PairScores { model_rmse: (model / n as f64).sqrt(), bicubic_rmse: (bicubic / n as f64).sqrt() })
}

/// Loss curve as `iteration,loss` CSV.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("iteration,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{l:e}\n", i + 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::mean_std;

    fn field(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> GeoGrid {
        GeoGrid::from_values(rows, cols, (0..rows * cols).map(|k| f(k / cols, k % cols)).collect()).unwrap()
    }

    #[test]
    fn window_count_matches_formula() {
        assert_eq!(window_starts(208, 51, 20).len(), 8);
        assert_eq!(window_starts(464, 51, 20).len(), 21);
        for len in 0..120 {
            for size in 1..40 {
                for stride in 1..25 {
                    let brute = (0..len).filter(|&s| s + size <= len && s % stride == 0).count();
                    assert_eq!(window_starts(len, size, stride).len(), brute);
                }
            }
        }
    }

    #[test]
    fn conus_day_yields_168_windows() {
        let hr = GeoGrid::filled(208, 464, 1.0).unwrap();
        let set = make_training_pairs(&[hr.clone()], &hr, 1, &LevelConfig::default()).unwrap();
        assert_eq!(set.len(), 168);
    }

    #[test]
    fn constant_precip_gives_constant_inputs() {
        let hr = GeoGrid::filled(64, 64, 4.0).unwrap();
        let elev = field(64, 64, |r, c| (r * 7 + c) as f64);
        let cfg = LevelConfig { patch: 25, stride: 10, ..Default::default() };
        let set = make_training_pairs(&[hr], &elev, 2, &cfg).unwrap();
        for i in 0..set.len() {
            let pair = set.pair(i).unwrap();
            assert!(pair.input.channels()[0].values().iter().all(|v| (v - 4.0).abs() < 1e-12));
        }
    }

    #[test]
    fn label_is_the_cropped_truth() {
        let hr = field(64, 96, |r, c| ((r * 3 + c * 5) % 17) as f64);
        let elev = field(64, 96, |r, c| (r + c) as f64);
        let cfg = LevelConfig { patch: 25, stride: 9, ..Default::default() };
        let set = make_training_pairs(&[hr.clone()], &elev, 1, &cfg).unwrap();
        for i in 0..set.len() {
            let (_, r, c) = set.windows()[i];
            let pair = set.pair(i).unwrap();
            assert_eq!(pair.label.dims(), (13, 13));
            assert_eq!(pair.label, hr.window(r + 6, c + 6, 13, 13).unwrap());
        }
    }

    #[test]
    fn normalized_windows_are_standardized() {
        let hr = field(48, 80, |r, c| ((r as f64 / 3.0).sin() + (c as f64 / 5.0).cos() + 2.0).max(0.0));
        let elev = field(48, 80, |r, c| (r * c) as f64);
        let cfg = LevelConfig { patch: 21, stride: 7, ..Default::default() };
        let set = make_training_pairs(&[hr.clone(), hr.map(|v| v * 2.0).unwrap()], &elev, 1, &cfg).unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..set.len()).flat_map(|i| set.sample(i).0.plane(ch).to_vec()).collect();
            let (m, s) = mean_std(&vals);
            assert!(m.abs() < 1e-9 && (s - 1.0).abs() < 1e-9, "channel {ch}: {m} {s}");
        }
    }

    #[test]
    fn rejects_indivisible_dims() {
        let hr = GeoGrid::filled(60, 60, 1.0).unwrap();
        assert!(make_training_pairs(&[hr.clone()], &hr, 8, &LevelConfig { patch: 13, ..Default::default() }).is_err());
    }

    #[test]
    fn overrides_from_key_values() {
        let kv = KeyValues::parse("iterations = 500\nbatch = 4\nlr3 = 2e-5\n").unwrap();
        let cfg = LevelConfig::default().with_overrides(&kv).unwrap();
        assert_eq!((cfg.iterations, cfg.batch, cfg.learning_rates[2]), (500, 4, 2e-5));
        let round = LevelConfig::default().with_overrides(&cfg.to_key_values()).unwrap();
        assert_eq!(round, cfg);
        assert!(LevelConfig::default().with_overrides(&KeyValues::parse("bogus = 1").unwrap()).is_err());
        assert!(LevelConfig::default().with_overrides(&KeyValues::parse("patch = 12").unwrap()).is_err());
    }

    #[test]
    fn huge_learning_rate_is_reported_as_divergence() {
        let hr = field(32, 32, |r, c| ((r * 5 + c * 3) % 11) as f64);
        let elev = field(32, 32, |r, c| (r + 2 * c) as f64);
        let cfg = LevelConfig { patch: 15, stride: 8, batch: 2, iterations: 200, learning_rates: [1e6; 3], ..Default::default() };
        let set = make_training_pairs(&[hr], &elev, 1, &cfg).unwrap();
        assert!(matches!(train_level(&set, &cfg), Err(TrainError::Diverged { .. })));
    }
}
