//! Per-location two-step regression baseline: an L1 logistic classifier for
//! wet versus dry days, then lasso regression of wet-day amounts, both on the
//! 9x9 neighborhood of coarse cells around the target fine cell.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::grid::{mean_std, GeoGrid, STD_FLOOR};

#[derive(Debug, Error)]
pub enum AsdError {
    #[error("design matrix shape: {0}")]
    Shape(String),
    #[error("lambda must be finite and >= 0, got {0}")]
    BadLambda(f64),
    #[error("insufficient data: {rainy} rainy training days, need at least {need}")]
    InsufficientData { rainy: usize, need: usize },
    #[error("location ({row}, {col}) outside {rows}x{cols} grid")]
    OutOfBounds { row: usize, col: usize, rows: usize, cols: usize },
    #[error("series misaligned: {0}")]
    Series(String),
    #[error("locations line {line}: {msg}")]
    Locations { line: usize, msg: String },
    #[error("bad magic {:?}, expected \"ASD1\"", String::from_utf8_lossy(.found))]
    BadMagic { found: [u8; 4] },
    #[error("model dump truncated or malformed: {0}")]
    Decode(String),
}

pub type Result<T> = std::result::Result<T, AsdError>;

pub const LASSO_TOL: f64 = 1e-7;
pub const LASSO_MAX_SWEEPS: usize = 10_000;
pub const LOGISTIC_TOL: f64 = 1e-7;
pub const LOGISTIC_MAX_ITERS: usize = 10_000;
pub const DEFAULT_RAIN_THRESHOLD: f64 = 1.0;
pub const MIN_RAINY_DAYS: usize = 10;
pub const BOX: usize = 9;
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.3, 0.1, 0.03, 0.01, 0.003, 0.001];

/// Dense column-major design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n: usize,
    columns: Vec<Vec<f64>>,
}

impl Design {
    pub fn from_columns(columns: Vec<Vec<f64>>) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        if n == 0 || columns.iter().any(|c| c.len() != n) {
            return Err(AsdError::Shape("columns must be nonempty and of equal length".into()));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(AsdError::Shape("non-finite feature".into()));
        }
        Ok(Self { n, columns })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(AsdError::Shape("ragged rows".into()));
        }
        Self::from_columns((0..p).map(|j| rows.iter().map(|r| r[j]).collect()).collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    fn subset(&self, rows: &[usize]) -> Self {
        Self { n: rows.len(), columns: self.columns.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect() }
    }

    /// `intercept + X w` for every row.
    pub fn predict(&self, weights: &[f64], intercept: f64) -> Vec<f64> {
        let mut out = vec![intercept; self.n];
        for (c, w) in self.columns.iter().zip(weights) {
            if *w != 0.0 {
                out.iter_mut().zip(c).for_each(|(o, x)| *o += w * x);
            }
        }
        out
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(AsdError::BadLambda(lambda))
    }
}

fn check_targets(x: &Design, y: &[f64]) -> Result<()> {
    if y.len() != x.n {
        return Err(AsdError::Shape(format!("{} targets for {} rows", y.len(), x.n)));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(AsdError::Shape("non-finite target".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub converged: bool,
    pub sweeps: usize,
    /// Objective after each sweep.
    pub objective: Vec<f64>,
}

pub fn soft_threshold(rho: f64, lambda: f64) -> f64 {
    rho.signum() * (rho.abs() - lambda).max(0.0)
}

/// `½·mean((y − b − Xw)²) + λ‖w‖₁`.
pub fn lasso_objective(x: &Design, y: &[f64], weights: &[f64], intercept: f64, lambda: f64) -> f64 {
    let pred = x.predict(weights, intercept);
    let mse = pred.iter().zip(y).map(|(p, t)| (t - p) * (t - p)).sum::<f64>() / x.n as f64;
    0.5 * mse + lambda * weights.iter().map(|w| w.abs()).sum::<f64>()
}

/// Cyclic coordinate descent on centered columns; the unpenalized intercept
/// is recovered from the means. Stops when no coefficient moves by more than
/// [`LASSO_TOL`] in a sweep.
pub fn lasso_fit(x: &Design, y: &[f64], lambda: f64) -> Result<LassoFit> {
    check_lambda(lambda)?;
    check_targets(x, y)?;
    let n = x.n as f64;
    let means: Vec<f64> = x.columns.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let centered: Vec<Vec<f64>> = x.columns.iter().zip(&means).map(|(c, m)| c.iter().map(|v| v - m).collect()).collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / n).collect();
    let y_mean = y.iter().sum::<f64>() / n;
    let mut weights = vec![0.0; x.p()];
    let mut residual: Vec<f64> = y.iter().map(|t| t - y_mean).collect();
    let mut objective = Vec::new();
    let intercept_of = |w: &[f64]| y_mean - w.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>();
    for sweep in 1..=LASSO_MAX_SWEEPS {
        let mut max_delta = 0.0f64;
        for (j, col) in centered.iter().enumerate() {
            let old = weights[j];
            let new = if norms[j] == 0.0 {
                0.0
            } else {
                let rho = col.iter().zip(&residual).map(|(a, r)| a * r).sum::<f64>() / n + norms[j] * old;
                soft_threshold(rho, lambda) / norms[j]
            };
            let delta = new - old;
            if delta != 0.0 {
                residual.iter_mut().zip(col).for_each(|(r, a)| *r -= delta * a);
                weights[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        let l1: f64 = weights.iter().map(|w| w.abs()).sum();
        objective.push(0.5 * residual.iter().map(|r| r * r).sum::<f64>() / n + lambda * l1);
        if max_delta < LASSO_TOL {
            let intercept = intercept_of(&weights);
            return Ok(LassoFit { weights, intercept, converged: true, sweeps: sweep, objective });
        }
    }
    let intercept = intercept_of(&weights);
    Ok(LassoFit { weights, intercept, converged: false, sweeps: LASSO_MAX_SWEEPS, objective })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean logistic loss and its gradient `(d/dw, d/db)`.
pub fn logistic_loss_grad(x: &Design, labels: &[f64], weights: &[f64], intercept: f64) -> (f64, Vec<f64>, f64) {
    let n = x.n as f64;
    let z = x.predict(weights, intercept);
    let mut loss = 0.0;
    let mut resid = Vec::with_capacity(x.n);
    for (zi, yi) in z.iter().zip(labels) {
        loss += softplus(*zi) - yi * zi;
        resid.push(sigmoid(*zi) - yi);
    }
    let grad_w = x.columns.iter().map(|c| c.iter().zip(&resid).map(|(a, r)| a * r).sum::<f64>() / n).collect();
    let grad_b = resid.iter().sum::<f64>() / n;
    (loss / n, grad_w, grad_b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// Set when the labels held a single class; the model then always
    /// returns this probability.
    pub constant: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl LogisticFit {
    pub fn probability(&self, features: &[f64]) -> f64 {
        match self.constant {
            Some(p) => p,
            None => sigmoid(self.intercept + features.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>()),
        }
    }
}

/// Largest eigenvalue of `[1 X]ᵀ[1 X] / n` by power iteration, padded slightly.
fn lipschitz(x: &Design) -> f64 {
    let n = x.n as f64;
    let p = x.p() + 1;
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut eig = 1.0;
    for _ in 0..100 {
        let xv = x.predict(&v[1..], v[0]);
        let mut w = Vec::with_capacity(p);
        w.push(xv.iter().sum::<f64>() / n);
        w.extend(x.columns.iter().map(|c| c.iter().zip(&xv).map(|(a, b)| a * b).sum::<f64>() / n));
        let norm = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        eig = norm;
        v = w.into_iter().map(|a| a / norm).collect();
    }
    eig * 1.05 + 1e-12
}

/// L1-penalized logistic regression by accelerated proximal gradient with
/// adaptive restart; stops when no coefficient moves by more than
/// [`LOGISTIC_TOL`].
pub fn logistic_fit(x: &Design, labels: &[f64], lambda: f64) -> Result<LogisticFit> {
    check_lambda(lambda)?;
    check_targets(x, labels)?;
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(AsdError::Shape("labels must be 0 or 1".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1.0).count();
    if positives == 0 || positives == labels.len() {
        let p = if positives == 0 { 0.0 } else { 1.0 };
        return Ok(LogisticFit { weights: vec![0.0; x.p()], intercept: 0.0, constant: Some(p), converged: true, iterations: 0 });
    }
    // Logistic curvature is at most 1/4.
    let step = 4.0 / lipschitz(x);
    let mut w = vec![0.0; x.p()];
    let prior = positives as f64 / labels.len() as f64;
    let mut b = (prior / (1.0 - prior)).ln();
    let (mut yw, mut yb) = (w.clone(), b);
    let mut t = 1.0f64;
    for iteration in 1..=LOGISTIC_MAX_ITERS {
        let (_, gw, gb) = logistic_loss_grad(x, labels, &yw, yb);
        let new_w: Vec<f64> = yw.iter().zip(&gw).map(|(v, g)| soft_threshold(v - step * g, step * lambda)).collect();
        let new_b = yb - step * gb;
        let max_delta = new_w.iter().zip(&w).map(|(a, c)| (a - c).abs()).fold((new_b - b).abs(), f64::max);
        // Restart momentum when the step points against the previous motion.
        let against: f64 =
            gw.iter().zip(new_w.iter().zip(&w)).map(|(g, (a, c))| g * (a - c)).sum::<f64>() + gb * (new_b - b);
        let t_next = if against > 0.0 { 1.0 } else { (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0 };
        let momentum = if against > 0.0 { 0.0 } else { (t - 1.0) / t_next };
        yw = new_w.iter().zip(&w).map(|(a, c)| a + momentum * (a - c)).collect();
        yb = new_b + momentum * (new_b - b);
        w = new_w;
        b = new_b;
        t = t_next;
        if max_delta < LOGISTIC_TOL {
            return Ok(LogisticFit { weights: w, intercept: b, constant: None, converged: true, iterations: iteration });
        }
    }
    Ok(LogisticFit { weights: w, intercept: b, constant: None, converged: false, iterations: LOGISTIC_MAX_ITERS })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsdConfig {
    pub rain_threshold: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for AsdConfig {
    fn default() -> Self {
        Self { rain_threshold: DEFAULT_RAIN_THRESHOLD, folds: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AsdLocationModel {
    pub row: usize,
    pub col: usize,
    /// Fine cells per coarse cell along each axis.
    pub factor: usize,
    pub rain_threshold: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub classifier: LogisticFit,
    pub classifier_lambda: f64,
    /// Lasso fit on standardized amounts.
    pub regressor: LassoFit,
    pub regressor_lambda: f64,
    pub amount_mean: f64,
    pub amount_std: f64,
}

/// The 9x9 coarse neighborhood (row-major) of the coarse cell holding fine
/// cell (row, col), with edge replication.
pub fn box_features(lr: &GeoGrid, row: usize, col: usize, factor: usize) -> Vec<f64> {
    let (cr, cc) = ((row / factor) as isize, (col / factor) as isize);
    let half = (BOX / 2) as isize;
    let mut out = Vec::with_capacity(BOX * BOX);
    for dr in -half..=half {
        for dc in -half..=half {
            out.push(lr.get_clamped(cr + dr, cc + dc));
        }
    }
    out
}

fn fold_of(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (rank, &i) in order.iter().enumerate() {
        fold[i] = rank % folds;
    }
    fold
}

/// Fold assignment used for cross-validation, deterministic in `seed`.
pub fn cv_folds(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    fold_of(n, folds, seed)
}

/// λ with the lowest mean held-out score; ties keep the earlier (listed) value.
fn select_lambda(lambdas: &[f64], folds: &[usize], k: usize, score: impl Fn(&[usize], &[usize], f64) -> Result<f64>) -> Result<f64> {
    let mut best = (f64::INFINITY, lambdas[0]);
    for &lambda in lambdas {
        let mut total = 0.0;
        for f in 0..k {
            let train: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..folds.len()).filter(|&i| folds[i] == f).collect();
            if train.is_empty() || test.is_empty() {
                continue;
            }
            total += score(&train, &test, lambda)?;
        }
        if total < best.0 {
            best = (total, lambda);
        }
    }
    Ok(best.1)
}

fn standardize_columns(raw: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>, Design) {
    let p = raw[0].len();
    let mut mean = Vec::with_capacity(p);
    let mut std = Vec::with_capacity(p);
    let mut columns = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = raw.iter().map(|r| r[j]).collect();
        let (m, s) = mean_std(&col);
        let s = s.max(STD_FLOOR);
        columns.push(col.iter().map(|v| (v - m) / s).collect());
        mean.push(m);
        std.push(s);
    }
    (mean, std, Design { n: raw.len(), columns })
}

/// Fits the two-step model for fine cell (row, col). `lr` and `hr` are
/// aligned daily series; λ for each step is picked by k-fold cross-validation.
pub fn fit_asd(
    row: usize,
    col: usize,
    lr: &[GeoGrid],
    hr: &[GeoGrid],
    lambdas: &[f64],
    cfg: &AsdConfig,
) -> Result<AsdLocationModel> {
    if lr.len() != hr.len() || lr.is_empty() {
        return Err(AsdError::Series(format!("{} coarse days vs {} fine days", lr.len(), hr.len())));
    }
    if lambdas.is_empty() {
        return Err(AsdError::Series("empty lambda grid".into()));
    }
    for &l in lambdas {
        check_lambda(l)?;
    }
    if !(cfg.rain_threshold.is_finite() && cfg.rain_threshold > 0.0) || cfg.folds < 2 {
        return Err(AsdError::Series("rain threshold must be > 0 and folds >= 2".into()));
    }
    let (rows, cols) = hr[0].dims();
    if row >= rows || col >= cols {
        return Err(AsdError::OutOfBounds { row, col, rows, cols });
    }
    let (lr_rows, lr_cols) = lr[0].dims();
    if lr_rows == 0 || rows % lr_rows != 0 || cols % lr_cols != 0 || rows / lr_rows != cols / lr_cols {
        return Err(AsdError::Series(format!("fine grid {rows}x{cols} is not a refinement of {lr_rows}x{lr_cols}")));
    }
    if lr.iter().any(|g| g.dims() != (lr_rows, lr_cols)) || hr.iter().any(|g| g.dims() != (rows, cols)) {
        return Err(AsdError::Series("grid dims vary within a series".into()));
    }
    let factor = rows / lr_rows;

    let raw: Vec<Vec<f64>> = lr.iter().map(|g| box_features(g, row, col, factor)).collect();
    let amounts: Vec<f64> = hr.iter().map(|g| g.get(row, col)).collect();
    let labels: Vec<f64> = amounts.iter().map(|&a| f64::from(u8::from(a > cfg.rain_threshold))).collect();
    let rainy: Vec<usize> = (0..amounts.len()).filter(|&d| labels[d] == 1.0).collect();
    if rainy.len() < MIN_RAINY_DAYS {
        return Err(AsdError::InsufficientData { rainy: rainy.len(), need: MIN_RAINY_DAYS });
    }
    let (feature_mean, feature_std, x) = standardize_columns(&raw);

    let folds = fold_of(x.n, cfg.folds, cfg.seed);
    let classifier_lambda = select_lambda(lambdas, &folds, cfg.folds, |train, test, lambda| {
        let xt = x.subset(train);
        let yt: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
        let fit = logistic_fit(&xt, &yt, lambda)?;
        let xv = x.subset(test);
        Ok(test.iter().enumerate().map(|(k, &i)| deviance(&fit, &xv, k, labels[i])).sum::<f64>() / test.len() as f64)
    })?;
    let classifier = logistic_fit(&x, &labels, classifier_lambda)?;

    let xr = x.subset(&rainy);
    let (amount_mean, amount_std) = mean_std(&rainy.iter().map(|&d| amounts[d]).collect::<Vec<_>>());
    let amount_std = amount_std.max(STD_FLOOR);
    let target: Vec<f64> = rainy.iter().map(|&d| (amounts[d] - amount_mean) / amount_std).collect();
    let rainy_folds = fold_of(rainy.len(), cfg.folds, cfg.seed.wrapping_add(1));
    let regressor_lambda = select_lambda(lambdas, &rainy_folds, cfg.folds, |train, test, lambda| {
        let fit = lasso_fit(&xr.subset(train), &train.iter().map(|&i| target[i]).collect::<Vec<_>>(), lambda)?;
        let pred = xr.subset(test).predict(&fit.weights, fit.intercept);
        Ok(pred.iter().zip(test).map(|(p, &i)| (p - target[i]).powi(2)).sum::<f64>() / test.len() as f64)
    })?;
    let regressor = lasso_fit(&xr, &target, regressor_lambda)?;

    Ok(AsdLocationModel {
        row,
        col,
        factor,
        rain_threshold: cfg.rain_threshold,
        feature_mean,
        feature_std,
        classifier,
        classifier_lambda,
        regressor,
        regressor_lambda,
        amount_mean,
        amount_std,
    })
}

fn deviance(fit: &LogisticFit, x: &Design, row: usize, label: f64) -> f64 {
    let features: Vec<f64> = x.columns.iter().map(|c| c[row]).collect();
    let p = fit.probability(&features).clamp(1e-12, 1.0 - 1e-12);
    -2.0 * (label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

impl AsdLocationModel {
    fn standardized(&self, lr_day: &GeoGrid) -> Vec<f64> {
        box_features(lr_day, self.row, self.col, self.factor)
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn rain_probability(&self, lr_day: &GeoGrid) -> f64 {
        self.classifier.probability(&self.standardized(lr_day))
    }

    /// Zero on predicted dry days, otherwise the non-negative regressed amount.
    pub fn predict(&self, lr_day: &GeoGrid) -> f64 {
        let z = self.standardized(lr_day);
        if self.classifier.probability(&z) < 0.5 {
            return 0.0;
        }
        let scaled =
            self.regressor.intercept + z.iter().zip(&self.regressor.weights).map(|(x, w)| x * w).sum::<f64>();
        (self.amount_mean + self.amount_std * scaled).max(0.0)
    }
}

pub fn predict_asd(model: &AsdLocationModel, lr_day: &GeoGrid) -> f64 {
    model.predict(lr_day)
}

/// Parses `row col` (or `row,col`) lines; `#` starts a comment.
pub fn parse_locations(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        let parse = |s: &str| s.parse::<usize>().map_err(|_| AsdError::Locations { line: i + 1, msg: format!("bad index {s:?}") });
        match fields.as_slice() {
            [r, c] => out.push((parse(r)?, parse(c)?)),
            _ => return Err(AsdError::Locations { line: i + 1, msg: "expected two indices".into() }),
        }
    }
    Ok(out)
}

pub const ASD_MAGIC: [u8; 4] = *b"ASD1";

/// Binary model dump, little-endian:
///
/// | field | type |
/// |---|---|
/// | magic `ASD1` | 4 bytes |
/// | row, col, factor, features `p` | u32 x 4 |
/// | rain threshold, classifier λ, regressor λ | f64 x 3 |
/// | feature means, feature stds | f64 x p each |
/// | classifier weights, intercept | f64 x (p + 1) |
/// | classifier constant flag, probability | u8, f64 |
/// | regressor weights, intercept | f64 x (p + 1) |
/// | amount mean, amount std | f64 x 2 |
pub fn encode_model(m: &AsdLocationModel) -> Vec<u8> {
    let p = m.feature_mean.len();
    let mut out = Vec::with_capacity(4 + 16 + 8 * (6 * p + 8) + 1);
    out.extend_from_slice(&ASD_MAGIC);
    for v in [m.row, m.col, m.factor, p] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut put = |vals: &[f64]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    put(&[m.rain_threshold, m.classifier_lambda, m.regressor_lambda]);
    put(&m.feature_mean);
    put(&m.feature_std);
    put(&m.classifier.weights);
    put(&[m.classifier.intercept]);
    out.push(u8::from(m.classifier.constant.is_some()));
    let mut put = |vals: &[f64]| vals.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    put(&[m.classifier.constant.unwrap_or(0.0)]);
    put(&m.regressor.weights);
    put(&[m.regressor.intercept, m.amount_mean, m.amount_std]);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| AsdError::Decode(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| AsdError::Decode("size overflow".into()))?)?;
        let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(AsdError::Decode("non-finite value".into()));
        }
        Ok(vals)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<AsdLocationModel> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4).map_err(|_| AsdError::Decode("missing magic".into()))?.try_into().expect("4 bytes");
    if magic != ASD_MAGIC {
        return Err(AsdError::BadMagic { found: magic });
    }
    let (row, col, factor, p) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    if factor == 0 || p == 0 {
        return Err(AsdError::Decode("factor and feature count must be > 0".into()));
    }
    // Check the full length before allocating anything sized by `p`.
    let expected = 4 + 16 + 8 * (3 + 3 * p + 1) + 1 + 8 * (1 + p + 3);
    if bytes.len() != expected {
        return Err(AsdError::Decode(format!("expected {expected} bytes for {p} features, got {}", bytes.len())));
    }
    let head = r.f64s(3)?;
    let feature_mean = r.f64s(p)?;
    let feature_std = r.f64s(p)?;
    if feature_std.iter().any(|s| *s <= 0.0) {
        return Err(AsdError::Decode("feature std must be > 0".into()));
    }
    let cw = r.f64s(p + 1)?;
    let flag = r.take(1)?[0];
    let constant_p = r.f64s(1)?[0];
    let constant = match flag {
        0 if constant_p.to_bits() == 0 => None,
        1 if (0.0..=1.0).contains(&constant_p) => Some(constant_p),
        _ => return Err(AsdError::Decode("bad classifier constant".into())),
    };
    let rw = r.f64s(p + 1)?;
    let tail = r.f64s(2)?;
    if !(head[0] > 0.0) || tail[1] <= 0.0 {
        return Err(AsdError::Decode("threshold and amount std must be > 0".into()));
    }
    Ok(AsdLocationModel {
        row,
        col,
        factor,
        rain_threshold: head[0],
        feature_mean,
        feature_std,
        classifier: LogisticFit {
            weights: cw[..p].to_vec(),
            intercept: cw[p],
            constant,
            converged: true,
            iterations: 0,
        },
        classifier_lambda: head[1],
        regressor: LassoFit { weights: rw[..p].to_vec(), intercept: rw[p], converged: true, sweeps: 0, objective: Vec::new() },
        regressor_lambda: head[2],
        amount_mean: tail[0],
        amount_std: tail[1],
    })
}
