//! Library kernels against deliberately naive reimplementations on seeded
//! random instances.

use chrono::{Datelike, Duration, NaiveDate};
use deepsd::bcsd::{fit_bcsd, BcsdParams};
use deepsd::grid::{bicubic_upsample, GeoGrid};
use deepsd::metrics::{location_metrics, pearson, percentile, perkins_skill};
use deepsd::nn::{conv2d_valid, mse_loss, ConvLayer, Tensor3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 25;
const TOL: f64 = 1e-10;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(lo..hi)).collect()
}

#[test]
fn conv_matches_quadruple_loop() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let (c, o, k) = (r.gen_range(1..4), r.gen_range(1..5), [1, 3, 5, 9][r.gen_range(0..4)]);
        let (h, w) = (k + r.gen_range(0..12), k + r.gen_range(0..12));
        let x = Tensor3::from_vec(c, h, w, uniform(&mut r, c * h * w, -2.0, 2.0)).unwrap();
        let mut layer = ConvLayer::zeros(o, c, k);
        layer.weights = uniform(&mut r, o * c * k * k, -1.0, 1.0);
        layer.bias = uniform(&mut r, o, -1.0, 1.0);
        let got = conv2d_valid(&x, &layer).unwrap();
        let (oh, ow) = (h - k + 1, w - k + 1);
        assert_eq!(got.shape(), (o, oh, ow));
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = layer.bias[oc];
                    for ic in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += layer.weights[((oc * c + ic) * k + dy) * k + dx] * x.at(ic, y + dy, xx + dx);
                            }
                        }
                    }
                    assert!((got.at(oc, y, xx) - acc).abs() <= TOL, "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn mse_matches_direct_sum() {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let (h, w) = (r.gen_range(1..30), r.gen_range(1..30));
        let a = Tensor3::from_vec(1, h, w, uniform(&mut r, h * w, -5.0, 5.0)).unwrap();
        let b = Tensor3::from_vec(1, h, w, uniform(&mut r, h * w, -5.0, 5.0)).unwrap();
        let (loss, grad) = mse_loss(&a, &b).unwrap();
        let n = (h * w) as f64;
        let mut sum = 0.0;
        for i in 0..h * w {
            sum += (a.data[i] - b.data[i]).powi(2);
            assert!((grad.data[i] - 2.0 * (a.data[i] - b.data[i]) / n).abs() <= TOL);
        }
        assert!((loss - sum / n).abs() <= TOL);
    }
}

fn skill_oracle(obs: &[f64], pred: &[f64]) -> f64 {
    let lo = obs.iter().chain(pred).fold(0.0f64, |a, &v| a.min(v)).floor();
    let bin = |v: f64| ((v - lo) / 1.0).floor() as i64;
    let mut keys: Vec<i64> = obs.iter().chain(pred).map(|&v| bin(v)).collect();
    keys.sort();
    keys.dedup();
    keys.iter()
        .map(|&k| {
            let fo = obs.iter().filter(|&&v| bin(v) == k).count() as f64 / obs.len() as f64;
            let fp = pred.iter().filter(|&&v| bin(v) == k).count() as f64 / pred.len() as f64;
            fo.min(fp)
        })
        .sum()
}

#[test]
fn location_metrics_match_direct_formulas() {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let n = r.gen_range(20..500);
        let obs: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.4) { r.gen_range(0.0..40.0) } else { 0.0 }).collect();
        let pred: Vec<f64> = obs.iter().map(|o| (o + r.gen_range(-5.0..5.0f64)).max(0.0)).collect();
        let m = location_metrics(&obs, &pred).unwrap();
        let nf = n as f64;
        let bias: f64 = obs.iter().zip(&pred).map(|(o, p)| p - o).sum::<f64>() / nf;
        let rmse = (obs.iter().zip(&pred).map(|(o, p)| (p - o).powi(2)).sum::<f64>() / nf).sqrt();
        let (mo, mp) = (obs.iter().sum::<f64>() / nf, pred.iter().sum::<f64>() / nf);
        let cov: f64 = obs.iter().zip(&pred).map(|(o, p)| (o - mo) * (p - mp)).sum();
        let so = obs.iter().map(|o| (o - mo).powi(2)).sum::<f64>().sqrt();
        let sp = pred.iter().map(|p| (p - mp).powi(2)).sum::<f64>().sqrt();
        assert!((m.bias - bias).abs() <= TOL);
        assert!((m.rmse - rmse).abs() <= TOL);
        assert!((m.corr.unwrap() - cov / (so * sp)).abs() <= TOL);
        assert!((pearson(&obs, &pred).unwrap() - cov / (so * sp)).abs() <= TOL);
        assert!((m.skill - skill_oracle(&obs, &pred)).abs() <= TOL, "seed {seed}");
        assert!((perkins_skill(&obs, &pred, 1.0).unwrap() - m.skill).abs() <= TOL);
    }
}

/// k-th smallest by counting, no sorting.
fn kth(values: &[f64], k: usize) -> f64 {
    *values
        .iter()
        .find(|&&v| {
            let less = values.iter().filter(|&&u| u < v).count();
            let le = values.iter().filter(|&&u| u <= v).count();
            less <= k && k < le
        })
        .unwrap()
}

#[test]
fn percentile_matches_order_statistics() {
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let n = r.gen_range(1..200);
        let v: Vec<f64> = (0..n).map(|_| (r.gen_range(0.0..50.0f64) * 4.0).round() / 4.0).collect();
        for p in [0.0, 25.0, 50.0, 90.0, 95.0, 97.5, 99.0, 99.5, 99.9, 100.0, r.gen_range(0.0..100.0)] {
            let rank = p / 100.0 * (n - 1) as f64;
            let (lo, hi) = (kth(&v, rank.floor() as usize), kth(&v, rank.ceil() as usize));
            let want = lo + (rank - rank.floor()) * (hi - lo);
            assert!((percentile(&v, p).unwrap() - want).abs() <= TOL, "seed {seed} p {p}");
        }
    }
}

fn block_mean(g: &GeoGrid, f: usize) -> GeoGrid {
    let (rows, cols) = (g.rows() / f, g.cols() / f);
    let mut v = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut s = 0.0;
            for dr in 0..f {
                for dc in 0..f {
                    s += g.get(r * f + dr, c * f + dc);
                }
            }
            v.push(s / (f * f) as f64);
        }
    }
    let (lat0, lon0, dlat, dlon) = g.coarse_georef(f);
    GeoGrid::new(rows, cols, lat0, lon0, dlat, dlon, v).unwrap()
}

#[test]
fn bcsd_factors_match_two_pass_climatology() {
    let params = BcsdParams { factor: 4, floor: 0.01, cap: 10.0 };
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let (rows, cols, days) = (8 * r.gen_range(1..3), 8 * r.gen_range(1..4), r.gen_range(20..80));
        let start = NaiveDate::from_ymd_opt(2001, r.gen_range(1..13), 1).unwrap();
        let dates: Vec<NaiveDate> = (0..days).map(|d| start + Duration::days(d as i64)).collect();
        let obs: Vec<GeoGrid> = (0..days)
            .map(|_| {
                let v = (0..rows * cols).map(|_| if r.gen_bool(0.5) { r.gen_range(0.0..30.0) } else { 0.0 }).collect();
                GeoGrid::new(rows, cols, 40.0, -100.0, 0.125, 0.125, v).unwrap()
            })
            .collect();
        let model = fit_bcsd(&obs, &dates, params).unwrap();
        // Pass 1: which days belong to which month.
        let mut by_month: Vec<Vec<usize>> = vec![Vec::new(); 12];
        for (d, date) in dates.iter().enumerate() {
            by_month[date.month0() as usize].push(d);
        }
        // Pass 2: per-cell means of observations and of their degraded copies.
        for (m, members) in by_month.iter().enumerate() {
            let Some(factor) = &model.factors[m] else {
                assert!(members.is_empty());
                continue;
            };
            let degraded: Vec<GeoGrid> = members
                .iter()
                .map(|&d| bicubic_upsample(&block_mean(&obs[d], 4), 4).unwrap().map(|v| v.max(0.0)).unwrap())
                .collect();
            for cell in 0..rows * cols {
                let k = members.len() as f64;
                let o = members.iter().map(|&d| obs[d].values()[cell]).sum::<f64>() / k;
                let i = degraded.iter().map(|g| g.values()[cell]).sum::<f64>() / k;
                let want = (o / i.max(params.floor)).min(params.cap);
                assert!((factor.values()[cell] - want).abs() <= TOL, "seed {seed} month {m} cell {cell}");
            }
        }
    }
}
