use deepsd::nn::{backward, forward, forward_cached, mse_loss, Architecture, SrcnnParams, Tensor3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const H: f64 = 1e-5;

fn random_net(seed: u64) -> (SrcnnParams, Tensor3, Tensor3) {
    let arch = Architecture { channels: 2, n1: 2, n2: 2, f1: 9, f2: 1, f3: 5 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Normal::new(0.0, 0.3).unwrap();
    let mut p = SrcnnParams::zeros(arch);
    for layer in p.layers.iter_mut() {
        layer.weights.iter_mut().for_each(|v| *v = w.sample(&mut rng));
        layer.bias.iter_mut().for_each(|v| *v = w.sample(&mut rng));
    }
    let x = Tensor3::from_vec(2, 15, 15, (0..450).map(|_| w.sample(&mut rng) * 3.0).collect()).unwrap();
    let y = Tensor3::from_vec(1, 3, 3, (0..9).map(|_| w.sample(&mut rng)).collect()).unwrap();
    (p, x, y)
}

fn loss(p: &SrcnnParams, x: &Tensor3, y: &Tensor3) -> f64 {
    mse_loss(&forward(p, x).unwrap(), y).unwrap().0
}

/// Relative error with a small absolute floor so vanishing gradients are
/// judged on an absolute scale.
fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

#[test]
fn analytic_gradients_match_central_differences() {
    for seed in 0..3 {
        let (p, x, y) = random_net(seed);
        let cache = forward_cached(&p, &x).unwrap();
        let (_, d_out) = mse_loss(&cache.output, &y).unwrap();
        let g = backward(&p, &cache, &d_out, true).unwrap();
        let mut worst = 0.0f64;
        for l in 0..3 {
            for (is_bias, analytic) in [(false, &g.layers[l].weights), (true, &g.layers[l].bias)] {
                for (i, &a) in analytic.iter().enumerate() {
                    let nudge = |delta: f64| {
                        let mut q = p.clone();
                        let t = if is_bias { &mut q.layers[l].bias } else { &mut q.layers[l].weights };
                        t[i] += delta;
                        loss(&q, &x, &y)
                    };
                    let numeric = (nudge(H) - nudge(-H)) / (2.0 * H);
                    worst = worst.max(rel(a, numeric));
                }
            }
        }
        let dx = g.input.unwrap();
        for i in (0..x.data.len()).step_by(7) {
            let nudge = |delta: f64| {
                let mut q = x.clone();
                q.data[i] += delta;
                loss(&p, &q, &y)
            };
            worst = worst.max(rel(dx.data[i], (nudge(H) - nudge(-H)) / (2.0 * H)));
        }
        assert!(worst < 1e-4, "seed {seed}: max relative error {worst:e}");
    }
}
