//! Central finite-difference checks of analytic layer gradients, in f64.

use crystal_core::nn::{
    softmax_cross_entropy, BatchNorm2d, Concat, Conv2d, Dense, Flatten, GlobalAvgPool, Layer, Pool2d, PoolMode, Relu, Standardize,
    Residual, Sequential, Shortcut, Tensor,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// `||a - n|| / (||a|| + ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Input whose entries are distinct, at least `2/n` apart and never within
/// `1/n` of zero, so max-pool and ReLU kinks stay out of reach of the step.
pub fn spread_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| ((i as f64 + 0.5) / n as f64) * 2.0 - 1.0).collect();
    v.shuffle(rng);
    Tensor::from_vec(shape, v)
}

fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
}

/// Worst relative error over the input gradient and every parameter
/// gradient of `layer` for the scalar objective `sum(r * layer(x))`.
pub fn check_layer(layer: &mut dyn Layer<f64>, input_shape: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = spread_input(input_shape, &mut rng);
    let y = layer.forward(&x);
    let r = Tensor::from_vec(&y.shape, (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect());
    layer.visit_params(&mut |p| p.zero_grad());
    let y = layer.forward(&x);
    assert_eq!(y.shape, r.shape);
    let dx = layer.backward(&r);

    let mut worst = 0.0f64;
    let objective = |layer: &mut dyn Layer<f64>, x: &Tensor<f64>| weighted_sum(&layer.forward(x), &r);

    let mut numeric = vec![0.0; x.len()];
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data[i] += STEP;
        let fp = objective(layer, &xp);
        xp.data[i] -= 2.0 * STEP;
        let fm = objective(layer, &xp);
        numeric[i] = (fp - fm) / (2.0 * STEP);
    }
    worst = worst.max(relative_error(&dx.data, &numeric));

    let mut analytic: Vec<Vec<f64>> = Vec::new();
    layer.visit_params(&mut |p| analytic.push(p.grad.clone()));
    for (k, grad) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; grad.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut f = [0.0; 2];
            for (j, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut idx = 0;
                layer.visit_params(&mut |p| {
                    if idx == k {
                        p.value[i] += sign * STEP;
                    }
                    idx += 1;
                });
                f[j] = objective(layer, &x);
                let mut idx = 0;
                layer.visit_params(&mut |p| {
                    if idx == k {
                        p.value[i] -= sign * STEP;
                    }
                    idx += 1;
                });
            }
            *slot = (f[0] - f[1]) / (2.0 * STEP);
        }
        worst = worst.max(relative_error(grad, &numeric));
    }
    worst
}

/// Relative error of the softmax cross-entropy logit gradient.
pub fn check_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = Tensor::from_vec(&[4, 10], (0..40).map(|_| rng.random_range(-2.0..2.0)).collect());
    let labels = [0, 3, 9, 3];
    let (_, grad) = softmax_cross_entropy(&logits, &labels);
    let numeric: Vec<f64> = (0..logits.len())
        .map(|i| {
            let mut l = logits.clone();
            l.data[i] += STEP;
            let fp = softmax_cross_entropy(&l, &labels).0;
            l.data[i] -= 2.0 * STEP;
            let fm = softmax_cross_entropy(&l, &labels).0;
            (fp - fm) / (2.0 * STEP)
        })
        .collect();
    relative_error(&grad.data, &numeric)
}

pub struct Case {
    pub name: &'static str,
    pub layer: Box<dyn Layer<f64>>,
    pub input_shape: Vec<usize>,
}

fn conv(name: &str, cin: usize, cout: usize, k: (usize, usize), s: usize, p: (usize, usize), bias: bool, rng: &mut ChaCha8Rng) -> Conv2d<f64> {
    Conv2d::new(name, cin, cout, k, (s, s), p, bias, rng)
}

/// Miniature instance of every layer primitive.
pub fn cases() -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let rng = &mut rng;
    let mut out = vec![
        Case {
            name: "conv 3x3 stride 1 pad 1",
            layer: Box::new(conv("c", 2, 3, (3, 3), 1, (1, 1), true, rng)),
            input_shape: vec![2, 2, 5, 5],
        },
        Case {
            name: "conv 5x5 stride 2 pad 2",
            layer: Box::new(conv("c", 2, 2, (5, 5), 2, (2, 2), true, rng)),
            input_shape: vec![2, 2, 7, 6],
        },
        Case {
            name: "conv 1x3 factorized",
            layer: Box::new(conv("c", 2, 2, (1, 3), 1, (0, 1), false, rng)),
            input_shape: vec![1, 2, 4, 5],
        },
        Case {
            name: "conv 1x1 pointwise",
            layer: Box::new(conv("c", 3, 2, (1, 1), 1, (0, 0), true, rng)),
            input_shape: vec![3, 3, 3, 3],
        },
        Case {
            name: "fully connected",
            layer: Box::new(Dense::new("fc", 6, 4, rng)),
            input_shape: vec![3, 6],
        },
        Case {
            name: "max pool 2x2",
            layer: Box::new(Pool2d::max("p", 2, 2)),
            input_shape: vec![2, 2, 4, 4],
        },
        Case {
            name: "max pool 3x3 stride 2",
            layer: Box::new(Pool2d::max("p", 3, 2)),
            input_shape: vec![1, 2, 7, 7],
        },
        Case {
            name: "avg pool 3x3 pad 1",
            layer: Box::new(Pool2d::new("p", PoolMode::Avg, (3, 3), (1, 1), (1, 1))),
            input_shape: vec![2, 1, 4, 4],
        },
        Case {
            name: "global avg pool",
            layer: Box::new(GlobalAvgPool::new("g")),
            input_shape: vec![2, 3, 3, 3],
        },
        Case {
            name: "relu",
            layer: Box::new(Relu::new("r")),
            input_shape: vec![2, 3, 2, 2],
        },
        Case {
            name: "batch norm",
            layer: Box::new(BatchNorm2d::new("bn", 3)),
            input_shape: vec![3, 3, 2, 2],
        },
        Case {
            name: "per-sample standardization",
            layer: Box::new(Standardize::new("s", 1e-3)),
            input_shape: vec![2, 2, 3, 3],
        },
        Case {
            name: "flatten",
            layer: Box::new(Flatten::new("f")),
            input_shape: vec![2, 2, 2, 2],
        },
    ];
    let body = Sequential::new("body")
        .with(conv("c1", 2, 2, (3, 3), 1, (1, 1), false, rng))
        .with(BatchNorm2d::new("bn", 2));
    out.push(Case {
        name: "residual add, identity shortcut",
        layer: Box::new(Residual::new("res", body, Shortcut::Identity)),
        input_shape: vec![2, 2, 4, 4],
    });
    let body = Sequential::new("body").with(conv("c1", 2, 4, (3, 3), 2, (1, 1), true, rng));
    out.push(Case {
        name: "residual add, subsampling shortcut",
        layer: Box::new(Residual::new("res", body, Shortcut::Subsample { stride: 2, out_channels: 4 })),
        input_shape: vec![2, 2, 5, 5],
    });
    let a = Sequential::new("a").with(conv("a", 2, 1, (1, 1), 1, (0, 0), true, rng));
    let b = Sequential::new("b").with(conv("b", 2, 2, (3, 1), 1, (1, 0), true, rng));
    let p = Sequential::new("p").with(Pool2d::new("p", PoolMode::Avg, (3, 3), (1, 1), (1, 1)));
    out.push(Case {
        name: "channel concatenation",
        layer: Box::new(Concat::new("cat", vec![a, b, p])),
        input_shape: vec![2, 2, 3, 3],
    });
    out
}
