//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::Rng;
use smcyclegan::autograd::Tensor;
use smcyclegan::image::{Image, Mask, ValueRange};
use smcyclegan::networks::{DiscriminatorArch, DiscriminatorHead, GeneratorArch};

/// Generator small enough for exhaustive finite differences.
pub fn tiny_generator() -> GeneratorArch {
    GeneratorArch { in_channels: 3, out_channels: 3, base_channels: 2, n_res_blocks: 1, n_downsampling: 2 }
}

pub fn tiny_discriminator(head: DiscriminatorHead) -> DiscriminatorArch {
    DiscriminatorArch { in_channels: 3, base_channels: 4, n_layers: 1, head }
}

/// Multiply the tensors in `range` by `factor`. Applied to the weights that
/// feed an instance norm this leaves the network's mapping unchanged while
/// moving its parameters to unit scale, so a fixed finite-difference step
/// is a small relative perturbation.
pub fn rescale(params: &[Tensor], range: std::ops::Range<usize>, factor: f64) -> Vec<Tensor> {
    params.iter().enumerate().map(|(i, p)| if range.contains(&i) { p.map(|v| v * factor) } else { p.clone() }).collect()
}

pub fn random_image(size: usize, rng: &mut impl Rng) -> Image {
    let data = (0..3 * size * size).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Image::new(size, size, 3, data, ValueRange::Symmetric).unwrap()
}

pub fn random_mask(size: usize, rng: &mut impl Rng) -> Mask {
    Mask::new(size, size, (0..size * size).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

/// Central difference of `f` at 0 with step `h`, or `None` when the four
/// one-sided slopes on `[-2h, 2h]` show a kink (a ReLU or `abs` switching
/// branch), where no finite difference reflects the derivative.
pub fn smooth_central_difference(mut f: impl FnMut(f64) -> f64, h: f64) -> Option<f64> {
    let v: Vec<f64> = (-2..=2).map(|k| f(k as f64 * h)).collect();
    let slopes: Vec<f64> = v.windows(2).map(|w| (w[1] - w[0]) / h).collect();
    let bends: Vec<f64> = slopes.windows(2).map(|w| w[1] - w[0]).collect();
    let (lo, hi) = bends.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &b| (lo.min(b), hi.max(b)));
    let scale = bends.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    (hi - lo <= 1e-9 + 0.05 * scale).then(|| (v[3] - v[1]) / (2.0 * h))
}

/// Outcome of [`gradient_error`].
pub struct GradCheck {
    /// Norm-wise relative error over every probe.
    pub error: f64,
    /// Probes redrawn because they straddled a kink.
    pub kinks: usize,
}

/// Compare analytic gradients with central differences of `loss` over
/// `per_tensor` random coordinates of each tensor plus one random
/// direction through all parameters. Probes that straddle a kink are
/// redrawn.
pub fn gradient_error(
    params: &[Tensor],
    analytic: &[Tensor],
    loss: impl Fn(&[Tensor]) -> f64,
    h: f64,
    per_tensor: usize,
    rng: &mut impl Rng,
) -> GradCheck {
    const REDRAWS: usize = 50;
    let (mut diff_sq, mut a_sq, mut n_sq, mut kinks) = (0.0, 0.0, 0.0, 0);
    let mut add = |a: f64, numeric: f64| {
        diff_sq += (a - numeric) * (a - numeric);
        a_sq += a * a;
        n_sq += numeric * numeric;
    };
    let mut work = params.to_vec();
    for (t, grad) in analytic.iter().enumerate() {
        let numel = params[t].numel();
        for _ in 0..per_tensor.min(numel) {
            for attempt in 0.. {
                assert!(attempt < REDRAWS, "no kink-free coordinate found in tensor {t}");
                let i = rng.random_range(0..numel);
                let orig = params[t].data()[i];
                let numeric = smooth_central_difference(
                    |d| {
                        work[t].data_mut()[i] = orig + d;
                        let v = loss(&work);
                        work[t].data_mut()[i] = orig;
                        v
                    },
                    h,
                );
                match numeric {
                    Some(n) => {
                        add(grad.data()[i], n);
                        break;
                    }
                    None => kinks += 1,
                }
            }
        }
    }
    for attempt in 0.. {
        assert!(attempt < REDRAWS, "no kink-free direction found");
        let direction: Vec<Tensor> = params
            .iter()
            .map(|p| {
                // Relative to each tensor's own scale; zero-initialized biases get 1e-2.
                let rms = (p.data().iter().map(|v| v * v).sum::<f64>() / p.numel() as f64).sqrt().max(1e-2);
                Tensor::new(p.shape().to_vec(), (0..p.numel()).map(|_| rms * rng.random_range(-1.0..1.0)).collect())
            })
            .collect();
        let along = |d: f64| -> f64 {
            let shifted: Vec<Tensor> = params
                .iter()
                .zip(&direction)
                .map(|(p, u)| Tensor::new(p.shape().to_vec(), p.data().iter().zip(u.data()).map(|(a, b)| a + d * b).collect()))
                .collect();
            loss(&shifted)
        };
        if let Some(numeric) = smooth_central_difference(along, h) {
            let a = analytic
                .iter()
                .zip(&direction)
                .map(|(g, u)| g.data().iter().zip(u.data()).map(|(x, y)| x * y).sum::<f64>())
                .sum();
            add(a, numeric);
            break;
        }
        kinks += 1;
    }
    GradCheck { error: diff_sq.sqrt() / a_sq.sqrt().max(n_sq.sqrt()).max(1e-12), kinks }
}

/// Mean unit-range colour of the pixels where `mask >= 0.5`.
pub fn subject_mean(images: &[Image], masks: &[Mask]) -> [f64; 3] {
    let mut sum = [0.0; 3];
    let mut n = 0.0;
    for (img, m) in images.iter().zip(masks) {
        let u = img.to_range(ValueRange::Unit);
        for h in 0..u.height() {
            for w in 0..u.width() {
                if m.get(h, w) >= 0.5 {
                    for (c, s) in sum.iter_mut().enumerate() {
                        *s += u.get(h, w, c);
                    }
                    n += 1.0;
                }
            }
        }
    }
    sum.map(|s| s / n)
}

pub fn colour_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}
