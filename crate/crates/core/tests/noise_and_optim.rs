//! Noise norm statistics against analytic and Monte-Carlo oracles, and the
//! AdamW update against a hand-computed step.

use std::time::Instant;

use lincir_core::encoder::Param;
use lincir_core::optim::{AdamW, AdamWConfig};
use lincir_core::smp::{norm_stats, NoiseKind};
use lincir_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SAMPLES: usize = 100_000;

/// Mean of the chi distribution with `d` degrees of freedom.
fn chi_mean(d: f64) -> f64 {
    (2f64.ln() / 2.0 + libm::lgamma((d + 1.0) / 2.0) - libm::lgamma(d / 2.0)).exp()
}

#[test]
fn gaussian_norm_follows_chi_distribution() {
    let start = Instant::now();
    let s = norm_stats(NoiseKind::Gaussian, 768, SAMPLES, 0).unwrap();
    let mean = chi_mean(768.0);
    let std = (768.0 - mean * mean).sqrt();
    assert!((mean - 27.71).abs() < 0.01);
    assert!((s.mean - 27.71).abs() <= 0.1, "mean {}", s.mean);
    assert!((s.std - 0.707).abs() <= 0.05, "std {}", s.std);
    assert!((s.mean - mean).abs() < 0.01);
    assert!((s.std - std).abs() < 0.01);
    assert!(start.elapsed().as_secs() < 30);
}

/// ‖u·g‖ = u·‖g‖ with u independent of g, so the moments factor.
#[test]
fn scaled_gaussian_norm_matches_product_oracle() {
    let s = norm_stats(NoiseKind::ScaledGaussian, 768, SAMPLES, 1).unwrap();
    let (eu, eu2) = (0.5, 1.0 / 3.0);
    let eg = chi_mean(768.0);
    let mean = eu * eg;
    let std = (eu2 * 768.0 - mean * mean).sqrt();
    assert!((s.mean - 13.86).abs() <= 0.2, "mean {}", s.mean);
    assert!((s.std - 8.0).abs() <= 0.3, "std {}", s.std);
    assert!((s.mean - mean).abs() <= 0.2);
    assert!((s.std - std).abs() <= 0.3);
}

/// Independent Monte Carlo: draw u and g directly and multiply.
#[test]
fn scaled_gaussian_agrees_with_direct_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 20_000;
    let norms: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let g2: f64 = (0..256)
                .map(|_| StandardNormal.sample(&mut rng))
                .map(|x: f64| x * x)
                .sum();
            u * g2.sqrt()
        })
        .collect();
    let mean = norms.iter().sum::<f64>() / n as f64;
    let std = (norms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let s = norm_stats(NoiseKind::ScaledGaussian, 256, n, 5).unwrap();
    assert!((s.mean - mean).abs() < 0.15);
    assert!((s.std - std).abs() < 0.15);
}

#[test]
fn scaled_gaussian_norms_are_diverse() {
    for d in [256, 768] {
        let g = norm_stats(NoiseKind::Gaussian, d, SAMPLES, 2).unwrap();
        let s = norm_stats(NoiseKind::ScaledGaussian, d, SAMPLES, 2).unwrap();
        assert!(s.std >= 5.0 * g.std, "d={d}: {} vs {}", s.std, g.std);
    }
}

#[test]
fn elementwise_kinds_have_expected_second_moment() {
    // E‖n‖² = d·E[x²] for i.i.d. components
    let d = 64;
    let cases = [
        (NoiseKind::Gaussian, 1.0),
        (NoiseKind::Uniform, 1.0 / 3.0),
        (NoiseKind::StudentT { df: 5.0 }, 5.0 / 3.0),
        (NoiseKind::Exponential { rate: 1.0 }, 2.0),
        (NoiseKind::ChiSquared { k: 1.0 }, 3.0),
    ];
    for (kind, ex2) in cases {
        let s = norm_stats(kind, d, 40_000, 3).unwrap();
        let second = s.std * s.std + s.mean * s.mean;
        let expect = d as f64 * ex2;
        assert!((second - expect).abs() / expect < 0.03, "{kind}: {second} vs {expect}");
    }
}

#[test]
fn stats_are_reproducible() {
    let a = norm_stats(NoiseKind::ScaledGaussian, 128, 10_000, 4).unwrap();
    let b = norm_stats(NoiseKind::ScaledGaussian, 128, 10_000, 4).unwrap();
    assert_eq!(a, b);
}

fn adam(lr: f64, wd: f64, theta: &[f64]) -> (AdamW, Param) {
    let p = Param::new("theta", Tensor::vector(theta.to_vec()));
    let opt = AdamW::new(
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..Default::default()
        },
        &[&p],
    );
    (opt, p)
}

#[test]
fn adamw_hand_step() {
    let (mut opt, mut p) = adam(1e-4, 0.01, &[1.0]);
    opt.step(&mut [&mut p], &[&Tensor::vector(vec![1.0])]).unwrap();
    // m̂ = 1, v̂ = 1: θ ← 1 − 1e-4·1/(1 + 1e-8) − 1e-4·0.01·1
    let expect = 1.0 - 1e-4 / (1.0 + 1e-8) - 1e-6;
    assert!((p.value.item() - 0.999_899_0).abs() <= 1e-7);
    assert!((p.value.item() - expect).abs() <= 1e-15);
    assert_eq!(opt.steps_taken(), 1);
}

#[test]
fn adamw_zero_gradient_without_decay_is_identity() {
    let (mut opt, mut p) = adam(1e-3, 0.0, &[0.3, -2.0, 7.5]);
    for _ in 0..5 {
        opt.step(&mut [&mut p], &[&Tensor::zeros(&[3])]).unwrap();
    }
    assert_eq!(p.value.to_vec(), vec![0.3, -2.0, 7.5]);
}

#[test]
fn adamw_trajectories_are_bit_identical() {
    let run = || {
        let (mut opt, mut p) = adam(1e-2, 0.01, &[0.5, -0.25]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut trace = Vec::new();
        for _ in 0..50 {
            let g = Tensor::vector((0..2).map(|_| rng.random_range(-1.0..1.0)).collect());
            opt.step(&mut [&mut p], &[&g]).unwrap();
            trace.extend(p.value.data().iter().map(|v| v.to_bits()));
        }
        trace
    };
    assert_eq!(run(), run());
}

#[test]
fn adamw_rejects_shape_mismatch() {
    let (mut opt, mut p) = adam(1e-3, 0.0, &[1.0, 2.0]);
    assert!(opt.step(&mut [&mut p], &[&Tensor::zeros(&[3])]).is_err());
}
