mod common;

use common::rng;
use dyngs::metrics::{psnr, ssim, PSNR_CAP};
use proptest::prelude::*;
use rand::Rng;

/// Direct 2D convolution with an 11x11 window built from the 2D Gaussian,
/// local statistics per window position, then the SSIM map mean.
fn ssim_direct(a: &[f64], b: &[f64], w: usize, h: usize, channels: usize) -> f64 {
    let mut window = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in window.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut channel_means = Vec::new();
    for c in 0..channels {
        let at = |img: &[f64], x: usize, y: usize| img[(y * w + x) * channels + c];
        let mut sum = 0.0;
        let mut count = 0;
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let k = window[i][j] / total;
                        let (va, vb) = (at(a, x0 + j, y0 + i), at(b, x0 + j, y0 + i));
                        ma += k * va;
                        mb += k * vb;
                        saa += k * va * va;
                        sbb += k * vb * vb;
                        sab += k * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        channel_means.push(sum / count as f64);
    }
    channel_means.iter().sum::<f64>() / channels as f64
}

#[test]
fn ssim_matches_direct_convolution() {
    for seed in 0..10 {
        let mut r = rng(seed);
        for channels in [1, 3] {
            let n = 32 * 32 * channels;
            let a: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
            // Correlated second image so SSIM is far from zero.
            let b: Vec<f64> = a.iter().map(|&v| (0.7 * v + 0.3 * r.random_range(0.0..1.0)).clamp(0.0, 1.0)).collect();
            let fast = ssim(&a, &b, 32, 32, channels).unwrap();
            let slow = ssim_direct(&a, &b, 32, 32, channels);
            assert!((fast - slow).abs() < 1e-9, "seed {seed} channels {channels}: {fast} vs {slow}");
        }
    }
}

#[test]
fn psnr_examples() {
    let a = vec![0.25; 48];
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
}

proptest! {
    #[test]
    fn ssim_bounded_and_symmetric(values in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 16 * 16)) {
        let a: Vec<f64> = values.iter().map(|v| v.0).collect();
        let b: Vec<f64> = values.iter().map(|v| v.1).collect();
        let s = ssim(&a, &b, 16, 16, 1).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&b, &a, 16, 16, 1).unwrap()).abs() < 1e-12);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }
}
