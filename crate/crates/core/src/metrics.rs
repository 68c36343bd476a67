//! PSNR and SSIM for images with values in `[0, 1]`.

use serde::Serialize;

use crate::error::{contract, Result};

/// PSNR reported when the mean squared error is below `1e-10`.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return contract(format!("cannot compare images of {} and {} values", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m < 1e-10 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut k: [f64; SSIM_WINDOW] = std::array::from_fn(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-region separable filtering of one `h x w` plane.
fn filter(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, over the valid region, averaged over
/// interleaved channels.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != width * height * channels {
        return contract(format!("SSIM inputs of {} and {} values do not match {width}x{height}x{channels}", a.len(), b.len()));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return contract(format!("{width}x{height} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"));
    }
    let k = ssim_kernel();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for c in 0..channels {
        let pa: Vec<f64> = a.iter().skip(c).step_by(channels).copied().collect();
        let pb: Vec<f64> = b.iter().skip(c).step_by(channels).copied().collect();
        let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
        let mu_a = filter(&pa, width, height, &k);
        let mu_b = filter(&pb, width, height, &k);
        let aa = filter(&prod(&pa, &pa), width, height, &k);
        let bb = filter(&prod(&pb, &pb), width, height, &k);
        let ab = filter(&prod(&pa, &pb), width, height, &k);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / channels as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub timestamp: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-frame metrics, each averaged over cameras.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.frames.iter().map(|f| f.ssim).sum::<f64>() / self.frames.len().max(1) as f64
    }

    /// Mean PSNR over the listed frame indices.
    pub fn mean_psnr_of(&self, frames: &[usize]) -> f64 {
        let sel: Vec<f64> = self.frames.iter().filter(|f| frames.contains(&f.frame)).map(|f| f.psnr).collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}
