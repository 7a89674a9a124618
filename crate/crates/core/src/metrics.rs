//! Image quality metrics for images in `[0, 1]`.

use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// `f64::INFINITY` for identical images.
    pub psnr: f64,
    pub ssim: f64,
    pub mean_l1: f64,
}

fn check(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("images {:?} and {:?} differ in shape", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn psnr(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check(pred, gt)?;
    let mse = pred.zip_map(gt, |a, b| (a - b) * (a - b))?.mean();
    Ok(if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() })
}

pub fn mean_l1(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check(pred, gt)?;
    Ok(pred.zip_map(gt, |a, b| (a - b).abs())?.mean())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over every pixel, channel and batch item. The Gaussian window
/// is truncated at the image border and renormalised over the in-bounds
/// taps.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check(a, b)?;
    let s = a.shape();
    let (h, w) = (s.h(), s.w());
    let g = gaussian_window();
    let r = SSIM_WINDOW / 2;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for (pa, pb) in a.data().chunks(h * w).zip(b.data().chunks(h * w)) {
        for y in 0..h {
            for x in 0..w {
                let (mut ws, mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    let yy = y as isize + ky as isize - r as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kx in 0..SSIM_WINDOW {
                        let xx = x as isize + kx as isize - r as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let wt = g[ky] * g[kx];
                        let i = yy as usize * w + xx as usize;
                        let (va, vb) = (pa[i], pb[i]);
                        ws += wt;
                        ma += wt * va;
                        mb += wt * vb;
                        aa += wt * va * va;
                        bb += wt * vb * vb;
                        ab += wt * va * vb;
                    }
                }
                let (ma, mb) = (ma / ws, mb / ws);
                let va = aa / ws - ma * ma;
                let vb = bb / ws - mb * mb;
                let cov = ab / ws - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / a.numel() as f64)
}

pub fn metrics(pred: &Tensor, gt: &Tensor) -> Result<Metrics> {
    Ok(Metrics {
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        mean_l1: mean_l1(pred, gt)?,
    })
}
