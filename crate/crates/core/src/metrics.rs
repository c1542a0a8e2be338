//! PSNR, windowed SSIM and their masked variants.
//!
//! Images are compared on unit dynamic range. PSNR is capped at
//! [`PSNR_CAP_DB`] so identical inputs give a finite value. SSIM uses an
//! 11x11 Gaussian window (sigma 1.5) over valid positions only, with
//! `C1 = 0.01^2`, `C2 = 0.03^2`, averaged over channels.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_shape, Error, Result};
use crate::image::{Image, Mask};

pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

pub fn psnr(x: &Image, y: &Image) -> Result<f64> {
    ensure_same_shape("psnr", x.shape(), y.shape())?;
    let n = x.data().len() as f64;
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Channel-averaged SSIM at every valid window position, row-major over
/// `(h - 10) x (w - 10)` top-left corners.
pub fn ssim_map(x: &Image, y: &Image) -> Result<(usize, usize, Vec<f64>)> {
    ensure_same_shape("ssim", x.shape(), y.shape())?;
    let (h, w, c) = x.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Domain(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut out = vec![0.0; oh * ow];
    let mut planes: [Vec<f64>; 5] = Default::default();
    for ch in 0..c {
        for p in planes.iter_mut() {
            p.clear();
            p.resize(h * w, 0.0);
        }
        for i in 0..h * w {
            let a = x.data()[i * c + ch] as f64;
            let b = y.data()[i * c + ch] as f64;
            planes[0][i] = a;
            planes[1][i] = b;
            planes[2][i] = a * a;
            planes[3][i] = b * b;
            planes[4][i] = a * b;
        }
        let filtered: Vec<Vec<f64>> = planes.iter().map(|p| filter_valid(p, h, w, &g)).collect();
        for i in 0..oh * ow {
            let (mx, my) = (filtered[0][i], filtered[1][i]);
            let vx = filtered[2][i] - mx * mx;
            let vy = filtered[3][i] - my * my;
            let cxy = filtered[4][i] - mx * my;
            let s = ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
            out[i] += s / c as f64;
        }
    }
    Ok((oh, ow, out))
}

/// Separable Gaussian filter, keeping only fully covered positions.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * p[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    let (_, _, map) = ssim_map(x, y)?;
    Ok(pairwise_mean(&map))
}

/// Metric restricted to the masked region.
///
/// PSNR uses only masked pixels. SSIM weights each window by the fraction of
/// its pixels inside the mask.
pub fn masked_metric(x: &Image, y: &Image, mask: &Mask, which: Metric) -> Result<f64> {
    ensure_same_shape("masked metric", x.shape(), y.shape())?;
    if (mask.height(), mask.width()) != (x.height(), x.width()) {
        return Err(Error::Dimension("mask does not match image size".into()));
    }
    if mask.is_empty() {
        return Err(Error::Domain("no reflection region: mask is empty".into()));
    }
    match which {
        Metric::Psnr => {
            let c = x.channels();
            let mut sse = 0.0;
            let mut n = 0usize;
            for (p, &on) in mask.bits().iter().enumerate() {
                if on {
                    for ch in 0..c {
                        sse += ((x.data()[p * c + ch] - y.data()[p * c + ch]) as f64).powi(2);
                    }
                    n += c;
                }
            }
            Ok(psnr_from_mse(sse / n as f64))
        }
        Metric::Ssim => {
            let (oh, ow, map) = ssim_map(x, y)?;
            let weights = window_coverage(mask, oh, ow);
            let wsum: f64 = weights.iter().sum();
            if wsum <= 0.0 {
                return Err(Error::Domain("no reflection region: no window touches the mask".into()));
            }
            Ok(map.iter().zip(&weights).map(|(s, w)| s * w).sum::<f64>() / wsum)
        }
    }
}

/// Fraction of each window's pixels that are inside the mask.
fn window_coverage(mask: &Mask, oh: usize, ow: usize) -> Vec<f64> {
    let w = mask.width();
    // Summed-area table for O(1) window counts.
    let mut sat = vec![0u32; (mask.height() + 1) * (w + 1)];
    for y in 0..mask.height() {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                mask.get(y, x) as u32 + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let k = SSIM_WINDOW;
    let area = (k * k) as f64;
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let s = sat[(y + k) * (w + 1) + x + k] + sat[y * (w + 1) + x] - sat[y * (w + 1) + x + k] - sat[(y + k) * (w + 1) + x];
            out.push(s as f64 / area);
        }
    }
    out
}

/// Mean by pairwise summation, independent of evaluation order within blocks.
pub fn pairwise_mean(values: &[f64]) -> f64 {
    fn sum(v: &[f64]) -> f64 {
        if v.len() <= 8 {
            v.iter().sum()
        } else {
            let mid = v.len() / 2;
            sum(&v[..mid]) + sum(&v[mid..])
        }
    }
    if values.is_empty() {
        f64::NAN
    } else {
        sum(values) / values.len() as f64
    }
}
