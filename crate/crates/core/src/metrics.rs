//! Image quality metrics: PSNR, single-scale SSIM and the photometric
//! content loss.

use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical images.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if !(peak > 0.0) {
        return Err(Error::param("peak", "must be > 0"));
    }
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0; SSIM_WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable Gaussian filter keeping only fully-covered window positions.
fn filter_valid(data: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * data[y * w + x + k])
                .sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean single-scale SSIM over all valid 11×11 Gaussian windows (σ = 1.5,
/// K1 = 0.01, K2 = 0.03, data range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (w, h) = a.shape();
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            min: SSIM_WINDOW,
        });
    }
    let taps = gaussian_taps();
    let (xs, ys) = (a.as_slice(), b.as_slice());
    let products: [Vec<f64>; 5] = [
        xs.to_vec(),
        ys.to_vec(),
        xs.iter().map(|x| x * x).collect(),
        ys.iter().map(|y| y * y).collect(),
        xs.iter().zip(ys).map(|(x, y)| x * y).collect(),
    ];
    let filtered: Vec<Vec<f64>> = products
        .par_iter()
        .map(|p| filter_valid(p, w, h, &taps))
        .collect();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = filtered[0].len();
    let sum: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (filtered[0][i], filtered[1][i]);
            let vx = filtered[2][i] - mx * mx;
            let vy = filtered[3][i] - my * my;
            let cov = filtered[4][i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(sum / n as f64)
}

/// Mean over frames of the mean absolute pixel difference.
pub fn loss_content(recon: &[Image], truth: &[Image]) -> Result<f64> {
    if recon.len() != truth.len() {
        return Err(Error::LengthMismatch {
            what: "frame sequences",
            expected: truth.len(),
            found: recon.len(),
        });
    }
    if recon.is_empty() {
        return Err(Error::param("frames", "sequences must not be empty"));
    }
    let mut total = 0.0;
    for (r, t) in recon.iter().zip(truth) {
        total += r.mean_abs_diff(t)?;
    }
    Ok(total / recon.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub content_loss: f64,
}

/// Compares a reconstructed sequence frame-by-frame with ground truth.
pub fn evaluate(recon: &[Image], truth: &[Image], peak: f64) -> Result<EvalReport> {
    let content_loss = loss_content(recon, truth)?;
    let mut p = Vec::with_capacity(recon.len());
    let mut s = Vec::with_capacity(recon.len());
    for (r, t) in recon.iter().zip(truth) {
        p.push(psnr(r, t, peak)?);
        s.push(ssim(r, t)?);
    }
    let n = recon.len() as f64;
    Ok(EvalReport {
        mean_psnr: p.iter().sum::<f64>() / n,
        mean_ssim: s.iter().sum::<f64>() / n,
        psnr: p,
        ssim: s,
        content_loss,
    })
}

struct Db(f64);

impl fmt::Display for Db {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_infinite() && self.0 > 0.0 {
            f.write_str("inf")
        } else {
            write!(f, "{:.6}", self.0)
        }
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (p, s)) in self.psnr.iter().zip(&self.ssim).enumerate() {
            writeln!(f, "frame {} psnr {} ssim {:.6}", i + 1, Db(*p), s)?;
        }
        writeln!(f, "mean psnr {} ssim {:.6}", Db(self.mean_psnr), self.mean_ssim)?;
        write!(f, "content_loss {:.6}", self.content_loss)
    }
}
