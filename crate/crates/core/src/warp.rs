//! Bilinear backward warping and the flow-related loss terms.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

/// Weight of the adversarial term in the joint training objective. The
/// adversarial term itself is not implemented; the constant is kept so the
/// remaining terms can be combined with the published weighting.
pub const ADVERSARIAL_WEIGHT: f64 = 0.01;
/// Weight of the flow total-variation term.
pub const TV_WEIGHT: f64 = 0.05;

/// Per-pixel forward flow `(u, v)` from frame `i` to frame `i + 1`, in
/// pixels per frame step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Image,
    pub v: Image,
}

impl FlowField {
    pub fn new(u: Image, v: Image) -> Result<Self> {
        u.ensure_same_shape(&v)?;
        if !u.as_slice().iter().chain(v.as_slice()).all(|x| x.is_finite()) {
            return Err(Error::param("flow", "entries must be finite"));
        }
        Ok(Self { u, v })
    }

    pub fn constant(width: usize, height: usize, u: f64, v: f64) -> Self {
        Self {
            u: Image::filled(width, height, u),
            v: Image::filled(width, height, v),
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.u.shape()
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        [self.u.at(x, y), self.v.at(x, y)]
    }

    /// Largest absolute flow component over the field.
    pub fn max_abs(&self) -> f64 {
        self.u
            .as_slice()
            .iter()
            .chain(self.v.as_slice())
            .fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, factor: f64) -> FlowField {
        FlowField {
            u: self.u.map(|x| x * factor),
            v: self.v.map(|x| x * factor),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Border {
    /// Out-of-range taps read the nearest edge pixel.
    #[default]
    Clamp,
    /// Out-of-range taps read zero.
    Zero,
}

#[inline]
fn tap(img: &Image, x: isize, y: isize, border: Border) -> f64 {
    let (w, h) = (img.width() as isize, img.height() as isize);
    match border {
        Border::Clamp => img.at(x.clamp(0, w - 1) as usize, y.clamp(0, h - 1) as usize),
        Border::Zero => {
            if x < 0 || y < 0 || x >= w || y >= h {
                0.0
            } else {
                img.at(x as usize, y as usize)
            }
        }
    }
}

/// Bilinear interpolation of `img` at column `sx`, row `sy`.
pub fn bilinear_sample(img: &Image, sx: f64, sy: f64, border: Border) -> f64 {
    if img.is_empty() || !(sx.is_finite() && sy.is_finite()) {
        return 0.0;
    }
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let top = (1.0 - fx) * tap(img, x0, y0, border) + fx * tap(img, x0 + 1, y0, border);
    let bottom =
        (1.0 - fx) * tap(img, x0, y0 + 1, border) + fx * tap(img, x0 + 1, y0 + 1, border);
    (1.0 - fy) * top + fy * bottom
}

/// `out(p) = img(p + flow(p))`: predicts frame `i` from frame `i + 1` using
/// the forward flow `i -> i + 1`.
pub fn backward_warp(img: &Image, flow: &FlowField) -> Result<Image> {
    backward_warp_with(img, flow, Border::Clamp)
}

pub fn backward_warp_with(img: &Image, flow: &FlowField, border: Border) -> Result<Image> {
    img.ensure_same_shape(&flow.u)?;
    let w = img.width();
    let data: Vec<f64> = (0..img.len())
        .into_par_iter()
        .map(|idx| {
            let (x, y) = (idx % w, idx / w);
            let [u, v] = flow.at(x, y);
            bilinear_sample(img, x as f64 + u, y as f64 + v, border)
        })
        .collect();
    Image::new(w, img.height(), data)
}

/// Photometric reconstruction loss of warping each reconstructed frame
/// `i + 1` back to time `i` and comparing with ground truth frame `i`.
pub fn loss_flow(recon: &[Image], flows: &[FlowField], truth: &[Image]) -> Result<f64> {
    if recon.len() < 2 {
        return Err(Error::param("frames", "need at least 2 frames"));
    }
    if truth.len() != recon.len() {
        return Err(Error::LengthMismatch {
            what: "ground-truth frames",
            expected: recon.len(),
            found: truth.len(),
        });
    }
    if flows.len() != recon.len() - 1 {
        return Err(Error::LengthMismatch {
            what: "flow fields",
            expected: recon.len() - 1,
            found: flows.len(),
        });
    }
    let mut total = 0.0;
    for (i, flow) in flows.iter().enumerate() {
        let warped = backward_warp(&recon[i + 1], flow)?;
        total += warped.mean_abs_diff(&truth[i])?;
    }
    Ok(total / flows.len() as f64)
}

/// Anisotropic total variation of one scalar grid; differences across the
/// last row/column count as zero.
fn tv_sum(img: &Image) -> f64 {
    let (w, h) = img.shape();
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            let c = img.at(x, y);
            if x + 1 < w {
                sum += (img.at(x + 1, y) - c).abs();
            }
            if y + 1 < h {
                sum += (img.at(x, y + 1) - c).abs();
            }
        }
    }
    sum
}

/// Mean over flows of the per-pixel mean ℓ1 norm of forward-difference
/// gradients of `u` and `v`.
pub fn loss_tv(flows: &[FlowField]) -> Result<f64> {
    if flows.is_empty() {
        return Err(Error::param("flows", "need at least one flow field"));
    }
    let total: f64 = flows
        .iter()
        .map(|f| (tv_sum(&f.u) + tv_sum(&f.v)) / f.u.len() as f64)
        .sum();
    Ok(total / flows.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| (x * 3 + y * 7) as f64 / 10.0)
    }

    #[test]
    fn sample_integer_midpoint_and_border() {
        let img = ramp(5, 4);
        assert_eq!(bilinear_sample(&img, 2.0, 3.0, Border::Clamp), img.at(2, 3));
        let pair = Image::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert_eq!(bilinear_sample(&pair, 0.5, 0.0, Border::Zero), 0.5);
        assert_eq!(bilinear_sample(&img, -5.0, -5.0, Border::Zero), 0.0);
        assert_eq!(bilinear_sample(&img, -5.0, -5.0, Border::Clamp), img.at(0, 0));
    }

    #[test]
    fn zero_flow_is_identity() {
        let img = ramp(7, 6);
        let out = backward_warp(&img, &FlowField::zeros(7, 6)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn constant_flow_undoes_translation() {
        let base = |x: f64, y: f64| (0.3 * x).sin() + 0.1 * y * y;
        let original = Image::from_fn(12, 9, |x, y| base(x as f64, y as f64));
        // shifted(p) = original(p - (1, 0))
        let shifted = Image::from_fn(12, 9, |x, y| base(x as f64 - 1.0, y as f64));
        let out = backward_warp(&shifted, &FlowField::constant(12, 9, 1.0, 0.0)).unwrap();
        for y in 0..9 {
            for x in 0..11 {
                assert!((out.at(x, y) - original.at(x, y)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn size_mismatch_is_an_error() {
        assert!(backward_warp(&ramp(4, 4), &FlowField::zeros(4, 5)).is_err());
    }

    #[test]
    fn loss_flow_hand_case() {
        let f0 = Image::new(2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let f1 = Image::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let truth0 = Image::new(2, 2, vec![0.1, 0.0, 0.5, 0.4]).unwrap();
        // zero flow: |0.1-0.1| + |0.2-0| + |0.3-0.5| + |0.4-0.4| = 0.4, mean 0.1
        let l = loss_flow(
            &[f0.clone(), f1.clone()],
            &[FlowField::zeros(2, 2)],
            &[truth0, f1.clone()],
        )
        .unwrap();
        assert!((l - 0.1).abs() < 1e-15);

        let same = loss_flow(&[f1.clone(), f1.clone()], &[FlowField::zeros(2, 2)], &[f1.clone(), f1.clone()])
            .unwrap();
        assert_eq!(same, 0.0);
        assert!(loss_flow(&[f0.clone(), f1.clone()], &[], &[f0, f1]).is_err());
    }

    #[test]
    fn tv_constant_step_and_homogeneity() {
        assert_eq!(loss_tv(&[FlowField::constant(5, 4, 2.0, -1.0)]).unwrap(), 0.0);
        let (w, h) = (6, 4);
        let u = Image::from_fn(w, h, |x, _| if x >= 3 { 1.0 } else { 0.0 });
        let f = FlowField::new(u, Image::zeros(w, h)).unwrap();
        assert!((loss_tv(std::slice::from_ref(&f)).unwrap() - h as f64 / (w * h) as f64).abs() < 1e-15);
        let a = loss_tv(std::slice::from_ref(&f)).unwrap();
        let b = loss_tv(&[f.scaled(2.0)]).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-15);
        assert!(loss_tv(&[]).is_err());
    }
}
