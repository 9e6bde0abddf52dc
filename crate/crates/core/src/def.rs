//! Directional event filtering.
//!
//! For every pixel `p` a temporal center `c(p)` inside the interval
//! `[i, i+1]` and simplex weights `α_{-k..k}(p)` select where to read the
//! stacked event volume:
//!
//! ```text
//! G(p) = Σ_j α_j(p) · s(p + λ j d(p), c(p) + λ j Δ)
//! ```
//!
//! where `s` is trilinear sampling in (channel, row, column), `Δ` is one
//! chunk duration and `d(p)` is the local velocity at time `c(p)`. The
//! velocity is obtained by moving every grid pixel `p0` along its flow to
//! `n(p0) = p0 + (c(p) − i) f(p0)` and taking a Gaussian-weighted
//! (Nadaraya-Watson) average of the flows that land inside an `L×L` window
//! around `p`.
//!
//! [`directional_filter_grad`] returns exact derivatives of `Σ_p u(p) G(p)`
//! with respect to the weights (both the simplex values and their logits),
//! the centers (including the path through the velocity average) and the
//! volume entries.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::StackedEventFrames;
use crate::image::Image;
use crate::warp::FlowField;

pub const DEFAULT_SUPPORT: usize = 2;
pub const DEFAULT_STRIDE: f64 = 1.0;
pub const DEFAULT_BANDWIDTH: f64 = 1.0;
pub const DEFAULT_WINDOW: usize = 20;

/// Weight sums below this fall back to the nearest grid flow.
const MIN_WEIGHT_SUM: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-9;

/// Per-pixel filter controls plus the global filter shape.
#[derive(Debug, Clone, PartialEq)]
pub struct DefParams {
    /// Temporal center per pixel, in normalized time.
    pub center: Image,
    /// `2k+1` planes of simplex weights; plane `j + k` holds `α_j`.
    alpha: Vec<f64>,
    pub k: usize,
    /// Sampling stride λ.
    pub stride: f64,
    /// Gaussian bandwidth σ of the velocity resampling kernel, in pixels.
    pub bandwidth: f64,
    /// Side L of the resampling window, in pixels.
    pub window: usize,
}

impl DefParams {
    /// Builds parameters from explicit simplex weights.
    pub fn new(
        center: Image,
        alpha: Vec<f64>,
        k: usize,
        stride: f64,
        bandwidth: f64,
        window: usize,
    ) -> Result<Self> {
        let params = Self {
            center,
            alpha,
            k,
            stride,
            bandwidth,
            window,
        };
        params.validate()?;
        Ok(params)
    }

    /// Builds parameters from unconstrained logits through a per-pixel
    /// normalized exponential.
    pub fn from_logits(
        center: Image,
        logits: &[f64],
        k: usize,
        stride: f64,
        bandwidth: f64,
        window: usize,
    ) -> Result<Self> {
        let taps = 2 * k + 1;
        let plane = center.len();
        if logits.len() != taps * plane {
            return Err(Error::LengthMismatch {
                what: "alpha logits",
                expected: taps * plane,
                found: logits.len(),
            });
        }
        let mut alpha = vec![0.0; taps * plane];
        for px in 0..plane {
            let max = (0..taps)
                .map(|j| logits[j * plane + px])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..taps {
                let e = (logits[j * plane + px] - max).exp();
                alpha[j * plane + px] = e;
                sum += e;
            }
            for j in 0..taps {
                alpha[j * plane + px] /= sum;
            }
        }
        Self::new(center, alpha, k, stride, bandwidth, window)
    }

    /// Uniform weights and a constant center.
    pub fn uniform(width: usize, height: usize, center: f64) -> Self {
        let k = DEFAULT_SUPPORT;
        let taps = 2 * k + 1;
        Self {
            center: Image::filled(width, height, center),
            alpha: vec![1.0 / taps as f64; taps * width * height],
            k,
            stride: DEFAULT_STRIDE,
            bandwidth: DEFAULT_BANDWIDTH,
            window: DEFAULT_WINDOW,
        }
    }

    /// Weights taken verbatim, without the simplex check.
    pub(crate) fn with_raw_alpha(&self, alpha: Vec<f64>) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.check_structure()?;
        let plane = self.center.len();
        let taps = self.taps();
        for px in 0..plane {
            let mut sum = 0.0;
            for j in 0..taps {
                let a = self.alpha[j * plane + px];
                if !(a >= 0.0) {
                    return Err(Error::param("alpha", format!("negative weight {a}")));
                }
                sum += a;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::param(
                    "alpha",
                    format!("weights at pixel {px} sum to {sum}, not 1"),
                ));
            }
        }
        Ok(())
    }

    fn check_structure(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::param("k", "kernel support must be at least 1"));
        }
        if !(self.stride > 0.0 && self.stride.is_finite()) {
            return Err(Error::param("lambda", "stride must be > 0"));
        }
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::param("sigma", "bandwidth must be > 0"));
        }
        if self.window == 0 {
            return Err(Error::param("L", "window must be at least 1"));
        }
        if !self.center.as_slice().iter().all(|c| c.is_finite()) {
            return Err(Error::param("c", "centers must be finite"));
        }
        let plane = self.center.len();
        let taps = self.taps();
        if self.alpha.len() != taps * plane {
            return Err(Error::LengthMismatch {
                what: "alpha planes",
                expected: taps * plane,
                found: self.alpha.len(),
            });
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        2 * self.k + 1
    }

    pub fn width(&self) -> usize {
        self.center.width()
    }

    pub fn height(&self) -> usize {
        self.center.height()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Weight `α_j` at pixel index `px`, for `j` in `-k..=k`.
    #[inline]
    pub fn alpha_at(&self, j: isize, px: usize) -> f64 {
        self.alpha[(j + self.k as isize) as usize * self.center.len() + px]
    }
}

/// Grid pixels carried along their flow to a common time plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterSamples {
    pub positions: Vec<[f64; 2]>,
    pub velocities: Vec<[f64; 2]>,
    /// Dimensions of the grid the samples were propagated from, if any.
    grid: Option<(usize, usize)>,
}

impl ScatterSamples {
    pub fn new(positions: Vec<[f64; 2]>, velocities: Vec<[f64; 2]>) -> Result<Self> {
        if positions.len() != velocities.len() {
            return Err(Error::LengthMismatch {
                what: "sample velocities",
                expected: positions.len(),
                found: velocities.len(),
            });
        }
        if !positions.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::param("positions", "must be finite"));
        }
        Ok(Self {
            positions,
            velocities,
            grid: None,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Velocity of the sample that started at the grid pixel nearest to
    /// `target`, or of the nearest sample when there is no grid.
    fn fallback(&self, target: [f64; 2]) -> [f64; 2] {
        if let Some((w, h)) = self.grid {
            let x = target[0].round().clamp(0.0, (w - 1) as f64) as usize;
            let y = target[1].round().clamp(0.0, (h - 1) as f64) as usize;
            return self.velocities[y * w + x];
        }
        self.positions
            .iter()
            .zip(&self.velocities)
            .min_by(|(a, _), (b, _)| {
                let da = (a[0] - target[0]).powi(2) + (a[1] - target[1]).powi(2);
                let db = (b[0] - target[0]).powi(2) + (b[1] - target[1]).powi(2);
                da.total_cmp(&db)
            })
            .map(|(_, v)| *v)
            .unwrap_or([0.0, 0.0])
    }
}

/// Moves every grid pixel `p0` to `p0 + (c − i) f(p0)`, keeping its velocity.
pub fn propagate_velocity(flow: &FlowField, c: f64, i: f64) -> Result<ScatterSamples> {
    if !(c >= i) {
        return Err(Error::param("c", format!("time {c} precedes interval start {i}")));
    }
    let (w, h) = flow.shape();
    let shift = c - i;
    let mut positions = Vec::with_capacity(w * h);
    let mut velocities = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let f = flow.at(x, y);
            positions.push([x as f64 + shift * f[0], y as f64 + shift * f[1]]);
            velocities.push(f);
        }
    }
    Ok(ScatterSamples {
        positions,
        velocities,
        grid: Some((w, h)),
    })
}

#[inline]
fn in_window(offset: [f64; 2], half: f64) -> bool {
    offset[0].abs() <= half && offset[1].abs() <= half
}

#[inline]
fn kernel(offset: [f64; 2], sigma: f64) -> f64 {
    (-(offset[0] * offset[0] + offset[1] * offset[1]) / (2.0 * sigma * sigma)).exp()
}

/// Gaussian-weighted mean of the velocities whose positions fall inside the
/// `window`×`window` box centered at `target`.
pub fn resample_velocity(
    samples: &ScatterSamples,
    target: [f64; 2],
    sigma: f64,
    window: usize,
) -> Result<[f64; 2]> {
    if window == 0 {
        return Err(Error::param("L", "window must be at least 1"));
    }
    if !(sigma > 0.0) {
        return Err(Error::param("sigma", "bandwidth must be > 0"));
    }
    let half = window as f64 / 2.0;
    let (mut sw, mut su, mut sv) = (0.0, 0.0, 0.0);
    for (n, d) in samples.positions.iter().zip(&samples.velocities) {
        let off = [n[0] - target[0], n[1] - target[1]];
        if !in_window(off, half) {
            continue;
        }
        let wgt = kernel(off, sigma);
        sw += wgt;
        su += wgt * d[0];
        sv += wgt * d[1];
    }
    if sw < MIN_WEIGHT_SUM {
        return Ok(samples.fallback(target));
    }
    Ok([su / sw, sv / sw])
}

/// Resampled velocity at grid pixel `(x, y)` after propagating by `shift`
/// and its derivative with respect to `shift`.
fn local_velocity(
    flow: &FlowField,
    reach: f64,
    x: usize,
    y: usize,
    shift: f64,
    sigma: f64,
    window: usize,
) -> ([f64; 2], [f64; 2]) {
    let (w, h) = flow.shape();
    let half = window as f64 / 2.0;
    let radius = (half + shift.abs() * reach).ceil() as isize;
    let x0 = (x as isize - radius).max(0) as usize;
    let x1 = (x as isize + radius).min(w as isize - 1) as usize;
    let y0 = (y as isize - radius).max(0) as usize;
    let y1 = (y as isize + radius).min(h as isize - 1) as usize;
    let inv_var = 1.0 / (sigma * sigma);

    let mut sw = 0.0;
    let mut sd = [0.0; 2];
    for qy in y0..=y1 {
        for qx in x0..=x1 {
            let f = flow.at(qx, qy);
            let off = [
                qx as f64 + shift * f[0] - x as f64,
                qy as f64 + shift * f[1] - y as f64,
            ];
            if !in_window(off, half) {
                continue;
            }
            let wgt = kernel(off, sigma);
            sw += wgt;
            sd[0] += wgt * f[0];
            sd[1] += wgt * f[1];
        }
    }
    if sw < MIN_WEIGHT_SUM {
        return (flow.at(x, y), [0.0, 0.0]);
    }
    let d = [sd[0] / sw, sd[1] / sw];

    // d' = Σ w'_m (f_m − d) / Σ w_m with w'_m = −w_m (n_m − p)·f_m / σ²
    let mut dd = [0.0; 2];
    for qy in y0..=y1 {
        for qx in x0..=x1 {
            let f = flow.at(qx, qy);
            let off = [
                qx as f64 + shift * f[0] - x as f64,
                qy as f64 + shift * f[1] - y as f64,
            ];
            if !in_window(off, half) {
                continue;
            }
            let dw = -kernel(off, sigma) * (off[0] * f[0] + off[1] * f[1]) * inv_var;
            dd[0] += dw * (f[0] - d[0]);
            dd[1] += dw * (f[1] - d[1]);
        }
    }
    (d, [dd[0] / sw, dd[1] / sw])
}

/// Trilinear sample with its partial derivatives and the eight taps that
/// contributed (flat volume index, weight); out-of-volume taps are dropped.
struct TriSample {
    value: f64,
    /// d/dx, d/dy, d/dchannel
    grad: [f64; 3],
    taps: [(usize, f64); 8],
    n_taps: usize,
}

fn trilinear(volume: &StackedEventFrames, x: f64, y: f64, ch: f64) -> TriSample {
    let (w, h, c) = (
        volume.width() as isize,
        volume.height() as isize,
        volume.channels() as isize,
    );
    let data = volume.as_slice();
    let mut out = TriSample {
        value: 0.0,
        grad: [0.0; 3],
        taps: [(0, 0.0); 8],
        n_taps: 0,
    };
    if !(x.is_finite() && y.is_finite() && ch.is_finite()) {
        return out;
    }
    let (fx0, fy0, fc0) = (x.floor(), y.floor(), ch.floor());
    let (tx, ty, tc) = (x - fx0, y - fy0, ch - fc0);
    let (x0, y0, c0) = (fx0 as isize, fy0 as isize, fc0 as isize);
    for dc in 0..2 {
        let cc = c0 + dc;
        if cc < 0 || cc >= c {
            continue;
        }
        let (wc, gc) = if dc == 0 { (1.0 - tc, -1.0) } else { (tc, 1.0) };
        for dy in 0..2 {
            let yy = y0 + dy;
            if yy < 0 || yy >= h {
                continue;
            }
            let (wy, gy) = if dy == 0 { (1.0 - ty, -1.0) } else { (ty, 1.0) };
            for dx in 0..2 {
                let xx = x0 + dx;
                if xx < 0 || xx >= w {
                    continue;
                }
                let (wx, gx) = if dx == 0 { (1.0 - tx, -1.0) } else { (tx, 1.0) };
                let idx = ((cc * h + yy) * w + xx) as usize;
                let v = data[idx];
                let wgt = wc * wy * wx;
                out.value += wgt * v;
                out.grad[0] += gx * wy * wc * v;
                out.grad[1] += wx * gy * wc * v;
                out.grad[2] += wx * wy * gc * v;
                out.taps[out.n_taps] = (idx, wgt);
                out.n_taps += 1;
            }
        }
    }
    out
}

/// Trilinear interpolation of the volume at column `x`, row `y` and
/// continuous channel `channel`, reading zero outside the volume.
pub fn trilinear_sample(volume: &StackedEventFrames, x: f64, y: f64, channel: f64) -> f64 {
    trilinear(volume, x, y, channel).value
}

struct Setup {
    base_channel: f64,
    chunk: f64,
    reach: f64,
}

fn setup(
    volume: &StackedEventFrames,
    flow: &FlowField,
    params: &DefParams,
    interval: (f64, f64),
) -> Result<Setup> {
    params.check_structure()?;
    let shape = (volume.width(), volume.height());
    for found in [flow.shape(), params.center.shape()] {
        if found != shape {
            return Err(Error::ShapeMismatch {
                expected: shape,
                found,
            });
        }
    }
    let (a, b) = interval;
    if !(a < b) {
        return Err(Error::EmptyInterval { a, b });
    }
    let (first, chunk) = volume.interval_channels(a, b)?;
    Ok(Setup {
        base_channel: first as f64,
        chunk,
        reach: flow.max_abs(),
    })
}

/// Where pixel `(x, y)` reads the volume, and how those reads move with `c`.
struct Stencil {
    /// Per tap `j = -k..=k`: sample point (x, y, channel).
    points: Vec<[f64; 3]>,
    /// Per tap: derivative of the sample point with respect to the center.
    slopes: Vec<[f64; 3]>,
    /// Whether the center lies strictly inside the interval (not clamped).
    free: bool,
}

fn stencil(
    flow: &FlowField,
    params: &DefParams,
    interval: (f64, f64),
    s: &Setup,
    x: usize,
    y: usize,
) -> Stencil {
    let (a, b) = interval;
    let raw = params.center.at(x, y);
    let c = raw.clamp(a, b);
    let free = raw > a && raw < b;
    let shift = c - a;
    let (d, dd) = local_velocity(flow, s.reach, x, y, shift, params.bandwidth, params.window);
    let ch0 = s.base_channel + shift / s.chunk - 0.5;
    let k = params.k as isize;
    let mut points = Vec::with_capacity(params.taps());
    let mut slopes = Vec::with_capacity(params.taps());
    for j in -k..=k {
        let step = params.stride * j as f64;
        points.push([x as f64 + step * d[0], y as f64 + step * d[1], ch0 + step]);
        slopes.push([step * dd[0], step * dd[1], 1.0 / s.chunk]);
    }
    Stencil {
        points,
        slopes,
        free,
    }
}

/// Sampling stencils of every pixel. They depend on the flow and the
/// centers but not on the volume or the weights.
pub(crate) struct FilterPlan {
    stencils: Vec<Stencil>,
}

impl FilterPlan {
    pub(crate) fn new(
        volume: &StackedEventFrames,
        flow: &FlowField,
        params: &DefParams,
        interval: (f64, f64),
    ) -> Result<Self> {
        let s = setup(volume, flow, params, interval)?;
        let w = volume.width();
        let stencils = (0..w * volume.height())
            .into_par_iter()
            .map(|px| stencil(flow, params, interval, &s, px % w, px / w))
            .collect();
        Ok(Self { stencils })
    }

    /// Rebuilds the stencil of one pixel, e.g. after its center changed.
    pub(crate) fn refresh(
        &mut self,
        volume: &StackedEventFrames,
        flow: &FlowField,
        params: &DefParams,
        interval: (f64, f64),
        px: usize,
    ) -> Result<()> {
        let s = setup(volume, flow, params, interval)?;
        let w = volume.width();
        self.stencils[px] = stencil(flow, params, interval, &s, px % w, px / w);
        Ok(())
    }

    pub(crate) fn pixel(&self, volume: &StackedEventFrames, params: &DefParams, px: usize) -> f64 {
        let k = params.k as isize;
        (-k..=k)
            .zip(&self.stencils[px].points)
            .map(|(j, p)| params.alpha_at(j, px) * trilinear_sample(volume, p[0], p[1], p[2]))
            .sum()
    }

    pub(crate) fn apply(&self, volume: &StackedEventFrames, params: &DefParams) -> Result<Image> {
        let out = (0..self.stencils.len())
            .into_par_iter()
            .map(|px| self.pixel(volume, params, px))
            .collect();
        Image::new(volume.width(), volume.height(), out)
    }
}

/// Boundary guidance map for the interval `[a, b)`.
pub fn directional_filter(
    volume: &StackedEventFrames,
    flow: &FlowField,
    params: &DefParams,
    interval: (f64, f64),
) -> Result<Image> {
    FilterPlan::new(volume, flow, params, interval)?.apply(volume, params)
}

/// Gradients of `Σ_p upstream(p) · G(p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DefGradients {
    /// With respect to the simplex weights, laid out like [`DefParams::alpha`].
    pub alpha: Vec<f64>,
    /// With respect to the logits the weights are normalized from.
    pub logits: Vec<f64>,
    /// With respect to the per-pixel temporal centers.
    pub center: Image,
    /// With respect to the volume entries, laid out like the volume.
    pub volume: Vec<f64>,
}

struct PixelGrad {
    alpha: Vec<f64>,
    center: f64,
    scatter: Vec<(usize, f64)>,
}

pub fn directional_filter_grad(
    volume: &StackedEventFrames,
    flow: &FlowField,
    params: &DefParams,
    interval: (f64, f64),
    upstream: &Image,
) -> Result<DefGradients> {
    let s = setup(volume, flow, params, interval)?;
    let (w, h) = (volume.width(), volume.height());
    if upstream.shape() != (w, h) {
        return Err(Error::ShapeMismatch {
            expected: (w, h),
            found: upstream.shape(),
        });
    }
    let k = params.k as isize;
    let taps = params.taps();
    let plane = w * h;

    let per_pixel: Vec<PixelGrad> = (0..plane)
        .into_par_iter()
        .map(|px| {
            let (x, y) = (px % w, px / w);
            let up = upstream.at(x, y);
            let st = stencil(flow, params, interval, &s, x, y);
            let mut alpha = Vec::with_capacity(taps);
            let mut dc = 0.0;
            let mut scatter = Vec::with_capacity(taps * 8);
            for ((j, p), slope) in (-k..=k).zip(&st.points).zip(&st.slopes) {
                let a = params.alpha_at(j, px);
                let tri = trilinear(volume, p[0], p[1], p[2]);
                alpha.push(up * tri.value);
                dc += a
                    * (tri.grad[0] * slope[0] + tri.grad[1] * slope[1] + tri.grad[2] * slope[2]);
                scatter.extend(
                    tri.taps[..tri.n_taps]
                        .iter()
                        .map(|&(idx, wgt)| (idx, up * a * wgt)),
                );
            }
            PixelGrad {
                alpha,
                center: if st.free { up * dc } else { 0.0 },
                scatter,
            }
        })
        .collect();

    let mut d_alpha = vec![0.0; taps * plane];
    let mut d_logits = vec![0.0; taps * plane];
    let mut d_center = vec![0.0; plane];
    let mut d_volume = vec![0.0; volume.as_slice().len()];
    for (px, g) in per_pixel.iter().enumerate() {
        let mean: f64 = (0..taps)
            .map(|j| params.alpha[j * plane + px] * g.alpha[j])
            .sum();
        for j in 0..taps {
            d_alpha[j * plane + px] = g.alpha[j];
            d_logits[j * plane + px] = params.alpha[j * plane + px] * (g.alpha[j] - mean);
        }
        d_center[px] = g.center;
        for &(idx, v) in &g.scatter {
            d_volume[idx] += v;
        }
    }
    Ok(DefGradients {
        alpha: d_alpha,
        logits: d_logits,
        center: Image::new(w, h, d_center)?,
        volume: d_volume,
    })
}
