//! Physical sequential deblurring.
//!
//! Latent frames `I_1..I_T` inside an exposure are linked by the events that
//! fire between them: with `S_i` the per-pixel polarity sum over `[i, i+1)`
//! and `τ` the contrast threshold,
//!
//! ```text
//! I_{i+1} = I_i ⊙ exp(τ S_i)        (forward step)
//! I_i     = I_{i+1} ⊙ exp(−τ S_i)   (backward step)
//! ```
//!
//! If the blurred image is the mean of the latent frames, the latest frame
//! follows in closed form as `I_T = T·blur ⊘ (1 + Σ_{t=2..T} Π_{i=1..t−1} B_{T−i})`
//! with `B_j = exp(−τ S_j)`. The sequential driver solves `I_T` first and then
//! walks backwards, giving a [`LatestDenoiser`]/[`StepDenoiser`] the chance to
//! refine every estimate.
//!
//! Nothing here clamps intermediate values; the mean of the unrefined
//! reconstruction reproduces the blur exactly and clamping would break that.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, PolarityIntegralMap};
use crate::image::Image;
use crate::simulator::FrameSequence;

/// Smallest admissible blur-model denominator.
const MIN_DENOMINATOR: f64 = 1e-12;

/// Entrywise `exp(−τ S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayMap(pub Image);

impl DecayMap {
    pub fn values(&self) -> &Image {
        &self.0
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::param("tau", format!("must be > 0, got {tau}")))
    }
}

fn check_frames(frames: usize) -> Result<()> {
    if frames >= 2 {
        Ok(())
    } else {
        Err(Error::param("frames", format!("need at least 2, got {frames}")))
    }
}

pub fn decay_map(s: &PolarityIntegralMap, tau: f64) -> Result<DecayMap> {
    check_tau(tau)?;
    Ok(DecayMap(s.values().map(|v| (-tau * v).exp())))
}

/// Estimate of the earlier frame from the later one: `next ⊙ exp(−τ S)`.
pub fn backward_step(next: &Image, s: &PolarityIntegralMap, tau: f64) -> Result<Image> {
    check_tau(tau)?;
    next.zip_map(s.values(), |i, s| i * (-tau * s).exp())
}

/// Estimate of the later frame from the earlier one: `prev ⊙ exp(τ S)`.
pub fn forward_step(prev: &Image, s: &PolarityIntegralMap, tau: f64) -> Result<Image> {
    check_tau(tau)?;
    prev.zip_map(s.values(), |i, s| i * (tau * s).exp())
}

fn check_inputs(blur: &Image, stream: &EventStream, frames: usize) -> Result<()> {
    check_frames(frames)?;
    if blur.shape() != (stream.width(), stream.height()) {
        return Err(Error::ShapeMismatch {
            expected: blur.shape(),
            found: (stream.width(), stream.height()),
        });
    }
    Ok(())
}

/// Closed-form estimate of the latest frame `I_T` from the blurred image and
/// the events, assuming the exposure is normalized to `[1, T]`.
pub fn solve_latest(blur: &Image, stream: &EventStream, tau: f64, frames: usize) -> Result<Image> {
    check_tau(tau)?;
    check_inputs(blur, stream, frames)?;
    let decays: Vec<DecayMap> = stream
        .unit_integrals(frames)?
        .iter()
        .map(|s| decay_map(s, tau))
        .collect::<Result<_>>()?;
    let w = blur.width();
    let t = frames as f64;
    let out: Vec<Result<f64>> = (0..blur.len())
        .into_par_iter()
        .map(|idx| {
            let (x, y) = (idx % w, idx / w);
            // t ascending; the running product extends one interval further
            // back in time at each step.
            let mut product = 1.0;
            let mut denom = 1.0;
            for j in (0..frames - 1).rev() {
                product *= decays[j].0.at(x, y);
                denom += product;
            }
            if denom <= MIN_DENOMINATOR || !denom.is_finite() {
                return Err(Error::DegenerateDenominator { x, y, value: denom });
            }
            Ok(blur.at(x, y) / (denom / t))
        })
        .collect();
    Image::new(w, blur.height(), out.into_iter().collect::<Result<_>>()?)
}

/// Inputs available when refining the latest-frame estimate.
pub struct LatestContext<'a> {
    pub estimate: &'a Image,
    pub blur: &'a Image,
    pub events: &'a EventStream,
}

/// Inputs available when refining the estimate of frame `index`.
pub struct StepContext<'a> {
    /// 1-based frame index being reconstructed.
    pub index: usize,
    pub estimate: &'a Image,
    /// The already refined frame `index + 1`.
    pub next: &'a Image,
    /// Events in `[index, index + 1)`.
    pub interval_events: &'a [Event],
    pub blur: &'a Image,
    pub events: &'a EventStream,
}

/// Refines the initial latest-frame estimate.
pub trait LatestDenoiser {
    fn denoise(&self, ctx: &LatestContext<'_>) -> Result<Image>;
}

/// Refines the per-step backward estimate.
pub trait StepDenoiser {
    fn denoise(&self, ctx: &StepContext<'_>) -> Result<Image>;
}

/// Returns every estimate unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl LatestDenoiser for Identity {
    fn denoise(&self, ctx: &LatestContext<'_>) -> Result<Image> {
        Ok(ctx.estimate.clone())
    }
}

impl StepDenoiser for Identity {
    fn denoise(&self, ctx: &StepContext<'_>) -> Result<Image> {
        Ok(ctx.estimate.clone())
    }
}

fn ensure_hook_shape(estimate: &Image, out: Image) -> Result<Image> {
    estimate.ensure_same_shape(&out)?;
    Ok(out)
}

/// Reconstructs `T` sharp frames from a blurred image and the events of its
/// exposure, latest frame first, returning them in forward order.
pub fn sequential_deblur(
    blur: &Image,
    stream: &EventStream,
    tau: f64,
    frames: usize,
    latest_hook: &dyn LatestDenoiser,
    step_hook: &dyn StepDenoiser,
) -> Result<FrameSequence> {
    let estimate = solve_latest(blur, stream, tau, frames)?;
    let latest = latest_hook.denoise(&LatestContext {
        estimate: &estimate,
        blur,
        events: stream,
    })?;
    let latest = ensure_hook_shape(&estimate, latest)?;

    let mut out = Vec::with_capacity(frames);
    out.push(latest);
    for i in (1..frames).rev() {
        let (a, b) = (i as f64, (i + 1) as f64);
        let s = stream.polarity_integral(a, b)?;
        let next = out.last().expect("latest frame pushed");
        let estimate = backward_step(next, &s, tau)?;
        let refined = step_hook.denoise(&StepContext {
            index: i,
            estimate: &estimate,
            next,
            interval_events: stream.window(a, b),
            blur,
            events: stream,
        })?;
        let refined = ensure_hook_shape(&estimate, refined)?;
        out.push(refined);
    }
    out.reverse();
    FrameSequence::new(out)
}

/// Scores of one threshold candidate in [`estimate_tau`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauScore {
    pub tau: f64,
    /// Mean absolute difference between the mean of the nonnegative-clamped
    /// reconstruction and the blurred input.
    pub reblur_residual: f64,
    /// Mean over frames of the normalized gradient sparsity `‖∇I‖₁ / ‖∇I‖₂`
    /// of the clamped reconstruction. Ghost edges left by a wrong threshold
    /// raise it, while it is blind to global contrast.
    pub gradient_sparsity: f64,
}

impl TauScore {
    fn objective(&self) -> f64 {
        self.reblur_residual + self.gradient_sparsity
    }
}

/// `‖∇I‖₁ / ‖∇I‖₂` over forward differences; zero for flat images.
pub fn gradient_sparsity(img: &Image) -> f64 {
    let (w, h) = img.shape();
    let (mut l1, mut l2) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let c = img.at(x, y);
            if x + 1 < w {
                let d = img.at(x + 1, y) - c;
                l1 += d.abs();
                l2 += d * d;
            }
            if y + 1 < h {
                let d = img.at(x, y + 1) - c;
                l1 += d.abs();
                l2 += d * d;
            }
        }
    }
    if l2 == 0.0 {
        0.0
    } else {
        l1 / l2.sqrt()
    }
}

/// Scores a single threshold candidate.
pub fn score_tau(blur: &Image, stream: &EventStream, frames: usize, tau: f64) -> Result<TauScore> {
    let seq = sequential_deblur(blur, stream, tau, frames, &Identity, &Identity)?;
    let clamped: Vec<Image> = seq.frames().iter().map(|f| f.map(|v| v.max(0.0))).collect();
    let mean = Image::mean_of(&clamped)?;
    let reblur_residual = mean.mean_abs_diff(blur)?;
    let gradient_sparsity =
        clamped.iter().map(gradient_sparsity).sum::<f64>() / clamped.len() as f64;
    Ok(TauScore {
        tau,
        reblur_residual,
        gradient_sparsity,
    })
}

/// Picks the threshold from `grid` whose reconstruction best explains the
/// blur with the sparsest gradients; ties go to the smaller threshold.
pub fn estimate_tau(blur: &Image, stream: &EventStream, frames: usize, grid: &[f64]) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    for &tau in grid {
        check_tau(tau)?;
    }
    let scores: Vec<TauScore> = grid
        .iter()
        .map(|&tau| score_tau(blur, stream, frames, tau))
        .collect::<Result<_>>()?;
    let best = scores
        .iter()
        .min_by(|a, b| {
            a.objective()
                .total_cmp(&b.objective())
                .then(a.tau.total_cmp(&b.tau))
        })
        .expect("grid is nonempty");
    Ok(best.tau)
}
