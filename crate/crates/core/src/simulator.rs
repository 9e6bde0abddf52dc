//! Threshold-crossing event simulation and synthetic blur/fixture generation.

use std::f64::consts::TAU as FULL_TURN;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::event::{Event, EventStream, Polarity};
use crate::image::Image;
use crate::warp::FlowField;

/// Relative slack applied to the threshold test so that log changes which
/// are an exact multiple of the threshold are not lost to rounding.
const CROSSING_SLACK: f64 = 1e-9;

/// An ordered, uniformly sized run of frames sampled at times `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Image>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::param("frames", "sequence must not be empty"))?;
        for f in &frames[1..] {
            first.ensure_same_shape(f)?;
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Image> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    /// Contrast threshold in log-intensity units.
    pub tau: f64,
    /// Intensity floor applied before taking logs.
    pub eps: f64,
    /// Linear segments per frame gap.
    pub substeps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            eps: 1e-3,
            substeps: 16,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param("tau", format!("must be > 0, got {}", self.tau)));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::param("eps", format!("must be > 0, got {}", self.eps)));
        }
        if self.substeps == 0 {
            return Err(Error::param("substeps", "must be at least 1"));
        }
        Ok(())
    }
}

/// `ln(max(value, eps))` entrywise.
pub fn log_intensity(img: &Image, eps: f64) -> Image {
    img.map(|v| v.max(eps).ln())
}

/// Emits the events of a single pixel whose log intensity at times `1..=T`
/// is `levels`.
fn pixel_events(x: u32, y: u32, levels: &[f64], cfg: &SimConfig) -> Vec<Event> {
    let tau = cfg.tau;
    let trigger = tau * (1.0 - CROSSING_SLACK);
    let steps = cfg.substeps as f64;
    let mut reference = levels[0];
    let mut out = Vec::new();
    for (k, pair) in levels.windows(2).enumerate() {
        let (l0, l1) = (pair[0], pair[1]);
        if l0 == l1 && (l1 - reference).abs() < trigger {
            continue;
        }
        let t0 = (k + 1) as f64;
        for m in 0..cfg.substeps {
            let (sa, sb) = (m as f64 / steps, (m + 1) as f64 / steps);
            let (ta, tb) = (t0 + sa, t0 + sb);
            let la = l0 + sa * (l1 - l0);
            let lb = l0 + sb * (l1 - l0);
            let crossing = |level: f64| {
                let frac = if lb == la {
                    0.0
                } else {
                    ((level - la) / (lb - la)).clamp(0.0, 1.0)
                };
                ta + frac * (tb - ta)
            };
            while lb - reference >= trigger {
                reference += tau;
                out.push(Event::new(x, y, crossing(reference), Polarity::Positive));
            }
            while reference - lb >= trigger {
                reference -= tau;
                out.push(Event::new(x, y, crossing(reference), Polarity::Negative));
            }
        }
    }
    out
}

/// Simulates an event camera watching `seq`, with frame `k` shown at time `k`.
pub fn generate_events(seq: &FrameSequence, cfg: &SimConfig) -> Result<EventStream> {
    cfg.validate()?;
    let frames = seq.frames();
    if frames.len() < 2 {
        return Err(Error::param("frames", "need at least 2 frames"));
    }
    let (w, h) = frames[0].shape();
    let logs: Vec<Image> = frames.iter().map(|f| log_intensity(f, cfg.eps)).collect();
    let events: Vec<Event> = (0..w * h)
        .into_par_iter()
        .flat_map_iter(|idx| {
            let (x, y) = (idx % w, idx / w);
            let levels: Vec<f64> = logs.iter().map(|l| l.at(x, y)).collect();
            pixel_events(x as u32, y as u32, &levels, cfg)
        })
        .collect();
    EventStream::from_unsorted(w, h, 1.0, frames.len() as f64, events)
}

/// Blurred exposure modeled as the entrywise mean of the sharp frames.
pub fn synthesize_blur(seq: &FrameSequence) -> Image {
    Image::mean_of(seq.frames()).expect("sequence is nonempty and uniform")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    TranslatingBars,
    RotatingDot,
    Ramp,
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translating_bars" => Ok(Pattern::TranslatingBars),
            "rotating_dot" => Ok(Pattern::RotatingDot),
            "ramp" => Ok(Pattern::Ramp),
            other => Err(Error::UnknownPattern(other.to_string())),
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::TranslatingBars => "translating_bars",
            Pattern::RotatingDot => "rotating_dot",
            Pattern::Ramp => "ramp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSpec {
    pub pattern: Pattern,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Pixels per frame step. For `rotating_dot` only its magnitude is used,
    /// as the tangential speed of the dot.
    pub velocity: [f64; 2],
    /// Orbit radius of `rotating_dot`; defaults to a quarter of the smaller side.
    pub radius: Option<f64>,
    pub seed: u64,
}

impl FixtureSpec {
    pub fn new(pattern: Pattern, size: usize, frames: usize, velocity: [f64; 2]) -> Self {
        Self {
            pattern,
            width: size,
            height: size,
            frames,
            velocity,
            radius: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub frames: FrameSequence,
    pub blur: Image,
    pub events: EventStream,
    /// Forward flow `i -> i+1` for `i = 1..T-1`.
    pub flows: Vec<FlowField>,
}

const BACKGROUND: f64 = 0.2;
const FOREGROUND_TARGET: f64 = 0.8;
const BAR_PERIOD: f64 = 16.0;
const BAR_WIDTH: f64 = 8.0;
const DOT_RADIUS: f64 = 3.0;

/// Foreground level whose log contrast against the background is a whole
/// number of thresholds, so that every edge transition is event-exact.
fn foreground_level(tau: f64) -> f64 {
    let steps = ((FOREGROUND_TARGET / BACKGROUND).ln() / tau).floor().max(1.0);
    BACKGROUND * (steps * tau).exp()
}

/// Renders a synthetic scene, its blur, simulated events and exact flows.
pub fn make_fixture(spec: &FixtureSpec, cfg: &SimConfig) -> Result<Fixture> {
    cfg.validate()?;
    if spec.width < 16 || spec.height < 16 {
        return Err(Error::ImageTooSmall {
            width: spec.width,
            height: spec.height,
            min: 16,
        });
    }
    if spec.frames < 2 {
        return Err(Error::param("frames", "need at least 2 frames"));
    }
    if !spec.velocity.iter().all(|v| v.is_finite()) {
        return Err(Error::param("velocity", "must be finite"));
    }
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hi = foreground_level(cfg.tau);
    let [vx, vy] = spec.velocity;

    let (frames, flows): (Vec<Image>, Vec<FlowField>) = match spec.pattern {
        Pattern::TranslatingBars => {
            let phase = rng.gen_range(0..BAR_PERIOD as u32) as f64;
            let frames = (0..spec.frames)
                .map(|k| {
                    let shift = vx * k as f64;
                    Image::from_fn(w, h, |x, _| {
                        let u = (x as f64 - shift + phase).rem_euclid(BAR_PERIOD);
                        if u < BAR_WIDTH {
                            hi
                        } else {
                            BACKGROUND
                        }
                    })
                })
                .collect();
            let flows = vec![FlowField::constant(w, h, vx, vy); spec.frames - 1];
            (frames, flows)
        }
        Pattern::Ramp => {
            // log-linear ramp from BACKGROUND to FOREGROUND_TARGET across the
            // width, clamped outside, translating with the velocity
            let gain = (FOREGROUND_TARGET / BACKGROUND).ln() / (w - 1) as f64;
            let frames = (0..spec.frames)
                .map(|k| {
                    let shift = vx * k as f64;
                    Image::from_fn(w, h, |x, _| {
                        let u = (x as f64 - shift).clamp(0.0, (w - 1) as f64);
                        BACKGROUND * (gain * u).exp()
                    })
                })
                .collect();
            let flows = vec![FlowField::constant(w, h, vx, vy); spec.frames - 1];
            (frames, flows)
        }
        Pattern::RotatingDot => {
            let radius = spec.radius.unwrap_or(w.min(h) as f64 / 4.0);
            if !(radius >= 0.0 && radius.is_finite()) {
                return Err(Error::param("radius", "must be finite and >= 0"));
            }
            let speed = vx.hypot(vy);
            let omega = if radius > 0.0 { speed / radius } else { 0.0 };
            let start = rng.gen_range(0.0..FULL_TURN);
            let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
            let frames = (0..spec.frames)
                .map(|k| {
                    let angle = start + omega * k as f64;
                    let (dx, dy) = (cx + radius * angle.cos(), cy + radius * angle.sin());
                    Image::from_fn(w, h, |x, y| {
                        let r = (x as f64 - dx).hypot(y as f64 - dy);
                        if r <= DOT_RADIUS {
                            hi
                        } else {
                            BACKGROUND
                        }
                    })
                })
                .collect();
            let (s, c) = omega.sin_cos();
            let u = Image::from_fn(w, h, |x, y| {
                let (px, py) = (x as f64 - cx, y as f64 - cy);
                c * px - s * py - px
            });
            let v = Image::from_fn(w, h, |x, y| {
                let (px, py) = (x as f64 - cx, y as f64 - cy);
                s * px + c * py - py
            });
            let flow = FlowField::new(u, v)?;
            (frames, vec![flow; spec.frames - 1])
        }
    };

    let frames = FrameSequence::new(frames)?;
    let blur = synthesize_blur(&frames);
    let events = generate_events(&frames, cfg)?;
    Ok(Fixture {
        frames,
        blur,
        events,
        flows,
    })
}
