//! Central finite-difference verification of the directional filter
//! gradients on randomized configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::def::{
    directional_filter_grad, FilterPlan, propagate_velocity, resample_velocity, DefParams,
    DEFAULT_BANDWIDTH, DEFAULT_STRIDE, DEFAULT_WINDOW,
};
use crate::error::Result;
use crate::event::StackedEventFrames;
use crate::image::Image;
use crate::warp::FlowField;

/// Maximum admissible relative error.
pub const TOLERANCE: f64 = 1e-3;
/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Relative errors are taken against `max(|analytic|, |numeric|, FLOOR)`.
pub const FLOOR: f64 = 1e-4;
/// Minimum distance of a moving sample coordinate from an integer for its
/// center gradient to be compared.
const MARGIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub configs: usize,
    pub size: usize,
    pub chunks: usize,
    pub k: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            configs: 100,
            size: 8,
            chunks: 8,
            k: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradcheckReport {
    pub configs: usize,
    /// Center gradients compared against finite differences.
    pub centers_checked: usize,
    pub max_rel_logits: f64,
    pub max_rel_alpha: f64,
    pub max_rel_center: f64,
    pub max_rel_volume: f64,
}

impl GradcheckReport {
    pub fn max_rel(&self) -> f64 {
        self.max_rel_logits
            .max(self.max_rel_alpha)
            .max(self.max_rel_center)
            .max(self.max_rel_volume)
    }

    pub fn passed(&self) -> bool {
        self.max_rel() < TOLERANCE
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// One randomized problem instance.
pub struct Problem {
    pub volume: StackedEventFrames,
    pub flow: FlowField,
    pub logits: Vec<f64>,
    pub center: Image,
    pub upstream: Image,
    pub k: usize,
}

pub const INTERVAL: (f64, f64) = (1.0, 2.0);

impl Problem {
    pub fn random(rng: &mut impl Rng, size: usize, chunks: usize, k: usize) -> Self {
        let plane = size * size;
        let volume = StackedEventFrames::from_data(
            size,
            size,
            chunks,
            vec![INTERVAL],
            (0..chunks * plane).map(|_| rng.gen_range(-3.0..3.0)).collect(),
        )
        .expect("sized to match");
        let flow = FlowField::new(
            Image::from_fn(size, size, |_, _| rng.gen_range(-1.2..1.2)),
            Image::from_fn(size, size, |_, _| rng.gen_range(-1.2..1.2)),
        )
        .expect("finite flow");
        let logits = (0..(2 * k + 1) * plane)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let center = Image::from_fn(size, size, |_, _| rng.gen_range(1.05..1.95));
        let upstream = Image::from_fn(size, size, |_, _| rng.gen_range(-1.0..1.0));
        Self {
            volume,
            flow,
            logits,
            center,
            upstream,
            k,
        }
    }

    pub fn params(&self) -> Result<DefParams> {
        self.params_with(self.center.clone(), &self.logits)
    }

    fn params_with(&self, center: Image, logits: &[f64]) -> Result<DefParams> {
        DefParams::from_logits(
            center,
            logits,
            self.k,
            DEFAULT_STRIDE,
            DEFAULT_BANDWIDTH,
            DEFAULT_WINDOW,
        )
    }

    /// `Σ_p upstream(p) · G(p)` over the precomputed stencils.
    fn objective(&self, plan: &FilterPlan, volume: &StackedEventFrames, params: &DefParams) -> Result<f64> {
        let g = plan.apply(volume, params)?;
        Ok(g.as_slice()
            .iter()
            .zip(self.upstream.as_slice())
            .map(|(a, b)| a * b)
            .sum())
    }

    /// The part of the objective contributed by pixel `px`, which is all
    /// that its weights and center influence.
    fn pixel_term(&self, plan: &FilterPlan, params: &DefParams, px: usize) -> f64 {
        self.upstream.as_slice()[px] * plan.pixel(&self.volume, params, px)
    }

    /// True when every sample coordinate of pixel `(x, y)` that moves with
    /// its center stays inside one trilinear cell under a perturbation of
    /// size [`STEP`], with at least [`MARGIN`] to spare.
    fn is_smooth_at(&self, params: &DefParams, x: usize, y: usize) -> bool {
        let chunk = (INTERVAL.1 - INTERVAL.0) / self.volume.chunks_per_interval() as f64;
        let c = self.center.at(x, y);
        let corners: Vec<(f64, [f64; 2])> = [-STEP, 0.0, STEP]
            .iter()
            .map(|dc| (c + dc, velocity_at(&self.flow, params, x, y, c + dc)))
            .collect();
        for j in -(self.k as isize)..=self.k as isize {
            let step = j as f64 * params.stride;
            let coords = |(cc, d): (f64, [f64; 2])| {
                [
                    x as f64 + step * d[0],
                    y as f64 + step * d[1],
                    (cc - INTERVAL.0) / chunk - 0.5 + step,
                ]
            };
            let base = coords(corners[1]);
            let moved = [coords(corners[0]), coords(corners[2])];
            for (axis, &b) in base.iter().enumerate() {
                // the j = 0 spatial sample sits on the pixel and never moves
                if j == 0 && axis < 2 {
                    continue;
                }
                if !(MARGIN..=1.0 - MARGIN).contains(&(b - b.floor())) {
                    return false;
                }
                if moved.iter().any(|m| m[axis].floor() != b.floor()) {
                    return false;
                }
            }
        }
        true
    }
}

fn velocity_at(flow: &FlowField, params: &DefParams, x: usize, y: usize, c: f64) -> [f64; 2] {
    let samples = propagate_velocity(flow, c, INTERVAL.0).expect("c after start");
    resample_velocity(&samples, [x as f64, y as f64], params.bandwidth, params.window)
        .expect("valid kernel")
}

/// Maximum relative errors of one problem, per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProblemErrors {
    pub logits: f64,
    pub alpha: f64,
    pub center: f64,
    pub volume: f64,
    /// Centers compared; pixels whose stencil sits near a kink are skipped.
    pub centers_checked: usize,
}

/// Compares the analytic gradients of one problem with central differences.
pub fn check_problem(p: &Problem) -> Result<ProblemErrors> {
    let params = p.params()?;
    let grads = directional_filter_grad(&p.volume, &p.flow, &params, INTERVAL, &p.upstream)?;
    let mut plan = FilterPlan::new(&p.volume, &p.flow, &params, INTERVAL)?;
    let plane = p.center.len();
    let taps = 2 * p.k + 1;
    let mut errs = ProblemErrors::default();
    let central = |hi: f64, lo: f64| (hi - lo) / (2.0 * STEP);

    for i in 0..taps * plane {
        let px = i % plane;
        let mut logits = p.logits.clone();
        logits[i] = p.logits[i] + STEP;
        let hi = p.pixel_term(&plan, &p.params_with(p.center.clone(), &logits)?, px);
        logits[i] = p.logits[i] - STEP;
        let lo = p.pixel_term(&plan, &p.params_with(p.center.clone(), &logits)?, px);
        errs.logits = errs.logits.max(relative_error(grads.logits[i], central(hi, lo)));
    }

    // the objective is linear in the weights, so they may leave the simplex
    for i in 0..taps * plane {
        let px = i % plane;
        let mut alpha = params.alpha().to_vec();
        alpha[i] += STEP;
        let hi = p.pixel_term(&plan, &params.with_raw_alpha(alpha.clone()), px);
        alpha[i] -= 2.0 * STEP;
        let lo = p.pixel_term(&plan, &params.with_raw_alpha(alpha), px);
        errs.alpha = errs.alpha.max(relative_error(grads.alpha[i], central(hi, lo)));
    }

    for px in 0..plane {
        let (x, y) = (px % p.center.width(), px / p.center.width());
        if !p.is_smooth_at(&params, x, y) {
            continue;
        }
        let mut center = p.center.clone();
        center.as_mut_slice()[px] += STEP;
        let shifted = p.params_with(center.clone(), &p.logits)?;
        plan.refresh(&p.volume, &p.flow, &shifted, INTERVAL, px)?;
        let hi = p.pixel_term(&plan, &shifted, px);
        center.as_mut_slice()[px] -= 2.0 * STEP;
        let shifted = p.params_with(center, &p.logits)?;
        plan.refresh(&p.volume, &p.flow, &shifted, INTERVAL, px)?;
        let lo = p.pixel_term(&plan, &shifted, px);
        plan.refresh(&p.volume, &p.flow, &params, INTERVAL, px)?;
        errs.center = errs
            .center
            .max(relative_error(grads.center.as_slice()[px], central(hi, lo)));
        errs.centers_checked += 1;
    }

    let mut vol = p.volume.clone();
    for i in 0..vol.as_slice().len() {
        let orig = vol.as_slice()[i];
        vol.as_mut_slice()[i] = orig + STEP;
        let hi = p.objective(&plan, &vol, &params)?;
        vol.as_mut_slice()[i] = orig - STEP;
        let lo = p.objective(&plan, &vol, &params)?;
        vol.as_mut_slice()[i] = orig;
        errs.volume = errs.volume.max(relative_error(grads.volume[i], central(hi, lo)));
    }
    Ok(errs)
}

/// Runs the finite-difference suite over `cfg.configs` random problems.
pub fn run(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let problems: Vec<Problem> = (0..cfg.configs)
        .map(|_| Problem::random(&mut rng, cfg.size, cfg.chunks, cfg.k))
        .collect();
    let errors: Vec<ProblemErrors> = problems
        .par_iter()
        .map(check_problem)
        .collect::<Result<_>>()?;
    let mut report = GradcheckReport::default();
    for e in errors {
        report.max_rel_logits = report.max_rel_logits.max(e.logits);
        report.max_rel_alpha = report.max_rel_alpha.max(e.alpha);
        report.max_rel_center = report.max_rel_center.max(e.center);
        report.max_rel_volume = report.max_rel_volume.max(e.volume);
        report.centers_checked += e.centers_checked;
        report.configs += 1;
    }
    Ok(report)
}
