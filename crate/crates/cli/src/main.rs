use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use evdeblur::def::{
    directional_filter, DefParams, DEFAULT_BANDWIDTH, DEFAULT_STRIDE, DEFAULT_SUPPORT,
    DEFAULT_WINDOW,
};
use evdeblur::event::DEFAULT_CHUNKS;
use evdeblur::gradcheck::{self, GradcheckConfig, TOLERANCE};
use evdeblur::io;
use evdeblur::metrics::evaluate;
use evdeblur::recon::{estimate_tau, sequential_deblur, Identity};
use evdeblur::simulator::{make_fixture, FixtureSpec, Pattern, SimConfig};
use evdeblur::{EventStream, Image};

const FORMATS: &str = "\
File formats (all binary formats little-endian):
  EVT1  text: `EVT1 <width> <height> <t_begin> <t_end> <count>` then `<t> <x> <y> <p>` per event, p in {-1, 1}
  IMF1  `IMF1`, u32 width, u32 height, row-major f32 intensities
  PGM   P5 or P2 grayscale, scaled to [0, 1] by maxval (read only except via .pgm output names)
  FLO1  `FLO1`, u32 width, u32 height, row-major interleaved f32 (u, v)
  DEF1  text: `DEF1 <w> <h> <k> <lambda> <sigma> <L>`, h rows of centers, then 2k+1 planes of weights";

#[derive(Parser)]
#[command(name = "evdeblur", version, about = "Event-assisted motion deblurring toolkit", after_help = FORMATS)]
struct Cli {
    /// Worker threads (defaults to the number of hardware threads).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene with its blur, events and flows.
    Simulate(SimulateArgs),
    /// Recover the sharp frames behind a blurred image from its events.
    Deblur(DeblurArgs),
    /// Compute the boundary guidance map of one time interval.
    Guidance(GuidanceArgs),
    /// Verify the guidance gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare reconstructed frames with ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// translating_bars, rotating_dot or ramp.
    pattern: Pattern,
    /// Side length in pixels.
    size: usize,
    /// Number of sharp frames T.
    #[arg(value_parser = clap::value_parser!(u64).range(2..))]
    frames: u64,
    /// Motion in pixels per frame as `vx,vy`.
    #[arg(value_parser = parse_pair, allow_hyphen_values = true)]
    velocity: [f64; 2],
    /// Contrast threshold.
    tau: f64,
    out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    substeps: usize,
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Orbit radius for rotating_dot.
    #[arg(long)]
    radius: Option<f64>,
}

#[derive(Args)]
struct DeblurArgs {
    /// Blurred image (IMF1 or PGM).
    blur: PathBuf,
    /// EVT1 events covering the exposure.
    events: PathBuf,
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0.1, conflicts_with = "estimate_tau")]
    tau: f64,
    /// Number of latent frames T; inferred from an EVT1 exposure of [1, T] when omitted.
    #[arg(long)]
    frames: Option<usize>,
    /// Comma-separated threshold candidates to choose from instead of --tau.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    estimate_tau: Option<Vec<f64>>,
}

#[derive(Args)]
struct GuidanceArgs {
    events: PathBuf,
    /// FLO1 flow over the interval.
    flow: PathBuf,
    /// Output IMF1 path.
    out: PathBuf,
    /// Interval as `a,b`.
    #[arg(long, value_parser = parse_pair, default_value = "1,2")]
    interval: [f64; 2],
    /// DEF1 parameters; replaces --k, --lambda, --sigma, --window and --center.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CHUNKS)]
    chunks: usize,
    #[arg(long, default_value_t = DEFAULT_SUPPORT)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_STRIDE)]
    lambda: f64,
    #[arg(long, default_value_t = DEFAULT_BANDWIDTH)]
    sigma: f64,
    /// Velocity resampling window L.
    #[arg(long, visible_alias = "L", default_value_t = DEFAULT_WINDOW)]
    window: usize,
    /// Temporal center for every pixel; defaults to the interval midpoint.
    #[arg(long)]
    center: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of reconstructed `frame_*` images.
    recon_dir: PathBuf,
    /// Directory of ground-truth `frame_*` images.
    truth_dir: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// Fail when the mean PSNR falls below this value.
    #[arg(long)]
    min_psnr: Option<f64>,
}

fn parse_pair(s: &str) -> std::result::Result<[f64; 2], String> {
    match parse_list(s)?.as_slice() {
        [a, b] => Ok([*a, *b]),
        _ => Err(format!("expected two comma-separated numbers, got `{s}`")),
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("invalid number `{t}`")))
        .collect()
}

fn frame_name(i: usize) -> String {
    format!("frame_{i:04}.imf")
}

struct Outputs {
    dir: PathBuf,
    manifest: String,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: String::new(),
        })
    }

    fn param(&mut self, key: &str, value: impl std::fmt::Display) {
        writeln!(self.manifest, "{key} {value}").unwrap();
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&Path) -> evdeblur::Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        f(&path).with_context(|| format!("writing {}", path.display()))?;
        writeln!(self.manifest, "file {name}").unwrap();
        println!("wrote {}", path.display());
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        let text = std::mem::take(&mut self.manifest);
        self.write("run.txt", |p| io::write_atomic(p, text.as_bytes()))
    }
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    let cfg = SimConfig {
        tau: a.tau,
        eps: a.eps,
        substeps: a.substeps,
    };
    let spec = FixtureSpec {
        radius: a.radius,
        seed: a.seed,
        ..FixtureSpec::new(a.pattern, a.size, a.frames as usize, a.velocity)
    };
    let fx = make_fixture(&spec, &cfg).context("rendering fixture")?;
    let mut out = Outputs::create(&a.out_dir)?;
    out.param("command", "simulate");
    out.param("pattern", a.pattern);
    out.param("size", a.size);
    out.param("frames", a.frames);
    out.param("velocity", format!("{},{}", a.velocity[0], a.velocity[1]));
    out.param("tau", a.tau);
    out.param("substeps", a.substeps);
    out.param("eps", a.eps);
    out.param("seed", a.seed);
    if let Some(r) = a.radius {
        out.param("radius", r);
    }
    out.param("events", fx.events.len());
    for (i, f) in fx.frames.frames().iter().enumerate() {
        out.write(&frame_name(i + 1), |p| io::write_image(p, f))?;
    }
    out.write("blur.imf", |p| io::write_image(p, &fx.blur))?;
    out.write("events.evt", |p| io::write_events(p, &fx.events))?;
    for (i, f) in fx.flows.iter().enumerate() {
        out.write(&format!("flow_{:04}.flo", i + 1), |p| io::write_flow(p, f))?;
    }
    out.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn load_events(path: &Path) -> Result<EventStream> {
    io::read_events(path).with_context(|| format!("reading {}", path.display()))
}

fn load_image(path: &Path) -> Result<Image> {
    io::read_image(path).with_context(|| format!("reading {}", path.display()))
}

/// Frame count, taken from the exposure when it already spans `[1, T]`.
fn infer_frames(stream: &EventStream, path: &Path) -> Result<usize> {
    let end = stream.t_end();
    if stream.t_begin() == 1.0 && end.fract() == 0.0 && end >= 2.0 {
        return Ok(end as usize);
    }
    bail!(
        "{}: exposure [{}, {}] is not [1, T]; pass --frames",
        path.display(),
        stream.t_begin(),
        end
    )
}

fn deblur(a: DeblurArgs) -> Result<ExitCode> {
    let blur = load_image(&a.blur)?;
    let mut stream = load_events(&a.events)?;
    let frames = match a.frames {
        Some(t) => t,
        None => infer_frames(&stream, &a.events)?,
    };
    ensure!(frames >= 2, "--frames must be at least 2, got {frames}");
    if stream.t_begin() != 1.0 || stream.t_end() != frames as f64 {
        stream = stream
            .normalize_time(frames)
            .with_context(|| format!("normalizing {}", a.events.display()))?;
    }
    ensure!(
        blur.shape() == (stream.width(), stream.height()),
        "{} is {}x{} but {} is {}x{}",
        a.blur.display(),
        blur.width(),
        blur.height(),
        a.events.display(),
        stream.width(),
        stream.height()
    );
    let tau = match &a.estimate_tau {
        Some(grid) => {
            let tau = estimate_tau(&blur, &stream, frames, grid).context("estimating tau")?;
            println!("estimated tau {tau}");
            tau
        }
        None => a.tau,
    };
    let seq = sequential_deblur(&blur, &stream, tau, frames, &Identity, &Identity)
        .context("deblurring")?;
    let residual = Image::mean_of(seq.frames())?.max_abs_diff(&blur)?;
    println!("reblur max abs {residual:e}");

    let mut out = Outputs::create(&a.out_dir)?;
    out.param("command", "deblur");
    out.param("blur", a.blur.display());
    out.param("events", a.events.display());
    out.param("frames", frames);
    out.param("tau", tau);
    if let Some(grid) = &a.estimate_tau {
        let grid: Vec<String> = grid.iter().map(f64::to_string).collect();
        out.param("tau_grid", grid.join(","));
    }
    out.param("reblur_max_abs", format!("{residual:e}"));
    for (i, f) in seq.frames().iter().enumerate() {
        out.write(&frame_name(i + 1), |p| io::write_image(p, &f.clamp(0.0, 1.0)))?;
    }
    out.finish()?;
    Ok(ExitCode::SUCCESS)
}

fn guidance(a: GuidanceArgs) -> Result<ExitCode> {
    let stream = load_events(&a.events)?;
    let flow = io::read_flow(&a.flow).with_context(|| format!("reading {}", a.flow.display()))?;
    let interval = (a.interval[0], a.interval[1]);
    let volume = stream
        .bin_stacked_frames(&[interval], a.chunks)
        .with_context(|| format!("binning {}", a.events.display()))?;
    let params = match &a.params {
        Some(path) => io::read_def(path).with_context(|| format!("reading {}", path.display()))?,
        None => {
            let (w, h) = (stream.width(), stream.height());
            let taps = 2 * a.k + 1;
            let center = a.center.unwrap_or(0.5 * (interval.0 + interval.1));
            DefParams::new(
                Image::filled(w, h, center),
                vec![1.0 / taps as f64; taps * w * h],
                a.k,
                a.lambda,
                a.sigma,
                a.window,
            )
            .context("building filter parameters")?
        }
    };
    let g = directional_filter(&volume, &flow, &params, interval).context("filtering")?;
    io::write_image(&a.out, &g).with_context(|| format!("writing {}", a.out.display()))?;
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let cfg = GradcheckConfig {
        configs: a.configs,
        seed: a.seed,
        ..GradcheckConfig::default()
    };
    let start = Instant::now();
    let r = gradcheck::run(&cfg)?;
    println!("configs {} centers_checked {}", r.configs, r.centers_checked);
    println!("max_rel logits {:e}", r.max_rel_logits);
    println!("max_rel alpha {:e}", r.max_rel_alpha);
    println!("max_rel center {:e}", r.max_rel_center);
    println!("max_rel volume {:e}", r.max_rel_volume);
    println!("elapsed {:.3}s", start.elapsed().as_secs_f64());
    if r.passed() {
        println!("gradcheck passed (tolerance {TOLERANCE:e})");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAILED: max relative error {:e} >= {TOLERANCE:e}", r.max_rel());
        Ok(ExitCode::FAILURE)
    }
}

/// Sorted `frame_*` images (IMF1 or PGM) in `dir`.
fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.starts_with("frame_") && (name.ends_with(".imf") || name.ends_with(".pgm")) {
            files.push(path);
        }
    }
    files.sort();
    ensure!(!files.is_empty(), "{} holds no frame_* images", dir.display());
    Ok(files)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let recon_files = frame_files(&a.recon_dir)?;
    let truth_files = frame_files(&a.truth_dir)?;
    ensure!(
        recon_files.len() == truth_files.len(),
        "{} has {} frames but {} has {}",
        a.recon_dir.display(),
        recon_files.len(),
        a.truth_dir.display(),
        truth_files.len()
    );
    let recon: Vec<Image> = recon_files.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
    let truth: Vec<Image> = truth_files.iter().map(|p| load_image(p)).collect::<Result<_>>()?;
    for ((r, t), (rp, tp)) in recon.iter().zip(&truth).zip(recon_files.iter().zip(&truth_files)) {
        ensure!(
            r.shape() == t.shape(),
            "{} is {}x{} but {} is {}x{}",
            rp.display(),
            r.width(),
            r.height(),
            tp.display(),
            t.width(),
            t.height()
        );
    }
    let report = evaluate(&recon, &truth, a.peak)?;
    println!("{report}");
    if let Some(min) = a.min_psnr {
        if report.mean_psnr.is_nan() || report.mean_psnr < min {
            println!("mean psnr below --min-psnr {min}");
            return Ok(ExitCode::FAILURE);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        ensure!(n >= 1, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Deblur(a) => deblur(a),
        Command::Guidance(a) => guidance(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Eval(a) => eval(a),
    }
}
