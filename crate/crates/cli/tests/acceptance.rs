//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

#[path = "../../core/tests/oracle/mod.rs"]
mod oracle;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use evdeblur::def::{directional_filter, propagate_velocity, resample_velocity, DefParams, ScatterSamples};
use evdeblur::gradcheck::{self, GradcheckConfig};
use evdeblur::io;
use evdeblur::metrics::{evaluate, psnr, ssim};
use evdeblur::recon::{backward_step, estimate_tau, forward_step, sequential_deblur, solve_latest, Identity};
use evdeblur::simulator::{make_fixture, FixtureSpec, Pattern, SimConfig};
use evdeblur::{Event, EventStream, FlowField, Image, Polarity, StackedEventFrames};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_evdeblur"))
        .args(args)
        .output()
        .map_err(|e| format!("spawning evdeblur: {e}"))?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if !out.status.success() {
        return Err(format!(
            "`evdeblur {}` exited with {}: {}{}",
            args.join(" "),
            out.status,
            stdout,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(stdout)
}

fn frames_in(dir: &Path, n: usize) -> Result<Vec<Image>, String> {
    (1..=n)
        .map(|i| io::read_image(&dir.join(format!("frame_{i:04}.imf"))).map_err(|e| e.to_string()))
        .collect()
}

fn random_stream(rng: &mut ChaCha8Rng, w: usize, h: usize, frames: usize) -> EventStream {
    let n = rng.gen_range(0..400);
    let events = (0..n)
        .map(|_| {
            let t = if rng.gen_bool(0.1) {
                rng.gen_range(1..=frames) as f64
            } else {
                rng.gen_range(1.0..=frames as f64)
            };
            let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            Event::new(rng.gen_range(0..w as u32), rng.gen_range(0..h as u32), t, p)
        })
        .collect();
    EventStream::from_unsorted(w, h, 1.0, frames as f64, events).unwrap()
}

fn physical_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (sim, rec) = (dir.path().join("sim"), dir.path().join("rec"));
    let (sim_s, rec_s) = (sim.to_str().unwrap(), rec.to_str().unwrap());

    let start = Instant::now();
    cli(&["--threads", "1", "simulate", "translating_bars", "64", "7", "1,0", "0.1", sim_s, "--substeps", "16"])?;
    let log = cli(&["--threads", "1", "deblur", &format!("{sim_s}/blur.imf"), &format!("{sim_s}/events.evt"), rec_s, "--tau", "0.1"])?;
    let elapsed = start.elapsed().as_secs_f64();

    let cli_residual: f64 = log
        .lines()
        .find_map(|l| l.strip_prefix("reblur max abs "))
        .and_then(|v| v.trim().parse().ok())
        .ok_or("deblur did not report its re-blur residual")?;
    let recon = frames_in(&rec, 7)?;
    let truth = frames_in(&sim, 7)?;
    let report = evaluate(&recon, &truth, 1.0).map_err(|e| e.to_string())?;

    // the same pipeline in f64 without file quantization
    let fx = make_fixture(
        &FixtureSpec::new(Pattern::TranslatingBars, 64, 7, [1.0, 0.0]),
        &SimConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let seq = sequential_deblur(&fx.blur, &fx.events, 0.1, 7, &Identity, &Identity).map_err(|e| e.to_string())?;
    let residual = Image::mean_of(seq.frames()).unwrap().max_abs_diff(&fx.blur).unwrap();
    let direct = evaluate(seq.frames(), fx.frames.frames(), 1.0).map_err(|e| e.to_string())?;

    check(report.mean_psnr >= 35.0, || format!("file pipeline mean psnr {:.3} dB < 35", report.mean_psnr))?;
    check(direct.mean_psnr >= 35.0, || format!("in-memory mean psnr {:.3} dB < 35", direct.mean_psnr))?;
    check(cli_residual <= 1e-9, || format!("cli re-blur residual {cli_residual:e} > 1e-9"))?;
    check(residual <= 1e-9, || format!("re-blur residual {residual:e} > 1e-9"))?;
    check(elapsed < 10.0, || format!("pipeline took {elapsed:.2}s"))?;
    Ok(format!(
        "mean psnr {:.2} dB (files) / {:.2} dB (f64), re-blur {:.1e}, {:.2}s single-threaded",
        report.mean_psnr, direct.mean_psnr, residual.max(cli_residual), elapsed
    ))
}

fn algebraic_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_inverse: f64 = 0.0;
    let mut worst_additive: f64 = 0.0;
    for _ in 0..50 {
        let stream = random_stream(&mut rng, 7, 5, 4);
        let tau = rng.gen_range(0.01..0.5);
        let img = Image::from_fn(7, 5, |_, _| rng.gen_range(0.01..1.0));
        let s = stream.polarity_integral(2.0, 3.0).unwrap();
        let back = backward_step(&img, &s, tau).unwrap();
        worst_inverse = worst_inverse.max(forward_step(&back, &s, tau).unwrap().max_abs_diff(&img).unwrap());
        let mid = rng.gen_range(2.0..3.0);
        let late = stream.polarity_integral(mid, 3.0).unwrap();
        let early = stream.polarity_integral(2.0, mid).unwrap();
        let chained = backward_step(&backward_step(&img, &late, tau).unwrap(), &early, tau).unwrap();
        worst_additive = worst_additive.max(chained.max_abs_diff(&back).unwrap());
    }
    check(worst_inverse <= 1e-12, || format!("forward after backward off by {worst_inverse:e}"))?;
    check(worst_additive <= 1e-12, || format!("interval additivity off by {worst_additive:e}"))?;

    let blur = Image::from_fn(9, 6, |_, _| rng.gen_range(0.0..1.0));
    for frames in 2..9 {
        let latest = solve_latest(&blur, &EventStream::empty(9, 6, 1.0, frames as f64), 0.1, frames).unwrap();
        check(latest == blur, || format!("no-event latest frame differs from blur at T = {frames}"))?;
    }

    let one = EventStream::new(1, 1, 1.0, 2.0, vec![Event::new(0, 0, 1.5, Polarity::Positive)]).unwrap();
    let latest = solve_latest(&Image::filled(1, 1, 0.75), &one, std::f64::consts::LN_2, 2).unwrap();
    let hand = (latest.at(0, 0) - 1.0).abs();
    check(hand <= 1e-12, || format!("two-frame hand case off by {hand:e}"))?;
    Ok(format!("inverse {worst_inverse:.1e}, additivity {worst_additive:.1e}, no-event exact, hand case {hand:.1e}"))
}

fn gradient_check() -> Outcome {
    let cfg = GradcheckConfig::default();
    check(cfg.configs >= 100 && cfg.chunks == 8 && cfg.size == 8 && cfg.k == 2, || "configuration below the required coverage".into())?;
    let report = gradcheck::run(&cfg).map_err(|e| e.to_string())?;
    check(report.passed(), || format!("max relative error {:e}", report.max_rel()))?;

    let start = Instant::now();
    let out = cli(&["gradcheck"])?;
    let elapsed = start.elapsed().as_secs_f64();
    check(elapsed < 30.0, || format!("gradcheck subcommand took {elapsed:.1}s"))?;
    check(out.contains("passed"), || format!("unexpected gradcheck output: {out}"))?;
    Ok(format!(
        "{} configs, max rel logits {:.1e} alpha {:.1e} center {:.1e} ({} centers) volume {:.1e}, cli {:.1}s",
        report.configs,
        report.max_rel_logits,
        report.max_rel_alpha,
        report.max_rel_center,
        report.centers_checked,
        report.max_rel_volume,
        elapsed
    ))
}

fn random_flow(rng: &mut ChaCha8Rng, w: usize, h: usize, amp: f64) -> FlowField {
    FlowField::new(
        Image::from_fn(w, h, |_, _| rng.gen_range(-amp..amp)),
        Image::from_fn(w, h, |_, _| rng.gen_range(-amp..amp)),
    )
    .unwrap()
}

fn def_brute_force() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, h, chunks) = (6, 6, 8);
    let mut worst: f64 = 0.0;
    for trial in 0..40 {
        let data = (0..chunks * w * h).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let vol = StackedEventFrames::from_data(w, h, chunks, vec![(1.0, 2.0)], data).unwrap();
        let flow = random_flow(&mut rng, w, h, 2.0);
        let center = Image::from_fn(w, h, |_, _| rng.gen_range(0.9..2.1));
        let logits: Vec<f64> = (0..5 * w * h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let window = [2, 5, 20][trial % 3];
        let params = DefParams::from_logits(center, &logits, 2, 1.0, rng.gen_range(0.5..2.0), window).unwrap();
        let got = directional_filter(&vol, &flow, &params, (1.0, 2.0)).unwrap();
        let want = oracle::directional_filter(&vol, &flow, &params, (1.0, 2.0), 0);
        worst = worst.max(got.max_abs_diff(&want).unwrap());
    }
    check(worst <= 1e-12, || format!("oracle mismatch {worst:e}"))?;

    let mut unity: f64 = 0.0;
    for _ in 0..20 {
        let v = rng.gen_range(-3.0..3.0);
        let vol = StackedEventFrames::from_data(w, h, chunks, vec![(1.0, 2.0)], vec![v; chunks * w * h]).unwrap();
        let flow = random_flow(&mut rng, w, h, 0.3);
        let center = Image::from_fn(w, h, |_, _| rng.gen_range(1.35..1.65));
        let logits: Vec<f64> = (0..5 * w * h).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let params = DefParams::from_logits(center, &logits, 2, 1.0, 1.0, 20).unwrap();
        let g = directional_filter(&vol, &flow, &params, (1.0, 2.0)).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                unity = unity.max((g.at(x, y) - v).abs());
            }
        }
    }
    check(unity <= 1e-12, || format!("partition of unity off by {unity:e}"))?;
    Ok(format!("oracle {worst:.1e}, partition of unity {unity:.1e}"))
}

fn nadaraya_watson() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (u, v) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let c = rng.gen_range(1.0..2.0);
        let samples = propagate_velocity(&FlowField::constant(10, 8, u, v), c, 1.0).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                let d = resample_velocity(&samples, [x as f64, y as f64], 1.0, 20).unwrap();
                worst = worst.max((d[0] - u).abs()).max((d[1] - v).abs());
            }
        }
    }
    check(worst <= 1e-12, || format!("constant flow off by {worst:e}"))?;
    let pair = ScatterSamples::new(vec![[0.0, 1.0], [2.0, 1.0]], vec![[1.0, 0.0], [0.0, 3.0]]).unwrap();
    let mean = resample_velocity(&pair, [1.0, 1.0], 1.0, 20).unwrap();
    check(mean == [0.5, 1.5], || format!("symmetric pair gave {mean:?}"))?;
    Ok(format!("50 constant fields within {worst:.1e}, symmetric pair exact"))
}

fn conservation_and_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for n in 0..50 {
        let frames = rng.gen_range(2..7);
        let (w, h) = (rng.gen_range(1..9), rng.gen_range(1..9));
        let stream = random_stream(&mut rng, w, h, frames);
        let intervals: Vec<(f64, f64)> = (1..frames).map(|i| (i as f64, (i + 1) as f64)).collect();
        let vol = stream.bin_stacked_frames(&intervals, 8).unwrap();
        for (k, &(a, b)) in intervals.iter().enumerate() {
            let s = stream.polarity_integral(a, b).unwrap();
            check(&vol.interval_sum(k) == s.values(), || format!("stream {n}: interval {k} not conserved"))?;
        }
        let text = io::encode_events(&stream);
        let back = io::decode_events(&text).map_err(|e| e.to_string())?;
        check(back == stream && io::encode_events(&back) == text, || format!("stream {n}: EVT1 round trip differs"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let img = Image::from_fn(13, 7, |_, _| rng.gen_range(-5.0f32..5.0) as f64);
    let flow = FlowField::new(
        Image::from_fn(13, 7, |_, _| rng.gen_range(-5.0f32..5.0) as f64),
        Image::from_fn(13, 7, |_, _| rng.gen_range(-5.0f32..5.0) as f64),
    )
    .unwrap();
    let (ip, fp) = (dir.path().join("a.imf"), dir.path().join("a.flo"));
    io::write_image(&ip, &img).map_err(|e| e.to_string())?;
    io::write_flow(&fp, &flow).map_err(|e| e.to_string())?;
    let (ib, fb) = (std::fs::read(&ip).unwrap(), std::fs::read(&fp).unwrap());
    let img2 = io::read_image(&ip).map_err(|e| e.to_string())?;
    let flow2 = io::read_flow(&fp).map_err(|e| e.to_string())?;
    check(img2 == img && io::encode_imf(&img2).unwrap() == ib, || "IMF1 round trip differs".into())?;
    check(flow2 == flow && io::encode_flow(&flow2).unwrap() == fb, || "FLO1 round trip differs".into())?;
    Ok("50 streams conserved, EVT1/IMF1/FLO1 bit-identical".into())
}

fn tau_estimation() -> Outcome {
    let fx = make_fixture(
        &FixtureSpec::new(Pattern::TranslatingBars, 64, 7, [1.0, 0.0]),
        &SimConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    let tau = estimate_tau(&fx.blur, &fx.events, 7, &[0.05, 0.1, 0.2]).map_err(|e| e.to_string())?;
    check(tau == 0.1, || format!("estimated {tau}"))?;
    Ok(format!("estimated {tau}"))
}

fn metrics() -> Outcome {
    let a = Image::from_fn(16, 16, |x, y| ((x * 7 + y * 13) % 17) as f64 / 16.0);
    let shifted = a.map(|v| v + 0.1);
    let p = psnr(&a, &shifted, 1.0).unwrap();
    check((p - 20.0).abs() <= 1e-9, || format!("psnr {p}"))?;
    let same = ssim(&a, &a).unwrap();
    check(same == 1.0, || format!("ssim(x, x) = {same}"))?;
    let b = Image::from_fn(16, 16, |x, y| 0.75 * a.at(x, y) + 0.1 + ((x * 3 + y * 5) % 7) as f64 / 70.0);
    // scikit-image structural_similarity(gaussian_weights=True, sigma=1.5,
    // use_sample_covariance=False, data_range=1.0)
    let reference = 0.9567409968070434;
    let s = ssim(&a, &b).unwrap();
    check((s - reference).abs() <= 1e-6, || format!("ssim {s} vs reference {reference}"))?;
    Ok(format!("psnr {p:.9} dB, ssim(x, x) {same}, ssim {s:.9} vs {reference:.9}"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("physical round trip", physical_round_trip),
        ("exact algebraic identities", algebraic_identities),
        ("guidance gradient check", gradient_check),
        ("guidance brute-force equivalence", def_brute_force),
        ("velocity resampling exactness", nadaraya_watson),
        ("event conservation and file round trips", conservation_and_round_trips),
        ("threshold estimation", tau_estimation),
        ("image metrics", metrics),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(msg)
        });
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
