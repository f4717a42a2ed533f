//! `sad`: encode images into soft anisotropic diagrams, decode them, and run
//! the diagnostics and benchmarks.
//!
//! Machine-readable results go to stdout as one JSON object per line; the
//! human summary goes to stderr.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use sad_core::candidates::topk_convergence;
use sad_core::codec::{self, SadFile};
use sad_core::poisson::{disk_solution, Mask, PoissonConfig, PoissonSolver, POISSON_HISTORY_HEADER};
use sad_core::quality::{psnr, ssim};
use sad_core::render::{boundary_map, render_fresh, render_id_map, render_tau_map, save_boundary_map, save_id_map, save_tau_map};
use sad_core::train::{write_history_csv, Trainer};
use sad_core::{ImageBuffer, MergeMode, PropagationParams, SadError, SiteStore, TrainConfig};

#[derive(Parser)]
#[command(name = "sad", version, about = "Soft anisotropic diagram image codec")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SAD_THREADS")]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit an image and write a .sad file.
    Encode(EncodeArgs),
    /// Render a .sad file to an image.
    Decode(DecodeArgs),
    /// Write diagnostic maps of a .sad file.
    Inspect(InspectArgs),
    /// Top-K convergence table and refresh/render timings as CSV.
    Bench(BenchArgs),
    /// Solve the Poisson demo on a mask or a disk.
    Poisson(PoissonArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("budget").required(true).args(["sites", "bpp"])))]
struct EncodeArgs {
    input: PathBuf,
    /// Fixed site count (no densify or prune events).
    #[arg(long)]
    sites: Option<usize>,
    /// Target bits per pixel; densify/prune are scheduled to land on it.
    #[arg(long)]
    bpp: Option<f64>,
    /// Initial site count with --bpp (default: twice the target count).
    #[arg(long, requires = "bpp")]
    init_sites: Option<usize>,
    #[arg(long, default_value_t = 4000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    lambda_init: f64,
    #[arg(short, long)]
    out: PathBuf,
    /// Also write the reconstruction.
    #[arg(long)]
    render: Option<PathBuf>,
    /// Per-iteration loss history as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Native float gradient merge (faster, not bit-reproducible).
    #[arg(long)]
    fast_merge: bool,
}

#[derive(Args)]
struct DecodeArgs {
    input: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    /// Step-1 propagation passes after the jump-flood warm-up.
    #[arg(long, default_value_t = 16)]
    passes: usize,
    /// Original image; enables PSNR reporting.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    input: PathBuf,
    /// Ownership map (one color per site).
    #[arg(long)]
    ids: Option<PathBuf>,
    /// Partition boundaries, black on white.
    #[arg(long)]
    boundaries: Option<PathBuf>,
    /// Weight-averaged log temperature.
    #[arg(long)]
    tau: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    passes: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Square image sides.
    #[arg(long, value_delimiter = ',', default_value = "1024")]
    resolutions: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "16384,65536,131072")]
    sites: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,12,16")]
    passes: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    trials: usize,
    /// Random pixels checked against the exhaustive oracle per trial.
    #[arg(long, default_value_t = 256)]
    pixels: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV destination (default: stdout).
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("domain").required(true).args(["mask", "disk"])))]
struct PoissonArgs {
    /// Domain image; pixels brighter than 0.5 are inside.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Disk radius in pixels, centered in a --size square.
    #[arg(long)]
    disk: Option<f64>,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 2000)]
    interior: usize,
    #[arg(long, default_value_t = 512)]
    boundary: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    /// Right-hand side of lap u = f.
    #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
    source: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for solution.png, shaded.png and sites.png.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[arg(long)]
    history: Option<PathBuf>,
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<SadError> for Failure {
    fn from(e: SadError) -> Self {
        let code = match e {
            SadError::InvalidInput(_) | SadError::InvalidDomain(_) => 2,
            SadError::Framing { .. } | SadError::UnsupportedVersion(_) | SadError::Image(_) | SadError::Io(_) => 3,
            SadError::Numeric(_) | SadError::EmptyModel | SadError::EmptyCandidates { .. } => 4,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        SadError::Io(e).into()
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Encode(a) => encode(a),
        Command::Decode(a) => decode(a),
        Command::Inspect(a) => inspect(a),
        Command::Bench(a) => bench(a),
        Command::Poisson(a) => poisson(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn load_model(path: &Path) -> Result<(SadFile, SiteStore), Failure> {
    let file = SadFile::read(path)?;
    let store = file.to_store();
    Ok((file, store))
}

fn encode(a: EncodeArgs) -> CmdResult {
    let start = Instant::now();
    let target = ImageBuffer::load(&a.input)?;
    let (w, h) = (target.width, target.height);
    let pixels = w * h;
    let mut config = TrainConfig {
        seed: a.seed,
        lambda_init: a.lambda_init,
        merge_mode: if a.fast_merge { MergeMode::Fast } else { MergeMode::Deterministic },
        ..TrainConfig::default()
    }
    .with_iters(a.iters);
    if let Some(n) = a.sites {
        if n == 0 {
            return Err(Failure::usage("--sites must be at least 1"));
        }
        config.init_sites = n.min(pixels);
        config = config.without_budget();
    } else if let Some(bpp) = a.bpp {
        if !(bpp.is_finite() && bpp > 0.0) {
            return Err(Failure::usage("--bpp must be positive"));
        }
        let target_count = codec::target_count(bpp, w, h).max(1);
        config.init_sites = a.init_sites.unwrap_or(2 * target_count).clamp(1, pixels);
        config.target_bpp = Some(bpp);
    }
    let mut trainer = Trainer::new(&target, config)?;
    trainer.run_to(a.iters)?;
    let recon = trainer.render_final(16)?;
    let fit_psnr = psnr(&recon, &target)?;
    let fit_ssim = ssim(&recon, &target)?;
    let result = trainer.finish();
    if let Some(path) = &a.history {
        let mut out = BufWriter::new(File::create(path)?);
        write_history_csv(&mut out, &result.history)?;
        out.flush()?;
    }
    let file = codec::write_file(&a.out, &result.store, w, h)?;
    let (decoded, _) = render_fresh(&file.to_store(), w, h, 8, 16, PropagationParams::default())?;
    let q_psnr = psnr(&decoded, &target)?;
    if let Some(path) = &a.render {
        decoded.save(path)?;
    }
    let secs = start.elapsed().as_secs_f64();
    eprintln!(
        "{}: {} sites, {:.4} bpp, PSNR {:.2} dB (quantized {:.2} dB), SSIM {:.4}, {:.1} s",
        a.input.display(),
        file.records.len(),
        file.bpp(),
        fit_psnr,
        q_psnr,
        fit_ssim,
        secs
    );
    emit(json!({
        "command": "encode",
        "input": a.input,
        "out": a.out,
        "width": w,
        "height": h,
        "iters": a.iters,
        "sites": file.records.len(),
        "bpp": file.bpp(),
        "bytes": file.byte_len(),
        "psnr": fit_psnr,
        "psnr_quantized": q_psnr,
        "ssim": fit_ssim,
        "seconds": secs,
        "target_count": result.schedule.map(|s| s.target_count),
        "nonfinite_skipped": result.nonfinite_skipped,
    }));
    Ok(())
}

fn decode(a: DecodeArgs) -> CmdResult {
    if a.passes == 0 {
        return Err(Failure::usage("--passes must be at least 1"));
    }
    let start = Instant::now();
    let (file, store) = load_model(&a.input)?;
    let params = PropagationParams { seed: a.seed, ..PropagationParams::default() };
    let (img, _) = render_fresh(&store, file.width, file.height, 8, a.passes, params)?;
    let secs = start.elapsed().as_secs_f64();
    img.save(&a.out)?;
    let mut report = json!({
        "command": "decode",
        "input": a.input,
        "out": a.out,
        "width": file.width,
        "height": file.height,
        "sites": file.records.len(),
        "passes": a.passes,
        "seconds": secs,
    });
    if let Some(r) = &a.reference {
        let reference = ImageBuffer::load(r)?;
        let p = psnr(&img, &reference)?;
        let (one, _) = render_fresh(&store, file.width, file.height, 8, 1, params)?;
        let p1 = psnr(&one, &reference)?;
        report["psnr"] = json!(p);
        report["psnr_1pass"] = json!(p1);
        report["pass_gap_db"] = json!(p - p1);
        eprintln!("{}: PSNR {:.2} dB at {} passes, {:.2} dB at 1 pass", a.input.display(), p, a.passes, p1);
    }
    emit(report);
    Ok(())
}

fn inspect(a: InspectArgs) -> CmdResult {
    if a.ids.is_none() && a.boundaries.is_none() && a.tau.is_none() {
        return Err(Failure::usage("nothing to do: pass at least one of --ids, --boundaries, --tau"));
    }
    let (file, store) = load_model(&a.input)?;
    let (w, h) = (file.width, file.height);
    let (_, field) = render_fresh(&store, w, h, 8, a.passes, PropagationParams::default())?;
    let mut written = Vec::new();
    if a.ids.is_some() || a.boundaries.is_some() {
        let ids = render_id_map(&store, &field)?;
        if let Some(p) = &a.ids {
            save_id_map(p, &ids, w, h)?;
            written.push(p.clone());
        }
        if let Some(p) = &a.boundaries {
            save_boundary_map(p, &boundary_map(&ids, w, h), w, h)?;
            written.push(p.clone());
        }
    }
    if let Some(p) = &a.tau {
        save_tau_map(p, &render_tau_map(&store, &field)?, w, h)?;
        written.push(p.clone());
    }
    emit(json!({ "command": "inspect", "input": a.input, "written": written }));
    Ok(())
}

/// Header of the bench CSV.
const BENCH_HEADER: &str = "resolution,sites,passes,match,update_ms,render_ms";

fn bench(a: BenchArgs) -> CmdResult {
    if a.resolutions.is_empty() || a.sites.is_empty() || a.passes.is_empty() || a.runs == 0 {
        return Err(Failure::usage("resolutions, sites, passes and runs must be non-empty"));
    }
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "{BENCH_HEADER}")?;
    for &res in &a.resolutions {
        for &n in &a.sites {
            if n == 0 || n > res * res {
                return Err(Failure::usage(format!("{n} sites do not fit a {res}x{res} grid")));
            }
            let rates = topk_convergence(res, res, n, &a.passes, a.trials, a.pixels, a.seed)?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(a.seed);
            let store = sad_core::candidates::collision_free_sites(n, res, res, &mut rng)?;
            for (&p, rate) in a.passes.iter().zip(rates) {
                let (update_ms, render_ms) = time_render(&store, res, p, a.warmup, a.runs)?;
                info!("{res}^2 {n} sites {p} passes: match {rate:.3}, update {update_ms:.1} ms, render {render_ms:.1} ms");
                writeln!(out, "{res},{n},{p},{rate:.4},{update_ms:.3},{render_ms:.3}")?;
            }
        }
    }
    out.flush()?;
    if let Some(p) = &a.out {
        emit(json!({ "command": "bench", "out": p }));
    }
    Ok(())
}

/// Median milliseconds of a full refresh with `passes` step-1 passes and of
/// the render that follows it.
fn time_render(store: &SiteStore, res: usize, passes: usize, warmup: usize, runs: usize) -> Result<(f64, f64), Failure> {
    let params = PropagationParams::default();
    let mut update = Vec::with_capacity(runs);
    let mut render = Vec::with_capacity(runs);
    for i in 0..warmup + runs {
        let mut field = sad_core::CandidateField::new(res, res, 8)?;
        let t = Instant::now();
        sad_core::refresh(store, &mut field, sad_core::RefreshMode::Full, passes, params)?;
        let t_update = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        std::hint::black_box(sad_core::render::render_image(store, &field)?);
        let t_render = t.elapsed().as_secs_f64() * 1e3;
        if i >= warmup {
            update.push(t_update);
            render.push(t_render);
        }
    }
    Ok((median(&mut update), median(&mut render)))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn poisson(a: PoissonArgs) -> CmdResult {
    let start = Instant::now();
    let (mask, truth) = match (&a.mask, a.disk) {
        (Some(p), _) => (Mask::load(p)?, None),
        (None, Some(r)) => {
            if !(r > 0.0) {
                return Err(Failure::usage("--disk radius must be positive"));
            }
            (Mask::disk(a.size, a.size, r), Some(disk_solution(a.size, a.size, r)))
        }
        (None, None) => return Err(Failure::usage("pass --mask or --disk")),
    };
    let config = PoissonConfig {
        interior_sites: a.interior,
        boundary_sites: a.boundary,
        steps: a.steps,
        source: a.source,
        seed: a.seed,
        ..PoissonConfig::default()
    };
    let mut solver = PoissonSolver::new(mask, config)?;
    if let Some(t) = truth.filter(|_| a.source == -4.0) {
        solver = solver.with_truth(t);
    }
    let hash_before = solver.frozen_hash();
    solver.run()?;
    let last = solver.evaluate()?;
    let hash_after = solver.frozen_hash();
    if let Some(dir) = &a.out {
        solver.save_panels(dir)?;
    }
    if let Some(p) = &a.history {
        let mut out = BufWriter::new(File::create(p)?);
        writeln!(out, "{POISSON_HISTORY_HEADER}")?;
        for row in &solver.history {
            writeln!(out, "{}", row.to_csv())?;
        }
        out.flush()?;
    }
    let secs = start.elapsed().as_secs_f64();
    eprintln!("poisson: {} steps, residual MSE {:.4e}, {:.1} s", solver.step, last.residual_mse, secs);
    emit(json!({
        "command": "poisson",
        "steps": solver.step,
        "residual_mse": last.residual_mse,
        "error_mse": last.error_mse,
        "frozen_hash": format!("{hash_after:016x}"),
        "frozen_unchanged": hash_before == hash_after,
        "seconds": secs,
    }));
    Ok(())
}
