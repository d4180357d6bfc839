//! Command line front end: frame rendering, two-stage inversion, texture
//! strips, dolly-zoom sequences, image metrics and a built-in self-test.
//!
//! Exit codes: 1 for configuration or argument problems, 2 for file I/O
//! problems, 3 for a fit aborted on a non-finite loss.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use isorad_core::blob::{load_voxel, save_latent, save_voxel};
use isorad_core::config::{BuiltScene, SceneConfig};
use isorad_core::detail::{prepare_detail, DetailMaps, Upsampler};
use isorad_core::field::{CountingField, Field, IsoLevels, ScalarField};
use isorad_core::fit::{fit_detail, fit_latent, FitConfig};
use isorad_core::geometry::{dolly_zoom_camera, orbit_camera, Camera, Ray};
use isorad_core::intersect::{
    build_point_cache, intersect_grid, intersect_lowres_upsample, intersect_ray, IntersectMode,
    SolverParams,
};
use isorad_core::loss::LossWeights;
use isorad_core::math::Vec3;
use isorad_core::metrics::{psnr, ssim};
use isorad_core::mlp::Mlp;
use isorad_core::radiance::{CoarseGenerator, PlaneShape, RadianceSample, TriPlaneScene};
use isorad_core::render::{
    composite, render, render_intersections, texture_strip, write_ppm, GBuffer, Image, ShadePoint,
};
use isorad_core::Error as CoreError;

#[derive(Parser)]
#[command(name = "isorad", version, about = "Iso-surface radiance renderer and inverter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one frame from a scene config.
    Render(RenderArgs),
    /// Invert a target image into a latent code or a detail voxel.
    Fit(FitArgs),
    /// Stack one scanline per pose; screen-space texture sticking shows as
    /// vertical stripes, a stable surface as smooth shear.
    Strip(StripArgs),
    /// Render a dolly-zoom sequence holding the subject's screen size fixed.
    Dolly(DollyArgs),
    /// Print PSNR and SSIM for two images.
    Metrics(MetricsArgs),
    /// Run built-in sanity checks; any failure exits nonzero.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output image, .ppm or .png.
    #[arg(long)]
    out: PathBuf,
    /// Orbit the camera around the subject by yaw,pitch,roll radians.
    #[arg(long, value_parser = parse_pose)]
    pose: Option<(f64, f64, f64)>,
    /// Override the intersection subsampling factor.
    #[arg(long, conflicts_with = "exact")]
    factor: Option<u32>,
    /// Force the full-resolution intersection path.
    #[arg(long)]
    exact: bool,
    /// Replace the config's detail voxel.
    #[arg(long)]
    detail: Option<PathBuf>,
    /// Print the frame's field evaluation count.
    #[arg(long)]
    count_evals: bool,
    /// Directory for depth, normal and residual map dumps.
    #[arg(long)]
    gbuffer: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    config: PathBuf,
    /// Target image to invert, matching the config resolution.
    #[arg(long)]
    target: PathBuf,
    #[arg(long, value_enum)]
    stage: Stage,
    /// Directory receiving binaries, trace JSON and comparison renders.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    /// Gradient step; halved within an iteration wherever it overshoots.
    #[arg(long, default_value_t = 32.0)]
    step: f64,
    /// Seed for the novel-pose sampler.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    /// Optimize the plane generator's latent code.
    Latent,
    /// Optimize a camera-frustum detail voxel over the frozen coarse scene.
    Detail,
}

#[derive(Args)]
struct StripArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output image, .ppm or .png.
    #[arg(long)]
    out: PathBuf,
    /// Poses in the sweep.
    #[arg(long, default_value_t = 12)]
    frames: usize,
    /// Yaw sweeps from -range to +range radians around the subject.
    #[arg(long, default_value_t = 0.4)]
    yaw_range: f64,
    /// Scanline row to stack; defaults to the middle row.
    #[arg(long)]
    row: Option<u32>,
    /// Replace the config's detail voxel.
    #[arg(long)]
    detail: Option<PathBuf>,
}

#[derive(Args)]
struct DollyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving dolly_000.ppm, dolly_001.ppm, ...
    #[arg(long)]
    out: PathBuf,
    /// Camera distances to the subject, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    distances: Vec<f64>,
    /// Replace the config's detail voxel.
    #[arg(long)]
    detail: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    /// Reference image.
    a: PathBuf,
    /// Image to compare against the reference.
    b: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Render(args) => cmd_render(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Strip(args) => cmd_strip(args),
        Command::Dolly(args) => cmd_dolly(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::Selftest(args) => cmd_selftest(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

/// Error carrying the process exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> CliError {
        CliError { code: 1, message: message.into() }
    }

    fn io(path: &Path, err: impl std::fmt::Display) -> CliError {
        CliError { code: 2, message: format!("{}: {err}", path.display()) }
    }
}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> CliError {
        let code = match err {
            CoreError::Io { .. } => 2,
            CoreError::NonFiniteLoss { .. } => 3,
            _ => 1,
        };
        CliError { code, message: err.to_string() }
    }
}

fn parse_pose(text: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 3 {
        return Err("pose must be yaw,pitch,roll in radians".into());
    }
    let mut angles = [0.0; 3];
    for (slot, part) in angles.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| format!("bad angle {part:?}"))?;
    }
    Ok((angles[0], angles[1], angles[2]))
}

fn load_built(
    config_path: &Path,
    detail_override: Option<&Path>,
    factor: Option<u32>,
    exact: bool,
) -> Result<(SceneConfig, BuiltScene), CliError> {
    let config = SceneConfig::load(config_path)?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    let mut built = config.build(base)?;
    if let Some(path) = detail_override {
        built.voxel = Some(load_voxel(path)?);
    }
    if exact {
        built.params.mode = IntersectMode::Exact;
    } else if let Some(f) = factor {
        if f == 0 {
            return Err(CliError::config("factor must be at least 1"));
        }
        built.params.mode = IntersectMode::LowRes { factor: f };
    }
    Ok((config, built))
}

/// Flatten the config's detail voxel onto the input view's manifolds. The
/// voxel carries its own camera; the maps are independent of the render pose.
fn detail_maps<F: Field>(built: &BuiltScene, field: &F) -> Result<Option<DetailMaps>, CoreError> {
    let Some(voxel) = &built.voxel else { return Ok(None) };
    let cache = build_point_cache(
        field,
        &built.scene.levels,
        &voxel.camera,
        built.width,
        built.height,
        4,
        &built.params.solver,
    )?;
    Ok(Some(prepare_detail(voxel, &cache, &Upsampler::Bilinear)?))
}

/// Intersect and shade one frame, counting every field evaluation including
/// the detail-cache solve. Shading itself never touches the field.
fn render_frame(built: &BuiltScene, camera: &Camera) -> Result<(GBuffer, u64), CoreError> {
    let count = AtomicU64::new(0);
    let counting = CountingField::new(&built.scene.field, &count);
    let maps = detail_maps(built, &counting)?;
    let set = match built.params.mode {
        IntersectMode::Exact => intersect_grid(
            &counting,
            &built.scene.levels,
            camera,
            built.width,
            built.height,
            &built.params.solver,
        )?,
        IntersectMode::LowRes { factor } => intersect_lowres_upsample(
            &counting,
            &built.scene.levels,
            camera,
            built.width,
            built.height,
            factor,
            &built.params.solver,
        )?,
    };
    let gb = render_intersections(&built.scene, camera, &set, &built.params, maps.as_ref())?;
    Ok((gb, count.load(Ordering::Relaxed)))
}

fn cmd_render(args: &RenderArgs) -> Result<(), CliError> {
    let (_, built) = load_built(&args.config, args.detail.as_deref(), args.factor, args.exact)?;
    let camera = match args.pose {
        Some((yaw, pitch, roll)) => orbit_camera(&built.camera, yaw, pitch, roll),
        None => built.camera,
    };
    let (gb, evals) = render_frame(&built, &camera)?;
    write_image(&args.out, &gb.color)?;
    if let Some(dir) = &args.gbuffer {
        dump_gbuffer(dir, &camera, &gb)?;
    }
    if args.count_evals {
        println!("field evaluations: {evals}");
    }
    Ok(())
}

/// Desk-scale inversion weights: no perceptual or identity embedders exist
/// here, so the pixel term carries the objective and the latent pull is a
/// faint tiebreaker. Novel-view and depth weights keep their defaults.
fn fit_weights() -> LossWeights {
    LossWeights { pixel: 1.0, latent: 1e-6, ..LossWeights::default() }
}

fn cmd_fit(args: &FitArgs) -> Result<(), CliError> {
    let config = SceneConfig::load(&args.config)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let built = config.build(base)?;
    let target = read_image(&args.target)?;
    if (target.width, target.height) != (built.width, built.height) {
        return Err(CliError::config(format!(
            "target is {}x{}, the config renders {}x{}",
            target.width, target.height, built.width, built.height
        )));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let fit_config = FitConfig {
        iterations: args.iterations,
        step: args.step,
        weights: fit_weights(),
        solver: built.params.solver,
        background: built.params.background,
        seed: args.seed,
        ..FitConfig::default()
    };
    // Comparison renders go through the same intersection path as each
    // stage's own forward pass: exact for latent, the factor-4 cache for
    // detail.
    let mut params = built.params;
    let trace = match args.stage {
        Stage::Latent => {
            params.mode = IntersectMode::Exact;
            let before =
                render(&built.scene, &built.camera, built.width, built.height, &params, None)?;
            write_image(&args.out.join("before.ppm"), &before.color)?;
            let model = config.coarse_model(base)?;
            let (code, trace) = fit_latent(&target, &built.camera, &model, &fit_config)?;
            save_latent(&args.out.join("latent.json"), &code)?;
            let fitted = model.scene(&code)?;
            let after =
                render(&fitted, &built.camera, built.width, built.height, &params, None)?;
            write_image(&args.out.join("after.ppm"), &after.color)?;
            trace
        }
        Stage::Detail => {
            params.mode = IntersectMode::LowRes { factor: 4 };
            let before =
                render(&built.scene, &built.camera, built.width, built.height, &params, None)?;
            write_image(&args.out.join("before.ppm"), &before.color)?;
            let (voxel, trace) = fit_detail(&target, &built.camera, &built.scene, &fit_config)?;
            save_voxel(&args.out.join("voxel.json"), &voxel)?;
            let cache = build_point_cache(
                &built.scene.field,
                &built.scene.levels,
                &built.camera,
                built.width,
                built.height,
                4,
                &fit_config.solver,
            )?;
            let maps = prepare_detail(&voxel, &cache, &fit_config.upsampler)?;
            let after = render(
                &built.scene,
                &built.camera,
                built.width,
                built.height,
                &params,
                Some(&maps),
            )?;
            write_image(&args.out.join("after.ppm"), &after.color)?;
            trace
        }
    };
    let trace_path = args.out.join("trace.json");
    let json = serde_json::to_string_pretty(&trace).expect("trace serialization cannot fail");
    std::fs::write(&trace_path, json).map_err(|e| CliError::io(&trace_path, e))?;
    println!("final psnr: {:.3} dB after {} iterations", trace.final_psnr, trace.reports.len());
    Ok(())
}

fn cmd_strip(args: &StripArgs) -> Result<(), CliError> {
    if args.frames == 0 {
        return Err(CliError::config("strip needs at least one frame"));
    }
    let (_, built) = load_built(&args.config, args.detail.as_deref(), None, false)?;
    let row = args.row.unwrap_or(built.height / 2);
    let yaws: Vec<f64> = if args.frames == 1 {
        vec![0.0]
    } else {
        let span = (args.frames - 1) as f64;
        (0..args.frames)
            .map(|i| -args.yaw_range + 2.0 * args.yaw_range * i as f64 / span)
            .collect()
    };
    let trajectory: Vec<Camera> =
        yaws.iter().map(|&yaw| orbit_camera(&built.camera, yaw, 0.0, 0.0)).collect();
    let maps = detail_maps(&built, &built.scene.field)?;
    let strip = texture_strip(
        &built.scene,
        &trajectory,
        (row, 0, built.width),
        built.width,
        built.height,
        &built.params,
        maps.as_ref(),
    )?;
    write_image(&args.out, &strip)
}

fn cmd_dolly(args: &DollyArgs) -> Result<(), CliError> {
    let (config, built) = load_built(&args.config, args.detail.as_deref(), None, false)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let subject = Vec3::from_array(config.camera.look_at);
    let maps = detail_maps(&built, &built.scene.field)?;
    for (i, &distance) in args.distances.iter().enumerate() {
        let camera = dolly_zoom_camera(&built.camera, distance, subject)?;
        let gb = render(
            &built.scene,
            &camera,
            built.width,
            built.height,
            &built.params,
            maps.as_ref(),
        )?;
        write_image(&args.out.join(format!("dolly_{i:03}.ppm")), &gb.color)?;
    }
    Ok(())
}

fn cmd_metrics(args: &MetricsArgs) -> Result<(), CliError> {
    let a = read_image(&args.a)?;
    let b = read_image(&args.b)?;
    println!("psnr_db: {:.6}", psnr(&a, &b)?);
    println!("ssim: {:.9}", ssim(&a, &b)?);
    Ok(())
}

fn cmd_selftest(args: &SelftestArgs) -> Result<(), CliError> {
    let mut failures = 0u32;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    // Weights plus leftover transmittance must sum to one on any hit list.
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(0..=16usize);
        let mut t = 0.0;
        let points: Vec<ShadePoint> = (0..n)
            .map(|_| {
                t += rng.gen_range(0.01..0.5);
                let sample = RadianceSample {
                    color: [rng.gen(), rng.gen(), rng.gen()],
                    alpha: rng.gen(),
                };
                ShadePoint { sample, t }
            })
            .collect();
        let comp = composite(&points)?;
        worst = worst.max((comp.weights.iter().sum::<f64>() + comp.residual - 1.0).abs());
    }
    check(&mut failures, "compositing identity within 1e-10", worst <= 1e-10);

    // Refined hit depths against the sphere's closed form.
    let field = ScalarField::sphere(Vec3::ZERO);
    let levels = IsoLevels::new(vec![0.8, 1.0]).expect("increasing levels");
    let (scene, camera) = selftest_scene()?;
    let solver = SolverParams::default();
    let mut worst: f64 = 0.0;
    for v in 0..8 {
        for u in 0..8 {
            let ray = camera.ray_for_pixel(u, v, 8, 8)?;
            for hit in intersect_ray(&field, &levels, &ray, camera.near, camera.far, &solver)? {
                let exact = sphere_hit_depth(&ray, levels.values()[hit.level], hit.ordinal);
                worst = worst.max((hit.t - exact).abs());
            }
        }
    }
    check(&mut failures, "sphere hit depths within 1e-6", worst <= 1e-6);

    // The same frame twice must be byte-identical.
    let params = isorad_core::render::RenderParams::default();
    let first = render(&scene, &camera, 16, 16, &params, None)?;
    let second = render(&scene, &camera, 16, 16, &params, None)?;
    check(
        &mut failures,
        "render determinism",
        write_ppm(&first.color) == write_ppm(&second.color),
    );

    // Factor 1 subsampling is the exact path under another name.
    let mut low = params;
    low.mode = IntersectMode::LowRes { factor: 1 };
    let lowres = render(&scene, &camera, 16, 16, &low, None)?;
    check(
        &mut failures,
        "factor 1 matches the exact path",
        write_ppm(&lowres.color) == write_ppm(&first.color),
    );

    // Metric fixed points: identical images cap PSNR and give SSIM 1.
    let cap = psnr(&first.color, &first.color)?;
    let unity = ssim(&first.color, &first.color)?;
    check(
        &mut failures,
        "metric caps on identical images",
        cap == 99.0 && (unity - 1.0).abs() <= 1e-12,
    );

    if failures > 0 {
        return Err(CliError::config(format!("{failures} self-test checks failed")));
    }
    Ok(())
}

fn check(failures: &mut u32, name: &str, ok: bool) {
    println!("{} {name}", if ok { "ok  " } else { "FAIL" });
    if !ok {
        *failures += 1;
    }
}

/// Small seeded scene for the deterministic self-test renders.
fn selftest_scene() -> Result<(TriPlaneScene, Camera), CoreError> {
    let field = ScalarField::sphere(Vec3::ZERO);
    let levels = IsoLevels::new(vec![0.85, 1.0, 1.15])?;
    let shape = PlaneShape { resolution: 17, channels: 4, extent: 1.6 };
    let generator = CoarseGenerator::new(shape, 2, 3, 9)?;
    let planes = generator.generate(&generator.mean_code())?;
    let decoder = Mlp::seeded(&[4, 8, 4], 42)?;
    let scene = TriPlaneScene::new(field, levels, planes, decoder)?;
    let eye = Vec3::new(0.0, 0.3, -3.0);
    let rotation = Camera::look_at_rotation(eye, Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0))?;
    let camera = Camera::pinhole(eye, rotation, 0.7, 0.5, 8.0)?;
    Ok((scene, camera))
}

/// Closed-form depth of the `ordinal`-th crossing of |x| = radius.
fn sphere_hit_depth(ray: &Ray, radius: f64, ordinal: usize) -> f64 {
    let b = ray.origin.dot(ray.direction);
    let disc = b * b - ray.origin.dot(ray.origin) + radius * radius;
    let root = disc.max(0.0).sqrt();
    if ordinal == 0 {
        -b - root
    } else {
        -b + root
    }
}

#[derive(Clone, Copy, PartialEq)]
enum ImageFormat {
    Ppm,
    Png,
}

fn format_for(path: &Path) -> Result<ImageFormat, CliError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => Ok(ImageFormat::Ppm),
        Some("png") => Ok(ImageFormat::Png),
        _ => Err(CliError::config(format!(
            "{}: image paths must end in .ppm or .png",
            path.display()
        ))),
    }
}

fn write_image(path: &Path, image: &Image) -> Result<(), CliError> {
    match format_for(path)? {
        ImageFormat::Ppm => {
            std::fs::write(path, write_ppm(image)).map_err(|e| CliError::io(path, e))
        }
        ImageFormat::Png => {
            // Same quantization as the PPM writer, so the formats agree.
            let mut buf = image::RgbImage::new(image.width, image.height);
            for (i, px) in image.pixels.iter().enumerate() {
                let rgb = [quantize(px[0]), quantize(px[1]), quantize(px[2])];
                buf.put_pixel(i as u32 % image.width, i as u32 / image.width, image::Rgb(rgb));
            }
            buf.save(path).map_err(|e| CliError::io(path, e))
        }
    }
}

fn quantize(value: f64) -> u8 {
    (255.0 * value.clamp(0.0, 1.0)).round() as u8
}

fn read_image(path: &Path) -> Result<Image, CliError> {
    match format_for(path)? {
        ImageFormat::Ppm => {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            parse_ppm(&bytes).map_err(|m| CliError::config(format!("{}: {m}", path.display())))
        }
        ImageFormat::Png => {
            let decoded = image::open(path)
                .map_err(|e| match e {
                    image::ImageError::IoError(io) => CliError::io(path, io),
                    other => CliError::config(format!("{}: {other}", path.display())),
                })?
                .to_rgb8();
            let mut out = Image::new(decoded.width(), decoded.height());
            for (px, src) in out.pixels.iter_mut().zip(decoded.pixels()) {
                for c in 0..3 {
                    px[c] = src.0[c] as f64 / 255.0;
                }
            }
            Ok(out)
        }
    }
}

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<String, String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err("truncated header".into());
    }
    Ok(std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| "non-ascii header".to_string())?
        .to_string())
}

/// Minimal binary PPM reader: P6, 255 maxval, header comments allowed.
fn parse_ppm(bytes: &[u8]) -> Result<Image, String> {
    let mut pos = 0;
    if ppm_token(bytes, &mut pos)? != "P6" {
        return Err("not a P6 file".into());
    }
    let width: u32 = ppm_token(bytes, &mut pos)?.parse().map_err(|_| "bad width")?;
    let height: u32 = ppm_token(bytes, &mut pos)?.parse().map_err(|_| "bad height")?;
    let maxval: u32 = ppm_token(bytes, &mut pos)?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err("empty image".into());
    }
    // Exactly one whitespace byte separates the header from the pixel data.
    pos += 1;
    let need = width as usize * height as usize * 3;
    let data = bytes.get(pos..pos + need).ok_or("truncated pixel data")?;
    let mut image = Image::new(width, height);
    for (px, rgb) in image.pixels.iter_mut().zip(data.chunks_exact(3)) {
        for c in 0..3 {
            px[c] = rgb[c] as f64 / 255.0;
        }
    }
    Ok(image)
}

fn dump_gbuffer(dir: &Path, camera: &Camera, gb: &GBuffer) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let span = camera.far - camera.near;
    let depth = Image::from_fn(gb.width, gb.height, |u, v| {
        let z = gb.z_surf[(v * gb.width + u) as usize];
        let g = ((z - camera.near) / span).clamp(0.0, 1.0);
        [g, g, g]
    });
    write_image(&dir.join("depth.ppm"), &depth)?;
    let normal = Image::from_fn(gb.width, gb.height, |u, v| {
        let i = (v * gb.width + u) as usize;
        if gb.degenerate[i] {
            [0.0; 3]
        } else {
            let n = gb.normal[i];
            [0.5 * n.x + 0.5, 0.5 * n.y + 0.5, 0.5 * n.z + 0.5]
        }
    });
    write_image(&dir.join("normal.ppm"), &normal)?;
    let residual = Image::from_fn(gb.width, gb.height, |u, v| {
        let r = gb.residual[(v * gb.width + u) as usize].clamp(0.0, 1.0);
        [r, r, r]
    });
    write_image(&dir.join("residual.ppm"), &residual)
}
