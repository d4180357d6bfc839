//! Two-stage inversion: gradient descent on the latent code against a target
//! image, then gradient descent on the detail voxel with the full regularizer
//! stack. Plain descent with step-size backoff keeps runs deterministic and
//! dependency-free; anyone swapping in Adam should start from beta1 = 0,
//! beta2 = 0.999, lr 5e-3, the reference settings for this pipeline.

mod backward;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detail::{
    flatten_manifolds_backward, prepare_detail, reproject_scatter, upsample_bilinear_transpose,
    DetailVoxel, Upsampler,
};
use crate::error::{Error, Result};
use crate::field::{IsoLevels, ScalarField};
use crate::geometry::{orbit_camera, Camera};
use crate::intersect::{
    build_point_cache, intersect_grid, upsample_cache, IntersectMode, IntersectionSet,
    ManifoldCache, SolverParams,
};
use crate::loss::{depth_reg, latent_reg, nv_loss, nv_mask, recon_loss, LossReport, LossWeights};
use crate::metrics::psnr;
use crate::mlp::Mlp;
use crate::radiance::{CoarseGenerator, LatentCode, TriPlaneScene};
use crate::render::{render_intersections, Image, RenderParams};

use backward::{backprop_pixel, mse_pixel_grad, taped_forward};

/// Everything both stages share: objective definition, optimizer settings
/// and the seeded novel-pose sampler. Fields irrelevant to a stage are
/// ignored by it (the latent stage has no voxel or novel views).
#[derive(Clone, Debug)]
pub struct FitConfig {
    /// Zero is allowed and returns the initial state unchanged.
    pub iterations: usize,
    pub step: f64,
    pub weights: LossWeights,
    pub solver: SolverParams,
    pub background: [f64; 3],
    /// Novel-view mask threshold on -lookat_in . normal.
    pub tau: f64,
    /// Depth-band half-width; `None` means one voxel slab.
    pub epsilon: Option<f64>,
    /// Novel yaws are drawn uniformly from [-yaw_range, yaw_range].
    pub yaw_range: f64,
    pub novel_views: usize,
    /// Lateral width, lateral height, depth slabs of the detail voxel.
    pub voxel_dims: (u32, u32, u32),
    pub upsampler: Upsampler,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iterations: 100,
            step: 0.5,
            weights: LossWeights::default(),
            solver: SolverParams::default(),
            background: [0.0; 3],
            tau: 0.2,
            epsilon: None,
            yaw_range: 0.4,
            novel_views: 2,
            voxel_dims: (32, 32, 16),
            upsampler: Upsampler::Bilinear,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidArgument(format!("step must be positive, got {}", self.step)));
        }
        if !self.tau.is_finite() {
            return Err(Error::InvalidArgument("tau must be finite".into()));
        }
        if !(self.yaw_range >= 0.0 && self.yaw_range.is_finite()) {
            return Err(Error::InvalidArgument("yaw range must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Optimization record. Reports hold the loss at the start of each iteration,
/// so with backoff the sequence is non-increasing.
#[derive(Clone, Debug, Serialize)]
pub struct FitTrace {
    pub reports: Vec<LossReport>,
    pub final_psnr: f64,
    /// Diagnostic only; excluded from the reproducibility guarantee.
    pub wall_seconds: f64,
}

/// Frozen generator-side model for the latent stage: field geometry, iso
/// levels, the seeded plane generator and the shared decoder.
#[derive(Clone, Debug)]
pub struct CoarseModel {
    pub field: ScalarField,
    pub levels: IsoLevels,
    pub generator: CoarseGenerator,
    pub decoder: Mlp,
}

impl CoarseModel {
    pub fn new(
        field: ScalarField,
        levels: IsoLevels,
        generator: CoarseGenerator,
        decoder: Mlp,
    ) -> Result<CoarseModel> {
        if decoder.input_dim() != generator.shape.channels {
            return Err(Error::ShapeMismatch(format!(
                "decoder input {} vs generator channels {}",
                decoder.input_dim(),
                generator.shape.channels
            )));
        }
        if decoder.output_dim() != 4 {
            return Err(Error::ShapeMismatch("decoder must output 4 values (rgb + alpha)".into()));
        }
        Ok(CoarseModel { field, levels, generator, decoder })
    }

    /// Materialize the scene a latent code describes.
    pub fn scene(&self, code: &LatentCode) -> Result<TriPlaneScene> {
        TriPlaneScene::new(
            self.field.clone(),
            self.levels.clone(),
            self.generator.generate(code)?,
            self.decoder.clone(),
        )
    }
}

const MAX_BACKOFFS: usize = 10;

/// Descent driver shared by both stages. Each iteration records the loss at
/// the current parameters, then tries `p - step * grad`, halving the trial
/// step (at most `MAX_BACKOFFS` times) until the candidate's loss does not
/// exceed the recorded one; if every halving fails the parameters stay put.
fn descend<E>(params: &mut Vec<f64>, iterations: usize, step: f64, mut eval: E) -> Result<Vec<LossReport>>
where
    E: FnMut(&[f64], bool) -> Result<(LossReport, Option<Vec<f64>>)>,
{
    let mut reports = Vec::with_capacity(iterations);
    for iter in 0..iterations {
        let (report, grad) = eval(params, true)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: iter });
        }
        let grad = grad.expect("gradient requested from eval");
        // The backoff is per iteration: every step starts from the
        // configured size and halves at most MAX_BACKOFFS times, so one bad
        // region cannot shrink the step for the rest of the run.
        let mut trial = step;
        let mut accepted = None;
        for _ in 0..=MAX_BACKOFFS {
            let cand: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - trial * g).collect();
            let (cand_report, _) = eval(&cand, false)?;
            if cand_report.total.is_finite() && cand_report.total <= report.total {
                accepted = Some(cand);
                break;
            }
            trial *= 0.5;
        }
        if let Some(next) = accepted {
            *params = next;
        }
        reports.push(report);
    }
    Ok(reports)
}

/// Invert a target image into a latent code by descending on
/// `w_pix * MSE + w_lat * ||w - mean||^2` from the generator's mean code.
/// Intersections are solved once up front; the geometry does not depend on
/// the code, and no gradient flows through hit positions.
pub fn fit_latent(
    target: &Image,
    camera_in: &Camera,
    model: &CoarseModel,
    config: &FitConfig,
) -> Result<(LatentCode, FitTrace)> {
    config.validate()?;
    let start = Instant::now();
    let set = intersect_grid(
        &model.field,
        &model.levels,
        camera_in,
        target.width,
        target.height,
        &config.solver,
    )?;
    let mean = model.generator.mean_code();
    let mut data = mean.data.clone();
    let far = camera_in.far;
    let reports = descend(&mut data, config.iterations, config.step, |p, want_grad| {
        let code = LatentCode { layers: mean.layers, dim: mean.dim, data: p.to_vec() };
        latent_eval(model, &set, target, &code, &mean, config, far, want_grad)
    })?;
    let code = LatentCode { layers: mean.layers, dim: mean.dim, data };
    let planes = model.generator.generate(&code)?;
    let frame = taped_forward(&planes, &model.decoder, &set, None, config.background, far)?;
    let final_psnr = psnr(target, &frame.image())?;
    Ok((code, FitTrace { reports, final_psnr, wall_seconds: start.elapsed().as_secs_f64() }))
}

#[allow(clippy::too_many_arguments)]
fn latent_eval(
    model: &CoarseModel,
    set: &IntersectionSet,
    target: &Image,
    code: &LatentCode,
    mean: &LatentCode,
    config: &FitConfig,
    far: f64,
    want_grad: bool,
) -> Result<(LossReport, Option<Vec<f64>>)> {
    let planes = model.generator.generate(code)?;
    let frame = taped_forward(&planes, &model.decoder, set, None, config.background, far)?;
    let rendered = frame.image();
    let (pixel, perc, id) = recon_loss(target, &rendered, None, None)?;
    let lreg = latent_reg(code, mean)?;
    let report = LossReport::new(pixel, perc, id, 0.0, 0.0, lreg, config.weights);
    if !want_grad {
        return Ok((report, None));
    }
    let npx = rendered.pixels.len();
    let mut grad_flat = vec![0.0; model.generator.shape.total_len()];
    for (px, (r, t)) in frame.pixels.iter().zip(rendered.pixels.iter().zip(&target.pixels)) {
        let d_color = mse_pixel_grad(*r, *t, npx, config.weights.pixel);
        backprop_pixel(&model.decoder, px, d_color, config.background, |hit, d_input| {
            planes.scatter_grad(hit.point, d_input, &mut grad_flat);
        });
    }
    let mut grad = model.generator.transpose(&grad_flat)?.data;
    for (g, (w, m)) in grad.iter_mut().zip(code.data.iter().zip(&mean.data)) {
        *g += 2.0 * config.weights.latent * (w - m);
    }
    Ok((report, Some(grad)))
}

/// One sampled novel view, frozen for the whole run: its geometry, the coarse
/// render and the visibility mask derived from coarse normals.
struct NovelView {
    far: f64,
    set: IntersectionSet,
    coarse: Image,
    mask: Vec<bool>,
}

fn voxel_with(proto: &DetailVoxel, data: &[f64]) -> DetailVoxel {
    DetailVoxel {
        camera: proto.camera,
        aspect: proto.aspect,
        width: proto.width,
        height: proto.height,
        depth: proto.depth,
        channels: proto.channels,
        data: data.to_vec(),
    }
}

/// Sample the frozen novel views for one fit run: solved geometry, the
/// coarse render and the frontal-visibility mask from its normals.
fn sample_novel_views(
    scene: &TriPlaneScene,
    camera_in: &Camera,
    width: u32,
    height: u32,
    config: &FitConfig,
) -> Result<Vec<NovelView>> {
    let render_params = RenderParams {
        mode: IntersectMode::Exact,
        solver: config.solver,
        background: config.background,
        background_manifold: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut novel = Vec::with_capacity(config.novel_views);
    for _ in 0..config.novel_views {
        let yaw = rng.gen_range(-config.yaw_range..=config.yaw_range);
        let cam = orbit_camera(camera_in, yaw, 0.0, 0.0);
        let set = intersect_grid(&scene.field, &scene.levels, &cam, width, height, &config.solver)?;
        let gb = render_intersections(scene, &cam, &set, &render_params, None)?;
        let mask = nv_mask(&gb.normal, &gb.degenerate, camera_in.lookat(), config.tau)?;
        novel.push(NovelView { far: cam.far, set, coarse: gb.color, mask });
    }
    Ok(novel)
}

fn reject_conv_upsampler(config: &FitConfig) -> Result<()> {
    if matches!(config.upsampler, Upsampler::Conv(_)) {
        return Err(Error::InvalidArgument(
            "fitting supports only the bilinear upsampler; the learned operator has no backward".into(),
        ));
    }
    Ok(())
}

/// Invert the residual between a target and the frozen coarse scene into a
/// detail voxel. The objective adds the masked novel-view term and the
/// depth-band feature penalty to the reconstruction loss. Novel poses are
/// drawn once per run from the seeded sampler; resampling per iteration
/// would make the recorded losses incomparable across iterations.
pub fn fit_detail(
    target: &Image,
    camera_in: &Camera,
    scene: &TriPlaneScene,
    config: &FitConfig,
) -> Result<(DetailVoxel, FitTrace)> {
    config.validate()?;
    reject_conv_upsampler(config)?;
    let start = Instant::now();
    let (w, h) = (target.width, target.height);
    let cache = build_point_cache(&scene.field, &scene.levels, camera_in, w, h, 4, &config.solver)?;
    let input_set = upsample_cache(&cache);
    let (vw, vh, vd) = config.voxel_dims;
    let proto = DetailVoxel::zeros(*camera_in, w as f64 / h as f64, vw, vh, vd, scene.planes.shape.channels)?;
    let epsilon = config.epsilon.unwrap_or_else(|| proto.slab_width());
    let novel = sample_novel_views(scene, camera_in, w, h, config)?;

    let mut data = proto.data.clone();
    let reports = descend(&mut data, config.iterations, config.step, |p, want_grad| {
        let voxel = voxel_with(&proto, p);
        detail_eval(scene, camera_in, &cache, &input_set, target, &novel, &voxel, epsilon, config, want_grad)
    })?;
    let voxel = voxel_with(&proto, &data);
    let maps = prepare_detail(&voxel, &cache, &config.upsampler)?;
    let frame =
        taped_forward(&scene.planes, &scene.decoder, &input_set, Some(&maps), config.background, camera_in.far)?;
    let final_psnr = psnr(target, &frame.image())?;
    Ok((voxel, FitTrace { reports, final_psnr, wall_seconds: start.elapsed().as_secs_f64() }))
}

#[allow(clippy::too_many_arguments)]
fn detail_eval(
    scene: &TriPlaneScene,
    camera_in: &Camera,
    cache: &ManifoldCache,
    input_set: &IntersectionSet,
    target: &Image,
    novel: &[NovelView],
    voxel: &DetailVoxel,
    epsilon: f64,
    config: &FitConfig,
    want_grad: bool,
) -> Result<(LossReport, Option<Vec<f64>>)> {
    let maps = prepare_detail(voxel, cache, &config.upsampler)?;
    let frame =
        taped_forward(&scene.planes, &scene.decoder, input_set, Some(&maps), config.background, camera_in.far)?;
    let rendered = frame.image();
    let (pixel, perc, id) = recon_loss(target, &rendered, None, None)?;
    let z = frame.z_surf();
    let dreg = depth_reg(input_set, &frame.details, &z, epsilon, config.weights.depth_lambda)?;
    let mut nv_frames = Vec::with_capacity(novel.len());
    let mut nv_total = 0.0;
    for view in novel {
        let f = taped_forward(&scene.planes, &scene.decoder, &view.set, Some(&maps), config.background, view.far)?;
        let img = f.image();
        nv_total += nv_loss(&img, &view.coarse, &view.mask, None)?;
        nv_frames.push((f, img));
    }
    let nv_avg = if novel.is_empty() { 0.0 } else { nv_total / novel.len() as f64 };
    let report = LossReport::new(pixel, perc, id, nv_avg, dreg, 0.0, config.weights);
    if !want_grad {
        return Ok((report, None));
    }

    let channels = voxel.channels;
    let (w, h) = (input_set.width, input_set.height);
    let mut map_grads: Vec<Vec<f64>> = maps.maps.iter().map(|m| vec![0.0; m.data.len()]).collect();

    let npx = rendered.pixels.len();
    for (px, (r, t)) in frame.pixels.iter().zip(rendered.pixels.iter().zip(&target.pixels)) {
        let d_color = mse_pixel_grad(*r, *t, npx, config.weights.pixel);
        backprop_pixel(&scene.decoder, px, d_color, config.background, |hit, d_input| {
            reproject_scatter(camera_in, w, h, channels, hit.point, d_input, &mut map_grads[hit.level]);
        });
    }

    // Depth penalty: d/df of lambda * ||f||^2 on hits outside the band; the
    // band test itself is detached, so z_surf carries no gradient.
    for ((hits, drow), z_surf) in input_set.pixels().iter().zip(&frame.details).zip(&z) {
        for (hit, f) in hits.iter().zip(drow) {
            if hit.valid && (hit.t - z_surf).abs() > epsilon {
                let upstream: Vec<f64> =
                    f.iter().map(|v| 2.0 * config.weights.depth_lambda * v).collect();
                reproject_scatter(camera_in, w, h, channels, hit.point, &upstream, &mut map_grads[hit.level]);
            }
        }
    }

    // Novel-view residuals flow through novel hits back onto the input
    // camera's maps (reprojection always goes through the input camera).
    let nv_w = if novel.is_empty() { 0.0 } else { config.weights.nv / novel.len() as f64 };
    for (view, (f, img)) in novel.iter().zip(&nv_frames) {
        let n = img.pixels.len();
        for ((px, m), (r, c)) in
            f.pixels.iter().zip(&view.mask).zip(img.pixels.iter().zip(&view.coarse.pixels))
        {
            if !*m {
                continue;
            }
            let d_color = mse_pixel_grad(*r, *c, n, nv_w);
            backprop_pixel(&scene.decoder, px, d_color, config.background, |hit, d_input| {
                reproject_scatter(camera_in, w, h, channels, hit.point, d_input, &mut map_grads[hit.level]);
            });
        }
    }

    let low_grads: Vec<Vec<f64>> = map_grads
        .iter()
        .map(|g| upsample_bilinear_transpose(cache.low_w, cache.low_h, channels, g))
        .collect();
    let mut voxel_grad = vec![0.0; voxel.param_len()];
    flatten_manifolds_backward(voxel, cache, &low_grads, &mut voxel_grad);
    Ok((report, Some(voxel_grad)))
}

/// Latent-stage objective at one code: the loss report plus the analytic
/// gradient over the code entries. This is the same forward the optimizer
/// runs; public so external gradient checks can probe it.
pub fn latent_objective(
    target: &Image,
    camera_in: &Camera,
    model: &CoarseModel,
    config: &FitConfig,
    code: &LatentCode,
) -> Result<(LossReport, Vec<f64>)> {
    config.validate()?;
    let set = intersect_grid(
        &model.field,
        &model.levels,
        camera_in,
        target.width,
        target.height,
        &config.solver,
    )?;
    let mean = model.generator.mean_code();
    let (report, grad) = latent_eval(model, &set, target, code, &mean, config, camera_in.far, true)?;
    Ok((report, grad.expect("gradient requested")))
}

/// Detail-stage objective at one voxel state: the loss report plus the
/// analytic gradient over the voxel entries. Novel views are resampled from
/// the config seed, so repeated calls see the same frozen objective.
pub fn detail_objective(
    target: &Image,
    camera_in: &Camera,
    scene: &TriPlaneScene,
    config: &FitConfig,
    voxel: &DetailVoxel,
) -> Result<(LossReport, Vec<f64>)> {
    config.validate()?;
    reject_conv_upsampler(config)?;
    let (w, h) = (target.width, target.height);
    let cache = build_point_cache(&scene.field, &scene.levels, camera_in, w, h, 4, &config.solver)?;
    let input_set = upsample_cache(&cache);
    let epsilon = config.epsilon.unwrap_or_else(|| voxel.slab_width());
    let novel = sample_novel_views(scene, camera_in, w, h, config)?;
    let (report, grad) =
        detail_eval(scene, camera_in, &cache, &input_set, target, &novel, voxel, epsilon, config, true)?;
    Ok((report, grad.expect("gradient requested")))
}

/// Central-difference gradient of an arbitrary objective, one coordinate at
/// a time. Test and acceptance plumbing, not an optimizer component.
pub fn grad_fd_oracle<F>(mut objective: F, params: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let mut p = params.to_vec();
    let mut grad = vec![0.0; p.len()];
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + h;
        let fp = objective(&p)?;
        p[i] = orig - h;
        let fm = objective(&p)?;
        p[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}
