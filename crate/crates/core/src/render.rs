//! Manifold rendering: front-to-back compositing over the ordered ray
//! intersections, expected surface depth, normal maps from occupancy
//! gradients, cached novel-view rasterization, and the texture-strip
//! consistency tool.

use crate::detail::DetailMaps;
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::intersect::{
    intersect_grid, intersect_lowres_upsample, Hit, IntersectMode, IntersectionSet, ManifoldCache,
    RadianceCache, SolverParams,
};
use crate::math::Vec3;
use crate::parallel::par_map;
use crate::radiance::{shade_point, RadianceSample, TriPlaneScene};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB, values expected in [0,1].
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Image {
        Image { width, height, pixels: vec![[0.0; 3]; (width * height) as usize] }
    }

    /// Fills pixels row-major, left to right; the order is part of the
    /// contract so stateful closures stay deterministic.
    pub fn from_fn<F: FnMut(u32, u32) -> [f64; 3]>(width: u32, height: u32, mut f: F) -> Image {
        let mut img = Image::new(width, height);
        for v in 0..height {
            for u in 0..width {
                img.pixels[(v * width + u) as usize] = f(u, v);
            }
        }
        img
    }

    pub fn pixel(&self, u: u32, v: u32) -> [f64; 3] {
        self.pixels[(v * self.width + u) as usize]
    }

    pub fn set_pixel(&mut self, u: u32, v: u32, value: [f64; 3]) {
        self.pixels[(v * self.width + u) as usize] = value;
    }

    /// Mean squared error over all pixels and channels.
    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::ShapeMismatch(format!(
                "image dims {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        let mut acc = 0.0;
        for (a, b) in self.pixels.iter().zip(&other.pixels) {
            for c in 0..3 {
                let d = a[c] - b[c];
                acc += d * d;
            }
        }
        Ok(acc / (3.0 * self.pixels.len() as f64))
    }
}

/// One shaded intersection ready for compositing.
#[derive(Clone, Debug)]
pub struct ShadePoint {
    pub sample: RadianceSample,
    pub t: f64,
}

/// Output of front-to-back compositing along one ray.
#[derive(Clone, Debug)]
pub struct Composite {
    pub color: [f64; 3],
    /// Occupancy-weighted expected depth.
    pub z_surf: f64,
    /// Per-sample weights T_i * alpha_i.
    pub weights: Vec<f64>,
    /// Transmittance left after all samples.
    pub residual: f64,
}

/// Front-to-back alpha compositing. The weight of sample i is
/// alpha_i * prod_{j<i}(1 - alpha_j); weights plus the leftover
/// transmittance always sum to 1.
pub fn composite(points: &[ShadePoint]) -> Result<Composite> {
    let mut prev = f64::NEG_INFINITY;
    for p in points {
        if p.t < prev {
            return Err(Error::UnsortedSamples);
        }
        prev = p.t;
        debug_assert!((0.0..=1.0).contains(&p.sample.alpha), "alpha out of range");
    }
    let mut color = [0.0; 3];
    let mut z_surf = 0.0;
    let mut weights = Vec::with_capacity(points.len());
    let mut trans = 1.0;
    for p in points {
        let w = trans * p.sample.alpha;
        for c in 0..3 {
            color[c] += w * p.sample.color[c];
        }
        z_surf += w * p.t;
        weights.push(w);
        trans *= 1.0 - p.sample.alpha;
    }
    Ok(Composite { color, z_surf, weights, residual: trans })
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Gradients of a composited pixel with respect to each sample.
#[derive(Clone, Debug)]
pub(crate) struct CompositeGrad {
    pub d_color: Vec<[f64; 3]>,
    pub d_alpha: Vec<f64>,
}

/// Backward pass of `composite` plus the background blend
/// `pixel = C + residual * background`, given upstream gradients for the
/// pixel color and z_surf. Division-free so alpha = 1 is safe.
pub(crate) fn composite_backward(
    points: &[ShadePoint],
    d_color: [f64; 3],
    d_z: f64,
    background: [f64; 3],
) -> CompositeGrad {
    let n = points.len();
    let mut t_front = vec![0.0; n];
    let mut trans = 1.0;
    for (i, p) in points.iter().enumerate() {
        t_front[i] = trans;
        trans *= 1.0 - p.sample.alpha;
    }
    // Sensitivity of the outputs to sample k's weight.
    let g: Vec<f64> = points.iter().map(|p| dot3(p.sample.color, d_color) + p.t * d_z).collect();
    let bg_g = dot3(background, d_color);
    let mut out = CompositeGrad { d_color: vec![[0.0; 3]; n], d_alpha: vec![0.0; n] };
    for i in 0..n {
        let w_i = t_front[i] * points[i].sample.alpha;
        for c in 0..3 {
            out.d_color[i][c] = w_i * d_color[c];
        }
        let mut da = t_front[i] * g[i];
        // excl tracks prod_{j<k, j != i}(1 - alpha_j) as k advances.
        let mut excl = t_front[i];
        for k in (i + 1)..n {
            da -= excl * points[k].sample.alpha * g[k];
            excl *= 1.0 - points[k].sample.alpha;
        }
        da -= excl * bg_g;
        out.d_alpha[i] = da;
    }
    out
}

/// Per-pixel render outputs.
#[derive(Clone, Debug)]
pub struct GBuffer {
    pub width: u32,
    pub height: u32,
    pub color: Image,
    pub z_surf: Vec<f64>,
    /// Unit normals, or zero where `degenerate` is set.
    pub normal: Vec<Vec3>,
    pub degenerate: Vec<bool>,
    /// Transmittance left after all hits.
    pub residual: Vec<f64>,
}

impl GBuffer {
    fn from_pixels(width: u32, height: u32, px: Vec<PixelOut>) -> GBuffer {
        let mut color = Image::new(width, height);
        let mut z_surf = Vec::with_capacity(px.len());
        let mut normal = Vec::with_capacity(px.len());
        let mut degenerate = Vec::with_capacity(px.len());
        let mut residual = Vec::with_capacity(px.len());
        for (i, p) in px.into_iter().enumerate() {
            color.pixels[i] = p.color;
            z_surf.push(p.z);
            normal.push(p.normal);
            degenerate.push(p.degenerate);
            residual.push(p.residual);
        }
        GBuffer { width, height, color, z_surf, normal, degenerate, residual }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RenderParams {
    pub mode: IntersectMode,
    pub solver: SolverParams,
    pub background: [f64; 3],
    /// Treat the farthest iso level as opaque backdrop.
    pub background_manifold: bool,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            mode: IntersectMode::Exact,
            solver: SolverParams::default(),
            background: [0.0; 3],
            background_manifold: false,
        }
    }
}

/// One shaded hit: decoded radiance plus the occupancy's spatial gradient.
#[derive(Clone, Debug)]
pub(crate) struct HitShade {
    pub t: f64,
    pub sample: RadianceSample,
    pub alpha_spatial: Vec3,
}

/// Decode every valid hit of one pixel in depth order. With the background
/// manifold enabled, hits on the last level become opaque constants (their
/// occupancy no longer varies in space, so they contribute no normal).
pub(crate) fn shade_hits(
    scene: &TriPlaneScene,
    detail: Option<&DetailMaps>,
    background_manifold: bool,
    hits: &[Hit],
) -> Result<Vec<HitShade>> {
    let last = scene.levels.len() - 1;
    let mut out = Vec::with_capacity(hits.len());
    for h in hits.iter().filter(|h| h.valid) {
        let detail_vec = match detail {
            Some(d) => Some(d.reproject(h.point, h.level)?),
            None => None,
        };
        let (mut sample, mut agrad) =
            shade_point(&scene.planes, &scene.decoder, h.point, detail_vec.as_deref())?;
        if background_manifold && h.level == last {
            sample.alpha = 1.0;
            agrad = Vec3::ZERO;
        }
        out.push(HitShade { t: h.t, sample, alpha_spatial: agrad });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
struct PixelOut {
    color: [f64; 3],
    z: f64,
    normal: Vec3,
    degenerate: bool,
    residual: f64,
}

fn finish_pixel(shades: &[HitShade], far: f64, background: [f64; 3]) -> Result<PixelOut> {
    let points: Vec<ShadePoint> =
        shades.iter().map(|s| ShadePoint { sample: s.sample.clone(), t: s.t }).collect();
    let comp = composite(&points)?;
    debug_assert!(
        (comp.weights.iter().sum::<f64>() + comp.residual - 1.0).abs() < 1e-10,
        "weight sum identity violated"
    );
    let color = [
        comp.color[0] + comp.residual * background[0],
        comp.color[1] + comp.residual * background[1],
        comp.color[2] + comp.residual * background[2],
    ];
    let z = if shades.is_empty() { far } else { comp.z_surf };
    let mut acc = Vec3::ZERO;
    for (w, s) in comp.weights.iter().zip(shades) {
        acc += s.alpha_spatial * *w;
    }
    let eta = acc.length();
    let (normal, degenerate) =
        if eta < 1e-9 { (Vec3::ZERO, true) } else { (acc * (-1.0 / eta), false) };
    Ok(PixelOut { color, z, normal, degenerate, residual: comp.residual })
}

fn check_detail(scene: &TriPlaneScene, detail: Option<&DetailMaps>) -> Result<()> {
    if let Some(d) = detail {
        if d.channels != scene.planes.shape.channels {
            return Err(Error::ShapeMismatch(format!(
                "detail features have {} channels, coarse features {}",
                d.channels, scene.planes.shape.channels
            )));
        }
        if d.levels() != scene.levels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} detail maps for {} iso levels",
                d.levels(),
                scene.levels.len()
            )));
        }
    }
    Ok(())
}

/// Render precomputed intersections. Pixel-parallel; the scene is read-only
/// and every pixel writes its own slot, so results are thread-count
/// independent.
pub fn render_intersections(
    scene: &TriPlaneScene,
    camera: &Camera,
    set: &IntersectionSet,
    params: &RenderParams,
    detail: Option<&DetailMaps>,
) -> Result<GBuffer> {
    check_detail(scene, detail)?;
    let n = (set.width * set.height) as usize;
    let far = camera.far;
    let px: Result<Vec<PixelOut>> = par_map(n, |idx| {
        let shades = shade_hits(scene, detail, params.background_manifold, &set.pixels()[idx])?;
        finish_pixel(&shades, far, params.background)
    })
    .into_iter()
    .collect();
    Ok(GBuffer::from_pixels(set.width, set.height, px?))
}

/// Intersect and shade a full frame.
pub fn render(
    scene: &TriPlaneScene,
    camera: &Camera,
    width: u32,
    height: u32,
    params: &RenderParams,
    detail: Option<&DetailMaps>,
) -> Result<GBuffer> {
    let set = match params.mode {
        IntersectMode::Exact => {
            intersect_grid(&scene.field, &scene.levels, camera, width, height, &params.solver)?
        }
        IntersectMode::LowRes { factor } => intersect_lowres_upsample(
            &scene.field,
            &scene.levels,
            camera,
            width,
            height,
            factor,
            &params.solver,
        )?,
    };
    render_intersections(scene, camera, &set, params, detail)
}

/// Per-pixel unit normals plus degeneracy flags.
pub fn normal_map(
    scene: &TriPlaneScene,
    camera: &Camera,
    width: u32,
    height: u32,
    params: &RenderParams,
    detail: Option<&DetailMaps>,
) -> Result<(Vec<Vec3>, Vec<bool>)> {
    let gb = render(scene, camera, width, height, params, detail)?;
    Ok((gb.normal, gb.degenerate))
}

/// Render every pose and stack one scanline segment per pose, top to bottom.
/// A static scene viewed under continuous motion shows as smooth shear;
/// screen-space texture sticking shows as vertical stripes.
pub fn texture_strip(
    scene: &TriPlaneScene,
    trajectory: &[Camera],
    scanline: (u32, u32, u32),
    width: u32,
    height: u32,
    params: &RenderParams,
    detail: Option<&DetailMaps>,
) -> Result<Image> {
    let (row, col_start, col_end) = scanline;
    if trajectory.is_empty() {
        return Err(Error::InvalidArgument("texture strip needs at least one pose".into()));
    }
    if row >= height || col_end > width || col_start >= col_end {
        return Err(Error::InvalidArgument(format!(
            "scanline row {row} cols {col_start}..{col_end} out of {width}x{height}"
        )));
    }
    let mut strip = Image::new(col_end - col_start, trajectory.len() as u32);
    for (i, pose) in trajectory.iter().enumerate() {
        let gb = render(scene, pose, width, height, params, detail)?;
        for u in col_start..col_end {
            strip.set_pixel(u - col_start, i as u32, gb.color.pixel(u, row));
        }
    }
    Ok(strip)
}

/// 8-bit binary PPM (P6), linear values mapped by round(255 * clamp).
pub fn write_ppm(image: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for px in &image.pixels {
        for c in 0..3 {
            out.push((255.0 * px[c].clamp(0.0, 1.0)).round() as u8);
        }
    }
    out
}

/// Candidate fragment produced by rasterizing one cached cell.
#[derive(Clone, Debug)]
struct Fragment {
    t: f64,
    level: usize,
    ordinal: usize,
    sample: RadianceSample,
    alpha_spatial: Vec3,
}

struct SlotRaster {
    zbuf: Vec<f64>,
    frag: Vec<Option<Fragment>>,
}

/// One cached slot with a ghost node appended past the right and bottom
/// borders, linearly extrapolated from the last two nodes. The upsample path
/// extrapolates border pixels the same way (cell fraction above 1), so the
/// raster footprint covers the same frame region.
struct ExtSlot {
    w: usize,
    h: usize,
    valid: Vec<bool>,
    points: Vec<Vec3>,
    color: Vec<[f64; 3]>,
    alpha: Vec<f64>,
    agrad: Vec<Vec3>,
}

impl ExtSlot {
    fn build(
        grid: &crate::intersect::CacheGrid,
        rg: &crate::intersect::RadianceGrid,
        low_w: usize,
        low_h: usize,
    ) -> ExtSlot {
        let (w, h) = (low_w + (low_w >= 2) as usize, low_h + (low_h >= 2) as usize);
        let mut s = ExtSlot {
            w,
            h,
            valid: vec![false; w * h],
            points: vec![Vec3::ZERO; w * h],
            color: vec![[0.0; 3]; w * h],
            alpha: vec![0.0; w * h],
            agrad: vec![Vec3::ZERO; w * h],
        };
        for y in 0..low_h {
            for x in 0..low_w {
                let src = y * low_w + x;
                let dst = y * w + x;
                s.valid[dst] = grid.valid[src];
                s.points[dst] = grid.points[src];
                s.color[dst] = rg.color[src];
                s.alpha[dst] = rg.alpha[src];
                s.agrad[dst] = rg.alpha_grad[src];
            }
        }
        // Extend rows rightward, then every column (ghost row included)
        // downward; linear in each axis matches bilinear extrapolation.
        if w > low_w {
            for y in 0..low_h {
                s.extrapolate(y * w + low_w, y * w + low_w - 1, y * w + low_w - 2);
            }
        }
        if h > low_h {
            for x in 0..w {
                s.extrapolate(low_h * w + x, (low_h - 1) * w + x, (low_h - 2) * w + x);
            }
        }
        s
    }

    /// dst = 2 * a - b in every channel; valid only if both sources are.
    fn extrapolate(&mut self, dst: usize, a: usize, b: usize) {
        self.valid[dst] = self.valid[a] && self.valid[b];
        self.points[dst] = self.points[a] * 2.0 - self.points[b];
        for c in 0..3 {
            self.color[dst][c] = 2.0 * self.color[a][c] - self.color[b][c];
        }
        self.alpha[dst] = 2.0 * self.alpha[a] - self.alpha[b];
        self.agrad[dst] = self.agrad[a] * 2.0 - self.agrad[b];
    }
}

/// Render a view purely from cached manifold geometry and radiance: each
/// valid low-res cell is split into two triangles, projected through the
/// render camera, and rasterized with barycentric interpolation of point,
/// color, occupancy, and occupancy gradient. No field or decoder calls.
/// Rasterization scatters into a z-buffer, so this path runs sequentially
/// (and is therefore trivially deterministic).
pub fn render_cached(
    cache: &ManifoldCache,
    radiance: &RadianceCache,
    camera: &Camera,
    width: u32,
    height: u32,
    background: [f64; 3],
    background_manifold: bool,
) -> Result<GBuffer> {
    if radiance.slots.len() != cache.slots.len()
        || radiance.slots.iter().zip(&cache.slots).any(|(r, g)| r.len() != g.len())
    {
        return Err(Error::ShapeMismatch("radiance cache does not match geometry cache".into()));
    }
    let npx = (width * height) as usize;
    let mut fragments: Vec<Vec<Fragment>> = vec![Vec::new(); npx];
    for (level, grids) in cache.slots.iter().enumerate() {
        for (ordinal, grid) in grids.iter().enumerate() {
            let rg = &radiance.slots[level][ordinal];
            let ext = ExtSlot::build(grid, rg, cache.low_w as usize, cache.low_h as usize);
            let mut raster =
                SlotRaster { zbuf: vec![f64::INFINITY; npx], frag: vec![None; npx] };
            for cy in 0..ext.h.saturating_sub(1) {
                for cx in 0..ext.w.saturating_sub(1) {
                    let i00 = cy * ext.w + cx;
                    let i10 = i00 + 1;
                    let i01 = i00 + ext.w;
                    let i11 = i01 + 1;
                    if !(ext.valid[i00] && ext.valid[i10] && ext.valid[i01] && ext.valid[i11]) {
                        continue;
                    }
                    for tri in [[i00, i10, i11], [i00, i11, i01]] {
                        raster_triangle(
                            &ext, tri, camera, width, height, level, ordinal, &mut raster,
                        );
                    }
                }
            }
            for (dst, f) in fragments.iter_mut().zip(raster.frag) {
                if let Some(f) = f {
                    dst.push(f);
                }
            }
        }
    }
    let last = cache.slots.len().saturating_sub(1);
    let mut px_out = Vec::with_capacity(npx);
    for frags in fragments.iter_mut() {
        frags.sort_by(|a, b| {
            a.t.total_cmp(&b.t).then(a.level.cmp(&b.level)).then(a.ordinal.cmp(&b.ordinal))
        });
        let shades: Vec<HitShade> = frags
            .iter()
            .map(|f| {
                let mut sample = f.sample.clone();
                let mut agrad = f.alpha_spatial;
                if background_manifold && f.level == last {
                    sample.alpha = 1.0;
                    agrad = Vec3::ZERO;
                }
                HitShade { t: f.t, sample, alpha_spatial: agrad }
            })
            .collect();
        px_out.push(finish_pixel(&shades, camera.far, background)?);
    }
    Ok(GBuffer::from_pixels(width, height, px_out))
}

#[allow(clippy::too_many_arguments)]
fn raster_triangle(
    ext: &ExtSlot,
    idx: [usize; 3],
    camera: &Camera,
    width: u32,
    height: u32,
    level: usize,
    ordinal: usize,
    raster: &mut SlotRaster,
) {
    let mut proj = [[0.0f64; 2]; 3];
    for (k, &i) in idx.iter().enumerate() {
        match camera.project(ext.points[i], width, height) {
            Some((su, sv, _)) => proj[k] = [su, sv],
            None => return,
        }
    }
    let [p1, p2, p3] = proj;
    let denom = (p2[0] - p1[0]) * (p3[1] - p1[1]) - (p3[0] - p1[0]) * (p2[1] - p1[1]);
    if denom.abs() < 1e-12 {
        return;
    }
    let min_u = proj.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    let max_u = proj.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_v = proj.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
    let max_v = proj.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
    let u0 = (min_u - 0.5).floor().max(0.0) as u32;
    let u1 = ((max_u - 0.5).ceil() as i64).clamp(0, width as i64 - 1) as u32;
    let v0 = (min_v - 0.5).floor().max(0.0) as u32;
    let v1 = ((max_v - 0.5).ceil() as i64).clamp(0, height as i64 - 1) as u32;
    if u0 > u1 || v0 > v1 {
        return;
    }
    for v in v0..=v1 {
        let py = v as f64 + 0.5;
        for u in u0..=u1 {
            let px = u as f64 + 0.5;
            let l2 = ((px - p1[0]) * (p3[1] - p1[1]) - (p3[0] - p1[0]) * (py - p1[1])) / denom;
            let l3 = ((p2[0] - p1[0]) * (py - p1[1]) - (px - p1[0]) * (p2[1] - p1[1])) / denom;
            let l1 = 1.0 - l2 - l3;
            if l1 < -1e-12 || l2 < -1e-12 || l3 < -1e-12 {
                continue;
            }
            let lam = [l1, l2, l3];
            let mut point = Vec3::ZERO;
            let mut color = [0.0; 3];
            let mut alpha = 0.0;
            let mut agrad = Vec3::ZERO;
            for k in 0..3 {
                let i = idx[k];
                point += ext.points[i] * lam[k];
                for c in 0..3 {
                    color[c] += lam[k] * ext.color[i][c];
                }
                alpha += lam[k] * ext.alpha[i];
                agrad += ext.agrad[i] * lam[k];
            }
            let ray = camera.ray_for_pixel_centered(px, py, width, height);
            let t = (point - ray.origin).dot(ray.direction);
            if t < camera.near || t > camera.far {
                continue;
            }
            let slot = (v * width + u) as usize;
            if t < raster.zbuf[slot] {
                raster.zbuf[slot] = t;
                raster.frag[slot] = Some(Fragment {
                    t,
                    level,
                    ordinal,
                    sample: RadianceSample { color, alpha: alpha.clamp(0.0, 1.0) },
                    alpha_spatial: agrad,
                });
            }
        }
    }
}
