//! Input-specific detail features: a feature voxel aligned with the input
//! camera's frustum, flattened onto each manifold as a low-res 2D map,
//! upsampled 4x, and reprojected onto manifold points during shading. The
//! whole path is a pure function of the voxel, so detail lives in 3D and is
//! consistent across render cameras by construction.

use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraMode};
use crate::intersect::ManifoldCache;
use crate::math::Vec3;

/// Feature grid spanning the input camera's frustum: lateral axes are
/// angle-normalized image coordinates in [-1,1], the depth axis covers
/// [near, far] in camera-space z, corner-aligned nodes along every axis.
#[derive(Clone, Debug)]
pub struct DetailVoxel {
    pub camera: Camera,
    /// Image aspect (width/height) the frustum covers laterally.
    pub aspect: f64,
    pub width: u32,
    pub height: u32,
    pub depth: u32,
    pub channels: usize,
    /// Layout: `((k*height + j)*width + i)*channels + c` with i lateral,
    /// j vertical, k depth slab.
    pub data: Vec<f64>,
}

impl DetailVoxel {
    pub fn new(
        camera: Camera,
        aspect: f64,
        width: u32,
        height: u32,
        depth: u32,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<DetailVoxel> {
        if width < 2 || height < 2 || depth < 2 {
            return Err(Error::InvalidArgument("detail voxel dims must be >= 2".into()));
        }
        if channels == 0 {
            return Err(Error::InvalidArgument("detail voxel needs >= 1 channel".into()));
        }
        if !(aspect.is_finite() && aspect > 0.0) {
            return Err(Error::InvalidArgument("voxel aspect must be positive".into()));
        }
        let expect = (width * height * depth) as usize * channels;
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "voxel data length {} does not match {}x{}x{}x{}",
                data.len(),
                width,
                height,
                depth,
                channels
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("voxel features must be finite".into()));
        }
        Ok(DetailVoxel { camera, aspect, width, height, depth, channels, data })
    }

    pub fn zeros(
        camera: Camera,
        aspect: f64,
        width: u32,
        height: u32,
        depth: u32,
        channels: usize,
    ) -> Result<DetailVoxel> {
        let n = (width * height * depth) as usize * channels;
        DetailVoxel::new(camera, aspect, width, height, depth, channels, vec![0.0; n])
    }

    pub fn param_len(&self) -> usize {
        self.data.len()
    }

    /// Depth extent of one slab; the default band width for the depth
    /// regularizer.
    pub fn slab_width(&self) -> f64 {
        (self.camera.far - self.camera.near) / self.depth as f64
    }

    fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        ((k * self.height as usize + j) * self.width as usize + i) * self.channels
    }
}

/// Grid-space coordinates of a world point, or `None` outside the frustum.
struct VoxelCoords {
    cell: [usize; 3],
    frac: [f64; 3],
}

fn voxel_coords(voxel: &DetailVoxel, x: Vec3) -> Option<VoxelCoords> {
    let cam = voxel.camera.world_to_cam(x);
    let (nx, ny) = match voxel.camera.mode {
        CameraMode::Pinhole => {
            if cam.z <= 0.0 {
                return None;
            }
            let th = (0.5 * voxel.camera.fov_y).tan();
            (cam.x / (cam.z * th * voxel.aspect), cam.y / (cam.z * th))
        }
        CameraMode::Orthographic => {
            let hh = voxel.camera.ortho_half_height;
            (cam.x / (hh * voxel.aspect), cam.y / hh)
        }
    };
    if !(-1.0..=1.0).contains(&nx) || !(-1.0..=1.0).contains(&ny) {
        return None;
    }
    if cam.z < voxel.camera.near || cam.z > voxel.camera.far {
        return None;
    }
    let fz = (cam.z - voxel.camera.near) / (voxel.camera.far - voxel.camera.near);
    let g = [
        0.5 * (nx + 1.0) * (voxel.width - 1) as f64,
        0.5 * (ny + 1.0) * (voxel.height - 1) as f64,
        fz * (voxel.depth - 1) as f64,
    ];
    let dims = [voxel.width as usize, voxel.height as usize, voxel.depth as usize];
    let mut cell = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let c = (g[a].floor() as usize).min(dims[a] - 2);
        cell[a] = c;
        frac[a] = (g[a] - c as f64).clamp(0.0, 1.0);
    }
    Some(VoxelCoords { cell, frac })
}

/// The 8 trilinear corner offsets with their weights.
fn trilinear_corners(frac: [f64; 3]) -> [(usize, usize, usize, f64); 8] {
    let [fx, fy, fz] = frac;
    let mut out = [(0usize, 0usize, 0usize, 0.0f64); 8];
    let mut n = 0;
    for dz in 0..2usize {
        let wz = if dz == 0 { 1.0 - fz } else { fz };
        for dy in 0..2usize {
            let wy = if dy == 0 { 1.0 - fy } else { fy };
            for dx in 0..2usize {
                let wx = if dx == 0 { 1.0 - fx } else { fx };
                out[n] = (dx, dy, dz, wx * wy * wz);
                n += 1;
            }
        }
    }
    out
}

/// Trilinear sample of the voxel at a world point. Outside the frustum the
/// feature is zero and `inside` is false.
pub fn sample_voxel(voxel: &DetailVoxel, x: Vec3) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; voxel.channels];
    let coords = match voxel_coords(voxel, x) {
        Some(c) => c,
        None => return (out, false),
    };
    for (dx, dy, dz, w) in trilinear_corners(coords.frac) {
        let base = voxel.node_index(coords.cell[0] + dx, coords.cell[1] + dy, coords.cell[2] + dz);
        for c in 0..voxel.channels {
            out[c] += w * voxel.data[base + c];
        }
    }
    (out, true)
}

/// Adjoint of `sample_voxel` in the voxel entries: accumulates
/// `upstream[c] * weight` into the 8 corner slots. No-op outside the frustum.
pub(crate) fn scatter_voxel_grad(voxel: &DetailVoxel, x: Vec3, upstream: &[f64], grad: &mut [f64]) {
    debug_assert_eq!(grad.len(), voxel.data.len());
    debug_assert_eq!(upstream.len(), voxel.channels);
    let coords = match voxel_coords(voxel, x) {
        Some(c) => c,
        None => return,
    };
    for (dx, dy, dz, w) in trilinear_corners(coords.frac) {
        if w == 0.0 {
            continue;
        }
        let base = voxel.node_index(coords.cell[0] + dx, coords.cell[1] + dy, coords.cell[2] + dz);
        for c in 0..voxel.channels {
            grad[base + c] += w * upstream[c];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapResolution {
    Low,
    High,
}

/// Per-manifold 2D feature map parameterized by the input camera's pixel
/// grid: node (i, j) of a high-res map sits at pixel center (i+0.5, j+0.5);
/// a low-res map's node (i, j) sits at pixel (factor*i, factor*j).
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldFeatureMap {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub resolution: MapResolution,
    /// Layout: `(j*width + i)*channels + c`.
    pub data: Vec<f64>,
}

impl ManifoldFeatureMap {
    pub fn zeros(width: u32, height: u32, channels: usize, resolution: MapResolution) -> ManifoldFeatureMap {
        ManifoldFeatureMap {
            width,
            height,
            channels,
            resolution,
            data: vec![0.0; (width * height) as usize * channels],
        }
    }

    pub fn node(&self, i: usize, j: usize) -> &[f64] {
        let base = (j * self.width as usize + i) * self.channels;
        &self.data[base..base + self.channels]
    }
}

/// Sample the voxel at every cached ordinal-0 intersection point of every
/// level; rays without a hit get a zero feature row.
pub fn flatten_manifolds(voxel: &DetailVoxel, cache: &ManifoldCache) -> Result<Vec<ManifoldFeatureMap>> {
    if voxel.camera != cache.camera {
        return Err(Error::CameraMismatch(
            "detail voxel and manifold cache were built from different cameras".into(),
        ));
    }
    let mut maps = Vec::with_capacity(cache.levels());
    for level in 0..cache.levels() {
        let mut map =
            ManifoldFeatureMap::zeros(cache.low_w, cache.low_h, voxel.channels, MapResolution::Low);
        if let Some(grid) = cache.nearest_grid(level) {
            for idx in 0..grid.points.len() {
                if !grid.valid[idx] {
                    continue;
                }
                let (f, _) = sample_voxel(voxel, grid.points[idx]);
                map.data[idx * voxel.channels..(idx + 1) * voxel.channels].copy_from_slice(&f);
            }
        }
        maps.push(map);
    }
    Ok(maps)
}

/// Adjoint of `flatten_manifolds`: routes per-node map gradients back into
/// voxel entries through the trilinear weights at the cached points.
pub(crate) fn flatten_manifolds_backward(
    voxel: &DetailVoxel,
    cache: &ManifoldCache,
    map_grads: &[Vec<f64>],
    voxel_grad: &mut [f64],
) {
    for (level, grad) in map_grads.iter().enumerate() {
        let grid = match cache.nearest_grid(level) {
            Some(g) => g,
            None => continue,
        };
        for idx in 0..grid.points.len() {
            if !grid.valid[idx] {
                continue;
            }
            let row = &grad[idx * voxel.channels..(idx + 1) * voxel.channels];
            scatter_voxel_grad(voxel, grid.points[idx], row, voxel_grad);
        }
    }
}

/// 3x3 convolution with zero padding, stride 1.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Layout: `((o*in_channels + i)*3 + ky)*3 + kx`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Conv2d> {
        if weights.len() != out_channels * in_channels * 9 || bias.len() != out_channels {
            return Err(Error::ShapeMismatch("conv weight/bias length mismatch".into()));
        }
        Ok(Conv2d { in_channels, out_channels, weights, bias })
    }

    /// Kernel that reproduces its input exactly (center tap 1).
    pub fn identity(channels: usize) -> Conv2d {
        let mut weights = vec![0.0; channels * channels * 9];
        for c in 0..channels {
            weights[((c * channels + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        Conv2d { in_channels: channels, out_channels: channels, weights, bias: vec![0.0; channels] }
    }

    fn apply(&self, width: usize, height: usize, data: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; width * height * self.out_channels];
        for y in 0..height {
            for x in 0..width {
                for o in 0..self.out_channels {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_channels {
                        for ky in 0..3usize {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= height as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let sx = x as isize + kx as isize - 1;
                                if sx < 0 || sx >= width as isize {
                                    continue;
                                }
                                let w = self.weights[((o * self.in_channels + i) * 3 + ky) * 3 + kx];
                                acc += w * data[(sy as usize * width + sx as usize) * self.in_channels + i];
                            }
                        }
                    }
                    out[(y * width + x) * self.out_channels + o] = acc;
                }
            }
        }
        out
    }
}

/// One super-resolution block: two convolutions followed by the 2x doubling.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

/// Learned upsampler weights: exactly two blocks for the 4x operator.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub blocks: Vec<ConvBlock>,
}

#[derive(Clone, Debug)]
pub enum Upsampler {
    Bilinear,
    Conv(ConvStack),
}

/// Doubling along one axis: output node q sits at input coordinate q/2, so
/// even nodes reproduce the originals and the last node extrapolates the
/// border cell linearly.
fn axis_coords(q: usize, n_in: usize) -> (usize, f64) {
    let g = q as f64 * 0.5;
    let cell = (g.floor() as usize).min(n_in - 2);
    (cell, g - cell as f64)
}

fn bilinear_x2(map: &ManifoldFeatureMap) -> Result<ManifoldFeatureMap> {
    let (w, h, c) = (map.width as usize, map.height as usize, map.channels);
    if w < 2 || h < 2 {
        return Err(Error::InvalidArgument("upsampling needs maps at least 2x2".into()));
    }
    let (ow, oh) = (2 * w, 2 * h);
    let mut out = vec![0.0; ow * oh * c];
    for qy in 0..oh {
        let (cy, fy) = axis_coords(qy, h);
        for qx in 0..ow {
            let (cx, fx) = axis_coords(qx, w);
            let corners = [
                (cx, cy, (1.0 - fx) * (1.0 - fy)),
                (cx + 1, cy, fx * (1.0 - fy)),
                (cx, cy + 1, (1.0 - fx) * fy),
                (cx + 1, cy + 1, fx * fy),
            ];
            let base = (qy * ow + qx) * c;
            for (sx, sy, wgt) in corners {
                if wgt == 0.0 {
                    continue;
                }
                let src = (sy * w + sx) * c;
                for ch in 0..c {
                    out[base + ch] += wgt * map.data[src + ch];
                }
            }
        }
    }
    Ok(ManifoldFeatureMap {
        width: 2 * map.width,
        height: 2 * map.height,
        channels: c,
        resolution: map.resolution,
        data: out,
    })
}

/// Adjoint of `bilinear_x2`: high-res cotangent in, low-res gradient out.
fn bilinear_x2_transpose(low_w: usize, low_h: usize, channels: usize, d_hi: &[f64]) -> Vec<f64> {
    let (ow, oh) = (2 * low_w, 2 * low_h);
    debug_assert_eq!(d_hi.len(), ow * oh * channels);
    let mut out = vec![0.0; low_w * low_h * channels];
    for qy in 0..oh {
        let (cy, fy) = axis_coords(qy, low_h);
        for qx in 0..ow {
            let (cx, fx) = axis_coords(qx, low_w);
            let corners = [
                (cx, cy, (1.0 - fx) * (1.0 - fy)),
                (cx + 1, cy, fx * (1.0 - fy)),
                (cx, cy + 1, (1.0 - fx) * fy),
                (cx + 1, cy + 1, fx * fy),
            ];
            let base = (qy * ow + qx) * channels;
            for (sx, sy, wgt) in corners {
                if wgt == 0.0 {
                    continue;
                }
                let dst = (sy * low_w + sx) * channels;
                for ch in 0..channels {
                    out[dst + ch] += wgt * d_hi[base + ch];
                }
            }
        }
    }
    out
}

/// 4x super-resolution as two doubling stages. The bilinear operator keeps
/// original samples exact; the conv operator runs conv, conv, double per
/// block with supplied weights.
pub fn upsample(map: &ManifoldFeatureMap, operator: &Upsampler, factor: u32) -> Result<ManifoldFeatureMap> {
    if factor != 4 {
        return Err(Error::InvalidArgument(format!("unsupported upsample factor {factor}, only 4 is supported")));
    }
    let mut current = map.clone();
    match operator {
        Upsampler::Bilinear => {
            for _ in 0..2 {
                current = bilinear_x2(&current)?;
            }
        }
        Upsampler::Conv(stack) => {
            if stack.blocks.len() != 2 {
                return Err(Error::InvalidArgument("conv upsampler needs exactly 2 blocks".into()));
            }
            for block in &stack.blocks {
                for conv in [&block.conv1, &block.conv2] {
                    if conv.in_channels != current.channels {
                        return Err(Error::ShapeMismatch(format!(
                            "conv expects {} channels, map has {}",
                            conv.in_channels, current.channels
                        )));
                    }
                    current.data = conv.apply(current.width as usize, current.height as usize, &current.data);
                    current.channels = conv.out_channels;
                }
                current = bilinear_x2(&current)?;
            }
        }
    }
    current.resolution = MapResolution::High;
    Ok(current)
}

/// Adjoint of the bilinear 4x upsample (the only operator the fit stage
/// differentiates through).
pub(crate) fn upsample_bilinear_transpose(low_w: u32, low_h: u32, channels: usize, d_hi: &[f64]) -> Vec<f64> {
    let mid = bilinear_x2_transpose(2 * low_w as usize, 2 * low_h as usize, channels, d_hi);
    bilinear_x2_transpose(low_w as usize, low_h as usize, channels, &mid)
}

/// Continuous map coordinates of a world point seen through the input
/// camera, or `None` outside the image (or behind the camera). The half
/// pixel beyond the border nodes clamps to the edge.
fn map_coords(camera: &Camera, width: u32, height: u32, x: Vec3) -> Option<(usize, usize, f64, f64)> {
    let (su, sv, _) = camera.project(x, width, height)?;
    if !(0.0..=width as f64).contains(&su) || !(0.0..=height as f64).contains(&sv) {
        return None;
    }
    let gx = (su - 0.5).clamp(0.0, (width - 1) as f64);
    let gy = (sv - 0.5).clamp(0.0, (height - 1) as f64);
    let cx = (gx.floor() as usize).min(width as usize - 2);
    let cy = (gy.floor() as usize).min(height as usize - 2);
    Some((cx, cy, gx - cx as f64, gy - cy as f64))
}

/// Bilinearly sample a high-res manifold map at the projection of `x`
/// through the input camera; zero outside the image. This is the detail
/// feature added to the coarse feature before decoding.
pub fn reproject(maps_hr: &[ManifoldFeatureMap], camera_in: &Camera, x: Vec3, level_index: usize) -> Result<Vec<f64>> {
    let map = maps_hr.get(level_index).ok_or_else(|| {
        Error::ShapeMismatch(format!("no detail map for level {level_index}"))
    })?;
    let mut out = vec![0.0; map.channels];
    let (cx, cy, fx, fy) = match map_coords(camera_in, map.width, map.height, x) {
        Some(c) => c,
        None => return Ok(out),
    };
    let w = map.width as usize;
    let corners = [
        (cx, cy, (1.0 - fx) * (1.0 - fy)),
        (cx + 1, cy, fx * (1.0 - fy)),
        (cx, cy + 1, (1.0 - fx) * fy),
        (cx + 1, cy + 1, fx * fy),
    ];
    for (sx, sy, wgt) in corners {
        if wgt == 0.0 {
            continue;
        }
        let base = (sy * w + sx) * map.channels;
        for c in 0..map.channels {
            out[c] += wgt * map.data[base + c];
        }
    }
    Ok(out)
}

/// Adjoint of `reproject` in the map entries.
pub(crate) fn reproject_scatter(
    camera_in: &Camera,
    width: u32,
    height: u32,
    channels: usize,
    x: Vec3,
    upstream: &[f64],
    grad: &mut [f64],
) {
    let (cx, cy, fx, fy) = match map_coords(camera_in, width, height, x) {
        Some(c) => c,
        None => return,
    };
    let w = width as usize;
    let corners = [
        (cx, cy, (1.0 - fx) * (1.0 - fy)),
        (cx + 1, cy, fx * (1.0 - fy)),
        (cx, cy + 1, (1.0 - fx) * fy),
        (cx + 1, cy + 1, fx * fy),
    ];
    for (sx, sy, wgt) in corners {
        if wgt == 0.0 {
            continue;
        }
        let base = (sy * w + sx) * channels;
        for c in 0..channels {
            grad[base + c] += wgt * upstream[c];
        }
    }
}

/// High-res detail maps ready for shading, tied to the input camera that
/// parameterizes them.
#[derive(Clone, Debug)]
pub struct DetailMaps {
    pub camera: Camera,
    pub channels: usize,
    pub maps: Vec<ManifoldFeatureMap>,
}

impl DetailMaps {
    pub fn reproject(&self, x: Vec3, level_index: usize) -> Result<Vec<f64>> {
        reproject(&self.maps, &self.camera, x, level_index)
    }

    pub fn levels(&self) -> usize {
        self.maps.len()
    }
}

/// Flatten + upsample in one step. The cache must subsample by exactly the
/// upsample factor 4 so the high-res maps land on the input pixel grid.
pub fn prepare_detail(voxel: &DetailVoxel, cache: &ManifoldCache, operator: &Upsampler) -> Result<DetailMaps> {
    if cache.factor != 4 {
        return Err(Error::FactorMismatch { factor: cache.factor, width: cache.width, height: cache.height });
    }
    let low = flatten_manifolds(voxel, cache)?;
    let mut maps = Vec::with_capacity(low.len());
    for m in &low {
        let hi = upsample(m, operator, 4)?;
        if hi.channels != voxel.channels {
            return Err(Error::ShapeMismatch(format!(
                "upsampler changed channel count {} -> {}",
                voxel.channels, hi.channels
            )));
        }
        if hi.width != cache.width || hi.height != cache.height {
            return Err(Error::ShapeMismatch(format!(
                "high-res map {}x{} does not cover the {}x{} image",
                hi.width, hi.height, cache.width, cache.height
            )));
        }
        maps.push(hi);
    }
    Ok(DetailMaps { camera: cache.camera, channels: voxel.channels, maps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{IsoLevels, ScalarField};
    use crate::geometry::look_at_rotation;
    use crate::intersect::{build_point_cache, SolverParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_camera() -> Camera {
        Camera::pinhole(Vec3::new(0.0, 0.0, -3.0), look_at_rotation(Vec3::new(0.0, 0.0, -3.0), Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0)), 0.8, 0.5, 8.0).unwrap()
    }

    fn seeded_voxel(camera: Camera, seed: u64) -> DetailVoxel {
        let (w, h, d, c) = (5u32, 4u32, 3u32, 2usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..(w * h * d) as usize * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DetailVoxel::new(camera, 1.0, w, h, d, c, data).unwrap()
    }

    /// World point at exact grid node (i, j, k).
    fn node_point(voxel: &DetailVoxel, i: u32, j: u32, k: u32) -> Vec3 {
        let nx = 2.0 * i as f64 / (voxel.width - 1) as f64 - 1.0;
        let ny = 2.0 * j as f64 / (voxel.height - 1) as f64 - 1.0;
        let z = voxel.camera.near
            + (voxel.camera.far - voxel.camera.near) * k as f64 / (voxel.depth - 1) as f64;
        let th = (0.5 * voxel.camera.fov_y).tan();
        voxel.camera.cam_to_world(Vec3::new(nx * th * voxel.aspect * z, ny * th * z, z))
    }

    #[test]
    fn node_points_return_stored_features() {
        let voxel = seeded_voxel(test_camera(), 7);
        for (i, j, k) in [(0, 0, 0), (4, 3, 2), (2, 1, 1), (0, 3, 2)] {
            let x = node_point(&voxel, i, j, k);
            let (f, inside) = sample_voxel(&voxel, x);
            assert!(inside);
            let base = voxel.node_index(i as usize, j as usize, k as usize);
            for c in 0..voxel.channels {
                assert!(
                    (f[c] - voxel.data[base + c]).abs() < 1e-9,
                    "node ({i},{j},{k}) channel {c}: {} vs {}",
                    f[c],
                    voxel.data[base + c]
                );
            }
        }
    }

    #[test]
    fn outside_frustum_is_zero() {
        let voxel = seeded_voxel(test_camera(), 1);
        let behind = voxel.camera.position - Vec3::new(0.0, 0.0, 1.0);
        let (f, inside) = sample_voxel(&voxel, behind);
        assert!(!inside);
        assert!(f.iter().all(|v| *v == 0.0));
        // Closer than the near plane.
        let near_miss = voxel.camera.cam_to_world(Vec3::new(0.0, 0.0, 0.25));
        assert!(!sample_voxel(&voxel, near_miss).1);
        // Laterally out of the frustum at mid depth.
        let wide = voxel.camera.cam_to_world(Vec3::new(10.0, 0.0, 3.0));
        assert!(!sample_voxel(&voxel, wide).1);
    }

    /// Independent trilinear oracle: per-axis weight vectors, full loop.
    fn trilinear_oracle(voxel: &DetailVoxel, cell: [usize; 3], frac: [f64; 3]) -> Vec<f64> {
        let mut out = vec![0.0; voxel.channels];
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = (if dx == 0 { 1.0 - frac[0] } else { frac[0] })
                        * (if dy == 0 { 1.0 - frac[1] } else { frac[1] })
                        * (if dz == 0 { 1.0 - frac[2] } else { frac[2] });
                    let base = voxel.node_index(cell[0] + dx, cell[1] + dy, cell[2] + dz);
                    for c in 0..voxel.channels {
                        out[c] += w * voxel.data[base + c];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn interior_samples_match_trilinear_oracle() {
        let voxel = seeded_voxel(test_camera(), 11);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let nx = rng.gen_range(-0.999..0.999);
            let ny = rng.gen_range(-0.999..0.999);
            let z = rng.gen_range(voxel.camera.near * 1.001..voxel.camera.far * 0.999);
            let th = (0.5 * voxel.camera.fov_y).tan();
            let x = voxel.camera.cam_to_world(Vec3::new(nx * th * z, ny * th * z, z));
            let (f, inside) = sample_voxel(&voxel, x);
            assert!(inside);
            let coords = voxel_coords(&voxel, x).unwrap();
            let expect = trilinear_oracle(&voxel, coords.cell, coords.frac);
            for c in 0..voxel.channels {
                assert!((f[c] - expect[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn voxel_scatter_is_adjoint_of_sampling() {
        let camera = test_camera();
        let voxel = seeded_voxel(camera, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let z = rng.gen_range(0.6..7.0);
            let th = (0.5 * camera.fov_y).tan();
            let x = camera.cam_to_world(Vec3::new(
                rng.gen_range(-0.9..0.9) * th * z,
                rng.gen_range(-0.9..0.9) * th * z,
                z,
            ));
            let upstream: Vec<f64> = (0..voxel.channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut grad = vec![0.0; voxel.data.len()];
            scatter_voxel_grad(&voxel, x, &upstream, &mut grad);
            // <sample(data), upstream> is linear in data, so its value must
            // equal <data, scatter(upstream)> exactly up to roundoff.
            let (f, _) = sample_voxel(&voxel, x);
            let lhs: f64 = f.iter().zip(&upstream).map(|(a, b)| a * b).sum();
            let rhs: f64 = voxel.data.iter().zip(&grad).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
        }
    }

    fn plane_scene_cache(camera: &Camera, w: u32, h: u32, factor: u32) -> ManifoldCache {
        // Fronto-parallel plane z=0 hit by every ray from the -z camera.
        let field = ScalarField::plane(Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let levels = IsoLevels::new(vec![0.0]).unwrap();
        build_point_cache(&field, &levels, camera, w, h, factor, &SolverParams::default()).unwrap()
    }

    #[test]
    fn flatten_matches_pointwise_recomputation() {
        let camera = test_camera();
        let cache = plane_scene_cache(&camera, 16, 16, 4);
        let voxel = seeded_voxel(camera, 5);
        let maps = flatten_manifolds(&voxel, &cache).unwrap();
        assert_eq!(maps.len(), 1);
        let grid = cache.nearest_grid(0).unwrap();
        for j in 0..cache.low_h as usize {
            for i in 0..cache.low_w as usize {
                let idx = j * cache.low_w as usize + i;
                assert!(grid.valid[idx]);
                let (expect, _) = sample_voxel(&voxel, grid.points[idx]);
                assert_eq!(maps[0].node(i, j), &expect[..]);
            }
        }
    }

    #[test]
    fn flatten_constant_voxel_gives_constant_maps() {
        let camera = test_camera();
        let cache = plane_scene_cache(&camera, 16, 16, 4);
        let mut voxel = DetailVoxel::zeros(camera, 1.0, 4, 4, 3, 2).unwrap();
        for (i, v) in voxel.data.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 0.75 } else { -0.25 };
        }
        let maps = flatten_manifolds(&voxel, &cache).unwrap();
        for j in 0..cache.low_h as usize {
            for i in 0..cache.low_w as usize {
                let f = maps[0].node(i, j);
                assert!((f[0] - 0.75).abs() < 1e-12 && (f[1] + 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flatten_rejects_foreign_camera() {
        let camera = test_camera();
        let cache = plane_scene_cache(&camera, 16, 16, 4);
        let other = Camera::pinhole(Vec3::new(0.0, 0.1, -3.0), camera.rotation, 0.8, 0.5, 8.0).unwrap();
        let voxel = seeded_voxel(other, 9);
        assert!(matches!(flatten_manifolds(&voxel, &cache), Err(Error::CameraMismatch(_))));
    }

    fn ramp_map(w: u32, h: u32) -> ManifoldFeatureMap {
        let mut m = ManifoldFeatureMap::zeros(w, h, 1, MapResolution::Low);
        for j in 0..h as usize {
            for i in 0..w as usize {
                m.data[j * w as usize + i] = 2.0 * i as f64 - 3.0 * j as f64 + 0.5;
            }
        }
        m
    }

    #[test]
    fn bilinear_upsample_preserves_originals_and_ramps() {
        let low = ramp_map(4, 4);
        let hi = upsample(&low, &Upsampler::Bilinear, 4).unwrap();
        assert_eq!((hi.width, hi.height), (16, 16));
        assert_eq!(hi.resolution, MapResolution::High);
        // Original nodes live at multiples of 4.
        for j in 0..4usize {
            for i in 0..4usize {
                assert_eq!(hi.node(4 * i, 4 * j)[0], low.node(i, j)[0]);
            }
        }
        // The source is affine in (i, j), so every high-res node (including
        // the extrapolated border) must reproduce it exactly: node q sits at
        // low coordinate q/4.
        for qj in 0..16usize {
            for qi in 0..16usize {
                let expect = 2.0 * (qi as f64 / 4.0) - 3.0 * (qj as f64 / 4.0) + 0.5;
                assert!(
                    (hi.node(qi, qj)[0] - expect).abs() < 1e-12,
                    "node ({qi},{qj}): {} vs {expect}",
                    hi.node(qi, qj)[0]
                );
            }
        }
    }

    #[test]
    fn unsupported_upsample_factor_errors() {
        let low = ramp_map(4, 4);
        assert!(upsample(&low, &Upsampler::Bilinear, 2).is_err());
    }

    #[test]
    fn identity_conv_stack_matches_bilinear() {
        let low = ramp_map(5, 3);
        let stack = ConvStack {
            blocks: vec![
                ConvBlock { conv1: Conv2d::identity(1), conv2: Conv2d::identity(1) },
                ConvBlock { conv1: Conv2d::identity(1), conv2: Conv2d::identity(1) },
            ],
        };
        let a = upsample(&low, &Upsampler::Bilinear, 4).unwrap();
        let b = upsample(&low, &Upsampler::Conv(stack), 4).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn constant_map_stays_constant_under_both_operators() {
        let mut low = ManifoldFeatureMap::zeros(4, 4, 2, MapResolution::Low);
        for px in low.data.chunks_mut(2) {
            px[0] = 0.3;
            px[1] = -0.7;
        }
        let stack = ConvStack {
            blocks: vec![
                ConvBlock { conv1: Conv2d::identity(2), conv2: Conv2d::identity(2) },
                ConvBlock { conv1: Conv2d::identity(2), conv2: Conv2d::identity(2) },
            ],
        };
        for op in [Upsampler::Bilinear, Upsampler::Conv(stack)] {
            let hi = upsample(&low, &op, 4).unwrap();
            for px in hi.data.chunks(2) {
                assert!((px[0] - 0.3).abs() < 1e-12 && (px[1] + 0.7).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn upsample_transpose_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (w, h, c) = (4u32, 3u32, 2usize);
        let mut low = ManifoldFeatureMap::zeros(w, h, c, MapResolution::Low);
        for v in low.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let hi = upsample(&low, &Upsampler::Bilinear, 4).unwrap();
        let cot: Vec<f64> = (0..hi.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let back = upsample_bilinear_transpose(w, h, c, &cot);
        let lhs: f64 = hi.data.iter().zip(&cot).map(|(a, b)| a * b).sum();
        let rhs: f64 = low.data.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn reproject_recovers_map_values_at_cached_rays() {
        let camera = test_camera();
        let cache = plane_scene_cache(&camera, 16, 16, 4);
        let voxel = seeded_voxel(camera, 21);
        let maps = prepare_detail(&voxel, &cache, &Upsampler::Bilinear).unwrap();
        let grid = cache.nearest_grid(0).unwrap();
        for j in 0..cache.low_h as usize {
            for i in 0..cache.low_w as usize {
                let idx = j * cache.low_w as usize + i;
                let x = grid.points[idx];
                let got = maps.reproject(x, 0).unwrap();
                // The cached point of low node (i, j) projects back to pixel
                // (4i, 4j), where the upsampled map preserved the flattened
                // feature; reproject must close the loop.
                let expect = maps.maps[0].node(4 * i, 4 * j);
                for c in 0..voxel.channels {
                    assert!(
                        (got[c] - expect[c]).abs() < 1e-9,
                        "node ({i},{j}) channel {c}: {} vs {}",
                        got[c],
                        expect[c]
                    );
                }
                let (flat, _) = sample_voxel(&voxel, x);
                for c in 0..voxel.channels {
                    assert!((got[c] - flat[c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn reproject_outside_image_is_zero() {
        let camera = test_camera();
        let cache = plane_scene_cache(&camera, 16, 16, 4);
        let voxel = seeded_voxel(camera, 23);
        let maps = prepare_detail(&voxel, &cache, &Upsampler::Bilinear).unwrap();
        let behind = camera.position - Vec3::new(0.0, 0.0, 1.0);
        assert!(maps.reproject(behind, 0).unwrap().iter().all(|v| *v == 0.0));
        let off_screen = Vec3::new(100.0, 0.0, 0.0);
        assert!(maps.reproject(off_screen, 0).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn reproject_scatter_is_adjoint() {
        let camera = test_camera();
        let cache = plane_scene_cache(&camera, 16, 16, 4);
        let voxel = seeded_voxel(camera, 31);
        let maps = prepare_detail(&voxel, &cache, &Upsampler::Bilinear).unwrap();
        let map = &maps.maps[0];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            // Random points on the z=0 plane inside the image.
            let x = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), 0.0);
            let upstream: Vec<f64> = (0..map.channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut grad = vec![0.0; map.data.len()];
            reproject_scatter(&camera, map.width, map.height, map.channels, x, &upstream, &mut grad);
            let val = maps.reproject(x, 0).unwrap();
            let lhs: f64 = val.iter().zip(&upstream).map(|(a, b)| a * b).sum();
            let rhs: f64 = map.data.iter().zip(&grad).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn detail_path_is_deterministic() {
        let camera = test_camera();
        let cache = plane_scene_cache(&camera, 16, 16, 4);
        let voxel = seeded_voxel(camera, 41);
        let a = prepare_detail(&voxel, &cache, &Upsampler::Bilinear).unwrap();
        let b = prepare_detail(&voxel, &cache, &Upsampler::Bilinear).unwrap();
        for (ma, mb) in a.maps.iter().zip(&b.maps) {
            assert_eq!(ma.data, mb.data);
        }
    }

    #[test]
    fn prepare_requires_factor_four() {
        let camera = test_camera();
        let cache = plane_scene_cache(&camera, 16, 16, 2);
        let voxel = seeded_voxel(camera, 43);
        assert!(matches!(
            prepare_detail(&voxel, &cache, &Upsampler::Bilinear),
            Err(Error::FactorMismatch { .. })
        ));
    }
}
