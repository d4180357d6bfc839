//! Manifold cache: per-(level, ordinal) grids of intersection points solved
//! once from an input camera, plus decoded radiance pinned to those points.
//! Novel views can then be rendered without a single field or decoder
//! evaluation.

use super::{build_point_cache, SolverParams};
use crate::detail::DetailMaps;
use crate::error::Result;
use crate::geometry::Camera;
use crate::math::Vec3;
use crate::radiance::{shade_point, RadianceSample, TriPlaneScene};

/// Bilinear corner offsets and weights for a cell-local position. Fractions
/// above 1 (border extrapolation) give signed weights that still sum to 1.
pub(crate) fn cell_corners(fx: f64, fy: f64) -> [(usize, usize, f64); 4] {
    [
        (0, 0, (1.0 - fx) * (1.0 - fy)),
        (1, 0, fx * (1.0 - fy)),
        (0, 1, (1.0 - fx) * fy),
        (1, 1, fx * fy),
    ]
}

/// One (level, ordinal) slot: intersection point and depth per low-res node.
#[derive(Clone, Debug)]
pub struct CacheGrid {
    pub points: Vec<Vec3>,
    pub t: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CacheGrid {
    pub(crate) fn empty(low_w: u32, low_h: u32) -> CacheGrid {
        let n = (low_w * low_h) as usize;
        CacheGrid { points: vec![Vec3::ZERO; n], t: vec![0.0; n], valid: vec![false; n] }
    }

    pub(crate) fn set(&mut self, idx: usize, point: Vec3, t: f64) {
        self.points[idx] = point;
        self.t[idx] = t;
        self.valid[idx] = true;
    }

    /// Weighted combination of the cell's corner points; `None` when any
    /// corner carrying nonzero weight has no hit. Zero-weight corners are
    /// skipped entirely, which keeps on-node samples exact.
    pub(crate) fn interpolate(&self, low_w: u32, cx: usize, cy: usize, fx: f64, fy: f64) -> Option<Vec3> {
        let mut acc = Vec3::ZERO;
        for (dx, dy, w) in cell_corners(fx, fy) {
            if w == 0.0 {
                continue;
            }
            let idx = (cy + dy) * low_w as usize + (cx + dx);
            if !self.valid[idx] {
                return None;
            }
            acc += self.points[idx] * w;
        }
        Some(acc)
    }

    /// True when at least one nonzero-weight corner has a hit (a mixed
    /// neighborhood, which must surface as an invalid pixel).
    pub(crate) fn any_weighted_neighbor(&self, low_w: u32, cx: usize, cy: usize, fx: f64, fy: f64) -> bool {
        cell_corners(fx, fy).iter().any(|(dx, dy, w)| {
            *w != 0.0 && self.valid[(cy + dy) * low_w as usize + (cx + dx)]
        })
    }
}

/// Intersection geometry from one input camera: slot grids on the
/// stride-`factor` subsampled ray grid.
#[derive(Clone, Debug)]
pub struct ManifoldCache {
    pub camera: Camera,
    /// Full-resolution target the cache upsamples to.
    pub width: u32,
    pub height: u32,
    pub factor: u32,
    pub low_w: u32,
    pub low_h: u32,
    /// Indexed [level][ordinal].
    pub slots: Vec<Vec<CacheGrid>>,
}

impl ManifoldCache {
    /// Nearest-intersection grid of a level (ordinal 0), used by the detail
    /// stage to parameterize its per-manifold feature maps.
    pub fn nearest_grid(&self, level: usize) -> Option<&CacheGrid> {
        self.slots.get(level).and_then(|g| g.first())
    }

    pub fn levels(&self) -> usize {
        self.slots.len()
    }
}

/// Decoded color/occupancy and the occupancy's spatial gradient per cached
/// point; slot layout mirrors the geometry cache.
#[derive(Clone, Debug)]
pub struct RadianceGrid {
    pub color: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    pub alpha_grad: Vec<Vec3>,
}

#[derive(Clone, Debug)]
pub struct RadianceCache {
    pub slots: Vec<Vec<RadianceGrid>>,
}

impl RadianceCache {
    /// Decoded radiance at a cached point; what a render camera sees at that
    /// point is this value, whichever camera asks.
    pub fn sample_at(&self, level: usize, ordinal: usize, idx: usize) -> RadianceSample {
        let g = &self.slots[level][ordinal];
        RadianceSample { color: g.color[idx], alpha: g.alpha[idx] }
    }
}

/// Solve the input view's intersection grids and decode radiance at every
/// cached point (including the optional detail feature). The field and
/// decoder are never touched again for renders that go through the cache.
pub fn cache_manifolds(
    scene: &TriPlaneScene,
    camera: &Camera,
    width: u32,
    height: u32,
    factor: u32,
    params: &SolverParams,
    detail: Option<&DetailMaps>,
) -> Result<(ManifoldCache, RadianceCache)> {
    let cache = build_point_cache(&scene.field, &scene.levels, camera, width, height, factor, params)?;
    let mut slots = Vec::with_capacity(cache.slots.len());
    for (level, grids) in cache.slots.iter().enumerate() {
        let mut level_slots = Vec::with_capacity(grids.len());
        for grid in grids {
            let n = grid.points.len();
            let mut rg = RadianceGrid {
                color: vec![[0.0; 3]; n],
                alpha: vec![0.0; n],
                alpha_grad: vec![Vec3::ZERO; n],
            };
            for idx in 0..n {
                if !grid.valid[idx] {
                    continue;
                }
                let x = grid.points[idx];
                let detail_vec = detail.map(|m| m.reproject(x, level)).transpose()?;
                let (sample, agrad) =
                    shade_point(&scene.planes, &scene.decoder, x, detail_vec.as_deref())?;
                rg.color[idx] = sample.color;
                rg.alpha[idx] = sample.alpha;
                rg.alpha_grad[idx] = agrad;
            }
            level_slots.push(rg);
        }
        slots.push(level_slots);
    }
    Ok((cache, RadianceCache { slots }))
}
