//! Ray / iso-surface intersection: exact per-ray root finding, full pixel-grid
//! solves, and the cheap path that solves on a subsampled ray grid and
//! bilinearly interpolates the 3D intersection points (not depths) up to full
//! resolution.

mod cache;

pub use cache::{CacheGrid, ManifoldCache, RadianceCache, RadianceGrid, cache_manifolds};

use crate::error::{Error, Result};
use crate::field::{Field, IsoLevels};
use crate::geometry::{Camera, Ray};
use crate::math::Vec3;
use crate::parallel::par_map;
use std::cmp::Ordering;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Depth along the pixel ray. For interpolated hits this is the
    /// projection of the interpolated point onto the ray.
    pub t: f64,
    pub point: Vec3,
    /// Index into the scene's iso levels.
    pub level: usize,
    /// Rank of this hit among the ray's hits on the same level, in depth
    /// order (a closed surface is crossed twice, so ordinals matter).
    pub ordinal: usize,
    pub valid: bool,
}

/// Hits of every pixel of a width x height grid, each list sorted by
/// (t, level, ordinal).
#[derive(Clone, Debug, PartialEq)]
pub struct IntersectionSet {
    pub width: u32,
    pub height: u32,
    hits: Vec<Vec<Hit>>,
}

impl IntersectionSet {
    pub fn pixel(&self, u: u32, v: u32) -> &[Hit] {
        &self.hits[(v * self.width + u) as usize]
    }

    pub fn pixels(&self) -> &[Vec<Hit>] {
        &self.hits
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SolverParams {
    /// Uniform samples along [near, far] used to bracket sign changes.
    pub steps: u32,
    /// Residual bound |M(x) - level| the refinement must reach.
    pub tol: f64,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams { steps: 64, tol: 1e-6 }
    }
}

pub(crate) fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    a.t.total_cmp(&b.t)
        .then(a.level.cmp(&b.level))
        .then(a.ordinal.cmp(&b.ordinal))
}

/// All intersections of `ray` with every iso-surface of `field` in
/// [near, far], sorted by depth. Sign changes between consecutive samples are
/// refined by bisection; the bracket is halved a fixed 64 times, collapsing
/// it at f64 resolution, so refined depths are exact to machine precision
/// even where the field grazes a level. The fixed halving count keeps the
/// per-bracket evaluation cost constant, which is what makes the subsampled
/// path's cost reduction exactly the ray-count ratio. Roots closer together
/// than the sampling step can be missed; that is the accepted cost of
/// sampling.
pub fn intersect_ray<F: Field>(
    field: &F,
    levels: &IsoLevels,
    ray: &Ray,
    near: f64,
    far: f64,
    params: &SolverParams,
) -> Result<Vec<Hit>> {
    if params.steps < 2 {
        return Err(Error::InvalidArgument("solver needs at least 2 samples".into()));
    }
    if !(near < far) {
        return Err(Error::InvalidArgument(format!("need near < far, got {near}..{far}")));
    }
    let n = params.steps as usize;
    let dt = (far - near) / (n - 1) as f64;
    let ts: Vec<f64> = (0..n).map(|k| near + dt * k as f64).collect();
    let ms: Vec<f64> = ts.iter().map(|&t| field.eval(ray.at(t))).collect();

    let mut hits: Vec<Hit> = Vec::new();
    for (level_idx, &level) in levels.values().iter().enumerate() {
        let mut roots: Vec<f64> = Vec::new();
        if ms[0] - level == 0.0 {
            roots.push(ts[0]);
        }
        for k in 0..n - 1 {
            let fa = ms[k] - level;
            let fb = ms[k + 1] - level;
            if fb == 0.0 {
                roots.push(ts[k + 1]);
            } else if fa != 0.0 && (fa > 0.0) != (fb > 0.0) {
                roots.push(bisect(field, ray, level, ts[k], ts[k + 1], fa));
            }
        }
        roots.dedup();
        for (ordinal, t) in roots.into_iter().enumerate() {
            hits.push(Hit { t, point: ray.at(t), level: level_idx, ordinal, valid: true });
        }
    }
    hits.sort_by(hit_order);
    Ok(hits)
}

fn bisect<F: Field>(field: &F, ray: &Ray, level: f64, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    for _ in 0..64 {
        let mid = 0.5 * (a + b);
        if mid == a || mid == b {
            // Collapsed at f64 resolution; keep halving so every bracket
            // costs the same number of field evaluations.
            a = mid;
            b = mid;
        }
        let fm = field.eval(ray.at(mid)) - level;
        if fm == 0.0 {
            // Exact zero: pin the bracket at the root. The loop still runs
            // its full count so every bracket costs the same number of
            // field evaluations.
            a = mid;
            b = mid;
        } else if (fm > 0.0) == (fa > 0.0) {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// Exact solve on every pixel ray. Pixel-parallel; outputs land in
/// pre-indexed slots so the result is independent of thread count.
pub fn intersect_grid<F: Field>(
    field: &F,
    levels: &IsoLevels,
    camera: &Camera,
    width: u32,
    height: u32,
    params: &SolverParams,
) -> Result<IntersectionSet> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
    }
    // Validate once, outside the pixel loop; a dry solve would skew the
    // instrumented evaluation counts.
    if params.steps < 2 {
        return Err(Error::InvalidArgument("solver needs at least 2 samples".into()));
    }
    let hits = par_map((width * height) as usize, |idx| {
        let u = (idx as u32) % width;
        let v = (idx as u32) / width;
        let ray = camera
            .ray_for_pixel(u, v, width, height)
            .expect("pixel index in range by construction");
        intersect_ray(field, levels, &ray, camera.near, camera.far, params)
            .expect("params validated above")
    });
    Ok(IntersectionSet { width, height, hits })
}

/// How `render` obtains its intersections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IntersectMode {
    Exact,
    /// Solve on a grid subsampled by `factor`, interpolate points up.
    LowRes { factor: u32 },
}

/// Exact solves on the stride-`factor` subsampled ray grid, then bilinear
/// interpolation of the per-(level, ordinal) intersection points onto the
/// full grid. Low-res node (i, j) is full-res pixel (factor*i, factor*j), so
/// the low-res solves are a subset of the exact path's solves; pixels right
/// of / below the last node are linearly extrapolated from the border cell.
/// A pixel is invalid for a slot iff any node with nonzero interpolation
/// weight has no hit there. factor = 1 is the identity and returns the exact
/// path's result unchanged.
pub fn intersect_lowres_upsample<F: Field>(
    field: &F,
    levels: &IsoLevels,
    camera: &Camera,
    width: u32,
    height: u32,
    factor: u32,
    params: &SolverParams,
) -> Result<IntersectionSet> {
    let cache = build_point_cache(field, levels, camera, width, height, factor, params)?;
    if factor == 1 {
        return Ok(IntersectionSet { width, height, hits: cache_node_hits(&cache) });
    }
    Ok(upsample_cache(&cache))
}

/// Geometry half of the manifold cache: per-(level, ordinal) grids of
/// intersection points on the subsampled ray grid of `camera`.
pub fn build_point_cache<F: Field>(
    field: &F,
    levels: &IsoLevels,
    camera: &Camera,
    width: u32,
    height: u32,
    factor: u32,
    params: &SolverParams,
) -> Result<ManifoldCache> {
    if factor == 0 || width % factor != 0 || height % factor != 0 {
        return Err(Error::FactorMismatch { factor, width, height });
    }
    let low_w = width / factor;
    let low_h = height / factor;
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
    }
    if params.steps < 2 {
        return Err(Error::InvalidArgument("solver needs at least 2 samples".into()));
    }
    let node_hits: Vec<Vec<Hit>> = par_map((low_w * low_h) as usize, |idx| {
        let i = (idx as u32) % low_w;
        let j = (idx as u32) / low_w;
        let ray = camera
            .ray_for_pixel(i * factor, j * factor, width, height)
            .expect("subsampled node inside full grid");
        intersect_ray(field, levels, &ray, camera.near, camera.far, params)
            .expect("params validated above")
    });

    // Slot layout: one grid per (level, ordinal), ordinal count = max seen.
    let n_levels = levels.len();
    let mut ordinals = vec![0usize; n_levels];
    for hits in &node_hits {
        for h in hits {
            ordinals[h.level] = ordinals[h.level].max(h.ordinal + 1);
        }
    }
    let mut slots: Vec<Vec<CacheGrid>> = (0..n_levels)
        .map(|l| (0..ordinals[l]).map(|_| CacheGrid::empty(low_w, low_h)).collect())
        .collect();
    for (idx, hits) in node_hits.iter().enumerate() {
        for h in hits {
            slots[h.level][h.ordinal].set(idx, h.point, h.t);
        }
    }
    Ok(ManifoldCache {
        camera: *camera,
        width,
        height,
        factor,
        low_w,
        low_h,
        slots,
    })
}

/// Reassemble per-node hit lists from the cache (factor = 1 identity path).
fn cache_node_hits(cache: &ManifoldCache) -> Vec<Vec<Hit>> {
    let n = (cache.low_w * cache.low_h) as usize;
    let mut hits: Vec<Vec<Hit>> = vec![Vec::new(); n];
    for (level, grids) in cache.slots.iter().enumerate() {
        for (ordinal, grid) in grids.iter().enumerate() {
            for idx in 0..n {
                if grid.valid[idx] {
                    hits[idx].push(Hit {
                        t: grid.t[idx],
                        point: grid.points[idx],
                        level,
                        ordinal,
                        valid: true,
                    });
                }
            }
        }
    }
    for h in &mut hits {
        h.sort_by(hit_order);
    }
    hits
}

/// Bilinear position of full-res pixel coordinate `p` on the subsampled node
/// grid: cell index plus fraction, the fraction exceeding 1 on the border
/// (linear extrapolation from the last cell).
pub(crate) fn lowres_coords(p: u32, factor: u32, nodes: u32) -> (usize, f64) {
    let lambda = p as f64 / factor as f64;
    if nodes == 1 {
        return (0, 0.0);
    }
    let cell = (lambda.floor() as usize).min(nodes as usize - 2);
    (cell, lambda - cell as f64)
}

pub(crate) fn upsample_cache(cache: &ManifoldCache) -> IntersectionSet {
    let (w, h, f) = (cache.width, cache.height, cache.factor);
    let hits = par_map((w * h) as usize, |idx| {
        let u = (idx as u32) % w;
        let v = (idx as u32) / w;
        let (cx, fx) = lowres_coords(u, f, cache.low_w);
        let (cy, fy) = lowres_coords(v, f, cache.low_h);
        let ray = cache
            .camera
            .ray_for_pixel(u, v, w, h)
            .expect("pixel inside grid");
        let mut pixel_hits: Vec<Hit> = Vec::new();
        for (level, grids) in cache.slots.iter().enumerate() {
            for (ordinal, grid) in grids.iter().enumerate() {
                match grid.interpolate(cache.low_w, cx, cy, fx, fy) {
                    Some(point) => {
                        let t = (point - ray.origin).dot(ray.direction);
                        let valid = t >= cache.camera.near && t <= cache.camera.far;
                        pixel_hits.push(Hit {
                            t: if valid { t } else { cache.camera.near },
                            point: if valid { point } else { Vec3::ZERO },
                            level,
                            ordinal,
                            valid,
                        });
                    }
                    None => {
                        if grid.any_weighted_neighbor(cache.low_w, cx, cy, fx, fy) {
                            pixel_hits.push(Hit {
                                t: cache.camera.near,
                                point: Vec3::ZERO,
                                level,
                                ordinal,
                                valid: false,
                            });
                        }
                    }
                }
            }
        }
        pixel_hits.sort_by(hit_order);
        pixel_hits
    });
    IntersectionSet { width: w, height: h, hits }
}
