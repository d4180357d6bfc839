//! Taped forward pass and hand-rolled reverse pass shared by both fitting
//! stages. Geometry is detached: intersection points are inputs here, and
//! gradients flow only through decoded radiance (and detail features), never
//! through the hit positions.

use crate::detail::DetailMaps;
use crate::error::Result;
use crate::intersect::IntersectionSet;
use crate::math::Vec3;
use crate::mlp::{Mlp, Trace};
use crate::radiance::{decode_traced, decode_vjp, RadianceSample, TriPlanes};
use crate::render::{composite, composite_backward, Image, ShadePoint};

/// One shaded hit with everything the reverse pass needs.
pub(crate) struct TapedHit {
    pub t: f64,
    pub point: Vec3,
    pub level: usize,
    pub sample: RadianceSample,
    pub trace: Trace,
}

pub(crate) struct TapedPixel {
    /// Valid hits in depth order.
    pub hits: Vec<TapedHit>,
    /// Composited color including the background blend.
    pub color: [f64; 3],
    pub z_surf: f64,
}

pub(crate) struct TapedFrame {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<TapedPixel>,
    /// Detail vectors aligned with every hit of the intersection set
    /// (invalid hits carry zeros); empty when no detail maps are bound.
    pub details: Vec<Vec<Vec<f64>>>,
}

impl TapedFrame {
    pub fn image(&self) -> Image {
        let mut img = Image::new(self.width, self.height);
        for (out, px) in img.pixels.iter_mut().zip(&self.pixels) {
            *out = px.color;
        }
        img
    }

    pub fn z_surf(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| p.z_surf).collect()
    }
}

/// Shade and composite every pixel of `set`, keeping the decode traces.
/// Sequential by design so downstream gradient accumulation has one fixed
/// summation order.
pub(crate) fn taped_forward(
    planes: &TriPlanes,
    decoder: &Mlp,
    set: &IntersectionSet,
    maps: Option<&DetailMaps>,
    background: [f64; 3],
    far: f64,
) -> Result<TapedFrame> {
    let channels = planes.shape.channels;
    let mut pixels = Vec::with_capacity(set.pixels().len());
    let mut details = Vec::new();
    for hits in set.pixels() {
        let mut taped: Vec<TapedHit> = Vec::new();
        let mut drow: Vec<Vec<f64>> = Vec::new();
        for h in hits {
            if !h.valid {
                if maps.is_some() {
                    drow.push(vec![0.0; channels]);
                }
                continue;
            }
            let detail = maps.map(|m| m.reproject(h.point, h.level)).transpose()?;
            let feature = planes.sample(h.point);
            let (sample, trace) = decode_traced(decoder, &feature, detail.as_deref())?;
            if let Some(d) = detail {
                drow.push(d);
            }
            taped.push(TapedHit { t: h.t, point: h.point, level: h.level, sample, trace });
        }
        let pts: Vec<ShadePoint> =
            taped.iter().map(|h| ShadePoint { sample: h.sample, t: h.t }).collect();
        let comp = composite(&pts)?;
        let color = [
            comp.color[0] + comp.residual * background[0],
            comp.color[1] + comp.residual * background[1],
            comp.color[2] + comp.residual * background[2],
        ];
        let z_surf = if taped.is_empty() { far } else { comp.z_surf };
        pixels.push(TapedPixel { hits: taped, color, z_surf });
        if maps.is_some() {
            details.push(drow);
        }
    }
    Ok(TapedFrame { width: set.width, height: set.height, pixels, details })
}

/// Gradient of the pixel MSE `mean((r - t)^2)` with respect to one rendered
/// pixel, already scaled by an objective weight.
pub(crate) fn mse_pixel_grad(rendered: [f64; 3], target: [f64; 3], npx: usize, weight: f64) -> [f64; 3] {
    let s = weight * 2.0 / (3.0 * npx as f64);
    [
        s * (rendered[0] - target[0]),
        s * (rendered[1] - target[1]),
        s * (rendered[2] - target[2]),
    ]
}

/// Push one pixel's upstream color gradient back to per-hit decoder-input
/// gradients, routing each to `sink`. z_surf carries no upstream gradient
/// anywhere in the objective (the depth gate is detached).
pub(crate) fn backprop_pixel(
    decoder: &Mlp,
    px: &TapedPixel,
    d_color: [f64; 3],
    background: [f64; 3],
    mut sink: impl FnMut(&TapedHit, &[f64]),
) {
    if px.hits.is_empty() {
        return;
    }
    let pts: Vec<ShadePoint> =
        px.hits.iter().map(|h| ShadePoint { sample: h.sample, t: h.t }).collect();
    let cg = composite_backward(&pts, d_color, 0.0, background);
    for (i, hit) in px.hits.iter().enumerate() {
        let d_input = decode_vjp(decoder, &hit.trace, &hit.sample, cg.d_color[i], cg.d_alpha[i]);
        sink(hit, &d_input);
    }
}
