//! The regularized reconstruction objective: pixel/perceptual/identity
//! reconstruction terms, the masked novel-view regularizer, the
//! detail-near-surface depth penalty, and the latent-code regularizer.

use crate::error::{Error, Result};
use crate::intersect::IntersectionSet;
use crate::math::Vec3;
use crate::radiance::LatentCode;
use crate::render::Image;
use serde::Serialize;

/// Distance plugin for perceptual or identity terms. The built-in default
/// when absent is 0 (reconstruction) or plain MSE (novel-view loss).
pub trait ImageDistance: Sync {
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LossWeights {
    pub pixel: f64,
    pub perceptual: f64,
    pub id: f64,
    pub nv: f64,
    pub depth_lambda: f64,
    pub latent: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            pixel: 1e-2,
            perceptual: 1.0,
            id: 4e-2,
            nv: 4.0,
            depth_lambda: 2e-4,
            latent: 1e-4,
        }
    }
}

/// Per-iteration loss breakdown. `depth_reg` already carries its lambda;
/// every other component is stored unweighted and `total` applies the
/// weights.
#[derive(Clone, Debug, Serialize)]
pub struct LossReport {
    pub recon_pixel: f64,
    pub recon_perceptual: f64,
    pub recon_id: f64,
    pub nv: f64,
    pub depth_reg: f64,
    pub latent_reg: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossReport {
    pub fn new(
        recon_pixel: f64,
        recon_perceptual: f64,
        recon_id: f64,
        nv: f64,
        depth_reg: f64,
        latent_reg: f64,
        weights: LossWeights,
    ) -> LossReport {
        let total = weights.pixel * recon_pixel
            + weights.perceptual * recon_perceptual
            + weights.id * recon_id
            + weights.nv * nv
            + depth_reg
            + weights.latent * latent_reg;
        LossReport { recon_pixel, recon_perceptual, recon_id, nv, depth_reg, latent_reg, total, weights }
    }
}

/// Reconstruction components (pixel MSE, perceptual, identity). Plugin
/// terms default to 0 when absent.
pub fn recon_loss(
    target: &Image,
    rendered: &Image,
    perceptual: Option<&dyn ImageDistance>,
    id: Option<&dyn ImageDistance>,
) -> Result<(f64, f64, f64)> {
    let pixel = target.mse(rendered)?;
    let perc = match perceptual {
        Some(p) => p.distance(target, rendered)?,
        None => 0.0,
    };
    let ident = match id {
        Some(p) => p.distance(target, rendered)?,
        None => 0.0,
    };
    Ok((pixel, perc, ident))
}

/// Per-pixel regularization mask for a novel view: 1 where the surface is
/// turned away from the input camera (-lookat . normal < tau) or the normal
/// is degenerate, 0 where the input view observed the surface well.
pub fn nv_mask(
    normals: &[Vec3],
    degenerate: &[bool],
    lookat_in: Vec3,
    tau: f64,
) -> Result<Vec<bool>> {
    if (lookat_in.length() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("input lookat must be unit length".into()));
    }
    if normals.len() != degenerate.len() {
        return Err(Error::ShapeMismatch("normal and degeneracy buffers differ".into()));
    }
    Ok(normals
        .iter()
        .zip(degenerate)
        .map(|(n, d)| *d || -lookat_in.dot(*n) < tau)
        .collect())
}

fn masked(image: &Image, mask: &[bool]) -> Image {
    let mut out = image.clone();
    for (px, m) in out.pixels.iter_mut().zip(mask) {
        if !*m {
            *px = [0.0; 3];
        }
    }
    out
}

/// Masked distance between the final and coarse renders of a novel view.
/// Masking zeroes unmasked pixels on both sides before the distance, so the
/// default MSE reduces to plain MSE under an all-ones mask.
pub fn nv_loss(
    final_nv: &Image,
    coarse_nv: &Image,
    mask: &[bool],
    distance: Option<&dyn ImageDistance>,
) -> Result<f64> {
    if mask.len() != final_nv.pixels.len() {
        return Err(Error::ShapeMismatch("mask does not cover the image".into()));
    }
    let a = masked(final_nv, mask);
    let b = masked(coarse_nv, mask);
    match distance {
        Some(d) => d.distance(&a, &b),
        None => a.mse(&b),
    }
}

/// Penalize detail features on hits far from the expected surface:
/// lambda * ||f||^2 for every valid hit with |t - z_surf| > epsilon.
pub fn depth_reg(
    hits: &IntersectionSet,
    details: &[Vec<Vec<f64>>],
    z_surf: &[f64],
    epsilon: f64,
    lambda: f64,
) -> Result<f64> {
    let npx = (hits.width * hits.height) as usize;
    if details.len() != npx || z_surf.len() != npx {
        return Err(Error::ShapeMismatch("per-pixel buffers do not match the hit grid".into()));
    }
    let mut total = 0.0;
    for (idx, pixel_hits) in hits.pixels().iter().enumerate() {
        if details[idx].len() != pixel_hits.len() {
            return Err(Error::ShapeMismatch(format!(
                "pixel {idx} has {} hits but {} detail vectors",
                pixel_hits.len(),
                details[idx].len()
            )));
        }
        for (h, f) in pixel_hits.iter().zip(&details[idx]) {
            if h.valid && (h.t - z_surf[idx]).abs() > epsilon {
                total += lambda * f.iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    Ok(total)
}

/// Squared Frobenius distance of a latent code from the generator mean.
pub fn latent_reg(code: &LatentCode, mean_code: &LatentCode) -> Result<f64> {
    if code.layers != mean_code.layers || code.dim != mean_code.dim {
        return Err(Error::ShapeMismatch("latent code shapes differ".into()));
    }
    Ok(code.data.iter().zip(&mean_code.data).map(|(a, b)| (a - b) * (a - b)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{IsoLevels, ScalarField};
    use crate::geometry::{look_at_rotation, Camera};
    use crate::intersect::{intersect_grid, SolverParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recon_pixel_term_examples() {
        let a = Image::from_fn(4, 4, |u, v| [0.1 * u as f64, 0.05 * v as f64, 0.3]);
        let (pix, perc, id) = recon_loss(&a, &a, None, None).unwrap();
        assert_eq!((pix, perc, id), (0.0, 0.0, 0.0));
        let b = Image::from_fn(4, 4, |u, v| {
            let p = a.pixel(u, v);
            [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]
        });
        let (pix, _, _) = recon_loss(&a, &b, None, None).unwrap();
        assert!((pix - 0.01).abs() < 1e-15);
    }

    struct ConstDistance(f64);
    impl ImageDistance for ConstDistance {
        fn distance(&self, _: &Image, _: &Image) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn plugins_feed_their_components() {
        let a = Image::new(2, 2);
        let (pix, perc, id) =
            recon_loss(&a, &a, Some(&ConstDistance(0.5)), Some(&ConstDistance(0.25))).unwrap();
        assert_eq!((pix, perc, id), (0.0, 0.5, 0.25));
    }

    #[test]
    fn recon_rejects_dimension_mismatch() {
        let a = Image::new(2, 2);
        let b = Image::new(3, 2);
        assert!(recon_loss(&a, &b, None, None).is_err());
    }

    #[test]
    fn report_total_is_the_weighted_sum() {
        let w = LossWeights::default();
        let r = LossReport::new(0.5, 0.25, 0.1, 0.2, 3e-4, 2.0, w);
        let expect = 1e-2 * 0.5 + 0.25 + 4e-2 * 0.1 + 4.0 * 0.2 + 3e-4 + 1e-4 * 2.0;
        assert!((r.total - expect).abs() < 1e-15);
    }

    #[test]
    fn mask_examples() {
        let r = Vec3::new(0.0, 0.0, 1.0);
        // Facing the input camera: observed, no regularization.
        let facing = vec![Vec3::new(0.0, 0.0, -1.0)];
        assert_eq!(nv_mask(&facing, &[false], r, 0.2).unwrap(), vec![false]);
        // Grazing: -r.N = 0.1 < 0.2.
        let grazing = vec![Vec3::new(0.0, (1.0f64 - 0.01).sqrt(), -0.1)];
        assert_eq!(nv_mask(&grazing, &[false], r, 0.2).unwrap(), vec![true]);
        // tau above the dot-product bound masks everything.
        assert_eq!(nv_mask(&facing, &[false], r, 1.5).unwrap(), vec![true]);
        // Degenerate pixels are treated as unobserved.
        assert_eq!(nv_mask(&[Vec3::ZERO], &[true], r, -10.0).unwrap(), vec![true]);
    }

    #[test]
    fn mask_requires_unit_lookat() {
        assert!(nv_mask(&[], &[], Vec3::new(0.0, 0.0, 2.0), 0.2).is_err());
    }

    #[test]
    fn mask_is_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normals: Vec<Vec3> = (0..100)
            .map(|_| {
                Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
                    .normalized()
            })
            .collect();
        let degen = vec![false; 100];
        let r = Vec3::new(0.0, 0.0, 1.0);
        let m1 = nv_mask(&normals, &degen, r, 0.1).unwrap();
        let m2 = nv_mask(&normals, &degen, r, 0.4).unwrap();
        for (a, b) in m1.iter().zip(&m2) {
            assert!(*b || !*a, "mask lost a pixel when tau grew");
        }
    }

    #[test]
    fn nv_loss_examples() {
        let a = Image::from_fn(3, 3, |u, _| [0.1 * u as f64, 0.2, 0.3]);
        let b = Image::from_fn(3, 3, |u, v| [0.1 * u as f64 + 0.1, 0.2, 0.1 * v as f64]);
        let ones = vec![true; 9];
        let zeros = vec![false; 9];
        assert_eq!(nv_loss(&a, &a, &ones, None).unwrap(), 0.0);
        assert_eq!(nv_loss(&a, &b, &zeros, None).unwrap(), 0.0);
        let full = nv_loss(&a, &b, &ones, None).unwrap();
        assert!((full - a.mse(&b).unwrap()).abs() < 1e-15);
        assert!(nv_loss(&a, &b, &[true; 4], None).is_err());
    }

    fn one_hit_grid() -> (IntersectionSet, usize) {
        // Orthographic fronto-parallel plane: every pixel exactly one hit at
        // t = 2.
        let field = ScalarField::plane(Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let levels = IsoLevels::new(vec![0.0]).unwrap();
        let pos = Vec3::new(0.0, 0.0, -2.0);
        let camera = Camera::orthographic(
            pos,
            look_at_rotation(pos, Vec3::ZERO, Vec3::new(0.0, 1.0, 0.0)),
            0.5,
            0.5,
            8.0,
        )
        .unwrap();
        let set = intersect_grid(&field, &levels, &camera, 2, 2, &SolverParams::default()).unwrap();
        (set, 4)
    }

    #[test]
    fn depth_reg_examples() {
        let (set, npx) = one_hit_grid();
        let zero_details: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; 2]]; npx];
        let z_far = vec![10.0; npx];
        assert_eq!(depth_reg(&set, &zero_details, &z_far, 0.5, 2e-4).unwrap(), 0.0);
        // Hits sit at t = 2; z_surf = 2 keeps them inside the band.
        let details: Vec<Vec<Vec<f64>>> = vec![vec![vec![2.0, 0.0]]; npx];
        let z_near = vec![2.0; npx];
        assert_eq!(depth_reg(&set, &details, &z_near, 0.5, 2e-4).unwrap(), 0.0);
        // Out of band: each pixel contributes lambda * 4.
        let one = depth_reg(&set, &details, &z_far, 0.5, 2e-4).unwrap();
        assert!((one - npx as f64 * 8e-4).abs() < 1e-15);
    }

    #[test]
    fn depth_reg_monotone_as_band_shrinks() {
        let (set, npx) = one_hit_grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let details: Vec<Vec<Vec<f64>>> =
            (0..npx).map(|_| vec![(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()]).collect();
        let z: Vec<f64> = (0..npx).map(|_| rng.gen_range(1.0..3.0)).collect();
        let mut prev = 0.0;
        for eps in [2.0, 1.0, 0.5, 0.1, 0.0] {
            let v = depth_reg(&set, &details, &z, eps, 2e-4).unwrap();
            assert!(v + 1e-15 >= prev, "loss fell as the band shrank");
            prev = v;
        }
    }

    #[test]
    fn depth_reg_rejects_misalignment() {
        let (set, npx) = one_hit_grid();
        let bad: Vec<Vec<Vec<f64>>> = vec![vec![]; npx];
        assert!(depth_reg(&set, &bad, &vec![2.0; npx], 0.5, 2e-4).is_err());
        let details: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0]]; npx - 1];
        assert!(depth_reg(&set, &details, &vec![2.0; npx], 0.5, 2e-4).is_err());
    }

    #[test]
    fn latent_reg_examples() {
        let mean = LatentCode::zeros(3, 4);
        assert_eq!(latent_reg(&mean, &mean).unwrap(), 0.0);
        let mut code = LatentCode::zeros(3, 4);
        code.data[5] = 1.0;
        assert_eq!(latent_reg(&code, &mean).unwrap(), 1.0);
        code.data[5] = 3.0;
        assert_eq!(latent_reg(&code, &mean).unwrap(), 9.0);
        let other = LatentCode::zeros(2, 4);
        assert!(latent_reg(&code, &other).is_err());
    }
}
