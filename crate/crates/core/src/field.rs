//! Scalar fields whose iso-surfaces carry the scene's radiance, plus the
//! ordered level set. Analytic backends exist so intersection and gradient
//! code can be checked against closed forms; the mlp backend is the learned
//! stand-in.

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};
use crate::mlp::Mlp;
use std::sync::atomic::{AtomicU64, Ordering};

/// Anything that maps a world point to a scalar. Batch operations are generic
/// over this so instrumented wrappers compose with the solvers.
pub trait Field: Sync {
    fn eval(&self, x: Vec3) -> f64;
}

#[derive(Clone, Debug)]
pub enum ScalarField {
    /// Distance to `center`.
    Sphere { center: Vec3 },
    /// Signed distance along a unit normal to the plane through the origin.
    Plane { normal: Vec3 },
    /// sqrt(x^T A x) for symmetric positive definite A.
    RadialEllipsoid { a: Mat3 },
    /// Learned field, 3 inputs to 1 output.
    Mlp { net: Mlp },
}

impl ScalarField {
    pub fn sphere(center: Vec3) -> ScalarField {
        ScalarField::Sphere { center }
    }

    pub fn plane(normal: Vec3) -> Result<ScalarField> {
        if normal.length() < 1e-12 {
            return Err(Error::InvalidArgument("plane normal must be nonzero".into()));
        }
        Ok(ScalarField::Plane { normal: normal.normalized() })
    }

    pub fn radial_ellipsoid(a: Mat3) -> Result<ScalarField> {
        for i in 0..3 {
            for j in 0..3 {
                if (a.m[i][j] - a.m[j][i]).abs() > 1e-9 {
                    return Err(Error::InvalidArgument("ellipsoid matrix must be symmetric".into()));
                }
            }
        }
        // Positive definiteness via leading principal minors.
        let m = &a.m;
        let m1 = m[0][0];
        let m2 = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let m3 = a.determinant();
        if !(m1 > 0.0 && m2 > 0.0 && m3 > 0.0) {
            return Err(Error::InvalidArgument("ellipsoid matrix must be positive definite".into()));
        }
        Ok(ScalarField::RadialEllipsoid { a })
    }

    pub fn mlp(net: Mlp) -> Result<ScalarField> {
        if net.input_dim() != 3 || net.output_dim() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "field mlp must map 3 -> 1, got {} -> {}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        Ok(ScalarField::Mlp { net })
    }

    /// Analytic gradient. For the mlp backend this is the backward pass.
    pub fn grad(&self, x: Vec3) -> Vec3 {
        match self {
            ScalarField::Sphere { center } => {
                let d = x - *center;
                let len = d.length();
                if len < 1e-12 {
                    Vec3::ZERO
                } else {
                    d / len
                }
            }
            ScalarField::Plane { normal } => *normal,
            ScalarField::RadialEllipsoid { a } => {
                let ax = a.mul_vec(x);
                let m = x.dot(ax).sqrt();
                if m < 1e-12 {
                    Vec3::ZERO
                } else {
                    ax / m
                }
            }
            ScalarField::Mlp { net } => {
                let trace = net.forward_traced(&x.to_array());
                let g = net.vjp_input(&trace, &[1.0]);
                Vec3::new(g[0], g[1], g[2])
            }
        }
    }
}

impl Field for ScalarField {
    fn eval(&self, x: Vec3) -> f64 {
        match self {
            ScalarField::Sphere { center } => (x - *center).length(),
            ScalarField::Plane { normal } => normal.dot(x),
            ScalarField::RadialEllipsoid { a } => x.dot(a.mul_vec(x)).sqrt(),
            ScalarField::Mlp { net } => net.forward(&x.to_array())[0],
        }
    }
}

impl<F: Field + ?Sized> Field for &F {
    fn eval(&self, x: Vec3) -> f64 {
        (*self).eval(x)
    }
}

/// Wrapper that counts evaluations. Atomic increments commute, so totals are
/// independent of thread interleaving.
pub struct CountingField<'a, F: Field> {
    pub inner: &'a F,
    pub count: &'a AtomicU64,
}

impl<'a, F: Field> CountingField<'a, F> {
    pub fn new(inner: &'a F, count: &'a AtomicU64) -> Self {
        CountingField { inner, count }
    }
}

impl<F: Field> Field for CountingField<'_, F> {
    fn eval(&self, x: Vec3) -> f64 {
        self.count.fetch_add(1, Ordering::Relaxed);
        self.inner.eval(x)
    }
}

/// Central-difference gradient, step `h` per axis.
pub fn grad_fd<F: Field>(field: &F, x: Vec3, h: f64) -> Vec3 {
    let dx = Vec3::new(h, 0.0, 0.0);
    let dy = Vec3::new(0.0, h, 0.0);
    let dz = Vec3::new(0.0, 0.0, h);
    Vec3::new(
        (field.eval(x + dx) - field.eval(x - dx)) / (2.0 * h),
        (field.eval(x + dy) - field.eval(x - dy)) / (2.0 * h),
        (field.eval(x + dz) - field.eval(x - dz)) / (2.0 * h),
    )
}

/// Strictly increasing, non-empty list of iso values.
#[derive(Clone, Debug, PartialEq)]
pub struct IsoLevels {
    values: Vec<f64>,
}

impl IsoLevels {
    pub fn new(values: Vec<f64>) -> Result<IsoLevels> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidLevels);
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidLevels);
        }
        Ok(IsoLevels { values })
    }

    /// `count` evenly spaced levels over [min, max], endpoints included
    /// (a single level sits at min).
    pub fn uniform(min: f64, max: f64, count: usize) -> Result<IsoLevels> {
        if count == 0 || !(max > min) && count > 1 {
            return Err(Error::InvalidLevels);
        }
        if count == 1 {
            return IsoLevels::new(vec![min]);
        }
        let step = (max - min) / (count - 1) as f64;
        IsoLevels::new((0..count).map(|i| min + step * i as f64).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_field_is_distance_to_center() {
        let f = ScalarField::sphere(Vec3::new(1.0, 0.0, 0.0));
        assert!((f.eval(Vec3::new(1.0, 2.0, 0.0)) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn plane_field_is_signed_distance() {
        let f = ScalarField::plane(Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert!((f.eval(Vec3::new(5.0, -1.0, 3.0)) - 3.0).abs() < 1e-15);
        assert!((f.eval(Vec3::new(0.0, 0.0, -0.5)) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn ellipsoid_rejects_non_spd() {
        let bad = Mat3::from_rows([1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]);
        assert!(ScalarField::radial_ellipsoid(bad).is_err());
        let asym = Mat3::from_rows([1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]);
        assert!(ScalarField::radial_ellipsoid(asym).is_err());
    }

    #[test]
    fn sphere_gradient_from_finite_differences() {
        let f = ScalarField::sphere(Vec3::ZERO);
        let g = grad_fd(&f, Vec3::new(0.0, 0.0, 2.0), 1e-4);
        assert!((g - Vec3::new(0.0, 0.0, 1.0)).length() < 1e-6);
    }

    #[test]
    fn plane_gradient_is_exact_under_fd() {
        let n = Vec3::new(0.3, -0.5, 0.81).normalized();
        let f = ScalarField::plane(n).unwrap();
        let g = grad_fd(&f, Vec3::new(0.4, 1.0, -2.0), 1e-3);
        assert!((g - n).length() < 1e-10);
    }

    #[test]
    fn mlp_field_gradient_matches_backprop() {
        let net = Mlp::seeded(&[3, 12, 12, 1], 5).unwrap();
        let f = ScalarField::mlp(net).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let x = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let a = f.grad(x);
            let n = grad_fd(&f, x, 1e-5);
            let denom = a.length().max(n.length()).max(1e-6);
            assert!(
                (a - n).length() / denom < 1e-5,
                "analytic {a:?} vs fd {n:?}"
            );
        }
    }

    #[test]
    fn analytic_gradients_match_fd_for_all_backends() {
        let fields: Vec<ScalarField> = vec![
            ScalarField::sphere(Vec3::new(0.2, -0.1, 0.4)),
            ScalarField::plane(Vec3::new(1.0, 2.0, -0.5)).unwrap(),
            ScalarField::radial_ellipsoid(Mat3::from_rows(
                [2.0, 0.3, 0.0],
                [0.3, 1.5, 0.1],
                [0.0, 0.1, 1.0],
            ))
            .unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for f in &fields {
            for _ in 0..20 {
                let x = Vec3::new(
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                );
                let a = f.grad(x);
                let n = grad_fd(f, x, 1e-5);
                assert!((a - n).length() < 1e-8, "{f:?}: {a:?} vs {n:?}");
            }
        }
    }

    #[test]
    fn field_eval_is_deterministic() {
        let net = Mlp::seeded(&[3, 8, 1], 12).unwrap();
        let f = ScalarField::mlp(net).unwrap();
        let x = Vec3::new(0.1, 0.2, 0.3);
        assert_eq!(f.eval(x).to_bits(), f.eval(x).to_bits());
    }

    #[test]
    fn levels_must_strictly_increase() {
        assert!(IsoLevels::new(vec![0.1, 0.1, 0.2]).is_err());
        assert!(IsoLevels::new(vec![]).is_err());
        assert!(IsoLevels::new(vec![0.1, 0.5, 0.2]).is_err());
        let l = IsoLevels::uniform(0.5, 1.0, 6).unwrap();
        assert_eq!(l.len(), 6);
        assert!((l.values()[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn counting_field_counts() {
        let f = ScalarField::sphere(Vec3::ZERO);
        let count = AtomicU64::new(0);
        let wrapped = CountingField::new(&f, &count);
        for i in 0..10 {
            wrapped.eval(Vec3::new(i as f64, 0.0, 0.0));
        }
        assert_eq!(count.load(Ordering::Relaxed), 10);
    }
}
