//! Real spherical-harmonic basis up to degree 3, with complex coefficients.
//!
//! Angular scattering at a point is a complex function of direction, stored
//! as complex weights on the real SH basis. The basis is evaluated from the
//! explicit degree-3 polynomial forms (fast and exact at this fixed small
//! degree); entries are indexed `l*l + l + m`.

use crate::math::Vec3;
use num_complex::Complex64;
use thiserror::Error;

/// Highest supported SH degree. Degrees above this are rejected rather than
/// extrapolated.
pub const MAX_DEGREE: usize = 3;

/// Number of basis functions for degree `l_max`.
pub fn basis_len(l_max: usize) -> usize {
    (l_max + 1) * (l_max + 1)
}

#[derive(Debug, Error)]
pub enum ShError {
    #[error("unsupported SH degree {0} (max {MAX_DEGREE})")]
    UnsupportedDegree(usize),
    #[error("coefficient count {got} does not match degree {l_max} (expected {expected})")]
    CoeffLen {
        got: usize,
        l_max: usize,
        expected: usize,
    },
    #[error("cannot build a direction from the zero vector")]
    ZeroVector,
}

/// Complex SH coefficients of a single spatial point, length `(L+1)^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShCoeffs {
    pub c: Vec<Complex64>,
    pub l_max: usize,
}

impl ShCoeffs {
    pub fn new(c: Vec<Complex64>, l_max: usize) -> Result<ShCoeffs, ShError> {
        if l_max > MAX_DEGREE {
            return Err(ShError::UnsupportedDegree(l_max));
        }
        let expected = basis_len(l_max);
        if c.len() != expected {
            return Err(ShError::CoeffLen {
                got: c.len(),
                l_max,
                expected,
            });
        }
        Ok(ShCoeffs { c, l_max })
    }

    pub fn zeros(l_max: usize) -> Result<ShCoeffs, ShError> {
        ShCoeffs::new(vec![Complex64::new(0.0, 0.0); basis_len(l_max)], l_max)
    }
}

/// Direction on the unit sphere: polar angle from +z in `[0, pi]`, azimuth
/// from +x in `[0, 2pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub theta: f64,
    pub phi: f64,
}

impl Direction {
    pub fn new(theta: f64, phi: f64) -> Direction {
        Direction { theta, phi }
    }

    pub fn to_unit_vector(self) -> Vec3 {
        let (st, ct) = (self.theta.sin(), self.theta.cos());
        let (sp, cp) = (self.phi.sin(), self.phi.cos());
        Vec3::new(st * cp, st * sp, ct)
    }
}

/// Direction of a (non-zero) vector: `theta = arccos(z/|v|)`,
/// `phi = atan2(y, x)` wrapped to `[0, 2pi)`.
pub fn dir_from_vector(v: Vec3) -> Result<Direction, ShError> {
    let n = v.norm();
    if n == 0.0 || !n.is_finite() {
        return Err(ShError::ZeroVector);
    }
    let theta = (v.z / n).clamp(-1.0, 1.0).acos();
    let mut phi = v.y.atan2(v.x);
    if phi < 0.0 {
        phi += 2.0 * std::f64::consts::PI;
    }
    if phi >= 2.0 * std::f64::consts::PI {
        phi = 0.0;
    }
    Ok(Direction { theta, phi })
}

// Normalization constants of the real orthonormal SH basis (Condon-Shortley
// phase absorbed, standard real convention).
const C0: f64 = 0.28209479177387814; // 1/(2 sqrt(pi))
const C1: f64 = 0.4886025119029199; // sqrt(3/(4 pi))
const C2_0: f64 = 1.0925484305920792; // sqrt(15/(4 pi))
const C2_2: f64 = 0.31539156525252005; // sqrt(5/(16 pi))
const C2_4: f64 = 0.5462742152960396; // sqrt(15/(16 pi))
const C3_0: f64 = 0.5900435899266435; // sqrt(35/(32 pi))
const C3_1: f64 = 2.890611442640554; // sqrt(105/(4 pi))
const C3_2: f64 = 0.4570457994644658; // sqrt(21/(32 pi))
const C3_3: f64 = 0.3731763325901154; // sqrt(7/(16 pi))
const C3_4: f64 = 1.445305721320277; // sqrt(105/(16 pi))

/// Real orthonormal SH values for all `(l, m)` with `l <= l_max`, indexed
/// `l*l + l + m`.
pub fn eval_sh_basis(l_max: usize, dir: Direction) -> Result<Vec<f64>, ShError> {
    if l_max > MAX_DEGREE {
        return Err(ShError::UnsupportedDegree(l_max));
    }
    let u = dir.to_unit_vector();
    Ok(eval_sh_basis_unit(l_max, u))
}

/// Same as `eval_sh_basis` but takes a unit vector directly. `u` must be
/// normalized; callers on hot paths keep vectors unit-length already.
pub fn eval_sh_basis_unit(l_max: usize, u: Vec3) -> Vec<f64> {
    debug_assert!(l_max <= MAX_DEGREE);
    let (x, y, z) = (u.x, u.y, u.z);
    let mut out = Vec::with_capacity(basis_len(l_max));
    out.push(C0);
    if l_max >= 1 {
        out.push(-C1 * y);
        out.push(C1 * z);
        out.push(-C1 * x);
    }
    if l_max >= 2 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.push(C2_0 * x * y);
        out.push(-C2_0 * y * z);
        out.push(C2_2 * (3.0 * zz - 1.0));
        out.push(-C2_0 * x * z);
        out.push(C2_4 * (xx - yy));
    }
    if l_max >= 3 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out.push(-C3_0 * y * (3.0 * xx - yy));
        out.push(C3_1 * x * y * z);
        out.push(-C3_2 * y * (5.0 * zz - 1.0));
        out.push(C3_3 * z * (5.0 * zz - 3.0));
        out.push(-C3_2 * x * (5.0 * zz - 1.0));
        out.push(C3_4 * z * (xx - yy));
        out.push(-C3_0 * x * (xx - 3.0 * yy));
    }
    out
}

/// Angular scattering amplitude: complex-weighted sum of the basis at `dir`.
pub fn eval_scatter(coeffs: &ShCoeffs, dir: Direction) -> Complex64 {
    let basis = eval_sh_basis_unit(coeffs.l_max, dir.to_unit_vector());
    coeffs
        .c
        .iter()
        .zip(&basis)
        .map(|(c, &y)| c * y)
        .fold(Complex64::new(0.0, 0.0), |a, b| a + b)
}

/// Direction-independent (DC) component: `c_{0,0} / sqrt(4 pi)`, the mean of
/// the angular scattering function over the sphere.
pub fn dc_amplitude(coeffs: &ShCoeffs) -> Complex64 {
    coeffs.c[0] * C0 // 1/sqrt(4 pi) == Y00
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use std::f64::consts::PI;

    /// Quadrature nodes/weights integrating smooth functions over the unit
    /// sphere: composite Simpson in theta (even interval count) crossed with
    /// midpoint in phi, with the sin(theta) area factor folded into the
    /// weights. Simpson in theta is what pushes the Gram error of the
    /// degree-3 basis below 1e-6 on a 128x256 grid.
    fn sphere_quadrature(n_theta: usize, n_phi: usize) -> Vec<(Direction, f64)> {
        assert!(n_theta % 2 == 0);
        let h = PI / n_theta as f64;
        let dphi = 2.0 * PI / n_phi as f64;
        let mut nodes = Vec::with_capacity((n_theta + 1) * n_phi);
        for i in 0..=n_theta {
            let theta = i as f64 * h;
            let simpson = if i == 0 || i == n_theta {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            let w_theta = simpson * h / 3.0 * theta.sin();
            for j in 0..n_phi {
                let phi = (j as f64 + 0.5) * dphi;
                nodes.push((Direction::new(theta, phi), w_theta * dphi));
            }
        }
        nodes
    }

    #[test]
    fn constant_term_and_zonal_axis_values() {
        let b = eval_sh_basis(3, Direction::new(1.234, 2.345)).unwrap();
        assert_relative_eq!(b[0], 0.2820947918, epsilon = 1e-9);
        let up = eval_sh_basis(1, Direction::new(0.0, 0.0)).unwrap();
        assert_relative_eq!(up[2], 0.4886025119, epsilon = 1e-9); // Y_{1,0}
        assert_relative_eq!(up[1], 0.0, epsilon = 1e-15); // Y_{1,-1}
        assert_relative_eq!(up[3], 0.0, epsilon = 1e-15); // Y_{1,+1}
    }

    #[test]
    fn rejects_unsupported_degree() {
        assert!(matches!(
            eval_sh_basis(4, Direction::new(0.1, 0.2)),
            Err(ShError::UnsupportedDegree(4))
        ));
        assert!(ShCoeffs::zeros(4).is_err());
        assert!(ShCoeffs::new(vec![Complex64::new(0.0, 0.0); 5], 1).is_err());
    }

    #[test]
    fn basis_is_orthonormal_under_quadrature() {
        let nodes = sphere_quadrature(128, 256);
        let n = basis_len(3);
        let mut gram = vec![vec![0.0; n]; n];
        for &(dir, w) in &nodes {
            let b = eval_sh_basis(3, dir).unwrap();
            for i in 0..n {
                for j in i..n {
                    gram[i][j] += w * b[i] * b[j];
                }
            }
        }
        for i in 0..n {
            for j in i..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram[i][j] - want).abs() < 1e-6,
                    "gram[{i}][{j}] = {} (want {want})",
                    gram[i][j]
                );
            }
        }
    }

    #[test]
    fn scatter_matches_basis_dot_product_and_is_linear() {
        let mut rng = crate::rng::keyed_rng(21, &[0]);
        for _ in 0..32 {
            let c1: Vec<Complex64> = (0..16)
                .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect();
            let c2: Vec<Complex64> = (0..16)
                .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
                .collect();
            let dir = Direction::new(rng.random::<f64>() * PI, rng.random::<f64>() * 2.0 * PI);
            let s1 = ShCoeffs::new(c1.clone(), 3).unwrap();
            let s2 = ShCoeffs::new(c2.clone(), 3).unwrap();

            let basis = eval_sh_basis(3, dir).unwrap();
            let direct: Complex64 = c1
                .iter()
                .zip(&basis)
                .map(|(c, &y)| c * y)
                .fold(Complex64::new(0.0, 0.0), |a, b| a + b);
            assert!((eval_scatter(&s1, dir) - direct).norm() < 1e-14);

            let a = 1.7;
            let combo = ShCoeffs::new(
                c1.iter().zip(&c2).map(|(x, y)| x * a + y).collect(),
                3,
            )
            .unwrap();
            let want = eval_scatter(&s1, dir) * a + eval_scatter(&s2, dir);
            assert!((eval_scatter(&combo, dir) - want).norm() < 1e-13);
        }
    }

    #[test]
    fn isotropic_dc_gives_unit_scatter() {
        let mut c = vec![Complex64::new(0.0, 0.0); 16];
        c[0] = Complex64::new((4.0 * PI).sqrt(), 0.0);
        let coeffs = ShCoeffs::new(c, 3).unwrap();
        for dir in [
            Direction::new(0.3, 0.1),
            Direction::new(1.9, 4.2),
            Direction::new(3.0, 6.0),
        ] {
            let s = eval_scatter(&coeffs, dir);
            assert_relative_eq!(s.re, 1.0, epsilon = 1e-12);
            assert_relative_eq!(s.im, 0.0, epsilon = 1e-12);
        }
        assert_relative_eq!(dc_amplitude(&coeffs).re, 1.0, epsilon = 1e-12);
        let zero = ShCoeffs::zeros(3).unwrap();
        assert_eq!(eval_scatter(&zero, Direction::new(1.0, 1.0)).norm(), 0.0);
        assert_eq!(dc_amplitude(&zero).norm(), 0.0);
    }

    #[test]
    fn spherical_mean_of_scatter_is_dc_amplitude() {
        let mut rng = crate::rng::keyed_rng(22, &[0]);
        let c: Vec<Complex64> = (0..16)
            .map(|_| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
            .collect();
        let coeffs = ShCoeffs::new(c, 3).unwrap();
        let nodes = sphere_quadrature(128, 256);
        let mut mean = Complex64::new(0.0, 0.0);
        for &(dir, w) in &nodes {
            mean += eval_scatter(&coeffs, dir) * w;
        }
        mean /= 4.0 * PI;
        let dc = dc_amplitude(&coeffs);
        assert!((mean - dc).norm() < 1e-6, "mean {mean} vs dc {dc}");
    }

    #[test]
    fn dir_vector_roundtrip() {
        assert!(dir_from_vector(Vec3::ZERO).is_err());
        let d = dir_from_vector(Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((d.theta, d.phi), (0.0, 0.0));
        let d = dir_from_vector(Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(d.theta, PI / 2.0, epsilon = 1e-15);
        assert_relative_eq!(d.phi, 0.0, epsilon = 1e-15);

        let mut rng = crate::rng::keyed_rng(23, &[0]);
        for _ in 0..100 {
            let dir = Direction::new(
                rng.random::<f64>() * PI,
                rng.random::<f64>() * 2.0 * PI,
            );
            let back = dir_from_vector(dir.to_unit_vector()).unwrap();
            assert_relative_eq!(back.theta, dir.theta, epsilon = 1e-12);
            // Azimuth is undefined at the poles; compare via unit vectors.
            let err = (back.to_unit_vector() - dir.to_unit_vector()).norm();
            assert!(err < 1e-12);
        }
    }
}
