//! Similarity transforms (translation, anisotropic scaling, rotation) and
//! their 2x3 affine-matrix representation.
//!
//! `T(s) = R(omega) * diag(sigma_x, sigma_y) * s + theta`. The linear part of
//! every such map has orthogonal columns (`a11*a12 + a21*a22 = 0`), and the
//! map is recovered from any matrix with orthogonal columns and positive
//! diagonal through its QR factorization. Inverses and compositions generally
//! leave the family, so they are returned as [`AffineMatrix`].

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D point `[x, y]` in voxel coordinates.
pub type Point = [f64; 2];

/// Accepted `|a11*a12 + a21*a22|` for a matrix to count as shear-free.
pub const SHEAR_TOLERANCE: f64 = 1e-8;

/// Anything that acts on the plane as an affine map.
pub trait Affine {
    fn matrix(&self) -> AffineMatrix;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub theta: [f64; 2],
    pub sigma: [f64; 2],
    pub omega: f64,
}

impl SimilarityParams {
    pub const IDENTITY: Self = Self {
        theta: [0.0, 0.0],
        sigma: [1.0, 1.0],
        omega: 0.0,
    };

    pub fn new(theta: [f64; 2], sigma: [f64; 2], omega: f64) -> Self {
        Self {
            theta,
            sigma,
            omega,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new([tx, ty], [1.0, 1.0], 0.0)
    }

    /// Checks `sigma > 0` and `omega` in the open interval (-pi/2, pi/2).
    pub fn is_valid(&self) -> bool {
        self.theta.iter().all(|t| t.is_finite())
            && self.sigma.iter().all(|&s| s > 0.0 && s.is_finite())
            && self.omega.abs() < FRAC_PI_2
    }

    /// `[theta_x, theta_y, sigma_x, sigma_y, omega]`.
    pub fn to_array(&self) -> [f64; 5] {
        [
            self.theta[0],
            self.theta[1],
            self.sigma[0],
            self.sigma[1],
            self.omega,
        ]
    }

    pub fn from_array(w: [f64; 5]) -> Self {
        Self::new([w[0], w[1]], [w[2], w[3]], w[4])
    }

    pub fn apply(&self, s: Point) -> Point {
        self.to_matrix().apply(s)
    }

    pub fn to_matrix(&self) -> AffineMatrix {
        let (sin, cos) = self.omega.sin_cos();
        let [sx, sy] = self.sigma;
        AffineMatrix {
            a11: sx * cos,
            a12: -sy * sin,
            a21: sx * sin,
            a22: sy * cos,
            tx: self.theta[0],
            ty: self.theta[1],
        }
    }

    /// Inverts the QR factorization of a shear-free matrix.
    pub fn from_matrix(m: &AffineMatrix) -> Result<Self> {
        let shear = m.a11 * m.a12 + m.a21 * m.a22;
        let scale = m.linear_norm_sq().max(1.0);
        if shear.abs() > SHEAR_TOLERANCE * scale {
            return Err(Error::NotShearFree(shear));
        }
        if m.a11 <= 0.0 || m.a22 <= 0.0 {
            return Err(Error::NegativeScaling {
                a11: m.a11,
                a22: m.a22,
            });
        }
        let omega = (m.a21 / m.a11).atan();
        let sigma_x = m.a11.signum() * m.a11.hypot(m.a21);
        let sigma_y = m.a22 / omega.cos();
        Ok(Self::new([m.tx, m.ty], [sigma_x, sigma_y], omega))
    }

    /// The exact inverse map. Not a similarity unless `sigma_x == sigma_y`.
    pub fn invert(&self) -> AffineMatrix {
        invert(self)
    }
}

impl Default for SimilarityParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Affine for SimilarityParams {
    fn matrix(&self) -> AffineMatrix {
        self.to_matrix()
    }
}

/// The 2x3 matrix `[A theta]`, serialized row-major as
/// `[[a11, a12, tx], [a21, a22, ty]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[[f64; 3]; 2]", into = "[[f64; 3]; 2]")]
pub struct AffineMatrix {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub tx: f64,
    pub ty: f64,
}

impl From<[[f64; 3]; 2]> for AffineMatrix {
    fn from(r: [[f64; 3]; 2]) -> Self {
        Self {
            a11: r[0][0],
            a12: r[0][1],
            tx: r[0][2],
            a21: r[1][0],
            a22: r[1][1],
            ty: r[1][2],
        }
    }
}

impl From<AffineMatrix> for [[f64; 3]; 2] {
    fn from(m: AffineMatrix) -> Self {
        m.rows()
    }
}

impl AffineMatrix {
    pub const IDENTITY: Self = Self {
        a11: 1.0,
        a12: 0.0,
        a21: 0.0,
        a22: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn rows(&self) -> [[f64; 3]; 2] {
        [[self.a11, self.a12, self.tx], [self.a21, self.a22, self.ty]]
    }

    pub fn apply(&self, s: Point) -> Point {
        [
            self.a11 * s[0] + self.a12 * s[1] + self.tx,
            self.a21 * s[0] + self.a22 * s[1] + self.ty,
        ]
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    /// `a11*a12 + a21*a22`, zero exactly when the columns are orthogonal.
    pub fn shear(&self) -> f64 {
        self.a11 * self.a12 + self.a21 * self.a22
    }

    fn linear_norm_sq(&self) -> f64 {
        self.a11 * self.a11 + self.a12 * self.a12 + self.a21 * self.a21 + self.a22 * self.a22
    }

    /// `self ∘ first`: applies `first`, then `self`.
    pub fn after(&self, first: &AffineMatrix) -> AffineMatrix {
        let (a, b) = (self, first);
        AffineMatrix {
            a11: a.a11 * b.a11 + a.a12 * b.a21,
            a12: a.a11 * b.a12 + a.a12 * b.a22,
            a21: a.a21 * b.a11 + a.a22 * b.a21,
            a22: a.a21 * b.a12 + a.a22 * b.a22,
            tx: a.a11 * b.tx + a.a12 * b.ty + a.tx,
            ty: a.a21 * b.tx + a.a22 * b.ty + a.ty,
        }
    }

    pub fn inverse(&self) -> Option<AffineMatrix> {
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return None;
        }
        let (a11, a12, a21, a22) = (
            self.a22 / det,
            -self.a12 / det,
            -self.a21 / det,
            self.a11 / det,
        );
        Some(AffineMatrix {
            a11,
            a12,
            a21,
            a22,
            tx: -(a11 * self.tx + a12 * self.ty),
            ty: -(a21 * self.tx + a22 * self.ty),
        })
    }

    /// Frobenius norm of the difference of the full 2x3 matrices.
    pub fn frobenius_distance(&self, other: &AffineMatrix) -> f64 {
        let a = self.rows();
        let b = other.rows();
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// The closest shear-free matrix `R(omega) diag(sigma)` in Frobenius norm
    /// of the linear part, keeping the translation. Scalings are floored at a
    /// tiny positive value so the result is always a valid similarity.
    pub fn nearest_similarity(&self) -> SimilarityParams {
        // ||A - R D||^2 = ||R^T A - D||^2; the off-diagonal of R^T A is a
        // sinusoid in 2*omega with a closed-form minimizer.
        let p = self.a12 * self.a12 + self.a21 * self.a21;
        let q = self.a11 * self.a11 + self.a22 * self.a22;
        let b = self.a12 * self.a22 - self.a11 * self.a21;
        let mut omega = 0.5 * (-b).atan2(-0.5 * (p - q));
        if omega >= FRAC_PI_2 {
            omega -= std::f64::consts::PI;
        } else if omega <= -FRAC_PI_2 {
            omega += std::f64::consts::PI;
        }
        let (s, c) = omega.sin_cos();
        let sx = (c * self.a11 + s * self.a21).max(1e-12);
        let sy = (-s * self.a12 + c * self.a22).max(1e-12);
        SimilarityParams::new([self.tx, self.ty], [sx, sy], omega)
    }
}

impl Default for AffineMatrix {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Affine for AffineMatrix {
    fn matrix(&self) -> AffineMatrix {
        *self
    }
}

/// The exact inverse `T^-1(s) = A^-1 (s - theta)`.
pub fn invert(t: &SimilarityParams) -> AffineMatrix {
    let (sin, cos) = t.omega.sin_cos();
    let [sx, sy] = t.sigma;
    // A^-1 = diag(1/sx, 1/sy) R(-omega)
    let a11 = cos / sx;
    let a12 = sin / sx;
    let a21 = -sin / sy;
    let a22 = cos / sy;
    AffineMatrix {
        a11,
        a12,
        a21,
        a22,
        tx: -(a11 * t.theta[0] + a12 * t.theta[1]),
        ty: -(a21 * t.theta[0] + a22 * t.theta[1]),
    }
}

/// `(t2 ∘ t1)(s) = t2(t1(s))`, a general affine map.
pub fn compose(t2: &impl Affine, t1: &impl Affine) -> AffineMatrix {
    t2.matrix().after(&t1.matrix())
}
