//! Rigid-body and projective primitives.
//!
//! Frames follow the usual pinhole convention: camera X right, Y down,
//! Z forward. The ground frame shares the camera's X axis and differs from
//! it only by the pitch rotation `R_cg = exp([-pitch, 0, 0])`.
//!
//! Bird's-eye-view (BEV) vectors are `(X, Z)` pairs in the ground frame.
//! A BEV heading is measured from the forward axis `(0, 1)` and is positive
//! when turning toward `+X`, which is the same sense as a positive rotation
//! about the ground `Y` axis through [`exp_so3`]. Every signed angle in the
//! crate uses this one convention.

use std::f64::consts::PI;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};

/// Depth at or below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-12;
/// Ground-plane norm below which a ray is treated as vertical.
pub const MIN_BEV_NORM: f64 = 1e-12;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a % (2.0 * PI);
    if w <= -PI {
        w += 2.0 * PI;
    } else if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// A proper rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Wraps `m` after checking orthonormality and `det = +1` within 1e-9.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let ortho = (m.transpose() * m - Matrix3::identity()).amax();
        let det = m.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(PoseError::DegenerateGeometry("matrix is not a rotation"));
        }
        Ok(Self(m))
    }

    /// Wraps `m` without validation. Callers guarantee the invariants.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    /// Rotation about the ground `Y` axis by `angle`.
    pub fn about_y(angle: f64) -> Self {
        exp_so3(&Vector3::new(0.0, angle, 0.0))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        ((self.0.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    /// Re-orthonormalizes through the SVD, used after long update chains.
    pub fn renormalized(&self) -> Self {
        let svd = self.0.svd(true, true);
        let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut m = u * v_t;
        if m.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            m = u * v_t;
        }
        Self(m)
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        Rotation(self.0 * rhs.0)
    }
}

impl Mul<Vector3<f64>> for Rotation {
    type Output = Vector3<f64>;
    fn mul(self, rhs: Vector3<f64>) -> Vector3<f64> {
        self.0 * rhs
    }
}

/// Exponential map `so(3) → SO(3)` (Rodrigues), with a second-order Taylor
/// expansion near the origin.
pub fn exp_so3(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let k = skew(omega);
    let k2 = k * k;
    let (a, b) = if theta2 < 1e-16 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Rotation(Matrix3::identity() + k * a + k2 * b)
}

/// Camera-from-object rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Rotation,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Rotation, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Rotation::identity(), Vector3::zeros())
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Rotation::identity(), t)
    }

    pub fn transform_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.matrix() * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt.matrix() * self.translation))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        if (m.fixed_view::<1, 4>(3, 0) - nalgebra::RowVector4::new(0.0, 0.0, 0.0, 1.0)).amax()
            > 1e-12
        {
            return Err(PoseError::DegenerateGeometry("bottom row is not (0,0,0,1)"));
        }
        let r = Rotation::from_matrix(m.fixed_view::<3, 3>(0, 0).into_owned())?;
        Ok(Self::new(r, m.fixed_view::<3, 1>(0, 3).into_owned()))
    }

    /// Left-multiplicative update: `R ← exp(δω)·R`, `t ← t + δt`.
    pub fn perturbed(&self, d_omega: &Vector3<f64>, d_t: &Vector3<f64>) -> Self {
        Self::new(exp_so3(d_omega) * self.rotation, self.translation + d_t)
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation.matrix() * rhs.translation + self.translation,
        )
    }
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(PoseError::InvalidConfig(format!(
                "focal lengths must be positive (fx={fx}, fy={fy})"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `K⁻¹ (u, v, 1)ᵀ`.
    pub fn back_project(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        )
    }

    /// Projects a camera-frame point.
    pub fn project_camera(&self, p: &Vector3<f64>) -> Result<Vector2<f64>> {
        if p.z <= MIN_DEPTH {
            return Err(PoseError::NonPositiveDepth);
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }
}

/// Ground-to-camera rotation derived from the camera pitch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundFrame {
    pitch: f64,
    r_cg: Rotation,
}

impl GroundFrame {
    /// `pitch` in radians, must lie in `(-π/2, π/2)`.
    pub fn new(pitch: f64) -> Result<Self> {
        if !(pitch.abs() < PI / 2.0) {
            return Err(PoseError::InvalidConfig(format!(
                "pitch {pitch} rad outside (-pi/2, pi/2)"
            )));
        }
        Ok(Self {
            pitch,
            r_cg: exp_so3(&Vector3::new(-pitch, 0.0, 0.0)),
        })
    }

    pub fn level() -> Self {
        Self {
            pitch: 0.0,
            r_cg: Rotation::identity(),
        }
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn r_cg(&self) -> &Rotation {
        &self.r_cg
    }

    /// Camera-frame vector expressed in the ground frame.
    pub fn to_ground(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.r_cg.matrix().tr_mul(v)
    }
}

/// Pinhole projection of `pose·x`.
pub fn project(pose: &Pose, k: &Intrinsics, x: &Vector3<f64>) -> Result<Vector2<f64>> {
    k.project_camera(&pose.transform_point(x))
}

/// Camera-frame point at `depth` along the ray through `pixel`.
pub fn unproject(pixel: &Vector2<f64>, k: &Intrinsics, depth: f64) -> Vector3<f64> {
    k.back_project(pixel) * depth
}

/// Ground-frame ray `R_cgᵀ K⁻¹ x̂`, scaled so that its `(X, Z)` part has unit norm.
pub fn ground_ray(pixel: &Vector2<f64>, k: &Intrinsics, g: &GroundFrame) -> Result<Vector3<f64>> {
    let d = g.to_ground(&k.back_project(pixel));
    let n = d.x.hypot(d.z);
    if n < MIN_BEV_NORM {
        return Err(PoseError::DegenerateRay);
    }
    Ok(d / n)
}

/// Unit BEV direction `(V_X, V_Z)` of a camera-frame vector.
pub fn to_bev(v: &Vector3<f64>, g: &GroundFrame) -> Result<Vector2<f64>> {
    let w = g.to_ground(v);
    let b = Vector2::new(w.x, w.z);
    let n = b.norm();
    if n < MIN_BEV_NORM {
        return Err(PoseError::DegenerateRay);
    }
    Ok(b / n)
}

/// Signed angle in `(-π, π]` that rotates BEV direction `a` onto `b`.
///
/// `signed_bev_angle((0,1), (1,0)) = +π/2`. The function is antisymmetric.
pub fn signed_bev_angle(a: &Vector2<f64>, b: &Vector2<f64>) -> Result<f64> {
    if a.norm() < MIN_BEV_NORM || b.norm() < MIN_BEV_NORM {
        return Err(PoseError::DegenerateRay);
    }
    // (x, z) ordering: turning from +Z toward +X is positive.
    let cross = a.y * b.x - a.x * b.y;
    let dot = a.dot(b);
    let ang = cross.atan2(dot);
    // atan2 returns -π for (−0, negative); keep the half-open interval.
    Ok(if ang <= -PI { PI } else { ang })
}

/// Heading of a BEV direction relative to the forward axis `(0, 1)`.
pub fn bev_heading(v: &Vector2<f64>) -> f64 {
    v.x.atan2(v.y)
}

/// Unit BEV direction with the given heading.
pub fn bev_from_heading(h: f64) -> Vector2<f64> {
    Vector2::new(h.sin(), h.cos())
}
