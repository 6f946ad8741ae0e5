//! Closed-form perspective-1-point solver for objects resting on the ground.
//!
//! Given one 2D–3D keypoint correspondence, the object's 2D bounding box,
//! its BEV footprint and the camera pitch, the left and right box edges are
//! back-projected to BEV rays. The footprint corners adjacent to those rays
//! depend on the local yaw, which splits the problem into four cases. In
//! each case the sine rule in the triangles camera–keypoint–corner yields the
//! local yaw `θ_y` and the BEV keypoint distance `l_C` in closed form:
//!
//! ```text
//! l_C = l_R·sin(θ_y + ψ_R − θ_R)/sin θ_R = l_L·sin(−θ_y − ψ_L − θ_L)/sin θ_L
//! ```
//!
//! Case hypotheses whose angles leave the case's admissible ranges are
//! discarded.
//!
//! Footprint corners are numbered in the model frame relative to the forward
//! direction `v_f`: 1 front-left, 2 front-right, 3 rear-right, 4 rear-left,
//! where "right" is the `+X` side when `v_f = +Z`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::geometry::{
    bev_heading, ground_ray, signed_bev_angle, to_bev, GroundFrame, Intrinsics, Pose, Rotation,
};
use crate::ransac::Correspondence;

/// Tolerance, in radians, applied at the ends of each case's angle ranges.
pub const RANGE_TOL: f64 = 1e-9;
/// Minimum `|sin θ_L|`, `|sin θ_R|` accepted by the closed form.
pub const MIN_EDGE_SINE: f64 = 1e-9;

/// Axis-aligned 2D bounding box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            return Err(PoseError::InvalidConfig(format!(
                "bounding box requires x_min < x_max and y_min < y_max, got [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Tightest box around a set of pixels.
    pub fn enclosing<'a>(pixels: impl IntoIterator<Item = &'a Vector2<f64>>) -> Result<Self> {
        let mut b = [
            f64::INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::NEG_INFINITY,
        ];
        for p in pixels {
            b[0] = b[0].min(p.x);
            b[1] = b[1].min(p.y);
            b[2] = b[2].max(p.x);
            b[3] = b[3].max(p.y);
        }
        Self::new(b[0], b[1], b[2], b[3])
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// BEV footprint of the object's 3D bounding box in model coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox3D {
    corners: [Vector2<f64>; 4],
    forward: Vector2<f64>,
}

impl BoundingBox3D {
    /// `corners` are `(X, Z)` model coordinates of corners 1–4.
    pub fn new(corners: [Vector2<f64>; 4], forward: Vector2<f64>) -> Result<Self> {
        let n = forward.norm();
        if (n - 1.0).abs() > 1e-6 {
            return Err(PoseError::InvalidConfig(format!(
                "forward direction must be a unit vector, norm is {n}"
            )));
        }
        let forward = forward / n;
        let scale = corners.iter().map(|c| c.norm()).fold(1.0f64, f64::max);
        for i in 0..4 {
            let a = corners[(i + 1) % 4] - corners[i];
            let b = corners[(i + 2) % 4] - corners[(i + 1) % 4];
            // Clockwise in (x, z) == positive under the heading convention.
            let turn = a.y * b.x - a.x * b.y;
            if turn <= 1e-12 * scale * scale {
                return Err(PoseError::InvalidConfig(
                    "footprint corners must form a convex quadrilateral ordered 1..4 clockwise from above"
                        .into(),
                ));
            }
        }
        let across = signed_bev_angle(&forward, &(corners[1] - corners[0]))?;
        if !(across > 0.0 && across < PI) {
            return Err(PoseError::InvalidConfig(
                "corner 2 must lie on the right of corner 1 relative to the forward direction"
                    .into(),
            ));
        }
        Ok(Self { corners, forward })
    }

    /// Rectangle `[x_min, x_max] × [z_min, z_max]` with forward `+Z`.
    pub fn from_extents(x_min: f64, x_max: f64, z_min: f64, z_max: f64) -> Result<Self> {
        Self::new(
            [
                Vector2::new(x_min, z_max),
                Vector2::new(x_max, z_max),
                Vector2::new(x_max, z_min),
                Vector2::new(x_min, z_min),
            ],
            Vector2::new(0.0, 1.0),
        )
    }

    /// Corner by its 1-based number.
    pub fn corner(&self, number: usize) -> Vector2<f64> {
        self.corners[number - 1]
    }

    pub fn corners(&self) -> &[Vector2<f64>; 4] {
        &self.corners
    }

    pub fn forward(&self) -> Vector2<f64> {
        self.forward
    }

    /// Heading of `v_f` in the model frame.
    pub fn forward_heading(&self) -> f64 {
        bev_heading(&self.forward)
    }
}

/// One of the four corner-adjacency cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseId {
    Case1,
    Case2,
    Case3,
    Case4,
}

impl CaseId {
    pub const ALL: [CaseId; 4] = [CaseId::Case1, CaseId::Case2, CaseId::Case3, CaseId::Case4];

    /// Footprint corners adjacent to the (left, right) box edges.
    pub fn edge_corners(self) -> (usize, usize) {
        match self {
            CaseId::Case1 => (4, 2),
            CaseId::Case2 => (3, 1),
            CaseId::Case3 => (1, 3),
            CaseId::Case4 => (2, 4),
        }
    }

    pub fn yaw_range(self) -> (f64, f64) {
        match self {
            CaseId::Case1 => (0.0, FRAC_PI_2),
            CaseId::Case2 => (FRAC_PI_2, PI),
            CaseId::Case3 => (-FRAC_PI_2, 0.0),
            CaseId::Case4 => (-PI, -FRAC_PI_2),
        }
    }

    pub fn psi_left_range(self) -> (f64, f64) {
        match self {
            CaseId::Case1 => (-PI, -FRAC_PI_2),
            CaseId::Case2 => (FRAC_PI_2, PI),
            CaseId::Case3 => (-FRAC_PI_2, 0.0),
            CaseId::Case4 => (0.0, FRAC_PI_2),
        }
    }

    pub fn psi_right_range(self) -> (f64, f64) {
        match self {
            CaseId::Case1 => (0.0, FRAC_PI_2),
            CaseId::Case2 => (-FRAC_PI_2, 0.0),
            CaseId::Case3 => (FRAC_PI_2, PI),
            CaseId::Case4 => (-PI, -FRAC_PI_2),
        }
    }

    /// Case whose yaw range contains `yaw` (boundaries go to the lower-numbered case).
    pub fn for_yaw(yaw: f64) -> CaseId {
        CaseId::ALL
            .into_iter()
            .find(|c| in_range(yaw, c.yaw_range(), 0.0))
            .unwrap_or(CaseId::Case4)
    }

    pub fn number(self) -> u8 {
        match self {
            CaseId::Case1 => 1,
            CaseId::Case2 => 2,
            CaseId::Case3 => 3,
            CaseId::Case4 => 4,
        }
    }
}

impl std::fmt::Display for CaseId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "case{}", self.number())
    }
}

/// Whether `angle` lies in `[lo, hi]` modulo 2π, with `tol` slack at both ends.
pub fn in_range(angle: f64, (lo, hi): (f64, f64), tol: f64) -> bool {
    [angle, angle - 2.0 * PI, angle + 2.0 * PI]
        .iter()
        .any(|a| *a >= lo - tol && *a <= hi + tol)
}

/// Angles and lengths feeding the closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct P1PParams {
    /// Bearing of the keypoint ray from the camera forward axis.
    pub phi_y: f64,
    /// Angle from the left edge ray to the keypoint ray.
    pub theta_l: f64,
    /// Angle from the keypoint ray to the right edge ray.
    pub theta_r: f64,
    pub psi_l: f64,
    pub psi_r: f64,
    pub l_l: f64,
    pub l_r: f64,
    pub case: CaseId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct P1PSolution {
    /// Local yaw `θ_y`: angle from the keypoint ray to the object forward direction.
    pub yaw: f64,
    /// BEV distance from the camera to the keypoint.
    pub depth: f64,
    pub pose: Pose,
    pub case: CaseId,
}

/// BEV directions of the back-projected left and right bounding-box edges.
///
/// Each edge is represented by the pixel at its vertical midpoint.
pub fn edge_rays(
    bbox: &BoundingBox2D,
    k: &Intrinsics,
    g: &GroundFrame,
) -> Result<(Vector2<f64>, Vector2<f64>)> {
    let y_mid = 0.5 * (bbox.y_min + bbox.y_max);
    let left = to_bev(&k.back_project(&Vector2::new(bbox.x_min, y_mid)), g)?;
    let right = to_bev(&k.back_project(&Vector2::new(bbox.x_max, y_mid)), g)?;
    Ok((left, right))
}

/// `(ψ_L, ψ_R, l_L, l_R)` for `case` and a keypoint at BEV model position `keypoint`.
pub fn case_params(
    case: CaseId,
    keypoint: &Vector2<f64>,
    box3d: &BoundingBox3D,
) -> Result<(f64, f64, f64, f64)> {
    let (left, right) = case.edge_corners();
    let to_left = box3d.corner(left) - keypoint;
    let to_right = box3d.corner(right) - keypoint;
    let (l_l, l_r) = (to_left.norm(), to_right.norm());
    if l_l < 1e-12 || l_r < 1e-12 {
        return Err(PoseError::DegenerateGeometry(
            "keypoint coincides with a case corner",
        ));
    }
    let psi_l = signed_bev_angle(&box3d.forward(), &to_left)?;
    let psi_r = signed_bev_angle(&box3d.forward(), &to_right)?;
    Ok((psi_l, psi_r, l_l, l_r))
}

/// Ray-side parameters `(φ_y, θ_L, θ_R)` of a keypoint pixel.
pub fn ray_params(
    keypoint_px: &Vector2<f64>,
    bbox: &BoundingBox2D,
    k: &Intrinsics,
    g: &GroundFrame,
) -> Result<(f64, f64, f64)> {
    let (v_l, v_r) = edge_rays(bbox, k, g)?;
    let v_k = to_bev(&k.back_project(keypoint_px), g)?;
    let phi_y = bev_heading(&v_k);
    let theta_l = signed_bev_angle(&v_l, &v_k)?;
    let theta_r = signed_bev_angle(&v_k, &v_r)?;
    Ok((phi_y, theta_l, theta_r))
}

/// Full parameter set for one case.
pub fn params(
    case: CaseId,
    corr: &Correspondence,
    bbox: &BoundingBox2D,
    box3d: &BoundingBox3D,
    k: &Intrinsics,
    g: &GroundFrame,
) -> Result<P1PParams> {
    let (phi_y, theta_l, theta_r) = ray_params(&corr.image, bbox, k, g)?;
    let keypoint = Vector2::new(corr.model.x, corr.model.z);
    let (psi_l, psi_r, l_l, l_r) = case_params(case, &keypoint, box3d)?;
    Ok(P1PParams {
        phi_y,
        theta_l,
        theta_r,
        psi_l,
        psi_r,
        l_l,
        l_r,
        case,
    })
}

fn edge_sines(p: &P1PParams) -> Result<(f64, f64)> {
    let (sl, sr) = (p.theta_l.sin(), p.theta_r.sin());
    if sl.abs() < MIN_EDGE_SINE || sr.abs() < MIN_EDGE_SINE {
        return Err(PoseError::DegenerateGeometry(
            "keypoint ray coincides with a box edge ray",
        ));
    }
    Ok((sl, sr))
}

/// Local yaw from the closed form.
///
/// `tan θ_y` fixes the yaw only up to a half turn; the branch returned is the
/// one that places the keypoint in front of the camera (`l_C > 0`).
pub fn solve_yaw(p: &P1PParams) -> Result<f64> {
    let (sl, sr) = edge_sines(p)?;
    let a = p.l_r / sr;
    let b = p.l_l / sl;
    let w_r = p.psi_r - p.theta_r;
    let w_l = p.psi_l + p.theta_l;
    let num = -a * w_r.sin() - b * w_l.sin();
    let den = a * w_r.cos() + b * w_l.cos();
    if num.abs() < 1e-300 && den.abs() < 1e-300 {
        return Err(PoseError::DegenerateGeometry("yaw is undetermined"));
    }
    let yaw = num.atan2(den);
    if a * (yaw + w_r).sin() < 0.0 {
        Ok(crate::geometry::wrap_angle(yaw + PI))
    } else {
        Ok(yaw)
    }
}

/// Both sine-rule depth expressions `(right, left)` at `yaw`.
pub fn depth_expressions(p: &P1PParams, yaw: f64) -> Result<(f64, f64)> {
    let (sl, sr) = edge_sines(p)?;
    let phi_r = yaw + p.psi_r - p.theta_r;
    let phi_l = -yaw - p.psi_l - p.theta_l;
    Ok((p.l_r * phi_r.sin() / sr, p.l_l * phi_l.sin() / sl))
}

/// BEV keypoint distance `l_C`.
pub fn solve_depth(p: &P1PParams, yaw: f64) -> Result<f64> {
    let (depth, _) = depth_expressions(p, yaw)?;
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(PoseError::NoValidSolution);
    }
    Ok(depth)
}

/// `T_co = [R_cg|0]·[e^{ω_y}| l_C d_x]·[I|−X]` with `ω_y = (0, φ_y + θ_y − h_f, 0)`,
/// where `h_f` is the model heading of the forward direction (zero for `+Z`).
#[allow(clippy::too_many_arguments)]
pub fn assemble_pose(
    yaw: f64,
    depth: f64,
    phi_y: f64,
    keypoint_px: &Vector2<f64>,
    keypoint_model: &Vector3<f64>,
    model_forward: &Vector2<f64>,
    k: &Intrinsics,
    g: &GroundFrame,
) -> Result<Pose> {
    let d_x = ground_ray(keypoint_px, k, g)?;
    let heading = phi_y + yaw - bev_heading(model_forward);
    let r_y = Rotation::about_y(heading);
    let ground_from_object = Pose::new(r_y, depth * d_x - r_y.matrix() * keypoint_model);
    Ok(Pose::new(*g.r_cg(), Vector3::zeros()) * ground_from_object)
}

/// `|u_leftmost − x_min| + |u_rightmost − x_max|` of the footprint corners
/// reprojected at `height`.
pub fn edge_alignment_residual(
    pose: &Pose,
    box3d: &BoundingBox3D,
    height: f64,
    k: &Intrinsics,
    bbox: &BoundingBox2D,
) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in box3d.corners() {
        match crate::geometry::project(pose, k, &Vector3::new(c.x, height, c.y)) {
            Ok(px) => {
                lo = lo.min(px.x);
                hi = hi.max(px.x);
            }
            Err(_) => return f64::INFINITY,
        }
    }
    (lo - bbox.x_min).abs() + (hi - bbox.x_max).abs()
}

/// Solves a single case, including all range and sign filters.
pub fn solve_case(
    case: CaseId,
    corr: &Correspondence,
    bbox: &BoundingBox2D,
    box3d: &BoundingBox3D,
    k: &Intrinsics,
    g: &GroundFrame,
) -> Result<P1PSolution> {
    let p = params(case, corr, bbox, box3d, k, g)?;
    if !(p.theta_l > 0.0 && p.theta_r > 0.0) {
        return Err(PoseError::NoValidSolution);
    }
    if !in_range(p.psi_l, case.psi_left_range(), RANGE_TOL)
        || !in_range(p.psi_r, case.psi_right_range(), RANGE_TOL)
    {
        return Err(PoseError::NoValidSolution);
    }
    let yaw = solve_yaw(&p)?;
    if !in_range(yaw, case.yaw_range(), RANGE_TOL) {
        return Err(PoseError::NoValidSolution);
    }
    let depth = solve_depth(&p, yaw)?;
    let pose = assemble_pose(
        yaw,
        depth,
        p.phi_y,
        &corr.image,
        &corr.model,
        &box3d.forward(),
        k,
        g,
    )?;
    Ok(P1PSolution {
        yaw,
        depth,
        pose,
        case,
    })
}

/// Every case solution that passes the filters, best edge alignment first.
///
/// One keypoint ray and two tangent edge rays constrain yaw and depth with
/// two equations, and a footprint can touch both rays in two different ways.
/// Callers with more correspondences should score all candidates.
pub fn solve_all(
    corr: &Correspondence,
    bbox: &BoundingBox2D,
    box3d: &BoundingBox3D,
    k: &Intrinsics,
    g: &GroundFrame,
) -> Result<Vec<P1PSolution>> {
    let mut scored: Vec<(f64, P1PSolution)> = CaseId::ALL
        .into_iter()
        .filter_map(|case| solve_case(case, corr, bbox, box3d, k, g).ok())
        .map(|sol| {
            let score = edge_alignment_residual(&sol.pose, box3d, corr.model.y, k, bbox);
            (score, sol)
        })
        .collect();
    if scored.is_empty() {
        return Err(PoseError::NoValidSolution);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(scored.into_iter().map(|(_, s)| s).collect())
}

/// Single pose from one correspondence, the 2D box and the footprint.
///
/// When more than one case survives the filters, the candidate whose
/// reprojected footprint best matches the box's side edges wins.
pub fn solve(
    corr: &Correspondence,
    bbox: &BoundingBox2D,
    box3d: &BoundingBox3D,
    k: &Intrinsics,
    g: &GroundFrame,
) -> Result<P1PSolution> {
    solve_all(corr, bbox, box3d, k, g).map(|v| v[0])
}

/// Smallest distance between the object's local yaw, as seen along any ray
/// through its footprint, and a case boundary `{0, ±π/2, π}`.
///
/// Zero when a boundary falls inside the span of local yaws, which is where
/// the far-field case model stops being exact.
pub fn case_boundary_margin(pose: &Pose, box3d: &BoundingBox3D, g: &GroundFrame) -> f64 {
    let r_go = g.r_cg().transpose() * pose.rotation;
    let fwd = box3d.forward();
    let f = r_go * Vector3::new(fwd.x, 0.0, fwd.y);
    let heading = f.x.atan2(f.z);
    let t_g = g.to_ground(&pose.translation);
    let bearings: Vec<f64> = box3d
        .corners()
        .iter()
        .map(|c| {
            let p = r_go * Vector3::new(c.x, 0.0, c.y) + t_g;
            p.x.atan2(p.z)
        })
        .collect();
    let b_min = bearings.iter().cloned().fold(f64::INFINITY, f64::min);
    let b_max = bearings.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Local yaws span [heading − b_max, heading − b_min].
    let lo = heading - b_max;
    let hi = heading - b_min;
    let mut margin = f64::INFINITY;
    for k in -6..=6 {
        let b = k as f64 * FRAC_PI_2;
        let d = if b >= lo && b <= hi {
            0.0
        } else {
            (b - lo).abs().min((b - hi).abs())
        };
        margin = margin.min(d);
    }
    margin
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, wrap_angle};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics {
        Intrinsics::new(800.0, 800.0, 320.0, 240.0).unwrap()
    }

    struct Scene {
        pose: Pose,
        box3d: BoundingBox3D,
        bbox: BoundingBox2D,
        corr: Correspondence,
        g: GroundFrame,
        local_yaw: f64,
        depth: f64,
    }

    /// Forward synthesis: places a box footprint at a known pose and derives
    /// the 2D box so that the edge-midpoint rays pass through the extreme corners.
    fn synth(rng: &mut ChaCha8Rng, case: CaseId, pitch: f64) -> Scene {
        loop {
            let g = GroundFrame::new(pitch).unwrap();
            let (hx, hz) = (rng.random_range(0.7..1.2), rng.random_range(1.5..2.5));
            let box3d = BoundingBox3D::from_extents(-hx, hx, -hz, hz).unwrap();
            let kp = Vector3::new(
                rng.random_range(-hx..hx),
                rng.random_range(-1.0..0.5),
                rng.random_range(-hz..hz),
            );
            let bearing: f64 = rng.random_range(-0.3..0.3);
            let l_c: f64 = rng.random_range(15.0..40.0);
            let (lo, hi) = case.yaw_range();
            let local_yaw = rng.random_range(lo + 0.2..hi - 0.2);
            let heading = bearing + local_yaw;
            let r_y = Rotation::about_y(heading);
            // Keypoint on the ground-frame ray at BEV distance l_c, height 1.5 below camera.
            let kp_ground = Vector3::new(l_c * bearing.sin(), 1.5 + kp.y, l_c * bearing.cos());
            let t_ground = kp_ground - r_y.matrix() * kp;
            let pose = Pose::new(*g.r_cg(), Vector3::zeros()) * Pose::new(r_y, t_ground);
            if case_boundary_margin(&pose, &box3d, &g) < 0.02 {
                continue;
            }
            let pixel = project(&pose, &k(), &kp).unwrap();
            // Rows: project footprint corners at two heights to pick a y range.
            let mut rows = Vec::new();
            for c in box3d.corners() {
                for h in [-1.0, 1.0] {
                    rows.push(project(&pose, &k(), &Vector3::new(c.x, h, c.y)).unwrap().y);
                }
            }
            let y_min = rows.iter().cloned().fold(f64::INFINITY, f64::min);
            let y_max = rows.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let y_mid = 0.5 * (y_min + y_max);
            // Column where each corner's vertical line crosses the mid row.
            let mut cols = Vec::new();
            for c in box3d.corners() {
                let a = pose.transform_point(&Vector3::new(c.x, 0.0, c.y));
                let b = pose.rotation.matrix() * Vector3::y();
                let kk = k();
                let dy = y_mid - kk.cy();
                let h = (dy * a.z - kk.fy() * a.y) / (kk.fy() * b.y - dy * b.z);
                let px = kk.project_camera(&(a + h * b)).unwrap();
                cols.push(px.x);
            }
            let x_min = cols.iter().cloned().fold(f64::INFINITY, f64::min);
            let x_max = cols.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let bbox = BoundingBox2D::new(x_min, y_min, x_max, y_max).unwrap();
            return Scene {
                pose,
                box3d,
                bbox,
                corr: Correspondence::new(0, pixel, kp),
                g,
                local_yaw,
                depth: l_c,
            };
        }
    }

    fn pose_err(a: &Pose, b: &Pose) -> (f64, f64) {
        let dr = (a.rotation.transpose() * b.rotation).angle();
        (dr, (a.translation - b.translation).norm())
    }

    #[test]
    fn bbox_invariants() {
        assert!(BoundingBox2D::new(10.0, 0.0, 10.0, 5.0).is_err());
        assert!(BoundingBox2D::new(0.0, 5.0, 10.0, 5.0).is_err());
        assert!(BoundingBox2D::new(0.0, 0.0, 10.0, 5.0).is_ok());
    }

    #[test]
    fn footprint_validation() {
        assert!(BoundingBox3D::from_extents(-1.0, 1.0, -2.0, 2.0).is_ok());
        // Counter-clockwise order is rejected.
        let b = BoundingBox3D::from_extents(-1.0, 1.0, -2.0, 2.0).unwrap();
        let mut c = *b.corners();
        c.reverse();
        assert!(BoundingBox3D::new(c, Vector2::new(0.0, 1.0)).is_err());
        assert!(BoundingBox3D::new(*b.corners(), Vector2::new(0.0, 2.0)).is_err());
        // Backward-facing forward vector breaks the numbering.
        assert!(BoundingBox3D::new(*b.corners(), Vector2::new(0.0, -1.0)).is_err());
    }

    #[test]
    fn yaw_ranges_partition_the_circle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let a = rng.random_range(-PI..PI);
            let hits = CaseId::ALL
                .iter()
                .filter(|c| in_range(a, c.yaw_range(), 0.0))
                .count();
            assert_eq!(hits, 1, "angle {a}");
        }
        for b in [-FRAC_PI_2, 0.0, FRAC_PI_2, PI] {
            let hits = CaseId::ALL
                .iter()
                .filter(|c| in_range(b, c.yaw_range(), 0.0))
                .count();
            assert_eq!(hits, 2, "boundary {b}");
        }
        assert_eq!(CaseId::for_yaw(PI / 4.0), CaseId::Case1);
        assert_eq!(CaseId::for_yaw(-3.0 * PI / 4.0), CaseId::Case4);
    }

    #[test]
    fn edge_rays_symmetric_box() {
        let bbox = BoundingBox2D::new(220.0, 100.0, 420.0, 300.0).unwrap();
        let (l, r) = edge_rays(&bbox, &k(), &GroundFrame::level()).unwrap();
        assert_relative_eq!(l.x, -r.x, epsilon = 1e-15);
        assert_relative_eq!(l.y, r.y, epsilon = 1e-15);
        assert!(signed_bev_angle(&l, &r).unwrap() > 0.0);
    }

    #[test]
    fn edge_rays_full_image_span_fov() {
        let bbox = BoundingBox2D::new(0.0, 0.0, 640.0, 480.0).unwrap();
        let (l, r) = edge_rays(&bbox, &k(), &GroundFrame::level()).unwrap();
        let fov = 2.0 * (320.0f64 / 800.0).atan();
        assert_relative_eq!(signed_bev_angle(&l, &r).unwrap(), fov, epsilon = 1e-12);
    }

    #[test]
    fn case1_params_unit_square_center() {
        let b = BoundingBox3D::from_extents(-0.5, 0.5, -0.5, 0.5).unwrap();
        let (psi_l, psi_r, l_l, l_r) = case_params(CaseId::Case1, &Vector2::zeros(), &b).unwrap();
        let half_diag = 0.5 * 2f64.sqrt();
        assert_relative_eq!(l_l, half_diag, epsilon = 1e-15);
        assert_relative_eq!(l_r, half_diag, epsilon = 1e-15);
        assert_relative_eq!(psi_l, -3.0 * PI / 4.0, epsilon = 1e-15);
        assert_relative_eq!(psi_r, PI / 4.0, epsilon = 1e-15);
    }

    #[test]
    fn case_params_match_acos_table() {
        // ψ = ±acos(v_f · (p − p_K)/l) with the sign given per case and side.
        let signs = [
            (CaseId::Case1, -1.0, 1.0),
            (CaseId::Case2, 1.0, -1.0),
            (CaseId::Case3, -1.0, 1.0),
            (CaseId::Case4, 1.0, -1.0),
        ];
        let b = BoundingBox3D::from_extents(-0.9, 0.9, -2.1, 2.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = Vector2::new(rng.random_range(-0.89..0.89), rng.random_range(-2.09..2.09));
            for (case, sl, sr) in signs {
                let (psi_l, psi_r, l_l, l_r) = case_params(case, &p, &b).unwrap();
                let (cl, cr) = case.edge_corners();
                let al = sl * (b.forward().dot(&(b.corner(cl) - p)) / l_l).acos();
                let ar = sr * (b.forward().dot(&(b.corner(cr) - p)) / l_r).acos();
                assert_relative_eq!(psi_l, al, epsilon = 1e-9);
                assert_relative_eq!(psi_r, ar, epsilon = 1e-9);
                assert!(in_range(psi_l, case.psi_left_range(), 0.0));
                assert!(in_range(psi_r, case.psi_right_range(), 0.0));
            }
        }
    }

    #[test]
    fn keypoint_on_corner_is_degenerate() {
        let b = BoundingBox3D::from_extents(-0.5, 0.5, -0.5, 0.5).unwrap();
        assert!(matches!(
            case_params(CaseId::Case1, &b.corner(2), &b),
            Err(PoseError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn symmetric_configuration_has_zero_yaw() {
        let theta = 0.05;
        let psi_r = 0.7;
        let p = P1PParams {
            phi_y: 0.0,
            theta_l: theta,
            theta_r: theta,
            psi_l: -psi_r,
            psi_r,
            l_l: 1.3,
            l_r: 1.3,
            case: CaseId::Case1,
        };
        // ψ_L + θ_L = −(ψ_R − θ_R)
        assert_relative_eq!(p.psi_l + p.theta_l, -(p.psi_r - p.theta_r));
        assert_relative_eq!(solve_yaw(&p).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn vanishing_edge_angle_is_degenerate() {
        let p = P1PParams {
            phi_y: 0.0,
            theta_l: 0.1,
            theta_r: 1e-12,
            psi_l: -2.0,
            psi_r: 0.5,
            l_l: 1.0,
            l_r: 1.0,
            case: CaseId::Case1,
        };
        assert!(matches!(
            solve_yaw(&p),
            Err(PoseError::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn negative_depth_is_rejected() {
        let p = P1PParams {
            phi_y: 0.0,
            theta_l: 0.1,
            theta_r: 0.1,
            psi_l: -2.0,
            psi_r: 0.5,
            l_l: 1.0,
            l_r: 1.0,
            case: CaseId::Case1,
        };
        let yaw = solve_yaw(&p).unwrap();
        assert!(solve_depth(&p, yaw).unwrap() > 0.0);
        assert_eq!(
            solve_depth(&p, wrap_angle(yaw + PI)),
            Err(PoseError::NoValidSolution)
        );
    }

    #[test]
    fn assemble_trivial_translation() {
        let g = GroundFrame::level();
        let px = Vector2::new(400.0, 260.0);
        let pose = assemble_pose(
            0.0,
            12.0,
            0.0,
            &px,
            &Vector3::zeros(),
            &Vector2::new(0.0, 1.0),
            &k(),
            &g,
        )
        .unwrap();
        assert_relative_eq!(*pose.rotation.matrix(), *Rotation::identity().matrix());
        let d = ground_ray(&px, &k(), &g).unwrap();
        assert_relative_eq!(pose.translation, 12.0 * d, epsilon = 1e-12);
    }

    #[test]
    fn round_trip_every_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in CaseId::ALL {
            for pitch in [0.0, 0.04, -0.08] {
                for _ in 0..50 {
                    let s = synth(&mut rng, case, pitch);
                    let all = solve_all(&s.corr, &s.bbox, &s.box3d, &k(), &s.g).unwrap();
                    let sol = *all
                        .iter()
                        .find(|x| x.case == case)
                        .expect("true case survives");
                    assert!(
                        (sol.yaw - s.local_yaw).abs() < 1e-9,
                        "{} vs {}",
                        sol.yaw,
                        s.local_yaw
                    );
                    assert!((sol.depth - s.depth).abs() < 1e-9 * s.depth);
                    let (dr, dt) = pose_err(&sol.pose, &s.pose);
                    assert!(dr < 1e-6 && dt < 1e-6, "pose error {dr} {dt}");
                    let id = sol.pose * s.pose.inverse();
                    assert!((id.rotation.angle()) < 1e-6 && id.translation.norm() < 1e-6);
                    // All footprint corners reproject consistently.
                    for c in s.box3d.corners() {
                        let x = Vector3::new(c.x, 0.3, c.y);
                        let a = project(&sol.pose, &k(), &x).unwrap();
                        let b = project(&s.pose, &k(), &x).unwrap();
                        assert!((a - b).norm() < 1e-6);
                    }
                    let p = params(case, &s.corr, &s.bbox, &s.box3d, &k(), &s.g).unwrap();
                    let (dr_, dl_) = depth_expressions(&p, sol.yaw).unwrap();
                    assert!((dr_ - dl_).abs() < 1e-6 * dr_);
                }
            }
        }
    }

    #[test]
    fn non_default_forward_direction() {
        // Same physical object described with a rotated model frame.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = synth(&mut rng, CaseId::Case2, 0.0);
        let beta: f64 = 0.6;
        let rot = Rotation::about_y(beta);
        let corners = s.box3d.corners().map(|c| {
            let v = rot * Vector3::new(c.x, 0.0, c.y);
            Vector2::new(v.x, v.z)
        });
        let fwd = rot * Vector3::z();
        let b2 = BoundingBox3D::new(corners, Vector2::new(fwd.x, fwd.z)).unwrap();
        let kp = rot * s.corr.model;
        let corr = Correspondence::new(0, s.corr.image, kp);
        let sol = solve(&corr, &s.bbox, &b2, &k(), &s.g).unwrap();
        let expected = s.pose * Pose::new(rot.transpose(), Vector3::zeros());
        let (dr, dt) = pose_err(&sol.pose, &expected);
        assert!(dr < 1e-9 && dt < 1e-9);
    }

    #[test]
    fn keypoint_outside_box_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = synth(&mut rng, CaseId::Case1, 0.0);
        let corr = Correspondence::new(
            0,
            Vector2::new(s.bbox.x_max + 5.0, s.corr.image.y),
            s.corr.model,
        );
        assert_eq!(
            solve(&corr, &s.bbox, &s.box3d, &k(), &s.g).unwrap_err(),
            PoseError::NoValidSolution
        );
    }

    #[test]
    fn solution_is_continuous_in_box_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for case in CaseId::ALL {
            let s = synth(&mut rng, case, 0.0);
            let base = solve(&s.corr, &s.bbox, &s.box3d, &k(), &s.g).unwrap();
            let mut prev = base;
            for step in 1..=10 {
                let mut b = s.bbox;
                b.x_max += 0.1 * step as f64;
                let Ok(sol) = solve(&s.corr, &b, &s.box3d, &k(), &s.g) else {
                    continue;
                };
                if sol.case == prev.case {
                    assert!((sol.yaw - prev.yaw).abs() < 0.05);
                    assert!((sol.depth - prev.depth).abs() < 0.05 * prev.depth);
                }
                prev = sol;
            }
        }
    }
}
