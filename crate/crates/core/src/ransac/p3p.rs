//! Three-point absolute pose (Grunert's quartic), used as the RANSAC baseline.

use nalgebra::{Matrix3, Matrix4, Vector3};

use super::Correspondence;
use crate::error::{PoseError, Result};
use crate::geometry::{project, Intrinsics, Pose, Rotation};

/// Real roots of `c[4]·x⁴ + … + c[0]`, polished with Newton steps.
fn real_quartic_roots(c: [f64; 5]) -> Vec<f64> {
    let lead = c[4];
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let eval = |x: f64| (((c[4] * x + c[3]) * x + c[2]) * x + c[1]) * x + c[0];
    let deriv = |x: f64| ((4.0 * c[4] * x + 3.0 * c[3]) * x + 2.0 * c[2]) * x + c[1];
    let mut roots = Vec::new();
    if lead.abs() < 1e-14 * scale {
        // Degenerates to a cubic or lower; fall back to companion of the cubic.
        if c[3].abs() < 1e-14 * scale {
            return Vec::new();
        }
        let m = nalgebra::Matrix3::new(
            -c[2] / c[3],
            -c[1] / c[3],
            -c[0] / c[3],
            1.0,
            0.0,
            0.0,
            0.0,
            1.0,
            0.0,
        );
        for z in m.complex_eigenvalues().iter() {
            if z.im.abs() <= 1e-6 * (1.0 + z.re.abs()) {
                roots.push(z.re);
            }
        }
    } else {
        let m = Matrix4::new(
            -c[3] / lead,
            -c[2] / lead,
            -c[1] / lead,
            -c[0] / lead,
            1.0,
            0.0,
            0.0,
            0.0,
            0.0,
            1.0,
            0.0,
            0.0,
            0.0,
            0.0,
            1.0,
            0.0,
        );
        for z in m.complex_eigenvalues().iter() {
            if z.im.abs() <= 1e-6 * (1.0 + z.re.abs()) {
                roots.push(z.re);
            }
        }
    }
    for r in roots.iter_mut() {
        for _ in 0..8 {
            let d = deriv(*r);
            if d == 0.0 {
                break;
            }
            let step = eval(*r) / d;
            *r -= step;
            if step.abs() < 1e-15 * (1.0 + r.abs()) {
                break;
            }
        }
    }
    roots
}

/// Rigid transform mapping three model points onto three camera points.
fn absolute_orientation(model: &[Vector3<f64>; 3], cam: &[Vector3<f64>; 3]) -> Pose {
    let mc = (model[0] + model[1] + model[2]) / 3.0;
    let cc = (cam[0] + cam[1] + cam[2]) / 3.0;
    let mut h = Matrix3::zeros();
    for i in 0..3 {
        h += (model[i] - mc) * (cam[i] - cc).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = v_t.transpose() * u.transpose();
    if r.determinant() < 0.0 {
        let mut v = v_t.transpose();
        v.column_mut(2).neg_mut();
        r = v * u.transpose();
    }
    let rot = Rotation::from_matrix_unchecked(r);
    Pose::new(rot, cc - r * mc)
}

/// Newton iterations on the three law-of-cosines equations in the ray depths.
fn polish_depths(s: [f64; 3], [a2, b2, c2]: [f64; 3], [ca, cb, cg]: [f64; 3]) -> [f64; 3] {
    let residual = |s: &Vector3<f64>| {
        Vector3::new(
            s[1] * s[1] + s[2] * s[2] - 2.0 * s[1] * s[2] * ca - a2,
            s[0] * s[0] + s[2] * s[2] - 2.0 * s[0] * s[2] * cb - b2,
            s[0] * s[0] + s[1] * s[1] - 2.0 * s[0] * s[1] * cg - c2,
        )
    };
    let mut x = Vector3::from(s);
    let mut f = residual(&x);
    for _ in 0..5 {
        let jac = Matrix3::new(
            0.0,
            2.0 * (x[1] - x[2] * ca),
            2.0 * (x[2] - x[1] * ca),
            2.0 * (x[0] - x[2] * cb),
            0.0,
            2.0 * (x[2] - x[0] * cb),
            2.0 * (x[0] - x[1] * cg),
            2.0 * (x[1] - x[0] * cg),
            0.0,
        );
        let Some(step) = jac.lu().solve(&f) else {
            break;
        };
        let next = x - step;
        let f_next = residual(&next);
        if !(f_next.norm() < f.norm()) {
            break;
        }
        x = next;
        f = f_next;
    }
    [x[0], x[1], x[2]]
}

/// All real poses consistent with three correspondences.
pub fn solve_p3p(samples: &[&Correspondence], k: &Intrinsics) -> Result<Vec<Pose>> {
    if samples.len() != 3 {
        return Err(PoseError::InvalidConfig(format!(
            "P3P needs exactly 3 correspondences, got {}",
            samples.len()
        )));
    }
    let p = [samples[0].model, samples[1].model, samples[2].model];
    let span = (p[1] - p[0]).norm().max((p[2] - p[0]).norm()).max(1e-300);
    if (p[1] - p[0]).cross(&(p[2] - p[0])).norm() < 1e-9 * span * span {
        return Err(PoseError::DegenerateGeometry("collinear model points"));
    }
    let j = [
        k.back_project(&samples[0].image).normalize(),
        k.back_project(&samples[1].image).normalize(),
        k.back_project(&samples[2].image).normalize(),
    ];
    let a2 = (p[1] - p[2]).norm_squared();
    let b2 = (p[0] - p[2]).norm_squared();
    let c2 = (p[0] - p[1]).norm_squared();
    let cos_a = j[1].dot(&j[2]);
    let cos_b = j[0].dot(&j[2]);
    let cos_g = j[0].dot(&j[1]);

    let amc = (a2 - c2) / b2;
    let apc = (a2 + c2) / b2;
    let coeffs = [
        (1.0 + amc).powi(2) - 4.0 * a2 / b2 * cos_g * cos_g,
        4.0 * (-amc * (1.0 + amc) * cos_b + 2.0 * a2 / b2 * cos_g * cos_g * cos_b
            - (1.0 - apc) * cos_a * cos_g),
        2.0 * (amc * amc - 1.0
            + 2.0 * amc * amc * cos_b * cos_b
            + 2.0 * (b2 - c2) / b2 * cos_a * cos_a
            - 4.0 * apc * cos_a * cos_b * cos_g
            + 2.0 * (b2 - a2) / b2 * cos_g * cos_g),
        4.0 * (amc * (1.0 - amc) * cos_b - (1.0 - apc) * cos_a * cos_g
            + 2.0 * c2 / b2 * cos_a * cos_a * cos_b),
        (amc - 1.0).powi(2) - 4.0 * c2 / b2 * cos_a * cos_a,
    ];

    let mut poses = Vec::new();
    for v in real_quartic_roots(coeffs) {
        if v <= 0.0 {
            continue;
        }
        let s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_b);
        if !(s1_sq > 0.0) {
            continue;
        }
        let s1 = s1_sq.sqrt();
        let den = 2.0 * (cos_g - v * cos_a);
        let u = if den.abs() > 1e-12 {
            ((-1.0 + amc) * v * v - 2.0 * amc * cos_b * v + 1.0 + amc) / den
        } else {
            // Fall back to the c-side law of cosines: u² − 2u·cosγ + 1 − c²/s1² = 0.
            let q = cos_g * cos_g - (1.0 - c2 / s1_sq);
            if q < 0.0 {
                continue;
            }
            cos_g + q.sqrt()
        };
        if u <= 0.0 {
            continue;
        }
        let d = polish_depths([s1, u * s1, v * s1], [a2, b2, c2], [cos_a, cos_b, cos_g]);
        let cam = [j[0] * d[0], j[1] * d[1], j[2] * d[2]];
        let pose = absolute_orientation(&p, &cam);
        let consistent = samples.iter().all(|s| {
            project(&pose, k, &s.model)
                .map(|px| (px - s.image).norm() < 1e-3)
                .unwrap_or(false)
        });
        if consistent {
            poses.push(pose);
        }
    }
    if poses.is_empty() {
        return Err(PoseError::NoValidSolution);
    }
    Ok(poses)
}
