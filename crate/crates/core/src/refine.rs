//! Nonlinear refinement of pose and shape from 2D–3D correspondences.
//!
//! All solvers share one damped normal-equation loop over the parameter
//! vector `[δω, δt, δλ]`, where the pose update is left-multiplicative
//! (`R ← exp(δω)·R`, `t ← t + δt`) and `λ` are active-shape coefficients.
//! The loss is either plain squared reprojection error or the Tukey
//! biweight, whose scale is fixed or re-estimated from the residuals by MAD
//! at every iteration.

use nalgebra::{DMatrix, DVector, Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::geometry::{skew, Intrinsics, Pose};
use crate::ransac::Correspondence;

/// Tukey tuning constant for 95% Gaussian efficiency.
pub const TUKEY_C: f64 = 4.685;
/// Converts a median absolute deviation into a Gaussian standard deviation.
pub const MAD_TO_SIGMA: f64 = 0.6745;

/// Linear shape model: vertex `i` is `mean[i] + Σ_j λ_j·basis[j][i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeModel {
    mean: Vec<Vector3<f64>>,
    basis: Vec<Vec<Vector3<f64>>>,
}

impl ShapeModel {
    pub fn new(mean: Vec<Vector3<f64>>, basis: Vec<Vec<Vector3<f64>>>) -> Result<Self> {
        if let Some((j, b)) = basis
            .iter()
            .enumerate()
            .find(|(_, b)| b.len() != mean.len())
        {
            return Err(PoseError::InvalidConfig(format!(
                "shape basis {j} has {} vertices, mean has {}",
                b.len(),
                mean.len()
            )));
        }
        let finite = |v: &Vector3<f64>| v.iter().all(|x| x.is_finite());
        if !mean.iter().all(finite) || !basis.iter().flatten().all(finite) {
            return Err(PoseError::InvalidConfig(
                "shape model has non-finite entries".into(),
            ));
        }
        Ok(Self { mean, basis })
    }

    /// Model with no deformation modes.
    pub fn rigid(mean: Vec<Vector3<f64>>) -> Result<Self> {
        Self::new(mean, Vec::new())
    }

    pub fn modes(&self) -> usize {
        self.basis.len()
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn mean(&self) -> &[Vector3<f64>] {
        &self.mean
    }

    pub fn basis(&self) -> &[Vec<Vector3<f64>>] {
        &self.basis
    }
}

/// Shape coefficients `λ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeCoeffs(pub Vec<f64>);

impl ShapeCoeffs {
    pub fn zeros(modes: usize) -> Self {
        Self(vec![0.0; modes])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Vertex `i` of `model` deformed by `coeffs`.
pub fn shape_point(model: &ShapeModel, coeffs: &ShapeCoeffs, i: usize) -> Result<Vector3<f64>> {
    if i >= model.len() {
        return Err(PoseError::IndexOutOfRange {
            index: i,
            len: model.len(),
        });
    }
    if coeffs.len() != model.modes() {
        return Err(PoseError::InvalidConfig(format!(
            "{} shape coefficients for a model with {} modes",
            coeffs.len(),
            model.modes()
        )));
    }
    let mut x = model.mean[i];
    for (lambda, b) in coeffs.0.iter().zip(&model.basis) {
        x += *lambda * b[i];
    }
    Ok(x)
}

/// Model point for a correspondence: `corr.model` for a rigid object, or
/// vertex `corr.id` of the shape model.
fn model_point(
    corr: &Correspondence,
    shape: Option<&ShapeModel>,
    coeffs: &ShapeCoeffs,
) -> Result<Vector3<f64>> {
    match shape {
        None => Ok(corr.model),
        Some(m) => shape_point(m, coeffs, corr.id),
    }
}

/// Reprojection error of one correspondence; `+∞` when the point is behind the camera.
pub fn residual(
    pose: &Pose,
    coeffs: &ShapeCoeffs,
    shape: Option<&ShapeModel>,
    k: &Intrinsics,
    corr: &Correspondence,
) -> Result<f64> {
    let x = model_point(corr, shape, coeffs)?;
    Ok(crate::geometry::project(pose, k, &x)
        .map(|px| (px - corr.image).norm())
        .unwrap_or(f64::INFINITY))
}

/// Residual vector `f(R·X + t) − x` and its Jacobian with respect to
/// `[δω, δt, δλ]` (`2 × (6 + M)`). `None` when the point is behind the camera.
pub fn residual_jacobian(
    pose: &Pose,
    coeffs: &ShapeCoeffs,
    shape: Option<&ShapeModel>,
    k: &Intrinsics,
    corr: &Correspondence,
) -> Result<Option<(Vector2<f64>, DMatrix<f64>)>> {
    let x = model_point(corr, shape, coeffs)?;
    let rx = pose.rotation.matrix() * x;
    let p = rx + pose.translation;
    let Ok(px) = k.project_camera(&p) else {
        return Ok(None);
    };
    let iz = 1.0 / p.z;
    let d_proj = Matrix2x3::new(
        k.fx() * iz,
        0.0,
        -k.fx() * p.x * iz * iz,
        0.0,
        k.fy() * iz,
        -k.fy() * p.y * iz * iz,
    );
    let modes = shape.map_or(0, ShapeModel::modes);
    let mut j = DMatrix::zeros(2, 6 + modes);
    j.fixed_view_mut::<2, 3>(0, 0)
        .copy_from(&(d_proj * -skew(&rx)));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&d_proj);
    if let Some(m) = shape {
        for (col, b) in m.basis.iter().enumerate() {
            let d = d_proj * (pose.rotation.matrix() * b[corr.id]);
            j.fixed_view_mut::<2, 1>(0, 6 + col).copy_from(&d);
        }
    }
    Ok(Some((px - corr.image, j)))
}

/// Tukey biweight loss `ρ(r)`.
pub fn tukey(r: f64, c: f64) -> f64 {
    let cap = c * c / 6.0;
    if r > c {
        return cap;
    }
    let u = 1.0 - (r / c).powi(2);
    cap * (1.0 - u * u * u)
}

/// IRLS weight `ρ′(r)/r`.
pub fn tukey_weight(r: f64, c: f64) -> f64 {
    if r > c {
        return 0.0;
    }
    let u = 1.0 - (r / c).powi(2);
    u * u
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `MAD(r)/0.6745` over the finite residuals.
pub fn mad_scale(residuals: &[f64]) -> Result<f64> {
    let mut r: Vec<f64> = residuals
        .iter()
        .copied()
        .filter(|x| x.is_finite())
        .collect();
    if r.is_empty() {
        return Err(PoseError::EmptyInput);
    }
    let m = median(&mut r);
    let mut dev: Vec<f64> = r.iter().map(|x| (x - m).abs()).collect();
    Ok(median(&mut dev) / MAD_TO_SIGMA)
}

/// `max(lo, min(s, hi))`.
pub fn clamp_scale(s: f64, lo: f64, hi: f64) -> f64 {
    lo.max(s.min(hi))
}

/// How the Tukey threshold `c` is chosen at each iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Fixed(f64),
    /// `c = 4.685·clamp(MAD/0.6745, lo, hi)`, re-estimated every iteration.
    Mad {
        lo: f64,
        hi: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// `Σ r²`.
    Squared,
    /// `Σ ρ(r)` with the Tukey biweight.
    Tukey(Scale),
}

/// Stopping rules for [`minimize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop once the accepted step norm drops below this.
    pub tol: f64,
    pub optimize_shape: bool,
}

/// Cost before and after an accepted step, evaluated with the same `c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptedStep {
    pub c: f64,
    pub cost_before: f64,
    pub cost_after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub pose: Pose,
    pub coeffs: ShapeCoeffs,
    /// Cost at the returned estimate; for the Tukey loss, with the last `c` used.
    pub cost: f64,
    /// Tukey threshold of the last iteration (`∞` for the squared loss).
    pub last_c: f64,
    pub iterations: usize,
    pub steps: Vec<AcceptedStep>,
}

const MAX_DAMPING: f64 = 1e10;
const MAX_RETRIES: usize = 12;

fn cost_of(residuals: &[f64], loss: Loss, c: f64) -> f64 {
    match loss {
        Loss::Squared => residuals.iter().map(|r| r * r).sum(),
        Loss::Tukey(_) => residuals.iter().map(|r| tukey(*r, c)).sum(),
    }
}

fn residuals(
    corrs: &[Correspondence],
    shape: Option<&ShapeModel>,
    k: &Intrinsics,
    pose: &Pose,
    coeffs: &ShapeCoeffs,
) -> Result<Vec<f64>> {
    corrs
        .iter()
        .map(|c| residual(pose, coeffs, shape, k, c))
        .collect()
}

fn apply(pose: &Pose, coeffs: &ShapeCoeffs, delta: &DVector<f64>) -> (Pose, ShapeCoeffs) {
    let dw = Vector3::new(delta[0], delta[1], delta[2]);
    let dt = Vector3::new(delta[3], delta[4], delta[5]);
    let mut lambda = coeffs.clone();
    for (j, l) in lambda.0.iter_mut().enumerate() {
        if 6 + j < delta.len() {
            *l += delta[6 + j];
        }
    }
    (pose.perturbed(&dw, &dt), lambda)
}

/// Damped (Levenberg–Marquardt style) minimisation of the chosen loss.
///
/// Each iteration fixes the Tukey threshold, builds the weighted normal
/// equations and tries damped steps until the cost at that threshold does not
/// increase. Returns `SingularNormalEquations` when no correspondence carries
/// weight or the normal matrix is rank deficient.
#[allow(clippy::too_many_arguments)]
pub fn minimize(
    corrs: &[Correspondence],
    shape: Option<&ShapeModel>,
    k: &Intrinsics,
    init_pose: &Pose,
    init_coeffs: &ShapeCoeffs,
    loss: Loss,
    opts: &SolverOptions,
) -> Result<Outcome> {
    let modes = shape.map_or(0, ShapeModel::modes);
    if init_coeffs.len() != modes {
        return Err(PoseError::InvalidConfig(format!(
            "{} shape coefficients for a model with {modes} modes",
            init_coeffs.len()
        )));
    }
    let n_params = if opts.optimize_shape { 6 + modes } else { 6 };
    let mut pose = *init_pose;
    let mut coeffs = init_coeffs.clone();
    let mut res = residuals(corrs, shape, k, &pose, &coeffs)?;
    if matches!(loss, Loss::Squared) && res.iter().any(|r| !r.is_finite()) {
        return Err(PoseError::NonPositiveDepth);
    }
    let mut damping = 1e-3;
    let mut steps = Vec::new();
    let mut last_c = f64::INFINITY;
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        iterations += 1;
        let c = match loss {
            Loss::Squared => f64::INFINITY,
            Loss::Tukey(Scale::Fixed(c)) => c,
            Loss::Tukey(Scale::Mad { lo, hi }) => TUKEY_C * clamp_scale(mad_scale(&res)?, lo, hi),
        };
        if !(c > 0.0) {
            // Exact fit of the majority: nothing left to reweight.
            last_c = c;
            break;
        }
        last_c = c;

        let mut h = DMatrix::<f64>::zeros(n_params, n_params);
        let mut g = DVector::<f64>::zeros(n_params);
        let mut weighted = 0usize;
        for corr in corrs {
            let Some((e, j)) = residual_jacobian(&pose, &coeffs, shape, k, corr)? else {
                continue;
            };
            let w = match loss {
                Loss::Squared => 1.0,
                Loss::Tukey(_) => tukey_weight(e.norm(), c),
            };
            if w == 0.0 {
                continue;
            }
            weighted += 1;
            let j = j.columns(0, n_params);
            h += w * j.transpose() * j;
            g += w * j.transpose() * e;
        }
        if weighted == 0 || 2 * weighted < n_params {
            return Err(PoseError::SingularNormalEquations);
        }
        if h.clone().cholesky().is_none() {
            return Err(PoseError::SingularNormalEquations);
        }
        if g.norm() == 0.0 {
            break;
        }

        let cost_before = cost_of(&res, loss, c);
        let diag_floor = 1e-12 * h.diagonal().max();
        let mut accepted = None;
        for _ in 0..MAX_RETRIES {
            let mut a = h.clone();
            for i in 0..n_params {
                a[(i, i)] += damping * h[(i, i)].max(diag_floor);
            }
            let Some(chol) = a.cholesky() else {
                damping *= 10.0;
                continue;
            };
            let delta = -chol.solve(&g);
            let (p_new, l_new) = apply(&pose, &coeffs, &delta);
            let r_new = residuals(corrs, shape, k, &p_new, &l_new)?;
            let cost_after = cost_of(&r_new, loss, c);
            if cost_after <= cost_before {
                damping = (damping * 0.1).max(1e-12);
                accepted = Some((p_new, l_new, r_new, cost_after, delta.norm()));
                break;
            }
            damping *= 10.0;
            if damping > MAX_DAMPING {
                break;
            }
        }
        let Some((p_new, l_new, r_new, cost_after, step)) = accepted else {
            break;
        };
        steps.push(AcceptedStep {
            c,
            cost_before,
            cost_after,
        });
        pose = Pose::new(p_new.rotation.renormalized(), p_new.translation);
        coeffs = l_new;
        res = r_new;
        if step < opts.tol {
            break;
        }
    }

    let cost = cost_of(&res, loss, last_c);
    Ok(Outcome {
        pose,
        coeffs,
        cost,
        last_c,
        iterations,
        steps,
    })
}

/// Thresholds and iteration caps for the robust estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub max_irls_iters: usize,
    pub max_gn_iters: usize,
    pub convergence_tol: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        Self {
            tau1: 4.0,
            tau2: 6.0,
            tau3: 12.0,
            max_irls_iters: 20,
            max_gn_iters: 20,
            convergence_tol: 1e-8,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.tau1 && self.tau1 < self.tau2 && self.tau2 < self.tau3) {
            return Err(PoseError::InvalidConfig(format!(
                "thresholds must satisfy 0 < tau1 < tau2 < tau3, got {}, {}, {}",
                self.tau1, self.tau2, self.tau3
            )));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(PoseError::InvalidConfig(
                "convergence tolerance must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineResult {
    pub pose: Pose,
    pub coeffs: ShapeCoeffs,
    /// Sorted ids with residual below `tau1` at the returned estimate.
    pub inlier_ids: Vec<usize>,
    pub final_cost: f64,
    /// Final cost of each stage that ran, each with its own loss and threshold.
    pub stage_costs: Vec<f64>,
    /// Squared-error cost of the final inlier set at the stage-2 estimate
    /// (hierarchical estimator only).
    pub stage2_inlier_sq_cost: Option<f64>,
}

/// Smallest inlier count for which the final least-squares stage is determined.
pub fn min_correspondences(modes: usize) -> usize {
    3.max((6 + modes).div_ceil(2))
}

fn check_shape(corrs: &[Correspondence], shape: Option<&ShapeModel>) -> Result<()> {
    if let Some(m) = shape {
        if let Some(c) = corrs.iter().find(|c| c.id >= m.len()) {
            return Err(PoseError::IndexOutOfRange {
                index: c.id,
                len: m.len(),
            });
        }
    }
    Ok(())
}

fn inliers_below(
    corrs: &[Correspondence],
    shape: Option<&ShapeModel>,
    k: &Intrinsics,
    pose: &Pose,
    coeffs: &ShapeCoeffs,
    tau: f64,
) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for c in corrs {
        if residual(pose, coeffs, shape, k, c)? < tau {
            ids.push(c.id);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

/// Unweighted rigid refinement: minimises `Σ r²` over `corrs` starting at `init`.
pub fn gauss_newton(
    corrs: &[Correspondence],
    k: &Intrinsics,
    init: &Pose,
    iters: usize,
    tol: f64,
) -> Result<Pose> {
    if corrs.len() < 3 {
        return Err(PoseError::InsufficientInliers {
            needed: 3,
            got: corrs.len(),
        });
    }
    let opts = SolverOptions {
        max_iterations: iters,
        tol,
        optimize_shape: false,
    };
    Ok(minimize(
        corrs,
        None,
        k,
        init,
        &ShapeCoeffs::zeros(0),
        Loss::Squared,
        &opts,
    )?
    .pose)
}

/// Hierarchical robust estimation of pose and shape.
///
/// 1. pose only, `λ = 0`, `c = 4.685·clamp(s, τ2, τ3)`;
/// 2. pose and `λ`, `c = 4.685·clamp(s, τ1, τ2)`;
/// 3. correspondences with `r < τ1` are kept and `Σ r²` is minimised over them.
pub fn hre(
    corrs: &[Correspondence],
    shape: Option<&ShapeModel>,
    k: &Intrinsics,
    init: &Pose,
    cfg: &RobustConfig,
) -> Result<RefineResult> {
    cfg.validate()?;
    check_shape(corrs, shape)?;
    let modes = shape.map_or(0, ShapeModel::modes);
    let needed = min_correspondences(modes);
    if corrs.len() < needed {
        return Err(PoseError::InsufficientInliers {
            needed,
            got: corrs.len(),
        });
    }
    let irls = |optimize_shape| SolverOptions {
        max_iterations: cfg.max_irls_iters,
        tol: cfg.convergence_tol,
        optimize_shape,
    };
    let zero = ShapeCoeffs::zeros(modes);

    let s1 = minimize(
        corrs,
        shape,
        k,
        init,
        &zero,
        Loss::Tukey(Scale::Mad {
            lo: cfg.tau2,
            hi: cfg.tau3,
        }),
        &irls(false),
    )?;
    let s2 = minimize(
        corrs,
        shape,
        k,
        &s1.pose,
        &s1.coeffs,
        Loss::Tukey(Scale::Mad {
            lo: cfg.tau1,
            hi: cfg.tau2,
        }),
        &irls(true),
    )?;

    let inlier_ids = inliers_below(corrs, shape, k, &s2.pose, &s2.coeffs, cfg.tau1)?;
    if inlier_ids.len() < needed {
        return Err(PoseError::InsufficientInliers {
            needed,
            got: inlier_ids.len(),
        });
    }
    let inlier_corrs: Vec<Correspondence> = corrs
        .iter()
        .filter(|c| inlier_ids.binary_search(&c.id).is_ok())
        .cloned()
        .collect();
    let stage2_sq = cost_of(
        &residuals(&inlier_corrs, shape, k, &s2.pose, &s2.coeffs)?,
        Loss::Squared,
        f64::INFINITY,
    );
    let s3 = minimize(
        &inlier_corrs,
        shape,
        k,
        &s2.pose,
        &s2.coeffs,
        Loss::Squared,
        &SolverOptions {
            max_iterations: cfg.max_gn_iters,
            tol: cfg.convergence_tol,
            optimize_shape: true,
        },
    )?;

    Ok(RefineResult {
        pose: s3.pose,
        inlier_ids: inliers_below(corrs, shape, k, &s3.pose, &s3.coeffs, cfg.tau1)?,
        coeffs: s3.coeffs,
        final_cost: s3.cost,
        stage_costs: vec![s1.cost, s2.cost, s3.cost],
        stage2_inlier_sq_cost: Some(stage2_sq),
    })
}

/// Single-stage robust estimation: Tukey IRLS over all correspondences with
/// the unclamped MAD scale, jointly over pose and shape.
pub fn robust_estimate(
    corrs: &[Correspondence],
    shape: Option<&ShapeModel>,
    k: &Intrinsics,
    init: &Pose,
    cfg: &RobustConfig,
) -> Result<RefineResult> {
    cfg.validate()?;
    check_shape(corrs, shape)?;
    let modes = shape.map_or(0, ShapeModel::modes);
    let needed = min_correspondences(modes);
    if corrs.len() < needed {
        return Err(PoseError::InsufficientInliers {
            needed,
            got: corrs.len(),
        });
    }
    let out = minimize(
        corrs,
        shape,
        k,
        init,
        &ShapeCoeffs::zeros(modes),
        Loss::Tukey(Scale::Mad {
            lo: 0.0,
            hi: f64::INFINITY,
        }),
        &SolverOptions {
            max_iterations: cfg.max_irls_iters,
            tol: cfg.convergence_tol,
            optimize_shape: true,
        },
    )?;
    Ok(RefineResult {
        pose: out.pose,
        inlier_ids: inliers_below(corrs, shape, k, &out.pose, &out.coeffs, cfg.tau1)?,
        coeffs: out.coeffs,
        final_cost: out.cost,
        stage_costs: vec![out.cost],
        stage2_inlier_sq_cost: None,
    })
}
