//! Synthetic scenes, error metrics and the experiment sweeps.
//!
//! Every trial draws its random numbers from a stream keyed by
//! `(seed, trial)` in a fixed order that does not depend on the swept
//! variable, so a trial at different settings differs only in that variable.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{Vector2, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::geometry::{project, GroundFrame, Intrinsics, Pose, Rotation};
use crate::p1p::{BoundingBox2D, BoundingBox3D};
use crate::ransac::{
    self, Correspondence, CorrespondenceSet, GroundScene, P1pSolver, P3pSolver, RansacConfig,
    RansacResult,
};
use crate::refine::{self, residual, shape_point, RobustConfig, ShapeCoeffs, ShapeModel};

/// Synthetic-scene parameters. Deserialises with every field optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub focal_px: f64,
    pub image_w: f64,
    pub image_h: f64,
    /// Model points are drawn from `[-h, h]³`.
    pub half_extent: f64,
    /// Object centre ranges in the ground frame.
    pub center_x: (f64, f64),
    pub center_y: (f64, f64),
    pub center_z: (f64, f64),
    pub yaw_range: (f64, f64),
    pub n_points: usize,
    pub noise_sigma_px: f64,
    pub pitch_deg: f64,
    pub outlier_ratio: f64,
    pub pitch_error_deg: f64,
    pub bbox_error_px: f64,
    pub n_trials: usize,
    pub seed: u64,
    /// Deformation modes of the synthetic shape model (0 = rigid).
    pub shape_modes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            focal_px: 800.0,
            image_w: 640.0,
            image_h: 480.0,
            half_extent: 2.0,
            center_x: (-4.0, 4.0),
            center_y: (-1.0, 1.0),
            center_z: (20.0, 40.0),
            yaw_range: (-std::f64::consts::PI, std::f64::consts::PI),
            n_points: 300,
            noise_sigma_px: 2.0,
            pitch_deg: 0.0,
            outlier_ratio: 0.5,
            pitch_error_deg: 0.0,
            bbox_error_px: 0.0,
            n_trials: 1000,
            seed: 0,
            shape_modes: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(PoseError::InvalidConfig(msg.into()));
        if !(self.focal_px > 0.0 && self.image_w > 0.0 && self.image_h > 0.0) {
            return bad("focal length and image size must be positive");
        }
        if !(self.half_extent > 0.0) {
            return bad("half extent must be positive");
        }
        for (lo, hi) in [self.center_x, self.center_y, self.center_z, self.yaw_range] {
            if !(lo <= hi) {
                return bad("sampling ranges must be non-empty");
            }
        }
        if !(self.center_z.0 > self.half_extent * 3f64.sqrt()) {
            return bad("objects must lie entirely in front of the camera");
        }
        if !(0.0..1.0).contains(&self.outlier_ratio) {
            return bad("outlier ratio must lie in [0, 1)");
        }
        if self.n_points < 4 {
            return bad("at least 4 points are required");
        }
        if !(self.noise_sigma_px >= 0.0) {
            return bad("noise sigma must be non-negative");
        }
        if !(self.pitch_deg.abs() < 45.0 && (self.pitch_deg + self.pitch_error_deg).abs() < 45.0) {
            return bad("pitch and pitch prior must stay within ±45°");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::new(
            self.focal_px,
            self.focal_px,
            0.5 * self.image_w,
            0.5 * self.image_h,
        )
        .expect("validated focal length")
    }

    pub fn n_outliers(&self) -> usize {
        (self.outlier_ratio * self.n_points as f64).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub gt_pose: Pose,
    pub corrs: CorrespondenceSet,
    /// `true` for correspondences whose observation was not replaced.
    pub inlier_mask: Vec<bool>,
    pub bbox: BoundingBox2D,
    pub box3d: BoundingBox3D,
    pub scene: GroundScene,
    /// Present when `shape_modes > 0`; correspondence ids index its vertices.
    pub shape: Option<ShapeModel>,
    pub gt_coeffs: ShapeCoeffs,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Deterministic random stream for one trial.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Builds one synthetic trial.
pub fn generate(cfg: &SynthConfig, trial: usize) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = trial_rng(cfg.seed, trial);
    let k = cfg.intrinsics();
    let h = cfg.half_extent;
    let n = cfg.n_points;

    let yaw = uniform(&mut rng, cfg.yaw_range);
    let center = Vector3::new(
        uniform(&mut rng, cfg.center_x),
        uniform(&mut rng, cfg.center_y),
        uniform(&mut rng, cfg.center_z),
    );
    let points: Vec<Vector3<f64>> = (0..n)
        .map(|_| {
            Vector3::new(
                uniform(&mut rng, (-h, h)),
                uniform(&mut rng, (-h, h)),
                uniform(&mut rng, (-h, h)),
            )
        })
        .collect();
    let noise: Vec<Vector2<f64>> = (0..n)
        .map(|_| Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let replacement: Vec<Vector2<f64>> = (0..n)
        .map(|_| {
            Vector2::new(
                uniform(&mut rng, (0.0, cfg.image_w)),
                uniform(&mut rng, (0.0, cfg.image_h)),
            )
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let edge_shift: [f64; 4] = std::array::from_fn(|_| uniform(&mut rng, (-1.0, 1.0)));

    let (shape, gt_coeffs) = if cfg.shape_modes > 0 {
        let basis: Vec<Vec<Vector3<f64>>> = (0..cfg.shape_modes)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        0.1 * h
                            * Vector3::new(
                                uniform(&mut rng, (-1.0, 1.0)),
                                uniform(&mut rng, (-1.0, 1.0)),
                                uniform(&mut rng, (-1.0, 1.0)),
                            )
                    })
                    .collect()
            })
            .collect();
        let coeffs = ShapeCoeffs(
            (0..cfg.shape_modes)
                .map(|_| uniform(&mut rng, (-1.0, 1.0)))
                .collect(),
        );
        (Some(ShapeModel::new(points.clone(), basis)?), coeffs)
    } else {
        (None, ShapeCoeffs::zeros(0))
    };

    let g_true = GroundFrame::new(cfg.pitch_deg.to_radians())?;
    let gt_pose = Pose::new(
        *g_true.r_cg() * Rotation::about_y(yaw),
        g_true.r_cg().matrix() * center,
    );

    let mut outlier = vec![false; n];
    for &i in &order[..cfg.n_outliers()] {
        outlier[i] = true;
    }
    let mut corrs = Vec::with_capacity(n);
    for i in 0..n {
        let shaped = match &shape {
            Some(m) => shape_point(m, &gt_coeffs, i)?,
            None => points[i],
        };
        let image = if outlier[i] {
            replacement[i]
        } else {
            project(&gt_pose, &k, &shaped)? + cfg.noise_sigma_px * noise[i]
        };
        corrs.push(Correspondence::new(i, image, points[i]));
    }

    let (mut lo, mut hi) = (
        Vector3::repeat(f64::INFINITY),
        Vector3::repeat(f64::NEG_INFINITY),
    );
    for p in &points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let box3d = BoundingBox3D::from_extents(lo.x, hi.x, lo.z, hi.z)?;
    let mut corner_px = Vec::with_capacity(8);
    for c in box3d.corners() {
        for y in [lo.y, hi.y] {
            corner_px.push(project(&gt_pose, &k, &Vector3::new(c.x, y, c.y))?);
        }
    }
    let exact = BoundingBox2D::enclosing(corner_px.iter())?;
    let e = cfg.bbox_error_px;
    let bbox = BoundingBox2D::new(
        exact.x_min + e * edge_shift[0],
        exact.y_min + e * edge_shift[1],
        exact.x_max + e * edge_shift[2],
        exact.y_max + e * edge_shift[3],
    )?;
    let ground = GroundFrame::new((cfg.pitch_deg + cfg.pitch_error_deg).to_radians())?;

    Ok(SynthScene {
        gt_pose,
        corrs: CorrespondenceSet::new(corrs)?,
        inlier_mask: outlier.iter().map(|o| !o).collect(),
        bbox,
        box3d,
        scene: GroundScene {
            intrinsics: k,
            ground,
            bbox,
        },
        shape,
        gt_coeffs,
    })
}

/// Angle between two vectors in degrees.
///
/// Uses `atan2(‖a×b‖, a·b)`; `acos` of a dot product that rounds to one
/// cannot resolve angles below about 1e-6°.
fn vector_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

/// Largest angle, in degrees, between corresponding columns of `r` and `r_gt`.
pub fn rotation_error(r: &Rotation, r_gt: &Rotation) -> f64 {
    (0..3)
        .map(|i| {
            vector_angle_deg(
                &r.matrix().column(i).into_owned(),
                &r_gt.matrix().column(i).into_owned(),
            )
        })
        .fold(0.0, f64::max)
}

/// `‖t_gt − t‖ / ‖t‖ · 100`.
pub fn translation_error(t: &Vector3<f64>, t_gt: &Vector3<f64>) -> Result<f64> {
    let n = t.norm();
    if n == 0.0 {
        return Err(PoseError::ZeroEstimate);
    }
    Ok((t_gt - t).norm() / n * 100.0)
}

/// Angle between `t` and `t_gt` in degrees.
pub fn angular_translation_error(t: &Vector3<f64>, t_gt: &Vector3<f64>) -> Result<f64> {
    if t.norm() == 0.0 || t_gt.norm() == 0.0 {
        return Err(PoseError::ZeroEstimate);
    }
    Ok(vector_angle_deg(t, t_gt))
}

/// Mean distance between vertices of the estimated and true shapes.
///
/// With `scale = Some((t, t_gt))` the estimated shape is first multiplied
/// by `‖t_gt‖/‖t‖`.
pub fn vertex_error(
    model: &ShapeModel,
    coeffs: &ShapeCoeffs,
    coeffs_gt: &ShapeCoeffs,
    scale: Option<(&Vector3<f64>, &Vector3<f64>)>,
) -> Result<f64> {
    if model.is_empty() {
        return Err(PoseError::EmptyInput);
    }
    let s = match scale {
        Some((t, t_gt)) => {
            let n = t.norm();
            if n == 0.0 {
                return Err(PoseError::ZeroEstimate);
            }
            t_gt.norm() / n
        }
        None => 1.0,
    };
    let mut sum = 0.0;
    for i in 0..model.len() {
        sum += (s * shape_point(model, coeffs, i)? - shape_point(model, coeffs_gt, i)?).norm();
    }
    Ok(sum / model.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    P1p,
    P3p,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Refiner {
    None,
    Gn,
    Hre,
    Re,
}

/// A RANSAC solver followed by a refinement step, written `p1p+gn` etc.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Method {
    pub solver: SolverKind,
    pub refiner: Refiner,
}

impl Method {
    pub const fn new(solver: SolverKind, refiner: Refiner) -> Self {
        Self { solver, refiner }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.solver {
            SolverKind::P1p => "p1p",
            SolverKind::P3p => "p3p",
        };
        let r = match self.refiner {
            Refiner::None => "none",
            Refiner::Gn => "gn",
            Refiner::Hre => "hre",
            Refiner::Re => "re",
        };
        write!(f, "{s}+{r}")
    }
}

impl FromStr for Method {
    type Err = PoseError;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (a, b) = lower.split_once('+').unwrap_or((lower.as_str(), "none"));
        let solver = match a {
            "p1p" => SolverKind::P1p,
            "p3p" => SolverKind::P3p,
            _ => {
                return Err(PoseError::InvalidConfig(format!(
                    "unknown solver '{a}' in method '{s}' (expected p1p or p3p)"
                )))
            }
        };
        let refiner = match b {
            "none" => Refiner::None,
            "gn" => Refiner::Gn,
            "hre" => Refiner::Hre,
            "re" => Refiner::Re,
            _ => {
                return Err(PoseError::InvalidConfig(format!(
                    "unknown refiner '{b}' in method '{s}' (expected none, gn, hre or re)"
                )))
            }
        };
        Ok(Self { solver, refiner })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// Outlier ratio 10–90%.
    E1,
    /// Number of points 50–1000.
    E2,
    /// Pitch-prior error −5°..5°.
    E3,
    /// Bounding-box edge error −5..5 px.
    E4,
    /// Pitch-prior error 0..5°, refiners compared.
    Hre3,
    /// Bounding-box error 0..5 px, refiners compared.
    Hre4,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::E1,
        Experiment::E2,
        Experiment::E3,
        Experiment::E4,
        Experiment::Hre3,
        Experiment::Hre4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::E1 => "e1",
            Experiment::E2 => "e2",
            Experiment::E3 => "e3",
            Experiment::E4 => "e4",
            Experiment::Hre3 => "hre3",
            Experiment::Hre4 => "hre4",
        }
    }

    /// Values of the swept variable (percent, points, degrees or pixels).
    pub fn settings(self) -> Vec<f64> {
        match self {
            Experiment::E1 => (1..=9).map(|i| 10.0 * i as f64).collect(),
            Experiment::E2 => vec![50.0, 100.0, 200.0, 400.0, 600.0, 800.0, 1000.0],
            Experiment::E3 | Experiment::E4 => (-5..=5).map(f64::from).collect(),
            Experiment::Hre3 | Experiment::Hre4 => (0..=5).map(f64::from).collect(),
        }
    }

    pub fn apply(self, base: &SynthConfig, setting: f64) -> SynthConfig {
        let mut cfg = base.clone();
        match self {
            Experiment::E1 => cfg.outlier_ratio = setting / 100.0,
            Experiment::E2 => cfg.n_points = setting as usize,
            Experiment::E3 | Experiment::Hre3 => cfg.pitch_error_deg = setting,
            Experiment::E4 | Experiment::Hre4 => cfg.bbox_error_px = setting,
        }
        cfg
    }

    pub fn default_methods(self) -> Vec<Method> {
        use Refiner::*;
        use SolverKind::*;
        match self {
            Experiment::Hre3 | Experiment::Hre4 => {
                vec![Method::new(P1p, Gn), Method::new(P1p, Hre)]
            }
            _ => vec![Method::new(P1p, Gn), Method::new(P3p, Gn)],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = PoseError;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                PoseError::InvalidConfig(format!(
                    "unknown experiment '{s}' (expected e1, e2, e3, e4, hre3 or hre4)"
                ))
            })
    }
}

/// Outcome of one method on one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRecord {
    pub experiment: Experiment,
    pub setting: f64,
    pub trial: usize,
    pub method: Method,
    /// Error name when the estimate is counted as a failure.
    pub failure: Option<String>,
    pub e_r_deg: f64,
    pub e_t_pct: f64,
    pub e_a_deg: f64,
    /// Scale-adjusted vertex error; only for deformable models.
    pub e_v: Option<f64>,
    /// Correspondences within the RANSAC threshold under the final estimate.
    pub n_inliers: usize,
    pub iterations: usize,
    /// RANSAC plus refinement time, when timing is enabled.
    pub wall_time_ms: Option<f64>,
}

impl BenchRecord {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// Estimates a rotation error above this many degrees are counted as failures.
pub const FAILURE_ROTATION_DEG: f64 = 90.0;

/// Everything except the synthetic scene that a run needs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchOptions {
    pub ransac: RansacConfig,
    pub robust: RobustConfig,
    pub timing: bool,
}

fn failure_name(e: &PoseError) -> String {
    match e {
        PoseError::NoValidSolution => "NoValidSolution".into(),
        PoseError::SingularNormalEquations => "SingularNormalEquations".into(),
        PoseError::InsufficientInliers { .. } => "InsufficientInliers".into(),
        PoseError::NonPositiveDepth => "NonPositiveDepth".into(),
        other => format!("{other}"),
    }
}

/// Mixes a trial index into the RANSAC seed.
pub fn ransac_seed(seed: u64, trial: usize) -> u64 {
    let mut z = seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs RANSAC with the chosen minimal solver.
pub fn run_ransac(
    solver: SolverKind,
    corrs: &CorrespondenceSet,
    scene: &GroundScene,
    footprint: &BoundingBox3D,
    cfg: &RansacConfig,
) -> Result<RansacResult> {
    match solver {
        SolverKind::P1p => ransac::run(
            corrs,
            scene,
            &P1pSolver {
                footprint: *footprint,
            },
            cfg,
        ),
        SolverKind::P3p => ransac::run(corrs, scene, &P3pSolver, cfg),
    }
}

/// Pose and shape produced by a refiner from a RANSAC estimate.
///
/// `gn` refines over the RANSAC inliers; `hre` and `re` use every
/// correspondence.
pub fn refine_estimate(
    refiner: Refiner,
    corrs: &CorrespondenceSet,
    shape: Option<&ShapeModel>,
    k: &Intrinsics,
    ransac: &RansacResult,
    robust: &RobustConfig,
) -> Result<(Pose, ShapeCoeffs)> {
    let modes = shape.map_or(0, ShapeModel::modes);
    let all = corrs.as_slice();
    match refiner {
        Refiner::None => Ok((ransac.pose, ShapeCoeffs::zeros(modes))),
        Refiner::Gn => {
            let inl = corrs.subset(&ransac.inlier_ids);
            let pose = refine::gauss_newton(
                inl.as_slice(),
                k,
                &ransac.pose,
                robust.max_gn_iters,
                robust.convergence_tol,
            )?;
            Ok((pose, ShapeCoeffs::zeros(modes)))
        }
        Refiner::Hre => {
            let r = refine::hre(all, shape, k, &ransac.pose, robust)?;
            Ok((r.pose, r.coeffs))
        }
        Refiner::Re => {
            let r = refine::robust_estimate(all, shape, k, &ransac.pose, robust)?;
            Ok((r.pose, r.coeffs))
        }
    }
}

/// Runs every method on one scene. Methods sharing a solver share its RANSAC run.
pub fn run_trial(
    experiment: Experiment,
    setting: f64,
    trial: usize,
    scene: &SynthScene,
    methods: &[Method],
    seed: u64,
    opts: &BenchOptions,
) -> Vec<BenchRecord> {
    let mut ransac_cache: Vec<(SolverKind, Result<RansacResult>, f64)> = Vec::new();
    let mut out = Vec::with_capacity(methods.len());
    let k = &scene.scene.intrinsics;
    for &method in methods {
        if !ransac_cache.iter().any(|(s, _, _)| *s == method.solver) {
            let cfg = RansacConfig {
                seed: ransac_seed(seed, trial),
                ..opts.ransac
            };
            let start = Instant::now();
            let r = run_ransac(
                method.solver,
                &scene.corrs,
                &scene.scene,
                &scene.box3d,
                &cfg,
            );
            ransac_cache.push((method.solver, r, start.elapsed().as_secs_f64() * 1e3));
        }
        let (_, ransac_result, ransac_ms) = ransac_cache
            .iter()
            .find(|(s, _, _)| *s == method.solver)
            .expect("cached above");

        let mut rec = BenchRecord {
            experiment,
            setting,
            trial,
            method,
            failure: None,
            e_r_deg: f64::NAN,
            e_t_pct: f64::NAN,
            e_a_deg: f64::NAN,
            e_v: None,
            n_inliers: 0,
            iterations: 0,
            wall_time_ms: None,
        };
        let ransac_result = match ransac_result {
            Ok(r) => r,
            Err(e) => {
                rec.failure = Some(failure_name(e));
                rec.wall_time_ms = opts.timing.then_some(*ransac_ms);
                out.push(rec);
                continue;
            }
        };
        rec.iterations = ransac_result.iterations_run;
        let start = Instant::now();
        let refined = refine_estimate(
            method.refiner,
            &scene.corrs,
            scene.shape.as_ref(),
            k,
            ransac_result,
            &opts.robust,
        );
        let refine_ms = start.elapsed().as_secs_f64() * 1e3;
        rec.wall_time_ms = opts.timing.then_some(ransac_ms + refine_ms);
        let (pose, coeffs) = match refined {
            Ok(p) => p,
            Err(e) => {
                rec.failure = Some(failure_name(&e));
                out.push(rec);
                continue;
            }
        };
        let gt = &scene.gt_pose;
        rec.e_r_deg = rotation_error(&pose.rotation, &gt.rotation);
        let e_t = translation_error(&pose.translation, &gt.translation);
        let e_a = angular_translation_error(&pose.translation, &gt.translation);
        match (e_t, e_a) {
            (Ok(t), Ok(a)) => {
                rec.e_t_pct = t;
                rec.e_a_deg = a;
            }
            (Err(e), _) | (_, Err(e)) => {
                rec.failure = Some(failure_name(&e));
            }
        }
        if let Some(m) = &scene.shape {
            rec.e_v = vertex_error(
                m,
                &coeffs,
                &scene.gt_coeffs,
                Some((&pose.translation, &gt.translation)),
            )
            .ok();
        }
        let t_in = opts.ransac.inlier_threshold_px;
        rec.n_inliers = scene
            .corrs
            .iter()
            .filter(|c| {
                residual(&pose, &coeffs, scene.shape.as_ref(), k, c).is_ok_and(|r| r < t_in)
            })
            .count();
        if rec.failure.is_none() && !(rec.e_r_deg <= FAILURE_ROTATION_DEG) {
            rec.failure = Some("RotationErrorAbove90".into());
        }
        out.push(rec);
    }
    out
}

/// All trials of all settings of one experiment, in a fixed order.
pub fn run_experiment(
    experiment: Experiment,
    methods: &[Method],
    base: &SynthConfig,
    opts: &BenchOptions,
) -> Result<Vec<BenchRecord>> {
    run_experiment_with(experiment, &experiment.settings(), methods, base, opts)
}

/// Like [`run_experiment`] with an explicit list of settings.
pub fn run_experiment_with(
    experiment: Experiment,
    settings: &[f64],
    methods: &[Method],
    base: &SynthConfig,
    opts: &BenchOptions,
) -> Result<Vec<BenchRecord>> {
    if methods.is_empty() {
        return Err(PoseError::InvalidConfig("no methods selected".into()));
    }
    opts.ransac.validate()?;
    opts.robust.validate()?;
    let mut records = Vec::new();
    for &setting in settings {
        let cfg = experiment.apply(base, setting);
        cfg.validate()?;
        for trial in 0..cfg.n_trials {
            let scene = generate(&cfg, trial)?;
            records.extend(run_trial(
                experiment, setting, trial, &scene, methods, cfg.seed, opts,
            ));
        }
    }
    Ok(records)
}

/// Per-(setting, method) aggregate. Means skip failed trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub experiment: Experiment,
    pub setting: f64,
    pub method: Method,
    pub trials: usize,
    pub failures: usize,
    pub mean_e_r_deg: f64,
    pub mean_e_t_pct: f64,
    pub mean_e_a_deg: f64,
    pub mean_e_v: Option<f64>,
    pub mean_inliers: f64,
    pub mean_iterations: f64,
    pub mean_time_ms: Option<f64>,
    pub median_time_ms: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn median_of(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Groups records by (setting, method), keeping first-appearance order.
pub fn aggregate(records: &[BenchRecord]) -> Vec<Summary> {
    let mut keys: Vec<(Experiment, f64, Method)> = Vec::new();
    for r in records {
        let key = (r.experiment, r.setting, r.method);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(experiment, setting, method)| {
            let group: Vec<&BenchRecord> = records
                .iter()
                .filter(|r| {
                    r.experiment == experiment && r.setting == setting && r.method == method
                })
                .collect();
            let ok: Vec<&BenchRecord> = group.iter().copied().filter(|r| !r.failed()).collect();
            let e_v: Vec<f64> = ok.iter().filter_map(|r| r.e_v).collect();
            let times: Vec<f64> = group.iter().filter_map(|r| r.wall_time_ms).collect();
            Summary {
                experiment,
                setting,
                method,
                trials: group.len(),
                failures: group.len() - ok.len(),
                mean_e_r_deg: mean(ok.iter().map(|r| r.e_r_deg)),
                mean_e_t_pct: mean(ok.iter().map(|r| r.e_t_pct)),
                mean_e_a_deg: mean(ok.iter().map(|r| r.e_a_deg)),
                mean_e_v: (!e_v.is_empty()).then(|| mean(e_v.iter().copied())),
                mean_inliers: mean(ok.iter().map(|r| r.n_inliers as f64)),
                mean_iterations: mean(group.iter().map(|r| r.iterations as f64)),
                mean_time_ms: (!times.is_empty()).then(|| mean(times.iter().copied())),
                median_time_ms: median_of(times),
            }
        })
        .collect()
}

/// Percentile bootstrap interval for the mean of `values`.
pub fn bootstrap_mean_ci(
    values: &[f64],
    resamples: usize,
    level: f64,
    seed: u64,
) -> Option<(f64, f64)> {
    if values.is_empty() || resamples == 0 || !(0.0 < level && level < 1.0) {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let alpha = 0.5 * (1.0 - level);
    let idx = |q: f64| ((q * (resamples - 1) as f64).round() as usize).min(resamples - 1);
    Some((means[idx(alpha)], means[idx(1.0 - alpha)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn clean() -> SynthConfig {
        SynthConfig {
            noise_sigma_px: 0.0,
            outlier_ratio: 0.0,
            n_trials: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn clean_scene_reprojects_exactly() {
        let s = generate(&clean(), 3).unwrap();
        for c in s.corrs.iter() {
            let px = project(&s.gt_pose, &s.scene.intrinsics, &c.model).unwrap();
            assert!((px - c.image).norm() < 1e-9);
        }
        assert!(s.inlier_mask.iter().all(|m| *m));
    }

    #[test]
    fn default_outlier_count() {
        let s = generate(&SynthConfig::default(), 0).unwrap();
        assert_eq!(s.corrs.len(), 300);
        assert_eq!(s.inlier_mask.iter().filter(|m| !**m).count(), 150);
    }

    #[test]
    fn outliers_land_far_from_truth() {
        let cfg = SynthConfig {
            noise_sigma_px: 0.0,
            ..SynthConfig::default()
        };
        let (mut far, mut total) = (0, 0);
        for trial in 0..20 {
            let s = generate(&cfg, trial).unwrap();
            for (c, inl) in s.corrs.iter().zip(&s.inlier_mask) {
                if !inl {
                    total += 1;
                    let px = project(&s.gt_pose, &s.scene.intrinsics, &c.model).unwrap();
                    if (px - c.image).norm() > 4.0 {
                        far += 1;
                    }
                }
            }
        }
        assert!(far as f64 >= 0.99 * total as f64, "{far}/{total}");
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg, 4).unwrap(), generate(&cfg, 4).unwrap());
        assert_ne!(
            generate(&cfg, 4).unwrap().gt_pose,
            generate(&cfg, 5).unwrap().gt_pose
        );
    }

    #[test]
    fn common_random_numbers_across_settings() {
        let base = SynthConfig::default();
        let a = generate(&Experiment::E3.apply(&base, 0.0), 2).unwrap();
        let b = generate(&Experiment::E3.apply(&base, 3.0), 2).unwrap();
        assert_eq!(a.gt_pose, b.gt_pose);
        assert_eq!(a.corrs, b.corrs);
        assert_relative_eq!(
            b.scene.ground.pitch() - a.scene.ground.pitch(),
            3f64.to_radians(),
            epsilon = 1e-12
        );
        let c = generate(&Experiment::E4.apply(&base, 2.0), 2).unwrap();
        let d = generate(&Experiment::E4.apply(&base, -2.0), 2).unwrap();
        assert_relative_eq!(
            c.bbox.x_min - a.bbox.x_min,
            a.bbox.x_min - d.bbox.x_min,
            epsilon = 1e-9
        );
        assert!((c.bbox.x_min - a.bbox.x_min).abs() <= 2.0);
    }

    #[test]
    fn bbox_encloses_projected_box() {
        let s = generate(&clean(), 1).unwrap();
        for c in s.corrs.iter() {
            let px = project(&s.gt_pose, &s.scene.intrinsics, &c.model).unwrap();
            assert!(px.x >= s.bbox.x_min - 1e-9 && px.x <= s.bbox.x_max + 1e-9);
            assert!(px.y >= s.bbox.y_min - 1e-9 && px.y <= s.bbox.y_max + 1e-9);
        }
    }

    #[test]
    fn rotation_error_examples() {
        let i = Rotation::identity();
        assert_eq!(rotation_error(&i, &i), 0.0);
        let r = Rotation::about_y(10f64.to_radians());
        // Columns 1 and 3 turn by 10°, column 2 stays.
        assert_relative_eq!(rotation_error(&r, &i), 10.0, epsilon = 1e-9);
        // Oracle: clamped acos of column dot products, away from the flat spot at 0.
        let a = crate::geometry::exp_so3(&Vector3::new(0.3, -0.2, 0.5));
        let b = crate::geometry::exp_so3(&Vector3::new(-0.1, 0.4, 0.2));
        let oracle = (0..3)
            .map(|c| {
                let d: f64 = (0..3)
                    .map(|k| a.matrix()[(k, c)] * b.matrix()[(k, c)])
                    .sum();
                d.clamp(-1.0, 1.0).acos().to_degrees()
            })
            .fold(0.0, f64::max);
        assert_relative_eq!(rotation_error(&a, &b), oracle, epsilon = 1e-9);
        // Resolves tiny angles that acos rounds to zero or to 1.2e-6°.
        let tiny = crate::geometry::exp_so3(&Vector3::new(0.0, 1e-12, 0.0));
        assert_relative_eq!(
            rotation_error(&tiny, &i),
            1e-12f64.to_degrees(),
            max_relative = 1e-6
        );
        let flip = Rotation::from_matrix(nalgebra::Matrix3::from_diagonal(&Vector3::new(
            1.0, -1.0, -1.0,
        )))
        .unwrap();
        assert_relative_eq!(rotation_error(&flip, &i), 180.0);
    }

    #[test]
    fn translation_error_examples() {
        let t = Vector3::new(0.0, 0.0, 10.0);
        assert_eq!(translation_error(&t, &t).unwrap(), 0.0);
        assert_relative_eq!(
            translation_error(&t, &Vector3::new(0.0, 0.0, 11.0)).unwrap(),
            10.0
        );
        assert_eq!(
            translation_error(&Vector3::zeros(), &t),
            Err(PoseError::ZeroEstimate)
        );
        assert_relative_eq!(angular_translation_error(&t, &(2.0 * t)).unwrap(), 0.0);
        assert_relative_eq!(
            angular_translation_error(&Vector3::x(), &Vector3::z()).unwrap(),
            90.0
        );
        assert_relative_eq!(
            angular_translation_error(&Vector3::new(1.0, 0.0, 1.0), &Vector3::z()).unwrap(),
            45.0,
            epsilon = 1e-12
        );
        assert!(angular_translation_error(&Vector3::zeros(), &t).is_err());
    }

    #[test]
    fn vertex_error_examples() {
        let m = ShapeModel::new(
            vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 2.0, 0.0)],
            vec![vec![
                Vector3::new(0.0, 1.0, 0.0),
                Vector3::new(0.0, 0.0, -1.0),
            ]],
        )
        .unwrap();
        let a = ShapeCoeffs(vec![1.5]);
        assert_eq!(vertex_error(&m, &a, &a, None).unwrap(), 0.0);
        assert_relative_eq!(
            vertex_error(&m, &ShapeCoeffs(vec![2.5]), &a, None).unwrap(),
            1.0
        );
        // Scale adjustment multiplies the estimate by ‖t_gt‖/‖t‖ = 2.
        let t = Vector3::new(0.0, 0.0, 5.0);
        let t_gt = Vector3::new(0.0, 0.0, 10.0);
        let zero = ShapeCoeffs(vec![0.0]);
        assert_relative_eq!(
            vertex_error(&m, &zero, &zero, Some((&t, &t_gt))).unwrap(),
            (1.0 + 2.0) / 2.0
        );
    }

    #[test]
    fn method_parsing() {
        let m: Method = "p1p+hre".parse().unwrap();
        assert_eq!(m, Method::new(SolverKind::P1p, Refiner::Hre));
        assert_eq!(m.to_string(), "p1p+hre");
        assert_eq!("P3P".parse::<Method>().unwrap().refiner, Refiner::None);
        assert!("p4p+gn".parse::<Method>().is_err());
        assert!("p1p+lm".parse::<Method>().is_err());
        assert_eq!("HRE3".parse::<Experiment>().unwrap(), Experiment::Hre3);
    }

    #[test]
    fn sweep_settings() {
        assert_eq!(Experiment::E1.settings().len(), 9);
        assert_eq!(
            Experiment::E2.settings(),
            vec![50.0, 100.0, 200.0, 400.0, 600.0, 800.0, 1000.0]
        );
        assert_eq!(Experiment::E3.settings().first(), Some(&-5.0));
        assert_eq!(Experiment::E4.settings().len(), 11);
        assert_eq!(
            Experiment::E1
                .apply(&SynthConfig::default(), 70.0)
                .outlier_ratio,
            0.7
        );
    }

    #[test]
    fn bootstrap_brackets_the_mean() {
        let v: Vec<f64> = (0..200).map(|i| (i % 17) as f64).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let (lo, hi) = bootstrap_mean_ci(&v, 2000, 0.95, 1).unwrap();
        assert!(lo < m && m < hi);
        assert!(bootstrap_mean_ci(&[], 10, 0.95, 1).is_none());
        assert_eq!(bootstrap_mean_ci(&[3.0; 5], 10, 0.95, 1), Some((3.0, 3.0)));
    }

    #[test]
    fn small_experiment_runs_and_aggregates() {
        let base = SynthConfig {
            n_trials: 4,
            seed: 3,
            ..SynthConfig::default()
        };
        let methods = Experiment::E1.default_methods();
        let recs = run_experiment_with(
            Experiment::E1,
            &[30.0, 50.0],
            &methods,
            &base,
            &BenchOptions::default(),
        )
        .unwrap();
        assert_eq!(recs.len(), 2 * 4 * 2);
        let sums = aggregate(&recs);
        assert_eq!(sums.len(), 4);
        for s in &sums {
            assert_eq!(s.trials, 4);
            assert!(s.mean_time_ms.is_none());
            assert!(s.failures < 4);
            assert!(s.mean_e_r_deg >= 0.0 && s.mean_e_r_deg <= 180.0);
        }
    }

    #[test]
    fn shape_scene_reports_vertex_error() {
        let base = SynthConfig {
            n_trials: 3,
            shape_modes: 2,
            outlier_ratio: 0.3,
            ..SynthConfig::default()
        };
        let recs = run_experiment_with(
            Experiment::Hre3,
            &[0.0],
            &[Method::new(SolverKind::P1p, Refiner::Hre)],
            &base,
            &BenchOptions::default(),
        )
        .unwrap();
        for r in recs.iter().filter(|r| !r.failed()) {
            assert!(r.e_v.is_some_and(|v| v.is_finite() && v >= 0.0));
        }
    }
}
