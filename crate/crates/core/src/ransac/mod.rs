//! n-point RANSAC with adaptive termination.
//!
//! The loop samples a minimal set, asks a [`MinimalSolver`] for pose
//! hypotheses, counts inliers by reprojection error and keeps the hypothesis
//! with the most inliers. After each improvement the iteration bound is
//! tightened to `⌈log(1−p)/log(1−wⁿ)⌉` where `w` is the best inlier ratio.

mod p3p;

use std::collections::HashSet;

use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PoseError, Result};
use crate::geometry::{GroundFrame, Intrinsics, Pose};
use crate::p1p::{self, BoundingBox2D, BoundingBox3D};

pub use p3p::solve_p3p;

/// A 2D image observation paired with its 3D model point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub id: usize,
    pub image: Vector2<f64>,
    pub model: Vector3<f64>,
}

impl Correspondence {
    pub fn new(id: usize, image: Vector2<f64>, model: Vector3<f64>) -> Self {
        Self { id, image, model }
    }
}

/// Correspondences with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet(Vec<Correspondence>);

impl CorrespondenceSet {
    pub fn new(corrs: Vec<Correspondence>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(corrs.len());
        for c in &corrs {
            if !seen.insert(c.id) {
                return Err(PoseError::InvalidConfig(format!(
                    "duplicate correspondence id {}",
                    c.id
                )));
            }
        }
        Ok(Self(corrs))
    }

    pub fn as_slice(&self) -> &[Correspondence] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Correspondence> {
        self.0.iter()
    }

    /// Subset with the given ids, in the original order.
    pub fn subset(&self, ids: &[usize]) -> CorrespondenceSet {
        let keep: HashSet<usize> = ids.iter().copied().collect();
        CorrespondenceSet(
            self.0
                .iter()
                .filter(|c| keep.contains(&c.id))
                .copied()
                .collect(),
        )
    }

    pub fn get(&self, id: usize) -> Option<&Correspondence> {
        self.0.iter().find(|c| c.id == id)
    }
}

/// Prior inputs shared by all hypotheses of one object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundScene {
    pub intrinsics: Intrinsics,
    pub ground: GroundFrame,
    pub bbox: BoundingBox2D,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub inlier_threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_threshold_px: 4.0,
            max_iterations: 1000,
            confidence: 0.99,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inlier_threshold_px > 0.0) {
            return Err(PoseError::InvalidConfig(
                "inlier threshold must be positive".into(),
            ));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(PoseError::InvalidConfig(
                "confidence must lie in (0, 1)".into(),
            ));
        }
        if self.max_iterations == 0 {
            return Err(PoseError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub pose: Pose,
    /// Sorted ids with reprojection error below the threshold.
    pub inlier_ids: Vec<usize>,
    pub iterations_run: usize,
    pub hypotheses_evaluated: usize,
    /// Ids of the minimal sample that produced the winning hypothesis.
    pub best_sample: Vec<usize>,
}

/// Produces pose hypotheses from a minimal sample.
pub trait MinimalSolver {
    fn sample_size(&self) -> usize;
    fn hypotheses(&self, sample: &[&Correspondence], scene: &GroundScene) -> Vec<Pose>;
    fn name(&self) -> &'static str;
}

/// One-point solver using the ground prior and the 2D box.
#[derive(Debug, Clone, Copy)]
pub struct P1pSolver {
    pub footprint: BoundingBox3D,
}

impl MinimalSolver for P1pSolver {
    fn sample_size(&self) -> usize {
        1
    }

    fn hypotheses(&self, sample: &[&Correspondence], scene: &GroundScene) -> Vec<Pose> {
        p1p::solve_all(
            sample[0],
            &scene.bbox,
            &self.footprint,
            &scene.intrinsics,
            &scene.ground,
        )
        .map(|v| v.into_iter().map(|s| s.pose).collect())
        .unwrap_or_default()
    }

    fn name(&self) -> &'static str {
        "p1p"
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct P3pSolver;

impl MinimalSolver for P3pSolver {
    fn sample_size(&self) -> usize {
        3
    }

    fn hypotheses(&self, sample: &[&Correspondence], scene: &GroundScene) -> Vec<Pose> {
        solve_p3p(sample, &scene.intrinsics).unwrap_or_default()
    }

    fn name(&self) -> &'static str {
        "p3p"
    }
}

/// Pixel distance between the projection of `corr.model` and `corr.image`;
/// `+∞` for points at or behind the camera.
pub fn reprojection_error(pose: &Pose, k: &Intrinsics, corr: &Correspondence) -> f64 {
    crate::geometry::project(pose, k, &corr.model)
        .map(|px| (px - corr.image).norm())
        .unwrap_or(f64::INFINITY)
}

/// `⌈log(1−confidence)/log(1−wⁿ)⌉`, saturating at `usize::MAX`.
pub fn adaptive_bound(inlier_ratio: f64, sample_size: usize, confidence: f64) -> usize {
    let p = inlier_ratio.clamp(0.0, 1.0).powi(sample_size as i32);
    if p >= 1.0 {
        return 0;
    }
    let denom = (1.0 - p).ln();
    if denom == 0.0 {
        return usize::MAX;
    }
    let n = ((1.0 - confidence).ln() / denom).ceil();
    if n >= usize::MAX as f64 {
        usize::MAX
    } else {
        n.max(0.0) as usize
    }
}

fn score(pose: &Pose, k: &Intrinsics, corrs: &[Correspondence], t_in: f64) -> (usize, f64) {
    let mut count = 0;
    let mut sum = 0.0;
    for c in corrs {
        let e = reprojection_error(pose, k, c);
        if e < t_in {
            count += 1;
            sum += e;
        }
    }
    (count, sum)
}

/// Picks the pose with the most inliers, breaking ties by lower mean inlier error.
pub fn disambiguate(poses: &[Pose], corrs: &CorrespondenceSet, k: &Intrinsics, t_in: f64) -> Pose {
    best_of(poses, corrs.as_slice(), k, t_in).0
}

fn best_of(poses: &[Pose], corrs: &[Correspondence], k: &Intrinsics, t_in: f64) -> (Pose, usize) {
    let mut best = (poses[0], 0usize, f64::INFINITY);
    for (i, p) in poses.iter().enumerate() {
        let (n, sum) = score(p, k, corrs, t_in);
        let mean = if n > 0 { sum / n as f64 } else { f64::INFINITY };
        if i == 0 || n > best.1 || (n == best.1 && mean < best.2) {
            best = (*p, n, mean);
        }
    }
    (best.0, best.1)
}

/// Ids of correspondences with reprojection error below `t_in`.
pub fn inliers(pose: &Pose, k: &Intrinsics, corrs: &CorrespondenceSet, t_in: f64) -> Vec<usize> {
    let mut ids: Vec<usize> = corrs
        .iter()
        .filter(|c| reprojection_error(pose, k, c) < t_in)
        .map(|c| c.id)
        .collect();
    ids.sort_unstable();
    ids
}

/// Runs adaptive RANSAC. Deterministic in `cfg.seed`.
pub fn run(
    corrs: &CorrespondenceSet,
    scene: &GroundScene,
    solver: &dyn MinimalSolver,
    cfg: &RansacConfig,
) -> Result<RansacResult> {
    cfg.validate()?;
    let n = solver.sample_size();
    let data = corrs.as_slice();
    if data.len() < n {
        return Err(PoseError::InsufficientInliers {
            needed: n,
            got: data.len(),
        });
    }
    let k = &scene.intrinsics;
    let t_in = cfg.inlier_threshold_px;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut bound = cfg.max_iterations;
    let mut best: Option<(Pose, usize, Vec<usize>)> = None;
    let mut iterations = 0;
    let mut hypotheses = 0;
    let mut sample = Vec::with_capacity(n);

    while iterations < bound.min(cfg.max_iterations) {
        iterations += 1;
        sample.clear();
        sample.extend(
            rand::seq::index::sample(&mut rng, data.len(), n)
                .iter()
                .map(|i| &data[i]),
        );
        let poses = solver.hypotheses(&sample, scene);
        if poses.is_empty() {
            continue;
        }
        hypotheses += poses.len();
        let (pose, count) = best_of(&poses, data, k, t_in);
        if best.as_ref().is_none_or(|b| count > b.1) {
            best = Some((pose, count, sample.iter().map(|c| c.id).collect()));
            bound = adaptive_bound(count as f64 / data.len() as f64, n, cfg.confidence);
        }
    }

    match best {
        Some((pose, count, best_sample)) if count > n => Ok(RansacResult {
            pose,
            inlier_ids: inliers(&pose, k, corrs, t_in),
            iterations_run: iterations,
            hypotheses_evaluated: hypotheses,
            best_sample,
        }),
        _ => Err(PoseError::NoValidSolution),
    }
}
