//! TOML file formats: scenes, shape models and ground-truth sidecars.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use groundpose::geometry::{GroundFrame, Intrinsics, Pose, Rotation};
use groundpose::p1p::{BoundingBox2D, BoundingBox3D};
use groundpose::ransac::{Correspondence, CorrespondenceSet};
use groundpose::refine::{ShapeCoeffs, ShapeModel};
use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntrinsicsSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeypointSpec {
    pub id: usize,
    pub image_xy: [f64; 2],
    pub model_xyz: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub name: String,
    /// `[x_min, y_min, x_max, y_max]` in pixels.
    pub bbox_2d: [f64; 4],
    /// Footprint corners 1–4 as model `(x, z)`.
    pub footprint_corners: [[f64; 2]; 4],
    /// Model-frame forward direction `(x, z)`.
    pub forward: [f64; 2],
    #[serde(default)]
    pub keypoints: Vec<KeypointSpec>,
}

/// Everything `estimate` needs for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub pitch_deg: Spanned<f64>,
    /// Path of a [`ShapeModelFile`], relative to the scene file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape_model: Option<String>,
    pub intrinsics: Spanned<IntrinsicsSpec>,
    #[serde(default)]
    pub objects: Vec<Spanned<ObjectSpec>>,
}

/// A validated object ready for estimation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub name: String,
    pub bbox: BoundingBox2D,
    pub box3d: BoundingBox3D,
    pub corrs: CorrespondenceSet,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn parse_error(path: &Path, text: &str, e: toml::de::Error) -> CliError {
    let line = e
        .span()
        .map(|s| format!(" at line {}", line_of(text, s.start)))
        .unwrap_or_default();
    CliError::Parse(format!(
        "{}{line}: {}",
        path.display(),
        e.message().trim_end()
    ))
}

fn invalid(
    path: &Path,
    text: &str,
    offset: usize,
    field: &str,
    msg: impl std::fmt::Display,
) -> CliError {
    CliError::Parse(format!(
        "{} at line {}: field '{field}': {msg}",
        path.display(),
        line_of(text, offset)
    ))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

impl SceneFile {
    /// Parses and validates a scene; `path` is used in messages only.
    pub fn parse(path: &Path, text: &str) -> Result<Self, CliError> {
        let scene: SceneFile = toml::from_str(text).map_err(|e| parse_error(path, text, e))?;
        scene.validate(path, text)?;
        Ok(scene)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Self::parse(path, &read_text(path)?)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Parse(format!("cannot serialise scene: {e}")))
    }

    fn validate(&self, path: &Path, text: &str) -> Result<(), CliError> {
        let at = self.intrinsics.span().start;
        self.intrinsics()
            .map_err(|e| invalid(path, text, at, "intrinsics", e))?;
        self.ground()
            .map_err(|e| invalid(path, text, self.pitch_deg.span().start, "pitch_deg", e))?;
        for (i, obj) in self.objects.iter().enumerate() {
            let at = obj.span().start;
            let o = obj.get_ref();
            let field = |f: &str| format!("objects[{i}].{f}");
            let [x0, y0, x1, y1] = o.bbox_2d;
            BoundingBox2D::new(x0, y0, x1, y1)
                .map_err(|e| invalid(path, text, at, &field("bbox_2d"), e))?;
            footprint(o).map_err(|e| invalid(path, text, at, &field("footprint_corners"), e))?;
            let mut seen = HashSet::new();
            for kp in &o.keypoints {
                if !seen.insert(kp.id) {
                    return Err(invalid(
                        path,
                        text,
                        at,
                        &field("keypoints"),
                        format!("duplicate keypoint id {}", kp.id),
                    ));
                }
                if !kp
                    .image_xy
                    .iter()
                    .chain(&kp.model_xyz)
                    .all(|v| v.is_finite())
                {
                    return Err(invalid(
                        path,
                        text,
                        at,
                        &field("keypoints"),
                        format!("keypoint {} has non-finite coordinates", kp.id),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> groundpose::Result<Intrinsics> {
        let k = self.intrinsics.get_ref();
        Intrinsics::new(k.fx, k.fy, k.cx, k.cy)
    }

    pub fn ground(&self) -> groundpose::Result<GroundFrame> {
        GroundFrame::new(self.pitch_deg.get_ref().to_radians())
    }

    /// Validated objects in file order.
    pub fn objects(&self) -> groundpose::Result<Vec<SceneObject>> {
        self.objects
            .iter()
            .map(|o| {
                let o = o.get_ref();
                let [x0, y0, x1, y1] = o.bbox_2d;
                let corrs = o
                    .keypoints
                    .iter()
                    .map(|k| {
                        Correspondence::new(
                            k.id,
                            Vector2::from(k.image_xy),
                            Vector3::from(k.model_xyz),
                        )
                    })
                    .collect();
                Ok(SceneObject {
                    name: o.name.clone(),
                    bbox: BoundingBox2D::new(x0, y0, x1, y1)?,
                    box3d: footprint(o)?,
                    corrs: CorrespondenceSet::new(corrs)?,
                })
            })
            .collect()
    }

    /// Shape-model path resolved against the scene file's directory.
    pub fn shape_model_path(&self, scene_path: &Path) -> Option<PathBuf> {
        self.shape_model.as_ref().map(|p| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                scene_path.parent().unwrap_or(Path::new(".")).join(p)
            }
        })
    }
}

fn footprint(o: &ObjectSpec) -> groundpose::Result<BoundingBox3D> {
    BoundingBox3D::new(
        o.footprint_corners.map(Vector2::from),
        Vector2::from(o.forward),
    )
}

impl ObjectSpec {
    pub fn from_parts(
        name: &str,
        bbox: &BoundingBox2D,
        box3d: &BoundingBox3D,
        corrs: &CorrespondenceSet,
    ) -> Self {
        Self {
            name: name.to_string(),
            bbox_2d: [bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max],
            footprint_corners: box3d.corners().map(|c| [c.x, c.y]),
            forward: [box3d.forward().x, box3d.forward().y],
            keypoints: corrs
                .iter()
                .map(|c| KeypointSpec {
                    id: c.id,
                    image_xy: [c.image.x, c.image.y],
                    model_xyz: [c.model.x, c.model.y, c.model.z],
                })
                .collect(),
        }
    }
}

/// Linear shape model; `basis[j][i]` is the offset of vertex `i` in mode `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeModelFile {
    pub class_name: String,
    pub modes: usize,
    pub mean: Vec<[f64; 3]>,
    #[serde(default)]
    pub basis: Vec<Vec<[f64; 3]>>,
}

impl ShapeModelFile {
    pub fn parse(path: &Path, text: &str) -> Result<Self, CliError> {
        let f: ShapeModelFile = toml::from_str(text).map_err(|e| parse_error(path, text, e))?;
        if f.basis.len() != f.modes {
            return Err(CliError::Parse(format!(
                "{}: field 'basis': {} modes declared but {} given",
                path.display(),
                f.modes,
                f.basis.len()
            )));
        }
        f.to_model()
            .map_err(|e| CliError::Parse(format!("{}: field 'basis': {e}", path.display())))?;
        Ok(f)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        Self::parse(path, &read_text(path)?)
    }

    pub fn to_model(&self) -> groundpose::Result<ShapeModel> {
        ShapeModel::new(
            self.mean.iter().map(|v| Vector3::from(*v)).collect(),
            self.basis
                .iter()
                .map(|b| b.iter().map(|v| Vector3::from(*v)).collect())
                .collect(),
        )
    }

    pub fn from_model(class_name: &str, m: &ShapeModel) -> Self {
        let arr = |v: &Vector3<f64>| [v.x, v.y, v.z];
        Self {
            class_name: class_name.to_string(),
            modes: m.modes(),
            mean: m.mean().iter().map(arr).collect(),
            basis: m
                .basis()
                .iter()
                .map(|b| b.iter().map(arr).collect())
                .collect(),
        }
    }
}

/// Ground truth written next to synthetic scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub objects: Vec<TruthObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthObject {
    pub name: String,
    /// Row-major rotation.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    #[serde(default)]
    pub lambda: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inlier_ids: Vec<usize>,
}

impl TruthFile {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = read_text(path)?;
        toml::from_str(&text).map_err(|e| parse_error(path, &text, e))
    }
}

impl TruthObject {
    pub fn pose(&self) -> groundpose::Result<Pose> {
        let r = Matrix3::from_row_slice(&self.rotation);
        Ok(Pose::new(
            Rotation::from_matrix(r)?,
            Vector3::from(self.translation),
        ))
    }

    pub fn coeffs(&self) -> ShapeCoeffs {
        ShapeCoeffs(self.lambda.clone())
    }
}

pub fn rotation_rows(r: &Rotation) -> [f64; 9] {
    let m = r.matrix();
    [
        m[(0, 0)],
        m[(0, 1)],
        m[(0, 2)],
        m[(1, 0)],
        m[(1, 1)],
        m[(1, 2)],
        m[(2, 0)],
        m[(2, 1)],
        m[(2, 2)],
    ]
}
