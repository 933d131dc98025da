//! On-disk formats: camera, keypoint, trajectory, body-parameter and
//! detection JSON files, and MOT-style text rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::geometry::{CameraIntrinsics, CameraView, GeometryError, RigidPose};
use crate::pose_refine::{PoseTrajectory3D, RefineError};
use crate::tracker::{DetectionInput, TrackOutput};
use crate::triangulation::CameraId;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid camera: {0}")]
    Camera(#[from] GeometryError),
    #[error("invalid trajectory: {0}")]
    Trajectory(#[from] RefineError),
    #[error("line {line}: {message}")]
    Mot { line: usize, message: String },
}

/// Camera-from-world pose with a row-major rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&RigidPose> for PoseRecord {
    fn from(p: &RigidPose) -> Self {
        let r = p.rotation();
        Self {
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [p.translation().x, p.translation().y, p.translation().z],
        }
    }
}

impl TryFrom<&PoseRecord> for RigidPose {
    type Error = GeometryError;

    fn try_from(p: &PoseRecord) -> Result<Self, GeometryError> {
        let r = Matrix3::from_fn(|i, j| p.rotation[i][j]);
        RigidPose::new(r, Vector3::from(p.translation))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub id: CameraId,
    pub intrinsics: CameraIntrinsics,
    pub pose: PoseRecord,
}

impl From<&CameraView> for CameraRecord {
    fn from(c: &CameraView) -> Self {
        Self { id: c.id.clone(), intrinsics: c.intrinsics, pose: PoseRecord::from(&c.pose) }
    }
}

impl TryFrom<&CameraRecord> for CameraView {
    type Error = GeometryError;

    fn try_from(c: &CameraRecord) -> Result<Self, GeometryError> {
        c.intrinsics.validate()?;
        Ok(CameraView { id: c.id.clone(), intrinsics: c.intrinsics, pose: RigidPose::try_from(&c.pose)? })
    }
}

/// Every camera at every frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSequence {
    pub fps: f64,
    pub frames: Vec<Vec<CameraRecord>>,
}

impl CameraSequence {
    pub fn views(&self, frame: usize) -> Result<Vec<CameraView>, GeometryError> {
        self.frames[frame].iter().map(CameraView::try_from).collect()
    }
}

/// 2D keypoints of one subject: per frame, per camera, `[u, v, confidence]`
/// for each joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointFile {
    pub subject: usize,
    pub frames: Vec<BTreeMap<CameraId, Vec<[f64; 3]>>>,
}

/// 3D joint trajectory; `null` marks a missing joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub subject: usize,
    pub frames: Vec<Vec<Option<[f64; 3]>>>,
}

impl TrajectoryFile {
    pub fn from_trajectory(subject: usize, t: &PoseTrajectory3D) -> Self {
        let frames = (0..t.frame_count())
            .map(|f| {
                t.frame(f)
                    .iter()
                    .zip(t.frame_valid(f))
                    .map(|(p, &v)| v.then_some([p.x, p.y, p.z]))
                    .collect()
            })
            .collect();
        Self { subject, frames }
    }

    pub fn to_trajectory(&self) -> Result<PoseTrajectory3D, RefineError> {
        let points = self
            .frames
            .iter()
            .map(|f| f.iter().map(|p| p.map_or(Vector3::zeros(), Vector3::from)).collect())
            .collect();
        let valid = self.frames.iter().map(|f| f.iter().map(Option::is_some).collect()).collect();
        PoseTrajectory3D::new(points, valid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub frame: usize,
    pub camera_pose: PoseRecord,
    pub detections: Vec<DetectionInput>,
}

/// Per-frame detections of one camera stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub camera: CameraId,
    pub intrinsics: CameraIntrinsics,
    pub fps: f64,
    pub frames: Vec<DetectionFrame>,
}

/// One row of the MOT-style text format: 1-based frame, id, `x, y, w, h`,
/// score and world root (`-1` when unknown).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRow {
    pub frame: usize,
    pub id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub root: Option<Vector3<f64>>,
}

impl MotRow {
    pub fn from_output(frame: usize, o: &TrackOutput) -> Self {
        Self { frame, id: o.id, bbox: o.bbox, score: o.score, root: o.root_world }
    }
}

pub fn write_mot(rows: &[MotRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let (x, y, z) = r.root.map_or((-1.0, -1.0, -1.0), |p| (p.x, p.y, p.z));
        writeln!(
            s,
            "{},{},{:.3},{:.3},{:.3},{:.3},{:.4},{:.4},{:.4},{:.4}",
            r.frame,
            r.id,
            r.bbox.x1,
            r.bbox.y1,
            r.bbox.width(),
            r.bbox.height(),
            r.score,
            x,
            y,
            z
        )
        .expect("writing to a String");
    }
    s
}

pub fn parse_mot(text: &str) -> Result<Vec<MotRow>, IoError> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| IoError::Mot { line: n + 1, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 6 {
            return Err(err(format!("expected at least 6 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64, IoError> {
            fields[i].parse::<f64>().map_err(|e| err(format!("field {}: {e}", i + 1)))
        };
        let frame = num(0)?;
        let id = num(1)?;
        if frame < 0.0 || id < 0.0 || frame.fract() != 0.0 || id.fract() != 0.0 {
            return Err(err("frame and id must be nonnegative integers".into()));
        }
        let bbox = BBox::from_xywh(num(2)?, num(3)?, num(4)?, num(5)?);
        let score = if fields.len() > 6 { num(6)? } else { 1.0 };
        let root = if fields.len() >= 10 {
            let p = Vector3::new(num(7)?, num(8)?, num(9)?);
            (p != Vector3::repeat(-1.0)).then_some(p)
        } else {
            None
        };
        rows.push(MotRow { frame: frame as usize, id: id as u64, bbox, score, root });
    }
    Ok(rows)
}
