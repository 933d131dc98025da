use std::collections::BTreeMap;

use ego3d_core::body_fit::BodyParams;
use ego3d_core::io::{
    write_mot, CameraRecord, CameraSequence, DetectionFile, DetectionFrame, KeypointFile, MotRow, PoseRecord, TrajectoryFile,
};
use ego3d_core::pose_refine::PoseTrajectory3D;
use serde::{Deserialize, Serialize};

use crate::config::{NoiseConfig, SceneConfig};
use crate::render::Rendering;
use crate::scene::{CameraKind, Scene};

pub const CAMERAS_FILE: &str = "cameras.json";
pub const SCENE_FILE: &str = "scene.json";

pub fn keypoints_file(subject: usize) -> String {
    format!("keypoints/subject_{subject:02}.json")
}

pub fn detections_file(camera: &str) -> String {
    format!("detections/{camera}.json")
}

pub fn gt_trajectory_file(subject: usize) -> String {
    format!("gt/trajectories/subject_{subject:02}.json")
}

pub fn gt_body_file(subject: usize) -> String {
    format!("gt/body/subject_{subject:02}.json")
}

pub fn gt_mot_file(camera: &str) -> String {
    format!("gt/mot/{camera}.txt")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSummary {
    pub id: String,
    #[serde(flatten)]
    pub kind: CameraKind,
}

/// Index of a written scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub config: SceneConfig,
    pub noise: NoiseConfig,
    pub render_seed: u64,
    pub frames: usize,
    pub fps: f64,
    pub subjects: usize,
    pub cameras: Vec<CameraSummary>,
}

pub fn camera_sequence(scene: &Scene) -> CameraSequence {
    let frames = (0..scene.frame_count()).map(|f| scene.cameras.iter().map(|c| CameraRecord::from(&c.view(f))).collect()).collect();
    CameraSequence { fps: scene.fps(), frames }
}

/// Ground-truth trajectory of the 17 keypoints of `subject`.
pub fn gt_trajectory(scene: &Scene, subject: usize) -> PoseTrajectory3D {
    let frames = scene.subjects[subject].frames.iter().map(|f| f.keypoints.clone()).collect();
    PoseTrajectory3D::from_frames(frames).expect("simulated keypoints are finite and rectangular")
}

/// Annotated subjects of camera `c`, MOT rows with id `subject + 1`.
pub fn gt_mot_rows(scene: &Scene, c: usize) -> Vec<MotRow> {
    let mut rows = Vec::new();
    for f in 0..scene.frame_count() {
        for (s, view) in scene.views[c][f].iter().enumerate() {
            let Some(view) = view else { continue };
            if view.detectable(true) {
                rows.push(MotRow {
                    frame: f + 1,
                    id: s as u64 + 1,
                    bbox: view.bbox.expect("detectable views have a box"),
                    score: 1.0,
                    root: Some(scene.subjects[s].frames[f].root),
                });
            }
        }
    }
    rows
}

pub fn keypoint_file(scene: &Scene, rendering: &Rendering, subject: usize) -> KeypointFile {
    let frames = (0..scene.frame_count())
        .map(|f| {
            (0..scene.cameras.len())
                .filter_map(|c| rendering.keypoints(c, f, subject).map(|d| (scene.cameras[c].id.clone(), d.keypoints.clone())))
                .collect::<BTreeMap<_, _>>()
        })
        .collect();
    KeypointFile { subject, frames }
}

pub fn detection_file(scene: &Scene, rendering: &Rendering, c: usize) -> DetectionFile {
    let cam = &scene.cameras[c];
    let frames = rendering.cameras[c]
        .frames
        .iter()
        .enumerate()
        .map(|(f, dets)| DetectionFrame {
            frame: f + 1,
            camera_pose: PoseRecord::from(&cam.poses[f]),
            detections: dets.iter().map(|d| d.input.clone()).collect(),
        })
        .collect();
    DetectionFile { camera: cam.id.clone(), intrinsics: cam.intrinsics, fps: scene.fps(), frames }
}

/// Every file of a scene as `(relative path, bytes)`, in a fixed order.
pub fn scene_artifacts(scene: &Scene, rendering: &Rendering) -> Result<Vec<(String, Vec<u8>)>, serde_json::Error> {
    let mut out = Vec::new();
    let summary = SceneSummary {
        config: scene.config.clone(),
        noise: rendering.noise,
        render_seed: rendering.seed,
        frames: scene.frame_count(),
        fps: scene.fps(),
        subjects: scene.subjects.len(),
        cameras: scene.cameras.iter().map(|c| CameraSummary { id: c.id.clone(), kind: c.kind }).collect(),
    };
    out.push((SCENE_FILE.to_string(), serde_json::to_vec_pretty(&summary)?));
    out.push((CAMERAS_FILE.to_string(), serde_json::to_vec(&camera_sequence(scene))?));
    for s in 0..scene.subjects.len() {
        out.push((keypoints_file(s), serde_json::to_vec(&keypoint_file(scene, rendering, s))?));
        out.push((gt_trajectory_file(s), serde_json::to_vec(&TrajectoryFile::from_trajectory(s, &gt_trajectory(scene, s)))?));
        let params: Vec<&BodyParams> = scene.subjects[s].frames.iter().map(|f| &f.params).collect();
        out.push((gt_body_file(s), serde_json::to_vec(&params)?));
    }
    for c in 0..scene.cameras.len() {
        let id = &scene.cameras[c].id;
        out.push((detections_file(id), serde_json::to_vec(&detection_file(scene, rendering, c))?));
        out.push((gt_mot_file(id), write_mot(&gt_mot_rows(scene, c)).into_bytes()));
    }
    Ok(out)
}
