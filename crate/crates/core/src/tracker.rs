//! Tracking-by-detection with paired box and world-root Kalman filters.
//!
//! Each frame the tracker predicts every live track, scores track/detection
//! pairs with a blend of box overlap and world-frame root distance, solves
//! the assignment with the Hungarian method, and updates, spawns or retires
//! tracks.

use nalgebra::{DMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::solve_gated;
use crate::bbox::BBox;
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::kalman::{
    box_filter_new, box_predict, box_update, root_filter_new, root_model, BoxFilter, KalmanError, RootFilter, RootNoise,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrackerError {
    #[error("invalid tracker config: {0}")]
    InvalidConfig(String),
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error(transparent)]
    Kalman(#[from] KalmanError),
    #[error("bounding box covers no depth pixels")]
    EmptyBbox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionInput {
    pub bbox: BBox,
    pub score: f64,
    /// Root in the detecting camera's frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root_cam: Option<Vector3<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationConfig {
    /// Weight of the box term; `1.0` means box overlap only.
    pub alpha: f64,
    /// Root distance (m) at which the distance term saturates.
    pub dist_scale: f64,
    pub gate_iou: f64,
    /// Pairs below `gate_iou` are still allowed when their roots are within
    /// this distance (m) and the distance term is active.
    pub gate_dist: f64,
    pub max_age: u32,
    pub min_hits: u32,
    pub score_threshold: f64,
    /// Seconds per frame; box filters run in frame units.
    pub frame_interval: f64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            dist_scale: 2.0,
            gate_iou: 0.1,
            gate_dist: 3.0,
            max_age: 30,
            min_hits: 3,
            score_threshold: 0.5,
            frame_interval: 0.05,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let bad = |m: String| Err(TrackerError::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.dist_scale > 0.0) {
            return bad(format!("dist_scale must be positive, got {}", self.dist_scale));
        }
        if !(0.0..=1.0).contains(&self.gate_iou) {
            return bad(format!("gate_iou must lie in [0, 1], got {}", self.gate_iou));
        }
        if !(self.gate_dist >= 0.0) {
            return bad(format!("gate_dist must be nonnegative, got {}", self.gate_dist));
        }
        if !(self.frame_interval > 0.0 && self.frame_interval.is_finite()) {
            return bad(format!("frame_interval must be positive, got {}", self.frame_interval));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackStatus {
    Tentative,
    Confirmed,
    Dead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub kf2d: BoxFilter,
    pub kf3d: Option<RootFilter>,
    pub hits: u32,
    pub age: u32,
    pub time_since_update: u32,
    pub status: TrackStatus,
    predicted_bbox: BBox,
}

impl Track {
    pub fn predicted_bbox(&self) -> &BBox {
        &self.predicted_bbox
    }

    pub fn root(&self) -> Option<Vector3<f64>> {
        self.kf3d.as_ref().map(|k| k.x.fixed_rows::<3>(0).into_owned())
    }
}

/// One emitted track for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackOutput {
    pub id: u64,
    pub bbox: BBox,
    pub score: f64,
    pub root_world: Option<Vector3<f64>>,
}

/// Camera-frame point expressed in world coordinates.
pub fn to_world(root_cam: &Vector3<f64>, cam_pose: &RigidPose) -> Vector3<f64> {
    cam_pose.inverse_transform_point(root_cam)
}

/// Pair cost; `f64::INFINITY` for a gated (forbidden) pair.
///
/// Without roots on both sides the cost is `1 − IoU`, gated at `gate_iou`.
/// With roots it is `α(1 − IoU) + (1 − α)·min(d / dist_scale, 1)`, and a
/// pair below `gate_iou` survives only if `α < 1` and `d ≤ gate_dist`.
pub fn association_cost(
    cfg: &AssociationConfig,
    pred_bbox: &BBox,
    pred_root: Option<&Vector3<f64>>,
    det_bbox: &BBox,
    det_world_root: Option<&Vector3<f64>>,
) -> f64 {
    let iou = pred_bbox.iou(det_bbox);
    match (pred_root, det_world_root) {
        (Some(a), Some(b)) => {
            let d = (a - b).norm();
            if iou < cfg.gate_iou && (cfg.alpha >= 1.0 || d > cfg.gate_dist) {
                return f64::INFINITY;
            }
            cfg.alpha * (1.0 - iou) + (1.0 - cfg.alpha) * (d / cfg.dist_scale).min(1.0)
        }
        _ => {
            if iou < cfg.gate_iou {
                f64::INFINITY
            } else {
                1.0 - iou
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: AssociationConfig,
    root_noise: RootNoise,
    tracks: Vec<Track>,
    next_id: u64,
    frame_count: u64,
}

impl Tracker {
    pub fn new(cfg: AssociationConfig) -> Result<Self, TrackerError> {
        cfg.validate()?;
        Ok(Self { cfg, root_noise: RootNoise::default(), tracks: Vec::new(), next_id: 1, frame_count: 0 })
    }

    pub fn config(&self) -> &AssociationConfig {
        &self.cfg
    }

    /// Live (not dead) tracks.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    /// Advances by `dt` seconds and consumes this frame's detections.
    pub fn step(&mut self, detections: &[DetectionInput], cam_pose: &RigidPose, dt: f64) -> Result<Vec<TrackOutput>, TrackerError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(TrackerError::InvalidTimeStep(dt));
        }
        self.frame_count += 1;
        let dets: Vec<&DetectionInput> =
            detections.iter().filter(|d| d.score >= self.cfg.score_threshold && d.bbox.is_valid()).collect();
        let det_roots: Vec<Option<Vector3<f64>>> =
            dets.iter().map(|d| d.root_cam.as_ref().map(|r| to_world(r, cam_pose))).collect();

        let dt_frames = dt / self.cfg.frame_interval;
        let model3 = root_model(dt, &self.root_noise);
        for t in &mut self.tracks {
            t.predicted_bbox = box_predict(&mut t.kf2d, dt_frames);
            if let Some(k) = t.kf3d.as_mut() {
                k.predict(&model3.f, &model3.q);
            }
            t.age += 1;
            t.time_since_update += 1;
        }

        let cost = self.cost_matrix(&dets, &det_roots);
        let pairs = solve_gated(&cost);

        let mut det_matched = vec![false; dets.len()];
        let mut track_matched = vec![None; self.tracks.len()];
        for &(ti, di) in &pairs {
            det_matched[di] = true;
            track_matched[ti] = Some(di);
        }
        for (t, m) in self.tracks.iter_mut().zip(&track_matched) {
            let Some(di) = *m else { continue };
            box_update(&mut t.kf2d, &dets[di].bbox)?;
            match (&mut t.kf3d, det_roots[di]) {
                (Some(k), Some(r)) => k.update(&r, &model3.h, &model3.r)?,
                (None, Some(r)) => t.kf3d = Some(root_filter_new(&r, &self.root_noise)),
                _ => {}
            }
            t.hits += 1;
            t.time_since_update = 0;
            if t.status == TrackStatus::Tentative && t.hits >= self.cfg.min_hits {
                t.status = TrackStatus::Confirmed;
            }
        }
        for (t, m) in self.tracks.iter_mut().zip(&track_matched) {
            if m.is_none() && (t.status == TrackStatus::Tentative || t.time_since_update > self.cfg.max_age) {
                t.status = TrackStatus::Dead;
            }
        }

        let mut out = Vec::new();
        for (t, m) in self.tracks.iter().zip(&track_matched) {
            let Some(di) = *m else { continue };
            if t.status == TrackStatus::Confirmed || self.frame_count <= self.cfg.min_hits as u64 {
                out.push(TrackOutput { id: t.id, bbox: dets[di].bbox, score: dets[di].score, root_world: t.root() });
            }
        }
        self.tracks.retain(|t| t.status != TrackStatus::Dead);

        for (di, d) in dets.iter().enumerate() {
            if det_matched[di] {
                continue;
            }
            // tracks reported during the start-up grace period are kept like confirmed ones
            let grace = self.frame_count <= self.cfg.min_hits as u64;
            let status = if self.cfg.min_hits <= 1 || grace { TrackStatus::Confirmed } else { TrackStatus::Tentative };
            let track = Track {
                id: self.next_id,
                kf2d: box_filter_new(&d.bbox),
                kf3d: det_roots[di].map(|r| root_filter_new(&r, &self.root_noise)),
                hits: 1,
                age: 0,
                time_since_update: 0,
                status,
                predicted_bbox: d.bbox,
            };
            self.next_id += 1;
            if status == TrackStatus::Confirmed {
                out.push(TrackOutput { id: track.id, bbox: d.bbox, score: d.score, root_world: track.root() });
            }
            self.tracks.push(track);
        }
        out.sort_by_key(|o| o.id);
        Ok(out)
    }

    /// Cost of every (live track, detection) pair for the current
    /// predictions.
    pub fn cost_matrix(&self, dets: &[&DetectionInput], det_roots: &[Option<Vector3<f64>>]) -> DMatrix<f64> {
        DMatrix::from_fn(self.tracks.len(), dets.len(), |i, j| {
            let t = &self.tracks[i];
            association_cost(&self.cfg, &t.predicted_bbox, t.root().as_ref(), &dets[j].bbox, det_roots[j].as_ref())
        })
    }
}

/// Runs one frame of `tracker`.
pub fn tracker_step(
    tracker: &mut Tracker,
    detections: &[DetectionInput],
    cam_pose: &RigidPose,
    dt: f64,
) -> Result<Vec<TrackOutput>, TrackerError> {
    tracker.step(detections, cam_pose, dt)
}

/// Row-major depth crop covering pixels `[x0, x0 + width) x [y0, y0 + height)`
/// of a full image. Non-finite or non-positive entries carry no depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub x0: u32,
    pub y0: u32,
    pub width: u32,
    pub height: u32,
    pub values: Vec<f64>,
}

impl DepthMap {
    pub fn constant(width: u32, height: u32, depth: f64) -> Self {
        Self { x0: 0, y0: 0, width, height, values: vec![depth; (width * height) as usize] }
    }

    /// Depth at full-image pixel `(u, v)`.
    pub fn get(&self, u: u32, v: u32) -> Option<f64> {
        if u < self.x0 || v < self.y0 || u >= self.x0 + self.width || v >= self.y0 + self.height {
            return None;
        }
        let d = self.values[((v - self.y0) * self.width + (u - self.x0)) as usize];
        (d.is_finite() && d > 0.0).then_some(d)
    }
}

/// Root from the mean depth over the pixels whose centers fall inside `bbox`,
/// multiplied by `depth_scale` and placed on the ray through the box center.
pub fn simple_baseline_root(
    bbox: &BBox,
    depth: &DepthMap,
    depth_scale: f64,
    intrinsics: &CameraIntrinsics,
) -> Result<Vector3<f64>, TrackerError> {
    let lo = |a: f64, min: u32| ((a - 0.5).ceil().max(min as f64)) as u32;
    let hi = |b: f64, max: u32| ((b - 0.5).ceil().min(max as f64).max(0.0)) as u32;
    let (u0, u1) = (lo(bbox.x1, depth.x0), hi(bbox.x2, depth.x0 + depth.width));
    let (v0, v1) = (lo(bbox.y1, depth.y0), hi(bbox.y2, depth.y0 + depth.height));
    let (mut sum, mut n) = (0.0, 0usize);
    for v in v0..v1 {
        for u in u0..u1 {
            if let Some(d) = depth.get(u, v) {
                sum += d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(TrackerError::EmptyBbox);
    }
    let z = sum / n as f64 * depth_scale;
    Ok(intrinsics.back_project(&Vector2::new(bbox.center().x, bbox.center().y), z))
}
