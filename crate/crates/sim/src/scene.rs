use std::f64::consts::{PI, TAU};

use ego3d_core::bbox::BBox;
use ego3d_core::bev::{cylinder_to_bbox, Cylinder3D};
use ego3d_core::body_fit::{forward_kinematics_full, BodyParams, KinematicModel, HEAD_JOINT};
use ego3d_core::geometry::{matrix_to_rot6d, rotation_about, CameraIntrinsics, CameraView, RigidPose};
use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{CameraSpec, PathSpec, SceneConfig, SubjectMotion};
use crate::SimError;

/// Radius of the cylinder standing in for a subject.
pub const SUBJECT_RADIUS: f64 = 0.25;
/// Cylinder top above the head joint.
pub const HEAD_CLEARANCE: f64 = 0.15;
/// Ego camera offset above the head joint, in the head frame.
pub const EGO_MOUNT_HEIGHT: f64 = 0.10;
/// Walking subjects keep this far from the arena bounds.
const ARENA_MARGIN: f64 = 0.3;
/// Ground distance covered by one full gait cycle.
const STRIDE: f64 = 1.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFrame {
    pub params: BodyParams,
    /// All skeleton joints, world frame.
    pub joints: Vec<Vector3<f64>>,
    /// The 17 regressed keypoints, world frame.
    pub keypoints: Vec<Vector3<f64>>,
    /// Pelvis joint.
    pub root: Vector3<f64>,
    pub cylinder: Cylinder3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub motion: SubjectMotion,
    pub frames: Vec<SubjectFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraKind {
    /// Worn on the head of a subject.
    Ego { subject: usize },
    Static,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraStream {
    pub id: String,
    pub kind: CameraKind,
    pub intrinsics: CameraIntrinsics,
    pub poses: Vec<RigidPose>,
}

impl CameraStream {
    pub fn view(&self, frame: usize) -> CameraView {
        CameraView { id: self.id.clone(), intrinsics: self.intrinsics, pose: self.poses[frame] }
    }

    pub fn wearer(&self) -> Option<usize> {
        match self.kind {
            CameraKind::Ego { subject } => Some(subject),
            CameraKind::Static => None,
        }
    }
}

/// How one camera sees one subject in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectView {
    /// Exact projection of each keypoint; `None` behind the camera.
    pub keypoints: Vec<Option<Vector2<f64>>>,
    /// In front of the camera and inside the image.
    pub in_image: Vec<bool>,
    /// Line of sight blocked by another subject's cylinder.
    pub occluded: Vec<bool>,
    /// Subject cylinder projected and clipped to the image.
    pub bbox: Option<BBox>,
    /// Pelvis in the camera frame.
    pub root_cam: Vector3<f64>,
}

impl SubjectView {
    pub fn visible(&self, occlusion: bool) -> Vec<bool> {
        self.in_image.iter().zip(&self.occluded).map(|(&i, &o)| i && !(occlusion && o)).collect()
    }

    /// A subject is annotated (and detected) when its box is non-empty, its
    /// root is in front of the camera and at least half its keypoints are
    /// visible.
    pub fn detectable(&self, occlusion: bool) -> bool {
        let n = self.visible(occlusion).iter().filter(|&&v| v).count();
        self.bbox.is_some() && self.root_cam.z > 0.0 && 2 * n >= self.keypoints.len()
    }
}

/// Axis-aligned room enclosing everything; only used for rendered depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub half_extents: [f64; 2],
    pub ceiling: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub model: KinematicModel,
    pub subjects: Vec<Subject>,
    pub cameras: Vec<CameraStream>,
    /// `views[camera][frame][subject]`; `None` for a camera's own wearer.
    pub views: Vec<Vec<Vec<Option<SubjectView>>>>,
    pub room: Room,
}

impl Scene {
    pub fn frame_count(&self) -> usize {
        self.config.frame_count()
    }

    pub fn fps(&self) -> f64 {
        self.config.fps
    }

    pub fn camera_index(&self, id: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }

    /// Cylinders of every subject except `skip`, at `frame`.
    pub fn blockers(&self, frame: usize, skip: &[usize]) -> Vec<Cylinder3D> {
        (0..self.subjects.len()).filter(|s| !skip.contains(s)).map(|s| self.subjects[s].frames[frame].cylinder).collect()
    }
}

pub fn ego_camera_id(subject: usize) -> String {
    format!("ego_{subject:02}")
}

pub fn static_camera_id(k: usize) -> String {
    format!("static_{k:02}")
}

fn fold(x: f64, lo: f64, hi: f64) -> f64 {
    let w = hi - lo;
    let m = (x - lo).rem_euclid(2.0 * w);
    if m <= w { lo + m } else { hi - (m - w) }
}

/// Ground position at time `t`.
fn path_position(m: &SubjectMotion, t: f64, arena: [f64; 2]) -> Vector2<f64> {
    match &m.path {
        PathSpec::Circle { center, radius } => {
            let a = m.phase + m.speed * t / radius;
            Vector2::new(center[0] + radius * a.cos(), center[1] + radius * a.sin())
        }
        PathSpec::FigureEight { center, extent } => {
            let a = m.phase + figure_eight_rate(extent, m.speed) * t;
            Vector2::new(center[0] + extent[0] * a.sin(), center[1] + extent[1] * (2.0 * a).sin())
        }
        PathSpec::LinearBounce { start, heading_deg } => {
            let h = heading_deg.to_radians();
            let (hx, hz) = ((arena[0] - ARENA_MARGIN).max(0.0), (arena[1] - ARENA_MARGIN).max(0.0));
            let x = start[0] + m.speed * t * h.sin();
            let z = start[1] + m.speed * t * h.cos();
            Vector2::new(if hx > 0.0 { fold(x, -hx, hx) } else { 0.0 }, if hz > 0.0 { fold(z, -hz, hz) } else { 0.0 })
        }
        PathSpec::Stationary { position, .. } => Vector2::new(position[0], position[1]),
    }
}

/// Angular rate that makes the figure-eight's mean ground speed `speed`.
fn figure_eight_rate(extent: &[f64; 2], speed: f64) -> f64 {
    let n = 256;
    let mean_norm = (0..n)
        .map(|k| {
            let a = TAU * k as f64 / n as f64;
            (extent[0] * a.cos()).hypot(2.0 * extent[1] * (2.0 * a).cos())
        })
        .sum::<f64>()
        / n as f64;
    speed / mean_norm
}

/// Heading (radians about world y, 0 = facing +z) at time `t`.
fn path_heading(m: &SubjectMotion, t: f64, arena: [f64; 2]) -> f64 {
    match &m.path {
        PathSpec::Stationary { heading_deg, .. } => heading_deg.to_radians(),
        _ if m.speed == 0.0 => 0.0,
        _ => {
            let d = 1e-3;
            let v = path_position(m, t + d, arena) - path_position(m, t, arena);
            v.x.atan2(v.y)
        }
    }
}

fn random_motion(rng: &mut ChaCha8Rng, s: usize, arena: [f64; 2]) -> SubjectMotion {
    let (ax, az) = (arena[0] - ARENA_MARGIN, arena[1] - ARENA_MARGIN);
    let path = match s % 3 {
        0 => {
            let r_max = ax.min(az);
            let radius = rng.random_range(0.3 * r_max..0.7 * r_max);
            let cx = rng.random_range(-(ax - radius)..=(ax - radius));
            let cz = rng.random_range(-(az - radius)..=(az - radius));
            PathSpec::Circle { center: [cx, cz], radius }
        }
        1 => {
            let ex = rng.random_range(0.4 * ax..0.8 * ax);
            let ez = rng.random_range(0.3 * az..0.6 * az);
            let cx = rng.random_range(-(ax - ex)..=(ax - ex));
            let cz = rng.random_range(-(az - ez)..=(az - ez));
            PathSpec::FigureEight { center: [cx, cz], extent: [ex, ez] }
        }
        _ => PathSpec::LinearBounce {
            start: [rng.random_range(-ax..ax), rng.random_range(-az..az)],
            heading_deg: rng.random_range(-180.0..180.0),
        },
    };
    let mut shape = [0.0; 10];
    for v in shape.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    SubjectMotion {
        path,
        speed: rng.random_range(0.6..1.3),
        head_yaw_deg: rng.random_range(5.0..15.0),
        head_period_s: rng.random_range(2.0..4.0),
        phase: rng.random_range(0.0..TAU),
        shape,
    }
}

fn rx(a: f64) -> Matrix3<f64> {
    rotation_about(&Vector3::x(), a)
}

fn ry(a: f64) -> Matrix3<f64> {
    rotation_about(&Vector3::y(), a)
}

fn rz(a: f64) -> Matrix3<f64> {
    rotation_about(&Vector3::z(), a)
}

/// Walk-cycle body parameters at time `t`.
fn animate(m: &SubjectMotion, t: f64, arena: [f64; 2]) -> BodyParams {
    let mut p = BodyParams::rest();
    p.shape = m.shape;
    let g = path_position(m, t, arena);
    p.set_translation(&Vector3::new(g.x, 0.0, g.y));
    p.set_global_rotation(&ry(path_heading(m, t, arena)));

    let gait = m.phase + TAU * m.speed * t / STRIDE;
    let amp = (m.speed / 1.2).min(1.0);
    let (s, c) = gait.sin_cos();
    let mut set = |joint: usize, r: Matrix3<f64>| p.pose[joint - 1] = matrix_to_rot6d(&r);
    // legs swing forward for negative angles about x, knees only bend back
    set(1, rx(-0.45 * amp * s));
    set(2, rx(0.45 * amp * s));
    set(4, rx(0.6 * amp * c.max(0.0)));
    set(5, rx(0.6 * amp * (-c).max(0.0)));
    // arms hang down and swing against the legs
    set(16, rx(0.35 * amp * s) * rz(-1.25));
    set(17, rx(-0.35 * amp * s) * rz(1.25));
    set(18, ry(-0.3 - 0.1 * amp * s));
    set(19, ry(0.3 - 0.1 * amp * s));
    set(3, rx(0.05 * amp));
    let yaw = m.head_yaw_deg.to_radians() * (TAU * t / m.head_period_s + m.phase).sin();
    set(HEAD_JOINT, ry(yaw));
    p
}

fn intrinsics(c: &CameraSpec) -> Result<CameraIntrinsics, SimError> {
    Ok(CameraIntrinsics::new(c.focal, c.focal, c.width as f64 / 2.0, c.height as f64 / 2.0, c.width, c.height)?)
}

/// Camera-from-world pose of a head-mounted camera: body axes (x left,
/// y up, z forward) map to camera axes (x right, y down, z forward).
pub fn ego_pose(head: &Vector3<f64>, head_rotation: &Matrix3<f64>) -> Result<RigidPose, SimError> {
    let center = head + head_rotation * Vector3::new(0.0, EGO_MOUNT_HEIGHT, 0.0);
    let c2w = head_rotation * Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
    Ok(RigidPose::from_camera_to_world(&c2w, &center)?)
}

fn subject_view(cam: &CameraView, frame: &SubjectFrame, blockers: &[Cylinder3D]) -> SubjectView {
    let eye = cam.pose.camera_center();
    let keypoints: Vec<Option<Vector2<f64>>> = frame.keypoints.iter().map(|x| cam.project(x).ok()).collect();
    let in_image = keypoints.iter().map(|k| k.is_some_and(|uv| cam.in_image(&uv))).collect();
    let occluded = frame.keypoints.iter().map(|x| blockers.iter().any(|c| c.intersects_segment(&eye, x))).collect();
    SubjectView { keypoints, in_image, occluded, bbox: cylinder_to_bbox(&frame.cylinder, cam), root_cam: cam.pose.transform_point(&frame.root) }
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<Scene, SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let motions: Vec<SubjectMotion> = (0..cfg.n_subjects)
        .map(|s| {
            let random = random_motion(&mut rng, s, cfg.arena);
            cfg.motion.get(s).cloned().unwrap_or(random)
        })
        .collect();
    let model = KinematicModel::canonical();
    let n = cfg.frame_count();
    let dt = 1.0 / cfg.fps;

    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut ego_poses = Vec::with_capacity(cfg.n_subjects);
    for m in &motions {
        let mut frames = Vec::with_capacity(n);
        let mut poses = Vec::with_capacity(n);
        for f in 0..n {
            let params = animate(m, f as f64 * dt, cfg.arena);
            let fk = forward_kinematics_full(&model, &params)?;
            let root = fk.joints[0];
            let height = fk.joints[HEAD_JOINT].y + HEAD_CLEARANCE;
            let cylinder = Cylinder3D { center: Vector3::new(root.x, 0.5 * height, root.z), radius: SUBJECT_RADIUS, height };
            poses.push(ego_pose(&fk.joints[HEAD_JOINT], &fk.global_rotations[HEAD_JOINT])?);
            frames.push(SubjectFrame { params, root, keypoints: fk.keypoints, joints: fk.joints, cylinder });
        }
        subjects.push(Subject { motion: m.clone(), frames });
        ego_poses.push(poses);
    }

    let mut cameras = Vec::new();
    let ego_k = intrinsics(&cfg.ego_camera)?;
    for (s, poses) in ego_poses.into_iter().enumerate() {
        cameras.push(CameraStream { id: ego_camera_id(s), kind: CameraKind::Ego { subject: s }, intrinsics: ego_k, poses });
    }
    let ring = cfg.arena[0].max(cfg.arena[1]) + 2.0;
    let static_k = intrinsics(&cfg.static_camera)?;
    for k in 0..cfg.n_static_cams {
        let a = TAU * k as f64 / cfg.n_static_cams as f64 + PI / 8.0;
        let eye = Vector3::new(ring * a.cos(), cfg.static_height, ring * a.sin());
        let pose = RigidPose::look_at(&eye, &Vector3::new(0.0, 1.0, 0.0), &Vector3::y())?;
        cameras.push(CameraStream { id: static_camera_id(k), kind: CameraKind::Static, intrinsics: static_k, poses: vec![pose; n] });
    }

    let views = cameras
        .par_iter()
        .map(|cam| {
            (0..n)
                .map(|f| {
                    let view = cam.view(f);
                    (0..subjects.len())
                        .map(|s| {
                            if cam.wearer() == Some(s) {
                                return None;
                            }
                            let blockers: Vec<Cylinder3D> = (0..subjects.len())
                                .filter(|&o| o != s && Some(o) != cam.wearer())
                                .map(|o| subjects[o].frames[f].cylinder)
                                .collect();
                            Some(subject_view(&view, &subjects[s].frames[f], &blockers))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let room = Room { half_extents: [ring + 1.0, ring + 1.0], ceiling: cfg.static_height + 1.0 };
    Ok(Scene { config: cfg.clone(), model, subjects, cameras, views, room })
}
