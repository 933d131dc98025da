//! Robust multi-view triangulation: linear DLT on stacked projection rows,
//! wrapped in RANSAC over two-view hypotheses.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ProjectionMatrix, DEGENERACY_TOL, MIN_DEPTH};

pub type CameraId = String;

/// Observations below this confidence never reach the linear system.
pub const MIN_CONFIDENCE: f64 = 0.1;

/// Default keypoint count (COCO body keypoints).
pub const DEFAULT_JOINTS: usize = 17;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TriangulationError {
    #[error("need at least {needed} views from distinct cameras, got {got}")]
    InsufficientViews { needed: usize, got: usize },
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("no hypothesis reached {min_inliers} inliers (best had {best})")]
    NoConsensus { min_inliers: usize, best: usize },
    #[error("unknown camera `{0}`")]
    UnknownCamera(CameraId),
    #[error("invalid RANSAC config: {0}")]
    InvalidConfig(String),
    #[error("camera `{camera}` has {got} keypoints, expected {expected}")]
    JointCountMismatch { camera: CameraId, expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation2D {
    pub camera_id: CameraId,
    pub point: Vector2<f64>,
    pub confidence: f64,
}

impl Observation2D {
    pub fn new(camera_id: impl Into<CameraId>, point: Vector2<f64>, confidence: f64) -> Self {
        Self { camera_id: camera_id.into(), point, confidence: confidence.clamp(0.0, 1.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangulationResult {
    pub point: Vector3<f64>,
    /// Inlier camera ids, sorted.
    pub inliers: Vec<CameraId>,
    pub mean_reprojection_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Pixels.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { max_iterations: 100, inlier_threshold: 10.0, min_inliers: 2, rng_seed: 0 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), TriangulationError> {
        if self.min_inliers < 2 {
            return Err(TriangulationError::InvalidConfig(format!("min_inliers must be >= 2, got {}", self.min_inliers)));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(TriangulationError::InvalidConfig(format!(
                "inlier_threshold must be positive, got {}",
                self.inlier_threshold
            )));
        }
        if self.max_iterations == 0 {
            return Err(TriangulationError::InvalidConfig("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

fn usable(obs: &[Observation2D]) -> Vec<&Observation2D> {
    obs.iter().filter(|o| o.confidence >= MIN_CONFIDENCE && o.point.iter().all(|v| v.is_finite())).collect()
}

fn lookup<'a>(
    cams: &'a BTreeMap<CameraId, ProjectionMatrix>,
    id: &CameraId,
) -> Result<&'a ProjectionMatrix, TriangulationError> {
    cams.get(id).ok_or_else(|| TriangulationError::UnknownCamera(id.clone()))
}

fn distinct_cameras(obs: &[&Observation2D]) -> usize {
    let mut ids: Vec<&str> = obs.iter().map(|o| o.camera_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.len()
}

/// Linear triangulation from every usable observation.
pub fn dlt_triangulate(
    obs: &[Observation2D],
    cams: &BTreeMap<CameraId, ProjectionMatrix>,
) -> Result<Vector3<f64>, TriangulationError> {
    dlt_refs(&usable(obs), cams)
}

fn dlt_refs(
    obs: &[&Observation2D],
    cams: &BTreeMap<CameraId, ProjectionMatrix>,
) -> Result<Vector3<f64>, TriangulationError> {
    let views = distinct_cameras(obs);
    if views < 2 {
        return Err(TriangulationError::InsufficientViews { needed: 2, got: views });
    }
    let mut a = DMatrix::<f64>::zeros(2 * obs.len(), 4);
    for (k, o) in obs.iter().enumerate() {
        let p = lookup(cams, &o.camera_id)?.matrix();
        let r3 = p.row(2);
        // x × (P X) = 0, two independent rows; each row is normalized so the
        // solution does not depend on the scale of P
        for (r, (coord, row)) in [(o.point.x, p.row(0)), (o.point.y, p.row(1))].into_iter().enumerate() {
            let eq = r3 * coord - row;
            let n = eq.norm();
            if !(n > 0.0) {
                return Err(TriangulationError::DegenerateGeometry(format!("zero row for camera `{}`", o.camera_id)));
            }
            a.row_mut(2 * k + r).copy_from(&(eq / n));
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("svd v_t");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = |k: usize| svd.singular_values[order[k]];
    if s(0) <= 0.0 || s(2) <= DEGENERACY_TOL * s(0) {
        return Err(TriangulationError::DegenerateGeometry(format!(
            "linear system is rank deficient (singular values {:.3e}, {:.3e})",
            s(0),
            s(2)
        )));
    }
    let x = v_t.row(order[3]);
    let w = x[3];
    if w.abs() < MIN_DEPTH {
        return Err(TriangulationError::DegenerateGeometry("point at infinity".into()));
    }
    Ok(Vector3::new(x[0] / w, x[1] / w, x[2] / w))
}

/// Pixel distance between the observation and the projected point; infinite
/// behind the camera.
pub fn reprojection_error(p: &ProjectionMatrix, x: &Vector3<f64>, observed: &Vector2<f64>) -> f64 {
    match p.project(x) {
        Ok(uv) => (uv - observed).norm(),
        Err(_) => f64::INFINITY,
    }
}

struct Hypothesis {
    inliers: Vec<usize>,
    mean_error: f64,
    sample: (CameraId, CameraId),
}

impl Hypothesis {
    fn better_than(&self, other: &Hypothesis) -> bool {
        if self.inliers.len() != other.inliers.len() {
            return self.inliers.len() > other.inliers.len();
        }
        if self.mean_error != other.mean_error {
            return self.mean_error < other.mean_error;
        }
        self.sample < other.sample
    }
}

/// RANSAC over two-view DLT hypotheses, followed by a DLT re-estimate on the
/// winning inlier set.
pub fn ransac_triangulate(
    obs: &[Observation2D],
    cams: &BTreeMap<CameraId, ProjectionMatrix>,
    cfg: &RansacConfig,
) -> Result<TriangulationResult, TriangulationError> {
    cfg.validate()?;
    let obs = usable(obs);
    for o in &obs {
        lookup(cams, &o.camera_id)?;
    }
    if obs.len() < cfg.min_inliers || distinct_cameras(&obs) < 2 {
        return Err(TriangulationError::InsufficientViews { needed: cfg.min_inliers.max(2), got: distinct_cameras(&obs) });
    }

    let pairs: Vec<(usize, usize)> = (0..obs.len())
        .flat_map(|i| (i + 1..obs.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| obs[i].camera_id != obs[j].camera_id)
        .collect();
    let samples: Vec<(usize, usize)> = if pairs.len() <= cfg.max_iterations {
        pairs
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        (0..cfg.max_iterations).map(|_| pairs[rng.random_range(0..pairs.len())]).collect()
    };

    let errors_for = |x: &Vector3<f64>| -> Vec<f64> {
        obs.iter().map(|o| reprojection_error(&cams[&o.camera_id], x, &o.point)).collect()
    };

    let mut best: Option<Hypothesis> = None;
    for (i, j) in samples {
        let Ok(x) = dlt_refs(&[obs[i], obs[j]], cams) else { continue };
        if cams[&obs[i].camera_id].homogeneous_depth(&x) <= MIN_DEPTH
            || cams[&obs[j].camera_id].homogeneous_depth(&x) <= MIN_DEPTH
        {
            continue;
        }
        let errors = errors_for(&x);
        let inliers: Vec<usize> = (0..obs.len()).filter(|&k| errors[k] <= cfg.inlier_threshold).collect();
        let mean_error = inliers.iter().map(|&k| errors[k]).sum::<f64>() / inliers.len().max(1) as f64;
        let (a, b) = (obs[i].camera_id.clone(), obs[j].camera_id.clone());
        let hyp = Hypothesis { inliers, mean_error, sample: if a <= b { (a, b) } else { (b, a) } };
        if best.as_ref().is_none_or(|b| hyp.better_than(b)) {
            best = Some(hyp);
        }
    }

    let best_count = best.as_ref().map_or(0, |h| h.inliers.len());
    let best = match best {
        Some(h) if h.inliers.len() >= cfg.min_inliers => h,
        _ => return Err(TriangulationError::NoConsensus { min_inliers: cfg.min_inliers, best: best_count }),
    };
    let inlier_obs: Vec<&Observation2D> = best.inliers.iter().map(|&k| obs[k]).collect();
    let point = dlt_refs(&inlier_obs, cams)?;
    let mean_reprojection_error = inlier_obs
        .iter()
        .map(|o| reprojection_error(&cams[&o.camera_id], &point, &o.point))
        .sum::<f64>()
        / inlier_obs.len() as f64;
    let mut inliers: Vec<CameraId> = inlier_obs.iter().map(|o| o.camera_id.clone()).collect();
    inliers.sort();
    inliers.dedup();
    Ok(TriangulationResult { point, inliers, mean_reprojection_error })
}

/// Per-joint triangulation of one subject at one timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTriangulation {
    pub joints: Vec<Result<TriangulationResult, TriangulationError>>,
}

impl PoseTriangulation {
    /// Joint positions; invalid joints are NaN.
    pub fn points(&self) -> Vec<Vector3<f64>> {
        self.joints
            .iter()
            .map(|j| j.as_ref().map_or(Vector3::repeat(f64::NAN), |r| r.point))
            .collect()
    }

    pub fn valid(&self) -> Vec<bool> {
        self.joints.iter().map(|j| j.is_ok()).collect()
    }
}

/// Keypoints of one subject as seen by each camera: `[u, v, confidence]`
/// per joint.
pub type CameraKeypoints = BTreeMap<CameraId, Vec<[f64; 3]>>;

/// Per-joint seed derived from the configured one; keeps joints independent.
fn joint_seed(seed: u64, joint: usize) -> u64 {
    seed ^ (joint as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn triangulate_pose(
    keypoints: &CameraKeypoints,
    cams: &BTreeMap<CameraId, ProjectionMatrix>,
    cfg: &RansacConfig,
) -> Result<PoseTriangulation, TriangulationError> {
    cfg.validate()?;
    let Some(joint_count) = keypoints.values().next().map(Vec::len) else {
        return Err(TriangulationError::InsufficientViews { needed: 2, got: 0 });
    };
    for (camera, kps) in keypoints {
        if kps.len() != joint_count {
            return Err(TriangulationError::JointCountMismatch {
                camera: camera.clone(),
                expected: joint_count,
                got: kps.len(),
            });
        }
        lookup(cams, camera)?;
    }
    let joints: Vec<_> = (0..joint_count)
        .map(|j| {
            let obs: Vec<Observation2D> = keypoints
                .iter()
                .map(|(cam, kps)| Observation2D::new(cam.clone(), Vector2::new(kps[j][0], kps[j][1]), kps[j][2]))
                .collect();
            let joint_cfg = RansacConfig { rng_seed: joint_seed(cfg.rng_seed, j), ..*cfg };
            ransac_triangulate(&obs, cams, &joint_cfg)
        })
        .collect();
    if !joints.iter().any(Result::is_ok) {
        let got = (0..joint_count)
            .map(|j| keypoints.values().filter(|k| k[j][2] >= MIN_CONFIDENCE).count())
            .max()
            .unwrap_or(0);
        return Err(TriangulationError::InsufficientViews { needed: cfg.min_inliers.max(2), got });
    }
    Ok(PoseTriangulation { joints })
}
