use serde::{Deserialize, Serialize};

use crate::SimError;

/// Ground path of one subject, in world `(x, z)` meters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum PathSpec {
    Circle { center: [f64; 2], radius: f64 },
    /// Lissajous figure-eight spanning `±extent` around `center`.
    FigureEight { center: [f64; 2], extent: [f64; 2] },
    /// Straight walk that reflects off the arena bounds.
    LinearBounce { start: [f64; 2], heading_deg: f64 },
    Stationary { position: [f64; 2], heading_deg: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMotion {
    pub path: PathSpec,
    /// Walking speed, m/s.
    pub speed: f64,
    /// Head yaw oscillation amplitude, degrees.
    #[serde(default = "default_head_yaw")]
    pub head_yaw_deg: f64,
    #[serde(default = "default_head_period")]
    pub head_period_s: f64,
    /// Phase offset of the gait and head cycles, radians.
    #[serde(default)]
    pub phase: f64,
    #[serde(default)]
    pub shape: [f64; 10],
}

fn default_head_yaw() -> f64 {
    10.0
}

fn default_head_period() -> f64 {
    3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub n_subjects: usize,
    pub n_static_cams: usize,
    pub duration_s: f64,
    pub fps: f64,
    /// Half-extents of the walkable area along world x and z.
    pub arena: [f64; 2],
    /// Per-subject motion; subjects without an entry get a seeded random one.
    pub motion: Vec<SubjectMotion>,
    pub seed: u64,
    pub ego_camera: CameraSpec,
    pub static_camera: CameraSpec,
    /// Height of the static camera ring, meters.
    pub static_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_subjects: 3,
            n_static_cams: 8,
            duration_s: 10.0,
            fps: 20.0,
            arena: [4.0, 4.0],
            motion: Vec::new(),
            seed: 0,
            ego_camera: CameraSpec { focal: 320.0, width: 640, height: 480 },
            static_camera: CameraSpec { focal: 900.0, width: 1280, height: 720 },
            static_height: 2.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.n_subjects < 1 {
            return bad("n_subjects must be at least 1".into());
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if self.frame_count() == 0 {
            return bad("scene has no frames".into());
        }
        if !self.arena.iter().all(|&e| e > 0.0 && e.is_finite()) {
            return bad(format!("arena extents must be positive, got {:?}", self.arena));
        }
        if self.motion.len() > self.n_subjects {
            return bad(format!("{} motions given for {} subjects", self.motion.len(), self.n_subjects));
        }
        for (s, m) in self.motion.iter().enumerate() {
            if !(m.speed >= 0.0 && m.speed.is_finite()) {
                return bad(format!("subject {s}: speed must be nonnegative"));
            }
            if !(m.head_period_s > 0.0) {
                return bad(format!("subject {s}: head_period_s must be positive"));
            }
            let inside = |p: [f64; 2]| p[0].abs() <= self.arena[0] && p[1].abs() <= self.arena[1];
            let ok = match &m.path {
                PathSpec::Circle { center, radius } => {
                    *radius > 0.0 && inside([center[0].abs() + radius, center[1].abs() + radius])
                }
                PathSpec::FigureEight { center, extent } => {
                    extent.iter().all(|&e| e > 0.0) && inside([center[0].abs() + extent[0], center[1].abs() + extent[1]])
                }
                PathSpec::LinearBounce { start, .. } | PathSpec::Stationary { position: start, .. } => inside(*start),
            };
            if !ok {
                return bad(format!("subject {s}: path leaves the arena"));
            }
        }
        for (name, c) in [("ego_camera", &self.ego_camera), ("static_camera", &self.static_camera)] {
            if !(c.focal > 0.0) || c.width == 0 || c.height == 0 {
                return bad(format!("{name}: focal and image size must be positive"));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    /// Two subjects walking across the view of a stationary observer whose
    /// head sweeps left and right. The walkers pass each other at depths of
    /// roughly 6 m and 7.5 m, so one hides the other for several frames
    /// while their roots stay well apart.
    pub fn crossing(seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let speed = rng.random_range(0.45..0.6);
        let cross_at = rng.random_range(-0.5..0.5);
        let observer = SubjectMotion {
            path: PathSpec::Stationary { position: [0.0, -4.0], heading_deg: 0.0 },
            speed: 0.0,
            head_yaw_deg: rng.random_range(16.0..20.0),
            head_period_s: rng.random_range(1.0..1.3),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            shape: [0.0; 10],
        };
        // both walkers reach x = cross_at after the same time
        let t_cross = 2.0;
        let near = SubjectMotion {
            path: PathSpec::LinearBounce { start: [cross_at - speed * t_cross, 2.0], heading_deg: 90.0 },
            speed,
            head_yaw_deg: 5.0,
            head_period_s: 3.0,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            shape: [0.0; 10],
        };
        let far = SubjectMotion {
            path: PathSpec::LinearBounce { start: [cross_at + speed * t_cross, 3.5], heading_deg: -90.0 },
            speed,
            head_yaw_deg: 5.0,
            head_period_s: 3.0,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            shape: [0.0; 10],
        };
        Self {
            n_subjects: 3,
            n_static_cams: 4,
            duration_s: 4.0,
            arena: [5.0, 5.0],
            motion: vec![observer, near, far],
            seed,
            ..Default::default()
        }
    }
}

/// Corruption applied when rendering detections and keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub keypoint_sigma_px: f64,
    pub detection_drop_rate: f64,
    /// Probability of one false-positive box per camera and frame.
    pub false_positive_rate: f64,
    pub bbox_jitter_px: f64,
    /// Probability that a subject's keypoints in one camera and frame are
    /// displaced as a whole by at least 20 keypoint sigmas (20 px minimum).
    pub outlier_view_rate: f64,
    /// Hide joints behind other subjects. When off, every subject in front
    /// of a camera is seen as if nothing stood in the way.
    pub occlusion: bool,
    /// Per-axis noise on detection roots, meters.
    pub root_sigma_m: f64,
    /// Standard deviation of the per-camera relative depth scale error.
    pub depth_scale_error: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            keypoint_sigma_px: 1.0,
            detection_drop_rate: 0.02,
            false_positive_rate: 0.02,
            bbox_jitter_px: 2.0,
            outlier_view_rate: 0.05,
            occlusion: true,
            root_sigma_m: 0.1,
            depth_scale_error: 0.0,
        }
    }
}

impl NoiseConfig {
    /// No corruption at all; occlusion stays on because it is geometry.
    pub fn none() -> Self {
        Self {
            keypoint_sigma_px: 0.0,
            detection_drop_rate: 0.0,
            false_positive_rate: 0.0,
            bbox_jitter_px: 0.0,
            outlier_view_rate: 0.0,
            occlusion: true,
            root_sigma_m: 0.0,
            depth_scale_error: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for (name, r) in [
            ("detection_drop_rate", self.detection_drop_rate),
            ("false_positive_rate", self.false_positive_rate),
            ("outlier_view_rate", self.outlier_view_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(SimError::InvalidConfig(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        for (name, s) in [
            ("keypoint_sigma_px", self.keypoint_sigma_px),
            ("bbox_jitter_px", self.bbox_jitter_px),
            ("root_sigma_m", self.root_sigma_m),
            ("depth_scale_error", self.depth_scale_error),
        ] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(SimError::InvalidConfig(format!("{name} must be nonnegative, got {s}")));
            }
        }
        Ok(())
    }
}
