use ego3d_core::bbox::BBox;
use ego3d_core::bev::Cylinder3D;
use ego3d_core::tracker::{DepthMap, DetectionInput};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::NoiseConfig;
use crate::scene::{Room, Scene};
use crate::SimError;

/// One detection with its 2D pose: `[u, v, confidence]` per keypoint, empty
/// for false positives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Source subject; `None` for a false positive.
    pub subject: Option<usize>,
    pub input: DetectionInput,
    pub keypoints: Vec<[f64; 3]>,
    /// Whether the keypoints were displaced as an outlier view.
    pub outlier: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRendering {
    pub camera: String,
    /// Multiplier applied to every rendered depth of this camera.
    pub depth_scale: f64,
    pub frames: Vec<Vec<Detection>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rendering {
    pub noise: NoiseConfig,
    pub seed: u64,
    pub cameras: Vec<CameraRendering>,
}

impl Rendering {
    /// Keypoints of `subject` seen by camera `c` at `frame`, if detected.
    pub fn keypoints(&self, c: usize, frame: usize, subject: usize) -> Option<&Detection> {
        self.cameras[c].frames[frame].iter().find(|d| d.subject == Some(subject))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("sigma is finite and nonnegative").sample(rng)
}

fn jitter(b: &BBox, rng: &mut ChaCha8Rng, sigma: f64) -> BBox {
    if sigma == 0.0 {
        return *b;
    }
    let (x1, y1, x2, y2) = (b.x1 + gaussian(rng, sigma), b.y1 + gaussian(rng, sigma), b.x2 + gaussian(rng, sigma), b.y2 + gaussian(rng, sigma));
    let (x1, x2) = (x1.min(x2), x1.max(x2).max(x1.min(x2) + 1.0));
    let (y1, y2) = (y1.min(y2), y1.max(y2).max(y1.min(y2) + 1.0));
    BBox::new(x1, y1, x2, y2)
}

fn render_camera(scene: &Scene, c: usize, noise: &NoiseConfig, seed: u64) -> CameraRendering {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(c as u64);
    let cam = &scene.cameras[c];
    let depth_scale = (1.0 + gaussian(&mut rng, noise.depth_scale_error)).max(0.05);
    let (w, h) = (cam.intrinsics.width as f64, cam.intrinsics.height as f64);
    let outlier_px = 20.0 * noise.keypoint_sigma_px.max(1.0);
    let frames = (0..scene.frame_count())
        .map(|f| {
            let mut dets = Vec::new();
            for (s, view) in scene.views[c][f].iter().enumerate() {
                let Some(view) = view else { continue };
                if !view.detectable(noise.occlusion) {
                    continue;
                }
                if noise.detection_drop_rate > 0.0 && rng.random_bool(noise.detection_drop_rate) {
                    continue;
                }
                let visible = view.visible(noise.occlusion);
                let outlier = noise.outlier_view_rate > 0.0 && rng.random_bool(noise.outlier_view_rate);
                let shift = if outlier {
                    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    Vector2::new(a.cos(), a.sin()) * outlier_px * rng.random_range(1.0..2.0)
                } else {
                    Vector2::zeros()
                };
                let keypoints = view
                    .keypoints
                    .iter()
                    .zip(&visible)
                    .map(|(uv, &vis)| match uv {
                        Some(uv) if vis => {
                            let p = uv + shift + Vector2::new(gaussian(&mut rng, noise.keypoint_sigma_px), gaussian(&mut rng, noise.keypoint_sigma_px));
                            [p.x, p.y, 1.0]
                        }
                        _ => [0.0, 0.0, 0.0],
                    })
                    .collect();
                let bbox = jitter(&view.bbox.expect("detectable views have a box"), &mut rng, noise.bbox_jitter_px);
                let root = view.root_cam
                    + Vector3::new(gaussian(&mut rng, noise.root_sigma_m), gaussian(&mut rng, noise.root_sigma_m), gaussian(&mut rng, noise.root_sigma_m));
                let score = visible.iter().filter(|&&v| v).count() as f64 / visible.len() as f64;
                dets.push(Detection { subject: Some(s), input: DetectionInput { bbox, score, root_cam: Some(root) }, keypoints, outlier });
            }
            if noise.false_positive_rate > 0.0 && rng.random_bool(noise.false_positive_rate) {
                let bh = rng.random_range(60.0..(0.8 * h).max(61.0));
                let bw = 0.35 * bh;
                let x1 = rng.random_range(0.0..(w - bw).max(1.0));
                let y1 = rng.random_range(0.0..(h - bh).max(1.0));
                let bbox = BBox::new(x1, y1, x1 + bw, y1 + bh);
                let c = bbox.center();
                let root = cam.intrinsics.back_project(&Vector2::new(c.x, c.y), rng.random_range(2.0..8.0));
                let score = rng.random_range(0.5..0.9);
                dets.push(Detection { subject: None, input: DetectionInput { bbox, score, root_cam: Some(root) }, keypoints: Vec::new(), outlier: false });
            }
            dets
        })
        .collect();
    CameraRendering { camera: cam.id.clone(), depth_scale, frames }
}

/// Corrupts the scene's ground truth into per-camera detections and 2D
/// poses. Each camera draws from its own random stream, so the result does
/// not depend on how cameras are scheduled.
pub fn render_detections(scene: &Scene, noise: &NoiseConfig, seed: u64) -> Result<Rendering, SimError> {
    noise.validate()?;
    let cameras = (0..scene.cameras.len()).into_par_iter().map(|c| render_camera(scene, c, noise, seed)).collect();
    Ok(Rendering { noise: *noise, seed, cameras })
}

/// First positive hit of the ray `o + t d` with a closed vertical cylinder.
fn ray_cylinder(o: &Vector3<f64>, d: &Vector3<f64>, c: &Cylinder3D) -> Option<f64> {
    let (y0, y1) = (c.center.y - 0.5 * c.height, c.center.y + 0.5 * c.height);
    let mut best: Option<f64> = None;
    let mut keep = |t: f64| {
        if t > 1e-9 && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    let (ox, oz) = (o.x - c.center.x, o.z - c.center.z);
    let qa = d.x * d.x + d.z * d.z;
    if qa > 0.0 {
        let qb = 2.0 * (ox * d.x + oz * d.z);
        let qc = ox * ox + oz * oz - c.radius * c.radius;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 {
            for t in [(-qb - disc.sqrt()) / (2.0 * qa), (-qb + disc.sqrt()) / (2.0 * qa)] {
                let y = o.y + t * d.y;
                if y >= y0 && y <= y1 {
                    keep(t);
                }
            }
        }
    }
    if d.y != 0.0 {
        for y in [y0, y1] {
            let t = (y - o.y) / d.y;
            let (px, pz) = (ox + t * d.x, oz + t * d.z);
            if px * px + pz * pz <= c.radius * c.radius {
                keep(t);
            }
        }
    }
    best
}

/// Distance along the ray to the room's floor, walls or ceiling.
fn ray_room(o: &Vector3<f64>, d: &Vector3<f64>, room: &Room) -> f64 {
    let mut t = f64::INFINITY;
    if d.y < 0.0 {
        t = t.min(-o.y / d.y);
    }
    if d.y > 0.0 {
        t = t.min((room.ceiling - o.y) / d.y);
    }
    for (p, v, e) in [(o.x, d.x, room.half_extents[0]), (o.z, d.z, room.half_extents[1])] {
        if v > 0.0 {
            t = t.min((e - p) / v);
        } else if v < 0.0 {
            t = t.min((-e - p) / v);
        }
    }
    t
}

/// Depth crop of camera `c` at `frame` covering the pixels whose centers lie
/// in `bbox`, times the camera's depth scale. A pixel whose ray first meets a
/// subject cylinder carries that subject's root depth; other pixels carry the
/// depth of the room's floor, walls or ceiling.
pub fn render_depth_crop(scene: &Scene, rendering: &Rendering, c: usize, frame: usize, bbox: &BBox) -> Result<DepthMap, SimError> {
    let cam = scene.cameras[c].view(frame);
    let scale = rendering.cameras[c].depth_scale;
    let (w, h) = (cam.intrinsics.width as f64, cam.intrinsics.height as f64);
    let first = |a: f64, max: f64| (a - 0.5).ceil().clamp(0.0, max) as u32;
    let (u0, u1) = (first(bbox.x1, w), first(bbox.x2, w));
    let (v0, v1) = (first(bbox.y1, h), first(bbox.y2, h));
    if u1 <= u0 || v1 <= v0 {
        return Err(SimError::InvalidConfig(format!("box {bbox:?} covers no pixel of camera {}", cam.id)));
    }
    // each subject is drawn flat at its own root depth
    let subjects: Vec<(Cylinder3D, f64)> = (0..scene.subjects.len())
        .filter(|&s| Some(s) != scene.cameras[c].wearer())
        .map(|s| {
            let sf = &scene.subjects[s].frames[frame];
            (sf.cylinder, cam.pose.transform_point(&sf.root).z)
        })
        .collect();
    let o = cam.pose.camera_center();
    let r_t = cam.pose.rotation().transpose();
    let mut values = Vec::with_capacity(((u1 - u0) * (v1 - v0)) as usize);
    for v in v0..v1 {
        for u in u0..u1 {
            // ray with unit camera-frame z, so the hit distance is the depth
            let d = r_t * cam.intrinsics.back_project(&Vector2::new(u as f64, v as f64), 1.0);
            let hit = subjects
                .iter()
                .filter_map(|(cyl, z)| ray_cylinder(&o, &d, cyl).map(|t| (t, *z)))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            let depth = match hit {
                Some((t, z)) if t < ray_room(&o, &d, &scene.room) => z,
                _ => ray_room(&o, &d, &scene.room),
            };
            values.push(depth * scale);
        }
    }
    Ok(DepthMap { x0: u0, y0: v0, width: u1 - u0, height: v1 - v0, values })
}
