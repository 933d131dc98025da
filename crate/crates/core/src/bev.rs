//! Log-polar bird's-eye-view heatmaps for camera-relative roots, plus the
//! cylinder proposals used to derive image boxes from 3D positions.
//!
//! Rows index `log ρ` bins over `[ln rho_min, ln rho_max]`; columns index
//! the bearing `φ = atan2(x, z)` over the full circle, with column `j`
//! centered at `−π + j·2π/Q` (so straight ahead is column `Q/2`).

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::geometry::{CameraView, RigidPose, MIN_DEPTH};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BevError {
    #[error("horizontal range {rho} m outside [{min}, {max}]")]
    OutOfRange { rho: f64, min: f64, max: f64 },
    #[error("heatmap has no positive value")]
    EmptyHeatmap,
    #[error("invalid BEV config: {0}")]
    InvalidConfig(String),
    #[error("camera forward axis is parallel to gravity")]
    DegenerateOrientation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BevConfig {
    pub bins_rho: usize,
    pub bins_phi: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub gaussian_sigma: f64,
}

impl Default for BevConfig {
    fn default() -> Self {
        Self { bins_rho: 64, bins_phi: 64, rho_min: 0.3, rho_max: 10.0, gaussian_sigma: 1.0 }
    }
}

impl BevConfig {
    pub fn validate(&self) -> Result<(), BevError> {
        if self.bins_rho < 2 || self.bins_phi < 2 {
            return Err(BevError::InvalidConfig(format!("need at least 2x2 bins, got {}x{}", self.bins_rho, self.bins_phi)));
        }
        if !(self.rho_min > 0.0 && self.rho_max > self.rho_min && self.rho_max.is_finite()) {
            return Err(BevError::InvalidConfig(format!("need 0 < rho_min < rho_max, got {} and {}", self.rho_min, self.rho_max)));
        }
        if !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(BevError::InvalidConfig(format!("gaussian_sigma must be positive, got {}", self.gaussian_sigma)));
        }
        Ok(())
    }

    /// Width of one bin in `ln ρ`.
    pub fn log_rho_width(&self) -> f64 {
        (self.rho_max.ln() - self.rho_min.ln()) / self.bins_rho as f64
    }

    pub fn phi_width(&self) -> f64 {
        2.0 * PI / self.bins_phi as f64
    }

    pub fn rho_bin(&self, rho: f64) -> usize {
        let i = ((rho.ln() - self.rho_min.ln()) / self.log_rho_width()).floor();
        (i.max(0.0) as usize).min(self.bins_rho - 1)
    }

    pub fn phi_bin(&self, phi: f64) -> usize {
        let j = ((phi + PI) / self.phi_width()).round() as i64;
        j.rem_euclid(self.bins_phi as i64) as usize
    }

    pub fn rho_center(&self, i: usize) -> f64 {
        (self.rho_min.ln() + (i as f64 + 0.5) * self.log_rho_width()).exp()
    }

    pub fn phi_center(&self, j: usize) -> f64 {
        -PI + j as f64 * self.phi_width()
    }
}

/// Row-major `bins_rho x bins_phi` array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevHeatmap {
    pub bins_rho: usize,
    pub bins_phi: usize,
    pub values: Vec<f64>,
}

impl BevHeatmap {
    pub fn zeros(bins_rho: usize, bins_phi: usize) -> Self {
        Self { bins_rho, bins_phi, values: vec![0.0; bins_rho * bins_phi] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.bins_phi + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.bins_phi + j] = v;
    }

    /// Binary greyscale PGM, scaled so the maximum maps to 255.
    pub fn write_pgm(&self, mut w: impl Write) -> std::io::Result<()> {
        let max = self.values.iter().copied().fold(0.0, f64::max);
        write!(w, "P5\n{} {}\n255\n", self.bins_phi, self.bins_rho)?;
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| if max > 0.0 { (v / max * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
            .collect();
        w.write_all(&bytes)
    }
}

/// Decoded root position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevRoot {
    pub rho: f64,
    pub phi: f64,
    /// `(x, z)` on the ground plane of the camera frame.
    pub ground: Vector2<f64>,
}

fn circular_distance(a: usize, b: usize, n: usize) -> f64 {
    let d = a.abs_diff(b);
    d.min(n - d) as f64
}

pub fn encode_bev(root_cam: &Vector3<f64>, cfg: &BevConfig) -> Result<BevHeatmap, BevError> {
    cfg.validate()?;
    let rho = root_cam.x.hypot(root_cam.z);
    if !(rho >= cfg.rho_min && rho <= cfg.rho_max) {
        return Err(BevError::OutOfRange { rho, min: cfg.rho_min, max: cfg.rho_max });
    }
    let i0 = cfg.rho_bin(rho);
    let j0 = cfg.phi_bin(root_cam.x.atan2(root_cam.z));
    let denom = 2.0 * cfg.gaussian_sigma * cfg.gaussian_sigma;
    let mut h = BevHeatmap::zeros(cfg.bins_rho, cfg.bins_phi);
    for i in 0..cfg.bins_rho {
        let di = i as f64 - i0 as f64;
        for j in 0..cfg.bins_phi {
            let dj = circular_distance(j, j0, cfg.bins_phi);
            h.set(i, j, (-(di * di + dj * dj) / denom).exp());
        }
    }
    Ok(h)
}

pub fn decode_bev(h: &BevHeatmap, cfg: &BevConfig) -> Result<BevRoot, BevError> {
    cfg.validate()?;
    if h.bins_rho != cfg.bins_rho || h.bins_phi != cfg.bins_phi || h.values.len() != h.bins_rho * h.bins_phi {
        return Err(BevError::InvalidConfig(format!(
            "heatmap is {}x{} ({} values), config expects {}x{}",
            h.bins_rho,
            h.bins_phi,
            h.values.len(),
            cfg.bins_rho,
            cfg.bins_phi
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for (k, &v) in h.values.iter().enumerate() {
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    let (k, _) = best.ok_or(BevError::EmptyHeatmap)?;
    let (i, j) = (k / h.bins_phi, k % h.bins_phi);
    let rho = cfg.rho_center(i);
    let phi = cfg.phi_center(j);
    Ok(BevRoot { rho, phi, ground: Vector2::new(rho * phi.sin(), rho * phi.cos()) })
}

/// Expresses a camera-frame point in the gravity-aligned frame through the
/// camera center: y along gravity, z along the horizontal projection of the
/// camera's forward axis, x completing a right-handed frame.
pub fn gravity_aligned(root_cam: &Vector3<f64>, cam_pose: &RigidPose, gravity_world: &Vector3<f64>) -> Result<Vector3<f64>, BevError> {
    let down = gravity_world.try_normalize(1e-12).ok_or(BevError::DegenerateOrientation)?;
    let forward = cam_pose.rotation().transpose() * Vector3::z();
    let z = (forward - down * forward.dot(&down)).try_normalize(1e-9).ok_or(BevError::DegenerateOrientation)?;
    let x = down.cross(&z);
    let rel = cam_pose.rotation().transpose() * root_cam;
    Ok(Vector3::new(x.dot(&rel), down.dot(&rel), z.dot(&rel)))
}

/// Vertical cylinder approximating a subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cylinder3D {
    /// Center of the axis segment, world meters.
    pub center: Vector3<f64>,
    pub radius: f64,
    pub height: f64,
}

pub const CYLINDER_SAMPLES: usize = 16;

impl Cylinder3D {
    /// Points on the two cap rings.
    pub fn surface_samples(&self, k: usize) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(2 * k);
        for dy in [-0.5 * self.height, 0.5 * self.height] {
            for a in 0..k {
                let t = 2.0 * PI * a as f64 / k as f64;
                out.push(self.center + Vector3::new(self.radius * t.cos(), dy, self.radius * t.sin()));
            }
        }
        out
    }

    /// Whether the segment `a → b` passes through the cylinder (excluding the
    /// endpoints themselves).
    pub fn intersects_segment(&self, a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
        let (y0, y1) = (self.center.y - 0.5 * self.height, self.center.y + 0.5 * self.height);
        let d = b - a;
        let (ox, oz) = (a.x - self.center.x, a.z - self.center.z);
        let qa = d.x * d.x + d.z * d.z;
        let (mut lo, mut hi): (f64, f64) = (1e-9, 1.0 - 1e-9);
        if qa > 0.0 {
            let qb = 2.0 * (ox * d.x + oz * d.z);
            let qc = ox * ox + oz * oz - self.radius * self.radius;
            let disc = qb * qb - 4.0 * qa * qc;
            if disc < 0.0 {
                return false;
            }
            let s = disc.sqrt();
            lo = lo.max((-qb - s) / (2.0 * qa));
            hi = hi.min((-qb + s) / (2.0 * qa));
        } else if ox * ox + oz * oz > self.radius * self.radius {
            return false;
        }
        if d.y.abs() > 0.0 {
            let (ta, tb) = ((y0 - a.y) / d.y, (y1 - a.y) / d.y);
            lo = lo.max(ta.min(tb));
            hi = hi.min(ta.max(tb));
        } else if a.y < y0 || a.y > y1 {
            return false;
        }
        lo <= hi
    }
}

/// Box around the projections of `k` angular samples on both cap rings,
/// clipped to the image. `None` when nothing is in front of the camera or the
/// clipped box is empty.
pub fn cylinder_to_bbox_with(c: &Cylinder3D, cam: &CameraView, k: usize) -> Option<BBox> {
    let pixels: Vec<Vector2<f64>> = c
        .surface_samples(k)
        .iter()
        .map(|p| cam.pose.transform_point(p))
        .filter(|p| p.z > MIN_DEPTH)
        .filter_map(|p| cam.intrinsics.project_camera_point(&p).ok())
        .collect();
    BBox::enclosing(&pixels)?.clip(cam.intrinsics.width as f64, cam.intrinsics.height as f64)
}

pub fn cylinder_to_bbox(c: &Cylinder3D, cam: &CameraView) -> Option<BBox> {
    cylinder_to_bbox_with(c, cam, CYLINDER_SAMPLES)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub radius: f64,
    /// Added to the camera height to get the cylinder height.
    pub margin: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { radius: 0.4, margin: 0.15 }
    }
}

/// Standing cylinder under a head-mounted camera (world y up, ground y = 0).
pub fn head_pose_to_cylinder(ego_cam_pose: &RigidPose, cfg: &ProposalConfig) -> Cylinder3D {
    let c = ego_cam_pose.camera_center();
    let height = c.y.max(0.0) + cfg.margin;
    Cylinder3D { center: Vector3::new(c.x, 0.5 * height, c.z), radius: cfg.radius, height }
}
