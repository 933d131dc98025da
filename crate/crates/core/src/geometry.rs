//! Pinhole cameras, rigid and similarity transforms, and the 6D rotation
//! parameterization.
//!
//! Extrinsics follow the camera-from-world convention: a world point `x`
//! maps to camera coordinates as `R * x + t`, with +z pointing forward.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Point3, Rotation3, Unit, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used for every SO(3) and collinearity check in this module.
pub const DEGENERACY_TOL: f64 = 1e-9;

/// Homogeneous depth at or below which a point is treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth ({0:e})")]
    NonPositiveDepth(f64),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("degenerate 6D rotation input: {0}")]
    DegenerateInput(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not in SO(3) (orthogonality error {orth:e}, det {det})")]
    NotARotation { orth: f64, det: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Maps a camera-frame point to pixels.
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Camera-frame point on the ray through pixel `(u, v)` at z-depth `depth`.
    pub fn back_project(&self, pixel: &Vector2<f64>, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        )
    }
}

/// Camera-from-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn from_axis_angle(axis_angle: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        let rotation = *Rotation3::new(*axis_angle).matrix();
        Self { rotation, translation }
    }

    /// Pose of a camera centered at `eye` looking at `target`, with `up`
    /// pointing towards the top of the image.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, up: &Vector3<f64>) -> Result<Self, GeometryError> {
        let forward = target - eye;
        if forward.norm() < DEGENERACY_TOL {
            return Err(GeometryError::DegenerateConfiguration("eye coincides with target".into()));
        }
        let z = forward.normalize();
        // image y points down
        let x = z.cross(up);
        if x.norm() < DEGENERACY_TOL {
            return Err(GeometryError::DegenerateConfiguration("viewing direction parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Ok(Self { rotation, translation: -(rotation * eye) })
    }

    /// Builds the camera-from-world pose from a camera-to-world rotation and
    /// the camera center in world coordinates.
    pub fn from_camera_to_world(rotation_c2w: &Matrix3<f64>, center: &Vector3<f64>) -> Result<Self, GeometryError> {
        let rotation = rotation_c2w.transpose();
        Self::new(rotation, -(rotation * center))
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// World point to camera frame.
    pub fn transform_point(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    /// Camera-frame point to world frame.
    pub fn inverse_transform_point(&self, camera: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (camera - self.translation)
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Row-major rotation entries, as stored in camera files.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [r[(0, 0)], r[(0, 1)], r[(0, 2)], r[(1, 0)], r[(1, 1)], r[(1, 2)], r[(2, 0)], r[(2, 1)], r[(2, 2)]]
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    let orth = (r.transpose() * r - Matrix3::identity()).norm();
    let det = r.determinant();
    if !orth.is_finite() || orth > DEGENERACY_TOL || (det - 1.0).abs() > DEGENERACY_TOL {
        return Err(GeometryError::NotARotation { orth, det });
    }
    Ok(())
}

/// 3x4 pinhole projection matrix `K [R | t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(pub Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    pub fn project(&self, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        project(self, x)
    }

    /// Depth-like homogeneous component `(P x̃)_3`.
    pub fn homogeneous_depth(&self, x: &Vector3<f64>) -> f64 {
        (self.0 * x.push(1.0)).z
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0 * s)
    }
}

pub fn project(p: &ProjectionMatrix, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    let h = p.0 * Vector4::new(x.x, x.y, x.z, 1.0);
    if h.z <= MIN_DEPTH {
        return Err(GeometryError::NonPositiveDepth(h.z));
    }
    Ok(Vector2::new(h.x / h.z, h.y / h.z))
}

pub fn compose_projection(k: &CameraIntrinsics, pose: &RigidPose) -> ProjectionMatrix {
    let mut rt = Matrix3x4::zeros();
    rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
    rt.set_column(3, &pose.translation);
    ProjectionMatrix(k.matrix() * rt)
}

/// A camera with identity, intrinsics, and world pose.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub id: String,
    pub intrinsics: CameraIntrinsics,
    pub pose: RigidPose,
}

impl CameraView {
    pub fn projection(&self) -> ProjectionMatrix {
        compose_projection(&self.intrinsics, &self.pose)
    }

    pub fn project(&self, world: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        self.intrinsics.project_camera_point(&self.pose.transform_point(world))
    }

    pub fn in_image(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0
            && pixel.y >= 0.0
            && pixel.x < self.intrinsics.width as f64
            && pixel.y < self.intrinsics.height as f64
    }
}

/// `x ↦ s R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self { scale: 1.0, rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        Self { scale: inv_s, rotation: rt, translation: -(rt * self.translation) * inv_s }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &SimilarityTransform) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn as_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(self.rotation * self.scale));
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub transform: SimilarityTransform,
    /// Sum of squared residuals `Σ ‖dst − (s R src + t)‖²`.
    pub residual: f64,
}

/// Least-squares similarity transform mapping `src` onto `dst` (Umeyama's
/// closed form, with the reflection fix).
pub fn umeyama_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Alignment, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "correspondence count mismatch: {} vs {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "need at least 3 correspondences, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let mu_src = src.iter().sum::<Vector3<f64>>() / n;
    let mu_dst = dst.iter().sum::<Vector3<f64>>() / n;

    let mut cov = Matrix3::zeros();
    let mut var_src = 0.0;
    let mut src_scatter = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let sc = s - mu_src;
        let dc = d - mu_dst;
        cov += dc * sc.transpose();
        src_scatter += sc * sc.transpose();
        var_src += sc.norm_squared();
    }
    cov /= n;
    var_src /= n;

    // collinear (or coincident) sources leave the rotation about the line free
    let sv = src_scatter.symmetric_eigenvalues();
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[0] <= 0.0 || sorted[1] <= DEGENERACY_TOL * sorted[0] {
        return Err(GeometryError::DegenerateConfiguration("source points are collinear".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let d = svd.singular_values;
    let mut sign = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        // flip the axis of the smallest singular value
        let (imin, _) = d.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
        sign[(imin, imin)] = -1.0;
    }
    let rotation = u * sign * v_t;
    let trace_ds = (0..3).map(|i| d[i] * sign[(i, i)]).sum::<f64>();
    let scale = trace_ds / var_src;
    let translation = mu_dst - scale * (rotation * mu_src);
    let transform = SimilarityTransform { scale, rotation, translation };
    let residual = src.iter().zip(dst).map(|(s, d)| (d - transform.apply(s)).norm_squared()).sum();
    Ok(Alignment { transform, residual })
}

/// Gram–Schmidt map from two stacked 3-vectors to a rotation matrix whose
/// first two columns span them.
pub fn rot6d_to_matrix(r: &[f64; 6]) -> Result<Matrix3<f64>, GeometryError> {
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let n1 = a1.norm();
    if !(n1 > DEGENERACY_TOL) {
        return Err(GeometryError::DegenerateInput("first column is (near) zero".into()));
    }
    let b1 = a1 / n1;
    let c = a2 - b1 * b1.dot(&a2);
    let nc = c.norm();
    if !(nc > DEGENERACY_TOL * a2.norm().max(1.0)) {
        return Err(GeometryError::DegenerateInput("columns are parallel".into()));
    }
    let b2 = c / nc;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Vector-Jacobian product of [`rot6d_to_matrix`]: given `∂L/∂R`, returns
/// `∂L/∂r`.
pub fn rot6d_backward(r: &[f64; 6], grad_r: &Matrix3<f64>) -> Result<[f64; 6], GeometryError> {
    let a1 = Vector3::new(r[0], r[1], r[2]);
    let a2 = Vector3::new(r[3], r[4], r[5]);
    let m = rot6d_to_matrix(r)?;
    let b1: Vector3<f64> = m.column(0).into();
    let b2: Vector3<f64> = m.column(1).into();
    let g1: Vector3<f64> = grad_r.column(0).into();
    let g2: Vector3<f64> = grad_r.column(1).into();
    let g3: Vector3<f64> = grad_r.column(2).into();

    // b3 = b1 × b2
    let mut gb1 = g1 + b2.cross(&g3);
    let gb2 = g2 + g3.cross(&b1);
    // b2 = c / |c|, c = a2 − (b1·a2) b1
    let proj = b1.dot(&a2);
    let c = a2 - b1 * proj;
    let nc = c.norm();
    let gc = (gb2 - b2 * b2.dot(&gb2)) / nc;
    let ga2 = gc - b1 * b1.dot(&gc);
    gb1 -= gc * proj + a2 * b1.dot(&gc);
    // b1 = a1 / |a1|
    let n1 = a1.norm();
    let ga1 = (gb1 - b1 * b1.dot(&gb1)) / n1;
    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

/// First two columns of `r`, i.e. the 6D representation.
pub fn matrix_to_rot6d(r: &Matrix3<f64>) -> [f64; 6] {
    [r[(0, 0)], r[(1, 0)], r[(2, 0)], r[(0, 1)], r[(1, 1)], r[(2, 1)]]
}

pub fn axis_angle_to_matrix(axis_angle: &Vector3<f64>) -> Matrix3<f64> {
    *Rotation3::new(*axis_angle).matrix()
}

pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    *Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix()
}

pub fn to_point(v: &Vector3<f64>) -> Point3<f64> {
    Point3::from(*v)
}
