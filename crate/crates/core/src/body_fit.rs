//! Kinematic body model and three-stage fitting to 3D keypoint trajectories.
//!
//! The body is a 24-joint tree (pelvis root plus 23 articulated joints).
//! Every joint carries a local rotation in the 6D parameterization; bone
//! offsets are a rest skeleton plus a linear shape basis, and the 17 COCO
//! keypoints are a fixed affine combination of joint positions.
//!
//! Fitting minimizes
//!
//! ```text
//! w_data  Σ_t ‖m_t ⊙ (y_t − Φ(θ_t))‖   + w_pose Σ_t ‖θ_pose,t − θ_rest‖
//! + w_limb L_limb(Φ) + w_symm L_symm(Φ) + w_temp L_temporal(Φ)
//! + w_shape ½‖β‖²
//! ```
//!
//! over a sequence that shares one shape vector `β`. Gradients are exact
//! (reverse mode through the kinematic chain and the Gram–Schmidt map).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{axis_angle_to_matrix, matrix_to_rot6d, rot6d_backward, rot6d_to_matrix, umeyama_align, GeometryError};
use crate::optim::{minimize, OptimConfig, OptimError, OptimReport};
use crate::pose_refine::{smooth_norm, structural_terms, LimbTopology, PoseTrajectory3D};

pub const BODY_JOINTS: usize = 24;
pub const POSE_JOINTS: usize = 23;
pub const SHAPE_DIM: usize = 10;
pub const GLOBAL_DIM: usize = 9;
pub const REST_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Index of the head joint in the canonical skeleton.
pub const HEAD_JOINT: usize = 15;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BodyFitError {
    #[error("degenerate rotation: {0}")]
    DegenerateRotation(#[from] GeometryError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("objective is not finite at the initialization ({0})")]
    NonFiniteLoss(f64),
    #[error("invalid kinematic model: {0}")]
    InvalidModel(String),
}

impl From<OptimError> for BodyFitError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::NonFiniteLoss(v) => BodyFitError::NonFiniteLoss(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicModel {
    /// Parent of each joint; `-1` for the root. Parents precede children.
    pub parents: Vec<i32>,
    pub rest_offsets: Vec<Vector3<f64>>,
    /// `SHAPE_DIM` components, each a per-joint offset delta.
    pub shape_basis: Vec<Vec<Vector3<f64>>>,
    /// Rows map joint positions to keypoints.
    pub keypoint_regressor: Vec<Vec<f64>>,
}

impl KinematicModel {
    /// Canonical 24-joint skeleton (y up, facing +z, subject's left on +x)
    /// with a COCO-17 keypoint regressor.
    pub fn canonical() -> Self {
        let parents = vec![-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21];
        let v = Vector3::new;
        let rest_offsets = vec![
            v(0.0, 0.95, 0.0),     // 0 pelvis
            v(0.09, -0.08, 0.0),   // 1 left hip
            v(-0.09, -0.08, 0.0),  // 2 right hip
            v(0.0, 0.11, -0.01),   // 3 spine1
            v(0.01, -0.40, 0.0),   // 4 left knee
            v(-0.01, -0.40, 0.0),  // 5 right knee
            v(0.0, 0.13, 0.01),    // 6 spine2
            v(0.0, -0.40, -0.02),  // 7 left ankle
            v(0.0, -0.40, -0.02),  // 8 right ankle
            v(0.0, 0.06, 0.01),    // 9 spine3
            v(0.01, -0.06, 0.12),  // 10 left foot
            v(-0.01, -0.06, 0.12), // 11 right foot
            v(0.0, 0.21, -0.02),   // 12 neck
            v(0.07, 0.12, -0.01),  // 13 left collar
            v(-0.07, 0.12, -0.01), // 14 right collar
            v(0.0, 0.09, 0.05),    // 15 head
            v(0.11, 0.03, -0.01),  // 16 left shoulder
            v(-0.11, 0.03, -0.01), // 17 right shoulder
            v(0.26, 0.0, -0.02),   // 18 left elbow
            v(-0.26, 0.0, -0.02),  // 19 right elbow
            v(0.25, 0.0, 0.0),     // 20 left wrist
            v(-0.25, 0.0, 0.0),    // 21 right wrist
            v(0.08, 0.0, 0.0),     // 22 left hand
            v(-0.08, 0.0, 0.0),    // 23 right hand
        ];

        let scaled = |joints: &[usize], f: f64, x_only: bool| -> Vec<Vector3<f64>> {
            (0..BODY_JOINTS)
                .map(|j| {
                    if !joints.contains(&j) {
                        return Vector3::zeros();
                    }
                    let o = rest_offsets[j];
                    if x_only { Vector3::new(o.x * f, 0.0, 0.0) } else { o * f }
                })
                .collect()
        };
        let all: Vec<usize> = (0..BODY_JOINTS).collect();
        let mut ratio = scaled(&[4, 5], 0.05, false);
        for (j, d) in scaled(&[7, 8], -0.05, false).into_iter().enumerate() {
            ratio[j] += d;
        }
        let shape_basis = vec![
            scaled(&all, 0.05, false),            // stature
            scaled(&[4, 5, 7, 8], 0.05, false),   // leg length
            scaled(&[18, 19, 20, 21], 0.05, false), // arm length
            scaled(&[3, 6, 9, 12], 0.05, false),  // torso length
            scaled(&[13, 14, 16, 17], 0.1, true), // shoulder width
            scaled(&[1, 2], 0.1, true),           // hip width
            scaled(&[15], 0.1, false),            // head
            scaled(&[10, 11], 0.1, false),        // feet
            scaled(&[22, 23], 0.1, false),        // hands
            ratio,                                // thigh/shin ratio
        ];

        let mut keypoint_regressor = vec![vec![0.0; BODY_JOINTS]; 17];
        let set = |row: &mut Vec<f64>, entries: &[(usize, f64)]| {
            for &(j, w) in entries {
                row[j] += w;
            }
        };
        set(&mut keypoint_regressor[0], &[(15, 1.6), (12, -0.6)]); // nose
        set(&mut keypoint_regressor[1], &[(15, 1.7), (12, -0.7), (13, 0.2), (14, -0.2)]); // left eye
        set(&mut keypoint_regressor[2], &[(15, 1.7), (12, -0.7), (14, 0.2), (13, -0.2)]); // right eye
        set(&mut keypoint_regressor[3], &[(15, 1.0), (13, 0.4), (14, -0.4)]); // left ear
        set(&mut keypoint_regressor[4], &[(15, 1.0), (14, 0.4), (13, -0.4)]); // right ear
        for (k, j) in [(5, 16), (6, 17), (7, 18), (8, 19), (9, 20), (10, 21), (11, 1), (12, 2), (13, 4), (14, 5), (15, 7), (16, 8)] {
            keypoint_regressor[k][j] = 1.0;
        }

        Self { parents, rest_offsets, shape_basis, keypoint_regressor }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn keypoint_count(&self) -> usize {
        self.keypoint_regressor.len()
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        usize::try_from(self.parents[j]).ok()
    }

    pub fn validate(&self) -> Result<(), BodyFitError> {
        let n = self.parents.len();
        if n != BODY_JOINTS {
            return Err(BodyFitError::InvalidModel(format!("expected {BODY_JOINTS} joints, got {n}")));
        }
        if self.parents[0] != -1 {
            return Err(BodyFitError::InvalidModel("joint 0 must be the root".into()));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(BodyFitError::InvalidModel(format!("joint {j} has parent {p}; parents must precede children")));
            }
        }
        if self.rest_offsets.len() != n {
            return Err(BodyFitError::InvalidModel("rest_offsets length".into()));
        }
        if self.shape_basis.len() != SHAPE_DIM || self.shape_basis.iter().any(|c| c.len() != n) {
            return Err(BodyFitError::InvalidModel(format!("shape basis must be {SHAPE_DIM} x {n}")));
        }
        if self.keypoint_regressor.iter().any(|r| r.len() != n) {
            return Err(BodyFitError::InvalidModel("keypoint regressor rows must have one weight per joint".into()));
        }
        Ok(())
    }

    /// Bone offsets for a shape vector.
    pub fn offsets(&self, shape: &[f64; SHAPE_DIM]) -> Vec<Vector3<f64>> {
        let mut out = self.rest_offsets.clone();
        for (coef, comp) in shape.iter().zip(&self.shape_basis) {
            if *coef != 0.0 {
                for (o, d) in out.iter_mut().zip(comp) {
                    *o += d * *coef;
                }
            }
        }
        out
    }

    pub fn regress(&self, joints: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        self.keypoint_regressor
            .iter()
            .map(|row| row.iter().zip(joints).map(|(w, p)| p * *w).sum())
            .collect()
    }

    /// Keypoints of the rest pose with zero shape.
    pub fn rest_keypoints(&self) -> Vec<Vector3<f64>> {
        forward_kinematics(self, &BodyParams::rest()).expect("rest pose is valid")
    }

    /// Vertical extent of the rest keypoints.
    pub fn height(&self) -> f64 {
        let kp = self.rest_keypoints();
        let (lo, hi) = kp.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
        hi - lo
    }
}

impl Default for KinematicModel {
    fn default() -> Self {
        Self::canonical()
    }
}

/// Per-joint 6D rotations, shape coefficients, and root orientation (6D)
/// plus translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBodyParams")]
pub struct BodyParams {
    pub pose: Vec<[f64; 6]>,
    pub shape: [f64; SHAPE_DIM],
    /// `[r6d (6), translation (3)]`.
    pub global: [f64; GLOBAL_DIM],
}

#[derive(Deserialize)]
struct RawBodyParams {
    pose: Vec<[f64; 6]>,
    shape: [f64; SHAPE_DIM],
    global: Vec<f64>,
}

impl TryFrom<RawBodyParams> for BodyParams {
    type Error = String;

    fn try_from(raw: RawBodyParams) -> Result<Self, String> {
        if raw.pose.len() != POSE_JOINTS {
            return Err(format!("pose must have {POSE_JOINTS} rows, got {}", raw.pose.len()));
        }
        let global = match raw.global.len() {
            GLOBAL_DIM => std::array::from_fn(|i| raw.global[i]),
            6 => BodyParams::global_from_axis_angle(&std::array::from_fn(|i| raw.global[i])),
            n => return Err(format!("global must have 6 (axis-angle + translation) or 9 (6D + translation) entries, got {n}")),
        };
        Ok(BodyParams { pose: raw.pose, shape: raw.shape, global })
    }
}

impl BodyParams {
    pub fn rest() -> Self {
        let mut global = [0.0; GLOBAL_DIM];
        global[..6].copy_from_slice(&REST_6D);
        Self { pose: vec![REST_6D; POSE_JOINTS], shape: [0.0; SHAPE_DIM], global }
    }

    /// Converts the compact `[axis-angle (3), translation (3)]` form.
    pub fn global_from_axis_angle(g: &[f64; 6]) -> [f64; GLOBAL_DIM] {
        let r = axis_angle_to_matrix(&Vector3::new(g[0], g[1], g[2]));
        let mut out = [0.0; GLOBAL_DIM];
        out[..6].copy_from_slice(&matrix_to_rot6d(&r));
        out[6..].copy_from_slice(&g[3..]);
        out
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.global[6], self.global[7], self.global[8])
    }

    pub fn set_translation(&mut self, t: &Vector3<f64>) {
        self.global[6..].copy_from_slice(t.as_slice());
    }

    pub fn global_rotation(&self) -> Result<Matrix3<f64>, GeometryError> {
        rot6d_to_matrix(&self.root_6d())
    }

    pub fn set_global_rotation(&mut self, r: &Matrix3<f64>) {
        self.global[..6].copy_from_slice(&matrix_to_rot6d(r));
    }

    fn root_6d(&self) -> [f64; 6] {
        std::array::from_fn(|i| self.global[i])
    }

    /// Stacked distance of the pose block from the rest pose.
    pub fn pose_deviation(&self) -> f64 {
        self.pose.iter().flat_map(|r| r.iter().zip(&REST_6D).map(|(a, b)| (a - b).powi(2))).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.pose.iter().flatten().chain(&self.shape).chain(&self.global).all(|v| v.is_finite())
    }
}

/// Forward pass through the kinematic chain, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct FkState {
    pub joints: Vec<Vector3<f64>>,
    pub global_rotations: Vec<Matrix3<f64>>,
    pub keypoints: Vec<Vector3<f64>>,
}

fn local_6d(params: &BodyParams, j: usize) -> [f64; 6] {
    if j == 0 { params.root_6d() } else { params.pose[j - 1] }
}

pub fn forward_kinematics_full(model: &KinematicModel, params: &BodyParams) -> Result<FkState, BodyFitError> {
    if params.pose.len() != model.joint_count() - 1 {
        return Err(BodyFitError::ShapeMismatch(format!(
            "pose has {} rotations, model needs {}",
            params.pose.len(),
            model.joint_count() - 1
        )));
    }
    let offsets = model.offsets(&params.shape);
    let n = model.joint_count();
    let mut joints = vec![Vector3::zeros(); n];
    let mut global_rotations = vec![Matrix3::identity(); n];
    for j in 0..n {
        let local = rot6d_to_matrix(&local_6d(params, j))?;
        match model.parent(j) {
            None => {
                global_rotations[j] = local;
                joints[j] = local * offsets[j] + params.translation();
            }
            Some(p) => {
                global_rotations[j] = global_rotations[p] * local;
                joints[j] = joints[p] + global_rotations[p] * offsets[j];
            }
        }
    }
    let keypoints = model.regress(&joints);
    Ok(FkState { joints, global_rotations, keypoints })
}

/// Keypoints `Φ(θ)`.
pub fn forward_kinematics(model: &KinematicModel, params: &BodyParams) -> Result<Vec<Vector3<f64>>, BodyFitError> {
    Ok(forward_kinematics_full(model, params)?.keypoints)
}

/// Gradient with respect to every parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub pose: Vec<[f64; 6]>,
    pub shape: [f64; SHAPE_DIM],
    pub global: [f64; GLOBAL_DIM],
}

/// Pulls `∂L/∂keypoints` back to the parameters.
pub fn fk_backward(
    model: &KinematicModel,
    params: &BodyParams,
    state: &FkState,
    grad_keypoints: &[Vector3<f64>],
) -> Result<ParamGrad, BodyFitError> {
    let n = model.joint_count();
    let mut g_joint = vec![Vector3::zeros(); n];
    for (row, gk) in model.keypoint_regressor.iter().zip(grad_keypoints) {
        for (j, w) in row.iter().enumerate() {
            if *w != 0.0 {
                g_joint[j] += gk * *w;
            }
        }
    }
    // subtree sums of g and g pᵀ
    let mut sum_g = g_joint.clone();
    let mut sum_gp: Vec<Matrix3<f64>> = (0..n).map(|j| g_joint[j] * state.joints[j].transpose()).collect();
    for j in (1..n).rev() {
        let p = model.parent(j).expect("non-root");
        let (sg, sgp) = (sum_g[j], sum_gp[j]);
        sum_g[p] += sg;
        sum_gp[p] += sgp;
    }

    let t = params.translation();
    let mut grad = ParamGrad { pose: vec![[0.0; 6]; n - 1], shape: [0.0; SHAPE_DIM], global: [0.0; GLOBAL_DIM] };
    grad.global[6..].copy_from_slice(sum_g[0].as_slice());

    let mut g_offsets = vec![Vector3::zeros(); n];
    for j in 0..n {
        let (parent_rot, d_local) = match model.parent(j) {
            None => {
                let d = (sum_gp[0] - sum_g[0] * t.transpose()) * state.global_rotations[0];
                (Matrix3::identity(), d)
            }
            Some(p) => {
                let pj = state.joints[j];
                let b = (sum_gp[j] - g_joint[j] * pj.transpose()) - (sum_g[j] - g_joint[j]) * pj.transpose();
                (state.global_rotations[p], state.global_rotations[p].transpose() * b * state.global_rotations[j])
            }
        };
        let local_rot = parent_rot.transpose() * state.global_rotations[j];
        g_offsets[j] = if model.parent(j).is_none() {
            local_rot.transpose() * sum_g[0]
        } else {
            parent_rot.transpose() * sum_g[j]
        };
        let g6 = rot6d_backward(&local_6d(params, j), &d_local)?;
        if j == 0 {
            grad.global[..6].copy_from_slice(&g6);
        } else {
            grad.pose[j - 1] = g6;
        }
    }
    for (k, comp) in model.shape_basis.iter().enumerate() {
        grad.shape[k] = comp.iter().zip(&g_offsets).map(|(d, g)| d.dot(g)).sum();
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshFitWeights {
    pub data: f64,
    pub pose_prior: f64,
    pub limb: f64,
    pub symmetry: f64,
    pub temporal: f64,
    pub shape_prior: f64,
}

impl Default for MeshFitWeights {
    fn default() -> Self {
        Self { data: 1.0, pose_prior: 1e-3, limb: 0.1, symmetry: 0.1, temporal: 0.1, shape_prior: 1e-3 }
    }
}

impl MeshFitWeights {
    pub fn validate(&self) -> Result<(), BodyFitError> {
        let all = [self.data, self.pose_prior, self.limb, self.symmetry, self.temporal, self.shape_prior];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(BodyFitError::ShapeMismatch(format!("weights must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeshLossBreakdown {
    pub total: f64,
    pub data: f64,
    pub pose_prior: f64,
    pub limb: f64,
    pub symmetry: f64,
    pub temporal: f64,
    pub shape_prior: f64,
}

fn check_sequence(model: &KinematicModel, params: &[BodyParams], target: &PoseTrajectory3D) -> Result<(), BodyFitError> {
    if params.len() != target.frame_count() {
        return Err(BodyFitError::ShapeMismatch(format!(
            "{} parameter frames for {} target frames",
            params.len(),
            target.frame_count()
        )));
    }
    if target.joint_count() != model.keypoint_count() {
        return Err(BodyFitError::ShapeMismatch(format!(
            "target has {} joints, model regresses {}",
            target.joint_count(),
            model.keypoint_count()
        )));
    }
    if params.iter().any(|p| p.shape != params[0].shape) {
        return Err(BodyFitError::ShapeMismatch("all frames of a sequence must share one shape vector".into()));
    }
    Ok(())
}

/// Objective over a sequence, with per-frame gradients when requested. The
/// shape gradient of every frame is the full (shared) shape gradient.
pub fn loss_mesh_with_gradient(
    model: &KinematicModel,
    params: &[BodyParams],
    target: &PoseTrajectory3D,
    w: &MeshFitWeights,
    topo: &LimbTopology,
    want_grad: bool,
) -> Result<(MeshLossBreakdown, Vec<ParamGrad>), BodyFitError> {
    check_sequence(model, params, target)?;
    let k = model.keypoint_count();
    let states: Vec<FkState> = params.iter().map(|p| forward_kinematics_full(model, p)).collect::<Result<_, _>>()?;
    let flat: Vec<Vector3<f64>> = states.iter().flat_map(|s| s.keypoints.iter().copied()).collect();
    let mut g_kp = vec![Vector3::zeros(); flat.len()];

    let mut data = 0.0;
    for (t, state) in states.iter().enumerate() {
        let mask = target.frame_valid(t);
        let y = target.frame(t);
        let sq: f64 = (0..k).filter(|&j| mask[j]).map(|j| (y[j] - state.keypoints[j]).norm_squared()).sum();
        let (v, inv) = smooth_norm(sq);
        data += v;
        for j in (0..k).filter(|&j| mask[j]) {
            g_kp[t * k + j] += (state.keypoints[j] - y[j]) * (w.data * inv);
        }
    }
    let (limb, symmetry, temporal) = structural_terms(
        &flat,
        k,
        topo,
        (w.limb, w.symmetry, w.temporal),
        want_grad.then_some(g_kp.as_mut_slice()),
    );

    let mut pose_prior = 0.0;
    let mut pose_inv = Vec::with_capacity(params.len());
    for p in params {
        let sq: f64 = p.pose.iter().flat_map(|r| r.iter().zip(&REST_6D).map(|(a, b)| (a - b).powi(2))).sum();
        let (v, inv) = smooth_norm(sq);
        pose_prior += v;
        pose_inv.push(inv);
    }
    let shape = &params.first().map_or([0.0; SHAPE_DIM], |p| p.shape);
    let shape_prior = 0.5 * shape.iter().map(|b| b * b).sum::<f64>();

    let total = w.data * data
        + w.pose_prior * pose_prior
        + w.limb * limb
        + w.symmetry * symmetry
        + w.temporal * temporal
        + w.shape_prior * shape_prior;
    let breakdown = MeshLossBreakdown { total, data, pose_prior, limb, symmetry, temporal, shape_prior };
    if !want_grad {
        return Ok((breakdown, Vec::new()));
    }

    let mut grads = Vec::with_capacity(params.len());
    let mut shape_total = [0.0; SHAPE_DIM];
    for (t, (p, state)) in params.iter().zip(&states).enumerate() {
        let mut g = fk_backward(model, p, state, &g_kp[t * k..(t + 1) * k])?;
        for (gr, r) in g.pose.iter_mut().zip(&p.pose) {
            for i in 0..6 {
                gr[i] += w.pose_prior * pose_inv[t] * (r[i] - REST_6D[i]);
            }
        }
        for i in 0..SHAPE_DIM {
            shape_total[i] += g.shape[i];
        }
        grads.push(g);
    }
    for i in 0..SHAPE_DIM {
        shape_total[i] += w.shape_prior * shape[i];
    }
    for g in &mut grads {
        g.shape = shape_total;
    }
    Ok((breakdown, grads))
}

pub fn loss_mesh(
    model: &KinematicModel,
    params: &[BodyParams],
    target: &PoseTrajectory3D,
    w: &MeshFitWeights,
    topo: &LimbTopology,
) -> Result<MeshLossBreakdown, BodyFitError> {
    w.validate()?;
    Ok(loss_mesh_with_gradient(model, params, target, w, topo, false)?.0)
}

/// Rest pose placed on the valid target keypoints of each frame: rotated by
/// the best rigid fit when at least three keypoints are valid, then shifted
/// onto their centroid. Shape stays zero.
pub fn initial_params(model: &KinematicModel, target: &PoseTrajectory3D) -> Vec<BodyParams> {
    let rest = model.rest_keypoints();
    (0..target.frame_count())
        .map(|t| {
            let mask = target.frame_valid(t);
            let idx: Vec<usize> = (0..mask.len()).filter(|&j| mask[j]).collect();
            let mut p = BodyParams::rest();
            if idx.is_empty() {
                return p;
            }
            let src: Vec<Vector3<f64>> = idx.iter().map(|&j| rest[j]).collect();
            let dst: Vec<Vector3<f64>> = idx.iter().map(|&j| *target.get(t, j)).collect();
            if idx.len() >= 3 {
                if let Ok(a) = umeyama_align(&src, &dst) {
                    p.set_global_rotation(&a.transform.rotation);
                }
            }
            let Ok(posed) = forward_kinematics(model, &p) else { return BodyParams::rest() };
            let n = idx.len() as f64;
            let shift = idx.iter().map(|&j| target.get(t, j) - posed[j]).sum::<Vector3<f64>>() / n;
            p.set_translation(&shift);
            p
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Global,
    Shape,
    PoseAndGlobal,
}

fn pack(params: &[BodyParams], stage: Stage) -> Vec<f64> {
    match stage {
        Stage::Global => params.iter().flat_map(|p| p.global).collect(),
        Stage::Shape => params[0].shape.to_vec(),
        Stage::PoseAndGlobal => params.iter().flat_map(|p| p.pose.iter().flatten().copied().chain(p.global)).collect(),
    }
}

fn unpack(x: &[f64], params: &mut [BodyParams], stage: Stage) {
    match stage {
        Stage::Global => {
            for (p, c) in params.iter_mut().zip(x.chunks_exact(GLOBAL_DIM)) {
                p.global.copy_from_slice(c);
            }
        }
        Stage::Shape => {
            for p in params.iter_mut() {
                p.shape.copy_from_slice(x);
            }
        }
        Stage::PoseAndGlobal => {
            let per = POSE_JOINTS * 6 + GLOBAL_DIM;
            for (p, c) in params.iter_mut().zip(x.chunks_exact(per)) {
                for (r, chunk) in p.pose.iter_mut().zip(c[..POSE_JOINTS * 6].chunks_exact(6)) {
                    r.copy_from_slice(chunk);
                }
                p.global.copy_from_slice(&c[POSE_JOINTS * 6..]);
            }
        }
    }
}

fn pack_grad(grads: &[ParamGrad], stage: Stage, out: &mut [f64]) {
    let flat: Vec<f64> = match stage {
        Stage::Global => grads.iter().flat_map(|g| g.global).collect(),
        Stage::Shape => grads[0].shape.to_vec(),
        Stage::PoseAndGlobal => grads.iter().flat_map(|g| g.pose.iter().flatten().copied().chain(g.global)).collect(),
    };
    out.copy_from_slice(&flat);
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutput {
    pub params: Vec<BodyParams>,
    pub loss: MeshLossBreakdown,
    /// Total loss at the initialization and after each of the three stages.
    pub stage_losses: [f64; 4],
    /// Parameters after each stage.
    pub stage_params: Vec<Vec<BodyParams>>,
    pub reports: Vec<OptimReport>,
}

/// Stage 1 optimizes the root orientation and translation, stage 2 the shared
/// shape, stage 3 the articulated pose together with the root.
pub fn fit_three_stage(
    model: &KinematicModel,
    init: &[BodyParams],
    target: &PoseTrajectory3D,
    w: &MeshFitWeights,
    topo: &LimbTopology,
    cfg: &OptimConfig,
) -> Result<FitOutput, BodyFitError> {
    model.validate()?;
    w.validate()?;
    topo.validate(model.keypoint_count()).map_err(|e| BodyFitError::InvalidModel(e.to_string()))?;
    if init.iter().any(|p| !p.is_finite()) {
        return Err(BodyFitError::NonFiniteLoss(f64::NAN));
    }
    let mut params = init.to_vec();
    let initial = loss_mesh_with_gradient(model, &params, target, w, topo, false)?.0;
    if !initial.total.is_finite() {
        return Err(BodyFitError::NonFiniteLoss(initial.total));
    }
    let mut stage_losses = [initial.total, 0.0, 0.0, 0.0];
    let mut stage_params = Vec::with_capacity(3);
    let mut reports = Vec::with_capacity(3);

    for (i, stage) in [Stage::Global, Stage::Shape, Stage::PoseAndGlobal].into_iter().enumerate() {
        let mut x = pack(&params, stage);
        let mut scratch = params.clone();
        let report = minimize(
            &mut x,
            |x, g| {
                unpack(x, &mut scratch, stage);
                match loss_mesh_with_gradient(model, &scratch, target, w, topo, true) {
                    Ok((loss, grads)) => {
                        pack_grad(&grads, stage, g);
                        loss.total
                    }
                    Err(_) => {
                        g.fill(0.0);
                        f64::INFINITY
                    }
                }
            },
            cfg,
        )?;
        unpack(&x, &mut params, stage);
        stage_losses[i + 1] = report.final_value;
        stage_params.push(params.clone());
        reports.push(report);
    }
    let loss = loss_mesh_with_gradient(model, &params, target, w, topo, false)?.0;
    Ok(FitOutput { params, loss, stage_losses, stage_params, reports })
}
