//! Global refinement of a triangulated keypoint trajectory under limb-length
//! constancy, left/right symmetry, temporal smoothness, and anchoring to the
//! initial estimate.
//!
//! Every term is a (smoothed) Euclidean norm of a stacked difference vector,
//! summed over time:
//!
//! ```text
//! limb      Σ_{t<T} ‖λ_{t+1} − λ_t‖
//! symmetry  Σ_t ‖λ_t[left] − λ_t[right]‖
//! temporal  Σ_{t<T} ‖y_{t+1} − y_t‖
//! reg       Σ_t ‖m_t ⊙ (y_t − y_t⁰)‖
//! ```
//!
//! where `λ_t` are the limb lengths at frame `t` and `m_t` masks out joints
//! that were not observed in the initialization.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optim::{minimize, OptimConfig, OptimError, OptimReport};

/// Smoothing constant of every norm in the objective.
pub const NORM_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefineError {
    #[error("joint {joint} at frame {frame} is invalid")]
    InvalidJoint { frame: usize, joint: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("objective is not finite at the initialization ({0})")]
    NonFiniteLoss(f64),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
}

impl From<OptimError> for RefineError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::NonFiniteLoss(v) => RefineError::NonFiniteLoss(v),
        }
    }
}

/// `T × J` joint positions in meters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrajectory3D {
    joints: usize,
    values: Vec<Vector3<f64>>,
    valid: Vec<bool>,
}

impl PoseTrajectory3D {
    pub fn new(frames: Vec<Vec<Vector3<f64>>>, valid: Vec<Vec<bool>>) -> Result<Self, RefineError> {
        if frames.is_empty() {
            return Err(RefineError::ShapeMismatch("trajectory has no frames".into()));
        }
        let joints = frames[0].len();
        if frames.len() != valid.len() {
            return Err(RefineError::ShapeMismatch(format!("{} frames but {} mask rows", frames.len(), valid.len())));
        }
        for (t, (f, m)) in frames.iter().zip(&valid).enumerate() {
            if f.len() != joints || m.len() != joints {
                return Err(RefineError::ShapeMismatch(format!(
                    "frame {t} has {} joints and {} mask entries, expected {joints}",
                    f.len(),
                    m.len()
                )));
            }
            for (j, (p, ok)) in f.iter().zip(m).enumerate() {
                if *ok && !p.iter().all(|v| v.is_finite()) {
                    return Err(RefineError::InvalidJoint { frame: t, joint: j });
                }
            }
        }
        Ok(Self { joints, values: frames.concat(), valid: valid.concat() })
    }

    pub fn from_frames(frames: Vec<Vec<Vector3<f64>>>) -> Result<Self, RefineError> {
        let valid = frames.iter().map(|f| vec![true; f.len()]).collect();
        Self::new(frames, valid)
    }

    pub fn frame_count(&self) -> usize {
        self.values.len() / self.joints.max(1)
    }

    pub fn joint_count(&self) -> usize {
        self.joints
    }

    pub fn frame(&self, t: usize) -> &[Vector3<f64>] {
        &self.values[t * self.joints..(t + 1) * self.joints]
    }

    pub fn frame_valid(&self, t: usize) -> &[bool] {
        &self.valid[t * self.joints..(t + 1) * self.joints]
    }

    pub fn get(&self, t: usize, j: usize) -> &Vector3<f64> {
        &self.values[t * self.joints + j]
    }

    pub fn is_valid(&self, t: usize, j: usize) -> bool {
        self.valid[t * self.joints + j]
    }

    pub fn values(&self) -> &[Vector3<f64>] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn frames(&self) -> Vec<Vec<Vector3<f64>>> {
        self.values.chunks(self.joints.max(1)).map(<[_]>::to_vec).collect()
    }

    pub fn masks(&self) -> Vec<Vec<bool>> {
        self.valid.chunks(self.joints.max(1)).map(<[_]>::to_vec).collect()
    }

    /// Same mask, new values.
    pub fn with_values(&self, values: Vec<Vector3<f64>>) -> Result<Self, RefineError> {
        if values.len() != self.values.len() {
            return Err(RefineError::ShapeMismatch(format!("{} values, expected {}", values.len(), self.values.len())));
        }
        Ok(Self { joints: self.joints, values, valid: self.valid.clone() })
    }

    pub fn map_points(&self, f: impl FnMut(&Vector3<f64>) -> Vector3<f64>) -> Self {
        Self { joints: self.joints, values: self.values.iter().map(f).collect(), valid: self.valid.clone() }
    }

    /// Fills invalid joints by linear interpolation between the nearest valid
    /// frames (constant extrapolation at the ends). A joint never observed is
    /// placed at the centroid of the valid joints of its frame, or of the
    /// whole trajectory when the frame has none. The mask is preserved.
    pub fn interpolated(&self) -> Self {
        let t_count = self.frame_count();
        let mut values = self.values.clone();
        let valid_centroid = |items: &mut dyn Iterator<Item = (&Vector3<f64>, &bool)>| {
            let (sum, n) = items.filter(|(_, ok)| **ok).fold((Vector3::zeros(), 0usize), |(s, n), (p, _)| (s + p, n + 1));
            (n > 0).then(|| sum / n as f64)
        };
        let global = valid_centroid(&mut self.values.iter().zip(&self.valid)).unwrap_or_else(Vector3::zeros);
        for j in 0..self.joints {
            let observed: Vec<usize> = (0..t_count).filter(|&t| self.is_valid(t, j)).collect();
            for t in 0..t_count {
                if self.is_valid(t, j) {
                    continue;
                }
                let idx = t * self.joints + j;
                let prev = observed.iter().rev().find(|&&s| s < t);
                let next = observed.iter().find(|&&s| s > t);
                values[idx] = match (prev, next) {
                    (Some(&a), Some(&b)) => {
                        let w = (t - a) as f64 / (b - a) as f64;
                        self.get(a, j) * (1.0 - w) + self.get(b, j) * w
                    }
                    (Some(&a), None) => *self.get(a, j),
                    (None, Some(&b)) => *self.get(b, j),
                    (None, None) => valid_centroid(&mut self.frame(t).iter().zip(self.frame_valid(t))).unwrap_or(global),
                };
            }
        }
        Self { joints: self.joints, values, valid: self.valid.clone() }
    }
}

/// Limbs as `(start, end)` joint pairs plus left/right limb pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimbTopology {
    pub limbs: Vec<(usize, usize)>,
    pub left_right_pairs: Vec<(usize, usize)>,
}

impl LimbTopology {
    /// COCO body keypoints: 12 limbs, 6 mirrored pairs.
    pub fn coco17() -> Self {
        Self {
            limbs: vec![
                (5, 7),   // left upper arm
                (7, 9),   // left forearm
                (6, 8),   // right upper arm
                (8, 10),  // right forearm
                (11, 13), // left thigh
                (13, 15), // left shin
                (12, 14), // right thigh
                (14, 16), // right shin
                (5, 11),  // left torso side
                (6, 12),  // right torso side
                (1, 3),   // left eye-ear
                (2, 4),   // right eye-ear
            ],
            left_right_pairs: vec![(0, 2), (1, 3), (4, 6), (5, 7), (8, 9), (10, 11)],
        }
    }

    pub fn validate(&self, joints: usize) -> Result<(), RefineError> {
        for &(a, b) in &self.limbs {
            if a >= joints || b >= joints {
                return Err(RefineError::InvalidTopology(format!("limb ({a}, {b}) out of range for {joints} joints")));
            }
        }
        for &(l, r) in &self.left_right_pairs {
            if l >= self.limbs.len() || r >= self.limbs.len() || l == r {
                return Err(RefineError::InvalidTopology(format!("bad left/right pair ({l}, {r})")));
            }
        }
        Ok(())
    }
}

impl Default for LimbTopology {
    fn default() -> Self {
        Self::coco17()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineWeights {
    pub limb: f64,
    pub symmetry: f64,
    pub temporal: f64,
    pub regularization: f64,
}

impl Default for RefineWeights {
    fn default() -> Self {
        Self { limb: 1.0, symmetry: 1.0, temporal: 0.5, regularization: 0.1 }
    }
}

impl RefineWeights {
    pub fn zero() -> Self {
        Self { limb: 0.0, symmetry: 0.0, temporal: 0.0, regularization: 0.0 }
    }

    pub fn validate(&self) -> Result<(), RefineError> {
        let all = [self.limb, self.symmetry, self.temporal, self.regularization];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(RefineError::ShapeMismatch(format!("weights must be finite and nonnegative: {all:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub limb: f64,
    pub symmetry: f64,
    pub temporal: f64,
    pub regularization: f64,
}

/// `√(‖v‖² + ε²) − ε`: zero at zero, differentiable everywhere.
pub(crate) fn smooth_norm(sq: f64) -> (f64, f64) {
    let r = (sq + NORM_EPS * NORM_EPS).sqrt();
    (r - NORM_EPS, 1.0 / r)
}

pub fn limb_lengths(
    pose: &[Vector3<f64>],
    valid: Option<&[bool]>,
    topo: &LimbTopology,
) -> Result<Vec<f64>, RefineError> {
    topo.validate(pose.len())?;
    topo.limbs
        .iter()
        .map(|&(a, b)| {
            if let Some(m) = valid {
                for j in [a, b] {
                    if !m[j] {
                        return Err(RefineError::InvalidJoint { frame: 0, joint: j });
                    }
                }
            }
            Ok((pose[a] - pose[b]).norm())
        })
        .collect()
}

/// The three structural terms (limb, symmetry, temporal) over a flat `T × J`
/// array, accumulating `weight · ∂term/∂y` into `grad` when given.
pub(crate) fn structural_terms(
    values: &[Vector3<f64>],
    joints: usize,
    topo: &LimbTopology,
    weights: (f64, f64, f64),
    mut grad: Option<&mut [Vector3<f64>]>,
) -> (f64, f64, f64) {
    let (w_limb, w_symm, w_temp) = weights;
    let t_count = values.len() / joints;
    let n_limbs = topo.limbs.len();

    // limb vectors and lengths per frame
    let mut dirs = vec![Vector3::zeros(); t_count * n_limbs];
    let mut lengths = vec![0.0; t_count * n_limbs];
    for t in 0..t_count {
        for (l, &(a, b)) in topo.limbs.iter().enumerate() {
            let d = values[t * joints + a] - values[t * joints + b];
            lengths[t * n_limbs + l] = d.norm();
            dirs[t * n_limbs + l] = d;
        }
    }
    let mut d_len = vec![0.0; t_count * n_limbs];

    let mut limb = 0.0;
    for t in 0..t_count.saturating_sub(1) {
        let sq: f64 = (0..n_limbs).map(|l| (lengths[(t + 1) * n_limbs + l] - lengths[t * n_limbs + l]).powi(2)).sum();
        let (v, inv) = smooth_norm(sq);
        limb += v;
        for l in 0..n_limbs {
            let g = w_limb * (lengths[(t + 1) * n_limbs + l] - lengths[t * n_limbs + l]) * inv;
            d_len[(t + 1) * n_limbs + l] += g;
            d_len[t * n_limbs + l] -= g;
        }
    }

    let mut symmetry = 0.0;
    for t in 0..t_count {
        let sq: f64 = topo
            .left_right_pairs
            .iter()
            .map(|&(l, r)| (lengths[t * n_limbs + l] - lengths[t * n_limbs + r]).powi(2))
            .sum();
        let (v, inv) = smooth_norm(sq);
        symmetry += v;
        for &(l, r) in &topo.left_right_pairs {
            let g = w_symm * (lengths[t * n_limbs + l] - lengths[t * n_limbs + r]) * inv;
            d_len[t * n_limbs + l] += g;
            d_len[t * n_limbs + r] -= g;
        }
    }

    let mut temporal = 0.0;
    for t in 0..t_count.saturating_sub(1) {
        let (cur, next) = (&values[t * joints..(t + 1) * joints], &values[(t + 1) * joints..(t + 2) * joints]);
        let sq: f64 = cur.iter().zip(next).map(|(a, b)| (b - a).norm_squared()).sum();
        let (v, inv) = smooth_norm(sq);
        temporal += v;
        if let Some(g) = grad.as_deref_mut() {
            for j in 0..joints {
                let d = (next[j] - cur[j]) * (w_temp * inv);
                g[(t + 1) * joints + j] += d;
                g[t * joints + j] -= d;
            }
        }
    }

    if let Some(g) = grad {
        for t in 0..t_count {
            for (l, &(a, b)) in topo.limbs.iter().enumerate() {
                let len = lengths[t * n_limbs + l];
                let dl = d_len[t * n_limbs + l];
                if len > 0.0 && dl != 0.0 {
                    let d = dirs[t * n_limbs + l] * (dl / len);
                    g[t * joints + a] += d;
                    g[t * joints + b] -= d;
                }
            }
        }
    }
    (limb, symmetry, temporal)
}

fn regularization(
    values: &[Vector3<f64>],
    init: &[Vector3<f64>],
    mask: &[bool],
    joints: usize,
    weight: f64,
    grad: Option<&mut [Vector3<f64>]>,
) -> f64 {
    let t_count = values.len() / joints;
    let mut total = 0.0;
    let mut grad = grad;
    for t in 0..t_count {
        let range = t * joints..(t + 1) * joints;
        let sq: f64 = range.clone().filter(|&i| mask[i]).map(|i| (values[i] - init[i]).norm_squared()).sum();
        let (v, inv) = smooth_norm(sq);
        total += v;
        if let Some(g) = grad.as_deref_mut() {
            for i in range.filter(|&i| mask[i]) {
                g[i] += (values[i] - init[i]) * (weight * inv);
            }
        }
    }
    total
}

fn check_compatible(traj: &PoseTrajectory3D, init: &PoseTrajectory3D) -> Result<(), RefineError> {
    if traj.joints != init.joints || traj.values.len() != init.values.len() {
        return Err(RefineError::ShapeMismatch(format!(
            "trajectory is {}x{}, initialization is {}x{}",
            traj.frame_count(),
            traj.joints,
            init.frame_count(),
            init.joints
        )));
    }
    if traj.valid != init.valid {
        return Err(RefineError::ShapeMismatch("validity masks differ".into()));
    }
    Ok(())
}

/// Objective value and breakdown; `grad` (same length as the trajectory)
/// receives the gradient when given.
pub fn loss_and_gradient(
    values: &[Vector3<f64>],
    init: &PoseTrajectory3D,
    topo: &LimbTopology,
    w: &RefineWeights,
    mut grad: Option<&mut [Vector3<f64>]>,
) -> LossBreakdown {
    if let Some(g) = grad.as_deref_mut() {
        g.fill(Vector3::zeros());
    }
    let joints = init.joints;
    let (limb, symmetry, temporal) =
        structural_terms(values, joints, topo, (w.limb, w.symmetry, w.temporal), grad.as_deref_mut());
    let regularization = regularization(values, &init.values, &init.valid, joints, w.regularization, grad);
    LossBreakdown {
        total: w.limb * limb + w.symmetry * symmetry + w.temporal * temporal + w.regularization * regularization,
        limb,
        symmetry,
        temporal,
        regularization,
    }
}

pub fn loss_pose3d(
    traj: &PoseTrajectory3D,
    init: &PoseTrajectory3D,
    topo: &LimbTopology,
    w: &RefineWeights,
) -> Result<LossBreakdown, RefineError> {
    check_compatible(traj, init)?;
    topo.validate(traj.joints)?;
    w.validate()?;
    Ok(loss_and_gradient(&traj.values, init, topo, w, None))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutput {
    pub trajectory: PoseTrajectory3D,
    pub initial_loss: LossBreakdown,
    pub final_loss: LossBreakdown,
    pub report: OptimReport,
}

/// Minimizes the refinement objective starting from `traj_init`. Invalid
/// joints are filled by temporal interpolation and then optimized freely.
pub fn refine(
    traj_init: &PoseTrajectory3D,
    topo: &LimbTopology,
    w: &RefineWeights,
    cfg: &OptimConfig,
) -> Result<RefineOutput, RefineError> {
    topo.validate(traj_init.joints)?;
    w.validate()?;
    let init = traj_init.interpolated();
    let joints = init.joints;
    let mut x: Vec<f64> = init.values.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    let mut grad_pts = vec![Vector3::zeros(); init.values.len()];
    let mut pts = init.values.clone();
    let unpack = |x: &[f64], pts: &mut [Vector3<f64>]| {
        for (p, c) in pts.iter_mut().zip(x.chunks_exact(3)) {
            *p = Vector3::new(c[0], c[1], c[2]);
        }
    };
    let report = minimize(
        &mut x,
        |x, g| {
            unpack(x, &mut pts);
            let loss = loss_and_gradient(&pts, &init, topo, w, Some(&mut grad_pts));
            for (gc, gp) in g.chunks_exact_mut(3).zip(&grad_pts) {
                gc.copy_from_slice(gp.as_slice());
            }
            loss.total
        },
        cfg,
    )?;
    let mut values = init.values.clone();
    unpack(&x, &mut values);
    let trajectory = PoseTrajectory3D { joints, values, valid: init.valid.clone() };
    let initial_loss = loss_and_gradient(&init.values, &init, topo, w, None);
    let final_loss = loss_and_gradient(&trajectory.values, &init, topo, w, None);
    Ok(RefineOutput { trajectory, initial_loss, final_loss, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_traj(rng: &mut impl Rng, t: usize, j: usize) -> PoseTrajectory3D {
        let frames = (0..t)
            .map(|_| (0..j).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0), rng.random_range(-1.0..1.0))).collect())
            .collect();
        PoseTrajectory3D::from_frames(frames).unwrap()
    }

    #[test]
    fn unit_limb() {
        let topo = LimbTopology { limbs: vec![(0, 1)], left_right_pairs: vec![] };
        let l = limb_lengths(&[Vector3::zeros(), Vector3::x()], None, &topo).unwrap();
        assert_eq!(l, vec![1.0]);
    }

    #[test]
    fn limb_lengths_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_traj(&mut rng, 1, 17);
        let topo = LimbTopology::coco17();
        let a = limb_lengths(t.frame(0), None, &topo).unwrap();
        let scaled: Vec<_> = t.frame(0).iter().map(|p| p * 2.5).collect();
        let b = limb_lengths(&scaled, None, &topo).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - 2.5 * x).abs() < 1e-12);
        }
    }

    #[test]
    fn limb_lengths_rejects_invalid_joint() {
        let pose = vec![Vector3::zeros(); 17];
        let mut mask = vec![true; 17];
        mask[7] = false;
        assert!(matches!(
            limb_lengths(&pose, Some(&mask), &LimbTopology::coco17()),
            Err(RefineError::InvalidJoint { joint: 7, .. })
        ));
    }

    #[test]
    fn constant_trajectory_has_no_limb_or_temporal_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = random_traj(&mut rng, 1, 17).frame(0).to_vec();
        let traj = PoseTrajectory3D::from_frames(vec![frame; 6]).unwrap();
        let l = loss_pose3d(&traj, &traj, &LimbTopology::coco17(), &RefineWeights::default()).unwrap();
        assert_eq!(l.limb, 0.0);
        assert_eq!(l.temporal, 0.0);
        assert_eq!(l.regularization, 0.0);
    }

    #[test]
    fn mirror_symmetric_skeleton_has_no_symmetry_loss() {
        // mirror every left joint onto its right counterpart about x = 0
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pose = vec![Vector3::zeros(); 17];
        pose[0] = Vector3::new(0.0, 1.6, 0.1);
        for (l, r) in [(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)] {
            let p = Vector3::new(rng.random_range(0.05..0.5), rng.random_range(0.0..1.7), rng.random_range(-0.2..0.2));
            pose[l] = p;
            pose[r] = Vector3::new(-p.x, p.y, p.z);
        }
        let traj = PoseTrajectory3D::from_frames(vec![pose]).unwrap();
        let l = loss_pose3d(&traj, &traj, &LimbTopology::coco17(), &RefineWeights::default()).unwrap();
        assert_eq!(l.symmetry, 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_traj(&mut rng, 3, 17);
        let b = random_traj(&mut rng, 4, 17);
        assert!(matches!(
            loss_pose3d(&a, &b, &LimbTopology::coco17(), &RefineWeights::default()),
            Err(RefineError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_weights_return_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let traj = random_traj(&mut rng, 8, 17);
        let out = refine(&traj, &LimbTopology::coco17(), &RefineWeights::zero(), &OptimConfig::default()).unwrap();
        assert_eq!(out.trajectory, traj);
    }

    #[test]
    fn refine_never_increases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let traj = random_traj(&mut rng, 10, 17);
        let out = refine(&traj, &LimbTopology::coco17(), &RefineWeights::default(), &OptimConfig::default()).unwrap();
        assert!(out.final_loss.total <= out.initial_loss.total);
        assert!(out.report.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_initialization() {
        let mut frames = vec![vec![Vector3::zeros(); 17]; 3];
        frames[1][3] = Vector3::new(f64::INFINITY, 0.0, 0.0);
        // the constructor refuses non-finite valid entries
        assert!(PoseTrajectory3D::from_frames(frames.clone()).is_err());
        let far = PoseTrajectory3D::from_frames(vec![vec![Vector3::repeat(1e300); 17]; 3]).unwrap();
        let mut bad = far.clone();
        bad.values[5] = Vector3::repeat(-1e300);
        let r = refine(&bad, &LimbTopology::coco17(), &RefineWeights::default(), &OptimConfig::default());
        assert!(matches!(r, Err(RefineError::NonFiniteLoss(_))));
    }

    #[test]
    fn interpolation_fills_gaps() {
        let frames: Vec<Vec<Vector3<f64>>> = (0..5).map(|t| vec![Vector3::new(t as f64, 0.0, 0.0); 2]).collect();
        let mut mask = vec![vec![true; 2]; 5];
        mask[2][0] = false;
        mask[0][1] = false;
        let mut frames_bad = frames.clone();
        frames_bad[2][0] = Vector3::repeat(f64::NAN);
        frames_bad[0][1] = Vector3::repeat(f64::NAN);
        let traj = PoseTrajectory3D::new(frames_bad, mask).unwrap().interpolated();
        assert_eq!(*traj.get(2, 0), Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(*traj.get(0, 1), Vector3::new(1.0, 0.0, 0.0));
        assert!(!traj.is_valid(2, 0));
    }
}
