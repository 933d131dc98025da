//! Tracking metrics (CLEAR MOT, IDF1, HOTA), pose errors and the Chamfer
//! distance between point sets.

use std::collections::BTreeMap;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{solve, solve_gated};
use crate::bbox::BBox;
use crate::geometry::{umeyama_align, GeometryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("sequence has no frames")]
    EmptySequence,
    #[error("point set is empty")]
    EmptySet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("duplicate id {id} in frame {frame}")]
    DuplicateId { frame: usize, id: u64 },
    #[error("IoU threshold must lie in (0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error(transparent)]
    Alignment(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub id: u64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotations {
    pub gt: Vec<Labeled>,
    pub pred: Vec<Labeled>,
}

fn validate(seq: &[FrameAnnotations]) -> Result<(), MetricsError> {
    if seq.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    for (f, fr) in seq.iter().enumerate() {
        for side in [&fr.gt, &fr.pred] {
            let mut seen = std::collections::BTreeSet::new();
            for l in side {
                if !seen.insert(l.id) {
                    return Err(MetricsError::DuplicateId { frame: f, id: l.id });
                }
            }
        }
    }
    Ok(())
}

fn check_threshold(t: f64) -> Result<(), MetricsError> {
    if t > 0.0 && t < 1.0 { Ok(()) } else { Err(MetricsError::InvalidThreshold(t)) }
}

fn iou_matrix(fr: &FrameAnnotations) -> DMatrix<f64> {
    DMatrix::from_fn(fr.gt.len(), fr.pred.len(), |i, j| fr.gt[i].bbox.iou(&fr.pred[j].bbox))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClearReport {
    pub mota: f64,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub gt: usize,
    pub matches: usize,
}

/// CLEAR MOT. Each frame first keeps the previous frame's correspondences
/// that still reach `iou_threshold`, then matches the rest with a maximum-
/// cardinality, minimum `1 − IoU` assignment. An identity switch is counted
/// when a ground-truth object is matched to a different prediction than the
/// last one it was matched to. `MOTA = 1 − (FP + FN + IDSW) / max(GT, 1)`.
pub fn clear_mot(seq: &[FrameAnnotations], iou_threshold: f64) -> Result<ClearReport, MetricsError> {
    validate(seq)?;
    check_threshold(iou_threshold)?;
    let mut prev_frame: BTreeMap<u64, u64> = BTreeMap::new();
    let mut last_ever: BTreeMap<u64, u64> = BTreeMap::new();
    let (mut fp, mut fn_, mut idsw, mut gt, mut matches) = (0, 0, 0, 0, 0);
    for fr in seq {
        let iou = iou_matrix(fr);
        let mut gt_used = vec![false; fr.gt.len()];
        let mut pred_used = vec![false; fr.pred.len()];
        let mut pairs = Vec::new();
        for (i, g) in fr.gt.iter().enumerate() {
            let Some(&pid) = prev_frame.get(&g.id) else { continue };
            if let Some(j) = fr.pred.iter().position(|p| p.id == pid) {
                if iou[(i, j)] >= iou_threshold {
                    gt_used[i] = true;
                    pred_used[j] = true;
                    pairs.push((i, j));
                }
            }
        }
        let rows: Vec<usize> = (0..fr.gt.len()).filter(|&i| !gt_used[i]).collect();
        let cols: Vec<usize> = (0..fr.pred.len()).filter(|&j| !pred_used[j]).collect();
        let cost = DMatrix::from_fn(rows.len(), cols.len(), |a, b| {
            let v = iou[(rows[a], cols[b])];
            if v >= iou_threshold { 1.0 - v } else { f64::INFINITY }
        });
        pairs.extend(solve_gated(&cost).into_iter().map(|(a, b)| (rows[a], cols[b])));

        prev_frame.clear();
        for &(i, j) in &pairs {
            let (g, p) = (fr.gt[i].id, fr.pred[j].id);
            if last_ever.get(&g).is_some_and(|&last| last != p) {
                idsw += 1;
            }
            last_ever.insert(g, p);
            prev_frame.insert(g, p);
        }
        gt += fr.gt.len();
        matches += pairs.len();
        fn_ += fr.gt.len() - pairs.len();
        fp += fr.pred.len() - pairs.len();
    }
    let mota = 1.0 - (fp + fn_ + idsw) as f64 / gt.max(1) as f64;
    Ok(ClearReport { mota, fp, fn_, idsw, gt, matches })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdReport {
    pub idf1: f64,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

/// Identity F1 under the trajectory-level matching that maximizes the number
/// of frames where a matched pair overlaps by at least `iou_threshold`.
pub fn idf1(seq: &[FrameAnnotations], iou_threshold: f64) -> Result<IdReport, MetricsError> {
    validate(seq)?;
    check_threshold(iou_threshold)?;
    let gt_ids: Vec<u64> = seq.iter().flat_map(|f| f.gt.iter().map(|l| l.id)).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let pred_ids: Vec<u64> = seq.iter().flat_map(|f| f.pred.iter().map(|l| l.id)).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let gi: BTreeMap<u64, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let pi: BTreeMap<u64, usize> = pred_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut overlap = DMatrix::<f64>::zeros(gt_ids.len(), pred_ids.len());
    let (mut total_gt, mut total_pred) = (0usize, 0usize);
    for fr in seq {
        total_gt += fr.gt.len();
        total_pred += fr.pred.len();
        for g in &fr.gt {
            for p in &fr.pred {
                if g.bbox.iou(&p.bbox) >= iou_threshold {
                    overlap[(gi[&g.id], pi[&p.id])] += 1.0;
                }
            }
        }
    }
    let idtp = solve(&(-&overlap)).iter().map(|&(i, j)| overlap[(i, j)]).sum::<f64>() as usize;
    let denom = total_gt + total_pred;
    let idf1 = if denom > 0 { 2.0 * idtp as f64 / denom as f64 } else { 0.0 };
    Ok(IdReport { idf1, idtp, idfp: total_pred - idtp, idfn: total_gt - idtp })
}

pub const HOTA_ALPHAS: usize = 19;

pub fn hota_alphas() -> [f64; HOTA_ALPHAS] {
    std::array::from_fn(|k| 0.05 * (k + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotaReport {
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub hota_per_alpha: Vec<f64>,
    pub deta_per_alpha: Vec<f64>,
    pub assa_per_alpha: Vec<f64>,
}

const HOTA_EPS: f64 = f64::EPSILON;

/// HOTA with IoU localization. Per-frame matching maximizes
/// `global alignment × IoU`; a pair counts at threshold `α` when its IoU is at
/// least `α`. The reported scores average over `α = 0.05, 0.10, …, 0.95`.
pub fn hota(seq: &[FrameAnnotations]) -> Result<HotaReport, MetricsError> {
    validate(seq)?;
    let gt_ids: Vec<u64> = seq.iter().flat_map(|f| f.gt.iter().map(|l| l.id)).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let pred_ids: Vec<u64> = seq.iter().flat_map(|f| f.pred.iter().map(|l| l.id)).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let gi: BTreeMap<u64, usize> = gt_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let pi: BTreeMap<u64, usize> = pred_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let (ng, np) = (gt_ids.len(), pred_ids.len());
    let alphas = hota_alphas();
    let total_gt: usize = seq.iter().map(|f| f.gt.len()).sum();
    let total_pred: usize = seq.iter().map(|f| f.pred.len()).sum();
    if total_gt == 0 || total_pred == 0 {
        let zeros = vec![0.0; HOTA_ALPHAS];
        return Ok(HotaReport {
            hota: 0.0,
            deta: 0.0,
            assa: 0.0,
            hota_per_alpha: zeros.clone(),
            deta_per_alpha: zeros.clone(),
            assa_per_alpha: zeros,
        });
    }

    let mut potential = DMatrix::<f64>::zeros(ng, np);
    let mut gt_count = vec![0.0; ng];
    let mut pred_count = vec![0.0; np];
    let sims: Vec<DMatrix<f64>> = seq.iter().map(iou_matrix).collect();
    for (fr, sim) in seq.iter().zip(&sims) {
        let row_sum: Vec<f64> = (0..sim.nrows()).map(|i| sim.row(i).sum()).collect();
        let col_sum: Vec<f64> = (0..sim.ncols()).map(|j| sim.column(j).sum()).collect();
        for (i, g) in fr.gt.iter().enumerate() {
            for (j, p) in fr.pred.iter().enumerate() {
                let denom = row_sum[i] + col_sum[j] - sim[(i, j)];
                if denom > HOTA_EPS {
                    potential[(gi[&g.id], pi[&p.id])] += sim[(i, j)] / denom;
                }
            }
        }
        for g in &fr.gt {
            gt_count[gi[&g.id]] += 1.0;
        }
        for p in &fr.pred {
            pred_count[pi[&p.id]] += 1.0;
        }
    }
    let alignment = DMatrix::from_fn(ng, np, |i, j| potential[(i, j)] / (gt_count[i] + pred_count[j] - potential[(i, j)]));

    let mut tp = [0.0; HOTA_ALPHAS];
    let mut match_counts = vec![DMatrix::<f64>::zeros(ng, np); HOTA_ALPHAS];
    for (fr, sim) in seq.iter().zip(&sims) {
        if fr.gt.is_empty() || fr.pred.is_empty() {
            continue;
        }
        let score = DMatrix::from_fn(fr.gt.len(), fr.pred.len(), |i, j| {
            -(alignment[(gi[&fr.gt[i].id], pi[&fr.pred[j].id])] * sim[(i, j)])
        });
        for (i, j) in solve(&score) {
            for (a, &alpha) in alphas.iter().enumerate() {
                if sim[(i, j)] >= alpha - HOTA_EPS {
                    tp[a] += 1.0;
                    match_counts[a][(gi[&fr.gt[i].id], pi[&fr.pred[j].id])] += 1.0;
                }
            }
        }
    }

    let mut hota_a = Vec::with_capacity(HOTA_ALPHAS);
    let mut deta_a = Vec::with_capacity(HOTA_ALPHAS);
    let mut assa_a = Vec::with_capacity(HOTA_ALPHAS);
    for a in 0..HOTA_ALPHAS {
        let fn_ = total_gt as f64 - tp[a];
        let fp = total_pred as f64 - tp[a];
        let deta = tp[a] / (tp[a] + fn_ + fp).max(1.0);
        let m = &match_counts[a];
        let mut ass_sum = 0.0;
        for i in 0..ng {
            for j in 0..np {
                let c = m[(i, j)];
                if c > 0.0 {
                    ass_sum += c * c / (gt_count[i] + pred_count[j] - c).max(1.0);
                }
            }
        }
        let assa = ass_sum / tp[a].max(1.0);
        deta_a.push(deta);
        assa_a.push(assa);
        hota_a.push((deta * assa).sqrt());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(HotaReport {
        hota: mean(&hota_a),
        deta: mean(&deta_a),
        assa: mean(&assa_a),
        hota_per_alpha: hota_a,
        deta_per_alpha: deta_a,
        assa_per_alpha: assa_a,
    })
}

/// Combined tracking report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotReport {
    pub mota: f64,
    pub idf1: f64,
    pub hota: f64,
    pub deta: f64,
    pub assa: f64,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub gt: usize,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

pub fn evaluate_tracking(seq: &[FrameAnnotations], iou_threshold: f64) -> Result<MotReport, MetricsError> {
    let c = clear_mot(seq, iou_threshold)?;
    let i = idf1(seq, iou_threshold)?;
    let h = hota(seq)?;
    Ok(MotReport {
        mota: c.mota,
        idf1: i.idf1,
        hota: h.hota,
        deta: h.deta,
        assa: h.assa,
        fp: c.fp,
        fn_: c.fn_,
        idsw: c.idsw,
        gt: c.gt,
        idtp: i.idtp,
        idfp: i.idfp,
        idfn: i.idfn,
    })
}

/// Errors in meters. `pve` is the mean error over every supplied point, so on
/// keypoints alone it coincides with `mpjpe` over the same set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
}

/// Pose errors over joints marked valid in `mask` (all joints when `None`).
/// The aligned variant maps `pred` onto `gt` with a similarity transform.
pub fn pose_metrics(pred: &[Vector3<f64>], gt: &[Vector3<f64>], mask: Option<&[bool]>) -> Result<PoseMetrics, MetricsError> {
    if pred.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
        return Err(MetricsError::ShapeMismatch(format!(
            "pred has {} joints, gt {}, mask {:?}",
            pred.len(),
            gt.len(),
            mask.map(|m| m.len())
        )));
    }
    let keep: Vec<usize> = (0..gt.len()).filter(|&j| mask.is_none_or(|m| m[j])).collect();
    if keep.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let p: Vec<Vector3<f64>> = keep.iter().map(|&j| pred[j]).collect();
    let g: Vec<Vector3<f64>> = keep.iter().map(|&j| gt[j]).collect();
    let mean_err = |a: &[Vector3<f64>]| a.iter().zip(&g).map(|(x, y)| (x - y).norm()).sum::<f64>() / g.len() as f64;
    let mpjpe = mean_err(&p);
    let t = umeyama_align(&p, &g)?.transform;
    let aligned: Vec<Vector3<f64>> = p.iter().map(|x| t.apply(x)).collect();
    let pve = pred.iter().zip(gt).map(|(x, y)| (x - y).norm()).sum::<f64>() / gt.len() as f64;
    Ok(PoseMetrics { mpjpe, pa_mpjpe: mean_err(&aligned), pve })
}

fn mean_nearest(from: &[Vector3<f64>], tree: &ImmutableKdTree<f64, 3>) -> f64 {
    from.iter().map(|p| tree.nearest_one::<SquaredEuclidean>(&[p.x, p.y, p.z]).distance.sqrt()).sum::<f64>() / from.len() as f64
}

/// `½ (mean_a min_b ‖a − b‖ + mean_b min_a ‖b − a‖)`.
pub fn chamfer_bidirectional(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let to_arr = |s: &[Vector3<f64>]| s.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>();
    let ta = ImmutableKdTree::new_from_slice(&to_arr(a));
    let tb = ImmutableKdTree::new_from_slice(&to_arr(b));
    Ok(0.5 * (mean_nearest(a, &tb) + mean_nearest(b, &ta)))
}
