//! Exhaustive reference implementations of the tracking scores and the
//! Chamfer distance, shared by several test targets.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ego3d_core::bbox::BBox;
use ego3d_core::metrics::{FrameAnnotations, Labeled};
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Up to 5 frames, up to 3 ground-truth objects, noisy predictions with
/// shuffled identities and occasional false positives.
pub fn random_sequence(rng: &mut ChaCha8Rng) -> Vec<FrameAnnotations> {
    let frames = rng.random_range(1..=5);
    let objects = rng.random_range(1..=3u64);
    let starts: Vec<(f64, f64)> = (0..objects).map(|_| (rng.random_range(0.0..60.0), rng.random_range(0.0..60.0))).collect();
    let mut id_map: BTreeMap<u64, u64> = (1..=objects).map(|g| (g, g + 10)).collect();
    (0..frames)
        .map(|t| {
            if rng.random_bool(0.3) {
                // swap two prediction identities
                let a = rng.random_range(1..=objects);
                let b = rng.random_range(1..=objects);
                let (ia, ib) = (id_map[&a], id_map[&b]);
                id_map.insert(a, ib);
                id_map.insert(b, ia);
            }
            let mut gt = Vec::new();
            let mut pred = Vec::new();
            for g in 1..=objects {
                if !rng.random_bool(0.8) {
                    continue;
                }
                let (x, y) = starts[(g - 1) as usize];
                let b = BBox::new(x + 3.0 * t as f64, y, x + 3.0 * t as f64 + 20.0, y + 30.0);
                gt.push(Labeled { id: g, bbox: b });
                if rng.random_bool(0.85) {
                    let dx = rng.random_range(-8.0..8.0);
                    let dy = rng.random_range(-8.0..8.0);
                    pred.push(Labeled { id: id_map[&g], bbox: b.translated(dx, dy) });
                }
            }
            if rng.random_bool(0.25) {
                let x = rng.random_range(0.0..80.0);
                let y = rng.random_range(0.0..80.0);
                pred.push(Labeled { id: 20 + rng.random_range(0..2), bbox: BBox::new(x, y, x + 20.0, y + 30.0) });
            }
            FrameAnnotations { gt, pred }
        })
        .collect()
}

/// Every partial one-to-one matching of `n` rows into `m` columns.
pub fn all_matchings(n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    fn rec(i: usize, n: usize, m: usize, used: &mut Vec<bool>, cur: &mut Vec<(usize, usize)>, out: &mut Vec<Vec<(usize, usize)>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        rec(i + 1, n, m, used, cur, out);
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                cur.push((i, j));
                rec(i + 1, n, m, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(0, n, m, &mut vec![false; m], &mut Vec::new(), &mut out);
    out
}

pub fn oracle_clear(seq: &[FrameAnnotations], thr: f64) -> (usize, usize, usize, usize, f64) {
    let mut prev: BTreeMap<u64, u64> = BTreeMap::new();
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    let (mut fp, mut fn_, mut sw, mut gt) = (0, 0, 0, 0);
    for fr in seq {
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (i, g) in fr.gt.iter().enumerate() {
            for (j, p) in fr.pred.iter().enumerate() {
                if prev.get(&g.id) == Some(&p.id) && g.bbox.iou(&p.bbox) >= thr {
                    pairs.push((i, j));
                }
            }
        }
        let free_g: Vec<usize> = (0..fr.gt.len()).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
        let free_p: Vec<usize> = (0..fr.pred.len()).filter(|j| !pairs.iter().any(|p| p.1 == *j)).collect();
        let mut best: (usize, f64, Vec<(usize, usize)>) = (0, 0.0, Vec::new());
        for m in all_matchings(free_g.len(), free_p.len()) {
            let m: Vec<(usize, usize)> = m.iter().map(|&(a, b)| (free_g[a], free_p[b])).collect();
            if m.iter().any(|&(i, j)| fr.gt[i].bbox.iou(&fr.pred[j].bbox) < thr) {
                continue;
            }
            let cost: f64 = m.iter().map(|&(i, j)| 1.0 - fr.gt[i].bbox.iou(&fr.pred[j].bbox)).sum();
            if m.len() > best.0 || (m.len() == best.0 && cost < best.1) {
                best = (m.len(), cost, m);
            }
        }
        pairs.extend(best.2);
        prev.clear();
        for &(i, j) in &pairs {
            let (g, p) = (fr.gt[i].id, fr.pred[j].id);
            if last.get(&g).is_some_and(|&l| l != p) {
                sw += 1;
            }
            last.insert(g, p);
            prev.insert(g, p);
        }
        gt += fr.gt.len();
        fn_ += fr.gt.len() - pairs.len();
        fp += fr.pred.len() - pairs.len();
    }
    (fp, fn_, sw, gt, 1.0 - (fp + fn_ + sw) as f64 / gt.max(1) as f64)
}

pub fn oracle_idf1(seq: &[FrameAnnotations], thr: f64) -> (usize, f64) {
    let gids: Vec<u64> = seq.iter().flat_map(|f| f.gt.iter().map(|l| l.id)).collect::<BTreeSet<_>>().into_iter().collect();
    let pids: Vec<u64> = seq.iter().flat_map(|f| f.pred.iter().map(|l| l.id)).collect::<BTreeSet<_>>().into_iter().collect();
    let tot_g: usize = seq.iter().map(|f| f.gt.len()).sum();
    let tot_p: usize = seq.iter().map(|f| f.pred.len()).sum();
    let mut best = 0;
    for m in all_matchings(gids.len(), pids.len()) {
        let mut idtp = 0;
        for &(a, b) in &m {
            for fr in seq {
                let g = fr.gt.iter().find(|l| l.id == gids[a]);
                let p = fr.pred.iter().find(|l| l.id == pids[b]);
                if let (Some(g), Some(p)) = (g, p) {
                    if g.bbox.iou(&p.bbox) >= thr {
                        idtp += 1;
                    }
                }
            }
        }
        best = best.max(idtp);
    }
    let idf1 = if tot_g + tot_p == 0 { 0.0 } else { 2.0 * best as f64 / (tot_g + tot_p) as f64 };
    (best, idf1)
}

pub fn oracle_hota(seq: &[FrameAnnotations]) -> (f64, f64, f64) {
    let tot_g: usize = seq.iter().map(|f| f.gt.len()).sum();
    let tot_p: usize = seq.iter().map(|f| f.pred.len()).sum();
    if tot_g == 0 || tot_p == 0 {
        return (0.0, 0.0, 0.0);
    }
    let mut gt_count: BTreeMap<u64, f64> = BTreeMap::new();
    let mut pr_count: BTreeMap<u64, f64> = BTreeMap::new();
    let mut potential: BTreeMap<(u64, u64), f64> = BTreeMap::new();
    for fr in seq {
        for g in &fr.gt {
            *gt_count.entry(g.id).or_default() += 1.0;
        }
        for p in &fr.pred {
            *pr_count.entry(p.id).or_default() += 1.0;
        }
        for g in &fr.gt {
            for p in &fr.pred {
                let s = g.bbox.iou(&p.bbox);
                let row: f64 = fr.pred.iter().map(|q| g.bbox.iou(&q.bbox)).sum();
                let col: f64 = fr.gt.iter().map(|h| h.bbox.iou(&p.bbox)).sum();
                if row + col - s > 1e-10 {
                    *potential.entry((g.id, p.id)).or_default() += s / (row + col - s);
                }
            }
        }
    }
    let align = |g: u64, p: u64| {
        let pot = potential.get(&(g, p)).copied().unwrap_or(0.0);
        pot / (gt_count[&g] + pr_count[&p] - pot)
    };
    let matchings: Vec<Vec<(usize, usize)>> = seq
        .iter()
        .map(|fr| {
            let mut best: (f64, Vec<(usize, usize)>) = (-1.0, Vec::new());
            for m in all_matchings(fr.gt.len(), fr.pred.len()) {
                let s: f64 = m.iter().map(|&(i, j)| align(fr.gt[i].id, fr.pred[j].id) * fr.gt[i].bbox.iou(&fr.pred[j].bbox)).sum();
                if s > best.0 + 1e-12 {
                    best = (s, m);
                }
            }
            best.1
        })
        .collect();
    let (mut h, mut d, mut a) = (0.0, 0.0, 0.0);
    for k in 1..=19 {
        let alpha = 0.05 * k as f64;
        let mut tp = 0.0;
        let mut counts: BTreeMap<(u64, u64), f64> = BTreeMap::new();
        for (fr, m) in seq.iter().zip(&matchings) {
            for &(i, j) in m {
                if fr.gt[i].bbox.iou(&fr.pred[j].bbox) >= alpha - 1e-10 {
                    tp += 1.0;
                    *counts.entry((fr.gt[i].id, fr.pred[j].id)).or_default() += 1.0;
                }
            }
        }
        let deta = tp / (tot_g as f64 + tot_p as f64 - tp).max(1.0);
        let ass: f64 = counts.iter().map(|(&(g, p), &c)| c * c / (gt_count[&g] + pr_count[&p] - c)).sum();
        let assa = ass / tp.max(1.0);
        d += deta / 19.0;
        a += assa / 19.0;
        h += (deta * assa).sqrt() / 19.0;
    }
    (h, d, a)
}

pub fn naive_chamfer(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
    let one = |x: &[Vector3<f64>], y: &[Vector3<f64>]| {
        x.iter().map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
    };
    0.5 * (one(a, b) + one(b, a))
}

pub fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
}
