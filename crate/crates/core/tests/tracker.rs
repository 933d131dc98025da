use std::collections::{BTreeMap, BTreeSet};

use ego3d_core::assignment::{solve, solve_gated, total_cost};
use ego3d_core::bbox::BBox;
use ego3d_core::geometry::{axis_angle_to_matrix, RigidPose};
use ego3d_core::kalman::*;
use ego3d_core::tracker::*;
use nalgebra::{DMatrix, SVector, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn root_filter_beats_raw_measurements() {
    let noise = RootNoise::default();
    let sampler = Normal::new(0.0, noise.measurement_std).unwrap();
    let dt = 0.05;
    let model = root_model(dt, &noise);
    let (mut raw, mut filt, mut n) = (0.0, 0.0, 0);
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Vector3::new(rng.random_range(-1.5..1.5), 0.0, rng.random_range(-1.5..1.5));
        let start = Vector3::new(0.0, 1.0, 4.0);
        let mut kf: Option<RootFilter> = None;
        for t in 0..200 {
            let truth = start + v * (t as f64 * dt);
            let z = truth + Vector3::new(sampler.sample(&mut rng), sampler.sample(&mut rng), sampler.sample(&mut rng));
            match kf.as_mut() {
                None => kf = Some(root_filter_new(&z, &noise)),
                Some(k) => {
                    k.predict(&model.f, &model.q);
                    k.update(&z, &model.h, &model.r).unwrap();
                }
            }
            if t >= 20 {
                let est = kf.as_ref().unwrap().x.fixed_rows::<3>(0).into_owned();
                raw += (z - truth).norm_squared();
                filt += (est - truth).norm_squared();
                n += 1;
            }
        }
    }
    let (raw, filt) = ((raw / n as f64).sqrt(), (filt / n as f64).sqrt());
    assert!(filt < 0.5 * raw, "filtered rmse {filt}, raw {raw}");
}

#[test]
fn update_covariance_stays_symmetric_and_singular_is_reported() {
    let mut kf = KalmanFilter::<2>::new(SVector::<f64, 2>::new(0.0, 1.0), nalgebra::Matrix2::new(2.0, 0.3, 0.3, 1.0));
    let h = nalgebra::Matrix1x2::new(1.0, 0.0);
    let r = nalgebra::Matrix1::new(0.5);
    kf.update(&SVector::<f64, 1>::new(0.4), &h, &r).unwrap();
    assert_eq!(kf.p, kf.p.transpose());
    assert!(kf.p.symmetric_eigen().eigenvalues.iter().all(|&e| e > 0.0));
    // scalar oracle for a 1D measurement
    let (p00, p01) = (2.0, 0.3);
    let k0 = p00 / (p00 + 0.5);
    let k1 = p01 / (p00 + 0.5);
    assert!((kf.x[0] - k0 * 0.4).abs() < 1e-12);
    assert!((kf.x[1] - (1.0 + k1 * 0.4)).abs() < 1e-12);

    let mut z = KalmanFilter::<2>::new(SVector::zeros(), nalgebra::Matrix2::zeros());
    assert_eq!(z.update(&SVector::<f64, 1>::new(1.0), &h, &nalgebra::Matrix1::zeros()), Err(KalmanError::SingularInnovation));
}

#[test]
fn box_filter_follows_constant_velocity() {
    let mut kf = box_filter_new(&BBox::new(100.0, 100.0, 140.0, 200.0));
    let mut pred = BBox::new(0.0, 0.0, 1.0, 1.0);
    for t in 1..40 {
        pred = box_predict(&mut kf, 1.0);
        let x = 100.0 + 5.0 * t as f64;
        box_update(&mut kf, &BBox::new(x, 100.0, x + 40.0, 200.0)).unwrap();
    }
    let expect = BBox::new(100.0 + 5.0 * 39.0, 100.0, 140.0 + 5.0 * 39.0, 200.0);
    assert!(pred.iou(&expect) > 0.95);
}

fn brute_force(cost: &DMatrix<f64>) -> f64 {
    let (n, m) = cost.shape();
    let k = n.min(m);
    fn rec(i: usize, n: usize, m: usize, need: usize, used: &mut Vec<bool>, acc: f64, cost: &DMatrix<f64>, best: &mut f64) {
        if need == 0 {
            *best = best.min(acc);
            return;
        }
        if i == n || n - i < need {
            return;
        }
        rec(i + 1, n, m, need, used, acc, cost, best);
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                rec(i + 1, n, m, need - 1, used, acc + cost[(i, j)], cost, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, n, m, k, &mut vec![false; m], 0.0, cost, &mut best);
    best
}

fn greedy(cost: &DMatrix<f64>) -> f64 {
    let mut entries: Vec<(f64, usize, usize)> = cost.iter().enumerate().map(|(k, &c)| (c, k % cost.nrows(), k / cost.nrows())).collect();
    entries.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut rows, mut cols, mut total) = (BTreeSet::new(), BTreeSet::new(), 0.0);
    for (c, i, j) in entries {
        if !rows.contains(&i) && !cols.contains(&j) {
            rows.insert(i);
            cols.insert(j);
            total += c;
        }
    }
    total
}

#[test]
fn hungarian_is_optimal_and_no_worse_than_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let (n, m) = (rng.random_range(1..6), rng.random_range(1..6));
        let cost = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..10.0));
        let pairs = solve(&cost);
        assert_eq!(pairs.len(), n.min(m));
        let c = total_cost(&cost, &pairs);
        assert!((c - brute_force(&cost)).abs() < 1e-9);
        assert!(c <= greedy(&cost) + 1e-9);
    }
}

#[test]
fn gated_assignment_prefers_more_pairs() {
    let inf = f64::INFINITY;
    // the cheap pair (0, 0) would block the only option for row 1
    let cost = DMatrix::from_row_slice(2, 2, &[0.1, 0.9, 0.2, inf]);
    let pairs = solve_gated(&cost);
    assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    let all_gated = DMatrix::from_element(2, 3, inf);
    assert!(solve_gated(&all_gated).is_empty());
}

fn det(x: f64, root: Option<Vector3<f64>>) -> DetectionInput {
    DetectionInput { bbox: BBox::new(x, 100.0, x + 40.0, 200.0), score: 0.9, root_cam: root }
}

#[test]
fn ids_are_never_reused() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cfg = AssociationConfig { max_age: 3, ..Default::default() };
    let mut tracker = Tracker::new(cfg).unwrap();
    let pose = RigidPose::identity();
    let mut dead: BTreeSet<u64> = BTreeSet::new();
    let mut live_prev: BTreeSet<u64> = BTreeSet::new();
    let mut max_seen = 0;
    for _ in 0..300 {
        let dets: Vec<DetectionInput> = (0..rng.random_range(0..4))
            .map(|_| det(rng.random_range(0.0..600.0), rng.random_bool(0.5).then(|| Vector3::new(0.0, 0.0, rng.random_range(2.0..8.0)))))
            .collect();
        let out = tracker.step(&dets, &pose, 0.05).unwrap();
        let live: BTreeSet<u64> = tracker.tracks().iter().map(|t| t.id).collect();
        for id in live.iter().chain(out.iter().map(|o| &o.id)) {
            assert!(!dead.contains(id), "id {id} came back");
        }
        for id in live_prev.difference(&live) {
            dead.insert(*id);
        }
        for id in &live {
            if !live_prev.contains(id) {
                assert!(*id > max_seen);
                max_seen = *id;
            }
        }
        live_prev = live;
    }
    assert!(max_seen > 10);
}

#[test]
fn steady_targets_keep_their_ids() {
    let mut tracker = Tracker::new(AssociationConfig::default()).unwrap();
    let pose = RigidPose::identity();
    let mut ids: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
    for t in 0..60 {
        let dets: Vec<DetectionInput> = (0..3)
            .map(|k| det(100.0 + 200.0 * k as f64 + 2.0 * t as f64, Some(Vector3::new(-2.0 + 2.0 * k as f64, 0.0, 5.0))))
            .collect();
        let out = tracker.step(&dets, &pose, 0.05).unwrap();
        assert_eq!(out.len(), 3);
        for o in out {
            let k = ((o.bbox.x1 - 100.0 - 2.0 * t as f64) / 200.0).round() as usize;
            ids.entry(k).or_default().insert(o.id);
        }
    }
    assert!(ids.values().all(|s| s.len() == 1));
}

#[test]
fn invalid_inputs_are_rejected() {
    assert!(Tracker::new(AssociationConfig { alpha: 1.5, ..Default::default() }).is_err());
    let mut t = Tracker::new(AssociationConfig::default()).unwrap();
    assert!(matches!(t.step(&[], &RigidPose::identity(), 0.0), Err(TrackerError::InvalidTimeStep(_))));
    let depth = DepthMap::constant(10, 10, 3.0);
    let k = ego3d_core::geometry::CameraIntrinsics::new(100.0, 100.0, 5.0, 5.0, 10, 10).unwrap();
    assert!(matches!(simple_baseline_root(&BBox::new(20.0, 20.0, 30.0, 30.0), &depth, 1.0, &k), Err(TrackerError::EmptyBbox)));
    let r = simple_baseline_root(&BBox::new(2.0, 2.0, 8.0, 8.0), &depth, 1.5, &k).unwrap();
    assert!((r - Vector3::new(0.0, 0.0, 4.5)).norm() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cost_invariant_under_world_rigid_motion(
        ax in -3.0..3.0f64, ay in -3.0..3.0f64, tx in -10.0..10.0f64, tz in -10.0..10.0f64,
        dx in -80.0..80.0f64, r1 in -4.0..4.0f64, r2 in -4.0..4.0f64, alpha in 0.0..1.0f64,
    ) {
        let cfg = AssociationConfig { alpha, ..Default::default() };
        let a = BBox::new(100.0, 100.0, 150.0, 220.0);
        let b = a.translated(dx, 0.0);
        let p = Vector3::new(r1, 0.5, 4.0);
        let q = Vector3::new(r2, 0.5, 5.0);
        let rot = axis_angle_to_matrix(&Vector3::new(ax, ay, 0.2));
        let t = Vector3::new(tx, 0.0, tz);
        let c0 = association_cost(&cfg, &a, Some(&p), &b, Some(&q));
        let c1 = association_cost(&cfg, &a, Some(&(rot * p + t)), &b, Some(&(rot * q + t)));
        prop_assert!(c0 == c1 || (c0 - c1).abs() < 1e-12);
        prop_assert!(c0.is_infinite() || (0.0..=1.0 + 1e-12).contains(&c0));
    }
}

#[test]
fn tracks_reported_at_start_up_survive_a_short_gap() {
    let mut tracker = Tracker::new(AssociationConfig::default()).unwrap();
    let pose = RigidPose::identity();
    let root = Some(Vector3::new(0.0, 0.0, 4.0));
    let first = tracker.step(&[det(100.0, root)], &pose, 0.05).unwrap();
    assert_eq!(first.len(), 1);
    for _ in 0..3 {
        assert!(tracker.step(&[], &pose, 0.05).unwrap().is_empty());
    }
    let back = tracker.step(&[det(100.0, root)], &pose, 0.05).unwrap();
    assert_eq!(back.iter().map(|o| o.id).collect::<Vec<_>>(), vec![first[0].id]);

    // a target first seen after start-up is still dropped on its first miss
    let late = tracker.step(&[det(100.0, root), det(400.0, Some(Vector3::new(2.0, 0.0, 4.0)))], &pose, 0.05).unwrap();
    assert_eq!(late.len(), 1);
    tracker.step(&[det(100.0, root)], &pose, 0.05).unwrap();
    assert_eq!(tracker.tracks().len(), 1);
}
