use ego3d_core::body_fit::*;
use ego3d_core::geometry::{axis_angle_to_matrix, matrix_to_rot6d, RigidPose};
use ego3d_core::optim::OptimConfig;
use ego3d_core::pose_refine::{LimbTopology, PoseTrajectory3D};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_params(rng: &mut ChaCha8Rng, spread: f64) -> BodyParams {
    let mut p = BodyParams::rest();
    for r in p.pose.iter_mut() {
        let aa = Vector3::new(rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-spread..spread));
        *r = matrix_to_rot6d(&axis_angle_to_matrix(&aa));
    }
    for b in p.shape.iter_mut() {
        *b = rng.random_range(-1.0..1.0);
    }
    let g = [
        rng.random_range(-0.5..0.5),
        rng.random_range(-3.0..3.0),
        rng.random_range(-0.5..0.5),
        rng.random_range(-2.0..2.0),
        rng.random_range(-0.1..0.1),
        rng.random_range(2.0..5.0),
    ];
    p.global = BodyParams::global_from_axis_angle(&g);
    p
}

fn target_from(model: &KinematicModel, seq: &[BodyParams]) -> PoseTrajectory3D {
    PoseTrajectory3D::from_frames(seq.iter().map(|p| forward_kinematics(model, p).unwrap()).collect()).unwrap()
}

fn perturb6(r: &[f64; 6], rng: &mut ChaCha8Rng, s: f64) -> [f64; 6] {
    std::array::from_fn(|i| r[i] + rng.random_range(-s..s))
}

#[test]
fn gradient_matches_finite_differences() {
    let model = KinematicModel::canonical();
    let topo = LimbTopology::coco17();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let truth: Vec<BodyParams> = (0..3).map(|_| random_params(&mut rng, 0.4)).collect();
    let mut target = target_from(&model, &truth);
    target = target.map_points(|p| p + Vector3::new(0.01, -0.02, 0.015));
    let mut params: Vec<BodyParams> = (0..3).map(|_| random_params(&mut rng, 0.4)).collect();
    let shape = params[0].shape;
    for p in params.iter_mut() {
        p.shape = shape;
        for r in p.pose.iter_mut() {
            *r = perturb6(r, &mut rng, 0.1);
        }
    }
    let w = MeshFitWeights { data: 1.0, pose_prior: 0.3, limb: 0.7, symmetry: 0.5, temporal: 0.4, shape_prior: 0.2 };
    let (_, grads) = loss_mesh_with_gradient(&model, &params, &target, &w, &topo, true).unwrap();
    let f = |ps: &[BodyParams]| loss_mesh(&model, ps, &target, &w, &topo).unwrap().total;
    let h = 1e-6;
    let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
        let fd = (plus - minus) / (2.0 * h);
        assert!((analytic - fd).abs() <= 1e-5 * (1.0 + fd.abs()), "{what}: analytic {analytic} fd {fd}");
    };
    for t in 0..3 {
        for j in [0, 3, 8, 14, 17, 22] {
            for i in 0..6 {
                let mut a = params.clone();
                let mut b = params.clone();
                a[t].pose[j][i] += h;
                b[t].pose[j][i] -= h;
                check(grads[t].pose[j][i], f(&a), f(&b), &format!("pose t{t} j{j} i{i}"));
            }
        }
        for i in 0..GLOBAL_DIM {
            let mut a = params.clone();
            let mut b = params.clone();
            a[t].global[i] += h;
            b[t].global[i] -= h;
            check(grads[t].global[i], f(&a), f(&b), &format!("global t{t} i{i}"));
        }
    }
    for i in 0..SHAPE_DIM {
        let mut a = params.clone();
        let mut b = params.clone();
        a.iter_mut().for_each(|p| p.shape[i] += h);
        b.iter_mut().for_each(|p| p.shape[i] -= h);
        check(grads[0].shape[i], f(&a), f(&b), &format!("shape {i}"));
    }
}

#[test]
fn three_stage_fit_recovers_synthetic_body() {
    let model = KinematicModel::canonical();
    let topo = LimbTopology::coco17();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut truth = random_params(&mut rng, 0.3);
    for b in truth.shape.iter_mut() {
        *b *= 0.5;
    }
    let target = target_from(&model, std::slice::from_ref(&truth));
    let mut init = truth.clone();
    init.shape = [0.0; SHAPE_DIM];
    for r in init.pose.iter_mut() {
        *r = perturb6(r, &mut rng, 0.05);
    }
    let t = init.translation() + Vector3::new(0.05, -0.03, 0.04);
    init.set_translation(&t);
    let out = fit_three_stage(&model, &[init], &target, &MeshFitWeights::default(), &topo, &OptimConfig::default()).unwrap();
    let fitted = forward_kinematics(&model, &out.params[0]).unwrap();
    let mpjpe = fitted.iter().zip(target.frame(0)).map(|(a, b)| (a - b).norm()).sum::<f64>() / 17.0;
    assert!(mpjpe < 0.01 * model.height(), "mpjpe {mpjpe}");
    assert!(out.stage_losses.windows(2).all(|w| w[1] <= w[0]), "{:?}", out.stage_losses);
}

#[test]
fn stages_only_touch_their_block() {
    let model = KinematicModel::canonical();
    let topo = LimbTopology::coco17();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let truth: Vec<BodyParams> = (0..2).map(|_| random_params(&mut rng, 0.3)).collect();
    let mut truth = truth;
    let s = truth[0].shape;
    truth[1].shape = s;
    let target = target_from(&model, &truth);
    let init = initial_params(&model, &target);
    let cfg = OptimConfig { max_iterations: 30, ..Default::default() };
    let out = fit_three_stage(&model, &init, &target, &MeshFitWeights::default(), &topo, &cfg).unwrap();
    let [s1, s2, s3] = [&out.stage_params[0], &out.stage_params[1], &out.stage_params[2]];
    for t in 0..2 {
        assert_eq!(s1[t].pose, init[t].pose);
        assert_eq!(s1[t].shape, init[t].shape);
        assert_eq!(s2[t].pose, s1[t].pose);
        assert_eq!(s2[t].global, s1[t].global);
        assert_eq!(s3[t].shape, s2[t].shape);
    }
}

#[test]
fn rigid_transform_of_target_and_root_keeps_data_term() {
    let model = KinematicModel::canonical();
    let topo = LimbTopology::coco17();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let truth = random_params(&mut rng, 0.3);
    let mut params = random_params(&mut rng, 0.3);
    params.shape = truth.shape;
    let target = target_from(&model, std::slice::from_ref(&truth));
    let w = MeshFitWeights::default();
    let before = loss_mesh(&model, std::slice::from_ref(&params), &target, &w, &topo).unwrap();

    let q = axis_angle_to_matrix(&Vector3::new(0.3, -1.1, 0.7));
    let rigid = RigidPose::new(q, Vector3::new(1.0, -2.0, 0.5)).unwrap();
    let moved = target.map_points(|p| rigid.transform_point(p));
    let mut p2 = params.clone();
    p2.set_global_rotation(&(q * params.global_rotation().unwrap()));
    p2.set_translation(&rigid.transform_point(&params.translation()));
    let after = loss_mesh(&model, std::slice::from_ref(&p2), &moved, &w, &topo).unwrap();
    assert!((before.data - after.data).abs() < 1e-9, "{} vs {}", before.data, after.data);
}

#[test]
fn pose_prior_alone_pulls_toward_rest() {
    let model = KinematicModel::canonical();
    let topo = LimbTopology::coco17();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = random_params(&mut rng, 0.5);
    let target = target_from(&model, std::slice::from_ref(&p));
    let w = MeshFitWeights { data: 0.0, pose_prior: 1.0, limb: 0.0, symmetry: 0.0, temporal: 0.0, shape_prior: 0.0 };
    let out = fit_three_stage(&model, std::slice::from_ref(&p), &target, &w, &topo, &OptimConfig::default()).unwrap();
    assert!(out.params[0].pose_deviation() < 0.5 * p.pose_deviation());
}

/// Keypoints by walking the chain with 4x4 homogeneous transforms.
fn oracle_fk(model: &KinematicModel, p: &BodyParams) -> Vec<[f64; 3]> {
    use nalgebra::Matrix4;
    let gs = |r: &[f64; 6]| {
        let a = Vector3::new(r[0], r[1], r[2]);
        let b = Vector3::new(r[3], r[4], r[5]);
        let e1 = a / a.norm();
        let u = b - e1 * e1.dot(&b);
        let e2 = u / u.norm();
        nalgebra::Matrix3::from_columns(&[e1, e2, e1.cross(&e2)])
    };
    let mut offsets = model.rest_offsets.clone();
    for (k, comp) in model.shape_basis.iter().enumerate() {
        for j in 0..offsets.len() {
            offsets[j] += comp[j] * p.shape[k];
        }
    }
    let mut world: Vec<Matrix4<f64>> = Vec::new();
    for j in 0..model.parents.len() {
        let r = if j == 0 { gs(&[p.global[0], p.global[1], p.global[2], p.global[3], p.global[4], p.global[5]]) } else { gs(&p.pose[j - 1]) };
        let m = if j == 0 {
            // root: rotate its offset, then translate
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            let pos = r * offsets[0] + p.translation();
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&pos);
            m
        } else {
            let mut local = Matrix4::identity();
            local.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            local.fixed_view_mut::<3, 1>(0, 3).copy_from(&offsets[j]);
            world[model.parents[j] as usize] * local
        };
        world.push(m);
    }
    model
        .keypoint_regressor
        .iter()
        .map(|row| {
            let mut acc = [0.0; 3];
            for (j, w) in row.iter().enumerate() {
                for c in 0..3 {
                    acc[c] += w * world[j][(c, 3)];
                }
            }
            acc
        })
        .collect()
}

#[test]
fn loss_matches_scalar_oracle() {
    let model = KinematicModel::canonical();
    let topo = LimbTopology::coco17();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut params: Vec<BodyParams> = (0..3).map(|_| random_params(&mut rng, 0.5)).collect();
    let s = params[0].shape;
    params.iter_mut().for_each(|p| p.shape = s);
    let target_pts: Vec<Vec<Vector3<f64>>> = (0..3)
        .map(|_| (0..17).map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0), rng.random_range(2.0..4.0))).collect())
        .collect();
    let mut valid = vec![vec![true; 17]; 3];
    valid[1][4] = false;
    valid[2][0] = false;
    let target = PoseTrajectory3D::new(target_pts.clone(), valid.clone()).unwrap();
    let w = MeshFitWeights { data: 1.0, pose_prior: 0.2, limb: 0.3, symmetry: 0.4, temporal: 0.5, shape_prior: 0.6 };
    let got = loss_mesh(&model, &params, &target, &w, &topo).unwrap();

    let sn = |sq: f64| (sq + 1e-18).sqrt() - 1e-9;
    let kp: Vec<Vec<[f64; 3]>> = params.iter().map(|p| oracle_fk(&model, p)).collect();
    let d = |a: [f64; 3], b: [f64; 3]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let mut data = 0.0;
    let mut prior = 0.0;
    for t in 0..3 {
        let mut sq = 0.0;
        for j in 0..17 {
            if valid[t][j] {
                let y = target_pts[t][j];
                sq += d(kp[t][j], [y.x, y.y, y.z]).powi(2);
            }
        }
        data += sn(sq);
        let mut sq = 0.0;
        for r in &params[t].pose {
            for (i, v) in r.iter().enumerate() {
                sq += (v - [1.0, 0.0, 0.0, 0.0, 1.0, 0.0][i]).powi(2);
            }
        }
        prior += sn(sq);
    }
    let lam = |f: &Vec<[f64; 3]>| topo.limbs.iter().map(|&(a, b)| d(f[a], f[b])).collect::<Vec<_>>();
    let (mut limb, mut symm, mut temp) = (0.0, 0.0, 0.0);
    for t in 0..3 {
        let l = lam(&kp[t]);
        symm += sn(topo.left_right_pairs.iter().map(|&(a, b)| (l[a] - l[b]).powi(2)).sum());
        if t + 1 < 3 {
            let l1 = lam(&kp[t + 1]);
            limb += sn(l.iter().zip(&l1).map(|(a, b)| (a - b).powi(2)).sum());
            temp += sn((0..17).map(|j| d(kp[t][j], kp[t + 1][j]).powi(2)).sum());
        }
    }
    let shape = 0.5 * s.iter().map(|b| b * b).sum::<f64>();
    let total = w.data * data + w.pose_prior * prior + w.limb * limb + w.symmetry * symm + w.temporal * temp + w.shape_prior * shape;
    for (a, b) in [(got.data, data), (got.pose_prior, prior), (got.limb, limb), (got.symmetry, symm), (got.temporal, temp), (got.shape_prior, shape), (got.total, total)] {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    let doubled = loss_mesh(&model, &params, &target, &MeshFitWeights { data: 2.0, ..w }, &topo).unwrap();
    assert!((doubled.total - got.total - got.data).abs() < 1e-12);
}

#[test]
fn exact_fit_has_zero_residuals() {
    let model = KinematicModel::canonical();
    let topo = LimbTopology::coco17();
    let mut p = BodyParams::rest();
    p.set_translation(&Vector3::new(0.3, 0.0, 4.0));
    let target = target_from(&model, &[p.clone(), p.clone()]);
    let w = MeshFitWeights { pose_prior: 0.0, shape_prior: 0.0, ..Default::default() };
    let l = loss_mesh(&model, &[p.clone(), p], &target, &w, &topo).unwrap();
    assert_eq!((l.data, l.pose_prior, l.shape_prior, l.limb, l.temporal), (0.0, 0.0, 0.0, 0.0, 0.0));
    assert!(l.total < 1e-12);
}
