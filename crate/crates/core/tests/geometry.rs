use ego3d_core::geometry::*;
use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let aa = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
    axis_angle_to_matrix(&aa)
}

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
    (0..n).map(|_| Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect()
}

/// Horn's closed form: the rotation is the top eigenvector of a 4x4 matrix
/// built from the cross-covariance; scale and translation follow.
fn horn(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (f64, Matrix3<f64>, Vector3<f64>) {
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut s = Matrix3::zeros();
    for (a, b) in src.iter().zip(dst) {
        s += (a - ms) * (b - md).transpose();
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    let nmat = Matrix4::new(
        sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
        syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
        szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
        sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz,
    );
    let eig = nmat.symmetric_eigen();
    let k = eig.eigenvalues.imax();
    let q = eig.eigenvectors.column(k);
    let r = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner();
    let num: f64 = src.iter().zip(dst).map(|(a, b)| (b - md).dot(&(r * (a - ms)))).sum();
    let den: f64 = src.iter().map(|a| (a - ms).norm_squared()).sum();
    let scale = num / den;
    (scale, r, md - scale * r * ms)
}

#[test]
fn projection_examples() {
    let k = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 1, height: 1 };
    let p = compose_projection(&k, &RigidPose::identity());
    assert_eq!(project(&p, &Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::zeros());
    let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 200).unwrap();
    let p = compose_projection(&k, &RigidPose::identity());
    assert_eq!(project(&p, &Vector3::new(1.0, 2.0, 2.0)).unwrap(), Vector2::new(100.0, 150.0));
    assert!(matches!(project(&p, &Vector3::new(0.0, 0.0, -1.0)), Err(GeometryError::NonPositiveDepth(_))));
}

#[test]
fn identity_projection_matrix() {
    let k = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: 1, height: 1 };
    let p = compose_projection(&k, &RigidPose::identity());
    for i in 0..3 {
        for j in 0..4 {
            assert_eq!(p.0[(i, j)], if i == j { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn translation_moves_optical_center() {
    let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 200).unwrap();
    // camera-from-world translation (-1, 0, 0): camera center at world x = 1
    let pose = RigidPose::from_translation(Vector3::new(-1.0, 0.0, 0.0));
    let uv = project(&compose_projection(&k, &pose), &Vector3::new(1.0, 0.0, 5.0)).unwrap();
    assert!((uv - Vector2::new(50.0, 50.0)).norm() < 1e-12);
    assert!((pose.camera_center() - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-15);
}

#[test]
fn umeyama_matches_horn_with_noise() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let noise = Normal::new(0.0, 1e-3).unwrap();
    for _ in 0..50 {
        let src = random_points(&mut rng, 20);
        let r = random_rotation(&mut rng);
        let s = rng.random_range(0.5..3.0);
        let t = Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let dst: Vec<_> = src
            .iter()
            .map(|p| s * r * p + t + Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng)))
            .collect();
        let a = umeyama_align(&src, &dst).unwrap();
        assert!((a.transform.scale - s).abs() < 1e-2);
        assert!((a.transform.rotation - r).norm() < 1e-2);
        assert!((a.transform.translation - t).norm() < 1e-2);

        let (hs, hr, ht) = horn(&src, &dst);
        let horn_residual: f64 = src.iter().zip(&dst).map(|(p, q)| (q - (hs * hr * p + ht)).norm_squared()).sum();
        assert!((a.residual - horn_residual).abs() < 1e-9, "{} vs {}", a.residual, horn_residual);
        assert!((a.transform.rotation - hr).norm() < 1e-6);
    }
}

#[test]
fn umeyama_trivial_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let src = random_points(&mut rng, 8);
    let a = umeyama_align(&src, &src).unwrap();
    assert!((a.transform.scale - 1.0).abs() < 1e-12);
    assert!((a.transform.rotation - Matrix3::identity()).norm() < 1e-12);
    assert!(a.transform.translation.norm() < 1e-12 && a.residual < 1e-20);
    let doubled: Vec<_> = src.iter().map(|p| 2.0 * p).collect();
    let a = umeyama_align(&src, &doubled).unwrap();
    assert!((a.transform.scale - 2.0).abs() < 1e-12);
    assert!((a.transform.rotation - Matrix3::identity()).norm() < 1e-12);
    assert!(a.transform.translation.norm() < 1e-12);

    let line: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 2.0 * i as f64, 0.0)).collect();
    assert!(matches!(umeyama_align(&line, &line), Err(GeometryError::DegenerateConfiguration(_))));
}

#[test]
fn rot6d_examples() {
    assert_eq!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(), Matrix3::identity());
    assert_eq!(rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(), Matrix3::identity());
    assert!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
}

fn vec3() -> impl Strategy<Value = Vector3<f64>> {
    (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ray_round_trip(aa in vec3(), t in vec3(), u in 0.0..1280.0f64, v in 0.0..720.0f64, depth in 0.5..50.0f64) {
        let k = CameraIntrinsics::new(900.0, 910.0, 640.0, 360.0, 1280, 720).unwrap();
        let pose = RigidPose::from_axis_angle(&aa, t);
        let x_cam = k.back_project(&Vector2::new(u, v), depth);
        let x_world = pose.inverse_transform_point(&x_cam);
        let uv = project(&compose_projection(&k, &pose), &x_world).unwrap();
        prop_assert!((uv - Vector2::new(u, v)).norm() < 1e-9);
        // stepwise and composed projections agree
        let stepwise = k.project_camera_point(&pose.transform_point(&x_world)).unwrap();
        prop_assert!((stepwise - uv).norm() < 1e-9);
    }

    #[test]
    fn projection_scale_invariant(aa in vec3(), t in vec3(), x in vec3(), s in 1e-3..1e3f64) {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap();
        let pose = RigidPose::from_axis_angle(&aa, t + Vector3::new(0.0, 0.0, 10.0));
        let p = compose_projection(&k, &pose);
        if let Ok(a) = project(&p, &x) {
            let b = project(&p.scaled(s), &x).unwrap();
            prop_assert!((a - b).norm() <= 1e-9 * (1.0 + a.norm()));
        }
    }

    #[test]
    fn rot6d_is_rotation(a in vec3(), b in vec3()) {
        let r6 = [a.x, a.y, a.z, b.x, b.y, b.z];
        prop_assume!(a.norm() > 1e-3 && a.cross(&b).norm() > 1e-3 * a.norm() * b.norm());
        let r = rot6d_to_matrix(&r6).unwrap();
        prop_assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        // textbook Gram–Schmidt
        let e1 = a.normalize();
        let e2 = (b - e1 * e1.dot(&b)).normalize();
        let e3 = e1.cross(&e2);
        prop_assert!((r.column(0) - e1).norm() < 1e-9);
        prop_assert!((r.column(1) - e2).norm() < 1e-9);
        prop_assert!((r.column(2) - e3).norm() < 1e-9);
    }

    #[test]
    fn umeyama_exact_and_invertible(aa in vec3(), t in vec3(), s in 0.2..5.0f64, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = random_points(&mut rng, 6);
        let r = axis_angle_to_matrix(&aa);
        let dst: Vec<_> = src.iter().map(|p| s * r * p + t).collect();
        let fwd = umeyama_align(&src, &dst).unwrap();
        prop_assert!(fwd.residual < 1e-9);
        let back = umeyama_align(&dst, &src).unwrap();
        let id = fwd.transform.compose(&back.transform);
        prop_assert!((id.scale - 1.0).abs() < 1e-6);
        prop_assert!((id.rotation - Matrix3::identity()).norm() < 1e-6);
        prop_assert!(id.translation.norm() < 1e-6);
    }
}
