//! Linear Kalman filtering with constant-velocity models for image boxes and
//! world-frame roots.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::bbox::BBox;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KalmanError {
    #[error("innovation covariance is not positive definite")]
    SingularInnovation,
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanFilter<const N: usize> {
    pub x: SVector<f64, N>,
    pub p: SMatrix<f64, N, N>,
}

/// Transition and observation matrices with their noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<const N: usize, const M: usize> {
    pub f: SMatrix<f64, N, N>,
    pub q: SMatrix<f64, N, N>,
    pub h: SMatrix<f64, M, N>,
    pub r: SMatrix<f64, M, M>,
}

fn symmetrize<const N: usize>(p: &mut SMatrix<f64, N, N>) {
    *p = (*p + p.transpose()) * 0.5;
}

impl<const N: usize> KalmanFilter<N> {
    pub fn new(x: SVector<f64, N>, p: SMatrix<f64, N, N>) -> Self {
        Self { x, p }
    }

    pub fn predict(&mut self, f: &SMatrix<f64, N, N>, q: &SMatrix<f64, N, N>) {
        self.x = f * self.x;
        self.p = f * self.p * f.transpose() + q;
        symmetrize(&mut self.p);
    }

    /// Joseph-form update.
    pub fn update<const M: usize>(
        &mut self,
        z: &SVector<f64, M>,
        h: &SMatrix<f64, M, N>,
        r: &SMatrix<f64, M, M>,
    ) -> Result<(), KalmanError> {
        let s = h * self.p * h.transpose() + r;
        let chol = s.cholesky().ok_or(KalmanError::SingularInnovation)?;
        let k = (chol.solve(&(h * self.p))).transpose();
        let y = z - h * self.x;
        self.x += k * y;
        let i_kh = SMatrix::<f64, N, N>::identity() - k * h;
        self.p = i_kh * self.p * i_kh.transpose() + k * r * k.transpose();
        symmetrize(&mut self.p);
        Ok(())
    }
}

/// Predict, then update when a measurement is supplied.
pub fn kf_step<const N: usize, const M: usize>(
    state: &KalmanFilter<N>,
    model: &LinearModel<N, M>,
    measurement: Option<&SVector<f64, M>>,
) -> Result<KalmanFilter<N>, KalmanError> {
    let mut next = state.clone();
    next.predict(&model.f, &model.q);
    if let Some(z) = measurement {
        next.update(z, &model.h, &model.r)?;
    }
    Ok(next)
}

/// Box filter over `[u, v, s, r, u̇, v̇, ṡ]` (center, area, aspect ratio).
/// Time is measured in frames.
pub type BoxFilter = KalmanFilter<7>;

pub fn bbox_to_measurement(b: &BBox) -> SVector<f64, 4> {
    let c = b.center();
    SVector::<f64, 4>::new(c.x, c.y, b.area(), b.width() / b.height())
}

pub fn box_filter_new(b: &BBox) -> BoxFilter {
    let z = bbox_to_measurement(b);
    let mut x = SVector::<f64, 7>::zeros();
    x.fixed_rows_mut::<4>(0).copy_from(&z);
    let p = SMatrix::<f64, 7, 7>::from_diagonal(&SVector::<f64, 7>::from([10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4]));
    KalmanFilter::new(x, p)
}

pub fn box_model(dt_frames: f64) -> LinearModel<7, 4> {
    let mut f = SMatrix::<f64, 7, 7>::identity();
    f[(0, 4)] = dt_frames;
    f[(1, 5)] = dt_frames;
    f[(2, 6)] = dt_frames;
    let q = SMatrix::<f64, 7, 7>::from_diagonal(&SVector::<f64, 7>::from([1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 1e-4])) * dt_frames;
    let mut h = SMatrix::<f64, 4, 7>::zeros();
    h.fixed_view_mut::<4, 4>(0, 0).fill_with_identity();
    let r = SMatrix::<f64, 4, 4>::from_diagonal(&SVector::<f64, 4>::new(1.0, 1.0, 10.0, 10.0));
    LinearModel { f, q, h, r }
}

/// Box predicted by the filter; the area rate is zeroed first if it would
/// drive the area negative.
pub fn box_predict(kf: &mut BoxFilter, dt_frames: f64) -> BBox {
    if kf.x[2] + dt_frames * kf.x[6] <= 0.0 {
        kf.x[6] = 0.0;
    }
    let m = box_model(dt_frames);
    kf.predict(&m.f, &m.q);
    box_state(kf)
}

pub fn box_state(kf: &BoxFilter) -> BBox {
    BBox::from_center_area_ratio(kf.x[0], kf.x[1], kf.x[2], kf.x[3])
}

pub fn box_update(kf: &mut BoxFilter, b: &BBox) -> Result<(), KalmanError> {
    let m = box_model(1.0);
    kf.update(&bbox_to_measurement(b), &m.h, &m.r)
}

/// Root filter over `[x, y, z, ẋ, ẏ, ż]`, time in seconds.
pub type RootFilter = KalmanFilter<6>;

/// Process acceleration noise (m/s²) and measurement noise (m).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootNoise {
    pub accel_std: f64,
    pub measurement_std: f64,
}

impl Default for RootNoise {
    fn default() -> Self {
        Self { accel_std: 1.0, measurement_std: 0.25 }
    }
}

pub fn root_filter_new(p: &nalgebra::Vector3<f64>, noise: &RootNoise) -> RootFilter {
    let mut x = SVector::<f64, 6>::zeros();
    x.fixed_rows_mut::<3>(0).copy_from(p);
    let var = noise.measurement_std * noise.measurement_std;
    let p0 = SMatrix::<f64, 6, 6>::from_diagonal(&SVector::<f64, 6>::from([var, var, var, 4.0, 4.0, 4.0]));
    KalmanFilter::new(x, p0)
}

pub fn root_model(dt: f64, noise: &RootNoise) -> LinearModel<6, 3> {
    let mut f = SMatrix::<f64, 6, 6>::identity();
    let mut q = SMatrix::<f64, 6, 6>::zeros();
    let a2 = noise.accel_std * noise.accel_std;
    for i in 0..3 {
        f[(i, i + 3)] = dt;
        q[(i, i)] = a2 * dt.powi(4) / 4.0;
        q[(i, i + 3)] = a2 * dt.powi(3) / 2.0;
        q[(i + 3, i)] = a2 * dt.powi(3) / 2.0;
        q[(i + 3, i + 3)] = a2 * dt * dt;
    }
    let mut h = SMatrix::<f64, 3, 6>::zeros();
    h.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    let r = SMatrix::<f64, 3, 3>::identity() * (noise.measurement_std * noise.measurement_std);
    LinearModel { f, q, h, r }
}
