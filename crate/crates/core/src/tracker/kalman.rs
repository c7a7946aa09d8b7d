//! Constant-velocity Kalman filter in `(cx, cy, aspect, height)` space.
//!
//! State is the 8-vector `(cx, cy, a, h, vx, vy, va, vh)`. Process and
//! measurement noise are proportional to the current box height.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub type StateVector = SVector<f64, 8>;
pub type StateCovariance = SMatrix<f64, 8, 8>;
type Measurement = SVector<f64, 4>;
type MeasurementMatrix = SMatrix<f64, 4, 8>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanConfig {
    /// Position noise std as a fraction of box height.
    pub std_weight_position: f64,
    /// Velocity noise std as a fraction of box height.
    pub std_weight_velocity: f64,
    /// Multiplier on the process noise std; 0 disables motion noise.
    pub process_noise_scale: f64,
    /// Multiplier on the measurement noise std.
    pub measurement_noise_scale: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig {
            std_weight_position: 1.0 / 20.0,
            std_weight_velocity: 1.0 / 160.0,
            process_noise_scale: 1.0,
            measurement_noise_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

impl KalmanState {
    /// Box at the current mean.
    pub fn to_box(&self) -> BoundingBox {
        let m = &self.mean;
        BoundingBox::from_xyah(m[0], m[1], m[2], m[3])
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct KalmanFilter {
    pub config: KalmanConfig,
}

fn transition() -> StateCovariance {
    let mut f = StateCovariance::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn observation() -> MeasurementMatrix {
    let mut h = MeasurementMatrix::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn symmetrize(p: &StateCovariance) -> StateCovariance {
    (p + p.transpose()) * 0.5
}

fn check_state(state: &KalmanState, stage: &str) -> Result<()> {
    let m = &state.mean;
    if m.iter().any(|v| !v.is_finite()) || m[2] <= 0.0 || m[3] <= 0.0 {
        return Err(Error::NumericalDegeneracy(format!(
            "{stage}: invalid mean (aspect {}, height {})",
            m[2], m[3]
        )));
    }
    let p = &state.covariance;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDegeneracy(format!(
            "{stage}: non-finite covariance"
        )));
    }
    let scale = p.trace().abs().max(1.0);
    let min_eig = p.symmetric_eigenvalues().min();
    if min_eig < -1e-9 * scale {
        return Err(Error::NumericalDegeneracy(format!(
            "{stage}: covariance not positive semidefinite (min eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

impl KalmanFilter {
    pub fn new(config: KalmanConfig) -> Self {
        KalmanFilter { config }
    }

    /// Track state for a first observation, with zero velocity.
    pub fn initiate(&self, measurement: &BoundingBox) -> KalmanState {
        let z = measurement.to_xyah();
        let h = z[3];
        let (wp, wv) = (
            self.config.std_weight_position,
            self.config.std_weight_velocity,
        );
        let std = [
            2.0 * wp * h,
            2.0 * wp * h,
            1e-2,
            2.0 * wp * h,
            10.0 * wv * h,
            10.0 * wv * h,
            1e-5,
            10.0 * wv * h,
        ];
        let mut mean = StateVector::zeros();
        for i in 0..4 {
            mean[i] = z[i];
        }
        KalmanState {
            mean,
            covariance: StateCovariance::from_diagonal(&StateVector::from_iterator(
                std.iter().map(|s| s * s),
            )),
        }
    }

    /// Advances the state by one frame.
    pub fn predict(&self, state: &KalmanState) -> Result<KalmanState> {
        let h = state.mean[3];
        let (wp, wv) = (
            self.config.std_weight_position,
            self.config.std_weight_velocity,
        );
        let k = self.config.process_noise_scale;
        let std = [wp * h, wp * h, 1e-2, wp * h, wv * h, wv * h, 1e-5, wv * h];
        let q = StateCovariance::from_diagonal(&StateVector::from_iterator(
            std.iter().map(|s| (k * s) * (k * s)),
        ));
        let f = transition();
        let next = KalmanState {
            mean: f * state.mean,
            covariance: symmetrize(&(f * state.covariance * f.transpose() + q)),
        };
        check_state(&next, "predict")?;
        Ok(next)
    }

    fn measurement_noise(&self, h: f64) -> SMatrix<f64, 4, 4> {
        let wp = self.config.std_weight_position;
        let k = self.config.measurement_noise_scale;
        let std = [wp * h, wp * h, 1e-1, wp * h];
        SMatrix::<f64, 4, 4>::from_diagonal(&Measurement::from_iterator(
            std.iter().map(|s| (k * s) * (k * s)),
        ))
    }

    /// Linear correction with a measured box (Joseph form).
    pub fn update(&self, state: &KalmanState, measurement: &BoundingBox) -> Result<KalmanState> {
        let h = observation();
        let r = self.measurement_noise(state.mean[3]);
        let p = &state.covariance;
        let s = h * p * h.transpose() + r;
        let chol = s.cholesky().ok_or_else(|| {
            Error::NumericalDegeneracy("update: singular innovation covariance".into())
        })?;
        // K = P H^T S^-1, solved as S K^T = H P
        let gain = chol.solve(&(h * p)).transpose();
        let z = Measurement::from(measurement.to_xyah());
        let innovation = z - h * state.mean;
        let i_kh = StateCovariance::identity() - gain * h;
        let next = KalmanState {
            mean: state.mean + gain * innovation,
            covariance: symmetrize(&(i_kh * p * i_kh.transpose() + gain * r * gain.transpose())),
        };
        check_state(&next, "update")?;
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn start() -> (KalmanFilter, KalmanState) {
        let kf = KalmanFilter::default();
        let s = kf.initiate(&BoundingBox::new(100.0, 50.0, 140.0, 150.0).unwrap());
        (kf, s)
    }

    #[test]
    fn stationary_predict_keeps_position() {
        let (kf, s) = start();
        let p = kf.predict(&s).unwrap();
        assert_eq!(p.mean, s.mean);
        assert!(p.covariance.trace() > s.covariance.trace());
    }

    #[test]
    fn constant_velocity_moves_center() {
        let (kf, mut s) = start();
        s.mean[4] = 2.0;
        let p = kf.predict(&s).unwrap();
        assert!((p.mean[0] - (s.mean[0] + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn trace_nondecreasing_under_repeated_predict() {
        let (kf, mut s) = start();
        let mut prev = s.covariance.trace();
        for _ in 0..10 {
            s = kf.predict(&s).unwrap();
            let t = s.covariance.trace();
            assert!(t > prev);
            prev = t;
        }
    }

    #[test]
    fn zero_innovation_leaves_mean() {
        let (kf, s) = start();
        let p = kf.predict(&s).unwrap();
        let u = kf.update(&p, &p.to_box()).unwrap();
        for i in 0..8 {
            assert!((u.mean[i] - p.mean[i]).abs() < 1e-9, "component {i}");
        }
        let measured = |c: &StateCovariance| (0..4).map(|i| c[(i, i)]).sum::<f64>();
        assert!(measured(&u.covariance) <= measured(&p.covariance));
    }

    #[test]
    fn vanishing_measurement_noise_snaps_to_measurement() {
        let kf = KalmanFilter::new(KalmanConfig {
            measurement_noise_scale: 1e-6,
            ..KalmanConfig::default()
        });
        let s = kf.initiate(&BoundingBox::new(100.0, 50.0, 140.0, 150.0).unwrap());
        let z = BoundingBox::new(110.0, 55.0, 152.0, 160.0).unwrap();
        let u = kf.update(&kf.predict(&s).unwrap(), &z).unwrap();
        let want = z.to_xyah();
        for (i, w) in want.iter().enumerate() {
            assert!((u.mean[i] - w).abs() < 1e-6, "component {i}");
        }
    }

    #[test]
    fn scalar_closed_form() {
        // Right after initiate the cx block is uncorrelated with everything,
        // so the update reduces to m + p/(p+r) (z-m), var p r/(p+r).
        let (kf, s) = start();
        let h = s.mean[3];
        let p = s.covariance[(0, 0)];
        let r = (h / 20.0) * (h / 20.0);
        let z = BoundingBox::from_xyah(s.mean[0] + 7.0, s.mean[1], s.mean[2], s.mean[3]);
        let u = kf.update(&s, &z).unwrap();
        let m = s.mean[0];
        assert!((u.mean[0] - (m + p / (p + r) * 7.0)).abs() < 1e-9);
        assert!((u.covariance[(0, 0)] - p * r / (p + r)).abs() < 1e-9);
    }

    #[test]
    fn converges_without_process_noise() {
        let kf = KalmanFilter::new(KalmanConfig {
            process_noise_scale: 0.0,
            measurement_noise_scale: 1e-3,
            ..KalmanConfig::default()
        });
        let truth = |t: f64| BoundingBox::from_xyah(100.0 + 2.0 * t, 80.0 - 0.5 * t, 0.4, 120.0);
        let mut s = kf.initiate(&truth(0.0));
        for t in 1..=20 {
            s = kf.predict(&s).unwrap();
            s = kf.update(&s, &truth(t as f64)).unwrap();
        }
        let want = truth(20.0).to_xyah();
        assert!((s.mean[0] - want[0]).abs() < 1e-6);
        assert!((s.mean[1] - want[1]).abs() < 1e-6);
    }

    #[test]
    fn negative_height_is_degenerate() {
        let (kf, mut s) = start();
        s.mean[7] = -1000.0;
        assert!(matches!(kf.predict(&s), Err(Error::NumericalDegeneracy(_))));
    }
}
