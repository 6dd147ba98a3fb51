//! Constant-velocity Kalman filter over the `[u, v, s, r]` box
//! parameterization (center, area, aspect ratio).

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use super::TrackingError;
use crate::geometry::BBox;

pub type StateVector = SVector<f64, 7>;
pub type StateCovariance = SMatrix<f64, 7, 7>;
pub type Observation = SVector<f64, 4>;

type ObservationMatrix = SMatrix<f64, 4, 7>;

/// `[u, v, s, r]` for a box with positive width and height.
pub fn bbox_to_state(b: &BBox) -> Result<Observation, TrackingError> {
    let (w, h) = (b.width(), b.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(TrackingError::DegenerateBox(*b));
    }
    let (u, v) = b.center();
    Ok(Observation::new(u, v, w * h, w / h))
}

pub fn state_to_bbox(obs: &Observation) -> Result<BBox, TrackingError> {
    let (u, v, s, r) = (obs[0], obs[1], obs[2], obs[3]);
    if !(s > 0.0 && r > 0.0) || !u.is_finite() || !v.is_finite() || !s.is_finite() {
        return Err(TrackingError::NonPositiveShape { area: s, aspect: r });
    }
    let w = (s * r).sqrt();
    let h = s / w;
    Ok(BBox {
        x_min: u - 0.5 * w,
        y_min: v - 0.5 * h,
        x_max: u + 0.5 * w,
        y_max: v + 0.5 * h,
    })
}

/// Noise settings, all diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanNoise {
    pub initial_covariance: [f64; 7],
    /// Per sampled step.
    pub process_noise: [f64; 7],
    pub measurement_noise: [f64; 4],
}

impl Default for KalmanNoise {
    fn default() -> Self {
        Self {
            initial_covariance: [10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4],
            process_noise: [1.0, 1.0, 1.0, 1.0, 1e-2, 1e-2, 1e-4],
            measurement_noise: [1.0, 1.0, 10.0, 10.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanBoxState {
    pub mean: StateVector,
    pub covariance: StateCovariance,
}

impl KalmanBoxState {
    /// Fresh state at the observed box with zero velocity.
    pub fn from_observation(z: &Observation, noise: &KalmanNoise) -> Self {
        let mut mean = StateVector::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from(z);
        Self {
            mean,
            covariance: StateCovariance::from_diagonal(&StateVector::from(noise.initial_covariance)),
        }
    }

    pub fn observation(&self) -> Observation {
        self.mean.fixed_rows::<4>(0).into_owned()
    }

    pub fn bbox(&self) -> Result<BBox, TrackingError> {
        state_to_bbox(&self.observation())
    }
}

pub fn transition(dt: u32) -> StateCovariance {
    let mut f = StateCovariance::identity();
    let dt = f64::from(dt);
    f[(0, 4)] = dt;
    f[(1, 5)] = dt;
    f[(2, 6)] = dt;
    f
}

fn observation_matrix() -> ObservationMatrix {
    ObservationMatrix::identity()
}

fn symmetrize(p: &StateCovariance) -> StateCovariance {
    (p + p.transpose()) * 0.5
}

/// Advances the state `dt` sampled steps: `x <- F x`, `P <- F P F^T + dt Q`.
pub fn kalman_predict(st: &KalmanBoxState, dt: u32, noise: &KalmanNoise) -> KalmanBoxState {
    let dt = dt.max(1);
    let f = transition(dt);
    let q = StateCovariance::from_diagonal(&StateVector::from(noise.process_noise)) * f64::from(dt);
    KalmanBoxState {
        mean: f * st.mean,
        covariance: symmetrize(&(f * st.covariance * f.transpose() + q)),
    }
}

/// Standard linear correction on the four observed components. The
/// covariance uses the Joseph form so it stays symmetric positive
/// semi-definite.
pub fn kalman_update(
    st: &KalmanBoxState,
    z: &Observation,
    noise: &KalmanNoise,
) -> Result<KalmanBoxState, TrackingError> {
    let h = observation_matrix();
    let r = SMatrix::<f64, 4, 4>::from_diagonal(&Observation::from(noise.measurement_noise));
    let innovation = z - h * st.mean;
    let s = h * st.covariance * h.transpose() + r;
    if s.determinant().abs() <= 1e-12 {
        return Err(TrackingError::SingularInnovation);
    }
    let s_inv = s.try_inverse().ok_or(TrackingError::SingularInnovation)?;
    let gain = st.covariance * h.transpose() * s_inv;
    let mean = st.mean + gain * innovation;
    let i_kh = StateCovariance::identity() - gain * h;
    let covariance = i_kh * st.covariance * i_kh.transpose() + gain * r * gain.transpose();
    Ok(KalmanBoxState {
        mean,
        covariance: symmetrize(&covariance),
    })
}
