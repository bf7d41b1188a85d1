//! Constant-velocity Kalman filter over the bottom-centre box state
//! `[u, v, r, h, u', v', r', h']`.

use nalgebra::{SMatrix, SVector};

use crate::ingest::Detection;

pub type Mean = SVector<f64, 8>;
pub type Covariance = SMatrix<f64, 8, 8>;
type ObsVector = SVector<f64, 4>;
type ObsMatrix = SMatrix<f64, 4, 4>;
type Projection = SMatrix<f64, 4, 8>;

const STD_WEIGHT_POSITION: f64 = 1.0 / 20.0;
const STD_WEIGHT_VELOCITY: f64 = 1.0 / 160.0;
const STD_ASPECT: f64 = 1e-2;
const STD_ASPECT_VELOCITY: f64 = 1e-5;
const STD_ASPECT_MEASUREMENT: f64 = 1e-1;

/// 0.95 quantile of the chi-square distribution with 4 degrees of freedom.
pub const GATING_THRESHOLD: f64 = 9.4877;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
#[error("innovation covariance is not invertible")]
pub struct SingularInnovation;

/// Box measurement: bottom-centre `(u, v)`, aspect ratio `r = w / h` and height `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub u: f64,
    pub v: f64,
    pub r: f64,
    pub h: f64,
}

impl Observation {
    fn vector(&self) -> ObsVector {
        ObsVector::new(self.u, self.v, self.r, self.h)
    }

    /// Back to corner form `(x1, y1, x2, y2)`.
    pub fn to_corners(&self) -> [f64; 4] {
        let w = self.r * self.h;
        [self.u - w / 2.0, self.v - self.h, self.u + w / 2.0, self.v]
    }
}

pub fn to_observation(d: &Detection) -> Observation {
    let h = d.y2 - d.y1;
    Observation { u: (d.x1 + d.x2) / 2.0, v: d.y2, r: (d.x2 - d.x1) / h, h }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanState {
    pub mean: Mean,
    pub cov: Covariance,
}

impl KalmanState {
    /// The predicted measurement `[u, v, r, h]`.
    pub fn observation(&self) -> Observation {
        Observation { u: self.mean[0], v: self.mean[1], r: self.mean[2], h: self.mean[3] }
    }
}

fn transition() -> Covariance {
    let mut f = Covariance::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn projection() -> Projection {
    let mut h = Projection::zeros();
    for i in 0..4 {
        h[(i, i)] = 1.0;
    }
    h
}

fn symmetrize(m: &Covariance) -> Covariance {
    (m + m.transpose()) * 0.5
}

pub fn kf_initiate(obs: &Observation) -> KalmanState {
    let mut mean = Mean::zeros();
    mean.fixed_rows_mut::<4>(0).copy_from(&obs.vector());
    let h = obs.h;
    let std = [
        2.0 * STD_WEIGHT_POSITION * h,
        2.0 * STD_WEIGHT_POSITION * h,
        STD_ASPECT,
        2.0 * STD_WEIGHT_POSITION * h,
        10.0 * STD_WEIGHT_VELOCITY * h,
        10.0 * STD_WEIGHT_VELOCITY * h,
        STD_ASPECT_VELOCITY,
        10.0 * STD_WEIGHT_VELOCITY * h,
    ];
    let cov = Covariance::from_diagonal(&Mean::from_iterator(std.iter().map(|s| s * s)));
    KalmanState { mean, cov }
}

/// Advances the state by one frame.
pub fn kf_predict(s: &KalmanState) -> KalmanState {
    let h = s.mean[3];
    let std = [
        STD_WEIGHT_POSITION * h,
        STD_WEIGHT_POSITION * h,
        STD_ASPECT,
        STD_WEIGHT_POSITION * h,
        STD_WEIGHT_VELOCITY * h,
        STD_WEIGHT_VELOCITY * h,
        STD_ASPECT_VELOCITY,
        STD_WEIGHT_VELOCITY * h,
    ];
    let q = Covariance::from_diagonal(&Mean::from_iterator(std.iter().map(|s| s * s)));
    let f = transition();
    KalmanState { mean: f * s.mean, cov: symmetrize(&(f * s.cov * f.transpose() + q)) }
}

fn measurement_noise(h: f64) -> ObsMatrix {
    let std = [STD_WEIGHT_POSITION * h, STD_WEIGHT_POSITION * h, STD_ASPECT_MEASUREMENT, STD_WEIGHT_POSITION * h];
    ObsMatrix::from_diagonal(&ObsVector::from_iterator(std.iter().map(|s| s * s)))
}

/// Projected mean and innovation covariance `S = H P H^T + R`.
fn project(s: &KalmanState) -> (ObsVector, ObsMatrix) {
    let hm = projection();
    let mean = hm * s.mean;
    let cov = hm * s.cov * hm.transpose() + measurement_noise(s.mean[3]);
    (mean, cov)
}

/// Kalman correction, after which the positional part of the mean is set to
/// the matched observation. Velocities and covariance keep their filtered values.
pub fn kf_update(s: &KalmanState, obs: &Observation) -> Result<KalmanState, SingularInnovation> {
    let (proj_mean, proj_cov) = project(s);
    let chol = proj_cov.cholesky().ok_or(SingularInnovation)?;
    let hm = projection();
    // K = P H^T S^-1
    let pht = s.cov * hm.transpose();
    let gain = chol.solve(&pht.transpose()).transpose();
    let innovation = obs.vector() - proj_mean;
    let mut mean = s.mean + gain * innovation;
    // Joseph form keeps the posterior symmetric positive semi-definite.
    let i_kh = Covariance::identity() - gain * hm;
    let cov = i_kh * s.cov * i_kh.transpose() + gain * measurement_noise(s.mean[3]) * gain.transpose();
    mean[0] = obs.u;
    mean[1] = obs.v;
    mean[2] = obs.r;
    mean[3] = obs.h;
    Ok(KalmanState { mean, cov: symmetrize(&cov) })
}

/// Squared Mahalanobis distance of `obs` from the projected state.
pub fn gating_distance(s: &KalmanState, obs: &Observation) -> Result<f64, SingularInnovation> {
    let (proj_mean, proj_cov) = project(s);
    let chol = proj_cov.cholesky().ok_or(SingularInnovation)?;
    let d = obs.vector() - proj_mean;
    let z = chol.l().solve_lower_triangular(&d).ok_or(SingularInnovation)?;
    Ok(z.norm_squared())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::VehicleClass;
    use rand::{Rng, SeedableRng};

    fn obs(u: f64, v: f64, r: f64, h: f64) -> Observation {
        Observation { u, v, r, h }
    }

    #[test]
    fn observation_from_box() {
        let d = |x1, y1, x2, y2| Detection::new(x1, y1, x2, y2, 1.0, VehicleClass::Car).unwrap();
        assert_eq!(to_observation(&d(0.0, 0.0, 10.0, 20.0)), obs(5.0, 20.0, 0.5, 20.0));
        assert_eq!(to_observation(&d(0.0, 0.0, 1.0, 1.0)), obs(0.5, 1.0, 1.0, 1.0));
        assert_eq!(to_observation(&d(2.0, 3.0, 6.0, 5.0)), obs(4.0, 5.0, 2.0, 2.0));
        assert_eq!(obs(4.0, 5.0, 2.0, 2.0).to_corners(), [2.0, 3.0, 6.0, 5.0]);
    }

    #[test]
    fn initiate() {
        let s = kf_initiate(&obs(5.0, 20.0, 0.5, 20.0));
        assert_eq!(s.mean.as_slice(), &[5.0, 20.0, 0.5, 20.0, 0.0, 0.0, 0.0, 0.0]);
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    assert_eq!(s.cov[(i, j)], 0.0);
                }
            }
            assert!(s.cov[(i, i)] > 0.0);
        }
        assert_eq!(s, kf_initiate(&obs(5.0, 20.0, 0.5, 20.0)));
    }

    #[test]
    fn predict() {
        let s = kf_initiate(&obs(1.0, 2.0, 0.5, 10.0));
        let p = kf_predict(&s);
        assert_eq!(&p.mean.as_slice()[..4], &[1.0, 2.0, 0.5, 10.0]);
        assert!(p.cov.trace() > s.cov.trace());

        let mut moving = kf_initiate(&obs(0.0, 0.0, 1.0, 10.0));
        moving.mean[4] = 2.0;
        moving.mean[5] = 3.0;
        assert_eq!(&kf_predict(&moving).mean.as_slice()[..4], &[2.0, 3.0, 1.0, 10.0]);
    }

    #[test]
    fn update_replaces_position() {
        let s = kf_predict(&kf_initiate(&obs(0.0, 0.0, 0.4, 18.0)));
        let o = obs(5.0, 20.0, 0.5, 20.0);
        let post = kf_update(&s, &o).unwrap();
        assert_eq!(&post.mean.as_slice()[..4], &[5.0, 20.0, 0.5, 20.0]);
    }

    #[test]
    fn zero_innovation_keeps_velocity() {
        let mut s = kf_initiate(&obs(10.0, 10.0, 0.5, 20.0));
        s.mean[4] = 1.5;
        s.mean[5] = -0.5;
        let s = kf_predict(&s);
        let post = kf_update(&s, &s.observation()).unwrap();
        for i in 4..8 {
            assert!((post.mean[i] - s.mean[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_velocity_converges() {
        // scripted run: box moving 4 px/frame right and 1.5 px/frame down
        let truth = |t: f64| obs(100.0 + 4.0 * t, 200.0 + 1.5 * t, 0.5, 40.0);
        let mut s = kf_initiate(&truth(0.0));
        let mut err = f64::INFINITY;
        for t in 1..=10 {
            s = kf_predict(&s);
            let pred = s.observation();
            let tr = truth(t as f64);
            err = ((pred.u - tr.u).powi(2) + (pred.v - tr.v).powi(2)).sqrt();
            s = kf_update(&s, &tr).unwrap();
        }
        assert!(err <= 1.0, "prediction error {err}");
    }

    #[test]
    fn gating() {
        let s = kf_predict(&kf_initiate(&obs(50.0, 80.0, 0.5, 30.0)));
        assert!(gating_distance(&s, &s.observation()).unwrap().abs() < 1e-12);

        // Projected positions are uncorrelated here, so an offset in u alone
        // reduces to the 1-D case innovation^2 / variance (2^2 / 4 = 1).
        let (_, cov) = project(&s);
        let var_u = cov[(0, 0)];
        let mut o = s.observation();
        o.u += 2.0 * (var_u / 4.0).sqrt();
        assert!((gating_distance(&s, &o).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mahalanobis_scale_invariance() {
        let s = kf_predict(&kf_initiate(&obs(50.0, 80.0, 0.5, 30.0)));
        let o = obs(53.0, 78.0, 0.52, 31.0);
        let d1 = gating_distance(&s, &o).unwrap();
        // rescale every unit by 2 (variances by 4) consistently
        let (m, c) = project(&s);
        let scaled = (c * 4.0).cholesky().unwrap();
        let diff = (o.vector() - m) * 2.0;
        let z = scaled.l().solve_lower_triangular(&diff).unwrap();
        assert!((z.norm_squared() - d1).abs() < 1e-9);
    }

    #[test]
    fn covariance_stays_psd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut s = kf_initiate(&obs(300.0, 400.0, 0.6, 50.0));
        for _ in 0..1000 {
            s = kf_predict(&s);
            if rng.random_bool(0.7) {
                let o = obs(
                    s.mean[0] + rng.random_range(-5.0..5.0),
                    s.mean[1] + rng.random_range(-5.0..5.0),
                    (s.mean[2] + rng.random_range(-0.05..0.05)).max(0.1),
                    (s.mean[3] + rng.random_range(-2.0..2.0)).clamp(10.0, 200.0),
                );
                s = kf_update(&s, &o).unwrap();
            }
            assert!((s.cov - s.cov.transpose()).abs().max() <= 1e-9);
            let eig = s.cov.symmetric_eigenvalues();
            assert!(eig.iter().all(|&e| e >= -1e-9));
        }
    }
}
