use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default lower bound on `t` where the score is still evaluated.
pub const DEFAULT_T_FLOOR: f64 = 1e-3;

/// Linear rectified-flow interpolation `z_t = (1 − t)·x + t·ε`.
///
/// `t = 0` is data and `t = 1` is noise. The velocity network predicts
/// `dz/dt = ε − x`, the noise-minus-data direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSchedule {
    pub t_floor: f64,
}

impl Default for FlowSchedule {
    fn default() -> Self {
        Self {
            t_floor: DEFAULT_T_FLOOR,
        }
    }
}

impl FlowSchedule {
    #[inline]
    pub fn alpha(&self, t: f64) -> f64 {
        1.0 - t
    }

    #[inline]
    pub fn sigma(&self, t: f64) -> f64 {
        t
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= self.t_floor) || t > 1.0 {
            return Err(Error::SingularTime { t, floor: self.t_floor });
        }
        Ok(())
    }

    /// Interpolant `z_t` and its velocity target `ε − x`.
    pub fn interpolate(&self, x: &[f64], noise: &[f64], t: f64) -> (Vec<f64>, Vec<f64>) {
        let a = self.alpha(t);
        let s = self.sigma(t);
        x.iter().zip(noise).map(|(&xv, &ev)| (a * xv + s * ev, ev - xv)).unzip()
    }

    /// Scalar form of [`velocity_to_score`].
    #[inline]
    pub fn score_scalar(&self, z: f64, t: f64, v: f64) -> f64 {
        let x_hat = z - t * v;
        let s = self.sigma(t);
        -(z - self.alpha(t) * x_hat) / (s * s)
    }
}

/// Gaussian score `−(z − α_t·x̂)/σ_t²` with `x̂ = z − t·v` recovered from the
/// predicted velocity.
pub fn velocity_to_score(z: &Tensor, t: f64, v: &Tensor, schedule: &FlowSchedule) -> Result<Tensor> {
    schedule.check_time(t)?;
    z.zip_map(v, |zv, vv| schedule.score_scalar(zv, t, vv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    #[test]
    fn endpoints() {
        let s = FlowSchedule::default();
        assert_eq!((s.alpha(0.0), s.sigma(0.0)), (1.0, 0.0));
        assert_eq!((s.alpha(1.0), s.sigma(1.0)), (0.0, 1.0));
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            assert_eq!(s.alpha(t) + s.sigma(t), 1.0);
        }
    }

    #[test]
    fn scalar_substitution() {
        let s = FlowSchedule::default();
        let z = Tensor::full(&[1], 1.0);
        let v = Tensor::full(&[1], 0.8);
        let score = velocity_to_score(&z, 0.5, &v, &s).unwrap();
        // x̂ = 0.6, score = −(1.0 − 0.3)/0.25
        assert!((score.data()[0] + 2.8).abs() < 1e-12);
    }

    #[test]
    fn on_manifold_mean_has_zero_score() {
        let s = FlowSchedule::default();
        let t = 0.3;
        // z = α_t·x̂ with x̂ = z − t·v  ⇒  v = (z − z/α_t)/t
        let z = Tensor::new(vec![3], vec![0.4, -1.2, 2.0]).unwrap();
        let v = z.map(|zv| (zv - zv / s.alpha(t)) / t);
        let score = velocity_to_score(&z, t, &v, &s).unwrap();
        assert!(score.data().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn below_floor_is_singular() {
        let s = FlowSchedule::default();
        let z = Tensor::zeros(&[2]);
        assert!(matches!(
            velocity_to_score(&z, 1e-4, &z, &s),
            Err(Error::SingularTime { .. })
        ));
    }

    #[test]
    fn interpolant_recovers_data_from_velocity() {
        let s = FlowSchedule::default();
        let mut rng = RngStream::new(4);
        let x = rng.normal_tensor(&[10]);
        let e = rng.normal_tensor(&[10]);
        let (z, v) = s.interpolate(x.data(), e.data(), 0.37);
        for i in 0..10 {
            assert!((z[i] - 0.37 * v[i] - x.data()[i]).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn affine_in_z_and_v(seed in 0u64..1000, t in 0.01f64..1.0, a in -3.0f64..3.0) {
            let s = FlowSchedule::default();
            let mut rng = RngStream::new(seed);
            let (z1, z2, v1, v2) = (
                rng.normal_tensor(&[6]), rng.normal_tensor(&[6]),
                rng.normal_tensor(&[6]), rng.normal_tensor(&[6]),
            );
            let b = 1.0 - a;
            let zc = z1.zip_map(&z2, |p, q| a * p + b * q).unwrap();
            let vc = v1.zip_map(&v2, |p, q| a * p + b * q).unwrap();
            let lhs = velocity_to_score(&zc, t, &vc, &s).unwrap();
            let r1 = velocity_to_score(&z1, t, &v1, &s).unwrap();
            let r2 = velocity_to_score(&z2, t, &v2, &s).unwrap();
            for i in 0..6 {
                let rhs = a * r1.data()[i] + b * r2.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() < 1e-8 * (1.0 + rhs.abs()) / (t * t));
            }
        }
    }
}
