//! Scalar rewards over generated images.
//!
//! Images are clamped to `[0, 1]` before scoring.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::flow_model::DatasetConfig;
use crate::numerics::Tensor;

fn channels(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [3, h, w] => Ok((h, w)),
        [c, _, _] => Err(Error::BadChannels(c)),
        ref s => Err(Error::ShapeMismatch(format!("expected C×H×W image, got {s:?}"))),
    }
}

/// Mean over pixels of `red − (green + blue)/2`.
pub fn redness(image: &Tensor) -> Result<f64> {
    let (h, w) = channels(image)?;
    let hw = h * w;
    let d = image.data();
    let total: f64 = (0..hw)
        .map(|p| {
            let r = d[p].clamp(0.0, 1.0);
            let g = d[hw + p].clamp(0.0, 1.0);
            let b = d[2 * hw + p].clamp(0.0, 1.0);
            r - 0.5 * (g + b)
        })
        .sum();
    Ok(total / hw as f64)
}

/// `exp(−MSE)` against the clean render of `target`, in `(0, 1]`.
pub fn class_template_reward(image: &Tensor, target: usize, data: &DatasetConfig) -> Result<f64> {
    channels(image)?;
    let template = data.template(target)?;
    if template.shape() != image.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?} vs template {:?}",
            image.shape(),
            template.shape()
        )));
    }
    let mse = image
        .data()
        .iter()
        .zip(template.data())
        .map(|(&a, &b)| {
            let d = a.clamp(0.0, 1.0) - b;
            d * d
        })
        .sum::<f64>()
        / image.len() as f64;
    Ok((-mse).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RewardKind {
    Redness,
    ClassTemplate,
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "redness" => Ok(RewardKind::Redness),
            "class_template" => Ok(RewardKind::ClassTemplate),
            other => Err(Error::Config(format!("unknown reward.kind {other:?}"))),
        }
    }
}

/// Which reward to apply and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Fixed target class for `class_template`; `None` scores against the
    /// class the sample was conditioned on.
    pub target: Option<usize>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            kind: RewardKind::Redness,
            target: None,
        }
    }
}

impl RewardSpec {
    pub fn score(&self, image: &Tensor, conditioned: usize, data: &DatasetConfig) -> Result<f64> {
        match self.kind {
            RewardKind::Redness => redness(image),
            RewardKind::ClassTemplate => class_template_reward(image, self.target.unwrap_or(conditioned), data),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn solid(rgb: [f64; 3], h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[3, h, w], |i| rgb[i / (h * w)])
    }

    #[test]
    fn redness_reference_colors() {
        assert_eq!(redness(&solid([1.0, 0.0, 0.0], 4, 5)).unwrap(), 1.0);
        assert_eq!(redness(&solid([0.3, 0.3, 0.3], 4, 5)).unwrap(), 0.0);
        assert_eq!(redness(&solid([0.0, 1.0, 1.0], 4, 5)).unwrap(), -1.0);
    }

    #[test]
    fn redness_rejects_wrong_channels() {
        assert!(matches!(
            redness(&Tensor::zeros(&[4, 2, 2])),
            Err(Error::BadChannels(4))
        ));
    }

    #[test]
    fn redness_clamps_out_of_box_pixels() {
        assert_eq!(redness(&solid([3.0, -1.0, -2.0], 2, 2)).unwrap(), 1.0);
    }

    #[test]
    fn template_reward_basics() {
        let cfg = DatasetConfig::default();
        for class in 0..cfg.num_classes() {
            let t = cfg.template(class).unwrap();
            assert_eq!(class_template_reward(&t, class, &cfg).unwrap(), 1.0);
            let r = class_template_reward(&Tensor::zeros(t.shape()), class, &cfg).unwrap();
            assert!(r > 0.0 && r < 1.0);
        }
        assert!(matches!(
            class_template_reward(&cfg.template(0).unwrap(), 99, &cfg),
            Err(Error::UnknownClass(_))
        ));
    }

    #[test]
    fn template_reward_decreases_with_noise() {
        let cfg = DatasetConfig::default();
        let template = cfg.template(4).unwrap();
        let levels: Vec<f64> = (0..20).map(|i| 0.02 + 0.05 * i as f64).collect();
        let mean_reward = |level: f64| {
            (0..20u64)
                .map(|seed| {
                    let noise = RngStream::new(seed).normal_tensor(template.shape());
                    let img = template.zip_map(&noise, |a, n| a + level * n).unwrap();
                    class_template_reward(&img, 4, &cfg).unwrap()
                })
                .sum::<f64>()
                / 20.0
        };
        let rewards: Vec<f64> = levels.iter().map(|&l| mean_reward(l)).collect();
        assert!(rewards.windows(2).all(|w| w[1] < w[0]), "{rewards:?}");
    }

    #[test]
    fn normalization_cancels_mean_versus_sum() {
        // Summing instead of averaging scales every reward by H·W; group
        // normalization removes the difference.
        let mut rng = RngStream::new(2);
        let imgs: Vec<Tensor> = (0..6)
            .map(|_| rng.normal_tensor(&[3, 4, 4]).map(|v| 0.5 + 0.2 * v))
            .collect();
        let means: Vec<f64> = imgs.iter().map(|i| redness(i).unwrap()).collect();
        let sums: Vec<f64> = means.iter().map(|m| m * 16.0).collect();
        let a = crate::sde_sampler::normalize_advantages(&means);
        let b = crate::sde_sampler::normalize_advantages(&sums);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn redness_is_affine_in_the_image(seed in 0u64..500, a in 0.0f64..1.0) {
            let mut rng = RngStream::new(seed);
            let i1 = Tensor::from_fn(&[3, 3, 4], |_| rng.uniform());
            let i2 = Tensor::from_fn(&[3, 3, 4], |_| rng.uniform());
            let mix = i1.zip_map(&i2, |p, q| a * p + (1.0 - a) * q).unwrap();
            let lhs = redness(&mix).unwrap();
            let rhs = a * redness(&i1).unwrap() + (1.0 - a) * redness(&i2).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn redness_ignores_pixel_order(seed in 0u64..500, shift in 1usize..12) {
            let mut rng = RngStream::new(seed);
            let img = Tensor::from_fn(&[3, 3, 4], |_| rng.uniform());
            let perm = Tensor::from_fn(&[3, 3, 4], |i| {
                let (c, p) = (i / 12, i % 12);
                img.data()[c * 12 + (p + shift) % 12]
            });
            prop_assert!((redness(&img).unwrap() - redness(&perm).unwrap()).abs() < 1e-12);
        }
    }
}
