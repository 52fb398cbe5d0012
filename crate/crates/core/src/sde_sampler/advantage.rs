//! Group-relative advantage normalization.

/// Groups whose reward spread falls below this produce zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

/// `(r − mean)/std` with the population standard deviation.
pub fn normalize_advantages(rewards: &[f64]) -> Vec<f64> {
    normalize_advantages_checked(rewards).0
}

/// Like [`normalize_advantages`], also reporting whether the group was degenerate.
pub fn normalize_advantages_checked(rewards: &[f64]) -> (Vec<f64>, bool) {
    if rewards.is_empty() {
        return (Vec::new(), true);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= DEGENERATE_STD) {
        return (vec![0.0; rewards.len()], true);
    }
    (rewards.iter().map(|r| (r - mean) / std).collect(), false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_point_example() {
        let a = normalize_advantages(&[1.0, 2.0, 3.0]);
        let k = 1.5f64.sqrt();
        assert!((a[0] + k).abs() < 1e-12 && a[1].abs() < 1e-15 && (a[2] - k).abs() < 1e-12);
        assert!((a[0] + 1.224_74).abs() < 1e-5);
    }

    #[test]
    fn two_point_example() {
        assert_eq!(normalize_advantages(&[0.0, 1.0]), vec![-1.0, 1.0]);
    }

    #[test]
    fn constant_group_is_degenerate() {
        let (a, degenerate) = normalize_advantages_checked(&[0.4; 5]);
        assert!(degenerate);
        assert_eq!(a, vec![0.0; 5]);
        let (_, degenerate) = normalize_advantages_checked(&[0.4, 0.4 + 1e-10]);
        assert!(degenerate);
    }

    proptest! {
        #[test]
        fn zero_mean_unit_variance(r in prop::collection::vec(-5.0f64..5.0, 2..12)) {
            let (a, degenerate) = normalize_advantages_checked(&r);
            prop_assume!(!degenerate);
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|x| x * x).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-9);
        }

        #[test]
        fn affine_invariant(r in prop::collection::vec(-5.0f64..5.0, 2..12), scale in 0.1f64..10.0, shift in -10.0f64..10.0) {
            let (a, degenerate) = normalize_advantages_checked(&r);
            prop_assume!(!degenerate);
            let moved: Vec<f64> = r.iter().map(|x| scale * x + shift).collect();
            let b = normalize_advantages(&moved);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-8);
            }
        }
    }
}
