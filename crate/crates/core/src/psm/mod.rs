//! Perceptual structuring: images to nonnegative, mean-one allocation maps.
//!
//! Patch path: features → PCA → inversion-normalization of each retained
//! component → weighted aggregation. Channel path: softmax-of-means channel
//! weighting. Both then go through optional Gaussian smoothing on the
//! feature grid, bilinear upsampling to image resolution, clamping at zero,
//! and rescaling to mean one. Inputs without usable structure yield the
//! exact all-ones map.

mod features;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, gaussian_smooth_2d, pca_top_k, PcaResult, Tensor};

pub use features::{
    extract_features_toy, load_features, read_features, save_features, write_features, FeatureLayout, FeatureMap,
    FeatureOrigin, TOY_FEATURE_DIM,
};

/// Minimum value range for a component or channel map to carry structure.
pub const MIN_SPREAD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    VarianceWeighted,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PsmPath {
    PcaPatch,
    CnnChannel,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "variance_weighted" | "weighted" => Ok(Aggregation::VarianceWeighted),
            "average" => Ok(Aggregation::Average),
            other => Err(Error::Config(format!("unknown aggregation {other:?}"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::VarianceWeighted => "variance_weighted",
            Aggregation::Average => "average",
        })
    }
}

impl FromStr for PsmPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "pca_patch" => Ok(PsmPath::PcaPatch),
            "cnn_channel" => Ok(PsmPath::CnnChannel),
            other => Err(Error::Config(format!("unknown psm path {other:?}"))),
        }
    }
}

impl fmt::Display for PsmPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PsmPath::PcaPatch => "pca_patch",
            PsmPath::CnnChannel => "cnn_channel",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsmConfig {
    /// Retained principal components.
    pub k: usize,
    /// Smoothing bandwidth in feature-grid cells.
    pub sigma: f64,
    pub smoothing_enabled: bool,
    pub aggregation: Aggregation,
    pub path: PsmPath,
    /// Toy extractor patch size in pixels.
    pub patch: usize,
    /// Give low projections high weight. When false, components are
    /// min-max normalized without flipping.
    pub invert: bool,
}

impl Default for PsmConfig {
    fn default() -> Self {
        Self {
            k: 3,
            sigma: 1.0,
            smoothing_enabled: true,
            aggregation: Aggregation::VarianceWeighted,
            path: PsmPath::PcaPatch,
            patch: 2,
            invert: true,
        }
    }
}

impl PsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("psm k must be ≥ 1".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "psm sigma must be ≥ 0, got {}",
                self.sigma
            )));
        }
        if self.patch == 0 {
            return Err(Error::InvalidArgument("psm patch must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-position weights at generation resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationMap {
    /// `H×W`, or `T×H×W` for frame sequences.
    pub weights: Tensor,
    /// Number of images (frames) that fell back to the uniform map.
    pub fallback_frames: usize,
    pub config: PsmConfig,
}

impl AllocationMap {
    pub fn uniform(h: usize, w: usize, config: PsmConfig) -> Self {
        Self {
            weights: Tensor::ones(&[h, w]),
            fallback_frames: 0,
            config,
        }
    }

    pub fn is_fallback(&self) -> bool {
        self.fallback_frames > 0
    }
}

/// `(max − z)/(max − min)` elementwise: the minimum maps to 1, the maximum to 0.
pub fn invert_normalize(component: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = min_max(component);
    let range = hi - lo;
    if !(range >= MIN_SPREAD) {
        return Err(Error::DegenerateComponent(range));
    }
    Ok(component.iter().map(|z| (hi - z) / range).collect())
}

fn min_max_normalize(component: &[f64]) -> Result<Vec<f64>> {
    let (lo, hi) = min_max(component);
    let range = hi - lo;
    if !(range >= MIN_SPREAD) {
        return Err(Error::DegenerateComponent(range));
    }
    Ok(component.iter().map(|z| (z - lo) / range).collect())
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
        (lo.min(x), hi.max(x))
    })
}

/// `Σ_j w_j·z_j` per position.
///
/// Terms at each position are summed in ascending order, so the result is
/// bitwise independent of the component order.
pub fn weighted_sum(components: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if components.len() != weights.len() || components.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} components with {} weights",
            components.len(),
            weights.len()
        )));
    }
    let n = components[0].len();
    if components.iter().any(|c| c.len() != n) {
        return Err(Error::ShapeMismatch("components differ in length".into()));
    }
    let mut terms = vec![0.0; components.len()];
    Ok((0..n)
        .map(|p| {
            for (t, (c, w)) in terms.iter_mut().zip(components.iter().zip(weights)) {
                *t = w * c[p];
            }
            terms.sort_by(f64::total_cmp);
            terms.iter().sum()
        })
        .collect())
}

/// Normalized component maps `z'_j` over the patch rows of `pca`.
///
/// A component without spatial variation contributes zeros.
pub fn normalized_components(pca: &PcaResult, invert: bool) -> Vec<Vec<f64>> {
    (0..pca.k())
        .map(|j| {
            let scores = pca.component_scores(j);
            let z = if invert {
                invert_normalize(&scores)
            } else {
                min_max_normalize(&scores)
            };
            z.unwrap_or_else(|e| {
                log::debug!("component {j} ignored: {e}");
                vec![0.0; scores.len()]
            })
        })
        .collect()
}

/// Combine retained components into an `H_p×W_p` saliency map.
pub fn aggregate_components(pca: &PcaResult, cfg: &PsmConfig, grid: (usize, usize)) -> Result<Tensor> {
    let comps = normalized_components(pca, cfg.invert);
    let weights: Vec<f64> = match cfg.aggregation {
        Aggregation::VarianceWeighted => pca.variance_ratios.clone(),
        Aggregation::Average => vec![1.0 / pca.k() as f64; pca.k()],
    };
    Tensor::new(vec![grid.0, grid.1], weighted_sum(&comps, &weights)?)
}

/// Softmax over channels of their spatial means.
pub fn channel_weights(features: &FeatureMap) -> Result<Vec<f64>> {
    if features.layout != FeatureLayout::ChannelGrid {
        return Err(Error::InvalidArgument(
            "channel weights need a channel-grid feature map".into(),
        ));
    }
    let c = features.dim();
    let n = features.grid.0 * features.grid.1;
    let means: Vec<f64> = features
        .values
        .data()
        .chunks_exact(n)
        .map(|ch| ch.iter().sum::<f64>() / n as f64)
        .collect();
    let top = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = means.iter().map(|m| (m - top).exp()).collect();
    let z: f64 = e.iter().sum();
    debug_assert_eq!(e.len(), c);
    Ok(e.into_iter().map(|v| v / z).collect())
}

/// `S = Σ_c α_c F_c` with `α` from [`channel_weights`].
pub fn cnn_channel_map(features: &FeatureMap) -> Result<Tensor> {
    let alpha = channel_weights(features)?;
    let (h, w) = features.grid;
    let n = h * w;
    let v = features.values.data();
    let mut s = vec![0.0; n];
    for (ch, a) in v.chunks_exact(n).zip(&alpha) {
        for (o, x) in s.iter_mut().zip(ch) {
            *o += a * x;
        }
    }
    Tensor::new(vec![h, w], s)
}

/// Pre-smoothing saliency on the feature grid.
pub fn saliency_from_features(features: &FeatureMap, cfg: &PsmConfig) -> Result<Tensor> {
    match cfg.path {
        PsmPath::PcaPatch => {
            let rows = features.to_patch_grid()?;
            let k = cfg.k.min(rows.dim()).min(rows.values.shape()[0]);
            if k < cfg.k {
                log::debug!("psm k={} clipped to {k}", cfg.k);
            }
            let pca = pca_top_k(&rows.values, k)?;
            aggregate_components(&pca, cfg, rows.grid)
        }
        PsmPath::CnnChannel => {
            let s = cnn_channel_map(&features.to_channel_grid()?)?;
            let spread = s.max() - s.min();
            if !(spread >= MIN_SPREAD) {
                return Err(Error::DegenerateFeatures(spread));
            }
            Ok(s)
        }
    }
}

/// Pre-smoothing saliency of an image via the toy extractor.
pub fn patch_saliency(image: &Tensor, cfg: &PsmConfig) -> Result<Tensor> {
    saliency_from_features(&extract_features_toy(image, cfg.patch)?, cfg)
}

/// Normalized component maps on the patch grid, for visualization.
pub fn component_maps(image: &Tensor, cfg: &PsmConfig) -> Result<Vec<Tensor>> {
    let rows = extract_features_toy(image, cfg.patch)?;
    let k = cfg.k.min(rows.dim());
    let pca = pca_top_k(&rows.values, k)?;
    normalized_components(&pca, cfg.invert)
        .into_iter()
        .map(|c| Tensor::new(vec![rows.grid.0, rows.grid.1], c))
        .collect()
}

/// Smooth, upsample, clamp and rescale a grid saliency to a mean-one map.
///
/// Returns `None` when nothing positive survives.
pub fn finish_map(saliency: &Tensor, cfg: &PsmConfig, h: usize, w: usize) -> Result<Option<Tensor>> {
    let smoothed = if cfg.smoothing_enabled {
        gaussian_smooth_2d(saliency, cfg.sigma)?
    } else {
        saliency.clone()
    };
    let up = bilinear_resize(&smoothed, h, w)?.map(|v| v.max(0.0));
    let mean = up.mean();
    if !(mean > 0.0) || !mean.is_finite() {
        return Ok(None);
    }
    Ok(Some(up.map(|v| v / mean)))
}

/// Where features for [`build_allocation_map`] come from.
#[derive(Clone, Copy, Debug)]
pub enum FeatureSource<'a> {
    Toy,
    /// One feature map per image or frame, e.g. loaded from `VIPF` files.
    Precomputed(&'a [FeatureMap]),
}

fn frame_map(
    image: &Tensor,
    features: Option<&FeatureMap>,
    cfg: &PsmConfig,
    h: usize,
    w: usize,
) -> Result<(Tensor, bool)> {
    let saliency = match features {
        Some(f) => saliency_from_features(f, cfg),
        None => patch_saliency(image, cfg),
    };
    let finished = match saliency {
        Ok(s) => finish_map(&s, cfg, h, w)?,
        Err(Error::DegenerateFeatures(v)) => {
            log::warn!("allocation map fell back to uniform: degenerate features ({v:.3e})");
            return Ok((Tensor::ones(&[h, w]), true));
        }
        Err(e) => return Err(e),
    };
    Ok(match finished {
        Some(m) => (m, false),
        None => {
            log::warn!("allocation map fell back to uniform: no positive weight");
            (Tensor::ones(&[h, w]), true)
        }
    })
}

/// Allocation map of a `3×H×W` image or a `T×3×H×W` frame sequence.
pub fn build_allocation_map(input: &Tensor, cfg: &PsmConfig, source: FeatureSource<'_>) -> Result<AllocationMap> {
    cfg.validate()?;
    let frames: Vec<Tensor> = match *input.shape() {
        [3, _, _] => vec![input.clone()],
        [t, 3, _, _] => (0..t).map(|i| input.slice_outer(i)).collect::<Result<_>>()?,
        [c, _, _] | [_, c, _, _] => return Err(Error::BadChannels(c)),
        ref s => return Err(Error::ShapeMismatch(format!("expected 3×H×W or T×3×H×W, got {s:?}"))),
    };
    let shape = frames[0].shape();
    let (h, w) = (shape[1], shape[2]);
    if let FeatureSource::Precomputed(fs) = source {
        if fs.len() != frames.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} feature maps for {} frames",
                fs.len(),
                frames.len()
            )));
        }
    }
    let mut slices = Vec::with_capacity(frames.len());
    let mut fallback_frames = 0;
    for (i, frame) in frames.iter().enumerate() {
        let features = match source {
            FeatureSource::Toy => None,
            FeatureSource::Precomputed(fs) => Some(&fs[i]),
        };
        let (m, fell_back) = frame_map(frame, features, cfg, h, w)?;
        fallback_frames += fell_back as usize;
        slices.push(m);
    }
    let weights = if input.shape().len() == 3 {
        slices.pop().expect("one frame")
    } else {
        Tensor::stack(&slices)?
    };
    Ok(AllocationMap {
        weights,
        fallback_frames,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_model::DatasetConfig;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn red_square() -> Tensor {
        let cfg = DatasetConfig::default();
        cfg.template(cfg.class_index(&"red_square_on_gray".parse().unwrap()).unwrap())
            .unwrap()
    }

    #[test]
    fn invert_normalize_examples() {
        assert_eq!(invert_normalize(&[0.0, 5.0, 10.0]).unwrap(), vec![1.0, 0.5, 0.0]);
        assert!(matches!(
            invert_normalize(&[2.0; 4]),
            Err(Error::DegenerateComponent(_))
        ));
    }

    #[test]
    fn aggregation_substitution() {
        let comps = vec![vec![1.0; 4], vec![0.0; 4]];
        assert_eq!(weighted_sum(&comps, &[0.8, 0.2]).unwrap(), vec![0.8; 4]);
        assert_eq!(weighted_sum(&comps, &[0.5, 0.5]).unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn single_component_modes_agree_after_normalization() {
        let img = red_square();
        let mk = |aggregation| PsmConfig {
            k: 1,
            aggregation,
            ..Default::default()
        };
        let a = build_allocation_map(&img, &mk(Aggregation::VarianceWeighted), FeatureSource::Toy).unwrap();
        let b = build_allocation_map(&img, &mk(Aggregation::Average), FeatureSource::Toy).unwrap();
        for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_weights_examples() {
        let one = FeatureMap::channel_grid(Tensor::from_fn(&[1, 2, 2], |i| i as f64), FeatureOrigin::File).unwrap();
        assert_eq!(channel_weights(&one).unwrap(), vec![1.0]);
        assert_eq!(cnn_channel_map(&one).unwrap().data(), &[0.0, 1.0, 2.0, 3.0]);

        let eq = FeatureMap::channel_grid(
            Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap(),
            FeatureOrigin::File,
        )
        .unwrap();
        assert_eq!(channel_weights(&eq).unwrap(), vec![0.5, 0.5]);
        assert_eq!(cnn_channel_map(&eq).unwrap().data(), &[2.0, 2.0]);

        let delta = 0.7;
        let diff = FeatureMap::channel_grid(
            Tensor::new(vec![2, 1, 2], vec![0.0, 1.0, delta, 1.0 + delta]).unwrap(),
            FeatureOrigin::File,
        )
        .unwrap();
        let a = channel_weights(&diff).unwrap();
        let expect = 1.0 / (1.0 + delta.exp());
        assert!((a[0] - expect).abs() < 1e-15 && (a[0] + a[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_image_falls_back_exactly() {
        for path in [PsmPath::PcaPatch, PsmPath::CnnChannel] {
            let cfg = PsmConfig {
                path,
                ..Default::default()
            };
            let m = build_allocation_map(&Tensor::full(&[3, 16, 16], 0.4), &cfg, FeatureSource::Toy).unwrap();
            assert!(m.is_fallback());
            assert_eq!(m.weights, Tensor::ones(&[16, 16]));
        }
    }

    #[test]
    fn red_square_map_is_structured() {
        for path in [PsmPath::PcaPatch, PsmPath::CnnChannel] {
            let cfg = PsmConfig {
                path,
                ..Default::default()
            };
            let m = build_allocation_map(&red_square(), &cfg, FeatureSource::Toy).unwrap();
            assert!(!m.is_fallback());
            assert_eq!(m.weights.shape(), &[16, 16]);
            assert!((m.weights.mean() - 1.0).abs() < 1e-9);
            assert!(m.weights.min() >= 0.0);
            assert!(m.weights.max() - m.weights.min() > 1e-3);
        }
    }

    #[test]
    fn identical_frames_give_identical_slices() {
        let img = red_square();
        let seq = Tensor::stack(&[img.clone(), img.clone(), img.clone(), img]).unwrap();
        let m = build_allocation_map(&seq, &PsmConfig::default(), FeatureSource::Toy).unwrap();
        assert_eq!(m.weights.shape(), &[4, 16, 16]);
        let first = m.weights.slice_outer(0).unwrap();
        for t in 1..4 {
            assert_eq!(m.weights.slice_outer(t).unwrap(), first);
        }
    }

    #[test]
    fn precomputed_features_match_toy_path() {
        let img = red_square();
        let fm = extract_features_toy(&img, 2).unwrap();
        let cfg = PsmConfig::default();
        let a = build_allocation_map(&img, &cfg, FeatureSource::Toy).unwrap();
        let b = build_allocation_map(&img, &cfg, FeatureSource::Precomputed(std::slice::from_ref(&fm))).unwrap();
        assert_eq!(a.weights, b.weights);
        assert!(build_allocation_map(&img, &cfg, FeatureSource::Precomputed(&[])).is_err());
    }

    #[test]
    fn square_translation_shifts_patch_map() {
        let cfg = PsmConfig {
            patch: 2,
            ..Default::default()
        };
        let square = |y0: usize, x0: usize| {
            Tensor::from_fn(&[3, 16, 16], |i| {
                let (c, y, x) = (i / 256, (i / 16) % 16, i % 16);
                let inside = (y0..y0 + 6).contains(&y) && (x0..x0 + 6).contains(&x);
                if inside {
                    [1.0, 0.0, 0.0][c]
                } else {
                    0.5
                }
            })
        };
        let a = patch_saliency(&square(4, 4), &cfg).unwrap();
        let b = patch_saliency(&square(4, 6), &cfg).unwrap();
        for gy in 0..8 {
            for gx in 1..8 {
                assert!((b.at2(gy, gx) - a.at2(gy, gx - 1)).abs() < 1e-9, "cell ({gy},{gx})");
            }
        }
    }

    proptest! {
        #[test]
        fn invert_twice_is_complement(v in prop::collection::vec(-10.0f64..10.0, 3..20)) {
            let once = match invert_normalize(&v) {
                Ok(o) => o,
                Err(_) => return Ok(()),
            };
            let twice = invert_normalize(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((b - (1.0 - a)).abs() < 1e-12);
            }
        }

        #[test]
        fn weighted_sum_permutation_is_bitwise(seed in 0u64..1000, k in 1usize..6, rot in 0usize..6) {
            let mut rng = RngStream::new(seed);
            let comps: Vec<Vec<f64>> = (0..k).map(|_| (0..16).map(|_| rng.uniform()).collect()).collect();
            let w: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let mut pc = comps.clone();
            let mut pw = w.clone();
            pc.rotate_left(rot % k);
            pw.rotate_left(rot % k);
            pc.reverse();
            pw.reverse();
            prop_assert_eq!(weighted_sum(&comps, &w).unwrap(), weighted_sum(&pc, &pw).unwrap());
        }

        #[test]
        fn random_images_give_valid_maps(seed in 0u64..10_000) {
            let mut rng = RngStream::new(seed);
            let img = Tensor::from_fn(&[3, 16, 16], |_| rng.uniform());
            let m = build_allocation_map(&img, &PsmConfig::default(), FeatureSource::Toy).unwrap();
            prop_assert!((m.weights.mean() - 1.0).abs() < 1e-9);
            prop_assert!(m.weights.min() >= 0.0);
        }
    }
}
