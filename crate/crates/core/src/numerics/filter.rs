//! Separable Gaussian smoothing and bilinear resampling for 2-D maps.

use super::Tensor;
use crate::error::{Error, Result};

fn dims2(map: &Tensor) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] if h > 0 && w > 0 => Ok((h, w)),
        ref s => Err(Error::ShapeMismatch(format!("expected a non-empty H×W map, got {s:?}"))),
    }
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|o| (-(o * o) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|v| v / total).collect()
}

/// Half-sample symmetric reflection of `i` into `0..n`, valid for any offset.
#[inline]
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m >= n { period - 1 - m } else { m }) as usize
}

fn convolve_axis(src: &[f64], h: usize, w: usize, taps: &[f64], along_rows: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let center = src[y * w + x];
            // Accumulate deviations from the center tap: exact on constant input.
            let mut acc = 0.0;
            for (k, &wt) in taps.iter().enumerate() {
                let o = k as i64 - r;
                let v = if along_rows {
                    src[y * w + reflect(x as i64 + o, w)]
                } else {
                    src[reflect(y as i64 + o, h) * w + x]
                };
                acc += wt * (v - center);
            }
            out[y * w + x] = center + acc;
        }
    }
    out
}

/// Gaussian blur with reflective boundaries. `sigma == 0` is the identity.
pub fn gaussian_smooth_2d(map: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = dims2(map)?;
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be ≥ 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let taps = gaussian_kernel(sigma);
    let horizontal = convolve_axis(map.data(), h, w, &taps, true);
    let both = convolve_axis(&horizontal, h, w, &taps, false);
    Tensor::new(vec![h, w], both)
}

#[inline]
fn lerp(a: f64, b: f64, f: f64) -> f64 {
    (a + f * (b - a)).clamp(a.min(b), a.max(b))
}

/// Source coordinate and blend factor under the half-pixel-center convention.
#[inline]
fn source_coord(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, s - lo as f64)
}

/// Bilinear resampling with sample centers at `(i + 0.5)·scale − 0.5`.
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = dims2(map)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("output size must be ≥ 1".into()));
    }
    let src = map.data();
    let cols: Vec<_> = (0..out_w).map(|j| source_coord(j, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (y0, y1, fy) = source_coord(i, h, out_h);
        for &(x0, x1, fx) in &cols {
            let top = lerp(src[y0 * w + x0], src[y0 * w + x1], fx);
            let bottom = lerp(src[y1 * w + x0], src[y1 * w + x1], fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn constant_map_survives_smoothing_exactly() {
        for &c in &[0.7, 1.0 / 3.0, 123.456] {
            let map = Tensor::full(&[5, 9], c);
            for &sigma in &[0.5, 1.0, 1.5, 2.0, 4.0] {
                let out = gaussian_smooth_2d(&map, sigma).unwrap();
                assert!(out.data().iter().all(|&v| v == c), "sigma {sigma}");
            }
        }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let map = RngStream::new(5).normal_tensor(&[6, 7]);
        assert_eq!(gaussian_smooth_2d(&map, 0.0).unwrap(), map);
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(gaussian_smooth_2d(&Tensor::ones(&[2, 2]), -1.0).is_err());
    }

    #[test]
    fn impulse_center_matches_kernel_center_weight() {
        let mut map = Tensor::zeros(&[7, 7]);
        map.data_mut()[3 * 7 + 3] = 1.0;
        let out = gaussian_smooth_2d(&map, 1.0).unwrap();
        // Direct 2-D kernel evaluation over the 7×7 support.
        let total: f64 = (-3i32..=3)
            .flat_map(|i| (-3i32..=3).map(move |j| (-((i * i + j * j) as f64) / 2.0).exp()))
            .sum();
        let expected = 1.0 / total;
        assert!((out.at2(3, 3) - expected).abs() < 1e-15);
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reflection_handles_large_radius() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-3, 4), 2);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(9, 4), 1);
        assert_eq!(reflect(-7, 1), 0);
        let map = RngStream::new(9).normal_tensor(&[2, 3]);
        let out = gaussian_smooth_2d(&map, 2.0).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn resize_constant_and_single_source() {
        let out = bilinear_resize(&Tensor::full(&[2, 2], 0.7), 5, 5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));
        let out = bilinear_resize(&Tensor::full(&[1, 1], -2.5), 3, 8).unwrap();
        assert_eq!(out.shape(), &[3, 8]);
        assert!(out.data().iter().all(|&v| v == -2.5));
    }

    #[test]
    fn resize_half_pixel_centers() {
        let map = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let out = bilinear_resize(&map, 2, 4).unwrap();
        // Source columns: clamp(-0.25)=0, 0.25, 0.75, clamp(1.25)=1.
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_stays_within_input_range() {
        let mut rng = RngStream::new(21);
        for _ in 0..20 {
            let map = rng.normal_tensor(&[3, 5]);
            let out = bilinear_resize(&map, 11, 7).unwrap();
            assert!(out.min() >= map.min() && out.max() <= map.max());
        }
    }

    #[test]
    fn smooth_then_resize_constant() {
        let map = Tensor::full(&[4, 4], 0.3);
        let out = bilinear_resize(&gaussian_smooth_2d(&map, 1.0).unwrap(), 16, 16).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.3));
    }
}
