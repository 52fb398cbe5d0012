//! Feature maps: the toy extractor and `VIPF` feature files.
//!
//! `VIPF` layout (little-endian): magic `VIPF`, `u32` version (1), `u8`
//! layout tag (0 = patch grid, 1 = channel grid), then `u32` dims
//! (`N, D, H_p, W_p` for patch grids, `C, H_f, W_f` for channel grids), then
//! row-major `f32` values.

use std::io::{ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-patch descriptor width of the toy extractor.
pub const TOY_FEATURE_DIM: usize = 9;

const MAGIC: &[u8; 4] = b"VIPF";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureLayout {
    /// `N×D` rows, one per patch, `N = H_p·W_p` in row-major grid order.
    PatchGrid,
    /// `C×H_f×W_f` activation stack.
    ChannelGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureOrigin {
    BuiltinToy,
    File,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub layout: FeatureLayout,
    pub values: Tensor,
    pub grid: (usize, usize),
    pub origin: FeatureOrigin,
}

impl FeatureMap {
    pub fn patch_grid(values: Tensor, grid: (usize, usize), origin: FeatureOrigin) -> Result<Self> {
        match *values.shape() {
            [n, _] if n == grid.0 * grid.1 => {}
            ref s => {
                return Err(Error::ShapeMismatch(format!(
                    "patch features {s:?} do not fit a {}×{} grid",
                    grid.0, grid.1
                )))
            }
        }
        Self::checked(FeatureLayout::PatchGrid, values, grid, origin)
    }

    pub fn channel_grid(values: Tensor, origin: FeatureOrigin) -> Result<Self> {
        let grid = match *values.shape() {
            [_, h, w] => (h, w),
            ref s => {
                return Err(Error::ShapeMismatch(format!(
                    "channel features must be C×H×W, got {s:?}"
                )))
            }
        };
        Self::checked(FeatureLayout::ChannelGrid, values, grid, origin)
    }

    fn checked(layout: FeatureLayout, values: Tensor, grid: (usize, usize), origin: FeatureOrigin) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFiniteValues);
        }
        Ok(Self {
            layout,
            values,
            grid,
            origin,
        })
    }

    /// Descriptor width `D` (patch grid) or channel count `C`.
    pub fn dim(&self) -> usize {
        self.values.shape()[match self.layout {
            FeatureLayout::PatchGrid => 1,
            FeatureLayout::ChannelGrid => 0,
        }]
    }

    /// Same values as a `D×H_p×W_p` channel stack.
    pub fn to_channel_grid(&self) -> Result<FeatureMap> {
        match self.layout {
            FeatureLayout::ChannelGrid => Ok(self.clone()),
            FeatureLayout::PatchGrid => {
                let (n, d) = (self.grid.0 * self.grid.1, self.dim());
                let v = self.values.data();
                let t = Tensor::from_fn(&[d, self.grid.0, self.grid.1], |i| v[(i % n) * d + i / n]);
                FeatureMap::channel_grid(t, self.origin)
            }
        }
    }

    /// Same values as `N×C` rows in row-major grid order.
    pub fn to_patch_grid(&self) -> Result<FeatureMap> {
        match self.layout {
            FeatureLayout::PatchGrid => Ok(self.clone()),
            FeatureLayout::ChannelGrid => {
                let (n, c) = (self.grid.0 * self.grid.1, self.dim());
                let v = self.values.data();
                let t = Tensor::from_fn(&[n, c], |i| v[(i % c) * n + i / c]);
                FeatureMap::patch_grid(t, self.grid, self.origin)
            }
        }
    }
}

/// Toy per-patch descriptors of a `3×H×W` image.
///
/// Each `patch×patch` block yields, in order: mean R, G, B; variance of R, G,
/// B; mean squared horizontal and vertical differences (summed over
/// channels, pairs inside the block only); luminance range. Pixels are
/// clamped to `[0, 1]` first.
pub fn extract_features_toy(image: &Tensor, patch: usize) -> Result<FeatureMap> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        [c, _, _] => return Err(Error::BadChannels(c)),
        ref s => return Err(Error::ShapeMismatch(format!("expected 3×H×W image, got {s:?}"))),
    };
    for size in [h, w] {
        if patch == 0 || size % patch != 0 {
            return Err(Error::BadPatchSize { size, patch });
        }
    }
    let (hp, wp) = (h / patch, w / patch);
    let px = |c: usize, y: usize, x: usize| image.data()[(c * h + y) * w + x].clamp(0.0, 1.0);
    let count = (patch * patch) as f64;
    let pairs = (patch * (patch - 1)) as f64;
    let mut out = Vec::with_capacity(hp * wp * TOY_FEATURE_DIM);
    for gy in 0..hp {
        for gx in 0..wp {
            let (y0, x0) = (gy * patch, gx * patch);
            let cells = || (y0..y0 + patch).flat_map(move |y| (x0..x0 + patch).map(move |x| (y, x)));
            let mut mean = [0.0; 3];
            let mut var = [0.0; 3];
            for c in 0..3 {
                mean[c] = cells().map(|(y, x)| px(c, y, x)).sum::<f64>() / count;
                var[c] = cells().map(|(y, x)| (px(c, y, x) - mean[c]).powi(2)).sum::<f64>() / count;
            }
            let (mut gh, mut gv) = (0.0, 0.0);
            for (y, x) in cells() {
                for c in 0..3 {
                    if x + 1 < x0 + patch {
                        gh += (px(c, y, x + 1) - px(c, y, x)).powi(2);
                    }
                    if y + 1 < y0 + patch {
                        gv += (px(c, y + 1, x) - px(c, y, x)).powi(2);
                    }
                }
            }
            if pairs > 0.0 {
                gh /= pairs;
                gv /= pairs;
            }
            let lum = |y, x| 0.299 * px(0, y, x) + 0.587 * px(1, y, x) + 0.114 * px(2, y, x);
            let (lo, hi) = cells().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (y, x)| {
                let l = lum(y, x);
                (lo.min(l), hi.max(l))
            });
            out.extend_from_slice(&mean);
            out.extend_from_slice(&var);
            out.extend_from_slice(&[gh, gv, hi - lo]);
        }
    }
    FeatureMap::patch_grid(
        Tensor::new(vec![hp * wp, TOY_FEATURE_DIM], out)?,
        (hp, wp),
        FeatureOrigin::BuiltinToy,
    )
}

/// Write `features` in `VIPF` format. Values are narrowed to `f32`.
pub fn write_features<W: Write>(features: &FeatureMap, mut out: W) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let (tag, dims): (u8, Vec<usize>) = match features.layout {
        FeatureLayout::PatchGrid => (
            0,
            vec![
                features.values.shape()[0],
                features.dim(),
                features.grid.0,
                features.grid.1,
            ],
        ),
        FeatureLayout::ChannelGrid => (1, features.values.shape().to_vec()),
    };
    out.write_all(&[tag])?;
    for d in dims {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in features.values.data() {
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        Error::ShapeMismatch("feature file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_features<R: Read>(mut input: R) -> Result<FeatureMap> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::BadMagic { expected: "VIPF" })?;
    if &magic != MAGIC {
        return Err(Error::BadMagic { expected: "VIPF" });
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let mut tag = [0u8; 1];
    input.read_exact(&mut tag).map_err(truncated)?;
    let (layout, ndims) = match tag[0] {
        0 => (FeatureLayout::PatchGrid, 4),
        1 => (FeatureLayout::ChannelGrid, 3),
        t => return Err(Error::ShapeMismatch(format!("unknown layout tag {t}"))),
    };
    let dims: Vec<usize> = (0..ndims)
        .map(|_| read_u32(&mut input).map(|d| d as usize))
        .collect::<Result<_>>()?;
    if layout == FeatureLayout::PatchGrid && dims[0] != dims[2] * dims[3] {
        return Err(Error::ShapeMismatch(format!(
            "N={} but grid is {}×{}",
            dims[0], dims[2], dims[3]
        )));
    }
    let shape = match layout {
        FeatureLayout::PatchGrid => vec![dims[0], dims[1]],
        FeatureLayout::ChannelGrid => dims.clone(),
    };
    let count: usize = shape.iter().product();
    let mut bytes = vec![0u8; count * 4];
    input.read_exact(&mut bytes).map_err(truncated)?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let tensor = Tensor::new(shape, values)?;
    match layout {
        FeatureLayout::PatchGrid => FeatureMap::patch_grid(tensor, (dims[2], dims[3]), FeatureOrigin::File),
        FeatureLayout::ChannelGrid => FeatureMap::channel_grid(tensor, FeatureOrigin::File),
    }
}

pub fn save_features(features: &FeatureMap, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_features(features, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureMap> {
    read_features(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_model::DatasetConfig;

    #[test]
    fn golden_bytes() {
        let fm = FeatureMap::patch_grid(
            Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap(),
            (1, 2),
            FeatureOrigin::BuiltinToy,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_features(&fm, &mut buf).unwrap();
        let expected: Vec<u8> = [
            &b"VIPF"[..],
            &[1, 0, 0, 0],
            &[0],
            &[2, 0, 0, 0],
            &[1, 0, 0, 0],
            &[1, 0, 0, 0],
            &[2, 0, 0, 0],
            &[0x00, 0x00, 0x80, 0x3f],
            &[0x00, 0x00, 0x20, 0xc0],
        ]
        .concat();
        assert_eq!(buf, expected);
        let back = read_features(buf.as_slice()).unwrap();
        assert_eq!(back.values, fm.values);
        assert_eq!(back.origin, FeatureOrigin::File);
    }

    #[test]
    fn channel_round_trip_and_layout_conversion() {
        let vals = Tensor::from_fn(&[3, 2, 4], |i| (i as f32 * 0.25 - 1.0) as f64);
        let fm = FeatureMap::channel_grid(vals, FeatureOrigin::BuiltinToy).unwrap();
        let mut buf = Vec::new();
        write_features(&fm, &mut buf).unwrap();
        assert_eq!(buf[8], 1);
        assert_eq!(read_features(buf.as_slice()).unwrap().values, fm.values);

        let rows = fm.to_patch_grid().unwrap();
        assert_eq!(rows.values.shape(), &[8, 3]);
        // Row for grid cell (1, 2), channel 1.
        assert_eq!(rows.values.data()[6 * 3 + 1], fm.values.data()[8 + 6]);
        assert_eq!(rows.to_channel_grid().unwrap().values, fm.values);
    }

    #[test]
    fn corrupt_files() {
        let fm = FeatureMap::patch_grid(Tensor::ones(&[4, 2]), (2, 2), FeatureOrigin::File).unwrap();
        let mut buf = Vec::new();
        write_features(&fm, &mut buf).unwrap();
        assert!(matches!(read_features(&buf[..3]), Err(Error::BadMagic { .. })));
        assert!(matches!(
            read_features(&buf[..buf.len() - 2]),
            Err(Error::ShapeMismatch(_))
        ));
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(matches!(read_features(bad.as_slice()), Err(Error::BadVersion(2))));
        let mut bad = buf.clone();
        bad[9] = 5;
        assert!(matches!(read_features(bad.as_slice()), Err(Error::ShapeMismatch(_))));
        let mut bad = buf.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_features(bad.as_slice()), Err(Error::NonFiniteValues)));
    }

    #[test]
    fn toy_grid_dimensions() {
        let img = Tensor::zeros(&[3, 16, 16]);
        let fm = extract_features_toy(&img, 4).unwrap();
        assert_eq!(fm.grid, (4, 4));
        assert_eq!(fm.values.shape(), &[16, TOY_FEATURE_DIM]);
        assert!(matches!(
            extract_features_toy(&img, 5),
            Err(Error::BadPatchSize { size: 16, patch: 5 })
        ));
    }

    #[test]
    fn square_patches_differ_in_color() {
        let cfg = DatasetConfig::default();
        let class = cfg.class_index(&"red_square_on_gray".parse().unwrap()).unwrap();
        let img = cfg.template(class).unwrap();
        let fm = extract_features_toy(&img, 2).unwrap();
        let row = |gy: usize, gx: usize| &fm.values.data()[(gy * 8 + gx) * TOY_FEATURE_DIM..][..TOY_FEATURE_DIM];
        let (inside, outside) = (row(4, 4), row(0, 0));
        assert_eq!(&inside[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&outside[..3], &[0.5, 0.5, 0.5]);
        assert_eq!(&outside[3..], &[0.0; 6]);
    }

    #[test]
    fn features_are_local() {
        let mut img = Tensor::full(&[3, 8, 8], 0.3);
        let base = extract_features_toy(&img, 2).unwrap();
        img.data_mut()[3 * 8 + 5] = 0.9; // channel 0, pixel (3, 5) in cell (1, 2)
        let moved = extract_features_toy(&img, 2).unwrap();
        for cell in 0..16 {
            let a = &base.values.data()[cell * TOY_FEATURE_DIM..][..TOY_FEATURE_DIM];
            let b = &moved.values.data()[cell * TOY_FEATURE_DIM..][..TOY_FEATURE_DIM];
            assert_eq!(a == b, cell != 6, "cell {cell}");
        }
    }
}
