//! Binary PPM (`P6`) sample grids and PGM (`P5`) map images.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Columns and rows of a grid holding `n` tiles: at most 4 columns.
pub fn grid_layout(n: usize) -> (usize, usize) {
    let cols = n.clamp(1, 4);
    (cols, n.div_ceil(cols).max(1))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tile `3×H×W` images row-major into one RGB image, `3×(rows·H)×(cols·W)`.
pub fn tile_images(images: &[Tensor]) -> Result<Tensor> {
    tile(images, 3)
}

/// Tile `H×W` maps row-major into one `(rows·H)×(cols·W)` map.
pub fn tile_maps(maps: &[Tensor]) -> Result<Tensor> {
    let lifted: Vec<Tensor> = maps
        .iter()
        .map(|m| {
            let s = m.shape();
            if s.len() != 2 {
                return Err(Error::ShapeMismatch(format!("map must be H×W, got {s:?}")));
            }
            m.clone().reshape(&[1, s[0], s[1]])
        })
        .collect::<Result<_>>()?;
    let t = tile(&lifted, 1)?;
    let s = t.shape().to_vec();
    t.reshape(&s[1..])
}

fn tile(items: &[Tensor], channels: usize) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to tile".into()))?;
    let (h, w) = match *first.shape() {
        [c, h, w] if c == channels => (h, w),
        ref s => return Err(Error::ShapeMismatch(format!("tile shape {s:?}"))),
    };
    if items.iter().any(|t| t.shape() != first.shape()) {
        return Err(Error::ShapeMismatch("tiles differ in shape".into()));
    }
    let (cols, rows) = grid_layout(items.len());
    let (gh, gw) = (rows * h, cols * w);
    let mut out = Tensor::zeros(&[channels, gh, gw]);
    let data = out.data_mut();
    for (i, item) in items.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        for ch in 0..channels {
            for y in 0..h {
                let src = &item.data()[(ch * h + y) * w..][..w];
                let dst = (ch * gh + r * h + y) * gw + c * w;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
    }
    Ok(out)
}

/// Encode a `3×H×W` image in `[0, 1]` as binary PPM.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::ShapeMismatch(format!("PPM needs 3×H×W, got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    let hw = h * w;
    for p in 0..hw {
        out.extend_from_slice(&[to_byte(d[p]), to_byte(d[hw + p]), to_byte(d[2 * hw + p])]);
    }
    Ok(out)
}

/// Encode an `H×W` map as binary PGM, min-max scaled to `0..=255`.
///
/// A constant map encodes as mid-gray.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::ShapeMismatch(format!("PGM needs H×W, got {s:?}"))),
    };
    let (lo, hi) = (map.min(), map.max());
    let range = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|&v| if range > 0.0 { to_byte((v - lo) / range) } else { 128 }),
    );
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_bytes(path, &encode_ppm(image)?)
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    write_bytes(path, &encode_pgm(map)?)
}

/// Nearest-neighbour upsampling of an `H×W` grid by an integer factor.
pub fn upsample_nearest(map: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::ShapeMismatch(format!("expected H×W, got {s:?}"))),
    };
    let (oh, ow) = (h * factor, w * factor);
    Ok(Tensor::from_fn(&[oh, ow], |i| {
        map.at2((i / ow) / factor, (i % ow) / factor)
    }))
}
