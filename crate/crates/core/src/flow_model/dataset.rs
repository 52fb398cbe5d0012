//! Synthetic single-shape dataset.
//!
//! Each prompt class is a (shape, foreground color, background color) triple.
//! Renders place one shape, scaled to three quarters of the frame, at a
//! jittered offset that always keeps it fully inside the image.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Square,
    Circle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Gray,
    Black,
    White,
}

impl Color {
    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Gray => [0.5, 0.5, 0.5],
            Color::Black => [0.0, 0.0, 0.0],
            Color::White => [1.0, 1.0, 1.0],
        }
    }

    fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Gray => "gray",
            Color::Black => "black",
            Color::White => "white",
        }
    }
}

impl FromStr for Color {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "red" => Color::Red,
            "green" => Color::Green,
            "blue" => Color::Blue,
            "gray" | "grey" => Color::Gray,
            "black" => Color::Black,
            "white" => Color::White,
            other => return Err(Error::UnknownClass(format!("unknown color {other:?}"))),
        })
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "square" => Ok(Shape::Square),
            "circle" => Ok(Shape::Circle),
            other => Err(Error::UnknownClass(format!("unknown shape {other:?}"))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
        })
    }
}

impl fmt::Display for Color {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One prompt class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClassSpec {
    pub shape: Shape,
    pub foreground: Color,
    pub background: Color,
}

impl fmt::Display for ClassSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_{}_on_{}", self.foreground, self.shape, self.background)
    }
}

impl FromStr for ClassSpec {
    type Err = Error;

    /// Parses `<fg>_<shape>_on_<bg>`, e.g. `red_square_on_gray`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split('_').collect();
        match parts.as_slice() {
            [fg, shape, "on", bg] => Ok(ClassSpec {
                shape: shape.parse()?,
                foreground: fg.parse()?,
                background: bg.parse()?,
            }),
            _ => Err(Error::UnknownClass(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub side: usize,
    pub shapes: Vec<Shape>,
    pub foregrounds: Vec<Color>,
    pub backgrounds: Vec<Color>,
    pub per_class: usize,
    /// Apply random placement jitter (up to the frame margin).
    pub jitter: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            side: 16,
            shapes: vec![Shape::Square, Shape::Circle],
            foregrounds: vec![Color::Red, Color::Green, Color::Blue],
            backgrounds: vec![Color::Gray, Color::Black],
            per_class: 32,
            jitter: true,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if ![16, 24, 32].contains(&self.side) {
            return Err(Error::InvalidArgument(format!(
                "image side must be 16, 24 or 32, got {}",
                self.side
            )));
        }
        if self.shapes.len() < 2 || self.foregrounds.len() * self.backgrounds.len() < 2 {
            return Err(Error::InvalidArgument(
                "need at least 2 shape classes and 2 color classes".into(),
            ));
        }
        if self.per_class == 0 {
            return Err(Error::InvalidArgument("per_class must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.len() * self.foregrounds.len() * self.backgrounds.len()
    }

    /// Class index ordering: shape-major, then foreground, then background.
    pub fn class(&self, index: usize) -> Result<ClassSpec> {
        if index >= self.num_classes() {
            return Err(Error::UnknownClass(format!("class index {index}")));
        }
        let nb = self.backgrounds.len();
        let nf = self.foregrounds.len();
        Ok(ClassSpec {
            shape: self.shapes[index / (nf * nb)],
            foreground: self.foregrounds[(index / nb) % nf],
            background: self.backgrounds[index % nb],
        })
    }

    pub fn class_index(&self, spec: &ClassSpec) -> Result<usize> {
        let find = |hay: &[Color], c: Color| hay.iter().position(|&x| x == c);
        let s = self.shapes.iter().position(|&x| x == spec.shape);
        let f = find(&self.foregrounds, spec.foreground);
        let b = find(&self.backgrounds, spec.background);
        match (s, f, b) {
            (Some(s), Some(f), Some(b)) => Ok((s * self.foregrounds.len() + f) * self.backgrounds.len() + b),
            _ => Err(Error::UnknownClass(spec.to_string())),
        }
    }

    /// Shape extent in pixels and the maximum placement offset from center.
    pub fn extent_and_margin(&self) -> (usize, usize) {
        let extent = (self.side * 3) / 4;
        (extent, (self.side - extent) / 2)
    }

    /// Clean, centered render of a class.
    pub fn template(&self, index: usize) -> Result<Tensor> {
        Ok(render(&RenderParams {
            class: self.class(index)?,
            side: self.side,
            offset: (0, 0),
        }))
    }
}

/// Everything needed to reproduce one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderParams {
    pub class: ClassSpec,
    pub side: usize,
    /// Placement offset `(dy, dx)` from the centered position.
    pub offset: (i64, i64),
}

/// Render a `3×side×side` image in `[0, 1]`.
pub fn render(params: &RenderParams) -> Tensor {
    let side = params.side;
    let extent = (side * 3) / 4;
    let origin = ((side - extent) / 2) as i64;
    let (oy, ox) = (origin + params.offset.0, origin + params.offset.1);
    let fg = params.class.foreground.rgb();
    let bg = params.class.background.rgb();
    let radius = extent as f64 / 2.0;
    let (cy, cx) = (oy as f64 + radius, ox as f64 + radius);

    let mut data = vec![0.0; 3 * side * side];
    for y in 0..side {
        for x in 0..side {
            let inside = match params.class.shape {
                Shape::Square => {
                    let (yi, xi) = (y as i64, x as i64);
                    yi >= oy && yi < oy + extent as i64 && xi >= ox && xi < ox + extent as i64
                }
                Shape::Circle => {
                    let dy = y as f64 + 0.5 - cy;
                    let dx = x as f64 + 0.5 - cx;
                    dy * dy + dx * dx <= radius * radius
                }
            };
            let color = if inside { fg } else { bg };
            for c in 0..3 {
                data[(c * side + y) * side + x] = color[c];
            }
        }
    }
    Tensor::new(vec![3, side, side], data).expect("render shape")
}

#[derive(Clone, Debug)]
pub struct ShapeDataset {
    pub config: DatasetConfig,
    /// `B×3×H×W`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub render_params: Vec<RenderParams>,
}

impl ShapeDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let n = 3 * self.config.side * self.config.side;
        &self.images.data()[index * n..(index + 1) * n]
    }

    /// Per-channel mean color over all images of a class.
    pub fn class_mean_color(&self, class: usize) -> [f64; 3] {
        let hw = self.config.side * self.config.side;
        let mut acc = [0.0; 3];
        let mut count = 0usize;
        for (i, &label) in self.labels.iter().enumerate() {
            if label != class {
                continue;
            }
            let img = self.image(i);
            for (c, a) in acc.iter_mut().enumerate() {
                *a += img[c * hw..(c + 1) * hw].iter().sum::<f64>();
            }
            count += hw;
        }
        acc.map(|a| if count > 0 { a / count as f64 } else { 0.0 })
    }
}

pub fn render_dataset(config: &DatasetConfig, rng: &mut RngStream) -> Result<ShapeDataset> {
    config.validate()?;
    let (_, margin) = config.extent_and_margin();
    let margin = margin as i64;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut render_params = Vec::new();
    for class in 0..config.num_classes() {
        let spec = config.class(class)?;
        for _ in 0..config.per_class {
            let offset = if config.jitter && margin > 0 {
                let span = (2 * margin + 1) as usize;
                (rng.below(span) as i64 - margin, rng.below(span) as i64 - margin)
            } else {
                (0, 0)
            };
            let params = RenderParams {
                class: spec,
                side: config.side,
                offset,
            };
            images.push(render(&params));
            labels.push(class);
            render_params.push(params);
        }
    }
    Ok(ShapeDataset {
        config: config.clone(),
        images: Tensor::stack(&images)?,
        labels,
        render_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::redness;

    fn spec(s: &str) -> ClassSpec {
        s.parse().unwrap()
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let cfg = DatasetConfig::default();
        let a = render_dataset(&cfg, &mut RngStream::new(7)).unwrap();
        let b = render_dataset(&cfg, &mut RngStream::new(7)).unwrap();
        assert_eq!(a.images, b.images);
        let c = render_dataset(&cfg, &mut RngStream::new(8)).unwrap();
        assert_ne!(a.images, c.images);
    }

    #[test]
    fn same_render_bytes_for_circle_green_gray() {
        let cfg = DatasetConfig::default();
        let idx = cfg.class_index(&spec("green_circle_on_gray")).unwrap();
        let a = render_dataset(&cfg, &mut RngStream::new(7)).unwrap();
        let b = render_dataset(&cfg, &mut RngStream::new(7)).unwrap();
        let pos = a.labels.iter().position(|&l| l == idx).unwrap();
        assert_eq!(a.image(pos), b.image(pos));
    }

    #[test]
    fn pixel_values_in_unit_box() {
        let ds = render_dataset(&DatasetConfig::default(), &mut RngStream::new(1)).unwrap();
        assert!(ds.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.images.shape(), &[12 * 32, 3, 16, 16]);
    }

    #[test]
    fn shape_always_fully_inside() {
        for side in [16, 24, 32] {
            let cfg = DatasetConfig {
                side,
                per_class: 8,
                ..Default::default()
            };
            let ds = render_dataset(&cfg, &mut RngStream::new(side as u64)).unwrap();
            for (i, p) in ds.render_params.iter().enumerate() {
                // Foreground pixel count equals the centered template's count.
                let count = |img: &[f64]| {
                    let fg = p.class.foreground.rgb();
                    let hw = side * side;
                    (0..hw).filter(|&q| (0..3).all(|c| img[c * hw + q] == fg[c])).count()
                };
                let template = cfg.template(ds.labels[i]).unwrap();
                assert_eq!(count(ds.image(i)), count(template.data()));
                assert!(count(ds.image(i)) > 0);
            }
        }
    }

    #[test]
    fn labels_round_trip_through_render_params() {
        let cfg = DatasetConfig::default();
        let ds = render_dataset(&cfg, &mut RngStream::new(3)).unwrap();
        for (label, p) in ds.labels.iter().zip(&ds.render_params) {
            assert_eq!(cfg.class_index(&p.class).unwrap(), *label);
            let name = p.class.to_string();
            assert_eq!(name.parse::<ClassSpec>().unwrap(), p.class);
        }
    }

    #[test]
    fn redness_of_clean_renders() {
        let cfg = DatasetConfig::default();
        let red_square = cfg.class_index(&spec("red_square_on_gray")).unwrap();
        let r = redness(&cfg.template(red_square).unwrap()).unwrap();
        // 12×12 of 16×16 is red, gray contributes zero: 144/256.
        assert!((r - 0.5625).abs() < 1e-12);
        assert!(r > 0.5);
        let green_circle = cfg.class_index(&spec("green_circle_on_gray")).unwrap();
        assert!(redness(&cfg.template(green_circle).unwrap()).unwrap() < 0.0);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = DatasetConfig {
            side: 20,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        cfg.side = 16;
        cfg.shapes = vec![Shape::Square];
        assert!(cfg.validate().is_err());
        assert!("purple_square_on_gray".parse::<ClassSpec>().is_err());
    }
}
