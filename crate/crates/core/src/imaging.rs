//! Pixel-level primitives shared by every stage: boxes, binary and soft
//! masks, and the square crop used to feed embedding backends.

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImagingError {
    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimMismatch(u32, u32, u32, u32),
    #[error("invalid box ({x_min}, {y_min}, {x_max}, {y_max})")]
    InvalidBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("mask value {value} at index {index} is outside [0, 1]")]
    MaskRange { index: usize, value: f64 },
}

/// Axis-aligned pixel box. `x_max`/`y_max` are exclusive edges, so a box
/// covering exactly pixel (0, 0) is `(0, 0, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Checked constructor: finite coordinates with positive extent.
    pub fn checked(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, ImagingError> {
        let b = Self::new(x_min, y_min, x_max, y_max);
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), ImagingError> {
        let finite = [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(self.invalid());
        }
        Ok(())
    }

    pub fn validate_within(&self, width: u32, height: u32) -> Result<(), ImagingError> {
        self.validate()?;
        if self.x_min < 0.0
            || self.y_min < 0.0
            || self.x_max > f64::from(width)
            || self.y_max > f64::from(height)
        {
            return Err(self.invalid());
        }
        Ok(())
    }

    fn invalid(&self) -> ImagingError {
        ImagingError::InvalidBox {
            x_min: self.x_min,
            y_min: self.y_min,
            x_max: self.x_max,
            y_max: self.y_max,
        }
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    /// Clip to the image rectangle. `None` when nothing is left.
    pub fn clip(&self, width: u32, height: u32) -> Option<BBox> {
        let b = BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(f64::from(width)),
            self.y_max.min(f64::from(height)),
        );
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    /// Integer pixel ranges covered by the box (floor/ceil of the edges).
    pub fn pixel_range(&self, width: u32, height: u32) -> Option<(u32, u32, u32, u32)> {
        let c = self.clip(width, height)?;
        let x0 = c.x_min.floor() as u32;
        let y0 = c.y_min.floor() as u32;
        let x1 = (c.x_max.ceil() as u32).min(width);
        let y1 = (c.y_max.ceil() as u32).min(height);
        (x0 < x1 && y0 < y1).then_some((x0, y0, x1, y1))
    }
}

/// Binary H×W mask stored row-major, one byte per pixel holding 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Mask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; (width as usize) * (height as usize)],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![1; (width as usize) * (height as usize)],
        }
    }

    /// Builds a mask from raw values; anything other than 0/1 is rejected
    /// and reported with its flat index.
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self, (usize, u8)> {
        assert_eq!(data.len(), (width as usize) * (height as usize));
        if let Some((i, &v)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err((i, v));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut m = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    /// Filled box, clipped to the mask bounds.
    pub fn from_bbox(width: u32, height: u32, bbox: &BBox) -> Self {
        let mut m = Self::empty(width, height);
        if let Some((x0, y0, x1, y1)) = bbox.pixel_range(width, height) {
            for y in y0..y1 {
                for x in x0..x1 {
                    m.set(x, y, true);
                }
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y as usize) * (self.width as usize) + x as usize] != 0
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, on: bool) {
        let w = self.width as usize;
        self.data[(y as usize) * w + x as usize] = u8::from(on);
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    /// Tight axis-aligned bounding box, `None` for an empty mask.
    pub fn tight_bbox(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0u32, 0u32);
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        any.then(|| BBox::new(f64::from(x0), f64::from(y0), f64::from(x1), f64::from(y1)))
    }

    /// Pixels of the mask falling inside `bbox`.
    pub fn area_within(&self, bbox: &BBox) -> usize {
        let Some((x0, y0, x1, y1)) = bbox.pixel_range(self.width, self.height) else {
            return 0;
        };
        let mut n = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                n += usize::from(self.get(x, y));
            }
        }
        n
    }

    /// Translate by an integer offset; pixels shifted outside are dropped.
    pub fn shifted(&self, dx: i32, dy: i32) -> Mask {
        let mut out = Mask::empty(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                let nx = x as i64 + i64::from(dx);
                let ny = y as i64 + i64::from(dy);
                if nx >= 0 && ny >= 0 && nx < i64::from(self.width) && ny < i64::from(self.height) {
                    out.set(nx as u32, ny as u32, true);
                }
            }
        }
        out
    }

    pub fn or_assign(&mut self, other: &Mask) -> Result<(), ImagingError> {
        check_dims(self.dims(), other.dims())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= *b;
        }
        Ok(())
    }

    pub fn and_not_assign(&mut self, other: &Mask) -> Result<(), ImagingError> {
        check_dims(self.dims(), other.dims())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a &= 1 - *b;
        }
        Ok(())
    }

    pub fn to_alpha(&self) -> AlphaMask {
        AlphaMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

/// Real-valued mask in [0, 1], the general form used by compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMask {
    width: u32,
    height: u32,
    data: Vec<f64>,
}

impl AlphaMask {
    pub fn new(width: u32, height: u32, data: Vec<f64>) -> Result<Self, ImagingError> {
        assert_eq!(data.len(), (width as usize) * (height as usize));
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImagingError::MaskRange { index, value });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn as_raw(&self) -> &[f64] {
        &self.data
    }
}

impl From<&Mask> for AlphaMask {
    fn from(m: &Mask) -> Self {
        m.to_alpha()
    }
}

pub fn check_dims(a: (u32, u32), b: (u32, u32)) -> Result<(), ImagingError> {
    if a != b {
        return Err(ImagingError::DimMismatch(a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// Crops `bbox` out of `image`, pads it to a square by replicating edge
/// pixels (aspect ratio preserved), then resizes to `side`×`side`.
pub fn square_crop_resized(image: &RgbImage, bbox: &BBox, side: u32) -> Option<RgbImage> {
    let (x0, y0, x1, y1) = bbox.pixel_range(image.width(), image.height())?;
    let (w, h) = (x1 - x0, y1 - y0);
    let s = w.max(h);
    // Center the crop inside the square; out-of-crop samples clamp to the
    // nearest crop edge.
    let off_x = (s - w) / 2;
    let off_y = (s - h) / 2;
    let square = RgbImage::from_fn(s, s, |sx, sy| {
        let cx = (sx as i64 - off_x as i64).clamp(0, w as i64 - 1) as u32;
        let cy = (sy as i64 - off_y as i64).clamp(0, h as i64 - 1) as u32;
        *image.get_pixel(x0 + cx, y0 + cy)
    });
    if s == side {
        return Some(square);
    }
    Some(imageops::resize(&square, side, side, FilterType::Triangle))
}

/// Fills the box with a solid color, clipped to the image.
pub fn fill_box(image: &mut RgbImage, bbox: &BBox, color: [u8; 3]) {
    if let Some((x0, y0, x1, y1)) = bbox.pixel_range(image.width(), image.height()) {
        for y in y0..y1 {
            for x in x0..x1 {
                image.put_pixel(x, y, Rgb(color));
            }
        }
    }
}

/// Mean RGB over the image, each channel in [0, 1].
pub fn mean_rgb(image: &RgbImage) -> [f64; 3] {
    let n = f64::from(image.width()) * f64::from(image.height());
    let mut acc = [0.0f64; 3];
    for p in image.pixels() {
        for c in 0..3 {
            acc[c] += f64::from(p.0[c]);
        }
    }
    acc.map(|v| v / (255.0 * n.max(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tight_bbox_matches_filled_box() {
        let b = BBox::new(3.0, 4.0, 9.0, 7.0);
        let m = Mask::from_bbox(16, 16, &b);
        assert_eq!(m.area(), 18);
        assert_eq!(m.tight_bbox(), Some(b));
        assert_eq!(Mask::empty(4, 4).tight_bbox(), None);
    }

    #[test]
    fn shifted_drops_pixels_outside() {
        let m = Mask::from_bbox(8, 8, &BBox::new(0.0, 0.0, 2.0, 2.0));
        assert_eq!(m.shifted(-1, 0).area(), 2);
        assert_eq!(m.shifted(3, 3).tight_bbox(), Some(BBox::new(3.0, 3.0, 5.0, 5.0)));
    }

    #[test]
    fn from_raw_rejects_non_binary() {
        assert_eq!(Mask::from_raw(2, 1, vec![0, 2]), Err((1, 2)));
    }

    #[test]
    fn square_crop_pads_and_resizes() {
        let mut img = RgbImage::new(20, 10);
        fill_box(&mut img, &BBox::new(2.0, 2.0, 8.0, 5.0), [255, 0, 0]);
        let crop = square_crop_resized(&img, &BBox::new(2.0, 2.0, 8.0, 5.0), 224).unwrap();
        assert_eq!(crop.dimensions(), (224, 224));
        // edge replication keeps the crop pure red
        assert!(crop.pixels().all(|p| p.0 == [255, 0, 0]));
    }

    #[test]
    fn alpha_mask_range_checked() {
        assert!(matches!(
            AlphaMask::new(1, 2, vec![0.5, 1.5]),
            Err(ImagingError::MaskRange { index: 1, .. })
        ));
    }
}
