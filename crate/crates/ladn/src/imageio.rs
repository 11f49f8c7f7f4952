//! Plain (non-differentiable) RGB images and PNG round-tripping.
//!
//! Images are square, channel-major `[3, side, side]`, values in [0, 1].
//! Network tensors use [-1, 1]; the conversions live here so every module
//! agrees on the mapping.

use crate::autodiff::{Real, Tape, TensorRef};
use crate::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct PlainImage {
    side: usize,
    data: Vec<f32>,
}

impl PlainImage {
    pub fn new(side: usize) -> Self {
        PlainImage { side, data: vec![0.0; 3 * side * side] }
    }

    pub fn from_data(side: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * side * side {
            return Err(Error::Shape(format!(
                "image buffer has {} values, expected {} for side {}",
                data.len(),
                3 * side * side,
                side
            )));
        }
        Ok(PlainImage { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.side + y) * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.side + y) * self.side + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates, clamped to the edge.
    pub fn sample_bilinear(&self, c: usize, x: f64, y: f64) -> f32 {
        let last = (self.side - 1) as f64;
        let x = x.clamp(0.0, last);
        let y = y.clamp(0.0, last);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.side - 1);
        let y1 = (y0 + 1).min(self.side - 1);
        let fx = (x - x0 as f64) as f32;
        let fy = (y - y0 as f64) as f32;
        let v00 = self.get(c, y0, x0);
        let v01 = self.get(c, y0, x1);
        let v10 = self.get(c, y1, x0);
        let v11 = self.get(c, y1, x1);
        let top = v00 + (v01 - v00) * fx;
        let bot = v10 + (v11 - v10) * fx;
        top + (bot - top) * fy
    }

    /// Loads an 8-bit RGB(A) PNG; alpha is dropped. Non-square images are
    /// rejected because every pipeline stage assumes square frames.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        if w != h {
            return Err(Error::Image(format!(
                "{}: image is {}x{}, expected square",
                path.display(),
                w,
                h
            )));
        }
        let side = w as usize;
        let mut out = PlainImage::new(side);
        for y in 0..side {
            for x in 0..side {
                let p = rgb.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    out.set(c, y, x, p.0[c] as f32 / 255.0);
                }
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.side as u32, self.side as u32);
        for y in 0..self.side {
            for x in 0..self.side {
                let px = [
                    quantize(self.get(0, y, x)),
                    quantize(self.get(1, y, x)),
                    quantize(self.get(2, y, x)),
                ];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }

    /// Places the image onto a [-1, 1] tape tensor of shape [3, side, side].
    pub fn to_tensor<T: Real>(&self, tape: &mut Tape<T>) -> TensorRef {
        let data: Vec<T> = self.data.iter().map(|&v| T::from_f64(v as f64 * 2.0 - 1.0)).collect();
        tape.constant(vec![3, self.side, self.side], data).expect("image buffer sized to shape")
    }

    /// Reads a [-1, 1] tensor buffer back into [0, 1] pixels, clamping.
    pub fn from_tensor_data<T: Real>(side: usize, data: &[T]) -> Result<Self> {
        let pixels: Vec<f32> =
            data.iter().map(|v| ((v.to_f64() + 1.0) / 2.0).clamp(0.0, 1.0) as f32).collect();
        PlainImage::from_data(side, pixels)
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Peak signal-to-noise ratio in dB for [0, 1] images; infinite when equal.
pub fn psnr(a: &PlainImage, b: &PlainImage) -> f64 {
    assert_eq!(a.side, b.side, "psnr requires equal sizes");
    let mut acc = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = (*x - *y) as f64;
        acc += d * d;
    }
    let mse = acc / a.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Rectangular RGB canvas used only for grid emission.
pub struct GridImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GridImage {
    pub fn new(width: usize, height: usize) -> Self {
        GridImage { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px =
                    [quantize(self.get(0, y, x)), quantize(self.get(1, y, x)), quantize(self.get(2, y, x))];
                buf.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        buf.save(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

/// Composes a rectangular grid and writes it directly; the usual path for
/// sample sheets whose width and height differ.
pub fn save_grid_png(tiles: &[PlainImage], cols: usize, path: &Path) -> Result<()> {
    if tiles.is_empty() || cols == 0 {
        return Err(Error::Config("grid needs at least one tile and one column".into()));
    }
    let side = tiles[0].side;
    if tiles.iter().any(|t| t.side != side) {
        return Err(Error::Shape("grid tiles differ in size".into()));
    }
    let rows = tiles.len().div_ceil(cols);
    let mut grid = GridImage::new(cols * side, rows * side);
    for (i, tile) in tiles.iter().enumerate() {
        let gy = (i / cols) * side;
        let gx = (i % cols) * side;
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    grid.set(c, gy + y, gx + x, tile.get(c, y, x));
                }
            }
        }
    }
    grid.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_image(side: usize) -> PlainImage {
        let mut img = PlainImage::new(side);
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    img.set(c, y, x, ((c + 1) * (y * side + x)) as f32 / (3.0 * (side * side) as f32));
                }
            }
        }
        img
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = ramp_image(16);
        img.save_png(&path).unwrap();
        let back = PlainImage::load_png(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn tensor_round_trip_is_exactish() {
        let img = ramp_image(8);
        let mut tape = Tape::<f32>::new();
        let t = img.to_tensor(&mut tape);
        assert_eq!(tape.shape(t), &[3, 8, 8]);
        let back = PlainImage::from_tensor_data(8, tape.data(t)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn psnr_identity_is_infinite_and_noise_is_finite() {
        let img = ramp_image(8);
        assert!(psnr(&img, &img).is_infinite());
        let mut other = img.clone();
        other.set(0, 3, 3, (other.get(0, 3, 3) + 0.5).min(1.0));
        let v = psnr(&img, &other);
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn bilinear_at_integer_coordinates_is_exact() {
        let img = ramp_image(8);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(img.sample_bilinear(1, x as f64, y as f64), img.get(1, y, x));
            }
        }
    }

    #[test]
    fn grid_dimensions_follow_layout() {
        let tiles: Vec<PlainImage> = (0..10).map(|_| ramp_image(4)).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        save_grid_png(&tiles, 5, &path).unwrap();
        let loaded = image::open(&path).unwrap();
        assert_eq!(loaded.width(), 20);
        assert_eq!(loaded.height(), 8);
    }
}
