//! Floating point RGB images and calibrated views.

use std::path::Path;

use crate::geometry::Camera;
use crate::io::IoError;

/// RGB image with channels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer does not match dimensions");
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn from_fn<F: FnMut(usize, usize) -> [f32; 3]>(width: usize, height: usize, mut f: F) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        self.pixels[y * self.width + x]
    }

    /// Luma (Rec. 601 weights).
    pub fn to_gray(&self) -> Vec<f32> {
        self.pixels.iter().map(|p| luma(*p)).collect()
    }

    /// Resamples to `width x height` with a triangle filter.
    pub fn resized(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let raw: Vec<f32> = self.pixels.iter().flat_map(|p| p.iter().copied()).collect();
        let buf = image::Rgb32FImage::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer size matches");
        let out = image::imageops::resize(&buf, width as u32, height as u32, image::imageops::FilterType::Triangle);
        let pixels = out.pixels().map(|p| [p.0[0], p.0[1], p.0[2]]).collect();
        Self::new(width, height, pixels)
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let img = image::open(path)
            .map_err(|e| IoError::Image(path.to_path_buf(), e.to_string()))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let pixels = img
            .pixels()
            .map(|p| [p.0[0] as f32 / 255.0, p.0[1] as f32 / 255.0, p.0[2] as f32 / 255.0])
            .collect();
        Ok(Self::new(w as usize, h as usize, pixels))
    }

    /// Writes an 8-bit PNG, creating parent directories.
    pub fn save_png(&self, path: &Path) -> Result<(), IoError> {
        let raw: Vec<u8> = self
            .pixels
            .iter()
            .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches");
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| IoError::Image(path.to_path_buf(), e.to_string()))?;
        crate::io::write_file(path, &bytes)
    }

    /// 8-bit color of a pixel.
    pub fn rgb8(&self, x: usize, y: usize) -> [u8; 3] {
        self.get(x, y).map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
    }
}

#[inline]
pub fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Bilinear lookup; the caller guarantees `0 <= x <= w-1`, `0 <= y <= h-1`.
#[inline]
pub fn bilinear(data: &[f32], width: usize, height: usize, x: f64, y: f64) -> f32 {
    let x0 = (x.floor() as usize).min(width - 1);
    let y0 = (y.floor() as usize).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let a = data[y0 * width + x0];
    let b = data[y0 * width + x1];
    let c = data[y1 * width + x0];
    let d = data[y1 * width + x1];
    let top = a + (b - a) * fx;
    let bottom = c + (d - c) * fx;
    top + (bottom - top) * fy
}

/// A calibrated image with its cached luma plane.
#[derive(Debug, Clone)]
pub struct View {
    pub name: String,
    pub image: RgbImage,
    pub camera: Camera,
    gray: Vec<f32>,
}

impl View {
    pub fn new(name: impl Into<String>, image: RgbImage, camera: Camera) -> Self {
        assert_eq!(
            (image.width(), image.height()),
            (camera.width, camera.height),
            "image and camera dimensions differ"
        );
        let gray = image.to_gray();
        Self {
            name: name.into(),
            image,
            camera,
            gray,
        }
    }

    pub fn width(&self) -> usize {
        self.camera.width
    }

    pub fn height(&self) -> usize {
        self.camera.height
    }

    pub fn gray(&self) -> &[f32] {
        &self.gray
    }

    #[inline]
    pub fn sample_gray(&self, x: f64, y: f64) -> f32 {
        bilinear(&self.gray, self.width(), self.height(), x, y)
    }

    /// The view resampled by `factor` (rounded dimensions), camera adjusted.
    pub fn downsampled(&self, factor: f64) -> Self {
        let width = ((self.width() as f64 * factor).round() as usize).max(1);
        let height = ((self.height() as f64 * factor).round() as usize).max(1);
        let image = self.image.resized(width, height);
        let camera = self.camera.scaled(factor, width, height);
        Self::new(self.name.clone(), image, camera)
    }
}

/// Coarse-to-fine pyramid dimensions: level 0 is the input.
pub fn pyramid_dimensions(width: usize, height: usize, levels: usize, factor: f64) -> Vec<(usize, usize)> {
    let mut dims = vec![(width, height)];
    for _ in 1..levels {
        let (w, h) = *dims.last().unwrap();
        dims.push((
            ((w as f64 * factor).round() as usize).max(1),
            ((h as f64 * factor).round() as usize).max(1),
        ));
    }
    dims
}
