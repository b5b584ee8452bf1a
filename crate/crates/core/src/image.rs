//! Single-channel image buffers and 8/16-bit grayscale PNG I/O.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{Error, Result};

/// Row-major single-channel image with `f32` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch { expected: vec![height, width], actual: vec![data.len()] });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &GrayImage) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                actual: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> GrayImage {
        GrayImage { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Maps [-1, 1] to the [0, 1] range used for metrics.
    pub fn to_unit_range(&self) -> GrayImage {
        self.map(|v| (v + 1.0) * 0.5)
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Stacks same-shape images into a `(N, 1, H, W)` tensor.
    pub fn stack(images: &[&GrayImage], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Empty("no images to stack".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.len());
        for img in images {
            first.same_shape(img)?;
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(data, (images.len(), 1, first.height, first.width), device)?.to_dtype(dtype)?)
    }

    /// Splits a `(N, 1, H, W)` tensor back into images.
    pub fn unstack(t: &Tensor) -> Result<Vec<GrayImage>> {
        let (n, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(Error::ShapeMismatch { expected: vec![n, 1, h, w], actual: vec![n, c, h, w] });
        }
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(flat.chunks(h * w).map(|c| GrayImage { height: h, width: w, data: c.to_vec() }).collect())
    }

    /// Loads an 8- or 16-bit grayscale PNG as values in [0, 1].
    pub fn load_png(path: &Path) -> Result<GrayImage> {
        let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), detail: e.to_string() })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data: Vec<f32> = match img {
            DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
            DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
            other => {
                return Err(Error::Image {
                    path: path.to_path_buf(),
                    detail: format!("expected single-channel grayscale, found {:?}", other.color()),
                })
            }
        };
        GrayImage::new(h, w, data)
    }

    /// Writes a 16-bit grayscale PNG; values are clamped to [0, 1].
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let raw: Vec<u16> = self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::Image {
            path: path.to_path_buf(),
            detail: "buffer size does not match dimensions".into(),
        })?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        buf.save(path).map_err(|e| Error::Image { path: path.to_path_buf(), detail: e.to_string() })
    }

    /// Loads a PNG and maps it from [0, 1] to [-1, 1].
    pub fn load_normalized(path: &Path) -> Result<GrayImage> {
        Ok(Self::load_png(path)?.map(|v| v * 2.0 - 1.0))
    }

    /// Saves an image held in [-1, 1] as a 16-bit PNG.
    pub fn save_normalized(&self, path: &Path) -> Result<()> {
        self.to_unit_range().save_png16(path)
    }
}
