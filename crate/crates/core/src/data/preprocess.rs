use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::GrayImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Output side length; images are resized to `target_size x target_size`.
    pub target_size: usize,
    pub clahe: bool,
    pub clahe_clip_limit: f64,
    /// Tiles per side for CLAHE.
    pub clahe_tiles: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target_size: 1024, clahe: true, clahe_clip_limit: 2.0, clahe_tiles: 8 }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(invalid("target size must be positive"));
        }
        if !(self.clahe_clip_limit > 0.0) || self.clahe_tiles == 0 {
            return Err(invalid("CLAHE clip limit and tile count must be positive"));
        }
        Ok(())
    }
}

const CLAHE_BINS: usize = 256;

/// Contrast-limited adaptive histogram equalization of an image in [0, 1].
///
/// Per-tile histograms are clipped at `clip_limit` times the mean bin count,
/// the excess is spread uniformly, and the resulting mappings are blended
/// bilinearly between tile centers.
pub fn clahe(img: &GrayImage, clip_limit: f64, tiles: usize) -> GrayImage {
    let (h, w) = (img.height, img.width);
    let ty = tiles.min(h).max(1);
    let tx = tiles.min(w).max(1);
    let bin = |v: f32| ((v.clamp(0.0, 1.0) * (CLAHE_BINS - 1) as f32).round()) as usize;
    let y_edges: Vec<usize> = (0..=ty).map(|i| i * h / ty).collect();
    let x_edges: Vec<usize> = (0..=tx).map(|i| i * w / tx).collect();

    let mut luts = vec![vec![0f32; CLAHE_BINS]; ty * tx];
    for gy in 0..ty {
        for gx in 0..tx {
            let mut hist = vec![0f64; CLAHE_BINS];
            for y in y_edges[gy]..y_edges[gy + 1] {
                for x in x_edges[gx]..x_edges[gx + 1] {
                    hist[bin(img.get(y, x))] += 1.0;
                }
            }
            let count: f64 = hist.iter().sum();
            let limit = (clip_limit * count / CLAHE_BINS as f64).max(1.0);
            let mut excess = 0.0;
            for c in hist.iter_mut() {
                if *c > limit {
                    excess += *c - limit;
                    *c = limit;
                }
            }
            let add = excess / CLAHE_BINS as f64;
            let lut = &mut luts[gy * tx + gx];
            let mut acc = 0.0;
            for (b, c) in hist.iter().enumerate() {
                acc += c + add;
                lut[b] = (acc / count) as f32;
            }
        }
    }

    // Tile centers, in pixel coordinates.
    let cy: Vec<f32> = (0..ty).map(|i| (y_edges[i] + y_edges[i + 1]) as f32 / 2.0 - 0.5).collect();
    let cx: Vec<f32> = (0..tx).map(|i| (x_edges[i] + x_edges[i + 1]) as f32 / 2.0 - 0.5).collect();
    let locate = |c: &[f32], p: f32| -> (usize, usize, f32) {
        if p <= c[0] {
            return (0, 0, 0.0);
        }
        for i in 0..c.len() - 1 {
            if p <= c[i + 1] {
                return (i, i + 1, (p - c[i]) / (c[i + 1] - c[i]));
            }
        }
        let last = c.len() - 1;
        (last, last, 0.0)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let (y0, y1, fy) = locate(&cy, y as f32);
        for x in 0..w {
            let (x0, x1, fx) = locate(&cx, x as f32);
            let b = bin(img.get(y, x));
            let v00 = luts[y0 * tx + x0][b];
            let v01 = luts[y0 * tx + x1][b];
            let v10 = luts[y1 * tx + x0][b];
            let v11 = luts[y1 * tx + x1][b];
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    GrayImage { height: h, width: w, data: out }
}

/// Source taps and weights for one output coordinate along an axis.
fn axis_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            if scale >= 1.0 {
                // Area averaging over [i*scale, (i+1)*scale).
                let (a, b) = (i as f64 * scale, (i + 1) as f64 * scale);
                let mut taps = Vec::new();
                let mut j = a.floor() as usize;
                while (j as f64) < b && j < src {
                    let overlap = (b.min(j as f64 + 1.0) - a.max(j as f64)).max(0.0);
                    if overlap > 0.0 {
                        taps.push((j, (overlap / scale) as f32));
                    }
                    j += 1;
                }
                taps
            } else {
                // Bilinear with pixel-center alignment.
                let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let j = p.floor() as usize;
                let f = (p - j as f64) as f32;
                if j + 1 < src && f > 0.0 {
                    vec![(j, 1.0 - f), (j + 1, f)]
                } else {
                    vec![(j, 1.0)]
                }
            }
        })
        .collect()
}

/// Resizes with area averaging when shrinking and bilinear interpolation
/// when enlarging, separably per axis.
pub fn resize(img: &GrayImage, height: usize, width: usize) -> GrayImage {
    if img.height == height && img.width == width {
        return img.clone();
    }
    let wx = axis_weights(img.width, width);
    let wy = axis_weights(img.height, height);
    let mut rows = vec![0f32; img.height * width];
    for y in 0..img.height {
        for (x, taps) in wx.iter().enumerate() {
            rows[y * width + x] = taps.iter().map(|&(j, w)| img.get(y, j) * w).sum();
        }
    }
    let mut out = vec![0f32; height * width];
    for (y, taps) in wy.iter().enumerate() {
        for x in 0..width {
            out[y * width + x] = taps.iter().map(|&(j, w)| rows[j * width + x] * w).sum();
        }
    }
    GrayImage { height, width, data: out }
}

/// Linear min-max map to [-1, 1]; constant images map to 0.
pub fn normalize_min_max(img: &GrayImage) -> GrayImage {
    let (lo, hi) = img.min_max();
    // Resampling can leave rounding-level ripples on flat images.
    if hi - lo <= 1e-6 * hi.abs().max(1.0) {
        return img.map(|_| 0.0);
    }
    let span = hi - lo;
    img.map(|v| ((v - lo) / span * 2.0 - 1.0).clamp(-1.0, 1.0))
}

/// CLAHE (if enabled), resize to the target size, then min-max to [-1, 1].
/// `raw` holds intensities in [0, 1].
pub fn preprocess(raw: &GrayImage, config: &PreprocessConfig) -> Result<GrayImage> {
    config.validate()?;
    if raw.is_empty() {
        return Err(invalid("empty image"));
    }
    let img = if config.clahe { clahe(raw, config.clahe_clip_limit, config.clahe_tiles) } else { raw.clone() };
    let img = resize(&img, config.target_size, config.target_size);
    Ok(normalize_min_max(&img))
}

/// Contrast curve applied after inverting JSRT radiographs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ContrastCurve {
    Identity,
    Gamma { gamma: f64 },
}

impl Default for ContrastCurve {
    fn default() -> Self {
        Self::Gamma { gamma: 0.8 }
    }
}

/// Inverts an image in [0, 1] (`v -> 1 - v`) and applies `curve`.
pub fn jsrt_to_negative(img: &GrayImage, curve: ContrastCurve) -> GrayImage {
    match curve {
        ContrastCurve::Identity => img.map(|v| 1.0 - v),
        ContrastCurve::Gamma { gamma } => img.map(|v| (1.0 - v).clamp(0.0, 1.0).powf(gamma as f32)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> GrayImage {
        let mut r = rng::seeded(seed, 0);
        GrayImage::new(h, w, (0..h * w).map(|_| r.random::<f32>()).collect()).unwrap()
    }

    fn small(size: usize) -> PreprocessConfig {
        PreprocessConfig { target_size: size, ..Default::default() }
    }

    #[test]
    fn constant_input_maps_to_zero() {
        let out = preprocess(&GrayImage::filled(40, 40, 0.5), &small(16)).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_input_is_resized_to_target() {
        let raw = random_image(2021, 2021, 1);
        let out = preprocess(&raw, &small(1024)).unwrap();
        assert_eq!((out.height, out.width), (1024, 1024));
    }

    #[test]
    fn non_constant_output_spans_unit_interval() {
        let out = preprocess(&random_image(50, 70, 2), &small(32)).unwrap();
        let (lo, hi) = out.min_max();
        assert_eq!((lo, hi), (-1.0, 1.0));
    }

    #[test]
    fn area_downscale_averages_blocks() {
        let img = GrayImage::new(2, 4, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let out = resize(&img, 1, 2);
        assert_eq!(out.data, vec![2.5, 4.5]);
        // Non-integer ratio keeps the mean.
        let img = random_image(7, 7, 3);
        let out = resize(&img, 3, 3);
        assert!((out.mean() - img.mean()).abs() < 1e-5);
    }

    #[test]
    fn upscale_preserves_constants() {
        let out = resize(&GrayImage::filled(3, 3, 0.25), 8, 8);
        assert!(out.data.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn clahe_raises_local_contrast() {
        // Low-contrast ramp occupying a narrow intensity band.
        let data = (0..256 * 256).map(|i| 0.4 + 0.1 * (i % 256) as f32 / 255.0).collect();
        let img = GrayImage::new(256, 256, data).unwrap();
        let out = clahe(&img, 2.0, 8);
        let (lo, hi) = out.min_max();
        assert!(hi - lo > 0.11, "{lo}..{hi}");
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn negative_conversion() {
        let img = random_image(8, 8, 4);
        let twice = jsrt_to_negative(&jsrt_to_negative(&img, ContrastCurve::Identity), ContrastCurve::Identity);
        for (a, b) in twice.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-6);
        }
        let black = jsrt_to_negative(&GrayImage::filled(2, 2, 0.0), ContrastCurve::default());
        assert!(black.data.iter().all(|&v| v == 1.0));
        let inv = jsrt_to_negative(&img, ContrastCurve::Identity);
        assert!((inv.mean() - (1.0 - img.mean())).abs() < 1e-6);
    }

    #[test]
    fn bad_config_is_rejected() {
        let img = random_image(4, 4, 0);
        assert!(preprocess(&img, &small(0)).is_err());
        let cfg = PreprocessConfig { clahe_clip_limit: 0.0, ..small(4) };
        assert!(preprocess(&img, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn output_is_bounded_and_sized(h in 3usize..40, w in 3usize..40, size in 1usize..24, seed in 0u64..1000, clahe in any::<bool>()) {
            let cfg = PreprocessConfig { target_size: size, clahe, ..Default::default() };
            let out = preprocess(&random_image(h, w, seed), &cfg).unwrap();
            prop_assert_eq!((out.height, out.width), (size, size));
            prop_assert!(out.data.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
