//! Image-quality metrics for soft-tissue estimates and a radial power
//! spectrum profiler.

use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::GrayImage;
use crate::nn::scalar;
use crate::perceptual::FeatureExtractor;

/// Fraction of bone energy removed: `1 - sum((S - S_hat)^2) / sum(B^2)`.
pub fn bsr(s: &GrayImage, s_hat: &GrayImage, bone: &GrayImage) -> Result<f64> {
    s.same_shape(s_hat)?;
    s.same_shape(bone)?;
    let denom: f64 = bone.data.iter().map(|&b| (b as f64).powi(2)).sum();
    if denom <= 0.0 {
        return Err(Error::Domain("bone image has zero energy; suppression ratio is undefined".into()));
    }
    let resid: f64 = s.data.iter().zip(&s_hat.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(1.0 - resid / denom)
}

/// Mean squared error and PSNR in dB; PSNR is `+inf` for identical images.
pub fn mse_psnr(s: &GrayImage, s_hat: &GrayImage, max_value: f64) -> Result<(f64, f64)> {
    s.same_shape(s_hat)?;
    if !(max_value > 0.0) {
        return Err(invalid(format!("max_value must be positive, got {max_value}")));
    }
    let mse =
        s.data.iter().zip(&s_hat.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / s.len() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (max_value * max_value / mse).log10() };
    Ok((mse, psnr))
}

/// How per-layer feature differences are reduced.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum LpipsMode {
    /// Squared feature differences averaged over positions, channels and
    /// layers, with no normalization or weighting.
    #[default]
    Literal,
    /// Features unit-normalized along channels, squared differences weighted
    /// per channel (one weight vector per layer) and summed over channels.
    Learned(Vec<Vec<f64>>),
}

fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
    Ok(f.broadcast_div(&norm)?)
}

pub fn lpips_with(s: &GrayImage, s_hat: &GrayImage, extractor: &dyn FeatureExtractor, mode: &LpipsMode) -> Result<f64> {
    s.same_shape(s_hat)?;
    let dev = Device::Cpu;
    let a = extractor.features(&s.to_tensor(extractor.dtype(), &dev)?)?;
    let b = extractor.features(&s_hat.to_tensor(extractor.dtype(), &dev)?)?;
    if a.is_empty() {
        return Err(Error::ExtractorUnavailable(format!("{} produced no feature layers", extractor.name())));
    }
    let mut total = 0.0;
    for (l, (fa, fb)) in a.iter().zip(&b).enumerate() {
        total += match mode {
            LpipsMode::Literal => scalar(&(fa - fb)?.sqr()?.mean_all()?)?,
            LpipsMode::Learned(weights) => {
                let w = weights
                    .get(l)
                    .ok_or_else(|| Error::ExtractorUnavailable(format!("no learned weights for layer {l}")))?;
                let c = fa.dim(1)?;
                if w.len() != c {
                    return Err(Error::ShapeMismatch { expected: vec![c], actual: vec![w.len()] });
                }
                let w = Tensor::from_slice(w, (1, c, 1, 1), &dev)?.to_dtype(fa.dtype())?;
                let d = (unit_normalize(fa)? - unit_normalize(fb)?)?.sqr()?.broadcast_mul(&w)?;
                scalar(&d.sum_keepdim(1)?.mean_all()?)?
            }
        };
    }
    Ok(total / a.len() as f64)
}

pub fn lpips(s: &GrayImage, s_hat: &GrayImage, extractor: &dyn FeatureExtractor) -> Result<f64> {
    lpips_with(s, s_hat, extractor, &LpipsMode::Literal)
}

/// Mean and sample standard deviation (n - 1 denominator).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }

    pub fn format(&self, decimals: usize) -> String {
        format!("{:.*} ± {:.*}", decimals, self.mean, decimals, self.std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub bsr: f64,
    pub mse: f64,
    pub psnr: f64,
    pub lpips: f64,
}

/// Evaluates one estimate. Images are in [-1, 1] and are rescaled to [0, 1]
/// before measuring; `bone` defaults to `max(cxr - s, 0)` in that range.
pub fn evaluate_pair(
    id: &str,
    s: &GrayImage,
    s_hat: &GrayImage,
    bone: Option<&GrayImage>,
    cxr: &GrayImage,
    extractor: &dyn FeatureExtractor,
) -> Result<ImageMetrics> {
    let s = s.to_unit_range();
    let s_hat = s_hat.to_unit_range();
    let b = match bone {
        Some(b) => b.to_unit_range(),
        None => {
            let c = cxr.to_unit_range();
            c.same_shape(&s)?;
            GrayImage::new(s.height, s.width, c.data.iter().zip(&s.data).map(|(c, t)| (c - t).max(0.0)).collect())?
        }
    };
    let (mse, psnr) = mse_psnr(&s, &s_hat, 1.0)?;
    Ok(ImageMetrics { id: id.to_string(), bsr: bsr(&s, &s_hat, &b)?, mse, psnr, lpips: lpips(&s, &s_hat, extractor)? })
}

/// Per-image rows plus mean ± std summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub extractor: String,
    pub rows: Vec<ImageMetrics>,
    pub bsr: MeanStd,
    pub mse: MeanStd,
    pub psnr: MeanStd,
    pub lpips: MeanStd,
}

impl MetricReport {
    pub fn from_rows(extractor: &str, rows: Vec<ImageMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("no images to summarize".into()));
        }
        let col = |f: fn(&ImageMetrics) -> f64| MeanStd::of(&rows.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            extractor: extractor.to_string(),
            bsr: col(|r| r.bsr),
            mse: col(|r| r.mse),
            psnr: col(|r| r.psnr),
            lpips: col(|r| r.lpips),
            rows,
        })
    }

    pub fn summary_lines(&self) -> Vec<String> {
        vec![
            format!("BSR   {}", self.bsr.format(3)),
            format!("MSE   {}", self.mse.format(4)),
            format!("PSNR  {}", self.psnr.format(3)),
            format!("LPIPS {} ({})", self.lpips.format(3), self.extractor),
        ]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Summary JSON with numeric values and `mean ± std` strings.
    pub fn write_summary_json(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let v = serde_json::json!({
            "extractor": self.extractor,
            "count": self.rows.len(),
            "bsr": self.bsr,
            "mse": self.mse,
            "psnr": self.psnr,
            "lpips": self.lpips,
            "formatted": {
                "bsr": self.bsr.format(3),
                "mse": self.mse.format(4),
                "psnr": self.psnr.format(3),
                "lpips": self.lpips.format(3),
            },
        });
        let mut f = std::fs::File::create(path)?;
        f.write_all(serde_json::to_string_pretty(&v)?.as_bytes())?;
        Ok(())
    }
}

/// Radially averaged power spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsdProfile {
    /// Bin centers in cycles per pixel, ascending over [0, 0.5].
    pub frequencies: Vec<f64>,
    pub power: Vec<f64>,
    pub samples: usize,
}

impl PsdProfile {
    pub fn bins(&self) -> usize {
        self.power.len()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "frequency,power")?;
        for (fr, p) in self.frequencies.iter().zip(&self.power) {
            writeln!(f, "{fr},{p}")?;
        }
        Ok(())
    }
}

/// Signed frequency of FFT index `k` for length `n`, in cycles per sample.
fn fft_freq(k: usize, n: usize) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k / n as f64
}

/// Per-image `|F|^2 / N`, binned by radial frequency into `n_bins` equal
/// bins on [0, 0.5]; frequencies beyond 0.5 (the corners) are dropped.
pub fn psd_profile(images: &[GrayImage], n_bins: usize) -> Result<PsdProfile> {
    let first = images.first().ok_or_else(|| Error::Empty("no images for the power spectrum".into()))?;
    if n_bins < 2 {
        return Err(invalid(format!("need at least 2 bins, got {n_bins}")));
    }
    if first.height != first.width {
        return Err(invalid(format!("images must be square, got {}x{}", first.height, first.width)));
    }
    let n = first.height;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);

    let bin_of: Vec<Option<usize>> = (0..n * n)
        .map(|i| {
            let r = fft_freq(i / n, n).hypot(fft_freq(i % n, n));
            (r <= 0.5).then(|| ((r / 0.5 * n_bins as f64) as usize).min(n_bins - 1))
        })
        .collect();
    let mut counts = vec![0usize; n_bins];
    for b in bin_of.iter().flatten() {
        counts[*b] += 1;
    }

    let mut sums = vec![0.0f64; n_bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n * n];
    let mut col = vec![Complex::new(0.0, 0.0); n];
    for img in images {
        img.same_shape(first)?;
        for (b, &v) in buf.iter_mut().zip(&img.data) {
            *b = Complex::new(v as f64, 0.0);
        }
        for row in buf.chunks_mut(n) {
            fft.process(row);
        }
        for x in 0..n {
            for y in 0..n {
                col[y] = buf[y * n + x];
            }
            fft.process(&mut col);
            for y in 0..n {
                buf[y * n + x] = col[y];
            }
        }
        for (c, b) in buf.iter().zip(&bin_of) {
            if let Some(b) = b {
                sums[*b] += c.norm_sqr() / (n * n) as f64;
            }
        }
    }
    let m = images.len() as f64;
    Ok(PsdProfile {
        frequencies: (0..n_bins).map(|i| (i as f64 + 0.5) * 0.5 / n_bins as f64).collect(),
        power: sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { 0.0 } else { s / (c as f64 * m) }).collect(),
        samples: images.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perceptual::{IdentityExtractor, SeededConvExtractor};
    use crate::rng;
    use candle_core::DType;
    use proptest::prelude::*;
    use rand::Rng;

    fn img(h: usize, w: usize, v: &[f32]) -> GrayImage {
        GrayImage::new(h, w, v.to_vec()).unwrap()
    }

    fn noise_img(n: usize, seed: u64, scale: f32) -> GrayImage {
        let v = rng::gaussian_vec(&mut rng::seeded(seed, 0), n * n);
        GrayImage::new(n, n, v.into_iter().map(|x| x * scale).collect()).unwrap()
    }

    #[test]
    fn bsr_examples() {
        let s = img(1, 2, &[0.0, 0.0]);
        let b = img(1, 2, &[1.0, 1.0]);
        assert_eq!(bsr(&s, &s, &b).unwrap(), 1.0);
        let s_hat = img(1, 2, &[0.1, 0.1]);
        let expected = 1.0 - (0.1f32 as f64).powi(2) * 2.0 / 2.0;
        assert!((bsr(&s, &s_hat, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.99).abs() < 1e-8);
        let s_hat = img(1, 2, &[1.0, -1.0]);
        assert_eq!(bsr(&s, &s_hat, &b).unwrap(), 0.0);
    }

    #[test]
    fn bsr_zero_bone_is_an_error() {
        let s = img(1, 2, &[0.0, 0.0]);
        assert!(matches!(bsr(&s, &s, &s), Err(Error::Domain(_))));
    }

    #[test]
    fn psnr_examples() {
        let a = img(1, 4, &[0.2, 0.4, 0.6, 0.8]);
        let (m, p) = mse_psnr(&a, &a, 1.0).unwrap();
        assert_eq!(m, 0.0);
        assert!(p.is_infinite() && p > 0.0);
        let z = img(1, 4, &[0.0; 4]);
        let d = img(1, 4, &[0.1; 4]);
        let (m, p) = mse_psnr(&z, &d, 1.0).unwrap();
        assert!((m - 0.01).abs() < 1e-8);
        assert!((p - 20.0).abs() < 1e-5);
    }

    #[test]
    fn mse_matches_brute_force() {
        let a = noise_img(8, 1, 0.3);
        let b = noise_img(8, 2, 0.3);
        let (m, p) = mse_psnr(&a, &b, 1.0).unwrap();
        let mut brute = 0.0;
        for i in 0..64 {
            brute += (a.data[i] as f64 - b.data[i] as f64).powi(2) / 64.0;
        }
        assert!((m - brute).abs() < 1e-9);
        assert!((p - 10.0 * (1.0 / brute).log10()).abs() < 1e-9);
    }

    #[test]
    fn lpips_identity_extractor_is_mse() {
        let a = noise_img(8, 3, 0.2);
        let b = noise_img(8, 4, 0.2);
        let l = lpips(&a, &b, &IdentityExtractor::default()).unwrap();
        let (m, _) = mse_psnr(&a, &b, 1.0).unwrap();
        assert!((l - m).abs() < 1e-12);
        assert_eq!(lpips(&a, &a, &IdentityExtractor::default()).unwrap(), 0.0);
    }

    #[test]
    fn lpips_grows_with_perturbation() {
        let ext = SeededConvExtractor::new(DType::F32, &Device::Cpu).unwrap();
        let base = noise_img(32, 5, 0.2).map(|v| 0.5 + v);
        let mut medians = Vec::new();
        for sigma in [0.0, 0.02, 0.05, 0.1, 0.2] {
            let mut vals: Vec<f64> = (0..20)
                .map(|trial| {
                    let n = noise_img(32, 100 + trial, sigma);
                    let pert =
                        GrayImage::new(32, 32, base.data.iter().zip(&n.data).map(|(a, b)| a + b).collect()).unwrap();
                    lpips(&base, &pert, &ext).unwrap()
                })
                .collect();
            vals.sort_by(f64::total_cmp);
            medians.push((vals[9] + vals[10]) / 2.0);
        }
        assert!(medians.windows(2).all(|w| w[1] >= w[0]), "{medians:?}");
    }

    #[test]
    fn lpips_learned_mode_checks_weights() {
        let a = noise_img(8, 3, 0.2);
        let ident = IdentityExtractor::default();
        assert!(lpips_with(&a, &a, &ident, &LpipsMode::Learned(vec![])).is_err());
        assert!(lpips_with(&a, &a, &ident, &LpipsMode::Learned(vec![vec![1.0, 2.0]])).is_err());
        assert_eq!(lpips_with(&a, &a, &ident, &LpipsMode::Learned(vec![vec![1.0]])).unwrap(), 0.0);
    }

    #[test]
    fn mean_std_formatting() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert_eq!(m.std, 1.0);
        assert_eq!(MeanStd { mean: 0.9761, std: 0.0183 }.format(3), "0.976 ± 0.018");
    }

    #[test]
    fn report_files() {
        let rows = vec![
            ImageMetrics { id: "a".into(), bsr: 0.9, mse: 0.001, psnr: 30.0, lpips: 0.1 },
            ImageMetrics { id: "b".into(), bsr: 0.8, mse: 0.002, psnr: 27.0, lpips: 0.2 },
        ];
        let r = MetricReport::from_rows("identity", rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write_csv(&dir.path().join("m.csv")).unwrap();
        r.write_summary_json(&dir.path().join("s.json")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap()).unwrap();
        assert_eq!(json["extractor"], "identity");
        assert!((json["bsr"]["mean"].as_f64().unwrap() - 0.85).abs() < 1e-12);
        assert!(MetricReport::from_rows("x", vec![]).is_err());
    }

    #[test]
    fn psd_constant_is_dc_only() {
        let p = psd_profile(&[GrayImage::filled(32, 32, 0.7)], 16).unwrap();
        assert!(p.power[0] > 1.0);
        assert!(p.power[1..].iter().all(|&v| v.abs() < 1e-20));
        assert!(p.frequencies.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn psd_white_noise_is_flat() {
        let imgs: Vec<GrayImage> = (0..1000).map(|i| noise_img(64, i, 1.0)).collect();
        let p = psd_profile(&imgs, 32).unwrap();
        for &v in &p.power[1..] {
            let db = 10.0 * v.log10();
            assert!(db.abs() < 3.0, "{db} dB");
        }
    }

    /// Images with power falling as 1/f^2, built in the frequency domain.
    fn brown_image(n: usize, seed: u64) -> GrayImage {
        let mut r = rng::seeded(seed, 0);
        let mut planner = FftPlanner::<f64>::new();
        let ifft = planner.plan_fft_inverse(n);
        let mut buf: Vec<Complex<f64>> = (0..n * n)
            .map(|i| {
                let f = fft_freq(i / n, n).hypot(fft_freq(i % n, n));
                if f == 0.0 {
                    Complex::new(0.0, 0.0)
                } else {
                    let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
                    Complex::from_polar(1.0 / f, phase)
                }
            })
            .collect();
        for row in buf.chunks_mut(n) {
            ifft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for x in 0..n {
            for y in 0..n {
                col[y] = buf[y * n + x];
            }
            ifft.process(&mut col);
            for y in 0..n {
                buf[y * n + x] = col[y];
            }
        }
        GrayImage::new(n, n, buf.iter().map(|c| (c.re / (n * n) as f64) as f32).collect()).unwrap()
    }

    #[test]
    fn psd_of_brown_noise_decreases() {
        let imgs: Vec<GrayImage> = (0..20).map(|i| brown_image(64, i)).collect();
        let p = psd_profile(&imgs, 16).unwrap();
        assert!(p.power.windows(2).all(|w| w[1] < w[0]), "{:?}", p.power);
        assert!(p.power[0] >= 100.0 * p.power[15]);
    }

    #[test]
    fn psd_is_additive_for_independent_fields() {
        let a: Vec<GrayImage> = (0..300).map(|i| noise_img(32, i, 1.0)).collect();
        let b: Vec<GrayImage> = (0..300).map(|i| brown_image(32, 1000 + i)).collect();
        let sum: Vec<GrayImage> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| GrayImage::new(32, 32, x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect()).unwrap())
            .collect();
        let (pa, pb, ps) = (psd_profile(&a, 8).unwrap(), psd_profile(&b, 8).unwrap(), psd_profile(&sum, 8).unwrap());
        for i in 1..8 {
            let expected = pa.power[i] + pb.power[i];
            assert!((ps.power[i] - expected).abs() <= 0.1 * expected, "bin {i}");
        }
    }

    #[test]
    fn psd_errors() {
        assert!(matches!(psd_profile(&[], 8), Err(Error::Empty(_))));
        assert!(psd_profile(&[GrayImage::filled(4, 4, 0.0)], 1).is_err());
        assert!(psd_profile(&[GrayImage::filled(4, 8, 0.0)], 4).is_err());
    }

    proptest! {
        #[test]
        fn bsr_depends_only_on_residual(v in prop::collection::vec(-1.0f32..1.0, 16), d in prop::collection::vec(-0.2f32..0.2, 16), shift in prop::collection::vec(-1.0f32..1.0, 16)) {
            let s = img(4, 4, &v);
            let s_hat = img(4, 4, &v.iter().zip(&d).map(|(a, b)| a + b).collect::<Vec<_>>());
            let b = GrayImage::filled(4, 4, 0.5);
            let s2 = img(4, 4, &s.data.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>());
            let s2_hat = img(4, 4, &s_hat.data.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>());
            let x = bsr(&s, &s_hat, &b).unwrap();
            let y = bsr(&s2, &s2_hat, &b).unwrap();
            prop_assert!(x <= 1.0);
            prop_assert!((x - y).abs() < 1e-5);
        }

        #[test]
        fn mse_psnr_is_symmetric(a in prop::collection::vec(0.0f32..1.0, 16), b in prop::collection::vec(0.0f32..1.0, 16)) {
            let (x, y) = (img(4, 4, &a), img(4, 4, &b));
            prop_assert_eq!(mse_psnr(&x, &y, 1.0).unwrap(), mse_psnr(&y, &x, 1.0).unwrap());
        }
    }
}
