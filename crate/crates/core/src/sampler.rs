//! Reverse diffusion with per-step latent thresholding, and end-to-end
//! soft-tissue generation from a radiograph.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::GrayImage;
use crate::ldm::NoiseEstimator;
use crate::rng;
use crate::schedules::{check_same_shape, NoiseSchedule};
use crate::vq::VqCompressor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdKind {
    None,
    Static,
    Dynamic,
    Temporal,
}

impl ThresholdKind {
    pub const ALL: [ThresholdKind; 4] = [Self::None, Self::Static, Self::Dynamic, Self::Temporal];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Static => "static",
            Self::Dynamic => "dynamic",
            Self::Temporal => "temporal",
        }
    }
}

impl std::str::FromStr for ThresholdKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown threshold kind {s:?} (none, static, dynamic, temporal)")))
    }
}

/// How latents are clipped after each reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdPolicy {
    pub kind: ThresholdKind,
    /// Slope of the temporal bound `s = omega * t + intercept`.
    pub omega: f64,
    pub intercept: f64,
    /// Percentile of `|z|` used by the dynamic policy.
    pub percentile: f64,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        Self { kind: ThresholdKind::Temporal, omega: 0.003, intercept: 1.4, percentile: 99.5 }
    }
}

impl ThresholdPolicy {
    pub fn of_kind(kind: ThresholdKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ThresholdKind::Temporal if !(self.omega > 0.0 && self.intercept >= 1.0) => Err(invalid(format!(
                "temporal thresholding needs omega > 0 and intercept >= 1, got omega={} intercept={}",
                self.omega, self.intercept
            ))),
            ThresholdKind::Dynamic if !(self.percentile > 50.0 && self.percentile <= 100.0) => {
                Err(invalid(format!("dynamic percentile must lie in (50, 100], got {}", self.percentile)))
            }
            _ => Ok(()),
        }
    }

    /// The temporal bound at timestep `t`.
    pub fn temporal_bound(&self, t: usize) -> f64 {
        self.omega * t as f64 + self.intercept
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

/// Applies `policy` at timestep `t`. Returns the thresholded latent and the
/// bound that was used (the largest per-sample bound for the dynamic policy).
pub fn apply_threshold_with_bound(z: &Tensor, t: usize, policy: &ThresholdPolicy) -> Result<(Tensor, Option<f64>)> {
    policy.validate()?;
    match policy.kind {
        ThresholdKind::None => Ok((z.clone(), None)),
        ThresholdKind::Static => Ok((z.clamp(-1.0, 1.0)?, Some(1.0))),
        ThresholdKind::Temporal => {
            let s = policy.temporal_bound(t);
            Ok((z.clamp(-s, s)?, Some(s)))
        }
        ThresholdKind::Dynamic => {
            let n = z.dim(0)?;
            let mut rows = Vec::with_capacity(n);
            let mut largest = 1.0f64;
            for i in 0..n {
                let row = z.narrow(0, i, 1)?;
                let abs: Vec<f64> = row.abs()?.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
                let s = percentile(&abs, policy.percentile);
                rows.push(if s > 1.0 {
                    largest = largest.max(s);
                    (row.clamp(-s, s)? / s)?
                } else {
                    row.clamp(-1.0, 1.0)?
                });
            }
            Ok((Tensor::cat(&rows, 0)?, Some(largest)))
        }
    }
}

pub fn apply_threshold(z: &Tensor, t: usize, policy: &ThresholdPolicy) -> Result<Tensor> {
    Ok(apply_threshold_with_bound(z, t, policy)?.0)
}

/// Timestep whose bound is applied to the output of the step taken at `t`.
fn destination(t: usize) -> usize {
    t.saturating_sub(1)
}

/// One ancestral step from `z_t` to `z_{t-1}`, thresholded at `t-1`.
///
/// `noise` is ignored at `t = 0` (no noise enters the final step).
pub fn reverse_step(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
    policy: &ThresholdPolicy,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    Ok(reverse_step_with_bound(z_t, t, eps_hat, schedule, policy, noise)?.0)
}

fn reverse_step_with_bound(
    z_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    schedule: &NoiseSchedule,
    policy: &ThresholdPolicy,
    noise: Option<&Tensor>,
) -> Result<(Tensor, Option<f64>)> {
    schedule.check_t(t)?;
    check_same_shape(z_t, eps_hat)?;
    let alpha = schedule.alpha[t];
    let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar[t]).sqrt();
    let mut z = ((z_t - (eps_hat * coef)?)? / alpha.sqrt())?;
    if let (true, Some(noise)) = (t > 0, noise) {
        check_same_shape(z_t, noise)?;
        z = (z + (noise * schedule.sigma[t])?)?;
    }
    apply_threshold_with_bound(&z, destination(t), policy)
}

/// Latent statistics after one reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// Timestep of the step that produced this latent.
    pub t: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    /// Bound applied after the step, if any.
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerTrace {
    pub rows: Vec<TraceRow>,
}

impl SamplerTrace {
    pub const CSV_HEADER: &'static str = "step,t,min,max,mean,std,threshold";

    fn record(&mut self, t: usize, z: &Tensor, threshold: Option<f64>) -> Result<()> {
        let v: Vec<f64> = z.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        self.rows.push(TraceRow {
            t,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean,
            std: var.sqrt(),
            threshold,
        });
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", Self::CSV_HEADER)?;
        for (i, r) in self.rows.iter().enumerate() {
            let s = r.threshold.map(|s| s.to_string()).unwrap_or_default();
            writeln!(f, "{i},{},{},{},{},{},{s}", r.t, r.min, r.max, r.mean, r.std)?;
        }
        Ok(())
    }
}

fn sample_noise(rngs: &mut [rng::SeededRng], per_sample: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = per_sample.iter().product();
    let mut data = Vec::with_capacity(rngs.len() * n);
    for r in rngs.iter_mut() {
        data.extend(rng::gaussian_vec(r, n));
    }
    let mut dims = vec![rngs.len()];
    dims.extend_from_slice(per_sample);
    Ok(Tensor::from_vec(data, dims, device)?.to_dtype(dtype)?)
}

/// Runs the full reverse chain for a batch of conditions.
///
/// Each batch element draws its starting latent and step noise from its own
/// generator seeded by `seeds[i]`, so results do not depend on batching.
pub fn sample_latent(
    estimator: &dyn NoiseEstimator,
    cond: &Tensor,
    schedule: &NoiseSchedule,
    policy: &ThresholdPolicy,
    seeds: &[u64],
    mut trace: Option<&mut SamplerTrace>,
) -> Result<Tensor> {
    policy.validate()?;
    let n = cond.dim(0)?;
    if seeds.len() != n {
        return Err(invalid(format!("{} seeds for a batch of {n}", seeds.len())));
    }
    let per_sample = &cond.dims()[1..];
    let mut rngs: Vec<_> = seeds.iter().map(|&s| rng::seeded(s, 0)).collect();
    let mut z = sample_noise(&mut rngs, per_sample, cond.dtype(), cond.device())?;
    for t in (0..schedule.steps()).rev() {
        let eps_hat = estimator.predict_noise(&z, &vec![t; n], cond)?;
        let noise = if t > 0 { Some(sample_noise(&mut rngs, per_sample, cond.dtype(), cond.device())?) } else { None };
        let (next, bound) = reverse_step_with_bound(&z, t, &eps_hat, schedule, policy, noise.as_ref())?;
        // Sampling never backpropagates; detaching keeps the op graph from
        // growing with T (and from overflowing the stack when dropped).
        z = next.detach();
        if let Some(tr) = trace.as_deref_mut() {
            tr.record(t, &z, bound)?;
        }
    }
    Ok(z)
}

/// Compressor and estimator wired together for image-to-image sampling.
pub struct SoftTissueSampler<'a> {
    pub compressor: &'a VqCompressor,
    pub estimator: &'a dyn NoiseEstimator,
    pub schedule: &'a NoiseSchedule,
    /// Scale the estimator was trained with (see the LDM training config).
    pub latent_scale: f64,
}

impl SoftTissueSampler<'_> {
    /// Generates one soft-tissue image per radiograph. Inputs are in [-1, 1].
    pub fn sample(
        &self,
        cxrs: &[&GrayImage],
        policy: &ThresholdPolicy,
        seeds: &[u64],
        trace: Option<&mut SamplerTrace>,
    ) -> Result<Vec<GrayImage>> {
        let device = Device::Cpu;
        let x = GrayImage::stack(cxrs, DType::F32, &device)?;
        let cond = (self.compressor.encode(&x)? * self.latent_scale)?;
        let z0 = sample_latent(self.estimator, &cond, self.schedule, policy, seeds, trace)?;
        let q = self.compressor.quantize(&(z0 / self.latent_scale)?)?;
        let out = self.compressor.decode(&q.z_q)?;
        GrayImage::unstack(&out)
    }
}

/// Single-image convenience wrapper around [`SoftTissueSampler`].
pub fn sample_soft_tissue(
    cxr: &GrayImage,
    compressor: &VqCompressor,
    estimator: &dyn NoiseEstimator,
    schedule: &NoiseSchedule,
    latent_scale: f64,
    policy: &ThresholdPolicy,
    seed: u64,
) -> Result<GrayImage> {
    let s = SoftTissueSampler { compressor, estimator, schedule, latent_scale };
    Ok(s.sample(&[cxr], policy, &[seed], None)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::scalar;
    use crate::schedules::{forward_noise, make_cosine_schedule};
    use proptest::prelude::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, (1, 1, 1, v.len()), &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn temporal_bound_examples() {
        let p = ThresholdPolicy::default();
        assert_eq!(vals(&apply_threshold(&t1(&[1.7]), 0, &p).unwrap()), vec![1.4]);
        assert!((p.temporal_bound(999) - 4.397).abs() < 1e-12);
        assert_eq!(vals(&apply_threshold(&t1(&[1.7]), 999, &p).unwrap()), vec![1.7]);
    }

    #[test]
    fn static_clamps_to_unit() {
        let p = ThresholdPolicy::of_kind(ThresholdKind::Static);
        assert_eq!(vals(&apply_threshold(&t1(&[-1.6, 0.3]), 500, &p).unwrap()), vec![-1.0, 0.3]);
    }

    #[test]
    fn none_is_identity() {
        let p = ThresholdPolicy::of_kind(ThresholdKind::None);
        assert_eq!(vals(&apply_threshold(&t1(&[-7.0, 3.0]), 5, &p).unwrap()), vec![-7.0, 3.0]);
    }

    #[test]
    fn dynamic_percentile_example() {
        // 1000 values: 994 at 0.5, five at 2.0, one at 3.0. Sorted ranks 994..998
        // are 2.0; the 99.5th percentile sits at rank 994.005, i.e. exactly 2.0.
        let mut v = vec![0.5; 994];
        v.extend([2.0, -2.0, 2.0, -2.0, 2.0]);
        v.push(-3.0);
        let abs: Vec<f64> = v.iter().map(|x: &f64| x.abs()).collect();
        assert_eq!(percentile(&abs, 99.5), 2.0);
        let p = ThresholdPolicy::of_kind(ThresholdKind::Dynamic);
        let out = vals(&apply_threshold(&t1(&v), 10, &p).unwrap());
        // Brute force: clamp to [-2, 2], divide by 2.
        for (o, x) in out.iter().zip(&v) {
            assert_eq!(*o, x.clamp(-2.0, 2.0) / 2.0);
        }
        assert_eq!(out.iter().fold(0.0f64, |m, x| m.max(x.abs())), 1.0);
    }

    #[test]
    fn dynamic_below_one_is_static() {
        let p = ThresholdPolicy::of_kind(ThresholdKind::Dynamic);
        let mut v = vec![0.2; 999];
        v.push(5.0);
        let out = vals(&apply_threshold(&t1(&v), 10, &p).unwrap());
        assert_eq!(out[999], 1.0);
        assert_eq!(out[0], 0.2);
    }

    #[test]
    fn dynamic_is_per_sample() {
        let p = ThresholdPolicy::of_kind(ThresholdKind::Dynamic);
        let z = Tensor::from_slice(&[4.0f64, 4.0, 0.5, 0.5], (2, 1, 1, 2), &Device::Cpu).unwrap();
        assert_eq!(vals(&apply_threshold(&z, 0, &p).unwrap()), vec![1.0, 1.0, 0.5, 0.5]);
    }

    #[test]
    fn invalid_policies_are_rejected() {
        let bad = [
            ThresholdPolicy { omega: 0.0, ..Default::default() },
            ThresholdPolicy { intercept: 0.9, ..Default::default() },
            ThresholdPolicy { kind: ThresholdKind::Dynamic, percentile: 50.0, ..Default::default() },
        ];
        for p in bad {
            assert!(p.validate().is_err());
        }
        assert!("temporal".parse::<ThresholdKind>().is_ok());
        assert!("bogus".parse::<ThresholdKind>().is_err());
    }

    #[test]
    fn reverse_step_inverts_single_step_forward() {
        let schedule = NoiseSchedule::from_betas(vec![0.3]).unwrap();
        let dev = Device::Cpu;
        let z0 = Tensor::from_vec(rng::gaussian_vec_f64(&mut rng::seeded(1, 0), 48), (1, 3, 4, 4), &dev).unwrap();
        let eps = Tensor::from_vec(rng::gaussian_vec_f64(&mut rng::seeded(2, 0), 48), (1, 3, 4, 4), &dev).unwrap();
        let zt = forward_noise(&z0, 0, &schedule, &eps).unwrap();
        let none = ThresholdPolicy::of_kind(ThresholdKind::None);
        let back = reverse_step(&zt, 0, &eps, &schedule, &none, Some(&eps)).unwrap();
        let err = scalar(&(back - &z0).unwrap().abs().unwrap().max_all().unwrap()).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let schedule = make_cosine_schedule(1000, 0.008, 0.02).unwrap();
        let z = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        for kind in ThresholdKind::ALL {
            let out = reverse_step(&z, 500, &z, &schedule, &ThresholdPolicy::of_kind(kind), Some(&z)).unwrap();
            assert!(vals(&out).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn reverse_step_rejects_out_of_range_t() {
        let schedule = make_cosine_schedule(10, 0.008, 0.02).unwrap();
        let z = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(reverse_step(&z, 10, &z, &schedule, &ThresholdPolicy::default(), None).is_err());
    }

    /// Predicts a large constant so that the unclipped chain drifts.
    struct Drift;

    impl NoiseEstimator for Drift {
        fn predict_noise(&self, z_t: &Tensor, _ts: &[usize], _cond: &Tensor) -> Result<Tensor> {
            Ok((z_t.ones_like()? * -3.0)?)
        }
    }

    #[test]
    fn temporal_trace_respects_bounds_and_slope() {
        let schedule = make_cosine_schedule(200, 0.008, 0.02).unwrap();
        let cond = Tensor::zeros((2, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let p = ThresholdPolicy::default();
        let mut trace = SamplerTrace::default();
        let z = sample_latent(&Drift, &cond, &schedule, &p, &[1, 2], Some(&mut trace)).unwrap();
        assert_eq!(trace.rows.len(), 200);
        assert_eq!(z.dims(), &[2, 3, 4, 4]);
        for r in &trace.rows {
            let s = r.threshold.unwrap();
            assert!(r.max <= s + 1e-6 && -r.min <= s + 1e-6);
        }
        // Rows run from t = T-1 down to 0; bounds grow with t at slope omega.
        for w in trace.rows.windows(2).filter(|w| w[1].t >= 1) {
            let d = w[0].threshold.unwrap() - w[1].threshold.unwrap();
            assert!((d - p.omega).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_batch_independent() {
        let schedule = make_cosine_schedule(50, 0.008, 0.02).unwrap();
        let cond = Tensor::zeros((2, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let p = ThresholdPolicy::default();
        let a =
            vals(&sample_latent(&Drift, &cond, &schedule, &p, &[7, 8], None).unwrap().to_dtype(DType::F64).unwrap());
        let b =
            vals(&sample_latent(&Drift, &cond, &schedule, &p, &[7, 8], None).unwrap().to_dtype(DType::F64).unwrap());
        assert_eq!(a, b);
        let single = cond.narrow(0, 1, 1).unwrap();
        let c = vals(&sample_latent(&Drift, &single, &schedule, &p, &[8], None).unwrap().to_dtype(DType::F64).unwrap());
        assert_eq!(&a[48..], &c[..]);
    }

    #[test]
    fn trace_csv_has_one_row_per_step() {
        let schedule = make_cosine_schedule(20, 0.008, 0.02).unwrap();
        let cond = Tensor::zeros((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap();
        let mut trace = SamplerTrace::default();
        sample_latent(&Drift, &cond, &schedule, &ThresholdPolicy::default(), &[0], Some(&mut trace)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        trace.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 21);
        assert!(text.starts_with(SamplerTrace::CSV_HEADER));
    }

    fn policy_strategy() -> impl Strategy<Value = ThresholdPolicy> {
        prop_oneof![
            Just(ThresholdPolicy::of_kind(ThresholdKind::None)),
            Just(ThresholdPolicy::of_kind(ThresholdKind::Static)),
            (0.0001f64..0.01, 1.0f64..3.0).prop_map(|(omega, intercept)| ThresholdPolicy {
                omega,
                intercept,
                ..Default::default()
            }),
        ]
    }

    proptest! {
        #[test]
        fn threshold_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..64), t in 0usize..1000, p in policy_strategy()) {
            let once = apply_threshold(&t1(&v), t, &p).unwrap();
            let twice = apply_threshold(&once, t, &p).unwrap();
            prop_assert_eq!(vals(&once), vals(&twice));
        }

        #[test]
        fn threshold_never_grows_max_abs(v in prop::collection::vec(-10.0f64..10.0, 1..64), t in 0usize..1000, p in policy_strategy()) {
            let before = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let after = vals(&apply_threshold(&t1(&v), t, &p).unwrap()).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            prop_assert!(after <= before);
        }

        #[test]
        fn temporal_output_within_destination_bound(
            v in prop::collection::vec(-10.0f64..10.0, 16),
            e in prop::collection::vec(-3.0f64..3.0, 16),
            t in 1usize..1000,
        ) {
            let schedule = make_cosine_schedule(1000, 0.008, 0.02).unwrap();
            let p = ThresholdPolicy::default();
            let out = reverse_step(&t1(&v), t, &t1(&e), &schedule, &p, Some(&t1(&e))).unwrap();
            let s = p.temporal_bound(t - 1);
            prop_assert!(vals(&out).iter().all(|x| x.abs() <= s + 1e-12));
        }
    }
}
