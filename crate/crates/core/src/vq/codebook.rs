use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Init, VarPath};

/// `K x d` table of code vectors.
#[derive(Debug, Clone)]
pub struct Codebook {
    codes: Tensor,
}

/// Result of snapping a latent onto the codebook.
#[derive(Debug, Clone)]
pub struct Quantized {
    /// Quantized latent with straight-through gradient: forward value is the
    /// code, backward passes the gradient unchanged to the encoder output.
    pub z_q: Tensor,
    /// Nearest-code index per spatial site, ordered `(batch, y, x)`.
    pub indices: Vec<u32>,
    /// `mean((sg(z) - z_q)^2)`; its gradient moves the codes.
    pub codebook_term: Tensor,
    /// `mean((z - sg(z_q))^2)`; its gradient moves the encoder.
    pub commit_term: Tensor,
}

impl Quantized {
    /// Quantization loss `codebook_term + beta * commit_term`.
    pub fn loss(&self, beta_commit: f64) -> Result<Tensor> {
        Ok((&self.codebook_term + (&self.commit_term * beta_commit)?)?)
    }
}

impl Codebook {
    pub fn new(vp: &VarPath, size: usize, dim: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!("codebook needs at least 2 codes, got {size}")));
        }
        Ok(Self { codes: vp.get((size, dim), "codes", Init::Uniform(1.0))? })
    }

    pub fn from_tensor(codes: Tensor) -> Result<Self> {
        let (k, _) = codes.dims2()?;
        if k == 0 {
            return Err(Error::Empty("codebook has no codes".into()));
        }
        Ok(Self { codes })
    }

    pub fn size(&self) -> usize {
        self.codes.dim(0).unwrap_or(0)
    }

    pub fn dim(&self) -> usize {
        self.codes.dim(1).unwrap_or(0)
    }

    pub fn codes(&self) -> &Tensor {
        &self.codes
    }

    /// Index of the nearest code for each row of `sites` (`n x d`, row-major);
    /// exact ties go to the lowest index.
    pub fn nearest(&self, sites: &[f64]) -> Result<Vec<u32>> {
        let (k, d) = self.codes.dims2()?;
        if k == 0 {
            return Err(Error::Empty("codebook has no codes".into()));
        }
        let codes = self.codes.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(sites
            .chunks(d)
            .map(|site| {
                let mut best = 0u32;
                let mut best_dist = f64::INFINITY;
                for (j, code) in codes.chunks(d).enumerate() {
                    let dist: f64 = site.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best_dist {
                        best_dist = dist;
                        best = j as u32;
                    }
                }
                best
            })
            .collect())
    }

    /// Replaces each channel vector of `z` (`B x d x h x w`) by its nearest code.
    pub fn quantize(&self, z: &Tensor) -> Result<Quantized> {
        let (b, c, h, w) = z.dims4()?;
        if self.size() == 0 {
            return Err(Error::Empty("codebook has no codes".into()));
        }
        if c != self.dim() {
            return Err(Error::ShapeMismatch { expected: vec![b, self.dim(), h, w], actual: vec![b, c, h, w] });
        }
        // (B, h, w, d) rows
        let sites = z.permute((0, 2, 3, 1))?.contiguous()?;
        let host = sites.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        let indices = self.nearest(&host)?;
        let idx = Tensor::from_slice(&indices, indices.len(), z.device())?;
        let picked = self.codes.index_select(&idx, 0)?;
        let z_q = picked.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?;
        let codebook_term = (z.detach() - &z_q)?.sqr()?.mean_all()?;
        let commit_term = (z - z_q.detach())?.sqr()?.mean_all()?;
        let straight_through = (z + (z_q - z)?.detach())?;
        Ok(Quantized { z_q: straight_through, indices, codebook_term, commit_term })
    }
}

/// Fraction of distinct codes among `indices`.
pub fn usage_fraction(indices: &[u32], size: usize) -> f64 {
    let mut seen = vec![false; size];
    for &i in indices {
        seen[i as usize] = true;
    }
    seen.iter().filter(|s| **s).count() as f64 / size as f64
}
