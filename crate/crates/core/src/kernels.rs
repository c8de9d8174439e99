//! Pixel affinity kernels over embeddings, and seed-based score fusion.
//!
//! With `Ψ_u = û + Φ_u` the Gaussian kernel on `Ψ` factors into a geometric
//! term on `u + Φ^g_u` and an appearance term on `Φ^a_u`; with `Φ^g ≡ 0` this is
//! the ordinary bilateral kernel, so the network output steers the spatial
//! part. The learnable variant uses a Laplacian falloff with scale `σ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    /// `exp(-‖a − b‖² / 2)` on the full embedding.
    Gaussian,
    /// Gaussian on unsteered features `(u, Φ^a)`.
    Bilateral,
    /// `exp(-‖a − b‖ / σ)` on the full embedding.
    SteeredLaplacian,
}

/// Kernel family plus its scale, stored as `log σ` so that `σ > 0` always.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub family: KernelFamily,
    pub log_sigma: f64,
}

impl KernelParams {
    pub fn new(family: KernelFamily, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        Ok(KernelParams {
            family,
            log_sigma: sigma.ln(),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.log_sigma.exp()
    }

    /// Put the kernel on `tape`; `log σ` becomes a trainable leaf when
    /// `trainable` is set.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundKernel<'t> {
        let ls = Tensor::scalar(self.log_sigma);
        BoundKernel {
            family: self.family,
            log_sigma: if trainable {
                tape.leaf(ls)
            } else {
                tape.constant(ls)
            },
            eps: crate::losses::DEFAULT_EPS,
        }
    }
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            family: KernelFamily::SteeredLaplacian,
            log_sigma: 0.0,
        }
    }
}

/// Kernel whose scale lives on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundKernel<'t> {
    pub family: KernelFamily,
    pub log_sigma: Var<'t>,
    /// Smoothing of the Laplacian distance, `‖d‖² / sqrt(‖d‖² + eps)`: exactly
    /// 0 at `d = 0`, differentiable there, and within `eps / (2‖d‖)` of `‖d‖`
    /// elsewhere.
    pub eps: f64,
}

impl<'t> BoundKernel<'t> {
    /// `log K(seed, row_i)` for every row of an `[N, D]` matrix.
    pub fn log_row(&self, rows: Var<'t>, seed: Var<'t>) -> Result<Var<'t>> {
        let n = rows.shape()[0];
        let diff = rows.sub(seed.expand_rows(n)?)?;
        let log_k = match self.family {
            KernelFamily::Gaussian | KernelFamily::Bilateral => {
                diff.mul(diff)?.sum(&[1])?.scale(-0.5)?
            }
            KernelFamily::SteeredLaplacian => {
                let sq = diff.mul(diff)?.sum(&[1])?;
                let dist = sq.div(sq.add_scalar(self.eps)?.sqrt()?)?;
                dist.div(self.log_sigma.exp()?)?.neg()?
            }
        };
        Ok(log_k)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "kernel arguments differ in dimension: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

pub fn gaussian_kernel(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok((-sq_dist(a, b)? / 2.0).exp())
}

/// Gaussian kernel written as a geometric factor on steered positions
/// `u + Φ^g_u` times an appearance factor on `Φ^a`.
pub fn factorized_kernel(
    u: [f64; 2],
    v: [f64; 2],
    phi_g_u: [f64; 2],
    phi_g_v: [f64; 2],
    phi_a_u: &[f64],
    phi_a_v: &[f64],
) -> Result<f64> {
    let pu = [u[0] + phi_g_u[0], u[1] + phi_g_u[1]];
    let pv = [v[0] + phi_g_v[0], v[1] + phi_g_v[1]];
    let geometric = (-sq_dist(&pu, &pv)? / 2.0).exp();
    let appearance = (-sq_dist(phi_a_u, phi_a_v)? / 2.0).exp();
    Ok(geometric * appearance)
}

/// Classic bilateral kernel: spatial Gaussian times appearance Gaussian.
pub fn bilateral_kernel(u: [f64; 2], v: [f64; 2], phi_a_u: &[f64], phi_a_v: &[f64]) -> Result<f64> {
    factorized_kernel(u, v, [0.0; 2], [0.0; 2], phi_a_u, phi_a_v)
}

/// `exp(-‖a − b‖ / σ)`.
pub fn steered_laplacian(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    Ok((-sq_dist(a, b)?.sqrt() / sigma).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedMode {
    /// Seed at the highest score, lowest index on ties.
    Hard,
    /// Seed embedding is the softmax(scores)-weighted mean of the embeddings.
    Soft,
}

/// Outcome of [`fuse_scores`].
#[derive(Clone, Copy, Debug)]
pub struct SeedFusion<'t> {
    /// Highest-scoring row (also reported in soft mode).
    pub seed_index: usize,
    /// `[D]`
    pub seed_embedding: Var<'t>,
    /// `ŝ_i = s_i + log K(seed, i)`, `[N]`.
    pub fused_scores: Var<'t>,
    /// `log K(seed, i)`, `[N]`.
    pub log_kernel: Var<'t>,
    /// `K(seed, i)`, `[N]`.
    pub kernel_row: Var<'t>,
    /// `sigmoid(ŝ_i)`, `[N]`.
    pub probabilities: Var<'t>,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// Pick a seed from `scores` (`[N]`) and add the log-affinity of every row of
/// `embeddings` (`[N, D]`) to the seed onto its score. Working in log space
/// keeps the fusion stable for tiny affinities.
pub fn fuse_scores<'t>(
    scores: Var<'t>,
    embeddings: Var<'t>,
    kernel: &BoundKernel<'t>,
    mode: SeedMode,
) -> Result<SeedFusion<'t>> {
    let s_shape = scores.shape();
    let e_shape = embeddings.shape();
    if s_shape.len() != 1 || e_shape.len() != 2 || s_shape[0] != e_shape[0] {
        return Err(Error::invalid(format!(
            "fuse_scores: scores {s_shape:?} vs embeddings {e_shape:?}"
        )));
    }
    let n = s_shape[0];
    if n == 0 {
        return Err(Error::invalid("fuse_scores: empty region"));
    }
    let seed_index = argmax(scores.value().data()).expect("non-empty");
    let seed_embedding = match mode {
        SeedMode::Hard => embeddings.select_row(seed_index)?,
        SeedMode::Soft => {
            let p = scores.softmax(0)?.reshape([1, n])?;
            p.matmul(embeddings)?.reshape([e_shape[1]])?
        }
    };
    let log_kernel = kernel.log_row(embeddings, seed_embedding)?;
    let fused_scores = scores.add(log_kernel)?;
    Ok(SeedFusion {
        seed_index,
        seed_embedding,
        fused_scores,
        log_kernel,
        kernel_row: log_kernel.exp()?,
        probabilities: fused_scores.sigmoid()?,
    })
}
