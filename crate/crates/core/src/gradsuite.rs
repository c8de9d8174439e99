//! Finite-difference checks of every differentiable building block on seeded
//! random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{fuse_scores, BoundKernel, KernelFamily, SeedMode};
use crate::losses::{mask_bce, pull_to_mean_loss, PullLossOptions, SegmentSet, DEFAULT_EPS};
use crate::semiconv::EmbeddingField;
use crate::tensor::{grad_check_all, Conv2dSpec, PaddingMode, Tensor, TensorError, Var};

pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

pub const OPS: [&str; 5] = [
    "conv2d",
    "pull_to_mean_loss",
    "steered_laplacian",
    "fuse_scores_soft",
    "mask_bce",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
        .expect("shape matches data")
}

fn tensor_err(e: Error) -> TensorError {
    match e {
        Error::Tensor(t) => t,
        other => TensorError::Invalid(other.to_string()),
    }
}

fn weighted_sum<'t>(v: Var<'t>, w: &Tensor) -> Result<Var<'t>, TensorError> {
    v.mul(v.tape().constant(w.clone()))?.sum_all()
}

fn kernel<'t>(log_sigma: Var<'t>) -> BoundKernel<'t> {
    BoundKernel {
        family: KernelFamily::SteeredLaplacian,
        log_sigma,
        eps: DEFAULT_EPS,
    }
}

/// Worst relative error of one random instance of `op`.
pub fn check_instance(op: &str, rng: &mut ChaCha8Rng) -> Result<f64> {
    let err = match op {
        "conv2d" => {
            let mode = if rng.random_bool(0.5) {
                PaddingMode::Circular
            } else {
                PaddingMode::Zero
            };
            let x = uniform(rng, &[2, 5, 6], -1.0, 1.0);
            let w = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
            let r = uniform(rng, &[3, 5, 6], -1.0, 1.0);
            grad_check_all(
                |v| weighted_sum(v[0].conv2d(v[1], Conv2dSpec::same(3, 3, mode))?, &r),
                &[x, w],
                STEP,
            )?
        }
        "pull_to_mean_loss" => {
            let (h, w) = (4, 5);
            let field = uniform(rng, &[3, h, w], -2.0, 2.0);
            let mut segments = vec![Vec::new(); 3];
            let mut background = Vec::new();
            for p in 0..h * w {
                match rng.random_range(0..4) {
                    0 => background.push(p),
                    k => segments[k - 1].push(p),
                }
            }
            for (k, seg) in segments.iter_mut().enumerate() {
                if seg.is_empty() {
                    let p = background.pop().unwrap_or(k);
                    seg.push(p);
                }
            }
            let segs = SegmentSet::new(segments, background, h * w)?;
            grad_check_all(
                |v| {
                    let f = EmbeddingField::convolutional(v[0]).map_err(tensor_err)?;
                    pull_to_mean_loss(&f, &segs, PullLossOptions::default()).map_err(tensor_err)
                },
                &[field],
                STEP,
            )?
        }
        "steered_laplacian" => {
            let rows = uniform(rng, &[6, 3], -1.0, 1.0);
            let seed = uniform(rng, &[3], -1.0, 1.0);
            let log_sigma = uniform(rng, &[], -0.5, 0.5);
            let r = uniform(rng, &[6], -1.0, 1.0);
            grad_check_all(
                |v| {
                    let k = kernel(v[2]).log_row(v[0], v[1]).map_err(tensor_err)?.exp()?;
                    weighted_sum(k, &r)
                },
                &[rows, seed, log_sigma],
                STEP,
            )?
        }
        "fuse_scores_soft" => {
            let scores = uniform(rng, &[6], -2.0, 2.0);
            let emb = uniform(rng, &[6, 3], -1.0, 1.0);
            let log_sigma = uniform(rng, &[], -0.5, 0.5);
            let r = uniform(rng, &[6], -1.0, 1.0);
            grad_check_all(
                |v| {
                    let f = fuse_scores(v[0], v[1], &kernel(v[2]), SeedMode::Soft)
                        .map_err(tensor_err)?;
                    weighted_sum(f.probabilities, &r)
                },
                &[scores, emb, log_sigma],
                STEP,
            )?
        }
        "mask_bce" => {
            let probs = uniform(rng, &[8], 0.05, 0.95);
            let mask: Vec<bool> = (0..8).map(|_| rng.random_bool(0.5)).collect();
            grad_check_all(|v| mask_bce(v[0], &mask).map_err(tensor_err), &[probs], STEP)?
        }
        other => return Err(Error::invalid(format!("unknown op {other}"))),
    };
    Ok(err)
}

/// `instances` random checks of every op in [`OPS`], each op drawing from its
/// own stream seeded by `seed` and the op's position.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<OpReport>> {
    OPS.iter()
        .enumerate()
        .map(|(i, op)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                worst = worst.max(check_instance(op, &mut rng)?);
            }
            Ok(OpReport {
                op: op.to_string(),
                instances,
                max_rel_error: worst,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in gradient_suite(3, 1).unwrap() {
            assert!(r.max_rel_error < 1e-4, "{r:?}");
        }
    }
}
