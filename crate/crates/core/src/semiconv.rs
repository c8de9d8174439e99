//! Semi-convolutional embeddings: a translation-equivariant map `Φ` mixed with
//! each pixel's own location.
//!
//! With the additive mixing used throughout, `Ψ_u = Φ_u + û` where
//! `û = (u_x, u_y, 0, …, 0)`. Under a perfect embedding every pixel of an
//! instance lands on one instance-specific point `c_k`, so the first two
//! channels of `Φ` read as a displacement field pointing from `u` to `c_k`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::labeling::InstanceLabeling;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Convolutional,
    Semiconvolutional,
}

/// Pixel coordinates as a `[2, H, W]` tensor: channel 0 holds `x`, channel 1
/// holds `y`, in pixels, with the top-left pixel centre at the origin.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    height: usize,
    width: usize,
    coords: Tensor,
}

impl CoordGrid {
    pub fn new(height: usize, width: usize) -> Self {
        let plane = height * width;
        let mut data = vec![0.0; 2 * plane];
        for p in 0..plane {
            data[p] = (p % width) as f64;
            data[plane + p] = (p / width) as f64;
        }
        CoordGrid {
            height,
            width,
            coords: Tensor::new([2, height, width], data).expect("coordinate grid shape"),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.coords
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(x, y)` of a flat pixel index.
    pub fn xy(&self, pixel: usize) -> [f64; 2] {
        [(pixel % self.width) as f64, (pixel / self.width) as f64]
    }

    /// `û` zero-extended to `dims` channels.
    pub fn augmented(&self, dims: usize) -> Tensor {
        let plane = self.height * self.width;
        let mut data = vec![0.0; dims * plane];
        data[..2 * plane].copy_from_slice(self.coords.data());
        Tensor::new([dims, self.height, self.width], data).expect("augmented grid shape")
    }
}

/// Per-pixel embeddings `[D, H, W]` on a tape, with the channel split between
/// geometric and appearance parts.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingField<'t> {
    values: Var<'t>,
    kind: FieldKind,
    dims: usize,
    height: usize,
    width: usize,
}

impl<'t> EmbeddingField<'t> {
    /// Wrap a network output as-is.
    pub fn convolutional(phi: Var<'t>) -> Result<Self> {
        let (dims, height, width) = field_shape(&phi)?;
        Ok(EmbeddingField {
            values: phi,
            kind: FieldKind::Convolutional,
            dims,
            height,
            width,
        })
    }

    pub fn values(&self) -> Var<'t> {
        self.values
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Channels holding `u + Φ^g`; empty for convolutional fields.
    pub fn geometric_dims(&self) -> Range<usize> {
        match self.kind {
            FieldKind::Semiconvolutional => 0..2,
            FieldKind::Convolutional => 0..0,
        }
    }

    pub fn appearance_dims(&self) -> Range<usize> {
        self.geometric_dims().end..self.dims
    }

    /// Embedding vector of one pixel.
    pub fn pixel(&self, pixel: usize) -> Vec<f64> {
        let v = self.values.value();
        let plane = self.height * self.width;
        (0..self.dims).map(|c| v.data()[c * plane + pixel]).collect()
    }

    /// Embeddings of the given pixels as rows of a `Vec`, for decoders.
    pub fn rows(&self, pixels: &[usize]) -> Vec<Vec<f64>> {
        let v = self.values.value();
        let plane = self.height * self.width;
        pixels
            .iter()
            .map(|&p| (0..self.dims).map(|c| v.data()[c * plane + p]).collect())
            .collect()
    }
}

fn field_shape(v: &Var<'_>) -> Result<(usize, usize, usize)> {
    match v.shape()[..] {
        [d, h, w] => Ok((d, h, w)),
        ref s => Err(Error::invalid(format!("embedding must be [D, H, W], got {s:?}"))),
    }
}

/// Mixing function `f(Φ_u, u)` turning a convolutional map into a
/// semi-convolutional one.
pub trait Mixing {
    fn mix<'t>(&self, phi: Var<'t>, grid: &CoordGrid) -> Result<Var<'t>>;
}

/// `Ψ_u = Φ_u + (u_x, u_y, 0, …, 0)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Additive;

impl Mixing for Additive {
    fn mix<'t>(&self, phi: Var<'t>, grid: &CoordGrid) -> Result<Var<'t>> {
        let dims = phi.shape()[0];
        let offsets = phi.tape().constant(grid.augmented(dims));
        Ok(phi.add(offsets)?)
    }
}

/// Apply `mixing` to `phi` and tag the result as semi-convolutional.
pub fn semiconvolve<'t>(phi: Var<'t>, mixing: &impl Mixing) -> Result<EmbeddingField<'t>> {
    let (dims, height, width) = field_shape(&phi)?;
    if dims < 2 {
        return Err(Error::invalid(format!(
            "semi-convolutional embedding needs D >= 2, got {dims}"
        )));
    }
    let grid = CoordGrid::new(height, width);
    let values = mixing.mix(phi, &grid)?;
    Ok(EmbeddingField {
        values,
        kind: FieldKind::Semiconvolutional,
        dims,
        height,
        width,
    })
}

/// Additive coordinate augmentation.
pub fn attach_coords(phi: Var<'_>) -> Result<EmbeddingField<'_>> {
    semiconvolve(phi, &Additive)
}

/// Recover `Φ` from an additive semi-convolutional field.
pub fn detach_coords(field: &EmbeddingField<'_>) -> Result<Tensor> {
    require_semiconv(field)?;
    let grid = CoordGrid::new(field.height, field.width).augmented(field.dims);
    let v = field.values.value();
    let data = v.data().iter().zip(grid.data()).map(|(a, b)| a - b).collect();
    Ok(Tensor::new(v.shape().to_vec(), data)?)
}

fn require_semiconv(field: &EmbeddingField<'_>) -> Result<()> {
    if field.kind != FieldKind::Semiconvolutional {
        return Err(Error::invalid(
            "operation needs a semi-convolutional embedding field",
        ));
    }
    Ok(())
}

/// `Φ^g = Ψ^g - u` as a `[2, H, W]` tensor: per-pixel arrows towards the
/// instance-specific point.
pub fn displacement_field(field: &EmbeddingField<'_>) -> Result<Tensor> {
    require_semiconv(field)?;
    let plane = field.height * field.width;
    let grid = CoordGrid::new(field.height, field.width);
    let v = field.values.value();
    let data = v.data()[..2 * plane]
        .iter()
        .zip(grid.tensor().data())
        .map(|(a, b)| a - b)
        .collect();
    Ok(Tensor::new([2, field.height, field.width], data)?)
}

/// Per-instance spread of arrow endpoints `u + Φ^g`: the root mean squared
/// distance to the instance's mean endpoint, averaged over instances.
pub fn endpoint_spread(field: &EmbeddingField<'_>, gt: &InstanceLabeling) -> Result<f64> {
    require_semiconv(field)?;
    let instances = gt.instances();
    if instances.is_empty() {
        return Err(Error::invalid("endpoint spread needs at least one instance"));
    }
    let mut total = 0.0;
    for inst in &instances {
        let pts: Vec<[f64; 2]> = field.rows(inst).iter().map(|r| [r[0], r[1]]).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
        let my = pts.iter().map(|p| p[1]).sum::<f64>() / n;
        let var = pts
            .iter()
            .map(|p| (p[0] - mx).powi(2) + (p[1] - my).powi(2))
            .sum::<f64>()
            / n;
        total += var.sqrt();
    }
    Ok(total / instances.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MarginReport {
    /// Fraction of same-instance pairs with distance `<= 1 - M`.
    pub within: f64,
    /// Fraction of cross-instance pairs with distance `>= 1 + M`.
    pub between: f64,
}

/// Estimate how well a field meets the margin condition by sampling
/// `sample_pairs` same-instance and `sample_pairs` cross-instance foreground
/// pairs. Diagnostic only; nothing is trained against it.
pub fn check_margin(
    field: &EmbeddingField<'_>,
    gt: &InstanceLabeling,
    margin: f64,
    sample_pairs: usize,
    seed: u64,
) -> Result<MarginReport> {
    if !(margin > 0.0 && margin < 1.0) {
        return Err(Error::invalid(format!("margin {margin} outside (0, 1)")));
    }
    if sample_pairs == 0 {
        return Err(Error::invalid("need at least one sample pair"));
    }
    if gt.height() != field.height || gt.width() != field.width {
        return Err(Error::invalid("labeling and field grids differ"));
    }
    let instances = gt.instances();
    if instances.len() < 2 {
        return Err(Error::invalid(
            "margin check needs at least two foreground instances",
        ));
    }
    let foreground = gt.foreground();
    let labels = gt.labels();
    let v = field.values.value();
    let plane = field.height * field.width;
    let dist = |p: usize, q: usize| {
        (0..field.dims)
            .map(|c| (v.data()[c * plane + p] - v.data()[c * plane + q]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut within = 0usize;
    for _ in 0..sample_pairs {
        let p = foreground[rng.random_range(0..foreground.len())];
        let inst = &instances[labels[p] as usize - 1];
        let q = inst[rng.random_range(0..inst.len())];
        if dist(p, q) <= 1.0 - margin {
            within += 1;
        }
    }
    let mut between = 0usize;
    for _ in 0..sample_pairs {
        let p = foreground[rng.random_range(0..foreground.len())];
        let q = loop {
            let q = foreground[rng.random_range(0..foreground.len())];
            if labels[q] != labels[p] {
                break q;
            }
        };
        if dist(p, q) >= 1.0 + margin {
            between += 1;
        }
    }
    Ok(MarginReport {
        within: within as f64 / sample_pairs as f64,
        between: between as f64 / sample_pairs as f64,
    })
}
