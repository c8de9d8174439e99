//! Small stride-1 convolutional feature extractor producing a `D`-channel map
//! per pixel, plus its binary weight format.
//!
//! The network is `conv -> bias -> relu` repeated, with no activation after the
//! last layer. It receives no coordinate input, so its output is equivariant to
//! translations of the image (exactly so to circular shifts under circular
//! padding).
//!
//! Weight file layout, little-endian:
//!
//! ```text
//! "SCNV" | u32 version | u32 layer count
//! per layer: u32 c_in | u32 c_out | u32 kh | u32 kw
//!            | f32 weights [c_out, c_in, kh, kw] | f32 biases [c_out]
//! ```

use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dilate_positions, Conv2dSpec, Gradients, PaddingMode, Tape, Tensor, Var};

pub const MODEL_MAGIC: &[u8; 4] = b"SCNV";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels per layer; the last entry is the embedding dimension.
    pub channels: Vec<usize>,
    /// Square kernel extent per layer.
    pub kernel_sizes: Vec<usize>,
    pub padding: PaddingMode,
    pub seed: u64,
    /// Multiplier on gradients flowing from the embedding head into the
    /// network.
    pub grad_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            in_channels: 1,
            channels: vec![16, 32, 8],
            kernel_sizes: vec![3, 3, 3],
            padding: PaddingMode::Circular,
            seed: 0,
            grad_scale: 1.0,
        }
    }
}

impl BackboneConfig {
    /// Default layout with the embedding dimension replaced.
    pub fn with_dims(dims: usize) -> Self {
        let mut cfg = Self::default();
        if let Some(last) = cfg.channels.last_mut() {
            *last = dims;
        }
        cfg
    }

    pub fn dims(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    /// `[c_out, c_in, kh, kw]`
    pub weight: Tensor,
    /// `[c_out]`
    pub bias: Tensor,
}

impl ConvLayer {
    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    layers: Vec<ConvLayer>,
    padding: PaddingMode,
    grad_scale: f64,
}

impl Backbone {
    /// Seeded Glorot-uniform weights, zero biases.
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.channels.len() != cfg.kernel_sizes.len() {
            return Err(Error::invalid(
                "backbone needs one kernel size per layer and at least one layer",
            ));
        }
        if cfg.in_channels == 0 || cfg.channels.contains(&0) {
            return Err(Error::invalid("backbone channel counts must be positive"));
        }
        if let Some(k) = cfg.kernel_sizes.iter().find(|k| **k % 2 == 0) {
            return Err(Error::invalid(format!("kernel size {k} is not odd")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layers = Vec::with_capacity(cfg.channels.len());
        let mut c_in = cfg.in_channels;
        for (&c_out, &k) in cfg.channels.iter().zip(&cfg.kernel_sizes) {
            let fan_in = c_in * k * k;
            let fan_out = c_out * k * k;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weight = (0..c_out * fan_in)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            layers.push(ConvLayer {
                weight: Tensor::new([c_out, c_in, k, k], weight)?,
                bias: Tensor::zeros([c_out]),
            });
            c_in = c_out;
        }
        Ok(Backbone {
            layers,
            padding: cfg.padding,
            grad_scale: cfg.grad_scale,
        })
    }

    pub fn from_layers(layers: Vec<ConvLayer>, padding: PaddingMode) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("backbone needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].c_out() != pair[1].c_in() {
                return Err(Error::invalid(format!(
                    "layer output {} does not feed input {}",
                    pair[0].c_out(),
                    pair[1].c_in()
                )));
            }
        }
        for l in &layers {
            let (kh, kw) = l.kernel();
            if kh % 2 == 0 || kw % 2 == 0 || l.bias.shape() != [l.c_out()] {
                return Err(Error::invalid("malformed layer"));
            }
        }
        Ok(Backbone {
            layers,
            padding,
            grad_scale: 1.0,
        })
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer] {
        &mut self.layers
    }

    pub fn padding(&self) -> PaddingMode {
        self.padding
    }

    pub fn grad_scale(&self) -> f64 {
        self.grad_scale
    }

    pub fn set_grad_scale(&mut self, scale: f64) {
        self.grad_scale = scale;
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].c_in()
    }

    /// Embedding dimension `D`.
    pub fn dims(&self) -> usize {
        self.layers[self.layers.len() - 1].c_out()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.in_channels() {
            return Err(Error::invalid(format!(
                "backbone expects [{}, H, W] input, got {shape:?}",
                self.in_channels()
            )));
        }
        let largest = self
            .layers
            .iter()
            .map(|l| l.kernel().0.max(l.kernel().1))
            .max()
            .unwrap_or(1);
        if shape[1] < largest || shape[2] < largest {
            return Err(Error::invalid(format!(
                "input {}x{} smaller than kernel extent {largest}",
                shape[1], shape[2]
            )));
        }
        Ok(())
    }

    /// Plain forward pass without gradient bookkeeping.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        let x = tape.constant(image.clone());
        let out = bound.forward(x, None)?;
        Ok(out.value().as_ref().clone())
    }

    /// Register the parameters as trainable leaves on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundBackbone<'t> {
        self.bind_with(tape, true)
    }

    fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundBackbone<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundBackbone<'t> {
        let reg = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundBackbone {
            backbone: self.clone_shape(),
            params: self
                .layers
                .iter()
                .map(|l| (reg(&l.weight), reg(&l.bias)))
                .collect(),
        }
    }

    /// Output positions each layer must compute so that the final embedding is
    /// exact at `pixels` of an `h x w` grid. Entry `i` belongs to layer `i`.
    pub fn support(&self, h: usize, w: usize, pixels: &[usize]) -> Vec<Rc<[usize]>> {
        let mut active: Vec<usize> = pixels.to_vec();
        active.sort_unstable();
        active.dedup();
        let mut out = vec![Rc::<[usize]>::from(active.clone()); self.layers.len()];
        for i in (0..self.layers.len() - 1).rev() {
            let (kh, kw) = self.layers[i + 1].kernel();
            active = dilate_positions(&active, h, w, kh, kw, self.padding);
            out[i] = active.clone().into();
        }
        out
    }

    /// Copy without parameter values; enough to validate inputs and drive a
    /// bound forward pass.
    fn clone_shape(&self) -> Backbone {
        Backbone {
            layers: self
                .layers
                .iter()
                .map(|l| ConvLayer {
                    weight: Tensor::zeros([l.c_out(), l.c_in(), l.kernel().0, l.kernel().1]),
                    bias: Tensor::zeros([0]),
                })
                .collect(),
            padding: self.padding,
            grad_scale: self.grad_scale,
        }
    }

    /// Number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        for l in &self.layers {
            let (kh, kw) = l.kernel();
            for v in [l.c_in(), l.c_out(), kh, kw] {
                out.extend_from_slice(&(v as u32).to_le_bytes());
            }
            for &v in l.weight.data().iter().chain(l.bias.data()) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parse a weight file. Padding is not part of the format and must be
    /// supplied by the caller.
    pub fn from_bytes(bytes: &[u8], padding: PaddingMode) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let (c_in, c_out, kh, kw) =
                (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let weights = r.f32s(c_out * c_in * kh * kw)?;
            let biases = r.f32s(c_out)?;
            layers.push(ConvLayer {
                weight: Tensor::new([c_out, c_in, kh, kw], weights)?,
                bias: Tensor::new([c_out], biases)?,
            });
        }
        if r.at != bytes.len() {
            return Err(Error::ModelFormat(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Self::from_layers(layers, padding)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, padding: PaddingMode) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, padding)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ModelFormat("truncated file".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(4)
            .ok_or_else(|| Error::ModelFormat("layer size overflow".into()))?;
        let b = self.take(len)?;
        Ok(b.chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect())
    }
}

/// A [`Backbone`] whose parameters live on a tape.
pub struct BoundBackbone<'t> {
    backbone: Backbone,
    params: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundBackbone<'t> {
    /// Run the network on `image` (`[C, H, W]`). With `support`, layer `i` only
    /// computes the positions in `support[i]`; see [`Backbone::support`].
    pub fn forward(&self, image: Var<'t>, support: Option<&[Rc<[usize]>]>) -> Result<Var<'t>> {
        self.backbone.check_input(&image.shape())?;
        let n = self.params.len();
        if let Some(s) = support {
            if s.len() != n {
                return Err(Error::invalid("support needs one entry per layer"));
            }
        }
        let mut x = image;
        for (i, ((w, b), layer)) in self.params.iter().zip(&self.backbone.layers).enumerate() {
            let (kh, kw) = layer.kernel();
            let spec = Conv2dSpec::same(kh, kw, self.backbone.padding);
            let positions = support.map(|s| Rc::clone(&s[i]));
            x = x.conv2d_at(*w, spec, positions)?.add_channel_bias(*b)?;
            if i + 1 < n {
                x = x.relu()?;
            }
        }
        if self.backbone.grad_scale != 1.0 {
            x = x.scale_grad(self.backbone.grad_scale)?;
        }
        Ok(x)
    }

    /// Trainable leaves, `(weight, bias)` per layer.
    pub fn params(&self) -> &[(Var<'t>, Var<'t>)] {
        &self.params
    }

    /// Parameter gradients in layer order, flattened as weight then bias.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .flat_map(|(w, b)| [grads.wrt(*w), grads.wrt(*b)])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layout() {
        let b = Backbone::new(&BackboneConfig::default()).unwrap();
        assert_eq!(b.dims(), 8);
        assert_eq!(b.in_channels(), 1);
        assert_eq!(b.layers().len(), 3);
        assert_eq!(b.layers()[1].weight.shape(), &[32, 16, 3, 3]);
    }

    #[test]
    fn init_bound_is_glorot() {
        let b = Backbone::new(&BackboneConfig::default()).unwrap();
        let bound = (6.0f64 / (16.0 * 9.0 + 32.0 * 9.0)).sqrt();
        let w = &b.layers()[1].weight;
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(w.data().iter().any(|v| v.abs() > 0.9 * bound));
    }

    #[test]
    fn constant_image_gives_constant_map() {
        let b = Backbone::new(&BackboneConfig {
            padding: PaddingMode::Circular,
            ..Default::default()
        })
        .unwrap();
        let out = b.forward(&Tensor::full([1, 9, 7], 0.7)).unwrap();
        for c in 0..8 {
            let plane = &out.data()[c * 63..(c + 1) * 63];
            assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let b = Backbone::new(&BackboneConfig::default()).unwrap();
        assert!(b.forward(&Tensor::zeros([3, 8, 8])).is_err());
        assert!(b.forward(&Tensor::zeros([1, 2, 8])).is_err());
    }

    #[test]
    fn model_bytes_round_trip_at_f32() {
        let b = Backbone::new(&BackboneConfig::default()).unwrap();
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..4], b"SCNV");
        assert_eq!(bytes.len(), 12 + 3 * 16 + 4 * b.num_params());
        let back = Backbone::from_bytes(&bytes, PaddingMode::Circular).unwrap();
        for (x, y) in b.layers().iter().zip(back.layers()) {
            for (p, q) in x.weight.data().iter().zip(y.weight.data()) {
                assert_eq!(*p as f32, *q as f32);
            }
        }
        assert!(Backbone::from_bytes(&bytes[..bytes.len() - 1], PaddingMode::Zero).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Backbone::from_bytes(&bad, PaddingMode::Zero),
            Err(Error::ModelFormat(_))
        ));
    }

    #[test]
    fn support_grows_by_kernel_radius() {
        let b = Backbone::new(&BackboneConfig::default()).unwrap();
        let s = b.support(16, 16, &[8 * 16 + 8]);
        assert_eq!(s[2].len(), 1);
        assert_eq!(s[1].len(), 9);
        assert_eq!(s[0].len(), 25);
    }
}
