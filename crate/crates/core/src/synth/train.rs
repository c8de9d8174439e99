use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, BoundBackbone};
use crate::error::{Error, Result};
use crate::losses::{pull_to_mean_loss, PullLossOptions, SegmentSet, DEFAULT_EPS};
use crate::optim::{OptimizerKind, Sgd};
use crate::semiconv::{attach_coords, EmbeddingField};
use crate::tensor::{PaddingMode, Tape, Tensor, Var};

use super::scene::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Network output used as the embedding.
    Conv,
    /// Network output plus pixel coordinates.
    Semiconv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub dims: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub seed: u64,
    pub eps: f64,
    pub include_background: bool,
    /// Hidden layer widths; the embedding layer of width `dims` is appended.
    pub hidden: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub padding: PaddingMode,
    pub grad_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Semiconv,
            dims: 8,
            epochs: 2000,
            lr: 3e-4,
            optimizer: OptimizerKind::SgdMomentum,
            momentum: 0.9,
            seed: 0,
            eps: DEFAULT_EPS,
            include_background: false,
            hidden: vec![16, 32],
            kernel_sizes: vec![3, 3, 3],
            padding: PaddingMode::Circular,
            grad_scale: 1.0,
        }
    }
}

impl TrainConfig {
    /// Network layout. Identical for both modes so that runs with equal seeds
    /// start from bit-identical weights.
    pub fn backbone_config(&self, in_channels: usize) -> BackboneConfig {
        let mut channels = self.hidden.clone();
        channels.push(self.dims);
        BackboneConfig {
            in_channels,
            channels,
            kernel_sizes: self.kernel_sizes.clone(),
            padding: self.padding,
            seed: self.seed,
            grad_scale: self.grad_scale,
        }
    }

    pub fn loss_options(&self) -> PullLossOptions {
        PullLossOptions {
            eps: self.eps,
            include_background: self.include_background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Semiconv && self.dims < 2 {
            return Err(Error::invalid("semiconv mode needs dims >= 2"));
        }
        if self.dims == 0 {
            return Err(Error::invalid("dims must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::invalid(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Embedding of `image` under `mode`. With `support`, only the positions the
/// loss reads are computed; see [`Backbone::support`].
pub fn embed<'t>(
    net: &BoundBackbone<'t>,
    image: Var<'t>,
    mode: Mode,
    support: Option<&[Rc<[usize]>]>,
) -> Result<EmbeddingField<'t>> {
    let phi = net.forward(image, support)?;
    match mode {
        Mode::Conv => EmbeddingField::convolutional(phi),
        Mode::Semiconv => attach_coords(phi),
    }
}

/// Dense embedding of a trained network, detached from any training tape.
pub fn embed_dense(backbone: &Backbone, image: &Tensor, mode: Mode) -> Result<Tensor> {
    let tape = Tape::new();
    let net = backbone.bind(&tape);
    let field = embed(&net, tape.constant(image.clone()), mode, None)?;
    Ok(field.values().value().as_ref().clone())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub backbone: Backbone,
    /// Loss before each update, then once more after the last one.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        self.losses[self.losses.len() - 1]
    }
}

/// Pixels whose embeddings the loss reads.
pub fn loss_pixels(segs: &SegmentSet, opts: PullLossOptions) -> Vec<usize> {
    let mut px = segs.foreground_pixels();
    if opts.include_background {
        px.extend_from_slice(segs.background());
        px.sort_unstable();
    }
    px
}

pub(crate) fn check_step(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { step, loss })
    }
}

pub(crate) fn numeric_to_divergence(step: usize, err: Error) -> Error {
    if err.is_numeric() {
        Error::Divergence {
            step,
            loss: f64::NAN,
        }
    } else {
        err
    }
}

/// Fit the backbone to one scene by minimizing the pull-to-mean loss over
/// its instances with SGD.
pub fn train(scene: &Scene, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(scene, cfg, |_, _| Ok(()))
}

/// [`train`] with a callback receiving `(step, loss)` before each update.
pub fn train_with(
    scene: &Scene,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let segs = SegmentSet::from_labeling(&scene.gt);
    if segs.segments().is_empty() {
        return Err(Error::invalid("scene has no foreground instances"));
    }
    let opts = cfg.loss_options();
    let mut backbone = Backbone::new(&cfg.backbone_config(scene.image.shape()[0]))?;
    let support = backbone.support(scene.height(), scene.width(), &loss_pixels(&segs, opts));
    let mut sgd = Sgd::for_kind(cfg.optimizer, cfg.lr, cfg.momentum);
    let mut losses = Vec::with_capacity(cfg.epochs + 1);
    for step in 0..=cfg.epochs {
        let tape = Tape::new();
        let net = backbone.bind(&tape);
        let run = || -> Result<_> {
            let field = embed(&net, tape.constant(scene.image.clone()), cfg.mode, Some(&support))?;
            let loss = pull_to_mean_loss(&field, &segs, opts)?;
            Ok(loss)
        };
        let loss = run().map_err(|e| numeric_to_divergence(step, e))?;
        let value = loss.item()?;
        check_step(step, value)?;
        losses.push(value);
        if step == cfg.epochs {
            break;
        }
        on_step(step, value)?;
        let grads = tape
            .backward(loss)
            .map_err(|e| numeric_to_divergence(step, e.into()))?;
        let g = net.gradients(&grads);
        let mut params: Vec<&mut Tensor> = backbone
            .layers_mut()
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        sgd.step(&mut params, &g);
    }
    Ok(TrainOutcome { backbone, losses })
}
