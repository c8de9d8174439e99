//! Instance masks from region proposals: pick the most confident seed in each
//! box, fuse its kernel row with the scores, and threshold.
//!
//! Proposals are ground-truth boxes and scores are synthetic, so only the
//! embedding and kernel parts are exercised.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::kernels::{fuse_scores, KernelFamily, KernelParams, SeedMode};
use crate::labeling::InstanceLabeling;
use crate::losses::{mask_bce, pull_to_mean_loss, SegmentSet};
use crate::optim::Sgd;
use crate::synth::{check_step, embed, loss_pixels, numeric_to_divergence, Scene, TrainConfig};
use crate::tensor::{Tape, Tensor, Var};

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Check non-emptiness and that the rect lies within an `h x w` image.
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.area() == 0 {
            return Err(Error::invalid(format!("empty region {self:?}")));
        }
        if self.x1 > w || self.y1 > h {
            return Err(Error::invalid(format!("region {self:?} outside {h}x{w} image")));
        }
        Ok(())
    }

    /// Flat image indices of the covered pixels in raster order.
    pub fn pixels(&self, w: usize) -> Vec<usize> {
        (self.y0..self.y1)
            .flat_map(|y| (self.x0..self.x1).map(move |x| y * w + x))
            .collect()
    }

    /// Centre in pixel coordinates.
    pub fn center(&self) -> [f64; 2] {
        [
            (self.x0 + self.x1 - 1) as f64 / 2.0,
            (self.y0 + self.y1 - 1) as f64 / 2.0,
        ]
    }
}

/// Tight box around each instance, grown by `pad` pixels and clipped to the
/// image.
pub fn instance_boxes(gt: &InstanceLabeling, pad: usize) -> Vec<Rect> {
    let w = gt.width();
    gt.instances()
        .iter()
        .map(|px| {
            let xs = px.iter().map(|p| p % w);
            let ys = px.iter().map(|p| p / w);
            let (x0, x1) = (xs.clone().min().unwrap(), xs.max().unwrap());
            let (y0, y1) = (ys.clone().min().unwrap(), ys.max().unwrap());
            Rect {
                x0: x0.saturating_sub(pad),
                y0: y0.saturating_sub(pad),
                x1: (x1 + 1 + pad).min(w),
                y1: (y1 + 1 + pad).min(gt.height()),
            }
        })
        .collect()
}

/// Confidence map `s = 2(2x - 1) - 0.1 ‖u - c‖` over a rect, with `x` the
/// image intensity and `c` the rect centre: positive on dots, highest at the
/// dot nearest the centre.
pub fn synthetic_scores(image: &Tensor, rect: &Rect) -> Result<Vec<f64>> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    rect.validate(h, w)?;
    let [cx, cy] = rect.center();
    Ok(rect
        .pixels(w)
        .into_iter()
        .map(|p| {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            2.0 * (2.0 * image.data()[p] - 1.0) - 0.1 * d
        })
        .collect())
}

/// A rect with its score map and the embeddings of its pixels, both in
/// raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionProposal {
    pub rect: Rect,
    pub scores: Vec<f64>,
    /// `[N, D]`
    pub embeddings: Tensor,
}

impl RegionProposal {
    pub fn new(rect: Rect, scores: Vec<f64>, embeddings: Tensor) -> Result<Self> {
        let n = rect.area();
        if n == 0 {
            return Err(Error::invalid(format!("empty region {rect:?}")));
        }
        if scores.len() != n || embeddings.rank() != 2 || embeddings.shape()[0] != n {
            return Err(Error::invalid(format!(
                "region {rect:?} of {n} pixels has {} scores and embeddings {:?}",
                scores.len(),
                embeddings.shape()
            )));
        }
        Ok(RegionProposal {
            rect,
            scores,
            embeddings,
        })
    }

    /// Crop a dense `[D, H, W]` embedding.
    pub fn from_dense(rect: Rect, scores: Vec<f64>, field: &Tensor) -> Result<Self> {
        let (d, h, w) = match field.shape() {
            &[d, h, w] => (d, h, w),
            s => return Err(Error::invalid(format!("embedding must be [D, H, W], got {s:?}"))),
        };
        rect.validate(h, w)?;
        let plane = h * w;
        let pixels = rect.pixels(w);
        let mut rows = Vec::with_capacity(pixels.len() * d);
        for &p in &pixels {
            rows.extend((0..d).map(|c| field.data()[c * plane + p]));
        }
        Self::new(rect, scores, Tensor::new([pixels.len(), d], rows)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cut {
    /// Seed position within the rect, raster order.
    pub seed_index: usize,
    pub probabilities: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Mask `sigmoid(ŝ) >= threshold` over the region.
pub fn cut_region(r: &RegionProposal, params: &KernelParams, mode: SeedMode, threshold: f64) -> Result<Cut> {
    let tape = Tape::new();
    let kernel = params.bind(&tape, false);
    let scores = tape.constant(Tensor::from_vec(r.scores.clone()));
    let emb = tape.constant(r.embeddings.clone());
    let fusion = fuse_scores(scores, emb, &kernel, mode)?;
    let probabilities = fusion.probabilities.value().data().to_vec();
    let mask = probabilities.iter().map(|&p| p >= threshold).collect();
    Ok(Cut {
        seed_index: fusion.seed_index,
        probabilities,
        mask,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeedcutConfig {
    pub train: TrainConfig,
    /// Weight of the kernel cross-entropy; 0 reduces to plain embedding
    /// training.
    pub bce_weight: f64,
    pub sigma_init: f64,
    pub learn_sigma: bool,
    pub threshold: f64,
    pub box_pad: usize,
}

impl Default for SeedcutConfig {
    fn default() -> Self {
        SeedcutConfig {
            train: TrainConfig::default(),
            bce_weight: 1.0,
            sigma_init: 1.0,
            learn_sigma: true,
            threshold: 0.5,
            box_pad: 2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeedcutOutcome {
    pub backbone: Backbone,
    pub kernel: KernelParams,
    pub losses: Vec<f64>,
    /// `σ` after each update, starting with the initial value.
    pub sigmas: Vec<f64>,
}

struct BoxTarget {
    pixels: Rc<[usize]>,
    scores: Tensor,
    mask: Vec<bool>,
}

fn box_targets(scene: &Scene, boxes: &[Rect]) -> Result<Vec<BoxTarget>> {
    let (h, w) = (scene.height(), scene.width());
    boxes
        .iter()
        .map(|rect| {
            rect.validate(h, w)?;
            let pixels = rect.pixels(w);
            let scores = synthetic_scores(&scene.image, rect)?;
            let seed = crate::kernels::argmax(&scores).expect("non-empty rect");
            let id = scene.gt.labels()[pixels[seed]];
            let mask = pixels
                .iter()
                .map(|&p| id != 0 && scene.gt.labels()[p] == id)
                .collect();
            Ok(BoxTarget {
                pixels: pixels.into(),
                scores: Tensor::from_vec(scores),
                mask,
            })
        })
        .collect()
}

/// Joint training of the embedding and the kernel scale: pull-to-mean loss
/// plus `bce_weight` times the mean over boxes of the cross-entropy between
/// the soft-seed kernel row and the mask of the instance holding the hard
/// seed.
pub fn train_seedcut(scene: &Scene, boxes: &[Rect], cfg: &SeedcutConfig) -> Result<SeedcutOutcome> {
    let tc = &cfg.train;
    tc.validate()?;
    let mut kernel = KernelParams::new(KernelFamily::SteeredLaplacian, cfg.sigma_init)?;
    let segs = SegmentSet::from_labeling(&scene.gt);
    if segs.segments().is_empty() {
        return Err(Error::invalid("scene has no foreground instances"));
    }
    let opts = tc.loss_options();
    let use_bce = cfg.bce_weight != 0.0;
    if use_bce && boxes.is_empty() {
        return Err(Error::invalid("kernel loss needs at least one box"));
    }
    let targets = box_targets(scene, boxes)?;
    let mut read = loss_pixels(&segs, opts);
    if use_bce {
        read.extend(targets.iter().flat_map(|t| t.pixels.iter().copied()));
        read.sort_unstable();
        read.dedup();
    }
    let mut backbone = Backbone::new(&tc.backbone_config(scene.image.shape()[0]))?;
    let support = backbone.support(scene.height(), scene.width(), &read);
    let mut sgd = Sgd::for_kind(tc.optimizer, tc.lr, tc.momentum);
    let mut losses = Vec::with_capacity(tc.epochs + 1);
    let mut sigmas = vec![kernel.sigma()];
    for step in 0..=tc.epochs {
        let tape = Tape::new();
        let net = backbone.bind(&tape);
        let bound = kernel.bind(&tape, cfg.learn_sigma && use_bce);
        let run = || -> Result<Var<'_>> {
            let field = embed(&net, tape.constant(scene.image.clone()), tc.mode, Some(&support))?;
            let mut loss = pull_to_mean_loss(&field, &segs, opts)?;
            if use_bce {
                let mut bce: Option<Var<'_>> = None;
                for t in &targets {
                    let rows = field.values().gather_pixels(Rc::clone(&t.pixels), 0..field.dims())?;
                    let scores = tape.constant(t.scores.clone());
                    let fusion = fuse_scores(scores, rows, &bound, SeedMode::Soft)?;
                    let term = mask_bce(fusion.kernel_row, &t.mask)?;
                    bce = Some(match bce {
                        Some(b) => b.add(term)?,
                        None => term,
                    });
                }
                let bce = bce.expect("at least one box").scale(cfg.bce_weight / targets.len() as f64)?;
                loss = loss.add(bce)?;
            }
            Ok(loss)
        };
        let loss = run().map_err(|e| numeric_to_divergence(step, e))?;
        let value = loss.item()?;
        check_step(step, value)?;
        losses.push(value);
        if step == tc.epochs {
            break;
        }
        let grads = tape
            .backward(loss)
            .map_err(|e| numeric_to_divergence(step, e.into()))?;
        let mut g = net.gradients(&grads);
        let mut log_sigma = Tensor::scalar(kernel.log_sigma);
        let mut params: Vec<&mut Tensor> = backbone
            .layers_mut()
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect();
        if bound.log_sigma.requires_grad() {
            g.push(grads.wrt(bound.log_sigma));
            params.push(&mut log_sigma);
        }
        sgd.step(&mut params, &g);
        kernel.log_sigma = log_sigma.item()?;
        if !kernel.log_sigma.is_finite() {
            return Err(Error::Divergence {
                step,
                loss: kernel.log_sigma,
            });
        }
        sigmas.push(kernel.sigma());
    }
    Ok(SeedcutOutcome {
        backbone,
        kernel,
        losses,
        sigmas,
    })
}

/// Mask of one box, with the evaluation against its dominant instance.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxResult {
    pub rect: Rect,
    pub cut: Cut,
    /// Instance covering most of the box, lowest id on ties; 0 if none.
    pub instance: u16,
    pub iou: f64,
}

fn dominant_instance(gt: &InstanceLabeling, pixels: &[usize]) -> u16 {
    let mut counts = vec![0usize; gt.count() + 1];
    for &p in pixels {
        counts[gt.labels()[p] as usize] += 1;
    }
    let mut best = 0;
    for id in 1..counts.len() {
        if counts[id] > 0 && (best == 0 || counts[id] > counts[best]) {
            best = id;
        }
    }
    best as u16
}

/// Cut every box with synthetic scores from the dense embedding `field`.
pub fn evaluate_boxes(
    scene: &Scene,
    field: &Tensor,
    boxes: &[Rect],
    params: &KernelParams,
    mode: SeedMode,
    threshold: f64,
) -> Result<Vec<BoxResult>> {
    let w = scene.width();
    boxes
        .iter()
        .map(|rect| {
            let scores = synthetic_scores(&scene.image, rect)?;
            let proposal = RegionProposal::from_dense(*rect, scores, field)?;
            let cut = cut_region(&proposal, params, mode, threshold)?;
            let pixels = rect.pixels(w);
            let instance = dominant_instance(&scene.gt, &pixels);
            let (mut inter, mut union) = (0usize, 0usize);
            for (&p, &m) in pixels.iter().zip(&cut.mask) {
                let g = instance != 0 && scene.gt.labels()[p] == instance;
                inter += usize::from(m && g);
                union += usize::from(m || g);
            }
            let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            Ok(BoxResult {
                rect: *rect,
                cut,
                instance,
                iou,
            })
        })
        .collect()
}

/// Run lengths of a binary mask, alternating and starting with `false`.
pub fn rle_encode(mask: &[bool]) -> Vec<usize> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0;
    for &m in mask {
        if m != current {
            counts.push(run);
            run = 0;
            current = m;
        }
        run += 1;
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[usize]) -> Vec<bool> {
    counts
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n(i % 2 == 1, n))
        .collect()
}
