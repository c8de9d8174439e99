//! Training objectives: the pull-to-mean embedding loss and the binary
//! cross-entropy applied to kernel rows.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::labeling::InstanceLabeling;
use crate::semiconv::EmbeddingField;
use crate::tensor::{Tensor, Var};

/// Probabilities are clamped this far from 0 and 1 before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Default `eps` under the square root of the per-pixel distance.
pub const DEFAULT_EPS: f64 = 1e-8;

/// Foreground segments `S_1..S_K` and the background `S_0`, as flat pixel
/// indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSet {
    segments: Vec<Vec<usize>>,
    background: Vec<usize>,
}

impl SegmentSet {
    /// Checks that segments are non-empty, pairwise disjoint, and together with
    /// the background cover `0..num_pixels` exactly once.
    pub fn new(segments: Vec<Vec<usize>>, background: Vec<usize>, num_pixels: usize) -> Result<Self> {
        if let Some(k) = segments.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("segment {} is empty", k + 1)));
        }
        let mut seen = vec![false; num_pixels];
        for &p in segments.iter().flatten().chain(&background) {
            match seen.get_mut(p) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::invalid(format!("pixel {p} in two segments"))),
                None => return Err(Error::invalid(format!("pixel {p} outside the grid"))),
            }
        }
        if let Some(p) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("pixel {p} not covered by any segment")));
        }
        Ok(SegmentSet {
            segments,
            background,
        })
    }

    pub fn from_labeling(gt: &InstanceLabeling) -> Self {
        SegmentSet {
            segments: gt.instances(),
            background: gt.background(),
        }
    }

    pub fn segments(&self) -> &[Vec<usize>] {
        &self.segments
    }

    pub fn background(&self) -> &[usize] {
        &self.background
    }

    /// Every pixel that appears in a foreground segment.
    pub fn foreground_pixels(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.segments.iter().flatten().copied().collect();
        v.sort_unstable();
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PullLossOptions {
    pub eps: f64,
    /// Treat the background as one more segment.
    pub include_background: bool,
}

impl Default for PullLossOptions {
    fn default() -> Self {
        PullLossOptions {
            eps: DEFAULT_EPS,
            include_background: false,
        }
    }
}

/// Sum over segments of the mean unsquared distance between each pixel's
/// embedding and the segment's mean embedding:
///
/// `Σ_S (1/|S|) Σ_{u∈S} sqrt(‖Ψ_u − mean_S Ψ‖² + eps)`
///
/// There is no term pushing different segments apart.
pub fn pull_to_mean_loss<'t>(
    field: &EmbeddingField<'t>,
    segs: &SegmentSet,
    opts: PullLossOptions,
) -> Result<Var<'t>> {
    if opts.eps <= 0.0 {
        return Err(Error::invalid(format!("eps must be positive, got {}", opts.eps)));
    }
    let mut groups: Vec<&[usize]> = segs.segments.iter().map(Vec::as_slice).collect();
    if opts.include_background && !segs.background.is_empty() {
        groups.push(&segs.background);
    }
    let values = field.values();
    let dims = field.dims();
    let mut total: Option<Var<'t>> = None;
    for (k, seg) in groups.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::invalid(format!("segment {} is empty", k + 1)));
        }
        let pixels: Rc<[usize]> = Rc::from(*seg);
        let rows = values.gather_pixels(pixels, 0..dims)?;
        let mean = rows.mean(&[0])?.expand_rows(seg.len())?;
        let term = rows.sub(mean)?.l2norm_rows(opts.eps)?.mean_all()?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(values.tape().constant(Tensor::scalar(0.0))),
    }
}

/// Mean binary cross-entropy between per-pixel probabilities and a binary
/// mask, with probabilities clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn mask_bce<'t>(probs: Var<'t>, mask: &[bool]) -> Result<Var<'t>> {
    let shape = probs.shape();
    if shape.len() != 1 || shape[0] != mask.len() {
        return Err(Error::invalid(format!(
            "mask_bce: probabilities {shape:?} vs mask of {}",
            mask.len()
        )));
    }
    if mask.is_empty() {
        return Err(Error::invalid("mask_bce: empty mask"));
    }
    let tape = probs.tape();
    let target = Tensor::from_vec(mask.iter().map(|&m| f64::from(u8::from(m))).collect());
    let complement = target.map(|m| 1.0 - m);
    let k = probs.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = k.log()?.mul(tape.constant(target))?;
    let neg = k.neg()?.add_scalar(1.0)?.log()?.mul(tape.constant(complement))?;
    Ok(pos.add(neg)?.mean_all()?.neg()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semiconv::EmbeddingField;
    use crate::tensor::Tape;

    fn field_1d<'t>(tape: &'t Tape, values: &[f64]) -> EmbeddingField<'t> {
        let t = Tensor::new([1, 1, values.len()], values.to_vec()).unwrap();
        EmbeddingField::convolutional(tape.constant(t)).unwrap()
    }

    #[test]
    fn hand_evaluated_two_points() {
        let tape = Tape::new();
        let f = field_1d(&tape, &[0.0, 2.0]);
        let segs = SegmentSet::new(vec![vec![0, 1]], vec![], 2).unwrap();
        let loss = pull_to_mean_loss(&f, &segs, PullLossOptions::default()).unwrap();
        assert!((loss.item().unwrap() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn constant_segments_vanish() {
        let tape = Tape::new();
        let f = field_1d(&tape, &[3.0, 3.0, -1.0, -1.0, -1.0, 9.0]);
        let segs = SegmentSet::new(vec![vec![0, 1], vec![2, 3, 4]], vec![5], 6).unwrap();
        let opts = PullLossOptions {
            eps: 1e-12,
            ..Default::default()
        };
        let loss = pull_to_mean_loss(&f, &segs, opts).unwrap().item().unwrap();
        assert!(loss <= 2.0 * 1e-6 + 1e-15, "{loss}");
    }

    #[test]
    fn segment_validation() {
        assert!(SegmentSet::new(vec![vec![]], vec![0], 1).is_err());
        assert!(SegmentSet::new(vec![vec![0, 1]], vec![1], 2).is_err());
        assert!(SegmentSet::new(vec![vec![0]], vec![], 2).is_err());
        assert!(SegmentSet::new(vec![vec![0]], vec![], 1).is_ok());
    }

    #[test]
    fn bce_examples() {
        let tape = Tape::new();
        let half = tape.constant(Tensor::full([4], 0.5));
        let mask = [true, false, true, false];
        let l = mask_bce(half, &mask).unwrap().item().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let e = tape.constant(Tensor::full([3], (-1.0f64).exp()));
        let l = mask_bce(e, &[true; 3]).unwrap().item().unwrap();
        assert!((l - 1.0).abs() < 1e-12);

        let exact = tape.constant(Tensor::from_vec(vec![1.0, 0.0, 1.0]));
        let l = mask_bce(exact, &[true, false, true]).unwrap().item().unwrap();
        assert!(l.abs() < 1e-6);

        assert!(mask_bce(half, &[true]).is_err());
    }
}
