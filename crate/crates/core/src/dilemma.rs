//! The one-dimensional coloring dilemma.
//!
//! A triangular wave of period 2 has identical peaks at every even `u`. Any
//! translation-invariant operator must give all of them the same output, so it
//! cannot color the regions `S_k = [-1, 1] + 2k` apart. Mixing in the position,
//! `Φ_u = u + (1 - x_u) ẋ_u` maps every point of `S_k` to `2k`. A
//! propose-and-verify detector sidesteps the issue by only firing at centres.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Conv2dSpec, PaddingMode, Tape, Tensor};

pub const PERIOD: f64 = 2.0;

/// Samples of the period-2 triangular wave on `[-L, L]`, endpoints included.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicSignal1D {
    half_extent: f64,
    step: f64,
    per_period: usize,
    positions: Vec<f64>,
    samples: Vec<f64>,
}

impl PeriodicSignal1D {
    pub fn half_extent(&self) -> f64 {
        self.half_extent
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Grid points per period.
    pub fn per_period(&self) -> usize {
        self.per_period
    }

    /// Samples of one full turn of the circular domain (the last grid point
    /// coincides with the first and is dropped).
    pub fn cycle(&self) -> &[f64] {
        &self.samples[..self.samples.len() - 1]
    }

    /// Indices of the grid points at `u = 2k`.
    pub fn peak_indices(&self) -> Vec<usize> {
        (0..self.samples.len()).step_by(self.per_period).collect()
    }

    /// Value at an arbitrary grid position, or `None` off the grid.
    pub fn at(&self, u: f64) -> Option<f64> {
        let i = (u + self.half_extent) / self.step;
        if i < 0.0 || i.fract() != 0.0 {
            return None;
        }
        self.samples.get(i as usize).copied()
    }
}

/// Triangular wave with peaks of height 1 at every even `u`.
pub fn make_signal(half_extent: f64, step: f64) -> Result<PeriodicSignal1D> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let per = PERIOD / step;
    if per.fract() != 0.0 || per < 2.0 {
        return Err(Error::invalid(format!(
            "step {step} does not divide the period {PERIOD}"
        )));
    }
    if half_extent.is_nan() || half_extent <= 0.0 || (half_extent / PERIOD).fract() != 0.0 {
        return Err(Error::invalid(format!(
            "half extent must be a positive multiple of {PERIOD}, got {half_extent}"
        )));
    }
    let per_period = per as usize;
    let n = (2.0 * half_extent / step) as usize + 1;
    let positions = (0..n).map(|i| -half_extent + i as f64 * step).collect();
    // Values depend only on the phase index, so every period is bit-identical.
    let samples = (0..n)
        .map(|i| {
            let j = i % per_period;
            let t = if 2 * j <= per_period {
                j as f64 * step
            } else {
                j as f64 * step - PERIOD
            };
            (1.0 - t).min(1.0 + t)
        })
        .collect();
    Ok(PeriodicSignal1D {
        half_extent,
        step,
        per_period,
        positions,
        samples,
    })
}

/// `u + (1 - x_u) ẋ_u` with `ẋ` from circular central differences.
pub fn semiconv_color(sig: &PeriodicSignal1D) -> Vec<f64> {
    let cycle = sig.cycle();
    let n = cycle.len();
    sig.positions
        .iter()
        .zip(&sig.samples)
        .enumerate()
        .map(|(i, (&u, &x))| {
            let i = i % n;
            let slope = (cycle[(i + 1) % n] - cycle[(i + n - 1) % n]) / (2.0 * sig.step);
            u + (1.0 - x) * slope
        })
        .collect()
}

/// Region index `k` whose centre `2k` is nearest to `value`; midpoints go to
/// the lower `k`.
pub fn assign_region(value: f64) -> i64 {
    (value / 2.0 - 0.5).ceil() as i64
}

/// True for grid points on a region boundary `u = 2k ± 1`.
pub fn is_boundary(u: f64) -> bool {
    u.rem_euclid(PERIOD) == 1.0
}

/// Largest `|color - 2k|` over interior grid points of every `S_k`.
pub fn max_semiconv_error(sig: &PeriodicSignal1D) -> f64 {
    semiconv_color(sig)
        .iter()
        .zip(&sig.positions)
        .filter(|(_, &u)| !is_boundary(u))
        .map(|(&c, &u)| (c - 2.0 * assign_region(u) as f64).abs())
        .fold(0.0, f64::max)
}

/// Stack of 1D convolutions with relu between layers, run as `1 x k` 2D
/// convolutions over a single row.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack1d {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    padding: PaddingMode,
}

impl ConvStack1d {
    /// Single `1 x 1` layer with weight 1.
    pub fn identity() -> Self {
        ConvStack1d {
            weights: vec![Tensor::full([1, 1, 1, 1], 1.0)],
            biases: vec![Tensor::zeros([1])],
            padding: PaddingMode::Circular,
        }
    }

    /// Layers of `channels[i]` outputs and odd width `widths[i]`, weights and
    /// biases uniform in `[-1, 1]`. The last layer should have one channel.
    pub fn random(channels: &[usize], widths: &[usize], padding: PaddingMode, seed: u64) -> Result<Self> {
        if channels.is_empty() || channels.len() != widths.len() {
            return Err(Error::invalid("conv stack needs one width per layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut c_in = 1;
        for (&c_out, &k) in channels.iter().zip(widths) {
            if k % 2 == 0 || c_out == 0 {
                return Err(Error::invalid(format!("bad layer: {c_out} channels, width {k}")));
            }
            let w = (0..c_out * c_in * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
            weights.push(Tensor::new([c_out, c_in, 1, k], w)?);
            biases.push(Tensor::new([c_out], b)?);
            c_in = c_out;
        }
        Ok(ConvStack1d {
            weights,
            biases,
            padding,
        })
    }

    /// Three layers of widths 3, 5, 3 with 4, 4, 1 channels.
    pub fn random_default(seed: u64) -> Result<Self> {
        Self::random(&[4, 4, 1], &[3, 5, 3], PaddingMode::Circular, seed)
    }

    pub fn padding(&self) -> PaddingMode {
        self.padding
    }

    /// Output channel 0 at every sample of `signal`.
    pub fn apply(&self, signal: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let mut x = tape.constant(Tensor::new([1, 1, signal.len()], signal.to_vec())?);
        let n = self.weights.len();
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let kw = w.shape()[3];
            let spec = Conv2dSpec::same(1, kw, self.padding);
            x = x
                .conv2d(tape.constant(w.clone()), spec)?
                .add_channel_bias(tape.constant(b.clone()))?;
            if i + 1 < n {
                x = x.relu()?;
            }
        }
        Ok(x.value().data()[..signal.len()].to_vec())
    }
}

/// Spread `max - min` of the operator output over all peaks `u = 2k`. The
/// operator runs on the circular domain; zero padding is rejected because it
/// breaks the exact equivariance being witnessed.
pub fn conv_collision_witness(sig: &PeriodicSignal1D, op: &ConvStack1d) -> Result<f64> {
    if op.padding != PaddingMode::Circular {
        return Err(Error::invalid(
            "collision witness needs circular padding",
        ));
    }
    let out = op.apply(sig.cycle())?;
    let n = out.len();
    let peaks: Vec<f64> = sig.peak_indices().into_iter().map(|i| out[i % n]).collect();
    let hi = peaks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = peaks.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(hi - lo)
}

/// Positions where the verification function `[x_u = 1]` fires.
pub fn pv_verify(sig: &PeriodicSignal1D) -> Vec<f64> {
    detect(sig, |x| x == 1.0)
}

/// Tolerant verification `[x_u > 1 - step/2]`, for signals whose peaks are not
/// sampled exactly.
pub fn pv_verify_thresholded(sig: &PeriodicSignal1D) -> Vec<f64> {
    let t = 1.0 - sig.step / 2.0;
    detect(sig, |x| x > t)
}

fn detect(sig: &PeriodicSignal1D, fire: impl Fn(f64) -> bool) -> Vec<f64> {
    sig.positions
        .iter()
        .zip(&sig.samples)
        .filter(|(_, &x)| fire(x))
        .map(|(&u, _)| u)
        .collect()
}

/// Number of regions `S_k` meeting `[-L, L]`.
pub fn region_count(sig: &PeriodicSignal1D) -> usize {
    (sig.half_extent / PERIOD) as usize * 2 + 1
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DilemmaReport {
    pub max_conv_spread: f64,
    pub max_semiconv_error: f64,
    pub centers: Vec<f64>,
    pub n_regions: usize,
}

/// Full experiment: the collision spread is the maximum over `stacks` random
/// conv stacks seeded `seed, seed + 1, …`.
pub fn run(half_extent: f64, step: f64, stacks: usize, seed: u64) -> Result<DilemmaReport> {
    let sig = make_signal(half_extent, step)?;
    let mut spread: f64 = 0.0;
    for i in 0..stacks as u64 {
        let op = ConvStack1d::random_default(seed.wrapping_add(i))?;
        spread = spread.max(conv_collision_witness(&sig, &op)?);
    }
    Ok(DilemmaReport {
        max_conv_spread: spread,
        max_semiconv_error: max_semiconv_error(&sig),
        centers: pv_verify(&sig),
        n_regions: region_count(&sig),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signal_values() {
        let s = make_signal(4.0, 0.25).unwrap();
        assert_eq!(s.at(0.0), Some(1.0));
        assert_eq!(s.at(0.5), Some(0.5));
        assert_eq!(s.at(2.25), Some(0.75));
        assert_eq!(s.at(-1.0), Some(0.0));
        assert_eq!(s.samples().len(), 33);
    }

    #[test]
    fn signal_preconditions() {
        assert!(make_signal(4.0, 0.3).is_err());
        assert!(make_signal(3.0, 0.25).is_err());
        assert!(make_signal(4.0, 0.0).is_err());
        assert!(make_signal(4.0, 4.0).is_err());
    }

    #[test]
    fn colors_by_hand() {
        let s = make_signal(4.0, 0.25).unwrap();
        let c = semiconv_color(&s);
        let at = |u: f64| c[((u + 4.0) / 0.25) as usize];
        assert_eq!(at(0.5), 0.0);
        assert_eq!(at(2.25), 2.0);
        assert_eq!(at(-4.0), -4.0);
    }

    #[test]
    fn region_rounding() {
        assert_eq!(assign_region(0.9), 0);
        assert_eq!(assign_region(1.0), 0);
        assert_eq!(assign_region(1.1), 1);
        assert_eq!(assign_region(-1.0), -1);
        assert_eq!(assign_region(-3.2), -2);
    }

    #[test]
    fn centres() {
        let s = make_signal(4.0, 0.25).unwrap();
        assert_eq!(pv_verify(&s), vec![-4.0, -2.0, 0.0, 2.0, 4.0]);
        assert_eq!(pv_verify_thresholded(&s), pv_verify(&s));
        assert_eq!(region_count(&s), 5);
    }

    #[test]
    fn identity_and_zero_padding() {
        let s = make_signal(4.0, 0.5).unwrap();
        assert_eq!(conv_collision_witness(&s, &ConvStack1d::identity()).unwrap(), 0.0);
        let zero = ConvStack1d::random(&[1], &[3], PaddingMode::Zero, 0).unwrap();
        assert!(conv_collision_witness(&s, &zero).is_err());
    }
}
