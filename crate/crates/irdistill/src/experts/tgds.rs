//! TGDS: topology-guided deformable sampling.
//!
//! An offset network predicts, per location, displacements for the nine
//! taps of a 3×3 sampling grid (offsets pass through 2·tanh, bounding the
//! drift to ±2 pixels). The input is bilinearly sampled at the displaced
//! taps and a 1×1 mix convolution aggregates the 9·C sampled values per
//! location back to C channels. Offsets initialize to zero, so a fresh
//! TGDS is exactly a standard 3×3 convolution whose kernel is the mix
//! weight re-indexed over taps.

use rand_chacha::ChaCha8Rng;

use super::DEFAULT_OUTPUT_SCALE;
use crate::tensor::{kaiming_uniform, Graph, Module, Pad, Real, Tensor, ValueId};
use crate::{Error, Result};

/// Sampling taps per location (3×3 grid).
pub const TAPS: usize = 9;
/// Offset channels: (Δy, Δx) per tap.
pub const OFFSET_CHANNELS: usize = 2 * TAPS;
/// Offsets are tanh-bounded to ±this many pixels.
pub const MAX_OFFSET: f64 = 2.0;

#[derive(Clone, Debug)]
pub struct Tgds<F: Real> {
    pub offset_w: Tensor<F>,
    pub offset_b: Tensor<F>,
    pub mix_w: Tensor<F>,
    pub mix_b: Tensor<F>,
    pub out_scale: Tensor<F>,
    channels: usize,
}

impl<F: Real> Tgds<F> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = channels;
        Tgds {
            offset_w: Tensor::zeros(&[OFFSET_CHANNELS, c, 3, 3]),
            offset_b: Tensor::zeros(&[OFFSET_CHANNELS]),
            mix_w: kaiming_uniform(&[c, c * TAPS, 1, 1], c * TAPS, rng),
            mix_b: Tensor::zeros(&[c]),
            out_scale: Tensor::scalar(F::f(DEFAULT_OUTPUT_SCALE)),
            channels: c,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Pin every tap's offset to the constant (dy, dx); |d| must stay
    /// below [`MAX_OFFSET`] for atanh to exist.
    pub fn force_offsets(&mut self, dy: f64, dx: f64) {
        self.offset_w.fill(F::zero());
        for (i, v) in self.offset_b.data_mut().iter_mut().enumerate() {
            let d = if i % 2 == 0 { dy } else { dx };
            *v = F::f((d / MAX_OFFSET).atanh());
        }
    }

    /// Returns the aggregated features and the realized sampling
    /// coordinates, shape (N, 9·H·W, 2) in (y, x) order, for diagnostics.
    pub fn forward(&self, g: &mut Graph<F>, prefix: &str, x: ValueId) -> Result<(ValueId, ValueId)> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Dimension(format!(
                "tgds: expected (N, {}, H, W), got {:?}",
                self.channels, s
            )));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h < 3 || w < 3 {
            return Err(Error::Dimension(format!("tgds: spatial extent {h}x{w} below 3x3")));
        }
        let ow = g.param(&format!("{prefix}.offset_w"), &self.offset_w)?;
        let ob = g.param(&format!("{prefix}.offset_b"), &self.offset_b)?;
        let mw = g.param(&format!("{prefix}.mix_w"), &self.mix_w)?;
        let mb = g.param(&format!("{prefix}.mix_b"), &self.mix_b)?;
        let scale = g.param(&format!("{prefix}.out_scale"), &self.out_scale)?;
        let base = g.input(base_grid(n, h, w));

        let t = &mut g.tape;
        let raw = t.conv2d(x, ow, Some(ob), 1, Pad::Reflect)?;
        let bounded = t.tanh(raw)?;
        let delta = t.mul_const(bounded, F::f(MAX_OFFSET))?;
        let d5 = t.reshape(delta, &[n, TAPS, 2, h, w])?;
        let dp = t.permute(d5, &[0, 1, 3, 4, 2])?;
        let dflat = t.reshape(dp, &[n, TAPS * h * w, 2])?;
        let coords = t.add(base, dflat)?;
        let sampled = t.bilinear_sample(x, coords)?;
        let stacked = t.reshape(sampled, &[n, c * TAPS, h, w])?;
        let y = t.conv2d(stacked, mw, Some(mb), 1, Pad::Zero)?;
        let y = t.mul_scalar_param(y, scale)?;
        Ok((y, coords))
    }
}

/// Undisplaced tap coordinates: for tap k = ky·3+kx and pixel (i, j), the
/// (y, x) pair (i+ky−1, j+kx−1), laid out as (N, 9·H·W, 2).
fn base_grid<F: Real>(n: usize, h: usize, w: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(n * TAPS * h * w * 2);
    for _ in 0..n {
        for k in 0..TAPS {
            let ky = (k / 3) as f64 - 1.0;
            let kx = (k % 3) as f64 - 1.0;
            for i in 0..h {
                for j in 0..w {
                    data.push(F::f(i as f64 + ky));
                    data.push(F::f(j as f64 + kx));
                }
            }
        }
    }
    Tensor::new(&[n, TAPS * h * w, 2], data).expect("grid shape")
}

impl<F: Real> Module<F> for Tgds<F> {
    fn params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("offset_w".into(), &self.offset_w),
            ("offset_b".into(), &self.offset_b),
            ("mix_w".into(), &self.mix_w),
            ("mix_b".into(), &self.mix_b),
            ("out_scale".into(), &self.out_scale),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("offset_w".into(), &mut self.offset_w),
            ("offset_b".into(), &mut self.offset_b),
            ("mix_w".into(), &mut self.mix_w),
            ("mix_b".into(), &mut self.mix_b),
            ("out_scale".into(), &mut self.out_scale),
        ]
    }
}
