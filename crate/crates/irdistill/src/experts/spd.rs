//! SPD: spectral decomposition with gated reconstruction.
//!
//! Each channel is split into four subbands by 3×3 analysis filters, every
//! subband is scaled by a learned sigmoid gate, and a synthesis bank sums
//! the gated subbands back into one channel. At initialization the analysis
//! bank is the undecimated 2D Haar quadruple (LL, LH, HL, HH) and the
//! synthesis bank is its exact convolutional inverse, δ/2 per subband —
//! exact because the four Haar filters sum to 2δ, so the subbands sum to
//! twice the input at every pixel, borders included. (The textbook flipped
//! synthesis bank only inverts the frame in the interior: the truncated
//! subbands lose the boundary taps it needs.) So open gates reconstruct the
//! input and closed gates null it.

use rand_chacha::ChaCha8Rng;

use super::DEFAULT_OUTPUT_SCALE;
use crate::tensor::{xavier_uniform, Graph, Module, Pad, Real, Tensor, ValueId};
use crate::{Error, Result};

/// Number of subbands.
pub const SUBBANDS: usize = 4;
/// Hidden width of the shared gate network.
pub const GATE_HIDDEN: usize = 16;

/// The four analysis filters as a (4, 1, 3, 3) bank in LL, LH, HL, HH
/// order: outer products of the Haar pair (1,1)/√2 and (1,−1)/√2, embedded
/// in the lower-right 2×2 block of each 3×3 kernel.
pub fn haar_analysis_filters<F: Real>() -> Tensor<F> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let low = [s, s];
    let high = [s, -s];
    let pairs = [(low, low), (low, high), (high, low), (high, high)];
    let mut t = Tensor::zeros(&[SUBBANDS, 1, 3, 3]);
    for (j, (row, col)) in pairs.iter().enumerate() {
        for dy in 0..2 {
            for dx in 0..2 {
                t.data_mut()[j * 9 + (1 + dy) * 3 + (1 + dx)] = F::f(row[dy] * col[dx]);
            }
        }
    }
    t
}

///// Matching synthesis bank as a (1, 4, 3, 3) kernel: δ/2 at the center of
/// every subband. The four analysis filters sum to 2δ at the kernel center,
/// so summing half of each subband returns the input exactly at every pixel,
/// borders included — the flipped-analysis bank is only exact in the
/// interior because the truncated subbands drop the boundary taps it reads.
pub fn haar_synthesis_filters<F: Real>() -> Tensor<F> {
    let mut t = Tensor::zeros(&[1, SUBBANDS, 3, 3]);
    for j in 0..SUBBANDS {
        t.data_mut()[j * 9 + 4] = F::f(0.5);
    }
    t
}

#[derive(Clone, Debug)]
pub struct Spd<F: Real> {
    pub analysis_w: Tensor<F>,
    pub synthesis_w: Tensor<F>,
    pub gate_w1: Tensor<F>,
    pub gate_b1: Tensor<F>,
    pub gate_w2: Tensor<F>,
    pub gate_b2: Tensor<F>,
    pub out_scale: Tensor<F>,
}

impl<F: Real> Spd<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        Spd {
            analysis_w: haar_analysis_filters(),
            synthesis_w: haar_synthesis_filters(),
            gate_w1: xavier_uniform(&[SUBBANDS, GATE_HIDDEN], SUBBANDS, GATE_HIDDEN, rng),
            gate_b1: Tensor::zeros(&[GATE_HIDDEN]),
            gate_w2: xavier_uniform(&[GATE_HIDDEN, SUBBANDS], GATE_HIDDEN, SUBBANDS, rng),
            gate_b2: Tensor::zeros(&[SUBBANDS]),
            out_scale: Tensor::scalar(F::f(DEFAULT_OUTPUT_SCALE)),
        }
    }

    /// Pin every gate to sigmoid(logit) regardless of input; ±1000
    /// saturates to exactly 0 or 1.
    pub fn force_gates(&mut self, logit: f64) {
        self.gate_w2.fill(F::zero());
        self.gate_b2.fill(F::f(logit));
    }

    pub fn forward(&self, g: &mut Graph<F>, prefix: &str, x: ValueId) -> Result<ValueId> {
        if self.analysis_w.shape()[0] != SUBBANDS || self.synthesis_w.shape()[1] != SUBBANDS {
            return Err(Error::Config(format!(
                "spd: expected {SUBBANDS} subbands, got analysis {:?} / synthesis {:?}",
                self.analysis_w.shape(),
                self.synthesis_w.shape()
            )));
        }
        let s = g.tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::Dimension(format!("spd: expected NCHW, got {:?}", s)));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ana = g.param(&format!("{prefix}.analysis_w"), &self.analysis_w)?;
        let syn = g.param(&format!("{prefix}.synthesis_w"), &self.synthesis_w)?;
        let w1 = g.param(&format!("{prefix}.gate_w1"), &self.gate_w1)?;
        let b1 = g.param(&format!("{prefix}.gate_b1"), &self.gate_b1)?;
        let w2 = g.param(&format!("{prefix}.gate_w2"), &self.gate_w2)?;
        let b2 = g.param(&format!("{prefix}.gate_b2"), &self.gate_b2)?;
        let scale = g.param(&format!("{prefix}.out_scale"), &self.out_scale)?;

        let t = &mut g.tape;
        let flat = t.reshape(x, &[n * c, 1, h, w])?;
        let z = t.conv2d(flat, ana, None, 1, Pad::Zero)?;
        let pooled = t.gap(z)?;
        let h1 = t.matmul(pooled, w1)?;
        let h1 = t.add_bias_col(h1, b1)?;
        let h1 = t.relu(h1)?;
        let logits = t.matmul(h1, w2)?;
        let logits = t.add_bias_col(logits, b2)?;
        let alpha = t.sigmoid(logits)?;
        let gated = t.scale_per_channel(z, alpha)?;
        let recon = t.conv2d(gated, syn, None, 1, Pad::Zero)?;
        let back = t.reshape(recon, &[n, c, h, w])?;
        t.mul_scalar_param(back, scale)
    }
}

impl<F: Real> Module<F> for Spd<F> {
    fn params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("analysis_w".into(), &self.analysis_w),
            ("synthesis_w".into(), &self.synthesis_w),
            ("gate_w1".into(), &self.gate_w1),
            ("gate_b1".into(), &self.gate_b1),
            ("gate_w2".into(), &self.gate_w2),
            ("gate_b2".into(), &self.gate_b2),
            ("out_scale".into(), &self.out_scale),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("analysis_w".into(), &mut self.analysis_w),
            ("synthesis_w".into(), &mut self.synthesis_w),
            ("gate_w1".into(), &mut self.gate_w1),
            ("gate_b1".into(), &mut self.gate_b1),
            ("gate_w2".into(), &mut self.gate_w2),
            ("gate_b2".into(), &mut self.gate_b2),
            ("out_scale".into(), &mut self.out_scale),
        ]
    }
}
