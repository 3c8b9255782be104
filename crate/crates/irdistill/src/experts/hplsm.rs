//! HPLSM: a shared base convolution modulated per location and per channel
//! by a hypernetwork.
//!
//! The hypernetwork runs two 3×3 convolutions to produce 2C pre-pool maps
//! (γ and β halves), global-average-pools them, and passes the pooled
//! vector through one fully connected layer to get per-channel (γ, β)
//! scalars. The scalars are broadcast over space and refined by adding the
//! pre-pool maps, giving genuinely per-location modulation:
//! out = (γ_map ⊕ γ_scalar) ⊙ conv(x) + (β_map ⊕ β_scalar).

use rand_chacha::ChaCha8Rng;

use super::DEFAULT_OUTPUT_SCALE;
use crate::tensor::{kaiming_uniform, Graph, Module, Pad, Real, Tensor, ValueId};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Hplsm<F: Real> {
    pub base_w: Tensor<F>,
    pub hyper1_w: Tensor<F>,
    pub hyper1_b: Tensor<F>,
    pub hyper2_w: Tensor<F>,
    pub hyper2_b: Tensor<F>,
    pub fc_w: Tensor<F>,
    pub fc_b: Tensor<F>,
    pub out_scale: Tensor<F>,
    channels: usize,
}

fn hidden(c: usize) -> usize {
    (c / 2).max(2)
}

impl<F: Real> Hplsm<F> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = channels;
        let ch = hidden(c);
        // fc_b starts at γ=1, β=0 so a fresh expert modulates near identity.
        let mut fc_b = Tensor::zeros(&[2 * c]);
        for v in fc_b.data_mut()[..c].iter_mut() {
            *v = F::one();
        }
        Hplsm {
            base_w: kaiming_uniform(&[c, c, 3, 3], c * 9, rng),
            hyper1_w: kaiming_uniform(&[ch, c, 3, 3], c * 9, rng),
            hyper1_b: Tensor::zeros(&[ch]),
            hyper2_w: kaiming_uniform(&[2 * c, ch, 3, 3], ch * 9, rng),
            hyper2_b: Tensor::zeros(&[2 * c]),
            fc_w: Tensor::zeros(&[2 * c, 2 * c]),
            fc_b,
            out_scale: Tensor::scalar(F::f(DEFAULT_OUTPUT_SCALE)),
            channels: c,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Pin the modulation to constants: γ ≡ gamma, β ≡ beta, exactly.
    pub fn force_modulation(&mut self, gamma: f64, beta: f64) {
        self.hyper2_w.fill(F::zero());
        self.hyper2_b.fill(F::zero());
        self.fc_w.fill(F::zero());
        let c = self.channels;
        for (i, v) in self.fc_b.data_mut().iter_mut().enumerate() {
            *v = F::f(if i < c { gamma } else { beta });
        }
    }

    pub fn forward(&self, g: &mut Graph<F>, prefix: &str, x: ValueId) -> Result<ValueId> {
        let s = g.tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Dimension(format!(
                "hplsm: expected (N, {}, H, W), got {:?}",
                self.channels, s
            )));
        }
        let (n, c) = (s[0], s[1]);
        let base_w = g.param(&format!("{prefix}.base_w"), &self.base_w)?;
        let h1w = g.param(&format!("{prefix}.hyper1_w"), &self.hyper1_w)?;
        let h1b = g.param(&format!("{prefix}.hyper1_b"), &self.hyper1_b)?;
        let h2w = g.param(&format!("{prefix}.hyper2_w"), &self.hyper2_w)?;
        let h2b = g.param(&format!("{prefix}.hyper2_b"), &self.hyper2_b)?;
        let fcw = g.param(&format!("{prefix}.fc_w"), &self.fc_w)?;
        let fcb = g.param(&format!("{prefix}.fc_b"), &self.fc_b)?;
        let scale = g.param(&format!("{prefix}.out_scale"), &self.out_scale)?;

        let t = &mut g.tape;
        let base = t.conv2d(x, base_w, None, 1, Pad::Reflect)?;
        let h = t.conv2d(x, h1w, Some(h1b), 1, Pad::Reflect)?;
        let h = t.relu(h)?;
        let maps = t.conv2d(h, h2w, Some(h2b), 1, Pad::Reflect)?;
        let pooled = t.gap(maps)?;
        let scalars = t.matmul(pooled, fcw)?;
        let scalars = t.add_bias_col(scalars, fcb)?;

        let gamma_map = t.slice_channels(maps, 0, c)?;
        let beta_map = t.slice_channels(maps, c, 2 * c)?;
        let s4 = t.reshape(scalars, &[n, 2 * c, 1, 1])?;
        let gs = t.slice_channels(s4, 0, c)?;
        let gs = t.reshape(gs, &[n, c])?;
        let bs = t.slice_channels(s4, c, 2 * c)?;
        let bs = t.reshape(bs, &[n, c])?;

        let gamma = t.add_per_channel(gamma_map, gs)?;
        let beta = t.add_per_channel(beta_map, bs)?;
        let modulated = t.mul(gamma, base)?;
        let out = t.add(modulated, beta)?;
        t.mul_scalar_param(out, scale)
    }
}

impl<F: Real> Module<F> for Hplsm<F> {
    fn params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("base_w".into(), &self.base_w),
            ("hyper1_w".into(), &self.hyper1_w),
            ("hyper1_b".into(), &self.hyper1_b),
            ("hyper2_w".into(), &self.hyper2_w),
            ("hyper2_b".into(), &self.hyper2_b),
            ("fc_w".into(), &self.fc_w),
            ("fc_b".into(), &self.fc_b),
            ("out_scale".into(), &self.out_scale),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("base_w".into(), &mut self.base_w),
            ("hyper1_w".into(), &mut self.hyper1_w),
            ("hyper1_b".into(), &mut self.hyper1_b),
            ("hyper2_w".into(), &mut self.hyper2_w),
            ("hyper2_b".into(), &mut self.hyper2_b),
            ("fc_w".into(), &mut self.fc_w),
            ("fc_b".into(), &mut self.fc_b),
            ("out_scale".into(), &mut self.out_scale),
        ]
    }
}
