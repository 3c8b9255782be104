//! The four white-box experts: PIMDO (anisotropic diffusion), SPD (gated
//! subband decomposition), HPLSM (hypernetwork-modulated convolution), and
//! TGDS (offset-guided deformable sampling).
//!
//! Each expert maps an NCHW feature map to one of the same shape, owns its
//! weights as plain tensors, and builds its computation on a [`Graph`] so
//! gradients reach every weight through the tape. PIMDO and SPD act
//! per-channel (the channel axis is folded into the batch); HPLSM and TGDS
//! mix channels and are constructed for a fixed channel count.

mod hplsm;
mod pimdo;
mod spd;
mod tgds;

pub use hplsm::Hplsm;
pub use pimdo::Pimdo;
pub use spd::{haar_analysis_filters, haar_synthesis_filters, Spd};
pub use tgds::Tgds;

use crate::tensor::{Pad, Real, Tape, Tensor, ValueId};
use crate::{Error, Result};

/// Initial value of each expert's output scale: small enough that a fresh
/// adapter barely perturbs the frozen backbone, large enough that expert
/// weights receive usable gradients from step one.
pub const DEFAULT_OUTPUT_SCALE: f64 = 0.1;

/// Per-channel Sobel responses with reflect padding. The kernels are the
/// fixed constants [[-1,0,1],[-2,0,2],[-1,0,1]] (gx) and its transpose (gy);
/// nothing here is trainable.
pub fn sobel_gradients<F: Real>(tape: &mut Tape<F>, x: ValueId) -> Result<(ValueId, ValueId)> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("sobel_gradients: expected NCHW, got {:?}", s)));
    }
    let (c, h, w) = (s[1], s[2], s[3]);
    if h < 3 || w < 3 {
        return Err(Error::Dimension(format!("sobel_gradients: image {h}x{w} smaller than the 3x3 kernel")));
    }
    let base_x: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
    let mut kx = Tensor::zeros(&[c, 1, 3, 3]);
    let mut ky = Tensor::zeros(&[c, 1, 3, 3]);
    for ci in 0..c {
        for m in 0..9 {
            kx.data_mut()[ci * 9 + m] = F::f(base_x[m]);
            ky.data_mut()[ci * 9 + (m % 3) * 3 + m / 3] = F::f(base_x[m]);
        }
    }
    let kx = tape.constant(kx);
    let ky = tape.constant(ky);
    let gx = tape.conv2d(x, kx, None, c, Pad::Reflect)?;
    let gy = tape.conv2d(x, ky, None, c, Pad::Reflect)?;
    Ok((gx, gy))
}

#[cfg(test)]
pub(crate) mod test_support {
    use crate::tensor::{compare_gradients, finite_difference_gradient, Graph, Module, Tensor, ValueId};
    use crate::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check of dLoss/dParam for every weight of a module,
    /// with loss = mean(forward(x) ⊙ r) for a fixed random probe r. `prefix`
    /// must match the one the forward closure binds its parameters under.
    pub fn gradcheck_module<M, Fwd>(module: &M, x: &Tensor<f64>, seed: u64, prefix: &str, forward: Fwd)
    where
        M: Module<f64> + Clone,
        Fwd: Fn(&mut Graph<f64>, &M, ValueId) -> Result<ValueId>,
    {
        let eval = |m: &M, probe: Option<(&str, &Tensor<f64>)>| -> (f64, Option<Vec<(String, Tensor<f64>)>>) {
            let mut m = m.clone();
            if let Some((name, t)) = probe {
                let mut found = false;
                for (n, w) in m.params_mut() {
                    if n == name {
                        *w = t.clone();
                        found = true;
                    }
                }
                assert!(found, "no parameter named {name}");
            }
            let mut g = Graph::new(probe.is_none());
            let xid = g.input(x.clone());
            let out = forward(&mut g, &m, xid).expect("forward");
            let r = g.input(probe_tensor(g.tape.shape(out), seed));
            let prod = g.tape.mul(out, r).expect("probe product");
            let loss = g.tape.mean(prod).expect("loss");
            if probe.is_some() {
                return (g.tape.data(loss)[0], None);
            }
            g.backward(loss).expect("backward");
            let grads = m
                .params()
                .iter()
                .map(|(n, t)| {
                    let grad = g
                        .grad_of(&format!("{prefix}.{n}"))
                        .map(|d| Tensor::new(t.shape(), d.to_vec()).unwrap())
                        .unwrap_or_else(|| Tensor::zeros(t.shape()));
                    (n.clone(), grad)
                })
                .collect();
            (g.tape.data(loss)[0], Some(grads))
        };
        let (_, grads) = eval(module, None);
        for (name, analytic) in grads.unwrap() {
            let base = module.params().into_iter().find(|(n, _)| *n == name).unwrap().1.clone();
            let numeric = finite_difference_gradient(
                |probe| Ok(eval(module, Some((&name, probe))).0),
                &base,
                crate::tensor::DEFAULT_STEP,
            )
            .unwrap();
            let cmp = compare_gradients(&analytic, &numeric);
            assert!(cmp.pass, "seed {seed}, param {name}: {cmp}");
        }
    }

    fn probe_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545f4914f6cdd1d));
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    pub fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }
}
