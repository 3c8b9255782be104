//! Finite-difference verification of analytic gradients.
//!
//! The checker never looks inside the tape: it treats the model as a black
//! box `f(x) -> scalar` and probes it one coordinate at a time with central
//! differences. Run it at 64-bit; the step size is tuned for f64.

use super::{Real, Tensor};
use crate::Result;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Elements with analytic magnitude below this are compared absolutely.
pub const SMALL_GRAD: f64 = 1e-6;
/// Maximum allowed relative error for the remaining elements.
pub const REL_TOL: f64 = 1e-4;

/// Outcome of comparing analytic and numeric gradients for one tensor.
#[derive(Clone, Debug)]
pub struct GradCompare {
    /// Worst relative error among elements large enough to compare relatively.
    pub max_rel: f64,
    /// Worst absolute error among near-zero elements.
    pub max_abs_small: f64,
    /// Flat index of the worst offender.
    pub worst_index: usize,
    pub pass: bool,
}

impl std::fmt::Display for GradCompare {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} (max rel {:.3e}, max abs@small {:.3e}, worst at {})",
            if self.pass { "ok" } else { "MISMATCH" },
            self.max_rel,
            self.max_abs_small,
            self.worst_index
        )
    }
}

/// Central-difference gradient of `f` at `x`: each coordinate is displaced
/// by ±h and the scalar outputs differenced.
pub fn finite_difference_gradient<F: Real>(
    mut f: impl FnMut(&Tensor<F>) -> Result<F>,
    x: &Tensor<F>,
    h: f64,
) -> Result<Tensor<F>> {
    let step = F::f(h);
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe)?.as_f64();
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe)?.as_f64();
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = F::f((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Compare an analytic gradient against a numeric one. Elements whose
/// analytic magnitude is below [`SMALL_GRAD`] must agree absolutely within
/// that same bound; all others must agree to [`REL_TOL`] relative error.
pub fn compare_gradients<F: Real>(analytic: &Tensor<F>, numeric: &Tensor<F>) -> GradCompare {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shapes must match");
    let mut out = GradCompare { max_rel: 0.0, max_abs_small: 0.0, worst_index: 0, pass: true };
    for (i, (a, n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let a = a.as_f64();
        let n = n.as_f64();
        let abs = (a - n).abs();
        if a.abs() < SMALL_GRAD {
            if abs > out.max_abs_small {
                out.max_abs_small = abs;
                if abs > SMALL_GRAD {
                    out.worst_index = i;
                }
            }
        } else {
            let rel = abs / a.abs().max(n.abs());
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst_index = i;
            }
        }
    }
    out.pass = out.max_rel <= REL_TOL && out.max_abs_small <= SMALL_GRAD;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Fill, Pad, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn derivative_of_square_at_three() {
        let x = Tensor::new(&[1], vec![3.0f64]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, DEFAULT_STEP).unwrap();
        assert!((g.data()[0] - 6.0).abs() <= 1e-6);
    }

    #[test]
    fn compare_flags_mismatch() {
        let a = Tensor::new(&[2], vec![1.0f64, 2.0]).unwrap();
        let n = Tensor::new(&[2], vec![1.0f64, 2.1]).unwrap();
        let cmp = compare_gradients(&a, &n);
        assert!(!cmp.pass);
        assert_eq!(cmp.worst_index, 1);
    }

    #[test]
    fn compare_accepts_tiny_absolute_noise() {
        let a = Tensor::new(&[2], vec![0.0f64, 1.0]).unwrap();
        let n = Tensor::new(&[2], vec![5e-7f64, 1.0 + 5e-5]).unwrap();
        assert!(compare_gradients(&a, &n).pass);
    }

    /// Check one tape-built scalar function against finite differences on
    /// every one of its leaf inputs.
    fn check<F2>(build: F2, leaves: &[Tensor<f64>])
    where
        F2: Fn(&mut Tape<f64>, &[crate::tensor::ValueId]) -> crate::tensor::ValueId,
    {
        let eval = |perturbed: &[Tensor<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<_> = perturbed.iter().map(|t| tape.leaf(t.clone(), true)).collect();
            let loss = build(&mut tape, &ids);
            tape.data(loss)[0]
        };
        let mut tape = Tape::new();
        let ids: Vec<_> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss).unwrap();
        for (li, id) in ids.iter().enumerate() {
            let analytic = tape
                .grad_tensor(*id)
                .unwrap_or_else(|| Tensor::zeros(leaves[li].shape()));
            let numeric = finite_difference_gradient(
                |probe| {
                    let mut all = leaves.to_vec();
                    all[li] = probe.clone();
                    Ok(eval(&all))
                },
                &leaves[li],
                DEFAULT_STEP,
            )
            .unwrap();
            let cmp = compare_gradients(&analytic, &numeric);
            assert!(cmp.pass, "leaf {li}: {cmp}");
        }
    }

    fn rt(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let a = rt(&[2, 3], &mut r);
        let b = Tensor::from_fn(&[2, 3], |_| r.gen_range(0.5..1.5));
        check(
            |t, ids| {
                let s = t.add(ids[0], ids[1]).unwrap();
                let d = t.sub(s, ids[1]).unwrap();
                let m = t.mul(d, ids[0]).unwrap();
                let q = t.div(m, ids[1]).unwrap();
                let q = t.add_const(q, 0.3).unwrap();
                let q = t.mul_const(q, -1.7).unwrap();
                t.sum(q).unwrap()
            },
            &[a, b],
        );
    }

    #[test]
    fn activations_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        // Keep |x| away from 0 so relu/abs kinks and sqrt's pole stay clear
        // of the probe step.
        let x = Tensor::from_fn(&[2, 4], |_| {
            let v: f64 = r.gen_range(0.2..1.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        });
        check(
            |t, ids| {
                let a = t.relu(ids[0]).unwrap();
                let s = t.sigmoid(ids[0]).unwrap();
                let h = t.tanh(ids[0]).unwrap();
                let ab = t.abs(ids[0]).unwrap();
                let half = t.add_const(ab, 0.5).unwrap();
                let sq = t.sqrt(half).unwrap();
                let sum1 = t.add(a, s).unwrap();
                let sum2 = t.add(h, sq).unwrap();
                let all = t.add(sum1, sum2).unwrap();
                t.mean(all).unwrap()
            },
            &[x],
        );
    }

    #[test]
    fn matmul_and_bmm_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let a = rt(&[3, 4], &mut r);
        let b = rt(&[4, 2], &mut r);
        check(
            |t, ids| {
                let c = t.matmul(ids[0], ids[1]).unwrap();
                let s = t.sigmoid(c).unwrap();
                t.sum(s).unwrap()
            },
            &[a, b],
        );
        let a3 = rt(&[2, 3, 4], &mut r);
        let b3 = rt(&[2, 4, 2], &mut r);
        check(
            |t, ids| {
                let c = t.bmm(ids[0], ids[1]).unwrap();
                t.mean(c).unwrap()
            },
            &[a3, b3],
        );
    }

    #[test]
    fn softmax_and_layer_norm_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let x = rt(&[2, 5], &mut r);
        check(
            |t, ids| {
                let s = t.softmax_stable(ids[0], 1).unwrap();
                let w = t.mul(s, s).unwrap();
                t.sum(w).unwrap()
            },
            &[x.clone()],
        );
        let gamma = Tensor::from_fn(&[5], |_| r.gen_range(0.5..1.5));
        let beta = rt(&[5], &mut r);
        check(
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2]).unwrap();
                let y2 = t.mul(y, y).unwrap();
                t.mean(y2).unwrap()
            },
            &[x, gamma, beta],
        );
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(14);
        for pad in [Pad::Zero, Pad::Reflect] {
            let x = rt(&[1, 2, 4, 4], &mut r);
            let w = rt(&[2, 2, 3, 3], &mut r);
            let b = rt(&[2], &mut r);
            check(
                move |t, ids| {
                    let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, pad).unwrap();
                    let y = t.tanh(y).unwrap();
                    t.sum(y).unwrap()
                },
                &[x, w, b],
            );
        }
        // Depthwise.
        let x = rt(&[1, 3, 4, 4], &mut r);
        let w = rt(&[3, 1, 3, 3], &mut r);
        check(
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], None, 3, Pad::Reflect).unwrap();
                t.mean(y).unwrap()
            },
            &[x, w],
        );
    }

    #[test]
    fn conv_transpose_and_pooling_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(15);
        let x = rt(&[1, 2, 3, 3], &mut r);
        let w = rt(&[2, 3, 2, 2], &mut r);
        let b = rt(&[3], &mut r);
        check(
            |t, ids| {
                let y = t.conv_transpose2x2(ids[0], ids[1], Some(ids[2])).unwrap();
                let y = t.sigmoid(y).unwrap();
                t.sum(y).unwrap()
            },
            &[x, w, b],
        );
        let x2 = rt(&[1, 2, 4, 4], &mut r);
        check(
            |t, ids| {
                let p = t.avg_pool2(ids[0]).unwrap();
                let u = t.upsample_nearest2(p).unwrap();
                let m = t.mul(u, u).unwrap();
                t.sum(m).unwrap()
            },
            &[x2],
        );
    }

    #[test]
    fn broadcast_helpers_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(16);
        let x = rt(&[2, 3, 2, 2], &mut r);
        let bias = rt(&[3], &mut r);
        let per_sample = rt(&[2], &mut r);
        let per_chan = rt(&[2, 3], &mut r);
        let scalar = rt(&[1], &mut r);
        check(
            |t, ids| {
                let a = t.add_bias_channel(ids[0], ids[1]).unwrap();
                let b = t.scale_per_sample(a, ids[2]).unwrap();
                let c = t.scale_per_channel(b, ids[3]).unwrap();
                let d = t.add_per_channel(c, ids[3]).unwrap();
                let e = t.mul_scalar_param(d, ids[4]).unwrap();
                t.sum(e).unwrap()
            },
            &[x, bias, per_sample, per_chan, scalar],
        );
        let m = rt(&[3, 4], &mut r);
        let cb = rt(&[4], &mut r);
        check(
            |t, ids| {
                let y = t.add_bias_col(ids[0], ids[1]).unwrap();
                let y = t.tanh(y).unwrap();
                t.sum(y).unwrap()
            },
            &[m, cb],
        );
    }

    #[test]
    fn reorganization_ops_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let x = rt(&[2, 3, 4, 4], &mut r);
        check(
            |t, ids| {
                let p = t.patch_extract(ids[0], 2).unwrap();
                let q = t.permute(p, &[0, 2, 1]).unwrap();
                let rshp = t.reshape(q, &[2, 12, 2, 2]).unwrap();
                let s = t.slice_channels(rshp, 1, 5).unwrap();
                let g = t.gap(s).unwrap();
                let i = t.index_last(g, 2).unwrap();
                let sm = t.sum(i).unwrap();
                let m = t.mean_rows(g).unwrap();
                let ms = t.sum(m).unwrap();
                t.add(sm, ms).unwrap()
            },
            &[x],
        );
        let a = rt(&[3, 2], &mut r);
        let b = rt(&[3, 3], &mut r);
        check(
            |t, ids| {
                let c = t.concat_cols(&[ids[0], ids[1]]).unwrap();
                let s = t.sigmoid(c).unwrap();
                t.sum(s).unwrap()
            },
            &[a, b],
        );
    }

    #[test]
    fn shift_and_bilinear_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(18);
        let x = rt(&[1, 2, 4, 4], &mut r);
        for fill in [Fill::Zero, Fill::Clamp] {
            check(
                move |t, ids| {
                    let s = t.shift2d(ids[0], 1, -1, fill).unwrap();
                    let m = t.mul(s, s).unwrap();
                    t.sum(m).unwrap()
                },
                &[x.clone()],
            );
        }
        let img = rt(&[1, 2, 5, 5], &mut r);
        // Fractional parts well inside a cell so the probe cannot cross a
        // floor() boundary.
        let coords = Tensor::from_fn(&[1, 6, 2], |_| r.gen_range(0.3f64..3.7).round() + 0.4);
        check(
            |t, ids| {
                let s = t.bilinear_sample(ids[0], ids[1]).unwrap();
                let m = t.mul(s, s).unwrap();
                t.sum(m).unwrap()
            },
            &[img, coords],
        );
    }

    #[test]
    fn bce_with_logits_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(19);
        let z = rt(&[2, 6], &mut r);
        let target = Tensor::from_fn(&[2, 6], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
        let eval_target = target.clone();
        check(
            move |t, ids| {
                let tgt = t.constant(eval_target.clone());
                t.bce_with_logits(ids[0], tgt).unwrap()
            },
            &[z],
        );
    }

    #[test]
    fn composed_three_layer_network_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(20);
        let x = rt(&[2, 4], &mut r);
        let w1 = rt(&[4, 8], &mut r);
        let w2 = rt(&[8, 8], &mut r);
        let w3 = rt(&[8, 1], &mut r);
        check(
            |t, ids| {
                let h1 = t.matmul(ids[0], ids[1]).unwrap();
                let h1 = t.tanh(h1).unwrap();
                let h2 = t.matmul(h1, ids[2]).unwrap();
                let h2 = t.sigmoid(h2).unwrap();
                let h3 = t.matmul(h2, ids[3]).unwrap();
                t.mean(h3).unwrap()
            },
            &[x, w1, w2, w3],
        );
    }
}
