//! The mixture-of-experts adapter: a learned router softly blends the four
//! experts and the blend is added onto the frozen block's output.
//!
//! Each injected encoder layer owns an independent [`Router`] and
//! [`Experts`] bundle. The router maps global-average-pooled features to a
//! simplex weight per sample; [`fuse_experts`] forms the weighted sum of the
//! expert outputs; [`adapter_apply`] adds that residual to the block output
//! and reports the routing weights so training can regularize expert usage.
//! Expert columns are fixed in the order PIMDO, SPD, HPLSM, TGDS.

use rand_chacha::ChaCha8Rng;

use crate::experts::{Hplsm, Pimdo, Spd, Tgds};
use crate::tensor::{xavier_uniform, Graph, Module, Real, Tensor, ValueId};
use crate::{Error, Result};

/// Number of experts blended by every router.
pub const NUM_EXPERTS: usize = 4;
/// Width of the router's hidden layer.
pub const ROUTER_HIDDEN: usize = 16;

/// Two affine layers mapping pooled features to expert logits.
#[derive(Clone, Debug)]
pub struct Router<F: Real> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

impl<F: Real> Router<F> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Router {
            w1: xavier_uniform(&[channels, ROUTER_HIDDEN], channels, ROUTER_HIDDEN, rng),
            b1: Tensor::zeros(&[ROUTER_HIDDEN]),
            w2: xavier_uniform(&[ROUTER_HIDDEN, NUM_EXPERTS], ROUTER_HIDDEN, NUM_EXPERTS, rng),
            b2: Tensor::zeros(&[NUM_EXPERTS]),
        }
    }

    /// Pin the routing to softmax(logits) for every input; a logit of ±1000
    /// saturates its weight to exactly 1 or 0.
    pub fn force_logits(&mut self, logits: [f64; NUM_EXPERTS]) {
        self.w2.fill(F::zero());
        for (b, l) in self.b2.data_mut().iter_mut().zip(logits) {
            *b = F::f(l);
        }
    }
}

impl<F: Real> Module<F> for Router<F> {
    fn params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("w1".into(), &mut self.w1),
            ("b1".into(), &mut self.b1),
            ("w2".into(), &mut self.w2),
            ("b2".into(), &mut self.b2),
        ]
    }
}

/// One instance of each expert, all built for the same channel count.
#[derive(Clone, Debug)]
pub struct Experts<F: Real> {
    pub pimdo: Pimdo<F>,
    pub spd: Spd<F>,
    pub hplsm: Hplsm<F>,
    pub tgds: Tgds<F>,
}

impl<F: Real> Experts<F> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Experts {
            pimdo: Pimdo::new(rng),
            spd: Spd::new(rng),
            hplsm: Hplsm::new(channels, rng),
            tgds: Tgds::new(channels, rng),
        }
    }

    /// Zero every expert's output scale so the adapter residual vanishes.
    pub fn zero_output_scales(&mut self) {
        self.pimdo.out_scale.fill(F::zero());
        self.spd.out_scale.fill(F::zero());
        self.hplsm.out_scale.fill(F::zero());
        self.tgds.out_scale.fill(F::zero());
    }
}

impl<F: Real> Module<F> for Experts<F> {
    fn params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = Vec::new();
        for (child, m) in self.children() {
            for (n, t) in m.params() {
                v.push((format!("{child}.{n}"), t));
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v: Vec<(String, &mut Tensor<F>)> = Vec::new();
        for (n, t) in self.pimdo.params_mut() {
            v.push((format!("pimdo.{n}"), t));
        }
        for (n, t) in self.spd.params_mut() {
            v.push((format!("spd.{n}"), t));
        }
        for (n, t) in self.hplsm.params_mut() {
            v.push((format!("hplsm.{n}"), t));
        }
        for (n, t) in self.tgds.params_mut() {
            v.push((format!("tgds.{n}"), t));
        }
        v
    }
}

impl<F: Real> Experts<F> {
    fn children(&self) -> [(&'static str, &dyn Module<F>); NUM_EXPERTS] {
        [
            ("pimdo", &self.pimdo),
            ("spd", &self.spd),
            ("hplsm", &self.hplsm),
            ("tgds", &self.tgds),
        ]
    }
}

/// Router plus experts for one injected layer.
#[derive(Clone, Debug)]
pub struct LayerAdapter<F: Real> {
    pub router: Router<F>,
    pub experts: Experts<F>,
}

impl<F: Real> LayerAdapter<F> {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        LayerAdapter { router: Router::new(channels, rng), experts: Experts::new(channels, rng) }
    }
}

impl<F: Real> Module<F> for LayerAdapter<F> {
    fn params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v: Vec<(String, &Tensor<F>)> =
            self.router.params().into_iter().map(|(n, t)| (format!("router.{n}"), t)).collect();
        v.extend(self.experts.params());
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v: Vec<(String, &mut Tensor<F>)> =
            self.router.params_mut().into_iter().map(|(n, t)| (format!("router.{n}"), t)).collect();
        v.extend(self.experts.params_mut());
        v
    }
}

/// Independent adapters for a set of encoder layers, keyed by layer index.
#[derive(Clone, Debug)]
pub struct AdapterState<F: Real> {
    layers: Vec<(usize, LayerAdapter<F>)>,
    active: [bool; NUM_EXPERTS],
}

impl<F: Real> AdapterState<F> {
    /// One adapter per listed layer index; indices are deduplicated and
    /// kept sorted so parameter order is deterministic.
    pub fn new(channels: usize, injected_layers: &[usize], rng: &mut ChaCha8Rng) -> Self {
        Self::with_experts(channels, injected_layers, [true; NUM_EXPERTS], rng)
            .expect("all experts active")
    }

    /// Adapter restricted to a subset of experts (ablation arms); at least
    /// one expert must stay active.
    pub fn with_experts(
        channels: usize,
        injected_layers: &[usize],
        active: [bool; NUM_EXPERTS],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !active.iter().any(|a| *a) {
            return Err(Error::Contract("AdapterState: empty expert subset".into()));
        }
        let mut idx: Vec<usize> = injected_layers.to_vec();
        idx.sort_unstable();
        idx.dedup();
        let layers = idx.into_iter().map(|l| (l, LayerAdapter::new(channels, rng))).collect();
        Ok(AdapterState { layers, active })
    }

    pub fn active_experts(&self) -> [bool; NUM_EXPERTS] {
        self.active
    }

    pub fn injected_layers(&self) -> Vec<usize> {
        self.layers.iter().map(|(l, _)| *l).collect()
    }

    pub fn is_injected(&self, layer: usize) -> bool {
        self.layers.iter().any(|(l, _)| *l == layer)
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerAdapter<F>> {
        self.layers.iter().find(|(l, _)| *l == layer).map(|(_, a)| a)
    }

    pub fn layer_mut(&mut self, layer: usize) -> Option<&mut LayerAdapter<F>> {
        self.layers.iter_mut().find(|(l, _)| *l == layer).map(|(_, a)| a)
    }
}

impl<F: Real> Module<F> for AdapterState<F> {
    fn params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = Vec::new();
        for (l, a) in &self.layers {
            for (n, t) in a.params() {
                v.push((format!("layer{l}.{n}"), t));
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = Vec::new();
        for (l, a) in &mut self.layers {
            for (n, t) in a.params_mut() {
                v.push((format!("layer{l}.{n}"), t));
            }
        }
        v
    }
}

/// Routing weights produced by one [`adapter_apply`] call: the on-tape value
/// for loss terms plus an off-tape copy for statistics.
#[derive(Clone, Debug)]
pub struct RoutingRecord {
    pub layer: usize,
    pub weights_id: ValueId,
    pub weights: Vec<[f64; NUM_EXPERTS]>,
}

/// Logit bias applied to de-activated expert columns; large enough that the
/// softmax assigns them exactly zero.
const INACTIVE_LOGIT: f64 = -1e9;

fn router_logits<F: Real>(
    g: &mut Graph<F>,
    prefix: &str,
    x: ValueId,
    r: &Router<F>,
) -> Result<ValueId> {
    let s = g.tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != r.w1.shape()[0] {
        return Err(Error::Config(format!(
            "route_weights: input {:?} does not match router over {} channels",
            s,
            r.w1.shape()[0]
        )));
    }
    let w1 = g.param(&format!("{prefix}.w1"), &r.w1)?;
    let b1 = g.param(&format!("{prefix}.b1"), &r.b1)?;
    let w2 = g.param(&format!("{prefix}.w2"), &r.w2)?;
    let b2 = g.param(&format!("{prefix}.b2"), &r.b2)?;
    let t = &mut g.tape;
    let pooled = t.gap(x)?;
    let h = t.matmul(pooled, w1)?;
    let h = t.add_bias_col(h, b1)?;
    let h = t.relu(h)?;
    let logits = t.matmul(h, w2)?;
    t.add_bias_col(logits, b2)
}

/// Softmax(W2·relu(W1·GAP(x) + b1) + b2) per sample: (N, C, H, W) → (N, K).
pub fn route_weights<F: Real>(
    g: &mut Graph<F>,
    prefix: &str,
    x: ValueId,
    r: &Router<F>,
) -> Result<ValueId> {
    let logits = router_logits(g, prefix, x, r)?;
    g.tape.softmax_stable(logits, 1)
}

/// [`route_weights`] restricted to a subset of experts: inactive columns get
/// a large negative logit, so the softmax renormalizes over the active set
/// (with a single active expert its weight is exactly one). With every
/// expert active this is identical to [`route_weights`].
pub fn route_weights_masked<F: Real>(
    g: &mut Graph<F>,
    prefix: &str,
    x: ValueId,
    r: &Router<F>,
    active: &[bool; NUM_EXPERTS],
) -> Result<ValueId> {
    if !active.iter().any(|a| *a) {
        return Err(Error::Contract("route_weights_masked: no active experts".into()));
    }
    let mut logits = router_logits(g, prefix, x, r)?;
    if !active.iter().all(|a| *a) {
        let bias = Tensor::from_fn(&[NUM_EXPERTS], |i| {
            F::f(if active[i] { 0.0 } else { INACTIVE_LOGIT })
        });
        let bias = g.tape.constant(bias);
        logits = g.tape.add_bias_col(logits, bias)?;
    }
    g.tape.softmax_stable(logits, 1)
}

/// Weighted sum Σᵢ wᵢ·outsᵢ with per-sample weights w: (N, K) and K
/// same-shaped outputs whose leading dimension is N.
pub fn fuse_outputs<F: Real>(
    g: &mut Graph<F>,
    w: ValueId,
    outs: &[ValueId; NUM_EXPERTS],
) -> Result<ValueId> {
    let shape = g.tape.shape(outs[0]).to_vec();
    let n = shape[0];
    if g.tape.shape(w) != [n, NUM_EXPERTS] {
        return Err(Error::Contract(format!(
            "fuse_outputs: weights {:?} are not ({n}, {NUM_EXPERTS})",
            g.tape.shape(w)
        )));
    }
    let mut acc = None;
    for (i, &out) in outs.iter().enumerate() {
        if g.tape.shape(out) != shape.as_slice() {
            return Err(Error::Contract(format!(
                "fuse_outputs: expert {i} produced {:?}, expected {:?}",
                g.tape.shape(out),
                shape
            )));
        }
        let wi = g.tape.index_last(w, i)?;
        let term = g.tape.scale_per_sample(out, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.tape.add(a, term)?,
        });
    }
    Ok(acc.unwrap())
}

/// Run all four experts on `x` and blend them with the per-sample weights.
pub fn fuse_experts<F: Real>(
    g: &mut Graph<F>,
    prefix: &str,
    x: ValueId,
    w: ValueId,
    experts: &Experts<F>,
) -> Result<ValueId> {
    fuse_experts_active(g, prefix, x, w, experts, &[true; NUM_EXPERTS])
}

/// [`fuse_experts`] over a subset: inactive experts are skipped entirely and
/// contribute a zero map (their routing weight is already zero under
/// [`route_weights_masked`]).
pub fn fuse_experts_active<F: Real>(
    g: &mut Graph<F>,
    prefix: &str,
    x: ValueId,
    w: ValueId,
    experts: &Experts<F>,
    active: &[bool; NUM_EXPERTS],
) -> Result<ValueId> {
    let zeros = |g: &mut Graph<F>| {
        let s = g.tape.shape(x).to_vec();
        g.tape.constant(Tensor::zeros(&s))
    };
    let outs = [
        if active[0] { experts.pimdo.forward(g, &format!("{prefix}.pimdo"), x)? } else { zeros(g) },
        if active[1] { experts.spd.forward(g, &format!("{prefix}.spd"), x)? } else { zeros(g) },
        if active[2] { experts.hplsm.forward(g, &format!("{prefix}.hplsm"), x)? } else { zeros(g) },
        if active[3] {
            experts.tgds.forward(g, &format!("{prefix}.tgds"), x)?.0
        } else {
            zeros(g)
        },
    ];
    fuse_outputs(g, w, &outs)
}

/// Residual adapter step for one injected layer:
/// `block_out + fuse_experts(x_in, route_weights(x_in))`, plus the routing
/// weights for that batch. Parameters bind under `layer{l}.router.*` and
/// `layer{l}.{pimdo,spd,hplsm,tgds}.*`, matching checkpoint block names.
pub fn adapter_apply<F: Real>(
    g: &mut Graph<F>,
    block_out: ValueId,
    x_in: ValueId,
    layer: usize,
    a: &AdapterState<F>,
) -> Result<(ValueId, RoutingRecord)> {
    let la = a.layer(layer).ok_or_else(|| {
        Error::Contract(format!(
            "adapter_apply: layer {layer} is not injected (injected: {:?})",
            a.injected_layers()
        ))
    })?;
    let p = format!("layer{layer}");
    let w = route_weights_masked(g, &format!("{p}.router"), x_in, &la.router, &a.active)?;
    let fused = fuse_experts_active(g, &p, x_in, w, &la.experts, &a.active)?;
    let out = g.tape.add(block_out, fused)?;
    let weights = g
        .tape
        .data(w)
        .chunks(NUM_EXPERTS)
        .map(|row| {
            let mut v = [0.0; NUM_EXPERTS];
            for (d, s) in v.iter_mut().zip(row) {
                *d = s.as_f64();
            }
            v
        })
        .collect();
    Ok((out, RoutingRecord { layer, weights_id: w, weights }))
}

/// Selection frequency f (argmax counts, ties to the lowest index) and mean
/// probability P over every sample in the given records.
pub fn accumulate_routing_stats(
    records: &[RoutingRecord],
) -> Result<([f64; NUM_EXPERTS], [f64; NUM_EXPERTS])> {
    let total: usize = records.iter().map(|r| r.weights.len()).sum();
    if total == 0 {
        return Err(Error::Contract("accumulate_routing_stats: no routing records".into()));
    }
    let mut counts = [0usize; NUM_EXPERTS];
    let mut sums = [0.0; NUM_EXPERTS];
    for rec in records {
        for row in &rec.weights {
            let mut best = 0;
            for i in 1..NUM_EXPERTS {
                if row[i] > row[best] {
                    best = i;
                }
            }
            counts[best] += 1;
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    let f = counts.map(|c| c as f64 / total as f64);
    let p = sums.map(|s| s / total as f64);
    Ok((f, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::test_support::{gradcheck_module, random_input};
    use crate::tensor::max_abs_diff;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn route(r: &Router<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new(false);
        let xid = g.input(x.clone());
        let w = route_weights(&mut g, "router", xid, r).unwrap();
        Tensor::new(g.tape.shape(w), g.tape.data(w).to_vec()).unwrap()
    }

    #[test]
    fn zero_logit_router_is_exactly_uniform() {
        let mut r = Router::<f64>::new(4, &mut rng(200));
        r.force_logits([0.0; 4]);
        let w = route(&r, &random_input(&[3, 4, 6, 6], 201));
        assert!(w.data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn biased_router_matches_exp_normalize_oracle() {
        let mut r = Router::<f64>::new(4, &mut rng(202));
        r.force_logits([10.0, 0.0, 0.0, 0.0]);
        let w = route(&r, &random_input(&[2, 4, 5, 5], 203));
        // Independent evaluation: shift by the max logit, exponentiate,
        // normalize.
        let e = [1.0f64, (-10.0f64).exp(), (-10.0f64).exp(), (-10.0f64).exp()];
        let z: f64 = e.iter().sum();
        for row in w.data().chunks(4) {
            for (got, exp) in row.iter().zip(e) {
                assert!((got - exp / z).abs() <= 1e-12);
            }
        }
        assert!(w.data()[0] > 0.9998 && w.data()[0] < 0.9999);
    }

    #[test]
    fn identical_samples_route_identically() {
        let r = Router::<f64>::new(4, &mut rng(204));
        let one = random_input(&[1, 4, 6, 6], 205);
        let mut both = Tensor::zeros(&[2, 4, 6, 6]);
        both.data_mut()[..144].copy_from_slice(one.data());
        both.data_mut()[144..].copy_from_slice(one.data());
        let w = route(&r, &both);
        assert_eq!(&w.data()[..4], &w.data()[4..]);
    }

    #[test]
    fn route_weights_rejects_channel_mismatch() {
        let r = Router::<f64>::new(8, &mut rng(206));
        let mut g = Graph::<f64>::new(false);
        let x = g.input(random_input(&[1, 4, 6, 6], 207));
        assert!(matches!(route_weights(&mut g, "router", x, &r), Err(Error::Config(_))));
    }

    #[test]
    fn routing_weights_lie_on_the_simplex() {
        for seed in 210..230 {
            let r = Router::<f64>::new(4, &mut rng(seed));
            let w = route(&r, &random_input(&[5, 4, 6, 6], seed + 1000));
            assert!(w.data().iter().all(|v| *v >= 0.0));
            for row in w.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }

    fn one_hot_rows(n: usize, hot: usize) -> Tensor<f64> {
        let mut w = Tensor::zeros(&[n, NUM_EXPERTS]);
        for s in 0..n {
            w.data_mut()[s * NUM_EXPERTS + hot] = 1.0;
        }
        w
    }

    #[test]
    fn one_hot_fusion_selects_a_single_expert() {
        let experts = Experts::<f64>::new(4, &mut rng(231));
        let x = random_input(&[2, 4, 8, 8], 232);
        for hot in 0..NUM_EXPERTS {
            let mut g = Graph::new(false);
            let xid = g.input(x.clone());
            let w = g.input(one_hot_rows(2, hot));
            let fused = fuse_experts(&mut g, "a", xid, w, &experts).unwrap();
            let fused = g.tape.data(fused).to_vec();

            let mut solo = Graph::new(false);
            let xid = solo.input(x.clone());
            let want = match hot {
                0 => experts.pimdo.forward(&mut solo, "e", xid).unwrap(),
                1 => experts.spd.forward(&mut solo, "e", xid).unwrap(),
                2 => experts.hplsm.forward(&mut solo, "e", xid).unwrap(),
                _ => experts.tgds.forward(&mut solo, "e", xid).unwrap().0,
            };
            let want = solo.tape.data(want);
            assert!(fused.iter().zip(want).all(|(a, b)| a == b));
        }
    }

    #[test]
    fn fusion_matches_independent_accumulation() {
        let mut g = Graph::<f64>::new(false);
        let outs_t: Vec<Tensor<f64>> =
            (0..4).map(|i| random_input(&[3, 2, 4, 4], 240 + i)).collect();
        let w_t = random_input(&[3, 4], 245);
        let outs = [
            g.input(outs_t[0].clone()),
            g.input(outs_t[1].clone()),
            g.input(outs_t[2].clone()),
            g.input(outs_t[3].clone()),
        ];
        let w = g.input(w_t.clone());
        let fused = fuse_outputs(&mut g, w, &outs).unwrap();
        let got = g.tape.data(fused);
        let plane = 2 * 4 * 4;
        for s in 0..3 {
            for p in 0..plane {
                let mut want = 0.0;
                for i in 0..4 {
                    want += w_t.data()[s * 4 + i] * outs_t[i].data()[s * plane + p];
                }
                assert!((got[s * plane + p] - want).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn fusion_is_linear_in_the_weights() {
        let outs_t: Vec<Tensor<f64>> =
            (0..4).map(|i| random_input(&[2, 3, 5, 5], 250 + i)).collect();
        let w1 = random_input(&[2, 4], 255);
        let w2 = random_input(&[2, 4], 256);
        let alpha = 0.3;
        let fuse = |w: &Tensor<f64>| -> Vec<f64> {
            let mut g = Graph::<f64>::new(false);
            let outs = [
                g.input(outs_t[0].clone()),
                g.input(outs_t[1].clone()),
                g.input(outs_t[2].clone()),
                g.input(outs_t[3].clone()),
            ];
            let wid = g.input(w.clone());
            let f = fuse_outputs(&mut g, wid, &outs).unwrap();
            g.tape.data(f).to_vec()
        };
        let mixed = Tensor::from_fn(&[2, 4], |i| alpha * w1.data()[i] + (1.0 - alpha) * w2.data()[i]);
        let lhs = fuse(&mixed);
        let (f1, f2) = (fuse(&w1), fuse(&w2));
        for (l, (a, b)) in lhs.iter().zip(f1.iter().zip(f2)) {
            assert!((l - (alpha * a + (1.0 - alpha) * b)).abs() <= 1e-9);
        }
    }

    #[test]
    fn fusion_rejects_mismatched_shapes() {
        let mut g = Graph::<f64>::new(false);
        let good = g.input(random_input(&[2, 3, 4, 4], 260));
        let bad = g.input(random_input(&[2, 3, 4, 5], 261));
        let w = g.input(random_input(&[2, 4], 262));
        assert!(matches!(
            fuse_outputs(&mut g, w, &[good, good, bad, good]),
            Err(Error::Contract(_))
        ));
        let w_bad = g.input(random_input(&[2, 3], 263));
        assert!(matches!(
            fuse_outputs(&mut g, w_bad, &[good, good, good, good]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zeroed_experts_leave_block_output_unchanged() {
        let mut a = AdapterState::<f64>::new(4, &[2, 3], &mut rng(270));
        a.layer_mut(2).unwrap().experts.zero_output_scales();
        let mut g = Graph::new(false);
        let block_out = random_input(&[2, 4, 6, 6], 271);
        let bid = g.input(block_out.clone());
        let xid = g.input(random_input(&[2, 4, 6, 6], 272));
        let (out, rec) = adapter_apply(&mut g, bid, xid, 2, &a).unwrap();
        assert!(g.tape.data(out).iter().zip(block_out.data()).all(|(a, b)| a == b));
        assert_eq!(rec.layer, 2);
        assert_eq!(rec.weights.len(), 2);
    }

    #[test]
    fn saturated_router_reduces_to_one_expert_plus_residual() {
        let mut a = AdapterState::<f64>::new(4, &[3], &mut rng(273));
        a.layer_mut(3).unwrap().router.force_logits([-1000.0, 1000.0, -1000.0, -1000.0]);
        let block_out = random_input(&[1, 4, 8, 8], 274);
        let x = random_input(&[1, 4, 8, 8], 275);

        let mut g = Graph::new(false);
        let bid = g.input(block_out.clone());
        let xid = g.input(x.clone());
        let (out, rec) = adapter_apply(&mut g, bid, xid, 3, &a).unwrap();
        assert_eq!(rec.weights[0], [0.0, 1.0, 0.0, 0.0]);

        let mut solo = Graph::new(false);
        let xid = solo.input(x);
        let spd_out = a.layer(3).unwrap().experts.spd.forward(&mut solo, "e", xid).unwrap();
        let want: Vec<f64> = solo
            .tape
            .data(spd_out)
            .iter()
            .zip(block_out.data())
            .map(|(e, b)| e + b)
            .collect();
        assert!(g.tape.data(out).iter().zip(&want).all(|(a, b)| a == b));
    }

    #[test]
    fn adapter_apply_matches_manual_composition() {
        let a = AdapterState::<f64>::new(4, &[2, 3], &mut rng(276));
        let block_out = random_input(&[2, 4, 8, 8], 277);
        let x = random_input(&[2, 4, 8, 8], 278);

        let mut g = Graph::new(false);
        let bid = g.input(block_out.clone());
        let xid = g.input(x.clone());
        let (out, rec) = adapter_apply(&mut g, bid, xid, 3, &a).unwrap();
        let got = Tensor::new(g.tape.shape(out), g.tape.data(out).to_vec()).unwrap();

        let mut m = Graph::new(false);
        let bid = m.input(block_out);
        let xid = m.input(x);
        let la = a.layer(3).unwrap();
        let w = route_weights(&mut m, "r", xid, &la.router).unwrap();
        let fused = fuse_experts(&mut m, "e", xid, w, &la.experts).unwrap();
        let want = m.tape.add(bid, fused).unwrap();
        assert!(max_abs_diff(&got, &Tensor::new(m.tape.shape(want), m.tape.data(want).to_vec()).unwrap()) <= 1e-12);
        for (row, chunk) in rec.weights.iter().zip(m.tape.data(w).chunks(4)) {
            assert!(row.iter().zip(chunk).all(|(a, b)| a == b));
        }
    }

    #[test]
    fn adapter_apply_rejects_uninjected_layer() {
        let a = AdapterState::<f64>::new(4, &[2, 3], &mut rng(279));
        let mut g = Graph::new(false);
        let b = g.input(random_input(&[1, 4, 6, 6], 280));
        let x = g.input(random_input(&[1, 4, 6, 6], 281));
        assert!(matches!(adapter_apply(&mut g, b, x, 0, &a), Err(Error::Contract(_))));
    }

    fn record(weights: Vec<[f64; 4]>) -> RoutingRecord {
        let mut t = crate::tensor::Tape::<f64>::new();
        let id = t.constant(Tensor::zeros(&[1]));
        RoutingRecord { layer: 0, weights_id: id, weights }
    }

    #[test]
    fn uniform_routing_ties_break_to_the_lowest_index() {
        let (f, p) = accumulate_routing_stats(&[record(vec![[0.25; 4]; 6])]).unwrap();
        assert_eq!(f, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p, [0.25; 4]);
    }

    #[test]
    fn one_hot_routing_concentrates_both_statistics() {
        let rows = vec![[0.0, 0.0, 1.0, 0.0]; 5];
        let (f, p) = accumulate_routing_stats(&[record(rows)]).unwrap();
        assert_eq!(f, [0.0, 0.0, 1.0, 0.0]);
        assert_eq!(p, [0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn mixed_batch_statistics_match_hand_enumeration() {
        let rows = [
            [0.70, 0.10, 0.10, 0.10],
            [0.10, 0.60, 0.20, 0.10],
            [0.25, 0.25, 0.25, 0.25],
            [0.05, 0.05, 0.30, 0.60],
        ];
        // Same four samples, split across two records from different layers.
        let recs = [record(rows[..1].to_vec()), record(rows[1..].to_vec())];
        let (f, p) = accumulate_routing_stats(&recs).unwrap();
        assert_eq!(f, [0.5, 0.25, 0.0, 0.25]);
        for i in 0..4 {
            let want = rows.iter().map(|r| r[i]).sum::<f64>() / 4.0;
            assert!((p[i] - want).abs() <= 1e-15);
        }
    }

    #[test]
    fn empty_record_list_is_rejected() {
        assert!(matches!(accumulate_routing_stats(&[]), Err(Error::Contract(_))));
        assert!(matches!(accumulate_routing_stats(&[record(vec![])]), Err(Error::Contract(_))));
    }

    #[test]
    fn statistics_sum_to_one() {
        for seed in 285..290 {
            let mut r = rng(seed);
            let router = Router::<f64>::new(4, &mut r);
            let w = route(&router, &random_input(&[7, 4, 6, 6], seed + 50));
            let rows: Vec<[f64; 4]> = w
                .data()
                .chunks(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect();
            let (f, p) = accumulate_routing_stats(&[record(rows)]).unwrap();
            assert!((f.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn router_gradients_flow_through_the_fused_output() {
        let a = AdapterState::<f64>::new(4, &[3], &mut rng(291));
        let mut g = Graph::new(true);
        let b = g.input(random_input(&[2, 4, 8, 8], 292));
        let x = g.input(random_input(&[2, 4, 8, 8], 293));
        let (out, _) = adapter_apply(&mut g, b, x, 3, &a).unwrap();
        let probe = g.input(random_input(&[2, 4, 8, 8], 294));
        let prod = g.tape.mul(out, probe).unwrap();
        let loss = g.tape.mean(prod).unwrap();
        g.backward(loss).unwrap();
        let gw2 = g.grad_of("layer3.router.w2").unwrap();
        assert!(gw2.iter().any(|v| *v != 0.0));
        let gb2 = g.grad_of("layer3.router.b2").unwrap();
        assert!(gb2.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn router_parameter_gradients_match_finite_differences() {
        for seed in 295..298 {
            let mut r = rng(seed);
            let experts = Experts::<f64>::new(4, &mut r);
            let router = Router::<f64>::new(4, &mut r);
            let x = random_input(&[1, 4, 8, 8], seed + 40);
            gradcheck_module(&router, &x, seed, "r", |g, m, xid| {
                let w = route_weights(g, "r", xid, m)?;
                fuse_experts(g, "e", xid, w, &experts)
            });
        }
    }

    #[test]
    fn parameter_names_follow_the_checkpoint_layout() {
        let a = AdapterState::<f64>::new(4, &[2, 3], &mut rng(299));
        let names: Vec<String> = a.params().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"layer2.router.w1".to_string()));
        assert!(names.contains(&"layer2.pimdo.ctrl1_w".to_string()));
        assert!(names.contains(&"layer3.spd.analysis_w".to_string()));
        assert!(names.contains(&"layer3.tgds.mix_w".to_string()));
        assert!(names.contains(&"layer3.hplsm.base_w".to_string()));
        let unique: std::collections::HashSet<&String> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn single_expert_subsets_route_all_weight_to_that_expert() {
        let r = Router::<f64>::new(4, &mut rng(300));
        let x = random_input(&[3, 4, 6, 6], 301);
        for k in 0..NUM_EXPERTS {
            let mut active = [false; NUM_EXPERTS];
            active[k] = true;
            let mut g = Graph::<f64>::new(false);
            let xid = g.input(x.clone());
            let w = route_weights_masked(&mut g, "r", xid, &r, &active).unwrap();
            for row in g.tape.data(w).chunks(NUM_EXPERTS) {
                for (i, v) in row.iter().enumerate() {
                    assert_eq!(*v, if i == k { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn partial_subsets_renormalize_over_the_active_experts() {
        let r = Router::<f64>::new(4, &mut rng(302));
        let x = random_input(&[2, 4, 6, 6], 303);
        let active = [false, true, false, true];
        let mut g = Graph::<f64>::new(false);
        let xid = g.input(x.clone());
        let full = route_weights(&mut g, "full", xid, &r).unwrap();
        let masked = route_weights_masked(&mut g, "masked", xid, &r, &active).unwrap();
        let full = g.tape.data(full).to_vec();
        let got = g.tape.data(masked).to_vec();
        for (frow, grow) in full.chunks(4).zip(got.chunks(4)) {
            assert_eq!(grow[0], 0.0);
            assert_eq!(grow[2], 0.0);
            let z = frow[1] + frow[3];
            assert!((grow[1] - frow[1] / z).abs() <= 1e-12);
            assert!((grow[3] - frow[3] / z).abs() <= 1e-12);
        }
    }

    #[test]
    fn all_active_masked_routing_equals_the_unmasked_path() {
        let r = Router::<f64>::new(4, &mut rng(304));
        let x = random_input(&[2, 4, 5, 5], 305);
        let mut g = Graph::<f64>::new(false);
        let xid = g.input(x.clone());
        let a = route_weights(&mut g, "a", xid, &r).unwrap();
        let b = route_weights_masked(&mut g, "b", xid, &r, &[true; 4]).unwrap();
        assert_eq!(g.tape.data(a), g.tape.data(b));
    }

    #[test]
    fn subset_adapters_only_consult_active_experts() {
        let mut r = rng(306);
        let a =
            AdapterState::<f64>::with_experts(4, &[3], [false, false, true, false], &mut r).unwrap();
        let x = random_input(&[2, 4, 6, 6], 307);
        let mut g = Graph::<f64>::new(false);
        let xid = g.input(x.clone());
        let block = g.input(x.clone());
        let (out, rec) = adapter_apply(&mut g, block, xid, 3, &a).unwrap();
        for row in &rec.weights {
            assert_eq!(*row, [0.0, 0.0, 1.0, 0.0]);
        }
        // Output equals block + hplsm(x) computed in isolation.
        let la = a.layer(3).unwrap();
        let mut g2 = Graph::<f64>::new(false);
        let xid2 = g2.input(x.clone());
        let block2 = g2.input(x.clone());
        let h = la.experts.hplsm.forward(&mut g2, "h", xid2).unwrap();
        let want = g2.tape.add(block2, h).unwrap();
        for (a, b) in g.tape.data(out).iter().zip(g2.tape.data(want)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn empty_expert_subsets_are_rejected() {
        let err = AdapterState::<f64>::with_experts(4, &[3], [false; 4], &mut rng(308));
        assert!(matches!(err, Err(Error::Contract(_))));
        let r = Router::<f64>::new(4, &mut rng(309));
        let mut g = Graph::<f64>::new(false);
        let x = g.input(random_input(&[1, 4, 5, 5], 310));
        assert!(matches!(
            route_weights_masked(&mut g, "r", x, &r, &[false; 4]),
            Err(Error::Contract(_))
        ));
    }
}
