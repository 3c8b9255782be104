//! Training objectives: pixel losses (BCE, Dice), the routing sparsity
//! penalty, the topology smoothness penalty, and the stage totals.
//!
//! Component values in a [`LossBreakdown`] are the weighted contributions
//! λ·L, so they always sum to the total exactly; raw component values are
//! recovered by dividing by the corresponding weight.

use crate::adapter::{accumulate_routing_stats, RoutingRecord, NUM_EXPERTS};
use crate::tensor::{Fill, Graph, Real, Tensor, ValueId};
use crate::{Error, Result};

/// Mixing weights for every loss term plus the Dice smoothing constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub lambda_sparse: f64,
    pub lambda_topo: f64,
    pub alpha_sparse: f64,
    pub dice_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_bce: 1.0,
            lambda_dice: 1.0,
            lambda_sparse: 0.01,
            lambda_topo: 0.1,
            alpha_sparse: 1.0,
            dice_smooth: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("lambda_bce", self.lambda_bce),
            ("lambda_dice", self.lambda_dice),
            ("lambda_sparse", self.lambda_sparse),
            ("lambda_topo", self.lambda_topo),
            ("alpha_sparse", self.alpha_sparse),
            ("dice_smooth", self.dice_smooth),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} is negative")));
            }
        }
        Ok(())
    }
}

/// Weighted contributions of each term; `total` is their exact sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub sparse: f64,
    pub topo: f64,
}

fn scalar_of<F: Real>(g: &Graph<F>, id: ValueId) -> f64 {
    g.tape.data(id)[0].as_f64()
}

/// Mean binary cross-entropy on logits; the target must be exactly {0, 1}.
pub fn bce_loss<F: Real>(g: &mut Graph<F>, logits: ValueId, target: ValueId) -> Result<ValueId> {
    for v in g.tape.data(target) {
        let v = v.as_f64();
        if v != 0.0 && v != 1.0 {
            return Err(Error::Contract(format!("bce_loss: target value {v} is not 0 or 1")));
        }
    }
    g.tape.bce_with_logits(logits, target)
}

/// Dice loss from an already-sigmoided probability map.
pub fn dice_from_prob<F: Real>(
    g: &mut Graph<F>,
    prob: ValueId,
    target: ValueId,
    smooth: f64,
) -> Result<ValueId> {
    if g.tape.shape(prob) != g.tape.shape(target) {
        return Err(Error::Dimension(format!(
            "dice: prob {:?} vs target {:?}",
            g.tape.shape(prob),
            g.tape.shape(target)
        )));
    }
    let t = &mut g.tape;
    let pt = t.mul(prob, target)?;
    let inter = t.sum(pt)?;
    let num = t.mul_const(inter, F::f(2.0))?;
    let num = t.add_const(num, F::f(smooth))?;
    let sp = t.sum(prob)?;
    let st = t.sum(target)?;
    let den = t.add(sp, st)?;
    let den = t.add_const(den, F::f(smooth))?;
    let ratio = t.div(num, den)?;
    let neg = t.mul_const(ratio, F::f(-1.0))?;
    t.add_const(neg, F::f(1.0))
}

/// Dice loss on logits: 1 − (2·Σσ(z)t + s) / (Σσ(z) + Σt + s).
pub fn dice_loss<F: Real>(
    g: &mut Graph<F>,
    logits: ValueId,
    target: ValueId,
    smooth: f64,
) -> Result<ValueId> {
    let prob = g.tape.sigmoid(logits)?;
    dice_from_prob(g, prob, target, smooth)
}

fn check_simplex(name: &str, v: &[f64; NUM_EXPERTS]) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|x| *x < -1e-6) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!("sparse_loss: {name} = {v:?} is off the simplex")));
    }
    Ok(())
}

/// α·K·Σᵢ fᵢ·Pᵢ from plain vectors.
pub fn sparse_loss(f: &[f64; NUM_EXPERTS], p: &[f64; NUM_EXPERTS], alpha: f64) -> Result<f64> {
    check_simplex("f", f)?;
    check_simplex("P", p)?;
    let dot: f64 = f.iter().zip(p).map(|(a, b)| a * b).sum();
    Ok(alpha * NUM_EXPERTS as f64 * dot)
}

/// α·K·Σᵢ fᵢ·Pᵢ with the frequency vector f held constant and the mean
/// probability P differentiable on the tape.
pub fn sparse_loss_on_tape<F: Real>(
    g: &mut Graph<F>,
    f: &[f64; NUM_EXPERTS],
    p: ValueId,
    alpha: f64,
) -> Result<ValueId> {
    if g.tape.shape(p) != [NUM_EXPERTS] {
        return Err(Error::Dimension(format!(
            "sparse_loss: P {:?} is not a {NUM_EXPERTS}-vector",
            g.tape.shape(p)
        )));
    }
    check_simplex("f", f)?;
    let mut pv = [0.0; NUM_EXPERTS];
    for (d, s) in pv.iter_mut().zip(g.tape.data(p)) {
        *d = s.as_f64();
    }
    check_simplex("P", &pv)?;
    let scale = alpha * NUM_EXPERTS as f64;
    let fc = Tensor::from_fn(&[NUM_EXPERTS], |i| F::f(f[i] * scale));
    let fc = g.tape.constant(fc);
    let prod = g.tape.mul(p, fc)?;
    g.tape.sum(prod)
}

/// Selection frequencies (off-tape) and mean routing probability (on-tape)
/// for a batch of records; every record must cover the same sample count so
/// the mean of per-record means is the global mean.
pub fn routing_sparsity_inputs<F: Real>(
    g: &mut Graph<F>,
    records: &[RoutingRecord],
) -> Result<([f64; NUM_EXPERTS], ValueId)> {
    let (f, _) = accumulate_routing_stats(records)?;
    if records.iter().any(|r| r.weights.len() != records[0].weights.len()) {
        return Err(Error::Contract(
            "routing_sparsity_inputs: records cover different sample counts".into(),
        ));
    }
    let mut acc = None;
    for r in records {
        let m = g.tape.mean_rows(r.weights_id)?;
        acc = Some(match acc {
            None => m,
            Some(a) => g.tape.add(a, m)?,
        });
    }
    let p = g.tape.mul_const(acc.unwrap(), F::f(1.0 / records.len() as f64))?;
    Ok((f, p))
}

/// Mean absolute difference between each pixel of a probability map and the
/// mean of its available 4-neighbors (2 at corners, 3 on edges).
pub fn topo_loss<F: Real>(g: &mut Graph<F>, prob: ValueId) -> Result<ValueId> {
    let s = g.tape.shape(prob).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::Dimension(format!("topo_loss: {:?} is not (N, 1, H, W)", s)));
    }
    let (h, w) = (s[2], s[3]);
    let t = &mut g.tape;
    let mut nb = t.shift2d(prob, -1, 0, Fill::Zero)?;
    for (dy, dx) in [(1isize, 0isize), (0, -1), (0, 1)] {
        let n = t.shift2d(prob, dy, dx, Fill::Zero)?;
        nb = t.add(nb, n)?;
    }
    let counts = Tensor::from_fn(&s, |idx| {
        let i = (idx / w) % h;
        let j = idx % w;
        let c = (i > 0) as usize + (i + 1 < h) as usize + (j > 0) as usize + (j + 1 < w) as usize;
        F::f(c as f64)
    });
    let counts = t.constant(counts);
    let mean_nb = t.div(nb, counts)?;
    let diff = t.sub(prob, mean_nb)?;
    let adiff = t.abs(diff)?;
    t.mean(adiff)
}

fn weighted_sum<F: Real>(g: &mut Graph<F>, terms: &[(ValueId, f64)]) -> Result<ValueId> {
    let mut acc = None;
    for &(id, lambda) in terms {
        let scaled = g.tape.mul_const(id, F::f(lambda))?;
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.tape.add(a, scaled)?,
        });
    }
    Ok(acc.unwrap())
}

/// Stage One objective: λ_bce·BCE + λ_dice·Dice + λ_sparse·L_sparse +
/// λ_topo·L_topo. `routing` carries (f, on-tape P); pass `None` when no
/// adapter is active and the sparsity term vanishes.
pub fn total_loss_stage1<F: Real>(
    g: &mut Graph<F>,
    logits: ValueId,
    target: ValueId,
    routing: Option<(&[f64; NUM_EXPERTS], ValueId)>,
    w: &LossWeights,
) -> Result<(ValueId, LossBreakdown)> {
    w.validate()?;
    let bce = bce_loss(g, logits, target)?;
    let prob = g.tape.sigmoid(logits)?;
    let dice = dice_from_prob(g, prob, target, w.dice_smooth)?;
    let topo = topo_loss(g, prob)?;
    let mut terms = vec![(bce, w.lambda_bce), (dice, w.lambda_dice), (topo, w.lambda_topo)];
    let mut sparse_part = 0.0;
    if let Some((f, p)) = routing {
        let sparse = sparse_loss_on_tape(g, f, p, w.alpha_sparse)?;
        sparse_part = w.lambda_sparse * scalar_of(g, sparse);
        terms.push((sparse, w.lambda_sparse));
    }
    let total = weighted_sum(g, &terms)?;
    let parts = LossBreakdown {
        total: scalar_of(g, total),
        bce: w.lambda_bce * scalar_of(g, bce),
        dice: w.lambda_dice * scalar_of(g, dice),
        sparse: sparse_part,
        topo: w.lambda_topo * scalar_of(g, topo),
    };
    Ok((total, parts))
}

/// Stage Two objective against pseudo-labels: λ_bce·BCE + λ_dice·Dice only.
pub fn total_loss_stage2<F: Real>(
    g: &mut Graph<F>,
    logits: ValueId,
    pseudo_target: ValueId,
    w: &LossWeights,
) -> Result<(ValueId, LossBreakdown)> {
    w.validate()?;
    let bce = bce_loss(g, logits, pseudo_target)?;
    let dice = dice_loss(g, logits, pseudo_target, w.dice_smooth)?;
    let total = weighted_sum(g, &[(bce, w.lambda_bce), (dice, w.lambda_dice)])?;
    let parts = LossBreakdown {
        total: scalar_of(g, total),
        bce: w.lambda_bce * scalar_of(g, bce),
        dice: w.lambda_dice * scalar_of(g, dice),
        sparse: 0.0,
        topo: 0.0,
    };
    Ok((total, parts))
}
