//! The frozen transformer encoder, the trainable mask decoder, and the
//! lightweight student network.
//!
//! The encoder is a small vision transformer: 4×4 patches projected to 32
//! channels, a learned (but frozen) positional table, and four pre-norm
//! blocks of 2-head self-attention plus a 2-layer MLP. Every encoder weight
//! binds as frozen, so gradients flow through it into adapter parameters
//! without ever reaching Φ. The decoder upsamples the token grid back to
//! image resolution with two stride-2 transposed convolutions and a 1×1
//! head. The student is a from-scratch encoder–decoder with three
//! downsampling and three upsampling stages at a constant width of 16,
//! built from depthwise-separable convolutions to honor the parameter
//! budget of less than 5% of the encoder's.

use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::adapter::{adapter_apply, AdapterState, RoutingRecord};
use crate::tensor::{kaiming_uniform, uniform_init, xavier_uniform, Graph, Module, Pad, Real, Tensor, ValueId};
use crate::{Error, Result};

/// Patch side length of the encoder's patch embedding.
pub const PATCH: usize = 4;
/// Token channel width of the encoder.
pub const CHANNELS: usize = 32;
/// Number of transformer blocks.
pub const BLOCKS: usize = 4;
/// Attention heads per block.
pub const HEADS: usize = 2;
/// Hidden width of each block's MLP.
pub const MLP_HIDDEN: usize = 128;
/// Image side the encoder is built for; fixes the positional table size.
pub const IMAGE_SIDE: usize = 64;
/// Token count for [`IMAGE_SIDE`]² inputs.
pub const TOKENS: usize = (IMAGE_SIDE / PATCH) * (IMAGE_SIDE / PATCH);
/// Width of every student stage.
pub const STUDENT_WIDTH: usize = 16;

/// The two encoder layers that receive adapters by default: the last two.
pub fn default_injected_layers() -> Vec<usize> {
    vec![BLOCKS - 2, BLOCKS - 1]
}

/// Hex SHA-256 of named tensors: names and values (as little-endian f64
/// bytes) in order.
pub fn param_digest<F: Real>(params: &[(String, &Tensor<F>)]) -> String {
    let mut h = Sha256::new();
    for (n, t) in params {
        h.update(n.as_bytes());
        h.update([0u8]);
        for v in t.data() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

/// Hex SHA-256 of a value slice (little-endian f64 bytes).
pub fn value_digest<F: Real>(values: &[F]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.as_f64().to_le_bytes());
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn int_sqrt(n: usize) -> Option<usize> {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    (r * r == n).then_some(r)
}

/// (N, L, C) tokens → (N, C, √L, √L) grid; L must be a perfect square.
pub fn tokens_to_grid<F: Real>(g: &mut Graph<F>, tokens: ValueId) -> Result<ValueId> {
    let s = g.tape.shape(tokens).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("tokens_to_grid: {:?} is not (N, L, C)", s)));
    }
    let side = int_sqrt(s[1])
        .ok_or_else(|| Error::Dimension(format!("tokens_to_grid: token count {} is not square", s[1])))?;
    let p = g.tape.permute(tokens, &[0, 2, 1])?;
    g.tape.reshape(p, &[s[0], s[2], side, side])
}

/// (N, C, H, W) grid → (N, H·W, C) tokens.
pub fn grid_to_tokens<F: Real>(g: &mut Graph<F>, grid: ValueId) -> Result<ValueId> {
    let s = g.tape.shape(grid).to_vec();
    if s.len() != 4 {
        return Err(Error::Dimension(format!("grid_to_tokens: {:?} is not NCHW", s)));
    }
    let flat = g.tape.reshape(grid, &[s[0], s[1], s[2] * s[3]])?;
    g.tape.permute(flat, &[0, 2, 1])
}

/// Weights of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block<F: Real> {
    pub ln1_g: Tensor<F>,
    pub ln1_b: Tensor<F>,
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ln2_g: Tensor<F>,
    pub ln2_b: Tensor<F>,
    pub mlp1_w: Tensor<F>,
    pub mlp1_b: Tensor<F>,
    pub mlp2_w: Tensor<F>,
    pub mlp2_b: Tensor<F>,
}

impl<F: Real> Block<F> {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let c = CHANNELS;
        Block {
            ln1_g: Tensor::full(&[c], F::f(1.0)),
            ln1_b: Tensor::zeros(&[c]),
            wq: xavier_uniform(&[c, c], c, c, rng),
            bq: Tensor::zeros(&[c]),
            wk: xavier_uniform(&[c, c], c, c, rng),
            bk: Tensor::zeros(&[c]),
            wv: xavier_uniform(&[c, c], c, c, rng),
            bv: Tensor::zeros(&[c]),
            wo: xavier_uniform(&[c, c], c, c, rng),
            bo: Tensor::zeros(&[c]),
            ln2_g: Tensor::full(&[c], F::f(1.0)),
            ln2_b: Tensor::zeros(&[c]),
            mlp1_w: xavier_uniform(&[c, MLP_HIDDEN], c, MLP_HIDDEN, rng),
            mlp1_b: Tensor::zeros(&[MLP_HIDDEN]),
            mlp2_w: xavier_uniform(&[MLP_HIDDEN, c], MLP_HIDDEN, c, rng),
            mlp2_b: Tensor::zeros(&[c]),
        }
    }

    fn named(&self) -> Vec<(&'static str, &Tensor<F>)> {
        vec![
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("mlp1_w", &self.mlp1_w),
            ("mlp1_b", &self.mlp1_b),
            ("mlp2_w", &self.mlp2_w),
            ("mlp2_b", &self.mlp2_b),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<F>)> {
        vec![
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("mlp1_w", &mut self.mlp1_w),
            ("mlp1_b", &mut self.mlp1_b),
            ("mlp2_w", &mut self.mlp2_w),
            ("mlp2_b", &mut self.mlp2_b),
        ]
    }
}

/// The frozen encoder Φ: deterministic from its seed, never updated.
#[derive(Clone, Debug)]
pub struct FrozenEncoder<F: Real> {
    pub patch_w: Tensor<F>,
    pub patch_b: Tensor<F>,
    pub pos: Tensor<F>,
    pub blocks: Vec<Block<F>>,
    pub rng_seed: u64,
}

/// Build the frozen backbone deterministically from a seed.
pub fn init_frozen_backbone<F: Real>(seed: u64) -> FrozenEncoder<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = PATCH * PATCH;
    FrozenEncoder {
        patch_w: xavier_uniform(&[d, CHANNELS], d, CHANNELS, &mut rng),
        patch_b: Tensor::zeros(&[CHANNELS]),
        pos: uniform_init(&[TOKENS, CHANNELS], 0.02, &mut rng),
        blocks: (0..BLOCKS).map(|_| Block::new(&mut rng)).collect(),
        rng_seed: seed,
    }
}

use rand::SeedableRng;

impl<F: Real> FrozenEncoder<F> {
    /// SHA-256 over all parameters; constant for a frozen encoder.
    pub fn checksum(&self) -> String {
        param_digest(&self.params())
    }

    /// PatchEmbed: image → tokens plus the positional table.
    pub fn embed(&self, g: &mut Graph<F>, prefix: &str, image: ValueId) -> Result<ValueId> {
        let s = g.tape.shape(image).to_vec();
        if s.len() != 4 || s[2] % PATCH != 0 || s[3] % PATCH != 0 {
            return Err(Error::Dimension(format!(
                "encoder: image {:?} is not NCHW with sides divisible by {PATCH}",
                s
            )));
        }
        let l = (s[2] / PATCH) * (s[3] / PATCH);
        if s[1] != 1 || l != TOKENS {
            return Err(Error::Dimension(format!(
                "encoder: image {:?} must be single-channel with {TOKENS} patches, got {l}",
                s
            )));
        }
        let wid = g.frozen(&format!("{prefix}.patch_w"), &self.patch_w)?;
        let bid = g.frozen(&format!("{prefix}.patch_b"), &self.patch_b)?;
        let pid = g.frozen(&format!("{prefix}.pos"), &self.pos)?;
        let t = &mut g.tape;
        let patches = t.patch_extract(image, PATCH)?;
        let flat = t.reshape(patches, &[s[0] * l, PATCH * PATCH])?;
        let proj = t.matmul(flat, wid)?;
        let proj = t.add_bias_col(proj, bid)?;
        let tokens = t.reshape(proj, &[s[0], l, CHANNELS])?;
        let flat_tok = t.reshape(tokens, &[s[0], l * CHANNELS])?;
        let flat_pos = t.reshape(pid, &[l * CHANNELS])?;
        let with_pos = t.add_bias_col(flat_tok, flat_pos)?;
        t.reshape(with_pos, &[s[0], l, CHANNELS])
    }

    /// One pre-norm block: x + Attn(LN(x)), then x + MLP(LN(x)).
    pub fn block(&self, g: &mut Graph<F>, prefix: &str, idx: usize, x: ValueId) -> Result<ValueId> {
        let blk = self
            .blocks
            .get(idx)
            .ok_or_else(|| Error::Contract(format!("encoder: block {idx} of {BLOCKS}")))?;
        let mut ids = Vec::new();
        for (n, t) in blk.named() {
            ids.push(g.frozen(&format!("{prefix}.block{idx}.{n}"), t)?);
        }
        let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, m1w, m1b, m2w, m2b]: [ValueId; 16] =
            ids.try_into().expect("16 block parameters");
        let s = g.tape.shape(x).to_vec();
        let (n, l, c) = (s[0], s[1], s[2]);
        let dh = c / HEADS;
        let t = &mut g.tape;

        let h = t.layer_norm(x, ln1_g, ln1_b)?;
        let hf = t.reshape(h, &[n * l, c])?;
        let heads = |t: &mut crate::tensor::Tape<F>, w, b| -> Result<ValueId> {
            let y = t.matmul(hf, w)?;
            let y = t.add_bias_col(y, b)?;
            let y = t.reshape(y, &[n, l, HEADS, dh])?;
            let y = t.permute(y, &[0, 2, 1, 3])?;
            t.reshape(y, &[n * HEADS, l, dh])
        };
        let q = heads(t, wq, bq)?;
        let k = heads(t, wk, bk)?;
        let v = heads(t, wv, bv)?;
        let kt = t.permute(k, &[0, 2, 1])?;
        let scores = t.bmm(q, kt)?;
        let scores = t.mul_const(scores, F::f(1.0 / (dh as f64).sqrt()))?;
        let att = t.softmax_stable(scores, 2)?;
        let ctx = t.bmm(att, v)?;
        let ctx = t.reshape(ctx, &[n, HEADS, l, dh])?;
        let ctx = t.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = t.reshape(ctx, &[n * l, c])?;
        let out = t.matmul(ctx, wo)?;
        let out = t.add_bias_col(out, bo)?;
        let out = t.reshape(out, &[n, l, c])?;
        let x = t.add(x, out)?;

        let h = t.layer_norm(x, ln2_g, ln2_b)?;
        let hf = t.reshape(h, &[n * l, c])?;
        let m = t.matmul(hf, m1w)?;
        let m = t.add_bias_col(m, m1b)?;
        let m = t.relu(m)?;
        let m = t.matmul(m, m2w)?;
        let m = t.add_bias_col(m, m2b)?;
        let m = t.reshape(m, &[n, l, c])?;
        t.add(x, m)
    }
}

impl<F: Real> Module<F> for FrozenEncoder<F> {
    fn params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("pos".to_string(), &self.pos),
        ];
        for (i, blk) in self.blocks.iter().enumerate() {
            for (n, t) in blk.named() {
                v.push((format!("block{i}.{n}"), t));
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = vec![
            ("patch_w".to_string(), &mut self.patch_w),
            ("patch_b".to_string(), &mut self.patch_b),
            ("pos".to_string(), &mut self.pos),
        ];
        for (i, blk) in self.blocks.iter_mut().enumerate() {
            for (n, t) in blk.named_mut() {
                v.push((format!("block{i}.{n}"), t));
            }
        }
        v
    }
}

/// Run PatchEmbed and all blocks, applying the adapter residual at every
/// injected layer. Returns the final tokens and the routing records
/// collected along the way (one per injected layer).
pub fn encoder_forward<F: Real>(
    g: &mut Graph<F>,
    enc: &FrozenEncoder<F>,
    image: ValueId,
    adapter: Option<&AdapterState<F>>,
) -> Result<(ValueId, Vec<RoutingRecord>)> {
    let mut x = enc.embed(g, "encoder", image)?;
    let mut records = Vec::new();
    for l in 0..BLOCKS {
        let block_out = enc.block(g, "encoder", l, x)?;
        x = match adapter {
            Some(a) if a.is_injected(l) => {
                let grid_in = tokens_to_grid(g, x)?;
                let grid_block = tokens_to_grid(g, block_out)?;
                let (fused, rec) = adapter_apply(g, grid_block, grid_in, l, a)?;
                records.push(rec);
                grid_to_tokens(g, fused)?
            }
            _ => block_out,
        };
    }
    Ok((x, records))
}

/// Initial logit of every segmentation head. Targets cover well under 1%
/// of the pixels, so a head that starts at logit 0 (probability 0.5) takes
/// a huge BCE gradient from the background, overshoots into an all-negative
/// saturated state, and the Dice term can no longer pull target pixels back
/// out. Starting at the foreground prior (σ(−4) ≈ 1.8%) leaves the
/// background nearly satisfied at step 0.
pub const HEAD_PRIOR_BIAS: f64 = -4.0;

/// Trainable decoder: token grid → full-resolution logits.
#[derive(Clone, Debug)]
pub struct MaskDecoder<F: Real> {
    pub up1_w: Tensor<F>,
    pub up1_b: Tensor<F>,
    pub up2_w: Tensor<F>,
    pub up2_b: Tensor<F>,
    pub head_w: Tensor<F>,
    pub head_b: Tensor<F>,
}

impl<F: Real> MaskDecoder<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let c = CHANNELS;
        MaskDecoder {
            up1_w: kaiming_uniform(&[c, c, 2, 2], c * 4, rng),
            up1_b: Tensor::zeros(&[c]),
            up2_w: kaiming_uniform(&[c, c / 2, 2, 2], c * 4, rng),
            up2_b: Tensor::zeros(&[c / 2]),
            head_w: kaiming_uniform(&[1, c / 2, 1, 1], c / 2, rng),
            head_b: Tensor::full(&[1], F::f(HEAD_PRIOR_BIAS)),
        }
    }
}

impl<F: Real> Module<F> for MaskDecoder<F> {
    fn params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("up1_w".into(), &self.up1_w),
            ("up1_b".into(), &self.up1_b),
            ("up2_w".into(), &self.up2_w),
            ("up2_b".into(), &self.up2_b),
            ("head_w".into(), &self.head_w),
            ("head_b".into(), &self.head_b),
        ]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("up1_w".into(), &mut self.up1_w),
            ("up1_b".into(), &mut self.up1_b),
            ("up2_w".into(), &mut self.up2_w),
            ("up2_b".into(), &mut self.up2_b),
            ("head_w".into(), &mut self.head_w),
            ("head_b".into(), &mut self.head_b),
        ]
    }
}

/// Decode a square token grid to logits at `PATCH`× the grid resolution.
pub fn decode_mask<F: Real>(
    g: &mut Graph<F>,
    dec: &MaskDecoder<F>,
    tokens: ValueId,
) -> Result<ValueId> {
    let grid = tokens_to_grid(g, tokens)?;
    let u1w = g.param("decoder.up1_w", &dec.up1_w)?;
    let u1b = g.param("decoder.up1_b", &dec.up1_b)?;
    let u2w = g.param("decoder.up2_w", &dec.up2_w)?;
    let u2b = g.param("decoder.up2_b", &dec.up2_b)?;
    let hw = g.param("decoder.head_w", &dec.head_w)?;
    let hb = g.param("decoder.head_b", &dec.head_b)?;
    let t = &mut g.tape;
    let y = t.conv_transpose2x2(grid, u1w, Some(u1b))?;
    let y = t.relu(y)?;
    let y = t.conv_transpose2x2(y, u2w, Some(u2b))?;
    let y = t.relu(y)?;
    t.conv2d(y, hw, Some(hb), 1, Pad::Zero)
}

/// One depthwise 3×3 plus pointwise 1×1 stage of the student.
#[derive(Clone, Debug)]
pub struct SepConv<F: Real> {
    pub dw: Tensor<F>,
    pub pw: Tensor<F>,
    pub b: Tensor<F>,
}

impl<F: Real> SepConv<F> {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let c = STUDENT_WIDTH;
        SepConv {
            dw: kaiming_uniform(&[c, 1, 3, 3], 9, rng),
            pw: kaiming_uniform(&[c, c, 1, 1], c, rng),
            b: Tensor::zeros(&[c]),
        }
    }

    fn forward(&self, g: &mut Graph<F>, prefix: &str, x: ValueId) -> Result<ValueId> {
        let dw = g.param(&format!("{prefix}_dw"), &self.dw)?;
        let pw = g.param(&format!("{prefix}_pw"), &self.pw)?;
        let b = g.param(&format!("{prefix}_b"), &self.b)?;
        let t = &mut g.tape;
        let y = t.conv2d(x, dw, None, STUDENT_WIDTH, Pad::Zero)?;
        let y = t.conv2d(y, pw, Some(b), 1, Pad::Zero)?;
        t.relu(y)
    }
}

/// The prompt-free student ψ: image in, logits out, all weights trainable.
#[derive(Clone, Debug)]
pub struct StudentModel<F: Real> {
    pub stem_w: Tensor<F>,
    pub stem_b: Tensor<F>,
    pub downs: Vec<SepConv<F>>,
    pub ups: Vec<SepConv<F>>,
    pub head_w: Tensor<F>,
    pub head_b: Tensor<F>,
}

impl<F: Real> StudentModel<F> {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        StudentModel {
            stem_w: kaiming_uniform(&[STUDENT_WIDTH, 1, 3, 3], 9, rng),
            stem_b: Tensor::zeros(&[STUDENT_WIDTH]),
            downs: (0..3).map(|_| SepConv::new(rng)).collect(),
            ups: (0..3).map(|_| SepConv::new(rng)).collect(),
            head_w: kaiming_uniform(&[1, STUDENT_WIDTH, 1, 1], STUDENT_WIDTH, rng),
            head_b: Tensor::full(&[1], F::f(HEAD_PRIOR_BIAS)),
        }
    }
}

impl<F: Real> Module<F> for StudentModel<F> {
    fn params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut v = vec![("stem_w".to_string(), &self.stem_w), ("stem_b".to_string(), &self.stem_b)];
        for (i, s) in self.downs.iter().enumerate() {
            v.push((format!("down{i}_dw"), &s.dw));
            v.push((format!("down{i}_pw"), &s.pw));
            v.push((format!("down{i}_b"), &s.b));
        }
        for (i, s) in self.ups.iter().enumerate() {
            v.push((format!("up{i}_dw"), &s.dw));
            v.push((format!("up{i}_pw"), &s.pw));
            v.push((format!("up{i}_b"), &s.b));
        }
        v.push(("head_w".to_string(), &self.head_w));
        v.push(("head_b".to_string(), &self.head_b));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut v = vec![("stem_w".to_string(), &mut self.stem_w), ("stem_b".to_string(), &mut self.stem_b)];
        for (i, s) in self.downs.iter_mut().enumerate() {
            v.push((format!("down{i}_dw"), &mut s.dw));
            v.push((format!("down{i}_pw"), &mut s.pw));
            v.push((format!("down{i}_b"), &mut s.b));
        }
        for (i, s) in self.ups.iter_mut().enumerate() {
            v.push((format!("up{i}_dw"), &mut s.dw));
            v.push((format!("up{i}_pw"), &mut s.pw));
            v.push((format!("up{i}_b"), &mut s.b));
        }
        v.push(("head_w".to_string(), &mut self.head_w));
        v.push(("head_b".to_string(), &mut self.head_b));
        v
    }
}

/// Student forward pass: (N, 1, H, W) → logits of the same shape; sides
/// must be divisible by 8 for the three pooling stages.
pub fn student_forward<F: Real>(
    g: &mut Graph<F>,
    s: &StudentModel<F>,
    image: ValueId,
) -> Result<ValueId> {
    let sh = g.tape.shape(image).to_vec();
    if sh.len() != 4 || sh[1] != 1 || sh[2] % 8 != 0 || sh[3] % 8 != 0 {
        return Err(Error::Dimension(format!(
            "student: image {:?} is not (N, 1, H, W) with sides divisible by 8",
            sh
        )));
    }
    let stem_w = g.param("student.stem_w", &s.stem_w)?;
    let stem_b = g.param("student.stem_b", &s.stem_b)?;
    let mut x = g.tape.conv2d(image, stem_w, Some(stem_b), 1, Pad::Zero)?;
    x = g.tape.relu(x)?;
    for (i, stage) in s.downs.iter().enumerate() {
        x = stage.forward(g, &format!("student.down{i}"), x)?;
        x = g.tape.avg_pool2(x)?;
    }
    for (i, stage) in s.ups.iter().enumerate() {
        x = g.tape.upsample_nearest2(x)?;
        x = stage.forward(g, &format!("student.up{i}"), x)?;
    }
    let hw = g.param("student.head_w", &s.head_w)?;
    let hb = g.param("student.head_b", &s.head_b)?;
    g.tape.conv2d(x, hw, Some(hb), 1, Pad::Zero)
}
