//! Reverse-mode autodiff on a flat tape of primitive applications.
//!
//! Every forward call appends one node (data + recorded op); `backward`
//! walks the tape once in reverse, so the graph is topologically ordered
//! by construction. Nodes whose inputs carry no gradient are skipped
//! entirely, which is what makes the frozen encoder cheap to train under.

use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// Boundary handling for convolutions: `Zero` pads with zeros, `Reflect`
/// mirrors the image across the edge (edge pixel included).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pad {
    Zero,
    Reflect,
}

/// Boundary handling for whole-image shifts: `Zero` fills vacated pixels
/// with zeros, `Clamp` replicates the nearest edge pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fill {
    Zero,
    Clamp,
}

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    AddConst(ValueId, F),
    MulConst(ValueId, F),
    MulScalarParam { x: ValueId, s: ValueId },
    Relu(ValueId),
    Sigmoid(ValueId),
    Tanh(ValueId),
    Sqrt(ValueId),
    Abs(ValueId),
    AddBiasChannel { x: ValueId, bias: ValueId },
    AddBiasCol { x: ValueId, bias: ValueId },
    ScalePerSample { x: ValueId, s: ValueId },
    ScalePerChannel { x: ValueId, s: ValueId },
    AddPerChannel { x: ValueId, s: ValueId },
    MatMul { a: ValueId, b: ValueId },
    Bmm { a: ValueId, b: ValueId },
    Permute { x: ValueId, perm: Vec<usize> },
    Reshape { x: ValueId },
    Softmax { x: ValueId, axis: usize },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId },
    Conv2d { x: ValueId, w: ValueId, bias: Option<ValueId>, groups: usize, pad: Pad },
    ConvT2x2 { x: ValueId, w: ValueId, bias: Option<ValueId> },
    AvgPool2(ValueId),
    Upsample2(ValueId),
    Gap(ValueId),
    MeanRows(ValueId),
    Shift { x: ValueId, dy: isize, dx: isize, fill: Fill },
    BilinearSample { input: ValueId, coords: ValueId },
    Sum(ValueId),
    Mean(ValueId),
    ConcatCols { parts: Vec<ValueId> },
    IndexLast { x: ValueId, idx: usize },
    SliceChannels { x: ValueId, c0: usize, c1: usize },
    PatchExtract { x: ValueId, p: usize },
    BceWithLogits { logits: ValueId, target: ValueId },
}

struct Node<F> {
    data: Vec<F>,
    shape: Vec<usize>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Tape of tensors and the primitive applications that produced them.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor; `requires_grad` marks trainable parameters.
    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.into_data(),
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        id
    }

    /// Register a non-trainable input (images, targets, fixed kernels).
    pub fn constant(&mut self, t: Tensor<F>) -> ValueId {
        self.leaf(t, false)
    }

    pub fn data(&self, id: ValueId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: ValueId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn value(&self, id: ValueId) -> Tensor<F> {
        Tensor::new(&self.nodes[id.0].shape, self.nodes[id.0].data.clone()).expect("node invariant")
    }

    pub fn grad_tensor(&self, id: ValueId) -> Option<Tensor<F>> {
        self.nodes[id.0]
            .grad
            .as_ref()
            .map(|g| Tensor::new(&self.nodes[id.0].shape, g.clone()).expect("node invariant"))
    }

    fn requires(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<F>, requires_grad: bool, op: Op<F>) -> Result<ValueId> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { data, shape, grad: None, requires_grad, op });
        Ok(id)
    }

    fn same_shape(&self, name: &str, a: ValueId, b: ValueId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{name}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        self.push("add", self.shape(a).to_vec(), data, self.requires(a) || self.requires(b), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        self.push("sub", self.shape(a).to_vec(), data, self.requires(a) || self.requires(b), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        self.push("mul", self.shape(a).to_vec(), data, self.requires(a) || self.requires(b), Op::Mul(a, b))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.same_shape("div", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x / y);
        self.push("div", self.shape(a).to_vec(), data, self.requires(a) || self.requires(b), Op::Div(a, b))
    }

    pub fn add_const(&mut self, x: ValueId, c: F) -> Result<ValueId> {
        let data = self.data(x).iter().map(|v| *v + c).collect();
        self.push("add_const", self.shape(x).to_vec(), data, self.requires(x), Op::AddConst(x, c))
    }

    pub fn mul_const(&mut self, x: ValueId, c: F) -> Result<ValueId> {
        let data = self.data(x).iter().map(|v| *v * c).collect();
        self.push("mul_const", self.shape(x).to_vec(), data, self.requires(x), Op::MulConst(x, c))
    }

    /// Multiply a tensor by a single-element tensor (a learnable scalar).
    pub fn mul_scalar_param(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        if self.data(s).len() != 1 {
            return Err(Error::Dimension(format!("mul_scalar_param: scale has shape {:?}", self.shape(s))));
        }
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|v| *v * sv).collect();
        self.push("mul_scalar_param", self.shape(x).to_vec(), data, self.requires(x) || self.requires(s), Op::MulScalarParam { x, s })
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        let data = self.data(x).iter().map(|v| v.max(F::zero())).collect();
        self.push("relu", self.shape(x).to_vec(), data, self.requires(x), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let data = self.data(x).iter().map(|v| sigmoid(*v)).collect();
        self.push("sigmoid", self.shape(x).to_vec(), data, self.requires(x), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId> {
        let data = self.data(x).iter().map(|v| v.tanh()).collect();
        self.push("tanh", self.shape(x).to_vec(), data, self.requires(x), Op::Tanh(x))
    }

    pub fn sqrt(&mut self, x: ValueId) -> Result<ValueId> {
        let data = self.data(x).iter().map(|v| v.sqrt()).collect();
        self.push("sqrt", self.shape(x).to_vec(), data, self.requires(x), Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: ValueId) -> Result<ValueId> {
        let data = self.data(x).iter().map(|v| v.abs()).collect();
        self.push("abs", self.shape(x).to_vec(), data, self.requires(x), Op::Abs(x))
    }

    // ── Broadcast helpers ───────────────────────────────────────────────

    /// NCHW plus a per-channel bias of shape (C).
    pub fn add_bias_channel(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.nchw("add_bias_channel", x)?;
        if self.shape(bias) != [c] {
            return Err(Error::Dimension(format!("add_bias_channel: bias {:?} vs C={c}", self.shape(bias))));
        }
        let mut data = self.data(x).to_vec();
        let b = self.data(bias);
        for ni in 0..n {
            for ci in 0..c {
                let plane = &mut data[(ni * c + ci) * h * w..][..h * w];
                let bv = b[ci];
                for v in plane {
                    *v += bv;
                }
            }
        }
        self.push("add_bias_channel", self.shape(x).to_vec(), data, self.requires(x) || self.requires(bias), Op::AddBiasChannel { x, bias })
    }

    /// Matrix (R, C) plus a row vector of shape (C).
    pub fn add_bias_col(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let s = self.shape(x);
        if s.len() != 2 || self.shape(bias) != [s[1]] {
            return Err(Error::Dimension(format!("add_bias_col: x {:?} bias {:?}", s, self.shape(bias))));
        }
        let c = s[1];
        let mut data = self.data(x).to_vec();
        let b = self.data(bias).to_vec();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += *bv;
            }
        }
        self.push("add_bias_col", self.shape(x).to_vec(), data, self.requires(x) || self.requires(bias), Op::AddBiasCol { x, bias })
    }

    /// Scale each sample n of (N, ...) by s[n].
    pub fn scale_per_sample(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        let n = self.shape(x)[0];
        if self.shape(s) != [n] {
            return Err(Error::Dimension(format!("scale_per_sample: s {:?} vs N={n}", self.shape(s))));
        }
        let plane = self.data(x).len() / n;
        let mut data = self.data(x).to_vec();
        let sv = self.data(s).to_vec();
        for (ni, chunk) in data.chunks_mut(plane).enumerate() {
            for v in chunk {
                *v *= sv[ni];
            }
        }
        self.push("scale_per_sample", self.shape(x).to_vec(), data, self.requires(x) || self.requires(s), Op::ScalePerSample { x, s })
    }

    /// Scale each (n, c) plane of NCHW by s[n, c].
    pub fn scale_per_channel(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.nchw("scale_per_channel", x)?;
        if self.shape(s) != [n, c] {
            return Err(Error::Dimension(format!("scale_per_channel: s {:?} vs ({n}, {c})", self.shape(s))));
        }
        let mut data = self.data(x).to_vec();
        let sv = self.data(s).to_vec();
        for (pi, chunk) in data.chunks_mut(h * w).enumerate() {
            for v in chunk {
                *v *= sv[pi];
            }
        }
        self.push("scale_per_channel", self.shape(x).to_vec(), data, self.requires(x) || self.requires(s), Op::ScalePerChannel { x, s })
    }

    /// Add s[n, c] to each (n, c) plane of NCHW.
    pub fn add_per_channel(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.nchw("add_per_channel", x)?;
        if self.shape(s) != [n, c] {
            return Err(Error::Dimension(format!("add_per_channel: s {:?} vs ({n}, {c})", self.shape(s))));
        }
        let mut data = self.data(x).to_vec();
        let sv = self.data(s).to_vec();
        for (pi, chunk) in data.chunks_mut(h * w).enumerate() {
            for v in chunk {
                *v += sv[pi];
            }
        }
        self.push("add_per_channel", self.shape(x).to_vec(), data, self.requires(x) || self.requires(s), Op::AddPerChannel { x, s })
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_mk_kn(self.data(a), self.data(b), m, k, n);
        self.push("matmul", vec![m, n], data, self.requires(a) || self.requires(b), Op::MatMul { a, b })
    }

    /// Batched matmul: (B, M, K) x (B, K, N) -> (B, M, N).
    pub fn bmm(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension(format!("bmm: {:?} x {:?}", sa, sb)));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![F::zero(); bsz * m * n];
        for bi in 0..bsz {
            let out = matmul_mk_kn(&self.data(a)[bi * m * k..][..m * k], &self.data(b)[bi * k * n..][..k * n], m, k, n);
            data[bi * m * n..][..m * n].copy_from_slice(&out);
        }
        self.push("bmm", vec![bsz, m, n], data, self.requires(a) || self.requires(b), Op::Bmm { a, b })
    }

    pub fn permute(&mut self, x: ValueId, perm: &[usize]) -> Result<ValueId> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("permute: perm {:?} for shape {:?}", perm, s)));
        }
        let (shape, data) = permute_copy(self.data(x), s, perm);
        self.push("permute", shape, data, self.requires(x), Op::Permute { x, perm: perm.to_vec() })
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::Dimension(format!("reshape: {:?} -> {:?}", self.shape(x), shape)));
        }
        let data = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), data, self.requires(x), Op::Reshape { x })
    }

    /// Numerically stable softmax along `axis` (max-subtracted exp-normalize).
    pub fn softmax_stable(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::Dimension(format!("softmax_stable: axis {axis} of shape {:?}", s)));
        }
        let (outer, la, inner) = lane_dims(&s, axis);
        let mut data = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * la * inner + i;
                let mut mx = F::neg_infinity();
                for t in 0..la {
                    mx = mx.max(data[base + t * inner]);
                }
                let mut sum = F::zero();
                for t in 0..la {
                    let e = (data[base + t * inner] - mx).exp();
                    data[base + t * inner] = e;
                    sum += e;
                }
                for t in 0..la {
                    data[base + t * inner] /= sum;
                }
            }
        }
        self.push("softmax_stable", s, data, self.requires(x), Op::Softmax { x, axis })
    }

    /// Layer normalization over the last dimension with learnable gain/shift.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::Dimension("layer_norm: rank-0 input".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma {:?} beta {:?} vs D={d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = F::f(LAYER_NORM_EPS);
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(d) {
            let (mean, rstd) = row_mean_rstd(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push("layer_norm", s, data, rg, Op::LayerNorm { x, gamma, beta })
    }

    // ── Spatial ops ─────────────────────────────────────────────────────

    /// Stride-1 "same" 2D convolution with odd kernels and grouped channels.
    /// `groups == C` with per-channel kernels is depthwise.
    pub fn conv2d(&mut self, x: ValueId, w: ValueId, bias: Option<ValueId>, groups: usize, pad: Pad) -> Result<ValueId> {
        let (n, cin, h, ww) = self.nchw("conv2d", x)?;
        let ks = self.shape(w).to_vec();
        if ks.len() != 4 {
            return Err(Error::Dimension(format!("conv2d: kernel {:?} is not 4-d", ks)));
        }
        let (cout, cpg, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!("conv2d: groups {groups} does not divide channels ({cin} in, {cout} out)")));
        }
        if cpg != cin / groups {
            return Err(Error::Dimension(format!("conv2d: kernel expects {cpg} channels/group, input has {}", cin / groups)));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(format!("conv2d: kernel {kh}x{kw} must be odd for same padding")));
        }
        if let Some(bid) = bias {
            if self.shape(bid) != [cout] {
                return Err(Error::Dimension(format!("conv2d: bias {:?} vs Cout={cout}", self.shape(bid))));
            }
        }
        let data = conv2d_forward(
            self.data(x),
            (n, cin, h, ww),
            self.data(w),
            (cout, cpg, kh, kw),
            bias.map(|b| self.data(b).to_vec()),
            groups,
            pad,
        );
        let rg = self.requires(x) || self.requires(w) || bias.map(|b| self.requires(b)).unwrap_or(false);
        self.push("conv2d", vec![n, cout, h, ww], data, rg, Op::Conv2d { x, w, bias, groups, pad })
    }

    /// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x upsampling).
    /// Kernel layout is (C_in, C_out, 2, 2).
    pub fn conv_transpose2x2(&mut self, x: ValueId, w: ValueId, bias: Option<ValueId>) -> Result<ValueId> {
        let (n, cin, h, ww) = self.nchw("conv_transpose2x2", x)?;
        let ks = self.shape(w).to_vec();
        if ks.len() != 4 || ks[0] != cin || ks[2] != 2 || ks[3] != 2 {
            return Err(Error::Dimension(format!("conv_transpose2x2: kernel {:?} vs Cin={cin}", ks)));
        }
        let cout = ks[1];
        if let Some(bid) = bias {
            if self.shape(bid) != [cout] {
                return Err(Error::Dimension(format!("conv_transpose2x2: bias {:?} vs Cout={cout}", self.shape(bid))));
            }
        }
        let (oh, ow) = (2 * h, 2 * ww);
        let mut data = vec![F::zero(); n * cout * oh * ow];
        let xs = self.data(x);
        let wd = self.data(w);
        for ni in 0..n {
            for co in 0..cout {
                let out_plane = &mut data[(ni * cout + co) * oh * ow..][..oh * ow];
                for ci in 0..cin {
                    let xp = &xs[(ni * cin + ci) * h * ww..][..h * ww];
                    let wk = &wd[(ci * cout + co) * 4..][..4];
                    for i in 0..h {
                        for a in 0..2 {
                            let orow = &mut out_plane[(2 * i + a) * ow..][..ow];
                            let w0 = wk[a * 2];
                            let w1 = wk[a * 2 + 1];
                            for j in 0..ww {
                                let xv = xp[i * ww + j];
                                orow[2 * j] += xv * w0;
                                orow[2 * j + 1] += xv * w1;
                            }
                        }
                    }
                }
                if let Some(bid) = bias {
                    let bv = self.nodes[bid.0].data[co];
                    for v in out_plane.iter_mut() {
                        *v += bv;
                    }
                }
            }
        }
        let rg = self.requires(x) || self.requires(w) || bias.map(|b| self.requires(b)).unwrap_or(false);
        self.push("conv_transpose2x2", vec![n, cout, oh, ow], data, rg, Op::ConvT2x2 { x, w, bias })
    }

    /// 2x2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.nchw("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("avg_pool2: odd spatial dims {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xs = self.data(x);
        let quarter = F::f(0.25);
        let mut data = vec![F::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let xp = &xs[p * h * w..][..h * w];
            let op = &mut data[p * oh * ow..][..oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    let base = 2 * i * w + 2 * j;
                    op[i * ow + j] = (xp[base] + xp[base + 1] + xp[base + w] + xp[base + w + 1]) * quarter;
                }
            }
        }
        self.push("avg_pool2", vec![n, c, oh, ow], data, self.requires(x), Op::AvgPool2(x))
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample_nearest2(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.nchw("upsample_nearest2", x)?;
        let (oh, ow) = (2 * h, 2 * w);
        let xs = self.data(x);
        let mut data = vec![F::zero(); n * c * oh * ow];
        for p in 0..n * c {
            let xp = &xs[p * h * w..][..h * w];
            let op = &mut data[p * oh * ow..][..oh * ow];
            for i in 0..oh {
                for j in 0..ow {
                    op[i * ow + j] = xp[(i / 2) * w + j / 2];
                }
            }
        }
        self.push("upsample_nearest2", vec![n, c, oh, ow], data, self.requires(x), Op::Upsample2(x))
    }

    /// Global average pooling NCHW -> (N, C).
    pub fn gap(&mut self, x: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.nchw("gap", x)?;
        let xs = self.data(x);
        let mut data = vec![F::zero(); n * c];
        for p in 0..n * c {
            let sum: f64 = xs[p * h * w..][..h * w].iter().map(|v| v.as_f64()).sum();
            data[p] = F::f(sum / (h * w) as f64);
        }
        self.push("gap", vec![n, c], data, self.requires(x), Op::Gap(x))
    }

    /// Column means of a matrix: (N, K) -> (K).
    pub fn mean_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("mean_rows: {:?} is not a matrix", s)));
        }
        let (n, k) = (s[0], s[1]);
        let xs = self.data(x);
        let mut acc = vec![0.0f64; k];
        for row in xs.chunks(k) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.as_f64();
            }
        }
        let data = acc.iter().map(|a| F::f(*a / n as f64)).collect();
        self.push("mean_rows", vec![k], data, self.requires(x), Op::MeanRows(x))
    }

    /// Whole-image shift: out[i, j] = x[i+dy, j+dx] per plane.
    pub fn shift2d(&mut self, x: ValueId, dy: isize, dx: isize, fill: Fill) -> Result<ValueId> {
        let (n, c, h, w) = self.nchw("shift2d", x)?;
        let xs = self.data(x);
        let mut data = vec![F::zero(); xs.len()];
        for p in 0..n * c {
            let xp = &xs[p * h * w..][..h * w];
            let op = &mut data[p * h * w..][..h * w];
            for i in 0..h {
                let si = i as isize + dy;
                for j in 0..w {
                    let sj = j as isize + dx;
                    op[i * w + j] = match fill {
                        Fill::Zero => {
                            if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                                xp[si as usize * w + sj as usize]
                            } else {
                                F::zero()
                            }
                        }
                        Fill::Clamp => {
                            let ci = si.clamp(0, h as isize - 1) as usize;
                            let cj = sj.clamp(0, w as isize - 1) as usize;
                            xp[ci * w + cj]
                        }
                    };
                }
            }
        }
        self.push("shift2d", vec![n, c, h, w], data, self.requires(x), Op::Shift { x, dy, dx, fill })
    }

    /// Sample an NCHW image at fractional (y, x) positions; coords is
    /// (N, P, 2) and the result is (N, C, P). Out-of-range corners read 0.
    pub fn bilinear_sample(&mut self, input: ValueId, coords: ValueId) -> Result<ValueId> {
        let (n, c, h, w) = self.nchw("bilinear_sample", input)?;
        let cs = self.shape(coords).to_vec();
        if cs.len() != 3 || cs[0] != n || cs[2] != 2 {
            return Err(Error::Dimension(format!("bilinear_sample: coords {:?} (want (N, P, 2) with N={n})", cs)));
        }
        let p = cs[1];
        let xs = self.data(input);
        let cd = self.data(coords);
        let mut data = vec![F::zero(); n * c * p];
        for ni in 0..n {
            for pi in 0..p {
                let y = cd[(ni * p + pi) * 2].as_f64();
                let x = cd[(ni * p + pi) * 2 + 1].as_f64();
                let corners = corner_weights(y, x, h, w);
                for ci in 0..c {
                    let plane = &xs[(ni * c + ci) * h * w..][..h * w];
                    let mut acc = F::zero();
                    for (off, wgt) in corners.iter().flatten() {
                        acc += plane[*off] * F::f(*wgt);
                    }
                    data[(ni * c + ci) * p + pi] = acc;
                }
            }
        }
        let rg = self.requires(input) || self.requires(coords);
        self.push("bilinear_sample", vec![n, c, p], data, rg, Op::BilinearSample { input, coords })
    }

    // ── Reductions and reorganization ───────────────────────────────────

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let total: f64 = self.data(x).iter().map(|v| v.as_f64()).sum();
        self.push("sum", vec![1], vec![F::f(total)], self.requires(x), Op::Sum(x))
    }

    pub fn mean(&mut self, x: ValueId) -> Result<ValueId> {
        let n = self.data(x).len();
        let total: f64 = self.data(x).iter().map(|v| v.as_f64()).sum();
        self.push("mean", vec![1], vec![F::f(total / n as f64)], self.requires(x), Op::Mean(x))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_cols: no parts".into()));
        }
        let rows = self.shape(parts[0])[0];
        let mut cols = 0;
        for &pid in parts {
            let s = self.shape(pid);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Dimension(format!("concat_cols: part {:?} vs {rows} rows", s)));
            }
            cols += s[1];
        }
        let mut data = vec![F::zero(); rows * cols];
        let mut col0 = 0;
        for &pid in parts {
            let pc = self.shape(pid)[1];
            let pd = self.data(pid);
            for r in 0..rows {
                data[r * cols + col0..][..pc].copy_from_slice(&pd[r * pc..][..pc]);
            }
            col0 += pc;
        }
        let rg = parts.iter().any(|&pid| self.requires(pid));
        self.push("concat_cols", vec![rows, cols], data, rg, Op::ConcatCols { parts: parts.to_vec() })
    }

    /// Select one index of the last axis, dropping it: (..., K) -> (...).
    pub fn index_last(&mut self, x: ValueId, idx: usize) -> Result<ValueId> {
        let s = self.shape(x).to_vec();
        let k = *s.last().ok_or_else(|| Error::Dimension("index_last: rank-0 input".into()))?;
        if idx >= k {
            return Err(Error::Dimension(format!("index_last: index {idx} out of {k}")));
        }
        let rows = self.data(x).len() / k;
        let xs = self.data(x);
        let data = (0..rows).map(|r| xs[r * k + idx]).collect();
        self.push("index_last", s[..s.len() - 1].to_vec(), data, self.requires(x), Op::IndexLast { x, idx })
    }

    /// Channel slice of NCHW: channels c0..c1.
    pub fn slice_channels(&mut self, x: ValueId, c0: usize, c1: usize) -> Result<ValueId> {
        let (n, c, h, w) = self.nchw("slice_channels", x)?;
        if c0 >= c1 || c1 > c {
            return Err(Error::Dimension(format!("slice_channels: {c0}..{c1} of {c}")));
        }
        let oc = c1 - c0;
        let xs = self.data(x);
        let mut data = vec![F::zero(); n * oc * h * w];
        for ni in 0..n {
            let src = &xs[(ni * c + c0) * h * w..][..oc * h * w];
            data[ni * oc * h * w..][..oc * h * w].copy_from_slice(src);
        }
        self.push("slice_channels", vec![n, oc, h, w], data, self.requires(x), Op::SliceChannels { x, c0, c1 })
    }

    /// Cut an image into non-overlapping p x p patches: (N, C, H, W) ->
    /// (N, L, C*p*p) with L = (H/p)*(W/p), row-major patch order.
    pub fn patch_extract(&mut self, x: ValueId, p: usize) -> Result<ValueId> {
        let (n, c, h, w) = self.nchw("patch_extract", x)?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Dimension(format!("patch_extract: patch {p} does not tile {h}x{w}")));
        }
        let (gh, gw) = (h / p, w / p);
        let l = gh * gw;
        let k = c * p * p;
        let xs = self.data(x);
        let mut data = vec![F::zero(); n * l * k];
        for ni in 0..n {
            for ti in 0..gh {
                for tj in 0..gw {
                    let li = ti * gw + tj;
                    for ci in 0..c {
                        for py in 0..p {
                            for px in 0..p {
                                data[(ni * l + li) * k + ci * p * p + py * p + px] =
                                    xs[((ni * c + ci) * h + ti * p + py) * w + tj * p + px];
                            }
                        }
                    }
                }
            }
        }
        self.push("patch_extract", vec![n, l, k], data, self.requires(x), Op::PatchExtract { x, p })
    }

    /// Mean binary cross-entropy on logits, computed in the overflow-safe
    /// form max(z,0) - z*t + ln(1 + exp(-|z|)). Targets carry no gradient.
    pub fn bce_with_logits(&mut self, logits: ValueId, target: ValueId) -> Result<ValueId> {
        self.same_shape("bce_with_logits", logits, target)?;
        if self.requires(target) {
            return Err(Error::Contract("bce_with_logits: target must not require gradients".into()));
        }
        let zs = self.data(logits);
        let ts = self.data(target);
        let mut acc = 0.0f64;
        for (z, t) in zs.iter().zip(ts) {
            let z = z.as_f64();
            let t = t.as_f64();
            acc += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        }
        let v = acc / zs.len() as f64;
        self.push("bce_with_logits", vec![1], vec![F::f(v)], self.requires(logits), Op::BceWithLogits { logits, target })
    }

    fn nchw(&self, name: &str, x: ValueId) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::Dimension(format!("{name}: expected NCHW, got shape {:?}", s)));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; accumulates gradients into every
    /// node on the differentiable path. Leaf gradients are retained;
    /// intermediate gradients are freed as soon as they are consumed.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!("backward: loss has shape {:?}, expected scalar", self.shape(loss))));
        }
        if !self.requires(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.backprop_node(i, &g, &op)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: ValueId, contrib: Vec<F>) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(contrib.len(), node.data.len());
        match &mut node.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(&contrib) {
                    *gi += *ci;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    fn backprop_node(&mut self, out: usize, g: &[F], op: &Op<F>) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.requires(*a) {
                    self.accumulate(*a, g.to_vec());
                }
                if self.requires(*b) {
                    self.accumulate(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    self.accumulate(*a, g.to_vec());
                }
                if self.requires(*b) {
                    self.accumulate(*b, g.iter().map(|v| -*v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let da = zip_map(g, self.data(*b), |x, y| x * y);
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    let db = zip_map(g, self.data(*a), |x, y| x * y);
                    self.accumulate(*b, db);
                }
            }
            Op::Div(a, b) => {
                if self.requires(*a) {
                    let da = zip_map(g, self.data(*b), |x, y| x / y);
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    let bd = self.data(*b);
                    let ad = self.data(*a);
                    let db: Vec<F> = g
                        .iter()
                        .zip(ad.iter().zip(bd))
                        .map(|(gi, (av, bv))| -*gi * *av / (*bv * *bv))
                        .collect();
                    self.accumulate(*b, db);
                }
            }
            Op::AddConst(x, _) => {
                self.accumulate(*x, g.to_vec());
            }
            Op::MulConst(x, c) => {
                self.accumulate(*x, g.iter().map(|v| *v * *c).collect());
            }
            Op::MulScalarParam { x, s } => {
                let sv = self.data(*s)[0];
                if self.requires(*x) {
                    self.accumulate(*x, g.iter().map(|v| *v * sv).collect());
                }
                if self.requires(*s) {
                    let ds: f64 = g.iter().zip(self.data(*x)).map(|(gi, xi)| gi.as_f64() * xi.as_f64()).sum();
                    self.accumulate(*s, vec![F::f(ds)]);
                }
            }
            Op::Relu(x) => {
                let dx = zip_map(g, self.data(*x), |gi, xi| if xi > F::zero() { gi } else { F::zero() });
                self.accumulate(*x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[out].data;
                let dx = zip_map(g, y, |gi, yi| gi * yi * (F::one() - yi));
                self.accumulate(*x, dx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[out].data;
                let dx = zip_map(g, y, |gi, yi| gi * (F::one() - yi * yi));
                self.accumulate(*x, dx);
            }
            Op::Sqrt(x) => {
                let y = &self.nodes[out].data;
                let half = F::f(0.5);
                let dx = zip_map(g, y, |gi, yi| gi * half / yi);
                self.accumulate(*x, dx);
            }
            Op::Abs(x) => {
                let dx = zip_map(g, self.data(*x), |gi, xi| {
                    if xi > F::zero() {
                        gi
                    } else if xi < F::zero() {
                        -gi
                    } else {
                        F::zero()
                    }
                });
                self.accumulate(*x, dx);
            }
            Op::AddBiasChannel { x, bias } => {
                let (n, c, h, w) = self.nchw("add_bias_channel", *x)?;
                if self.requires(*x) {
                    self.accumulate(*x, g.to_vec());
                }
                if self.requires(*bias) {
                    let mut db = vec![F::zero(); c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let s: f64 = g[(ni * c + ci) * h * w..][..h * w].iter().map(|v| v.as_f64()).sum();
                            db[ci] += F::f(s);
                        }
                    }
                    self.accumulate(*bias, db);
                }
            }
            Op::AddBiasCol { x, bias } => {
                let c = self.shape(*x)[1];
                if self.requires(*x) {
                    self.accumulate(*x, g.to_vec());
                }
                if self.requires(*bias) {
                    let mut db = vec![F::zero(); c];
                    for row in g.chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += *v;
                        }
                    }
                    self.accumulate(*bias, db);
                }
            }
            Op::ScalePerSample { x, s } => {
                let n = self.shape(*x)[0];
                let plane = self.data(*x).len() / n;
                if self.requires(*x) {
                    let sv = self.data(*s);
                    let mut dx = g.to_vec();
                    for (ni, chunk) in dx.chunks_mut(plane).enumerate() {
                        for v in chunk {
                            *v *= sv[ni];
                        }
                    }
                    self.accumulate(*x, dx);
                }
                if self.requires(*s) {
                    let xd = self.data(*x);
                    let mut ds = vec![F::zero(); n];
                    for ni in 0..n {
                        let acc: f64 = g[ni * plane..][..plane]
                            .iter()
                            .zip(&xd[ni * plane..][..plane])
                            .map(|(gi, xi)| gi.as_f64() * xi.as_f64())
                            .sum();
                        ds[ni] = F::f(acc);
                    }
                    self.accumulate(*s, ds);
                }
            }
            Op::ScalePerChannel { x, s } => {
                let (n, c, h, w) = self.nchw("scale_per_channel", *x)?;
                let plane = h * w;
                if self.requires(*x) {
                    let sv = self.data(*s);
                    let mut dx = g.to_vec();
                    for (pi, chunk) in dx.chunks_mut(plane).enumerate() {
                        for v in chunk {
                            *v *= sv[pi];
                        }
                    }
                    self.accumulate(*x, dx);
                }
                if self.requires(*s) {
                    let xd = self.data(*x);
                    let mut ds = vec![F::zero(); n * c];
                    for pi in 0..n * c {
                        let acc: f64 = g[pi * plane..][..plane]
                            .iter()
                            .zip(&xd[pi * plane..][..plane])
                            .map(|(gi, xi)| gi.as_f64() * xi.as_f64())
                            .sum();
                        ds[pi] = F::f(acc);
                    }
                    self.accumulate(*s, ds);
                }
            }
            Op::AddPerChannel { x, s } => {
                let (n, c, h, w) = self.nchw("add_per_channel", *x)?;
                let plane = h * w;
                if self.requires(*x) {
                    self.accumulate(*x, g.to_vec());
                }
                if self.requires(*s) {
                    let mut ds = vec![F::zero(); n * c];
                    for pi in 0..n * c {
                        let acc: f64 = g[pi * plane..][..plane].iter().map(|v| v.as_f64()).sum();
                        ds[pi] = F::f(acc);
                    }
                    self.accumulate(*s, ds);
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires(*a) {
                    let da = matmul_g_bt(g, self.data(*b), m, k, n);
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    let db = matmul_at_g(self.data(*a), g, m, k, n);
                    self.accumulate(*b, db);
                }
            }
            Op::Bmm { a, b } => {
                let sa = self.shape(*a).to_vec();
                let n = self.shape(*b)[2];
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                if self.requires(*a) {
                    let mut da = vec![F::zero(); bsz * m * k];
                    for bi in 0..bsz {
                        let block = matmul_g_bt(&g[bi * m * n..][..m * n], &self.data(*b)[bi * k * n..][..k * n], m, k, n);
                        da[bi * m * k..][..m * k].copy_from_slice(&block);
                    }
                    self.accumulate(*a, da);
                }
                if self.requires(*b) {
                    let mut db = vec![F::zero(); bsz * k * n];
                    for bi in 0..bsz {
                        let block = matmul_at_g(&self.data(*a)[bi * m * k..][..m * k], &g[bi * m * n..][..m * n], m, k, n);
                        db[bi * k * n..][..k * n].copy_from_slice(&block);
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::Permute { x, perm } => {
                let out_shape = self.nodes[out].shape.clone();
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, dx) = permute_copy(g, &out_shape, &inv);
                self.accumulate(*x, dx);
            }
            Op::Reshape { x } => {
                self.accumulate(*x, g.to_vec());
            }
            Op::Softmax { x, axis } => {
                let s = self.nodes[out].shape.clone();
                let (outer, la, inner) = lane_dims(&s, *axis);
                let y = &self.nodes[out].data;
                let mut dx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * la * inner + i;
                        let mut dot = F::zero();
                        for t in 0..la {
                            dot += g[base + t * inner] * y[base + t * inner];
                        }
                        for t in 0..la {
                            let idx = base + t * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = *self.shape(*x).last().unwrap();
                let eps = F::f(LAYER_NORM_EPS);
                let xd = self.data(*x).to_vec();
                let gd = self.data(*gamma).to_vec();
                let rows = xd.len() / d;
                let mut dx = vec![F::zero(); xd.len()];
                let mut dgamma = vec![F::zero(); d];
                let mut dbeta = vec![F::zero(); d];
                for r in 0..rows {
                    let xr = &xd[r * d..][..d];
                    let gr = &g[r * d..][..d];
                    let (mean, rstd) = row_mean_rstd(xr, eps);
                    let mut m1 = F::zero();
                    let mut m2 = F::zero();
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gd[j];
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                        m1 += dxhat;
                        m2 += dxhat * xhat;
                    }
                    let inv_d = F::one() / F::f(d as f64);
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        let dxhat = gr[j] * gd[j];
                        dx[r * d + j] = rstd * (dxhat - m1 - xhat * m2);
                    }
                }
                if self.requires(*x) {
                    self.accumulate(*x, dx);
                }
                if self.requires(*gamma) {
                    self.accumulate(*gamma, dgamma);
                }
                if self.requires(*beta) {
                    self.accumulate(*beta, dbeta);
                }
            }
            Op::Conv2d { x, w, bias, groups, pad } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let dims = ((xs[0], xs[1], xs[2], xs[3]), (ws[0], ws[1], ws[2], ws[3]));
                if self.requires(*x) {
                    let dx = conv2d_backward_x(g, self.data(*w), dims, *groups, *pad);
                    self.accumulate(*x, dx);
                }
                if self.requires(*w) {
                    let dw = conv2d_backward_w(g, self.data(*x), dims, *groups, *pad);
                    self.accumulate(*w, dw);
                }
                if let Some(bid) = bias {
                    if self.requires(*bid) {
                        let (cout, h, w_) = (ws[0], xs[2], xs[3]);
                        let n = xs[0];
                        let mut db = vec![F::zero(); cout];
                        for ni in 0..n {
                            for co in 0..cout {
                                let s: f64 = g[(ni * cout + co) * h * w_..][..h * w_].iter().map(|v| v.as_f64()).sum();
                                db[co] += F::f(s);
                            }
                        }
                        self.accumulate(*bid, db);
                    }
                }
            }
            Op::ConvT2x2 { x, w, bias } => {
                let xs = self.shape(*x).to_vec();
                let (n, cin, h, ww) = (xs[0], xs[1], xs[2], xs[3]);
                let cout = self.shape(*w)[1];
                let (oh, ow) = (2 * h, 2 * ww);
                if self.requires(*x) {
                    let wd = self.data(*w);
                    let mut dx = vec![F::zero(); n * cin * h * ww];
                    for ni in 0..n {
                        for ci in 0..cin {
                            let dxp = &mut dx[(ni * cin + ci) * h * ww..][..h * ww];
                            for co in 0..cout {
                                let gp = &g[(ni * cout + co) * oh * ow..][..oh * ow];
                                let wk = &wd[(ci * cout + co) * 4..][..4];
                                for i in 0..h {
                                    for j in 0..ww {
                                        let mut acc = F::zero();
                                        for a in 0..2 {
                                            for b in 0..2 {
                                                acc += gp[(2 * i + a) * ow + 2 * j + b] * wk[a * 2 + b];
                                            }
                                        }
                                        dxp[i * ww + j] += acc;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*x, dx);
                }
                if self.requires(*w) {
                    let xd = self.data(*x);
                    let mut dw = vec![F::zero(); cin * cout * 4];
                    for ni in 0..n {
                        for ci in 0..cin {
                            let xp = &xd[(ni * cin + ci) * h * ww..][..h * ww];
                            for co in 0..cout {
                                let gp = &g[(ni * cout + co) * oh * ow..][..oh * ow];
                                for a in 0..2 {
                                    for b in 0..2 {
                                        let mut acc = 0.0f64;
                                        for i in 0..h {
                                            for j in 0..ww {
                                                acc += xp[i * ww + j].as_f64() * gp[(2 * i + a) * ow + 2 * j + b].as_f64();
                                            }
                                        }
                                        dw[(ci * cout + co) * 4 + a * 2 + b] += F::f(acc);
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*w, dw);
                }
                if let Some(bid) = bias {
                    if self.requires(*bid) {
                        let mut db = vec![F::zero(); cout];
                        for ni in 0..n {
                            for co in 0..cout {
                                let s: f64 = g[(ni * cout + co) * oh * ow..][..oh * ow].iter().map(|v| v.as_f64()).sum();
                                db[co] += F::f(s);
                            }
                        }
                        self.accumulate(*bid, db);
                    }
                }
            }
            Op::AvgPool2(x) => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (h / 2, w / 2);
                let planes = xs[0] * xs[1];
                let quarter = F::f(0.25);
                let mut dx = vec![F::zero(); planes * h * w];
                for p in 0..planes {
                    let gp = &g[p * oh * ow..][..oh * ow];
                    let dxp = &mut dx[p * h * w..][..h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = gp[i * ow + j] * quarter;
                            let base = 2 * i * w + 2 * j;
                            dxp[base] += gv;
                            dxp[base + 1] += gv;
                            dxp[base + w] += gv;
                            dxp[base + w + 1] += gv;
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Upsample2(x) => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                let (oh, ow) = (2 * h, 2 * w);
                let planes = xs[0] * xs[1];
                let mut dx = vec![F::zero(); planes * h * w];
                for p in 0..planes {
                    let gp = &g[p * oh * ow..][..oh * ow];
                    let dxp = &mut dx[p * h * w..][..h * w];
                    for i in 0..oh {
                        for j in 0..ow {
                            dxp[(i / 2) * w + j / 2] += gp[i * ow + j];
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Gap(x) => {
                let xs = self.shape(*x).to_vec();
                let (h, w) = (xs[2], xs[3]);
                let planes = xs[0] * xs[1];
                let inv = F::f(1.0 / (h * w) as f64);
                let mut dx = vec![F::zero(); planes * h * w];
                for p in 0..planes {
                    let gv = g[p] * inv;
                    for v in dx[p * h * w..][..h * w].iter_mut() {
                        *v = gv;
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::MeanRows(x) => {
                let s = self.shape(*x).to_vec();
                let (n, k) = (s[0], s[1]);
                let inv = F::f(1.0 / n as f64);
                let mut dx = vec![F::zero(); n * k];
                for r in 0..n {
                    for c in 0..k {
                        dx[r * k + c] = g[c] * inv;
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Shift { x, dy, dx: dxs, fill } => {
                let s = self.shape(*x).to_vec();
                let (h, w) = (s[2], s[3]);
                let planes = s[0] * s[1];
                let mut dx = vec![F::zero(); planes * h * w];
                for p in 0..planes {
                    let gp = &g[p * h * w..][..h * w];
                    let dxp = &mut dx[p * h * w..][..h * w];
                    for i in 0..h {
                        let si = i as isize + dy;
                        for j in 0..w {
                            let sj = j as isize + dxs;
                            match fill {
                                Fill::Zero => {
                                    if si >= 0 && si < h as isize && sj >= 0 && sj < w as isize {
                                        dxp[si as usize * w + sj as usize] += gp[i * w + j];
                                    }
                                }
                                Fill::Clamp => {
                                    let ci = si.clamp(0, h as isize - 1) as usize;
                                    let cj = sj.clamp(0, w as isize - 1) as usize;
                                    dxp[ci * w + cj] += gp[i * w + j];
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::BilinearSample { input, coords } => {
                let iss = self.shape(*input).to_vec();
                let (n, c, h, w) = (iss[0], iss[1], iss[2], iss[3]);
                let p = self.shape(*coords)[1];
                let cd = self.data(*coords).to_vec();
                let need_di = self.requires(*input);
                let need_dc = self.requires(*coords);
                let xd = self.data(*input).to_vec();
                let mut di = vec![F::zero(); n * c * h * w];
                let mut dc = vec![F::zero(); n * p * 2];
                for ni in 0..n {
                    for pi in 0..p {
                        let y = cd[(ni * p + pi) * 2].as_f64();
                        let x = cd[(ni * p + pi) * 2 + 1].as_f64();
                        let (corners, dwy, dwx) = corner_weights_and_derivs(y, x, h, w);
                        let mut dy_acc = 0.0f64;
                        let mut dx_acc = 0.0f64;
                        for ci in 0..c {
                            let gv = g[(ni * c + ci) * p + pi];
                            let plane_off = (ni * c + ci) * h * w;
                            for k in 0..4 {
                                if let Some((off, wgt)) = corners[k] {
                                    if need_di {
                                        di[plane_off + off] += gv * F::f(wgt);
                                    }
                                    if need_dc {
                                        let v = xd[plane_off + off].as_f64();
                                        dy_acc += gv.as_f64() * v * dwy[k];
                                        dx_acc += gv.as_f64() * v * dwx[k];
                                    }
                                }
                            }
                        }
                        if need_dc {
                            dc[(ni * p + pi) * 2] = F::f(dy_acc);
                            dc[(ni * p + pi) * 2 + 1] = F::f(dx_acc);
                        }
                    }
                }
                if need_di {
                    self.accumulate(*input, di);
                }
                if need_dc {
                    self.accumulate(*coords, dc);
                }
            }
            Op::Sum(x) => {
                let n = self.data(*x).len();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.data(*x).len();
                let gv = g[0] / F::f(n as f64);
                self.accumulate(*x, vec![gv; n]);
            }
            Op::ConcatCols { parts } => {
                let rows = self.shape(parts[0])[0];
                let cols: usize = parts.iter().map(|&pid| self.shape(pid)[1]).sum();
                let mut col0 = 0;
                for &pid in parts {
                    let pc = self.shape(pid)[1];
                    if self.requires(pid) {
                        let mut dp = vec![F::zero(); rows * pc];
                        for r in 0..rows {
                            dp[r * pc..][..pc].copy_from_slice(&g[r * cols + col0..][..pc]);
                        }
                        self.accumulate(pid, dp);
                    }
                    col0 += pc;
                }
            }
            Op::IndexLast { x, idx } => {
                let s = self.shape(*x).to_vec();
                let k = *s.last().unwrap();
                let rows = self.data(*x).len() / k;
                let mut dx = vec![F::zero(); rows * k];
                for r in 0..rows {
                    dx[r * k + idx] = g[r];
                }
                self.accumulate(*x, dx);
            }
            Op::SliceChannels { x, c0, c1 } => {
                let s = self.shape(*x).to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let oc = c1 - c0;
                let mut dx = vec![F::zero(); n * c * h * w];
                for ni in 0..n {
                    dx[(ni * c + c0) * h * w..][..oc * h * w].copy_from_slice(&g[ni * oc * h * w..][..oc * h * w]);
                }
                self.accumulate(*x, dx);
            }
            Op::PatchExtract { x, p } => {
                let s = self.shape(*x).to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let (gh, gw) = (h / p, w / p);
                let l = gh * gw;
                let k = c * p * p;
                let mut dx = vec![F::zero(); n * c * h * w];
                for ni in 0..n {
                    for ti in 0..gh {
                        for tj in 0..gw {
                            let li = ti * gw + tj;
                            for ci in 0..c {
                                for py in 0..*p {
                                    for px in 0..*p {
                                        dx[((ni * c + ci) * h + ti * p + py) * w + tj * p + px] +=
                                            g[(ni * l + li) * k + ci * p * p + py * p + px];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::BceWithLogits { logits, target } => {
                let zs = self.data(*logits);
                let ts = self.data(*target);
                let inv = g[0].as_f64() / zs.len() as f64;
                let dz: Vec<F> = zs
                    .iter()
                    .zip(ts)
                    .map(|(z, t)| F::f((sigmoid(z.as_f64()) - t.as_f64()) * inv))
                    .collect();
                self.accumulate(*logits, dz);
            }
        }
        Ok(())
    }
}

// ── Scalar and slice helpers ────────────────────────────────────────────

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn zip_map<F: Real>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn row_mean_rstd<F: Real>(row: &[F], eps: F) -> (F, F) {
    let d = F::f(row.len() as f64);
    let mut mean = F::zero();
    for v in row {
        mean += *v;
    }
    mean /= d;
    let mut var = F::zero();
    for v in row {
        let c = *v - mean;
        var += c * c;
    }
    var /= d;
    (mean, F::one() / (var + eps).sqrt())
}

/// Mirror an out-of-range index across the boundary (edge pixel included),
/// valid for overhangs up to the image size.
fn mirror(i: isize, len: usize) -> usize {
    let n = len as isize;
    let m = if i < 0 { -i - 1 } else if i >= n { 2 * n - i - 1 } else { i };
    debug_assert!((0..n).contains(&m));
    m as usize
}

fn permute_copy<F: Real>(data: &[F], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<F>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_strides_in: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![F::zero(); data.len()];
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += out_strides_in[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_strides_in[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn matmul_mk_kn<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != F::zero() {
                let brow = &b[kk * n..][..n];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * *bv;
                }
            }
        }
    }
    out
}

/// dA = G * B^T for C = A*B with A (m,k), B (k,n).
fn matmul_g_bt<F: Real>(g: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut da = vec![F::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..][..n];
        let darow = &mut da[i * k..][..k];
        for kk in 0..k {
            let brow = &b[kk * n..][..n];
            let mut acc = F::zero();
            for (gv, bv) in grow.iter().zip(brow) {
                acc += *gv * *bv;
            }
            darow[kk] = acc;
        }
    }
    da
}

/// dB = A^T * G for C = A*B with A (m,k), B (k,n).
fn matmul_at_g<F: Real>(a: &[F], g: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut db = vec![F::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..][..n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != F::zero() {
                let dbrow = &mut db[kk * n..][..n];
                for (d, gv) in dbrow.iter_mut().zip(grow) {
                    *d += av * *gv;
                }
            }
        }
    }
    db
}

// ── Convolution kernels ─────────────────────────────────────────────────

type ConvDims = ((usize, usize, usize, usize), (usize, usize, usize, usize));

fn conv2d_forward<F: Real>(
    x: &[F],
    (n, cin, h, w): (usize, usize, usize, usize),
    kw_data: &[F],
    (cout, cpg, kh, kw): (usize, usize, usize, usize),
    bias: Option<Vec<F>>,
    groups: usize,
    pad: Pad,
) -> Vec<F> {
    let copg = cout / groups;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![F::zero(); n * cout * h * w];
    for ni in 0..n {
        for co in 0..cout {
            let gi = co / copg;
            let out_plane = &mut out[(ni * cout + co) * h * w..][..h * w];
            if let Some(b) = &bias {
                out_plane.fill(b[co]);
            }
            for cig in 0..cpg {
                let ci = gi * cpg + cig;
                let xp = &x[(ni * cin + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kw_data[((co * cpg + cig) * kh + ky) * kw + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        let dy = ky as isize - ph as isize;
                        let dx = kx as isize - pw as isize;
                        for i in 0..h {
                            let si = i as isize + dy;
                            let src_row = match pad {
                                Pad::Zero => {
                                    if si < 0 || si >= h as isize {
                                        continue;
                                    }
                                    &xp[si as usize * w..][..w]
                                }
                                Pad::Reflect => &xp[mirror(si, h) * w..][..w],
                            };
                            let orow = &mut out_plane[i * w..][..w];
                            let j0 = (-dx).max(0) as usize;
                            let j1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                            if j1 > j0 {
                                let src = &src_row[(j0 as isize + dx) as usize..][..j1 - j0];
                                for (o, s) in orow[j0..j1].iter_mut().zip(src) {
                                    *o += wv * *s;
                                }
                            }
                            if pad == Pad::Reflect {
                                for j in 0..j0 {
                                    orow[j] += wv * src_row[mirror(j as isize + dx, w)];
                                }
                                for j in j1..w {
                                    orow[j] += wv * src_row[mirror(j as isize + dx, w)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_x<F: Real>(g: &[F], kw_data: &[F], dims: ConvDims, groups: usize, pad: Pad) -> Vec<F> {
    let ((n, cin, h, w), (cout, cpg, kh, kw)) = dims;
    let copg = cout / groups;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dx = vec![F::zero(); n * cin * h * w];
    for ni in 0..n {
        for co in 0..cout {
            let gi = co / copg;
            let gp = &g[(ni * cout + co) * h * w..][..h * w];
            for cig in 0..cpg {
                let ci = gi * cpg + cig;
                let dxp = &mut dx[(ni * cin + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = kw_data[((co * cpg + cig) * kh + ky) * kw + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        let dy = ky as isize - ph as isize;
                        let dxs = kx as isize - pw as isize;
                        for i in 0..h {
                            let si = i as isize + dy;
                            let ri = match pad {
                                Pad::Zero => {
                                    if si < 0 || si >= h as isize {
                                        continue;
                                    }
                                    si as usize
                                }
                                Pad::Reflect => mirror(si, h),
                            };
                            let grow = &gp[i * w..][..w];
                            let j0 = (-dxs).max(0) as usize;
                            let j1 = ((w as isize - dxs).min(w as isize)).max(0) as usize;
                            {
                                let drow = &mut dxp[ri * w..][..w];
                                if j1 > j0 {
                                    let dst = &mut drow[(j0 as isize + dxs) as usize..][..j1 - j0];
                                    for (d, gv) in dst.iter_mut().zip(&grow[j0..j1]) {
                                        *d += wv * *gv;
                                    }
                                }
                                if pad == Pad::Reflect {
                                    for j in 0..j0 {
                                        drow[mirror(j as isize + dxs, w)] += wv * grow[j];
                                    }
                                    for j in j1..w {
                                        drow[mirror(j as isize + dxs, w)] += wv * grow[j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_w<F: Real>(g: &[F], x: &[F], dims: ConvDims, groups: usize, pad: Pad) -> Vec<F> {
    let ((n, cin, h, w), (cout, cpg, kh, kw)) = dims;
    let copg = cout / groups;
    let (ph, pw) = (kh / 2, kw / 2);
    let mut dw = vec![F::zero(); cout * cpg * kh * kw];
    for ni in 0..n {
        for co in 0..cout {
            let gi = co / copg;
            let gp = &g[(ni * cout + co) * h * w..][..h * w];
            for cig in 0..cpg {
                let ci = gi * cpg + cig;
                let xp = &x[(ni * cin + ci) * h * w..][..h * w];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dy = ky as isize - ph as isize;
                        let dxs = kx as isize - pw as isize;
                        let mut acc = 0.0f64;
                        for i in 0..h {
                            let si = i as isize + dy;
                            let src_row = match pad {
                                Pad::Zero => {
                                    if si < 0 || si >= h as isize {
                                        continue;
                                    }
                                    &xp[si as usize * w..][..w]
                                }
                                Pad::Reflect => &xp[mirror(si, h) * w..][..w],
                            };
                            let grow = &gp[i * w..][..w];
                            let j0 = (-dxs).max(0) as usize;
                            let j1 = ((w as isize - dxs).min(w as isize)).max(0) as usize;
                            if j1 > j0 {
                                let src = &src_row[(j0 as isize + dxs) as usize..][..j1 - j0];
                                for (gv, sv) in grow[j0..j1].iter().zip(src) {
                                    acc += gv.as_f64() * sv.as_f64();
                                }
                            }
                            if pad == Pad::Reflect {
                                for j in 0..j0 {
                                    acc += grow[j].as_f64() * src_row[mirror(j as isize + dxs, w)].as_f64();
                                }
                                for j in j1..w {
                                    acc += grow[j].as_f64() * src_row[mirror(j as isize + dxs, w)].as_f64();
                                }
                            }
                        }
                        dw[((co * cpg + cig) * kh + ky) * kw + kx] += F::f(acc);
                    }
                }
            }
        }
    }
    dw
}

// ── Bilinear sampling helpers ───────────────────────────────────────────

/// Four (flat_offset, weight) corner entries for sampling at (y, x);
/// `None` marks out-of-range corners (zero padding).
fn corner_weights(y: f64, x: f64, h: usize, w: usize) -> [Option<(usize, f64)>; 4] {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let mut out = [None; 4];
    let weights = [(0, 0, (1.0 - fy) * (1.0 - fx)), (0, 1, (1.0 - fy) * fx), (1, 0, fy * (1.0 - fx)), (1, 1, fy * fx)];
    for (k, (dy, dx, wgt)) in weights.into_iter().enumerate() {
        let yy = y0 as isize + dy;
        let xx = x0 as isize + dx;
        if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
            out[k] = Some((yy as usize * w + xx as usize, wgt));
        }
    }
    out
}

/// Corners plus the derivative of each corner weight with respect to y and x.
#[allow(clippy::type_complexity)]
fn corner_weights_and_derivs(y: f64, x: f64, h: usize, w: usize) -> ([Option<(usize, f64)>; 4], [f64; 4], [f64; 4]) {
    let corners = corner_weights(y, x, h, w);
    let fy = y - y.floor();
    let fx = x - x.floor();
    let dwy = [-(1.0 - fx), -fx, 1.0 - fx, fx];
    let dwx = [-(1.0 - fy), 1.0 - fy, -fy, fy];
    (corners, dwy, dwx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    /// Nested-loop reference convolution, structured nothing like the
    /// row-sliced implementation.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&[f64]>,
        groups: usize,
        pad: Pad,
    ) -> Tensor<f64> {
        let (n, cin, h, ww) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, cpg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let copg = cout / groups;
        let mut out = Tensor::zeros(&[n, cout, h, ww]);
        for ni in 0..n {
            for co in 0..cout {
                for i in 0..h as isize {
                    for j in 0..ww as isize {
                        let mut acc = bias.map(|b| b[co]).unwrap_or(0.0);
                        for cig in 0..cpg {
                            let ci = (co / copg) * cpg + cig;
                            for ky in 0..kh as isize {
                                for kx in 0..kw as isize {
                                    let si = i + ky - (kh / 2) as isize;
                                    let sj = j + kx - (kw / 2) as isize;
                                    let xv = match pad {
                                        Pad::Zero => {
                                            if si < 0 || si >= h as isize || sj < 0 || sj >= ww as isize {
                                                0.0
                                            } else {
                                                x.data()[((ni * cin + ci) * h + si as usize) * ww + sj as usize]
                                            }
                                        }
                                        Pad::Reflect => {
                                            x.data()[((ni * cin + ci) * h + mirror(si, h)) * ww + mirror(sj, ww)]
                                        }
                                    };
                                    acc += xv * w.data()[((co * cpg + cig) * kh + ky as usize) * kw + kx as usize];
                                }
                            }
                        }
                        out.data_mut()[((ni * cout + co) * h + i as usize) * ww + j as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_box_sum_of_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = t.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = t.conv2d(x, w, None, 1, Pad::Zero).unwrap();
        let d = t.data(y);
        assert_eq!(d[4], 9.0, "center sums all nine neighbors");
        for corner in [0, 2, 6, 8] {
            assert_eq!(d[corner], 4.0, "corner sums the four available neighbors");
        }
    }

    #[test]
    fn conv2d_identity_kernel_is_identity_bit_for_bit() {
        let mut r = rng(1);
        let xt = rand_tensor(&[2, 3, 5, 4], &mut r);
        let mut w = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            w.data_mut()[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let mut t = Tape::<f64>::new();
        let x = t.constant(xt.clone());
        let wid = t.constant(w);
        let y = t.conv2d(x, wid, None, 1, Pad::Zero).unwrap();
        assert_eq!(t.data(y), xt.data());
    }

    #[test]
    fn conv2d_matches_nested_loop_oracle() {
        let mut r = rng(2);
        for (groups, cin, cout, pad) in [(1, 2, 3, Pad::Zero), (1, 2, 3, Pad::Reflect), (2, 2, 2, Pad::Zero), (2, 2, 2, Pad::Reflect)] {
            let xt = rand_tensor(&[1, cin, 5, 5], &mut r);
            let wt = rand_tensor(&[cout, cin / groups, 3, 3], &mut r);
            let bt = rand_tensor(&[cout], &mut r);
            let want = conv_oracle(&xt, &wt, Some(bt.data()), groups, pad);
            let mut t = Tape::<f64>::new();
            let x = t.constant(xt);
            let w = t.constant(wt);
            let b = t.constant(bt);
            let y = t.conv2d(x, w, Some(b), groups, pad).unwrap();
            let diff = crate::tensor::max_abs_diff(&t.value(y), &want);
            assert!(diff <= 1e-12, "groups={groups} pad={pad:?}: max diff {diff}");
        }
    }

    #[test]
    fn conv2d_depthwise_matches_oracle() {
        let mut r = rng(3);
        let xt = rand_tensor(&[1, 2, 5, 5], &mut r);
        let wt = rand_tensor(&[2, 1, 3, 3], &mut r);
        let want = conv_oracle(&xt, &wt, None, 2, Pad::Zero);
        let mut t = Tape::<f64>::new();
        let x = t.constant(xt);
        let w = t.constant(wt);
        let y = t.conv2d(x, w, None, 2, Pad::Zero).unwrap();
        assert!(crate::tensor::max_abs_diff(&t.value(y), &want) <= 1e-12);
    }

    #[test]
    fn conv2d_rejects_bad_groups() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let w = t.constant(Tensor::zeros(&[2, 1, 3, 3]));
        assert!(matches!(t.conv2d(x, w, None, 2, Pad::Zero), Err(crate::Error::Config(_))));
    }

    #[test]
    fn bilinear_center_of_four_pixels() {
        let mut t = Tape::<f64>::new();
        let img = t.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let coords = t.constant(Tensor::new(&[1, 1, 2], vec![0.5, 0.5]).unwrap());
        let y = t.bilinear_sample(img, coords).unwrap();
        assert!((t.data(y)[0] - 1.5).abs() < 1e-15, "mean of the four corners");
    }

    #[test]
    fn bilinear_integer_coords_reproduce_pixels() {
        let mut t = Tape::<f64>::new();
        let img = t.constant(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        let coords = t.constant(Tensor::new(&[1, 4, 2], vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap());
        let y = t.bilinear_sample(img, coords).unwrap();
        assert_eq!(t.data(y), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn bilinear_matches_four_corner_oracle() {
        let mut r = rng(4);
        let img = rand_tensor(&[1, 3, 6, 5], &mut r);
        let (h, w) = (6usize, 5usize);
        let pts: Vec<f64> = (0..8).flat_map(|_| [r.gen_range(-1.0..h as f64), r.gen_range(-1.0..w as f64)]).collect();
        let coords = Tensor::new(&[1, 8, 2], pts.clone()).unwrap();
        let mut t = Tape::<f64>::new();
        let i = t.constant(img.clone());
        let c = t.constant(coords);
        let y = t.bilinear_sample(i, c).unwrap();
        for pi in 0..8 {
            let (cy, cx) = (pts[pi * 2], pts[pi * 2 + 1]);
            let (y0, x0) = (cy.floor(), cx.floor());
            let (fy, fx) = (cy - y0, cx - x0);
            for ci in 0..3 {
                let at = |yy: isize, xx: isize| -> f64 {
                    if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
                        0.0
                    } else {
                        img.data()[(ci * h + yy as usize) * w + xx as usize]
                    }
                };
                let want = at(y0 as isize, x0 as isize) * (1.0 - fy) * (1.0 - fx)
                    + at(y0 as isize, x0 as isize + 1) * (1.0 - fy) * fx
                    + at(y0 as isize + 1, x0 as isize) * fy * (1.0 - fx)
                    + at(y0 as isize + 1, x0 as isize + 1) * fy * fx;
                let got = t.data(y)[ci * 8 + pi];
                assert!((got - want).abs() <= 1e-12, "point {pi} channel {ci}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        for c in [0.0, -3.5, 11.0] {
            let mut t = Tape::<f64>::new();
            let x = t.constant(Tensor::new(&[1, 4], vec![c; 4]).unwrap());
            let y = t.softmax_stable(x, 1).unwrap();
            for v in t.data(y) {
                assert!((v - 0.25).abs() < 1e-15, "constant logits {c} stay uniform");
            }
        }
    }

    #[test]
    fn softmax_matches_extended_precision_exp_normalize() {
        // Oracle evaluated without max subtraction; safe at these magnitudes.
        let logits = [10.0f64, 0.0, 0.0, 0.0];
        let exps: Vec<f64> = logits.iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[1, 4], logits.to_vec()).unwrap());
        let y = t.softmax_stable(x, 1).unwrap();
        for (got, e) in t.data(y).iter().zip(&exps) {
            assert!((got - e / z).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_outputs_lie_on_simplex() {
        let mut r = rng(5);
        let xt = Tensor::from_fn(&[3, 7], |_| r.gen_range(-40.0..40.0));
        let mut t = Tape::<f64>::new();
        let x = t.constant(xt);
        let y = t.softmax_stable(x, 1).unwrap();
        for row in t.data(y).chunks(7) {
            let s: f64 = row.iter().sum();
            assert!(row.iter().all(|v| *v >= 0.0));
            assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(t.softmax_stable(x, 2), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 9.0]).unwrap(), true);
        let s = t.sum(x).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_square_sum_gives_two_x() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let xx = t.mul(x, x).unwrap();
        let s = t.sum(xx).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]), true);
        let y = t.relu(x).unwrap();
        assert!(matches!(t.backward(y), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn detached_subgraph_gets_no_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let detached = t.constant(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y).unwrap();
        let _unused = t.relu(detached).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
        assert!(t.grad(detached).is_none());
    }

    #[test]
    fn non_finite_forward_is_a_hard_error() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::new(&[1], vec![1.0]).unwrap());
        let b = t.constant(Tensor::new(&[1], vec![0.0]).unwrap());
        assert!(matches!(t.div(a, b), Err(crate::Error::NonFinite { .. })));
    }

    #[test]
    fn shift2d_clamp_replicates_edges() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.shift2d(x, 0, 1, Fill::Clamp).unwrap();
        assert_eq!(t.data(y), &[2.0, 2.0, 4.0, 4.0]);
        let z = t.shift2d(x, 0, 1, Fill::Zero).unwrap();
        assert_eq!(t.data(z), &[2.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn avg_pool_and_upsample_shapes_and_values() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let p = t.avg_pool2(x).unwrap();
        assert_eq!(t.data(p), &[4.0]);
        let u = t.upsample_nearest2(p).unwrap();
        assert_eq!(t.data(u), &[4.0; 4]);
    }

    #[test]
    fn patch_extract_roundtrips_pixels() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64));
        let p = t.patch_extract(x, 2).unwrap();
        assert_eq!(t.shape(p), &[1, 4, 8]);
        // Patch(0,0) of channel 0 holds pixels (0,0),(0,1),(1,0),(1,1).
        assert_eq!(&t.data(p)[..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap());
        let g = t.constant(Tensor::full(&[4], 1.0));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.layer_norm(x, g, b).unwrap();
        for row in t.data(y).chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4, "unit variance up to eps");
        }
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut r = rng(6);
        let a = rand_tensor(&[3, 4], &mut r);
        let b = rand_tensor(&[4, 5], &mut r);
        let mut want = vec![0.0; 15];
        for i in 0..3 {
            for j in 0..5 {
                for k in 0..4 {
                    want[i * 5 + j] += a.data()[i * 4 + k] * b.data()[k * 5 + j];
                }
            }
        }
        let mut t = Tape::<f64>::new();
        let av = t.constant(a);
        let bv = t.constant(b);
        let c = t.matmul(av, bv).unwrap();
        for (got, w) in t.data(c).iter().zip(&want) {
            assert!((got - w).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_transposes() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let y = t.permute(x, &[1, 0]).unwrap();
        assert_eq!(t.shape(y), &[3, 2]);
        assert_eq!(t.data(y), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut r = rng(7);
            let xt = rand_tensor(&[1, 2, 6, 6], &mut r);
            let wt = rand_tensor(&[2, 2, 3, 3], &mut r);
            let mut t = Tape::<f64>::new();
            let x = t.constant(xt);
            let w = t.constant(wt);
            let y = t.conv2d(x, w, None, 1, Pad::Reflect).unwrap();
            let s = t.softmax_stable(y, 1).unwrap();
            t.data(s).to_vec()
        };
        assert_eq!(run(), run());
    }
}
