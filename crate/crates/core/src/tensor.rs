//! Dense f64 tensors and a reverse-mode differentiation graph.
//!
//! The graph is a flat tape: nodes are appended in evaluation order, so the
//! ordering is already topological and `backward` is a single reverse sweep.
//! Graphs are rebuilt per evaluation; there is no persistent tape. Gradients
//! are returned for nodes created with [`Graph::leaf`], which may be weights,
//! inputs, or clipping bounds.

use crate::error::{Error, Result};

/// Row-major dense tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidTensor("non-finite element".to_string()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor from a slice; bound vectors are allowed to carry +inf,
    /// so this skips the finite check that `new` performs.
    pub fn vector_allow_inf(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn vector(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
    },
    /// Elementwise add; `b` may be a 1-D bias broadcast over the channel axis.
    Add {
        a: NodeId,
        b: NodeId,
    },
    Relu {
        input: NodeId,
    },
    /// min(h, z) with one bound per channel of `h`.
    ClipUpper {
        h: NodeId,
        z: NodeId,
    },
    MeanPool {
        input: NodeId,
        k: usize,
    },
    Flatten {
        input: NodeId,
    },
    AffineNorm {
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
    },
    SoftmaxCe {
        logits: NodeId,
        targets: Vec<usize>,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
    ScalarCombine {
        terms: Vec<NodeId>,
        coeffs: Vec<f64>,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        input: NodeId,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    leaf: bool,
}

/// Gradients of a scalar output with respect to the graph's leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Static computation graph, rebuilt per evaluation.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Channel axis of an activation tensor: axis 1 for batched tensors
/// ([B, N] dense or [B, C, H, W] conv), axis 0 for plain vectors.
fn channel_axis(shape: &[usize]) -> usize {
    usize::from(shape.len() > 1)
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    /// Differentiable input; `backward` reports a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, leaf: bool) -> NodeId {
        self.nodes.push(Node { op, value, leaf });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId> {
        if !value.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(op, value, false))
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a), self.shape_of(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                let row = &db[p * n..(p + 1) * n];
                let dst = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in dst.iter_mut().zip(row) {
                    *o += aip * bv;
                }
            }
        }
        self.push_checked(Op::MatMul { a, b }, Tensor { shape: vec![m, n], data: out }, "matmul")
    }

    /// Valid (no padding) stride-1 convolution.
    /// input [B, Cin, H, W], kernel [Cout, Cin, kh, kw] -> [B, Cout, H-kh+1, W-kw+1].
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (si, sk) = (self.shape_of(input), self.shape_of(kernel));
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || si[2] < sk[2] || si[3] < sk[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {si:?}, kernel {sk:?}"),
            });
        }
        let (bs, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let din = self.value(input).data();
        let dk = self.value(kernel).data();
        let mut out = vec![0.0; bs * cout * oh * ow];
        for b in 0..bs {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..cin {
                            for ky in 0..kh {
                                let irow = b * cin * h * w + ic * h * w + (oy + ky) * w + ox;
                                let krow = oc * cin * kh * kw + ic * kh * kw + ky * kw;
                                for kx in 0..kw {
                                    acc += din[irow + kx] * dk[krow + kx];
                                }
                            }
                        }
                        out[b * cout * oh * ow + oc * oh * ow + oy * ow + ox] = acc;
                    }
                }
            }
        }
        self.push_checked(
            Op::Conv2d { input, kernel },
            Tensor { shape: vec![bs, cout, oh, ow], data: out },
            "conv2d",
        )
    }

    /// Elementwise add. `b` may also be a 1-D bias whose length matches the
    /// channel axis of `a`; it is then broadcast over the remaining axes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data = if sa == sb {
            da.iter().zip(db).map(|(x, y)| x + y).collect()
        } else if sb.len() == 1 && sb[0] == sa[channel_axis(&sa)] {
            broadcast_channel(&sa, da, db, |x, y| x + y)
        } else {
            return Err(Error::ShapeMismatch {
                op: "add",
                detail: format!("{sa:?} + {sb:?}"),
            });
        };
        self.push_checked(Op::Add { a, b }, Tensor { shape: sa, data }, "add")
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let t = self.value(input);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push_checked(Op::Relu { input }, out, "relu")
    }

    /// o_i = min(h_i, z_c(i)), one bound per channel of `h`.
    pub fn clip_upper(&mut self, h: NodeId, z: NodeId) -> Result<NodeId> {
        let (sh, sz) = (self.shape_of(h).to_vec(), self.shape_of(z).to_vec());
        if sz.len() != 1 || sz[0] != sh[channel_axis(&sh)] {
            return Err(Error::ShapeMismatch {
                op: "clip_upper",
                detail: format!("activation {sh:?}, bounds {sz:?}"),
            });
        }
        let dh = self.value(h).data();
        let dz = self.value(z).data();
        let data = broadcast_channel(&sh, dh, dz, f64::min);
        self.push_checked(Op::ClipUpper { h, z }, Tensor { shape: sh, data }, "clip_upper")
    }

    /// Non-overlapping k x k mean pooling, stride k; trailing rows/columns
    /// that do not fill a block are dropped.
    pub fn mean_pool(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::ShapeMismatch {
                op: "mean_pool",
                detail: format!("input {s:?}, window {k}"),
            });
        }
        let (bs, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / k, w / k);
        let din = self.value(input).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; bs * c * oh * ow];
        for b in 0..bs {
            for ch in 0..c {
                let base = b * c * h * w + ch * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += din[base + (oy * k + ky) * w + ox * k + kx];
                            }
                        }
                        out[b * c * oh * ow + ch * oh * ow + oy * ow + ox] = acc * inv;
                    }
                }
            }
        }
        self.push_checked(
            Op::MeanPool { input, k },
            Tensor { shape: vec![bs, c, oh, ow], data: out },
            "mean_pool",
        )
    }

    /// [B, ...] -> [B, prod(...)].
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        if s.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "flatten",
                detail: format!("input {s:?}"),
            });
        }
        let rest: usize = s[1..].iter().product();
        let out = Tensor {
            shape: vec![s[0], rest],
            data: self.value(input).data().to_vec(),
        };
        self.push_checked(Op::Flatten { input }, out, "flatten")
    }

    /// Inference-mode normalization: x * scale_c + shift_c per channel.
    pub fn affine_norm(&mut self, input: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let s = self.shape_of(input).to_vec();
        let c = s[channel_axis(&s)];
        let (ss, sh) = (self.shape_of(scale).to_vec(), self.shape_of(shift).to_vec());
        if ss != [c] || sh != [c] {
            return Err(Error::ShapeMismatch {
                op: "affine_norm",
                detail: format!("input {s:?}, scale {ss:?}, shift {sh:?}"),
            });
        }
        let di = self.value(input).data();
        let dsc = self.value(scale).data().to_vec();
        let dsh = self.value(shift).data();
        let mut data = broadcast_channel(&s, di, &dsc, |x, y| x * y);
        let shifted = broadcast_channel(&s, &data, dsh, |x, y| x + y);
        data = shifted;
        self.push_checked(
            Op::AffineNorm { input, scale, shift },
            Tensor { shape: s, data },
            "affine_norm",
        )
    }

    /// Mean softmax cross-entropy of [B, C] logits against target class indices.
    pub fn softmax_ce(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.shape_of(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || targets.iter().any(|&t| t >= s[1]) {
            return Err(Error::ShapeMismatch {
                op: "softmax_ce",
                detail: format!("logits {s:?}, {} targets", targets.len()),
            });
        }
        let (bs, c) = (s[0], s[1]);
        let d = self.value(logits).data();
        let mut loss = 0.0;
        for b in 0..bs {
            let row = &d[b * c..(b + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[targets[b]];
        }
        loss /= bs as f64;
        self.push_checked(
            Op::SoftmaxCe { logits, targets: targets.to_vec() },
            Tensor::scalar(loss),
            "softmax_ce",
        )
    }

    /// Mean squared error over all elements of two same-shape tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mse",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let n = da.len() as f64;
        let loss = da
            .iter()
            .zip(db)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push_checked(Op::Mse { a, b }, Tensor::scalar(loss), "mse")
    }

    /// Weighted sum of scalar nodes: sum_i coeffs[i] * terms[i].
    pub fn scalar_combine(&mut self, terms: &[NodeId], coeffs: &[f64]) -> Result<NodeId> {
        if terms.len() != coeffs.len() || terms.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "scalar_combine",
                detail: format!("{} terms, {} coeffs", terms.len(), coeffs.len()),
            });
        }
        let mut acc = 0.0;
        for (&t, &c) in terms.iter().zip(coeffs) {
            let v = self.value(t);
            if !v.is_scalar() {
                return Err(Error::ShapeMismatch {
                    op: "scalar_combine",
                    detail: format!("term with shape {:?}", v.shape()),
                });
            }
            acc += c * v.item();
        }
        self.push_checked(
            Op::ScalarCombine { terms: terms.to_vec(), coeffs: coeffs.to_vec() },
            Tensor::scalar(acc),
            "scalar_combine",
        )
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape_of(a).to_vec(), self.shape_of(b).to_vec());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: "mul",
                detail: format!("{sa:?} vs {sb:?}"),
            });
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data = da.iter().zip(db).map(|(x, y)| x * y).collect();
        self.push_checked(Op::Mul { a, b }, Tensor { shape: sa, data }, "mul")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(input).data().iter().sum();
        self.push_checked(Op::Sum { input }, Tensor::scalar(total), "sum")
    }

    /// Reverse sweep from a scalar output. Returns dOutput/dLeaf for every
    /// node created with [`Graph::leaf`]. Visits each node exactly once.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_val = self.value(output);
        if !out_val.is_scalar() {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|nd| vec![0.0; nd.value.numel()]).collect();
        grads[output.0][0] = 1.0;

        for i in (0..=output.0).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            match &self.nodes[i].op {
                Op::Leaf | Op::Constant => {
                    grads[i] = g;
                    continue;
                }
                Op::MatMul { a, b } => {
                    let sa = self.shape_of(*a);
                    let (m, k) = (sa[0], sa[1]);
                    let nn = self.shape_of(*b)[1];
                    let da = self.value(*a).data();
                    let db = self.value(*b).data();
                    // dA = G . B^T ; dB = A^T . G
                    let ga = &mut grads[a.0];
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..nn {
                                acc += g[r * nn + j] * db[p * nn + j];
                            }
                            ga[r * k + p] += acc;
                        }
                    }
                    let gb = &mut grads[b.0];
                    for p in 0..k {
                        for j in 0..nn {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += da[r * k + p] * g[r * nn + j];
                            }
                            gb[p * nn + j] += acc;
                        }
                    }
                }
                Op::Conv2d { input, kernel } => {
                    let si = self.shape_of(*input);
                    let sk = self.shape_of(*kernel);
                    let (bs, cin, h, w) = (si[0], si[1], si[2], si[3]);
                    let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let din = self.value(*input).data().to_vec();
                    let dk = self.value(*kernel).data().to_vec();
                    {
                        let gi = &mut grads[input.0];
                        for b in 0..bs {
                            for oc in 0..cout {
                                for oy in 0..oh {
                                    for ox in 0..ow {
                                        let gv = g[b * cout * oh * ow + oc * oh * ow + oy * ow + ox];
                                        if gv == 0.0 {
                                            continue;
                                        }
                                        for ic in 0..cin {
                                            for ky in 0..kh {
                                                for kx in 0..kw {
                                                    gi[b * cin * h * w
                                                        + ic * h * w
                                                        + (oy + ky) * w
                                                        + (ox + kx)] +=
                                                        gv * dk[oc * cin * kh * kw + ic * kh * kw + ky * kw + kx];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let gk = &mut grads[kernel.0];
                    for b in 0..bs {
                        for oc in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[b * cout * oh * ow + oc * oh * ow + oy * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ic in 0..cin {
                                        for ky in 0..kh {
                                            for kx in 0..kw {
                                                gk[oc * cin * kh * kw + ic * kh * kw + ky * kw + kx] += gv
                                                    * din[b * cin * h * w
                                                        + ic * h * w
                                                        + (oy + ky) * w
                                                        + (ox + kx)];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    let sa = self.shape_of(*a).to_vec();
                    let sb = self.shape_of(*b).to_vec();
                    for (ga, &gv) in grads[a.0].iter_mut().zip(&g) {
                        *ga += gv;
                    }
                    if sa == sb {
                        for (gb, &gv) in grads[b.0].iter_mut().zip(&g) {
                            *gb += gv;
                        }
                    } else {
                        // bias: sum gradient over broadcast positions
                        accumulate_channel(&sa, &g, &mut grads[b.0]);
                    }
                }
                Op::Relu { input } => {
                    let din = self.value(*input).data();
                    for ((gi, &gv), &x) in grads[input.0].iter_mut().zip(&g).zip(din) {
                        if x > 0.0 {
                            *gi += gv;
                        }
                    }
                }
                Op::ClipUpper { h, z } => {
                    let sh = self.shape_of(*h).to_vec();
                    let dh = self.value(*h).data().to_vec();
                    let dz = self.value(*z).data().to_vec();
                    let axis = channel_axis(&sh);
                    let (outer, c, inner) = split_axes(&sh, axis);
                    {
                        // grad w.r.t. h: passes where h <= z (tie resolved to h)
                        let gh = &mut grads[h.0];
                        let mut idx = 0;
                        for _ in 0..outer {
                            for ch in 0..c {
                                for _ in 0..inner {
                                    if dh[idx] <= dz[ch] {
                                        gh[idx] += g[idx];
                                    }
                                    idx += 1;
                                }
                            }
                        }
                    }
                    // grad w.r.t. z: sums where h > z
                    let gz = &mut grads[z.0];
                    let mut idx = 0;
                    for _ in 0..outer {
                        for ch in 0..c {
                            for _ in 0..inner {
                                if dh[idx] > dz[ch] {
                                    gz[ch] += g[idx];
                                }
                                idx += 1;
                            }
                        }
                    }
                }
                Op::MeanPool { input, k } => {
                    let s = self.shape_of(*input);
                    let (bs, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let (oh, ow) = (h / k, w / k);
                    let inv = 1.0 / (k * k) as f64;
                    let gi = &mut grads[input.0];
                    for b in 0..bs {
                        for ch in 0..c {
                            let base = b * c * h * w + ch * h * w;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[b * c * oh * ow + ch * oh * ow + oy * ow + ox] * inv;
                                    for ky in 0..*k {
                                        for kx in 0..*k {
                                            gi[base + (oy * k + ky) * w + ox * k + kx] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Flatten { input } => {
                    for (gi, &gv) in grads[input.0].iter_mut().zip(&g) {
                        *gi += gv;
                    }
                }
                Op::AffineNorm { input, scale, shift } => {
                    let s = self.shape_of(*input).to_vec();
                    let di = self.value(*input).data().to_vec();
                    let dsc = self.value(*scale).data().to_vec();
                    let axis = channel_axis(&s);
                    let (outer, c, inner) = split_axes(&s, axis);
                    {
                        let gi = &mut grads[input.0];
                        let mut idx = 0;
                        for _ in 0..outer {
                            for ch in 0..c {
                                for _ in 0..inner {
                                    gi[idx] += g[idx] * dsc[ch];
                                    idx += 1;
                                }
                            }
                        }
                    }
                    {
                        let gs = &mut grads[scale.0];
                        let mut idx = 0;
                        for _ in 0..outer {
                            for ch in 0..c {
                                for _ in 0..inner {
                                    gs[ch] += g[idx] * di[idx];
                                    idx += 1;
                                }
                            }
                        }
                    }
                    let gb = &mut grads[shift.0];
                    let mut idx = 0;
                    for _ in 0..outer {
                        for ch in 0..c {
                            for _ in 0..inner {
                                gb[ch] += g[idx];
                                idx += 1;
                            }
                        }
                    }
                }
                Op::SoftmaxCe { logits, targets } => {
                    let s = self.shape_of(*logits);
                    let (bs, c) = (s[0], s[1]);
                    let d = self.value(*logits).data();
                    let gl = &mut grads[logits.0];
                    let gv = g[0] / bs as f64;
                    for b in 0..bs {
                        let row = &d[b * c..(b + 1) * c];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..c {
                            let p = exps[j] / sum;
                            let t = if j == targets[b] { 1.0 } else { 0.0 };
                            gl[b * c + j] += gv * (p - t);
                        }
                    }
                }
                Op::Mse { a, b } => {
                    let da = self.value(*a).data().to_vec();
                    let db = self.value(*b).data().to_vec();
                    let scale = 2.0 * g[0] / da.len() as f64;
                    for (i, (&x, &y)) in da.iter().zip(&db).enumerate() {
                        grads[a.0][i] += scale * (x - y);
                    }
                    for (i, (&x, &y)) in da.iter().zip(&db).enumerate() {
                        grads[b.0][i] -= scale * (x - y);
                    }
                }
                Op::ScalarCombine { terms, coeffs } => {
                    for (&t, &c) in terms.iter().zip(coeffs) {
                        grads[t.0][0] += g[0] * c;
                    }
                }
                Op::Mul { a, b } => {
                    let da = self.value(*a).data().to_vec();
                    let db = self.value(*b).data().to_vec();
                    for (i, &gv) in g.iter().enumerate() {
                        grads[a.0][i] += gv * db[i];
                    }
                    for (i, &gv) in g.iter().enumerate() {
                        grads[b.0][i] += gv * da[i];
                    }
                }
                Op::Sum { input } => {
                    for gi in grads[input.0].iter_mut() {
                        *gi += g[0];
                    }
                }
            }
        }

        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(n);
        for (i, node) in self.nodes.iter().enumerate() {
            if node.leaf {
                let t = Tensor {
                    shape: node.value.shape.clone(),
                    data: std::mem::take(&mut grads[i]),
                };
                if !t.data.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                out.push(Some(t));
            } else {
                out.push(None);
            }
        }
        Ok(Gradients { grads: out })
    }
}

/// Apply `f(x, per_channel)` elementwise, broadcasting a 1-D vector over the
/// channel axis of `shape`.
fn broadcast_channel(shape: &[usize], x: &[f64], per_channel: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let axis = channel_axis(shape);
    let (outer, c, inner) = split_axes(shape, axis);
    let mut out = Vec::with_capacity(x.len());
    let mut idx = 0;
    for _ in 0..outer {
        for ch in 0..c {
            for _ in 0..inner {
                out.push(f(x[idx], per_channel[ch]));
                idx += 1;
            }
        }
    }
    out
}

/// Accumulate gradient over broadcast positions into a per-channel vector.
fn accumulate_channel(shape: &[usize], g: &[f64], out: &mut [f64]) {
    let axis = channel_axis(shape);
    let (outer, c, inner) = split_axes(shape, axis);
    let mut idx = 0;
    for _ in 0..outer {
        for ch in 0..c {
            for _ in 0..inner {
                out[ch] += g[idx];
                idx += 1;
            }
        }
    }
}

fn split_axes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Central finite differences of a scalar function, coordinate by coordinate:
/// (fn(x + eps e_i) - fn(x - eps e_i)) / (2 eps). Gradient-check oracle.
pub fn finite_difference<F>(f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::InvalidConfig("finite_difference requires eps > 0".to_string()));
    }
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let hi = f(&probe)?;
        probe.data[i] = orig - eps;
        let lo = f(&probe)?;
        probe.data[i] = orig;
        grad[i] = (hi - lo) / (2.0 * eps);
    }
    Tensor::new(x.shape.clone(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Independent loop-nest convolution oracle, written before the engine op.
    fn conv_oracle(input: &[f64], h: usize, w: usize, kernel: &[f64], kh: usize, kw: usize) -> Vec<f64> {
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let mut out = vec![0.0; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        acc += input[(oy + ky) * w + (ox + kx)] * kernel[ky * kw + kx];
                    }
                }
                out[oy * ow + ox] = acc;
            }
        }
        out
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[-1.0, 0.0, 2.5]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn clip_upper_forward() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::vector(&[0.2, 3.0]).unwrap());
        let z = g.constant(Tensor::vector(&[1.0, 1.0]).unwrap());
        let y = g.clip_upper(h, z).unwrap();
        assert_eq!(g.value(y).data(), &[0.2, 1.0]);
    }

    #[test]
    fn conv2d_matches_oracle() {
        let input: Vec<f64> = (0..16).map(|i| (i as f64) * 0.25 - 1.0).collect();
        let kernel = vec![1.0, -0.5, 0.25, 2.0];
        let expected = conv_oracle(&input, 4, 4, &kernel, 2, 2);

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 1, 4, 4], input).unwrap());
        let k = g.constant(Tensor::new(vec![1, 1, 2, 2], kernel).unwrap());
        let y = g.conv2d(x, k).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        for (a, b) in g.value(y).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_mean_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[-1.0, 2.0]).unwrap());
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let loss = g.scalar_combine(&[s], &[0.5]).unwrap(); // mean of 2 elements
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn clip_gradient_wrt_bound() {
        for (hv, zv, want) in [(3.0, 1.0, 1.0), (0.2, 1.0, 0.0)] {
            let mut g = Graph::new();
            let h = g.constant(Tensor::vector(&[hv]).unwrap());
            let z = g.leaf(Tensor::vector(&[zv]).unwrap());
            let c = g.clip_upper(h, z).unwrap();
            let out = g.sum(c).unwrap();
            let grads = g.backward(out).unwrap();
            assert_eq!(grads.get(z).unwrap().data(), &[want]);
        }
    }

    #[test]
    fn clip_tie_resolves_to_activation() {
        let mut g = Graph::new();
        let h = g.leaf(Tensor::vector(&[1.0]).unwrap());
        let z = g.leaf(Tensor::vector(&[1.0]).unwrap());
        let c = g.clip_upper(h, z).unwrap();
        let out = g.sum(c).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.get(h).unwrap().data(), &[1.0]);
        assert_eq!(grads.get(z).unwrap().data(), &[0.0]);
    }

    #[test]
    fn finite_difference_sum_of_squares() {
        let f = |t: &Tensor| Ok(t.data().iter().map(|v| v * v).sum());
        let g = finite_difference(f, &Tensor::vector(&[3.0]).unwrap(), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_difference_constant_is_zero() {
        let f = |_: &Tensor| Ok(42.0);
        let g = finite_difference(f, &Tensor::vector(&[1.0, 2.0]).unwrap(), 1e-4).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_diagnosed() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]).unwrap());
        let r = g.relu(x).unwrap();
        assert!(matches!(g.backward(r), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn softmax_ce_of_uniform_logits() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap());
        let loss = g.softmax_ce(l, &[1, 3]).unwrap();
        assert!((g.value(loss).item() - (4.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn three_layer_network_gradient_matches_finite_difference() {
        // random-ish fixed weights; checks every leaf coordinate of w1
        let w1 = Tensor::new(vec![3, 4], (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) * 0.21).collect()).unwrap();
        let w2 = Tensor::new(vec![4, 3], (0..12).map(|i| ((i * 5 % 13) as f64 - 6.0) * 0.17).collect()).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.3, -0.8, 0.5, 1.1, 0.2, -0.4]).unwrap();

        let eval = |w: &Tensor| -> Result<f64> {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let w1n = g.constant(w.clone());
            let w2n = g.constant(w2.clone());
            let h = g.matmul(xn, w1n)?;
            let h = g.relu(h)?;
            let o = g.matmul(h, w2n)?;
            let loss = g.softmax_ce(o, &[0, 2])?;
            Ok(g.value(loss).item())
        };

        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let w1n = g.leaf(w1.clone());
        let w2n = g.constant(w2.clone());
        let h = g.matmul(xn, w1n).unwrap();
        let h = g.relu(h).unwrap();
        let o = g.matmul(h, w2n).unwrap();
        let loss = g.softmax_ce(o, &[0, 2]).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(w1n).unwrap();

        let numeric = finite_difference(eval, &w1, 1e-5).unwrap();
        for (a, b) in analytic.data().iter().zip(numeric.data()) {
            let denom = a.abs().max(b.abs()).max(1.0);
            assert!((a - b).abs() / denom < 1e-5, "{a} vs {b}");
        }
    }
}
