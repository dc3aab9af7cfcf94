use super::{shape_err, Element, ParamId, ParamStore, Tensor, TensorError};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    // x has its channel axis at dim 1 (2-D [N,C] or 4-D [N,C,H,W]); c is [C].
    ChannelAdd(Var, Var),
    ChannelSub(Var, Var),
    ChannelMul(Var, Var),
    ChannelDiv(Var, Var),
    ChannelMean(Var),
    Relu(Var),
    Sqrt(Var),
    Softplus(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Reshape(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, k: Var, stride: usize, padding: usize },
    AvgPool2d { x: Var, k: usize, stride: usize },
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Box<[usize]> },
    MeanAll(Var),
    SumAll(Var),
}

struct Node<E: Element> {
    data: Vec<E>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<E>>,
}

/// Reverse-mode tape. Built by one forward pass, consumed by one
/// [`Graph::backward`]; gradients w.r.t. leaves stay readable afterwards.
pub struct Graph<E: Element = f64> {
    nodes: Vec<Node<E>>,
    bindings: Vec<(u64, ParamId, Var)>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Channel extent and per-channel stride for a tensor with channel axis 1.
fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize), TensorError> {
    match shape.len() {
        2 => Ok((shape[1], 1)),
        4 => Ok((shape[1], shape[2] * shape[3])),
        _ => Err(shape_err(op, format!("expected 2-D or 4-D input, got {shape:?}"))),
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), bindings: Vec::new() }
    }

    fn push(&mut self, data: Vec<E>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { data, shape, op, needs_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a tensor as a leaf; `requires_grad` is taken from the tensor.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Insert a constant leaf that never receives gradients.
    pub fn constant(&mut self, t: &Tensor<E>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    /// Insert a parameter leaf and remember where its gradient belongs.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<E>, id: ParamId) -> Var {
        let p = store.get(id);
        let needs = p.value.requires_grad && !p.frozen;
        let v = self.push(p.value.data().to_vec(), p.value.shape().to_vec(), Op::Leaf, needs);
        if needs {
            self.bindings.push((store.store_id, id, v));
        }
        v
    }

    /// Copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let data = self.nodes[v.0].data.clone();
        let shape = self.nodes[v.0].shape.clone();
        self.push(data, shape, Op::Leaf, false)
    }

    pub(crate) fn param_bindings(&self) -> &[(u64, ParamId, Var)] {
        &self.bindings
    }

    pub fn data(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<E> {
        Tensor::new(self.nodes[v.0].data.clone(), self.nodes[v.0].shape.clone()).expect("node invariant")
    }

    pub fn check_finite(&self, v: Var, context: &str) -> Result<(), TensorError> {
        if self.nodes[v.0].data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { context: context.to_string() })
        }
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(E, E) -> E,
        op: Op,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op_name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let ce = E::from_f64(c);
        let data: Vec<E> = self.nodes[x.0].data.iter().map(|&v| v + ce).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(data, shape, Op::AddScalar(x), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ce = E::from_f64(c);
        let data: Vec<E> = self.nodes[x.0].data.iter().map(|&v| v * ce).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(data, shape, Op::Scale(x, c), needs)
    }

    fn unary(&mut self, x: Var, f: impl Fn(E) -> E, op: Op) -> Var {
        let data: Vec<E> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x);
        self.push(data, shape, op, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.maximum(E::ZERO), Op::Relu(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    // ── Per-channel broadcasts (the only broadcasting offered) ─────────

    fn channel_binary(
        &mut self,
        x: Var,
        c: Var,
        op_name: &'static str,
        f: impl Fn(E, E) -> E,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (channels, inner) = channel_layout(self.shape(x), op_name)?;
        if self.shape(c) != [channels] {
            return Err(shape_err(
                op_name,
                format!("channel vector {:?} does not match {} channels", self.shape(c), channels),
            ));
        }
        let cdata = &self.nodes[c.0].data;
        let data: Vec<E> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, cdata[(i / inner) % channels]))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.needs(x) || self.needs(c);
        Ok(self.push(data, shape, op, needs))
    }

    pub fn channel_add(&mut self, x: Var, c: Var) -> Result<Var, TensorError> {
        self.channel_binary(x, c, "channel_add", |a, b| a + b, Op::ChannelAdd(x, c))
    }

    pub fn channel_sub(&mut self, x: Var, c: Var) -> Result<Var, TensorError> {
        self.channel_binary(x, c, "channel_sub", |a, b| a - b, Op::ChannelSub(x, c))
    }

    pub fn channel_mul(&mut self, x: Var, c: Var) -> Result<Var, TensorError> {
        self.channel_binary(x, c, "channel_mul", |a, b| a * b, Op::ChannelMul(x, c))
    }

    pub fn channel_div(&mut self, x: Var, c: Var) -> Result<Var, TensorError> {
        self.channel_binary(x, c, "channel_div", |a, b| a / b, Op::ChannelDiv(x, c))
    }

    /// Mean over every axis except the channel axis (dim 1). `[N,C,H,W]` or
    /// `[N,C]` to `[C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let (channels, inner) = channel_layout(self.shape(x), "channel_mean")?;
        let n = self.nodes[x.0].data.len();
        if n == 0 {
            return Err(TensorError::Empty { op: "channel_mean" });
        }
        let count = E::from_f64((n / channels) as f64);
        let mut sums = vec![E::ZERO; channels];
        for (i, &v) in self.nodes[x.0].data.iter().enumerate() {
            sums[(i / inner) % channels] = sums[(i / inner) % channels] + v;
        }
        for s in &mut sums {
            *s = *s / count;
        }
        let needs = self.needs(x);
        Ok(self.push(sums, vec![channels], Op::ChannelMean(x), needs))
    }

    // ── Shape ops ───────────────────────────────────────────────────────

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a).len() != 1 || self.shape(b).len() != 1 {
            return Err(shape_err(
                "concat",
                format!("expected 1-D operands, got {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut data = self.nodes[a.0].data.clone();
        data.extend_from_slice(&self.nodes[b.0].data);
        let len = data.len();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![len], Op::Concat(a, b), needs))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        if self.shape(x).len() != 1 || start + len > self.nodes[x.0].data.len() {
            return Err(shape_err(
                "slice",
                format!("[{start}..{}] out of 1-D shape {:?}", start + len, self.shape(x)),
            ));
        }
        let data = self.nodes[x.0].data[start..start + len].to_vec();
        let needs = self.needs(x);
        Ok(self.push(data, vec![len], Op::Slice { x, start }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} to {:?}", self.shape(x), shape),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        Ok(self.push(data, shape, Op::Reshape(x), needs))
    }

    // ── Linear algebra / network ops ────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, d, k) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; n * k];
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        for i in 0..n {
            for p in 0..d {
                let av = ad[i * d + p];
                for j in 0..k {
                    out[i * k + j] = out[i * k + j] + av * bd[p * k + j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, vec![n, k], Op::MatMul(a, b), needs))
    }

    /// Affine map `x @ w + bias` for `x: [N,D]`, `w: [D,K]`, `bias: [K]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.channel_add(y, bias)
    }

    /// Cross-correlation of `x: [N,C,H,W]` with `k: [F,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(shape_err("conv2d", format!("input {sx:?}, kernel {sk:?}")));
        }
        if sx[1] != sk[1] {
            return Err(shape_err(
                "conv2d",
                format!("input channels {} != kernel channels {}", sx[1], sk[1]),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be positive".into()));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sk[0], sk[2], sk[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})"),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let xd = &self.nodes[x.0].data;
        let kd = &self.nodes[k.0].data;
        let mut out = vec![E::ZERO; n * f * oh * ow];
        for bn in 0..n {
            for of in 0..f {
                for r in 0..oh {
                    for s in 0..ow {
                        let mut acc = E::ZERO;
                        for ic in 0..c {
                            for i in 0..kh {
                                let ih = (r * stride + i) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for j in 0..kw {
                                    let iw = (s * stride + j) as isize - padding as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let xi = ((bn * c + ic) * h + ih as usize) * w + iw as usize;
                                    let ki = ((of * c + ic) * kh + i) * kw + j;
                                    acc = acc + xd[xi] * kd[ki];
                                }
                            }
                        }
                        out[((bn * f + of) * oh + r) * ow + s] = acc;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(k);
        Ok(self.push(out, vec![n, f, oh, ow], Op::Conv2d { x, k, stride, padding }, needs))
    }

    /// Non-padded average pooling with a `k x k` window.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("avg_pool2d", format!("expected 4-D input, got {sx:?}")));
        }
        if k == 0 || stride == 0 || sx[2] < k || sx[3] < k {
            return Err(shape_err(
                "avg_pool2d",
                format!("window {k} stride {stride} on {}x{}", sx[2], sx[3]),
            ));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let inv = E::from_f64(1.0 / (k * k) as f64);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![E::ZERO; n * c * oh * ow];
        for bn in 0..n {
            for ch in 0..c {
                for r in 0..oh {
                    for s in 0..ow {
                        let mut acc = E::ZERO;
                        for i in 0..k {
                            for j in 0..k {
                                acc = acc
                                    + xd[((bn * c + ch) * h + r * stride + i) * w + s * stride + j];
                            }
                        }
                        out[((bn * c + ch) * oh + r) * ow + s] = acc * inv;
                    }
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, vec![n, c, oh, ow], Op::AvgPool2d { x, k, stride }, needs))
    }

    /// Spatial mean: `[N,C,H,W]` to `[N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(shape_err("global_avg_pool", format!("expected 4-D input, got {sx:?}")));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let inv = E::from_f64(1.0 / (h * w) as f64);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![E::ZERO; n * c];
        for bn in 0..n {
            for ch in 0..c {
                let base = (bn * c + ch) * h * w;
                let mut acc = E::ZERO;
                for i in 0..h * w {
                    acc = acc + xd[base + i];
                }
                out[bn * c + ch] = acc * inv;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(out, vec![n, c], Op::GlobalAvgPool(x), needs))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max subtraction. Returns a scalar.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let classes = s[1];
        for &l in labels {
            if l >= classes {
                return Err(TensorError::LabelOutOfRange { label: l, classes });
            }
        }
        let ld = &self.nodes[logits.0].data;
        let mut total = E::ZERO;
        for (b, &label) in labels.iter().enumerate() {
            let row = &ld[b * classes..(b + 1) * classes];
            let max = row.iter().copied().fold(row[0], |m, v| m.maximum(v));
            let mut sum = E::ZERO;
            for &v in row {
                sum = sum + (v - max).exp();
            }
            total = total + (sum.ln() + max - row[label]);
        }
        let loss = total / E::from_f64(labels.len() as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![],
            Op::SoftmaxCrossEntropy { logits, labels: labels.into() },
            needs,
        ))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len();
        let mut acc = E::ZERO;
        for &v in &self.nodes[x.0].data {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(vec![acc / E::from_f64(n as f64)], vec![], Op::MeanAll(x), needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = E::ZERO;
        for &v in &self.nodes[x.0].data {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(vec![acc], vec![], Op::SumAll(x), needs)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// reachable node that needs them; sub-graphs that no differentiable
    /// leaf feeds are skipped entirely.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.shape(loss).to_vec() });
        }
        self.nodes[loss.0].grad = Some(vec![E::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("checked above");
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, contrib: impl Fn(usize) -> E) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].data.len();
        if self.nodes[v.0].grad.is_none() {
            self.nodes[v.0].grad = Some(vec![E::ZERO; n]);
        }
        let buf = self.nodes[v.0].grad.as_mut().expect("just set");
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = *slot + contrib(i);
        }
    }

    fn propagate(&mut self, out: usize, op: &Op, g: &[E]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(a, |i| g[i]);
                self.accum(b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.accum(a, |i| g[i]);
                self.accum(b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let bd = self.nodes[b.0].data.clone();
                self.accum(a, |i| g[i] * bd[i]);
                let ad = self.nodes[a.0].data.clone();
                self.accum(b, |i| g[i] * ad[i]);
            }
            Op::Div(a, b) => {
                let ad = self.nodes[a.0].data.clone();
                let bd = self.nodes[b.0].data.clone();
                self.accum(a, |i| g[i] / bd[i]);
                self.accum(b, |i| -g[i] * ad[i] / (bd[i] * bd[i]));
            }
            Op::AddScalar(x) => self.accum(x, |i| g[i]),
            Op::Scale(x, c) => {
                let ce = E::from_f64(c);
                self.accum(x, |i| g[i] * ce);
            }
            Op::ChannelAdd(x, c) | Op::ChannelSub(x, c) => {
                let sign = if matches!(op, Op::ChannelSub(..)) { -E::ONE } else { E::ONE };
                self.accum(x, |i| g[i]);
                if self.nodes[c.0].needs_grad {
                    let (channels, inner) =
                        channel_layout(&self.nodes[x.0].shape, "channel backward").expect("validated");
                    let mut dc = vec![E::ZERO; channels];
                    for (i, &gv) in g.iter().enumerate() {
                        let ch = (i / inner) % channels;
                        dc[ch] = dc[ch] + sign * gv;
                    }
                    self.accum(c, |i| dc[i]);
                }
            }
            Op::ChannelMul(x, c) => {
                let (channels, inner) =
                    channel_layout(&self.nodes[x.0].shape, "channel backward").expect("validated");
                let cd = self.nodes[c.0].data.clone();
                self.accum(x, |i| g[i] * cd[(i / inner) % channels]);
                if self.nodes[c.0].needs_grad {
                    let xd = &self.nodes[x.0].data;
                    let mut dc = vec![E::ZERO; channels];
                    for (i, &gv) in g.iter().enumerate() {
                        let ch = (i / inner) % channels;
                        dc[ch] = dc[ch] + gv * xd[i];
                    }
                    self.accum(c, |i| dc[i]);
                }
            }
            Op::ChannelDiv(x, c) => {
                let (channels, inner) =
                    channel_layout(&self.nodes[x.0].shape, "channel backward").expect("validated");
                let cd = self.nodes[c.0].data.clone();
                self.accum(x, |i| g[i] / cd[(i / inner) % channels]);
                if self.nodes[c.0].needs_grad {
                    let xd = &self.nodes[x.0].data;
                    let mut dc = vec![E::ZERO; channels];
                    for (i, &gv) in g.iter().enumerate() {
                        let ch = (i / inner) % channels;
                        dc[ch] = dc[ch] - gv * xd[i] / (cd[ch] * cd[ch]);
                    }
                    self.accum(c, |i| dc[i]);
                }
            }
            Op::ChannelMean(x) => {
                let (channels, inner) =
                    channel_layout(&self.nodes[x.0].shape, "channel backward").expect("validated");
                let count = E::from_f64((self.nodes[x.0].data.len() / channels) as f64);
                self.accum(x, |i| g[(i / inner) % channels] / count);
            }
            Op::Relu(x) => {
                let xd = self.nodes[x.0].data.clone();
                self.accum(x, |i| if xd[i] > E::ZERO { g[i] } else { E::ZERO });
            }
            Op::Sqrt(x) => {
                let od = self.nodes[out].data.clone();
                let two = E::from_f64(2.0);
                self.accum(x, |i| g[i] / (two * od[i]));
            }
            Op::Softplus(x) => {
                let xd = self.nodes[x.0].data.clone();
                self.accum(x, |i| g[i] * sigmoid(xd[i]));
            }
            Op::Concat(a, b) => {
                let na = self.nodes[a.0].data.len();
                self.accum(a, |i| g[i]);
                self.accum(b, |i| g[na + i]);
            }
            Op::Slice { x, start } => {
                let len = self.nodes[out].data.len();
                self.accum(x, |i| {
                    if i >= start && i < start + len {
                        g[i - start]
                    } else {
                        E::ZERO
                    }
                });
            }
            Op::Reshape(x) => self.accum(x, |i| g[i]),
            Op::MatMul(a, b) => {
                let (n, d) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let k = self.nodes[b.0].shape[1];
                if self.nodes[a.0].needs_grad {
                    let bd = &self.nodes[b.0].data;
                    let mut da = vec![E::ZERO; n * d];
                    for i in 0..n {
                        for j in 0..k {
                            let gv = g[i * k + j];
                            for p in 0..d {
                                da[i * d + p] = da[i * d + p] + gv * bd[p * k + j];
                            }
                        }
                    }
                    self.accum(a, |i| da[i]);
                }
                if self.nodes[b.0].needs_grad {
                    let ad = &self.nodes[a.0].data;
                    let mut db = vec![E::ZERO; d * k];
                    for i in 0..n {
                        for p in 0..d {
                            let av = ad[i * d + p];
                            for j in 0..k {
                                db[p * k + j] = db[p * k + j] + av * g[i * k + j];
                            }
                        }
                    }
                    self.accum(b, |i| db[i]);
                }
            }
            Op::Conv2d { x, k, stride, padding } => {
                let sx = self.nodes[x.0].shape.clone();
                let sk = self.nodes[k.0].shape.clone();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (f, kh, kw) = (sk[0], sk[2], sk[3]);
                let so = self.nodes[out].shape.clone();
                let (oh, ow) = (so[2], so[3]);
                let need_x = self.nodes[x.0].needs_grad;
                let need_k = self.nodes[k.0].needs_grad;
                let mut dx = if need_x { vec![E::ZERO; n * c * h * w] } else { Vec::new() };
                let mut dk = if need_k { vec![E::ZERO; f * c * kh * kw] } else { Vec::new() };
                {
                    let xd = &self.nodes[x.0].data;
                    let kd = &self.nodes[k.0].data;
                    for bn in 0..n {
                        for of in 0..f {
                            for r in 0..oh {
                                for s in 0..ow {
                                    let gv = g[((bn * f + of) * oh + r) * ow + s];
                                    for ic in 0..c {
                                        for i in 0..kh {
                                            let ih = (r * stride + i) as isize - padding as isize;
                                            if ih < 0 || ih >= h as isize {
                                                continue;
                                            }
                                            for j in 0..kw {
                                                let iw =
                                                    (s * stride + j) as isize - padding as isize;
                                                if iw < 0 || iw >= w as isize {
                                                    continue;
                                                }
                                                let xi = ((bn * c + ic) * h + ih as usize) * w
                                                    + iw as usize;
                                                let ki = ((of * c + ic) * kh + i) * kw + j;
                                                if need_x {
                                                    dx[xi] = dx[xi] + gv * kd[ki];
                                                }
                                                if need_k {
                                                    dk[ki] = dk[ki] + gv * xd[xi];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accum(x, |i| dx[i]);
                }
                if need_k {
                    self.accum(k, |i| dk[i]);
                }
            }
            Op::AvgPool2d { x, k, stride } => {
                let sx = self.nodes[x.0].shape.clone();
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let so = self.nodes[out].shape.clone();
                let (oh, ow) = (so[2], so[3]);
                let inv = E::from_f64(1.0 / (k * k) as f64);
                let mut dx = vec![E::ZERO; n * c * h * w];
                for bn in 0..n {
                    for ch in 0..c {
                        for r in 0..oh {
                            for s in 0..ow {
                                let gv = g[((bn * c + ch) * oh + r) * ow + s] * inv;
                                for i in 0..k {
                                    for j in 0..k {
                                        let xi = ((bn * c + ch) * h + r * stride + i) * w
                                            + s * stride
                                            + j;
                                        dx[xi] = dx[xi] + gv;
                                    }
                                }
                            }
                        }
                    }
                }
                self.accum(x, |i| dx[i]);
            }
            Op::GlobalAvgPool(x) => {
                let sx = self.nodes[x.0].shape.clone();
                let (h, w) = (sx[2], sx[3]);
                let inv = E::from_f64(1.0 / (h * w) as f64);
                self.accum(x, |i| g[i / (h * w)] * inv);
            }
            Op::SoftmaxCrossEntropy { logits, ref labels } => {
                let s = self.nodes[logits.0].shape.clone();
                let (n, classes) = (s[0], s[1]);
                let ld = &self.nodes[logits.0].data;
                let scale = g[0] / E::from_f64(n as f64);
                let mut dl = vec![E::ZERO; n * classes];
                for (b, &label) in labels.iter().enumerate() {
                    let row = &ld[b * classes..(b + 1) * classes];
                    let max = row.iter().copied().fold(row[0], |m, v| m.maximum(v));
                    let mut sum = E::ZERO;
                    for &v in row {
                        sum = sum + (v - max).exp();
                    }
                    for j in 0..classes {
                        let p = (row[j] - max).exp() / sum;
                        let t = if j == label { E::ONE } else { E::ZERO };
                        dl[b * classes + j] = scale * (p - t);
                    }
                }
                self.accum(logits, |i| dl[i]);
            }
            Op::MeanAll(x) => {
                let inv = E::from_f64(1.0 / self.nodes[x.0].data.len() as f64);
                self.accum(x, |_| g[0] * inv);
            }
            Op::SumAll(x) => {
                self.accum(x, |_| g[0]);
            }
        }
    }
}

fn softplus<E: Element>(x: E) -> E {
    // ln(1 + e^x), computed from the side that cannot overflow.
    if x > E::ZERO {
        x + (E::ONE + (-x).exp()).ln()
    } else {
        (E::ONE + x.exp()).ln()
    }
}

fn sigmoid<E: Element>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}
