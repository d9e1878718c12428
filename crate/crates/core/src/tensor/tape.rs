use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    ScaleByChannel(Var, Var),
    ScaleByMap(Var, Var),
    GlobalAvgPool(Var),
    GlobalMaxPool(Var, Vec<usize>),
    ChannelMeanMap(Var),
    ChannelMaxMap(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        class: usize,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    Dot(Var, Vec<f64>),
    Reshape(Var),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations for one forward pass.
///
/// A tape supports exactly one [`backward`](Tape::backward) call; saved buffers are
/// released afterwards and a second call fails with [`TensorError::TapeConsumed`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
    inference: bool,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn is_scalar_shape(s: &[usize]) -> bool {
    s.iter().product::<usize>() == 1
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a C×H×W tensor, got shape {shape:?}"),
        }),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose leaves never require gradients. Values are computed by the same
    /// kernels as on a training tape.
    pub fn inference() -> Self {
        Self {
            inference: true,
            ..Self::default()
        }
    }

    pub fn is_inference(&self) -> bool {
        self.inference
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.inference,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the loss with respect to `v`, available after [`backward`](Self::backward).
    /// `None` when no gradient reached the node.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor::new(av.shape().to_vec(), data).expect("same shape"))
        } else if is_scalar_shape(bv.shape()) {
            let s = bv.data()[0];
            let data = av.data().iter().map(|&x| f(x, s)).collect();
            Ok(Tensor::new(av.shape().to_vec(), data).expect("same shape"))
        } else {
            Err(shape_err(op, av.shape(), bv.shape()))
        }
    }

    /// Elementwise sum. `b` may be a single-element tensor, broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product. `b` may be a single-element tensor, broadcast over `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| x * c).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Sum of several tensors of one shape.
    pub fn sum_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (first, rest) = vars.split_first().ok_or_else(|| TensorError::InvalidArgument {
            op: "sum_all",
            msg: "no operands".into(),
        })?;
        let mut acc = *first;
        for &v in rest {
            acc = self.add(acc, v)?;
        }
        Ok(acc)
    }

    /// `[m, k] × [k] → [m]` or `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (m, k) = match *av.shape() {
            [m, k] => (m, k),
            _ => return Err(shape_err("matmul", av.shape(), bv.shape())),
        };
        let (kb, n, out_shape) = match *bv.shape() {
            [kb] => (kb, 1, vec![m]),
            [kb, n] => (kb, n, vec![m, n]),
            _ => return Err(shape_err("matmul", av.shape(), bv.shape())),
        };
        if kb != k {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        let out = Tensor::new(out_shape, out).expect("matmul shape");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// 2-D convolution of a `C × H × W` input with `O × C × K × K` weights and an
    /// optional per-output-channel bias, zero padding on all sides.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (in_c, in_h, in_w) = chw("conv2d", &xs)?;
        let (out_c, k) = match *ws {
            [o, c, kh, kw] if c == in_c && kh == kw => (o, kh),
            _ => return Err(shape_err("conv2d", &xs, &ws)),
        };
        if let Some(b) = b {
            if self.shape(b) != [out_c] {
                return Err(shape_err("conv2d", &ws, self.shape(b)));
            }
        }
        if in_h + 2 * padding < k || in_w + 2 * padding < k {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let geom = ConvGeom {
            in_c,
            in_h,
            in_w,
            out_c,
            out_h: (in_h + 2 * padding - k) / stride + 1,
            out_w: (in_w + 2 * padding - k) / stride + 1,
            k,
            stride,
            pad: padding,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let p = geom.out_h * geom.out_w;
        let rows = in_c * k * k;
        let mut out = vec![0.0; out_c * p];
        if let Some(b) = b {
            for (o, &bias) in self.value(b).data().iter().enumerate() {
                out[o * p..(o + 1) * p].fill(bias);
            }
        }
        matmul_acc(self.value(w).data(), &cols, &mut out, out_c, rows, p);
        let out = Tensor::new(vec![out_c, geom.out_h, geom.out_w], out).expect("conv shape");
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        // Columns are only needed for the weight gradient.
        let cols = if rg && self.rg(w) { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, cols }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().map(|&x| sigmoid(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if axis >= av.shape().len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {:?}", av.shape()),
            });
        }
        let (outer, n, inner) = split_axis(av.shape(), axis);
        let src = av.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let out = Tensor::new(av.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Result<Var> {
        let first = vars.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "concat",
            msg: "no operands".into(),
        })?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &v in vars {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in vars {
                let n = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, out).expect("concat shape");
        let rg = vars.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::Concat(vars.to_vec(), axis), rg))
    }

    /// `x[c, h, w] · m[c]` for a `C × H × W` input and length-`C` weights.
    pub fn scale_by_channel(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = chw("scale_by_channel", self.shape(x))?;
        if self.shape(m) != [c] {
            return Err(shape_err("scale_by_channel", self.shape(x), self.shape(m)));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mv = self.value(m).data();
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(&xv[ch * hw..(ch + 1) * hw]) {
                *o = v * mv[ch];
            }
        }
        let out = Tensor::new(vec![c, h, w], out).expect("same shape");
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(out, Op::ScaleByChannel(x, m), rg))
    }

    /// `x[c, h, w] · m[h, w]` for a `C × H × W` input and an `H × W` (or `1 × H × W`) map.
    pub fn scale_by_map(&mut self, x: Var, m: Var) -> Result<Var> {
        let (c, h, w) = chw("scale_by_map", self.shape(x))?;
        let ms = self.shape(m);
        if !(ms == [h, w] || ms == [1, h, w]) {
            return Err(shape_err("scale_by_map", self.shape(x), ms));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mv = self.value(m).data();
        let mut out = vec![0.0; c * hw];
        for ch in 0..c {
            for ((o, &v), &s) in out[ch * hw..(ch + 1) * hw]
                .iter_mut()
                .zip(&xv[ch * hw..(ch + 1) * hw])
                .zip(mv)
            {
                *o = v * s;
            }
        }
        let out = Tensor::new(vec![c, h, w], out).expect("same shape");
        let rg = self.rg(x) || self.rg(m);
        Ok(self.push(out, Op::ScaleByMap(x, m), rg))
    }

    /// Per-channel mean over the spatial extent: `C × H × W → C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("global_avg_pool", self.shape(x))?;
        let hw = h * w;
        let xv = self.value(x).data();
        let out = (0..c)
            .map(|ch| xv[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(out), Op::GlobalAvgPool(x), rg))
    }

    /// Per-channel maximum over the spatial extent: `C × H × W → C`. Ties resolve to the
    /// first element in scan order.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("global_max_pool", self.shape(x))?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(c);
        let mut arg = Vec::with_capacity(c);
        for ch in 0..c {
            let (mut best, mut at) = (f64::NEG_INFINITY, ch * hw);
            for i in ch * hw..(ch + 1) * hw {
                if xv[i] > best {
                    best = xv[i];
                    at = i;
                }
            }
            out.push(best);
            arg.push(at);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(out), Op::GlobalMaxPool(x, arg), rg))
    }

    /// Mean over channels at each position: `C × H × W → 1 × H × W`.
    pub fn channel_mean_map(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("channel_mean_map", self.shape(x))?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; hw];
        for ch in 0..c {
            for (o, &v) in out.iter_mut().zip(&xv[ch * hw..(ch + 1) * hw]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= c as f64;
        }
        let out = Tensor::new(vec![1, h, w], out).expect("map shape");
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChannelMeanMap(x), rg))
    }

    /// Maximum over channels at each position: `C × H × W → 1 × H × W`. Ties resolve to
    /// the lowest channel.
    pub fn channel_max_map(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = chw("channel_max_map", self.shape(x))?;
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; hw];
        let mut arg = vec![0; hw];
        for ch in 0..c {
            for i in 0..hw {
                let v = xv[ch * hw + i];
                if v > out[i] {
                    out[i] = v;
                    arg[i] = ch * hw + i;
                }
            }
        }
        let out = Tensor::new(vec![1, h, w], out).expect("map shape");
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChannelMaxMap(x, arg), rg))
    }

    /// `−log softmax(logits)[class]` for a 1-D logit vector.
    pub fn cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 1 || class >= lv.len() {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("class {class} invalid for logits of shape {:?}", lv.shape()),
            });
        }
        let z = lv.data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let probs = z.iter().map(|&v| (v - lse).exp()).collect();
        let loss = lse - z[class];
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, class, probs }, rg))
    }

    /// Mean squared difference of two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(shape_err("mse", av.shape(), bv.shape()));
        }
        let n = av.len() as f64;
        let loss = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(a, b), rg))
    }

    /// Inner product with a fixed weight vector, producing a scalar.
    pub fn dot_const(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let av = self.value(a);
        if av.len() != weights.len() {
            return Err(shape_err("dot_const", av.shape(), &[weights.len()]));
        }
        let v = av.data().iter().zip(weights).map(|(x, w)| x * w).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, weights.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Back-propagates from a scalar `loss`, filling gradients of every node on a path
    /// to it that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.inference {
            return Err(TensorError::InferenceTape);
        }
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let ls = self.shape(loss);
        if !is_scalar_shape(ls) {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, &x) in acc.iter_mut().zip(g) {
                    *a += x;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    fn accum_with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn broadcast_back(&mut self, b: Var, g: &[f64], factor: impl Fn(usize) -> f64) {
        if self.nodes[b.0].value.len() == g.len() {
            let gb: Vec<f64> = g.iter().enumerate().map(|(i, &x)| x * factor(i)).collect();
            self.accum(b, &gb);
        } else {
            let s: f64 = g.iter().enumerate().map(|(i, &x)| x * factor(i)).sum();
            self.accum(b, &[s]);
        }
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(*a, g);
                self.broadcast_back(*b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.accum(*a, g);
                self.broadcast_back(*b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                if self.rg(*a) {
                    let ga: Vec<f64> = if bv.len() == g.len() {
                        g.iter().zip(&bv).map(|(x, y)| x * y).collect()
                    } else {
                        g.iter().map(|x| x * bv[0]).collect()
                    };
                    self.accum(*a, &ga);
                }
                if self.rg(*b) {
                    self.broadcast_back(*b, g, |k| av[k]);
                }
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.accum(*a, &ga);
            }
            Op::MatMul(a, b) => {
                let (m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1])
                };
                let n = self.nodes[b.0].value.len() / k;
                if self.rg(*a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    // dA[m, k] = G[m, n] · Bᵀ
                    self.accum_with(*a, |ga| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for (c, slot) in ga[r * k..(r + 1) * k].iter_mut().enumerate() {
                                *slot += dot(grow, &bv[c * n..(c + 1) * n]);
                            }
                        }
                    });
                }
                if self.rg(*b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    // dB[k, n] = Aᵀ · G
                    self.accum_with(*b, |gb| {
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for c in 0..k {
                                axpy(av[r * k + c], grow, &mut gb[c * n..(c + 1) * n]);
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let p = geom.out_h * geom.out_w;
                let rows = geom.in_c * geom.k * geom.k;
                if let Some(b) = b {
                    if self.rg(*b) {
                        let gb: Vec<f64> = (0..geom.out_c).map(|o| g[o * p..(o + 1) * p].iter().sum()).collect();
                        self.accum(*b, &gb);
                    }
                }
                if self.rg(*w) {
                    self.accum_with(*w, |gw| {
                        for o in 0..geom.out_c {
                            let grow = &g[o * p..(o + 1) * p];
                            for r in 0..rows {
                                gw[o * rows + r] += dot(grow, &cols[r * p..(r + 1) * p]);
                            }
                        }
                    });
                }
                if self.rg(*x) {
                    let wv = self.nodes[w.0].value.data();
                    let mut dcols = vec![0.0; rows * p];
                    for o in 0..geom.out_c {
                        let grow = &g[o * p..(o + 1) * p];
                        for r in 0..rows {
                            axpy(wv[o * rows + r], grow, &mut dcols[r * p..(r + 1) * p]);
                        }
                    }
                    let geom = *geom;
                    self.accum_with(*x, |gx| col2im_acc(&dcols, &geom, gx));
                }
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data();
                let ga: Vec<f64> = g.iter().zip(av).map(|(&x, &v)| if v > 0.0 { x } else { 0.0 }).collect();
                self.accum(*a, &ga);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                let ga: Vec<f64> = g.iter().zip(y).map(|(&x, &s)| x * s * (1.0 - s)).collect();
                self.accum(*a, &ga);
            }
            Op::Softmax(a, axis) => {
                let y = self.nodes[i].value.data();
                let (outer, n, inner) = split_axis(self.nodes[i].value.shape(), *axis);
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + ii;
                        let s: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            ga[idx(j)] = y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
                self.accum(*a, &ga);
            }
            Op::Concat(vars, axis) => {
                let (outer, total, inner) = split_axis(self.nodes[i].value.shape(), *axis);
                let mut offset = 0;
                for &v in vars {
                    let n = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[start..start + n * inner]);
                        }
                        self.accum(v, &gv);
                    }
                    offset += n;
                }
            }
            Op::ScaleByChannel(x, m) => {
                let s = self.shape(*x).to_vec();
                let (c, hw) = (s[0], s[1] * s[2]);
                let xv = self.nodes[x.0].value.data().to_vec();
                let mv = self.nodes[m.0].value.data().to_vec();
                if self.rg(*x) {
                    let gx: Vec<f64> = g.iter().enumerate().map(|(k, &v)| v * mv[k / hw]).collect();
                    self.accum(*x, &gx);
                }
                if self.rg(*m) {
                    let gm: Vec<f64> = (0..c).map(|ch| dot(&g[ch * hw..(ch + 1) * hw], &xv[ch * hw..(ch + 1) * hw])).collect();
                    self.accum(*m, &gm);
                }
            }
            Op::ScaleByMap(x, m) => {
                let s = self.shape(*x).to_vec();
                let (c, hw) = (s[0], s[1] * s[2]);
                let xv = self.nodes[x.0].value.data().to_vec();
                let mv = self.nodes[m.0].value.data().to_vec();
                if self.rg(*x) {
                    let gx: Vec<f64> = g.iter().enumerate().map(|(k, &v)| v * mv[k % hw]).collect();
                    self.accum(*x, &gx);
                }
                if self.rg(*m) {
                    let mut gm = vec![0.0; hw];
                    for ch in 0..c {
                        for (k, slot) in gm.iter_mut().enumerate() {
                            *slot += g[ch * hw + k] * xv[ch * hw + k];
                        }
                    }
                    self.accum(*m, &gm);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x).to_vec();
                let hw = s[1] * s[2];
                let gx: Vec<f64> = (0..s[0] * hw).map(|k| g[k / hw] / hw as f64).collect();
                self.accum(*x, &gx);
            }
            Op::GlobalMaxPool(x, arg) => {
                self.accum_with(*x, |gx| {
                    for (&at, &v) in arg.iter().zip(g) {
                        gx[at] += v;
                    }
                });
            }
            Op::ChannelMeanMap(x) => {
                let s = self.shape(*x).to_vec();
                let hw = s[1] * s[2];
                let c = s[0] as f64;
                let gx: Vec<f64> = (0..s[0] * hw).map(|k| g[k % hw] / c).collect();
                self.accum(*x, &gx);
            }
            Op::ChannelMaxMap(x, arg) => {
                self.accum_with(*x, |gx| {
                    for (&at, &v) in arg.iter().zip(g) {
                        gx[at] += v;
                    }
                });
            }
            Op::CrossEntropy { logits, class, probs } => {
                let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                gl[*class] -= g[0];
                self.accum(*logits, &gl);
            }
            Op::Mse(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let n = av.len() as f64;
                let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| 2.0 * (x - y) / n * g[0]).collect();
                self.accum(*a, &diff);
                let neg: Vec<f64> = diff.iter().map(|d| -d).collect();
                self.accum(*b, &neg);
            }
            Op::Dot(a, weights) => {
                let ga: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                self.accum(*a, &ga);
            }
            Op::Reshape(a) => self.accum(*a, g),
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums let the compiler vectorize the reduction.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m, n] += a[m, k] · b[k, n]`.
fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for c in 0..k {
            let av = a[r * k + c];
            if av != 0.0 {
                axpy(av, &b[c * n..(c + 1) * n], orow);
            }
        }
    }
}

/// Unfolds the input into a `(C·K·K) × (OH·OW)` matrix.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_h * g.out_w;
    let mut cols = vec![0.0; g.in_c * g.k * g.k * p];
    for c in 0..g.in_c {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let p = g.out_h * g.out_w;
    for c in 0..g.in_c {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut gx[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kw) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}
