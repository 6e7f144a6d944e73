//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its output value
//! and enough saved state to run its vector-Jacobian product. Node indices
//! increase monotonically, so the tape is always in topological order and
//! [`Tape::backward`] simply walks it in reverse.

mod kernels;
mod params;

use std::collections::HashMap;

pub use params::{ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One bilinear tap of a pooled region sample: plane offset and weight.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub offset: usize,
    pub weight: f64,
}

/// Sampling plan for one output bin of a region-aligned pooling op.
#[derive(Debug, Clone)]
pub struct BinSample {
    pub level: usize,
    pub taps: [Tap; 4],
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    Upsample { x: Var, factor: usize },
    Concat { xs: Vec<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Linear { x: Var, w: Var, b: Var },
    Sum { x: Var },
    WeightedSum { x: Var, w: Tensor<T> },
    SoftmaxCe { logits: Var, probs: Tensor<T>, target: Tensor<T> },
    SmoothL1 { pred: Var, target: Tensor<T>, norm: T },
    Gather { xs: Vec<Var>, index: Vec<Option<(usize, usize)>> },
    RoiAlign { levels: Vec<Var>, bins: Vec<BinSample>, size: usize },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Leaf | Op::Param(_) => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Upsample { x, .. }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::MaxPool2 { x, .. }
            | Op::Sum { x }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::Gather { xs, .. } => xs.clone(),
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::SmoothL1 { pred, .. } => vec![*pred],
            Op::Concat { xs } => xs.clone(),
            Op::RoiAlign { levels, .. } => levels.clone(),
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a leaf or parameter node.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant)
    }

    /// A free variable whose gradient is reported in [`Gradients`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Brings a stored parameter onto the tape. Repeated calls with the
    /// same id return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    /// Stride-1 same-padded convolution with a k×k kernel, k ∈ {1, 3}.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4("conv2d")?;
        let [cout, wcin, kh, kw] = self.value(w).dims4("conv2d")?;
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape("conv2d", format!("kernel must be 1x1 or 3x3, got {kh}x{kw}")));
        }
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels: input has {cin}, weight expects {wcin}"),
            ));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} does not match output channels {cout}", self.value(b).shape()),
            ));
        }
        let k = kh;
        let plane = h * wd;
        let kk = cin * k * k;
        let mut out = vec![T::zero(); n * cout * plane];
        let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * plane] };
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let bs = self.value(b).data();
            for bi in 0..n {
                let src = &xs[bi * cin * plane..(bi + 1) * cin * plane];
                let dst = &mut out[bi * cout * plane..(bi + 1) * cout * plane];
                for (co, row) in dst.chunks_exact_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v = bs[co]);
                }
                let rhs: &[T] = if k == 1 {
                    src
                } else {
                    kernels::im2col(src, cin, h, wd, k, &mut col);
                    &col
                };
                T::gemm(cout, kk, plane, T::one(), ws, (kk, 1), rhs, (plane, 1), T::one(), dst, (plane, 1));
            }
        }
        let value = Tensor::new(&[n, cout, h, wd], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, k }))
    }

    /// Bilinear upsampling by an integer factor, half-pixel centers.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::invalid("bilinear_upsample", "factor must be at least 1"));
        }
        let [n, c, h, w] = self.value(x).dims4("bilinear_upsample")?;
        let (oh, ow) = (h * factor, w * factor);
        let ty = kernels::upsample_taps(h, factor);
        let tx = kernels::upsample_taps(w, factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (p, dst) in out.chunks_exact_mut(oh * ow).enumerate() {
            let s = &src[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::lit(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::lit(lx);
                    let top = s[y0 * w + x0] + lx * (s[y0 * w + x1] - s[y0 * w + x0]);
                    let bot = s[y1 * w + x0] + lx * (s[y1 * w + x1] - s[y1 * w + x0]);
                    dst[oy * ow + ox] = top + ly * (bot - top);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }))
    }

    /// Stacks (N, Cᵢ, H, W) tensors along the channel axis in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::invalid("concat_channels", "empty input list"))?;
        let [n, _, h, w] = self.value(first).dims4("concat_channels")?;
        let mut total = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.value(v).dims4("concat_channels")?;
            if (vn, vh, vw) != (n, h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{:?} and {:?} differ outside the channel axis", self.shape(first), self.shape(v)),
                ));
            }
            total += vc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[n, total, h, w], out)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec() }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Sums a non-empty list of same-shaped tensors left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::invalid("add_all", "empty input list"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(value, Op::Relu { x })
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("max_pool2", format!("spatial extent {h}x{w} is not even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        let src = self.value(x).data();
        for p in 0..n * c {
            kernels::max_pool2_plane(
                &src[p * h * w..(p + 1) * h * w],
                h,
                w,
                &mut out[p * oh * ow..(p + 1) * oh * ow],
                &mut argmax[p * oh * ow..(p + 1) * oh * ow],
            );
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, argmax }))
    }

    /// Affine map `x·Wᵀ + b`; `x` is flattened to (M, K) over its trailing
    /// axes, `W` is (out, K).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let m = xs[0];
        let k: usize = xs[1..].iter().product();
        let (out, wk) = match *self.shape(w) {
            [o, kk] => (o, kk),
            ref s => return Err(Error::shape("linear", format!("weight must be 2-d, got {s:?}"))),
        };
        if wk != k {
            return Err(Error::shape("linear", format!("input features: input has {k}, weight expects {wk}")));
        }
        if self.shape(b) != [out] {
            return Err(Error::shape("linear", format!("bias shape {:?} vs {out} outputs", self.shape(b))));
        }
        let mut y = Vec::with_capacity(m * out);
        for _ in 0..m {
            y.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            m,
            k,
            out,
            T::one(),
            self.value(x).data(),
            (k, 1),
            self.value(w).data(),
            (1, k),
            T::one(),
            &mut y,
            (out, 1),
        );
        let value = Tensor::new(&[m, out], y)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x })
    }

    /// `Σ xᵢ·wᵢ` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor<T>) -> Result<Var> {
        if self.shape(x) != w.shape() {
            return Err(Error::shape("weighted_sum", format!("{:?} vs {:?}", self.shape(x), w.shape())));
        }
        let s = self.value(x).data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w }))
    }

    /// Mean over rows of `−log softmax(logits)[true class]`. `target` must
    /// be one-hot with exactly one 1 per row.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Tensor<T>) -> Result<Var> {
        let (m, k) = match *self.shape(logits) {
            [m, k] => (m, k),
            ref s => return Err(Error::shape("softmax_cross_entropy", format!("logits must be 2-d, got {s:?}"))),
        };
        if target.shape() != [m, k] {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("target {:?} vs logits {:?}", target.shape(), [m, k]),
            ));
        }
        for (r, row) in target.data().chunks_exact(k).enumerate() {
            let ones = row.iter().filter(|&&v| v == T::one()).count();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            if ones != 1 || zeros != k - 1 {
                return Err(Error::invalid(
                    "softmax_cross_entropy",
                    format!("target row {r} is not one-hot ({ones} ones)"),
                ));
            }
        }
        let mut probs = vec![T::zero(); m * k];
        let mut loss = T::zero();
        for (r, row) in self.value(logits).data().chunks_exact(k).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let log_z = z.ln() + mx;
            let truth = target.data()[r * k..(r + 1) * k].iter().position(|&v| v == T::one()).unwrap_or(0);
            loss += log_z - row[truth];
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        let value = Tensor::scalar(loss / T::lit(m as f64));
        let probs = Tensor::new(&[m, k], probs)?;
        Ok(self.push(value, Op::SoftmaxCe { logits, probs, target }))
    }

    /// Convenience form of [`Self::softmax_cross_entropy`] taking class indices.
    pub fn softmax_cross_entropy_labels(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let k = *self.shape(logits).get(1).unwrap_or(&0);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        let target = one_hot(labels, k)?;
        self.softmax_cross_entropy(logits, target)
    }

    /// Smooth-L1 summed over all coordinates and averaged over rows.
    pub fn smooth_l1(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let rows = *self.shape(pred).first().unwrap_or(&1);
        self.smooth_l1_normalized(pred, target, T::lit(rows as f64))
    }

    /// Smooth-L1 summed over all elements and divided by `norm`.
    pub fn smooth_l1_normalized(&mut self, pred: Var, target: Tensor<T>, norm: T) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape("smooth_l1", format!("{:?} vs {:?}", self.shape(pred), target.shape())));
        }
        if !(norm > T::zero()) {
            return Err(Error::invalid("smooth_l1", "normalizer must be positive"));
        }
        let s: T = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| smooth_l1_scalar(p - t))
            .sum();
        Ok(self.push(Tensor::scalar(s / norm), Op::SmoothL1 { pred, target, norm }))
    }

    /// Picks elements of `x` (flat index) into a tensor of `shape`;
    /// `None` entries become constant zeros.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let index = index.into_iter().map(|i| i.map(|i| (0, i))).collect();
        self.gather_from(&[x], index, shape)
    }

    /// Like [`Self::gather`] over several sources; each entry names
    /// `(source, flat index)`.
    pub fn gather_from(&mut self, xs: &[Var], index: Vec<Option<(usize, usize)>>, shape: &[usize]) -> Result<Var> {
        for &(src, i) in index.iter().flatten() {
            let Some(&x) = xs.get(src) else {
                return Err(Error::invalid("gather", format!("source {src} out of range for {} sources", xs.len())));
            };
            let n = self.value(x).numel();
            if i >= n {
                return Err(Error::invalid("gather", format!("index {i} out of range for {n} elements")));
            }
        }
        let data = index.iter().map(|e| e.map_or(T::zero(), |(src, i)| self.value(xs[src]).data()[i])).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { xs: xs.to_vec(), index }))
    }

    /// Region pooling from precomputed bilinear sampling plans. `levels`
    /// are (1, C, H, W) maps sharing C; `bins` holds `size²` entries per
    /// region. Output is (regions, C, size, size).
    pub fn roi_align(&mut self, levels: &[Var], bins: Vec<BinSample>, size: usize) -> Result<Var> {
        let per = size * size;
        if per == 0 || bins.is_empty() || !bins.len().is_multiple_of(per) {
            return Err(Error::invalid("roi_align", "bin plan must cover whole regions"));
        }
        let mut channels = None;
        for &l in levels {
            let [n, c, _, _] = self.value(l).dims4("roi_align")?;
            if n != 1 || channels.is_some_and(|cc| cc != c) {
                return Err(Error::shape("roi_align", "levels must be single-image maps of equal width"));
            }
            channels = Some(c);
        }
        let c = channels.ok_or_else(|| Error::invalid("roi_align", "no feature levels"))?;
        let regions = bins.len() / per;
        let mut out = vec![T::zero(); regions * c * per];
        for (i, bin) in bins.iter().enumerate() {
            let lvl = levels.get(bin.level).ok_or_else(|| Error::invalid("roi_align", "bin level out of range"))?;
            let src = self.value(*lvl);
            let plane = src.shape()[2] * src.shape()[3];
            if bin.taps.iter().any(|t| t.offset >= plane) {
                return Err(Error::invalid("roi_align", "tap outside feature plane"));
            }
            let (r, cell) = (i / per, i % per);
            for ch in 0..c {
                let s = &src.data()[ch * plane..(ch + 1) * plane];
                let v: T = bin.taps.iter().map(|t| T::lit(t.weight) * s[t.offset]).sum();
                out[(r * c + ch) * per + cell] = v;
            }
        }
        let value = Tensor::new(&[regions, c, size, size], out)?;
        Ok(self.push(value, Op::RoiAlign { levels: levels.to_vec(), bins, size }))
    }

    /// Which side of every non-smooth point the recorded graph sits on:
    /// ReLU input signs, max-pool winners and smooth-L1 branches. Two
    /// evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<u32> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => sig.extend(self.value(*x).data().iter().map(|&v| u32::from(v > T::zero()))),
                Op::MaxPool2 { argmax, .. } => sig.extend_from_slice(argmax),
                Op::SmoothL1 { pred, target, .. } => sig.extend(
                    self.value(*pred).data().iter().zip(target.data()).map(|(&p, &t)| u32::from((p - t).abs() < T::one())),
                ),
                _ => {}
            }
        }
        sig
    }

    /// Runs the backward pass from a scalar `loss`, accumulating (`+=`)
    /// parameter gradients into `store`. Leaf gradients are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => {
                    store.accumulate_grad(*id, &g);
                    grads[i] = Some(g);
                }
                op => self.vjp(op, &node.value, &g, &mut grads),
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn vjp(&self, op: &Op<T>, out: &Tensor<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match op {
            Op::Constant | Op::Leaf | Op::Param(_) => unreachable!("handled by backward"),
            Op::Conv2d { x, w, b, k } => {
                let k = *k;
                let [n, cin, h, wd] = self.value(*x).dims4("conv2d").expect("checked in forward");
                let cout = self.shape(*w)[0];
                let plane = h * wd;
                let kk = cin * k * k;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                if self.wants(*b) {
                    let db = buf(grads, *b, self.shape(*b));
                    for bi in 0..n {
                        for co in 0..cout {
                            let s: T = gd[(bi * cout + co) * plane..(bi * cout + co + 1) * plane].iter().copied().sum();
                            db[co] += s;
                        }
                    }
                }
                let mut col = if k == 1 { Vec::new() } else { vec![T::zero(); kk * plane] };
                if self.wants(*w) {
                    for bi in 0..n {
                        let src = &xs[bi * cin * plane..(bi + 1) * cin * plane];
                        let gy = &gd[bi * cout * plane..(bi + 1) * cout * plane];
                        let rhs: &[T] = if k == 1 {
                            src
                        } else {
                            kernels::im2col(src, cin, h, wd, k, &mut col);
                            &col
                        };
                        let dw = buf(grads, *w, self.shape(*w));
                        T::gemm(cout, plane, kk, T::one(), gy, (plane, 1), rhs, (1, plane), T::one(), dw, (kk, 1));
                    }
                }
                if self.wants(*x) {
                    let mut dcol = vec![T::zero(); kk * plane];
                    for bi in 0..n {
                        let gy = &gd[bi * cout * plane..(bi + 1) * cout * plane];
                        let dx_all = buf(grads, *x, self.shape(*x));
                        let dx = &mut dx_all[bi * cin * plane..(bi + 1) * cin * plane];
                        if k == 1 {
                            T::gemm(cin, cout, plane, T::one(), ws, (1, cin), gy, (plane, 1), T::one(), dx, (plane, 1));
                        } else {
                            T::gemm(kk, cout, plane, T::one(), ws, (1, kk), gy, (plane, 1), T::zero(), &mut dcol, (plane, 1));
                            kernels::col2im_add(&dcol, cin, h, wd, k, dx);
                        }
                    }
                }
            }
            Op::Upsample { x, factor } => {
                if !self.wants(*x) {
                    return;
                }
                let [_, _, h, w] = self.value(*x).dims4("bilinear_upsample").expect("checked in forward");
                let (oh, ow) = (h * factor, w * factor);
                let ty = kernels::upsample_taps(h, *factor);
                let tx = kernels::upsample_taps(w, *factor);
                let dx = buf(grads, *x, self.shape(*x));
                for (p, gsrc) in gd.chunks_exact(oh * ow).enumerate() {
                    let d = &mut dx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        let ly = T::lit(ly);
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let lx = T::lit(lx);
                            let v = gsrc[oy * ow + ox];
                            let top = v * (T::one() - ly);
                            let bot = v * ly;
                            d[y0 * w + x0] += top * (T::one() - lx);
                            d[y0 * w + x1] += top * lx;
                            d[y1 * w + x0] += bot * (T::one() - lx);
                            d[y1 * w + x1] += bot * lx;
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let [n, total, h, w] = out.dims4("concat_channels").expect("checked in forward");
                let plane = h * w;
                let mut start = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.wants(v) {
                        let dv = buf(grads, v, self.shape(v));
                        for b in 0..n {
                            let src = &gd[(b * total + start) * plane..(b * total + start + c) * plane];
                            for (d, &s) in dv[b * c * plane..(b + 1) * c * plane].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    start += c;
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(buf(grads, v, self.shape(v)), gd);
                    }
                }
            }
            Op::Mul { a, b } => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if self.wants(v) {
                        let o = self.value(other).data();
                        let dv = buf(grads, v, self.shape(v));
                        for ((d, &s), &q) in dv.iter_mut().zip(gd).zip(o) {
                            *d += s * q;
                        }
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    let dx = buf(grads, *x, self.shape(*x));
                    for (d, &s) in dx.iter_mut().zip(gd) {
                        *d += s * *c;
                    }
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let dx = buf(grads, *x, self.shape(*x));
                    for ((d, &s), &xi) in dx.iter_mut().zip(gd).zip(xv) {
                        if xi > T::zero() {
                            *d += s;
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let [_, _, h, w] = self.value(*x).dims4("max_pool2").expect("checked in forward");
                    let per = (h / 2) * (w / 2);
                    let dx = buf(grads, *x, self.shape(*x));
                    for (i, (&s, &a)) in gd.iter().zip(argmax).enumerate() {
                        dx[(i / per) * h * w + a as usize] += s;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let m = self.shape(*x)[0];
                let (o, k) = (self.shape(*w)[0], self.shape(*w)[1]);
                if self.wants(*b) {
                    let db = buf(grads, *b, self.shape(*b));
                    for row in gd.chunks_exact(o) {
                        add_into(db, row);
                    }
                }
                if self.wants(*w) {
                    let xs = self.value(*x).data();
                    let dw = buf(grads, *w, self.shape(*w));
                    T::gemm(o, m, k, T::one(), gd, (1, o), xs, (k, 1), T::one(), dw, (k, 1));
                }
                if self.wants(*x) {
                    let ws = self.value(*w).data();
                    let dx = buf(grads, *x, self.shape(*x));
                    T::gemm(m, o, k, T::one(), gd, (o, 1), ws, (k, 1), T::one(), dx, (k, 1));
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    let s = gd[0];
                    buf(grads, *x, self.shape(*x)).iter_mut().for_each(|d| *d += s);
                }
            }
            Op::WeightedSum { x, w } => {
                if self.wants(*x) {
                    let s = gd[0];
                    let dx = buf(grads, *x, self.shape(*x));
                    for (d, &wi) in dx.iter_mut().zip(w.data()) {
                        *d += s * wi;
                    }
                }
            }
            Op::SoftmaxCe { logits, probs, target } => {
                if self.wants(*logits) {
                    let m = probs.shape()[0];
                    let scale = gd[0] / T::lit(m as f64);
                    let dl = buf(grads, *logits, self.shape(*logits));
                    for ((d, &p), &t) in dl.iter_mut().zip(probs.data()).zip(target.data()) {
                        *d += (p - t) * scale;
                    }
                }
            }
            Op::SmoothL1 { pred, target, norm } => {
                if self.wants(*pred) {
                    let scale = gd[0] / *norm;
                    let pv = self.value(*pred).data();
                    let dp = buf(grads, *pred, self.shape(*pred));
                    for ((d, &p), &t) in dp.iter_mut().zip(pv).zip(target.data()) {
                        *d += smooth_l1_deriv(p - t) * scale;
                    }
                }
            }
            Op::Gather { xs, index } => {
                for (src, &x) in xs.iter().enumerate() {
                    if !self.wants(x) {
                        continue;
                    }
                    let dx = buf(grads, x, self.shape(x));
                    for (&s, e) in gd.iter().zip(index) {
                        if let Some((j, i)) = *e {
                            if j == src {
                                dx[i] += s;
                            }
                        }
                    }
                }
            }
            Op::RoiAlign { levels, bins, size } => {
                let per = size * size;
                let c = out.shape()[1];
                for (li, &lvl) in levels.iter().enumerate() {
                    if !self.wants(lvl) {
                        continue;
                    }
                    let shape = self.shape(lvl).to_vec();
                    let plane = shape[2] * shape[3];
                    let dl = buf(grads, lvl, &shape);
                    for (i, bin) in bins.iter().enumerate().filter(|(_, b)| b.level == li) {
                        let (r, cell) = (i / per, i % per);
                        for ch in 0..c {
                            let s = gd[(r * c + ch) * per + cell];
                            for t in &bin.taps {
                                dl[ch * plane + t.offset] += T::lit(t.weight) * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn buf<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn smooth_l1_scalar<T: Real>(x: T) -> T {
    let a = x.abs();
    if a <= T::one() {
        T::lit(0.5) * x * x
    } else {
        a - T::lit(0.5)
    }
}

fn smooth_l1_deriv<T: Real>(x: T) -> T {
    if x.abs() <= T::one() {
        x
    } else {
        x.signum()
    }
}

/// One-hot rows for the given class indices.
pub fn one_hot<T: Real>(labels: &[usize], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * classes];
    for (r, &l) in labels.iter().enumerate() {
        data[r * classes + l] = T::one();
    }
    Tensor::new(&[labels.len(), classes], data)
}
