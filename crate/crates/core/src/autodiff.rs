//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so the backward pass is a single reverse sweep. Nodes
//! only receive gradients when some leaf upstream of them was created with
//! [`Graph::param`]; constant subgraphs cost nothing on the way back.

use crate::error::{Error, Result};
use crate::scene::nearest_index;
use crate::tensor::{avg_pool2, conv2d, conv2d_backward, resize_nearest, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Conv { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    InstanceNorm { input: Var, inv_std: Vec<f64> },
    Resize(Var),
    AvgPool2(Var),
    Concat(Vec<Var>),
    Gather { input: Var, index: Vec<usize> },
    ChannelNorm(Var),
    WeightedSum { input: Var, weights: Tensor },
    Mean(Var),
    SumAll(Vec<Var>),
    DirectionEdit { z: Var, dirs: Var, coeff: Tensor, index: Vec<Option<usize>> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node that needed one.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.map(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv2d(self.value(input), self.value(weight), bias.map(|b| self.value(b)), geom)?;
        let ng = self.ng(input) || self.ng(weight) || bias.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv { input, weight, bias, geom }, ng))
    }

    /// Per-(sample, channel) normalization over the spatial axes, no affine.
    pub fn instance_norm(&mut self, input: Var, eps: f64) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let hw = (h * w) as f64;
        let mut out = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in x.data().chunks_exact(h * w) {
            let mean = plane.iter().sum::<f64>() / hw;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            out.extend(plane.iter().map(|v| (v - mean) * inv));
        }
        let t = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(input);
        self.push(t, Op::InstanceNorm { input, inv_std }, ng)
    }

    pub fn resize(&mut self, input: Var, oh: usize, ow: usize) -> Var {
        let (_, _, h, w) = self.value(input).dims4();
        if (h, w) == (oh, ow) {
            return input;
        }
        let t = resize_nearest(self.value(input), oh, ow);
        let ng = self.ng(input);
        self.push(t, Op::Resize(input), ng)
    }

    pub fn avg_pool2(&mut self, input: Var) -> Var {
        let t = avg_pool2(self.value(input));
        let ng = self.ng(input);
        self.push(t, Op::AvgPool2(input), ng)
    }

    /// Concatenate 4-D tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut ctot = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape(format!("concat {:?}", self.value(p).shape())));
            }
            ctot += pc;
        }
        let mut data = Vec::with_capacity(n * ctot * h * w);
        for s in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).batch_item(s));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(vec![n, ctot, h, w], data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Select batch items (repeats allowed).
    pub fn gather(&mut self, input: Var, index: &[usize]) -> Var {
        let x = self.value(input);
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        let mut data = Vec::with_capacity(index.len() * x.numel() / x.shape()[0]);
        for &i in index {
            data.extend_from_slice(x.batch_item(i));
        }
        let ng = self.ng(input);
        self.push(Tensor::new(shape, data).expect("gather"), Op::Gather { input, index: index.to_vec() }, ng)
    }

    /// `[N, C, H, W] → [N, 1, H, W]`: Euclidean norm over channels per pixel.
    pub fn channel_norm(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut out = vec![0.0; n * hw];
        for s in 0..n {
            let item = x.batch_item(s);
            let o = &mut out[s * hw..(s + 1) * hw];
            for ch in 0..c {
                for (acc, v) in o.iter_mut().zip(&item[ch * hw..(ch + 1) * hw]) {
                    *acc += v * v;
                }
            }
            o.iter_mut().for_each(|v| *v = v.sqrt());
        }
        let ng = self.ng(input);
        self.push(Tensor::new(vec![n, 1, h, w], out).expect("norm"), Op::ChannelNorm(input), ng)
    }

    /// Scalar `Σ input ⊙ weights` with constant weights.
    pub fn weighted_sum(&mut self, input: Var, weights: Tensor) -> Result<Var> {
        same_shape(self.value(input), &weights, "weighted_sum")?;
        let s = self.value(input).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let ng = self.ng(input);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input, weights }, ng))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let m = x.data().iter().sum::<f64>() / x.numel() as f64;
        let ng = self.ng(input);
        self.push(Tensor::scalar(m), Op::Mean(input), ng)
    }

    /// Sum of scalar nodes; an empty list gives the constant 0.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let s = parts.iter().map(|&p| self.value(p).item()).sum();
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::scalar(s), Op::SumAll(parts.to_vec()), ng)
    }

    /// `out[n,:,p] = z[n,:,p] + coeff[n,p] · dirs[index[n], :]`, where `dirs`
    /// is a `[K, D]` matrix and `coeff` is `[N, 1, H, W]` (typically `α·M`).
    pub fn direction_edit(&mut self, z: Var, dirs: Var, coeff: Tensor, index: Vec<Option<usize>>) -> Result<Var> {
        let zt = self.value(z);
        let (n, d, h, w) = zt.dims4();
        let dt = self.value(dirs);
        if dt.shape().len() != 2 || dt.shape()[1] != d || coeff.shape() != [n, 1, h, w] || index.len() != n {
            return Err(Error::Shape(format!(
                "direction edit: z {:?}, dirs {:?}, coeff {:?}, {} indices",
                zt.shape(),
                dt.shape(),
                coeff.shape(),
                index.len()
            )));
        }
        let hw = h * w;
        let mut out = zt.data().to_vec();
        for (s, k) in index.iter().enumerate() {
            let Some(k) = *k else { continue };
            let v = &dt.data()[k * d..(k + 1) * d];
            let cf = coeff.batch_item(s);
            for (ch, &vd) in v.iter().enumerate() {
                let o = &mut out[(s * d + ch) * hw..(s * d + ch + 1) * hw];
                for (x, &c) in o.iter_mut().zip(cf) {
                    if c != 0.0 {
                        *x += c * vd;
                    }
                }
            }
        }
        let ng = self.ng(z) || self.ng(dirs);
        let t = Tensor::new(zt.shape().to_vec(), out)?;
        Ok(self.push(t, Op::DirectionEdit { z, dirs, coeff, index }, ng))
    }

    /// Mean pixelwise softmax cross-entropy; `labels` has one class per pixel
    /// in `[n][row][col]` order.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::Shape(format!("{} labels for {:?}", labels.len(), x.shape())));
        }
        let mut probs = vec![0.0; x.numel()];
        let mut loss = 0.0;
        for s in 0..n {
            let item = x.batch_item(s);
            for p in 0..hw {
                let m = (0..c).map(|ch| item[ch * hw + p]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ch| (item[ch * hw + p] - m).exp()).sum();
                for ch in 0..c {
                    probs[(s * c + ch) * hw + p] = (item[ch * hw + p] - m).exp() / z;
                }
                let l = labels[s * hw + p];
                loss -= item[l * hw + p] - m - z.ln();
            }
        }
        let ng = self.ng(logits);
        let value = Tensor::scalar(loss / (n * hw) as f64);
        Ok(self.push(value, Op::SoftmaxCe { logits, labels: labels.to_vec(), probs }, ng))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.ng(v) {
            self.accumulate(grads, v, f());
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).expect("grad shape");
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_with(grads, *a, || g.clone());
                self.accumulate_with(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate_with(grads, *a, || g.clone());
                self.accumulate_with(grads, *b, || like(g, g.data().iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                self.accumulate_with(grads, *a, || like(g, g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect()));
                self.accumulate_with(grads, *b, || like(g, g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect()));
            }
            Op::Scale(a, s) => {
                self.accumulate_with(grads, *a, || like(g, g.data().iter().map(|x| x * s).collect()));
            }
            Op::AddScalar(a) => self.accumulate_with(grads, *a, || g.clone()),
            Op::LeakyRelu(a, slope) => {
                let ta = val(*a);
                self.accumulate_with(grads, *a, || {
                    like(g, g.data().iter().zip(ta.data()).map(|(gv, &x)| if x > 0.0 { *gv } else { slope * gv }).collect())
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                self.accumulate_with(grads, *a, || {
                    like(g, g.data().iter().zip(y.data()).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect())
                });
            }
            Op::Conv { input, weight, bias, geom } => {
                let cg = conv2d_backward(
                    val(*input),
                    val(*weight),
                    g,
                    *geom,
                    self.ng(*input),
                    self.ng(*weight),
                    bias.is_some_and(|b| self.ng(b)),
                );
                if let Some(t) = cg.input {
                    self.accumulate(grads, *input, t);
                }
                if let Some(t) = cg.weight {
                    self.accumulate(grads, *weight, t);
                }
                if let (Some(b), Some(t)) = (bias, cg.bias) {
                    self.accumulate(grads, *b, t);
                }
            }
            Op::InstanceNorm { input, inv_std } => {
                let y = &node.value;
                let (_, _, h, w) = y.dims4();
                let hw = h * w;
                self.accumulate_with(grads, *input, || {
                    let mut dx = vec![0.0; y.numel()];
                    for (p, inv) in inv_std.iter().enumerate() {
                        let gy = &g.data()[p * hw..(p + 1) * hw];
                        let yy = &y.data()[p * hw..(p + 1) * hw];
                        let mg = gy.iter().sum::<f64>() / hw as f64;
                        let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                        for ((d, gv), yv) in dx[p * hw..(p + 1) * hw].iter_mut().zip(gy).zip(yy) {
                            *d = inv * (gv - mg - yv * mgy);
                        }
                    }
                    like(y, dx)
                });
            }
            Op::Resize(a) => {
                let x = val(*a);
                self.accumulate_with(grads, *a, || {
                    let (_, _, h, w) = x.dims4();
                    let (_, _, oh, ow) = g.dims4();
                    let mut dx = vec![0.0; x.numel()];
                    for (plane, dplane) in g.data().chunks_exact(oh * ow).zip(dx.chunks_exact_mut(h * w)) {
                        for i in 0..oh {
                            let r = nearest_index(i, h, oh);
                            for j in 0..ow {
                                dplane[r * w + nearest_index(j, w, ow)] += plane[i * ow + j];
                            }
                        }
                    }
                    like(x, dx)
                });
            }
            Op::AvgPool2(a) => {
                let x = val(*a);
                self.accumulate_with(grads, *a, || {
                    let (_, _, h, w) = x.dims4();
                    let (oh, ow) = (h / 2, w / 2);
                    let mut dx = vec![0.0; x.numel()];
                    for (plane, dplane) in g.data().chunks_exact(oh * ow).zip(dx.chunks_exact_mut(h * w)) {
                        for i in 0..oh {
                            for j in 0..ow {
                                let q = 0.25 * plane[i * ow + j];
                                dplane[2 * i * w + 2 * j] += q;
                                dplane[2 * i * w + 2 * j + 1] += q;
                                dplane[(2 * i + 1) * w + 2 * j] += q;
                                dplane[(2 * i + 1) * w + 2 * j + 1] += q;
                            }
                        }
                    }
                    like(x, dx)
                });
            }
            Op::Concat(parts) => {
                let (n, ctot, h, w) = g.dims4();
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = val(p).dims4().1;
                    self.accumulate_with(grads, p, || {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let base = (s * ctot + offset) * hw;
                            d.extend_from_slice(&g.data()[base..base + pc * hw]);
                        }
                        like(val(p), d)
                    });
                    offset += pc;
                }
            }
            Op::Gather { input, index } => {
                let x = val(*input);
                self.accumulate_with(grads, *input, || {
                    let per = x.numel() / x.shape()[0];
                    let mut dx = vec![0.0; x.numel()];
                    for (j, &i) in index.iter().enumerate() {
                        for (d, gv) in dx[i * per..(i + 1) * per].iter_mut().zip(g.batch_item(j)) {
                            *d += gv;
                        }
                    }
                    like(x, dx)
                });
            }
            Op::ChannelNorm(a) => {
                let x = val(*a);
                let y = &node.value;
                self.accumulate_with(grads, *a, || {
                    let (n, c, h, w) = x.dims4();
                    let hw = h * w;
                    let mut dx = vec![0.0; x.numel()];
                    for s in 0..n {
                        let yn = &y.data()[s * hw..(s + 1) * hw];
                        let gn = &g.data()[s * hw..(s + 1) * hw];
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            for p in 0..hw {
                                // subgradient 0 where the norm vanishes
                                if yn[p] > 0.0 {
                                    dx[base + p] = gn[p] * x.data()[base + p] / yn[p];
                                }
                            }
                        }
                    }
                    like(x, dx)
                });
            }
            Op::WeightedSum { input, weights } => {
                let gs = g.item();
                self.accumulate_with(grads, *input, || like(weights, weights.data().iter().map(|w| w * gs).collect()));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gs = g.item() / x.numel() as f64;
                self.accumulate_with(grads, *a, || Tensor::filled(x.shape(), gs));
            }
            Op::SumAll(parts) => {
                for &p in parts {
                    self.accumulate_with(grads, p, || g.clone());
                }
            }
            Op::DirectionEdit { z, dirs, coeff, index } => {
                self.accumulate_with(grads, *z, || g.clone());
                let dt = val(*dirs);
                self.accumulate_with(grads, *dirs, || {
                    let (_, d, h, w) = g.dims4();
                    let hw = h * w;
                    let mut dd = vec![0.0; dt.numel()];
                    for (s, k) in index.iter().enumerate() {
                        let Some(k) = *k else { continue };
                        let cf = coeff.batch_item(s);
                        for ch in 0..d {
                            let gp = &g.data()[(s * d + ch) * hw..(s * d + ch + 1) * hw];
                            dd[k * d + ch] += gp.iter().zip(cf).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    like(dt, dd)
                });
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let x = val(*logits);
                let (n, c, h, w) = x.dims4();
                let hw = h * w;
                let scale = g.item() / (n * hw) as f64;
                self.accumulate_with(grads, *logits, || {
                    let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for s in 0..n {
                        for p in 0..hw {
                            dx[(s * c + labels[s * hw + p]) * hw + p] -= scale;
                        }
                    }
                    like(x, dx)
                });
            }
        }
    }
}
