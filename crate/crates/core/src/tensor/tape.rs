//! Operation tape for reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value. Nodes can only
//! reference earlier nodes, so the tape is topologically ordered by
//! construction and `backward` is a single reverse sweep.

use crate::error::{Error, Result};

use super::conv::{self, ConvGeom, ConvSpec};
use super::kernels::{self, FrameGeom};
use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    Relu(Var),
    MaxPool2d { input: Var, argmax: Vec<usize> },
    GlobalAvgPool { input: Var, spatial: usize },
    Linear { input: Var, weight: Var, bias: Var },
    Sigmoid(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    Scale(Var, T),
    WeightedSum(Var, Vec<T>),
    Frame { image: Var, border: Var, geom: FrameGeom, dims: (usize, usize, usize) },
    Resize { input: Var, planes: usize, from: (usize, usize), to: (usize, usize) },
    Crop { input: Var, planes: usize, from: (usize, usize), offset: (usize, usize), to: (usize, usize) },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf whose gradient `backward` will report.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let value = Tensor::new(shape, data)?;
        if !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// 2-D cross-correlation. `x` is NCHW, `weight` is O x C x K x K, `bias` has O entries.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("expected 4-d input and weight, got {xs:?} and {ws:?}")));
        }
        let x5 = [xs[0], xs[1], 1, xs[2], xs[3]];
        let w5 = [ws[0], ws[1], 1, ws[2], ws[3]];
        let geom = ConvGeom::new("conv2d", &x5, &w5, ConvSpec::planar(stride, padding))?;
        self.conv_common("conv2d", x, weight, bias, geom, false)
    }

    /// 3-D cross-correlation over NCTHW input with an O x C x KT x KH x KW weight.
    pub fn conv3d(&mut self, x: Var, weight: Var, bias: Var, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::shape("conv3d", format!("expected 5-d input and weight, got {xs:?} and {ws:?}")));
        }
        let geom = ConvGeom::new("conv3d", &xs, &ws, spec)?;
        self.conv_common("conv3d", x, weight, bias, geom, true)
    }

    fn conv_common(&mut self, name: &'static str, x: Var, weight: Var, bias: Var, geom: ConvGeom, volumetric: bool) -> Result<Var> {
        if self.shape(bias) != [geom.o] {
            return Err(Error::shape(name, format!("bias has shape {:?}, expected [{}]", self.shape(bias), geom.o)));
        }
        let y = conv::forward(&geom, self.value(x).data(), self.value(weight).data(), self.value(bias).data());
        let [ot, oh, ow] = geom.out;
        let shape = if volumetric { vec![geom.n, geom.o, ot, oh, ow] } else { vec![geom.n, geom.o, oh, ow] };
        self.push(name, shape, y, Op::Conv { input: x, weight, bias, geom }, &[x, weight, bias])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = t.shape().to_vec();
        self.push("relu", shape, data, Op::Relu(x), &[x])
    }

    /// Non-overlapping `k x k` max pooling over NCHW; ties keep the first index.
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::shape("max_pool2d", format!("cannot pool {s:?} with window {k}")));
        }
        let (oh, ow) = (s[2] / k, s[3] / k);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..s[0] * s[1] {
            let base = plane * s[2] * s[3];
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * k * s[3] + j * k;
                    for a in 0..k {
                        for b in 0..k {
                            let idx = base + (i * k + a) * s[3] + j * k + b;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        self.push("max_pool2d", vec![s[0], s[1], oh, ow], out, Op::MaxPool2d { input: x, argmax }, &[x])
    }

    /// Mean over every axis after the channel axis: N x C x ... -> N x C.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("global_avg_pool", format!("expected N x C x spatial, got {s:?}")));
        }
        let spatial: usize = s[2..].iter().product();
        let inv = T::one() / T::lit(spatial as f64);
        let out = self.value(x).data().chunks(spatial).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        self.push("global_avg_pool", vec![s[0], s[1]], out, Op::GlobalAvgPool { input: x, spatial }, &[x])
    }

    /// `x` (N x I) times `weight` (O x I) transposed, plus `bias` (O).
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?} incompatible with weight {ws:?}")));
        }
        if self.shape(bias) != [ws[0]] {
            return Err(Error::shape("linear", format!("bias {:?} vs {} outputs", self.shape(bias), ws[0])));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let mut y = vec![T::zero(); n * o];
        T::gemm(n, i, o, self.value(x).data(), (i as isize, 1), self.value(weight).data(), (1, i as isize), T::zero(), &mut y, (o as isize, 1));
        let b = self.value(bias).data();
        for row in y.chunks_mut(o) {
            row.iter_mut().zip(b).for_each(|(v, &bb)| *v = *v + bb);
        }
        self.push("linear", vec![n, o], y, Op::Linear { input: x, weight, bias }, &[x, weight, bias])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        self.push("sigmoid", shape, data, Op::Sigmoid(x), &[x])
    }

    /// Mean softmax cross-entropy of `N x C` logits against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("softmax_cross_entropy", format!("logits {s:?} vs {} labels", labels.len())));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = T::zero();
        for (row, &y) in self.value(logits).data().chunks(c).zip(labels) {
            total = total + kernels::log_sum_exp(row) - row[y];
        }
        for row in probs.chunks_mut(c) {
            kernels::softmax_row(row);
        }
        let loss = total / T::lit(labels.len() as f64);
        self.push(
            "softmax_cross_entropy",
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push("sum", vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        self.push("mean", vec![1], vec![m], Op::Mean(x), &[x])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * factor).collect();
        let shape = t.shape().to_vec();
        self.push("scale", shape, data, Op::Scale(x, factor), &[x])
    }

    /// Scalar `sum_i weights_i * x_i` with constant weights of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(Error::shape("weighted_sum", format!("{:?} vs {:?}", self.shape(x), weights.shape())));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum::<T>();
        self.push("weighted_sum", vec![1], vec![s], Op::WeightedSum(x, weights.data().to_vec()), &[x])
    }

    /// Surrounds every plane of `image` (N x C x H x W or N x C x T x H x W)
    /// with the border values in `border`, laid out as in [`FrameGeom::canvas_map`].
    pub fn frame(&mut self, image: Var, border: Var, geom: FrameGeom) -> Result<Var> {
        let s = self.shape(image).to_vec();
        let (n, c, frames) = match s.len() {
            4 => (s[0], s[1], 1),
            5 => (s[0], s[1], s[2]),
            _ => return Err(Error::shape("frame", format!("expected 4-d or 5-d input, got {s:?}"))),
        };
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if (h, w) != (geom.interior_h, geom.interior_w) {
            return Err(Error::Geometry(format!(
                "framing interior is {}x{} but input is {h}x{w}",
                geom.interior_h, geom.interior_w
            )));
        }
        if geom.channels != 1 && geom.channels != c {
            return Err(Error::shape("frame", format!("{} border channels vs {c} image channels", geom.channels)));
        }
        if self.value(border).len() != geom.border_len() {
            return Err(Error::shape(
                "frame",
                format!("border holds {} values, geometry needs {}", self.value(border).len(), geom.border_len()),
            ));
        }
        let out = kernels::frame_forward(self.value(image).data(), self.value(border).data(), &geom, (n, c, frames));
        let (oh, ow) = geom.outer();
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        self.push("frame", shape, out, Op::Frame { image, border, geom, dims: (n, c, frames) }, &[image, border])
    }

    /// Half-pixel-centre bilinear resize of the last two axes.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", format!("cannot resize {s:?} to {out_h}x{out_w}")));
        }
        let r = s.len();
        let from = (s[r - 2], s[r - 1]);
        let planes: usize = s[..r - 2].iter().product();
        let out = kernels::resize_forward(self.value(x).data(), planes, from, (out_h, out_w));
        let mut shape = s.clone();
        shape[r - 2] = out_h;
        shape[r - 1] = out_w;
        self.push("resize_bilinear", shape, out, Op::Resize { input: x, planes, from, to: (out_h, out_w) }, &[x])
    }

    /// Window of the last two axes starting at `(top, left)`.
    pub fn crop(&mut self, x: Var, (top, left): (usize, usize), (h, w): (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let r = s.len();
        if r < 2 || h == 0 || w == 0 || top + h > s[r - 2] || left + w > s[r - 1] {
            return Err(Error::shape("crop", format!("window {h}x{w} at ({top}, {left}) outside {s:?}")));
        }
        let from = (s[r - 2], s[r - 1]);
        let planes: usize = s[..r - 2].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for i in 0..h {
                let start = p * from.0 * from.1 + (top + i) * from.1 + left;
                out.extend_from_slice(&xd[start..start + w]);
            }
        }
        let mut shape = s.clone();
        shape[r - 2] = h;
        shape[r - 1] = w;
        let op = Op::Crop { input: x, planes, from, offset: (top, left), to: (h, w) };
        self.push("crop", shape, out, op, &[x])
    }

    /// Reverse sweep from a scalar `loss`; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = self
            .nodes
            .into_iter()
            .zip(grads)
            .map(|(node, g)| match g {
                Some(data) if node.needs_grad => Some(Tensor { shape: node.value.shape, data }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, geom } => {
                if self.wants(*input) {
                    accumulate(grads, *input, conv::backward_input(geom, val(*weight), g));
                }
                if self.wants(*weight) || self.wants(*bias) {
                    let (dw, db) = conv::backward_params(geom, val(*input), g);
                    if self.wants(*weight) {
                        accumulate(grads, *weight, dw);
                    }
                    if self.wants(*bias) {
                        accumulate(grads, *bias, db);
                    }
                }
            }
            Op::Relu(x) => {
                let d = val(*x).iter().zip(g).map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() }).collect();
                accumulate(grads, *x, d);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut d = vec![T::zero(); val(*input).len()];
                for (&idx, &gv) in argmax.iter().zip(g) {
                    d[idx] = d[idx] + gv;
                }
                accumulate(grads, *input, d);
            }
            Op::GlobalAvgPool { input, spatial } => {
                let inv = T::one() / T::lit(*spatial as f64);
                let mut d = Vec::with_capacity(g.len() * spatial);
                for &gv in g {
                    d.extend(std::iter::repeat_n(gv * inv, *spatial));
                }
                accumulate(grads, *input, d);
            }
            Op::Linear { input, weight, bias } => {
                let ws = self.nodes[weight.0].value.shape();
                let (o, i) = (ws[0], ws[1]);
                let n = g.len() / o;
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); n * i];
                    T::gemm(n, o, i, g, (o as isize, 1), val(*weight), (i as isize, 1), T::zero(), &mut dx, (i as isize, 1));
                    accumulate(grads, *input, dx);
                }
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); o * i];
                    T::gemm(o, n, i, g, (1, o as isize), val(*input), (i as isize, 1), T::zero(), &mut dw, (i as isize, 1));
                    accumulate(grads, *weight, dw);
                }
                if self.wants(*bias) {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = y.iter().zip(g).map(|(&s, &gv)| gv * s * (T::one() - s)).collect();
                accumulate(grads, *x, d);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / T::lit(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &y) in labels.iter().enumerate() {
                    d[row * c + y] = d[row * c + y] - scale;
                }
                accumulate(grads, *logits, d);
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                accumulate(grads, *x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.iter().map(|&v| v * *f).collect()),
            Op::WeightedSum(x, w) => accumulate(grads, *x, w.iter().map(|&wv| wv * g[0]).collect()),
            Op::Frame { image, border, geom, dims } => {
                let (dimg, dborder) = kernels::frame_backward(g, geom, *dims);
                if self.wants(*image) {
                    accumulate(grads, *image, dimg);
                }
                if self.wants(*border) {
                    accumulate(grads, *border, dborder);
                }
            }
            Op::Resize { input, planes, from, to } => {
                accumulate(grads, *input, kernels::resize_backward(g, *planes, *from, *to));
            }
            Op::Crop { input, planes, from, offset, to } => {
                let mut d = vec![T::zero(); planes * from.0 * from.1];
                for p in 0..*planes {
                    for i in 0..to.0 {
                        let dst = p * from.0 * from.1 + (offset.0 + i) * from.1 + offset.1;
                        let src = (p * to.0 + i) * to.1;
                        d[dst..dst + to.1].copy_from_slice(&g[src..src + to.1]);
                    }
                }
                accumulate(grads, *input, d);
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&d).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(d),
    }
}

/// Gradients produced by [`Tape::backward`], keyed by the recorded [`Var`]s.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` depends on a
    /// trainable leaf and is connected to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
        assert_eq!(g.get(x).unwrap().shape(), &[2, 3]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv2d_sums_ones() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut tape = Tape::<f32>::new();
        let img: Vec<f32> = (0..2 * 1 * 4 * 5).map(|i| i as f32 * 0.25 - 3.0).collect();
        let x = tape.constant(Tensor::new(vec![2, 1, 4, 5], img.clone()).unwrap());
        let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), img.as_slice());
    }

    #[test]
    fn conv3d_sums_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let w = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv3d(x, w, b, ConvSpec::volumetric([1, 1, 1], [0, 0, 0])).unwrap();
        assert_eq!(tape.value(y).item(), 8.0);
    }

    #[test]
    fn conv3d_temporal_identity() {
        let mut tape = Tape::<f64>::new();
        let clip: Vec<f64> = (0..3 * 4 * 3).map(|i| (i as f64).sin()).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 4, 3], clip.clone()).unwrap());
        // 3x3x3 kernel with a single 1 at the centre tap, padded: identity.
        let mut k = vec![0.0; 27];
        k[13] = 1.0;
        let w = tape.constant(Tensor::new(vec![1, 1, 3, 3, 3], k).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv3d(x, w, b, ConvSpec::volumetric([1, 1, 1], [1, 1, 1])).unwrap();
        assert_eq!(tape.value(y).data(), clip.as_slice());
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(&[3, 7]));
        let loss = tape.softmax_cross_entropy(l, &[0, 3, 6]).unwrap();
        assert!((tape.value(loss).item() - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let mut tape = Tape::<f32>::new();
        let l = tape.leaf(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[0, 4]),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        // x . x^T uses the same node as input and weight: d/dx = 2x.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.linear(x, x, b).unwrap();
        assert_eq!(tape.value(y).item(), 5.25);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::full(&[2], 1.0));
        let x = tape.leaf(Tensor::full(&[2], 2.0));
        let w = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let xr = tape.value(x).clone().reshape(vec![1, 2]).unwrap();
        let xr = tape.leaf(xr);
        let y = tape.linear(xr, w, b).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(w).is_none());
        assert_eq!(g.get(xr).unwrap().data(), &[1.0, 1.0]);
    }
}
