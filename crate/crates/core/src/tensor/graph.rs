use std::borrow::Cow;

use super::Tensor;
use crate::{Error, Result};

/// Stabiliser added to squared norms so that `sqrt` stays differentiable at 0.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding for [`Graph::conv2d`].
///
/// `Same` pads with zeros so that the output extent is `ceil(len / stride)`;
/// when the total padding is odd the extra row/column goes to the
/// bottom/right.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        stride: usize,
        pad_top: usize,
        pad_left: usize,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    MatVec {
        weights: Var,
        input: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Ln(Var),
    Square(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Sum(Var),
    Select {
        input: Var,
        index: usize,
    },
    Squash(Var),
    Norms(Var),
    CapsulePredict {
        input: Var,
        weights: Var,
    },
    RouteSum {
        predictions: Var,
        couplings: Vec<f64>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Transpose(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::BiasAdd { .. } => "bias_add",
            Op::MatVec { .. } => "matvec",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Ln(_) => "ln",
            Op::Square(_) => "square",
            Op::Softmax { .. } => "softmax",
            Op::MaxPool { .. } => "max_pool",
            Op::Reshape(_) => "reshape",
            Op::Concat(_) => "concat",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine { .. } => "affine",
            Op::Sum(_) => "sum",
            Op::Select { .. } => "select",
            Op::Squash(_) => "squash",
            Op::Norms(_) => "norms",
            Op::CapsulePredict { .. } => "capsule_predict",
            Op::RouteSum { .. } => "route_sum",
            Op::Upsample { .. } => "upsample",
            Op::Transpose(_) => "transpose",
        }
    }
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
///
/// Parameters are borrowed, never copied; the graph is meant to be built,
/// differentiated once and dropped. Gradients are retained for every node
/// that depends on a `requires_grad` leaf, so intermediate feature-map
/// gradients (needed for class-activation maps) are available after
/// [`Graph::backward`].
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'p, [f64]>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Borrow a parameter; it takes part in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn param(&mut self, tensor: &'p Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.values()),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    /// Borrow a parameter as a constant (no gradient flows into it).
    pub fn frozen(&mut self, tensor: &'p Tensor) -> Var {
        self.push(
            tensor.shape().to_vec(),
            Cow::Borrowed(tensor.values()),
            Op::Leaf,
            false,
        )
    }

    /// Take ownership of a tensor as a leaf.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let shape = tensor.shape().to_vec();
        self.push(shape, Cow::Owned(tensor.into_values()), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.input(t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("graph nodes are always well-shaped")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Consume the graph (releasing parameter borrows) and return the
    /// gradients of the requested nodes, zero-filled where no gradient
    /// reached them.
    pub fn into_grads(mut self, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter()
            .map(|v| {
                let n = self.nodes[v.0].value.len();
                self.grads
                    .get_mut(v.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; n])
            })
            .collect()
    }

    /// First node (in execution order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.iter().any(|v| !v.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_non_finite() {
            Some((index, op)) => Err(Error::NonFinite {
                index,
                op: op.to_string(),
            }),
            None => Ok(()),
        }
    }

    // ----------------------------------------------------------------- ops

    /// Cross-correlation of `input [C,H,W]` with `kernels [F,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (xs, ks) = (self.shape(input).to_vec(), self.shape(kernels).to_vec());
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("expected input [C,H,W] and kernels [F,C,kh,kw], got {xs:?} and {ks:?}"),
            ));
        }
        if xs[0] != ks[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels but kernels expect {}", xs[0], ks[1]),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (f, kh, kw) = (ks[0], ks[2], ks[3]);
        let geo = ConvGeometry::new(h, w, kh, kw, stride, padding).ok_or_else(|| {
            Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            )
        })?;
        let mut out = vec![0.0; f * geo.out_h * geo.out_w];
        conv_forward(
            self.value(input),
            self.value(kernels),
            &mut out,
            c,
            f,
            kh,
            kw,
            h,
            w,
            &geo,
        );
        let rg = self.rg(input) || self.rg(kernels);
        Ok(self.push(
            vec![f, geo.out_h, geo.out_w],
            Cow::Owned(out),
            Op::Conv2d {
                input,
                kernels,
                stride,
                pad_top: geo.pad_top,
                pad_left: geo.pad_left,
            },
            rg,
        ))
    }

    /// Adds `bias[f]` to every element of slice `f` along the leading axis.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let bs = self.shape(bias);
        if xs.is_empty() || bs.len() != 1 || bs[0] != xs[0] {
            return Err(Error::shape(
                "bias_add",
                format!("input {xs:?} with bias {bs:?}"),
            ));
        }
        let inner = numel(&xs[1..]);
        let b = self.value(bias);
        let mut out = self.value(input).to_vec();
        if inner > 0 {
            for (chunk, bv) in out.chunks_mut(inner).zip(b) {
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let rg = self.rg(input) || self.rg(bias);
        Ok(self.push(xs, Cow::Owned(out), Op::BiasAdd { input, bias }, rg))
    }

    /// `weights [m,n] · input [n]`.
    pub fn matvec(&mut self, weights: Var, input: Var) -> Result<Var> {
        let ws = self.shape(weights).to_vec();
        let xs = self.shape(input);
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(Error::shape(
                "dense",
                format!("weights {ws:?} with input {xs:?}"),
            ));
        }
        let (m, n) = (ws[0], ws[1]);
        let (w, x) = (self.value(weights), self.value(input));
        let out: Vec<f64> = (0..m)
            .map(|i| {
                w[i * n..(i + 1) * n]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let rg = self.rg(weights) || self.rg(input);
        Ok(self.push(vec![m], Cow::Owned(out), Op::MatVec { weights, input }, rg))
    }

    /// Fully connected layer: `weights · input + bias`.
    pub fn dense(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let y = self.matvec(weights, input)?;
        self.bias_add(y, bias)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, Cow::Owned(out), op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, Op::Affine { input: x, scale }, |v| scale * v + shift)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| xv[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (xv[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { input: x, axis }, rg))
    }

    /// Non-overlapping max pooling over the last two axes of `[C,H,W]`
    /// (window = stride = `size`, trailing rows/columns dropped).
    pub fn max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || size == 0 || s[1] < size || s[2] < size {
            return Err(Error::shape("max_pool", format!("window {size} on {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / size, w / size);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..size {
                        let row = (ch * h + oy * size + dy) * w + ox * size;
                        for dx in 0..size {
                            let v = xv[row + dx];
                            if v > best {
                                best = v;
                                best_idx = row + dx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![c, oh, ow],
            Cow::Owned(out),
            Op::MaxPool { input: x, argmax },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, Cow::Owned(value), Op::Reshape(x), rg))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.reshape(x, vec![n])
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs trailing {tail:?}"),
                ));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, Cow::Owned(out), Op::Concat(parts.to_vec()), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, Cow::Owned(out), op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Vec::new(), Cow::Owned(vec![total]), Op::Sum(x), rg)
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or(Error::Empty("add_all terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Scalar element `x[index]` of the flattened tensor.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).len();
        if index >= n {
            return Err(Error::shape("select", format!("index {index} out of {n}")));
        }
        let v = self.value(x)[index];
        let rg = self.rg(x);
        Ok(self.push(
            Vec::new(),
            Cow::Owned(vec![v]),
            Op::Select { input: x, index },
            rg,
        ))
    }

    /// Capsule squash applied to each vector along the last axis.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("squash", "scalar input"))?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(d) {
            let q = row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS;
            let g = squash_gain(q);
            row.iter_mut().for_each(|v| *v *= g);
        }
        let rg = self.rg(x);
        Ok(self.push(shape, Cow::Owned(out), Op::Squash(x), rg))
    }

    /// Stabilised Euclidean norm of each vector along the last axis.
    pub fn norms(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("norms", "scalar input"))?;
        let out: Vec<f64> = self
            .value(x)
            .chunks(d)
            .map(|row| (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt())
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            shape[..shape.len() - 1].to_vec(),
            Cow::Owned(out),
            Op::Norms(x),
            rg,
        ))
    }

    /// Prediction vectors `û[i,j] = W[i,j] · u[i]` for capsules
    /// `input [I, d_in]` and transforms `weights [I, J, d_out, d_in]`.
    pub fn capsule_predict(&mut self, input: Var, weights: Var) -> Result<Var> {
        let us = self.shape(input).to_vec();
        let ws = self.shape(weights).to_vec();
        if us.len() != 2 || ws.len() != 4 || ws[0] != us[0] || ws[3] != us[1] {
            return Err(Error::shape(
                "capsule_predict",
                format!("capsules {us:?} with transforms {ws:?}"),
            ));
        }
        let (ni, nj, dout, din) = (ws[0], ws[1], ws[2], ws[3]);
        let (u, w) = (self.value(input), self.value(weights));
        let mut out = vec![0.0; ni * nj * dout];
        for i in 0..ni {
            let ui = &u[i * din..(i + 1) * din];
            for (r, o) in out[i * nj * dout..(i + 1) * nj * dout]
                .iter_mut()
                .enumerate()
            {
                let wr = &w[(i * nj * dout + r) * din..(i * nj * dout + r + 1) * din];
                *o = wr.iter().zip(ui).map(|(a, b)| a * b).sum();
            }
        }
        let rg = self.rg(input) || self.rg(weights);
        Ok(self.push(
            vec![ni, nj, dout],
            Cow::Owned(out),
            Op::CapsulePredict { input, weights },
            rg,
        ))
    }

    /// `s[j] = Σ_i c[i,j] · û[i,j]` with constant couplings `c [I,J]`.
    pub fn route_sum(&mut self, predictions: Var, couplings: &[f64]) -> Result<Var> {
        let ps = self.shape(predictions).to_vec();
        if ps.len() != 3 || couplings.len() != ps[0] * ps[1] {
            return Err(Error::shape(
                "route_sum",
                format!("predictions {ps:?} with {} couplings", couplings.len()),
            ));
        }
        let (ni, nj, d) = (ps[0], ps[1], ps[2]);
        let p = self.value(predictions);
        let mut out = vec![0.0; nj * d];
        for i in 0..ni {
            for j in 0..nj {
                let c = couplings[i * nj + j];
                let src = &p[(i * nj + j) * d..(i * nj + j + 1) * d];
                out[j * d..(j + 1) * d]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(o, s)| *o += c * s);
            }
        }
        let rg = self.rg(predictions);
        Ok(self.push(
            vec![nj, d],
            Cow::Owned(out),
            Op::RouteSum {
                predictions,
                couplings: couplings.to_vec(),
            },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of the last two axes by `factor`.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || factor == 0 {
            return Err(Error::shape(
                "upsample",
                format!("factor {factor} on {s:?}"),
            ));
        }
        let n = s.len();
        let (h, w) = (s[n - 2], s[n - 1]);
        let planes = numel(&s[..n - 2]);
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x);
        let mut out = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = xv[(p * h + y / factor) * w + xx / factor];
                }
            }
        }
        let mut shape = s[..n - 2].to_vec();
        shape.extend([oh, ow]);
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::Upsample { input: x, factor },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(
                "transpose",
                format!("{s:?} has fewer than two axes"),
            ));
        }
        let n = s.len();
        let (r, c) = (s[n - 2], s[n - 1]);
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.chunks(r * c).zip(out.chunks_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s;
        shape.swap(n - 2, n - 1);
        let rg = self.rg(x);
        Ok(self.push(shape, Cow::Owned(out), Op::Transpose(x), rg))
    }

    // ------------------------------------------------------------ backward

    /// Clear gradients so that [`Graph::backward`] may run again.
    pub fn reset(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// A second call without [`Graph::reset`] fails with
    /// [`Error::BackwardTwice`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, idx, &gout);
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }
}

fn acc(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
    f(g);
}

fn propagate(nodes: &[Node<'_>], grads: &mut [Option<Vec<f64>>], idx: usize, gout: &[f64]) {
    let rg = |v: &Var| nodes[v.0].requires_grad;
    let shape = |v: &Var| nodes[v.0].shape.as_slice();
    let val = |v: &Var| &*nodes[v.0].value;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            kernels,
            stride,
            pad_top,
            pad_left,
        } => {
            let (xs, ks) = (shape(input).to_vec(), shape(kernels).to_vec());
            let os = nodes[idx].shape.clone();
            let geo = ConvGeometry {
                out_h: os[1],
                out_w: os[2],
                stride: *stride,
                pad_top: *pad_top,
                pad_left: *pad_left,
            };
            let (c, h, w, f, kh, kw) = (xs[0], xs[1], xs[2], ks[0], ks[2], ks[3]);
            if rg(input) {
                let k = val(kernels);
                let mut dx = vec![0.0; c * h * w];
                conv_backward_input(gout, k, &mut dx, c, f, kh, kw, h, w, &geo);
                acc(nodes, grads, *input, |g| add_into(g, &dx));
            }
            if rg(kernels) {
                let x = val(input);
                let mut dk = vec![0.0; f * c * kh * kw];
                conv_backward_kernels(gout, x, &mut dk, c, f, kh, kw, h, w, &geo);
                acc(nodes, grads, *kernels, |g| add_into(g, &dk));
            }
        }
        Op::BiasAdd { input, bias } => {
            acc(nodes, grads, *input, |g| add_into(g, gout));
            let f = shape(bias)[0];
            let inner = gout.len() / f;
            acc(nodes, grads, *bias, |g| {
                if inner > 0 {
                    for (gb, chunk) in g.iter_mut().zip(gout.chunks(inner)) {
                        *gb += chunk.iter().sum::<f64>();
                    }
                }
            });
        }
        Op::MatVec { weights, input } => {
            let (m, n) = (shape(weights)[0], shape(weights)[1]);
            if rg(weights) {
                let x = val(input);
                acc(nodes, grads, *weights, |g| {
                    for i in 0..m {
                        let gi = gout[i];
                        if gi != 0.0 {
                            g[i * n..(i + 1) * n]
                                .iter_mut()
                                .zip(x.iter())
                                .for_each(|(a, b)| *a += gi * b);
                        }
                    }
                });
            }
            if rg(input) {
                let w = val(weights);
                acc(nodes, grads, *input, |g| {
                    for i in 0..m {
                        let gi = gout[i];
                        if gi != 0.0 {
                            g.iter_mut()
                                .zip(&w[i * n..(i + 1) * n])
                                .for_each(|(a, b)| *a += gi * b);
                        }
                    }
                });
            }
        }
        Op::Relu(x) => {
            let xv = val(x);
            acc(nodes, grads, *x, |g| {
                for ((a, &v), d) in g.iter_mut().zip(xv.iter()).zip(gout) {
                    if v > 0.0 {
                        *a += d;
                    }
                }
            });
        }
        Op::Sigmoid(x) => {
            let y = &*nodes[idx].value;
            acc(nodes, grads, *x, |g| {
                for ((a, &s), d) in g.iter_mut().zip(y.iter()).zip(gout) {
                    *a += d * s * (1.0 - s);
                }
            });
        }
        Op::Ln(x) => {
            let xv = val(x);
            acc(nodes, grads, *x, |g| {
                for ((a, &v), d) in g.iter_mut().zip(xv.iter()).zip(gout) {
                    *a += d / v;
                }
            });
        }
        Op::Square(x) => {
            let xv = val(x);
            acc(nodes, grads, *x, |g| {
                for ((a, &v), d) in g.iter_mut().zip(xv.iter()).zip(gout) {
                    *a += 2.0 * v * d;
                }
            });
        }
        Op::Affine { input, scale } => {
            let s = *scale;
            acc(nodes, grads, *input, |g| {
                g.iter_mut().zip(gout).for_each(|(a, d)| *a += s * d)
            });
        }
        Op::Softmax { input, axis } => {
            let shape = nodes[idx].shape.clone();
            let y = &*nodes[idx].value;
            let (outer, len, inner) = axis_split(&shape, *axis);
            acc(nodes, grads, *input, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let id = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gout[id(k)] * y[id(k)]).sum();
                        for k in 0..len {
                            g[id(k)] += y[id(k)] * (gout[id(k)] - dot);
                        }
                    }
                }
            });
        }
        Op::MaxPool { input, argmax } => {
            acc(nodes, grads, *input, |g| {
                for (&src, d) in argmax.iter().zip(gout) {
                    g[src] += d;
                }
            });
        }
        Op::Reshape(x) => acc(nodes, grads, *x, |g| add_into(g, gout)),
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].value.len();
                acc(nodes, grads, p, |g| add_into(g, &gout[offset..offset + n]));
                offset += n;
            }
        }
        Op::Add(a, b) => {
            acc(nodes, grads, *a, |g| add_into(g, gout));
            acc(nodes, grads, *b, |g| add_into(g, gout));
        }
        Op::Sub(a, b) => {
            acc(nodes, grads, *a, |g| add_into(g, gout));
            acc(nodes, grads, *b, |g| {
                g.iter_mut().zip(gout).for_each(|(x, d)| *x -= d)
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            acc(nodes, grads, *a, |g| {
                for ((x, y), d) in g.iter_mut().zip(bv.iter()).zip(gout) {
                    *x += y * d;
                }
            });
            acc(nodes, grads, *b, |g| {
                for ((x, y), d) in g.iter_mut().zip(av.iter()).zip(gout) {
                    *x += y * d;
                }
            });
        }
        Op::Sum(x) => {
            let d = gout[0];
            acc(nodes, grads, *x, |g| g.iter_mut().for_each(|a| *a += d));
        }
        Op::Select { input, index } => {
            let (d, i) = (gout[0], *index);
            acc(nodes, grads, *input, |g| g[i] += d);
        }
        Op::Squash(x) => {
            let dim = *nodes[x.0].shape.last().unwrap();
            let xv = val(x);
            acc(nodes, grads, *x, |g| {
                for ((gr, s), d) in g.chunks_mut(dim).zip(xv.chunks(dim)).zip(gout.chunks(dim)) {
                    let q = s.iter().map(|v| v * v).sum::<f64>() + NORM_EPS;
                    let gain = squash_gain(q);
                    let dgain = squash_gain_deriv(q);
                    let sd: f64 = s.iter().zip(d).map(|(a, b)| a * b).sum();
                    for k in 0..dim {
                        gr[k] += gain * d[k] + 2.0 * s[k] * dgain * sd;
                    }
                }
            });
        }
        Op::Norms(x) => {
            let dim = *nodes[x.0].shape.last().unwrap();
            let xv = val(x);
            let nv = &*nodes[idx].value;
            acc(nodes, grads, *x, |g| {
                for (r, (gr, s)) in g.chunks_mut(dim).zip(xv.chunks(dim)).enumerate() {
                    let k = gout[r] / nv[r];
                    gr.iter_mut().zip(s).for_each(|(a, v)| *a += k * v);
                }
            });
        }
        Op::CapsulePredict { input, weights } => {
            let ws = shape(weights).to_vec();
            let (ni, nj, dout, din) = (ws[0], ws[1], ws[2], ws[3]);
            let rows = nj * dout;
            if rg(weights) {
                let u = val(input);
                acc(nodes, grads, *weights, |g| {
                    for i in 0..ni {
                        let ui = &u[i * din..(i + 1) * din];
                        for r in 0..rows {
                            let d = gout[i * rows + r];
                            let base = (i * rows + r) * din;
                            g[base..base + din]
                                .iter_mut()
                                .zip(ui)
                                .for_each(|(a, b)| *a += d * b);
                        }
                    }
                });
            }
            if rg(input) {
                let w = val(weights);
                acc(nodes, grads, *input, |g| {
                    for i in 0..ni {
                        let gi = &mut g[i * din..(i + 1) * din];
                        for r in 0..rows {
                            let d = gout[i * rows + r];
                            let base = (i * rows + r) * din;
                            gi.iter_mut()
                                .zip(&w[base..base + din])
                                .for_each(|(a, b)| *a += d * b);
                        }
                    }
                });
            }
        }
        Op::RouteSum {
            predictions,
            couplings,
        } => {
            let ps = shape(predictions).to_vec();
            let (ni, nj, d) = (ps[0], ps[1], ps[2]);
            acc(nodes, grads, *predictions, |g| {
                for i in 0..ni {
                    for j in 0..nj {
                        let c = couplings[i * nj + j];
                        let dst = &mut g[(i * nj + j) * d..(i * nj + j + 1) * d];
                        dst.iter_mut()
                            .zip(&gout[j * d..(j + 1) * d])
                            .for_each(|(a, b)| *a += c * b);
                    }
                }
            });
        }
        Op::Transpose(x) => {
            let s = shape(x);
            let n = s.len();
            let (r, c) = (s[n - 2], s[n - 1]);
            acc(nodes, grads, *x, |g| {
                for (dst, src) in g.chunks_mut(r * c).zip(gout.chunks(r * c)) {
                    for i in 0..r {
                        for j in 0..c {
                            dst[i * c + j] += src[j * r + i];
                        }
                    }
                }
            });
        }
        Op::Upsample { input, factor } => {
            let s = shape(input).to_vec();
            let n = s.len();
            let (h, w) = (s[n - 2], s[n - 1]);
            let f = *factor;
            let (oh, ow) = (h * f, w * f);
            let planes = numel(&s[..n - 2]);
            acc(nodes, grads, *input, |g| {
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            g[(p * h + y / f) * w + x / f] += gout[(p * oh + y) * ow + x];
                        }
                    }
                }
            });
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `g(q) = sqrt(q) / (1 + q)`; squash(s) = g(|s|²)·s.
pub(crate) fn squash_gain(q: f64) -> f64 {
    q.sqrt() / (1.0 + q)
}

fn squash_gain_deriv(q: f64) -> f64 {
    (1.0 - q) / (2.0 * q.sqrt() * (1.0 + q) * (1.0 + q))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub(crate) fn new(
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        let (pad_h, pad_w) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                (
                    ((oh - 1) * stride + kh).saturating_sub(h),
                    ((ow - 1) * stride + kw).saturating_sub(w),
                )
            }
        };
        if kh > h + pad_h || kw > w + pad_w {
            return None;
        }
        Some(ConvGeometry {
            out_h: (h + pad_h - kh) / stride + 1,
            out_w: (w + pad_w - kw) / stride + 1,
            stride,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        })
    }

    /// Output columns `ox` whose source column `ox*stride + j - pad_left`
    /// falls inside `0..w`.
    fn valid_range(&self, j: usize, pad: usize, w: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if pad > j { (pad - j).div_ceil(s) } else { 0 };
        let hi = if w + pad > j {
            (w + pad - j - 1) / s + 1
        } else {
            0
        };
        (lo.min(out), hi.min(out))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    k: &[f64],
    out: &mut [f64],
    c: usize,
    f: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
) {
    let (oh, ow, s) = (g.out_h, g.out_w, g.stride);
    for fi in 0..f {
        let plane = &mut out[fi * oh * ow..(fi + 1) * oh * ow];
        for ci in 0..c {
            for i in 0..kh {
                let (y0, y1) = g.valid_range(i, g.pad_top, h, oh);
                for j in 0..kw {
                    let kv = k[((fi * c + ci) * kh + i) * kw + j];
                    if kv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid_range(j, g.pad_left, w, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + i - g.pad_top;
                        let src = &x[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                        let dst = &mut plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let off = j as isize - g.pad_left as isize;
                            let src =
                                &src[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                            dst[x0..x1]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(o, v)| *o += kv * v);
                        } else {
                            for ox in x0..x1 {
                                dst[ox] += kv * src[ox * s + j - g.pad_left];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_input(
    gout: &[f64],
    k: &[f64],
    dx: &mut [f64],
    c: usize,
    f: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
) {
    let (oh, ow, s) = (g.out_h, g.out_w, g.stride);
    for fi in 0..f {
        let plane = &gout[fi * oh * ow..(fi + 1) * oh * ow];
        for ci in 0..c {
            for i in 0..kh {
                let (y0, y1) = g.valid_range(i, g.pad_top, h, oh);
                for j in 0..kw {
                    let kv = k[((fi * c + ci) * kh + i) * kw + j];
                    if kv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = g.valid_range(j, g.pad_left, w, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + i - g.pad_top;
                        let dst = &mut dx[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                        let src = &plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let off = j as isize - g.pad_left as isize;
                            let dst = &mut dst
                                [(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                            dst.iter_mut()
                                .zip(&src[x0..x1])
                                .for_each(|(o, v)| *o += kv * v);
                        } else {
                            for ox in x0..x1 {
                                dst[ox * s + j - g.pad_left] += kv * src[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward_kernels(
    gout: &[f64],
    x: &[f64],
    dk: &mut [f64],
    c: usize,
    f: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    g: &ConvGeometry,
) {
    let (oh, ow, s) = (g.out_h, g.out_w, g.stride);
    for fi in 0..f {
        let plane = &gout[fi * oh * ow..(fi + 1) * oh * ow];
        for ci in 0..c {
            for i in 0..kh {
                let (y0, y1) = g.valid_range(i, g.pad_top, h, oh);
                for j in 0..kw {
                    let (x0, x1) = g.valid_range(j, g.pad_left, w, ow);
                    let mut acc = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + i - g.pad_top;
                        let src = &x[(ci * h + iy) * w..(ci * h + iy + 1) * w];
                        let gr = &plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let off = j as isize - g.pad_left as isize;
                            let src =
                                &src[(x0 as isize + off) as usize..(x1 as isize + off) as usize];
                            acc += gr[x0..x1].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            for ox in x0..x1 {
                                acc += gr[ox] * src[ox * s + j - g.pad_left];
                            }
                        }
                    }
                    dk[((fi * c + ci) * kh + i) * kw + j] += acc;
                }
            }
        }
    }
}
