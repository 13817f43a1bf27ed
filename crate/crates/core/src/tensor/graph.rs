//! Op graph: forward construction and reverse-mode backward.

use super::Tensor;
use crate::error::{CoreError, Result};
use rand::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose2d(NodeId),
    Reshape(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: Padding,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    GlobalPool {
        x: NodeId,
        mode: PoolMode,
        /// Row-major argmax per channel, first-wins; empty for avg mode.
        argmax: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        /// (mean, inv_std) per normalized slice, saved at forward time.
        stats: Vec<(f64, f64)>,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    ConcatLast(Vec<NodeId>),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    ScaleByScalar {
        x: NodeId,
        s: NodeId,
    },
    ResizeNearest {
        x: NodeId,
        out_h: usize,
        out_w: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only op tape. Nodes are created in topological order, so backward
/// iterates ids in reverse and visits every node exactly once.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient for `id`, if backward has produced one.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let node = &self.nodes[id.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Inserts a leaf tensor. Gradients are accumulated for it iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.leaf(t, false)
    }

    // ---- elementwise ----

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(CoreError::dim(format!(
                "{}: shapes {:?} and {:?} differ",
                what, sa, sb
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::Mul(a, b), rg))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| -x).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a);
        self.push(Tensor { shape, data }, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a);
        self.push(Tensor { shape, data }, Op::Scale(a, c), rg)
    }

    /// Multiplies `x` elementwise by a scalar node `s` (learnable temperature).
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(CoreError::dim("scale_by: s must be scalar".to_string()));
        }
        let sv = self.value(s).item();
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs(x) || self.needs(s);
        Ok(self.push(Tensor { shape, data }, Op::ScaleByScalar { x, s }, rg))
    }

    /// Adds a length-C bias to every trailing-axis slice of `a`.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let c = *self.value(a).shape().last().unwrap();
        if self.value(b).shape() != [c] {
            return Err(CoreError::dim(format!(
                "add_bias: bias shape {:?} does not match channel extent {}",
                self.value(b).shape(),
                c
            )));
        }
        let bias = self.value(b).data().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bias[i % c])
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(a, b), rg))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(CoreError::dim(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * db[p * n + j];
                }
            }
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::Matmul(a, b),
            rg,
        ))
    }

    pub fn transpose2d(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(CoreError::dim(format!("transpose2d: shape {:?} not 2D", s)));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data: out,
            },
            Op::Transpose2d(a),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(a).reshaped(shape)?;
        let rg = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    // ---- convolution ----

    /// Cross-correlation of an H×W×Cin map with a kh×kw×Cin×Cout kernel plus bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: Padding,
    ) -> Result<NodeId> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        if sx.len() != 3 || sw.len() != 4 {
            return Err(CoreError::dim(format!(
                "conv2d: expected HxWxC input and khxkwxCinxCout kernel, got {:?} and {:?}",
                sx, sw
            )));
        }
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, kcin, cout) = (sw[0], sw[1], sw[2], sw[3]);
        if kcin != cin {
            return Err(CoreError::dim(format!(
                "conv2d: input channels {} != kernel channels {}",
                cin, kcin
            )));
        }
        if !(kh == 1 || kh == 3) || !(kw == 1 || kw == 3) {
            return Err(CoreError::dim(format!(
                "conv2d: kernel extents must be 1 or 3, got {}x{}",
                kh, kw
            )));
        }
        if stride == 0 {
            return Err(CoreError::contract("conv2d: stride must be >= 1"));
        }
        if self.value(b).shape() != [cout] {
            return Err(CoreError::dim(format!(
                "conv2d: bias shape {:?} != [{}]",
                self.value(b).shape(),
                cout
            )));
        }
        let (ph, pw) = match pad {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
            Padding::Valid => (0, 0),
        };
        if h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(CoreError::dim("conv2d: input smaller than kernel"));
        }
        let oh = (h + 2 * ph - kh) / stride + 1;
        let ow = (wd + 2 * pw - kw) / stride + 1;
        let dx = self.value(x).data();
        let dw = self.value(w).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                for co in 0..cout {
                    let mut acc = db[co];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pw as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xbase = (iy as usize * wd + ix as usize) * cin;
                            let wbase = ((ky * kw + kx) * cin) * cout;
                            for ci in 0..cin {
                                acc += dx[xbase + ci] * dw[wbase + ci * cout + co];
                            }
                        }
                    }
                    out[(oy * ow + ox) * cout + co] = acc;
                }
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Tensor {
                shape: vec![oh, ow, cout],
                data: out,
            },
            Op::Conv2d { x, w, b, stride, pad },
            rg,
        ))
    }

    // ---- nonlinearities ----

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a);
        self.push(Tensor { shape, data }, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a);
        self.push(Tensor { shape, data }, Op::Sigmoid(a), rg)
    }

    /// ln(1 + e^x), computed in its overflow-safe form.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a);
        self.push(Tensor { shape, data }, Op::Softplus(a), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.needs(a);
        self.push(Tensor { shape, data }, Op::Exp(a), rg)
    }

    /// Max-subtracted softmax along `axis`; every slice sums to 1.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(CoreError::dim(format!(
                "softmax: axis {} out of range for shape {:?}",
                axis, shape
            )));
        }
        if !self.value(a).is_finite() {
            return Err(CoreError::Numeric("softmax: non-finite input".to_string()));
        }
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let d = self.value(a).data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..n {
                    mx = mx.max(d[idx(k)]);
                }
                let mut sum = 0.0;
                for k in 0..n {
                    let e = (d[idx(k)] - mx).exp();
                    out[idx(k)] = e;
                    sum += e;
                }
                for k in 0..n {
                    out[idx(k)] /= sum;
                }
            }
        }
        let rg = self.needs(a);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Softmax { x: a, axis },
            rg,
        ))
    }

    // ---- pooling / normalization ----

    /// Per-channel spatial reduction of an H×W×C map to 1×C.
    ///
    /// Max mode routes the gradient to the first row-major argmax element.
    pub fn global_pool(&mut self, a: NodeId, mode: PoolMode) -> Result<NodeId> {
        let s = self.value(a).shape();
        if s.len() != 3 {
            return Err(CoreError::dim(format!("global_pool: shape {:?} not HxWxC", s)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let d = self.value(a).data();
        let mut out = vec![0.0; c];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Avg => {
                for (i, v) in d.iter().enumerate() {
                    out[i % c] += v;
                }
                let hw = (h * w) as f64;
                for v in out.iter_mut() {
                    *v /= hw;
                }
            }
            PoolMode::Max => {
                argmax = vec![0; c];
                let mut best = vec![f64::NEG_INFINITY; c];
                for p in 0..h * w {
                    for ch in 0..c {
                        let v = d[p * c + ch];
                        if v > best[ch] {
                            best[ch] = v;
                            argmax[ch] = p;
                        }
                    }
                }
                out = best;
            }
        }
        let rg = self.needs(a);
        Ok(self.push(
            Tensor {
                shape: vec![1, c],
                data: out,
            },
            Op::GlobalPool { x: a, mode, argmax },
            rg,
        ))
    }

    const LAYER_NORM_EPS: f64 = 1e-5;

    /// Layer norm over the trailing (channel) axis with learnable scale/shift.
    pub fn layer_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().unwrap();
        if self.value(scale).shape() != [c] || self.value(shift).shape() != [c] {
            return Err(CoreError::dim(format!(
                "layer_norm: scale/shift must have shape [{}]",
                c
            )));
        }
        let rows = self.value(x).len() / c;
        let d = self.value(x).data();
        let sc = self.value(scale).data().to_vec();
        let sh = self.value(shift).data().to_vec();
        let mut out = vec![0.0; d.len()];
        let mut stats = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &d[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + Self::LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                out[r * c + j] = (row[j] - mean) * inv_std * sc[j] + sh[j];
            }
            stats.push((mean, inv_std));
        }
        let rg = self.needs(x) || self.needs(scale) || self.needs(shift);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm {
                x,
                scale,
                shift,
                stats,
            },
            rg,
        ))
    }

    /// Residual add followed by channel-axis layer normalization.
    pub fn add_norm(
        &mut self,
        residual: NodeId,
        sublayer_out: NodeId,
        scale: NodeId,
        shift: NodeId,
    ) -> Result<NodeId> {
        let sum = self.add(residual, sublayer_out)?;
        self.layer_norm(sum, scale, shift)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.value(a).data().iter().sum::<f64>() / n;
        let rg = self.needs(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    // ---- structure ----

    /// Concatenates along the trailing axis; all leading extents must match.
    pub fn concat_last(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::contract("concat_last: no inputs"));
        }
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).shape().len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(CoreError::dim(format!(
                    "concat_last: leading dims {:?} vs {:?}",
                    &s[..s.len() - 1],
                    lead
                )));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let w = widths[pi];
                let d = self.value(p).data();
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
                off += w;
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor { shape, data: out },
            Op::ConcatLast(parts.to_vec()),
            rg,
        ))
    }

    /// Inverted dropout with keep-scaling; identity when `rate` is 0.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, rate: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(CoreError::contract(format!("dropout: bad rate {}", rate)));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.needs(x);
        Ok(self.push(Tensor { shape, data }, Op::Dropout { x, mask }, rg))
    }

    /// Nearest-neighbor spatial resampling of an H×W×C map.
    pub fn resize_nearest(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 3 {
            return Err(CoreError::dim(format!("resize_nearest: shape {:?} not HxWxC", s)));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        if h == out_h && w == out_w {
            return Ok(x);
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; out_h * out_w * c];
        for oy in 0..out_h {
            let iy = (oy * h) / out_h;
            for ox in 0..out_w {
                let ix = (ox * w) / out_w;
                out[(oy * out_w + ox) * c..(oy * out_w + ox + 1) * c]
                    .copy_from_slice(&d[(iy * w + ix) * c..(iy * w + ix + 1) * c]);
            }
        }
        let rg = self.needs(x);
        Ok(self.push(
            Tensor {
                shape: vec![out_h, out_w, c],
                data: out,
            },
            Op::ResizeNearest { x, out_h, out_w },
            rg,
        ))
    }

    // ---- backward ----

    fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        let g = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.len()]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    /// Reverse pass from a scalar loss; gradients accumulate (sum) across fan-out.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(CoreError::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(gi, bv)| gi * bv)
                        .collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(gi, av)| gi * av)
                        .collect();
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Neg(a) => {
                    let ga: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accumulate(a, &ga);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    self.accumulate(a, &ga);
                }
                Op::ScaleByScalar { x, s } => {
                    let sv = self.value(s).item();
                    let gx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    let gs = g
                        .iter()
                        .zip(self.value(x).data())
                        .map(|(gi, xv)| gi * xv)
                        .sum::<f64>();
                    self.accumulate(x, &gx);
                    self.accumulate(s, &[gs]);
                }
                Op::AddBias(a, b) => {
                    self.accumulate(a, &g);
                    let c = self.value(b).len();
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                    self.accumulate(b, &gb);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = {
                        let s = self.value(a).shape();
                        (s[0], s[1])
                    };
                    let n = self.value(b).shape()[1];
                    let da = self.value(a).data().to_vec();
                    let db = self.value(b).data().to_vec();
                    // grad_a = g . b^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gv * db[p * n + j];
                            }
                        }
                    }
                    // grad_b = a^T . g
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Transpose2d(a) => {
                    let (r, c) = {
                        let s = self.value(a).shape();
                        (s[0], s[1])
                    };
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = g[j * r + i];
                        }
                    }
                    self.accumulate(a, &ga);
                }
                Op::Reshape(a) => {
                    self.accumulate(a, &g);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let sx = self.value(x).shape().to_vec();
                    let sw = self.value(w).shape().to_vec();
                    let (h, wd, cin) = (sx[0], sx[1], sx[2]);
                    let (kh, kw, _, cout) = (sw[0], sw[1], sw[2], sw[3]);
                    let (ph, pw) = match pad {
                        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2),
                        Padding::Valid => (0, 0),
                    };
                    let oh = (h + 2 * ph - kh) / stride + 1;
                    let ow = (wd + 2 * pw - kw) / stride + 1;
                    let dx = self.value(x).data().to_vec();
                    let dw = self.value(w).data().to_vec();
                    let mut gx = vec![0.0; dx.len()];
                    let mut gw = vec![0.0; dw.len()];
                    let mut gb = vec![0.0; cout];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for co in 0..cout {
                                let gv = g[(oy * ow + ox) * cout + co];
                                if gv == 0.0 {
                                    continue;
                                }
                                gb[co] += gv;
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pw as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xbase = (iy as usize * wd + ix as usize) * cin;
                                        let wbase = ((ky * kw + kx) * cin) * cout;
                                        for ci in 0..cin {
                                            gw[wbase + ci * cout + co] += gv * dx[xbase + ci];
                                            gx[xbase + ci] += gv * dw[wbase + ci * cout + co];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(x, &gx);
                    self.accumulate(w, &gw);
                    self.accumulate(b, &gb);
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(gi, &xv)| if xv > 0.0 { *gi } else { 0.0 })
                        .collect();
                    self.accumulate(a, &ga);
                }
                Op::Sigmoid(a) => {
                    let y = self.nodes[i].value.data().to_vec();
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(&y)
                        .map(|(gi, yv)| gi * yv * (1.0 - yv))
                        .collect();
                    self.accumulate(a, &ga);
                }
                Op::Softplus(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(gi, &xv)| gi / (1.0 + (-xv).exp()))
                        .collect();
                    self.accumulate(a, &ga);
                }
                Op::Exp(a) => {
                    let y = self.nodes[i].value.data().to_vec();
                    let ga: Vec<f64> = g.iter().zip(&y).map(|(gi, yv)| gi * yv).collect();
                    self.accumulate(a, &ga);
                }
                Op::Softmax { x, axis } => {
                    let y = self.nodes[i].value.data().to_vec();
                    let shape = self.nodes[i].value.shape().to_vec();
                    let n = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let mut gx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + ii;
                            let mut dot = 0.0;
                            for k in 0..n {
                                dot += g[idx(k)] * y[idx(k)];
                            }
                            for k in 0..n {
                                gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                    self.accumulate(x, &gx);
                }
                Op::GlobalPool { x, mode, argmax } => {
                    let s = self.value(x).shape().to_vec();
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let mut gx = vec![0.0; h * w * c];
                    match mode {
                        PoolMode::Avg => {
                            let hw = (h * w) as f64;
                            for p in 0..h * w {
                                for ch in 0..c {
                                    gx[p * c + ch] = g[ch] / hw;
                                }
                            }
                        }
                        PoolMode::Max => {
                            for ch in 0..c {
                                gx[argmax[ch] * c + ch] = g[ch];
                            }
                        }
                    }
                    self.accumulate(x, &gx);
                }
                Op::LayerNorm {
                    x,
                    scale,
                    shift,
                    stats,
                } => {
                    let c = *self.value(x).shape().last().unwrap();
                    let rows = self.value(x).len() / c;
                    let d = self.value(x).data().to_vec();
                    let sc = self.value(scale).data().to_vec();
                    let mut gx = vec![0.0; d.len()];
                    let mut gsc = vec![0.0; c];
                    let mut gsh = vec![0.0; c];
                    for r in 0..rows {
                        let (mean, inv_std) = stats[r];
                        let cg = &g[r * c..(r + 1) * c];
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xhat = 0.0;
                        for j in 0..c {
                            let xhat = (d[r * c + j] - mean) * inv_std;
                            let gy = cg[j] * sc[j];
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                            gsc[j] += cg[j] * xhat;
                            gsh[j] += cg[j];
                        }
                        let cf = c as f64;
                        for j in 0..c {
                            let xhat = (d[r * c + j] - mean) * inv_std;
                            let gy = cg[j] * sc[j];
                            gx[r * c + j] =
                                inv_std * (gy - sum_gy / cf - xhat * sum_gy_xhat / cf);
                        }
                    }
                    self.accumulate(x, &gx);
                    self.accumulate(scale, &gsc);
                    self.accumulate(shift, &gsh);
                }
                Op::SumAll(a) => {
                    let ga = vec![g[0]; self.value(a).len()];
                    self.accumulate(a, &ga);
                }
                Op::MeanAll(a) => {
                    let n = self.value(a).len();
                    let ga = vec![g[0] / n as f64; n];
                    self.accumulate(a, &ga);
                }
                Op::ConcatLast(parts) => {
                    let widths: Vec<usize> = parts
                        .iter()
                        .map(|&p| *self.value(p).shape().last().unwrap())
                        .collect();
                    let total: usize = widths.iter().sum();
                    let rows = self.nodes[i].value.len() / total;
                    let mut off = 0;
                    for (pi, &p) in parts.iter().enumerate() {
                        let w = widths[pi];
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(p, &gp);
                        off += w;
                    }
                }
                Op::Dropout { x, mask } => {
                    let gx: Vec<f64> = g.iter().zip(&mask).map(|(gi, m)| gi * m).collect();
                    self.accumulate(x, &gx);
                }
                Op::ResizeNearest { x, out_h, out_w } => {
                    let s = self.value(x).shape().to_vec();
                    let (h, w, c) = (s[0], s[1], s[2]);
                    let mut gx = vec![0.0; h * w * c];
                    for oy in 0..out_h {
                        let iy = (oy * h) / out_h;
                        for ox in 0..out_w {
                            let ix = (ox * w) / out_w;
                            for ch in 0..c {
                                gx[(iy * w + ix) * c + ch] += g[(oy * out_w + ox) * c + ch];
                            }
                        }
                    }
                    self.accumulate(x, &gx);
                }
            }
        }
        Ok(())
    }
}
