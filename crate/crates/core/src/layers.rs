//! Parameterized layers shared by the encoder, CAGAM, and the decoder.
//!
//! A layer owns its weights as plain [`Tensor`]s. Each forward pass binds the
//! weights into a fresh [`Graph`] (`bind`), which also registers them in a
//! [`ParamReg`] so the optimizer can read gradients back by name after
//! `backward`.

use crate::error::Result;
use crate::tensor::{Graph, NodeId, Padding, Tensor};
use rand::Rng;

/// Named handles to the leaves bound for the current pass.
#[derive(Debug, Default)]
pub struct ParamReg {
    entries: Vec<(String, NodeId)>,
}

impl ParamReg {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, id: NodeId) {
        self.entries.push((name.into(), id));
    }

    pub fn entries(&self) -> &[(String, NodeId)] {
        &self.entries
    }
}

/// Convolution layer weights (kh×kw×Cin×Cout kernel plus bias).
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub pad: Padding,
}

impl Conv2dLayer {
    /// He-style init: std = sqrt(2 / fan_in).
    pub fn new<R: Rng>(
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: Padding,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (kh * kw * cin) as f64).sqrt();
        Conv2dLayer {
            w: Tensor::randn(&[kh, kw, cin, cout], std, rng),
            b: Tensor::zeros(&[cout]),
            stride,
            pad,
        }
    }

    pub fn bind(&self, g: &mut Graph, train: bool, reg: &mut ParamReg, name: &str) -> BoundConv {
        let w = g.leaf(self.w.clone(), train);
        let b = g.leaf(self.b.clone(), train);
        reg.add(format!("{}.w", name), w);
        reg.add(format!("{}.b", name), b);
        BoundConv {
            w,
            b,
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn visit(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{}.w", name), &mut self.w);
        f(format!("{}.b", name), &mut self.b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    pub w: NodeId,
    pub b: NodeId,
    pub stride: usize,
    pub pad: Padding,
}

impl BoundConv {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, self.w, self.b, self.stride, self.pad)
    }
}

/// Fully connected layer on 1×In row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        Linear {
            w: Tensor::randn(&[d_in, d_out], std, rng),
            b: Tensor::zeros(&[d_out]),
        }
    }

    pub fn bind(&self, g: &mut Graph, train: bool, reg: &mut ParamReg, name: &str) -> BoundLinear {
        let w = g.leaf(self.w.clone(), train);
        let b = g.leaf(self.b.clone(), train);
        reg.add(format!("{}.w", name), w);
        reg.add(format!("{}.b", name), b);
        BoundLinear { w, b }
    }

    pub fn visit(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{}.w", name), &mut self.w);
        f(format!("{}.b", name), &mut self.b);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub w: NodeId,
    pub b: NodeId,
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, self.w)?;
        g.add_bias(y, self.b)
    }
}

/// Learnable scale/shift pair for AddNorm.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl NormParams {
    pub fn new(c: usize) -> Self {
        NormParams {
            scale: Tensor::full(&[c], 1.0),
            shift: Tensor::zeros(&[c]),
        }
    }

    pub fn bind(&self, g: &mut Graph, train: bool, reg: &mut ParamReg, name: &str) -> BoundNorm {
        let scale = g.leaf(self.scale.clone(), train);
        let shift = g.leaf(self.shift.clone(), train);
        reg.add(format!("{}.scale", name), scale);
        reg.add(format!("{}.shift", name), shift);
        BoundNorm { scale, shift }
    }

    pub fn visit(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{}.scale", name), &mut self.scale);
        f(format!("{}.shift", name), &mut self.shift);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundNorm {
    pub scale: NodeId,
    pub shift: NodeId,
}

impl BoundNorm {
    /// Residual + sublayer, then layer norm over the channel axis.
    pub fn add_norm(&self, g: &mut Graph, residual: NodeId, sublayer: NodeId) -> Result<NodeId> {
        g.add_norm(residual, sublayer, self.scale, self.shift)
    }
}

/// Learnable scalar (the CAGAM temperature).
#[derive(Debug, Clone)]
pub struct ScalarParam {
    pub value: Tensor,
}

impl ScalarParam {
    pub fn new(init: f64) -> Self {
        ScalarParam {
            value: Tensor::scalar(init),
        }
    }

    pub fn bind(&self, g: &mut Graph, train: bool, reg: &mut ParamReg, name: &str) -> NodeId {
        let id = g.leaf(self.value.clone(), train);
        reg.add(name.to_string(), id);
        id
    }

    pub fn visit(&mut self, name: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(name.to_string(), &mut self.value);
    }
}
