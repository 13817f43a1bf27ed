//! Multi-Head of Mixed Attention decoder: one self-attention head on the
//! triplet feature plus three cross-attention heads drawing keys/values from
//! the instrument, verb, and target class maps, followed by a packed 1×1
//! mixing convolution, AddNorm, and a two-conv feed-forward block.

use crate::error::{CoreError, Result};
use crate::layers::{Conv2dLayer, Linear, NormParams, ParamReg};
use crate::tensor::{Graph, NodeId, Padding, PoolMode, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Head wiring for the ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadMode {
    /// One self-attention head on the triplet feature.
    SingleSelf,
    /// Four self-attention heads, all sourced from the triplet feature.
    MultiSelf,
    /// One self head plus instrument/verb/target cross heads (the standard model).
    Mixed,
}

/// Q/K/V projection for one context feature of class size C_z:
/// K = FC(GAP(h)), V = reshape(CONV(h)), and Q = FC(DROPOUT(GAP(h))) for the
/// sink context only.
#[derive(Debug, Clone)]
pub struct Projector {
    fc_k: Linear,
    fc_q: Option<Linear>,
    conv_v: Conv2dLayer,
}

/// Bound projection outputs for one context.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub q: Option<NodeId>,
    pub k: NodeId,
    pub v: NodeId,
    pub width: usize,
}

impl Projector {
    pub fn new<R: Rng>(c_z: usize, want_q: bool, rng: &mut R) -> Self {
        Projector {
            fc_k: Linear::new(c_z, c_z, rng),
            fc_q: want_q.then(|| Linear::new(c_z, c_z, rng)),
            conv_v: Conv2dLayer::new(1, 1, c_z, c_z, 1, Padding::Same, rng),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.fc_k.visit(&format!("{}.fc_k", prefix), f);
        if let Some(q) = &mut self.fc_q {
            q.visit(&format!("{}.fc_q", prefix), f);
        }
        self.conv_v.visit(&format!("{}.conv_v", prefix), f);
    }

    /// Projects a context map `h` (H×W×C_z). Dropout masks the query path
    /// only while training; in eval mode the Q path is deterministic.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        h: NodeId,
        dropout: f64,
        train: bool,
        rng: &mut R,
        reg: &mut ParamReg,
        prefix: &str,
    ) -> Result<Projection> {
        let s = g.value(h).shape().to_vec();
        if s.len() != 3 {
            return Err(CoreError::dim("project: context must be HxWxC"));
        }
        let c_z = s[2];
        if self.fc_k.w.shape()[0] != c_z {
            return Err(CoreError::dim(format!(
                "project: context width {} does not match projector width {}",
                c_z,
                self.fc_k.w.shape()[0]
            )));
        }
        let hw = s[0] * s[1];
        let fc_k = self.fc_k.bind(g, train, reg, &format!("{}.fc_k", prefix));
        let conv_v = self.conv_v.bind(g, train, reg, &format!("{}.conv_v", prefix));

        let pooled = g.global_pool(h, PoolMode::Avg)?;
        let k = fc_k.forward(g, pooled)?;
        let v = conv_v.forward(g, h)?;
        let v = g.reshape(v, &[hw, c_z])?;
        let q = match &self.fc_q {
            Some(fc_q) => {
                let fc_q = fc_q.bind(g, train, reg, &format!("{}.fc_q", prefix));
                let dropped = if train {
                    g.dropout(pooled, dropout, rng)?
                } else {
                    pooled
                };
                Some(fc_q.forward(g, dropped)?)
            }
            None => None,
        };
        Ok(Projection { q, k, v, width: c_z })
    }
}

/// Scaled dot-product attention: weights σ(KᵀQ/√d_K) of shape C_z×C,
/// normalized over the source (C_z) axis, applied to V.
///
/// Returns (output HW×C, weight matrix C_z×C).
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<(NodeId, NodeId)> {
    let (sq, sk, sv) = (
        g.value(q).shape().to_vec(),
        g.value(k).shape().to_vec(),
        g.value(v).shape().to_vec(),
    );
    if sq.len() != 2 || sq[0] != 1 || sk.len() != 2 || sk[0] != 1 || sv.len() != 2 {
        return Err(CoreError::dim(format!(
            "scaled_dot_attention: expected 1xC, 1xCz, HWxCz; got {:?}, {:?}, {:?}",
            sq, sk, sv
        )));
    }
    let c_z = sk[1];
    if sv[1] != c_z {
        return Err(CoreError::dim(format!(
            "scaled_dot_attention: V width {} != K width {}",
            sv[1], c_z
        )));
    }
    let kt = g.transpose2d(k)?; // C_z x 1
    let affinity = g.matmul(kt, q)?; // C_z x C
    let scaled = g.scale(affinity, 1.0 / (c_z as f64).sqrt());
    let weights = g.softmax(scaled, 0)?; // normalize over the source axis
    let out = g.matmul(v, weights)?; // HW x C
    Ok((out, weights))
}

/// One decoder layer: projection, N attention heads, packed mixing conv,
/// AddNorm, feed-forward (two 1×1 convs, hidden width 2C), AddNorm.
#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub head_mode: HeadMode,
    proj_sink: Projector,
    proj_src: Vec<Projector>,
    mixing: Conv2dLayer,
    ff1: Conv2dLayer,
    ff2: Conv2dLayer,
    norm1: NormParams,
    norm2: NormParams,
}

/// Per-layer forward output: refined triplet feature plus each head's
/// attention weights for inspection.
#[derive(Debug, Clone)]
pub struct DecoderLayerOut {
    pub h_ivt: NodeId,
    pub head_weights: Vec<NodeId>,
}

impl DecoderLayer {
    pub fn new<R: Rng>(
        head_mode: HeadMode,
        c: usize,
        c_i: usize,
        c_v: usize,
        c_t: usize,
        rng: &mut R,
    ) -> Self {
        let src_widths: Vec<usize> = match head_mode {
            HeadMode::SingleSelf => vec![],
            HeadMode::MultiSelf => vec![c, c, c],
            HeadMode::Mixed => vec![c_i, c_v, c_t],
        };
        let heads = 1 + src_widths.len();
        DecoderLayer {
            head_mode,
            proj_sink: Projector::new(c, true, rng),
            proj_src: src_widths
                .iter()
                .map(|&w| Projector::new(w, false, rng))
                .collect(),
            mixing: Conv2dLayer::new(1, 1, heads * c, c, 1, Padding::Same, rng),
            ff1: Conv2dLayer::new(1, 1, c, 2 * c, 1, Padding::Same, rng),
            ff2: Conv2dLayer::new(1, 1, 2 * c, c, 1, Padding::Same, rng),
            norm1: NormParams::new(c),
            norm2: NormParams::new(c),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.proj_sink.visit(&format!("{}.proj_sink", prefix), f);
        for (i, p) in self.proj_src.iter_mut().enumerate() {
            p.visit(&format!("{}.proj_src{}", prefix, i), f);
        }
        self.mixing.visit(&format!("{}.mixing", prefix), f);
        self.ff1.visit(&format!("{}.ff1", prefix), f);
        self.ff2.visit(&format!("{}.ff2", prefix), f);
        self.norm1.visit(&format!("{}.norm1", prefix), f);
        self.norm2.visit(&format!("{}.norm2", prefix), f);
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        h_ivt: NodeId,
        h_i: NodeId,
        h_v: NodeId,
        h_t: NodeId,
        dropout: f64,
        train: bool,
        rng: &mut R,
        reg: &mut ParamReg,
        prefix: &str,
    ) -> Result<DecoderLayerOut> {
        let s = g.value(h_ivt).shape().to_vec();
        if s.len() != 3 {
            return Err(CoreError::dim("mhma_layer: h_ivt must be HxWxC"));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let hw = h * w;

        let sink = self.proj_sink.forward(
            g,
            h_ivt,
            dropout,
            train,
            rng,
            reg,
            &format!("{}.proj_sink", prefix),
        )?;
        let q = sink.q.expect("sink projector always has a query path");

        let sources: Vec<NodeId> = match self.head_mode {
            HeadMode::SingleSelf => vec![],
            HeadMode::MultiSelf => vec![h_ivt, h_ivt, h_ivt],
            HeadMode::Mixed => vec![h_i, h_v, h_t],
        };

        let mut head_outs = Vec::new();
        let mut head_weights = Vec::new();
        let (self_out, self_w) = scaled_dot_attention(g, q, sink.k, sink.v)?;
        head_outs.push(g.reshape(self_out, &[h, w, c])?);
        head_weights.push(self_w);
        for (i, (&src, proj)) in sources.iter().zip(&self.proj_src).enumerate() {
            let p = proj.forward(
                g,
                src,
                dropout,
                train,
                rng,
                reg,
                &format!("{}.proj_src{}", prefix, i),
            )?;
            let (out, wts) = scaled_dot_attention(g, q, p.k, p.v)?;
            head_outs.push(g.reshape(out, &[h, w, c])?);
            head_weights.push(wts);
        }

        let mixing = self.mixing.bind(g, train, reg, &format!("{}.mixing", prefix));
        let ff1 = self.ff1.bind(g, train, reg, &format!("{}.ff1", prefix));
        let ff2 = self.ff2.bind(g, train, reg, &format!("{}.ff2", prefix));
        let norm1 = self.norm1.bind(g, train, reg, &format!("{}.norm1", prefix));
        let norm2 = self.norm2.bind(g, train, reg, &format!("{}.norm2", prefix));

        let cat = g.concat_last(&head_outs)?;
        let mixed = mixing.forward(g, cat)?;
        let after_attn = norm1.add_norm(g, h_ivt, mixed)?;

        let hidden = ff1.forward(g, after_attn)?;
        let hidden = g.relu(hidden);
        let ff_out = ff2.forward(g, hidden)?;
        let out = norm2.add_norm(g, after_attn, ff_out)?;

        debug_assert_eq!(g.value(out).shape(), &[h, w, c]);
        debug_assert_eq!(hw, h * w);
        Ok(DecoderLayerOut {
            h_ivt: out,
            head_weights,
        })
    }
}

/// Stack of L decoder layers with independent parameters. The component maps
/// are re-fed unchanged to every layer; only H_IVT is refined.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
}

impl Decoder {
    pub fn new<R: Rng>(
        head_mode: HeadMode,
        layers: usize,
        c: usize,
        c_i: usize,
        c_v: usize,
        c_t: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(CoreError::contract("decoder needs at least one layer"));
        }
        Ok(Decoder {
            layers: (0..layers)
                .map(|_| DecoderLayer::new(head_mode, c, c_i, c_v, c_t, rng))
                .collect(),
        })
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit(&format!("{}.layer{}", prefix, i), f);
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn decode<R: Rng>(
        &self,
        g: &mut Graph,
        h_ivt: NodeId,
        h_i: NodeId,
        h_v: NodeId,
        h_t: NodeId,
        dropout: f64,
        train: bool,
        rng: &mut R,
        reg: &mut ParamReg,
        prefix: &str,
    ) -> Result<NodeId> {
        let mut cur = h_ivt;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer
                .forward(
                    g,
                    cur,
                    h_i,
                    h_v,
                    h_t,
                    dropout,
                    train,
                    rng,
                    reg,
                    &format!("{}.layer{}", prefix, i),
                )?
                .h_ivt;
        }
        Ok(cur)
    }
}

/// Final classifier: global average pooling then an FC layer with C outputs.
#[derive(Debug, Clone)]
pub struct Classifier {
    fc: Linear,
}

impl Classifier {
    pub fn new<R: Rng>(c: usize, rng: &mut R) -> Self {
        Classifier {
            fc: Linear::new(c, c, rng),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.fc.visit(&format!("{}.fc", prefix), f);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        h_ivt: NodeId,
        train: bool,
        reg: &mut ParamReg,
        prefix: &str,
    ) -> Result<NodeId> {
        let fc = self.fc.bind(g, train, reg, &format!("{}.fc", prefix));
        let pooled = g.global_pool(h_ivt, PoolMode::Avg)?;
        fc.forward(g, pooled)
    }
}
