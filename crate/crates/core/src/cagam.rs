//! Class Activation Guided Attention Mechanism: channel attention for verbs,
//! position attention for targets, each guided by the instrument CAMs.
//!
//! Both branches remap the component features to C_I context channels X_Z,
//! form an unguided affinity from X_Z and a guided affinity from the CAM,
//! multiply them elementwise, softmax into attention A, and add the
//! temperature-weighted enhancement back onto X_Z.

use crate::error::{CoreError, Result};
use crate::layers::{Conv2dLayer, ParamReg, ScalarParam};
use crate::tensor::{Graph, NodeId, Padding, PoolMode, Tensor};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    /// C_I×C_I affinities, sensitive to instrument type (verb branch).
    Channel,
    /// HW×HW affinities, sensitive to instrument position (target branch).
    Position,
}

/// Output of one CAGAM branch.
#[derive(Debug, Clone, Copy)]
pub struct CagamOut {
    /// Unguided context features X_Z (the remapped input), H×W×C_I.
    pub context: NodeId,
    /// Enhanced context features, H×W×C_I.
    pub enhanced: NodeId,
    /// Attention matrix A (C_I×C_I or HW×HW); rows sum to 1.
    pub attention: NodeId,
    /// Per-class activation maps H×W×C_out.
    pub class_maps: NodeId,
    /// Logits 1×C_out from global average pooling of the class maps.
    pub logits: NodeId,
}

#[derive(Debug, Clone)]
pub struct CagamBranch {
    pub kind: AttentionKind,
    remap: Conv2dLayer,
    q_ctx: Conv2dLayer,
    k_ctx: Conv2dLayer,
    q_cam: Conv2dLayer,
    k_cam: Conv2dLayer,
    beta: ScalarParam,
    head: Conv2dLayer,
}

impl CagamBranch {
    /// `c_out` is C_V for the verb (channel) branch, C_T for the target
    /// (position) branch. The temperature starts at 0 so training begins on
    /// the unguided context path.
    pub fn new<R: Rng>(
        kind: AttentionKind,
        depth: usize,
        c_i: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = |cin: usize, cout: usize, rng: &mut R| {
            Conv2dLayer::new(1, 1, cin, cout, 1, Padding::Same, rng)
        };
        CagamBranch {
            kind,
            remap: conv1(depth, c_i, rng),
            q_ctx: conv1(c_i, c_i, rng),
            k_ctx: conv1(c_i, c_i, rng),
            q_cam: conv1(c_i, c_i, rng),
            k_cam: conv1(c_i, c_i, rng),
            beta: ScalarParam::new(0.0),
            head: conv1(c_i, c_out, rng),
        }
    }

    pub fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.remap.visit(&format!("{}.remap", prefix), f);
        self.q_ctx.visit(&format!("{}.q_ctx", prefix), f);
        self.k_ctx.visit(&format!("{}.k_ctx", prefix), f);
        self.q_cam.visit(&format!("{}.q_cam", prefix), f);
        self.k_cam.visit(&format!("{}.k_cam", prefix), f);
        self.beta.visit(&format!("{}.beta", prefix), f);
        self.head.visit(&format!("{}.head", prefix), f);
    }

    /// Affinity of a query/key pair: QᵀK (C_I×C_I) for the channel branch,
    /// QKᵀ (HW×HW) for the position branch.
    fn affinity(
        &self,
        g: &mut Graph,
        q: NodeId,
        k: NodeId,
    ) -> Result<NodeId> {
        match self.kind {
            AttentionKind::Channel => {
                let qt = g.transpose2d(q)?;
                g.matmul(qt, k)
            }
            AttentionKind::Position => {
                let kt = g.transpose2d(k)?;
                g.matmul(q, kt)
            }
        }
    }

    /// Full branch forward: attention, enhancement, class maps, and logits.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        h_i: NodeId,
        train: bool,
        reg: &mut ParamReg,
        prefix: &str,
    ) -> Result<CagamOut> {
        let sx = g.value(x).shape().to_vec();
        let si = g.value(h_i).shape().to_vec();
        if sx.len() != 3 || si.len() != 3 || sx[0] != si[0] || sx[1] != si[1] {
            return Err(CoreError::dim(format!(
                "cagam: feature shape {:?} vs cam shape {:?}",
                sx, si
            )));
        }
        let (h, w) = (sx[0], sx[1]);
        let c_i = si[2];
        let hw = h * w;

        let remap = self.remap.bind(g, train, reg, &format!("{}.remap", prefix));
        let q_ctx = self.q_ctx.bind(g, train, reg, &format!("{}.q_ctx", prefix));
        let k_ctx = self.k_ctx.bind(g, train, reg, &format!("{}.k_ctx", prefix));
        let q_cam = self.q_cam.bind(g, train, reg, &format!("{}.q_cam", prefix));
        let k_cam = self.k_cam.bind(g, train, reg, &format!("{}.k_cam", prefix));
        let beta = self.beta.bind(g, train, reg, &format!("{}.beta", prefix));
        let head = self.head.bind(g, train, reg, &format!("{}.head", prefix));

        // context features X_Z
        let xz = remap.forward(g, x)?;

        let flat = |g: &mut Graph, t: NodeId| g.reshape(t, &[hw, c_i]);
        let q0 = q_ctx.forward(g, xz)?;
        let q0 = flat(g, q0)?;
        let k0 = k_ctx.forward(g, xz)?;
        let k0 = flat(g, k0)?;
        let p_plain = self.affinity(g, q0, k0)?;

        let qd = q_cam.forward(g, h_i)?;
        let qd = flat(g, qd)?;
        let kd = k_cam.forward(g, h_i)?;
        let kd = flat(g, kd)?;
        let p_guided = self.affinity(g, qd, kd)?;

        // scaled elementwise product of the two affinity maps
        let xi = match self.kind {
            AttentionKind::Channel => (hw as f64).sqrt(),
            AttentionKind::Position => (c_i as f64).sqrt(),
        };
        let prod = g.mul(p_guided, p_plain)?;
        let prod = g.scale(prod, 1.0 / xi);
        let attention = g.softmax(prod, 1)?;

        // enhancement: V·A for channel, A·V for position
        let v = flat(g, xz)?;
        let enh = match self.kind {
            AttentionKind::Channel => g.matmul(v, attention)?,
            AttentionKind::Position => g.matmul(attention, v)?,
        };
        let enh = g.reshape(enh, &[h, w, c_i])?;
        let weighted = g.scale_by(enh, beta)?;
        let enhanced = g.add(weighted, xz)?;

        let class_maps = head.forward(g, enhanced)?;
        let logits = g.global_pool(class_maps, PoolMode::Avg)?;
        Ok(CagamOut {
            context: xz,
            enhanced,
            attention,
            class_maps,
            logits,
        })
    }
}

/// Serializes an attention matrix (or any 2D tensor) as a JSON grid for
/// visualization dumps.
pub fn attention_grid_json(a: &Tensor) -> Result<serde_json::Value> {
    let s = a.shape();
    if s.len() != 2 {
        return Err(CoreError::dim("attention_grid_json: expected 2D tensor"));
    }
    let rows: Vec<Vec<f64>> = (0..s[0])
        .map(|r| a.data()[r * s[1]..(r + 1) * s[1]].to_vec())
        .collect();
    Ok(serde_json::json!({ "shape": s, "rows": rows }))
}
