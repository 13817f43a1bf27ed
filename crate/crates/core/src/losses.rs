//! Training objectives: class-weighted sigmoid cross-entropy per task,
//! uncertainty-weighted multi-task combination, and the warm-up total with
//! L2 weight decay.

use crate::error::{CoreError, Result};
use crate::layers::{ParamReg, ScalarParam};
use crate::tensor::{Graph, NodeId, Tensor};

/// Default weight decay λ.
pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-5;
/// Default warm-up boundary in epochs: the association loss is gated off
/// before this epoch so the component heads train first.
pub const DEFAULT_WARMUP_EPOCHS: usize = 18;
/// Class-balancing weights are clipped to this range.
pub const WEIGHT_CLIP: (f64, f64) = (0.1, 10.0);

/// Loss configuration and learnable balancing state.
///
/// The log-variances `w_i`, `w_v`, `w_t` are trained alongside the model;
/// the per-class weights are fixed statistics of the training split.
#[derive(Debug, Clone)]
pub struct LossState {
    pub w_i: ScalarParam,
    pub w_v: ScalarParam,
    pub w_t: ScalarParam,
    pub weights_i: Tensor,
    pub weights_v: Tensor,
    pub weights_t: Tensor,
    pub weights_ivt: Tensor,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
}

/// Log-variance node handles bound for the current pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundLossState {
    pub w_i: NodeId,
    pub w_v: NodeId,
    pub w_t: NodeId,
}

impl LossState {
    /// Uniform class weights (all 1) for the given task widths.
    pub fn uniform(c_i: usize, c_v: usize, c_t: usize, c: usize) -> Self {
        LossState {
            w_i: ScalarParam::new(0.0),
            w_v: ScalarParam::new(0.0),
            w_t: ScalarParam::new(0.0),
            weights_i: Tensor::full(&[c_i], 1.0),
            weights_v: Tensor::full(&[c_v], 1.0),
            weights_t: Tensor::full(&[c_t], 1.0),
            weights_ivt: Tensor::full(&[c], 1.0),
            warmup_epochs: DEFAULT_WARMUP_EPOCHS,
            weight_decay: DEFAULT_WEIGHT_DECAY,
        }
    }

    pub fn bind(&self, g: &mut Graph, train: bool, reg: &mut ParamReg) -> BoundLossState {
        BoundLossState {
            w_i: self.w_i.bind(g, train, reg, "loss.w_i"),
            w_v: self.w_v.bind(g, train, reg, "loss.w_v"),
            w_t: self.w_t.bind(g, train, reg, "loss.w_t"),
        }
    }

    pub fn visit(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.w_i.visit("loss.w_i", f);
        self.w_v.visit("loss.w_v", f);
        self.w_t.visit("loss.w_t", f);
    }

    /// 1 after the warm-up boundary, 0 before.
    pub fn rho(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            0.0
        } else {
            1.0
        }
    }
}

/// Inverse-frequency class weights from per-class positive counts, clipped
/// to [0.1, 10]. A class at the mean frequency gets weight 1; classes with
/// no positives clip to the upper bound.
pub fn inverse_frequency_weights(counts: &[usize]) -> Result<Tensor> {
    if counts.is_empty() {
        return Err(CoreError::contract("class weights: empty count vector"));
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
    let w: Vec<f64> = counts
        .iter()
        .map(|&n| {
            let raw = if n == 0 { f64::INFINITY } else { mean / n as f64 };
            raw.clamp(WEIGHT_CLIP.0, WEIGHT_CLIP.1)
        })
        .collect();
    let c = w.len();
    Tensor::from_vec(&[c], w)
}

/// Mean over classes of −[W_c·y·log σ(ŷ) + (1−y)·log(1−σ(ŷ))], evaluated in
/// the stabilized softplus form W_c·y·softplus(−ŷ) + (1−y)·softplus(ŷ).
///
/// The balancing weight applies to the positive term only.
pub fn weighted_bce(
    g: &mut Graph,
    logits: NodeId,
    labels: &[f64],
    weights: &Tensor,
) -> Result<NodeId> {
    let n = g.value(logits).len();
    if labels.len() != n || weights.len() != n {
        return Err(CoreError::dim(format!(
            "weighted_bce: {} logits vs {} labels vs {} weights",
            n,
            labels.len(),
            weights.len()
        )));
    }
    if labels.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(CoreError::contract("weighted_bce: labels must be 0 or 1"));
    }
    if !g.value(logits).is_finite() {
        return Err(CoreError::Numeric("weighted_bce: non-finite logits".to_string()));
    }
    let shape = g.value(logits).shape().to_vec();
    let pos_coef: Vec<f64> = labels
        .iter()
        .zip(weights.data())
        .map(|(&y, &w)| w * y)
        .collect();
    let neg_coef: Vec<f64> = labels.iter().map(|&y| 1.0 - y).collect();
    let pos_coef = g.constant(Tensor::from_vec(&shape, pos_coef)?);
    let neg_coef = g.constant(Tensor::from_vec(&shape, neg_coef)?);

    let neg_logits = g.neg(logits);
    let sp_neg = g.softplus(neg_logits);
    let sp_pos = g.softplus(logits);
    let pos_term = g.mul(pos_coef, sp_neg)?;
    let neg_term = g.mul(neg_coef, sp_pos)?;
    let total = g.add(pos_term, neg_term)?;
    Ok(g.mean_all(total))
}

/// Uncertainty-weighted combination of the three component losses:
/// (1/3)·(e^{−w_I}·L_I + e^{−w_V}·L_V + e^{−w_T}·L_T + w_I + w_V + w_T).
pub fn multitask_combine(
    g: &mut Graph,
    l_i: NodeId,
    l_v: NodeId,
    l_t: NodeId,
    ws: BoundLossState,
) -> Result<NodeId> {
    let mut total = None;
    for (l, w) in [(l_i, ws.w_i), (l_v, ws.w_v), (l_t, ws.w_t)] {
        let neg_w = g.neg(w);
        let precision = g.exp(neg_w);
        let scaled = g.mul(precision, l)?;
        let term = g.add(scaled, w)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(g.scale(total.unwrap(), 1.0 / 3.0))
}

/// L_comp + ρ(epoch)·L_assoc + λ·‖params‖₂². The association term is omitted
/// from the graph entirely while ρ = 0, so parameters feeding only L_assoc
/// receive exactly-zero gradients during warm-up.
pub fn total_loss(
    g: &mut Graph,
    l_comp: NodeId,
    l_assoc: NodeId,
    epoch: usize,
    params: &[NodeId],
    state: &LossState,
) -> Result<NodeId> {
    let mut total = l_comp;
    if state.rho(epoch) > 0.0 {
        total = g.add(total, l_assoc)?;
    }
    if state.weight_decay != 0.0 {
        let mut sumsq = None;
        for &p in params {
            let sq = g.mul(p, p)?;
            let s = g.sum_all(sq);
            sumsq = Some(match sumsq {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        if let Some(sumsq) = sumsq {
            let decay = g.scale(sumsq, state.weight_decay);
            total = g.add(total, decay)?;
        }
    }
    Ok(total)
}
