//! Finite-difference gradient suite: every graph primitive plus the
//! composed CAGAM branch, MHMA decoder layer, and the loss stack, checked
//! against central differences over many random seeds.

use crate::error::{HarnessError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use triplet_core::cagam::{AttentionKind, CagamBranch};
use triplet_core::layers::ParamReg;
use triplet_core::losses::{multitask_combine, total_loss, weighted_bce, BoundLossState, LossState};
use triplet_core::mhma::{DecoderLayer, HeadMode};
use triplet_core::tensor::{grad_check, DEFAULT_EPS};
use triplet_core::{Graph, NodeId, Padding, PoolMode, Tensor};

/// One suite section (a primitive op or a composite block).
#[derive(Debug, Clone, Serialize)]
pub struct SectionReport {
    pub name: String,
    pub checks: usize,
    pub max_rel_err: f64,
}

/// Whole-suite outcome.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub seeds: u64,
    pub tolerance: f64,
    pub sections: Vec<SectionReport>,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1.0_f64.max(ad.abs()).max(fd.abs())
}

/// Central-difference check over every parameter of a structure reached by
/// its `visit` function, against already-computed reverse-mode gradients.
/// Detached parameters must have zero analytic gradient, which the check
/// confirms like any other coordinate.
fn fd_over_params<T, C>(
    obj: &mut T,
    ctx: &C,
    visit: fn(&mut T, &mut dyn FnMut(String, &mut Tensor)),
    eval: fn(&T, &C) -> Result<f64>,
    grads: &BTreeMap<String, Vec<f64>>,
    eps: f64,
) -> Result<(usize, f64)> {
    let mut coords: Vec<(String, usize)> = Vec::new();
    visit(obj, &mut |name, t| {
        for i in 0..t.len() {
            coords.push((name.clone(), i));
        }
    });

    let mut worst = 0.0_f64;
    for (name, idx) in &coords {
        let nudge = |obj: &mut T, delta: f64| {
            visit(obj, &mut |n, t| {
                if &n == name {
                    t.data_mut()[*idx] += delta;
                }
            });
        };
        nudge(obj, eps);
        let up = eval(obj, ctx)?;
        nudge(obj, -2.0 * eps);
        let down = eval(obj, ctx)?;
        nudge(obj, eps);
        let fd = (up - down) / (2.0 * eps);
        let ad = grads.get(name).map(|g| g[*idx]).unwrap_or(0.0);
        worst = worst.max(rel_err(ad, fd));
    }
    Ok((coords.len(), worst))
}

type Builder = fn(&mut ChaCha8Rng) -> Vec<Tensor>;
type Loss = fn(&mut Graph, &[NodeId]) -> triplet_core::Result<NodeId>;

/// Random tensor with all pairwise-distinct entries (safe for max-pool FD).
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += i as f64 * 1e-3;
    }
    t
}

/// Random tensor bounded away from zero (safe for relu FD).
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::randn(shape, 1.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.2 {
            *v += 0.4 * v.signum() + if *v == 0.0 { 0.4 } else { 0.0 };
        }
    }
    t
}

fn primitive_cases() -> Vec<(&'static str, Builder, Loss)> {
    vec![
        (
            "add",
            |r| vec![Tensor::randn(&[2, 3], 1.0, r), Tensor::randn(&[2, 3], 1.0, r)],
            |g, x| {
                let s = g.add(x[0], x[1])?;
                Ok(g.mean_all(s))
            },
        ),
        (
            "sub",
            |r| vec![Tensor::randn(&[2, 3], 1.0, r), Tensor::randn(&[2, 3], 1.0, r)],
            |g, x| {
                let s = g.sub(x[0], x[1])?;
                Ok(g.sum_all(s))
            },
        ),
        (
            "mul",
            |r| vec![Tensor::randn(&[2, 3], 1.0, r), Tensor::randn(&[2, 3], 1.0, r)],
            |g, x| {
                let s = g.mul(x[0], x[1])?;
                Ok(g.mean_all(s))
            },
        ),
        (
            "neg_scale",
            |r| vec![Tensor::randn(&[4], 1.0, r)],
            |g, x| {
                let n = g.neg(x[0]);
                let s = g.scale(n, 1.7);
                Ok(g.mean_all(s))
            },
        ),
        (
            "scale_by",
            |r| vec![Tensor::randn(&[2, 3], 1.0, r), Tensor::randn(&[1], 1.0, r)],
            |g, x| {
                let s = g.scale_by(x[0], x[1])?;
                Ok(g.sum_all(s))
            },
        ),
        (
            "matmul",
            |r| vec![Tensor::randn(&[2, 3], 1.0, r), Tensor::randn(&[3, 2], 1.0, r)],
            |g, x| {
                let m = g.matmul(x[0], x[1])?;
                Ok(g.mean_all(m))
            },
        ),
        (
            "transpose2d",
            |r| vec![Tensor::randn(&[2, 3], 1.0, r)],
            |g, x| {
                let t = g.transpose2d(x[0])?;
                let sq = g.mul(t, t)?;
                Ok(g.mean_all(sq))
            },
        ),
        (
            "add_bias",
            |r| vec![Tensor::randn(&[2, 3], 1.0, r), Tensor::randn(&[3], 1.0, r)],
            |g, x| {
                let s = g.add_bias(x[0], x[1])?;
                let e = g.exp(s);
                Ok(g.mean_all(e))
            },
        ),
        (
            "conv2d_same_s1",
            |r| {
                vec![
                    Tensor::randn(&[3, 4, 2], 1.0, r),
                    Tensor::randn(&[3, 3, 2, 2], 0.5, r),
                    Tensor::randn(&[2], 0.5, r),
                ]
            },
            |g, x| {
                let c = g.conv2d(x[0], x[1], x[2], 1, Padding::Same)?;
                Ok(g.mean_all(c))
            },
        ),
        (
            "conv2d_valid_s2",
            |r| {
                vec![
                    Tensor::randn(&[5, 4, 2], 1.0, r),
                    Tensor::randn(&[3, 3, 2, 1], 0.5, r),
                    Tensor::randn(&[1], 0.5, r),
                ]
            },
            |g, x| {
                let c = g.conv2d(x[0], x[1], x[2], 2, Padding::Valid)?;
                Ok(g.mean_all(c))
            },
        ),
        (
            "relu",
            |r| vec![off_zero(&[3, 3], r)],
            |g, x| {
                let a = g.relu(x[0]);
                Ok(g.mean_all(a))
            },
        ),
        (
            "sigmoid",
            |r| vec![Tensor::randn(&[2, 3], 1.5, r)],
            |g, x| {
                let a = g.sigmoid(x[0]);
                Ok(g.sum_all(a))
            },
        ),
        (
            "softplus",
            |r| vec![Tensor::randn(&[5], 2.0, r)],
            |g, x| {
                let a = g.softplus(x[0]);
                Ok(g.mean_all(a))
            },
        ),
        (
            "exp",
            |r| vec![Tensor::randn(&[4], 1.0, r)],
            |g, x| {
                let a = g.exp(x[0]);
                Ok(g.mean_all(a))
            },
        ),
        (
            "softmax_axis0",
            |r| vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[3, 4], 1.0, r)],
            |g, x| {
                let s = g.softmax(x[0], 0)?;
                let w = g.mul(s, x[1])?;
                Ok(g.sum_all(w))
            },
        ),
        (
            "softmax_axis1",
            |r| vec![Tensor::randn(&[3, 4], 1.0, r), Tensor::randn(&[3, 4], 1.0, r)],
            |g, x| {
                let s = g.softmax(x[0], 1)?;
                let w = g.mul(s, x[1])?;
                Ok(g.sum_all(w))
            },
        ),
        (
            "global_avg_pool",
            |r| vec![Tensor::randn(&[3, 2, 2], 1.0, r)],
            |g, x| {
                let p = g.global_pool(x[0], PoolMode::Avg)?;
                let e = g.exp(p);
                Ok(g.mean_all(e))
            },
        ),
        (
            "global_max_pool",
            |r| vec![distinct(&[3, 2, 2], r)],
            |g, x| {
                let p = g.global_pool(x[0], PoolMode::Max)?;
                Ok(g.sum_all(p))
            },
        ),
        (
            "layer_norm",
            |r| {
                vec![
                    Tensor::randn(&[2, 2, 4], 1.0, r),
                    Tensor::randn(&[4], 0.5, r),
                    Tensor::randn(&[4], 0.5, r),
                ]
            },
            |g, x| {
                let n = g.layer_norm(x[0], x[1], x[2])?;
                let sq = g.mul(n, n)?;
                Ok(g.mean_all(sq))
            },
        ),
        (
            "concat_reshape",
            |r| vec![Tensor::randn(&[2, 2, 2], 1.0, r), Tensor::randn(&[2, 2, 3], 1.0, r)],
            |g, x| {
                let c = g.concat_last(&[x[0], x[1]])?;
                let flat = g.reshape(c, &[4, 5])?;
                let sq = g.mul(flat, flat)?;
                Ok(g.mean_all(sq))
            },
        ),
        (
            "resize_nearest",
            |r| vec![Tensor::randn(&[2, 3, 2], 1.0, r)],
            |g, x| {
                let up = g.resize_nearest(x[0], 4, 6)?;
                let sq = g.mul(up, up)?;
                Ok(g.sum_all(sq))
            },
        ),
        (
            "sum_mean",
            |r| vec![Tensor::randn(&[3, 3], 1.0, r)],
            |g, x| {
                let s = g.sum_all(x[0]);
                let m = g.mean_all(x[0]);
                g.add(s, m)
            },
        ),
    ]
}

/// Shared loss over a CAGAM branch's outputs (exercises every path).
fn cagam_loss(g: &mut Graph, branch: &CagamBranch, x: NodeId, cam: NodeId, train: bool) -> Result<f64> {
    let mut reg = ParamReg::new();
    let out = branch.forward(g, x, cam, train, &mut reg, "cagam")?;
    let a = g.mean_all(out.enhanced);
    let b = g.mean_all(out.logits);
    let loss = g.add(a, b).map_err(HarnessError::Core)?;
    Ok(g.value(loss).item())
}

fn cagam_eval(branch: &CagamBranch, ctx: &(Tensor, Tensor)) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(ctx.0.clone());
    let cam = g.constant(ctx.1.clone());
    cagam_loss(&mut g, branch, x, cam, false)
}

fn cagam_visit(b: &mut CagamBranch, f: &mut dyn FnMut(String, &mut Tensor)) {
    b.visit("cagam", f);
}

fn check_cagam(kind: AttentionKind, seed: u64, eps: f64) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (depth, c_i, c_out, h, w) = (4, 2, 2, 2, 2);
    let mut branch = CagamBranch::new(kind, depth, c_i, c_out, &mut rng);
    // Set β off its zero init so the guided path carries gradient.
    cagam_visit(&mut branch, &mut |name, t| {
        if name.ends_with("beta") {
            t.data_mut()[0] = 0.7;
        }
    });
    let ctx = (
        Tensor::randn(&[h, w, depth], 1.0, &mut rng),
        Tensor::randn(&[h, w, c_i], 1.0, &mut rng),
    );

    let mut g = Graph::new();
    let x = g.constant(ctx.0.clone());
    let cam = g.constant(ctx.1.clone());
    let mut reg = ParamReg::new();
    let out = branch.forward(&mut g, x, cam, true, &mut reg, "cagam")?;
    let a = g.mean_all(out.enhanced);
    let b = g.mean_all(out.logits);
    let loss = g.add(a, b).map_err(HarnessError::Core)?;
    g.backward(loss).map_err(HarnessError::Core)?;
    let mut grads = BTreeMap::new();
    for (name, id) in reg.entries() {
        if let Some(gr) = g.grad(*id) {
            grads.insert(name.clone(), gr.data().to_vec());
        }
    }
    fd_over_params(&mut branch, &ctx, cagam_visit, cagam_eval, &grads, eps)
}

type MhmaCtx = (Tensor, Tensor, Tensor, Tensor);

fn mhma_loss(g: &mut Graph, layer: &DecoderLayer, ctx: &MhmaCtx, train: bool) -> Result<f64> {
    let mut reg = ParamReg::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h_ivt = g.constant(ctx.0.clone());
    let h_i = g.constant(ctx.1.clone());
    let h_v = g.constant(ctx.2.clone());
    let h_t = g.constant(ctx.3.clone());
    let out = layer.forward(g, h_ivt, h_i, h_v, h_t, 0.0, train, &mut rng, &mut reg, "mhma")?;
    let sq = g.mul(out.h_ivt, out.h_ivt).map_err(HarnessError::Core)?;
    let loss = g.mean_all(sq);
    Ok(g.value(loss).item())
}

fn mhma_eval(layer: &DecoderLayer, ctx: &MhmaCtx) -> Result<f64> {
    let mut g = Graph::new();
    mhma_loss(&mut g, layer, ctx, false)
}

fn mhma_visit(l: &mut DecoderLayer, f: &mut dyn FnMut(String, &mut Tensor)) {
    l.visit("mhma", f);
}

fn check_mhma(seed: u64, eps: f64) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, c_i, c_v, c_t, h, w) = (4, 2, 3, 2, 2, 2);
    let mut layer = DecoderLayer::new(HeadMode::Mixed, c, c_i, c_v, c_t, &mut rng);
    let ctx: MhmaCtx = (
        Tensor::randn(&[h, w, c], 1.0, &mut rng),
        Tensor::randn(&[h, w, c_i], 1.0, &mut rng),
        Tensor::randn(&[h, w, c_v], 1.0, &mut rng),
        Tensor::randn(&[h, w, c_t], 1.0, &mut rng),
    );

    let mut g = Graph::new();
    let mut reg = ParamReg::new();
    let mut fr = ChaCha8Rng::seed_from_u64(0);
    let h_ivt = g.constant(ctx.0.clone());
    let h_i = g.constant(ctx.1.clone());
    let h_v = g.constant(ctx.2.clone());
    let h_t = g.constant(ctx.3.clone());
    let out = layer.forward(&mut g, h_ivt, h_i, h_v, h_t, 0.0, true, &mut fr, &mut reg, "mhma")?;
    let sq = g.mul(out.h_ivt, out.h_ivt).map_err(HarnessError::Core)?;
    let loss = g.mean_all(sq);
    g.backward(loss).map_err(HarnessError::Core)?;
    let mut grads = BTreeMap::new();
    for (name, id) in reg.entries() {
        if let Some(gr) = g.grad(*id) {
            grads.insert(name.clone(), gr.data().to_vec());
        }
    }
    fd_over_params(&mut layer, &ctx, mhma_visit, mhma_eval, &grads, eps)
}

/// The full loss stack checked end to end with the graph-level checker:
/// three weighted BCEs, the uncertainty combination, and the warm-up total
/// with weight decay, all as functions of the logits and log-variances.
fn check_loss_stack(seed: u64, tolerance: f64) -> Result<(usize, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = |n: usize, r: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| if r.gen::<bool>() { 1.0 } else { 0.0 }).collect()
    };
    let yi = labels(2, &mut rng);
    let yv = labels(2, &mut rng);
    let yt = labels(2, &mut rng);
    let yivt = labels(4, &mut rng);
    let wi = Tensor::rand_uniform(&[2], 0.5, 2.0, &mut rng);
    let wv = Tensor::rand_uniform(&[2], 0.5, 2.0, &mut rng);
    let wt = Tensor::rand_uniform(&[2], 0.5, 2.0, &mut rng);
    let wivt = Tensor::rand_uniform(&[4], 0.5, 2.0, &mut rng);
    let mut state = LossState::uniform(2, 2, 2, 4);
    state.warmup_epochs = 18;

    let inputs = vec![
        Tensor::randn(&[1, 2], 1.0, &mut rng),
        Tensor::randn(&[1, 2], 1.0, &mut rng),
        Tensor::randn(&[1, 2], 1.0, &mut rng),
        Tensor::randn(&[1, 4], 1.0, &mut rng),
        Tensor::randn(&[1], 0.5, &mut rng),
        Tensor::randn(&[1], 0.5, &mut rng),
        Tensor::randn(&[1], 0.5, &mut rng),
    ];
    let report = grad_check(&inputs, DEFAULT_EPS, tolerance, |g, ids| {
        let l_i = weighted_bce(g, ids[0], &yi, &wi)?;
        let l_v = weighted_bce(g, ids[1], &yv, &wv)?;
        let l_t = weighted_bce(g, ids[2], &yt, &wt)?;
        let l_assoc = weighted_bce(g, ids[3], &yivt, &wivt)?;
        let ws = BoundLossState { w_i: ids[4], w_v: ids[5], w_t: ids[6] };
        let l_comp = multitask_combine(g, l_i, l_v, l_t, ws)?;
        total_loss(g, l_comp, l_assoc, 20, ids, &state)
    })
    .map_err(HarnessError::Core)?;
    let checks: usize = inputs.iter().map(|t| t.len()).sum();
    Ok((checks, report.max_rel_err))
}

/// Runs the whole suite for the requested seed count.
pub fn run_suite(seeds: u64, tolerance: f64) -> Result<SuiteReport> {
    let mut sections: Vec<SectionReport> = Vec::new();
    let mut push = |name: String, checks: usize, err: f64| {
        sections.push(SectionReport { name, checks, max_rel_err: err });
    };

    for (name, build, loss) in primitive_cases() {
        let mut checks = 0;
        let mut worst = 0.0_f64;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = build(&mut rng);
            let report =
                grad_check(&inputs, DEFAULT_EPS, tolerance, loss).map_err(HarnessError::Core)?;
            checks += inputs.iter().map(|t| t.len()).sum::<usize>();
            worst = worst.max(report.max_rel_err);
        }
        push(format!("primitive/{}", name), checks, worst);
    }

    for (name, kind) in [
        ("composite/cagam_channel", AttentionKind::Channel),
        ("composite/cagam_position", AttentionKind::Position),
    ] {
        let mut checks = 0;
        let mut worst = 0.0_f64;
        for seed in 0..seeds {
            let (n, e) = check_cagam(kind, seed, DEFAULT_EPS)?;
            checks += n;
            worst = worst.max(e);
        }
        push(name.to_string(), checks, worst);
    }

    {
        let mut checks = 0;
        let mut worst = 0.0_f64;
        for seed in 0..seeds {
            let (n, e) = check_mhma(seed, DEFAULT_EPS)?;
            checks += n;
            worst = worst.max(e);
        }
        push("composite/mhma_layer".to_string(), checks, worst);
    }

    {
        let mut checks = 0;
        let mut worst = 0.0_f64;
        for seed in 0..seeds {
            let (n, e) = check_loss_stack(seed, tolerance)?;
            checks += n;
            worst = worst.max(e);
        }
        push("composite/loss_stack".to_string(), checks, worst);
    }

    let max_rel_err = sections.iter().map(|s| s.max_rel_err).fold(0.0, f64::max);
    Ok(SuiteReport {
        seeds,
        tolerance,
        pass: max_rel_err <= tolerance,
        max_rel_err,
        sections,
    })
}
