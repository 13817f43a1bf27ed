//! CAGAM branch tests: the β=0 degenerate identity, attention shape and
//! normalization invariants, a scalar-loop oracle for tiny configurations,
//! and finite-difference gradient checks over all branch parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use triplet_core::cagam::{AttentionKind, CagamBranch};
use triplet_core::layers::ParamReg;
use triplet_core::tensor::{Graph, Tensor};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Snapshot of a branch's parameters by name.
fn params_of(branch: &mut CagamBranch) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    branch.visit("b", &mut |name, t| {
        out.insert(name, t.clone());
    });
    out
}

#[test]
fn beta_zero_output_is_bitwise_the_context_path() {
    for (kind, c_out) in [(AttentionKind::Channel, 5), (AttentionKind::Position, 7)] {
        let mut r = rng(1);
        let branch = CagamBranch::new(kind, 6, 3, c_out, &mut r);
        let x = Tensor::randn(&[3, 4, 6], 1.0, &mut r);
        let h_i = Tensor::randn(&[3, 4, 3], 1.0, &mut r);
        let mut g = Graph::new();
        let nx = g.constant(x);
        let nh = g.constant(h_i);
        let mut reg = ParamReg::new();
        let out = branch.forward(&mut g, nx, nh, false, &mut reg, "b").unwrap();
        // β is initialized to 0: the enhancement is weighted out entirely and
        // the output must equal X_Z bit for bit.
        assert_eq!(
            g.value(out.enhanced).data(),
            g.value(out.context).data(),
            "kind {:?}",
            kind
        );
    }
}

#[test]
fn beta_zero_output_is_independent_of_instrument_cams() {
    for kind in [AttentionKind::Channel, AttentionKind::Position] {
        let mut r = rng(2);
        let branch = CagamBranch::new(kind, 4, 3, 5, &mut r);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
        let h1 = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
        let h2 = Tensor::randn(&[2, 3, 3], 2.5, &mut r);
        let run = |h: &Tensor| {
            let mut g = Graph::new();
            let nx = g.constant(x.clone());
            let nh = g.constant(h.clone());
            let mut reg = ParamReg::new();
            let out = branch.forward(&mut g, nx, nh, false, &mut reg, "b").unwrap();
            (
                g.value(out.enhanced).data().to_vec(),
                g.value(out.logits).data().to_vec(),
            )
        };
        let (e1, l1) = run(&h1);
        let (e2, l2) = run(&h2);
        assert_eq!(e1, e2, "kind {:?}", kind);
        assert_eq!(l1, l2, "kind {:?}", kind);
    }
}

#[test]
fn attention_shapes_and_row_sums_across_configs() {
    // (H, W, D, C_I) — at least five distinct geometries.
    let configs = [
        (2, 2, 4, 2),
        (2, 3, 6, 3),
        (3, 3, 8, 4),
        (1, 4, 4, 6),
        (4, 2, 5, 1),
        (2, 7, 3, 5),
    ];
    for (i, &(h, w, d, c_i)) in configs.iter().enumerate() {
        for kind in [AttentionKind::Channel, AttentionKind::Position] {
            let mut r = rng(100 + i as u64);
            let mut branch = CagamBranch::new(kind, d, c_i, 3, &mut r);
            // Nonzero β so the attention path affects the output too.
            branch.visit("b", &mut |name, t| {
                if name.ends_with(".beta") {
                    t.data_mut()[0] = 0.8;
                }
            });
            let x = Tensor::randn(&[h, w, d], 1.5, &mut r);
            let hi = Tensor::randn(&[h, w, c_i], 1.5, &mut r);
            let mut g = Graph::new();
            let nx = g.constant(x);
            let nh = g.constant(hi);
            let mut reg = ParamReg::new();
            let out = branch.forward(&mut g, nx, nh, false, &mut reg, "b").unwrap();
            let a = g.value(out.attention);
            let expect = match kind {
                AttentionKind::Channel => [c_i, c_i],
                AttentionKind::Position => [h * w, h * w],
            };
            assert_eq!(a.shape(), &expect, "config {:?} kind {:?}", (h, w, d, c_i), kind);
            let n = expect[1];
            for row in 0..expect[0] {
                let s: f64 = a.data()[row * n..(row + 1) * n].iter().sum();
                assert!(
                    (s - 1.0).abs() <= 1e-6,
                    "row {} sums to {} ({:?}, {:?})",
                    row,
                    s,
                    (h, w, d, c_i),
                    kind
                );
            }
            assert_eq!(g.value(out.enhanced).shape(), &[h, w, c_i]);
            assert_eq!(g.value(out.class_maps).shape(), &[h, w, 3]);
            assert_eq!(g.value(out.logits).shape(), &[1, 3]);
        }
    }
}

#[test]
fn singleton_attention_is_forced_to_one() {
    // Channel branch with C_I = 1: A = [[1.0]] regardless of inputs.
    let mut r = rng(9);
    let ch = CagamBranch::new(AttentionKind::Channel, 4, 1, 2, &mut r);
    let x = Tensor::randn(&[2, 3, 4], 2.0, &mut r);
    let hi = Tensor::randn(&[2, 3, 1], 2.0, &mut r);
    let mut g = Graph::new();
    let nx = g.constant(x);
    let nh = g.constant(hi);
    let mut reg = ParamReg::new();
    let out = ch.forward(&mut g, nx, nh, false, &mut reg, "b").unwrap();
    assert_eq!(g.value(out.attention).shape(), &[1, 1]);
    assert_eq!(g.value(out.attention).data(), &[1.0]);

    // Position branch with H = W = 1: HW = 1 forces the same degeneracy.
    let pos = CagamBranch::new(AttentionKind::Position, 4, 3, 2, &mut r);
    let x1 = Tensor::randn(&[1, 1, 4], 2.0, &mut r);
    let h1 = Tensor::randn(&[1, 1, 3], 2.0, &mut r);
    let na = g.constant(x1);
    let nb = g.constant(h1);
    let out = pos.forward(&mut g, na, nb, false, &mut reg, "p").unwrap();
    assert_eq!(g.value(out.attention).shape(), &[1, 1]);
    assert_eq!(g.value(out.attention).data(), &[1.0]);
}

/// Pure scalar evaluation of one branch from its parameter snapshot: 1×1
/// convs become per-pixel matrix products, then affinities, the scaled
/// elementwise product, row softmax, enhancement, and the β-weighted output.
fn branch_oracle(
    kind: AttentionKind,
    params: &BTreeMap<String, Tensor>,
    x: &Tensor,
    h_i: &Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_i = h_i.shape()[2];
    let hw = h * w;
    let conv1 = |name: &str, input: &[f64], cin: usize| -> Vec<f64> {
        let wt = &params[&format!("b.{}.w", name)];
        let b = &params[&format!("b.{}.b", name)];
        let cout = wt.shape()[3];
        let mut out = vec![0.0; hw * cout];
        for p in 0..hw {
            for co in 0..cout {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    acc += input[p * cin + ci] * wt.data()[ci * cout + co];
                }
                out[p * cout + co] = acc;
            }
        }
        out
    };
    let xz = conv1("remap", x.data(), d);
    let q0 = conv1("q_ctx", &xz, c_i);
    let k0 = conv1("k_ctx", &xz, c_i);
    let qd = conv1("q_cam", h_i.data(), c_i);
    let kd = conv1("k_cam", h_i.data(), c_i);
    // Affinity: QᵀK (C_I×C_I) or QKᵀ (HW×HW) on the HW×C_I matrices.
    let affinity = |q: &[f64], k: &[f64]| -> Vec<f64> {
        match kind {
            AttentionKind::Channel => {
                let mut p = vec![0.0; c_i * c_i];
                for a in 0..c_i {
                    for b in 0..c_i {
                        for pix in 0..hw {
                            p[a * c_i + b] += q[pix * c_i + a] * k[pix * c_i + b];
                        }
                    }
                }
                p
            }
            AttentionKind::Position => {
                let mut p = vec![0.0; hw * hw];
                for a in 0..hw {
                    for b in 0..hw {
                        for c in 0..c_i {
                            p[a * hw + b] += q[a * c_i + c] * k[b * c_i + c];
                        }
                    }
                }
                p
            }
        }
    };
    let p_plain = affinity(&q0, &k0);
    let p_guided = affinity(&qd, &kd);
    let (n, xi) = match kind {
        AttentionKind::Channel => (c_i, (hw as f64).sqrt()),
        AttentionKind::Position => (hw, (c_i as f64).sqrt()),
    };
    let mut attn = vec![0.0; n * n];
    for row in 0..n {
        let vals: Vec<f64> = (0..n)
            .map(|col| p_plain[row * n + col] * p_guided[row * n + col] / xi)
            .collect();
        let mx = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for col in 0..n {
            attn[row * n + col] = exps[col] / sum;
        }
    }
    // Enhancement: V·A (channel) or A·V (position) with V = xz as HW×C_I.
    let beta = params["b.beta"].data()[0];
    let mut enhanced = vec![0.0; hw * c_i];
    match kind {
        AttentionKind::Channel => {
            for pix in 0..hw {
                for col in 0..c_i {
                    let mut acc = 0.0;
                    for k in 0..c_i {
                        acc += xz[pix * c_i + k] * attn[k * c_i + col];
                    }
                    enhanced[pix * c_i + col] = beta * acc + xz[pix * c_i + col];
                }
            }
        }
        AttentionKind::Position => {
            for pix in 0..hw {
                for col in 0..c_i {
                    let mut acc = 0.0;
                    for k in 0..hw {
                        acc += attn[pix * hw + k] * xz[k * c_i + col];
                    }
                    enhanced[pix * c_i + col] = beta * acc + xz[pix * c_i + col];
                }
            }
        }
    }
    (attn, enhanced)
}

#[test]
fn branch_matches_scalar_loop_oracle() {
    let cases = [
        (AttentionKind::Channel, 1, 1, 3, 2),
        (AttentionKind::Channel, 2, 2, 4, 3),
        (AttentionKind::Position, 2, 1, 3, 1),
        (AttentionKind::Position, 2, 2, 4, 3),
    ];
    for &(kind, h, w, d, c_i) in &cases {
        let mut r = rng(77);
        let mut branch = CagamBranch::new(kind, d, c_i, 2, &mut r);
        branch.visit("b", &mut |name, t| {
            if name.ends_with(".beta") {
                t.data_mut()[0] = 0.6;
            }
        });
        let params = params_of(&mut branch);
        let x = Tensor::randn(&[h, w, d], 1.0, &mut r);
        let hi = Tensor::randn(&[h, w, c_i], 1.0, &mut r);
        let (attn_o, enh_o) = branch_oracle(kind, &params, &x, &hi);

        let mut g = Graph::new();
        let nx = g.constant(x);
        let nh = g.constant(hi);
        let mut reg = ParamReg::new();
        let out = branch.forward(&mut g, nx, nh, false, &mut reg, "b").unwrap();
        for (a, b) in g.value(out.attention).data().iter().zip(&attn_o) {
            assert!((a - b).abs() <= 1e-10, "attention {} vs {}", a, b);
        }
        for (a, b) in g.value(out.enhanced).data().iter().zip(&enh_o) {
            assert!((a - b).abs() <= 1e-10, "enhanced {} vs {}", a, b);
        }
    }
}

#[test]
fn cam_scaling_changes_attention_consistently_with_oracle() {
    // Scaling h_i by a positive scalar enters only through the affinity
    // product; verify against the oracle instead of assuming invariance.
    let mut r = rng(13);
    let mut branch = CagamBranch::new(AttentionKind::Channel, 4, 3, 2, &mut r);
    branch.visit("b", &mut |name, t| {
        if name.ends_with(".beta") {
            t.data_mut()[0] = 1.0;
        }
    });
    let params = params_of(&mut branch);
    let x = Tensor::randn(&[2, 2, 4], 1.0, &mut r);
    let hi = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
    let hi_scaled =
        Tensor::from_vec(&[2, 2, 3], hi.data().iter().map(|v| v * 3.0).collect()).unwrap();
    let (attn_o, _) = branch_oracle(AttentionKind::Channel, &params, &x, &hi_scaled);
    let mut g = Graph::new();
    let nx = g.constant(x);
    let nh = g.constant(hi_scaled);
    let mut reg = ParamReg::new();
    let out = branch.forward(&mut g, nx, nh, false, &mut reg, "b").unwrap();
    for (a, b) in g.value(out.attention).data().iter().zip(&attn_o) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn head_logits_are_gap_of_class_maps() {
    let mut r = rng(21);
    let branch = CagamBranch::new(AttentionKind::Channel, 4, 2, 3, &mut r);
    let x = Tensor::randn(&[2, 3, 4], 1.0, &mut r);
    let hi = Tensor::randn(&[2, 3, 2], 1.0, &mut r);
    let mut g = Graph::new();
    let nx = g.constant(x);
    let nh = g.constant(hi);
    let mut reg = ParamReg::new();
    let out = branch.forward(&mut g, nx, nh, false, &mut reg, "b").unwrap();
    let maps = g.value(out.class_maps);
    let logits = g.value(out.logits);
    for c in 0..3 {
        let mean: f64 = (0..6).map(|p| maps.data()[p * 3 + c]).sum::<f64>() / 6.0;
        assert!((logits.data()[c] - mean).abs() <= 1e-12);
    }
}

#[test]
fn gradients_match_finite_differences_over_all_parameters() {
    // End-to-end FD check through one branch, including β and both conv
    // stacks, by perturbing every parameter element via visit().
    for kind in [AttentionKind::Channel, AttentionKind::Position] {
        let mut r = rng(55);
        let mut branch = CagamBranch::new(kind, 3, 2, 2, &mut r);
        branch.visit("b", &mut |name, t| {
            if name.ends_with(".beta") {
                t.data_mut()[0] = 0.4;
            }
        });
        let x = Tensor::randn(&[2, 2, 3], 1.0, &mut r);
        let hi = Tensor::randn(&[2, 2, 2], 1.0, &mut r);

        let eval = |b: &CagamBranch| -> f64 {
            let mut g = Graph::new();
            let nx = g.constant(x.clone());
            let nh = g.constant(hi.clone());
            let mut reg = ParamReg::new();
            let out = b.forward(&mut g, nx, nh, false, &mut reg, "b").unwrap();
            let sq = g.mul(out.logits, out.logits).unwrap();
            let s1 = g.sum_all(sq);
            let sq2 = g.mul(out.enhanced, out.enhanced).unwrap();
            let s2 = g.sum_all(sq2);
            let tot = g.add(s1, s2).unwrap();
            g.value(tot).item()
        };

        // Reverse-mode gradients, reading them back through the registry.
        let mut g = Graph::new();
        let nx = g.constant(x.clone());
        let nh = g.constant(hi.clone());
        let mut reg = ParamReg::new();
        let out = branch.forward(&mut g, nx, nh, true, &mut reg, "b").unwrap();
        let sq = g.mul(out.logits, out.logits).unwrap();
        let s1 = g.sum_all(sq);
        let sq2 = g.mul(out.enhanced, out.enhanced).unwrap();
        let s2 = g.sum_all(sq2);
        let tot = g.add(s1, s2).unwrap();
        g.backward(tot).unwrap();
        let grads: BTreeMap<String, Tensor> = reg
            .entries()
            .iter()
            .map(|(name, id)| {
                (
                    name.clone(),
                    g.grad(*id)
                        .unwrap_or_else(|| Tensor::zeros(g.value(*id).shape())),
                )
            })
            .collect();

        let names: Vec<String> = grads.keys().cloned().collect();
        let eps = 1e-5;
        for name in names {
            let len = grads[&name].len();
            for idx in 0..len {
                fn perturb(b: &mut CagamBranch, name: &str, idx: usize, delta: f64) {
                    b.visit("b", &mut |n, t| {
                        if n == name {
                            t.data_mut()[idx] += delta;
                        }
                    });
                }
                perturb(&mut branch, &name, idx, eps);
                let plus = eval(&branch);
                perturb(&mut branch, &name, idx, -2.0 * eps);
                let minus = eval(&branch);
                perturb(&mut branch, &name, idx, eps);
                let fd = (plus - minus) / (2.0 * eps);
                let ad = grads[&name].data()[idx];
                let rel = (ad - fd).abs() / 1.0_f64.max(ad.abs()).max(fd.abs());
                assert!(
                    rel <= 1e-4,
                    "{:?} {}[{}]: ad {} vs fd {} (rel {})",
                    kind,
                    name,
                    idx,
                    ad,
                    fd,
                    rel
                );
            }
        }
    }
}
