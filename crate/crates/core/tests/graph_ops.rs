//! Oracle tests for the tensor engine: closed-form cases, independent
//! scalar-loop references, and finite-difference gradient checks for every
//! primitive operation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use triplet_core::tensor::{
    grad_check, Graph, Padding, PoolMode, Tensor, DEFAULT_EPS, DEFAULT_TOL,
};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "element {}: {} vs {} (tol {})",
            i,
            x,
            y,
            tol
        );
    }
}

// ---- matmul ----

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_annihilator() {
    let mut g = Graph::new();
    let m = g.constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let z = g.constant(Tensor::zeros(&[2, 2]));
    let y = g.matmul(m, z).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);
}

#[test]
fn matmul_matches_scalar_loop_oracle() {
    let mut r = rng(7);
    let a = Tensor::randn(&[2, 3], 1.0, &mut r);
    let b = Tensor::randn(&[3, 2], 1.0, &mut r);
    // Independent reference: accumulate in j-major order.
    let mut oracle = vec![0.0; 4];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += a.data()[i * 3 + k] * b.data()[k * 2 + j];
            }
            oracle[i * 2 + j] = acc;
        }
    }
    let mut g = Graph::new();
    let na = g.constant(a);
    let nb = g.constant(b);
    let y = g.matmul(na, nb).unwrap();
    assert_close(g.value(y).data(), &oracle, 1e-12);
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.matmul(a, b).is_err());
}

// ---- conv2d ----

#[test]
fn conv2d_channel_identity_kernel() {
    // 1x1 kernel equal to the channel identity, zero bias: output == input.
    let mut r = rng(3);
    let x = Tensor::randn(&[4, 5, 3], 1.0, &mut r);
    let mut w = Tensor::zeros(&[1, 1, 3, 3]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let mut g = Graph::new();
    let nx = g.constant(x.clone());
    let nw = g.constant(w);
    let nb = g.constant(Tensor::zeros(&[3]));
    let y = g.conv2d(nx, nw, nb, 1, Padding::Same).unwrap();
    assert_eq!(g.value(y).data(), x.data());
}

#[test]
fn conv2d_ones_kernel_counts_overlap() {
    // All-ones 3x3 kernel on a 3x3 field of ones: center 9, corners 4.
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[3, 3, 1], 1.0));
    let w = g.constant(Tensor::full(&[3, 3, 1, 1], 1.0));
    let b = g.constant(Tensor::zeros(&[1]));
    let y = g.conv2d(x, w, b, 1, Padding::Same).unwrap();
    let d = g.value(y).data();
    assert_eq!(d[4], 9.0); // center
    assert_eq!(d[0], 4.0); // corner
    assert_eq!(d[1], 6.0); // edge
}

/// Independent scalar-loop convolution reference (same padding, stride 1 or
/// more), written against the definition rather than the engine's loop order.
fn conv_oracle(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: (usize, usize),
) -> Vec<f64> {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
    let oh = (h + 2 * pad.0 - kh) / stride + 1;
    let ow = (wd + 2 * pad.1 - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b.data()[co];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - pad.0 as isize;
                        let ix = (ox * stride + kx) as isize - pad.1 as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x.data()[(iy as usize * wd + ix as usize) * cin + ci];
                            let wv = w.data()[((ky * kw + kx) * cin + ci) * cout + co];
                            acc += xv * wv;
                        }
                    }
                }
                out[(oy * ow + ox) * cout + co] = acc;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_scalar_loop_oracle() {
    let mut r = rng(11);
    let x = Tensor::randn(&[4, 4, 2], 1.0, &mut r);
    let w = Tensor::randn(&[3, 3, 2, 3], 1.0, &mut r);
    let b = Tensor::randn(&[3], 1.0, &mut r);
    for (stride, pad, ph) in [(1, Padding::Same, (1, 1)), (2, Padding::Valid, (0, 0))] {
        let oracle = conv_oracle(&x, &w, &b, stride, ph);
        let mut g = Graph::new();
        let nx = g.constant(x.clone());
        let nw = g.constant(w.clone());
        let nb = g.constant(b.clone());
        let y = g.conv2d(nx, nw, nb, stride, pad).unwrap();
        assert_close(g.value(y).data(), &oracle, 1e-12);
    }
}

#[test]
fn conv2d_channel_mismatch_is_dimension_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[4, 4, 2]));
    let w = g.constant(Tensor::zeros(&[3, 3, 5, 3]));
    let b = g.constant(Tensor::zeros(&[3]));
    assert!(g.conv2d(x, w, b, 1, Padding::Same).is_err());
}

// ---- softmax ----

#[test]
fn softmax_uniform_and_singleton() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[1, 3], vec![2.5, 2.5, 2.5]).unwrap());
    let y = g.softmax(x, 1).unwrap();
    assert_close(g.value(y).data(), &[1.0 / 3.0; 3], 1e-15);

    let s = g.constant(Tensor::from_vec(&[1, 1], vec![42.0]).unwrap());
    let ys = g.softmax(s, 1).unwrap();
    assert_eq!(g.value(ys).data(), &[1.0]);
}

#[test]
fn softmax_closed_form() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[1, 2], vec![0.0, 3.0_f64.ln()]).unwrap());
    let y = g.softmax(x, 1).unwrap();
    assert_close(g.value(y).data(), &[0.25, 0.75], 1e-12);
}

#[test]
fn softmax_shift_invariance_and_row_sums() {
    let mut r = rng(5);
    for axis in [0usize, 1] {
        let x = Tensor::randn(&[4, 6], 3.0, &mut r);
        let shifted = Tensor::from_vec(&[4, 6], x.data().iter().map(|v| v + 17.5).collect())
            .unwrap();
        let mut g = Graph::new();
        let nx = g.constant(x);
        let ns = g.constant(shifted);
        let y1 = g.softmax(nx, axis).unwrap();
        let y2 = g.softmax(ns, axis).unwrap();
        assert_close(g.value(y1).data(), g.value(y2).data(), 1e-6);
        // every slice along `axis` sums to 1
        let d = g.value(y1).data();
        let (rows, cols) = (4, 6);
        if axis == 1 {
            for rw in 0..rows {
                let s: f64 = d[rw * cols..(rw + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() <= 1e-6);
            }
        } else {
            for c in 0..cols {
                let s: f64 = (0..rows).map(|rw| d[rw * cols + c]).sum();
                assert!((s - 1.0).abs() <= 1e-6);
            }
        }
        assert!(d.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn softmax_non_finite_input_is_numeric_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[1, 2], vec![f64::NAN, 0.0]).unwrap());
    assert!(g.softmax(x, 1).is_err());
}

// ---- global pooling ----

#[test]
fn global_pool_hand_cases() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[2, 2, 1], vec![1.0, 5.0, 3.0, 2.0]).unwrap());
    let avg = g.global_pool(x, PoolMode::Avg).unwrap();
    let max = g.global_pool(x, PoolMode::Max).unwrap();
    assert_eq!(g.value(avg).data(), &[2.75]);
    assert_eq!(g.value(max).data(), &[5.0]);

    let c = g.constant(Tensor::full(&[3, 4, 2], -1.5));
    let ca = g.global_pool(c, PoolMode::Avg).unwrap();
    let cm = g.global_pool(c, PoolMode::Max).unwrap();
    assert_close(g.value(ca).data(), &[-1.5, -1.5], 1e-15);
    assert_eq!(g.value(cm).data(), &[-1.5, -1.5]);

    let z = g.constant(Tensor::zeros(&[2, 2, 3]));
    let za = g.global_pool(z, PoolMode::Avg).unwrap();
    let zm = g.global_pool(z, PoolMode::Max).unwrap();
    assert_eq!(g.value(za).data(), &[0.0; 3]);
    assert_eq!(g.value(zm).data(), &[0.0; 3]);
}

#[test]
fn global_max_pool_spatial_permutation_invariant() {
    let mut r = rng(23);
    let x = Tensor::randn(&[3, 3, 2], 1.0, &mut r);
    // Reverse the spatial positions, keeping channels attached.
    let mut perm = Tensor::zeros(&[3, 3, 2]);
    for p in 0..9 {
        for c in 0..2 {
            perm.data_mut()[(8 - p) * 2 + c] = x.data()[p * 2 + c];
        }
    }
    let mut g = Graph::new();
    let a = g.constant(x);
    let b = g.constant(perm);
    let ma = g.global_pool(a, PoolMode::Max).unwrap();
    let mb = g.global_pool(b, PoolMode::Max).unwrap();
    assert_eq!(g.value(ma).data(), g.value(mb).data());
}

// ---- layer norm / add_norm ----

#[test]
fn add_norm_normalizes_channels() {
    let mut r = rng(31);
    let x = Tensor::randn(&[2, 2, 8], 5.0, &mut r);
    let mut g = Graph::new();
    let nx = g.constant(x);
    let zero = g.constant(Tensor::zeros(&[2, 2, 8]));
    let scale = g.constant(Tensor::full(&[8], 1.0));
    let shift = g.constant(Tensor::zeros(&[8]));
    let y = g.add_norm(nx, zero, scale, shift).unwrap();
    let d = g.value(y).data();
    for row in 0..4 {
        let slice = &d[row * 8..(row + 1) * 8];
        let mean: f64 = slice.iter().sum::<f64>() / 8.0;
        let var: f64 = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() <= 1e-6, "channel mean {}", mean);
        assert!((var.sqrt() - 1.0).abs() <= 1e-2, "channel std {}", var.sqrt());
    }
}

#[test]
fn layer_norm_matches_direct_formula_oracle() {
    let mut r = rng(37);
    let x = Tensor::randn(&[1, 2, 4], 2.0, &mut r);
    let scale = Tensor::randn(&[4], 1.0, &mut r);
    let shift = Tensor::randn(&[4], 1.0, &mut r);
    let eps = 1e-5;
    let mut oracle = vec![0.0; 8];
    for row in 0..2 {
        let s = &x.data()[row * 4..(row + 1) * 4];
        let mean: f64 = s.iter().sum::<f64>() / 4.0;
        let var: f64 = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        for j in 0..4 {
            oracle[row * 4 + j] =
                (s[j] - mean) / (var + eps).sqrt() * scale.data()[j] + shift.data()[j];
        }
    }
    let mut g = Graph::new();
    let nx = g.constant(x);
    let nsc = g.constant(scale);
    let nsh = g.constant(shift);
    let y = g.layer_norm(nx, nsc, nsh).unwrap();
    assert_close(g.value(y).data(), &oracle, 1e-12);
}

// ---- backward basics ----

#[test]
fn backward_sum_gives_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
    let s = g.sum_all(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0; 4]);
}

#[test]
fn backward_half_square_gives_x() {
    let mut g = Graph::new();
    let t = Tensor::from_vec(&[3], vec![1.5, -0.25, 2.0]).unwrap();
    let x = g.leaf(t.clone(), true);
    let sq = g.mul(x, x).unwrap();
    let s = g.sum_all(sq);
    let half = g.scale(s, 0.5);
    g.backward(half).unwrap();
    assert_close(g.grad(x).unwrap().data(), t.data(), 1e-12);
}

#[test]
fn backward_fanout_accumulates() {
    // y = sum(x) + sum(x) has gradient 2 everywhere.
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[3], 1.0), true);
    let a = g.sum_all(x);
    let b = g.sum_all(x);
    let y = g.add(a, b).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0; 3]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2, 2]), true);
    assert!(g.backward(x).is_err());
}

// ---- finite-difference checks per primitive ----

#[test]
fn gradcheck_linear_is_exact() {
    let mut r = rng(41);
    let x = Tensor::randn(&[2, 3], 1.0, &mut r);
    let rep = grad_check(&[x], DEFAULT_EPS, DEFAULT_TOL, |g, ids| {
        Ok(g.sum_all(ids[0]))
    })
    .unwrap();
    assert!(rep.pass);
    assert!(rep.max_rel_err <= 1e-9, "linear case err {}", rep.max_rel_err);
}

#[test]
fn gradcheck_every_primitive_many_seeds() {
    for seed in 0..25u64 {
        let mut r = rng(seed);
        let a = Tensor::randn(&[2, 3], 1.0, &mut r);
        let b = Tensor::randn(&[3, 2], 1.0, &mut r);
        let c = Tensor::randn(&[2, 3], 1.0, &mut r);
        let x3 = Tensor::randn(&[4, 3, 2], 1.0, &mut r);
        let kw = Tensor::randn(&[3, 3, 2, 2], 0.5, &mut r);
        let kb = Tensor::randn(&[2], 0.5, &mut r);
        let sc = Tensor::randn(&[2], 0.3, &mut r);
        let sh = Tensor::randn(&[2], 0.3, &mut r);
        let s = Tensor::scalar(0.7);

        let checks: Vec<(&str, Vec<Tensor>, fn(&mut Graph, &[triplet_core::NodeId]) -> triplet_core::Result<triplet_core::NodeId>)> = vec![
            ("add", vec![a.clone(), c.clone()], |g, ids| {
                let y = g.add(ids[0], ids[1])?;
                Ok(g.sum_all(y))
            }),
            ("sub", vec![a.clone(), c.clone()], |g, ids| {
                let y = g.sub(ids[0], ids[1])?;
                Ok(g.sum_all(y))
            }),
            ("mul", vec![a.clone(), c.clone()], |g, ids| {
                let y = g.mul(ids[0], ids[1])?;
                Ok(g.sum_all(y))
            }),
            ("neg_scale", vec![a.clone()], |g, ids| {
                let y = g.neg(ids[0]);
                let y = g.scale(y, 1.7);
                Ok(g.sum_all(y))
            }),
            ("scale_by", vec![a.clone(), s.clone()], |g, ids| {
                let y = g.scale_by(ids[0], ids[1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("matmul", vec![a.clone(), b.clone()], |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("transpose", vec![a.clone()], |g, ids| {
                let t = g.transpose2d(ids[0])?;
                let sq = g.mul(t, t)?;
                Ok(g.sum_all(sq))
            }),
            ("add_bias", vec![a.clone(), sh.clone()], |g, ids| {
                // a is 2x3; reuse the leading 2 entries of the bias? keep a [3] bias
                let bias3 = g.constant(Tensor::full(&[3], 0.0));
                let y = g.add_bias(ids[0], bias3)?;
                let two = g.reshape(ids[1], &[2])?;
                let yt = g.transpose2d(y)?; // 3x2
                let z = g.add_bias(yt, two)?;
                let sq = g.mul(z, z)?;
                Ok(g.sum_all(sq))
            }),
            ("conv2d", vec![x3.clone(), kw.clone(), kb.clone()], |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 1, Padding::Same)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("conv2d_stride2_valid", vec![x3.clone(), kw.clone(), kb.clone()], |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 2, Padding::Valid)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("relu", vec![a.clone()], |g, ids| {
                let y = g.relu(ids[0]);
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("sigmoid", vec![a.clone()], |g, ids| {
                let y = g.sigmoid(ids[0]);
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("softplus_exp", vec![a.clone()], |g, ids| {
                let y = g.softplus(ids[0]);
                let e = g.scale(ids[0], 0.1);
                let e = g.exp(e);
                let z = g.add(y, e)?;
                Ok(g.sum_all(z))
            }),
            ("softmax", vec![a.clone()], |g, ids| {
                let y = g.softmax(ids[0], 1)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("softmax_axis0", vec![a.clone()], |g, ids| {
                let y = g.softmax(ids[0], 0)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("gap", vec![x3.clone()], |g, ids| {
                let y = g.global_pool(ids[0], PoolMode::Avg)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("gmp", vec![x3.clone()], |g, ids| {
                let y = g.global_pool(ids[0], PoolMode::Max)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("layer_norm", vec![x3.clone(), sc.clone(), sh.clone()], |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("concat_reshape", vec![a.clone(), c.clone()], |g, ids| {
                let p = g.reshape(ids[0], &[1, 2, 3])?;
                let q = g.reshape(ids[1], &[1, 2, 3])?;
                let y = g.concat_last(&[p, q])?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("resize_nearest", vec![x3.clone()], |g, ids| {
                let y = g.resize_nearest(ids[0], 5, 3)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("mean_all", vec![a.clone()], |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                Ok(g.mean_all(sq))
            }),
        ];
        for (name, inputs, f) in checks {
            let rep = grad_check(&inputs, DEFAULT_EPS, DEFAULT_TOL, f).unwrap();
            assert!(
                rep.pass,
                "op {} seed {}: max rel err {}",
                name, seed, rep.max_rel_err
            );
        }
    }
}

// ---- dropout ----

#[test]
fn dropout_rate_zero_is_identity_and_masks_scale() {
    let mut r = rng(51);
    let x = Tensor::randn(&[4, 4, 2], 1.0, &mut r);
    let mut g = Graph::new();
    let nx = g.constant(x.clone());
    let y0 = g.dropout(nx, 0.0, &mut r).unwrap();
    assert_eq!(g.value(y0).data(), x.data());

    let rate = 0.5;
    let y = g.dropout(nx, rate, &mut r).unwrap();
    for (o, i) in g.value(y).data().iter().zip(x.data()) {
        let kept = i / (1.0 - rate);
        assert!(
            *o == 0.0 || (o - kept).abs() <= 1e-12,
            "dropout output {} not 0 or {}",
            o,
            kept
        );
    }
}

#[test]
fn dropout_invalid_rate_rejected() {
    let mut r = rng(52);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2, 1]));
    assert!(g.dropout(x, 1.0, &mut r).is_err());
    assert!(g.dropout(x, -0.1, &mut r).is_err());
}

// ---- resize ----

#[test]
fn resize_nearest_downsamples_by_picking_cells() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let same = g.resize_nearest(x, 2, 2).unwrap();
    assert_eq!(g.value(same).data(), &[1.0, 2.0, 3.0, 4.0]);
    let up = g.resize_nearest(x, 4, 4).unwrap();
    assert_eq!(g.value(up).shape(), &[4, 4, 1]);
    // top-left quadrant of the upsampled map replicates the first cell
    assert_eq!(g.value(up).data()[0], 1.0);
    assert_eq!(g.value(up).data()[1], 1.0);
    assert_eq!(g.value(up).data()[4], 1.0);
}
