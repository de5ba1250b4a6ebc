use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use upmad::tensor::{grad_check, grad_check_many, Contraction, Conv3dOpts, DropoutMode, GradCheckOpts, Tape, Tensor};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize, dil: usize) -> Tensor<f64> {
    let s = x.shape();
    let (bn, cin, dims) = (s[0], s[1], [s[2], s[3], s[4]]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let out: Vec<usize> = dims
        .iter()
        .map(|&n| (n + 2 * pad - dil * (k - 1) - 1) / stride + 1)
        .collect();
    let mut y = vec![0.0; bn * cout * out[0] * out[1] * out[2]];
    let xi = |bb: usize, c: usize, z: usize, yy: usize, xx: usize| (((bb * cin + c) * dims[0] + z) * dims[1] + yy) * dims[2] + xx;
    let mut idx = 0;
    for bb in 0..bn {
        for co in 0..cout {
            for oz in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let z = (oz * stride + kz * dil) as isize - pad as isize;
                                        let yy = (oy * stride + ky * dil) as isize - pad as isize;
                                        let xx = (ox * stride + kx * dil) as isize - pad as isize;
                                        if z < 0 || yy < 0 || xx < 0 {
                                            continue;
                                        }
                                        let (z, yy, xx) = (z as usize, yy as usize, xx as usize);
                                        if z >= dims[0] || yy >= dims[1] || xx >= dims[2] {
                                            continue;
                                        }
                                        let wv = w.data()[(((co * cin + ci) * k + kz) * k + ky) * k + kx];
                                        acc += wv * x.data()[xi(bb, ci, z, yy, xx)];
                                    }
                                }
                            }
                        }
                        y[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![bn, cout, out[0], out[1], out[2]], y).unwrap()
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, opts: Conv3dOpts) -> Tensor<f64> {
    let tape = Tape::new();
    let b = b.map(|b| tape.constant(b.clone()));
    tape.constant(x.clone())
        .conv3d(tape.constant(w.clone()), b, opts)
        .unwrap()
        .value()
}

fn at(t: &Tensor<f64>, [d, h, w]: [usize; 3]) -> f64 {
    let s = t.shape();
    t.data()[(d * s[3] + h) * s[4] + w]
}

#[test]
fn conv_ones_center_and_corner() {
    let x = Tensor::ones(vec![1, 1, 3, 3, 3]);
    let w = Tensor::ones(vec![1, 1, 3, 3, 3]);
    let y = conv(&x, &w, None, Conv3dOpts::same(3, 1));
    assert_eq!(at(&y, [1, 1, 1]), 27.0);
    assert_eq!(at(&y, [0, 0, 0]), 8.0);
}

#[test]
fn dilated_conv_ones_center_and_corner() {
    let x = Tensor::ones(vec![1, 1, 5, 5, 5]);
    let w = Tensor::ones(vec![1, 1, 3, 3, 3]);
    let y = conv(&x, &w, None, Conv3dOpts::same(3, 2));
    assert_eq!(y.shape(), &[1, 1, 5, 5, 5]);
    assert_eq!(at(&y, [2, 2, 2]), 27.0);
    assert_eq!(at(&y, [0, 0, 0]), 8.0);
}

#[test]
fn pointwise_identity_conv() {
    let x = rand_tensor(&[2, 3, 2, 3, 4], 1);
    let w = Tensor::from_fn(vec![3, 3, 1, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let y = conv(&x, &w, Some(&Tensor::zeros(vec![3])), Conv3dOpts::default());
    assert_eq!(y, x);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let cases = [
        (3, 1, 1, 1),
        (3, 1, 2, 2),
        (3, 2, 1, 1),
        (1, 1, 0, 1),
        (5, 1, 2, 1),
        (3, 1, 0, 1),
        (3, 2, 3, 3),
    ];
    for (n, &(k, stride, pad, dil)) in cases.iter().enumerate() {
        let x = rand_tensor(&[2, 3, 5, 6, 7], 10 + n as u64);
        let w = rand_tensor(&[4, 3, k, k, k], 20 + n as u64);
        let b = rand_tensor(&[4], 30 + n as u64);
        let got = conv(&x, &w, Some(&b), Conv3dOpts { stride, padding: pad, dilation: dil });
        let want = naive_conv(&x, &w, b.data(), stride, pad, dil);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "case {n}");
    }
}

#[test]
fn conv_rejects_oversized_kernel_and_channel_mismatch() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(vec![1, 1, 2, 2, 2]));
    let w = tape.constant(Tensor::ones(vec![1, 1, 5, 5, 5]));
    assert!(x.conv3d(w, None, Conv3dOpts::default()).is_err());
    let w2 = tape.constant(Tensor::ones(vec![1, 2, 1, 1, 1]));
    assert!(x.conv3d(w2, None, Conv3dOpts::default()).is_err());
}

fn conv_t(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    tape.constant(x.clone())
        .conv_transpose3d(tape.constant(w.clone()), None, 2)
        .unwrap()
        .value()
}

#[test]
fn conv_transpose_single_voxel_scatter() {
    let x = Tensor::full(vec![1, 1, 1, 1, 1], 3.5);
    let y = conv_t(&x, &Tensor::ones(vec![1, 1, 2, 2, 2]));
    assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 3.5));
}

#[test]
fn conv_transpose_ones_tile() {
    let y = conv_t(&Tensor::ones(vec![1, 1, 2, 2, 2]), &Tensor::ones(vec![1, 1, 2, 2, 2]));
    assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
    assert!(y.data().iter().all(|&v| v == 1.0));
}

#[test]
fn conv_transpose_matches_scatter_oracle() {
    let (cin, cout, d, h, w) = (3, 2, 2, 3, 2);
    let x = rand_tensor(&[2, cin, d, h, w], 5);
    let wt = rand_tensor(&[cin, cout, 2, 2, 2], 6);
    let got = conv_t(&x, &wt);
    let mut want = vec![0.0; 2 * cout * 8 * d * h * w];
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    for b in 0..2 {
        for ci in 0..cin {
            for z in 0..d {
                for y in 0..h {
                    for xx in 0..w {
                        let xv = x.data()[(((b * cin + ci) * d + z) * h + y) * w + xx];
                        for co in 0..cout {
                            for kz in 0..2 {
                                for ky in 0..2 {
                                    for kx in 0..2 {
                                        let wv = wt.data()[(((ci * cout + co) * 2 + kz) * 2 + ky) * 2 + kx];
                                        let o = (((b * cout + co) * od + 2 * z + kz) * oh + 2 * y + ky) * ow + 2 * xx + kx;
                                        want[o] += xv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let want = Tensor::new(vec![2, cout, od, oh, ow], want).unwrap();
    assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
}

#[test]
fn conv_transpose_sum_gradient_is_weight_sum() {
    let tape = Tape::new();
    let wt = rand_tensor(&[1, 1, 2, 2, 2], 8);
    let x = tape.param(rand_tensor(&[1, 1, 2, 2, 2], 9));
    let y = x.conv_transpose3d(tape.constant(wt.clone()), None, 2).unwrap();
    tape.backward(y.sum().unwrap()).unwrap();
    let total: f64 = wt.data().iter().sum();
    for g in x.grad().unwrap().data() {
        assert_abs_diff_eq!(*g, total, epsilon = 1e-12);
    }
}

#[test]
fn maxpool_examples() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::full(vec![1, 2, 4, 2, 2], 1.25));
    let y = c.maxpool3d().unwrap().value();
    assert_eq!(y.shape(), &[1, 2, 2, 1, 1]);
    assert!(y.data().iter().all(|&v| v == 1.25));

    let block = tape.param(Tensor::new(vec![1, 1, 2, 2, 2], vec![3.0, 1.0, 8.0, 2.0, 5.0, 7.0, 4.0, 6.0]).unwrap());
    let m = block.maxpool3d().unwrap();
    assert_eq!(m.value().data(), &[8.0]);
    tape.backward(m.sum().unwrap()).unwrap();
    assert_eq!(block.grad().unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn maxpool_gradient_one_per_block_first_argmax() {
    let tape = Tape::new();
    // every block is constant so ties go to the first voxel in scan order
    let x = tape.param(Tensor::full(vec![1, 1, 4, 4, 4], 2.0));
    tape.backward(x.maxpool3d().unwrap().sum().unwrap()).unwrap();
    let g = x.grad().unwrap();
    assert_eq!(g.data().iter().sum::<f64>(), 8.0);
    for (i, &v) in g.data().iter().enumerate() {
        let (d, h, w) = (i / 16, (i / 4) % 4, i % 4);
        let first = d % 2 == 0 && h % 2 == 0 && w % 2 == 0;
        assert_eq!(v, if first { 1.0 } else { 0.0 });
    }
}

#[test]
fn maxpool_odd_extent_is_error() {
    let tape = Tape::<f64>::new();
    assert!(tape.constant(Tensor::ones(vec![1, 1, 3, 2, 2])).maxpool3d().is_err());
}

fn group_norm_value(x: &Tensor<f64>, groups: usize, beta: f64) -> Tensor<f64> {
    let c = x.shape()[1];
    let tape = Tape::new();
    tape.constant(x.clone())
        .group_norm(groups, tape.constant(Tensor::ones(vec![c])), tape.constant(Tensor::full(vec![c], beta)), 1e-5)
        .unwrap()
        .value()
}

#[test]
fn group_norm_standardizes_each_group() {
    let x = rand_tensor(&[2, 4, 3, 3, 2], 3).map(|v| 5.0 * v + 2.0);
    let y = group_norm_value(&x, 2, 0.0);
    let group = 2 * 18;
    for chunk in y.data().chunks(group) {
        let mean = chunk.iter().sum::<f64>() / group as f64;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / group as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn group_norm_constant_input_gives_beta() {
    let y = group_norm_value(&Tensor::full(vec![1, 2, 2, 2, 2], 7.0), 1, 0.3);
    assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
}

#[test]
fn group_norm_indivisible_channels_rejected() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(vec![1, 3, 2, 2, 2]));
    let g = tape.constant(Tensor::ones(vec![3]));
    assert!(x.group_norm(2, g, g, 1e-5).is_err());
}

#[test]
fn dropout_identities_and_mean() {
    let tape = Tape::<f64>::new();
    let x = rand_tensor(&[1, 1, 4, 4, 4], 2);
    let v = tape.constant(x.clone());
    for mode in [DropoutMode::Train, DropoutMode::McActive, DropoutMode::Off] {
        assert_eq!(v.dropout(0.0, mode, 9).unwrap().value(), x);
    }
    assert_eq!(v.dropout(0.5, DropoutMode::Off, 9).unwrap().value(), x);

    let ones = tape.constant(Tensor::ones(vec![100_000]));
    let y = ones.dropout(0.5, DropoutMode::Train, 42).unwrap().value();
    let mean = y.data().iter().sum::<f64>() / 1e5;
    assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn dropout_seeded_masks() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(vec![4096]));
    let a = x.dropout(0.3, DropoutMode::McActive, 1).unwrap().value();
    let b = x.dropout(0.3, DropoutMode::McActive, 1).unwrap().value();
    let c = x.dropout(0.3, DropoutMode::McActive, 2).unwrap().value();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let train = x.dropout(0.3, DropoutMode::Train, 1).unwrap().value();
    assert_eq!(a, train);
}

#[test]
fn dropout_backward_uses_same_mask() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(vec![256]));
    let y = x.dropout(0.4, DropoutMode::Train, 5).unwrap();
    tape.backward(y.sum().unwrap()).unwrap();
    assert_eq!(x.grad().unwrap(), y.value());
}

#[test]
fn dropout_bad_rate_rejected() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(vec![4]));
    assert!(x.dropout(1.0, DropoutMode::Train, 0).is_err());
    assert!(x.dropout(-0.1, DropoutMode::Train, 0).is_err());
}

#[test]
fn activation_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);
    let z = tape.constant(Tensor::zeros(vec![1]));
    assert_eq!(z.sigmoid().unwrap().value().data(), &[0.5]);
    let eq = tape.constant(Tensor::full(vec![2, 5], 3.0));
    let s = eq.softmax(1).unwrap().value();
    assert!(s.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    assert!(eq.softmax(2).is_err());
}

#[test]
fn sigmoid_is_stable_for_large_inputs() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(vec![2], vec![-500.0f32, 500.0]).unwrap());
    let y = x.sigmoid().unwrap().value();
    assert_eq!(y.data(), &[0.0, 1.0]);
}

fn matmul(a: &Tensor<f64>, b: &Tensor<f64>, spec: Contraction) -> Tensor<f64> {
    let tape = Tape::new();
    tape.constant(a.clone()).contract(tape.constant(b.clone()), spec).unwrap().value()
}

#[test]
fn contract_identity_cases() {
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(matmul(&a, &eye, Contraction::NN), a);
    let r = rand_tensor(&[3, 4, 5], 1);
    let eye5 = Tensor::from_fn(vec![3, 5, 5], |i| if (i % 25) / 5 == i % 5 { 1.0 } else { 0.0 });
    assert_eq!(matmul(&r, &eye5, Contraction::NN), r);
}

#[test]
fn contract_matches_triple_loop_for_every_transpose() {
    let (bn, m, k, n) = (2, 3, 4, 2);
    let a = rand_tensor(&[bn, m, k], 11);
    let b = rand_tensor(&[bn, k, n], 12);
    let mut want = vec![0.0; bn * m * n];
    for bb in 0..bn {
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    want[(bb * m + i) * n + j] += a.data()[(bb * m + i) * k + p] * b.data()[(bb * k + p) * n + j];
                }
            }
        }
    }
    let want = Tensor::new(vec![bn, m, n], want).unwrap();
    let swap = |t: &Tensor<f64>| {
        let s = t.shape();
        let (r, c) = (s[1], s[2]);
        Tensor::from_fn(vec![s[0], c, r], |i| {
            let (bb, rem) = (i / (r * c), i % (r * c));
            t.data()[bb * r * c + (rem % r) * c + rem / r]
        })
    };
    let (at_, bt) = (swap(&a), swap(&b));
    for (x, y, spec) in [
        (&a, &b, Contraction::NN),
        (&a, &bt, Contraction::NT),
        (&at_, &b, Contraction::TN),
        (&at_, &bt, Contraction { transpose_a: true, transpose_b: true }),
    ] {
        assert!(matmul(x, y, spec).max_abs_diff(&want).unwrap() < 1e-12, "{spec:?}");
    }
    let tape = Tape::new();
    assert!(tape
        .constant(a.clone())
        .contract(tape.constant(a.clone()), Contraction::NN)
        .is_err());
}

#[test]
fn global_avg_pool_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(vec![1, 1, 2, 2, 2], |i| i as f64));
    assert_eq!(x.global_avg_pool().unwrap().value().data(), &[3.5]);
    let c = tape.constant(Tensor::full(vec![2, 3, 2, 1, 2], -4.0));
    let y = c.global_avg_pool().unwrap().value();
    assert_eq!(y.shape(), &[2, 3, 1, 1, 1]);
    assert!(y.data().iter().all(|&v| v == -4.0));
}

#[test]
fn elementwise_identities() {
    let tape = Tape::<f64>::new();
    let a = rand_tensor(&[1, 2, 2, 3, 2], 4);
    let v = tape.constant(a.clone());
    assert_eq!(v.add(tape.constant(Tensor::zeros(vec![1, 2, 2, 3, 2]))).unwrap().value(), a);
    assert_eq!(v.mul(tape.constant(Tensor::ones(vec![1, 1, 1, 1, 1]))).unwrap().value(), a);
    assert!(v.add(tape.constant(Tensor::ones(vec![1, 3, 1, 1, 1]))).is_err());
}

#[test]
fn backward_linear_and_quadratic() {
    let tape = Tape::<f64>::new();
    let x0 = rand_tensor(&[2, 3], 6);
    let x = tape.param(x0.clone());
    tape.backward(x.sum().unwrap()).unwrap();
    assert!(x.grad().unwrap().data().iter().all(|&g| g == 1.0));

    let tape = Tape::<f64>::new();
    let x = tape.param(x0.clone());
    tape.backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
    for (g, v) in x.grad().unwrap().data().iter().zip(x0.data()) {
        assert_eq!(*g, 2.0 * v);
    }
}

#[test]
fn backward_accumulates_and_single_use_refuses() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(vec![3]));
    let loss = x.sum().unwrap();
    tape.backward(loss).unwrap();
    tape.backward(loss).unwrap();
    assert!(x.grad().unwrap().data().iter().all(|&g| g == 2.0));
    tape.zero_grad();
    assert!(x.grad().is_none());

    let tape = Tape::<f64>::single_use();
    let x = tape.param(Tensor::ones(vec![3]));
    let loss = x.sum().unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.backward(loss).is_err());
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(vec![3]));
    assert!(tape.backward(x.relu().unwrap()).is_err());
}

#[test]
fn non_finite_outputs_are_errors() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![2], vec![1.0, f64::MAX]).unwrap());
    assert!(x.mul(x).is_err());
}

fn opts() -> GradCheckOpts {
    GradCheckOpts::default()
}

#[test]
fn gradcheck_sum_and_sigmoid() {
    let x = rand_tensor(&[3, 4], 1);
    let r = grad_check(|v| v.sum(), &x, opts()).unwrap();
    assert!(r.max_rel_error < 1e-10, "{r:?}");
    let r = grad_check(|v| v.sigmoid()?.sum(), &x, opts()).unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
}

#[test]
fn gradcheck_rejects_non_scalar() {
    let x = rand_tensor(&[3], 1);
    assert!(grad_check(|v| v.relu(), &x, opts()).is_err());
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe<'t>(y: upmad::tensor::Var<'t, f64>, seed: u64) -> upmad::Result<upmad::tensor::Var<'t, f64>> {
    let w = y.tape().constant(rand_tensor(&y.shape(), seed));
    y.mul(w)?.sum()
}

#[test]
fn gradcheck_conv3d_plain_and_dilated() {
    for (k, dil, seed) in [(3, 1, 1), (3, 2, 2), (1, 1, 3), (5, 1, 4)] {
        let inputs = [
            rand_tensor(&[1, 2, 4, 4, 3], seed),
            rand_tensor(&[3, 2, k, k, k], seed + 10),
            rand_tensor(&[3], seed + 20),
        ];
        let r = grad_check_many(
            |v| probe(v[0].conv3d(v[1], Some(v[2]), Conv3dOpts::same(k, dil))?, 99),
            &inputs,
            opts(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "k={k} dil={dil}: {r:?}");
    }
    let inputs = [rand_tensor(&[1, 2, 5, 4, 4], 7), rand_tensor(&[2, 2, 3, 3, 3], 8)];
    let strided = Conv3dOpts { stride: 2, padding: 1, dilation: 1 };
    let r = grad_check_many(|v| probe(v[0].conv3d(v[1], None, strided)?, 5), &inputs, opts()).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn gradcheck_conv_transpose3d() {
    let inputs = [
        rand_tensor(&[1, 3, 2, 2, 1], 1),
        rand_tensor(&[3, 2, 2, 2, 2], 2),
        rand_tensor(&[2], 3),
    ];
    let r = grad_check_many(|v| probe(v[0].conv_transpose3d(v[1], Some(v[2]), 2)?, 4), &inputs, opts()).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn gradcheck_maxpool3d() {
    // distinct values keep every argmax away from ties under the probe step
    let x = Tensor::from_fn(vec![1, 2, 4, 4, 2], |i| ((i * 37) % 64) as f64 * 0.1);
    let r = grad_check(|v| probe(v.maxpool3d()?, 3), &x, opts()).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

#[test]
fn gradcheck_group_norm() {
    let inputs = [
        rand_tensor(&[2, 4, 3, 2, 2], 1),
        rand_tensor(&[4], 2),
        rand_tensor(&[4], 3),
    ];
    let r = grad_check_many(|v| probe(v[0].group_norm(2, v[1], v[2], 1e-5)?, 4), &inputs, opts()).unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn gradcheck_activations_and_pooling() {
    let x = rand_tensor(&[2, 3, 2, 2, 2], 5);
    let r = grad_check(|v| probe(v.relu()?, 1), &x, opts()).unwrap();
    assert!(r.max_rel_error < 1e-5, "relu {r:?}");
    let r = grad_check(|v| probe(v.sigmoid()?, 2), &x, opts()).unwrap();
    assert!(r.max_rel_error < 1e-6, "sigmoid {r:?}");
    let m = rand_tensor(&[2, 3, 4], 6);
    for axis in 0..3 {
        let r = grad_check(|v| probe(v.softmax(axis)?, 3), &m, opts()).unwrap();
        assert!(r.max_rel_error < 1e-6, "softmax {axis} {r:?}");
    }
    let r = grad_check(|v| probe(v.global_avg_pool()?, 4), &x, opts()).unwrap();
    assert!(r.max_rel_error < 1e-6, "gap {r:?}");
}

#[test]
fn gradcheck_contract() {
    let inputs = [rand_tensor(&[2, 3, 4], 1), rand_tensor(&[2, 5, 4], 2), rand_tensor(&[2, 3, 5], 3)];
    let r = grad_check_many(|v| probe(v[0].contract(v[1], Contraction::NT)?, 4), &inputs[..2], opts()).unwrap();
    assert!(r.max_rel_error < 1e-6, "NT {r:?}");
    let r = grad_check_many(
        |v| probe(v[0].contract(v[1], Contraction::TN)?, 5),
        &[inputs[0].clone(), inputs[2].clone()],
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "TN {r:?}");
}

#[test]
fn gradcheck_broadcast_elementwise() {
    let inputs = [rand_tensor(&[1, 3, 1, 1, 1], 1), rand_tensor(&[1, 3, 2, 3, 2], 2)];
    let r = grad_check_many(|v| probe(v[0].mul(v[1])?, 3), &inputs, opts()).unwrap();
    assert!(r.max_rel_error < 1e-6, "mul {r:?}");
    let r = grad_check_many(|v| probe(v[1].sub(v[0])?.add(v[0].scale(0.5)?)?, 4), &inputs, opts()).unwrap();
    assert!(r.max_rel_error < 1e-6, "add/sub {r:?}");
}

#[test]
fn gradcheck_shape_ops() {
    let inputs = [rand_tensor(&[1, 2, 2, 2, 2], 1), rand_tensor(&[1, 3, 2, 2, 2], 2)];
    let r = grad_check_many(
        |v| {
            let cat = upmad::tensor::Var::concat_channels(&[v[0], v[1]])?;
            probe(cat.reshape(vec![5, 8])?.softmax(0)?, 3)
        },
        &inputs,
        opts(),
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn gradcheck_subsamples_large_inputs() {
    let x = rand_tensor(&[1, 1, 16, 16, 8], 1);
    let r = grad_check(|v| probe(v.sigmoid()?, 2), &x, GradCheckOpts { max_coords: 50, ..opts() }).unwrap();
    assert_eq!(r.checked, 50);
    assert!(r.max_rel_error < 1e-6);
}

#[test]
fn kernels_are_thread_count_invariant() {
    let x = rand_tensor(&[1, 3, 8, 8, 4], 1).cast::<f32>();
    let w = rand_tensor(&[4, 3, 3, 3, 3], 2).cast::<f32>();
    let run = || {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let wv = tape.param(w.clone());
        let y = xv.conv3d(wv, None, Conv3dOpts::same(3, 2)).unwrap();
        let loss = y.mul(y).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        (y.value(), xv.grad().unwrap(), wv.grad().unwrap())
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
    assert_eq!(one, four);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn same_padding_preserves_extent(k in prop::sample::select(vec![1usize, 3, 5, 7]), dil in 1usize..=3, d in 1usize..6, h in 1usize..6, w in 1usize..6) {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(vec![1, 1, d, h, w]));
        let wt = tape.constant(Tensor::ones(vec![1, 1, k, k, k]));
        let y = x.conv3d(wt, None, Conv3dOpts::same(k, dil)).unwrap();
        prop_assert_eq!(y.shape(), vec![1, 1, d, h, w]);
    }

    #[test]
    fn upsample_then_pool_restores_extent(d in 1usize..5, h in 1usize..5, w in 1usize..5) {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(vec![1, 2, d, h, w]));
        let up = x.conv_transpose3d(tape.constant(Tensor::ones(vec![2, 3, 2, 2, 2])), None, 2).unwrap();
        prop_assert_eq!(up.shape(), vec![1, 3, 2 * d, 2 * h, 2 * w]);
        prop_assert_eq!(up.maxpool3d().unwrap().shape(), vec![1, 3, d, h, w]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(vals in prop::collection::vec(-20.0f64..20.0, 12), shift in -50.0f64..50.0) {
        let tape = Tape::<f64>::new();
        let x = Tensor::new(vec![3, 4], vals).unwrap();
        let s = tape.constant(x.clone()).softmax(1).unwrap().value();
        for row in s.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let shifted = tape.constant(x.map(|v| v + shift)).softmax(1).unwrap().value();
        prop_assert!(s.max_abs_diff(&shifted).unwrap() < 1e-12);
    }

    #[test]
    fn group_norm_moments(seed in 0u64..1000, scale in 2.0f64..20.0) {
        let x = rand_tensor(&[1, 4, 2, 3, 3], seed).map(|v| v * scale);
        let y = group_norm_value(&x, 4, 0.0);
        for chunk in y.data().chunks(18) {
            let mean = chunk.iter().sum::<f64>() / 18.0;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 18.0;
            prop_assert!(mean.abs() < 1e-6);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn dropout_is_reproducible(seed in any::<u64>(), rate in 0.0f64..0.9) {
        let a = upmad::tensor::dropout_mask::<f32>(512, rate, seed);
        let b = upmad::tensor::dropout_mask::<f32>(512, rate, seed);
        prop_assert_eq!(a, b);
    }
}
