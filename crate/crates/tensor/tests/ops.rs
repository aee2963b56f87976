use std::rc::Rc;

use modseg_tensor::gradcheck::check_gradients;
use modseg_tensor::ops::{self, Conv3dOpts};
use modseg_tensor::{Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Weighted sum so every output element gets a distinct gradient.
fn project(v: &Var<f64>, seed: u64) -> modseg_tensor::Result<Var<f64>> {
    let w = Var::constant(randn(v.shape(), seed));
    Ok(v.mul(&w)?.sum_all())
}

fn assert_grads_close(inputs: &[Tensor<f64>], f: impl Fn(&[Var<f64>]) -> modseg_tensor::Result<Var<f64>>) {
    for (i, r) in check_gradients(inputs, 1e-5, f).unwrap().iter().enumerate() {
        assert!(r.relative_error() < 1e-6, "input {i}: rel err {}", r.relative_error());
    }
}

/// Direct 7-loop convolution.
fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let out: Vec<usize> = (0..3).map(|d| (xs[2 + d] + 2 * p - ws[2 + d]) / s + 1).collect();
    let mut y = Tensor::zeros(&[xs[0], ws[0], out[0], out[1], out[2]]);
    for bi in 0..xs[0] {
        for co in 0..ws[0] {
            for a in 0..out[0] {
                for bb in 0..out[1] {
                    for c in 0..out[2] {
                        let mut acc = b.data()[co];
                        for ci in 0..xs[1] {
                            for k0 in 0..ws[2] {
                                for k1 in 0..ws[3] {
                                    for k2 in 0..ws[4] {
                                        let z = (a * s + k0) as isize - p as isize;
                                        let yy = (bb * s + k1) as isize - p as isize;
                                        let xx = (c * s + k2) as isize - p as isize;
                                        if z < 0 || yy < 0 || xx < 0 {
                                            continue;
                                        }
                                        let (z, yy, xx) = (z as usize, yy as usize, xx as usize);
                                        if z >= xs[2] || yy >= xs[3] || xx >= xs[4] {
                                            continue;
                                        }
                                        acc += x.get(&[bi, ci, z, yy, xx]) * w.get(&[co, ci, k0, k1, k2]);
                                    }
                                }
                            }
                        }
                        y.set(&[bi, co, a, bb, c], acc);
                    }
                }
            }
        }
    }
    y
}

#[test]
fn conv3d_matches_direct_loops() {
    for (seed, (s, p, k)) in [(1, 1, 3), (2, 0, 2), (1, 0, 1), (2, 1, 3)].into_iter().enumerate() {
        let x = randn(&[2, 3, 5, 4, 6], seed as u64);
        let w = randn(&[4, 3, k, k, k], 10 + seed as u64);
        let b = randn(&[4], 20 + seed as u64);
        let got = ops::conv3d(
            &Var::constant(x.clone()),
            &Var::constant(w.clone()),
            Some(&Var::constant(b.clone())),
            Conv3dOpts { stride: s, padding: p },
        )
        .unwrap();
        let want = naive_conv3d(&x, &w, &b, s, p);
        assert_eq!(got.shape(), want.shape());
        assert!(got.value().max_abs_diff(&want) < 1e-12);
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for matching geometry and no bias.
    let x = randn(&[1, 3, 6, 4, 4], 1);
    let w = randn(&[5, 3, 2, 2, 2], 2);
    let y = randn(&[1, 5, 3, 2, 2], 3);
    let opts = Conv3dOpts { stride: 2, padding: 0 };
    let cx = ops::conv3d(&Var::constant(x.clone()), &Var::constant(w.clone()), None, opts).unwrap();
    // conv_transpose weight is (C_in, C_out, ...) = (5, 3, ...): same buffer.
    let wt = w.clone();
    let ty = ops::conv_transpose3d(&Var::constant(y.clone()), &Var::constant(wt), None, opts).unwrap();
    assert_eq!(ty.shape(), x.shape());
    let lhs: f64 = cx.value().data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = x.data().iter().zip(ty.value().data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn conv_grads() {
    let x = randn(&[2, 2, 3, 4, 3], 1);
    let w = randn(&[3, 2, 3, 3, 3], 2);
    let b = randn(&[3], 3);
    assert_grads_close(&[x, w, b], |v| {
        project(&ops::conv3d(&v[0], &v[1], Some(&v[2]), Conv3dOpts::same(3))?, 4)
    });
    let x = randn(&[1, 2, 4, 4, 2], 5);
    let w = randn(&[3, 2, 2, 2, 2], 6);
    assert_grads_close(&[x, w], |v| {
        project(&ops::conv3d(&v[0], &v[1], None, Conv3dOpts { stride: 2, padding: 0 })?, 7)
    });
    let x = randn(&[2, 4, 2, 3, 2], 8);
    let w = randn(&[2, 4, 1, 1, 1], 9);
    let b = randn(&[2], 10);
    assert_grads_close(&[x, w, b], |v| {
        project(&ops::conv3d(&v[0], &v[1], Some(&v[2]), Conv3dOpts::default())?, 11)
    });
}

#[test]
fn conv_transpose_grads() {
    let x = randn(&[2, 3, 2, 2, 3], 1);
    let w = randn(&[3, 2, 2, 2, 2], 2);
    let b = randn(&[2], 3);
    assert_grads_close(&[x, w, b], |v| {
        project(
            &ops::conv_transpose3d(&v[0], &v[1], Some(&v[2]), Conv3dOpts { stride: 2, padding: 0 })?,
            4,
        )
    });
}

#[test]
fn max_pool_forward_and_grad() {
    let x = Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i as f64);
    let y = ops::max_pool3d(&Var::constant(x), 2).unwrap();
    assert_eq!(y.value().data(), &[7.0]);
    let x = randn(&[2, 2, 4, 2, 4], 5);
    assert_grads_close(&[x], |v| project(&ops::max_pool3d(&v[0], 2)?, 6));
}

#[test]
fn norm_grads() {
    let x = randn(&[2, 3, 2, 3, 2], 1);
    let g = randn(&[3], 2);
    let b = randn(&[3], 3);
    assert_grads_close(&[x, g, b], |v| project(&ops::instance_norm(&v[0], &v[1], &v[2], 1e-5)?, 4));
    let x = randn(&[4, 5], 5);
    let g = randn(&[5], 6);
    let b = randn(&[5], 7);
    assert_grads_close(&[x.clone(), g, b], |v| {
        project(&ops::layer_norm(&v[0], Some((&v[1], &v[2])), 1e-5)?, 8)
    });
    assert_grads_close(&[x], |v| project(&ops::layer_norm(&v[0], None, 1e-5)?, 9));
}

#[test]
fn instance_norm_output_statistics() {
    let x = randn(&[2, 3, 4, 4, 4], 3);
    let y = ops::instance_norm(
        &Var::constant(x),
        &Var::constant(Tensor::ones(&[3])),
        &Var::constant(Tensor::zeros(&[3])),
        1e-5,
    )
    .unwrap();
    for row in y.value().data().chunks(64) {
        let mean: f64 = row.iter().sum::<f64>() / 64.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn linear_bmm_softmax_grads() {
    let x = randn(&[2, 3, 4], 1);
    let w = randn(&[5, 4], 2);
    let b = randn(&[5], 3);
    assert_grads_close(&[x, w, b], |v| project(&ops::linear(&v[0], &v[1], Some(&v[2]))?, 4));
    let a = randn(&[3, 2, 4], 5);
    let bm = randn(&[3, 4, 5], 6);
    assert_grads_close(&[a.clone(), bm], |v| project(&ops::bmm(&v[0], &v[1], false)?, 7));
    let bt = randn(&[3, 5, 4], 8);
    assert_grads_close(&[a, bt], |v| project(&ops::bmm(&v[0], &v[1], true)?, 9));
    let s = randn(&[3, 6], 10);
    assert_grads_close(&[s], |v| project(&ops::softmax_last(&v[0])?, 11));
}

#[test]
fn elementwise_and_broadcast_grads() {
    let a = randn(&[2, 3, 4], 1);
    let b = randn(&[3, 1], 2);
    assert_grads_close(&[a.clone(), b.clone()], |v| project(&v[0].add(&v[1])?, 3));
    assert_grads_close(&[a.clone(), b.clone()], |v| project(&v[0].sub(&v[1])?, 4));
    assert_grads_close(&[a.clone(), b.clone()], |v| project(&v[0].mul(&v[1])?, 5));
    let pos = b.map(|v| v.abs() + 0.5);
    assert_grads_close(&[a.clone(), pos], |v| project(&v[0].div(&v[1])?, 6));
    assert_grads_close(std::slice::from_ref(&a), |v| project(&v[0].sigmoid(), 7));
    assert_grads_close(std::slice::from_ref(&a), |v| project(&v[0].tanh(), 8));
    assert_grads_close(std::slice::from_ref(&a), |v| project(&v[0].gelu(), 9));
    assert_grads_close(std::slice::from_ref(&a), |v| project(&v[0].exp(), 10));
    assert_grads_close(&[a.map(|v| v.abs() + 0.1)], |v| project(&v[0].ln(), 11));
    assert_grads_close(std::slice::from_ref(&a), |v| project(&v[0].square().scale(0.3).add_scalar(2.0), 12));
    assert_grads_close(&[a], |v| project(&v[0].leaky_relu(0.01), 13));
}

#[test]
fn shape_op_grads() {
    let a = randn(&[2, 3, 4], 1);
    let b = randn(&[2, 2, 4], 2);
    assert_grads_close(&[a.clone(), b], |v| project(&ops::cat(&[&v[0], &v[1]], 1)?, 3));
    assert_grads_close(std::slice::from_ref(&a), |v| project(&v[0].permute(&[2, 0, 1])?, 4));
    assert_grads_close(std::slice::from_ref(&a), |v| project(&v[0].narrow(2, 1, 2)?, 5));
    assert_grads_close(std::slice::from_ref(&a), |v| project(&v[0].pad(&[(0, 0), (1, 2), (0, 1)])?, 6));
    assert_grads_close(std::slice::from_ref(&a), |v| project(&v[0].roll(&[(1, 1), (2, -3)])?, 7));
    assert_grads_close(std::slice::from_ref(&a), |v| project(&v[0].mean_last()?, 8));
    assert_grads_close(std::slice::from_ref(&a), |v| project(&v[0].reshape(&[6, 4])?, 9));
    // Repeated gather indices accumulate.
    assert_grads_close(&[a], |v| project(&v[0].gather(&[5], Rc::new(vec![0, 0, 3, usize::MAX, 23]))?, 10));
}

#[test]
fn roll_and_crop_values() {
    let a = Var::constant(Tensor::from_fn(&[5], |i| i as f64));
    assert_eq!(a.roll(&[(0, 2)]).unwrap().value().data(), &[3.0, 4.0, 0.0, 1.0, 2.0]);
    assert_eq!(a.roll(&[(0, -1)]).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0, 0.0]);
    let p = a.pad(&[(1, 2)]).unwrap();
    assert_eq!(p.value().data(), &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 0.0]);
    assert_eq!(p.crop(&[1], &[5]).unwrap().value(), a.value());
}

#[test]
fn backward_rejects_non_scalar() {
    let a = Var::leaf(Tensor::<f64>::zeros(&[2]));
    assert!(a.backward().is_err());
}

#[test]
fn shared_subexpression_accumulates() {
    let x = Var::leaf(Tensor::<f64>::from_f64(&[1], &[3.0]).unwrap());
    // y = x*x + x  ->  dy/dx = 2x + 1 = 7
    let y = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
    let g = y.backward().unwrap();
    assert_eq!(g.wrt(&x).unwrap().data(), &[7.0]);
}

#[test]
fn constant_graphs_record_nothing() {
    let x = Var::constant(Tensor::<f32>::ones(&[3]));
    let y = x.scale(2.0).relu();
    assert!(!y.requires_grad());
}

proptest! {
    #[test]
    fn permute_then_inverse_is_identity(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, which in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let p = perms[which];
        let mut inv = [0; 3];
        for (i, &a) in p.iter().enumerate() {
            inv[a] = i;
        }
        let t = Var::constant(Tensor::<f32>::from_fn(&[d0, d1, d2], |i| i as f32));
        let back = t.permute(&p).unwrap().permute(&inv).unwrap();
        prop_assert_eq!(back.value(), t.value());
    }

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-20.0f64..20.0, 12)) {
        let t = Var::constant(Tensor::new(&[3, 4], vals).unwrap());
        let s = ops::softmax_last(&t).unwrap();
        for row in s.value().data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
