use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{numeric_grad, relative_error};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(
        shape,
        &(0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
    )
}

/// Direct nested-loop convolution, summing over (c, m, n) in row-major order.
fn conv_oracle(x: &Tensor, w: &Tensor, b: Option<&[f64]>, pad: usize, stride: usize) -> Vec<f64> {
    let (bs, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let xv = x.data();
    let wv = w.data();
    let px = |bi: usize, ci: usize, r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= h as isize || col >= wd as isize {
            0.0
        } else {
            xv[((bi * c + ci) * h + r as usize) * wd + col as usize]
        }
    };
    let mut out = Vec::new();
    for bi in 0..bs {
        for oc in 0..o {
            for a in 0..ho {
                for bb in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for m in 0..k {
                            for n in 0..k {
                                let r = (a * stride + m) as isize - pad as isize;
                                let col = (bb * stride + n) as isize - pad as isize;
                                s += wv[((oc * c + ci) * k + m) * k + n] * px(bi, ci, r, col);
                            }
                        }
                    }
                    out.push(s + b.map_or(0.0, |b| b[oc]));
                }
            }
        }
    }
    out
}

/// Checks every input's analytic gradient against central differences.
fn fd_check(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor, h: f64, tol: f64) {
    let g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().map(|x| g.leaf(x)).collect();
    let out = f(&leaves);
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let analytic = grad(&out, &refs, false).unwrap();
    for (i, x) in inputs.iter().enumerate() {
        let numeric = numeric_grad(
            |v| {
                let mut args = inputs.to_vec();
                args[i] = t(x.shape(), v);
                f(&args).item().unwrap()
            },
            x.data(),
            h,
        );
        let err = relative_error(analytic[i].data(), &numeric);
        assert!(err < tol, "input {i}: relative error {err:e}");
    }
}

#[test]
fn conv_one_by_one_is_affine() {
    let x = t(&[1, 1, 1], &[5.0]);
    let w = t(&[1, 1, 1, 1], &[2.0]);
    let b = t(&[1], &[3.0]);
    let z = x.conv2d(&w, Some(&b), 0, 1).unwrap();
    assert_eq!(z.shape(), &[1, 1, 1]);
    assert_eq!(z.data(), &[13.0]);
}

#[test]
fn conv_all_ones_sums_window() {
    let z = Tensor::ones(&[1, 3, 3])
        .conv2d(
            &Tensor::ones(&[1, 1, 3, 3]),
            Some(&Tensor::zeros(&[1])),
            0,
            1,
        )
        .unwrap();
    assert_eq!(z.data(), &[9.0]);
}

#[test]
fn conv_padded_matches_nested_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&mut rng, &[1, 1, 5, 5]);
    let w = random(&mut rng, &[2, 1, 3, 3]);
    let b = random(&mut rng, &[2]);
    let z = x.conv2d(&w, Some(&b), 1, 1).unwrap();
    let oracle = conv_oracle(&x, &w, Some(b.data()), 1, 1);
    assert_eq!(z.shape(), &[1, 2, 5, 5]);
    for (a, o) in z.data().iter().zip(&oracle) {
        assert!((a - o).abs() < 1e-12);
    }
}

#[test]
fn conv_reports_offending_axis() {
    let x = Tensor::zeros(&[1, 2, 4, 4]);
    let w = Tensor::zeros(&[1, 3, 3, 3]);
    let err = x.conv2d(&w, None, 0, 1).unwrap_err();
    assert!(err.to_string().contains("axis 1"), "{err}");
    let w = Tensor::zeros(&[1, 2, 5, 5]);
    let err = x.conv2d(&w, None, 0, 1).unwrap_err();
    assert!(err.to_string().contains("axis 2"), "{err}");
}

#[test]
fn relu_values_and_gradients() {
    let y = t(&[3], &[-1.0, 0.0, 2.0]).relu().unwrap();
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

    let g = Graph::new();
    let x = g.leaf(&t(&[2], &[-1.0, 2.0]));
    let dx = grad(&x.relu().unwrap().sum().unwrap(), &[&x], false).unwrap();
    assert_eq!(dx[0].data(), &[0.0, 1.0]);

    let x = g.leaf(&t(&[2], &[0.0, 0.0]));
    let dx = grad(&x.relu().unwrap().sum().unwrap(), &[&x], false).unwrap();
    assert_eq!(dx[0].data(), &[0.0, 0.0]);
}

#[test]
fn relu_second_derivative_vanishes() {
    let g = Graph::new();
    let x = g.leaf(&t(&[1], &[3.0]));
    let y = x.relu().unwrap().sum().unwrap();
    let dx = grad(&y, &[&x], true).unwrap();
    let d2 = grad_with(
        &dx[0].sum().unwrap(),
        &[&x],
        GradOptions {
            create_graph: false,
            allow_unused: true,
        },
    )
    .unwrap();
    assert_eq!(d2[0].data(), &[0.0]);
}

#[test]
fn maxpool_examples() {
    let y = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])
        .maxpool2d(2, 2, 0)
        .unwrap();
    assert_eq!(y.shape(), &[1, 1, 1]);
    assert_eq!(y.data(), &[4.0]);

    let y = Tensor::ones(&[1, 6, 6]).maxpool2d(3, 2, 0).unwrap();
    assert!(y.data().iter().all(|&v| v == 1.0));
}

/// Brute-force window scan over a zero-padded copy.
fn maxpool_oracle(x: &[f64], h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![0.0; hp * wp];
    for r in 0..h {
        for c in 0..w {
            padded[(r + pad) * wp + c + pad] = x[r * w + c];
        }
    }
    let mut out = Vec::new();
    for a in (0..=hp - k).step_by(stride) {
        for b in (0..=wp - k).step_by(stride) {
            let mut m = f64::NEG_INFINITY;
            for r in a..a + k {
                for c in b..b + k {
                    m = m.max(padded[r * wp + c]);
                }
            }
            out.push(m);
        }
    }
    out
}

#[test]
fn maxpool_dilates_single_pixel() {
    let mut m = vec![0.0; 28 * 28];
    m[0] = 1.0;
    let y = t(&[1, 28, 28], &m).maxpool2d(3, 1, 1).unwrap();
    assert_eq!(y.data(), maxpool_oracle(&m, 28, 28, 3, 1, 1).as_slice());
    for r in 0..28 {
        for c in 0..28 {
            let expect = if r < 2 && c < 2 { 1.0 } else { 0.0 };
            assert_eq!(y.data()[r * 28 + c], expect, "({r},{c})");
        }
    }
}

#[test]
fn maxpool_ties_route_gradient_to_first_index() {
    let g = Graph::new();
    let x = g.leaf(&t(&[1, 2, 2], &[5.0, 5.0, 5.0, 5.0]));
    let y = x.maxpool2d(2, 2, 0).unwrap().sum().unwrap();
    let dx = grad(&y, &[&x], false).unwrap();
    assert_eq!(dx[0].data(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn adaptive_identity_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[2, 5, 7]);
    assert_eq!(x.adaptive_avgpool2d(5, 7).unwrap().data(), x.data());
    let c = Tensor::full(&[1, 9, 6], 2.5)
        .adaptive_avgpool2d(4, 5)
        .unwrap();
    assert!(c.data().iter().all(|&v| v == 2.5));
}

/// Averages each output bin with explicitly computed boundaries.
fn adaptive_oracle(x: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let lo = |a: usize, n: usize, o: usize| (a as f64 * n as f64 / o as f64).floor() as usize;
    let hi = |a: usize, n: usize, o: usize| ((a + 1) as f64 * n as f64 / o as f64).ceil() as usize;
    let mut out = Vec::new();
    for a in 0..ho {
        for b in 0..wo {
            let (r0, r1, c0, c1) = (lo(a, h, ho), hi(a, h, ho), lo(b, w, wo), hi(b, w, wo));
            let mut s = 0.0;
            let mut n = 0.0;
            for r in r0..r1 {
                for c in c0..c1 {
                    s += x[r * w + c];
                    n += 1.0;
                }
            }
            out.push(s / n);
        }
    }
    out
}

#[test]
fn adaptive_matches_bin_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[1, 7, 7]);
    let y = x.adaptive_avgpool2d(3, 3).unwrap();
    for (a, o) in y.data().iter().zip(adaptive_oracle(x.data(), 7, 7, 3, 3)) {
        assert!((a - o).abs() < 1e-12);
    }
}

#[test]
fn reductions_and_losses() {
    assert_eq!(
        t(&[3], &[-1.0, 2.0, -3.0])
            .abs_sum()
            .unwrap()
            .item()
            .unwrap(),
        6.0
    );
    let ce = cross_entropy(&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 2], &[1.0, 0.0])).unwrap();
    assert!((ce.item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

    let mask = t(&[4], &[1.0, 0.0, 1.0, 0.0]);
    let a = t(&[4], &[-2.0, 7.0, 3.0, -9.0]);
    assert_eq!(
        mask.mul(&a).unwrap().abs_sum().unwrap().item().unwrap(),
        5.0
    );
}

#[test]
fn grad_of_sum_of_squares() {
    let g = Graph::new();
    let x = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
    let y = x.square().unwrap().sum().unwrap();
    assert_eq!(grad(&y, &[&x], false).unwrap()[0].data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn grad_error_paths() {
    let g = Graph::new();
    let x = g.leaf(&t(&[2], &[1.0, 2.0]));
    let unrelated = g.leaf(&t(&[1], &[0.0]));
    let y = x.sum().unwrap();
    assert_eq!(
        grad(&y, &[&x, &unrelated], false).unwrap_err(),
        TensorError::Disconnected { index: 1 }
    );
    assert_eq!(
        grad(&x.square().unwrap(), &[&x], false).unwrap_err(),
        TensorError::NonScalarOutput(vec![2])
    );
    let plain = t(&[2], &[1.0, 2.0]);
    assert_eq!(
        grad(&y, &[&plain], false).unwrap_err(),
        TensorError::NotTracked { index: 0 }
    );
    let other = Graph::new().leaf(&plain);
    assert_eq!(x.add(&other).unwrap_err(), TensorError::GraphMismatch);
    let opts = GradOptions {
        create_graph: false,
        allow_unused: true,
    };
    let gs = grad_with(&y, &[&x, &unrelated], opts).unwrap();
    assert_eq!(gs[1].data(), &[0.0]);
}

#[test]
fn first_order_gradients_of_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (h, tol) = (1e-5, 1e-5);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[3, 4]);
    let w = random(&mut rng, &[4, 2]);
    // Weighted sums keep each check sensitive to every output element.
    let wt = random(&mut rng, &[3, 4]);
    let wsum = |x: Tensor, wt: &Tensor| -> Tensor {
        let wt = Tensor::from_array(&wt.to_array())
            .reshape(x.shape())
            .unwrap();
        x.mul(&wt).unwrap().sum().unwrap()
    };
    fd_check(
        &[a.clone(), b.clone()],
        |v| wsum(v[0].add(&v[1]).unwrap(), &wt),
        h,
        tol,
    );
    fd_check(
        &[a.clone(), b.clone()],
        |v| wsum(v[0].sub(&v[1]).unwrap(), &wt),
        h,
        tol,
    );
    fd_check(
        &[a.clone(), b.clone()],
        |v| wsum(v[0].mul(&v[1]).unwrap(), &wt),
        h,
        tol,
    );
    fd_check(
        &[a.clone()],
        |v| wsum(v[0].scale(-1.7).unwrap(), &wt),
        h,
        tol,
    );
    fd_check(&[a.clone()], |v| wsum(v[0].abs().unwrap(), &wt), h, tol);
    fd_check(&[a.clone()], |v| wsum(v[0].square().unwrap(), &wt), h, tol);
    fd_check(&[a.clone()], |v| wsum(v[0].exp().unwrap(), &wt), h, tol);
    fd_check(&[a.clone()], |v| wsum(v[0].relu().unwrap(), &wt), h, tol);
    fd_check(&[a.clone()], |v| v[0].abs_sum().unwrap(), h, tol);
    fd_check(
        &[a.clone()],
        |v| wsum(v[0].log_softmax().unwrap(), &wt),
        h,
        tol,
    );
    fd_check(
        &[a.clone()],
        |v| {
            let y = v[0].reduce_to(&[3, 1]).unwrap().expand_to(&[3, 4]).unwrap();
            wsum(y, &wt)
        },
        h,
        tol,
    );
    let wt2 = random(&mut rng, &[3, 2]);
    fd_check(
        &[a.clone(), w.clone()],
        |v| wsum(v[0].matmul(&v[1]).unwrap(), &wt2),
        h,
        tol,
    );
    let wt3 = random(&mut rng, &[4, 3]);
    fd_check(
        &[a.clone()],
        |v| wsum(v[0].transpose().unwrap(), &wt3),
        h,
        tol,
    );
    let onehot = t(&[3, 4], &[1., 0., 0., 0., 0., 0., 1., 0., 0., 1., 0., 0.]);
    fd_check(
        &[a.clone()],
        |v| cross_entropy(&v[0], &onehot).unwrap(),
        h,
        tol,
    );

    let x = random(&mut rng, &[2, 2, 5, 5]);
    let k = random(&mut rng, &[3, 2, 3, 3]);
    let bias = random(&mut rng, &[3]);
    for (pad, stride) in [(0, 1), (1, 1), (1, 2)] {
        let out_len = conv_oracle(&x, &k, None, pad, stride).len();
        let wt = random(&mut rng, &[out_len]);
        fd_check(
            &[x.clone(), k.clone(), bias.clone()],
            |v| wsum(v[0].conv2d(&v[1], Some(&v[2]), pad, stride).unwrap(), &wt),
            h,
            tol,
        );
    }
    let wt = random(&mut rng, &[2 * 2 * 3 * 3]);
    fd_check(
        &[x.clone()],
        |v| wsum(v[0].maxpool2d(2, 2, 1).unwrap(), &wt),
        h,
        tol,
    );
    let wt = random(&mut rng, &[2 * 2 * 2 * 3]);
    fd_check(
        &[x.clone()],
        |v| wsum(v[0].adaptive_avgpool2d(2, 3).unwrap(), &wt),
        h,
        tol,
    );
    let wt = random(&mut rng, &[2 * 5 * 5]);
    fd_check(
        &[x.clone()],
        |v| wsum(v[0].sum_channels().unwrap(), &wt),
        h,
        tol,
    );
}

/// `‖∂L/∂x‖²` where `L = Σ log_softmax(linear(relu(conv(x))))`, with the
/// inner gradient taken by central differences.
fn inner_gradient_norm(x: &Tensor, w1: &Tensor, w2: &Tensor) -> f64 {
    let loss = |xv: &[f64]| -> f64 {
        let x = t(x.shape(), xv);
        x.conv2d(w1, None, 0, 1)
            .unwrap()
            .relu()
            .unwrap()
            .flatten()
            .unwrap()
            .matmul(w2)
            .unwrap()
            .log_softmax()
            .unwrap()
            .sum()
            .unwrap()
            .item()
            .unwrap()
    };
    numeric_grad(loss, x.data(), 1e-4)
        .iter()
        .map(|g| g * g)
        .sum()
}

#[test]
fn second_order_gradient_matches_nested_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random(&mut rng, &[1, 1, 4, 4]);
    let w1 = random(&mut rng, &[2, 1, 3, 3]);
    let w2 = random(&mut rng, &[8, 3]);

    let g = Graph::new();
    let (xl, w1l, w2l) = (g.leaf(&x), g.leaf(&w1), g.leaf(&w2));
    let l = xl
        .conv2d(&w1l, None, 0, 1)
        .unwrap()
        .relu()
        .unwrap()
        .flatten()
        .unwrap()
        .matmul(&w2l)
        .unwrap()
        .log_softmax()
        .unwrap()
        .sum()
        .unwrap();
    let dx = grad(&l, &[&xl], true).unwrap();
    let norm = dx[0].square().unwrap().sum().unwrap();
    assert!((norm.item().unwrap() - inner_gradient_norm(&x, &w1, &w2)).abs() < 1e-6);
    let analytic = grad(&norm, &[&w1l, &w2l], false).unwrap();
    assert_eq!(g.second_order_passes(), 1);

    let num_w1 = numeric_grad(
        |v| inner_gradient_norm(&x, &t(w1.shape(), v), &w2),
        w1.data(),
        1e-3,
    );
    let num_w2 = numeric_grad(
        |v| inner_gradient_norm(&x, &w1, &t(w2.shape(), v)),
        w2.data(),
        1e-3,
    );
    assert!(relative_error(analytic[0].data(), &num_w1) < 1e-2);
    assert!(relative_error(analytic[1].data(), &num_w2) < 1e-2);
}

#[test]
fn replay_reproduces_recorded_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Graph::new();
    let x = g.leaf(&random(&mut rng, &[2, 1, 6, 6]));
    let w = g.leaf(&random(&mut rng, &[3, 1, 3, 3]));
    let y = x
        .conv2d(&w, None, 1, 1)
        .unwrap()
        .relu()
        .unwrap()
        .maxpool2d(2, 2, 0)
        .unwrap()
        .sum()
        .unwrap();
    let _ = grad(&y, &[&x], true).unwrap();
    let report = g.replay().unwrap();
    assert!(report.nodes > 5);
    assert!(report.is_exact(), "{report:?}");
}

#[test]
fn untracked_ops_record_nothing() {
    let g = Graph::new();
    let _x = g.leaf(&Tensor::ones(&[2]));
    let before = g.len();
    let y = Tensor::ones(&[2]).add(&Tensor::ones(&[2])).unwrap();
    assert!(!y.requires_grad());
    assert_eq!(g.len(), before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_bitwise_equal_to_nested_loops(
        h in 1usize..=8, w in 1usize..=8, c in 1usize..=3, o in 1usize..=3,
        k in 1usize..=3, pad in 0usize..=1, stride in 1usize..=2, seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, c, h, w]);
        let f = random(&mut rng, &[o, c, k, k]);
        let z = x.conv2d(&f, None, pad, stride).unwrap();
        let oracle = conv_oracle(&x, &f, None, pad, stride);
        prop_assert_eq!(z.data().len(), oracle.len());
        for (a, b) in z.data().iter().zip(&oracle) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn maxpool_matches_window_scan(
        h in 1usize..=9, w in 1usize..=9, k in 1usize..=3, stride in 1usize..=3,
        pad in 0usize..=1, seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1, h, w]);
        let y = x.maxpool2d(k, stride, pad).unwrap();
        let oracle = maxpool_oracle(x.data(), h, w, k, stride, pad);
        prop_assert_eq!(y.data(), oracle.as_slice());
    }

    #[test]
    fn adaptive_then_bin_upsample_reconstructs_constants(
        h in 1usize..=12, w in 1usize..=12, fh in 0.0f64..1.0, fw in 0.0f64..1.0, v in -5.0f64..5.0,
    ) {
        let ho = 1 + (fh * (h - 1) as f64) as usize;
        let wo = 1 + (fw * (w - 1) as f64) as usize;
        let x = Tensor::full(&[1, h, w], v);
        let pooled = x.adaptive_avgpool2d(ho, wo).unwrap();
        for r in 0..h {
            for c in 0..w {
                let cell = pooled.data()[(r * ho / h) * wo + c * wo / w];
                prop_assert!((cell - v).abs() <= 1e-12 * v.abs().max(1.0));
            }
        }
        let y = x.adaptive_avgpool2d(ho, wo).unwrap();
        for (a, o) in y.data().iter().zip(adaptive_oracle(x.data(), h, w, ho, wo)) {
            prop_assert!((a - o).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_output_is_nonnegative(v in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
        let n = v.len();
        let y = Tensor::new(vec![n], v).unwrap().relu().unwrap();
        prop_assert!(y.data().iter().all(|&x| x >= 0.0));
    }
}
