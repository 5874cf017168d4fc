//! Forward kernels against naive nested-loop references, and reverse-mode
//! gradients against central differences.

use danet::tensor::kernels::{self, ConvGeometry};
use danet::tensor::{finite_diff_check, finite_diff_check_mixed, BnMode, GradCheckOptions, Graph};
use danet::{Scalar, Tensor, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct six-loop cross-correlation.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, s: usize, p: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape()[..] else { panic!() };
    let [cout, _, kh, kw] = w.shape()[..] else { panic!() };
    let ho = (h + 2 * p - kh) / s + 1;
    let wo = (wd + 2 * p - kw) / s + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bn in 0..n {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s + ky) as isize - p as isize;
                                let ix = (ox * s + kx) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at4(bn, c, iy as usize, ix as usize) * w.at4(o, c, ky, kx);
                            }
                        }
                    }
                    out[((bn * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

/// Depthwise convolution as one single-channel dense convolution per channel.
fn depthwise_oracle(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
    let [n, c, _, _] = x.shape()[..] else { panic!() };
    let mut planes = Vec::new();
    for ch in 0..c {
        let xc = x.slice_channels(ch, ch + 1).unwrap();
        let k = w.shape()[2];
        let wc = Tensor::new(&[1, 1, k, k], w.data()[ch * k * k..(ch + 1) * k * k].to_vec()).unwrap();
        planes.push(conv_oracle(&xc, &wc, None, s, p));
    }
    let [_, _, ho, wo] = planes[0].shape()[..] else { panic!() };
    let mut out = vec![0.0; n * c * ho * wo];
    for b in 0..n {
        for (ch, pl) in planes.iter().enumerate() {
            out[(b * c + ch) * ho * wo..][..ho * wo].copy_from_slice(&pl.data()[b * ho * wo..][..ho * wo]);
        }
    }
    Tensor::new(&[n, c, ho, wo], out).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, rel: f64) {
    assert_eq!(a.shape(), b.shape());
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        let tol = rel * x.abs().max(y.abs()).max(1.0);
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
    }
}

#[test]
fn conv2d_matches_six_loop_reference() {
    let mut r = rng(1);
    let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[3], 1.0, &mut r);
    for (s, p) in [(1, 0), (1, 1), (2, 1)] {
        let got = kernels::conv2d(&x, &w, Some(&b), ConvGeometry::new(s, p)).unwrap();
        assert_close(&got, &conv_oracle(&x, &w, Some(&b), s, p), 1e-12);
    }
}

#[test]
fn depthwise_matches_grouped_conv_oracle() {
    let mut r = rng(2);
    let x = Tensor::<f64>::randn(&[1, 4, 7, 7], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[4, 1, 9, 9], 1.0, &mut r);
    let got = kernels::depthwise_conv2d(&x, &w, ConvGeometry::new(1, 4)).unwrap();
    assert_eq!(got.shape(), &[1, 4, 7, 7]);
    assert_close(&got, &depthwise_oracle(&x, &w, 1, 4), 1e-12);
}

#[test]
fn depthwise_zero_and_identity_kernels() {
    let mut r = rng(3);
    let x = Tensor::<f32>::randn(&[2, 3, 6, 5], 1.0, &mut r);
    let zero = Tensor::<f32>::zeros(&[3, 1, 9, 9]);
    let y = kernels::depthwise_conv2d(&x, &zero, ConvGeometry::new(1, 4)).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let ident = Tensor::<f32>::from_fn(&[3, 1, 9, 9], |i| if i % 81 == 40 { 1.0 } else { 0.0 });
    assert_eq!(kernels::depthwise_conv2d(&x, &ident, ConvGeometry::new(1, 4)).unwrap(), x);
}

#[test]
fn depthwise_channels_are_independent() {
    let mut r = rng(4);
    let x = Tensor::<f64>::randn(&[1, 3, 6, 6], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[3, 1, 3, 3], 1.0, &mut r);
    let base = kernels::depthwise_conv2d(&x, &w, ConvGeometry::new(1, 1)).unwrap();
    let mut x2 = x.clone();
    for v in &mut x2.data_mut()[36..72] {
        *v += 5.0;
    }
    let moved = kernels::depthwise_conv2d(&x2, &w, ConvGeometry::new(1, 1)).unwrap();
    assert_eq!(&base.data()[..36], &moved.data()[..36]);
    assert_eq!(&base.data()[72..], &moved.data()[72..]);
}

#[test]
fn batchnorm_eval_identity_parameters() {
    let mut r = rng(5);
    let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut r);
    let (y, _) = kernels::batchnorm_eval(
        &x,
        &Tensor::ones(&[3]),
        &Tensor::zeros(&[3]),
        &Tensor::zeros(&[3]),
        &Tensor::ones(&[3]),
        1e-5,
    )
    .unwrap();
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert_close(&y, &x.map(|v| v * scale), 1e-12);
}

#[test]
fn batchnorm_train_constant_input_gives_beta() {
    let x = Tensor::<f64>::full(&[2, 2, 3, 3], 7.0);
    let beta = Tensor::new(&[2], vec![0.25, -1.5]).unwrap();
    let (y, _) = kernels::batchnorm_train(&x, &Tensor::ones(&[2]), &beta, 1e-5).unwrap();
    for (i, &v) in y.data().iter().enumerate() {
        let c = (i / 9) % 2;
        assert!((v - beta.data()[c]).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_train_moments_follow_gamma_beta() {
    let mut r = rng(6);
    let x = Tensor::<f64>::randn(&[4, 3, 2, 2], 3.0, &mut r).map(|v| v + 2.0);
    let gamma = Tensor::new(&[3], vec![0.5, 2.0, 1.5]).unwrap();
    let beta = Tensor::new(&[3], vec![1.0, -0.5, 0.0]).unwrap();
    let (y, _) = kernels::batchnorm_train(&x, &gamma, &beta, 1e-5).unwrap();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| (0..4).map(move |i| (n, i))).map(|(n, i)| y.data()[(n * 3 + c) * 4 + i]).collect();
        let xs: Vec<f64> = (0..4).flat_map(|n| (0..4).map(move |i| (n, i))).map(|(n, i)| x.data()[(n * 3 + c) * 4 + i]).collect();
        let m = vals.iter().sum::<f64>() / 16.0;
        let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0).sqrt();
        let xm = xs.iter().sum::<f64>() / 16.0;
        let xv = xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 16.0;
        assert!((m - beta.data()[c]).abs() < 1e-10);
        let expect_sd = gamma.data()[c] * (xv / (xv + 1e-5)).sqrt();
        assert!((sd - expect_sd).abs() < 1e-10, "channel {c}: {sd} vs {expect_sd}");
    }
}

#[test]
fn pool_constant_and_gap_mean() {
    let x = Tensor::<f32>::full(&[1, 2, 6, 4], 3.5);
    let (mp, _) = kernels::max_pool3x3s2(&x).unwrap();
    assert!(mp.data().iter().all(|&v| v == 3.5));
    let gap = kernels::global_avg_pool(&x).unwrap();
    assert_eq!(gap.shape(), &[1, 2, 1, 1]);
    assert!(gap.data().iter().all(|&v| v == 3.5));
}

#[test]
fn concat_of_64_and_32_channels() {
    let a = Tensor::<f32>::zeros(&[1, 64, 4, 3]);
    let b = Tensor::<f32>::zeros(&[1, 32, 4, 3]);
    assert_eq!(kernels::concat_channels(&a, &b).unwrap().shape(), &[1, 96, 4, 3]);
}

#[test]
fn linear_matches_triple_loop() {
    let mut r = rng(7);
    let x = Tensor::<f64>::randn(&[2, 3], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[4, 3], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[4], 1.0, &mut r);
    let y = kernels::linear(&x, &w, &b).unwrap();
    for n in 0..2 {
        for o in 0..4 {
            let mut acc = b.data()[o];
            for i in 0..3 {
                acc += x.data()[n * 3 + i] * w.data()[o * 3 + i];
            }
            assert!((y.data()[n * 4 + o] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn concat_gradient_is_all_ones() {
    let mut r = rng(8);
    let a = Tensor::<f64>::randn(&[1, 2, 3, 3], 1.0, &mut r);
    let b = Tensor::<f64>::randn(&[1, 3, 3, 3], 1.0, &mut r);
    let mut g = Graph::new();
    let av = g.leaf(a, true);
    let bv = g.leaf(b.clone(), true);
    let c = g.concat_channels(av, bv).unwrap();
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(&g, av), Tensor::ones(&[1, 2, 3, 3]));
    assert_eq!(grads.wrt(&g, bv), Tensor::ones(&[1, 3, 3, 3]));
    // and the finite-difference view of the same thing
    let r = finite_diff_check(
        |g, x| {
            let bl = g.constant(b.clone());
            let c = g.concat_channels(x, bl)?;
            Ok(g.sum(c))
        },
        &Tensor::<f64>::randn(&[1, 2, 3, 3], 1.0, &mut rng(9)),
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9);
}

#[test]
fn upsample_sum_gradient_is_four() {
    let r = finite_diff_check(
        |g, x| {
            let u = g.upsample2x(x)?;
            Ok(g.sum(u))
        },
        &Tensor::<f64>::randn(&[1, 2, 3, 2], 1.0, &mut rng(10)),
        1e-3,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-9);
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f64>::zeros(&[1, 1, 2, 2]), true);
    let u = g.upsample2x(x).unwrap();
    let s = g.sum(u);
    assert_eq!(g.backward(s).unwrap().wrt(&g, x), Tensor::full(&[1, 1, 2, 2], 4.0));
}

struct ConvBnRelu<T> {
    w: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    stats: Tensor<T>,
    readout: Tensor<T>,
}

impl ConvBnRelu<f32> {
    fn widen(&self) -> ConvBnRelu<f64> {
        ConvBnRelu {
            w: self.w.cast(),
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            stats: self.stats.cast(),
            readout: self.readout.cast(),
        }
    }
}

impl<T: Scalar> ConvBnRelu<T> {
    /// conv → BN(train) → relu → weighted sum
    fn eval<'a>(&'a self, g: &mut Graph<'a, T>, x: Var) -> danet::Result<Var> {
        let wv = g.leaf_ref(&self.w, false);
        let gv = g.leaf_ref(&self.gamma, false);
        let bv = g.leaf_ref(&self.beta, false);
        let c = g.conv2d(x, wv, None, 1, 1)?;
        let n = g.batchnorm(c, gv, bv, &self.stats, &self.stats, BnMode::Train, 1e-5)?;
        let a = g.relu(n);
        let r = g.leaf_ref(&self.readout, false);
        let m = g.mul(a, r)?;
        Ok(g.sum(m))
    }
}

#[test]
fn composite_conv_bn_relu_gradient_f32() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let x = Tensor::<f32>::randn(&[1, 2, 4, 4], 1.0, &mut r);
        let f = ConvBnRelu {
            w: Tensor::<f32>::randn(&[3, 2, 3, 3], 0.5, &mut r),
            gamma: Tensor::<f32>::uniform(&[3], 0.5, 1.5, &mut r),
            beta: Tensor::<f32>::randn(&[3], 0.2, &mut r),
            stats: Tensor::<f32>::zeros(&[3]),
            readout: Tensor::<f32>::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r),
        };
        let wide = f.widen();
        let rep = finite_diff_check_mixed(
            |g, x| f.eval(g, x),
            |g, x| wide.eval(g, x),
            &x,
            GradCheckOptions { step: 1e-3, ..Default::default() },
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-3, "seed {seed}: {rep:?}");
        assert!(rep.excluded.len() <= x.len() / 10, "seed {seed}: {rep:?}");
    }
}

#[test]
fn single_precision_reference_is_too_noisy_for_the_tolerance() {
    // documents why the f32 checks take their reference in f64: the same
    // composite, differenced in f32 itself, misses the tolerance on some seed
    let worst = (0..5)
        .map(|seed| {
            let mut r = rng(100 + seed);
            let x = Tensor::<f32>::randn(&[1, 2, 4, 4], 1.0, &mut r);
            let f = ConvBnRelu {
                w: Tensor::<f32>::randn(&[3, 2, 3, 3], 0.5, &mut r),
                gamma: Tensor::<f32>::uniform(&[3], 0.5, 1.5, &mut r),
                beta: Tensor::<f32>::randn(&[3], 0.2, &mut r),
                stats: Tensor::<f32>::zeros(&[3]),
                readout: Tensor::<f32>::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut r),
            };
            finite_diff_check(|g, x| f.eval(g, x), &x, 1e-3).unwrap().max_rel_error
        })
        .fold(0.0, f64::max);
    assert!(worst > 1e-3, "{worst}");
}

#[test]
fn max_pool_and_depthwise_gradients_f64() {
    let mut r = rng(11);
    let w = Tensor::<f64>::randn(&[2, 1, 3, 3], 1.0, &mut r);
    let readout = Tensor::<f64>::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r);
    let x = Tensor::<f64>::randn(&[1, 2, 5, 5], 1.0, &mut r);
    let rep = finite_diff_check(
        |g, x| {
            let wv = g.leaf_ref(&w, false);
            let d = g.depthwise_conv2d(x, wv, 1, 1)?;
            let p = g.max_pool(d)?;
            let rv = g.leaf_ref(&readout, false);
            let m = g.mul(p, rv)?;
            Ok(g.sum(m))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

#[test]
fn gap_fc_sigmoid_mulchannel_gradient_f64() {
    let mut r = rng(12);
    let w1 = Tensor::<f64>::randn(&[2, 4], 0.5, &mut r);
    let b1 = Tensor::<f64>::randn(&[2], 0.5, &mut r);
    let w2 = Tensor::<f64>::randn(&[4, 2], 0.5, &mut r);
    let b2 = Tensor::<f64>::randn(&[4], 0.5, &mut r);
    let x = Tensor::<f64>::randn(&[2, 4, 3, 3], 1.0, &mut r);
    let rep = finite_diff_check(
        |g, x| {
            let p = g.global_avg_pool(x)?;
            let p = g.reshape(p, &[2, 4])?;
            let (w1, b1, w2, b2) = (g.leaf_ref(&w1, false), g.leaf_ref(&b1, false), g.leaf_ref(&w2, false), g.leaf_ref(&b2, false));
            let h = g.linear(p, w1, b1)?;
            let h = g.relu(h);
            let o = g.linear(h, w2, b2)?;
            let o = g.sigmoid(o);
            let o = g.reshape(o, &[2, 4, 1, 1])?;
            let y = g.mul_channel(x, o)?;
            let y = g.affine(y, 1.5, 0.25);
            let y = g.mul(y, y)?;
            Ok(g.mean(y))
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn conv_forward_matches_reference(
        n in 1usize..3, cin in 1usize..4, cout in 1usize..4,
        h in 3usize..9, w in 3usize..9, k in prop::sample::select(vec![1usize, 3]),
        stride in 1usize..3, seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let pad = k / 2;
        let x = Tensor::<f64>::randn(&[n, cin, h, w], 1.0, &mut r);
        let wt = Tensor::<f64>::randn(&[cout, cin, k, k], 1.0, &mut r);
        let got = kernels::conv2d(&x, &wt, None, ConvGeometry::new(stride, pad)).unwrap();
        let want = conv_oracle(&x, &wt, None, stride, pad);
        for (a, b) in got.data().iter().zip(want.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0));
        }
    }

    #[test]
    fn concat_then_slice_is_identity(ca in 0usize..5, cb in 0usize..5, h in 1usize..5, seed in 0u64..1000) {
        let mut r = rng(seed);
        let a = Tensor::<f32>::randn(&[2, ca, h, 3], 1.0, &mut r);
        let b = Tensor::<f32>::randn(&[2, cb, h, 3], 1.0, &mut r);
        let c = kernels::concat_channels(&a, &b).unwrap();
        prop_assert_eq!(c.slice_channels(0, ca).unwrap(), a);
        prop_assert_eq!(c.slice_channels(ca, ca + cb).unwrap(), b);
    }

    #[test]
    fn composite_gradients_f64(seed in 0u64..200) {
        let mut r = rng(seed);
        let x = Tensor::<f64>::randn(&[2, 2, 4, 4], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.5, &mut r);
        let dw = Tensor::<f64>::randn(&[3, 1, 3, 3], 0.5, &mut r);
        let gamma = Tensor::<f64>::uniform(&[3], 0.5, 1.5, &mut r);
        let beta = Tensor::<f64>::randn(&[3], 0.2, &mut r);
        let stats = Tensor::<f64>::zeros(&[3]);
        let readout = Tensor::<f64>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut r);
        let rep = finite_diff_check(|g, x| {
            let (wv, dv, gv, bv) = (g.leaf_ref(&w, false), g.leaf_ref(&dw, false), g.leaf_ref(&gamma, false), g.leaf_ref(&beta, false));
            let c = g.conv2d(x, wv, None, 1, 1)?;
            let n = g.batchnorm(c, gv, bv, &stats, &stats, BnMode::Train, 1e-5)?;
            let a = g.relu(n);
            let d = g.depthwise_conv2d(a, dv, 1, 1)?;
            let m = g.abs(d);
            let m = g.sigmoid(m);
            let y = g.mul(a, m)?;
            let rv = g.leaf_ref(&readout, false);
            let y = g.mul(y, rv)?;
            Ok(g.sum(y))
        }, &x, 1e-3).unwrap();
        prop_assert!(rep.max_rel_error < 1e-6, "{:?}", rep);
    }
}
