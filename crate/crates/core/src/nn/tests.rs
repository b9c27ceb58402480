//! Engine correctness tests: brute-force convolution oracles and
//! finite-difference checks of first- and second-order gradients.

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::conv::{self, ConvGeom};
use super::layers::{BatchNorm2d, Conv2d, Linear, ParamBind};
use super::tape::{Id, Tape};

fn randn(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Direct quadruple-loop convolution, the oracle for the im2col path.
fn conv_naive(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let xs = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let ws = w.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (b, c, h, wd) = xs.dim();
    let (o, _, kh, kw) = ws.dim();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Array4::<f64>::zeros((b, o, oh, ow));
    for bi in 0..b {
        for oi in 0..o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (i * stride + ki) as isize - pad as isize;
                                let ix = (j * stride + kj) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += xs[[bi, ci, iy as usize, ix as usize]]
                                        * ws[[oi, ci, ki, kj]];
                                }
                            }
                        }
                    }
                    y[[bi, oi, i, j]] = acc;
                }
            }
        }
    }
    y.into_dyn()
}

#[test]
fn conv2d_matches_naive_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    for &(c, o, h, k, stride, pad) in &[
        (1usize, 3usize, 8usize, 3usize, 1usize, 1usize),
        (2, 4, 8, 3, 2, 1),
        (3, 2, 7, 3, 1, 0),
        (2, 5, 9, 5, 2, 2),
        (4, 1, 6, 1, 1, 0),
    ] {
        let x = randn(&[2, c, h, h], &mut rng);
        let w = randn(&[o, c, k, k], &mut rng);
        let geom = ConvGeom::infer(x.shape(), w.shape(), stride, pad);
        let got = conv::conv2d(&x, &w, &geom);
        let want = conv_naive(&x, &w, stride, pad);
        let diff = (&got - &want).mapv(f64::abs).sum();
        assert!(diff < 1e-9, "conv mismatch for c{c} o{o} h{h} k{k} s{stride} p{pad}: {diff}");
    }
}

#[test]
fn conv_adjoints_satisfy_inner_product_identity() {
    // <dy, conv(x,w)> == <conv_input_grad(dy,w), x> == <conv_weight_grad(x,dy), w>
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 5), (2, 2, 5)] {
        let x = randn(&[3, 2, 8, 8], &mut rng);
        let w = randn(&[4, 2, k, k], &mut rng);
        let geom = ConvGeom::infer(x.shape(), w.shape(), stride, pad);
        let y = conv::conv2d(&x, &w, &geom);
        let dy = randn(y.shape(), &mut rng);
        let a = (&dy * &y).sum();
        let dx = conv::conv2d_input_grad(&dy, &w, &geom);
        let b = (&dx * &x).sum();
        let dw = conv::conv2d_weight_grad(&x, &dy, &geom);
        let c = (&dw * &w).sum();
        assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "input adjoint: {a} vs {b}");
        assert!((a - c).abs() < 1e-9 * a.abs().max(1.0), "weight adjoint: {a} vs {c}");
    }
}

#[test]
fn par_matmul_matches_dot() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let a = randn(&[300, 17], &mut rng);
    let b = randn(&[17, 23], &mut rng);
    let a2 = a.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let b2 = b.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let got = conv::par_matmul(&a2, &b2);
    let want: Array2<f64> = a2.dot(&b2);
    assert_eq!(got, want, "chunked matmul must be bit-identical to plain dot per row");
}

/// Central-difference gradient of `f` at `params`.
fn fd_grad(
    params: &[ArrayD<f64>],
    f: &dyn Fn(&[ArrayD<f64>]) -> f64,
    h: f64,
) -> Vec<ArrayD<f64>> {
    let mut grads = Vec::new();
    for pi in 0..params.len() {
        let mut g = ArrayD::zeros(params[pi].raw_dim());
        for idx in 0..params[pi].len() {
            let mut plus = params.to_vec();
            let mut minus = params.to_vec();
            plus[pi].as_slice_mut().unwrap()[idx] += h;
            minus[pi].as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

fn rel_err(got: &[ArrayD<f64>], want: &[ArrayD<f64>]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (g, w) in got.iter().zip(want) {
        num += (g - w).mapv(|v| v * v).sum();
        den += w.mapv(|v| v * v).sum();
    }
    (num / den.max(1e-30)).sqrt()
}

#[test]
fn fd_elementwise_and_reduction_ops() {
    let mut rng = ChaCha12Rng::seed_from_u64(10);
    let a0 = randn(&[3, 4], &mut rng).mapv(|v| v.abs() + 0.5);
    let b0 = randn(&[1, 4], &mut rng).mapv(|v| v.abs() + 0.5);
    let params = vec![a0, b0];
    let build = |p: &[ArrayD<f64>], t: &mut Tape<f64>| -> (Id, Vec<Id>) {
        let a = t.var(p[0].clone());
        let b = t.var(p[1].clone());
        let s = t.add(a, b); // broadcast
        let d = t.sub(s, a);
        let m = t.mul(d, b);
        let q = t.div(m, a);
        let sq = t.square(q);
        let r = t.sqrt(sq);
        let l = t.ln(r);
        let e = t.exp(l);
        let c = t.clamp_min(e, 0.8);
        let lr = t.leaky_relu(c, 0.2);
        let sg = t.sigmoid(lr);
        let sa = t.sum_axes(sg, &[0]);
        let n = t.neg(sa);
        let sc = t.scale(n, -1.3);
        let asb = t.add_scalar(sc, 0.1);
        let y = t.mean_all(asb);
        (y, vec![a, b])
    };
    let f = |p: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::new();
        let (y, _) = build(p, &mut t);
        t.scalar(y)
    };
    let analytic = {
        let mut t = Tape::new();
        let (y, leaves) = build(&params, &mut t);
        let gs = t.grad(y, &leaves);
        gs.into_iter().map(|g| t.value(g.unwrap()).clone()).collect::<Vec<_>>()
    };
    let fd = fd_grad(&params, &f, 1e-6);
    let e = rel_err(&analytic, &fd);
    assert!(e < 1e-7, "elementwise fd rel err {e}");
}

#[test]
fn fd_conv_net_with_batchnorm() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let x0 = randn(&[4, 2, 6, 6], &mut rng);

    let conv1 = Conv2d::<f64>::new(2, 3, 3, 1, 1, &mut rng);
    let mut bn = BatchNorm2d::<f64>::new(3);
    let lin = Linear::<f64>::new(3 * 3 * 3, 1, &mut rng);
    // Perturb BN affine away from identity so its gradients are generic.
    bn.gamma = randn(&[3], &mut rng).mapv(|v| 1.0 + 0.3 * v);
    bn.beta = randn(&[3], &mut rng).mapv(|v| 0.2 * v);

    let params: Vec<ArrayD<f64>> = vec![
        conv1.w.clone(),
        conv1.b.clone(),
        bn.gamma.clone(),
        bn.beta.clone(),
        lin.w.clone(),
        lin.b.clone(),
        x0.clone(),
    ];

    let f = |p: &[ArrayD<f64>]| -> f64 {
        let c1 = Conv2d::<f64> { w: p[0].clone(), b: p[1].clone(), stride: 1, pad: 1 };
        let mut b1 = BatchNorm2d::<f64>::new(3);
        b1.gamma = p[2].clone();
        b1.beta = p[3].clone();
        let l1 = Linear::<f64> { w: p[4].clone(), b: p[5].clone() };
        let mut t = Tape::new();
        let mut bind = ParamBind::new();
        let x = t.var(p[6].clone());
        let h1 = c1.forward(&mut t, x, &mut bind);
        let h2 = b1.forward_train(&mut t, h1, &mut bind);
        let h3 = t.leaky_relu(h2, 0.2);
        let h4 = t.max_pool2(h3);
        let h5 = t.reshape(h4, &[4, 3 * 3 * 3]);
        let h6 = l1.forward(&mut t, h5, &mut bind);
        let sq = t.square(h6);
        let y = t.mean_all(sq);
        t.scalar(y)
    };

    let analytic = {
        let mut t = Tape::new();
        let mut bind = ParamBind::new();
        let x = t.var(x0.clone());
        let h1 = conv1.forward(&mut t, x, &mut bind);
        let h2 = bn.forward_train(&mut t, h1, &mut bind);
        let h3 = t.leaky_relu(h2, 0.2);
        let h4 = t.max_pool2(h3);
        let h5 = t.reshape(h4, &[4, 3 * 3 * 3]);
        let h6 = lin.forward(&mut t, h5, &mut bind);
        let sq = t.square(h6);
        let y = t.mean_all(sq);
        let mut wrt = bind.ids.clone();
        wrt.push(x);
        let gs = t.grad(y, &wrt);
        gs.into_iter().map(|g| t.value(g.unwrap()).clone()).collect::<Vec<_>>()
    };

    let fd = fd_grad(&params, &f, 1e-5);
    let e = rel_err(&analytic, &fd);
    assert!(e < 1e-6, "conv-bn net fd rel err {e}");
}

#[test]
fn fd_upsample_and_matmul_path() {
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let x0 = randn(&[2, 3, 4, 4], &mut rng);
    let w0 = randn(&[2, 3, 3, 3], &mut rng);
    let params = vec![x0, w0];
    let f = |p: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::new();
        let x = t.var(p[0].clone());
        let w = t.var(p[1].clone());
        let up = t.upsample_nearest2(x);
        let y = t.conv2d(up, w, 2, 1);
        let s = t.sigmoid(y);
        let m = t.mean_all(s);
        t.scalar(m)
    };
    let analytic = {
        let mut t = Tape::new();
        let x = t.var(params[0].clone());
        let w = t.var(params[1].clone());
        let up = t.upsample_nearest2(x);
        let y = t.conv2d(up, w, 2, 1);
        let s = t.sigmoid(y);
        let m = t.mean_all(s);
        let gs = t.grad(m, &[x, w]);
        gs.into_iter().map(|g| t.value(g.unwrap()).clone()).collect::<Vec<_>>()
    };
    let fd = fd_grad(&params, &f, 1e-6);
    let e = rel_err(&analytic, &fd);
    assert!(e < 1e-7, "upsample/conv fd rel err {e}");
}

/// The objective the WGAN penalty needs: P = mean_i (|row_i of
/// d(sum D)/dx| - 1)^2, differentiated with respect to the critic's
/// parameters. The analytic path exercises grad-of-grad, the reference
/// is finite differences over a first-order-only computation.
#[test]
fn fd_double_backprop_gradient_penalty() {
    let mut rng = ChaCha12Rng::seed_from_u64(13);
    let x0 = randn(&[3, 1, 4, 4], &mut rng);
    let conv1 = Conv2d::<f64>::new(1, 2, 3, 2, 1, &mut rng);
    let mut bn = BatchNorm2d::<f64>::new(2);
    bn.gamma = randn(&[2], &mut rng).mapv(|v| 1.0 + 0.2 * v);
    bn.beta = randn(&[2], &mut rng).mapv(|v| 0.1 * v);
    let lin = Linear::<f64>::new(2 * 2 * 2, 1, &mut rng);

    let params = vec![
        conv1.w.clone(),
        conv1.b.clone(),
        bn.gamma.clone(),
        bn.beta.clone(),
        lin.w.clone(),
        lin.b.clone(),
    ];

    // Builds the critic graph and returns the per-sample input-gradient
    // penalty as a node id.
    fn penalty_graph(
        t: &mut Tape<f64>,
        p: &[ArrayD<f64>],
        x0: &ArrayD<f64>,
        bind: &mut ParamBind,
    ) -> Id {
        let c1 = Conv2d::<f64> { w: p[0].clone(), b: p[1].clone(), stride: 2, pad: 1 };
        let mut b1 = BatchNorm2d::<f64>::new(2);
        b1.gamma = p[2].clone();
        b1.beta = p[3].clone();
        let l1 = Linear::<f64> { w: p[4].clone(), b: p[5].clone() };
        let x = t.var(x0.clone());
        let h1 = c1.forward(t, x, bind);
        let h2 = b1.forward_train(t, h1, bind);
        let h3 = t.leaky_relu(h2, 0.2);
        let h4 = t.reshape(h3, &[3, 2 * 2 * 2]);
        let score = l1.forward(t, h4, bind);
        let ssum = t.sum_all(score);
        let g = t.grad(ssum, &[x])[0].expect("input grad");
        let gsq = t.square(g);
        let pernorm2 = t.sum_axes(gsq, &[1, 2, 3]);
        let eps = t.add_scalar(pernorm2, 1e-24);
        let norm = t.sqrt(eps);
        let dm1 = t.add_scalar(norm, -1.0);
        let sq = t.square(dm1);
        t.mean_all(sq)
    }

    let f = |p: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::new();
        let mut bind = ParamBind::new();
        let pen = penalty_graph(&mut t, p, &x0, &mut bind);
        t.scalar(pen)
    };

    let analytic = {
        let mut t = Tape::new();
        let mut bind = ParamBind::new();
        let pen = penalty_graph(&mut t, &params, &x0, &mut bind);
        let gs = t.grad(pen, &bind.ids);
        gs.into_iter()
            .enumerate()
            .map(|(i, g)| match g {
                Some(id) => t.value(id).clone(),
                None => ArrayD::zeros(params[i].raw_dim()),
            })
            .collect::<Vec<_>>()
    };

    let fd = fd_grad(&params, &f, 1e-5);
    let e = rel_err(&analytic, &fd);
    assert!(e < 1e-6, "gradient-penalty double-backprop fd rel err {e}");
}

#[test]
fn forward_and_grads_are_deterministic() {
    let mut rng = ChaCha12Rng::seed_from_u64(14);
    let x = randn(&[64, 2, 8, 8], &mut rng);
    let w = randn(&[4, 2, 3, 3], &mut rng);
    let run = || {
        let mut t = Tape::new();
        let xi = t.var(x.clone());
        let wi = t.var(w.clone());
        let y = t.conv2d(xi, wi, 2, 1);
        let s = t.sigmoid(y);
        let m = t.mean_all(s);
        let gs = t.grad(m, &[xi, wi]);
        (
            t.scalar(m),
            t.value(gs[0].unwrap()).clone(),
            t.value(gs[1].unwrap()).clone(),
        )
    };
    let (v1, gx1, gw1) = run();
    let (v2, gx2, gw2) = run();
    assert!(v1 == v2 && gx1 == gx2 && gw1 == gw2, "nondeterministic kernels");
}
