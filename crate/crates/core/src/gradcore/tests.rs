use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::regularizer::{smoothed_relu_deriv, smoothed_relu_second};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    num / den.max(1e-300)
}

/// Central differences of `f` at `x`, one coordinate at a time.
fn fd_grad(x: &Tensor, h: f64, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.clone();
            let mut m = x.clone();
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// `<J^T v, u>` from the tape against `<v, J u>` from a hand-written JVP.
fn dot_test(
    x: &Tensor,
    u: &Tensor,
    forward: impl for<'t> Fn(Var<'t>) -> Var<'t>,
    jvp: impl Fn(&Tensor, &Tensor) -> Tensor,
    rng: &mut ChaCha8Rng,
) {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = forward(xv);
    let v = random(&y.shape(), rng);
    let grads = tape.backward_with_seed(y, v.clone()).unwrap();
    let lhs = grads.wrt(xv).dot(u).unwrap();
    let rhs = v.dot(&jvp(x, u)).unwrap();
    assert!(rel_err(lhs, rhs) < 1e-10, "dot test: {lhs} vs {rhs}");
}

#[test]
fn square_at_three_has_slope_six() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = x.mul(x).unwrap();
    assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 6.0);
}

#[test]
fn identity_kernel_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input = random(&[1, 5, 6], &mut rng);
    let tape = Tape::new();
    let xv = tape.constant(input.clone());
    let k = tape.leaf(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let out = xv.conv2d(k).unwrap();
    assert_eq!(out.value().data(), input.data());
    let g = tape.backward(out.sum()).unwrap();
    assert!((g.wrt(k).item() - input.sum()).abs() < 1e-14);
}

#[test]
fn constant_and_identity_gradients() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.5));
    let c = tape.constant(Tensor::scalar(4.0));
    let y = c.mul_const(&Tensor::scalar(1.0)).unwrap().add(x.scale(0.0)).unwrap();
    assert_eq!(tape.backward(y).unwrap().wrt(x).item(), 0.0);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(-1.25));
    let g = tape.backward(x).unwrap();
    assert_eq!(g.wrt(x).item(), 1.0);
}

#[test]
fn unused_leaf_has_zero_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[3], 1.0));
    let z = tape.leaf(Tensor::full(&[3], 2.0));
    let g = tape.backward(x.sum()).unwrap();
    assert_eq!(g.wrt(z).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn reused_nodes_sum_their_adjoints() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1.5, -2.0]).unwrap());
    // f = sum(x + x + 3x) = 5 sum(x)
    let y = x.add(x).unwrap().add(x.scale(3.0)).unwrap().sum();
    assert_eq!(tape.backward(y).unwrap().wrt(x).data(), &[5.0, 5.0]);
}

#[test]
fn non_scalar_backward_is_rejected() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::full(&[2, 2], 1.0));
    assert!(matches!(tape.backward(x), Err(GradError::NonScalar(s)) if s == vec![2, 2]));
}

#[test]
fn zero_denominator_is_rejected() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::full(&[3], 1.0));
    let b = tape.leaf(Tensor::new(vec![3], vec![1.0, 0.0, 2.0]).unwrap());
    assert!(matches!(a.div(b), Err(GradError::ZeroDivision { index: 1 })));
}

#[test]
fn shape_mismatch_is_rejected() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::full(&[3], 1.0));
    let b = tape.leaf(Tensor::full(&[4], 1.0));
    assert!(matches!(a.add(b), Err(GradError::Shape(_))));
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (c, o, k) in [(1, 3, 3), (4, 2, 5), (2, 2, 1)] {
        let x = random(&[c, 7, 6], &mut rng);
        let w = random(&[o, c, k, k], &mut rng);
        let y = random(&[o, 7, 6], &mut rng);
        let lhs = conv2d(&x, &w).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv2d_transpose(&y, &w).unwrap()).unwrap();
        assert!(rel_err(lhs, rhs) < 1e-12);
        let kg = conv2d_kernel_grad(&x, &y, &[o, c, k, k]).unwrap();
        assert!(rel_err(lhs, kg.dot(&w).unwrap()) < 1e-12);
    }
}

#[test]
fn rot90_turns_counterclockwise() {
    let t = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    // [[1,2],[3,4]] -> [[2,4],[1,3]]
    assert_eq!(rot90(&t, 1).unwrap().data(), &[2.0, 4.0, 1.0, 3.0]);
    assert_eq!(rot90(&t, 4).unwrap().data(), t.data());
    assert_eq!(rot90(&rot90(&t, 3).unwrap(), 1).unwrap().data(), t.data());
    assert_eq!(rot90(&t, -1).unwrap().data(), rot90(&t, 3).unwrap().data());
}

struct Dense {
    rows: usize,
    cols: usize,
    m: Vec<f64>,
}

impl LinearOperator for Dense {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.cols]
    }
    fn output_shape(&self) -> Vec<usize> {
        vec![self.rows]
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..self.cols).map(|c| self.m[r * self.cols + c] * x[c]).sum();
        }
    }
    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = (0..self.rows).map(|r| self.m[r * self.cols + c] * y[r]).sum();
        }
    }
}

#[test]
fn dot_tests_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [2, 4, 3];
    let x = random(&shape, &mut rng);
    let u = random(&shape, &mut rng);
    let c = random(&shape, &mut rng).map(|v| v + 3.0);

    dot_test(&x, &u, |v| v.scale(-1.7), |_, u| u.map(|a| -1.7 * a), &mut rng);
    dot_test(&x, &u, |v| v.neg(), |_, u| u.map(|a| -a), &mut rng);
    dot_test(&x, &u, |v| v.add(v).unwrap(), |_, u| u.map(|a| 2.0 * a), &mut rng);
    dot_test(&x, &u, |v| v.sub(v.scale(3.0)).unwrap(), |_, u| u.map(|a| -2.0 * a), &mut rng);
    let cc = c.clone();
    dot_test(&x, &u, move |v| v.add_const(&cc).unwrap(), |_, u| u.clone(), &mut rng);
    let cc = c.clone();
    dot_test(&x, &u, move |v| v.sub_const(&cc).unwrap(), |_, u| u.clone(), &mut rng);
    let cc = c.clone();
    let cj = c.clone();
    dot_test(&x, &u, move |v| v.mul_const(&cc).unwrap(), move |_, u| u.zip_map(&cj, |a, b| a * b).unwrap(), &mut rng);
    dot_test(&x, &u, |v| v.mul(v).unwrap(), |x, u| x.zip_map(u, |a, b| 2.0 * a * b).unwrap(), &mut rng);
    dot_test(&x, &u, |v| v.exp(), |x, u| x.zip_map(u, |a, b| a.exp() * b).unwrap(), &mut rng);

    // quotient rule through both operands
    let xs = x.map(|v| v + 2.5);
    dot_test(
        &xs,
        &u,
        |v| v.exp().div(v).unwrap(),
        |x, u| x.zip_map(u, |a, b| (a.exp() / a - a.exp() / (a * a)) * b).unwrap(),
        &mut rng,
    );

    let delta = 0.3;
    dot_test(
        &x,
        &u,
        move |v| v.smoothed_relu(delta),
        move |x, u| x.zip_map(u, |a, b| smoothed_relu_deriv(a, delta) * b).unwrap(),
        &mut rng,
    );
    dot_test(
        &x,
        &u,
        move |v| v.smoothed_relu_grad(delta),
        move |x, u| x.zip_map(u, |a, b| smoothed_relu_second(a, delta) * b).unwrap(),
        &mut rng,
    );
    dot_test(&x, &u, |v| v.clip_min(0.1), |x, u| x.zip_map(u, |a, b| if a > 0.1 { b } else { 0.0 }).unwrap(), &mut rng);
}

#[test]
fn dot_tests_reductions_and_structure() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[3, 5, 5], &mut rng);
    let u = random(&[3, 5, 5], &mut rng);
    let w = random(&[3, 5, 5], &mut rng);

    dot_test(&x, &u, |v| v.sum(), |_, u| Tensor::scalar(u.sum()), &mut rng);
    dot_test(&x, &u, |v| v.sum_squares(), |x, u| Tensor::scalar(2.0 * x.dot(u).unwrap()), &mut rng);
    let wc = w.clone();
    let wj = w.clone();
    dot_test(
        &x,
        &u,
        move |v| {
            let c = v.tape().constant(wc.clone());
            v.dot(c).unwrap()
        },
        move |_, u| Tensor::scalar(wj.dot(u).unwrap()),
        &mut rng,
    );
    for k in [1, 2, 3, -1] {
        dot_test(&x, &u, move |v| v.rot90(k).unwrap(), move |_, u| rot90(u, k).unwrap(), &mut rng);
    }
    dot_test(
        &x,
        &u,
        |v| v.channel_norm().unwrap(),
        |x, u| {
            let plane = 25;
            let mut out = vec![0.0; plane];
            for p in 0..plane {
                let n: f64 = (0..3).map(|c| x.data()[c * plane + p].powi(2)).sum::<f64>().sqrt();
                out[p] = (0..3).map(|c| x.data()[c * plane + p] * u.data()[c * plane + p]).sum::<f64>() / n;
            }
            Tensor::new(vec![1, 5, 5], out).unwrap()
        },
        &mut rng,
    );
    let p = random(&[1, 5, 5], &mut rng);
    let up = random(&[1, 5, 5], &mut rng);
    dot_test(
        &p,
        &up,
        |v| v.broadcast_channels(4).unwrap(),
        |_, u| Tensor::new(vec![4, 5, 5], u.data().repeat(4)).unwrap(),
        &mut rng,
    );

    // scalar times tensor, differentiated in the scalar
    let s = Tensor::scalar(0.7);
    let ds = Tensor::scalar(-1.3);
    let xc = x.clone();
    let xj = x.clone();
    dot_test(
        &s,
        &ds,
        move |v| {
            let t = v.tape().constant(xc.clone());
            v.scalar_mul(t).unwrap()
        },
        move |_, u| xj.map(|a| a * u.item()),
        &mut rng,
    );
}

#[test]
fn dot_tests_convolutions_and_matvec() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 6, 5], &mut rng);
    let u = random(&[2, 6, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let wu = random(&[3, 2, 3, 3], &mut rng);

    let (wc, wj) = (w.clone(), w.clone());
    dot_test(
        &x,
        &u,
        move |v| {
            let k = v.tape().constant(wc.clone());
            v.conv2d(k).unwrap()
        },
        move |_, u| conv2d(u, &wj).unwrap(),
        &mut rng,
    );
    let (xc, xj) = (x.clone(), x.clone());
    dot_test(
        &w,
        &wu,
        move |k| {
            let input = k.tape().constant(xc.clone());
            input.conv2d(k).unwrap()
        },
        move |_, du| conv2d(&xj, du).unwrap(),
        &mut rng,
    );
    let y = random(&[3, 6, 5], &mut rng);
    let uy = random(&[3, 6, 5], &mut rng);
    let (wc, wj) = (w.clone(), w.clone());
    dot_test(
        &y,
        &uy,
        move |v| {
            let k = v.tape().constant(wc.clone());
            v.conv2d_transpose(k).unwrap()
        },
        move |_, u| conv2d_transpose(u, &wj).unwrap(),
        &mut rng,
    );
    let (yc, yj) = (y.clone(), y.clone());
    dot_test(
        &w,
        &wu,
        move |k| {
            let input = k.tape().constant(yc.clone());
            input.conv2d_transpose(k).unwrap()
        },
        move |_, du| conv2d_transpose(&yj, du).unwrap(),
        &mut rng,
    );

    let dense = Dense { rows: 4, cols: 6, m: (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let op: Arc<dyn LinearOperator> = Arc::new(dense);
    let xv = random(&[6], &mut rng);
    let uv = random(&[6], &mut rng);
    let (o1, o2) = (Arc::clone(&op), Arc::clone(&op));
    dot_test(
        &xv,
        &uv,
        move |v| v.matvec(&o1, false).unwrap(),
        move |_, u| {
            let mut out = vec![0.0; 4];
            o2.apply(u.data(), &mut out);
            Tensor::new(vec![4], out).unwrap()
        },
        &mut rng,
    );
    let yv = random(&[4], &mut rng);
    let uy = random(&[4], &mut rng);
    let (o1, o2) = (Arc::clone(&op), Arc::clone(&op));
    dot_test(
        &yv,
        &uy,
        move |v| v.matvec(&o1, true).unwrap(),
        move |_, u| {
            let mut out = vec![0.0; 6];
            o2.apply_adjoint(u.data(), &mut out);
            Tensor::new(vec![6], out).unwrap()
        },
        &mut rng,
    );
    let tape = Tape::new();
    let bad = tape.leaf(Tensor::zeros(&[5]));
    assert!(bad.matvec(&op, false).is_err());
}

fn three_layer_loss<'t>(x: Var<'t>, kernels: &[Var<'t>]) -> Var<'t> {
    let h1 = x.conv2d(kernels[0]).unwrap().smoothed_relu(0.05);
    let h2 = h1.conv2d(kernels[1]).unwrap().smoothed_relu(0.05);
    let h3 = h2.conv2d(kernels[2]).unwrap();
    h3.channel_norm().unwrap().sum()
}

#[test]
fn three_layer_net_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[1, 6, 6], &mut rng).map(|v| v + 0.5);
    let ks = vec![random(&[3, 1, 3, 3], &mut rng), random(&[3, 3, 3, 3], &mut rng), random(&[2, 3, 3, 3], &mut rng)];
    let value = |x: &Tensor, ks: &[Tensor]| {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv: Vec<_> = ks.iter().map(|k| tape.constant(k.clone())).collect();
        three_layer_loss(xv, &kv).value().item()
    };
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let kv: Vec<_> = ks.iter().map(|k| tape.leaf(k.clone())).collect();
    let g = tape.backward(three_layer_loss(xv, &kv)).unwrap();

    let fd_x = fd_grad(&x, 1e-5, |xp| value(xp, &ks));
    assert!(vec_rel_err(g.wrt(xv).data(), &fd_x) < 1e-6);
    for l in 0..3 {
        let fd = fd_grad(&ks[l], 1e-5, |kp| {
            let mut ks2 = ks.clone();
            ks2[l] = kp.clone();
            value(&x, &ks2)
        });
        let err = vec_rel_err(g.wrt(kv[l]).data(), &fd);
        assert!(err < 1e-6, "layer {l}: rel err {err}");
    }
}

#[test]
fn double_backward_through_conv_transpose() {
    // f(k) = || conv_t(conv(x, k), k) ||^2 exercises the recorded transpose.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[1, 5, 5], &mut rng);
    let k = random(&[2, 1, 3, 3], &mut rng);
    let value = |k: &Tensor| {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let kv = tape.constant(k.clone());
        xv.conv2d(kv).unwrap().smoothed_relu_grad(0.4).mul(xv.conv2d(kv).unwrap()).unwrap()
            .conv2d_transpose(kv).unwrap().sum_squares().value().item()
    };
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.leaf(k.clone());
    let f = xv.conv2d(kv).unwrap().smoothed_relu_grad(0.4).mul(xv.conv2d(kv).unwrap()).unwrap()
        .conv2d_transpose(kv).unwrap().sum_squares();
    let g = tape.backward(f).unwrap();
    let fd = fd_grad(&k, 1e-6, value);
    assert!(vec_rel_err(g.wrt(kv).data(), &fd) < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_composites_match_finite_differences(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[2, 4, 4], &mut rng);
        let w = random(&[2, 2, 3, 3], &mut rng);
        let c = random(&[2, 4, 4], &mut rng).map(|v| v.abs() + 1.0);
        let build = |t: &Tape, xv: Var<'_>| -> f64 {
            let _ = t;
            let a = xv.conv2d(t.constant(w.clone())).unwrap().smoothed_relu(0.2);
            let b = a.mul(xv).unwrap().add_const(&c).unwrap();
            let d = xv.exp().div(b).unwrap();
            d.rot90(1).unwrap().sum_squares().value().item()
        };
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let a = xv.conv2d(tape.constant(w.clone())).unwrap().smoothed_relu(0.2);
        let b = a.mul(xv).unwrap().add_const(&c).unwrap();
        prop_assume!(b.value().data().iter().all(|v| v.abs() > 0.1));
        let d = xv.exp().div(b).unwrap();
        let f = d.rot90(1).unwrap().sum_squares();
        let g = tape.backward(f).unwrap();
        let fd = fd_grad(&x, 1e-5, |xp| {
            let t = Tape::new();
            build(&t, t.constant(xp.clone()))
        });
        prop_assert!(vec_rel_err(g.wrt(xv).data(), &fd) < 1e-6);
    }

    #[test]
    fn accumulation_order_does_not_matter(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[8], &mut rng);
        let cs: Vec<Tensor> = (0..5).map(|_| random(&[8], &mut rng)).collect();
        let grad = |order: &[usize]| {
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let mut acc: Option<Var> = None;
            for &i in order {
                let term = xv.mul_const(&cs[i]).unwrap().exp().sum();
                acc = Some(match acc { Some(a) => a.add(term).unwrap(), None => term });
            }
            tape.backward(acc.unwrap()).unwrap().wrt(xv)
        };
        let g1 = grad(&[0, 1, 2, 3, 4]);
        let g2 = grad(&[4, 2, 0, 3, 1]);
        for (a, b) in g1.data().iter().zip(g2.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
