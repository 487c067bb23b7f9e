//! Finite-difference verification of every primitive in the engine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subdepth_core::diff::{grad_check, Array, Graph, Tensor};
use subdepth_core::Result;

const EPS: f64 = 1e-4;
const TOL: f64 = 1e-3;
const POINTS: usize = 20;

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Random positive weights so that the scalar reduction exercises every
/// output element with a different sensitivity.
fn weighted_sum(g: &mut Graph, y: Tensor, seed: u64) -> Result<Tensor> {
    let shape = g.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_array(&mut rng, &shape, 0.5, 1.5).to_constant(g);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn check_unary<F>(name: &str, shape: &[usize], f: F)
where
    F: Fn(&mut Graph, Tensor) -> Result<Tensor> + Copy,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let mut worst: f64 = 0.0;
    for i in 0..POINTS {
        let point = random_array(&mut rng, shape, 0.2, 2.0);
        let err = grad_check(
            |g, x| {
                let y = f(g, x)?;
                weighted_sum(g, y, i as u64)
            },
            &point,
            EPS,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

/// Binary ops: differentiate with respect to both operands at once by
/// packing them into one point and splitting inside the function.
fn check_binary<F>(name: &str, a_shape: &[usize], b_shape: &[usize], f: F)
where
    F: Fn(&mut Graph, Tensor, Tensor) -> Result<Tensor> + Copy,
{
    let na: usize = a_shape.iter().product();
    let nb: usize = b_shape.iter().product();
    check_unary(name, &[na + nb], |g, x| {
        let a = g.narrow(x, 0, 0, na)?;
        let a = g.reshape(a, a_shape)?;
        let b = g.narrow(x, 0, na, nb)?;
        let b = g.reshape(b, b_shape)?;
        f(g, a, b)
    });
}

#[test]
fn elementwise_binary_ops() {
    check_binary("add", &[2, 3], &[2, 3], |g, a, b| g.add(a, b));
    check_binary("add_broadcast", &[2, 3, 4], &[3, 1], |g, a, b| g.add(a, b));
    check_binary("sub", &[2, 3], &[3], |g, a, b| g.sub(a, b));
    check_binary("mul", &[2, 1, 3], &[4, 1], |g, a, b| g.mul(a, b));
    check_binary("div", &[2, 3], &[2, 3], |g, a, b| g.div(a, b));
    check_binary("div_broadcast", &[2, 3], &[1], |g, a, b| g.div(a, b));
    check_binary("minimum", &[3, 4], &[3, 4], |g, a, b| g.minimum(a, b));
    check_binary("maximum", &[3, 4], &[4], |g, a, b| g.maximum(a, b));
}

#[test]
fn elementwise_unary_ops() {
    let s = [3, 4];
    check_unary("neg", &s, |g, x| g.neg(x));
    check_unary("abs", &s, |g, x| g.abs(x));
    check_unary("log", &s, |g, x| g.log(x));
    check_unary("exp", &s, |g, x| g.exp(x));
    check_unary("sqrt", &s, |g, x| g.sqrt(x));
    check_unary("pow", &s, |g, x| g.pow(x, 2.5));
    check_unary("sigmoid", &s, |g, x| g.sigmoid(x));
    check_unary("elu", &s, |g, x| {
        let y = g.add_scalar(x, -1.1)?;
        g.elu(y)
    });
    check_unary("relu", &s, |g, x| {
        let y = g.add_scalar(x, -1.1)?;
        g.relu(y)
    });
    check_unary("scalar_affine", &s, |g, x| {
        let y = g.mul_scalar(x, -3.0)?;
        g.add_scalar(y, 0.5)
    });
    check_unary("clamp", &s, |g, x| g.clamp(x, 0.7, 1.5));
}

#[test]
fn reductions_and_reshapes() {
    check_unary("sum", &[5], |g, x| g.sum(x));
    check_unary("mean", &[2, 3], |g, x| {
        let m = g.mean(x)?;
        g.mul(m, m)
    });
    check_unary("sum_axis", &[2, 3, 4], |g, x| g.sum_axis(x, 1));
    check_unary("mean_axis", &[2, 3, 4], |g, x| g.mean_axis(x, 2));
    check_unary("reshape", &[2, 6], |g, x| g.reshape(x, &[3, 4]));
    check_unary("broadcast_to", &[3, 1], |g, x| g.broadcast_to(x, &[2, 3, 4]));
    check_unary("concat", &[2, 3, 2], |g, x| {
        let y = g.exp(x)?;
        g.concat(&[x, y, x], 1)
    });
    check_unary("narrow", &[2, 5, 2], |g, x| g.narrow(x, 1, 1, 3));
}

#[test]
fn convolution_and_resampling() {
    check_binary("conv2d_stride2", &[2, 3, 6, 5], &[4, 3, 3, 3], |g, x, w| g.conv2d(x, w, None, 2, 1));
    check_unary("conv2d_bias", &[4 + 2 * 3 * 9 + 2], |g, p| {
        let x = g.narrow(p, 0, 0, 4)?;
        let x = g.reshape(x, &[1, 1, 2, 2])?;
        let w = g.narrow(p, 0, 4, 18)?;
        let w = g.reshape(w, &[2, 1, 3, 3])?;
        let b = g.narrow(p, 0, 22, 2)?;
        g.conv2d(x, w, Some(b), 1, 1)
    });
    check_binary("conv2d_1x1", &[2, 3, 2, 3], &[2, 3, 1, 1], |g, x, w| g.conv2d(x, w, None, 1, 0));
    check_unary("upsample_nearest", &[1, 2, 2, 3], |g, x| g.upsample_nearest(x, 2));
    check_unary("resize_bilinear", &[1, 2, 3, 4], |g, x| g.resize_bilinear(x, 6, 8));
    check_unary("avg_pool3x3", &[1, 2, 4, 5], |g, x| g.avg_pool3x3(x));
    check_unary("grad_x", &[1, 2, 3, 4], |g, x| g.grad_x(x));
    check_unary("grad_y", &[1, 2, 3, 4], |g, x| g.grad_y(x));
    check_binary("batch_matmul", &[2, 3, 4], &[2, 4, 2], |g, a, b| g.batch_matmul(a, b));
    check_unary("axis_angle_to_rotation", &[2, 3], |g, x| g.axis_angle_to_rotation(x));
    check_unary("axis_angle_small", &[2, 3], |g, x| {
        let s = g.mul_scalar(x, 0.01)?;
        g.axis_angle_to_rotation(s)
    });
}

#[test]
fn bilinear_sample_both_inputs() {
    // coordinates in [0.2, 2] on a 4x4 image stay strictly inside; shift by
    // a non-integer offset so no probe sits on a cell boundary.
    check_binary("bilinear_sample", &[1, 2, 4, 4], &[1, 2, 3, 3], |g, img, crd| {
        let c = g.add_scalar(crd, 0.37)?;
        g.bilinear_sample(img, c)
    });
}

#[test]
fn trivial_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xa = random_array(&mut rng, &[3, 4], -2.0, 2.0);
    let mut g = Graph::new();
    let x = xa.to_constant(&mut g);
    let z = g.zeros_like(x);
    let o = g.ones_like(x);
    let s = g.add(x, z).unwrap();
    let m = g.mul(x, o).unwrap();
    assert_eq!(g.value(s), xa.data.as_slice());
    assert_eq!(g.value(m), xa.data.as_slice());
    let e = g.exp(x).unwrap();
    let l = g.log(e).unwrap();
    for (a, b) in g.value(l).iter().zip(&xa.data) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn analytic_gradients() {
    let mut g = Graph::new();
    let x = g.param(vec![0.3, -1.0, 2.0, 5.0], &[2, 2]).unwrap();
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[1.0; 4]);

    let mut g = Graph::new();
    let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let mut g = Graph::new();
    let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
    let y = g.exp(x).unwrap();
    assert!(g.backward(y).is_err());
}

#[test]
fn grad_check_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = random_array(&mut rng, &[3, 3], -1.0, 1.0);
    let err = grad_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            g.sum(sq)
        },
        &p,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-5, "{err:e}");

    let p = Array::new(&[4], vec![0.5, -0.3, 1.2, -2.0]).unwrap();
    let err = grad_check(
        |g, x| {
            let a = g.abs(x)?;
            g.sum(a)
        },
        &p,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");

    let err = grad_check(|g, _x| Ok(g.scalar(4.2)), &p, 1e-4).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_reports_nan_probe() {
    // exp(1000 x) overflows just above x = 0.70978, so exp - exp turns into
    // inf - inf = NaN on the upper probe of the second coordinate only.
    let p = Array::new(&[2], vec![0.1, 0.70975]).unwrap();
    let err = grad_check(
        |g, x| {
            let e = g.mul_scalar(x, 1000.0)?;
            let e = g.exp(e)?;
            let d = g.sub(e, e)?;
            g.sum(d)
        },
        &p,
        1e-4,
    )
    .unwrap_err();
    assert!(err.to_string().contains("coordinate 1"), "{err}");
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xa = random_array(&mut rng, &[1, 2, 4, 4], 0.2, 2.0);
    let f = |g: &mut Graph, x: Tensor| -> Result<Tensor> {
        let p = g.avg_pool3x3(x)?;
        let e = g.exp(p)?;
        g.mean(e)
    };
    let h = |g: &mut Graph, x: Tensor| -> Result<Tensor> {
        let l = g.log(x)?;
        let q = g.mul(l, x)?;
        g.sum(q)
    };
    let (a, b) = (0.7, -2.3);
    let grad_of = |which: u8| -> Vec<f64> {
        let mut g = Graph::new();
        let x = xa.to_param(&mut g);
        let root = match which {
            0 => f(&mut g, x).unwrap(),
            1 => h(&mut g, x).unwrap(),
            _ => {
                let fv = f(&mut g, x).unwrap();
                let hv = h(&mut g, x).unwrap();
                let fa = g.mul_scalar(fv, a).unwrap();
                let hb = g.mul_scalar(hv, b).unwrap();
                g.add(fa, hb).unwrap()
            }
        };
        g.backward(root).unwrap().get(x).unwrap().to_vec()
    };
    let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gf.len() {
        assert!((gc[i] - (a * gf[i] + b * gh[i])).abs() < 1e-6);
    }
}

#[test]
fn replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xa = random_array(&mut rng, &[2, 3, 6, 6], 0.2, 2.0);
    let wa = random_array(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let run = || {
        let mut g = Graph::new();
        let x = xa.to_param(&mut g);
        let w = wa.to_param(&mut g);
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let y = g.elu(y).unwrap();
        let s = g.mean(y).unwrap();
        let grads = g.backward(s).unwrap();
        (g.item(s).to_bits(), grads.get(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
    let d = g.detach(x);
    let p = g.mul(x, d).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    // d(x * stopgrad(x))/dx = x
    assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
    assert!(grads.get(d).is_none());
}
