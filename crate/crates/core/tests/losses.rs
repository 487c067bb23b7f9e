//! Loss functions checked against scalar reference implementations and
//! their defining properties.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use subdepth_core::diff::{grad_check, Array, Graph, Tensor};
use subdepth_core::losses::*;

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn refl(i: isize, n: usize) -> usize {
    if i < 0 {
        (-i) as usize
    } else if i as usize >= n {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

/// Plain-loop SSIM for a single `[C, H, W]` image pair.
fn ssim_reference(a: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for ch in 0..c {
        let pa = &a[ch * h * w..];
        let pb = &b[ch * h * w..];
        for y in 0..h {
            for x in 0..w {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let i = refl(y as isize + dy, h) * w + refl(x as isize + dx, w);
                        ma += pa[i];
                        mb += pb[i];
                        saa += pa[i] * pa[i];
                        sbb += pb[i] * pb[i];
                        sab += pa[i] * pb[i];
                    }
                }
                let (ma, mb) = (ma / 9.0, mb / 9.0);
                let va = saa / 9.0 - ma * ma;
                let vb = sbb / 9.0 - mb * mb;
                let cov = sab / 9.0 - ma * mb;
                let c1 = 0.01f64.powi(2);
                let c2 = 0.03f64.powi(2);
                let s = (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                out[y * w + x] += s / c as f64;
            }
        }
    }
    out
}

#[test]
fn ssim_matches_reference_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (c, h, w) = (3, 7, 9);
    let a = random_array(&mut rng, &[1, c, h, w], 0.0, 1.0);
    let b = random_array(&mut rng, &[1, c, h, w], 0.0, 1.0);
    let mut g = Graph::new();
    let ta = a.to_constant(&mut g);
    let tb = b.to_constant(&mut g);
    let s = ssim(&mut g, ta, tb).unwrap();
    let reference = ssim_reference(&a.data, &b.data, c, h, w);
    for (x, y) in g.value(s).iter().zip(&reference) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn ssim_checkerboard_inverse_is_negative() {
    let (h, w) = (8, 8);
    let board: Vec<f64> = (0..3 * h * w)
        .map(|i| {
            let p = i % (h * w);
            if (p / w + p % w) % 2 == 0 { 0.95 } else { 0.05 }
        })
        .collect();
    let inv: Vec<f64> = board.iter().map(|v| 1.0 - v).collect();
    let reference = ssim_reference(&board, &inv, 3, h, w);
    let mut g = Graph::new();
    let a = g.constant(board, &[1, 3, h, w]).unwrap();
    let b = g.constant(inv, &[1, 3, h, w]).unwrap();
    let s = ssim(&mut g, a, b).unwrap();
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let v = g.value(s)[y * w + x];
            assert!(v < 0.0, "interior ssim {v} at ({y},{x})");
            assert!((v - reference[y * w + x]).abs() < 1e-12);
        }
    }
}

#[test]
fn photometric_constant_images() {
    let mut g = Graph::new();
    let a = g.full(&[1, 3, 6, 6], 0.6);
    let b = g.full(&[1, 3, 6, 6], 0.4);
    let e = photometric_error(&mut g, a, b, 0.85).unwrap();
    let s = ssim_reference(&[0.6; 108], &[0.4; 108], 3, 6, 6)[0];
    let expected = 0.85 * (1.0 - s) / 2.0 + 0.15 * 0.2;
    for v in g.value(e) {
        assert!((v - expected).abs() < 1e-12);
    }
}

#[test]
fn smoothness_ramp_closed_form() {
    let (h, w) = (6, 10);
    // d(x) = 1 + 0.1 x; mean = 1 + 0.1 * 4.5; normalised x-slope = 0.1/mean
    let disp: Vec<f64> = (0..h * w).map(|i| 1.0 + 0.1 * (i % w) as f64).collect();
    let mut g = Graph::new();
    let d = g.constant(disp, &[1, 1, h, w]).unwrap();
    let flat = g.full(&[1, 3, h, w], 0.5);
    let l = smoothness_loss(&mut g, d, flat).unwrap();
    let expected = 0.1 / 1.45;
    assert!((g.item(l) - expected).abs() < 1e-12, "{} vs {expected}", g.item(l));

    let edge: Vec<f64> = (0..3 * h * w).map(|i| if i % w < w / 2 { 0.0 } else { 1.0 }).collect();
    let e = g.constant(edge, &[1, 3, h, w]).unwrap();
    let l_edge = smoothness_loss(&mut g, d, e).unwrap();
    assert!(g.item(l_edge) < g.item(l));

    let c = g.full(&[1, 1, h, w], 0.3);
    let l0 = smoothness_loss(&mut g, c, flat).unwrap();
    assert_eq!(g.item(l0), 0.0);

    let z = g.full(&[1, 1, h, w], 0.0);
    assert!(smoothness_loss(&mut g, z, flat).is_err());
}

#[test]
fn min_reprojection_picks_smaller_error() {
    let mut g = Graph::new();
    let t = g.full(&[1, 3, 4, 4], 0.5);
    let r1 = g.full(&[1, 3, 4, 4], 0.7);
    let r2 = g.full(&[1, 3, 4, 4], 0.6);
    let s1 = g.full(&[1, 3, 4, 4], 0.0);
    let rep = min_reprojection_with_automask(&mut g, t, &[s1, s1], &[r1, r2], 0.0, None).unwrap();
    assert!(g.value(rep.map).iter().all(|v| (v - 0.1).abs() < 1e-12));
    assert!(rep.mask.data.iter().all(|&m| m == 1.0));

    let perfect = min_reprojection_with_automask(&mut g, t, &[s1, s1], &[t, t], 0.85, None).unwrap();
    assert!(g.value(perfect.map).iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn sde_objective_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let target = random_array(&mut rng, &[2, 3, 8, 8], 0.0, 1.0).to_constant(&mut g);
    let src = random_array(&mut rng, &[2, 3, 8, 8], 0.0, 1.0).to_constant(&mut g);
    let rec = random_array(&mut rng, &[2, 3, 8, 8], 0.0, 1.0).to_constant(&mut g);
    let disp = random_array(&mut rng, &[2, 1, 8, 8], 0.1, 1.0).to_constant(&mut g);

    let rep = min_reprojection_with_automask(&mut g, target, &[src], &[rec], 0.85, None).unwrap();
    let map = g.value(rep.map).to_vec();
    let mask = rep.mask.clone();
    let smooth = smoothness_loss(&mut g, disp, target).unwrap();
    let terms = vec![ScaleTerms { reprojection: rep, smoothness: smooth }];
    let l0 = sde_objective(&mut g, &terms, 0.0).unwrap();
    let l1 = sde_objective(&mut g, &terms, 1e-3).unwrap();

    let mut expected = 0.0;
    for b in 0..2 {
        let (mut s, mut n) = (0.0, 0.0);
        for i in 0..64 {
            if mask.data[b * 64 + i] > 0.0 {
                s += map[b * 64 + i];
                n += 1.0;
            }
        }
        expected += if n > 0.0 { s / n } else { 0.0 } / 2.0;
    }
    assert!((g.item(l0) - expected).abs() < 1e-12);
    assert!((g.item(l1) - g.item(l0) - 1e-3 * g.item(smooth)).abs() < 1e-12);

    // sigma = 1 reproduces the unweighted objective exactly
    let ones = g.full(&[2, 1, 8, 8], 1.0);
    let w1 = photometric_objective(&mut g, &terms, 1e-3, Some(ones)).unwrap();
    assert_eq!(g.item(w1), g.item(l1));
}

#[test]
fn perfect_reconstruction_constant_disparity_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let target = random_array(&mut rng, &[1, 3, 8, 8], 0.0, 1.0).to_constant(&mut g);
    let src = random_array(&mut rng, &[1, 3, 8, 8], 0.0, 1.0).to_constant(&mut g);
    let mut terms = Vec::new();
    for s in 0..4 {
        let n = 8 >> s;
        let disp = g.full(&[1, 1, n.max(2), n.max(2)], 0.4);
        let img = g.full(&[1, 3, n.max(2), n.max(2)], 0.2);
        let rep = min_reprojection_with_automask(&mut g, target, &[src, src], &[target, target], 0.85, None).unwrap();
        let smoothness = smoothness_loss(&mut g, disp, img).unwrap();
        terms.push(ScaleTerms { reprojection: rep, smoothness });
    }
    let l = sde_objective(&mut g, &terms, 1e-3).unwrap();
    assert!(g.item(l).abs() < 1e-12);
}

fn laplace_nll(r: f64, sigma: f64) -> f64 {
    r / sigma + sigma.ln()
}

/// Golden-section search over log sigma.
fn argmin_sigma(r: f64) -> f64 {
    let (mut lo, mut hi) = ((-10.0f64), 5.0f64);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - phi * (hi - lo);
        let b = lo + phi * (hi - lo);
        if laplace_nll(r, a.exp()) < laplace_nll(r, b.exp()) {
            hi = b;
        } else {
            lo = a;
        }
    }
    (0.5 * (lo + hi)).exp()
}

#[test]
fn uncertainty_minimiser_is_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let residual = random_array(&mut rng, &[1, 1, 4, 4], 0.01, 2.0);
    let mut g = Graph::new();
    let r = residual.to_constant(&mut g);
    // gradient of the weighted loss at sigma = argmin is zero per pixel
    let sigma_star: Vec<f64> = residual.data.iter().map(|&r| argmin_sigma(r)).collect();
    for (s, r) in sigma_star.iter().zip(&residual.data) {
        assert!((s - r).abs() / r < 1e-6, "numeric minimiser {s} vs residual {r}");
    }
    let sig = g.param(sigma_star, &[1, 1, 4, 4]).unwrap();
    let l = uncertainty_weight(&mut g, r, sig).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(sig).unwrap().iter().all(|v| v.abs() < 1e-6));

    let at = |s: f64| {
        let mut g = Graph::new();
        let l = g.full(&[1, 1, 2, 2], 0.5);
        let sg = g.full(&[1, 1, 2, 2], s);
        let v = uncertainty_weight(&mut g, l, sg).unwrap();
        g.item(v)
    };
    assert!(at(0.05) > at(0.5));
    assert!(at(5.0) > at(0.5));
    // sigma = 1 is the plain mean
    assert!((at(1.0) - 0.5).abs() < 1e-15);
}

#[test]
fn final_loss_examples_and_additivity() {
    let mut g = Graph::new();
    let r = g.scalar(0.3);
    let d = g.scalar(0.2);
    let (f, b) = final_loss(&mut g, r, d, TaskStats::default(), 0).unwrap();
    assert!((g.item(f) - 0.5).abs() < 1e-15);
    assert!(b.additivity_error() < 1e-9);

    let z = g.scalar(0.0);
    let (f, _) = final_loss(&mut g, z, z, TaskStats::default(), 0).unwrap();
    assert_eq!(g.item(f), 0.0);

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for step in 0..100 {
        let mut g = Graph::new();
        let loss_a = random_array(&mut rng, &[1, 1, 6, 6], 0.0, 1.0).to_constant(&mut g);
        let loss_b = random_array(&mut rng, &[1, 1, 6, 6], 0.0, 1.0).to_constant(&mut g);
        let s_a = random_array(&mut rng, &[1, 1, 6, 6], 0.1, 3.0).to_constant(&mut g);
        let s_b = random_array(&mut rng, &[1, 1, 6, 6], 0.1, 3.0).to_constant(&mut g);
        let rec = uncertainty_weight(&mut g, loss_a, s_a).unwrap();
        let dist = uncertainty_weight(&mut g, loss_b, s_b).unwrap();
        let (_, b) = final_loss(&mut g, rec, dist, TaskStats::default(), step).unwrap();
        assert!((b.l_final - (b.l_reconstruction + b.l_distillation)).abs() < 1e-9);
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let shape = [1, 3, 6, 7];
    let other = random_array(&mut rng, &shape, 0.1, 0.9);
    let image = random_array(&mut rng, &shape, 0.1, 0.9);
    for _ in 0..5 {
        let p = random_array(&mut rng, &shape, 0.1, 0.9);
        let err = grad_check(
            |g, x| {
                let o = other.to_constant(g);
                let s = ssim(g, x, o)?;
                g.sum(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "ssim {err:e}");
        let err = grad_check(
            |g, x| {
                let o = other.to_constant(g);
                let e = photometric_error(g, o, x, 0.85)?;
                g.sum(e)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "photometric {err:e}");

        let d = random_array(&mut rng, &[1, 1, 6, 7], 0.2, 1.0);
        let err = grad_check(
            |g, x| {
                let im = image.to_constant(g);
                smoothness_loss(g, x, im)
            },
            &d,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "smoothness {err:e}");

        let loss_map = random_array(&mut rng, &[1, 1, 6, 7], 0.0, 1.0);
        let log_sigma = random_array(&mut rng, &[1, 1, 6, 7], -1.0, 1.0);
        let err = grad_check(
            |g, x| {
                let l = loss_map.to_constant(g);
                let sig = sigma_from_log(g, x)?;
                uncertainty_weight(g, l, sig)
            },
            &log_sigma,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "uncertainty {err:e}");
        let err = grad_check(
            |g, x| {
                let l = g.exp(x)?;
                let sig = log_sigma.to_constant(g);
                let sig = g.exp(sig)?;
                uncertainty_weight(g, l, sig)
            },
            &loss_map,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "uncertainty wrt loss {err:e}");

        let pseudo = random_array(&mut rng, &[1, 1, 6, 7], 0.0, 1.0);
        let err = grad_check(
            |g, x| {
                let t = pseudo.to_constant(g);
                let offset = g.add_scalar(x, 0.05)?;
                let r = regression_loss(g, offset, t)?;
                g.mean(r)
            },
            &d,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-3, "regression {err:e}");
    }
}

fn tensor_from(g: &mut Graph, v: &[f64], shape: &[usize]) -> Tensor {
    g.constant(v.to_vec(), shape).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn photometric_self_error_is_zero(data in prop::collection::vec(0.0f64..1.0, 3 * 5 * 5), alpha in 0.0f64..=1.0) {
        let mut g = Graph::new();
        let x = tensor_from(&mut g, &data, &[1, 3, 5, 5]);
        let e = photometric_error(&mut g, x, x, alpha).unwrap();
        prop_assert!(g.value(e).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn min_reprojection_bounded_by_each_source(
        t in prop::collection::vec(0.0f64..1.0, 48),
        a in prop::collection::vec(0.0f64..1.0, 48),
        b in prop::collection::vec(0.0f64..1.0, 48),
    ) {
        let mut g = Graph::new();
        let shape = [1, 3, 4, 4];
        let tt = tensor_from(&mut g, &t, &shape);
        let ta = tensor_from(&mut g, &a, &shape);
        let tb = tensor_from(&mut g, &b, &shape);
        let rep = min_reprojection_with_automask(&mut g, tt, &[ta, tb], &[ta, tb], 0.85, None).unwrap();
        let ea = photometric_error(&mut g, tt, ta, 0.85).unwrap();
        let eb = photometric_error(&mut g, tt, tb, 0.85).unwrap();
        for i in 0..16 {
            let m = g.value(rep.map)[i];
            prop_assert!(m <= g.value(ea)[i] && m <= g.value(eb)[i]);
        }
        // warping with the sources themselves can never beat the identity
        prop_assert!(rep.mask.data.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn unit_sigma_is_plain_mean(data in prop::collection::vec(0.0f64..5.0, 16)) {
        let mut g = Graph::new();
        let l = tensor_from(&mut g, &data, &[1, 1, 4, 4]);
        let one = g.full(&[1, 1, 4, 4], 1.0);
        let w = uncertainty_weight(&mut g, l, one).unwrap();
        let m = g.mean(l).unwrap();
        prop_assert_eq!(g.item(w), g.item(m));
    }

    #[test]
    fn per_pixel_minimiser_matches_residual(data in prop::collection::vec(0.01f64..3.0, 9)) {
        for &r in &data {
            let s = argmin_sigma(r);
            prop_assert!((s - r).abs() / r < 1e-6);
            prop_assert!(laplace_nll(r, r) <= laplace_nll(r, r * 1.1));
            prop_assert!(laplace_nll(r, r) <= laplace_nll(r, r * 0.9));
        }
    }
}
