//! Training objectives: appearance matching, edge-aware smoothness,
//! minimum reprojection with auto-masking, teacher regression and the
//! Laplace-likelihood uncertainty weighting that combines them.
//!
//! Per-pixel maps are `[N, 1, H, W]`; images are `[N, C, H, W]`.

use serde::{Deserialize, Serialize};

use crate::diff::{Array, Graph, Tensor};
use crate::error::{Error, Result};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Log-uncertainty outputs are clamped to this range before `exp`.
pub const LOG_SIGMA_RANGE: (f64, f64) = (-12.0, 6.0);

/// Amplitude of the uniform noise added to identity reprojection errors.
pub const AUTOMASK_TIE_NOISE: f64 = 1e-5;

fn same_shape(g: &Graph, op: &'static str, a: Tensor, b: Tensor) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(op, &[g.shape(a), g.shape(b)]));
    }
    Ok(())
}

fn map_dims(g: &Graph, op: &'static str, t: Tensor) -> Result<(usize, usize, usize, usize)> {
    match *g.shape(t) {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::shape(op, &[g.shape(t)])),
    }
}

/// Windowed SSIM from 3x3 box statistics (reflection padded), averaged
/// over channels. Returns `[N, 1, H, W]` in `[-1, 1]`.
pub fn ssim(g: &mut Graph, a: Tensor, b: Tensor) -> Result<Tensor> {
    same_shape(g, "ssim", a, b)?;
    map_dims(g, "ssim", a)?;
    let s = g.ssim_map(a, b, SSIM_C1, SSIM_C2)?;
    g.mean_axis(s, 1)
}

/// `alpha * (1 - SSIM) / 2 + (1 - alpha) * mean_c |target - recon|`.
pub fn photometric_error(g: &mut Graph, target: Tensor, recon: Tensor, alpha: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    same_shape(g, "photometric_error", target, recon)?;
    let diff = g.sub(target, recon)?;
    let l1 = g.abs(diff)?;
    let l1 = g.mean_axis(l1, 1)?;
    let l1 = g.mul_scalar(l1, 1.0 - alpha)?;
    if alpha == 0.0 {
        return Ok(l1);
    }
    let s = ssim(g, target, recon)?;
    let dssim = g.mul_scalar(s, -0.5 * alpha)?;
    let dssim = g.add_scalar(dssim, 0.5 * alpha)?;
    g.add(dssim, l1)
}

/// Edge-aware smoothness of a disparity map normalised by its per-image
/// spatial mean: `mean|dx d| e^{-|dx I|} + mean|dy d| e^{-|dy I|}`, with
/// image gradients averaged over channels.
pub fn smoothness_loss(g: &mut Graph, disp: Tensor, image: Tensor) -> Result<Tensor> {
    let (n, c1, h, w) = map_dims(g, "smoothness_loss", disp)?;
    let (ni, _, hi, wi) = map_dims(g, "smoothness_loss", image)?;
    if c1 != 1 || n != ni || h != hi || w != wi || h < 2 || w < 2 {
        return Err(Error::shape("smoothness_loss", &[g.shape(disp), g.shape(image)]));
    }
    let value = g.value(disp);
    let plane = h * w;
    for b in 0..n {
        let m: f64 = value[b * plane..(b + 1) * plane].iter().sum::<f64>() / plane as f64;
        if m == 0.0 {
            return Err(Error::domain("smoothness_loss", "disparity has zero mean"));
        }
    }
    let mean = g.mean_axis(disp, 3)?;
    let mean = g.mean_axis(mean, 2)?;
    let norm = g.div(disp, mean)?;

    let mut total = None;
    for axis_x in [true, false] {
        let (dd, di) = if axis_x {
            (g.grad_x(norm)?, g.grad_x(image)?)
        } else {
            (g.grad_y(norm)?, g.grad_y(image)?)
        };
        let dd = g.abs(dd)?;
        let di = g.abs(di)?;
        let di = g.mean_axis(di, 1)?;
        let di = g.neg(di)?;
        let weight = g.exp(di)?;
        let term = g.mul(dd, weight)?;
        let term = g.mean(term)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("two terms"))
}

/// Per-pixel minimum reprojection error and its auto-mask.
pub struct Reprojection {
    /// `[N, 1, H, W]` minimum over sources of the warped photometric error.
    pub map: Tensor,
    /// `[N, 1, H, W]`, 1.0 where the warped minimum is strictly below the
    /// (noise-perturbed) unwarped minimum.
    pub mask: Array,
}

/// Minimum photometric error over the reconstructions, with pixels masked
/// out wherever simply copying a source frame already matches the target
/// at least as well.
pub fn min_reprojection_with_automask(
    g: &mut Graph,
    target: Tensor,
    sources: &[Tensor],
    recons: &[Tensor],
    alpha: f64,
    identity_noise: Option<&Array>,
) -> Result<Reprojection> {
    if recons.is_empty() || sources.len() != recons.len() {
        return Err(Error::InvalidArgument(format!(
            "need one reconstruction per source, got {} sources and {} reconstructions",
            sources.len(),
            recons.len()
        )));
    }
    let identity = identity_reprojection(g, target, sources, alpha, identity_noise)?;
    min_reprojection_against(g, target, recons, alpha, &identity)
}

/// Per-pixel minimum of the unwarped source-to-target error plus optional
/// tie-breaking noise. Off the gradient path.
pub fn identity_reprojection(
    g: &mut Graph,
    target: Tensor,
    sources: &[Tensor],
    alpha: f64,
    noise: Option<&Array>,
) -> Result<Array> {
    let mut identity: Option<Array> = None;
    for &s in sources {
        let t = g.detach(target);
        let s = g.detach(s);
        let e = photometric_error(g, t, s, alpha)?;
        let ev = g.value(e);
        identity = Some(match identity {
            None => Array::from_graph(g, e),
            Some(mut m) => {
                m.data.iter_mut().zip(ev).for_each(|(a, b)| *a = a.min(*b));
                m
            }
        });
    }
    let mut identity = identity.ok_or_else(|| Error::InvalidArgument("no source frames".into()))?;
    if let Some(noise) = noise {
        if noise.shape != identity.shape {
            return Err(Error::shape("identity_reprojection", &[&noise.shape, &identity.shape]));
        }
        identity.data.iter_mut().zip(&noise.data).for_each(|(v, n)| *v += n);
    }
    Ok(identity)
}

/// [`min_reprojection_with_automask`] with a precomputed
/// [`identity_reprojection`].
pub fn min_reprojection_against(
    g: &mut Graph,
    target: Tensor,
    recons: &[Tensor],
    alpha: f64,
    identity: &Array,
) -> Result<Reprojection> {
    let mut warped = None;
    for &r in recons {
        let e = photometric_error(g, target, r, alpha)?;
        warped = Some(match warped {
            None => e,
            Some(m) => g.minimum(m, e)?,
        });
    }
    let warped = warped.ok_or_else(|| Error::InvalidArgument("no reconstructions".into()))?;
    if identity.shape != g.shape(warped) {
        return Err(Error::shape("min_reprojection_with_automask", &[&identity.shape, g.shape(warped)]));
    }
    let mask = g
        .value(warped)
        .iter()
        .zip(&identity.data)
        .map(|(w, i)| if w < i { 1.0 } else { 0.0 })
        .collect();
    Ok(Reprojection {
        map: warped,
        mask: Array {
            shape: g.shape(warped).to_vec(),
            data: mask,
        },
    })
}

/// Mean over the batch of each image's masked spatial mean. Images with an
/// empty mask contribute 0.
pub fn masked_mean(g: &mut Graph, map: Tensor, mask: &Array) -> Result<Tensor> {
    let (n, _, h, w) = map_dims(g, "masked_mean", map)?;
    if mask.shape != g.shape(map) {
        return Err(Error::shape("masked_mean", &[g.shape(map), &mask.shape]));
    }
    let plane = h * w;
    // weights mask / count per image, divided by the batch size
    let mut weights = mask.data.clone();
    for b in 0..n {
        let row = &mut weights[b * plane..(b + 1) * plane];
        let count: f64 = row.iter().sum();
        if count > 0.0 {
            row.iter_mut().for_each(|v| *v /= count * n as f64);
        }
    }
    let wt = g.constant(weights, &mask.shape)?;
    let prod = g.mul(map, wt)?;
    g.sum(prod)
}

/// Log-uncertainty to uncertainty: `exp(clamp(s, -6, 6))`.
pub fn sigma_from_log(g: &mut Graph, log_sigma: Tensor) -> Result<Tensor> {
    let s = g.clamp(log_sigma, LOG_SIGMA_RANGE.0, LOG_SIGMA_RANGE.1)?;
    g.exp(s)
}

fn weighted_map(g: &mut Graph, op: &'static str, loss_map: Tensor, sigma: Tensor) -> Result<Tensor> {
    if g.shape(loss_map) != g.shape(sigma) {
        return Err(Error::shape(op, &[g.shape(loss_map), g.shape(sigma)]));
    }
    if let Some(i) = g.value(sigma).iter().position(|&s| !(s > 0.0)) {
        return Err(Error::domain(op, format!("sigma must be positive, found {} at {i}", g.value(sigma)[i])));
    }
    let scaled = g.div(loss_map, sigma)?;
    let penalty = g.log(sigma)?;
    g.add(scaled, penalty)
}

/// Laplace negative log-likelihood weighting: `mean(loss / sigma + log sigma)`.
pub fn uncertainty_weight(g: &mut Graph, loss_map: Tensor, sigma: Tensor) -> Result<Tensor> {
    let m = weighted_map(g, "uncertainty_weight", loss_map, sigma)?;
    g.mean(m)
}

/// [`uncertainty_weight`] restricted to masked pixels, reduced like
/// [`masked_mean`].
pub fn uncertainty_weight_masked(g: &mut Graph, loss_map: Tensor, sigma: Tensor, mask: &Array) -> Result<Tensor> {
    let m = weighted_map(g, "uncertainty_weight", loss_map, sigma)?;
    masked_mean(g, m, mask)
}

/// `|d - d_pseudo|` with the pseudo label cut off from the gradient path.
pub fn regression_loss(g: &mut Graph, d: Tensor, d_pseudo: Tensor) -> Result<Tensor> {
    same_shape(g, "regression_loss", d, d_pseudo)?;
    let frozen = g.detach(d_pseudo);
    let diff = g.sub(d, frozen)?;
    g.abs(diff)
}

/// Photometric terms for one pyramid scale.
pub struct ScaleTerms {
    pub reprojection: Reprojection,
    /// Scalar smoothness at this scale's own resolution.
    pub smoothness: Tensor,
}

/// `mean_s [ masked_mean(reprojection_s) + beta * smoothness_s / 2^s ]`.
///
/// With `sigma` supplied, the reprojection term becomes the masked
/// uncertainty-weighted mean instead; smoothness is never weighted.
pub fn photometric_objective(g: &mut Graph, scales: &[ScaleTerms], beta: f64, sigma: Option<Tensor>) -> Result<Tensor> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("no pyramid scales".into()));
    }
    let mut total = None;
    for (s, terms) in scales.iter().enumerate() {
        let rep = match sigma {
            None => masked_mean(g, terms.reprojection.map, &terms.reprojection.mask)?,
            Some(sig) => uncertainty_weight_masked(g, terms.reprojection.map, sig, &terms.reprojection.mask)?,
        };
        let sm = g.mul_scalar(terms.smoothness, beta / f64::powi(2.0, s as i32))?;
        let term = g.add(rep, sm)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let total = total.expect("nonempty");
    g.mul_scalar(total, 1.0 / scales.len() as f64)
}

/// The self-supervised objective `l_photometric`.
pub fn sde_objective(g: &mut Graph, scales: &[ScaleTerms], beta: f64) -> Result<Tensor> {
    photometric_objective(g, scales, beta, None)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: u64,
    pub l_photometric: f64,
    pub l_regression: f64,
    pub l_reconstruction: f64,
    pub l_distillation: f64,
    pub l_final: f64,
    pub mean_sigma_pho: f64,
    pub mean_sigma_reg: f64,
}

impl LossBreakdown {
    pub fn additivity_error(&self) -> f64 {
        (self.l_final - (self.l_reconstruction + self.l_distillation)).abs()
    }
}

/// Scalars that accompany the two weighted task losses in the log.
#[derive(Clone, Copy, Debug, Default)]
pub struct TaskStats {
    pub l_photometric: f64,
    pub l_regression: f64,
    pub mean_sigma_pho: f64,
    pub mean_sigma_reg: f64,
}

/// `l_final = l_reconstruction + l_distillation`, plus the log row.
pub fn final_loss(
    g: &mut Graph,
    reconstruction: Tensor,
    distillation: Tensor,
    stats: TaskStats,
    step: u64,
) -> Result<(Tensor, LossBreakdown)> {
    let total = g.add(reconstruction, distillation)?;
    let breakdown = LossBreakdown {
        step,
        l_photometric: stats.l_photometric,
        l_regression: stats.l_regression,
        l_reconstruction: g.item(reconstruction),
        l_distillation: g.item(distillation),
        l_final: g.item(total),
        mean_sigma_pho: stats.mean_sigma_pho,
        mean_sigma_reg: stats.mean_sigma_reg,
    };
    Ok((total, breakdown))
}

/// Block-average an `[N, C, H, W]` image by `factor` in each direction.
pub fn downsample_mean(image: &Array, factor: usize) -> Result<Array> {
    let (n, c, h, w) = match image.shape[..] {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(Error::shape("downsample_mean", &[&image.shape])),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape("downsample_mean", &[&image.shape, &[factor]]));
    }
    let (ho, wo) = (h / factor, w / factor);
    let mut out = vec![0.0; n * c * ho * wo];
    let inv = 1.0 / (factor * factor) as f64;
    for p in 0..n * c {
        let src = &image.data[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let mut s = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += src[(y * factor + dy) * w + x * factor + dx];
                    }
                }
                out[p * ho * wo + y * wo + x] = s * inv;
            }
        }
    }
    Array::new(&[n, c, ho, wo], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_img(g: &mut Graph, v: f64) -> Tensor {
        g.full(&[1, 3, 5, 6], v)
    }

    #[test]
    fn ssim_of_identical_inputs_is_one() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..90).map(|i| ((i * 7) % 13) as f64 / 13.0).collect();
        let x = g.constant(data, &[1, 3, 5, 6]).unwrap();
        let s = ssim(&mut g, x, x).unwrap();
        assert!(g.value(s).iter().all(|v| (v - 1.0).abs() < 1e-12));
        let c = const_img(&mut g, 0.5);
        let s = ssim(&mut g, c, c).unwrap();
        assert!(g.value(s).iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ssim_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.full(&[1, 3, 5, 6], 0.1);
        let b = g.full(&[1, 3, 6, 5], 0.1);
        assert!(matches!(ssim(&mut g, a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn photometric_pure_l1_branch() {
        let mut g = Graph::new();
        let a = const_img(&mut g, 0.6);
        let b = const_img(&mut g, 0.3);
        let e = photometric_error(&mut g, a, b, 0.0).unwrap();
        assert!(g.value(e).iter().all(|v| (v - 0.3).abs() < 1e-12));
        let z = photometric_error(&mut g, a, a, 0.85).unwrap();
        assert!(g.value(z).iter().all(|v| v.abs() < 1e-12));
        assert!(photometric_error(&mut g, a, b, 1.5).is_err());
    }

    #[test]
    fn automask_static_camera_excludes_everything() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..90).map(|i| ((i * 5) % 11) as f64 / 11.0).collect();
        let t = g.constant(data.clone(), &[1, 3, 5, 6]).unwrap();
        let r1 = g.constant(data.iter().map(|v| 1.0 - v).collect(), &[1, 3, 5, 6]).unwrap();
        let r2 = g.constant(data.iter().map(|v| v * 0.5).collect(), &[1, 3, 5, 6]).unwrap();
        let rep = min_reprojection_with_automask(&mut g, t, &[t, t], &[r1, r2], 0.85, None).unwrap();
        assert!(rep.mask.data.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn regression_examples() {
        let mut g = Graph::new();
        let d = g.param(vec![0.1, 0.4, 0.7, 0.2], &[1, 1, 2, 2]).unwrap();
        let p = g.param(vec![0.1, 0.4, 0.7, 0.2], &[1, 1, 2, 2]).unwrap();
        let r = regression_loss(&mut g, d, p).unwrap();
        assert!(g.value(r).iter().all(|&v| v == 0.0));
        let shifted = g.add_scalar(p, 0.5).unwrap();
        let r = regression_loss(&mut g, shifted, p).unwrap();
        assert!(g.value(r).iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        // gradient reaches the pseudo label only through `shifted`, never
        // through the detached operand
        assert_eq!(grads.get(p).unwrap(), &[1.0; 4]);
        let mut g = Graph::new();
        let d = g.param(vec![0.3; 4], &[1, 1, 2, 2]).unwrap();
        let p = g.param(vec![0.1; 4], &[1, 1, 2, 2]).unwrap();
        let r = regression_loss(&mut g, d, p).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(p).is_none());
        assert_eq!(grads.get(d).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn uncertainty_rejects_nonpositive_sigma() {
        let mut g = Graph::new();
        let l = g.full(&[1, 1, 2, 2], 0.5);
        let s = g.constant(vec![1.0, 0.0, 1.0, 1.0], &[1, 1, 2, 2]).unwrap();
        assert!(matches!(uncertainty_weight(&mut g, l, s), Err(Error::Domain { .. })));
    }

    #[test]
    fn masked_mean_empty_image_contributes_zero() {
        let mut g = Graph::new();
        let m = g.constant(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], &[2, 1, 2, 2]).unwrap();
        let mask = Array::new(&[2, 1, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let v = masked_mean(&mut g, m, &mask).unwrap();
        // image 0: mean(1, 3) = 2; image 1: empty -> 0; batch mean 1
        assert!((g.item(v) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn downsample_block_average() {
        let a = Array::new(&[1, 1, 2, 4], vec![1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]).unwrap();
        let d = downsample_mean(&a, 2).unwrap();
        assert_eq!(d.shape, vec![1, 1, 1, 2]);
        assert_eq!(d.data, vec![2.0, 6.0]);
    }
}
