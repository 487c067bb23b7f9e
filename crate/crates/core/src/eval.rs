//! Depth metrics, per-image median scaling, hardest-image selection and
//! pseudo-coloured map export.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diff::{Array, Graph};
use crate::error::{Error, Result};
use crate::losses::sigma_from_log;
use crate::networks::{depthnet_forward, disparity_to_depth, uncertnet_forward, Net, NetworkParams};
use crate::synth::{write_ppm, Dataset, FrameTriplet};

/// The seven standard depth metrics, in report column order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

pub const METRICS_HEADER: &str = "abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3";

impl Metrics {
    pub fn to_array(&self) -> [f64; 7] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Metrics {
            abs_rel: a[0],
            sq_rel: a[1],
            rmse: a[2],
            rmse_log: a[3],
            delta1: a[4],
            delta2: a[5],
            delta3: a[6],
        }
    }

    /// Field-wise mean.
    pub fn mean(all: &[Metrics]) -> Result<Metrics> {
        if all.is_empty() {
            return Err(Error::InvalidArgument("no metrics to average".into()));
        }
        let mut acc = [0.0; 7];
        for m in all {
            acc.iter_mut().zip(m.to_array()).for_each(|(a, v)| *a += v);
        }
        Ok(Metrics::from_array(acc.map(|a| a / all.len() as f64)))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn check_inputs(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<()> {
    if pred.len() != gt.len() || gt.len() != mask.len() {
        return Err(Error::shape("depth metrics", &[&[pred.len()], &[gt.len()], &[mask.len()]]));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("evaluation mask is empty".into()));
    }
    Ok(())
}

/// `pred * median(gt[mask]) / median(pred[mask])`.
pub fn median_scale(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    check_inputs(pred, gt, mask)?;
    let pick = |x: &[f64]| x.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| *v).collect::<Vec<_>>();
    let gt_sel = pick(gt);
    if gt_sel.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::domain("median_scale", "ground truth must be positive on the mask"));
    }
    let mp = median(pick(pred));
    if mp == 0.0 || !mp.is_finite() {
        return Err(Error::domain("median_scale", "median prediction is zero"));
    }
    let ratio = median(gt_sel) / mp;
    Ok(pred.iter().map(|p| p * ratio).collect())
}

/// Metrics over masked pixels after clamping predictions to `clamp`.
pub fn compute_metrics(pred: &[f64], gt: &[f64], mask: &[bool], clamp: (f64, f64)) -> Result<Metrics> {
    check_inputs(pred, gt, mask)?;
    if !(clamp.0 > 0.0 && clamp.0 <= clamp.1) {
        return Err(Error::InvalidArgument(format!("invalid clamp range {clamp:?}")));
    }
    let mut acc = [0.0; 7];
    let mut n = 0usize;
    for ((&p, &g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
        if !(g > 0.0) {
            return Err(Error::domain("compute_metrics", "ground truth must be positive on the mask"));
        }
        let p = p.clamp(clamp.0, clamp.1);
        let d = p - g;
        let ratio = (p / g).max(g / p);
        let dl = p.ln() - g.ln();
        acc[0] += d.abs() / g;
        acc[1] += d * d / g;
        acc[2] += d * d;
        acc[3] += dl * dl;
        acc[4] += (ratio < 1.25) as u8 as f64;
        acc[5] += (ratio < 1.25f64.powi(2)) as u8 as f64;
        acc[6] += (ratio < 1.25f64.powi(3)) as u8 as f64;
        n += 1;
    }
    let n = n as f64;
    Ok(Metrics {
        abs_rel: acc[0] / n,
        sq_rel: acc[1] / n,
        rmse: (acc[2] / n).sqrt(),
        rmse_log: (acc[3] / n).sqrt(),
        delta1: acc[4] / n,
        delta2: acc[5] / n,
        delta3: acc[6] / n,
    })
}

/// Ids of the `k` largest abs_rel values, descending; ties by ascending id.
pub fn select_hardest(per_image: &[(String, f64)], k: usize) -> Result<Vec<String>> {
    if k > per_image.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds {} images", per_image.len())));
    }
    let mut v: Vec<&(String, f64)> = per_image.iter().collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(v.into_iter().take(k).map(|(id, _)| id.clone()).collect())
}

/// Network outputs for one triplet, all `[1, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub depth: Array,
    pub sigma_reg: Array,
    pub sigma_pho: Array,
}

fn stack(arrays: &[&Array]) -> Result<Array> {
    let first = arrays.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut shape = first.shape.clone();
    shape[0] = arrays.iter().map(|a| a.shape[0]).sum();
    let data = arrays.iter().flat_map(|a| a.data.iter().copied()).collect();
    Array::new(&shape, data)
}

fn split_batch(a: &[f64], n: usize, shape: &[usize]) -> Vec<Array> {
    let per = a.len() / n;
    (0..n)
        .map(|i| Array {
            shape: shape.to_vec(),
            data: a[i * per..(i + 1) * per].to_vec(),
        })
        .collect()
}

/// Depth, regression sigma and photometric sigma for each triplet.
pub fn predict(params: &NetworkParams, triplets: &[&FrameTriplet], d_min: f64, d_max: f64) -> Result<Vec<Prediction>> {
    let n = triplets.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::with_single_precision_conv();
    let p = params.bind(&mut g, &[Net::Depth, Net::Uncert], false);
    let target = stack(&triplets.iter().map(|t| t.target()).collect::<Vec<_>>())?.to_constant(&mut g);
    let out = depthnet_forward(&mut g, &p, target)?;
    let depth = disparity_to_depth(&mut g, out.disparity[0], d_min, d_max)?;
    let sigma_reg = sigma_from_log(&mut g, out.log_sigma[0])?;
    let prev = stack(&triplets.iter().map(|t| t.sources()[0]).collect::<Vec<_>>())?.to_constant(&mut g);
    let next = stack(&triplets.iter().map(|t| t.sources()[1]).collect::<Vec<_>>())?.to_constant(&mut g);
    let pair_prev = g.concat(&[target, prev], 1)?;
    let pair_next = g.concat(&[target, next], 1)?;
    let pairs = g.concat(&[pair_prev, pair_next], 0)?;
    let log_pho = uncertnet_forward(&mut g, &p, pairs)?;
    let a = g.narrow(log_pho, 0, 0, n)?;
    let b = g.narrow(log_pho, 0, n, n)?;
    let avg = g.add(a, b)?;
    let avg = g.mul_scalar(avg, 0.5)?;
    let sigma_pho = sigma_from_log(&mut g, avg)?;
    let shape = [1, 1, g.shape(depth)[2], g.shape(depth)[3]];
    let d = split_batch(g.value(depth), n, &shape);
    let sr = split_batch(g.value(sigma_reg), n, &shape);
    let sp = split_batch(g.value(sigma_pho), n, &shape);
    Ok(d.into_iter()
        .zip(sr)
        .zip(sp)
        .map(|((depth, sigma_reg), sigma_pho)| Prediction { depth, sigma_reg, sigma_pho })
        .collect())
}

/// Per-image and aggregate metrics for a split with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ids: Vec<String>,
    pub per_image: Vec<Metrics>,
    pub aggregate: Metrics,
}

impl EvalReport {
    pub fn abs_rel_by_id(&self) -> Vec<(String, f64)> {
        self.ids.iter().cloned().zip(self.per_image.iter().map(|m| m.abs_rel)).collect()
    }

    /// CSV with a leading comment, one row per image, then the aggregate.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "# per-image median scaling; rows follow image order ({}), last row is the mean over images",
            self.ids.len()
        )?;
        let mut w = csv::Writer::from_writer(f);
        for m in self.per_image.iter().chain(std::iter::once(&self.aggregate)) {
            w.serialize(m).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub const EVAL_BATCH: usize = 8;

/// Median-scaled metrics of `params` on every triplet of `data`.
pub fn evaluate(params: &NetworkParams, data: &Dataset, d_min: f64, d_max: f64) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Precondition("evaluation split is empty".into()));
    }
    if !data.has_ground_truth() {
        return Err(Error::Precondition("evaluation needs ground-truth depth".into()));
    }
    let mut per_image = Vec::with_capacity(data.len());
    for chunk in data.triplets.chunks(EVAL_BATCH) {
        let refs: Vec<&FrameTriplet> = chunk.iter().collect();
        for (t, p) in chunk.iter().zip(predict(params, &refs, d_min, d_max)?) {
            let gt = &t.depth.as_ref().expect("checked").data;
            let mask: Vec<bool> = gt.iter().map(|&g| g > 0.0).collect();
            let scaled = median_scale(&p.depth.data, gt, &mask)?;
            per_image.push(compute_metrics(&scaled, gt, &mask, (d_min, d_max))?);
        }
    }
    Ok(EvalReport {
        ids: data.ids.clone(),
        aggregate: Metrics::mean(&per_image)?,
        per_image,
    })
}

const VIRIDIS: [[f64; 3]; 9] = [
    [0.267, 0.005, 0.329],
    [0.283, 0.141, 0.458],
    [0.254, 0.265, 0.530],
    [0.207, 0.372, 0.553],
    [0.164, 0.471, 0.558],
    [0.128, 0.567, 0.551],
    [0.135, 0.659, 0.518],
    [0.478, 0.821, 0.318],
    [0.993, 0.906, 0.144],
];

/// Perceptually uniform sequential map (viridis anchors, linear in between).
pub fn viridis(v: f64) -> [f64; 3] {
    let x = v.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let t = x - i as f64;
    [0, 1, 2].map(|c| VIRIDIS[i][c] * (1.0 - t) + VIRIDIS[i + 1][c] * t)
}

/// Black-red-yellow-white "hot" map.
pub fn hot(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

fn colorize(values: &[f64], h: usize, w: usize, map: fn(f64) -> [f64; 3]) -> Array {
    let mut data = vec![0.0; 3 * h * w];
    for (i, &v) in values.iter().enumerate() {
        let c = map(v);
        for ch in 0..3 {
            data[ch * h * w + i] = c[ch];
        }
    }
    Array {
        shape: vec![1, 3, h, w],
        data,
    }
}

fn map_dims(a: &Array) -> Result<(usize, usize)> {
    match a.shape[..] {
        [1, 1, h, w] => Ok((h, w)),
        _ => Err(Error::shape("export_maps", &[&a.shape])),
    }
}

/// Write `{stem}_depth.ppm` (inverse depth over its maximum, viridis, near
/// is bright), one `{stem}_{name}.ppm` per sigma map (min-max normalised,
/// hot) and, with ground truth, `{stem}_error.ppm` (per-pixel abs-rel
/// clipped to [0, 1], hot). Returns the written paths.
pub fn export_maps(
    dir: &Path,
    stem: &str,
    pred_depth: &Array,
    sigma_maps: &[(&str, &Array)],
    gt_depth: Option<&Array>,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = map_dims(pred_depth)?;
    if pred_depth.data.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::domain("export_maps", "depth must be positive"));
    }
    let mut written = Vec::new();
    let inv: Vec<f64> = pred_depth.data.iter().map(|d| 1.0 / d).collect();
    let top = inv.iter().cloned().fold(0.0, f64::max);
    let norm: Vec<f64> = inv.iter().map(|v| v / top).collect();
    let path = dir.join(format!("{stem}_depth.ppm"));
    write_ppm(&path, &colorize(&norm, h, w, viridis))?;
    written.push(path);

    for (name, s) in sigma_maps {
        if map_dims(s)? != (h, w) {
            return Err(Error::shape("export_maps", &[&pred_depth.shape, &s.shape]));
        }
        let lo = s.data.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let norm: Vec<f64> = s.data.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect();
        let path = dir.join(format!("{stem}_{name}.ppm"));
        write_ppm(&path, &colorize(&norm, h, w, hot))?;
        written.push(path);
    }

    if let Some(gt) = gt_depth {
        if gt.shape != pred_depth.shape {
            return Err(Error::shape("export_maps", &[&pred_depth.shape, &gt.shape]));
        }
        let err: Vec<f64> = pred_depth
            .data
            .iter()
            .zip(&gt.data)
            .map(|(p, g)| if *g > 0.0 { ((p - g).abs() / g).min(1.0) } else { 0.0 })
            .collect();
        let path = dir.join(format!("{stem}_error.ppm"));
        write_ppm(&path, &colorize(&err, h, w, hot))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_scale_examples() {
        let gt = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let mask = vec![true; 5];
        assert_eq!(median_scale(&gt, &gt, &mask).unwrap(), gt);
        let doubled: Vec<f64> = gt.iter().map(|v| v * 2.0).collect();
        assert_eq!(median_scale(&doubled, &gt, &mask).unwrap(), gt);
        let pred = vec![5.0; 3];
        let g = vec![10.0; 3];
        assert_eq!(median_scale(&pred, &g, &[true; 3]).unwrap(), vec![10.0; 3]);
        assert!(median_scale(&[0.0; 3], &g, &[true; 3]).is_err());
    }

    #[test]
    fn metrics_constant_case_is_exact() {
        let pred = vec![2.0; 16];
        let gt = vec![1.0; 16];
        let m = compute_metrics(&pred, &gt, &[true; 16], (0.1, 100.0)).unwrap();
        assert_eq!(m.to_array(), [1.0, 1.0, 1.0, 2f64.ln(), 0.0, 0.0, 0.0]);
        let same = compute_metrics(&gt, &gt, &[true; 16], (0.1, 100.0)).unwrap();
        assert_eq!(same.to_array(), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!(compute_metrics(&pred, &gt, &[false; 16], (0.1, 100.0)).is_err());
    }

    #[test]
    fn hardest_examples() {
        let v = vec![("a".to_string(), 0.1), ("b".to_string(), 0.3), ("c".to_string(), 0.2)];
        assert_eq!(select_hardest(&v, 2).unwrap(), vec!["b", "c"]);
        assert_eq!(select_hardest(&v, 3).unwrap(), vec!["b", "c", "a"]);
        assert!(select_hardest(&v, 4).is_err());
        let tie = vec![("b".to_string(), 0.2), ("a".to_string(), 0.2)];
        assert_eq!(select_hardest(&tie, 1).unwrap(), vec!["a"]);
    }

    #[test]
    fn colormap_ends() {
        assert_eq!(hot(0.0), [0.0, 0.0, 0.0]);
        assert_eq!(hot(1.0), [1.0, 1.0, 1.0]);
        assert_eq!(viridis(1.0), VIRIDIS[8]);
        assert_eq!(viridis(0.0), VIRIDIS[0]);
    }
}
