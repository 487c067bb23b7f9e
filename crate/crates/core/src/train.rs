//! Adam, the learning-rate schedule and the teacher / student training loops.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diff::{Array, Graph, Tensor};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::geometry::{synthesize_view, Intrinsics, RigidTensor};
use crate::losses::{
    downsample_mean, final_loss, identity_reprojection, min_reprojection_against, photometric_objective, regression_loss,
    sigma_from_log, smoothness_loss, uncertainty_weight, LossBreakdown, ScaleTerms, TaskStats, AUTOMASK_TIE_NOISE,
};
use crate::networks::{
    depthnet_disparity, depthnet_forward, disparity_to_depth, posenet_forward, uncertnet_forward, Net, NetworkParams,
    NUM_SCALES,
};
use crate::synth::{Dataset, FrameTriplet};

/// Which objective the student optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectiveMode {
    #[serde(rename = "photometric")]
    Photometric,
    #[serde(rename = "regression")]
    Regression,
    #[serde(rename = "photometric+regression")]
    PhotometricRegression,
    #[serde(rename = "reconstruction")]
    Reconstruction,
    #[serde(rename = "distillation")]
    Distillation,
    #[serde(rename = "subdepth")]
    Subdepth,
}

impl ObjectiveMode {
    pub const ALL: [ObjectiveMode; 6] = [
        ObjectiveMode::Photometric,
        ObjectiveMode::Regression,
        ObjectiveMode::PhotometricRegression,
        ObjectiveMode::Distillation,
        ObjectiveMode::Reconstruction,
        ObjectiveMode::Subdepth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveMode::Photometric => "photometric",
            ObjectiveMode::Regression => "regression",
            ObjectiveMode::PhotometricRegression => "photometric+regression",
            ObjectiveMode::Reconstruction => "reconstruction",
            ObjectiveMode::Distillation => "distillation",
            ObjectiveMode::Subdepth => "subdepth",
        }
    }

    /// Modes with a regression term need a teacher.
    pub fn needs_teacher(self) -> bool {
        !matches!(self, ObjectiveMode::Photometric | ObjectiveMode::Reconstruction)
    }

    fn has_photometric(self) -> bool {
        !matches!(self, ObjectiveMode::Regression | ObjectiveMode::Distillation)
    }

    fn weights_photometric(self) -> bool {
        matches!(self, ObjectiveMode::Reconstruction | ObjectiveMode::Subdepth)
    }

    fn weights_regression(self) -> bool {
        matches!(self, ObjectiveMode::Distillation | ObjectiveMode::Subdepth)
    }

    /// Networks whose parameters receive updates in this mode.
    pub fn trained_nets(self, freeze_sigma: bool) -> Vec<Net> {
        let mut nets = vec![Net::Depth];
        if self.has_photometric() {
            nets.push(Net::Pose);
        }
        if self.weights_photometric() && !freeze_sigma {
            nets.push(Net::Uncert);
        }
        nets
    }
}

impl fmt::Display for ObjectiveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ObjectiveMode::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown objective_mode {s:?}, expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_finetune: f64,
    pub lr_switch_epoch: usize,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    /// SSIM weight in the photometric error.
    pub alpha: f64,
    /// Smoothness weight.
    pub beta: f64,
    pub seed: u64,
    pub objective_mode: ObjectiveMode,
    pub d_min: f64,
    pub d_max: f64,
    pub num_scales: usize,
    pub init_from_teacher: bool,
    /// Hold both sigma maps at 1 and leave their parameters untouched.
    pub freeze_sigma: bool,
    /// Stop after this many optimiser steps.
    pub max_steps: Option<u64>,
    /// Run convolution products in f32.
    pub single_precision_conv: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 4,
            lr_initial: 1e-4,
            lr_finetune: 1e-5,
            lr_switch_epoch: 14,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            alpha: 0.85,
            beta: 1e-3,
            seed: 0,
            objective_mode: ObjectiveMode::Photometric,
            d_min: 0.1,
            d_max: 100.0,
            num_scales: NUM_SCALES,
            init_from_teacher: false,
            freeze_sigma: false,
            max_steps: None,
            single_precision_conv: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_finetune > 0.0) {
            return bad(format!("learning rates must be positive, got {} and {}", self.lr_initial, self.lr_finetune));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(self.beta >= 0.0) {
            return bad(format!("need alpha in [0, 1] and beta >= 0, got {} and {}", self.alpha, self.beta));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return bad(format!("need 0 < d_min < d_max, got [{}, {}]", self.d_min, self.d_max));
        }
        if !(1..=NUM_SCALES).contains(&self.num_scales) {
            return bad(format!("num_scales must be in 1..={NUM_SCALES}"));
        }
        Ok(())
    }
}

/// `lr_initial` before `lr_switch_epoch`, `lr_finetune` from then on.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch < config.lr_switch_epoch {
        config.lr_initial
    } else {
        config.lr_finetune
    }
}

/// One bias-corrected Adam update of a flat parameter block; `t` counts
/// steps from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(w: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, betas: (f64, f64), eps: f64) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        w[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Adam moments per parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// Apply one Adam step to every named gradient. Nothing is modified if any
/// gradient is non-finite.
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &[(String, Vec<f64>)],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name}")))?;
        if p.data.len() != g.len() {
            return Err(Error::shape("adam_step", &[&p.shape, &[g.len()]]));
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
                index,
            });
        }
    }
    state.t += 1;
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        adam_update(&mut p.data, g, m, v, state.t, lr, betas, eps);
    }
    Ok(())
}

/// Per-epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub wall_seconds: f64,
    pub eval: Option<Metrics>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<LossBreakdown>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Per-step CSV, one row per optimiser step.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        for row in &self.steps {
            w.serialize(row).map_err(|e| Error::format(path, e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Vec<LossBreakdown>> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        r.deserialize()
            .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
            .collect()
    }

    /// Mean of `f` over the last `fraction` of logged steps.
    pub fn tail_mean(&self, fraction: f64, f: impl Fn(&LossBreakdown) -> f64) -> f64 {
        let n = ((self.steps.len() as f64 * fraction).ceil() as usize).clamp(1, self.steps.len().max(1));
        let tail = &self.steps[self.steps.len() - n..];
        tail.iter().map(f).sum::<f64>() / n as f64
    }

    /// Mean of `f` over the first `fraction` of logged steps.
    pub fn head_mean(&self, fraction: f64, f: impl Fn(&LossBreakdown) -> f64) -> f64 {
        let n = ((self.steps.len() as f64 * fraction).ceil() as usize).clamp(1, self.steps.len().max(1));
        self.steps[..n].iter().map(f).sum::<f64>() / n as f64
    }
}

fn derived_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Triplets stacked along the batch axis.
pub struct Batch {
    pub target: Array,
    pub prev: Array,
    pub next: Array,
    /// Teacher disparity for the target, `[N, 1, H, W]`.
    pub pseudo: Option<Array>,
    pub intrinsics: Intrinsics,
}

fn stack(arrays: &[&Array]) -> Array {
    let mut shape = arrays[0].shape.clone();
    shape[0] = arrays.iter().map(|a| a.shape[0]).sum();
    Array {
        shape,
        data: arrays.iter().flat_map(|a| a.data.iter().copied()).collect(),
    }
}

impl Batch {
    pub fn new(triplets: &[&FrameTriplet], pseudo: Option<Vec<&Array>>) -> Result<Batch> {
        let first = triplets.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        if triplets.iter().any(|t| t.intrinsics != first.intrinsics) {
            return Err(Error::Precondition("all triplets in a dataset must share intrinsics".into()));
        }
        Ok(Batch {
            target: stack(&triplets.iter().map(|t| t.target()).collect::<Vec<_>>()),
            prev: stack(&triplets.iter().map(|t| t.sources()[0]).collect::<Vec<_>>()),
            next: stack(&triplets.iter().map(|t| t.sources()[1]).collect::<Vec<_>>()),
            pseudo: pseudo.map(|p| stack(&p)),
            intrinsics: first.intrinsics,
        })
    }

    pub fn len(&self) -> usize {
        self.target.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Everything one step produces, before the optimiser runs.
pub struct StepResult {
    pub breakdown: LossBreakdown,
    /// Value of the optimised objective.
    pub objective: f64,
    /// Gradients for every parameter bound in the step, including networks
    /// the mode does not train.
    pub gradients: Vec<(String, Vec<f64>)>,
}

fn mean_of(g: &Graph, t: Tensor) -> f64 {
    let v = g.value(t);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Forward and backward pass of the configured objective on one batch.
/// `noise` perturbs the auto-mask comparison (shape `[N, 1, H, W]`).
pub fn compute_step(
    params: &NetworkParams,
    batch: &Batch,
    config: &TrainConfig,
    noise: Option<&Array>,
    step: u64,
) -> Result<StepResult> {
    let mode = config.objective_mode;
    let n = batch.len();
    let (h, w) = (batch.target.shape[2], batch.target.shape[3]);
    let mut g = if config.single_precision_conv {
        Graph::with_single_precision_conv()
    } else {
        Graph::new()
    };
    let sigma_pho_live = mode.weights_photometric() && !config.freeze_sigma;
    let sigma_reg_live = mode.weights_regression() && !config.freeze_sigma;
    let mut nets = vec![Net::Depth, Net::Pose];
    if sigma_pho_live {
        nets.push(Net::Uncert);
    }
    let p = params.bind(&mut g, &nets, true);

    let target = batch.target.to_constant(&mut g);
    let prev = batch.prev.to_constant(&mut g);
    let next = batch.next.to_constant(&mut g);
    let out = depthnet_forward(&mut g, &p, target)?;

    // photometric terms over the pyramid; the pose network sees both pairs
    // in temporal order and the motion to the previous frame is inverted
    let pair_prev = g.concat(&[target, prev], 1)?;
    let pair_next = g.concat(&[target, next], 1)?;
    let pairs = g.concat(&[pair_prev, pair_next], 0)?;
    let forward_prev = g.concat(&[prev, target], 1)?;
    let forward_pairs = g.concat(&[forward_prev, pair_next], 0)?;
    let pose = posenet_forward(&mut g, &p, forward_pairs)?;
    let pose_prev = g.narrow(pose, 0, 0, n)?;
    let pose_next = g.narrow(pose, 0, n, n)?;
    let t_prev = RigidTensor::inverse_from_pose_tensor(&mut g, pose_prev)?;
    let t_next = RigidTensor::from_pose_tensor(&mut g, pose_next)?;
    let identity = identity_reprojection(&mut g, target, &[prev, next], config.alpha, noise)?;
    let mut scales = Vec::with_capacity(config.num_scales);
    for s in 0..config.num_scales {
        let disp = out.disparity[s];
        let disp_full = if s == 0 { disp } else { g.resize_bilinear(disp, h, w)? };
        let depth = disparity_to_depth(&mut g, disp_full, config.d_min, config.d_max)?;
        let (rec_prev, _) = synthesize_view(&mut g, prev, depth, &t_prev, &batch.intrinsics)?;
        let (rec_next, _) = synthesize_view(&mut g, next, depth, &t_next, &batch.intrinsics)?;
        let reprojection = min_reprojection_against(&mut g, target, &[rec_prev, rec_next], config.alpha, &identity)?;
        let image = if s == 0 {
            target
        } else {
            downsample_mean(&batch.target, 1 << s)?.to_constant(&mut g)
        };
        let smoothness = smoothness_loss(&mut g, disp, image)?;
        scales.push(ScaleTerms { reprojection, smoothness });
    }
    let l_photometric = photometric_objective(&mut g, &scales, config.beta, None)?;
    let sigma_pho = if sigma_pho_live {
        let log_pho = uncertnet_forward(&mut g, &p, pairs)?;
        let a = g.narrow(log_pho, 0, 0, n)?;
        let b = g.narrow(log_pho, 0, n, n)?;
        let sum = g.add(a, b)?;
        let avg = g.mul_scalar(sum, 0.5)?;
        sigma_from_log(&mut g, avg)?
    } else {
        g.full(&[n, 1, h, w], 1.0)
    };
    let l_reconstruction = photometric_objective(&mut g, &scales, config.beta, Some(sigma_pho))?;

    // regression terms at full resolution
    let (l_regression, l_distillation, sigma_reg) = match &batch.pseudo {
        Some(pseudo) => {
            let pseudo = pseudo.to_constant(&mut g);
            let r = regression_loss(&mut g, out.disparity[0], pseudo)?;
            let l_regression = g.mean(r)?;
            let sigma_reg = if sigma_reg_live {
                sigma_from_log(&mut g, out.log_sigma[0])?
            } else {
                g.full(&[n, 1, h, w], 1.0)
            };
            let l_distillation = uncertainty_weight(&mut g, r, sigma_reg)?;
            (Some(l_regression), Some(l_distillation), Some(sigma_reg))
        }
        None if mode.needs_teacher() => {
            return Err(Error::Precondition(format!("objective_mode {mode} needs teacher pseudo-labels")));
        }
        None => (None, None, None),
    };

    let stats = TaskStats {
        l_photometric: g.item(l_photometric),
        l_regression: l_regression.map_or(0.0, |t| g.item(t)),
        mean_sigma_pho: mean_of(&g, sigma_pho),
        mean_sigma_reg: sigma_reg.map_or(1.0, |t| mean_of(&g, t)),
    };
    let zero = g.scalar(0.0);
    let (l_final, breakdown) = final_loss(&mut g, l_reconstruction, l_distillation.unwrap_or(zero), stats, step)?;
    let objective = match mode {
        ObjectiveMode::Photometric => l_photometric,
        ObjectiveMode::Regression => l_regression.expect("teacher checked"),
        ObjectiveMode::PhotometricRegression => g.add(l_photometric, l_regression.expect("teacher checked"))?,
        ObjectiveMode::Reconstruction => l_reconstruction,
        ObjectiveMode::Distillation => l_distillation.expect("teacher checked"),
        ObjectiveMode::Subdepth => l_final,
    };
    let value = g.item(objective);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: format!("{mode} objective at step {step}"),
            index: 0,
        });
    }
    let grads = g.backward(objective)?;
    let gradients = p.gradients(&g, &grads);
    Ok(StepResult {
        breakdown,
        objective: value,
        gradients,
    })
}

/// Teacher disparity for every triplet, in dataset order.
pub fn pseudo_labels(teacher: &NetworkParams, data: &Dataset, single_precision_conv: bool) -> Result<Vec<Array>> {
    let mut labels = Vec::with_capacity(data.len());
    for chunk in data.triplets.chunks(8) {
        let mut g = if single_precision_conv {
            Graph::with_single_precision_conv()
        } else {
            Graph::new()
        };
        let p = teacher.bind(&mut g, &[Net::Depth], false);
        let x = stack(&chunk.iter().map(|t| t.target()).collect::<Vec<_>>()).to_constant(&mut g);
        let d = depthnet_disparity(&mut g, &p, x)?;
        let (h, w) = (g.shape(d)[2], g.shape(d)[3]);
        for v in g.value(d).chunks_exact(h * w) {
            labels.push(Array {
                shape: vec![1, 1, h, w],
                data: v.to_vec(),
            });
        }
    }
    Ok(labels)
}

fn check_compatible(teacher: &NetworkParams) -> Result<()> {
    let reference = NetworkParams::init(0);
    if teacher.len() != reference.len()
        || teacher
            .iter()
            .zip(reference.iter())
            .any(|((a, x), (b, y))| a != b || x.shape != y.shape)
    {
        return Err(Error::ArchitectureMismatch("teacher parameters do not match the depth network layout".into()));
    }
    Ok(())
}

/// Optional hooks around the training loop.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Evaluated after every epoch when present.
    pub eval: Option<&'a Dataset>,
    /// Called after every step.
    pub on_step: Option<&'a mut dyn FnMut(&LossBreakdown)>,
}

/// Train the configured objective on `data` and return the updated
/// parameters with the log.
pub fn train(
    data: &Dataset,
    teacher: Option<&NetworkParams>,
    config: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<(NetworkParams, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Precondition("training dataset is empty".into()));
    }
    if let Some(t) = teacher {
        check_compatible(t)?;
        t.check_finite()?;
    }
    let mode = config.objective_mode;
    let labels = match (teacher, mode.needs_teacher()) {
        (Some(t), true) => Some(pseudo_labels(t, data, config.single_precision_conv)?),
        (None, true) => {
            return Err(Error::Precondition(format!("objective_mode {mode} needs a teacher checkpoint")));
        }
        _ => None,
    };
    let mut params = match (teacher, config.init_from_teacher) {
        (Some(t), true) => {
            let mut p = t.clone();
            p.seed = config.seed;
            p
        }
        (None, true) => return Err(Error::Precondition("init_from_teacher needs a teacher".into())),
        _ => NetworkParams::init(config.seed),
    };
    let trained = mode.trained_nets(config.freeze_sigma);
    let before_frozen = params.hash(&Net::ALL.into_iter().filter(|n| !trained.contains(n)).collect::<Vec<_>>());

    let mut state = AdamState::default();
    let mut log = TrainLog::default();
    let mut step: u64 = 0;
    let (h, w) = (data.triplets[0].target().shape[2], data.triplets[0].target().shape[3]);
    'epochs: for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, config);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derived_seed(config.seed, "epoch", epoch as u64)));
        let mut losses = Vec::new();
        for idx in order.chunks(config.batch_size) {
            if config.max_steps.is_some_and(|m| step >= m) {
                break 'epochs;
            }
            let triplets: Vec<&FrameTriplet> = idx.iter().map(|&i| &data.triplets[i]).collect();
            let pseudo = labels.as_ref().map(|l| idx.iter().map(|&i| &l[i]).collect());
            let batch = Batch::new(&triplets, pseudo)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(config.seed, "automask", step));
            let noise = Array {
                shape: vec![batch.len(), 1, h, w],
                data: (0..batch.len() * h * w).map(|_| rng.gen::<f64>() * AUTOMASK_TIE_NOISE).collect(),
            };
            let mut result = compute_step(&params, &batch, config, Some(&noise), step)?;
            result.gradients.retain(|(name, _)| Net::of(name).is_some_and(|net| trained.contains(&net)));
            adam_step(&mut params, &result.gradients, &mut state, lr, config.betas, config.adam_eps)?;
            params.check_finite()?;
            if let Some(f) = hooks.on_step.as_mut() {
                f(&result.breakdown);
            }
            losses.push(result.objective);
            log.steps.push(result.breakdown);
            step += 1;
        }
        let eval = hooks
            .eval
            .map(|d| evaluate(&params, d, config.d_min, config.d_max).map(|r| r.aggregate))
            .transpose()?;
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        log::info!(
            "{mode} epoch {epoch}: loss {mean_loss:.5}, lr {lr:e}{}",
            eval.map(|m| format!(", eval abs_rel {:.4}", m.abs_rel)).unwrap_or_default()
        );
        log.epochs.push(EpochRecord {
            epoch,
            lr,
            mean_loss,
            wall_seconds: started.elapsed().as_secs_f64(),
            eval,
        });
    }
    let after_frozen = params.hash(&Net::ALL.into_iter().filter(|n| !trained.contains(n)).collect::<Vec<_>>());
    debug_assert_eq!(before_frozen, after_frozen);
    Ok((params, log))
}

/// Photometric pretraining of the teacher.
pub fn train_teacher(data: &Dataset, config: &TrainConfig, hooks: TrainHooks<'_>) -> Result<(NetworkParams, TrainLog)> {
    if config.objective_mode != ObjectiveMode::Photometric {
        return Err(Error::Config(format!(
            "the teacher is trained with objective_mode photometric, got {}",
            config.objective_mode
        )));
    }
    train(data, None, config, hooks)
}

/// Student training against a frozen teacher.
pub fn train_subdepth(
    data: &Dataset,
    teacher: &NetworkParams,
    config: &TrainConfig,
    hooks: TrainHooks<'_>,
) -> Result<(NetworkParams, TrainLog)> {
    train(data, Some(teacher), config, hooks)
}
