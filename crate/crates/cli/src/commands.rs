use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use log::info;
use subdepth_core::eval::{evaluate, export_maps, predict, select_hardest, Metrics, METRICS_HEADER};
use subdepth_core::networks::{Net, NetworkParams};
use subdepth_core::synth::{dataset_hash, write_pfm, Dataset, FrameTriplet, Split};
use subdepth_core::train::{train, ObjectiveMode, TrainConfig, TrainHooks, TrainLog};

use crate::config::RunConfig;
use crate::manifest::{EpochTiming, RunManifest};
use crate::{Command, UsageError};

pub const CHECKPOINT: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const EPOCHS: &str = "epochs.csv";
pub const METRICS: &str = "metrics.csv";
pub const HARDEST: &str = "hardest.csv";
pub const ABLATION: &str = "ablation.csv";
pub const ABLATION_RUNS: &str = "ablation_runs.csv";

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| UsageError(format!("missing required flag {flag}")).into())
}

pub(crate) fn dispatch(cmd: &Command, cfg: RunConfig, argv: &[String]) -> Result<()> {
    let mut manifest = RunManifest::start(cmd.name(), argv, &cfg);
    let out = match cmd {
        Command::GenData { common, .. } => {
            let out = need(&common.out, "--out")?;
            gen_data(&cfg, out, &mut manifest)?;
            out.to_path_buf()
        }
        Command::TrainTeacher { common, train } => {
            let out = need(&common.out, "--out")?;
            let root = need(&train.dataset, "--dataset")?;
            let mut tc = cfg.train.clone();
            tc.objective_mode = ObjectiveMode::Photometric;
            manifest.config.train.objective_mode = ObjectiveMode::Photometric;
            let data = load_training(root, &mut manifest)?;
            let eval = eval_split(root, &cfg)?;
            train_run(&data, eval.as_ref(), None, &tc, out, "teacher", &mut manifest)?;
            out.to_path_buf()
        }
        Command::TrainSubdepth {
            common,
            train,
            teacher_ckpt,
            ..
        } => {
            let out = need(&common.out, "--out")?;
            let root = need(&train.dataset, "--dataset")?;
            let teacher = teacher_ckpt.as_deref().map(NetworkParams::load).transpose()?;
            let data = load_training(root, &mut manifest)?;
            let eval = eval_split(root, &cfg)?;
            let label = cfg.train.objective_mode.name();
            train_run(&data, eval.as_ref(), teacher.as_ref(), &cfg.train, out, label, &mut manifest)?;
            out.to_path_buf()
        }
        Command::Eval { common, dataset, ckpt } => {
            let params = NetworkParams::load(need(ckpt, "--ckpt")?)?;
            let root = need(dataset, "--dataset")?;
            let out = common.out.clone().unwrap_or_else(|| default_out(ckpt.as_deref(), "eval"));
            manifest.dataset_hash = Some(dataset_hash(root)?);
            run_eval(&params, root, &cfg, &out)?;
            out
        }
        Command::Ablate {
            common,
            train,
            teacher_ckpt,
            ..
        } => {
            let out = need(&common.out, "--out")?;
            let root = need(&train.dataset, "--dataset")?;
            ablate(&cfg, root, teacher_ckpt.as_deref(), out, &mut manifest)?;
            out.to_path_buf()
        }
        Command::ExportMaps {
            common,
            dataset,
            ckpt,
            limit,
            hardest,
        } => {
            let params = NetworkParams::load(need(ckpt, "--ckpt")?)?;
            let root = need(dataset, "--dataset")?;
            let out = common.out.clone().unwrap_or_else(|| default_out(ckpt.as_deref(), "maps"));
            manifest.dataset_hash = Some(dataset_hash(root)?);
            export(&params, root, &cfg, &out, *limit, *hardest)?;
            out
        }
    };
    manifest.finish(&out)
}

fn default_out(ckpt: Option<&Path>, name: &str) -> PathBuf {
    ckpt.and_then(Path::parent).unwrap_or(Path::new(".")).join(name)
}

fn gen_data(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    info!(
        "rendering {} + {} triplets at {}x{} into {}",
        cfg.data.triplets,
        cfg.data.eval_triplets,
        cfg.scene.width,
        cfg.scene.height,
        out.display()
    );
    Dataset::generate(out, cfg.seed, &cfg.scene, cfg.data.triplets, cfg.data.eval_triplets)?;
    let hash = dataset_hash(out)?;
    info!("dataset hash {hash}");
    manifest.dataset_hash = Some(hash);
    Ok(())
}

fn load_training(root: &Path, manifest: &mut RunManifest) -> Result<Dataset> {
    let data = Dataset::load(root, Split::Train)?;
    manifest.dataset_hash = Some(dataset_hash(root)?);
    Ok(data)
}

fn eval_split(root: &Path, cfg: &RunConfig) -> Result<Option<Dataset>> {
    if !cfg.eval.each_epoch {
        return Ok(None);
    }
    let eval = Dataset::load(root, Split::Eval)?;
    Ok((!eval.is_empty() && eval.has_ground_truth()).then_some(eval))
}

/// Train one model and write its checkpoint and logs into `out`.
fn train_run(
    data: &Dataset,
    eval: Option<&Dataset>,
    teacher: Option<&NetworkParams>,
    config: &TrainConfig,
    out: &Path,
    label: &str,
    manifest: &mut RunManifest,
) -> Result<(NetworkParams, TrainLog)> {
    info!("training {label} (seed {}, {} epochs) into {}", config.seed, config.epochs, out.display());
    let hooks = TrainHooks { eval, on_step: None };
    let (params, log) = train(data, teacher, config, hooks)?;
    fs::create_dir_all(out)?;
    params.save(&out.join(CHECKPOINT))?;
    log.write_csv(&out.join(TRAIN_LOG))?;
    write_epochs(&log, &out.join(EPOCHS))?;
    manifest.epoch_timings.extend(log.epochs.iter().map(|e| EpochTiming {
        run: label.to_string(),
        epoch: e.epoch,
        wall_seconds: e.wall_seconds,
    }));
    Ok((params, log))
}

/// Per-epoch learning rate, mean objective and eval metrics; wall-clock
/// times go to the run manifest so this file stays reproducible.
fn write_epochs(log: &TrainLog, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "epoch,lr,mean_loss,{METRICS_HEADER}")?;
    for e in &log.epochs {
        let metrics = match e.eval {
            Some(m) => join(&m.to_array()),
            None => ",,,,,,".to_string(),
        };
        writeln!(f, "{},{:e},{},{metrics}", e.epoch, e.lr, e.mean_loss)?;
    }
    f.flush()?;
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
}

fn load_eval(root: &Path) -> Result<Dataset> {
    let data = Dataset::load(root, Split::Eval)?;
    anyhow::ensure!(!data.is_empty(), "dataset {} has no eval triplets", root.display());
    Ok(data)
}

fn run_eval(params: &NetworkParams, root: &Path, cfg: &RunConfig, out: &Path) -> Result<Metrics> {
    let data = load_eval(root)?;
    let report = evaluate(params, &data, cfg.train.d_min, cfg.train.d_max)?;
    fs::create_dir_all(out)?;
    report.write_csv(&out.join(METRICS))?;
    let by_id = report.abs_rel_by_id();
    let k = cfg.eval.hardest_k.min(by_id.len());
    let hardest = select_hardest(&by_id, k)?;
    let mut f = std::io::BufWriter::new(fs::File::create(out.join(HARDEST))?);
    writeln!(f, "id,abs_rel")?;
    for id in &hardest {
        let v = by_id.iter().find(|(i, _)| i == id).map(|(_, v)| *v).expect("selected from list");
        writeln!(f, "{id},{v}")?;
    }
    f.flush()?;
    info!("abs_rel {:.4} over {} eval triplets", report.aggregate.abs_rel, data.len());
    Ok(report.aggregate)
}

fn export(
    params: &NetworkParams,
    root: &Path,
    cfg: &RunConfig,
    out: &Path,
    limit: Option<usize>,
    hardest: Option<usize>,
) -> Result<()> {
    let data = load_eval(root)?;
    let picked: Vec<usize> = match hardest {
        Some(k) => {
            let report = evaluate(params, &data, cfg.train.d_min, cfg.train.d_max)?;
            let ids = select_hardest(&report.abs_rel_by_id(), k.min(data.len()))?;
            ids.iter().map(|id| data.ids.iter().position(|x| x == id).expect("known id")).collect()
        }
        None => (0..limit.unwrap_or(data.len()).min(data.len())).collect(),
    };
    fs::create_dir_all(out)?;
    for chunk in picked.chunks(subdepth_core::eval::EVAL_BATCH) {
        let triplets: Vec<&FrameTriplet> = chunk.iter().map(|&i| &data.triplets[i]).collect();
        let preds = predict(params, &triplets, cfg.train.d_min, cfg.train.d_max)?;
        for ((&i, t), p) in chunk.iter().zip(&triplets).zip(&preds) {
            let id = &data.ids[i];
            let sigmas = [("sigma_pho", &p.sigma_pho), ("sigma_reg", &p.sigma_reg)];
            export_maps(out, id, &p.depth, &sigmas, t.depth.as_ref())?;
            write_pfm(&out.join(format!("{id}_sigma_pho.pfm")), &p.sigma_pho)?;
            write_pfm(&out.join(format!("{id}_sigma_reg.pfm")), &p.sigma_reg)?;
            write_pfm(&out.join(format!("{id}_depth.pfm")), &p.depth)?;
        }
    }
    info!("exported {} triplets to {}", picked.len(), out.display());
    Ok(())
}

/// Mean photometric sigma inside and outside the moving-object footprint,
/// averaged over eval triplets that contain a moving object.
pub fn object_sigma(params: &NetworkParams, data: &Dataset, d_min: f64, d_max: f64) -> Result<Option<(f64, f64)>> {
    let moving: Vec<&FrameTriplet> = data
        .triplets
        .iter()
        .filter(|t| t.object_mask.as_ref().is_some_and(|m| m.data.iter().any(|&v| v > 0.5)))
        .collect();
    if moving.is_empty() {
        return Ok(None);
    }
    let (mut inside, mut outside) = (0.0, 0.0);
    for chunk in moving.chunks(subdepth_core::eval::EVAL_BATCH) {
        for (t, p) in chunk.iter().zip(predict(params, chunk, d_min, d_max)?) {
            let mask = &t.object_mask.as_ref().expect("filtered").data;
            let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
            for (&s, &m) in p.sigma_pho.data.iter().zip(mask) {
                if m > 0.5 {
                    si += s;
                    ni += 1;
                } else {
                    so += s;
                    no += 1;
                }
            }
            inside += si / ni as f64;
            outside += so / no.max(1) as f64;
        }
    }
    let n = moving.len() as f64;
    Ok(Some((inside / n, outside / n)))
}

/// Mean logged sigmas over the final epoch's steps.
fn final_epoch_sigmas(log: &TrainLog, steps_per_epoch: usize) -> (f64, f64) {
    let tail = &log.steps[log.steps.len().saturating_sub(steps_per_epoch)..];
    let n = tail.len().max(1) as f64;
    (
        tail.iter().map(|b| b.mean_sigma_pho).sum::<f64>() / n,
        tail.iter().map(|b| b.mean_sigma_reg).sum::<f64>() / n,
    )
}

struct RunRow {
    mode: ObjectiveMode,
    seed: u64,
    metrics: Metrics,
    sigma_pho: f64,
    sigma_reg: f64,
    object: Option<(f64, f64)>,
}

impl RunRow {
    fn values(&self) -> Vec<f64> {
        let mut v = self.metrics.to_array().to_vec();
        let (oi, oo) = self.object.unwrap_or((f64::NAN, f64::NAN));
        v.extend([self.sigma_pho, self.sigma_reg, oi, oo]);
        v
    }
}

const SIGMA_COLUMNS: &str = "final_sigma_pho,final_sigma_reg,object_sigma_pho,background_sigma_pho";

fn ablate(cfg: &RunConfig, root: &Path, teacher_ckpt: Option<&Path>, out: &Path, manifest: &mut RunManifest) -> Result<()> {
    anyhow::ensure!(!cfg.ablate.seeds.is_empty() && !cfg.ablate.modes.is_empty(), "ablate needs at least one seed and one mode");
    let data = load_training(root, manifest)?;
    let eval = load_eval(root)?;
    let per_epoch_eval = cfg.eval.each_epoch.then_some(&eval);
    let steps_per_epoch = data.len().div_ceil(cfg.train.batch_size);
    let (d_min, d_max) = (cfg.train.d_min, cfg.train.d_max);

    let mut teacher_cfg = cfg.train.clone();
    teacher_cfg.objective_mode = ObjectiveMode::Photometric;
    let teacher_dir = out.join("teacher");
    let (teacher, teacher_log) = match teacher_ckpt {
        Some(p) => (NetworkParams::load(p).with_context(|| format!("loading teacher {}", p.display()))?, None),
        None => {
            let (p, log) = train_run(&data, per_epoch_eval, None, &teacher_cfg, &teacher_dir, "teacher", manifest)?;
            (p, Some(log))
        }
    };
    let teacher_metrics = run_eval(&teacher, root, cfg, &teacher_dir)?;
    info!("teacher abs_rel {:.4}", teacher_metrics.abs_rel);

    let mut rows = Vec::new();
    for &mode in &cfg.ablate.modes {
        for &seed in &cfg.ablate.seeds {
            let dir = out.join("runs").join(mode.name()).join(format!("seed{seed}"));
            let student_cfg = TrainConfig {
                objective_mode: mode,
                seed,
                ..cfg.train.clone()
            };
            // the photometric student at the teacher's seed is the teacher itself
            let reused = match &teacher_log {
                Some(log) if student_cfg == teacher_cfg => {
                    info!("{mode} seed {seed}: identical to the teacher run, reusing it");
                    fs::create_dir_all(&dir)?;
                    for name in [CHECKPOINT, TRAIN_LOG, EPOCHS] {
                        fs::copy(teacher_dir.join(name), dir.join(name))?;
                    }
                    Some((teacher.clone(), log.clone()))
                }
                _ => None,
            };
            let (params, log) = match reused {
                Some(r) => r,
                None => {
                    let label = format!("{}/seed{seed}", mode.name());
                    train_run(&data, per_epoch_eval, Some(&teacher), &student_cfg, &dir, &label, manifest)?
                }
            };
            let metrics = run_eval(&params, root, cfg, &dir)?;
            let (sigma_pho, sigma_reg) = final_epoch_sigmas(&log, steps_per_epoch);
            // sigma_pho is only meaningful where the uncertainty net was trained
            let object = if mode.trained_nets(false).contains(&Net::Uncert) {
                object_sigma(&params, &eval, d_min, d_max)?
            } else {
                None
            };
            info!("{mode} seed {seed}: abs_rel {:.4}", metrics.abs_rel);
            rows.push(RunRow {
                mode,
                seed,
                metrics,
                sigma_pho,
                sigma_reg,
                object,
            });
        }
    }
    write_ablation(&rows, &cfg.ablate.modes, out)?;
    Ok(())
}

fn write_ablation(rows: &[RunRow], modes: &[ObjectiveMode], out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut f = std::io::BufWriter::new(fs::File::create(out.join(ABLATION_RUNS))?);
    writeln!(f, "objective_mode,seed,{METRICS_HEADER},{SIGMA_COLUMNS}")?;
    for r in rows {
        writeln!(f, "{},{},{}", r.mode, r.seed, join(&r.values()))?;
    }
    f.flush()?;

    let mut f = std::io::BufWriter::new(fs::File::create(out.join(ABLATION))?);
    writeln!(f, "objective_mode,seeds,{METRICS_HEADER},{SIGMA_COLUMNS}")?;
    for &mode in modes {
        let mine: Vec<Vec<f64>> = rows.iter().filter(|r| r.mode == mode).map(RunRow::values).collect();
        let n = mine.len() as f64;
        let mean: Vec<f64> = (0..mine[0].len()).map(|c| mine.iter().map(|v| v[c]).sum::<f64>() / n).collect();
        writeln!(f, "{mode},{},{}", mine.len(), join(&mean))?;
    }
    f.flush()?;
    Ok(())
}
