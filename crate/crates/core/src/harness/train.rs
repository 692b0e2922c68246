//! The supervised training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use agm_autograd::{GradStore, ParamId, Sgd, SgdConfig, Tensor};

use super::config::{lr_at, TrainConfig};
use super::model::{head_shoulder_images, ReidCheckpoint, ReidModel};
use super::preprocess::preprocess_agm;
use crate::datapipe::{ImageSet, PkSampler};
use crate::error::{AgmError, Result};
use crate::ganstyle::GanModel;
use crate::imaging::{self, Image};
use crate::losses::{total_loss, LossBundle};
use crate::nn::{apply_bn_updates, Ctx};
use crate::seed;

/// Where a run writes its artifacts; `None` skips that artifact.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Receives `epoch_NNN.ckpt` after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
    /// JSON-lines log, one object per optimizer step.
    pub log_path: Option<PathBuf>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// One-based across the run.
    pub step: usize,
    /// One-based.
    pub epoch: usize,
    pub losses: LossBundle,
}

impl StepRecord {
    pub fn to_json(&self) -> serde_json::Value {
        let mut m = self.losses.to_json();
        m.insert("step".into(), self.step.into());
        m.insert("epoch".into(), self.epoch.into());
        serde_json::Value::Object(m)
    }
}

pub struct TrainRun {
    pub config: TrainConfig,
    pub model: ReidModel,
    pub gn: Option<GanModel>,
    pub original_ids: Vec<u32>,
    pub epochs_completed: usize,
    pub log: Vec<StepRecord>,
    pub optimizer: Sgd,
}

impl TrainRun {
    pub fn checkpoint(&self) -> crate::ckpt::Container {
        ReidCheckpoint::capture(
            &self.config,
            self.epochs_completed,
            &self.model,
            self.gn.as_ref(),
            &self.original_ids,
            Some(&self.optimizer),
        )
    }

    pub fn into_checkpoint(self) -> ReidCheckpoint {
        let velocity = self
            .model
            .store
            .ids()
            .filter_map(|id| self.optimizer.velocity(id).map(|v| (self.model.store.name(id).to_string(), v.clone())))
            .collect();
        ReidCheckpoint {
            config: self.config,
            epoch: self.epochs_completed,
            model: self.model,
            gn: self.gn,
            original_ids: self.original_ids,
            velocity,
        }
    }
}

/// Augmented global and head-shoulder inputs of one batch. The
/// head-shoulder crop comes from the un-augmented global image; each branch
/// then draws its own augmentation.
fn batch_tensors(
    globals: &[Image],
    heads: &[Image],
    batch: &[usize],
    cfg: &TrainConfig,
    step: usize,
    two_stream: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let augment = |img: &Image, branch: &str, pos: usize| {
        let s = seed::derive(cfg.seed, &[seed::tag("augment"), seed::tag(branch), step as u64, pos as u64]);
        imaging::augment(img, &cfg.augment.with_seed(s))
    };
    let g: Vec<Image> = batch
        .iter()
        .enumerate()
        .map(|(pos, &i)| augment(&globals[i], "global", pos))
        .collect::<Result<_>>()?;
    let xg = imaging::to_tensor(&g.iter().collect::<Vec<_>>())?;
    let xh = if two_stream {
        let h: Vec<Image> = batch
            .iter()
            .enumerate()
            .map(|(pos, &i)| augment(&heads[i], "head_shoulder", pos))
            .collect::<Result<_>>()?;
        Some(imaging::to_tensor(&h.iter().collect::<Vec<_>>())?)
    } else {
        None
    };
    Ok((xg, xh))
}

/// Which loss terms drive an update and which parameters it may touch.
struct Update<'a> {
    terms: &'a [&'static str],
    params: Vec<ParamId>,
}

/// Trains on `data` under `cfg`, translating infrared images with `gn` in
/// the `+gn` modes. Each batch takes one SGD step on the summed objective,
/// or three steps when `sequential_updates` is set.
pub fn train(data: &ImageSet, cfg: &TrainConfig, gn: Option<GanModel>, out: &TrainOutputs) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.mode.needs_gn() && gn.is_none() {
        return Err(AgmError::Config(format!("mode {} needs a trained translation model", cfg.mode)));
    }
    data.index.validate_paired()?;
    let classes = data.index.num_classes();
    let (gh, gw) = cfg.global_size;
    let resized = data.resized(gh, gw)?;
    let prepped = preprocess_agm(&resized, cfg.mode, gn.as_ref())?;
    let mut model = ReidModel::new(cfg, classes)?;
    let two_stream = model.head_shoulder.is_some();
    let heads = if two_stream {
        head_shoulder_images(&prepped.images, cfg.head_size.0, cfg.head_size.1)?
    } else {
        Vec::new()
    };

    let sampler = PkSampler::new(cfg.p, cfg.k, cfg.seed)?;
    let mut opt = Sgd::new(SgdConfig {
        momentum: cfg.momentum,
        weight_decay: cfg.weight_decay,
    });
    let mut log_file = match &out.log_path {
        Some(p) => Some(create_writer(p)?),
        None => None,
    };

    let frozen: Vec<ParamId> = if cfg.freeze_head_shoulder {
        model.head_param_ids()
    } else {
        Vec::new()
    };
    let all: Vec<ParamId> = model.store.ids().filter(|id| !frozen.contains(id)).collect();
    let updates: Vec<Update> = if cfg.sequential_updates && two_stream {
        vec![
            Update {
                terms: &["l_t_g"],
                params: model.global_param_ids(),
            },
            Update {
                terms: &["l_t_h"],
                params: model.head_param_ids(),
            },
            Update {
                terms: &["l_id_joint", "l_id_g", "l_id_h", "l_t_joint"],
                params: all.clone(),
            },
        ]
    } else {
        vec![Update {
            terms: &[],
            params: all.clone(),
        }]
    };

    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.total_epochs {
        let lr = lr_at(epoch, cfg)?;
        for batch in sampler.epoch(&prepped.index, epoch as u64)? {
            step += 1;
            let labels: Vec<u32> = batch.iter().map(|&i| prepped.images[i].identity).collect();
            let (xg_t, xh_t) = batch_tensors(&prepped.images, &heads, &batch, cfg, step, two_stream)?;
            let mut logged = None;
            for (u, update) in updates.iter().enumerate() {
                let (bundle, grads, bn) = {
                    let mut cx = Ctx::train(&model.store);
                    let xg = cx.graph.constant(xg_t.clone());
                    let xh = xh_t.clone().map(|t| cx.graph.constant(t));
                    let vars = model.objective(&mut cx, xg, xh, &labels, cfg)?;
                    let bundle = total_loss(&vars.values(&cx))?;
                    let target = if update.terms.is_empty() {
                        vars.total
                    } else {
                        let picked: Vec<_> = update.terms.iter().filter_map(|t| vars.get(t)).collect();
                        let mut acc = picked[0];
                        for &v in &picked[1..] {
                            acc = cx.graph.add(acc, v);
                        }
                        acc
                    };
                    let grads: GradStore = cx.graph.backward(target);
                    (bundle, grads, cx.take_bn_updates())
                };
                opt.step(&mut model.store, &grads, lr, |id| update.params.contains(&id));
                model.clamp_gem();
                // Running statistics advance once per batch.
                if u == 0 {
                    apply_bn_updates(&mut model.store, &bn, cfg.bn_momentum);
                    logged = Some(bundle);
                }
            }
            let record = StepRecord {
                step,
                epoch: epoch + 1,
                losses: logged.expect("at least one update per batch"),
            };
            if let Some(w) = log_file.as_mut() {
                writeln!(w, "{}", record.to_json()).map_err(|e| log_error(out, e))?;
            }
            log.push(record);
        }
        if let Some(w) = log_file.as_mut() {
            w.flush().map_err(|e| log_error(out, e))?;
        }
        let this_epoch: Vec<f64> = log.iter().filter(|r| r.epoch == epoch + 1).map(|r| r.losses.total()).collect();
        log::info!(
            "epoch {}/{} lr {lr} mean total {:.4}",
            epoch + 1,
            cfg.total_epochs,
            this_epoch.iter().sum::<f64>() / this_epoch.len().max(1) as f64
        );
        if let Some(dir) = &out.checkpoint_dir {
            ReidCheckpoint::capture(cfg, epoch + 1, &model, gn.as_ref(), &data.index.original_ids, Some(&opt))
                .save(&dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
        }
    }
    Ok(TrainRun {
        config: cfg.clone(),
        model,
        gn,
        original_ids: data.index.original_ids.clone(),
        epochs_completed: cfg.total_epochs,
        log,
        optimizer: opt,
    })
}

fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| AgmError::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| AgmError::io(path, e))
}

fn log_error(out: &TrainOutputs, e: std::io::Error) -> AgmError {
    AgmError::io(out.log_path.clone().unwrap_or_default(), e)
}
