use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, snapshot_params, Checkpoint, RngState};
use super::loss::{total_loss, LossBreakdown};
use super::optim::Adam;
use super::schedule::lr_schedule;
use crate::config::RunConfig;
use crate::data::{make_batch, Batch, ImageArray, ModelInput};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, score_image, EvalReport};
use crate::model::DtmiNet;
use crate::nn::Ctx;

/// Stream of the dropout generator, kept apart from the batch-order streams.
const DROPOUT_STREAM: u64 = u64::MAX;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr: f64,
    pub seconds: f64,
}

/// Where and how a training run is persisted.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Directory receiving `train_log.jsonl`, `last.ckpt` and `best.ckpt`; nothing is
    /// written when `None`.
    pub run_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Accept a resume checkpoint whose architecture differs from the config.
    pub allow_config_override: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<TrainRecord>,
    /// Epochs run by this invocation.
    pub epochs_run: usize,
    pub total_steps: u64,
    pub best_score: Option<f64>,
}

/// Batch order of `epoch`: a permutation that depends only on `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Model, optimizer and generator state of a training run.
pub struct Trainer {
    net: DtmiNet,
    opt: Adam,
    dropout_rng: Option<ChaCha8Rng>,
    epoch: usize,
    step: u64,
    best_score: Option<f64>,
    dtype: DType,
    device: Device,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, dtype: DType, device: &Device) -> Result<Self> {
        let net = DtmiNet::new(cfg, dtype, device)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(DROPOUT_STREAM);
        Ok(Self {
            net,
            opt: Adam::new(cfg.weight_decay, cfg.grad_clip),
            dropout_rng: Some(rng),
            epoch: 0,
            step: 0,
            best_score: None,
            dtype,
            device: device.clone(),
        })
    }

    /// Continue from a checkpoint. `cfg` must describe the same architecture unless
    /// `allow_override` is set.
    pub fn resume(cfg: &RunConfig, path: &Path, allow_override: bool, dtype: DType, device: &Device) -> Result<Self> {
        let ckpt = load_checkpoint(path, device)?;
        if !allow_override {
            ckpt.check_config(cfg, path)?;
        }
        let mut t = Self::new(cfg, dtype, device)?;
        ckpt.apply(&t.net)?;
        t.opt.restore(ckpt.step, ckpt.adam_m, ckpt.adam_v);
        t.dropout_rng = Some(ckpt.rng.restore());
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        t.best_score = ckpt.best_score;
        Ok(t)
    }

    pub fn net(&self) -> &DtmiNet {
        &self.net
    }

    pub fn into_net(self) -> DtmiNet {
        self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Forward and backward pass in training mode without updating parameters.
    pub fn gradients(&mut self, batch: &Batch) -> Result<(LossBreakdown, GradStore)> {
        let ctx = Ctx::train(self.dropout_rng.take().expect("generator present between steps"));
        let result = (|| {
            let pred = self.net.forward(&batch.rgb, &batch.depth, &ctx)?;
            let (loss, breakdown) = total_loss(&pred, &batch.gt, &batch.edge, self.net.variant())?;
            // The BCE clamp maps NaN predictions to finite losses, so check the maps too.
            let mut finite = pred.s.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite();
            if let Some(e) = &pred.e {
                finite &= e.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite();
            }
            Ok::<_, candle_core::Error>((breakdown, loss, finite))
        })();
        self.dropout_rng = Some(ctx.into_rng());
        let (breakdown, loss, finite) = result?;
        let non_finite = Error::NonFiniteLoss {
            epoch: self.epoch,
            batch: self.step as usize,
        };
        if !finite || !breakdown.is_finite() {
            return Err(non_finite);
        }
        let grads = loss.backward()?;
        // ReLU maps NaN to zero in the forward pass, so a diverged layer can still
        // produce a finite loss; its gradients do not stay finite.
        for (_, var) in self.net.params().iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                if !g.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.is_finite() {
                    return Err(non_finite);
                }
            }
        }
        Ok((breakdown, grads))
    }

    /// One optimization step on `batch` at learning rate `lr`.
    pub fn train_step(&mut self, batch: &Batch, lr: f64) -> Result<LossBreakdown> {
        let (breakdown, grads) = self.gradients(batch)?;
        self.opt.step(self.net.params(), &grads, lr)?;
        self.step += 1;
        Ok(breakdown)
    }

    /// Mean absolute error of the saliency output over `samples`, in eval mode.
    pub fn evaluate_mae(&self, samples: &[ModelInput], batch_size: usize) -> Result<f64> {
        evaluate_mae(&self.net, samples, batch_size, self.dtype, &self.device)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let (m, v) = self.opt.moments();
        Ok(Checkpoint {
            config: self.net.config().clone(),
            epoch: self.epoch,
            step: self.step,
            params: snapshot_params(&self.net)?,
            adam_m: m.clone(),
            adam_v: v.clone(),
            rng: RngState::capture(self.dropout_rng.as_ref().expect("generator present between steps")),
            best_score: self.best_score,
        })
    }

    /// Train until `cfg.epochs` epochs (or `cfg.max_steps` steps) are complete.
    ///
    /// The model is scored after every epoch by validation MAE, or by the mean
    /// training loss of the epoch when there is no validation set; the best-scoring
    /// state is kept as `best.ckpt`.
    pub fn fit(
        &mut self,
        train_set: &[ModelInput],
        val_set: Option<&[ModelInput]>,
        opts: &TrainOptions,
    ) -> Result<TrainSummary> {
        if train_set.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let cfg = self.net.config().clone();
        let mut log = match &opts.run_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join("train_log.jsonl");
                let file = OpenOptions::new()
                    .create(true)
                    .append(self.epoch > 0)
                    .write(true)
                    .truncate(self.epoch == 0)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                Some((path, file))
            }
            None => None,
        };
        let batch_size = cfg.batch_size.max(1);
        let start = self.epoch;
        let mut records = Vec::new();
        'epochs: for epoch in start..cfg.epochs {
            if cfg.max_steps.is_some_and(|m| self.step >= m as u64) {
                break;
            }
            let lr = lr_schedule(epoch, &cfg);
            let order = epoch_order(cfg.seed, epoch, train_set.len());
            let mut epoch_loss = 0.0;
            let mut epoch_batches = 0usize;
            for chunk in order.chunks(batch_size) {
                if cfg.max_steps.is_some_and(|m| self.step >= m as u64) {
                    break;
                }
                let samples: Vec<&ModelInput> = chunk.iter().map(|&i| &train_set[i]).collect();
                let batch = make_batch(&samples, self.dtype, &self.device)?;
                let started = Instant::now();
                let loss = self.train_step(&batch, lr).map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => {
                        log::error!("non-finite loss on batch [{}]", batch.ids.join(", "));
                        Error::NonFiniteLoss {
                            epoch,
                            batch: self.step as usize,
                        }
                    }
                    other => other,
                })?;
                let record = TrainRecord {
                    epoch,
                    step: self.step,
                    loss,
                    lr,
                    seconds: started.elapsed().as_secs_f64(),
                };
                if let Some((path, file)) = log.as_mut() {
                    writeln!(file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&*path, e))?;
                }
                log::debug!("epoch {epoch} step {} loss {:.5}", self.step, loss.l);
                epoch_loss += loss.l;
                epoch_batches += 1;
                records.push(record);
            }
            if epoch_batches == 0 {
                break 'epochs;
            }
            self.epoch = epoch + 1;
            let score = match val_set {
                Some(val) if !val.is_empty() => self.evaluate_mae(val, batch_size)?,
                _ => epoch_loss / epoch_batches as f64,
            };
            let improved = self.best_score.is_none_or(|b| score < b);
            if improved {
                self.best_score = Some(score);
            }
            if let Some(dir) = &opts.run_dir {
                let ckpt = self.checkpoint()?;
                save_checkpoint(&ckpt, &dir.join("last.ckpt"))?;
                if improved {
                    save_checkpoint(&ckpt, &dir.join("best.ckpt"))?;
                }
            }
        }
        Ok(TrainSummary {
            epochs_run: self.epoch - start,
            total_steps: self.step,
            best_score: self.best_score,
            records,
        })
    }
}

/// Mean absolute error of the saliency output of `net` over `samples`, in eval mode.
pub fn evaluate_mae(
    net: &DtmiNet,
    samples: &[ModelInput],
    batch_size: usize,
    dtype: DType,
    device: &Device,
) -> Result<f64> {
    let mut total = 0.0;
    let mut pixels = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ModelInput> = chunk.iter().collect();
        let batch = make_batch(&refs, dtype, device)?;
        let s = net.forward(&batch.rgb, &batch.depth, &Ctx::eval())?.s;
        total += (s - &batch.gt)?
            .abs()?
            .to_dtype(DType::F64)?
            .sum_all()?
            .to_scalar::<f64>()?;
        pixels += batch.gt.elem_count();
    }
    Ok(total / pixels.max(1) as f64)
}

/// Predict saliency (and edge) maps for a batch, in eval mode.
pub fn predict_batch(net: &DtmiNet, batch: &Batch) -> Result<(Tensor, Option<Tensor>)> {
    let p = net.forward(&batch.rgb, &batch.depth, &Ctx::eval())?;
    Ok((p.s, p.e))
}

/// Train `cfg` on `train_set`, optionally resuming, and return the final model.
pub fn train(
    cfg: &RunConfig,
    train_set: &[ModelInput],
    val_set: Option<&[ModelInput]>,
    opts: &TrainOptions,
) -> Result<(DtmiNet, TrainSummary)> {
    let device = Device::Cpu;
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::resume(cfg, path, opts.allow_config_override, DType::F32, &device)?,
        None => Trainer::new(cfg, DType::F32, &device)?,
    };
    let summary = trainer.fit(train_set, val_set, opts)?;
    Ok((trainer.into_net(), summary))
}

/// Saliency (and edge) maps for preprocessed `[3,S,S]` inputs, in eval mode and in
/// input order.
pub fn predict_maps(
    net: &DtmiNet,
    inputs: &[(&ImageArray, &ImageArray)],
    batch_size: usize,
) -> Result<Vec<(ImageArray, Option<ImageArray>)>> {
    let device = net.device().clone();
    let to_array = |t: Tensor| -> Result<ImageArray> {
        let (c, h, w) = t.dims3()?;
        Ok(ImageArray::new(
            c,
            h,
            w,
            t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?,
        ))
    };
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch_size.max(1)) {
        let stack = |arrays: Vec<&ImageArray>| -> Result<Tensor> {
            let parts = arrays
                .into_iter()
                .map(|a| a.to_tensor(net.dtype(), &device))
                .collect::<candle_core::Result<Vec<_>>>()?;
            Ok(Tensor::stack(&parts, 0)?)
        };
        let rgb = stack(chunk.iter().map(|p| p.0).collect())?;
        let depth = stack(chunk.iter().map(|p| p.1).collect())?;
        let pred = net.forward(&rgb, &depth, &Ctx::eval())?;
        for i in 0..chunk.len() {
            let e = match &pred.e {
                Some(e) => Some(to_array(e.get(i)?)?),
                None => None,
            };
            out.push((to_array(pred.s.get(i)?)?, e));
        }
    }
    Ok(out)
}

/// Predict every sample in eval mode and score the saliency maps against their
/// (preprocessed) ground truth without writing anything to disk.
pub fn score_inputs(net: &DtmiNet, samples: &[ModelInput], batch_size: usize, dataset: &str) -> Result<EvalReport> {
    let pairs: Vec<_> = samples.iter().map(|s| (&s.rgb, &s.depth)).collect();
    let maps = predict_maps(net, &pairs, batch_size)?;
    let mut scores = Vec::with_capacity(samples.len());
    for (sample, (s, _)) in samples.iter().zip(&maps) {
        scores.push(score_image(s, &sample.gt)?);
    }
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    aggregate(dataset, &ids, &scores)
}

/// Rebuild the model stored in a checkpoint, on the CPU.
pub fn load_model(path: &Path) -> Result<(DtmiNet, Checkpoint)> {
    let device = Device::Cpu;
    let ckpt = load_checkpoint(path, &device)?;
    let net = DtmiNet::new(&ckpt.config, DType::F32, &device)?;
    ckpt.apply(&net)?;
    Ok((net, ckpt))
}
