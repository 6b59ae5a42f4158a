use std::time::Instant;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointHeader};
use super::config::{DataFormat, Scheme, TrainConfig};
use super::loss::{compute_class_weights, pixel_cross_entropy, ClassWeights};
use super::optim::Adam;
use crate::datasets::{
    adapt_cityscapes, cityscapes_spec, load_folder_dataset, temporal_split, DatasetSpec, Sample,
};
use crate::error::{Error, Result};
use crate::metrics::CategoryMap;
use crate::model::{fork_at, BackboneSpec, BiasHeadSpec, SegmentationModel};
use crate::nn::{ConvGrad, Layer, LayerKind};
use crate::tensor::Tensor;
use crate::transforms::{extract_bias_labels, BiasLabelSpec, Normalization};

/// Loss on one of the additional validation sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedLoss {
    pub name: String,
    pub loss: f64,
}

/// What happened during one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Reversal scale in effect (0 for baseline runs and warm-up epochs).
    pub grl_scale: f64,
    pub train_seg_loss: f64,
    pub val_seg_loss: f64,
    /// Mean bias-head loss; `None` for baseline runs.
    pub bias_loss: Option<f64>,
    pub extra_val: Vec<NamedLoss>,
    /// Seconds spent on the epoch, validation included.
    pub wall_time: f64,
}

/// Raw samples for one run, with the label metadata they share.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub class_names: Vec<String>,
    pub categories: CategoryMap,
    pub ignore_id: u8,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub extra_val: Vec<(String, Vec<Sample>)>,
}

impl TrainData {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    fn validate(&self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        if self.val.is_empty() {
            return Err(Error::Dataset("validation set is empty".into()));
        }
        self.categories.validate_for(self.num_classes())?;
        let all = self
            .train
            .iter()
            .chain(&self.val)
            .chain(self.extra_val.iter().flat_map(|(_, s)| s));
        for s in all {
            s.validate(self.num_classes(), self.ignore_id)?;
        }
        Ok(())
    }
}

/// Loads every dataset referenced by `cfg.data`.
pub fn load_train_data(cfg: &TrainConfig) -> Result<TrainData> {
    let d = &cfg.data;
    if !d.root.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} does not exist", d.root.display())));
    }
    let (spec, train_all) = match d.format {
        DataFormat::Folder => {
            let spec = DatasetSpec::from_manifest(&d.root, d.train_split)?;
            let samples = load_folder_dataset(&spec)?;
            (spec, samples)
        }
        DataFormat::Cityscapes => (cityscapes_spec(&d.root, d.train_split), adapt_cityscapes(&d.root, d.train_split)?),
    };
    let (train, val) = match d.train_fraction {
        Some(frac) => temporal_split(train_all, frac)?,
        None => {
            let val = match d.format {
                DataFormat::Folder => load_folder_dataset(&DatasetSpec::from_manifest(&d.root, d.val_split)?)?,
                DataFormat::Cityscapes => adapt_cityscapes(&d.root, d.val_split)?,
            };
            (train_all, val)
        }
    };
    let mut extra_val = Vec::new();
    for named in &d.extra_val {
        let extra = DatasetSpec::from_manifest(&named.root, named.split)?;
        if extra.class_names != spec.class_names {
            return Err(Error::Dataset(format!(
                "extra validation set `{}` has classes {:?}, expected {:?}",
                named.name, extra.class_names, spec.class_names
            )));
        }
        extra_val.push((named.name.clone(), load_folder_dataset(&extra)?));
    }
    Ok(TrainData {
        class_names: spec.class_names,
        categories: spec.category_map,
        ignore_id: spec.ignore_id,
        train,
        val,
        extra_val,
    })
}

/// A dataset converted once into network inputs and per-pixel targets.
#[derive(Debug, Clone)]
pub struct EvalSet {
    inputs: Vec<Tensor<f32>>,
    targets: Vec<Vec<u8>>,
    bias_targets: Vec<Vec<u8>>,
}

impl EvalSet {
    /// `feature_stride` is the spatial downsampling of `f`'s output; bias
    /// labels are taken from the top-left pixel of each cell.
    pub fn prepare(
        samples: &[Sample],
        norm: &Normalization,
        bins: BiasLabelSpec,
        feature_stride: usize,
    ) -> Result<Self> {
        let mut set = EvalSet {
            inputs: Vec::with_capacity(samples.len()),
            targets: Vec::with_capacity(samples.len()),
            bias_targets: Vec::with_capacity(samples.len()),
        };
        let Some(first) = samples.first() else {
            return Ok(set);
        };
        let dims = first.image.dimensions();
        for s in samples {
            if s.image.dimensions() != dims {
                return Err(Error::Dataset(format!(
                    "sample {} is {:?}, expected {:?}; all images in a set must share a size",
                    s.id,
                    s.image.dimensions(),
                    dims
                )));
            }
            set.inputs.push(norm.apply(&s.image)?);
            set.targets.push(s.mask.as_raw().clone());
            let labels = extract_bias_labels(&s.image, bins);
            set.bias_targets.push(subsample(&labels, feature_stride));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor<f32>, Vec<u8>, Vec<u8>)> {
        let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &self.inputs[i]).collect();
        let x = Tensor::stack(&refs)?;
        let t = idx.iter().flat_map(|&i| self.targets[i].iter().copied()).collect();
        let b = idx.iter().flat_map(|&i| self.bias_targets[i].iter().copied()).collect();
        Ok((x, t, b))
    }
}

fn subsample(labels: &GrayImage, stride: usize) -> Vec<u8> {
    if stride == 1 {
        return labels.as_raw().clone();
    }
    let (w, h) = labels.dimensions();
    let mut out = Vec::with_capacity((w as usize / stride) * (h as usize / stride));
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            out.push(labels.get_pixel(x, y)[0]);
        }
    }
    out
}

/// Spatial stride of the activations after the first `boundary` layers.
fn stride_at(layers: &[LayerKind], boundary: usize) -> usize {
    let mut level = 0i32;
    for k in &layers[..boundary] {
        match k {
            LayerKind::MaxPool => level += 1,
            LayerKind::UpConcat => level -= 1,
            _ => {}
        }
    }
    1usize << level.max(0)
}

fn param_shapes(layers: &[Layer<f32>]) -> Vec<usize> {
    layers
        .iter()
        .filter_map(Layer::conv)
        .flat_map(|c| [c.weight.len(), c.bias.len()])
        .collect()
}

fn param_slices(layers: &mut [Layer<f32>]) -> Vec<&mut [f32]> {
    let mut out = Vec::new();
    for c in layers.iter_mut().filter_map(Layer::conv_mut) {
        out.push(c.weight.as_mut_slice());
        out.push(c.bias.as_mut_slice());
    }
    out
}

fn grad_slices(grads: &[Option<ConvGrad<f32>>]) -> Vec<&[f32]> {
    grads
        .iter()
        .flatten()
        .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
        .collect()
}

/// Best and final states of a run plus its epoch logs.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State with the lowest validation segmentation loss.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub logs: Vec<EpochLog>,
}

/// Owns the model, optimiser state and prepared data of one training stream.
pub struct Trainer {
    cfg: TrainConfig,
    model: SegmentationModel<f32>,
    weights: ClassWeights,
    class_names: Vec<String>,
    categories: CategoryMap,
    ignore_id: u8,
    train: EvalSet,
    val: EvalSet,
    extra: Vec<(String, EvalSet)>,
    backbone_opt: Adam,
    head_opt: Adam,
    epoch: usize,
    logs: Vec<EpochLog>,
    best: Option<Checkpoint>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let weights = compute_class_weights(&data.train, data.num_classes(), data.ignore_id)?;
        let backbone = BackboneSpec::mini_seg(cfg.model.width, cfg.model.depth, data.num_classes())?;
        let bins = BiasLabelSpec::new(cfg.bias_bins)?;
        let head = BiasHeadSpec {
            hidden: cfg.model.bias_hidden,
            bias_classes: bins.num_bias_classes(),
        };
        let fork = cfg.model.fork_index.unwrap_or_else(|| backbone.default_fork());
        let model = fork_at(&backbone, fork, head, 0.0, cfg.seed)?;
        Self::assemble(cfg, data, model, weights, None)
    }

    /// Continues the stream saved in `ckpt`; `cfg.epochs` may be raised to train further.
    pub fn resume(ckpt: &Checkpoint, cfg: TrainConfig, data: TrainData) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        let h = &ckpt.header;
        if data.class_names != h.class_names {
            return Err(Error::Checkpoint(format!(
                "checkpoint classes {:?} differ from dataset classes {:?}",
                h.class_names, data.class_names
            )));
        }
        if cfg.epochs < h.epochs_completed {
            return Err(Error::Config(format!(
                "checkpoint already has {} epochs but epochs = {}",
                h.epochs_completed, cfg.epochs
            )));
        }
        let model = ckpt.model()?;
        let mut t = Self::assemble(cfg, data, model, h.class_weights.clone(), Some(ckpt))?;
        t.backbone_opt = ckpt.backbone_optimizer.clone();
        t.head_opt = ckpt.head_optimizer.clone();
        t.epoch = h.epochs_completed;
        t.logs = h.logs.clone();
        Ok(t)
    }

    fn assemble(
        cfg: TrainConfig,
        data: TrainData,
        model: SegmentationModel<f32>,
        weights: ClassWeights,
        resumed: Option<&Checkpoint>,
    ) -> Result<Self> {
        let bins = BiasLabelSpec::new(cfg.bias_bins)?;
        let stride = stride_at(&model.backbone().layers, model.fork_index());
        let prep = |s: &[Sample]| EvalSet::prepare(s, &cfg.normalization, bins, stride);
        let train = prep(&data.train)?;
        let val = prep(&data.val)?;
        let extra = data
            .extra_val
            .iter()
            .map(|(n, s)| Ok((n.clone(), prep(s)?)))
            .collect::<Result<Vec<_>>>()?;
        let backbone_opt = Adam::new(&param_shapes(model.backbone_layers()));
        let head_opt = Adam::new(&param_shapes(model.bias_head()));
        Ok(Trainer {
            model,
            weights,
            class_names: data.class_names,
            categories: data.categories,
            ignore_id: data.ignore_id,
            train,
            val,
            extra,
            backbone_opt,
            head_opt,
            epoch: 0,
            logs: Vec::new(),
            best: resumed.cloned(),
            cfg,
        })
    }

    pub fn model(&self) -> &SegmentationModel<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn class_weights(&self) -> &ClassWeights {
        &self.weights
    }

    pub fn epochs_completed(&self) -> usize {
        self.epoch
    }

    pub fn logs(&self) -> &[EpochLog] {
        &self.logs
    }

    /// Weighted segmentation loss over the validation set.
    pub fn validation_loss(&self) -> Result<f64> {
        self.set_loss(&self.val)
    }

    fn set_loss(&self, set: &EvalSet) -> Result<f64> {
        let idx: Vec<usize> = (0..set.len()).collect();
        let (mut total, mut count) = (0.0f64, 0usize);
        for chunk in idx.chunks(self.cfg.batch_size) {
            let (x, t, _) = set.batch(chunk)?;
            if t.iter().all(|&v| v == self.ignore_id) {
                continue;
            }
            let logits = self.model.segment(&x)?;
            let out = pixel_cross_entropy(&logits, &t, Some(&self.weights), Some(self.ignore_id), false)?;
            total += out.loss * out.valid_pixels as f64;
            count += out.valid_pixels;
        }
        if count == 0 {
            return Err(Error::Dataset("every validation pixel is ignored".into()));
        }
        Ok(total / count as f64)
    }

    /// Trains one epoch and appends its log.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let start = Instant::now();
        let e = self.epoch;
        let cfg = &self.cfg;
        let lr = cfg.lr_at(e);
        let lambda = cfg.grl_scale_at(e);
        let lntl = cfg.scheme == Scheme::Lntl;
        let adversarial = lntl && e >= cfg.warmup_epochs;
        let mu = cfg.bias_loss_weight;
        self.model.set_grl_scale(lambda)?;

        let mut order: Vec<usize> = (0..self.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2 + e as u64);
        order.shuffle(&mut rng);

        let (mut seg_sum, mut seg_px) = (0.0f64, 0usize);
        let (mut bias_sum, mut bias_px) = (0.0f64, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, targets, bias_targets) = self.train.batch(chunk)?;
            if targets.iter().all(|&v| v == self.ignore_id) {
                continue;
            }
            let pass = self.model.forward_train(&x, lntl)?;
            let seg = pixel_cross_entropy(&pass.seg_logits, &targets, Some(&self.weights), Some(self.ignore_id), true)?;
            if !seg.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "segmentation loss {} at epoch {e}, batch {b}, lr {lr}",
                    seg.loss
                )));
            }
            seg_sum += seg.loss * seg.valid_pixels as f64;
            seg_px += seg.valid_pixels;
            let mut bias_grad = None;
            if let Some(bias_logits) = pass.bias_logits.as_ref() {
                let bias = pixel_cross_entropy(bias_logits, &bias_targets, None, None, adversarial)?;
                if !bias.loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "bias loss {} at epoch {e}, batch {b}, lr {lr}",
                        bias.loss
                    )));
                }
                bias_sum += bias.loss * bias.valid_pixels as f64;
                bias_px += bias.valid_pixels;
                bias_grad = bias.grad.map(|g| g.map(|v| v * mu as f32));
            }
            let grads = self.model.backward(pass, seg.grad.expect("gradient requested"), bias_grad)?;
            self.backbone_opt
                .step(lr, param_slices(self.model.backbone_layers_mut()), grad_slices(&grads.backbone))?;
            if adversarial {
                self.head_opt
                    .step(lr, param_slices(self.model.head_layers_mut()), grad_slices(&grads.head))?;
            }
        }
        if seg_px == 0 {
            return Err(Error::Dataset("every training pixel is ignored".into()));
        }

        let val_seg_loss = self.validation_loss()?;
        let extra_val = self
            .extra
            .iter()
            .map(|(name, set)| {
                Ok(NamedLoss {
                    name: name.clone(),
                    loss: self.set_loss(set)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let log = EpochLog {
            epoch: e,
            lr,
            grl_scale: lambda,
            train_seg_loss: seg_sum / seg_px as f64,
            val_seg_loss,
            bias_loss: (bias_px > 0).then(|| bias_sum / bias_px as f64),
            extra_val,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {e}: lr {lr:.2e} train {:.4} val {:.4}{}",
            log.train_seg_loss,
            log.val_seg_loss,
            log.bias_loss.map(|b| format!(" bias {b:.4}")).unwrap_or_default()
        );
        self.epoch += 1;
        self.logs.push(log.clone());
        let improved = self
            .best
            .as_ref()
            .is_none_or(|b| log.val_seg_loss < b.header.val_seg_loss);
        if improved {
            self.best = Some(self.checkpoint(val_seg_loss));
        }
        Ok(log)
    }

    /// Trains until `cfg.epochs` epochs are complete.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.epoch < self.cfg.epochs {
            self.run_epoch()?;
        }
        let val = self.validation_loss()?;
        let last = self.checkpoint(val);
        Ok(TrainOutcome {
            best: self.best.unwrap_or_else(|| last.clone()),
            last,
            logs: self.logs,
        })
    }

    /// Snapshot of the current state.
    pub fn checkpoint(&self, val_seg_loss: f64) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                backbone: self.model.backbone().clone(),
                bias_head: self.model.head_spec(),
                fork_index: self.model.fork_index(),
                grl_scale: self.model.grl().scale(),
                epochs_completed: self.epoch,
                val_seg_loss,
                config: self.cfg.clone(),
                class_weights: self.weights.clone(),
                class_names: self.class_names.clone(),
                categories: self.categories.clone(),
                ignore_id: self.ignore_id,
                logs: self.logs.clone(),
            },
            params: self.model.flat_params(),
            backbone_optimizer: self.backbone_opt.clone(),
            head_optimizer: self.head_opt.clone(),
        }
    }
}

fn train_scheme(cfg: &TrainConfig, scheme: Scheme) -> Result<TrainOutcome> {
    if cfg.scheme != scheme {
        return Err(Error::Config(format!(
            "config scheme is {} but {} training was requested",
            cfg.scheme.as_str(),
            scheme.as_str()
        )));
    }
    cfg.validate()?;
    let data = load_train_data(cfg)?;
    Trainer::new(cfg.clone(), data)?.run()
}

/// Trains `g(f(x))` on the weighted segmentation loss alone.
pub fn train_baseline(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_scheme(cfg, Scheme::Baseline)
}

/// Warm-up without the bias head, then joint training with the reversed bias gradient.
pub fn train_lntl(cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_scheme(cfg, Scheme::Lntl)
}
