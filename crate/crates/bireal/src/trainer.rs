//! Training orchestration.
//!
//! The full pipeline is: optionally pre-train a real-valued twin of the
//! network (clipped or ReLU activations), continue with binary training
//! (sign activations, binarized weights, surrogate gradients against real
//! master weights), then collapse the binarized weights to exact ±1, fold
//! their magnitude scales into the normalization statistics, and retrain
//! only the normalization layers for one epoch. The result is an
//! inference-ready model whose trunk runs as XNOR + popcount.
//!
//! Every random draw (initialization, shuffles) comes from one seeded
//! stream in a fixed order, so a (spec, data, config) triple names exactly
//! one trained model, byte for byte.

use crate::data::{DataBundle, Dataset};
use crate::error::{Error, Result};
use crate::model::{build, NetParams, NetworkSpec, Variant};
use crate::net::{
    apply_bn_updates, apply_sgd, backward, forward, forward_logits, BinarySettings, Mode,
    WeightUpdate,
};
use crate::ops::{magnitude_scales, ScaleScope, SgdState, SurrogateKind};
use crate::layers::{softmax_cross_entropy, topk_hits};
use crate::tensor::{snap_f32, RealTensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// How the network starts before binary training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitKind {
    /// Pre-train a real twin with activations clipped to [-1, 1], so the
    /// twin's activations already live where the sign function looks at
    /// them.
    Clip,
    /// Pre-train a real twin with ReLU activations.
    Relu,
    /// No pre-training; binary training starts from random weights.
    Random,
}

impl InitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InitKind::Clip => "clip",
            InitKind::Relu => "relu",
            InitKind::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(InitKind::Clip),
            "relu" => Ok(InitKind::Relu),
            "random" => Ok(InitKind::Random),
            other => Err(Error::InvalidConfig(format!(
                "unknown init `{other}` (expected clip, relu, or random)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub init: InitKind,
    pub weight_update: WeightUpdate,
    pub act_backward: SurrogateKind,
    pub scale_scope: ScaleScope,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is divided by 10 (cumulative).
    pub milestones: Vec<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: short pre-training, tenfold decays at 50% and
    /// 75% of the epoch budget.
    pub fn desk_default(epochs: usize) -> Self {
        let mut milestones: Vec<usize> = [epochs / 2, epochs * 3 / 4]
            .into_iter()
            .filter(|&m| m > 0 && m < epochs)
            .collect();
        milestones.dedup();
        Self {
            init: InitKind::Clip,
            weight_update: WeightUpdate::MagnitudeAware,
            act_backward: SurrogateKind::PiecewisePoly,
            scale_scope: ScaleScope::PerKernel,
            pretrain_epochs: 2,
            epochs,
            batch_size: 32,
            lr: 0.01,
            milestones,
            seed: 7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("need at least one training epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        // lr 0 is legal: the run becomes a pure forward sweep whose final
        // sign pattern equals the initialization's.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::InvalidConfig(format!("learning rate {} unusable", self.lr)));
        }
        Ok(())
    }

    pub fn settings(&self) -> BinarySettings {
        BinarySettings {
            weight_update: self.weight_update,
            act_backward: self.act_backward,
            scale_scope: self.scale_scope,
        }
    }

    /// Learning rate in effect during `epoch` of the binary phase.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * 0.1f64.powi(decays as i32)
    }

    fn pretrain_mode(&self) -> Option<Mode> {
        match self.init {
            InitKind::Clip => Some(Mode::PretrainClip),
            InitKind::Relu => Some(Mode::PretrainRelu),
            InitKind::Random => None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRow {
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub network: String,
    pub variant: Variant,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRow>,
    /// Accuracy of the float binary-training path before weight collapse.
    pub final_val_acc: f64,
    pub final_val_top5: Option<f64>,
    /// Accuracy of the packed trunk after collapse and BN retraining.
    pub post_absorb_val_acc: f64,
    /// Fraction of test samples whose predicted class is unchanged by the
    /// collapse.
    pub infer_vs_train_agreement: f64,
    pub wall_seconds: f64,
}

pub struct EvalResult {
    pub top1: f64,
    pub top5: Option<f64>,
    pub predictions: Vec<usize>,
}

fn argmax_rows(logits: &RealTensor) -> Vec<usize> {
    let (n, k) = logits.dims2().unwrap();
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Accuracy over a dataset. Batch norm runs on running statistics; results
/// do not depend on the evaluation batch split.
pub fn evaluate(
    params: &NetParams,
    spec: &NetworkSpec,
    ds: &Dataset,
    mode: Mode,
) -> Result<EvalResult> {
    if ds.is_empty() {
        return Err(Error::InvalidConfig("cannot evaluate on an empty dataset".into()));
    }
    let mut predictions = Vec::with_capacity(ds.len());
    let mut top1_hits = 0usize;
    let mut top5_hits = 0usize;
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(256) {
        let (x, labels) = ds.gather(chunk);
        let logits = forward_logits(params, spec, &x, mode)?;
        top1_hits += topk_hits(&logits, &labels, 1)?;
        if ds.num_classes > 5 {
            top5_hits += topk_hits(&logits, &labels, 5)?;
        }
        predictions.extend(argmax_rows(&logits));
    }
    let n = ds.len() as f64;
    Ok(EvalResult {
        top1: top1_hits as f64 / n,
        top5: (ds.num_classes > 5).then(|| top5_hits as f64 / n),
        predictions,
    })
}

/// One shuffled pass over the training set: forward, loss, backward, SGD
/// step, running-statistic update per batch. Returns (mean loss, accuracy
/// over the training logits as seen during the pass).
fn epoch_pass(
    spec: &NetworkSpec,
    params: &mut NetParams,
    data: &Dataset,
    mode: Mode,
    batch_size: usize,
    lr: f64,
    epoch: usize,
    sgd: &mut SgdState,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut hits = 0usize;
    for chunk in order.chunks(batch_size) {
        let (x, labels) = data.gather(chunk);
        let (logits, tape) = forward(params, spec, &x, mode, true)?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        loss_sum += loss * chunk.len() as f64;
        hits += topk_hits(&logits, &labels, 1)?;
        let grads = backward(&tape, params, &dlogits)?;
        apply_sgd(params, &grads, sgd, lr);
        apply_bn_updates(params, &tape);
    }
    let n = data.len() as f64;
    Ok((loss_sum / n, hits as f64 / n))
}

/// Collapse binarized weights to exact ±1 and make the model inference
/// ready.
///
/// The float training path ran each binarized convolution with weights
/// s * sign(w); the packed trunk runs plain sign(w). Dividing the stored
/// normalization statistics by s (per channel or per layer, matching the
/// training scope) re-centers them for the unscaled outputs, then one epoch
/// of training with every weight frozen lets the affine normalization
/// parameters and running statistics settle against the collapsed trunk.
/// Returns the retraining epoch's (mean loss, train accuracy).
pub fn absorb_bn_and_freeze(
    spec: &NetworkSpec,
    params: &mut NetParams,
    train: &Dataset,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let scoped = cfg.weight_update == WeightUpdate::MagnitudeAware;
    for b in &mut params.blocks {
        for (conv, bn) in [(&mut b.conv1, &mut b.bn1)]
            .into_iter()
            .chain(b.conv2.as_mut().zip(b.bn2.as_mut()))
        {
            if scoped {
                let scales = magnitude_scales(&conv.weight, cfg.scale_scope);
                for (c, (m, v)) in bn
                    .running_mean
                    .iter_mut()
                    .zip(bn.running_var.iter_mut())
                    .enumerate()
                {
                    let s = match cfg.scale_scope {
                        ScaleScope::PerLayer => scales[0],
                        ScaleScope::PerKernel => scales[c],
                    };
                    if s > 0.0 {
                        *m = snap_f32(*m / s);
                        *v = snap_f32(*v / (s * s));
                    }
                }
            }
            conv.weight = crate::ops::sign_forward(&conv.weight);
            conv.frozen = true;
        }
        if let Some((dc, _)) = &mut b.downsample {
            dc.frozen = true;
        }
    }
    params.stem.frozen = true;
    params.fc.frozen = true;
    params.inference_ready = true;

    let mut sgd = SgdState::new(0.9);
    let lr = cfg.lr_at(cfg.epochs.saturating_sub(1));
    epoch_pass(
        spec,
        params,
        train,
        Mode::BinaryTrain(cfg.settings()),
        cfg.batch_size,
        lr,
        cfg.epochs,
        &mut sgd,
        rng,
    )
}

/// The whole pipeline: build, optional real pre-training, binary training
/// with the step schedule, weight collapse plus normalization retraining,
/// and final evaluation of both the float path and the packed trunk.
pub fn train_full(
    spec: &NetworkSpec,
    data: &DataBundle,
    cfg: &TrainConfig,
) -> Result<(NetParams, RunReport)> {
    let t0 = Instant::now();
    spec.validate()?;
    cfg.validate()?;
    for (ds, what) in [(&data.train, "training"), (&data.test, "test")] {
        if ds.is_empty() {
            return Err(Error::InvalidConfig(format!("{what} set is empty")));
        }
        if ds.num_classes != spec.num_classes {
            return Err(Error::ShapeMismatch {
                context: "train_full",
                axis: "classes",
                expected: spec.num_classes,
                got: ds.num_classes,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = build(spec, &mut rng)?;
    let mut rows = Vec::new();

    if let Some(mode) = cfg.pretrain_mode() {
        let mut sgd = SgdState::new(0.9);
        for epoch in 0..cfg.pretrain_epochs {
            let (loss, acc) = epoch_pass(
                spec,
                &mut params,
                &data.train,
                mode,
                cfg.batch_size,
                cfg.lr,
                epoch,
                &mut sgd,
                &mut rng,
            )?;
            let val = evaluate(&params, spec, &data.test, mode)?.top1;
            rows.push(EpochRow {
                phase: "pretrain".into(),
                epoch,
                lr: cfg.lr,
                train_loss: loss,
                train_acc: acc,
                val_acc: val,
            });
        }
    }

    let mode = Mode::BinaryTrain(cfg.settings());
    let mut sgd = SgdState::new(0.9);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let (loss, acc) = epoch_pass(
            spec,
            &mut params,
            &data.train,
            mode,
            cfg.batch_size,
            lr,
            epoch,
            &mut sgd,
            &mut rng,
        )?;
        let val = evaluate(&params, spec, &data.test, mode)?.top1;
        rows.push(EpochRow {
            phase: "binary".into(),
            epoch,
            lr,
            train_loss: loss,
            train_acc: acc,
            val_acc: val,
        });
    }

    let pre = evaluate(&params, spec, &data.test, mode)?;
    let (retrain_loss, retrain_acc) =
        absorb_bn_and_freeze(spec, &mut params, &data.train, cfg, &mut rng)?;
    let post = evaluate(&params, spec, &data.test, Mode::BinaryInfer)?;
    rows.push(EpochRow {
        phase: "bn_retrain".into(),
        epoch: cfg.epochs,
        lr: cfg.lr_at(cfg.epochs.saturating_sub(1)),
        train_loss: retrain_loss,
        train_acc: retrain_acc,
        val_acc: post.top1,
    });

    let agree = pre
        .predictions
        .iter()
        .zip(&post.predictions)
        .filter(|(a, b)| a == b)
        .count() as f64
        / pre.predictions.len() as f64;

    let report = RunReport {
        network: spec.name.clone(),
        variant: spec.variant,
        config: cfg.clone(),
        epochs: rows,
        final_val_acc: pre.top1,
        final_val_top5: pre.top5,
        post_absorb_val_acc: post.top1,
        infer_vs_train_agreement: agree,
        wall_seconds: t0.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

/// One cell of the training-method grid.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub variant: Variant,
    pub init: InitKind,
    pub weight_update: WeightUpdate,
    pub act_backward: SurrogateKind,
    /// Final validation accuracy of the binary training path, or the error
    /// that stopped the cell.
    pub outcome: std::result::Result<f64, String>,
}

/// Train every combination of the given axes under one shared seed and data
/// bundle, so cells differ only in method. A failing cell records its error
/// and the grid continues.
pub fn run_ablation(
    spec: &NetworkSpec,
    data: &DataBundle,
    base: &TrainConfig,
    variants: &[Variant],
    inits: &[InitKind],
    weight_updates: &[WeightUpdate],
    act_backwards: &[SurrogateKind],
) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &variant in variants {
        let vspec = spec.with_variant(variant);
        for &init in inits {
            for &weight_update in weight_updates {
                for &act_backward in act_backwards {
                    let mut cfg = base.clone();
                    cfg.init = init;
                    cfg.weight_update = weight_update;
                    cfg.act_backward = act_backward;
                    let outcome = train_full(&vspec, data, &cfg)
                        .map(|(_, report)| report.final_val_acc)
                        .map_err(|e| e.to_string());
                    cells.push(AblationCell { variant, init, weight_update, act_backward, outcome });
                }
            }
        }
    }
    cells
}
