//! Downstream training: whole-volume classification and dense segmentation.
//!
//! Both loops share the pretraining skeleton (seeded shuffles, per-step or
//! per-epoch evaluation, deterministic wall-clock pinning) and differ only in
//! the model, loss, and test metric.

use super::metrics::{accuracy, mean_iou, MetricsRecord, MetricsReport};
use super::sgd::Sgd;
use super::{load_split, DataSplits, InitStrategy, Phase, TrainConfig};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::losses::{permutation_loss_grad as ce_grad, permutation_loss as ce};
use crate::model::{
    apply_checkpoint, load_checkpoint, CheckpointMeta, ClassifyModel, SegModel, TransferReport,
};
use crate::nn::{Grads, Role};
use crate::scalar::Scalar;
use crate::volumes::LabeledVolume;
use ndarray::{Array1, Array3, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::time::Instant;

pub struct FinetuneOutput<M> {
    pub model: M,
    pub meta: CheckpointMeta,
    pub report: MetricsReport,
    pub transfer: Option<TransferReport>,
}

fn init_encoder<F: Scalar>(
    store: &mut crate::nn::ParamStore<F>,
    init: &InitStrategy,
) -> Result<(Option<TransferReport>, Option<String>)> {
    match init {
        InitStrategy::Scratch => Ok((None, None)),
        InitStrategy::Checkpoint(path) => {
            let ckpt = load_checkpoint(path)?;
            let bank = ckpt.meta.bank_sha256.clone();
            let report = apply_checkpoint(store, &ckpt, &[Role::Encoder])?;
            Ok((Some(report), bank))
        }
    }
}

fn frozen_roles(cfg: &TrainConfig) -> Vec<Role> {
    if cfg.freeze_encoder {
        vec![Role::Encoder]
    } else {
        Vec::new()
    }
}

fn check_labels<F: Scalar>(split: &str, volumes: &[LabeledVolume<F>], num_classes: usize) -> Result<()> {
    for (i, v) in volumes.iter().enumerate() {
        match v.class_label {
            None => {
                return Err(Error::Data(format!(
                    "classification needs class labels: {split} volume {i} has none"
                )))
            }
            Some(l) if l >= num_classes => {
                return Err(Error::Data(format!(
                    "{split} volume {i} has label {l} outside {num_classes} classes"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn check_masks<F: Scalar>(split: &str, volumes: &[LabeledVolume<F>], num_classes: usize) -> Result<()> {
    for (i, v) in volumes.iter().enumerate() {
        let mask = v.mask.as_ref().ok_or_else(|| {
            Error::Data(format!(
                "segmentation needs masks: {split} volume {i} has none"
            ))
        })?;
        if let Some(&bad) = mask.iter().find(|&&m| (m as usize) >= num_classes) {
            return Err(Error::Data(format!(
                "{split} volume {i} mask has value {bad} outside {num_classes} classes"
            )));
        }
    }
    Ok(())
}

/// Mean per-voxel cross-entropy and its logit gradient.
fn voxel_ce_grad<F: Scalar>(
    logits: &Array4<F>,
    target: &Array3<u8>,
) -> Result<(f64, Array4<F>)> {
    let (c, x, y, z) = logits.dim();
    if target.dim() != (x, y, z) {
        return Err(Error::shape(
            "voxel cross-entropy",
            format!("{:?}", (x, y, z)),
            format!("{:?}", target.dim()),
        ));
    }
    let nvox = (x * y * z) as f64;
    let inv = F::from_f64(1.0 / nvox);
    let mut grad = Array4::<F>::zeros((c, x, y, z));
    let mut loss = 0.0;
    for ix in 0..x {
        for iy in 0..y {
            for iz in 0..z {
                let t = target[[ix, iy, iz]] as usize;
                let mut max = F::neg_infinity();
                for ic in 0..c {
                    max = max.max(logits[[ic, ix, iy, iz]]);
                }
                let mut sum = F::zero();
                for ic in 0..c {
                    sum += (logits[[ic, ix, iy, iz]] - max).exp();
                }
                let lse = max + sum.ln();
                loss += (lse - logits[[t, ix, iy, iz]]).as_f64();
                for ic in 0..c {
                    let p = (logits[[ic, ix, iy, iz]] - lse).exp();
                    let onehot = if ic == t { F::one() } else { F::zero() };
                    grad[[ic, ix, iy, iz]] = (p - onehot) * inv;
                }
            }
        }
    }
    Ok((loss / nvox, grad))
}

fn argmax1<F: Scalar>(v: &Array1<F>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Per-voxel argmax over the class axis.
fn argmax_voxels<F: Scalar>(logits: &Array4<F>) -> Array3<u8> {
    let (c, x, y, z) = logits.dim();
    Array3::from_shape_fn((x, y, z), |(ix, iy, iz)| {
        let mut best = 0usize;
        for ic in 1..c {
            if logits[[ic, ix, iy, iz]] > logits[[best, ix, iy, iz]] {
                best = ic;
            }
        }
        best as u8
    })
}

/// Test-split outcome: the task metric (accuracy or mean IoU) and the mean
/// test loss.
#[derive(Debug, Clone, Copy)]
pub struct EvalOutcome {
    pub metric: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy on labeled volumes.
pub fn evaluate_cls<F: Scalar>(
    model: &ClassifyModel<F>,
    volumes: &[LabeledVolume<F>],
) -> Result<EvalOutcome> {
    if volumes.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    check_labels("eval", volumes, model.num_classes)?;
    let outcomes: Vec<Result<(usize, f64)>> = volumes
        .par_iter()
        .map(|v| {
            let (logits, _) = model.forward(&v.volume.data)?;
            let loss = ce(&logits, v.class_label.unwrap())?;
            Ok((argmax1(&logits), loss.as_f64()))
        })
        .collect();
    let mut preds = Vec::with_capacity(volumes.len());
    let mut loss_sum = 0.0;
    for o in outcomes {
        let (p, l) = o?;
        preds.push(p);
        loss_sum += l;
    }
    let labels: Vec<usize> = volumes.iter().map(|v| v.class_label.unwrap()).collect();
    Ok(EvalOutcome {
        metric: accuracy(&preds, &labels)?,
        loss: loss_sum / volumes.len() as f64,
    })
}

/// Mean of per-volume mean IoU plus mean per-voxel cross-entropy on masked
/// volumes.
pub fn evaluate_seg<F: Scalar>(
    model: &SegModel<F>,
    volumes: &[LabeledVolume<F>],
    num_classes: usize,
) -> Result<EvalOutcome> {
    if volumes.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    check_masks("eval", volumes, num_classes)?;
    let outcomes: Vec<Result<(f64, f64)>> = volumes
        .par_iter()
        .map(|v| {
            let mask = v.mask.as_ref().unwrap();
            let (logits, _) = model.forward(&v.volume.data)?;
            let (loss, _) = voxel_ce_grad(&logits, mask)?;
            let pred = argmax_voxels(&logits);
            let (_, miou) = mean_iou(&pred, mask, num_classes)?;
            Ok((miou, loss))
        })
        .collect();
    let mut miou_sum = 0.0;
    let mut loss_sum = 0.0;
    for o in outcomes {
        let (m, l) = o?;
        miou_sum += m;
        loss_sum += l;
    }
    let n = volumes.len() as f64;
    Ok(EvalOutcome {
        metric: miou_sum / n,
        loss: loss_sum / n,
    })
}

pub fn finetune_cls<F: Scalar>(
    cfg: &TrainConfig,
    data: &DataSplits,
) -> Result<FinetuneOutput<ClassifyModel<F>>> {
    cfg.validate()?;
    if cfg.phase != Phase::FinetuneCls {
        return Err(Error::Config(format!(
            "finetune_cls requires the finetune_cls phase, got {}",
            cfg.phase.as_str()
        )));
    }
    let train = load_split::<F>(&data.train)?;
    let test = load_split::<F>(&data.test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("finetuning needs non-empty train and test splits".into()));
    }
    check_labels("train", &train, cfg.num_classes)?;
    check_labels("test", &test, cfg.num_classes)?;

    let mut model = ClassifyModel::<F>::new(&cfg.backbone, cfg.num_classes, cfg.seed)?;
    let (transfer, bank_sha) = init_encoder(&mut model.store, &cfg.init)?;
    let mut opt = Sgd::new(&model.store, cfg.learning_rate, cfg.momentum);
    let frozen = frozen_roles(cfg);

    let eval = |model: &ClassifyModel<F>| evaluate_cls(model, &test);

    let hash = cfg.config_hash();
    let t0 = Instant::now();
    let mut report = MetricsReport::default();
    let record = |ev: &EvalOutcome, epoch: usize, step: u64, train_loss: Option<f64>, t0: &Instant| MetricsRecord {
        phase: cfg.phase.as_str().into(),
        epoch,
        step,
        loss_total: Some(train_loss.unwrap_or(ev.loss)),
        loss_perm: None,
        loss_rot: None,
        ordering_acc: None,
        orientation_acc: None,
        cls_acc: Some(ev.metric),
        miou: None,
        wall_clock_s: if cfg.deterministic { 0.0 } else { t0.elapsed().as_secs_f64() },
        config_hash: hash.clone(),
    };
    report.push(record(&eval(&model)?, 0, 0, None, &t0));

    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 0xE0 + epoch as u64));
        order.shuffle(&mut rng);
        let mut ep_loss = 0.0;
        let mut ep_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Grads<F>)>> = chunk
                .par_iter()
                .map(|&i| {
                    let v = &train[i];
                    let (logits, cache) = model.forward(&v.volume.data)?;
                    let (loss, dlogits) = ce_grad(&logits, v.class_label.unwrap())?;
                    let mut grads = Grads::zeros_like(&model.store);
                    model.backward(&cache, &dlogits, &mut grads);
                    Ok((loss.as_f64(), grads))
                })
                .collect();
            let mut loss_sum = 0.0;
            let mut total: Option<Grads<F>> = None;
            for r in results {
                let (l, g) = r?;
                loss_sum += l;
                match &mut total {
                    None => total = Some(g),
                    Some(t) => t.add_assign(&g),
                }
            }
            let mut grads = total.unwrap();
            grads.scale(F::from_f64(1.0 / chunk.len() as f64));
            opt.step(&mut model.store, &grads, &frozen);
            ep_loss += loss_sum / chunk.len() as f64;
            ep_batches += 1;
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0 {
                report.push(record(&eval(&model)?, epoch, step, None, &t0));
            }
        }
        if cfg.eval_every == 0 {
            let train_loss = ep_loss / ep_batches.max(1) as f64;
            report.push(record(&eval(&model)?, epoch, step, Some(train_loss), &t0));
        }
    }

    let meta = CheckpointMeta {
        phase: cfg.phase.as_str().into(),
        step,
        seed: cfg.seed,
        backbone: cfg.backbone.clone(),
        bank_sha256: bank_sha,
    };
    Ok(FinetuneOutput {
        model,
        meta,
        report,
        transfer,
    })
}

pub fn finetune_seg<F: Scalar>(
    cfg: &TrainConfig,
    data: &DataSplits,
) -> Result<FinetuneOutput<SegModel<F>>> {
    cfg.validate()?;
    if cfg.phase != Phase::FinetuneSeg {
        return Err(Error::Config(format!(
            "finetune_seg requires the finetune_seg phase, got {}",
            cfg.phase.as_str()
        )));
    }
    let train = load_split::<F>(&data.train)?;
    let test = load_split::<F>(&data.test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("finetuning needs non-empty train and test splits".into()));
    }
    check_masks("train", &train, cfg.num_seg_classes)?;
    check_masks("test", &test, cfg.num_seg_classes)?;

    let mut model = SegModel::<F>::new(&cfg.backbone, cfg.num_seg_classes, cfg.seed)?;
    let (transfer, bank_sha) = init_encoder(&mut model.store, &cfg.init)?;
    let mut opt = Sgd::new(&model.store, cfg.learning_rate, cfg.momentum);
    let frozen = frozen_roles(cfg);

    let eval = |model: &SegModel<F>| evaluate_seg(model, &test, cfg.num_seg_classes);

    let hash = cfg.config_hash();
    let t0 = Instant::now();
    let mut report = MetricsReport::default();
    let record = |ev: &EvalOutcome, epoch: usize, step: u64, train_loss: Option<f64>, t0: &Instant| MetricsRecord {
        phase: cfg.phase.as_str().into(),
        epoch,
        step,
        loss_total: Some(train_loss.unwrap_or(ev.loss)),
        loss_perm: None,
        loss_rot: None,
        ordering_acc: None,
        orientation_acc: None,
        cls_acc: None,
        miou: Some(ev.metric),
        wall_clock_s: if cfg.deterministic { 0.0 } else { t0.elapsed().as_secs_f64() },
        config_hash: hash.clone(),
    };
    report.push(record(&eval(&model)?, 0, 0, None, &t0));

    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 0xE0 + epoch as u64));
        order.shuffle(&mut rng);
        let mut ep_loss = 0.0;
        let mut ep_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, Grads<F>)>> = chunk
                .par_iter()
                .map(|&i| {
                    let v = &train[i];
                    let (logits, cache) = model.forward(&v.volume.data)?;
                    let (loss, dlogits) = voxel_ce_grad(&logits, v.mask.as_ref().unwrap())?;
                    let mut grads = Grads::zeros_like(&model.store);
                    model.backward(&cache, &dlogits, &mut grads);
                    Ok((loss, grads))
                })
                .collect();
            let mut loss_sum = 0.0;
            let mut total: Option<Grads<F>> = None;
            for r in results {
                let (l, g) = r?;
                loss_sum += l;
                match &mut total {
                    None => total = Some(g),
                    Some(t) => t.add_assign(&g),
                }
            }
            let mut grads = total.unwrap();
            grads.scale(F::from_f64(1.0 / chunk.len() as f64));
            opt.step(&mut model.store, &grads, &frozen);
            ep_loss += loss_sum / chunk.len() as f64;
            ep_batches += 1;
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0 {
                report.push(record(&eval(&model)?, epoch, step, None, &t0));
            }
        }
        if cfg.eval_every == 0 {
            let train_loss = ep_loss / ep_batches.max(1) as f64;
            report.push(record(&eval(&model)?, epoch, step, Some(train_loss), &t0));
        }
    }

    let meta = CheckpointMeta {
        phase: cfg.phase.as_str().into(),
        step,
        seed: cfg.seed,
        backbone: cfg.backbone.clone(),
        bank_sha256: bank_sha,
    };
    Ok(FinetuneOutput {
        model,
        meta,
        report,
        transfer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn voxel_ce_matches_hand_example() {
        // 2 classes, single voxel, logits [0, ln 3]: target 0 -> loss ln 4.
        let mut logits = Array4::<f64>::zeros((2, 1, 1, 1));
        logits[[1, 0, 0, 0]] = 3.0f64.ln();
        let target = Array3::<u8>::zeros((1, 1, 1));
        let (loss, grad) = voxel_ce_grad(&logits, &target).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        assert!((grad[[0, 0, 0, 0]] - (-0.75)).abs() < 1e-12);
        assert!((grad[[1, 0, 0, 0]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn voxel_ce_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (c, x, y, z) = (3, 2, 2, 2);
        let logits = Array4::<f64>::from_shape_fn((c, x, y, z), |_| rng.gen_range(-2.0..2.0));
        let target = Array3::<u8>::from_shape_fn((x, y, z), |_| rng.gen_range(0..c as u8));
        let (_, grad) = voxel_ce_grad(&logits, &target).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0, 0), (1, 1, 0, 1), (2, 1, 1, 1)] {
            let mut up = logits.clone();
            up[[idx.0, idx.1, idx.2, idx.3]] += h;
            let mut down = logits.clone();
            down[[idx.0, idx.1, idx.2, idx.3]] -= h;
            let fd = (voxel_ce_grad(&up, &target).unwrap().0
                - voxel_ce_grad(&down, &target).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad[[idx.0, idx.1, idx.2, idx.3]]).abs() < 1e-8);
        }
    }

    #[test]
    fn voxel_argmax_picks_largest() {
        let mut logits = Array4::<f32>::zeros((2, 1, 2, 1));
        logits[[1, 0, 0, 0]] = 1.0;
        logits[[0, 0, 1, 0]] = 1.0;
        let pred = argmax_voxels(&logits);
        assert_eq!(pred[[0, 0, 0]], 1);
        assert_eq!(pred[[0, 1, 0]], 0);
    }
}
