//! Proxy-task training loop.

use super::metrics::{MetricsRecord, MetricsReport};
use super::sgd::Sgd;
use super::{load_split, DataSplits, Phase, TrainConfig};
use crate::cubeops::{make_proxy_sample, ProxySample};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::losses::{
    permutation_loss_grad, rotation_loss_grad, total_loss,
};
use crate::model::{
    apply_checkpoint, load_checkpoint, CheckpointMeta, ProxyModel, TransferReport,
};
use crate::nn::{Grads, Role};
use crate::permbank::PermutationBank;
use crate::scalar::Scalar;
use crate::trainer::InitStrategy;
use crate::volumes::LabeledVolume;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::time::Instant;

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss_total: f64,
    pub loss_perm: f64,
    pub loss_rot: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct ProxyEval {
    pub ordering_acc: f64,
    pub orientation_acc: f64,
    pub loss_total: f64,
    pub loss_perm: f64,
    pub loss_rot: f64,
}

/// Owns the model and optimizer; [`pretrain`] drives it over a dataset, and
/// tests can call [`ProxyTrainer::step`] directly on a fixed batch.
pub struct ProxyTrainer<F> {
    pub model: ProxyModel<F>,
    pub cfg: TrainConfig,
    pub transfer: Option<TransferReport>,
    opt: Sgd<F>,
    frozen: Vec<Role>,
}

impl<F: Scalar> ProxyTrainer<F> {
    pub fn new(cfg: &TrainConfig, bank: &PermutationBank) -> Result<Self> {
        cfg.validate()?;
        if cfg.phase != Phase::Pretrain {
            return Err(Error::Config(format!(
                "proxy trainer requires the pretrain phase, got {}",
                cfg.phase.as_str()
            )));
        }
        bank.validate()?;
        if bank.m != cfg.grid.m() {
            return Err(Error::Config(format!(
                "bank M={} does not match grid M={}",
                bank.m,
                cfg.grid.m()
            )));
        }
        if bank.k != cfg.k {
            return Err(Error::Config(format!(
                "bank K={} does not match configured K={}",
                bank.k, cfg.k
            )));
        }
        let mut model = ProxyModel::new(
            &cfg.backbone,
            cfg.grid.cube_size,
            cfg.grid.m(),
            cfg.k,
            cfg.seed,
        )?;
        let transfer = match &cfg.init {
            InitStrategy::Scratch => None,
            InitStrategy::Checkpoint(path) => {
                let ckpt = load_checkpoint(path)?;
                Some(apply_checkpoint(
                    &mut model.store,
                    &ckpt,
                    &[Role::Encoder, Role::ProxyHead],
                )?)
            }
        };
        let opt = Sgd::new(&model.store, cfg.learning_rate, cfg.momentum);
        let frozen = if cfg.freeze_encoder {
            vec![Role::Encoder]
        } else {
            Vec::new()
        };
        Ok(ProxyTrainer {
            model,
            cfg: cfg.clone(),
            transfer,
            opt,
            frozen,
        })
    }

    fn sample_losses(
        model: &ProxyModel<F>,
        sample: &ProxySample<F>,
        alpha: f64,
        beta: f64,
    ) -> Result<(f64, f64, Grads<F>)> {
        let (logits, cache) = model.forward(&sample.cubes)?;
        let (lp, mut dperm) = permutation_loss_grad(&logits.perm, sample.perm_index)?;
        let (lr, mut dhor, mut dver) = rotation_loss_grad(
            &logits.hor,
            &logits.ver,
            &sample.hor_flags,
            &sample.ver_flags,
        )?;
        let a = F::from_f64(alpha);
        let b = F::from_f64(beta);
        dperm.mapv_inplace(|v| v * a);
        dhor.mapv_inplace(|v| v * b);
        dver.mapv_inplace(|v| v * b);
        let mut grads = Grads::zeros_like(&model.store);
        model.backward(&cache, &dperm, &dhor, &dver, &mut grads);
        Ok((lp.as_f64(), lr.as_f64(), grads))
    }

    /// One optimizer step on a batch. Per-sample gradients are computed in
    /// parallel but reduced in batch order, so results do not depend on
    /// scheduling.
    pub fn step(&mut self, batch: &[ProxySample<F>]) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let alpha = self.cfg.loss_weights.alpha;
        let beta = self.cfg.loss_weights.beta;
        let model = &self.model;
        let results: Vec<Result<(f64, f64, Grads<F>)>> = batch
            .par_iter()
            .map(|s| Self::sample_losses(model, s, alpha, beta))
            .collect();
        let mut lp_sum = 0.0;
        let mut lr_sum = 0.0;
        let mut total: Option<Grads<F>> = None;
        for r in results {
            let (lp, lr, g) = r?;
            lp_sum += lp;
            lr_sum += lr;
            match &mut total {
                None => total = Some(g),
                Some(t) => t.add_assign(&g),
            }
        }
        let mut grads = total.unwrap();
        grads.scale(F::from_f64(1.0 / batch.len() as f64));
        self.opt.step(&mut self.model.store, &grads, &self.frozen);
        let n = batch.len() as f64;
        let (lp, lr) = (lp_sum / n, lr_sum / n);
        Ok(StepStats {
            loss_total: total_loss(lp, lr, &self.cfg.loss_weights),
            loss_perm: lp,
            loss_rot: lr,
        })
    }

    /// Held-out evaluation on deterministically generated proxy samples (one
    /// per volume, fixed across epochs).
    pub fn evaluate(
        &self,
        volumes: &[LabeledVolume<F>],
        bank: &PermutationBank,
    ) -> Result<ProxyEval> {
        if volumes.is_empty() {
            return Err(Error::Data("evaluation split is empty".into()));
        }
        let eval_base = derive_seed(self.cfg.seed, 0xE7A1);
        let model = &self.model;
        let cfg = &self.cfg;
        let outcomes: Vec<Result<(bool, usize, usize, f64, f64)>> = volumes
            .par_iter()
            .enumerate()
            .map(|(i, v)| {
                let sample = make_proxy_sample(
                    &v.volume.data,
                    &cfg.grid,
                    bank,
                    cfg.rot_prob,
                    derive_seed(eval_base, i as u64),
                )?;
                let (logits, _) = model.forward(&sample.cubes)?;
                let (lp, _) = permutation_loss_grad(&logits.perm, sample.perm_index)?;
                let (lr, _, _) = rotation_loss_grad(
                    &logits.hor,
                    &logits.ver,
                    &sample.hor_flags,
                    &sample.ver_flags,
                )?;
                let pred = argmax(&logits.perm);
                let mut rot_correct = 0;
                let mut rot_total = 0;
                for (z, &g) in logits.hor.iter().zip(&sample.hor_flags) {
                    rot_total += 1;
                    if (*z > F::zero()) == g {
                        rot_correct += 1;
                    }
                }
                for (z, &g) in logits.ver.iter().zip(&sample.ver_flags) {
                    rot_total += 1;
                    if (*z > F::zero()) == g {
                        rot_correct += 1;
                    }
                }
                Ok((
                    pred == sample.perm_index,
                    rot_correct,
                    rot_total,
                    lp.as_f64(),
                    lr.as_f64(),
                ))
            })
            .collect();
        let mut ord_hits = 0usize;
        let mut rc = 0usize;
        let mut rt = 0usize;
        let mut lp_sum = 0.0;
        let mut lr_sum = 0.0;
        for o in outcomes {
            let (hit, c, t, lp, lr) = o?;
            ord_hits += hit as usize;
            rc += c;
            rt += t;
            lp_sum += lp;
            lr_sum += lr;
        }
        let n = volumes.len() as f64;
        let (lp, lr) = (lp_sum / n, lr_sum / n);
        Ok(ProxyEval {
            ordering_acc: ord_hits as f64 / n,
            orientation_acc: rc as f64 / rt as f64,
            loss_total: total_loss(lp, lr, &self.cfg.loss_weights),
            loss_perm: lp,
            loss_rot: lr,
        })
    }
}

fn argmax<F: Scalar>(v: &ndarray::Array1<F>) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

pub struct PretrainOutput<F> {
    pub model: ProxyModel<F>,
    pub meta: CheckpointMeta,
    pub report: MetricsReport,
}

/// Hash of a bank's canonical serialization, recorded in checkpoints so a
/// transfer can be traced back to the exact permutation set.
pub fn bank_sha256(bank: &PermutationBank) -> String {
    let json = serde_json::to_string(bank).expect("bank serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn pretrain<F: Scalar>(
    cfg: &TrainConfig,
    data: &DataSplits,
    bank: &PermutationBank,
) -> Result<PretrainOutput<F>> {
    let mut trainer = ProxyTrainer::<F>::new(cfg, bank)?;
    let train = load_split::<F>(&data.train)?;
    let test = load_split::<F>(&data.test)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data("pretraining needs non-empty train and test splits".into()));
    }
    let hash = cfg.config_hash();
    let t0 = Instant::now();
    let clock = |det: bool| if det { 0.0 } else { t0.elapsed().as_secs_f64() };

    let mut report = MetricsReport::default();
    let eval0 = trainer.evaluate(&test, bank)?;
    report.push(eval_record(cfg, 0, 0, &eval0, &hash, clock(cfg.deterministic)));

    let mut step: u64 = 0;
    let sample_base = derive_seed(cfg.seed, 0x5A3);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 0xE0 + epoch as u64));
        order.shuffle(&mut rng);
        let epoch_base = derive_seed(sample_base, epoch as u64);
        let mut ep_lp = 0.0;
        let mut ep_lr = 0.0;
        let mut ep_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Result<Vec<ProxySample<F>>> = chunk
                .iter()
                .map(|&i| {
                    make_proxy_sample(
                        &train[i].volume.data,
                        &cfg.grid,
                        bank,
                        cfg.rot_prob,
                        derive_seed(epoch_base, i as u64),
                    )
                })
                .collect();
            let samples = samples?;
            let stats = trainer.step(&samples)?;
            ep_lp += stats.loss_perm;
            ep_lr += stats.loss_rot;
            ep_batches += 1;
            step += 1;
            if cfg.eval_every > 0 && step % cfg.eval_every as u64 == 0 {
                let ev = trainer.evaluate(&test, bank)?;
                report.push(eval_record(cfg, epoch, step, &ev, &hash, clock(cfg.deterministic)));
            }
        }
        if cfg.eval_every == 0 {
            let ev = trainer.evaluate(&test, bank)?;
            let mut rec = eval_record(cfg, epoch, step, &ev, &hash, clock(cfg.deterministic));
            // Epoch-end records carry the epoch's mean training losses.
            let n = ep_batches.max(1) as f64;
            rec.loss_perm = Some(ep_lp / n);
            rec.loss_rot = Some(ep_lr / n);
            rec.loss_total = Some(total_loss(ep_lp / n, ep_lr / n, &cfg.loss_weights));
            report.push(rec);
        }
    }

    let meta = CheckpointMeta {
        phase: Phase::Pretrain.as_str().into(),
        step,
        seed: cfg.seed,
        backbone: cfg.backbone.clone(),
        bank_sha256: Some(bank_sha256(bank)),
    };
    Ok(PretrainOutput {
        model: trainer.model,
        meta,
        report,
    })
}

fn eval_record(
    cfg: &TrainConfig,
    epoch: usize,
    step: u64,
    ev: &ProxyEval,
    hash: &str,
    wall: f64,
) -> MetricsRecord {
    MetricsRecord {
        phase: cfg.phase.as_str().into(),
        epoch,
        step,
        loss_total: Some(ev.loss_total),
        loss_perm: Some(ev.loss_perm),
        loss_rot: Some(ev.loss_rot),
        ordering_acc: Some(ev.ordering_acc),
        orientation_acc: Some(ev.orientation_acc),
        cls_acc: None,
        miou: None,
        wall_clock_s: wall,
        config_hash: hash.into(),
    }
}
