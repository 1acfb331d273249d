//! Subcommand implementations. Each training command resolves its config,
//! prepares an append-only run directory, runs, and records a run manifest;
//! each prints a one-line JSON summary to stdout.

use crate::run::{prepare_run_dir, timestamp, write_run_manifest, RunManifest};
use crate::{
    CompareArgs, EvalArgs, FinetuneArgs, GenSynthArgs, PermbankArgs, PretrainArgs, Task,
};
use rubikssl_core::config::{render_config, ConfigMap};
use rubikssl_core::model::{
    apply_checkpoint, load_checkpoint, save_checkpoint, ClassifyModel, SegModel, TransferReport,
};
use rubikssl_core::nn::{ParamStore, Role};
use rubikssl_core::permbank::{PermutationBank, SAMPLED_POOL_SIZE};
use rubikssl_core::trainer::{
    compare_strategies, evaluate_cls, evaluate_seg, finetune_cls, finetune_seg, load_split,
    DataSplits, MetricsReport, Phase, StrategyArmSpec, TrainConfig,
};
use rubikssl_core::volumes::{
    generate_synthetic_dataset, save_mask, save_volume, split_dataset, DatasetManifest,
    ManifestEntry, SynthConfig,
};
use rubikssl_core::{derive_seed, Error, Result};
use rubikssl_core::model::CheckpointMeta;
use std::path::Path;

fn parse_dims4(s: &str) -> Result<(usize, usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 4 {
        return Err(Error::Config(format!("--dims expects CxXxYxZ, got '{s}'")));
    }
    let mut v = [0usize; 4];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| Error::Config(format!("--dims expects numbers, got '{part}'")))?;
    }
    Ok((v[0], v[1], v[2], v[3]))
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let mut seeds = Vec::new();
    for part in s.split(',') {
        let seed: u64 = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("--seeds expects integers, got '{part}'")))?;
        if seeds.contains(&seed) {
            return Err(Error::Config(format!("--seeds lists {seed} twice")));
        }
        seeds.push(seed);
    }
    Ok(seeds)
}

fn print_dry_run(cfg: &TrainConfig) {
    print!("{}", render_config(cfg));
    println!("# config_hash: {}", cfg.config_hash());
}

fn load_manifests(train: &Path, test: &Path) -> Result<DataSplits> {
    Ok(DataSplits {
        train: DatasetManifest::load(train)?,
        test: DatasetManifest::load(test)?,
    })
}

pub fn gen_synth(args: &GenSynthArgs) -> Result<()> {
    let dims = parse_dims4(&args.dims)?;
    let cfg = SynthConfig {
        n: args.n,
        dims,
        num_classes: args.classes,
        seed: args.seed,
    };
    let volumes = generate_synthetic_dataset::<f32>(&cfg)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut entries = Vec::with_capacity(volumes.len());
    for (i, lv) in volumes.iter().enumerate() {
        let vol_name = format!("vol_{i:04}.rv01");
        let mask_name = format!("mask_{i:04}.rv01");
        save_volume(args.out.join(&vol_name), &lv.volume)?;
        let mask = lv.mask.as_ref().expect("generator always produces masks");
        save_mask(args.out.join(&mask_name), mask, lv.volume.spacing)?;
        entries.push(ManifestEntry {
            volume: vol_name,
            class_label: lv.class_label,
            mask: Some(mask_name),
        });
    }
    DatasetManifest::new("all", args.seed, entries.clone()).save(args.out.join("manifest.jsonl"))?;
    let (train, test) = split_dataset(&entries, args.split_ratio, derive_seed(args.seed, 0x5917))?;
    let counts = (train.len(), test.len());
    DatasetManifest::new("train", args.seed, train).save(args.out.join("manifest.train.jsonl"))?;
    DatasetManifest::new("test", args.seed, test).save(args.out.join("manifest.test.jsonl"))?;
    println!(
        "{}",
        serde_json::json!({
            "n": args.n,
            "classes": args.classes,
            "train": counts.0,
            "test": counts.1,
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}

pub fn permbank(args: &PermbankArgs) -> Result<()> {
    if args.pool_size.is_some() && !args.sampled {
        return Err(Error::Config("--pool-size only applies with --sampled".into()));
    }
    let bank = if args.sampled {
        PermutationBank::generate_sampled(
            args.m,
            args.k,
            args.seed,
            args.pool_size.unwrap_or(SAMPLED_POOL_SIZE),
        )?
    } else {
        PermutationBank::generate(args.m, args.k, args.seed)?
    };
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    bank.save(&args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "M": bank.m,
            "K": bank.k,
            "min_pairwise_distance": bank.min_pairwise_distance,
            "out": args.out.display().to_string(),
        })
    );
    Ok(())
}

/// Shared tail of every training command: checkpoint, metrics file, run
/// manifest, and the final record echoed to stdout.
#[allow(clippy::too_many_arguments)]
fn finish_run(
    out_dir: &Path,
    command: &str,
    cfg: &TrainConfig,
    started: String,
    store: &ParamStore<f32>,
    meta: &CheckpointMeta,
    report: &MetricsReport,
    transfer: Option<TransferReport>,
) -> Result<()> {
    save_checkpoint(out_dir.join("ckpt.rc01"), store, meta)?;
    report.save(out_dir.join("metrics.jsonl"))?;
    write_run_manifest(
        out_dir,
        &RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            config: render_config(cfg),
            config_hash: cfg.config_hash(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            deterministic: cfg.deterministic,
            started_utc: started,
            finished_utc: timestamp(cfg.deterministic),
            outputs: vec!["ckpt.rc01".into(), "metrics.jsonl".into()],
            transfer,
        },
    )?;
    if let Some(last) = report.last() {
        println!(
            "{}",
            serde_json::to_string(last).expect("metrics record serializes")
        );
    }
    Ok(())
}

pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve(&[])?;
    if cfg.phase != Phase::Pretrain {
        return Err(Error::Config(format!(
            "the pretrain command needs phase = pretrain, config says {}",
            cfg.phase.as_str()
        )));
    }
    if args.cfg.dry_run {
        print_dry_run(&cfg);
        return Ok(());
    }
    let bank = PermutationBank::load(&args.bank)?;
    let data = load_manifests(&args.train, &args.test)?;
    prepare_run_dir(&args.out)?;
    let started = timestamp(cfg.deterministic);
    let out = rubikssl_core::trainer::pretrain::<f32>(&cfg, &data, &bank)?;
    finish_run(
        &args.out,
        "pretrain",
        &cfg,
        started,
        &out.model.store,
        &out.meta,
        &out.report,
        None,
    )
}

pub fn finetune(args: &FinetuneArgs) -> Result<()> {
    if let Some(path) = &args.cfg.config {
        let file = ConfigMap::load(path)?;
        if let Some(p) = file.get("phase") {
            if p != args.task.phase_key() {
                return Err(Error::Config(format!(
                    "config file sets phase = {p} but --task asks for {}",
                    args.task.phase_key()
                )));
            }
        }
    }
    let mut extra = vec![("phase".to_string(), args.task.phase_key().to_string())];
    if let Some(init) = &args.init {
        extra.push(("init".into(), init.display().to_string()));
    }
    let cfg = args.cfg.resolve(&extra)?;
    if args.cfg.dry_run {
        print_dry_run(&cfg);
        return Ok(());
    }
    let data = load_manifests(&args.train, &args.test)?;
    prepare_run_dir(&args.out)?;
    let started = timestamp(cfg.deterministic);
    match args.task {
        Task::Cls => {
            let out = finetune_cls::<f32>(&cfg, &data)?;
            finish_run(
                &args.out,
                "finetune",
                &cfg,
                started,
                &out.model.store,
                &out.meta,
                &out.report,
                out.transfer,
            )
        }
        Task::Seg => {
            let out = finetune_seg::<f32>(&cfg, &data)?;
            finish_run(
                &args.out,
                "finetune",
                &cfg,
                started,
                &out.model.store,
                &out.meta,
                &out.report,
                out.transfer,
            )
        }
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let manifest = DatasetManifest::load(&args.data)?;
    let volumes = load_split::<f32>(&manifest)?;
    let param_dim0 = |name: &str| -> Option<usize> {
        ckpt.params
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, v)| v.shape()[0])
    };
    match args.task {
        Task::Cls => {
            let num_classes = param_dim0("head.cls.weight").ok_or_else(|| {
                Error::Transfer(
                    "checkpoint has no classification head (head.cls.weight)".into(),
                )
            })?;
            let mut model = ClassifyModel::<f32>::new(&ckpt.meta.backbone, num_classes, 0)?;
            apply_checkpoint(&mut model.store, &ckpt, &[Role::Encoder, Role::ClsHead])?;
            let ev = evaluate_cls(&model, &volumes)?;
            println!(
                "{}",
                serde_json::json!({
                    "task": "cls",
                    "n": volumes.len(),
                    "cls_acc": ev.metric,
                    "loss": ev.loss,
                })
            );
        }
        Task::Seg => {
            let out_ch = param_dim0("dec.duc.conv.weight").ok_or_else(|| {
                Error::Transfer(
                    "checkpoint has no segmentation decoder (dec.duc.conv.weight)".into(),
                )
            })?;
            let (fx, fy, fz) = ckpt.meta.backbone.downsample();
            let upsample = fx * fy * fz;
            if out_ch % upsample != 0 {
                return Err(Error::Transfer(format!(
                    "decoder emits {out_ch} channels, not a multiple of the {upsample}x upsampling"
                )));
            }
            let num_classes = out_ch / upsample;
            let mut model = SegModel::<f32>::new(&ckpt.meta.backbone, num_classes, 0)?;
            apply_checkpoint(&mut model.store, &ckpt, &[Role::Encoder, Role::SegDecoder])?;
            let ev = evaluate_seg(&model, &volumes, num_classes)?;
            println!(
                "{}",
                serde_json::json!({
                    "task": "seg",
                    "n": volumes.len(),
                    "miou": ev.metric,
                    "loss": ev.loss,
                })
            );
        }
    }
    Ok(())
}

pub fn compare(args: &CompareArgs) -> Result<()> {
    let mut base: Vec<(String, String)> = Vec::new();
    if args.deterministic {
        base.push(("deterministic".into(), "true".into()));
    }
    let mut pre_over = base.clone();
    pre_over.push(("phase".into(), "pretrain".into()));
    let pre_base = rubikssl_core::config::resolve_config(
        args.pretrain_config.as_deref(),
        &pre_over,
    )?;
    let mut ft_over = base;
    ft_over.push(("phase".into(), args.task.phase_key().into()));
    let ft_base =
        rubikssl_core::config::resolve_config(args.finetune_config.as_deref(), &ft_over)?;

    let mut arms = Vec::new();
    for name in args.arms.split(',').map(str::trim) {
        let pretrain = match name {
            "scratch" => None,
            "full" => Some(pre_base.clone()),
            "ordering_only" => {
                let mut c = pre_base.clone();
                c.loss_weights.beta = 0.0;
                Some(c)
            }
            "orientation_only" => {
                let mut c = pre_base.clone();
                c.loss_weights.alpha = 0.0;
                Some(c)
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown arm '{other}'; expected scratch, full, ordering_only or orientation_only"
                )))
            }
        };
        arms.push(StrategyArmSpec {
            name: name.to_string(),
            pretrain,
            finetune: ft_base.clone(),
        });
    }
    let seeds = parse_seeds(&args.seeds)?;
    let bank = match &args.bank {
        Some(path) => Some(PermutationBank::load(path)?),
        None => None,
    };
    let data = load_manifests(&args.train, &args.test)?;
    prepare_run_dir(&args.out)?;
    let ckpt_dir = args.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let started = timestamp(args.deterministic);
    let table = compare_strategies::<f32>(&arms, &seeds, &data, bank.as_ref(), &ckpt_dir)?;
    let csv_path = args.out.join("comparison.csv");
    std::fs::write(&csv_path, table.to_csv_string()).map_err(|e| Error::io(&csv_path, e))?;
    let json_path = args.out.join("comparison.json");
    let json = serde_json::to_string_pretty(&table)
        .map_err(|e| Error::format(&json_path, format!("serialize table: {e}")))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    write_run_manifest(
        &args.out,
        &RunManifest {
            command: "compare".into(),
            argv: std::env::args().collect(),
            config: format!(
                "# pretrain stage\n{}\n# finetune stage\n{}",
                render_config(&pre_base),
                render_config(&ft_base)
            ),
            config_hash: ft_base.config_hash(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed: seeds[0],
            deterministic: args.deterministic,
            started_utc: started,
            finished_utc: timestamp(args.deterministic),
            outputs: vec![
                "comparison.csv".into(),
                "comparison.json".into(),
                "checkpoints".into(),
            ],
            transfer: None,
        },
    )?;
    println!(
        "{}",
        serde_json::to_string(&table.summary).expect("summary serializes")
    );
    Ok(())
}
