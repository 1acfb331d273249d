//! Flat `key = value` run configuration.
//!
//! The format is a plain text file: one assignment per line, `#` comments,
//! blank lines ignored. Dotted keys group related settings. Dimension triples
//! are written `2x2x2`, lists are comma-separated, encoder stages are
//! `convsxchannels` pairs (`1x64,1x128,2x256,2x512`).
//!
//! Resolution order is defaults, then file, then explicit overrides (the CLI
//! passes `--set key=value` through here). Unknown keys are errors so typos
//! do not silently fall back to defaults.

use crate::error::{Error, Result};
use crate::trainer::{InitStrategy, Phase, TrainConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    /// key -> (1-based line for error messages, 0 for programmatic sets, value)
    entries: BTreeMap<String, (usize, String)>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {lineno}: expected 'key = value', got '{raw}'"))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() || value.is_empty() {
                return Err(Error::Config(format!(
                    "config line {lineno}: empty key or value in '{raw}'"
                )));
            }
            if let Some((prev, _)) = entries.insert(key.clone(), (lineno, value)) {
                return Err(Error::Config(format!(
                    "config line {lineno}: '{key}' already set on line {prev}"
                )));
            }
        }
        Ok(ConfigMap { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Programmatic override; replaces any file value for the key.
    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), (0, value.to_string()));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    /// Applies every entry onto `cfg`. Every key must be recognized.
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        for (key, (line, value)) in &self.entries {
            apply_entry(cfg, key, value).map_err(|e| match e {
                Error::Config(msg) if *line > 0 => {
                    Error::Config(format!("config line {line}: {msg}"))
                }
                other => other,
            })?;
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, what: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected {what}, got '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got '{value}'"
        ))),
    }
}

/// `AxBxC` as a usize triple.
fn parse_triple(key: &str, value: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = value.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "{key}: expected AxBxC, got '{value}'"
        )));
    }
    Ok((
        parse_num(key, parts[0], "a number")?,
        parse_num(key, parts[1], "a number")?,
        parse_num(key, parts[2], "a number")?,
    ))
}

/// `1x64,2x256` as (convs, channels) pairs.
fn parse_stages(key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|part| {
            let (convs, ch) = part.trim().split_once('x').ok_or_else(|| {
                Error::Config(format!(
                    "{key}: expected convsxchannels pairs like 1x64, got '{part}'"
                ))
            })?;
            Ok((
                parse_num(key, convs, "a number")?,
                parse_num(key, ch, "a number")?,
            ))
        })
        .collect()
}

fn parse_pools(key: &str, value: &str) -> Result<Vec<(usize, usize, usize)>> {
    value
        .split(',')
        .map(|part| parse_triple(key, part.trim()))
        .collect()
}

fn apply_entry(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "phase" => {
            cfg.phase = match value {
                "pretrain" => Phase::Pretrain,
                "finetune_cls" => Phase::FinetuneCls,
                "finetune_seg" => Phase::FinetuneSeg,
                _ => {
                    return Err(Error::Config(format!(
                        "phase: expected pretrain, finetune_cls or finetune_seg, got '{value}'"
                    )))
                }
            }
        }
        "grid.counts" => cfg.grid.counts = parse_triple(key, value)?,
        "grid.cube_size" => cfg.grid.cube_size = parse_triple(key, value)?,
        "grid.gap" => cfg.grid.gap = parse_num(key, value, "a non-negative integer")?,
        "grid.jitter" => cfg.grid.jitter = parse_num(key, value, "a non-negative integer")?,
        "k" => cfg.k = parse_num(key, value, "a positive integer")?,
        "rot_prob" => cfg.rot_prob = parse_num(key, value, "a number in [0, 1]")?,
        "loss.alpha" => cfg.loss_weights.alpha = parse_num(key, value, "a number")?,
        "loss.beta" => cfg.loss_weights.beta = parse_num(key, value, "a number")?,
        "backbone.in_channels" => {
            cfg.backbone.in_channels = parse_num(key, value, "a positive integer")?
        }
        "backbone.stages" => cfg.backbone.stages = parse_stages(key, value)?,
        "backbone.pools" => cfg.backbone.pools = parse_pools(key, value)?,
        "batch_size" => cfg.batch_size = parse_num(key, value, "a positive integer")?,
        "learning_rate" => cfg.learning_rate = parse_num(key, value, "a number")?,
        "momentum" => cfg.momentum = parse_num(key, value, "a number")?,
        "epochs" => cfg.epochs = parse_num(key, value, "a positive integer")?,
        "seed" => cfg.seed = parse_num(key, value, "an unsigned integer")?,
        "init" => {
            cfg.init = if value == "scratch" {
                InitStrategy::Scratch
            } else {
                InitStrategy::Checkpoint(PathBuf::from(value))
            }
        }
        "freeze_encoder" => cfg.freeze_encoder = parse_bool(key, value)?,
        "eval_every" => cfg.eval_every = parse_num(key, value, "a non-negative integer")?,
        "num_classes" => cfg.num_classes = parse_num(key, value, "a positive integer")?,
        "num_seg_classes" => cfg.num_seg_classes = parse_num(key, value, "a positive integer")?,
        "deterministic" => cfg.deterministic = parse_bool(key, value)?,
        _ => {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
    }
    Ok(())
}

/// Defaults, then the optional file, then overrides; validates the result.
pub fn resolve_config(
    file: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = file {
        ConfigMap::load(path)?.apply(&mut cfg)?;
    }
    let mut cli = ConfigMap::default();
    for (k, v) in overrides {
        cli.set(k, v);
    }
    cli.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Renders a config in the same grammar `parse` accepts, so resolved configs
/// can be recorded and re-run.
pub fn render_config(cfg: &TrainConfig) -> String {
    let triple = |(a, b, c): (usize, usize, usize)| format!("{a}x{b}x{c}");
    let stages = cfg
        .backbone
        .stages
        .iter()
        .map(|&(n, c)| format!("{n}x{c}"))
        .collect::<Vec<_>>()
        .join(",");
    let pools = cfg
        .backbone
        .pools
        .iter()
        .map(|&p| triple(p))
        .collect::<Vec<_>>()
        .join(",");
    let init = match &cfg.init {
        InitStrategy::Scratch => "scratch".to_string(),
        InitStrategy::Checkpoint(p) => p.display().to_string(),
    };
    format!(
        "phase = {}\n\
         grid.counts = {}\n\
         grid.cube_size = {}\n\
         grid.gap = {}\n\
         grid.jitter = {}\n\
         k = {}\n\
         rot_prob = {}\n\
         loss.alpha = {}\n\
         loss.beta = {}\n\
         backbone.in_channels = {}\n\
         backbone.stages = {}\n\
         backbone.pools = {}\n\
         batch_size = {}\n\
         learning_rate = {}\n\
         momentum = {}\n\
         epochs = {}\n\
         seed = {}\n\
         init = {}\n\
         freeze_encoder = {}\n\
         eval_every = {}\n\
         num_classes = {}\n\
         num_seg_classes = {}\n\
         deterministic = {}\n",
        cfg.phase.as_str(),
        triple(cfg.grid.counts),
        triple(cfg.grid.cube_size),
        cfg.grid.gap,
        cfg.grid.jitter,
        cfg.k,
        cfg.rot_prob,
        cfg.loss_weights.alpha,
        cfg.loss_weights.beta,
        cfg.backbone.in_channels,
        stages,
        pools,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.momentum,
        cfg.epochs,
        cfg.seed,
        init,
        cfg.freeze_encoder,
        cfg.eval_every,
        cfg.num_classes,
        cfg.num_seg_classes,
        cfg.deterministic,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_grammar() {
        let text = "\
# proxy pretraining on 2x2x2 grids
phase = pretrain
grid.counts = 2x2x2
grid.cube_size = 32x32x32   # trailing comment
grid.gap = 6
k = 24
backbone.stages = 1x8,1x16
backbone.pools = 2x2x2,2x2x2
learning_rate = 0.01
deterministic = true
";
        let mut cfg = TrainConfig::default();
        ConfigMap::parse(text).unwrap().apply(&mut cfg).unwrap();
        assert_eq!(cfg.grid.cube_size, (32, 32, 32));
        assert_eq!(cfg.grid.gap, 6);
        assert_eq!(cfg.k, 24);
        assert_eq!(cfg.backbone.stages, vec![(1, 8), (1, 16)]);
        assert_eq!(cfg.learning_rate, 0.01);
        assert!(cfg.deterministic);
        // Untouched keys keep their defaults.
        assert_eq!(cfg.momentum, 0.9);
    }

    #[test]
    fn unknown_key_is_an_error_with_line() {
        let mut cfg = TrainConfig::default();
        let err = ConfigMap::parse("grid.gaap = 10\n")
            .unwrap()
            .apply(&mut cfg)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1"), "{msg}");
        assert!(msg.contains("grid.gaap"), "{msg}");
    }

    #[test]
    fn bad_values_name_the_key() {
        let mut cfg = TrainConfig::default();
        let err = ConfigMap::parse("grid.counts = 2x2\n")
            .unwrap()
            .apply(&mut cfg)
            .unwrap_err();
        assert!(err.to_string().contains("grid.counts"), "{err}");

        let err = ConfigMap::parse("epochs = soon\n")
            .unwrap()
            .apply(&mut cfg)
            .unwrap_err();
        assert!(err.to_string().contains("epochs"), "{err}");
    }

    #[test]
    fn duplicate_and_malformed_lines_rejected() {
        assert!(ConfigMap::parse("seed = 1\nseed = 2\n").is_err());
        assert!(ConfigMap::parse("just words\n").is_err());
        assert!(ConfigMap::parse("seed =\n").is_err());
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "epochs = 7\nseed = 3\n").unwrap();
        let cfg = resolve_config(
            Some(&path),
            &[("epochs".to_string(), "9".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 9);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn render_round_trips() {
        let mut cfg = TrainConfig::default();
        cfg.phase = Phase::FinetuneSeg;
        cfg.grid.cube_size = (16, 16, 16);
        cfg.init = InitStrategy::Checkpoint(PathBuf::from("runs/pre/ckpt.rc01"));
        cfg.loss_weights.beta = 0.25;
        let text = render_config(&cfg);
        let mut back = TrainConfig::default();
        ConfigMap::parse(&text).unwrap().apply(&mut back).unwrap();
        assert_eq!(back.config_hash(), cfg.config_hash());
    }
}
