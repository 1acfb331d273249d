//! Checkpoint container ("RC01"): one JSON header line describing every
//! parameter (shape, role, payload offset) plus concatenated little-endian
//! f32 payloads. Transfer is selective by role and all-or-nothing: every
//! requested parameter must match by name and shape before anything is
//! written into the target store.

use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Role};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub phase: String,
    pub step: u64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    /// Hash of the permutation bank the encoder was pretrained against, when
    /// applicable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank_sha256: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryHeader {
    shape: Vec<usize>,
    role: String,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    magic: String,
    meta: CheckpointMeta,
    /// BTreeMap keeps header bytes stable under insertion order.
    params: BTreeMap<String, EntryHeader>,
}

pub fn save_checkpoint<F: Scalar>(
    path: impl AsRef<Path>,
    store: &ParamStore<F>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let path = path.as_ref();
    let mut names: Vec<&str> = store.params().iter().map(|p| p.name.as_str()).collect();
    names.sort_unstable();
    let mut params = BTreeMap::new();
    let mut offset = 0u64;
    for name in &names {
        let p = store.find(name).unwrap();
        let nbytes = (p.value.len() * 4) as u64;
        params.insert(
            name.to_string(),
            EntryHeader {
                shape: p.value.shape().to_vec(),
                role: p.role.as_str().to_string(),
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let header = FileHeader {
        magic: "RC01".into(),
        meta: meta.clone(),
        params,
    };
    let mut bytes = serde_json::to_string(&header)
        .map_err(|e| Error::format(path, format!("serialize header: {e}")))?
        .into_bytes();
    bytes.push(b'\n');
    bytes.reserve(offset as usize);
    for name in &names {
        let p = store.find(name).unwrap();
        let data = p.value.as_standard_layout();
        for v in data.iter() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    /// (name, role, values), in header (name-sorted) order.
    pub params: Vec<(String, Role, ArrayD<f32>)>,
}

fn parse_role(path: &Path, s: &str) -> Result<Role> {
    match s {
        "encoder" => Ok(Role::Encoder),
        "proxy_head" => Ok(Role::ProxyHead),
        "cls_head" => Ok(Role::ClsHead),
        "seg_decoder" => Ok(Role::SegDecoder),
        other => Err(Error::format(path, format!("unknown parameter role {other:?}"))),
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LoadedCheckpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    let header: FileHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| Error::format(path, format!("header parse: {e}")))?;
    if header.magic != "RC01" {
        return Err(Error::format(
            path,
            format!("bad magic {:?}, expected \"RC01\"", header.magic),
        ));
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    let total: u64 = header.params.values().map(|e| e.nbytes).sum();
    if payload.len() as u64 != total {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes, header declares {total}", payload.len()),
        ));
    }
    let mut params = Vec::with_capacity(header.params.len());
    for (name, entry) in &header.params {
        let count: usize = entry.shape.iter().product();
        if entry.nbytes != (count * 4) as u64 {
            return Err(Error::format(
                path,
                format!(
                    "parameter {name}: shape {:?} needs {} bytes, header declares {}",
                    entry.shape,
                    count * 4,
                    entry.nbytes
                ),
            ));
        }
        let start = entry.offset as usize;
        let end = start + entry.nbytes as usize;
        if end > payload.len() {
            return Err(Error::format(
                path,
                format!("parameter {name}: payload range {start}..{end} out of bounds"),
            ));
        }
        let values: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let array = ArrayD::from_shape_vec(entry.shape.clone(), values)
            .map_err(|e| Error::format(path, format!("parameter {name}: {e}")))?;
        params.push((name.clone(), parse_role(path, &entry.role)?, array));
    }
    Ok(LoadedCheckpoint {
        meta: header.meta,
        params,
    })
}

/// What a transfer did: which target parameters were overwritten, which were
/// left at their fresh initialization, and which checkpoint entries went
/// unused.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub loaded: Vec<String>,
    pub fresh: Vec<String>,
    pub unused: Vec<String>,
}

/// Copies every checkpoint parameter whose role is in `roles` into `store`.
/// Validation happens up front; on any mismatch the store is untouched.
pub fn apply_checkpoint<F: Scalar>(
    store: &mut ParamStore<F>,
    ckpt: &LoadedCheckpoint,
    roles: &[Role],
) -> Result<TransferReport> {
    let wanted = |r: Role| roles.contains(&r);
    // Every target parameter with a requested role must be present and match.
    let mut planned: Vec<(usize, usize)> = Vec::new(); // (store idx, ckpt idx)
    for (si, p) in store.params().iter().enumerate() {
        if !wanted(p.role) {
            continue;
        }
        let ci = ckpt
            .params
            .iter()
            .position(|(name, _, _)| *name == p.name)
            .ok_or_else(|| {
                Error::Transfer(format!(
                    "target parameter {} ({}) missing from checkpoint",
                    p.name,
                    p.role.as_str()
                ))
            })?;
        let (_, crole, cval) = &ckpt.params[ci];
        if *crole != p.role {
            return Err(Error::Transfer(format!(
                "parameter {} has role {} in checkpoint but {} in target",
                p.name,
                crole.as_str(),
                p.role.as_str()
            )));
        }
        if cval.shape() != p.value.shape() {
            return Err(Error::Transfer(format!(
                "parameter {} shape mismatch: checkpoint {:?}, target {:?}",
                p.name,
                cval.shape(),
                p.value.shape()
            )));
        }
        planned.push((si, ci));
    }
    for &(si, ci) in &planned {
        let src = &ckpt.params[ci].2;
        let dst = &mut store.params_mut()[si].value;
        for (d, s) in dst.iter_mut().zip(src.iter()) {
            *d = F::from_f64(*s as f64);
        }
    }
    let loaded: Vec<String> = planned
        .iter()
        .map(|&(si, _)| store.params()[si].name.clone())
        .collect();
    let fresh = store
        .params()
        .iter()
        .filter(|p| !wanted(p.role))
        .map(|p| p.name.clone())
        .collect();
    let unused = ckpt
        .params
        .iter()
        .filter(|(name, _, _)| !loaded.iter().any(|l| l == name))
        .map(|(name, _, _)| name.clone())
        .collect();
    Ok(TransferReport {
        loaded,
        fresh,
        unused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifyModel, ProxyModel};

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            phase: "pretrain".into(),
            step: 42,
            seed: 7,
            backbone: BackboneConfig::small(1, &[2]),
            bank_sha256: Some("ab".repeat(32)),
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.rc01");
        let model: ProxyModel<f32> = ProxyModel::new(&meta().backbone, (4, 4, 4), 2, 3, 7).unwrap();
        save_checkpoint(&path, &model.store, &meta()).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta, meta());
        assert_eq!(loaded.params.len(), model.store.len());
        for (name, role, values) in &loaded.params {
            let p = model.store.find(name).unwrap();
            assert_eq!(*role, p.role);
            assert_eq!(values.shape(), p.value.shape());
            for (a, b) in values.iter().zip(p.value.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn selective_transfer_sets_exactly_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.rc01");
        let bb = meta().backbone;
        let proxy: ProxyModel<f32> = ProxyModel::new(&bb, (4, 4, 4), 2, 3, 7).unwrap();
        save_checkpoint(&path, &proxy.store, &meta()).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();

        let mut cls: ClassifyModel<f32> = ClassifyModel::new(&bb, 4, 99).unwrap();
        let head_before: Vec<f32> = cls
            .store
            .find("head.cls.weight")
            .unwrap()
            .value
            .iter()
            .copied()
            .collect();
        let report = apply_checkpoint(&mut cls.store, &ckpt, &[Role::Encoder]).unwrap();

        // Encoder now bit-equal to the pretrained one.
        for p in cls.store.params() {
            if p.role == Role::Encoder {
                let src = proxy.store.find(&p.name).unwrap();
                assert_eq!(p.value, src.value, "{}", p.name);
                assert!(report.loaded.contains(&p.name));
            }
        }
        // Head untouched.
        let head_after: Vec<f32> = cls
            .store
            .find("head.cls.weight")
            .unwrap()
            .value
            .iter()
            .copied()
            .collect();
        assert_eq!(head_before, head_after);
        assert!(report.fresh.iter().any(|n| n == "head.cls.weight"));
        // Proxy heads in the file went unused.
        assert!(report.unused.iter().any(|n| n == "head.perm.weight"));
    }

    #[test]
    fn mismatches_leave_store_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.rc01");
        let bb = meta().backbone;
        let proxy: ProxyModel<f32> = ProxyModel::new(&bb, (4, 4, 4), 2, 3, 7).unwrap();
        save_checkpoint(&path, &proxy.store, &meta()).unwrap();
        let ckpt = load_checkpoint(&path).unwrap();

        // Different backbone: shapes disagree.
        let other = BackboneConfig::small(1, &[3]);
        let mut cls: ClassifyModel<f32> = ClassifyModel::new(&other, 4, 1).unwrap();
        let before: Vec<f32> = cls
            .store
            .params()
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect();
        let err = apply_checkpoint(&mut cls.store, &ckpt, &[Role::Encoder]).unwrap_err();
        assert!(matches!(err, Error::Transfer(_)));
        let after: Vec<f32> = cls
            .store
            .params()
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn corrupt_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.rc01");
        let model: ProxyModel<f32> = ProxyModel::new(&meta().backbone, (4, 4, 4), 2, 3, 7).unwrap();
        save_checkpoint(&path, &model.store, &meta()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
