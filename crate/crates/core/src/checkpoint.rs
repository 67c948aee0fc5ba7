//! Safetensors checkpoints of one parameter group plus optional Adam moments.
//!
//! Tensor names: `param/<name>`, `adam_m/<name>`, `adam_v/<name>`. The header
//! metadata carries the schema version, group, stage, optimizer step count,
//! the resolved config, and a SHA-256 digest of every stored tensor.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::AdamState;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub group: String,
    /// Training stage that produced the file.
    pub stage: u8,
    /// Resolved config in TOML, for provenance.
    pub config: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<AdamState>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn digest(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        for x in t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()? {
            h.update(x.to_le_bytes());
        }
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    meta: &CheckpointMeta,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, var) in store.named_vars() {
        tensors.insert(format!("param/{name}"), var.as_tensor().clone());
    }
    let mut step = 0;
    if let Some(st) = optimizer {
        step = st.step;
        for (name, t) in &st.m {
            tensors.insert(format!("adam_m/{name}"), t.clone());
        }
        for (name, t) in &st.v {
            tensors.insert(format!("adam_v/{name}"), t.clone());
        }
    }
    let info: HashMap<String, String> = [
        ("schema_version".to_string(), SCHEMA_VERSION.to_string()),
        ("group".to_string(), meta.group.clone()),
        ("stage".to_string(), meta.stage.to_string()),
        ("adam_step".to_string(), step.to_string()),
        ("has_optimizer".to_string(), optimizer.is_some().to_string()),
        ("config".to_string(), meta.config.clone()),
        ("digest".to_string(), digest(&tensors)?),
    ]
    .into_iter()
    .collect();
    let bytes = safetensors::serialize(tensors.iter().map(|(k, v)| (k.as_str(), v)), &Some(info))
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = PathBuf::from(format!("{}.partial", path.display()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, format!("unreadable: {e}")))?;
    let (_, header) =
        SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, format!("unreadable: {e}")))?;
    let info = header
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "missing metadata"))?;
    let field = |k: &str| {
        info.get(k)
            .cloned()
            .ok_or_else(|| ckpt_err(path, format!("missing metadata key `{k}`")))
    };
    let version: u32 = field("schema_version")?
        .parse()
        .map_err(|_| ckpt_err(path, "bad schema_version"))?;
    if version != SCHEMA_VERSION {
        return Err(ckpt_err(
            path,
            format!("schema version {version}, expected {SCHEMA_VERSION}"),
        ));
    }
    let stage: u8 = field("stage")?.parse().map_err(|_| ckpt_err(path, "bad stage"))?;
    let step: u64 = field("adam_step")?.parse().map_err(|_| ckpt_err(path, "bad adam_step"))?;
    let has_opt = field("has_optimizer")? == "true";

    let mut all = BTreeMap::new();
    for (name, view) in st.tensors() {
        use candle_core::safetensors::Load;
        all.insert(name, view.load(device)?);
    }
    if digest(&all)? != field("digest")? {
        return Err(ckpt_err(path, "tensor digest mismatch (corrupted file)"));
    }

    let mut params = BTreeMap::new();
    let mut state = AdamState {
        step,
        ..Default::default()
    };
    for (name, t) in all {
        if let Some(n) = name.strip_prefix("param/") {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam_m/") {
            state.m.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("adam_v/") {
            state.v.insert(n.to_string(), t);
        } else {
            return Err(ckpt_err(path, format!("unexpected tensor `{name}`")));
        }
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            group: field("group")?,
            stage,
            config: field("config")?,
        },
        params,
        optimizer: has_opt.then_some(state),
    })
}

/// Reads `path` and writes its parameters into `store`, which must hold exactly
/// the same names and shapes. Nothing is written unless every check passes.
pub fn load_into(path: &Path, store: &ParamStore, group: &str) -> Result<Checkpoint> {
    let ckpt = read_checkpoint(path, store.device())?;
    if ckpt.meta.group != group {
        return Err(ckpt_err(
            path,
            format!("holds group `{}`, expected `{group}`", ckpt.meta.group),
        ));
    }
    let expected: Vec<String> = store.named_vars().into_iter().map(|(n, _)| n).collect();
    let found: Vec<String> = ckpt.params.keys().cloned().collect();
    if expected != found {
        let missing: Vec<_> = expected.iter().filter(|n| !ckpt.params.contains_key(*n)).collect();
        return Err(ckpt_err(
            path,
            format!(
                "parameter set differs ({} stored, {} expected; missing {:?})",
                found.len(),
                expected.len(),
                missing.iter().take(5).collect::<Vec<_>>()
            ),
        ));
    }
    store
        .assign_all(&ckpt.params)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(ckpt)
}
