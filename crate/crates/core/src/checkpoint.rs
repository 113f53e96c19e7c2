//! On-disk checkpoints: a directory holding `manifest.json`, `model.bin` and,
//! when saved mid-training, `optimizer.bin`.
//!
//! Both binary files use the same layout: an 8-byte magic, a list of named
//! tensor groups stored as little-endian `f64`, and a trailing SHA-256 of
//! everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_models, Component, ModelBundle, ModelConfig};
use crate::nn::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MIXSSLT1";
const MANIFEST: &str = "manifest.json";
const MODEL: &str = "model.bin";
const OPTIMIZER: &str = "optimizer.bin";

/// Named groups of tensors, e.g. one group per model component.
pub type TensorGroups = BTreeMap<String, Vec<Tensor>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    pub components: Vec<Component>,
    pub parameter_hashes: BTreeMap<Component, String>,
    pub has_optimizer: bool,
    /// Free-form training metadata (objective selection, optimizer settings).
    #[serde(default)]
    pub training: serde_json::Value,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    pub training: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub bundle: ModelBundle,
    pub manifest: CheckpointManifest,
    pub optimizer: Option<TensorGroups>,
}

fn encode_groups(groups: &TensorGroups) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(groups.len() as u32).to_le_bytes());
    for (name, tensors) in groups {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CheckpointCorrupt(format!("{} is truncated", self.what)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            .map_err(|_| Error::CheckpointCorrupt(format!("{} has an oversized dimension", self.what)))
    }
}

fn decode_groups(bytes: &[u8], what: &str) -> Result<TensorGroups> {
    let corrupt = |msg: &str| Error::CheckpointCorrupt(format!("{what}: {msg}"));
    if bytes.len() < MAGIC.len() + 32 {
        return Err(corrupt("file is truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if !body.starts_with(MAGIC) {
        return Err(corrupt("bad magic bytes"));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: MAGIC.len(), what };
    let mut groups = TensorGroups::new();
    for _ in 0..r.u32()? {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("group name is not utf-8"))?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt("tensor size overflows"))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("tensor size overflows"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Tensor::from_shape_vec(IxDyn(&shape), data).expect("length matches shape"));
        }
        groups.insert(name, tensors);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    Ok(groups)
}

pub fn write_tensor_file(path: &Path, groups: &TensorGroups) -> Result<()> {
    write_atomic(path, &encode_groups(groups))
}

pub fn read_tensor_file(path: &Path) -> Result<TensorGroups> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::CheckpointCorrupt(format!("missing {}", path.display())),
        _ => Error::Io(e),
    })?;
    decode_groups(&bytes, &path.display().to_string())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn model_groups(bundle: &ModelBundle) -> TensorGroups {
    bundle
        .components()
        .into_iter()
        .map(|c| {
            let net = bundle.component(c).expect("listed component");
            (c.name().to_string(), net.params().into_iter().cloned().collect())
        })
        .collect()
}

/// Writes a checkpoint directory, creating it if needed. Saving the same
/// state twice produces byte-identical files.
pub fn save_checkpoint(
    dir: &Path,
    bundle: &ModelBundle,
    meta: &CheckpointMeta,
    optimizer: Option<&TensorGroups>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        config: bundle.config.clone(),
        config_hash: bundle.config.hash(),
        epoch: meta.epoch,
        global_step: meta.global_step,
        seed: meta.seed,
        components: bundle.components(),
        parameter_hashes: bundle
            .components()
            .into_iter()
            .map(|c| (c, bundle.parameter_hash(c).expect("listed component")))
            .collect(),
        has_optimizer: optimizer.is_some(),
        training: meta.training.clone(),
    };
    write_tensor_file(&dir.join(MODEL), &model_groups(bundle))?;
    match optimizer {
        Some(state) => write_tensor_file(&dir.join(OPTIMIZER), state)?,
        None => {
            if dir.join(OPTIMIZER).exists() {
                fs::remove_file(dir.join(OPTIMIZER))?;
            }
        }
    }
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    if !dir.is_dir() {
        return Err(Error::CheckpointNotFound(dir.to_path_buf()));
    }
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|_| Error::CheckpointCorrupt(format!("missing {}", path.display())))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::CheckpointCorrupt(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.config_hash != manifest.config.hash() {
        return Err(Error::IncompatibleCheckpoint(
            "stored configuration does not match its recorded hash".into(),
        ));
    }
    Ok(manifest)
}

/// Loads a checkpoint. When `expected` is given, the stored encoder and
/// input contract must agree with it.
pub fn load_checkpoint(dir: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    if let Some(want) = expected {
        if !want.backbone_matches(&manifest.config) {
            return Err(Error::IncompatibleCheckpoint(format!(
                "checkpoint holds a {:?} encoder with {} features for {}x{}x{} images; \
                 expected {:?} with {} features for {}x{}x{}",
                manifest.config.encoder,
                manifest.config.feature_dim,
                manifest.config.channels,
                manifest.config.image_size.0,
                manifest.config.image_size.1,
                want.encoder,
                want.feature_dim,
                want.channels,
                want.image_size.0,
                want.image_size.1,
            )));
        }
    }
    let mut groups = read_tensor_file(&dir.join(MODEL))?;
    let mut bundle = build_models(&manifest.config, manifest.seed)
        .map_err(|e| Error::IncompatibleCheckpoint(format!("stored configuration is unusable: {e}")))?;
    if bundle.components() != manifest.components {
        return Err(Error::CheckpointCorrupt("manifest component list disagrees with its configuration".into()));
    }
    for c in bundle.components() {
        let tensors = groups
            .remove(c.name())
            .ok_or_else(|| Error::CheckpointCorrupt(format!("model.bin lacks the {c} component")))?;
        let net = bundle.component_mut(c).expect("listed component");
        let params = net.params_mut();
        if params.len() != tensors.len() || params.iter().zip(&tensors).any(|(p, t)| p.shape() != t.shape()) {
            return Err(Error::IncompatibleCheckpoint(format!("{c} parameter shapes do not match the architecture")));
        }
        for (p, t) in params.into_iter().zip(tensors) {
            *p = t;
        }
        if manifest.parameter_hashes.get(&c) != bundle.parameter_hash(c).as_ref() {
            return Err(Error::CheckpointCorrupt(format!("{c} parameters do not match the manifest hash")));
        }
    }
    if let Some(extra) = groups.keys().next() {
        return Err(Error::CheckpointCorrupt(format!("model.bin holds an unknown component {extra:?}")));
    }
    let optimizer = if manifest.has_optimizer {
        Some(read_tensor_file(&dir.join(OPTIMIZER))?)
    } else {
        None
    };
    Ok(Checkpoint { bundle, manifest, optimizer })
}

/// `<root>/epoch_<NNN>`
pub fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(format!("epoch_{epoch:03}"))
}
