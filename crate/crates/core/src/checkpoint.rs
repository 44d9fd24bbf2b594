//! Checkpoint directories: `manifest.json` (tensor table, config snapshot,
//! metadata) next to `weights.bin` (little-endian f32, row-major, tensors
//! concatenated at the declared byte offsets).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VistexError};
use crate::mstb::{Mstb, MstbConfig};
use crate::params::TensorSpec;
use crate::prompting::PromptSettings;
use crate::toyovlm::{OvlmConfig, ToyOvlm, Vocab};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Ovlm,
    Mstb,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub ovlm_config: OvlmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocab>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mstb_config: Option<MstbConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<PromptSettings>,
    pub tensors: Vec<TensorEntry>,
    /// Training provenance (epochs, seed, ...); never wall-clock data.
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn entries(specs: &[TensorSpec]) -> Vec<TensorEntry> {
    specs
        .iter()
        .map(|s| TensorEntry {
            name: s.name.clone(),
            shape: s.shape.clone(),
            dtype: "f32".into(),
            offset: s.offset * 4,
        })
        .collect()
}

fn write_checkpoint(dir: &Path, manifest: &CheckpointManifest, data: &[f64]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| VistexError::io(dir, e))?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, bytes).map_err(|e| VistexError::io(&wpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(manifest).map_err(|e| VistexError::json(&mpath, e))? + "\n";
    fs::write(&mpath, json).map_err(|e| VistexError::io(&mpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| VistexError::io(&mpath, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| VistexError::json(&mpath, e))?;
    if m.format_version != FORMAT_VERSION {
        return Err(VistexError::Corruption(format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

/// Reads weights after checking the manifest's tensor table against the
/// table the config implies.
fn read_weights(dir: &Path, manifest: &CheckpointManifest, expected: &[TensorSpec]) -> Result<Vec<f64>> {
    let want = entries(expected);
    if manifest.tensors.len() != want.len() {
        return Err(VistexError::Corruption(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.tensors.len(),
            want.len()
        )));
    }
    for (got, exp) in manifest.tensors.iter().zip(&want) {
        if got != exp {
            return Err(VistexError::Corruption(format!(
                "tensor {:?} {:?}@{} does not match expected {:?} {:?}@{}",
                got.name, got.shape, got.offset, exp.name, exp.shape, exp.offset
            )));
        }
    }
    let total: usize = expected.iter().map(TensorSpec::numel).sum();
    let wpath = dir.join(WEIGHTS_FILE);
    let bytes = fs::read(&wpath).map_err(|e| VistexError::io(&wpath, e))?;
    if bytes.len() != total * 4 {
        return Err(VistexError::Corruption(format!(
            "{} holds {} bytes, expected {}",
            wpath.display(),
            bytes.len(),
            total * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn save_ovlm(model: &ToyOvlm, metadata: BTreeMap<String, serde_json::Value>, dir: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Ovlm,
        ovlm_config: model.config.clone(),
        vocab: Some(model.vocab.clone()),
        mstb_config: None,
        prompt: None,
        tensors: entries(model.params.specs()),
        metadata,
    };
    write_checkpoint(dir, &manifest, model.params.data())
}

pub fn load_ovlm(dir: &Path) -> Result<(ToyOvlm, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    if m.kind != CheckpointKind::Ovlm {
        return Err(VistexError::Corruption(format!("{} is not a detector checkpoint", dir.display())));
    }
    let vocab = m
        .vocab
        .clone()
        .ok_or_else(|| VistexError::Corruption("detector checkpoint without vocabulary".into()))?;
    let expected = ToyOvlm::expected_specs(&m.ovlm_config)?;
    let data = read_weights(dir, &m, &expected)?;
    Ok((ToyOvlm::from_data(m.ovlm_config.clone(), vocab, data)?, m))
}

pub fn save_mstb(mstb: &Mstb, prompt: &PromptSettings, metadata: BTreeMap<String, serde_json::Value>, dir: &Path) -> Result<()> {
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        kind: CheckpointKind::Mstb,
        ovlm_config: mstb.ovlm.clone(),
        vocab: None,
        mstb_config: Some(mstb.config.clone()),
        prompt: Some(prompt.clone()),
        tensors: entries(mstb.params.specs()),
        metadata,
    };
    write_checkpoint(dir, &manifest, mstb.params.data())
}

pub fn load_mstb(dir: &Path) -> Result<(Mstb, PromptSettings, CheckpointManifest)> {
    let m = read_manifest(dir)?;
    if m.kind != CheckpointKind::Mstb {
        return Err(VistexError::Corruption(format!("{} is not an MSTB checkpoint", dir.display())));
    }
    let cfg = m
        .mstb_config
        .clone()
        .ok_or_else(|| VistexError::Corruption("MSTB checkpoint without its config".into()))?;
    let mut mstb = Mstb::zeroed(m.ovlm_config.clone(), cfg)?;
    let data = read_weights(dir, &m, mstb.params.specs())?;
    mstb.params.set_data(data);
    Ok((mstb, m.prompt.clone().unwrap_or_default(), m))
}

/// Metadata map from `(key, value)` pairs.
pub fn metadata<const N: usize>(pairs: [(&str, serde_json::Value); N]) -> BTreeMap<String, serde_json::Value> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}
