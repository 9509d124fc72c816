//! Checkpoint directories: one `f8` `.npy` file per parameter array plus a
//! JSON manifest describing the architecture and every array's shape.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Architecture, UNetParams, LAYER_NAMES};
use crate::error::{Error, Result};
use crate::npy::{read_npy_file, write_npy_file, ArrayRecord, DType};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub architecture: Architecture,
    pub arrays: Vec<ArrayEntry>,
    /// Free-form training metadata (epoch, losses, seeds, ...).
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

fn expected_entries(arch: &Architecture) -> Vec<ArrayEntry> {
    arch.layer_specs()
        .iter()
        .zip(LAYER_NAMES)
        .flat_map(|(spec, layer)| {
            [
                ArrayEntry {
                    name: format!("{layer}.weight"),
                    file: format!("{layer}.weight.npy"),
                    shape: spec.weight_shape().to_vec(),
                },
                ArrayEntry {
                    name: format!("{layer}.bias"),
                    file: format!("{layer}.bias.npy"),
                    shape: vec![spec.out_channels],
                },
            ]
        })
        .collect()
}

pub fn save_checkpoint(
    params: &UNetParams,
    dir: impl AsRef<Path>,
    metadata: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    params.check_consistent()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries = expected_entries(&params.arch);
    for (entry, (_, values)) in entries.iter().zip(params.arrays()) {
        let rec = ArrayRecord::new(entry.shape.clone(), values.to_vec())?;
        write_npy_file(dir.join(&entry.file), &rec, DType::F8)?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        architecture: params.arch,
        arrays: entries,
        metadata,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::at(&path, Error::Checkpoint(format!("malformed manifest: {e}"))))
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<UNetParams> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let fail = |msg: String| Error::at(dir, Error::Checkpoint(msg));
    if manifest.format_version != FORMAT_VERSION {
        return Err(fail(format!(
            "unknown format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let arch = Architecture::new(manifest.architecture.widths).map_err(|e| fail(e.to_string()))?;
    let expected = expected_entries(&arch);
    if manifest.arrays.len() != expected.len() {
        return Err(fail(format!(
            "manifest lists {} arrays, architecture has {}",
            manifest.arrays.len(),
            expected.len()
        )));
    }

    let mut params = UNetParams::zeros(arch);
    let mut slots = params.arrays_mut();
    for (listed, want) in manifest.arrays.iter().zip(&expected) {
        if listed.name != want.name || listed.shape != want.shape {
            return Err(fail(format!(
                "array {} has shape {:?} in the manifest, architecture expects {} {:?}",
                listed.name, listed.shape, want.name, want.shape
            )));
        }
        let path = dir.join(&listed.file);
        let rec = read_npy_file(&path).map_err(|e| match e {
            Error::Io { .. } => fail(format!("missing array file {}", listed.file)),
            other => Error::at(&path, Error::Checkpoint(other.to_string())),
        })?;
        if rec.shape() != want.shape.as_slice() {
            return Err(fail(format!(
                "{} holds shape {:?}, expected {:?}",
                listed.file,
                rec.shape(),
                want.shape
            )));
        }
        if rec.data.iter().any(|v| !v.is_finite()) {
            return Err(fail(format!("{} contains non-finite values", listed.file)));
        }
        let (_, slot) = slots.next().expect("slot per expected entry");
        slot.copy_from_slice(&rec.data);
    }
    drop(slots);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> UNetParams {
        UNetParams::he_init(Architecture::new([2, 3, 4]).unwrap(), 11)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let params = small();
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), serde_json::json!(3));
        save_checkpoint(&params, dir.path(), meta).unwrap();
        assert_eq!(load_checkpoint(dir.path()).unwrap(), params);
        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.metadata["epoch"], 3);
        assert_eq!(manifest.arrays.len(), 22);
    }

    #[test]
    fn edited_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&small(), dir.path(), BTreeMap::new()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        manifest.arrays[2].shape = vec![3, 2, 3, 3];
        fs::write(&path, serde_json::to_string(&manifest).unwrap()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("checkpoint error"), "{err}");
    }

    #[test]
    fn missing_file_and_version() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&small(), dir.path(), BTreeMap::new()).unwrap();
        fs::remove_file(dir.path().join("head.bias.npy")).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("head.bias.npy"), "{err}");

        save_checkpoint(&small(), dir.path(), BTreeMap::new()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn swapped_array_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&small(), dir.path(), BTreeMap::new()).unwrap();
        fs::copy(
            dir.path().join("enc1.conv2.weight.npy"),
            dir.path().join("enc1.conv1.weight.npy"),
        )
        .unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
